mod common;

use common::byte_model;
use kdlab::checkpoint::{load_model, save_model, save_quantized, Checkpoint, DType, MAGIC, VERSION};
use kdlab::quant::{quantize_model, QuantConfig};
use kdlab::toy::english_qa;

#[test]
fn full_precision_round_trip_is_exact_and_stable() {
    let dir = tempfile::tempdir().unwrap();
    let m = byte_model(2, 16, 2, 32, 3);
    let a = dir.path().join("a.ckpt");
    let b = dir.path().join("b.ckpt");
    save_model(&m, &a).unwrap();
    let back = load_model(&a).unwrap();
    assert_eq!(back.checksum(), m.checksum());
    assert_eq!(back.config, m.config);
    save_model(&back, &b).unwrap();
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
}

#[test]
fn header_layout() {
    let m = byte_model(1, 8, 2, 16, 1);
    let bytes = Checkpoint::from_model(&m, DType::F64).unwrap().to_bytes();
    assert_eq!(&bytes[..4], MAGIC);
    assert_eq!(u32::from_le_bytes(bytes[4..8].try_into().unwrap()), VERSION);
    let hlen = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let header: serde_json::Value = serde_json::from_slice(&bytes[12..12 + hlen]).unwrap();
    assert!(header.is_object());
    let payload: usize = m.param_count() * 8;
    assert_eq!(bytes.len(), 12 + hlen + payload);
}

#[test]
fn quantized_round_trip_preserves_codes_and_weights() {
    let dir = tempfile::tempdir().unwrap();
    let m = byte_model(1, 16, 2, 48, 5);
    let cfg = QuantConfig {
        group_size: 8,
        ..QuantConfig::default()
    };
    let qm = quantize_model(&m, &english_qa(6, 2), &cfg).unwrap();
    let p = dir.path().join("q.ckpt");
    save_quantized(&qm, &p).unwrap();
    let ck = Checkpoint::load(&p).unwrap();
    let layers = ck.quantized_layers().unwrap();
    assert_eq!(layers.len(), qm.layers.len());
    for ((n1, a), (n2, b)) in layers.iter().zip(&qm.layers) {
        assert_eq!(n1, n2);
        assert_eq!(a, b);
    }
    assert_eq!(ck.get("layers.0.mlp.w1").unwrap().payload.dtype(), DType::U4);
    let restored = ck.to_model().unwrap();
    assert_eq!(restored.checksum(), qm.model.checksum());
    // re-serialization is byte-identical
    let again = dir.path().join("q2.ckpt");
    ck.save(&again).unwrap();
    assert_eq!(std::fs::read(&p).unwrap(), std::fs::read(&again).unwrap());
    // and much smaller than the f64 file
    let full = dir.path().join("f.ckpt");
    save_model(&m, &full).unwrap();
    assert!(std::fs::metadata(&p).unwrap().len() < std::fs::metadata(&full).unwrap().len());
}

#[test]
fn f32_storage_rounds_once() {
    let dir = tempfile::tempdir().unwrap();
    let m = byte_model(1, 8, 2, 16, 9);
    let p = dir.path().join("f32.ckpt");
    Checkpoint::from_model(&m, DType::F32).unwrap().save(&p).unwrap();
    let back = load_model(&p).unwrap();
    let (mut a, mut b) = (Vec::new(), Vec::new());
    m.params.for_each(|_, t| a.extend_from_slice(t.data()));
    back.params.for_each(|_, t| b.extend_from_slice(t.data()));
    for (x, y) in a.iter().zip(&b) {
        assert_eq!(f64::from(*x as f32), *y);
    }
}

#[test]
fn corrupt_files_are_rejected_with_context() {
    let dir = tempfile::tempdir().unwrap();
    let m = byte_model(1, 8, 2, 16, 2);
    let p = dir.path().join("m.ckpt");
    save_model(&m, &p).unwrap();
    let bytes = std::fs::read(&p).unwrap();

    let cut = dir.path().join("cut.ckpt");
    std::fs::write(&cut, &bytes[..bytes.len() - 3]).unwrap();
    let e = load_model(&cut).unwrap_err().to_string();
    assert!(e.contains("truncated") && e.contains("cut.ckpt"), "{e}");

    let mut bad = bytes.clone();
    bad[0] = b'X';
    std::fs::write(&cut, &bad).unwrap();
    assert!(load_model(&cut).is_err());

    let mut bad = bytes.clone();
    bad[4] = 9;
    std::fs::write(&cut, &bad).unwrap();
    assert!(load_model(&cut).unwrap_err().to_string().contains("version"));

    assert!(load_model(dir.path().join("missing.ckpt")).is_err());
}

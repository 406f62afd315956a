//! Saves and reloads a model and its 4-bit quantized form; prints the
//! header manifest and file sizes.
//!
//!     cargo run --release --example checkpoint_roundtrip

use kdlab::checkpoint::{load_model, save_model, save_quantized, Checkpoint};
use kdlab::model::{ModelConfig, Transformer};
use kdlab::quant::{quantize_model, QuantConfig};
use kdlab::toy::english_qa;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let dir = std::env::temp_dir().join("kdlab_checkpoint_example");
    std::fs::create_dir_all(&dir)?;
    let model = Transformer::new(ModelConfig::student(), 7)?;

    let path = dir.join("model.ckpt");
    save_model(&model, &path)?;
    let back = load_model(&path)?;
    assert_eq!(back.checksum(), model.checksum());
    println!(
        "f64 checkpoint: {} bytes, checksum {}",
        file_len(&path),
        model.checksum()
    );

    let cfg = QuantConfig {
        group_size: 64,
        ..QuantConfig::default()
    };
    let qm = quantize_model(&model, &english_qa(16, 0), &cfg)?;
    let qpath = dir.join("model_w4.ckpt");
    save_quantized(&qm, &qpath)?;
    let ck = Checkpoint::load(&qpath)?;
    println!(
        "w4 checkpoint: {} bytes, {} quantized layers",
        file_len(&qpath),
        ck.quantized_layers()?.len()
    );
    for name in ["layers.0.attn.wq", "layers.0.attn.wq.scale", "token_embedding"] {
        if let Some(t) = ck.get(name) {
            println!(
                "  {name:<24} {:?} {:?} group {:?}",
                t.payload.dtype(),
                t.shape,
                t.group_size
            );
        }
    }
    Ok(())
}

fn file_len(p: &std::path::Path) -> u64 {
    std::fs::metadata(p).map(|m| m.len()).unwrap_or(0)
}

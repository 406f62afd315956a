mod common;

use common::{byte_model, rng};
use kdlab::numerics::{matmul, Tensor};
use kdlab::quant::{
    gptq_quantize_layer, quantize_model, quantized_forward, reconstruction_error, rtn_quantize_layer, QuantConfig,
    QuantizedLinear,
};
use kdlab::toy::english_qa;
use rand::Rng;

fn cfg(bits: u8, group_size: usize) -> QuantConfig {
    QuantConfig {
        bits,
        group_size,
        ..QuantConfig::default()
    }
}

/// Independent scalar-loop round-to-nearest, written from the formulas.
fn rtn_oracle(w: &Tensor, bits: u8, group: usize) -> Vec<f64> {
    let (rows, cols) = w.dims2();
    let q_max = f64::from((1u32 << bits) - 1);
    let mut out = vec![0.0; rows * cols];
    for r in 0..rows {
        let mut start = 0;
        while start < cols {
            let end = (start + group).min(cols);
            let vals = &w.row(r)[start..end];
            let lo = vals.iter().cloned().fold(0.0, f64::min);
            let hi = vals.iter().cloned().fold(0.0, f64::max);
            let (s, z) = if hi == lo {
                (1e-8, (q_max / 2.0).round())
            } else {
                let s = f64::from(((hi - lo) / q_max) as f32);
                (s, (-lo / ((hi - lo) / q_max)).round().clamp(0.0, q_max))
            };
            for c in start..end {
                let q = ((w.at(r, c) / s).round() + z).clamp(0.0, q_max);
                out[r * cols + c] = s * (q - z);
            }
            start = end;
        }
    }
    out
}

#[test]
fn rtn_matches_scalar_loop_oracle() {
    let mut r = rng(1);
    for (rows, cols, bits, group) in [(5, 13, 4, 4), (3, 32, 4, 32), (4, 9, 8, 0), (6, 7, 3, 3)] {
        let w = Tensor::randn(&[rows, cols], 1.0, &mut r);
        let q = rtn_quantize_layer(&w, &cfg(bits, group)).unwrap();
        let want = rtn_oracle(&w, bits, if group == 0 { cols } else { group });
        assert_eq!(q.dequantize().data(), want.as_slice(), "{rows}x{cols} b{bits} g{group}");
    }
}

#[test]
fn two_column_gptq_matches_exhaustive_search_with_diagonal_hessian() {
    let mut r = rng(2);
    for trial in 0..200 {
        let w = Tensor::new(&[1, 2], vec![r.random_range(-2.0..2.0), r.random_range(-2.0..2.0)]).unwrap();
        let (a, b) = (r.random_range(0.1..3.0), r.random_range(0.1..3.0));
        let x = Tensor::new(&[2, 2], vec![a, 0.0, 0.0, b]).unwrap();
        let c = cfg(4, 2);
        let (q, _) = gptq_quantize_layer(&w, &x, &c).unwrap();
        let (s, z) = (q.scales()[0], f64::from(q.zeros()[0]));
        let mut best = (f64::INFINITY, [0u8; 2]);
        for c0 in 0..16u8 {
            for c1 in 0..16u8 {
                let cand = Tensor::new(&[1, 2], vec![s * (f64::from(c0) - z), s * (f64::from(c1) - z)]).unwrap();
                let e = reconstruction_error(&w, &cand, &x).unwrap();
                if e < best.0 {
                    best = (e, [c0, c1]);
                }
            }
        }
        assert_eq!(q.codes(), best.1.to_vec(), "trial {trial}");
    }
}

fn correlated_inputs(cols: usize, n: usize, r: &mut impl Rng) -> Tensor {
    // X = A·Z with a random mixing matrix so the Hessian is far from diagonal
    let a = Tensor::randn(&[cols, cols], 1.0, r);
    let z = Tensor::randn(&[cols, n], 1.0, r);
    matmul(&a, &z).unwrap()
}

#[test]
fn gptq_beats_rtn_on_random_layers() {
    let mut r = rng(3);
    let mut wins = 0;
    for _ in 0..50 {
        let w = Tensor::randn(&[32, 32], 1.0, &mut r);
        let x = correlated_inputs(32, 128, &mut r);
        let (_, rep) = gptq_quantize_layer(&w, &x, &cfg(4, 32)).unwrap();
        let rtn = rtn_quantize_layer(&w, &cfg(4, 32)).unwrap();
        assert_eq!(rep.error_rtn, reconstruction_error(&w, &rtn.dequantize(), &x).unwrap());
        if rep.error_gptq <= rep.error_rtn {
            wins += 1;
        }
    }
    assert!(wins >= 48, "{wins}/50");
}

#[test]
fn quantized_forward_matches_dequantized_matmul() {
    let mut r = rng(4);
    let w = Tensor::randn(&[6, 10], 1.0, &mut r);
    let x = Tensor::randn(&[10, 3], 1.0, &mut r);
    let q = rtn_quantize_layer(&w, &cfg(4, 4)).unwrap();
    let got = quantized_forward(&q, &x).unwrap();
    for i in 0..6 {
        for j in 0..3 {
            let want: f64 = (0..10).map(|c| q.weight(i, c) * x.at(c, j)).sum();
            assert!((got.at(i, j) - want).abs() < 1e-12);
        }
    }
    assert!(quantized_forward(&q, &Tensor::zeros(&[9, 3])).is_err());
}

#[test]
fn from_parts_validates_and_round_trips_codes() {
    let codes: Vec<u8> = (0..15).map(|i| (i * 7 % 16) as u8).collect();
    let q = QuantizedLinear::from_parts(3, 5, 4, 5, &codes, vec![0.5, 0.25, 1.0], vec![8, 0, 15]).unwrap();
    assert_eq!(q.codes(), codes);
    assert_eq!(q.packed_codes().len(), 8);
    assert_eq!(q.weight(1, 2), 0.25 * f64::from(codes[7]));
    assert!(QuantizedLinear::from_parts(3, 5, 4, 5, &codes[..14], vec![0.5, 0.25, 1.0], vec![8, 0, 15]).is_err());
    assert!(QuantizedLinear::from_parts(3, 5, 4, 5, &[16; 15], vec![0.5, 0.25, 1.0], vec![8, 0, 15]).is_err());
}

#[test]
fn more_bits_mean_less_error() {
    let mut r = rng(5);
    let w = Tensor::randn(&[16, 32], 1.0, &mut r);
    let x = correlated_inputs(32, 64, &mut r);
    let e = |bits| gptq_quantize_layer(&w, &x, &cfg(bits, 32)).unwrap().1.error_gptq;
    let (e3, e4, e8) = (e(3), e(4), e(8));
    assert!(e8 < e4 && e4 < e3, "{e3} {e4} {e8}");
}

#[test]
fn packed_storage_accounts_for_metadata() {
    let w = Tensor::randn(&[64, 64], 1.0, &mut rng(6));
    let q = rtn_quantize_layer(&w, &cfg(4, 64)).unwrap();
    // 2048 code bytes + 64 f32 scales + 64 nibble zero-points
    assert_eq!(q.storage_bytes(), 2048 + 256 + 32);
    assert_eq!(q.full_precision_bytes(), 64 * 64 * 4);
}

#[test]
fn model_quantization_reports_every_linear_layer() {
    let m = byte_model(1, 16, 2, 48, 7);
    let calib = english_qa(8, 1);
    let qm = quantize_model(&m, &calib, &cfg(4, 16)).unwrap();
    let names: Vec<&str> = qm.report.layers.iter().map(|l| l.layer.as_str()).collect();
    assert_eq!(
        names,
        [
            "layers.0.attn.wq",
            "layers.0.attn.wk",
            "layers.0.attn.wv",
            "layers.0.attn.wo",
            "layers.0.mlp.w1",
            "layers.0.mlp.w2",
            "output_projection"
        ]
    );
    for (name, q) in &qm.layers {
        let mut stored = None;
        qm.model.params.for_each(|n, t| {
            if n == name {
                stored = Some(t.transpose());
            }
        });
        assert_eq!(stored.unwrap().data(), q.dequantize().data(), "{name}");
    }
    // embeddings untouched
    assert_eq!(qm.model.params.token_embedding, m.params.token_embedding);
    assert!(quantize_model(&m, &[], &cfg(4, 16)).is_err());
}

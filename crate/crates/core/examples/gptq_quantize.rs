//! GPTQ vs round-to-nearest on a single layer with correlated inputs, then
//! whole-model 4-bit quantization with its per-layer report.
//!
//!     cargo run --release --example gptq_quantize

use kdlab::model::{ModelConfig, Transformer};
use kdlab::numerics::{matmul, Tensor};
use kdlab::quant::{gptq_quantize_layer, quantize_model, QuantConfig};
use kdlab::toy::english_qa;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> kdlab::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let w = Tensor::randn(&[32, 32], 1.0, &mut rng);
    // mixed inputs: the Hessian X·Xᵀ is far from diagonal, where GPTQ's
    // error feedback pays off
    let mix = Tensor::randn(&[32, 32], 1.0, &mut rng);
    let x = matmul(&mix, &Tensor::randn(&[32, 256], 1.0, &mut rng))?;
    for bits in [3, 4, 8] {
        let cfg = QuantConfig {
            bits,
            group_size: 32,
            ..QuantConfig::default()
        };
        let (_, rep) = gptq_quantize_layer(&w, &x, &cfg)?;
        println!(
            "{bits}-bit  ‖WX − ŴX‖²: gptq {:>10.3}  rtn {:>10.3}",
            rep.error_gptq, rep.error_rtn
        );
    }

    let model = Transformer::new(ModelConfig::student(), 3)?;
    let cfg = QuantConfig {
        group_size: 64,
        ..QuantConfig::default()
    };
    let qm = quantize_model(&model, &english_qa(32, 0), &cfg)?;
    print!("{}", qm.report.to_csv());
    let (before, after) = (qm.report.bytes_before(), qm.report.bytes_after());
    println!(
        "linear weights: {before} -> {after} bytes ({:.2}x)",
        before as f64 / after as f64
    );
    Ok(())
}

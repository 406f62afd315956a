//! Checks tape gradients against central differences for the LM and KD losses.
//!
//!     cargo run --release --example autodiff_gradcheck

use kdlab::distill::kd_loss;
use kdlab::model::lm_loss;
use kdlab::numerics::{grad_check, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> kdlab::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let logits = Tensor::randn(&[4, 9], 2.0, &mut rng);
    let teacher = Tensor::randn(&[4, 9], 2.0, &mut rng);
    let targets = [3, 0, 8, 5];
    let mask = [true, true, false, true];

    let lm = grad_check(&logits, 1e-5, |g, x| lm_loss(g, x, &targets, &mask))?;
    println!("lm loss        worst relative error {lm:.2e}");
    for tau in [1.0, 2.0, 4.0] {
        let kd = grad_check(&logits, 1e-5, |g, s| kd_loss(g, &teacher, s, &mask, tau))?;
        println!("kd loss τ={tau:<3}  worst relative error {kd:.2e}");
    }
    Ok(())
}

//! GRPO on chain-of-thought arithmetic with a format-only reward: a model
//! fine-tuned on mostly malformed `<think>` traces is pushed towards always
//! emitting well-formed ones, drifting away from its reference as it does.
//!
//!     cargo run --release --example grpo_format_reward

use kdlab::distill::{train, DistillConfig, RunOptions};
use kdlab::evalmetrics::EvalSettings;
use kdlab::model::{ModelConfig, Transformer};
use kdlab::rlcot::{self, parse_trace, GrpoConfig, RewardSpec, RlPrompt};
use kdlab::toy::cot_arithmetic;

fn main() -> kdlab::Result<()> {
    let cfg = ModelConfig {
        n_layers: 1,
        d_model: 32,
        max_seq_len: 64,
        mlp_hidden: 128,
        ..ModelConfig::student()
    };
    let mut policy = Transformer::new(cfg, 1)?;
    // 70% of these traces are deliberately malformed
    let data = cot_arithmetic(300, 0.3, 1);
    let sft = DistillConfig {
        learning_rate: 1e-2,
        epochs: 4,
        ..DistillConfig::default()
    };
    let opts = RunOptions {
        eval: EvalSettings {
            max_new_tokens: 40,
            limit: Some(4),
        },
        ..RunOptions::default()
    };
    train(&mut policy, None, &sft, &data, &data[..20], &opts)?;

    let prompts: Vec<RlPrompt> = cot_arithmetic(32, 0.5, 7).iter().map(RlPrompt::from_record).collect();
    let grpo = GrpoConfig {
        steps: 100,
        max_new_tokens: 40,
        ..GrpoConfig::default()
    };
    let metrics = rlcot::train(&mut policy, &prompts, &RewardSpec::format_only(), &grpo)?;
    for chunk in metrics.rows.chunks(20) {
        let n = chunk.len() as f64;
        let reward = chunk.iter().map(|r| r.metrics.mean_reward).sum::<f64>() / n;
        let kl = chunk.iter().map(|r| r.metrics.kl_from_ref).sum::<f64>() / n;
        println!(
            "steps {:>3}-{:<3} reward {reward:.3}  kl {kl:.4}",
            chunk[0].step,
            chunk[chunk.len() - 1].step
        );
    }
    let sample = kdlab::evalmetrics::generate_completion(&policy, "add 3 and 4", 40)?;
    println!("greedy: {sample:?} well-formed: {}", parse_trace(&sample).well_formed);
    Ok(())
}

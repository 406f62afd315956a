//! Supervised fine-tuning of a tiny byte-level transformer on the toy
//! English instruction corpus, then greedy generation.
//!
//!     cargo run --release --example train_tiny_lm

use kdlab::distill::{train, DistillConfig, RunOptions};
use kdlab::evalmetrics::{generate_completion, EvalSettings};
use kdlab::model::{ModelConfig, Transformer};
use kdlab::toy::english_qa;

fn main() -> kdlab::Result<()> {
    let cfg = ModelConfig {
        n_layers: 2,
        d_model: 32,
        max_seq_len: 64,
        mlp_hidden: 128,
        ..ModelConfig::student()
    };
    let mut model = Transformer::new(cfg, 0)?;
    println!("{} parameters", model.param_count());

    let train_set = english_qa(400, 1);
    let eval_set = english_qa(50, 2);
    let sft = DistillConfig {
        learning_rate: 5e-3,
        epochs: 5,
        ..DistillConfig::default()
    };
    let opts = RunOptions {
        eval: EvalSettings {
            max_new_tokens: 32,
            limit: Some(10),
        },
        ..RunOptions::default()
    };
    let metrics = train(&mut model, None, &sft, &train_set, &eval_set, &opts)?;
    print!("{}", metrics.to_csv());

    for rec in &eval_set[..4] {
        let out = generate_completion(&model, &rec.prompt, 32)?;
        println!("{:<32} -> {out:?} (want {:?})", rec.prompt, rec.completion);
    }
    Ok(())
}

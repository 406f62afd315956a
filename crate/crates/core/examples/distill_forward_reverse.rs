//! Distils a small teacher into a smaller student three ways: SFT only,
//! forward-KL token-wise KD, and reverse-KL (policy-gradient) KD on top of
//! the SFT student.
//!
//!     cargo run --release --example distill_forward_reverse

use kdlab::distill::{train, Direction, DistillConfig, RunOptions, TrainMetrics};
use kdlab::evalmetrics::{generate_completion, EvalSettings};
use kdlab::model::{ModelConfig, Transformer};
use kdlab::toy::english_qa;

fn config(layers: usize, d: usize) -> ModelConfig {
    ModelConfig {
        n_layers: layers,
        d_model: d,
        max_seq_len: 64,
        mlp_hidden: 4 * d,
        ..ModelConfig::student()
    }
}

fn report(name: &str, metrics: &TrainMetrics) {
    let last = metrics.last().expect("epochs > 0");
    println!(
        "{name:<12} eval loss {:.3}  rouge-l {:.3}",
        last.eval_loss, last.rouge_l
    );
}

fn main() -> kdlab::Result<()> {
    let train_set = english_qa(300, 1);
    let eval_set = english_qa(40, 2);
    let opts = RunOptions {
        eval: EvalSettings {
            max_new_tokens: 32,
            limit: Some(10),
        },
        ..RunOptions::default()
    };

    let mut teacher = Transformer::new(config(2, 48), 0)?;
    let t_cfg = DistillConfig {
        learning_rate: 5e-3,
        epochs: 6,
        ..DistillConfig::default()
    };
    let t = train(&mut teacher, None, &t_cfg, &train_set, &eval_set, &opts)?;
    report("teacher", &t);

    let base = DistillConfig {
        learning_rate: 5e-3,
        epochs: 3,
        ..DistillConfig::default()
    };
    let fresh = || Transformer::new(config(1, 24), 1);
    let mut sft = fresh()?;
    report("sft", &train(&mut sft, None, &base, &train_set, &eval_set, &opts)?);
    let mut forward = fresh()?;
    report(
        "forward kd",
        &train(&mut forward, Some(&teacher), &base, &train_set, &eval_set, &opts)?,
    );

    // Reverse KL continues from the SFT student. The objective sums
    // log q − log p over the whole completion, so with a weak teacher the
    // cheapest way to lower it is to answer briefly: the estimate falls
    // while the likelihood of the reference answers gets worse.
    let reverse_cfg = DistillConfig {
        direction: Direction::Reverse,
        learning_rate: 1e-3,
        epochs: 2,
        samples_per_prompt: 4,
        max_new_tokens: 24,
        ..base.clone()
    };
    let mut reverse = sft.clone();
    let metrics = train(&mut reverse, Some(&teacher), &reverse_cfg, &train_set, &eval_set, &opts)?;
    for row in &metrics.rows {
        println!(
            "sft + rkl {}  reverse-kl estimate {:.2}  eval loss {:.3}  rouge-l {:.3}",
            row.epoch, row.train_loss, row.eval_loss, row.rouge_l
        );
    }
    let probe = &eval_set[0];
    for (name, model) in [("sft", &sft), ("sft + rkl", &reverse)] {
        let out = generate_completion(model, &probe.prompt, 32)?;
        println!("{name:<10} {:?} -> {out:?}", probe.prompt);
    }
    Ok(())
}

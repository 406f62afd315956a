//! Learning-rate sweep over {5e-4, 1e-4, 5e-5}: one short SFT run per rate,
//! per-run metrics files and a summary ranked by final eval loss.
//!
//!     cargo run --release --example lr_sweep

use kdlab::cli::{sweep_lr, SweepConfig, SWEEP_SUMMARY_FILE};
use kdlab::data::save_dataset;
use kdlab::distill::{DistillConfig, DistillRunConfig};
use kdlab::evalmetrics::EvalSettings;
use kdlab::model::ModelConfig;
use kdlab::toy::english_qa;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let dir = std::env::temp_dir().join("kdlab_lr_sweep");
    std::fs::create_dir_all(&dir)?;
    let (train, eval) = (dir.join("train.jsonl"), dir.join("eval.jsonl"));
    save_dataset(&train, &english_qa(200, 1))?;
    save_dataset(&eval, &english_qa(40, 2))?;

    let cfg = SweepConfig {
        run: DistillRunConfig {
            dataset: train,
            eval_dataset: Some(eval),
            teacher_ckpt: None,
            student_ckpt: None,
            student_model: ModelConfig {
                n_layers: 1,
                d_model: 16,
                max_seq_len: 64,
                mlp_hidden: 64,
                ..ModelConfig::student()
            },
            out_dir: dir.join("runs"),
            distill: DistillConfig::default(),
            max_len: None,
            eval: EvalSettings {
                max_new_tokens: 16,
                limit: Some(10),
            },
            record_wall_time: false,
        },
        learning_rates: vec![5e-4, 1e-4, 5e-5],
    };
    sweep_lr(&cfg, true)?;
    let summary = std::fs::read_to_string(cfg.run.out_dir.join(SWEEP_SUMMARY_FILE))?;
    print!("{summary}");
    println!("per-run files under {}", cfg.run.out_dir.display());
    Ok(())
}

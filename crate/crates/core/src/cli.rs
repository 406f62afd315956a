//! Command-line front end.
//!
//! ```text
//! kdlab <command> [--config FILE.json] [--dotted.key VALUE ...]
//! ```
//!
//! The config file is read first; each `--key value` override then replaces
//! one (possibly nested) field. Override values are parsed as JSON when
//! possible (`--distill.alpha 0.5`, `--eval.limit null`) and taken as strings
//! otherwise (`--out_dir runs/a`). Unknown keys are rejected.
//!
//! Exit codes: 0 success, 1 runtime failure, 2 usage or configuration error.
//! Log verbosity follows `KDLAB_LOG` (e.g. `KDLAB_LOG=debug`).

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::checkpoint;
use crate::data::{load_dataset, save_dataset};
use crate::distill::{self, DistillRunConfig, TrainMetrics, METRICS_FILE};
use crate::error::{Error, Result};
use crate::evalmetrics::{self, EvalSettings};
use crate::quant::{self, QuantConfig};
use crate::rlcot::{self, GrpoRunConfig};
use crate::toy;

pub const USAGE: &str = "\
usage: kdlab <command> [--config FILE.json] [--key VALUE ...]

commands:
  sft        supervised fine-tuning on dataset completions
  distill    knowledge distillation from a teacher checkpoint
  grpo       GRPO on chain-of-thought prompts
  quantize   GPTQ 4-bit (or n-bit) post-training quantization
  eval       ROUGE-L / perplexity report for a checkpoint
  sweep-lr   one distillation run per learning rate
  toy-data   write the built-in toy corpora as dataset files

overrides use dotted keys, e.g. --distill.learning_rate 1e-4
set KDLAB_LOG=debug for verbose logs";

const COMMANDS: [&str; 7] = ["sft", "distill", "grpo", "quantize", "eval", "sweep-lr", "toy-data"];

/// Parsed command line.
#[derive(Clone, Debug, PartialEq)]
pub struct Invocation {
    pub command: String,
    pub config: Value,
}

fn usage_error(msg: impl Into<String>) -> Error {
    Error::Config(msg.into())
}

/// Splits argv (without the program name) into a command and merged config.
pub fn parse_args(args: &[String]) -> Result<Invocation> {
    let Some(command) = args.first() else {
        return Err(usage_error("missing command"));
    };
    if !COMMANDS.contains(&command.as_str()) {
        return Err(usage_error(format!("unknown command `{command}`")));
    }
    let mut config = Value::Object(Map::new());
    let mut overrides = Vec::new();
    let mut i = 1;
    while i < args.len() {
        let flag = &args[i];
        let key = flag
            .strip_prefix("--")
            .filter(|k| !k.is_empty())
            .ok_or_else(|| usage_error(format!("expected --key, found `{flag}`")))?;
        let value = args
            .get(i + 1)
            .ok_or_else(|| usage_error(format!("flag --{key} needs a value")))?;
        if key == "config" {
            let path = Path::new(value);
            let text = std::fs::read_to_string(path)
                .map_err(|e| usage_error(format!("cannot read config {}: {e}", path.display())))?;
            config = serde_json::from_str(&text).map_err(|e| usage_error(format!("config {}: {e}", path.display())))?;
            if !config.is_object() {
                return Err(usage_error("config file must hold a JSON object"));
            }
        } else {
            overrides.push((key.to_string(), value.clone()));
        }
        i += 2;
    }
    for (key, raw) in overrides {
        let value = serde_json::from_str(&raw).unwrap_or(Value::String(raw));
        set_dotted(&mut config, &key, value)?;
    }
    Ok(Invocation {
        command: command.clone(),
        config,
    })
}

fn set_dotted(root: &mut Value, key: &str, value: Value) -> Result<()> {
    let parts: Vec<&str> = key.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(usage_error(format!("malformed override key `{key}`")));
    }
    let mut cur = root;
    for part in &parts[..parts.len() - 1] {
        let obj = cur
            .as_object_mut()
            .ok_or_else(|| usage_error(format!("override `{key}` descends into a non-object")))?;
        cur = obj.entry(part.to_string()).or_insert_with(|| Value::Object(Map::new()));
    }
    let obj = cur
        .as_object_mut()
        .ok_or_else(|| usage_error(format!("override `{key}` descends into a non-object")))?;
    obj.insert(parts[parts.len() - 1].to_string(), value);
    Ok(())
}

fn decode<T: DeserializeOwned>(command: &str, v: &Value) -> Result<T> {
    serde_json::from_value(v.clone()).map_err(|e| usage_error(format!("{command} config: {e}")))
}

fn require_file(field: &str, path: &Path) -> Result<()> {
    if path.is_file() {
        Ok(())
    } else {
        Err(usage_error(format!("{field}: no such file {}", path.display())))
    }
}

fn check_run_paths(run: &DistillRunConfig, needs_teacher: bool) -> Result<()> {
    require_file("dataset", &run.dataset)?;
    if let Some(p) = &run.eval_dataset {
        require_file("eval_dataset", p)?;
    }
    if let Some(p) = &run.student_ckpt {
        require_file("student_ckpt", p)?;
    }
    match &run.teacher_ckpt {
        Some(p) if needs_teacher => require_file("teacher_ckpt", p),
        None if needs_teacher => Err(usage_error("distill config: missing field `teacher_ckpt`")),
        _ => Ok(()),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepConfig {
    pub run: DistillRunConfig,
    pub learning_rates: Vec<f64>,
}

/// One line of the sweep summary.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub learning_rate: f64,
    pub final_train_loss: f64,
    pub final_eval_loss: f64,
    pub final_rouge_l: f64,
}

pub const SWEEP_SUMMARY_FILE: &str = "sweep_summary.csv";

/// Directory / file tag for a learning rate, e.g. `5e-4`.
pub fn lr_tag(lr: f64) -> String {
    format!("{lr:e}")
}

fn summary_csv(rows: &[SweepRow]) -> String {
    // rank 1 = lowest final eval loss; ties keep input order
    let mut order: Vec<usize> = (0..rows.len()).collect();
    order.sort_by(|&a, &b| rows[a].final_eval_loss.total_cmp(&rows[b].final_eval_loss));
    let mut rank = vec![0; rows.len()];
    for (r, &i) in order.iter().enumerate() {
        rank[i] = r + 1;
    }
    let mut out = String::from("learning_rate,final_train_loss,final_eval_loss,final_rouge_l,rank_by_eval_loss\n");
    for (row, rank) in rows.iter().zip(rank) {
        let _ = writeln!(
            out,
            "{},{},{},{},{}",
            row.learning_rate, row.final_train_loss, row.final_eval_loss, row.final_rouge_l, rank
        );
    }
    out
}

/// One distillation run per learning rate, sharing data and seed.
///
/// Run `k` writes into `out_dir/lr_<tag>/`, its metrics are also copied to
/// `out_dir/metrics_lr_<tag>.csv`, and `sweep_summary.csv` is rewritten after
/// every completed run so partial results survive a failure.
pub fn sweep_lr(cfg: &SweepConfig, sft: bool) -> Result<Vec<SweepRow>> {
    if cfg.learning_rates.is_empty() {
        return Err(usage_error("sweep-lr needs at least one learning rate"));
    }
    let out = &cfg.run.out_dir;
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let summary = out.join(SWEEP_SUMMARY_FILE);
    let mut rows = Vec::new();
    for &lr in &cfg.learning_rates {
        let mut run = cfg.run.clone();
        run.distill.learning_rate = lr;
        run.out_dir = out.join(format!("lr_{}", lr_tag(lr)));
        let metrics: TrainMetrics = distill::run_distillation(&run, sft)?;
        let src = run.out_dir.join(METRICS_FILE);
        let dst = out.join(format!("metrics_lr_{}.csv", lr_tag(lr)));
        std::fs::copy(&src, &dst).map_err(|e| Error::io(&dst, e))?;
        let last = metrics.last();
        rows.push(SweepRow {
            learning_rate: lr,
            final_train_loss: last.map_or(f64::NAN, |r| r.train_loss),
            final_eval_loss: last.map_or(f64::NAN, |r| r.eval_loss),
            final_rouge_l: last.map_or(f64::NAN, |r| r.rouge_l),
        });
        std::fs::write(&summary, summary_csv(&rows)).map_err(|e| Error::io(&summary, e))?;
    }
    Ok(rows)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QuantRunConfig {
    pub ckpt_in: PathBuf,
    pub calib_dataset: PathBuf,
    pub ckpt_out: PathBuf,
    /// Per-layer CSV report.
    pub report: PathBuf,
    /// When set, eval loss before/after is appended to the log and written to
    /// `summary`.
    #[serde(default)]
    pub eval_dataset: Option<PathBuf>,
    #[serde(default)]
    pub summary: Option<PathBuf>,
    #[serde(default)]
    pub quant: QuantConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QuantSummary {
    pub bits: u8,
    pub group_size: usize,
    pub bytes_before: usize,
    pub bytes_after: usize,
    pub eval_loss_before: Option<f64>,
    pub eval_loss_after: Option<f64>,
}

/// Quantizes a checkpoint file; the input file is only read.
pub fn quantize_checkpoint(cfg: &QuantRunConfig) -> Result<QuantSummary> {
    let model = checkpoint::load_model(&cfg.ckpt_in)?;
    let calib = load_dataset(&cfg.calib_dataset)?;
    let qm = quant::quantize_model(&model, &calib, &cfg.quant)?;
    checkpoint::save_quantized(&qm, &cfg.ckpt_out)?;
    std::fs::write(&cfg.report, qm.report.to_csv()).map_err(|e| Error::io(&cfg.report, e))?;
    let (before, after) = match &cfg.eval_dataset {
        Some(p) => {
            let records = load_dataset(p)?;
            let b = evalmetrics::mean_loss(&model, &records)?;
            let a = evalmetrics::mean_loss(&qm.model, &records)?;
            log::info!("eval loss {b:.5} -> {a:.5} after quantization");
            (Some(b), Some(a))
        }
        None => (None, None),
    };
    let summary = QuantSummary {
        bits: cfg.quant.bits,
        group_size: cfg.quant.group_size,
        bytes_before: qm.report.bytes_before(),
        bytes_after: qm.report.bytes_after(),
        eval_loss_before: before,
        eval_loss_after: after,
    };
    if let Some(p) = &cfg.summary {
        let text = serde_json::to_string_pretty(&summary)? + "\n";
        std::fs::write(p, text).map_err(|e| Error::io(p, e))?;
    }
    Ok(summary)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalRunConfig {
    pub ckpt: PathBuf,
    pub dataset: PathBuf,
    pub out_dir: PathBuf,
    /// Teacher checkpoint for the retention aggregate.
    #[serde(default)]
    pub teacher_ckpt: Option<PathBuf>,
    #[serde(default)]
    pub eval: EvalSettings,
}

pub const EVAL_JSONL: &str = "eval.jsonl";
pub const EVAL_CSV: &str = "eval.csv";

pub fn run_eval(cfg: &EvalRunConfig) -> Result<evalmetrics::EvalReport> {
    let model = checkpoint::load_model(&cfg.ckpt)?;
    let records = load_dataset(&cfg.dataset)?;
    let teacher_scores = match &cfg.teacher_ckpt {
        Some(p) => {
            let t = checkpoint::load_model(p)?;
            Some(
                evalmetrics::score_generations(&t, &records, &cfg.eval)?
                    .iter()
                    .map(|s| s.rouge_l.f)
                    .collect::<Vec<_>>(),
            )
        }
        None => None,
    };
    let report = evalmetrics::evaluate(&model, &records, &cfg.eval, teacher_scores.as_deref())?;
    std::fs::create_dir_all(&cfg.out_dir).map_err(|e| Error::io(&cfg.out_dir, e))?;
    report.write(&cfg.out_dir.join(EVAL_JSONL), &cfg.out_dir.join(EVAL_CSV))?;
    Ok(report)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ToyCorpus {
    English,
    Spanish,
    Code,
    Cot,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ToyDataConfig {
    pub corpus: ToyCorpus,
    pub out: PathBuf,
    #[serde(default = "default_records")]
    pub records: usize,
    #[serde(default)]
    pub seed: u64,
    /// Fraction of well-formed traces in the `cot` corpus.
    #[serde(default = "default_rate")]
    pub well_formed_rate: f64,
}

fn default_records() -> usize {
    256
}

fn default_rate() -> f64 {
    0.5
}

pub fn write_toy_data(cfg: &ToyDataConfig) -> Result<usize> {
    let records = match cfg.corpus {
        ToyCorpus::English => toy::english_qa(cfg.records, cfg.seed),
        ToyCorpus::Spanish => toy::spanish_qa(cfg.records, cfg.seed),
        ToyCorpus::Code => toy::code_snippets(cfg.records, cfg.seed),
        ToyCorpus::Cot => toy::cot_arithmetic(cfg.records, cfg.well_formed_rate, cfg.seed),
    };
    save_dataset(&cfg.out, &records)?;
    Ok(records.len())
}

/// Executes a parsed invocation.
pub fn execute(inv: &Invocation) -> Result<()> {
    let cmd = inv.command.as_str();
    match cmd {
        "sft" | "distill" => {
            let run: DistillRunConfig = decode(cmd, &inv.config)?;
            let sft = cmd == "sft";
            check_run_paths(&run, !sft)?;
            let m = distill::run_distillation(&run, sft)?;
            if let Some(last) = m.last() {
                log::info!("final eval loss {:.5}, rouge-l {:.4}", last.eval_loss, last.rouge_l);
            }
        }
        "sweep-lr" => {
            let sweep: SweepConfig = decode(cmd, &inv.config)?;
            let sft = sweep.run.teacher_ckpt.is_none();
            check_run_paths(&sweep.run, !sft)?;
            sweep_lr(&sweep, sft)?;
        }
        "grpo" => {
            let run: GrpoRunConfig = decode(cmd, &inv.config)?;
            require_file("init_ckpt", &run.init_ckpt)?;
            require_file("prompts", &run.prompts)?;
            rlcot::run_grpo(&run)?;
        }
        "quantize" => {
            let q: QuantRunConfig = decode(cmd, &inv.config)?;
            require_file("ckpt_in", &q.ckpt_in)?;
            require_file("calib_dataset", &q.calib_dataset)?;
            if let Some(p) = &q.eval_dataset {
                require_file("eval_dataset", p)?;
            }
            q.quant.validate()?;
            quantize_checkpoint(&q)?;
        }
        "eval" => {
            let e: EvalRunConfig = decode(cmd, &inv.config)?;
            require_file("ckpt", &e.ckpt)?;
            require_file("dataset", &e.dataset)?;
            if let Some(p) = &e.teacher_ckpt {
                require_file("teacher_ckpt", p)?;
            }
            run_eval(&e)?;
        }
        "toy-data" => {
            let t: ToyDataConfig = decode(cmd, &inv.config)?;
            write_toy_data(&t)?;
        }
        other => return Err(usage_error(format!("unknown command `{other}`"))),
    }
    Ok(())
}

/// Exit status for an error: configuration problems are usage errors.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config(_) | Error::Json(_) => 2,
        _ => 1,
    }
}

/// Entry point; `argv[0]` is the program name.
pub fn run(argv: &[String]) -> i32 {
    let _ = env_logger::Builder::from_env(env_logger::Env::new().filter_or("KDLAB_LOG", "info"))
        .format_timestamp(None)
        .try_init();
    let args = argv.get(1..).unwrap_or(&[]);
    if args.is_empty() || matches!(args[0].as_str(), "-h" | "--help" | "help") {
        eprintln!("{USAGE}");
        return if args.is_empty() { 2 } else { 0 };
    }
    let result = parse_args(args).and_then(|inv| execute(&inv));
    match result {
        Ok(()) => 0,
        Err(e) => {
            let code = exit_code(&e);
            eprintln!("error: {e}");
            if code == 2 {
                eprintln!("\n{USAGE}");
            }
            code
        }
    }
}

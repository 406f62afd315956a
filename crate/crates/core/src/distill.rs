//! Knowledge distillation: token-wise forward-KL KD with a hard-label mix,
//! on-policy reverse-KL distillation, and the plain SFT baseline.
//!
//! The forward objective per batch is
//! `α · mean_t KL(p_T^τ ‖ p_S^τ) + (1 − α) · mean_t NLL`, averaged over
//! completion tokens. The classic τ² gradient rescaling is deliberately not
//! applied. Teacher logits enter the graph as constants.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint;
use crate::data::{batchify, load_dataset, Batches, PromptRecord, TokenId, Tokenizer, EOS};
use crate::error::{Error, Result};
use crate::evalmetrics::{self, EvalSettings};
use crate::model::{sample, GenerationSettings, ModelConfig, Policy, Trainable, Transformer};
use crate::numerics::{log_softmax_rows, softmax_rows, Graph, Tensor, Var};
use crate::optim::{Optimizer, OptimizerConfig};
use crate::seed::{derive_indexed, derive_seed};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Direction {
    #[default]
    Forward,
    Reverse,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DistillConfig {
    pub temperature: f64,
    /// Weight of the KD term; `1 − alpha` goes to the hard-label loss.
    pub alpha: f64,
    pub learning_rate: f64,
    pub epochs: usize,
    pub direction: Direction,
    pub batch_size: usize,
    pub seed: u64,
    pub optimizer: OptimizerConfig,
    /// Reverse direction: completions sampled per prompt.
    pub samples_per_prompt: usize,
    /// Reverse direction: completion length cap and sampling temperature.
    pub max_new_tokens: usize,
    pub sample_temperature: f64,
}

impl Default for DistillConfig {
    fn default() -> Self {
        DistillConfig {
            temperature: 2.0,
            alpha: 0.9,
            learning_rate: 5e-4,
            epochs: 5,
            direction: Direction::Forward,
            batch_size: 8,
            seed: 0,
            optimizer: OptimizerConfig::default(),
            samples_per_prompt: 4,
            max_new_tokens: 32,
            sample_temperature: 1.0,
        }
    }
}

impl DistillConfig {
    pub fn validate(&self) -> Result<()> {
        check_tau(self.temperature)?;
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::Config(format!("alpha must be in [0, 1], got {}", self.alpha)));
        }
        if !(self.learning_rate >= 0.0) || !self.learning_rate.is_finite() {
            return Err(Error::Config(format!(
                "learning_rate must be >= 0, got {}",
                self.learning_rate
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        if self.direction == Direction::Reverse && self.samples_per_prompt < 2 {
            return Err(Error::Config(
                "reverse distillation needs samples_per_prompt >= 2 for its baseline".into(),
            ));
        }
        Ok(())
    }
}

fn check_tau(tau: f64) -> Result<()> {
    if !(tau > 0.0) || !tau.is_finite() {
        return Err(Error::Config(format!("temperature must be > 0, got {tau}")));
    }
    Ok(())
}

/// One completed epoch.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainRow {
    pub epoch: usize,
    pub train_loss: f64,
    pub eval_loss: f64,
    pub rouge_l: f64,
    pub wall_time_s: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainMetrics {
    pub rows: Vec<TrainRow>,
}

pub const METRICS_HEADER: &str = "epoch,train_loss,eval_loss,rouge_l,wall_time_s";

impl TrainMetrics {
    pub fn to_csv(&self) -> String {
        let mut out = format!("{METRICS_HEADER}\n");
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{},{},{},{},{}",
                r.epoch, r.train_loss, r.eval_loss, r.rouge_l, r.wall_time_s
            );
        }
        out
    }

    pub fn last(&self) -> Option<&TrainRow> {
        self.rows.last()
    }
}

/// The three terms of `KL = soft cross-entropy − teacher entropy`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct KdTerms {
    pub kl: f64,
    pub soft_cross_entropy: f64,
    pub teacher_entropy: f64,
}

/// Per-row weights `1/count` on kept positions.
fn mask_weights(mask: &[bool]) -> Result<Vec<f64>> {
    let count = mask.iter().filter(|&&m| m).count();
    if count == 0 {
        return Err(Error::Contract("distillation loss over an all-masked sequence".into()));
    }
    let w = 1.0 / count as f64;
    Ok(mask.iter().map(|&m| if m { w } else { 0.0 }).collect())
}

/// Softened teacher probabilities and log-probabilities; `0·log 0` terms are
/// neutralized by zeroing non-finite logs where the probability is 0.
fn teacher_dist(teacher: &Tensor, tau: f64) -> (Tensor, Tensor) {
    // same scaling as the student's graph path, so equal logits give
    // bitwise-equal distributions
    let inv = 1.0 / tau;
    let mut scaled = teacher.clone();
    scaled.data_mut().iter_mut().for_each(|v| *v *= inv);
    let p = softmax_rows(&scaled);
    let mut lp = log_softmax_rows(&scaled);
    for (l, &pi) in lp.data_mut().iter_mut().zip(p.data()) {
        if pi == 0.0 || !l.is_finite() {
            *l = 0.0;
        }
    }
    (p, lp)
}

#[derive(Clone, Copy, PartialEq)]
enum KdForm {
    /// `Σ w · p_T · (log p_T − log p_S)`
    Kl,
    /// `−Σ w · p_T · log p_S`, fused
    SoftCe,
    /// Fused soft cross-entropy minus the (constant) teacher entropy: equal
    /// to `Kl` in value, with a gradient that vanishes exactly at `p_S = p_T`.
    FusedKl,
}

fn kd_weighted(
    g: &mut Graph,
    teacher: &Tensor,
    student: Var,
    row_weights: &[f64],
    tau: f64,
    form: KdForm,
) -> Result<Var> {
    check_tau(tau)?;
    if teacher.shape() != g.shape(student) {
        return Err(Error::shape("kd_loss", teacher.shape(), g.shape(student)));
    }
    let (rows, vocab) = teacher.dims2();
    if row_weights.len() != rows {
        return Err(Error::shape("kd_loss mask", &[rows], &[row_weights.len()]));
    }
    let (p, lp) = teacher_dist(teacher, tau);
    let soft = g.scale(student, 1.0 / tau);
    match form {
        KdForm::Kl => {
            let mut coef = p.into_data();
            for (r, chunk) in coef.chunks_mut(vocab).enumerate() {
                chunk.iter_mut().for_each(|c| *c *= row_weights[r]);
            }
            let ls = g.log_softmax_rows(soft);
            let neg = g.scale(ls, -1.0);
            let diff = g.add_const(neg, lp.data())?;
            let terms = g.mul_const(diff, &coef)?;
            Ok(g.sum(terms))
        }
        KdForm::SoftCe => g.soft_cross_entropy(soft, p.data(), row_weights),
        KdForm::FusedKl => {
            let entropy: f64 = (0..rows)
                .filter(|&r| row_weights[r] != 0.0)
                .map(|r| {
                    let h: f64 = p.row(r).iter().zip(lp.row(r)).map(|(a, b)| -a * b).sum();
                    row_weights[r] * h
                })
                .sum();
            let ce = g.soft_cross_entropy(soft, p.data(), row_weights)?;
            Ok(g.add_scalar(ce, -entropy))
        }
    }
}

/// Mean over kept positions of `KL(p_T^τ ‖ p_S^τ)`, summed over the full
/// vocabulary. Gradients reach `student_logits` only.
pub fn kd_loss(g: &mut Graph, teacher_logits: &Tensor, student_logits: Var, mask: &[bool], tau: f64) -> Result<Var> {
    check_tau(tau)?;
    let w = mask_weights(mask)?;
    kd_weighted(g, teacher_logits, student_logits, &w, tau, KdForm::Kl)
}

/// Mean over kept positions of `−Σ_v p_T^τ(v) log p_S^τ(v)`.
pub fn soft_cross_entropy(
    g: &mut Graph,
    teacher_logits: &Tensor,
    student_logits: Var,
    mask: &[bool],
    tau: f64,
) -> Result<Var> {
    check_tau(tau)?;
    let w = mask_weights(mask)?;
    kd_weighted(g, teacher_logits, student_logits, &w, tau, KdForm::SoftCe)
}

/// Evaluates KL, soft cross-entropy and teacher entropy independently.
pub fn soft_ce_decomposition(
    teacher_logits: &Tensor,
    student_logits: &Tensor,
    mask: &[bool],
    tau: f64,
) -> Result<KdTerms> {
    check_tau(tau)?;
    if teacher_logits.shape() != student_logits.shape() {
        return Err(Error::shape(
            "soft_ce_decomposition",
            teacher_logits.shape(),
            student_logits.shape(),
        ));
    }
    let (rows, _) = teacher_logits.dims2();
    if mask.len() != rows {
        return Err(Error::shape("soft_ce_decomposition mask", &[rows], &[mask.len()]));
    }
    let w = mask_weights(mask)?;
    let (p, lp) = teacher_dist(teacher_logits, tau);
    let mut s = student_logits.clone();
    s.data_mut().iter_mut().for_each(|v| *v /= tau);
    let ls = log_softmax_rows(&s);
    let mut terms = KdTerms {
        kl: 0.0,
        soft_cross_entropy: 0.0,
        teacher_entropy: 0.0,
    };
    for (r, &wr) in w.iter().enumerate() {
        if wr == 0.0 {
            continue;
        }
        let (mut kl, mut ce, mut h) = (0.0, 0.0, 0.0);
        for ((&pi, &lpi), &lsi) in p.row(r).iter().zip(lp.row(r)).zip(ls.row(r)) {
            kl += pi * (lpi - lsi);
            ce -= pi * lsi;
            h -= pi * lpi;
        }
        terms.kl += wr * kl;
        terms.soft_cross_entropy += wr * ce;
        terms.teacher_entropy += wr * h;
    }
    Ok(terms)
}

/// Replaces each prompt's completion with the teacher's generation.
///
/// Prompt `i` is sampled with seed `derive_indexed(settings.seed,
/// "teacher_generate", i)`. Generations that stop without EOS keep their text
/// and are flagged with meta `truncated = "true"`.
pub fn teacher_generate(
    teacher: &Transformer,
    prompts: &[PromptRecord],
    settings: &GenerationSettings,
) -> Result<Vec<PromptRecord>> {
    let tok = Tokenizer::new();
    prompts
        .iter()
        .enumerate()
        .map(|(i, rec)| {
            let ids = tok.encode_framed(&rec.prompt, true, false);
            let mut out = rec.clone();
            if ids.len() >= teacher.config.max_seq_len {
                out.completion = String::new();
                return Ok(out.with_meta("truncated", "true"));
            }
            let s = GenerationSettings {
                seed: derive_indexed(settings.seed, "teacher_generate", i as u64),
                ..settings.clone()
            };
            let seq = sample(teacher, &ids, &s)?;
            let new = &seq[ids.len()..];
            out.completion = tok.decode_completion(new);
            if new.last() != Some(&EOS) {
                out = out.with_meta("truncated", "true");
            }
            Ok(out)
        })
        .collect()
}

/// One pass over `batches`, one optimizer step per batch. Returns the
/// token-weighted mean objective.
fn train_epoch(
    student: &mut Transformer,
    teacher: Option<&Transformer>,
    batches: &Batches,
    alpha: f64,
    tau: f64,
    opt: &mut Optimizer,
) -> Result<f64> {
    let mut loss_sum = 0.0;
    let mut tokens = 0usize;
    for batch in &batches.batches {
        let n = batch.masked_count();
        if n == 0 {
            continue;
        }
        let inv = 1.0 / n as f64;
        let mut g = Graph::new();
        let p = student.params.bind(&mut g);
        let mut total: Option<Var> = None;
        for b in 0..batch.len() {
            let row = batch.row(b);
            if row.len() < 2 {
                continue;
            }
            let input = &row[..row.len() - 1];
            let w: Vec<f64> = batch.mask[b][1..row.len()]
                .iter()
                .map(|&m| if m { inv } else { 0.0 })
                .collect();
            let logits = student.forward(&mut g, &p, input)?;
            let mut term = None;
            if alpha < 1.0 {
                let targets: Vec<usize> = row[1..].iter().map(|&t| t as usize).collect();
                let lm = g.cross_entropy(logits, &targets, &w)?;
                term = Some(g.scale(lm, 1.0 - alpha));
            }
            if alpha > 0.0 {
                let t = teacher.ok_or_else(|| Error::Contract("KD term needs a teacher".into()))?;
                let tl = t.forward_logits(input)?;
                let kd = kd_weighted(&mut g, &tl, logits, &w, tau, KdForm::FusedKl)?;
                let kd = g.scale(kd, alpha);
                term = Some(match term {
                    Some(lm) => g.add(lm, kd)?,
                    None => kd,
                });
            }
            let term = term.expect("alpha selects at least one term");
            total = Some(match total {
                Some(acc) => g.add(acc, term)?,
                None => term,
            });
        }
        let Some(root) = total else { continue };
        g.backward(root)?;
        loss_sum += g.value(root).data()[0] * n as f64;
        tokens += n;
        let grads = p.flat_grads(&g);
        opt.step(student, &grads)?;
    }
    Ok(if tokens == 0 { 0.0 } else { loss_sum / tokens as f64 })
}

/// Gradient descent on the completion-token LM loss.
pub fn sft_epoch(student: &mut Transformer, batches: &Batches, opt: &mut Optimizer) -> Result<f64> {
    train_epoch(student, None, batches, 0.0, 1.0, opt)
}

/// One epoch of `α·KD + (1 − α)·LM`. The teacher is only read.
pub fn distill_epoch(
    student: &mut Transformer,
    teacher: &Transformer,
    batches: &Batches,
    cfg: &DistillConfig,
    opt: &mut Optimizer,
) -> Result<f64> {
    cfg.validate()?;
    if teacher.config.vocab_size != student.config.vocab_size {
        return Err(Error::Contract(format!(
            "teacher vocab {} differs from student vocab {}",
            teacher.config.vocab_size, student.config.vocab_size
        )));
    }
    train_epoch(student, Some(teacher), batches, cfg.alpha, cfg.temperature, opt)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ReverseKlMetrics {
    /// Monte-Carlo estimate of `KL(q_θ ‖ p_T)` per sequence.
    pub reverse_kl_estimate: f64,
    /// Mean `|log q_θ − log p_T|` over samples.
    pub mean_weight: f64,
    /// Samples dropped because they had no completion tokens.
    pub skipped: usize,
}

/// One on-policy reverse-KL update.
///
/// For each prompt, `samples_per_prompt` completions are drawn from the
/// student. Each gets weight `w = log q_θ(o|x) − log p_T(o|x)`; the update
/// descends `mean (w − w̄) ∇ log q_θ(o|x)` where `w̄` is the prompt's mean
/// weight.
pub fn reverse_kl_step<S, T>(
    student: &mut S,
    teacher: &T,
    prompts: &[Vec<TokenId>],
    cfg: &DistillConfig,
    opt: &mut Optimizer,
    seed: u64,
) -> Result<ReverseKlMetrics>
where
    S: Policy + Trainable,
    T: Policy + ?Sized,
{
    cfg.validate()?;
    if teacher.vocab_size() != student.vocab_size() {
        return Err(Error::Contract("teacher and student vocabularies differ".into()));
    }
    let k = cfg.samples_per_prompt;
    let mut groups: Vec<Vec<(Vec<TokenId>, usize, f64)>> = Vec::new();
    let mut skipped = 0;
    let (mut w_sum, mut w_abs, mut count) = (0.0, 0.0, 0usize);
    for (pi, prompt) in prompts.iter().enumerate() {
        let mut group = Vec::with_capacity(k);
        for s in 0..k {
            let settings = GenerationSettings {
                temperature: cfg.sample_temperature,
                max_new_tokens: cfg.max_new_tokens,
                seed: derive_indexed(seed, "reverse_kl", (pi * k + s) as u64),
                stop_token: Some(EOS),
            };
            let seq = sample(&*student, prompt, &settings)?;
            let plen = if prompt.is_empty() { 1 } else { prompt.len() };
            if seq.len() <= plen {
                skipped += 1;
                continue;
            }
            let lq: f64 = student.completion_log_probs(&seq, plen)?.iter().sum();
            let lp: f64 = teacher.completion_log_probs(&seq, plen)?.iter().sum();
            let w = lq - lp;
            w_sum += w;
            w_abs += w.abs();
            count += 1;
            group.push((seq, plen, w));
        }
        groups.push(group);
    }
    if count == 0 {
        return Ok(ReverseKlMetrics {
            skipped,
            ..Default::default()
        });
    }
    let mut grad = vec![0.0; student.param_count()];
    for group in &groups {
        if group.len() < 2 {
            continue;
        }
        let base = group.iter().map(|s| s.2).sum::<f64>() / group.len() as f64;
        for (seq, plen, w) in group {
            let c = (w - base) / count as f64;
            if c == 0.0 {
                continue;
            }
            let weights = vec![c; seq.len() - plen];
            let (_, g) = student.weighted_log_prob_grad(seq, *plen, &weights)?;
            grad.iter_mut().zip(&g).for_each(|(a, b)| *a += b);
        }
    }
    opt.step(student, &grad)?;
    Ok(ReverseKlMetrics {
        reverse_kl_estimate: w_sum / count as f64,
        mean_weight: w_abs / count as f64,
        skipped,
    })
}

/// Non-training knobs of a full run.
#[derive(Default, Clone, Debug, PartialEq)]
pub struct RunOptions {
    /// Training sequence cap (also bounded by the student's context).
    pub max_len: Option<usize>,
    pub eval: EvalSettings,
    /// Measure wall time; when false the column is written as 0 so that
    /// metrics files are byte-reproducible.
    pub record_wall_time: bool,
}

fn prompt_ids(model: &Transformer, records: &[PromptRecord]) -> Vec<Vec<TokenId>> {
    let tok = Tokenizer::new();
    records
        .iter()
        .map(|r| tok.encode_framed(&r.prompt, true, false))
        .filter(|ids| ids.len() < model.config.max_seq_len)
        .collect()
}

/// Trains `student` for `cfg.epochs`, evaluating after every epoch.
///
/// With `teacher = None` this is SFT (the KD weight is ignored). Records are
/// reshuffled each epoch from the run seed.
pub fn train(
    student: &mut Transformer,
    teacher: Option<&Transformer>,
    cfg: &DistillConfig,
    train_set: &[PromptRecord],
    eval_set: &[PromptRecord],
    opts: &RunOptions,
) -> Result<TrainMetrics> {
    cfg.validate()?;
    if eval_set.is_empty() {
        return Err(Error::Config("evaluation set is empty".into()));
    }
    if let Some(t) = teacher {
        if t.config.vocab_size != student.config.vocab_size {
            return Err(Error::Contract("teacher and student vocabularies differ".into()));
        }
    }
    let alpha = if teacher.is_some() { cfg.alpha } else { 0.0 };
    if teacher.is_none() && cfg.direction == Direction::Reverse {
        return Err(Error::Config("reverse distillation needs a teacher".into()));
    }
    let max_len = opts
        .max_len
        .unwrap_or(student.config.max_seq_len)
        .min(student.config.max_seq_len);
    let tok = Tokenizer::new();
    let mut opt = Optimizer::new(cfg.optimizer.clone(), cfg.learning_rate)?;
    let mut records = train_set.to_vec();
    let mut metrics = TrainMetrics::default();
    for epoch in 1..=cfg.epochs {
        let start = Instant::now();
        let mut rng = ChaCha8Rng::seed_from_u64(derive_indexed(cfg.seed, "shuffle", epoch as u64));
        records.shuffle(&mut rng);
        let train_loss = match (cfg.direction, teacher) {
            (Direction::Reverse, Some(t)) => {
                let prompts = prompt_ids(student, &records);
                let mut sum = 0.0;
                let mut steps = 0;
                for (i, chunk) in prompts.chunks(cfg.batch_size).enumerate() {
                    let step_seed = derive_indexed(cfg.seed, "reverse_step", (epoch * 1_000_003 + i) as u64);
                    sum += reverse_kl_step(student, t, chunk, cfg, &mut opt, step_seed)?.reverse_kl_estimate;
                    steps += 1;
                }
                if steps == 0 {
                    0.0
                } else {
                    sum / steps as f64
                }
            }
            _ => {
                let batches = batchify(&records, &tok, cfg.batch_size, max_len)?;
                train_epoch(student, teacher, &batches, alpha, cfg.temperature, &mut opt)?
            }
        };
        let eval_loss = evalmetrics::mean_loss(student, eval_set)?;
        let scores = evalmetrics::score_generations(student, eval_set, &opts.eval)?;
        let rouge_l = scores.iter().map(|s| s.rouge_l.f).sum::<f64>() / scores.len() as f64;
        let wall_time_s = if opts.record_wall_time {
            start.elapsed().as_secs_f64()
        } else {
            0.0
        };
        log::info!("epoch {epoch}: train {train_loss:.4} eval {eval_loss:.4} rouge-l {rouge_l:.4}");
        metrics.rows.push(TrainRow {
            epoch,
            train_loss,
            eval_loss,
            rouge_l,
            wall_time_s,
        });
    }
    Ok(metrics)
}

/// File-level run description shared by the `sft`, `distill` and `sweep-lr`
/// commands.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DistillRunConfig {
    pub dataset: PathBuf,
    /// Held-out records for per-epoch evaluation; defaults to `dataset`.
    #[serde(default)]
    pub eval_dataset: Option<PathBuf>,
    #[serde(default)]
    pub teacher_ckpt: Option<PathBuf>,
    /// Initial student weights; a fresh `student_model` is used otherwise.
    #[serde(default)]
    pub student_ckpt: Option<PathBuf>,
    #[serde(default = "ModelConfig::student")]
    pub student_model: ModelConfig,
    pub out_dir: PathBuf,
    #[serde(default)]
    pub distill: DistillConfig,
    #[serde(default)]
    pub max_len: Option<usize>,
    #[serde(default)]
    pub eval: EvalSettings,
    #[serde(default)]
    pub record_wall_time: bool,
}

pub const METRICS_FILE: &str = "metrics.csv";
pub const STUDENT_FILE: &str = "student.ckpt";
pub const EVAL_REPORT_FILE: &str = "eval.jsonl";
pub const EVAL_SUMMARY_FILE: &str = "eval.csv";

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    std::fs::write(path, contents).map_err(|e| Error::io(path, e))
}

/// Runs a full distillation (or SFT, when `sft` is set or no teacher is
/// configured) and writes `metrics.csv`, `student.ckpt`, `eval.jsonl` and
/// `eval.csv` into `out_dir`.
pub fn run_distillation(run: &DistillRunConfig, sft: bool) -> Result<TrainMetrics> {
    run.distill.validate()?;
    let out = &run.out_dir;
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let metrics_path = out.join(METRICS_FILE);
    // fail on an unwritable directory before any compute
    write_file(&metrics_path, format!("{METRICS_HEADER}\n"))?;

    let train_set = load_dataset(&run.dataset)?;
    let eval_set = match &run.eval_dataset {
        Some(p) => load_dataset(p)?,
        None => train_set.clone(),
    };
    let teacher = match (&run.teacher_ckpt, sft) {
        (Some(p), false) => Some(checkpoint::load_model(p)?),
        (None, false) if run.distill.alpha > 0.0 || run.distill.direction == Direction::Reverse => {
            return Err(Error::Config("distillation requires teacher_ckpt".into()));
        }
        _ => None,
    };
    let mut student = match &run.student_ckpt {
        Some(p) => checkpoint::load_model(p)?,
        None => Transformer::new(run.student_model.clone(), derive_seed(run.distill.seed, "student_init"))?,
    };
    let opts = RunOptions {
        max_len: run.max_len,
        eval: run.eval.clone(),
        record_wall_time: run.record_wall_time,
    };
    let metrics = train(
        &mut student,
        teacher.as_ref(),
        &run.distill,
        &train_set,
        &eval_set,
        &opts,
    )?;
    write_file(&metrics_path, metrics.to_csv())?;
    checkpoint::save_model(&student, out.join(STUDENT_FILE))?;

    let teacher_scores = match &teacher {
        Some(t) => Some(
            evalmetrics::score_generations(t, &eval_set, &run.eval)?
                .iter()
                .map(|s| s.rouge_l.f)
                .collect::<Vec<_>>(),
        ),
        None => None,
    };
    let report = evalmetrics::evaluate(&student, &eval_set, &run.eval, teacher_scores.as_deref())?;
    report.write(&out.join(EVAL_REPORT_FILE), &out.join(EVAL_SUMMARY_FILE))?;
    Ok(metrics)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn logits(rows: usize, vocab: usize, seed: u64) -> Tensor {
        Tensor::randn(&[rows, vocab], 2.0, &mut ChaCha8Rng::seed_from_u64(seed))
    }

    fn kd_value(t: &Tensor, s: &Tensor, mask: &[bool], tau: f64) -> f64 {
        let mut g = Graph::new();
        let sv = g.param(s.clone());
        let l = kd_loss(&mut g, t, sv, mask, tau).unwrap();
        g.value(l).data()[0]
    }

    #[test]
    fn kd_hand_example() {
        // p_T = (0.75, 0.25) from logits (ln 3, 0); p_S uniform
        let t = Tensor::new(&[1, 2], vec![3f64.ln(), 0.0]).unwrap();
        let s = Tensor::zeros(&[1, 2]);
        let v = kd_value(&t, &s, &[true], 1.0);
        let want = 0.75 * 1.5f64.ln() + 0.25 * 0.5f64.ln();
        assert!((v - want).abs() < 1e-12);
        assert!((want - 0.130812).abs() < 1e-6);
    }

    #[test]
    fn kd_identical_is_zero_and_large_tau_vanishes() {
        let t = logits(4, 7, 1);
        for tau in [0.5, 1.0, 2.0, 10.0] {
            assert!(kd_value(&t, &t, &[true; 4], tau).abs() < 1e-12);
        }
        let s = logits(4, 7, 2);
        let v1 = kd_value(&t, &s, &[true; 4], 1.0);
        let v_big = kd_value(&t, &s, &[true; 4], 1e3);
        assert!(v1 > 1e-3 && v_big < 1e-5, "{v1} {v_big}");
    }

    #[test]
    fn kd_rejects_bad_inputs() {
        let t = logits(2, 3, 1);
        let mut g = Graph::new();
        let s = g.param(t.clone());
        assert!(matches!(
            kd_loss(&mut g, &t, s, &[true, true], 0.0),
            Err(Error::Config(_))
        ));
        assert!(kd_loss(&mut g, &t, s, &[false, false], 1.0).is_err());
        let other = logits(2, 4, 1);
        assert!(kd_loss(&mut g, &other, s, &[true, true], 1.0).is_err());
    }

    #[test]
    fn uniform_teacher_entropy() {
        let t = Tensor::zeros(&[1, 4]);
        let s = logits(1, 4, 3);
        let d = soft_ce_decomposition(&t, &s, &[true], 1.0).unwrap();
        assert!((d.teacher_entropy - 4f64.ln()).abs() < 1e-14);
        let d = soft_ce_decomposition(&s, &s, &[true], 2.0).unwrap();
        assert!(d.kl.abs() < 1e-14);
        assert!((d.soft_cross_entropy - d.teacher_entropy).abs() < 1e-14);
    }

    #[test]
    fn masked_rows_do_not_count() {
        let t = logits(3, 5, 4);
        let mut s = logits(3, 5, 5);
        let a = kd_value(&t, &s, &[true, false, true], 1.5);
        s.data_mut()[5..10].iter_mut().for_each(|v| *v += 3.0);
        let b = kd_value(&t, &s, &[true, false, true], 1.5);
        assert_eq!(a, b);
    }

    #[test]
    fn config_validation() {
        assert!(DistillConfig::default().validate().is_ok());
        let bad = DistillConfig {
            alpha: 1.5,
            ..DistillConfig::default()
        };
        assert!(bad.validate().is_err());
        let bad = DistillConfig {
            temperature: -1.0,
            ..DistillConfig::default()
        };
        assert!(bad.validate().is_err());
        let cfg: DistillConfig = serde_json::from_str(r#"{"alpha": 0.5}"#).unwrap();
        assert_eq!(cfg.temperature, 2.0);
        assert!(serde_json::from_str::<DistillConfig>(r#"{"alhpa": 0.5}"#).is_err());
    }
}

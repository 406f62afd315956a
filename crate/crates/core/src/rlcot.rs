//! GRPO with a structured chain-of-thought reward.
//!
//! A trace looks like
//!
//! ```text
//! <think>Step 1: ...
//! Step 2: ...</think>final answer
//! ```
//!
//! Rewards are standardized within each group of completions for the same
//! prompt, and the policy ascends the clipped surrogate
//! `mean_i min(ρ_i A_i, clip(ρ_i, 1−ε, 1+ε) A_i) − β·KL` with one
//! sequence-level ratio `ρ_i = π_θ(o_i|q) / π_old(o_i|q)` per completion and
//! the per-token `k3` KL estimate against a frozen reference policy.

use std::fmt::Write as _;
use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::checkpoint;
use crate::data::{load_dataset, PromptRecord, TokenId, Tokenizer, EOS};
use crate::error::{Error, Result};
use crate::model::{sample, GenerationSettings, Policy, Trainable};
use crate::numerics::{Graph, Tensor, Var};
use crate::optim::{Optimizer, OptimizerConfig};
use crate::seed::derive_indexed;

pub const THINK_OPEN: &str = "<think>";
pub const THINK_CLOSE: &str = "</think>";

/// Why a trace is not well formed.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Diagnostic {
    /// No `<think>` tag at all.
    MissingThink,
    /// `<think>` without a matching `</think>`.
    UnclosedThink,
    /// More than one think block.
    DuplicateThink,
    /// `</think>` before any `<think>`, or a second close.
    StrayClose,
    /// Non-whitespace text before `<think>`.
    LeadingText,
    /// No `Step <k>` line inside the think block.
    NoSteps,
    /// Step indices do not run 1, 2, 3, ...
    StepOrder,
    /// Nothing after `</think>`.
    MissingAnswer,
}

impl Diagnostic {
    pub fn code(self) -> &'static str {
        match self {
            Diagnostic::MissingThink => "MISSING_THINK",
            Diagnostic::UnclosedThink => "UNCLOSED_THINK",
            Diagnostic::DuplicateThink => "DUPLICATE_THINK",
            Diagnostic::StrayClose => "STRAY_CLOSE",
            Diagnostic::LeadingText => "LEADING_TEXT",
            Diagnostic::NoSteps => "NO_STEPS",
            Diagnostic::StepOrder => "STEP_ORDER",
            Diagnostic::MissingAnswer => "MISSING_ANSWER",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Step {
    pub index: u64,
    pub text: String,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TraceParse {
    pub well_formed: bool,
    /// Raw text between the first `<think>` and its closing tag.
    pub think_text: Option<String>,
    pub steps: Vec<Step>,
    /// Trimmed text after the first `</think>`.
    pub final_answer: Option<String>,
    pub diagnostics: Vec<Diagnostic>,
}

impl TraceParse {
    pub fn has(&self, d: Diagnostic) -> bool {
        self.diagnostics.contains(&d)
    }

    /// Length of the longest run `Step 1, Step 2, ...` at the start of the
    /// step list.
    pub fn valid_step_prefix(&self) -> usize {
        self.steps
            .iter()
            .enumerate()
            .take_while(|(i, s)| s.index == *i as u64 + 1)
            .count()
    }
}

/// `Step <digits>` at line start, followed by end of line, whitespace or one
/// of `:.)`.
fn parse_step_line(line: &str) -> Option<Step> {
    let rest = line.strip_prefix("Step ")?;
    let digits = rest.bytes().take_while(u8::is_ascii_digit).count();
    if digits == 0 {
        return None;
    }
    let index: u64 = rest[..digits].parse().ok()?;
    let tail = &rest[digits..];
    let text = match tail.chars().next() {
        None => "",
        Some(':' | '.' | ')') => &tail[1..],
        Some(c) if c.is_whitespace() => tail,
        Some(_) => return None,
    };
    Some(Step {
        index,
        text: text.trim().to_string(),
    })
}

/// Single left-to-right scan of a generated trace. Never fails.
pub fn parse_trace(text: &str) -> TraceParse {
    let mut diagnostics = Vec::new();
    let mut think_text = None;
    let mut final_answer = None;
    // (open start, content start, close start, after close) of the first block
    let mut pos = 0;
    let mut opens = 0;
    let mut first_block: Option<(usize, usize)> = None;
    let mut open_at: Option<usize> = None;
    let mut stray = false;
    while pos < text.len() {
        let rest = &text[pos..];
        if rest.starts_with(THINK_OPEN) {
            opens += 1;
            if open_at.is_none() && first_block.is_none() {
                open_at = Some(pos);
            }
            pos += THINK_OPEN.len();
        } else if rest.starts_with(THINK_CLOSE) {
            match open_at.take() {
                Some(o) if first_block.is_none() => first_block = Some((o, pos)),
                _ => stray = true,
            }
            pos += THINK_CLOSE.len();
        } else {
            pos += rest.chars().next().map_or(1, char::len_utf8);
        }
    }
    if opens == 0 {
        diagnostics.push(Diagnostic::MissingThink);
    }
    if opens > 1 {
        diagnostics.push(Diagnostic::DuplicateThink);
    }
    if stray {
        diagnostics.push(Diagnostic::StrayClose);
    }
    if open_at.is_some() && first_block.is_none() {
        diagnostics.push(Diagnostic::UnclosedThink);
    }
    let mut steps = Vec::new();
    if let Some((open, close)) = first_block {
        if !text[..open].trim().is_empty() {
            diagnostics.push(Diagnostic::LeadingText);
        }
        let inner = &text[open + THINK_OPEN.len()..close];
        steps = inner.lines().filter_map(parse_step_line).collect();
        think_text = Some(inner.to_string());
        let answer = text[close + THINK_CLOSE.len()..].trim();
        if answer.is_empty() {
            diagnostics.push(Diagnostic::MissingAnswer);
        }
        final_answer = Some(answer.to_string());
    }
    let mut parse = TraceParse {
        well_formed: false,
        think_text,
        steps,
        final_answer,
        diagnostics,
    };
    if parse.think_text.is_some() {
        if parse.steps.is_empty() {
            parse.diagnostics.push(Diagnostic::NoSteps);
        } else if parse.valid_step_prefix() != parse.steps.len() {
            parse.diagnostics.push(Diagnostic::StepOrder);
        }
    }
    parse.well_formed = parse.diagnostics.is_empty();
    parse
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RewardSpec {
    pub w_format: f64,
    pub w_steps: f64,
    pub w_correct: f64,
    pub w_length: f64,
    /// Think-block bytes that earn full length credit.
    pub target_length: usize,
    /// Think blocks longer than this earn no length credit.
    pub length_cap: usize,
}

impl Default for RewardSpec {
    fn default() -> Self {
        RewardSpec {
            w_format: 1.0,
            w_steps: 1.0,
            w_correct: 2.0,
            w_length: 0.5,
            target_length: 64,
            length_cap: 256,
        }
    }
}

impl RewardSpec {
    /// Only the format term.
    pub fn format_only() -> Self {
        RewardSpec {
            w_format: 1.0,
            w_steps: 0.0,
            w_correct: 0.0,
            w_length: 0.0,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let w = [self.w_format, self.w_steps, self.w_correct, self.w_length];
        if w.iter().any(|x| !(*x >= 0.0) || !x.is_finite()) {
            return Err(Error::Config("reward weights must be finite and >= 0".into()));
        }
        if w.iter().all(|&x| x == 0.0) {
            return Err(Error::Config("at least one reward weight must be > 0".into()));
        }
        if self.target_length == 0 {
            return Err(Error::Config("target_length must be >= 1".into()));
        }
        Ok(())
    }
}

/// Unweighted components in `[0, 1]` and their weighted total.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Reward {
    pub total: f64,
    pub format: f64,
    pub steps: f64,
    pub correct: f64,
    pub length: f64,
}

pub fn compute_reward(parse: &TraceParse, reference_answer: Option<&str>, spec: &RewardSpec) -> Reward {
    let format = if parse.well_formed { 1.0 } else { 0.0 };
    let steps = if parse.steps.is_empty() {
        0.0
    } else {
        parse.valid_step_prefix() as f64 / parse.steps.len() as f64
    };
    let correct = match (&parse.final_answer, reference_answer) {
        (Some(a), Some(r)) if a.trim() == r.trim() => 1.0,
        _ => 0.0,
    };
    let think_len = parse.think_text.as_ref().map_or(0, |t| t.len());
    let length = if think_len > spec.length_cap {
        0.0
    } else {
        (think_len as f64 / spec.target_length as f64).min(1.0)
    };
    Reward {
        total: spec.w_format * format + spec.w_steps * steps + spec.w_correct * correct + spec.w_length * length,
        format,
        steps,
        correct,
        length,
    }
}

/// Below this population standard deviation a group carries no signal.
pub const DEGENERATE_STD: f64 = 1e-8;

/// `(r_i − mean) / std` with the population standard deviation; all zeros
/// when the group is (numerically) constant.
pub fn group_advantages(rewards: &[f64]) -> Result<Vec<f64>> {
    if rewards.len() < 2 {
        return Err(Error::Contract(format!(
            "group advantages need at least 2 rewards, got {}",
            rewards.len()
        )));
    }
    let n = rewards.len() as f64;
    let mean = rewards.iter().sum::<f64>() / n;
    let var = rewards.iter().map(|r| (r - mean) * (r - mean)).sum::<f64>() / n;
    let std = var.sqrt();
    if !(std >= DEGENERATE_STD) {
        return Ok(vec![0.0; rewards.len()]);
    }
    Ok(rewards.iter().map(|r| (r - mean) / std).collect())
}

/// `r − ln r − 1` with `r = π_ref / π_θ = exp(logp_ref − logp_current)`.
pub fn kl_k3(logp_current: f64, logp_ref: f64) -> f64 {
    let d = logp_ref - logp_current;
    // expm1 keeps the estimate nonnegative and accurate near r = 1
    (d.exp_m1() - d).max(0.0)
}

/// `(1/G) Σ min(ρ_i A_i, clip(ρ_i, 1−ε, 1+ε) A_i) − β·kl_mean` (to maximize).
pub fn grpo_objective(ratios: &[f64], advantages: &[f64], kl_mean: f64, eps: f64, beta: f64) -> Result<f64> {
    if ratios.len() != advantages.len() || ratios.is_empty() {
        return Err(Error::Contract(format!(
            "{} ratios vs {} advantages",
            ratios.len(),
            advantages.len()
        )));
    }
    let s: f64 = ratios
        .iter()
        .zip(advantages)
        .map(|(&r, &a)| (r * a).min(r.clamp(1.0 - eps, 1.0 + eps) * a))
        .sum();
    Ok(s / ratios.len() as f64 - beta * kl_mean)
}

/// One completion's contribution, recorded on `g`: returns
/// `(surrogate term, mean token k3)` as functions of the current per-token
/// log-probabilities `logps`.
fn surrogate_terms(
    g: &mut Graph,
    logps: Var,
    old_logp: f64,
    ref_logps: &[f64],
    advantage: f64,
    eps: f64,
) -> Result<(Var, Var)> {
    let total = g.sum(logps);
    let log_ratio = g.add_scalar(total, -old_logp);
    let ratio = g.exp(log_ratio);
    let unclipped = g.mul_const(ratio, &[advantage])?;
    let clipped = g.clip(ratio, 1.0 - eps, 1.0 + eps);
    let clipped = g.mul_const(clipped, &[advantage])?;
    let term = g.minimum(unclipped, clipped)?;
    let neg = g.scale(logps, -1.0);
    let d = g.add_const(neg, ref_logps)?;
    let ed = g.exp(d);
    let k3 = g.sub(ed, d)?;
    let k3 = g.add_scalar(k3, -1.0);
    let kl = g.mean(k3);
    Ok((term, kl))
}

/// Differentiable objective for a set of groups, as a function of per-token
/// current log-probabilities (one leaf per completion). Returns the graph
/// root (the objective to maximize) and the leaves.
pub fn grpo_objective_graph(
    g: &mut Graph,
    groups: &[GroupSample],
    current: &[Vec<Vec<f64>>],
    eps: f64,
    beta: f64,
) -> Result<(Var, Vec<Vec<Var>>)> {
    let mut leaves = Vec::new();
    let mut total: Option<Var> = None;
    let n_groups = groups.len() as f64;
    for (group, cur) in groups.iter().zip(current) {
        let gsize = group.completions.len() as f64;
        let mut group_leaves = Vec::new();
        for (c, lp) in group.completions.iter().zip(cur) {
            let leaf = g.param(Tensor::new(&[lp.len()], lp.clone())?);
            let (term, kl) = surrogate_terms(g, leaf, c.old_logp, &c.ref_logps, c.advantage, eps)?;
            let term = g.scale(term, 1.0 / (gsize * n_groups));
            let kl = g.scale(kl, -beta / (gsize * n_groups));
            let contrib = g.add(term, kl)?;
            total = Some(match total {
                Some(t) => g.add(t, contrib)?,
                None => contrib,
            });
            group_leaves.push(leaf);
        }
        leaves.push(group_leaves);
    }
    let root = total.ok_or_else(|| Error::Contract("GRPO objective over no completions".into()))?;
    Ok((root, leaves))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GrpoConfig {
    pub group_size: usize,
    pub clip_eps: f64,
    pub kl_coeff: f64,
    pub learning_rate: f64,
    pub steps: usize,
    pub prompts_per_step: usize,
    pub refresh_old_every: usize,
    pub seed: u64,
    pub temperature: f64,
    pub max_new_tokens: usize,
    pub optimizer: OptimizerConfig,
}

impl Default for GrpoConfig {
    fn default() -> Self {
        GrpoConfig {
            group_size: 8,
            clip_eps: 0.2,
            kl_coeff: 0.04,
            learning_rate: 1e-3,
            steps: 200,
            prompts_per_step: 2,
            refresh_old_every: 1,
            seed: 0,
            temperature: 1.0,
            max_new_tokens: 48,
            optimizer: OptimizerConfig::default(),
        }
    }
}

impl GrpoConfig {
    pub fn validate(&self) -> Result<()> {
        if self.group_size < 2 {
            return Err(Error::Config("group_size must be >= 2".into()));
        }
        if !(self.clip_eps > 0.0 && self.clip_eps < 1.0) {
            return Err(Error::Config(format!(
                "clip_eps must be in (0, 1), got {}",
                self.clip_eps
            )));
        }
        if !(self.kl_coeff >= 0.0) || !self.kl_coeff.is_finite() {
            return Err(Error::Config("kl_coeff must be >= 0".into()));
        }
        if self.prompts_per_step == 0 || self.refresh_old_every == 0 {
            return Err(Error::Config(
                "prompts_per_step and refresh_old_every must be >= 1".into(),
            ));
        }
        if !(self.temperature > 0.0) {
            return Err(Error::Config("GRPO sampling temperature must be > 0".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CompletionSample {
    /// Prompt followed by the sampled completion.
    pub tokens: Vec<TokenId>,
    pub prompt_len: usize,
    pub text: String,
    /// Summed completion log-probability under the sampling policy.
    pub old_logp: f64,
    /// Per-token completion log-probabilities under the reference policy.
    pub ref_logps: Vec<f64>,
    pub reward: Reward,
    pub advantage: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GroupSample {
    pub prompt: Vec<TokenId>,
    pub completions: Vec<CompletionSample>,
}

impl GroupSample {
    pub fn is_degenerate(&self) -> bool {
        self.completions.iter().all(|c| c.advantage == 0.0)
    }
}

/// A prompt and its optional reference answer, tokenized.
#[derive(Clone, Debug, PartialEq)]
pub struct RlPrompt {
    pub tokens: Vec<TokenId>,
    pub answer: Option<String>,
}

impl RlPrompt {
    /// `[BOS] prompt`, with meta `answer` as the reference.
    pub fn from_record(rec: &PromptRecord) -> Self {
        RlPrompt {
            tokens: Tokenizer::new().encode_framed(&rec.prompt, true, false),
            answer: rec.meta("answer").map(str::to_string),
        }
    }
}

/// Draws `G` completions from `old`, scores them and normalizes rewards.
pub fn sample_group<O, R>(
    old: &O,
    reference: &R,
    prompt: &RlPrompt,
    spec: &RewardSpec,
    cfg: &GrpoConfig,
    seed: u64,
) -> Result<GroupSample>
where
    O: Policy + ?Sized,
    R: Policy + ?Sized,
{
    let tok = Tokenizer::new();
    let plen = prompt.tokens.len();
    if plen == 0 || plen >= old.context_len() {
        return Err(Error::Input(format!(
            "prompt of {plen} tokens leaves no room in context {}",
            old.context_len()
        )));
    }
    let mut completions = Vec::with_capacity(cfg.group_size);
    for i in 0..cfg.group_size {
        let settings = GenerationSettings {
            temperature: cfg.temperature,
            max_new_tokens: cfg.max_new_tokens.max(1),
            seed: derive_indexed(seed, "grpo_sample", i as u64),
            stop_token: Some(EOS),
        };
        let tokens = sample(old, &prompt.tokens, &settings)?;
        let text = tok.decode_completion(&tokens[plen..]);
        let reward = compute_reward(&parse_trace(&text), prompt.answer.as_deref(), spec);
        let old_logp = old.completion_log_probs(&tokens, plen)?.iter().sum();
        let ref_logps = reference.completion_log_probs(&tokens, plen)?;
        completions.push(CompletionSample {
            tokens,
            prompt_len: plen,
            text,
            old_logp,
            ref_logps,
            reward,
            advantage: 0.0,
        });
    }
    let rewards: Vec<f64> = completions.iter().map(|c| c.reward.total).collect();
    for (c, a) in completions.iter_mut().zip(group_advantages(&rewards)?) {
        c.advantage = a;
    }
    Ok(GroupSample {
        prompt: prompt.tokens.clone(),
        completions,
    })
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct GrpoStepMetrics {
    pub mean_reward: f64,
    /// Mean over completions of the mean token k3 estimate, before the update.
    pub kl_from_ref: f64,
    pub mean_abs_advantage: f64,
    /// Fraction of completions whose ratio fell outside `[1−ε, 1+ε]`.
    pub clipped_fraction: f64,
    /// Every group was constant-reward; no update was applied.
    pub skipped: bool,
}

/// Ascends the objective over `groups` with one optimizer step.
pub fn grpo_update<P>(
    policy: &mut P,
    groups: &[GroupSample],
    cfg: &GrpoConfig,
    opt: &mut Optimizer,
) -> Result<GrpoStepMetrics>
where
    P: Policy + Trainable,
{
    let mut current = Vec::with_capacity(groups.len());
    let (mut reward, mut kl, mut adv, mut clipped, mut n) = (0.0, 0.0, 0.0, 0usize, 0usize);
    for group in groups {
        let mut cur = Vec::with_capacity(group.completions.len());
        for c in &group.completions {
            let lp = policy.completion_log_probs(&c.tokens, c.prompt_len)?;
            let ratio = (lp.iter().sum::<f64>() - c.old_logp).exp();
            if ratio < 1.0 - cfg.clip_eps || ratio > 1.0 + cfg.clip_eps {
                clipped += 1;
            }
            kl += lp.iter().zip(&c.ref_logps).map(|(&a, &b)| kl_k3(a, b)).sum::<f64>() / lp.len() as f64;
            reward += c.reward.total;
            adv += c.advantage.abs();
            n += 1;
            cur.push(lp);
        }
        current.push(cur);
    }
    if n == 0 {
        return Err(Error::Contract("GRPO update over no completions".into()));
    }
    let nf = n as f64;
    let mut metrics = GrpoStepMetrics {
        mean_reward: reward / nf,
        kl_from_ref: kl / nf,
        mean_abs_advantage: adv / nf,
        clipped_fraction: clipped as f64 / nf,
        skipped: false,
    };
    if groups.iter().all(GroupSample::is_degenerate) {
        metrics.skipped = true;
        return Ok(metrics);
    }
    let mut g = Graph::new();
    let (root, leaves) = grpo_objective_graph(&mut g, groups, &current, cfg.clip_eps, cfg.kl_coeff)?;
    let loss = g.scale(root, -1.0);
    g.backward(loss)?;
    let mut grad = vec![0.0; policy.param_count()];
    for (group, group_leaves) in groups.iter().zip(&leaves) {
        for (c, leaf) in group.completions.iter().zip(group_leaves) {
            let Some(w) = g.grad(*leaf) else { continue };
            if w.iter().all(|&x| x == 0.0) {
                continue;
            }
            let (_, pg) = policy.weighted_log_prob_grad(&c.tokens, c.prompt_len, w)?;
            grad.iter_mut().zip(&pg).for_each(|(a, b)| *a += b);
        }
    }
    opt.step(policy, &grad)?;
    Ok(metrics)
}

/// One GRPO step: sample groups from `old`, then update `policy`.
#[allow(clippy::too_many_arguments)]
pub fn grpo_step<P, R>(
    policy: &mut P,
    reference: &R,
    old: &P,
    prompts: &[RlPrompt],
    spec: &RewardSpec,
    cfg: &GrpoConfig,
    opt: &mut Optimizer,
    seed: u64,
) -> Result<GrpoStepMetrics>
where
    P: Policy + Trainable,
    R: Policy + ?Sized,
{
    cfg.validate()?;
    spec.validate()?;
    if policy.vocab_size() != reference.vocab_size() {
        return Err(Error::Contract("policy and reference vocabularies differ".into()));
    }
    let groups = prompts
        .iter()
        .enumerate()
        .map(|(i, p)| {
            sample_group(
                old,
                reference,
                p,
                spec,
                cfg,
                derive_indexed(seed, "grpo_group", i as u64),
            )
        })
        .collect::<Result<Vec<_>>>()?;
    let m = grpo_update(policy, &groups, cfg, opt)?;
    if m.skipped {
        log::warn!("all groups constant-reward; update skipped");
    }
    Ok(m)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GrpoRow {
    pub step: usize,
    #[serde(flatten)]
    pub metrics: GrpoStepMetrics,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct GrpoMetrics {
    pub rows: Vec<GrpoRow>,
    /// Steps whose groups were all constant-reward.
    pub skipped_steps: usize,
}

pub const GRPO_METRICS_HEADER: &str = "step,mean_reward,kl_from_ref,mean_abs_advantage,clipped_fraction";

impl GrpoMetrics {
    pub fn to_csv(&self) -> String {
        let mut out = format!("{GRPO_METRICS_HEADER}\n");
        for r in &self.rows {
            let m = &r.metrics;
            let _ = writeln!(
                out,
                "{},{},{},{},{}",
                r.step, m.mean_reward, m.kl_from_ref, m.mean_abs_advantage, m.clipped_fraction
            );
        }
        out
    }

    pub fn rewards(&self) -> Vec<f64> {
        self.rows.iter().map(|r| r.metrics.mean_reward).collect()
    }
}

/// Runs `cfg.steps` GRPO steps. The reference policy is a frozen copy of the
/// initial policy; the sampling policy is refreshed from the current one
/// every `refresh_old_every` steps. Prompts are visited cyclically,
/// `prompts_per_step` at a time.
pub fn train<P>(policy: &mut P, prompts: &[RlPrompt], spec: &RewardSpec, cfg: &GrpoConfig) -> Result<GrpoMetrics>
where
    P: Policy + Trainable + Clone,
{
    cfg.validate()?;
    spec.validate()?;
    if prompts.is_empty() {
        return Err(Error::Config("GRPO needs at least one prompt".into()));
    }
    let reference = policy.clone();
    let mut old = policy.clone();
    let mut opt = Optimizer::new(cfg.optimizer.clone(), cfg.learning_rate)?;
    let mut metrics = GrpoMetrics::default();
    for step in 0..cfg.steps {
        if step % cfg.refresh_old_every == 0 {
            old = policy.clone();
        }
        let batch: Vec<RlPrompt> = (0..cfg.prompts_per_step)
            .map(|k| prompts[(step * cfg.prompts_per_step + k) % prompts.len()].clone())
            .collect();
        let seed = derive_indexed(cfg.seed, "grpo_step", step as u64);
        let m = grpo_step(policy, &reference, &old, &batch, spec, cfg, &mut opt, seed)?;
        if m.skipped {
            metrics.skipped_steps += 1;
        }
        log::debug!("step {step}: reward {:.3} kl {:.5}", m.mean_reward, m.kl_from_ref);
        metrics.rows.push(GrpoRow {
            step: step + 1,
            metrics: m,
        });
    }
    Ok(metrics)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GrpoRunConfig {
    pub init_ckpt: PathBuf,
    /// Dataset whose records carry meta `answer`.
    pub prompts: PathBuf,
    pub out_dir: PathBuf,
    #[serde(default)]
    pub grpo: GrpoConfig,
    #[serde(default)]
    pub reward: RewardSpec,
}

pub const GRPO_METRICS_FILE: &str = "grpo_metrics.csv";
pub const POLICY_FILE: &str = "policy.ckpt";

/// Trains from a checkpoint; writes `grpo_metrics.csv` and `policy.ckpt`.
pub fn run_grpo(run: &GrpoRunConfig) -> Result<GrpoMetrics> {
    run.grpo.validate()?;
    run.reward.validate()?;
    let out = &run.out_dir;
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let metrics_path = out.join(GRPO_METRICS_FILE);
    std::fs::write(&metrics_path, format!("{GRPO_METRICS_HEADER}\n")).map_err(|e| Error::io(&metrics_path, e))?;
    let mut policy = checkpoint::load_model(&run.init_ckpt)?;
    let prompts: Vec<RlPrompt> = load_dataset(&run.prompts)?
        .iter()
        .map(RlPrompt::from_record)
        .filter(|p| p.tokens.len() < policy.config.max_seq_len)
        .collect();
    let metrics = train(&mut policy, &prompts, &run.reward, &run.grpo)?;
    std::fs::write(&metrics_path, metrics.to_csv()).map_err(|e| Error::io(&metrics_path, e))?;
    checkpoint::save_model(&policy, out.join(POLICY_FILE))?;
    Ok(metrics)
}

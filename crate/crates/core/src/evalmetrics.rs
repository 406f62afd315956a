//! ROUGE-L, perplexity and teacher-retention reporting.
//!
//! ROUGE-L here is whitespace-tokenized, case-sensitive and unstemmed, with
//! the balanced (β = 1) F-measure.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{frame_record, PromptRecord, Tokenizer};
use crate::error::{Error, Result};
use crate::model::{sample, GenerationSettings, Transformer};

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RougeScore {
    pub precision: f64,
    pub recall: f64,
    pub f: f64,
}

/// Length of the longest common subsequence, O(|a|·|b|) time, O(|b|) space.
pub fn lcs_len<T: PartialEq>(a: &[T], b: &[T]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for x in a {
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x == y { prev[j] + 1 } else { cur[j].max(prev[j + 1]) };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

pub fn rouge_l(candidate: &str, reference: &str) -> RougeScore {
    let c: Vec<&str> = candidate.split_whitespace().collect();
    let r: Vec<&str> = reference.split_whitespace().collect();
    if c.is_empty() || r.is_empty() {
        return RougeScore::default();
    }
    let l = lcs_len(&c, &r) as f64;
    let precision = l / c.len() as f64;
    let recall = l / r.len() as f64;
    let f = if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    };
    RougeScore { precision, recall, f }
}

/// Summed completion-token negative log-likelihood and token count.
///
/// Sequences are framed like training rows and truncated to the model's
/// context; records with no room for a completion token are skipped.
pub fn completion_nll(model: &Transformer, records: &[PromptRecord]) -> Result<(f64, usize)> {
    let tok = Tokenizer::new();
    let mut total = 0.0;
    let mut count = 0;
    for rec in records {
        let (mut ids, prompt_len) = frame_record(&tok, rec);
        ids.truncate(model.config.max_seq_len);
        if prompt_len >= ids.len() {
            continue;
        }
        let lp = model.sequence_log_probs(&ids, prompt_len)?;
        total -= lp.iter().sum::<f64>();
        count += lp.len();
    }
    Ok((total, count))
}

/// Token-weighted mean completion loss over a dataset.
pub fn mean_loss(model: &Transformer, records: &[PromptRecord]) -> Result<f64> {
    let (nll, n) = completion_nll(model, records)?;
    if n == 0 {
        return Err(Error::Contract("no scorable completion tokens in dataset".into()));
    }
    Ok(nll / n as f64)
}

/// `exp` of the mean completion-token loss.
pub fn perplexity(model: &Transformer, records: &[PromptRecord]) -> Result<f64> {
    if records.is_empty() {
        return Err(Error::Contract("perplexity of an empty dataset".into()));
    }
    Ok(mean_loss(model, records)?.exp())
}

/// `100 · mean(student) / mean(teacher)`; `None` when the teacher mean is 0.
pub fn retention(student: &[f64], teacher: &[f64]) -> Result<Option<f64>> {
    if student.is_empty() || teacher.is_empty() {
        return Err(Error::Contract("retention needs nonempty score lists".into()));
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let t = mean(teacher);
    Ok(if t == 0.0 {
        None
    } else {
        Some(100.0 * mean(student) / t)
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSettings {
    pub max_new_tokens: usize,
    /// Score only the first `limit` records (all when absent).
    pub limit: Option<usize>,
}

impl Default for EvalSettings {
    fn default() -> Self {
        EvalSettings {
            max_new_tokens: 64,
            limit: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExampleScore {
    pub prompt: String,
    pub reference: String,
    pub candidate: String,
    pub rouge_l: RougeScore,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Aggregates {
    pub mean_rouge_l_f: f64,
    pub perplexity: f64,
    pub retention_vs_teacher: Option<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub examples: Vec<ExampleScore>,
    pub aggregates: Aggregates,
}

impl EvalReport {
    pub fn f_scores(&self) -> Vec<f64> {
        self.examples.iter().map(|e| e.rouge_l.f).collect()
    }

    /// One JSON object per example, then `{"aggregates": {...}}`.
    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for e in &self.examples {
            out.push_str(&serde_json::to_string(e).expect("plain data serializes"));
            out.push('\n');
        }
        let footer = serde_json::json!({ "aggregates": self.aggregates });
        out.push_str(&footer.to_string());
        out.push('\n');
        out
    }

    pub fn aggregates_csv(&self) -> String {
        let a = &self.aggregates;
        let mut out = String::from("mean_rouge_l_f,perplexity,retention_vs_teacher\n");
        let ret = a.retention_vs_teacher.map(|r| r.to_string()).unwrap_or_default();
        let _ = writeln!(out, "{},{},{}", a.mean_rouge_l_f, a.perplexity, ret);
        out
    }

    pub fn write(&self, jsonl: &Path, csv: &Path) -> Result<()> {
        std::fs::write(jsonl, self.to_jsonl()).map_err(|e| Error::io(jsonl, e))?;
        std::fs::write(csv, self.aggregates_csv()).map_err(|e| Error::io(csv, e))
    }
}

/// Greedy completion of a record's prompt, decoded up to EOS.
pub fn generate_completion(model: &Transformer, prompt: &str, max_new_tokens: usize) -> Result<String> {
    let tok = Tokenizer::new();
    let ids = tok.encode_framed(prompt, true, false);
    if ids.len() >= model.config.max_seq_len {
        return Ok(String::new());
    }
    let out = sample(model, &ids, &GenerationSettings::greedy(max_new_tokens))?;
    Ok(tok.decode_completion(&out[ids.len()..]))
}

/// Greedy generations for the first `settings.limit` records, scored
/// against their reference completions.
pub fn score_generations(
    model: &Transformer,
    records: &[PromptRecord],
    settings: &EvalSettings,
) -> Result<Vec<ExampleScore>> {
    let n = settings.limit.unwrap_or(records.len()).min(records.len());
    if n == 0 {
        return Err(Error::Contract("evaluation dataset is empty".into()));
    }
    records[..n]
        .iter()
        .map(|rec| {
            let candidate = generate_completion(model, &rec.prompt, settings.max_new_tokens)?;
            Ok(ExampleScore {
                rouge_l: rouge_l(&candidate, &rec.completion),
                prompt: rec.prompt.clone(),
                reference: rec.completion.clone(),
                candidate,
            })
        })
        .collect()
}

/// Scores greedy generations and fills the aggregates.
///
/// `teacher_scores`, when given, are per-example teacher ROUGE-L F values
/// used for the retention aggregate.
pub fn evaluate(
    model: &Transformer,
    records: &[PromptRecord],
    settings: &EvalSettings,
    teacher_scores: Option<&[f64]>,
) -> Result<EvalReport> {
    let examples = score_generations(model, records, settings)?;
    let f: Vec<f64> = examples.iter().map(|e| e.rouge_l.f).collect();
    let mean_rouge_l_f = f.iter().sum::<f64>() / f.len() as f64;
    let retention_vs_teacher = match teacher_scores {
        Some(t) => retention(&f, t)?,
        None => None,
    };
    Ok(EvalReport {
        examples,
        aggregates: Aggregates {
            mean_rouge_l_f,
            perplexity: perplexity(model, records)?,
            retention_vs_teacher,
        },
    })
}

/// Loads a checkpoint and dataset from disk and evaluates.
pub fn evaluate_checkpoint(
    ckpt: impl AsRef<Path>,
    dataset: impl AsRef<Path>,
    settings: &EvalSettings,
) -> Result<EvalReport> {
    let model = crate::checkpoint::load_model(ckpt)?;
    let records = crate::data::load_dataset(dataset)?;
    evaluate(&model, &records, settings, None)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rouge_examples() {
        let s = rouge_l("the cat sat", "the cat sat");
        assert_eq!((s.precision, s.recall, s.f), (1.0, 1.0, 1.0));
        assert_eq!(rouge_l("a b", "c d"), RougeScore::default());
        let s = rouge_l("the cat sat", "the cat ate");
        assert!((s.f - 2.0 / 3.0).abs() < 1e-15 && s.precision == s.recall);
        assert_eq!(rouge_l("", "x"), RougeScore::default());
        assert_eq!(rouge_l("  ", "x"), RougeScore::default());
    }

    #[test]
    fn retention_table_values() {
        let r = retention(&[20.4], &[27.1]).unwrap().unwrap();
        assert_eq!(format!("{r:.1}"), "75.3");
        let r = retention(&[19.7], &[20.6]).unwrap().unwrap();
        assert_eq!(format!("{r:.1}"), "95.6");
        assert_eq!(retention(&[0.3, 0.5], &[0.3, 0.5]).unwrap(), Some(100.0));
        assert_eq!(retention(&[1.0], &[0.0]).unwrap(), None);
        assert!(retention(&[], &[1.0]).is_err());
    }

    #[test]
    fn report_serialization_has_footer() {
        let report = EvalReport {
            examples: vec![ExampleScore {
                prompt: "p".into(),
                reference: "a b".into(),
                candidate: "a".into(),
                rouge_l: rouge_l("a", "a b"),
            }],
            aggregates: Aggregates {
                mean_rouge_l_f: 2.0 / 3.0,
                perplexity: 3.5,
                retention_vs_teacher: None,
            },
        };
        let text = report.to_jsonl();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines.len(), 2);
        let footer: serde_json::Value = serde_json::from_str(lines[1]).unwrap();
        assert_eq!(footer["aggregates"]["perplexity"], 3.5);
        assert!(report.aggregates_csv().ends_with(",3.5,\n"));
    }
}

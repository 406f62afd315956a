use kdlab::data::{PromptRecord, EOS, VOCAB_SIZE};
use kdlab::evalmetrics::{evaluate, lcs_len, perplexity, retention, rouge_l, EvalSettings};
use kdlab::model::{ModelConfig, Transformer};
use kdlab::numerics::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// A model whose next-token distribution is the same at every position:
/// the final norm has zero gain, so logits = final_bias · W_out.
fn constant_model(log_probs: &[f64]) -> Transformer {
    let cfg = ModelConfig {
        vocab_size: VOCAB_SIZE,
        n_layers: 1,
        d_model: 2,
        n_heads: 1,
        max_seq_len: 32,
        mlp_hidden: 2,
    };
    let mut m = Transformer::new(cfg, 0).unwrap();
    m.params.final_gain = Tensor::zeros(&[2]);
    m.params.final_bias = Tensor::new(&[2], vec![1.0, 0.0]).unwrap();
    let mut w = vec![0.0; 2 * VOCAB_SIZE];
    w[..VOCAB_SIZE].copy_from_slice(log_probs);
    m.params.output_projection = Tensor::new(&[2, VOCAB_SIZE], w).unwrap();
    m
}

#[test]
fn perplexity_hand_example() {
    // p('a') = 1/2, p(EOS) = 1/4; completion "a" scores 'a' then EOS
    let rest = (0.25 / (VOCAB_SIZE - 2) as f64).ln();
    let mut lp = vec![rest; VOCAB_SIZE];
    lp[b'a' as usize] = 0.5f64.ln();
    lp[EOS as usize] = 0.25f64.ln();
    let m = constant_model(&lp);
    let ppl = perplexity(&m, &[PromptRecord::new("x", "a")]).unwrap();
    assert!((ppl - 2f64.powf(1.5)).abs() < 1e-12, "{ppl}");
    assert_eq!(format!("{ppl:.4}"), "2.8284");
}

#[test]
fn uniform_model_has_vocabulary_perplexity() {
    let m = constant_model(&[0.0; VOCAB_SIZE]);
    let recs = [PromptRecord::new("q", "some answer"), PromptRecord::new("r", "x")];
    let ppl = perplexity(&m, &recs).unwrap();
    assert!((ppl - VOCAB_SIZE as f64).abs() < 1e-9, "{ppl}");
    assert!(perplexity(&m, &[]).is_err());
}

#[test]
fn greedy_generation_feeds_rouge() {
    // argmax is 'a' until EOS would win: make EOS the mode so output is empty
    let mut lp = vec![-10.0; VOCAB_SIZE];
    lp[EOS as usize] = 0.0;
    let m = constant_model(&lp);
    let recs = [PromptRecord::new("q", "a b")];
    let rep = evaluate(&m, &recs, &EvalSettings::default(), Some(&[0.5])).unwrap();
    assert_eq!(rep.examples[0].candidate, "");
    assert_eq!(rep.aggregates.mean_rouge_l_f, 0.0);
    assert_eq!(rep.aggregates.retention_vs_teacher, Some(0.0));
}

/// Full-table DP written independently of the library's rolling version.
fn lcs_table(a: &[&str], b: &[&str]) -> usize {
    let mut t = vec![vec![0usize; b.len() + 1]; a.len() + 1];
    for i in 1..=a.len() {
        for j in 1..=b.len() {
            t[i][j] = if a[i - 1] == b[j - 1] {
                t[i - 1][j - 1] + 1
            } else {
                t[i - 1][j].max(t[i][j - 1])
            };
        }
    }
    t[a.len()][b.len()]
}

#[test]
fn rouge_matches_table_dp_on_random_pairs() {
    let vocab = ["the", "cat", "sat", "on", "mat", "a", "dog"];
    let mut r = ChaCha8Rng::seed_from_u64(9);
    for _ in 0..1000 {
        let mut sent = || -> Vec<&str> {
            (0..r.random_range(0..12))
                .map(|_| vocab[r.random_range(0..7)])
                .collect()
        };
        let (a, b) = (sent(), sent());
        let l = lcs_table(&a, &b);
        assert_eq!(lcs_len(&a, &b), l);
        let s = rouge_l(&a.join(" "), &b.join(" "));
        if a.is_empty() || b.is_empty() {
            assert_eq!(s.f, 0.0);
            continue;
        }
        let (p, rc) = (l as f64 / a.len() as f64, l as f64 / b.len() as f64);
        let f = if l == 0 { 0.0 } else { 2.0 * p * rc / (p + rc) };
        assert_eq!((s.precision, s.recall), (p, rc));
        assert!((s.f - f).abs() < 1e-15);
    }
}

#[test]
fn retention_reproduces_reported_ratios() {
    let r = |s: f64, t: f64| retention(&[s], &[t]).unwrap().unwrap();
    assert_eq!(format!("{:.1}", r(20.4, 27.1)), "75.3");
    assert_eq!(format!("{:.1}", r(19.7, 20.6)), "95.6");
}

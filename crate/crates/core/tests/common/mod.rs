#![allow(dead_code)]

use kdlab::model::{ModelConfig, Transformer};
use kdlab::numerics::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn tiny_config(vocab: usize, layers: usize, d: usize, heads: usize) -> ModelConfig {
    ModelConfig {
        vocab_size: vocab,
        n_layers: layers,
        d_model: d,
        n_heads: heads,
        max_seq_len: 16,
        mlp_hidden: 2 * d,
    }
}

/// A model whose weights are large enough that every sublayer matters
/// (the default init is nearly uniform).
pub fn lively_model(cfg: ModelConfig, seed: u64) -> Transformer {
    let mut m = Transformer::new(cfg, seed).unwrap();
    let mut r = rng(seed ^ 0x5eed);
    m.params.for_each_mut(|_, t| {
        let noise = Tensor::randn(t.shape(), 0.5, &mut r);
        for (v, n) in t.data_mut().iter_mut().zip(noise.data()) {
            *v += n;
        }
    });
    m
}

pub fn byte_model(layers: usize, d: usize, heads: usize, ctx: usize, seed: u64) -> Transformer {
    let cfg = ModelConfig {
        vocab_size: kdlab::data::VOCAB_SIZE,
        n_layers: layers,
        d_model: d,
        n_heads: heads,
        max_seq_len: ctx,
        mlp_hidden: 4 * d,
    };
    Transformer::new(cfg, seed).unwrap()
}

use kdlab::data::TokenId;
use kdlab::model::{Policy, Trainable};

/// Context-free categorical per position: `logits[pos]` scores the token at
/// absolute index `offset + pos`. Only the position matters, not the
/// preceding tokens.
#[derive(Clone, Debug, PartialEq)]
pub struct PositionalPolicy {
    pub vocab: usize,
    pub offset: usize,
    pub logits: Vec<f64>,
}

pub fn log_softmax(v: &[f64]) -> Vec<f64> {
    let m = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + v.iter().map(|x| (x - m).exp()).sum::<f64>().ln();
    v.iter().map(|x| x - lse).collect()
}

impl PositionalPolicy {
    pub fn new(vocab: usize, offset: usize, positions: usize) -> Self {
        PositionalPolicy {
            vocab,
            offset,
            logits: vec![0.0; vocab * positions],
        }
    }

    pub fn positions(&self) -> usize {
        self.logits.len() / self.vocab
    }

    pub fn row(&self, pos: usize) -> &[f64] {
        &self.logits[pos * self.vocab..(pos + 1) * self.vocab]
    }

    pub fn probs(&self, pos: usize) -> Vec<f64> {
        log_softmax(self.row(pos)).iter().map(|l| l.exp()).collect()
    }

    fn pos(&self, t: usize) -> kdlab::Result<usize> {
        t.checked_sub(self.offset)
            .filter(|&p| p < self.positions())
            .ok_or_else(|| kdlab::Error::Input(format!("position {t} outside policy")))
    }
}

impl Policy for PositionalPolicy {
    fn vocab_size(&self) -> usize {
        self.vocab
    }

    fn context_len(&self) -> usize {
        self.offset + self.positions()
    }

    fn next_token_logits(&self, context: &[TokenId]) -> kdlab::Result<Vec<f64>> {
        Ok(self.row(self.pos(context.len())?).to_vec())
    }

    fn completion_log_probs(&self, tokens: &[TokenId], prompt_len: usize) -> kdlab::Result<Vec<f64>> {
        (prompt_len..tokens.len())
            .map(|t| Ok(log_softmax(self.row(self.pos(t)?))[tokens[t] as usize]))
            .collect()
    }

    fn weighted_log_prob_grad(
        &self,
        tokens: &[TokenId],
        prompt_len: usize,
        weights: &[f64],
    ) -> kdlab::Result<(Vec<f64>, Vec<f64>)> {
        let mut grad = vec![0.0; self.logits.len()];
        let mut lps = Vec::new();
        for (t, w) in (prompt_len..tokens.len()).zip(weights) {
            let p = self.pos(t)?;
            let ls = log_softmax(self.row(p));
            lps.push(ls[tokens[t] as usize]);
            for (v, l) in ls.iter().enumerate() {
                let onehot = if v == tokens[t] as usize { 1.0 } else { 0.0 };
                grad[p * self.vocab + v] += w * (onehot - l.exp());
            }
        }
        Ok((lps, grad))
    }
}

impl Trainable for PositionalPolicy {
    fn param_count(&self) -> usize {
        self.logits.len()
    }

    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut [f64])) {
        f(&mut self.logits);
    }
}

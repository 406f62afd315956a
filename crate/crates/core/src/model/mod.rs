//! Tiny decoder-only transformer.
//!
//! Block layout (pre-norm):
//!
//! ```text
//! x   = tok_emb[ids] + pos_emb[0..T]
//! x  += Wo · concat_h( causal_softmax(Q_h K_hᵀ / √d_k) V_h ),  Q,K,V = LN1(x)·{Wq,Wk,Wv}
//! x  += W2 · gelu(W1 · LN2(x) + b1) + b2
//! out = LN_f(x) · W_out
//! ```

mod params;
mod policy;

pub use params::{is_linear_weight, param_shapes, LayerParams, ModelConfig, Params, TransformerParams};
pub use policy::{sample, GenerationSettings, Policy, Trainable};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::TokenId;
use crate::error::{Error, Result};
use crate::numerics::{Graph, Tensor, Var};

/// Receives `(weight name, input matrix)` for every linear map evaluated
/// during a forward pass.
pub type LinearObserver<'a> = &'a mut dyn FnMut(&str, &Tensor);

#[derive(Clone, Debug, PartialEq)]
pub struct Transformer {
    pub config: ModelConfig,
    pub params: TransformerParams,
}

impl Transformer {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params = TransformerParams::init(&config, &mut rng);
        Ok(Transformer { config, params })
    }

    pub fn from_params(config: ModelConfig, params: TransformerParams) -> Result<Self> {
        config.validate()?;
        params.check_shapes(&config)?;
        Ok(Transformer { config, params })
    }

    pub fn param_count(&self) -> usize {
        self.params.param_count()
    }

    pub fn checksum(&self) -> String {
        self.params.checksum()
    }

    fn check_tokens(&self, tokens: &[TokenId]) -> Result<Vec<usize>> {
        if tokens.is_empty() {
            return Err(Error::Input("empty token sequence".into()));
        }
        if tokens.len() > self.config.max_seq_len {
            return Err(Error::Input(format!(
                "sequence of {} tokens exceeds max_seq_len {}",
                tokens.len(),
                self.config.max_seq_len
            )));
        }
        tokens
            .iter()
            .map(|&t| {
                let t = t as usize;
                if t >= self.config.vocab_size {
                    Err(Error::Input(format!(
                        "token id {t} out of range for vocab {}",
                        self.config.vocab_size
                    )))
                } else {
                    Ok(t)
                }
            })
            .collect()
    }

    /// Records the forward pass on `g` and returns logits `[T × vocab]`.
    pub fn forward(&self, g: &mut Graph, p: &Params<Var>, tokens: &[TokenId]) -> Result<Var> {
        self.forward_observed(g, p, tokens, None)
    }

    pub fn forward_observed(
        &self,
        g: &mut Graph,
        p: &Params<Var>,
        tokens: &[TokenId],
        mut observer: Option<LinearObserver<'_>>,
    ) -> Result<Var> {
        let ids = self.check_tokens(tokens)?;
        let cfg = &self.config;
        let positions: Vec<usize> = (0..ids.len()).collect();
        let tok = g.embedding(p.token_embedding, &ids)?;
        let pos = g.embedding(p.position_embedding, &positions)?;
        let mut x = g.add(tok, pos)?;
        let dk = cfg.d_k();
        let inv_sqrt_dk = 1.0 / (dk as f64).sqrt();

        let mut observe = |g: &Graph, i: usize, field: &str, input: Var| {
            if let Some(obs) = observer.as_mut() {
                obs(&format!("layers.{i}.{field}"), g.value(input));
            }
        };

        for (i, layer) in p.layers.iter().enumerate() {
            let h = g.layer_norm(x, layer.ln1_gain, layer.ln1_bias)?;
            for f in ["attn.wq", "attn.wk", "attn.wv"] {
                observe(g, i, f, h);
            }
            let q = g.matmul(h, layer.wq)?;
            let k = g.matmul(h, layer.wk)?;
            let v = g.matmul(h, layer.wv)?;
            let mut heads = Vec::with_capacity(cfg.n_heads);
            for head in 0..cfg.n_heads {
                let qh = g.slice_cols(q, head * dk, dk)?;
                let kh = g.slice_cols(k, head * dk, dk)?;
                let vh = g.slice_cols(v, head * dk, dk)?;
                let scores = g.matmul_bt(qh, kh)?;
                let scores = g.scale(scores, inv_sqrt_dk);
                let weights = g.causal_softmax(scores)?;
                heads.push(g.matmul(weights, vh)?);
            }
            let attn = if heads.len() == 1 {
                heads[0]
            } else {
                g.concat_cols(&heads)?
            };
            observe(g, i, "attn.wo", attn);
            let attn_out = g.matmul(attn, layer.wo)?;
            x = g.add(x, attn_out)?;

            let h2 = g.layer_norm(x, layer.ln2_gain, layer.ln2_bias)?;
            observe(g, i, "mlp.w1", h2);
            let hidden = g.matmul(h2, layer.w1)?;
            let hidden = g.add_row(hidden, layer.b1)?;
            let hidden = g.gelu(hidden);
            observe(g, i, "mlp.w2", hidden);
            let mlp = g.matmul(hidden, layer.w2)?;
            let mlp = g.add_row(mlp, layer.b2)?;
            x = g.add(x, mlp)?;
        }
        let xf = g.layer_norm(x, p.final_gain, p.final_bias)?;
        if let Some(obs) = observer.as_mut() {
            obs("output_projection", g.value(xf));
        }
        g.matmul(xf, p.output_projection)
    }

    /// Next-token logits at every position, `[T × vocab]`.
    pub fn forward_logits(&self, tokens: &[TokenId]) -> Result<Tensor> {
        let mut g = Graph::new();
        let p = self.params.bind_const(&mut g);
        let logits = self.forward(&mut g, &p, tokens)?;
        Ok(g.value(logits).clone())
    }

    /// `log p(tokens[t] | tokens[..t])` for every `t >= prompt_len`.
    pub fn sequence_log_probs(&self, tokens: &[TokenId], prompt_len: usize) -> Result<Vec<f64>> {
        check_prompt_len(tokens, prompt_len)?;
        let logits = self.forward_logits(&tokens[..tokens.len() - 1])?;
        let ls = crate::numerics::log_softmax_rows(&logits);
        Ok((prompt_len..tokens.len())
            .map(|t| ls.at(t - 1, tokens[t] as usize))
            .collect())
    }
}

pub(crate) fn check_prompt_len(tokens: &[TokenId], prompt_len: usize) -> Result<()> {
    if prompt_len == 0 || prompt_len >= tokens.len() {
        return Err(Error::Contract(format!(
            "prompt_len {prompt_len} must be in 1..{}",
            tokens.len()
        )));
    }
    Ok(())
}

/// Mean negative log-likelihood over positions where `mask` is true.
///
/// Row `t` of `logits` is scored against `targets[t]`.
pub fn lm_loss(g: &mut Graph, logits: Var, targets: &[TokenId], mask: &[bool]) -> Result<Var> {
    let rows = g.value(logits).dims2().0;
    if targets.len() != rows || mask.len() != rows {
        return Err(Error::shape("lm_loss", g.shape(logits), &[targets.len(), mask.len()]));
    }
    let count = mask.iter().filter(|&&m| m).count();
    if count == 0 {
        return Err(Error::Contract("lm_loss over an all-masked sequence".into()));
    }
    let w = 1.0 / count as f64;
    let weights: Vec<f64> = mask.iter().map(|&m| if m { w } else { 0.0 }).collect();
    let targets: Vec<usize> = targets.iter().map(|&t| t as usize).collect();
    g.cross_entropy(logits, &targets, &weights)
}

use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::numerics::{Graph, Tensor, Var};

/// Architecture hyperparameters of a decoder-only transformer.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub n_layers: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub max_seq_len: usize,
    pub mlp_hidden: usize,
}

impl ModelConfig {
    /// Default desk-scale teacher: 4 layers, width 128, 4 heads.
    pub fn teacher() -> Self {
        ModelConfig {
            vocab_size: crate::data::VOCAB_SIZE,
            n_layers: 4,
            d_model: 128,
            n_heads: 4,
            max_seq_len: 128,
            mlp_hidden: 512,
        }
    }

    /// Default desk-scale student: 2 layers, width 64, 2 heads.
    pub fn student() -> Self {
        ModelConfig {
            vocab_size: crate::data::VOCAB_SIZE,
            n_layers: 2,
            d_model: 64,
            n_heads: 2,
            max_seq_len: 128,
            mlp_hidden: 256,
        }
    }

    pub fn d_k(&self) -> usize {
        self.d_model / self.n_heads
    }

    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("vocab_size", self.vocab_size),
            ("n_layers", self.n_layers),
            ("d_model", self.d_model),
            ("n_heads", self.n_heads),
            ("mlp_hidden", self.mlp_hidden),
        ];
        if let Some((name, _)) = counts.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("model.{name} must be >= 1")));
        }
        if !self.d_model.is_multiple_of(self.n_heads) {
            return Err(Error::Config(format!(
                "d_model {} is not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if self.max_seq_len < 2 {
            return Err(Error::Config("max_seq_len must be >= 2".into()));
        }
        Ok(())
    }
}

/// Weights of one pre-norm block.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerParams<T> {
    pub ln1_gain: T,
    pub ln1_bias: T,
    pub wq: T,
    pub wk: T,
    pub wv: T,
    pub wo: T,
    pub ln2_gain: T,
    pub ln2_bias: T,
    pub w1: T,
    pub b1: T,
    pub w2: T,
    pub b2: T,
}

const LAYER_FIELDS: [&str; 12] = [
    "ln1.gain", "ln1.bias", "attn.wq", "attn.wk", "attn.wv", "attn.wo", "ln2.gain", "ln2.bias", "mlp.w1", "mlp.b1",
    "mlp.w2", "mlp.b2",
];

impl<T> LayerParams<T> {
    fn refs(&self) -> [&T; 12] {
        [
            &self.ln1_gain,
            &self.ln1_bias,
            &self.wq,
            &self.wk,
            &self.wv,
            &self.wo,
            &self.ln2_gain,
            &self.ln2_bias,
            &self.w1,
            &self.b1,
            &self.w2,
            &self.b2,
        ]
    }

    fn refs_mut(&mut self) -> [&mut T; 12] {
        [
            &mut self.ln1_gain,
            &mut self.ln1_bias,
            &mut self.wq,
            &mut self.wk,
            &mut self.wv,
            &mut self.wo,
            &mut self.ln2_gain,
            &mut self.ln2_bias,
            &mut self.w1,
            &mut self.b1,
            &mut self.w2,
            &mut self.b2,
        ]
    }

    fn from_array(a: [T; 12]) -> Self {
        let [ln1_gain, ln1_bias, wq, wk, wv, wo, ln2_gain, ln2_bias, w1, b1, w2, b2] = a;
        LayerParams {
            ln1_gain,
            ln1_bias,
            wq,
            wk,
            wv,
            wo,
            ln2_gain,
            ln2_bias,
            w1,
            b1,
            w2,
            b2,
        }
    }
}

/// All learnable weights, generic over the leaf type so the same layout
/// serves stored tensors (`Params<Tensor>`) and graph handles (`Params<Var>`).
///
/// Linear weights are stored input-major: `[d_in × d_out]`, applied as `x · W`.
#[derive(Clone, Debug, PartialEq)]
pub struct Params<T> {
    pub token_embedding: T,
    pub position_embedding: T,
    pub layers: Vec<LayerParams<T>>,
    pub final_gain: T,
    pub final_bias: T,
    pub output_projection: T,
}

pub type TransformerParams = Params<Tensor>;

impl<T> Params<T> {
    /// Visits every leaf in canonical order with its checkpoint name.
    pub fn for_each<'a>(&'a self, mut f: impl FnMut(&str, &'a T)) {
        f("token_embedding", &self.token_embedding);
        f("position_embedding", &self.position_embedding);
        for (i, layer) in self.layers.iter().enumerate() {
            for (field, t) in LAYER_FIELDS.iter().zip(layer.refs()) {
                f(&format!("layers.{i}.{field}"), t);
            }
        }
        f("final_norm.gain", &self.final_gain);
        f("final_norm.bias", &self.final_bias);
        f("output_projection", &self.output_projection);
    }

    pub fn for_each_mut(&mut self, mut f: impl FnMut(&str, &mut T)) {
        f("token_embedding", &mut self.token_embedding);
        f("position_embedding", &mut self.position_embedding);
        for (i, layer) in self.layers.iter_mut().enumerate() {
            for (field, t) in LAYER_FIELDS.iter().zip(layer.refs_mut()) {
                f(&format!("layers.{i}.{field}"), t);
            }
        }
        f("final_norm.gain", &mut self.final_gain);
        f("final_norm.bias", &mut self.final_bias);
        f("output_projection", &mut self.output_projection);
    }

    pub fn try_map<U, E>(&self, mut f: impl FnMut(&str, &T) -> Result<U, E>) -> Result<Params<U>, E> {
        let token_embedding = f("token_embedding", &self.token_embedding)?;
        let position_embedding = f("position_embedding", &self.position_embedding)?;
        let mut layers = Vec::with_capacity(self.layers.len());
        for (i, layer) in self.layers.iter().enumerate() {
            let mut out = Vec::with_capacity(12);
            for (field, t) in LAYER_FIELDS.iter().zip(layer.refs()) {
                out.push(f(&format!("layers.{i}.{field}"), t)?);
            }
            let arr: [U; 12] = out.try_into().ok().expect("12 fields");
            layers.push(LayerParams::from_array(arr));
        }
        Ok(Params {
            token_embedding,
            position_embedding,
            layers,
            final_gain: f("final_norm.gain", &self.final_gain)?,
            final_bias: f("final_norm.bias", &self.final_bias)?,
            output_projection: f("output_projection", &self.output_projection)?,
        })
    }

    pub fn names(&self) -> Vec<String> {
        let mut out = Vec::new();
        self.for_each(|n, _| out.push(n.to_string()));
        out
    }
}

/// Whether a parameter name refers to a 2-D linear map (the quantizable set).
pub fn is_linear_weight(name: &str) -> bool {
    name == "output_projection"
        || name.ends_with(".attn.wq")
        || name.ends_with(".attn.wk")
        || name.ends_with(".attn.wv")
        || name.ends_with(".attn.wo")
        || name.ends_with(".mlp.w1")
        || name.ends_with(".mlp.w2")
}

/// Expected shape of every parameter for a config.
pub fn param_shapes(cfg: &ModelConfig) -> Params<Vec<usize>> {
    let d = cfg.d_model;
    let layer = LayerParams {
        ln1_gain: vec![d],
        ln1_bias: vec![d],
        wq: vec![d, d],
        wk: vec![d, d],
        wv: vec![d, d],
        wo: vec![d, d],
        ln2_gain: vec![d],
        ln2_bias: vec![d],
        w1: vec![d, cfg.mlp_hidden],
        b1: vec![cfg.mlp_hidden],
        w2: vec![cfg.mlp_hidden, d],
        b2: vec![d],
    };
    Params {
        token_embedding: vec![cfg.vocab_size, d],
        position_embedding: vec![cfg.max_seq_len, d],
        layers: vec![layer; cfg.n_layers],
        final_gain: vec![d],
        final_bias: vec![d],
        output_projection: vec![d, cfg.vocab_size],
    }
}

const INIT_STD: f64 = 0.02;

impl TransformerParams {
    /// Gaussian(0, 0.02) weights, unit norm gains, zero biases. Residual
    /// output projections (`attn.wo`, `mlp.w2`) use std `0.02/√(2·n_layers)`.
    pub fn init<R: Rng + ?Sized>(cfg: &ModelConfig, rng: &mut R) -> Self {
        let resid_std = INIT_STD / (2.0 * cfg.n_layers as f64).sqrt();
        let shapes = param_shapes(cfg);
        shapes
            .try_map::<Tensor, std::convert::Infallible>(|name, shape| {
                let t = if name.ends_with(".gain") {
                    Tensor::full(shape, 1.0)
                } else if name.ends_with(".bias") || name.ends_with(".b1") || name.ends_with(".b2") {
                    Tensor::zeros(shape)
                } else if name.ends_with(".attn.wo") || name.ends_with(".mlp.w2") {
                    Tensor::randn(shape, resid_std, rng)
                } else {
                    Tensor::randn(shape, INIT_STD, rng)
                };
                Ok(t)
            })
            .unwrap_or_else(|e| match e {})
    }

    pub fn check_shapes(&self, cfg: &ModelConfig) -> Result<()> {
        let expected = param_shapes(cfg);
        let mut want = Vec::new();
        expected.for_each(|n, s| want.push((n.to_string(), s.clone())));
        let mut i = 0;
        let mut err = None;
        self.for_each(|n, t| {
            if err.is_none() && (want[i].0 != n || want[i].1 != t.shape()) {
                err = Some(Error::shape("parameter", &want[i].1, t.shape()));
            }
            i += 1;
        });
        err.map_or(Ok(()), Err)
    }

    pub fn param_count(&self) -> usize {
        let mut n = 0;
        self.for_each(|_, t| n += t.numel());
        n
    }

    /// Binds every tensor as a gradient-tracked leaf.
    pub fn bind(&self, g: &mut Graph) -> Params<Var> {
        self.try_map::<Var, std::convert::Infallible>(|_, t| Ok(g.param(t.clone())))
            .unwrap_or_else(|e| match e {})
    }

    /// Binds every tensor as a constant.
    pub fn bind_const(&self, g: &mut Graph) -> Params<Var> {
        self.try_map::<Var, std::convert::Infallible>(|_, t| Ok(g.constant(t.clone())))
            .unwrap_or_else(|e| match e {})
    }

    /// SHA-256 over the little-endian bytes of every parameter.
    pub fn checksum(&self) -> String {
        let mut h = Sha256::new();
        self.for_each(|name, t| {
            h.update(name.as_bytes());
            for v in t.data() {
                h.update(v.to_le_bytes());
            }
        });
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }
}

impl Params<Var> {
    /// Concatenates leaf gradients in canonical order; untouched leaves
    /// contribute zeros.
    pub fn flat_grads(&self, g: &Graph) -> Vec<f64> {
        let mut out = Vec::new();
        self.for_each(|_, v| match g.grad(*v) {
            Some(d) => out.extend_from_slice(d),
            None => out.extend(std::iter::repeat_n(0.0, g.value(*v).numel())),
        });
        out
    }
}

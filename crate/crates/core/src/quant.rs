//! Post-training weight quantization: affine min-max codes, round-to-nearest
//! and GPTQ-style layer-wise error propagation.
//!
//! Layers are handled in "output-major" orientation `W: [rows × cols]` with
//! `y = W·x`, so groups run along the input dimension of each output row.
//! The model stores linear weights input-major, so [`quantize_model`]
//! transposes on the way in and out.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::data::{frame_record, PromptRecord, Tokenizer};
use crate::error::{Error, Result};
use crate::model::{is_linear_weight, Transformer};
use crate::numerics::{matmul, Tensor};

/// Scale used when a group's range collapses to a single value.
pub const DEGENERATE_SCALE: f64 = 1e-8;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct QuantConfig {
    pub bits: u8,
    /// Weights per shared (scale, zero) pair along a row; 0 = whole row.
    pub group_size: usize,
    /// Diagonal damping as a fraction of the mean Hessian diagonal.
    pub damping: f64,
    pub calibration_samples: usize,
    pub symmetric: bool,
}

impl Default for QuantConfig {
    fn default() -> Self {
        QuantConfig {
            bits: 4,
            group_size: 32,
            damping: 0.01,
            calibration_samples: 32,
            symmetric: false,
        }
    }
}

impl QuantConfig {
    pub fn validate(&self) -> Result<()> {
        if !(2..=8).contains(&self.bits) {
            return Err(Error::Config(format!("bits must be in 2..=8, got {}", self.bits)));
        }
        if !(self.damping > 0.0) || !self.damping.is_finite() {
            return Err(Error::Config(format!("damping must be > 0, got {}", self.damping)));
        }
        Ok(())
    }

    pub fn q_max(&self) -> u8 {
        q_max(self.bits)
    }

    fn effective_group(&self, cols: usize) -> usize {
        if self.group_size == 0 {
            cols
        } else {
            self.group_size.min(cols)
        }
    }
}

fn q_max(bits: u8) -> u8 {
    ((1u16 << bits) - 1) as u8
}

/// Min-max affine fit for one group, with the range widened to contain 0.
///
/// `s = (max − min) / q_max`, `z = clamp(round(−min / s), 0, q_max)`. When
/// the (widened) range is empty — an all-zero group — `s = 1e-8` and `z` is
/// the midpoint. Widening to include 0 makes zero exactly representable and
/// lets constant groups reconstruct exactly.
pub fn fit_scale_zero(group: &[f64], bits: u8) -> (f64, u8) {
    let qm = q_max(bits);
    let (lo, hi) = group
        .iter()
        .fold((0.0f64, 0.0f64), |(lo, hi), &w| (lo.min(w), hi.max(w)));
    if hi == lo {
        return (DEGENERATE_SCALE, (f64::from(qm) / 2.0).round() as u8);
    }
    let s = (hi - lo) / f64::from(qm);
    let z = (-lo / s).round().clamp(0.0, f64::from(qm)) as u8;
    (s, z)
}

/// Symmetric fit: `z` at the midpoint, `s` so that `max|w|` maps to the top code.
pub fn fit_scale_zero_symmetric(group: &[f64], bits: u8) -> (f64, u8) {
    let qm = q_max(bits);
    let z = (f64::from(qm) / 2.0).round() as u8;
    let amax = group.iter().fold(0.0f64, |m, w| m.max(w.abs()));
    if amax == 0.0 {
        return (DEGENERATE_SCALE, z);
    }
    (amax / f64::from(qm - z), z)
}

/// `code = clamp(round(w/s) + z, 0, q_max)` with ties away from zero, and
/// `w̃ = s·(code − z)`.
pub fn quantize_dequantize(w: f64, s: f64, z: u8, bits: u8) -> (u8, f64) {
    let code = ((w / s).round() + f64::from(z)).clamp(0.0, f64::from(q_max(bits))) as u8;
    (code, dequantize_code(code, s, z))
}

pub fn dequantize_code(code: u8, s: f64, z: u8) -> f64 {
    s * (f64::from(code) - f64::from(z))
}

/// Packs 4-bit codes two per byte; element `2k` is the low nibble of byte `k`.
pub fn pack_nibbles(codes: &[u8]) -> Vec<u8> {
    codes
        .chunks(2)
        .map(|c| (c[0] & 0x0f) | (c.get(1).copied().unwrap_or(0) << 4))
        .collect()
}

pub fn unpack_nibbles(bytes: &[u8], n: usize) -> Vec<u8> {
    (0..n)
        .map(|i| {
            let b = bytes[i / 2];
            if i.is_multiple_of(2) {
                b & 0x0f
            } else {
                b >> 4
            }
        })
        .collect()
}

/// Bytes for `n` codes at `bits` (nibble-packed for ≤ 4 bits, else one byte each).
pub fn packed_len(n: usize, bits: u8) -> usize {
    if bits <= 4 {
        n.div_ceil(2)
    } else {
        n
    }
}

fn pack(codes: &[u8], bits: u8) -> Vec<u8> {
    if bits <= 4 {
        pack_nibbles(codes)
    } else {
        codes.to_vec()
    }
}

fn unpack(bytes: &[u8], n: usize, bits: u8) -> Vec<u8> {
    if bits <= 4 {
        unpack_nibbles(bytes, n)
    } else {
        bytes[..n].to_vec()
    }
}

/// Scales are stored in single precision; quantizers use the stored value.
fn storable(s: f64) -> f64 {
    f64::from(s as f32)
}

/// Bit-packed integer weights with per-group scale and zero-point.
#[derive(Clone, Debug, PartialEq)]
pub struct QuantizedLinear {
    rows: usize,
    cols: usize,
    bits: u8,
    group_size: usize,
    packed: Vec<u8>,
    scales: Vec<f64>,
    zeros: Vec<u8>,
}

impl QuantizedLinear {
    /// Assembles a layer from unpacked codes (row-major), per-group scales
    /// and zero-points (`rows × n_groups`).
    pub fn from_parts(
        rows: usize,
        cols: usize,
        bits: u8,
        group_size: usize,
        codes: &[u8],
        scales: Vec<f64>,
        zeros: Vec<u8>,
    ) -> Result<Self> {
        if rows == 0 || cols == 0 || group_size == 0 || group_size > cols {
            return Err(Error::Contract(format!(
                "bad quantized layer geometry {rows}x{cols} with group {group_size}"
            )));
        }
        let qm = q_max(bits);
        let groups = rows * cols.div_ceil(group_size);
        if codes.len() != rows * cols {
            return Err(Error::shape("quantized codes", &[rows, cols], &[codes.len()]));
        }
        if scales.len() != groups || zeros.len() != groups {
            return Err(Error::shape(
                "quantized groups",
                &[groups],
                &[scales.len(), zeros.len()],
            ));
        }
        if let Some(c) = codes.iter().chain(&zeros).find(|&&c| c > qm) {
            return Err(Error::Contract(format!("code {c} exceeds {qm} for {bits} bits")));
        }
        if let Some(s) = scales.iter().find(|s| !(**s > 0.0) || !s.is_finite()) {
            return Err(Error::Contract(format!("scale {s} must be positive and finite")));
        }
        Ok(QuantizedLinear {
            rows,
            cols,
            bits,
            group_size,
            packed: pack(codes, bits),
            scales,
            zeros,
        })
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn bits(&self) -> u8 {
        self.bits
    }

    pub fn group_size(&self) -> usize {
        self.group_size
    }

    pub fn groups_per_row(&self) -> usize {
        self.cols.div_ceil(self.group_size)
    }

    pub fn packed_codes(&self) -> &[u8] {
        &self.packed
    }

    pub fn codes(&self) -> Vec<u8> {
        unpack(&self.packed, self.rows * self.cols, self.bits)
    }

    pub fn scales(&self) -> &[f64] {
        &self.scales
    }

    pub fn zeros(&self) -> &[u8] {
        &self.zeros
    }

    pub fn code(&self, r: usize, c: usize) -> u8 {
        let i = r * self.cols + c;
        if self.bits <= 4 {
            let b = self.packed[i / 2];
            if i.is_multiple_of(2) {
                b & 0x0f
            } else {
                b >> 4
            }
        } else {
            self.packed[i]
        }
    }

    fn group_index(&self, r: usize, c: usize) -> usize {
        r * self.groups_per_row() + c / self.group_size
    }

    pub fn weight(&self, r: usize, c: usize) -> f64 {
        let g = self.group_index(r, c);
        dequantize_code(self.code(r, c), self.scales[g], self.zeros[g])
    }

    pub fn dequantize(&self) -> Tensor {
        let data = (0..self.rows)
            .flat_map(|r| (0..self.cols).map(move |c| (r, c)))
            .map(|(r, c)| self.weight(r, c))
            .collect();
        Tensor::new(&[self.rows, self.cols], data).expect("shape matches")
    }

    /// Storage of codes + f32 scales + packed zero-points.
    pub fn storage_bytes(&self) -> usize {
        self.packed.len() + 4 * self.scales.len() + packed_len(self.zeros.len(), self.bits)
    }

    /// Storage of the same matrix as 32-bit floats.
    pub fn full_precision_bytes(&self) -> usize {
        4 * self.rows * self.cols
    }
}

/// `W̃ · x` evaluated directly from codes, `x: [cols × n]`.
pub fn quantized_forward(q: &QuantizedLinear, x: &Tensor) -> Result<Tensor> {
    let (k, n) = x.dims2();
    if k != q.cols {
        return Err(Error::shape("quantized_forward", &[q.rows, q.cols], x.shape()));
    }
    let mut out = vec![0.0; q.rows * n];
    for r in 0..q.rows {
        let o = &mut out[r * n..(r + 1) * n];
        for c in 0..q.cols {
            let w = q.weight(r, c);
            for (oj, xj) in o.iter_mut().zip(x.row(c)) {
                *oj += w * xj;
            }
        }
    }
    Tensor::new(&[q.rows, n], out)
}

/// Incremental builder shared by RTN and GPTQ: fits groups on demand and
/// records codes column by column.
struct LayerBuilder<'a> {
    cfg: &'a QuantConfig,
    rows: usize,
    cols: usize,
    group: usize,
    codes: Vec<u8>,
    scales: Vec<f64>,
    zeros: Vec<u8>,
}

impl<'a> LayerBuilder<'a> {
    fn new(cfg: &'a QuantConfig, rows: usize, cols: usize) -> Self {
        let group = cfg.effective_group(cols);
        let n_groups = rows * cols.div_ceil(group);
        LayerBuilder {
            cfg,
            rows,
            cols,
            group,
            codes: vec![0; rows * cols],
            scales: vec![0.0; n_groups],
            zeros: vec![0; n_groups],
        }
    }

    fn fit(&mut self, r: usize, first_col: usize, values: &[f64]) {
        let (s, z) = if self.cfg.symmetric {
            fit_scale_zero_symmetric(values, self.cfg.bits)
        } else {
            fit_scale_zero(values, self.cfg.bits)
        };
        let g = r * self.cols.div_ceil(self.group) + first_col / self.group;
        self.scales[g] = storable(s);
        self.zeros[g] = z;
    }

    fn quantize(&mut self, r: usize, c: usize, w: f64) -> f64 {
        let g = r * self.cols.div_ceil(self.group) + c / self.group;
        let (code, deq) = quantize_dequantize(w, self.scales[g], self.zeros[g], self.cfg.bits);
        self.codes[r * self.cols + c] = code;
        deq
    }

    fn finish(self) -> Result<QuantizedLinear> {
        QuantizedLinear::from_parts(
            self.rows,
            self.cols,
            self.cfg.bits,
            self.group,
            &self.codes,
            self.scales,
            self.zeros,
        )
    }
}

/// Round-to-nearest: each group fitted on the original weights and every
/// weight rounded independently.
pub fn rtn_quantize_layer(w: &Tensor, cfg: &QuantConfig) -> Result<QuantizedLinear> {
    cfg.validate()?;
    let (rows, cols) = w.dims2();
    let mut b = LayerBuilder::new(cfg, rows, cols);
    for r in 0..rows {
        let row = w.row(r);
        for start in (0..cols).step_by(b.group) {
            let end = (start + b.group).min(cols);
            b.fit(r, start, &row[start..end]);
            for (c, &wv) in row.iter().enumerate().take(end).skip(start) {
                b.quantize(r, c, wv);
            }
        }
    }
    b.finish()
}

/// Per-layer line of a quantization report.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerReport {
    pub layer: String,
    /// `‖WX − W̃X‖²_F` for the GPTQ result.
    pub error_gptq: f64,
    /// The same objective for round-to-nearest on identical inputs.
    pub error_rtn: f64,
    pub bits: u8,
    pub bytes_before: usize,
    pub bytes_after: usize,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct QuantReport {
    pub layers: Vec<LayerReport>,
}

impl QuantReport {
    pub fn bytes_before(&self) -> usize {
        self.layers.iter().map(|l| l.bytes_before).sum()
    }

    pub fn bytes_after(&self) -> usize {
        self.layers.iter().map(|l| l.bytes_after).sum()
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("layer,error_gptq,error_rtn,bytes_before,bytes_after\n");
        for l in &self.layers {
            let _ = writeln!(
                out,
                "{},{},{},{},{}",
                l.layer, l.error_gptq, l.error_rtn, l.bytes_before, l.bytes_after
            );
        }
        out
    }
}

/// `‖(W − W̃) X‖²_F` for `W: [r × c]`, `X: [c × n]`.
pub fn reconstruction_error(w: &Tensor, w_hat: &Tensor, x: &Tensor) -> Result<f64> {
    let a = matmul(w, x)?;
    let b = matmul(w_hat, x)?;
    Ok(a.data().iter().zip(b.data()).map(|(p, q)| (p - q) * (p - q)).sum())
}

/// Same objective from the Gram form `h0 = 2·X·Xᵀ`: `Σ_r Δ_r (h0/2) Δ_rᵀ`.
fn gram_error(w: &Tensor, w_hat: &Tensor, h0: &[f64]) -> f64 {
    let (rows, cols) = w.dims2();
    let mut total = 0.0;
    let mut d = vec![0.0; cols];
    for r in 0..rows {
        for (c, dc) in d.iter_mut().enumerate() {
            *dc = w.at(r, c) - w_hat.at(r, c);
        }
        for i in 0..cols {
            let hi = &h0[i * cols..(i + 1) * cols];
            let dot: f64 = hi.iter().zip(&d).map(|(h, dj)| h * dj).sum();
            total += 0.5 * d[i] * dot;
        }
    }
    total.max(0.0)
}

/// Lower Cholesky factor of a symmetric positive definite `n × n` matrix.
fn cholesky(a: &[f64], n: usize) -> Option<Vec<f64>> {
    let mut l = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..=i {
            let mut s = a[i * n + j];
            for k in 0..j {
                s -= l[i * n + k] * l[j * n + k];
            }
            if i == j {
                if !(s > 0.0) || !s.is_finite() {
                    return None;
                }
                l[i * n + i] = s.sqrt();
            } else {
                l[i * n + j] = s / l[j * n + j];
            }
        }
    }
    Some(l)
}

/// Upper factor `U` with `H⁻¹ = Uᵀ·U`, via `H = L·Lᵀ`, `H⁻¹ = L⁻ᵀ·L⁻¹`.
fn inverse_upper_factor(h: &[f64], n: usize) -> Option<Vec<f64>> {
    let l = cholesky(h, n)?;
    // L⁻¹ by forward substitution, column by column
    let mut linv = vec![0.0; n * n];
    for col in 0..n {
        for i in col..n {
            let mut s = if i == col { 1.0 } else { 0.0 };
            for k in col..i {
                s -= l[i * n + k] * linv[k * n + col];
            }
            linv[i * n + col] = s / l[i * n + i];
        }
    }
    let mut hinv = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..=i {
            let start = i.max(j);
            let s: f64 = (start..n).map(|k| linv[k * n + i] * linv[k * n + j]).sum();
            hinv[i * n + j] = s;
            hinv[j * n + i] = s;
        }
    }
    let lh = cholesky(&hinv, n)?;
    let mut u = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..=i {
            u[j * n + i] = lh[i * n + j];
        }
    }
    Some(u)
}

const MAX_DAMPING_RETRIES: u32 = 3;

/// GPTQ from a precomputed `h0 = 2·X·Xᵀ` (`cols × cols`, undamped).
fn gptq_from_gram(w: &Tensor, h0: &[f64], cfg: &QuantConfig) -> Result<QuantizedLinear> {
    cfg.validate()?;
    let (rows, cols) = w.dims2();
    if h0.len() != cols * cols {
        return Err(Error::shape("gptq hessian", &[cols, cols], &[h0.len()]));
    }
    let mut h = h0.to_vec();
    // inputs that never fire carry no signal; give them unit curvature
    for i in 0..cols {
        if h[i * cols + i] == 0.0 {
            h[i * cols + i] = 1.0;
        }
    }
    let mean_diag = (0..cols).map(|i| h[i * cols + i]).sum::<f64>() / cols as f64;
    let mut damp = cfg.damping * mean_diag;
    let mut u = None;
    for attempt in 0..=MAX_DAMPING_RETRIES {
        let mut hd = h.clone();
        for i in 0..cols {
            hd[i * cols + i] += damp;
        }
        if let Some(f) = inverse_upper_factor(&hd, cols) {
            u = Some(f);
            break;
        }
        if attempt < MAX_DAMPING_RETRIES {
            log::warn!("hessian not positive definite; raising damping to {}", damp * 10.0);
        }
        damp *= 10.0;
    }
    let u = u.ok_or_else(|| {
        Error::Numeric(format!(
            "hessian still singular after {MAX_DAMPING_RETRIES} damping increases"
        ))
    })?;

    let mut b = LayerBuilder::new(cfg, rows, cols);
    let mut work = w.data().to_vec();
    for j in 0..cols {
        if j % b.group == 0 {
            let end = (j + b.group).min(cols);
            for r in 0..rows {
                let vals = work[r * cols + j..r * cols + end].to_vec();
                b.fit(r, j, &vals);
            }
        }
        let ujj = u[j * cols + j];
        for r in 0..rows {
            let row = &mut work[r * cols..(r + 1) * cols];
            let deq = b.quantize(r, j, row[j]);
            let err = (row[j] - deq) / ujj;
            for k in j + 1..cols {
                row[k] -= err * u[j * cols + k];
            }
        }
    }
    b.finish()
}

fn gram(x: &Tensor) -> Tensor {
    // 2·X·Xᵀ for X: [c × n]
    let xt = x.transpose();
    let mut h = matmul(x, &xt).expect("conformable");
    h.data_mut().iter_mut().for_each(|v| *v *= 2.0);
    h
}

/// GPTQ on `W: [rows × cols]` with calibration inputs `X: [cols × n]`.
pub fn gptq_quantize_layer(w: &Tensor, x: &Tensor, cfg: &QuantConfig) -> Result<(QuantizedLinear, LayerReport)> {
    let (_, cols) = w.dims2();
    let (xc, n) = x.dims2();
    if xc != cols {
        return Err(Error::shape("gptq calibration", w.shape(), x.shape()));
    }
    if n == 0 {
        return Err(Error::Contract("GPTQ needs at least one calibration vector".into()));
    }
    let h0 = gram(x);
    let q = gptq_from_gram(w, h0.data(), cfg)?;
    let rtn = rtn_quantize_layer(w, cfg)?;
    let report = LayerReport {
        layer: String::new(),
        error_gptq: reconstruction_error(w, &q.dequantize(), x)?,
        error_rtn: reconstruction_error(w, &rtn.dequantize(), x)?,
        bits: cfg.bits,
        bytes_before: q.full_precision_bytes(),
        bytes_after: q.storage_bytes(),
    };
    Ok((q, report))
}

/// A model whose linear weights were replaced by their dequantized values,
/// with the quantized layers (output-major) kept for serialization.
#[derive(Clone, Debug)]
pub struct QuantizedModel {
    pub model: Transformer,
    pub layers: Vec<(String, QuantizedLinear)>,
    pub report: QuantReport,
}

fn calibration_sequences(model: &Transformer, calib: &[PromptRecord], n: usize) -> Vec<Vec<u32>> {
    let tok = Tokenizer::new();
    calib
        .iter()
        .take(n)
        .map(|rec| {
            let (mut ids, _) = frame_record(&tok, rec);
            ids.truncate(model.config.max_seq_len);
            ids
        })
        .collect()
}

/// Quantizes every 2-D linear weight of `model` with GPTQ.
///
/// Layers are processed in canonical order; each layer's calibration inputs
/// are collected by running the calibration sequences through the model with
/// all earlier layers already quantized, so later layers compensate for the
/// error upstream of them. Embeddings and normalization stay full precision.
pub fn quantize_model(model: &Transformer, calib: &[PromptRecord], cfg: &QuantConfig) -> Result<QuantizedModel> {
    cfg.validate()?;
    let seqs = calibration_sequences(model, calib, cfg.calibration_samples);
    if seqs.is_empty() {
        return Err(Error::Contract("quantization needs a nonempty calibration set".into()));
    }
    let names: Vec<String> = model
        .params
        .names()
        .into_iter()
        .filter(|n| is_linear_weight(n))
        .collect();
    let mut current = model.clone();
    let mut layers = Vec::new();
    let mut report = QuantReport::default();
    for name in names {
        let mut weight = None;
        current.params.for_each(|n, t| {
            if n == name {
                weight = Some(t.transpose());
            }
        });
        let w = weight.expect("linear weight exists");
        let cols = w.dims2().1;
        let mut h0 = vec![0.0; cols * cols];
        for seq in &seqs {
            let mut g = crate::numerics::Graph::new();
            let p = current.params.bind_const(&mut g);
            let mut obs = |n: &str, x: &Tensor| {
                if n == name {
                    accumulate_gram(&mut h0, x);
                }
            };
            current.forward_observed(&mut g, &p, seq, Some(&mut obs))?;
        }
        let q = gptq_from_gram(&w, &h0, cfg)?;
        let rtn = rtn_quantize_layer(&w, cfg)?;
        let deq = q.dequantize();
        report.layers.push(LayerReport {
            layer: name.clone(),
            error_gptq: gram_error(&w, &deq, &h0),
            error_rtn: gram_error(&w, &rtn.dequantize(), &h0),
            bits: cfg.bits,
            bytes_before: q.full_precision_bytes(),
            bytes_after: q.storage_bytes(),
        });
        let replacement = deq.transpose();
        current.params.for_each_mut(|n, t| {
            if n == name {
                *t = replacement.clone();
            }
        });
        layers.push((name, q));
    }
    Ok(QuantizedModel {
        model: current,
        layers,
        report,
    })
}

/// `h0 += 2·Xᵀ·X` for an observed input `X: [T × cols]`.
fn accumulate_gram(h0: &mut [f64], x: &Tensor) {
    let (t, cols) = x.dims2();
    for s in 0..t {
        let row = x.row(s);
        for i in 0..cols {
            let xi = 2.0 * row[i];
            if xi == 0.0 {
                continue;
            }
            let hi = &mut h0[i * cols..(i + 1) * cols];
            for (h, xj) in hi.iter_mut().zip(row) {
                *h += xi * xj;
            }
        }
    }
}

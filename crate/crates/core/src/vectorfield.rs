//! Transformer vector-field estimator.
//!
//! The network maps a flow state `x_t`, a condition and a time `t` to a
//! predicted velocity on the same `[channels, frames]` grid:
//!
//! ```text
//! c    = silu(W_time . sinusoid(t) + b_time)                 time conditioning
//! z    = W_in . [x_t ; cond ; |x_t| ; |cond|] + b_in          per frame
//! for each layer:
//!     (shift1, scale1, gate1, shift2, scale2, gate2) = W_mod . c + b_mod
//!     z += gate1 * attention(LN(z) * (1 + scale1) + shift1)   ALiBi-biased
//!     z += gate2 * mlp(LN(z) * (1 + scale2) + shift2)         GELU
//! (shift, scale) = W_fmod . c + b_fmod
//! out  = W_out . (LN(z) * (1 + scale) + shift) + b_out
//!      + s_state * x_t + s_cond * cond                        gated skips
//! s_state = W_ss . c + b_ss + G_s . g + (W_ms . c + b_ms) * |x_t|
//! s_cond  = W_sc . c + b_sc + G_c . g + (W_mc . c + b_mc) * |cond|
//!                                                  g = modulated LN(z)
//! ```
//!
//! `|.|` is the per-bin magnitude of the real/imaginary channel pairs. It
//! gives the network phase-invariant inputs that a `model_dim`-wide linear
//! projection of the signed channels cannot provide.
//!
//! Frame order enters only through the ALiBi bias `-m_h |p_i - p_j|`.
//! The gated skips give the field a full-rank path to the state and
//! condition when `model_dim` is smaller than the feature width. Their
//! per-frame term `G . g` lets the network apply a time-frequency mask to
//! the condition, which a linear read-out of `model_dim` values cannot. The
//! magnitude terms make the gain of each bin depend on its own level.
//!
//! All modulation, output and skip parameters start at zero, so a freshly
//! initialised model predicts an identically zero field.
//!
//! Parameter count for `E = time_embed_dim`, `D = model_dim`,
//! `F = feature_channels`, `H = feedforward_dim`, `N = num_layers`:
//!
//! ```text
//! (E + 1) D + (3F + 1) D + [D if learned_null]
//!   + N (6D^2 + 6D + 4D^2 + 4D + 2 D H + H + D)
//!   + 2D^2 + 2D + 5 (D F + F) + 2 D F
//! ```

use std::collections::BTreeMap;

use ndarray::linalg::general_mat_mul;
use ndarray::{s, Array1, Array2, ArrayView1, ArrayView2, ArrayViewMut1, ArrayViewMut2, Axis};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::masking::ConditionInput;
use crate::spectral::FeatureGrid;

const LN_EPS: f64 = 1e-6;
const TIME_SCALE: f64 = 1000.0;
const MAX_PERIOD: f64 = 10_000.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub num_layers: usize,
    pub model_dim: usize,
    pub num_heads: usize,
    pub feature_channels: usize,
    pub time_embed_dim: usize,
    pub feedforward_dim: usize,
    /// Add a learned embedding to the input projection for null conditions.
    pub learned_null: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            num_layers: 4,
            model_dim: 128,
            num_heads: 4,
            feature_channels: 512,
            time_embed_dim: 128,
            feedforward_dim: 512,
            learned_null: false,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let dims = [
            self.num_layers,
            self.model_dim,
            self.num_heads,
            self.feature_channels,
            self.time_embed_dim,
            self.feedforward_dim,
        ];
        if dims.contains(&0) {
            return Err(invalid(format!(
                "model dimensions must be positive: {self:?}"
            )));
        }
        if !self.model_dim.is_multiple_of(self.num_heads) {
            return Err(invalid(format!(
                "model_dim {} is not divisible by num_heads {}",
                self.model_dim, self.num_heads
            )));
        }
        if !self.time_embed_dim.is_multiple_of(2) {
            return Err(invalid("time_embed_dim must be even"));
        }
        if !self.feature_channels.is_multiple_of(2) {
            return Err(invalid(
                "feature_channels must be even (real and imaginary halves)",
            ));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.model_dim / self.num_heads
    }
}

/// Closed-form parameter count; see the module docs.
pub fn parameter_count(cfg: &ModelConfig) -> usize {
    let (e, d, f, h, n) = (
        cfg.time_embed_dim,
        cfg.model_dim,
        cfg.feature_channels,
        cfg.feedforward_dim,
        cfg.num_layers,
    );
    (e + 1) * d
        + (3 * f + 1) * d
        + if cfg.learned_null { d } else { 0 }
        + n * (6 * d * d + 6 * d + 4 * d * d + 4 * d + 2 * d * h + h + d)
        + 2 * d * d
        + 2 * d
        + 5 * (d * f + f)
        + 2 * d * f
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct Seg {
    offset: usize,
    rows: usize,
    cols: usize,
}

impl Seg {
    fn len(&self) -> usize {
        self.rows * self.cols
    }

    fn range(&self) -> std::ops::Range<usize> {
        self.offset..self.offset + self.len()
    }
}

#[derive(Debug, Clone)]
struct LinearSegs {
    w: Seg,
    b: Seg,
}

#[derive(Debug, Clone)]
struct LayerSegs {
    modulation: LinearSegs,
    q: LinearSegs,
    k: LinearSegs,
    v: LinearSegs,
    o: LinearSegs,
    up: LinearSegs,
    down: LinearSegs,
}

#[derive(Debug, Clone)]
struct Layout {
    time: LinearSegs,
    input: LinearSegs,
    null_embedding: Option<Seg>,
    layers: Vec<LayerSegs>,
    final_modulation: LinearSegs,
    output: LinearSegs,
    skip_state: LinearSegs,
    skip_cond: LinearSegs,
    gate_state: Seg,
    gate_cond: Seg,
    mag_state: LinearSegs,
    mag_cond: LinearSegs,
    names: Vec<(String, Seg)>,
    total: usize,
}

struct LayoutBuilder {
    offset: usize,
    names: Vec<(String, Seg)>,
}

impl LayoutBuilder {
    fn seg(&mut self, name: String, rows: usize, cols: usize) -> Seg {
        let seg = Seg {
            offset: self.offset,
            rows,
            cols,
        };
        self.offset += seg.len();
        self.names.push((name, seg));
        seg
    }

    fn linear(&mut self, name: &str, fan_in: usize, fan_out: usize) -> LinearSegs {
        LinearSegs {
            w: self.seg(format!("{name}.weight"), fan_in, fan_out),
            b: self.seg(format!("{name}.bias"), 1, fan_out),
        }
    }
}

impl Layout {
    fn new(cfg: &ModelConfig) -> Self {
        let (e, d, f, h) = (
            cfg.time_embed_dim,
            cfg.model_dim,
            cfg.feature_channels,
            cfg.feedforward_dim,
        );
        let mut b = LayoutBuilder {
            offset: 0,
            names: Vec::new(),
        };
        let time = b.linear("time", e, d);
        let input = b.linear("input", 3 * f, d);
        let null_embedding = cfg
            .learned_null
            .then(|| b.seg("null_embedding".into(), 1, d));
        let layers = (0..cfg.num_layers)
            .map(|l| LayerSegs {
                modulation: b.linear(&format!("layers.{l}.modulation"), d, 6 * d),
                q: b.linear(&format!("layers.{l}.attn.q"), d, d),
                k: b.linear(&format!("layers.{l}.attn.k"), d, d),
                v: b.linear(&format!("layers.{l}.attn.v"), d, d),
                o: b.linear(&format!("layers.{l}.attn.o"), d, d),
                up: b.linear(&format!("layers.{l}.ff.up"), d, h),
                down: b.linear(&format!("layers.{l}.ff.down"), h, d),
            })
            .collect();
        let final_modulation = b.linear("final.modulation", d, 2 * d);
        let output = b.linear("output", d, f);
        let skip_state = b.linear("skip.state", d, f);
        let skip_cond = b.linear("skip.cond", d, f);
        let gate_state = b.seg("gate.state".into(), d, f);
        let gate_cond = b.seg("gate.cond".into(), d, f);
        let mag_state = b.linear("skip.state_magnitude", d, f);
        let mag_cond = b.linear("skip.cond_magnitude", d, f);
        Layout {
            time,
            input,
            null_embedding,
            layers,
            final_modulation,
            output,
            skip_state,
            skip_cond,
            gate_state,
            gate_cond,
            mag_state,
            mag_cond,
            names: b.names,
            total: b.offset,
        }
    }

    /// Segments that start at zero: modulation (adaLN-Zero), output and skips.
    fn zero_initialised(&self) -> Vec<Seg> {
        let mut out = Vec::new();
        for l in &self.layers {
            out.push(l.modulation.w);
        }
        for lin in [
            &self.final_modulation,
            &self.output,
            &self.skip_state,
            &self.skip_cond,
            &self.mag_state,
            &self.mag_cond,
        ] {
            out.push(lin.w);
        }
        out.push(self.gate_state);
        out.push(self.gate_cond);
        out
    }
}

fn mat(p: &[f64], seg: Seg) -> ArrayView2<'_, f64> {
    ArrayView2::from_shape((seg.rows, seg.cols), &p[seg.range()]).expect("segment shape")
}

fn vec1(p: &[f64], seg: Seg) -> ArrayView1<'_, f64> {
    ArrayView1::from(&p[seg.range()])
}

fn mat_mut(p: &mut [f64], seg: Seg) -> ArrayViewMut2<'_, f64> {
    ArrayViewMut2::from_shape((seg.rows, seg.cols), &mut p[seg.range()]).expect("segment shape")
}

fn vec_mut(p: &mut [f64], seg: Seg) -> ArrayViewMut1<'_, f64> {
    ArrayViewMut1::from(&mut p[seg.range()])
}

/// Sinusoidal encoding of a flow time.
#[derive(Debug, Clone, PartialEq)]
pub struct TimeEmbedding {
    pub vector: Array1<f64>,
}

/// `[sin(1000 t w_i) ..., cos(1000 t w_i) ...]` with `w_i = 10000^(-i / (dim/2))`.
pub fn time_embedding(t: f64, dim: usize) -> Result<TimeEmbedding> {
    if dim == 0 || !dim.is_multiple_of(2) {
        return Err(invalid(format!(
            "time embedding dimension must be even, got {dim}"
        )));
    }
    let half = dim / 2;
    let mut vector = Array1::zeros(dim);
    for i in 0..half {
        let freq = MAX_PERIOD.powf(-(i as f64) / half as f64);
        let arg = TIME_SCALE * t * freq;
        vector[i] = arg.sin();
        vector[half + i] = arg.cos();
    }
    Ok(TimeEmbedding { vector })
}

/// Head slopes `m_h = 2^(-8 h / H)` for `h = 1..=H`.
pub fn alibi_slopes(num_heads: usize) -> Vec<f64> {
    (1..=num_heads)
        .map(|h| 2f64.powf(-8.0 * h as f64 / num_heads as f64))
        .collect()
}

/// `bias[h][i][j] = -m_h |i - j|`, shape `[heads, frames, frames]`.
pub fn alibi_bias(frames: usize, num_heads: usize) -> Result<ndarray::Array3<f64>> {
    if frames == 0 {
        return Err(Error::Empty("frames"));
    }
    let slopes = alibi_slopes(num_heads);
    Ok(ndarray::Array3::from_shape_fn(
        (num_heads, frames, frames),
        |(h, i, j)| -slopes[h] * (i as f64 - j as f64).abs(),
    ))
}

/// Per-channel shift and scale produced from the time conditioning.
#[derive(Debug, Clone, PartialEq)]
pub struct Modulation {
    pub shift: Array1<f64>,
    pub scale: Array1<f64>,
}

/// A learned projection of the time embedding onto a [`Modulation`].
#[derive(Debug, Clone, PartialEq)]
pub struct AdaptiveNorm {
    /// `[time_embed_dim, 2 * dim]`, shift columns first.
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
}

impl AdaptiveNorm {
    pub fn zeros(time_dim: usize, dim: usize) -> Self {
        Self {
            weight: Array2::zeros((time_dim, 2 * dim)),
            bias: Array1::zeros(2 * dim),
        }
    }

    pub fn modulation(&self, time: &TimeEmbedding) -> Result<Modulation> {
        if time.vector.len() != self.weight.nrows() {
            return Err(Error::ShapeMismatch {
                expected: format!("time embedding of {}", self.weight.nrows()),
                actual: format!("{}", time.vector.len()),
            });
        }
        let m = time.vector.dot(&self.weight) + &self.bias;
        let d = m.len() / 2;
        Ok(Modulation {
            shift: m.slice(s![..d]).to_owned(),
            scale: m.slice(s![d..]).to_owned(),
        })
    }

    pub fn apply(&self, hidden: ArrayView2<f64>, time: &TimeEmbedding) -> Result<Array2<f64>> {
        adaptive_norm(hidden, &self.modulation(time)?)
    }
}

/// Row-wise layer norm (no affine) followed by `* (1 + scale) + shift`.
pub fn adaptive_norm(hidden: ArrayView2<f64>, modulation: &Modulation) -> Result<Array2<f64>> {
    let d = hidden.ncols();
    if modulation.shift.len() != d || modulation.scale.len() != d {
        return Err(Error::ShapeMismatch {
            expected: format!("modulation of width {d}"),
            actual: format!(
                "shift {} / scale {}",
                modulation.shift.len(),
                modulation.scale.len()
            ),
        });
    }
    let (normed, _) = layer_norm(hidden);
    Ok(modulate(
        &normed,
        modulation.shift.view(),
        modulation.scale.view(),
    ))
}

/// Returns normalised rows and the per-row inverse standard deviation.
pub fn layer_norm(x: ArrayView2<f64>) -> (Array2<f64>, Array1<f64>) {
    let d = x.ncols() as f64;
    let mut out = Array2::zeros(x.raw_dim());
    let mut inv = Array1::zeros(x.nrows());
    for (r, (row, mut dst)) in x.rows().into_iter().zip(out.rows_mut()).enumerate() {
        let mean = row.sum() / d;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d;
        let is = 1.0 / (var + LN_EPS).sqrt();
        inv[r] = is;
        for (o, v) in dst.iter_mut().zip(row.iter()) {
            *o = (v - mean) * is;
        }
    }
    (out, inv)
}

fn layer_norm_backward(normed: &Array2<f64>, inv: &Array1<f64>, grad: &Array2<f64>) -> Array2<f64> {
    let d = normed.ncols() as f64;
    let mut out = Array2::zeros(normed.raw_dim());
    for r in 0..normed.nrows() {
        let n = normed.row(r);
        let g = grad.row(r);
        let mean_g = g.sum() / d;
        let mean_gn = g.dot(&n) / d;
        let is = inv[r];
        for ((o, gv), nv) in out.row_mut(r).iter_mut().zip(g.iter()).zip(n.iter()) {
            *o = is * (gv - mean_g - nv * mean_gn);
        }
    }
    out
}

fn modulate(normed: &Array2<f64>, shift: ArrayView1<f64>, scale: ArrayView1<f64>) -> Array2<f64> {
    let mut out = normed.clone();
    for mut row in out.rows_mut() {
        for ((v, sh), sc) in row.iter_mut().zip(shift.iter()).zip(scale.iter()) {
            *v = *v * (1.0 + sc) + sh;
        }
    }
    out
}

fn silu(x: f64) -> f64 {
    x / (1.0 + (-x).exp())
}

fn silu_grad(x: f64) -> f64 {
    let s = 1.0 / (1.0 + (-x).exp());
    s * (1.0 + x * (1.0 - s))
}

const GELU_K: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
const GELU_C: f64 = 0.044_715;

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_K * (x + GELU_C * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let th = (GELU_K * (x + GELU_C * x * x * x)).tanh();
    0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * GELU_K * (1.0 + 3.0 * GELU_C * x * x)
}

fn add_bias(x: &mut Array2<f64>, b: ArrayView1<f64>) {
    for mut row in x.rows_mut() {
        row += &b;
    }
}

/// `x . W + b` for row-major activations.
/// `[frames, channels]` real-then-imaginary features to `[frames, channels / 2]`
/// bin magnitudes.
fn magnitudes(v: ArrayView2<f64>) -> Array2<f64> {
    let bins = v.ncols() / 2;
    Array2::from_shape_fn((v.nrows(), bins), |(i, b)| {
        (v[[i, b]].powi(2) + v[[i, b + bins]].powi(2)).sqrt()
    })
}

/// Bin magnitudes repeated for the real and imaginary halves.
fn per_channel(mag: &Array2<f64>) -> Array2<f64> {
    ndarray::concatenate(Axis(1), &[mag.view(), mag.view()]).expect("equal shapes")
}

fn linear(x: ArrayView2<f64>, p: &[f64], lin: &LinearSegs) -> Array2<f64> {
    let mut y = x.dot(&mat(p, lin.w));
    add_bias(&mut y, vec1(p, lin.b));
    y
}

/// Accumulates weight/bias gradients of `x . W + b` and returns `dL/dx`.
fn linear_backward(
    x: ArrayView2<f64>,
    dy: &Array2<f64>,
    p: &[f64],
    g: &mut [f64],
    lin: &LinearSegs,
) -> Array2<f64> {
    general_mat_mul(1.0, &x.t(), dy, 1.0, &mut mat_mut(g, lin.w));
    vec_mut(g, lin.b).scaled_add(1.0, &dy.sum_axis(Axis(0)));
    dy.dot(&mat(p, lin.w).t())
}

/// Vector form of [`linear_backward`] for the time-conditioning path.
fn linear_vec_backward(
    x: ArrayView1<f64>,
    dy: ArrayView1<f64>,
    p: &[f64],
    g: &mut [f64],
    lin: &LinearSegs,
) -> Array1<f64> {
    let mut gw = mat_mut(g, lin.w);
    for (i, xi) in x.iter().enumerate() {
        gw.row_mut(i).scaled_add(*xi, &dy);
    }
    vec_mut(g, lin.b).scaled_add(1.0, &dy);
    mat(p, lin.w).dot(&dy)
}

struct LayerRecord {
    n1: Array2<f64>,
    inv1: Array1<f64>,
    a: Array2<f64>,
    q: Array2<f64>,
    k: Array2<f64>,
    v: Array2<f64>,
    probs: Vec<Array2<f64>>,
    o: Array2<f64>,
    y: Array2<f64>,
    n2: Array2<f64>,
    inv2: Array1<f64>,
    b: Array2<f64>,
    h_pre: Array2<f64>,
    h_act: Array2<f64>,
    ff: Array2<f64>,
    modv: Array1<f64>,
}

struct ForwardRecord {
    x: Array2<f64>,
    cond: Array2<f64>,
    x_mag: Array2<f64>,
    cond_mag: Array2<f64>,
    null_used: bool,
    temb: Array1<f64>,
    c_pre: Array1<f64>,
    c: Array1<f64>,
    layers: Vec<LayerRecord>,
    nf: Array2<f64>,
    invf: Array1<f64>,
    gf: Array2<f64>,
    modf: Array1<f64>,
}

/// Holds at most one recorded forward pass for [`VectorFieldModel::backward`].
#[derive(Default)]
pub struct GradientTape {
    record: Option<ForwardRecord>,
}

impl GradientTape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn is_recorded(&self) -> bool {
        self.record.is_some()
    }
}

/// Gradients aligned with [`VectorFieldModel::parameters`].
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub values: Vec<f64>,
}

impl Gradients {
    pub fn zeros(len: usize) -> Self {
        Self {
            values: vec![0.0; len],
        }
    }

    pub fn accumulate(&mut self, other: &Gradients, scale: f64) {
        for (a, b) in self.values.iter_mut().zip(&other.values) {
            *a += scale * b;
        }
    }

    pub fn norm(&self) -> f64 {
        self.values.iter().map(|v| v * v).sum::<f64>().sqrt()
    }
}

#[derive(Debug, Clone)]
pub struct VectorFieldModel {
    config: ModelConfig,
    layout: Layout,
    params: Vec<f64>,
}

impl PartialEq for VectorFieldModel {
    fn eq(&self, other: &Self) -> bool {
        self.config == other.config && self.params == other.params
    }
}

pub fn init_parameters<R: Rng + ?Sized>(
    config: &ModelConfig,
    rng: &mut R,
) -> Result<VectorFieldModel> {
    VectorFieldModel::init(config, rng)
}

impl VectorFieldModel {
    /// Weights drawn from `N(0, 1 / fan_in)`, biases zero, and the
    /// modulation/output/skip weights zero.
    pub fn init<R: Rng + ?Sized>(config: &ModelConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let layout = Layout::new(config);
        let mut params = vec![0.0; layout.total];
        let zero = layout.zero_initialised();
        for (name, seg) in &layout.names {
            if name.ends_with(".bias") || name == "null_embedding" || zero.contains(seg) {
                continue;
            }
            let std = 1.0 / (seg.rows as f64).sqrt();
            for v in &mut params[seg.range()] {
                let z: f64 = rng.sample(StandardNormal);
                *v = std * z;
            }
        }
        Ok(Self {
            config: *config,
            layout,
            params,
        })
    }

    pub fn from_parameters(config: &ModelConfig, params: Vec<f64>) -> Result<Self> {
        config.validate()?;
        let layout = Layout::new(config);
        if params.len() != layout.total {
            return Err(Error::ShapeMismatch {
                expected: format!("{} parameters", layout.total),
                actual: format!("{}", params.len()),
            });
        }
        if params.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("parameters"));
        }
        Ok(Self {
            config: *config,
            layout,
            params,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn parameters(&self) -> &[f64] {
        &self.params
    }

    pub fn parameters_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn num_parameters(&self) -> usize {
        self.params.len()
    }

    /// `(name, offset, rows, cols)` for every parameter segment, in storage order.
    pub fn segments(&self) -> Vec<(String, usize, usize, usize)> {
        self.layout
            .names
            .iter()
            .map(|(n, s)| (n.clone(), s.offset, s.rows, s.cols))
            .collect()
    }

    pub fn named_parameters(&self) -> BTreeMap<String, Vec<f64>> {
        self.layout
            .names
            .iter()
            .map(|(n, s)| (n.clone(), self.params[s.range()].to_vec()))
            .collect()
    }

    fn check_inputs(&self, x_t: &FeatureGrid, cond: &ConditionInput, t: f64) -> Result<()> {
        if x_t.shape() != cond.features.shape() {
            return Err(Error::ShapeMismatch {
                expected: format!("{:?}", x_t.shape()),
                actual: format!("condition {:?}", cond.features.shape()),
            });
        }
        if x_t.channels() != self.config.feature_channels {
            return Err(Error::ShapeMismatch {
                expected: format!("{} channels", self.config.feature_channels),
                actual: format!("{} channels", x_t.channels()),
            });
        }
        if x_t.frames() == 0 {
            return Err(Error::Empty("frames"));
        }
        if !(0.0..=1.0).contains(&t) {
            return Err(invalid(format!("t must lie in [0, 1], got {t}")));
        }
        if !x_t.is_finite() || !cond.features.is_finite() {
            return Err(Error::NonFinite("model input"));
        }
        Ok(())
    }

    pub fn forward(&self, x_t: &FeatureGrid, cond: &ConditionInput, t: f64) -> Result<FeatureGrid> {
        let positions: Vec<f64> = (0..x_t.frames()).map(|i| i as f64).collect();
        self.forward_with_positions(x_t, cond, t, &positions)
    }

    /// Forward pass with explicit frame positions for the ALiBi distances.
    pub fn forward_with_positions(
        &self,
        x_t: &FeatureGrid,
        cond: &ConditionInput,
        t: f64,
        positions: &[f64],
    ) -> Result<FeatureGrid> {
        self.check_inputs(x_t, cond, t)?;
        let (out, _) = self.run(x_t, cond, t, positions, false)?;
        Ok(out)
    }

    /// Forward pass that stores the activations needed by [`Self::backward`].
    pub fn forward_recorded(
        &self,
        tape: &mut GradientTape,
        x_t: &FeatureGrid,
        cond: &ConditionInput,
        t: f64,
    ) -> Result<FeatureGrid> {
        self.check_inputs(x_t, cond, t)?;
        let positions: Vec<f64> = (0..x_t.frames()).map(|i| i as f64).collect();
        let (out, record) = self.run(x_t, cond, t, &positions, true)?;
        tape.record = record;
        Ok(out)
    }

    fn run(
        &self,
        x_t: &FeatureGrid,
        cond: &ConditionInput,
        t: f64,
        positions: &[f64],
        keep: bool,
    ) -> Result<(FeatureGrid, Option<ForwardRecord>)> {
        let cfg = &self.config;
        let p = &self.params;
        let ly = &self.layout;
        let frames = x_t.frames();
        if positions.len() != frames {
            return Err(Error::ShapeMismatch {
                expected: format!("{frames} positions"),
                actual: format!("{}", positions.len()),
            });
        }
        let d = cfg.model_dim;
        let f = cfg.feature_channels;
        let heads = cfg.num_heads;
        let dh = cfg.head_dim();
        let att_scale = 1.0 / (dh as f64).sqrt();
        let slopes = alibi_slopes(heads);

        // frames x channels views
        let x = x_t.values.t();
        let cnd = cond.features.values.t();

        let temb = time_embedding(t, cfg.time_embed_dim)?.vector;
        let c_pre = temb.dot(&mat(p, ly.time.w)) + vec1(p, ly.time.b);
        let c = c_pre.mapv(silu);

        let x_mag = magnitudes(x);
        let cond_mag = magnitudes(cnd);
        let w_in = mat(p, ly.input.w);
        let mut z = x.dot(&w_in.slice(s![..f, ..]));
        general_mat_mul(1.0, &cnd, &w_in.slice(s![f..2 * f, ..]), 1.0, &mut z);
        general_mat_mul(
            1.0,
            &x_mag,
            &w_in.slice(s![2 * f..5 * f / 2, ..]),
            1.0,
            &mut z,
        );
        general_mat_mul(
            1.0,
            &cond_mag,
            &w_in.slice(s![5 * f / 2.., ..]),
            1.0,
            &mut z,
        );
        add_bias(&mut z, vec1(p, ly.input.b));
        let null_used = cond.is_null && ly.null_embedding.is_some();
        if let (true, Some(seg)) = (null_used, ly.null_embedding) {
            add_bias(&mut z, vec1(p, seg));
        }

        let mut records = Vec::with_capacity(if keep { cfg.num_layers } else { 0 });
        for lseg in &ly.layers {
            let modv = c.dot(&mat(p, lseg.modulation.w)) + vec1(p, lseg.modulation.b);
            let part = |i: usize| modv.slice(s![i * d..(i + 1) * d]);
            let (n1, inv1) = layer_norm(z.view());
            let a = modulate(&n1, part(0), part(1));
            let q = linear(a.view(), p, &lseg.q);
            let k = linear(a.view(), p, &lseg.k);
            let v = linear(a.view(), p, &lseg.v);
            let mut o = Array2::zeros((frames, d));
            let mut probs = Vec::with_capacity(if keep { heads } else { 0 });
            for h in 0..heads {
                let cols = s![.., h * dh..(h + 1) * dh];
                let mut sc = q.slice(cols).dot(&k.slice(cols).t());
                for (i, mut row) in sc.rows_mut().into_iter().enumerate() {
                    let mut max = f64::NEG_INFINITY;
                    for (j, val) in row.iter_mut().enumerate() {
                        *val = *val * att_scale - slopes[h] * (positions[i] - positions[j]).abs();
                        max = max.max(*val);
                    }
                    let mut sum = 0.0;
                    for val in row.iter_mut() {
                        *val = (*val - max).exp();
                        sum += *val;
                    }
                    row /= sum;
                }
                general_mat_mul(1.0, &sc, &v.slice(cols), 0.0, &mut o.slice_mut(cols));
                if keep {
                    probs.push(sc);
                }
            }
            let y = linear(o.view(), p, &lseg.o);
            let z_mid = &z + &(&y * &part(2));
            let (n2, inv2) = layer_norm(z_mid.view());
            let b = modulate(&n2, part(3), part(4));
            let h_pre = linear(b.view(), p, &lseg.up);
            let h_act = h_pre.mapv(gelu);
            let ff = linear(h_act.view(), p, &lseg.down);
            z = &z_mid + &(&ff * &part(5));
            if keep {
                records.push(LayerRecord {
                    n1,
                    inv1,
                    a,
                    q,
                    k,
                    v,
                    probs,
                    o,
                    y,
                    n2,
                    inv2,
                    b,
                    h_pre,
                    h_act,
                    ff,
                    modv,
                });
            }
        }

        let modf = c.dot(&mat(p, ly.final_modulation.w)) + vec1(p, ly.final_modulation.b);
        let (nf, invf) = layer_norm(z.view());
        let gf = modulate(&nf, modf.slice(s![..d]), modf.slice(s![d..]));
        let mut out = linear(gf.view(), p, &ly.output);
        let mut ss = gf.dot(&mat(p, ly.gate_state));
        add_bias(
            &mut ss,
            (c.dot(&mat(p, ly.skip_state.w)) + vec1(p, ly.skip_state.b)).view(),
        );
        let mut scd = gf.dot(&mat(p, ly.gate_cond));
        add_bias(
            &mut scd,
            (c.dot(&mat(p, ly.skip_cond.w)) + vec1(p, ly.skip_cond.b)).view(),
        );
        let ms = c.dot(&mat(p, ly.mag_state.w)) + vec1(p, ly.mag_state.b);
        let mc = c.dot(&mat(p, ly.mag_cond.w)) + vec1(p, ly.mag_cond.b);
        ss += &(&per_channel(&x_mag) * &ms);
        scd += &(&per_channel(&cond_mag) * &mc);
        out += &(&x * &ss);
        out += &(&cnd * &scd);

        if out.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("model output"));
        }
        let grid = FeatureGrid::new(out.t().to_owned());
        let record = keep.then(|| ForwardRecord {
            x: x.to_owned(),
            cond: cnd.to_owned(),
            x_mag,
            cond_mag,
            null_used,
            temb,
            c_pre,
            c,
            layers: records,
            nf,
            invf,
            gf,
            modf,
        });
        Ok((grid, record))
    }

    /// Back-propagates `output_grad` (`dL/d output`) through the recorded
    /// pass. The tape is consumed.
    pub fn backward(
        &self,
        tape: &mut GradientTape,
        output_grad: &FeatureGrid,
    ) -> Result<Gradients> {
        let rec = tape.record.take().ok_or(Error::NoRecordedForward)?;
        let cfg = &self.config;
        let p = &self.params;
        let ly = &self.layout;
        let d = cfg.model_dim;
        let f = cfg.feature_channels;
        let heads = cfg.num_heads;
        let dh = cfg.head_dim();
        let att_scale = 1.0 / (dh as f64).sqrt();
        if output_grad.shape() != (f, rec.x.nrows()) {
            return Err(Error::ShapeMismatch {
                expected: format!("{:?}", (f, rec.x.nrows())),
                actual: format!("{:?}", output_grad.shape()),
            });
        }
        let mut g = vec![0.0; self.params.len()];
        let dout = output_grad.values.t().to_owned();
        let mut dc = Array1::<f64>::zeros(d);

        // skips
        let dss = &dout * &rec.x;
        let dscd = &dout * &rec.cond;
        dc += &linear_vec_backward(
            rec.c.view(),
            dss.sum_axis(Axis(0)).view(),
            p,
            &mut g,
            &ly.skip_state,
        );
        dc += &linear_vec_backward(
            rec.c.view(),
            dscd.sum_axis(Axis(0)).view(),
            p,
            &mut g,
            &ly.skip_cond,
        );
        let dms = (&dss * &per_channel(&rec.x_mag)).sum_axis(Axis(0));
        let dmc = (&dscd * &per_channel(&rec.cond_mag)).sum_axis(Axis(0));
        dc += &linear_vec_backward(rec.c.view(), dms.view(), p, &mut g, &ly.mag_state);
        dc += &linear_vec_backward(rec.c.view(), dmc.view(), p, &mut g, &ly.mag_cond);

        // output head, skip gates and final modulation
        let mut dgf = linear_backward(rec.gf.view(), &dout, p, &mut g, &ly.output);
        for (dgate, seg) in [(&dss, ly.gate_state), (&dscd, ly.gate_cond)] {
            general_mat_mul(1.0, &rec.gf.t(), dgate, 1.0, &mut mat_mut(&mut g, seg));
            general_mat_mul(1.0, dgate, &mat(p, seg).t(), 1.0, &mut dgf);
        }
        let mut dmodf = Array1::<f64>::zeros(2 * d);
        dmodf.slice_mut(s![..d]).assign(&dgf.sum_axis(Axis(0)));
        dmodf
            .slice_mut(s![d..])
            .assign(&(&dgf * &rec.nf).sum_axis(Axis(0)));
        let dnf = &dgf * &(rec.modf.slice(s![d..]).mapv(|v| 1.0 + v));
        let mut dz = layer_norm_backward(&rec.nf, &rec.invf, &dnf);
        dc += &linear_vec_backward(rec.c.view(), dmodf.view(), p, &mut g, &ly.final_modulation);

        for (lseg, lr) in ly.layers.iter().zip(&rec.layers).rev() {
            let part = |i: usize| lr.modv.slice(s![i * d..(i + 1) * d]);
            let mut dmod = Array1::<f64>::zeros(6 * d);

            // feed-forward branch
            dmod.slice_mut(s![5 * d..6 * d])
                .assign(&(&dz * &lr.ff).sum_axis(Axis(0)));
            let dff = &dz * &part(5);
            let dh_act = linear_backward(lr.h_act.view(), &dff, p, &mut g, &lseg.down);
            let mut dh_pre = dh_act;
            dh_pre.zip_mut_with(&lr.h_pre, |gv, &x| *gv *= gelu_grad(x));
            let db = linear_backward(lr.b.view(), &dh_pre, p, &mut g, &lseg.up);
            dmod.slice_mut(s![3 * d..4 * d])
                .assign(&db.sum_axis(Axis(0)));
            dmod.slice_mut(s![4 * d..5 * d])
                .assign(&(&db * &lr.n2).sum_axis(Axis(0)));
            let dn2 = &db * &part(4).mapv(|v| 1.0 + v);
            let mut dz_mid = dz;
            dz_mid += &layer_norm_backward(&lr.n2, &lr.inv2, &dn2);

            // attention branch
            dmod.slice_mut(s![2 * d..3 * d])
                .assign(&(&dz_mid * &lr.y).sum_axis(Axis(0)));
            let dy = &dz_mid * &part(2);
            let do_ = linear_backward(lr.o.view(), &dy, p, &mut g, &lseg.o);
            let frames = lr.q.nrows();
            let mut dq = Array2::<f64>::zeros((frames, d));
            let mut dk = Array2::<f64>::zeros((frames, d));
            let mut dv = Array2::<f64>::zeros((frames, d));
            for h in 0..heads {
                let cols = s![.., h * dh..(h + 1) * dh];
                let probs = &lr.probs[h];
                let doh = do_.slice(cols);
                let dp = doh.dot(&lr.v.slice(cols).t());
                general_mat_mul(1.0, &probs.t(), &doh, 0.0, &mut dv.slice_mut(cols));
                let mut ds = dp;
                for (mut drow, prow) in ds.rows_mut().into_iter().zip(probs.rows()) {
                    let dotp = drow.dot(&prow);
                    drow.zip_mut_with(&prow, |dv, &pv| *dv = pv * (*dv - dotp));
                }
                general_mat_mul(
                    att_scale,
                    &ds,
                    &lr.k.slice(cols),
                    0.0,
                    &mut dq.slice_mut(cols),
                );
                general_mat_mul(
                    att_scale,
                    &ds.t(),
                    &lr.q.slice(cols),
                    0.0,
                    &mut dk.slice_mut(cols),
                );
            }
            let mut da = linear_backward(lr.a.view(), &dq, p, &mut g, &lseg.q);
            da += &linear_backward(lr.a.view(), &dk, p, &mut g, &lseg.k);
            da += &linear_backward(lr.a.view(), &dv, p, &mut g, &lseg.v);
            dmod.slice_mut(s![..d]).assign(&da.sum_axis(Axis(0)));
            dmod.slice_mut(s![d..2 * d])
                .assign(&(&da * &lr.n1).sum_axis(Axis(0)));
            let dn1 = &da * &part(1).mapv(|v| 1.0 + v);
            dz = dz_mid;
            dz += &layer_norm_backward(&lr.n1, &lr.inv1, &dn1);

            dc += &linear_vec_backward(rec.c.view(), dmod.view(), p, &mut g, &lseg.modulation);
        }

        // input projection
        {
            let mut gw = mat_mut(&mut g, ly.input.w);
            general_mat_mul(1.0, &rec.x.t(), &dz, 1.0, &mut gw.slice_mut(s![..f, ..]));
            general_mat_mul(
                1.0,
                &rec.cond.t(),
                &dz,
                1.0,
                &mut gw.slice_mut(s![f..2 * f, ..]),
            );
            general_mat_mul(
                1.0,
                &rec.x_mag.t(),
                &dz,
                1.0,
                &mut gw.slice_mut(s![2 * f..5 * f / 2, ..]),
            );
            general_mat_mul(
                1.0,
                &rec.cond_mag.t(),
                &dz,
                1.0,
                &mut gw.slice_mut(s![5 * f / 2.., ..]),
            );
        }
        let dz_sum = dz.sum_axis(Axis(0));
        vec_mut(&mut g, ly.input.b).scaled_add(1.0, &dz_sum);
        if let (true, Some(seg)) = (rec.null_used, ly.null_embedding) {
            vec_mut(&mut g, seg).scaled_add(1.0, &dz_sum);
        }

        // time conditioning
        let dc_pre = &dc * &rec.c_pre.mapv(silu_grad);
        linear_vec_backward(rec.temb.view(), dc_pre.view(), p, &mut g, &ly.time);

        Ok(Gradients { values: g })
    }
}

//! The spatio-temporal correlator: one pre-norm Transformer encoder block that
//! attends jointly over every patch token of every frame in a clip.
//!
//! Besides the fused features, the block exposes its head-averaged attention
//! matrix, which is the signal used for both training and segmentation. The
//! backward pass is derived by hand and returns the gradient of
//! `⟨G_f, F_v⟩ + ⟨G_a, A_v⟩` for caller-supplied upstream gradients.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::numerics::{softmax_in_place, Matrix, Real};

const LN_EPS: f64 = 1e-5;
const INIT_STD: f64 = 0.02;

/// Default sharpness for [`CorrelatorParams::identity_like`].
pub const IDENTITY_SHARPNESS: f64 = 4.0;

/// Frozen per-frame patch features for `frames` consecutive sampled frames.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureClip<T = f32> {
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    /// `[frames · height · width, channels]`, frame-major then row-major.
    pub data: Matrix<T>,
    pub frame_indices: Vec<usize>,
    pub stride: usize,
}

impl<T: Real> FeatureClip<T> {
    pub fn new(
        frames: usize,
        height: usize,
        width: usize,
        data: Matrix<T>,
        frame_indices: Vec<usize>,
        stride: usize,
    ) -> Result<Self> {
        if frames == 0 || height * width == 0 {
            return Err(Error::Empty("feature clip"));
        }
        if data.rows() != frames * height * width {
            return Err(Error::shape(format!(
                "clip data has {} rows, expected {frames}x{height}x{width}",
                data.rows()
            )));
        }
        if frame_indices.len() != frames {
            return Err(Error::shape(format!(
                "{} frame indices for {frames} frames",
                frame_indices.len()
            )));
        }
        if frames > 1
            && (stride == 0 || frame_indices.windows(2).any(|w| w[1] != w[0] + stride))
        {
            return Err(Error::InvalidArgument(format!(
                "frame indices {frame_indices:?} are not spaced by stride {stride}"
            )));
        }
        if !data.is_finite() {
            return Err(Error::NonFinite("feature clip".into()));
        }
        Ok(Self {
            frames,
            height,
            width,
            data,
            frame_indices,
            stride,
        })
    }

    #[inline]
    pub fn tokens_per_frame(&self) -> usize {
        self.height * self.width
    }

    #[inline]
    pub fn tokens(&self) -> usize {
        self.data.rows()
    }

    #[inline]
    pub fn channels(&self) -> usize {
        self.data.cols()
    }

    pub fn cast<U: Real>(&self) -> FeatureClip<U> {
        FeatureClip {
            frames: self.frames,
            height: self.height,
            width: self.width,
            data: self.data.cast(),
            frame_indices: self.frame_indices.clone(),
            stride: self.stride,
        }
    }
}

/// Head-averaged, row-stochastic attention of every query token over a set of
/// key tokens.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionField<T = f32> {
    /// `[query_frames · tokens_per_frame, key_frames · tokens_per_frame]`.
    pub probs: Matrix<T>,
    pub query_frames: usize,
    pub key_frames: usize,
    pub tokens_per_frame: usize,
}

impl<T: Real> AttentionField<T> {
    pub fn n_query(&self) -> usize {
        self.probs.rows()
    }

    pub fn n_key(&self) -> usize {
        self.probs.cols()
    }

    pub fn is_self_attention(&self) -> bool {
        self.query_frames == self.key_frames
    }
}

/// Fused output features, `[tokens, channels]`.
pub type FusedFeatures<T = f32> = Matrix<T>;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CorrelatorConfig {
    pub dim: usize,
    pub heads: usize,
    /// Number of temporal positional embeddings available.
    pub max_frames: usize,
    /// Feed-forward hidden width as a multiple of `dim`.
    pub ff_ratio: usize,
}

impl Default for CorrelatorConfig {
    fn default() -> Self {
        Self {
            dim: 384,
            heads: 8,
            max_frames: 128,
            ff_ratio: 4,
        }
    }
}

impl CorrelatorConfig {
    pub fn new(dim: usize, heads: usize, max_frames: usize) -> Result<Self> {
        let cfg = Self {
            dim,
            heads,
            max_frames,
            ff_ratio: 4,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 || self.heads == 0 || self.dim % self.heads != 0 {
            return Err(Error::InvalidArgument(format!(
                "dim {} must be a positive multiple of heads {}",
                self.dim, self.heads
            )));
        }
        if self.max_frames == 0 || self.ff_ratio == 0 {
            return Err(Error::InvalidArgument(
                "max_frames and ff_ratio must be positive".into(),
            ));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.dim / self.heads
    }

    pub fn hidden(&self) -> usize {
        self.dim * self.ff_ratio
    }
}

/// Every learnable tensor of the block. Vectors are stored as `1 x n`
/// matrices so that all fields can be walked uniformly.
///
/// Query/key/value weights are `[dim, dim]`; head `h` owns output columns
/// `h·head_dim .. (h+1)·head_dim`.
#[derive(Debug, Clone, PartialEq)]
pub struct CorrelatorParams<T = f32> {
    pub config: CorrelatorConfig,
    pub query_weight: Matrix<T>,
    pub query_bias: Matrix<T>,
    pub key_weight: Matrix<T>,
    pub key_bias: Matrix<T>,
    pub value_weight: Matrix<T>,
    pub value_bias: Matrix<T>,
    pub out_weight: Matrix<T>,
    pub out_bias: Matrix<T>,
    pub norm1_gain: Matrix<T>,
    pub norm1_bias: Matrix<T>,
    pub norm2_gain: Matrix<T>,
    pub norm2_bias: Matrix<T>,
    pub ff1_weight: Matrix<T>,
    pub ff1_bias: Matrix<T>,
    pub ff2_weight: Matrix<T>,
    pub ff2_bias: Matrix<T>,
    pub temporal_embedding: Matrix<T>,
}

/// Gradients share the parameter layout.
pub type CorrelatorGrads<T = f32> = CorrelatorParams<T>;

pub const PARAM_NAMES: [&str; 17] = [
    "query_weight",
    "query_bias",
    "key_weight",
    "key_bias",
    "value_weight",
    "value_bias",
    "out_weight",
    "out_bias",
    "norm1_gain",
    "norm1_bias",
    "norm2_gain",
    "norm2_bias",
    "ff1_weight",
    "ff1_bias",
    "ff2_weight",
    "ff2_bias",
    "temporal_embedding",
];

impl<T: Real> CorrelatorParams<T> {
    /// All-zero tensors (layer-norm gains included).
    pub fn zeros(config: CorrelatorConfig) -> Self {
        let c = config.dim;
        let hid = config.hidden();
        Self {
            config,
            query_weight: Matrix::zeros(c, c),
            query_bias: Matrix::zeros(1, c),
            key_weight: Matrix::zeros(c, c),
            key_bias: Matrix::zeros(1, c),
            value_weight: Matrix::zeros(c, c),
            value_bias: Matrix::zeros(1, c),
            out_weight: Matrix::zeros(c, c),
            out_bias: Matrix::zeros(1, c),
            norm1_gain: Matrix::zeros(1, c),
            norm1_bias: Matrix::zeros(1, c),
            norm2_gain: Matrix::zeros(1, c),
            norm2_bias: Matrix::zeros(1, c),
            ff1_weight: Matrix::zeros(c, hid),
            ff1_bias: Matrix::zeros(1, hid),
            ff2_weight: Matrix::zeros(hid, c),
            ff2_bias: Matrix::zeros(1, c),
            temporal_embedding: Matrix::zeros(config.max_frames, c),
        }
    }

    /// Gaussian(0, 0.02) weights and embeddings, zero biases, unit gains.
    pub fn init(config: CorrelatorConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, INIT_STD).expect("valid std");
        let mut p = Self::zeros(config);
        for m in [
            &mut p.query_weight,
            &mut p.key_weight,
            &mut p.value_weight,
            &mut p.out_weight,
            &mut p.ff1_weight,
            &mut p.ff2_weight,
            &mut p.temporal_embedding,
        ] {
            m.data_mut()
                .iter_mut()
                .for_each(|v| *v = T::of(normal.sample(&mut rng)));
        }
        p.norm1_gain = Matrix::filled(1, config.dim, T::one());
        p.norm2_gain = Matrix::filled(1, config.dim, T::one());
        Ok(p)
    }

    /// A degenerate block whose attention logits are scaled feature
    /// similarities and whose fused output equals its input.
    ///
    /// Query and key projections are `sqrt(sharpness)·I`; value, output and
    /// feed-forward weights and the temporal embeddings are zero.
    pub fn identity_like(config: CorrelatorConfig, sharpness: f64) -> Result<Self> {
        config.validate()?;
        let mut p = Self::zeros(config);
        let s = T::of(sharpness.sqrt());
        p.query_weight = Matrix::identity(config.dim);
        p.query_weight.scale(s);
        p.key_weight = p.query_weight.clone();
        p.norm1_gain = Matrix::filled(1, config.dim, T::one());
        p.norm2_gain = Matrix::filled(1, config.dim, T::one());
        Ok(p)
    }

    pub fn zeros_like(&self) -> Self {
        Self::zeros(self.config)
    }

    pub fn tensors(&self) -> [(&'static str, &Matrix<T>); 17] {
        [
            (PARAM_NAMES[0], &self.query_weight),
            (PARAM_NAMES[1], &self.query_bias),
            (PARAM_NAMES[2], &self.key_weight),
            (PARAM_NAMES[3], &self.key_bias),
            (PARAM_NAMES[4], &self.value_weight),
            (PARAM_NAMES[5], &self.value_bias),
            (PARAM_NAMES[6], &self.out_weight),
            (PARAM_NAMES[7], &self.out_bias),
            (PARAM_NAMES[8], &self.norm1_gain),
            (PARAM_NAMES[9], &self.norm1_bias),
            (PARAM_NAMES[10], &self.norm2_gain),
            (PARAM_NAMES[11], &self.norm2_bias),
            (PARAM_NAMES[12], &self.ff1_weight),
            (PARAM_NAMES[13], &self.ff1_bias),
            (PARAM_NAMES[14], &self.ff2_weight),
            (PARAM_NAMES[15], &self.ff2_bias),
            (PARAM_NAMES[16], &self.temporal_embedding),
        ]
    }

    pub fn tensors_mut(&mut self) -> [(&'static str, &mut Matrix<T>); 17] {
        [
            (PARAM_NAMES[0], &mut self.query_weight),
            (PARAM_NAMES[1], &mut self.query_bias),
            (PARAM_NAMES[2], &mut self.key_weight),
            (PARAM_NAMES[3], &mut self.key_bias),
            (PARAM_NAMES[4], &mut self.value_weight),
            (PARAM_NAMES[5], &mut self.value_bias),
            (PARAM_NAMES[6], &mut self.out_weight),
            (PARAM_NAMES[7], &mut self.out_bias),
            (PARAM_NAMES[8], &mut self.norm1_gain),
            (PARAM_NAMES[9], &mut self.norm1_bias),
            (PARAM_NAMES[10], &mut self.norm2_gain),
            (PARAM_NAMES[11], &mut self.norm2_bias),
            (PARAM_NAMES[12], &mut self.ff1_weight),
            (PARAM_NAMES[13], &mut self.ff1_bias),
            (PARAM_NAMES[14], &mut self.ff2_weight),
            (PARAM_NAMES[15], &mut self.ff2_bias),
            (PARAM_NAMES[16], &mut self.temporal_embedding),
        ]
    }

    pub fn num_parameters(&self) -> usize {
        self.tensors().iter().map(|(_, m)| m.data().len()).sum()
    }

    pub fn cast<U: Real>(&self) -> CorrelatorParams<U> {
        CorrelatorParams {
            config: self.config,
            query_weight: self.query_weight.cast(),
            query_bias: self.query_bias.cast(),
            key_weight: self.key_weight.cast(),
            key_bias: self.key_bias.cast(),
            value_weight: self.value_weight.cast(),
            value_bias: self.value_bias.cast(),
            out_weight: self.out_weight.cast(),
            out_bias: self.out_bias.cast(),
            norm1_gain: self.norm1_gain.cast(),
            norm1_bias: self.norm1_bias.cast(),
            norm2_gain: self.norm2_gain.cast(),
            norm2_bias: self.norm2_bias.cast(),
            ff1_weight: self.ff1_weight.cast(),
            ff1_bias: self.ff1_bias.cast(),
            ff2_weight: self.ff2_weight.cast(),
            ff2_bias: self.ff2_bias.cast(),
            temporal_embedding: self.temporal_embedding.cast(),
        }
    }

    /// Elementwise `self += other`.
    pub fn accumulate(&mut self, other: &Self) {
        for ((_, a), (_, b)) in self.tensors_mut().into_iter().zip(other.tensors()) {
            a.add_assign(b);
        }
    }

    pub fn scale(&mut self, s: T) {
        for (_, m) in self.tensors_mut() {
            m.scale(s);
        }
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().iter().all(|(_, m)| m.is_finite())
    }

    fn check_clip(&self, clip: &FeatureClip<T>) -> Result<()> {
        if clip.channels() != self.config.dim {
            return Err(Error::shape(format!(
                "clip has {} channels, correlator expects {}",
                clip.channels(),
                self.config.dim
            )));
        }
        if clip.frames > self.config.max_frames {
            return Err(Error::shape(format!(
                "clip has {} frames, correlator supports at most {}",
                clip.frames, self.config.max_frames
            )));
        }
        Ok(())
    }
}

struct LayerNormCache<T> {
    normalized: Matrix<T>,
    inv_std: Vec<T>,
}

fn layer_norm<T: Real>(
    x: &Matrix<T>,
    gain: &Matrix<T>,
    bias: &Matrix<T>,
) -> (Matrix<T>, LayerNormCache<T>) {
    let c = x.cols();
    let mut normalized = Matrix::zeros(x.rows(), c);
    let mut out = Matrix::zeros(x.rows(), c);
    let mut inv_std = Vec::with_capacity(x.rows());
    for r in 0..x.rows() {
        let row = x.row(r);
        let mean = row.iter().map(|v| v.as_f64()).sum::<f64>() / c as f64;
        let var = row
            .iter()
            .map(|v| (v.as_f64() - mean).powi(2))
            .sum::<f64>()
            / c as f64;
        let inv = 1.0 / (var + LN_EPS).sqrt();
        inv_std.push(T::of(inv));
        let (mean, inv) = (T::of(mean), T::of(inv));
        let nrow = normalized.row_mut(r);
        for (n, &v) in nrow.iter_mut().zip(row) {
            *n = (v - mean) * inv;
        }
        let orow = out.row_mut(r);
        for (j, o) in orow.iter_mut().enumerate() {
            *o = normalized.get(r, j) * gain.data()[j] + bias.data()[j];
        }
    }
    (
        out,
        LayerNormCache {
            normalized,
            inv_std,
        },
    )
}

/// Returns the input gradient; accumulates gain/bias gradients.
fn layer_norm_backward<T: Real>(
    grad_out: &Matrix<T>,
    cache: &LayerNormCache<T>,
    gain: &Matrix<T>,
    grad_gain: &mut Matrix<T>,
    grad_bias: &mut Matrix<T>,
) -> Matrix<T> {
    let c = grad_out.cols();
    let mut grad_in = Matrix::zeros(grad_out.rows(), c);
    let mut gg = vec![0.0f64; c];
    let mut gb = vec![0.0f64; c];
    let mut dxhat = vec![0.0f64; c];
    for r in 0..grad_out.rows() {
        let go = grad_out.row(r);
        let xh = cache.normalized.row(r);
        let mut mean_d = 0.0;
        let mut mean_dx = 0.0;
        for j in 0..c {
            let g = go[j].as_f64();
            gg[j] += g * xh[j].as_f64();
            gb[j] += g;
            dxhat[j] = g * gain.data()[j].as_f64();
            mean_d += dxhat[j];
            mean_dx += dxhat[j] * xh[j].as_f64();
        }
        mean_d /= c as f64;
        mean_dx /= c as f64;
        let inv = cache.inv_std[r].as_f64();
        for (j, gi) in grad_in.row_mut(r).iter_mut().enumerate() {
            *gi = T::of(inv * (dxhat[j] - mean_d - xh[j].as_f64() * mean_dx));
        }
    }
    for j in 0..c {
        grad_gain.data_mut()[j] = grad_gain.data()[j] + T::of(gg[j]);
        grad_bias.data_mut()[j] = grad_bias.data()[j] + T::of(gb[j]);
    }
    grad_in
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

#[inline]
fn gelu(z: f64) -> f64 {
    0.5 * z * (1.0 + (GELU_C * (z + GELU_A * z * z * z)).tanh())
}

#[inline]
fn gelu_grad(z: f64) -> f64 {
    let t = (GELU_C * (z + GELU_A * z * z * z)).tanh();
    0.5 * (1.0 + t) + 0.5 * z * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * z * z)
}

fn add_row_bias<T: Real>(m: &mut Matrix<T>, bias: &Matrix<T>) {
    let b = bias.data();
    for r in 0..m.rows() {
        for (v, &bb) in m.row_mut(r).iter_mut().zip(b) {
            *v = *v + bb;
        }
    }
}

fn head_columns<T: Real>(m: &Matrix<T>, head: usize, head_dim: usize) -> Matrix<T> {
    let start = head * head_dim;
    Matrix::from_fn(m.rows(), head_dim, |r, c| m.get(r, start + c))
}

fn scatter_head_columns<T: Real>(dst: &mut Matrix<T>, src: &Matrix<T>, head: usize) {
    let start = head * src.cols();
    for r in 0..src.rows() {
        dst.row_mut(r)[start..start + src.cols()].copy_from_slice(src.row(r));
    }
}

/// Intermediate activations kept for the backward pass.
pub struct ForwardCache<T = f32> {
    x0: Matrix<T>,
    ln1: LayerNormCache<T>,
    h1: Matrix<T>,
    q: Matrix<T>,
    k: Matrix<T>,
    v: Matrix<T>,
    head_probs: Vec<Matrix<T>>,
    heads_out: Matrix<T>,
    ln2: LayerNormCache<T>,
    h2: Matrix<T>,
    pre_act: Matrix<T>,
    act: Matrix<T>,
    tokens_per_frame: usize,
    frames: usize,
}

fn embed<T: Real>(clip: &FeatureClip<T>, params: &CorrelatorParams<T>) -> Matrix<T> {
    let mut x0 = clip.data.clone();
    let hw = clip.tokens_per_frame();
    for t in 0..clip.frames {
        let pe = params.temporal_embedding.row(t);
        for n in t * hw..(t + 1) * hw {
            for (v, &e) in x0.row_mut(n).iter_mut().zip(pe) {
                *v = *v + e;
            }
        }
    }
    x0
}

fn project<T: Real>(h: &Matrix<T>, w: &Matrix<T>, b: &Matrix<T>) -> Matrix<T> {
    let mut out = h.matmul(w);
    add_row_bias(&mut out, b);
    out
}

/// Per-head softmax attention of `q` over `k`, returned per head together with
/// the head average.
fn attention_heads<T: Real>(
    q: &Matrix<T>,
    k: &Matrix<T>,
    config: &CorrelatorConfig,
) -> (Vec<Matrix<T>>, Matrix<T>) {
    let dh = config.head_dim();
    let scale = T::of(1.0 / (dh as f64).sqrt());
    let inv_heads = T::of(1.0 / config.heads as f64);
    let mut mean = Matrix::zeros(q.rows(), k.rows());
    let mut heads = Vec::with_capacity(config.heads);
    for h in 0..config.heads {
        let qh = head_columns(q, h, dh);
        let kh = head_columns(k, h, dh);
        let mut p = qh.matmul_nt(&kh);
        p.scale(scale);
        if p.cols() > 0 {
            p.data_mut().chunks_mut(k.rows()).for_each(softmax_in_place);
        }
        for (m, &v) in mean.data_mut().iter_mut().zip(p.data()) {
            *m = *m + v * inv_heads;
        }
        heads.push(p);
    }
    (heads, mean)
}

/// Runs the block, keeping activations for [`backward_with_cache`].
pub fn forward_with_cache<T: Real>(
    clip: &FeatureClip<T>,
    params: &CorrelatorParams<T>,
) -> Result<(FusedFeatures<T>, AttentionField<T>, ForwardCache<T>)> {
    params.check_clip(clip)?;
    let cfg = &params.config;
    let x0 = embed(clip, params);
    let (h1, ln1) = layer_norm(&x0, &params.norm1_gain, &params.norm1_bias);
    let q = project(&h1, &params.query_weight, &params.query_bias);
    let k = project(&h1, &params.key_weight, &params.key_bias);
    let v = project(&h1, &params.value_weight, &params.value_bias);
    let (head_probs, mean) = attention_heads(&q, &k, cfg);

    let dh = cfg.head_dim();
    let mut heads_out = Matrix::zeros(x0.rows(), cfg.dim);
    for (h, p) in head_probs.iter().enumerate() {
        let oh = p.matmul(&head_columns(&v, h, dh));
        scatter_head_columns(&mut heads_out, &oh, h);
    }
    let mut x1 = project(&heads_out, &params.out_weight, &params.out_bias);
    x1.add_assign(&x0);

    let (h2, ln2) = layer_norm(&x1, &params.norm2_gain, &params.norm2_bias);
    let pre_act = project(&h2, &params.ff1_weight, &params.ff1_bias);
    let act = pre_act.map(|z| T::of(gelu(z.as_f64())));
    let mut out = project(&act, &params.ff2_weight, &params.ff2_bias);
    out.add_assign(&x1);

    if !out.is_finite() || !mean.is_finite() {
        return Err(Error::NonFinite("correlator forward".into()));
    }
    let field = AttentionField {
        probs: mean,
        query_frames: clip.frames,
        key_frames: clip.frames,
        tokens_per_frame: clip.tokens_per_frame(),
    };
    let cache = ForwardCache {
        x0,
        ln1,
        h1,
        q,
        k,
        v,
        head_probs,
        heads_out,
        ln2,
        h2,
        pre_act,
        act,
        tokens_per_frame: clip.tokens_per_frame(),
        frames: clip.frames,
    };
    Ok((out, field, cache))
}

/// Fused features and head-averaged self-attention for a clip.
pub fn forward<T: Real>(
    clip: &FeatureClip<T>,
    params: &CorrelatorParams<T>,
) -> Result<(FusedFeatures<T>, AttentionField<T>)> {
    forward_with_cache(clip, params).map(|(f, a, _)| (f, a))
}

/// Gradient of `⟨grad_features, F_v⟩ + ⟨grad_attention, A_v⟩` with respect to
/// every parameter. Recomputes the forward pass.
pub fn backward<T: Real>(
    clip: &FeatureClip<T>,
    params: &CorrelatorParams<T>,
    grad_features: &Matrix<T>,
    grad_attention: &Matrix<T>,
) -> Result<CorrelatorGrads<T>> {
    let (_, _, cache) = forward_with_cache(clip, params)?;
    backward_with_cache(&cache, params, grad_features, grad_attention)
}

pub fn backward_with_cache<T: Real>(
    cache: &ForwardCache<T>,
    params: &CorrelatorParams<T>,
    grad_features: &Matrix<T>,
    grad_attention: &Matrix<T>,
) -> Result<CorrelatorGrads<T>> {
    let cfg = &params.config;
    let n = cache.x0.rows();
    if grad_features.shape() != (n, cfg.dim) {
        return Err(Error::shape(format!(
            "feature gradient is {:?}, expected ({n}, {})",
            grad_features.shape(),
            cfg.dim
        )));
    }
    if grad_attention.shape() != (n, n) {
        return Err(Error::shape(format!(
            "attention gradient is {:?}, expected ({n}, {n})",
            grad_attention.shape()
        )));
    }
    let mut g = params.zeros_like();

    // Feed-forward branch; the residual passes grad_features straight to x1.
    g.ff2_weight = cache.act.matmul_tn(grad_features);
    g.ff2_bias = grad_features.col_sums();
    let mut d_pre = grad_features.matmul_nt(&params.ff2_weight);
    for (d, &z) in d_pre.data_mut().iter_mut().zip(cache.pre_act.data()) {
        *d = T::of(d.as_f64() * gelu_grad(z.as_f64()));
    }
    g.ff1_weight = cache.h2.matmul_tn(&d_pre);
    g.ff1_bias = d_pre.col_sums();
    let d_h2 = d_pre.matmul_nt(&params.ff1_weight);
    let mut d_x1 = layer_norm_backward(
        &d_h2,
        &cache.ln2,
        &params.norm2_gain,
        &mut g.norm2_gain,
        &mut g.norm2_bias,
    );
    d_x1.add_assign(grad_features);

    // Attention branch.
    g.out_weight = cache.heads_out.matmul_tn(&d_x1);
    g.out_bias = d_x1.col_sums();
    let d_heads_out = d_x1.matmul_nt(&params.out_weight);

    let dh = cfg.head_dim();
    let scale = T::of(1.0 / (dh as f64).sqrt());
    let inv_heads = T::of(1.0 / cfg.heads as f64);
    let mut d_q = Matrix::zeros(n, cfg.dim);
    let mut d_k = Matrix::zeros(n, cfg.dim);
    let mut d_v = Matrix::zeros(n, cfg.dim);
    for (h, p) in cache.head_probs.iter().enumerate() {
        let d_oh = head_columns(&d_heads_out, h, dh);
        let vh = head_columns(&cache.v, h, dh);
        let mut d_p = d_oh.matmul_nt(&vh);
        for (d, &ga) in d_p.data_mut().iter_mut().zip(grad_attention.data()) {
            *d = *d + ga * inv_heads;
        }
        scatter_head_columns(&mut d_v, &p.matmul_tn(&d_oh), h);

        // Softmax Jacobian, row by row.
        let mut d_s = d_p;
        for r in 0..n {
            let pr = p.row(r);
            let dr = d_s.row_mut(r);
            let dot: f64 = pr
                .iter()
                .zip(dr.iter())
                .map(|(&a, &b)| a.as_f64() * b.as_f64())
                .sum();
            let dot = T::of(dot);
            for (d, &pv) in dr.iter_mut().zip(pr) {
                *d = pv * (*d - dot) * scale;
            }
        }
        let qh = head_columns(&cache.q, h, dh);
        let kh = head_columns(&cache.k, h, dh);
        scatter_head_columns(&mut d_q, &d_s.matmul(&kh), h);
        scatter_head_columns(&mut d_k, &d_s.matmul_tn(&qh), h);
    }

    g.query_weight = cache.h1.matmul_tn(&d_q);
    g.query_bias = d_q.col_sums();
    g.key_weight = cache.h1.matmul_tn(&d_k);
    g.key_bias = d_k.col_sums();
    g.value_weight = cache.h1.matmul_tn(&d_v);
    g.value_bias = d_v.col_sums();
    let mut d_h1 = d_q.matmul_nt(&params.query_weight);
    d_h1.add_assign(&d_k.matmul_nt(&params.key_weight));
    d_h1.add_assign(&d_v.matmul_nt(&params.value_weight));
    let mut d_x0 = layer_norm_backward(
        &d_h1,
        &cache.ln1,
        &params.norm1_gain,
        &mut g.norm1_gain,
        &mut g.norm1_bias,
    );
    d_x0.add_assign(&d_x1);

    let hw = cache.tokens_per_frame;
    for t in 0..cache.frames {
        let mut acc = vec![0.0f64; cfg.dim];
        for r in t * hw..(t + 1) * hw {
            for (a, &v) in acc.iter_mut().zip(d_x0.row(r)) {
                *a += v.as_f64();
            }
        }
        for (dst, a) in g.temporal_embedding.row_mut(t).iter_mut().zip(acc) {
            *dst = T::of(a);
        }
    }
    Ok(g)
}

/// Attention of every token of the clip over the tokens of `key_frames` only
/// (0-based positions within the clip), renormalized over that key set.
///
/// With every frame as a key this reproduces [`forward`]'s attention exactly.
pub fn cross_attention<T: Real>(
    clip: &FeatureClip<T>,
    key_frames: &[usize],
    params: &CorrelatorParams<T>,
) -> Result<AttentionField<T>> {
    params.check_clip(clip)?;
    if key_frames.is_empty() {
        return Err(Error::Empty("key frame set"));
    }
    if key_frames.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::InvalidArgument(format!(
            "key frames {key_frames:?} must be strictly increasing"
        )));
    }
    if let Some(&last) = key_frames.last() {
        if last >= clip.frames {
            return Err(Error::InvalidArgument(format!(
                "key frame {last} outside clip of {} frames",
                clip.frames
            )));
        }
    }
    let hw = clip.tokens_per_frame();
    let x0 = embed(clip, params);
    let (h1, _) = layer_norm(&x0, &params.norm1_gain, &params.norm1_bias);
    let key_rows: Vec<usize> = key_frames
        .iter()
        .flat_map(|&t| t * hw..(t + 1) * hw)
        .collect();
    let h1_keys = h1.select_rows(&key_rows);
    let q = project(&h1, &params.query_weight, &params.query_bias);
    let k = project(&h1_keys, &params.key_weight, &params.key_bias);
    let (_, mean) = attention_heads(&q, &k, &params.config);
    if !mean.is_finite() {
        return Err(Error::NonFinite("cross attention".into()));
    }
    Ok(AttentionField {
        probs: mean,
        query_frames: clip.frames,
        key_frames: key_frames.len(),
        tokens_per_frame: hw,
    })
}

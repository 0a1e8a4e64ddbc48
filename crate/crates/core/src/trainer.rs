//! Clip sampling, AdamW and the training loop, plus checkpoint files.

use std::fs;
use std::io::Write;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::correlator::{
    backward_with_cache, forward_with_cache, CorrelatorConfig, CorrelatorGrads, CorrelatorParams,
    FeatureClip, PARAM_NAMES,
};
use crate::dataio::{read_manifest, read_tensor, write_tensor, Tensor, TensorContainer, VideoFeatures};
use crate::error::{Error, Result};
use crate::numerics::{Matrix, Real};
use crate::objective::{evaluate, objective_backward, sample_index_sets, Margins};

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    /// Frames per clip.
    pub frames: usize,
    pub stride: usize,
    pub k_pos: usize,
    pub k_neg: usize,
    pub margins: Margins,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub batch_size: usize,
    pub total_iters: usize,
    pub heads: usize,
    pub max_frames: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            frames: 3,
            stride: 4,
            k_pos: 10,
            k_neg: 50,
            margins: Margins::default(),
            learning_rate: 1e-4,
            weight_decay: 0.05,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            batch_size: 16,
            total_iters: 30_000,
            heads: 8,
            max_frames: 128,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(Error::InvalidArgument(msg.to_string()));
        if self.frames < 2 {
            return bad("clip length must be at least 2");
        }
        if self.stride == 0 {
            return bad("stride must be at least 1");
        }
        if self.batch_size == 0 {
            return bad("batch size must be at least 1");
        }
        if !(self.learning_rate > 0.0) || !self.learning_rate.is_finite() {
            return bad("learning rate must be positive");
        }
        if !(self.weight_decay >= 0.0) {
            return bad("weight decay must be non-negative");
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return bad("betas must lie in [0, 1)");
        }
        if self.k_pos == 0 || self.k_neg == 0 {
            return bad("k_pos and k_neg must be positive");
        }
        if self.frames > self.max_frames {
            return bad("clip length exceeds max_frames");
        }
        Ok(())
    }

    /// Frames covered by one clip.
    pub fn span(&self) -> usize {
        (self.frames - 1) * self.stride + 1
    }
}

/// First and second moments per parameter tensor, in [`PARAM_NAMES`] order.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub step: u64,
    pub first: Vec<Vec<f64>>,
    pub second: Vec<Vec<f64>>,
}

impl OptimizerState {
    pub fn new<T: Real>(params: &CorrelatorParams<T>) -> Self {
        let zeros: Vec<Vec<f64>> = params
            .tensors()
            .iter()
            .map(|(_, m)| vec![0.0; m.data().len()])
            .collect();
        Self {
            step: 0,
            first: zeros.clone(),
            second: zeros,
        }
    }
}

/// One AdamW update: multiplicative decay, then the bias-corrected moment step.
pub fn optimizer_step<T: Real>(
    params: &mut CorrelatorParams<T>,
    grads: &CorrelatorGrads<T>,
    state: &mut OptimizerState,
    config: &TrainConfig,
) -> Result<()> {
    if params.config != grads.config || state.first.len() != PARAM_NAMES.len() {
        return Err(Error::shape("gradient or optimizer state does not match parameters"));
    }
    for ((name, p), (_, g)) in params.tensors().into_iter().zip(grads.tensors()) {
        if p.shape() != g.shape() {
            return Err(Error::shape(format!("gradient of {name} has the wrong shape")));
        }
        if !g.is_finite() {
            return Err(Error::NonFinite(format!("gradient of {name}")));
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - config.beta1.powi(t);
    let c2 = 1.0 - config.beta2.powi(t);
    let decay = 1.0 - config.learning_rate * config.weight_decay;
    let (b1, b2) = (config.beta1, config.beta2);
    for (i, ((_, p), (_, g))) in params.tensors_mut().into_iter().zip(grads.tensors()).enumerate() {
        let (m, v) = (&mut state.first[i], &mut state.second[i]);
        for (k, (w, &gk)) in p.data_mut().iter_mut().zip(g.data()).enumerate() {
            let gk = gk.as_f64();
            m[k] = b1 * m[k] + (1.0 - b1) * gk;
            v[k] = b2 * v[k] + (1.0 - b2) * gk * gk;
            let update = (m[k] / c1) / ((v[k] / c2).sqrt() + config.eps);
            *w = T::of(w.as_f64() * decay - config.learning_rate * update);
        }
    }
    Ok(())
}

/// Frames `{s, s+stride, …}` from a uniformly drawn start `s`.
pub fn sample_clip<R: Rng>(
    video: &VideoFeatures,
    frames: usize,
    stride: usize,
    rng: &mut R,
) -> Result<FeatureClip<f32>> {
    if frames == 0 || stride == 0 {
        return Err(Error::InvalidArgument("clip length and stride must be positive".into()));
    }
    let span = (frames - 1) * stride + 1;
    let len = video.frames();
    if len < span {
        return Err(Error::InvalidArgument(format!(
            "video has {len} frames, clip needs {span}"
        )));
    }
    let start = rng.gen_range(0..=len - span);
    let idx: Vec<usize> = (0..frames).map(|i| start + i * stride).collect();
    video.clip(&idx, stride)
}

/// Loss and parameter gradient of one clip.
pub fn clip_loss_and_grad(
    clip: &FeatureClip<f32>,
    params: &CorrelatorParams<f32>,
    config: &TrainConfig,
) -> Result<(f64, CorrelatorGrads<f32>)> {
    let (fused, attention, cache) = forward_with_cache(clip, params)?;
    let sets = sample_index_sets(&attention, config.k_pos, config.k_neg)?;
    let loss = evaluate(&fused, &attention, &sets, config.margins)?;
    let (gf, ga) = objective_backward(&fused, &attention, &sets, config.margins, &loss.weights)?;
    let grads = backward_with_cache(&cache, params, &gf, &ga)?;
    Ok((loss.total, grads))
}

/// Stateful training loop over in-memory videos.
pub struct Trainer<'a> {
    videos: Vec<&'a VideoFeatures>,
    config: TrainConfig,
    params: CorrelatorParams<f32>,
    state: OptimizerState,
    rng: ChaCha8Rng,
    losses: Vec<f64>,
}

impl<'a> Trainer<'a> {
    /// Videos shorter than one clip span are skipped with a warning.
    pub fn new(videos: &'a [VideoFeatures], params: CorrelatorParams<f32>, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let span = config.span();
        let mut usable = Vec::new();
        for (i, v) in videos.iter().enumerate() {
            if v.channels() != params.config.dim {
                return Err(Error::shape(format!(
                    "video {i} has {} channels, correlator expects {}",
                    v.channels(),
                    params.config.dim
                )));
            }
            if v.frames() < span {
                log::warn!("skipping video {i}: {} frames, clip spans {span}", v.frames());
            } else {
                usable.push(v);
            }
        }
        if usable.is_empty() {
            return Err(Error::Empty("training set (no video is long enough)"));
        }
        Ok(Self {
            videos: usable,
            state: OptimizerState::new(&params),
            rng: ChaCha8Rng::seed_from_u64(config.seed),
            params,
            config,
            losses: Vec::new(),
        })
    }

    /// One batch: returns the mean clip loss before the update.
    pub fn step(&mut self) -> Result<f64> {
        let iter = self.losses.len() + 1;
        let clips: Vec<FeatureClip<f32>> = (0..self.config.batch_size)
            .map(|_| {
                let v = self.videos[self.rng.gen_range(0..self.videos.len())];
                sample_clip(v, self.config.frames, self.config.stride, &mut self.rng)
            })
            .collect::<Result<_>>()?;
        let (params, config) = (&self.params, &self.config);
        let results: Vec<(f64, CorrelatorGrads<f32>)> = clips
            .par_iter()
            .map(|clip| clip_loss_and_grad(clip, params, config))
            .collect::<Result<_>>()?;
        let mut grads = self.params.zeros_like();
        let mut loss = 0.0;
        for (l, g) in &results {
            loss += l;
            grads.accumulate(g);
        }
        let inv = 1.0 / results.len() as f64;
        loss *= inv;
        grads.scale(inv as f32);
        if !loss.is_finite() {
            return Err(Error::Diverged(iter));
        }
        optimizer_step(&mut self.params, &grads, &mut self.state, &self.config)?;
        self.losses.push(loss);
        Ok(loss)
    }

    pub fn run(&mut self, iters: usize) -> Result<()> {
        for _ in 0..iters {
            let loss = self.step()?;
            let i = self.losses.len();
            if i % 100 == 0 {
                log::info!("iter {i}: loss {loss:.6}");
            }
        }
        Ok(())
    }

    pub fn params(&self) -> &CorrelatorParams<f32> {
        &self.params
    }

    pub fn losses(&self) -> &[f64] {
        &self.losses
    }

    pub fn into_run(self) -> TrainRun {
        TrainRun {
            params: self.params,
            losses: self.losses,
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrainRun {
    pub params: CorrelatorParams<f32>,
    /// Mean batch loss per iteration.
    pub losses: Vec<f64>,
}

/// Runs `config.total_iters` steps from `init`.
pub fn train_on_videos(
    videos: &[VideoFeatures],
    init: CorrelatorParams<f32>,
    config: &TrainConfig,
) -> Result<TrainRun> {
    let mut trainer = Trainer::new(videos, init, config.clone())?;
    trainer.run(config.total_iters)?;
    Ok(trainer.into_run())
}

/// Loads every manifest entry and trains a freshly initialized block.
pub fn train(manifest: impl AsRef<Path>, config: &TrainConfig) -> Result<TrainRun> {
    let entries = read_manifest(manifest)?;
    if entries.is_empty() {
        return Err(Error::Empty("manifest"));
    }
    let videos: Vec<VideoFeatures> = entries
        .iter()
        .map(|e| {
            let v = VideoFeatures::read(&e.feature_path)?;
            if v.frames() != e.num_frames {
                log::warn!(
                    "{}: manifest lists {} frames, file has {}",
                    e.video_id,
                    e.num_frames,
                    v.frames()
                );
            }
            Ok(v)
        })
        .collect::<Result<_>>()?;
    let dim = videos[0].channels();
    if let Some(v) = videos.iter().position(|v| v.channels() != dim) {
        return Err(Error::shape(format!(
            "{} has {} channels, {} has {dim}",
            entries[v].video_id,
            videos[v].channels(),
            entries[0].video_id
        )));
    }
    let cfg = CorrelatorConfig::new(dim, config.heads, config.max_frames)?;
    let init = CorrelatorParams::init(cfg, config.seed)?;
    train_on_videos(&videos, init, config)
}

pub fn write_loss_log(path: impl AsRef<Path>, losses: &[f64]) -> Result<()> {
    let path = path.as_ref();
    let mut out = String::with_capacity(losses.len() * 16);
    for (i, l) in losses.iter().enumerate() {
        out.push_str(&format!("{}\t{l}\n", i + 1));
    }
    fs::File::create(path)
        .and_then(|mut f| f.write_all(out.as_bytes()))
        .map_err(|e| Error::io(path, e))
}

pub fn checkpoint_container(params: &CorrelatorParams<f32>) -> Result<TensorContainer> {
    let cfg = params.config;
    let mut tensors = vec![Tensor::u32(
        "meta",
        &[4],
        vec![cfg.dim as u32, cfg.heads as u32, cfg.max_frames as u32, CHECKPOINT_VERSION],
    )?];
    for (name, m) in params.tensors() {
        tensors.push(Tensor::f32(name, &[m.rows(), m.cols()], m.data().to_vec())?);
    }
    TensorContainer::from_tensors(tensors)
}

pub fn params_from_container(c: &TensorContainer) -> Result<CorrelatorParams<f32>> {
    let meta = c.require("meta")?.as_u32()?;
    let [dim, heads, max_frames, version] = meta else {
        return Err(Error::Tensor {
            name: "meta".into(),
            reason: format!("expected 4 entries, found {}", meta.len()),
        });
    };
    if *version != CHECKPOINT_VERSION {
        return Err(Error::Tensor {
            name: "meta".into(),
            reason: format!("unsupported checkpoint version {version}"),
        });
    }
    let ff = c.require("ff1_weight")?.dims_usize();
    let ff_ratio = match ff.as_slice() {
        [rows, cols] if *rows == *dim as usize && cols % rows == 0 => cols / rows,
        _ => {
            return Err(Error::Tensor {
                name: "ff1_weight".into(),
                reason: format!("shape {ff:?} does not fit dim {dim}"),
            })
        }
    };
    let config = CorrelatorConfig {
        dim: *dim as usize,
        heads: *heads as usize,
        max_frames: *max_frames as usize,
        ff_ratio,
    };
    config.validate()?;
    let mut params = CorrelatorParams::zeros(config);
    for (name, m) in params.tensors_mut() {
        let t = c.require(name)?;
        let dims = t.dims_usize();
        if dims != [m.rows(), m.cols()] {
            return Err(Error::Tensor {
                name: name.into(),
                reason: format!("expected {:?}, found {dims:?}", [m.rows(), m.cols()]),
            });
        }
        *m = Matrix::new(m.rows(), m.cols(), t.as_f32()?.to_vec())?;
    }
    Ok(params)
}

pub fn save_checkpoint(path: impl AsRef<Path>, params: &CorrelatorParams<f32>) -> Result<()> {
    write_tensor(path, &checkpoint_container(params)?)
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<CorrelatorParams<f32>> {
    params_from_container(&read_tensor(path)?)
}

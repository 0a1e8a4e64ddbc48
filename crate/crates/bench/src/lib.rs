//! Fixtures shared by the criterion benches.

use stcorr_core::{synth_scene, CorrelatorConfig, CorrelatorParams, SynthSceneConfig, VideoFeatures};

/// A synthetic video with `frames` frames of `side × side` patches.
pub fn scene(frames: usize, side: usize, channels: usize) -> VideoFeatures {
    synth_scene(&SynthSceneConfig {
        frames,
        height: side,
        width: side,
        channels,
        noise: 0.1,
        seed: 7,
        ..Default::default()
    })
    .expect("bench scene")
    .features
}

pub fn params(channels: usize, heads: usize) -> CorrelatorParams<f32> {
    let cfg = CorrelatorConfig::new(channels, heads, 64).expect("bench config");
    CorrelatorParams::init(cfg, 0).expect("bench params")
}

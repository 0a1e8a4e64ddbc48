//! Unsupervised video object segmentation from a single spatio-temporal
//! attention block trained over frozen patch features.
//!
//! The pipeline: [`correlator`] fuses a clip and exposes its attention,
//! [`objective`] scores attention and features for self-supervised training,
//! [`trainer`] fits the block, [`clusterer`] groups attention rows into
//! segments and [`metrics`] scores them. [`dataio`] holds the file formats and
//! the synthetic scene generator.

pub mod clusterer;
pub mod correlator;
pub mod dataio;
pub mod error;
pub mod metrics;
pub mod numerics;
pub mod objective;
pub mod trainer;

pub use clusterer::{
    assign, hierarchical_cluster, merge_to_foreground, segment_video, uniform_key_frames,
    ClusterModel, Clustering, Metric, RowSource, SegmentOptions, SegmentationResult, SourceKind,
};
pub use correlator::{
    backward, cross_attention, forward, AttentionField, CorrelatorConfig, CorrelatorGrads,
    CorrelatorParams, FeatureClip, FusedFeatures,
};
pub use dataio::{synth_scene, SynthScene, SynthSceneConfig, Tensor, TensorContainer, VideoFeatures};
pub use error::{Error, Result};
pub use metrics::{evaluate as evaluate_segmentation, fg_ari, hungarian_match, LabelVolume, MetricsReport, Protocol};
pub use numerics::{Matrix, Real};
pub use objective::{objective_backward, sample_index_sets, IndexSets, LossBreakdown, Margins};
pub use trainer::{
    load_checkpoint, optimizer_step, sample_clip, save_checkpoint, train, train_on_videos,
    OptimizerState, TrainConfig, TrainRun, Trainer,
};

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use stcorr_core::clusterer::{SourceKind, TAU_MULTI, TAU_SINGLE};
use stcorr_core::correlator::IDENTITY_SHARPNESS;
use stcorr_core::dataio::{
    read_backbone_attention, read_label_volume, read_manifest, read_tensor, write_label_volume,
    write_manifest, ManifestEntry,
};
use stcorr_core::metrics::{evaluate_with_radius, default_boundary_radius, format_report};
use stcorr_core::trainer::{save_checkpoint, write_loss_log};
use stcorr_core::{
    load_checkpoint, merge_to_foreground, segment_video, synth_scene, train, CorrelatorConfig,
    CorrelatorParams, Margins, Protocol, RowSource, SegmentOptions, SynthSceneConfig, TrainConfig,
    VideoFeatures,
};

#[derive(Parser, Debug)]
#[command(name = "stcorr", version, about = "Attention-clustering video object segmentation")]
struct Cli {
    /// Worker threads; 0 uses every core.
    #[arg(long, global = true, env = "STCORR_THREADS", default_value_t = 0)]
    threads: usize,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write synthetic feature videos, ground-truth masks and a manifest.
    Synth(SynthArgs),
    /// Train the correlator on the videos listed in a manifest.
    Train(TrainArgs),
    /// Segment feature videos by clustering attention rows.
    Segment(SegmentArgs),
    /// Score predicted masks against ground truth.
    Eval(EvalArgs),
    /// Print the tensor headers of a container file.
    Inspect(InspectArgs),
}

#[derive(Args, Debug)]
struct SynthArgs {
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    /// Number of videos.
    #[arg(long, default_value_t = 4)]
    videos: usize,
    #[arg(long, default_value_t = 3)]
    objects: usize,
    #[arg(long, default_value_t = 12)]
    frames: usize,
    #[arg(long, default_value_t = 12)]
    height: usize,
    #[arg(long, default_value_t = 12)]
    width: usize,
    #[arg(long, default_value_t = 32)]
    channels: usize,
    /// Patches moved per frame.
    #[arg(long, default_value_t = 1.0)]
    speed: f64,
    /// Gaussian feature noise.
    #[arg(long, default_value_t = 0.05)]
    noise: f64,
    /// Cosine similarity between region prototypes.
    #[arg(long, default_value_t = 0.1)]
    separation: f64,
    #[arg(long, default_value_t = 3)]
    min_size: usize,
    #[arg(long, default_value_t = 5)]
    max_size: usize,
    /// Seed of the first video; video i uses seed + i.
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args, Debug)]
struct TrainArgs {
    /// Manifest listing `<id>\t<feature file>\t<frames>`.
    #[arg(long)]
    manifest: PathBuf,
    /// Output directory for checkpoint.stf and loss.tsv.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 30_000)]
    iters: usize,
    #[arg(long, default_value_t = 1e-4)]
    lr: f64,
    #[arg(long, default_value_t = 0.05)]
    weight_decay: f64,
    #[arg(long, default_value_t = 16)]
    batch: usize,
    /// Frames per clip.
    #[arg(long, default_value_t = 3)]
    frames: usize,
    #[arg(long, default_value_t = 4)]
    stride: usize,
    /// Positives per frame.
    #[arg(long, default_value_t = 10)]
    kp: usize,
    /// Negatives per frame.
    #[arg(long, default_value_t = 50)]
    kn: usize,
    /// Cosine-distance margin.
    #[arg(long, default_value_t = 0.5)]
    margin_s: f64,
    /// Symmetric-KL margin.
    #[arg(long, default_value_t = 1.0)]
    margin_m: f64,
    #[arg(long, default_value_t = 8)]
    heads: usize,
    /// Temporal embeddings; bounds the frames segmentable in one pass.
    #[arg(long, default_value_t = 128)]
    max_frames: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args, Debug)]
struct SegmentArgs {
    /// Feature file of one video.
    #[arg(long, conflicts_with = "manifest", required_unless_present = "manifest")]
    features: Option<PathBuf>,
    /// Manifest of videos to segment.
    #[arg(long)]
    manifest: Option<PathBuf>,
    /// Trained correlator.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Use the untrained identity-like correlator instead of a checkpoint.
    #[arg(long, conflicts_with = "checkpoint")]
    identity: bool,
    /// Attention sharpness of the identity-like correlator.
    #[arg(long, default_value_t = IDENTITY_SHARPNESS)]
    sharpness: f64,
    /// Clustering threshold [default: 1.0 for multi, 0.6 for single].
    #[arg(long)]
    tau: Option<f64>,
    /// multi (objects kept apart) or single (one foreground).
    #[arg(long, default_value = "multi", value_parser = parse_protocol)]
    protocol: Protocol,
    /// Fraction of frames used as attention keys, in (0, 1].
    #[arg(long, default_value_t = 1.0, value_parser = parse_ratio)]
    key_ratio: f64,
    /// correlator-attention, raw-features or backbone-attention.
    #[arg(long, default_value = "correlator-attention", value_parser = parse_source)]
    metric_source: SourceKind,
    /// Backbone attention file [default: the feature path with extension
    /// `attn.stf`].
    #[arg(long)]
    attention: Option<PathBuf>,
    /// Ground-truth mask directory; with --protocol single, clusters are
    /// merged into a binary foreground against it.
    #[arg(long)]
    gt: Option<PathBuf>,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct EvalArgs {
    /// Predicted masks: one sequence directory, or a directory of them.
    #[arg(long)]
    pred: PathBuf,
    /// Ground-truth masks, laid out like --pred.
    #[arg(long)]
    gt: PathBuf,
    /// multi (per-object matching) or single (merged foreground).
    #[arg(long, default_value = "multi", value_parser = parse_protocol)]
    protocol: Protocol,
    /// Boundary tolerance in pixels [default: 0.8% of the image diagonal].
    #[arg(long)]
    radius: Option<usize>,
}

#[derive(Args, Debug)]
struct InspectArgs {
    #[arg(long)]
    file: PathBuf,
}

/// Flag combinations clap cannot express; reported like parse errors.
#[derive(Debug)]
struct UsageError(String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

fn usage(msg: &str) -> anyhow::Error {
    UsageError(msg.to_string()).into()
}

fn parse_protocol(s: &str) -> Result<Protocol, String> {
    s.parse().map_err(|e: stcorr_core::Error| e.to_string())
}

fn parse_source(s: &str) -> Result<SourceKind, String> {
    s.parse().map_err(|e: stcorr_core::Error| e.to_string())
}

fn parse_ratio(s: &str) -> Result<f64, String> {
    let v: f64 = s.parse().map_err(|_| format!("{s:?} is not a number"))?;
    if v > 0.0 && v <= 1.0 {
        Ok(v)
    } else {
        Err(format!("{v} is outside (0, 1]"))
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    if cli.threads > 0 {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(cli.threads).build_global() {
            log::warn!("could not size the thread pool: {e}");
        }
    }
    let result = match cli.command {
        Command::Synth(a) => run_synth(a),
        Command::Train(a) => run_train(a),
        Command::Segment(a) => run_segment(a),
        Command::Eval(a) => run_eval(a),
        Command::Inspect(a) => run_inspect(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) if e.is::<UsageError>() => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

fn run_synth(a: SynthArgs) -> Result<()> {
    let features_dir = a.out.join("features");
    let masks_dir = a.out.join("masks");
    create_dir(&features_dir)?;
    create_dir(&masks_dir)?;
    let mut entries = Vec::new();
    for i in 0..a.videos {
        let id = format!("synth_{i:03}");
        let scene = synth_scene(&SynthSceneConfig {
            num_objects: a.objects,
            frames: a.frames,
            height: a.height,
            width: a.width,
            channels: a.channels,
            speed: a.speed,
            noise: a.noise,
            separation: a.separation,
            min_size: a.min_size,
            max_size: a.max_size,
            seed: a.seed + i as u64,
        })?;
        let name = format!("{id}.stf");
        scene.features.write(features_dir.join(&name))?;
        write_label_volume(masks_dir.join(&id), &scene.labels)?;
        entries.push(ManifestEntry {
            video_id: id,
            feature_path: PathBuf::from("features").join(name),
            num_frames: a.frames,
        });
    }
    write_manifest(a.out.join("manifest.tsv"), &entries)?;
    println!("wrote {} videos to {}", a.videos, a.out.display());
    Ok(())
}

fn run_train(a: TrainArgs) -> Result<()> {
    let config = TrainConfig {
        frames: a.frames,
        stride: a.stride,
        k_pos: a.kp,
        k_neg: a.kn,
        margins: Margins {
            semantic: a.margin_s,
            motion: a.margin_m,
        },
        learning_rate: a.lr,
        weight_decay: a.weight_decay,
        batch_size: a.batch,
        total_iters: a.iters,
        heads: a.heads,
        max_frames: a.max_frames,
        seed: a.seed,
        ..TrainConfig::default()
    };
    let run = train(&a.manifest, &config)?;
    create_dir(&a.out)?;
    save_checkpoint(a.out.join("checkpoint.stf"), &run.params)?;
    write_loss_log(a.out.join("loss.tsv"), &run.losses)?;
    match run.losses.last() {
        Some(l) => println!("trained {} iterations, final loss {l:.6}", run.losses.len()),
        None => println!("trained 0 iterations"),
    }
    Ok(())
}

fn run_segment(a: SegmentArgs) -> Result<()> {
    let videos: Vec<(String, PathBuf)> = match (&a.features, &a.manifest) {
        (Some(f), None) => {
            let id = f
                .file_stem()
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_else(|| "video".into());
            vec![(id, f.clone())]
        }
        (None, Some(m)) => read_manifest(m)?
            .into_iter()
            .map(|e| (e.video_id, e.feature_path))
            .collect(),
        _ => return Err(usage("pass exactly one of --features and --manifest")),
    };
    if a.attention.is_some() && (a.metric_source != SourceKind::BackboneAttention || a.manifest.is_some()) {
        return Err(usage("--attention needs --features and --metric-source backbone-attention"));
    }
    let tau = a.tau.unwrap_or(match a.protocol {
        Protocol::Multi => TAU_MULTI,
        Protocol::Single => TAU_SINGLE,
    });
    let options = SegmentOptions {
        tau,
        key_ratio: a.key_ratio,
    };
    create_dir(&a.out)?;
    let mut summary = String::from("sequence_id\tframes\tclusters\tmetric\tkey_frames\n");
    let checkpoint = match &a.checkpoint {
        Some(path) => Some(load_checkpoint(path)?),
        None => None,
    };
    if a.metric_source == SourceKind::Correlator && checkpoint.is_none() && !a.identity {
        return Err(usage("correlator-attention needs --checkpoint or --identity"));
    }
    for (id, path) in &videos {
        let features = VideoFeatures::read(path)?;
        let (backbone, identity);
        let source = match a.metric_source {
            SourceKind::Features => RowSource::Features,
            SourceKind::BackboneAttention => {
                let file = a.attention.clone().unwrap_or_else(|| path.with_extension("attn.stf"));
                let (frames, att) = read_backbone_attention(&file)?;
                if frames != features.frames() {
                    bail!("{}: {frames} attention frames for {} feature frames", file.display(), features.frames());
                }
                backbone = att;
                RowSource::BackboneAttention(&backbone)
            }
            SourceKind::Correlator => match &checkpoint {
                Some(p) => RowSource::Correlator(p),
                None => {
                    let cfg = CorrelatorConfig::new(features.channels(), 8, features.frames().max(1))?;
                    identity = CorrelatorParams::identity_like(cfg, a.sharpness)?;
                    RowSource::Correlator(&identity)
                }
            },
        };
        let result = segment_video(&features, source, &options).with_context(|| format!("segmenting {id}"))?;
        let labels = match (&a.gt, a.protocol) {
            (Some(gt_root), Protocol::Single) => {
                let gt = read_label_volume(sequence_dir(gt_root, id, videos.len()))?;
                merge_to_foreground(&result, &gt)?
            }
            _ => result.labels.clone(),
        };
        let out_dir = if videos.len() == 1 && a.manifest.is_none() {
            a.out.clone()
        } else {
            a.out.join(id)
        };
        write_label_volume(&out_dir, &labels)?;
        summary.push_str(&format!(
            "{id}\t{}\t{}\t{}\t{}\n",
            features.frames(),
            result.num_clusters,
            result.metric.name(),
            result.key_frames.len()
        ));
        log::info!("{id}: {} clusters", result.num_clusters);
    }
    let summary_path = a.out.join("summary.tsv");
    fs::write(&summary_path, &summary).with_context(|| format!("writing {}", summary_path.display()))?;
    print!("{summary}");
    Ok(())
}

/// Ground truth for sequence `id`: `root/id` when it exists, else `root`
/// itself for single-video runs.
fn sequence_dir(root: &Path, id: &str, videos: usize) -> PathBuf {
    let nested = root.join(id);
    if nested.is_dir() || videos > 1 {
        nested
    } else {
        root.to_path_buf()
    }
}

fn has_masks(dir: &Path) -> bool {
    fs::read_dir(dir)
        .map(|entries| {
            entries
                .filter_map(|e| e.ok())
                .any(|e| e.path().is_file() && e.path().extension().is_some_and(|x| x == "stf"))
        })
        .unwrap_or(false)
}

fn run_eval(a: EvalArgs) -> Result<()> {
    let sequences: Vec<(String, PathBuf, PathBuf)> = if has_masks(&a.gt) {
        let id = a
            .gt
            .file_name()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| "sequence".into());
        vec![(id, a.pred.clone(), a.gt.clone())]
    } else {
        let mut ids: Vec<String> = fs::read_dir(&a.gt)
            .with_context(|| format!("reading {}", a.gt.display()))?
            .filter_map(|e| e.ok())
            .filter(|e| e.path().is_dir())
            .map(|e| e.file_name().to_string_lossy().into_owned())
            .collect();
        ids.sort();
        if ids.is_empty() {
            bail!("{} holds no mask files or sequence directories", a.gt.display());
        }
        ids.into_iter()
            .map(|id| (id.clone(), a.pred.join(&id), a.gt.join(&id)))
            .collect()
    };
    let mut rows = Vec::new();
    for (id, pred_dir, gt_dir) in sequences {
        let gt = read_label_volume(&gt_dir)?;
        let pred = read_label_volume(&pred_dir).with_context(|| format!("predictions for {id}"))?;
        let radius = a.radius.unwrap_or_else(|| default_boundary_radius(gt.height, gt.width));
        let report = evaluate_with_radius(&pred, &gt, a.protocol, radius).with_context(|| format!("evaluating {id}"))?;
        rows.push((id, report));
    }
    print!("{}", format_report(&rows));
    Ok(())
}

fn run_inspect(a: InspectArgs) -> Result<()> {
    let container = read_tensor(&a.file)?;
    println!("{}: {} tensors, {} bytes", a.file.display(), container.len(), container.encoded_len());
    println!("name\tdtype\tdims\tbytes");
    for t in container.tensors() {
        let dims: Vec<String> = t.dims.iter().map(|d| d.to_string()).collect();
        println!(
            "{}\t{}\t[{}]\t{}",
            t.name,
            t.data.dtype_name(),
            dims.join(", "),
            t.encoded_len()
        );
    }
    Ok(())
}

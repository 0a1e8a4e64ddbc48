//! File formats and the synthetic scene generator.
//!
//! Everything on disk is an STF1 container:
//!
//! ```text
//! magic    "STF1"                      4 bytes
//! count    u32                         number of tensors
//! per tensor:
//!   name_len u16, name bytes (UTF-8)
//!   dtype    u8   (1 = f32, 2 = f64, 3 = u16, 4 = u32)
//!   ndim     u8
//!   dims     ndim × u64
//!   payload  row-major
//! ```
//!
//! All integers and payloads are little-endian.

use std::collections::HashSet;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::correlator::FeatureClip;
use crate::error::{Error, Result};
use crate::metrics::LabelVolume;
use crate::numerics::Matrix;

pub const MAGIC: [u8; 4] = *b"STF1";

#[derive(Debug, Clone, PartialEq)]
pub enum TensorData {
    F32(Vec<f32>),
    F64(Vec<f64>),
    U16(Vec<u16>),
    U32(Vec<u32>),
}

impl TensorData {
    pub fn dtype_code(&self) -> u8 {
        match self {
            TensorData::F32(_) => 1,
            TensorData::F64(_) => 2,
            TensorData::U16(_) => 3,
            TensorData::U32(_) => 4,
        }
    }

    pub fn dtype_name(&self) -> &'static str {
        match self {
            TensorData::F32(_) => "f32",
            TensorData::F64(_) => "f64",
            TensorData::U16(_) => "u16",
            TensorData::U32(_) => "u32",
        }
    }

    pub fn len(&self) -> usize {
        match self {
            TensorData::F32(v) => v.len(),
            TensorData::F64(v) => v.len(),
            TensorData::U16(v) => v.len(),
            TensorData::U32(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn width(code: u8) -> Result<usize> {
        match code {
            1 => Ok(4),
            2 => Ok(8),
            3 => Ok(2),
            4 => Ok(4),
            other => Err(Error::UnknownDtype(other)),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub name: String,
    pub dims: Vec<u64>,
    pub data: TensorData,
}

impl Tensor {
    pub fn new(name: impl Into<String>, dims: Vec<u64>, data: TensorData) -> Result<Self> {
        let name = name.into();
        let expected: u64 = dims.iter().product();
        if expected != data.len() as u64 {
            return Err(Error::Tensor {
                name,
                reason: format!("dims {dims:?} need {expected} elements, got {}", data.len()),
            });
        }
        if name.len() > u16::MAX as usize || dims.len() > u8::MAX as usize {
            return Err(Error::Tensor {
                name,
                reason: "name or rank too long for the header".into(),
            });
        }
        Ok(Self { name, dims, data })
    }

    pub fn f32(name: impl Into<String>, dims: &[usize], data: Vec<f32>) -> Result<Self> {
        Self::new(name, to_u64(dims), TensorData::F32(data))
    }

    pub fn u16(name: impl Into<String>, dims: &[usize], data: Vec<u16>) -> Result<Self> {
        Self::new(name, to_u64(dims), TensorData::U16(data))
    }

    pub fn u32(name: impl Into<String>, dims: &[usize], data: Vec<u32>) -> Result<Self> {
        Self::new(name, to_u64(dims), TensorData::U32(data))
    }

    pub fn dims_usize(&self) -> Vec<usize> {
        self.dims.iter().map(|&d| d as usize).collect()
    }

    fn wrong_dtype(&self, wanted: &str) -> Error {
        Error::Tensor {
            name: self.name.clone(),
            reason: format!("expected {wanted}, found {}", self.data.dtype_name()),
        }
    }

    pub fn as_f32(&self) -> Result<&[f32]> {
        match &self.data {
            TensorData::F32(v) => Ok(v),
            _ => Err(self.wrong_dtype("f32")),
        }
    }

    pub fn as_u16(&self) -> Result<&[u16]> {
        match &self.data {
            TensorData::U16(v) => Ok(v),
            _ => Err(self.wrong_dtype("u16")),
        }
    }

    pub fn as_u32(&self) -> Result<&[u32]> {
        match &self.data {
            TensorData::U32(v) => Ok(v),
            _ => Err(self.wrong_dtype("u32")),
        }
    }

    /// Size of this tensor's record in an STF1 file.
    pub fn encoded_len(&self) -> usize {
        let width = TensorData::width(self.data.dtype_code()).expect("valid dtype");
        2 + self.name.len() + 1 + 1 + 8 * self.dims.len() + width * self.data.len()
    }
}

fn to_u64(dims: &[usize]) -> Vec<u64> {
    dims.iter().map(|&d| d as u64).collect()
}

/// An ordered set of uniquely named tensors.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TensorContainer {
    tensors: Vec<Tensor>,
}

impl TensorContainer {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_tensors(tensors: Vec<Tensor>) -> Result<Self> {
        let mut c = Self::new();
        for t in tensors {
            c.push(t)?;
        }
        Ok(c)
    }

    pub fn push(&mut self, tensor: Tensor) -> Result<()> {
        if self.get(&tensor.name).is_some() {
            return Err(Error::DuplicateName(tensor.name));
        }
        self.tensors.push(tensor);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.iter().find(|t| t.name == name)
    }

    pub fn require(&self, name: &str) -> Result<&Tensor> {
        self.get(name).ok_or_else(|| Error::Tensor {
            name: name.to_string(),
            reason: "missing from container".into(),
        })
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn encoded_len(&self) -> usize {
        8 + self.tensors.iter().map(Tensor::encoded_len).sum::<usize>()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.encoded_len());
        out.extend_from_slice(&MAGIC);
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for t in &self.tensors {
            out.extend_from_slice(&(t.name.len() as u16).to_le_bytes());
            out.extend_from_slice(t.name.as_bytes());
            out.push(t.data.dtype_code());
            out.push(t.dims.len() as u8);
            for d in &t.dims {
                out.extend_from_slice(&d.to_le_bytes());
            }
            match &t.data {
                TensorData::F32(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
                TensorData::F64(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
                TensorData::U16(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
                TensorData::U32(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = ByteReader { bytes, pos: 0 };
        let magic: [u8; 4] = r.take(4, "magic")?.try_into().expect("4 bytes");
        if magic != MAGIC {
            return Err(Error::BadMagic(magic));
        }
        let count = u32::from_le_bytes(r.array("tensor count")?);
        let mut tensors = Vec::new();
        let mut names = HashSet::new();
        for i in 0..count {
            let name_len = u16::from_le_bytes(r.array("name length")?) as usize;
            let name = String::from_utf8(r.take(name_len, "name")?.to_vec()).map_err(|_| {
                Error::Tensor {
                    name: format!("#{i}"),
                    reason: "name is not valid UTF-8".into(),
                }
            })?;
            if !names.insert(name.clone()) {
                return Err(Error::DuplicateName(name));
            }
            let [code] = r.array::<1>("dtype")?;
            let width = TensorData::width(code)?;
            let [ndim] = r.array::<1>("rank")?;
            let mut dims = Vec::with_capacity(ndim as usize);
            for _ in 0..ndim {
                dims.push(u64::from_le_bytes(r.array("dims")?));
            }
            let count = dims
                .iter()
                .try_fold(1u64, |acc, &d| acc.checked_mul(d))
                .and_then(|n| usize::try_from(n).ok())
                .ok_or_else(|| Error::Truncated(format!("tensor {name:?} dims overflow")))?;
            let nbytes = count
                .checked_mul(width)
                .ok_or_else(|| Error::Truncated(format!("tensor {name:?} dims overflow")))?;
            let payload = r.take(nbytes, &name)?;
            let data = match code {
                1 => TensorData::F32(
                    payload
                        .chunks_exact(4)
                        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                        .collect(),
                ),
                2 => TensorData::F64(
                    payload
                        .chunks_exact(8)
                        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                        .collect(),
                ),
                3 => TensorData::U16(
                    payload
                        .chunks_exact(2)
                        .map(|c| u16::from_le_bytes(c.try_into().unwrap()))
                        .collect(),
                ),
                _ => TensorData::U32(
                    payload
                        .chunks_exact(4)
                        .map(|c| u32::from_le_bytes(c.try_into().unwrap()))
                        .collect(),
                ),
            };
            tensors.push(Tensor { name, dims, data });
        }
        if r.pos != bytes.len() {
            return Err(Error::InvalidArgument(format!(
                "{} trailing bytes after last tensor",
                bytes.len() - r.pos
            )));
        }
        Ok(Self { tensors })
    }
}

struct ByteReader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> ByteReader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| {
                Error::Truncated(format!(
                    "needed {n} bytes for {what} at offset {}, {} left",
                    self.pos,
                    self.bytes.len() - self.pos
                ))
            })?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn array<const N: usize>(&mut self, what: &str) -> Result<[u8; N]> {
        Ok(self.take(N, what)?.try_into().expect("length checked"))
    }
}

pub fn write_tensor(path: impl AsRef<Path>, container: &TensorContainer) -> Result<()> {
    let path = path.as_ref();
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    fs::write(path, container.to_bytes()).map_err(|e| Error::io(path, e))
}

pub fn read_tensor(path: impl AsRef<Path>) -> Result<TensorContainer> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    TensorContainer::from_bytes(&bytes)
}

/// Writes a single `[H, W]` u16 label raster named `labels`.
pub fn write_mask(path: impl AsRef<Path>, height: usize, width: usize, labels: &[u16]) -> Result<()> {
    let t = Tensor::u16("labels", &[height, width], labels.to_vec())?;
    write_tensor(path, &TensorContainer::from_tensors(vec![t])?)
}

/// Reads a mask file back as `(height, width, labels)`.
pub fn read_mask(path: impl AsRef<Path>) -> Result<(usize, usize, Vec<u16>)> {
    let c = read_tensor(path)?;
    let t = c.require("labels")?;
    if t.dims.len() != 2 {
        return Err(Error::Tensor {
            name: t.name.clone(),
            reason: format!("expected 2 dims, found {:?}", t.dims),
        });
    }
    let labels = t.as_u16()?.to_vec();
    Ok((t.dims[0] as usize, t.dims[1] as usize, labels))
}

pub fn mask_file_name(frame: usize) -> String {
    format!("frame_{frame:05}.stf")
}

/// Writes one mask file per frame into `dir`.
pub fn write_label_volume(dir: impl AsRef<Path>, volume: &LabelVolume) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for t in 0..volume.frames {
        let labels = volume
            .frame(t)
            .iter()
            .map(|&l| {
                u16::try_from(l).map_err(|_| {
                    Error::InvalidArgument(format!("label {l} does not fit a u16 mask"))
                })
            })
            .collect::<Result<Vec<_>>>()?;
        write_mask(dir.join(mask_file_name(t)), volume.height, volume.width, &labels)?;
    }
    Ok(())
}

/// Reads every `*.stf` mask in `dir`, in file-name order, as one volume.
pub fn read_label_volume(dir: impl AsRef<Path>) -> Result<LabelVolume> {
    let dir = dir.as_ref();
    let mut files: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_file() && p.extension().is_some_and(|x| x == "stf"))
        .collect();
    files.sort();
    if files.is_empty() {
        return Err(Error::Empty("mask directory"));
    }
    let mut labels = Vec::new();
    let mut dims = None;
    for f in &files {
        let (h, w, l) = read_mask(f)?;
        match dims {
            None => dims = Some((h, w)),
            Some(d) if d != (h, w) => {
                return Err(Error::shape(format!(
                    "{}: mask is {h}x{w}, earlier frames are {}x{}",
                    f.display(),
                    d.0,
                    d.1
                )))
            }
            _ => {}
        }
        labels.extend(l.into_iter().map(u32::from));
    }
    let (h, w) = dims.expect("at least one file");
    LabelVolume::new(files.len(), h, w, labels)
}

/// Frozen patch features for every frame of one video.
#[derive(Debug, Clone, PartialEq)]
pub struct VideoFeatures {
    pub height: usize,
    pub width: usize,
    /// `[frames · height · width, channels]`.
    pub data: Matrix<f32>,
}

impl VideoFeatures {
    pub fn new(height: usize, width: usize, data: Matrix<f32>) -> Result<Self> {
        let hw = height * width;
        if hw == 0 || data.rows() % hw != 0 {
            return Err(Error::shape(format!(
                "{} rows is not a whole number of {height}x{width} frames",
                data.rows()
            )));
        }
        Ok(Self {
            height,
            width,
            data,
        })
    }

    pub fn frames(&self) -> usize {
        self.data.rows() / (self.height * self.width)
    }

    pub fn channels(&self) -> usize {
        self.data.cols()
    }

    pub fn tokens_per_frame(&self) -> usize {
        self.height * self.width
    }

    /// Gathers the given frames into a clip.
    pub fn clip(&self, frame_indices: &[usize], stride: usize) -> Result<FeatureClip<f32>> {
        let hw = self.tokens_per_frame();
        if let Some(&bad) = frame_indices.iter().find(|&&f| f >= self.frames()) {
            return Err(Error::InvalidArgument(format!(
                "frame {bad} outside video of {} frames",
                self.frames()
            )));
        }
        let rows: Vec<usize> = frame_indices
            .iter()
            .flat_map(|&f| f * hw..(f + 1) * hw)
            .collect();
        FeatureClip::new(
            frame_indices.len(),
            self.height,
            self.width,
            self.data.select_rows(&rows),
            frame_indices.to_vec(),
            stride,
        )
    }

    /// The whole video as a single clip.
    pub fn full_clip(&self) -> Result<FeatureClip<f32>> {
        let frames: Vec<usize> = (0..self.frames()).collect();
        self.clip(&frames, 1)
    }

    pub fn to_container(&self) -> Result<TensorContainer> {
        let t = self.frames();
        TensorContainer::from_tensors(vec![
            Tensor::f32(
                "features",
                &[t, self.tokens_per_frame(), self.channels()],
                self.data.data().to_vec(),
            )?,
            Tensor::u32("grid", &[2], vec![self.height as u32, self.width as u32])?,
        ])
    }

    /// Accepts `features` as `[T, H, W, C]`, or `[T, H·W, C]` with a `grid`
    /// tensor holding `[H, W]`.
    pub fn from_container(c: &TensorContainer) -> Result<Self> {
        let t = c.require("features")?;
        let dims = t.dims_usize();
        let (frames, h, w, ch) = match dims.as_slice() {
            &[frames, h, w, ch] => (frames, h, w, ch),
            &[frames, hw, ch] => {
                let grid = c.require("grid")?.as_u32()?;
                if grid.len() != 2 || (grid[0] * grid[1]) as usize != hw {
                    return Err(Error::Tensor {
                        name: "grid".into(),
                        reason: format!("{grid:?} does not factor {hw} tokens"),
                    });
                }
                (frames, grid[0] as usize, grid[1] as usize, ch)
            }
            other => {
                return Err(Error::Tensor {
                    name: t.name.clone(),
                    reason: format!("expected 3 or 4 dims, found {other:?}"),
                })
            }
        };
        let data = Matrix::new(frames * h * w, ch, t.as_f32()?.to_vec())?;
        if !data.is_finite() {
            return Err(Error::NonFinite("feature file".into()));
        }
        Self::new(h, w, data)
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        write_tensor(path, &self.to_container()?)
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_container(&read_tensor(path)?)
    }
}

/// Per-frame backbone attention `[T, H·W, H·W]`, stored as tensor `attention`.
pub fn read_backbone_attention(path: impl AsRef<Path>) -> Result<(usize, Matrix<f32>)> {
    let c = read_tensor(path)?;
    let t = c.require("attention")?;
    match t.dims_usize().as_slice() {
        &[frames, q, k] if q == k => Ok((frames, Matrix::new(frames * q, k, t.as_f32()?.to_vec())?)),
        other => Err(Error::Tensor {
            name: t.name.clone(),
            reason: format!("expected [T, HW, HW], found {other:?}"),
        }),
    }
}

/// One manifest line: `<video_id>\t<feature_file_path>\t<num_frames>`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ManifestEntry {
    pub video_id: String,
    pub feature_path: PathBuf,
    pub num_frames: usize,
}

/// Parses a manifest. Relative feature paths resolve against the manifest's
/// directory. Blank lines and `#` comments are skipped.
pub fn read_manifest(path: impl AsRef<Path>) -> Result<Vec<ManifestEntry>> {
    let path = path.as_ref();
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let base = path.parent().unwrap_or(Path::new(""));
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        let line = line.trim_end_matches('\r');
        if line.trim().is_empty() || line.starts_with('#') {
            continue;
        }
        let parse_err = |reason: String| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            reason,
        };
        let fields: Vec<&str> = line.split('\t').collect();
        let [id, file, frames] = fields.as_slice() else {
            return Err(parse_err(format!("expected 3 tab-separated fields, found {}", fields.len())));
        };
        let num_frames = frames
            .trim()
            .parse()
            .map_err(|_| parse_err(format!("bad frame count {frames:?}")))?;
        let feature_path = PathBuf::from(file);
        let feature_path = if feature_path.is_absolute() {
            feature_path
        } else {
            base.join(feature_path)
        };
        out.push(ManifestEntry {
            video_id: id.to_string(),
            feature_path,
            num_frames,
        });
    }
    Ok(out)
}

pub fn write_manifest(path: impl AsRef<Path>, entries: &[ManifestEntry]) -> Result<()> {
    let path = path.as_ref();
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    for e in entries {
        writeln!(
            f,
            "{}\t{}\t{}",
            e.video_id,
            e.feature_path.display(),
            e.num_frames
        )
        .map_err(|err| Error::io(path, err))?;
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthSceneConfig {
    pub num_objects: usize,
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    /// Patches per frame.
    pub speed: f64,
    /// Per-component Gaussian noise added before renormalization.
    pub noise: f64,
    /// Pairwise cosine similarity between region prototypes.
    pub separation: f64,
    /// Object side lengths are drawn from this inclusive range.
    pub min_size: usize,
    pub max_size: usize,
    pub seed: u64,
}

impl Default for SynthSceneConfig {
    fn default() -> Self {
        Self {
            num_objects: 3,
            frames: 6,
            height: 12,
            width: 12,
            channels: 32,
            speed: 1.0,
            noise: 0.05,
            separation: 0.1,
            min_size: 3,
            max_size: 5,
            seed: 0,
        }
    }
}

/// A generated video with its ground truth.
#[derive(Debug, Clone)]
pub struct SynthScene {
    pub features: VideoFeatures,
    pub labels: LabelVolume,
    /// Unit prototypes; row 0 is the background.
    pub prototypes: Matrix<f64>,
}

#[derive(Debug, Clone, Copy)]
struct Body {
    y: f64,
    x: f64,
    vy: f64,
    vx: f64,
    h: usize,
    w: usize,
}

impl Body {
    fn top_left(&self) -> (usize, usize) {
        (self.y.round() as usize, self.x.round() as usize)
    }

    fn overlaps(&self, other: &Body) -> bool {
        let (ay, ax) = self.top_left();
        let (by, bx) = other.top_left();
        ay < by + other.h && by < ay + self.h && ax < bx + other.w && bx < ax + self.w
    }

    fn step(&mut self, height: usize, width: usize) {
        let max_y = (height - self.h) as f64;
        let max_x = (width - self.w) as f64;
        self.y += self.vy;
        self.x += self.vx;
        if self.y < 0.0 {
            self.y = -self.y;
            self.vy = -self.vy;
        }
        if self.y > max_y {
            self.y = 2.0 * max_y - self.y;
            self.vy = -self.vy;
        }
        if self.x < 0.0 {
            self.x = -self.x;
            self.vx = -self.vx;
        }
        if self.x > max_x {
            self.x = 2.0 * max_x - self.x;
            self.vx = -self.vx;
        }
        self.y = self.y.clamp(0.0, max_y);
        self.x = self.x.clamp(0.0, max_x);
    }
}

/// Rigid rectangles bouncing over a background. Each region owns a unit
/// prototype; prototypes share a common direction so their pairwise cosine
/// similarity equals `separation` exactly.
pub fn synth_scene(config: &SynthSceneConfig) -> Result<SynthScene> {
    let k = config.num_objects;
    let c = config.channels;
    if k == 0 {
        return Err(Error::Synth("need at least one object".into()));
    }
    if c < k + 2 {
        return Err(Error::Synth(format!(
            "{c} channels cannot hold {} orthogonal directions",
            k + 2
        )));
    }
    if !(0.0..1.0).contains(&config.separation) || config.noise < 0.0 {
        return Err(Error::Synth("separation must lie in [0, 1) and noise be >= 0".into()));
    }
    if config.min_size == 0
        || config.min_size > config.max_size
        || config.max_size > config.height.min(config.width)
        || config.frames == 0
    {
        return Err(Error::Synth("objects do not fit in the grid".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);

    // Orthonormal basis by Gram-Schmidt on Gaussian draws.
    let mut basis: Vec<Vec<f64>> = Vec::with_capacity(k + 2);
    while basis.len() < k + 2 {
        let mut v: Vec<f64> = (0..c).map(|_| StandardNormal.sample(&mut rng)).collect();
        for b in &basis {
            let d: f64 = v.iter().zip(b).map(|(x, y)| x * y).sum();
            v.iter_mut().zip(b).for_each(|(x, y)| *x -= d * y);
        }
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 1e-6 {
            v.iter_mut().for_each(|x| *x /= n);
            basis.push(v);
        }
    }
    let (shared, own) = (config.separation.sqrt(), (1.0 - config.separation).sqrt());
    let prototypes = Matrix::from_fn(k + 1, c, |r, j| shared * basis[0][j] + own * basis[r + 1][j]);

    let mut bodies = Vec::with_capacity(k);
    for _ in 0..k {
        let mut placed = None;
        for _attempt in 0..1000 {
            let h = rng.gen_range(config.min_size..=config.max_size);
            let w = rng.gen_range(config.min_size..=config.max_size);
            let angle = rng.gen_range(0.0..std::f64::consts::TAU);
            let b = Body {
                y: rng.gen_range(0..=config.height - h) as f64,
                x: rng.gen_range(0..=config.width - w) as f64,
                vy: config.speed * angle.sin(),
                vx: config.speed * angle.cos(),
                h,
                w,
            };
            if bodies.iter().all(|o: &Body| !o.overlaps(&b)) {
                placed = Some(b);
                break;
            }
        }
        match placed {
            Some(b) => bodies.push(b),
            None => {
                return Err(Error::Synth(format!(
                    "could not place {k} non-overlapping objects in a {}x{} grid",
                    config.height, config.width
                )))
            }
        }
    }

    let hw = config.height * config.width;
    let mut labels = vec![0u32; config.frames * hw];
    let mut data = Vec::with_capacity(config.frames * hw * c);
    for t in 0..config.frames {
        let frame = &mut labels[t * hw..(t + 1) * hw];
        for (id, b) in bodies.iter().enumerate() {
            let (y0, x0) = b.top_left();
            for y in y0..y0 + b.h {
                for x in x0..x0 + b.w {
                    frame[y * config.width + x] = id as u32 + 1;
                }
            }
        }
        for &label in frame.iter() {
            let proto = prototypes.row(label as usize);
            let mut v: Vec<f64> = proto
                .iter()
                .map(|&p| {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    p + config.noise * z
                })
                .collect();
            let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            v.iter_mut().for_each(|x| *x /= n);
            data.extend(v.into_iter().map(|x| x as f32));
        }
        for b in bodies.iter_mut() {
            b.step(config.height, config.width);
        }
    }
    Ok(SynthScene {
        features: VideoFeatures::new(
            config.height,
            config.width,
            Matrix::new(config.frames * hw, c, data)?,
        )?,
        labels: LabelVolume::new(config.frames, config.height, config.width, labels)?,
        prototypes,
    })
}

//! Segmentation metrics: Jaccard, boundary F-measure, foreground ARI and
//! Hungarian matching of predicted clusters to ground-truth objects.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt::Write as _;

use crate::error::{Error, Result};

/// Integer labels over `[frames, height, width]`; 0 is background.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelVolume {
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub labels: Vec<u32>,
}

impl LabelVolume {
    pub fn new(frames: usize, height: usize, width: usize, labels: Vec<u32>) -> Result<Self> {
        if labels.len() != frames * height * width {
            return Err(Error::shape(format!(
                "{} labels for a {frames}x{height}x{width} volume",
                labels.len()
            )));
        }
        Ok(Self {
            frames,
            height,
            width,
            labels,
        })
    }

    pub fn pixels_per_frame(&self) -> usize {
        self.height * self.width
    }

    pub fn frame(&self, t: usize) -> &[u32] {
        let n = self.pixels_per_frame();
        &self.labels[t * n..(t + 1) * n]
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        (self.frames, self.height, self.width)
    }

    /// Distinct labels present, ascending.
    pub fn distinct(&self) -> Vec<u32> {
        self.labels
            .iter()
            .copied()
            .collect::<BTreeSet<_>>()
            .into_iter()
            .collect()
    }

    /// Nearest-neighbour resampling of every frame to `height x width`.
    pub fn upsample_nearest(&self, height: usize, width: usize) -> Self {
        let mut labels = Vec::with_capacity(self.frames * height * width);
        for t in 0..self.frames {
            let f = self.frame(t);
            for y in 0..height {
                let sy = (y * self.height) / height;
                for x in 0..width {
                    let sx = (x * self.width) / width;
                    labels.push(f[sy * self.width + sx]);
                }
            }
        }
        Self {
            frames: self.frames,
            height,
            width,
            labels,
        }
    }

    /// Majority vote over each output cell's source block; ties go to the
    /// smaller label.
    pub fn downsample_majority(&self, height: usize, width: usize) -> Self {
        let mut labels = Vec::with_capacity(self.frames * height * width);
        for t in 0..self.frames {
            let f = self.frame(t);
            for y in 0..height {
                let (y0, y1) = (y * self.height / height, ((y + 1) * self.height).div_ceil(height));
                for x in 0..width {
                    let (x0, x1) = (x * self.width / width, ((x + 1) * self.width).div_ceil(width));
                    let mut votes: BTreeMap<u32, usize> = BTreeMap::new();
                    for sy in y0..y1.max(y0 + 1) {
                        for sx in x0..x1.max(x0 + 1) {
                            *votes.entry(f[sy * self.width + sx]).or_default() += 1;
                        }
                    }
                    let best = votes
                        .iter()
                        .max_by(|a, b| a.1.cmp(b.1).then(b.0.cmp(a.0)))
                        .map(|(&l, _)| l)
                        .unwrap_or(0);
                    labels.push(best);
                }
            }
        }
        Self {
            frames: self.frames,
            height,
            width,
            labels,
        }
    }

    pub fn mask_of(&self, label: u32) -> Vec<bool> {
        self.labels.iter().map(|&l| l == label).collect()
    }

    pub fn foreground(&self) -> Vec<bool> {
        self.labels.iter().map(|&l| l > 0).collect()
    }
}

/// `|a ∩ b| / |a ∪ b|`, 1 when both masks are empty.
pub fn jaccard(a: &[bool], b: &[bool]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::shape(format!("masks of {} and {} pixels", a.len(), b.len())));
    }
    let (mut inter, mut union) = (0usize, 0usize);
    for (&x, &y) in a.iter().zip(b) {
        inter += (x && y) as usize;
        union += (x || y) as usize;
    }
    Ok(if union == 0 { 1.0 } else { inter as f64 / union as f64 })
}

/// Optimal one-to-one matching maximizing the summed score.
#[derive(Debug, Clone, PartialEq)]
pub struct Matching {
    /// `(row, col)` pairs, sorted by row.
    pub pairs: Vec<(usize, usize)>,
    pub total: f64,
}

/// Maximum-weight assignment on a `rows x cols` score matrix (row-major).
/// Matches `min(rows, cols)` pairs.
pub fn hungarian_match(scores: &[f64], rows: usize, cols: usize) -> Result<Matching> {
    if rows == 0 || cols == 0 {
        return Err(Error::Empty("score matrix"));
    }
    if scores.len() != rows * cols {
        return Err(Error::shape(format!(
            "{} scores for a {rows}x{cols} matrix",
            scores.len()
        )));
    }
    // Solve min-cost with n <= m; transpose when there are more rows.
    let transposed = rows > cols;
    let (n, m) = if transposed { (cols, rows) } else { (rows, cols) };
    let cost = |i: usize, j: usize| -> f64 {
        if transposed {
            -scores[j * cols + i]
        } else {
            -scores[i * cols + j]
        }
    };

    // Shortest augmenting paths with potentials; 1-based with a sentinel column 0.
    let mut u = vec![0.0f64; n + 1];
    let mut v = vec![0.0f64; m + 1];
    let mut owner = vec![0usize; m + 1];
    let mut way = vec![0usize; m + 1];
    for i in 1..=n {
        owner[0] = i;
        let mut j0 = 0;
        let mut minv = vec![f64::INFINITY; m + 1];
        let mut used = vec![false; m + 1];
        loop {
            used[j0] = true;
            let i0 = owner[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=m {
                if !used[j] {
                    let cur = cost(i0 - 1, j - 1) - u[i0] - v[j];
                    if cur < minv[j] {
                        minv[j] = cur;
                        way[j] = j0;
                    }
                    if minv[j] < delta {
                        delta = minv[j];
                        j1 = j;
                    }
                }
            }
            for j in 0..=m {
                if used[j] {
                    u[owner[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if owner[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            owner[j0] = owner[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut pairs: Vec<(usize, usize)> = (1..=m)
        .filter(|&j| owner[j] != 0)
        .map(|j| {
            let (i, j) = (owner[j] - 1, j - 1);
            if transposed {
                (j, i)
            } else {
                (i, j)
            }
        })
        .collect();
    pairs.sort_unstable();
    let total = pairs.iter().map(|&(r, c)| scores[r * cols + c]).sum();
    Ok(Matching { pairs, total })
}

fn comb2(n: u64) -> f64 {
    (n as f64) * (n as f64 - 1.0) / 2.0
}

/// Adjusted Rand index over pixels where `gt > 0`.
pub fn fg_ari(pred: &LabelVolume, gt: &LabelVolume) -> Result<f64> {
    if pred.dims() != gt.dims() {
        return Err(Error::shape(format!(
            "prediction {:?} vs ground truth {:?}",
            pred.dims(),
            gt.dims()
        )));
    }
    ari_on_foreground(&pred.labels, &gt.labels)
}

pub(crate) fn ari_on_foreground(pred: &[u32], gt: &[u32]) -> Result<f64> {
    let mut table: HashMap<(u32, u32), u64> = HashMap::new();
    let mut rows: HashMap<u32, u64> = HashMap::new();
    let mut cols: HashMap<u32, u64> = HashMap::new();
    let mut n = 0u64;
    for (&p, &g) in pred.iter().zip(gt) {
        if g == 0 {
            continue;
        }
        *table.entry((p, g)).or_default() += 1;
        *rows.entry(p).or_default() += 1;
        *cols.entry(g).or_default() += 1;
        n += 1;
    }
    if n == 0 {
        return Err(Error::Empty("ground-truth foreground"));
    }
    let index: f64 = table.values().map(|&c| comb2(c)).sum();
    let sum_a: f64 = rows.values().map(|&c| comb2(c)).sum();
    let sum_b: f64 = cols.values().map(|&c| comb2(c)).sum();
    let expected = sum_a * sum_b / comb2(n).max(f64::MIN_POSITIVE);
    let max = 0.5 * (sum_a + sum_b);
    if max == expected {
        return Ok(1.0);
    }
    Ok((index - expected) / (max - expected))
}

/// One-pixel boundary: mask pixels with a 4-neighbour outside the mask.
/// Pixels beyond the frame count as outside.
pub fn boundary(mask: &[bool], height: usize, width: usize) -> Vec<bool> {
    let at = |y: isize, x: isize| -> bool {
        y >= 0
            && x >= 0
            && (y as usize) < height
            && (x as usize) < width
            && mask[y as usize * width + x as usize]
    };
    let mut out = vec![false; mask.len()];
    for y in 0..height as isize {
        for x in 0..width as isize {
            if at(y, x) && !(at(y - 1, x) && at(y + 1, x) && at(y, x - 1) && at(y, x + 1)) {
                out[y as usize * width + x as usize] = true;
            }
        }
    }
    out
}

fn dilate(mask: &[bool], height: usize, width: usize, radius: usize) -> Vec<bool> {
    let r = radius as isize;
    let offsets: Vec<(isize, isize)> = (-r..=r)
        .flat_map(|dy| (-r..=r).map(move |dx| (dy, dx)))
        .filter(|&(dy, dx)| dy * dy + dx * dx <= r * r)
        .collect();
    let mut out = vec![false; mask.len()];
    for y in 0..height as isize {
        for x in 0..width as isize {
            if !mask[y as usize * width + x as usize] {
                continue;
            }
            for &(dy, dx) in &offsets {
                let (ny, nx) = (y + dy, x + dx);
                if ny >= 0 && nx >= 0 && (ny as usize) < height && (nx as usize) < width {
                    out[ny as usize * width + nx as usize] = true;
                }
            }
        }
    }
    out
}

/// Boundary F-measure with a Euclidean tolerance of `radius` pixels.
pub fn boundary_f(pred: &[bool], gt: &[bool], height: usize, width: usize, radius: usize) -> Result<f64> {
    if pred.len() != gt.len() || pred.len() != height * width {
        return Err(Error::shape("boundary_f mask sizes disagree"));
    }
    let pb = boundary(pred, height, width);
    let gb = boundary(gt, height, width);
    let n_pred = pb.iter().filter(|&&b| b).count();
    let n_gt = gb.iter().filter(|&&b| b).count();
    match (n_pred, n_gt) {
        (0, 0) => return Ok(1.0),
        (0, _) | (_, 0) => return Ok(0.0),
        _ => {}
    }
    let gd = dilate(&gb, height, width, radius);
    let pd = dilate(&pb, height, width, radius);
    let precision = pb.iter().zip(&gd).filter(|(&b, &d)| b && d).count() as f64 / n_pred as f64;
    let recall = gb.iter().zip(&pd).filter(|(&b, &d)| b && d).count() as f64 / n_gt as f64;
    if precision + recall == 0.0 {
        return Ok(0.0);
    }
    Ok(2.0 * precision * recall / (precision + recall))
}

/// 0.8% of the frame diagonal, rounded up.
pub fn default_boundary_radius(height: usize, width: usize) -> usize {
    (0.008 * ((height * height + width * width) as f64).sqrt()).ceil() as usize
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Protocol {
    /// All objects merged into one foreground mask.
    Single,
    /// Per-object matching.
    Multi,
}

impl std::str::FromStr for Protocol {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "single" => Ok(Protocol::Single),
            "multi" => Ok(Protocol::Multi),
            other => Err(Error::InvalidArgument(format!("unknown protocol {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ObjectScore {
    pub gt_label: u32,
    pub pred_label: Option<u32>,
    pub iou: f64,
    pub j: f64,
    pub f: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricsReport {
    pub fg_ari: f64,
    pub miou: f64,
    pub j_mean: f64,
    pub f_mean: f64,
    pub jf_mean: f64,
    pub objects: Vec<ObjectScore>,
}

impl MetricsReport {
    fn new(fg_ari: f64, miou: f64, j_mean: f64, f_mean: f64, objects: Vec<ObjectScore>) -> Self {
        Self {
            fg_ari,
            miou,
            j_mean,
            f_mean,
            jf_mean: 0.5 * (j_mean + f_mean),
            objects,
        }
    }
}

/// Greedy best-first selection of prediction labels whose union maximizes
/// IoU with `foreground`. Returns the chosen labels, ascending.
pub fn greedy_foreground_labels(pred: &[u32], foreground: &[bool]) -> Vec<u32> {
    let mut inside: BTreeMap<u32, u64> = BTreeMap::new();
    let mut total: BTreeMap<u32, u64> = BTreeMap::new();
    let mut fg = 0u64;
    for (&l, &f) in pred.iter().zip(foreground) {
        *total.entry(l).or_default() += 1;
        if f {
            *inside.entry(l).or_default() += 1;
            fg += 1;
        }
    }
    let (mut inter, mut area) = (0u64, 0u64);
    let mut chosen = BTreeSet::new();
    let iou = |i: u64, a: u64| {
        let union = a + fg - i;
        if union == 0 {
            0.0
        } else {
            i as f64 / union as f64
        }
    };
    loop {
        let current = iou(inter, area);
        let best = total
            .iter()
            .filter(|(l, _)| !chosen.contains(*l))
            .map(|(&l, &t)| {
                let i = inside.get(&l).copied().unwrap_or(0);
                (l, iou(inter + i, area + t), i, t)
            })
            .fold(None::<(u32, f64, u64, u64)>, |best, cand| match best {
                Some(b) if b.1 >= cand.1 => Some(b),
                _ => Some(cand),
            });
        match best {
            Some((l, score, i, t)) if score > current => {
                chosen.insert(l);
                inter += i;
                area += t;
            }
            _ => break,
        }
    }
    chosen.into_iter().collect()
}

/// Scores `pred` against `gt`, upsampling `pred` by nearest neighbour when
/// the spatial resolutions differ.
pub fn evaluate(pred: &LabelVolume, gt: &LabelVolume, protocol: Protocol) -> Result<MetricsReport> {
    evaluate_with_radius(pred, gt, protocol, default_boundary_radius(gt.height, gt.width))
}

pub fn evaluate_with_radius(
    pred: &LabelVolume,
    gt: &LabelVolume,
    protocol: Protocol,
    radius: usize,
) -> Result<MetricsReport> {
    let resized;
    let pred = if (pred.height, pred.width) != (gt.height, gt.width) {
        resized = pred.upsample_nearest(gt.height, gt.width);
        &resized
    } else {
        pred
    };
    if pred.dims() != gt.dims() {
        return Err(Error::shape(format!(
            "prediction {:?} vs ground truth {:?}",
            pred.dims(),
            gt.dims()
        )));
    }
    let fg_ari = fg_ari(pred, gt)?;
    let (h, w) = (gt.height, gt.width);
    let per_frame = |a: &[bool], b: &[bool]| -> Result<(f64, f64)> {
        let n = h * w;
        let (mut j, mut f) = (0.0, 0.0);
        for t in 0..gt.frames {
            let (pa, pb) = (&a[t * n..(t + 1) * n], &b[t * n..(t + 1) * n]);
            j += jaccard(pa, pb)?;
            f += boundary_f(pa, pb, h, w, radius)?;
        }
        Ok((j / gt.frames as f64, f / gt.frames as f64))
    };

    match protocol {
        Protocol::Single => {
            let fg = gt.foreground();
            let chosen = greedy_foreground_labels(&pred.labels, &fg);
            let merged: Vec<bool> = pred.labels.iter().map(|l| chosen.binary_search(l).is_ok()).collect();
            let iou = jaccard(&merged, &fg)?;
            let (j, f) = per_frame(&merged, &fg)?;
            let objects = vec![ObjectScore {
                gt_label: 1,
                pred_label: None,
                iou,
                j,
                f,
            }];
            Ok(MetricsReport::new(fg_ari, iou, j, f, objects))
        }
        Protocol::Multi => {
            let gt_ids: Vec<u32> = gt.distinct().into_iter().filter(|&l| l > 0).collect();
            let pred_ids: Vec<u32> = pred.distinct().into_iter().filter(|&l| l > 0).collect();
            let gt_masks: Vec<Vec<bool>> = gt_ids.iter().map(|&g| gt.mask_of(g)).collect();
            let pred_masks: Vec<Vec<bool>> = pred_ids.iter().map(|&p| pred.mask_of(p)).collect();
            let mut ious = vec![0.0; pred_ids.len() * gt_ids.len()];
            for (pi, pm) in pred_masks.iter().enumerate() {
                for (gi, gm) in gt_masks.iter().enumerate() {
                    ious[pi * gt_ids.len() + gi] = jaccard(pm, gm)?;
                }
            }
            let mut assigned: Vec<Option<usize>> = vec![None; gt_ids.len()];
            if !pred_ids.is_empty() {
                for (pi, gi) in hungarian_match(&ious, pred_ids.len(), gt_ids.len())?.pairs {
                    assigned[gi] = Some(pi);
                }
            }
            let mut objects = Vec::with_capacity(gt_ids.len());
            for (gi, &g) in gt_ids.iter().enumerate() {
                let score = match assigned[gi] {
                    Some(pi) => {
                        let (j, f) = per_frame(&pred_masks[pi], &gt_masks[gi])?;
                        ObjectScore {
                            gt_label: g,
                            pred_label: Some(pred_ids[pi]),
                            iou: ious[pi * gt_ids.len() + gi],
                            j,
                            f,
                        }
                    }
                    None => ObjectScore {
                        gt_label: g,
                        pred_label: None,
                        iou: 0.0,
                        j: 0.0,
                        f: 0.0,
                    },
                };
                objects.push(score);
            }
            let mean = |f: fn(&ObjectScore) -> f64| objects.iter().map(f).sum::<f64>() / objects.len() as f64;
            let (miou, j, f) = (mean(|o| o.iou), mean(|o| o.j), mean(|o| o.f));
            Ok(MetricsReport::new(fg_ari, miou, j, f, objects))
        }
    }
}

/// Tab-separated report: a header, one row per sequence, then `mean`.
pub fn format_report(rows: &[(String, MetricsReport)]) -> String {
    let mut out = String::from("sequence_id\tfg_ari\tmiou\tj\tf\tjf\n");
    let line = |out: &mut String, id: &str, v: [f64; 5]| {
        let _ = writeln!(
            out,
            "{id}\t{:.6}\t{:.6}\t{:.6}\t{:.6}\t{:.6}",
            v[0], v[1], v[2], v[3], v[4]
        );
    };
    let mut acc = [0.0; 5];
    for (id, r) in rows {
        let v = [r.fg_ari, r.miou, r.j_mean, r.f_mean, r.jf_mean];
        acc.iter_mut().zip(v).for_each(|(a, x)| *a += x);
        line(&mut out, id, v);
    }
    if !rows.is_empty() {
        line(&mut out, "mean", acc.map(|a| a / rows.len() as f64));
    }
    out
}

//! Stage two: dense voxel classification inside the localized box followed by
//! Gaussian smoothing, thresholding and largest-component selection.

use std::collections::VecDeque;
use std::str::FromStr;

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::localizer::{fuse_to_box, BoundingBox3D, FusionParams, Localizer, SliceProbabilitySequence};
use crate::neuralnet::{Dataset, Mode, Model, Scalar};
use crate::volgrid::{Grid, LabelVolume, NormalizationWindow, Volume3D, PATCH_SIZE};

/// Class-1 posteriors over the voxels of a box, x fastest.
#[derive(Clone, Debug, PartialEq)]
pub struct ProbabilityVolume {
    pub bbox: BoundingBox3D,
    pub spacing: [f64; 3],
    pub probs: Vec<f64>,
}

impl ProbabilityVolume {
    pub fn new(bbox: BoundingBox3D, spacing: [f64; 3], probs: Vec<f64>) -> Result<Self> {
        if probs.len() != bbox.voxel_count() {
            return Err(Error::Shape(format!(
                "{} probabilities for a box of {} voxels",
                probs.len(),
                bbox.voxel_count()
            )));
        }
        Ok(ProbabilityVolume { bbox, spacing, probs })
    }

    pub fn dims(&self) -> [usize; 3] {
        self.bbox.extents()
    }

    /// Value at box-local index `p`.
    pub fn get(&self, p: [usize; 3]) -> f64 {
        let d = self.dims();
        self.probs[p[0] + d[0] * (p[1] + d[1] * p[2])]
    }

    /// The box contents as a volume whose origin sits on the box corner.
    pub fn to_volume(&self, parent: &Grid) -> Result<Volume3D> {
        let origin = [0, 1, 2].map(|a| parent.origin[a] + self.bbox.lo[a] as f64 * parent.spacing[a]);
        Volume3D::new(Grid::new(self.dims(), self.spacing, origin)?, self.probs.clone())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Connectivity {
    /// Face neighbours only.
    Six,
    /// Face, edge and corner neighbours.
    TwentySix,
}

impl Connectivity {
    pub fn offsets(self) -> Vec<[isize; 3]> {
        let mut out = Vec::new();
        for dz in -1..=1isize {
            for dy in -1..=1isize {
                for dx in -1..=1isize {
                    let manhattan = dx.abs() + dy.abs() + dz.abs();
                    let keep = match self {
                        Connectivity::Six => manhattan == 1,
                        Connectivity::TwentySix => manhattan > 0,
                    };
                    if keep {
                        out.push([dx, dy, dz]);
                    }
                }
            }
        }
        out
    }
}

impl FromStr for Connectivity {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "6" => Ok(Connectivity::Six),
            "26" => Ok(Connectivity::TwentySix),
            other => Err(Error::config(format!("connectivity: expected 6 or 26, got '{other}'"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PostprocessParams {
    /// Standard deviation of the smoothing kernel in mm.
    pub sigma_mm: f64,
    /// Voxels with smoothed probability strictly above this are foreground.
    pub threshold: f64,
    pub connectivity: Connectivity,
}

impl Default for PostprocessParams {
    fn default() -> Self {
        PostprocessParams {
            sigma_mm: 1.5,
            threshold: 0.4,
            connectivity: Connectivity::TwentySix,
        }
    }
}

impl PostprocessParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.sigma_mm > 0.0) || !self.sigma_mm.is_finite() {
            return Err(Error::config("sigma_mm: must be positive"));
        }
        if !(self.threshold > 0.0 && self.threshold < 1.0) {
            return Err(Error::config("threshold: must lie in (0, 1)"));
        }
        Ok(())
    }
}

/// How densely `classify_voxels` evaluates the network.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassifyOptions {
    /// Patches per forward call. Does not affect results.
    pub batch_size: usize,
    /// 1 evaluates every voxel. Larger values evaluate a sub-lattice and fill
    /// the rest by trilinear interpolation.
    pub stride: usize,
}

impl Default for ClassifyOptions {
    fn default() -> Self {
        ClassifyOptions {
            batch_size: 256,
            stride: 1,
        }
    }
}

/// Class-1 posterior for every voxel of `bbox` in a normalized volume.
pub fn classify_voxels<T: Scalar>(
    vol: &Volume3D,
    bbox: &BoundingBox3D,
    model: &Model<T>,
    opts: &ClassifyOptions,
) -> Result<ProbabilityVolume> {
    if !bbox.fits(vol.dims()) {
        return Err(Error::Bounds(format!(
            "box {:?}..={:?} outside volume dims {:?}",
            bbox.lo,
            bbox.hi,
            vol.dims()
        )));
    }
    let expected = (3, PATCH_SIZE, PATCH_SIZE);
    if model.spec().input != expected {
        return Err(Error::Incompatible(format!(
            "voxel classifier takes {:?}, patches are {expected:?}",
            model.spec().input
        )));
    }
    if opts.batch_size == 0 || opts.stride == 0 {
        return Err(Error::config("batch_size and stride must be >= 1"));
    }
    if opts.stride == 1 {
        let centers: Vec<[usize; 3]> = bbox.voxels().collect();
        let probs = classify_centers(vol, &centers, model, opts.batch_size)?;
        return ProbabilityVolume::new(*bbox, vol.spacing(), probs);
    }
    classify_strided(vol, bbox, model, opts)
}

/// Class-1 posteriors for arbitrary patch centers.
pub fn classify_centers<T: Scalar>(
    vol: &Volume3D,
    centers: &[[usize; 3]],
    model: &Model<T>,
    batch_size: usize,
) -> Result<Vec<f64>> {
    let sample = model.input_len();
    let mut buf = vec![T::zero(); batch_size.max(1) * sample];
    let mut probs = Vec::with_capacity(centers.len());
    for chunk in centers.chunks(batch_size.max(1)) {
        for (k, &c) in chunk.iter().enumerate() {
            vol.fill_patch_triplet(c, PATCH_SIZE, &mut buf[k * sample..(k + 1) * sample])?;
        }
        let out = model.forward(&buf[..chunk.len() * sample], Mode::Infer, None)?;
        probs.extend(out.iter().map(|p| p[1]));
    }
    Ok(probs)
}

fn classify_strided<T: Scalar>(
    vol: &Volume3D,
    bbox: &BoundingBox3D,
    model: &Model<T>,
    opts: &ClassifyOptions,
) -> Result<ProbabilityVolume> {
    let ext = bbox.extents();
    // Sample positions per axis: every `stride`-th voxel plus the far edge.
    let lattice: Vec<Vec<usize>> = (0..3)
        .map(|a| {
            let mut v: Vec<usize> = (0..ext[a]).step_by(opts.stride).collect();
            if *v.last().expect("extent >= 1") != ext[a] - 1 {
                v.push(ext[a] - 1);
            }
            v
        })
        .collect();
    let mut centers = Vec::new();
    for &z in &lattice[2] {
        for &y in &lattice[1] {
            for &x in &lattice[0] {
                centers.push([bbox.lo[0] + x, bbox.lo[1] + y, bbox.lo[2] + z]);
            }
        }
    }
    let coarse = classify_centers(vol, &centers, model, opts.batch_size)?;
    let (lx, ly) = (lattice[0].len(), lattice[1].len());
    let at = |i: usize, j: usize, k: usize| coarse[i + lx * (j + ly * k)];
    // Bracketing lattice cells and weights for each box-local coordinate.
    let brackets: Vec<Vec<(usize, usize, f64)>> = (0..3)
        .map(|a| {
            let l = &lattice[a];
            (0..ext[a])
                .map(|p| {
                    let hi = l.partition_point(|&s| s < p).min(l.len() - 1);
                    if l[hi] == p || hi == 0 {
                        (hi, hi, 0.0)
                    } else {
                        let lo = hi - 1;
                        (lo, hi, (p - l[lo]) as f64 / (l[hi] - l[lo]) as f64)
                    }
                })
                .collect()
        })
        .collect();
    let mut probs = Vec::with_capacity(bbox.voxel_count());
    for &(z0, z1, tz) in &brackets[2] {
        for &(y0, y1, ty) in &brackets[1] {
            for &(x0, x1, tx) in &brackets[0] {
                let lerp = |a: f64, b: f64, t: f64| a + (b - a) * t;
                let c00 = lerp(at(x0, y0, z0), at(x1, y0, z0), tx);
                let c10 = lerp(at(x0, y1, z0), at(x1, y1, z0), tx);
                let c01 = lerp(at(x0, y0, z1), at(x1, y0, z1), tx);
                let c11 = lerp(at(x0, y1, z1), at(x1, y1, z1), tx);
                probs.push(lerp(lerp(c00, c10, ty), lerp(c01, c11, ty), tz));
            }
        }
    }
    ProbabilityVolume::new(*bbox, vol.spacing(), probs)
}

/// Normalized Gaussian taps for offsets `-r..=r`, `r = ceil(3σ)`.
pub fn gaussian_kernel(sigma_vox: f64) -> Vec<f64> {
    let r = (3.0 * sigma_vox).ceil() as isize;
    let taps: Vec<f64> = (-r..=r)
        .map(|i| (-((i * i) as f64) / (2.0 * sigma_vox * sigma_vox)).exp())
        .collect();
    let total: f64 = taps.iter().sum();
    taps.into_iter().map(|t| t / total).collect()
}

/// Per-axis sigma in voxels for a physical sigma.
pub fn sigma_voxels(sigma_mm: f64, spacing: [f64; 3]) -> [f64; 3] {
    spacing.map(|s| sigma_mm / s)
}

/// Separable Gaussian smoothing inside the box. Taps falling outside the box
/// are dropped and the remaining weights renormalized.
pub fn gaussian_smooth(pv: &ProbabilityVolume, sigma_mm: f64) -> Result<ProbabilityVolume> {
    if !(sigma_mm > 0.0) || !sigma_mm.is_finite() {
        return Err(Error::config("sigma_mm: must be positive"));
    }
    let dims = pv.dims();
    let sig = sigma_voxels(sigma_mm, pv.spacing);
    let (lo, hi) = pv
        .probs
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
    let mut data = pv.probs.clone();
    let strides = [1, dims[0], dims[0] * dims[1]];
    let mut line = Vec::new();
    for axis in 0..3 {
        let kernel = gaussian_kernel(sig[axis]);
        let r = (kernel.len() / 2) as isize;
        let n = dims[axis];
        let stride = strides[axis];
        // Visit every line along `axis`.
        let others: Vec<usize> = (0..3).filter(|&a| a != axis).collect();
        for j in 0..dims[others[1]] {
            for i in 0..dims[others[0]] {
                let base = i * strides[others[0]] + j * strides[others[1]];
                line.clear();
                line.extend((0..n).map(|k| data[base + k * stride]));
                for k in 0..n {
                    let mut acc = 0.0;
                    let mut wsum = 0.0;
                    let t0 = (k as isize - r).max(0);
                    let t1 = (k as isize + r).min(n as isize - 1);
                    for t in t0..=t1 {
                        let w = kernel[(t - k as isize + r) as usize];
                        acc += w * line[t as usize];
                        wsum += w;
                    }
                    data[base + k * stride] = (acc / wsum).clamp(lo, hi);
                }
            }
        }
    }
    ProbabilityVolume::new(pv.bbox, pv.spacing, data)
}

/// Component label per voxel (0 = background, components numbered from 1 in
/// order of their first voxel) and the size of each component.
pub fn label_components(mask: &[bool], dims: [usize; 3], connectivity: Connectivity) -> (Vec<u32>, Vec<usize>) {
    let offsets = connectivity.offsets();
    let mut labels = vec![0u32; mask.len()];
    let mut sizes = Vec::new();
    let mut queue = VecDeque::new();
    let idx = |x: usize, y: usize, z: usize| x + dims[0] * (y + dims[1] * z);
    for start in 0..mask.len() {
        if !mask[start] || labels[start] != 0 {
            continue;
        }
        let id = sizes.len() as u32 + 1;
        labels[start] = id;
        let mut size = 0;
        queue.push_back(start);
        while let Some(v) = queue.pop_front() {
            size += 1;
            let p = [v % dims[0], (v / dims[0]) % dims[1], v / (dims[0] * dims[1])];
            for o in &offsets {
                let q = [0, 1, 2].map(|a| p[a] as isize + o[a]);
                if (0..3).any(|a| q[a] < 0 || q[a] >= dims[a] as isize) {
                    continue;
                }
                let u = idx(q[0] as usize, q[1] as usize, q[2] as usize);
                if mask[u] && labels[u] == 0 {
                    labels[u] = id;
                    queue.push_back(u);
                }
            }
        }
        sizes.push(size);
    }
    (labels, sizes)
}

/// Binary segmentation on the full grid.
#[derive(Clone, Debug, PartialEq)]
pub struct Segmentation {
    pub mask: LabelVolume,
    /// Set when nothing cleared the threshold.
    pub empty: bool,
}

/// Thresholds at `prob > threshold` and keeps the largest connected component.
/// Ties go to the component whose first voxel (x fastest) comes first.
pub fn threshold_and_largest_component(
    pv: &ProbabilityVolume,
    threshold: f64,
    connectivity: Connectivity,
    grid: &Grid,
) -> Result<Segmentation> {
    if !(threshold > 0.0 && threshold < 1.0) {
        return Err(Error::config("threshold: must lie in (0, 1)"));
    }
    if !pv.bbox.fits(grid.dims) {
        return Err(Error::Bounds("probability box does not fit the output grid".into()));
    }
    let fg: Vec<bool> = pv.probs.iter().map(|&p| p > threshold).collect();
    let (labels, sizes) = label_components(&fg, pv.dims(), connectivity);
    let mut mask = LabelVolume::zeros(*grid);
    let Some(best) = sizes
        .iter()
        .enumerate()
        .fold(None, |acc: Option<(usize, usize)>, (i, &s)| match acc {
            Some((_, bs)) if bs >= s => acc,
            _ => Some((i, s)),
        })
        .map(|(i, _)| i as u32 + 1)
    else {
        return Ok(Segmentation { mask, empty: true });
    };
    for (local, p) in pv.bbox.voxels().enumerate() {
        if labels[local] == best {
            mask.set(p, true);
        }
    }
    Ok(Segmentation { mask, empty: false })
}

/// Everything needed to run both stages.
#[derive(Clone, Debug)]
pub struct Pipeline {
    pub localizer: Localizer,
    pub segmenter: Model<f32>,
    pub window: NormalizationWindow,
    pub fusion: FusionParams,
    pub post: PostprocessParams,
    pub classify: ClassifyOptions,
}

/// Outputs and intermediates of [`Pipeline::segment`].
#[derive(Clone, Debug)]
pub struct PipelineResult {
    pub mask: LabelVolume,
    pub empty: bool,
    pub bbox: BoundingBox3D,
    /// Raw voxel posteriors inside the box.
    pub probabilities: ProbabilityVolume,
    /// Posteriors after smoothing.
    pub smoothed: ProbabilityVolume,
    /// Slice profiles in (sagittal, coronal, axial) order.
    pub profiles: [SliceProbabilitySequence; 3],
}

impl Pipeline {
    /// Localize, classify voxels, smooth, threshold and keep the largest component.
    pub fn segment(&self, image: &Volume3D) -> Result<PipelineResult> {
        self.post.validate()?;
        let vol = image.normalize(&self.window);
        let profiles = self.localizer.profiles(&vol)?;
        let [sag, cor, axi] = &profiles;
        let bbox = fuse_to_box(sag, cor, axi, &self.fusion)?;
        let probabilities = classify_voxels(&vol, &bbox, &self.segmenter, &self.classify)?;
        let smoothed = gaussian_smooth(&probabilities, self.post.sigma_mm)?;
        let seg = threshold_and_largest_component(&smoothed, self.post.threshold, self.post.connectivity, vol.grid())?;
        Ok(PipelineResult {
            mask: seg.mask,
            empty: seg.empty,
            bbox,
            probabilities,
            smoothed,
            profiles,
        })
    }
}

/// Voxels drawn from one scan for segmenter training: `n` positives from the
/// label and `n` negatives from the rest of `true_box`, without replacement
/// when the pool is large enough.
pub fn sample_patch_centers(
    label: &LabelVolume,
    true_box: &BoundingBox3D,
    n: usize,
    rng: &mut impl Rng,
) -> Result<Vec<([usize; 3], usize)>> {
    let positives: Vec<[usize; 3]> = label.foreground().collect();
    let negatives: Vec<[usize; 3]> = true_box.voxels().filter(|&p| !label.at(p)).collect();
    if positives.is_empty() || negatives.is_empty() {
        return Err(Error::config(format!(
            "single-class sampling: {} positive and {} negative candidate voxels",
            positives.len(),
            negatives.len()
        )));
    }
    let mut out = Vec::with_capacity(2 * n);
    for (pool, class) in [(&positives, 1), (&negatives, 0)] {
        if n <= pool.len() {
            out.extend(index::sample(rng, pool.len(), n).into_iter().map(|i| (pool[i], class)));
        } else {
            out.extend((0..n).map(|_| (pool[rng.random_range(0..pool.len())], class)));
        }
    }
    Ok(out)
}

/// Tri-planar patches gathered lazily from normalized volumes.
#[derive(Clone, Debug)]
pub struct PatchDataset {
    volumes: Vec<Volume3D>,
    samples: Vec<(usize, [usize; 3], usize)>,
}

impl PatchDataset {
    /// `volumes` must already be normalized. `patches_per_class` is the total
    /// over all scans, split as evenly as possible.
    pub fn balanced(
        volumes: Vec<Volume3D>,
        labels: &[LabelVolume],
        boxes: &[BoundingBox3D],
        patches_per_class: usize,
        seed: u64,
    ) -> Result<Self> {
        let n = volumes.len();
        if n == 0 || labels.len() != n || boxes.len() != n {
            return Err(Error::CountMismatch(format!(
                "{n} volumes, {} labels, {} boxes",
                labels.len(),
                boxes.len()
            )));
        }
        if patches_per_class == 0 {
            return Err(Error::config("patches_per_class: must be >= 1"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(SAMPLING_STREAM);
        let mut samples = Vec::with_capacity(2 * patches_per_class);
        for i in 0..n {
            if !volumes[i].grid().same_lattice(labels[i].grid()) {
                return Err(Error::Grid(format!("scan {i}: image and label grids differ")));
            }
            let count = patches_per_class / n + usize::from(i < patches_per_class % n);
            if count == 0 {
                continue;
            }
            for (c, class) in sample_patch_centers(&labels[i], &boxes[i], count, &mut rng)? {
                samples.push((i, c, class));
            }
        }
        Ok(PatchDataset { volumes, samples })
    }

    pub fn class_counts(&self) -> [usize; 2] {
        let pos = self.samples.iter().filter(|s| s.2 == 1).count();
        [self.samples.len() - pos, pos]
    }

    pub fn center(&self, i: usize) -> (usize, [usize; 3]) {
        (self.samples[i].0, self.samples[i].1)
    }
}

/// RNG stream for patch sampling, distinct from the training streams.
const SAMPLING_STREAM: u64 = 3;

impl Dataset for PatchDataset {
    fn len(&self) -> usize {
        self.samples.len()
    }

    fn label(&self, i: usize) -> usize {
        self.samples[i].2
    }

    fn fill(&self, i: usize, out: &mut [f64]) -> Result<()> {
        let (v, c, _) = self.samples[i];
        self.volumes[v].fill_patch_triplet(c, PATCH_SIZE, out)
    }
}

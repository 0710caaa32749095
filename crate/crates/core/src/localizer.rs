//! Stage one: per-slice presence probabilities in the three orthogonal planes,
//! fused into a bounding box.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::neuralnet::{InMemoryDataset, Mode, Model, NetworkSpec, NetworkWeights};
use crate::volgrid::{Axis, LabelVolume, Volume3D};

/// Edge length slices are downsampled to before classification.
pub const LOCALIZER_INPUT: usize = 64;

/// Slices classified per forward call.
const SLICE_BATCH: usize = 32;

/// Inclusive voxel index box.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct BoundingBox3D {
    pub lo: [usize; 3],
    pub hi: [usize; 3],
}

impl BoundingBox3D {
    /// Validates `lo <= hi < dims` on every axis.
    pub fn new(lo: [usize; 3], hi: [usize; 3], dims: [usize; 3]) -> Result<Self> {
        for a in 0..3 {
            if lo[a] > hi[a] || hi[a] >= dims[a] {
                return Err(Error::Bounds(format!(
                    "box {lo:?}..={hi:?} is empty or leaves dims {dims:?}"
                )));
            }
        }
        Ok(BoundingBox3D { lo, hi })
    }

    pub fn full(dims: [usize; 3]) -> Self {
        BoundingBox3D {
            lo: [0; 3],
            hi: [dims[0] - 1, dims[1] - 1, dims[2] - 1],
        }
    }

    /// Tight box around the foreground of `label`, if any.
    pub fn enclosing(label: &LabelVolume) -> Option<Self> {
        let mut lo = [usize::MAX; 3];
        let mut hi = [0; 3];
        let mut any = false;
        for p in label.foreground() {
            any = true;
            for a in 0..3 {
                lo[a] = lo[a].min(p[a]);
                hi[a] = hi[a].max(p[a]);
            }
        }
        any.then_some(BoundingBox3D { lo, hi })
    }

    pub fn extents(&self) -> [usize; 3] {
        [0, 1, 2].map(|a| self.hi[a] - self.lo[a] + 1)
    }

    pub fn voxel_count(&self) -> usize {
        self.extents().iter().product()
    }

    pub fn contains(&self, p: [usize; 3]) -> bool {
        (0..3).all(|a| self.lo[a] <= p[a] && p[a] <= self.hi[a])
    }

    pub fn fits(&self, dims: [usize; 3]) -> bool {
        (0..3).all(|a| self.lo[a] <= self.hi[a] && self.hi[a] < dims[a])
    }

    /// Every voxel index inside the box, x fastest.
    pub fn voxels(&self) -> impl Iterator<Item = [usize; 3]> + '_ {
        (self.lo[2]..=self.hi[2]).flat_map(move |z| {
            (self.lo[1]..=self.hi[1]).flat_map(move |y| (self.lo[0]..=self.hi[0]).map(move |x| [x, y, z]))
        })
    }

    pub fn as_array(&self) -> [usize; 6] {
        [self.lo[0], self.lo[1], self.lo[2], self.hi[0], self.hi[1], self.hi[2]]
    }
}

/// Presence probability of the target in every slice along one plane.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SliceProbabilitySequence {
    pub axis: Axis,
    pub probs: Vec<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FusionParams {
    pub prob_threshold: f64,
    /// Width of the centered moving average, odd.
    pub smooth_window: usize,
    /// Fraction of the axis length added on both ends of the detected run.
    pub margin_fraction: f64,
}

impl Default for FusionParams {
    fn default() -> Self {
        FusionParams {
            prob_threshold: 0.5,
            smooth_window: 5,
            margin_fraction: 0.05,
        }
    }
}

impl FusionParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.prob_threshold > 0.0 && self.prob_threshold < 1.0) {
            return Err(Error::config("prob_threshold: must lie in (0, 1)"));
        }
        if self.smooth_window == 0 || self.smooth_window % 2 == 0 {
            return Err(Error::config("smooth_window: must be a positive odd integer"));
        }
        if !(self.margin_fraction >= 0.0) || !self.margin_fraction.is_finite() {
            return Err(Error::config("margin_fraction: must be >= 0"));
        }
        Ok(())
    }
}

/// Slice `index` of a normalized volume, area-averaged to the localizer input size.
pub fn slice_input(vol: &Volume3D, axis: Axis, index: usize) -> Result<Vec<f64>> {
    Ok(vol
        .extract_slice(axis, index)?
        .resample_area(LOCALIZER_INPUT, LOCALIZER_INPUT)
        .data)
}

/// Posterior of class 1 (target present) for every slice of a normalized volume.
pub fn classify_slices(vol: &Volume3D, axis: Axis, model: &Model<f64>) -> Result<SliceProbabilitySequence> {
    let expected = (1, LOCALIZER_INPUT, LOCALIZER_INPUT);
    if model.spec().input != expected {
        return Err(Error::Incompatible(format!(
            "localizer network takes {:?}, slices are {expected:?}",
            model.spec().input
        )));
    }
    let n = vol.dims()[axis.fixed_dim()];
    let mut probs = Vec::with_capacity(n);
    let mut batch = Vec::with_capacity(SLICE_BATCH * LOCALIZER_INPUT * LOCALIZER_INPUT);
    for start in (0..n).step_by(SLICE_BATCH) {
        batch.clear();
        for i in start..(start + SLICE_BATCH).min(n) {
            batch.extend(slice_input(vol, axis, i)?);
        }
        probs.extend(model.forward(&batch, Mode::Infer, None)?.iter().map(|p| p[1]));
    }
    Ok(SliceProbabilitySequence { axis, probs })
}

/// Centered moving average; windows are truncated at the sequence ends.
pub fn moving_average(probs: &[f64], window: usize) -> Vec<f64> {
    let half = window / 2;
    (0..probs.len())
        .map(|i| {
            let lo = i.saturating_sub(half);
            let hi = (i + half).min(probs.len() - 1);
            probs[lo..=hi].iter().sum::<f64>() / (hi - lo + 1) as f64
        })
        .collect()
}

/// Inclusive index range selected along one axis, or `None` if no slice clears the threshold.
pub fn fuse_axis(probs: &[f64], params: &FusionParams) -> Option<(usize, usize)> {
    if probs.is_empty() {
        return None;
    }
    let smooth = moving_average(probs, params.smooth_window);
    // (start, end, mean) of the best run so far.
    let mut best: Option<(usize, usize, f64)> = None;
    let mut i = 0;
    while i < smooth.len() {
        if smooth[i] <= params.prob_threshold {
            i += 1;
            continue;
        }
        let start = i;
        while i < smooth.len() && smooth[i] > params.prob_threshold {
            i += 1;
        }
        let end = i - 1;
        let mean = smooth[start..=end].iter().sum::<f64>() / (end - start + 1) as f64;
        let better = match best {
            None => true,
            Some((s, e, m)) => {
                let (len, best_len) = (end - start, e - s);
                len > best_len || (len == best_len && mean > m)
            }
        };
        if better {
            best = Some((start, end, mean));
        }
    }
    let (start, end, _) = best?;
    let n = probs.len();
    let margin = (params.margin_fraction * n as f64).round() as usize;
    Some((start.saturating_sub(margin), (end + margin).min(n - 1)))
}

/// Combines sagittal (x), coronal (y) and axial (z) profiles into a box.
pub fn fuse_to_box(
    sagittal: &SliceProbabilitySequence,
    coronal: &SliceProbabilitySequence,
    axial: &SliceProbabilitySequence,
    params: &FusionParams,
) -> Result<BoundingBox3D> {
    params.validate()?;
    let seqs = [sagittal, coronal, axial];
    let wanted = [Axis::Sagittal, Axis::Coronal, Axis::Axial];
    let mut lo = [0; 3];
    let mut hi = [0; 3];
    let mut dims = [0; 3];
    for (d, (seq, want)) in seqs.iter().zip(wanted).enumerate() {
        if seq.axis != want {
            return Err(Error::config(format!(
                "fusion expects the {want} profile in position {d}, got {}",
                seq.axis
            )));
        }
        let (a, b) = fuse_axis(&seq.probs, params).ok_or(Error::LocalizationFailure { axis: want })?;
        lo[d] = a;
        hi[d] = b;
        dims[d] = seq.probs.len();
    }
    BoundingBox3D::new(lo, hi, dims)
}

/// The three per-plane slice classifiers.
#[derive(Clone, Debug)]
pub struct Localizer {
    pub axial: Model<f64>,
    pub coronal: Model<f64>,
    pub sagittal: Model<f64>,
}

impl Localizer {
    pub fn new(
        spec: &NetworkSpec,
        axial: &NetworkWeights,
        coronal: &NetworkWeights,
        sagittal: &NetworkWeights,
    ) -> Result<Self> {
        Ok(Localizer {
            axial: Model::new(spec, axial)?,
            coronal: Model::new(spec, coronal)?,
            sagittal: Model::new(spec, sagittal)?,
        })
    }

    pub fn model(&self, axis: Axis) -> &Model<f64> {
        match axis {
            Axis::Axial => &self.axial,
            Axis::Coronal => &self.coronal,
            Axis::Sagittal => &self.sagittal,
        }
    }

    /// Slice profiles in (sagittal, coronal, axial) order.
    pub fn profiles(&self, vol: &Volume3D) -> Result<[SliceProbabilitySequence; 3]> {
        Ok([
            classify_slices(vol, Axis::Sagittal, &self.sagittal)?,
            classify_slices(vol, Axis::Coronal, &self.coronal)?,
            classify_slices(vol, Axis::Axial, &self.axial)?,
        ])
    }
}

/// Every slice of every volume along `axis`, labeled by target presence.
pub fn slice_training_set(samples: &[(&Volume3D, &[u8])], axis: Axis) -> Result<InMemoryDataset> {
    let mut inputs = Vec::new();
    let mut labels = Vec::new();
    for (vol, presence) in samples {
        let n = vol.dims()[axis.fixed_dim()];
        if presence.len() != n {
            return Err(Error::Shape(format!(
                "{} presence labels for {n} {axis} slices",
                presence.len()
            )));
        }
        for (i, &present) in presence.iter().enumerate() {
            inputs.extend(slice_input(vol, axis, i)?);
            labels.push(present as usize);
        }
    }
    InMemoryDataset::new(LOCALIZER_INPUT * LOCALIZER_INPUT, inputs, labels)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn seq(axis: Axis, probs: &[f64]) -> SliceProbabilitySequence {
        SliceProbabilitySequence {
            axis,
            probs: probs.to_vec(),
        }
    }

    fn exact() -> FusionParams {
        FusionParams {
            prob_threshold: 0.5,
            smooth_window: 1,
            margin_fraction: 0.0,
        }
    }

    #[test]
    fn step_profile_gives_its_support() {
        let p = [0.0, 0.0, 1.0, 1.0, 1.0, 0.0];
        let b = fuse_to_box(
            &seq(Axis::Sagittal, &p),
            &seq(Axis::Coronal, &p),
            &seq(Axis::Axial, &p),
            &exact(),
        )
        .unwrap();
        assert_eq!(b.lo, [2; 3]);
        assert_eq!(b.hi, [4; 3]);
    }

    #[test]
    fn flat_low_profile_fails_on_that_axis() {
        let ok = [0.0, 1.0, 1.0, 0.0];
        let low = [0.1; 4];
        let err = fuse_to_box(
            &seq(Axis::Sagittal, &ok),
            &seq(Axis::Coronal, &low),
            &seq(Axis::Axial, &ok),
            &exact(),
        )
        .unwrap_err();
        assert!(matches!(err, Error::LocalizationFailure { axis: Axis::Coronal }));
    }

    #[test]
    fn margin_clamps_at_edges() {
        let p = [1.0, 1.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 1.0];
        let params = FusionParams {
            margin_fraction: 0.2,
            ..exact()
        };
        assert_eq!(fuse_axis(&p, &params), Some((0, 3)));
        let q = [0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 1.0, 1.0];
        assert_eq!(fuse_axis(&q, &params), Some((6, 9)));
    }

    #[test]
    fn ties_prefer_higher_mean_then_earlier() {
        let p = [0.6, 0.6, 0.0, 0.9, 0.9, 0.0, 0.9, 0.9];
        assert_eq!(fuse_axis(&p, &exact()), Some((3, 4)));
    }

    #[test]
    fn moving_average_truncates_at_ends() {
        let m = moving_average(&[1.0, 0.0, 0.0, 0.0, 1.0], 3);
        assert_eq!(m, vec![0.5, 1.0 / 3.0, 0.0, 1.0 / 3.0, 0.5]);
    }

    #[test]
    fn wrong_profile_order_is_rejected() {
        let p = [0.0, 1.0];
        let r = fuse_to_box(&seq(Axis::Axial, &p), &seq(Axis::Coronal, &p), &seq(Axis::Sagittal, &p), &exact());
        assert!(matches!(r, Err(Error::Config(_))));
    }

    #[test]
    fn box_helpers() {
        let b = BoundingBox3D::new([1, 2, 3], [2, 2, 5], [4, 4, 6]).unwrap();
        assert_eq!(b.extents(), [2, 1, 3]);
        assert_eq!(b.voxels().count(), 6);
        assert_eq!(b.voxels().next(), Some([1, 2, 3]));
        assert!(BoundingBox3D::new([0, 0, 0], [4, 0, 0], [4, 4, 4]).is_err());
    }
}

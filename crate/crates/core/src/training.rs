//! Training-set assembly shared by the CLI and the experiment harness.

use std::path::Path;

use crate::error::{Error, Result};
use crate::localizer::{slice_training_set, BoundingBox3D};
use crate::neuralnet::{train_with_progress, NetworkSpec, TrainConfig, TrainOutcome};
use crate::phantom::{read_manifest, PhantomSample};
use crate::segmenter::PatchDataset;
use crate::volgrid::{read_label, read_volume, Axis, LabelVolume, NormalizationWindow, Volume3D};

/// An image with its reference label.
#[derive(Clone, Debug)]
pub struct Scan {
    pub id: String,
    /// Raw intensities.
    pub image: Volume3D,
    pub label: LabelVolume,
    pub true_box: BoundingBox3D,
}

impl Scan {
    pub fn new(id: impl Into<String>, image: Volume3D, label: LabelVolume) -> Result<Self> {
        if !image.grid().same_lattice(label.grid()) {
            return Err(Error::Grid("image and label grids differ".into()));
        }
        let true_box = BoundingBox3D::enclosing(&label).ok_or_else(|| Error::config("label is empty"))?;
        Ok(Scan {
            id: id.into(),
            image,
            label,
            true_box,
        })
    }

    pub fn from_phantom(sample: PhantomSample) -> Self {
        Scan {
            id: format!("phantom_{:06}", sample.seed),
            image: sample.image,
            label: sample.label,
            true_box: sample.true_box,
        }
    }

    /// 1 where the slice along `axis` meets the label.
    pub fn slice_presence(&self, axis: Axis) -> Vec<u8> {
        let d = axis.fixed_dim();
        let mut out = vec![0u8; self.label.dims()[d]];
        for p in self.label.foreground() {
            out[p[d]] = 1;
        }
        out
    }
}

/// Reads up to `limit` scans (all when `None`) listed in a manifest.
pub fn load_manifest_scans(manifest: impl AsRef<Path>, limit: Option<usize>) -> Result<Vec<Scan>> {
    let entries = read_manifest(manifest)?;
    let take = limit.unwrap_or(entries.len()).min(entries.len());
    entries[..take]
        .iter()
        .map(|e| {
            let id = e
                .image
                .file_stem()
                .map(|s| s.to_string_lossy().trim_end_matches("_image").to_string())
                .unwrap_or_else(|| e.seed.to_string());
            Scan::new(id, read_volume(&e.image)?, read_label(&e.label)?)
        })
        .collect()
}

pub fn train_localizer(
    scans: &[Scan],
    axis: Axis,
    window: &NormalizationWindow,
    cfg: &TrainConfig,
    progress: impl FnMut(usize, f64),
) -> Result<TrainOutcome> {
    let normalized: Vec<Volume3D> = scans.iter().map(|s| s.image.normalize(window)).collect();
    let presence: Vec<Vec<u8>> = scans.iter().map(|s| s.slice_presence(axis)).collect();
    let pairs: Vec<(&Volume3D, &[u8])> = normalized.iter().zip(&presence).map(|(v, p)| (v, p.as_slice())).collect();
    let data = slice_training_set(&pairs, axis)?;
    train_with_progress(&NetworkSpec::localizer_default(), &data, cfg, progress)
}

/// Balanced patch set: `patches_per_class` positives and as many negatives,
/// split evenly over scans.
pub fn segmenter_dataset(
    scans: &[Scan],
    window: &NormalizationWindow,
    patches_per_class: usize,
    seed: u64,
) -> Result<PatchDataset> {
    let volumes = scans.iter().map(|s| s.image.normalize(window)).collect();
    let labels: Vec<LabelVolume> = scans.iter().map(|s| s.label.clone()).collect();
    let boxes: Vec<BoundingBox3D> = scans.iter().map(|s| s.true_box).collect();
    PatchDataset::balanced(volumes, &labels, &boxes, patches_per_class, seed)
}

pub fn train_segmenter(
    scans: &[Scan],
    window: &NormalizationWindow,
    patches_per_class: usize,
    cfg: &TrainConfig,
    progress: impl FnMut(usize, f64),
) -> Result<TrainOutcome> {
    let data = segmenter_dataset(scans, window, patches_per_class, cfg.seed)?;
    train_with_progress(&NetworkSpec::segmentation_default(), &data, cfg, progress)
}

//! Overlap, surface distance and confusion-matrix metrics, plus report assembly.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::localizer::BoundingBox3D;
use crate::volgrid::LabelVolume;

fn same_grid(a: &LabelVolume, b: &LabelVolume) -> Result<()> {
    if a.grid().same_lattice(b.grid()) {
        Ok(())
    } else {
        Err(Error::Grid(format!(
            "dims {:?} spacing {:?} vs dims {:?} spacing {:?}",
            a.dims(),
            a.spacing(),
            b.dims(),
            b.spacing()
        )))
    }
}

/// `2|a∩b| / (|a|+|b|)`, 1 when both are empty.
pub fn dice(a: &LabelVolume, b: &LabelVolume) -> Result<f64> {
    same_grid(a, b)?;
    let (mut na, mut nb, mut both) = (0usize, 0usize, 0usize);
    for (&x, &y) in a.voxels().iter().zip(b.voxels()) {
        na += x as usize;
        nb += y as usize;
        both += (x & y) as usize;
    }
    if na + nb == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * both as f64 / (na + nb) as f64)
}

/// Foreground voxels with a background face neighbour or on the volume edge.
pub fn surface_voxels(mask: &LabelVolume) -> Vec<[usize; 3]> {
    let d = mask.dims();
    mask.foreground()
        .filter(|&p| {
            (0..3).any(|a| {
                if p[a] == 0 || p[a] + 1 == d[a] {
                    return true;
                }
                let mut lo = p;
                let mut hi = p;
                lo[a] -= 1;
                hi[a] += 1;
                !mask.at(lo) || !mask.at(hi)
            })
        })
        .collect()
}

/// Exact squared Euclidean distance transform in one dimension over samples
/// spaced `step` apart (lower envelope of parabolas).
fn edt_1d(f: &[f64], step: f64, out: &mut [f64], v: &mut Vec<usize>, z: &mut Vec<f64>) {
    let Some(first) = f.iter().position(|x| x.is_finite()) else {
        out.copy_from_slice(f);
        return;
    };
    let pos = |i: usize| i as f64 * step;
    let meet = |p: usize, q: usize| ((f[q] + pos(q) * pos(q)) - (f[p] + pos(p) * pos(p))) / (2.0 * (pos(q) - pos(p)));
    v.clear();
    z.clear();
    v.push(first);
    z.push(f64::NEG_INFINITY);
    z.push(f64::INFINITY);
    for q in first + 1..f.len() {
        if !f[q].is_finite() {
            continue;
        }
        let mut s = meet(*v.last().expect("non-empty"), q);
        // z[0] is -inf, so at least one parabola always survives.
        while s <= z[v.len() - 1] {
            v.pop();
            z.pop();
            s = meet(*v.last().expect("non-empty"), q);
        }
        let k = v.len();
        v.push(q);
        z[k] = s;
        z.push(f64::INFINITY);
    }
    let mut k = 0;
    for (q, o) in out.iter_mut().enumerate() {
        while z[k + 1] < pos(q) {
            k += 1;
        }
        let d = pos(q) - pos(v[k]);
        *o = d * d + f[v[k]];
    }
}

/// Squared distance in mm from every voxel center to the nearest seed voxel.
/// Voxels are infinitely far when there are no seeds.
pub fn squared_distance_transform(dims: [usize; 3], spacing: [f64; 3], seeds: &[[usize; 3]]) -> Vec<f64> {
    let len = dims[0] * dims[1] * dims[2];
    let mut d = vec![f64::INFINITY; len];
    for p in seeds {
        d[p[0] + dims[0] * (p[1] + dims[1] * p[2])] = 0.0;
    }
    let strides = [1, dims[0], dims[0] * dims[1]];
    let (mut line, mut out, mut v, mut z) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
    for axis in 0..3 {
        let n = dims[axis];
        let others: Vec<usize> = (0..3).filter(|&a| a != axis).collect();
        line.resize(n, 0.0);
        out.resize(n, 0.0);
        for j in 0..dims[others[1]] {
            for i in 0..dims[others[0]] {
                let base = i * strides[others[0]] + j * strides[others[1]];
                for k in 0..n {
                    line[k] = d[base + k * strides[axis]];
                }
                edt_1d(&line, spacing[axis], &mut out, &mut v, &mut z);
                for k in 0..n {
                    d[base + k * strides[axis]] = out[k];
                }
            }
        }
    }
    d
}

/// Symmetric mean absolute surface distance in mm, pooled over the surface
/// voxels of both masks.
pub fn mean_abs_surface_distance(a: &LabelVolume, b: &LabelVolume, spacing: [f64; 3]) -> Result<f64> {
    same_grid(a, b)?;
    let sa = surface_voxels(a);
    let sb = surface_voxels(b);
    if sa.is_empty() || sb.is_empty() {
        return Err(Error::UndefinedDistance(format!(
            "{} mask is empty",
            if sa.is_empty() { "first" } else { "second" }
        )));
    }
    let dims = a.dims();
    let to_b = squared_distance_transform(dims, spacing, &sb);
    let to_a = squared_distance_transform(dims, spacing, &sa);
    let idx = |p: &[usize; 3]| p[0] + dims[0] * (p[1] + dims[1] * p[2]);
    let total: f64 = sa.iter().map(|p| to_b[idx(p)].sqrt()).sum::<f64>() + sb.iter().map(|p| to_a[idx(p)].sqrt()).sum::<f64>();
    Ok(total / (sa.len() + sb.len()) as f64)
}

/// Voxel counts of a binary confusion matrix.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Confusion {
    pub tp: usize,
    pub fp: usize,
    pub tn: usize,
    pub fn_: usize,
}

impl Confusion {
    pub fn sensitivity(&self) -> Option<f64> {
        let d = self.tp + self.fn_;
        (d > 0).then(|| self.tp as f64 / d as f64)
    }

    pub fn specificity(&self) -> Option<f64> {
        let d = self.tn + self.fp;
        (d > 0).then(|| self.tn as f64 / d as f64)
    }
}

pub fn confusion_in_box(pred: &LabelVolume, reference: &LabelVolume, bbox: &BoundingBox3D) -> Result<Confusion> {
    same_grid(pred, reference)?;
    if !bbox.fits(pred.dims()) {
        return Err(Error::Bounds(format!("box {:?}..={:?} outside {:?}", bbox.lo, bbox.hi, pred.dims())));
    }
    let mut c = Confusion::default();
    for p in bbox.voxels() {
        match (pred.at(p), reference.at(p)) {
            (true, true) => c.tp += 1,
            (true, false) => c.fp += 1,
            (false, false) => c.tn += 1,
            (false, true) => c.fn_ += 1,
        }
    }
    Ok(c)
}

/// Sensitivity and specificity over the voxels of `bbox`; `None` where the
/// denominator is zero.
pub fn sensitivity_specificity(
    pred: &LabelVolume,
    reference: &LabelVolume,
    bbox: &BoundingBox3D,
) -> Result<(Option<f64>, Option<f64>)> {
    let c = confusion_in_box(pred, reference, bbox)?;
    Ok((c.sensitivity(), c.specificity()))
}

pub const FLAG_EMPTY_PREDICTION: &str = "empty_prediction";
pub const FLAG_MAD_UNDEFINED: &str = "mad_undefined";
pub const FLAG_SENSITIVITY_UNDEFINED: &str = "sensitivity_undefined";
pub const FLAG_SPECIFICITY_UNDEFINED: &str = "specificity_undefined";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScanReport {
    pub id: String,
    pub dice: f64,
    pub mad_mm: Option<f64>,
    pub sensitivity: Option<f64>,
    pub specificity: Option<f64>,
    pub flags: Vec<String>,
    #[serde(rename = "box")]
    pub bbox: BoundingBox3D,
}

impl ScanReport {
    pub fn empty_prediction(&self) -> bool {
        self.flags.iter().any(|f| f == FLAG_EMPTY_PREDICTION)
    }
}

/// Unweighted means over scans. Undefined per-scan values are left out of
/// their mean and counted separately.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub scans: usize,
    pub dice: f64,
    pub mad_mm: Option<f64>,
    pub sensitivity: Option<f64>,
    pub specificity: Option<f64>,
    pub mad_scans: usize,
    pub sensitivity_scans: usize,
    pub specificity_scans: usize,
    pub empty_predictions: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvaluationReport {
    pub scans: Vec<ScanReport>,
    pub aggregate: Aggregate,
}

fn mean_defined(values: impl Iterator<Item = Option<f64>>) -> (Option<f64>, usize) {
    let (sum, n) = values.flatten().fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    ((n > 0).then(|| sum / n as f64), n)
}

impl EvaluationReport {
    pub fn from_scans(scans: Vec<ScanReport>) -> Self {
        let n = scans.len();
        let dice = if n == 0 {
            0.0
        } else {
            scans.iter().map(|s| s.dice).sum::<f64>() / n as f64
        };
        let (mad_mm, mad_scans) = mean_defined(scans.iter().map(|s| s.mad_mm));
        let (sensitivity, sensitivity_scans) = mean_defined(scans.iter().map(|s| s.sensitivity));
        let (specificity, specificity_scans) = mean_defined(scans.iter().map(|s| s.specificity));
        let empty_predictions = scans.iter().filter(|s| s.empty_prediction()).count();
        EvaluationReport {
            aggregate: Aggregate {
                scans: n,
                dice,
                mad_mm,
                sensitivity,
                specificity,
                mad_scans,
                sensitivity_scans,
                specificity_scans,
                empty_predictions,
            },
            scans,
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::format(format!("report JSON: {e}")))
    }

    pub fn write_json(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_json() + "\n").map_err(|e| Error::file(path, e))
    }

    /// One-line summary of the aggregate.
    pub fn summary_line(&self) -> String {
        let opt = |v: Option<f64>| v.map_or_else(|| "undefined".to_string(), |v| format!("{v:.4}"));
        let a = &self.aggregate;
        format!(
            "scans={} dice={:.4} mad_mm={} sensitivity={} specificity={} empty={}",
            a.scans,
            a.dice,
            opt(a.mad_mm),
            opt(a.sensitivity),
            opt(a.specificity),
            a.empty_predictions
        )
    }
}

pub fn evaluate_scan(id: &str, pred: &LabelVolume, reference: &LabelVolume, bbox: &BoundingBox3D) -> Result<ScanReport> {
    let dice = dice(pred, reference)?;
    let mut flags = Vec::new();
    if pred.is_empty_mask() {
        flags.push(FLAG_EMPTY_PREDICTION.to_string());
    }
    let mad_mm = match mean_abs_surface_distance(pred, reference, pred.spacing()) {
        Ok(v) => Some(v),
        Err(Error::UndefinedDistance(_)) => {
            flags.push(FLAG_MAD_UNDEFINED.to_string());
            None
        }
        Err(e) => return Err(e),
    };
    let (sensitivity, specificity) = sensitivity_specificity(pred, reference, bbox)?;
    if sensitivity.is_none() {
        flags.push(FLAG_SENSITIVITY_UNDEFINED.to_string());
    }
    if specificity.is_none() {
        flags.push(FLAG_SPECIFICITY_UNDEFINED.to_string());
    }
    Ok(ScanReport {
        id: id.to_string(),
        dice,
        mad_mm,
        sensitivity,
        specificity,
        flags,
        bbox: *bbox,
    })
}

pub fn evaluate_dataset(
    ids: &[String],
    predictions: &[LabelVolume],
    references: &[LabelVolume],
    boxes: &[BoundingBox3D],
) -> Result<EvaluationReport> {
    let n = predictions.len();
    if ids.len() != n || references.len() != n || boxes.len() != n {
        return Err(Error::CountMismatch(format!(
            "{} ids, {n} predictions, {} references, {} boxes",
            ids.len(),
            references.len(),
            boxes.len()
        )));
    }
    let scans = (0..n)
        .map(|i| evaluate_scan(&ids[i], &predictions[i], &references[i], &boxes[i]))
        .collect::<Result<Vec<_>>>()?;
    Ok(EvaluationReport::from_scans(scans))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::volgrid::Grid;

    fn mask(dims: [usize; 3], spacing: [f64; 3], f: impl Fn(usize, usize, usize) -> bool) -> LabelVolume {
        LabelVolume::from_fn(Grid::new(dims, spacing, [0.0; 3]).unwrap(), f).unwrap()
    }

    #[test]
    fn dice_of_offset_cubes() {
        let a = mask([6; 3], [1.0; 3], |x, y, z| x < 2 && y < 2 && z < 2);
        let b = mask([6; 3], [1.0; 3], |x, y, z| (1..3).contains(&x) && y < 2 && z < 2);
        assert_eq!(dice(&a, &b).unwrap(), 0.5);
        assert_eq!(dice(&a, &a).unwrap(), 1.0);
        let empty = mask([6; 3], [1.0; 3], |_, _, _| false);
        assert_eq!(dice(&empty, &empty).unwrap(), 1.0);
    }

    #[test]
    fn grid_mismatch_is_an_error() {
        let a = mask([4; 3], [1.0; 3], |_, _, _| true);
        let b = mask([5, 4, 4], [1.0; 3], |_, _, _| true);
        assert!(matches!(dice(&a, &b), Err(Error::Grid(_))));
    }

    #[test]
    fn single_voxels_three_apart() {
        let a = mask([8, 3, 3], [1.0; 3], |x, y, z| (x, y, z) == (1, 1, 1));
        let b = mask([8, 3, 3], [1.0; 3], |x, y, z| (x, y, z) == (4, 1, 1));
        assert_eq!(mean_abs_surface_distance(&a, &b, [1.0; 3]).unwrap(), 3.0);
        assert_eq!(mean_abs_surface_distance(&a, &a, [1.0; 3]).unwrap(), 0.0);
    }

    #[test]
    fn empty_mask_distance_undefined() {
        let a = mask([4; 3], [1.0; 3], |x, _, _| x == 0);
        let e = mask([4; 3], [1.0; 3], |_, _, _| false);
        assert!(matches!(
            mean_abs_surface_distance(&a, &e, [1.0; 3]),
            Err(Error::UndefinedDistance(_))
        ));
    }

    #[test]
    fn interior_voxels_are_not_surface() {
        let m = mask([5; 3], [1.0; 3], |x, y, z| (1..4).contains(&x) && (1..4).contains(&y) && (1..4).contains(&z));
        assert_eq!(surface_voxels(&m).len(), 26);
    }

    #[test]
    fn distance_transform_is_anisotropic() {
        let d = squared_distance_transform([3, 3, 3], [1.0, 2.0, 3.0], &[[0, 0, 0]]);
        assert_eq!(d[2 + 3 * (2 + 3 * 2)], 4.0 + 16.0 + 36.0);
        assert!(squared_distance_transform([2, 1, 1], [1.0; 3], &[]).iter().all(|v| v.is_infinite()));
    }

    #[test]
    fn confusion_counts_only_inside_box() {
        let r = mask([4; 3], [1.0; 3], |x, _, _| x == 0);
        let p = mask([4; 3], [1.0; 3], |x, _, _| x <= 1);
        let bbox = BoundingBox3D::new([0; 3], [1, 3, 3], [4; 3]).unwrap();
        let c = confusion_in_box(&p, &r, &bbox).unwrap();
        assert_eq!(c, Confusion { tp: 16, fp: 16, tn: 0, fn_: 0 });
        assert_eq!(c.specificity(), Some(0.0));
        let all_pos = BoundingBox3D::new([0; 3], [0, 3, 3], [4; 3]).unwrap();
        assert_eq!(sensitivity_specificity(&p, &r, &all_pos).unwrap(), (Some(1.0), None));
    }

    #[test]
    fn empty_prediction_is_flagged() {
        let r = mask([4; 3], [1.0; 3], |x, _, _| x == 0);
        let p = mask([4; 3], [1.0; 3], |_, _, _| false);
        let s = evaluate_scan("a", &p, &r, &BoundingBox3D::full([4; 3])).unwrap();
        assert_eq!(s.dice, 0.0);
        assert_eq!(s.mad_mm, None);
        assert!(s.empty_prediction());
        assert_eq!(s.sensitivity, Some(0.0));
    }

    #[test]
    fn count_mismatch() {
        let r = mask([4; 3], [1.0; 3], |x, _, _| x == 0);
        let err = evaluate_dataset(&["a".into()], &[r.clone(), r.clone()], &[r.clone(), r], &[]).unwrap_err();
        assert!(matches!(err, Error::CountMismatch(_)));
    }
}

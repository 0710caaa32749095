//! Volume grids, intensity windowing, and orthogonal slice/patch sampling.
//!
//! Voxels are stored x-fastest, then y, then z. The three orthogonal planes
//! follow radiological naming: an axial slice fixes z, a coronal slice fixes
//! y and a sagittal slice fixes x.

mod metaimage;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::neuralnet::Scalar;

pub use metaimage::{read_label, read_volume, read_volume_typed, write_label, write_volume, ElementType};

/// Patch edge length used by the voxel classifier.
pub const PATCH_SIZE: usize = 48;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Axis {
    Axial,
    Coronal,
    Sagittal,
}

impl Axis {
    pub const ALL: [Axis; 3] = [Axis::Axial, Axis::Coronal, Axis::Sagittal];

    /// Grid dimension held fixed by a slice in this plane.
    pub fn fixed_dim(self) -> usize {
        match self {
            Axis::Axial => 2,
            Axis::Coronal => 1,
            Axis::Sagittal => 0,
        }
    }

    /// The two in-plane grid dimensions, fast one first.
    pub fn plane_dims(self) -> (usize, usize) {
        match self {
            Axis::Axial => (0, 1),
            Axis::Coronal => (0, 2),
            Axis::Sagittal => (1, 2),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Axis::Axial => "axial",
            Axis::Coronal => "coronal",
            Axis::Sagittal => "sagittal",
        }
    }
}

impl fmt::Display for Axis {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Axis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "axial" | "z" => Ok(Axis::Axial),
            "coronal" | "y" => Ok(Axis::Coronal),
            "sagittal" | "x" => Ok(Axis::Sagittal),
            other => Err(Error::config(format!("axis: unknown plane '{other}'"))),
        }
    }
}

/// Geometry shared by every volume defined on the same lattice.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Grid {
    pub dims: [usize; 3],
    /// mm per voxel along x, y, z.
    pub spacing: [f64; 3],
    /// World position of voxel (0,0,0) in mm.
    pub origin: [f64; 3],
}

impl Grid {
    pub fn new(dims: [usize; 3], spacing: [f64; 3], origin: [f64; 3]) -> Result<Self> {
        let grid = Grid {
            dims,
            spacing,
            origin,
        };
        grid.validate()?;
        Ok(grid)
    }

    pub fn validate(&self) -> Result<()> {
        if self.dims.iter().any(|&d| d == 0) {
            return Err(Error::config(format!("dims: every extent must be >= 1, got {:?}", self.dims)));
        }
        if self.spacing.iter().any(|&s| !(s > 0.0) || !s.is_finite()) {
            return Err(Error::config(format!(
                "spacing: every component must be positive, got {:?}",
                self.spacing
            )));
        }
        if self.origin.iter().any(|o| !o.is_finite()) {
            return Err(Error::config("origin: components must be finite"));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.dims[0] * self.dims[1] * self.dims[2]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    #[inline]
    pub fn index(&self, x: usize, y: usize, z: usize) -> usize {
        x + self.dims[0] * (y + self.dims[1] * z)
    }

    #[inline]
    pub fn coords(&self, idx: usize) -> [usize; 3] {
        let nx = self.dims[0];
        let ny = self.dims[1];
        [idx % nx, (idx / nx) % ny, idx / (nx * ny)]
    }

    pub fn contains(&self, p: [usize; 3]) -> bool {
        p[0] < self.dims[0] && p[1] < self.dims[1] && p[2] < self.dims[2]
    }

    /// True when both grids describe the same lattice.
    pub fn same_lattice(&self, other: &Grid) -> bool {
        self.dims == other.dims
            && self
                .spacing
                .iter()
                .zip(other.spacing.iter())
                .all(|(a, b)| (a - b).abs() <= 1e-9 * a.abs().max(1.0))
    }
}

/// Scalar image on a [`Grid`].
#[derive(Clone, Debug, PartialEq)]
pub struct Volume3D {
    grid: Grid,
    voxels: Vec<f64>,
}

impl Volume3D {
    pub fn new(grid: Grid, voxels: Vec<f64>) -> Result<Self> {
        grid.validate()?;
        if voxels.len() != grid.len() {
            return Err(Error::Shape(format!(
                "volume of dims {:?} needs {} voxels, got {}",
                grid.dims,
                grid.len(),
                voxels.len()
            )));
        }
        Ok(Volume3D { grid, voxels })
    }

    pub fn filled(grid: Grid, value: f64) -> Result<Self> {
        Self::new(grid, vec![value; grid.len()])
    }

    pub fn from_fn(grid: Grid, mut f: impl FnMut(usize, usize, usize) -> f64) -> Result<Self> {
        grid.validate()?;
        let mut voxels = Vec::with_capacity(grid.len());
        for z in 0..grid.dims[2] {
            for y in 0..grid.dims[1] {
                for x in 0..grid.dims[0] {
                    voxels.push(f(x, y, z));
                }
            }
        }
        Self::new(grid, voxels)
    }

    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    pub fn dims(&self) -> [usize; 3] {
        self.grid.dims
    }

    pub fn spacing(&self) -> [f64; 3] {
        self.grid.spacing
    }

    pub fn origin(&self) -> [f64; 3] {
        self.grid.origin
    }

    pub fn voxels(&self) -> &[f64] {
        &self.voxels
    }

    pub fn into_voxels(self) -> Vec<f64> {
        self.voxels
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, z: usize) -> f64 {
        self.voxels[self.grid.index(x, y, z)]
    }

    pub fn at(&self, p: [usize; 3]) -> f64 {
        self.get(p[0], p[1], p[2])
    }

    /// Signed lookup returning `fill` outside the grid.
    #[inline]
    fn get_or(&self, x: isize, y: isize, z: isize, fill: f64) -> f64 {
        let d = self.grid.dims;
        if x < 0 || y < 0 || z < 0 || x as usize >= d[0] || y as usize >= d[1] || z as usize >= d[2] {
            fill
        } else {
            self.get(x as usize, y as usize, z as usize)
        }
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Volume3D {
        Volume3D {
            grid: self.grid,
            voxels: self.voxels.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn normalize(&self, window: &NormalizationWindow) -> Volume3D {
        self.map(|v| window.apply(v))
    }

    pub fn extract_slice(&self, axis: Axis, index: usize) -> Result<Slice2D> {
        let d = self.grid.dims;
        let fixed = axis.fixed_dim();
        if index >= d[fixed] {
            return Err(Error::Bounds(format!(
                "{axis} slice {index} outside 0..{}",
                d[fixed]
            )));
        }
        let (fast, slow) = axis.plane_dims();
        let (w, h) = (d[fast], d[slow]);
        let mut data = Vec::with_capacity(w * h);
        match axis {
            Axis::Axial => {
                let start = self.grid.index(0, 0, index);
                data.extend_from_slice(&self.voxels[start..start + w * h]);
            }
            Axis::Coronal => {
                for z in 0..h {
                    let start = self.grid.index(0, index, z);
                    data.extend_from_slice(&self.voxels[start..start + w]);
                }
            }
            Axis::Sagittal => {
                for z in 0..h {
                    for y in 0..w {
                        data.push(self.get(index, y, z));
                    }
                }
            }
        }
        Ok(Slice2D {
            width: w,
            height: h,
            data,
        })
    }

    pub fn extract_patch_triplet(&self, center: [usize; 3], size: usize) -> Result<PatchTriplet> {
        let mut data = vec![0.0; 3 * size * size];
        self.fill_patch_triplet(center, size, &mut data)?;
        Ok(PatchTriplet { size, center, data })
    }

    /// Writes the axial, coronal and sagittal patches around `center` as three
    /// consecutive `size × size` row-major planes. The center voxel lands on
    /// pixel `(size/2, size/2)`; samples outside the grid read as 0.
    pub fn fill_patch_triplet<T: Scalar>(&self, center: [usize; 3], size: usize, out: &mut [T]) -> Result<()> {
        if !self.grid.contains(center) {
            return Err(Error::Bounds(format!(
                "patch center {center:?} outside dims {:?}",
                self.grid.dims
            )));
        }
        let plane = size * size;
        if out.len() != 3 * plane {
            return Err(Error::Shape(format!(
                "patch buffer holds {} values, need {}",
                out.len(),
                3 * plane
            )));
        }
        let half = (size / 2) as isize;
        let [cx, cy, cz] = center.map(|c| c as isize);
        let (axial, rest) = out.split_at_mut(plane);
        let (coronal, sagittal) = rest.split_at_mut(plane);
        for row in 0..size {
            let dv = row as isize - half;
            for col in 0..size {
                let du = col as isize - half;
                let k = row * size + col;
                axial[k] = T::from_f64(self.get_or(cx + du, cy + dv, cz, 0.0));
                coronal[k] = T::from_f64(self.get_or(cx + du, cy, cz + dv, 0.0));
                sagittal[k] = T::from_f64(self.get_or(cx, cy + du, cz + dv, 0.0));
            }
        }
        Ok(())
    }
}

/// Binary mask on a [`Grid`].
#[derive(Clone, Debug, PartialEq)]
pub struct LabelVolume {
    grid: Grid,
    voxels: Vec<u8>,
}

impl LabelVolume {
    pub fn new(grid: Grid, voxels: Vec<u8>) -> Result<Self> {
        grid.validate()?;
        if voxels.len() != grid.len() {
            return Err(Error::Shape(format!(
                "label of dims {:?} needs {} voxels, got {}",
                grid.dims,
                grid.len(),
                voxels.len()
            )));
        }
        if let Some(bad) = voxels.iter().find(|&&v| v > 1) {
            return Err(Error::format(format!("label values must be 0 or 1, found {bad}")));
        }
        Ok(LabelVolume { grid, voxels })
    }

    pub fn zeros(grid: Grid) -> Self {
        LabelVolume {
            grid,
            voxels: vec![0; grid.len()],
        }
    }

    pub fn from_fn(grid: Grid, mut f: impl FnMut(usize, usize, usize) -> bool) -> Result<Self> {
        let mut label = Self::zeros(grid);
        grid.validate()?;
        for z in 0..grid.dims[2] {
            for y in 0..grid.dims[1] {
                for x in 0..grid.dims[0] {
                    if f(x, y, z) {
                        label.voxels[grid.index(x, y, z)] = 1;
                    }
                }
            }
        }
        Ok(label)
    }

    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    pub fn dims(&self) -> [usize; 3] {
        self.grid.dims
    }

    pub fn spacing(&self) -> [f64; 3] {
        self.grid.spacing
    }

    pub fn voxels(&self) -> &[u8] {
        &self.voxels
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, z: usize) -> bool {
        self.voxels[self.grid.index(x, y, z)] != 0
    }

    pub fn at(&self, p: [usize; 3]) -> bool {
        self.get(p[0], p[1], p[2])
    }

    pub fn set(&mut self, p: [usize; 3], on: bool) {
        let i = self.grid.index(p[0], p[1], p[2]);
        self.voxels[i] = on as u8;
    }

    pub fn count(&self) -> usize {
        self.voxels.iter().filter(|&&v| v != 0).count()
    }

    pub fn is_empty_mask(&self) -> bool {
        self.voxels.iter().all(|&v| v == 0)
    }

    /// Voxel indices of all foreground voxels, in storage order.
    pub fn foreground(&self) -> impl Iterator<Item = [usize; 3]> + '_ {
        self.voxels
            .iter()
            .enumerate()
            .filter(|(_, &v)| v != 0)
            .map(|(i, _)| self.grid.coords(i))
    }
}

/// A 2D cross-section; `width` runs along the faster in-plane axis.
#[derive(Clone, Debug, PartialEq)]
pub struct Slice2D {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f64>,
}

impl Slice2D {
    #[inline]
    pub fn get(&self, col: usize, row: usize) -> f64 {
        self.data[row * self.width + col]
    }

    /// Area-averaging resample to `out_w × out_h`. Each output pixel is the
    /// overlap-weighted mean of the input pixels it covers.
    pub fn resample_area(&self, out_w: usize, out_h: usize) -> Slice2D {
        let wx = area_weights(self.width, out_w);
        let wy = area_weights(self.height, out_h);
        let mut tmp = vec![0.0; out_w * self.height];
        for row in 0..self.height {
            let src = &self.data[row * self.width..(row + 1) * self.width];
            for (o, taps) in wx.iter().enumerate() {
                tmp[row * out_w + o] = taps.iter().map(|&(i, w)| w * src[i]).sum();
            }
        }
        let mut data = vec![0.0; out_w * out_h];
        for (o, taps) in wy.iter().enumerate() {
            for col in 0..out_w {
                data[o * out_w + col] = taps.iter().map(|&(i, w)| w * tmp[i * out_w + col]).sum();
            }
        }
        Slice2D {
            width: out_w,
            height: out_h,
            data,
        }
    }
}

/// Overlap weights mapping `n_in` cells onto `n_out` equal-width bins.
fn area_weights(n_in: usize, n_out: usize) -> Vec<Vec<(usize, f64)>> {
    let scale = n_in as f64 / n_out as f64;
    (0..n_out)
        .map(|o| {
            let lo = o as f64 * scale;
            let hi = (o + 1) as f64 * scale;
            let first = lo.floor() as usize;
            let last = (hi.ceil() as usize).min(n_in);
            let mut taps: Vec<(usize, f64)> = (first..last)
                .map(|i| {
                    let overlap = (hi.min(i as f64 + 1.0) - lo.max(i as f64)).max(0.0);
                    (i, overlap)
                })
                .filter(|&(_, w)| w > 0.0)
                .collect();
            let total: f64 = taps.iter().map(|t| t.1).sum();
            for t in &mut taps {
                t.1 /= total;
            }
            taps
        })
        .collect()
}

/// Linear intensity window mapping `[lo, hi]` onto `[0, 1]` with clamping.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormalizationWindow {
    pub lo: f64,
    pub hi: f64,
}

impl NormalizationWindow {
    pub fn new(lo: f64, hi: f64) -> Result<Self> {
        if !(lo < hi) || !lo.is_finite() || !hi.is_finite() {
            return Err(Error::config(format!("window: need lo < hi, got lo={lo} hi={hi}")));
        }
        Ok(NormalizationWindow { lo, hi })
    }

    #[inline]
    pub fn apply(&self, v: f64) -> f64 {
        ((v - self.lo) / (self.hi - self.lo)).clamp(0.0, 1.0)
    }
}

impl Default for NormalizationWindow {
    fn default() -> Self {
        NormalizationWindow { lo: -200.0, hi: 800.0 }
    }
}

/// Tri-planar classifier input: axial, coronal and sagittal patches through one voxel.
#[derive(Clone, Debug, PartialEq)]
pub struct PatchTriplet {
    pub size: usize,
    pub center: [usize; 3],
    data: Vec<f64>,
}

impl PatchTriplet {
    fn plane(&self, k: usize) -> &[f64] {
        let n = self.size * self.size;
        &self.data[k * n..(k + 1) * n]
    }

    pub fn axial(&self) -> &[f64] {
        self.plane(0)
    }

    pub fn coronal(&self) -> &[f64] {
        self.plane(1)
    }

    pub fn sagittal(&self) -> &[f64] {
        self.plane(2)
    }

    /// All three planes stacked as channels.
    pub fn as_channels(&self) -> &[f64] {
        &self.data
    }
}

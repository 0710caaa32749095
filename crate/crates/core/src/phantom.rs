//! Synthetic cardiac-like CT volumes with a known left-ventricle label.
//!
//! A phantom is a rotated ellipsoidal myocardial shell around a bright cavity,
//! two dark lung blobs, a few bright distractor ellipsoids and Gaussian noise.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::localizer::BoundingBox3D;
use crate::volgrid::{write_label, write_volume, Axis, ElementType, Grid, LabelVolume, Volume3D};

/// Clearance kept between a distractor or lung and the epicardium, in mm.
pub const CLEARANCE_MM: f64 = 2.0;

const PLACEMENT_ATTEMPTS: usize = 200;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum LabelMode {
    /// Myocardium only.
    Shell,
    /// Myocardium and the cavity it encloses.
    ShellAndCavity,
}

impl std::str::FromStr for LabelMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "shell" => Ok(LabelMode::Shell),
            "shell_and_cavity" | "shell-and-cavity" => Ok(LabelMode::ShellAndCavity),
            other => Err(Error::config(format!(
                "label_mode: expected shell or shell_and_cavity, got '{other}'"
            ))),
        }
    }
}

/// Intensities in HU.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Intensities {
    pub background: f64,
    pub lung: f64,
    pub cavity: f64,
    pub myocardium: f64,
    pub distractor: f64,
}

impl Default for Intensities {
    fn default() -> Self {
        Intensities {
            background: -50.0,
            lung: -800.0,
            cavity: 400.0,
            myocardium: 100.0,
            distractor: 350.0,
        }
    }
}

/// Inclusive range of semi-axes in mm, one `(lo, hi)` pair per local axis.
pub type SemiAxisRange = [(f64, f64); 3];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PhantomConfig {
    pub dims: [usize; 3],
    pub spacing: [f64; 3],
    pub intensities: Intensities,
    pub noise_sigma: f64,
    pub epicardial: SemiAxisRange,
    pub endocardial: SemiAxisRange,
    /// Largest absolute Euler angle of the ventricle, in degrees.
    pub max_rotation_deg: f64,
    pub distractors: (usize, usize),
    pub distractor_axes: (f64, f64),
    pub label_mode: LabelMode,
    /// Base seed for datasets.
    pub seed: u64,
}

impl Default for PhantomConfig {
    fn default() -> Self {
        PhantomConfig {
            dims: [96, 96, 96],
            spacing: [0.9, 0.9, 0.9],
            intensities: Intensities::default(),
            noise_sigma: 20.0,
            epicardial: [(18.0, 22.0), (18.0, 22.0), (26.0, 32.0)],
            endocardial: [(11.0, 14.0), (11.0, 14.0), (18.0, 23.0)],
            max_rotation_deg: 30.0,
            distractors: (1, 3),
            distractor_axes: (6.0, 12.0),
            label_mode: LabelMode::Shell,
            seed: 0,
        }
    }
}

impl PhantomConfig {
    pub fn validate(&self) -> Result<()> {
        Grid::new(self.dims, self.spacing, [0.0; 3]).map_err(|e| Error::config(format!("dims/spacing: {e}")))?;
        if !(self.noise_sigma >= 0.0) || !self.noise_sigma.is_finite() {
            return Err(Error::config("noise_sigma: must be finite and >= 0"));
        }
        for (name, range) in [("epicardial", &self.epicardial), ("endocardial", &self.endocardial)] {
            for &(lo, hi) in range {
                if !(lo > 0.0 && lo <= hi && hi.is_finite()) {
                    return Err(Error::config(format!("{name}: semi-axis range ({lo}, {hi}) invalid")));
                }
            }
        }
        for a in 0..3 {
            if self.endocardial[a].1 >= self.epicardial[a].0 {
                return Err(Error::config(format!(
                    "endocardial: semi-axis {a} may reach {} mm, not inside epicardial minimum {} mm",
                    self.endocardial[a].1, self.epicardial[a].0
                )));
            }
        }
        let reach = self.max_epicardial_axis() * 1.1;
        for a in 0..3 {
            let extent = (self.dims[a] - 1) as f64 * self.spacing[a];
            if extent < 2.0 * reach {
                return Err(Error::config(format!(
                    "dims: axis {a} spans {extent:.1} mm, need {:.1} mm for the epicardium plus margin",
                    2.0 * reach
                )));
            }
        }
        if !(0.0..=90.0).contains(&self.max_rotation_deg) {
            return Err(Error::config("max_rotation_deg: must lie in [0, 90]"));
        }
        if self.distractors.0 > self.distractors.1 {
            return Err(Error::config("distractors: min exceeds max"));
        }
        let (dlo, dhi) = self.distractor_axes;
        if !(dlo > 0.0 && dlo <= dhi && dhi.is_finite()) {
            return Err(Error::config("distractor_axes: invalid range"));
        }
        Ok(())
    }

    fn max_epicardial_axis(&self) -> f64 {
        self.epicardial.iter().map(|r| r.1).fold(0.0, f64::max)
    }

    pub fn grid(&self) -> Result<Grid> {
        Grid::new(self.dims, self.spacing, [0.0; 3])
    }
}

/// Solid ellipsoid in physical coordinates (mm, origin at voxel 0).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Ellipsoid {
    pub center: [f64; 3],
    pub semi_axes: [f64; 3],
    /// Columns are the ellipsoid's local axes in world coordinates.
    pub rotation: [[f64; 3]; 3],
}

impl Ellipsoid {
    pub fn axis_aligned(center: [f64; 3], semi_axes: [f64; 3]) -> Self {
        Ellipsoid {
            center,
            semi_axes,
            rotation: [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]],
        }
    }

    /// `Σ (q_i / (a_i + grow))²` with `q` the point in local coordinates.
    pub fn quadratic_form(&self, p: [f64; 3], grow: f64) -> f64 {
        let d = [0, 1, 2].map(|a| p[a] - self.center[a]);
        (0..3)
            .map(|j| {
                let q = (0..3).map(|i| self.rotation[i][j] * d[i]).sum::<f64>();
                let a = self.semi_axes[j] + grow;
                (q / a) * (q / a)
            })
            .sum()
    }

    pub fn contains(&self, p: [f64; 3]) -> bool {
        self.quadratic_form(p, 0.0) <= 1.0
    }

    /// World-axis half extents.
    pub fn half_extents(&self, grow: f64) -> [f64; 3] {
        [0, 1, 2].map(|i| {
            (0..3)
                .map(|j| (self.rotation[i][j] * (self.semi_axes[j] + grow)).powi(2))
                .sum::<f64>()
                .sqrt()
        })
    }

    /// Voxel index range that can contain points within `grow` mm of the surface.
    fn voxel_span(&self, grid: &Grid, grow: f64) -> Option<([usize; 3], [usize; 3])> {
        let h = self.half_extents(grow);
        let mut lo = [0; 3];
        let mut hi = [0; 3];
        for a in 0..3 {
            let s = grid.spacing[a];
            let a0 = ((self.center[a] - h[a]) / s).ceil().max(0.0);
            let a1 = ((self.center[a] + h[a]) / s).floor().min((grid.dims[a] - 1) as f64);
            if a1 < a0 {
                return None;
            }
            lo[a] = a0 as usize;
            hi[a] = a1 as usize;
        }
        Some((lo, hi))
    }

    fn for_each_voxel(&self, grid: &Grid, grow: f64, mut f: impl FnMut([usize; 3], [f64; 3]) -> bool) {
        let Some((lo, hi)) = self.voxel_span(grid, grow) else {
            return;
        };
        for z in lo[2]..=hi[2] {
            for y in lo[1]..=hi[1] {
                for x in lo[0]..=hi[0] {
                    let p = voxel_center(grid, [x, y, z]);
                    if self.quadratic_form(p, grow) <= 1.0 && !f([x, y, z], p) {
                        return;
                    }
                }
            }
        }
    }
}

pub fn voxel_center(grid: &Grid, p: [usize; 3]) -> [f64; 3] {
    [0, 1, 2].map(|a| p[a] as f64 * grid.spacing[a])
}

/// `Rz(c) · Ry(b) · Rx(a)`.
pub fn euler_rotation(a: f64, b: f64, c: f64) -> [[f64; 3]; 3] {
    let (sa, ca) = a.sin_cos();
    let (sb, cb) = b.sin_cos();
    let (sc, cc) = c.sin_cos();
    [
        [cc * cb, cc * sb * sa - sc * ca, cc * sb * ca + sc * sa],
        [sc * cb, sc * sb * sa + cc * ca, sc * sb * ca - cc * sa],
        [-sb, cb * sa, cb * ca],
    ]
}

#[derive(Clone, Debug, PartialEq)]
pub struct PhantomSample {
    pub seed: u64,
    pub image: Volume3D,
    pub label: LabelVolume,
    pub true_box: BoundingBox3D,
    /// Presence per slice, indexed by the fixed volume dimension (x, y, z).
    pub slice_labels: [Vec<u8>; 3],
    pub epicardium: Ellipsoid,
    pub endocardium: Ellipsoid,
    pub lungs: Vec<Ellipsoid>,
    pub distractors: Vec<Ellipsoid>,
}

impl PhantomSample {
    pub fn slice_labels(&self, axis: Axis) -> &[u8] {
        &self.slice_labels[axis.fixed_dim()]
    }
}

fn uniform(rng: &mut ChaCha8Rng, (lo, hi): (f64, f64)) -> f64 {
    if lo == hi {
        lo
    } else {
        rng.random_range(lo..=hi)
    }
}

/// True when no voxel center of `e` comes within the clearance of `epi`.
fn clear_of(e: &Ellipsoid, epi: &Ellipsoid, grid: &Grid) -> bool {
    let mut clear = true;
    e.for_each_voxel(grid, 0.0, |_, p| {
        clear = epi.quadratic_form(p, CLEARANCE_MM) > 1.0;
        clear
    });
    clear
}

pub fn generate(cfg: &PhantomConfig, seed: u64) -> Result<PhantomSample> {
    cfg.validate()?;
    let grid = cfg.grid()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let epi_axes = cfg.epicardial.map(|r| uniform(&mut rng, r));
    let endo_axes = cfg.endocardial.map(|r| uniform(&mut rng, r));
    let max_rot = cfg.max_rotation_deg.to_radians();
    let [ra, rb, rc] = [0; 3].map(|_| uniform(&mut rng, (-max_rot, max_rot)));
    let rotation = euler_rotation(ra, rb, rc);
    let reach = epi_axes.iter().cloned().fold(0.0, f64::max) * 1.1;
    let center = [0, 1, 2].map(|a| {
        let extent = (cfg.dims[a] - 1) as f64 * cfg.spacing[a];
        uniform(&mut rng, (reach, extent - reach))
    });
    let epicardium = Ellipsoid {
        center,
        semi_axes: epi_axes,
        rotation,
    };
    let endocardium = Ellipsoid {
        semi_axes: endo_axes,
        ..epicardium
    };

    let extent = [0, 1, 2].map(|a| (cfg.dims[a] - 1) as f64 * cfg.spacing[a]);
    let mut lungs = Vec::new();
    for side in [0.0, 1.0] {
        for _ in 0..PLACEMENT_ATTEMPTS {
            let axes = [
                uniform(&mut rng, (12.0, 18.0)),
                uniform(&mut rng, (18.0, 26.0)),
                uniform(&mut rng, (24.0, 34.0)),
            ];
            let x = side * extent[0] + (1.0 - 2.0 * side) * uniform(&mut rng, (0.0, 0.2 * extent[0]));
            let c = [
                x,
                uniform(&mut rng, (0.3 * extent[1], 0.7 * extent[1])),
                uniform(&mut rng, (0.3 * extent[2], 0.7 * extent[2])),
            ];
            let lung = Ellipsoid::axis_aligned(c, axes);
            if clear_of(&lung, &epicardium, &grid) {
                lungs.push(lung);
                break;
            }
        }
    }

    let n_distractors = rng.random_range(cfg.distractors.0..=cfg.distractors.1);
    let mut distractors = Vec::new();
    for _ in 0..n_distractors {
        for _ in 0..PLACEMENT_ATTEMPTS {
            let axes = [0; 3].map(|_| uniform(&mut rng, cfg.distractor_axes));
            let [a, b, c] = [0; 3].map(|_| uniform(&mut rng, (-std::f64::consts::PI, std::f64::consts::PI)));
            let d = Ellipsoid {
                center: extent.map(|e| uniform(&mut rng, (0.0, e))),
                semi_axes: axes,
                rotation: euler_rotation(a, b, c),
            };
            if clear_of(&d, &epicardium, &grid) {
                distractors.push(d);
                break;
            }
        }
    }

    let it = cfg.intensities;
    let mut image = vec![it.background; grid.len()];
    let paint = |e: &Ellipsoid, value: f64, image: &mut Vec<f64>| {
        e.for_each_voxel(&grid, 0.0, |p, _| {
            image[grid.index(p[0], p[1], p[2])] = value;
            true
        })
    };
    for lung in &lungs {
        paint(lung, it.lung, &mut image);
    }
    for d in &distractors {
        paint(d, it.distractor, &mut image);
    }
    let mut label = vec![0u8; grid.len()];
    epicardium.for_each_voxel(&grid, 0.0, |p, c| {
        let i = grid.index(p[0], p[1], p[2]);
        if endocardium.contains(c) {
            image[i] = it.cavity;
            label[i] = (cfg.label_mode == LabelMode::ShellAndCavity) as u8;
        } else {
            image[i] = it.myocardium;
            label[i] = 1;
        }
        true
    });

    if cfg.noise_sigma > 0.0 {
        let noise = Normal::new(0.0, cfg.noise_sigma).map_err(|e| Error::config(format!("noise_sigma: {e}")))?;
        for v in image.iter_mut() {
            *v += noise.sample(&mut rng);
        }
    }
    for v in image.iter_mut() {
        *v = v.round();
    }

    let image = Volume3D::new(grid, image)?;
    let label = LabelVolume::new(grid, label)?;
    let true_box = BoundingBox3D::enclosing(&label)
        .ok_or_else(|| Error::config("phantom geometry produced an empty label"))?;
    let mut slice_labels = [0, 1, 2].map(|a| vec![0u8; cfg.dims[a]]);
    for p in label.foreground() {
        for a in 0..3 {
            slice_labels[a][p[a]] = 1;
        }
    }
    Ok(PhantomSample {
        seed,
        image,
        label,
        true_box,
        slice_labels,
        epicardium,
        endocardium,
        lungs,
        distractors,
    })
}

/// One manifest row; paths are resolved against the manifest directory.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ManifestEntry {
    pub seed: u64,
    pub image: PathBuf,
    pub label: PathBuf,
    pub true_box: BoundingBox3D,
}

pub const MANIFEST_NAME: &str = "manifest.txt";

pub fn image_file_name(seed: u64) -> String {
    format!("phantom_{seed:06}_image.mhd")
}

pub fn label_file_name(seed: u64) -> String {
    format!("phantom_{seed:06}_label.mhd")
}

/// Generates seeds `seed..seed + n` into `dir` and writes the manifest.
/// Returns the manifest path.
pub fn generate_dataset(cfg: &PhantomConfig, n: usize, seed: u64, dir: impl AsRef<Path>) -> Result<PathBuf> {
    cfg.validate()?;
    if n == 0 {
        return Err(Error::config("n: need at least one phantom"));
    }
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::file(dir, e))?;
    let mut manifest = String::new();
    for s in seed..seed + n as u64 {
        let sample = generate(cfg, s)?;
        let (img, lab) = (image_file_name(s), label_file_name(s));
        write_volume(&sample.image, dir.join(&img), ElementType::Short)?;
        write_label(&sample.label, dir.join(&lab))?;
        let b = sample.true_box.as_array();
        writeln!(
            manifest,
            "{s} {img} {lab} {} {} {} {} {} {}",
            b[0], b[1], b[2], b[3], b[4], b[5]
        )
        .expect("writing to a String");
    }
    let path = dir.join(MANIFEST_NAME);
    fs::write(&path, manifest).map_err(|e| Error::file(&path, e))?;
    Ok(path)
}

pub fn read_manifest(path: impl AsRef<Path>) -> Result<Vec<ManifestEntry>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::file(path, e))?;
    let base = path.parent().unwrap_or(Path::new("."));
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let bad = |what: &str| Error::format(format!("{}:{}: {what}", path.display(), n + 1));
        let f: Vec<&str> = line.split_whitespace().collect();
        if f.len() != 9 {
            return Err(bad("expected 9 fields"));
        }
        let seed = f[0].parse().map_err(|_| bad("bad seed"))?;
        let mut b = [0usize; 6];
        for (k, v) in f[3..].iter().enumerate() {
            b[k] = v.parse().map_err(|_| bad("bad box coordinate"))?;
        }
        let (lo, hi) = ([b[0], b[1], b[2]], [b[3], b[4], b[5]]);
        if (0..3).any(|a| lo[a] > hi[a]) {
            return Err(bad("box lo exceeds hi"));
        }
        out.push(ManifestEntry {
            seed,
            image: base.join(f[1]),
            label: base.join(f[2]),
            true_box: BoundingBox3D { lo, hi },
        });
    }
    Ok(out)
}

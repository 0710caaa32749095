use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::spec::{LayerPlan, NetworkSpec};
use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"CSEGNET\0";
pub const FORMAT_VERSION: u32 = 1;

/// Kernel and bias of one parametric layer. Conv kernels are laid out
/// `[out, in, k, k]`, dense kernels `[out, in]`.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerParams {
    pub shape: Vec<usize>,
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

impl LayerParams {
    fn zeros(plan: &LayerPlan) -> Option<Self> {
        let shape = plan.weight_shape()?;
        let n: usize = shape.iter().product();
        Some(LayerParams {
            bias: vec![0.0; shape[0]],
            weight: vec![0.0; n],
            shape,
        })
    }

    pub fn len(&self) -> usize {
        self.weight.len() + self.bias.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Learned parameters of a [`NetworkSpec`], one entry per Conv/Dense layer.
#[derive(Clone, Debug, PartialEq)]
pub struct NetworkWeights {
    pub format_version: u32,
    pub spec_hash: u64,
    /// Seed used for initialization.
    pub seed: u64,
    pub layers: Vec<LayerParams>,
}

/// Gradients share the weight layout.
pub type Gradients = Vec<LayerParams>;

impl NetworkWeights {
    pub fn zeros(spec: &NetworkSpec) -> Result<Self> {
        let layers = spec.plan()?.iter().filter_map(LayerParams::zeros).collect();
        Ok(NetworkWeights {
            format_version: FORMAT_VERSION,
            spec_hash: spec.hash(),
            seed: 0,
            layers,
        })
    }

    /// He-normal kernels, zero biases.
    pub fn he_init(spec: &NetworkSpec, seed: u64) -> Result<Self> {
        let plan = spec.plan()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut layers = Vec::new();
        for p in &plan {
            if let Some(mut params) = LayerParams::zeros(p) {
                let std = (2.0 / p.fan_in() as f64).sqrt();
                let normal = Normal::new(0.0, std).expect("std is positive");
                for w in &mut params.weight {
                    *w = normal.sample(&mut rng);
                }
                layers.push(params);
            }
        }
        Ok(NetworkWeights {
            format_version: FORMAT_VERSION,
            spec_hash: spec.hash(),
            seed,
            layers,
        })
    }

    /// Checks layer count and shapes against `spec`.
    pub fn check_compatible(&self, spec: &NetworkSpec) -> Result<()> {
        if self.spec_hash != spec.hash() {
            return Err(Error::Incompatible(format!(
                "weights were trained for spec {:016x}, expected {:016x}",
                self.spec_hash,
                spec.hash()
            )));
        }
        let expected: Vec<Vec<usize>> = spec.plan()?.iter().filter_map(|p| p.weight_shape()).collect();
        if expected.len() != self.layers.len() {
            return Err(Error::Incompatible(format!(
                "spec has {} parametric layers, weights have {}",
                expected.len(),
                self.layers.len()
            )));
        }
        for (i, (shape, params)) in expected.iter().zip(&self.layers).enumerate() {
            let n: usize = shape.iter().product();
            if *shape != params.shape || params.weight.len() != n || params.bias.len() != shape[0] {
                return Err(Error::Incompatible(format!(
                    "parametric layer {i}: expected shape {shape:?}, found {:?}",
                    params.shape
                )));
            }
        }
        Ok(())
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(LayerParams::len).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.layers
            .iter()
            .all(|l| l.weight.iter().chain(&l.bias).all(|v| v.is_finite()))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(32 + 8 * self.param_count());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&self.format_version.to_le_bytes());
        out.extend_from_slice(&self.spec_hash.to_le_bytes());
        out.extend_from_slice(&self.seed.to_le_bytes());
        out.extend_from_slice(&(self.layers.len() as u32).to_le_bytes());
        for layer in &self.layers {
            out.extend_from_slice(&(layer.shape.len() as u32).to_le_bytes());
            for &d in &layer.shape {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for w in &layer.weight {
                out.extend_from_slice(&w.to_le_bytes());
            }
            out.extend_from_slice(&(layer.bias.len() as u32).to_le_bytes());
            for b in &layer.bias {
                out.extend_from_slice(&b.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(8)? != MAGIC {
            return Err(Error::format("not a weight file (bad magic)"));
        }
        let format_version = r.u32()?;
        if format_version != FORMAT_VERSION {
            return Err(Error::format(format!("unsupported weight format version {format_version}")));
        }
        let spec_hash = r.u64()?;
        let seed = r.u64()?;
        let count = r.u32()? as usize;
        let mut layers = Vec::with_capacity(count.min(64));
        for _ in 0..count {
            let ndim = r.u32()? as usize;
            if ndim == 0 || ndim > 8 {
                return Err(Error::format(format!("implausible kernel rank {ndim}")));
            }
            let shape = (0..ndim).map(|_| r.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let n = shape
                .iter()
                .try_fold(1usize, |acc, &d| acc.checked_mul(d))
                .ok_or_else(|| Error::format("kernel shape overflows"))?;
            let weight = r.f64s(n)?;
            let nb = r.u32()? as usize;
            let bias = r.f64s(nb)?;
            layers.push(LayerParams { shape, weight, bias });
        }
        if r.pos != bytes.len() {
            return Err(Error::format(format!(
                "{} trailing bytes after the last layer",
                bytes.len() - r.pos
            )));
        }
        let weights = NetworkWeights {
            format_version,
            spec_hash,
            seed,
            layers,
        };
        if !weights.is_finite() {
            return Err(Error::format("weight file contains non-finite values"));
        }
        Ok(weights)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_bytes()).map_err(|e| Error::file(path, e))
    }

    /// Loads weights and verifies they belong to `spec`.
    pub fn load(path: impl AsRef<Path>, spec: &NetworkSpec) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::file(path, e))?;
        let weights = Self::from_bytes(&bytes)?;
        weights.check_compatible(spec)?;
        Ok(weights)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::format("weight file is truncated"))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        let len = n.checked_mul(8).ok_or_else(|| Error::format("array length overflows"))?;
        Ok(self
            .take(len)?
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }
}

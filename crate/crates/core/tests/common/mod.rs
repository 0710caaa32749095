//! Independent reference implementations and shared experiment driver.
#![allow(dead_code)]

use std::collections::BTreeMap;
use std::ops::Range;
use std::time::{Duration, Instant};

use cardioseg::localizer::{BoundingBox3D, FusionParams, Localizer};
use cardioseg::metrics::{evaluate_scan, EvaluationReport};
use cardioseg::neuralnet::{loss_and_gradients, Layer, Mode, Model, NetworkSpec, NetworkWeights, Precision, TrainConfig};
use cardioseg::phantom::{generate, PhantomConfig};
use cardioseg::segmenter::{
    gaussian_kernel, sigma_voxels, ClassifyOptions, Connectivity, Pipeline, PostprocessParams, ProbabilityVolume,
};
use cardioseg::training::{train_localizer, train_segmenter, Scan};
use cardioseg::volgrid::{Axis, LabelVolume, NormalizationWindow};
use cardioseg::Error;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

// ---------------------------------------------------------------- gradients

/// `|a - n| / max(|a|, |n|, floor)`.
pub fn rel_err(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

pub const FD_STEP: f64 = 1e-5;
pub const FD_FLOOR: f64 = 1e-6;

/// Central-difference check of up to `per_tensor` entries of every weight and
/// bias tensor. Returns the worst relative error and the entry count.
pub fn gradient_check(
    spec: &NetworkSpec,
    weights: &NetworkWeights,
    input: &[f64],
    labels: &[usize],
    per_tensor: usize,
    seed: u64,
) -> (f64, usize) {
    let has_dropout = spec.layers.iter().any(|l| matches!(l, Layer::Dropout { .. }));
    let loss = |w: &NetworkWeights| -> (f64, Vec<cardioseg::neuralnet::LayerParams>) {
        if has_dropout {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            loss_and_gradients(spec, w, input, labels, Mode::Train, Some(&mut rng)).unwrap()
        } else {
            loss_and_gradients(spec, w, input, labels, Mode::Infer, None).unwrap()
        }
    };
    let (_, grads) = loss(weights);
    let mut pick = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let mut worst: f64 = 0.0;
    let mut checked = 0;
    for (li, g) in grads.iter().enumerate() {
        for is_bias in [false, true] {
            let n = if is_bias { g.bias.len() } else { g.weight.len() };
            let idx: Vec<usize> = if n <= per_tensor {
                (0..n).collect()
            } else {
                (0..per_tensor).map(|_| pick.random_range(0..n)).collect()
            };
            for i in idx {
                let mut w = weights.clone();
                let orig = *entry(&mut w, li, is_bias, i);
                *entry(&mut w, li, is_bias, i) = orig + FD_STEP;
                let up = loss(&w).0;
                *entry(&mut w, li, is_bias, i) = orig - FD_STEP;
                let down = loss(&w).0;
                let numeric = (up - down) / (2.0 * FD_STEP);
                let analytic = if is_bias { g.bias[i] } else { g.weight[i] };
                worst = worst.max(rel_err(analytic, numeric, FD_FLOOR));
                checked += 1;
            }
        }
    }
    (worst, checked)
}

fn entry(w: &mut NetworkWeights, layer: usize, is_bias: bool, i: usize) -> &mut f64 {
    let l = &mut w.layers[layer];
    if is_bias {
        &mut l.bias[i]
    } else {
        &mut l.weight[i]
    }
}

pub fn random_input(len: usize, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..len).map(|_| rng.random_range(-1.0..1.0)).collect()
}

/// Small networks exercising each layer type, each closed by Dense(2)+Softmax.
pub fn single_layer_specs() -> Vec<(&'static str, NetworkSpec)> {
    let s = |input, layers| NetworkSpec::new(input, layers).unwrap();
    vec![
        ("conv", s((2, 7, 7), vec![Layer::conv(3, 3, 0), Layer::dense(2), Layer::Softmax])),
        ("conv_pad", s((2, 6, 6), vec![Layer::conv(2, 3, 1), Layer::dense(2), Layer::Softmax])),
        (
            "conv_stride",
            s(
                (1, 9, 9),
                vec![
                    Layer::Conv {
                        out_channels: 2,
                        kernel: 3,
                        stride: 2,
                        pad: 1,
                    },
                    Layer::dense(2),
                    Layer::Softmax,
                ],
            ),
        ),
        ("maxpool", s((2, 8, 8), vec![Layer::pool2(), Layer::dense(2), Layer::Softmax])),
        ("relu", s((1, 5, 5), vec![Layer::ReLU, Layer::dense(2), Layer::Softmax])),
        ("dense", s((3, 4, 4), vec![Layer::dense(5), Layer::dense(2), Layer::Softmax])),
        (
            "dropout",
            s((1, 4, 4), vec![Layer::dense(6), Layer::Dropout { rate: 0.5 }, Layer::dense(2), Layer::Softmax]),
        ),
        ("softmax", s((1, 3, 3), vec![Layer::dense(2), Layer::Softmax])),
    ]
}

/// He-initialized weights with small random biases so no bias gradient is trivially zero.
pub fn test_weights(spec: &NetworkSpec, seed: u64) -> NetworkWeights {
    let mut w = NetworkWeights::he_init(spec, seed).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed + 99);
    for l in &mut w.layers {
        for b in &mut l.bias {
            *b = rng.random_range(-0.1..0.1);
        }
    }
    w
}

// ------------------------------------------------------------------ filters

/// Direct 3D convolution with the product of the truncated 1D kernels,
/// normalized over in-bounds taps.
pub fn naive_gaussian(pv: &ProbabilityVolume, sigma_mm: f64) -> Vec<f64> {
    let d = pv.dims();
    let sig = sigma_voxels(sigma_mm, pv.spacing);
    let k: Vec<Vec<f64>> = sig.iter().map(|&s| gaussian_kernel(s)).collect();
    let r: Vec<isize> = k.iter().map(|k| (k.len() / 2) as isize).collect();
    let mut out = vec![0.0; pv.probs.len()];
    for z in 0..d[2] as isize {
        for y in 0..d[1] as isize {
            for x in 0..d[0] as isize {
                let (mut acc, mut wsum) = (0.0, 0.0);
                for dz in -r[2]..=r[2] {
                    for dy in -r[1]..=r[1] {
                        for dx in -r[0]..=r[0] {
                            let (qx, qy, qz) = (x + dx, y + dy, z + dz);
                            if qx < 0 || qy < 0 || qz < 0 || qx >= d[0] as isize || qy >= d[1] as isize || qz >= d[2] as isize {
                                continue;
                            }
                            let w = k[0][(dx + r[0]) as usize] * k[1][(dy + r[1]) as usize] * k[2][(dz + r[2]) as usize];
                            acc += w * pv.get([qx as usize, qy as usize, qz as usize]);
                            wsum += w;
                        }
                    }
                }
                out[x as usize + d[0] * (y as usize + d[1] * z as usize)] = acc / wsum;
            }
        }
    }
    out
}

/// Largest component by depth-first flood fill; ties go to the component
/// holding the smallest linear index.
pub fn flood_fill_largest(fg: &[bool], dims: [usize; 3], conn: Connectivity) -> Vec<bool> {
    let n = fg.len();
    let mut comp = vec![usize::MAX; n];
    let mut sizes: Vec<(usize, usize)> = Vec::new(); // (size, first index)
    for s in 0..n {
        if !fg[s] || comp[s] != usize::MAX {
            continue;
        }
        let id = sizes.len();
        let mut stack = vec![s];
        comp[s] = id;
        let mut size = 0;
        let mut first = s;
        while let Some(v) = stack.pop() {
            size += 1;
            first = first.min(v);
            let (x, y, z) = (v % dims[0], (v / dims[0]) % dims[1], v / (dims[0] * dims[1]));
            for dz in -1i64..=1 {
                for dy in -1i64..=1 {
                    for dx in -1i64..=1 {
                        let m = dx.abs() + dy.abs() + dz.abs();
                        if m == 0 || (conn == Connectivity::Six && m != 1) {
                            continue;
                        }
                        let (qx, qy, qz) = (x as i64 + dx, y as i64 + dy, z as i64 + dz);
                        if qx < 0 || qy < 0 || qz < 0 || qx >= dims[0] as i64 || qy >= dims[1] as i64 || qz >= dims[2] as i64 {
                            continue;
                        }
                        let u = qx as usize + dims[0] * (qy as usize + dims[1] * qz as usize);
                        if fg[u] && comp[u] == usize::MAX {
                            comp[u] = id;
                            stack.push(u);
                        }
                    }
                }
            }
        }
        sizes.push((size, first));
    }
    let best = sizes
        .iter()
        .enumerate()
        .max_by(|a, b| a.1 .0.cmp(&b.1 .0).then(b.1 .1.cmp(&a.1 .1)))
        .map(|(i, _)| i);
    (0..n).map(|i| Some(comp[i]) == best && fg[i]).collect()
}

/// Surface by explicit neighbour test, then exhaustive nearest-surface search.
pub fn brute_force_mad(a: &LabelVolume, b: &LabelVolume, spacing: [f64; 3]) -> Option<f64> {
    let surf = |m: &LabelVolume| -> Vec<[usize; 3]> {
        let d = m.dims();
        let mut out = Vec::new();
        for z in 0..d[2] {
            for y in 0..d[1] {
                for x in 0..d[0] {
                    if !m.get(x, y, z) {
                        continue;
                    }
                    let p = [x as i64, y as i64, z as i64];
                    let exposed = [[1, 0, 0], [-1, 0, 0], [0, 1, 0], [0, -1, 0], [0, 0, 1], [0, 0, -1]]
                        .iter()
                        .any(|o: &[i64; 3]| {
                            let q = [p[0] + o[0], p[1] + o[1], p[2] + o[2]];
                            (0..3).any(|a| q[a] < 0 || q[a] >= d[a] as i64)
                                || !m.get(q[0] as usize, q[1] as usize, q[2] as usize)
                        });
                    if exposed {
                        out.push([x, y, z]);
                    }
                }
            }
        }
        out
    };
    let (sa, sb) = (surf(a), surf(b));
    if sa.is_empty() || sb.is_empty() {
        return None;
    }
    let dist = |p: &[usize; 3], q: &[usize; 3]| {
        (0..3)
            .map(|k| ((p[k] as f64 - q[k] as f64) * spacing[k]).powi(2))
            .sum::<f64>()
            .sqrt()
    };
    let nearest = |p: &[usize; 3], set: &[[usize; 3]]| set.iter().map(|q| dist(p, q)).fold(f64::INFINITY, f64::min);
    let total: f64 = sa.iter().map(|p| nearest(p, &sb)).sum::<f64>() + sb.iter().map(|p| nearest(p, &sa)).sum::<f64>();
    Some(total / (sa.len() + sb.len()) as f64)
}

pub fn random_mask(dims: [usize; 3], density: f64, rng: &mut ChaCha8Rng) -> Vec<bool> {
    (0..dims.iter().product()).map(|_| rng.random_bool(density)).collect()
}

/// A random mask made of a few random boxes, so surfaces are non-trivial.
pub fn random_blobs(dims: [usize; 3], rng: &mut ChaCha8Rng) -> Vec<bool> {
    let mut m = vec![false; dims.iter().product()];
    for _ in 0..rng.random_range(1..4) {
        let lo: [usize; 3] = [0, 1, 2].map(|a| rng.random_range(0..dims[a]));
        let hi: [usize; 3] = [0, 1, 2].map(|a| (lo[a] + rng.random_range(1..8)).min(dims[a]));
        for z in lo[2]..hi[2] {
            for y in lo[1]..hi[1] {
                for x in lo[0]..hi[0] {
                    m[x + dims[0] * (y + dims[1] * z)] = true;
                }
            }
        }
    }
    for v in m.iter_mut() {
        if rng.random_bool(0.03) {
            *v = !*v;
        }
    }
    m
}

// --------------------------------------------------------------- experiment

#[derive(Clone, Debug)]
pub struct ExperimentParams {
    pub phantom: PhantomConfig,
    pub train_seeds: Range<u64>,
    pub test_seeds: Range<u64>,
    pub localizer_epochs: usize,
    pub segmenter_epochs: usize,
    pub patches_per_class: usize,
    pub seed: u64,
    pub segmenter_precision: Precision,
}

impl ExperimentParams {
    /// 20 training and 5 held-out default phantoms, 20k patches per class, 10 epochs.
    pub fn full() -> Self {
        ExperimentParams {
            phantom: PhantomConfig::default(),
            train_seeds: 1000..1020,
            test_seeds: 2000..2005,
            localizer_epochs: 10,
            segmenter_epochs: 10,
            patches_per_class: 20_000,
            seed: 42,
            segmenter_precision: Precision::F32,
        }
    }
}

pub struct ExperimentOutcome {
    /// Serialized weights: axial, coronal, sagittal localizers, segmenter.
    pub weight_bytes: Vec<Vec<u8>>,
    pub localizer_losses: Vec<Vec<f64>>,
    pub segmenter_losses: Vec<f64>,
    pub masks: Vec<LabelVolume>,
    pub boxes: Vec<Option<BoundingBox3D>>,
    /// Fraction of reference voxels inside the fused box, per test scan.
    pub containment: Vec<f64>,
    /// Mean slice probability on slices meeting / missing the label, per axis, pooled over test scans.
    pub slice_separation: BTreeMap<String, (f64, f64)>,
    pub report: EvaluationReport,
    pub report_json: String,
    pub stage_times: Vec<(String, Duration)>,
    pub total_time: Duration,
}

pub fn run_experiment(p: &ExperimentParams, log: bool) -> ExperimentOutcome {
    let start = Instant::now();
    let mut stage_times = Vec::new();
    let mut mark = |name: &str, t: &mut Instant| {
        stage_times.push((name.to_string(), t.elapsed()));
        if log {
            eprintln!("[experiment] {name}: {:.1}s", t.elapsed().as_secs_f64());
        }
        *t = Instant::now();
    };
    let mut t = Instant::now();
    let train: Vec<Scan> = p
        .train_seeds
        .clone()
        .map(|s| Scan::from_phantom(generate(&p.phantom, s).unwrap()))
        .collect();
    let test: Vec<Scan> = p
        .test_seeds
        .clone()
        .map(|s| Scan::from_phantom(generate(&p.phantom, s).unwrap()))
        .collect();
    mark("generate phantoms", &mut t);

    let window = NormalizationWindow::default();
    let loc_cfg = TrainConfig {
        epochs: p.localizer_epochs,
        seed: p.seed,
        ..TrainConfig::default()
    };
    let mut loc_weights = Vec::new();
    let mut localizer_losses = Vec::new();
    for axis in Axis::ALL {
        let out = train_localizer(&train, axis, &window, &loc_cfg, |e, l| {
            if log {
                eprintln!("[experiment] localizer-{axis} epoch {} loss {l:.5}", e + 1)
            }
        })
        .unwrap();
        localizer_losses.push(out.epoch_losses);
        loc_weights.push(out.weights);
    }
    mark("train localizers", &mut t);

    let seg_cfg = TrainConfig {
        epochs: p.segmenter_epochs,
        seed: p.seed,
        precision: p.segmenter_precision,
        ..TrainConfig::default()
    };
    let seg = train_segmenter(&train, &window, p.patches_per_class, &seg_cfg, |e, l| {
        if log {
            eprintln!("[experiment] segmenter epoch {} loss {l:.5}", e + 1)
        }
    })
    .unwrap();
    mark("train segmenter", &mut t);

    let loc_spec = NetworkSpec::localizer_default();
    let seg_spec = NetworkSpec::segmentation_default();
    let pipeline = Pipeline {
        localizer: Localizer::new(&loc_spec, &loc_weights[0], &loc_weights[1], &loc_weights[2]).unwrap(),
        segmenter: Model::<f32>::new(&seg_spec, &seg.weights).unwrap(),
        window,
        fusion: FusionParams::default(),
        post: PostprocessParams::default(),
        classify: ClassifyOptions::default(),
    };
    let mut masks = Vec::new();
    let mut boxes = Vec::new();
    let mut containment = Vec::new();
    let mut scans = Vec::new();
    let mut sep: BTreeMap<String, (f64, usize, f64, usize)> = BTreeMap::new();
    for scan in &test {
        match pipeline.segment(&scan.image) {
            Ok(res) => {
                let inside = scan.label.foreground().filter(|&v| res.bbox.contains(v)).count();
                containment.push(inside as f64 / scan.label.count() as f64);
                for prof in &res.profiles {
                    let presence = scan.slice_presence(prof.axis);
                    let e = sep.entry(prof.axis.to_string()).or_default();
                    for (pr, &on) in prof.probs.iter().zip(&presence) {
                        if on == 1 {
                            e.0 += pr;
                            e.1 += 1;
                        } else {
                            e.2 += pr;
                            e.3 += 1;
                        }
                    }
                }
                scans.push(evaluate_scan(&scan.id, &res.mask, &scan.label, &res.bbox).unwrap());
                boxes.push(Some(res.bbox));
                masks.push(res.mask);
                if log {
                    let s = scans.last().unwrap();
                    eprintln!(
                        "[experiment] {} box {:?}..{:?} dice {:.4} mad {:?} sens {:?} spec {:?}",
                        s.id, res.bbox.lo, res.bbox.hi, s.dice, s.mad_mm, s.sensitivity, s.specificity
                    );
                }
            }
            Err(Error::LocalizationFailure { axis }) => {
                if log {
                    eprintln!("[experiment] {} localization failed on {axis}", scan.id);
                }
                let empty = LabelVolume::zeros(*scan.label.grid());
                let full = BoundingBox3D::full(scan.label.dims());
                containment.push(0.0);
                scans.push(evaluate_scan(&scan.id, &empty, &scan.label, &full).unwrap());
                boxes.push(None);
                masks.push(empty);
            }
            Err(e) => panic!("segmentation failed: {e}"),
        }
    }
    mark("segment test scans", &mut t);
    let report = EvaluationReport::from_scans(scans);
    let report_json = report.to_json();
    let weight_bytes = loc_weights
        .iter()
        .chain(std::iter::once(&seg.weights))
        .map(NetworkWeights::to_bytes)
        .collect();
    ExperimentOutcome {
        weight_bytes,
        localizer_losses,
        segmenter_losses: seg.epoch_losses,
        masks,
        boxes,
        containment,
        slice_separation: sep
            .into_iter()
            .map(|(k, v)| (k, (v.0 / v.1.max(1) as f64, v.2 / v.3.max(1) as f64)))
            .collect(),
        report,
        report_json,
        stage_times,
        total_time: start.elapsed(),
    }
}

use rand::{Rng, RngCore};

use super::spec::{shape_len, Layer, LayerPlan, NetworkSpec};
use super::weights::{Gradients, LayerParams, NetworkWeights};
use super::{gemm, MatRef, Scalar};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    /// Dropout draws masks from the supplied RNG.
    Train,
    /// Dropout is the identity.
    Infer,
}

#[derive(Clone, Debug)]
pub(crate) struct ParamSet<T> {
    pub weight: Vec<T>,
    pub bias: Vec<T>,
}

impl<T: Scalar> ParamSet<T> {
    pub(crate) fn zeros_like(&self) -> Self {
        ParamSet {
            weight: vec![T::zero(); self.weight.len()],
            bias: vec![T::zero(); self.bias.len()],
        }
    }
}

/// A network spec bound to parameters in element type `T`.
///
/// The spatial prefix of the stack (everything before the first Dense layer)
/// runs one sample at a time so its activations stay cache resident; the
/// fully connected head runs on the whole batch.
#[derive(Clone, Debug)]
pub struct Model<T> {
    spec: NetworkSpec,
    plan: Vec<LayerPlan>,
    /// For each plan entry, its slot in `params` if the layer is parametric.
    slots: Vec<Option<usize>>,
    /// Index of the first layer of the fully connected head.
    split: usize,
    pub(crate) params: Vec<ParamSet<T>>,
}

/// What a spatial layer keeps from the forward pass for backpropagation.
enum Saved<T> {
    /// Conv: the layer input.
    Input(Vec<T>),
    /// MaxPool: flat input index of each output's maximum.
    Argmax(Vec<u32>),
    /// ReLU: the layer output.
    Output(Vec<T>),
}

pub(crate) struct Trace<T> {
    batch: usize,
    /// `spatial[s][i]` holds layer `i`'s saved state for sample `s`.
    spatial: Vec<Vec<Saved<T>>>,
    /// `head[j]` is the batched input of layer `split + j`; the last entry is the softmax output.
    head: Vec<Vec<T>>,
    masks: Vec<Option<Vec<T>>>,
}

impl<T: Scalar> Model<T> {
    pub fn new(spec: &NetworkSpec, weights: &NetworkWeights) -> Result<Self> {
        weights.check_compatible(spec)?;
        let plan = spec.plan()?;
        let mut slots = Vec::with_capacity(plan.len());
        let mut next = 0;
        for p in &plan {
            if p.layer.has_params() {
                slots.push(Some(next));
                next += 1;
            } else {
                slots.push(None);
            }
        }
        let split = plan
            .iter()
            .position(|p| matches!(p.layer, Layer::Dense { .. } | Layer::Softmax))
            .expect("a validated stack ends in Softmax");
        let params = weights
            .layers
            .iter()
            .map(|l| ParamSet {
                weight: l.weight.iter().map(|&v| T::from_f64(v)).collect(),
                bias: l.bias.iter().map(|&v| T::from_f64(v)).collect(),
            })
            .collect();
        Ok(Model {
            spec: spec.clone(),
            plan,
            slots,
            split,
            params,
        })
    }

    pub fn spec(&self) -> &NetworkSpec {
        &self.spec
    }

    pub fn input_len(&self) -> usize {
        self.spec.input_len()
    }

    /// Copies the parameters back into double precision.
    pub fn weights(&self, seed: u64) -> NetworkWeights {
        let shapes = self.plan.iter().filter_map(|p| p.weight_shape());
        let layers = shapes
            .zip(&self.params)
            .map(|(shape, p)| LayerParams {
                shape,
                weight: p.weight.iter().map(|v| v.as_f64()).collect(),
                bias: p.bias.iter().map(|v| v.as_f64()).collect(),
            })
            .collect();
        NetworkWeights {
            format_version: super::FORMAT_VERSION,
            spec_hash: self.spec.hash(),
            seed,
            layers,
        }
    }

    fn batch_size(&self, input: &[T]) -> Result<usize> {
        let len = self.input_len();
        if input.is_empty() || input.len() % len != 0 {
            return Err(Error::Shape(format!(
                "batch of {} values is not a whole number of {:?} samples",
                input.len(),
                self.spec.input
            )));
        }
        Ok(input.len() / len)
    }

    fn feature_len(&self) -> usize {
        shape_len(self.plan[self.split].input)
    }

    fn params_of(&self, i: usize) -> &ParamSet<T> {
        &self.params[self.slots[i].expect("layer has parameters")]
    }

    /// Class posteriors for every sample in `input`.
    pub fn forward(&self, input: &[T], mode: Mode, rng: Option<&mut dyn RngCore>) -> Result<Vec<[f64; 2]>> {
        let batch = self.batch_size(input)?;
        let features = self.spatial_batch(input, batch, None)?;
        let mut rng = rng;
        let mut x = features;
        for i in self.split..self.plan.len() {
            let (y, _) = self.head_layer(i, &x, batch, mode, &mut rng)?;
            x = y;
        }
        Ok(x.chunks_exact(2).map(|r| [r[0].as_f64(), r[1].as_f64()]).collect())
    }

    pub(crate) fn forward_trace(
        &self,
        input: &[T],
        mode: Mode,
        rng: Option<&mut dyn RngCore>,
    ) -> Result<Trace<T>> {
        let batch = self.batch_size(input)?;
        let mut spatial = Vec::with_capacity(batch);
        let features = self.spatial_batch(input, batch, Some(&mut spatial))?;
        let mut rng = rng;
        let mut head = vec![features];
        let mut masks = Vec::new();
        for i in self.split..self.plan.len() {
            let (y, mask) = self.head_layer(i, head.last().expect("non-empty"), batch, mode, &mut rng)?;
            head.push(y);
            masks.push(mask);
        }
        Ok(Trace {
            batch,
            spatial,
            head,
            masks,
        })
    }

    /// Runs the spatial prefix on each sample and stacks the flattened results.
    fn spatial_batch(
        &self,
        input: &[T],
        batch: usize,
        mut saved: Option<&mut Vec<Vec<Saved<T>>>>,
    ) -> Result<Vec<T>> {
        let in_len = self.input_len();
        let feat_len = self.feature_len();
        let mut features = Vec::with_capacity(batch * feat_len);
        let mut col = Vec::new();
        for s in 0..batch {
            let x = &input[s * in_len..(s + 1) * in_len];
            let mut keep = saved.as_ref().map(|_| Vec::with_capacity(self.split));
            let y = self.spatial_forward(x, &mut col, keep.as_mut())?;
            features.extend_from_slice(&y);
            if let (Some(all), Some(k)) = (saved.as_deref_mut(), keep) {
                all.push(k);
            }
        }
        Ok(features)
    }

    fn spatial_forward(&self, x: &[T], col: &mut Vec<T>, mut saved: Option<&mut Vec<Saved<T>>>) -> Result<Vec<T>> {
        let mut cur = x.to_vec();
        for i in 0..self.split {
            let p = &self.plan[i];
            cur = match p.layer {
                Layer::Conv { .. } => {
                    let y = conv_forward(p, self.params_of(i), &cur, col);
                    if let Some(s) = saved.as_deref_mut() {
                        s.push(Saved::Input(cur));
                    }
                    y
                }
                Layer::MaxPool { window, stride } => {
                    let (y, idx) = pool_forward(p, window, stride, &cur, saved.is_some());
                    if let Some(s) = saved.as_deref_mut() {
                        s.push(Saved::Argmax(idx));
                    }
                    y
                }
                Layer::ReLU => {
                    for v in &mut cur {
                        *v = v.max(T::zero());
                    }
                    if let Some(s) = saved.as_deref_mut() {
                        s.push(Saved::Output(cur.clone()));
                    }
                    cur
                }
                _ => unreachable!("only Conv, MaxPool and ReLU precede the first Dense layer"),
            };
            // ReLU and max-pooling keep finite inputs finite.
            if matches!(p.layer, Layer::Conv { .. }) && !T::all_finite(&cur) {
                return Err(Error::Numeric { layer: i });
            }
        }
        Ok(cur)
    }

    /// Forward through one head layer on the whole batch. Returns the dropout mask if one was drawn.
    fn head_layer(
        &self,
        i: usize,
        x: &[T],
        batch: usize,
        mode: Mode,
        rng: &mut Option<&mut dyn RngCore>,
    ) -> Result<(Vec<T>, Option<Vec<T>>)> {
        let p = &self.plan[i];
        let out = match p.layer {
            Layer::Dense { out_units } => {
                let ps = self.params_of(i);
                let n_in = shape_len(p.input);
                let mut y = Vec::with_capacity(batch * out_units);
                for _ in 0..batch {
                    y.extend_from_slice(&ps.bias);
                }
                gemm(
                    batch,
                    n_in,
                    out_units,
                    MatRef::row_major(x, n_in),
                    MatRef::transposed(&ps.weight, n_in),
                    T::one(),
                    &mut y,
                );
                (y, None)
            }
            Layer::ReLU => (x.iter().map(|&v| v.max(T::zero())).collect(), None),
            Layer::Dropout { rate } => match mode {
                Mode::Infer => (x.to_vec(), None),
                Mode::Train if rate == 0.0 => (x.to_vec(), None),
                Mode::Train => {
                    let rng = rng
                        .as_mut()
                        .ok_or_else(|| Error::config(format!("layer {i}: train-mode dropout needs an RNG")))?;
                    let keep = T::from_f64(1.0 / (1.0 - rate));
                    let mask: Vec<T> = (0..x.len())
                        .map(|_| if rng.random::<f64>() < rate { T::zero() } else { keep })
                        .collect();
                    let y = x.iter().zip(&mask).map(|(&v, &m)| v * m).collect();
                    (y, Some(mask))
                }
            },
            Layer::Softmax => {
                let mut y = Vec::with_capacity(x.len());
                for row in x.chunks_exact(2) {
                    let m = row[0].max(row[1]);
                    let e0 = (row[0] - m).exp();
                    let e1 = (row[1] - m).exp();
                    let s = e0 + e1;
                    y.push(e0 / s);
                    y.push(e1 / s);
                }
                (y, None)
            }
            Layer::Conv { .. } | Layer::MaxPool { .. } => unreachable!("spatial layers never follow a Dense layer"),
        };
        if !T::all_finite(&out.0) {
            return Err(Error::Numeric { layer: i });
        }
        Ok(out)
    }

    /// Mean cross-entropy of a traced batch and the gradients of every parameter.
    pub(crate) fn backward(&self, trace: &Trace<T>, labels: &[usize]) -> Result<(f64, Vec<ParamSet<T>>)> {
        let batch = trace.batch;
        if labels.len() != batch {
            return Err(Error::Shape(format!("{} labels for a batch of {batch}", labels.len())));
        }
        if let Some(bad) = labels.iter().find(|&&l| l > 1) {
            return Err(Error::Shape(format!("class label {bad} is not 0 or 1")));
        }
        let probs = trace.head.last().expect("trace has outputs");
        let mut loss = 0.0;
        let inv_b = T::from_f64(1.0 / batch as f64);
        // Softmax and cross-entropy together: d logits = (p - onehot) / B.
        let mut grad: Vec<T> = Vec::with_capacity(2 * batch);
        for (row, &label) in probs.chunks_exact(2).zip(labels) {
            loss -= row[label].as_f64().max(f64::MIN_POSITIVE).ln();
            for (c, &p) in row.iter().enumerate() {
                let y = if c == label { T::one() } else { T::zero() };
                grad.push((p - y) * inv_b);
            }
        }
        loss /= batch as f64;

        let mut grads: Vec<ParamSet<T>> = self.params.iter().map(ParamSet::zeros_like).collect();

        let last = self.plan.len() - 1;
        for i in (self.split..last).rev() {
            let p = &self.plan[i];
            let j = i - self.split;
            let x = &trace.head[j];
            let y = &trace.head[j + 1];
            grad = match p.layer {
                Layer::Dense { out_units } => {
                    let slot = self.slots[i].expect("dense has params");
                    let n_in = shape_len(p.input);
                    let g = &mut grads[slot];
                    gemm(
                        out_units,
                        batch,
                        n_in,
                        MatRef::transposed(&grad, out_units),
                        MatRef::row_major(x, n_in),
                        T::one(),
                        &mut g.weight,
                    );
                    for row in grad.chunks_exact(out_units) {
                        for (b, &d) in g.bias.iter_mut().zip(row) {
                            *b += d;
                        }
                    }
                    if i > 0 {
                        let mut dx = vec![T::zero(); batch * n_in];
                        gemm(
                            batch,
                            out_units,
                            n_in,
                            MatRef::row_major(&grad, out_units),
                            MatRef::row_major(&self.params[slot].weight, n_in),
                            T::zero(),
                            &mut dx,
                        );
                        dx
                    } else {
                        Vec::new()
                    }
                }
                Layer::ReLU => relu_backward(grad, y),
                Layer::Dropout { .. } => match &trace.masks[j] {
                    Some(mask) => grad.iter().zip(mask).map(|(&g, &m)| g * m).collect(),
                    None => grad,
                },
                _ => unreachable!("head holds Dense, ReLU and Dropout layers"),
            };
        }

        if self.split > 0 {
            let feat_len = self.feature_len();
            let mut col = Vec::new();
            let mut dcol = Vec::new();
            for (s, saved) in trace.spatial.iter().enumerate() {
                let mut g = grad[s * feat_len..(s + 1) * feat_len].to_vec();
                for i in (0..self.split).rev() {
                    let p = &self.plan[i];
                    g = match (&p.layer, &saved[i]) {
                        (Layer::Conv { .. }, Saved::Input(x)) => {
                            let slot = self.slots[i].expect("conv has params");
                            conv_backward(p, &self.params[slot], x, &g, &mut col, &mut dcol, &mut grads[slot], i > 0)
                        }
                        (Layer::MaxPool { .. }, Saved::Argmax(idx)) => {
                            let mut dx = vec![T::zero(); shape_len(p.input)];
                            for (&k, &v) in idx.iter().zip(&g) {
                                dx[k as usize] += v;
                            }
                            dx
                        }
                        (Layer::ReLU, Saved::Output(y)) => relu_backward(g, y),
                        _ => unreachable!("saved state matches its layer"),
                    };
                }
            }
        }
        Ok((loss, grads))
    }
}

fn relu_backward<T: Scalar>(mut grad: Vec<T>, y: &[T]) -> Vec<T> {
    for (g, &v) in grad.iter_mut().zip(y) {
        *g = if v > T::zero() { *g } else { T::zero() };
    }
    grad
}

struct ConvGeom {
    c_in: usize,
    h: usize,
    w: usize,
    c_out: usize,
    ho: usize,
    wo: usize,
    k: usize,
    stride: usize,
    pad: usize,
}

impl ConvGeom {
    fn of(p: &LayerPlan) -> Self {
        let Layer::Conv {
            out_channels,
            kernel,
            stride,
            pad,
        } = p.layer
        else {
            unreachable!("not a conv layer")
        };
        ConvGeom {
            c_in: p.input.0,
            h: p.input.1,
            w: p.input.2,
            c_out: out_channels,
            ho: p.output.1,
            wo: p.output.2,
            k: kernel,
            stride,
            pad,
        }
    }

    fn rows(&self) -> usize {
        self.c_in * self.k * self.k
    }

    fn positions(&self) -> usize {
        self.ho * self.wo
    }

    /// Source pixel for output coordinate `o` and kernel tap `t` along one axis.
    #[inline]
    fn src(&self, o: usize, t: usize, n: usize) -> Option<usize> {
        let v = (o * self.stride + t) as isize - self.pad as isize;
        (v >= 0 && (v as usize) < n).then_some(v as usize)
    }

    /// Output columns `[lo, hi)` whose kernel tap `t` reads inside a row of width `n`.
    #[inline]
    fn valid_span(&self, t: usize, n: usize, out: usize) -> (usize, usize) {
        debug_assert_eq!(self.stride, 1);
        let lo = self.pad.saturating_sub(t).min(out);
        let hi = (n + self.pad).saturating_sub(t).min(out).max(lo);
        (lo, hi)
    }

    fn im2col<T: Scalar>(&self, x: &[T], col: &mut [T]) {
        let np = self.positions();
        for c in 0..self.c_in {
            let plane = &x[c * self.h * self.w..(c + 1) * self.h * self.w];
            for ki in 0..self.k {
                for kj in 0..self.k {
                    let r = (c * self.k + ki) * self.k + kj;
                    let row = &mut col[r * np..(r + 1) * np];
                    for oy in 0..self.ho {
                        let dst = &mut row[oy * self.wo..(oy + 1) * self.wo];
                        let Some(iy) = self.src(oy, ki, self.h) else {
                            dst.fill(T::zero());
                            continue;
                        };
                        let src_row = &plane[iy * self.w..(iy + 1) * self.w];
                        if self.stride == 1 {
                            let (lo, hi) = self.valid_span(kj, self.w, self.wo);
                            dst[..lo].fill(T::zero());
                            dst[hi..].fill(T::zero());
                            let shift = lo + kj - self.pad;
                            dst[lo..hi].copy_from_slice(&src_row[shift..shift + hi - lo]);
                        } else {
                            for (ox, d) in dst.iter_mut().enumerate() {
                                *d = match self.src(ox, kj, self.w) {
                                    Some(ix) => src_row[ix],
                                    None => T::zero(),
                                };
                            }
                        }
                    }
                }
            }
        }
    }

    fn col2im<T: Scalar>(&self, col: &[T], dx: &mut [T]) {
        let np = self.positions();
        for c in 0..self.c_in {
            let plane = &mut dx[c * self.h * self.w..(c + 1) * self.h * self.w];
            for ki in 0..self.k {
                for kj in 0..self.k {
                    let r = (c * self.k + ki) * self.k + kj;
                    let row = &col[r * np..(r + 1) * np];
                    for oy in 0..self.ho {
                        let Some(iy) = self.src(oy, ki, self.h) else { continue };
                        let src = &row[oy * self.wo..(oy + 1) * self.wo];
                        let dst_row = &mut plane[iy * self.w..(iy + 1) * self.w];
                        if self.stride == 1 {
                            let (lo, hi) = self.valid_span(kj, self.w, self.wo);
                            let shift = lo + kj - self.pad;
                            for (d, &v) in dst_row[shift..shift + hi - lo].iter_mut().zip(&src[lo..hi]) {
                                *d += v;
                            }
                        } else {
                            for (ox, &v) in src.iter().enumerate() {
                                if let Some(ix) = self.src(ox, kj, self.w) {
                                    dst_row[ix] += v;
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

fn conv_forward<T: Scalar>(p: &LayerPlan, ps: &ParamSet<T>, x: &[T], col: &mut Vec<T>) -> Vec<T> {
    let g = ConvGeom::of(p);
    let (kr, np) = (g.rows(), g.positions());
    col.resize(kr * np, T::zero());
    g.im2col(x, col);
    let mut y = Vec::with_capacity(g.c_out * np);
    for &b in &ps.bias {
        y.extend(std::iter::repeat_n(b, np));
    }
    gemm(
        g.c_out,
        kr,
        np,
        MatRef::row_major(&ps.weight, kr),
        MatRef::row_major(col, np),
        T::one(),
        &mut y,
    );
    y
}

#[allow(clippy::too_many_arguments)]
fn conv_backward<T: Scalar>(
    p: &LayerPlan,
    ps: &ParamSet<T>,
    x: &[T],
    dy: &[T],
    col: &mut Vec<T>,
    dcol: &mut Vec<T>,
    grads: &mut ParamSet<T>,
    need_dx: bool,
) -> Vec<T> {
    let g = ConvGeom::of(p);
    let (kr, np) = (g.rows(), g.positions());
    col.resize(kr * np, T::zero());
    g.im2col(x, col);
    gemm(
        g.c_out,
        np,
        kr,
        MatRef::row_major(dy, np),
        MatRef::transposed(col, np),
        T::one(),
        &mut grads.weight,
    );
    for (co, row) in dy.chunks_exact(np).enumerate() {
        let mut acc = T::zero();
        for &v in row {
            acc += v;
        }
        grads.bias[co] += acc;
    }
    if !need_dx {
        return Vec::new();
    }
    dcol.resize(kr * np, T::zero());
    gemm(
        kr,
        g.c_out,
        np,
        MatRef::transposed(&ps.weight, kr),
        MatRef::row_major(dy, np),
        T::zero(),
        dcol,
    );
    let mut dx = vec![T::zero(); shape_len(p.input)];
    g.col2im(dcol, &mut dx);
    dx
}

/// Max-pooling. Ties keep the first maximum in row-major window order. The
/// argmax indices are only collected when `want_idx` is set.
fn pool_forward<T: Scalar>(p: &LayerPlan, window: usize, stride: usize, x: &[T], want_idx: bool) -> (Vec<T>, Vec<u32>) {
    let (c, h, w) = p.input;
    let (_, ho, wo) = p.output;
    let mut y = Vec::with_capacity(c * ho * wo);
    let mut idx = Vec::with_capacity(if want_idx { c * ho * wo } else { 0 });
    if window == 2 && stride == 2 {
        for ch in 0..c {
            let plane = &x[ch * h * w..(ch + 1) * h * w];
            for oy in 0..ho {
                let top = &plane[2 * oy * w..2 * oy * w + 2 * wo];
                let bot = &plane[(2 * oy + 1) * w..(2 * oy + 1) * w + 2 * wo];
                if want_idx {
                    let base = (ch * h * w + 2 * oy * w) as u32;
                    for ox in 0..wo {
                        let q = [top[2 * ox], top[2 * ox + 1], bot[2 * ox], bot[2 * ox + 1]];
                        let mut k = 0;
                        for (j, &v) in q.iter().enumerate().skip(1) {
                            if v > q[k] {
                                k = j;
                            }
                        }
                        y.push(q[k]);
                        idx.push(base + (2 * ox + (k & 1)) as u32 + if k >= 2 { w as u32 } else { 0 });
                    }
                } else {
                    for (t, b) in top.chunks_exact(2).zip(bot.chunks_exact(2)) {
                        y.push(t[0].max(t[1]).max(b[0].max(b[1])));
                    }
                }
            }
        }
        return (y, idx);
    }
    for ch in 0..c {
        for oy in 0..ho {
            for ox in 0..wo {
                let mut best = ch * h * w + oy * stride * w + ox * stride;
                let mut best_v = x[best];
                for dy in 0..window {
                    let base = ch * h * w + (oy * stride + dy) * w + ox * stride;
                    for (j, &v) in x[base..base + window].iter().enumerate() {
                        if v > best_v {
                            best_v = v;
                            best = base + j;
                        }
                    }
                }
                y.push(best_v);
                if want_idx {
                    idx.push(best as u32);
                }
            }
        }
    }
    (y, idx)
}

/// Double-precision forward pass returning `[p(class 0), p(class 1)]` per sample.
pub fn forward(
    spec: &NetworkSpec,
    weights: &NetworkWeights,
    input: &[f64],
    mode: Mode,
    rng: Option<&mut dyn RngCore>,
) -> Result<Vec<[f64; 2]>> {
    Model::<f64>::new(spec, weights)?.forward(input, mode, rng)
}

/// Mean cross-entropy over the batch and its gradient with respect to every
/// weight and bias. In train mode the dropout masks come from `rng`.
pub fn loss_and_gradients(
    spec: &NetworkSpec,
    weights: &NetworkWeights,
    input: &[f64],
    labels: &[usize],
    mode: Mode,
    rng: Option<&mut dyn RngCore>,
) -> Result<(f64, Gradients)> {
    let model = Model::<f64>::new(spec, weights)?;
    let trace = model.forward_trace(input, mode, rng)?;
    let (loss, grads) = model.backward(&trace, labels)?;
    let grads = weights
        .layers
        .iter()
        .zip(grads)
        .map(|(w, g)| LayerParams {
            shape: w.shape.clone(),
            weight: g.weight,
            bias: g.bias,
        })
        .collect();
    Ok((loss, grads))
}

//! The classical target network: a small sequential CNN with a canonical
//! flat parameter layout, forward inference and exact reverse-mode gradients.
//!
//! All parameters live in one flat vector `θ`. Layers own contiguous slices
//! of it in layer order, weight before bias, row-major within a tensor
//! (`[out, in, kh, kw]` for convolutions, `[out, in]` for dense layers).

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::{config_err, invariant_err, QfedError, Result};
use crate::scalar::Real;

/// Number of parameters in [`Architecture::reference`].
pub const REFERENCE_PARAMS: usize = 6690;

/// Activation shape, channel-major. Dense activations are `(n, 1, 1)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub struct Shape {
    pub c: usize,
    pub h: usize,
    pub w: usize,
}

impl Shape {
    pub const fn new(c: usize, h: usize, w: usize) -> Self {
        Self { c, h, w }
    }

    pub const fn flat(n: usize) -> Self {
        Self { c: n, h: 1, w: 1 }
    }

    pub fn len(&self) -> usize {
        self.c * self.h * self.w
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub enum Layer {
    /// Square-kernel convolution, stride 1, no padding, with bias.
    Conv {
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
    },
    Relu,
    /// 2x2 max pooling, stride 2, trailing odd row/column dropped.
    MaxPool2,
    Flatten,
    Dense {
        inputs: usize,
        outputs: usize,
    },
}

impl Layer {
    fn output_shape(&self, s: Shape) -> Result<Shape> {
        match *self {
            Layer::Conv { in_ch, out_ch, kernel } => {
                if s.c != in_ch || s.h < kernel || s.w < kernel || kernel == 0 {
                    return Err(config_err!("conv {in_ch}->{out_ch} k{kernel} cannot take input {s:?}"));
                }
                Ok(Shape::new(out_ch, s.h - kernel + 1, s.w - kernel + 1))
            }
            Layer::Relu => Ok(s),
            Layer::MaxPool2 => {
                if s.h < 2 || s.w < 2 {
                    return Err(config_err!("max-pool needs at least 2x2 input, got {s:?}"));
                }
                Ok(Shape::new(s.c, s.h / 2, s.w / 2))
            }
            Layer::Flatten => Ok(Shape::flat(s.len())),
            Layer::Dense { inputs, outputs } => {
                if s.len() != inputs {
                    return Err(config_err!("dense {inputs}->{outputs} cannot take {} inputs", s.len()));
                }
                Ok(Shape::flat(outputs))
            }
        }
    }

    /// `(weight shape, bias length)` for parameterised layers.
    fn param_shapes(&self) -> Option<(Vec<usize>, usize)> {
        match *self {
            Layer::Conv { in_ch, out_ch, kernel } => Some((vec![out_ch, in_ch, kernel, kernel], out_ch)),
            Layer::Dense { inputs, outputs } => Some((vec![outputs, inputs], outputs)),
            _ => None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub enum TensorRole {
    Weight,
    Bias,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct LayoutEntry {
    pub layer: usize,
    pub role: TensorRole,
    pub shape: Vec<usize>,
    pub offset: usize,
    pub len: usize,
}

/// Where each weight and bias tensor sits inside `θ`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct ThetaLayout {
    pub entries: Vec<LayoutEntry>,
    pub total: usize,
}

impl ThetaLayout {
    pub fn entry(&self, layer: usize, role: TensorRole) -> Option<&LayoutEntry> {
        self.entries.iter().find(|e| e.layer == layer && e.role == role)
    }
}

/// Layer stack plus derived activation shapes and parameter layout.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Architecture {
    input: Shape,
    layers: Vec<Layer>,
    /// `shapes[k]` is the input shape of layer `k`; the last entry is the output.
    shapes: Vec<Shape>,
    layout: ThetaLayout,
    /// Per-layer `(weight offset, bias offset)` into `θ`.
    offsets: Vec<Option<(usize, usize)>>,
}

impl Architecture {
    pub fn new(input: Shape, layers: Vec<Layer>) -> Result<Self> {
        let mut shapes = vec![input];
        let mut entries = Vec::new();
        let mut offsets = Vec::with_capacity(layers.len());
        let mut offset = 0;
        for (k, layer) in layers.iter().enumerate() {
            let out = layer.output_shape(*shapes.last().unwrap())?;
            shapes.push(out);
            match layer.param_shapes() {
                Some((wshape, blen)) => {
                    let wlen: usize = wshape.iter().product();
                    entries.push(LayoutEntry {
                        layer: k,
                        role: TensorRole::Weight,
                        shape: wshape,
                        offset,
                        len: wlen,
                    });
                    entries.push(LayoutEntry {
                        layer: k,
                        role: TensorRole::Bias,
                        shape: vec![blen],
                        offset: offset + wlen,
                        len: blen,
                    });
                    offsets.push(Some((offset, offset + wlen)));
                    offset += wlen + blen;
                }
                None => offsets.push(None),
            }
        }
        let out = *shapes.last().unwrap();
        if out.h != 1 || out.w != 1 || out.c < 2 {
            return Err(config_err!(
                "network must end in a flat layer of >= 2 logits, got {out:?}"
            ));
        }
        Ok(Self {
            input,
            layers,
            shapes,
            layout: ThetaLayout { entries, total: offset },
            offsets,
        })
    }

    /// 28x28 grayscale, 10 classes, exactly 6,690 parameters:
    /// conv(1→10) relu pool conv(10→4) relu pool flatten dense(100→56) relu dense(56→10).
    pub fn reference() -> Self {
        Self::new(
            Shape::new(1, 28, 28),
            vec![
                Layer::Conv {
                    in_ch: 1,
                    out_ch: 10,
                    kernel: 3,
                },
                Layer::Relu,
                Layer::MaxPool2,
                Layer::Conv {
                    in_ch: 10,
                    out_ch: 4,
                    kernel: 3,
                },
                Layer::Relu,
                Layer::MaxPool2,
                Layer::Flatten,
                Layer::Dense {
                    inputs: 100,
                    outputs: 56,
                },
                Layer::Relu,
                Layer::Dense {
                    inputs: 56,
                    outputs: 10,
                },
            ],
        )
        .expect("reference architecture is well formed")
    }

    pub fn input_shape(&self) -> Shape {
        self.input
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    /// Input shape of every layer followed by the output shape.
    pub fn shapes(&self) -> &[Shape] {
        &self.shapes
    }

    pub fn n_classes(&self) -> usize {
        self.shapes.last().unwrap().c
    }

    pub fn n_params(&self) -> usize {
        self.layout.total
    }

    pub fn layout(&self) -> &ThetaLayout {
        &self.layout
    }

    /// Fan-in scaled uniform init: every tensor of a layer with fan-in `f`
    /// is drawn from `U(-1/√f, 1/√f)`.
    pub fn init_theta<T: Real, R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<T> {
        let mut theta = vec![T::zero(); self.n_params()];
        for e in &self.layout.entries {
            let fan_in = match self.layers[e.layer] {
                Layer::Conv { in_ch, kernel, .. } => in_ch * kernel * kernel,
                Layer::Dense { inputs, .. } => inputs,
                _ => unreachable!("only parameterised layers have layout entries"),
            };
            let bound = 1.0 / (fan_in as f64).sqrt();
            for t in &mut theta[e.offset..e.offset + e.len] {
                *t = T::lit(rng.random_range(-bound..bound));
            }
        }
        theta
    }
}

/// A network together with its flat parameter vector.
#[derive(Clone, Debug, PartialEq)]
pub struct ClassicalModel<T> {
    arch: Arc<Architecture>,
    theta: Vec<T>,
}

impl<T: Real> ClassicalModel<T> {
    pub fn new(arch: Arc<Architecture>, theta: Vec<T>) -> Result<Self> {
        if theta.len() != arch.n_params() {
            return Err(config_err!(
                "parameter vector length mismatch: expected {}, got {}",
                arch.n_params(),
                theta.len()
            ));
        }
        Ok(Self { arch, theta })
    }

    pub fn zeros(arch: Arc<Architecture>) -> Self {
        let n = arch.n_params();
        Self {
            arch,
            theta: vec![T::zero(); n],
        }
    }

    pub fn arch(&self) -> &Arc<Architecture> {
        &self.arch
    }

    pub fn theta(&self) -> &[T] {
        &self.theta
    }

    pub fn parameter_count(&self) -> usize {
        self.theta.len()
    }

    pub fn set_theta(&mut self, theta: Vec<T>) -> Result<()> {
        if theta.len() != self.theta.len() {
            return Err(config_err!(
                "parameter vector length mismatch: expected {}, got {}",
                self.theta.len(),
                theta.len()
            ));
        }
        self.theta = theta;
        Ok(())
    }

    pub fn flatten(&self) -> Vec<T> {
        self.theta.clone()
    }
}

/// Reference network with fan-in scaled random parameters.
pub fn build_reference_model<T: Real>(seed: u64) -> ClassicalModel<T> {
    let arch = Arc::new(Architecture::reference());
    let theta = arch.init_theta(&mut ChaCha8Rng::seed_from_u64(seed));
    ClassicalModel { arch, theta }
}

/// One named parameter tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T> {
    pub layer: usize,
    pub role: TensorRole,
    pub shape: Vec<usize>,
    pub data: Vec<T>,
}

/// Splits `θ` into its weight and bias tensors.
pub fn unflatten<T: Real>(theta: &[T], layout: &ThetaLayout) -> Result<Vec<Tensor<T>>> {
    if theta.len() != layout.total {
        return Err(config_err!(
            "parameter vector length mismatch: expected {}, got {}",
            layout.total,
            theta.len()
        ));
    }
    Ok(layout
        .entries
        .iter()
        .map(|e| Tensor {
            layer: e.layer,
            role: e.role,
            shape: e.shape.clone(),
            data: theta[e.offset..e.offset + e.len].to_vec(),
        })
        .collect())
}

/// Inverse of [`unflatten`].
pub fn flatten_tensors<T: Real>(tensors: &[Tensor<T>], layout: &ThetaLayout) -> Result<Vec<T>> {
    let mut theta = vec![T::zero(); layout.total];
    if tensors.len() != layout.entries.len() {
        return Err(config_err!(
            "expected {} tensors, got {}",
            layout.entries.len(),
            tensors.len()
        ));
    }
    for (t, e) in tensors.iter().zip(&layout.entries) {
        if t.layer != e.layer || t.role != e.role || t.data.len() != e.len {
            return Err(config_err!(
                "tensor for layer {} ({:?}) does not match layout",
                t.layer,
                t.role
            ));
        }
        theta[e.offset..e.offset + e.len].copy_from_slice(&t.data);
    }
    Ok(theta)
}

/// Activations saved by [`forward`] for [`backward`].
#[derive(Clone, Debug)]
pub struct ForwardCache<T> {
    batch: usize,
    /// Input of every layer.
    inputs: Vec<Vec<T>>,
    /// Flat input index picked by each pooling output, per pooling layer.
    argmax: Vec<Vec<u32>>,
}

impl<T> ForwardCache<T> {
    pub fn batch(&self) -> usize {
        self.batch
    }

    /// Input activations of layer `layer`, batch-major.
    pub fn layer_input(&self, layer: usize) -> Option<&[T]> {
        self.inputs.get(layer).map(Vec::as_slice)
    }
}

/// Logits for a batch of `batch` inputs laid out back to back.
pub fn forward<T: Real>(model: &ClassicalModel<T>, input: &[T], batch: usize) -> Result<(Vec<T>, ForwardCache<T>)> {
    let (logits, cache) = run_forward(model, input, batch, true)?;
    Ok((logits, cache.expect("cache requested")))
}

/// Forward pass without retaining activations.
pub fn predict<T: Real>(model: &ClassicalModel<T>, input: &[T], batch: usize) -> Result<Vec<T>> {
    Ok(run_forward(model, input, batch, false)?.0)
}

fn run_forward<T: Real>(
    model: &ClassicalModel<T>,
    input: &[T],
    batch: usize,
    keep: bool,
) -> Result<(Vec<T>, Option<ForwardCache<T>>)> {
    let arch = &model.arch;
    let in_len = arch.input.len();
    if batch == 0 || input.len() != batch * in_len {
        return Err(invariant_err!(
            "input has {} values, expected batch {batch} x {in_len}",
            input.len()
        ));
    }
    let theta = &model.theta;
    let mut inputs = Vec::new();
    let mut argmax = Vec::new();
    let mut x = input.to_vec();
    for (k, layer) in arch.layers.iter().enumerate() {
        let sin = arch.shapes[k];
        let sout = arch.shapes[k + 1];
        let y = match *layer {
            Layer::Conv { in_ch, out_ch, kernel } => {
                let (wo, bo) = arch.offsets[k].unwrap();
                conv_forward(
                    &x,
                    &theta[wo..bo],
                    &theta[bo..bo + out_ch],
                    batch,
                    in_ch,
                    out_ch,
                    kernel,
                    sin,
                    sout,
                )
            }
            Layer::Relu => x.iter().map(|&v| if v > T::zero() { v } else { T::zero() }).collect(),
            Layer::MaxPool2 => {
                let (y, idx) = maxpool_forward(&x, batch, sin, sout);
                if keep {
                    argmax.push(idx);
                }
                y
            }
            Layer::Flatten => x.clone(),
            Layer::Dense {
                inputs: ni,
                outputs: no,
            } => {
                let (wo, bo) = arch.offsets[k].unwrap();
                dense_forward(&x, &theta[wo..bo], &theta[bo..bo + no], batch, ni, no)
            }
        };
        if keep {
            inputs.push(std::mem::replace(&mut x, y));
        } else {
            x = y;
        }
    }
    let cache = keep.then_some(ForwardCache { batch, inputs, argmax });
    Ok((x, cache))
}

#[allow(clippy::too_many_arguments)]
fn conv_forward<T: Real>(
    x: &[T],
    w: &[T],
    b: &[T],
    batch: usize,
    in_ch: usize,
    out_ch: usize,
    k: usize,
    sin: Shape,
    sout: Shape,
) -> Vec<T> {
    let (ih, iw, oh, ow) = (sin.h, sin.w, sout.h, sout.w);
    let mut y = vec![T::zero(); batch * sout.len()];
    for n in 0..batch {
        let xn = &x[n * sin.len()..(n + 1) * sin.len()];
        let yn = &mut y[n * sout.len()..(n + 1) * sout.len()];
        for o in 0..out_ch {
            let yo = &mut yn[o * oh * ow..(o + 1) * oh * ow];
            yo.iter_mut().for_each(|v| *v = b[o]);
            for c in 0..in_ch {
                let xc = &xn[c * ih * iw..(c + 1) * ih * iw];
                for ki in 0..k {
                    for kj in 0..k {
                        let wv = w[((o * in_ch + c) * k + ki) * k + kj];
                        for i in 0..oh {
                            let xrow = &xc[(i + ki) * iw + kj..(i + ki) * iw + kj + ow];
                            let yrow = &mut yo[i * ow..(i + 1) * ow];
                            for (yv, &xv) in yrow.iter_mut().zip(xrow) {
                                *yv += wv * xv;
                            }
                        }
                    }
                }
            }
        }
    }
    y
}

fn maxpool_forward<T: Real>(x: &[T], batch: usize, sin: Shape, sout: Shape) -> (Vec<T>, Vec<u32>) {
    let mut y = Vec::with_capacity(batch * sout.len());
    let mut idx = Vec::with_capacity(batch * sout.len());
    for n in 0..batch {
        for c in 0..sin.c {
            let base = n * sin.len() + c * sin.h * sin.w;
            for i in 0..sout.h {
                for j in 0..sout.w {
                    let mut best = base + 2 * i * sin.w + 2 * j;
                    for (di, dj) in [(0, 1), (1, 0), (1, 1)] {
                        let cand = base + (2 * i + di) * sin.w + 2 * j + dj;
                        // strict comparison keeps the first maximum in scan order
                        if x[cand] > x[best] {
                            best = cand;
                        }
                    }
                    y.push(x[best]);
                    idx.push(best as u32);
                }
            }
        }
    }
    (y, idx)
}

fn dense_forward<T: Real>(x: &[T], w: &[T], b: &[T], batch: usize, ni: usize, no: usize) -> Vec<T> {
    let mut y = Vec::with_capacity(batch * no);
    for n in 0..batch {
        let xn = &x[n * ni..(n + 1) * ni];
        for o in 0..no {
            let row = &w[o * ni..(o + 1) * ni];
            y.push(row.iter().zip(xn).fold(b[o], |acc, (&a, &v)| acc + a * v));
        }
    }
    y
}

/// Mean softmax cross-entropy over the batch and its gradient with respect
/// to the logits.
pub fn loss_and_grad<T: Real>(logits: &[T], labels: &[usize], n_classes: usize) -> Result<(T, Vec<T>)> {
    let batch = labels.len();
    if batch == 0 || logits.len() != batch * n_classes {
        return Err(invariant_err!(
            "logits have {} values, expected {batch} x {n_classes}",
            logits.len()
        ));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= n_classes) {
        return Err(QfedError::Data(format!("label {bad} out of range 0..{n_classes}")));
    }
    let inv_b = T::one() / T::from_usize_lossy(batch);
    let mut loss = T::zero();
    let mut grad = vec![T::zero(); logits.len()];
    for (n, &label) in labels.iter().enumerate() {
        let row = &logits[n * n_classes..(n + 1) * n_classes];
        let g = &mut grad[n * n_classes..(n + 1) * n_classes];
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let mut sum = T::zero();
        for (gv, &z) in g.iter_mut().zip(row) {
            *gv = (z - max).exp();
            sum += *gv;
        }
        loss += sum.ln() + max - row[label];
        for gv in g.iter_mut() {
            *gv = *gv / sum * inv_b;
        }
        g[label] -= inv_b;
    }
    Ok((loss * inv_b, grad))
}

/// `dL/dθ` given `dL/dlogits` and the cache of the matching forward pass.
pub fn backward<T: Real>(model: &ClassicalModel<T>, cache: &ForwardCache<T>, dlogits: &[T]) -> Result<Vec<T>> {
    let arch = &model.arch;
    let batch = cache.batch;
    if dlogits.len() != batch * arch.n_classes() || cache.inputs.len() != arch.layers.len() {
        return Err(invariant_err!(
            "logit gradient has {} values, cache holds a batch of {batch} x {} classes",
            dlogits.len(),
            arch.n_classes()
        ));
    }
    let theta = &model.theta;
    let mut grad = vec![T::zero(); theta.len()];
    let mut dy = dlogits.to_vec();
    let mut pool = cache.argmax.len();
    for (k, layer) in arch.layers.iter().enumerate().rev() {
        let x = &cache.inputs[k];
        let sin = arch.shapes[k];
        let sout = arch.shapes[k + 1];
        let need_dx = k > 0;
        dy = match *layer {
            Layer::Conv { in_ch, out_ch, kernel } => {
                let (wo, bo) = arch.offsets[k].unwrap();
                let (gw, gb) = grad[wo..bo + out_ch].split_at_mut(bo - wo);
                conv_backward(
                    x,
                    &dy,
                    &theta[wo..bo],
                    gw,
                    gb,
                    batch,
                    in_ch,
                    out_ch,
                    kernel,
                    sin,
                    sout,
                    need_dx,
                )
            }
            Layer::Relu => dy
                .iter()
                .zip(x)
                .map(|(&g, &v)| if v > T::zero() { g } else { T::zero() })
                .collect(),
            Layer::MaxPool2 => {
                pool -= 1;
                let mut dx = vec![T::zero(); x.len()];
                for (&i, &g) in cache.argmax[pool].iter().zip(&dy) {
                    dx[i as usize] += g;
                }
                dx
            }
            Layer::Flatten => dy,
            Layer::Dense {
                inputs: ni,
                outputs: no,
            } => {
                let (wo, bo) = arch.offsets[k].unwrap();
                let w = &theta[wo..bo];
                let mut dx = vec![T::zero(); if need_dx { batch * ni } else { 0 }];
                for n in 0..batch {
                    let xn = &x[n * ni..(n + 1) * ni];
                    for o in 0..no {
                        let g = dy[n * no + o];
                        grad[bo + o] += g;
                        let gw = &mut grad[wo + o * ni..wo + (o + 1) * ni];
                        for (a, &v) in gw.iter_mut().zip(xn) {
                            *a += g * v;
                        }
                        if need_dx {
                            let dxn = &mut dx[n * ni..(n + 1) * ni];
                            for (d, &wv) in dxn.iter_mut().zip(&w[o * ni..(o + 1) * ni]) {
                                *d += g * wv;
                            }
                        }
                    }
                }
                dx
            }
        };
    }
    Ok(grad)
}

#[allow(clippy::too_many_arguments)]
fn conv_backward<T: Real>(
    x: &[T],
    dy: &[T],
    w: &[T],
    gw: &mut [T],
    gb: &mut [T],
    batch: usize,
    in_ch: usize,
    out_ch: usize,
    k: usize,
    sin: Shape,
    sout: Shape,
    need_dx: bool,
) -> Vec<T> {
    let (ih, iw, oh, ow) = (sin.h, sin.w, sout.h, sout.w);
    let mut dx = vec![T::zero(); if need_dx { x.len() } else { 0 }];
    for n in 0..batch {
        let xn = &x[n * sin.len()..(n + 1) * sin.len()];
        let dyn_ = &dy[n * sout.len()..(n + 1) * sout.len()];
        for o in 0..out_ch {
            let dyo = &dyn_[o * oh * ow..(o + 1) * oh * ow];
            gb[o] += dyo.iter().copied().sum::<T>();
            for c in 0..in_ch {
                let xc = &xn[c * ih * iw..(c + 1) * ih * iw];
                for ki in 0..k {
                    for kj in 0..k {
                        let widx = ((o * in_ch + c) * k + ki) * k + kj;
                        let mut acc = T::zero();
                        for i in 0..oh {
                            let xrow = &xc[(i + ki) * iw + kj..(i + ki) * iw + kj + ow];
                            let drow = &dyo[i * ow..(i + 1) * ow];
                            acc += xrow.iter().zip(drow).fold(T::zero(), |s, (&a, &b)| s + a * b);
                        }
                        gw[widx] += acc;
                        if need_dx {
                            let wv = w[widx];
                            let base = n * sin.len() + c * ih * iw;
                            for i in 0..oh {
                                let start = base + (i + ki) * iw + kj;
                                let dxrow = &mut dx[start..start + ow];
                                for (d, &g) in dxrow.iter_mut().zip(&dyo[i * ow..(i + 1) * ow]) {
                                    *d += wv * g;
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    dx
}

/// Row = true class, column = predicted class.
#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct Confusion {
    pub n_classes: usize,
    pub counts: Vec<u64>,
}

impl Confusion {
    pub fn new(n_classes: usize) -> Self {
        Self {
            n_classes,
            counts: vec![0; n_classes * n_classes],
        }
    }

    pub fn get(&self, truth: usize, pred: usize) -> u64 {
        self.counts[truth * self.n_classes + pred]
    }

    pub fn record(&mut self, truth: usize, pred: usize) {
        self.counts[truth * self.n_classes + pred] += 1;
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn trace(&self) -> u64 {
        (0..self.n_classes).map(|i| self.get(i, i)).sum()
    }

    pub fn row_sum(&self, truth: usize) -> u64 {
        self.counts[truth * self.n_classes..(truth + 1) * self.n_classes]
            .iter()
            .sum()
    }

    pub fn rows(&self) -> impl Iterator<Item = &[u64]> {
        self.counts.chunks(self.n_classes)
    }

    /// Unordered class pair with the largest combined off-diagonal count.
    pub fn most_confused_pair(&self) -> Option<(usize, usize, u64)> {
        let mut best: Option<(usize, usize, u64)> = None;
        for a in 0..self.n_classes {
            for b in a + 1..self.n_classes {
                let m = self.get(a, b) + self.get(b, a);
                if best.is_none_or(|(_, _, bm)| m > bm) {
                    best = Some((a, b, m));
                }
            }
        }
        best
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Evaluation {
    pub accuracy: f64,
    pub loss: f64,
    pub confusion: Confusion,
}

/// Index of the largest logit; ties resolve to the lowest class.
pub fn argmax<T: Real>(row: &[T]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Accuracy, mean cross-entropy and confusion matrix over `(inputs, labels)`,
/// where `inputs` holds `labels.len()` images back to back.
pub fn evaluate<T: Real>(model: &ClassicalModel<T>, inputs: &[T], labels: &[usize]) -> Result<Evaluation> {
    const CHUNK: usize = 256;
    if labels.is_empty() {
        return Err(QfedError::Data("cannot evaluate on an empty dataset".into()));
    }
    let k = model.arch.n_classes();
    let in_len = model.arch.input.len();
    if inputs.len() != labels.len() * in_len {
        return Err(invariant_err!(
            "{} labels but {} input values",
            labels.len(),
            inputs.len()
        ));
    }
    let mut confusion = Confusion::new(k);
    let mut loss_sum = 0.0;
    for (xs, ys) in inputs.chunks(CHUNK * in_len).zip(labels.chunks(CHUNK)) {
        let logits = predict(model, xs, ys.len())?;
        let (loss, _) = loss_and_grad(&logits, ys, k)?;
        loss_sum += loss.to_f64_lossy() * ys.len() as f64;
        for (row, &y) in logits.chunks(k).zip(ys) {
            confusion.record(y, argmax(row));
        }
    }
    let n = labels.len() as f64;
    Ok(Evaluation {
        accuracy: confusion.trace() as f64 / n,
        loss: loss_sum / n,
        confusion,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn rand_vec(n: usize, seed: u64, lo: f64, hi: f64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n).map(|_| rng.random_range(lo..hi)).collect()
    }

    #[test]
    fn reference_counts_and_layout() {
        let arch = Architecture::reference();
        assert_eq!(arch.n_params(), REFERENCE_PARAMS);
        let trace: Vec<usize> = arch.shapes().iter().map(|s| s.h).collect();
        assert_eq!(&trace[..7], &[28, 26, 26, 13, 11, 11, 5]);
        assert_eq!(arch.shapes()[7], Shape::flat(100));
        let per_layer: Vec<usize> = arch.layout().entries.chunks(2).map(|p| p[0].len + p[1].len).collect();
        assert_eq!(per_layer, vec![100, 364, 5656, 570]);
        assert_eq!(arch.layout().entry(7, TensorRole::Bias).unwrap().offset, 6064);
        let mut expect = 0;
        for e in &arch.layout().entries {
            assert_eq!(e.offset, expect);
            expect += e.len;
        }
        assert_eq!(expect, 6690);
    }

    #[test]
    fn seeded_builds_are_identical() {
        let a = build_reference_model::<f64>(7);
        let b = build_reference_model::<f64>(7);
        assert_eq!(a.theta(), b.theta());
        assert_eq!(a.parameter_count(), 6690);
        assert_ne!(a.theta(), build_reference_model::<f64>(8).theta());
    }

    #[test]
    fn zero_theta_gives_zero_logits() {
        let model = ClassicalModel::<f64>::zeros(Arc::new(Architecture::reference()));
        let x = rand_vec(784 * 2, 1, 0.0, 1.0);
        let (logits, _) = forward(&model, &x, 2).unwrap();
        assert!(logits.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn batching_does_not_couple_samples() {
        let model = build_reference_model::<f64>(3);
        let x = rand_vec(784, 2, 0.0, 1.0);
        let (one, _) = forward(&model, &x, 1).unwrap();
        let two_in = [x.clone(), x].concat();
        let (two, _) = forward(&model, &two_in, 2).unwrap();
        assert_eq!(&two[..10], &one[..]);
        assert_eq!(&two[10..], &one[..]);
        assert!(one.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn wrong_input_shape_is_rejected() {
        let model = build_reference_model::<f64>(3);
        assert!(forward(&model, &[0.0; 783], 1).is_err());
        assert!(forward(&model, &[], 0).is_err());
    }

    #[test]
    fn uniform_logits_loss_is_ln10() {
        let (loss, grad) = loss_and_grad(&[0.5f64; 30], &[0, 4, 9], 10).unwrap();
        assert_abs_diff_eq!(loss, 10f64.ln(), epsilon = 1e-12);
        for row in grad.chunks(10) {
            assert_abs_diff_eq!(row.iter().sum::<f64>(), 0.0, epsilon = 1e-10);
        }
    }

    #[test]
    fn label_out_of_range_is_data_error() {
        let err = loss_and_grad(&[0.0f64; 10], &[10], 10).unwrap_err();
        assert!(matches!(err, QfedError::Data(_)));
    }

    #[test]
    fn zero_upstream_gives_zero_grad() {
        let model = build_reference_model::<f64>(5);
        let x = rand_vec(784, 4, 0.0, 1.0);
        let (_, cache) = forward(&model, &x, 1).unwrap();
        let g = backward(&model, &cache, &[0.0; 10]).unwrap();
        assert_eq!(g.len(), 6690);
        assert!(g.iter().all(|&v| v == 0.0));
        assert!(backward(&model, &cache, &[0.0; 20]).is_err());
    }

    #[test]
    fn duplicated_batch_keeps_mean_gradient() {
        let model = build_reference_model::<f64>(11);
        let x = rand_vec(784 * 2, 6, 0.0, 1.0);
        let labels = [3usize, 8];
        let grad_of = |xs: &[f64], ys: &[usize]| {
            let (logits, cache) = forward(&model, xs, ys.len()).unwrap();
            let (_, d) = loss_and_grad(&logits, ys, 10).unwrap();
            backward(&model, &cache, &d).unwrap()
        };
        let g1 = grad_of(&x, &labels);
        let g2 = grad_of(&[x.clone(), x.clone()].concat(), &[3, 8, 3, 8]);
        for (a, b) in g1.iter().zip(&g2) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-12);
        }
    }

    #[test]
    fn maxpool_ties_route_to_first_element() {
        let arch = Arc::new(
            Architecture::new(
                Shape::new(1, 2, 2),
                vec![Layer::MaxPool2, Layer::Flatten, Layer::Dense { inputs: 1, outputs: 2 }],
            )
            .unwrap(),
        );
        let model = ClassicalModel::new(arch, vec![1.0, -1.0, 0.0, 0.0]).unwrap();
        let (_, cache) = forward(&model, &[0.5, 0.5, 0.5, 0.2], 1).unwrap();
        assert_eq!(cache.argmax[0], vec![0]);
    }

    #[test]
    fn flatten_round_trip() {
        let model = build_reference_model::<f64>(13);
        let tensors = unflatten(model.theta(), model.arch().layout()).unwrap();
        assert_eq!(tensors.len(), 8);
        assert_eq!(tensors[0].shape, vec![10, 1, 3, 3]);
        let back = flatten_tensors(&tensors, model.arch().layout()).unwrap();
        assert_eq!(back, model.flatten());
        assert!(unflatten(&[0.0f64; 6689], model.arch().layout()).is_err());
    }

    #[test]
    fn confusion_examples() {
        let mut perfect = Confusion::new(3);
        for c in [0, 1, 2, 2] {
            perfect.record(c, c);
        }
        assert_eq!(perfect.trace(), perfect.total());
        let mut constant = Confusion::new(3);
        for c in [0, 1, 2, 2] {
            constant.record(c, 2);
        }
        assert_eq!(constant.trace(), 2);
        assert_eq!(constant.row_sum(2), 2);
        assert_eq!(constant.most_confused_pair(), Some((0, 2, 1)));
    }

    #[test]
    fn evaluate_rejects_empty() {
        let model = build_reference_model::<f64>(1);
        assert!(matches!(evaluate(&model, &[], &[]), Err(QfedError::Data(_))));
    }
}

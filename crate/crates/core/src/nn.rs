//! One-hidden-layer MLP with exact first and second derivatives.
//!
//! Parameters live in a single flat vector laid out as
//! `[W1 (hidden×input, row-major) | b1 | W2 (output×hidden, row-major) | b2]`.
//! A row-major `rows×cols` block is a column-major `cols×rows` matrix, so every
//! weight block can be viewed in place as the transposed weight matrix and fed
//! straight into GEMM. The batched HVP leans on this: the input-layer work for
//! all `k` tangents is two large GEMMs against the minibatch, which dominates
//! the cost of a training-Jacobian computation.

use std::ops::Range;

use faer::linalg::matmul::matmul;
use faer::reborrow::{Reborrow, ReborrowMut};
use faer::{Accum, Mat, MatMut, MatRef, Par};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    Tanh,
}

impl Activation {
    #[inline]
    fn apply<T: Scalar>(self, z: T) -> T {
        match self {
            Activation::Relu => {
                if z > T::zero() {
                    z
                } else {
                    T::zero()
                }
            }
            Activation::Tanh => z.tanh(),
        }
    }

    /// First and second derivative at `z`. ReLU uses the convention σ'(0) = 0.
    #[inline]
    fn derivatives<T: Scalar>(self, z: T) -> (T, T) {
        match self {
            Activation::Relu => (if z > T::zero() { T::one() } else { T::zero() }, T::zero()),
            Activation::Tanh => {
                let t = z.tanh();
                let d1 = T::one() - t * t;
                (d1, -(t + t) * d1)
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    CrossEntropy,
    /// Squared error between the softmax output and the one-hot label, summed over classes.
    MseOnProbabilities,
}

/// Shape of the MLP and the position of each block in the flat parameter vector.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ParamLayout {
    pub input: usize,
    pub hidden: usize,
    pub output: usize,
}

impl ParamLayout {
    pub fn new(input: usize, hidden: usize, output: usize) -> Result<Self> {
        if input == 0 || hidden == 0 || output == 0 {
            return Err(Error::InvalidArgument(format!(
                "layer widths must be positive, got ({input}, {hidden}, {output})"
            )));
        }
        Ok(Self { input, hidden, output })
    }

    /// 64-64-10, the 4810-parameter digits network.
    pub fn digits(hidden: usize) -> Self {
        Self { input: 64, hidden, output: 10 }
    }

    pub fn n_params(&self) -> usize {
        self.hidden * self.input + self.hidden + self.output * self.hidden + self.output
    }

    pub fn w1(&self) -> Range<usize> {
        0..self.hidden * self.input
    }

    pub fn b1(&self) -> Range<usize> {
        let s = self.w1().end;
        s..s + self.hidden
    }

    pub fn w2(&self) -> Range<usize> {
        let s = self.b1().end;
        s..s + self.output * self.hidden
    }

    pub fn b2(&self) -> Range<usize> {
        let s = self.w2().end;
        s..s + self.output
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ModelConfig {
    pub activation: Activation,
    pub loss: LossKind,
    pub layout: ParamLayout,
}

impl ModelConfig {
    pub fn new(layout: ParamLayout) -> Self {
        Self { activation: Activation::Relu, loss: LossKind::CrossEntropy, layout }
    }
}

/// Flat parameter vector θ tagged with its layout.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamVector<T> {
    values: Vec<T>,
    layout: ParamLayout,
}

impl<T: Scalar> ParamVector<T> {
    pub fn new(values: Vec<T>, layout: ParamLayout) -> Result<Self> {
        if values.len() != layout.n_params() {
            return Err(Error::InvalidArgument(format!(
                "parameter vector has length {} but layout needs {}",
                values.len(),
                layout.n_params()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite { layer: "parameters" });
        }
        Ok(Self { values, layout })
    }

    pub fn zeros(layout: ParamLayout) -> Self {
        Self { values: vec![T::zero(); layout.n_params()], layout }
    }

    pub fn layout(&self) -> ParamLayout {
        self.layout
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn as_slice(&self) -> &[T] {
        &self.values
    }

    pub fn as_mut_slice(&mut self) -> &mut [T] {
        &mut self.values
    }

    pub fn into_vec(self) -> Vec<T> {
        self.values
    }

    /// `W1ᵀ` as an `input × hidden` view.
    fn w1t(&self) -> MatRef<'_, T> {
        let l = self.layout;
        MatRef::from_column_major_slice(&self.values[l.w1()], l.input, l.hidden)
    }

    /// `W2ᵀ` as a `hidden × output` view.
    fn w2t(&self) -> MatRef<'_, T> {
        let l = self.layout;
        MatRef::from_column_major_slice(&self.values[l.w2()], l.hidden, l.output)
    }

    fn b1(&self) -> &[T] {
        &self.values[self.layout.b1()]
    }

    fn b2(&self) -> &[T] {
        &self.values[self.layout.b2()]
    }
}

/// Minibatch view: one example per feature row.
#[derive(Clone, Copy, Debug)]
pub struct Batch<'a, T> {
    pub features: MatRef<'a, T>,
    pub labels: &'a [usize],
}

impl<'a, T: Scalar> Batch<'a, T> {
    pub fn new(features: MatRef<'a, T>, labels: &'a [usize]) -> Self {
        assert_eq!(features.nrows(), labels.len(), "batch rows and labels disagree");
        Self { features, labels }
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

/// Converts dataset features to the working scalar type.
pub fn features_as<T: Scalar>(d: &Dataset) -> Mat<T> {
    let f = d.features();
    Mat::from_fn(f.nrows(), f.ncols(), |i, j| T::lit(f[(i, j)]))
}

/// Gaussian weights with standard deviation `1/√fan_in`, zero biases.
pub fn init_params<T: Scalar>(layout: ParamLayout, seed: u64) -> ParamVector<T> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut values = vec![T::zero(); layout.n_params()];
    let s1 = 1.0 / (layout.input as f64).sqrt();
    for v in &mut values[layout.w1()] {
        let z: f64 = StandardNormal.sample(&mut rng);
        *v = T::lit(z * s1);
    }
    let s2 = 1.0 / (layout.hidden as f64).sqrt();
    for v in &mut values[layout.w2()] {
        let z: f64 = StandardNormal.sample(&mut rng);
        *v = T::lit(z * s2);
    }
    ParamVector { values, layout }
}

#[inline]
pub(crate) fn mm<T: Scalar>(dst: MatMut<'_, T>, accum: Accum, lhs: MatRef<'_, T>, rhs: MatRef<'_, T>) {
    matmul(dst, accum, lhs, rhs, T::one(), Par::Seq);
}

fn check_finite<T: Scalar>(m: MatRef<'_, T>, layer: &'static str) -> Result<()> {
    for j in 0..m.ncols() {
        if m.col(j).iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite { layer });
        }
    }
    Ok(())
}

/// Numerically stable softmax of `z` written into `p`; returns log-sum-exp.
#[inline]
fn softmax_into<T: Scalar>(z: impl Iterator<Item = T> + Clone, p: &mut [T]) -> T {
    let max = z.clone().fold(T::neg_infinity(), |a, b| a.max(b));
    let mut sum = T::zero();
    for (pi, zi) in p.iter_mut().zip(z) {
        *pi = (zi - max).exp();
        sum += *pi;
    }
    for pi in p.iter_mut() {
        *pi /= sum;
    }
    max + sum.ln()
}

/// Intermediate quantities of a forward pass over a batch.
struct Forward<T> {
    /// σ'(Z1), B×H
    s1: Mat<T>,
    /// σ''(Z1), B×H
    s2: Mat<T>,
    /// σ(Z1), B×H
    act: Mat<T>,
    /// Z2, B×O
    logits: Mat<T>,
}

fn forward_batch<T: Scalar>(p: &ParamVector<T>, x: MatRef<'_, T>, cfg: &ModelConfig) -> Result<Forward<T>> {
    let l = cfg.layout;
    if x.ncols() != l.input {
        return Err(Error::InvalidArgument(format!(
            "input has {} features, layout expects {}",
            x.ncols(),
            l.input
        )));
    }
    check_finite(x, "input")?;
    let b = x.nrows();
    let mut z1 = Mat::<T>::zeros(b, l.hidden);
    mm(z1.as_mut(), Accum::Replace, x, p.w1t());
    let b1 = p.b1();
    for h in 0..l.hidden {
        for v in z1.col_mut(h).iter_mut() {
            *v += b1[h];
        }
    }
    check_finite(z1.as_ref(), "hidden")?;
    let mut act = Mat::<T>::zeros(b, l.hidden);
    let mut s1 = Mat::<T>::zeros(b, l.hidden);
    let mut s2 = Mat::<T>::zeros(b, l.hidden);
    for h in 0..l.hidden {
        for i in 0..b {
            let z = z1[(i, h)];
            act[(i, h)] = cfg.activation.apply(z);
            let (d1, d2) = cfg.activation.derivatives(z);
            s1[(i, h)] = d1;
            s2[(i, h)] = d2;
        }
    }
    let mut logits = Mat::<T>::zeros(b, l.output);
    mm(logits.as_mut(), Accum::Replace, act.as_ref(), p.w2t());
    let b2 = p.b2();
    for o in 0..l.output {
        for v in logits.col_mut(o).iter_mut() {
            *v += b2[o];
        }
    }
    check_finite(logits.as_ref(), "output")?;
    Ok(Forward { s1, s2, act, logits })
}

/// Logits `W2·σ(W1·x + b1) + b2` for a single input.
pub fn forward<T: Scalar>(p: &ParamVector<T>, x: &[T], cfg: &ModelConfig) -> Result<Vec<T>> {
    let xm = MatRef::from_row_major_slice(x, 1, x.len());
    let f = forward_batch(p, xm, cfg)?;
    Ok((0..cfg.layout.output).map(|o| f.logits[(0, o)]).collect())
}

/// Logits for every row of `x` (B×O).
pub fn logits<T: Scalar>(p: &ParamVector<T>, x: MatRef<'_, T>, cfg: &ModelConfig) -> Result<Mat<T>> {
    Ok(forward_batch(p, x, cfg)?.logits)
}

/// Softmax class probabilities for every row of `x` (B×O).
pub fn probabilities<T: Scalar>(p: &ParamVector<T>, x: MatRef<'_, T>, cfg: &ModelConfig) -> Result<Mat<T>> {
    let z = logits(p, x, cfg)?;
    let o = z.ncols();
    let mut out = Mat::<T>::zeros(z.nrows(), o);
    let mut buf = vec![T::zero(); o];
    for i in 0..z.nrows() {
        softmax_into((0..o).map(|c| z[(i, c)]), &mut buf);
        for c in 0..o {
            out[(i, c)] = buf[c];
        }
    }
    Ok(out)
}

/// Per-example loss head: value, gradient and Hessian action in logit space.
struct Head<T> {
    p: Vec<T>,
    r: Vec<T>,
    kind: LossKind,
}

impl<T: Scalar> Head<T> {
    fn new(kind: LossKind, o: usize) -> Self {
        Self { p: vec![T::zero(); o], r: vec![T::zero(); o], kind }
    }

    /// Loads logits `z` with label `y`; returns the loss and writes ∂ℓ/∂z into `g`.
    fn load(&mut self, z: impl Iterator<Item = T> + Clone, y: usize, g: &mut [T]) -> T {
        let lse = softmax_into(z.clone(), &mut self.p);
        match self.kind {
            LossKind::CrossEntropy => {
                g.copy_from_slice(&self.p);
                g[y] -= T::one();
                lse - z.clone().nth(y).expect("label within output range")
            }
            LossKind::MseOnProbabilities => {
                let mut loss = T::zero();
                for c in 0..self.p.len() {
                    let e = self.p[c] - if c == y { T::one() } else { T::zero() };
                    loss += e * e;
                    self.r[c] = e + e;
                }
                softmax_jvp(&self.p, &self.r, g);
                loss
            }
        }
    }

    /// Hessian of the loaded loss in logit space applied to `dz`.
    fn hvp(&self, dz: &[T], out: &mut [T], dp: &mut [T], tmp: &mut [T]) {
        let p = &self.p;
        softmax_jvp(p, dz, dp);
        match self.kind {
            LossKind::CrossEntropy => out.copy_from_slice(dp),
            LossKind::MseOnProbabilities => {
                let r = &self.r;
                let s = dot(p, r);
                let dpr = dot(dp, r);
                for c in 0..p.len() {
                    tmp[c] = dp[c] + dp[c];
                }
                softmax_jvp(p, tmp, out);
                for c in 0..p.len() {
                    out[c] += dp[c] * (r[c] - s) - p[c] * dpr;
                }
            }
        }
    }
}

/// `(diag(p) − p pᵀ) v`
#[inline]
fn softmax_jvp<T: Scalar>(p: &[T], v: &[T], out: &mut [T]) {
    let s = dot(p, v);
    for c in 0..p.len() {
        out[c] = p[c] * (v[c] - s);
    }
}

#[inline]
fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    a.iter().zip(b).fold(T::zero(), |acc, (&x, &y)| acc + x * y)
}

fn check_labels(labels: &[usize], output: usize) -> Result<()> {
    match labels.iter().find(|&&y| y >= output) {
        Some(y) => Err(Error::InvalidArgument(format!("label {y} outside 0..{output}"))),
        None => Ok(()),
    }
}

fn col_sums<T: Scalar>(m: MatRef<'_, T>, out: &mut [T]) {
    for (j, o) in out.iter_mut().enumerate() {
        *o = m.col(j).iter().fold(T::zero(), |a, &b| a + b);
    }
}

/// Mean loss over the batch; no gradient.
pub fn loss<T: Scalar>(p: &ParamVector<T>, batch: Batch<'_, T>, cfg: &ModelConfig) -> Result<T> {
    if batch.is_empty() {
        return Err(Error::InvalidArgument("empty batch".into()));
    }
    check_labels(batch.labels, cfg.layout.output)?;
    let f = forward_batch(p, batch.features, cfg)?;
    let o = cfg.layout.output;
    let mut head = Head::new(cfg.loss, o);
    let mut g = vec![T::zero(); o];
    let mut total = T::zero();
    for (i, &y) in batch.labels.iter().enumerate() {
        total += head.load((0..o).map(|c| f.logits[(i, c)]), y, &mut g);
    }
    Ok(total / T::lit(batch.len() as f64))
}

/// Mean loss over a whole dataset, processed in chunks.
pub fn dataset_loss<T: Scalar>(p: &ParamVector<T>, features: MatRef<'_, T>, labels: &[usize], cfg: &ModelConfig) -> Result<T> {
    const CHUNK: usize = 512;
    let n = labels.len();
    let mut total = T::zero();
    let mut start = 0;
    while start < n {
        let len = CHUNK.min(n - start);
        let b = Batch::new(features.subrows(start, len), &labels[start..start + len]);
        total += loss(p, b, cfg)? * T::lit(len as f64);
        start += len;
    }
    Ok(total / T::lit(n as f64))
}

/// Mean loss over the batch and its exact gradient.
pub fn loss_and_grad<T: Scalar>(p: &ParamVector<T>, batch: Batch<'_, T>, cfg: &ModelConfig) -> Result<(T, ParamVector<T>)> {
    if batch.is_empty() {
        return Err(Error::InvalidArgument("empty batch".into()));
    }
    let l = cfg.layout;
    check_labels(batch.labels, l.output)?;
    let f = forward_batch(p, batch.features, cfg)?;
    let b = batch.len();
    let inv_b = T::one() / T::lit(b as f64);
    let (g2, total) = output_grads(&f, batch.labels, cfg, inv_b);

    let mut grad = vec![T::zero(); l.n_params()];
    {
        let gw2 = MatMut::from_column_major_slice_mut(&mut grad[l.w2()], l.hidden, l.output);
        mm(gw2, Accum::Replace, f.act.transpose(), g2.as_ref());
    }
    col_sums(g2.as_ref(), &mut grad[l.b2()]);
    let mut g1 = Mat::<T>::zeros(b, l.hidden);
    mm(g1.as_mut(), Accum::Replace, g2.as_ref(), p.w2t().transpose());
    for h in 0..l.hidden {
        for i in 0..b {
            g1[(i, h)] *= f.s1[(i, h)];
        }
    }
    {
        let gw1 = MatMut::from_column_major_slice_mut(&mut grad[l.w1()], l.input, l.hidden);
        mm(gw1, Accum::Replace, batch.features.transpose(), g1.as_ref());
    }
    col_sums(g1.as_ref(), &mut grad[l.b1()]);
    Ok((total * inv_b, ParamVector { values: grad, layout: l }))
}

/// `∂L/∂Z2` scaled by `inv_b`, plus the summed (unscaled) loss.
fn output_grads<T: Scalar>(f: &Forward<T>, labels: &[usize], cfg: &ModelConfig, inv_b: T) -> (Mat<T>, T) {
    let o = cfg.layout.output;
    let mut head = Head::new(cfg.loss, o);
    let mut g = vec![T::zero(); o];
    let mut g2 = Mat::<T>::zeros(labels.len(), o);
    let mut total = T::zero();
    for (i, &y) in labels.iter().enumerate() {
        total += head.load((0..o).map(|c| f.logits[(i, c)]), y, &mut g);
        for c in 0..o {
            g2[(i, c)] = g[c] * inv_b;
        }
    }
    (g2, total)
}

/// Reusable buffers for [`hvp_block_into`].
#[derive(Default)]
pub struct HvpScratch<T> {
    hz: Vec<T>,
    v1: Vec<T>,
    v2t: Vec<T>,
    v2: Vec<T>,
    dz1: Vec<T>,
    da: Vec<T>,
    da_tall: Vec<T>,
    dz2: Vec<T>,
    av2: Vec<T>,
    dg2: Vec<T>,
    dg2_wide: Vec<T>,
    dga: Vec<T>,
    gv2: Vec<T>,
    dg1: Vec<T>,
    dw1: Vec<T>,
    dw2a: Vec<T>,
    dw2b: Vec<T>,
}

fn cr<'a, T>(m: &'a MatMut<'_, T>, j: usize) -> &'a [T] {
    m.rb().col(j).try_as_col_major().expect("contiguous column").as_slice()
}

fn cm<'a, T>(m: &'a mut MatMut<'_, T>, j: usize) -> &'a mut [T] {
    m.rb_mut().col_mut(j).try_as_col_major_mut().expect("contiguous column").as_slice_mut()
}

fn ws_zero<T: Scalar>(m: &mut MatMut<'_, T>) {
    for j in 0..m.ncols() {
        cm(m, j).fill(T::zero());
    }
}

fn view<T: Scalar>(buf: &mut Vec<T>, rows: usize, cols: usize) -> MatMut<'_, T> {
    if buf.len() < rows * cols {
        buf.resize(rows * cols, T::zero());
    }
    MatMut::from_column_major_slice_mut(&mut buf[..rows * cols], rows, cols)
}

/// Hessian of the mean batch loss applied to each column of `tangents` (N×k).
///
/// Column `j` of the result is the exact directional derivative of the
/// gradient along `tangents[:, j]`. Columns never interact: the result for a
/// column is bit-identical whether it is processed alone or within a block.
pub fn hvp_block<T: Scalar>(
    p: &ParamVector<T>,
    tangents: MatRef<'_, T>,
    batch: Batch<'_, T>,
    cfg: &ModelConfig,
) -> Result<Mat<T>> {
    let mut out = Mat::<T>::zeros(tangents.nrows(), tangents.ncols());
    hvp_block_into(p, tangents, batch, cfg, out.as_mut(), &mut HvpScratch::default())?;
    Ok(out)
}

/// [`hvp_block`] writing into `dst` (N×k) and reusing `ws` between calls.
pub fn hvp_block_into<T: Scalar>(
    p: &ParamVector<T>,
    tangents: MatRef<'_, T>,
    batch: Batch<'_, T>,
    cfg: &ModelConfig,
    mut dst: MatMut<'_, T>,
    ws: &mut HvpScratch<T>,
) -> Result<()> {
    let l = cfg.layout;
    let n = l.n_params();
    if dst.nrows() != n || dst.ncols() != tangents.ncols() {
        return Err(Error::InvalidArgument("output block shape does not match tangents".into()));
    }
    if tangents.nrows() != n {
        return Err(Error::InvalidArgument(format!(
            "tangent block has {} rows, expected {n}",
            tangents.nrows()
        )));
    }
    if batch.is_empty() {
        return Err(Error::InvalidArgument("empty batch".into()));
    }
    check_labels(batch.labels, l.output)?;
    let owned;
    let tangents = if tangents.row_stride() == 1 {
        tangents
    } else {
        owned = tangents.to_owned();
        owned.as_ref()
    };
    let tcol = |j: usize| tangents.col(j).try_as_col_major().expect("unit row stride").as_slice();
    let k = tangents.ncols();
    let (b, inp, hid, out) = (batch.len(), l.input, l.hidden, l.output);
    let (w1s, b1s, w2s, b2s) = (l.w1().start, l.b1().start, l.w2().start, l.b2().start);
    let x = batch.features;
    let f = forward_batch(p, x, cfg)?;
    let inv_b = T::one() / T::lit(b as f64);
    let (g2, _) = output_grads(&f, batch.labels, cfg, inv_b);
    let mut ga = Mat::<T>::zeros(b, hid);
    mm(ga.as_mut(), Accum::Replace, g2.as_ref(), p.w2t().transpose());
    let smooth = cfg.activation == Activation::Tanh;
    let gs2 = Mat::from_fn(b, hid, |i, h| ga[(i, h)] * f.s2[(i, h)]);

    // Logit-space Hessian per example, scaled by 1/B: hz[d * out + c][i] = (H_i e_d)_c / B.
    let mut hz = view(&mut ws.hz, b, out * out);
    {
        let mut head = Head::new(cfg.loss, out);
        let mut scratch = vec![T::zero(); out];
        let (mut e, mut hrow, mut dp, mut tmp) =
            (vec![T::zero(); out], vec![T::zero(); out], vec![T::zero(); out], vec![T::zero(); out]);
        for i in 0..b {
            head.load((0..out).map(|c| f.logits[(i, c)]), batch.labels[i], &mut scratch);
            for d in 0..out {
                e.iter_mut().for_each(|v| *v = T::zero());
                e[d] = T::one();
                head.hvp(&e, &mut hrow, &mut dp, &mut tmp);
                for c in 0..out {
                    hz[(i, d * out + c)] = hrow[c] * inv_b;
                }
            }
        }
    }

    // Wide layout: column j*hid + h belongs to tangent j. Tall layout: rows j*b..(j+1)*b.
    // v1: block j is V1_jᵀ (inp×hid); v2t: block j is V2_jᵀ (hid×out); v2: block j is V2_j (out×hid).
    let mut v1 = view(&mut ws.v1, inp, hid * k);
    let mut v2t = view(&mut ws.v2t, hid, out * k);
    let mut v2 = view(&mut ws.v2, out, hid * k);
    for j in 0..k {
        let t = tcol(j);
        for h in 0..hid {
            cm(&mut v1, j * hid + h).copy_from_slice(&t[w1s + h * inp..w1s + (h + 1) * inp]);
            let dst = cm(&mut v2, j * hid + h);
            for o in 0..out {
                dst[o] = t[w2s + o * hid + h];
            }
        }
        for o in 0..out {
            cm(&mut v2t, j * out + o).copy_from_slice(&t[w2s + o * hid..w2s + (o + 1) * hid]);
        }
    }

    // dZ1 = X·V1ᵀ + c1, dA = σ'(Z1) ⊙ dZ1
    let mut dz1 = view(&mut ws.dz1, b, hid * k);
    mm(dz1.as_mut(), Accum::Replace, x, v1.as_ref());
    let mut da = view(&mut ws.da, b, hid * k);
    let mut da_tall = view(&mut ws.da_tall, k * b, hid);
    for j in 0..k {
        let t = tcol(j);
        for h in 0..hid {
            let c = j * hid + h;
            let c1 = t[b1s + h];
            let z = cm(&mut dz1, c);
            z.iter_mut().for_each(|v| *v += c1);
            let s1 = f.s1.col_as_slice(h);
            let dst = cm(&mut da, c);
            for i in 0..b {
                dst[i] = s1[i] * z[i];
            }
            cm(&mut da_tall, h)[j * b..(j + 1) * b].copy_from_slice(dst);
        }
    }

    // dZ2_j = dA_j·W2ᵀ + A·V2_jᵀ + c2_j
    let mut dz2 = view(&mut ws.dz2, k * b, out);
    mm(dz2.as_mut(), Accum::Replace, da_tall.as_ref(), p.w2t());
    let mut av2 = view(&mut ws.av2, b, out * k);
    mm(av2.as_mut(), Accum::Replace, f.act.as_ref(), v2t.as_ref());
    for j in 0..k {
        let t = tcol(j);
        for o in 0..out {
            let c2 = t[b2s + o];
            let src = cr(&av2, j * out + o);
            for (v, &a) in cm(&mut dz2, o)[j * b..(j + 1) * b].iter_mut().zip(src) {
                *v += a + c2;
            }
        }
    }

    // dG2 = H_z·dZ2 / B, row by row.
    let mut dg2 = view(&mut ws.dg2, k * b, out);
    let mut dg2_wide = view(&mut ws.dg2_wide, b, out * k);
    ws_zero(&mut dg2_wide);
    for j in 0..k {
        let rows = j * b..(j + 1) * b;
        for c in 0..out {
            let dst = cm(&mut dg2_wide, j * out + c);
            for d in 0..out {
                let coef = cr(&hz, d * out + c);
                let src = &cr(&dz2, d)[rows.clone()];
                for ((o, &h), &z) in dst.iter_mut().zip(coef).zip(src) {
                    *o += h * z;
                }
            }
            cm(&mut dg2, c)[rows.clone()].copy_from_slice(dst);
        }
    }

    // dGA_j = dG2_j·W2 + G2·V2_j, then dG1_j = dGA_j ⊙ σ'(Z1) + GA ⊙ σ''(Z1) ⊙ dZ1_j
    let mut dga = view(&mut ws.dga, k * b, hid);
    mm(dga.as_mut(), Accum::Replace, dg2.as_ref(), p.w2t().transpose());
    let mut gv2 = view(&mut ws.gv2, b, hid * k);
    mm(gv2.as_mut(), Accum::Replace, g2.as_ref(), v2.as_ref());
    let mut dg1 = view(&mut ws.dg1, b, hid * k);
    for j in 0..k {
        for h in 0..hid {
            let c = j * hid + h;
            let a = &cr(&dga, h)[j * b..(j + 1) * b];
            let g = cr(&gv2, c);
            let s1 = f.s1.col_as_slice(h);
            let dst = cm(&mut dg1, c);
            for i in 0..b {
                dst[i] = (a[i] + g[i]) * s1[i];
            }
            if smooth {
                let (q, z) = (gs2.col_as_slice(h), cr(&dz1, c));
                for i in 0..b {
                    dst[i] += q[i] * z[i];
                }
            }
        }
    }

    // d∇W1ᵀ = Xᵀ·dG1; d∇W2ᵀ_j = Aᵀ·dG2_j + dA_jᵀ·G2
    let mut dw1 = view(&mut ws.dw1, inp, hid * k);
    mm(dw1.as_mut(), Accum::Replace, x.transpose(), dg1.as_ref());
    let mut dw2a = view(&mut ws.dw2a, hid, out * k);
    mm(dw2a.as_mut(), Accum::Replace, f.act.transpose(), dg2_wide.as_ref());
    let mut dw2b = view(&mut ws.dw2b, hid * k, out);
    mm(dw2b.as_mut(), Accum::Replace, da.as_ref().transpose(), g2.as_ref());

    let result = &mut dst;
    for j in 0..k {
        let col = cm(result, j);
        for h in 0..hid {
            col[w1s + h * inp..w1s + (h + 1) * inp].copy_from_slice(cr(&dw1, j * hid + h));
            col[b1s + h] = cr(&dg1, j * hid + h).iter().fold(T::zero(), |a, &v| a + v);
        }
        for o in 0..out {
            let (a, bb) = (cr(&dw2a, j * out + o), &cr(&dw2b, o)[j * hid..(j + 1) * hid]);
            for h in 0..hid {
                col[w2s + o * hid + h] = a[h] + bb[h];
            }
            col[b2s + o] = cr(&dg2_wide, j * out + o).iter().fold(T::zero(), |a, &v| a + v);
        }
    }
    Ok(())
}

/// Gradients of the log-probabilities `log softmax(forward(p, x))` (O×N).
pub fn logprob_grads<T: Scalar>(p: &ParamVector<T>, x: &[T], cfg: &ModelConfig) -> Result<Mat<T>> {
    let l = cfg.layout;
    let xm = MatRef::from_row_major_slice(x, 1, x.len());
    let f = forward_batch(p, xm, cfg)?;
    let mut probs = vec![T::zero(); l.output];
    softmax_into((0..l.output).map(|c| f.logits[(0, c)]), &mut probs);
    let w2t = p.w2t();

    // Rows of ∂z/∂θ, then subtract the probability-weighted mean row.
    let mut dz = Mat::<T>::zeros(l.output, l.n_params());
    for c in 0..l.output {
        for h in 0..l.hidden {
            let back = w2t[(h, c)] * f.s1[(0, h)];
            dz[(c, l.b1().start + h)] = back;
            for i in 0..l.input {
                dz[(c, l.w1().start + h * l.input + i)] = back * x[i];
            }
            dz[(c, l.w2().start + c * l.hidden + h)] = f.act[(0, h)];
        }
        dz[(c, l.b2().start + c)] = T::one();
    }
    let mut out = dz.clone();
    for col in 0..l.n_params() {
        let mean = (0..l.output).fold(T::zero(), |a, c| a + probs[c] * dz[(c, col)]);
        for c in 0..l.output {
            out[(c, col)] -= mean;
        }
    }
    Ok(out)
}

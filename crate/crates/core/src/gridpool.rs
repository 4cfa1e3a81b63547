//! Grid pooling and parallel grid pooling (PGP).
//!
//! Grid pooling `G^s_(i,j)` keeps the cell at offset `(i, j)` of every `s×s`
//! block. PGP keeps all `s²` of them at once as parallel branches stacked on
//! the batch axis: for an input with batch `n`, the branch for coordinate
//! `(i, j)` occupies rows `[(i·s + j)·n, (i·s + j + 1)·n)`. Applying PGP to an
//! already stacked tensor nests the new coordinate outside the existing
//! branches, so branch `k` of a stack with base batch `b` always sits in rows
//! `[k·b, (k+1)·b)`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ops::conv::{avgpool2d_window, conv2d, ConvSpec, Window};
use crate::ops::nn::{softmax, softmax_cross_entropy};
use crate::tensor::{Scalar, Shape, Tensor};

/// Cell offset inside an `s×s` grid block.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct GridCoord {
    pub i: usize,
    pub j: usize,
}

impl GridCoord {
    pub fn new(i: usize, j: usize) -> Self {
        GridCoord { i, j }
    }

    pub fn check(&self, s: usize) -> Result<()> {
        if s == 0 {
            return Err(Error::invalid("grid stride must be ≥ 1"));
        }
        if self.i >= s || self.j >= s {
            return Err(Error::invalid(format!(
                "grid coordinate ({}, {}) out of range for stride {s}",
                self.i, self.j
            )));
        }
        Ok(())
    }

    /// All `s²` coordinates in row-major order.
    pub fn row_major(s: usize) -> impl Iterator<Item = GridCoord> {
        (0..s).flat_map(move |i| (0..s).map(move |j| GridCoord::new(i, j)))
    }
}

/// How branch predictions are combined into one prediction per sample.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AggregateMode {
    /// Mean of the branch logits.
    #[default]
    Logits,
    /// Mean of the branch softmax probabilities.
    Probs,
}

impl AggregateMode {
    pub fn as_str(self) -> &'static str {
        match self {
            AggregateMode::Logits => "logits",
            AggregateMode::Probs => "probs",
        }
    }
}

impl std::str::FromStr for AggregateMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "logits" => Ok(AggregateMode::Logits),
            "probs" => Ok(AggregateMode::Probs),
            other => Err(Error::invalid(format!(
                "aggregate mode must be `logits` or `probs`, got `{other}`"
            ))),
        }
    }
}

/// Branch bookkeeping for a batch-stacked tensor.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct BranchLayout {
    pub base_batch: usize,
    /// Strides of the PGP applications so far, oldest first.
    pub strides: Vec<usize>,
}

impl BranchLayout {
    pub fn single(base_batch: usize) -> Self {
        BranchLayout {
            base_batch,
            strides: Vec::new(),
        }
    }

    pub fn branch_count(&self) -> usize {
        self.strides.iter().map(|s| s * s).product()
    }

    pub fn rows(&self) -> usize {
        self.base_batch * self.branch_count()
    }

    pub fn push(&mut self, s: usize) {
        self.strides.push(s);
    }

    pub fn pop(&mut self, s: usize) -> Result<()> {
        match self.strides.last() {
            Some(&last) if last == s => {
                self.strides.pop();
                Ok(())
            }
            Some(&last) => Err(Error::invalid(format!(
                "inverse PGP with stride {s} does not match the most recent PGP stride {last}"
            ))),
            None => Err(Error::invalid("inverse PGP applied to a tensor with no PGP branches")),
        }
    }

    /// Grid coordinates selected by branch `k`, oldest application first.
    pub fn branch_coords(&self, mut k: usize) -> Vec<GridCoord> {
        let mut coords = vec![GridCoord::new(0, 0); self.strides.len()];
        let mut inner = self.branch_count();
        for (level, &s) in self.strides.iter().enumerate().rev() {
            inner /= s * s;
            let idx = k / inner;
            k %= inner;
            coords[level] = GridCoord::new(idx / s, idx % s);
        }
        coords
    }

    /// Offset in original-resolution pixels of the first cell sampled by branch `k`.
    pub fn branch_offset(&self, k: usize) -> GridCoord {
        let mut scale = 1;
        let mut off = GridCoord::new(0, 0);
        for (c, &s) in self.branch_coords(k).iter().zip(&self.strides) {
            off.i += c.i * scale;
            off.j += c.j * scale;
            scale *= s;
        }
        off
    }

    pub fn check(&self, shape: Shape) -> Result<()> {
        if self.base_batch == 0 || shape.b != self.rows() {
            return Err(Error::shape(format!(
                "batch {} is not base batch {} × {} branches",
                shape.b,
                self.base_batch,
                self.branch_count()
            )));
        }
        Ok(())
    }
}

/// A tensor whose batch axis holds several PGP branches.
#[derive(Debug, Clone, PartialEq)]
pub struct BranchStack<T> {
    pub tensor: Tensor<T>,
    pub layout: BranchLayout,
}

impl<T: Scalar> BranchStack<T> {
    pub fn new(tensor: Tensor<T>, layout: BranchLayout) -> Result<Self> {
        layout.check(tensor.shape())?;
        Ok(BranchStack { tensor, layout })
    }

    /// A plain tensor viewed as a single branch.
    pub fn from_tensor(tensor: Tensor<T>) -> Self {
        let layout = BranchLayout::single(tensor.shape().b);
        BranchStack { tensor, layout }
    }

    pub fn base_batch(&self) -> usize {
        self.layout.base_batch
    }

    pub fn branch_count(&self) -> usize {
        self.layout.branch_count()
    }

    pub fn branch(&self, k: usize) -> Result<Tensor<T>> {
        let b = self.layout.base_batch;
        self.tensor.batch_slice(k * b, (k + 1) * b)
    }

    pub fn into_tensor(self) -> Tensor<T> {
        self.tensor
    }
}

/// Output size of grid pooling along one axis: `ceil((n − i)/s)`.
fn gp_extent(n: usize, offset: usize, s: usize) -> usize {
    if offset >= n {
        0
    } else {
        (n - offset).div_ceil(s)
    }
}

fn gather_grid<T: Scalar>(x: &[T], xs: Shape, s: usize, coord: GridCoord, out: &mut Vec<T>) {
    let oh = gp_extent(xs.h, coord.i, s);
    let ow = gp_extent(xs.w, coord.j, s);
    for b in 0..xs.b {
        for c in 0..xs.c {
            let base = xs.offset(b, c, 0, 0);
            for p in 0..oh {
                let row = base + (s * p + coord.i) * xs.w + coord.j;
                out.extend((0..ow).map(|q| x[row + s * q]));
            }
        }
    }
}

/// `out[b,c,p,q] = x[b,c, s·p+i, s·q+j]`.
pub fn grid_pool<T: Scalar>(x: &Tensor<T>, s: usize, coord: GridCoord) -> Result<Tensor<T>> {
    coord.check(s)?;
    let xs = x.shape();
    let os = Shape::new(xs.b, xs.c, gp_extent(xs.h, coord.i, s), gp_extent(xs.w, coord.j, s));
    let mut out = Vec::with_capacity(os.numel());
    gather_grid(x.data(), xs, s, coord, &mut out);
    Tensor::new(os, out)
}

/// Adjoint of [`grid_pool`]: scatters into a zero tensor of shape `xs`.
pub fn grid_pool_backward<T: Scalar>(dy: &[T], xs: Shape, s: usize, coord: GridCoord) -> Vec<T> {
    let oh = gp_extent(xs.h, coord.i, s);
    let ow = gp_extent(xs.w, coord.j, s);
    let mut dx = vec![T::zero(); xs.numel()];
    let mut it = dy.iter();
    for b in 0..xs.b {
        for c in 0..xs.c {
            let base = xs.offset(b, c, 0, 0);
            for p in 0..oh {
                let row = base + (s * p + coord.i) * xs.w + coord.j;
                for q in 0..ow {
                    dx[row + s * q] = *it.next().unwrap();
                }
            }
        }
    }
    dx
}

fn check_divisible(xs: Shape, s: usize) -> Result<()> {
    if s == 0 {
        return Err(Error::invalid("PGP stride must be ≥ 1"));
    }
    if xs.h % s != 0 || xs.w % s != 0 {
        return Err(Error::shape(format!(
            "PGP needs spatial dims divisible by the stride: h = {}, w = {}, s = {s}",
            xs.h, xs.w
        )));
    }
    Ok(())
}

/// Shape after PGP with stride `s`.
pub fn pgp_shape(xs: Shape, s: usize) -> Result<Shape> {
    check_divisible(xs, s)?;
    Ok(Shape::new(xs.b * s * s, xs.c, xs.h / s, xs.w / s))
}

/// Shape after inverse PGP with stride `s`.
pub fn pgp_inverse_shape(ys: Shape, s: usize) -> Result<Shape> {
    if s == 0 {
        return Err(Error::invalid("PGP stride must be ≥ 1"));
    }
    if ys.b % (s * s) != 0 {
        return Err(Error::shape(format!(
            "inverse PGP with stride {s} needs a batch divisible by {}, got {}",
            s * s,
            ys.b
        )));
    }
    Ok(Shape::new(ys.b / (s * s), ys.c, ys.h * s, ys.w * s))
}

/// PGP on raw data: every grid coordinate in row-major order, stacked on the batch axis.
pub fn pgp_data<T: Scalar>(x: &[T], xs: Shape, s: usize) -> Result<(Vec<T>, Shape)> {
    let ys = pgp_shape(xs, s)?;
    let mut out = Vec::with_capacity(ys.numel());
    for coord in GridCoord::row_major(s) {
        gather_grid(x, xs, s, coord, &mut out);
    }
    Ok((out, ys))
}

/// Inverse PGP on raw data: `out[b,c,s·p+i,s·q+j] = branch_(i,j)[b,c,p,q]`.
pub fn pgp_inverse_data<T: Scalar>(y: &[T], ys: Shape, s: usize) -> Result<(Vec<T>, Shape)> {
    let xs = pgp_inverse_shape(ys, s)?;
    let mut out = vec![T::zero(); xs.numel()];
    let block = xs.numel() / (s * s);
    for (k, coord) in GridCoord::row_major(s).enumerate() {
        let src = &y[k * block..(k + 1) * block];
        let mut it = src.iter();
        for b in 0..xs.b {
            for c in 0..xs.c {
                let base = xs.offset(b, c, 0, 0);
                for p in 0..ys.h {
                    let row = base + (s * p + coord.i) * xs.w + coord.j;
                    for q in 0..ys.w {
                        out[row + s * q] = *it.next().unwrap();
                    }
                }
            }
        }
    }
    Ok((out, xs))
}

/// Parallel grid pooling of a branch stack (a plain tensor is one branch).
pub fn pgp<T: Scalar>(x: &BranchStack<T>, s: usize) -> Result<BranchStack<T>> {
    let (data, ys) = pgp_data(x.tensor.data(), x.tensor.shape(), s)?;
    let mut layout = x.layout.clone();
    layout.push(s);
    BranchStack::new(Tensor::new(ys, data)?, layout)
}

/// PGP of a plain tensor.
pub fn pgp_tensor<T: Scalar>(x: &Tensor<T>, s: usize) -> Result<BranchStack<T>> {
    pgp(&BranchStack::from_tensor(x.clone()), s)
}

/// Reassembles the branches of the most recent PGP application.
pub fn pgp_inverse<T: Scalar>(y: &BranchStack<T>, s: usize) -> Result<BranchStack<T>> {
    let mut layout = y.layout.clone();
    layout.pop(s)?;
    let (data, xs) = pgp_inverse_data(y.tensor.data(), y.tensor.shape(), s)?;
    BranchStack::new(Tensor::new(xs, data)?, layout)
}

/// Explicit zero padding of `p` pixels on every side.
pub fn zero_pad<T: Scalar>(x: &Tensor<T>, p: usize) -> Tensor<T> {
    let xs = x.shape();
    let ys = Shape::new(xs.b, xs.c, xs.h + 2 * p, xs.w + 2 * p);
    let mut out = vec![T::zero(); ys.numel()];
    for b in 0..xs.b {
        for c in 0..xs.c {
            for h in 0..xs.h {
                let src = xs.offset(b, c, h, 0);
                let dst = ys.offset(b, c, h + p, p);
                out[dst..dst + xs.w].copy_from_slice(&x.data()[src..src + xs.w]);
            }
        }
    }
    Tensor::new(ys, out).expect("padded shape is consistent")
}

/// Adjoint of [`zero_pad`]: crops the border.
pub fn zero_pad_backward<T: Scalar>(dy: &[T], xs: Shape, p: usize) -> Vec<T> {
    let ys = Shape::new(xs.b, xs.c, xs.h + 2 * p, xs.w + 2 * p);
    let mut dx = Vec::with_capacity(xs.numel());
    for b in 0..xs.b {
        for c in 0..xs.c {
            for h in 0..xs.h {
                let src = ys.offset(b, c, h + p, p);
                dx.extend_from_slice(&dy[src..src + xs.w]);
            }
        }
    }
    dx
}

/// The stride-1 spatial operation whose strided version is being factored.
#[derive(Debug, Clone, Copy)]
pub enum PoolTarget<'a, T> {
    Conv {
        weight: &'a Tensor<T>,
        bias: Option<&'a Tensor<T>>,
        spec: ConvSpec,
    },
    AvgPool {
        kernel: usize,
        padding: usize,
    },
}

impl<T: Scalar> PoolTarget<'_, T> {
    /// Runs the operation with the given stride.
    pub fn apply(&self, x: &Tensor<T>, stride: usize) -> Result<Tensor<T>> {
        match *self {
            PoolTarget::Conv { weight, bias, spec } => conv2d(x, weight, bias, &spec.stride(stride)),
            PoolTarget::AvgPool { kernel, padding } => {
                avgpool2d_window(x, &Window::new(kernel, stride, 1, padding))
            }
        }
    }
}

/// `G^s_(0,0)(F^1(x))`: the stride-1 operation followed by grid pooling.
pub fn two_step_downsample<T: Scalar>(x: &Tensor<T>, op: PoolTarget<'_, T>, s: usize) -> Result<Tensor<T>> {
    if let PoolTarget::Conv { spec, .. } = op {
        if spec.stride != 1 {
            return Err(Error::invalid(format!(
                "two-step factorization needs the stride-1 operation, got stride {}",
                spec.stride
            )));
        }
    }
    let dense = op.apply(x, 1)?;
    grid_pool(&dense, s, GridCoord::new(0, 0))
}

/// Applies a batch-agnostic operation to all branches at once.
pub fn branch_map<T: Scalar>(
    y: &BranchStack<T>,
    f: impl FnOnce(&Tensor<T>) -> Result<Tensor<T>>,
) -> Result<BranchStack<T>> {
    let out = f(&y.tensor)?;
    if out.shape().b != y.tensor.shape().b {
        return Err(Error::shape(format!(
            "branch_map operation changed the batch from {} to {}",
            y.tensor.shape().b,
            out.shape().b
        )));
    }
    BranchStack::new(out, y.layout.clone())
}

/// Per-sample mean over branches of logits (or of probabilities).
pub fn branch_aggregate<T: Scalar>(logits: &BranchStack<T>, mode: AggregateMode) -> Result<Tensor<T>> {
    let s = logits.tensor.shape();
    if s.plane() != 1 {
        return Err(Error::shape(format!(
            "branch aggregation expects (rows, classes, 1, 1), got {s}"
        )));
    }
    let values = match mode {
        AggregateMode::Logits => logits.tensor.clone(),
        AggregateMode::Probs => softmax(&logits.tensor)?,
    };
    Ok(mean_over_branches(&values, logits.layout.branch_count()))
}

/// Averages the `branches` consecutive row blocks of `x`.
pub fn mean_over_branches<T: Scalar>(x: &Tensor<T>, branches: usize) -> Tensor<T> {
    let s = x.shape();
    let base = s.b / branches;
    let per = base * s.c * s.plane();
    let inv = T::one() / T::from_usize(branches).unwrap();
    let mut out = vec![T::zero(); per];
    for block in x.data().chunks(per) {
        for (o, &v) in out.iter_mut().zip(block) {
            *o += v;
        }
    }
    out.iter_mut().for_each(|v| *v *= inv);
    Tensor::new(s.with_batch(base), out).expect("consistent shape")
}

pub fn mean_over_branches_backward<T: Scalar>(dy: &[T], branches: usize) -> Vec<T> {
    let inv = T::one() / T::from_usize(branches).unwrap();
    let scaled: Vec<T> = dy.iter().map(|&g| g * inv).collect();
    scaled.repeat(branches)
}

/// Labels repeated once per branch, matching the stacked row order.
pub fn tile_labels(labels: &[usize], branches: usize) -> Vec<usize> {
    labels.repeat(branches)
}

/// Mean softmax cross-entropy over every row, each branch supervised with the sample label.
pub fn branch_loss<T: Scalar>(logits: &BranchStack<T>, labels: &[usize]) -> Result<T> {
    if labels.len() != logits.base_batch() {
        return Err(Error::shape(format!(
            "{} labels for a base batch of {}",
            labels.len(),
            logits.base_batch()
        )));
    }
    let tiled = tile_labels(labels, logits.branch_count());
    softmax_cross_entropy(&logits.tensor, &tiled).map(|(l, _)| l)
}

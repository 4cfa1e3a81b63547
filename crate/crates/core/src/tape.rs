//! Reverse-mode differentiation by operation recording.
//!
//! Every operation applied through a [`Tape`] appends a node holding its value
//! and whatever it needs to replay its adjoint. [`Tape::backward`] walks the
//! nodes in reverse once, accumulates parameter gradients into the
//! [`ParamStore`] the leaves came from, and clears the tape.

use std::sync::atomic::{AtomicU64, Ordering};

use crate::error::{Error, Result};
use crate::gridpool::{
    self, grid_pool_backward, mean_over_branches, mean_over_branches_backward, pgp_data, pgp_inverse_data,
    tile_labels, zero_pad_backward, GridCoord,
};
use crate::ops::conv::{self, avgpool2d_backward, avgpool2d_window, ConvCache, ConvSpec, Window};
use crate::ops::nn::{self, BatchStats, BnCache, BnMode};
use crate::param::{ParamId, ParamStore};
use crate::tensor::{Scalar, Shape, Tensor};

static NEXT_TAPE: AtomicU64 = AtomicU64::new(1);

fn fresh_id() -> u64 {
    NEXT_TAPE.fetch_add(1, Ordering::Relaxed)
}

/// Handle to a value recorded on a particular tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var {
    index: usize,
    tape: u64,
}

#[derive(Debug)]
enum Source {
    Input,
    Param(ParamId),
    Constant,
}

#[derive(Debug)]
enum Op<T> {
    Leaf(Source),
    Conv {
        x: usize,
        w: usize,
        b: Option<usize>,
        spec: ConvSpec,
        cache: Option<ConvCache<T>>,
    },
    AvgPool {
        x: usize,
        win: Window,
    },
    Relu {
        x: usize,
    },
    BatchNorm {
        x: usize,
        gamma: usize,
        beta: usize,
        cache: Option<BnCache<T>>,
    },
    GlobalAvgPool {
        x: usize,
    },
    Linear {
        x: usize,
        w: usize,
        b: Option<usize>,
    },
    SoftmaxCrossEntropy {
        x: usize,
        labels: Vec<usize>,
        probs: Tensor<T>,
    },
    Softmax {
        x: usize,
    },
    GridPool {
        x: usize,
        s: usize,
        coord: GridCoord,
    },
    Pgp {
        x: usize,
        s: usize,
    },
    PgpInverse {
        x: usize,
        s: usize,
    },
    ZeroPad {
        x: usize,
        p: usize,
    },
    MeanBranches {
        x: usize,
        branches: usize,
    },
    Sum {
        x: usize,
    },
    WeightedSum {
        x: usize,
        weights: Vec<T>,
    },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// Gradients of non-parameter leaves, returned by [`Tape::backward`].
#[derive(Debug, Default)]
pub struct Gradients<T> {
    tape: u64,
    grads: Vec<(usize, Vec<T>)>,
    /// Number of nodes whose adjoint was replayed.
    pub visited: usize,
}

impl<T> Gradients<T> {
    /// Gradient of an input leaf that was created with `requires_grad`.
    pub fn get(&self, v: Var) -> Option<&[T]> {
        if v.tape != self.tape {
            return None;
        }
        self.grads
            .iter()
            .find(|(i, _)| *i == v.index)
            .map(|(_, g)| g.as_slice())
    }
}

/// Linear record of a forward pass.
pub struct Tape<T> {
    id: u64,
    nodes: Vec<Node<T>>,
    recording: bool,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    /// A tape that records adjoints.
    pub fn new() -> Self {
        Tape {
            id: fresh_id(),
            nodes: Vec::new(),
            recording: true,
        }
    }

    /// A tape for forward-only evaluation; nothing is differentiable.
    pub fn inference() -> Self {
        Tape {
            recording: false,
            ..Self::new()
        }
    }

    pub fn is_recording(&self) -> bool {
        self.recording
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn idx(&self, v: Var) -> Result<usize> {
        if v.tape != self.id || v.index >= self.nodes.len() {
            return Err(Error::Untaped);
        }
        Ok(v.index)
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad: needs_grad && self.recording,
        });
        Var {
            index: self.nodes.len() - 1,
            tape: self.id,
        }
    }

    fn grad_of(&self, ids: &[usize]) -> bool {
        self.recording && ids.iter().any(|&i| self.nodes[i].needs_grad)
    }

    pub fn value(&self, v: Var) -> Result<&Tensor<T>> {
        Ok(&self.nodes[self.idx(v)?].value)
    }

    pub fn shape(&self, v: Var) -> Result<Shape> {
        self.value(v).map(Tensor::shape)
    }

    /// Records an input; it is differentiable when `t.requires_grad()`.
    pub fn input(&mut self, t: Tensor<T>) -> Var {
        let needs = t.requires_grad();
        self.push(t, Op::Leaf(Source::Input), needs)
    }

    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf(Source::Constant), false)
    }

    /// Records a parameter; trainable parameters receive gradients on backward.
    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Var {
        let p = store.get(id);
        self.push(p.value.clone(), Op::Leaf(Source::Param(id)), p.trainable)
    }

    pub fn param_by_name(&mut self, store: &ParamStore<T>, name: &str) -> Result<Var> {
        let id = store.id(name)?;
        Ok(self.param(store, id))
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, spec: &ConvSpec) -> Result<Var> {
        let (xi, wi) = (self.idx(x)?, self.idx(w)?);
        let bi = b.map(|b| self.idx(b)).transpose()?;
        let (y, cache) = conv::conv2d_forward(
            &self.nodes[xi].value,
            &self.nodes[wi].value,
            bi.map(|i| &self.nodes[i].value),
            spec,
        )?;
        let mut ids = vec![xi, wi];
        ids.extend(bi);
        let needs = self.grad_of(&ids);
        let op = Op::Conv {
            x: xi,
            w: wi,
            b: bi,
            spec: *spec,
            cache: needs.then_some(cache),
        };
        Ok(self.push(y, op, needs))
    }

    pub fn avgpool2d(&mut self, x: Var, win: Window) -> Result<Var> {
        let xi = self.idx(x)?;
        let y = avgpool2d_window(&self.nodes[xi].value, &win)?;
        let needs = self.grad_of(&[xi]);
        Ok(self.push(y, Op::AvgPool { x: xi, win }, needs))
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let xi = self.idx(x)?;
        let y = nn::relu(&self.nodes[xi].value);
        let needs = self.grad_of(&[xi]);
        Ok(self.push(y, Op::Relu { x: xi }, needs))
    }

    /// Batch norm; in training mode also returns the batch statistics so the
    /// caller can update running averages.
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        mode: BnMode<'_, T>,
    ) -> Result<(Var, Option<BatchStats<T>>)> {
        let (xi, gi, bi) = (self.idx(x)?, self.idx(gamma)?, self.idx(beta)?);
        let (y, cache, stats) =
            nn::batchnorm2d_forward(&self.nodes[xi].value, &self.nodes[gi].value, &self.nodes[bi].value, mode)?;
        let needs = self.grad_of(&[xi, gi, bi]);
        let op = Op::BatchNorm {
            x: xi,
            gamma: gi,
            beta: bi,
            cache: needs.then_some(cache),
        };
        Ok((self.push(y, op, needs), stats))
    }

    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let xi = self.idx(x)?;
        let y = nn::global_avg_pool(&self.nodes[xi].value)?;
        let needs = self.grad_of(&[xi]);
        Ok(self.push(y, Op::GlobalAvgPool { x: xi }, needs))
    }

    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (xi, wi) = (self.idx(x)?, self.idx(w)?);
        let bi = b.map(|b| self.idx(b)).transpose()?;
        let y = nn::linear(&self.nodes[xi].value, &self.nodes[wi].value, bi.map(|i| &self.nodes[i].value))?;
        let mut ids = vec![xi, wi];
        ids.extend(bi);
        let needs = self.grad_of(&ids);
        Ok(self.push(y, Op::Linear { x: xi, w: wi, b: bi }, needs))
    }

    /// Mean softmax cross-entropy over the batch, as a `(1,1,1,1)` value.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let xi = self.idx(logits)?;
        let (loss, probs) = nn::softmax_cross_entropy(&self.nodes[xi].value, labels)?;
        let needs = self.grad_of(&[xi]);
        let op = Op::SoftmaxCrossEntropy {
            x: xi,
            labels: labels.to_vec(),
            probs,
        };
        Ok(self.push(Tensor::scalar(loss), op, needs))
    }

    /// Cross-entropy over a branch stack with `branches` branches, every
    /// branch supervised with the per-sample labels.
    pub fn branch_loss(&mut self, logits: Var, labels: &[usize], branches: usize) -> Result<Var> {
        let rows = self.shape(logits)?.b;
        if labels.len() * branches != rows {
            return Err(Error::shape(format!(
                "{} labels × {branches} branches does not match {rows} rows",
                labels.len()
            )));
        }
        self.softmax_cross_entropy(logits, &tile_labels(labels, branches))
    }

    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let xi = self.idx(x)?;
        let y = nn::softmax(&self.nodes[xi].value)?;
        let needs = self.grad_of(&[xi]);
        Ok(self.push(y, Op::Softmax { x: xi }, needs))
    }

    pub fn grid_pool(&mut self, x: Var, s: usize, coord: GridCoord) -> Result<Var> {
        let xi = self.idx(x)?;
        let y = gridpool::grid_pool(&self.nodes[xi].value, s, coord)?;
        let needs = self.grad_of(&[xi]);
        Ok(self.push(y, Op::GridPool { x: xi, s, coord }, needs))
    }

    pub fn pgp(&mut self, x: Var, s: usize) -> Result<Var> {
        let xi = self.idx(x)?;
        let xv = &self.nodes[xi].value;
        let (data, ys) = pgp_data(xv.data(), xv.shape(), s)?;
        let needs = self.grad_of(&[xi]);
        Ok(self.push(Tensor::new(ys, data)?, Op::Pgp { x: xi, s }, needs))
    }

    pub fn pgp_inverse(&mut self, x: Var, s: usize) -> Result<Var> {
        let xi = self.idx(x)?;
        let xv = &self.nodes[xi].value;
        let (data, ys) = pgp_inverse_data(xv.data(), xv.shape(), s)?;
        let needs = self.grad_of(&[xi]);
        Ok(self.push(Tensor::new(ys, data)?, Op::PgpInverse { x: xi, s }, needs))
    }

    pub fn zero_pad(&mut self, x: Var, p: usize) -> Result<Var> {
        let xi = self.idx(x)?;
        let y = gridpool::zero_pad(&self.nodes[xi].value, p);
        let needs = self.grad_of(&[xi]);
        Ok(self.push(y, Op::ZeroPad { x: xi, p }, needs))
    }

    /// Averages `branches` consecutive row blocks.
    pub fn mean_branches(&mut self, x: Var, branches: usize) -> Result<Var> {
        let xi = self.idx(x)?;
        let rows = self.nodes[xi].value.shape().b;
        if branches == 0 || rows % branches != 0 {
            return Err(Error::shape(format!(
                "{rows} rows cannot be split into {branches} branches"
            )));
        }
        let y = mean_over_branches(&self.nodes[xi].value, branches);
        let needs = self.grad_of(&[xi]);
        Ok(self.push(y, Op::MeanBranches { x: xi, branches }, needs))
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let xi = self.idx(x)?;
        let y = Tensor::scalar(self.nodes[xi].value.sum());
        let needs = self.grad_of(&[xi]);
        Ok(self.push(y, Op::Sum { x: xi }, needs))
    }

    /// `Σ x ⊙ weights`, a scalar projection handy for checking gradients of
    /// operations with tensor outputs.
    pub fn weighted_sum(&mut self, x: Var, weights: Vec<T>) -> Result<Var> {
        let xi = self.idx(x)?;
        let xv = &self.nodes[xi].value;
        if weights.len() != xv.len() {
            return Err(Error::shape(format!(
                "{} weights for {} elements",
                weights.len(),
                xv.len()
            )));
        }
        let y = Tensor::scalar(xv.data().iter().zip(&weights).map(|(&a, &b)| a * b).sum());
        let needs = self.grad_of(&[xi]);
        Ok(self.push(y, Op::WeightedSum { x: xi, weights }, needs))
    }

    /// Replays adjoints from a scalar `loss`, accumulating parameter gradients
    /// into `store`. The tape is cleared afterwards; its old handles become invalid.
    pub fn backward(&mut self, loss: Var, store: &mut ParamStore<T>) -> Result<Gradients<T>> {
        let li = self.idx(loss)?;
        if !self.recording {
            return Err(Error::invalid("backward on an inference tape"));
        }
        if self.nodes[li].value.len() != 1 {
            return Err(Error::shape(format!(
                "backward needs a scalar loss, got shape {}",
                self.nodes[li].value.shape()
            )));
        }
        let nodes = std::mem::take(&mut self.nodes);
        let old_id = self.id;
        self.id = fresh_id();

        let mut grads: Vec<Option<Vec<T>>> = Vec::with_capacity(nodes.len());
        grads.resize_with(nodes.len(), || None);
        grads[li] = Some(vec![T::one()]);
        let mut out = Gradients {
            tape: old_id,
            grads: Vec::new(),
            visited: 0,
        };

        for i in (0..=li).rev() {
            let node = &nodes[i];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else {
                continue;
            };
            out.visited += 1;
            let val = |j: usize| &nodes[j].value;
            let mut acc = |j: usize, d: Vec<T>| {
                if !nodes[j].needs_grad {
                    return;
                }
                match &mut grads[j] {
                    Some(existing) => existing.iter_mut().zip(d).for_each(|(e, v)| *e += v),
                    slot @ None => *slot = Some(d),
                }
            };
            match &node.op {
                Op::Leaf(Source::Param(id)) => {
                    let p = store.get_mut(*id);
                    if p.grad.len() != g.len() {
                        return Err(Error::shape(format!(
                            "gradient for `{}` does not match its size; wrong parameter store?",
                            p.name
                        )));
                    }
                    p.grad.iter_mut().zip(&g).for_each(|(a, &b)| *a += b);
                }
                Op::Leaf(Source::Input) => out.grads.push((i, g)),
                Op::Leaf(Source::Constant) => {}
                Op::Conv { x, w, b, spec, cache } => {
                    let cache = cache.as_ref().expect("cached when differentiable");
                    let cg = conv::conv2d_backward(&g, val(*w), spec, cache, nodes[*x].needs_grad);
                    if let Some(dx) = cg.dx {
                        acc(*x, dx);
                    }
                    acc(*w, cg.dw);
                    if let Some(b) = b {
                        acc(*b, cg.db);
                    }
                }
                Op::AvgPool { x, win } => {
                    let dx = avgpool2d_backward(&g, val(*x).shape(), node.value.shape(), win);
                    acc(*x, dx);
                }
                Op::Relu { x } => acc(*x, nn::relu_backward(&g, val(*x).data())),
                Op::BatchNorm { x, gamma, beta, cache } => {
                    let cache = cache.as_ref().expect("cached when differentiable");
                    let (dx, dg, db) = nn::batchnorm2d_backward(&g, val(*x).shape(), val(*gamma).data(), cache);
                    acc(*x, dx);
                    acc(*gamma, dg);
                    acc(*beta, db);
                }
                Op::GlobalAvgPool { x } => acc(*x, nn::global_avg_pool_backward(&g, val(*x).shape())),
                Op::Linear { x, w, b } => {
                    let (dx, dw, db) = nn::linear_backward(&g, val(*x), val(*w));
                    acc(*x, dx);
                    acc(*w, dw);
                    if let Some(b) = b {
                        acc(*b, db);
                    }
                }
                Op::SoftmaxCrossEntropy { x, labels, probs } => {
                    acc(*x, nn::softmax_cross_entropy_backward(g[0], probs, labels));
                }
                Op::Softmax { x } => {
                    let p = &node.value;
                    let c = p.shape().c;
                    let mut dx = vec![T::zero(); p.len()];
                    for ((row, grow), drow) in p.data().chunks(c).zip(g.chunks(c)).zip(dx.chunks_mut(c)) {
                        let dot: T = row.iter().zip(grow).map(|(&a, &b)| a * b).sum();
                        for ((d, &pv), &gv) in drow.iter_mut().zip(row).zip(grow) {
                            *d = pv * (gv - dot);
                        }
                    }
                    acc(*x, dx);
                }
                Op::GridPool { x, s, coord } => {
                    acc(*x, grid_pool_backward(&g, val(*x).shape(), *s, *coord));
                }
                Op::Pgp { x, s } => {
                    let (dx, _) = pgp_inverse_data(&g, node.value.shape(), *s)?;
                    acc(*x, dx);
                }
                Op::PgpInverse { x, s } => {
                    let (dx, _) = pgp_data(&g, node.value.shape(), *s)?;
                    acc(*x, dx);
                }
                Op::ZeroPad { x, p } => acc(*x, zero_pad_backward(&g, val(*x).shape(), *p)),
                Op::MeanBranches { x, branches } => acc(*x, mean_over_branches_backward(&g, *branches)),
                Op::Sum { x } => acc(*x, vec![g[0]; val(*x).len()]),
                Op::WeightedSum { x, weights } => acc(*x, weights.iter().map(|&w| w * g[0]).collect()),
            }
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::param::Parameter;

    #[test]
    fn sum_gives_ones() {
        let mut tape = Tape::<f64>::new();
        let x = tape.input(Tensor::arange(Shape::new(2, 3, 2, 2)).with_requires_grad(true));
        let loss = tape.sum(x).unwrap();
        let grads = tape.backward(loss, &mut ParamStore::new()).unwrap();
        assert!(grads.get(x).unwrap().iter().all(|&g| g == 1.0));
    }

    #[test]
    fn identity_conv_gives_ones() {
        let mut store = ParamStore::<f64>::new();
        let spec = ConvSpec::new(2, 2, 1);
        let w = Tensor::from_fn(spec.weight_shape(), |o, c, _, _| if o == c { 1.0 } else { 0.0 });
        let wid = store.insert(Parameter::new("w", w, vec![2, 2, 1, 1], true).unwrap()).unwrap();
        let mut tape = Tape::new();
        let x = tape.input(Tensor::arange(Shape::new(1, 2, 3, 3)).with_requires_grad(true));
        let wv = tape.param(&store, wid);
        let y = tape.conv2d(x, wv, None, &spec).unwrap();
        let loss = tape.sum(y).unwrap();
        let grads = tape.backward(loss, &mut store).unwrap();
        assert!(grads.get(x).unwrap().iter().all(|&g| g == 1.0));
        // dL/dw[o,c] = Σ x[c] for the identity-summed output.
        assert_eq!(store.get(wid).grad[0], (0..9).sum::<usize>() as f64);
    }

    #[test]
    fn backward_clears_and_invalidates() {
        let mut tape = Tape::<f64>::new();
        let x = tape.input(Tensor::scalar(2.0).with_requires_grad(true));
        let loss = tape.sum(x).unwrap();
        tape.backward(loss, &mut ParamStore::new()).unwrap();
        assert!(tape.is_empty());
        assert!(matches!(tape.backward(loss, &mut ParamStore::new()), Err(Error::Untaped)));
        assert!(matches!(tape.relu(x), Err(Error::Untaped)));
    }

    #[test]
    fn foreign_var_is_untaped() {
        let mut a = Tape::<f64>::new();
        let mut b = Tape::<f64>::new();
        let x = a.input(Tensor::scalar(1.0));
        assert!(matches!(b.sum(x), Err(Error::Untaped)));
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let mut tape = Tape::<f64>::new();
        let x = tape.input(Tensor::zeros(Shape::new(1, 1, 2, 2)).with_requires_grad(true));
        assert!(tape.backward(x, &mut ParamStore::new()).is_err());
    }

    #[test]
    fn each_node_visited_once() {
        let mut tape = Tape::<f64>::new();
        let x = tape.input(Tensor::arange(Shape::new(1, 1, 4, 4)).with_requires_grad(true));
        let a = tape.relu(x).unwrap();
        let b = tape.pgp(a, 2).unwrap();
        let c = tape.pgp_inverse(b, 2).unwrap();
        // Fan-out: `c` feeds two consumers that rejoin through the loss graph.
        let d = tape.zero_pad(c, 1).unwrap();
        let loss = tape.sum(d).unwrap();
        let n = tape.len();
        let grads = tape.backward(loss, &mut ParamStore::new()).unwrap();
        assert_eq!(grads.visited, n);
    }

    #[test]
    fn inference_tape_cannot_backward() {
        let mut tape = Tape::<f64>::inference();
        let x = tape.input(Tensor::scalar(1.0).with_requires_grad(true));
        let loss = tape.sum(x).unwrap();
        assert!(tape.backward(loss, &mut ParamStore::new()).is_err());
    }
}

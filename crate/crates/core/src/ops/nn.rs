//! Pointwise, normalization, pooling-to-vector and classifier kernels.

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Shape, Tensor};

pub const BN_EPS: f64 = 1e-5;

pub fn relu<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    x.map(|v| if v > T::zero() { v } else { T::zero() })
}

pub fn relu_backward<T: Scalar>(dy: &[T], x: &[T]) -> Vec<T> {
    dy.iter()
        .zip(x)
        .map(|(&g, &v)| if v > T::zero() { g } else { T::zero() })
        .collect()
}

/// Per-channel statistics of one batch-norm application.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchStats<T> {
    pub mean: Vec<T>,
    /// Biased variance (divisor `n`), as used for normalization.
    pub var: Vec<T>,
    /// Elements per channel.
    pub count: usize,
}

/// Which statistics a batch-norm layer normalizes with.
#[derive(Debug, Clone, Copy)]
pub enum BnMode<'a, T> {
    /// Statistics of the current batch (every row of a branch stack jointly).
    Train,
    /// Running statistics `(mean, var)`.
    Eval { mean: &'a [T], var: &'a [T] },
}

/// Cached values needed to differentiate batch norm.
#[derive(Debug, Clone)]
pub struct BnCache<T> {
    pub xhat: Vec<T>,
    pub inv_std: Vec<T>,
    pub train: bool,
}

fn channel_slices<T: Scalar>(s: Shape) -> impl Iterator<Item = (usize, std::ops::Range<usize>)> {
    let plane = s.plane();
    (0..s.b).flat_map(move |b| {
        (0..s.c).map(move |c| {
            let start = s.offset(b, c, 0, 0);
            (c, start..start + plane)
        })
    })
}

fn check_affine<T: Scalar>(x: &Tensor<T>, gamma: &Tensor<T>, beta: &Tensor<T>) -> Result<()> {
    let c = x.shape().c;
    if gamma.len() != c || beta.len() != c {
        return Err(Error::shape(format!(
            "batch norm affine terms have {}/{} elements, expected channels = {c}",
            gamma.len(),
            beta.len()
        )));
    }
    Ok(())
}

pub fn batchnorm2d_forward<T: Scalar>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    mode: BnMode<'_, T>,
) -> Result<(Tensor<T>, BnCache<T>, Option<BatchStats<T>>)> {
    check_affine(x, gamma, beta)?;
    let s = x.shape();
    let eps = T::from_f64(BN_EPS).unwrap();
    let count = s.b * s.plane();
    let (mean, var, stats) = match mode {
        BnMode::Train => {
            if count == 0 {
                return Err(Error::shape("batch norm over an empty batch"));
            }
            let n = T::from_usize(count).unwrap();
            let mut mean = vec![T::zero(); s.c];
            for (c, r) in channel_slices::<T>(s) {
                mean[c] += x.data()[r].iter().copied().sum::<T>();
            }
            mean.iter_mut().for_each(|m| *m = *m / n);
            let mut var = vec![T::zero(); s.c];
            for (c, r) in channel_slices::<T>(s) {
                let m = mean[c];
                var[c] += x.data()[r].iter().map(|&v| (v - m) * (v - m)).sum::<T>();
            }
            var.iter_mut().for_each(|v| *v = *v / n);
            let stats = BatchStats {
                mean: mean.clone(),
                var: var.clone(),
                count,
            };
            (mean, var, Some(stats))
        }
        BnMode::Eval { mean, var } => {
            if mean.len() != s.c || var.len() != s.c {
                return Err(Error::shape("running statistics do not match channel count"));
            }
            (mean.to_vec(), var.to_vec(), None)
        }
    };
    let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
    let mut xhat = vec![T::zero(); s.numel()];
    let mut y = vec![T::zero(); s.numel()];
    for (c, r) in channel_slices::<T>(s) {
        let (m, is, g, bt) = (mean[c], inv_std[c], gamma.data()[c], beta.data()[c]);
        for i in r {
            let h = (x.data()[i] - m) * is;
            xhat[i] = h;
            y[i] = g * h + bt;
        }
    }
    let cache = BnCache {
        xhat,
        inv_std,
        train: stats.is_some(),
    };
    Ok((Tensor::new(s, y)?, cache, stats))
}

/// Returns `(dx, dgamma, dbeta)`.
pub fn batchnorm2d_backward<T: Scalar>(
    dy: &[T],
    s: Shape,
    gamma: &[T],
    cache: &BnCache<T>,
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let mut dgamma = vec![T::zero(); s.c];
    let mut dbeta = vec![T::zero(); s.c];
    for (c, r) in channel_slices::<T>(s) {
        for i in r {
            dgamma[c] += dy[i] * cache.xhat[i];
            dbeta[c] += dy[i];
        }
    }
    let mut dx = vec![T::zero(); s.numel()];
    if cache.train {
        let n = T::from_usize(s.b * s.plane()).unwrap();
        for (c, r) in channel_slices::<T>(s) {
            let k = gamma[c] * cache.inv_std[c] / n;
            for i in r {
                dx[i] = k * (n * dy[i] - dbeta[c] - cache.xhat[i] * dgamma[c]);
            }
        }
    } else {
        for (c, r) in channel_slices::<T>(s) {
            let k = gamma[c] * cache.inv_std[c];
            for i in r {
                dx[i] = k * dy[i];
            }
        }
    }
    (dx, dgamma, dbeta)
}

/// Mean over the spatial plane, giving shape `(b, c, 1, 1)`.
pub fn global_avg_pool<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let s = x.shape();
    if s.plane() == 0 {
        return Err(Error::shape("global average pool over an empty plane"));
    }
    let n = T::from_usize(s.plane()).unwrap();
    let data = x
        .data()
        .chunks(s.plane())
        .map(|p| p.iter().copied().sum::<T>() / n)
        .collect();
    Tensor::new(Shape::new(s.b, s.c, 1, 1), data)
}

pub fn global_avg_pool_backward<T: Scalar>(dy: &[T], xs: Shape) -> Vec<T> {
    let n = T::from_usize(xs.plane()).unwrap();
    dy.iter()
        .flat_map(|&g| std::iter::repeat_n(g / n, xs.plane()))
        .collect()
}

fn check_linear<T: Scalar>(x: &Tensor<T>, w: &Tensor<T>, bias: Option<&Tensor<T>>) -> Result<usize> {
    let xs = x.shape();
    if xs.plane() != 1 {
        return Err(Error::shape(format!(
            "linear layer expects a (b, features, 1, 1) input, got {xs}; insert a global average pool"
        )));
    }
    let ws = w.shape();
    if ws.c != xs.c || ws.h != 1 || ws.w != 1 {
        return Err(Error::shape(format!(
            "linear weight {ws} does not accept {} input features",
            xs.c
        )));
    }
    if let Some(b) = bias {
        if b.len() != ws.b {
            return Err(Error::shape(format!(
                "linear bias has {} elements, expected out_features = {}",
                b.len(),
                ws.b
            )));
        }
    }
    Ok(ws.b)
}

/// `y = x·Wᵀ + b` with `x: (b, in, 1, 1)` and `W: (out, in, 1, 1)`.
pub fn linear<T: Scalar>(x: &Tensor<T>, w: &Tensor<T>, bias: Option<&Tensor<T>>) -> Result<Tensor<T>> {
    let out = check_linear(x, w, bias)?;
    let (rows, inp) = (x.shape().b, x.shape().c);
    let mut y = vec![T::zero(); rows * out];
    if let Some(b) = bias {
        for row in y.chunks_mut(out) {
            row.copy_from_slice(b.data());
        }
    }
    let beta = if bias.is_some() { T::one() } else { T::zero() };
    T::gemm(rows, inp, out, x.data(), (inp as isize, 1), w.data(), (1, inp as isize), beta, &mut y, (out as isize, 1));
    Tensor::new(Shape::new(rows, out, 1, 1), y)
}

/// Returns `(dx, dw, db)`.
pub fn linear_backward<T: Scalar>(dy: &[T], x: &Tensor<T>, w: &Tensor<T>) -> (Vec<T>, Vec<T>, Vec<T>) {
    let (rows, inp) = (x.shape().b, x.shape().c);
    let out = w.shape().b;
    let mut dx = vec![T::zero(); rows * inp];
    T::gemm(rows, out, inp, dy, (out as isize, 1), w.data(), (inp as isize, 1), T::zero(), &mut dx, (inp as isize, 1));
    let mut dw = vec![T::zero(); out * inp];
    T::gemm(out, rows, inp, dy, (1, out as isize), x.data(), (inp as isize, 1), T::zero(), &mut dw, (inp as isize, 1));
    let mut db = vec![T::zero(); out];
    for row in dy.chunks(out) {
        for (d, &g) in db.iter_mut().zip(row) {
            *d += g;
        }
    }
    (dx, dw, db)
}

/// Row-wise softmax of `(b, classes, 1, 1)` logits.
pub fn softmax<T: Scalar>(logits: &Tensor<T>) -> Result<Tensor<T>> {
    let s = logits.shape();
    if s.plane() != 1 {
        return Err(Error::shape(format!("softmax expects (b, classes, 1, 1), got {s}")));
    }
    let mut out = Vec::with_capacity(s.numel());
    for row in logits.data().chunks(s.c) {
        let m = row.iter().copied().fold(T::neg_infinity(), T::max);
        let start = out.len();
        let mut z = T::zero();
        for &v in row {
            let e = (v - m).exp();
            z += e;
            out.push(e);
        }
        out[start..].iter_mut().for_each(|e| *e = *e / z);
    }
    Tensor::new(s, out)
}

/// Mean softmax cross-entropy over the batch, plus the softmax probabilities.
pub fn softmax_cross_entropy<T: Scalar>(logits: &Tensor<T>, labels: &[usize]) -> Result<(T, Tensor<T>)> {
    let s = logits.shape();
    if labels.len() != s.b {
        return Err(Error::shape(format!(
            "{} labels for a batch of {}",
            labels.len(),
            s.b
        )));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= s.c) {
        return Err(Error::invalid(format!(
            "label {bad} out of range for {} classes",
            s.c
        )));
    }
    let probs = softmax(logits)?;
    let mut loss = T::zero();
    for (row, &l) in logits.data().chunks(s.c).zip(labels) {
        let m = row.iter().copied().fold(T::neg_infinity(), T::max);
        let lse = m + row.iter().map(|&v| (v - m).exp()).sum::<T>().ln();
        loss += lse - row[l];
    }
    Ok((loss / T::from_usize(s.b.max(1)).unwrap(), probs))
}

pub fn softmax_cross_entropy_backward<T: Scalar>(dloss: T, probs: &Tensor<T>, labels: &[usize]) -> Vec<T> {
    let s = probs.shape();
    let scale = dloss / T::from_usize(s.b.max(1)).unwrap();
    let mut dx = probs.data().to_vec();
    for (row, &l) in dx.chunks_mut(s.c).zip(labels) {
        row[l] -= T::one();
        row.iter_mut().for_each(|v| *v *= scale);
    }
    dx
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn relu_values() {
        let x = Tensor::<f32>::new(Shape::new(1, 1, 1, 2), vec![-1.0, 2.0]).unwrap();
        assert_eq!(relu(&x).data(), &[0.0, 2.0]);
    }

    #[test]
    fn uniform_logits_give_ln_c() {
        for c in [2usize, 4, 10] {
            let logits = Tensor::<f64>::full(Shape::new(3, c, 1, 1), 0.7);
            let (loss, _) = softmax_cross_entropy(&logits, &[0, c - 1, 1]).unwrap();
            assert!((loss - (c as f64).ln()).abs() < 1e-12);
        }
    }

    #[test]
    fn label_out_of_range() {
        let logits = Tensor::<f64>::zeros(Shape::new(1, 3, 1, 1));
        assert!(softmax_cross_entropy(&logits, &[3]).is_err());
        assert!(softmax_cross_entropy(&logits, &[0, 1]).is_err());
    }

    #[test]
    fn gap_direct_mean() {
        let x = Tensor::<f64>::new(Shape::new(1, 1, 2, 2), vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(global_avg_pool(&x).unwrap().data(), &[2.5]);
    }

    #[test]
    fn batchnorm_train_normalizes() {
        let s = Shape::new(4, 3, 5, 5);
        let x = Tensor::<f64>::from_fn(s, |b, c, h, w| ((b * 13 + c * 7 + h * 3 + w) % 17) as f64 * (c + 1) as f64 + c as f64);
        let g = Tensor::full(Shape::new(1, 3, 1, 1), 1.0);
        let b = Tensor::zeros(Shape::new(1, 3, 1, 1));
        let (y, _, stats) = batchnorm2d_forward(&x, &g, &b, BnMode::Train).unwrap();
        assert_eq!(stats.unwrap().count, 100);
        for c in 0..3 {
            let vals: Vec<f64> = (0..4)
                .flat_map(|bb| (0..25).map(move |i| (bb, i)))
                .map(|(bb, i)| y.at(bb, c, i / 5, i % 5))
                .collect();
            let mean = vals.iter().sum::<f64>() / 100.0;
            let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 100.0;
            assert!(mean.abs() < 1e-5);
            assert!((var - 1.0).abs() < 1e-5, "var {var}");
        }
    }

    #[test]
    fn batchnorm_zero_variance_is_finite() {
        let x = Tensor::<f64>::full(Shape::new(2, 1, 2, 2), 3.0);
        let g = Tensor::full(Shape::new(1, 1, 1, 1), 1.0);
        let b = Tensor::zeros(Shape::new(1, 1, 1, 1));
        let (y, _, _) = batchnorm2d_forward(&x, &g, &b, BnMode::Train).unwrap();
        assert!(y.data().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn linear_matches_manual() {
        let x = Tensor::<f64>::new(Shape::new(2, 3, 1, 1), vec![1.0, 2.0, 3.0, -1.0, 0.5, 0.0]).unwrap();
        let w = Tensor::new(Shape::new(2, 3, 1, 1), vec![0.1, 0.2, 0.3, -1.0, 1.0, 2.0]).unwrap();
        let b = Tensor::new(Shape::new(1, 2, 1, 1), vec![0.5, -0.5]).unwrap();
        let y = linear(&x, &w, Some(&b)).unwrap();
        let want = [1.4 + 0.5, 7.0 - 0.5, 0.0 + 0.5, 1.5 - 0.5];
        for (a, b) in y.data().iter().zip(want) {
            assert!((a - b).abs() < 1e-12);
        }
        assert!(linear(&Tensor::<f64>::zeros(Shape::new(1, 3, 2, 2)), &w, None).is_err());
    }
}

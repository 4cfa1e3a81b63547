//! Dilated convolution and its factorization into PGP, a shared-weight
//! stride-1 convolution, and inverse PGP.
//!
//! [`dilated_conv2d`] is a standalone direct-summation kernel; it does not go
//! through im2col or PGP, so it can serve as the reference for
//! [`dilated_via_pgp`].

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::gridpool::{pgp, pgp_inverse, BranchStack};
use crate::ops::conv::{conv2d, ConvSpec};
use crate::tensor::{Scalar, Shape, Tensor};

/// Tap spacing of a dilated kernel; `1` is an ordinary convolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct DilationRate(usize);

impl DilationRate {
    pub fn new(r: usize) -> Result<Self> {
        if r == 0 {
            return Err(Error::invalid("dilation rate must be ≥ 1"));
        }
        Ok(DilationRate(r))
    }

    pub fn get(self) -> usize {
        self.0
    }
}

/// Direct 2-D dilated cross-correlation with centered taps:
/// `y[b,o,i,j] = Σ_c Σ_{l,m} x[b,c, i + r·l − p, j + r·m − p] · w[o,c,l,m]`.
///
/// Stride must be 1. Sums accumulate in `f64`.
pub fn dilated_conv2d<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    spec: &ConvSpec,
) -> Result<Tensor<T>> {
    if spec.stride != 1 {
        return Err(Error::invalid(format!(
            "dilated_conv2d is stride-1 only, got stride {}",
            spec.stride
        )));
    }
    if w.shape() != spec.weight_shape() {
        return Err(Error::shape(format!(
            "weight {} does not match {}",
            w.shape(),
            spec.weight_shape()
        )));
    }
    let ys = spec.output_shape(x.shape())?;
    let xs = x.shape();
    let (k, r, p) = (spec.kernel, spec.dilation as isize, spec.padding as isize);
    let mut out = Vec::with_capacity(ys.numel());
    for b in 0..ys.b {
        for o in 0..ys.c {
            let b0 = bias.map_or(0.0, |t| t.data()[o].to_f64().unwrap());
            for i in 0..ys.h {
                for j in 0..ys.w {
                    let mut acc = b0;
                    for c in 0..xs.c {
                        for l in 0..k {
                            let iy = i as isize + r * l as isize - p;
                            if iy < 0 || iy >= xs.h as isize {
                                continue;
                            }
                            for m in 0..k {
                                let ix = j as isize + r * m as isize - p;
                                if ix < 0 || ix >= xs.w as isize {
                                    continue;
                                }
                                let xv = x.at(b, c, iy as usize, ix as usize).to_f64().unwrap();
                                acc += xv * w.at(o, c, l, m).to_f64().unwrap();
                            }
                        }
                    }
                    out.push(T::from_f64_lossy(acc));
                }
            }
        }
    }
    Tensor::new(ys, out)
}

/// One-dimensional dilated filter with one-based taps,
/// `y[i] = Σ_{l=1}^{L} x[i + r·l] · u[l]`, over the valid range.
pub fn dilated_conv1d_offset<T: Scalar>(x: &[T], u: &[T], r: usize) -> Result<Vec<T>> {
    if r == 0 || u.is_empty() {
        return Err(Error::invalid("need r ≥ 1 and a non-empty filter"));
    }
    let reach = r * u.len();
    if x.len() <= reach {
        return Err(Error::shape(format!(
            "input of length {} is too short for {} taps at rate {r}",
            x.len(),
            u.len()
        )));
    }
    Ok((0..x.len() - reach)
        .map(|i| (1..=u.len()).map(|l| x[i + r * l] * u[l - 1]).sum())
        .collect())
}

/// `PGP⁻¹(conv(PGP(x, r)))` where the convolution has stride 1, dilation 1
/// and same padding, shared across all `r²` branches.
pub fn dilated_via_pgp<T: Scalar>(x: &Tensor<T>, w: &Tensor<T>, bias: Option<&Tensor<T>>, r: usize) -> Result<Tensor<T>> {
    dilated_chain_via_pgp(x, &[(w, bias, r)])
}

/// A chain of same-padded dilated convolutions evaluated in PGP form.
///
/// Each rate must be a multiple of the previous one; moving from rate `R` to
/// `r` inserts a PGP with stride `r/R`, and all PGP levels are undone at the end.
pub fn dilated_chain_via_pgp<T: Scalar>(
    x: &Tensor<T>,
    layers: &[(&Tensor<T>, Option<&Tensor<T>>, usize)],
) -> Result<Tensor<T>> {
    let mut stack = BranchStack::from_tensor(x.clone());
    let mut rate = 1;
    for &(w, bias, r) in layers {
        DilationRate::new(r)?;
        if r % rate != 0 {
            return Err(Error::invalid(format!(
                "rate {r} is not a multiple of the preceding rate {rate}"
            )));
        }
        let step = r / rate;
        if step > 1 {
            stack = pgp(&stack, step)?;
        }
        rate = r;
        let ws = w.shape();
        let spec = ConvSpec::new(ws.c, ws.b, ws.h).same_padding();
        let y = conv2d(&stack.tensor, w, bias, &spec)?;
        stack = BranchStack::new(y, stack.layout)?;
    }
    while let Some(&s) = stack.layout.strides.last() {
        stack = pgp_inverse(&stack, s)?;
    }
    Ok(stack.tensor)
}

/// The same chain evaluated directly with [`dilated_conv2d`].
pub fn dilated_chain_direct<T: Scalar>(
    x: &Tensor<T>,
    layers: &[(&Tensor<T>, Option<&Tensor<T>>, usize)],
) -> Result<Tensor<T>> {
    let mut y = x.clone();
    for &(w, bias, r) in layers {
        let ws = w.shape();
        let spec = ConvSpec::new(ws.c, ws.b, ws.h).dilation(r).same_padding();
        y = dilated_conv2d(&y, w, bias, &spec)?;
    }
    Ok(y)
}

/// One row of the equivalence report.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DeviationRow {
    pub h: usize,
    pub w: usize,
    pub r: usize,
    pub seed: u64,
    pub max_abs_dev: f64,
    /// `max_abs_dev / max|reference|`.
    pub max_rel_dev: f64,
}

/// A stacked-rate case, e.g. rates `[2, 4]`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ChainRow {
    pub h: usize,
    pub w: usize,
    pub rates: Vec<usize>,
    pub seed: u64,
    pub max_abs_dev: f64,
    pub max_rel_dev: f64,
}

#[derive(Debug, Clone)]
pub struct DecompositionGrid {
    pub sizes: Vec<usize>,
    pub rates: Vec<usize>,
    pub seeds: Vec<u64>,
    pub chains: Vec<Vec<usize>>,
    pub batch: usize,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
}

impl Default for DecompositionGrid {
    fn default() -> Self {
        DecompositionGrid {
            sizes: vec![4, 8, 16],
            rates: vec![1, 2, 4],
            seeds: vec![0, 1, 2],
            chains: vec![vec![2, 4]],
            batch: 2,
            in_channels: 3,
            out_channels: 4,
            kernel: 3,
        }
    }
}

#[derive(Debug, Clone, Default, Serialize)]
pub struct DecompositionReport {
    pub rows: Vec<DeviationRow>,
    pub chains: Vec<ChainRow>,
}

impl DecompositionReport {
    pub fn max_rel_dev(&self) -> f64 {
        self.rows
            .iter()
            .map(|r| r.max_rel_dev)
            .chain(self.chains.iter().map(|c| c.max_rel_dev))
            .fold(0.0, f64::max)
    }
}

fn uniform_tensor<T: Scalar>(shape: Shape, rng: &mut ChaCha8Rng) -> Tensor<T> {
    let data = (0..shape.numel())
        .map(|_| T::from_f64_lossy(rng.random_range(-1.0..1.0)))
        .collect();
    Tensor::new(shape, data).expect("sized by shape")
}

fn deviation<T: Scalar>(got: &Tensor<T>, reference: &Tensor<T>) -> Result<(f64, f64)> {
    let abs = got.max_abs_diff(reference)?.to_f64().unwrap();
    let scale = reference.max_abs().to_f64().unwrap();
    let rel = if abs == 0.0 { 0.0 } else { abs / scale.max(f64::MIN_POSITIVE) };
    Ok((abs, rel))
}

/// Compares [`dilated_via_pgp`] with [`dilated_conv2d`] on random data over
/// the grid. Sizes not divisible by a rate are skipped.
pub fn decomposition_report<T: Scalar>(grid: &DecompositionGrid) -> Result<DecompositionReport> {
    let mut report = DecompositionReport::default();
    let k = grid.kernel;
    let wshape = Shape::new(grid.out_channels, grid.in_channels, k, k);
    for &size in &grid.sizes {
        for &seed in &grid.seeds {
            for &r in &grid.rates {
                if size % r != 0 {
                    continue;
                }
                let mut rng = ChaCha8Rng::seed_from_u64(seed ^ ((size as u64) << 32) ^ ((r as u64) << 48));
                let x = uniform_tensor::<T>(Shape::new(grid.batch, grid.in_channels, size, size), &mut rng);
                let w = uniform_tensor::<T>(wshape, &mut rng);
                let spec = ConvSpec::new(grid.in_channels, grid.out_channels, k).dilation(r).same_padding();
                let reference = dilated_conv2d(&x, &w, None, &spec)?;
                let got = dilated_via_pgp(&x, &w, None, r)?;
                let (max_abs_dev, max_rel_dev) = deviation(&got, &reference)?;
                report.rows.push(DeviationRow {
                    h: size,
                    w: size,
                    r,
                    seed,
                    max_abs_dev,
                    max_rel_dev,
                });
            }
            for rates in &grid.chains {
                if rates.iter().any(|&r| size % r != 0) {
                    continue;
                }
                let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_mul(7919) ^ size as u64);
                let x = uniform_tensor::<T>(Shape::new(grid.batch, grid.in_channels, size, size), &mut rng);
                let mut weights = Vec::new();
                let mut c_in = grid.in_channels;
                for _ in rates {
                    weights.push(uniform_tensor::<T>(Shape::new(grid.out_channels, c_in, k, k), &mut rng));
                    c_in = grid.out_channels;
                }
                let layers: Vec<_> = weights.iter().zip(rates).map(|(w, &r)| (w, None, r)).collect();
                let reference = dilated_chain_direct(&x, &layers)?;
                let got = dilated_chain_via_pgp(&x, &layers)?;
                let (max_abs_dev, max_rel_dev) = deviation(&got, &reference)?;
                report.chains.push(ChainRow {
                    h: size,
                    w: size,
                    rates: rates.clone(),
                    seed,
                    max_abs_dev,
                    max_rel_dev,
                });
            }
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gridpool::{grid_pool, pgp_tensor, GridCoord};

    #[test]
    fn offset_form_example() {
        let x: Vec<f64> = (0..7).map(f64::from).collect();
        assert_eq!(dilated_conv1d_offset(&x, &[1.0, 1.0], 2).unwrap(), vec![6.0, 8.0, 10.0]);
        assert!(dilated_conv1d_offset(&x, &[1.0, 1.0, 1.0, 1.0], 2).is_err());
    }

    #[test]
    fn offset_and_centered_forms_differ_by_a_shift() {
        // Centered taps at i + r·(l − (L−1)/2); one-based taps at i + r·l.
        let x: Vec<f64> = (0..20).map(|v| ((v * 7) % 5) as f64 - 1.5).collect();
        let u = [0.5, -1.0, 2.0];
        let r = 3;
        let lit = dilated_conv1d_offset(&x, &u, r).unwrap();
        let xt = Tensor::new(Shape::new(1, 1, 1, 20), x.clone()).unwrap();
        let wt = Tensor::new(Shape::new(1, 1, 1, 3), u.to_vec()).unwrap();
        // Row-vector kernel: run the centered 2-D kernel on a 1-row image with
        // a 3×3 kernel that is zero outside its middle row.
        let mut w3 = vec![0.0; 9];
        w3[3..6].copy_from_slice(wt.data());
        let w3 = Tensor::new(Shape::new(1, 1, 3, 3), w3).unwrap();
        let spec = ConvSpec::new(1, 1, 3).dilation(r).same_padding();
        let cen = dilated_conv2d(&xt, &w3, None, &spec).unwrap();
        let shift = r * (1 + (u.len() - 1) / 2);
        for (i, v) in lit.iter().enumerate() {
            assert!((v - cen.data()[i + shift]).abs() < 1e-12);
        }
    }

    #[test]
    fn all_ones_valid_region() {
        let x = Tensor::<f64>::full(Shape::new(1, 1, 9, 9), 1.0);
        let w = Tensor::full(Shape::new(1, 1, 3, 3), 1.0);
        let spec = ConvSpec::new(1, 1, 3).dilation(2);
        let y = dilated_conv2d(&x, &w, None, &spec).unwrap();
        assert_eq!(y.shape(), Shape::new(1, 1, 5, 5));
        assert!(y.data().iter().all(|&v| v == 9.0));
    }

    #[test]
    fn rate_one_is_plain_conv() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = uniform_tensor::<f64>(Shape::new(2, 3, 6, 6), &mut rng);
        let w = uniform_tensor::<f64>(Shape::new(4, 3, 3, 3), &mut rng);
        let spec = ConvSpec::new(3, 4, 3).padding(1);
        let a = dilated_conv2d(&x, &w, None, &spec).unwrap();
        let b = conv2d(&x, &w, None, &spec).unwrap();
        assert!(a.max_abs_diff(&b).unwrap() < 1e-12);
        let c = dilated_via_pgp(&x, &w, None, 1).unwrap();
        assert!(c.max_abs_diff(&b).unwrap() < 1e-12);
    }

    #[test]
    fn branch_outputs_are_residue_classes() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let x = uniform_tensor::<f64>(Shape::new(1, 2, 8, 8), &mut rng);
        let w = uniform_tensor::<f64>(Shape::new(3, 2, 3, 3), &mut rng);
        let r = 2;
        let full = dilated_conv2d(&x, &w, None, &ConvSpec::new(2, 3, 3).dilation(r).same_padding()).unwrap();
        let stack = pgp_tensor(&x, r).unwrap();
        let conv = conv2d(&stack.tensor, &w, None, &ConvSpec::new(2, 3, 3).same_padding()).unwrap();
        for (k, coord) in GridCoord::row_major(r).enumerate() {
            let branch = conv.batch_slice(k, k + 1).unwrap();
            let want = grid_pool(&full, r, coord).unwrap();
            assert!(branch.max_abs_diff(&want).unwrap() < 1e-12);
        }
    }

    #[test]
    fn rejects_bad_chains() {
        let x = Tensor::<f64>::zeros(Shape::new(1, 1, 8, 8));
        let w = Tensor::<f64>::zeros(Shape::new(1, 1, 3, 3));
        assert!(dilated_chain_via_pgp(&x, &[(&w, None, 2), (&w, None, 3)]).is_err());
        assert!(dilated_via_pgp(&Tensor::<f64>::zeros(Shape::new(1, 1, 6, 6)), &w, None, 4).is_err());
        assert!(DilationRate::new(0).is_err());
    }

    #[test]
    fn empty_grid_empty_report() {
        let grid = DecompositionGrid {
            sizes: vec![],
            ..Default::default()
        };
        let rep = decomposition_report::<f32>(&grid).unwrap();
        assert!(rep.rows.is_empty() && rep.chains.is_empty());
    }
}

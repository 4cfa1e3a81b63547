//! Strided, dilated, zero-padded cross-correlation and average pooling.
//!
//! Convolution lowers to im2col followed by one GEMM over the whole batch. The
//! column matrix has one row per `(in_channel, ky, kx)` tap and one column per
//! `(batch, oy, ox)` output position.

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Shape, Tensor};

/// Sliding-window geometry shared by convolution and pooling.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Window {
    pub kernel: usize,
    pub stride: usize,
    pub dilation: usize,
    pub padding: usize,
}

impl Window {
    pub fn new(kernel: usize, stride: usize, dilation: usize, padding: usize) -> Self {
        Window {
            kernel,
            stride,
            dilation,
            padding,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.kernel == 0 {
            return Err(Error::invalid("kernel size must be ≥ 1"));
        }
        if self.stride == 0 {
            return Err(Error::invalid("stride must be ≥ 1"));
        }
        if self.dilation == 0 {
            return Err(Error::invalid("dilation must be ≥ 1"));
        }
        Ok(())
    }

    /// `floor((n + 2p − r·(k−1) − 1)/s) + 1`, or an error when that is below 1.
    pub fn out_size(&self, n: usize, axis: &str) -> Result<usize> {
        self.validate()?;
        let span = self.dilation * (self.kernel - 1) + 1;
        let padded = n + 2 * self.padding;
        if padded < span {
            return Err(Error::shape(format!(
                "{axis} {n} with padding {} is smaller than the dilated kernel extent {span}; output would be empty",
                self.padding
            )));
        }
        Ok((padded - span) / self.stride + 1)
    }

    /// Input coordinate read by output position `o` at tap `t`, if inside the image.
    #[inline]
    fn source(&self, o: usize, t: usize, n: usize) -> Option<usize> {
        let pos = (o * self.stride + t * self.dilation) as isize - self.padding as isize;
        (pos >= 0 && (pos as usize) < n).then_some(pos as usize)
    }

    /// Output positions `lo..hi` (of `n_out`) whose tap `t` lands inside an
    /// input of length `n`, and the input coordinate read at `lo`.
    #[inline]
    fn valid_span(&self, t: usize, n: usize, n_out: usize) -> (usize, usize, usize) {
        let off = (t * self.dilation) as isize - self.padding as isize;
        let s = self.stride as isize;
        // Smallest o with o·s + off ≥ 0, and first o with o·s + off ≥ n.
        let lo = if off >= 0 { 0 } else { ((-off + s - 1) / s) as usize };
        let hi = if (n as isize) <= off { 0 } else { ((n as isize - off + s - 1) / s) as usize };
        let hi = hi.min(n_out);
        let lo = lo.min(hi);
        let start = (lo as isize * s + off).max(0) as usize;
        (lo, hi, start)
    }
}

/// Full description of a 2-D convolution layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ConvSpec {
    pub kernel: usize,
    pub stride: usize,
    pub dilation: usize,
    pub padding: usize,
    pub in_channels: usize,
    pub out_channels: usize,
}

impl ConvSpec {
    pub fn new(in_channels: usize, out_channels: usize, kernel: usize) -> Self {
        ConvSpec {
            kernel,
            stride: 1,
            dilation: 1,
            padding: 0,
            in_channels,
            out_channels,
        }
    }

    pub fn stride(mut self, stride: usize) -> Self {
        self.stride = stride;
        self
    }

    pub fn dilation(mut self, dilation: usize) -> Self {
        self.dilation = dilation;
        self
    }

    pub fn padding(mut self, padding: usize) -> Self {
        self.padding = padding;
        self
    }

    /// Padding `r·(k−1)/2` that keeps resolution fixed at stride 1.
    pub fn same_padding(mut self) -> Self {
        self.padding = self.dilation * (self.kernel - 1) / 2;
        self
    }

    pub fn window(&self) -> Window {
        Window::new(self.kernel, self.stride, self.dilation, self.padding)
    }

    pub fn validate(&self) -> Result<()> {
        if self.kernel % 2 == 0 {
            return Err(Error::invalid(format!(
                "convolution kernel must be odd, got {}",
                self.kernel
            )));
        }
        if self.in_channels == 0 || self.out_channels == 0 {
            return Err(Error::invalid("channel counts must be positive"));
        }
        self.window().validate()
    }

    pub fn weight_shape(&self) -> Shape {
        Shape::new(self.out_channels, self.in_channels, self.kernel, self.kernel)
    }

    pub fn output_shape(&self, input: Shape) -> Result<Shape> {
        self.validate()?;
        if input.c != self.in_channels {
            return Err(Error::shape(format!(
                "input channels {} do not match conv in_channels {}",
                input.c, self.in_channels
            )));
        }
        let win = self.window();
        Ok(Shape::new(
            input.b,
            self.out_channels,
            win.out_size(input.h, "height")?,
            win.out_size(input.w, "width")?,
        ))
    }
}

/// Lowers `x` into a `(c·k·k) × (b·oh·ow)` column matrix.
pub fn im2col<T: Scalar>(x: &[T], xs: Shape, win: &Window, oh: usize, ow: usize) -> Vec<T> {
    let k = win.kernel;
    let plane = oh * ow;
    let n = xs.b * plane;
    let mut col = vec![T::zero(); xs.c * k * k * n];
    for c in 0..xs.c {
        for ky in 0..k {
            for kx in 0..k {
                let row = (c * k + ky) * k + kx;
                let row_data = &mut col[row * n..(row + 1) * n];
                let (lo, hi, start) = win.valid_span(kx, xs.w, ow);
                if lo == hi {
                    continue;
                }
                for b in 0..xs.b {
                    let src = &x[xs.offset(b, c, 0, 0)..xs.offset(b, c + 1, 0, 0)];
                    for oy in 0..oh {
                        let Some(iy) = win.source(oy, ky, xs.h) else {
                            continue;
                        };
                        let dst = &mut row_data[b * plane + oy * ow..b * plane + (oy + 1) * ow];
                        let src_row = &src[iy * xs.w..(iy + 1) * xs.w];
                        let dst = &mut dst[lo..hi];
                        if win.stride == 1 {
                            dst.copy_from_slice(&src_row[start..start + dst.len()]);
                        } else {
                            for (d, &v) in dst.iter_mut().zip(src_row[start..].iter().step_by(win.stride)) {
                                *d = v;
                            }
                        }
                    }
                }
            }
        }
    }
    col
}

/// Adjoint of [`im2col`]: scatters column gradients back onto the input grid.
pub fn col2im<T: Scalar>(col: &[T], xs: Shape, win: &Window, oh: usize, ow: usize) -> Vec<T> {
    let k = win.kernel;
    let plane = oh * ow;
    let n = xs.b * plane;
    let mut dx = vec![T::zero(); xs.numel()];
    for c in 0..xs.c {
        for ky in 0..k {
            for kx in 0..k {
                let row = (c * k + ky) * k + kx;
                let row_data = &col[row * n..(row + 1) * n];
                let (lo, hi, start) = win.valid_span(kx, xs.w, ow);
                if lo == hi {
                    continue;
                }
                for b in 0..xs.b {
                    let base = xs.offset(b, c, 0, 0);
                    for oy in 0..oh {
                        let Some(iy) = win.source(oy, ky, xs.h) else {
                            continue;
                        };
                        let src = &row_data[b * plane + oy * ow + lo..b * plane + oy * ow + hi];
                        let dst = &mut dx[base + iy * xs.w..base + (iy + 1) * xs.w];
                        for (d, &g) in dst[start..].iter_mut().step_by(win.stride).zip(src) {
                            *d += g;
                        }
                    }
                }
            }
        }
    }
    dx
}

/// Cached state needed to differentiate a convolution.
#[derive(Debug, Clone)]
pub struct ConvCache<T> {
    pub input: Vec<T>,
    pub input_shape: Shape,
    pub output_shape: Shape,
}

/// Column elements per chunk: keeps the im2col buffer cache-resident.
const CHUNK_ELEMS: usize = 1 << 17;

/// Batch ranges processed together so each column chunk stays small.
fn batch_chunks(batch: usize, per_image: usize) -> impl Iterator<Item = (usize, usize)> {
    let step = (CHUNK_ELEMS / per_image.max(1)).clamp(1, batch.max(1));
    (0..batch).step_by(step).map(move |b0| (b0, (b0 + step).min(batch)))
}

fn check_conv_operands<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    spec: &ConvSpec,
) -> Result<Shape> {
    spec.validate()?;
    let ws = w.shape();
    let expect = spec.weight_shape();
    if ws != expect {
        let dim = if ws.b != expect.b {
            "out_channels"
        } else if ws.c != expect.c {
            "in_channels"
        } else {
            "kernel"
        };
        return Err(Error::shape(format!(
            "conv weight {ws} does not match expected {expect} ({dim} differs)"
        )));
    }
    if let Some(b) = bias {
        if b.len() != spec.out_channels {
            return Err(Error::shape(format!(
                "conv bias has {} elements, expected out_channels = {}",
                b.len(),
                spec.out_channels
            )));
        }
    }
    spec.output_shape(x.shape())
}

/// Forward convolution; returns the output and the column matrix for backward.
pub fn conv2d_forward<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    spec: &ConvSpec,
) -> Result<(Tensor<T>, ConvCache<T>)> {
    let ys = check_conv_operands(x, w, bias, spec)?;
    let xs = x.shape();
    let win = spec.window();
    let kk = xs.c * spec.kernel * spec.kernel;
    let plane = ys.h * ys.w;
    let o = spec.out_channels;
    let mut y = vec![T::zero(); ys.numel()];
    let in_img = xs.c * xs.h * xs.w;
    let mut prod = Vec::new();
    for (b0, b1) in batch_chunks(xs.b, kk * plane) {
        let nb = b1 - b0;
        let n = nb * plane;
        let col = im2col(&x.data()[b0 * in_img..b1 * in_img], xs.with_batch(nb), &win, ys.h, ys.w);
        prod.clear();
        prod.resize(o * n, T::zero());
        T::gemm(o, kk, n, w.data(), (kk as isize, 1), &col, (n as isize, 1), T::zero(), &mut prod, (n as isize, 1));
        for oc in 0..o {
            let add = bias.map_or(T::zero(), |b| b.data()[oc]);
            for b in 0..nb {
                let src = &prod[oc * n + b * plane..oc * n + (b + 1) * plane];
                let at = ys.offset(b0 + b, oc, 0, 0);
                for (d, &s) in y[at..at + plane].iter_mut().zip(src) {
                    *d = s + add;
                }
            }
        }
    }
    Ok((
        Tensor::new(ys, y)?,
        ConvCache {
            input: x.data().to_vec(),
            input_shape: xs,
            output_shape: ys,
        },
    ))
}

/// Gradients of a convolution with respect to its input, weight and bias.
pub struct ConvGrads<T> {
    pub dx: Option<Vec<T>>,
    pub dw: Vec<T>,
    pub db: Vec<T>,
}

pub fn conv2d_backward<T: Scalar>(
    dy: &[T],
    w: &Tensor<T>,
    spec: &ConvSpec,
    cache: &ConvCache<T>,
    need_dx: bool,
) -> ConvGrads<T> {
    let xs = cache.input_shape;
    let ys = cache.output_shape;
    let win = spec.window();
    let plane = ys.h * ys.w;
    let o = spec.out_channels;
    let kk = xs.c * spec.kernel * spec.kernel;
    let in_img = xs.c * xs.h * xs.w;

    let mut db = vec![T::zero(); o];
    let mut dw = vec![T::zero(); o * kk];
    let mut dx = need_dx.then(|| vec![T::zero(); xs.numel()]);
    let mut dy_mat = Vec::new();
    for (b0, b1) in batch_chunks(xs.b, kk * plane) {
        let nb = b1 - b0;
        let n = nb * plane;
        dy_mat.clear();
        dy_mat.resize(o * n, T::zero());
        for oc in 0..o {
            for b in 0..nb {
                let at = ys.offset(b0 + b, oc, 0, 0);
                dy_mat[oc * n + b * plane..oc * n + (b + 1) * plane].copy_from_slice(&dy[at..at + plane]);
            }
            db[oc] += dy_mat[oc * n..(oc + 1) * n].iter().copied().sum();
        }
        let chunk_shape = xs.with_batch(nb);
        let col = im2col(&cache.input[b0 * in_img..b1 * in_img], chunk_shape, &win, ys.h, ys.w);
        T::gemm(o, n, kk, &dy_mat, (n as isize, 1), &col, (1, n as isize), T::one(), &mut dw, (kk as isize, 1));
        if let Some(dx) = dx.as_mut() {
            let mut dcol = col;
            T::gemm(kk, o, n, w.data(), (1, kk as isize), &dy_mat, (n as isize, 1), T::zero(), &mut dcol, (n as isize, 1));
            let part = col2im(&dcol, chunk_shape, &win, ys.h, ys.w);
            dx[b0 * in_img..b1 * in_img].copy_from_slice(&part);
        }
    }
    ConvGrads { dx, dw, db }
}

/// Convolution without gradient bookkeeping.
pub fn conv2d<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    spec: &ConvSpec,
) -> Result<Tensor<T>> {
    conv2d_forward(x, w, bias, spec).map(|(y, _)| y)
}

/// Average over each (possibly dilated) window. Out-of-image taps count as
/// zeros and the divisor is always `k²`.
pub fn avgpool2d_window<T: Scalar>(x: &Tensor<T>, win: &Window) -> Result<Tensor<T>> {
    let xs = x.shape();
    let oh = win.out_size(xs.h, "height")?;
    let ow = win.out_size(xs.w, "width")?;
    let ys = Shape::new(xs.b, xs.c, oh, ow);
    let inv = T::one() / T::from_usize(win.kernel * win.kernel).unwrap();
    let src = x.data();
    let mut y = vec![T::zero(); ys.numel()];
    for b in 0..xs.b {
        for c in 0..xs.c {
            let base = xs.offset(b, c, 0, 0);
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = T::zero();
                    for ky in 0..win.kernel {
                        let Some(iy) = win.source(oy, ky, xs.h) else {
                            continue;
                        };
                        for kx in 0..win.kernel {
                            if let Some(ix) = win.source(ox, kx, xs.w) {
                                acc += src[base + iy * xs.w + ix];
                            }
                        }
                    }
                    y[ys.offset(b, c, oy, ox)] = acc * inv;
                }
            }
        }
    }
    Tensor::new(ys, y)
}

pub fn avgpool2d_backward<T: Scalar>(dy: &[T], xs: Shape, ys: Shape, win: &Window) -> Vec<T> {
    let inv = T::one() / T::from_usize(win.kernel * win.kernel).unwrap();
    let mut dx = vec![T::zero(); xs.numel()];
    for b in 0..xs.b {
        for c in 0..xs.c {
            let base = xs.offset(b, c, 0, 0);
            for oy in 0..ys.h {
                for ox in 0..ys.w {
                    let g = dy[ys.offset(b, c, oy, ox)] * inv;
                    for ky in 0..win.kernel {
                        let Some(iy) = win.source(oy, ky, xs.h) else {
                            continue;
                        };
                        for kx in 0..win.kernel {
                            if let Some(ix) = win.source(ox, kx, xs.w) {
                                dx[base + iy * xs.w + ix] += g;
                            }
                        }
                    }
                }
            }
        }
    }
    dx
}

/// `k×k` average pooling with stride `s` and zero padding `p`.
pub fn avgpool2d<T: Scalar>(x: &Tensor<T>, k: usize, s: usize, p: usize) -> Result<Tensor<T>> {
    avgpool2d_window(x, &Window::new(k, s, 1, p))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive_conv(x: &Tensor<f64>, w: &Tensor<f64>, spec: &ConvSpec) -> Tensor<f64> {
        let ys = spec.output_shape(x.shape()).unwrap();
        let xs = x.shape();
        Tensor::from_fn(ys, |b, o, i, j| {
            let mut acc = 0.0;
            for c in 0..xs.c {
                for ky in 0..spec.kernel {
                    for kx in 0..spec.kernel {
                        let iy = (i * spec.stride + ky * spec.dilation) as isize - spec.padding as isize;
                        let ix = (j * spec.stride + kx * spec.dilation) as isize - spec.padding as isize;
                        if iy >= 0 && ix >= 0 && (iy as usize) < xs.h && (ix as usize) < xs.w {
                            acc += x.at(b, c, iy as usize, ix as usize) * w.at(o, c, ky, kx);
                        }
                    }
                }
            }
            acc
        })
    }

    #[test]
    fn output_size_formula() {
        let w = Window::new(3, 2, 1, 1);
        assert_eq!(w.out_size(16, "h").unwrap(), 8);
        let w = Window::new(3, 1, 4, 4);
        assert_eq!(w.out_size(16, "h").unwrap(), 16);
        assert!(Window::new(5, 1, 2, 0).out_size(8, "h").is_err());
    }

    #[test]
    fn identity_kernel_is_identity() {
        let x = Tensor::<f64>::arange(Shape::new(2, 3, 4, 5));
        let spec = ConvSpec::new(3, 3, 1);
        let w = Tensor::from_fn(spec.weight_shape(), |o, c, _, _| if o == c { 1.0 } else { 0.0 });
        assert_eq!(conv2d(&x, &w, None, &spec).unwrap(), x);
    }

    #[test]
    fn all_ones_kernel_sums_window() {
        let x = Tensor::<f64>::full(Shape::new(1, 1, 5, 5), 1.0);
        let spec = ConvSpec::new(1, 1, 3);
        let w = Tensor::full(spec.weight_shape(), 1.0);
        let y = conv2d(&x, &w, None, &spec).unwrap();
        assert_eq!(y.shape(), Shape::new(1, 1, 3, 3));
        assert!(y.data().iter().all(|&v| v == 9.0));
    }

    #[test]
    fn matches_naive_loops() {
        let xs = Shape::new(2, 3, 7, 6);
        let x = Tensor::from_fn(xs, |b, c, h, w| ((b * 31 + c * 17 + h * 7 + w * 3) % 11) as f64 - 5.0);
        for (s, r, p) in [(1, 1, 1), (2, 1, 1), (1, 2, 2), (3, 2, 0), (2, 3, 3)] {
            let spec = ConvSpec::new(3, 4, 3).stride(s).dilation(r).padding(p);
            let w = Tensor::from_fn(spec.weight_shape(), |o, c, i, j| ((o + 2 * c + 3 * i + 5 * j) % 7) as f64 * 0.25 - 0.5);
            let bias = Tensor::from_fn(Shape::new(1, 4, 1, 1), |_, c, _, _| c as f64);
            let got = conv2d(&x, &w, Some(&bias), &spec).unwrap();
            let mut want = naive_conv(&x, &w, &spec);
            for (i, v) in want.data_mut().iter_mut().enumerate() {
                *v += ((i / (got.shape().h * got.shape().w)) % 4) as f64;
            }
            assert!(got.max_abs_diff(&want).unwrap() < 1e-12, "s={s} r={r} p={p}");
        }
    }

    #[test]
    fn shape_errors_name_the_dimension() {
        let x = Tensor::<f32>::zeros(Shape::new(1, 2, 4, 4));
        let spec = ConvSpec::new(3, 4, 3);
        let w = Tensor::zeros(spec.weight_shape());
        let err = conv2d(&x, &w, None, &spec).unwrap_err().to_string();
        assert!(err.contains("channels"), "{err}");

        let spec = ConvSpec::new(2, 4, 3);
        let w = Tensor::zeros(Shape::new(4, 2, 5, 5));
        let err = conv2d(&x, &w, None, &spec).unwrap_err().to_string();
        assert!(err.contains("kernel"), "{err}");

        let spec = ConvSpec::new(2, 1, 5);
        let w = Tensor::zeros(spec.weight_shape());
        assert!(conv2d(&x, &w, None, &spec).unwrap_err().to_string().contains("empty"));
    }

    #[test]
    fn even_kernel_rejected() {
        assert!(ConvSpec::new(1, 1, 2).validate().is_err());
    }

    #[test]
    fn avgpool_block_average() {
        let x = Tensor::<f64>::arange(Shape::new(1, 1, 4, 4));
        let y = avgpool2d(&x, 2, 2, 0).unwrap();
        assert_eq!(y.data(), &[2.5, 4.5, 10.5, 12.5]);
    }

    #[test]
    fn avgpool_identity_and_constant() {
        let x = Tensor::<f64>::arange(Shape::new(2, 2, 3, 3));
        assert_eq!(avgpool2d(&x, 1, 1, 0).unwrap(), x);
        let c = Tensor::<f64>::full(Shape::new(1, 2, 6, 6), 3.5);
        let y = avgpool2d(&c, 3, 1, 0).unwrap();
        assert!(y.data().iter().all(|&v| v == 3.5));
    }

    #[test]
    fn avgpool_counts_padding_in_divisor() {
        let x = Tensor::<f64>::full(Shape::new(1, 1, 2, 2), 1.0);
        let y = avgpool2d(&x, 3, 1, 1).unwrap();
        assert!(y.data().iter().all(|&v| (v - 4.0 / 9.0).abs() < 1e-15));
    }
}

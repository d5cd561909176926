//! Minimal channel-major (`C, H, W`) tensor operations with explicit
//! backward passes. Convolutions lower to GEMM through im2col.

use ndarray::{s, Array1, Array2, Array3, ArrayView2, Axis};
use rand::Rng;
use rand_distr::{Distribution, Normal};

/// Convolution with square kernel, zero padding `k / 2` and the given stride.
/// Weights are stored flattened as `(out, in·k·k)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Conv2d {
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
    pub in_ch: usize,
    pub out_ch: usize,
    pub kernel: usize,
    pub stride: usize,
}

impl Conv2d {
    pub fn zeros(in_ch: usize, out_ch: usize, kernel: usize, stride: usize) -> Self {
        Self {
            weight: Array2::zeros((out_ch, in_ch * kernel * kernel)),
            bias: Array1::zeros(out_ch),
            in_ch,
            out_ch,
            kernel,
            stride,
        }
    }

    /// He-style normal init scaled by `gain`, zero bias.
    pub fn random(
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        gain: f64,
        rng: &mut impl Rng,
    ) -> Self {
        let fan_in = (in_ch * kernel * kernel) as f64;
        let mut conv = Self::zeros(in_ch, out_ch, kernel, stride);
        fill_normal(conv.weight.as_slice_mut().unwrap(), gain / fan_in.sqrt(), rng);
        conv
    }

    pub fn param_count(&self) -> usize {
        self.weight.len() + self.bias.len()
    }

    pub fn forward(&self, x: &Array3<f64>) -> (Array3<f64>, Array2<f64>) {
        conv_forward(x, self.weight.view(), &self.bias, self.kernel, self.stride)
    }
}

/// Normal draws rounded to single precision, so parameters survive a
/// round trip through 32-bit storage unchanged.
pub fn fill_normal(out: &mut [f64], std: f64, rng: &mut impl Rng) {
    let normal = Normal::new(0.0, std).expect("std is finite and non-negative");
    for v in out {
        *v = normal.sample(rng) as f32 as f64;
    }
}

pub fn out_size(n: usize, kernel: usize, stride: usize) -> usize {
    (n + 2 * (kernel / 2) - kernel) / stride + 1
}

pub fn im2col(x: &Array3<f64>, kernel: usize, stride: usize) -> Array2<f64> {
    let (c, h, w) = x.dim();
    let pad = (kernel / 2) as isize;
    let (oh, ow) = (out_size(h, kernel, stride), out_size(w, kernel, stride));
    let mut cols = Array2::<f64>::zeros((c * kernel * kernel, oh * ow));
    let xs = x.as_standard_layout();
    let xs = xs.as_slice().unwrap();
    let out = cols.as_slice_mut().unwrap();
    let n = oh * ow;
    for ci in 0..c {
        for ky in 0..kernel {
            for kx in 0..kernel {
                let row = (ci * kernel + ky) * kernel + kx;
                let dst = &mut out[row * n..(row + 1) * n];
                for oy in 0..oh {
                    let iy = (oy * stride) as isize + ky as isize - pad;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let src_row = &xs[(ci * h + iy as usize) * w..(ci * h + iy as usize + 1) * w];
                    for ox in 0..ow {
                        let ix = (ox * stride) as isize + kx as isize - pad;
                        if ix >= 0 && ix < w as isize {
                            dst[oy * ow + ox] = src_row[ix as usize];
                        }
                    }
                }
            }
        }
    }
    cols
}

pub fn col2im(
    cols: &Array2<f64>,
    (c, h, w): (usize, usize, usize),
    kernel: usize,
    stride: usize,
) -> Array3<f64> {
    let pad = (kernel / 2) as isize;
    let (oh, ow) = (out_size(h, kernel, stride), out_size(w, kernel, stride));
    let n = oh * ow;
    let mut x = Array3::<f64>::zeros((c, h, w));
    let xs = x.as_slice_mut().unwrap();
    let cs = cols.as_standard_layout();
    let cs = cs.as_slice().unwrap();
    for ci in 0..c {
        for ky in 0..kernel {
            for kx in 0..kernel {
                let row = (ci * kernel + ky) * kernel + kx;
                let src = &cs[row * n..(row + 1) * n];
                for oy in 0..oh {
                    let iy = (oy * stride) as isize + ky as isize - pad;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let base = (ci * h + iy as usize) * w;
                    for ox in 0..ow {
                        let ix = (ox * stride) as isize + kx as isize - pad;
                        if ix >= 0 && ix < w as isize {
                            xs[base + ix as usize] += src[oy * ow + ox];
                        }
                    }
                }
            }
        }
    }
    x
}

pub fn conv_forward(
    x: &Array3<f64>,
    weight: ArrayView2<f64>,
    bias: &Array1<f64>,
    kernel: usize,
    stride: usize,
) -> (Array3<f64>, Array2<f64>) {
    let (_, h, w) = x.dim();
    let cols = im2col(x, kernel, stride);
    let mut y = weight.dot(&cols);
    y += &bias.view().insert_axis(Axis(1));
    let out_ch = weight.nrows();
    let y = y
        .into_shape_with_order((out_ch, out_size(h, kernel, stride), out_size(w, kernel, stride)))
        .unwrap();
    (y, cols)
}

/// Gradient with respect to the convolution input.
pub fn conv_backward_input(
    dy: &Array3<f64>,
    weight: ArrayView2<f64>,
    in_shape: (usize, usize, usize),
    kernel: usize,
    stride: usize,
) -> Array3<f64> {
    let dy2 = flat2(dy);
    let dcols = weight.t().dot(&dy2);
    col2im(&dcols, in_shape, kernel, stride)
}

/// Gradients with respect to the flattened weight and the bias.
pub fn conv_backward_params(dy: &Array3<f64>, cols: &Array2<f64>) -> (Array2<f64>, Array1<f64>) {
    let dy2 = flat2(dy);
    let dw = dy2.dot(&cols.t());
    let db = dy2.sum_axis(Axis(1));
    (dw, db)
}

fn flat2(x: &Array3<f64>) -> Array2<f64> {
    let (c, h, w) = x.dim();
    x.as_standard_layout()
        .into_owned()
        .into_shape_with_order((c, h * w))
        .unwrap()
}

#[inline]
fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

pub fn silu(x: &Array3<f64>) -> Array3<f64> {
    x.mapv(|v| v * sigmoid(v))
}

/// `dy ⊙ silu'(x)` where `x` is the pre-activation.
pub fn silu_backward(dy: &Array3<f64>, x: &Array3<f64>) -> Array3<f64> {
    let mut out = dy.clone();
    out.zip_mut_with(x, |d, &v| {
        let s = sigmoid(v);
        *d *= s * (1.0 + v * (1.0 - s));
    });
    out
}

/// 2×2 average pooling. Requires even spatial dims.
pub fn avg_pool2(x: &Array3<f64>) -> Array3<f64> {
    let (c, h, w) = x.dim();
    Array3::from_shape_fn((c, h / 2, w / 2), |(ci, y, xx)| {
        0.25 * (x[[ci, 2 * y, 2 * xx]]
            + x[[ci, 2 * y, 2 * xx + 1]]
            + x[[ci, 2 * y + 1, 2 * xx]]
            + x[[ci, 2 * y + 1, 2 * xx + 1]])
    })
}

pub fn avg_pool2_backward(dy: &Array3<f64>) -> Array3<f64> {
    let (c, h, w) = dy.dim();
    Array3::from_shape_fn((c, h * 2, w * 2), |(ci, y, x)| 0.25 * dy[[ci, y / 2, x / 2]])
}

pub fn upsample2(x: &Array3<f64>) -> Array3<f64> {
    let (c, h, w) = x.dim();
    Array3::from_shape_fn((c, h * 2, w * 2), |(ci, y, xx)| x[[ci, y / 2, xx / 2]])
}

pub fn upsample2_backward(dy: &Array3<f64>) -> Array3<f64> {
    let (c, h, w) = dy.dim();
    Array3::from_shape_fn((c, h / 2, w / 2), |(ci, y, x)| {
        dy[[ci, 2 * y, 2 * x]]
            + dy[[ci, 2 * y, 2 * x + 1]]
            + dy[[ci, 2 * y + 1, 2 * x]]
            + dy[[ci, 2 * y + 1, 2 * x + 1]]
    })
}

pub fn concat_channels(a: &Array3<f64>, b: &Array3<f64>) -> Array3<f64> {
    ndarray::concatenate(Axis(0), &[a.view(), b.view()]).expect("matching spatial dims")
}

/// Splits off the first `n` channels.
pub fn split_channels(x: &Array3<f64>, n: usize) -> (Array3<f64>, Array3<f64>) {
    (
        x.slice(s![..n, .., ..]).to_owned(),
        x.slice(s![n.., .., ..]).to_owned(),
    )
}

/// Half-pixel-centered linear interpolation matrix of shape `(dst, src)`
/// with clamped borders.
pub fn bilinear_matrix(src: usize, dst: usize) -> Array2<f64> {
    let mut m = Array2::zeros((dst, src));
    let scale = src as f64 / dst as f64;
    for o in 0..dst {
        let center = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
        let i0 = (center.floor() as usize).min(src - 1);
        let i1 = (i0 + 1).min(src - 1);
        let frac = center - i0 as f64;
        m[[o, i0]] += 1.0 - frac;
        m[[o, i1]] += frac;
    }
    m
}

/// Applies `rows · X_c · colsᵀ` to every channel.
pub fn separable_apply(x: &Array3<f64>, rows: &Array2<f64>, cols: &Array2<f64>) -> Array3<f64> {
    let (c, _, _) = x.dim();
    let mut out = Array3::zeros((c, rows.nrows(), cols.nrows()));
    for ci in 0..c {
        let y = rows.dot(&x.index_axis(Axis(0), ci)).dot(&cols.t());
        out.index_axis_mut(Axis(0), ci).assign(&y);
    }
    out
}

/// Adjoint of [`separable_apply`].
pub fn separable_apply_backward(
    dy: &Array3<f64>,
    rows: &Array2<f64>,
    cols: &Array2<f64>,
) -> Array3<f64> {
    let (c, _, _) = dy.dim();
    let mut out = Array3::zeros((c, rows.ncols(), cols.ncols()));
    for ci in 0..c {
        let y = rows.t().dot(&dy.index_axis(Axis(0), ci)).dot(cols);
        out.index_axis_mut(Axis(0), ci).assign(&y);
    }
    out
}

#[cfg(test)]
pub(crate) mod gradcheck {
    use ndarray::Array3;

    /// Central finite-difference gradient of `f` at `x`.
    pub fn numeric_grad(x: &Array3<f64>, step: f64, mut f: impl FnMut(&Array3<f64>) -> f64) -> Array3<f64> {
        let mut g = Array3::zeros(x.dim());
        let mut probe = x.clone();
        for (idx, gv) in g.indexed_iter_mut() {
            let orig = probe[idx];
            probe[idx] = orig + step;
            let up = f(&probe);
            probe[idx] = orig - step;
            let down = f(&probe);
            probe[idx] = orig;
            *gv = (up - down) / (2.0 * step);
        }
        g
    }

    /// ‖a − b‖ / max(‖a‖, ‖b‖, tiny)
    pub fn rel_error(a: &Array3<f64>, b: &Array3<f64>) -> f64 {
        let diff = (a - b).mapv(|v| v * v).sum().sqrt();
        let scale = a.mapv(|v| v * v).sum().sqrt().max(b.mapv(|v| v * v).sum().sqrt());
        diff / scale.max(1e-300)
    }
}

#[cfg(test)]
mod tests {
    use super::gradcheck::*;
    use super::*;
    use crate::rng;

    fn random3(dim: (usize, usize, usize), seed: u64) -> Array3<f64> {
        let mut r = rng::stream(seed, &[]);
        Array3::from_shape_fn(dim, |_| r.random_range(-1.0..1.0))
    }

    fn naive_conv(x: &Array3<f64>, conv: &Conv2d) -> Array3<f64> {
        let (_, h, w) = x.dim();
        let k = conv.kernel;
        let pad = (k / 2) as isize;
        let (oh, ow) = (out_size(h, k, conv.stride), out_size(w, k, conv.stride));
        Array3::from_shape_fn((conv.out_ch, oh, ow), |(o, oy, ox)| {
            let mut acc = conv.bias[o];
            for c in 0..conv.in_ch {
                for ky in 0..k {
                    for kx in 0..k {
                        let iy = (oy * conv.stride + ky) as isize - pad;
                        let ix = (ox * conv.stride + kx) as isize - pad;
                        if iy >= 0 && ix >= 0 && iy < h as isize && ix < w as isize {
                            acc += conv.weight[[o, (c * k + ky) * k + kx]]
                                * x[[c, iy as usize, ix as usize]];
                        }
                    }
                }
            }
            acc
        })
    }

    #[test]
    fn gemm_convolution_matches_direct_loops() {
        let mut r = rng::stream(1, &[]);
        for (k, stride) in [(1, 1), (3, 1), (3, 2)] {
            let mut conv = Conv2d::random(3, 5, k, stride, 1.0, &mut r);
            conv.bias = Array1::from_shape_fn(5, |i| i as f64 * 0.1);
            let x = random3((3, 7, 6), 2);
            let (y, _) = conv.forward(&x);
            let expect = naive_conv(&x, &conv);
            assert!((&y - &expect).iter().all(|d| d.abs() < 1e-12));
        }
    }

    #[test]
    fn conv_gradients_match_finite_differences() {
        let mut r = rng::stream(3, &[]);
        let conv = Conv2d::random(2, 3, 3, 2, 1.0, &mut r);
        let x = random3((2, 5, 4), 4);
        let probe = random3(conv.forward(&x).0.dim(), 5);
        let loss = |x: &Array3<f64>| (conv.forward(x).0 * &probe).sum();
        let dx = conv_backward_input(&probe, conv.weight.view(), x.dim(), 3, 2);
        let num = numeric_grad(&x, 1e-5, loss);
        assert!(rel_error(&dx, &num) < 1e-7);

        let (_, cols) = conv.forward(&x);
        let (dw, db) = conv_backward_params(&probe, &cols);
        let w3 = conv.weight.clone().into_shape_with_order((1, 3, 18)).unwrap();
        let num_w = numeric_grad(&w3, 1e-5, |w| {
            let w2 = w.clone().into_shape_with_order((3, 18)).unwrap();
            (conv_forward(&x, w2.view(), &conv.bias, 3, 2).0 * &probe).sum()
        });
        let dw3 = dw.into_shape_with_order((1, 3, 18)).unwrap();
        assert!(rel_error(&dw3, &num_w) < 1e-7);
        assert!((db.sum() - probe.sum()).abs() < 1e-10);
    }

    #[test]
    fn elementwise_and_resampling_adjoints() {
        let x = random3((2, 4, 6), 6);
        let probe_pool = random3((2, 2, 3), 7);
        let num = numeric_grad(&x, 1e-5, |x| (avg_pool2(x) * &probe_pool).sum());
        assert!(rel_error(&avg_pool2_backward(&probe_pool), &num) < 1e-8);

        let probe_up = random3((2, 8, 12), 8);
        let num = numeric_grad(&x, 1e-5, |x| (upsample2(x) * &probe_up).sum());
        assert!(rel_error(&upsample2_backward(&probe_up), &num) < 1e-8);

        let probe = random3((2, 4, 6), 9);
        let num = numeric_grad(&x, 1e-5, |x| (silu(x) * &probe).sum());
        assert!(rel_error(&silu_backward(&probe, &x), &num) < 1e-8);

        let rows = bilinear_matrix(4, 16);
        let cols = bilinear_matrix(6, 24);
        let probe = random3((2, 16, 24), 10);
        let num = numeric_grad(&x, 1e-5, |x| (separable_apply(x, &rows, &cols) * &probe).sum());
        assert!(rel_error(&separable_apply_backward(&probe, &rows, &cols), &num) < 1e-8);
    }

    #[test]
    fn bilinear_rows_sum_to_one() {
        for (src, dst) in [(1, 8), (4, 32), (8, 64), (5, 3)] {
            let m = bilinear_matrix(src, dst);
            for row in m.rows() {
                assert!((row.sum() - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn init_values_are_single_precision_exact() {
        let mut r = rng::stream(0, &[]);
        let conv = Conv2d::random(4, 4, 3, 1, 1.0, &mut r);
        assert!(conv.weight.iter().all(|&v| v == v as f32 as f64));
    }
}

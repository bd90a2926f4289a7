//! Minimal differentiable layers: 2-D convolution (im2col + GEMM), ReLU,
//! bilinear upsampling and a dense layer. Each layer keeps its own gradient
//! buffers; backward passes accumulate into them.

use ndarray::{s, Array1, Array2, Array3, ArrayD, ArrayView2, ArrayView3, Ix1, Ix2, IxDyn};
use rand::Rng;

use crate::error::{invalid, Result};
use crate::scalar::Scalar;

/// A trainable tensor with its accumulated gradient.
#[derive(Clone, Debug)]
pub struct Param<T> {
    pub value: ArrayD<T>,
    pub grad: ArrayD<T>,
    pub frozen: bool,
}

impl<T: Scalar> Param<T> {
    pub fn new(value: ArrayD<T>) -> Self {
        let grad = ArrayD::zeros(value.raw_dim());
        Self { value, grad, frozen: false }
    }

    pub fn uniform<R: Rng>(shape: &[usize], bound: f64, rng: &mut R) -> Self {
        let n: usize = shape.iter().product();
        let data: Vec<T> = (0..n)
            .map(|_| T::lit(rng.random_range(-bound..bound)))
            .collect();
        Self::new(ArrayD::from_shape_vec(IxDyn(shape), data).expect("shape matches data"))
    }

    pub fn len(&self) -> usize {
        self.value.len()
    }

    pub fn is_empty(&self) -> bool {
        self.value.is_empty()
    }

    pub fn zero_grad(&mut self) {
        self.grad.fill(T::zero());
    }

    pub fn matrix(&self) -> ArrayView2<'_, T> {
        self.value.view().into_dimensionality::<Ix2>().expect("2-D parameter")
    }

    pub fn vector(&self) -> ndarray::ArrayView1<'_, T> {
        self.value.view().into_dimensionality::<Ix1>().expect("1-D parameter")
    }
}

/// Visitor over named parameters, used by the optimizer and checkpoints.
pub trait Parameterized<T: Scalar> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<T>));
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>));

    fn param_count(&self) -> usize {
        let mut n = 0;
        self.visit("", &mut |_, p| n += p.len());
        n
    }

    fn zero_grad(&mut self) {
        self.visit_mut("", &mut |_, p| p.zero_grad());
    }
}

pub(crate) fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

/// Convolution geometry. Weight layout is `[out, in * k * k]`.
#[derive(Clone, Debug)]
pub struct Conv2d<T> {
    pub weight: Param<T>,
    pub bias: Param<T>,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub dilation: usize,
}

/// Activations saved by [`Conv2d::forward`] for the backward pass.
#[derive(Clone, Debug)]
pub struct ConvCache<T> {
    cols: Array2<T>,
    in_dims: (usize, usize, usize),
}

impl<T: Scalar> Conv2d<T> {
    /// He-uniform weights, PyTorch-style uniform bias.
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng>(
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        dilation: usize,
        rng: &mut R,
    ) -> Self {
        let fan_in = (in_channels * kernel * kernel) as f64;
        let weight = Param::uniform(&[out_channels, in_channels * kernel * kernel], (6.0 / fan_in).sqrt(), rng);
        let bias = Param::uniform(&[out_channels], 1.0 / fan_in.sqrt(), rng);
        Self { weight, bias, in_channels, out_channels, kernel, stride, padding, dilation }
    }

    pub fn out_size(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        let span = self.dilation * (self.kernel - 1) + 1;
        if h + 2 * self.padding < span || w + 2 * self.padding < span {
            return Err(invalid(format!("input {h}x{w} smaller than kernel span {span}")));
        }
        Ok((
            (h + 2 * self.padding - span) / self.stride + 1,
            (w + 2 * self.padding - span) / self.stride + 1,
        ))
    }

    fn im2col(&self, x: ArrayView3<'_, T>, oh: usize, ow: usize) -> Array2<T> {
        let (c, h, w) = x.dim();
        let k = self.kernel;
        let mut cols = Array2::<T>::zeros((c * k * k, oh * ow));
        for ci in 0..c {
            for ki in 0..k {
                for kj in 0..k {
                    let row = (ci * k + ki) * k + kj;
                    let mut dst = cols.row_mut(row);
                    let dst = dst.as_slice_mut().expect("contiguous row");
                    for oy in 0..oh {
                        let iy = (oy * self.stride + ki * self.dilation) as isize - self.padding as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let src = x.slice(s![ci, iy as usize, ..]);
                        for ox in 0..ow {
                            let ix = (ox * self.stride + kj * self.dilation) as isize - self.padding as isize;
                            if ix >= 0 && ix < w as isize {
                                dst[oy * ow + ox] = src[ix as usize];
                            }
                        }
                    }
                }
            }
        }
        cols
    }

    fn col2im(&self, cols: &Array2<T>, dims: (usize, usize, usize), oh: usize, ow: usize) -> Array3<T> {
        let (c, h, w) = dims;
        let k = self.kernel;
        let mut dx = Array3::<T>::zeros((c, h, w));
        for ci in 0..c {
            for ki in 0..k {
                for kj in 0..k {
                    let row = (ci * k + ki) * k + kj;
                    let src = cols.row(row);
                    for oy in 0..oh {
                        let iy = (oy * self.stride + ki * self.dilation) as isize - self.padding as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for ox in 0..ow {
                            let ix = (ox * self.stride + kj * self.dilation) as isize - self.padding as isize;
                            if ix >= 0 && ix < w as isize {
                                dx[[ci, iy as usize, ix as usize]] += src[oy * ow + ox];
                            }
                        }
                    }
                }
            }
        }
        dx
    }

    pub fn forward(&self, x: ArrayView3<'_, T>) -> Result<(Array3<T>, ConvCache<T>)> {
        let (c, h, w) = x.dim();
        if c != self.in_channels {
            return Err(invalid(format!("conv expects {} channels, got {c}", self.in_channels)));
        }
        let (oh, ow) = self.out_size(h, w)?;
        let cols = self.im2col(x, oh, ow);
        let mut y = self.weight.matrix().dot(&cols);
        let bias = self.bias.vector();
        for (mut row, b) in y.rows_mut().into_iter().zip(bias.iter()) {
            row.mapv_inplace(|v| v + *b);
        }
        let y = y.into_shape_with_order((self.out_channels, oh, ow)).expect("conv output shape");
        Ok((y, ConvCache { cols, in_dims: (c, h, w) }))
    }

    /// Accumulates weight/bias gradients; returns the input gradient when asked.
    pub fn backward(&mut self, cache: &ConvCache<T>, dy: ArrayView3<'_, T>, need_dx: bool) -> Option<Array3<T>> {
        let (o, oh, ow) = dy.dim();
        let dy2 = dy.to_shape((o, oh * ow)).expect("dy reshape");
        if !self.weight.frozen {
            let dw = dy2.dot(&cache.cols.t());
            let mut g = self.weight.grad.view_mut().into_dimensionality::<Ix2>().expect("2-D grad");
            g += &dw;
            let db = dy2.sum_axis(ndarray::Axis(1));
            let mut gb = self.bias.grad.view_mut().into_dimensionality::<Ix1>().expect("1-D grad");
            gb += &db;
        }
        if need_dx {
            let dcols = self.weight.matrix().t().dot(&dy2);
            Some(self.col2im(&dcols, cache.in_dims, oh, ow))
        } else {
            None
        }
    }

    pub fn set_frozen(&mut self, frozen: bool) {
        self.weight.frozen = frozen;
        self.bias.frozen = frozen;
    }
}

impl<T: Scalar> Parameterized<T> for Conv2d<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<T>)) {
        f(&join(prefix, "weight"), &self.weight);
        f(&join(prefix, "bias"), &self.bias);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>)) {
        f(&join(prefix, "weight"), &mut self.weight);
        f(&join(prefix, "bias"), &mut self.bias);
    }
}

pub fn relu<T: Scalar>(x: &mut Array3<T>) {
    x.mapv_inplace(|v| if v > T::zero() { v } else { T::zero() });
}

/// Gradient of ReLU given its (post-activation) output.
pub fn relu_backward<T: Scalar>(out: &Array3<T>, dy: &mut Array3<T>) {
    ndarray::Zip::from(dy).and(out).for_each(|g, &o| {
        if o <= T::zero() {
            *g = T::zero();
        }
    });
}

/// Dense layer `y = W x + b`, `W: [out, in]`.
#[derive(Clone, Debug)]
pub struct Linear<T> {
    pub weight: Param<T>,
    pub bias: Param<T>,
}

impl<T: Scalar> Linear<T> {
    pub fn new<R: Rng>(inputs: usize, outputs: usize, rng: &mut R) -> Self {
        let bound = 1.0 / (inputs as f64).sqrt();
        Self {
            weight: Param::uniform(&[outputs, inputs], bound, rng),
            bias: Param::uniform(&[outputs], bound, rng),
        }
    }

    pub fn forward(&self, x: &Array1<T>) -> Array1<T> {
        self.weight.matrix().dot(x) + self.bias.vector()
    }

    pub fn backward(&mut self, x: &Array1<T>, dy: &Array1<T>) -> Array1<T> {
        let mut g = self.weight.grad.view_mut().into_dimensionality::<Ix2>().expect("2-D grad");
        for (i, &d) in dy.iter().enumerate() {
            g.row_mut(i).scaled_add(d, x);
        }
        let mut gb = self.bias.grad.view_mut().into_dimensionality::<Ix1>().expect("1-D grad");
        gb += dy;
        self.weight.matrix().t().dot(dy)
    }
}

impl<T: Scalar> Parameterized<T> for Linear<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<T>)) {
        f(&join(prefix, "weight"), &self.weight);
        f(&join(prefix, "bias"), &self.bias);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>)) {
        f(&join(prefix, "weight"), &mut self.weight);
        f(&join(prefix, "bias"), &mut self.bias);
    }
}

/// Separable bilinear resize with half-pixel centers (`align_corners = false`).
#[derive(Clone, Debug)]
pub struct Bilinear<T> {
    rows: Array2<T>,
    cols: Array2<T>,
}

fn interp_matrix<T: Scalar>(out: usize, inp: usize) -> Array2<T> {
    let mut m = Array2::<T>::zeros((out, inp));
    let scale = inp as f64 / out as f64;
    for o in 0..out {
        let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
        let i0 = (src.floor() as usize).min(inp - 1);
        let i1 = (i0 + 1).min(inp - 1);
        let frac = src - i0 as f64;
        m[[o, i0]] += T::lit(1.0 - frac);
        m[[o, i1]] += T::lit(frac);
    }
    m
}

impl<T: Scalar> Bilinear<T> {
    pub fn new(in_hw: (usize, usize), out_hw: (usize, usize)) -> Self {
        Self { rows: interp_matrix(out_hw.0, in_hw.0), cols: interp_matrix(out_hw.1, in_hw.1) }
    }

    pub fn in_hw(&self) -> (usize, usize) {
        (self.rows.ncols(), self.cols.ncols())
    }

    pub fn out_hw(&self) -> (usize, usize) {
        (self.rows.nrows(), self.cols.nrows())
    }

    pub fn forward(&self, x: ArrayView3<'_, T>) -> Array3<T> {
        let (c, _, _) = x.dim();
        let (oh, ow) = self.out_hw();
        let mut y = Array3::<T>::zeros((c, oh, ow));
        for ci in 0..c {
            let plane = self.rows.dot(&x.slice(s![ci, .., ..])).dot(&self.cols.t());
            y.slice_mut(s![ci, .., ..]).assign(&plane);
        }
        y
    }

    pub fn backward(&self, dy: ArrayView3<'_, T>) -> Array3<T> {
        let (c, _, _) = dy.dim();
        let (ih, iw) = self.in_hw();
        let mut dx = Array3::<T>::zeros((c, ih, iw));
        for ci in 0..c {
            let plane = self.rows.t().dot(&dy.slice(s![ci, .., ..])).dot(&self.cols);
            dx.slice_mut(s![ci, .., ..]).assign(&plane);
        }
        dx
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn naive_conv(conv: &Conv2d<f64>, x: &Array3<f64>) -> Array3<f64> {
        let (_, h, w) = x.dim();
        let (oh, ow) = conv.out_size(h, w).unwrap();
        let k = conv.kernel;
        let wm = conv.weight.matrix();
        let mut y = Array3::zeros((conv.out_channels, oh, ow));
        for o in 0..conv.out_channels {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = conv.bias.vector()[o];
                    for c in 0..conv.in_channels {
                        for ki in 0..k {
                            for kj in 0..k {
                                let iy = (oy * conv.stride + ki * conv.dilation) as isize - conv.padding as isize;
                                let ix = (ox * conv.stride + kj * conv.dilation) as isize - conv.padding as isize;
                                if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < w {
                                    acc += wm[[o, (c * k + ki) * k + kj]] * x[[c, iy as usize, ix as usize]];
                                }
                            }
                        }
                    }
                    y[[o, oy, ox]] = acc;
                }
            }
        }
        y
    }

    #[test]
    fn conv_matches_direct_loops() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for &(stride, pad, dil) in &[(1, 1, 1), (2, 1, 1), (1, 2, 2), (2, 0, 1)] {
            let conv = Conv2d::<f64>::new(3, 4, 3, stride, pad, dil, &mut rng);
            let x = Array3::from_shape_fn((3, 7, 6), |(c, i, j)| ((c * 31 + i * 7 + j * 3) % 11) as f64 / 5.0 - 1.0);
            let (y, _) = conv.forward(x.view()).unwrap();
            let want = naive_conv(&conv, &x);
            assert_eq!(y.dim(), want.dim());
            for (a, b) in y.iter().zip(want.iter()) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn conv_input_gradient_matches_finite_difference() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut conv = Conv2d::<f64>::new(2, 3, 3, 2, 1, 1, &mut rng);
        let x = Array3::from_shape_fn((2, 5, 5), |(c, i, j)| ((c + 2 * i + 3 * j) % 7) as f64 / 3.0 - 1.0);
        let weights = Array3::from_shape_fn((3, 3, 3), |(a, b, c)| (a as f64 - b as f64 * 0.5 + c as f64 * 0.25).sin());
        let loss = |conv: &Conv2d<f64>, x: &Array3<f64>| (&conv.forward(x.view()).unwrap().0 * &weights).sum();
        let (_, cache) = conv.forward(x.view()).unwrap();
        let dx = conv.backward(&cache, weights.view(), true).unwrap();
        let eps = 1e-5;
        for idx in [[0, 0, 0], [1, 2, 3], [0, 4, 4], [1, 1, 0]] {
            let mut xp = x.clone();
            xp[idx] += eps;
            let mut xm = x.clone();
            xm[idx] -= eps;
            let fd = (loss(&conv, &xp) - loss(&conv, &xm)) / (2.0 * eps);
            assert!((fd - dx[idx]).abs() < 1e-7, "{fd} vs {}", dx[idx]);
        }
        let gw = conv.weight.grad.clone();
        let mut probe = conv.clone();
        probe.weight.value[[1, 5]] += eps;
        let lp = loss(&probe, &x);
        probe.weight.value[[1, 5]] -= 2.0 * eps;
        let lm = loss(&probe, &x);
        assert!(((lp - lm) / (2.0 * eps) - gw[[1, 5]]).abs() < 1e-7);
    }

    #[test]
    fn bilinear_preserves_constants_and_is_adjoint() {
        let up = Bilinear::<f64>::new((4, 4), (16, 16));
        let x = Array3::from_elem((2, 4, 4), 3.5);
        let y = up.forward(x.view());
        assert!(y.iter().all(|v| (v - 3.5).abs() < 1e-12));
        let a = Array3::from_shape_fn((1, 4, 4), |(_, i, j)| (i * 4 + j) as f64);
        let b = Array3::from_shape_fn((1, 16, 16), |(_, i, j)| ((i * 3 + j * 5) % 7) as f64);
        let lhs = (&up.forward(a.view()) * &b).sum();
        let rhs = (&a * &up.backward(b.view())).sum();
        assert!((lhs - rhs).abs() < 1e-9);
    }
}

//! Layer kernels with hand-written backward passes.
//!
//! Each forward returns its output plus whatever the backward pass needs.
//! Weight layouts follow the usual convention: convolution kernels are
//! `[Cout × Cin × kh × kw]`, transposed-convolution kernels `[Cin × Cout × 2 × 2]`.

use rand::Rng;

use crate::error::{Error, Result};

use super::scalar::Scalar;
use super::tensor::Tensor;

/// Parameter gradients of a convolution-like layer.
#[derive(Debug, Clone)]
pub struct ParamGrads<T> {
    pub weight: Vec<T>,
    pub bias: Vec<T>,
}

/// Saved state of a 3×3 convolution.
#[derive(Debug, Clone)]
pub struct Conv3x3Cache<T> {
    cin: usize,
    h: usize,
    w: usize,
    cols: Vec<T>,
}

fn im2col<T: Scalar>(x: &Tensor<T>) -> Vec<T> {
    let (cin, h, w) = x.shape();
    let hw = h * w;
    let mut cols = vec![T::zero(); cin * 9 * hw];
    for ci in 0..cin {
        let src = &x.data[ci * hw..(ci + 1) * hw];
        for ky in 0..3 {
            for kx in 0..3 {
                let dst = &mut cols[((ci * 3 + ky) * 3 + kx) * hw..][..hw];
                for y in 0..h {
                    let sy = y as isize + ky as isize - 1;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let srow = &src[sy as usize * w..][..w];
                    let drow = &mut dst[y * w..][..w];
                    match kx {
                        0 if w > 1 => drow[1..].copy_from_slice(&srow[..w - 1]),
                        1 => drow.copy_from_slice(srow),
                        2 if w > 1 => drow[..w - 1].copy_from_slice(&srow[1..]),
                        _ => {}
                    }
                }
            }
        }
    }
    cols
}

fn col2im<T: Scalar>(cols: &[T], cin: usize, h: usize, w: usize) -> Tensor<T> {
    let hw = h * w;
    let mut dx = Tensor::zeros(cin, h, w);
    for ci in 0..cin {
        let dst = &mut dx.data[ci * hw..(ci + 1) * hw];
        for ky in 0..3 {
            for kx in 0..3 {
                let src = &cols[((ci * 3 + ky) * 3 + kx) * hw..][..hw];
                for y in 0..h {
                    let sy = y as isize + ky as isize - 1;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let drow = &mut dst[sy as usize * w..][..w];
                    let srow = &src[y * w..][..w];
                    match kx {
                        0 if w > 1 => add_into(&mut drow[..w - 1], &srow[1..]),
                        1 => add_into(drow, srow),
                        2 if w > 1 => add_into(&mut drow[1..], &srow[..w - 1]),
                        _ => {}
                    }
                }
            }
        }
    }
    dx
}

#[inline]
fn add_into<T: Scalar>(dst: &mut [T], src: &[T]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

fn broadcast_bias<T: Scalar>(bias: &[T], plane: usize) -> Vec<T> {
    bias.iter().flat_map(|&b| std::iter::repeat_n(b, plane)).collect()
}

fn plane_sums<T: Scalar>(g: &Tensor<T>) -> Vec<T> {
    g.data.chunks(g.plane().max(1)).map(|p| p.iter().copied().sum()).collect()
}

/// 3×3 convolution, stride 1, zero padding 1.
pub fn conv2d<T: Scalar>(x: &Tensor<T>, weight: &[T], bias: &[T]) -> Result<(Tensor<T>, Conv3x3Cache<T>)> {
    let cout = bias.len();
    let (cin, h, w) = x.shape();
    if weight.len() != cout * cin * 9 {
        return Err(Error::ShapeMismatch(format!(
            "conv kernel has {} values, expected {cout}x{cin}x3x3",
            weight.len()
        )));
    }
    if h == 0 || w == 0 {
        return Err(Error::ShapeMismatch("empty spatial input".into()));
    }
    let hw = h * w;
    let k = cin * 9;
    let cols = im2col(x);
    let mut out = broadcast_bias(bias, hw);
    T::gemm(cout, k, hw, weight, (k as isize, 1), &cols, (hw as isize, 1), T::one(), &mut out, (hw as isize, 1));
    Ok((Tensor { c: cout, h, w, data: out }, Conv3x3Cache { cin, h, w, cols }))
}

pub fn conv2d_backward<T: Scalar>(
    cache: &Conv3x3Cache<T>,
    weight: &[T],
    grad_out: &Tensor<T>,
) -> (Tensor<T>, ParamGrads<T>) {
    let (cin, h, w) = (cache.cin, cache.h, cache.w);
    let hw = h * w;
    let k = cin * 9;
    let cout = grad_out.c;
    let mut dw = vec![T::zero(); cout * k];
    T::gemm(cout, hw, k, &grad_out.data, (hw as isize, 1), &cache.cols, (1, hw as isize), T::zero(), &mut dw, (k as isize, 1));
    let mut dcols = vec![T::zero(); k * hw];
    T::gemm(k, cout, hw, weight, (1, k as isize), &grad_out.data, (hw as isize, 1), T::zero(), &mut dcols, (hw as isize, 1));
    let dx = col2im(&dcols, cin, h, w);
    (
        dx,
        ParamGrads {
            weight: dw,
            bias: plane_sums(grad_out),
        },
    )
}

/// Pointwise (1×1) convolution.
pub fn conv1x1<T: Scalar>(x: &Tensor<T>, weight: &[T], bias: &[T]) -> Result<Tensor<T>> {
    let cout = bias.len();
    let (cin, h, w) = x.shape();
    if weight.len() != cout * cin {
        return Err(Error::ShapeMismatch(format!(
            "1x1 kernel has {} values, expected {cout}x{cin}",
            weight.len()
        )));
    }
    let hw = h * w;
    let mut out = broadcast_bias(bias, hw);
    T::gemm(cout, cin, hw, weight, (cin as isize, 1), &x.data, (hw as isize, 1), T::one(), &mut out, (hw as isize, 1));
    Ok(Tensor { c: cout, h, w, data: out })
}

pub fn conv1x1_backward<T: Scalar>(x: &Tensor<T>, weight: &[T], grad_out: &Tensor<T>) -> (Tensor<T>, ParamGrads<T>) {
    let (cin, h, w) = x.shape();
    let hw = h * w;
    let cout = grad_out.c;
    let mut dw = vec![T::zero(); cout * cin];
    T::gemm(cout, hw, cin, &grad_out.data, (hw as isize, 1), &x.data, (1, hw as isize), T::zero(), &mut dw, (cin as isize, 1));
    let mut dx = Tensor::zeros(cin, h, w);
    T::gemm(cin, cout, hw, weight, (1, cin as isize), &grad_out.data, (hw as isize, 1), T::zero(), &mut dx.data, (hw as isize, 1));
    (
        dx,
        ParamGrads {
            weight: dw,
            bias: plane_sums(grad_out),
        },
    )
}

pub fn relu<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    x.map(|v| if v > T::zero() { v } else { T::zero() })
}

/// Gradient of ReLU given its forward output.
pub fn relu_backward<T: Scalar>(output: &Tensor<T>, grad_out: &Tensor<T>) -> Tensor<T> {
    let data = output
        .data
        .iter()
        .zip(&grad_out.data)
        .map(|(&y, &g)| if y > T::zero() { g } else { T::zero() })
        .collect();
    Tensor {
        data,
        ..grad_out.clone_shape()
    }
}

/// Inverted dropout. Returns the per-element scale (0 or `1/(1-rate)`) when a
/// mask was drawn; `None` means the layer acted as identity.
pub fn dropout<T: Scalar, R: Rng + ?Sized>(
    x: &Tensor<T>,
    rate: f64,
    rng: Option<&mut R>,
    training: bool,
) -> (Tensor<T>, Option<Vec<T>>) {
    let rng = match rng {
        Some(r) if training && rate > 0.0 => r,
        _ => return (x.clone(), None),
    };
    let keep = T::lit(1.0 / (1.0 - rate));
    let mask: Vec<T> = (0..x.data.len())
        .map(|_| if rng.random::<f64>() < rate { T::zero() } else { keep })
        .collect();
    let data = x.data.iter().zip(&mask).map(|(&v, &m)| v * m).collect();
    (Tensor { data, ..x.clone_shape() }, Some(mask))
}

pub fn dropout_backward<T: Scalar>(mask: Option<&[T]>, grad_out: &Tensor<T>) -> Tensor<T> {
    match mask {
        None => grad_out.clone(),
        Some(m) => Tensor {
            data: grad_out.data.iter().zip(m).map(|(&g, &k)| g * k).collect(),
            ..grad_out.clone_shape()
        },
    }
}

impl<T: Scalar> Tensor<T> {
    fn clone_shape(&self) -> Tensor<T> {
        Tensor {
            c: self.c,
            h: self.h,
            w: self.w,
            data: Vec::new(),
        }
    }
}

/// 2×2 max pooling with stride 2. Also returns, per output element, the flat
/// input index that won (first index on ties).
pub fn maxpool2<T: Scalar>(x: &Tensor<T>) -> Result<(Tensor<T>, Vec<usize>)> {
    let (c, h, w) = x.shape();
    if h % 2 != 0 || w % 2 != 0 {
        return Err(Error::OddSpatialDims { h, w });
    }
    let (oh, ow) = (h / 2, w / 2);
    let mut out = Tensor::zeros(c, oh, ow);
    let mut arg = vec![0usize; c * oh * ow];
    for ch in 0..c {
        for y in 0..oh {
            for xx in 0..ow {
                let mut best_i = (ch * h + 2 * y) * w + 2 * xx;
                let mut best = x.data[best_i];
                for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                    let i = (ch * h + 2 * y + dy) * w + 2 * xx + dx;
                    if x.data[i] > best {
                        best = x.data[i];
                        best_i = i;
                    }
                }
                let o = (ch * oh + y) * ow + xx;
                out.data[o] = best;
                arg[o] = best_i;
            }
        }
    }
    Ok((out, arg))
}

pub fn maxpool2_backward<T: Scalar>(argmax: &[usize], input_shape: (usize, usize, usize), grad_out: &Tensor<T>) -> Tensor<T> {
    let (c, h, w) = input_shape;
    let mut dx = Tensor::zeros(c, h, w);
    for (&i, &g) in argmax.iter().zip(&grad_out.data) {
        dx.data[i] += g;
    }
    dx
}

/// Transposed convolution with a 2×2 kernel and stride 2; doubles H and W.
pub fn upconv2<T: Scalar>(x: &Tensor<T>, weight: &[T], bias: &[T]) -> Result<Tensor<T>> {
    let cout = bias.len();
    let (cin, h, w) = x.shape();
    if weight.len() != cin * cout * 4 {
        return Err(Error::ShapeMismatch(format!(
            "transposed kernel has {} values, expected {cin}x{cout}x2x2",
            weight.len()
        )));
    }
    let hw = h * w;
    let k4 = cout * 4;
    let mut y = vec![T::zero(); k4 * hw];
    T::gemm(k4, cin, hw, weight, (1, k4 as isize), &x.data, (hw as isize, 1), T::zero(), &mut y, (hw as isize, 1));
    let (oh, ow) = (2 * h, 2 * w);
    let mut out = Tensor::zeros(cout, oh, ow);
    for co in 0..cout {
        for dy in 0..2 {
            for dx in 0..2 {
                let src = &y[(co * 4 + dy * 2 + dx) * hw..][..hw];
                for iy in 0..h {
                    let row = &mut out.data[(co * oh + 2 * iy + dy) * ow..][..ow];
                    for ix in 0..w {
                        row[2 * ix + dx] = src[iy * w + ix] + bias[co];
                    }
                }
            }
        }
    }
    Ok(out)
}

pub fn upconv2_backward<T: Scalar>(x: &Tensor<T>, weight: &[T], grad_out: &Tensor<T>) -> (Tensor<T>, ParamGrads<T>) {
    let (cin, h, w) = x.shape();
    let cout = grad_out.c;
    let hw = h * w;
    let k4 = cout * 4;
    let (oh, ow) = (2 * h, 2 * w);
    let mut g = vec![T::zero(); k4 * hw];
    for co in 0..cout {
        for dy in 0..2 {
            for dx in 0..2 {
                let dst = &mut g[(co * 4 + dy * 2 + dx) * hw..][..hw];
                for iy in 0..h {
                    let row = &grad_out.data[(co * oh + 2 * iy + dy) * ow..][..ow];
                    for ix in 0..w {
                        dst[iy * w + ix] = row[2 * ix + dx];
                    }
                }
            }
        }
    }
    let mut dx_t = Tensor::zeros(cin, h, w);
    T::gemm(cin, k4, hw, weight, (k4 as isize, 1), &g, (hw as isize, 1), T::zero(), &mut dx_t.data, (hw as isize, 1));
    let mut dw = vec![T::zero(); cin * k4];
    T::gemm(cin, hw, k4, &x.data, (hw as isize, 1), &g, (1, hw as isize), T::zero(), &mut dw, (k4 as isize, 1));
    (
        dx_t,
        ParamGrads {
            weight: dw,
            bias: plane_sums(grad_out),
        },
    )
}

/// Mirror index into `[0, n)` without repeating the edge sample.
fn reflect(i: usize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n - 1);
    let m = i % period;
    if m < n {
        m
    } else {
        period - m
    }
}

/// Reflect-pads the bottom and right edges by `ph` rows and `pw` columns.
pub fn reflect_pad<T: Scalar>(x: &Tensor<T>, ph: usize, pw: usize) -> Tensor<T> {
    let (c, h, w) = x.shape();
    let (nh, nw) = (h + ph, w + pw);
    let mut out = Tensor::zeros(c, nh, nw);
    for ch in 0..c {
        for y in 0..nh {
            let sy = reflect(y, h);
            for xx in 0..nw {
                out.data[(ch * nh + y) * nw + xx] = x.data[(ch * h + sy) * w + reflect(xx, w)];
            }
        }
    }
    out
}

pub fn reflect_pad_backward<T: Scalar>(grad_out: &Tensor<T>, h: usize, w: usize) -> Tensor<T> {
    let (c, nh, nw) = grad_out.shape();
    let mut dx = Tensor::zeros(c, h, w);
    for ch in 0..c {
        for y in 0..nh {
            let sy = reflect(y, h);
            for xx in 0..nw {
                dx.data[(ch * h + sy) * w + reflect(xx, w)] += grad_out.data[(ch * nh + y) * nw + xx];
            }
        }
    }
    dx
}

/// Keeps the top-left `h × w` window.
pub fn crop<T: Scalar>(x: &Tensor<T>, h: usize, w: usize) -> Tensor<T> {
    let mut out = Tensor::zeros(x.c, h, w);
    for ch in 0..x.c {
        for y in 0..h {
            out.data[(ch * h + y) * w..][..w].copy_from_slice(&x.data[(ch * x.h + y) * x.w..][..w]);
        }
    }
    out
}

pub fn crop_backward<T: Scalar>(grad_out: &Tensor<T>, full_h: usize, full_w: usize) -> Tensor<T> {
    let (c, h, w) = grad_out.shape();
    let mut dx = Tensor::zeros(c, full_h, full_w);
    for ch in 0..c {
        for y in 0..h {
            dx.data[(ch * full_h + y) * full_w..][..w].copy_from_slice(&grad_out.data[(ch * h + y) * w..][..w]);
        }
    }
    dx
}

//! Finite-difference gradient checks.
//!
//! A case maps a list of blobs (input first, then parameters) to an output
//! vector and, given an upstream gradient `r`, returns the analytic gradient
//! of `L = Σ out·r` for every blob. The reference is a central difference of
//! `L` in f64, along single coordinates and along random unit directions;
//! the analytic side runs in f64 and again in f32.

use ozbias::grid::{GridSpec, MaskedField};
use ozbias::nn::layers;
use ozbias::nn::unet::{double_conv, double_conv_backward, DoubleConvParams};
use ozbias::nn::{masked_mse, unet_backward, unet_forward, Param, Scalar, Tensor, UNetConfig, UNetLayout};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const TOL_F32: f64 = 1e-3;
pub const TOL_F64: f64 = 1e-5;
/// Finite-difference steps for single coordinates and unit directions.
const COORD_STEP: f64 = 1e-4;
const DIR_STEP: f64 = 1e-6;
/// Random directions per blob.
const DIRECTIONS: usize = 3;
/// Disagreement between step sizes that marks a non-smooth coordinate.
const KINK_TOL: f64 = 1e-5;
const ABS_FLOOR: f64 = 1e-9;
/// Largest fraction of coordinates that may be skipped as non-smooth.
pub const MAX_SKIPPED: f64 = 0.05;
/// Coordinates checked per blob.
const PER_BLOB: usize = 12;
const DROPOUT_SEED: u64 = 99;

#[derive(Debug, Clone)]
pub enum Case {
    Conv { cin: usize, cout: usize, h: usize, w: usize },
    Conv1x1 { cin: usize, cout: usize, h: usize, w: usize },
    Relu { c: usize, h: usize, w: usize },
    Dropout { c: usize, h: usize, w: usize, rate: f64 },
    MaxPool { c: usize, h: usize, w: usize },
    UpConv { cin: usize, cout: usize, h: usize, w: usize },
    ReflectPad { c: usize, h: usize, w: usize, ph: usize, pw: usize },
    Crop { c: usize, h: usize, w: usize, to_h: usize, to_w: usize },
    DoubleConv { cin: usize, cout: usize, h: usize, w: usize, rate: f64 },
    MaskedMse { h: usize, w: usize },
    UNet { cin: usize, width: usize, depth: usize, h: usize, w: usize, rate: f64 },
}

fn t<T: Scalar>(c: usize, h: usize, w: usize, d: &[T]) -> Tensor<T> {
    Tensor::from_vec(c, h, w, d.to_vec()).unwrap()
}

fn mse_target(h: usize, w: usize) -> MaskedField {
    let spec = GridSpec::new(0.0, h as f64, 0.0, w as f64, 1.0, None).unwrap();
    let values = (0..h * w).map(|i| (i as f64 * 0.37).sin() * 3.0).collect();
    let mask = (0..h * w).map(|i| i % 3 != 1).collect();
    MaskedField::new(spec, values, mask).unwrap()
}

impl Case {
    pub fn name(&self) -> String {
        format!("{self:?}")
    }

    fn unet_config(&self) -> Option<UNetConfig> {
        match *self {
            Case::UNet { cin, width, depth, rate, .. } => Some(UNetConfig {
                in_channels: cin,
                base_width: width,
                depth,
                dropout_rate: rate,
                ..Default::default()
            }),
            _ => None,
        }
    }

    pub fn blobs(&self, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
        let mut v = |n: usize| -> Vec<f64> { (0..n).map(|_| rng.random_range(-1.0..1.0)).collect() };
        match *self {
            Case::Conv { cin, cout, h, w } => vec![v(cin * h * w), v(cout * cin * 9), v(cout)],
            Case::Conv1x1 { cin, cout, h, w } => vec![v(cin * h * w), v(cout * cin), v(cout)],
            Case::Relu { c, h, w } | Case::Dropout { c, h, w, .. } | Case::MaxPool { c, h, w } => vec![v(c * h * w)],
            Case::UpConv { cin, cout, h, w } => vec![v(cin * h * w), v(cin * cout * 4), v(cout)],
            Case::ReflectPad { c, h, w, .. } | Case::Crop { c, h, w, .. } => vec![v(c * h * w)],
            Case::DoubleConv { cin, cout, h, w, .. } => {
                vec![v(cin * h * w), v(cout * cin * 9), v(cout), v(cout * cout * 9), v(cout)]
            }
            Case::MaskedMse { h, w } => vec![v(h * w)],
            Case::UNet { cin, h, w, .. } => {
                let layout = UNetLayout::new(&self.unet_config().unwrap()).unwrap();
                let mut out = vec![v(cin * h * w)];
                // The default init shrinks activations at every level, which
                // leaves deep layers at a scale where ReLU kinks are dense.
                // Checking at a He-scaled point keeps every level at O(1).
                out.extend(
                    layout
                        .init_params::<f64>(7)
                        .into_iter()
                        .map(|p| p.data.iter().map(|v| v * 6f64.sqrt()).collect()),
                );
                out
            }
        }
    }

    /// Output and per-blob gradients of `Σ out·up`.
    pub fn run<T: Scalar>(&self, b: &[Vec<T>], up: Option<&[T]>) -> (Vec<T>, Vec<Vec<T>>) {
        let g = |c, h, w| up.map(|u| t(c, h, w, u));
        match *self {
            Case::Conv { cin, h, w, .. } => {
                let (y, cache) = layers::conv2d(&t(cin, h, w, &b[0]), &b[1], &b[2]).unwrap();
                let Some(gy) = g(y.c, y.h, y.w) else { return (y.data, vec![]) };
                let (gx, pg) = layers::conv2d_backward(&cache, &b[1], &gy);
                (y.data, vec![gx.data, pg.weight, pg.bias])
            }
            Case::Conv1x1 { cin, h, w, .. } => {
                let x = t(cin, h, w, &b[0]);
                let y = layers::conv1x1(&x, &b[1], &b[2]).unwrap();
                let Some(gy) = g(y.c, y.h, y.w) else { return (y.data, vec![]) };
                let (gx, pg) = layers::conv1x1_backward(&x, &b[1], &gy);
                (y.data, vec![gx.data, pg.weight, pg.bias])
            }
            Case::Relu { c, h, w } => {
                let y = layers::relu(&t(c, h, w, &b[0]));
                let Some(gy) = g(c, h, w) else { return (y.data, vec![]) };
                let gx = layers::relu_backward(&y, &gy);
                (y.data, vec![gx.data])
            }
            Case::Dropout { c, h, w, rate } => {
                let mut rng = ChaCha8Rng::seed_from_u64(DROPOUT_SEED);
                let (y, mask) = layers::dropout(&t(c, h, w, &b[0]), rate, Some(&mut rng), true);
                let Some(gy) = g(c, h, w) else { return (y.data, vec![]) };
                (y.data, vec![layers::dropout_backward(mask.as_deref(), &gy).data])
            }
            Case::MaxPool { c, h, w } => {
                let (y, arg) = layers::maxpool2(&t(c, h, w, &b[0])).unwrap();
                let Some(gy) = g(y.c, y.h, y.w) else { return (y.data, vec![]) };
                (y.data, vec![layers::maxpool2_backward(&arg, (c, h, w), &gy).data])
            }
            Case::UpConv { cin, h, w, .. } => {
                let x = t(cin, h, w, &b[0]);
                let y = layers::upconv2(&x, &b[1], &b[2]).unwrap();
                let Some(gy) = g(y.c, y.h, y.w) else { return (y.data, vec![]) };
                let (gx, pg) = layers::upconv2_backward(&x, &b[1], &gy);
                (y.data, vec![gx.data, pg.weight, pg.bias])
            }
            Case::ReflectPad { c, h, w, ph, pw } => {
                let y = layers::reflect_pad(&t(c, h, w, &b[0]), ph, pw);
                let Some(gy) = g(y.c, y.h, y.w) else { return (y.data, vec![]) };
                (y.data, vec![layers::reflect_pad_backward(&gy, h, w).data])
            }
            Case::Crop { c, h, w, to_h, to_w } => {
                let y = layers::crop(&t(c, h, w, &b[0]), to_h, to_w);
                let Some(gy) = g(y.c, y.h, y.w) else { return (y.data, vec![]) };
                (y.data, vec![layers::crop_backward(&gy, h, w).data])
            }
            Case::DoubleConv { cin, h, w, rate, .. } => {
                let p = DoubleConvParams {
                    w1: &b[1],
                    b1: &b[2],
                    w2: &b[3],
                    b2: &b[4],
                };
                let mut rng = ChaCha8Rng::seed_from_u64(DROPOUT_SEED);
                let (y, tape) = double_conv(&t(cin, h, w, &b[0]), p, rate, true, Some(&mut rng)).unwrap();
                let Some(gy) = g(y.c, y.h, y.w) else { return (y.data, vec![]) };
                let (gx, [a, bb, c, d]) = double_conv_backward(&tape, p, &gy);
                (y.data, vec![gx.data, a, bb, c, d])
            }
            Case::MaskedMse { h, w } => {
                let (loss, grad) = masked_mse(&b[0], &mse_target(h, w)).unwrap();
                let Some(u) = up else { return (vec![T::lit(loss)], vec![]) };
                (vec![T::lit(loss)], vec![grad.into_iter().map(|v| v * u[0]).collect()])
            }
            Case::UNet { cin, h, w, .. } => {
                let layout = UNetLayout::new(&self.unet_config().unwrap()).unwrap();
                let params: Vec<Param<T>> = layout
                    .specs()
                    .iter()
                    .zip(&b[1..])
                    .map(|(s, d)| Param {
                        name: s.name.clone(),
                        shape: s.shape.clone(),
                        data: d.clone(),
                    })
                    .collect();
                let mut rng = ChaCha8Rng::seed_from_u64(DROPOUT_SEED);
                let (y, tape) = unet_forward(&layout, &params, &t(cin, h, w, &b[0]), true, Some(&mut rng)).unwrap();
                let Some(gy) = g(1, h, w) else { return (y.data, vec![]) };
                let (pg, gx) = unet_backward(&layout, &params, &tape, &gy);
                let mut out = vec![gx.data];
                out.extend(pg);
                (y.data, out)
            }
        }
    }
}

fn cast<T: Scalar>(v: &[f64]) -> Vec<T> {
    v.iter().map(|&x| T::lit(x)).collect()
}

#[derive(Debug, Clone, Copy, Default)]
pub struct GradError {
    pub f64_max_rel: f64,
    pub f32_max_rel: f64,
    pub checked: usize,
    pub skipped: usize,
}

impl GradError {
    pub fn passes(&self) -> bool {
        self.f64_max_rel < TOL_F64
            && self.f32_max_rel < TOL_F32
            && self.checked > 0
            && (self.skipped as f64) <= MAX_SKIPPED * (self.checked + self.skipped) as f64
    }
}

/// Relative error with a floor of 1% of the blob's largest analytic entry,
/// so near-zero entries are judged against the blob's scale, and an absolute
/// floor far below any gradient that matters.
fn rel(a: f64, n: f64, scale: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(1e-2 * scale).max(ABS_FLOOR)
}

/// Fourth-order central difference of `f` around 0 with step `h`.
fn stencil(f: &mut dyn FnMut(f64) -> f64, h: f64) -> f64 {
    (f(-2.0 * h) - 8.0 * f(-h) + 8.0 * f(h) - f(2.0 * h)) / (12.0 * h)
}

/// Estimates at steps `h` and `h/4`. A ReLU kink or pooling switch inside
/// the stencil makes them disagree; `None` marks such a non-smooth point.
fn smooth_derivative(f: &mut dyn FnMut(f64) -> f64, h: f64, scale: f64) -> Option<f64> {
    let coarse = stencil(f, h);
    let fine = stencil(f, h / 4.0);
    (rel(coarse, fine, scale) <= KINK_TOL).then_some(fine)
}

fn loss_at(case: &Case, blobs: &[Vec<f64>], up: &[f64]) -> f64 {
    case.run::<f64>(blobs, None).0.iter().zip(up).map(|(o, r)| o * r).sum()
}

pub fn check(case: &Case, seed: u64) -> GradError {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let blobs = case.blobs(&mut rng);
    let (out, _) = case.run::<f64>(&blobs, None);
    let up: Vec<f64> = (0..out.len()).map(|_| rng.random_range(-1.0..1.0)).collect();
    let (_, g64) = case.run::<f64>(&blobs, Some(&up));
    let b32: Vec<Vec<f32>> = blobs.iter().map(|b| cast(b)).collect();
    let (_, g32) = case.run::<f32>(&b32, Some(&cast::<f32>(&up)));
    assert_eq!(g64.len(), blobs.len(), "{}", case.name());

    let mut err = GradError {
        f64_max_rel: 0.0,
        f32_max_rel: 0.0,
        checked: 0,
        skipped: 0,
    };
    let record = |err: &mut GradError, a64: f64, a32: f64, num: Option<f64>, s64: f64, s32: f64| match num {
        Some(n) => {
            err.f64_max_rel = err.f64_max_rel.max(rel(a64, n, s64));
            err.f32_max_rel = err.f32_max_rel.max(rel(a32, n, s32));
            err.checked += 1;
        }
        None => err.skipped += 1,
    };
    let mut work = blobs.clone();
    let coordinates = !matches!(case, Case::UNet { .. });
    for k in 0..blobs.len() {
        let scale64 = g64[k].iter().fold(0.0f64, |m, v| m.max(v.abs()));
        let scale32 = g32[k].iter().fold(0.0f64, |m, v| m.max((*v as f64).abs()));
        let n = blobs[k].len();

        // Single coordinates. On a full network, coordinates whose gradient is
        // tiny next to the loss are limited by f64 roundoff, so there only the
        // directional checks below apply.
        if coordinates {
            let picks: Vec<usize> = if n <= PER_BLOB { (0..n).collect() } else { (0..PER_BLOB).map(|_| rng.random_range(0..n)).collect() };
            for i in picks {
                let x0 = blobs[k][i];
                let num = smooth_derivative(
                    &mut |t| {
                        work[k][i] = x0 + t;
                        let l = loss_at(case, &work, &up);
                        work[k][i] = x0;
                        l
                    },
                    COORD_STEP * x0.abs().max(1.0),
                    scale64,
                );
                record(&mut err, g64[k][i], g32[k][i] as f64, num, scale64, scale32);
            }
        }

        // Random unit directions through the whole blob.
        for _ in 0..DIRECTIONS {
            let d: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
            let norm = d.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-300);
            let d: Vec<f64> = d.iter().map(|v| v / norm).collect();
            let a64: f64 = g64[k].iter().zip(&d).map(|(g, v)| g * v).sum();
            let a32: f64 = g32[k].iter().zip(&d).map(|(g, v)| *g as f64 * v).sum();
            let dscale = g64[k].iter().map(|g| g * g).sum::<f64>().sqrt();
            let num = smooth_derivative(
                &mut |t| {
                    for (w, (b, v)) in work[k].iter_mut().zip(blobs[k].iter().zip(&d)) {
                        *w = b + t * v;
                    }
                    let l = loss_at(case, &work, &up);
                    work[k].copy_from_slice(&blobs[k]);
                    l
                },
                DIR_STEP,
                dscale,
            );
            record(&mut err, a64, a32, num, dscale, dscale);
        }
    }
    err
}

/// The layer-level cases, including non-square shapes.
pub fn layer_cases() -> Vec<Case> {
    vec![
        Case::Conv { cin: 3, cout: 4, h: 5, w: 5 },
        Case::Conv { cin: 2, cout: 3, h: 4, w: 7 },
        Case::Conv1x1 { cin: 5, cout: 1, h: 3, w: 6 },
        Case::Relu { c: 2, h: 3, w: 5 },
        Case::Dropout { c: 2, h: 4, w: 5, rate: 0.3 },
        Case::MaxPool { c: 3, h: 4, w: 6 },
        Case::UpConv { cin: 4, cout: 3, h: 3, w: 4 },
        Case::ReflectPad { c: 2, h: 5, w: 3, ph: 3, pw: 1 },
        Case::Crop { c: 2, h: 6, w: 8, to_h: 5, to_w: 7 },
        Case::DoubleConv { cin: 3, cout: 4, h: 5, w: 6, rate: 0.1 },
        Case::MaskedMse { h: 4, w: 5 },
    ]
}

/// Full networks on the two regional grid shapes plus a small odd shape.
pub fn network_cases() -> Vec<Case> {
    vec![
        Case::UNet { cin: 3, width: 4, depth: 1, h: 5, w: 7, rate: 0.1 },
        Case::UNet { cin: 39, width: 4, depth: 2, h: 27, w: 31, rate: 0.1 },
        Case::UNet { cin: 16, width: 4, depth: 2, h: 31, w: 49, rate: 0.1 },
    ]
}

/// Checks a convolution entirely in f32 with a coarse step. The layer is
/// linear in each blob, so a large step carries no truncation error.
pub fn conv_f32_only(seed: u64) -> f64 {
    let case = Case::Conv { cin: 3, cout: 2, h: 5, w: 5 };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let blobs: Vec<Vec<f32>> = case.blobs(&mut rng).iter().map(|b| cast(b)).collect();
    let (out, _) = case.run::<f32>(&blobs, None);
    let up: Vec<f32> = (0..out.len()).map(|_| rng.random_range(-1.0..1.0)).collect();
    let (_, grads) = case.run::<f32>(&blobs, Some(&up));
    let loss = |b: &[Vec<f32>]| -> f64 { case.run::<f32>(b, None).0.iter().zip(&up).map(|(o, r)| (o * r) as f64).sum() };
    let mut work = blobs.clone();
    let mut worst = 0.0f64;
    for k in 0..blobs.len() {
        let scale = grads[k].iter().fold(0.0f64, |m, v| m.max(v.abs() as f64));
        for i in 0..blobs[k].len() {
            let h = 1e-2f32;
            let x0 = blobs[k][i];
            work[k][i] = x0 + h;
            let lp = loss(&work);
            work[k][i] = x0 - h;
            let lm = loss(&work);
            work[k][i] = x0;
            let num = (lp - lm) / (2.0 * h as f64);
            worst = worst.max(rel(grads[k][i] as f64, num, scale));
        }
    }
    worst
}

//! A small U-Net regressor: encoder of double-conv blocks with 2×2 max
//! pooling, a bottleneck, a decoder of transposed convolutions with skip
//! concatenation, and a 1×1 output head producing one bias value per cell.
//!
//! Every 3×3 convolution is followed by dropout and then ReLU. There is no
//! batch normalization.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

use super::layers::{self, Conv3x3Cache};
use super::scalar::Scalar;
use super::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UNetConfig {
    pub in_channels: usize,
    /// Channels of the first encoder level; doubles at each level below.
    pub base_width: usize,
    /// Number of pooling levels.
    pub depth: usize,
    pub dropout_rate: f64,
    pub lr: f64,
    pub weight_decay: f64,
    /// Apply weight decay directly to the parameters (AdamW) instead of
    /// adding it to the gradient.
    #[serde(default)]
    pub decoupled_weight_decay: bool,
    /// Rescale each step's gradient to at most this global L2 norm.
    #[serde(default)]
    pub grad_clip: Option<f64>,
    pub epochs: usize,
    pub seed: u64,
}

impl Default for UNetConfig {
    fn default() -> Self {
        UNetConfig {
            in_channels: 16,
            base_width: 32,
            depth: 2,
            dropout_rate: 0.1,
            lr: 1e-2,
            weight_decay: 1e-3,
            decoupled_weight_decay: false,
            grad_clip: None,
            epochs: 200,
            seed: 0,
        }
    }
}

impl UNetConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(m.into()));
        if self.in_channels == 0 || self.base_width == 0 {
            return bad("in_channels and base_width must be positive");
        }
        if self.depth == 0 {
            return bad("depth must be at least 1");
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return bad("dropout_rate must lie in [0, 1)");
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad("lr must be positive");
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return bad("weight_decay must be non-negative");
        }
        if let Some(c) = self.grad_clip {
            if !(c > 0.0 && c.is_finite()) {
                return bad("grad_clip must be positive");
            }
        }
        Ok(())
    }

    /// Spatial multiple inputs are padded to.
    pub fn stride(&self) -> usize {
        1 << self.depth
    }
}

/// Named parameter tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Param<T> {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<T>,
}

impl<T: Scalar> Param<T> {
    pub fn cast<U: Scalar>(&self) -> Param<U> {
        Param {
            name: self.name.clone(),
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| U::from_f64(v.to_f64().unwrap()).unwrap()).collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    /// Inputs contributing to one output; sets the init range.
    pub fan_in: usize,
}

impl ParamSpec {
    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }
}

#[derive(Debug, Clone, Copy)]
struct DoubleConvIdx {
    w1: usize,
    b1: usize,
    w2: usize,
    b2: usize,
}

#[derive(Debug, Clone, Copy)]
struct LayerIdx {
    w: usize,
    b: usize,
}

/// Parameter layout of a U-Net; indices point into the parameter list in
/// declaration order.
#[derive(Debug, Clone)]
pub struct UNetLayout {
    config: UNetConfig,
    specs: Vec<ParamSpec>,
    enc: Vec<DoubleConvIdx>,
    bottleneck: DoubleConvIdx,
    up: Vec<LayerIdx>,
    dec: Vec<DoubleConvIdx>,
    head: LayerIdx,
}

impl UNetLayout {
    pub fn new(config: &UNetConfig) -> Result<Self> {
        config.validate()?;
        let mut specs = Vec::new();
        let mut push = |name: String, shape: Vec<usize>, fan_in: usize| {
            specs.push(ParamSpec { name, shape, fan_in });
            specs.len() - 1
        };
        fn double_conv(
            push: &mut dyn FnMut(String, Vec<usize>, usize) -> usize,
            name: &str,
            cin: usize,
            cout: usize,
        ) -> DoubleConvIdx {
            DoubleConvIdx {
                w1: push(format!("{name}.conv1.weight"), vec![cout, cin, 3, 3], cin * 9),
                b1: push(format!("{name}.conv1.bias"), vec![cout], cin * 9),
                w2: push(format!("{name}.conv2.weight"), vec![cout, cout, 3, 3], cout * 9),
                b2: push(format!("{name}.conv2.bias"), vec![cout], cout * 9),
            }
        }
        let width = |l: usize| config.base_width << l;
        let d = config.depth;

        let mut enc = Vec::with_capacity(d);
        let mut cin = config.in_channels;
        for l in 0..d {
            enc.push(double_conv(&mut push, &format!("enc{l}"), cin, width(l)));
            cin = width(l);
        }
        let bottleneck = double_conv(&mut push, "bottleneck", width(d - 1), width(d));
        let mut up = vec![LayerIdx { w: 0, b: 0 }; d];
        let mut dec = vec![DoubleConvIdx { w1: 0, b1: 0, w2: 0, b2: 0 }; d];
        for l in (0..d).rev() {
            let (ci, co) = (width(l + 1), width(l));
            up[l] = LayerIdx {
                w: push(format!("up{l}.weight"), vec![ci, co, 2, 2], ci),
                b: push(format!("up{l}.bias"), vec![co], ci),
            };
            dec[l] = double_conv(&mut push, &format!("dec{l}"), 2 * co, co);
        }
        let head = LayerIdx {
            w: push("head.weight".into(), vec![1, width(0), 1, 1], width(0)),
            b: push("head.bias".into(), vec![1], width(0)),
        };
        Ok(UNetLayout {
            config: config.clone(),
            specs,
            enc,
            bottleneck,
            up,
            dec,
            head,
        })
    }

    pub fn config(&self) -> &UNetConfig {
        &self.config
    }

    pub fn specs(&self) -> &[ParamSpec] {
        &self.specs
    }

    pub fn n_params(&self) -> usize {
        self.specs.iter().map(ParamSpec::numel).sum()
    }

    /// Uniform `±sqrt(1/fan_in)` initialization drawn in declaration order.
    pub fn init_params<T: Scalar>(&self, seed: u64) -> Vec<Param<T>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        self.specs
            .iter()
            .map(|s| {
                let bound = (1.0 / s.fan_in as f64).sqrt();
                Param {
                    name: s.name.clone(),
                    shape: s.shape.clone(),
                    data: (0..s.numel())
                        .map(|_| T::lit(rng.random_range(-bound..bound)))
                        .collect(),
                }
            })
            .collect()
    }

    pub fn check_params<T>(&self, params: &[Param<T>]) -> Result<()> {
        if params.len() != self.specs.len() {
            return Err(Error::ShapeMismatch(format!(
                "expected {} parameter tensors, got {}",
                self.specs.len(),
                params.len()
            )));
        }
        for (p, s) in params.iter().zip(&self.specs) {
            if p.shape != s.shape || p.data.len() != s.numel() {
                return Err(Error::ShapeMismatch(format!("parameter {} has shape {:?}, expected {:?}", s.name, p.shape, s.shape)));
            }
        }
        Ok(())
    }
}

/// Saved state of one double-conv block.
#[derive(Debug, Clone)]
pub struct DoubleConvTape<T> {
    conv1: Conv3x3Cache<T>,
    drop1: Option<Vec<T>>,
    act1: Tensor<T>,
    conv2: Conv3x3Cache<T>,
    drop2: Option<Vec<T>>,
    act2: Tensor<T>,
}

/// Weights of a double-conv block.
#[derive(Debug, Clone, Copy)]
pub struct DoubleConvParams<'a, T> {
    pub w1: &'a [T],
    pub b1: &'a [T],
    pub w2: &'a [T],
    pub b2: &'a [T],
}

/// conv → dropout → ReLU, twice.
pub fn double_conv<T: Scalar, R: Rng + ?Sized>(
    x: &Tensor<T>,
    p: DoubleConvParams<'_, T>,
    rate: f64,
    training: bool,
    mut rng: Option<&mut R>,
) -> Result<(Tensor<T>, DoubleConvTape<T>)> {
    let (z1, conv1) = layers::conv2d(x, p.w1, p.b1)?;
    let (d1, drop1) = layers::dropout(&z1, rate, rng.as_deref_mut(), training);
    let act1 = layers::relu(&d1);
    let (z2, conv2) = layers::conv2d(&act1, p.w2, p.b2)?;
    let (d2, drop2) = layers::dropout(&z2, rate, rng, training);
    let act2 = layers::relu(&d2);
    Ok((
        act2.clone(),
        DoubleConvTape {
            conv1,
            drop1,
            act1,
            conv2,
            drop2,
            act2,
        },
    ))
}

/// Returns the input gradient and `[dw1, db1, dw2, db2]`.
pub fn double_conv_backward<T: Scalar>(
    tape: &DoubleConvTape<T>,
    p: DoubleConvParams<'_, T>,
    grad_out: &Tensor<T>,
) -> (Tensor<T>, [Vec<T>; 4]) {
    let g = layers::relu_backward(&tape.act2, grad_out);
    let g = layers::dropout_backward(tape.drop2.as_deref(), &g);
    let (g, pg2) = layers::conv2d_backward(&tape.conv2, p.w2, &g);
    let g = layers::relu_backward(&tape.act1, &g);
    let g = layers::dropout_backward(tape.drop1.as_deref(), &g);
    let (gx, pg1) = layers::conv2d_backward(&tape.conv1, p.w1, &g);
    (gx, [pg1.weight, pg1.bias, pg2.weight, pg2.bias])
}

/// Everything the backward pass of a full U-Net needs.
#[derive(Debug, Clone)]
pub struct UNetTape<T> {
    in_h: usize,
    in_w: usize,
    padded: (usize, usize, usize),
    enc: Vec<DoubleConvTape<T>>,
    pools: Vec<(Vec<usize>, (usize, usize, usize))>,
    bottleneck: DoubleConvTape<T>,
    up_inputs: Vec<Tensor<T>>,
    skip_channels: Vec<usize>,
    dec: Vec<DoubleConvTape<T>>,
    head_input: Tensor<T>,
}

fn dc<'a, T>(params: &'a [Param<T>], i: DoubleConvIdx) -> DoubleConvParams<'a, T> {
    DoubleConvParams {
        w1: &params[i.w1].data,
        b1: &params[i.b1].data,
        w2: &params[i.w2].data,
        b2: &params[i.b2].data,
    }
}

/// Forward pass. The input is reflect-padded on the bottom and right up to a
/// multiple of `2^depth` and the output is cropped back, so the prediction
/// `[1 × H × W]` always matches the input's spatial shape.
pub fn unet_forward<T: Scalar, R: Rng + ?Sized>(
    layout: &UNetLayout,
    params: &[Param<T>],
    x: &Tensor<T>,
    training: bool,
    mut rng: Option<&mut R>,
) -> Result<(Tensor<T>, UNetTape<T>)> {
    let cfg = &layout.config;
    if x.c != cfg.in_channels {
        return Err(Error::ChannelCountMismatch {
            expected: cfg.in_channels,
            found: x.c,
        });
    }
    layout.check_params(params)?;
    let s = cfg.stride();
    let (ph, pw) = ((s - x.h % s) % s, (s - x.w % s) % s);
    let mut cur = layers::reflect_pad(x, ph, pw);
    let padded = cur.shape();
    let rate = cfg.dropout_rate;

    let mut enc = Vec::with_capacity(cfg.depth);
    let mut pools = Vec::with_capacity(cfg.depth);
    let mut skips = Vec::with_capacity(cfg.depth);
    for &idx in &layout.enc {
        let (out, tape) = double_conv(&cur, dc(params, idx), rate, training, rng.as_deref_mut())?;
        let (pooled, arg) = layers::maxpool2(&out)?;
        pools.push((arg, out.shape()));
        enc.push(tape);
        skips.push(out);
        cur = pooled;
    }
    let (out, bottleneck) = double_conv(&cur, dc(params, layout.bottleneck), rate, training, rng.as_deref_mut())?;
    cur = out;

    let mut up_inputs = vec![Tensor::zeros(0, 0, 0); cfg.depth];
    let mut dec: Vec<Option<DoubleConvTape<T>>> = vec![None; cfg.depth];
    let skip_channels: Vec<usize> = skips.iter().map(|t| t.c).collect();
    for l in (0..cfg.depth).rev() {
        let u = layers::upconv2(&cur, &params[layout.up[l].w].data, &params[layout.up[l].b].data)?;
        let cat = skips[l].concat(&u)?;
        up_inputs[l] = cur;
        let (out, tape) = double_conv(&cat, dc(params, layout.dec[l]), rate, training, rng.as_deref_mut())?;
        dec[l] = Some(tape);
        cur = out;
    }
    let y = layers::conv1x1(&cur, &params[layout.head.w].data, &params[layout.head.b].data)?;
    let pred = layers::crop(&y, x.h, x.w);
    Ok((
        pred,
        UNetTape {
            in_h: x.h,
            in_w: x.w,
            padded,
            enc,
            pools,
            bottleneck,
            up_inputs,
            skip_channels,
            dec: dec.into_iter().map(|t| t.expect("every level visited")).collect(),
            head_input: cur,
        },
    ))
}

/// Backward pass from `d loss / d prediction`. Returns parameter gradients in
/// declaration order and the gradient with respect to the input.
pub fn unet_backward<T: Scalar>(
    layout: &UNetLayout,
    params: &[Param<T>],
    tape: &UNetTape<T>,
    grad_pred: &Tensor<T>,
) -> (Vec<Vec<T>>, Tensor<T>) {
    let mut grads: Vec<Vec<T>> = layout.specs.iter().map(|s| vec![T::zero(); s.numel()]).collect();
    let (_, hp, wp) = tape.padded;
    let g = layers::crop_backward(grad_pred, hp, wp);
    let (mut g, hg) = layers::conv1x1_backward(&tape.head_input, &params[layout.head.w].data, &g);
    grads[layout.head.w] = hg.weight;
    grads[layout.head.b] = hg.bias;

    let set_dc = |grads: &mut Vec<Vec<T>>, idx: DoubleConvIdx, pg: [Vec<T>; 4]| {
        let [w1, b1, w2, b2] = pg;
        grads[idx.w1] = w1;
        grads[idx.b1] = b1;
        grads[idx.w2] = w2;
        grads[idx.b2] = b2;
    };

    let depth = layout.config.depth;
    let mut skip_grads = Vec::with_capacity(depth);
    for l in 0..depth {
        let (g_cat, pg) = double_conv_backward(&tape.dec[l], dc(params, layout.dec[l]), &g);
        set_dc(&mut grads, layout.dec[l], pg);
        let (g_skip, g_up) = g_cat.split_channels(tape.skip_channels[l]);
        let (g_in, ug) = layers::upconv2_backward(&tape.up_inputs[l], &params[layout.up[l].w].data, &g_up);
        grads[layout.up[l].w] = ug.weight;
        grads[layout.up[l].b] = ug.bias;
        skip_grads.push(g_skip);
        g = g_in;
    }
    let (g_b, pg) = double_conv_backward(&tape.bottleneck, dc(params, layout.bottleneck), &g);
    set_dc(&mut grads, layout.bottleneck, pg);
    g = g_b;
    for l in (0..depth).rev() {
        let (arg, shape) = &tape.pools[l];
        let mut gs = layers::maxpool2_backward(arg, *shape, &g);
        gs.add_assign(&skip_grads[l]);
        let (g_in, pg) = double_conv_backward(&tape.enc[l], dc(params, layout.enc[l]), &gs);
        set_dc(&mut grads, layout.enc[l], pg);
        g = g_in;
    }
    let gx = layers::reflect_pad_backward(&g, tape.in_h, tape.in_w);
    (grads, gx)
}

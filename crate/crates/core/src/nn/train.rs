//! Training loop and inference for the U-Net.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::grid::{GridStack, MaskedField, NormStats};

use super::adam::{adam_step, AdamHyper, AdamState};
use super::checkpoint::ModelCheckpoint;
use super::loss::masked_mse;
use super::tensor::Tensor;
use super::unet::{unet_backward, unet_forward, UNetConfig, UNetLayout};

const SHUFFLE_STREAM: u64 = 1;
const DROPOUT_STREAM: u64 = 2;

pub(crate) fn stack_tensor(norm: &NormStats, stack: &GridStack) -> Result<Tensor<f32>> {
    let z = norm.apply(stack)?;
    let (rows, cols) = z.spec().shape();
    Tensor::from_vec(z.n_channels(), rows, cols, z.data().iter().map(|&v| v as f32).collect())
}

/// Trains a U-Net on every day of `ds`.
pub fn train(ds: &Dataset, config: &UNetConfig) -> Result<ModelCheckpoint> {
    train_with_progress(ds, config, |_, _| {})
}

/// Like [`train`], calling `on_epoch(epoch, mean_loss)` after each epoch.
///
/// Each epoch visits the days in a freshly shuffled order and takes one Adam
/// step per day image. The recorded loss is the mean masked MSE of those
/// steps, measured on the training-mode forward pass.
pub fn train_with_progress(
    ds: &Dataset,
    config: &UNetConfig,
    mut on_epoch: impl FnMut(usize, f64),
) -> Result<ModelCheckpoint> {
    config.validate()?;
    if ds.is_empty() {
        return Err(Error::EmptyDataset);
    }
    if ds.channels().len() != config.in_channels {
        return Err(Error::ChannelCountMismatch {
            expected: config.in_channels,
            found: ds.channels().len(),
        });
    }
    let layout = UNetLayout::new(config)?;
    let stacks: Vec<GridStack> = ds.days().iter().map(|d| d.input.clone()).collect();
    let norm = NormStats::fit(&stacks)?;
    let inputs = stacks.iter().map(|s| stack_tensor(&norm, s)).collect::<Result<Vec<_>>>()?;

    let mut params = layout.init_params::<f32>(config.seed);
    let hyper = AdamHyper {
        decoupled: config.decoupled_weight_decay,
        ..AdamHyper::default()
    };
    let mut adam = AdamState::for_params(&params, hyper);
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(config.seed);
    shuffle_rng.set_stream(SHUFFLE_STREAM);
    let mut dropout_rng = ChaCha8Rng::seed_from_u64(config.seed);
    dropout_rng.set_stream(DROPOUT_STREAM);

    let mut order: Vec<usize> = (0..ds.len()).collect();
    let mut history = Vec::with_capacity(config.epochs);
    for epoch in 0..config.epochs {
        order.shuffle(&mut shuffle_rng);
        let mut total = 0.0;
        for &i in &order {
            let (pred, tape) = unet_forward(&layout, &params, &inputs[i], true, Some(&mut dropout_rng))?;
            let (loss, grad) = masked_mse(&pred.data, &ds.days()[i].target)?;
            let grad = Tensor::from_vec(1, pred.h, pred.w, grad)?;
            let (mut grads, _) = unet_backward(&layout, &params, &tape, &grad);
            if let Some(c) = config.grad_clip {
                clip_global_norm(&mut grads, c);
            }
            adam_step(&mut params, &grads, &mut adam, config.lr, config.weight_decay)?;
            total += loss;
        }
        let mean = total / ds.len() as f64;
        history.push(mean);
        on_epoch(epoch, mean);
    }
    ModelCheckpoint::new(config.clone(), ds.channels().to_vec(), norm, history, params)
}

fn clip_global_norm(grads: &mut [Vec<f32>], max_norm: f64) {
    let norm = grads.iter().flatten().map(|&g| (g as f64) * (g as f64)).sum::<f64>().sqrt();
    if norm > max_norm {
        let s = (max_norm / norm) as f32;
        grads.iter_mut().flatten().for_each(|g| *g *= s);
    }
}

/// Evaluation-mode prediction of the bias field for one input stack.
pub fn predict(ckpt: &ModelCheckpoint, stack: &GridStack) -> Result<MaskedField> {
    let layout = UNetLayout::new(&ckpt.config)?;
    let x = stack_tensor(&ckpt.norm, stack)?;
    let (pred, _) = unet_forward::<f32, ChaCha8Rng>(&layout, &ckpt.params, &x, false, None)?;
    MaskedField::dense(stack.spec().clone(), pred.data.iter().map(|&v| v as f64).collect())
}

/// Mean masked MSE of evaluation-mode predictions over a dataset.
pub fn dataset_loss(ckpt: &ModelCheckpoint, ds: &Dataset) -> Result<f64> {
    if ds.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let mut total = 0.0;
    for day in ds.days() {
        let pred = predict(ckpt, &day.input)?;
        total += masked_mse(pred.values(), &day.target)?.0;
    }
    Ok(total / ds.len() as f64)
}

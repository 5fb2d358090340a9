//! Loss/gradient evaluation for every architecture variant, gradient
//! verification, Adam, the epoch loop, and checkpoints.

mod adam;
mod checkpoint;
mod config;
mod gradcheck;

pub use adam::{adam_step, AdamState};
pub use checkpoint::{Checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use config::{merge_table, AdamConfig, TrainConfig};
pub use gradcheck::{finite_difference_check, relative_error, GradCheckReport};

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::losses::{pair_loss_with_grad, LossConfig, LossKind, LossValue};
use crate::model::{backward as model_backward, forward, BatchInputs, EmbeddingGrads, ModelConfig, ModelParams, Variant};
use crate::params::Parameters;
use crate::sampler::{assemble_batch_for_videos, ClipBatch, Dataset};

/// Gradients, shape-parallel to the parameters they belong to.
pub type GradientSet = ModelParams;

/// Model inputs plus the MIL-NCE neighbor map, if the loss needs one.
#[derive(Debug, Clone)]
pub struct PreparedBatch {
    pub inputs: BatchInputs,
    pub neighbors: Option<Vec<Vec<usize>>>,
}

impl PreparedBatch {
    pub fn new(batch: &ClipBatch, model: &ModelConfig, loss: &LossConfig) -> Result<Self> {
        Ok(PreparedBatch {
            inputs: BatchInputs::from_batch(batch, model)?,
            neighbors: (loss.kind == LossKind::MilNce).then(|| batch.neighbor_map(loss.neighbor_radius)),
        })
    }
}

fn add_pair(
    loss: &LossConfig,
    x: &Array2<f64>,
    y: &Array2<f64>,
    neighbors: Option<&[Vec<usize>]>,
    dx: &mut Array2<f64>,
    dy: &mut Array2<f64>,
) -> Result<f64> {
    let (value, gx, gy) = pair_loss_with_grad(loss, x.view(), y.view(), neighbors)?;
    *dx += &gx;
    *dy += &gy;
    Ok(value.value)
}

/// Configured loss of one batch and its exact gradient with respect to every
/// parameter. Tri-modal models sum the loss over the (video, audio),
/// (audio, text) and (video, text) pairs; fused models score video against
/// the fused audio+text embedding.
pub fn loss_and_grad(
    params: &ModelParams,
    model: &ModelConfig,
    loss: &LossConfig,
    batch: &PreparedBatch,
) -> Result<(f64, GradientSet)> {
    let (emb, cache) = forward(params, model, &batch.inputs)?;
    let nb = batch.neighbors.as_deref();
    let zeros = |x: &Array2<f64>| Array2::zeros(x.dim());
    let mut grads = EmbeddingGrads {
        video: zeros(&emb.video),
        audio: emb.audio.as_ref().map(zeros),
        text: emb.text.as_ref().map(zeros),
        language: emb.language.as_ref().map(zeros),
    };
    let missing = || Error::ShapeMismatch("embedding missing for the configured variant".into());
    let value = match model.variant {
        Variant::Av => {
            let a = emb.audio.as_ref().ok_or_else(missing)?;
            add_pair(loss, &emb.video, a, nb, &mut grads.video, grads.audio.as_mut().unwrap())?
        }
        Variant::TriModal => {
            let a = emb.audio.as_ref().ok_or_else(missing)?;
            let t = emb.text.as_ref().ok_or_else(missing)?;
            let (ga, gt) = (grads.audio.as_mut().unwrap(), grads.text.as_mut().unwrap());
            add_pair(loss, &emb.video, a, nb, &mut grads.video, ga)?
                + add_pair(loss, a, t, nb, ga, gt)?
                + add_pair(loss, &emb.video, t, nb, &mut grads.video, gt)?
        }
        Variant::Fused => {
            let l = emb.language.as_ref().ok_or_else(missing)?;
            add_pair(loss, &emb.video, l, nb, &mut grads.video, grads.language.as_mut().unwrap())?
        }
    };
    if !value.is_finite() {
        return Err(Error::NonFiniteLoss(value));
    }
    let param_grads = model_backward(params, &batch.inputs, &cache, &grads)?;
    Ok((value, param_grads))
}

/// Loss and parameter gradients for a clip batch.
pub fn backward(batch: &ClipBatch, params: &ModelParams, config: &TrainConfig) -> Result<(LossValue, GradientSet)> {
    let prepared = PreparedBatch::new(batch, &config.model, &config.loss)?;
    let (value, grads) = loss_and_grad(params, &config.model, &config.loss, &prepared)?;
    Ok((
        LossValue {
            value,
            per_pair_terms: None,
        },
        grads,
    ))
}

/// Finite-difference check of [`backward`] on one batch.
pub fn gradcheck_batch(params: &ModelParams, batch: &ClipBatch, config: &TrainConfig, h: f64) -> Result<GradCheckReport> {
    let prepared = PreparedBatch::new(batch, &config.model, &config.loss)?;
    finite_difference_check(params, |p| loss_and_grad(p, &config.model, &config.loss, &prepared), h)
}

/// Final state of a training run plus its mean loss per epoch.
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    pub epoch_losses: Vec<f64>,
}

/// Trains from a fresh seeded initialization.
pub fn train(config: &TrainConfig, dataset: &Dataset) -> Result<TrainOutcome> {
    config.validate()?;
    let params = ModelParams::init(&config.model, config.init_seed)?;
    train_from(Checkpoint::new(config.clone(), params), config, dataset)
}

/// Continues training `start` (e.g. a pretrained checkpoint for
/// fine-tuning) under `config`. The Adam state restarts when the optimizer
/// settings changed.
pub fn train_from(start: Checkpoint, config: &TrainConfig, dataset: &Dataset) -> Result<TrainOutcome> {
    config.validate()?;
    let mut params = start.params;
    if params.layout() != ModelParams::zeros(&config.model)?.layout() {
        return Err(Error::ShapeMismatch("starting parameters do not match the model config".into()));
    }
    let mut adam = if start.adam.config == config.optimizer {
        start.adam
    } else {
        AdamState::new(config.optimizer.clone(), &params)
    };

    let train_set = dataset.split(config.train_split.as_deref());
    let required = config.model.required_modalities();
    let n = config.sampler.videos_per_batch;
    let eligible: Vec<usize> = train_set
        .videos
        .iter()
        .enumerate()
        .filter(|(_, v)| v.record.duration_s >= config.sampler.clip_length_s)
        .map(|(i, _)| i)
        .collect();
    if config.epochs > 0 && eligible.len() < n {
        return Err(Error::InsufficientVideos {
            available: eligible.len(),
            required: n,
        });
    }
    let steps_per_epoch = train_set.len().div_ceil(n);
    let mut rng = ChaCha8Rng::seed_from_u64(config.sampler.seed);
    let mut epoch_losses = Vec::with_capacity(config.epochs);

    for epoch in 0..config.epochs {
        let mut order = eligible.clone();
        if config.epoch_partition {
            order.shuffle(&mut rng);
        }
        let mut total = 0.0;
        for step in 0..steps_per_epoch {
            let batch_seed = rng.next_u64();
            let videos: Vec<usize> = if config.epoch_partition {
                (0..n).map(|k| order[(step * n + k) % order.len()]).collect()
            } else {
                let mut pick = ChaCha8Rng::seed_from_u64(batch_seed);
                rand::seq::index::sample(&mut pick, eligible.len(), n)
                    .into_iter()
                    .map(|i| eligible[i])
                    .collect()
            };
            let batch = assemble_batch_for_videos(&train_set, &videos, &config.sampler, &required, batch_seed)?;
            let prepared = PreparedBatch::new(&batch, &config.model, &config.loss)?;
            let (loss, grads) = match loss_and_grad(&params, &config.model, &config.loss, &prepared) {
                Err(Error::NonFiniteLoss(loss)) => return Err(Error::DivergedLoss { epoch, loss }),
                other => other?,
            };
            adam_step(&mut params, &grads, &mut adam)?;
            if !params.all_finite() {
                return Err(Error::DivergedLoss { epoch, loss });
            }
            total += loss;
        }
        epoch_losses.push(total / steps_per_epoch as f64);
    }

    let checkpoint = Checkpoint {
        config: config.clone(),
        params,
        adam,
    };
    if let Some(path) = &config.checkpoint_path {
        checkpoint.save(path)?;
    }
    Ok(TrainOutcome {
        checkpoint,
        epoch_losses,
    })
}

/// Embeds a clip batch with trained parameters.
pub fn embed_batch(params: &ModelParams, model: &ModelConfig, batch: &ClipBatch) -> Result<crate::model::Embeddings> {
    let inputs = BatchInputs::from_batch(batch, model)?;
    Ok(forward(params, model, &inputs)?.0)
}

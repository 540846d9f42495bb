//! Training loop, clip preparation and parallel evaluation.

use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use soc_tensor::{Tape, Tensor, TensorError};

use crate::encoders::TextExpression;
use crate::error::{Result, SocError};
use crate::loss::{GroundTruth, LossValues, LossWeights};
use crate::metrics::{self, BinaryMask, EvalReport, VideoMasks};
use crate::model::{Model, Prediction};
use crate::nn::Graph;
use crate::params::{Adam, ParamStore};
use crate::synth::Sample;

/// Environment variable capping evaluation threads.
pub const THREADS_ENV: &str = "SOC_NUM_THREADS";

/// A sample ready for the model: clip, token ids and full-resolution
/// targets (mask logits are upsampled to them before the loss).
#[derive(Clone, Debug)]
pub struct PreparedClip {
    pub id: String,
    pub clip: Tensor,
    pub expr: TextExpression,
    pub gt: GroundTruth,
    pub full_masks: Vec<BinaryMask>,
}

pub fn prepare(model: &Model, samples: &[Sample]) -> Result<Vec<PreparedClip>> {
    samples
        .iter()
        .map(|s| {
            Ok(PreparedClip {
                id: s.id.clone(),
                clip: s.clip.clone(),
                expr: model.encode_text(&s.expression)?,
                gt: GroundTruth::from_masks(&s.masks, 1)?,
                full_masks: s.masks.clone(),
            })
        })
        .collect()
}

/// Loss values of one clip and the gradients, accumulated into `params`.
pub fn accumulate_clip_gradients(
    model: &Model,
    params: &mut ParamStore,
    clip: &PreparedClip,
    weights: &LossWeights,
) -> Result<LossValues> {
    let mut tape = Tape::new();
    let (values, bindings, grads) = {
        let mut g = Graph::new(&mut tape, params, true);
        let x = g.constant(clip.clip.clone());
        let out = model.forward(&mut g, x, &clip.expr)?;
        let loss = model.clip_loss(&mut g, &out, &clip.gt, weights)?;
        let values = LossValues::read(&g, &loss.terms, loss.total);
        let grads = g.backward(loss.total)?;
        (values, g.bindings().clone(), grads)
    };
    params.accumulate_grads(&bindings, &grads);
    Ok(values)
}

/// Loss of one clip without gradients.
pub fn clip_loss_values(model: &Model, params: &ParamStore, clip: &PreparedClip, weights: &LossWeights) -> Result<LossValues> {
    let mut tape = Tape::new();
    let mut g = Graph::new(&mut tape, params, false);
    let x = g.constant(clip.clip.clone());
    let out = model.forward(&mut g, x, &clip.expr)?;
    let loss = model.clip_loss(&mut g, &out, &clip.gt, weights)?;
    Ok(LossValues::read(&g, &loss.terms, loss.total))
}

/// Mean component losses of one epoch.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub losses: LossValues,
}

pub const CSV_HEADER: &str = "epoch,total,dice,focal,l1,giou,cls,con";

impl EpochLog {
    pub fn csv_row(&self) -> String {
        let l = &self.losses;
        let mut s = String::new();
        let _ = write!(s, "{},{},{},{},{},{},{},{}", self.epoch, l.total, l.dice, l.focal, l.l1, l.giou, l.cls, l.con);
        s
    }
}

fn diverged(epoch: usize, step: usize) -> impl Fn(SocError) -> SocError {
    move |e| match e {
        SocError::Tensor(TensorError::NonFinite { op }) => {
            SocError::Diverged { epoch, step, reason: format!("non-finite value produced by {op}") }
        }
        other => other,
    }
}

/// Runs `epochs` passes of per-clip Adam steps over `clips` (shuffled per
/// epoch from the config seed, learning rate set by the schedule), calling `on_epoch` with the current
/// parameters after each pass.
pub fn train(
    model: &Model,
    params: &mut ParamStore,
    clips: &[PreparedClip],
    epochs: usize,
    mut on_epoch: impl FnMut(&EpochLog, &ParamStore) -> Result<()>,
) -> Result<Vec<EpochLog>> {
    if clips.is_empty() {
        return Err(SocError::Contract("training needs at least one clip".into()));
    }
    let cfg = &model.config;
    let weights = LossWeights::from_config(cfg);
    let mut opt = Adam::from_config(cfg);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed_0f_7a1e);
    let mut order: Vec<usize> = (0..clips.len()).collect();
    let mut history = Vec::with_capacity(epochs);
    for epoch in 1..=epochs {
        order.shuffle(&mut rng);
        opt.set_learning_rate(cfg.learning_rate * cfg.lr_schedule.factor(epoch, epochs));
        let mut mean = LossValues::default();
        for (step, &i) in order.iter().enumerate() {
            let values = accumulate_clip_gradients(model, params, &clips[i], &weights).map_err(diverged(epoch, step))?;
            if !values.total.is_finite() || !params.grad_norm().is_finite() {
                return Err(SocError::Diverged { epoch, step, reason: "loss or gradient is not finite".into() });
            }
            opt.step(params);
            mean.add_scaled(&values, 1.0 / clips.len() as f64);
        }
        let log = EpochLog { epoch, losses: mean };
        on_epoch(&log, params)?;
        history.push(log);
    }
    Ok(history)
}

/// Evaluation thread count: `SOC_NUM_THREADS` if set, else the available
/// parallelism.
pub fn num_threads() -> usize {
    std::env::var(THREADS_ENV)
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .filter(|&n| n > 0)
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()))
}

/// Predicts every clip (in parallel, results in input order).
pub fn predict_all(model: &Model, params: &ParamStore, clips: &[PreparedClip], threads: usize) -> Result<Vec<Prediction>> {
    let threads = threads.clamp(1, clips.len().max(1));
    let chunk = clips.len().div_ceil(threads).max(1);
    let results: Vec<Result<Vec<Prediction>>> = std::thread::scope(|s| {
        let handles: Vec<_> = clips
            .chunks(chunk)
            .map(|part| s.spawn(move || part.iter().map(|c| model.predict(params, &c.clip, &c.expr)).collect()))
            .collect();
        handles.into_iter().map(|h| h.join().expect("evaluation worker panicked")).collect()
    });
    let mut out = Vec::with_capacity(clips.len());
    for r in results {
        out.extend(r?);
    }
    Ok(out)
}

/// Runs inference on every clip and scores it against the ground truth.
pub fn evaluate(model: &Model, params: &ParamStore, clips: &[PreparedClip], threads: usize) -> Result<(EvalReport, Vec<Prediction>)> {
    let preds = predict_all(model, params, clips, threads)?;
    let videos: Vec<VideoMasks> = clips
        .iter()
        .zip(&preds)
        .map(|(c, p)| VideoMasks { video_id: c.id.clone(), pred: p.masks.clone(), gt: c.full_masks.clone() })
        .collect();
    Ok((metrics::evaluate(&videos)?, preds))
}

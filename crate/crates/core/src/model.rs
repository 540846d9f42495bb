//! The full pipeline: encoders, fusion, semantic integration and heads,
//! plus the per-clip training objective and inference-time selection.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use soc_tensor::{Tape, Tensor, Var};

use crate::config::Config;
use crate::encoders::{FeaturePyramid, TextEncoder, TextExpression, TextFeatures, VisualEncoder, Vocabulary};
use crate::error::{Result, SocError};
use crate::fusion::{FusedFeatures, Fusion};
use crate::heads::{Heads, TrajectoryPrediction};
use crate::loss::{box_losses, class_loss, contrastive_loss, dice_loss, focal_loss, total_loss, GroundTruth, LossTerms, LossWeights};
use crate::matching::{match_trajectory, MatchResult, PredictionValues};
use crate::metrics::BinaryMask;
use crate::nn::Graph;
use crate::params::ParamStore;
use crate::sim::{broadcast_enhance, EncodedVisual, Sim, SimDims};

/// Masks are predicted at 1/4 of the input resolution.
pub const MASK_STRIDE: usize = 4;
/// A frame whose referred probability for the selected query is below this
/// fraction of the query's peak over the clip is predicted empty.
pub const ABSENT_RATIO: f64 = 0.5;

/// Everything a forward pass produces, as tape variables.
#[derive(Clone, Debug)]
pub struct ForwardOutput {
    pub pyramid: FeaturePyramid,
    pub text: TextFeatures,
    pub fused: FusedFeatures,
    pub encoded: EncodedVisual,
    /// Frame queries before the video-level enhancement, `[T, N_q, D]`.
    pub frame_queries: Var,
    /// Video queries `[N_q, D]` (zeros when the cluster is disabled).
    pub video_queries: Var,
    /// Frame queries after enhancement, consumed by the heads.
    pub enhanced_queries: Var,
    pub seg: Var,
    pub pred: TrajectoryPrediction,
}

impl ForwardOutput {
    /// `F^ef_4`: the fused words at the coarsest scale.
    pub fn final_text(&self) -> Var {
        *self.fused.textual.last().expect("three fused scales")
    }

    pub fn prediction_values(&self, tape: &Tape) -> PredictionValues {
        PredictionValues {
            class_logits: tape.value(self.pred.class_logits).clone(),
            boxes: tape.value(self.pred.boxes).clone(),
            masks: tape.value(self.pred.masks).clone(),
        }
    }
}

/// Loss of one clip with its components and the matched trajectory.
#[derive(Clone, Debug)]
pub struct ClipLoss {
    pub total: Var,
    pub terms: LossTerms,
    pub matched: MatchResult,
}

#[derive(Clone, Debug)]
pub struct Model {
    pub config: Config,
    pub vocab: Vocabulary,
    visual: VisualEncoder,
    text: TextEncoder,
    fusion: Fusion,
    sim: Sim,
    heads: Heads,
}

impl Model {
    pub fn new(cfg: &Config) -> Result<Self> {
        cfg.validate()?;
        let vocab = Vocabulary::synthetic();
        let text = TextEncoder::new(cfg.text_dim, cfg.heads, cfg.ffn_dim, cfg.text_layers, vocab.len())?;
        let sim = Sim::new(
            SimDims {
                dim: cfg.d_model,
                text_dim: cfg.text_dim,
                heads: cfg.heads,
                hidden: cfg.ffn_dim,
                num_queries: cfg.num_queries,
                encoder_layers: cfg.num_encoder_layers,
                decoder_layers: cfg.num_decoder_layers,
                voc_layers: cfg.num_voc_layers,
            },
            cfg.voc_structure,
        )?;
        Ok(Self {
            config: cfg.clone(),
            vocab,
            visual: VisualEncoder,
            text,
            fusion: Fusion::new(cfg.fusion_strategy, cfg.d_model, cfg.text_dim, cfg.heads)?,
            sim,
            heads: Heads::new(cfg.d_model),
        })
    }

    pub fn heads(&self) -> &Heads {
        &self.heads
    }

    pub fn sim(&self) -> &Sim {
        &self.sim
    }

    pub fn fusion(&self) -> &Fusion {
        &self.fusion
    }

    pub fn text_encoder(&self) -> &TextEncoder {
        &self.text
    }

    /// Freshly initialized parameters; deterministic in `seed`.
    pub fn init_params(&self, seed: u64) -> ParamStore {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        self.visual.init(&mut store, &mut rng);
        self.text.init(&mut store, &mut rng);
        self.fusion.init(&mut store, &mut rng);
        self.sim.init(&mut store, &mut rng);
        self.heads.init(&mut store, &mut rng);
        store
    }

    pub fn encode_text(&self, text: &str) -> Result<TextExpression> {
        self.vocab.encode(text)
    }

    pub fn forward(&self, g: &mut Graph, clip: Var, expr: &TextExpression) -> Result<ForwardOutput> {
        let pyramid = self.visual.forward(g, clip)?;
        let text = self.text.forward(g, expr)?;
        let fused = self.fusion.forward(g, &pyramid, text.words)?;
        let (encoded, frame_queries) = self.sim.frame_content_aggregation(g, &fused)?;
        let (video_queries, enhanced_queries) = match self.sim.video_object_cluster(g, frame_queries, text.sentence)? {
            Some(v) => (v, broadcast_enhance(g, frame_queries, v)?),
            None => (self.sim.zero_video_queries(g), frame_queries),
        };
        let (pred, seg) = self.heads.forward(g, enhanced_queries, &encoded, &pyramid)?;
        Ok(ForwardOutput { pyramid, text, fused, encoded, frame_queries, video_queries, enhanced_queries, seg, pred })
    }

    /// Matches the best trajectory and assembles the weighted loss.
    pub fn clip_loss(&self, g: &mut Graph, out: &ForwardOutput, gt: &GroundTruth, w: &LossWeights) -> Result<ClipLoss> {
        let mut values = out.prediction_values(g);
        values.masks = {
            let mut scratch = Tape::new();
            let m = scratch.constant(values.masks);
            let up = mask_logits_at(&mut scratch, m, gt)?;
            scratch.value(up).clone()
        };
        let matched = match_trajectory(&values, gt, w)?;
        let terms = self.loss_terms(g, out, gt, matched.sigma)?;
        let total = total_loss(g, &terms, w)?;
        Ok(ClipLoss { total, terms, matched })
    }

    /// Loss components with query `sigma` as the referred trajectory.
    pub fn loss_terms(&self, g: &mut Graph, out: &ForwardOutput, gt: &GroundTruth, sigma: usize) -> Result<LossTerms> {
        let (t, nq, h, w) = match g.shape(out.pred.masks) {
            &[t, nq, h, w] => (t, nq, h, w),
            s => return Err(SocError::Contract(format!("mask predictions must be rank 4, got {s:?}"))),
        };
        let rows: Vec<usize> = gt.visible_frames().iter().map(|&f| f * nq + sigma).collect();
        let masks = g.reshape(out.pred.masks, &[t * nq, h * w])?;
        let masks = g.index_select(masks, &rows)?;
        let masks = g.reshape(masks, &[rows.len(), 1, h, w])?;
        let masks = mask_logits_at(g, masks, gt)?;
        let masks = g.reshape(masks, &[rows.len(), gt.masks.numel() / t])?;
        let boxes = g.reshape(out.pred.boxes, &[t * nq, 4])?;
        let boxes = g.index_select(boxes, &rows)?;
        let gm = gt.visible_masks();
        let dice = dice_loss(g, masks, &gm)?;
        let focal = focal_loss(g, masks, &gm)?;
        let (l1, giou) = box_losses(g, boxes, &gt.visible_boxes())?;
        let cls = class_loss(g, out.pred.class_logits, sigma, &gt.valid)?;
        let con = contrastive_loss(g, out.video_queries, out.final_text(), sigma)?;
        Ok(LossTerms { dice, focal, l1, giou, cls, con })
    }

    /// Inference: the query with the highest mean referred probability over
    /// the clip, its stride-4 mask logits upsampled to the input size and
    /// thresholded at probability 0.5. Frames where that query's referred
    /// probability falls below `ABSENT_RATIO` of its peak over the clip are
    /// taken as frames without the object and get an empty mask.
    pub fn predict(&self, params: &ParamStore, clip: &Tensor, expr: &TextExpression) -> Result<Prediction> {
        let mut tape = Tape::new();
        let mut g = Graph::new(&mut tape, params, false);
        let x = g.constant(clip.clone());
        let out = self.forward(&mut g, x, expr)?;
        let values = out.prediction_values(&g);
        let (t, nq) = (values.class_logits.shape()[0], values.class_logits.shape()[1]);
        let scores: Vec<f64> = (0..nq)
            .map(|n| (0..t).map(|f| soc_tensor::sigmoid(values.class_logits.data()[f * nq + n])).sum::<f64>() / t as f64)
            .collect();
        let query = scores
            .iter()
            .enumerate()
            .fold(0, |best, (n, &s)| if s > scores[best] { n } else { best });
        let s = values.masks.shape().to_vec();
        let (h, w) = (s[2], s[3]);
        let picked = g.reshape(out.pred.masks, &[t * nq, h * w])?;
        let rows: Vec<usize> = (0..t).map(|f| f * nq + query).collect();
        let picked = g.index_select(picked, &rows)?;
        let picked = g.reshape(picked, &[t, 1, h, w])?;
        let up = g.upsample_bilinear(picked, MASK_STRIDE)?;
        let (hh, ww) = (h * MASK_STRIDE, w * MASK_STRIDE);
        let probs: Vec<f64> = (0..t).map(|f| soc_tensor::sigmoid(values.class_logits.data()[f * nq + query])).collect();
        let peak = probs.iter().copied().fold(0.0, f64::max);
        let masks = g
            .data(up)
            .chunks(hh * ww)
            .enumerate()
            .map(|(f, frame)| {
                // A frame where the selected query is judged not referred
                // (the object is absent) yields an empty mask.
                if probs[f] >= ABSENT_RATIO * peak {
                    BinaryMask::from_values(hh, ww, frame, 0.0)
                } else {
                    Ok(BinaryMask::empty(hh, ww))
                }
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Prediction { query, scores, masks })
    }
}

/// Mask logits `[A, B, h, w]` bilinearly resized to the ground-truth
/// resolution (a no-op when they already match).
fn mask_logits_at(tape: &mut Tape, logits: Var, gt: &GroundTruth) -> Result<Var> {
    let s = tape.shape(logits).to_vec();
    let g = gt.masks.shape();
    let (gh, gw) = (g[1], g[2]);
    if s.len() != 4 || s[2] == 0 || gh % s[2] != 0 || gh / s[2] != gw / s[3] || gw % s[3] != 0 {
        return Err(SocError::Contract(format!("mask logits {s:?} cannot be resized to ground truth {g:?}")));
    }
    let factor = gh / s[2];
    Ok(if factor == 1 { logits } else { tape.upsample_bilinear(logits, factor)? })
}

/// Inference result for one clip.
#[derive(Clone, Debug)]
pub struct Prediction {
    pub query: usize,
    /// Mean referred probability of each query.
    pub scores: Vec<f64>,
    /// Full-resolution masks, one per frame.
    pub masks: Vec<BinaryMask>,
}

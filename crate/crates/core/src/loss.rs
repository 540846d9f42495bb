//! Training objectives: mask (dice + focal), box (L1 + GIoU), class focal,
//! the query/sentence contrastive term, and their weighted total. Every
//! term is built from tape operations so gradients come for free.

use soc_tensor::{Tape, Tensor, Var};

use crate::config::Config;
use crate::error::{Result, SocError};
use crate::metrics::BinaryMask;
use crate::synth::mask_box;

pub const FOCAL_ALPHA: f64 = 0.25;
pub const FOCAL_GAMMA: f64 = 2.0;
pub const DICE_SMOOTH: f64 = 1.0;
/// Guard on GIoU denominators (reached only by degenerate boxes).
pub const GIOU_EPS: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    pub cls: f64,
    pub l1: f64,
    pub giou: f64,
    pub dice: f64,
    pub focal: f64,
    pub con: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { cls: 2.0, l1: 2.0, giou: 2.0, dice: 2.0, focal: 5.0, con: 1.0 }
    }
}

impl LossWeights {
    pub fn from_config(cfg: &Config) -> Self {
        Self {
            cls: cfg.lambda_cls,
            l1: cfg.lambda_l1,
            giou: cfg.lambda_giou,
            dice: cfg.lambda_dice,
            focal: cfg.lambda_focal,
            con: cfg.lambda_con,
        }
    }

    pub fn scaled(&self, k: f64) -> Self {
        Self {
            cls: self.cls * k,
            l1: self.l1 * k,
            giou: self.giou * k,
            dice: self.dice * k,
            focal: self.focal * k,
            con: self.con * k,
        }
    }
}

/// The referred object over the clip: masks (optionally reduced by a stride),
/// normalized `(cx, cy, w, h)` boxes and per-frame visibility.
#[derive(Clone, Debug, PartialEq)]
pub struct GroundTruth {
    /// `[T, h, w]` with values in `{0, 1}`.
    pub masks: Tensor,
    /// `[T, 4]`
    pub boxes: Tensor,
    pub valid: Vec<bool>,
}

impl GroundTruth {
    /// Boxes come from the full-resolution masks; masks are reduced by
    /// `stride` to the prediction resolution.
    pub fn from_masks(full: &[BinaryMask], stride: usize) -> Result<Self> {
        let first = full.first().ok_or_else(|| SocError::Contract("ground truth needs at least one frame".into()))?;
        let (h, w) = (first.height() / stride, first.width() / stride);
        let mut masks = Vec::with_capacity(full.len() * h * w);
        let mut boxes = Vec::with_capacity(full.len() * 4);
        let mut valid = Vec::with_capacity(full.len());
        for m in full {
            masks.extend(m.downsample(stride)?.to_values());
            let (b, v) = mask_box(m);
            boxes.extend(b);
            valid.push(v);
        }
        Ok(Self {
            masks: Tensor::new(&[full.len(), h, w], masks)?,
            boxes: Tensor::new(&[full.len(), 4], boxes)?,
            valid,
        })
    }

    pub fn frames(&self) -> usize {
        self.valid.len()
    }

    pub fn visible_frames(&self) -> Vec<usize> {
        self.valid.iter().enumerate().filter(|(_, &v)| v).map(|(i, _)| i).collect()
    }

    fn rows(t: &Tensor, idx: &[usize]) -> Tensor {
        let n = t.numel() / t.shape()[0];
        let data = idx.iter().flat_map(|&i| t.data()[i * n..(i + 1) * n].iter().copied()).collect();
        Tensor::new(&[idx.len(), n], data).expect("row selection keeps sizes")
    }

    /// Visible-frame masks as `[V, h * w]`.
    pub fn visible_masks(&self) -> Tensor {
        Self::rows(&self.masks, &self.visible_frames())
    }

    /// Visible-frame boxes as `[V, 4]`.
    pub fn visible_boxes(&self) -> Tensor {
        Self::rows(&self.boxes, &self.visible_frames())
    }
}

fn require_visible(n: usize) -> Result<()> {
    if n == 0 {
        return Err(SocError::Contract("the referred object is visible on no frame".into()));
    }
    Ok(())
}

/// Dice loss `1 - (2 sum(p g) + 1) / (sum(p) + sum(g) + 1)` per row of
/// `logits` / `gt` (`[V, P]`), averaged over rows.
pub fn dice_loss(tape: &mut Tape, logits: Var, gt: &Tensor) -> Result<Var> {
    let rows = tape.shape(logits)[0];
    require_visible(rows)?;
    let g = tape.constant(gt.clone());
    let p = tape.sigmoid(logits)?;
    let pg = tape.mul(p, g)?;
    let inter = tape.sum_axis(pg, 1)?;
    let num = tape.scale(inter, 2.0)?;
    let num = tape.add_scalar(num, DICE_SMOOTH)?;
    let sp = tape.sum_axis(p, 1)?;
    let sg: Vec<f64> = gt.data().chunks(gt.numel() / rows).map(|r| r.iter().sum::<f64>() + DICE_SMOOTH).collect();
    let sg = tape.constant(Tensor::new(&[rows], sg)?);
    let den = tape.add(sp, sg)?;
    let ratio = tape.div(num, den)?;
    let mean = tape.mean(ratio)?;
    let neg = tape.neg(mean)?;
    Ok(tape.add_scalar(neg, 1.0)?)
}

/// Element-wise alpha-balanced focal loss on logits against binary targets
/// (unreduced, same shape as `logits`).
pub fn focal_terms(tape: &mut Tape, logits: Var, gt: &Tensor) -> Result<Var> {
    let g = tape.constant(gt.clone());
    let p = tape.sigmoid(logits)?;
    // binary cross-entropy with logits: softplus(x) - x g
    let sp = tape.softplus(logits)?;
    let xg = tape.mul(logits, g)?;
    let ce = tape.sub(sp, xg)?;
    // 1 - p_t = p (1 - 2g) + g for g in {0, 1}
    let coef = tape.constant(Tensor::from_fn(gt.shape(), |i| 1.0 - 2.0 * gt.data()[i]));
    let miss = tape.mul(p, coef)?;
    let miss = tape.add(miss, g)?;
    let modulator = tape.square(miss)?;
    debug_assert_eq!(FOCAL_GAMMA, 2.0);
    let alpha = tape.constant(Tensor::from_fn(gt.shape(), |i| {
        let y = gt.data()[i];
        FOCAL_ALPHA * y + (1.0 - FOCAL_ALPHA) * (1.0 - y)
    }));
    let w = tape.mul(modulator, alpha)?;
    Ok(tape.mul(w, ce)?)
}

/// Focal loss averaged over every pixel of every row.
pub fn focal_loss(tape: &mut Tape, logits: Var, gt: &Tensor) -> Result<Var> {
    require_visible(tape.shape(logits)[0])?;
    let terms = focal_terms(tape, logits, gt)?;
    Ok(tape.mean(terms)?)
}

fn column(tape: &mut Tape, b: Var, c: usize) -> Result<Var> {
    Ok(tape.narrow(b, 1, c, 1)?)
}

/// Corners `(x0, y0, x1, y1)` of `[V, 4]` centre-size boxes.
fn corners(tape: &mut Tape, b: Var) -> Result<[Var; 4]> {
    let (cx, cy, w, h) = (column(tape, b, 0)?, column(tape, b, 1)?, column(tape, b, 2)?, column(tape, b, 3)?);
    let hw = tape.scale(w, 0.5)?;
    let hh = tape.scale(h, 0.5)?;
    Ok([tape.sub(cx, hw)?, tape.sub(cy, hh)?, tape.add(cx, hw)?, tape.add(cy, hh)?])
}

/// L1 over the four coordinates (summed) and `1 - GIoU`, both averaged
/// over the `[V, 4]` rows.
pub fn box_losses(tape: &mut Tape, pred: Var, gt: &Tensor) -> Result<(Var, Var)> {
    let rows = tape.shape(pred)[0];
    require_visible(rows)?;
    let g = tape.constant(gt.clone());
    let diff = tape.sub(pred, g)?;
    let abs = tape.abs(diff)?;
    let l1 = tape.sum(abs)?;
    let l1 = tape.scale(l1, 1.0 / rows as f64)?;

    let [px0, py0, px1, py1] = corners(tape, pred)?;
    let [gx0, gy0, gx1, gy1] = corners(tape, g)?;
    let area = |tape: &mut Tape, x0: Var, y0: Var, x1: Var, y1: Var| -> Result<Var> {
        let w = tape.sub(x1, x0)?;
        let h = tape.sub(y1, y0)?;
        Ok(tape.mul(w, h)?)
    };
    let ap = area(tape, px0, py0, px1, py1)?;
    let ag = area(tape, gx0, gy0, gx1, gy1)?;
    let ix0 = tape.maximum(px0, gx0)?;
    let iy0 = tape.maximum(py0, gy0)?;
    let ix1 = tape.minimum(px1, gx1)?;
    let iy1 = tape.minimum(py1, gy1)?;
    let iw = tape.sub(ix1, ix0)?;
    let iw = tape.relu(iw)?;
    let ih = tape.sub(iy1, iy0)?;
    let ih = tape.relu(ih)?;
    let inter = tape.mul(iw, ih)?;
    let sum = tape.add(ap, ag)?;
    let union = tape.sub(sum, inter)?;
    let eps = tape.constant(Tensor::scalar(GIOU_EPS));
    let union_safe = tape.maximum(union, eps)?;
    let iou = tape.div(inter, union_safe)?;
    let hx0 = tape.minimum(px0, gx0)?;
    let hy0 = tape.minimum(py0, gy0)?;
    let hx1 = tape.maximum(px1, gx1)?;
    let hy1 = tape.maximum(py1, gy1)?;
    let hull = area(tape, hx0, hy0, hx1, hy1)?;
    let hull_safe = tape.maximum(hull, eps)?;
    let gap = tape.sub(hull, union)?;
    let penalty = tape.div(gap, hull_safe)?;
    let giou = tape.sub(iou, penalty)?;
    let mean = tape.mean(giou)?;
    let neg = tape.neg(mean)?;
    let giou_loss = tape.add_scalar(neg, 1.0)?;
    Ok((l1, giou_loss))
}

/// Class targets: 1 for query `sigma` on visible frames, 0 elsewhere.
pub fn class_targets(frames: usize, queries: usize, sigma: usize, valid: &[bool]) -> Tensor {
    Tensor::from_fn(&[frames, queries, 1], |i| {
        let (t, n) = (i / queries, i % queries);
        f64::from(u8::from(n == sigma && valid[t]))
    })
}

/// Focal loss of `[T, N_q, 1]` logits with the matched query positive on
/// visible frames, summed and divided by the number of visible frames.
pub fn class_loss(tape: &mut Tape, logits: Var, sigma: usize, valid: &[bool]) -> Result<Var> {
    let (t, n) = match tape.shape(logits) {
        &[t, n, 1] => (t, n),
        s => return Err(SocError::Contract(format!("class logits must be [T, N_q, 1], got {s:?}"))),
    };
    let visible = valid.iter().filter(|&&v| v).count();
    require_visible(visible)?;
    if valid.len() != t || sigma >= n {
        return Err(SocError::Contract(format!("matched query {sigma} / {} flags for logits of {t} x {n}", valid.len())));
    }
    let targets = class_targets(t, n, sigma, valid);
    let terms = focal_terms(tape, logits, &targets)?;
    let total = tape.sum(terms)?;
    Ok(tape.scale(total, 1.0 / visible as f64)?)
}

/// `-log softmax(O^v mean(F^ef_4)^T / sqrt(D))[sigma]`.
pub fn contrastive_loss(tape: &mut Tape, video_q: Var, fused_text: Var, sigma: usize) -> Result<Var> {
    let (n, d) = match tape.shape(video_q) {
        &[n, d] => (n, d),
        s => return Err(SocError::Contract(format!("video queries must be [N_v, D], got {s:?}"))),
    };
    if sigma >= n {
        return Err(SocError::Contract(format!("matched query {sigma} out of {n}")));
    }
    let guide = tape.mean_axis(fused_text, 0)?;
    let guide = tape.reshape(guide, &[d, 1])?;
    let sim = tape.matmul(video_q, guide)?;
    let sim = tape.scale(sim, 1.0 / (d as f64).sqrt())?;
    let sim = tape.reshape(sim, &[n])?;
    let logp = tape.log_softmax(sim, 0)?;
    let picked = tape.narrow(logp, 0, sigma, 1)?;
    let picked = tape.sum(picked)?;
    Ok(tape.neg(picked)?)
}

/// Loss components of one clip.
#[derive(Clone, Copy, Debug)]
pub struct LossTerms {
    pub dice: Var,
    pub focal: Var,
    pub l1: Var,
    pub giou: Var,
    pub cls: Var,
    pub con: Var,
}

/// `λ_dice dice + λ_focal focal + λ_L1 l1 + λ_giou giou + λ_cls cls + λ_con con`.
pub fn total_loss(tape: &mut Tape, terms: &LossTerms, w: &LossWeights) -> Result<Var> {
    let parts = [
        (terms.dice, w.dice),
        (terms.focal, w.focal),
        (terms.l1, w.l1),
        (terms.giou, w.giou),
        (terms.cls, w.cls),
        (terms.con, w.con),
    ];
    let mut total = tape.scale(parts[0].0, parts[0].1)?;
    for &(v, lambda) in &parts[1..] {
        let s = tape.scale(v, lambda)?;
        total = tape.add(total, s)?;
    }
    Ok(total)
}

/// Plain values of the components and the total, for logging.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossValues {
    pub total: f64,
    pub dice: f64,
    pub focal: f64,
    pub l1: f64,
    pub giou: f64,
    pub cls: f64,
    pub con: f64,
}

impl LossValues {
    pub fn read(tape: &Tape, terms: &LossTerms, total: Var) -> Self {
        let v = |x: Var| tape.value(x).item();
        Self {
            total: v(total),
            dice: v(terms.dice),
            focal: v(terms.focal),
            l1: v(terms.l1),
            giou: v(terms.giou),
            cls: v(terms.cls),
            con: v(terms.con),
        }
    }

    pub fn add_scaled(&mut self, other: &Self, k: f64) {
        self.total += k * other.total;
        self.dice += k * other.dice;
        self.focal += k * other.focal;
        self.l1 += k * other.l1;
        self.giou += k * other.giou;
        self.cls += k * other.cls;
        self.con += k * other.con;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar(tape: &Tape, v: Var) -> f64 {
        tape.value(v).item()
    }

    #[test]
    fn dice_limits() {
        let mut tape = Tape::new();
        let gt = Tensor::new(&[1, 4], vec![1.0, 0.0, 1.0, 0.0]).unwrap();
        let perfect = tape.constant(Tensor::new(&[1, 4], vec![40.0, -40.0, 40.0, -40.0]).unwrap());
        let d = dice_loss(&mut tape, perfect, &gt).unwrap();
        assert!(scalar(&tape, d) < 1e-12);
        let f = focal_loss(&mut tape, perfect, &gt).unwrap();
        assert!(scalar(&tape, f) < 1e-12);
        let empty = Tensor::zeros(&[1, 4]);
        let off = tape.constant(Tensor::full(&[1, 4], -800.0));
        let d = dice_loss(&mut tape, off, &empty).unwrap();
        assert_eq!(scalar(&tape, d), 0.0);
    }

    #[test]
    fn focal_at_zero_logit() {
        let mut tape = Tape::new();
        let gt = Tensor::new(&[1, 2], vec![1.0, 0.0]).unwrap();
        let x = tape.constant(Tensor::zeros(&[1, 2]));
        let f = focal_loss(&mut tape, x, &gt).unwrap();
        // p = 1/2: alpha_t * 1/4 * ln 2, alphas 0.25 and 0.75
        let expected = 0.5 * (0.25 + 0.75) * 0.25 * std::f64::consts::LN_2;
        assert!((scalar(&tape, f) - expected).abs() < 1e-15);
    }

    #[test]
    fn box_cases() {
        let mut tape = Tape::new();
        let b = Tensor::new(&[1, 4], vec![0.5, 0.5, 0.2, 0.4]).unwrap();
        let p = tape.constant(b.clone());
        let (l1, giou) = box_losses(&mut tape, p, &b).unwrap();
        assert_eq!(scalar(&tape, l1), 0.0);
        assert!(scalar(&tape, giou).abs() < 1e-15);
        let left = tape.constant(Tensor::new(&[1, 4], vec![0.25, 0.5, 0.5, 1.0]).unwrap());
        let apart = Tensor::new(&[1, 4], vec![0.875, 0.5, 0.25, 1.0]).unwrap();
        let (_, giou) = box_losses(&mut tape, left, &apart).unwrap();
        assert!(scalar(&tape, giou) > 1.0);
        let point = Tensor::new(&[1, 4], vec![0.5, 0.5, 0.0, 0.0]).unwrap();
        let (_, giou) = box_losses(&mut tape, p, &point).unwrap();
        assert!(scalar(&tape, giou).is_finite());
    }

    #[test]
    fn contrastive_uniform_is_log_n() {
        let mut tape = Tape::new();
        let v = tape.constant(Tensor::full(&[4, 8], 0.3));
        let f = tape.constant(Tensor::from_fn(&[3, 8], |i| i as f64));
        let c = contrastive_loss(&mut tape, v, f, 2).unwrap();
        assert!((scalar(&tape, c) - 4f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn total_is_linear_in_weights() {
        let mut tape = Tape::new();
        let mk = |tape: &mut Tape, x: f64| tape.constant(Tensor::scalar(x));
        let terms = LossTerms {
            dice: mk(&mut tape, 0.1),
            focal: mk(&mut tape, 0.2),
            l1: mk(&mut tape, 0.3),
            giou: mk(&mut tape, 0.4),
            cls: mk(&mut tape, 0.5),
            con: mk(&mut tape, 0.6),
        };
        let w = LossWeights::default();
        let a = total_loss(&mut tape, &terms, &w).unwrap();
        let b = total_loss(&mut tape, &terms, &w.scaled(2.0)).unwrap();
        assert!((2.0 * scalar(&tape, a) - scalar(&tape, b)).abs() < 1e-12);
        assert!((scalar(&tape, a) - (0.2 + 1.0 + 0.6 + 0.8 + 1.0 + 0.6)).abs() < 1e-12);
    }

    #[test]
    fn no_visible_frames_is_an_error() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::zeros(&[2, 3, 1]));
        assert!(matches!(class_loss(&mut tape, x, 0, &[false, false]), Err(SocError::Contract(_))));
    }
}

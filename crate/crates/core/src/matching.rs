//! Minimum-cost assignment (Hungarian method with row/column potentials)
//! and selection of the query trajectory that best explains the referred
//! object.

use soc_tensor::{Tape, Tensor};

use crate::error::{Result, SocError};
use crate::loss::{box_losses, class_loss, dice_loss, focal_loss, GroundTruth, LossWeights};

/// Optimal one-to-one assignment of `min(n, m)` pairs.
#[derive(Clone, Debug, PartialEq)]
pub struct Assignment {
    /// `(row, col)` pairs sorted by row.
    pub pairs: Vec<(usize, usize)>,
    pub cost: f64,
}

/// Solves the rectangular assignment problem on an `n x m` cost matrix
/// (given row-major). Runs in `O(min(n,m)^2 max(n,m))`.
pub fn hungarian(cost: &[f64], n: usize, m: usize) -> Result<Assignment> {
    if cost.len() != n * m {
        return Err(SocError::Contract(format!("cost matrix of {n}x{m} needs {} entries, got {}", n * m, cost.len())));
    }
    if let Some(bad) = cost.iter().find(|c| !c.is_finite()) {
        return Err(SocError::Contract(format!("cost matrix contains a non-finite entry ({bad})")));
    }
    if n == 0 || m == 0 {
        return Ok(Assignment { pairs: Vec::new(), cost: 0.0 });
    }
    // Work with rows <= columns; transpose otherwise.
    let transposed = n > m;
    let (rows, cols) = if transposed { (m, n) } else { (n, m) };
    let at = |i: usize, j: usize| if transposed { cost[j * m + i] } else { cost[i * m + j] };

    // 1-based potentials formulation; column 0 is a virtual start.
    let mut u = vec![0.0; rows + 1];
    let mut v = vec![0.0; cols + 1];
    let mut owner = vec![0usize; cols + 1];
    let mut way = vec![0usize; cols + 1];
    for i in 1..=rows {
        owner[0] = i;
        let mut j0 = 0;
        let mut minv = vec![f64::INFINITY; cols + 1];
        let mut used = vec![false; cols + 1];
        loop {
            used[j0] = true;
            let i0 = owner[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=cols {
                if used[j] {
                    continue;
                }
                let cur = at(i0 - 1, j - 1) - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=cols {
                if used[j] {
                    u[owner[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if owner[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            owner[j0] = owner[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut pairs: Vec<(usize, usize)> = (1..=cols)
        .filter(|&j| owner[j] != 0)
        .map(|j| if transposed { (j - 1, owner[j] - 1) } else { (owner[j] - 1, j - 1) })
        .collect();
    pairs.sort_unstable();
    let total = pairs.iter().map(|&(i, j)| cost[i * m + j]).sum();
    Ok(Assignment { pairs, cost: total })
}

/// The matched query `sigma`, its cost, every query's cost, and the
/// one-hot target `y_tau`.
#[derive(Clone, Debug, PartialEq)]
pub struct MatchResult {
    pub sigma: usize,
    pub cost: f64,
    pub costs: Vec<f64>,
    pub y_tau: Vec<f64>,
}

/// Plain prediction values (no tape) of one clip.
#[derive(Clone, Debug)]
pub struct PredictionValues {
    /// `[T, N_q, 1]`
    pub class_logits: Tensor,
    /// `[T, N_q, 4]`
    pub boxes: Tensor,
    /// `[T, N_q, h, w]`
    pub masks: Tensor,
}

impl PredictionValues {
    pub fn num_queries(&self) -> usize {
        self.class_logits.shape()[1]
    }

    /// Query `n` on the given frames: mask logits `[V, h w]` and boxes `[V, 4]`.
    pub fn query_rows(&self, n: usize, frames: &[usize]) -> (Tensor, Tensor) {
        let s = self.masks.shape();
        let (nq, hw) = (s[1], s[2] * s[3]);
        let mut masks = Vec::with_capacity(frames.len() * hw);
        let mut boxes = Vec::with_capacity(frames.len() * 4);
        for &t in frames {
            let off = (t * nq + n) * hw;
            masks.extend_from_slice(&self.masks.data()[off..off + hw]);
            let off = (t * nq + n) * 4;
            boxes.extend_from_slice(&self.boxes.data()[off..off + 4]);
        }
        (
            Tensor::new(&[frames.len(), hw], masks).expect("non-empty selection"),
            Tensor::new(&[frames.len(), 4], boxes).expect("non-empty selection"),
        )
    }
}

/// Cost of declaring query `n` the referred trajectory: the weighted
/// training terms (class, box, mask) with `n` as the positive.
pub fn trajectory_cost(pred: &PredictionValues, gt: &GroundTruth, w: &LossWeights, n: usize) -> Result<f64> {
    let frames = gt.visible_frames();
    if frames.is_empty() {
        return Err(SocError::Contract("cannot match a trajectory that is never visible".into()));
    }
    let mut tape = Tape::new();
    let (masks, boxes) = pred.query_rows(n, &frames);
    let logits = tape.constant(pred.class_logits.clone());
    let cls = class_loss(&mut tape, logits, n, &gt.valid)?;
    let b = tape.constant(boxes);
    let (l1, giou) = box_losses(&mut tape, b, &gt.visible_boxes())?;
    let m = tape.constant(masks);
    let gm = gt.visible_masks();
    let dice = dice_loss(&mut tape, m, &gm)?;
    let focal = focal_loss(&mut tape, m, &gm)?;
    let v = |x| tape.value(x).item();
    Ok(w.cls * v(cls) + (w.l1 * v(l1) + w.giou * v(giou)) + (w.dice * v(dice) + w.focal * v(focal)))
}

/// Picks the best trajectory for the single referred object by solving the
/// `N_q x 1` assignment over per-query costs.
pub fn match_trajectory(pred: &PredictionValues, gt: &GroundTruth, w: &LossWeights) -> Result<MatchResult> {
    let nq = pred.num_queries();
    let costs = (0..nq).map(|n| trajectory_cost(pred, gt, w, n)).collect::<Result<Vec<_>>>()?;
    let a = hungarian(&costs, nq, 1)?;
    let sigma = a.pairs[0].0;
    let mut y_tau = vec![0.0; nq];
    y_tau[sigma] = 1.0;
    Ok(MatchResult { sigma, cost: a.cost, costs, y_tau })
}

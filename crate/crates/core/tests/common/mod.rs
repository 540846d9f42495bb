//! Brute-force reference implementations and fixtures shared by the
//! integration tests. Nothing here calls into the code under test except to
//! build inputs.

#![allow(dead_code)]

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use soc_core::metrics::BinaryMask;

/// Minimum assignment cost by enumerating every injective map from the
/// shorter side to the longer one. Each candidate's cost is summed over
/// its chosen entries in row order.
pub fn brute_force_assignment(cost: &[f64], n: usize, m: usize) -> f64 {
    // Assign each element of the shorter side (`k` of them) to a distinct
    // element of the longer side (`l`).
    fn go(k: usize, l: usize, depth: usize, used: &mut Vec<bool>, chosen: &mut Vec<usize>, eval: &dyn Fn(&[usize]) -> f64, best: &mut f64) {
        if depth == k {
            *best = best.min(eval(chosen));
            return;
        }
        for j in 0..l {
            if !used[j] {
                used[j] = true;
                chosen.push(j);
                go(k, l, depth + 1, used, chosen, eval, best);
                chosen.pop();
                used[j] = false;
            }
        }
    }
    let (k, l) = (n.min(m), n.max(m));
    let eval = |chosen: &[usize]| -> f64 {
        let mut pairs: Vec<(usize, usize)> =
            chosen.iter().enumerate().map(|(a, &b)| if n <= m { (a, b) } else { (b, a) }).collect();
        pairs.sort_unstable();
        pairs.iter().map(|&(i, j)| cost[i * m + j]).sum()
    };
    let mut best = f64::INFINITY;
    go(k, l, 0, &mut vec![false; l], &mut Vec::new(), &eval, &mut best);
    best
}

/// A mask made of up to three random rectangles and discs (possibly none).
pub fn random_mask(rng: &mut ChaCha8Rng, h: usize, w: usize) -> BinaryMask {
    let parts = rng.random_range(0..=3);
    let mut grid = vec![false; h * w];
    for _ in 0..parts {
        let (cy, cx) = (rng.random_range(0..h) as f64, rng.random_range(0..w) as f64);
        let r = rng.random_range(1.0..(h.min(w) as f64 / 3.0));
        let disc = rng.random_bool(0.5);
        for y in 0..h {
            for x in 0..w {
                let (dy, dx) = (y as f64 - cy, x as f64 - cx);
                let inside = if disc { dy * dy + dx * dx <= r * r } else { dy.abs() <= r && dx.abs() <= 0.7 * r };
                grid[y * w + x] |= inside;
            }
        }
    }
    BinaryMask::new(h, w, grid).unwrap()
}

/// A perturbed copy of `m`: every pixel flips with probability `p`, which
/// keeps the two masks correlated so IoUs spread over (0, 1).
pub fn perturbed(rng: &mut ChaCha8Rng, m: &BinaryMask, p: f64) -> BinaryMask {
    let data = m.data().iter().map(|&v| v ^ rng.random_bool(p)).collect();
    BinaryMask::new(m.height(), m.width(), data).unwrap()
}

pub fn oracle_iou(a: &BinaryMask, b: &BinaryMask) -> f64 {
    let (mut inter, mut union) = (0u32, 0u32);
    for y in 0..a.height() {
        for x in 0..a.width() {
            let (p, g) = (a.get(y, x), b.get(y, x));
            if p && g {
                inter += 1;
            }
            if p || g {
                union += 1;
            }
        }
    }
    if union == 0 {
        1.0
    } else {
        f64::from(inter) / f64::from(union)
    }
}

/// Boundary pixels as coordinates: foreground with a 4-neighbour that is
/// background or off the image.
fn boundary_points(m: &BinaryMask) -> Vec<(i64, i64)> {
    let (h, w) = (m.height() as i64, m.width() as i64);
    let fg = |y: i64, x: i64| y >= 0 && x >= 0 && y < h && x < w && m.get(y as usize, x as usize);
    let mut pts = Vec::new();
    for y in 0..h {
        for x in 0..w {
            if fg(y, x) && [(-1, 0), (1, 0), (0, -1), (0, 1)].iter().any(|&(dy, dx)| !fg(y + dy, x + dx)) {
                pts.push((y, x));
            }
        }
    }
    pts
}

/// Boundary F-measure with matching by explicit Euclidean distance search.
pub fn oracle_boundary_f(pred: &BinaryMask, gt: &BinaryMask, tol: usize) -> f64 {
    let (pb, gb) = (boundary_points(pred), boundary_points(gt));
    match (pb.is_empty(), gb.is_empty()) {
        (true, true) => return 1.0,
        (true, false) | (false, true) => return 0.0,
        _ => {}
    }
    let t2 = (tol * tol) as i64;
    let matched = |from: &[(i64, i64)], to: &[(i64, i64)]| {
        from.iter()
            .filter(|&&(y, x)| to.iter().any(|&(v, u)| (y - v) * (y - v) + (x - u) * (x - u) <= t2))
            .count() as f64
    };
    let precision = matched(&pb, &gb) / pb.len() as f64;
    let recall = matched(&gb, &pb) / gb.len() as f64;
    if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    }
}

pub fn oracle_precision_at(ious: &[f64], k: f64) -> f64 {
    let mut hits = 0usize;
    for &v in ious {
        if v > k {
            hits += 1;
        }
    }
    hits as f64 / ious.len() as f64
}

pub fn oracle_map(ious: &[f64]) -> f64 {
    let ks = [0.50, 0.55, 0.60, 0.65, 0.70, 0.75, 0.80, 0.85, 0.90, 0.95];
    ks.iter().map(|&k| oracle_precision_at(ious, k)).sum::<f64>() / ks.len() as f64
}

/// Population variance via the second moment.
pub fn oracle_variance(v: &[f64]) -> f64 {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    v.iter().map(|x| x * x).sum::<f64>() / n - mean * mean
}

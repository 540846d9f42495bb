//! Referring-segmentation metrics: region similarity J (mask IoU), contour
//! accuracy F (boundary F-measure), Precision@K, overall / mean IoU,
//! threshold-averaged mAP and per-video temporal stability.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Result, SocError};

/// Binary mask stored row-major.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct BinaryMask {
    height: usize,
    width: usize,
    data: Vec<bool>,
}

impl BinaryMask {
    pub fn new(height: usize, width: usize, data: Vec<bool>) -> Result<Self> {
        if data.len() != height * width {
            return Err(SocError::Contract(format!(
                "mask of {height}x{width} needs {} values, got {}",
                height * width,
                data.len()
            )));
        }
        Ok(Self { height, width, data })
    }

    pub fn empty(height: usize, width: usize) -> Self {
        Self { height, width, data: vec![false; height * width] }
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> bool) -> Self {
        let data = (0..height * width).map(|i| f(i / width, i % width)).collect();
        Self { height, width, data }
    }

    /// Thresholds real values (`v > threshold`).
    pub fn from_values(height: usize, width: usize, values: &[f64], threshold: f64) -> Result<Self> {
        Self::new(height, width, values.iter().map(|&v| v > threshold).collect())
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[bool] {
        &self.data
    }

    pub fn get(&self, y: usize, x: usize) -> bool {
        self.data[y * self.width + x]
    }

    pub fn set(&mut self, y: usize, x: usize, v: bool) {
        self.data[y * self.width + x] = v;
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&v| v).count()
    }

    pub fn is_empty(&self) -> bool {
        !self.data.iter().any(|&v| v)
    }

    pub fn to_values(&self) -> Vec<f64> {
        self.data.iter().map(|&v| f64::from(u8::from(v))).collect()
    }

    /// Tight bounding box `(x0, y0, x1, y1)` with inclusive pixel bounds.
    pub fn bounding_box(&self) -> Option<(usize, usize, usize, usize)> {
        let mut bb: Option<(usize, usize, usize, usize)> = None;
        for y in 0..self.height {
            for x in 0..self.width {
                if self.get(y, x) {
                    bb = Some(match bb {
                        None => (x, y, x, y),
                        Some((x0, y0, x1, y1)) => (x0.min(x), y0.min(y), x1.max(x), y1.max(y)),
                    });
                }
            }
        }
        bb
    }

    /// Downsamples by `factor`, marking a cell when at least half of its
    /// pixels are set.
    pub fn downsample(&self, factor: usize) -> Result<Self> {
        if factor == 0 || self.height % factor != 0 || self.width % factor != 0 {
            return Err(SocError::Contract(format!(
                "cannot downsample a {}x{} mask by {factor}",
                self.height, self.width
            )));
        }
        let (h, w) = (self.height / factor, self.width / factor);
        Ok(Self::from_fn(h, w, |y, x| {
            let mut n = 0;
            for dy in 0..factor {
                for dx in 0..factor {
                    n += usize::from(self.get(y * factor + dy, x * factor + dx));
                }
            }
            2 * n >= factor * factor
        }))
    }

    /// Run lengths over the row-major data, starting with a (possibly zero)
    /// run of unset pixels and alternating.
    pub fn to_rle(&self) -> Vec<usize> {
        let mut runs = Vec::new();
        let mut current = false;
        let mut len = 0;
        for &v in &self.data {
            if v != current {
                runs.push(len);
                current = v;
                len = 0;
            }
            len += 1;
        }
        runs.push(len);
        runs
    }

    pub fn from_rle(height: usize, width: usize, runs: &[usize]) -> Result<Self> {
        let mut data = Vec::with_capacity(height * width);
        for (i, &len) in runs.iter().enumerate() {
            data.extend(std::iter::repeat(i % 2 == 1).take(len));
        }
        Self::new(height, width, data)
    }

    fn check_same(&self, other: &Self) -> Result<()> {
        if (self.height, self.width) != (other.height, other.width) {
            return Err(SocError::Contract(format!(
                "mask shapes differ: {}x{} vs {}x{}",
                self.height, self.width, other.height, other.width
            )));
        }
        Ok(())
    }

    /// Foreground pixels with at least one 4-neighbour outside the mask
    /// (pixels beyond the image border count as outside).
    pub fn boundary(&self) -> Self {
        let (h, w) = (self.height, self.width);
        Self::from_fn(h, w, |y, x| {
            self.get(y, x)
                && (y == 0
                    || x == 0
                    || y + 1 == h
                    || x + 1 == w
                    || !self.get(y - 1, x)
                    || !self.get(y + 1, x)
                    || !self.get(y, x - 1)
                    || !self.get(y, x + 1))
        })
    }

    /// Dilation by a Euclidean disk of radius `r`.
    pub fn dilate(&self, r: usize) -> Self {
        let (h, w) = (self.height, self.width);
        let mut out = Self::empty(h, w);
        let ri = r as isize;
        let offsets: Vec<(isize, isize)> = (-ri..=ri)
            .flat_map(|dy| (-ri..=ri).map(move |dx| (dy, dx)))
            .filter(|&(dy, dx)| dy * dy + dx * dx <= ri * ri)
            .collect();
        for y in 0..h {
            for x in 0..w {
                if !self.get(y, x) {
                    continue;
                }
                for &(dy, dx) in &offsets {
                    let (yy, xx) = (y as isize + dy, x as isize + dx);
                    if yy >= 0 && xx >= 0 && (yy as usize) < h && (xx as usize) < w {
                        out.set(yy as usize, xx as usize, true);
                    }
                }
            }
        }
        out
    }
}

/// Intersection and union pixel counts.
pub fn intersection_union(pred: &BinaryMask, gt: &BinaryMask) -> Result<(usize, usize)> {
    pred.check_same(gt)?;
    let (mut inter, mut union) = (0, 0);
    for (&p, &g) in pred.data.iter().zip(&gt.data) {
        inter += usize::from(p && g);
        union += usize::from(p || g);
    }
    Ok((inter, union))
}

fn ratio_or_one(inter: usize, union: usize) -> f64 {
    if union == 0 {
        1.0
    } else {
        inter as f64 / union as f64
    }
}

/// Region similarity J: |pred ∩ gt| / |pred ∪ gt|, 1 when both are empty.
pub fn iou(pred: &BinaryMask, gt: &BinaryMask) -> Result<f64> {
    let (i, u) = intersection_union(pred, gt)?;
    Ok(ratio_or_one(i, u))
}

/// Default contour tolerance: 0.8% of the image diagonal, rounded up.
pub fn default_tolerance(height: usize, width: usize) -> usize {
    (0.008 * ((height * height + width * width) as f64).sqrt()).ceil() as usize
}

/// Contour accuracy F: boundary precision / recall where a boundary pixel
/// counts as matched if it lies within `tol` pixels of the other boundary.
pub fn boundary_f(pred: &BinaryMask, gt: &BinaryMask, tol: usize) -> Result<f64> {
    pred.check_same(gt)?;
    let (pb, gb) = (pred.boundary(), gt.boundary());
    let (np, ng) = (pb.count(), gb.count());
    if np == 0 && ng == 0 {
        return Ok(1.0);
    }
    if np == 0 || ng == 0 {
        return Ok(0.0);
    }
    let (pd, gd) = (pb.dilate(tol), gb.dilate(tol));
    let hits = |a: &BinaryMask, b: &BinaryMask| a.data.iter().zip(&b.data).filter(|(&x, &y)| x && y).count();
    let precision = hits(&pb, &gd) as f64 / np as f64;
    let recall = hits(&gb, &pd) as f64 / ng as f64;
    if precision + recall == 0.0 {
        return Ok(0.0);
    }
    Ok(2.0 * precision * recall / (precision + recall))
}

/// Thresholds reported as Precision@K.
pub const PRECISION_THRESHOLDS: [f64; 5] = [0.5, 0.6, 0.7, 0.8, 0.9];

/// IoU thresholds 0.50, 0.55, ..., 0.95 averaged by mAP.
pub fn map_thresholds() -> [f64; 10] {
    std::array::from_fn(|i| (50 + 5 * i) as f64 / 100.0)
}

/// Fraction of samples whose IoU exceeds `k`.
pub fn precision_at(ious: &[f64], k: f64) -> Result<f64> {
    if ious.is_empty() {
        return Err(SocError::Contract("precision over an empty sample list".into()));
    }
    Ok(ious.iter().filter(|&&v| v > k).count() as f64 / ious.len() as f64)
}

/// With one prediction per sample, average precision at a threshold is the
/// hit rate; mAP averages it over the ten thresholds.
pub fn mean_average_precision(ious: &[f64]) -> Result<f64> {
    let ts = map_thresholds();
    let mut total = 0.0;
    for t in ts {
        total += precision_at(ious, t)?;
    }
    Ok(total / ts.len() as f64)
}

/// Population variance of per-frame values; 0 for an empty list.
pub fn stability_variance(values: &[f64]) -> f64 {
    if values.is_empty() {
        return 0.0;
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n
}

/// Predicted and ground-truth masks of one video, one per frame.
#[derive(Clone, Debug)]
pub struct VideoMasks {
    pub video_id: String,
    pub pred: Vec<BinaryMask>,
    pub gt: Vec<BinaryMask>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VideoScore {
    pub video_id: String,
    pub j: f64,
    pub f: f64,
    /// Clip-level IoU: summed intersections over summed unions.
    pub iou: f64,
    pub iou_variance: f64,
    pub jf_variance: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub num_videos: usize,
    pub boundary_tolerance: usize,
    pub j_mean: f64,
    pub f_mean: f64,
    pub jf_mean: f64,
    /// `(threshold, precision)` pairs.
    pub precision_at: Vec<(f64, f64)>,
    pub overall_iou: f64,
    pub mean_iou: f64,
    pub map_50_95: f64,
    /// Mean over videos of the per-frame IoU variance.
    pub iou_variance: f64,
    /// Mean over videos of the per-frame J&F variance.
    pub jf_variance: f64,
    pub videos: Vec<VideoScore>,
}

impl EvalReport {
    /// Median of the per-video IoU variances.
    pub fn median_iou_variance(&self) -> f64 {
        let mut v: Vec<f64> = self.videos.iter().map(|s| s.iou_variance).collect();
        if v.is_empty() {
            return 0.0;
        }
        v.sort_by(f64::total_cmp);
        let n = v.len();
        if n % 2 == 1 {
            v[n / 2]
        } else {
            0.5 * (v[n / 2 - 1] + v[n / 2])
        }
    }

    /// One `name<TAB>value` line per metric.
    pub fn to_tsv(&self) -> String {
        let mut out = String::new();
        let mut line = |name: &str, v: String| {
            let _ = writeln!(out, "{name}\t{v}");
        };
        line("num_videos", self.num_videos.to_string());
        line("boundary_tolerance_px", self.boundary_tolerance.to_string());
        line("J", self.j_mean.to_string());
        line("F", self.f_mean.to_string());
        line("J&F", self.jf_mean.to_string());
        for (k, p) in &self.precision_at {
            line(&format!("P@{k}"), p.to_string());
        }
        line("overall_iou", self.overall_iou.to_string());
        line("mean_iou", self.mean_iou.to_string());
        line("mAP_50_95", self.map_50_95.to_string());
        line("iou_variance", self.iou_variance.to_string());
        line("jf_variance", self.jf_variance.to_string());
        line("median_iou_variance", self.median_iou_variance().to_string());
        out
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

/// Scores one video: mean per-frame J and F plus the stability variances.
pub fn score_video(v: &VideoMasks, tol: usize) -> Result<(VideoScore, usize, usize)> {
    if v.pred.len() != v.gt.len() || v.pred.is_empty() {
        return Err(SocError::Contract(format!(
            "video {}: {} predicted frames vs {} ground-truth frames",
            v.video_id,
            v.pred.len(),
            v.gt.len()
        )));
    }
    let (mut inter, mut union) = (0, 0);
    let mut js = Vec::with_capacity(v.pred.len());
    let mut jfs = Vec::with_capacity(v.pred.len());
    let mut f_sum = 0.0;
    for (p, g) in v.pred.iter().zip(&v.gt) {
        let (i, u) = intersection_union(p, g)?;
        inter += i;
        union += u;
        let j = ratio_or_one(i, u);
        let f = boundary_f(p, g, tol)?;
        js.push(j);
        jfs.push(0.5 * (j + f));
        f_sum += f;
    }
    let n = js.len() as f64;
    let score = VideoScore {
        video_id: v.video_id.clone(),
        j: js.iter().sum::<f64>() / n,
        f: f_sum / n,
        iou: ratio_or_one(inter, union),
        iou_variance: stability_variance(&js),
        jf_variance: stability_variance(&jfs),
    };
    Ok((score, inter, union))
}

/// Aggregates per-video scores (with their pixel totals) into a report.
pub fn aggregate(scores: Vec<(VideoScore, usize, usize)>, tol: usize) -> Result<EvalReport> {
    if scores.is_empty() {
        return Err(SocError::Contract("evaluation over an empty video list".into()));
    }
    let n = scores.len() as f64;
    let ious: Vec<f64> = scores.iter().map(|(s, _, _)| s.iou).collect();
    let (inter, union) = scores.iter().fold((0, 0), |(a, b), (_, i, u)| (a + i, b + u));
    let mean = |f: &dyn Fn(&VideoScore) -> f64| scores.iter().map(|(s, _, _)| f(s)).sum::<f64>() / n;
    let j_mean = mean(&|s| s.j);
    let f_mean = mean(&|s| s.f);
    let precision = PRECISION_THRESHOLDS
        .iter()
        .map(|&k| Ok((k, precision_at(&ious, k)?)))
        .collect::<Result<Vec<_>>>()?;
    Ok(EvalReport {
        num_videos: scores.len(),
        boundary_tolerance: tol,
        j_mean,
        f_mean,
        jf_mean: 0.5 * (j_mean + f_mean),
        precision_at: precision,
        overall_iou: ratio_or_one(inter, union),
        mean_iou: ious.iter().sum::<f64>() / n,
        map_50_95: mean_average_precision(&ious)?,
        iou_variance: mean(&|s| s.iou_variance),
        jf_variance: mean(&|s| s.jf_variance),
        videos: scores.into_iter().map(|(s, _, _)| s).collect(),
    })
}

/// Full evaluation with the default contour tolerance of the mask size.
pub fn evaluate(videos: &[VideoMasks]) -> Result<EvalReport> {
    let first = videos
        .first()
        .and_then(|v| v.gt.first())
        .ok_or_else(|| SocError::Contract("evaluation over an empty video list".into()))?;
    let tol = default_tolerance(first.height, first.width);
    let scores = videos.iter().map(|v| score_video(v, tol)).collect::<Result<Vec<_>>>()?;
    aggregate(scores, tol)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn square(h: usize, w: usize, y0: usize, x0: usize, side: usize) -> BinaryMask {
        BinaryMask::from_fn(h, w, |y, x| (y0..y0 + side).contains(&y) && (x0..x0 + side).contains(&x))
    }

    #[test]
    fn iou_cases() {
        let a = square(16, 16, 2, 2, 6);
        assert_eq!(iou(&a, &a).unwrap(), 1.0);
        assert_eq!(iou(&a, &square(16, 16, 9, 9, 4)).unwrap(), 0.0);
        let half = BinaryMask::from_fn(16, 16, |y, x| (2..8).contains(&y) && (2..5).contains(&x));
        assert_eq!(iou(&half, &a).unwrap(), 0.5);
        let e = BinaryMask::empty(4, 4);
        assert_eq!(iou(&e, &e).unwrap(), 1.0);
        assert!(iou(&e, &BinaryMask::empty(4, 5)).is_err());
    }

    #[test]
    fn boundary_cases() {
        let gt = square(32, 32, 8, 8, 10);
        assert_eq!(boundary_f(&gt, &gt, 1).unwrap(), 1.0);
        assert_eq!(boundary_f(&square(32, 32, 8, 9, 10), &gt, 1).unwrap(), 1.0);
        assert_eq!(boundary_f(&square(32, 32, 8, 20, 10), &square(32, 32, 8, 0, 4), 1).unwrap(), 0.0);
        let e = BinaryMask::empty(8, 8);
        assert_eq!(boundary_f(&e, &e, 1).unwrap(), 1.0);
        assert_eq!(boundary_f(&e, &square(8, 8, 1, 1, 3), 1).unwrap(), 0.0);
        assert_eq!(default_tolerance(64, 64), 1);
        assert_eq!(default_tolerance(480, 854), 8);
    }

    #[test]
    fn precision_and_map() {
        assert_eq!(precision_at(&[0.55, 0.45], 0.5).unwrap(), 0.5);
        assert_eq!(mean_average_precision(&[0.72]).unwrap(), 0.5);
        assert_eq!(mean_average_precision(&[1.0, 1.0]).unwrap(), 1.0);
        assert!(precision_at(&[], 0.5).is_err());
    }

    #[test]
    fn variance_cases() {
        assert_eq!(stability_variance(&[0.3, 0.3, 0.3]), 0.0);
        assert_eq!(stability_variance(&[0.0, 1.0]), 0.25);
    }

    #[test]
    fn rle_round_trip() {
        let m = square(5, 7, 1, 0, 3);
        let runs = m.to_rle();
        assert_eq!(runs[0], 7);
        assert_eq!(BinaryMask::from_rle(5, 7, &runs).unwrap(), m);
        let full = BinaryMask::from_fn(2, 2, |_, _| true);
        assert_eq!(full.to_rle(), vec![0, 4]);
    }

    #[test]
    fn gt_against_itself_is_perfect() {
        let gt = vec![square(32, 32, 4, 4, 8), BinaryMask::empty(32, 32)];
        let r = evaluate(&[VideoMasks { video_id: "v".into(), pred: gt.clone(), gt }]).unwrap();
        assert_eq!((r.j_mean, r.f_mean, r.jf_mean, r.map_50_95), (1.0, 1.0, 1.0, 1.0));
        assert_eq!(r.iou_variance, 0.0);
        let parsed: serde_json::Value = serde_json::from_str(&r.to_json()).unwrap();
        assert_eq!(parsed["num_videos"], 1);
        assert!(r.to_tsv().contains("J&F\t1\n"));
    }
}

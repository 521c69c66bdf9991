//! Instance-level segmentation metrics: AJI, Hausdorff distance, object F1.
//!
//! All metrics operate on [`InstanceMap`]s. Matching is deterministic:
//! ground-truth instances are processed in ascending label order for AJI,
//! and candidate pairs are ranked by exact Jaccard fractions (compared by
//! cross-multiplication, see `cmp_frac`) so results never depend on
//! floating-point tie noise.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::raster::{BinaryMask, InstanceMap};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Connectivity {
    Four,
    Eight,
}

/// Label connected foreground components.
///
/// Labels are assigned in raster-scan order of each component's first pixel,
/// starting at 1, which makes the output canonical and deterministic.
pub fn connected_components(mask: &BinaryMask, conn: Connectivity) -> InstanceMap {
    let (h, w) = (mask.height(), mask.width());
    let mut out = InstanceMap::new(h, w);
    let mut next = 0u32;
    let mut stack = Vec::new();
    for y in 0..h {
        for x in 0..w {
            if !mask.mask[[y, x]] || out.labels[[y, x]] != 0 {
                continue;
            }
            next += 1;
            out.labels[[y, x]] = next;
            stack.push((y, x));
            while let Some((cy, cx)) = stack.pop() {
                let mut visit = |ny: isize, nx: isize| {
                    if ny >= 0 && nx >= 0 && (ny as usize) < h && (nx as usize) < w {
                        let (ny, nx) = (ny as usize, nx as usize);
                        if mask.mask[[ny, nx]] && out.labels[[ny, nx]] == 0 {
                            out.labels[[ny, nx]] = next;
                            stack.push((ny, nx));
                        }
                    }
                };
                let (iy, ix) = (cy as isize, cx as isize);
                visit(iy - 1, ix);
                visit(iy + 1, ix);
                visit(iy, ix - 1);
                visit(iy, ix + 1);
                if let Connectivity::Eight = conn {
                    visit(iy - 1, ix - 1);
                    visit(iy - 1, ix + 1);
                    visit(iy + 1, ix - 1);
                    visit(iy + 1, ix + 1);
                }
            }
        }
    }
    out
}

/// Instance sizes for both maps plus pairwise overlap counts.
struct PairStats {
    gt_sizes: Vec<usize>,   // indexed by gt label (0 unused)
    pred_sizes: Vec<usize>, // indexed by pred label
    gt_labels: Vec<u32>,    // ascending, only non-empty
    pred_labels: Vec<u32>,
    inter: HashMap<(u32, u32), usize>,
}

fn pair_stats(gt: &InstanceMap, pred: &InstanceMap) -> Result<PairStats> {
    if gt.labels.shape() != pred.labels.shape() {
        return Err(Error::ShapeMismatch {
            expected: format!("{:?}", gt.labels.shape()),
            got: format!("{:?}", pred.labels.shape()),
        });
    }
    let mut gt_sizes = vec![0usize; gt.max_label() as usize + 1];
    let mut pred_sizes = vec![0usize; pred.max_label() as usize + 1];
    let mut inter: HashMap<(u32, u32), usize> = HashMap::new();
    for (&g, &p) in gt.labels.iter().zip(pred.labels.iter()) {
        if g > 0 {
            gt_sizes[g as usize] += 1;
        }
        if p > 0 {
            pred_sizes[p as usize] += 1;
        }
        if g > 0 && p > 0 {
            *inter.entry((g, p)).or_insert(0) += 1;
        }
    }
    let gt_labels = (1..gt_sizes.len() as u32).filter(|&l| gt_sizes[l as usize] > 0).collect();
    let pred_labels =
        (1..pred_sizes.len() as u32).filter(|&l| pred_sizes[l as usize] > 0).collect();
    Ok(PairStats { gt_sizes, pred_sizes, gt_labels, pred_labels, inter })
}

/// Compare fractions a0/a1 vs b0/b1 exactly (all nonnegative, a1,b1 > 0).
fn cmp_frac(a: (usize, usize), b: (usize, usize)) -> std::cmp::Ordering {
    ((a.0 as u128) * (b.1 as u128)).cmp(&((b.0 as u128) * (a.1 as u128)))
}

/// Aggregated Jaccard Index.
///
/// Ground-truth instances are visited in ascending label order. Each picks
/// the not-yet-used prediction with the highest Jaccard overlap (ties go to
/// the lowest prediction label; zero-overlap predictions never match).
/// Matched intersections accumulate in the numerator, matched unions in the
/// denominator; pixels of unmatched ("ghost") predictions are added to the
/// denominator. Empty vs. empty is defined as 1.0.
pub fn aji(gt: &InstanceMap, pred: &InstanceMap) -> Result<f64> {
    let stats = pair_stats(gt, pred)?;
    if stats.gt_labels.is_empty() && stats.pred_labels.is_empty() {
        return Ok(1.0);
    }
    let mut used = vec![false; stats.pred_sizes.len()];
    let mut numer = 0u64;
    let mut denom = 0u64;
    for &g in &stats.gt_labels {
        let g_size = stats.gt_sizes[g as usize];
        let mut best: Option<(usize, usize, u32)> = None; // (inter, union, pred label)
        for &p in &stats.pred_labels {
            if used[p as usize] {
                continue;
            }
            let Some(&i) = stats.inter.get(&(g, p)) else { continue };
            let u = g_size + stats.pred_sizes[p as usize] - i;
            match best {
                None => best = Some((i, u, p)),
                Some((bi, bu, _)) => {
                    if cmp_frac((i, u), (bi, bu)) == std::cmp::Ordering::Greater {
                        best = Some((i, u, p));
                    }
                }
            }
        }
        match best {
            Some((i, u, p)) => {
                used[p as usize] = true;
                numer += i as u64;
                denom += u as u64;
            }
            None => denom += g_size as u64, // unmatched ground truth
        }
    }
    for &p in &stats.pred_labels {
        if !used[p as usize] {
            denom += stats.pred_sizes[p as usize] as u64; // ghost prediction
        }
    }
    if denom == 0 {
        return Ok(1.0);
    }
    Ok(numer as f64 / denom as f64)
}

/// Symmetric Hausdorff distance between two non-empty pixel point sets.
pub fn hausdorff(a: &[(usize, usize)], b: &[(usize, usize)]) -> Result<f64> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::InvalidArgument("hausdorff requires non-empty point sets".into()));
    }
    Ok(directed_hausdorff_sq(a, b).max(directed_hausdorff_sq(b, a)).sqrt())
}

fn directed_hausdorff_sq(a: &[(usize, usize)], b: &[(usize, usize)]) -> f64 {
    let mut worst = 0i64;
    for &(ay, ax) in a {
        let mut best = i64::MAX;
        for &(by, bx) in b {
            let dy = ay as i64 - by as i64;
            let dx = ax as i64 - bx as i64;
            let d = dy * dy + dx * dx;
            if d < best {
                best = d;
                if best <= worst {
                    break; // cannot raise the running max
                }
            }
        }
        if best > worst {
            worst = best;
        }
    }
    worst as f64
}

fn pixels_by_label(map: &InstanceMap) -> HashMap<u32, Vec<(usize, usize)>> {
    let mut out: HashMap<u32, Vec<(usize, usize)>> = HashMap::new();
    for ((y, x), &l) in map.labels.indexed_iter() {
        if l > 0 {
            out.entry(l).or_default().push((y, x));
        }
    }
    out
}

fn bbox_diagonal(pixels: &[(usize, usize)]) -> f64 {
    let (mut y0, mut y1, mut x0, mut x1) = (usize::MAX, 0usize, usize::MAX, 0usize);
    for &(y, x) in pixels {
        y0 = y0.min(y);
        y1 = y1.max(y);
        x0 = x0.min(x);
        x1 = x1.max(x);
    }
    let dy = (y1 - y0) as f64;
    let dx = (x1 - x0) as f64;
    (dy * dy + dx * dx).sqrt()
}

/// Greedy one-to-one instance matching by descending Jaccard.
///
/// Ties break toward lower gt label, then lower pred label.
fn greedy_matches(stats: &PairStats) -> Vec<(u32, u32)> {
    let mut pairs: Vec<(usize, usize, u32, u32)> = stats
        .inter
        .iter()
        .map(|(&(g, p), &i)| {
            let u = stats.gt_sizes[g as usize] + stats.pred_sizes[p as usize] - i;
            (i, u, g, p)
        })
        .collect();
    pairs
        .sort_by(|a, b| cmp_frac((b.0, b.1), (a.0, a.1)).then(a.2.cmp(&b.2)).then(a.3.cmp(&b.3)));
    let mut gt_used = vec![false; stats.gt_sizes.len()];
    let mut pred_used = vec![false; stats.pred_sizes.len()];
    let mut matches = Vec::new();
    for (_, _, g, p) in pairs {
        if !gt_used[g as usize] && !pred_used[p as usize] {
            gt_used[g as usize] = true;
            pred_used[p as usize] = true;
            matches.push((g, p));
        }
    }
    matches
}

/// Image-level Hausdorff: mean of per-matched-pair Hausdorff distances, with
/// every unmatched instance (either side) contributing its bounding-box
/// diagonal as penalty. Returns 0 when both maps are empty.
pub fn image_hausdorff(gt: &InstanceMap, pred: &InstanceMap) -> Result<f64> {
    let stats = pair_stats(gt, pred)?;
    if stats.gt_labels.is_empty() && stats.pred_labels.is_empty() {
        return Ok(0.0);
    }
    let gt_pixels = pixels_by_label(gt);
    let pred_pixels = pixels_by_label(pred);
    let matches = greedy_matches(&stats);
    let mut matched_gt = vec![false; stats.gt_sizes.len()];
    let mut matched_pred = vec![false; stats.pred_sizes.len()];
    let mut total = 0.0;
    let mut count = 0usize;
    for (g, p) in matches {
        matched_gt[g as usize] = true;
        matched_pred[p as usize] = true;
        total += hausdorff(&gt_pixels[&g], &pred_pixels[&p])?;
        count += 1;
    }
    for &g in &stats.gt_labels {
        if !matched_gt[g as usize] {
            total += bbox_diagonal(&gt_pixels[&g]);
            count += 1;
        }
    }
    for &p in &stats.pred_labels {
        if !matched_pred[p as usize] {
            total += bbox_diagonal(&pred_pixels[&p]);
            count += 1;
        }
    }
    Ok(total / count as f64)
}

/// Object-level F1 at a Jaccard threshold.
///
/// A prediction counts as true positive when it is greedily matched to a
/// ground-truth instance with Jaccard strictly above `iou_threshold`.
/// Returns `(f1, tp, fp, fn)`.
pub fn f1_score(
    gt: &InstanceMap,
    pred: &InstanceMap,
    iou_threshold: f64,
) -> Result<(f64, usize, usize, usize)> {
    let stats = pair_stats(gt, pred)?;
    let matches = greedy_matches(&stats);
    let mut tp = 0usize;
    for (g, p) in matches {
        let i = stats.inter[&(g, p)];
        let u = stats.gt_sizes[g as usize] + stats.pred_sizes[p as usize] - i;
        if i as f64 / u as f64 > iou_threshold {
            tp += 1;
        }
    }
    let n_gt = stats.gt_labels.len();
    let n_pred = stats.pred_labels.len();
    let fp = n_pred - tp;
    let fn_ = n_gt - tp;
    let f1 = if tp + fp == 0 || tp + fn_ == 0 {
        0.0
    } else {
        let precision = tp as f64 / (tp + fp) as f64;
        let recall = tp as f64 / (tp + fn_) as f64;
        if precision + recall == 0.0 {
            0.0
        } else {
            2.0 * precision * recall / (precision + recall)
        }
    };
    Ok((f1, tp, fp, fn_))
}

/// Metrics for one evaluated image.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ImageMetrics {
    pub image_id: String,
    pub organ: String,
    pub aji: f64,
    pub hausdorff: f64,
    pub f1: f64,
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
}

/// Mean AJI / Hausdorff / F1 over a group of images.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct GroupMetrics {
    pub group: String,
    pub images: usize,
    pub aji: f64,
    pub hausdorff: f64,
    pub f1: f64,
}

/// Per-image records plus per-organ and overall aggregates.
///
/// The overall row is the mean over *images*, not over organ means.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct MetricsReport {
    pub per_image: Vec<ImageMetrics>,
    pub per_organ: Vec<GroupMetrics>,
    pub overall: GroupMetrics,
}

impl MetricsReport {
    pub fn from_images(mut per_image: Vec<ImageMetrics>) -> Self {
        per_image.sort_by(|a, b| a.image_id.cmp(&b.image_id));
        let mut organs: Vec<String> = per_image.iter().map(|m| m.organ.clone()).collect();
        organs.sort();
        organs.dedup();
        let per_organ = organs
            .iter()
            .map(|organ| {
                let rows: Vec<&ImageMetrics> =
                    per_image.iter().filter(|m| &m.organ == organ).collect();
                group_mean(organ, &rows)
            })
            .collect();
        let all: Vec<&ImageMetrics> = per_image.iter().collect();
        let overall = group_mean("overall", &all);
        MetricsReport { per_image, per_organ, overall }
    }

    /// Evaluate one gt/pred pair into a record (F1 threshold 0.5).
    pub fn evaluate_image(
        image_id: &str,
        organ: &str,
        gt: &InstanceMap,
        pred: &InstanceMap,
    ) -> Result<ImageMetrics> {
        let aji_v = aji(gt, pred)?;
        let hd = image_hausdorff(gt, pred)?;
        let (f1, tp, fp, fn_) = f1_score(gt, pred, 0.5)?;
        Ok(ImageMetrics {
            image_id: image_id.to_string(),
            organ: organ.to_string(),
            aji: aji_v,
            hausdorff: hd,
            f1,
            tp,
            fp,
            fn_,
        })
    }
}

fn group_mean(name: &str, rows: &[&ImageMetrics]) -> GroupMetrics {
    let n = rows.len().max(1) as f64;
    GroupMetrics {
        group: name.to_string(),
        images: rows.len(),
        aji: rows.iter().map(|m| m.aji).sum::<f64>() / n,
        hausdorff: rows.iter().map(|m| m.hausdorff).sum::<f64>() / n,
        f1: rows.iter().map(|m| m.f1).sum::<f64>() / n,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array2;

    fn map_from(rows: &[&[u32]]) -> InstanceMap {
        let h = rows.len();
        let w = rows[0].len();
        let mut labels = Array2::zeros((h, w));
        for (y, r) in rows.iter().enumerate() {
            for (x, &v) in r.iter().enumerate() {
                labels[[y, x]] = v;
            }
        }
        InstanceMap { labels }
    }

    #[test]
    fn components_empty_mask() {
        let m = BinaryMask::new(4, 4);
        assert_eq!(connected_components(&m, Connectivity::Eight).max_label(), 0);
    }

    #[test]
    fn components_diagonal_touch() {
        let mut m = BinaryMask::new(3, 3);
        m.mask[[0, 0]] = true;
        m.mask[[1, 1]] = true;
        assert_eq!(connected_components(&m, Connectivity::Eight).instance_count(), 1);
        assert_eq!(connected_components(&m, Connectivity::Four).instance_count(), 2);
    }

    /// Independent queue-based flood fill used as labeling oracle.
    fn flood_fill_oracle(mask: &BinaryMask, conn: Connectivity) -> InstanceMap {
        let (h, w) = (mask.height(), mask.width());
        let mut out = InstanceMap::new(h, w);
        let mut label = 0u32;
        for sy in 0..h {
            for sx in 0..w {
                if !mask.mask[[sy, sx]] || out.labels[[sy, sx]] != 0 {
                    continue;
                }
                label += 1;
                let mut queue = std::collections::VecDeque::new();
                queue.push_back((sy, sx));
                out.labels[[sy, sx]] = label;
                while let Some((y, x)) = queue.pop_front() {
                    let deltas: &[(isize, isize)] = match conn {
                        Connectivity::Four => &[(-1, 0), (1, 0), (0, -1), (0, 1)],
                        Connectivity::Eight => &[
                            (-1, -1),
                            (-1, 0),
                            (-1, 1),
                            (0, -1),
                            (0, 1),
                            (1, -1),
                            (1, 0),
                            (1, 1),
                        ],
                    };
                    for &(dy, dx) in deltas {
                        let (ny, nx) = (y as isize + dy, x as isize + dx);
                        if ny >= 0 && nx >= 0 && (ny as usize) < h && (nx as usize) < w {
                            let (ny, nx) = (ny as usize, nx as usize);
                            if mask.mask[[ny, nx]] && out.labels[[ny, nx]] == 0 {
                                out.labels[[ny, nx]] = label;
                                queue.push_back((ny, nx));
                            }
                        }
                    }
                }
            }
        }
        out
    }

    #[test]
    fn components_match_flood_fill_oracle() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        for _ in 0..20 {
            let mut m = BinaryMask::new(32, 32);
            for b in m.mask.iter_mut() {
                *b = rng.random_bool(0.45);
            }
            for conn in [Connectivity::Four, Connectivity::Eight] {
                let got = connected_components(&m, conn);
                let want = flood_fill_oracle(&m, conn);
                // both label in raster order of first pixel
                assert_eq!(got.canonicalize(), want.canonicalize());
            }
        }
    }

    #[test]
    fn aji_identical_maps() {
        let m = map_from(&[&[0, 1, 1], &[2, 2, 0], &[0, 3, 3]]);
        assert_eq!(aji(&m, &m).unwrap(), 1.0);
    }

    #[test]
    fn aji_shifted_square_is_one_third() {
        // gt: 2x2 square at cols 0-1; pred: same square shifted one column,
        // intersection 2, union 6.
        let gt = map_from(&[&[1, 1, 0], &[1, 1, 0]]);
        let pred = map_from(&[&[0, 1, 1], &[0, 1, 1]]);
        assert_eq!(aji(&gt, &pred).unwrap(), 1.0 / 3.0);
    }

    #[test]
    fn aji_empty_prediction() {
        let gt = map_from(&[&[1, 1], &[0, 0]]);
        let pred = InstanceMap::new(2, 2);
        assert_eq!(aji(&gt, &pred).unwrap(), 0.0);
    }

    #[test]
    fn aji_empty_both() {
        let e = InstanceMap::new(3, 3);
        assert_eq!(aji(&e, &e).unwrap(), 1.0);
    }

    #[test]
    fn aji_dimension_mismatch_errors() {
        let a = InstanceMap::new(2, 2);
        let b = InstanceMap::new(3, 3);
        assert!(aji(&a, &b).is_err());
    }

    #[test]
    fn hausdorff_identical_and_analytic() {
        let a = vec![(0usize, 0usize), (1, 2)];
        assert_eq!(hausdorff(&a, &a).unwrap(), 0.0);
        let p = vec![(0usize, 0usize)];
        let q = vec![(3usize, 4usize)];
        assert_eq!(hausdorff(&p, &q).unwrap(), 5.0);
        assert!(hausdorff(&p, &[]).is_err());
    }

    /// Plain double-loop oracle without the early-exit pruning.
    fn hausdorff_oracle(a: &[(usize, usize)], b: &[(usize, usize)]) -> f64 {
        let dir = |s: &[(usize, usize)], t: &[(usize, usize)]| {
            s.iter()
                .map(|&(y, x)| {
                    t.iter()
                        .map(|&(ty, tx)| {
                            let dy = y as f64 - ty as f64;
                            let dx = x as f64 - tx as f64;
                            (dy * dy + dx * dx).sqrt()
                        })
                        .fold(f64::INFINITY, f64::min)
                })
                .fold(0.0, f64::max)
        };
        dir(a, b).max(dir(b, a))
    }

    #[test]
    fn hausdorff_matches_bruteforce_oracle() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        for _ in 0..50 {
            let mk = |rng: &mut rand_chacha::ChaCha8Rng| {
                (0..20)
                    .map(|_| (rng.random_range(0..40), rng.random_range(0..40)))
                    .collect::<Vec<(usize, usize)>>()
            };
            let a = mk(&mut rng);
            let b = mk(&mut rng);
            let got = hausdorff(&a, &b).unwrap();
            let want = hausdorff_oracle(&a, &b);
            assert!((got - want).abs() < 1e-12, "{got} vs {want}");
        }
    }

    #[test]
    fn image_hausdorff_identical_is_zero() {
        let m = map_from(&[&[1, 1, 0], &[0, 0, 2]]);
        assert_eq!(image_hausdorff(&m, &m).unwrap(), 0.0);
    }

    #[test]
    fn image_hausdorff_single_pair() {
        // one matched pair; pred extends 3 columns past gt -> distance 3
        let gt = map_from(&[&[1, 1, 1, 0, 0, 0]]);
        let pred = map_from(&[&[1, 1, 1, 1, 1, 1]]);
        assert_eq!(image_hausdorff(&gt, &pred).unwrap(), 3.0);
    }

    #[test]
    fn image_hausdorff_mean_of_two_pairs() {
        // pair 1 distance 2, pair 2 distance 4 -> mean 3
        let gt = map_from(&[
            &[1, 1, 1, 0, 0, 0, 0, 0, 0],
            &[0, 0, 0, 0, 0, 0, 0, 0, 0],
            &[2, 2, 2, 2, 2, 0, 0, 0, 0],
        ]);
        let pred = map_from(&[
            &[1, 1, 1, 1, 1, 0, 0, 0, 0],
            &[0, 0, 0, 0, 0, 0, 0, 0, 0],
            &[2, 2, 2, 2, 2, 2, 2, 2, 2],
        ]);
        assert_eq!(image_hausdorff(&gt, &pred).unwrap(), 3.0);
    }

    #[test]
    fn image_hausdorff_empty_both_is_zero() {
        let e = InstanceMap::new(2, 2);
        assert_eq!(image_hausdorff(&e, &e).unwrap(), 0.0);
    }

    #[test]
    fn f1_perfect_partial_empty() {
        let m = map_from(&[&[1, 1, 0], &[0, 0, 2]]);
        assert_eq!(f1_score(&m, &m, 0.5).unwrap(), (1.0, 2, 0, 0));
        // 1 of 2 gt detected exactly, no extra predictions: P=1, R=0.5
        let gt = map_from(&[&[1, 1, 0, 2, 2]]);
        let pred = map_from(&[&[1, 1, 0, 0, 0]]);
        let (f1, tp, fp, fn_) = f1_score(&gt, &pred, 0.5).unwrap();
        assert!((f1 - 2.0 / 3.0).abs() < 1e-12);
        assert_eq!((tp, fp, fn_), (1, 0, 1));
        // empty prediction
        let (f1, tp, fp, fn_) = f1_score(&gt, &InstanceMap::new(1, 5), 0.5).unwrap();
        assert_eq!((f1, tp, fp, fn_), (0.0, 0, 0, 2));
    }

    pub(super) fn random_instances(rng: &mut rand_chacha::ChaCha8Rng) -> InstanceMap {
        use rand::Rng;
        let mut m = InstanceMap::new(32, 32);
        let k = rng.random_range(0..8u32);
        for label in 1..=k {
            let cy = rng.random_range(0..32) as isize;
            let cx = rng.random_range(0..32) as isize;
            let r = rng.random_range(2..6) as isize;
            for y in (cy - r).max(0)..(cy + r + 1).min(32) {
                for x in (cx - r).max(0)..(cx + r + 1).min(32) {
                    if (y - cy) * (y - cy) + (x - cx) * (x - cx) <= r * r {
                        m.labels[[y as usize, x as usize]] = label;
                    }
                }
            }
        }
        m
    }

    #[test]
    fn f1_counts_are_consistent() {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(9);
        for _ in 0..30 {
            let gt = random_instances(&mut rng);
            let pred = random_instances(&mut rng);
            let (_, tp, fp, fn_) = f1_score(&gt, &pred, 0.5).unwrap();
            assert_eq!(tp + fn_, gt.instance_count());
            assert_eq!(tp + fp, pred.instance_count());
        }
    }

    #[test]
    fn aji_invariant_to_relabeling() {
        use rand::seq::SliceRandom;
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        for _ in 0..20 {
            let gt = random_instances(&mut rng);
            let pred = random_instances(&mut rng);
            let base = aji(&gt, &pred).unwrap();
            let max = pred.max_label();
            if max == 0 {
                continue;
            }
            let mut perm: Vec<u32> = (1..=max).collect();
            perm.shuffle(&mut rng);
            let mut relabeled = pred.clone();
            for l in relabeled.labels.iter_mut() {
                if *l > 0 {
                    *l = perm[(*l - 1) as usize];
                }
            }
            let permuted = aji(&gt, &relabeled).unwrap();
            assert!((base - permuted).abs() < 1e-12);
        }
    }

    #[test]
    fn aji_bounded_in_unit_interval() {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(17);
        for _ in 0..50 {
            let gt = random_instances(&mut rng);
            let pred = random_instances(&mut rng);
            let v = aji(&gt, &pred).unwrap();
            assert!((0.0..=1.0).contains(&v), "aji out of range: {v}");
        }
    }

    #[test]
    fn report_aggregates_mean_over_images() {
        let mk = |id: &str, organ: &str, aji: f64, f1: f64| ImageMetrics {
            image_id: id.into(),
            organ: organ.into(),
            aji,
            hausdorff: 2.0,
            f1,
            tp: 1,
            fp: 0,
            fn_: 0,
        };
        let rows = vec![
            mk("a", "breast", 0.6, 0.5),
            mk("b", "liver", 0.8, 0.7),
            mk("c", "liver", 0.8, 0.9),
        ];
        let report = MetricsReport::from_images(rows);
        assert_eq!(report.per_organ.len(), 2);
        let liver = report.per_organ.iter().find(|g| g.group == "liver").unwrap();
        assert_eq!(liver.images, 2);
        assert!((liver.f1 - 0.8).abs() < 1e-12);
        // overall is mean over images, not over organ means
        assert!((report.overall.aji - (0.6 + 0.8 + 0.8) / 3.0).abs() < 1e-12);
    }
}

//! Track-level AP/AR with spatio-temporal mask IoU.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::pipeline::{CategoryId, InstanceTrack};

/// `Σ_t |P_t ∩ G_t| / Σ_t |P_t ∪ G_t|`; frames where a track has no entry
/// count as empty. 0 when both tracks are empty everywhere.
pub fn track_iou(pred: &InstanceTrack, gt: &InstanceTrack) -> Result<f64> {
    let (mut inter, mut union) = (0usize, 0usize);
    for (t, p) in &pred.entries {
        match gt.entries.get(t) {
            Some(g) => {
                if !p.mask.same_shape(&g.mask) {
                    return Err(Error::shape(p.mask.shape_str(), g.mask.shape_str()));
                }
                inter += p.mask.intersection_area(&g.mask);
                union += p.mask.union_area(&g.mask);
            }
            None => union += p.mask.area(),
        }
    }
    for (t, g) in &gt.entries {
        if !pred.entries.contains_key(t) {
            union += g.mask.area();
        }
    }
    Ok(if union == 0 {
        0.0
    } else {
        inter as f64 / union as f64
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub iou_thresholds: Vec<f64>,
    pub recall_points: usize,
    pub ar_ks: Vec<usize>,
    /// Predictions kept per (video, category) for AP.
    pub max_dets: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            iou_thresholds: (0..10).map(|i| 0.5 + 0.05 * i as f64).collect(),
            recall_points: 101,
            ar_ks: vec![1, 10],
            max_dets: 100,
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        if self.iou_thresholds.is_empty()
            || self.iou_thresholds.iter().any(|&t| !(t > 0.0 && t < 1.0))
            || self.iou_thresholds.windows(2).any(|w| w[0] >= w[1])
        {
            return Err(Error::Config(
                "eval.iou_thresholds must be strictly increasing in (0, 1)".into(),
            ));
        }
        if self.recall_points < 2 || self.max_dets == 0 || self.ar_ks.contains(&0) {
            return Err(Error::Config(
                "eval.recall_points >= 2, max_dets >= 1 and ar_ks >= 1 required".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CategoryAp {
    pub category: CategoryId,
    pub ap: f64,
    pub ap50: f64,
    pub ap75: f64,
    pub gt_tracks: usize,
    pub pred_tracks: usize,
}

/// One prediction matched at IoU threshold 0.5.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatchRecord {
    pub video: usize,
    pub pred: usize,
    pub gt: usize,
    pub iou: f64,
}

/// Metrics in percent.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub map: f64,
    pub ap50: f64,
    pub ap75: f64,
    /// Average recall keyed by predictions kept per video.
    pub ar: BTreeMap<usize, f64>,
    pub per_category: Vec<CategoryAp>,
    pub matches: Vec<MatchRecord>,
}

impl EvalReport {
    pub fn ar_at(&self, k: usize) -> f64 {
        self.ar.get(&k).copied().unwrap_or(f64::NAN)
    }
}

/// Predictions and ground truth of one category in one video.
struct Cell {
    video: usize,
    /// Prediction indices into the video's list, by descending confidence.
    order: Vec<usize>,
    scores: Vec<f64>,
    gt_indices: Vec<usize>,
    /// `iou[i][j]` between `order[i]` and `gt_indices[j]`.
    iou: Vec<Vec<f64>>,
}

/// Greedy matching in score order: each prediction takes the unmatched gt
/// with the highest IoU `>= threshold`, ties to the lower gt index.
/// Returns the matched gt position for each of the first `limit` preds.
fn greedy_match(iou: &[Vec<f64>], n_gt: usize, threshold: f64, limit: usize) -> Vec<Option<usize>> {
    let mut taken = vec![false; n_gt];
    iou.iter()
        .take(limit)
        .map(|row| {
            let mut best: Option<(usize, f64)> = None;
            for (j, &v) in row.iter().enumerate() {
                if !taken[j] && v >= threshold && best.is_none_or(|(_, b)| v > b) {
                    best = Some((j, v));
                }
            }
            best.map(|(j, _)| {
                taken[j] = true;
                j
            })
        })
        .collect()
}

/// Interpolated AP from (score, is_tp) pairs over all videos.
pub fn interpolated_ap(dets: &mut [(f64, bool)], n_gt: usize, recall_points: usize) -> f64 {
    if n_gt == 0 {
        return 0.0;
    }
    // stable: equal scores keep video-then-rank order
    dets.sort_by(|a, b| b.0.total_cmp(&a.0));
    let mut precision = Vec::with_capacity(dets.len());
    let mut recall = Vec::with_capacity(dets.len());
    let mut tp = 0usize;
    for (i, &(_, hit)) in dets.iter().enumerate() {
        tp += usize::from(hit);
        precision.push(tp as f64 / (i + 1) as f64);
        recall.push(tp as f64 / n_gt as f64);
    }
    for i in (1..precision.len()).rev() {
        precision[i - 1] = precision[i - 1].max(precision[i]);
    }
    let mut sum = 0.0;
    for k in 0..recall_points {
        let r = k as f64 / (recall_points - 1) as f64;
        let idx = recall.partition_point(|&x| x < r);
        if idx < precision.len() {
            sum += precision[idx];
        }
    }
    sum / recall_points as f64
}

fn build_cells(
    preds: &[Vec<InstanceTrack>],
    gts: &[Vec<InstanceTrack>],
    category: CategoryId,
) -> Result<Vec<Cell>> {
    let mut cells = Vec::new();
    for (video, (p, g)) in preds.iter().zip(gts).enumerate() {
        let mut order: Vec<usize> = (0..p.len()).filter(|&i| p[i].category == category).collect();
        order.sort_by(|&a, &b| p[b].confidence.total_cmp(&p[a].confidence));
        let gt_indices: Vec<usize> = (0..g.len()).filter(|&j| g[j].category == category).collect();
        if order.is_empty() && gt_indices.is_empty() {
            continue;
        }
        let iou = order
            .iter()
            .map(|&i| gt_indices.iter().map(|&j| track_iou(&p[i], &g[j])).collect())
            .collect::<Result<Vec<Vec<f64>>>>()?;
        cells.push(Cell {
            video,
            scores: order.iter().map(|&i| p[i].confidence).collect(),
            order,
            gt_indices,
            iou,
        });
    }
    Ok(cells)
}

fn category_ap(cells: &[Cell], threshold: f64, cfg: &EvalConfig) -> f64 {
    let n_gt: usize = cells.iter().map(|c| c.gt_indices.len()).sum();
    let mut dets = Vec::new();
    for c in cells {
        let m = greedy_match(&c.iou, c.gt_indices.len(), threshold, cfg.max_dets);
        dets.extend(m.iter().zip(&c.scores).map(|(hit, &s)| (s, hit.is_some())));
    }
    interpolated_ap(&mut dets, n_gt, cfg.recall_points)
}

fn category_recall(cells: &[Cell], threshold: f64, k: usize) -> f64 {
    let n_gt: usize = cells.iter().map(|c| c.gt_indices.len()).sum();
    let tp: usize = cells
        .iter()
        .map(|c| {
            greedy_match(&c.iou, c.gt_indices.len(), threshold, k)
                .iter()
                .filter(|m| m.is_some())
                .count()
        })
        .sum();
    tp as f64 / n_gt as f64
}

fn mean(v: impl IntoIterator<Item = f64>) -> f64 {
    let (s, n) = v.into_iter().fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    if n == 0 {
        0.0
    } else {
        s / n as f64
    }
}

/// Evaluates per-video predictions against ground truth. Categories without
/// ground truth in any video are excluded from every average.
pub fn evaluate(
    preds: &[Vec<InstanceTrack>],
    gts: &[Vec<InstanceTrack>],
    categories: &[CategoryId],
    cfg: &EvalConfig,
) -> Result<EvalReport> {
    cfg.validate()?;
    if preds.len() != gts.len() {
        return Err(Error::Input(format!(
            "{} prediction videos but {} ground-truth videos",
            preds.len(),
            gts.len()
        )));
    }
    for track in preds.iter().chain(gts).flatten() {
        if !categories.contains(&track.category) {
            return Err(Error::Input(format!(
                "track {} has unknown category {}",
                track.track_id, track.category
            )));
        }
    }

    let mut per_category = Vec::new();
    let mut ar_sums: BTreeMap<usize, Vec<f64>> = BTreeMap::new();
    let mut matches = Vec::new();
    for &category in categories {
        let cells = build_cells(preds, gts, category)?;
        let gt_tracks: usize = cells.iter().map(|c| c.gt_indices.len()).sum();
        if gt_tracks == 0 {
            continue;
        }
        let aps: Vec<f64> = cfg
            .iou_thresholds
            .iter()
            .map(|&t| category_ap(&cells, t, cfg))
            .collect();
        for &k in &cfg.ar_ks {
            let r = mean(cfg.iou_thresholds.iter().map(|&t| category_recall(&cells, t, k)));
            ar_sums.entry(k).or_default().push(r);
        }
        for c in &cells {
            let m = greedy_match(&c.iou, c.gt_indices.len(), 0.5, cfg.max_dets);
            for (i, hit) in m.into_iter().enumerate() {
                if let Some(j) = hit {
                    matches.push(MatchRecord {
                        video: c.video,
                        pred: c.order[i],
                        gt: c.gt_indices[j],
                        iou: c.iou[i][j],
                    });
                }
            }
        }
        per_category.push(CategoryAp {
            category,
            ap: 100.0 * mean(aps),
            ap50: 100.0 * category_ap(&cells, 0.5, cfg),
            ap75: 100.0 * category_ap(&cells, 0.75, cfg),
            gt_tracks,
            pred_tracks: cells.iter().map(|c| c.order.len()).sum(),
        });
    }
    matches.sort_by_key(|m| (m.video, m.pred));

    Ok(EvalReport {
        map: mean(per_category.iter().map(|c| c.ap)),
        ap50: mean(per_category.iter().map(|c| c.ap50)),
        ap75: mean(per_category.iter().map(|c| c.ap75)),
        ar: ar_sums.into_iter().map(|(k, v)| (k, 100.0 * mean(v))).collect(),
        per_category,
        matches,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::affinity::BoundingBox;
    use crate::grid::BinaryMask;
    use crate::pipeline::{Detection, Source};
    use proptest::prelude::*;

    fn track(id: u64, category: CategoryId, conf: f64, masks: Vec<Option<BinaryMask>>) -> InstanceTrack {
        let entries = masks
            .into_iter()
            .enumerate()
            .filter_map(|(t, m)| {
                let m = m?;
                let bbox = BoundingBox::from_mask(&m)?;
                Some((
                    t,
                    Detection {
                        frame: t,
                        bbox,
                        mask: m,
                        category,
                        score: conf,
                        source: Source::Detector,
                    },
                ))
            })
            .collect();
        InstanceTrack::from_entries(id, category, conf, entries)
    }

    fn block(cols: std::ops::Range<usize>) -> BinaryMask {
        BinaryMask::from_fn(4, 8, |_, c| cols.contains(&c))
    }

    #[test]
    fn track_iou_cases() {
        let g = track(1, 1, 1.0, vec![Some(block(0..4)); 4]);
        assert_eq!(track_iou(&g, &g).unwrap(), 1.0);
        let half = track(2, 1, 1.0, vec![Some(block(0..2)); 4]);
        assert_eq!(track_iou(&half, &g).unwrap(), 0.5);
        let mut three = vec![Some(block(0..4)); 4];
        three[2] = None;
        assert_eq!(track_iou(&track(3, 1, 1.0, three), &g).unwrap(), 0.75);
        let empty = track(4, 1, 1.0, vec![]);
        assert_eq!(track_iou(&empty, &empty).unwrap(), 0.0);
    }

    #[test]
    fn perfect_predictions_score_100() {
        let gts = vec![
            vec![track(1, 1, 1.0, vec![Some(block(0..3)); 3])],
            vec![
                track(1, 1, 1.0, vec![Some(block(0..2)); 3]),
                track(2, 2, 1.0, vec![Some(block(4..8)); 3]),
            ],
        ];
        let r = evaluate(&gts, &gts, &[1, 2, 3], &EvalConfig::default()).unwrap();
        assert_eq!((r.map, r.ap50, r.ap75), (100.0, 100.0, 100.0));
        assert_eq!((r.ar_at(1), r.ar_at(10)), (100.0, 100.0));
        assert_eq!(r.per_category.len(), 2);
    }

    #[test]
    fn threshold_straddle() {
        // IoU 0.6: counted at 0.5, not at 0.75
        let gt = vec![vec![track(1, 1, 1.0, vec![Some(block(0..5))])]];
        let pred = vec![vec![track(1, 1, 0.9, vec![Some(block(0..3))])]];
        assert!((track_iou(&pred[0][0], &gt[0][0]).unwrap() - 0.6).abs() < 1e-15);
        let r = evaluate(&pred, &gt, &[1], &EvalConfig::default()).unwrap();
        assert_eq!((r.ap50, r.ap75), (100.0, 0.0));
        assert!((r.map - 30.0).abs() < 1e-9);
    }

    #[test]
    fn unknown_category_rejected() {
        let gt = vec![vec![track(1, 1, 1.0, vec![Some(block(0..5))])]];
        let pred = vec![vec![track(1, 7, 0.9, vec![Some(block(0..3))])]];
        assert!(matches!(
            evaluate(&pred, &gt, &[1], &EvalConfig::default()),
            Err(Error::Input(_))
        ));
    }

    // Reference implementation: enumerate every injective assignment of
    // predictions to gts, keep the one whose IoU sequence (in score order)
    // is lexicographically largest, then take AP as the mean over recall
    // points of the best precision among prefixes reaching that recall.

    fn assignments(n_pred: usize, n_gt: usize) -> Vec<Vec<Option<usize>>> {
        fn rec(i: usize, n_pred: usize, used: &mut Vec<bool>, cur: &mut Vec<Option<usize>>, out: &mut Vec<Vec<Option<usize>>>) {
            if i == n_pred {
                out.push(cur.clone());
                return;
            }
            cur.push(None);
            rec(i + 1, n_pred, used, cur, out);
            cur.pop();
            for j in 0..used.len() {
                if !used[j] {
                    used[j] = true;
                    cur.push(Some(j));
                    rec(i + 1, n_pred, used, cur, out);
                    cur.pop();
                    used[j] = false;
                }
            }
        }
        let mut out = Vec::new();
        rec(0, n_pred, &mut vec![false; n_gt], &mut Vec::new(), &mut out);
        out
    }

    fn brute_match(iou: &[Vec<f64>], n_gt: usize, thr: f64) -> Vec<bool> {
        let key = |a: &Vec<Option<usize>>| -> Vec<(f64, i64)> {
            a.iter()
                .enumerate()
                .map(|(i, m)| m.map_or((-1.0, 0), |j| (iou[i][j], -(j as i64))))
                .collect()
        };
        assignments(iou.len(), n_gt)
            .into_iter()
            .filter(|a| a.iter().enumerate().all(|(i, m)| m.is_none_or(|j| iou[i][j] >= thr)))
            .max_by(|a, b| {
                key(a)
                    .iter()
                    .zip(key(b).iter())
                    .map(|(x, y)| x.0.total_cmp(&y.0).then(x.1.cmp(&y.1)))
                    .find(|o| o.is_ne())
                    .unwrap_or(std::cmp::Ordering::Equal)
            })
            .unwrap()
            .iter()
            .map(Option::is_some)
            .collect()
    }

    fn brute_ap(dets: &[(f64, bool)], n_gt: usize) -> f64 {
        let mut d = dets.to_vec();
        d.sort_by(|a, b| b.0.total_cmp(&a.0));
        let mut sum = 0.0;
        for k in 0..=100 {
            let r = k as f64 / 100.0;
            let mut best: f64 = 0.0;
            for n in 1..=d.len() {
                let tp = d[..n].iter().filter(|x| x.1).count() as f64;
                if tp / n_gt as f64 >= r {
                    best = best.max(tp / n as f64);
                }
            }
            sum += best;
        }
        sum / 101.0
    }

    fn brute_map(preds: &[Vec<InstanceTrack>], gts: &[Vec<InstanceTrack>], cats: &[CategoryId]) -> f64 {
        let mut per_cat = Vec::new();
        for &c in cats {
            let n_gt: usize = gts.iter().flatten().filter(|g| g.category == c).count();
            if n_gt == 0 {
                continue;
            }
            let mut per_thr = Vec::new();
            for i in 0..10 {
                let thr = 0.5 + 0.05 * i as f64;
                let mut dets = Vec::new();
                for (p, g) in preds.iter().zip(gts) {
                    let mut ps: Vec<&InstanceTrack> = p.iter().filter(|t| t.category == c).collect();
                    ps.sort_by(|a, b| b.confidence.total_cmp(&a.confidence));
                    let gs: Vec<&InstanceTrack> = g.iter().filter(|t| t.category == c).collect();
                    let iou: Vec<Vec<f64>> = ps
                        .iter()
                        .map(|a| gs.iter().map(|b| track_iou(a, b).unwrap()).collect())
                        .collect();
                    for (hit, t) in brute_match(&iou, gs.len(), thr).into_iter().zip(&ps) {
                        dets.push((t.confidence, hit));
                    }
                }
                per_thr.push(brute_ap(&dets, n_gt));
            }
            per_cat.push(per_thr.iter().sum::<f64>() / 10.0);
        }
        100.0 * per_cat.iter().sum::<f64>() / per_cat.len() as f64
    }

    /// Random micro-case: masks are column blocks of an 4×8 image over 3
    /// frames, at most 4 tracks per video.
    fn micro_case() -> impl Strategy<Value = (Vec<Vec<InstanceTrack>>, Vec<Vec<InstanceTrack>>)> {
        let tr = (1u32..=2, 0usize..8, 1usize..5, prop::collection::vec(any::<bool>(), 3), 1u32..20);
        let video = (prop::collection::vec(tr.clone(), 0..=4), prop::collection::vec(tr, 1..=4));
        prop::collection::vec(video, 1..=2).prop_map(|videos| {
            let build = |v: &[(u32, usize, usize, Vec<bool>, u32)]| -> Vec<InstanceTrack> {
                v.iter()
                    .enumerate()
                    .map(|(i, (cat, x, w, on, conf))| {
                        let masks = on
                            .iter()
                            .map(|&b| b.then(|| block(*x..(*x + *w).min(8))))
                            .collect();
                        track(i as u64 + 1, *cat, f64::from(*conf) / 20.0, masks)
                    })
                    .collect()
            };
            let preds = videos.iter().map(|(p, _)| build(p)).collect();
            let gts = videos.iter().map(|(_, g)| build(g)).collect();
            (preds, gts)
        })
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(300))]

        #[test]
        fn matches_brute_force((preds, gts) in micro_case()) {
            let r = evaluate(&preds, &gts, &[1, 2], &EvalConfig::default()).unwrap();
            let expect = brute_map(&preds, &gts, &[1, 2]);
            prop_assert!((r.map - expect).abs() <= 1e-9, "{} vs {}", r.map, expect);
        }

        #[test]
        fn ar10_at_least_ar1((preds, gts) in micro_case()) {
            let r = evaluate(&preds, &gts, &[1, 2], &EvalConfig::default()).unwrap();
            prop_assert!(r.ar_at(10) >= r.ar_at(1));
            for v in [r.map, r.ap50, r.ap75, r.ar_at(1), r.ar_at(10)] {
                prop_assert!((0.0..=100.0).contains(&v));
            }
        }

        #[test]
        fn input_order_does_not_matter((preds, gts) in micro_case(), seed in any::<u64>()) {
            use rand::{seq::SliceRandom, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            // shuffling is only order-free when confidences are distinct
            let distinct: Vec<Vec<InstanceTrack>> = preds
                .iter()
                .map(|v| {
                    v.iter()
                        .enumerate()
                        .map(|(i, t)| {
                            let mut t = t.clone();
                            t.confidence += i as f64 * 1e-3;
                            t
                        })
                        .collect()
                })
                .collect();
            let mut shuffled = distinct.clone();
            for v in &mut shuffled {
                v.shuffle(&mut rng);
            }
            let a = evaluate(&distinct, &gts, &[1, 2], &EvalConfig::default()).unwrap();
            let b = evaluate(&shuffled, &gts, &[1, 2], &EvalConfig::default()).unwrap();
            prop_assert_eq!((a.map, a.ap50, a.ap75), (b.map, b.ap50, b.ap75));
            prop_assert_eq!(a.ar, b.ar);
        }

        #[test]
        fn dropping_a_false_positive_never_lowers_ap((preds, gts) in micro_case()) {
            let cfg = EvalConfig::default();
            let base = evaluate(&preds, &gts, &[1, 2], &cfg).unwrap();
            for (v, p) in preds.iter().enumerate() {
                for i in 0..p.len() {
                    let overlaps = gts[v].iter().any(|g| track_iou(&p[i], g).unwrap() > 0.0);
                    if overlaps {
                        continue;
                    }
                    let mut fewer = preds.clone();
                    fewer[v].remove(i);
                    let r = evaluate(&fewer, &gts, &[1, 2], &cfg).unwrap();
                    prop_assert!(r.map >= base.map - 1e-12);
                    prop_assert!(r.ap50 >= base.ap50 - 1e-12);
                    prop_assert!(r.ap75 >= base.ap75 - 1e-12);
                }
            }
        }
    }
}

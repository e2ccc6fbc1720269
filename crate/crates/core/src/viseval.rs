//! Video instance segmentation metrics: tube IoU and COCO-style AP/AR over
//! whole-video tracks.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::syndata::{rle_decode, BinaryMask, VideoClip};
use crate::tracker::PredictedTrack;
use crate::{Error, Result};

pub const IOU_THRESHOLDS: [f64; 10] = [0.5, 0.55, 0.6, 0.65, 0.7, 0.75, 0.8, 0.85, 0.9, 0.95];
const RECALL_POINTS: usize = 101;

#[derive(Clone, Debug, PartialEq)]
pub struct PredTrack {
    pub track_id: usize,
    pub category: usize,
    pub score: f64,
    pub masks: BTreeMap<usize, BinaryMask>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GtTrack {
    pub identity: usize,
    pub category: usize,
    pub masks: BTreeMap<usize, BinaryMask>,
}

/// Predictions and ground truth of one clip.
#[derive(Clone, Debug, PartialEq)]
pub struct ClipEval {
    pub clip_id: String,
    pub preds: Vec<PredTrack>,
    pub gts: Vec<GtTrack>,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    pub ap: f64,
    pub ap50: f64,
    pub ap75: f64,
    pub ar1: f64,
    pub ar10: f64,
}

impl PredTrack {
    pub fn from_dump(p: &PredictedTrack, height: usize, width: usize) -> Result<Self> {
        let masks = p
            .masks
            .iter()
            .map(|(&t, rle)| Ok((t, rle_decode(rle, height, width)?)))
            .collect::<Result<_>>()?;
        Ok(PredTrack {
            track_id: p.track_id,
            category: p.category,
            score: p.score,
            masks,
        })
    }
}

/// Ground-truth tubes of a clip, one per identity, in identity order.
pub fn gt_tracks(clip: &VideoClip) -> Vec<GtTrack> {
    let mut by_id: BTreeMap<usize, GtTrack> = BTreeMap::new();
    for f in &clip.frames {
        for a in &f.annotations {
            by_id
                .entry(a.identity)
                .or_insert_with(|| GtTrack {
                    identity: a.identity,
                    category: a.category,
                    masks: BTreeMap::new(),
                })
                .masks
                .insert(f.time_index, a.mask.clone());
        }
    }
    by_id.into_values().collect()
}

/// `Σ_t |p_t ∩ g_t| / Σ_t |p_t ∪ g_t|`, a frame missing on one side counting
/// as an empty mask. Zero when both tubes are empty.
pub fn tube_iou(pred: &BTreeMap<usize, BinaryMask>, gt: &BTreeMap<usize, BinaryMask>) -> f64 {
    let (mut inter, mut union) = (0usize, 0usize);
    let times: BTreeSet<usize> = pred.keys().chain(gt.keys()).copied().collect();
    for t in times {
        match (pred.get(&t), gt.get(&t)) {
            (Some(p), Some(g)) => {
                inter += p.intersection(g);
                union += p.union(g);
            }
            (Some(m), None) | (None, Some(m)) => union += m.area(),
            (None, None) => {}
        }
    }
    if union == 0 {
        0.0
    } else {
        inter as f64 / union as f64
    }
}

/// A scored prediction of one category, with its IoU against every
/// same-category ground truth of its clip.
struct Scored {
    clip: usize,
    score: f64,
    ious: Vec<f64>,
}

/// Greedy matching in descending score: each prediction takes the unmatched
/// ground truth of highest IoU at or above `threshold` (ties go to the lower
/// index). Returns whether each prediction, in the given order, is a hit.
fn greedy_hits(preds: &[&Scored], num_gt: &[usize], threshold: f64) -> Vec<bool> {
    let mut taken: Vec<Vec<bool>> = num_gt.iter().map(|&n| vec![false; n]).collect();
    preds
        .iter()
        .map(|p| {
            let mut best: Option<(usize, f64)> = None;
            for (g, &iou) in p.ious.iter().enumerate() {
                if taken[p.clip][g] || iou < threshold {
                    continue;
                }
                if best.map_or(true, |(_, b)| iou > b) {
                    best = Some((g, iou));
                }
            }
            if let Some((g, _)) = best {
                taken[p.clip][g] = true;
            }
            best.is_some()
        })
        .collect()
}

/// 101-point interpolated precision over the recall axis.
pub fn interpolated_ap(hits: &[bool], num_gt: usize) -> f64 {
    if num_gt == 0 {
        return 0.0;
    }
    let mut recall = Vec::with_capacity(hits.len());
    let mut precision = Vec::with_capacity(hits.len());
    let mut tp = 0usize;
    for (i, &h) in hits.iter().enumerate() {
        tp += h as usize;
        recall.push(tp as f64 / num_gt as f64);
        precision.push(tp as f64 / (i + 1) as f64);
    }
    for i in (1..precision.len()).rev() {
        precision[i - 1] = precision[i - 1].max(precision[i]);
    }
    let mut sum = 0.0;
    for r in 0..RECALL_POINTS {
        let target = r as f64 / (RECALL_POINTS - 1) as f64;
        let idx = recall.partition_point(|&v| v < target);
        if idx < precision.len() {
            sum += precision[idx];
        }
    }
    sum / RECALL_POINTS as f64
}

fn check_unique_ids(clips: &[ClipEval]) -> Result<()> {
    for c in clips {
        let mut seen = BTreeSet::new();
        for p in &c.preds {
            if !seen.insert(p.track_id) {
                return Err(Error::DuplicateTrack(p.track_id as u64));
            }
        }
    }
    Ok(())
}

/// AP averaged over IoU thresholds 0.50:0.05:0.95 and over categories that
/// have ground truth; AP50/AP75 at single thresholds; AR@k the recall with at
/// most `k` top-scoring predictions per clip and category.
pub fn evaluate(clips: &[ClipEval], num_categories: usize) -> Result<EvalSummary> {
    check_unique_ids(clips)?;
    let mut per_cat = Vec::new();
    for c in 0..num_categories {
        let num_gt: Vec<usize> = clips.iter().map(|cl| cl.gts.iter().filter(|g| g.category == c).count()).collect();
        let total_gt: usize = num_gt.iter().sum();
        if total_gt == 0 {
            continue;
        }
        let mut scored: Vec<Scored> = Vec::new();
        // rank within (clip, category), for the AR@k truncation
        let mut rank = Vec::new();
        for (ci, cl) in clips.iter().enumerate() {
            let gts: Vec<&GtTrack> = cl.gts.iter().filter(|g| g.category == c).collect();
            let mut preds: Vec<&PredTrack> = cl.preds.iter().filter(|p| p.category == c).collect();
            preds.sort_by(|a, b| b.score.total_cmp(&a.score));
            for (r, p) in preds.into_iter().enumerate() {
                scored.push(Scored {
                    clip: ci,
                    score: p.score,
                    ious: gts.iter().map(|g| tube_iou(&p.masks, &g.masks)).collect(),
                });
                rank.push(r);
            }
        }
        let mut order: Vec<usize> = (0..scored.len()).collect();
        order.sort_by(|&a, &b| scored[b].score.total_cmp(&scored[a].score));
        let ranked: Vec<&Scored> = order.iter().map(|&i| &scored[i]).collect();

        let aps: Vec<f64> = IOU_THRESHOLDS
            .iter()
            .map(|&t| interpolated_ap(&greedy_hits(&ranked, &num_gt, t), total_gt))
            .collect();
        let recall_at = |k: usize| -> f64 {
            let kept: Vec<&Scored> = order.iter().filter(|&&i| rank[i] < k).map(|&i| &scored[i]).collect();
            IOU_THRESHOLDS
                .iter()
                .map(|&t| greedy_hits(&kept, &num_gt, t).iter().filter(|&&h| h).count() as f64 / total_gt as f64)
                .sum::<f64>()
                / IOU_THRESHOLDS.len() as f64
        };
        per_cat.push(EvalSummary {
            ap: aps.iter().sum::<f64>() / aps.len() as f64,
            ap50: aps[0],
            ap75: aps[5],
            ar1: recall_at(1),
            ar10: recall_at(10),
        });
    }
    if per_cat.is_empty() {
        return Ok(EvalSummary::default());
    }
    let n = per_cat.len() as f64;
    let mean = |f: fn(&EvalSummary) -> f64| per_cat.iter().map(f).sum::<f64>() / n;
    Ok(EvalSummary {
        ap: mean(|s| s.ap),
        ap50: mean(|s| s.ap50),
        ap75: mean(|s| s.ap75),
        ar1: mean(|s| s.ar1),
        ar10: mean(|s| s.ar10),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn square(n: usize, x0: usize, y0: usize, side: usize) -> BinaryMask {
        BinaryMask::from_fn(n, n, |y, x| (y0..y0 + side).contains(&y) && (x0..x0 + side).contains(&x))
    }

    fn tube(frames: &[(usize, BinaryMask)]) -> BTreeMap<usize, BinaryMask> {
        frames.iter().cloned().collect()
    }

    #[test]
    fn tube_iou_examples() {
        let a = tube(&[(0, square(4, 0, 0, 2)), (1, square(4, 1, 1, 2))]);
        assert_eq!(tube_iou(&a, &a), 1.0);
        let far = tube(&[(0, square(4, 2, 2, 2)), (1, square(4, 3, 3, 1))]);
        assert_eq!(tube_iou(&a, &far), 0.0);
        let pred = tube(&[(0, square(4, 0, 0, 2))]);
        let gt = tube(&[(0, square(4, 0, 0, 2)), (1, square(4, 2, 2, 2))]);
        assert_eq!(tube_iou(&pred, &gt), 0.5);
        assert_eq!(tube_iou(&gt, &pred), 0.5);
        assert_eq!(tube_iou(&BTreeMap::new(), &BTreeMap::new()), 0.0);
    }

    fn clip(preds: Vec<PredTrack>, gts: Vec<GtTrack>) -> ClipEval {
        ClipEval {
            clip_id: "c".into(),
            preds,
            gts,
        }
    }

    fn gt(identity: usize, m: BTreeMap<usize, BinaryMask>) -> GtTrack {
        GtTrack {
            identity,
            category: 0,
            masks: m,
        }
    }

    fn pred(track_id: usize, score: f64, m: BTreeMap<usize, BinaryMask>) -> PredTrack {
        PredTrack {
            track_id,
            category: 0,
            score,
            masks: m,
        }
    }

    #[test]
    fn perfect_and_empty() {
        let g1 = tube(&[(0, square(8, 0, 0, 3))]);
        let g2 = tube(&[(0, square(8, 4, 4, 3))]);
        let perfect = clip(vec![pred(0, 1.0, g1.clone()), pred(1, 1.0, g2.clone())], vec![gt(0, g1.clone()), gt(1, g2.clone())]);
        let s = evaluate(&[perfect], 1).unwrap();
        assert_eq!((s.ap, s.ap50, s.ap75, s.ar10), (1.0, 1.0, 1.0, 1.0));
        assert_eq!(s.ar1, 0.5, "one prediction per clip and category");

        let none = clip(vec![], vec![gt(0, g1.clone())]);
        assert_eq!(evaluate(&[none], 1).unwrap(), EvalSummary::default());

        // one of two ground truths found perfectly: recall tops out at 0.5
        let half = clip(vec![pred(0, 0.9, g1.clone())], vec![gt(0, g1.clone()), gt(1, g2)]);
        let s = evaluate(&[half], 1).unwrap();
        assert!((s.ap50 - 51.0 / 101.0).abs() < 1e-12);
        assert!((s.ap - s.ap50).abs() < 1e-15);
        assert_eq!(s.ar10, 0.5);

        let dup = clip(vec![pred(3, 0.9, g1.clone()), pred(3, 0.8, g1)], vec![]);
        assert!(matches!(evaluate(&[dup], 1), Err(Error::DuplicateTrack(3))));
    }

    #[test]
    fn low_scoring_miss_never_raises_ap() {
        let g1 = tube(&[(0, square(8, 0, 0, 3)), (1, square(8, 1, 0, 3))]);
        let partial = tube(&[(0, square(8, 0, 0, 3))]);
        let base = clip(vec![pred(0, 0.8, partial)], vec![gt(0, g1)]);
        let before = evaluate(std::slice::from_ref(&base), 1).unwrap();
        let mut more = base.clone();
        more.preds.push(pred(1, 0.1, tube(&[(1, square(8, 6, 6, 2))])));
        let after = evaluate(&[more], 1).unwrap();
        assert!(after.ap <= before.ap);
    }

    #[test]
    fn corpus_equals_concatenated_clip() {
        let a = clip(
            vec![pred(0, 0.9, tube(&[(0, square(8, 0, 0, 4))])), pred(1, 0.4, tube(&[(0, square(8, 4, 4, 3))]))],
            vec![gt(0, tube(&[(0, square(8, 0, 0, 3))])), gt(1, tube(&[(0, square(8, 4, 4, 4))]))],
        );
        let b = clip(
            vec![pred(0, 0.7, tube(&[(0, square(8, 1, 1, 3)), (1, square(8, 1, 1, 3))]))],
            vec![gt(2, tube(&[(0, square(8, 1, 1, 3)), (1, square(8, 2, 2, 3))]))],
        );
        let split = evaluate(&[a.clone(), b.clone()], 1).unwrap();
        // shift b's frames after a's and give it fresh track ids
        let shift = |m: &BTreeMap<usize, BinaryMask>| m.iter().map(|(t, v)| (t + 10, v.clone())).collect();
        let mut merged = a;
        merged.preds.extend(b.preds.iter().map(|p| pred(p.track_id + 100, p.score, shift(&p.masks))));
        merged.gts.extend(b.gts.iter().map(|g| gt(g.identity, shift(&g.masks))));
        let joined = evaluate(&[merged], 1).unwrap();
        assert_eq!((split.ap, split.ap50, split.ap75, split.ar10), (joined.ap, joined.ap50, joined.ap75, joined.ar10));
    }

    #[test]
    fn interpolation_is_monotone_envelope() {
        // hits: T F T with 2 gts → precision envelope 1, 2/3, 2/3
        let ap = interpolated_ap(&[true, false, true], 2);
        let want = (51.0 * 1.0 + 50.0 * 2.0 / 3.0) / 101.0;
        assert!((ap - want).abs() < 1e-12);
        assert_eq!(interpolated_ap(&[], 3), 0.0);
    }
}

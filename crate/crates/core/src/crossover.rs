//! Crossover learning: the dynamic filter of an instance in one frame must
//! also segment the same instance in the other frame of the pair. Used only
//! during training.

use std::collections::BTreeSet;

use crate::losses::dice_loss_grad;
use crate::netcore::{mask_head, mask_head_backward, DynamicFilterLayout, FeatureMap};
use crate::syndata::InstanceAnnotation;
use crate::Result;

/// One identity visible in both frames: each frame's filter, mask-head input
/// at the identity's location, and ground truth.
#[derive(Clone, Debug, PartialEq)]
pub struct CrossPair {
    pub identity: usize,
    pub theta_t: Vec<f64>,
    pub theta_t_delta: Vec<f64>,
    pub combined_t: FeatureMap,
    pub combined_t_delta: FeatureMap,
    pub gt_mask_t: Vec<f64>,
    pub gt_mask_t_delta: Vec<f64>,
    pub delta: isize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CrossPairGrad {
    pub theta_t: Vec<f64>,
    pub theta_t_delta: Vec<f64>,
    pub combined_t: Vec<f64>,
    pub combined_t_delta: Vec<f64>,
}

/// Identities present in both frames, ascending.
pub fn match_identities(ann_t: &[InstanceAnnotation], ann_t_delta: &[InstanceAnnotation]) -> Vec<usize> {
    let a: BTreeSet<usize> = ann_t.iter().map(|a| a.identity).collect();
    let b: BTreeSet<usize> = ann_t_delta.iter().map(|a| a.identity).collect();
    a.intersection(&b).copied().collect()
}

/// The mask `theta_from` draws on another frame's mask-head input.
pub fn crossover_mask(layout: &DynamicFilterLayout, theta_from: &[f64], combined_to: &FeatureMap) -> Result<Vec<f64>> {
    mask_head(layout, combined_to, theta_from)
}

/// Mean over pairs of `dice(M×(t), M*(t)) + dice(M×(t+δ), M*(t+δ))`,
/// where `M×(t)` uses the filter from `t+δ` and vice versa. Zero when no
/// identity is shared.
pub fn crossover_loss(layout: &DynamicFilterLayout, pairs: &[CrossPair]) -> Result<f64> {
    Ok(crossover_loss_grad(layout, pairs)?.0)
}

pub fn crossover_loss_grad(layout: &DynamicFilterLayout, pairs: &[CrossPair]) -> Result<(f64, Vec<CrossPairGrad>)> {
    if pairs.is_empty() {
        return Ok((0.0, Vec::new()));
    }
    let n = pairs.len() as f64;
    let mut total = 0.0;
    let mut grads = Vec::with_capacity(pairs.len());
    for p in pairs {
        // filter from t+δ segments frame t
        let m_t = crossover_mask(layout, &p.theta_t_delta, &p.combined_t)?;
        let (l_t, d_t) = dice_loss_grad(&m_t, &p.gt_mask_t)?;
        // filter from t segments frame t+δ
        let m_td = crossover_mask(layout, &p.theta_t, &p.combined_t_delta)?;
        let (l_td, d_td) = dice_loss_grad(&m_td, &p.gt_mask_t_delta)?;
        total += l_t + l_td;

        let scale = |v: Vec<f64>| v.into_iter().map(|x| x / n).collect::<Vec<_>>();
        let (g_theta_td, g_comb_t) = mask_head_backward(layout, &p.combined_t, &p.theta_t_delta, &scale(d_t))?;
        let (g_theta_t, g_comb_td) = mask_head_backward(layout, &p.combined_t_delta, &p.theta_t, &scale(d_td))?;
        grads.push(CrossPairGrad {
            theta_t: g_theta_t,
            theta_t_delta: g_theta_td,
            combined_t: g_comb_t,
            combined_t_delta: g_comb_td,
        });
    }
    Ok((total / n, grads))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::BBox;
    use crate::netcore::MaskFeature;
    use crate::syndata::BinaryMask;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn ann(identity: usize) -> InstanceAnnotation {
        let mask = BinaryMask::from_fn(4, 4, |y, x| y == 1 && x == 1);
        InstanceAnnotation {
            identity,
            category: 0,
            bbox: BBox::new(1.0, 1.0, 2.0, 2.0),
            mask,
        }
    }

    #[test]
    fn identity_matching() {
        assert_eq!(match_identities(&[ann(4)], &[ann(4)]), vec![4]);
        assert!(match_identities(&[ann(1)], &[ann(2)]).is_empty());
        let a: Vec<_> = [1, 2, 3].into_iter().map(ann).collect();
        let b: Vec<_> = [2, 3, 4].into_iter().map(ann).collect();
        assert_eq!(match_identities(&a, &b), vec![2, 3]);
    }

    fn layout() -> DynamicFilterLayout {
        DynamicFilterLayout::new(8, 8)
    }

    fn random_pair(rng: &mut ChaCha8Rng) -> CrossPair {
        let l = layout();
        let mut f = |loc: (f64, f64)| {
            let mut fm = FeatureMap::zeros(8, 6, 6);
            fm.data.iter_mut().for_each(|v| *v = rng.gen_range(-1.0..1.0));
            MaskFeature::new(&fm, loc, 4).combined
        };
        let (ct, ctd) = (f((10.0, 6.0)), f((14.0, 18.0)));
        let gt = |rng: &mut ChaCha8Rng| (0..36).map(|_| rng.gen_bool(0.4) as u8 as f64).collect::<Vec<_>>();
        CrossPair {
            identity: 0,
            theta_t: (0..l.num_params()).map(|_| rng.gen_range(-1.0..1.0)).collect(),
            theta_t_delta: (0..l.num_params()).map(|_| rng.gen_range(-1.0..1.0)).collect(),
            combined_t: ct,
            combined_t_delta: ctd,
            gt_mask_t: gt(rng),
            gt_mask_t_delta: gt(rng),
            delta: 3,
        }
    }

    #[test]
    fn same_frame_crossover_equals_within_frame_mask() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let p = random_pair(&mut rng);
        let within = mask_head(&layout(), &p.combined_t, &p.theta_t).unwrap();
        assert_eq!(crossover_mask(&layout(), &p.theta_t, &p.combined_t).unwrap(), within);
        let zeros = vec![0.0; layout().num_params()];
        assert!(crossover_mask(&layout(), &zeros, &p.combined_t).unwrap().iter().all(|&v| v == 0.5));
        assert!(crossover_mask(&layout(), &zeros[1..], &p.combined_t).is_err());
    }

    #[test]
    fn loss_examples() {
        let l = layout();
        assert_eq!(crossover_loss(&l, &[]).unwrap(), 0.0);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut p = random_pair(&mut rng);
        // hard 0/1 masks: last bias ±30 with zero weights
        let sat = |positive: bool| {
            let mut t = vec![0.0; l.num_params()];
            t[l.last_bias()] = if positive { 30.0 } else { -30.0 };
            t
        };
        p.gt_mask_t = vec![1.0; 36];
        p.gt_mask_t_delta = vec![1.0; 36];
        p.theta_t = sat(true);
        p.theta_t_delta = sat(true);
        assert!(crossover_loss(&l, &[p.clone()]).unwrap() < 1e-6);
        p.theta_t = sat(false);
        p.theta_t_delta = sat(false);
        assert!((crossover_loss(&l, &[p]).unwrap() - 2.0).abs() < 1e-6);
    }

    #[test]
    fn frame_exchange_symmetry() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let p = random_pair(&mut rng);
        let swapped = CrossPair {
            identity: p.identity,
            theta_t: p.theta_t_delta.clone(),
            theta_t_delta: p.theta_t.clone(),
            combined_t: p.combined_t_delta.clone(),
            combined_t_delta: p.combined_t.clone(),
            gt_mask_t: p.gt_mask_t_delta.clone(),
            gt_mask_t_delta: p.gt_mask_t.clone(),
            delta: -p.delta,
        };
        let a = crossover_loss(&layout(), &[p]).unwrap();
        let b = crossover_loss(&layout(), &[swapped]).unwrap();
        assert!((a - b).abs() < 1e-15);
    }

    #[test]
    fn gradient_reaches_both_frames() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let p = random_pair(&mut rng);
        let (_, g) = crossover_loss_grad(&layout(), &[p]).unwrap();
        let nonzero = |v: &[f64]| v.iter().any(|x| x.abs() > 1e-12);
        assert!(nonzero(&g[0].theta_t) && nonzero(&g[0].theta_t_delta));
        assert!(nonzero(&g[0].combined_t) && nonzero(&g[0].combined_t_delta));
    }
}

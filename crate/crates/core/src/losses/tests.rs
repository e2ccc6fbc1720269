use super::*;
use crate::geometry::BBox;
use crate::netcore::NetConfig;
use crate::syndata::{BinaryMask, Image};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn blob(identity: usize, category: usize, cx: usize, cy: usize, r: usize) -> InstanceAnnotation {
    let mask = BinaryMask::from_fn(16, 16, |y, x| y.abs_diff(cy) <= r && x.abs_diff(cx) <= r);
    let bbox: BBox = mask.bbox().unwrap();
    InstanceAnnotation {
        identity,
        category,
        bbox,
        mask,
    }
}

fn frame(seed: u64, anns: Vec<InstanceAnnotation>) -> Frame {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut image = Image::zeros(16, 16);
    image.data.iter_mut().for_each(|v| *v = rng.gen());
    Frame {
        time_index: seed as usize,
        image,
        annotations: anns,
    }
}

fn small_net() -> Network {
    Network::new(NetConfig {
        num_categories: 2,
        total_identities: 4,
        backbone_channels: [4, 8, 8],
        head_channels: 8,
        mask_channels: 4,
        mid_channels: 4,
        embed_dim: 6,
        norm_groups: 2,
    })
}

fn pair() -> (Frame, Frame) {
    (
        frame(1, vec![blob(0, 0, 4, 4, 2), blob(2, 1, 11, 10, 3)]),
        frame(2, vec![blob(2, 1, 10, 9, 3), blob(3, 0, 4, 12, 1), blob(0, 0, 5, 5, 2)]),
    )
}

#[test]
fn gradient_of_pair_loss_matches_finite_differences() {
    let net = small_net();
    let params = net.init_params(3).values;
    let (a, b) = pair();
    for embedding in EmbeddingLoss::ALL {
        let cfg = LossConfig {
            embedding,
            ..LossConfig::default()
        };
        let f = |x: &[f64]| {
            let (l, g) = pair_loss_grad(&net, x, (&a, &b), &cfg).unwrap();
            (l.total, g)
        };
        let report = grad_check(f, &params, &Blocks::single("params", params.len()), &GradCheckConfig::default()).unwrap();
        assert!(report.passes(1e-4), "{embedding:?}: {report:?}");
    }
}

#[test]
fn total_is_the_sum_of_independent_terms() {
    let net = small_net();
    let params = net.init_params(5).values;
    let (a, b) = pair();
    let cfg = LossConfig::default();
    let (lb, _) = pair_loss_grad(&net, &params, (&a, &b), &cfg).unwrap();

    let locs = net.locations(16, 16);
    let outs = [net.forward(&params, &a.image).unwrap(), net.forward(&params, &b.image).unwrap()];
    let tgs = [assign_targets(&a.annotations, &locs), assign_targets(&b.annotations, &locs)];
    let det: f64 = (0..2)
        .map(|f| 0.5 * detection_loss(&detection_input(&outs[f], 2), &tgs[f], &cfg.focal).unwrap().total)
        .sum();
    assert!((lb.det - det).abs() < 1e-12);

    let layout = net.config.filter_layout();
    let anns = [&a.annotations, &b.annotations];
    let mut masks = Vec::new();
    for f in 0..2 {
        for p in &tgs[f].positives {
            let loc = locs[p.location];
            let theta = outs[f].levels[loc.level].controller.column(loc.gy, loc.gx);
            let comb = MaskFeature::new(&outs[f].mask_feat, (loc.x, loc.y), MASK_STRIDE).combined;
            masks.push((mask_head(&layout, &comb, &theta).unwrap(), downsample_mask(&anns[f][p.annotation].mask, MASK_STRIDE)));
        }
    }
    let views: Vec<(&[f64], &[f64])> = masks.iter().map(|(m, g)| (m.as_slice(), g.as_slice())).collect();
    assert!((lb.seg - segmentation_loss(&views).unwrap()).abs() < 1e-12);
    assert!(lb.cross > 0.0 && lb.id > 0.0);
    assert!((lb.total - (lb.det + lb.seg + lb.cross + lb.id)).abs() < 1e-12);

    let off = LossConfig {
        crossover: false,
        ..cfg
    };
    let (lo, _) = pair_loss_grad(&net, &params, (&a, &b), &off).unwrap();
    assert_eq!(lo.cross, 0.0);
    assert!((lo.total - (lo.det + lo.seg + lo.id)).abs() < 1e-12);
    assert_eq!((lo.det, lo.seg, lo.id), (lb.det, lb.seg, lb.id));
}

#[test]
fn crossover_only_counts_shared_identities() {
    let net = small_net();
    let params = net.init_params(7).values;
    let a = frame(1, vec![blob(0, 0, 4, 4, 2)]);
    let b = frame(2, vec![blob(1, 0, 4, 4, 2)]);
    let (l, _) = pair_loss_grad(&net, &params, (&a, &b), &LossConfig::default()).unwrap();
    assert_eq!(l.cross, 0.0);
}

#[test]
fn embedding_loss_names_round_trip() {
    for e in EmbeddingLoss::ALL {
        assert_eq!(e.name().parse::<EmbeddingLoss>().unwrap(), e);
    }
    assert!("triplet".parse::<EmbeddingLoss>().is_err());
}

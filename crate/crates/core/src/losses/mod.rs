//! Training objectives and the two-frame multi-task loss.

mod detection;
mod dice;
mod embedding;
mod gradcheck;

use serde::{Deserialize, Serialize};

pub use detection::{detection_loss, ltrb_iou_loss, DetectionInput, DetectionLoss};
pub use dice::{dice_loss, dice_loss_grad, mean_dice_grad, segmentation_loss, DICE_EPS};
pub use embedding::{
    focal_term, global_assign_prob, global_ce_loss, global_ce_loss_grad, global_focal_id_loss,
    global_focal_id_loss_grad, pairwise_assign_prob, pairwise_ce_loss, pairwise_ce_loss_grad,
    pairwise_focal_loss_grad, EmbeddingBatch, EmbeddingGrads, FocalParams, GlobalGrads,
};
pub use gradcheck::{grad_check, Blocks, GradCheckConfig, GradCheckReport};

use crate::crossover::{crossover_loss_grad, match_identities, CrossPair};
use crate::netcore::{
    downsample_mask, mask_head, mask_head_backward, normalize, normalize_backward, FeatureMap, FrameGrads,
    assign_targets, FrameOutput, Location, MaskFeature, Network, Targets, MASK_STRIDE,
};
use crate::syndata::{Frame, InstanceAnnotation};
use crate::Result;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EmbeddingLoss {
    PairwiseCe,
    PairwiseFocal,
    GlobalCe,
    GlobalFocal,
}

impl EmbeddingLoss {
    pub const ALL: [EmbeddingLoss; 4] = [
        EmbeddingLoss::PairwiseCe,
        EmbeddingLoss::PairwiseFocal,
        EmbeddingLoss::GlobalCe,
        EmbeddingLoss::GlobalFocal,
    ];

    pub fn is_global(self) -> bool {
        matches!(self, EmbeddingLoss::GlobalCe | EmbeddingLoss::GlobalFocal)
    }

    pub fn name(self) -> &'static str {
        match self {
            EmbeddingLoss::PairwiseCe => "pairwise_ce",
            EmbeddingLoss::PairwiseFocal => "pairwise_focal",
            EmbeddingLoss::GlobalCe => "global_ce",
            EmbeddingLoss::GlobalFocal => "global_focal",
        }
    }
}

impl std::str::FromStr for EmbeddingLoss {
    type Err = crate::Error;

    fn from_str(s: &str) -> Result<Self> {
        EmbeddingLoss::ALL
            .into_iter()
            .find(|e| e.name() == s)
            .ok_or_else(|| crate::Error::Config(format!("unknown embedding loss '{s}'")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    pub crossover: bool,
    pub embedding: EmbeddingLoss,
    pub focal: FocalParams,
    /// Multiplies the cosine similarity of unit embeddings before any
    /// softmax or sigmoid.
    pub logit_scale: f64,
    /// Prior probability behind the constant bias `−ln((1−π)/π)` added to
    /// sigmoid id logits. Without it every negative at cosine 0 costs as
    /// much as a coin flip, and with many identities the keys collapse
    /// onto whatever direction is opposite all proxies at once.
    pub id_prior: f64,
}

impl LossConfig {
    /// Bias of the sigmoid id logits (0 for the softmax variants, where a
    /// shared shift cancels).
    pub fn id_bias(&self) -> f64 {
        match self.embedding {
            EmbeddingLoss::GlobalFocal | EmbeddingLoss::PairwiseFocal => -((1.0 - self.id_prior) / self.id_prior).ln(),
            _ => 0.0,
        }
    }
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            crossover: true,
            embedding: EmbeddingLoss::GlobalFocal,
            focal: FocalParams::default(),
            logit_scale: 8.0,
            id_prior: 0.01,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub det: f64,
    pub seg: f64,
    pub cross: f64,
    pub id: f64,
    pub total: f64,
}

/// One frame of a training pair: network output and its ground truth.
pub struct FrameSample<'a> {
    pub output: &'a FrameOutput,
    pub annotations: &'a [InstanceAnnotation],
    pub targets: &'a Targets,
}

pub struct LossOutput {
    pub breakdown: LossBreakdown,
    /// Gradients for frame `t` and frame `t+δ`.
    pub grads: [FrameGrads; 2],
    /// Gradient of the raw proxy matrix (zeros for pair-wise variants).
    pub d_proxies: Vec<f64>,
}

struct Instance {
    loc: Location,
    identity: usize,
    gt: Vec<f64>,
    theta: Vec<f64>,
    combined: FeatureMap,
    unit: Vec<f64>,
    norm: f64,
}

fn instances(net: &Network, s: &FrameSample) -> Vec<Instance> {
    let out = s.output;
    let locations = net.locations(out.mask_feat.height * MASK_STRIDE, out.mask_feat.width * MASK_STRIDE);
    s.targets
        .positives
        .iter()
        .map(|p| {
            let loc = locations[p.location];
            let level = &out.levels[loc.level];
            let (unit, norm) = normalize(&level.embed.column(loc.gy, loc.gx));
            Instance {
                loc,
                identity: p.identity,
                gt: downsample_mask(&s.annotations[p.annotation].mask, MASK_STRIDE),
                theta: level.controller.column(loc.gy, loc.gx),
                combined: MaskFeature::new(&out.mask_feat, (loc.x, loc.y), MASK_STRIDE).combined,
                unit,
                norm,
            }
        })
        .collect()
}

fn with_bias((mut v, id): (Vec<f64>, usize), b: f64) -> (Vec<f64>, usize) {
    v.push(b);
    (v, id)
}

fn add_column(fm: &mut FeatureMap, loc: &Location, d: &[f64]) {
    let plane = fm.plane();
    let i = loc.gy * fm.width + loc.gx;
    for (c, v) in d.iter().enumerate() {
        fm.data[c * plane + i] += v;
    }
}

/// Adds the F_mask part of a mask-head input gradient (the coordinate
/// channels are constants).
fn add_mask_feat(fm: &mut FeatureMap, d_combined: &[f64]) {
    for (a, b) in fm.data.iter_mut().zip(d_combined) {
        *a += b;
    }
}

/// Dense head outputs in location-major order.
pub fn detection_input(out: &FrameOutput, num_categories: usize) -> DetectionInput {
    let k = num_categories;
    let mut input = DetectionInput {
        cls_logits: Vec::new(),
        box_raw: Vec::new(),
        num_categories: k,
        strides: Vec::new(),
    };
    for level in &out.levels {
        let plane = level.cls.plane();
        for i in 0..plane {
            input.cls_logits.extend((0..k).map(|c| level.cls.data[c * plane + i]));
            input.box_raw.extend((0..4).map(|c| level.bbox.data[c * plane + i]));
            input.strides.push(level.stride);
        }
    }
    input
}

fn scatter_detection(loss: &DetectionLoss, k: usize, scale: f64, g: &mut FrameGrads) {
    let mut offset = 0;
    for lg in g.levels.iter_mut() {
        let plane = lg.cls.plane();
        for i in 0..plane {
            for c in 0..k {
                lg.cls.data[c * plane + i] += scale * loss.d_cls[(offset + i) * k + c];
            }
            for c in 0..4 {
                lg.bbox.data[c * plane + i] += scale * loss.d_box[(offset + i) * 4 + c];
            }
        }
        offset += plane;
    }
}

/// `L = L_det + L_seg + L_cross + L_id` for a frame pair, with gradients of
/// every head output. `pair.0` is frame `t`, `pair.1` is frame `t+δ`; the
/// pair-wise embedding variants use `t+δ` as the key frame and `t` as the
/// reference frame.
pub fn total_loss(
    net: &Network,
    params: &[f64],
    pair: (&FrameSample, &FrameSample),
    cfg: &LossConfig,
) -> Result<LossOutput> {
    let k = net.config.num_categories;
    let layout = net.config.filter_layout();
    let samples = [pair.0, pair.1];
    let mut grads = [pair.0.output.zero_grads(), pair.1.output.zero_grads()];
    let mut b = LossBreakdown::default();

    // detection: mean of the two frames
    for (s, g) in samples.iter().zip(grads.iter_mut()) {
        let d = detection_loss(&detection_input(s.output, k), s.targets, &cfg.focal)?;
        b.det += 0.5 * d.total;
        scatter_detection(&d, k, 0.5, g);
    }

    let inst = [instances(net, pair.0), instances(net, pair.1)];

    // still-image segmentation: mean dice over positives of both frames
    let n_pos = inst[0].len() + inst[1].len();
    for (f, frame) in inst.iter().enumerate() {
        for i in frame {
            let m = mask_head(&layout, &i.combined, &i.theta)?;
            let (l, mut d) = dice_loss_grad(&m, &i.gt)?;
            b.seg += l / n_pos as f64;
            d.iter_mut().for_each(|v| *v /= n_pos as f64);
            let (d_theta, d_comb) = mask_head_backward(&layout, &i.combined, &i.theta, &d)?;
            add_column(&mut grads[f].levels[i.loc.level].controller, &i.loc, &d_theta);
            add_mask_feat(&mut grads[f].mask_feat, &d_comb);
        }
    }

    if cfg.crossover {
        let by_id = |frame: &[Instance], id: usize| frame.iter().position(|i| i.identity == id).expect("matched id");
        let ids = match_identities(pair.0.annotations, pair.1.annotations);
        let mut idx = Vec::with_capacity(ids.len());
        let pairs: Vec<CrossPair> = ids
            .iter()
            .map(|&id| {
                let (a, c) = (by_id(&inst[0], id), by_id(&inst[1], id));
                idx.push((a, c));
                let (ia, ic) = (&inst[0][a], &inst[1][c]);
                CrossPair {
                    identity: id,
                    theta_t: ia.theta.clone(),
                    theta_t_delta: ic.theta.clone(),
                    combined_t: ia.combined.clone(),
                    combined_t_delta: ic.combined.clone(),
                    gt_mask_t: ia.gt.clone(),
                    gt_mask_t_delta: ic.gt.clone(),
                    delta: 0,
                }
            })
            .collect();
        let (l, pg) = crossover_loss_grad(&layout, &pairs)?;
        b.cross = l;
        for ((a, c), g) in idx.into_iter().zip(pg) {
            let (la, lc) = (inst[0][a].loc, inst[1][c].loc);
            add_column(&mut grads[0].levels[la.level].controller, &la, &g.theta_t);
            add_column(&mut grads[1].levels[lc.level].controller, &lc, &g.theta_t_delta);
            add_mask_feat(&mut grads[0].mask_feat, &g.combined_t);
            add_mask_feat(&mut grads[1].mask_feat, &g.combined_t_delta);
        }
    }

    let proxies = net.proxies().get(params);
    let mut d_proxies = vec![0.0; proxies.len()];
    let s = cfg.logit_scale;
    let bias = cfg.id_bias();
    let scaled = |i: &Instance| (i.unit.iter().map(|v| v * s).collect::<Vec<f64>>(), i.identity);
    // d(loss)/d(s·unit) → gradient of the raw embedding column
    let push_embed = |g: &mut FrameGrads, i: &Instance, d_scaled: &[f64]| {
        let d_unit: Vec<f64> = d_scaled.iter().map(|v| v * s).collect();
        add_column(&mut g.levels[i.loc.level].embed, &i.loc, &normalize_backward(&i.unit, i.norm, &d_unit));
    };
    if cfg.embedding.is_global() {
        let dim = net.config.embed_dim;
        let rows: Vec<(Vec<f64>, f64)> = proxies.chunks(dim).map(normalize).collect();
        let (l, gg) = match cfg.embedding {
            EmbeddingLoss::GlobalCe => {
                let unit_proxies: Vec<f64> = rows.iter().flat_map(|(u, _)| u.iter().copied()).collect();
                let keys: Vec<(Vec<f64>, usize)> = inst.iter().flatten().map(scaled).collect();
                global_ce_loss_grad(&keys, &unit_proxies)?
            }
            _ => {
                // the bias rides along as one extra coordinate: [s·e, b]·[w, 1]
                let unit_proxies: Vec<f64> = rows.iter().flat_map(|(u, _)| u.iter().copied().chain([1.0])).collect();
                let keys: Vec<(Vec<f64>, usize)> = inst.iter().flatten().map(|i| with_bias(scaled(i), bias)).collect();
                let (l, mut gg) = global_focal_id_loss_grad(&keys, &unit_proxies, &cfg.focal)?;
                gg.keys.iter_mut().for_each(|k| k.truncate(dim));
                gg.proxies = gg.proxies.chunks(dim + 1).flat_map(|r| r[..dim].to_vec()).collect();
                (l, gg)
            }
        };
        b.id = l;
        let mut gk = gg.keys.iter();
        for (f, frame) in inst.iter().enumerate() {
            for i in frame {
                push_embed(&mut grads[f], i, gk.next().expect("one grad per key"));
            }
        }
        for (j, (u, n)) in rows.iter().enumerate() {
            let d = &gg.proxies[j * dim..(j + 1) * dim];
            if d.iter().any(|v| *v != 0.0) {
                d_proxies[j * dim..(j + 1) * dim].copy_from_slice(&normalize_backward(u, *n, d));
            }
        }
    } else {
        let (l, eg) = match cfg.embedding {
            EmbeddingLoss::PairwiseCe => pairwise_ce_loss_grad(&EmbeddingBatch {
                keys: inst[1].iter().map(scaled).collect(),
                references: inst[0].iter().map(|i| (i.unit.clone(), i.identity)).collect(),
            }),
            _ => {
                let batch = EmbeddingBatch {
                    keys: inst[1].iter().map(|i| with_bias(scaled(i), bias)).collect(),
                    references: inst[0].iter().map(|i| with_bias((i.unit.clone(), i.identity), 1.0)).collect(),
                };
                let (l, mut eg) = pairwise_focal_loss_grad(&batch, &cfg.focal);
                let dim = net.config.embed_dim;
                eg.keys.iter_mut().chain(eg.references.iter_mut()).for_each(|g| g.truncate(dim));
                (l, eg)
            }
        };
        b.id = l;
        for (i, d) in inst[1].iter().zip(&eg.keys) {
            push_embed(&mut grads[1], i, d);
        }
        // references enter unscaled, so their gradient carries no extra `s`
        for (i, d) in inst[0].iter().zip(&eg.references) {
            add_column(&mut grads[0].levels[i.loc.level].embed, &i.loc, &normalize_backward(&i.unit, i.norm, d));
        }
    }

    b.total = b.det + b.seg + b.cross + b.id;
    Ok(LossOutput {
        breakdown: b,
        grads,
        d_proxies,
    })
}

/// Forward, loss and backward for a frame pair `(t, t+δ)`: the loss
/// breakdown and the gradient of the flat parameter vector.
pub fn pair_loss_grad(
    net: &Network,
    params: &[f64],
    frames: (&Frame, &Frame),
    cfg: &LossConfig,
) -> Result<(LossBreakdown, Vec<f64>)> {
    let (h, w) = (frames.0.image.height, frames.0.image.width);
    let locations = net.locations(h, w);
    let out_t = net.forward(params, &frames.0.image)?;
    let out_td = net.forward(params, &frames.1.image)?;
    let tg_t = assign_targets(&frames.0.annotations, &locations);
    let tg_td = assign_targets(&frames.1.annotations, &locations);
    let s_t = FrameSample {
        output: &out_t,
        annotations: &frames.0.annotations,
        targets: &tg_t,
    };
    let s_td = FrameSample {
        output: &out_td,
        annotations: &frames.1.annotations,
        targets: &tg_td,
    };
    let lo = total_loss(net, params, (&s_t, &s_td), cfg)?;
    let mut grads = vec![0.0; params.len()];
    net.backward(params, &out_t, &lo.grads[0], &mut grads);
    net.backward(params, &out_td, &lo.grads[1], &mut grads);
    for (g, d) in net.proxies().get_mut(&mut grads).iter_mut().zip(&lo.d_proxies) {
        *g += d;
    }
    Ok((lo.breakdown, grads))
}

#[cfg(test)]
mod tests;

use std::ops::Range;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::checkpoint::Checkpoint;
use super::config::RunConfig;
use crate::losses::{pair_loss_grad, LossBreakdown};
use crate::netcore::Network;
use crate::syndata::{sample_frame_pair, Corpus};
use crate::{Error, Result};

/// One row of the metrics log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub lr: f64,
    pub steps: usize,
    pub det: f64,
    pub seg: f64,
    pub cross: f64,
    pub id: f64,
    pub total: f64,
}

struct Adam {
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
    beta1: f64,
    beta2: f64,
}

impl Adam {
    const EPS: f64 = 1e-8;

    fn new(n: usize, beta1: f64, beta2: f64) -> Self {
        Self {
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
            beta1,
            beta2,
        }
    }

    /// `boost` multiplies the step size on one index range.
    fn step(&mut self, params: &mut [f64], grads: &[f64], lr: f64, boost: (Range<usize>, f64)) {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        for i in 0..params.len() {
            let g = grads[i];
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g;
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g;
            let lr = if boost.0.contains(&i) { lr * boost.1 } else { lr };
            params[i] -= lr * (self.m[i] / c1) / ((self.v[i] / c2).sqrt() + Self::EPS);
        }
    }
}

fn clip_norm(grads: &mut [f64], max: f64) {
    if max <= 0.0 {
        return;
    }
    let norm = grads.iter().map(|g| g * g).sum::<f64>().sqrt();
    if norm > max {
        let s = max / norm;
        grads.iter_mut().for_each(|g| *g *= s);
    }
}

/// Joint training of every task on frame pairs. `on_epoch` sees each
/// epoch's log row and checkpoint; on a non-finite loss or gradient training
/// stops with [`Error::NonFinite`] before the bad step is applied, so the
/// last checkpoint handed out is the last good one.
pub fn train<F>(cfg: &RunConfig, corpus: &Corpus, mut on_epoch: F) -> Result<Checkpoint>
where
    F: FnMut(&EpochLog, &Checkpoint) -> Result<()>,
{
    if corpus.clips.is_empty() {
        return Err(Error::InvalidArgument("training corpus has no clips".into()));
    }
    let m = &corpus.manifest;
    let net = Network::new(cfg.model.net(m.num_categories, m.total_identities.max(1)));
    let mut params = net.init_params(cfg.seed);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed_0f_da7a);
    let proxies = net.proxies().range();
    let mut adam = Adam::new(params.values.len(), cfg.train.beta1, cfg.train.beta2);
    let manifest_hash = m.content_hash();
    let mut ckpt = Checkpoint {
        net: net.config.clone(),
        params: params.clone(),
        manifest_hash: manifest_hash.clone(),
        epoch: 0,
    };

    for epoch in 0..cfg.train.epochs {
        let lr = cfg.train.lr_at(epoch);
        let mut order: Vec<usize> = (0..corpus.clips.len())
            .flat_map(|c| std::iter::repeat(c).take(cfg.train.pairs_per_clip))
            .collect();
        order.shuffle(&mut rng);
        let mut sum = LossBreakdown::default();
        for &c in &order {
            let (a, b) = sample_frame_pair(&corpus.clips[c], cfg.train.interval, &mut rng);
            let (l, mut grads) = pair_loss_grad(&net, &params.values, (a, b), &cfg.loss)?;
            if !l.total.is_finite() {
                return Err(Error::NonFinite(format!("loss (clip {}, epoch {epoch})", corpus.clips[c].clip_id)));
            }
            if let Some(i) = grads.iter().position(|g| !g.is_finite()) {
                let name = net.layout.owner(i).unwrap_or("?");
                return Err(Error::NonFinite(format!("{name}[{}]", i - net.layout.find(name).map_or(0, |s| s.offset))));
            }
            clip_norm(&mut grads, cfg.train.grad_clip);
            adam.step(&mut params.values, &grads, lr, (proxies.clone(), cfg.train.proxy_lr_scale));
            sum.det += l.det;
            sum.seg += l.seg;
            sum.cross += l.cross;
            sum.id += l.id;
            sum.total += l.total;
        }
        if !params.all_finite() {
            return Err(Error::NonFinite(format!("parameters after epoch {epoch}")));
        }
        let n = order.len().max(1) as f64;
        let row = EpochLog {
            epoch,
            lr,
            steps: order.len(),
            det: sum.det / n,
            seg: sum.seg / n,
            cross: sum.cross / n,
            id: sum.id / n,
            total: sum.total / n,
        };
        ckpt = Checkpoint {
            net: net.config.clone(),
            params: params.clone(),
            manifest_hash: manifest_hash.clone(),
            epoch: epoch + 1,
        };
        on_epoch(&row, &ckpt)?;
    }
    Ok(ckpt)
}

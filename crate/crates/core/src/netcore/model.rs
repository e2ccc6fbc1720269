use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::layers::{BlockCache, Conv2d, ConvBlock, ConvCache, FeatureMap};
use super::mask_head::DynamicFilterLayout;
use super::params::{fill_normal, ModelParams, ParamLayout, Slot};
use crate::syndata::Image;
use crate::{Error, Result};

/// Strides of the two pyramid levels.
pub const STRIDES: [usize; 2] = [4, 8];
/// The mask branch fuses the stride-4 level with the stride-2 backbone stage.
pub const MASK_STRIDE: usize = 2;

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(default)]
pub struct NetConfig {
    pub num_categories: usize,
    /// Rows of the identity proxy matrix.
    pub total_identities: usize,
    /// Output widths of the three backbone resolutions (strides 2, 4, 8).
    pub backbone_channels: [usize; 3],
    pub head_channels: usize,
    pub mask_channels: usize,
    pub mid_channels: usize,
    pub embed_dim: usize,
    pub norm_groups: usize,
}

impl Default for NetConfig {
    fn default() -> Self {
        Self {
            num_categories: 3,
            total_identities: 1,
            backbone_channels: [16, 32, 32],
            head_channels: 32,
            mask_channels: 8,
            mid_channels: 8,
            embed_dim: 16,
            norm_groups: 4,
        }
    }
}

impl NetConfig {
    pub fn filter_layout(&self) -> DynamicFilterLayout {
        DynamicFilterLayout::new(self.mask_channels, self.mid_channels)
    }
}

/// One grid cell of the pyramid, in image coordinates.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Location {
    pub level: usize,
    pub gx: usize,
    pub gy: usize,
    pub stride: usize,
    pub x: f64,
    pub y: f64,
}

#[derive(Clone, Debug)]
pub struct LevelOutput {
    pub stride: usize,
    pub feature: FeatureMap,
    pub cls: FeatureMap,
    pub bbox: FeatureMap,
    pub controller: FeatureMap,
    pub embed: FeatureMap,
}

#[derive(Clone, Debug)]
pub struct LevelGrads {
    pub cls: FeatureMap,
    pub bbox: FeatureMap,
    pub controller: FeatureMap,
    pub embed: FeatureMap,
}

struct LevelCache {
    det_tower: BlockCache,
    cls: ConvCache,
    bbox: ConvCache,
    controller: ConvCache,
    embed_tower: BlockCache,
    embed: ConvCache,
}

pub struct ForwardCache {
    backbone: Vec<BlockCache>,
    levels: Vec<LevelCache>,
    mask_block: BlockCache,
    mask_lateral: BlockCache,
    mask_fuse: BlockCache,
    mask_out: ConvCache,
}

/// Head and mask-branch outputs of one frame, plus what backward needs.
pub struct FrameOutput {
    pub levels: Vec<LevelOutput>,
    pub mask_feat: FeatureMap,
    pub cache: ForwardCache,
}

pub struct FrameGrads {
    pub levels: Vec<LevelGrads>,
    pub mask_feat: FeatureMap,
}

impl FrameOutput {
    pub fn zero_grads(&self) -> FrameGrads {
        FrameGrads {
            levels: self
                .levels
                .iter()
                .map(|l| LevelGrads {
                    cls: l.cls.same_shape(),
                    bbox: l.bbox.same_shape(),
                    controller: l.controller.same_shape(),
                    embed: l.embed.same_shape(),
                })
                .collect(),
            mask_feat: self.mask_feat.same_shape(),
        }
    }
}

/// Backbone (six conv stages, strides 4 and 8 exposed), shared heads and the
/// mask branch. Holds only structure; weights are passed in as a flat slice.
#[derive(Clone, Debug)]
pub struct Network {
    pub config: NetConfig,
    pub layout: ParamLayout,
    backbone: Vec<ConvBlock>,
    det_tower: ConvBlock,
    cls: Conv2d,
    bbox: Conv2d,
    controller: Conv2d,
    embed_tower: ConvBlock,
    embed: Conv2d,
    mask_block: ConvBlock,
    mask_lateral: ConvBlock,
    mask_fuse: ConvBlock,
    mask_out: Conv2d,
    proxies: Slot,
}

const INPUT_MEAN: f64 = 0.5;
const INPUT_STD: f64 = 0.25;
const CLS_PRIOR: f64 = 0.01;
/// Box distances are `stride · exp(raw)` with `raw` clamped to this range.
pub const BOX_RAW_CLAMP: f64 = 8.0;

impl Network {
    pub fn new(config: NetConfig) -> Self {
        let mut layout = ParamLayout::default();
        let [c1, c2, c3] = config.backbone_channels;
        let g = config.norm_groups;
        let stages = [(3, c1, 2), (c1, c1, 1), (c1, c2, 2), (c2, c2, 1), (c2, c3, 2), (c3, c3, 1)];
        let backbone = stages
            .iter()
            .enumerate()
            .map(|(i, &(cin, cout, s))| ConvBlock::new(&mut layout, &format!("backbone.{i}"), cin, cout, s, g))
            .collect();
        assert_eq!(c2, c3, "pyramid levels share the head weights and need equal widths");
        let hc = config.head_channels;
        let det_tower = ConvBlock::new(&mut layout, "head.tower", c3, hc, 1, g);
        let cls = Conv2d::new(&mut layout, "head.cls", hc, config.num_categories, 1, 1);
        let bbox = Conv2d::new(&mut layout, "head.box", hc, 4, 1, 1);
        let controller = Conv2d::new(&mut layout, "head.controller", hc, config.filter_layout().num_params(), 1, 1);
        let embed_tower = ConvBlock::new(&mut layout, "embed.tower", c3, hc, 1, g);
        let embed = Conv2d::new(&mut layout, "embed.out", hc, config.embed_dim, 1, 1);
        let mask_block = ConvBlock::new(&mut layout, "mask.block", c2, hc, 1, g);
        let mask_lateral = ConvBlock::new(&mut layout, "mask.lateral", c1, hc, 1, g);
        let mask_fuse = ConvBlock::new(&mut layout, "mask.fuse", hc, hc, 1, g);
        let mask_out = Conv2d::new(&mut layout, "mask.out", hc, config.mask_channels, 1, 1);
        let proxies = layout.register("embed.proxies", &[config.total_identities, config.embed_dim]);
        Self {
            config,
            layout,
            backbone,
            det_tower,
            cls,
            bbox,
            controller,
            embed_tower,
            embed,
            mask_block,
            mask_lateral,
            mask_fuse,
            mask_out,
            proxies,
        }
    }

    pub fn proxies(&self) -> Slot {
        self.proxies
    }

    pub fn init_params(&self, seed: u64) -> ModelParams {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = ModelParams::zeros(self.layout.clone());
        let v = &mut p.values;
        let mut blocks: Vec<&ConvBlock> = self.backbone.iter().collect();
        blocks.extend([&self.det_tower, &self.embed_tower, &self.mask_block, &self.mask_lateral, &self.mask_fuse]);
        for b in blocks {
            let std = (2.0 / b.conv.fan_in() as f64).sqrt();
            fill_normal(b.conv.weight().get_mut(v), std, &mut rng);
            b.norm.gamma().get_mut(v).fill(1.0);
        }
        for (conv, scale) in [
            (&self.cls, 0.01),
            (&self.bbox, 0.01),
            (&self.controller, 0.5),
            (&self.embed, 1.0),
            (&self.mask_out, 1.0),
        ] {
            let std = scale / (conv.fan_in() as f64).sqrt();
            fill_normal(conv.weight().get_mut(v), std, &mut rng);
        }
        self.cls.bias().get_mut(v).fill(-((1.0 - CLS_PRIOR) / CLS_PRIOR).ln());
        fill_normal(
            self.proxies.get_mut(v),
            1.0 / (self.config.embed_dim as f64).sqrt(),
            &mut rng,
        );
        p
    }

    pub fn check_input(&self, image: &Image) -> Result<()> {
        let max = *STRIDES.last().unwrap();
        if image.height == 0 || image.height % max != 0 || image.width % max != 0 {
            return Err(Error::ShapeMismatch(format!(
                "image {}x{} not divisible by stride {max}",
                image.height, image.width
            )));
        }
        Ok(())
    }

    pub fn locations(&self, height: usize, width: usize) -> Vec<Location> {
        let mut out = Vec::new();
        for (level, &s) in STRIDES.iter().enumerate() {
            for gy in 0..height / s {
                for gx in 0..width / s {
                    out.push(Location {
                        level,
                        gx,
                        gy,
                        stride: s,
                        x: (gx * s + s / 2) as f64,
                        y: (gy * s + s / 2) as f64,
                    });
                }
            }
        }
        out
    }

    fn to_input(image: &Image) -> FeatureMap {
        let (h, w) = (image.height, image.width);
        let mut x = FeatureMap::zeros(3, h, w);
        for i in 0..h * w {
            for c in 0..3 {
                x.data[c * h * w + i] = (image.data[i * 3 + c] - INPUT_MEAN) / INPUT_STD;
            }
        }
        x
    }

    pub fn forward(&self, params: &[f64], image: &Image) -> Result<FrameOutput> {
        self.check_input(image)?;
        let mut x = Self::to_input(image);
        let mut backbone = Vec::with_capacity(self.backbone.len());
        let mut features = Vec::new();
        let mut fine = None;
        for (i, block) in self.backbone.iter().enumerate() {
            let (y, cache) = block.forward(params, &x);
            backbone.push(cache);
            if i == 1 {
                fine = Some(y.clone());
            }
            if i == 3 || i == 5 {
                features.push(y.clone());
            }
            x = y;
        }
        let mut levels = Vec::with_capacity(2);
        let mut level_caches = Vec::with_capacity(2);
        for (feature, &stride) in features.into_iter().zip(&STRIDES) {
            let (tower, det_tower) = self.det_tower.forward(params, &feature);
            let (cls, cls_c) = self.cls.forward(params, &tower);
            let (bbox, bbox_c) = self.bbox.forward(params, &tower);
            let (controller, ctrl_c) = self.controller.forward(params, &tower);
            let (etower, embed_tower) = self.embed_tower.forward(params, &feature);
            let (embed, embed_c) = self.embed.forward(params, &etower);
            level_caches.push(LevelCache {
                det_tower,
                cls: cls_c,
                bbox: bbox_c,
                controller: ctrl_c,
                embed_tower,
                embed: embed_c,
            });
            levels.push(LevelOutput {
                stride,
                feature,
                cls,
                bbox,
                controller,
                embed,
            });
        }
        let (mb, mask_block) = self.mask_block.forward(params, &levels[0].feature);
        let (mut fused, mask_lateral) = self.mask_lateral.forward(params, &fine.expect("stride-2 stage"));
        add(&mut fused, &upsample2(&mb));
        let (mf, mask_fuse) = self.mask_fuse.forward(params, &fused);
        let (mask_feat, mask_out) = self.mask_out.forward(params, &mf);
        Ok(FrameOutput {
            levels,
            mask_feat,
            cache: ForwardCache {
                backbone,
                levels: level_caches,
                mask_block,
                mask_lateral,
                mask_fuse,
                mask_out,
            },
        })
    }

    /// Backpropagates head and mask-feature gradients into `grads`.
    pub fn backward(&self, params: &[f64], out: &FrameOutput, g: &FrameGrads, grads: &mut [f64]) {
        let cache = &out.cache;
        let mut d_features: Vec<FeatureMap> = out.levels.iter().map(|l| l.feature.same_shape()).collect();
        for ((lc, lg), d_feat) in cache.levels.iter().zip(&g.levels).zip(d_features.iter_mut()) {
            let mut d_tower = self.cls.backward(params, &lc.cls, &lg.cls, grads);
            add(&mut d_tower, &self.bbox.backward(params, &lc.bbox, &lg.bbox, grads));
            add(&mut d_tower, &self.controller.backward(params, &lc.controller, &lg.controller, grads));
            add(d_feat, &self.det_tower.backward(params, &lc.det_tower, &d_tower, grads));
            let d_etower = self.embed.backward(params, &lc.embed, &lg.embed, grads);
            add(d_feat, &self.embed_tower.backward(params, &lc.embed_tower, &d_etower, grads));
        }
        let d_mf = self.mask_out.backward(params, &cache.mask_out, &g.mask_feat, grads);
        let d_fused = self.mask_fuse.backward(params, &cache.mask_fuse, &d_mf, grads);
        let d_fine = self.mask_lateral.backward(params, &cache.mask_lateral, &d_fused, grads);
        let d_mb = upsample2_backward(&d_fused);
        add(&mut d_features[0], &self.mask_block.backward(params, &cache.mask_block, &d_mb, grads));

        let mut d = d_features.pop().expect("two levels");
        for i in (0..self.backbone.len()).rev() {
            if i == 3 {
                add(&mut d, &d_features[0]);
            }
            if i == 1 {
                add(&mut d, &d_fine);
            }
            d = self.backbone[i].backward(params, &cache.backbone[i], &d, grads);
        }
    }
}

fn add(dst: &mut FeatureMap, src: &FeatureMap) {
    debug_assert_eq!(dst.data.len(), src.data.len());
    for (a, b) in dst.data.iter_mut().zip(&src.data) {
        *a += b;
    }
}

/// Nearest-neighbour ×2 upsampling.
fn upsample2(x: &FeatureMap) -> FeatureMap {
    let (h, w) = (x.height * 2, x.width * 2);
    let mut y = FeatureMap::zeros(x.channels, h, w);
    for c in 0..x.channels {
        for yy in 0..h {
            for xx in 0..w {
                y.data[(c * h + yy) * w + xx] = x.data[(c * x.height + yy / 2) * x.width + xx / 2];
            }
        }
    }
    y
}

/// Adjoint of [`upsample2`]: sums each 2×2 block.
fn upsample2_backward(dy: &FeatureMap) -> FeatureMap {
    let (h, w) = (dy.height / 2, dy.width / 2);
    let mut dx = FeatureMap::zeros(dy.channels, h, w);
    for c in 0..dy.channels {
        for yy in 0..dy.height {
            for xx in 0..dy.width {
                dx.data[(c * h + yy / 2) * w + xx / 2] += dy.data[(c * dy.height + yy) * dy.width + xx];
            }
        }
    }
    dx
}

/// L2-normalizes `raw` and returns the norm.
pub fn normalize(raw: &[f64]) -> (Vec<f64>, f64) {
    let norm = raw.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
    (raw.iter().map(|v| v / norm).collect(), norm)
}

/// Gradient through `e = raw / |raw|`.
pub fn normalize_backward(unit: &[f64], norm: f64, d_unit: &[f64]) -> Vec<f64> {
    let dot: f64 = unit.iter().zip(d_unit).map(|(u, d)| u * d).sum();
    unit.iter().zip(d_unit).map(|(u, d)| (d - u * dot) / norm).collect()
}

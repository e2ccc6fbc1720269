use super::mask_head::{mask_head, sigmoid, MaskFeature};
use super::model::{normalize, FrameOutput, Network, BOX_RAW_CLAMP, MASK_STRIDE};
use super::params::ModelParams;
use crate::geometry::BBox;
use crate::syndata::{BinaryMask, Image};
use crate::Result;
use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DetectConfig {
    pub score_threshold: f64,
    pub nms_iou: f64,
    pub max_detections: usize,
}

impl Default for DetectConfig {
    fn default() -> Self {
        Self {
            score_threshold: 0.1,
            nms_iou: 0.5,
            max_detections: 10,
        }
    }
}

/// A detected instance: category, dynamic filter, embedding, and the mask
/// the filter produces on this frame.
#[derive(Clone, Debug, PartialEq)]
pub struct Detection {
    pub category: usize,
    pub score: f64,
    pub bbox: BBox,
    pub theta: Vec<f64>,
    pub embedding: Vec<f64>,
    /// Soft mask on the mask-branch grid, row-major.
    pub mask: Vec<f64>,
    pub mask_size: (usize, usize),
    pub location: (f64, f64),
    pub level: usize,
}

impl Detection {
    /// Bilinearly upsamples the soft mask to image resolution and thresholds at 0.5.
    pub fn binary_mask(&self, height: usize, width: usize) -> BinaryMask {
        upsample_threshold(&self.mask, self.mask_size, MASK_STRIDE, height, width)
    }
}

pub fn upsample_threshold(mask: &[f64], size: (usize, usize), stride: usize, height: usize, width: usize) -> BinaryMask {
    let (mh, mw) = size;
    let s = stride as f64;
    let sample = |gy: isize, gx: isize| mask[(gy.clamp(0, mh as isize - 1) as usize) * mw + gx.clamp(0, mw as isize - 1) as usize];
    BinaryMask::from_fn(height, width, |y, x| {
        let fy = (y as f64 + 0.5) / s - 0.5;
        let fx = (x as f64 + 0.5) / s - 0.5;
        let (y0, x0) = (fy.floor(), fx.floor());
        let (ty, tx) = (fy - y0, fx - x0);
        let (y0, x0) = (y0 as isize, x0 as isize);
        let v = (1.0 - ty) * ((1.0 - tx) * sample(y0, x0) + tx * sample(y0, x0 + 1))
            + ty * ((1.0 - tx) * sample(y0 + 1, x0) + tx * sample(y0 + 1, x0 + 1));
        v >= 0.5
    })
}

/// Greedy non-maximum suppression; returns kept indices in descending score order.
pub fn nms(boxes: &[BBox], scores: &[f64], iou_threshold: f64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..boxes.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    let mut keep: Vec<usize> = Vec::new();
    for i in order {
        if keep.iter().all(|&k| boxes[k].iou(&boxes[i]) <= iou_threshold) {
            keep.push(i);
        }
    }
    keep
}

pub fn decode_box(loc: (f64, f64), stride: usize, raw: [f64; 4]) -> BBox {
    let d = raw.map(|r| stride as f64 * r.clamp(-BOX_RAW_CLAMP, BOX_RAW_CLAMP).exp());
    BBox::new(loc.0 - d[0], loc.1 - d[1], loc.0 + d[2], loc.1 + d[3])
}

impl Network {
    /// Runs the still-image pipeline on one frame.
    pub fn detect(&self, params: &ModelParams, image: &Image, cfg: &DetectConfig) -> Result<Vec<Detection>> {
        let out = self.forward(&params.values, image)?;
        self.detections_from(&out, image.height, image.width, cfg)
    }

    pub fn detections_from(&self, out: &FrameOutput, height: usize, width: usize, cfg: &DetectConfig) -> Result<Vec<Detection>> {
        let locations = self.locations(height, width);
        let layout = self.config.filter_layout();
        let k = self.config.num_categories;

        struct Candidate {
            loc: usize,
            category: usize,
            score: f64,
            bbox: BBox,
        }
        let mut cands = Vec::new();
        let mut offset = 0;
        for (li, level) in out.levels.iter().enumerate() {
            let plane = level.cls.plane();
            for i in 0..plane {
                let (mut best, mut score) = (0, f64::NEG_INFINITY);
                for c in 0..k {
                    let s = sigmoid(level.cls.data[c * plane + i]);
                    if s > score {
                        best = c;
                        score = s;
                    }
                }
                if score > cfg.score_threshold {
                    let loc = &locations[offset + i];
                    debug_assert_eq!(loc.level, li);
                    let raw = [0, 1, 2, 3].map(|c| level.bbox.data[c * plane + i]);
                    let b = decode_box((loc.x, loc.y), loc.stride, raw);
                    let bbox = BBox::new(b.x0.max(0.0), b.y0.max(0.0), b.x1.min(width as f64), b.y1.min(height as f64));
                    cands.push(Candidate {
                        loc: offset + i,
                        category: best,
                        score,
                        bbox,
                    });
                }
            }
            offset += plane;
        }
        let boxes: Vec<BBox> = cands.iter().map(|c| c.bbox).collect();
        let scores: Vec<f64> = cands.iter().map(|c| c.score).collect();
        let keep = nms(&boxes, &scores, cfg.nms_iou);

        let mut dets = Vec::new();
        for i in keep.into_iter().take(cfg.max_detections) {
            let c = &cands[i];
            let loc = locations[c.loc];
            let level = &out.levels[loc.level];
            let theta = level.controller.column(loc.gy, loc.gx);
            let (embedding, _) = normalize(&level.embed.column(loc.gy, loc.gx));
            let feature = MaskFeature::new(&out.mask_feat, (loc.x, loc.y), MASK_STRIDE);
            let mask = mask_head(&layout, &feature.combined, &theta)?;
            dets.push(Detection {
                category: c.category,
                score: c.score,
                bbox: c.bbox,
                theta,
                embedding,
                mask,
                mask_size: (out.mask_feat.height, out.mask_feat.width),
                location: (loc.x, loc.y),
                level: loc.level,
            });
        }
        Ok(dets)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::netcore::NetConfig;

    #[test]
    fn nms_keeps_one_of_duplicates() {
        let b = BBox::new(0.0, 0.0, 10.0, 10.0);
        assert_eq!(nms(&[b, b], &[0.9, 0.8], 0.5), vec![0]);
        let far = BBox::new(20.0, 20.0, 30.0, 30.0);
        assert_eq!(nms(&[b, far, b], &[0.5, 0.7, 0.9], 0.5), vec![2, 1]);
    }

    #[test]
    fn threshold_one_returns_nothing() {
        let net = Network::new(NetConfig::default());
        let mut params = net.init_params(0);
        // force saturated scores everywhere
        let range = net.layout.find("head.cls.bias").unwrap().range();
        params.values[range].fill(50.0);
        let image = Image::zeros(64, 64);
        let cfg = DetectConfig {
            score_threshold: 1.0,
            ..Default::default()
        };
        assert!(net.detect(&params, &image, &cfg).unwrap().is_empty());
    }

    #[test]
    fn single_confident_location() {
        let net = Network::new(NetConfig::default());
        let mut params = net.init_params(1);
        let spec = net.layout.find("head.cls.weight").unwrap().range();
        params.values[spec].fill(0.0);
        let bias = net.layout.find("head.cls.bias").unwrap().range();
        params.values[bias].fill(-20.0);
        let mut out = net.forward(&params.values, &Image::zeros(64, 64)).unwrap();
        // lift one cell of category 1 on level 0
        let plane = out.levels[0].cls.plane();
        out.levels[0].cls.data[plane + 5 * 16 + 7] = 5.0;
        let dets = net.detections_from(&out, 64, 64, &DetectConfig::default()).unwrap();
        assert_eq!(dets.len(), 1);
        let d = &dets[0];
        assert_eq!(d.category, 1);
        assert_eq!(d.location, (30.0, 22.0));
        assert_eq!(d.mask.len(), 32 * 32);
        assert_eq!(d.mask_size, (32, 32));
        assert!(d.mask.iter().all(|&m| m > 0.0 && m < 1.0));
        let norm: f64 = d.embedding.iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!((norm - 1.0).abs() < 1e-6);
        assert_eq!(d.binary_mask(64, 64).height, 64);
    }

    #[test]
    fn upsample_constant_masks() {
        let ones = vec![0.9; 4];
        assert_eq!(upsample_threshold(&ones, (2, 2), 4, 8, 8).area(), 64);
        let zeros = vec![0.1; 4];
        assert_eq!(upsample_threshold(&zeros, (2, 2), 4, 8, 8).area(), 0);
    }
}

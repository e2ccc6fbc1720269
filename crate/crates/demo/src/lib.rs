//! WebAssembly bindings for the static demo page in `www/`: synthetic clips
//! with their ground-truth masks, an evaluator playground that scores
//! perturbed ground truth, and the focal and dice loss curves.

use crossvis::losses::{dice_loss, focal_term, FocalParams};
use crossvis::syndata::{generate_clip, render_clip, BinaryMask, CorpusManifest, VideoClip};
use crossvis::viseval::{evaluate, gt_tracks, ClipEval, PredTrack};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use wasm_bindgen::prelude::*;

const PALETTE: [[f64; 3]; 6] = [
    [1.0, 0.35, 0.35],
    [0.35, 0.85, 1.0],
    [1.0, 0.85, 0.2],
    [0.55, 1.0, 0.45],
    [0.9, 0.5, 1.0],
    [1.0, 0.6, 0.2],
];

#[wasm_bindgen]
pub struct ClipView {
    clip: VideoClip,
    num_categories: usize,
}

#[wasm_bindgen]
impl ClipView {
    #[wasm_bindgen(constructor)]
    pub fn new(seed: u32, max_instances: u32, occlusion: bool) -> ClipView {
        let m = CorpusManifest {
            num_clips: 1,
            seed: seed as u64,
            max_instances: (max_instances as usize).clamp(1, 6),
            occlusion,
            ..Default::default()
        };
        let (clip, _) = render_clip(&generate_clip(&m, 0), 0);
        ClipView {
            clip,
            num_categories: m.num_categories,
        }
    }

    pub fn frames(&self) -> usize {
        self.clip.len()
    }

    pub fn width(&self) -> usize {
        self.clip.width()
    }

    pub fn height(&self) -> usize {
        self.clip.height()
    }

    /// Distinct identities in the clip.
    pub fn identities(&self) -> usize {
        gt_tracks(&self.clip).len()
    }

    /// RGBA bytes of frame `t`, upscaled `scale`× (nearest), optionally with
    /// each identity's mask tinted and outlined.
    pub fn frame_rgba(&self, t: usize, masks: bool, scale: usize) -> Vec<u8> {
        let frame = &self.clip.frames[t.min(self.clip.len() - 1)];
        let (h, w) = (self.height(), self.width());
        let mut rgb: Vec<[f64; 3]> = (0..h * w).map(|i| frame.image.pixel(i / w, i % w)).collect();
        if masks {
            for a in &frame.annotations {
                let color = PALETTE[a.identity % PALETTE.len()];
                for y in 0..h {
                    for x in 0..w {
                        if !a.mask.get(y, x) {
                            continue;
                        }
                        let px = &mut rgb[y * w + x];
                        if is_edge(&a.mask, y, x) {
                            *px = color;
                        } else {
                            for c in 0..3 {
                                px[c] = 0.45 * px[c] + 0.55 * color[c];
                            }
                        }
                    }
                }
            }
        }
        let scale = scale.max(1);
        let (sh, sw) = (h * scale, w * scale);
        let mut out = Vec::with_capacity(sh * sw * 4);
        for y in 0..sh {
            for x in 0..sw {
                let p = rgb[(y / scale) * w + x / scale];
                out.extend(p.map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8));
                out.push(255);
            }
        }
        out
    }

    /// `[AP, AP50, AP75, AR@1, AR@10]` of the ground-truth tracks used as
    /// predictions after damage: each frame's mask shifted by up to `shift`
    /// pixels, whole tracks dropped with probability `drop`, and tracks cut
    /// in two (an identity switch halfway) with probability `switch`.
    pub fn perturbed_scores(&self, shift: u32, drop: f64, switch: f64, seed: u32) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed as u64);
        let gts = gt_tracks(&self.clip);
        let s = shift as i64;
        let mut preds = Vec::new();
        for g in &gts {
            if rng.gen_bool(drop.clamp(0.0, 1.0)) {
                continue;
            }
            let masks: Vec<(usize, BinaryMask)> = g
                .masks
                .iter()
                .map(|(&t, m)| (t, shifted(m, rng.gen_range(-s..=s), rng.gen_range(-s..=s))))
                .collect();
            let score = rng.gen_range(0.5..1.0);
            let parts = if masks.len() >= 2 && rng.gen_bool(switch.clamp(0.0, 1.0)) {
                let (a, b) = masks.split_at(masks.len() / 2);
                vec![a.to_vec(), b.to_vec()]
            } else {
                vec![masks]
            };
            for part in parts {
                preds.push(PredTrack {
                    track_id: preds.len(),
                    category: g.category,
                    score,
                    masks: part.into_iter().collect(),
                });
            }
        }
        let clip = ClipEval {
            clip_id: self.clip.clip_id.clone(),
            preds,
            gts,
        };
        let s = evaluate(&[clip], self.num_categories).expect("track ids are unique");
        vec![s.ap, s.ap50, s.ap75, s.ar1, s.ar10]
    }
}

fn is_edge(m: &BinaryMask, y: usize, x: usize) -> bool {
    y == 0
        || x == 0
        || y + 1 == m.height
        || x + 1 == m.width
        || !m.get(y - 1, x)
        || !m.get(y + 1, x)
        || !m.get(y, x - 1)
        || !m.get(y, x + 1)
}

fn shifted(m: &BinaryMask, dy: i64, dx: i64) -> BinaryMask {
    BinaryMask::from_fn(m.height, m.width, |y, x| {
        let (sy, sx) = (y as i64 - dy, x as i64 - dx);
        sy >= 0 && sx >= 0 && (sy as usize) < m.height && (sx as usize) < m.width && m.get(sy as usize, sx as usize)
    })
}

/// Focal loss of a positive at probabilities `(i + 0.5) / points`.
#[wasm_bindgen]
pub fn focal_curve(alpha: f64, gamma: f64, points: usize) -> Vec<f64> {
    let fp = FocalParams { alpha, gamma };
    (0..points)
        .map(|i| {
            let p = (i as f64 + 0.5) / points as f64;
            focal_term((p / (1.0 - p)).ln(), true, &fp).0
        })
        .collect()
}

/// Dice loss of a 16×16 square prediction sliding horizontally over an equal
/// target square in a 16×48 strip, offsets `0..=32`. `confidence` is the
/// prediction's value inside the square (1 = hard mask).
#[wasm_bindgen]
pub fn dice_curve(confidence: f64) -> Vec<f64> {
    let (h, w, side) = (16, 48, 16);
    let target: Vec<f64> = (0..h * w).map(|i| ((i % w) < side) as u8 as f64).collect();
    (0..=w - side)
        .map(|off| {
            let pred: Vec<f64> = (0..h * w)
                .map(|i| if (off..off + side).contains(&(i % w)) { confidence } else { 0.0 })
                .collect();
            dice_loss(&pred, &target).expect("equal shapes")
        })
        .collect()
}

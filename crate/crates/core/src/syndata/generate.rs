use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{BinaryMask, Corpus, CorpusManifest, Frame, Image, InstanceAnnotation, VideoClip};
use crate::Result;

/// Circle, square, triangle, diamond, plus.
pub const MAX_CATEGORIES: usize = 5;

const SCALE_JITTER: f64 = 0.15;
const POSITION_JITTER: f64 = 0.4;
const NOISE_AMPLITUDE: f64 = 0.03;

#[derive(Clone, Debug, PartialEq)]
pub struct Background {
    pub base: [f64; 3],
    pub accent: [f64; 3],
    /// Spatial frequency of the stripe texture, radians per pixel.
    pub freq: (f64, f64),
    pub phase: f64,
    /// Phase advance per frame.
    pub drift: f64,
    pub noise_seed: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct InstanceScript {
    pub category: usize,
    pub color: [f64; 3],
    pub radius: f64,
    /// Per-frame shape center in pixels.
    pub centers: Vec<(f64, f64)>,
    /// Per-frame scale factor applied to `radius`.
    pub scales: Vec<f64>,
    /// Per-frame brightness multiplier.
    pub brightness: Vec<f64>,
}

/// Everything needed to rasterize one clip. Instances are listed back to front.
#[derive(Clone, Debug, PartialEq)]
pub struct ClipScript {
    pub clip_id: String,
    pub height: usize,
    pub width: usize,
    pub length: usize,
    pub background: Background,
    pub instances: Vec<InstanceScript>,
}

fn shape_contains(category: usize, dx: f64, dy: f64, r: f64) -> bool {
    match category {
        0 => dx * dx + dy * dy <= r * r,
        1 => dx.abs() <= 0.85 * r && dy.abs() <= 0.85 * r,
        2 => {
            // apex up, base at +0.8r
            if dy > 0.8 * r || dy < -r {
                return false;
            }
            let half = (dy + r) / 1.8;
            dx.abs() <= half
        }
        3 => dx.abs() + dy.abs() <= 1.2 * r,
        _ => (dx.abs() <= 0.35 * r && dy.abs() <= r) || (dy.abs() <= 0.35 * r && dx.abs() <= r),
    }
}

fn hsv_to_rgb(h: f64, s: f64, v: f64) -> [f64; 3] {
    let h = (h.rem_euclid(1.0)) * 6.0;
    let i = h.floor();
    let f = h - i;
    let p = v * (1.0 - s);
    let q = v * (1.0 - s * f);
    let t = v * (1.0 - s * (1.0 - f));
    match i as u32 {
        0 => [v, t, p],
        1 => [q, v, p],
        2 => [p, v, t],
        3 => [p, q, v],
        4 => [t, p, v],
        _ => [v, p, q],
    }
}

#[inline]
fn quantize(v: f64) -> f64 {
    (v.clamp(0.0, 1.0) * 255.0).round() / 255.0
}

/// Rasterizes a clip. Identities are assigned consecutively from
/// `first_identity` to the instances that are visible in at least one
/// frame; the second return value is how many were assigned.
pub fn render_clip(script: &ClipScript, first_identity: usize) -> (VideoClip, usize) {
    let (h, w) = (script.height, script.width);
    let n = script.instances.len();
    let mut owners: Vec<Vec<Option<usize>>> = Vec::with_capacity(script.length);
    let mut images = Vec::with_capacity(script.length);

    for t in 0..script.length {
        let bg = &script.background;
        let mut noise_rng = ChaCha8Rng::seed_from_u64(bg.noise_seed.wrapping_add(t as u64));
        let mut image = Image::zeros(h, w);
        let mut owner = vec![None; h * w];
        for y in 0..h {
            for x in 0..w {
                let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
                let s = 0.5 + 0.5 * (bg.freq.0 * px + bg.freq.1 * py + bg.phase + bg.drift * t as f64).sin();
                let mut rgb = [0.0; 3];
                for c in 0..3 {
                    rgb[c] = bg.base[c] * (1.0 - s) + bg.accent[c] * s;
                }
                // front-most instance wins
                for (k, inst) in script.instances.iter().enumerate().rev() {
                    let (cx, cy) = inst.centers[t];
                    let r = inst.radius * inst.scales[t];
                    let (dx, dy) = (px - cx, py - cy);
                    if shape_contains(inst.category, dx, dy, r) {
                        let shade = 1.0 - 0.25 * ((dx * dx + dy * dy).sqrt() / r).min(1.0);
                        for c in 0..3 {
                            rgb[c] = inst.color[c] * inst.brightness[t] * shade;
                        }
                        owner[y * w + x] = Some(k);
                        break;
                    }
                }
                let i = (y * w + x) * 3;
                for c in 0..3 {
                    let noise = noise_rng.gen_range(-NOISE_AMPLITUDE..=NOISE_AMPLITUDE);
                    image.data[i + c] = quantize(rgb[c] + noise);
                }
            }
        }
        owners.push(owner);
        images.push(image);
    }

    let mut visible = vec![false; n];
    for owner in &owners {
        for k in owner.iter().flatten() {
            visible[*k] = true;
        }
    }
    let mut identity = vec![None; n];
    let mut next = first_identity;
    for k in 0..n {
        if visible[k] {
            identity[k] = Some(next);
            next += 1;
        }
    }

    let frames = images
        .into_iter()
        .zip(owners)
        .enumerate()
        .map(|(t, (image, owner))| {
            let annotations = (0..n)
                .filter_map(|k| {
                    let mask = BinaryMask::from_fn(h, w, |y, x| owner[y * w + x] == Some(k));
                    let bbox = mask.bbox()?;
                    Some(InstanceAnnotation {
                        identity: identity[k].expect("visible instance has identity"),
                        category: script.instances[k].category,
                        bbox,
                        mask,
                    })
                })
                .collect();
            Frame {
                time_index: t,
                image,
                annotations,
            }
        })
        .collect();

    (
        VideoClip {
            clip_id: script.clip_id.clone(),
            frames,
        },
        next - first_identity,
    )
}

fn random_instance(rng: &mut ChaCha8Rng, m: &CorpusManifest) -> InstanceScript {
    let unit = m.height.min(m.width) as f64 / 64.0;
    let radius = rng.gen_range(5.0..10.0) * unit;
    let extent = radius * (1.0 + SCALE_JITTER) * 1.2;
    let (lo_x, hi_x) = (extent, m.width as f64 - extent);
    let (lo_y, hi_y) = (extent, m.height as f64 - extent);
    let mut pos = (rng.gen_range(lo_x..hi_x), rng.gen_range(lo_y..hi_y));
    let angle = rng.gen_range(0.0..std::f64::consts::TAU);
    let speed = rng.gen_range(1.0..3.0) * unit;
    let mut vel = (speed * angle.cos(), speed * angle.sin());
    let omega = rng.gen_range(0.3..0.8);
    let phi = rng.gen_range(0.0..std::f64::consts::TAU);

    let mut centers = Vec::with_capacity(m.clip_length);
    let mut scales = Vec::with_capacity(m.clip_length);
    let mut brightness = Vec::with_capacity(m.clip_length);
    for t in 0..m.clip_length {
        centers.push(pos);
        scales.push(1.0 + SCALE_JITTER * (omega * t as f64 + phi).sin());
        brightness.push(rng.gen_range(0.9..1.1));
        pos.0 += vel.0 + rng.gen_range(-POSITION_JITTER..POSITION_JITTER);
        pos.1 += vel.1 + rng.gen_range(-POSITION_JITTER..POSITION_JITTER);
        if pos.0 < lo_x || pos.0 > hi_x {
            vel.0 = -vel.0;
            pos.0 = pos.0.clamp(lo_x, hi_x);
        }
        if pos.1 < lo_y || pos.1 > hi_y {
            vel.1 = -vel.1;
            pos.1 = pos.1.clamp(lo_y, hi_y);
        }
    }
    InstanceScript {
        category: rng.gen_range(0..m.num_categories),
        color: hsv_to_rgb(rng.gen_range(0.0..1.0), rng.gen_range(0.6..1.0), rng.gen_range(0.75..1.0)),
        radius,
        centers,
        scales,
        brightness,
    }
}

fn overlaps_anywhere(script: &ClipScript) -> bool {
    for t in 0..script.length {
        for y in 0..script.height {
            for x in 0..script.width {
                let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
                let covering = script
                    .instances
                    .iter()
                    .filter(|inst| {
                        let (cx, cy) = inst.centers[t];
                        shape_contains(inst.category, px - cx, py - cy, inst.radius * inst.scales[t])
                    })
                    .count();
                if covering > 1 {
                    return true;
                }
            }
        }
    }
    false
}

fn clip_seed(seed: u64, index: usize) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ (index as u64).wrapping_mul(0xD1B5_4A32_D192_ED03)
}

/// Builds the random script for clip `index` of the corpus described by `m`.
pub fn generate_clip(m: &CorpusManifest, index: usize) -> ClipScript {
    let mut rng = ChaCha8Rng::seed_from_u64(clip_seed(m.seed, index));
    let background = Background {
        base: hsv_to_rgb(rng.gen_range(0.0..1.0), rng.gen_range(0.1..0.4), rng.gen_range(0.15..0.35)),
        accent: hsv_to_rgb(rng.gen_range(0.0..1.0), rng.gen_range(0.1..0.4), rng.gen_range(0.3..0.55)),
        freq: (rng.gen_range(-0.4..0.4), rng.gen_range(-0.4..0.4)),
        phase: rng.gen_range(0.0..std::f64::consts::TAU),
        drift: rng.gen_range(-0.3..0.3),
        noise_seed: rng.gen(),
    };
    let count = rng.gen_range(1..=m.max_instances);
    let mut instances = Vec::with_capacity(count);
    for _ in 0..count {
        let mut placed = false;
        for _ in 0..50 {
            let candidate = random_instance(&mut rng, m);
            if m.occlusion {
                instances.push(candidate);
                placed = true;
                break;
            }
            instances.push(candidate);
            let probe = ClipScript {
                clip_id: String::new(),
                height: m.height,
                width: m.width,
                length: m.clip_length,
                background: background.clone(),
                instances: instances.clone(),
            };
            if overlaps_anywhere(&probe) {
                instances.pop();
            } else {
                placed = true;
                break;
            }
        }
        if !placed {
            break;
        }
    }
    ClipScript {
        clip_id: format!("clip_{index:04}"),
        height: m.height,
        width: m.width,
        length: m.clip_length,
        background,
        instances,
    }
}

/// Generates every clip of the corpus. Output depends only on the manifest.
pub fn generate_corpus(manifest: &CorpusManifest) -> Result<Corpus> {
    manifest.validate()?;
    let mut clips = Vec::with_capacity(manifest.num_clips);
    let mut next_identity = 0;
    for index in 0..manifest.num_clips {
        let script = generate_clip(manifest, index);
        let (clip, used) = render_clip(&script, next_identity);
        next_identity += used;
        clips.push(clip);
    }
    let mut manifest = manifest.clone();
    manifest.total_identities = next_identity;
    Ok(Corpus { manifest, clips })
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::{BTreeMap, BTreeSet};

    fn small(seed: u64) -> CorpusManifest {
        CorpusManifest {
            num_clips: 4,
            clip_length: 5,
            height: 32,
            width: 32,
            seed,
            ..Default::default()
        }
    }

    #[test]
    fn deterministic_for_fixed_seed() {
        let a = generate_corpus(&small(7)).unwrap();
        let b = generate_corpus(&small(7)).unwrap();
        assert_eq!(a, b);
        let c = generate_corpus(&small(8)).unwrap();
        assert_ne!(a.clips[0].frames[0].image, c.clips[0].frames[0].image);
    }

    #[test]
    fn rejects_invalid_manifests() {
        let mut m = small(0);
        m.height = 0;
        assert!(generate_corpus(&m).is_err());
        let mut m = small(0);
        m.num_categories = 1;
        assert!(generate_corpus(&m).is_err());
        let mut m = small(0);
        m.clip_length = 1;
        assert!(generate_corpus(&m).is_err());
    }

    #[test]
    fn single_instance_persists_across_frames() {
        let m = CorpusManifest {
            num_clips: 1,
            clip_length: 2,
            max_instances: 1,
            occlusion: false,
            ..small(3)
        };
        let corpus = generate_corpus(&m).unwrap();
        assert_eq!(corpus.manifest.total_identities, 1);
        let clip = &corpus.clips[0];
        assert_eq!(clip.frames.len(), 2);
        for f in &clip.frames {
            assert_eq!(f.annotations.len(), 1);
            assert_eq!(f.annotations[0].identity, 0);
        }
    }

    #[test]
    fn annotation_invariants() {
        let corpus = generate_corpus(&CorpusManifest {
            num_clips: 10,
            ..small(11)
        })
        .unwrap();
        let mut ids = BTreeSet::new();
        let mut category_of = BTreeMap::new();
        for clip in &corpus.clips {
            for f in &clip.frames {
                assert_eq!((f.image.height, f.image.width), (32, 32));
                assert!(f.image.data.iter().all(|v| (0.0..=1.0).contains(v)));
                let mut covered = vec![0u8; 32 * 32];
                for a in &f.annotations {
                    assert!(a.mask.area() > 0);
                    assert_eq!(a.mask.bbox(), Some(a.bbox));
                    assert!(a.category < 3);
                    assert_eq!(*category_of.entry(a.identity).or_insert(a.category), a.category);
                    ids.insert(a.identity);
                    for (c, &m) in covered.iter_mut().zip(&a.mask.data) {
                        *c += m;
                    }
                }
                assert!(covered.iter().all(|&c| c <= 1), "masks must be disjoint");
            }
        }
        assert_eq!(ids.len(), corpus.manifest.total_identities);
        assert_eq!(ids.iter().copied().collect::<Vec<_>>(), (0..ids.len()).collect::<Vec<_>>());
    }

    #[test]
    fn occlusion_gives_disjoint_masks_with_overlapping_boxes() {
        let frames = 9;
        let crossing = |category, start: f64, dir: f64, color| InstanceScript {
            category,
            color,
            radius: 8.0,
            centers: (0..frames).map(|t| (start + dir * 4.0 * t as f64, 32.0)).collect(),
            scales: vec![1.0; frames],
            brightness: vec![1.0; frames],
        };
        let script = ClipScript {
            clip_id: "cross".into(),
            height: 64,
            width: 64,
            length: frames,
            background: Background {
                base: [0.2; 3],
                accent: [0.3; 3],
                freq: (0.1, 0.0),
                phase: 0.0,
                drift: 0.0,
                noise_seed: 1,
            },
            instances: vec![
                crossing(0, 16.0, 1.0, [1.0, 0.0, 0.0]),
                crossing(1, 48.0, -1.0, [0.0, 0.0, 1.0]),
            ],
        };
        let (clip, used) = render_clip(&script, 10);
        assert_eq!(used, 2);
        assert_eq!(clip.frames[0].annotations[1].identity, 11);
        let found = clip.frames.iter().any(|f| {
            f.annotations.len() == 2 && {
                let (a, b) = (&f.annotations[0], &f.annotations[1]);
                a.mask.intersection(&b.mask) == 0 && a.bbox.intersection(&b.bbox) > 0.0
            }
        });
        assert!(found, "expected a partially occluded frame");
    }

    #[test]
    fn no_overlap_without_occlusion() {
        let m = CorpusManifest {
            num_clips: 3,
            occlusion: false,
            ..small(5)
        };
        for index in 0..m.num_clips {
            assert!(!overlaps_anywhere(&generate_clip(&m, index)));
        }
    }
}

//! Online association: detections are matched frame by frame against a
//! memory of identified tracks.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::geometry::BBox;
use crate::losses::pairwise_assign_prob;
use crate::netcore::{normalize, DetectConfig, Detection, ModelParams, Network};
use crate::syndata::{rle_encode, Image, Rle};
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MatchWeights {
    pub iou: f64,
    pub category: f64,
    pub confidence: f64,
    /// Scale applied to cosine similarities before the assignment softmax;
    /// should equal the one used in training.
    pub logit_scale: f64,
}

impl Default for MatchWeights {
    fn default() -> Self {
        Self {
            iou: 1.0,
            category: 1.0,
            confidence: 1.0,
            logit_scale: 8.0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EmbeddingUpdate {
    RunningMean,
    LastSeen,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrackerConfig {
    pub weights: MatchWeights,
    pub update: EmbeddingUpdate,
}

impl Default for TrackerConfig {
    fn default() -> Self {
        Self {
            weights: MatchWeights::default(),
            update: EmbeddingUpdate::RunningMean,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Track {
    pub track_id: usize,
    /// Unit-norm appearance summary.
    pub embedding: Vec<f64>,
    embedding_sum: Vec<f64>,
    pub category_votes: BTreeMap<usize, usize>,
    pub last_box: BBox,
    pub masks: BTreeMap<usize, Rle>,
    score_sum: f64,
    pub hits: usize,
}

impl Track {
    /// Majority vote; ties go to the smaller category.
    pub fn category(&self) -> usize {
        let mut best = (0, 0);
        for (&c, &n) in &self.category_votes {
            if n > best.1 {
                best = (c, n);
            }
        }
        best.0
    }

    pub fn score(&self) -> f64 {
        self.score_sum / self.hits.max(1) as f64
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrackMemory {
    pub tracks: Vec<Track>,
    pub next_id: usize,
}

/// A detection with its mask rasterized at image resolution.
#[derive(Clone, Debug, PartialEq)]
pub struct FrameDetection {
    pub det: Detection,
    pub mask: Rle,
}

/// Composite scores of `det` against every track in `memory`, and the score
/// of opening a new track:
/// `log p_assign + λ_iou·IoU + λ_cat·[same category] + λ_conf·score`, where
/// the new option gets `log p_new + λ_conf·score`.
pub fn match_scores(det: &Detection, memory: &TrackMemory, w: &MatchWeights) -> (Vec<f64>, f64) {
    let key: Vec<f64> = det.embedding.iter().map(|v| v * w.logit_scale).collect();
    let refs: Vec<&[f64]> = memory.tracks.iter().map(|t| t.embedding.as_slice()).collect();
    let p = pairwise_assign_prob(&key, &refs);
    let conf = w.confidence * det.score;
    let scores = memory
        .tracks
        .iter()
        .zip(&p)
        .map(|(t, p)| {
            p.ln()
                + w.iou * det.bbox.iou(&t.last_box)
                + w.category * (det.category == t.category()) as u8 as f64
                + conf
        })
        .collect();
    (scores, p[memory.tracks.len()].ln() + conf)
}

pub fn match_score(det: &Detection, track: usize, memory: &TrackMemory, w: &MatchWeights) -> f64 {
    match_scores(det, memory, w).0[track]
}

/// Greedy one-pass assignment in descending detection score. Each track is
/// used at most once per frame; a detection whose best available option is
/// "new" opens a track. Returns the track id of every input detection.
pub fn assign_identities(dets: &[FrameDetection], time_index: usize, memory: &mut TrackMemory, cfg: &TrackerConfig) -> Vec<usize> {
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| dets[b].det.score.total_cmp(&dets[a].det.score).then(a.cmp(&b)));
    // scores are taken against the memory as it was at the start of the frame
    let existing = memory.tracks.len();
    let mut used = vec![false; existing];
    let table: Vec<(Vec<f64>, f64)> = dets.iter().map(|d| match_scores(&d.det, memory, &cfg.weights)).collect();
    let mut ids = vec![0; dets.len()];
    for i in order {
        let d = &dets[i];
        let (scores, new_score) = &table[i];
        let best = (0..existing)
            .filter(|&t| !used[t])
            .max_by(|&a, &b| scores[a].total_cmp(&scores[b]).then(b.cmp(&a)))
            .filter(|&t| scores[t] > *new_score);
        let t = match best {
            Some(t) => {
                used[t] = true;
                update_track(&mut memory.tracks[t], d, time_index, cfg.update);
                t
            }
            None => {
                memory.tracks.push(new_track(memory.next_id, d, time_index));
                memory.next_id += 1;
                memory.tracks.len() - 1
            }
        };
        ids[i] = memory.tracks[t].track_id;
    }
    ids
}

fn new_track(track_id: usize, d: &FrameDetection, time_index: usize) -> Track {
    Track {
        track_id,
        embedding: d.det.embedding.clone(),
        embedding_sum: d.det.embedding.clone(),
        category_votes: BTreeMap::from([(d.det.category, 1)]),
        last_box: d.det.bbox,
        masks: BTreeMap::from([(time_index, d.mask.clone())]),
        score_sum: d.det.score,
        hits: 1,
    }
}

fn update_track(t: &mut Track, d: &FrameDetection, time_index: usize, update: EmbeddingUpdate) {
    match update {
        EmbeddingUpdate::RunningMean => {
            for (s, e) in t.embedding_sum.iter_mut().zip(&d.det.embedding) {
                *s += e;
            }
            t.embedding = normalize(&t.embedding_sum).0;
        }
        EmbeddingUpdate::LastSeen => {
            t.embedding_sum = d.det.embedding.clone();
            t.embedding = d.det.embedding.clone();
        }
    }
    *t.category_votes.entry(d.det.category).or_default() += 1;
    t.last_box = d.det.bbox;
    t.masks.insert(time_index, d.mask.clone());
    t.score_sum += d.det.score;
    t.hits += 1;
}

/// Runs association over per-frame detections `(time_index, detections)`.
pub fn track_detections<I>(frames: I, cfg: &TrackerConfig) -> Result<Vec<Track>>
where
    I: IntoIterator<Item = (usize, Vec<FrameDetection>)>,
{
    let mut memory = TrackMemory::default();
    let mut seen = false;
    for (t, dets) in frames {
        seen = true;
        assign_identities(&dets, t, &mut memory, cfg);
    }
    if !seen {
        return Err(Error::InvalidArgument("cannot track an empty video".into()));
    }
    Ok(memory.tracks)
}

/// Detects and associates instances over a whole video, frame by frame.
pub fn process_video(
    net: &Network,
    params: &ModelParams,
    images: &[(usize, &Image)],
    detect: &DetectConfig,
    cfg: &TrackerConfig,
) -> Result<Vec<Track>> {
    let mut frames = Vec::with_capacity(images.len());
    for &(t, image) in images {
        let dets = net.detect(params, image, detect)?;
        let dets = dets
            .into_iter()
            .map(|det| {
                let mask = rle_encode(&det.binary_mask(image.height, image.width));
                FrameDetection { det, mask }
            })
            .collect();
        frames.push((t, dets));
    }
    track_detections(frames, cfg)
}

/// One entry of the prediction dump.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PredictedTrack {
    pub track_id: usize,
    pub category: usize,
    pub score: f64,
    pub masks: BTreeMap<usize, Rle>,
}

impl From<&Track> for PredictedTrack {
    fn from(t: &Track) -> Self {
        PredictedTrack {
            track_id: t.track_id,
            category: t.category(),
            score: t.score(),
            masks: t.masks.clone(),
        }
    }
}

/// Prediction dump: clip id to its tracks.
pub type PredictionDump = BTreeMap<String, Vec<PredictedTrack>>;

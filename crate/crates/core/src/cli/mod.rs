//! Operator surface: corpus generation, training, evaluation, inference and
//! the ablation protocols. The `crossvis` binary is a thin wrapper.

mod ablate;
mod checkpoint;
mod config;
mod train;

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

pub use ablate::{
    cmd_ablate, components_arms, embedding_arms, render_table, run_arm, run_arms, sweep_svg, t_sweep_arms, AblationReport, Arm,
    ArmResult, Protocol,
};
pub use checkpoint::Checkpoint;
pub use config::{AblateConfig, DataConfig, ModelConfig, RunConfig, Split, TrainConfig};
pub use train::{train, EpochLog};

use crate::error::IoContext;
use crate::netcore::{ModelParams, Network};
use crate::syndata::{generate_corpus, read_corpus, write_corpus, write_png, Corpus, CorpusManifest, VideoClip};
use crate::tracker::{process_video, PredictedTrack, PredictionDump};
use crate::viseval::{evaluate, gt_tracks, ClipEval, EvalSummary, PredTrack};
use crate::{Error, Result};

/// Generates the training and validation corpora under `data.root`.
pub fn cmd_generate(cfg: &RunConfig) -> Result<[CorpusManifest; 2]> {
    let mut out = Vec::new();
    for split in [Split::Train, Split::Val] {
        let corpus = generate_corpus(&cfg.data.manifest(split))?;
        write_corpus(&corpus, cfg.data.split_dir(split))?;
        out.push(corpus.manifest);
    }
    Ok([out[0].clone(), out[1].clone()])
}

pub fn load_split(cfg: &RunConfig, split: Split) -> Result<Corpus> {
    let dir = cfg.data.split_dir(split);
    if !dir.join("manifest.json").exists() {
        return Err(Error::Config(format!(
            "no corpus at {} (run `generate` first)",
            dir.display()
        )));
    }
    read_corpus(dir)
}

pub struct TrainReport {
    pub final_epoch: Option<EpochLog>,
    pub checkpoint: PathBuf,
    pub metrics: PathBuf,
}

/// Trains on an in-memory corpus, writing `config.toml`, `metrics.jsonl`
/// (one row per epoch) and `checkpoint.bin` under `cfg.out`.
pub fn train_to_dir(cfg: &RunConfig, corpus: &Corpus) -> Result<TrainReport> {
    fs::create_dir_all(&cfg.out).at(&cfg.out)?;
    let cfg_path = cfg.out.join("config.toml");
    fs::write(&cfg_path, cfg.to_toml()).at(&cfg_path)?;
    let metrics = cfg.out.join("metrics.jsonl");
    let checkpoint = cfg.out.join("checkpoint.bin");
    let mut log = fs::File::create(&metrics).at(&metrics)?;
    let mut last = None;
    train(cfg, corpus, |row, ckpt| {
        writeln!(log, "{}", serde_json::to_string(row)?).at(&metrics)?;
        ckpt.save(&checkpoint)?;
        last = Some(row.clone());
        Ok(())
    })?;
    Ok(TrainReport {
        final_epoch: last,
        checkpoint,
        metrics,
    })
}

pub fn cmd_train(cfg: &RunConfig) -> Result<TrainReport> {
    let corpus = load_split(cfg, Split::Train)?;
    train_to_dir(cfg, &corpus)
}

/// Tracks every instance of a clip and returns the dump entries.
pub fn predict_clip(net: &Network, params: &ModelParams, clip: &VideoClip, cfg: &RunConfig) -> Result<Vec<PredictedTrack>> {
    let images: Vec<(usize, &crate::syndata::Image)> = clip.frames.iter().map(|f| (f.time_index, &f.image)).collect();
    let tracks = process_video(net, params, &images, &cfg.detect, &cfg.tracker).map_err(|e| Error::Clip {
        clip_id: clip.clip_id.clone(),
        message: e.to_string(),
    })?;
    Ok(tracks.iter().map(PredictedTrack::from).collect())
}

pub fn evaluate_dump(corpus: &Corpus, dump: &PredictionDump) -> Result<EvalSummary> {
    let mut clips = Vec::with_capacity(corpus.clips.len());
    for clip in &corpus.clips {
        let preds = dump
            .get(&clip.clip_id)
            .map(|tracks| {
                tracks
                    .iter()
                    .map(|p| PredTrack::from_dump(p, clip.height(), clip.width()))
                    .collect::<Result<Vec<_>>>()
            })
            .transpose()?
            .unwrap_or_default();
        clips.push(ClipEval {
            clip_id: clip.clip_id.clone(),
            preds,
            gts: gt_tracks(clip),
        });
    }
    evaluate(&clips, corpus.manifest.num_categories)
}

/// Runs online inference over a whole corpus and scores it.
pub fn evaluate_checkpoint(ckpt: &Checkpoint, corpus: &Corpus, cfg: &RunConfig) -> Result<(EvalSummary, PredictionDump)> {
    if corpus.clips.is_empty() {
        return Err(Error::InvalidArgument("evaluation split has no clips".into()));
    }
    if ckpt.net.num_categories != corpus.manifest.num_categories {
        return Err(Error::Checkpoint(format!(
            "checkpoint predicts {} categories, corpus has {}",
            ckpt.net.num_categories, corpus.manifest.num_categories
        )));
    }
    let net = ckpt.network();
    let mut dump = PredictionDump::new();
    for clip in &corpus.clips {
        dump.insert(clip.clip_id.clone(), predict_clip(&net, &ckpt.params, clip, cfg)?);
    }
    Ok((evaluate_dump(corpus, &dump)?, dump))
}

/// Scores `checkpoint` on a split; writes `eval_<split>.json` under `cfg.out`.
pub fn cmd_eval(cfg: &RunConfig, checkpoint: &Path, split: Split) -> Result<EvalSummary> {
    let ckpt = Checkpoint::load(checkpoint)?;
    let corpus = load_split(cfg, split)?;
    let (summary, _) = evaluate_checkpoint(&ckpt, &corpus, cfg)?;
    fs::create_dir_all(&cfg.out).at(&cfg.out)?;
    let path = cfg.out.join(format!("eval_{}.json", split.name()));
    fs::write(&path, serde_json::to_vec_pretty(&summary)?).at(&path)?;
    Ok(summary)
}

const PALETTE: [[f64; 3]; 6] = [
    [0.90, 0.10, 0.10],
    [0.10, 0.70, 0.20],
    [0.15, 0.35, 0.95],
    [0.95, 0.75, 0.10],
    [0.75, 0.20, 0.85],
    [0.10, 0.80, 0.85],
];

/// Writes `predictions.json` for one clip and, with `overlays`, one PNG per
/// frame with every track's mask tinted by track id.
pub fn cmd_infer(cfg: &RunConfig, checkpoint: &Path, split: Split, clip_id: &str, overlays: bool) -> Result<Vec<PredictedTrack>> {
    let ckpt = Checkpoint::load(checkpoint)?;
    let corpus = load_split(cfg, split)?;
    let clip = corpus
        .clips
        .iter()
        .find(|c| c.clip_id == clip_id)
        .ok_or_else(|| Error::InvalidArgument(format!("no clip '{clip_id}' in the {} split", split.name())))?;
    let tracks = predict_clip(&ckpt.network(), &ckpt.params, clip, cfg)?;
    fs::create_dir_all(&cfg.out).at(&cfg.out)?;
    let dump: PredictionDump = [(clip.clip_id.clone(), tracks.clone())].into();
    let path = cfg.out.join("predictions.json");
    fs::write(&path, serde_json::to_vec_pretty(&dump)?).at(&path)?;
    if overlays {
        for frame in &clip.frames {
            let mut image = frame.image.clone();
            for t in &tracks {
                let Some(rle) = t.masks.get(&frame.time_index) else { continue };
                let mask = crate::syndata::rle_decode(rle, image.height, image.width)?;
                let color = PALETTE[t.track_id % PALETTE.len()];
                for y in 0..image.height {
                    for x in 0..image.width {
                        if mask.get(y, x) {
                            let px = &mut image.data[(y * image.width + x) * 3..][..3];
                            for c in 0..3 {
                                px[c] = 0.45 * px[c] + 0.55 * color[c];
                            }
                        }
                    }
                }
            }
            let p = cfg.out.join(format!("overlay_{:04}.png", frame.time_index));
            write_png(&p, &image)?;
        }
    }
    Ok(tracks)
}

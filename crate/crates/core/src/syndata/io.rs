//! Corpus layout:
//!
//! ```text
//! <root>/manifest.json
//! <root>/<clip_id>/frame_0000.png ...
//! <root>/<clip_id>/annotations.json
//! ```

use std::fs::{self, File};
use std::io::{BufReader, BufWriter};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{rle_decode, rle_encode, Corpus, CorpusManifest, Frame, Image, InstanceAnnotation, Rle, VideoClip};
use crate::error::IoContext;
use crate::geometry::BBox;
use crate::{Error, Result};

#[derive(Serialize, Deserialize)]
struct ManifestFile {
    #[serde(flatten)]
    manifest: CorpusManifest,
    clips: Vec<ClipEntry>,
}

#[derive(Serialize, Deserialize)]
struct ClipEntry {
    clip_id: String,
    length: usize,
}

#[derive(Serialize, Deserialize)]
struct FrameAnnotations {
    time_index: usize,
    instances: Vec<InstanceRecord>,
}

#[derive(Serialize, Deserialize)]
struct InstanceRecord {
    identity: usize,
    category: usize,
    #[serde(rename = "box")]
    bbox: BBox,
    rle: Rle,
    height: usize,
    width: usize,
}

fn frame_file(t: usize) -> String {
    format!("frame_{t:04}.png")
}

pub(crate) fn write_png(path: &Path, image: &Image) -> Result<()> {
    let file = File::create(path).at(path)?;
    let mut encoder = png::Encoder::new(BufWriter::new(file), image.width as u32, image.height as u32);
    encoder.set_color(png::ColorType::Rgb);
    encoder.set_depth(png::BitDepth::Eight);
    encoder.set_compression(png::Compression::Default);
    let mut writer = encoder.write_header().map_err(|e| Error::Png(e.to_string()))?;
    let bytes: Vec<u8> = image.data.iter().map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect();
    writer.write_image_data(&bytes).map_err(|e| Error::Png(e.to_string()))?;
    Ok(())
}

fn read_png(path: &Path) -> Result<Image> {
    let file = File::open(path).at(path)?;
    let decoder = png::Decoder::new(BufReader::new(file));
    let mut reader = decoder.read_info().map_err(|e| Error::Png(e.to_string()))?;
    let mut buf = vec![0; reader.output_buffer_size()];
    let info = reader.next_frame(&mut buf).map_err(|e| Error::Png(e.to_string()))?;
    if info.color_type != png::ColorType::Rgb || info.bit_depth != png::BitDepth::Eight {
        return Err(Error::Png(format!("{}: expected 8-bit RGB", path.display())));
    }
    let data = buf[..info.buffer_size()].iter().map(|&b| b as f64 / 255.0).collect();
    Ok(Image {
        height: info.height as usize,
        width: info.width as usize,
        data,
    })
}

pub fn write_corpus(corpus: &Corpus, root: impl AsRef<Path>) -> Result<()> {
    let root = root.as_ref();
    fs::create_dir_all(root).at(root)?;
    let manifest = ManifestFile {
        manifest: corpus.manifest.clone(),
        clips: corpus
            .clips
            .iter()
            .map(|c| ClipEntry {
                clip_id: c.clip_id.clone(),
                length: c.frames.len(),
            })
            .collect(),
    };
    let path = root.join("manifest.json");
    fs::write(&path, serde_json::to_vec_pretty(&manifest)?).at(&path)?;

    for clip in &corpus.clips {
        let dir = root.join(&clip.clip_id);
        fs::create_dir_all(&dir).at(&dir)?;
        let mut records = Vec::with_capacity(clip.frames.len());
        for frame in &clip.frames {
            write_png(&dir.join(frame_file(frame.time_index)), &frame.image)?;
            records.push(FrameAnnotations {
                time_index: frame.time_index,
                instances: frame
                    .annotations
                    .iter()
                    .map(|a| InstanceRecord {
                        identity: a.identity,
                        category: a.category,
                        bbox: a.bbox,
                        rle: rle_encode(&a.mask),
                        height: a.mask.height,
                        width: a.mask.width,
                    })
                    .collect(),
            });
        }
        let path = dir.join("annotations.json");
        fs::write(&path, serde_json::to_vec(&records)?).at(&path)?;
    }
    Ok(())
}

fn read_clip(root: &Path, entry: &ClipEntry) -> Result<VideoClip> {
    let clip_err = |message: String| Error::Clip {
        clip_id: entry.clip_id.clone(),
        message,
    };
    let dir = root.join(&entry.clip_id);
    let path = dir.join("annotations.json");
    let bytes = fs::read(&path).map_err(|e| clip_err(format!("{}: {e}", path.display())))?;
    let records: Vec<FrameAnnotations> =
        serde_json::from_slice(&bytes).map_err(|e| clip_err(format!("annotations.json: {e}")))?;
    if records.len() != entry.length {
        return Err(clip_err(format!(
            "manifest lists {} frames, annotations have {}",
            entry.length,
            records.len()
        )));
    }
    let mut frames = Vec::with_capacity(records.len());
    for rec in records {
        let png_path = dir.join(frame_file(rec.time_index));
        if !png_path.exists() {
            return Err(clip_err(format!("missing frame file {}", png_path.display())));
        }
        let image = read_png(&png_path).map_err(|e| clip_err(e.to_string()))?;
        let annotations = rec
            .instances
            .into_iter()
            .map(|inst| {
                let mask = rle_decode(&inst.rle, inst.height, inst.width).map_err(|e| clip_err(e.to_string()))?;
                Ok(InstanceAnnotation {
                    identity: inst.identity,
                    category: inst.category,
                    bbox: inst.bbox,
                    mask,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        frames.push(Frame {
            time_index: rec.time_index,
            image,
            annotations,
        });
    }
    Ok(VideoClip {
        clip_id: entry.clip_id.clone(),
        frames,
    })
}

pub fn read_corpus(root: impl AsRef<Path>) -> Result<Corpus> {
    let root = root.as_ref();
    let path = root.join("manifest.json");
    let bytes = fs::read(&path).at(&path)?;
    let file: ManifestFile = serde_json::from_slice(&bytes)
        .map_err(|e| Error::InvalidManifest(format!("{}: {e}", path.display())))?;
    let clips = file
        .clips
        .iter()
        .map(|entry| read_clip(root, entry))
        .collect::<Result<Vec<_>>>()?;
    Ok(Corpus {
        manifest: file.manifest,
        clips,
    })
}

//! Synthetic video corpus: procedurally rendered shapes with persistent
//! identities, plus the on-disk corpus format.

mod generate;
mod io;
mod rle;
mod sampling;

use serde::{Deserialize, Serialize};

use crate::geometry::BBox;

pub use generate::{generate_clip, generate_corpus, render_clip, Background, ClipScript, InstanceScript};
pub use io::{read_corpus, write_corpus};
pub(crate) use io::write_png;
pub use rle::{rle_decode, rle_encode, Rle};
pub use sampling::{sample_frame_pair, sample_pair_indices, Interval};

/// Row-major binary mask.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BinaryMask {
    pub height: usize,
    pub width: usize,
    pub data: Vec<u8>,
}

impl BinaryMask {
    pub fn zeros(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            data: vec![0; height * width],
        }
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> bool) -> Self {
        let mut data = Vec::with_capacity(height * width);
        for y in 0..height {
            for x in 0..width {
                data.push(f(y, x) as u8);
            }
        }
        Self { height, width, data }
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize) -> bool {
        self.data[y * self.width + x] != 0
    }

    pub fn area(&self) -> usize {
        self.data.iter().filter(|&&v| v != 0).count()
    }

    pub fn intersection(&self, other: &Self) -> usize {
        self.data
            .iter()
            .zip(&other.data)
            .filter(|(&a, &b)| a != 0 && b != 0)
            .count()
    }

    pub fn union(&self, other: &Self) -> usize {
        self.data
            .iter()
            .zip(&other.data)
            .filter(|(&a, &b)| a != 0 || b != 0)
            .count()
    }

    /// Tight bounding box with exclusive upper corner, `None` for an empty mask.
    pub fn bbox(&self) -> Option<BBox> {
        let (mut x0, mut y0, mut x1, mut y1) = (usize::MAX, usize::MAX, 0, 0);
        for y in 0..self.height {
            for x in 0..self.width {
                if self.get(y, x) {
                    x0 = x0.min(x);
                    y0 = y0.min(y);
                    x1 = x1.max(x + 1);
                    y1 = y1.max(y + 1);
                }
            }
        }
        (x0 != usize::MAX).then(|| BBox::new(x0 as f64, y0 as f64, x1 as f64, y1 as f64))
    }
}

/// H×W×3 image, channel-interleaved, values in [0, 1].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Image {
    pub height: usize,
    pub width: usize,
    pub data: Vec<f64>,
}

impl Image {
    pub const CHANNELS: usize = 3;

    pub fn zeros(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            data: vec![0.0; height * width * Self::CHANNELS],
        }
    }

    #[inline]
    pub fn pixel(&self, y: usize, x: usize) -> [f64; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InstanceAnnotation {
    pub identity: usize,
    pub category: usize,
    pub bbox: BBox,
    pub mask: BinaryMask,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Frame {
    pub time_index: usize,
    pub image: Image,
    pub annotations: Vec<InstanceAnnotation>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct VideoClip {
    pub clip_id: String,
    pub frames: Vec<Frame>,
}

impl VideoClip {
    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn height(&self) -> usize {
        self.frames.first().map_or(0, |f| f.image.height)
    }

    pub fn width(&self) -> usize {
        self.frames.first().map_or(0, |f| f.image.width)
    }
}

/// Generation parameters plus the identity count of the generated corpus.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct CorpusManifest {
    pub num_clips: usize,
    pub clip_length: usize,
    pub height: usize,
    pub width: usize,
    pub num_categories: usize,
    pub max_instances: usize,
    pub occlusion: bool,
    pub seed: u64,
    /// Distinct identities over all clips; filled in by the generator.
    #[serde(default)]
    pub total_identities: usize,
}

impl Default for CorpusManifest {
    fn default() -> Self {
        Self {
            num_clips: 80,
            clip_length: 12,
            height: 64,
            width: 64,
            num_categories: 3,
            max_instances: 4,
            occlusion: true,
            seed: 0,
            total_identities: 0,
        }
    }
}

impl CorpusManifest {
    pub fn validate(&self) -> crate::Result<()> {
        let bad = |m: &str| Err(crate::Error::InvalidManifest(m.to_string()));
        if self.height == 0 || self.width == 0 {
            return bad("image size must be positive");
        }
        if self.height < 16 || self.width < 16 {
            return bad("image size must be at least 16x16");
        }
        if self.clip_length < 2 {
            return bad("clip_length must be at least 2");
        }
        if self.num_categories < 2 || self.num_categories > generate::MAX_CATEGORIES {
            return bad("num_categories must be in [2, 5]");
        }
        if self.max_instances == 0 {
            return bad("max_instances must be positive");
        }
        Ok(())
    }

    /// Stable content hash, used to bind checkpoints to the corpus whose
    /// identities their proxy rows index.
    pub fn content_hash(&self) -> String {
        use sha2::{Digest, Sha256};
        let bytes = serde_json::to_vec(self).expect("manifest serializes");
        let digest = Sha256::digest(bytes);
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Corpus {
    pub manifest: CorpusManifest,
    pub clips: Vec<VideoClip>,
}

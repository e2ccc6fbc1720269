use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{Frame, VideoClip};
use crate::Error;

/// Maximum frame offset between the two frames of a training pair.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "IntervalRepr", into = "IntervalRepr")]
pub enum Interval {
    Finite(usize),
    Infinite,
}

#[derive(Serialize, Deserialize)]
#[serde(untagged)]
enum IntervalRepr {
    Int(i64),
    Str(String),
}

impl TryFrom<IntervalRepr> for Interval {
    type Error = Error;

    fn try_from(r: IntervalRepr) -> Result<Self, Error> {
        match r {
            IntervalRepr::Int(v) if v >= 1 => Ok(Interval::Finite(v as usize)),
            IntervalRepr::Int(v) => Err(Error::Config(format!("interval must be >= 1, got {v}"))),
            IntervalRepr::Str(s) => s.parse(),
        }
    }
}

impl From<Interval> for IntervalRepr {
    fn from(i: Interval) -> Self {
        match i {
            Interval::Finite(v) => IntervalRepr::Int(v as i64),
            Interval::Infinite => IntervalRepr::Str("inf".into()),
        }
    }
}

impl FromStr for Interval {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self, Error> {
        match s.trim() {
            "inf" | "infinity" | "∞" => Ok(Interval::Infinite),
            other => match other.parse::<usize>() {
                Ok(v) if v >= 1 => Ok(Interval::Finite(v)),
                _ => Err(Error::Config(format!("bad interval {other:?}"))),
            },
        }
    }
}

impl fmt::Display for Interval {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Interval::Finite(v) => write!(f, "{v}"),
            Interval::Infinite => f.write_str("inf"),
        }
    }
}

/// Draws `(t, t + δ)`: `t` uniform over the clip, then `δ` uniform over the
/// offsets in `[-T, T]` that stay inside the clip. `δ = 0` is allowed.
pub fn sample_pair_indices<R: Rng + ?Sized>(len: usize, interval: Interval, rng: &mut R) -> (usize, usize) {
    assert!(len > 0, "cannot sample from an empty clip");
    let t = rng.gen_range(0..len);
    let reach = match interval {
        Interval::Finite(v) => v,
        Interval::Infinite => len,
    };
    let lo = t.saturating_sub(reach);
    let hi = (t + reach).min(len - 1);
    (t, rng.gen_range(lo..=hi))
}

pub fn sample_frame_pair<'a, R: Rng + ?Sized>(
    clip: &'a VideoClip,
    interval: Interval,
    rng: &mut R,
) -> (&'a Frame, &'a Frame) {
    let (a, b) = sample_pair_indices(clip.frames.len(), interval, rng);
    (&clip.frames[a], &clip.frames[b])
}

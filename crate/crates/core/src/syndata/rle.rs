//! Counts-based run-length encoding over row-major masks. Runs alternate
//! starting with background, so a mask that begins with foreground has a
//! leading zero-length run.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::BinaryMask;
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct Rle {
    pub counts: Vec<usize>,
}

impl fmt::Display for Rle {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (i, c) in self.counts.iter().enumerate() {
            if i > 0 {
                f.write_str(" ")?;
            }
            write!(f, "{c}")?;
        }
        Ok(())
    }
}

impl FromStr for Rle {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let counts = s
            .split_ascii_whitespace()
            .map(|tok| {
                tok.parse::<usize>()
                    .map_err(|_| Error::InvalidRle(format!("bad run length {tok:?}")))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Rle { counts })
    }
}

impl TryFrom<String> for Rle {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<Rle> for String {
    fn from(r: Rle) -> Self {
        r.to_string()
    }
}

pub fn rle_encode(mask: &BinaryMask) -> Rle {
    let mut counts = Vec::new();
    let mut current = 0u8;
    let mut run = 0usize;
    for &v in &mask.data {
        let v = (v != 0) as u8;
        if v != current {
            counts.push(run);
            run = 0;
            current = v;
        }
        run += 1;
    }
    counts.push(run);
    Rle { counts }
}

pub fn rle_decode(rle: &Rle, height: usize, width: usize) -> Result<BinaryMask> {
    let total: usize = rle.counts.iter().sum();
    if total != height * width {
        return Err(Error::InvalidRle(format!(
            "runs sum to {total}, expected {}",
            height * width
        )));
    }
    let mut data = Vec::with_capacity(total);
    for (i, &run) in rle.counts.iter().enumerate() {
        data.extend(std::iter::repeat((i % 2) as u8).take(run));
    }
    Ok(BinaryMask {
        height,
        width,
        data,
    })
}

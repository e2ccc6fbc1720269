//! Binary checkpoint: magic, a JSON header (network config, parameter
//! layout, corpus hash), then every parameter as little-endian f64.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::IoContext;
use crate::netcore::{ModelParams, NetConfig, Network, ParamLayout};
use crate::{Error, Result};

const MAGIC: &[u8; 8] = b"CRSVCKP1";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct Header {
    net: NetConfig,
    layout: ParamLayout,
    /// Hash of the corpus manifest whose identities index the proxy rows.
    manifest_hash: String,
    epoch: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub net: NetConfig,
    pub params: ModelParams,
    pub manifest_hash: String,
    pub epoch: usize,
}

impl Checkpoint {
    pub fn network(&self) -> Network {
        Network::new(self.net.clone())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = serde_json::to_vec(&Header {
            net: self.net.clone(),
            layout: self.params.layout.clone(),
            manifest_hash: self.manifest_hash.clone(),
            epoch: self.epoch,
        })?;
        let mut out = Vec::with_capacity(16 + header.len() + 8 * self.params.values.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        for v in &self.params.values {
            out.extend_from_slice(&v.to_le_bytes());
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |m: &str| Error::Checkpoint(m.to_string());
        if bytes.len() < 16 || &bytes[..8] != MAGIC {
            return Err(bad("not a checkpoint file"));
        }
        let hlen = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
        let body = bytes.get(16..16 + hlen).ok_or_else(|| bad("truncated header"))?;
        let header: Header = serde_json::from_slice(body).map_err(|e| bad(&format!("header: {e}")))?;
        let expected = Network::new(header.net.clone()).layout;
        if expected != header.layout {
            return Err(bad("parameter layout does not match the network config"));
        }
        let data = &bytes[16 + hlen..];
        if data.len() != 8 * header.layout.total {
            return Err(bad(&format!(
                "expected {} parameters, found {} bytes",
                header.layout.total,
                data.len()
            )));
        }
        let values = data.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
        Ok(Checkpoint {
            net: header.net,
            params: ModelParams {
                layout: header.layout,
                values,
            },
            manifest_hash: header.manifest_hash,
            epoch: header.epoch,
        })
    }

    /// Writes via a temporary file so an interrupted save never clobbers
    /// the previous checkpoint.
    pub fn save(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("tmp");
        let mut f = fs::File::create(&tmp).at(&tmp)?;
        f.write_all(&self.to_bytes()?).at(&tmp)?;
        f.sync_all().at(&tmp)?;
        fs::rename(&tmp, path).at(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path).at(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Checkpoint {
        let net = NetConfig {
            total_identities: 5,
            ..NetConfig::default()
        };
        let params = Network::new(net.clone()).init_params(1);
        Checkpoint {
            net,
            params,
            manifest_hash: "abc".into(),
            epoch: 3,
        }
    }

    #[test]
    fn round_trip_is_exact() {
        let c = sample();
        let back = Checkpoint::from_bytes(&c.to_bytes().unwrap()).unwrap();
        assert_eq!(back, c);
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("ck.bin");
        c.save(&p).unwrap();
        assert_eq!(Checkpoint::load(&p).unwrap(), c);
    }

    #[test]
    fn corrupt_files_are_rejected() {
        let bytes = sample().to_bytes().unwrap();
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 1]).is_err());
        assert!(Checkpoint::from_bytes(b"nonsense").is_err());
        let mut wrong = bytes.clone();
        wrong[0] = b'X';
        assert!(Checkpoint::from_bytes(&wrong).is_err());
    }
}

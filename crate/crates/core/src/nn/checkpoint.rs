//! Binary model checkpoints.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "OSNT" | format u32 | header_len u32 | header JSON | body f64s | crc32 u32
//! ```
//!
//! The header holds the network config, duration statistics, version string,
//! parameter names with shapes and the Adam step count when optimizer state
//! is present. The body holds, in order: every parameter in [`ParamId::ALL`]
//! order, running mean then running variance for each batchnorm layer, then
//! Adam first moments and second moments in parameter order if present. The
//! CRC covers every preceding byte.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::adam::AdamState;
use super::network::{Network, NetworkConfig, ParamId, ParamSet, RunningStats};
use crate::preprocess::DurationStats;
use crate::{Error, Result};

pub const MAGIC: &[u8; 4] = b"OSNT";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    config: NetworkConfig,
    duration_stats: DurationStats,
    version: String,
    params: Vec<(String, Vec<usize>)>,
    adam_steps: Option<u64>,
}

pub fn encode(net: &Network, adam: Option<&AdamState>) -> Vec<u8> {
    let header = Header {
        config: net.config().clone(),
        duration_stats: *net.duration_stats(),
        version: net.version().to_string(),
        params: net
            .params()
            .iter()
            .map(|(id, t)| (id.name().to_string(), t.shape().to_vec()))
            .collect(),
        adam_steps: adam.map(|a| a.t),
    };
    let header = serde_json::to_vec(&header).expect("header serializes");
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(header.len() as u32).to_le_bytes());
    out.extend_from_slice(&header);
    let mut put = |values: &[f64]| {
        for v in values {
            out.extend_from_slice(&v.to_le_bytes());
        }
    };
    for t in net.params().tensors() {
        put(t.data());
    }
    for r in net.running_stats() {
        put(&r.mean);
        put(&r.var);
    }
    if let Some(a) = adam {
        for t in a.m.tensors().iter().chain(a.v.tensors()) {
            put(t.data());
        }
    }
    let crc = crc32fast::hash(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::CorruptCheckpoint("unexpected end of data".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        let raw = self.take(n.checked_mul(8).ok_or_else(|| Error::CorruptCheckpoint("size overflow".into()))?)?;
        Ok(raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect())
    }
}

pub fn decode(bytes: &[u8]) -> Result<(Network, Option<AdamState>)> {
    let corrupt = |m: &str| Error::CorruptCheckpoint(m.to_string());
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4).map_err(|_| corrupt("missing magic"))? != MAGIC {
        return Err(corrupt("bad magic"));
    }
    let format = r.u32()?;
    if format != FORMAT_VERSION {
        return Err(Error::VersionUnsupported(format));
    }
    if bytes.len() < 16 {
        return Err(corrupt("file too short"));
    }
    let (content, tail) = bytes.split_at(bytes.len() - 4);
    let stored = u32::from_le_bytes(tail.try_into().expect("4 bytes"));
    if crc32fast::hash(content) != stored {
        return Err(corrupt("checksum mismatch"));
    }
    let mut r = Reader {
        bytes: content,
        pos: r.pos,
    };
    let header_len = r.u32()? as usize;
    let header: Header =
        serde_json::from_slice(r.take(header_len)?).map_err(|e| corrupt(&format!("header: {e}")))?;

    let mut params = ParamSet::zeros(&header.config).map_err(|e| corrupt(&e.to_string()))?;
    let expected: Vec<(String, Vec<usize>)> = params
        .iter()
        .map(|(id, t)| (id.name().to_string(), t.shape().to_vec()))
        .collect();
    if header.params != expected {
        return Err(corrupt("parameter layout does not match config"));
    }
    let fill = |set: &mut ParamSet, r: &mut Reader| -> Result<()> {
        for id in ParamId::ALL {
            let n = set[id].len();
            set[id].data_mut().copy_from_slice(&r.f64s(n)?);
        }
        Ok(())
    };
    fill(&mut params, &mut r)?;
    let c = &header.config;
    let mut running = Vec::with_capacity(3);
    for n in [c.conv1_filters, c.conv2_filters, c.dense_hidden] {
        running.push(RunningStats {
            mean: r.f64s(n)?,
            var: r.f64s(n)?,
        });
    }
    let adam = match header.adam_steps {
        Some(t) => {
            let mut m = params.zeros_like();
            let mut v = params.zeros_like();
            fill(&mut m, &mut r)?;
            fill(&mut v, &mut r)?;
            Some(AdamState { m, v, t })
        }
        None => None,
    };
    if r.pos != content.len() {
        return Err(corrupt("trailing bytes"));
    }
    let running: [RunningStats; 3] = running.try_into().expect("three layers");
    let net = Network::from_parts(header.config, params, running, header.duration_stats, header.version)
        .map_err(|e| corrupt(&e.to_string()))?;
    Ok((net, adam))
}

/// Writes atomically: temp file, fsync, rename.
pub fn save_checkpoint(net: &Network, adam: Option<&AdamState>, path: &Path) -> Result<()> {
    let bytes = encode(net, adam);
    let tmp = path.with_extension("tmp");
    let write = || -> std::io::Result<()> {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(&bytes)?;
        f.sync_all()?;
        fs::rename(&tmp, path)
    };
    write().map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<(Network, Option<AdamState>)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::gradcheck::random_batch;
    use crate::nn::ops::Mode;

    fn trained_net() -> (Network, AdamState) {
        let config = NetworkConfig {
            input_rows: 10,
            input_cols: 12,
            conv1_filters: 2,
            conv2_filters: 3,
            dense_hidden: 5,
            ..NetworkConfig::default()
        };
        let stats = DurationStats {
            mean: 21.5,
            std: 7.25,
            computed_over: 9,
        };
        let mut net = Network::new(config.clone(), 4, stats).unwrap();
        net.set_version("v3");
        let mut adam = AdamState::new(net.params());
        let (batch, labels) = random_batch(&config, 4, 1).unwrap();
        for step in 0..3 {
            net.forward(&batch, step).unwrap();
            let g = net.backward(&labels).unwrap();
            let hyper = crate::nn::AdamHyper::from_config(net.config());
            let mut p = net.params().clone();
            adam.step(&mut p, &g, &hyper).unwrap();
            *net.params_mut() = p;
        }
        net.set_mode(Mode::Infer);
        (net, adam)
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let (net, adam) = trained_net();
        let bytes = encode(&net, Some(&adam));
        let (back, adam_back) = decode(&bytes).unwrap();
        assert_eq!(back.params(), net.params());
        assert_eq!(back.running_stats(), net.running_stats());
        assert_eq!(back.duration_stats(), net.duration_stats());
        assert_eq!(back.version(), "v3");
        assert_eq!(adam_back.unwrap(), adam);
        assert_eq!(encode(&back, Some(&adam)), bytes);
        let (batch, _) = random_batch(net.config(), 3, 9).unwrap();
        assert_eq!(net.predict(&batch).unwrap(), back.predict(&batch).unwrap());
    }

    #[test]
    fn file_round_trip_without_adam() {
        let (net, _) = trained_net();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.osnt");
        save_checkpoint(&net, None, &path).unwrap();
        let (back, adam) = load_checkpoint(&path).unwrap();
        assert!(adam.is_none());
        assert_eq!(back.params(), net.params());
    }

    #[test]
    fn truncation_and_bit_flips_are_corrupt() {
        let (net, adam) = trained_net();
        let bytes = encode(&net, Some(&adam));
        for cut in [0, 3, 10, bytes.len() / 2, bytes.len() - 1] {
            assert!(
                matches!(decode(&bytes[..cut]), Err(Error::CorruptCheckpoint(_))),
                "cut {cut}"
            );
        }
        let mut flipped = bytes.clone();
        let mid = bytes.len() - 20;
        flipped[mid] ^= 0x10;
        assert!(matches!(decode(&flipped), Err(Error::CorruptCheckpoint(_))));
    }

    #[test]
    fn unknown_format_version() {
        let (net, _) = trained_net();
        let mut bytes = encode(&net, None);
        bytes[4..8].copy_from_slice(&99u32.to_le_bytes());
        assert!(matches!(decode(&bytes), Err(Error::VersionUnsupported(99))));
    }
}

//! "CFDS v1" dataset files: one JSON header line, then a little-endian binary
//! payload. Per sample: `K*M` association bytes (0/1), then `K*M*N` channel
//! entries as `(re, im)` f64 pairs, k-major then m then n.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::io::write_atomic;
use crate::scenario::{generate_sample, Association, ChannelSet, Sample, ScenarioConfig};
use crate::tensor::{CTensor, C64};

pub const FORMAT_VERSION: &str = "CFDS v1";
pub const DTYPE: &str = "c128";
pub const ORDERING: &str = "k-major then m then n";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Header {
    pub version: String,
    #[serde(rename = "K")]
    pub n_ues: usize,
    #[serde(rename = "M")]
    pub n_aps: usize,
    #[serde(rename = "N")]
    pub n_antennas: usize,
    #[serde(rename = "P")]
    pub power: f64,
    pub noise_power: f64,
    pub count: usize,
    pub dtype: String,
    pub ordering: String,
}

impl Header {
    fn sample_bytes(&self) -> usize {
        let km = self.n_ues * self.n_aps;
        km + km * self.n_antennas * 16
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub n_ues: usize,
    pub n_aps: usize,
    pub n_antennas: usize,
    pub power: f64,
    pub noise_power: f64,
    pub samples: Vec<Sample>,
}

/// Generation parameters written next to a dataset file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScenarioSidecar {
    pub scenario: ScenarioConfig,
    pub seed: u64,
    pub count: usize,
    pub noise_power: f64,
    pub digest: String,
}

fn format_err(detail: impl Into<String>) -> Error {
    Error::Format {
        what: "dataset",
        detail: detail.into(),
    }
}

impl Dataset {
    /// Samples `0..count` of the stream seeded by `seed`.
    pub fn generate(config: &ScenarioConfig, seed: u64, count: usize) -> Self {
        let samples = (0..count as u64)
            .map(|i| generate_sample(config, seed, i))
            .collect();
        Self {
            n_ues: config.n_ues,
            n_aps: config.n_aps,
            n_antennas: config.n_antennas,
            power: config.power,
            noise_power: config.noise_power(),
            samples,
        }
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn header(&self) -> Header {
        Header {
            version: FORMAT_VERSION.into(),
            n_ues: self.n_ues,
            n_aps: self.n_aps,
            n_antennas: self.n_antennas,
            power: self.power,
            noise_power: self.noise_power,
            count: self.samples.len(),
            dtype: DTYPE.into(),
            ordering: ORDERING.into(),
        }
    }

    /// Subset of samples, in the given order.
    pub fn subset(&self, indices: &[usize]) -> Self {
        Self {
            samples: indices.iter().map(|&i| self.samples[i].clone()).collect(),
            ..self.clone_meta()
        }
    }

    fn clone_meta(&self) -> Self {
        Self {
            n_ues: self.n_ues,
            n_aps: self.n_aps,
            n_antennas: self.n_antennas,
            power: self.power,
            noise_power: self.noise_power,
            samples: Vec::new(),
        }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = self.header();
        let mut out = serde_json::to_vec(&header)?;
        out.push(b'\n');
        out.reserve(header.sample_bytes() * header.count);
        let shape = [self.n_ues, self.n_aps, self.n_antennas];
        for s in &self.samples {
            if s.channels.tensor().shape() != shape {
                return Err(Error::Shape(format!(
                    "sample of shape {:?} in a {shape:?} dataset",
                    s.channels.tensor().shape()
                )));
            }
            out.extend_from_slice(s.assoc.bits());
            for z in s.channels.tensor().data() {
                out.extend_from_slice(&z.re.to_le_bytes());
                out.extend_from_slice(&z.im.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let nl = bytes
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| format_err("missing header line"))?;
        let header: Header = serde_json::from_slice(&bytes[..nl])?;
        if header.version != FORMAT_VERSION || header.dtype != DTYPE || header.ordering != ORDERING
        {
            return Err(format_err(format!(
                "unsupported header {} / {} / {}",
                header.version, header.dtype, header.ordering
            )));
        }
        let payload = &bytes[nl + 1..];
        let per = header.sample_bytes();
        if payload.len() != per * header.count {
            return Err(format_err(format!(
                "payload has {} bytes, expected {}",
                payload.len(),
                per * header.count
            )));
        }
        let (k, m, n) = (header.n_ues, header.n_aps, header.n_antennas);
        let samples = payload
            .chunks_exact(per.max(1))
            .take(header.count)
            .map(|chunk| {
                let bits = chunk[..k * m].to_vec();
                if bits.iter().any(|&b| b > 1) {
                    return Err(format_err("association byte is not 0/1"));
                }
                let data = chunk[k * m..]
                    .chunks_exact(16)
                    .map(|p| {
                        let re = f64::from_le_bytes(p[..8].try_into().unwrap());
                        let im = f64::from_le_bytes(p[8..].try_into().unwrap());
                        C64::new(re, im)
                    })
                    .collect();
                Ok(Sample {
                    assoc: Association::new(k, m, bits),
                    channels: ChannelSet::new(CTensor::from_vec(&[k, m, n], data)),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            n_ues: k,
            n_aps: m,
            n_antennas: n,
            power: header.power,
            noise_power: header.noise_power,
            samples,
        })
    }

    /// Hex SHA-256 of the serialized file.
    pub fn digest(&self) -> Result<String> {
        Ok(digest_bytes(&self.to_bytes()?))
    }

    pub fn write(&self, path: &Path) -> Result<String> {
        let bytes = self.to_bytes()?;
        write_atomic(path, &bytes)?;
        Ok(digest_bytes(&bytes))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

pub fn digest_bytes(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

impl ScenarioSidecar {
    pub fn write(&self, path: &Path) -> Result<()> {
        write_atomic(path, serde_json::to_string_pretty(self)?.as_bytes())
    }

    pub fn read(path: &Path) -> Result<Self> {
        Ok(serde_json::from_str(&crate::io::read_to_string(path)?)?)
    }
}

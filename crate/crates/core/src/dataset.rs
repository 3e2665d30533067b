//! Channel datasets and their on-disk containers.
//!
//! Binary layout (all integers and floats little-endian):
//!
//! ```text
//! magic        8 bytes  "WSRMDS01"
//! n            u32      antennas
//! k            u32      UEs
//! seed         u64
//! count        u64      number of samples
//! snr_edge_db  f64
//! geometry     4 x f64  cell_radius_m, min_distance_m, pathloss_1m_db, pathloss_exponent_coeff
//! per sample:
//!   noise_power    f64
//!   power_budget   f64
//!   distances      k x f64
//!   alpha          k x f64
//!   h              2nk x f64, column-major, interleaved (re, im)
//! ```
//!
//! The JSON-lines variant carries the same fields: one header object followed
//! by one object per sample, with `h` flattened the same way.

use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::channel::{sample_channel, ChannelRealization, Geometry};
use crate::error::{Error, Result};
use crate::linalg::{CMat, C64};
use crate::train::{sample_training_weights, WeightLaw};

const MAGIC: &[u8; 8] = b"WSRMDS01";
const JSONL_FORMAT: &str = "wsrm-dataset";
const JSONL_VERSION: u32 = 1;

/// One training or test instance: a channel realization plus UE weights.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub channel: ChannelRealization,
    pub alpha: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetSpec {
    pub n: usize,
    pub k: usize,
    pub count: usize,
    pub seed: u64,
    pub snr_edge_db: f64,
    #[serde(default = "default_power")]
    pub power_budget: f64,
    #[serde(default)]
    pub geometry: Geometry,
    #[serde(default)]
    pub weights: WeightLaw,
}

fn default_power() -> f64 {
    1.0
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub n: usize,
    pub k: usize,
    pub seed: u64,
    pub snr_edge_db: f64,
    pub geometry: Geometry,
    pub samples: Vec<Sample>,
}

/// Draw `spec.count` samples; UE positions are redrawn for every sample.
pub fn generate(spec: &DatasetSpec) -> Result<Dataset> {
    spec.geometry.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut samples = Vec::with_capacity(spec.count);
    for _ in 0..spec.count {
        let channel = sample_channel(&mut rng, spec.n, spec.k, &spec.geometry, spec.snr_edge_db, spec.power_budget)?;
        let alpha = sample_training_weights(&mut rng, spec.k, &spec.weights)?.into_inner();
        samples.push(Sample { channel, alpha });
    }
    Ok(Dataset {
        n: spec.n,
        k: spec.k,
        seed: spec.seed,
        snr_edge_db: spec.snr_edge_db,
        geometry: spec.geometry,
        samples,
    })
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Split off the last `count` samples.
    pub fn split_tail(mut self, count: usize) -> Result<(Dataset, Dataset)> {
        if count > self.samples.len() {
            return Err(Error::Domain(format!("cannot hold out {count} of {} samples", self.samples.len())));
        }
        let tail = self.samples.split_off(self.samples.len() - count);
        let held = Dataset { samples: tail, ..self.clone() };
        Ok((self, held))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(self.n as u32).to_le_bytes());
        out.extend_from_slice(&(self.k as u32).to_le_bytes());
        out.extend_from_slice(&self.seed.to_le_bytes());
        out.extend_from_slice(&(self.samples.len() as u64).to_le_bytes());
        let g = &self.geometry;
        for x in [self.snr_edge_db, g.cell_radius_m, g.min_distance_m, g.pathloss_1m_db, g.pathloss_exponent_coeff] {
            out.extend_from_slice(&x.to_le_bytes());
        }
        for s in &self.samples {
            let c = &s.channel;
            out.extend_from_slice(&c.noise_power.to_le_bytes());
            out.extend_from_slice(&c.power_budget.to_le_bytes());
            for x in c.ue_distances_m.iter().chain(&s.alpha) {
                out.extend_from_slice(&x.to_le_bytes());
            }
            for z in c.h.iter() {
                out.extend_from_slice(&z.re.to_le_bytes());
                out.extend_from_slice(&z.im.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = ByteReader { buf: bytes, pos: 0 };
        if r.take(8)? != MAGIC {
            return Err(Error::Format("not a dataset file (bad magic)".into()));
        }
        let n = r.u32()? as usize;
        let k = r.u32()? as usize;
        let seed = r.u64()?;
        let count = r.u64()? as usize;
        let snr_edge_db = r.f64()?;
        let geometry = Geometry {
            cell_radius_m: r.f64()?,
            min_distance_m: r.f64()?,
            pathloss_1m_db: r.f64()?,
            pathloss_exponent_coeff: r.f64()?,
        };
        let mut samples = Vec::with_capacity(count);
        for _ in 0..count {
            let noise_power = r.f64()?;
            let power_budget = r.f64()?;
            let distances = (0..k).map(|_| r.f64()).collect::<Result<Vec<_>>>()?;
            let alpha = (0..k).map(|_| r.f64()).collect::<Result<Vec<_>>>()?;
            let flat = (0..2 * n * k).map(|_| r.f64()).collect::<Result<Vec<_>>>()?;
            samples.push(Sample { channel: ChannelRealization::new(unflatten(&flat, n, k), noise_power, power_budget, distances)?, alpha });
        }
        if r.pos != bytes.len() {
            return Err(Error::Format(format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        Ok(Self { n, k, seed, snr_edge_db, geometry, samples })
    }

    pub fn write_binary(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(std::fs::File::create(path)?);
        w.write_all(&self.to_bytes())?;
        w.flush()?;
        Ok(())
    }

    pub fn read_binary(path: &Path) -> Result<Self> {
        let mut buf = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut buf)?;
        Self::from_bytes(&buf)
    }

    pub fn write_jsonl(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(std::fs::File::create(path)?);
        let header = JsonlHeader {
            format: JSONL_FORMAT.into(),
            version: JSONL_VERSION,
            n: self.n,
            k: self.k,
            seed: self.seed,
            count: self.samples.len(),
            snr_edge_db: self.snr_edge_db,
            geometry: self.geometry,
        };
        serde_json::to_writer(&mut w, &header)?;
        w.write_all(b"\n")?;
        for s in &self.samples {
            let row = JsonlSample {
                noise_power: s.channel.noise_power,
                power_budget: s.channel.power_budget,
                ue_distances_m: s.channel.ue_distances_m.clone(),
                alpha: s.alpha.clone(),
                h: flatten(&s.channel.h),
            };
            serde_json::to_writer(&mut w, &row)?;
            w.write_all(b"\n")?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_jsonl(path: &Path) -> Result<Self> {
        let mut lines = BufReader::new(std::fs::File::open(path)?).lines();
        let first = lines.next().ok_or_else(|| Error::Format("empty dataset file".into()))??;
        let header: JsonlHeader = serde_json::from_str(&first)?;
        if header.format != JSONL_FORMAT || header.version != JSONL_VERSION {
            return Err(Error::Format(format!("unsupported dataset {} v{}", header.format, header.version)));
        }
        let mut samples = Vec::with_capacity(header.count);
        for line in lines {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let row: JsonlSample = serde_json::from_str(&line)?;
            if row.h.len() != 2 * header.n * header.k {
                return Err(Error::Format(format!("sample has {} channel values", row.h.len())));
            }
            let h = unflatten(&row.h, header.n, header.k);
            samples.push(Sample {
                channel: ChannelRealization::new(h, row.noise_power, row.power_budget, row.ue_distances_m)?,
                alpha: row.alpha,
            });
        }
        if samples.len() != header.count {
            return Err(Error::Format(format!("header says {} samples, found {}", header.count, samples.len())));
        }
        Ok(Self {
            n: header.n,
            k: header.k,
            seed: header.seed,
            snr_edge_db: header.snr_edge_db,
            geometry: header.geometry,
            samples,
        })
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct JsonlHeader {
    format: String,
    version: u32,
    n: usize,
    k: usize,
    seed: u64,
    count: usize,
    snr_edge_db: f64,
    geometry: Geometry,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct JsonlSample {
    noise_power: f64,
    power_budget: f64,
    ue_distances_m: Vec<f64>,
    alpha: Vec<f64>,
    h: Vec<f64>,
}

fn flatten(h: &CMat) -> Vec<f64> {
    h.iter().flat_map(|z| [z.re, z.im]).collect()
}

fn unflatten(flat: &[f64], n: usize, k: usize) -> CMat {
    let values: Vec<C64> = flat.chunks_exact(2).map(|p| C64::new(p[0], p[1])).collect();
    CMat::from_column_slice(n, k, &values)
}

struct ByteReader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> ByteReader<'a> {
    fn take(&mut self, len: usize) -> Result<&'a [u8]> {
        let end = self.pos + len;
        if end > self.buf.len() {
            return Err(Error::Format("unexpected end of dataset".into()));
        }
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

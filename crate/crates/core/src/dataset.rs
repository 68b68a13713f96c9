//! Simulated measurement sets and their on-disk format.
//!
//! A dataset file is one JSON header line followed by little-endian
//! records `[ue_x f64, ue_y f64, delta (I-1) x f64, k (I-1) x i32]`.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::channel::{simulate_sample, ChannelOptions, LinkBudget};
use crate::scenario::{sample_ue, Scenario};
use crate::{CoreError, Result};

pub const FORMAT_NAME: &str = "phasepos-dataset";
pub const FORMAT_VERSION: u32 = 1;

/// Samples drawn from one random stream.
pub const CHUNK_SIZE: usize = 1024;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetHeader {
    pub format: String,
    pub version: u32,
    pub scenario_hash: String,
    pub power_dbm: f64,
    pub budget: LinkBudget,
    pub channel: ChannelOptions,
    pub split: String,
    pub seed: u64,
    pub count: usize,
    pub pairs: usize,
    /// Labels that fell one step outside their bound and were clamped.
    pub clamped_labels: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub header: DatasetHeader,
    /// `(count, 2)` UE positions.
    pub ue: Array2<f64>,
    /// `(count, I-1)` differential measurements, meters.
    pub delta: Array2<f64>,
    /// `(count, I-1)` true ambiguities.
    pub k: Array2<i32>,
}

/// Deterministic sub-seed for a named stream.
pub fn derive_seed(base: u64, label: &str) -> u64 {
    let mut h = Sha256::new();
    h.update(base.to_le_bytes());
    h.update(label.as_bytes());
    let d = h.finalize();
    u64::from_le_bytes(d[..8].try_into().expect("8 bytes"))
}

/// Simulates `count` independent samples. Chunk `c` of [`CHUNK_SIZE`]
/// samples uses stream `c` of a generator seeded with `seed`, so the output
/// does not depend on the number of worker threads.
pub fn generate(
    scenario: &Scenario,
    power_dbm: f64,
    count: usize,
    seed: u64,
    split: &str,
    channel: &ChannelOptions,
) -> Result<Dataset> {
    if count == 0 {
        return Err(CoreError::config("count", "dataset must have at least one sample"));
    }
    let budget = LinkBudget::from_dbm(power_dbm)?;
    let pairs = scenario.pair_count();
    let chunks: Vec<Vec<(Vec<f64>, Vec<f64>, Vec<i32>, usize)>> = (0..count.div_ceil(CHUNK_SIZE))
        .into_par_iter()
        .map(|c| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(c as u64);
            let n = CHUNK_SIZE.min(count - c * CHUNK_SIZE);
            (0..n)
                .map(|_| {
                    let ue = sample_ue(scenario, &mut rng)?;
                    let s = simulate_sample(scenario, &budget, ue, channel, &mut rng)?;
                    Ok((ue.to_vec(), s.differentials, s.true_k, s.clamped))
                })
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<Vec<_>>>()?;
    let mut ue = Vec::with_capacity(2 * count);
    let mut delta = Vec::with_capacity(pairs * count);
    let mut k = Vec::with_capacity(pairs * count);
    let mut clamped = 0;
    for (u, d, kk, c) in chunks.into_iter().flatten() {
        ue.extend(u);
        delta.extend(d);
        k.extend(kk);
        clamped += c;
    }
    Ok(Dataset {
        header: DatasetHeader {
            format: FORMAT_NAME.into(),
            version: FORMAT_VERSION,
            scenario_hash: scenario.hash(),
            power_dbm,
            budget,
            channel: *channel,
            split: split.into(),
            seed,
            count,
            pairs,
            clamped_labels: clamped,
        },
        ue: Array2::from_shape_vec((count, 2), ue).expect("sized"),
        delta: Array2::from_shape_vec((count, pairs), delta).expect("sized"),
        k: Array2::from_shape_vec((count, pairs), k).expect("sized"),
    })
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.header.count
    }

    pub fn is_empty(&self) -> bool {
        self.header.count == 0
    }

    pub fn check_scenario(&self, scenario: &Scenario) -> Result<()> {
        let h = scenario.hash();
        if self.header.scenario_hash != h {
            return Err(CoreError::HashMismatch {
                expected: h,
                found: self.header.scenario_hash.clone(),
            });
        }
        Ok(())
    }

    /// Class indices `k + q` for the ambiguity heads.
    pub fn class_labels(&self, q: &[u32]) -> Result<Array2<usize>> {
        let mut out = Array2::zeros(self.k.dim());
        for ((i, m), &k) in self.k.indexed_iter() {
            let idx = k as i64 + q[m] as i64;
            if idx < 0 || idx > 2 * q[m] as i64 {
                return Err(CoreError::Data(format!("label {k} outside [-{0}, {0}] at row {i}", q[m])));
            }
            out[[i, m]] = idx as usize;
        }
        Ok(out)
    }

    pub fn write<W: Write>(&self, w: &mut W) -> Result<()> {
        serde_json::to_writer(&mut *w, &self.header)?;
        w.write_all(b"\n").map_err(|e| CoreError::io("<dataset>", e))?;
        let mut buf = Vec::with_capacity(16 + 12 * self.header.pairs);
        for i in 0..self.len() {
            buf.clear();
            for v in self.ue.row(i).iter().chain(self.delta.row(i).iter()) {
                buf.extend_from_slice(&v.to_le_bytes());
            }
            for v in self.k.row(i) {
                buf.extend_from_slice(&v.to_le_bytes());
            }
            w.write_all(&buf).map_err(|e| CoreError::io("<dataset>", e))?;
        }
        Ok(())
    }

    pub fn read<R: BufRead>(r: &mut R) -> Result<Self> {
        let io = |e| CoreError::io("<dataset>", e);
        let mut line = String::new();
        r.read_line(&mut line).map_err(io)?;
        let header: DatasetHeader = serde_json::from_str(line.trim_end())?;
        if header.format != FORMAT_NAME || header.version != FORMAT_VERSION {
            return Err(CoreError::Data(format!(
                "unsupported dataset format {} v{}",
                header.format, header.version
            )));
        }
        let (n, p) = (header.count, header.pairs);
        let mut rec = vec![0u8; 16 + 12 * p];
        let mut ue = Vec::with_capacity(2 * n);
        let mut delta = Vec::with_capacity(p * n);
        let mut k = Vec::with_capacity(p * n);
        for _ in 0..n {
            r.read_exact(&mut rec).map_err(|e| CoreError::Data(format!("truncated dataset body: {e}")))?;
            let f = |j: usize| f64::from_le_bytes(rec[8 * j..8 * j + 8].try_into().expect("8 bytes"));
            ue.extend([f(0), f(1)]);
            delta.extend((0..p).map(|m| f(2 + m)));
            let base = 16 + 8 * p;
            k.extend((0..p).map(|m| i32::from_le_bytes(rec[base + 4 * m..base + 4 * m + 4].try_into().expect("4 bytes"))));
        }
        let mut rest = [0u8; 1];
        if r.read(&mut rest).map_err(io)? != 0 {
            return Err(CoreError::Data("trailing bytes after dataset body".into()));
        }
        Ok(Dataset {
            header,
            ue: Array2::from_shape_vec((n, 2), ue).expect("sized"),
            delta: Array2::from_shape_vec((n, p), delta).expect("sized"),
            k: Array2::from_shape_vec((n, p), k).expect("sized"),
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let f = File::create(path).map_err(|e| CoreError::io(path, e))?;
        let mut w = BufWriter::new(f);
        self.write(&mut w)?;
        w.flush().map_err(|e| CoreError::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let f = File::open(path).map_err(|e| CoreError::io(path, e))?;
        Dataset::read(&mut BufReader::new(f)).map_err(|e| match e {
            CoreError::Io { source, .. } => CoreError::io(path, source),
            CoreError::Data(m) => CoreError::Data(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    /// Writes one CSV row per sample: `ue_x, ue_y, delta_1.., k_1..`.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
        let p = self.header.pairs;
        let mut head = vec!["ue_x".to_string(), "ue_y".to_string()];
        head.extend((1..=p).map(|m| format!("delta_{m}")));
        head.extend((1..=p).map(|m| format!("k_{m}")));
        w.write_record(&head).map_err(|e| csv_err(path, e))?;
        for i in 0..self.len() {
            let row: Vec<String> = self
                .ue
                .row(i)
                .iter()
                .chain(self.delta.row(i).iter())
                .map(|v| v.to_string())
                .chain(self.k.row(i).iter().map(|v| v.to_string()))
                .collect();
            w.write_record(&row).map_err(|e| csv_err(path, e))?;
        }
        w.flush().map_err(|e| CoreError::io(path, e))
    }
}

pub(crate) fn csv_err(path: &Path, e: csv::Error) -> CoreError {
    CoreError::io(path, std::io::Error::other(e))
}

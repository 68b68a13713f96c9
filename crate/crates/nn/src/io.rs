//! Weights file format.
//!
//! One line of JSON ([`WeightsHeader`]) terminated by `\n`, followed by a
//! little-endian binary body. For each parameter block in canonical order:
//! `rows * cols` f64 weights (row-major), `cols` f64 biases, and the mask as
//! a bitset of `ceil(rows * cols / 8)` bytes (LSB first, bit set = live).
//! When the header says `optimizer: true`, the body continues with the Adam
//! step counter (u64) and, per block, the first and second weight moments
//! followed by the first and second bias moments (f64).

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};

use crate::{Adam, AdamConfig, EpochRecord, Network, NetworkSpec, NnError, ParamBlock, Result, Scalar, TrainConfig, TrainerState};

pub const FORMAT_NAME: &str = "phasepos-weights";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WeightsHeader {
    pub format: String,
    pub version: u32,
    pub spec: NetworkSpec,
    pub seed: u64,
    pub train_config: Option<TrainConfig>,
    /// Number of completed epochs.
    pub epoch: usize,
    pub blocks: Vec<(usize, usize)>,
    pub optimizer: Option<AdamConfig>,
    #[serde(default)]
    pub history: Vec<EpochRecord>,
    /// Free-form provenance (scenario hash, model kind, ...).
    #[serde(default)]
    pub meta: serde_json::Value,
}

impl WeightsHeader {
    pub fn new<T: Scalar>(net: &Network<T>, seed: u64) -> Self {
        WeightsHeader {
            format: FORMAT_NAME.into(),
            version: FORMAT_VERSION,
            spec: net.spec().clone(),
            seed,
            train_config: None,
            epoch: 0,
            blocks: net.params.iter().map(|p| p.weight.dim()).collect(),
            optimizer: None,
            history: Vec::new(),
            meta: serde_json::Value::Null,
        }
    }
}

fn put_f64s<W: Write>(w: &mut W, vals: impl Iterator<Item = f64>) -> Result<()> {
    for v in vals {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

fn get_f64s<R: Read>(r: &mut R, n: usize) -> Result<Vec<f64>> {
    let mut buf = vec![0u8; n * 8];
    r.read_exact(&mut buf)?;
    Ok(buf
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect())
}

fn mat<T: Scalar>(vals: Vec<f64>, rows: usize, cols: usize) -> Array2<T> {
    Array2::from_shape_vec((rows, cols), vals.into_iter().map(T::of_f64).collect()).expect("sized")
}

fn vec1<T: Scalar>(vals: Vec<f64>) -> Array1<T> {
    Array1::from_iter(vals.into_iter().map(T::of_f64))
}

/// Writes header and parameters, plus optimizer moments when given.
pub fn write_weights<T: Scalar, W: Write>(
    w: &mut W,
    header: &WeightsHeader,
    net: &Network<T>,
    optimizer: Option<&Adam<T>>,
) -> Result<()> {
    let mut header = header.clone();
    header.blocks = net.params.iter().map(|p| p.weight.dim()).collect();
    header.spec = net.spec().clone();
    header.optimizer = optimizer.map(|o| o.config);
    serde_json::to_writer(&mut *w, &header)?;
    w.write_all(b"\n")?;
    for p in &net.params {
        put_f64s(w, p.weight.iter().map(|v| v.as_f64()))?;
        put_f64s(w, p.bias.iter().map(|v| v.as_f64()))?;
        let mut bits = vec![0u8; p.mask.len().div_ceil(8)];
        for (i, &m) in p.mask.iter().enumerate() {
            if m != T::zero() {
                bits[i / 8] |= 1 << (i % 8);
            }
        }
        w.write_all(&bits)?;
    }
    if let Some(opt) = optimizer {
        w.write_all(&opt.step.to_le_bytes())?;
        for i in 0..net.params.len() {
            put_f64s(w, opt.m_weights[i].iter().map(|v| v.as_f64()))?;
            put_f64s(w, opt.v_weights[i].iter().map(|v| v.as_f64()))?;
            put_f64s(w, opt.m_biases[i].iter().map(|v| v.as_f64()))?;
            put_f64s(w, opt.v_biases[i].iter().map(|v| v.as_f64()))?;
        }
    }
    Ok(())
}

/// Reads a weights stream written by [`write_weights`].
pub fn read_weights<T: Scalar, R: BufRead>(r: &mut R) -> Result<(WeightsHeader, Network<T>, Option<Adam<T>>)> {
    let mut line = String::new();
    r.read_line(&mut line)?;
    let header: WeightsHeader = serde_json::from_str(line.trim_end())?;
    if header.format != FORMAT_NAME || header.version != FORMAT_VERSION {
        return Err(NnError::Format(format!(
            "unsupported format {} v{}",
            header.format, header.version
        )));
    }
    let mut params = Vec::with_capacity(header.blocks.len());
    for &(rows, cols) in &header.blocks {
        let weight = mat(get_f64s(r, rows * cols)?, rows, cols);
        let bias = vec1(get_f64s(r, cols)?);
        let mut bits = vec![0u8; (rows * cols).div_ceil(8)];
        r.read_exact(&mut bits)?;
        let mask = Array2::from_shape_fn((rows, cols), |(i, j)| {
            let k = i * cols + j;
            if bits[k / 8] >> (k % 8) & 1 == 1 {
                T::one()
            } else {
                T::zero()
            }
        });
        params.push(ParamBlock { weight, bias, mask });
    }
    let net = Network::from_params(header.spec.clone(), params)?;
    let optimizer = match header.optimizer {
        None => None,
        Some(config) => {
            let mut step = [0u8; 8];
            r.read_exact(&mut step)?;
            let mut opt = Adam::new(&net, config);
            opt.step = u64::from_le_bytes(step);
            for (i, &(rows, cols)) in header.blocks.iter().enumerate() {
                opt.m_weights[i] = mat(get_f64s(r, rows * cols)?, rows, cols);
                opt.v_weights[i] = mat(get_f64s(r, rows * cols)?, rows, cols);
                opt.m_biases[i] = vec1(get_f64s(r, cols)?);
                opt.v_biases[i] = vec1(get_f64s(r, cols)?);
            }
            Some(opt)
        }
    };
    let mut rest = [0u8; 1];
    if r.read(&mut rest)? != 0 {
        return Err(NnError::Format("trailing bytes after weights body".into()));
    }
    Ok((header, net, optimizer))
}

pub fn save_network<T: Scalar>(path: &Path, header: &WeightsHeader, net: &Network<T>) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_weights(&mut w, header, net, None)?;
    w.flush()?;
    Ok(())
}

pub fn load_network<T: Scalar>(path: &Path) -> Result<(WeightsHeader, Network<T>)> {
    let mut r = BufReader::new(File::open(path)?);
    let (h, net, _) = read_weights(&mut r)?;
    Ok((h, net))
}

/// Saves a resumable training state. The file is written to a temporary
/// sibling first and renamed, so an interrupted save never leaves a torn
/// checkpoint behind.
pub fn save_checkpoint<T: Scalar>(path: &Path, header: &WeightsHeader, state: &TrainerState<T>) -> Result<()> {
    let mut header = header.clone();
    header.epoch = state.next_epoch;
    header.history = state.history.clone();
    let tmp = path.with_extension("tmp");
    {
        let mut w = BufWriter::new(File::create(&tmp)?);
        write_weights(&mut w, &header, &state.network, Some(&state.optimizer))?;
        w.flush()?;
    }
    std::fs::rename(&tmp, path)?;
    Ok(())
}

pub fn load_checkpoint<T: Scalar>(path: &Path) -> Result<(WeightsHeader, TrainerState<T>)> {
    let mut r = BufReader::new(File::open(path)?);
    let (header, network, optimizer) = read_weights(&mut r)?;
    let optimizer = optimizer.ok_or_else(|| NnError::Format("checkpoint lacks optimizer state".into()))?;
    let state = TrainerState {
        network,
        optimizer,
        next_epoch: header.epoch,
        history: header.history.clone(),
    };
    Ok((header, state))
}

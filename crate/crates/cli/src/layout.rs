//! File layout of a run directory.

use std::path::{Path, PathBuf};

use phasepos::models::ModelKind;

pub const SPLITS: [&str; 3] = ["train", "val", "test"];

/// `800MHz`, `1800MHz`, `2437.5MHz`.
pub fn freq_tag(carrier_frequency: f64) -> String {
    format!("{}MHz", carrier_frequency / 1e6)
}

/// `p0dBm`, `p-30dBm`.
pub fn power_tag(power_dbm: f64) -> String {
    format!("p{power_dbm}dBm")
}

#[derive(Clone, Debug)]
pub struct Layout {
    pub root: PathBuf,
}

impl Layout {
    pub fn new(root: &Path) -> Self {
        Layout { root: root.to_path_buf() }
    }

    pub fn scenario(&self, f: f64) -> PathBuf {
        self.root.join("scenarios").join(format!("{}.json", freq_tag(f)))
    }

    pub fn dataset(&self, f: f64, p: f64, split: &str) -> PathBuf {
        self.root
            .join("data")
            .join(freq_tag(f))
            .join(power_tag(p))
            .join(format!("{split}.bin"))
    }

    pub fn bundle(&self, f: f64, p: f64) -> PathBuf {
        self.root.join("bundles").join(freq_tag(f)).join(power_tag(p))
    }

    pub fn checkpoint(&self, f: f64, p: f64, kind: ModelKind) -> PathBuf {
        self.root
            .join("checkpoints")
            .join(freq_tag(f))
            .join(power_tag(p))
            .join(format!("{}.ckpt", kind.name()))
    }

    pub fn loss_history(&self, f: f64, p: f64, kind: ModelKind) -> PathBuf {
        self.reports()
            .join("loss")
            .join(format!("{}_{}_{}.csv", freq_tag(f), power_tag(p), kind.name()))
    }

    pub fn reports(&self) -> PathBuf {
        self.root.join("reports")
    }
}

//! The three estimators: direct MLP positioner, ambiguity estimator and
//! ambiguity-aided CNN positioner.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use ndarray::{s, Array2, ArrayView2, Axis};
use phasepos_nn::io::{load_network, save_network, WeightsHeader};
use phasepos_nn::{flop_count, Activation, LayerSpec, Loss, Network, NetworkSpec, Targets, TrainData};
use serde::{Deserialize, Serialize};

use crate::dataset::Dataset;
use crate::scenario::Scenario;
use crate::{CoreError, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelHyperparams {
    pub a: usize,
    pub b: usize,
    pub c: usize,
    pub d: usize,
}

impl Default for ModelHyperparams {
    fn default() -> Self {
        ModelHyperparams {
            a: 128,
            b: 128,
            c: 32,
            d: 128,
        }
    }
}

impl ModelHyperparams {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("a", self.a), ("b", self.b), ("c", self.c), ("d", self.d)] {
            if v == 0 {
                return Err(CoreError::config("hyperparams", format!("{name} must be positive")));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    Mlp,
    Ae,
    Cnn,
}

impl ModelKind {
    pub const ALL: [ModelKind; 3] = [ModelKind::Mlp, ModelKind::Ae, ModelKind::Cnn];

    pub fn name(self) -> &'static str {
        match self {
            ModelKind::Mlp => "mlp",
            ModelKind::Ae => "ae",
            ModelKind::Cnn => "cnn",
        }
    }
}

impl std::str::FromStr for ModelKind {
    type Err = CoreError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mlp" => Ok(ModelKind::Mlp),
            "ae" => Ok(ModelKind::Ae),
            "cnn" => Ok(ModelKind::Cnn),
            other => Err(CoreError::config("model", format!("unknown model kind {other:?}"))),
        }
    }
}

/// Default pruning sparsity of each model. The ambiguity estimator is
/// left dense at carrier frequencies above 1 GHz.
pub fn default_sparsity(kind: ModelKind, carrier_frequency: f64) -> f64 {
    match kind {
        ModelKind::Mlp => 0.5,
        ModelKind::Ae if carrier_frequency > 1e9 => 0.0,
        ModelKind::Ae => 0.5,
        ModelKind::Cnn => 0.75,
    }
}

/// Dense chain `(I-1) -> A -> 2A -> 4A -> 8A -> 4A -> 2A -> A -> 2`.
///
/// The input projection and the output layer are excluded from the
/// closed-form FLOP figure, which covers the hidden chain only.
pub fn build_mlp_positioner(a: usize, ap_count: usize) -> NetworkSpec {
    let widths = [ap_count - 1, a, 2 * a, 4 * a, 8 * a, 4 * a, 2 * a, a];
    let mut layers: Vec<LayerSpec> = widths
        .windows(2)
        .map(|w| LayerSpec::dense(w[0], w[1], Activation::Relu))
        .collect();
    layers[0] = layers[0].clone().neglected();
    layers.push(LayerSpec::dense(a, 2, Activation::Linear).neglected());
    NetworkSpec {
        input_dim: ap_count - 1,
        layers,
        loss: Loss::Mse,
    }
}

/// Shared trunk `(I-1) -> 2B -> 4B -> 2B`, then one head per AP pair,
/// `2B -> B -> (2 q_m + 1)` with softmax.
pub fn build_ambiguity_estimator(b: usize, ap_count: usize, q: &[u32]) -> NetworkSpec {
    let heads: Vec<usize> = q.iter().map(|&qm| 2 * qm as usize + 1).collect();
    build_ambiguity_estimator_with_heads(b, ap_count, &heads)
}

/// Ambiguity estimator with arbitrary head widths.
pub fn build_ambiguity_estimator_with_heads(b: usize, ap_count: usize, heads: &[usize]) -> NetworkSpec {
    let branches = heads
        .iter()
        .map(|&n| {
            vec![
                LayerSpec::dense(2 * b, b, Activation::Relu),
                LayerSpec::dense(b, n, Activation::Softmax),
            ]
        })
        .collect();
    NetworkSpec {
        input_dim: ap_count - 1,
        layers: vec![
            LayerSpec::dense(ap_count - 1, 2 * b, Activation::Relu),
            LayerSpec::dense(2 * b, 4 * b, Activation::Relu),
            LayerSpec::dense(4 * b, 2 * b, Activation::Relu),
            LayerSpec::Branch { branches },
        ],
        loss: Loss::Scce,
    }
}

/// `(2, I-1)` input `[delta; k]` -> conv `C x (2, 3)` -> flatten
/// `C (I-3)` -> `4D` -> `D` -> 2.
pub fn build_cnn_positioner(c: usize, d: usize, ap_count: usize) -> NetworkSpec {
    let p = ap_count - 1;
    let flat = c * (p - 2);
    NetworkSpec {
        input_dim: 2 * p,
        layers: vec![
            LayerSpec::conv2d(2, p, c, (2, 3), Activation::Relu),
            LayerSpec::Flatten,
            LayerSpec::dense(flat, 4 * d, Activation::Relu),
            LayerSpec::dense(4 * d, d, Activation::Relu),
            LayerSpec::dense(d, 2, Activation::Linear),
        ],
        loss: Loss::Mse,
    }
}

pub fn build(kind: ModelKind, hp: &ModelHyperparams, scenario: &Scenario) -> NetworkSpec {
    let i = scenario.ap_count();
    match kind {
        ModelKind::Mlp => build_mlp_positioner(hp.a, i),
        ModelKind::Ae => build_ambiguity_estimator(hp.b, i, &scenario.q),
        ModelKind::Cnn => build_cnn_positioner(hp.c, hp.d, i),
    }
}

/// `168 A^2`.
pub fn mlp_closed_form(a: usize) -> u64 {
    168 * (a * a) as u64
}

/// `4B(I-1) + 32B^2 + 4B^2(I-1) + 2BQ`.
pub fn ae_closed_form(b: usize, ap_count: usize, label_count: usize) -> u64 {
    let (b, p, q) = (b as u64, ap_count as u64 - 1, label_count as u64);
    4 * b * p + 32 * b * b + 4 * b * b * p + 2 * b * q
}

/// `11 C (I-3) + 8 C D (I-3) + 8 D^2 + 4 D`; the convolution costs
/// `2 * 6 - 1` FLOPs per output element.
pub fn cnn_closed_form(c: usize, d: usize, ap_count: usize) -> u64 {
    let (c, d, w) = (c as u64, d as u64, ap_count as u64 - 3);
    11 * c * w + 8 * c * d * w + 8 * d * d + 4 * d
}

pub fn scale_flops(closed_form: u64, keep_fraction: f64) -> u64 {
    (keep_fraction * closed_form as f64).round() as u64
}

/// Inference cost of a method: the CNN path also pays for the estimator.
pub fn method_flops(
    kind: ModelKind,
    hp: &ModelHyperparams,
    scenario: &Scenario,
    sparsity: &BTreeMap<ModelKind, f64>,
) -> Result<u64> {
    let keep = |k: ModelKind| 1.0 - sparsity.get(&k).copied().unwrap_or(0.0);
    let own = flop_count(&build(kind, hp, scenario), keep(kind))?;
    Ok(match kind {
        ModelKind::Cnn => own + flop_count(&build(ModelKind::Ae, hp, scenario), keep(ModelKind::Ae))?,
        _ => own,
    })
}

/// Maps class index `l` of head `m` to the label `l - q_m`; ties go to
/// the smallest label.
pub fn decide_ambiguities(probabilities: &[&[f64]], q: &[u32]) -> Vec<i32> {
    probabilities
        .iter()
        .zip(q)
        .map(|(p, &qm)| {
            let mut best = 0;
            for (l, &v) in p.iter().enumerate() {
                if v > p[best] {
                    best = l;
                }
            }
            best as i32 - qm as i32
        })
        .collect()
}

/// Feature handling shared by training and prediction.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeatureOptions {
    /// Feed `lambda * k` instead of raw integers to the CNN.
    pub metric_k: bool,
    /// Standardize every input column with training-set statistics.
    pub standardize: bool,
}

/// Per-column affine input map `(x - mean) / std`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InputScaling {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl InputScaling {
    pub fn fit(x: &Array2<f64>) -> Self {
        let mean = x.mean_axis(Axis(0)).expect("non-empty").to_vec();
        let std = x
            .std_axis(Axis(0), 0.0)
            .iter()
            .map(|&s| if s > 0.0 { s } else { 1.0 })
            .collect();
        InputScaling { mean, std }
    }

    pub fn apply(&self, x: &mut Array2<f64>) {
        for mut row in x.rows_mut() {
            for (j, v) in row.iter_mut().enumerate() {
                *v = (*v - self.mean[j]) / self.std[j];
            }
        }
    }
}

/// CNN input rows `[delta_1 .. delta_{I-1}, k_1 .. k_{I-1}]`.
pub fn cnn_inputs(delta: ArrayView2<f64>, k: ArrayView2<i32>, metric_lambda: Option<f64>) -> Array2<f64> {
    let (n, p) = delta.dim();
    let scale = metric_lambda.unwrap_or(1.0);
    let mut x = Array2::zeros((n, 2 * p));
    x.slice_mut(s![.., ..p]).assign(&delta);
    x.slice_mut(s![.., p..]).assign(&k.mapv(|v| v as f64 * scale));
    x
}

fn metric(opts: &FeatureOptions, scenario: &Scenario) -> Option<f64> {
    opts.metric_k.then_some(scenario.wavelength)
}

/// Inputs and targets for training `kind` on `ds`. The CNN is trained on
/// the true ambiguities.
pub fn training_data(
    kind: ModelKind,
    ds: &Dataset,
    scenario: &Scenario,
    opts: &FeatureOptions,
    scaling: Option<&InputScaling>,
) -> Result<TrainData> {
    let mut inputs = match kind {
        ModelKind::Mlp | ModelKind::Ae => ds.delta.clone(),
        ModelKind::Cnn => cnn_inputs(ds.delta.view(), ds.k.view(), metric(opts, scenario)),
    };
    if let Some(sc) = scaling {
        sc.apply(&mut inputs);
    }
    let targets = match kind {
        ModelKind::Ae => Targets::Classes(ds.class_labels(&scenario.q)?),
        _ => Targets::Regression(ds.ue.clone()),
    };
    Ok(TrainData::new(inputs, targets)?)
}

/// Fits input statistics for `kind` when standardization is enabled.
pub fn fit_scaling(kind: ModelKind, ds: &Dataset, scenario: &Scenario, opts: &FeatureOptions) -> Option<InputScaling> {
    opts.standardize.then(|| {
        let x = match kind {
            ModelKind::Cnn => cnn_inputs(ds.delta.view(), ds.k.view(), metric(opts, scenario)),
            _ => ds.delta.clone(),
        };
        InputScaling::fit(&x)
    })
}

const PREDICT_CHUNK: usize = 4096;

fn run_chunks(
    net: &Network<f32>,
    x: &Array2<f64>,
    scaling: Option<&InputScaling>,
    mut sink: impl FnMut(usize, Vec<Array2<f32>>),
) -> Result<()> {
    let n = x.nrows();
    let mut start = 0;
    while start < n {
        let end = (start + PREDICT_CHUNK).min(n);
        let mut part = x.slice(s![start..end, ..]).to_owned();
        if let Some(sc) = scaling {
            sc.apply(&mut part);
        }
        let out = net.predict(part.mapv(|v| v as f32).view())?;
        sink(start, out);
        start = end;
    }
    Ok(())
}

/// A trained network with its input map.
#[derive(Clone, Debug)]
pub struct TrainedModel {
    pub network: Network<f32>,
    pub scaling: Option<InputScaling>,
}

impl TrainedModel {
    fn regress(&self, x: &Array2<f64>) -> Result<Array2<f64>> {
        let mut out = Array2::zeros((x.nrows(), 2));
        run_chunks(&self.network, x, self.scaling.as_ref(), |start, heads| {
            let y = &heads[0];
            out.slice_mut(s![start..start + y.nrows(), ..]).assign(&y.mapv(|v| v as f64));
        })?;
        Ok(out)
    }
}

/// MLP mapping differential measurements straight to a position.
#[derive(Clone, Debug)]
pub struct DirectPositioner {
    pub model: TrainedModel,
}

impl DirectPositioner {
    pub fn predict(&self, delta: &Array2<f64>) -> Result<Array2<f64>> {
        self.model.regress(delta)
    }
}

/// Multi-head classifier over the differential ambiguities.
#[derive(Clone, Debug)]
pub struct AmbiguityEstimator {
    pub model: TrainedModel,
    pub q: Vec<u32>,
}

impl AmbiguityEstimator {
    pub fn decide(&self, delta: &Array2<f64>) -> Result<Array2<i32>> {
        let p = self.q.len();
        let mut out = Array2::zeros((delta.nrows(), p));
        run_chunks(&self.model.network, delta, self.model.scaling.as_ref(), |start, heads| {
            for i in 0..heads[0].nrows() {
                let rows: Vec<Vec<f64>> = heads.iter().map(|h| h.row(i).iter().map(|&v| v as f64).collect()).collect();
                let refs: Vec<&[f64]> = rows.iter().map(|r| r.as_slice()).collect();
                for (m, k) in decide_ambiguities(&refs, &self.q).into_iter().enumerate() {
                    out[[start + i, m]] = k;
                }
            }
        })?;
        Ok(out)
    }
}

/// Ambiguity estimator followed by the CNN positioner.
#[derive(Clone, Debug)]
pub struct AidedPositioner {
    pub estimator: AmbiguityEstimator,
    pub cnn: TrainedModel,
    pub metric_lambda: Option<f64>,
}

impl AidedPositioner {
    /// Positions from estimated ambiguities, or from `oracle_k` when given.
    pub fn predict(&self, delta: &Array2<f64>, oracle_k: Option<ArrayView2<i32>>) -> Result<Array2<f64>> {
        let k = match oracle_k {
            Some(k) => k.to_owned(),
            None => self.estimator.decide(delta)?,
        };
        self.cnn.regress(&cnn_inputs(delta.view(), k.view(), self.metric_lambda))
    }
}

pub const MANIFEST_FILE: &str = "bundle.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BundleMember {
    pub file: String,
    pub sparsity: f64,
    pub scaling: Option<InputScaling>,
}

/// Description of a bundle directory holding the trained models of one
/// (frequency, power) configuration.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BundleManifest {
    pub scenario_hash: String,
    pub carrier_frequency: f64,
    pub power_dbm: f64,
    pub hyperparams: ModelHyperparams,
    pub features: FeatureOptions,
    pub members: BTreeMap<ModelKind, BundleMember>,
}

#[derive(Clone, Debug)]
pub struct ModelBundle {
    pub dir: PathBuf,
    pub manifest: BundleManifest,
}

impl ModelBundle {
    /// Opens `dir`, or starts an empty bundle when it has no manifest yet.
    pub fn open_or_create(
        dir: &Path,
        scenario: &Scenario,
        power_dbm: f64,
        hyperparams: ModelHyperparams,
        features: FeatureOptions,
    ) -> Result<Self> {
        if dir.join(MANIFEST_FILE).exists() {
            let b = ModelBundle::open(dir)?;
            b.check_scenario(scenario)?;
            if b.manifest.hyperparams != hyperparams || b.manifest.features != features {
                return Err(CoreError::Data(format!(
                    "{}: bundle was built with different hyperparameters or features",
                    dir.display()
                )));
            }
            return Ok(b);
        }
        std::fs::create_dir_all(dir).map_err(|e| CoreError::io(dir, e))?;
        Ok(ModelBundle {
            dir: dir.to_path_buf(),
            manifest: BundleManifest {
                scenario_hash: scenario.hash(),
                carrier_frequency: scenario.carrier_frequency,
                power_dbm,
                hyperparams,
                features,
                members: BTreeMap::new(),
            },
        })
    }

    pub fn open(dir: &Path) -> Result<Self> {
        let path = dir.join(MANIFEST_FILE);
        let text = std::fs::read_to_string(&path).map_err(|e| CoreError::io(&path, e))?;
        Ok(ModelBundle {
            dir: dir.to_path_buf(),
            manifest: serde_json::from_str(&text)?,
        })
    }

    pub fn check_scenario(&self, scenario: &Scenario) -> Result<()> {
        let h = scenario.hash();
        if self.manifest.scenario_hash != h {
            return Err(CoreError::HashMismatch {
                expected: h,
                found: self.manifest.scenario_hash.clone(),
            });
        }
        Ok(())
    }

    fn write_manifest(&self) -> Result<()> {
        let path = self.dir.join(MANIFEST_FILE);
        let text = serde_json::to_string_pretty(&self.manifest)? + "\n";
        std::fs::write(&path, text).map_err(|e| CoreError::io(&path, e))
    }

    /// Stores trained weights for `kind` and records them in the manifest.
    pub fn put(
        &mut self,
        kind: ModelKind,
        header: &WeightsHeader,
        network: &Network<f32>,
        sparsity: f64,
        scaling: Option<InputScaling>,
    ) -> Result<()> {
        let file = format!("{}.weights", kind.name());
        let mut header = header.clone();
        header.meta = serde_json::json!({
            "model": kind.name(),
            "scenario_hash": self.manifest.scenario_hash,
            "power_dbm": self.manifest.power_dbm,
        });
        save_network(&self.dir.join(&file), &header, network)?;
        self.manifest.members.insert(
            kind,
            BundleMember {
                file,
                sparsity,
                scaling,
            },
        );
        self.write_manifest()
    }

    pub fn has(&self, kind: ModelKind) -> bool {
        self.manifest.members.contains_key(&kind)
    }

    pub fn load(&self, kind: ModelKind) -> Result<TrainedModel> {
        let member = self.manifest.members.get(&kind).ok_or_else(|| {
            CoreError::Data(format!(
                "{}: bundle has no {} model (power {} dBm)",
                self.dir.display(),
                kind.name(),
                self.manifest.power_dbm
            ))
        })?;
        let (header, network) = load_network::<f32>(&self.dir.join(&member.file))?;
        if header.meta.get("scenario_hash").and_then(|v| v.as_str()) != Some(self.manifest.scenario_hash.as_str()) {
            return Err(CoreError::HashMismatch {
                expected: self.manifest.scenario_hash.clone(),
                found: header.meta.get("scenario_hash").map(|v| v.to_string()).unwrap_or_default(),
            });
        }
        Ok(TrainedModel {
            network,
            scaling: member.scaling.clone(),
        })
    }

    pub fn direct(&self) -> Result<DirectPositioner> {
        Ok(DirectPositioner {
            model: self.load(ModelKind::Mlp)?,
        })
    }

    pub fn aided(&self, scenario: &Scenario) -> Result<AidedPositioner> {
        self.check_scenario(scenario)?;
        Ok(AidedPositioner {
            estimator: AmbiguityEstimator {
                model: self.load(ModelKind::Ae)?,
                q: scenario.q.clone(),
            },
            cnn: self.load(ModelKind::Cnn)?,
            metric_lambda: metric(&self.manifest.features, scenario),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mlp_parameter_count() {
        let spec = build_mlp_positioner(128, 20);
        let dims = [19, 128, 256, 512, 1024, 512, 256, 128, 2];
        let expect: usize = dims.windows(2).map(|w| w[0] * w[1] + w[1]).sum();
        assert_eq!(spec.parameter_count().unwrap(), expect);
    }

    #[test]
    fn mlp_closed_form_matches_table() {
        let spec = build_mlp_positioner(128, 20);
        assert_eq!(mlp_closed_form(128), 2_752_512);
        assert_eq!(flop_count(&spec, 1.0).unwrap(), 2_752_512);
        assert_eq!(flop_count(&spec, 0.5).unwrap(), 1_376_256);
    }

    #[test]
    fn estimator_heads_match_bounds() {
        let q = [3, 0, 7];
        let spec = build_ambiguity_estimator(8, 4, &q);
        assert_eq!(spec.head_widths().unwrap(), vec![7, 1, 15]);
    }

    #[test]
    fn estimator_closed_form_matches_table() {
        assert_eq!(scale_flops(ae_closed_form(128, 20, 660), 0.5), 974_080);
        assert_eq!(ae_closed_form(128, 20, 1472), 2_156_032);
    }

    #[test]
    fn cnn_closed_form_matches_table() {
        let c = cnn_closed_form(32, 128, 20);
        assert_eq!(c, 5984 + 688_640);
        assert_eq!(scale_flops(c, 0.25), 173_656);
        assert_eq!(scale_flops(c, 0.25) + 974_080, 1_147_736);
        assert_eq!(scale_flops(c, 0.25) + 2_156_032, 2_329_688);
        let spec = build_cnn_positioner(32, 128, 20);
        assert_eq!(flop_count(&spec, 1.0).unwrap(), c);
        assert!(matches!(spec.layers[2], LayerSpec::Dense { inputs: 544, .. }));
    }

    #[test]
    fn uniform_head_decides_smallest_label() {
        let p = [0.2; 5];
        assert_eq!(decide_ambiguities(&[&p], &[2]), vec![-2]);
    }

    #[test]
    fn class_index_maps_to_label() {
        let mut p = [0.0; 7];
        p[3] = 1.0;
        assert_eq!(decide_ambiguities(&[&p], &[3]), vec![0]);
        assert_eq!(decide_ambiguities(&[&[0.1, 0.7, 0.2]], &[1]), vec![0]);
    }

    #[test]
    fn cnn_input_layout() {
        let delta = ndarray::array![[0.1, 0.2, 0.3]];
        let k = ndarray::array![[1, -2, 0]];
        let x = cnn_inputs(delta.view(), k.view(), None);
        assert_eq!(x, ndarray::array![[0.1, 0.2, 0.3, 1.0, -2.0, 0.0]]);
        let x = cnn_inputs(delta.view(), k.view(), Some(0.5));
        assert_eq!(x.row(0)[4], -1.0);
    }

    #[test]
    fn table_one_sparsity_defaults() {
        assert_eq!(default_sparsity(ModelKind::Mlp, 800e6), 0.5);
        assert_eq!(default_sparsity(ModelKind::Ae, 800e6), 0.5);
        assert_eq!(default_sparsity(ModelKind::Ae, 1.8e9), 0.0);
        assert_eq!(default_sparsity(ModelKind::Cnn, 1.8e9), 0.75);
    }
}

//! Accuracy metrics, MLE comparisons and report export.

use std::path::Path;

use ndarray::{Array2, ArrayView2};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::channel::LinkBudget;
use crate::dataset::{csv_err, Dataset};
use crate::mle::{estimate, Grid, GridSpec, Precision, RefineConfig, ResidualMode};
use crate::models::{AidedPositioner, DirectPositioner};
use crate::scenario::Scenario;
use crate::{CoreError, Result};

/// Euclidean error per row.
pub fn position_errors(estimates: ArrayView2<f64>, truths: ArrayView2<f64>) -> Result<Vec<f64>> {
    if estimates.dim() != truths.dim() {
        return Err(CoreError::Data(format!(
            "{} estimates vs {} truths",
            estimates.nrows(),
            truths.nrows()
        )));
    }
    Ok(estimates
        .rows()
        .into_iter()
        .zip(truths.rows())
        .map(|(e, t)| (e[0] - t[0]).hypot(e[1] - t[1]))
        .collect())
}

pub fn rmse_of_errors(errors: &[f64]) -> Result<f64> {
    if errors.is_empty() {
        return Err(CoreError::Data("RMSE of an empty set".into()));
    }
    Ok((errors.iter().map(|e| e * e).sum::<f64>() / errors.len() as f64).sqrt())
}

pub fn rmse(estimates: ArrayView2<f64>, truths: ArrayView2<f64>) -> Result<f64> {
    rmse_of_errors(&position_errors(estimates, truths)?)
}

/// Percentage of individually correct ambiguities.
pub fn acc_element(k_hat: ArrayView2<i32>, k: ArrayView2<i32>) -> f64 {
    let correct = k_hat.iter().zip(k.iter()).filter(|(a, b)| a == b).count();
    100.0 * correct as f64 / k.len() as f64
}

/// Percentage of samples whose ambiguities are all correct.
pub fn acc_overall(k_hat: ArrayView2<i32>, k: ArrayView2<i32>) -> f64 {
    let correct = k_hat.rows().into_iter().zip(k.rows()).filter(|(a, b)| a == b).count();
    100.0 * correct as f64 / k.nrows() as f64
}

/// Empirical CDF with plotting positions `i / T`.
#[derive(Clone, Debug, PartialEq)]
pub struct Ecdf {
    sorted: Vec<f64>,
}

impl Ecdf {
    pub fn new(errors: &[f64]) -> Result<Self> {
        if errors.is_empty() {
            return Err(CoreError::Data("ECDF of an empty set".into()));
        }
        let mut sorted = errors.to_vec();
        sorted.sort_by(f64::total_cmp);
        Ok(Ecdf { sorted })
    }

    pub fn len(&self) -> usize {
        self.sorted.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sorted.is_empty()
    }

    /// `(error, i / T)` for `i = 1..T`.
    pub fn points(&self) -> Vec<(f64, f64)> {
        let t = self.sorted.len() as f64;
        self.sorted.iter().enumerate().map(|(i, &e)| (e, (i + 1) as f64 / t)).collect()
    }

    /// Smallest error whose cumulative probability reaches `p` percent.
    pub fn percentile(&self, p: f64) -> f64 {
        let t = self.sorted.len();
        let rank = ((p / 100.0) * t as f64).ceil() as usize;
        self.sorted[rank.clamp(1, t) - 1]
    }

    /// Fraction of errors at or below `x`.
    pub fn cdf(&self, x: f64) -> f64 {
        self.sorted.partition_point(|&e| e <= x) as f64 / self.sorted.len() as f64
    }
}

pub fn reduction_factor(mle_flops: u64, nn_flops: u64) -> f64 {
    mle_flops as f64 / nn_flops as f64
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub method: String,
    pub carrier_frequency: f64,
    pub power_dbm: f64,
    pub sample_count: usize,
    pub rmse: f64,
    /// Errors at percentiles 1, 2, ..., 100.
    pub ecdf_quantiles: Vec<f64>,
    pub p95: f64,
    pub acc_element: Option<f64>,
    pub acc_overall: Option<f64>,
    pub flops: u64,
    pub n_grid: Option<usize>,
    /// MLE cost at the performance-matched grid over this method's cost.
    pub reduction_factor: Option<f64>,
    #[serde(skip)]
    pub errors: Vec<f64>,
}

impl EvalReport {
    pub fn from_errors(method: &str, carrier_frequency: f64, power_dbm: f64, errors: Vec<f64>, flops: u64) -> Result<Self> {
        let ecdf = Ecdf::new(&errors)?;
        Ok(EvalReport {
            method: method.into(),
            carrier_frequency,
            power_dbm,
            sample_count: errors.len(),
            rmse: rmse_of_errors(&errors)?,
            ecdf_quantiles: (1..=100).map(|p| ecdf.percentile(p as f64)).collect(),
            p95: ecdf.percentile(95.0),
            acc_element: None,
            acc_overall: None,
            flops,
            n_grid: None,
            reduction_factor: None,
            errors,
        })
    }

    pub fn ecdf(&self) -> Result<Ecdf> {
        Ecdf::new(&self.errors)
    }
}

/// One MLE parametrization in a comparison.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MleMethod {
    pub name: String,
    pub n_grid: usize,
}

/// Neural methods and MLE settings compared on one test set.
pub struct Comparison<'a> {
    pub scenario: &'a Scenario,
    pub test: &'a Dataset,
    pub direct: Option<(&'a DirectPositioner, u64)>,
    pub aided: Option<(&'a AidedPositioner, u64)>,
    pub mle: Vec<MleMethod>,
    /// MLE runs on the first `mle_samples` test rows.
    pub mle_samples: usize,
    pub residual: ResidualMode,
    pub refine: RefineConfig,
    /// Grid size whose cost defines the reduction factors.
    pub reference_n_grid: Option<usize>,
}

/// Runs every configured method on the same test samples.
pub fn compare(c: &Comparison) -> Result<Vec<EvalReport>> {
    c.test.check_scenario(c.scenario)?;
    let f = c.scenario.carrier_frequency;
    let p = c.test.header.power_dbm;
    let truth = c.test.ue.view();
    let reference = c.reference_n_grid.map(|n| crate::mle::mle_flops(n, c.scenario.ap_count()));
    let with_factor = |mut r: EvalReport| {
        r.reduction_factor = reference.map(|m| reduction_factor(m, r.flops));
        r
    };
    let mut out = Vec::new();
    if let Some((net, flops)) = c.direct {
        let est = net.predict(&c.test.delta)?;
        out.push(with_factor(EvalReport::from_errors("mlp", f, p, position_errors(est.view(), truth)?, flops)?));
    }
    if let Some((aided, flops)) = c.aided {
        let k_hat = aided.estimator.decide(&c.test.delta)?;
        let est = aided.cnn_predict(&c.test.delta, k_hat.view())?;
        let mut r = EvalReport::from_errors("cnn", f, p, position_errors(est.view(), truth)?, flops)?;
        r.acc_element = Some(acc_element(k_hat.view(), c.test.k.view()));
        r.acc_overall = Some(acc_overall(k_hat.view(), c.test.k.view()));
        out.push(with_factor(r));
        let est = aided.cnn_predict(&c.test.delta, c.test.k.view())?;
        out.push(with_factor(EvalReport::from_errors(
            "cnn_oracle",
            f,
            p,
            position_errors(est.view(), truth)?,
            flops,
        )?));
    }
    if !c.mle.is_empty() {
        let budget = LinkBudget::from_dbm(p)?;
        let precision = Precision::for_configuration(c.scenario, &budget)?;
        let n = c.mle_samples.min(c.test.len());
        for m in &c.mle {
            let grid = Grid::new(c.scenario, GridSpec::new(m.n_grid)?);
            let est: Vec<[f64; 2]> = (0..n)
                .into_par_iter()
                .map(|i| {
                    let delta = c.test.delta.row(i).to_vec();
                    estimate(&delta, c.scenario, &grid, &precision, c.residual, &c.refine).position
                })
                .collect();
            let est = Array2::from_shape_fn((n, 2), |(i, j)| est[i][j]);
            let errors = position_errors(est.view(), c.test.ue.slice(ndarray::s![..n, ..]))?;
            let mut r = EvalReport::from_errors(
                &m.name,
                f,
                p,
                errors,
                crate::mle::mle_flops(m.n_grid, c.scenario.ap_count()),
            )?;
            r.n_grid = Some(m.n_grid);
            out.push(r);
        }
    }
    Ok(out)
}

impl AidedPositioner {
    fn cnn_predict(&self, delta: &Array2<f64>, k: ArrayView2<i32>) -> Result<Array2<f64>> {
        self.predict(delta, Some(k))
    }
}

#[derive(Serialize)]
struct CurveRow<'a> {
    x: f64,
    y: f64,
    method: &'a str,
    frequency: f64,
    power: f64,
}

/// ECDF curves, one row per sample: `x` error, `y` cumulative probability.
pub fn write_ecdf_csv(path: &Path, reports: &[EvalReport]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
    for r in reports {
        for (x, y) in r.ecdf()?.points() {
            w.serialize(CurveRow {
                x,
                y,
                method: &r.method,
                frequency: r.carrier_frequency,
                power: r.power_dbm,
            })
            .map_err(|e| csv_err(path, e))?;
        }
    }
    w.flush().map_err(|e| CoreError::io(path, e))
}

/// RMSE against transmit power: `x` power in dBm, `y` RMSE in meters.
pub fn write_rmse_csv(path: &Path, reports: &[EvalReport]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
    for r in reports {
        w.serialize(CurveRow {
            x: r.power_dbm,
            y: r.rmse,
            method: &r.method,
            frequency: r.carrier_frequency,
            power: r.power_dbm,
        })
        .map_err(|e| csv_err(path, e))?;
    }
    w.flush().map_err(|e| CoreError::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn rmse_examples() {
        let t = array![[1.0, 1.0], [2.0, 2.0]];
        assert_eq!(rmse(t.view(), t.view()).unwrap(), 0.0);
        let e = array![[4.0, 1.0], [2.0, 6.0]];
        assert!((rmse(e.view(), t.view()).unwrap() - 3.5355).abs() < 1e-4);
        let e2 = array![[2.0, 6.0], [4.0, 1.0]];
        let t2 = array![[2.0, 2.0], [1.0, 1.0]];
        assert_eq!(rmse(e2.view(), t2.view()).unwrap(), rmse(e.view(), t.view()).unwrap());
        assert!(rmse_of_errors(&[]).is_err());
    }

    #[test]
    fn accuracy_examples() {
        let k = array![[1, 2, 3, 4]];
        assert_eq!(acc_element(k.view(), k.view()), 100.0);
        assert_eq!(acc_overall(k.view(), k.view()), 100.0);
        let kh = array![[1, 0, 3, 0]];
        assert_eq!(acc_element(kh.view(), k.view()), 50.0);
        assert_eq!(acc_overall(kh.view(), k.view()), 0.0);
    }

    #[test]
    fn ecdf_examples() {
        let e = Ecdf::new(&[0.3; 10]).unwrap();
        assert_eq!(e.percentile(95.0), 0.3);
        let e = Ecdf::new(&[0.4, 0.1, 0.3, 0.2]).unwrap();
        assert_eq!(e.percentile(100.0), 0.4);
        assert_eq!(e.percentile(50.0), 0.2);
        assert_eq!(e.points(), vec![(0.1, 0.25), (0.2, 0.5), (0.3, 0.75), (0.4, 1.0)]);
        assert_eq!(e.cdf(0.25), 0.5);
    }

    #[test]
    fn reduction_factor_examples() {
        assert!((reduction_factor(426_937_500, 1_376_256) - 310.2).abs() < 0.05);
        assert!((reduction_factor(2_459_160_000, 1_376_256) - 1786.848).abs() < 1e-3);
        assert!((reduction_factor(2_459_160_000, 2_329_688) - 1055.575).abs() < 1e-3);
        assert!((reduction_factor(426_937_500, 1_147_736) - 371.982).abs() < 1e-3);
        assert_eq!(reduction_factor(20, 10), reduction_factor(2000, 1000));
    }
}

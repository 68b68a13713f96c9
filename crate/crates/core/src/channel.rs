//! Phase observations, differential measurements and their noise
//! covariance.

use std::f64::consts::PI;

use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::scenario::Scenario;
use crate::{CoreError, Result};

pub const BANDWIDTH_HZ: f64 = 180e3;
pub const NOISE_FIGURE_DB: f64 = 13.0;
/// Thermal noise density in dBm/Hz.
pub const THERMAL_NOISE_DBM_HZ: f64 = -174.0;

pub fn dbm_to_watts(dbm: f64) -> f64 {
    10f64.powf(dbm / 10.0) * 1e-3
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LinkBudget {
    pub transmit_power_w: f64,
    pub bandwidth_hz: f64,
    pub noise_figure_db: f64,
    /// Receiver noise density including the noise figure, W/Hz.
    pub noise_psd: f64,
    /// `P / W`, joules.
    pub symbol_energy: f64,
}

impl LinkBudget {
    pub fn new(transmit_power_w: f64, bandwidth_hz: f64, noise_figure_db: f64) -> Result<Self> {
        if !(transmit_power_w > 0.0 && transmit_power_w.is_finite()) {
            return Err(CoreError::config("transmit_power", "must be positive"));
        }
        if !(bandwidth_hz > 0.0 && bandwidth_hz.is_finite()) {
            return Err(CoreError::config("bandwidth", "must be positive"));
        }
        Ok(LinkBudget {
            transmit_power_w,
            bandwidth_hz,
            noise_figure_db,
            noise_psd: dbm_to_watts(THERMAL_NOISE_DBM_HZ + noise_figure_db),
            symbol_energy: transmit_power_w / bandwidth_hz,
        })
    }

    /// Budget with the default bandwidth and noise figure.
    pub fn from_dbm(power_dbm: f64) -> Result<Self> {
        LinkBudget::new(dbm_to_watts(power_dbm), BANDWIDTH_HZ, NOISE_FIGURE_DB)
    }

    pub fn power_dbm(&self) -> f64 {
        10.0 * (self.transmit_power_w * 1e3).log10()
    }
}

/// Free-space amplitude gain `lambda / (4 pi d)`.
pub fn path_loss(d: f64, lambda: f64) -> Result<f64> {
    if !(d > 0.0) {
        return Err(CoreError::Domain(format!("path loss needs a positive distance, got {d}")));
    }
    Ok(lambda / (4.0 * PI * d))
}

/// Phase noise standard deviation `sqrt(N0 / (2 E rho^2))`, radians.
pub fn phase_noise_sigma(budget: &LinkBudget, rho: f64) -> f64 {
    (budget.noise_psd / (2.0 * budget.symbol_energy * rho * rho)).sqrt()
}

/// Wraps an angle into `(-pi, pi]`.
pub fn wrap_phase(a: f64) -> f64 {
    let w = a.rem_euclid(2.0 * PI);
    if w > PI {
        w - 2.0 * PI
    } else {
        w
    }
}

/// Reduces a length into `[-lambda/2, lambda/2)`.
pub fn wrap_length(x: f64, lambda: f64) -> f64 {
    x - lambda * (x / lambda + 0.5).floor()
}

/// `delta_m = -(lambda / 2 pi) (r_m - r_0)` for `m = 1..I-1`.
pub fn differential(r: &[f64], lambda: f64) -> Vec<f64> {
    let scale = -lambda / (2.0 * PI);
    r[1..].iter().map(|&rm| scale * (rm - r[0])).collect()
}

/// Distribution of the common phase offset.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OffsetModel {
    /// Uniform on `[0, 2 pi)`, drawn per sample.
    #[default]
    Uniform,
    Zero,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChannelOptions {
    pub noise: bool,
    pub offset: OffsetModel,
}

impl Default for ChannelOptions {
    fn default() -> Self {
        ChannelOptions {
            noise: true,
            offset: OffsetModel::Uniform,
        }
    }
}

impl ChannelOptions {
    pub fn noiseless() -> Self {
        ChannelOptions {
            noise: false,
            ..Default::default()
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PhaseSample {
    pub ue_position: [f64; 2],
    pub theta: f64,
    pub distances: Vec<f64>,
    pub path_gains: Vec<f64>,
    pub phases: Vec<f64>,
    pub differentials: Vec<f64>,
    pub true_k: Vec<i32>,
    pub noise_sigmas: Vec<f64>,
    /// Labels that fell one step outside `[-q_m, q_m]` and were clamped.
    pub clamped: usize,
}

impl PhaseSample {
    /// True range differences `d_m - d_0`.
    pub fn range_differences(&self) -> Vec<f64> {
        self.distances[1..].iter().map(|&d| d - self.distances[0]).collect()
    }

    /// Differential noise `delta - Delta - k lambda`, reduced modulo lambda.
    pub fn differential_noise(&self, lambda: f64) -> Vec<f64> {
        self.differentials
            .iter()
            .zip(self.range_differences())
            .zip(&self.true_k)
            .map(|((&dm, big), &k)| wrap_length(dm - big - k as f64 * lambda, lambda))
            .collect()
    }
}

/// One Monte-Carlo draw of phase observations at `ue`.
///
/// Draw order: `theta` (if uniform), then `n_0 .. n_{I-1}` (if noisy).
pub fn simulate_sample<R: Rng>(
    scenario: &Scenario,
    budget: &LinkBudget,
    ue: [f64; 2],
    opts: &ChannelOptions,
    rng: &mut R,
) -> Result<PhaseSample> {
    let lambda = scenario.wavelength;
    let distances = scenario.distances(ue);
    let path_gains = distances
        .iter()
        .map(|&d| path_loss(d, lambda))
        .collect::<Result<Vec<_>>>()?;
    let noise_sigmas: Vec<f64> = path_gains.iter().map(|&rho| phase_noise_sigma(budget, rho)).collect();
    let theta = match opts.offset {
        OffsetModel::Uniform => rng.random::<f64>() * 2.0 * PI,
        OffsetModel::Zero => 0.0,
    };
    let clean: Vec<f64> = distances.iter().map(|&d| -2.0 * PI * d / lambda + theta).collect();
    let phases: Vec<f64> = if opts.noise {
        clean
            .iter()
            .zip(&noise_sigmas)
            .map(|(&a, &s)| wrap_phase(a + s * rng.sample::<f64, _>(StandardNormal)))
            .collect()
    } else {
        clean.iter().map(|&a| wrap_phase(a)).collect()
    };
    let clean_delta = differential(&clean.iter().map(|&a| wrap_phase(a)).collect::<Vec<_>>(), lambda);
    let mut clamped = 0;
    let mut true_k = Vec::with_capacity(scenario.pair_count());
    for (m, &dm) in clean_delta.iter().enumerate() {
        let k = ((dm - (distances[m + 1] - distances[0])) / lambda).round() as i64;
        let q = scenario.q[m] as i64;
        if k.abs() > q + 1 {
            return Err(CoreError::Internal(format!(
                "ambiguity {k} for pair {} exceeds bound {q} by more than one",
                m + 1
            )));
        }
        if k.abs() == q + 1 {
            clamped += 1;
        }
        true_k.push(k.clamp(-q, q) as i32);
    }
    Ok(PhaseSample {
        ue_position: ue,
        theta,
        distances,
        path_gains,
        differentials: differential(&phases, lambda),
        phases,
        true_k,
        noise_sigmas,
        clamped,
    })
}

/// Covariance of the differential noise,
/// `(lambda^2 N0 / (8 pi^2 E)) (diag(1/rho_m^2) + 11^T / rho_0^2)`.
pub fn covariance(scenario: &Scenario, budget: &LinkBudget, rho: &[f64]) -> Result<DMatrix<f64>> {
    let inv_sq: Vec<f64> = rho.iter().map(|&r| 1.0 / (r * r)).collect();
    covariance_from_inverse_gains(scenario.wavelength, budget, &inv_sq)
}

/// [`covariance`] parametrized by `1 / rho_i^2` directly.
pub fn covariance_from_inverse_gains(lambda: f64, budget: &LinkBudget, inv_sq: &[f64]) -> Result<DMatrix<f64>> {
    if inv_sq.len() < 2 {
        return Err(CoreError::Domain("covariance needs at least two APs".into()));
    }
    let n = inv_sq.len() - 1;
    let c = lambda * lambda * budget.noise_psd / (8.0 * PI * PI * budget.symbol_energy);
    let cov = DMatrix::from_fn(n, n, |i, j| {
        let diag = if i == j { inv_sq[i + 1] } else { 0.0 };
        c * (diag + inv_sq[0])
    });
    if cov.iter().any(|v| !v.is_finite()) {
        return Err(CoreError::Numeric("non-finite covariance entry".into()));
    }
    Ok(cov)
}

/// Mean and count of clamped labels over a set of samples.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ClampStats {
    pub samples: usize,
    pub labels: usize,
    pub clamped: usize,
}

impl ClampStats {
    pub fn add(&mut self, s: &PhaseSample) {
        self.samples += 1;
        self.labels += s.true_k.len();
        self.clamped += s.clamped;
    }

    pub fn rate(&self) -> f64 {
        if self.labels == 0 {
            0.0
        } else {
            self.clamped as f64 / self.labels as f64
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scenario::wavelength;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    const LAMBDA: f64 = 0.374_740_572_5;

    #[test]
    fn unit_gain_distance() {
        assert!((path_loss(LAMBDA / (4.0 * PI), LAMBDA).unwrap() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn path_loss_at_five_meters() {
        let rho = path_loss(5.0, LAMBDA).unwrap();
        assert!((rho - 5.964_18e-3).abs() < 1e-8);
        assert!((rho / 5.9635e-3 - 1.0).abs() < 2e-4);
        assert!((rho * rho / 3.556e-5 - 1.0).abs() < 5e-4);
        assert!((20.0 * rho.log10() + 44.49).abs() < 0.01);
        assert!((path_loss(10.0, LAMBDA).unwrap() - rho / 2.0).abs() < 1e-18);
    }

    #[test]
    fn path_loss_rejects_zero_distance() {
        assert!(matches!(path_loss(0.0, LAMBDA), Err(CoreError::Domain(_))));
    }

    #[test]
    fn unit_sigma_point() {
        let b = LinkBudget::from_dbm(0.0).unwrap();
        let rho = (0.5 * b.noise_psd / b.symbol_energy).sqrt();
        assert!((phase_noise_sigma(&b, rho) - 1.0).abs() < 1e-12);
        let s1 = phase_noise_sigma(&b, 0.01);
        let s2 = phase_noise_sigma(&b, 0.005);
        assert!((s2 * s2 / (s1 * s1) - 4.0).abs() < 1e-12);
    }

    #[test]
    fn budget_chain_at_zero_dbm() {
        let b = LinkBudget::from_dbm(0.0).unwrap();
        assert!((b.symbol_energy - 5.556e-9).abs() < 1e-12);
        assert!((b.noise_psd - 7.943e-20).abs() < 1e-23);
        let rho = path_loss(5.0, wavelength(800e6)).unwrap();
        let s2 = phase_noise_sigma(&b, rho).powi(2);
        assert!((s2 - 2.01e-7).abs() < 0.01e-7, "{s2}");
    }

    #[test]
    fn wrap_phase_interval() {
        assert_eq!(wrap_phase(PI), PI);
        assert!((wrap_phase(-PI) - PI).abs() < 1e-15);
        assert!((wrap_phase(3.0 * PI) - PI).abs() < 1e-12);
        assert!((wrap_phase(0.5 + 4.0 * PI) - 0.5).abs() < 1e-12);
        assert!((wrap_phase(-0.5 - 6.0 * PI) + 0.5).abs() < 1e-12);
    }

    #[test]
    fn differential_of_opposite_quadratures() {
        let d = differential(&[PI / 2.0, -PI / 2.0], LAMBDA);
        assert!((d[0] - LAMBDA / 2.0).abs() < 1e-15);
        assert!((d[0] - 0.187_370).abs() < 1e-6);
        assert_eq!(differential(&[0.3, 0.3, 0.3], LAMBDA), vec![0.0, 0.0]);
    }

    fn line_scenario() -> Scenario {
        Scenario::from_positions(10.0, vec![[0.0, 0.0], [7.5, 0.0]], 800e6, 0.1, 0).unwrap()
    }

    #[test]
    fn noiseless_integrality_on_a_line() {
        // d_0 = 3.0, d_1 = 4.5
        let s = line_scenario();
        let b = LinkBudget::from_dbm(0.0).unwrap();
        let opts = ChannelOptions {
            noise: false,
            offset: OffsetModel::Zero,
        };
        let p = simulate_sample(&s, &b, [3.0, 0.0], &opts, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let big = p.range_differences()[0];
        assert!((big - 1.5).abs() < 1e-15);
        let k = (p.differentials[0] - big) / s.wavelength;
        assert!((k - k.round()).abs() < 1e-9);
        assert_eq!(p.true_k[0] as f64, k.round());
    }

    #[test]
    fn equidistant_ue_has_zero_offset_from_truth() {
        let s = line_scenario();
        let b = LinkBudget::from_dbm(0.0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let p = simulate_sample(&s, &b, [3.75, 2.0], &ChannelOptions::noiseless(), &mut rng).unwrap();
        assert!((p.differentials[0] - p.true_k[0] as f64 * s.wavelength).abs() < 1e-9);
        let opts = ChannelOptions {
            noise: false,
            offset: OffsetModel::Zero,
        };
        let p = simulate_sample(&s, &b, [3.75, 2.0], &opts, &mut rng).unwrap();
        assert_eq!(p.differentials[0], 0.0);
        assert_eq!(p.true_k[0], 0);
    }

    #[test]
    fn equal_gain_covariance_structure() {
        let s = Scenario::from_positions(10.0, vec![[0.0, 0.0], [1.0, 0.0], [2.0, 0.0]], 800e6, 0.1, 0).unwrap();
        let b = LinkBudget::from_dbm(-10.0).unwrap();
        let rho = 1e-3;
        let cov = covariance(&s, &b, &[rho; 3]).unwrap();
        let c = s.wavelength.powi(2) * b.noise_psd / (8.0 * PI * PI * b.symbol_energy * rho * rho);
        for i in 0..2 {
            for j in 0..2 {
                let expect = if i == j { 2.0 * c } else { c };
                assert!((cov[(i, j)] - expect).abs() < 1e-12 * c);
            }
        }
        assert!(cov.cholesky().is_some());
    }

    #[test]
    fn two_ap_covariance_is_scalar() {
        let s = line_scenario();
        let b = LinkBudget::from_dbm(-20.0).unwrap();
        let rho = [2e-3, 5e-3];
        let cov = covariance(&s, &b, &rho).unwrap();
        let expect = s.wavelength.powi(2) * b.noise_psd / (8.0 * PI * PI * b.symbol_energy)
            * (1.0 / (rho[1] * rho[1]) + 1.0 / (rho[0] * rho[0]));
        assert_eq!(cov.shape(), (1, 1));
        assert!((cov[(0, 0)] - expect).abs() < 1e-12 * expect);
    }
}

//! Maximum-likelihood positioning: measurement model, likelihood, grid
//! search and gradient refinement.

use std::f64::consts::PI;

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::channel::{covariance_from_inverse_gains, wrap_length, LinkBudget};
use crate::scenario::{dist, Scenario};
use crate::{CoreError, Result};

/// Noise-free differential measurement at `x`,
/// `h_m = -(lambda / 2 pi) (mod(-2 pi d_m / lambda, 2 pi) - mod(-2 pi d_0 / lambda, 2 pi))`.
pub fn h_model(x: [f64; 2], scenario: &Scenario) -> Vec<f64> {
    let mut out = vec![0.0; scenario.pair_count()];
    h_model_into(x, scenario, &mut out);
    out
}

fn h_model_into(x: [f64; 2], scenario: &Scenario, out: &mut [f64]) {
    let lambda = scenario.wavelength;
    let phase = |ap: [f64; 2]| (-2.0 * PI * dist(x, ap) / lambda).rem_euclid(2.0 * PI);
    let p0 = phase(scenario.ap_positions[0]);
    let scale = -lambda / (2.0 * PI);
    for (o, &ap) in out.iter_mut().zip(&scenario.ap_positions[1..]) {
        *o = scale * (phase(ap) - p0);
    }
}

/// How the measurement residual `delta - h(x)` is formed.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ResidualMode {
    /// Each component reduced into `[-lambda/2, lambda/2)`, which removes
    /// the per-AP wrapping difference between measurement and model.
    #[default]
    Wrapped,
    /// The plain difference.
    Plain,
}

/// Inverse of the differential noise covariance, stored row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct Precision {
    n: usize,
    data: Vec<f64>,
}

impl Precision {
    pub fn identity(n: usize) -> Self {
        Precision::from_matrix(&DMatrix::identity(n, n))
    }

    fn from_matrix(m: &DMatrix<f64>) -> Self {
        let n = m.nrows();
        Precision {
            n,
            data: (0..n * n).map(|k| m[(k / n, k % n)]).collect(),
        }
    }

    /// Inverts a symmetric positive definite covariance.
    pub fn from_covariance(cov: &DMatrix<f64>) -> Result<Self> {
        let chol = cov
            .clone()
            .cholesky()
            .ok_or_else(|| CoreError::Numeric("covariance is not positive definite".into()))?;
        Ok(Precision::from_matrix(&chol.inverse()))
    }

    /// Precision for one (scenario, power) configuration. The path gains
    /// use the mean squared UE-AP distance over the area, so the weighting
    /// does not depend on the unknown UE position.
    pub fn for_configuration(scenario: &Scenario, budget: &LinkBudget) -> Result<Self> {
        let c = scenario.area_side / 2.0;
        let k = 4.0 * PI / scenario.wavelength;
        let inv_sq: Vec<f64> = scenario
            .ap_positions
            .iter()
            .map(|&ap| k * k * (dist([c, c], ap).powi(2) + scenario.area_side.powi(2) / 6.0))
            .collect();
        Precision::from_covariance(&covariance_from_inverse_gains(scenario.wavelength, budget, &inv_sq)?)
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    pub fn matrix(&self) -> DMatrix<f64> {
        DMatrix::from_row_slice(self.n, self.n, &self.data)
    }

    /// `r^T S r`, evaluated as `t = S r` followed by `r^T t`.
    pub fn quad_form(&self, r: &[f64]) -> f64 {
        let n = self.n;
        let mut acc = 0.0;
        for i in 0..n {
            let row = &self.data[i * n..(i + 1) * n];
            let mut t = row[0] * r[0];
            for j in 1..n {
                t += row[j] * r[j];
            }
            acc += r[i] * t;
        }
        acc
    }

    /// `S r`.
    fn apply(&self, r: &[f64]) -> Vec<f64> {
        (0..self.n)
            .map(|i| self.data[i * self.n..(i + 1) * self.n].iter().zip(r).map(|(a, b)| a * b).sum())
            .collect()
    }
}

/// Running count of floating-point additions, subtractions and
/// multiplications.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct FlopCounter {
    pub flops: u64,
}

impl FlopCounter {
    fn sub(&mut self, a: f64, b: f64) -> f64 {
        self.flops += 1;
        a - b
    }
    fn mul(&mut self, a: f64, b: f64) -> f64 {
        self.flops += 1;
        a * b
    }
    fn add(&mut self, a: f64, b: f64) -> f64 {
        self.flops += 1;
        a + b
    }
}

/// Objective for one lattice point with every arithmetic operation tallied:
/// `I-1` subtractions for the residual, `S r`, then `r^T (S r)`.
/// Wrapping of the residual is a modular reduction and is not counted.
pub fn nll_counted(
    delta: &[f64],
    h: &[f64],
    precision: &Precision,
    mode: ResidualMode,
    lambda: f64,
    counter: &mut FlopCounter,
) -> f64 {
    let n = precision.n;
    let r: Vec<f64> = delta
        .iter()
        .zip(h)
        .map(|(&d, &hm)| reduce(counter.sub(d, hm), mode, lambda))
        .collect();
    let mut t = vec![0.0; n];
    for i in 0..n {
        let row = &precision.data[i * n..(i + 1) * n];
        let mut acc = counter.mul(row[0], r[0]);
        for j in 1..n {
            let p = counter.mul(row[j], r[j]);
            acc = counter.add(acc, p);
        }
        t[i] = acc;
    }
    let mut out = counter.mul(r[0], t[0]);
    for i in 1..n {
        let p = counter.mul(r[i], t[i]);
        out = counter.add(out, p);
    }
    out
}

fn reduce(r: f64, mode: ResidualMode, lambda: f64) -> f64 {
    match mode {
        ResidualMode::Wrapped => wrap_length(r, lambda),
        ResidualMode::Plain => r,
    }
}

fn residual_into(delta: &[f64], h: &[f64], mode: ResidualMode, lambda: f64, out: &mut [f64]) {
    for ((o, &d), &hm) in out.iter_mut().zip(delta).zip(h) {
        *o = reduce(d - hm, mode, lambda);
    }
}

/// Negative log-likelihood (up to constants) `(delta - h(x))^T S (delta - h(x))`.
pub fn nll(delta: &[f64], x: [f64; 2], scenario: &Scenario, precision: &Precision, mode: ResidualMode) -> f64 {
    let h = h_model(x, scenario);
    let mut r = vec![0.0; h.len()];
    residual_into(delta, &h, mode, scenario.wavelength, &mut r);
    precision.quad_form(&r)
}

/// FLOPs of one likelihood evaluation, `2 I^2 - 2 I - 1`.
pub fn flops_per_point(ap_count: usize) -> u64 {
    let i = ap_count as u64;
    2 * i * i - 2 * i - 1
}

/// Cost of a full grid search, `n_grid (2 I^2 - 2 I - 1)`.
pub fn mle_flops(n_grid: usize, ap_count: usize) -> u64 {
    n_grid as u64 * flops_per_point(ap_count)
}

/// Smallest perfect-square grid whose search cost reaches `flop_budget`.
pub fn grid_for_budget(flop_budget: u64, ap_count: usize) -> Result<usize> {
    let per = flops_per_point(ap_count);
    if flop_budget < per {
        return Err(CoreError::config(
            "flop_budget",
            format!("{flop_budget} is below the cost of one grid point ({per})"),
        ));
    }
    let points = flop_budget.div_ceil(per);
    let mut side = points.isqrt();
    if side * side < points {
        side += 1;
    }
    Ok((side * side) as usize)
}

/// Uniform square lattice with points at cell centres.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct GridSpec {
    pub n_grid: usize,
}

impl GridSpec {
    pub fn new(n_grid: usize) -> Result<Self> {
        let side = n_grid.isqrt();
        if n_grid == 0 || side * side != n_grid {
            return Err(CoreError::config("n_grid", format!("{n_grid} is not a positive perfect square")));
        }
        Ok(GridSpec { n_grid })
    }

    pub fn with_side(side: usize) -> Result<Self> {
        GridSpec::new(side * side)
    }

    pub fn side_points(&self) -> usize {
        self.n_grid.isqrt()
    }

    /// Position of lattice point `index = row * side + col`.
    pub fn point(&self, index: usize, area_side: f64) -> [f64; 2] {
        let s = self.side_points();
        let h = area_side / s as f64;
        [((index % s) as f64 + 0.5) * h, ((index / s) as f64 + 0.5) * h]
    }
}

/// A lattice together with the model output at every point, so repeated
/// searches only pay for the likelihood.
#[derive(Clone, Debug)]
pub struct Grid {
    pub spec: GridSpec,
    area_side: f64,
    pairs: usize,
    h: Vec<f64>,
}

impl Grid {
    pub fn new(scenario: &Scenario, spec: GridSpec) -> Self {
        let pairs = scenario.pair_count();
        let mut h = vec![0.0; spec.n_grid * pairs];
        h.par_chunks_mut(pairs).enumerate().for_each(|(i, out)| {
            h_model_into(spec.point(i, scenario.area_side), scenario, out);
        });
        Grid {
            spec,
            area_side: scenario.area_side,
            pairs,
            h,
        }
    }

    pub fn point(&self, index: usize) -> [f64; 2] {
        self.spec.point(index, self.area_side)
    }

    fn h_at(&self, index: usize) -> &[f64] {
        &self.h[index * self.pairs..(index + 1) * self.pairs]
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GridHit {
    pub index: usize,
    pub position: [f64; 2],
    pub value: f64,
}

fn better(a: (usize, f64), b: (usize, f64)) -> (usize, f64) {
    // NaN objectives never win
    if b.1 < a.1 || (b.1 == a.1 && b.0 < a.0) || a.1.is_nan() {
        b
    } else {
        a
    }
}

fn scan(
    delta: &[f64],
    grid: &Grid,
    precision: &Precision,
    mode: ResidualMode,
    lambda: f64,
    range: std::ops::Range<usize>,
) -> (usize, f64) {
    let mut r = vec![0.0; grid.pairs];
    let mut best = (usize::MAX, f64::NAN);
    for i in range {
        residual_into(delta, grid.h_at(i), mode, lambda, &mut r);
        best = better(best, (i, precision.quad_form(&r)));
    }
    best
}

/// Exhaustive scan; ties go to the lowest linear index.
pub fn grid_search(delta: &[f64], grid: &Grid, precision: &Precision, mode: ResidualMode, lambda: f64) -> GridHit {
    let (index, value) = scan(delta, grid, precision, mode, lambda, 0..grid.spec.n_grid);
    GridHit {
        index,
        position: grid.point(index),
        value,
    }
}

/// Data-parallel scan with the same result as [`grid_search`].
pub fn grid_search_par(delta: &[f64], grid: &Grid, precision: &Precision, mode: ResidualMode, lambda: f64) -> GridHit {
    const CHUNK: usize = 4096;
    let chunks = grid.spec.n_grid.div_ceil(CHUNK);
    let (index, value) = (0..chunks)
        .into_par_iter()
        .map(|c| {
            let end = ((c + 1) * CHUNK).min(grid.spec.n_grid);
            scan(delta, grid, precision, mode, lambda, c * CHUNK..end)
        })
        .reduce(|| (usize::MAX, f64::NAN), better);
    GridHit {
        index,
        position: grid.point(index),
        value,
    }
}

/// Sequential scan that tallies every counted operation.
pub fn grid_search_counted(
    delta: &[f64],
    grid: &Grid,
    precision: &Precision,
    mode: ResidualMode,
    lambda: f64,
    counter: &mut FlopCounter,
) -> GridHit {
    let mut best = (usize::MAX, f64::NAN);
    for i in 0..grid.spec.n_grid {
        best = better(best, (i, nll_counted(delta, grid.h_at(i), precision, mode, lambda, counter)));
    }
    GridHit {
        index: best.0,
        position: grid.point(best.0),
        value: best.1,
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RefineConfig {
    pub steps: usize,
    /// First trial step length, meters.
    pub initial_step: f64,
    pub max_halvings: usize,
}

impl Default for RefineConfig {
    fn default() -> Self {
        RefineConfig {
            steps: 100,
            initial_step: 0.1,
            max_halvings: 20,
        }
    }
}

/// Offset applied when the gradient is undefined at an AP.
pub const AP_PERTURBATION: f64 = 1e-6;

/// Gradient of the objective, `-2 J^T S r` with `J_m = u_m - u_0` and `u_i`
/// the unit vector from AP `i` towards `x`.
pub fn nll_gradient(
    delta: &[f64],
    x: [f64; 2],
    scenario: &Scenario,
    precision: &Precision,
    mode: ResidualMode,
) -> [f64; 2] {
    let h = h_model(x, scenario);
    let mut r = vec![0.0; h.len()];
    residual_into(delta, &h, mode, scenario.wavelength, &mut r);
    let sr = precision.apply(&r);
    let unit = |ap: [f64; 2]| {
        let d = dist(x, ap);
        [(x[0] - ap[0]) / d, (x[1] - ap[1]) / d]
    };
    let u0 = unit(scenario.ap_positions[0]);
    let mut g = [0.0; 2];
    for (m, &ap) in scenario.ap_positions[1..].iter().enumerate() {
        let um = unit(ap);
        g[0] -= 2.0 * (um[0] - u0[0]) * sr[m];
        g[1] -= 2.0 * (um[1] - u0[1]) * sr[m];
    }
    g
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MleEstimate {
    pub position: [f64; 2],
    pub objective_value: f64,
    pub grid_argmin: [f64; 2],
    pub grid_objective: f64,
    pub refinement_steps_used: usize,
    /// Iterations whose line search found a decrease.
    pub accepted_steps: usize,
    pub flops_charged: u64,
}

/// Result of [`refine`]: final point and the objective after every step.
#[derive(Clone, Debug, PartialEq)]
pub struct Refined {
    pub position: [f64; 2],
    pub objective: Vec<f64>,
    pub accepted_steps: usize,
}

/// Gradient descent along the normalized negative gradient with a
/// backtracking line search. The trial step starts at twice the last
/// accepted length (capped at `initial_step`) and is halved until the
/// objective decreases; the objective sequence is non-increasing.
pub fn refine(
    x0: [f64; 2],
    delta: &[f64],
    scenario: &Scenario,
    precision: &Precision,
    mode: ResidualMode,
    cfg: &RefineConfig,
) -> Refined {
    let f = |x: [f64; 2]| nll(delta, x, scenario, precision, mode);
    let mut x = x0;
    let mut fx = f(x);
    let mut objective = Vec::with_capacity(cfg.steps + 1);
    objective.push(fx);
    let mut alpha = cfg.initial_step;
    let mut accepted = 0;
    for _ in 0..cfg.steps {
        let mut g = nll_gradient(delta, x, scenario, precision, mode);
        if !(g[0].is_finite() && g[1].is_finite()) {
            x[0] += AP_PERTURBATION;
            fx = f(x).min(fx);
            g = nll_gradient(delta, x, scenario, precision, mode);
        }
        let norm = g[0].hypot(g[1]);
        if norm == 0.0 || !norm.is_finite() {
            objective.push(fx);
            continue;
        }
        let dir = [-g[0] / norm, -g[1] / norm];
        let mut step = (2.0 * alpha).min(cfg.initial_step);
        let mut moved = false;
        for _ in 0..=cfg.max_halvings {
            let trial = [x[0] + step * dir[0], x[1] + step * dir[1]];
            let ft = f(trial);
            if ft < fx {
                x = trial;
                fx = ft;
                alpha = step;
                moved = true;
                break;
            }
            step *= 0.5;
        }
        if moved {
            accepted += 1;
        } else {
            alpha = step;
        }
        objective.push(fx);
    }
    Refined {
        position: x,
        objective,
        accepted_steps: accepted,
    }
}

/// Grid search followed by refinement, charging the grid-search cost.
pub fn estimate(
    delta: &[f64],
    scenario: &Scenario,
    grid: &Grid,
    precision: &Precision,
    mode: ResidualMode,
    cfg: &RefineConfig,
) -> MleEstimate {
    let hit = grid_search(delta, grid, precision, mode, scenario.wavelength);
    let refined = refine(hit.position, delta, scenario, precision, mode, cfg);
    MleEstimate {
        position: refined.position,
        objective_value: *refined.objective.last().expect("non-empty"),
        grid_argmin: hit.position,
        grid_objective: hit.value,
        refinement_steps_used: cfg.steps,
        accepted_steps: refined.accepted_steps,
        flops_charged: mle_flops(grid.spec.n_grid, scenario.ap_count()),
    }
}

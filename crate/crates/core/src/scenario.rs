//! Deployment geometry: evaluation area, AP positions, UE sampling and
//! differential ambiguity bounds.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::{CoreError, Result};

pub const SPEED_OF_LIGHT: f64 = 299_792_458.0;

/// Maximum number of rejected UE draws before giving up.
pub const MAX_UE_DRAWS: usize = 1_000_000;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScenarioConfig {
    pub area_side: f64,
    pub ap_count: usize,
    pub carrier_frequency: f64,
    pub min_ue_ap_distance: f64,
    pub rng_seed: u64,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        ScenarioConfig {
            area_side: 10.0,
            ap_count: 20,
            carrier_frequency: 800e6,
            min_ue_ap_distance: 0.1,
            rng_seed: 0,
        }
    }
}

impl ScenarioConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.area_side > 0.0 && self.area_side.is_finite()) {
            return Err(CoreError::config("area_side", "must be positive and finite"));
        }
        if self.ap_count < 2 {
            return Err(CoreError::config("ap_count", "need at least two APs"));
        }
        if !(self.carrier_frequency > 0.0 && self.carrier_frequency.is_finite()) {
            return Err(CoreError::config("carrier_frequency", "must be positive and finite"));
        }
        if !(self.min_ue_ap_distance >= 0.0 && self.min_ue_ap_distance.is_finite()) {
            return Err(CoreError::config("min_ue_ap_distance", "must be non-negative"));
        }
        Ok(())
    }
}

pub fn wavelength(carrier_frequency: f64) -> f64 {
    SPEED_OF_LIGHT / carrier_frequency
}

pub(crate) fn dist(a: [f64; 2], b: [f64; 2]) -> f64 {
    (a[0] - b[0]).hypot(a[1] - b[1])
}

/// A fixed AP deployment. AP 0 is the reference for all differential
/// quantities.
#[derive(Clone, Debug, PartialEq)]
pub struct Scenario {
    pub area_side: f64,
    pub ap_positions: Vec<[f64; 2]>,
    pub carrier_frequency: f64,
    pub min_ue_ap_distance: f64,
    pub seed: u64,
    pub wavelength: f64,
    pub reference_ap: usize,
    /// `q[m - 1]` bounds `|k_m|` for AP pair `(m, 0)`.
    pub q: Vec<u32>,
    pub label_count: usize,
}

impl Scenario {
    pub fn from_positions(
        area_side: f64,
        ap_positions: Vec<[f64; 2]>,
        carrier_frequency: f64,
        min_ue_ap_distance: f64,
        seed: u64,
    ) -> Result<Self> {
        ScenarioConfig {
            area_side,
            ap_count: ap_positions.len(),
            carrier_frequency,
            min_ue_ap_distance,
            rng_seed: seed,
        }
        .validate()?;
        if ap_positions
            .iter()
            .any(|p| !(0.0..=area_side).contains(&p[0]) || !(0.0..=area_side).contains(&p[1]))
        {
            return Err(CoreError::config("ap_positions", "every AP must lie inside the area"));
        }
        let lambda = wavelength(carrier_frequency);
        let q = ambiguity_bounds(&ap_positions, lambda);
        let label_count = q.iter().map(|&qm| 2 * qm as usize + 1).sum();
        Ok(Scenario {
            area_side,
            ap_positions,
            carrier_frequency,
            min_ue_ap_distance,
            seed,
            wavelength: lambda,
            reference_ap: 0,
            q,
            label_count,
        })
    }

    pub fn ap_count(&self) -> usize {
        self.ap_positions.len()
    }

    /// Number of differential measurements, `I - 1`.
    pub fn pair_count(&self) -> usize {
        self.ap_positions.len() - 1
    }

    /// Classes per ambiguity head, `2 q_m + 1`.
    pub fn class_counts(&self) -> Vec<usize> {
        self.q.iter().map(|&qm| 2 * qm as usize + 1).collect()
    }

    pub fn contains(&self, p: [f64; 2]) -> bool {
        (0.0..=self.area_side).contains(&p[0]) && (0.0..=self.area_side).contains(&p[1])
    }

    pub fn distances(&self, x: [f64; 2]) -> Vec<f64> {
        self.ap_positions.iter().map(|&ap| dist(x, ap)).collect()
    }

    fn to_file(&self) -> ScenarioFile {
        ScenarioFile {
            area_side: self.area_side,
            ap_positions: self.ap_positions.clone(),
            carrier_frequency: self.carrier_frequency,
            min_ue_ap_distance: self.min_ue_ap_distance,
            seed: self.seed,
            q: self.q.clone(),
            label_count: self.label_count,
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(&self.to_file()).expect("scenario serializes")
    }

    /// Parses a scenario and checks the stored bounds against the geometry.
    pub fn from_json(s: &str) -> Result<Self> {
        let f: ScenarioFile = serde_json::from_str(s)?;
        let sc = Scenario::from_positions(
            f.area_side,
            f.ap_positions,
            f.carrier_frequency,
            f.min_ue_ap_distance,
            f.seed,
        )?;
        if sc.q != f.q || sc.label_count != f.label_count {
            return Err(CoreError::Data(format!(
                "stored ambiguity bounds (Q = {}) disagree with the geometry (Q = {})",
                f.label_count, sc.label_count
            )));
        }
        Ok(sc)
    }

    /// SHA-256 of the canonical JSON form, hex encoded.
    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(self.to_json().as_bytes()))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json() + "\n").map_err(|e| CoreError::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let s = std::fs::read_to_string(path).map_err(|e| CoreError::io(path, e))?;
        Scenario::from_json(&s)
    }
}

#[derive(Serialize, Deserialize)]
struct ScenarioFile {
    area_side: f64,
    ap_positions: Vec<[f64; 2]>,
    carrier_frequency: f64,
    min_ue_ap_distance: f64,
    seed: u64,
    q: Vec<u32>,
    #[serde(rename = "Q")]
    label_count: usize,
}

/// `q_m = floor(|ap_m - ap_0| / lambda)` for `m = 1..I-1`.
pub fn ambiguity_bounds(ap_positions: &[[f64; 2]], lambda: f64) -> Vec<u32> {
    let reference = ap_positions[0];
    ap_positions[1..]
        .iter()
        .map(|&ap| (dist(ap, reference) / lambda).floor() as u32)
        .collect()
}

/// Draws `I` APs uniformly over the square.
pub fn generate_scenario<R: Rng>(cfg: &ScenarioConfig, rng: &mut R) -> Result<Scenario> {
    cfg.validate()?;
    let side = cfg.area_side;
    let positions = (0..cfg.ap_count)
        .map(|_| [rng.random::<f64>() * side, rng.random::<f64>() * side])
        .collect();
    Scenario::from_positions(side, positions, cfg.carrier_frequency, cfg.min_ue_ap_distance, cfg.rng_seed)
}

/// [`generate_scenario`] with a generator seeded from `cfg.rng_seed`.
pub fn generate_seeded(cfg: &ScenarioConfig) -> Result<Scenario> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.rng_seed);
    generate_scenario(cfg, &mut rng)
}

/// Uniform UE position at least `min_ue_ap_distance` from every AP.
pub fn sample_ue<R: Rng>(scenario: &Scenario, rng: &mut R) -> Result<[f64; 2]> {
    let side = scenario.area_side;
    sample_ue_with(scenario, || [rng.random::<f64>() * side, rng.random::<f64>() * side])
}

/// Rejection loop over candidate positions produced by `draw`.
pub fn sample_ue_with(scenario: &Scenario, mut draw: impl FnMut() -> [f64; 2]) -> Result<[f64; 2]> {
    let min = scenario.min_ue_ap_distance;
    for _ in 0..MAX_UE_DRAWS {
        let p = draw();
        if scenario.ap_positions.iter().all(|&ap| dist(p, ap) >= min) {
            return Ok(p);
        }
    }
    Err(CoreError::Data(format!(
        "no UE position found {min} m from every AP after {MAX_UE_DRAWS} draws"
    )))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn two_aps(b: [f64; 2]) -> Scenario {
        Scenario::from_positions(10.0, vec![[0.0, 0.0], b], 800e6, 0.1, 0).unwrap()
    }

    #[test]
    fn wavelength_at_800_mhz() {
        assert!((wavelength(800e6) - 0.374_740_572_5).abs() < 1e-10);
    }

    #[test]
    fn bound_from_three_meter_baseline() {
        let s = two_aps([3.0, 0.0]);
        assert_eq!(s.q, vec![8]);
        assert_eq!(s.label_count, 17);
    }

    #[test]
    fn coincident_aps_have_zero_bound() {
        let s = Scenario::from_positions(10.0, vec![[4.0, 4.0], [4.0, 4.0]], 800e6, 0.1, 0).unwrap();
        assert_eq!(s.q, vec![0]);
        assert_eq!(s.label_count, 1);
    }

    #[test]
    fn default_scenario_has_nineteen_bounds() {
        let s = generate_seeded(&ScenarioConfig::default()).unwrap();
        assert_eq!(s.q.len(), 19);
        assert_eq!(s.label_count, s.q.iter().map(|&q| 2 * q as usize + 1).sum::<usize>());
    }

    #[test]
    fn config_errors_name_the_field() {
        let cfg = ScenarioConfig {
            ap_count: 1,
            ..ScenarioConfig::default()
        };
        match generate_seeded(&cfg) {
            Err(CoreError::Config { field, .. }) => assert_eq!(field, "ap_count"),
            other => panic!("unexpected {other:?}"),
        }
        let cfg = ScenarioConfig {
            carrier_frequency: 0.0,
            ..ScenarioConfig::default()
        };
        assert!(matches!(
            cfg.validate(),
            Err(CoreError::Config {
                field: "carrier_frequency",
                ..
            })
        ));
    }

    #[test]
    fn ue_on_an_ap_is_redrawn() {
        let s = two_aps([3.0, 4.0]);
        let mut draws = vec![[3.0, 4.0], [3.05, 4.0], [6.0, 6.0]].into_iter();
        let p = sample_ue_with(&s, || draws.next().unwrap()).unwrap();
        assert_eq!(p, [6.0, 6.0]);
    }

    #[test]
    fn rejection_loop_gives_up() {
        let s = two_aps([3.0, 4.0]);
        assert!(matches!(sample_ue_with(&s, || [0.0, 0.0]), Err(CoreError::Data(_))));
    }

    #[test]
    fn json_roundtrip_and_hash() {
        let s = generate_seeded(&ScenarioConfig::default()).unwrap();
        let back = Scenario::from_json(&s.to_json()).unwrap();
        assert_eq!(back, s);
        assert_eq!(back.hash(), s.hash());
        assert_eq!(s.hash().len(), 64);
    }

    #[test]
    fn tampered_bounds_are_rejected() {
        let s = two_aps([3.0, 0.0]);
        let json = s.to_json().replace("\"q\":[8]", "\"q\":[7]");
        assert!(matches!(Scenario::from_json(&json), Err(CoreError::Data(_))));
    }
}

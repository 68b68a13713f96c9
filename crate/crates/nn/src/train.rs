//! Mini-batch training with Adam, L2 and scheduled magnitude pruning.

use ndarray::{s, Array2};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::loss::{self, Targets};
use crate::network::gather_rows;
use crate::prune::{apply_pruning, sparsity_at_epoch};
use crate::{Adam, AdamConfig, Network, NnError, Result, Scalar};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub epochs: usize,
    pub learning_rate: f64,
    pub l2_coeff: f64,
    pub prune_start_epoch: usize,
    pub prune_end_epoch: usize,
    /// Final fraction of pruned weights per layer.
    pub target_sparsity: f64,
    pub decay_power: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 1000,
            epochs: 1000,
            learning_rate: 1e-4,
            l2_coeff: 1e-5,
            prune_start_epoch: 100,
            prune_end_epoch: 400,
            target_sparsity: 0.0,
            decay_power: 3.0,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let err = |m: &str| Err(NnError::Config(m.to_string()));
        if self.batch_size == 0 {
            return err("batch_size must be positive");
        }
        if self.epochs == 0 {
            return err("epochs must be positive");
        }
        if !(self.learning_rate > 0.0) {
            return err("learning_rate must be positive");
        }
        if !(self.l2_coeff >= 0.0) {
            return err("l2_coeff must be non-negative");
        }
        if !(0.0..1.0).contains(&self.target_sparsity) {
            return err("target_sparsity must be in [0, 1)");
        }
        if self.prune_start_epoch >= self.prune_end_epoch || self.prune_end_epoch > self.epochs {
            return err("need prune_start_epoch < prune_end_epoch <= epochs");
        }
        if !(self.decay_power > 0.0) {
            return err("decay_power must be positive");
        }
        Ok(())
    }
}

/// A supervised data set held in `f64` and cast to the network scalar per batch.
#[derive(Clone, Debug)]
pub struct TrainData {
    pub inputs: Array2<f64>,
    pub targets: Targets,
}

impl TrainData {
    pub fn new(inputs: Array2<f64>, targets: Targets) -> Result<Self> {
        if inputs.nrows() != targets.len() {
            return Err(NnError::Shape(format!(
                "{} inputs vs {} targets",
                inputs.nrows(),
                targets.len()
            )));
        }
        Ok(TrainData { inputs, targets })
    }

    pub fn len(&self) -> usize {
        self.inputs.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: Option<f64>,
    pub sparsity: f64,
}

/// Everything needed to continue a run. Resuming from a saved state yields
/// the same weights as an uninterrupted run.
#[derive(Clone, Debug)]
pub struct TrainerState<T> {
    pub network: Network<T>,
    pub optimizer: Adam<T>,
    pub next_epoch: usize,
    pub history: Vec<EpochRecord>,
}

impl<T: Scalar> TrainerState<T> {
    pub fn new(network: Network<T>, cfg: &TrainConfig) -> Self {
        let optimizer = Adam::new(&network, AdamConfig::with_learning_rate(cfg.learning_rate));
        TrainerState {
            network,
            optimizer,
            next_epoch: 0,
            history: Vec::new(),
        }
    }
}

/// Called after every epoch; an error aborts training.
pub trait TrainObserver<T> {
    fn on_epoch_end(&mut self, state: &TrainerState<T>) -> Result<()>;
}

impl<T> TrainObserver<T> for () {
    fn on_epoch_end(&mut self, _: &TrainerState<T>) -> Result<()> {
        Ok(())
    }
}

impl<T, F: FnMut(&TrainerState<T>) -> Result<()>> TrainObserver<T> for F {
    fn on_epoch_end(&mut self, state: &TrainerState<T>) -> Result<()> {
        self(state)
    }
}

fn epoch_order(seed: u64, epoch: usize, n: usize) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch as u64);
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut rng);
    idx
}

fn cast_rows<T: Scalar>(a: &Array2<f64>) -> Array2<T> {
    a.mapv(T::of_f64)
}

/// Mean data loss over `data`, evaluated in chunks of `batch_size`.
pub fn evaluate_loss<T: Scalar>(net: &Network<T>, data: &TrainData, batch_size: usize) -> Result<f64> {
    let n = data.len();
    let mut total = 0.0;
    let mut start = 0;
    while start < n {
        let end = (start + batch_size).min(n);
        let x: Array2<T> = cast_rows(&data.inputs.slice(s![start..end, ..]).to_owned());
        let rows: Vec<usize> = (start..end).collect();
        let t = data.targets.select(&rows);
        let trace = net.forward(x.view())?;
        total += loss::data_loss(&trace.outputs(), &t, net.spec().loss)? * (end - start) as f64;
        start = end;
    }
    Ok(total / n.max(1) as f64)
}

/// Runs the remaining epochs of `state`.
///
/// Pruning is applied at each epoch boundary in
/// `[prune_start_epoch, prune_end_epoch]`; afterwards masks are frozen and
/// the sparse network keeps training. Returns an error on a non-finite batch
/// loss.
pub fn train<T: Scalar>(
    state: &mut TrainerState<T>,
    data: &TrainData,
    validation: Option<&TrainData>,
    cfg: &TrainConfig,
    observer: &mut dyn TrainObserver<T>,
) -> Result<()> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(NnError::Config("empty training set".into()));
    }
    state.optimizer.config.learning_rate = cfg.learning_rate;
    let prune_window = cfg.prune_start_epoch..=cfg.prune_end_epoch;
    for epoch in state.next_epoch..cfg.epochs {
        if cfg.target_sparsity > 0.0 && prune_window.contains(&epoch) {
            apply_pruning(&mut state.network, sparsity_at_epoch(cfg, epoch));
        }
        let order = epoch_order(cfg.seed, epoch, data.len());
        let mut total = 0.0;
        for (batch, rows) in order.chunks(cfg.batch_size).enumerate() {
            let x: Array2<T> = cast_rows(&gather_rows(&data.inputs, rows));
            let t = data.targets.select(rows);
            let trace = state.network.forward(x.view())?;
            let l = loss::data_loss(&trace.outputs(), &t, state.network.spec().loss)?;
            if !l.is_finite() {
                return Err(NnError::Diverged { epoch, batch });
            }
            total += l * rows.len() as f64;
            let grads = state.network.backward(&trace, &t, cfg.l2_coeff)?;
            state.optimizer.step(&mut state.network, &grads);
        }
        if cfg.target_sparsity > 0.0 && epoch + 1 == cfg.epochs && prune_window.contains(&cfg.epochs) {
            apply_pruning(&mut state.network, sparsity_at_epoch(cfg, cfg.epochs));
        }
        let val_loss = match validation {
            Some(v) if !v.is_empty() => Some(evaluate_loss(&state.network, v, cfg.batch_size)?),
            _ => None,
        };
        let pruned: usize = state.network.params.iter().map(|p| p.pruned_count()).sum();
        let weights: usize = state.network.params.iter().map(|p| p.weight.len()).sum();
        state.history.push(EpochRecord {
            epoch,
            train_loss: total / data.len() as f64,
            val_loss,
            sparsity: pruned as f64 / weights as f64,
        });
        state.next_epoch = epoch + 1;
        observer.on_epoch_end(state)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::{Activation, LayerSpec, Loss, NetworkSpec};

    #[test]
    fn rejects_bad_schedule() {
        let cfg = TrainConfig {
            epochs: 10,
            ..TrainConfig::default()
        };
        assert!(matches!(cfg.validate(), Err(NnError::Config(_))));
    }

    #[test]
    fn epoch_order_is_a_seeded_permutation() {
        let a = epoch_order(7, 3, 100);
        let b = epoch_order(7, 3, 100);
        let c = epoch_order(7, 4, 100);
        assert_eq!(a, b);
        assert_ne!(a, c);
        let mut sorted = a.clone();
        sorted.sort();
        assert_eq!(sorted, (0..100).collect::<Vec<_>>());
    }

    #[test]
    fn linear_fit_of_doubling_map() {
        let spec = NetworkSpec {
            input_dim: 1,
            layers: vec![LayerSpec::dense(1, 1, Activation::Linear)],
            loss: Loss::Mse,
        };
        let x = Array2::from_shape_fn((100, 1), |(i, _)| i as f64 / 50.0 - 1.0);
        let y = x.mapv(|v| 2.0 * v);
        let data = TrainData::new(x, Targets::Regression(y)).unwrap();
        let cfg = TrainConfig {
            batch_size: 100,
            epochs: 2000,
            learning_rate: 1e-2,
            l2_coeff: 0.0,
            prune_start_epoch: 0,
            prune_end_epoch: 1,
            ..TrainConfig::default()
        };
        let mut state = TrainerState::new(Network::<f64>::init(spec, 1).unwrap(), &cfg);
        train(&mut state, &data, None, &cfg, &mut ()).unwrap();
        assert_eq!(state.history.len(), 2000);
        assert!(state.history.last().unwrap().train_loss < 1e-6);
    }
}

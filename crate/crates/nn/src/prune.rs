//! Layerwise magnitude pruning and its polynomial-decay schedule.

use crate::{Network, Scalar, TrainConfig};

/// Target sparsity at an epoch boundary: zero before `prune_start_epoch`,
/// `target * (1 - (1 - progress)^power)` while pruning, `target` afterwards.
pub fn sparsity_at_epoch(cfg: &TrainConfig, epoch: usize) -> f64 {
    let start = cfg.prune_start_epoch;
    let end = cfg.prune_end_epoch;
    if epoch <= start || cfg.target_sparsity == 0.0 {
        return 0.0;
    }
    if epoch >= end {
        return cfg.target_sparsity;
    }
    let progress = (epoch - start) as f64 / (end - start) as f64;
    cfg.target_sparsity * (1.0 - (1.0 - progress).powf(cfg.decay_power))
}

/// Masks the `floor(sparsity * n)` smallest-magnitude weights of every layer.
///
/// Biases are never pruned. Masks only grow: weights pruned earlier stay
/// pruned, and the remaining quota is filled from the live weights with the
/// smallest magnitude (ties go to the lower index).
pub fn apply_pruning<T: Scalar>(net: &mut Network<T>, sparsity: f64) {
    assert!((0.0..1.0).contains(&sparsity), "sparsity must be in [0, 1)");
    for p in net.params.iter_mut() {
        let n = p.weight.len();
        let target = (sparsity * n as f64).floor() as usize;
        let already = p.pruned_count();
        if target <= already {
            continue;
        }
        let mut live: Vec<(usize, T)> = p
            .weight
            .iter()
            .zip(p.mask.iter())
            .enumerate()
            .filter(|(_, (_, &m))| m != T::zero())
            .map(|(i, (&w, _))| (i, w.abs()))
            .collect();
        live.sort_by(|a, b| a.1.partial_cmp(&b.1).unwrap_or(std::cmp::Ordering::Equal).then(a.0.cmp(&b.0)));
        let cols = p.weight.ncols();
        for &(i, _) in live.iter().take(target - already) {
            let idx = (i / cols, i % cols);
            p.mask[idx] = T::zero();
            p.weight[idx] = T::zero();
        }
    }
}

/// Fraction of pruned weights in each parameter block.
pub fn layer_sparsities<T: Scalar>(net: &Network<T>) -> Vec<f64> {
    net.params.iter().map(|p| p.sparsity()).collect()
}

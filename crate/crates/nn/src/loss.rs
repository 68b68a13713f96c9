//! Losses and their gradients with respect to the head pre-activations.

use ndarray::{Array2, Zip};
use serde::{Deserialize, Serialize};

use crate::{Loss, NnError, Result, Scalar};

/// Probabilities are floored here before taking the logarithm.
pub const PROB_FLOOR: f64 = 1e-12;

/// Supervision for one batch.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum Targets {
    /// `(batch, outputs)` regression targets.
    Regression(Array2<f64>),
    /// `(batch, branches)` class indices, one per softmax head.
    Classes(Array2<usize>),
}

impl Targets {
    pub fn len(&self) -> usize {
        match self {
            Targets::Regression(t) => t.nrows(),
            Targets::Classes(t) => t.nrows(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn select(&self, rows: &[usize]) -> Targets {
        match self {
            Targets::Regression(t) => Targets::Regression(crate::network::gather_rows(t, rows)),
            Targets::Classes(t) => Targets::Classes(crate::network::gather_rows(t, rows)),
        }
    }
}

/// Mean over batch and output dimensions of the squared error.
pub fn mse_loss<T: Scalar>(pred: &Array2<T>, target: &Array2<f64>) -> Result<f64> {
    if pred.dim() != target.dim() {
        return Err(NnError::Shape(format!(
            "prediction {:?} vs target {:?}",
            pred.dim(),
            target.dim()
        )));
    }
    let n = pred.len().max(1) as f64;
    let sum: f64 = pred
        .iter()
        .zip(target.iter())
        .map(|(&p, &t)| {
            let e = p.as_f64() - t;
            e * e
        })
        .sum();
    Ok(sum / n)
}

/// Sparse categorical cross-entropy averaged over branches and batch:
/// `-(1/M) sum_m ln p_{m, label_m}` per sample.
pub fn scce_loss<T: Scalar>(probs: &[&Array2<T>], labels: &Array2<usize>) -> Result<f64> {
    check_labels(probs, labels)?;
    let batch = labels.nrows();
    let branches = probs.len();
    let mut total = 0.0;
    for (m, p) in probs.iter().enumerate() {
        for b in 0..batch {
            let v = p[[b, labels[[b, m]]]].as_f64().max(PROB_FLOOR);
            total -= v.ln();
        }
    }
    Ok(total / (branches as f64 * batch.max(1) as f64))
}

fn check_labels<T>(probs: &[&Array2<T>], labels: &Array2<usize>) -> Result<()> {
    if labels.ncols() != probs.len() {
        return Err(NnError::Shape(format!(
            "{} label columns for {} branches",
            labels.ncols(),
            probs.len()
        )));
    }
    for (m, p) in probs.iter().enumerate() {
        if p.nrows() != labels.nrows() {
            return Err(NnError::Shape("label rows do not match batch".into()));
        }
        if let Some(&bad) = labels.column(m).iter().find(|&&l| l >= p.ncols()) {
            return Err(NnError::LabelOutOfRange {
                branch: m,
                label: bad,
                classes: p.ncols(),
            });
        }
    }
    Ok(())
}

pub(crate) fn data_loss<T: Scalar>(outputs: &[&Array2<T>], targets: &Targets, loss: Loss) -> Result<f64> {
    match (loss, targets) {
        (Loss::Mse, Targets::Regression(t)) => mse_loss(outputs[0], t),
        (Loss::Scce, Targets::Classes(l)) => scce_loss(outputs, l),
        _ => Err(NnError::Shape("targets do not match the network loss".into())),
    }
}

/// Gradient of the data loss with respect to each head's pre-activation
/// for the fused softmax/cross-entropy case, and with respect to the head
/// output for MSE.
pub(crate) fn head_gradients<T: Scalar>(
    outputs: &[&Array2<T>],
    targets: &Targets,
    loss: Loss,
) -> Result<Vec<Array2<T>>> {
    match (loss, targets) {
        (Loss::Mse, Targets::Regression(t)) => {
            let y = outputs[0];
            if y.dim() != t.dim() {
                return Err(NnError::Shape(format!("prediction {:?} vs target {:?}", y.dim(), t.dim())));
            }
            let scale = T::of_f64(2.0 / y.len() as f64);
            let mut g = Array2::<T>::zeros(y.dim());
            Zip::from(&mut g)
                .and(y)
                .and(t)
                .for_each(|g, &y, &t| *g = scale * (y - T::of_f64(t)));
            Ok(vec![g])
        }
        (Loss::Scce, Targets::Classes(labels)) => {
            check_labels(outputs, labels)?;
            let scale = T::of_f64(1.0 / (outputs.len() as f64 * labels.nrows() as f64));
            Ok(outputs
                .iter()
                .enumerate()
                .map(|(m, p)| {
                    let mut g = p.mapv(|v| v * scale);
                    for (b, &l) in labels.column(m).iter().enumerate() {
                        g[[b, l]] = g[[b, l]] - scale;
                    }
                    g
                })
                .collect())
        }
        _ => Err(NnError::Shape("targets do not match the network loss".into())),
    }
}

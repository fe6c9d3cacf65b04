//! Epoch loop shared by the training experiments.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::neuralnet::Adam;
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Loss at the parameters in force during the epoch; NaN when the
    /// forward or backward pass produced non-finite values.
    pub loss: f64,
    pub finite: bool,
    pub lr: f64,
    pub seconds: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainingCurve {
    pub solver: String,
    pub epochs: Vec<EpochRecord>,
    pub nonfinite_epochs: usize,
}

impl TrainingCurve {
    /// Loss of the last epoch, `+inf` when it was not finite.
    pub fn final_loss(&self) -> f64 {
        self.epochs
            .last()
            .map(|e| if e.finite { e.loss } else { f64::INFINITY })
            .unwrap_or(f64::INFINITY)
    }

    pub fn loss(&self, epoch: usize) -> Option<f64> {
        self.epochs.get(epoch).map(|e| e.loss)
    }
}

/// Result of one epoch's forward and backward passes.
pub(crate) struct EpochOutcome {
    pub loss: f64,
    pub grads: Vec<f64>,
}

/// Runs `epochs` epochs. A non-finite loss or gradient, or a solver blow-up,
/// marks the epoch and skips its parameter update; other errors abort.
pub(crate) fn train<F>(solver: &str, epochs: usize, params: &mut [f64], adam: &mut Adam, mut epoch_fn: F) -> Result<TrainingCurve>
where
    F: FnMut(&[f64], usize) -> Result<EpochOutcome>,
{
    let mut curve = TrainingCurve {
        solver: solver.to_string(),
        epochs: Vec::with_capacity(epochs),
        nonfinite_epochs: 0,
    };
    for epoch in 0..epochs {
        let start = Instant::now();
        let lr = adam.current_lr();
        let outcome = match epoch_fn(params, epoch) {
            Ok(o) => Some(o),
            Err(Error::BlowUp { .. }) => None,
            Err(e) => return Err(e),
        };
        let finite = outcome
            .as_ref()
            .is_some_and(|o| o.loss.is_finite() && o.grads.iter().all(|g| g.is_finite()));
        let loss = outcome.as_ref().map_or(f64::NAN, |o| o.loss);
        if finite {
            let o = outcome.expect("finite outcome");
            adam.step(params, &o.grads)?;
        } else {
            curve.nonfinite_epochs += 1;
        }
        curve.epochs.push(EpochRecord {
            epoch,
            loss: if finite { loss } else { f64::NAN },
            finite,
            lr,
            seconds: start.elapsed().as_secs_f64(),
        });
    }
    Ok(curve)
}

/// CSV with one loss column per curve.
pub(crate) fn loss_table(curves: &[TrainingCurve]) -> String {
    let mut out = String::from("epoch");
    for c in curves {
        out.push_str(&format!(",{}", c.solver));
    }
    out.push('\n');
    let n = curves.iter().map(|c| c.epochs.len()).max().unwrap_or(0);
    for e in 0..n {
        out.push_str(&e.to_string());
        for c in curves {
            out.push_str(&format!(",{}", c.loss(e).map_or(String::new(), |l| l.to_string())));
        }
        out.push('\n');
    }
    out
}

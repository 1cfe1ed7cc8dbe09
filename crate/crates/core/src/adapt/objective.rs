//! Entropy objective and entropy-threshold sample selection.

use super::AdaptError;
use crate::loss::{entropy, row_entropies};
use crate::tensor::{Tape, Tensor, Var};

/// Default selection threshold as a fraction of `ln C`.
pub const DEFAULT_E0_FACTOR: f64 = 0.4;

/// Mean prediction entropy over samples with non-zero weight, each scaled
/// by its weight: `Σ wᵢ·H(pᵢ) / |{i : wᵢ > 0}|`. Without weights this is
/// the plain batch mean.
pub fn entropy_loss(tape: &mut Tape, logits: Var, weights: Option<&[f64]>) -> Result<Var, AdaptError> {
    let h = row_entropies(tape, logits)?;
    let n = tape.value(h).len();
    let Some(w) = weights else {
        return Ok(tape.mean(h));
    };
    if w.len() != n {
        return Err(AdaptError::Contract(format!("{} weights for a batch of {n}", w.len())));
    }
    let selected = w.iter().filter(|&&v| v > 0.0).count();
    if selected == 0 {
        return Err(AdaptError::NoSelectedSamples);
    }
    let wv = tape.constant(vec![n], w.to_vec())?;
    let weighted = tape.mul(h, wv)?;
    let total = tape.sum(weighted);
    Ok(tape.mul_scalar(total, 1.0 / selected as f64))
}

#[derive(Clone, Debug, PartialEq)]
pub struct Selection {
    pub mask: Vec<bool>,
    /// `exp(E0 − H)` (or 1 without weighting) for selected samples, 0
    /// otherwise.
    pub weights: Vec<f64>,
    pub threshold: f64,
}

impl Selection {
    pub fn fraction(&self) -> f64 {
        self.mask.iter().filter(|&&m| m).count() as f64 / self.mask.len() as f64
    }
}

/// Keeps samples whose prediction entropy is below `E0 = e0_factor · ln C`.
pub fn select_samples(logits: &Tensor, e0_factor: f64, weighting: bool) -> Selection {
    let classes = logits.cols();
    let threshold = e0_factor * (classes as f64).ln();
    let mut mask = Vec::with_capacity(logits.rows());
    let mut weights = Vec::with_capacity(logits.rows());
    for i in 0..logits.rows() {
        let h = entropy(logits.row(i));
        let keep = h < threshold;
        mask.push(keep);
        weights.push(match (keep, weighting) {
            (false, _) => 0.0,
            (true, true) => (threshold - h).exp(),
            (true, false) => 1.0,
        });
    }
    Selection {
        mask,
        weights,
        threshold,
    }
}

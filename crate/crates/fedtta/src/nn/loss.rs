use ndarray::Array1;

use super::clamp_prob;
use crate::{Error, Result};

/// Mean binary cross-entropy and its gradient with respect to p.
///
/// `loss = -mean(y*ln(p) + (1-y)*ln(1-p))` with p clamped away from {0, 1}.
pub fn bce_loss(p: &Array1<f64>, y: &Array1<f64>) -> Result<(f64, Array1<f64>)> {
    if p.is_empty() {
        return Err(Error::EmptyInput("bce_loss on empty batch".into()));
    }
    if p.len() != y.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} probabilities vs {} labels",
            p.len(),
            y.len()
        )));
    }
    if let Some(&bad) = y.iter().find(|&&v| v != 0.0 && v != 1.0) {
        return Err(Error::InvalidLabel(bad));
    }
    let n = p.len() as f64;
    let mut loss = 0.0;
    let mut grad = Array1::zeros(p.len());
    for (i, (&pi, &yi)) in p.iter().zip(y.iter()).enumerate() {
        let pc = clamp_prob(pi);
        loss -= yi * pc.ln() + (1.0 - yi) * (1.0 - pc).ln();
        grad[i] = -(yi / pc - (1.0 - yi) / (1.0 - pc)) / n;
    }
    Ok((loss / n, grad))
}

/// Mean Shannon entropy of Bernoulli predictions and its gradient.
///
/// `H = -mean(p*ln(p) + (1-p)*ln(1-p))`, the quantity test-time adaptation
/// minimizes. Zero gradient exactly at p = 0.5.
pub fn entropy_loss(p: &Array1<f64>) -> Result<(f64, Array1<f64>)> {
    if p.is_empty() {
        return Err(Error::EmptyInput("entropy_loss on empty batch".into()));
    }
    let n = p.len() as f64;
    let mut h = 0.0;
    let mut grad = Array1::zeros(p.len());
    for (i, &pi) in p.iter().enumerate() {
        let pc = clamp_prob(pi);
        h -= pc * pc.ln() + (1.0 - pc) * (1.0 - pc).ln();
        grad[i] = -(pc.ln() - (1.0 - pc).ln()) / n;
    }
    Ok((h / n, grad))
}

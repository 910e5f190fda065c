use serde::{Deserialize, Serialize};

use crate::diff::Var;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Class prior vector `h`: strictly positive and summing to one.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Priors(Vec<f64>);

impl Priors {
    pub fn new(h: Vec<f64>) -> Result<Self> {
        if h.is_empty() {
            return Err(Error::Config("empty prior vector".into()));
        }
        if let Some((c, v)) = h
            .iter()
            .enumerate()
            .find(|(_, &v)| !(v.is_finite() && v > 0.0))
        {
            return Err(Error::Config(format!(
                "prior of class {c} must be > 0, got {v}"
            )));
        }
        let total: f64 = h.iter().sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(Error::Config(format!("priors sum to {total}, expected 1")));
        }
        Ok(Self(h))
    }

    pub fn uniform(c: usize) -> Self {
        Self(vec![1.0 / c as f64; c])
    }

    /// Normalized histogram of `labels`; every class must occur.
    pub fn from_labels(labels: &[usize], num_classes: usize) -> Result<Self> {
        let mut counts = vec![0usize; num_classes];
        for &y in labels {
            counts[y] += 1;
        }
        let n = labels.len() as f64;
        Self::new(counts.iter().map(|&k| k as f64 / n).collect())
    }

    /// Batch frequencies floored at `1/(|B|·C)` and renormalized, so absent
    /// classes stay finite.
    pub fn from_batch(labels: &[usize], num_classes: usize) -> Result<Self> {
        if labels.is_empty() {
            return Err(Error::Contract("prior from an empty batch".into()));
        }
        let mut counts = vec![0usize; num_classes];
        for &y in labels {
            counts[y] += 1;
        }
        let n = labels.len() as f64;
        let floor = 1.0 / (n * num_classes as f64);
        let raw: Vec<f64> = counts.iter().map(|&k| (k as f64 / n).max(floor)).collect();
        let total: f64 = raw.iter().sum();
        Self::new(raw.into_iter().map(|v| v / total).collect())
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn log_row(&self) -> Tensor {
        Tensor::from_raw(1, self.0.len(), self.0.iter().map(|v| v.ln()).collect())
    }
}

/// Mean cross-entropy of prior-compensated logits `g(f_i) + log h`.
pub fn lc_loss<'t>(logits: Var<'t>, labels: &[usize], priors: &Priors) -> Result<Var<'t>> {
    let (n, c) = logits.shape();
    if n == 0 {
        return Err(Error::Contract(
            "logit-compensation loss on an empty batch".into(),
        ));
    }
    if labels.len() != n {
        return Err(Error::Contract(format!(
            "{} labels for {n} logit rows",
            labels.len()
        )));
    }
    if priors.len() != c {
        return Err(Error::Config(format!(
            "{} priors for {c} classes",
            priors.len()
        )));
    }
    let mut pick = Tensor::zeros(n, c);
    for (i, &y) in labels.iter().enumerate() {
        if y >= c {
            return Err(Error::Contract(format!(
                "label {y} out of range for {c} classes"
            )));
        }
        pick.set(i, y, 1.0);
    }
    let tape = logits.tape();
    let shifted = logits.add_row(tape.constant(priors.log_row()))?;
    let log_p = shifted.log_softmax_rows();
    Ok(log_p.mul(tape.constant(pick))?.sum().scale(-1.0 / n as f64))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diff::Tape;

    fn eval(logits: Tensor, labels: &[usize], h: &[f64]) -> f64 {
        let tape = Tape::new();
        lc_loss(tape.leaf(logits), labels, &Priors::new(h.to_vec()).unwrap())
            .unwrap()
            .item()
    }

    #[test]
    fn uniform_zero_logits() {
        let v = eval(Tensor::zeros(3, 2), &[0, 1, 0], &[0.5, 0.5]);
        assert!((v - 2f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn skewed_priors() {
        let v = eval(Tensor::zeros(4, 2), &[0, 0, 0, 1], &[0.75, 0.25]);
        let expected = (3.0 * -(0.75f64.ln()) - 0.25f64.ln()) / 4.0;
        assert!((v - expected).abs() < 1e-15);
    }

    #[test]
    fn single_sample_softmax() {
        let logits = Tensor::from_rows(&[vec![2f64.ln(), 0.0]]).unwrap();
        let v = eval(logits, &[0], &[0.5, 0.5]);
        assert!((v + (2.0f64 / 3.0).ln()).abs() < 1e-15);
    }

    #[test]
    fn bad_priors_are_config_errors() {
        assert!(matches!(Priors::new(vec![0.0, 1.0]), Err(Error::Config(_))));
        assert!(matches!(Priors::new(vec![0.4, 0.4]), Err(Error::Config(_))));
    }

    #[test]
    fn batch_priors_floor_absent_classes() {
        let h = Priors::from_batch(&[0, 0, 0, 1], 3).unwrap();
        assert!(h.values()[2] > 0.0);
        assert!((h.values().iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }
}

//! Supervised cross-entropy, the smooth-L1 embedding regression loss and
//! their weighted sum.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{ClassProbs, EmbeddingBlock, Real};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    /// Knee of the smooth-L1 loss.
    pub beta: f64,
    /// Weight of the embedding regression term in the composite loss.
    pub lambda_weight: f64,
    /// Floor applied to probabilities before taking the logarithm.
    pub log_epsilon: f64,
    /// Standardize each teacher target block before regression.
    pub normalize_targets: bool,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            beta: 0.5,
            lambda_weight: 1.0,
            log_epsilon: 1e-12,
            normalize_targets: false,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.beta > 0.0 && self.beta.is_finite()) {
            return Err(Error::config("loss.beta", "must be positive"));
        }
        if !(self.lambda_weight >= 0.0 && self.lambda_weight.is_finite()) {
            return Err(Error::config("loss.lambda_weight", "must be non-negative"));
        }
        if !(self.log_epsilon > 0.0 && self.log_epsilon < 1.0) {
            return Err(Error::config("loss.log_epsilon", "must lie in (0, 1)"));
        }
        Ok(())
    }
}

/// Label stored as the index of its single hot entry.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct OneHotLabel {
    pub class: usize,
    pub classes: usize,
}

impl OneHotLabel {
    pub fn new(class: usize, classes: usize) -> Result<Self> {
        if class >= classes {
            return Err(Error::BadSpec(format!("label {class} outside {classes} classes")));
        }
        Ok(Self { class, classes })
    }

    pub fn to_vec(&self) -> Vec<f64> {
        let mut v = vec![0.0; self.classes];
        v[self.class] = 1.0;
        v
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub ce: f64,
    pub d2v: f64,
    pub composite: f64,
    pub batch_size: usize,
}

impl LossReport {
    pub fn new(ce: f64, d2v: f64, batch_size: usize, config: &LossConfig) -> Self {
        Self {
            ce,
            d2v,
            composite: ce + config.lambda_weight * d2v,
            batch_size,
        }
    }
}

/// Mean over the batch of `-ln(max(p_true, eps))`.
pub fn cross_entropy<T: Real>(
    probs: &[ClassProbs<T>],
    labels: &[OneHotLabel],
    config: &LossConfig,
) -> Result<f64> {
    if probs.len() != labels.len() || probs.is_empty() {
        return Err(Error::BatchMismatch {
            left: probs.len(),
            right: labels.len(),
        });
    }
    let mut total = 0.0;
    for (p, y) in probs.iter().zip(labels) {
        if p.probs.len() != y.classes {
            return Err(Error::shape(format!("{} classes", y.classes), p.probs.len()));
        }
        total -= sample_log_prob(p, y.class, config);
    }
    Ok(total / probs.len() as f64)
}

pub(crate) fn sample_log_prob<T: Real>(p: &ClassProbs<T>, class: usize, config: &LossConfig) -> f64 {
    p.probs[class].as_f64().max(config.log_epsilon).ln()
}

/// Gradient of one sample's cross-entropy with respect to the logits feeding
/// the softmax, scaled by `scale` (usually `1 / m`). Zero when the clamp is active.
pub fn cross_entropy_logit_grad<T: Real>(
    p: &ClassProbs<T>,
    class: usize,
    scale: f64,
    config: &LossConfig,
) -> Vec<T> {
    if p.probs[class].as_f64() < config.log_epsilon {
        return vec![T::zero(); p.probs.len()];
    }
    p.probs
        .iter()
        .enumerate()
        .map(|(i, &q)| {
            let y = if i == class { 1.0 } else { 0.0 };
            T::from_f64_lossy((q.as_f64() - y) * scale)
        })
        .collect()
}

/// Smooth-L1 of a single difference.
pub fn smooth_l1(diff: f64, beta: f64) -> f64 {
    let a = diff.abs();
    if a <= beta {
        0.5 * diff * diff / beta
    } else {
        a - 0.5 * beta
    }
}

/// Derivative of [`smooth_l1`] with respect to `diff`.
pub fn smooth_l1_grad(diff: f64, beta: f64) -> f64 {
    if diff.abs() <= beta {
        diff / beta
    } else {
        diff.signum()
    }
}

/// Teacher target used for regression: either the raw block or its
/// per-sample standardization.
pub fn regression_target<T: Real>(teacher: &EmbeddingBlock<T>, config: &LossConfig) -> Vec<f64> {
    let raw: Vec<f64> = teacher.values.iter().map(|v| v.as_f64()).collect();
    if !config.normalize_targets {
        return raw;
    }
    let n = raw.len() as f64;
    let mean = raw.iter().sum::<f64>() / n;
    let var = raw.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    let inv = 1.0 / (var + 1e-5).sqrt();
    raw.iter().map(|v| (v - mean) * inv).collect()
}

/// Mean smooth-L1 between teacher targets and student predictions over every
/// element of every block. Teacher values are constants.
pub fn data2vec_loss<T: Real>(
    teacher: &[EmbeddingBlock<T>],
    student: &[EmbeddingBlock<T>],
    config: &LossConfig,
) -> Result<f64> {
    if teacher.len() != student.len() || teacher.is_empty() {
        return Err(Error::BatchMismatch {
            left: teacher.len(),
            right: student.len(),
        });
    }
    let mut total = 0.0;
    let mut count = 0usize;
    for (t, s) in teacher.iter().zip(student) {
        if t.shape() != s.shape() || t.values.len() != s.values.len() {
            return Err(Error::shape(
                format!("{:?}", t.shape()),
                format!("{:?}", s.shape()),
            ));
        }
        let target = regression_target(t, config);
        for (&z, &zh) in target.iter().zip(&s.values) {
            total += smooth_l1(zh.as_f64() - z, config.beta);
        }
        count += t.values.len();
    }
    Ok(total / count as f64)
}

/// Gradient of [`data2vec_loss`] with respect to one student block, where the
/// batch holds `batch` blocks and `scale` multiplies the result (e.g. λ).
pub fn data2vec_student_grad<T: Real>(
    target: &[f64],
    student: &EmbeddingBlock<T>,
    batch: usize,
    scale: f64,
    config: &LossConfig,
) -> Vec<T> {
    let denom = (batch * student.values.len()) as f64;
    target
        .iter()
        .zip(&student.values)
        .map(|(&z, &zh)| T::from_f64_lossy(scale * smooth_l1_grad(zh.as_f64() - z, config.beta) / denom))
        .collect()
}

pub fn composite_loss(ce: f64, d2v: f64, config: &LossConfig) -> Result<f64> {
    if !ce.is_finite() || !d2v.is_finite() {
        return Err(Error::NonFinite("composite loss inputs"));
    }
    Ok(ce + config.lambda_weight * d2v)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn probs(v: &[f64]) -> ClassProbs<f64> {
        ClassProbs { probs: v.to_vec() }
    }

    fn block(v: &[f64]) -> EmbeddingBlock<f64> {
        EmbeddingBlock::new(1, 1, v.len(), v.to_vec()).unwrap()
    }

    #[test]
    fn cross_entropy_examples() {
        let c = LossConfig::default();
        let ce = cross_entropy(&[probs(&[0.0, 1.0, 0.0])], &[OneHotLabel::new(1, 3).unwrap()], &c).unwrap();
        assert_eq!(ce, 0.0);

        let uniform = vec![1.0 / 61.0; 61];
        let ce = cross_entropy(&[probs(&uniform)], &[OneHotLabel::new(5, 61).unwrap()], &c).unwrap();
        assert!((ce - 61f64.ln()).abs() < 1e-12);
        assert!((ce - 4.1109).abs() < 1e-4);

        let ce = cross_entropy(
            &[probs(&[0.5, 0.5]), probs(&[0.75, 0.25])],
            &[OneHotLabel::new(0, 2).unwrap(), OneHotLabel::new(1, 2).unwrap()],
            &c,
        )
        .unwrap();
        assert!((ce - (2f64.ln() + 4f64.ln()) / 2.0).abs() < 1e-12);
        assert!((ce - 1.0397).abs() < 1e-4);
    }

    #[test]
    fn cross_entropy_clamps_zero_prob() {
        let c = LossConfig::default();
        let ce = cross_entropy(&[probs(&[1.0, 0.0])], &[OneHotLabel::new(1, 2).unwrap()], &c).unwrap();
        assert!((ce - 1e12f64.ln()).abs() < 1e-9);
    }

    #[test]
    fn batch_mismatch() {
        let c = LossConfig::default();
        assert!(matches!(
            cross_entropy(&[probs(&[1.0])], &[], &c),
            Err(Error::BatchMismatch { .. })
        ));
        assert!(matches!(
            data2vec_loss(&[block(&[1.0])], &[], &c),
            Err(Error::BatchMismatch { .. })
        ));
        assert!(matches!(
            data2vec_loss(&[block(&[1.0])], &[block(&[1.0, 2.0])], &c),
            Err(Error::ShapeMismatch { .. })
        ));
    }

    #[test]
    fn smooth_l1_examples() {
        let c = LossConfig::default();
        let z = block(&[0.3, -1.0]);
        assert_eq!(data2vec_loss(&[z.clone()], &[z], &c).unwrap(), 0.0);
        assert!((smooth_l1(0.25, 0.5) - 0.0625).abs() < 1e-15);
        assert!((smooth_l1(2.0, 0.5) - 1.75).abs() < 1e-15);
        assert!((smooth_l1(0.5, 0.5) - 0.25).abs() < 1e-15);
        assert!((smooth_l1(-2.0, 0.5) - 1.75).abs() < 1e-15);
        let l = data2vec_loss(&[block(&[0.0, 0.0])], &[block(&[0.25, 2.0])], &c).unwrap();
        assert!((l - (0.0625 + 1.75) / 2.0).abs() < 1e-15);
    }

    #[test]
    fn composite_examples() {
        let c = LossConfig::default();
        assert_eq!(composite_loss(1.0, 0.5, &c).unwrap(), 1.5);
        let off = LossConfig {
            lambda_weight: 0.0,
            ..c
        };
        assert_eq!(composite_loss(0.7, 123.0, &off).unwrap(), 0.7);
        assert_eq!(composite_loss(0.0, 0.0, &c).unwrap(), 0.0);
        assert!(matches!(composite_loss(f64::NAN, 0.0, &c), Err(Error::NonFinite(_))));
    }

    #[test]
    fn config_validation_names_key() {
        let bad = LossConfig {
            beta: 0.0,
            ..Default::default()
        };
        match bad.validate() {
            Err(Error::BadConfig { key, .. }) => assert_eq!(key, "loss.beta"),
            other => panic!("{other:?}"),
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(1000))]

        #[test]
        fn knee_is_continuous(beta in 1e-3f64..=2.0) {
            let eps = 1e-9;
            let below = smooth_l1(beta - eps, beta);
            let above = smooth_l1(beta + eps, beta);
            prop_assert!((smooth_l1(beta, beta) - 0.5 * beta).abs() < 1e-12);
            prop_assert!((above - below).abs() < 1e-8);
        }

        #[test]
        fn smooth_l1_grad_matches_finite_difference(d in -3.0f64..3.0, beta in 0.05f64..2.0) {
            prop_assume!((d.abs() - beta).abs() > 1e-3);
            let h = 1e-6;
            let fd = (smooth_l1(d + h, beta) - smooth_l1(d - h, beta)) / (2.0 * h);
            let g = smooth_l1_grad(d, beta);
            prop_assert!((fd - g).abs() <= 1e-4 * g.abs().max(1e-3));
        }

        #[test]
        fn losses_non_negative(v in proptest::collection::vec(-5.0f64..5.0, 1..20), w in proptest::collection::vec(-5.0f64..5.0, 20)) {
            let c = LossConfig::default();
            let s = block(&v);
            let t = block(&w[..v.len()]);
            prop_assert!(data2vec_loss(&[t], &[s], &c).unwrap() >= 0.0);
            let p = ClassProbs::from_logits(&v);
            prop_assert!(cross_entropy(&[p], &[OneHotLabel::new(0, v.len()).unwrap()], &c).unwrap() >= 0.0);
        }
    }
}

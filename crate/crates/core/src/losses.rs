//! Training objectives: cross-entropy + soft Dice on labeled data, mean squared
//! student/teacher disagreement on unlabeled data, and their weighted sum.

use ndarray::Array2;

use crate::error::{Error, Result};
use crate::network::ProbabilityMap;
use crate::tensor::{Real, Tensor};

/// Class index of the foreground (pathway) class.
pub const FOREGROUND: usize = 1;
const LOG_FLOOR: f64 = 1e-12;

#[derive(Clone, Debug, PartialEq)]
pub struct LossWeights {
    /// Weight of the supervised term.
    pub alpha_sup: f64,
    /// Plateau value of the consistency weight. Zero disables the unsupervised term.
    pub lambda_max: f64,
    pub rampup_epochs: usize,
    pub dice_smooth: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            alpha_sup: 0.5,
            lambda_max: 0.3,
            rampup_epochs: 40,
            dice_smooth: 1e-5,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha_sup > 0.0 && self.alpha_sup <= 1.0) {
            return Err(Error::config(
                "loss.alpha_sup",
                format!("must lie in (0, 1], got {}", self.alpha_sup),
            ));
        }
        if !(self.lambda_max >= 0.0 && self.lambda_max.is_finite()) {
            return Err(Error::config(
                "loss.lambda_max",
                format!("must be finite and >= 0, got {}", self.lambda_max),
            ));
        }
        if !(self.dice_smooth > 0.0 && self.dice_smooth.is_finite()) {
            return Err(Error::config("loss.dice_smooth", "must be finite and > 0"));
        }
        Ok(())
    }
}

/// The two parts of the supervised loss for one image.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SupervisedTerms {
    /// Mean per-pixel cross-entropy.
    pub cross_entropy: f64,
    /// `1 - soft Dice` of the foreground channel.
    pub dice: f64,
}

impl SupervisedTerms {
    pub fn total(&self) -> f64 {
        self.cross_entropy + self.dice
    }
}

fn check_binary(target: &[u8]) -> Result<()> {
    match target.iter().find(|&&v| v > 1) {
        Some(&v) => Err(Error::NonBinaryMask(f64::from(v))),
        None => Ok(()),
    }
}

/// Loss terms of one `(k, p)` probability block against a `{0,1}` target,
/// accumulating `scale * d(ce + dice)/d probs` into `d_probs`.
pub(crate) fn supervised_terms_grad<T: Real>(
    probs: &[T],
    n_classes: usize,
    target: &[u8],
    smooth: f64,
    d_probs: Option<&mut [T]>,
    scale: f64,
) -> SupervisedTerms {
    let p = target.len();
    debug_assert_eq!(probs.len(), n_classes * p);
    let fg = &probs[FOREGROUND * p..(FOREGROUND + 1) * p];

    let mut ce = 0.0;
    for (px, &t) in target.iter().enumerate() {
        let class = usize::from(t);
        ce -= probs[class * p + px].as_f64().max(LOG_FLOOR).ln();
    }
    ce /= p as f64;

    let (mut inter, mut sum_p, mut sum_g) = (0.0, 0.0, 0.0);
    for (&pv, &t) in fg.iter().zip(target) {
        let (pv, g) = (pv.as_f64(), f64::from(t));
        inter += pv * g;
        sum_p += pv;
        sum_g += g;
    }
    let num = 2.0 * inter + smooth;
    let den = sum_p + sum_g + smooth;
    let dice = 1.0 - num / den;

    if let Some(d) = d_probs {
        for (px, &t) in target.iter().enumerate() {
            let class = usize::from(t);
            let pv = probs[class * p + px].as_f64();
            if pv > LOG_FLOOR {
                d[class * p + px] += T::from_f64_lossy(-scale / (pv * p as f64));
            }
        }
        for (px, &t) in target.iter().enumerate() {
            let g = f64::from(t);
            let grad = -(2.0 * g * den - num) / (den * den);
            d[FOREGROUND * p + px] += T::from_f64_lossy(scale * grad);
        }
    }
    SupervisedTerms {
        cross_entropy: ce,
        dice,
    }
}

/// Mean cross-entropy plus `1 - Dice(foreground, target)`.
pub fn supervised_loss(
    pred: &ProbabilityMap,
    target: &Array2<u8>,
    dice_smooth: f64,
) -> Result<f64> {
    supervised_terms(pred, target, dice_smooth).map(|t| t.total())
}

pub fn supervised_terms(
    pred: &ProbabilityMap,
    target: &Array2<u8>,
    dice_smooth: f64,
) -> Result<SupervisedTerms> {
    if pred.spatial_shape() != target.dim() {
        return Err(Error::ShapeMismatch(format!(
            "prediction {:?} vs target {:?}",
            pred.spatial_shape(),
            target.dim()
        )));
    }
    let target: Vec<u8> = target.iter().copied().collect();
    check_binary(&target)?;
    let probs: Vec<f32> = pred.0.iter().copied().collect();
    Ok(supervised_terms_grad(
        &probs,
        pred.n_classes(),
        &target,
        dice_smooth,
        None,
        0.0,
    ))
}

/// Batch supervised loss: per-sample terms averaged over the batch, with the
/// gradient of that average w.r.t. `probs`.
pub(crate) fn supervised_batch<T: Real>(
    probs: &Tensor<T>,
    targets: &[Vec<u8>],
    smooth: f64,
) -> Result<(SupervisedTerms, Tensor<T>)> {
    assert_eq!(probs.n(), targets.len());
    let n = targets.len();
    let mut d = Tensor::zeros(probs.shape());
    let mut acc = SupervisedTerms {
        cross_entropy: 0.0,
        dice: 0.0,
    };
    for (i, target) in targets.iter().enumerate() {
        check_binary(target)?;
        let terms = supervised_terms_grad(
            probs.item(i),
            probs.c(),
            target,
            smooth,
            Some(d.item_mut(i)),
            1.0 / n as f64,
        );
        acc.cross_entropy += terms.cross_entropy / n as f64;
        acc.dice += terms.dice / n as f64;
    }
    Ok((acc, d))
}

/// Mean squared difference over samples, classes and pixels.
///
/// An empty selection yields zero (with a warning) so training can proceed.
pub fn consistency_loss(
    student_mean: &[ProbabilityMap],
    teacher_mean: &[ProbabilityMap],
) -> Result<f64> {
    if student_mean.len() != teacher_mean.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} student maps vs {} teacher maps",
            student_mean.len(),
            teacher_mean.len()
        )));
    }
    for (s, t) in student_mean.iter().zip(teacher_mean) {
        if s.0.dim() != t.0.dim() {
            return Err(Error::ShapeMismatch(format!(
                "student {:?} vs teacher {:?}",
                s.0.dim(),
                t.0.dim()
            )));
        }
    }
    let s: Vec<Vec<f32>> = student_mean
        .iter()
        .map(|m| m.0.iter().copied().collect())
        .collect();
    let t: Vec<Vec<f32>> = teacher_mean
        .iter()
        .map(|m| m.0.iter().copied().collect())
        .collect();
    Ok(consistency_loss_grad(&s, &t).0)
}

/// Value and per-sample gradient w.r.t. the student maps.
pub(crate) fn consistency_loss_grad<T: Real>(
    student: &[Vec<T>],
    teacher: &[Vec<T>],
) -> (f64, Vec<Vec<T>>) {
    let count: usize = student.iter().map(Vec::len).sum();
    if count == 0 {
        log::warn!("consistency loss over an empty selection; using 0");
        return (
            0.0,
            student.iter().map(|s| vec![T::zero(); s.len()]).collect(),
        );
    }
    let mut sum = 0.0;
    let mut grads = Vec::with_capacity(student.len());
    let factor = 2.0 / count as f64;
    for (s, t) in student.iter().zip(teacher) {
        let mut g = Vec::with_capacity(s.len());
        for (&a, &b) in s.iter().zip(t) {
            let diff = a.as_f64() - b.as_f64();
            sum += diff * diff;
            g.push(T::from_f64_lossy(factor * diff));
        }
        grads.push(g);
    }
    (sum / count as f64, grads)
}

/// Gaussian ramp-up `lambda_max * exp(-5 (1 - min(epoch / rampup, 1))^2)`.
pub fn lambda_schedule(epoch: usize, weights: &LossWeights) -> f64 {
    let t = if weights.rampup_epochs == 0 {
        1.0
    } else {
        (epoch as f64 / weights.rampup_epochs as f64).min(1.0)
    };
    weights.lambda_max * (-5.0 * (1.0 - t).powi(2)).exp()
}

/// `alpha_sup * l_sup + lambda(epoch) * l_cons`.
pub fn total_loss(l_sup: f64, l_cons: f64, epoch: usize, weights: &LossWeights) -> Result<f64> {
    if !l_sup.is_finite() || !l_cons.is_finite() {
        return Err(Error::NonFinite(format!(
            "loss inputs (sup {l_sup}, cons {l_cons})"
        )));
    }
    Ok(weights.alpha_sup * l_sup + lambda_schedule(epoch, weights) * l_cons)
}

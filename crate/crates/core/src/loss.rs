//! Class-balanced cross-entropy per task and the weighted multi-task total.
//!
//! For one image with foreground probabilities `p` and binary labels `y`:
//!
//! ```text
//! L = -lambda * sum_{y=1} ln p  -  (1 - lambda) * sum_{y=0} ln (1 - p)
//! ```
//!
//! averaged over the batch. The total multi-task objective is
//! `omega * L_ex + (1 - omega) * L_od`.

use std::num::FpCategory;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::models::FOREGROUND;
use crate::tensor::{Real, Tape, Tensor, Var};

/// Probabilities are clamped to `[PROB_EPS, 1 - PROB_EPS]` before the log.
pub const PROB_EPS: f64 = 1e-7;

/// How per-pixel terms are reduced.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Reduction {
    /// Sum over the pixels of each image, mean over the batch.
    #[default]
    ImageSum,
    /// Mean over every pixel of the batch.
    PixelMean,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub omega: f64,
    pub lambda_od: f64,
    pub lambda_ex: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            omega: 0.6,
            lambda_od: 0.7,
            lambda_ex: 0.9,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.omega) {
            return Err(Error::InvalidArgument(format!("omega {} outside [0, 1]", self.omega)));
        }
        for (name, v) in [("lambda_od", self.lambda_od), ("lambda_ex", self.lambda_ex)] {
            if !(v > 0.0 && v < 1.0) {
                return Err(Error::InvalidArgument(format!("{name} {v} outside (0, 1)")));
            }
        }
        Ok(())
    }
}

fn check_labels<T: Real>(labels: &[T]) -> Result<()> {
    match labels.iter().find(|&&v| v != T::zero() && v != T::one()) {
        Some(v) => Err(Error::NonBinaryLabels(v.as_f64())),
        None => Ok(()),
    }
}

fn check_lambda(lambda: f64) -> Result<()> {
    if (0.0..=1.0).contains(&lambda) {
        Ok(())
    } else {
        Err(Error::InvalidArgument(format!("lambda {lambda} outside [0, 1]")))
    }
}

fn normalizer(len: usize, batch: usize, reduction: Reduction) -> f64 {
    match reduction {
        Reduction::ImageSum => batch as f64,
        Reduction::PixelMean => len as f64,
    }
}

/// Class-balanced BCE over `batch` equally sized images laid out back to back.
pub fn class_balanced_bce<T: Real>(
    probs: &[T],
    labels: &[T],
    batch: usize,
    lambda: f64,
    reduction: Reduction,
) -> Result<f64> {
    if probs.len() != labels.len() {
        return Err(Error::shape("class_balanced_bce", &[probs.len()], &[labels.len()]));
    }
    if batch == 0 || probs.len() % batch != 0 {
        return Err(Error::InvalidArgument(format!(
            "{} values do not split into {batch} images",
            probs.len()
        )));
    }
    check_labels(labels)?;
    check_lambda(lambda)?;
    let mut pos = CompensatedSum::default();
    let mut neg = CompensatedSum::default();
    for (&p, &y) in probs.iter().zip(labels) {
        let p = p.as_f64().clamp(PROB_EPS, 1.0 - PROB_EPS);
        if y == T::one() {
            pos.add(-p.ln());
        } else {
            neg.add(-(1.0 - p).ln());
        }
    }
    let (pos, neg) = (pos.value(), neg.value());
    Ok((lambda * pos + (1.0 - lambda) * neg) / normalizer(probs.len(), batch, reduction))
}

/// d loss / d probs, scaled by `upstream`. Zero where the clamp is active.
pub(crate) fn class_balanced_bce_grad<T: Real>(
    probs: &[T],
    labels: &[T],
    batch: usize,
    lambda: f64,
    reduction: Reduction,
    upstream: T,
) -> Vec<T> {
    let scale = upstream.as_f64() / normalizer(probs.len(), batch, reduction);
    probs
        .iter()
        .zip(labels)
        .map(|(&p, &y)| {
            let p = p.as_f64();
            if !(PROB_EPS..=1.0 - PROB_EPS).contains(&p) {
                return T::zero();
            }
            let d = if y == T::one() {
                -lambda / p
            } else {
                (1.0 - lambda) / (1.0 - p)
            };
            T::from_f64(d * scale)
        })
        .collect()
}

/// Neumaier summation.
#[derive(Default)]
struct CompensatedSum {
    sum: f64,
    carry: f64,
}

impl CompensatedSum {
    fn add(&mut self, x: f64) {
        let t = self.sum + x;
        if self.sum.abs() >= x.abs() {
            self.carry += (self.sum - t) + x;
        } else {
            self.carry += (x - t) + self.sum;
        }
        self.sum = t;
    }

    fn value(&self) -> f64 {
        self.sum + self.carry
    }
}

fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// [`class_balanced_bce`] evaluated from pre-sigmoid logits, using
/// `-ln sigmoid(z) = softplus(-z)`. Needs no clamping and its gradient never
/// vanishes on confidently wrong pixels.
pub fn class_balanced_bce_logits<T: Real>(
    logits: &[T],
    labels: &[T],
    batch: usize,
    lambda: f64,
    reduction: Reduction,
) -> Result<f64> {
    if logits.len() != labels.len() {
        return Err(Error::shape("class_balanced_bce_logits", &[logits.len()], &[labels.len()]));
    }
    if batch == 0 || logits.len() % batch != 0 {
        return Err(Error::InvalidArgument(format!(
            "{} values do not split into {batch} images",
            logits.len()
        )));
    }
    check_labels(labels)?;
    check_lambda(lambda)?;
    let mut pos = CompensatedSum::default();
    let mut neg = CompensatedSum::default();
    for (&z, &y) in logits.iter().zip(labels) {
        let z = z.as_f64();
        if y == T::one() {
            pos.add(softplus(-z));
        } else {
            neg.add(softplus(z));
        }
    }
    let (pos, neg) = (pos.value(), neg.value());
    Ok((lambda * pos + (1.0 - lambda) * neg) / normalizer(logits.len(), batch, reduction))
}

/// d loss / d logits, scaled by `upstream`.
pub(crate) fn class_balanced_bce_logits_grad<T: Real>(
    logits: &[T],
    labels: &[T],
    batch: usize,
    lambda: f64,
    reduction: Reduction,
    upstream: T,
) -> Vec<T> {
    let scale = upstream.as_f64() / normalizer(logits.len(), batch, reduction);
    logits
        .iter()
        .zip(labels)
        .map(|(&z, &y)| {
            let p = 1.0 / (1.0 + (-z.as_f64()).exp());
            let d = if y == T::one() { lambda * (p - 1.0) } else { (1.0 - lambda) * p };
            let v = T::from_f64(d * scale);
            // Subnormal gradients of well-classified pixels slow every later
            // multiply-add by orders of magnitude.
            if v.classify() == FpCategory::Subnormal {
                T::zero()
            } else {
                v
            }
        })
        .collect()
}

/// `omega * ex_loss + (1 - omega) * od_loss`.
pub fn total_loss(ex_loss: f64, od_loss: f64, omega: f64) -> f64 {
    omega * ex_loss + (1.0 - omega) * od_loss
}

/// Tape version of [`total_loss`]. A zero weight drops its term entirely so
/// the corresponding head receives exactly zero gradient.
pub fn total_loss_var<T: Real>(tape: &mut Tape<T>, ex_loss: Var, od_loss: Var, omega: f64) -> Result<Var> {
    if !(0.0..=1.0).contains(&omega) {
        return Err(Error::InvalidArgument(format!("omega {omega} outside [0, 1]")));
    }
    if omega == 0.0 {
        return tape.scale(od_loss, 1.0);
    }
    if omega == 1.0 {
        return tape.scale(ex_loss, 1.0);
    }
    let ex = tape.scale(ex_loss, omega)?;
    let od = tape.scale(od_loss, 1.0 - omega)?;
    tape.add(ex, od)
}

/// Loss of one two-channel head given its pre-sigmoid `logits`
/// (`[N, 2, H, W]`): the foreground channel against `labels` (`[N, H, W]`)
/// with weight `lambda`, plus `background_weight` times the background
/// channel against the complemented labels with weight `1 - lambda`.
pub fn head_loss_var<T: Real>(
    tape: &mut Tape<T>,
    logits: Var,
    labels: &Tensor<T>,
    lambda: f64,
    background_weight: f64,
    reduction: Reduction,
) -> Result<Var> {
    let fg = tape.slice_channels(logits, FOREGROUND, 1)?;
    let loss = tape.class_balanced_bce_logits(fg, labels, lambda, reduction)?;
    if background_weight == 0.0 {
        return Ok(loss);
    }
    let bg = tape.slice_channels(logits, 1 - FOREGROUND, 1)?;
    let complement = labels.map(|v| T::one() - v);
    let bg_loss = tape.class_balanced_bce_logits(bg, &complement, 1.0 - lambda, reduction)?;
    let bg_loss = tape.scale(bg_loss, background_weight)?;
    tape.add(loss, bg_loss)
}

/// Fraction of background pixels: `|negatives| / |all pixels|`.
pub fn auto_balance_lambda<T: Real>(labels: &[T]) -> Result<f64> {
    if labels.is_empty() {
        return Err(Error::InvalidArgument("auto_balance_lambda needs at least one pixel".into()));
    }
    check_labels(labels)?;
    let neg = labels.iter().filter(|&&v| v == T::zero()).count();
    Ok(neg as f64 / labels.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fixture(pos: usize, neg: usize) -> Vec<f64> {
        let mut y = vec![1.0; pos];
        y.extend(vec![0.0; neg]);
        y
    }

    #[test]
    fn uniform_half_probability_closed_form() {
        let y = fixture(10, 90);
        let p = vec![0.5; 100];
        let got = class_balanced_bce(&p, &y, 1, 0.7, Reduction::ImageSum).unwrap();
        // Direct elementwise summation, independent of the implementation.
        let mut direct = 0.0;
        for (&pi, &yi) in p.iter().zip(&y) {
            direct += if yi == 1.0 { -0.7 * f64::ln(pi) } else { -0.3 * f64::ln(1.0 - pi) };
        }
        let closed = (0.7 * 10.0 + 0.3 * 90.0) * std::f64::consts::LN_2;
        assert!((closed - 23.5670).abs() < 1e-4);
        assert!((got - closed).abs() < 1e-12);
        assert!((got - direct).abs() < 1e-12);
    }

    #[test]
    fn perfect_prediction_is_near_zero() {
        let y = fixture(5, 20);
        let loss = class_balanced_bce(&y, &y, 1, 0.9, Reduction::ImageSum).unwrap();
        assert!((0.0..=1e-5).contains(&loss), "{loss}");
    }

    #[test]
    fn half_lambda_is_half_plain_bce() {
        let y = fixture(7, 13);
        let p: Vec<f64> = (0..20).map(|i| 0.05 + 0.9 * (i as f64 / 19.0)).collect();
        let plain: f64 = p
            .iter()
            .zip(&y)
            .map(|(&pi, &yi)| -(yi * pi.ln() + (1.0 - yi) * (1.0 - pi).ln()))
            .sum();
        let got = class_balanced_bce(&p, &y, 1, 0.5, Reduction::ImageSum).unwrap();
        assert!((got - plain / 2.0).abs() < 1e-12);
    }

    #[test]
    fn batch_mean_and_pixel_mean() {
        let y = fixture(2, 2);
        let p = vec![0.5; 4];
        let one = class_balanced_bce(&p, &y, 1, 0.7, Reduction::ImageSum).unwrap();
        let two_imgs: Vec<f64> = p.iter().chain(&p).copied().collect();
        let two_lbls: Vec<f64> = y.iter().chain(&y).copied().collect();
        let two = class_balanced_bce(&two_imgs, &two_lbls, 2, 0.7, Reduction::ImageSum).unwrap();
        assert!((one - two).abs() < 1e-15);
        let mean = class_balanced_bce(&p, &y, 1, 0.7, Reduction::PixelMean).unwrap();
        assert!((mean - one / 4.0).abs() < 1e-15);
    }

    #[test]
    fn rejects_non_binary_labels() {
        let err = class_balanced_bce(&[0.5, 0.5], &[0.0, 0.5], 1, 0.7, Reduction::ImageSum);
        assert!(matches!(err, Err(Error::NonBinaryLabels(v)) if v == 0.5));
    }

    #[test]
    fn lambda_shifts_weight_between_error_types() {
        // One false negative (label 1, p = 0.2) and one false positive (label 0, p = 0.8).
        let fn_loss = |l| class_balanced_bce(&[0.2], &[1.0], 1, l, Reduction::ImageSum).unwrap();
        let fp_loss = |l| class_balanced_bce(&[0.8], &[0.0], 1, l, Reduction::ImageSum).unwrap();
        for (lo, hi) in [(0.3, 0.5), (0.5, 0.7), (0.7, 0.9)] {
            assert!(fn_loss(hi) > fn_loss(lo));
            assert!(fp_loss(hi) < fp_loss(lo));
        }
    }

    #[test]
    fn total_loss_endpoints_and_paper_weight() {
        assert_eq!(total_loss(2.0, 1.0, 0.0), 1.0);
        assert_eq!(total_loss(2.0, 1.0, 1.0), 2.0);
        assert!((total_loss(2.0, 1.0, 0.6) - 1.6).abs() < 1e-15);
        assert!(total_loss(2.5, 1.0, 0.6) > total_loss(2.0, 1.0, 0.6));
        assert!(total_loss(2.0, 1.5, 0.6) > total_loss(2.0, 1.0, 0.6));
    }

    #[test]
    fn total_loss_partials_are_exact() {
        for omega in [0.0, 0.3, 0.6, 1.0] {
            let mut tape = Tape::<f64>::new();
            let ex = tape.param(Tensor::scalar(2.0));
            let od = tape.param(Tensor::scalar(1.0));
            let t = total_loss_var(&mut tape, ex, od, omega).unwrap();
            tape.backward(t).unwrap();
            let gex = tape.grad(ex).map_or(0.0, |g| g.data()[0]);
            let god = tape.grad(od).map_or(0.0, |g| g.data()[0]);
            assert_eq!(gex, omega);
            assert_eq!(god, 1.0 - omega);
        }
    }

    #[test]
    fn auto_balance_examples() {
        assert_eq!(auto_balance_lambda(&[0.0f32; 16]).unwrap(), 1.0);
        assert_eq!(auto_balance_lambda(&fixture(8, 8)).unwrap(), 0.5);
        assert_eq!(auto_balance_lambda(&fixture(10, 90)).unwrap(), 0.9);
        assert!(auto_balance_lambda::<f64>(&[]).is_err());
    }

    #[test]
    fn gradient_through_sigmoid_matches_finite_differences() {
        let logits = [-2.0, -0.3, 0.1, 1.7, 3.0, -1.1];
        let labels = [1.0, 0.0, 1.0, 0.0, 1.0, 0.0];
        let lambda = 0.8;
        let f = |z: &[f64]| {
            let p: Vec<f64> = z.iter().map(|v| 1.0 / (1.0 + (-v).exp())).collect();
            class_balanced_bce(&p, &labels, 2, lambda, Reduction::ImageSum).unwrap()
        };
        let mut tape = Tape::<f64>::new();
        let z = tape.param(Tensor::new(vec![2, 3], logits.to_vec()).unwrap());
        let p = tape.sigmoid(z).unwrap();
        let lbl = Tensor::new(vec![2, 3], labels.to_vec()).unwrap();
        let l = tape.class_balanced_bce(p, &lbl, lambda, Reduction::ImageSum).unwrap();
        tape.backward(l).unwrap();
        let g = tape.grad(z).unwrap();
        let h = 1e-5;
        for i in 0..logits.len() {
            let mut up = logits;
            let mut dn = logits;
            up[i] += h;
            dn[i] -= h;
            let fd = (f(&up) - f(&dn)) / (2.0 * h);
            let an = g.data()[i];
            assert!((an - fd).abs() / an.abs().max(fd.abs()) < 1e-4, "{i}: {an} vs {fd}");
        }
    }

    #[test]
    fn logit_form_matches_probability_form() {
        let logits = [-2.0, -0.3, 0.1, 1.7, 3.0, -1.1, 0.0, 5.0];
        let labels = [1.0, 0.0, 1.0, 0.0, 1.0, 0.0, 1.0, 1.0];
        let p: Vec<f64> = logits.iter().map(|v: &f64| 1.0 / (1.0 + (-v).exp())).collect();
        for red in [Reduction::ImageSum, Reduction::PixelMean] {
            let a = class_balanced_bce(&p, &labels, 2, 0.7, red).unwrap();
            let b = class_balanced_bce_logits(&logits, &labels, 2, 0.7, red).unwrap();
            assert!((a - b).abs() < 1e-12, "{a} vs {b}");
        }
    }

    #[test]
    fn logit_form_stays_finite_and_trainable_when_saturated() {
        let logits = [-80.0f32, 80.0];
        let labels = [1.0f32, 0.0];
        let v = class_balanced_bce_logits(&logits, &labels, 1, 0.5, Reduction::ImageSum).unwrap();
        assert!((v - 80.0).abs() < 1e-6);
        let g = class_balanced_bce_logits_grad(&logits, &labels, 1, 0.5, Reduction::ImageSum, 1.0);
        assert!((g[0] + 0.5).abs() < 1e-6 && (g[1] - 0.5).abs() < 1e-6);
    }

    #[test]
    fn logit_tape_gradient_matches_finite_differences() {
        let logits = [-2.0, -0.3, 0.1, 1.7, 3.0, -1.1];
        let labels = [1.0, 0.0, 1.0, 0.0, 1.0, 0.0];
        let f = |z: &[f64]| class_balanced_bce_logits(z, &labels, 2, 0.8, Reduction::ImageSum).unwrap();
        let mut tape = Tape::<f64>::new();
        let z = tape.param(Tensor::new(vec![2, 3], logits.to_vec()).unwrap());
        let lbl = Tensor::new(vec![2, 3], labels.to_vec()).unwrap();
        let l = tape.class_balanced_bce_logits(z, &lbl, 0.8, Reduction::ImageSum).unwrap();
        assert!((tape.value(l).data()[0] - f(&logits)).abs() < 1e-12);
        tape.backward(l).unwrap();
        let g = tape.grad(z).unwrap();
        let h = 1e-5;
        for i in 0..logits.len() {
            let (mut up, mut dn) = (logits, logits);
            up[i] += h;
            dn[i] -= h;
            let fd = (f(&up) - f(&dn)) / (2.0 * h);
            let an = g.data()[i];
            assert!((an - fd).abs() / an.abs().max(fd.abs()) < 1e-6, "{i}: {an} vs {fd}");
        }
    }
}

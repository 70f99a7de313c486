//! Temperature softmax and the student-teacher loss with its exact and
//! approximate logit gradients.

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DistillError {
    #[error("length mismatch: student {student}, teacher {teacher}, labels {labels}")]
    LengthMismatch {
        student: usize,
        teacher: usize,
        labels: usize,
    },
    #[error("temperature must be positive, got {0}")]
    Temperature(f64),
    #[error("distillation weight must be non-negative, got {0}")]
    Beta(f64),
    #[error("empty logit vector")]
    Empty,
}

/// `exp(z_i / τ) / Σ exp(z_j / τ)`, evaluated after subtracting the maximum.
pub fn softmax_temp(z: &[f64], tau: f64) -> Vec<f64> {
    let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = z.iter().map(|v| ((v - max) / tau).exp()).collect();
    let total: f64 = e.iter().sum();
    e.into_iter().map(|v| v / total).collect()
}

fn log_softmax_temp(z: &[f64], tau: f64) -> Vec<f64> {
    let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = z.iter().map(|v| ((v - max) / tau).exp()).sum::<f64>().ln();
    z.iter().map(|v| (v - max) / tau - lse).collect()
}

pub fn one_hot(label: usize, classes: usize) -> Vec<f64> {
    let mut y = vec![0.0; classes];
    y[label] = 1.0;
    y
}

/// Cross entropy `H(p, softmax(z / τ))`.
pub fn cross_entropy_logits(p: &[f64], z: &[f64], tau: f64) -> f64 {
    -p.iter()
        .zip(log_softmax_temp(z, tau))
        .map(|(pi, lq)| if *pi == 0.0 { 0.0 } else { pi * lq })
        .sum::<f64>()
}

fn check(z_s: &[f64], z_t: &[f64], y: &[f64], tau: f64, beta: f64) -> Result<(), DistillError> {
    if z_s.len() != z_t.len() || z_s.len() != y.len() {
        return Err(DistillError::LengthMismatch {
            student: z_s.len(),
            teacher: z_t.len(),
            labels: y.len(),
        });
    }
    if z_s.is_empty() {
        return Err(DistillError::Empty);
    }
    if !tau.is_finite() || tau <= 0.0 {
        return Err(DistillError::Temperature(tau));
    }
    if beta.is_nan() || beta < 0.0 {
        return Err(DistillError::Beta(beta));
    }
    Ok(())
}

/// `H(Y, P_S) + β · H(P_T, P_S)`. The hard-label term uses unit temperature,
/// the teacher-matching term uses `τ` on both sides.
pub fn distill_loss(
    z_s: &[f64],
    z_t: &[f64],
    y: &[f64],
    tau: f64,
    beta: f64,
) -> Result<f64, DistillError> {
    check(z_s, z_t, y, tau, beta)?;
    let hard = cross_entropy_logits(y, z_s, 1.0);
    if beta == 0.0 {
        return Ok(hard);
    }
    let p_t = softmax_temp(z_t, tau);
    Ok(hard + beta * cross_entropy_logits(&p_t, z_s, tau))
}

/// `(P_S − Y) + (β/τ)(P_S^τ − P_T^τ)`.
pub fn distill_grad_exact(
    z_s: &[f64],
    z_t: &[f64],
    y: &[f64],
    tau: f64,
    beta: f64,
) -> Result<Vec<f64>, DistillError> {
    check(z_s, z_t, y, tau, beta)?;
    let p1 = softmax_temp(z_s, 1.0);
    let ps = softmax_temp(z_s, tau);
    let pt = softmax_temp(z_t, tau);
    Ok((0..z_s.len())
        .map(|i| (p1[i] - y[i]) + beta / tau * (ps[i] - pt[i]))
        .collect())
}

/// High-temperature approximation `(P_S − Y) + β/(N τ²) (z_S − z_T)` with
/// both logit vectors mean-centred first.
pub fn distill_grad_approx(
    z_s: &[f64],
    z_t: &[f64],
    y: &[f64],
    beta: f64,
    tau: f64,
) -> Result<Vec<f64>, DistillError> {
    check(z_s, z_t, y, tau, beta)?;
    let n = z_s.len() as f64;
    let mean = |z: &[f64]| z.iter().sum::<f64>() / n;
    let (ms, mt) = (mean(z_s), mean(z_t));
    let p1 = softmax_temp(z_s, 1.0);
    let k = beta / (n * tau * tau);
    Ok((0..z_s.len())
        .map(|i| (p1[i] - y[i]) + k * ((z_s[i] - ms) - (z_t[i] - mt)))
        .collect())
}

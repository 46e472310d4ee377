//! Generalized advantage estimation.

use crate::error::{Error, Result};

/// Advantages and returns for one trajectory segment with a common discount.
///
/// `dones[t]` marks a terminal transition (no bootstrap past it);
/// `last_value` bootstraps the segment end when the final step is not
/// terminal. Advantages are returned unnormalized.
pub fn compute_gae(
    rewards: &[f64],
    values: &[f64],
    dones: &[bool],
    last_value: f64,
    gamma: f64,
    lambda: f64,
) -> Result<(Vec<f64>, Vec<f64>)> {
    let discounts = vec![gamma; rewards.len()];
    compute_gae_discounted(rewards, values, dones, &discounts, last_value, lambda)
}

/// As [`compute_gae`] with a per-step discount, used for the retriever whose
/// transitions span several ticks (`discounts[t] = gamma^span`).
pub fn compute_gae_discounted(
    rewards: &[f64],
    values: &[f64],
    dones: &[bool],
    discounts: &[f64],
    last_value: f64,
    lambda: f64,
) -> Result<(Vec<f64>, Vec<f64>)> {
    let n = rewards.len();
    for len in [values.len(), dones.len(), discounts.len()] {
        if len != n {
            return Err(Error::ShapeMismatch { expected: n, actual: len });
        }
    }
    let mut adv = vec![0.0; n];
    let mut next_value = last_value;
    let mut next_adv = 0.0;
    for t in (0..n).rev() {
        let live = if dones[t] { 0.0 } else { 1.0 };
        let delta = rewards[t] + discounts[t] * next_value * live - values[t];
        next_adv = delta + discounts[t] * lambda * live * next_adv;
        adv[t] = next_adv;
        next_value = values[t];
    }
    let returns = adv.iter().zip(values).map(|(a, v)| a + v).collect();
    Ok((adv, returns))
}

/// Shifts and scales to mean 0, std 1 (population); constant input maps to zeros.
pub fn normalize_advantages(adv: &mut [f64]) {
    if adv.is_empty() {
        return;
    }
    let n = adv.len() as f64;
    let mean = adv.iter().sum::<f64>() / n;
    let var = adv.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / n;
    let std = var.sqrt();
    for a in adv.iter_mut() {
        *a = if std > 1e-12 { (*a - mean) / std } else { 0.0 };
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zeros_in_zeros_out() {
        let (a, r) = compute_gae(&[0.0; 5], &[0.0; 5], &[false; 5], 0.0, 0.97, 0.95).unwrap();
        assert!(a.iter().chain(&r).all(|&x| x == 0.0));
    }

    #[test]
    fn single_terminal_step() {
        let (a, r) = compute_gae(&[2.5], &[0.7], &[true], 123.0, 0.97, 0.95).unwrap();
        assert_eq!(a, vec![2.5 - 0.7]);
        assert_eq!(r, vec![2.5]);
    }

    #[test]
    fn length_mismatch() {
        assert!(compute_gae(&[1.0, 2.0], &[0.0], &[false, false], 0.0, 0.9, 0.9).is_err());
    }

    #[test]
    fn normalization() {
        let mut a = vec![1.0, 2.0, 3.0, 4.0];
        normalize_advantages(&mut a);
        let m: f64 = a.iter().sum::<f64>() / 4.0;
        let v: f64 = a.iter().map(|x| x * x).sum::<f64>() / 4.0;
        assert!(m.abs() < 1e-12 && (v - 1.0).abs() < 1e-12);
        let mut c = vec![3.0; 3];
        normalize_advantages(&mut c);
        assert_eq!(c, vec![0.0; 3]);
    }
}

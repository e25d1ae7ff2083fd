use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Result, TppError};

fn check_lengths(a: usize, b: usize, min: usize) -> Result<()> {
    if a != b {
        return Err(TppError::InvalidArgument(format!("length mismatch: {a} vs {b}")));
    }
    if a < min {
        return Err(TppError::InvalidArgument(format!("need at least {min} values, got {a}")));
    }
    Ok(())
}

/// Fraction of mismatched type predictions.
pub fn error_rate(preds: &[usize], truth: &[usize]) -> Result<f64> {
    check_lengths(preds.len(), truth.len(), 1)?;
    let wrong = preds.iter().zip(truth).filter(|(p, t)| p != t).count();
    Ok(wrong as f64 / preds.len() as f64)
}

pub fn time_rmse(preds: &[f64], truth: &[f64]) -> Result<f64> {
    check_lengths(preds.len(), truth.len(), 1)?;
    let mse = preds.iter().zip(truth).map(|(p, t)| (p - t) * (p - t)).sum::<f64>() / preds.len() as f64;
    Ok(mse.sqrt())
}

/// Two-sided paired permutation test by random sign flips of the paired
/// differences. The p-value counts the observed assignment, so it is never
/// zero and equals 1 when the observed mean difference is zero.
pub fn permutation_test(a: &[f64], b: &[f64], num_perms: usize, seed: u64) -> Result<f64> {
    check_lengths(a.len(), b.len(), 2)?;
    if num_perms == 0 {
        return Err(TppError::InvalidArgument("num_perms must be positive".into()));
    }
    let d: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let n = d.len() as f64;
    let observed = (d.iter().sum::<f64>() / n).abs();
    let scale = d.iter().map(|x| x.abs()).fold(0.0, f64::max);
    let tol = 1e-12 * scale.max(f64::MIN_POSITIVE);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut hits = 0usize;
    for _ in 0..num_perms {
        let s: f64 = d.iter().map(|&x| if rng.random::<bool>() { x } else { -x }).sum();
        if (s / n).abs() >= observed - tol {
            hits += 1;
        }
    }
    Ok((hits + 1) as f64 / (num_perms + 1) as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn error_rate_examples() {
        assert_eq!(error_rate(&[1, 2, 3], &[1, 2, 3]).unwrap(), 0.0);
        assert_eq!(error_rate(&[2, 2], &[1, 1]).unwrap(), 1.0);
        assert_eq!(error_rate(&[1, 2, 3, 4], &[1, 2, 3, 1]).unwrap(), 0.25);
        assert!(error_rate(&[1], &[1, 2]).is_err());
        assert!(error_rate(&[], &[]).is_err());
    }

    #[test]
    fn rmse_examples() {
        assert_eq!(time_rmse(&[1.5, 2.0], &[1.5, 2.0]).unwrap(), 0.0);
        assert!((time_rmse(&[1.0, 3.0], &[0.0, 0.0]).unwrap() - 5f64.sqrt()).abs() < 1e-15);
        assert!(time_rmse(&[1.0], &[]).is_err());
    }

    #[test]
    fn permutation_extremes() {
        let a = [0.3, 0.5, 0.2, 0.9];
        assert_eq!(permutation_test(&a, &a, 1000, 1).unwrap(), 1.0);
        assert!(permutation_test(&a, &a[..3], 10, 1).is_err());
        assert!(permutation_test(&a[..1], &a[..1], 10, 1).is_err());
    }
}

use log::warn;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Regression metrics for one split.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub rmse: f64,
    pub mae: f64,
    /// Missing when the targets are constant (or there is a single target).
    pub r2: Option<f64>,
    pub n: usize,
}

/// RMSE, MAE and coefficient of determination of `preds` against `targets`.
pub fn compute_metrics(preds: &[f64], targets: &[f64]) -> Result<Metrics> {
    if preds.len() != targets.len() {
        return Err(Error::dim("compute_metrics", &[preds.len()], &[targets.len()]));
    }
    let n = preds.len();
    if n == 0 {
        return Err(Error::Contract("metrics need at least one prediction".into()));
    }
    let nf = n as f64;
    let mut ss_res = 0.0;
    let mut abs = 0.0;
    for (p, t) in preds.iter().zip(targets) {
        ss_res += (p - t) * (p - t);
        abs += (p - t).abs();
    }
    let mean = targets.iter().sum::<f64>() / nf;
    let ss_tot: f64 = targets.iter().map(|t| (t - mean) * (t - mean)).sum();
    let r2 = if ss_tot > 0.0 {
        Some(1.0 - ss_res / ss_tot)
    } else {
        warn!("targets are constant over {n} examples; R² is undefined");
        None
    };
    Ok(Metrics {
        rmse: (ss_res / nf).sqrt(),
        mae: abs / nf,
        r2,
        n,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    /// Welford-style single pass over (pred, target) pairs.
    fn streaming(preds: &[f64], targets: &[f64]) -> (f64, f64, Option<f64>) {
        let (mut n, mut mean, mut m2, mut sq, mut abs) = (0.0, 0.0, 0.0, 0.0, 0.0);
        for (p, t) in preds.iter().zip(targets) {
            n += 1.0;
            let d = t - mean;
            mean += d / n;
            m2 += d * (t - mean);
            sq += (p - t) * (p - t);
            abs += (p - t).abs();
        }
        let r2 = (m2 > 0.0).then(|| 1.0 - sq / m2);
        ((sq / n).sqrt(), abs / n, r2)
    }

    #[test]
    fn analytic_cases() {
        let t = [1.0, 2.0, 4.0];
        let m = compute_metrics(&t, &t).unwrap();
        assert_eq!((m.rmse, m.mae, m.r2), (0.0, 0.0, Some(1.0)));

        let mean = [7.0 / 3.0; 3];
        assert_eq!(compute_metrics(&mean, &t).unwrap().r2, Some(0.0));

        let m = compute_metrics(&[0.0, 2.0], &[1.0, 2.0]).unwrap();
        assert!((m.rmse - 0.5f64.sqrt()).abs() < 1e-15);
        assert_eq!(m.mae, 0.5);
    }

    #[test]
    fn constant_targets_have_no_r2() {
        let m = compute_metrics(&[1.0, 2.0], &[3.0, 3.0]).unwrap();
        assert_eq!(m.r2, None);
        assert!(compute_metrics(&[], &[]).is_err());
        assert!(compute_metrics(&[1.0], &[1.0, 2.0]).is_err());
    }

    proptest! {
        #[test]
        fn matches_streaming_oracle(pairs in prop::collection::vec((-5.0f64..5.0, -5.0f64..5.0), 2..200)) {
            let (p, t): (Vec<f64>, Vec<f64>) = pairs.into_iter().unzip();
            let m = compute_metrics(&p, &t).unwrap();
            let (rmse, mae, r2) = streaming(&p, &t);
            prop_assert!((m.rmse - rmse).abs() < 1e-12);
            prop_assert!((m.mae - mae).abs() < 1e-12);
            match (m.r2, r2) {
                (Some(a), Some(b)) => prop_assert!((a - b).abs() <= 1e-12 * a.abs().max(1.0)),
                (a, b) => prop_assert_eq!(a, b),
            }
            prop_assert!(m.rmse >= m.mae && m.mae >= 0.0);
            prop_assert!(m.r2.is_none_or(|r| r <= 1.0));
        }
    }
}

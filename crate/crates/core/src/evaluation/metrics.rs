use crate::error::{Error, Result};
use crate::numerics::Rng;

fn check_pairs(actual: &[f64], estimated: &[f64]) -> Result<()> {
    if actual.len() != estimated.len() {
        return Err(Error::LengthMismatch {
            left: actual.len(),
            right: estimated.len(),
        });
    }
    if actual.is_empty() {
        return Err(Error::EmptyInput("actual/estimated"));
    }
    Ok(())
}

pub fn absolute_errors(actual: &[f64], estimated: &[f64]) -> Result<Vec<f64>> {
    check_pairs(actual, estimated)?;
    Ok(actual.iter().zip(estimated).map(|(a, e)| (a - e).abs()).collect())
}

pub fn mae(actual: &[f64], estimated: &[f64]) -> Result<f64> {
    let ae = absolute_errors(actual, estimated)?;
    Ok(ae.iter().sum::<f64>() / ae.len() as f64)
}

/// Standardized accuracy `(1 − MAE/MAE_rguess)·100`; negative when the model
/// is worse than guessing.
pub fn sa(mae_model: f64, mae_rguess: f64) -> Result<f64> {
    if !(mae_rguess > 0.0) {
        return Err(Error::InvalidArgument(format!("random-guess MAE must be > 0, got {mae_rguess}")));
    }
    Ok((1.0 - mae_model / mae_rguess) * 100.0)
}

/// Mean magnitude of relative error and the fraction of issues with
/// relative error at most `level_percent`/100.
pub fn mre_pred(actual: &[f64], estimated: &[f64], level_percent: f64) -> Result<(f64, f64)> {
    check_pairs(actual, estimated)?;
    if let Some(bad) = actual.iter().find(|&&a| !(a > 0.0)) {
        return Err(Error::InvalidArgument(format!("relative error needs actual > 0, got {bad}")));
    }
    let mre: Vec<f64> = actual.iter().zip(estimated).map(|(a, e)| (a - e).abs() / a).collect();
    let n = mre.len() as f64;
    // 1e-12 keeps exact boundary cases such as 1/4 = 0.25 inside
    let hits = mre.iter().filter(|&&m| m <= level_percent / 100.0 + 1e-12).count();
    Ok((mre.iter().sum::<f64>() / n, hits as f64 / n))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RandomGuessEstimate {
    pub mae: f64,
    /// Standard error of `mae` across runs.
    pub standard_error: f64,
    pub runs: usize,
}

/// Mean over `runs` of the MAE obtained when every test issue receives an
/// independent uniform draw from the training story points.
pub fn random_guess_mae(
    train_points: &[f64],
    test_actuals: &[f64],
    runs: usize,
    rng: &mut Rng,
) -> Result<RandomGuessEstimate> {
    if train_points.is_empty() || test_actuals.is_empty() {
        return Err(Error::EmptyInput("train points or test actuals"));
    }
    if runs == 0 {
        return Err(Error::InvalidArgument("runs must be >= 1".into()));
    }
    let per_run: Vec<f64> = (0..runs)
        .map(|_| {
            test_actuals
                .iter()
                .map(|a| (a - train_points[rng.below(train_points.len())]).abs())
                .sum::<f64>()
                / test_actuals.len() as f64
        })
        .collect();
    let mean = per_run.iter().sum::<f64>() / runs as f64;
    let var = if runs > 1 {
        per_run.iter().map(|m| (m - mean).powi(2)).sum::<f64>() / (runs - 1) as f64
    } else {
        0.0
    };
    Ok(RandomGuessEstimate {
        mae: mean,
        standard_error: (var / runs as f64).sqrt(),
        runs,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Rng;
    use proptest::prelude::*;

    #[test]
    fn mae_examples() {
        assert_eq!(mae(&[3.0, 5.0], &[4.0, 7.0]).unwrap(), 1.5);
        assert_eq!(mae(&[3.0, 5.0], &[3.0, 5.0]).unwrap(), 0.0);
        assert!(mae(&[], &[]).is_err());
        assert!(mae(&[1.0], &[1.0, 2.0]).is_err());
    }

    #[test]
    fn sa_examples() {
        assert_eq!(sa(0.0, 2.0).unwrap(), 100.0);
        assert_eq!(sa(2.0, 2.0).unwrap(), 0.0);
        assert_eq!(sa(4.0, 2.0).unwrap(), -100.0);
        assert!(sa(1.0, 0.0).is_err());
    }

    #[test]
    fn mre_examples() {
        assert_eq!(mre_pred(&[4.0, 2.0], &[4.0, 2.0], 25.0).unwrap(), (0.0, 1.0));
        assert_eq!(mre_pred(&[4.0], &[5.0], 25.0).unwrap(), (0.25, 1.0));
        assert_eq!(mre_pred(&[4.0], &[6.0], 25.0).unwrap(), (0.5, 0.0));
        assert!(mre_pred(&[0.0], &[1.0], 25.0).is_err());
    }

    #[test]
    fn random_guess_constant_cases() {
        let mut rng = Rng::new(1);
        assert_eq!(random_guess_mae(&[3.0; 4], &[3.0; 5], 50, &mut rng).unwrap().mae, 0.0);
        assert_eq!(random_guess_mae(&[3.0; 4], &[5.0; 5], 50, &mut rng).unwrap().mae, 2.0);
        assert!(random_guess_mae(&[], &[1.0], 5, &mut rng).is_err());
    }

    proptest! {
        #[test]
        fn sa_is_antitone_in_mae(a in 0.0f64..10.0, b in 0.0f64..10.0, g in 0.1f64..10.0) {
            let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
            prop_assert!(sa(lo, g).unwrap() >= sa(hi, g).unwrap());
        }
    }
}

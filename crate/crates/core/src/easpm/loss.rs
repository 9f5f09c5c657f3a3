use crate::error::{Error, Result};

fn check_temperature(temperature: f64) -> Result<()> {
    if !(temperature > 0.0) || !temperature.is_finite() {
        return Err(Error::config(format!(
            "temperature must be positive, got {temperature}"
        )));
    }
    Ok(())
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `log(1 + exp(x))` without overflow.
pub(crate) fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

/// Probability that the first item is preferred: `σ(τ (s_w - s_l))`.
pub fn preference_probability(s_w: f64, s_l: f64, temperature: f64) -> Result<f64> {
    check_temperature(temperature)?;
    Ok(sigmoid(temperature * (s_w - s_l)))
}

/// `-log σ(τ Δ) = log(1 + exp(-τ Δ))`.
pub fn preference_loss(s_w: f64, s_l: f64, temperature: f64) -> Result<f64> {
    check_temperature(temperature)?;
    Ok(softplus(-temperature * (s_w - s_l)))
}

/// Derivative of [`preference_loss`] with respect to `Δ = s_w - s_l`.
pub fn preference_loss_grad(s_w: f64, s_l: f64, temperature: f64) -> Result<f64> {
    check_temperature(temperature)?;
    Ok(-temperature * sigmoid(-temperature * (s_w - s_l)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn reference_values() {
        assert_eq!(preference_probability(0.3, 0.3, 10.0).unwrap(), 0.5);
        assert!(
            (preference_probability(0.75, 0.25, 2.0).unwrap() - 0.731_058_578_630_004_9).abs()
                < 1e-12
        );
        assert!((preference_loss(0.1, 0.1, 3.0).unwrap() - std::f64::consts::LN_2).abs() < 1e-15);
        assert!((preference_loss(2.0, 0.0, 1.0).unwrap() - 0.126_928_011_042_972_6).abs() < 1e-12);
    }

    #[test]
    fn temperature_must_be_positive() {
        assert!(matches!(
            preference_probability(0.0, 0.0, 0.0),
            Err(Error::Config(_))
        ));
        assert!(matches!(
            preference_loss(0.0, 0.0, -1.0),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn loss_vanishes_for_large_gaps_and_is_stable() {
        assert!(preference_loss(1e6, 0.0, 1.0).unwrap() < 1e-300);
        assert!((preference_loss(-1e3, 0.0, 1.0).unwrap() - 1e3).abs() < 1e-9);
    }

    proptest! {
        #[test]
        fn logistic_symmetry(a in -1.0f64..1.0, b in -1.0f64..1.0, tau in 0.1f64..50.0) {
            let p = preference_probability(a, b, tau).unwrap();
            let q = preference_probability(b, a, tau).unwrap();
            prop_assert!((p + q - 1.0).abs() < 1e-12);
            let l = preference_loss(a, b, tau).unwrap();
            prop_assert!((l + p.ln()).abs() < 1e-9);
            prop_assert!(l >= 0.0);
        }

        #[test]
        fn loss_monotone_in_each_score(a in -1.0f64..1.0, b in -1.0f64..1.0, h in 1e-3f64..0.5) {
            let base = preference_loss(a, b, 10.0).unwrap();
            prop_assert!(preference_loss(a + h, b, 10.0).unwrap() < base);
            prop_assert!(preference_loss(a, b + h, 10.0).unwrap() > base);
        }

        #[test]
        fn swapped_roles_sum_at_least_twice_log_two(d in -3.0f64..3.0) {
            let s = preference_loss(d, 0.0, 1.0).unwrap() + preference_loss(0.0, d, 1.0).unwrap();
            prop_assert!(s >= 2.0 * std::f64::consts::LN_2 - 1e-12);
        }

        #[test]
        fn gradient_matches_difference_quotient(d in -2.0f64..2.0, tau in 0.5f64..20.0) {
            let h = 1e-6;
            let num = (preference_loss(d + h, 0.0, tau).unwrap() - preference_loss(d - h, 0.0, tau).unwrap()) / (2.0 * h);
            let ana = preference_loss_grad(d, 0.0, tau).unwrap();
            prop_assert!((num - ana).abs() < 1e-6 * (1.0 + ana.abs()));
        }
    }
}

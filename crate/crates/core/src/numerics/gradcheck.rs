use rand::seq::index::sample;
use rand::Rng;

use super::params::ParamStore;

/// Compares the analytic gradient held in `store` with central differences.
///
/// Returns the relative error of the gradient vector,
/// `max_i |analytic_i - numeric_i| / max_i |numeric_i|`, over either every
/// parameter or a random subset of `subset` of them. Normalizing by the
/// largest component keeps entries whose true gradient is near zero from
/// reporting pure roundoff as error. The loss must be a deterministic
/// function of the parameter values.
pub fn finite_diff_check<R: Rng + ?Sized>(
    loss: impl Fn(&ParamStore) -> f64,
    store: &ParamStore,
    step: f64,
    subset: Option<usize>,
    rng: &mut R,
) -> f64 {
    let n = store.len();
    let indices: Vec<usize> = match subset {
        Some(k) if k < n => sample(rng, n, k).into_vec(),
        _ => (0..n).collect(),
    };
    let mut probe = store.clone();
    let mut worst = 0.0f64;
    let mut scale = 0.0f64;
    for i in indices {
        let orig = store.values()[i];
        probe.values_mut()[i] = orig + step;
        let plus = loss(&probe);
        probe.values_mut()[i] = orig - step;
        let minus = loss(&probe);
        probe.values_mut()[i] = orig;
        let numeric = (plus - minus) / (2.0 * step);
        let analytic = store.grads()[i];
        worst = worst.max((analytic - numeric).abs());
        scale = scale.max(numeric.abs());
    }
    worst / scale.max(f64::MIN_POSITIVE)
}

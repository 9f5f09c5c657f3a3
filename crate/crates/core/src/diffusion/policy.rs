use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::schedule::{NoiseSchedule, ScheduleConfig};
use crate::error::{Error, Result};
use crate::numerics::{
    load_checkpoint, save_checkpoint, time_features, vector, Mlp, MlpTrace, NetworkSpec,
    ParamStore, TIME_FEATURES,
};
use crate::rng::standard_normal_vec;

/// MDP state `(c, x_t)` of the denoising process.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentState {
    pub x: Vec<f64>,
    pub t: usize,
    pub class: usize,
}

impl LatentState {
    pub fn new(x: Vec<f64>, t: usize, class: usize) -> Self {
        Self { x, t, class }
    }
}

/// Anything that predicts the injected noise from a noisy state.
pub trait NoisePredictor {
    fn schedule(&self) -> &NoiseSchedule;
    fn predict_noise(&self, x: &[f64], t: usize, class: usize) -> Result<Vec<f64>>;
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DenoiserSpec {
    pub dim: usize,
    pub classes: usize,
    pub hidden: Vec<usize>,
}

impl DenoiserSpec {
    pub fn network(&self) -> Result<NetworkSpec> {
        let mut widths = vec![self.dim + TIME_FEATURES + self.classes];
        widths.extend(&self.hidden);
        widths.push(self.dim);
        NetworkSpec::new(widths)
    }
}

/// Class-conditional ε-prediction network together with its schedule; the
/// Gaussian reverse policy `p_θ(x_{t-1} | x_t, c)`.
#[derive(Debug, Clone)]
pub struct DiffusionPolicy {
    spec: DenoiserSpec,
    schedule_config: ScheduleConfig,
    schedule: NoiseSchedule,
    net: Mlp,
    params: ParamStore,
}

impl DiffusionPolicy {
    pub fn new<R: Rng + ?Sized>(
        spec: DenoiserSpec,
        schedule_config: ScheduleConfig,
        rng: &mut R,
    ) -> Result<Self> {
        let schedule = schedule_config.build()?;
        let mut params = ParamStore::new();
        let net = Mlp::new(spec.network()?, &mut params, "denoiser", rng)?;
        Ok(Self {
            spec,
            schedule_config,
            schedule,
            net,
            params,
        })
    }

    pub fn spec(&self) -> &DenoiserSpec {
        &self.spec
    }

    pub fn schedule_config(&self) -> &ScheduleConfig {
        &self.schedule_config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn dim(&self) -> usize {
        self.spec.dim
    }

    fn network_input(&self, x: &[f64], t: usize, class: usize) -> Result<Vec<f64>> {
        vector::check_len("latent", x, self.spec.dim)?;
        self.schedule.check_timestep(t)?;
        if class >= self.spec.classes {
            return Err(Error::usage(format!(
                "condition {class} outside [0, {})",
                self.spec.classes
            )));
        }
        let mut input = Vec::with_capacity(self.net.spec().input_width());
        input.extend_from_slice(x);
        input.extend_from_slice(&time_features(t, self.schedule.steps()));
        input.extend((0..self.spec.classes).map(|c| if c == class { 1.0 } else { 0.0 }));
        Ok(input)
    }

    pub fn forward_traced(&self, x: &[f64], t: usize, class: usize) -> Result<MlpTrace> {
        let input = self.network_input(x, t, class)?;
        self.net.forward(&self.params, &input)
    }

    /// Accumulates `d_noise`-weighted parameter gradients into `grads`.
    pub fn backward_noise(
        &self,
        trace: &MlpTrace,
        d_noise: &[f64],
        grads: &mut [f64],
    ) -> Result<()> {
        self.net.backward(&self.params, trace, d_noise, grads)?;
        Ok(())
    }

    /// Reverse mean together with the trace needed to differentiate it.
    pub fn reverse_mean_traced(&self, state: &LatentState) -> Result<(Vec<f64>, MlpTrace)> {
        require_transition(state.t)?;
        let trace = self.forward_traced(&state.x, state.t, state.class)?;
        let mu = mean_from_noise(&self.schedule, &state.x, state.t, trace.output());
        Ok((mu, trace))
    }

    /// Chain rule from `dL/dμ` at step `t` into parameter gradients.
    pub fn backward_mean(
        &self,
        trace: &MlpTrace,
        t: usize,
        d_mean: &[f64],
        grads: &mut [f64],
    ) -> Result<()> {
        let k = -self.schedule.eps_coefficient(t) / self.schedule.alpha(t).sqrt();
        let d_noise = vector::scale(d_mean, k);
        self.backward_noise(trace, &d_noise, grads)
    }

    pub fn save(&self, path: &Path, kind: &str, mut meta: toml::Table) -> Result<()> {
        meta.insert(
            "denoiser".into(),
            toml::Value::try_from(&self.spec).map_err(|e| Error::config(e.to_string()))?,
        );
        meta.insert(
            "schedule".into(),
            toml::Value::try_from(&self.schedule_config)
                .map_err(|e| Error::config(e.to_string()))?,
        );
        save_checkpoint(path, kind, &self.params, meta)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<(Self, toml::Table)> {
        let (manifest, params) = load_checkpoint(path)?;
        let field = |key: &str| {
            manifest
                .meta
                .get(key)
                .cloned()
                .ok_or_else(|| Error::format(path, format!("manifest lacks `{key}` metadata")))
        };
        let spec: DenoiserSpec = field("denoiser")?
            .try_into()
            .map_err(|e: toml::de::Error| Error::format(path, e.to_string()))?;
        let schedule_config: ScheduleConfig = field("schedule")?
            .try_into()
            .map_err(|e: toml::de::Error| Error::format(path, e.to_string()))?;
        let schedule = schedule_config.build()?;
        let net = Mlp::from_store(spec.network()?, &params, "denoiser")?;
        Ok((
            Self {
                spec,
                schedule_config,
                schedule,
                net,
                params,
            },
            manifest.meta,
        ))
    }
}

impl NoisePredictor for DiffusionPolicy {
    fn schedule(&self) -> &NoiseSchedule {
        &self.schedule
    }

    fn predict_noise(&self, x: &[f64], t: usize, class: usize) -> Result<Vec<f64>> {
        Ok(self.forward_traced(x, t, class)?.into_output())
    }
}

fn require_transition(t: usize) -> Result<()> {
    if t == 0 {
        return Err(Error::usage("no reverse transition below t = 0"));
    }
    Ok(())
}

/// `sqrt(alpha_bar_t) x0 + sqrt(1 - alpha_bar_t) eps`.
pub fn forward_sample(
    schedule: &NoiseSchedule,
    x0: &[f64],
    t: usize,
    eps: &[f64],
) -> Result<Vec<f64>> {
    schedule.check_timestep(t)?;
    vector::check_len("noise", eps, x0.len())?;
    let a = schedule.alpha_bar(t).sqrt();
    let s = (1.0 - schedule.alpha_bar(t)).sqrt();
    Ok(x0.iter().zip(eps).map(|(x, e)| a * x + s * e).collect())
}

/// Reverse mean under ε-prediction: `(x_t - beta_t / sqrt(1 - alpha_bar_t) eps_hat) / sqrt(alpha_t)`.
pub fn mean_from_noise(
    schedule: &NoiseSchedule,
    x_t: &[f64],
    t: usize,
    eps_hat: &[f64],
) -> Vec<f64> {
    let c = schedule.eps_coefficient(t);
    let inv = 1.0 / schedule.alpha(t).sqrt();
    x_t.iter()
        .zip(eps_hat)
        .map(|(x, e)| (x - c * e) * inv)
        .collect()
}

pub fn reverse_mean(model: &impl NoisePredictor, state: &LatentState) -> Result<Vec<f64>> {
    require_transition(state.t)?;
    let eps_hat = model.predict_noise(&state.x, state.t, state.class)?;
    Ok(mean_from_noise(
        model.schedule(),
        &state.x,
        state.t,
        &eps_hat,
    ))
}

/// One ancestral step; also returns the standard-normal draw that produced it.
pub fn reverse_sample<R: Rng + ?Sized>(
    model: &impl NoisePredictor,
    state: &LatentState,
    rng: &mut R,
) -> Result<(LatentState, Vec<f64>)> {
    let mu = reverse_mean(model, state)?;
    let z = standard_normal_vec(rng, mu.len());
    let next = perturb_mean(&mu, model.schedule().posterior_var(state.t), &z);
    Ok((LatentState::new(next, state.t - 1, state.class), z))
}

/// `mu + sqrt(var) z`.
pub fn perturb_mean(mu: &[f64], var: f64, z: &[f64]) -> Vec<f64> {
    let sd = var.sqrt();
    mu.iter().zip(z).map(|(m, n)| m + sd * n).collect()
}

/// Log density of an isotropic Gaussian `N(mean, var I)`.
pub fn gaussian_log_density(x: &[f64], mean: &[f64], var: f64) -> Result<f64> {
    if !(var > 0.0) {
        return Err(Error::usage(format!(
            "variance must be positive, got {var}"
        )));
    }
    vector::check_len("mean", mean, x.len())?;
    let d = x.len() as f64;
    Ok(-0.5 * d * (2.0 * std::f64::consts::PI * var).ln()
        - vector::squared_distance(x, mean) / (2.0 * var))
}

/// `log π_θ(candidate | s_t) - log π_ref(candidate | s_t)` for two policies
/// sharing one fixed variance, so the normalizers cancel exactly.
pub fn log_ratio_from_means(
    candidate: &[f64],
    mean_policy: &[f64],
    mean_reference: &[f64],
    var: f64,
) -> Result<f64> {
    if !(var > 0.0) {
        return Err(Error::usage(format!(
            "variance must be positive, got {var}"
        )));
    }
    Ok((vector::squared_distance(candidate, mean_reference)
        - vector::squared_distance(candidate, mean_policy))
        / (2.0 * var))
}

pub fn check_same_schedule(a: &impl NoisePredictor, b: &impl NoisePredictor) -> Result<()> {
    if a.schedule() != b.schedule() {
        return Err(Error::config(
            "policy and reference use different noise schedules",
        ));
    }
    Ok(())
}

pub fn log_ratio(
    policy: &impl NoisePredictor,
    reference: &impl NoisePredictor,
    state: &LatentState,
    candidate: &[f64],
) -> Result<f64> {
    check_same_schedule(policy, reference)?;
    let mu = reverse_mean(policy, state)?;
    let mu_ref = reverse_mean(reference, state)?;
    log_ratio_from_means(
        candidate,
        &mu,
        &mu_ref,
        policy.schedule().posterior_var(state.t),
    )
}

/// One-shot clean estimate `(x_t - sqrt(1 - alpha_bar_t) eps_hat) / sqrt(alpha_bar_t)`.
pub fn pseudo_clean(model: &impl NoisePredictor, state: &LatentState) -> Result<Vec<f64>> {
    require_transition(state.t)?;
    let ab = model.schedule().alpha_bar(state.t);
    if ab < 1e-8 {
        return Err(Error::Degenerate(format!(
            "alpha_bar[{}] = {ab:e} is too small for a clean estimate",
            state.t
        )));
    }
    let eps_hat = model.predict_noise(&state.x, state.t, state.class)?;
    let s = (1.0 - ab).sqrt();
    let inv = 1.0 / ab.sqrt();
    Ok(state
        .x
        .iter()
        .zip(&eps_hat)
        .map(|(x, e)| (x - s * e) * inv)
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffusion::VarianceKind;
    use crate::numerics::finite_diff_check;
    use crate::rng::stream;

    /// Returns a fixed noise vector regardless of input.
    struct FixedNoise<'a> {
        schedule: &'a NoiseSchedule,
        eps: Vec<f64>,
    }

    impl NoisePredictor for FixedNoise<'_> {
        fn schedule(&self) -> &NoiseSchedule {
            self.schedule
        }
        fn predict_noise(&self, _x: &[f64], _t: usize, _c: usize) -> Result<Vec<f64>> {
            Ok(self.eps.clone())
        }
    }

    fn small_policy(seed: u64) -> DiffusionPolicy {
        let spec = DenoiserSpec {
            dim: 8,
            classes: 3,
            hidden: vec![12],
        };
        DiffusionPolicy::new(
            spec,
            ScheduleConfig::default(),
            &mut stream(seed, "init", 0),
        )
        .unwrap()
    }

    #[test]
    fn forward_sample_limits() {
        let s = ScheduleConfig::default().build().unwrap();
        let x0 = vec![1.0, -2.0, 0.5];
        let zero = forward_sample(&s, &x0, 10, &[0.0; 3]).unwrap();
        for (a, b) in zero.iter().zip(&x0) {
            assert!((a - s.alpha_bar(10).sqrt() * b).abs() < 1e-15);
        }
        let eps = vec![0.3, 0.1, -0.7];
        let tight = NoiseSchedule::linear(200, 1e-3, 0.5, VarianceKind::default()).unwrap();
        let noisy = forward_sample(&tight, &x0, 200, &eps).unwrap();
        for (a, e) in noisy.iter().zip(&eps) {
            assert!((a - e).abs() < 1e-6);
        }
        assert!(matches!(
            forward_sample(&s, &x0, 51, &eps),
            Err(Error::Usage(_))
        ));
    }

    #[test]
    fn zero_noise_prediction_gives_scaled_state() {
        let s = ScheduleConfig::default().build().unwrap();
        let m = FixedNoise {
            schedule: &s,
            eps: vec![0.0; 3],
        };
        let st = LatentState::new(vec![1.0, 2.0, 3.0], 7, 0);
        let mu = reverse_mean(&m, &st).unwrap();
        for (a, b) in mu.iter().zip(&st.x) {
            assert!((a - b / s.alpha(7).sqrt()).abs() < 1e-15);
        }
        let pc = pseudo_clean(&m, &st).unwrap();
        for (a, b) in pc.iter().zip(&st.x) {
            assert!((a - b / s.alpha_bar(7).sqrt()).abs() < 1e-14);
        }
    }

    #[test]
    fn true_noise_gives_exact_posterior_mean() {
        let s = ScheduleConfig::default().build().unwrap();
        let mut rng = stream(3, "t", 0);
        let x0 = standard_normal_vec(&mut rng, 6);
        let eps = standard_normal_vec(&mut rng, 6);
        for t in [2, 10, 30, 50] {
            let xt = forward_sample(&s, &x0, t, &eps).unwrap();
            let m = FixedNoise {
                schedule: &s,
                eps: eps.clone(),
            };
            let mu = reverse_mean(&m, &LatentState::new(xt.clone(), t, 0)).unwrap();
            // closed-form posterior mean of q(x_{t-1} | x_t, x_0)
            let ab_prev = s.alpha_bar(t - 1);
            let ab = s.alpha_bar(t);
            let c0 = ab_prev.sqrt() * s.beta(t) / (1.0 - ab);
            let ct = s.alpha(t).sqrt() * (1.0 - ab_prev) / (1.0 - ab);
            for i in 0..6 {
                let expected = c0 * x0[i] + ct * xt[i];
                assert!((mu[i] - expected).abs() < 1e-12, "t={t}");
            }
        }
    }

    #[test]
    fn pseudo_clean_with_true_noise_recovers_clean_sample() {
        let s = ScheduleConfig::default().build().unwrap();
        let mut rng = stream(4, "t", 0);
        let x0 = standard_normal_vec(&mut rng, 16);
        let eps = standard_normal_vec(&mut rng, 16);
        for t in 1..=s.steps() {
            let xt = forward_sample(&s, &x0, t, &eps).unwrap();
            let m = FixedNoise {
                schedule: &s,
                eps: eps.clone(),
            };
            let est = pseudo_clean(&m, &LatentState::new(xt, t, 0)).unwrap();
            let err = est
                .iter()
                .zip(&x0)
                .map(|(a, b)| (a - b).abs())
                .fold(0.0, f64::max);
            assert!(err < 1e-10, "t={t} err={err}");
        }
        // near t = 0 the estimate is an identity minus the scaled noise
        let m = FixedNoise {
            schedule: &s,
            eps: eps.clone(),
        };
        let st = LatentState::new(x0.clone(), 1, 0);
        let est = pseudo_clean(&m, &st).unwrap();
        let s1 = (1.0 - s.alpha_bar(1)).sqrt();
        for i in 0..16 {
            assert!((est[i] - (x0[i] - s1 * eps[i])).abs() < 1e-3);
        }
    }

    #[test]
    fn pseudo_clean_refuses_vanishing_signal() {
        let s = NoiseSchedule::linear(400, 0.05, 0.5, VarianceKind::default()).unwrap();
        assert!(s.alpha_bar(400) < 1e-8);
        let m = FixedNoise {
            schedule: &s,
            eps: vec![0.0; 2],
        };
        let err = pseudo_clean(&m, &LatentState::new(vec![1.0, 1.0], 400, 0));
        assert!(matches!(err, Err(Error::Degenerate(_))));
    }

    #[test]
    fn transitions_below_zero_are_rejected() {
        let p = small_policy(0);
        let st = LatentState::new(vec![0.0; 8], 0, 0);
        assert!(matches!(reverse_mean(&p, &st), Err(Error::Usage(_))));
        assert!(matches!(pseudo_clean(&p, &st), Err(Error::Usage(_))));
        assert!(matches!(
            reverse_sample(&p, &st, &mut stream(0, "x", 0)),
            Err(Error::Usage(_))
        ));
    }

    #[test]
    fn zero_variance_transition_is_deterministic() {
        let s = NoiseSchedule::linear(10, 1e-3, 0.2, VarianceKind::Posterior).unwrap();
        let m = FixedNoise {
            schedule: &s,
            eps: vec![0.2, -0.1],
        };
        let st = LatentState::new(vec![0.5, 0.5], 1, 0);
        let (next, _) = reverse_sample(&m, &st, &mut stream(1, "z", 0)).unwrap();
        assert_eq!(next.x, reverse_mean(&m, &st).unwrap());
        assert_eq!(next.t, 0);
    }

    #[test]
    fn reverse_sample_is_reproducible() {
        let p = small_policy(1);
        let st = LatentState::new(vec![0.3; 8], 20, 2);
        let a = reverse_sample(&p, &st, &mut stream(9, "z", 0)).unwrap();
        let b = reverse_sample(&p, &st, &mut stream(9, "z", 0)).unwrap();
        assert_eq!(a, b);
        // the recorded draw reproduces the step
        let mu = reverse_mean(&p, &st).unwrap();
        assert_eq!(
            perturb_mean(&mu, p.schedule().posterior_var(20), &a.1),
            a.0.x
        );
    }

    #[test]
    fn unit_gaussian_density_at_mean() {
        let v = gaussian_log_density(&[0.4], &[0.4], 1.0).unwrap();
        assert!((v + 0.918_938_533_204_672_7).abs() < 1e-12);
        assert!(matches!(
            gaussian_log_density(&[0.0], &[0.0], 0.0),
            Err(Error::Usage(_))
        ));
    }

    #[test]
    fn log_ratio_vanishes_for_identical_policies() {
        let p = small_policy(2);
        let r = p.clone();
        let mut rng = stream(2, "lr", 0);
        for t in 1..=50 {
            let st = LatentState::new(standard_normal_vec(&mut rng, 8), t, t % 3);
            let cand = standard_normal_vec(&mut rng, 8);
            assert_eq!(log_ratio(&p, &r, &st, &cand).unwrap(), 0.0);
        }
    }

    #[test]
    fn log_ratio_matches_two_density_subtraction() {
        let p = small_policy(3);
        let r = small_policy(4);
        let mut rng = stream(5, "lr", 0);
        let st = LatentState::new(standard_normal_vec(&mut rng, 8), 17, 1);
        let cand = standard_normal_vec(&mut rng, 8);
        let var = p.schedule().posterior_var(17);
        let lp = gaussian_log_density(&cand, &reverse_mean(&p, &st).unwrap(), var).unwrap();
        let lr = gaussian_log_density(&cand, &reverse_mean(&r, &st).unwrap(), var).unwrap();
        let ratio = log_ratio(&p, &r, &st, &cand).unwrap();
        assert!((ratio - (lp - lr)).abs() < 1e-9 * (1.0 + ratio.abs()));
        // the policy's own mean is its density maximum
        let mu = reverse_mean(&p, &st).unwrap();
        assert!(log_ratio(&p, &r, &st, &mu).unwrap() > 0.0);
    }

    #[test]
    fn mismatched_schedules_rejected() {
        let p = small_policy(0);
        let other = DiffusionPolicy::new(
            p.spec().clone(),
            ScheduleConfig {
                steps: 20,
                ..ScheduleConfig::default()
            },
            &mut stream(0, "init", 0),
        )
        .unwrap();
        let st = LatentState::new(vec![0.0; 8], 5, 0);
        assert!(matches!(
            log_ratio(&p, &other, &st, &[0.0; 8]),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn reverse_mean_gradient_matches_finite_differences() {
        let mut p = small_policy(6);
        let mut rng = stream(6, "fd", 0);
        let st = LatentState::new(standard_normal_vec(&mut rng, 8), 12, 1);
        let w = standard_normal_vec(&mut rng, 8);
        let (_, trace) = p.reverse_mean_traced(&st).unwrap();
        let mut g = p.params().grad_buffer();
        p.backward_mean(&trace, 12, &w, &mut g).unwrap();
        p.params_mut().grads_mut().copy_from_slice(&g);
        let base = p.clone();
        let loss = |s: &ParamStore| {
            let mut q = base.clone();
            q.params_mut().set_values(s.values()).unwrap();
            vector::dot(&reverse_mean(&q, &st).unwrap(), &w)
        };
        let err = finite_diff_check(loss, p.params(), 1e-6, Some(60), &mut rng);
        assert!(err < 1e-5, "{err}");
    }

    #[test]
    fn checkpoint_round_trip_preserves_predictions() {
        let p = small_policy(8);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("policy.toml");
        p.save(&path, "denoiser", toml::Table::new()).unwrap();
        let (q, _) = DiffusionPolicy::load(&path).unwrap();
        let x = vec![0.25; 8];
        assert_eq!(
            p.predict_noise(&x, 9, 1).unwrap(),
            q.predict_noise(&x, 9, 1).unwrap()
        );
        assert_eq!(p.schedule(), q.schedule());
    }
}

use easpo_core::config::RunConfig;
use easpo_core::diffusion::{
    log_ratio, pseudo_clean, replay, sample_trajectory, DenoiserSpec, DiffusionPolicy, LatentState,
    NoiseSchedule, ScheduleConfig, VarianceKind,
};
use easpo_core::easpo::{pool_weight, sample_candidates, AlignConfig};
use easpo_core::rng::{standard_normal_vec, stream};
use proptest::prelude::*;
use rand::Rng;

fn policy(seed: u64, hidden: usize) -> DiffusionPolicy {
    let spec = DenoiserSpec {
        dim: 6,
        classes: 2,
        hidden: vec![hidden],
    };
    DiffusionPolicy::new(
        spec,
        ScheduleConfig::default(),
        &mut stream(seed, "policy", 0),
    )
    .unwrap()
}

fn jittered(p: &DiffusionPolicy, seed: u64) -> DiffusionPolicy {
    let mut q = p.clone();
    let mut rng = stream(seed, "jitter", 0);
    for v in q.params_mut().values_mut() {
        *v += 0.1 * (rng.random::<f64>() - 0.5);
    }
    q
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn schedule_is_monotone_and_bounded(steps in 2usize..200, lo in 1e-5f64..1e-2, span in 1e-3f64..0.5) {
        let s = NoiseSchedule::linear(steps, lo, lo + span, VarianceKind::ClippedPosterior).unwrap();
        for t in 1..=steps {
            let ab = s.alpha_bar(t);
            prop_assert!(ab > 0.0 && ab < 1.0);
            prop_assert!(t == 1 || ab < s.alpha_bar(t - 1));
            prop_assert!(s.posterior_var(t) > 0.0);
            prop_assert!(s.posterior_var(t) <= s.beta(t) + 1e-15);
        }
    }

    #[test]
    fn log_ratio_is_antisymmetric(seed in 0u64..1000, t in 1usize..=50, class in 0usize..2) {
        let p = policy(seed, 5);
        let q = jittered(&p, seed);
        let mut rng = stream(seed, "state", 0);
        let state = LatentState::new(standard_normal_vec(&mut rng, 6), t, class);
        let c = standard_normal_vec(&mut rng, 6);
        let a = log_ratio(&p, &q, &state, &c).unwrap();
        let b = log_ratio(&q, &p, &state, &c).unwrap();
        prop_assert!((a + b).abs() <= 1e-9 * (1.0 + a.abs()));
    }

    #[test]
    fn candidates_share_the_parent(seed in 0u64..1000, t in 1usize..=50, k in 2usize..8) {
        let p = policy(seed, 4);
        let mut rng = stream(seed, "pool", 0);
        let state = LatentState::new(standard_normal_vec(&mut rng, 6), t, 1);
        let pool = sample_candidates(&p, &state, k, &mut rng).unwrap();
        prop_assert_eq!(pool.candidates.len(), k);
        prop_assert_eq!(pool.parent.t, t);
        prop_assert!(pool.candidates.iter().all(|c| c.len() == 6 && c.iter().all(|v| v.is_finite())));
    }

    #[test]
    fn trajectories_replay_exactly(seed in 0u64..10_000, class in 0usize..2) {
        let p = policy(3, 4);
        let a = sample_trajectory(&p, class, 6, seed).unwrap();
        let b = sample_trajectory(&p, class, 6, seed).unwrap();
        prop_assert_eq!(a.final_sample(), b.final_sample());
        prop_assert!(replay(&p, 6, &a.dump()).unwrap().matched());
    }

    #[test]
    fn pseudo_clean_is_finite_on_every_step(seed in 0u64..1000, t in 1usize..=50) {
        let p = policy(seed, 4);
        let mut rng = stream(seed, "clean", 0);
        let est = pseudo_clean(&p, &LatentState::new(standard_normal_vec(&mut rng, 6), t, 0)).unwrap();
        prop_assert!(est.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn pool_weights_decay_towards_noise(lambda in 0.5f64..1.0, eta in 0.1f64..4.0) {
        let cfg = AlignConfig { lambda, eta, ..AlignConfig::default() };
        let (lo, hi) = cfg.pooled_range(50);
        prop_assert_eq!((lo, hi), (1, 38));
        prop_assert!((pool_weight(50, 50, &cfg) - 1.0 / eta).abs() < 1e-12);
        for t in lo..hi {
            prop_assert!(pool_weight(t + 1, 50, &cfg) >= pool_weight(t, 50, &cfg));
        }
    }

    #[test]
    fn config_round_trips_for_any_seed(seed in any::<u64>(), lr in 1e-7f64..1e-2, k in 2usize..16) {
        let mut cfg = RunConfig::default().with_seed(seed);
        cfg.align.lr = lr;
        cfg.align.k = k;
        let back = RunConfig::from_toml(&cfg.to_toml().unwrap()).unwrap();
        prop_assert_eq!(back.digest().unwrap(), cfg.digest().unwrap());
        prop_assert_eq!(back, cfg);
    }
}

#[test]
fn checkpoints_reload_to_identical_predictions() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("p.toml");
    let p = jittered(&policy(5, 7), 9);
    p.save(&path, "denoiser", Default::default()).unwrap();
    let (q, _) = DiffusionPolicy::load(&path).unwrap();
    let mut rng = stream(5, "check", 0);
    for t in [1, 17, 50] {
        let x = standard_normal_vec(&mut rng, 6);
        let s = LatentState::new(x, t, 1);
        assert_eq!(pseudo_clean(&p, &s).unwrap(), pseudo_clean(&q, &s).unwrap());
    }
}

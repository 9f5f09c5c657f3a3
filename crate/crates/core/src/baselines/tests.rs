use rand::Rng;

use super::eval::sample_with_drift;
use super::*;
use crate::diffusion::{
    perturb_mean, sample_trajectory, DenoiserSpec, LatentState, NoisePredictor, ScheduleConfig,
    Trajectory,
};
use crate::easpm::{Scorer, ScorerSpec};
use crate::numerics::{finite_diff_check, vector, ParamStore};
use crate::rng::{standard_normal_vec, stream};
use crate::task::{EmotionClass, TaskConfig};

fn policy(dim: usize, classes: usize, hidden: usize, seed: u64) -> DiffusionPolicy {
    let spec = DenoiserSpec {
        dim,
        classes,
        hidden: vec![hidden],
    };
    DiffusionPolicy::new(
        spec,
        ScheduleConfig::default(),
        &mut stream(seed, "init", 0),
    )
    .unwrap()
}

fn perturbed(p: &DiffusionPolicy, scale: f64, seed: u64) -> DiffusionPolicy {
    let mut q = p.clone();
    let mut rng = stream(seed, "perturb", 0);
    for v in q.params_mut().values_mut() {
        *v += scale * (rng.random::<f64>() - 0.5);
    }
    q
}

fn task() -> SyntheticTask {
    SyntheticTask::new(TaskConfig {
        dim: 24,
        classes: 3,
        texture_scale: 0.05,
    })
    .unwrap()
}

fn frozen_scorer(dim: usize, classes: usize, time_conditioning: bool) -> Scorer {
    let spec = ScorerSpec {
        dim,
        classes,
        steps: 50,
        hidden: vec![16],
        embed_dim: 8,
        time_conditioning,
        temperature: 10.0,
        pseudo_clean: false,
    };
    let mut s = Scorer::new(spec, &mut stream(1, "scorer", 0)).unwrap();
    s.freeze();
    s
}

fn tiny_config() -> AlignConfig {
    AlignConfig {
        batch: 4,
        batches_per_epoch: 2,
        epochs: 1,
        lr: 1e-3,
        ..AlignConfig::for_steps(50)
    }
}

/// A pair of distinct trajectories from `p` supervised at step `t`.
fn pair(p: &DiffusionPolicy, t: usize) -> EndpointPair {
    let a = sample_trajectory(p, 1, p.dim(), 10).unwrap();
    let b = sample_trajectory(p, 1, p.dim(), 11).unwrap();
    EndpointPair { win: a, lose: b, t }
}

#[test]
fn dpo_loss_is_log_two_at_reference() {
    let p = policy(8, 3, 6, 0);
    for t in [1, 10, 50] {
        let l = endpoint_dpo_loss(&p, &p, &pair(&p, t), 0.7, None).unwrap();
        assert_eq!(l.log_ratio_gap, 0.0);
        assert!((l.loss - std::f64::consts::LN_2).abs() < 1e-12);
    }
}

#[test]
fn dpo_gradient_matches_finite_differences() {
    let reference = policy(8, 3, 6, 0);
    let mut p = perturbed(&reference, 0.3, 1);
    let sampled = pair(&reference, 17);
    let mut grads = p.params().grad_buffer();
    let l = endpoint_dpo_loss(&p, &reference, &sampled, 0.8, Some(&mut grads)).unwrap();
    assert!(l.log_ratio_gap != 0.0);
    p.params_mut().grads_mut().copy_from_slice(&grads);
    let probe = p.clone();
    let loss = |s: &ParamStore| {
        let mut q = probe.clone();
        q.params_mut().set_values(s.values()).unwrap();
        endpoint_dpo_loss(&q, &reference, &sampled, 0.8, None)
            .unwrap()
            .loss
    };
    let err = finite_diff_check(loss, p.params(), 1e-6, None, &mut stream(2, "fd", 0));
    assert!(err < 1e-5, "{err}");
}

#[test]
fn swapped_labels_sum_to_at_least_two_log_two() {
    let reference = policy(8, 3, 6, 0);
    let p = perturbed(&reference, 0.3, 3);
    let fwd = pair(&reference, 25);
    let rev = EndpointPair {
        win: fwd.lose.clone(),
        lose: fwd.win.clone(),
        t: fwd.t,
    };
    let a = endpoint_dpo_loss(&p, &reference, &fwd, 1.0, None).unwrap();
    let b = endpoint_dpo_loss(&p, &reference, &rev, 1.0, None).unwrap();
    assert!((a.log_ratio_gap + b.log_ratio_gap).abs() < 1e-9);
    assert!(a.loss + b.loss >= 2.0 * std::f64::consts::LN_2);
}

#[test]
fn endpoint_pairs_follow_the_oracle() {
    let task = task();
    let p = policy(24, 3, 8, 0);
    let a = sample_trajectory(&p, 2, 24, 1).unwrap();
    let b = sample_trajectory(&p, 2, 24, 2).unwrap();
    let pair = endpoint_pair(&task, a.clone(), b, 5).unwrap().unwrap();
    assert!(
        task.oracle_score(pair.win.final_sample(), 2).unwrap()
            > task.oracle_score(pair.lose.final_sample(), 2).unwrap()
    );
    assert!(endpoint_pair(&task, a.clone(), a, 5).unwrap().is_none());
}

#[test]
fn advantages_of_constant_rewards_vanish() {
    assert_eq!(batch_mean_advantages(&[0.1, 0.1, 0.1]), vec![0.0; 3]);
    let adv = batch_mean_advantages(&[1.0, 0.0, 2.0]);
    assert_eq!(adv, vec![0.0, -1.0, 1.0]);
}

#[test]
fn constant_reward_gives_zero_gradient() {
    let p = policy(8, 3, 6, 0);
    let trajs: Vec<_> = (0..4)
        .map(|s| sample_trajectory(&p, 0, 8, s).unwrap())
        .collect();
    let adv = batch_mean_advantages(&[0.3; 4]);
    let mut grads = p.params().grad_buffer();
    policy_gradient_loss(&p, &trajs, &adv, Some(&mut grads)).unwrap();
    assert!(grads.iter().all(|g| *g == 0.0));
}

#[test]
fn positive_advantage_raises_own_likelihood() {
    let mut p = policy(8, 3, 6, 0);
    let traj = sample_trajectory(&p, 1, 8, 4).unwrap();
    let before = trajectory_log_likelihood(&p, &traj).unwrap();
    let mut grads = p.params().grad_buffer();
    policy_gradient_loss(&p, std::slice::from_ref(&traj), &[1.0], Some(&mut grads)).unwrap();
    for (v, g) in p.params_mut().values_mut().iter_mut().zip(&grads) {
        *v -= 1e-5 * g;
    }
    let after = trajectory_log_likelihood(&p, &traj).unwrap();
    assert!(after > before, "{before} -> {after}");
}

#[test]
fn score_function_estimator_is_unbiased_on_one_step() {
    // One transition from a fixed state with reward r . a. The baselined
    // estimator over a batch of B has mean (B - 1) / B times the exact
    // gradient J^T r of the expected reward.
    let p = policy(8, 3, 6, 5);
    let t = 30;
    let var = p.schedule().posterior_var(t);
    let state = LatentState::new(standard_normal_vec(&mut stream(0, "s", 0), 8), t, 2);
    let (mu, trace) = p.reverse_mean_traced(&state).unwrap();
    let r: Vec<f64> = (0..8).map(|i| 0.5 - 0.1 * i as f64).collect();
    let mut exact = p.params().grad_buffer();
    p.backward_mean(&trace, t, &r, &mut exact).unwrap();
    let batch = 4usize;
    let expected_scale = -((batch - 1) as f64) / batch as f64;
    let mut rng = stream(7, "dirs", 0);
    let dirs: Vec<Vec<f64>> = (0..3)
        .map(|_| standard_normal_vec(&mut rng, exact.len()))
        .collect();
    let mut samples = vec![Vec::new(); dirs.len()];
    let mut rng = stream(8, "mc", 0);
    for _ in 0..10_000 {
        let mut trajs = Vec::with_capacity(batch);
        let mut rewards = Vec::with_capacity(batch);
        for _ in 0..batch {
            let z = standard_normal_vec(&mut rng, 8);
            let a = perturb_mean(&mu, var, &z);
            rewards.push(vector::dot(&r, &a));
            trajs.push(Trajectory {
                class: 2,
                seed: 0,
                states: vec![state.clone(), LatentState::new(a, t - 1, 2)],
                noises: vec![z],
            });
        }
        let mut g = p.params().grad_buffer();
        policy_gradient_loss(&p, &trajs, &batch_mean_advantages(&rewards), Some(&mut g)).unwrap();
        for (d, s) in dirs.iter().zip(samples.iter_mut()) {
            s.push(vector::dot(d, &g));
        }
    }
    for (d, s) in dirs.iter().zip(&samples) {
        let want = expected_scale * vector::dot(d, &exact);
        let m = vector::mean(s);
        let se = vector::std_dev(s) / (s.len() as f64).sqrt();
        assert!((m - want).abs() < 3.0 * se, "mean {m} vs {want} (se {se})");
    }
}

#[test]
fn drift_sampler_matches_plain_sampling() {
    let base = policy(24, 3, 8, 0);
    let p = perturbed(&base, 0.1, 1);
    let (x, drift) = sample_with_drift(&p, &base, 1, 24, 99).unwrap();
    assert_eq!(x, sample_trajectory(&p, 1, 24, 99).unwrap().final_sample());
    assert!(drift != 0.0);
    let (_, zero) = sample_with_drift(&base, &base, 1, 24, 99).unwrap();
    assert_eq!(zero, 0.0);
}

#[test]
fn self_evaluation_is_a_tie() {
    let task = task();
    let p = policy(24, 3, 8, 0);
    let scorer = frozen_scorer(24, 3, true);
    let r = evaluate(&p, &p, &scorer, &task, 500, 3, "digest").unwrap();
    assert_eq!(r.win_rate(), 0.5);
    assert_eq!(r.oracle_gain(), 0.0);
    assert_eq!(r.logratio_drift, 0.0);
    assert!(r.scorer_mean.abs() <= 1.0);
    assert_eq!(
        r,
        evaluate(&p, &p, &scorer, &task, 500, 3, "digest").unwrap()
    );
}

#[test]
fn evaluation_needs_enough_samples() {
    let p = policy(24, 3, 8, 0);
    let err = evaluate(&p, &p, &frozen_scorer(24, 3, true), &task(), 499, 0, "").unwrap_err();
    assert!(matches!(err, Error::Config(_)));
}

#[test]
fn permutation_test_separates_conditional_from_blind_samples() {
    let task = task();
    let p = policy(24, 3, 8, 0);
    let blind: Vec<(Vec<f64>, usize)> = (0..300)
        .map(|i| {
            let c = i % 3;
            (
                sample_trajectory(&p, c, 24, i as u64)
                    .unwrap()
                    .final_sample()
                    .to_vec(),
                c,
            )
        })
        .collect();
    let p_blind = class_permutation_test(&task, &blind, 999, &mut stream(0, "perm", 0)).unwrap();
    assert!(p_blind > 0.05, "{p_blind}");
    let mut rng = stream(1, "clean", 0);
    let conditional: Vec<(Vec<f64>, usize)> = (0..300)
        .map(|i| {
            (
                task.generate_clean(EmotionClass::new(i % 3), &mut rng).x0,
                i % 3,
            )
        })
        .collect();
    let p_cond =
        class_permutation_test(&task, &conditional, 999, &mut stream(0, "perm", 0)).unwrap();
    assert!(p_cond < 0.01, "{p_cond}");
}

#[test]
fn baselines_train_from_a_snapshot() {
    let task = task();
    let scorer = frozen_scorer(24, 3, true);
    for method in [Method::EndpointDpo, Method::RewardPg, Method::Easpo] {
        let mut p = policy(24, 3, 8, 0);
        let start = p.params().values().to_vec();
        let reference = run_method(method, &mut p, &scorer, &task, &tiny_config(), 4).unwrap();
        assert_eq!(reference.params().values(), start.as_slice());
        assert_ne!(p.params().values(), start.as_slice(), "{method:?}");
    }
}

#[test]
fn baselines_refuse_unfrozen_scorer() {
    let task = task();
    let mut scorer = frozen_scorer(24, 3, true);
    scorer = Scorer::new(scorer.spec().clone(), &mut stream(0, "x", 0)).unwrap();
    for method in [Method::EndpointDpo, Method::RewardPg, Method::Easpo] {
        let mut p = policy(24, 3, 8, 0);
        let err = run_method(method, &mut p, &scorer, &task, &tiny_config(), 0).unwrap_err();
        assert!(matches!(err, Error::Usage(_)));
    }
}

#[test]
fn axis_names_round_trip() {
    for axis in AblationAxis::ALL {
        assert_eq!(AblationAxis::parse(axis.name()).unwrap(), axis);
    }
    assert!(matches!(
        AblationAxis::parse("temperature"),
        Err(Error::Config(_))
    ));
}

#[test]
fn timestep_windows_rescale_to_the_schedule() {
    assert_eq!(
        AblationAxis::TimestepRange.default_values(50),
        ["1-13", "1-25", "1-38", "1-50", "14-38", "26-38", "14-25"]
    );
    let base = AlignConfig::for_steps(50);
    let v = AblationAxis::TimestepRange.variant("1-38", &base).unwrap();
    assert_eq!(v.config.pooled_range(50), base.pooled_range(50));
}

#[test]
fn axis_values_map_onto_the_config() {
    let base = AlignConfig::for_steps(50);
    let v = AblationAxis::K.variant("8", &base).unwrap();
    assert_eq!(v.config.k, 8);
    let v = AblationAxis::NextState.variant("lose", &base).unwrap();
    assert_eq!(v.config.next_state, crate::easpo::NextState::Lose);
    let v = AblationAxis::WinLose.variant("random-pair", &base).unwrap();
    assert_eq!(
        v.config.pair_selection,
        crate::easpm::PairSelection::RandomPair
    );
    let v = AblationAxis::Method.variant("reward-pg", &base).unwrap();
    assert_eq!(v.method, Method::RewardPg);
    let v = AblationAxis::TimeConditioning
        .variant("off", &base)
        .unwrap();
    assert!(!v.time_conditioned);
    for (axis, bad) in [
        (AblationAxis::K, "four"),
        (AblationAxis::NextState, "best"),
        (AblationAxis::TimestepRange, "10"),
        (AblationAxis::Method, "d3po"),
    ] {
        assert!(matches!(axis.variant(bad, &base), Err(Error::Config(_))));
    }
}

#[test]
fn ablation_writes_per_seed_rows_and_summary() {
    let task = task();
    let contexts: Vec<SeedContext> = (0..2)
        .map(|seed| SeedContext {
            seed,
            align_seed: seed + 10,
            eval_seed: seed + 20,
            pretrained: policy(24, 3, 8, seed),
            scorer: frozen_scorer(24, 3, true),
            time_blind_scorer: Some(frozen_scorer(24, 3, false)),
        })
        .collect();
    let values = vec!["on".to_string(), "off".to_string()];
    let cells = run_ablation(
        AblationAxis::TimeConditioning,
        &values,
        &tiny_config(),
        &contexts,
        &task,
        500,
        "d",
    )
    .unwrap();
    assert_eq!(cells.len(), 4);
    let again = run_ablation(
        AblationAxis::TimeConditioning,
        &values,
        &tiny_config(),
        &contexts[..1],
        &task,
        500,
        "d",
    )
    .unwrap();
    assert_eq!(again[..], cells[..2]);
    let dir = tempfile::tempdir().unwrap();
    write_ablation_csv(&dir.path().join("a.csv"), &cells).unwrap();
    write_summary_csv(&dir.path().join("s.csv"), &cells).unwrap();
    let a = std::fs::read_to_string(dir.path().join("a.csv")).unwrap();
    assert!(a.starts_with("value,seed,oracle_mean,oracle_gain,win_rate,scorer_mean,logratio_drift\n"));
    assert_eq!(a.lines().count(), 5);
    let s = std::fs::read_to_string(dir.path().join("s.csv")).unwrap();
    let rows: Vec<&str> = s.lines().collect();
    assert_eq!(rows.len(), 3);
    assert!(rows[1].starts_with("time-conditioning,on,2,"));
    let on: Vec<f64> = cells
        .iter()
        .filter(|c| c.value == "on")
        .map(|c| c.report.oracle_mean())
        .collect();
    let field: f64 = rows[1].split(',').nth(3).unwrap().parse().unwrap();
    assert_eq!(field, vector::mean(&on));
}

#[test]
fn missing_time_blind_scorer_is_a_config_error() {
    let ctx = SeedContext {
        seed: 0,
        align_seed: 0,
        eval_seed: 0,
        pretrained: policy(24, 3, 8, 0),
        scorer: frozen_scorer(24, 3, true),
        time_blind_scorer: None,
    };
    let v = AblationAxis::TimeConditioning
        .variant("off", &tiny_config())
        .unwrap();
    assert!(matches!(
        run_variant(&ctx, &v, &task(), 500, ""),
        Err(Error::Config(_))
    ));
}

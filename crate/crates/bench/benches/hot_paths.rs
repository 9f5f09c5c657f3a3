use std::hint::black_box;

use criterion::{criterion_group, criterion_main, Criterion};
use easpo_core::config::RunConfig;
use easpo_core::diffusion::{DiffusionPolicy, LatentState, NoisePredictor};
use easpo_core::easpm::Scorer;
use easpo_core::easpo::{rollout, sample_candidates, step_loss, ReferencePolicy};
use easpo_core::rng::{standard_normal_vec, stream};

struct Fixture {
    cfg: RunConfig,
    policy: DiffusionPolicy,
    reference: ReferencePolicy,
    scorer: Scorer,
}

fn fixture() -> Fixture {
    let cfg = RunConfig::default();
    let policy = DiffusionPolicy::new(
        cfg.denoiser_spec(),
        cfg.schedule.clone(),
        &mut stream(1, "bench", 0),
    )
    .unwrap();
    let reference = ReferencePolicy::snapshot(&policy);
    let mut scorer = Scorer::new(cfg.scorer_spec(true), &mut stream(1, "bench", 1)).unwrap();
    scorer.set_preprocessor(policy.clone()).unwrap();
    scorer.freeze();
    Fixture {
        cfg,
        policy,
        reference,
        scorer,
    }
}

fn denoiser(c: &mut Criterion) {
    let f = fixture();
    let mut rng = stream(2, "bench", 0);
    let x = standard_normal_vec(&mut rng, f.cfg.task.dim);
    c.bench_function("denoiser forward", |b| {
        b.iter(|| f.policy.predict_noise(black_box(&x), 20, 1).unwrap())
    });
    let d = standard_normal_vec(&mut rng, f.cfg.task.dim);
    let mut grads = f.policy.params().grad_buffer();
    c.bench_function("denoiser forward + backward", |b| {
        b.iter(|| {
            let trace = f.policy.forward_traced(black_box(&x), 20, 1).unwrap();
            f.policy.backward_noise(&trace, &d, &mut grads).unwrap();
        })
    });
}

fn scorer(c: &mut Criterion) {
    let f = fixture();
    let x = standard_normal_vec(&mut stream(3, "bench", 0), f.cfg.task.dim);
    c.bench_function("scorer score (clean estimate)", |b| {
        b.iter(|| f.scorer.score(black_box(&x), 20, 1).unwrap())
    });
}

fn alignment(c: &mut Criterion) {
    let f = fixture();
    let mut rng = stream(4, "bench", 0);
    let state = LatentState::new(standard_normal_vec(&mut rng, f.cfg.task.dim), 20, 1);
    let mut grads = f.policy.params().grad_buffer();
    c.bench_function("pooled step loss (k = 4)", |b| {
        b.iter(|| {
            let pool = sample_candidates(&f.policy, &state, f.cfg.align.k, &mut rng).unwrap();
            step_loss(
                &f.policy,
                &f.reference,
                &f.scorer,
                &pool,
                &f.cfg.align,
                Some(&mut grads),
            )
            .unwrap()
        })
    });
    c.bench_function("single-tau rollout", |b| {
        b.iter(|| {
            rollout(
                &f.policy,
                &f.reference,
                &f.scorer,
                &f.cfg.align,
                2,
                0,
                &mut rng,
                Some(&mut grads),
                false,
            )
            .unwrap()
        })
    });
}

criterion_group!(benches, denoiser, scorer, alignment);
criterion_main!(benches);

//! Noise generation: projection bound, step-size schedule, stopping rule,
//! loss descent, determinism, the base-noise equivalence and class-wise
//! aggregation.

use armor_core::augment::{augment_var, plan_policy, AugPolicy};
use armor_core::data::{gen_synthetic, ImageBatch, SyntheticSpec};
use armor_core::eval::apply_noise;
use armor_core::model::{build_surrogate, cross_entropy, logits, ArchDescriptor, Network};
use armor_core::noise::{
    adaptive_step, base_noise_emin, classwise_aggregate, forge, generate_noise, pgd_update, random_noise_baseline,
    DefensiveNoise, NoiseGenConfig, NoiseMode, StepSizeState, BOUND_SLACK,
};
use armor_core::policy::PolicySearchConfig;
use armor_core::{ArmorError, Tensor};
use armor_tensor::Tape;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn tiny_spec(seed: u64) -> SyntheticSpec {
    SyntheticSpec {
        classes: 2,
        height: 8,
        width: 8,
        per_class: 20,
        seed,
        ..SyntheticSpec::default()
    }
}

fn tiny_cfg() -> NoiseGenConfig {
    NoiseGenConfig {
        batch_size: 8,
        widths: vec![4, 8],
        surrogate_batches: 2,
        pgd_steps: 3,
        max_rounds: 2,
        search: PolicySearchConfig {
            batch_size: 4,
            ..PolicySearchConfig::default()
        },
        ..NoiseGenConfig::default()
    }
}

#[test]
fn pgd_update_respects_the_bound() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut worst = 0.0f32;
    for _ in 0..10_000 {
        let eps = rng.gen_range(1e-3..0.1f32);
        let n = rng.gen_range(1..6);
        let delta = Tensor::from_fn(&[1, 1, 1, n], |_| rng.gen_range(-eps..=eps)).unwrap();
        let grad = Tensor::from_fn(&[1, 1, 1, n], |_| rng.gen_range(-1.0..1.0f32)).unwrap();
        let alpha = rng.gen_range(0.0..0.2f32);
        let out = pgd_update(&delta, &grad, alpha, eps).unwrap();
        for &v in out.data() {
            worst = worst.max(v.abs() - eps);
        }
    }
    assert!(worst <= BOUND_SLACK, "bound exceeded by {worst}");
}

#[test]
fn adaptive_step_trace_and_monotonicity() {
    let s = StepSizeState::new(1, 0.9, 1.0, 1.0).unwrap();
    let (mut s, a1) = adaptive_step(&s, &[4.0]).unwrap();
    assert!((a1 - 1.0 / (1.0 + 0.4f64.sqrt())).abs() < 1e-12);
    assert!((a1 - 0.61257).abs() < 1e-5);
    let mut prev = a1;
    for _ in 0..99 {
        let (next, a) = adaptive_step(&s, &[4.0]).unwrap();
        assert!(a < prev, "{a} !< {prev}");
        prev = a;
        s = next;
    }
    assert_eq!(s.t, 100);
}

#[test]
fn adaptive_step_rejects_mismatched_norms() {
    let s = StepSizeState::new(3, 0.9, 1.0, 1.0).unwrap();
    assert!(matches!(adaptive_step(&s, &[1.0]), Err(ArmorError::Contract(_))));
    assert!(matches!(StepSizeState::new(1, 1.0, 1.0, 1.0), Err(ArmorError::Config(_))));
}

#[test]
fn generated_noise_stays_in_the_ball() {
    let (train, _) = gen_synthetic(&tiny_spec(2)).unwrap();
    let run = generate_noise(&train, &tiny_cfg()).unwrap();
    let eps = run.noise.epsilon();
    assert_eq!(run.noise.tensor().shape(), train.images().shape());
    assert!(run.noise.tensor().data().iter().all(|v| v.abs() <= eps + BOUND_SLACK));
    assert!(run.rounds >= 1 && run.rounds <= 2);
    assert_eq!(run.round_errors.len(), run.rounds);
    assert_eq!(run.steps.len(), run.rounds * 3);
}

#[test]
fn stop_error_of_one_stops_after_one_round() {
    let (train, _) = gen_synthetic(&tiny_spec(3)).unwrap();
    let cfg = NoiseGenConfig {
        stop_error: 1.0,
        max_rounds: 5,
        ..tiny_cfg()
    };
    let run = generate_noise(&train, &cfg).unwrap();
    assert_eq!(run.rounds, 1);
    assert!(run.converged);
}

#[test]
fn generation_is_deterministic() {
    let (train, _) = gen_synthetic(&tiny_spec(4)).unwrap();
    let a = generate_noise(&train, &tiny_cfg()).unwrap();
    let b = generate_noise(&train, &tiny_cfg()).unwrap();
    assert_eq!(a.noise, b.noise);
    assert_eq!(a.steps, b.steps);
    let c = generate_noise(&train, &NoiseGenConfig { seed: 1, ..tiny_cfg() }).unwrap();
    assert_ne!(a.noise, c.noise);
}

#[test]
fn base_noise_equals_generation_with_plain_flags() {
    let (train, _) = gen_synthetic(&tiny_spec(5)).unwrap();
    let base = base_noise_emin(&train, &tiny_cfg()).unwrap();
    let plain = NoiseGenConfig {
        use_nonlocal: false,
        fixed_step: Some(tiny_cfg().step_size),
        search: PolicySearchConfig {
            batch_size: 4,
            ..PolicySearchConfig::identity_only()
        },
        ..tiny_cfg()
    };
    let direct = generate_noise(&train, &plain).unwrap();
    assert_eq!(base.noise, direct.noise);
    assert!(base.steps.iter().all(|&s| s == tiny_cfg().step_size));
}

fn surrogate_loss(net: &impl Network, data: &ImageBatch) -> f32 {
    cross_entropy(&logits(net, data.images()).unwrap(), data.labels()).unwrap()
}

#[test]
fn noise_lowers_surrogate_loss_on_separable_data() {
    let mut lower = 0;
    let trials = 10;
    for seed in 0..trials {
        let (train, _) = gen_synthetic(&tiny_spec(20 + seed)).unwrap();
        let cfg = NoiseGenConfig {
            max_rounds: 1,
            fixed_step: Some(1.0 / 255.0),
            search: PolicySearchConfig {
                batch_size: 4,
                ..PolicySearchConfig::identity_only()
            },
            seed,
            ..tiny_cfg()
        };
        let run = generate_noise(&train, &cfg).unwrap();
        let protected = apply_noise(&train, &run.noise).unwrap();
        if surrogate_loss(&run.surrogate, &protected) < surrogate_loss(&run.surrogate, &train) {
            lower += 1;
        }
    }
    assert!(lower * 10 >= trials * 9, "{lower}/{trials}");
}

#[test]
fn one_pgd_step_against_a_frozen_model_lowers_loss() {
    let (train, _) = gen_synthetic(&tiny_spec(6)).unwrap();
    let net = build_surrogate(&ArchDescriptor::compact(3, 2), 3).unwrap();
    let policy = AugPolicy::identity(2).unwrap();
    let plan = plan_policy(train.labels(), (8, 8), &policy, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    let tape = Tape::<f32>::new();
    let params: Vec<_> = net.params().iter().map(|p| tape.constant(p.clone())).collect();
    let x = tape.leaf(train.images().clone());
    let loss = net
        .forward(&tape, &params, augment_var(x, &plan).unwrap())
        .unwrap()
        .cross_entropy(train.labels())
        .unwrap();
    let grad = tape.backward(loss).unwrap().wrt(x);
    let zero = Tensor::zeros(train.images().shape()).unwrap();
    let delta = pgd_update(&zero, &grad, 0.5 / 255.0, 8.0 / 255.0).unwrap();
    let noise = DefensiveNoise::new(NoiseMode::Sample, 8.0 / 255.0, delta).unwrap();
    let protected = apply_noise(&train, &noise).unwrap();
    assert!(surrogate_loss(&net, &protected) < surrogate_loss(&net, &train));
}

#[test]
fn classwise_aggregate_equals_brute_force_means() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for _ in 0..5 {
        let (n, k) = (rng.gen_range(3..12), rng.gen_range(1..4));
        let mut labels: Vec<usize> = (0..n).map(|_| rng.gen_range(0..k)).collect();
        labels[..k].iter_mut().enumerate().for_each(|(i, y)| *y = i);
        let eps = 0.05;
        let t = Tensor::from_fn(&[n, 2, 2, 3], |_| rng.gen_range(-eps..=eps)).unwrap();
        let noise = DefensiveNoise::new(NoiseMode::Sample, eps, t.clone()).unwrap();
        let agg = classwise_aggregate(&noise, &labels, k).unwrap();
        assert_eq!(agg.mode(), NoiseMode::Class);
        assert_eq!(agg.tensor().shape(), &[k, 2, 2, 3]);
        for class in 0..k {
            let members: Vec<usize> = (0..n).filter(|&i| labels[i] == class).collect();
            for p in 0..12 {
                let sum: f64 = members.iter().map(|&i| t.data()[i * 12 + p] as f64).sum();
                let want = (sum / members.len() as f64) as f32;
                assert_eq!(agg.tensor().data()[class * 12 + p], want);
            }
        }
    }
}

#[test]
fn classwise_aggregate_rejects_empty_class() {
    let noise = DefensiveNoise::zeros(NoiseMode::Sample, 0.1, &[2, 1, 1, 1]).unwrap();
    assert!(matches!(classwise_aggregate(&noise, &[0, 0], 2), Err(ArmorError::Config(_))));
}

#[test]
fn class_mode_forge_yields_one_tensor_per_class() {
    let (train, _) = gen_synthetic(&tiny_spec(8)).unwrap();
    let cfg = NoiseGenConfig {
        mode: NoiseMode::Class,
        ..tiny_cfg()
    };
    let run = forge(&train, &cfg, false).unwrap();
    assert_eq!(run.noise.mode(), NoiseMode::Class);
    assert_eq!(run.noise.count(), 2);
    let protected = apply_noise(&train, &run.noise).unwrap();
    assert!(protected.noised);
}

#[test]
fn random_baseline_moments() {
    let eps = 8.0 / 255.0;
    let noise = random_noise_baseline(&[50, 3, 8, 8], eps, NoiseMode::Sample, 3).unwrap();
    let d = noise.tensor().data();
    let mean: f64 = d.iter().map(|&v| v as f64).sum::<f64>() / d.len() as f64;
    let var: f64 = d.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / d.len() as f64;
    let e = eps as f64;
    assert!(mean.abs() < 0.02 * e);
    assert!((var - e * e / 3.0).abs() < 0.03 * e * e / 3.0);
    assert!(d.iter().all(|v| v.abs() <= eps));
    assert_eq!(noise, random_noise_baseline(&[50, 3, 8, 8], eps, NoiseMode::Sample, 3).unwrap());
}

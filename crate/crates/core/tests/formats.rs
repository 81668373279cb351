//! File formats: randomized round-trips for noise, checkpoints, policies
//! and configuration, malformed inputs, and the CIFAR-10 record parser.

use std::path::PathBuf;

use armor_core::augment::{AugKind, AugOp, AugPolicy, PolicyEntry};
use armor_core::config::{AugmentSetting, Config, DataSource, NoiseSource};
use armor_core::data::{gen_synthetic, load_cifar10, parse_cifar_records, SyntheticSpec};
use armor_core::formats::{
    decode_checkpoint, decode_noise, encode_checkpoint, encode_noise, read_noise, read_policy, write_noise,
    write_policy,
};
use armor_core::model::{build_surrogate, ArchDescriptor, Network};
use armor_core::noise::{DefensiveNoise, NoiseMode};
use armor_core::{ArmorError, Tensor};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_noise(rng: &mut ChaCha8Rng) -> DefensiveNoise {
    let shape = [rng.gen_range(1..5), rng.gen_range(1..4), rng.gen_range(1..6), rng.gen_range(1..6)];
    let eps = rng.gen_range(1e-3..0.2f32);
    let t = Tensor::from_fn(&shape, |_| rng.gen_range(-eps..=eps)).unwrap();
    let mode = if rng.gen_bool(0.5) { NoiseMode::Sample } else { NoiseMode::Class };
    DefensiveNoise::new(mode, eps, t).unwrap()
}

fn random_descriptor(rng: &mut ChaCha8Rng) -> ArchDescriptor {
    let stages = rng.gen_range(1..4);
    let widths: Vec<usize> = (0..stages).map(|_| rng.gen_range(1..9)).collect();
    let nonlocal_after = (0..stages).filter(|_| rng.gen_bool(0.5)).collect();
    ArchDescriptor {
        in_channels: rng.gen_range(1..4),
        widths,
        nonlocal_after,
        classes: rng.gen_range(2..11),
    }
}

fn random_policy(rng: &mut ChaCha8Rng) -> AugPolicy {
    let k = rng.gen_range(1..12);
    let entries = (0..k)
        .map(|_| {
            let kind = *AugKind::ALL.choose(rng).unwrap();
            let op = AugOp::new(kind);
            let magnitude = match op.range() {
                Some((lo, hi)) if rng.gen_bool(0.5) => Some(rng.gen_range(lo..=hi)),
                _ => None,
            };
            PolicyEntry { op, magnitude }
        })
        .collect();
    AugPolicy::new(entries).unwrap()
}

fn random_config(rng: &mut ChaCha8Rng) -> Config {
    let mut c = Config::default();
    let d = &mut c.data;
    d.source = if rng.gen_bool(0.5) { DataSource::Synthetic } else { DataSource::Cifar };
    d.path = PathBuf::from(format!("data/dir{}", rng.gen::<u16>()));
    d.subset = rng.gen_bool(0.5).then(|| rng.gen_range(1..500));
    d.synthetic.classes = rng.gen_range(2..10);
    d.synthetic.per_class = rng.gen_range(5..200);
    d.synthetic.contrast = rng.gen_range(0.01..1.0);
    d.synthetic.jitter = rng.gen_range(0.0..0.1);
    d.synthetic.seed = rng.gen();
    let n = &mut c.noise;
    n.epsilon = rng.gen_range(0.0..0.1);
    n.pgd_steps = rng.gen_range(1..50);
    n.stop_error = rng.gen_range(0.0..1.0);
    n.mode = if rng.gen_bool(0.5) { NoiseMode::Sample } else { NoiseMode::Class };
    n.step_size = rng.gen();
    n.fixed_step = rng.gen_bool(0.5).then(|| rng.gen());
    n.use_nonlocal = rng.gen();
    n.seed = rng.gen();
    n.widths = (0..rng.gen_range(1..4)).map(|_| rng.gen_range(1..64)).collect();
    n.optimizer.learning_rate = rng.gen();
    n.optimizer.momentum = rng.gen();
    n.beta = rng.gen();
    n.step_c = rng.gen_range(0.1..10.0);
    n.fresh_draw_per_step = rng.gen();
    n.search.aux_train_epochs = rng.gen_range(1..5);
    let mut ops = vec![AugOp::new(AugKind::Identity)];
    ops.extend(AugKind::ALL[1..].iter().filter(|_| rng.gen_bool(0.5)).map(|&k| AugOp::new(k)));
    n.search.op_set = ops;
    let v = &mut c.victim;
    v.widths = vec![rng.gen_range(1..40)];
    v.epochs = rng.gen_range(0..100);
    v.optimizer.weight_decay = rng.gen_range(0.0..1e-2);
    v.seed = rng.gen();
    c.victim_augment = [
        AugmentSetting::Off,
        AugmentSetting::Search,
        AugmentSetting::Random,
        AugmentSetting::PolicyFile(PathBuf::from("p.txt")),
    ]
    .choose(rng)
    .unwrap()
    .clone();
    c.victim_search_refresh = rng.gen_range(1..20);
    c.experiment.noises = vec![NoiseSource::Armor, NoiseSource::File(PathBuf::from("n.armr"))];
    c.experiment.augments = vec![AugmentSetting::Off, AugmentSetting::Random];
    c.experiment.seeds = (0..rng.gen_range(1..4)).map(|_| rng.gen()).collect();
    c
}

#[test]
fn noise_round_trips_bit_exactly() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let dir = tempfile::tempdir().unwrap();
    for i in 0..100 {
        let noise = random_noise(&mut rng);
        let bytes = encode_noise(&noise).unwrap();
        let back = decode_noise(&bytes).unwrap();
        assert_eq!(back, noise);
        assert_eq!(encode_noise(&back).unwrap(), bytes);
        if i % 10 == 0 {
            let p = dir.path().join(format!("n{i}.armr"));
            write_noise(&noise, &p).unwrap();
            assert_eq!(read_noise(&p).unwrap(), noise);
        }
    }
}

#[test]
fn checkpoint_round_trips_bit_exactly() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for _ in 0..100 {
        let model = build_surrogate(&random_descriptor(&mut rng), rng.gen()).unwrap();
        let bytes = encode_checkpoint(&model).unwrap();
        let back = decode_checkpoint(&bytes).unwrap();
        assert_eq!(back, model);
        assert_eq!(back.params(), model.params());
        assert_eq!(encode_checkpoint(&back).unwrap(), bytes);
    }
}

#[test]
fn policy_round_trips_exactly() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let dir = tempfile::tempdir().unwrap();
    for i in 0..100 {
        let policy = random_policy(&mut rng);
        let text = policy.to_text();
        let back = AugPolicy::parse(&text).unwrap();
        assert_eq!(back, policy);
        assert_eq!(back.to_text(), text);
        if i % 10 == 0 {
            let p = dir.path().join("policy.txt");
            write_policy(&policy, &p).unwrap();
            assert_eq!(read_policy(&p).unwrap(), policy);
        }
    }
}

#[test]
fn config_round_trips_exactly() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for _ in 0..100 {
        let cfg = random_config(&mut rng);
        let text = cfg.to_text();
        let back = Config::parse(&text).unwrap();
        assert_eq!(back, cfg, "{text}");
        assert_eq!(back.to_text(), text);
    }
}

fn is_format(r: Result<DefensiveNoise, ArmorError>, needle: &str) -> bool {
    matches!(&r, Err(ArmorError::Format(m)) if m.contains(needle))
}

#[test]
fn malformed_noise_files_are_format_errors() {
    let noise = random_noise(&mut ChaCha8Rng::seed_from_u64(5));
    let good = encode_noise(&noise).unwrap();

    let mut bad = good.clone();
    bad[..4].copy_from_slice(b"XXXX");
    assert!(is_format(decode_noise(&bad), "magic"));

    let mut bad = good.clone();
    bad[4] = 9;
    assert!(is_format(decode_noise(&bad), "version"));

    let mut bad = good.clone();
    bad[5] = 7;
    assert!(is_format(decode_noise(&bad), "mode"));

    let truncated = &good[..good.len() - 4];
    let r = decode_noise(truncated);
    let msg = format!("{}", r.as_ref().unwrap_err());
    assert!(msg.contains(&good.len().to_string()) && msg.contains(&truncated.len().to_string()), "{msg}");
    assert!(is_format(r, "length"));

    assert!(is_format(decode_noise(&good[..10]), "truncated"));
}

#[test]
fn malformed_checkpoints_are_format_errors() {
    let model = build_surrogate(&ArchDescriptor::compact(3, 4), 1).unwrap();
    let good = encode_checkpoint(&model).unwrap();
    let check = |bytes: &[u8]| matches!(decode_checkpoint(bytes), Err(ArmorError::Format(_)));
    let mut bad = good.clone();
    bad[0] = b'Z';
    assert!(check(&bad));
    assert!(check(&good[..good.len() - 1]));
    let mut longer = good.clone();
    longer.push(0);
    assert!(check(&longer));
    assert!(check(&good[..7]));
    // stage count far beyond anything plausible
    let mut huge = good.clone();
    huge[5..9].copy_from_slice(&u32::MAX.to_le_bytes());
    assert!(check(&huge));
}

#[test]
fn malformed_policies_and_configs_report_lines() {
    assert!(matches!(AugPolicy::parse("class=0 op=Warp magnitude=sampled"), Err(ArmorError::Parse { line: 1, .. })));
    assert!(matches!(
        AugPolicy::parse("class=0 op=Identity magnitude=sampled\nclass=0 op=Invert magnitude=sampled"),
        Err(ArmorError::Parse { line: 2, .. })
    ));
    assert!(matches!(Config::parse("epsilonn = 8/255"), Err(ArmorError::UnknownKey { line: 1, .. })));
    assert!(matches!(Config::parse("[noise]\nmode = diagonal"), Err(ArmorError::Parse { line: 2, .. })));
    assert!(matches!(Config::parse("[nois]\n"), Err(ArmorError::UnknownKey { line: 1, .. })));
    assert_eq!(Config::parse("").unwrap(), Config::default());
    let c = Config::parse("epsilon = 16/255").unwrap();
    assert_eq!(c.noise.epsilon, 16.0f32 / 255.0);
}

const RECORD: usize = 3073;

fn record(label: u8, seed: u8) -> Vec<u8> {
    let mut r = vec![label];
    r.extend((0..3072).map(|i| (i as u8).wrapping_mul(7).wrapping_add(seed)));
    r
}

#[test]
fn cifar_records_parse_to_expected_tensors() {
    let mut bytes = record(3, 1);
    bytes.extend(record(9, 200));
    let (px, labels) = parse_cifar_records(&bytes, "t").unwrap();
    assert_eq!(labels, vec![3, 9]);
    assert_eq!(px.len(), 2 * 3072);
    for r in 0..2 {
        for i in 0..3072 {
            assert_eq!(px[r * 3072 + i], bytes[r * RECORD + 1 + i] as f32 / 255.0);
        }
    }
    let err = parse_cifar_records(&bytes[..RECORD + 10], "t").unwrap_err();
    assert!(matches!(&err, ArmorError::Format(m) if m.contains("3073")), "{err}");
    let mut bad = record(10, 0);
    bad.extend(record(1, 0));
    assert!(matches!(parse_cifar_records(&bad, "t"), Err(ArmorError::Format(_))));
}

#[test]
fn cifar_directory_with_subset() {
    let dir = tempfile::tempdir().unwrap();
    for (f, labels) in [
        ("data_batch_1.bin", vec![0u8, 1, 0]),
        ("data_batch_2.bin", vec![1, 0]),
        ("data_batch_3.bin", vec![2]),
        ("data_batch_4.bin", vec![2]),
        ("data_batch_5.bin", vec![0]),
        ("test_batch.bin", vec![5, 6]),
    ] {
        let bytes: Vec<u8> = labels.iter().enumerate().flat_map(|(i, &y)| record(y, i as u8)).collect();
        std::fs::write(dir.path().join(f), bytes).unwrap();
    }
    let (train, test) = load_cifar10(dir.path(), None).unwrap();
    assert_eq!(train.labels(), &[0, 1, 0, 1, 0, 2, 2, 0]);
    assert_eq!(test.labels(), &[5, 6]);
    assert_eq!(train.images().shape(), &[8, 3, 32, 32]);
    let (sub, _) = load_cifar10(dir.path(), Some(1)).unwrap();
    assert_eq!(sub.labels(), &[0, 1, 2]);
    assert!(matches!(load_cifar10(dir.path(), Some(0)), Err(ArmorError::Config(_))));
    std::fs::remove_file(dir.path().join("data_batch_3.bin")).unwrap();
    assert!(matches!(load_cifar10(dir.path(), None), Err(ArmorError::Io { .. })));
}

#[test]
fn synthetic_benchmark_is_template_separable() {
    let spec = SyntheticSpec::default();
    let (train, test) = gen_synthetic(&spec).unwrap();
    assert_eq!(train.len(), 4 * 80);
    assert_eq!(test.len(), 4 * 20);
    assert_eq!(gen_synthetic(&spec).unwrap(), (train.clone(), test.clone()));
    let templates = spec.templates().unwrap();
    for i in 0..test.len() {
        let x = test.image(i);
        let nearest = (0..4)
            .min_by(|&a, &b| {
                let da: f32 = x.iter().zip(&templates[a]).map(|(p, t)| (p - t).powi(2)).sum();
                let db: f32 = x.iter().zip(&templates[b]).map(|(p, t)| (p - t).powi(2)).sum();
                da.total_cmp(&db)
            })
            .unwrap();
        assert_eq!(nearest, test.labels()[i]);
    }
    assert!(train.images().data().iter().all(|v| (0.0..=1.0).contains(v)));
}

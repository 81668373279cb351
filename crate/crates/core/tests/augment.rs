//! Augmentation operations: bilinear oracle, policy application, shape and
//! range preservation, determinism and the gradient contract.

use armor_core::augment::{
    apply_op, apply_plan, apply_policy, augment_var, plan_op, AugKind, AugOp, AugPolicy, PolicyEntry, SampleAug,
};
use armor_core::data::ImageBatch;
use armor_core::Tensor;
use armor_tensor::{gradcheck, Tape};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn batch(n: usize, c: usize, h: usize, w: usize, classes: usize, seed: u64) -> ImageBatch {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let images = Tensor::from_fn(&[n, c, h, w], |_| rng.gen_range(0.0..1.0)).unwrap();
    ImageBatch::new(images, (0..n).map(|i| i % classes).collect(), classes).unwrap()
}

/// Inverse warp with bilinear weights; samples outside the frame read 0.
fn bilinear(img: &[f32], h: usize, w: usize, sx: f64, sy: f64) -> f64 {
    let at = |y: f64, x: f64| -> f64 {
        if y < 0.0 || x < 0.0 || y >= h as f64 || x >= w as f64 {
            0.0
        } else {
            img[y as usize * w + x as usize] as f64
        }
    };
    let (x0, y0) = (sx.floor(), sy.floor());
    let (fx, fy) = (sx - x0, sy - y0);
    at(y0, x0) * (1.0 - fx) * (1.0 - fy)
        + at(y0, x0 + 1.0) * fx * (1.0 - fy)
        + at(y0 + 1.0, x0) * (1.0 - fx) * fy
        + at(y0 + 1.0, x0 + 1.0) * fx * fy
}

#[test]
fn translate_half_width_matches_inverse_warp() {
    let (a, b, c, d) = (0.1f32, 0.4, 0.7, 0.9);
    let img = vec![a, b, c, d];
    let data = ImageBatch::new(Tensor::new(vec![1, 1, 2, 2], img.clone()).unwrap(), vec![0], 1).unwrap();
    let op = AugOp::with_range(AugKind::TranslateX, -0.5, 0.5).unwrap();
    let out = apply_op(&data, &op, 0.5, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    // Content moves right by 0.5·2 = 1 pixel.
    for y in 0..2 {
        for x in 0..2 {
            let want = bilinear(&img, 2, 2, x as f64 - 1.0, y as f64);
            assert!((out.images().data()[y * 2 + x] as f64 - want).abs() < 1e-7);
        }
    }
    assert_eq!(out.images().data(), &[0.0, a, 0.0, c]);
}

#[test]
fn fractional_geometry_matches_inverse_warp() {
    let data = batch(1, 1, 5, 6, 1, 3);
    let img = data.images().data().to_vec();
    let (h, w) = (5usize, 6usize);
    let (cy, cx) = ((h as f64 - 1.0) / 2.0, (w as f64 - 1.0) / 2.0);
    let cases: [(AugKind, f32); 4] = [
        (AugKind::TranslateY, 0.13),
        (AugKind::ShearX, -0.21),
        (AugKind::ShearY, 0.17),
        (AugKind::Rotate, 23.0),
    ];
    for (kind, m) in cases {
        let out = apply_op(&data, &AugOp::new(kind), m, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let md = m as f64;
        for y in 0..h {
            for x in 0..w {
                let (u, v) = (x as f64 - cx, y as f64 - cy);
                let (sx, sy) = match kind {
                    AugKind::TranslateY => (x as f64, y as f64 - md * h as f64),
                    AugKind::ShearX => (u + md * v + cx, y as f64),
                    AugKind::ShearY => (x as f64, v + md * u + cy),
                    _ => {
                        let (s, c) = md.to_radians().sin_cos();
                        (c * u - s * v + cx, s * u + c * v + cy)
                    }
                };
                let want = bilinear(&img, h, w, sx, sy);
                let got = out.images().data()[y * w + x] as f64;
                assert!((got - want).abs() < 1e-6, "{kind} at ({y},{x}): {got} vs {want}");
            }
        }
    }
}

#[test]
fn policy_changes_only_assigned_classes() {
    let data = batch(6, 1, 4, 4, 2, 4);
    let policy = AugPolicy::new(vec![
        PolicyEntry::sampled(AugKind::Invert),
        PolicyEntry::sampled(AugKind::Identity),
    ])
    .unwrap();
    let out = apply_policy(&data, &policy, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
    for i in 0..6 {
        let (src, dst) = (data.image(i), out.image(i));
        if data.labels()[i] == 0 {
            for (s, d) in src.iter().zip(dst) {
                assert!((1.0 - s - d).abs() < 1e-7);
            }
        } else {
            assert_eq!(src, dst);
        }
    }
    let same = apply_policy(&data, &AugPolicy::identity(2).unwrap(), &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
    assert_eq!(same.images(), data.images());
}

#[test]
fn fixed_rotate_policy_equals_apply_op() {
    let data = batch(1, 3, 8, 8, 1, 5);
    let policy = AugPolicy::new(vec![PolicyEntry {
        op: AugOp::new(AugKind::Rotate),
        magnitude: Some(30.0),
    }])
    .unwrap();
    let a = apply_policy(&data, &policy, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
    let b = apply_op(&data, &AugOp::new(AugKind::Rotate), 30.0, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
    assert_eq!(a, b);
}

#[test]
fn every_op_preserves_shape_and_range() {
    let data = batch(5, 3, 9, 7, 3, 6);
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for kind in AugKind::ALL {
        let op = AugOp::new(kind);
        for _ in 0..3 {
            let m = op.sample_magnitude(&mut rng).unwrap_or(0.0);
            let out = apply_op(&data, &op, m, &mut rng).unwrap();
            assert_eq!(out.images().shape(), data.images().shape(), "{kind}");
            assert!(out.images().data().iter().all(|v| (0.0..=1.0).contains(v)), "{kind} at {m}");
            assert!(out.augmented);
            assert_eq!(out.labels(), data.labels());
        }
    }
}

#[test]
fn identical_seed_gives_identical_output() {
    let data = batch(4, 3, 8, 8, 2, 8);
    for kind in AugKind::ALL {
        let op = AugOp::new(kind);
        let m = op.selection_magnitude().unwrap_or(0.0);
        let a = apply_op(&data, &op, m, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        let b = apply_op(&data, &op, m, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        assert_eq!(a.images().data(), b.images().data(), "{kind}");
    }
    let sampled = AugPolicy::uniform(AugKind::Cutout, 2).unwrap();
    let a = apply_policy(&data, &sampled, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
    let b = apply_policy(&data, &sampled, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
    assert_eq!(a, b);
}

#[test]
fn differentiable_ops_pass_gradcheck() {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    for kind in AugKind::ALL.into_iter().filter(|k| k.is_differentiable()) {
        let op = AugOp::new(kind);
        let (n, c, h, w) = (2, 3, 4, 4);
        // Interior pixels keep the clamp and Solarize threshold away.
        let point = Tensor::<f64>::from_fn(&[n, c, h, w], |_| rng.gen_range(0.2..0.45)).unwrap();
        let mut plan = plan_op(n, (h, w), &op, None, &mut rng).unwrap();
        if kind == AugKind::Solarize {
            plan.iter_mut().for_each(|s| s.magnitude = 64.0);
        }
        let weights = Tensor::<f64>::from_fn(&[n, c, h, w], |_| rng.gen_range(-1.0..1.0)).unwrap();
        let report = gradcheck(
            |t: &Tape<f64>, x| {
                let y = augment_var(x, &plan).map_err(|e| armor_tensor::TensorError::Evaluation(e.to_string()))?;
                y.mul(t.constant(weights.clone()))?.sum()
            },
            &point,
            1e-6,
        )
        .unwrap();
        assert!(report.pass, "{kind}: {}", report.max_rel_error);
    }
}

#[test]
fn straight_through_ops_pass_gradient_unchanged() {
    let data = batch(1, 1, 4, 4, 1, 11);
    for kind in [AugKind::Equalize, AugKind::Posterize] {
        let plan = vec![SampleAug {
            kind,
            magnitude: 4.0,
            place: (0, 0),
        }];
        let tape = Tape::<f32>::new();
        let x = tape.leaf(data.images().clone());
        let y = augment_var(x, &plan).unwrap().sum().unwrap();
        let g = tape.backward(y).unwrap().wrt(x);
        let forward = apply_plan(&data, &plan).unwrap();
        // Unit gradient wherever the output is not clamped.
        for (gv, v) in g.data().iter().zip(forward.images().data()) {
            if *v > 0.0 && *v < 1.0 {
                assert_eq!(*gv, 1.0, "{kind}");
            }
        }
    }
}

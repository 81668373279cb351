//! Gradient self-test over every differentiable operation, on randomized
//! shapes with every dimension at most 4.

use armor_tensor::{gradcheck, GradcheckReport, Tape, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::augment::{augment_var, AugKind, AugOp, SampleAug};
use crate::model::{build_surrogate, nonlocal_forward, param_vars, ArchDescriptor, Network};
use crate::Result;

pub const STEP: f64 = 1e-6;

#[derive(Clone, Debug)]
pub struct CheckResult {
    pub name: String,
    pub shape: Vec<usize>,
    pub report: GradcheckReport,
}

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Result<Tensor<f64>> {
    Ok(Tensor::from_fn(shape, |_| rng.gen_range(lo..hi))?)
}

/// Fixed random projection to a scalar so every output component matters.
fn project<'t>(tape: &'t Tape<f64>, y: Var<'t, f64>, seed: u64) -> Result<Var<'t, f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = uniform(&mut rng, &y.shape(), -1.0, 1.0)?;
    Ok(y.mul(tape.constant(w))?.sum()?)
}

fn check<F>(out: &mut Vec<CheckResult>, name: impl Into<String>, point: Tensor<f64>, f: F) -> Result<()>
where
    F: for<'t> Fn(&'t Tape<f64>, Var<'t, f64>) -> armor_tensor::Result<Var<'t, f64>>,
{
    let shape = point.shape().to_vec();
    let report = gradcheck(f, &point, STEP)?;
    out.push(CheckResult {
        name: name.into(),
        shape,
        report,
    });
    Ok(())
}

fn lift<T>(r: Result<T>) -> armor_tensor::Result<T> {
    r.map_err(|e| armor_tensor::TensorError::Evaluation(e.to_string()))
}

/// Runs every check once with shapes and values drawn from `seed`.
pub fn gradcheck_suite(seed: u64) -> Result<Vec<CheckResult>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    let dim = |rng: &mut ChaCha8Rng, lo: usize| rng.gen_range(lo..=4usize);

    // convolution: input, kernel, bias
    let (n, c, o) = (dim(&mut rng, 1), dim(&mut rng, 1), dim(&mut rng, 1));
    let (h, w) = (dim(&mut rng, 2), dim(&mut rng, 2));
    let k = if rng.gen_bool(0.5) { 3 } else { 1 };
    let pad = k / 2;
    let x = uniform(&mut rng, &[n, c, h, w], -1.0, 1.0)?;
    let wt = uniform(&mut rng, &[o, c, k, k], -1.0, 1.0)?;
    let b = uniform(&mut rng, &[o], -1.0, 1.0)?;
    let s = rng.gen();
    {
        let (wt, b) = (wt.clone(), b.clone());
        check(&mut out, "conv2d/input", x.clone(), move |t, v| {
            let y = v.conv2d(t.constant(wt.clone()), Some(t.constant(b.clone())), pad)?;
            lift(project(t, y, s))
        })?;
    }
    {
        let (x, b) = (x.clone(), b.clone());
        check(&mut out, "conv2d/kernel", wt.clone(), move |t, v| {
            let y = t.constant(x.clone()).conv2d(v, Some(t.constant(b.clone())), pad)?;
            lift(project(t, y, s))
        })?;
    }
    {
        let (x, wt) = (x.clone(), wt.clone());
        check(&mut out, "conv2d/bias", b, move |t, v| {
            let y = t.constant(x.clone()).conv2d(t.constant(wt.clone()), Some(v), pad)?;
            lift(project(t, y, s))
        })?;
    }

    // linear head and cross-entropy
    let (n, f, kk) = (dim(&mut rng, 1), dim(&mut rng, 1), dim(&mut rng, 2));
    let x = uniform(&mut rng, &[n, f], -1.0, 1.0)?;
    let wt = uniform(&mut rng, &[kk, f], -1.0, 1.0)?;
    let labels: Vec<usize> = (0..n).map(|_| rng.gen_range(0..kk)).collect();
    {
        let (wt, labels) = (wt.clone(), labels.clone());
        check(&mut out, "linear/input", x.clone(), move |t, v| {
            v.linear(t.constant(wt.clone()), None)?.cross_entropy(&labels)
        })?;
    }
    {
        let (x, labels) = (x.clone(), labels.clone());
        check(&mut out, "linear/weight", wt, move |t, v| {
            t.constant(x.clone()).linear(v, None)?.cross_entropy(&labels)
        })?;
    }
    let logits = uniform(&mut rng, &[n, kk], -3.0, 3.0)?;
    check(&mut out, "cross_entropy", logits, move |_, v| v.cross_entropy(&labels))?;

    // non-local block: input and each projection
    let (n, c) = (dim(&mut rng, 1), dim(&mut rng, 1));
    let (h, w) = (dim(&mut rng, 1), dim(&mut rng, 1));
    let ci = ArchDescriptor::inter_channels(c);
    let a = uniform(&mut rng, &[n, c, h, w], -1.0, 1.0)?;
    let ws: Vec<Tensor<f64>> = [[ci, c], [ci, c], [ci, c], [c, ci]]
        .iter()
        .map(|&[r, q]| uniform(&mut rng, &[r, q, 1, 1], -1.0, 1.0))
        .collect::<Result<_>>()?;
    let s = rng.gen();
    for slot in 0..5 {
        let (a, ws) = (a.clone(), ws.clone());
        let name = ["nonlocal/input", "nonlocal/query", "nonlocal/key", "nonlocal/value", "nonlocal/out"][slot];
        let point = if slot == 0 { a.clone() } else { ws[slot - 1].clone() };
        check(&mut out, name, point, move |t, v| {
            let mut vars: Vec<Var<'_, f64>> = ws.iter().map(|w| t.constant(w.clone())).collect();
            let input = if slot == 0 {
                v
            } else {
                vars[slot - 1] = v;
                t.constant(a.clone())
            };
            let y = lift(nonlocal_forward(input, &[vars[0], vars[1], vars[2], vars[3]], true))?;
            lift(project(t, y, s))
        })?;
    }

    // whole compact model with non-local blocks, input gradient
    let c = dim(&mut rng, 1);
    let desc = ArchDescriptor {
        in_channels: c,
        widths: vec![dim(&mut rng, 1), dim(&mut rng, 1)],
        nonlocal_after: vec![0, 1],
        classes: dim(&mut rng, 2),
    };
    let mut model = build_surrogate(&desc, rng.gen())?;
    for p in model.params_mut() {
        for v in p.data_mut() {
            *v = rng.gen_range(-0.5..0.5);
        }
    }
    let n = dim(&mut rng, 1);
    let labels: Vec<usize> = (0..n).map(|_| rng.gen_range(0..desc.classes)).collect();
    let x = uniform(&mut rng, &[n, c, 4, 4], 0.0, 1.0)?;
    check(&mut out, "model/input", x, move |t, v| {
        let params = param_vars(&model, t, false);
        lift(model.forward(t, &params, v))?.cross_entropy(&labels)
    })?;

    // differentiable augmentations
    for kind in AugKind::ALL.into_iter().filter(|k| k.is_differentiable()) {
        let (n, c) = (dim(&mut rng, 1), dim(&mut rng, 1));
        let (h, w) = (dim(&mut rng, 2), dim(&mut rng, 2));
        let op = AugOp::new(kind);
        let magnitude = match kind {
            // keep pixels clear of the threshold at 0.5
            AugKind::Solarize => 128.0,
            AugKind::Cutout => rng.gen_range(1.0..=3.0f32).round(),
            _ => op.sample_magnitude(&mut rng).unwrap_or(0.0),
        };
        let plan: Vec<SampleAug> = (0..n)
            .map(|_| SampleAug {
                kind,
                magnitude,
                place: match kind {
                    AugKind::Cutout => (rng.gen_range(0..h), rng.gen_range(0..w)),
                    AugKind::Crop => (rng.gen_range(0..=8), rng.gen_range(0..=8)),
                    _ => (0, 0),
                },
            })
            .collect();
        let x = Tensor::from_fn(&[n, c, h, w], |_| {
            let v: f64 = rng.gen_range(0.2..0.45);
            if kind == AugKind::Solarize && rng.gen_bool(0.5) {
                v + 0.35
            } else {
                v
            }
        })?;
        let s = rng.gen();
        check(&mut out, format!("augment/{}", kind.name()), x, move |t, v| {
            let y = lift(augment_var(v, &plan))?;
            lift(project(t, y, s))
        })?;
    }
    Ok(out)
}

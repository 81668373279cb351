//! Defensive noise generation: alternating surrogate training, policy
//! selection and bounded signed-gradient descent on the noise.

use std::fmt;
use std::str::FromStr;

use armor_tensor::{OptimizerConfig, Sgd, Tape, Tensor};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::augment::{apply_policy, augment_var, plan_policy, AugPolicy};
use crate::data::ImageBatch;
use crate::model::{build_surrogate, error_rate, param_vars, train_batches, ArchDescriptor, Network, SurrogateModel};
use crate::policy::{select_policy, train_aux, PolicySearchConfig};
use crate::rng::substream;
use crate::{ArmorError, Result};

/// Slack allowed on the L∞ bound for rounding in derived tensors.
pub const BOUND_SLACK: f32 = 1e-7;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum NoiseMode {
    /// One tensor per sample.
    Sample,
    /// One tensor per class, shared by all its samples.
    Class,
}

impl NoiseMode {
    pub fn code(self) -> u8 {
        match self {
            NoiseMode::Sample => 0,
            NoiseMode::Class => 1,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(NoiseMode::Sample),
            1 => Some(NoiseMode::Class),
            _ => None,
        }
    }
}

impl fmt::Display for NoiseMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            NoiseMode::Sample => "sample",
            NoiseMode::Class => "class",
        })
    }
}

impl FromStr for NoiseMode {
    type Err = ArmorError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sample" => Ok(NoiseMode::Sample),
            "class" => Ok(NoiseMode::Class),
            _ => Err(ArmorError::Config(format!("noise mode must be `sample` or `class`, got `{s}`"))),
        }
    }
}

/// Additive perturbation bounded by `epsilon` in L∞.
#[derive(Clone, Debug, PartialEq)]
pub struct DefensiveNoise {
    mode: NoiseMode,
    epsilon: f32,
    tensor: Tensor,
}

impl DefensiveNoise {
    pub fn new(mode: NoiseMode, epsilon: f32, tensor: Tensor) -> Result<Self> {
        if !(epsilon > 0.0 && epsilon.is_finite()) {
            return Err(ArmorError::Contract(format!("epsilon must be positive, got {epsilon}")));
        }
        tensor.dims4()?;
        let peak = tensor.max_abs();
        if peak > epsilon + BOUND_SLACK {
            return Err(ArmorError::Contract(format!(
                "noise magnitude {peak} exceeds epsilon {epsilon}"
            )));
        }
        Ok(Self { mode, epsilon, tensor })
    }

    pub fn zeros(mode: NoiseMode, epsilon: f32, shape: &[usize]) -> Result<Self> {
        Self::new(mode, epsilon, Tensor::zeros(shape)?)
    }

    pub fn mode(&self) -> NoiseMode {
        self.mode
    }

    pub fn epsilon(&self) -> f32 {
        self.epsilon
    }

    pub fn tensor(&self) -> &Tensor {
        &self.tensor
    }

    /// Number of noise tensors (samples or classes).
    pub fn count(&self) -> usize {
        self.tensor.shape()[0]
    }

    /// The tensor assigned to sample `i` with label `label`.
    pub fn for_sample(&self, i: usize, label: usize) -> &[f32] {
        let idx = match self.mode {
            NoiseMode::Sample => i,
            NoiseMode::Class => label,
        };
        let len = self.tensor.len() / self.count();
        &self.tensor.data()[idx * len..(idx + 1) * len]
    }
}

/// Running state of the adaptive step size
/// `α = γ / (c + sqrt(Σᵢ nᵢ))`, with `nᵢ` an exponential moving average of
/// per-sample squared gradient norms.
#[derive(Clone, Debug, PartialEq)]
pub struct StepSizeState {
    pub n: Vec<f64>,
    pub beta: f64,
    pub gamma: f64,
    pub c: f64,
    pub t: u64,
}

impl StepSizeState {
    pub fn new(samples: usize, beta: f64, gamma: f64, c: f64) -> Result<Self> {
        if !(0.0..1.0).contains(&beta) || !(gamma > 0.0) || !(c > 0.0) {
            return Err(ArmorError::Config(format!(
                "step size needs beta in [0,1), gamma > 0, c > 0; got {beta}, {gamma}, {c}"
            )));
        }
        Ok(Self {
            n: vec![0.0; samples],
            beta,
            gamma,
            c,
            t: 0,
        })
    }

    /// Step size for the current averages.
    pub fn alpha(&self) -> f64 {
        self.gamma / (self.c + self.n.iter().sum::<f64>().sqrt())
    }

    /// Folds in one step's squared norms and returns the new step size.
    pub fn advance(&mut self, grad_norms_sq: &[f64]) -> Result<f64> {
        if grad_norms_sq.len() != self.n.len() {
            return Err(ArmorError::Contract(format!(
                "{} gradient norms for {} tracked samples",
                grad_norms_sq.len(),
                self.n.len()
            )));
        }
        if let Some(bad) = grad_norms_sq.iter().find(|g| !(g.is_finite() && **g >= 0.0)) {
            return Err(ArmorError::Contract(format!(
                "squared gradient norms must be finite and nonnegative, got {bad}"
            )));
        }
        for (n, &g) in self.n.iter_mut().zip(grad_norms_sq) {
            *n = self.beta * *n + (1.0 - self.beta) * g;
        }
        self.t += 1;
        Ok(self.alpha())
    }
}

/// Pure form of [`StepSizeState::advance`].
pub fn adaptive_step(state: &StepSizeState, grad_norms_sq: &[f64]) -> Result<(StepSizeState, f64)> {
    let mut next = state.clone();
    let alpha = next.advance(grad_norms_sq)?;
    Ok((next, alpha))
}

/// `clamp(δ − α·sign(g), −ε, ε)` with `sign(0) = 0`.
pub fn pgd_update(delta: &Tensor, grad: &Tensor, alpha: f32, epsilon: f32) -> Result<Tensor> {
    if delta.shape() != grad.shape() {
        return Err(ArmorError::Contract(format!(
            "noise shape {:?} differs from gradient shape {:?}",
            delta.shape(),
            grad.shape()
        )));
    }
    let data = delta
        .data()
        .iter()
        .zip(grad.data())
        .map(|(&d, &g)| {
            let step = if g > 0.0 {
                alpha
            } else if g < 0.0 {
                -alpha
            } else {
                0.0
            };
            (d - step).clamp(-epsilon, epsilon)
        })
        .collect();
    Ok(Tensor::new(delta.shape().to_vec(), data)?)
}

#[derive(Clone, Debug, PartialEq)]
pub struct NoiseGenConfig {
    /// L∞ radius in `[0, 1]` pixel units.
    pub epsilon: f32,
    /// PGD steps per outer round.
    pub pgd_steps: usize,
    /// Surrogate training batches per outer round.
    pub surrogate_batches: usize,
    /// Generation stops once the surrogate's error on augmented protected
    /// data drops below this rate.
    pub stop_error: f32,
    pub max_rounds: usize,
    /// Outer rounds between policy selections.
    pub policy_refresh: usize,
    pub mode: NoiseMode,
    /// Size of the first PGD step.
    pub step_size: f32,
    /// Constant step size; disables adaptive stepping.
    pub fixed_step: Option<f32>,
    pub use_nonlocal: bool,
    pub seed: u64,
    pub batch_size: usize,
    pub widths: Vec<usize>,
    pub optimizer: OptimizerConfig,
    pub search: PolicySearchConfig,
    pub beta: f64,
    pub step_c: f64,
    /// Draw fresh augmentation randomness for every PGD step rather than
    /// once per round.
    pub fresh_draw_per_step: bool,
    /// Passes over the clean data that warm up the auxiliary model before
    /// the first policy selection.
    pub aux_pretrain_epochs: usize,
}

impl Default for NoiseGenConfig {
    fn default() -> Self {
        Self {
            epsilon: 8.0 / 255.0,
            pgd_steps: 10,
            surrogate_batches: 10,
            stop_error: 0.1,
            max_rounds: 20,
            policy_refresh: 1,
            mode: NoiseMode::Sample,
            step_size: 0.8 / 255.0,
            fixed_step: None,
            use_nonlocal: true,
            seed: 0,
            batch_size: 32,
            widths: vec![16, 32],
            optimizer: OptimizerConfig::default(),
            search: PolicySearchConfig::default(),
            beta: 0.9,
            step_c: 1.0,
            fresh_draw_per_step: true,
            aux_pretrain_epochs: 5,
        }
    }
}

impl NoiseGenConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(ArmorError::Config(m));
        if !(self.epsilon > 0.0 && self.epsilon.is_finite()) {
            return bad(format!("epsilon must be positive, got {}", self.epsilon));
        }
        if !(self.stop_error > 0.0 && self.stop_error <= 1.0) {
            return bad(format!("stop error rate must lie in (0, 1], got {}", self.stop_error));
        }
        if self.pgd_steps == 0 || self.surrogate_batches == 0 || self.max_rounds == 0 || self.policy_refresh == 0 {
            return bad("pgd steps, surrogate batches, max rounds and policy refresh must be positive".into());
        }
        if !(self.step_size > 0.0) || self.fixed_step.is_some_and(|s| !(s > 0.0)) {
            return bad("step sizes must be positive".into());
        }
        if self.batch_size == 0 || self.widths.is_empty() || self.widths.contains(&0) {
            return bad("batch size and widths must be positive".into());
        }
        self.optimizer.validate()?;
        self.search.validate()?;
        StepSizeState::new(0, self.beta, 1.0, self.step_c)?;
        Ok(())
    }

    pub fn surrogate_descriptor(&self, in_channels: usize, classes: usize) -> ArchDescriptor {
        let d = ArchDescriptor {
            in_channels,
            widths: self.widths.clone(),
            nonlocal_after: (0..self.widths.len().min(2)).collect(),
            classes,
        };
        if self.use_nonlocal {
            d
        } else {
            d.without_nonlocal()
        }
    }

    /// The plain error-minimizing configuration: no non-local blocks, a
    /// fixed step and Identity-only augmentation.
    pub fn base_variant(&self) -> Self {
        Self {
            use_nonlocal: false,
            fixed_step: Some(self.fixed_step.unwrap_or(self.step_size)),
            search: PolicySearchConfig {
                op_set: PolicySearchConfig::identity_only().op_set,
                ..self.search.clone()
            },
            ..self.clone()
        }
    }
}

/// Generated noise with its provenance.
#[derive(Clone, Debug)]
pub struct NoiseRun {
    pub noise: DefensiveNoise,
    pub rounds: usize,
    pub final_error: f32,
    /// False when `max_rounds` ran out before the stop condition held.
    pub converged: bool,
    pub policy: AugPolicy,
    pub surrogate: SurrogateModel,
    /// Step size used by every PGD step, in order.
    pub steps: Vec<f32>,
    /// Surrogate error on augmented protected data after each round.
    pub round_errors: Vec<f32>,
}

/// `clamp(x + δ, 0, 1)` with per-sample noise.
fn protected_images(clean: &ImageBatch, delta: &Tensor) -> Result<ImageBatch> {
    let data = clean
        .images()
        .data()
        .iter()
        .zip(delta.data())
        .map(|(&x, &d)| (x + d).clamp(0.0, 1.0))
        .collect();
    let mut out = clean.with_images(Tensor::new(clean.images().shape().to_vec(), data)?);
    out.noised = true;
    Ok(out)
}

/// Gradient of the summed loss w.r.t. the noise of every sample, through
/// the pixel clamp and the augmentation plan.
fn noise_gradient(
    surrogate: &SurrogateModel,
    clean: &ImageBatch,
    delta: &Tensor,
    policy: &AugPolicy,
    chunk: usize,
    rng: &mut impl Rng,
) -> Result<Tensor> {
    let (_, h, w) = clean.image_dims();
    let plan = plan_policy(clean.labels(), (h, w), policy, rng)?;
    let mut grad = Vec::with_capacity(delta.len());
    let n = clean.len();
    for start in (0..n).step_by(chunk) {
        let count = chunk.min(n - start);
        let tape = Tape::<f32>::new();
        let params = param_vars(surrogate, &tape, false);
        let x = tape.constant(clean.images().slice_outer(start, count)?);
        let d = tape.leaf(delta.slice_outer(start, count)?);
        let p = x.add(d)?.clamp(0.0, 1.0)?;
        let a = augment_var(p, &plan[start..start + count])?;
        let labels = &clean.labels()[start..start + count];
        let loss = surrogate.forward(&tape, &params, a)?.cross_entropy(labels)?.scale(count as f64)?;
        grad.extend(tape.backward(loss)?.wrt(d).into_data());
    }
    Ok(Tensor::new(delta.shape().to_vec(), grad)?)
}

fn squared_norms(grad: &Tensor) -> Vec<f64> {
    let per = grad.len() / grad.shape()[0];
    grad.data()
        .chunks(per)
        .map(|g| g.iter().map(|&v| (v as f64) * (v as f64)).sum())
        .collect()
}

/// Sample-wise defensive noise for `clean`.
pub fn generate_noise(clean: &ImageBatch, cfg: &NoiseGenConfig) -> Result<NoiseRun> {
    cfg.validate()?;
    if clean.is_empty() {
        return Err(ArmorError::Contract("noise generation needs a nonempty dataset".into()));
    }
    let mut rng = substream(cfg.seed, 0);
    let (c, ..) = clean.image_dims();
    let desc = cfg.surrogate_descriptor(c, clean.classes());
    let mut surrogate = build_surrogate(&desc, rng.gen())?;
    let mut aux = build_surrogate(&desc, rng.gen())?;
    let mut opt = Sgd::new(cfg.optimizer)?;
    let mut aux_opt = Sgd::new(cfg.optimizer)?;
    let search = !cfg.search.is_identity_only();
    if search && cfg.aux_pretrain_epochs > 0 {
        let warmup = PolicySearchConfig {
            aux_train_epochs: cfg.aux_pretrain_epochs,
            ..cfg.search.clone()
        };
        train_aux(&mut aux, &mut aux_opt, clean, &warmup, &mut rng)?;
    }

    let n = clean.len();
    let mut delta = Tensor::zeros(clean.images().shape())?;
    let mut policy = AugPolicy::identity(clean.classes())?;
    let mut state: Option<StepSizeState> = None;
    let mut order: Vec<usize> = Vec::new();
    let mut cursor = 0;
    let mut steps = Vec::new();
    let mut round_errors = Vec::new();
    let mut final_error = 1.0;
    let mut converged = false;
    let mut rounds = 0;

    while rounds < cfg.max_rounds {
        rounds += 1;
        let protected = protected_images(clean, &delta)?;

        let mut batches = Vec::with_capacity(cfg.surrogate_batches);
        for _ in 0..cfg.surrogate_batches {
            if cursor >= order.len() {
                order = (0..n).collect();
                order.shuffle(&mut rng);
                cursor = 0;
            }
            let end = (cursor + cfg.batch_size).min(order.len());
            let batch = protected.select(&order[cursor..end])?;
            cursor = end;
            batches.push(apply_policy(&batch, &policy, &mut rng)?);
        }
        train_batches(&mut surrogate, &mut opt, &batches)?;

        if search && (rounds - 1) % cfg.policy_refresh == 0 {
            policy = select_policy(&mut aux, &mut aux_opt, &protected, &cfg.search, &mut rng)?.policy;
        }

        let mut round_rng = ChaCha8Rng::seed_from_u64(rng.gen());
        let round_seed: u64 = rng.gen();
        for _ in 0..cfg.pgd_steps {
            let grad = if cfg.fresh_draw_per_step {
                noise_gradient(&surrogate, clean, &delta, &policy, cfg.batch_size, &mut round_rng)?
            } else {
                let mut r = ChaCha8Rng::seed_from_u64(round_seed);
                noise_gradient(&surrogate, clean, &delta, &policy, cfg.batch_size, &mut r)?
            };
            let alpha = match cfg.fixed_step {
                Some(s) => s,
                None => {
                    let norms = squared_norms(&grad);
                    let st = match &mut state {
                        Some(st) => st,
                        None => {
                            // scale γ so that the first step equals `step_size`
                            let mut probe = StepSizeState::new(n, cfg.beta, 1.0, cfg.step_c)?;
                            probe.advance(&norms)?;
                            let gamma = cfg.step_size as f64 * (cfg.step_c + probe.n.iter().sum::<f64>().sqrt());
                            state.insert(StepSizeState::new(n, cfg.beta, gamma, cfg.step_c)?)
                        }
                    };
                    st.advance(&norms)? as f32
                }
            };
            delta = pgd_update(&delta, &grad, alpha, cfg.epsilon)?;
            steps.push(alpha);
        }

        let check = apply_policy(&protected_images(clean, &delta)?, &policy, &mut rng)?;
        final_error = error_rate(&surrogate, &check)?;
        round_errors.push(final_error);
        if final_error < cfg.stop_error || cfg.stop_error >= 1.0 {
            converged = true;
            break;
        }
    }

    Ok(NoiseRun {
        noise: DefensiveNoise::new(NoiseMode::Sample, cfg.epsilon, delta)?,
        rounds,
        final_error,
        converged,
        policy,
        surrogate,
        steps,
        round_errors,
    })
}

/// Plain error-minimizing noise, the ablation baseline.
pub fn base_noise_emin(clean: &ImageBatch, cfg: &NoiseGenConfig) -> Result<NoiseRun> {
    generate_noise(clean, &cfg.base_variant())
}

/// Generates noise and, for class mode, averages it per class.
pub fn forge(clean: &ImageBatch, cfg: &NoiseGenConfig, base: bool) -> Result<NoiseRun> {
    let mut run = if base {
        base_noise_emin(clean, cfg)?
    } else {
        generate_noise(clean, cfg)?
    };
    if cfg.mode == NoiseMode::Class {
        run.noise = classwise_aggregate(&run.noise, clean.labels(), clean.classes())?;
    }
    Ok(run)
}

/// Per-class mean of sample-wise noise.
pub fn classwise_aggregate(noise: &DefensiveNoise, labels: &[usize], classes: usize) -> Result<DefensiveNoise> {
    if noise.mode() != NoiseMode::Sample {
        return Err(ArmorError::Contract("class-wise aggregation needs sample-wise noise".into()));
    }
    if labels.len() != noise.count() {
        return Err(ArmorError::Contract(format!(
            "{} labels for {} noise tensors",
            labels.len(),
            noise.count()
        )));
    }
    let shape = noise.tensor().shape();
    let per = noise.tensor().len() / shape[0];
    let mut sums = vec![vec![0.0f64; per]; classes];
    let mut counts = vec![0usize; classes];
    for (i, &y) in labels.iter().enumerate() {
        if y >= classes {
            return Err(ArmorError::Contract(format!("label {y} out of range for {classes} classes")));
        }
        counts[y] += 1;
        for (s, &v) in sums[y].iter_mut().zip(noise.for_sample(i, y)) {
            *s += v as f64;
        }
    }
    if let Some(k) = counts.iter().position(|&c| c == 0) {
        return Err(ArmorError::Config(format!("class {k} has no samples to aggregate")));
    }
    let data = sums
        .iter()
        .zip(&counts)
        .flat_map(|(s, &c)| s.iter().map(move |&v| (v / c as f64) as f32))
        .collect();
    let mut out_shape = shape.to_vec();
    out_shape[0] = classes;
    DefensiveNoise::new(NoiseMode::Class, noise.epsilon(), Tensor::new(out_shape, data)?)
}

/// I.i.d. uniform noise on `[−ε, ε]`.
pub fn random_noise_baseline(shape: &[usize], epsilon: f32, mode: NoiseMode, seed: u64) -> Result<DefensiveNoise> {
    if !(epsilon > 0.0) {
        return Err(ArmorError::Contract(format!("epsilon must be positive, got {epsilon}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let t = Tensor::from_fn(shape, |_| rng.gen_range(-epsilon..=epsilon))?;
    DefensiveNoise::new(mode, epsilon, t)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hand_derived_first_step() {
        let s = StepSizeState::new(1, 0.9, 1.0, 1.0).unwrap();
        let (s, a) = adaptive_step(&s, &[4.0]).unwrap();
        assert!((s.n[0] - 0.4).abs() < 1e-12);
        assert!((a - 0.612574).abs() < 1e-6, "{a}");
        assert_eq!(s.t, 1);
    }

    #[test]
    fn negative_norm_rejected() {
        let s = StepSizeState::new(1, 0.9, 1.0, 1.0).unwrap();
        assert!(adaptive_step(&s, &[-1.0]).is_err());
    }

    #[test]
    fn sign_arithmetic() {
        let d = Tensor::zeros(&[1, 1, 1, 3]).unwrap();
        let g = Tensor::new(vec![1, 1, 1, 3], vec![0.3, -0.2, 0.0]).unwrap();
        let out = pgd_update(&d, &g, 2.0 / 255.0, 8.0 / 255.0).unwrap();
        assert_eq!(out.data(), &[-2.0 / 255.0, 2.0 / 255.0, 0.0]);
    }

    #[test]
    fn mode_codes() {
        for m in [NoiseMode::Sample, NoiseMode::Class] {
            assert_eq!(NoiseMode::from_code(m.code()), Some(m));
            assert_eq!(m.to_string().parse::<NoiseMode>().unwrap(), m);
        }
        assert_eq!(NoiseMode::from_code(7), None);
    }

    #[test]
    fn base_variant_flags() {
        let b = NoiseGenConfig::default().base_variant();
        assert!(!b.use_nonlocal);
        assert_eq!(b.fixed_step, Some(0.8 / 255.0));
        assert!(b.search.is_identity_only());
    }
}

//! Per-class augmentation selection by gradient alignment.
//!
//! For each class, an auxiliary model's mean parameter gradient on one
//! batch is compared (by cosine similarity) with its gradient on a second,
//! augmented batch of the same class. The operation whose gradient agrees
//! best is assigned to the class.

use std::fmt::Write as _;

use armor_tensor::{par, Sgd};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::augment::{apply_op, AugKind, AugOp, AugPolicy, PolicyEntry};
use crate::data::ImageBatch;
use crate::model::{loss_and_grads, train_batches, Network};
use crate::{ArmorError, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct PolicySearchConfig {
    /// Passes of auxiliary-model training before scoring.
    pub aux_train_epochs: usize,
    pub batch_size: usize,
    /// Candidate operations, Identity first.
    pub op_set: Vec<AugOp>,
    /// Number of (x₁, x₂) batch pairs averaged per candidate.
    pub similarity_batches_per_class: usize,
}

impl Default for PolicySearchConfig {
    fn default() -> Self {
        Self {
            aux_train_epochs: 1,
            batch_size: 32,
            op_set: AugKind::ALL.into_iter().map(AugOp::new).collect(),
            similarity_batches_per_class: 1,
        }
    }
}

impl PolicySearchConfig {
    pub fn identity_only() -> Self {
        Self {
            op_set: vec![AugOp::new(AugKind::Identity)],
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.aux_train_epochs == 0 || self.batch_size == 0 || self.similarity_batches_per_class == 0 {
            return Err(ArmorError::Config(
                "policy search epochs, batch size and draws per class must be positive".into(),
            ));
        }
        if self.op_set.first().map(|o| o.kind) != Some(AugKind::Identity) {
            return Err(ArmorError::Config("policy search op set must start with Identity".into()));
        }
        Ok(())
    }

    /// True when the only candidate is Identity, so selection is vacuous.
    pub fn is_identity_only(&self) -> bool {
        self.op_set.iter().all(|o| o.kind == AugKind::Identity)
    }
}

/// Gradient of the mean cross-entropy w.r.t. every parameter, flattened in
/// declaration order.
pub fn param_gradient<N: Network>(net: &N, batch: &ImageBatch) -> Result<Vec<f32>> {
    let (_, grads) = loss_and_grads(net, batch)?;
    Ok(grads.iter().flat_map(|g| g.data().iter().copied()).collect())
}

/// `a·b / (‖a‖‖b‖)`, or 0 when either norm is below 1e-12. Accumulates in
/// `f64`.
pub fn cosine_similarity(a: &[f32], b: &[f32]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(ArmorError::Contract(format!(
            "cosine similarity of vectors with lengths {} and {}",
            a.len(),
            b.len()
        )));
    }
    let (mut dot, mut na, mut nb) = (0.0f64, 0.0f64, 0.0f64);
    for (&x, &y) in a.iter().zip(b) {
        let (x, y) = (x as f64, y as f64);
        dot += x * y;
        na += x * x;
        nb += y * y;
    }
    let (na, nb) = (na.sqrt(), nb.sqrt());
    if na < 1e-12 || nb < 1e-12 {
        return Ok(0.0);
    }
    Ok((dot / (na * nb)).clamp(-1.0, 1.0))
}

/// The batches and seeds behind one class's similarity scores.
#[derive(Clone, Debug, PartialEq)]
pub struct ClassDraw {
    pub class: usize,
    /// Sample indices of the reference batch x₁.
    pub reference: Vec<usize>,
    /// Sample indices of the batch x₂ that gets augmented.
    pub candidate: Vec<usize>,
    /// Seed of the augmentation stream, one per operation in the op set.
    pub op_seeds: Vec<u64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PolicySelection {
    pub policy: AugPolicy,
    /// `scores[k][j]`: mean similarity of op `j` for class `k`.
    pub scores: Vec<Vec<f64>>,
    pub draws: Vec<ClassDraw>,
}

impl PolicySelection {
    /// Text table of per-class, per-operation similarity scores.
    pub fn score_table(&self, op_set: &[AugOp]) -> String {
        let mut s = String::from("class");
        for op in op_set {
            let _ = write!(s, " {:>12}", op.kind.name());
        }
        s.push_str("   selected\n");
        for (k, row) in self.scores.iter().enumerate() {
            let _ = write!(s, "{k:>5}");
            for v in row {
                let _ = write!(s, " {v:>12.6}");
            }
            let _ = writeln!(s, "   {}", self.policy.entry(k).op.kind);
        }
        s
    }
}

/// Index of the largest score, first index on ties.
pub fn argmax_first(scores: &[f64]) -> usize {
    let mut best = 0;
    for (j, &v) in scores.iter().enumerate() {
        if v > scores[best] {
            best = j;
        }
    }
    best
}

/// Trains the auxiliary model on the protected data for
/// `aux_train_epochs` shuffled passes.
pub fn train_aux<N: Network>(aux: &mut N, opt: &mut Sgd, data: &ImageBatch, cfg: &PolicySearchConfig, rng: &mut impl Rng) -> Result<()> {
    for _ in 0..cfg.aux_train_epochs {
        let mut order: Vec<usize> = (0..data.len()).collect();
        order.shuffle(rng);
        let batches = data.batches(&order, cfg.batch_size)?;
        train_batches(aux, opt, &batches)?;
    }
    Ok(())
}

/// Updates the auxiliary model on `protected`, then scores every candidate
/// operation per class and assigns the best-aligned one.
pub fn select_policy<N: Network>(
    aux: &mut N,
    aux_opt: &mut Sgd,
    protected: &ImageBatch,
    cfg: &PolicySearchConfig,
    rng: &mut impl Rng,
) -> Result<PolicySelection> {
    cfg.validate()?;
    let classes = protected.classes();
    let bs = cfg.batch_size;
    for k in 0..classes {
        let have = protected.class_indices(k).len();
        if have < 2 * bs {
            return Err(ArmorError::Config(format!(
                "class {k} has {have} samples; policy search needs at least {}",
                2 * bs
            )));
        }
    }
    train_aux(aux, aux_opt, protected, cfg, rng)?;
    let aux: &N = aux;

    let mut scores = Vec::with_capacity(classes);
    let mut draws = Vec::new();
    let mut entries = Vec::with_capacity(classes);
    for k in 0..classes {
        let mut total = vec![0.0f64; cfg.op_set.len()];
        for _ in 0..cfg.similarity_batches_per_class {
            let mut idx = protected.class_indices(k);
            idx.shuffle(rng);
            let draw = ClassDraw {
                class: k,
                reference: idx[..bs].to_vec(),
                candidate: idx[bs..2 * bs].to_vec(),
                op_seeds: cfg.op_set.iter().map(|_| rng.gen()).collect(),
            };
            let row = score_draw(aux, protected, &cfg.op_set, &draw)?;
            total.iter_mut().zip(&row).for_each(|(t, v)| *t += v);
            draws.push(draw);
        }
        let m = cfg.similarity_batches_per_class as f64;
        total.iter_mut().for_each(|t| *t /= m);
        let best = argmax_first(&total);
        entries.push(PolicyEntry {
            op: cfg.op_set[best],
            magnitude: None,
        });
        scores.push(total);
    }
    Ok(PolicySelection {
        policy: AugPolicy::new(entries)?,
        scores,
        draws,
    })
}

/// Similarity of every candidate on one draw; candidates run in parallel.
pub fn score_draw<N: Network>(aux: &N, data: &ImageBatch, op_set: &[AugOp], draw: &ClassDraw) -> Result<Vec<f64>> {
    let reference = param_gradient(aux, &data.select(&draw.reference)?)?;
    let x2 = data.select(&draw.candidate)?;
    let jobs: Vec<(AugOp, u64)> = op_set.iter().copied().zip(draw.op_seeds.iter().copied()).collect();
    par::map_slice(&jobs, |(op, seed)| -> Result<f64> {
        let mut r = ChaCha8Rng::seed_from_u64(*seed);
        let magnitude = op.selection_magnitude().unwrap_or(0.0);
        let augmented = apply_op(&x2, op, magnitude, &mut r)?;
        cosine_similarity(&reference, &param_gradient(aux, &augmented)?)
    })
    .into_iter()
    .collect()
}

//! Victim training on protected data and clean-test evaluation.

use std::fmt::Write as _;
use std::time::Instant;

use armor_tensor::{OptimizerConfig, Sgd, Tensor};
use rand::seq::SliceRandom;
use rand::Rng;

use crate::augment::{apply_plan, apply_policy, AugKind, AugOp, AugPolicy, SampleAug};
use crate::config::{AugmentSetting, Config, DataSource, NoiseSource};
use crate::data::{first_per_class, gen_synthetic, load_cifar10, Dataset};
use crate::formats::{read_noise, read_policy};
use crate::noise::{forge, random_noise_baseline};
use crate::data::ImageBatch;
use crate::model::{build_surrogate, error_rate, train_batches, ArchDescriptor, SurrogateModel};
use crate::noise::{DefensiveNoise, NoiseMode};
use crate::policy::{select_policy, PolicySearchConfig};
use crate::rng::{fork, substream};
use crate::{ArmorError, Result};

/// `clamp(x + δ, 0, 1)`, with δ looked up by index (sample mode) or label
/// (class mode).
pub fn apply_noise(data: &ImageBatch, noise: &DefensiveNoise) -> Result<ImageBatch> {
    let expected = match noise.mode() {
        NoiseMode::Sample => data.len(),
        NoiseMode::Class => data.classes(),
    };
    if noise.count() != expected || noise.tensor().len() / noise.count() != data.image_len() {
        return Err(ArmorError::Contract(format!(
            "{} noise of shape {:?} does not fit {} images of {:?}",
            noise.mode(),
            noise.tensor().shape(),
            data.len(),
            data.image_dims()
        )));
    }
    let len = data.image_len();
    let mut out = Vec::with_capacity(data.len() * len);
    for (i, &y) in data.labels().iter().enumerate() {
        out.extend(data.image(i).iter().zip(noise.for_sample(i, y)).map(|(&x, &d)| (x + d).clamp(0.0, 1.0)));
    }
    let mut protected = data.with_images(Tensor::new(data.images().shape().to_vec(), out)?);
    protected.noised = true;
    Ok(protected)
}

/// How the victim augments its training batches.
#[derive(Clone, Debug, PartialEq)]
pub enum VictimAugment {
    Off,
    /// A fixed per-class policy.
    Policy(AugPolicy),
    /// Each sample gets an operation drawn uniformly from the set, with a
    /// sampled magnitude.
    Random(Vec<AugOp>),
    /// A policy re-selected every `refresh_epochs` epochs by gradient
    /// alignment on the training data.
    Search {
        config: PolicySearchConfig,
        refresh_epochs: usize,
    },
}

impl VictimAugment {
    pub fn is_off(&self) -> bool {
        matches!(self, VictimAugment::Off)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct VictimConfig {
    pub widths: Vec<usize>,
    pub nonlocal: bool,
    pub epochs: usize,
    pub batch_size: usize,
    pub optimizer: OptimizerConfig,
    pub seed: u64,
    pub augment: VictimAugment,
}

impl Default for VictimConfig {
    fn default() -> Self {
        Self {
            widths: vec![16, 32],
            nonlocal: false,
            epochs: 50,
            batch_size: 32,
            optimizer: OptimizerConfig::default(),
            seed: 0,
            augment: VictimAugment::Off,
        }
    }
}

impl VictimConfig {
    pub fn descriptor(&self, in_channels: usize, classes: usize) -> ArchDescriptor {
        let d = ArchDescriptor {
            in_channels,
            widths: self.widths.clone(),
            nonlocal_after: (0..self.widths.len().min(2)).collect(),
            classes,
        };
        if self.nonlocal {
            d
        } else {
            d.without_nonlocal()
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    /// Mean of the batch losses.
    pub loss: f32,
    /// Error on the epoch's (augmented) training batches.
    pub error_rate: f32,
}

fn random_plan(batch: &ImageBatch, ops: &[AugOp], rng: &mut impl Rng) -> Vec<SampleAug> {
    let (_, h, w) = batch.image_dims();
    let base = fork(rng);
    (0..batch.len())
        .map(|i| {
            let mut r = substream(base, i as u64);
            let op = ops[r.gen_range(0..ops.len())];
            let magnitude = op.sample_magnitude(&mut r).unwrap_or(0.0);
            let place = match op.kind {
                AugKind::Cutout => (r.gen_range(0..h), r.gen_range(0..w)),
                AugKind::Crop => (r.gen_range(0..=8), r.gen_range(0..=8)),
                _ => (0, 0),
            };
            SampleAug {
                kind: op.kind,
                magnitude,
                place,
            }
        })
        .collect()
}

/// Trains a freshly initialized victim on `train` and logs every epoch.
pub fn train_victim(train: &ImageBatch, cfg: &VictimConfig) -> Result<(SurrogateModel, Vec<EpochLog>)> {
    let (c, ..) = train.image_dims();
    let desc = cfg.descriptor(c, train.classes());
    let mut rng = substream(cfg.seed, 0);
    let mut model = build_surrogate(&desc, rng.gen())?;
    let mut opt = Sgd::new(cfg.optimizer)?;
    if let VictimAugment::Random(ops) = &cfg.augment {
        if ops.is_empty() {
            return Err(ArmorError::Config("random victim augmentation needs operations".into()));
        }
    }
    let mut searched: Option<(SurrogateModel, Sgd, AugPolicy)> = None;
    let mut log = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        if let VictimAugment::Search { config, refresh_epochs } = &cfg.augment {
            if epoch % (*refresh_epochs).max(1) == 0 {
                let (mut aux, mut aux_opt) = match searched.take() {
                    Some((m, o, _)) => (m, o),
                    None => (build_surrogate(&desc, rng.gen())?, Sgd::new(cfg.optimizer)?),
                };
                let p = select_policy(&mut aux, &mut aux_opt, train, config, &mut rng)?.policy;
                searched = Some((aux, aux_opt, p));
            }
        }
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut rng);
        let mut batches = train.batches(&order, cfg.batch_size)?;
        for b in &mut batches {
            *b = match &cfg.augment {
                VictimAugment::Off => continue,
                VictimAugment::Policy(p) => apply_policy(b, p, &mut rng)?,
                VictimAugment::Random(ops) => {
                    let plan = random_plan(b, ops, &mut rng);
                    apply_plan(b, &plan)?
                }
                VictimAugment::Search { .. } => {
                    let p = &searched.as_ref().expect("policy selected at epoch start").2;
                    apply_policy(b, p, &mut rng)?
                }
            };
        }
        let losses = train_batches(&mut model, &mut opt, &batches)?;
        let mut wrong = 0.0;
        for b in &batches {
            wrong += error_rate(&model, b)? * b.len() as f32;
        }
        log.push(EpochLog {
            epoch,
            loss: losses.iter().sum::<f32>() / losses.len() as f32,
            error_rate: wrong / train.len() as f32,
        });
    }
    Ok((model, log))
}

/// Clean test accuracy in percent.
pub fn evaluate(model: &SurrogateModel, test: &ImageBatch) -> Result<f32> {
    if test.noised || test.augmented {
        return Err(ArmorError::Contract(
            "evaluation data must be clean (neither noised nor augmented)".into(),
        ));
    }
    Ok(100.0 * (1.0 - error_rate(model, test)?))
}

/// Train and test splits for seed offset `offset`.
pub fn load_data(cfg: &Config, offset: u64) -> Result<(Dataset, Dataset)> {
    match cfg.data.source {
        DataSource::Synthetic => {
            let mut spec = cfg.data.synthetic.clone();
            spec.seed = spec.seed.wrapping_add(offset);
            let (train, test) = gen_synthetic(&spec)?;
            match cfg.data.subset {
                Some(n) => Ok((first_per_class(&train, n)?, test)),
                None => Ok((train, test)),
            }
        }
        DataSource::Cifar => load_cifar10(&cfg.data.path, cfg.data.subset),
    }
}

/// Resolves a configured augmentation into a victim training scheme.
pub fn victim_augment(cfg: &Config, setting: &AugmentSetting) -> Result<VictimAugment> {
    Ok(match setting {
        AugmentSetting::Off => VictimAugment::Off,
        AugmentSetting::Search => VictimAugment::Search {
            config: cfg.noise.search.clone(),
            refresh_epochs: cfg.victim_search_refresh,
        },
        AugmentSetting::Random => VictimAugment::Random(AugKind::ALL.into_iter().map(AugOp::new).collect()),
        AugmentSetting::PolicyFile(p) => VictimAugment::Policy(read_policy(p)?),
    })
}

/// Noise of the requested kind for `train`, with the number of generation
/// rounds it took.
pub fn make_noise(cfg: &Config, source: &NoiseSource, train: &Dataset, offset: u64) -> Result<Option<(DefensiveNoise, usize)>> {
    let mut ncfg = cfg.noise.clone();
    ncfg.seed = ncfg.seed.wrapping_add(offset);
    Ok(match source {
        NoiseSource::None => None,
        NoiseSource::Random => {
            let mut shape = train.images().shape().to_vec();
            if ncfg.mode == NoiseMode::Class {
                shape[0] = train.classes();
            }
            Some((random_noise_baseline(&shape, ncfg.epsilon, ncfg.mode, ncfg.seed)?, 0))
        }
        NoiseSource::Base | NoiseSource::Armor => {
            let run = forge(train, &ncfg, *source == NoiseSource::Base)?;
            Some((run.noise, run.rounds))
        }
        NoiseSource::File(p) => Some((read_noise(p)?, 0)),
    })
}

/// One result row of an experiment grid.
#[derive(Clone, Debug, PartialEq)]
pub struct ReportRow {
    pub cell: String,
    pub noise: String,
    pub augmentation: String,
    pub victim: String,
    pub seed: u64,
    /// Clean test accuracy in percent, or the failure message.
    pub accuracy: std::result::Result<f32, String>,
    pub rounds: usize,
    pub seconds: f64,
}

fn victim_name(v: &VictimConfig) -> String {
    let widths: Vec<String> = v.widths.iter().map(|w| w.to_string()).collect();
    format!("cnn{}{}", widths.join("-"), if v.nonlocal { "+nl" } else { "" })
}

/// Runs every cell of the configured grid. Noise is generated once per
/// (source, seed) and shared by the augmentation variants. Failures are
/// recorded in their rows. Rows are ordered by noise source, augmentation,
/// then seed.
pub fn run_experiment(cfg: &Config) -> Result<Vec<ReportRow>> {
    let grid = &cfg.experiment;
    if grid.noises.is_empty() || grid.augments.is_empty() || grid.seeds.is_empty() {
        return Err(ArmorError::Config("experiment grid is empty".into()));
    }
    let mut rows = Vec::new();
    for (ni, source) in grid.noises.iter().enumerate() {
        for &seed in &grid.seeds {
            let started = Instant::now();
            let prepared = load_data(cfg, seed).and_then(|(train, test)| {
                let noise = make_noise(cfg, source, &train, seed)?;
                let rounds = noise.as_ref().map_or(0, |n| n.1);
                let protected = match &noise {
                    Some((n, _)) => apply_noise(&train, n)?,
                    None => train,
                };
                Ok((protected, test, rounds))
            });
            let noise_secs = started.elapsed().as_secs_f64();
            for (ai, aug) in grid.augments.iter().enumerate() {
                let t = Instant::now();
                let mut victim = cfg.victim.clone();
                victim.seed = victim.seed.wrapping_add(seed);
                let outcome = match &prepared {
                    Ok((protected, test, rounds)) => victim_augment(cfg, aug)
                        .and_then(|a| {
                            victim.augment = a;
                            train_victim(protected, &victim)
                        })
                        .and_then(|(m, _)| evaluate(&m, test))
                        .map(|acc| (acc, *rounds)),
                    Err(e) => Err(ArmorError::Contract(e.to_string())),
                };
                let (accuracy, rounds) = match outcome {
                    Ok((a, r)) => (Ok(a), r),
                    Err(e) => (Err(e.to_string()), 0),
                };
                rows.push((
                    (ni, ai, seed),
                    ReportRow {
                        cell: format!("{source}/{aug}/s{seed}"),
                        noise: source.to_string(),
                        augmentation: aug.to_string(),
                        victim: victim_name(&victim),
                        seed,
                        accuracy,
                        rounds,
                        seconds: noise_secs + t.elapsed().as_secs_f64(),
                    },
                ));
            }
        }
    }
    rows.sort_by_key(|(k, _)| *k);
    Ok(rows.into_iter().map(|(_, r)| r).collect())
}

fn accuracy_text(a: &std::result::Result<f32, String>) -> String {
    match a {
        Ok(v) => format!("{v:.2}"),
        Err(_) => "failed".into(),
    }
}

/// Aligned text table; wall time is left to the CSV.
pub fn render_table(rows: &[ReportRow]) -> String {
    let mut s = String::new();
    let _ = writeln!(
        s,
        "{:<40} {:<10} {:<14} {:<12} {:>5} {:>9} {:>6}",
        "cell", "noise", "augmentation", "victim", "seed", "accuracy", "rounds"
    );
    for r in rows {
        let _ = writeln!(
            s,
            "{:<40} {:<10} {:<14} {:<12} {:>5} {:>9} {:>6}",
            r.cell,
            r.noise,
            r.augmentation,
            r.victim,
            r.seed,
            accuracy_text(&r.accuracy),
            r.rounds
        );
        if let Err(e) = &r.accuracy {
            let _ = writeln!(s, "    error: {e}");
        }
    }
    s
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

pub const CSV_HEADER: &str = "cell,noise,augmentation,victim,seed,accuracy,rounds,seconds";

pub fn render_csv(rows: &[ReportRow]) -> String {
    let mut s = String::from(CSV_HEADER);
    s.push('\n');
    for r in rows {
        let _ = writeln!(
            s,
            "{},{},{},{},{},{},{},{:.3}",
            csv_field(&r.cell),
            csv_field(&r.noise),
            csv_field(&r.augmentation),
            csv_field(&r.victim),
            r.seed,
            accuracy_text(&r.accuracy),
            r.rounds,
            r.seconds
        );
    }
    s
}

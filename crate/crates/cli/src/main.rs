//! `armor`: command-line driver for noise generation, policy selection,
//! victim training and ablation grids.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use armor_core::config::{AugmentSetting, Config};
use armor_core::eval::{
    apply_noise, evaluate, load_data, render_csv, render_table, run_experiment, train_victim, victim_augment,
};
use armor_core::formats::{read_checkpoint, read_noise, read_text, write_checkpoint, write_noise, write_policy, write_text};
use armor_core::model::SurrogateModel;
use armor_core::noise::{forge, NoiseMode};
use armor_core::policy::select_policy;
use armor_core::selftest::gradcheck_suite;
use armor_core::{ArmorError, Sgd};
use armor_tensor::par;
use clap::{Args, Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Exit code for a failed numeric self-test.
const EXIT_SELFTEST: u8 = 3;

#[derive(Parser, Debug)]
#[command(name = "armor", version, about = "Augmentation-resistant defensive noise")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct Common {
    /// Configuration file; built-in defaults when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides every seed in the configuration.
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads; results do not depend on it.
    #[arg(long)]
    threads: Option<usize>,
    /// Keep only the first n training samples per class.
    #[arg(long)]
    subset: Option<usize>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Optimize defensive noise for the training split and write it as ARMR.
    GenNoise {
        #[command(flatten)]
        common: Common,
        /// ARMR output file.
        #[arg(long)]
        out: PathBuf,
        /// sample or class; overrides the configuration.
        #[arg(long, value_parser = parse_mode)]
        mode: Option<NoiseMode>,
        /// Surrogate without non-local blocks.
        #[arg(long)]
        no_nonlocal: bool,
        /// Constant PGD step instead of the adaptive schedule.
        #[arg(long)]
        fixed_step: Option<f32>,
        /// Plain error-minimizing noise: no non-local blocks, fixed step, no augmentation search.
        #[arg(long)]
        base: bool,
    },
    /// Pick a per-class augmentation with an auxiliary model from a checkpoint.
    SelectPolicy {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Noise to apply to the training split before scoring.
        #[arg(long)]
        noise: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a victim classifier and write its checkpoint.
    TrainVictim {
        #[command(flatten)]
        common: Common,
        /// Noise to apply to the training split.
        #[arg(long)]
        noise: Option<PathBuf>,
        /// on, off, random, or a policy file.
        #[arg(long)]
        augment: Option<String>,
        #[arg(long)]
        no_nonlocal: bool,
        #[arg(long)]
        out: PathBuf,
    },
    /// Clean test accuracy of a checkpoint.
    Evaluate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Run the experiment grid; table on stdout, CSV at --out.
    Ablate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Finite-difference check of every differentiable operation.
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        threads: Option<usize>,
    },
}

fn parse_mode(s: &str) -> Result<NoiseMode, String> {
    s.parse::<NoiseMode>().map_err(|e| e.to_string())
}

fn parse_augment(s: &str) -> Result<AugmentSetting, ArmorError> {
    match s {
        "on" | "off" | "search" | "random" => s.parse(),
        _ if s.starts_with("policy:") => s.parse(),
        _ => Ok(AugmentSetting::PolicyFile(PathBuf::from(s))),
    }
}

fn load_config(common: &Common) -> Result<Config, ArmorError> {
    let mut cfg = match &common.config {
        Some(p) => Config::parse(&read_text(p)?)?,
        None => Config::default(),
    };
    if let Some(seed) = common.seed {
        cfg.data.synthetic.seed = seed;
        cfg.noise.seed = seed;
        cfg.victim.seed = seed;
    }
    if common.subset.is_some() {
        cfg.data.subset = common.subset;
    }
    Ok(cfg)
}

fn protected_train(cfg: &Config, noise: Option<&Path>) -> Result<(armor_core::data::Dataset, armor_core::data::Dataset), ArmorError> {
    let (train, test) = load_data(cfg, 0)?;
    let train = match noise {
        Some(p) => apply_noise(&train, &read_noise(p)?)?,
        None => train,
    };
    Ok((train, test))
}

/// Runs a subcommand; returns the exit code on success paths that are not 0.
fn run(command: Command) -> Result<u8, ArmorError> {
    match command {
        Command::GenNoise {
            common,
            out,
            mode,
            no_nonlocal,
            fixed_step,
            base,
        } => {
            let mut cfg = load_config(&common)?;
            if let Some(m) = mode {
                cfg.noise.mode = m;
            }
            if no_nonlocal {
                cfg.noise.use_nonlocal = false;
            }
            if fixed_step.is_some() {
                cfg.noise.fixed_step = fixed_step;
            }
            let (train, _) = load_data(&cfg, 0)?;
            eprintln!("generating noise for {} samples", train.len());
            let run = with_threads(common.threads, || forge(&train, &cfg.noise, base))?;
            write_noise(&run.noise, &out)?;
            println!("rounds {}", run.rounds);
            println!("final_error {:.6}", run.final_error);
            println!("converged {}", run.converged);
            Ok(0)
        }
        Command::SelectPolicy {
            common,
            checkpoint,
            noise,
            out,
        } => {
            let cfg = load_config(&common)?;
            let mut aux: SurrogateModel = read_checkpoint(&checkpoint)?;
            let (train, _) = protected_train(&cfg, noise.as_deref())?;
            let mut opt = Sgd::new(cfg.noise.optimizer)?;
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.noise.seed);
            let sel = with_threads(common.threads, || {
                select_policy(&mut aux, &mut opt, &train, &cfg.noise.search, &mut rng)
            })?;
            write_policy(&sel.policy, &out)?;
            print!("{}", sel.score_table(&cfg.noise.search.op_set));
            Ok(0)
        }
        Command::TrainVictim {
            common,
            noise,
            augment,
            no_nonlocal,
            out,
        } => {
            let cfg = load_config(&common)?;
            let setting = match augment {
                Some(a) => parse_augment(&a)?,
                None => cfg.victim_augment.clone(),
            };
            let mut victim = cfg.victim.clone();
            victim.augment = victim_augment(&cfg, &setting)?;
            if no_nonlocal {
                victim.nonlocal = false;
            }
            let (train, _) = protected_train(&cfg, noise.as_deref())?;
            let (model, log) = with_threads(common.threads, || train_victim(&train, &victim))?;
            write_checkpoint(&model, &out)?;
            println!("epoch loss error_rate");
            for e in log {
                println!("{} {:.6} {:.6}", e.epoch, e.loss, e.error_rate);
            }
            Ok(0)
        }
        Command::Evaluate { common, checkpoint } => {
            let cfg = load_config(&common)?;
            let model = read_checkpoint(&checkpoint)?;
            let (_, test) = load_data(&cfg, 0)?;
            let acc = with_threads(common.threads, || evaluate(&model, &test))?;
            println!("accuracy {acc:.2}");
            Ok(0)
        }
        Command::Ablate { common, out } => {
            let cfg = load_config(&common)?;
            let rows = with_threads(common.threads, || run_experiment(&cfg))?;
            print!("{}", render_table(&rows));
            if let Some(p) = out {
                write_text(&p, &render_csv(&rows))?;
            }
            Ok(0)
        }
        Command::Gradcheck { seed, threads } => {
            let results = with_threads(threads, || gradcheck_suite(seed))?;
            let mut text = String::new();
            let mut failed = 0;
            for r in &results {
                let status = if r.report.pass { "ok" } else { "FAIL" };
                failed += usize::from(!r.report.pass);
                let _ = writeln!(
                    text,
                    "{status:<4} {:<28} shape {:?} max_rel_error {:.3e}",
                    r.name, r.shape, r.report.max_rel_error
                );
            }
            print!("{text}");
            println!("{} checks, {failed} failed", results.len());
            Ok(if failed == 0 { 0 } else { EXIT_SELFTEST })
        }
    }
}

fn with_threads<R: Send>(threads: Option<usize>, f: impl FnOnce() -> R + Send) -> R {
    match threads {
        Some(n) => par::with_threads(n, f),
        None => f(),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli.command) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}

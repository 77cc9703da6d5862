//! `advnorm`: phantom generation, preprocessing, training, evaluation,
//! volume normalization and report rendering.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use advnorm_core::eval::{self, evaluate_patches, normalization_histograms};
use advnorm_core::inference::normalize_volume;
use advnorm_core::losses::ResolvedLoss;
use advnorm_core::phantom;
use advnorm_core::trainer::{metrics_ndjson, ModelCheckpoint, Mode, Trainer};
use advnorm_core::volume::{load_mask, load_volume, save_volume};
use advnorm_core::{Error, ExperimentConfig, Partition, PatchSet, Result};
use clap::{Args, Parser, Subcommand};
use serde::Serialize;

#[derive(Parser)]
#[command(name = "advnorm", version, about = "Adversarial intensity normalization for multi-domain 3-D segmentation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Experiment config (JSON). Built-in defaults when omitted.
    #[arg(long, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, value_name = "DIR")]
    out: PathBuf,
    /// Overrides every seed in the config.
    #[arg(long, value_name = "N")]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the two-domain phantom dataset.
    Phantom {
        #[command(flatten)]
        common: Common,
    },
    /// Skull strip, resample and cut patches with a stratified split.
    Preprocess {
        #[command(flatten)]
        common: Common,
        /// Dataset manifest to read instead of generating phantoms.
        #[arg(long, value_name = "PATH")]
        manifest: Option<PathBuf>,
        #[arg(long)]
        patch_size: Option<usize>,
        #[arg(long)]
        stride: Option<usize>,
        #[arg(long)]
        target_spacing: Option<f64>,
        /// Train, validation and test fractions.
        #[arg(long, value_name = "T,V,E", value_parser = parse_split)]
        split: Option<[f64; 3]>,
        /// Gaussian-standardize intensities.
        #[arg(long)]
        standardize: bool,
    },
    /// Train one model and write its checkpoint and metrics log.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_parser = parse_mode, default_value = "adversarial")]
        mode: Mode,
        /// Resume from this checkpoint.
        #[arg(long, value_name = "PATH")]
        checkpoint: Option<PathBuf>,
        /// Training domains, comma separated. All when omitted.
        #[arg(long, value_delimiter = ',')]
        domains: Vec<usize>,
        /// Patch directory written by `preprocess`. Built from the config when omitted.
        #[arg(long, value_name = "DIR")]
        patches: Option<PathBuf>,
    },
    /// Dice of a checkpoint on one split.
    Evaluate {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_name = "PATH")]
        checkpoint: PathBuf,
        #[arg(long, value_parser = parse_split_name, default_value = "test")]
        split: Partition,
        #[arg(long, value_delimiter = ',')]
        domains: Vec<usize>,
        #[arg(long, value_name = "DIR")]
        patches: Option<PathBuf>,
    },
    /// Apply a trained generator to a whole volume.
    Normalize {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_name = "PATH")]
        checkpoint: PathBuf,
        /// Image volume (.mvol).
        #[arg(long, value_name = "PATH")]
        input: PathBuf,
        /// Label volume used to skull strip the input first.
        #[arg(long, value_name = "PATH")]
        mask: Option<PathBuf>,
    },
    /// Render the comparison table of a matrix run directory.
    Report {
        #[arg(long, value_name = "DIR")]
        rundir: PathBuf,
        /// Where to write the table. Defaults to the run directory.
        #[arg(long, value_name = "DIR")]
        out: Option<PathBuf>,
        #[arg(long, value_name = "PATH")]
        config: Option<PathBuf>,
    },
    /// Run all seven experiments.
    Matrix {
        #[command(flatten)]
        common: Common,
    },
}

fn parse_split(s: &str) -> std::result::Result<[f64; 3], String> {
    let v: Vec<f64> = s.split(',').map(|x| x.trim().parse::<f64>().map_err(|e| e.to_string())).collect::<std::result::Result<_, _>>()?;
    <[f64; 3]>::try_from(v).map_err(|_| "expected three comma-separated fractions".to_string())
}

fn parse_mode(s: &str) -> std::result::Result<Mode, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

fn parse_split_name(s: &str) -> std::result::Result<Partition, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

fn resolve(config: Option<&Path>, seed: Option<u64>) -> Result<ExperimentConfig> {
    let c = match config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    Ok(match seed {
        Some(s) => c.with_seed(s),
        None => c,
    })
}

fn prepare(config: &ExperimentConfig, out: &Path) -> Result<()> {
    config.validate()?;
    std::fs::create_dir_all(out)?;
    config.save(&out.join("config.json"))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    std::fs::write(path, serde_json::to_string_pretty(value)? + "\n")?;
    Ok(())
}

fn patch_set(config: &ExperimentConfig, patches: Option<&Path>) -> Result<PatchSet> {
    match patches {
        Some(dir) => PatchSet::load(dir),
        None => PatchSet::build(&config.load_samples()?, &config.pipeline),
    }
}

fn class_counts(set: &[advnorm_core::Patch], classes: usize) -> Vec<usize> {
    let mut counts = vec![0; classes];
    for p in set {
        for &l in &p.mask {
            counts[l as usize] += 1;
        }
    }
    counts
}

#[derive(Serialize)]
struct ErrorReport<'a> {
    error: String,
    epoch: usize,
    mode: &'a str,
}

#[derive(Serialize)]
struct Evaluation {
    checkpoint: PathBuf,
    mode: Mode,
    epoch: usize,
    split: Partition,
    domains: Vec<usize>,
    patches: usize,
    dice: Vec<f64>,
    mean_dice: f64,
    dice_empty: bool,
    per_domain: Vec<DomainDice>,
}

#[derive(Serialize)]
struct DomainDice {
    domain: usize,
    patches: usize,
    dice: Vec<f64>,
    mean_dice: f64,
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::Phantom { common } => {
            let config = resolve(common.config.as_deref(), common.seed)?;
            prepare(&config, &common.out)?;
            let manifest = phantom::generate_domain_dataset(&config.phantom, &common.out)?;
            log::info!("wrote {} samples to {}", manifest.samples.len(), common.out.display());
        }
        Command::Preprocess { common, manifest, patch_size, stride, target_spacing, split, standardize } => {
            let mut config = resolve(common.config.as_deref(), common.seed)?;
            if manifest.is_some() {
                config.manifest = manifest;
            }
            let p = &mut config.pipeline;
            p.patch_size = patch_size.unwrap_or(p.patch_size);
            p.stride = stride.unwrap_or(p.stride);
            p.target_spacing = target_spacing.unwrap_or(p.target_spacing);
            p.split = split.unwrap_or(p.split);
            p.standardize |= standardize;
            if patch_size.is_some() {
                config.networks.discriminator.input_size = config.pipeline.patch_size;
            }
            prepare(&config, &common.out)?;
            let set = PatchSet::build(&config.load_samples()?, &config.pipeline)?;
            set.save(&common.out, config.phantom.classes())?;
            log::info!("wrote {} patches to {}", set.patches.len(), common.out.display());
        }
        Command::Train { common, mode, checkpoint, domains, patches } => {
            let config = resolve(common.config.as_deref(), common.seed)?;
            prepare(&config, &common.out)?;
            let set = patch_set(&config, patches.as_deref())?;
            let train = set.select(Partition::Train, &domains);
            let val = set.select(Partition::Validation, &domains);
            let mut trainer = match checkpoint {
                Some(path) => {
                    let mut t = Trainer::from_checkpoint(&ModelCheckpoint::load(&path)?)?;
                    t.set_total_epochs(config.train.total_epochs);
                    t
                }
                None => {
                    let loss: ResolvedLoss = config.loss.resolve(&class_counts(&train, config.networks.segmenter.classes))?;
                    Trainer::new(mode, config.train.clone(), config.networks.clone(), loss)?
                }
            };
            let result = trainer.fit(&train, &val);
            trainer.checkpoint().save(&common.out.join("checkpoint.mvol"))?;
            std::fs::write(common.out.join("metrics.ndjson"), metrics_ndjson(trainer.log())?)?;
            if let Err(e) = &result {
                let report = ErrorReport { error: e.to_string(), epoch: trainer.epoch(), mode: trainer.mode().name() };
                write_json(&common.out.join("error.json"), &report)?;
            }
            result?;
        }
        Command::Evaluate { common, checkpoint, split, domains, patches } => {
            let config = resolve(common.config.as_deref(), common.seed)?;
            prepare(&config, &common.out)?;
            let ckpt = ModelCheckpoint::load(&checkpoint)?;
            let g = if ckpt.has_generator() { Some(ckpt.generator()?) } else { None };
            let s = ckpt.segmenter()?;
            let set = patch_set(&config, patches.as_deref())?;
            let selected = set.select(split, &domains);
            let (dice, dice_empty) = evaluate_patches(g.as_ref(), &s, &selected)?;
            let mut seen: Vec<usize> = selected.iter().map(|p| p.domain).collect();
            seen.sort_unstable();
            seen.dedup();
            let mut per_domain = Vec::new();
            for &d in &seen {
                let part: Vec<_> = selected.iter().filter(|p| p.domain == d).cloned().collect();
                let (dd, _) = evaluate_patches(g.as_ref(), &s, &part)?;
                per_domain.push(DomainDice { domain: d, patches: part.len(), mean_dice: mean(&dd), dice: dd });
            }
            if let Some(g) = &g {
                for h in normalization_histograms(0, g, &selected, s.classes(), config.eval.histogram_bins)? {
                    std::fs::write(common.out.join(format!("histograms_domain{}.csv", h.domain)), h.to_csv())?;
                }
            }
            let report = Evaluation {
                checkpoint,
                mode: ckpt.mode(),
                epoch: ckpt.epoch(),
                split,
                domains: seen,
                patches: selected.len(),
                mean_dice: mean(&dice),
                dice,
                dice_empty,
                per_domain,
            };
            write_json(&common.out.join("evaluation.json"), &report)?;
            println!("mean Dice {:.4} over {} {} patches", report.mean_dice, report.patches, split.name());
        }
        Command::Normalize { common, checkpoint, input, mask } => {
            let config = resolve(common.config.as_deref(), common.seed)?;
            prepare(&config, &common.out)?;
            let g = ModelCheckpoint::load(&checkpoint)?.generator()?;
            let mut volume = load_volume(&input)?;
            if let Some(m) = mask {
                volume = advnorm_core::pipeline::skull_strip(&volume, &load_mask(&m)?)?;
            }
            let out = normalize_volume(&g, &volume, config.pipeline.patch_size, config.pipeline.stride)?;
            let name = input.file_name().map_or_else(|| "normalized.mvol".into(), |n| n.to_os_string());
            save_volume(&out, &common.out.join(name))?;
        }
        Command::Report { rundir, out, config } => {
            let out = out.unwrap_or_else(|| rundir.clone());
            let config = resolve(config.as_deref(), None)?;
            prepare(&config, &out)?;
            let reports = eval::load_reports(&rundir)?;
            let table = eval::render_table(&reports);
            std::fs::write(out.join("table.txt"), &table)?;
            std::fs::write(out.join("table.csv"), eval::table_csv(&reports))?;
            std::fs::write(out.join("deltas.csv"), eval::deltas_csv(&eval::pairwise_deltas(&reports)))?;
            print!("{table}");
        }
        Command::Matrix { common } => {
            let config = resolve(common.config.as_deref(), common.seed)?;
            prepare(&config, &common.out)?;
            let result = eval::run_experiment_matrix(&config, &config.load_samples()?, Some(&common.out))?;
            print!("{}", eval::render_table(&result.reports));
        }
    }
    Ok(())
}

fn init_threads() -> Result<()> {
    let Ok(v) = std::env::var("ADVNORM_THREADS") else { return Ok(()) };
    let n: usize = v
        .trim()
        .parse()
        .ok()
        .filter(|&n| n >= 1)
        .ok_or_else(|| Error::Validation(format!("ADVNORM_THREADS must be a positive integer, got {v:?}")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| Error::Validation(e.to_string()))
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match init_threads().and_then(|()| run(cli.command)) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_validation() { 1 } else { 2 })
        }
    }
}

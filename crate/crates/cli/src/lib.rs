//! Command-line front end: argument parsing, manifest I/O and the commands.

pub mod commands;
pub mod manifest;

use std::path::PathBuf;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use qamask_core::pc::{DEFAULT_BANK_CAPACITY, DEFAULT_TUTOR_TAU};
use qamask_core::synth::{OverlapPolicy, ShapeFamily};
use qamask_core::QamConfig;
use serde::Serialize;

use commands::{Preset, VerifyPlan};

/// Environment variable giving the default output directory.
pub const OUT_DIR_ENV: &str = "QAMASK_OUT_DIR";

#[derive(Debug, Parser)]
#[command(name = "qamask", version, about = "Quality-aware pseudo masks from box annotations")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic scene with candidates.
    Synth(SynthArgs),
    /// Rank, gate and fuse candidates into pseudo masks.
    Fuse(FuseArgs),
    /// Recompute the quality score of stored pseudo masks.
    Score(ScoreArgs),
    /// Quality-weighted Dice loss of student masks.
    Loss(LossArgs),
    /// Copy-paste augmentation from a memory bank of scored scenes.
    Augment(AugmentArgs),
    /// Monte Carlo checks of the fusion and quality-score bounds.
    Verify(VerifyArgs),
    /// Compare the NMS baseline with box-quality ranking.
    CompareBpma(CompareArgs),
    /// Write PGM/PPM views of a scene.
    Render(RenderArgs),
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum PresetArg {
    Fragments,
    Random,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum ShapeArg {
    Ellipse,
    Rectangle,
    Capsule,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum PolicyArg {
    Disjoint,
    AllowOverlap,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long, value_enum, default_value = "random")]
    pub preset: PresetArg,
    /// Output directory (default: $QAMASK_OUT_DIR).
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Required for the random preset.
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, default_value_t = 64)]
    pub height: usize,
    #[arg(long, default_value_t = 64)]
    pub width: usize,
    #[arg(long, default_value_t = 3)]
    pub channels: usize,
    #[arg(long, default_value_t = 3)]
    pub instances: usize,
    #[arg(long, value_enum, default_value = "ellipse")]
    pub shape: ShapeArg,
    #[arg(long, value_enum, default_value = "disjoint")]
    pub policy: PolicyArg,
    #[arg(long, default_value_t = 10.0)]
    pub min_size: f64,
    #[arg(long, default_value_t = 24.0)]
    pub max_size: f64,
    /// Candidates per instance.
    #[arg(long, default_value_t = 10)]
    pub k: usize,
    #[arg(long, default_value_t = 0.2)]
    pub sigma_mask: f64,
    #[arg(long, default_value_t = 0.1)]
    pub box_jitter: f64,
    #[arg(long, default_value_t = 0.1)]
    pub score_noise: f64,
}

#[derive(Debug, Clone, Args)]
pub struct QamArgs {
    #[arg(long, default_value_t = 0.5)]
    pub tau_m: f64,
    #[arg(long, default_value_t = 2)]
    pub k_min: usize,
    #[arg(long, default_value_t = 10)]
    pub k_max: usize,
    #[arg(long, default_value_t = 1024.0)]
    pub area_small: f64,
    #[arg(long, default_value_t = 9216.0)]
    pub area_large: f64,
    /// Use `--k` candidates for every instance.
    #[arg(long)]
    pub no_adaptive_k: bool,
    #[arg(long, default_value_t = 10)]
    pub k: usize,
}

impl QamArgs {
    pub fn config(&self) -> QamConfig {
        QamConfig {
            tau_m: self.tau_m,
            k_min: self.k_min,
            k_max: self.k_max,
            area_small: self.area_small,
            area_large: self.area_large,
            adaptive_k: !self.no_adaptive_k,
            k_fixed: self.k,
        }
    }
}

#[derive(Debug, Args)]
pub struct FuseArgs {
    /// Manifest file or its directory.
    #[arg(long)]
    pub manifest: PathBuf,
    /// Output directory (default: the manifest's directory).
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[command(flatten)]
    pub qam: QamArgs,
}

#[derive(Debug, Args)]
pub struct ScoreArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long, default_value_t = 0.5)]
    pub tau_m: f64,
}

#[derive(Debug, Args)]
pub struct LossArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    /// Raw f32 student mask, one per pseudo-labelled instance, in order.
    #[arg(long = "student", required = true)]
    pub students: Vec<PathBuf>,
}

#[derive(Debug, Args)]
pub struct AugmentArgs {
    /// Scene to augment.
    #[arg(long)]
    pub manifest: PathBuf,
    /// Directory of scored scenes feeding the memory bank.
    #[arg(long)]
    pub bank_dir: PathBuf,
    #[arg(long)]
    pub seed: u64,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long, default_value_t = DEFAULT_BANK_CAPACITY)]
    pub capacity: usize,
    #[arg(long, default_value_t = DEFAULT_TUTOR_TAU)]
    pub tau: f64,
}

#[derive(Debug, Args)]
pub struct VerifyArgs {
    /// Smaller grid and fewer trials.
    #[arg(long)]
    pub quick: bool,
    /// CSV output path.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Candidate mask noise sd for the fusion checks.
    #[arg(long, default_value_t = 0.2)]
    pub sigma_mask: f64,
}

#[derive(Debug, Args)]
pub struct CompareArgs {
    #[arg(long, conflicts_with = "sweep", required_unless_present = "sweep")]
    pub manifest: Option<PathBuf>,
    /// Number of random scenes for a sweep instead of a manifest.
    #[arg(long)]
    pub sweep: Option<usize>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 0.2)]
    pub sigma_mask: f64,
    #[command(flatten)]
    pub qam: QamArgs,
}

#[derive(Debug, Args)]
pub struct RenderArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

/// Text to print and whether every check passed.
#[derive(Debug, Clone, PartialEq)]
pub struct Outcome {
    pub stdout: String,
    pub passed: bool,
}

impl Outcome {
    fn json<T: Serialize>(value: &T) -> Result<Self> {
        Ok(Self {
            stdout: serde_json::to_string_pretty(value)? + "\n",
            passed: true,
        })
    }
}

fn out_dir(arg: Option<PathBuf>) -> Result<PathBuf> {
    match arg.or_else(|| std::env::var_os(OUT_DIR_ENV).map(PathBuf::from)) {
        Some(p) => Ok(p),
        None => bail!("no output directory: pass --out or set {OUT_DIR_ENV}"),
    }
}

fn manifest_dir(manifest: &std::path::Path) -> PathBuf {
    let path = manifest::manifest_path(manifest);
    path.parent()
        .map(|p| p.to_path_buf())
        .unwrap_or_else(|| PathBuf::from("."))
}

pub fn run(cli: Cli) -> Result<Outcome> {
    match cli.command {
        Command::Synth(a) => {
            let preset = match a.preset {
                PresetArg::Fragments => Preset::Fragments,
                PresetArg::Random => Preset::Random,
            };
            let seed = match (preset, a.seed) {
                (Preset::Random, None) => bail!("--seed is required for the random preset"),
                (_, s) => s.unwrap_or(0),
            };
            let mut opts = commands::default_synth_options(seed);
            opts.scene.height = a.height;
            opts.scene.width = a.width;
            opts.scene.channels = a.channels;
            opts.scene.instance_count = a.instances;
            opts.scene.shape = match a.shape {
                ShapeArg::Ellipse => ShapeFamily::Ellipse,
                ShapeArg::Rectangle => ShapeFamily::Rectangle,
                ShapeArg::Capsule => ShapeFamily::Capsule,
            };
            opts.scene.overlap = match a.policy {
                PolicyArg::Disjoint => OverlapPolicy::Disjoint,
                PolicyArg::AllowOverlap => OverlapPolicy::AllowOverlap,
            };
            opts.scene.width_range = (a.min_size, a.max_size);
            opts.scene.height_range = (a.min_size, a.max_size);
            opts.candidates.k = a.k;
            opts.candidates.sigma_mask = a.sigma_mask;
            opts.candidates.box_jitter = a.box_jitter;
            opts.candidates.score_noise = a.score_noise;
            let out = out_dir(a.out)?;
            Outcome::json(&commands::synth(preset, &opts, &out)?)
        }
        Command::Fuse(a) => {
            let out = a.out.unwrap_or_else(|| manifest_dir(&a.manifest));
            Outcome::json(&commands::fuse(&a.manifest, &out, &a.qam.config())?)
        }
        Command::Score(a) => Outcome::json(&commands::score(&a.manifest, a.tau_m)?),
        Command::Loss(a) => Outcome::json(&commands::loss(&a.manifest, &a.students)?),
        Command::Augment(a) => {
            let out = out_dir(a.out)?;
            let report = commands::augment_scene(&a.manifest, &a.bank_dir, &out, a.seed, a.capacity, a.tau)?;
            Outcome::json(&report)
        }
        Command::Verify(a) => {
            let mut plan = if a.quick {
                VerifyPlan::quick()
            } else {
                VerifyPlan::full()
            };
            plan.qmf_sigma_mask = a.sigma_mask;
            let report = commands::verify(&plan, a.seed)?;
            let csv = report.to_csv();
            if let Some(path) = &a.out {
                std::fs::write(path, &csv).with_context(|| format!("writing {}", path.display()))?;
            }
            let failed = report.rows.iter().filter(|r| !r.pass).count();
            let summary = serde_json::json!({
                "pass": report.pass,
                "rows": report.rows.len(),
                "failed": failed,
            });
            let stdout = if a.out.is_some() {
                serde_json::to_string_pretty(&summary)? + "\n"
            } else {
                csv
            };
            Ok(Outcome {
                stdout,
                passed: report.pass,
            })
        }
        Command::CompareBpma(a) => {
            let cfg = a.qam.config();
            cfg.validate()?;
            match (a.manifest, a.sweep) {
                (Some(m), _) => {
                    let rows = commands::compare_manifest(&m, &cfg)?;
                    Ok(Outcome {
                        stdout: commands::bpma_table(&rows),
                        passed: true,
                    })
                }
                (None, Some(n)) => {
                    let sweep = commands::bpma_sweep(n, a.seed, a.sigma_mask, &cfg)?;
                    let passed = sweep.pass;
                    Ok(Outcome {
                        passed,
                        ..Outcome::json(&sweep)?
                    })
                }
                (None, None) => bail!("pass --manifest or --sweep"),
            }
        }
        Command::Render(a) => {
            let out = a.out.unwrap_or_else(|| manifest_dir(&a.manifest).join("render"));
            Outcome::json(&commands::render(&a.manifest, &out)?)
        }
    }
}

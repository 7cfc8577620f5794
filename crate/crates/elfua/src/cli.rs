//! Command-line entry points: `gen-synth`, `train`, `eval`, `ablate`.
//!
//! Configuration precedence is CLI flag > `ELFUA_SEED` (seed only) >
//! config file > built-in defaults. Every run writes a `run_manifest.json`
//! next to its outputs with the fully resolved configuration, the seed,
//! and the artifact paths.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use crate::adapt::{evaluate_protocol, render_table, EvalMode};
use crate::data::{load_manifest, LoadOptions, ManifestKind, PersonTaskset, SourceDataset};
use crate::engine::{train, train_baseline, TrainConfig};
use crate::network::BackboneDepth;
use crate::synthworld::{generate_world, SynthWorldConfig};
use crate::checkpoint;

#[derive(Parser)]
#[command(
    name = "elfua",
    version,
    about = "Label-free user adaptation for gaze estimation"
)]
pub struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic world of persons with gaze bias and appearance shift
    GenSynth(GenSynthArgs),
    /// Meta-train on labeled source data plus unlabeled person-specific data
    Train(TrainArgs),
    /// Evaluate a checkpoint over a labeled person-specific manifest
    Eval(EvalArgs),
    /// Sweep G / K / gamma / meta-batch over a synthetic world
    Ablate(AblateArgs),
}

#[derive(Args)]
struct GenSynthArgs {
    /// Output directory for manifests and images
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 40)]
    train_persons: usize,
    #[arg(long, default_value_t = 20)]
    test_persons: usize,
    #[arg(long, default_value_t = 40)]
    samples_per_person: usize,
    #[arg(long, default_value_t = 32)]
    image_size: usize,
    /// Per-component gaze bias magnitude in radians
    #[arg(long, default_value_t = 0.25)]
    bias_scale: f64,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args, Clone)]
struct ConfigOverrides {
    /// TOML config file; flags override its values
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    beta: Option<f64>,
    #[arg(long)]
    gamma: Option<f64>,
    /// Inner gradient steps G
    #[arg(long)]
    inner_steps: Option<usize>,
    /// Support-set size K
    #[arg(long)]
    shots: Option<usize>,
    #[arg(long)]
    query_size: Option<usize>,
    /// Tasks per outer step
    #[arg(long)]
    meta_batch: Option<usize>,
    #[arg(long)]
    source_batch: Option<usize>,
    /// Total outer steps
    #[arg(long)]
    steps: Option<usize>,
    /// Propagate meta gradients through the inner updates
    #[arg(long)]
    second_order: bool,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    jobs: Option<usize>,
    /// Checkpoint every N outer steps (0 = final only)
    #[arg(long)]
    ckpt_every: Option<usize>,
    /// Backbone depth: tiny | full
    #[arg(long)]
    backbone: Option<String>,
    #[arg(long)]
    image_size: Option<usize>,
    /// Permutation vocabulary size M
    #[arg(long)]
    m: Option<usize>,
    /// Warm-start parameters from an existing checkpoint
    #[arg(long)]
    init_from: Option<PathBuf>,
    /// Auxiliary pretext-loss weight for baseline (joint) training
    #[arg(long)]
    pretext_weight: Option<f64>,
}

impl ConfigOverrides {
    fn resolve(&self) -> anyhow::Result<TrainConfig> {
        let mut cfg = match &self.config {
            Some(path) => {
                let text = fs::read_to_string(path)
                    .with_context(|| format!("reading config {}", path.display()))?;
                toml::from_str::<TrainConfig>(&text)
                    .with_context(|| format!("parsing config {}", path.display()))?
            }
            None => TrainConfig::default(),
        };
        if let Ok(env_seed) = std::env::var("ELFUA_SEED") {
            cfg.seed = env_seed
                .parse()
                .context("ELFUA_SEED must be an unsigned integer")?;
        }
        if let Some(v) = self.alpha {
            cfg.alpha = v;
        }
        if let Some(v) = self.beta {
            cfg.beta = v;
        }
        if let Some(v) = self.gamma {
            cfg.gamma = v;
        }
        if let Some(v) = self.inner_steps {
            cfg.inner_steps = v;
        }
        if let Some(v) = self.shots {
            cfg.shots = v;
        }
        if let Some(v) = self.query_size {
            cfg.query_size = v;
        }
        if let Some(v) = self.meta_batch {
            cfg.meta_batch = v;
        }
        if let Some(v) = self.source_batch {
            cfg.source_batch = v;
        }
        if let Some(v) = self.steps {
            cfg.total_outer_steps = v;
        }
        if self.second_order {
            cfg.second_order = true;
        }
        if let Some(v) = self.seed {
            cfg.seed = v;
        }
        if let Some(v) = self.jobs {
            cfg.jobs = v;
        }
        if let Some(v) = self.ckpt_every {
            cfg.checkpoint_every = v;
        }
        if let Some(b) = &self.backbone {
            cfg.model.backbone = match b.as_str() {
                "tiny" => BackboneDepth::Tiny,
                "full" => BackboneDepth::Full,
                other => bail!("unknown backbone {other:?} (expected tiny | full)"),
            };
        }
        if let Some(v) = self.image_size {
            cfg.model.image_size = v;
        }
        if let Some(v) = self.m {
            cfg.model.m = v;
        }
        if let Some(p) = &self.init_from {
            cfg.init_from = Some(p.clone());
        }
        if let Some(w) = self.pretext_weight {
            cfg.pretext_weight = w;
        }
        Ok(cfg)
    }
}

#[derive(Args)]
struct TrainArgs {
    /// Labeled source manifest (JSON lines)
    #[arg(long)]
    source: PathBuf,
    /// Unlabeled person-specific manifest (JSON lines)
    #[arg(long, required_unless_present = "baseline")]
    persons: Option<PathBuf>,
    /// Output directory for checkpoints and logs
    #[arg(long)]
    out: PathBuf,
    /// Train the source-only supervised baseline instead
    #[arg(long)]
    baseline: bool,
    #[command(flatten)]
    overrides: ConfigOverrides,
}

#[derive(Args)]
struct EvalArgs {
    /// Checkpoint file
    #[arg(long)]
    ckpt: PathBuf,
    /// Labeled person-specific manifest
    #[arg(long)]
    persons: PathBuf,
    /// Protocol mode, repeatable: ours | no-adapt | oracle
    #[arg(long = "mode", required = true)]
    modes: Vec<String>,
    /// Output directory for reports
    #[arg(long)]
    out: PathBuf,
    /// Support images per person (defaults to the trained K)
    #[arg(long)]
    support_size: Option<usize>,
    /// Average each person over this many independent support draws
    #[arg(long, default_value_t = 1)]
    support_draws: usize,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    jobs: Option<usize>,
}

#[derive(Args)]
struct AblateArgs {
    #[arg(long)]
    source: PathBuf,
    /// Unlabeled person-specific manifest for meta-training
    #[arg(long)]
    persons: PathBuf,
    /// Labeled person-specific manifest for evaluation
    #[arg(long)]
    test_persons: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Comma-separated G values
    #[arg(long, value_delimiter = ',')]
    sweep_g: Option<Vec<usize>>,
    /// Comma-separated K values
    #[arg(long, value_delimiter = ',')]
    sweep_k: Option<Vec<usize>>,
    /// Comma-separated gamma values
    #[arg(long, value_delimiter = ',')]
    sweep_gamma: Option<Vec<f64>>,
    /// Comma-separated meta-batch sizes
    #[arg(long, value_delimiter = ',')]
    sweep_meta_batch: Option<Vec<usize>>,
    #[command(flatten)]
    overrides: ConfigOverrides,
}

#[derive(Serialize)]
struct RunManifest {
    command: String,
    config: serde_json::Value,
    seed: u64,
    inputs: Vec<String>,
    artifacts: Vec<String>,
    started_unix: u64,
    finished_unix: u64,
}

fn unix_now() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0)
}

fn write_run_manifest(
    dir: &Path,
    command: &str,
    config: serde_json::Value,
    seed: u64,
    inputs: &[&Path],
    artifacts: &[PathBuf],
    started: u64,
) -> anyhow::Result<()> {
    let manifest = RunManifest {
        command: command.to_string(),
        config,
        seed,
        inputs: inputs.iter().map(|p| p.display().to_string()).collect(),
        artifacts: artifacts
            .iter()
            .map(|p| p.display().to_string())
            .collect(),
        started_unix: started,
        finished_unix: unix_now(),
    };
    fs::create_dir_all(dir)?;
    fs::write(
        dir.join("run_manifest.json"),
        serde_json::to_string_pretty(&manifest)?,
    )?;
    Ok(())
}

fn load_source(path: &Path, image_size: usize) -> anyhow::Result<SourceDataset> {
    let opts = LoadOptions {
        image_size,
        ..LoadOptions::default()
    };
    Ok(load_manifest(path, ManifestKind::Source, &opts)?.into_source()?)
}

fn load_persons(path: &Path, image_size: usize, oracle: bool) -> anyhow::Result<PersonTaskset> {
    let opts = LoadOptions {
        image_size,
        oracle_mode: oracle,
        ..LoadOptions::default()
    };
    Ok(load_manifest(path, ManifestKind::PersonSpecific, &opts)?.into_persons()?)
}

fn configure_threads(jobs: usize) {
    if jobs > 1 {
        let _ = rayon::ThreadPoolBuilder::new()
            .num_threads(jobs)
            .build_global();
    }
}

fn cmd_gen_synth(args: GenSynthArgs) -> anyhow::Result<()> {
    let started = unix_now();
    let mut seed_v = args.seed.unwrap_or(0);
    if args.seed.is_none() {
        if let Ok(env_seed) = std::env::var("ELFUA_SEED") {
            seed_v = env_seed.parse().context("ELFUA_SEED must be an unsigned integer")?;
        }
    }
    let cfg = SynthWorldConfig {
        n_train_persons: args.train_persons,
        n_test_persons: args.test_persons,
        samples_per_person: args.samples_per_person,
        image_size: args.image_size,
        bias_scale: args.bias_scale,
        seed: seed_v,
    };
    let paths = generate_world(&cfg, &args.out)?;
    println!("source manifest:        {}", paths.source_manifest.display());
    println!("person manifest:        {}", paths.train_manifest.display());
    println!("labeled test manifest:  {}", paths.test_manifest.display());
    write_run_manifest(
        &args.out,
        "gen-synth",
        serde_json::json!({
            "train_persons": cfg.n_train_persons,
            "test_persons": cfg.n_test_persons,
            "samples_per_person": cfg.samples_per_person,
            "image_size": cfg.image_size,
            "bias_scale": cfg.bias_scale,
        }),
        cfg.seed,
        &[],
        &[paths.source_manifest, paths.train_manifest, paths.test_manifest],
        started,
    )
}

fn cmd_train(args: TrainArgs) -> anyhow::Result<()> {
    let started = unix_now();
    let cfg = args.overrides.resolve()?;
    cfg.validate()?;
    configure_threads(cfg.jobs);

    let source = load_source(&args.source, cfg.model.image_size)?;
    if args.baseline {
        train_baseline(&source, &cfg, &args.out)?;
    } else {
        let persons_path = args.persons.as_ref().expect("clap enforces --persons");
        let persons = load_persons(persons_path, cfg.model.image_size, false)?;
        train(&source, &persons, &cfg, &args.out)?;
    }
    let ckpt = args.out.join("checkpoint_final.json");
    println!("final checkpoint: {}", ckpt.display());
    let mut inputs: Vec<&Path> = vec![&args.source];
    if let Some(p) = &args.persons {
        inputs.push(p);
    }
    write_run_manifest(
        &args.out,
        if args.baseline { "train --baseline" } else { "train" },
        serde_json::to_value(&cfg)?,
        cfg.seed,
        &inputs,
        &[ckpt, args.out.join("metrics.csv"), args.out.join("train_log.jsonl")],
        started,
    )
}

fn cmd_eval(args: EvalArgs) -> anyhow::Result<()> {
    let started = unix_now();
    let modes: Vec<EvalMode> = args
        .modes
        .iter()
        .map(|m| EvalMode::parse(m))
        .collect::<Result<_, _>>()?;

    let (state, train_cfg, ckpt_seed) = checkpoint::load(&args.ckpt)?;
    let mut cfg = train_cfg.unwrap_or_else(|| TrainConfig {
        model: state.config.clone(),
        ..TrainConfig::default()
    });
    cfg.model = state.config.clone();
    if let Ok(env_seed) = std::env::var("ELFUA_SEED") {
        cfg.seed = env_seed.parse().context("ELFUA_SEED must be an unsigned integer")?;
    } else if args.seed.is_none() {
        cfg.seed = ckpt_seed;
    }
    if let Some(s) = args.seed {
        cfg.seed = s;
    }
    if let Some(k) = args.support_size {
        cfg.shots = k;
    }
    if let Some(j) = args.jobs {
        cfg.jobs = j;
    }
    configure_threads(cfg.jobs);

    let persons = load_persons(&args.persons, cfg.model.image_size, true)?;
    fs::create_dir_all(&args.out)?;
    let mut artifacts = Vec::new();
    for mode in modes {
        let report = evaluate_protocol(&state, &persons, &cfg, mode, args.support_draws)?;
        print!("{}", render_table(&report));
        println!(
            "mean angular error: pre {:.3} deg, post {:.3} deg\n",
            report.mean_pre_deg, report.mean_post_deg
        );
        let path = args.out.join(format!("report_{}.json", mode.name()));
        fs::write(&path, serde_json::to_string_pretty(&report)?)?;
        let table_path = args.out.join(format!("report_{}.txt", mode.name()));
        fs::write(&table_path, render_table(&report))?;
        artifacts.push(path);
        artifacts.push(table_path);
    }
    write_run_manifest(
        &args.out,
        "eval",
        serde_json::to_value(&cfg)?,
        cfg.seed,
        &[&args.ckpt, &args.persons],
        &artifacts,
        started,
    )
}

fn cmd_ablate(args: AblateArgs) -> anyhow::Result<()> {
    let started = unix_now();
    let base = args.overrides.resolve()?;
    configure_threads(base.jobs);
    let g_values = args.sweep_g.clone().unwrap_or_else(|| vec![base.inner_steps]);
    let k_values = args.sweep_k.clone().unwrap_or_else(|| vec![base.shots]);
    let gamma_values = args.sweep_gamma.clone().unwrap_or_else(|| vec![base.gamma]);
    let nb_values = args
        .sweep_meta_batch
        .clone()
        .unwrap_or_else(|| vec![base.meta_batch]);

    let source = load_source(&args.source, base.model.image_size)?;
    let persons = load_persons(&args.persons, base.model.image_size, false)?;
    let test_persons = load_persons(&args.test_persons, base.model.image_size, true)?;

    fs::create_dir_all(&args.out)?;
    let csv_path = args.out.join("ablation.csv");
    let mut csv = String::from("g,k,gamma,meta_batch,mean_pre_deg,mean_post_deg\n");
    let mut table = format!(
        "{:>4} {:>4} {:>8} {:>6} {:>14} {:>14}\n",
        "G", "K", "gamma", "n", "pre (deg)", "post (deg)"
    );

    for &g in &g_values {
        for &k in &k_values {
            for &gamma in &gamma_values {
                for &nb in &nb_values {
                    let mut cfg = base.clone();
                    cfg.inner_steps = g;
                    cfg.shots = k;
                    cfg.gamma = gamma;
                    cfg.meta_batch = nb;
                    cfg.validate()?;
                    let run_dir = args
                        .out
                        .join(format!("run_g{g}_k{k}_gamma{gamma}_n{nb}"));
                    let state = train(&source, &persons, &cfg, &run_dir)?;
                    let report =
                        evaluate_protocol(&state, &test_persons, &cfg, EvalMode::Ours, 1)?;
                    csv.push_str(&format!(
                        "{g},{k},{gamma},{nb},{},{}\n",
                        report.mean_pre_deg, report.mean_post_deg
                    ));
                    table.push_str(&format!(
                        "{:>4} {:>4} {:>8} {:>6} {:>14.3} {:>14.3}\n",
                        g, k, gamma, nb, report.mean_pre_deg, report.mean_post_deg
                    ));
                }
            }
        }
    }
    fs::write(&csv_path, &csv)?;
    let table_path = args.out.join("ablation.txt");
    fs::write(&table_path, &table)?;
    print!("{table}");
    write_run_manifest(
        &args.out,
        "ablate",
        serde_json::to_value(&base)?,
        base.seed,
        &[&args.source, &args.persons, &args.test_persons],
        &[csv_path, table_path],
        started,
    )
}

/// Parse arguments and dispatch. Usage errors exit 2 (clap's default);
/// runtime failures surface as `Err` and exit 1 in `main`.
pub fn run() -> anyhow::Result<()> {
    let cli = Cli::parse();
    match cli.command {
        Command::GenSynth(args) => cmd_gen_synth(args),
        Command::Train(args) => cmd_train(args),
        Command::Eval(args) => cmd_eval(args),
        Command::Ablate(args) => cmd_ablate(args),
    }
}

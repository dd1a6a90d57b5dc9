mod config;
mod manifest;

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use trajmoe::eval::{
    acc_at_k, collect_trace, evaluate_checkpoint, gate_stats, predictions, run_experiment, write_reports, CellReport,
    ExperimentConfig, ShareSource,
};
use trajmoe::synth::{generate, load_city_dataset, load_dataset, preprocess, save_dataset, CityDataset};
use trajmoe::{finetune, pretrain, AblationVariant, Checkpoint, CitySplit, ExperimentKind, GateTrace};

use config::RunConfig;
use manifest::{create_run_dir, now, RunManifest};

#[derive(Debug, Parser)]
#[command(name = "trajmoe", version, about = "Cross-city next-location prediction")]
struct Cli {
    /// Seed for every random choice in the run; overrides the config file.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// TOML config file. Flags override its values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Root under which each run gets its own directory.
    #[arg(long, global = true, env = "TRAJMOE_OUT", default_value = "runs")]
    out: PathBuf,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum SourceArg {
    Final,
    TimeGate,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic multi-city dataset.
    GenData {
        /// Number of cities.
        #[arg(long)]
        cities: Option<usize>,
        #[arg(long)]
        locations: Option<usize>,
        #[arg(long)]
        users: Option<usize>,
        #[arg(long)]
        noise: Option<f64>,
    },
    /// Pretrain one model on several cities.
    Pretrain {
        #[arg(long)]
        data: PathBuf,
        /// City ids to train on; all cities in the dataset if omitted.
        #[arg(long, value_delimiter = ',')]
        cities: Vec<usize>,
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Fine-tune a checkpoint on part of one city's training split.
    Finetune {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Target city id.
        #[arg(long)]
        cities: usize,
        #[arg(long)]
        fraction: Option<f64>,
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Evaluate a checkpoint on each city's test split.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_delimiter = ',')]
        cities: Vec<usize>,
        /// Extra cutoffs written to acc_at_k.csv.
        #[arg(long, value_delimiter = ',')]
        k: Vec<usize>,
    },
    /// Train and evaluate ablation variants.
    Ablate {
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_delimiter = ',')]
        cities: Vec<usize>,
        /// Variants to run; all six if omitted.
        #[arg(long, value_delimiter = ',', value_parser = parse_variant)]
        variant: Vec<AblationVariant>,
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Export per-slot gate shares and per-layer weight summaries.
    GateStats {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_delimiter = ',')]
        cities: Vec<usize>,
        /// Weights that decide the top-1 stream per slot.
        #[arg(long, value_enum, default_value = "final")]
        source: SourceArg,
    },
    /// Run an experiment grid: overall, scaling, fewshot or ablation.
    Experiment {
        #[arg(value_parser = parse_kind)]
        kind: ExperimentKind,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_delimiter = ',')]
        cities: Vec<usize>,
        #[arg(long)]
        epochs: Option<usize>,
        /// Fine-tune fraction for the scaling grid.
        #[arg(long)]
        fraction: Option<f64>,
        #[arg(long, value_delimiter = ',', value_parser = parse_variant)]
        variant: Vec<AblationVariant>,
        /// Grid cells run concurrently.
        #[arg(long, default_value_t = 1)]
        jobs: usize,
    },
}

fn parse_variant(s: &str) -> Result<AblationVariant, String> {
    s.parse().map_err(|e: trajmoe::Error| e.to_string())
}

fn parse_kind(s: &str) -> Result<ExperimentKind, String> {
    s.parse().map_err(|e: trajmoe::Error| e.to_string())
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::GenData { .. } => "gen-data",
            Command::Pretrain { .. } => "pretrain",
            Command::Finetune { .. } => "finetune",
            Command::Eval { .. } => "eval",
            Command::Ablate { .. } => "ablate",
            Command::GateStats { .. } => "gate-stats",
            Command::Experiment { .. } => "experiment",
        }
    }

    fn inputs(&self) -> Vec<PathBuf> {
        match self {
            Command::GenData { .. } => vec![],
            Command::Pretrain { data, .. } | Command::Ablate { data, .. } | Command::Experiment { data, .. } => {
                vec![data.clone()]
            }
            Command::Finetune { checkpoint, data, .. }
            | Command::Eval { checkpoint, data, .. }
            | Command::GateStats { checkpoint, data, .. } => vec![checkpoint.clone(), data.clone()],
        }
    }

    fn apply_overrides(&self, cfg: &mut RunConfig) {
        match *self {
            Command::GenData {
                cities,
                locations,
                users,
                noise,
            } => {
                let g = &mut cfg.generator;
                if let Some(v) = cities {
                    g.cities = v;
                }
                if let Some(v) = locations {
                    g.locations = v;
                }
                if let Some(v) = users {
                    g.users = v;
                }
                if let Some(v) = noise {
                    g.noise = v;
                }
            }
            Command::Pretrain { epochs, .. } | Command::Ablate { epochs, .. } => {
                if let Some(e) = epochs {
                    cfg.train.max_epochs = e;
                }
            }
            Command::Finetune { fraction, epochs, .. } => {
                if let Some(f) = fraction {
                    cfg.finetune.fraction = f;
                }
                if let Some(e) = epochs {
                    cfg.finetune.epochs = e;
                }
            }
            Command::Experiment {
                epochs,
                fraction,
                ref variant,
                ..
            } => {
                if let Some(e) = epochs {
                    cfg.train.max_epochs = e;
                }
                if let Some(f) = fraction {
                    cfg.experiment.finetune_fraction = f;
                }
                if !variant.is_empty() {
                    cfg.experiment.variants = variant.clone();
                }
            }
            Command::Eval { .. } | Command::GateStats { .. } => {}
        }
    }
}

fn load_splits(data: &Path, cities: &[usize], cfg: &RunConfig) -> Result<Vec<CitySplit>> {
    let sets = if cities.is_empty() {
        load_dataset(data).with_context(|| format!("loading dataset {}", data.display()))?
    } else {
        cities
            .iter()
            .map(|&id| load_city_dataset(data, id))
            .collect::<trajmoe::Result<Vec<_>>>()
            .with_context(|| format!("loading dataset {}", data.display()))?
    };
    sets.into_iter()
        .map(|d| {
            let trajectories = preprocess(&d.trajectories, &cfg.preprocess);
            let id = d.city.id;
            CitySplit::new(
                CityDataset {
                    city: d.city,
                    trajectories,
                },
                cfg.seed,
            )
            .with_context(|| format!("splitting city {id}"))
        })
        .collect()
}

fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    Checkpoint::load(path).with_context(|| format!("loading checkpoint {}", path.display()))
}

/// Splits the grid of `cfg` into at most `jobs` smaller grids. Cells only
/// depend on the config, so the concatenated results match one sequential
/// run.
fn partition(kind: ExperimentKind, cfg: &ExperimentConfig, jobs: usize) -> Vec<ExperimentConfig> {
    fn chunks<T: Clone>(v: &[T], jobs: usize) -> Vec<Vec<T>> {
        if v.is_empty() {
            return vec![vec![]];
        }
        let size = v.len().div_ceil(jobs.max(1));
        v.chunks(size).map(|c| c.to_vec()).collect()
    }
    match kind {
        ExperimentKind::Overall => vec![cfg.clone()],
        ExperimentKind::Ablation => chunks(&cfg.variants, jobs)
            .into_iter()
            .map(|variants| ExperimentConfig {
                variants,
                ..cfg.clone()
            })
            .collect(),
        ExperimentKind::Scaling => chunks(&cfg.scaling_volumes, jobs)
            .into_iter()
            .map(|scaling_volumes| ExperimentConfig {
                scaling_volumes,
                ..cfg.clone()
            })
            .collect(),
        ExperimentKind::Fewshot => chunks(&cfg.fewshot_fractions, jobs)
            .into_iter()
            .map(|fewshot_fractions| ExperimentConfig {
                fewshot_fractions,
                ..cfg.clone()
            })
            .collect(),
    }
}

fn run_grid(kind: ExperimentKind, cfg: &ExperimentConfig, data: &[CitySplit], jobs: usize) -> Result<Vec<CellReport>> {
    let parts = partition(kind, cfg, jobs);
    if parts.len() == 1 {
        return Ok(run_experiment(kind, &parts[0], data)?);
    }
    let results: Vec<trajmoe::Result<Vec<CellReport>>> = std::thread::scope(|s| {
        let handles: Vec<_> = parts
            .iter()
            .map(|p| s.spawn(move || run_experiment(kind, p, data)))
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("experiment worker panicked"))
            .collect()
    });
    let mut out = Vec::new();
    for r in results {
        out.extend(r?);
    }
    Ok(out)
}

fn print_reports(reports: &[CellReport]) {
    print!("{}", trajmoe::eval::reports_csv(reports));
}

/// Does the work of one subcommand inside `dir`; returns artifact paths
/// relative to it.
fn execute(cmd: &Command, cfg: &RunConfig, dir: &Path) -> Result<Vec<PathBuf>> {
    match cmd {
        Command::GenData { .. } => {
            let data = generate(&cfg.generator)?;
            save_dataset(&dir.join("data"), &data)?;
            println!("{}", dir.join("data").display());
            Ok(vec!["data".into()])
        }
        Command::Pretrain { data, cities, .. } => {
            let splits = load_splits(data, cities, cfg)?;
            let ck = pretrain(&splits, &cfg.train)?;
            ck.save(&dir.join("checkpoint.json"))?;
            println!(
                "epochs {} best {:?} val_loss {:?}",
                ck.meta.epochs_run, ck.meta.best_epoch, ck.meta.val_loss
            );
            Ok(vec!["checkpoint.json".into()])
        }
        Command::Finetune {
            checkpoint,
            data,
            cities,
            ..
        } => {
            let ck = load_checkpoint(checkpoint)?;
            let split = load_splits(data, &[*cities], cfg)?.remove(0);
            let tuned = finetune(&ck, &split, cfg.finetune.fraction, cfg.finetune.epochs, &cfg.train)?;
            tuned.save(&dir.join("checkpoint.json"))?;
            println!("steps {} train_loss {:?}", tuned.meta.steps, tuned.meta.train_loss);
            Ok(vec!["checkpoint.json".into()])
        }
        Command::Eval {
            checkpoint,
            data,
            cities,
            k,
        } => {
            let ck = load_checkpoint(checkpoint)?;
            let splits = load_splits(data, cities, cfg)?;
            let mut reports = Vec::new();
            let mut extra = String::from("city_id,k,acc\n");
            let model = if k.is_empty() { None } else { Some(ck.model::<f64>()?) };
            for s in &splits {
                reports.push(CellReport {
                    cell: format!("eval/city{}", s.city.id),
                    train_trajectories: s.train.len(),
                    report: evaluate_checkpoint(&ck, &s.city, &s.test)?,
                });
                if let Some(m) = &model {
                    let (ranked, truths) = predictions(m, &s.city, &s.test, ck.config.batch_size)?;
                    for &kk in k {
                        if kk == 0 || kk > s.city.len() {
                            bail!("--k {kk} outside 1..={} for city {}", s.city.len(), s.city.id);
                        }
                        writeln!(extra, "{},{kk},{}", s.city.id, acc_at_k(&ranked, &truths, kk)?)?;
                    }
                }
            }
            write_reports(dir, &reports)?;
            print_reports(&reports);
            let mut arts: Vec<PathBuf> = vec!["reports.csv".into(), "summary.json".into()];
            if model.is_some() {
                fs::write(dir.join("acc_at_k.csv"), extra)?;
                arts.push("acc_at_k.csv".into());
            }
            Ok(arts)
        }
        Command::Ablate { data, cities, variant, .. } => {
            let splits = load_splits(data, cities, cfg)?;
            let mut exp = cfg.experiment.clone();
            if !variant.is_empty() {
                exp.variants = variant.clone();
            }
            let reports = run_experiment(ExperimentKind::Ablation, &exp, &splits)?;
            write_reports(dir, &reports)?;
            print_reports(&reports);
            Ok(vec!["reports.csv".into(), "summary.json".into()])
        }
        Command::GateStats {
            checkpoint,
            data,
            cities,
            source,
        } => {
            let ck = load_checkpoint(checkpoint)?;
            let model = ck.model::<f64>()?;
            let splits = load_splits(data, cities, cfg)?;
            let mut trace = GateTrace {
                layers: model.config.layers,
                records: Vec::new(),
            };
            for s in &splits {
                trace.extend(collect_trace(&model, &s.city, &s.test, ck.config.batch_size)?);
            }
            let source = match source {
                SourceArg::Final => ShareSource::Final,
                SourceArg::TimeGate => ShareSource::TimeGate,
            };
            let stats = gate_stats(&trace, source);
            stats.write(dir)?;
            println!(
                "{} positions, {} slot rows, {} summaries",
                trace.records.len(),
                stats.slot_shares.len(),
                stats.weight_summaries.len()
            );
            Ok(vec!["gate_slot_shares.csv".into(), "gate_weight_summary.csv".into()])
        }
        Command::Experiment {
            kind, data, cities, jobs, ..
        } => {
            let splits = load_splits(data, cities, cfg)?;
            let reports = run_grid(*kind, &cfg.experiment, &splits, *jobs)?;
            write_reports(dir, &reports)?;
            print_reports(&reports);
            Ok(vec!["reports.csv".into(), "summary.json".into()])
        }
    }
}

fn run(cli: Cli, argv: Vec<String>) -> Result<()> {
    let (mut cfg, contents) = RunConfig::load(cli.config.as_deref())?;
    cli.command.apply_overrides(&mut cfg);
    match cli.seed {
        Some(seed) => cfg.set_seed(seed),
        None => cfg.sync(),
    }
    let dir = create_run_dir(&cli.out, cfg.seed)?;
    eprintln!("run directory {}", dir.display());
    let mut manifest = RunManifest {
        command_line: argv,
        subcommand: cli.command.name().into(),
        config_path: cli.config.clone(),
        config_contents: contents,
        resolved_config: cfg.to_toml()?,
        seed: cfg.seed,
        inputs: cli.command.inputs(),
        artifacts: Vec::new(),
        tool_version: env!("CARGO_PKG_VERSION").into(),
        started: now(),
        finished: None,
        status: None,
    };
    manifest.write(&dir)?;
    let result = execute(&cli.command, &cfg, &dir);
    manifest.finished = Some(now());
    match &result {
        Ok(arts) => {
            manifest.artifacts = arts.clone();
            manifest.status = Some("ok".into());
        }
        Err(e) => manifest.status = Some(format!("error: {e:#}")),
    }
    manifest.write(&dir)?;
    result.map(|_| ())
}

fn main() -> ExitCode {
    let argv: Vec<String> = std::env::args().collect();
    let cli = match Cli::try_parse_from(&argv) {
        Ok(c) => c,
        Err(e) => e.exit(),
    };
    match run(cli, argv) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}

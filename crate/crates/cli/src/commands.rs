//! Subcommand definitions. Every flag that has a config counterpart is
//! applied as an override of that key, after the config file and `--set`.

use std::path::{Path, PathBuf};

use bcva_core::helpgate::heatmap_csv;
use bcva_core::net::ModelPolicy;
use bcva_core::{Dataset, DistanceMetric, LabeledDataset, TrainMode};
use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::aggregate::{loop_report, run_loop};
use crate::config::RunConfig;
use crate::error::{CliError, Result};
use crate::fsio;
use crate::pipeline::{
    demo_dataset, evaluate, fit, labeling_ref, loss_csv, merge, noisy_expert, rollout_dataset, run_experiment, split,
    EvalRow, Method,
};
use crate::report::{collect, report_csv, report_table};

#[derive(Debug, Parser)]
#[command(name = "bcva", version, about = "Door-task data generation, value-aware training and ask-for-help evaluation")]
pub struct Cli {
    /// Flat `key = value` config file.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Config override, `key=value`; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    pub set: Vec<String>,
    /// More log output (-v info, -vv debug).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    pub verbose: u8,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct Output {
    /// Overwrite existing outputs.
    #[arg(long)]
    pub force: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SplitArg {
    Train,
    Validation,
    All,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ModeArg {
    Bcva,
    Classifier,
    Policy,
}

impl From<ModeArg> for TrainMode {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::Bcva => TrainMode::Bcva,
            ModeArg::Classifier => TrainMode::Classifier,
            ModeArg::Policy => TrainMode::Policy,
        }
    }
}

fn parse_metric(s: &str) -> std::result::Result<DistanceMetric, String> {
    match s {
        "time" | "pixel" | "movement" => s.parse().map_err(|e| format!("{e}")),
        _ => Err(format!("unknown metric `{s}`; expected time, pixel or movement")),
    }
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Record noiseless expert demonstrations.
    GenDemos {
        #[arg(long)]
        count: Option<u64>,
        /// First world seed.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[command(flatten)]
        output: Output,
    },
    /// Record rollouts of the noisy expert, or of a trained policy.
    GenRollouts {
        #[arg(long)]
        count: Option<u64>,
        #[arg(long)]
        seed: Option<u64>,
        /// Drive the world with this checkpoint instead of the noisy expert.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[command(flatten)]
        output: Output,
    },
    /// Attach discounted returns to one or more datasets.
    Label {
        /// Input datasets, merged in order. Defaults to the demo and rollout paths.
        #[arg(long = "input")]
        inputs: Vec<PathBuf>,
        #[arg(long, value_parser = parse_metric)]
        metric: Option<DistanceMetric>,
        #[arg(long)]
        gamma: Option<f64>,
        /// Keep only this side of the episode split before labeling.
        #[arg(long, value_enum, default_value = "all")]
        split: SplitArg,
        /// Reuse the distance statistics recorded in this labeled dataset.
        #[arg(long)]
        stats_from: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[command(flatten)]
        output: Output,
    },
    /// Train a model; the loss curve goes to `<out>.loss.csv`.
    Train {
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "bcva")]
        mode: ModeArg,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[command(flatten)]
        output: Output,
    },
    /// Sweep the gate grid on a dataset and write the heatmap.
    Sweep {
        #[command(flatten)]
        eval: EvalArgs,
        /// Heatmap file; defaults to `<eval_dir>/<method>.heatmap.csv`.
        #[arg(long)]
        out: Option<PathBuf>,
        #[command(flatten)]
        output: Output,
    },
    /// Sweep and write the method's heatmap and best-cell row into a directory.
    Eval {
        #[command(flatten)]
        eval: EvalArgs,
        #[arg(long)]
        out: Option<PathBuf>,
        #[command(flatten)]
        output: Output,
    },
    /// Run or resume the dataset-aggregation loop.
    Loop {
        /// Initial demonstrations.
        #[arg(long)]
        demos: Option<PathBuf>,
        #[arg(long)]
        generations: Option<u32>,
        /// First world seed of the loop's rollouts.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[command(flatten)]
        output: Output,
    },
    /// Combine per-method eval rows into one comparison table.
    Report {
        #[arg(long)]
        dir: Option<PathBuf>,
        #[command(flatten)]
        output: Output,
    },
    /// Generate, split, train and evaluate all four methods for one seed.
    Experiment {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: Option<PathBuf>,
        #[command(flatten)]
        output: Output,
    },
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Dataset to evaluate on; defaults to the rollout path.
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "validation")]
    pub split: SplitArg,
}

fn quoted(p: &Path) -> String {
    serde_json::to_string(&p.to_string_lossy()).expect("string serializes")
}

struct Overrides(Vec<String>);

impl Overrides {
    fn num<T: ToString>(&mut self, key: &str, v: Option<T>) -> &mut Self {
        if let Some(v) = v {
            self.0.push(format!("{key}={}", v.to_string()));
        }
        self
    }

    fn path(&mut self, key: &str, v: &Option<PathBuf>) -> &mut Self {
        if let Some(p) = v {
            self.0.push(format!("{key}={}", quoted(p)));
        }
        self
    }
}

impl Command {
    fn overrides(&self) -> Vec<String> {
        let mut o = Overrides(Vec::new());
        match self {
            Command::GenDemos { count, seed, out, .. } => {
                o.num("data.demos", *count).num("data.demo_seed", *seed).path("paths.demos", out);
            }
            Command::GenRollouts { count, seed, out, .. } => {
                o.num("data.rollouts", *count)
                    .num("data.rollout_seed", *seed)
                    .path("paths.rollouts", out);
            }
            Command::Label { metric, gamma, out, .. } => {
                o.num("returns.metric", metric.map(|m| format!("\"{}\"", m.name())))
                    .num("returns.gamma", *gamma)
                    .path("paths.labeled", out);
            }
            Command::Train { data, seed, out, .. } => {
                o.path("paths.labeled", data).num("train.seed", *seed).path("paths.checkpoint", out);
            }
            Command::Sweep { eval, .. } => {
                o.path("paths.checkpoint", &eval.checkpoint).path("paths.rollouts", &eval.data);
            }
            Command::Eval { eval, out, .. } => {
                o.path("paths.checkpoint", &eval.checkpoint)
                    .path("paths.rollouts", &eval.data)
                    .path("paths.eval_dir", out);
            }
            Command::Loop {
                demos,
                generations,
                seed,
                out,
                ..
            } => {
                o.path("paths.demos", demos)
                    .num("loop.generations", *generations)
                    .num("loop.seed", *seed)
                    .path("paths.run_dir", out);
            }
            Command::Report { dir, .. } | Command::Experiment { out: dir, .. } => {
                o.path("paths.eval_dir", dir);
            }
        }
        o.0
    }
}

/// Loads the config from the global options and the command's flags, then
/// runs the command.
pub fn run(cli: &Cli) -> Result<()> {
    let mut overrides = cli.set.clone();
    overrides.extend(cli.command.overrides());
    let cfg = RunConfig::load(cli.config.as_deref(), &overrides)?;
    execute(&cfg, &cli.command)
}

fn pick(data: Dataset, side: SplitArg, cfg: &RunConfig) -> Result<Dataset> {
    if side == SplitArg::All {
        return Ok(data);
    }
    let (train, validation) = split(cfg, &data)?;
    Ok(if side == SplitArg::Train { train } else { validation })
}

fn load_eval_inputs(cfg: &RunConfig, side: SplitArg) -> Result<(bcva_core::Model, Method, Dataset)> {
    let (model, header) = fsio::load_model(&cfg.paths.checkpoint)?;
    let method = Method::from_header(&header).ok_or_else(|| {
        CliError::Model(format!(
            "{}: a policy-only checkpoint has no gate signal",
            cfg.paths.checkpoint.display()
        ))
    })?;
    let data = pick(fsio::load_dataset(&cfg.paths.rollouts)?, side, cfg)?;
    Ok((model, method, data))
}

pub fn execute(cfg: &RunConfig, command: &Command) -> Result<()> {
    let p = &cfg.paths;
    match command {
        Command::GenDemos { output, .. } => {
            fsio::check_free(&p.demos, output.force)?;
            let d = demo_dataset(cfg, cfg.data.demos, cfg.data.demo_seed, "demo")?;
            fsio::save_dataset(&p.demos, output.force, &d)?;
            println!("wrote {} demonstrations to {}", d.trajectories.len(), p.demos.display());
        }
        Command::GenRollouts { checkpoint, output, .. } => {
            fsio::check_free(&p.rollouts, output.force)?;
            let (count, seed) = (cfg.data.rollouts, cfg.data.rollout_seed);
            let d = match checkpoint {
                Some(path) => {
                    let (model, _) = fsio::load_model(path)?;
                    if model.input().observation != cfg.observation {
                        return Err(CliError::Data(format!(
                            "{}: observation spec differs from the config",
                            path.display()
                        )));
                    }
                    let id = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
                    rollout_dataset(cfg, &mut ModelPolicy::new(&model, id), count, seed, "rollout", None)?
                }
                None => rollout_dataset(cfg, &mut noisy_expert(cfg)?, count, seed, "rollout", None)?,
            };
            fsio::save_dataset(&p.rollouts, output.force, &d)?;
            let failed = d.trajectories.iter().filter(|t| t.outcome.is_failure()).count();
            println!(
                "wrote {} rollouts ({failed} failed) to {}",
                d.trajectories.len(),
                p.rollouts.display()
            );
        }
        Command::Label {
            inputs,
            split: side,
            stats_from,
            output,
            ..
        } => {
            fsio::check_free(&p.labeled, output.force)?;
            let inputs = if inputs.is_empty() {
                vec![p.demos.clone(), p.rollouts.clone()]
            } else {
                inputs.clone()
            };
            let parts = inputs.iter().map(|i| fsio::load_dataset(i)).collect::<Result<Vec<_>>>()?;
            let data = pick(merge(parts)?, *side, cfg)?;
            let frozen = match stats_from {
                Some(s) => Some(fsio::load_labeled(s)?.stats()),
                None => None,
            };
            let labeled = LabeledDataset::label(data, cfg.returns, frozen)?;
            fsio::save_labeled(&p.labeled, output.force, &labeled)?;
            println!(
                "labeled {} episodes with the {} metric into {}",
                labeled.dataset.trajectories.len(),
                cfg.returns.metric,
                p.labeled.display()
            );
        }
        Command::Train { mode, output, .. } => {
            let loss_path = sibling(&p.checkpoint, ".loss.csv");
            fsio::check_free(&p.checkpoint, output.force)?;
            fsio::check_free(&loss_path, output.force)?;
            let labeled = fsio::load_labeled(&p.labeled)?;
            let mode = TrainMode::from(*mode);
            let (model, report) = fit(cfg, &labeled, mode, cfg.train.seed)?;
            fsio::save_model(&p.checkpoint, output.force, &model, mode, labeling_ref(&labeled, mode))?;
            fsio::write_text(&loss_path, output.force, &loss_csv(&report))?;
            let last = report.curve.last().map(|r| r.total).unwrap_or(f64::NAN);
            println!(
                "trained for {} steps (final loss {last:.4}); wrote {}",
                report.steps,
                p.checkpoint.display()
            );
        }
        Command::Sweep { eval, out, output } => {
            let (model, method, data) = load_eval_inputs(cfg, eval.split)?;
            let path = out
                .clone()
                .unwrap_or_else(|| p.eval_dir.join(format!("{}.heatmap.csv", method.name())));
            fsio::check_free(&path, output.force)?;
            let result = evaluate(cfg, &model, &data, method.signal())?;
            fsio::write_text(&path, output.force, &heatmap_csv(&result))?;
            print!("{}", EvalRow::from_sweep(method.name(), &result).to_csv());
        }
        Command::Eval { eval, output, .. } => {
            let (model, method, data) = load_eval_inputs(cfg, eval.split)?;
            let heat = p.eval_dir.join(format!("{}.heatmap.csv", method.name()));
            let row_path = p.eval_dir.join(format!("{}.eval.csv", method.name()));
            fsio::check_free(&heat, output.force)?;
            fsio::check_free(&row_path, output.force)?;
            let result = evaluate(cfg, &model, &data, method.signal())?;
            let row = EvalRow::from_sweep(method.name(), &result).to_csv();
            fsio::write_text(&heat, output.force, &heatmap_csv(&result))?;
            fsio::write_text(&row_path, output.force, &row)?;
            print!("{row}");
        }
        Command::Loop { output, .. } => {
            let summary = run_loop(cfg, &p.demos, &p.run_dir, output.force)?;
            if summary.resumed_from as usize == summary.manifests.len() {
                println!("{} is already complete", p.run_dir.display());
            } else if summary.resumed_from > 0 {
                println!("resumed after generation {}", summary.resumed_from - 1);
            }
            print!("{}", loop_report(&summary.manifests));
        }
        Command::Report { output, .. } => write_report(&p.eval_dir, output.force)?,
        Command::Experiment { seed, output, .. } => {
            for m in Method::ALL {
                for ext in ["heatmap", "eval", "loss"] {
                    fsio::check_free(&p.eval_dir.join(format!("{}.{ext}.csv", m.name())), output.force)?;
                }
            }
            let e = run_experiment(cfg, *seed, &Method::ALL, Some((&p.eval_dir, output.force)))?;
            println!(
                "seed {}: {} rollouts, {:.1}% failed, {} validation episodes",
                e.seed,
                e.rollouts,
                100.0 * e.failure_fraction(),
                e.validation_episodes
            );
            write_report(&p.eval_dir, output.force)?;
        }
    }
    Ok(())
}

fn sibling(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

fn write_report(dir: &Path, force: bool) -> Result<()> {
    let rows = collect(dir)?;
    if rows.iter().all(|(_, r)| r.is_none()) {
        return Err(CliError::Data(format!("{}: no eval rows found", dir.display())));
    }
    let table = report_table(&rows);
    fsio::write_text(&dir.join("report.csv"), force, &report_csv(&rows))?;
    fsio::write_text(&dir.join("report.txt"), force, &table)?;
    print!("{table}");
    Ok(())
}

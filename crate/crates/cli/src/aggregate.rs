//! The dataset-aggregation loop with the scripted expert as operator.
//!
//! Generation 0 trains a policy-only model on an existing demonstration
//! dataset, which is copied into the run, and
//! collects two batches of fully supervised rollouts from it: one joins the
//! dataset, the other is held out as the fixed validation set.
//! Generations `1..=G` each train policy and value on the dataset, sweep the
//! gate on the validation set, roll out with the best gate active, and add
//! every rollout plus an expert demonstration for each help request. A final
//! generation `G + 1` trains and evaluates on the last dataset without
//! rolling out.
//!
//! Run directory layout:
//!
//! ```text
//! config.txt            resolved config; a resumed run must match it
//! state.json            number of completed generations
//! validation.jsonl      held-out rollouts, never trained on
//! report.csv            one row per evaluated generation
//! gen-000/              demos.jsonl rollouts.jsonl policy.ckpt loss.csv manifest.json
//! gen-001/ ...          model.ckpt loss.csv heatmap.csv eval.csv rollouts.jsonl help.jsonl manifest.json
//! ```
//!
//! Every file is written atomically and `state.json` last, so an interrupted
//! run resumes from the last completed generation.

use std::collections::HashSet;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use bcva_core::helpgate::heatmap_csv;
use bcva_core::net::ModelPolicy;
use bcva_core::{Dataset, GateConfig, LabeledDataset, Metrics, Outcome, ScriptedExpert, TrainMode};
use log::info;
use serde::{Deserialize, Serialize};

use crate::config::{RunConfig, LOOP_SEED_BLOCK};
use crate::error::{CliError, Result};
use crate::fsio;
use crate::pipeline::{
    best_gate, evaluate, fit, labeling_ref, loss_csv, merge, rollout_dataset, signal_for,
    EvalRow,
};

/// Offset between the seeds of repeated help demonstrations for one request.
const HELP_STRIDE: u64 = 100_000_000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GenerationKind {
    Bootstrap,
    Operational,
    Final,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct RolloutCounts {
    pub success: usize,
    pub failure: usize,
    pub asked_for_help: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GateChoice {
    pub epsilon: f64,
    pub nu: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub generation: u32,
    pub kind: GenerationKind,
    /// Episode ids of every trajectory the generation's model was trained on.
    pub trained_on: Vec<String>,
    /// Data files, relative to the run directory, this generation adds to the dataset.
    pub added_files: Vec<String>,
    pub gate: Option<GateChoice>,
    pub metrics: Option<Metrics>,
    pub rollouts: RolloutCounts,
    pub help_demos: usize,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
struct RunState {
    completed: u32,
}

fn gen_dir(run: &Path, g: u32) -> PathBuf {
    run.join(format!("gen-{g:03}"))
}

fn rel(g: u32, file: &str) -> String {
    format!("gen-{g:03}/{file}")
}

fn json_text<T: Serialize>(v: &T) -> String {
    let mut s = serde_json::to_string_pretty(v).expect("serializable");
    s.push('\n');
    s
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fsio::read_text(path)?;
    serde_json::from_str(&text).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))
}

pub fn read_manifest(run: &Path, g: u32) -> Result<Manifest> {
    read_json(&gen_dir(run, g).join("manifest.json"))
}

/// Outcome of [`run_loop`].
#[derive(Debug, Clone)]
pub struct LoopSummary {
    pub manifests: Vec<Manifest>,
    pub resumed_from: u32,
}

impl LoopSummary {
    /// Best gate F1 per evaluated generation, in order.
    pub fn f1_series(&self) -> Vec<Option<f64>> {
        self.manifests
            .iter()
            .filter(|m| m.kind != GenerationKind::Bootstrap)
            .map(|m| m.metrics.and_then(|x| x.f1))
            .collect()
    }
}

fn counts(d: &Dataset) -> RolloutCounts {
    let mut c = RolloutCounts::default();
    for t in &d.trajectories {
        match t.outcome {
            Outcome::Success => c.success += 1,
            Outcome::Failure(_) => c.failure += 1,
            Outcome::AskedForHelp => c.asked_for_help += 1,
        }
    }
    c
}

fn load_training_set(run: &Path, manifests: &[Manifest]) -> Result<Dataset> {
    let parts = manifests
        .iter()
        .flat_map(|m| m.added_files.iter())
        .map(|f| fsio::load_dataset(&run.join(f)))
        .collect::<Result<Vec<_>>>()?;
    merge(parts)
}

/// Runs (or resumes) the loop in `run`, starting from the demonstrations in
/// `demos`. A fresh run needs an empty or missing directory unless `force`
/// is set.
pub fn run_loop(cfg: &RunConfig, demos: &Path, run: &Path, force: bool) -> Result<LoopSummary> {
    let flat = cfg.to_flat();
    let state_path = run.join("state.json");
    let state: RunState = if state_path.exists() {
        let recorded = fsio::read_text(&run.join("config.txt"))?;
        if recorded != flat {
            return Err(CliError::Config(format!(
                "{} was started with a different config; use a new run directory",
                run.display()
            )));
        }
        read_json(&state_path)?
    } else {
        let occupied = run.exists()
            && std::fs::read_dir(run)
                .map_err(|e| CliError::io(run, e))?
                .next()
                .is_some();
        if occupied && !force {
            return Err(CliError::Exists(run.display().to_string()));
        }
        fsio::write_text(&run.join("config.txt"), true, &flat)?;
        RunState::default()
    };
    let last = cfg.loop_.generations + 1;
    let mut manifests = (0..state.completed)
        .map(|g| read_manifest(run, g))
        .collect::<Result<Vec<_>>>()?;
    let resumed_from = state.completed;
    for g in state.completed..=last {
        let m = if g == 0 {
            bootstrap(cfg, demos, run)?
        } else {
            operational(cfg, run, g, &manifests, g == last)?
        };
        fsio::write_text(&gen_dir(run, g).join("manifest.json"), true, &json_text(&m))?;
        manifests.push(m);
        fsio::write_text(&run.join("report.csv"), true, &loop_report(&manifests))?;
        fsio::write_text(&state_path, true, &json_text(&RunState { completed: g + 1 }))?;
    }
    audit(run)?;
    Ok(LoopSummary {
        manifests,
        resumed_from,
    })
}

fn bootstrap(cfg: &RunConfig, demo_path: &Path, run: &Path) -> Result<Manifest> {
    let dir = gen_dir(run, 0);
    let l = &cfg.loop_;
    let demos = fsio::load_dataset(demo_path)?;
    if demos.spec != cfg.observation {
        return Err(CliError::Data(format!(
            "{}: observation spec differs from the config",
            demo_path.display()
        )));
    }
    let labeled = LabeledDataset::label(demos.clone(), cfg.returns, None)?;
    let (model, report) = fit(cfg, &labeled, TrainMode::Policy, cfg.train.seed)?;
    fsio::save_model(&dir.join("policy.ckpt"), true, &model, TrainMode::Policy, None)?;
    fsio::write_text(&dir.join("loss.csv"), true, &loss_csv(&report))?;
    let mut policy = ModelPolicy::new(&model, "gen-0");
    let train = rollout_dataset(cfg, &mut policy, l.bootstrap_rollouts, l.seed, "g0-rollout", None)?;
    let validation = rollout_dataset(
        cfg,
        &mut policy,
        l.validation_rollouts,
        l.seed + l.bootstrap_rollouts,
        "g0-validation",
        None,
    )?;
    let c = counts(&train);
    info!(
        "generation 0: {} demos, {} rollouts ({} succeeded), {} held out ({} succeeded)",
        demos.trajectories.len(),
        train.trajectories.len(),
        c.success,
        validation.trajectories.len(),
        counts(&validation).success
    );
    fsio::save_dataset(&run.join("validation.jsonl"), true, &validation)?;
    fsio::save_dataset(&dir.join("demos.jsonl"), true, &demos)?;
    fsio::save_dataset(&dir.join("rollouts.jsonl"), true, &train)?;
    Ok(Manifest {
        generation: 0,
        kind: GenerationKind::Bootstrap,
        trained_on: demos.trajectories.iter().map(|t| t.episode_id.clone()).collect(),
        added_files: vec![rel(0, "demos.jsonl"), rel(0, "rollouts.jsonl")],
        gate: None,
        metrics: None,
        rollouts: c,
        help_demos: 0,
    })
}

fn operational(cfg: &RunConfig, run: &Path, g: u32, history: &[Manifest], last: bool) -> Result<Manifest> {
    let dir = gen_dir(run, g);
    let l = &cfg.loop_;
    let data = load_training_set(run, history)?;
    let validation = fsio::load_dataset(&run.join("validation.jsonl"))?;
    let labeled = LabeledDataset::label(data, cfg.returns, None)?;
    let (model, report) = fit(cfg, &labeled, TrainMode::Bcva, cfg.train.seed + u64::from(g))?;
    fsio::save_model(
        &dir.join("model.ckpt"),
        true,
        &model,
        TrainMode::Bcva,
        labeling_ref(&labeled, TrainMode::Bcva),
    )?;
    fsio::write_text(&dir.join("loss.csv"), true, &loss_csv(&report))?;
    let result = evaluate(cfg, &model, &validation, signal_for(TrainMode::Bcva))?;
    fsio::write_text(&dir.join("heatmap.csv"), true, &heatmap_csv(&result))?;
    fsio::write_text(
        &dir.join("eval.csv"),
        true,
        &EvalRow::from_sweep(&format!("generation-{g}"), &result).to_csv(),
    )?;
    let gate = best_gate(&result);
    let metrics = result.best_cell().map(|c| c.metrics);
    info!(
        "generation {g}: trained on {} episodes, gate {:?}, F1 {:?}",
        labeled.dataset.trajectories.len(),
        gate.map(|x| (x.epsilon, x.nu)),
        metrics.and_then(|m| m.f1)
    );
    let mut manifest = Manifest {
        generation: g,
        kind: if last { GenerationKind::Final } else { GenerationKind::Operational },
        trained_on: labeled.dataset.trajectories.iter().map(|t| t.episode_id.clone()).collect(),
        added_files: Vec::new(),
        gate: gate.map(|x| GateChoice {
            epsilon: x.epsilon,
            nu: x.nu,
        }),
        metrics,
        rollouts: RolloutCounts::default(),
        help_demos: 0,
    };
    if last {
        return Ok(manifest);
    }
    let mut policy = ModelPolicy::new(&model, format!("gen-{g}"));
    let first = l.seed + u64::from(g) * LOOP_SEED_BLOCK;
    let rollouts = rollout_dataset(
        cfg,
        &mut policy,
        l.rollouts_per_generation,
        first,
        &format!("g{g}-rollout"),
        gate.as_ref(),
    )?;
    let help = help_demos(cfg, g, &rollouts, gate.as_ref())?;
    manifest.rollouts = counts(&rollouts);
    manifest.help_demos = help.trajectories.len();
    fsio::save_dataset(&dir.join("rollouts.jsonl"), true, &rollouts)?;
    fsio::save_dataset(&dir.join("help.jsonl"), true, &help)?;
    manifest.added_files = vec![rel(g, "rollouts.jsonl"), rel(g, "help.jsonl")];
    Ok(manifest)
}

/// Expert demonstrations replayed from the initial world of every rollout
/// that asked for help. Extra demos per request use shifted seeds.
fn help_demos(cfg: &RunConfig, g: u32, rollouts: &Dataset, gate: Option<&GateConfig>) -> Result<Dataset> {
    let mut out = Dataset::new(cfg.observation);
    if gate.is_none() {
        return Ok(out);
    }
    let mut expert = ScriptedExpert::default();
    for t in rollouts.trajectories.iter().filter(|t| t.outcome == Outcome::AskedForHelp) {
        for j in 0..cfg.loop_.demos_per_help {
            let seed = t.seed + j * HELP_STRIDE;
            let d = rollout_dataset(cfg, &mut expert, 1, seed, &format!("g{g}-help-{j}"), None)?;
            out.extend(d.trajectories)?;
        }
    }
    Ok(out)
}

pub const LOOP_REPORT_HEADER: &str =
    "generation,kind,trained_episodes,epsilon,nu,precision,recall,f1,accuracy,rollout_success,rollout_failure,asked_for_help,help_demos";

fn opt<T: ToString>(v: Option<T>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

pub fn loop_report(manifests: &[Manifest]) -> String {
    let mut s = format!("{LOOP_REPORT_HEADER}\n");
    for m in manifests {
        let met = m.metrics;
        let kind = match m.kind {
            GenerationKind::Bootstrap => "bootstrap",
            GenerationKind::Operational => "operational",
            GenerationKind::Final => "final",
        };
        let _ = writeln!(
            s,
            "{},{kind},{},{},{},{},{},{},{},{},{},{},{}",
            m.generation,
            m.trained_on.len(),
            opt(m.gate.as_ref().map(|x| x.epsilon)),
            opt(m.gate.as_ref().map(|x| x.nu)),
            opt(met.and_then(|x| x.precision)),
            opt(met.and_then(|x| x.recall)),
            opt(met.and_then(|x| x.f1)),
            opt(met.and_then(|x| x.accuracy)),
            m.rollouts.success,
            m.rollouts.failure,
            m.rollouts.asked_for_help,
            m.help_demos,
        );
    }
    s
}

#[derive(Debug, Clone, PartialEq)]
pub struct AuditReport {
    pub generations: usize,
    pub validation_episodes: usize,
}

/// Checks that every generation trained on a superset of the previous
/// generation's data and that no validation episode was ever trained on.
pub fn audit(run: &Path) -> Result<AuditReport> {
    let state: RunState = read_json(&run.join("state.json"))?;
    let validation = fsio::load_dataset(&run.join("validation.jsonl"))?;
    let held: HashSet<&str> = validation.trajectories.iter().map(|t| t.episode_id.as_str()).collect();
    let mut prev: Option<HashSet<String>> = None;
    for g in 0..state.completed {
        let m = read_manifest(run, g)?;
        let cur: HashSet<String> = m.trained_on.iter().cloned().collect();
        if let Some(leak) = cur.iter().find(|id| held.contains(id.as_str())) {
            return Err(CliError::Audit(format!(
                "generation {g} trained on validation episode `{leak}`"
            )));
        }
        if let Some(p) = &prev {
            if let Some(lost) = p.iter().find(|id| !cur.contains(*id)) {
                return Err(CliError::Audit(format!(
                    "generation {g} dropped episode `{lost}` used by generation {}",
                    g - 1
                )));
            }
        }
        prev = Some(cur);
    }
    Ok(AuditReport {
        generations: state.completed as usize,
        validation_episodes: held.len(),
    })
}

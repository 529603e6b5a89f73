//! In-process building blocks shared by the subcommands, the loop and the
//! desk-scale experiment.

use std::fmt::Write as _;
use std::path::Path;
use std::time::Instant;

use bcva_core::doorsim::rollout;
use bcva_core::helpgate::{heatmap_csv, sweep, EpisodeTrace};
use bcva_core::net::{train, CheckpointHeader, LabelingRef, TrainData, TrainReport};
use bcva_core::trajlog::split_dataset;
use bcva_core::{
    ConfusionMatrix, Dataset, DistanceMetric, GateConfig, GateSignal, InputSpec, LabeledDataset, Metrics, Model,
    NoisyExpert, Policy, ReturnConfig, ScriptedExpert, SweepResult, TrainMode,
};
use log::info;

use crate::config::RunConfig;
use crate::error::{CliError, Result};
use crate::fsio;

/// The four ask-for-help methods compared in the report.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Method {
    BcvaTime,
    BcvaMovement,
    BcvaPixel,
    Classifier,
}

impl Method {
    pub const ALL: [Method; 4] = [Method::BcvaTime, Method::BcvaMovement, Method::BcvaPixel, Method::Classifier];

    pub fn name(self) -> &'static str {
        match self {
            Method::BcvaTime => "bcva-time",
            Method::BcvaMovement => "bcva-movement",
            Method::BcvaPixel => "bcva-pixel",
            Method::Classifier => "classifier",
        }
    }

    pub fn title(self) -> &'static str {
        match self {
            Method::BcvaTime => "BCVA-Time",
            Method::BcvaMovement => "BCVA-Movement",
            Method::BcvaPixel => "BCVA-Pixel",
            Method::Classifier => "Classifier",
        }
    }

    pub fn bcva(metric: DistanceMetric) -> Self {
        match metric {
            DistanceMetric::Time => Method::BcvaTime,
            DistanceMetric::Kinematic => Method::BcvaMovement,
            DistanceMetric::Pixel => Method::BcvaPixel,
        }
    }

    pub fn mode(self) -> TrainMode {
        match self {
            Method::Classifier => TrainMode::Classifier,
            _ => TrainMode::Bcva,
        }
    }

    /// Metric used to label the training set. The classifier ignores
    /// returns, so its set is labeled with the cheapest metric.
    pub fn metric(self) -> DistanceMetric {
        match self {
            Method::BcvaTime | Method::Classifier => DistanceMetric::Time,
            Method::BcvaMovement => DistanceMetric::Kinematic,
            Method::BcvaPixel => DistanceMetric::Pixel,
        }
    }

    pub fn signal(self) -> GateSignal {
        signal_for(self.mode())
    }

    pub fn from_header(h: &CheckpointHeader) -> Option<Self> {
        match (h.mode, h.labeling) {
            (TrainMode::Classifier, _) => Some(Method::Classifier),
            (TrainMode::Bcva, Some(l)) => Some(Method::bcva(l.return_config.metric)),
            _ => None,
        }
    }

    pub fn from_name(s: &str) -> Option<Self> {
        Method::ALL.into_iter().find(|m| m.name() == s)
    }
}

pub fn signal_for(mode: TrainMode) -> GateSignal {
    match mode {
        TrainMode::Classifier => GateSignal::ClassifierHead,
        _ => GateSignal::ValueHead,
    }
}

pub fn episode_id(prefix: &str, seed: u64) -> String {
    format!("{prefix}-{seed}")
}

pub fn demo_dataset(cfg: &RunConfig, count: u64, first_seed: u64, prefix: &str) -> Result<Dataset> {
    let mut expert = ScriptedExpert::default();
    rollout_dataset(cfg, &mut expert, count, first_seed, prefix, None)
}

pub fn noisy_expert(cfg: &RunConfig) -> Result<NoisyExpert> {
    Ok(NoisyExpert::new(cfg.expert)?)
}

pub fn rollout_dataset(
    cfg: &RunConfig,
    policy: &mut dyn Policy,
    count: u64,
    first_seed: u64,
    prefix: &str,
    gate: Option<&GateConfig>,
) -> Result<Dataset> {
    let trajectories = (0..count)
        .map(|i| {
            let seed = first_seed + i;
            rollout(policy, &cfg.world, &cfg.observation, seed, &episode_id(prefix, seed), gate)
        })
        .collect::<std::result::Result<Vec<_>, _>>()?;
    Ok(Dataset::from_trajectories(cfg.observation, trajectories)?)
}

/// Expert demonstrations always land in the training split.
pub fn split(cfg: &RunConfig, dataset: &Dataset) -> Result<(Dataset, Dataset)> {
    Ok(split_dataset(dataset, cfg.split.validation_fraction, cfg.split.salt, true)?)
}

pub fn merge(parts: impl IntoIterator<Item = Dataset>) -> Result<Dataset> {
    let mut it = parts.into_iter();
    let mut out = it
        .next()
        .ok_or_else(|| CliError::Usage("at least one dataset is required".into()))?;
    out.distance_stats = None;
    for d in it {
        if d.spec != out.spec {
            return Err(CliError::Data("datasets have different observation specs".into()));
        }
        out.extend(d.trajectories)?;
    }
    Ok(out)
}

pub fn return_config(cfg: &RunConfig, metric: DistanceMetric) -> ReturnConfig {
    ReturnConfig {
        metric,
        ..cfg.returns
    }
}

/// The door world reports a single wrist joint.
const WORLD_JOINTS: usize = 1;

pub fn input_spec(dataset: &Dataset) -> InputSpec {
    InputSpec {
        observation: dataset.spec,
        joints: dataset.joint_count().unwrap_or(WORLD_JOINTS),
    }
}

/// Model initialization draws from a stream derived from the training seed.
const INIT_STREAM: u64 = 0x1417_0000_0000_0000;

/// Trains a fresh model on `labeled` and returns it with its loss curve.
pub fn fit(cfg: &RunConfig, labeled: &LabeledDataset, mode: TrainMode, seed: u64) -> Result<(Model, TrainReport)> {
    let input = input_spec(&labeled.dataset);
    let mut model = Model::new(cfg.model.clone(), input, seed ^ INIT_STREAM)?;
    let tc = bcva_core::TrainConfig {
        mode,
        seed,
        ..cfg.train
    };
    let data = TrainData::from_labeled(labeled);
    let t = Instant::now();
    let report = train(&mut model, &data, &tc)?;
    info!(
        "trained {:?} for {} steps on {} episodes in {:.1?}",
        mode,
        report.steps,
        labeled.dataset.trajectories.len(),
        t.elapsed()
    );
    Ok((model, report))
}

pub fn labeling_ref(labeled: &LabeledDataset, mode: TrainMode) -> Option<LabelingRef> {
    (mode == TrainMode::Bcva).then(|| LabelingRef {
        return_config: labeled.config,
        distance_stats: labeled.stats(),
    })
}

/// Gate signal per frame for every episode with a known outcome.
pub fn traces(model: &Model, dataset: &Dataset, signal: GateSignal) -> Result<Vec<EpisodeTrace>> {
    dataset
        .trajectories
        .iter()
        .filter(|t| t.outcome.is_labeled())
        .map(|t| {
            let obs: Vec<_> = t.steps.iter().map(|s| &s.observation).collect();
            let preds = model.predict_batch(&obs)?;
            let values = preds
                .iter()
                .map(|p| match signal {
                    GateSignal::ValueHead => p.value,
                    GateSignal::ClassifierHead => p.failure_prob,
                })
                .collect();
            Ok(EpisodeTrace {
                values,
                failed: t.outcome.is_failure(),
            })
        })
        .collect()
}

pub fn grid_for(cfg: &RunConfig, signal: GateSignal) -> &[f64] {
    match signal {
        GateSignal::ValueHead => &cfg.gate.value_epsilons,
        GateSignal::ClassifierHead => &cfg.gate.classifier_thresholds,
    }
}

pub fn evaluate(cfg: &RunConfig, model: &Model, dataset: &Dataset, signal: GateSignal) -> Result<SweepResult> {
    if model.input().observation != dataset.spec {
        return Err(CliError::Data(
            "checkpoint and dataset observation specs differ".into(),
        ));
    }
    let tr = traces(model, dataset, signal)?;
    Ok(sweep(&tr, grid_for(cfg, signal), &cfg.gate.nus, signal)?)
}

pub fn best_gate(result: &SweepResult) -> Option<GateConfig> {
    result
        .best_cell()
        .and_then(|c| GateConfig::new(c.epsilon, c.nu, result.signal).ok())
}

pub const EVAL_HEADER: &str = "method,epsilon,nu,tp,fp,tn,fn,precision,recall,f1,accuracy,episodes";

/// The best sweep cell of one method. Without a best cell (no cell has a
/// defined F1) every cell field is absent.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalRow {
    pub method: String,
    pub best: Option<(f64, u32, ConfusionMatrix)>,
    pub metrics: Metrics,
    pub episodes: u64,
}

fn opt<T: ToString>(v: Option<T>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

impl EvalRow {
    pub fn from_sweep(method: &str, result: &SweepResult) -> Self {
        let cell = result.best_cell();
        Self {
            method: method.to_string(),
            best: cell.map(|c| (c.epsilon, c.nu, c.confusion)),
            metrics: cell.map(|c| c.metrics).unwrap_or(Metrics {
                precision: None,
                recall: None,
                f1: None,
                accuracy: None,
            }),
            episodes: result.cells.first().map(|c| c.confusion.total()).unwrap_or(0),
        }
    }

    pub fn to_csv(&self) -> String {
        let m = &self.metrics;
        let b = self.best;
        let count = |f: fn(&ConfusionMatrix) -> u64| opt(b.map(|(_, _, c)| f(&c)));
        format!(
            "{EVAL_HEADER}\n{},{},{},{},{},{},{},{},{},{},{},{}\n",
            self.method,
            opt(b.map(|x| x.0)),
            opt(b.map(|x| x.1)),
            count(|c| c.tp),
            count(|c| c.fp),
            count(|c| c.tn),
            count(|c| c.fn_),
            opt(m.precision),
            opt(m.recall),
            opt(m.f1),
            opt(m.accuracy),
            self.episodes,
        )
    }
}

pub fn loss_csv(report: &TrainReport) -> String {
    let mut s = String::from("epoch,total,bc,value,classifier,kl\n");
    for r in &report.curve {
        let _ = writeln!(
            s,
            "{},{},{},{},{},{}",
            r.epoch,
            r.total,
            r.bc,
            opt(r.value),
            opt(r.classifier),
            r.kl
        );
    }
    s
}

/// Offset between the world seeds of different experiment seeds.
pub const SEED_STRIDE: u64 = 100_000_000;

#[derive(Debug, Clone)]
pub struct MethodResult {
    pub method: Method,
    pub sweep: SweepResult,
    pub report: TrainReport,
}

impl MethodResult {
    pub fn best_f1(&self) -> Option<f64> {
        self.sweep.best_cell().and_then(|c| c.metrics.f1)
    }
}

#[derive(Debug, Clone)]
pub struct Experiment {
    pub seed: u64,
    pub rollouts: usize,
    pub failures: usize,
    pub validation_episodes: usize,
    pub validation_ids: Vec<String>,
    pub training_ids: Vec<String>,
    pub results: Vec<MethodResult>,
}

impl Experiment {
    pub fn failure_fraction(&self) -> f64 {
        self.failures as f64 / self.rollouts as f64
    }

    pub fn result(&self, m: Method) -> Option<&MethodResult> {
        self.results.iter().find(|r| r.method == m)
    }
}

/// Generates the door-task fixture for `seed`, splits the rollouts by
/// episode, trains each method on the training split plus every demo, and
/// sweeps its gate on the validation split. With `out`, writes each method's
/// heatmap, eval row and loss curve there.
pub fn run_experiment(cfg: &RunConfig, seed: u64, methods: &[Method], out: Option<(&Path, bool)>) -> Result<Experiment> {
    let t = Instant::now();
    let offset = seed * SEED_STRIDE;
    let demos = demo_dataset(cfg, cfg.data.demos, cfg.data.demo_seed + offset, "demo")?;
    let mut noisy = noisy_expert(cfg)?;
    let rollouts = rollout_dataset(cfg, &mut noisy, cfg.data.rollouts, cfg.data.rollout_seed + offset, "rollout", None)?;
    let failures = rollouts.trajectories.iter().filter(|t| t.outcome.is_failure()).count();
    info!(
        "seed {seed}: generated {} demos and {} rollouts ({failures} failures) in {:.1?}",
        demos.trajectories.len(),
        rollouts.trajectories.len(),
        t.elapsed()
    );
    let (roll_train, validation) = split(cfg, &rollouts)?;
    let training = merge([demos, roll_train])?;
    let mut results = Vec::new();
    for &m in methods {
        let labeled = LabeledDataset::label(training.clone(), return_config(cfg, m.metric()), None)?;
        let (model, report) = fit(cfg, &labeled, m.mode(), cfg.train.seed + seed)?;
        let result = evaluate(cfg, &model, &validation, m.signal())?;
        if let Some((dir, force)) = out {
            fsio::write_text(&dir.join(format!("{}.heatmap.csv", m.name())), force, &heatmap_csv(&result))?;
            fsio::write_text(
                &dir.join(format!("{}.eval.csv", m.name())),
                force,
                &EvalRow::from_sweep(m.name(), &result).to_csv(),
            )?;
            fsio::write_text(&dir.join(format!("{}.loss.csv", m.name())), force, &loss_csv(&report))?;
        }
        info!(
            "seed {seed}: {} best F1 {:?}",
            m.name(),
            result.best_cell().and_then(|c| c.metrics.f1)
        );
        results.push(MethodResult {
            method: m,
            sweep: result,
            report,
        });
    }
    Ok(Experiment {
        seed,
        rollouts: rollouts.trajectories.len(),
        failures,
        validation_episodes: validation.trajectories.len(),
        validation_ids: validation.trajectories.iter().map(|t| t.episode_id.clone()).collect(),
        training_ids: training.trajectories.iter().map(|t| t.episode_id.clone()).collect(),
        results,
    })
}

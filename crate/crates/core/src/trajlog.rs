//! Trajectory data model, the line-delimited dataset format, and the
//! episode-level train/validation split.
//!
//! A dataset file is UTF-8 text with one JSON record per line. The first line
//! is a header carrying the format id, version, [`ObservationSpec`], optional
//! [`DistanceStats`] and, for labeled files, the [`ReturnConfig`] used. Every
//! following line is one trajectory. Pixels are stored as 8-bit levels
//! (`value = level / 255`), so what is written is exactly what labeling and
//! training read back.

use std::collections::HashSet;
use std::fs::{File, OpenOptions};
use std::io::{self, BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::returns::{DistanceStats, LabeledDataset, ReturnConfig};

pub const FORMAT_ID: &str = "bcva-trajlog";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum TrajlogError {
    #[error("unlabeled outcome: AskedForHelp trajectories carry no terminal reward")]
    UnlabeledOutcome,
    #[error("invalid observation spec {0:?}: every dimension must be >= 1")]
    InvalidSpec(ObservationSpec),
    #[error("invalid trajectory `{episode_id}`: {reason}")]
    InvalidTrajectory { episode_id: String, reason: String },
    #[error("duplicate episode id `{0}`")]
    DuplicateEpisode(String),
    #[error("line {line}: field `{field}`: {message}")]
    Malformed {
        line: usize,
        field: String,
        message: String,
    },
    #[error("validation fraction must lie in (0, 1), got {0}")]
    InvalidFraction(f64),
    #[error(transparent)]
    Io(#[from] io::Error),
}

pub type Result<T> = std::result::Result<T, TrajlogError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ObservationSpec {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
}

impl ObservationSpec {
    pub fn new(width: usize, height: usize, channels: usize) -> Result<Self> {
        let spec = Self {
            width,
            height,
            channels,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.width == 0 || self.height == 0 || self.channels == 0 {
            return Err(TrajlogError::InvalidSpec(*self));
        }
        Ok(())
    }

    /// Number of pixel values in one frame.
    pub fn len(&self) -> usize {
        self.width * self.height * self.channels
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Flat index of `(x, y, c)`, row-major with interleaved channels.
    pub fn index(&self, x: usize, y: usize, c: usize) -> usize {
        (y * self.width + x) * self.channels + c
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BasePose {
    pub x: f64,
    pub y: f64,
    pub heading: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KinematicState {
    pub joint_angles: Vec<f64>,
    pub base_pose: BasePose,
}

impl KinematicState {
    fn is_finite(&self) -> bool {
        self.joint_angles.iter().all(|v| v.is_finite())
            && self.base_pose.x.is_finite()
            && self.base_pose.y.is_finite()
            && self.base_pose.heading.is_finite()
    }
}

/// One sensor frame. Pixels are held as 8-bit levels; [`Observation::pixel`]
/// returns the `[0, 1]` value.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Observation {
    pixels: Vec<u8>,
    pub kinematics: KinematicState,
}

/// Quantizes a `[0, 1]` intensity to an 8-bit level, clamping out-of-range input.
pub fn quantize(value: f64) -> u8 {
    if value.is_nan() {
        return 0;
    }
    (value.clamp(0.0, 1.0) * 255.0).round() as u8
}

impl Observation {
    pub fn from_levels(pixels: Vec<u8>, kinematics: KinematicState) -> Self {
        Self { pixels, kinematics }
    }

    /// Builds an observation from real intensities, clamping to `[0, 1]` and
    /// quantizing to 8 bits.
    pub fn from_values(values: &[f64], kinematics: KinematicState) -> Self {
        Self {
            pixels: values.iter().map(|&v| quantize(v)).collect(),
            kinematics,
        }
    }

    pub fn levels(&self) -> &[u8] {
        &self.pixels
    }

    pub fn pixel(&self, i: usize) -> f64 {
        f64::from(self.pixels[i]) / 255.0
    }

    pub fn pixel_values(&self) -> impl Iterator<Item = f64> + '_ {
        self.pixels.iter().map(|&p| f64::from(p) / 255.0)
    }

    pub fn pixel_count(&self) -> usize {
        self.pixels.len()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Action {
    pub base_forward: f64,
    pub base_turn: f64,
    pub wrist_rate: f64,
    pub terminate: f64,
}

impl Action {
    pub const DIM: usize = 4;

    pub fn to_array(&self) -> [f64; Self::DIM] {
        [
            self.base_forward,
            self.base_turn,
            self.wrist_rate,
            self.terminate,
        ]
    }

    pub fn from_slice(v: &[f64]) -> Self {
        Self {
            base_forward: v[0],
            base_turn: v[1],
            wrist_rate: v[2],
            terminate: v[3],
        }
    }

    fn is_valid(&self) -> bool {
        self.to_array().iter().all(|v| v.is_finite()) && (0.0..=1.0).contains(&self.terminate)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Step {
    pub index: u32,
    pub observation: Observation,
    pub action: Action,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum FailureMode {
    Collision,
    GraspMiss,
    Timeout,
    PushWhileLatched,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Outcome {
    Success,
    Failure(FailureMode),
    AskedForHelp,
}

impl Outcome {
    pub fn is_failure(&self) -> bool {
        matches!(self, Outcome::Failure(_))
    }

    /// Whether the outcome carries a success/failure label.
    pub fn is_labeled(&self) -> bool {
        !matches!(self, Outcome::AskedForHelp)
    }
}

/// Terminal reward: +1 for success, -1 for failure.
pub fn terminal_reward(outcome: Outcome) -> Result<f64> {
    match outcome {
        Outcome::Success => Ok(1.0),
        Outcome::Failure(_) => Ok(-1.0),
        Outcome::AskedForHelp => Err(TrajlogError::UnlabeledOutcome),
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Provenance {
    ExpertDemo,
    PolicyRollout { policy_id: String },
}

impl Provenance {
    pub fn is_expert(&self) -> bool {
        matches!(self, Provenance::ExpertDemo)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub episode_id: String,
    pub seed: u64,
    pub provenance: Provenance,
    pub steps: Vec<Step>,
    pub outcome: Outcome,
}

impl Trajectory {
    /// Constructs a trajectory and checks it against `spec`.
    pub fn new(
        episode_id: impl Into<String>,
        seed: u64,
        provenance: Provenance,
        steps: Vec<Step>,
        outcome: Outcome,
        spec: &ObservationSpec,
    ) -> Result<Self> {
        let t = Self {
            episode_id: episode_id.into(),
            seed,
            provenance,
            steps,
            outcome,
        };
        t.validate(spec)?;
        Ok(t)
    }

    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    pub fn validate(&self, spec: &ObservationSpec) -> Result<()> {
        let fail = |reason: String| TrajlogError::InvalidTrajectory {
            episode_id: self.episode_id.clone(),
            reason,
        };
        if self.steps.is_empty() {
            return Err(fail("trajectory has no steps".into()));
        }
        if self.provenance.is_expert() && self.outcome != Outcome::Success {
            return Err(fail(format!(
                "expert demonstration with non-success outcome {:?}",
                self.outcome
            )));
        }
        let joints = self.steps[0].observation.kinematics.joint_angles.len();
        let mut prev: Option<u32> = None;
        for step in &self.steps {
            if let Some(p) = prev {
                if step.index <= p {
                    return Err(fail(format!(
                        "step index {} does not increase after {}",
                        step.index, p
                    )));
                }
            }
            prev = Some(step.index);
            let obs = &step.observation;
            if obs.pixel_count() != spec.len() {
                return Err(fail(format!(
                    "step {}: {} pixels, spec requires {}",
                    step.index,
                    obs.pixel_count(),
                    spec.len()
                )));
            }
            if obs.kinematics.joint_angles.len() != joints {
                return Err(fail(format!(
                    "step {}: joint count {} differs from {}",
                    step.index,
                    obs.kinematics.joint_angles.len(),
                    joints
                )));
            }
            if !obs.kinematics.is_finite() {
                return Err(fail(format!("step {}: non-finite kinematics", step.index)));
            }
            if !step.action.is_valid() {
                return Err(fail(format!(
                    "step {}: invalid action {:?}",
                    step.index, step.action
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub spec: ObservationSpec,
    pub trajectories: Vec<Trajectory>,
    pub distance_stats: Option<DistanceStats>,
}

impl Dataset {
    pub fn new(spec: ObservationSpec) -> Self {
        Self {
            spec,
            trajectories: Vec::new(),
            distance_stats: None,
        }
    }

    /// Builds a dataset, validating every trajectory and id uniqueness.
    pub fn from_trajectories(spec: ObservationSpec, trajectories: Vec<Trajectory>) -> Result<Self> {
        let d = Self {
            spec,
            trajectories,
            distance_stats: None,
        };
        d.validate()?;
        Ok(d)
    }

    pub fn validate(&self) -> Result<()> {
        self.spec.validate()?;
        let mut seen = HashSet::with_capacity(self.trajectories.len());
        for t in &self.trajectories {
            t.validate(&self.spec)?;
            if !seen.insert(t.episode_id.as_str()) {
                return Err(TrajlogError::DuplicateEpisode(t.episode_id.clone()));
            }
        }
        Ok(())
    }

    pub fn contains(&self, episode_id: &str) -> bool {
        self.trajectories.iter().any(|t| t.episode_id == episode_id)
    }

    /// Appends trajectories, rejecting ids already present.
    pub fn extend(&mut self, trajectories: impl IntoIterator<Item = Trajectory>) -> Result<()> {
        let mut seen: HashSet<String> = self
            .trajectories
            .iter()
            .map(|t| t.episode_id.clone())
            .collect();
        for t in trajectories {
            t.validate(&self.spec)?;
            if !seen.insert(t.episode_id.clone()) {
                return Err(TrajlogError::DuplicateEpisode(t.episode_id));
            }
            self.trajectories.push(t);
        }
        Ok(())
    }

    pub fn step_count(&self) -> usize {
        self.trajectories.iter().map(Trajectory::len).sum()
    }

    pub fn joint_count(&self) -> Option<usize> {
        self.trajectories
            .first()
            .map(|t| t.steps[0].observation.kinematics.joint_angles.len())
    }
}

// ---------------------------------------------------------------------------
// Split

/// Position of an episode in `[0, 1)` derived from SHA-256 of
/// `"{episode_id}\x1f{salt}"`: the first 8 digest bytes as a big-endian u64,
/// top 53 bits divided by 2^53.
pub fn split_key(episode_id: &str, salt: u64) -> f64 {
    let mut h = Sha256::new();
    h.update(episode_id.as_bytes());
    h.update([0x1f]);
    h.update(salt.to_string().as_bytes());
    let digest = h.finalize();
    let mut b = [0u8; 8];
    b.copy_from_slice(&digest[..8]);
    let word = u64::from_be_bytes(b);
    (word >> 11) as f64 / (1u64 << 53) as f64
}

/// Whether each trajectory belongs to the validation split: `split_key < fraction`,
/// with expert demonstrations optionally pinned to train.
pub fn validation_mask(
    dataset: &Dataset,
    validation_fraction: f64,
    salt: u64,
    experts_in_train: bool,
) -> Result<Vec<bool>> {
    if !(validation_fraction > 0.0 && validation_fraction < 1.0) {
        return Err(TrajlogError::InvalidFraction(validation_fraction));
    }
    Ok(dataset
        .trajectories
        .iter()
        .map(|t| {
            if experts_in_train && t.provenance.is_expert() {
                false
            } else {
                split_key(&t.episode_id, salt) < validation_fraction
            }
        })
        .collect())
}

/// Splits by episode into `(train, validation)`. Membership depends only on
/// the episode id and salt, so episodes never migrate as the dataset grows.
pub fn split_dataset(
    dataset: &Dataset,
    validation_fraction: f64,
    salt: u64,
    experts_in_train: bool,
) -> Result<(Dataset, Dataset)> {
    let mask = validation_mask(dataset, validation_fraction, salt, experts_in_train)?;
    let mut train = Dataset::new(dataset.spec);
    let mut validation = Dataset::new(dataset.spec);
    train.distance_stats = dataset.distance_stats;
    validation.distance_stats = dataset.distance_stats;
    for (t, is_val) in dataset.trajectories.iter().zip(mask) {
        if is_val {
            validation.trajectories.push(t.clone());
        } else {
            train.trajectories.push(t.clone());
        }
    }
    Ok((train, validation))
}

// ---------------------------------------------------------------------------
// On-disk format

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Header {
    format: String,
    version: u32,
    spec: ObservationSpec,
    #[serde(default)]
    distance_stats: Option<DistanceStats>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    return_config: Option<ReturnConfig>,
}

#[derive(Serialize)]
struct StepOut<'a> {
    index: u32,
    observation: &'a Observation,
    action: &'a Action,
    #[serde(skip_serializing_if = "Option::is_none")]
    returns: Option<f64>,
}

#[derive(Serialize)]
struct TrajectoryOut<'a> {
    episode_id: &'a str,
    seed: u64,
    provenance: &'a Provenance,
    outcome: Outcome,
    steps: Vec<StepOut<'a>>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct StepIn {
    index: u32,
    observation: Observation,
    action: Action,
    #[serde(default)]
    returns: Option<f64>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct TrajectoryIn {
    episode_id: String,
    seed: u64,
    provenance: Provenance,
    outcome: Outcome,
    steps: Vec<StepIn>,
}

fn header_for(dataset: &Dataset, return_config: Option<ReturnConfig>) -> Header {
    Header {
        format: FORMAT_ID.to_string(),
        version: FORMAT_VERSION,
        spec: dataset.spec,
        distance_stats: dataset.distance_stats,
        return_config,
    }
}

fn write_record<W: Write, T: Serialize>(w: &mut W, value: &T) -> Result<()> {
    serde_json::to_writer(&mut *w, value).map_err(io::Error::from)?;
    w.write_all(b"\n")?;
    Ok(())
}

fn trajectory_out<'a>(t: &'a Trajectory, returns: Option<&[f64]>) -> TrajectoryOut<'a> {
    TrajectoryOut {
        episode_id: &t.episode_id,
        seed: t.seed,
        provenance: &t.provenance,
        outcome: t.outcome,
        steps: t
            .steps
            .iter()
            .enumerate()
            .map(|(i, s)| StepOut {
                index: s.index,
                observation: &s.observation,
                action: &s.action,
                returns: returns.map(|r| r[i]),
            })
            .collect(),
    }
}

pub fn write_dataset_to<W: Write>(dataset: &Dataset, mut w: W) -> Result<()> {
    write_record(&mut w, &header_for(dataset, None))?;
    for t in &dataset.trajectories {
        write_record(&mut w, &trajectory_out(t, None))?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_dataset(dataset: &Dataset, path: impl AsRef<Path>) -> Result<()> {
    let f = File::create(path)?;
    write_dataset_to(dataset, BufWriter::new(f))
}

/// Appends trajectory lines to an existing dataset file.
pub fn append_trajectories(path: impl AsRef<Path>, trajectories: &[Trajectory]) -> Result<()> {
    let f = OpenOptions::new().append(true).open(path)?;
    let mut w = BufWriter::new(f);
    for t in trajectories {
        write_record(&mut w, &trajectory_out(t, None))?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_labeled_dataset_to<W: Write>(labeled: &LabeledDataset, mut w: W) -> Result<()> {
    write_record(
        &mut w,
        &header_for(&labeled.dataset, Some(labeled.config)),
    )?;
    for (t, r) in labeled.dataset.trajectories.iter().zip(&labeled.returns) {
        write_record(&mut w, &trajectory_out(t, r.as_deref()))?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_labeled_dataset(labeled: &LabeledDataset, path: impl AsRef<Path>) -> Result<()> {
    let f = File::create(path)?;
    write_labeled_dataset_to(labeled, BufWriter::new(f))
}

fn parse_line<T: for<'de> Deserialize<'de>>(line_no: usize, line: &str) -> Result<T> {
    let de = &mut serde_json::Deserializer::from_str(line);
    serde_path_to_error::deserialize(de).map_err(|e| {
        let field = e.path().to_string();
        TrajlogError::Malformed {
            line: line_no,
            field,
            message: e.into_inner().to_string(),
        }
    })
}

struct RawFile {
    header: Header,
    trajectories: Vec<Trajectory>,
    returns: Vec<Option<Vec<f64>>>,
}

fn read_raw<R: BufRead>(reader: R) -> Result<RawFile> {
    let mut lines = reader.lines();
    let header_line = match lines.next() {
        Some(l) => l?,
        None => {
            return Err(TrajlogError::Malformed {
                line: 1,
                field: "format".into(),
                message: "missing header record".into(),
            })
        }
    };
    let header: Header = parse_line(1, &header_line)?;
    if header.format != FORMAT_ID {
        return Err(TrajlogError::Malformed {
            line: 1,
            field: "format".into(),
            message: format!("expected `{FORMAT_ID}`, found `{}`", header.format),
        });
    }
    if header.version != FORMAT_VERSION {
        return Err(TrajlogError::Malformed {
            line: 1,
            field: "version".into(),
            message: format!("unsupported version {}", header.version),
        });
    }
    header.spec.validate().map_err(|e| TrajlogError::Malformed {
        line: 1,
        field: "spec".into(),
        message: e.to_string(),
    })?;
    if let Some(stats) = &header.distance_stats {
        if !stats.is_valid() {
            return Err(TrajlogError::Malformed {
                line: 1,
                field: "distance_stats".into(),
                message: "standard deviations must be positive and finite".into(),
            });
        }
    }

    let mut trajectories = Vec::new();
    let mut returns = Vec::new();
    let mut seen = HashSet::new();
    for (i, line) in lines.enumerate() {
        let line_no = i + 2;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: TrajectoryIn = parse_line(line_no, &line)?;
        let labeled: Vec<Option<f64>> = rec.steps.iter().map(|s| s.returns).collect();
        let ret = if labeled.iter().all(Option::is_some) && !labeled.is_empty() {
            Some(labeled.into_iter().map(Option::unwrap).collect::<Vec<_>>())
        } else if labeled.iter().all(Option::is_none) {
            None
        } else {
            return Err(TrajlogError::Malformed {
                line: line_no,
                field: "steps.returns".into(),
                message: "returns present on some steps but not others".into(),
            });
        };
        if let Some(r) = &ret {
            if let Some(pos) = r.iter().position(|v| !v.is_finite()) {
                return Err(TrajlogError::Malformed {
                    line: line_no,
                    field: format!("steps[{pos}].returns"),
                    message: "non-finite return".into(),
                });
            }
        }
        let t = Trajectory {
            episode_id: rec.episode_id,
            seed: rec.seed,
            provenance: rec.provenance,
            outcome: rec.outcome,
            steps: rec
                .steps
                .into_iter()
                .map(|s| Step {
                    index: s.index,
                    observation: s.observation,
                    action: s.action,
                })
                .collect(),
        };
        t.validate(&header.spec).map_err(|e| TrajlogError::Malformed {
            line: line_no,
            field: "steps".into(),
            message: e.to_string(),
        })?;
        if !seen.insert(t.episode_id.clone()) {
            return Err(TrajlogError::Malformed {
                line: line_no,
                field: "episode_id".into(),
                message: format!("duplicate episode id `{}`", t.episode_id),
            });
        }
        trajectories.push(t);
        returns.push(ret);
    }
    Ok(RawFile {
        header,
        trajectories,
        returns,
    })
}

/// Reads a dataset file. Per-step `returns`, if present, are ignored.
pub fn read_dataset_from<R: BufRead>(reader: R) -> Result<Dataset> {
    let raw = read_raw(reader)?;
    Ok(Dataset {
        spec: raw.header.spec,
        trajectories: raw.trajectories,
        distance_stats: raw.header.distance_stats,
    })
}

pub fn read_dataset(path: impl AsRef<Path>) -> Result<Dataset> {
    read_dataset_from(BufReader::new(File::open(path)?))
}

/// Reads a labeled dataset file; the header must carry stats and return config.
pub fn read_labeled_dataset_from<R: BufRead>(reader: R) -> Result<LabeledDataset> {
    let raw = read_raw(reader)?;
    let missing = |field: &str| TrajlogError::Malformed {
        line: 1,
        field: field.into(),
        message: "labeled dataset header requires this field".into(),
    };
    let config = raw.header.return_config.ok_or_else(|| missing("return_config"))?;
    let stats = raw.header.distance_stats.ok_or_else(|| missing("distance_stats"))?;
    for (i, (t, r)) in raw.trajectories.iter().zip(&raw.returns).enumerate() {
        if t.outcome.is_labeled() != r.is_some() {
            return Err(TrajlogError::Malformed {
                line: i + 2,
                field: "steps.returns".into(),
                message: format!(
                    "outcome {:?} inconsistent with presence of returns",
                    t.outcome
                ),
            });
        }
    }
    Ok(LabeledDataset {
        dataset: Dataset {
            spec: raw.header.spec,
            trajectories: raw.trajectories,
            distance_stats: Some(stats),
        },
        config,
        returns: raw.returns,
    })
}

pub fn read_labeled_dataset(path: impl AsRef<Path>) -> Result<LabeledDataset> {
    read_labeled_dataset_from(BufReader::new(File::open(path)?))
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;

    pub fn obs(spec: &ObservationSpec, level: u8, joints: &[f64], x: f64, y: f64) -> Observation {
        Observation::from_levels(
            vec![level; spec.len()],
            KinematicState {
                joint_angles: joints.to_vec(),
                base_pose: BasePose { x, y, heading: 0.0 },
            },
        )
    }

    pub fn traj(spec: &ObservationSpec, id: &str, n: usize, outcome: Outcome) -> Trajectory {
        let steps = (0..n)
            .map(|i| Step {
                index: i as u32,
                observation: obs(spec, (i * 10 % 256) as u8, &[0.1 * i as f64], 0.05 * i as f64, 1.0),
                action: Action {
                    base_forward: 0.1,
                    ..Action::default()
                },
            })
            .collect();
        let provenance = if outcome == Outcome::Success {
            Provenance::ExpertDemo
        } else {
            Provenance::PolicyRollout {
                policy_id: "p".into(),
            }
        };
        Trajectory::new(id, 3, provenance, steps, outcome, spec).unwrap()
    }

    fn spec() -> ObservationSpec {
        ObservationSpec::new(2, 2, 1).unwrap()
    }

    #[test]
    fn terminal_reward_signs() {
        assert_eq!(terminal_reward(Outcome::Success).unwrap(), 1.0);
        assert_eq!(
            terminal_reward(Outcome::Failure(FailureMode::Collision)).unwrap(),
            -1.0
        );
        assert!(matches!(
            terminal_reward(Outcome::AskedForHelp),
            Err(TrajlogError::UnlabeledOutcome)
        ));
    }

    #[test]
    fn expert_demo_must_succeed() {
        let s = spec();
        let t = traj(&s, "a", 2, Outcome::Success);
        let err = Trajectory::new(
            "b",
            0,
            Provenance::ExpertDemo,
            t.steps.clone(),
            Outcome::Failure(FailureMode::Timeout),
            &s,
        );
        assert!(matches!(err, Err(TrajlogError::InvalidTrajectory { .. })));
    }

    #[test]
    fn rejects_empty_and_non_increasing() {
        let s = spec();
        assert!(Trajectory::new("e", 0, Provenance::ExpertDemo, vec![], Outcome::Success, &s).is_err());
        let mut t = traj(&s, "a", 3, Outcome::Success);
        t.steps[2].index = 1;
        assert!(t.validate(&s).is_err());
    }

    #[test]
    fn empty_dataset_writes_header_only() {
        let d = Dataset::new(spec());
        let mut buf = Vec::new();
        write_dataset_to(&d, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.lines().count(), 1);
        assert!(text.starts_with("{\"format\":\"bcva-trajlog\",\"version\":1"));
        assert_eq!(read_dataset_from(text.as_bytes()).unwrap(), d);
    }

    #[test]
    fn single_trajectory_round_trip() {
        let s = spec();
        let d = Dataset::from_trajectories(s, vec![traj(&s, "one", 4, Outcome::Success)]).unwrap();
        let mut buf = Vec::new();
        write_dataset_to(&d, &mut buf).unwrap();
        assert_eq!(read_dataset_from(buf.as_slice()).unwrap(), d);
    }

    #[test]
    fn pixel_out_of_range_is_rejected_with_line_and_field() {
        let s = spec();
        let d = Dataset::from_trajectories(s, vec![traj(&s, "one", 1, Outcome::Success)]).unwrap();
        let mut buf = Vec::new();
        write_dataset_to(&d, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let bad = text.replacen("\"pixels\":[0,", "\"pixels\":[1.5,", 1);
        assert_ne!(bad, text);
        match read_dataset_from(bad.as_bytes()) {
            Err(TrajlogError::Malformed { line, field, .. }) => {
                assert_eq!(line, 2);
                assert!(field.contains("pixels"), "field was {field}");
            }
            other => panic!("expected malformed error, got {other:?}"),
        }
        let bad = text.replacen("\"pixels\":[0,", "\"pixels\":[300,", 1);
        assert!(matches!(
            read_dataset_from(bad.as_bytes()),
            Err(TrajlogError::Malformed { line: 2, .. })
        ));
    }

    #[test]
    fn load_rejects_failed_expert() {
        let s = spec();
        let d = Dataset::from_trajectories(s, vec![traj(&s, "one", 1, Outcome::Success)]).unwrap();
        let mut buf = Vec::new();
        write_dataset_to(&d, &mut buf).unwrap();
        let bad = String::from_utf8(buf)
            .unwrap()
            .replace("\"outcome\":\"Success\"", "\"outcome\":{\"Failure\":\"Collision\"}");
        assert!(matches!(
            read_dataset_from(bad.as_bytes()),
            Err(TrajlogError::Malformed { line: 2, .. })
        ));
    }

    #[test]
    fn duplicate_ids_rejected() {
        let s = spec();
        let a = traj(&s, "dup", 1, Outcome::Success);
        assert!(matches!(
            Dataset::from_trajectories(s, vec![a.clone(), a]),
            Err(TrajlogError::DuplicateEpisode(_))
        ));
    }

    fn rollouts(n: usize) -> Dataset {
        let s = spec();
        let ts = (0..n)
            .map(|i| traj(&s, &format!("roll-{i:04}"), 1, Outcome::Failure(FailureMode::Timeout)))
            .collect();
        Dataset::from_trajectories(s, ts).unwrap()
    }

    #[test]
    fn split_is_deterministic_and_near_fraction() {
        let d = rollouts(1000);
        let (t1, v1) = split_dataset(&d, 0.25, 11, true).unwrap();
        let (t2, v2) = split_dataset(&d, 0.25, 11, true).unwrap();
        assert_eq!(v1, v2);
        assert_eq!(t1, t2);
        assert_eq!(t1.trajectories.len() + v1.trajectories.len(), 1000);
        let n = v1.trajectories.len();
        assert!((200..=300).contains(&n), "validation size {n}");
    }

    #[test]
    fn four_episode_split_matches_brute_force() {
        let d = rollouts(4);
        // Independent evaluation of the documented rule.
        let salt = 2u64;
        let oracle: Vec<bool> = d
            .trajectories
            .iter()
            .map(|t| {
                let digest = Sha256::digest(format!("{}\u{1f}{}", t.episode_id, salt).as_bytes());
                let word = u64::from_be_bytes(digest[..8].try_into().unwrap());
                ((word >> 11) as f64) / 9007199254740992.0 < 0.25
            })
            .collect();
        assert_eq!(oracle.iter().filter(|&&b| b).count(), 1);
        assert_eq!(validation_mask(&d, 0.25, salt, true).unwrap(), oracle);
        let (_, v) = split_dataset(&d, 0.25, salt, true).unwrap();
        assert_eq!(v.trajectories.len(), 1);
    }

    #[test]
    fn experts_pinned_to_train() {
        let s = spec();
        let ts = (0..200)
            .map(|i| traj(&s, &format!("demo-{i}"), 1, Outcome::Success))
            .collect();
        let d = Dataset::from_trajectories(s, ts).unwrap();
        let (_, v) = split_dataset(&d, 0.5, 0, true).unwrap();
        assert!(v.trajectories.is_empty());
        let (_, v) = split_dataset(&d, 0.5, 0, false).unwrap();
        assert!(!v.trajectories.is_empty());
    }

    #[test]
    fn invalid_fraction() {
        let d = rollouts(2);
        assert!(split_dataset(&d, 0.0, 0, true).is_err());
        assert!(split_dataset(&d, 1.0, 0, true).is_err());
    }
}

//! Offline policy evaluation: per-step discounted returns
//! `G(s_j) = gamma^Delta_j * r`, where `Delta_j` is the accumulated distance
//! from step `j` to the end of the trajectory under a time, pixel, or
//! kinematic distance.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::trajlog::{terminal_reward, Dataset, Observation, Trajectory, TrajlogError};

#[derive(Debug, Error)]
pub enum ReturnsError {
    #[error("observation spec mismatch: {0} vs {1} pixel values")]
    SpecMismatch(usize, usize),
    #[error("joint count mismatch: {0} vs {1}")]
    JointMismatch(usize, usize),
    #[error("dataset has no consecutive step pairs to fit distance statistics")]
    EmptyDataset,
    #[error("discount must lie in (0, 1), got {0}")]
    InvalidGamma(f64),
    #[error("trajectory `{0}`: {1}")]
    Trajectory(String, TrajlogError),
    #[error("unknown distance metric `{0}` (expected time, pixel or movement)")]
    UnknownMetric(String),
}

pub type Result<T> = std::result::Result<T, ReturnsError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DistanceMetric {
    Time,
    Pixel,
    /// Joint and base displacement; called "movement" on the command line.
    #[serde(rename = "movement")]
    Kinematic,
}

impl DistanceMetric {
    pub const ALL: [DistanceMetric; 3] = [
        DistanceMetric::Time,
        DistanceMetric::Kinematic,
        DistanceMetric::Pixel,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            DistanceMetric::Time => "time",
            DistanceMetric::Pixel => "pixel",
            DistanceMetric::Kinematic => "movement",
        }
    }
}

impl std::str::FromStr for DistanceMetric {
    type Err = ReturnsError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "time" => Ok(DistanceMetric::Time),
            "pixel" => Ok(DistanceMetric::Pixel),
            "movement" | "kinematic" => Ok(DistanceMetric::Kinematic),
            other => Err(ReturnsError::UnknownMetric(other.to_string())),
        }
    }
}

impl std::fmt::Display for DistanceMetric {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// Normalization statistics for the raw pixel and kinematic differences,
/// fitted over consecutive step pairs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DistanceStats {
    pub mu_pixel: f64,
    pub sigma_pixel: f64,
    pub mu_joint: f64,
    pub sigma_joint: f64,
    pub mu_xyz: f64,
    pub sigma_xyz: f64,
}

impl DistanceStats {
    pub fn is_valid(&self) -> bool {
        [
            self.mu_pixel,
            self.mu_joint,
            self.mu_xyz,
            self.sigma_pixel,
            self.sigma_joint,
            self.sigma_xyz,
        ]
        .iter()
        .all(|v| v.is_finite())
            && self.sigma_pixel > 0.0
            && self.sigma_joint > 0.0
            && self.sigma_xyz > 0.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ReturnConfig {
    pub gamma: f64,
    pub metric: DistanceMetric,
    pub clamp_delta_at_zero: bool,
}

impl ReturnConfig {
    pub fn new(gamma: f64, metric: DistanceMetric) -> Result<Self> {
        let c = Self {
            gamma,
            metric,
            clamp_delta_at_zero: true,
        };
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<()> {
        if self.gamma > 0.0 && self.gamma < 1.0 {
            Ok(())
        } else {
            Err(ReturnsError::InvalidGamma(self.gamma))
        }
    }
}

impl Default for ReturnConfig {
    fn default() -> Self {
        Self {
            gamma: 0.99,
            metric: DistanceMetric::Pixel,
            clamp_delta_at_zero: true,
        }
    }
}

/// Sum of absolute pixel differences over every (x, y, c).
pub fn raw_pixel_diff(a: &Observation, b: &Observation) -> Result<f64> {
    if a.pixel_count() != b.pixel_count() {
        return Err(ReturnsError::SpecMismatch(a.pixel_count(), b.pixel_count()));
    }
    // Integer accumulation keeps the sum exact and order independent.
    let levels: u64 = a
        .levels()
        .iter()
        .zip(b.levels())
        .map(|(&p, &q)| u64::from(p.abs_diff(q)))
        .sum();
    Ok(levels as f64 / 255.0)
}

/// `(sum over joints |dq|, |dx| + |dy|)` between two observations.
pub fn raw_kinematic_diff(a: &Observation, b: &Observation) -> Result<(f64, f64)> {
    let ja = &a.kinematics.joint_angles;
    let jb = &b.kinematics.joint_angles;
    if ja.len() != jb.len() {
        return Err(ReturnsError::JointMismatch(ja.len(), jb.len()));
    }
    let joint = ja.iter().zip(jb).map(|(p, q)| (q - p).abs()).sum();
    let pa = &a.kinematics.base_pose;
    let pb = &b.kinematics.base_pose;
    let base = (pb.x - pa.x).abs() + (pb.y - pa.y).abs();
    Ok((joint, base))
}

/// Non-fatal issues found while fitting statistics.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum StatsWarning {
    /// The named channel had zero spread; its sigma was replaced by 1.
    ZeroSigma(&'static str),
}

fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Fits mean and population standard deviation of the raw distances over all
/// consecutive step pairs, in trajectory then step order.
pub fn fit_distance_stats(dataset: &Dataset) -> Result<(DistanceStats, Vec<StatsWarning>)> {
    let mut pix = Vec::new();
    let mut joint = Vec::new();
    let mut base = Vec::new();
    for t in &dataset.trajectories {
        for w in t.steps.windows(2) {
            let (a, b) = (&w[0].observation, &w[1].observation);
            pix.push(raw_pixel_diff(a, b)?);
            let (j, x) = raw_kinematic_diff(a, b)?;
            joint.push(j);
            base.push(x);
        }
    }
    // Two pairs are needed for a meaningful spread; one pair still yields
    // sigma 0 and is handled by the replacement below.
    if pix.is_empty() {
        return Err(ReturnsError::EmptyDataset);
    }
    let mut warnings = Vec::new();
    let mut fit = |xs: &[f64], name: &'static str| {
        let (m, s) = mean_std(xs);
        if s > 0.0 && s.is_finite() {
            (m, s)
        } else {
            log::warn!("distance channel `{name}` has zero spread; using sigma = 1");
            warnings.push(StatsWarning::ZeroSigma(name));
            (m, 1.0)
        }
    };
    let (mu_pixel, sigma_pixel) = fit(&pix, "pixel");
    let (mu_joint, sigma_joint) = fit(&joint, "joint");
    let (mu_xyz, sigma_xyz) = fit(&base, "xyz");
    Ok((
        DistanceStats {
            mu_pixel,
            sigma_pixel,
            mu_joint,
            sigma_joint,
            mu_xyz,
            sigma_xyz,
        },
        warnings,
    ))
}

/// Per-step distance `delta(s_a, s_b)`.
pub fn step_distance(
    a: &Observation,
    b: &Observation,
    metric: DistanceMetric,
    stats: &DistanceStats,
    clamp: bool,
) -> Result<f64> {
    let d = match metric {
        DistanceMetric::Time => 1.0,
        DistanceMetric::Pixel => {
            let raw = raw_pixel_diff(a, b)?;
            (raw - stats.mu_pixel) / stats.sigma_pixel + 0.5
        }
        DistanceMetric::Kinematic => {
            let (j, x) = raw_kinematic_diff(a, b)?;
            (j - stats.mu_joint) / (2.0 * stats.sigma_joint)
                + (x - stats.mu_xyz) / (2.0 * stats.sigma_xyz)
                + 0.5
        }
    };
    Ok(if clamp { d.max(0.0) } else { d })
}

/// Suffix sums `Delta_j` of per-step distances; `Delta_T = 0` for the last step.
pub fn accumulated_distances(
    trajectory: &Trajectory,
    metric: DistanceMetric,
    stats: &DistanceStats,
    clamp: bool,
) -> Result<Vec<f64>> {
    let n = trajectory.steps.len();
    let mut out = vec![0.0; n];
    for j in (0..n.saturating_sub(1)).rev() {
        let d = step_distance(
            &trajectory.steps[j].observation,
            &trajectory.steps[j + 1].observation,
            metric,
            stats,
            clamp,
        )?;
        out[j] = out[j + 1] + d;
    }
    Ok(out)
}

/// Discounts a terminal reward by `gamma^Delta_j` for each step.
pub fn returns_from_distances(deltas: &[f64], gamma: f64, reward: f64) -> Vec<f64> {
    deltas.iter().map(|&d| gamma.powf(d) * reward).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledTrajectory<'a> {
    pub trajectory: &'a Trajectory,
    pub returns: Vec<f64>,
    pub config: ReturnConfig,
    pub stats: DistanceStats,
}

pub fn discounted_returns<'a>(
    trajectory: &'a Trajectory,
    config: &ReturnConfig,
    stats: &DistanceStats,
) -> Result<LabeledTrajectory<'a>> {
    config.validate()?;
    let reward = terminal_reward(trajectory.outcome)
        .map_err(|e| ReturnsError::Trajectory(trajectory.episode_id.clone(), e))?;
    let deltas =
        accumulated_distances(trajectory, config.metric, stats, config.clamp_delta_at_zero)?;
    Ok(LabeledTrajectory {
        trajectory,
        returns: returns_from_distances(&deltas, config.gamma, reward),
        config: *config,
        stats: *stats,
    })
}

/// Resolves the statistics to use: `frozen` if given, else the dataset's own
/// header stats, else a fresh fit.
pub fn resolve_stats(dataset: &Dataset, frozen: Option<DistanceStats>) -> Result<DistanceStats> {
    match frozen.or(dataset.distance_stats) {
        Some(s) => Ok(s),
        None => Ok(fit_distance_stats(dataset)?.0),
    }
}

/// Labels every trajectory with a success/failure outcome. AskedForHelp
/// trajectories are skipped.
pub fn label_dataset<'a>(
    dataset: &'a Dataset,
    config: &ReturnConfig,
    frozen: Option<DistanceStats>,
) -> Result<Vec<LabeledTrajectory<'a>>> {
    if dataset.trajectories.is_empty() {
        return Err(ReturnsError::EmptyDataset);
    }
    let stats = resolve_stats(dataset, frozen)?;
    dataset
        .trajectories
        .iter()
        .filter(|t| t.outcome.is_labeled())
        .map(|t| discounted_returns(t, config, &stats))
        .collect()
}

/// An owned dataset with per-trajectory returns aligned to
/// `dataset.trajectories` (`None` for AskedForHelp). The stats used are kept in
/// `dataset.distance_stats`.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledDataset {
    pub dataset: Dataset,
    pub config: ReturnConfig,
    pub returns: Vec<Option<Vec<f64>>>,
}

impl LabeledDataset {
    pub fn label(mut dataset: Dataset, config: ReturnConfig, frozen: Option<DistanceStats>) -> Result<Self> {
        let stats = resolve_stats(&dataset, frozen)?;
        dataset.distance_stats = Some(stats);
        let returns = dataset
            .trajectories
            .iter()
            .map(|t| {
                if t.outcome.is_labeled() {
                    discounted_returns(t, &config, &stats).map(|l| Some(l.returns))
                } else {
                    Ok(None)
                }
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            dataset,
            config,
            returns,
        })
    }

    pub fn stats(&self) -> DistanceStats {
        self.dataset
            .distance_stats
            .expect("labeled dataset always carries stats")
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::trajlog::tests::{obs, traj};
    use crate::trajlog::{FailureMode, ObservationSpec, Outcome, Provenance, Step, Action};

    fn spec() -> ObservationSpec {
        ObservationSpec::new(2, 2, 1).unwrap()
    }

    fn unit_stats() -> DistanceStats {
        DistanceStats {
            mu_pixel: 1.0,
            sigma_pixel: 0.5,
            mu_joint: 0.0,
            sigma_joint: 1.0,
            mu_xyz: 0.0,
            sigma_xyz: 1.0,
        }
    }

    #[test]
    fn pixel_diff_cases() {
        let s = spec();
        let zero = obs(&s, 0, &[0.0], 0.0, 0.0);
        let half = Observation::from_values(&[0.5; 4], zero.kinematics.clone());
        assert_eq!(raw_pixel_diff(&zero, &zero).unwrap(), 0.0);
        // 0.5 quantizes to level 128, so each pixel contributes 128/255.
        let expected = 4.0 * 128.0 / 255.0;
        assert_eq!(raw_pixel_diff(&zero, &half).unwrap(), expected);
        assert_eq!(raw_pixel_diff(&half, &zero).unwrap(), expected);
        let other = obs(&ObservationSpec::new(3, 1, 1).unwrap(), 0, &[0.0], 0.0, 0.0);
        assert!(matches!(
            raw_pixel_diff(&zero, &other),
            Err(ReturnsError::SpecMismatch(4, 3))
        ));
    }

    #[test]
    fn pixel_diff_exact_levels() {
        // 0.5 is not an 8-bit level, so use two pixels at 1.0 and two at 0.
        let s = spec();
        let a = obs(&s, 0, &[0.0], 0.0, 0.0);
        let b = Observation::from_levels(vec![255, 255, 0, 0], a.kinematics.clone());
        assert_eq!(raw_pixel_diff(&a, &b).unwrap(), 2.0);
    }

    #[test]
    fn kinematic_diff_cases() {
        let s = spec();
        let a = obs(&s, 0, &[0.1], 0.0, 0.0);
        let b = obs(&s, 0, &[0.3], 0.2, 0.1);
        let (j, x) = raw_kinematic_diff(&a, &b).unwrap();
        assert!((j - 0.2).abs() < 1e-15);
        assert!((x - 0.3).abs() < 1e-15);
        assert_eq!(raw_kinematic_diff(&b, &a).unwrap(), (j, x));
        assert_eq!(raw_kinematic_diff(&a, &a).unwrap(), (0.0, 0.0));
        let c = obs(&s, 0, &[0.3, 0.0], 0.2, 0.1);
        assert!(raw_kinematic_diff(&a, &c).is_err());
    }

    #[test]
    fn step_distance_cases() {
        let s = spec();
        let a = obs(&s, 0, &[0.0], 0.0, 0.0);
        let b = Observation::from_levels(vec![255, 255, 0, 0], a.kinematics.clone());
        let st = unit_stats();
        assert_eq!(step_distance(&a, &b, DistanceMetric::Time, &st, true).unwrap(), 1.0);
        assert_eq!(step_distance(&a, &b, DistanceMetric::Pixel, &st, true).unwrap(), 2.5);
        assert_eq!(step_distance(&a, &a, DistanceMetric::Pixel, &st, false).unwrap(), -1.5);
        assert_eq!(step_distance(&a, &a, DistanceMetric::Pixel, &st, true).unwrap(), 0.0);
    }

    #[test]
    fn fit_stats_mean_and_population_std() {
        let s = spec();
        // Three frames with raw pixel diffs 1.0 then 3.0.
        let k = obs(&s, 0, &[0.0], 0.0, 0.0).kinematics;
        let frames = [
            vec![0, 0, 0, 0],
            vec![255, 0, 0, 0],
            vec![0, 255, 255, 0],
        ];
        let steps = frames
            .iter()
            .enumerate()
            .map(|(i, f)| Step {
                index: i as u32,
                observation: Observation::from_levels(f.clone(), k.clone()),
                action: Action::default(),
            })
            .collect();
        let t = Trajectory::new("t", 0, Provenance::ExpertDemo, steps, Outcome::Success, &s).unwrap();
        let d = Dataset::from_trajectories(s, vec![t]).unwrap();
        let (st, warnings) = fit_distance_stats(&d).unwrap();
        assert_eq!(st.mu_pixel, 2.0);
        assert_eq!(st.sigma_pixel, 1.0);
        // Kinematics never move.
        assert_eq!(st.sigma_joint, 1.0);
        assert_eq!(st.sigma_xyz, 1.0);
        assert!(warnings.contains(&StatsWarning::ZeroSigma("joint")));
        assert!(warnings.contains(&StatsWarning::ZeroSigma("xyz")));
        assert!(!warnings.contains(&StatsWarning::ZeroSigma("pixel")));
    }

    #[test]
    fn fit_stats_empty_dataset() {
        let d = Dataset::new(spec());
        assert!(matches!(fit_distance_stats(&d), Err(ReturnsError::EmptyDataset)));
    }

    fn traj_with_pixel_deltas(levels: &[u8], outcome: Outcome) -> Trajectory {
        let s = ObservationSpec::new(1, 1, 1).unwrap();
        let steps = levels
            .iter()
            .enumerate()
            .map(|(i, &l)| Step {
                index: i as u32,
                observation: Observation::from_levels(vec![l], obs(&s, 0, &[0.0], 0.0, 0.0).kinematics),
                action: Action::default(),
            })
            .collect();
        Trajectory::new(
            "x",
            0,
            Provenance::PolicyRollout { policy_id: "p".into() },
            steps,
            outcome,
            &s,
        )
        .unwrap()
    }

    #[test]
    fn accumulated_and_discounted_hand_values() {
        // Raw diffs are 1/255, 2/255, 3/255; mu = 1/255 and sigma = 2/255 map
        // them to deltas 0.5, 1.0, 1.5.
        let stats = DistanceStats {
            mu_pixel: 1.0 / 255.0,
            sigma_pixel: 2.0 / 255.0,
            ..unit_stats()
        };
        let t = traj_with_pixel_deltas(&[0, 1, 3, 6], Outcome::Failure(FailureMode::Collision));
        let deltas = accumulated_distances(&t, DistanceMetric::Pixel, &stats, true).unwrap();
        let want = [3.0, 2.5, 1.5, 0.0];
        for (d, w) in deltas.iter().zip(want) {
            assert!((d - w).abs() < 1e-12, "{deltas:?}");
        }
        let cfg = ReturnConfig::new(0.9, DistanceMetric::Pixel).unwrap();
        let g = discounted_returns(&t, &cfg, &stats).unwrap().returns;
        let want = [-0.729, -0.9f64.powf(2.5), -0.9f64.powf(1.5), -1.0];
        for (a, b) in g.iter().zip(want) {
            assert!((a - b).abs() < 1e-12, "{g:?}");
        }
        assert!((g[1] + 0.768433).abs() < 1e-6);
        assert!((g[2] + 0.853815).abs() < 1e-6);
    }

    #[test]
    fn time_metric_matches_discounted_reward() {
        let s = spec();
        let t = traj(&s, "a", 11, Outcome::Success);
        let cfg = ReturnConfig::new(0.9, DistanceMetric::Time).unwrap();
        let l = discounted_returns(&t, &cfg, &unit_stats()).unwrap();
        assert_eq!(l.returns[0], 0.9f64.powf(10.0));
        assert_eq!(*l.returns.last().unwrap(), 1.0);
        let d = accumulated_distances(&t, DistanceMetric::Time, &unit_stats(), true).unwrap();
        for (j, v) in d.iter().enumerate() {
            assert_eq!(*v, (10 - j) as f64);
        }
    }

    #[test]
    fn asked_for_help_is_not_labelable() {
        let s = spec();
        let t = traj(&s, "h", 3, Outcome::AskedForHelp);
        let cfg = ReturnConfig::default();
        assert!(matches!(
            discounted_returns(&t, &cfg, &unit_stats()),
            Err(ReturnsError::Trajectory(_, TrajlogError::UnlabeledOutcome))
        ));
    }

    #[test]
    fn label_signs() {
        let s = spec();
        let cfg = ReturnConfig::new(0.99, DistanceMetric::Kinematic).unwrap();
        let ok = Dataset::from_trajectories(s, vec![traj(&s, "a", 6, Outcome::Success)]).unwrap();
        let l = label_dataset(&ok, &cfg, None).unwrap();
        assert!(l[0].returns.iter().all(|&g| g > 0.0 && g <= 1.0));
        let bad = Dataset::from_trajectories(
            s,
            vec![traj(&s, "b", 6, Outcome::Failure(FailureMode::GraspMiss))],
        )
        .unwrap();
        let l = label_dataset(&bad, &cfg, None).unwrap();
        assert!(l[0].returns.iter().all(|&g| (-1.0..0.0).contains(&g)));
    }

    #[test]
    fn frozen_stats_are_reused_verbatim() {
        let s = spec();
        let d = Dataset::from_trajectories(s, vec![traj(&s, "a", 6, Outcome::Success)]).unwrap();
        let frozen = unit_stats();
        let l = LabeledDataset::label(d, ReturnConfig::default(), Some(frozen)).unwrap();
        assert_eq!(l.stats(), frozen);
    }

    #[test]
    fn metric_names_parse() {
        for m in DistanceMetric::ALL {
            assert_eq!(m.name().parse::<DistanceMetric>().unwrap(), m);
        }
        assert!("euclid".parse::<DistanceMetric>().is_err());
        assert!(ReturnConfig::new(1.0, DistanceMetric::Time).is_err());
    }
}

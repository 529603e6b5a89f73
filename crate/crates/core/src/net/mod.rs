//! The joint policy/value model.
//!
//! A dense encoder maps flattened pixels plus kinematics to a diagonal
//! Gaussian over a latent code. Three decoders share that code: an action
//! head, a value head that outputs a Gaussian (mean and log-std), and a
//! classifier head that outputs a failure logit for the baseline. A learned
//! Gaussian mixture serves as the prior for the bottleneck penalty.

mod checkpoint;
mod loss;
mod policy;
mod train;

pub use checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint, CheckpointHeader, LabelingRef, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use loss::{combine, mc_kl_samples, ExpertBatch, LabeledBatch, LabeledRow, LossGraph, LossTerms, MixturePrior, NoiseDraw};
pub use policy::ModelPolicy;
pub use train::{train, EpochRecord, TrainConfig, TrainData, TrainReport};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::grad::{matmul, sigmoid, GradError, ParamId, ParamStore, Tape, Tensor, Var};
use crate::trajlog::{Action, Observation, ObservationSpec};

pub const LOG_STD_MIN: f64 = -6.0;
pub const LOG_STD_MAX: f64 = 2.0;
pub const HUBER_DELTA: f64 = 1.0;
/// Pose features appended after the joints: x, y, cos(heading), sin(heading).
pub const POSE_FEATURES: usize = 4;

#[derive(Debug, Error)]
pub enum NetError {
    #[error("invalid model config: {0}")]
    InvalidConfig(String),
    #[error("observation does not match the model input: {0}")]
    InputMismatch(String),
    #[error("expert batch contains a non-expert step from episode `{0}`")]
    NonExpertStep(String),
    #[error("step {step} of episode `{episode_id}` has no {what} label")]
    Unlabeled {
        episode_id: String,
        step: usize,
        what: &'static str,
    },
    #[error("empty training data: {0}")]
    EmptyData(String),
    #[error("{0} batch required for this loss")]
    MissingBatch(&'static str),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("checkpoint config does not match the expected model config")]
    ConfigMismatch,
    #[error(transparent)]
    Grad(#[from] GradError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, NetError>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub latent_dim: usize,
    pub encoder_hidden: Vec<usize>,
    pub action_hidden: [usize; 2],
    pub value_hidden: [usize; 3],
    pub prior_components: usize,
    pub mc_samples: usize,
    pub lambda: f64,
    pub beta: f64,
    /// Base positions enter the network as `(p - pose_center) / pose_scale`.
    pub pose_center: f64,
    pub pose_scale: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            latent_dim: 16,
            encoder_hidden: vec![128, 64],
            action_hidden: [32, 32],
            value_hidden: [32, 32, 32],
            prior_components: 8,
            mc_samples: 4,
            lambda: 0.5,
            beta: 1e-6,
            pose_center: 2.0,
            pose_scale: 2.0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(NetError::InvalidConfig(m.to_string()));
        let sizes = self
            .encoder_hidden
            .iter()
            .chain(&self.action_hidden)
            .chain(&self.value_hidden)
            .chain([&self.latent_dim, &self.prior_components, &self.mc_samples]);
        if sizes.into_iter().any(|&s| s == 0) {
            return bad("all sizes must be >= 1");
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return bad("lambda must be >= 0");
        }
        if !(self.beta >= 0.0 && self.beta.is_finite()) {
            return bad("beta must be >= 0");
        }
        if !(self.pose_scale > 0.0 && self.pose_center.is_finite()) {
            return bad("pose_scale must be > 0");
        }
        Ok(())
    }
}

/// Shape of the observations a model consumes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct InputSpec {
    pub observation: ObservationSpec,
    pub joints: usize,
}

impl InputSpec {
    pub fn dim(&self) -> usize {
        self.observation.len() + self.joints + POSE_FEATURES
    }
}

/// What the model is trained to do besides cloning the expert.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TrainMode {
    /// Policy plus value head on discounted returns.
    Bcva,
    /// Policy plus failure classifier on episode outcomes.
    Classifier,
    /// Policy only, for bootstrapping.
    Policy,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct Dense {
    pub w: ParamId,
    pub b: ParamId,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub(crate) struct Layout {
    pub encoder: Vec<Dense>,
    pub enc_mean: Dense,
    pub enc_log_std: Dense,
    pub action: Vec<Dense>,
    pub action_out: Dense,
    pub value: Vec<Dense>,
    pub value_mean: Dense,
    pub value_log_std: Dense,
    pub classifier: Vec<Dense>,
    pub classifier_out: Dense,
    pub prior_logits: ParamId,
    pub prior_means: ParamId,
    pub prior_log_stds: ParamId,
}

/// Deterministic outputs at one observation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Prediction {
    pub action: Action,
    /// Value mean clamped to `[-1, 1]`.
    pub value: f64,
    pub failure_prob: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub(crate) config: ModelConfig,
    pub(crate) input: InputSpec,
    pub(crate) store: ParamStore,
    pub(crate) layout: Layout,
}

struct Builder<'a> {
    store: &'a mut ParamStore,
    rng: &'a mut ChaCha8Rng,
}

impl Builder<'_> {
    fn dense(&mut self, name: &str, n_in: usize, n_out: usize, gain: f64, bias: f64) -> Result<Dense> {
        let a = gain * (6.0 / (n_in + n_out) as f64).sqrt();
        let w: Vec<f64> = (0..n_in * n_out)
            .map(|_| self.rng.random_range(-a..a))
            .collect();
        Ok(Dense {
            w: self.store.add(format!("{name}.w"), Tensor::matrix(n_in, n_out, w)?)?,
            b: self.store.add(format!("{name}.b"), Tensor::full(&[1, n_out], bias))?,
        })
    }

    fn stack(&mut self, name: &str, n_in: usize, sizes: &[usize]) -> Result<(Vec<Dense>, usize)> {
        let mut layers = Vec::with_capacity(sizes.len());
        let mut prev = n_in;
        for (i, &s) in sizes.iter().enumerate() {
            layers.push(self.dense(&format!("{name}.{i}"), prev, s, 1.0, 0.0)?);
            prev = s;
        }
        Ok((layers, prev))
    }
}

const INIT_LOG_STD: f64 = -2.0;

impl Model {
    /// Fresh model with seeded Xavier-uniform weights and zero biases.
    pub fn new(config: ModelConfig, input: InputSpec, seed: u64) -> Result<Self> {
        config.validate()?;
        input
            .observation
            .validate()
            .map_err(|e| NetError::InvalidConfig(e.to_string()))?;
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut b = Builder {
            store: &mut store,
            rng: &mut rng,
        };
        let d = config.latent_dim;
        let (encoder, h) = b.stack("encoder", input.dim(), &config.encoder_hidden)?;
        let enc_mean = b.dense("encoder.mean", h, d, 1.0, 0.0)?;
        let enc_log_std = b.dense("encoder.log_std", h, d, 0.1, INIT_LOG_STD)?;
        let (action, h) = b.stack("action", d, &config.action_hidden)?;
        let action_out = b.dense("action.out", h, Action::DIM, 1.0, 0.0)?;
        let (value, h) = b.stack("value", d, &config.value_hidden)?;
        let value_mean = b.dense("value.mean", h, 1, 1.0, 0.0)?;
        let value_log_std = b.dense("value.log_std", h, 1, 0.1, INIT_LOG_STD)?;
        let (classifier, h) = b.stack("classifier", d, &config.value_hidden)?;
        let classifier_out = b.dense("classifier.out", h, 1, 1.0, 0.0)?;
        let k = config.prior_components;
        let means: Vec<f64> = (0..k * d).map(|_| rng.random_range(-1.0..1.0)).collect();
        let prior_logits = store.add("prior.logits", Tensor::zeros(&[1, k]))?;
        let prior_means = store.add("prior.means", Tensor::matrix(k, d, means)?)?;
        let prior_log_stds = store.add("prior.log_stds", Tensor::zeros(&[k, d]))?;
        Ok(Self {
            config,
            input,
            store,
            layout: Layout {
                encoder,
                enc_mean,
                enc_log_std,
                action,
                action_out,
                value,
                value_mean,
                value_log_std,
                classifier,
                classifier_out,
                prior_logits,
                prior_means,
                prior_log_stds,
            },
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn input(&self) -> &InputSpec {
        &self.input
    }

    pub fn params(&self) -> &ParamStore {
        &self.store
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    /// Appends the network input for `obs` to `out`.
    pub fn push_features(&self, obs: &Observation, out: &mut Vec<f64>) -> Result<()> {
        if obs.pixel_count() != self.input.observation.len() {
            return Err(NetError::InputMismatch(format!(
                "{} pixels, expected {}",
                obs.pixel_count(),
                self.input.observation.len()
            )));
        }
        let k = &obs.kinematics;
        if k.joint_angles.len() != self.input.joints {
            return Err(NetError::InputMismatch(format!(
                "{} joints, expected {}",
                k.joint_angles.len(),
                self.input.joints
            )));
        }
        out.extend(obs.pixel_values());
        out.extend_from_slice(&k.joint_angles);
        let (c, s) = (self.config.pose_center, self.config.pose_scale);
        let p = &k.base_pose;
        out.extend([(p.x - c) / s, (p.y - c) / s, p.heading.cos(), p.heading.sin()]);
        Ok(())
    }

    pub fn features(&self, observations: &[&Observation]) -> Result<Tensor> {
        let mut data = Vec::with_capacity(observations.len() * self.input.dim());
        for o in observations {
            self.push_features(o, &mut data)?;
        }
        Ok(Tensor::matrix(observations.len(), self.input.dim(), data)?)
    }

    fn dense_eval(&self, x: &Tensor, d: &Dense, tanh: bool) -> Tensor {
        let mut y = matmul(x, self.store.value(d.w));
        let b = self.store.value(d.b).data();
        let n = b.len();
        for row in y.data_mut().chunks_mut(n) {
            for (v, bv) in row.iter_mut().zip(b) {
                *v += bv;
                if tanh {
                    *v = v.tanh();
                }
            }
        }
        y
    }

    fn mlp_eval(&self, x: &Tensor, hidden: &[Dense], out: &Dense) -> Tensor {
        let mut h = x.clone();
        for d in hidden {
            h = self.dense_eval(&h, d, true);
        }
        self.dense_eval(&h, out, false)
    }

    /// Posterior mean and clamped log-std for each input row.
    pub fn encode_rows(&self, x: &Tensor) -> (Tensor, Tensor) {
        let mut h = x.clone();
        for d in &self.layout.encoder {
            h = self.dense_eval(&h, d, true);
        }
        let mean = self.dense_eval(&h, &self.layout.enc_mean, false);
        let log_std = self
            .dense_eval(&h, &self.layout.enc_log_std, false)
            .map(|v| v.clamp(LOG_STD_MIN, LOG_STD_MAX));
        (mean, log_std)
    }

    /// Posterior parameters `(mean, log_std)` for one observation.
    pub fn encode(&self, obs: &Observation) -> Result<(Vec<f64>, Vec<f64>)> {
        let x = self.features(&[obs])?;
        let (m, s) = self.encode_rows(&x);
        Ok((m.into_data(), s.into_data()))
    }

    /// Inference at the posterior mean latent with decoder means.
    pub fn predict_batch(&self, observations: &[&Observation]) -> Result<Vec<Prediction>> {
        if observations.is_empty() {
            return Ok(Vec::new());
        }
        let x = self.features(observations)?;
        let (z, _) = self.encode_rows(&x);
        let l = &self.layout;
        let a = self.mlp_eval(&z, &l.action, &l.action_out);
        let mut v = z.clone();
        for d in &l.value {
            v = self.dense_eval(&v, d, true);
        }
        let v = self.dense_eval(&v, &l.value_mean, false);
        let c = self.mlp_eval(&z, &l.classifier, &l.classifier_out);
        Ok((0..observations.len())
            .map(|i| {
                let mut action = Action::from_slice(a.row_slice(i));
                action.terminate = action.terminate.clamp(0.0, 1.0);
                Prediction {
                    action,
                    value: v.get(i, 0).clamp(-1.0, 1.0),
                    failure_prob: sigmoid(c.get(i, 0)),
                }
            })
            .collect())
    }

    pub fn predict(&self, obs: &Observation) -> Result<Prediction> {
        Ok(self.predict_batch(&[obs])?[0])
    }
}

/// Tape handles for every parameter, recorded once per graph.
pub(crate) struct ParamVars {
    vars: Vec<Var>,
}

impl ParamVars {
    pub fn record(tape: &mut Tape, store: &ParamStore) -> Self {
        Self {
            vars: store.ids().map(|id| tape.param(store, id)).collect(),
        }
    }

    pub fn get(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }

    pub fn dense(&self, tape: &mut Tape, x: Var, d: &Dense, tanh: bool) -> Result<Var> {
        let y = tape.matmul(x, self.get(d.w))?;
        let y = tape.add(y, self.get(d.b))?;
        Ok(if tanh { tape.tanh(y)? } else { y })
    }

    pub fn mlp(&self, tape: &mut Tape, x: Var, hidden: &[Dense], out: &Dense) -> Result<Var> {
        let mut h = x;
        for d in hidden {
            h = self.dense(tape, h, d, true)?;
        }
        self.dense(tape, h, out, false)
    }
}

#[cfg(test)]
mod tests;

use rand::Rng;
use rand_distr::StandardNormal;

use super::{Model, NetError, ParamVars, Result, TrainMode, HUBER_DELTA, LOG_STD_MAX, LOG_STD_MIN};
use crate::grad::{Tape, Tensor, Var};
use crate::trajlog::{Action, Outcome, Trajectory};

/// Expert frames with their demonstrated actions.
#[derive(Debug, Clone, PartialEq)]
pub struct ExpertBatch {
    pub(crate) features: Tensor,
    pub(crate) actions: Tensor,
}

impl ExpertBatch {
    pub fn new(model: &Model, steps: &[(&Trajectory, usize)]) -> Result<Self> {
        let mut feats = Vec::with_capacity(steps.len() * model.input.dim());
        let mut acts = Vec::with_capacity(steps.len() * Action::DIM);
        for &(t, i) in steps {
            if !t.provenance.is_expert() {
                return Err(NetError::NonExpertStep(t.episode_id.clone()));
            }
            let s = &t.steps[i];
            model.push_features(&s.observation, &mut feats)?;
            acts.extend(s.action.to_array());
        }
        Self::from_parts(
            Tensor::matrix(steps.len(), model.input.dim(), feats)?,
            Tensor::matrix(steps.len(), Action::DIM, acts)?,
        )
    }

    /// Batch from precomputed network inputs `[n, input]` and actions `[n, 4]`.
    pub fn from_parts(features: Tensor, actions: Tensor) -> Result<Self> {
        if features.rows() != actions.rows() || actions.cols() != Action::DIM || features.rows() == 0 {
            return Err(NetError::InputMismatch(format!(
                "expert batch shapes {:?} and {:?}",
                features.shape(),
                actions.shape()
            )));
        }
        Ok(Self { features, actions })
    }

    pub fn len(&self) -> usize {
        self.features.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// One frame for the value or classifier loss.
#[derive(Debug, Clone, Copy)]
pub struct LabeledRow<'a> {
    pub trajectory: &'a Trajectory,
    pub step: usize,
    pub ret: Option<f64>,
}

/// Frames with optional discounted returns and episode failure labels.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledBatch {
    pub(crate) features: Tensor,
    pub(crate) returns: Vec<Option<f64>>,
    pub(crate) failure: Vec<Option<f64>>,
    origin: Vec<(String, usize)>,
}

impl LabeledBatch {
    pub fn new(model: &Model, rows: &[LabeledRow<'_>]) -> Result<Self> {
        let mut feats = Vec::with_capacity(rows.len() * model.input.dim());
        let mut returns = Vec::with_capacity(rows.len());
        let mut failure = Vec::with_capacity(rows.len());
        let mut origin = Vec::with_capacity(rows.len());
        for r in rows {
            model.push_features(&r.trajectory.steps[r.step].observation, &mut feats)?;
            returns.push(r.ret);
            failure.push(match r.trajectory.outcome {
                Outcome::Success => Some(0.0),
                Outcome::Failure(_) => Some(1.0),
                Outcome::AskedForHelp => None,
            });
            origin.push((r.trajectory.episode_id.clone(), r.step));
        }
        let features = Tensor::matrix(rows.len(), model.input.dim(), feats)?;
        Ok(Self {
            features,
            returns,
            failure,
            origin,
        })
    }

    pub fn from_parts(features: Tensor, returns: Vec<Option<f64>>, failure: Vec<Option<f64>>) -> Result<Self> {
        let n = features.rows();
        if returns.len() != n || failure.len() != n || n == 0 {
            return Err(NetError::InputMismatch("labeled batch lengths differ".into()));
        }
        Ok(Self {
            features,
            returns,
            failure,
            origin: (0..n).map(|i| (String::new(), i)).collect(),
        })
    }

    pub fn len(&self) -> usize {
        self.features.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn targets(&self, labels: &[Option<f64>], what: &'static str, repeat: usize) -> Result<Tensor> {
        let mut col = Vec::with_capacity(labels.len());
        for (i, l) in labels.iter().enumerate() {
            let Some(v) = l else {
                let (id, step) = &self.origin[i];
                return Err(NetError::Unlabeled {
                    episode_id: id.clone(),
                    step: *step,
                    what,
                });
            };
            col.push(*v);
        }
        Ok(Tensor::column(col.repeat(repeat)))
    }
}

/// Standard-normal noise for one loss evaluation, drawn outside the tape.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseDraw {
    /// `[S * expert_rows, latent_dim]`
    pub expert_latent: Tensor,
    /// `[S * labeled_rows, latent_dim]`
    pub labeled_latent: Tensor,
    /// `[S * labeled_rows, 1]`
    pub value: Tensor,
}

impl NoiseDraw {
    pub fn sample<R: Rng>(rng: &mut R, samples: usize, latent: usize, expert_rows: usize, labeled_rows: usize) -> Self {
        let mut draw = |r: usize, c: usize| {
            let d: Vec<f64> = (0..r * c).map(|_| rng.sample(StandardNormal)).collect();
            Tensor::matrix(r, c, d).expect("noise shape")
        };
        let expert_latent = draw(samples * expert_rows, latent);
        let labeled_latent = draw(samples * labeled_rows, latent);
        let value = draw(samples * labeled_rows, 1);
        Self {
            expert_latent,
            labeled_latent,
            value,
        }
    }

    pub fn zeros(samples: usize, latent: usize, expert_rows: usize, labeled_rows: usize) -> Self {
        Self {
            expert_latent: Tensor::zeros(&[samples * expert_rows, latent]),
            labeled_latent: Tensor::zeros(&[samples * labeled_rows, latent]),
            value: Tensor::zeros(&[samples * labeled_rows, 1]),
        }
    }

    pub fn for_model<R: Rng>(rng: &mut R, model: &Model, expert_rows: usize, labeled_rows: usize) -> Self {
        Self::sample(
            rng,
            model.config.mc_samples,
            model.config.latent_dim,
            expert_rows,
            labeled_rows,
        )
    }
}

/// Learned mixture-of-Gaussians prior over the latent.
#[derive(Debug, Clone, PartialEq)]
pub struct MixturePrior {
    /// `[1, K]` unnormalized component log-weights.
    pub logits: Tensor,
    /// `[K, d]`
    pub means: Tensor,
    /// `[K, d]`, clamped at use.
    pub log_stds: Tensor,
}

/// Handles of the loss terms on a tape. Absent terms were not part of the
/// objective for the chosen mode.
#[derive(Debug, Clone, Copy)]
pub struct LossGraph {
    pub total: Var,
    pub bc: Option<Var>,
    pub value: Option<Var>,
    pub classifier: Option<Var>,
    pub kl: Var,
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LossTerms {
    pub total: f64,
    pub bc: Option<f64>,
    pub value: Option<f64>,
    pub classifier: Option<f64>,
    pub kl: f64,
}

impl LossGraph {
    pub fn terms(&self, tape: &Tape) -> LossTerms {
        let v = |x: Var| tape.value(x).item();
        LossTerms {
            total: v(self.total),
            bc: self.bc.map(v),
            value: self.value.map(v),
            classifier: self.classifier.map(v),
            kl: v(self.kl),
        }
    }
}

/// `bc + lambda * aux + beta * kl`, evaluated in that order.
pub fn combine(bc: f64, aux: f64, kl: f64, lambda: f64, beta: f64) -> f64 {
    bc + lambda * aux + beta * kl
}

struct Latent {
    z: Var,
    mean: Var,
    log_std: Var,
}

fn log_prior(tape: &mut Tape, z: Var, logits: Var, means: Var, log_stds: Var) -> Result<Var> {
    let ls = tape.clamp(log_stds, LOG_STD_MIN, LOG_STD_MAX)?;
    let pw = tape.pairwise_gaussian_log_prob(z, means, ls)?;
    let norm = tape.log_sum_exp(logits)?;
    let log_w = tape.sub(logits, norm)?;
    let joint = tape.add(pw, log_w)?;
    Ok(tape.log_sum_exp(joint)?)
}

/// Per-sample `log q(z|s) - log r(z)`, `[n, 1]`.
fn kl_rows(tape: &mut Tape, lat: &Latent, logits: Var, means: Var, log_stds: Var) -> Result<Var> {
    let log_q = tape.diag_gaussian_log_prob(lat.z, lat.mean, lat.log_std)?;
    let log_r = log_prior(tape, lat.z, logits, means, log_stds)?;
    Ok(tape.sub(log_q, log_r)?)
}

/// Monte-Carlo terms `log q(z_i) - log r(z_i)` for `z_i = mean + exp(log_std) * noise_i`
/// with a single posterior `(mean, log_std)` and one row of `noise` per sample.
pub fn mc_kl_samples(mean: &[f64], log_std: &[f64], prior: &MixturePrior, noise: &Tensor) -> Result<Vec<f64>> {
    let n = noise.rows();
    let d = mean.len();
    let mut tape = Tape::new();
    let m = tape.constant(Tensor::matrix(n, d, mean.repeat(n))?);
    let s = tape.constant(Tensor::matrix(n, d, log_std.repeat(n))?);
    let z = tape.gaussian_reparam_sample(m, s, noise.clone())?;
    let logits = tape.constant(prior.logits.clone());
    let means = tape.constant(prior.means.clone());
    let log_stds = tape.constant(prior.log_stds.clone());
    let lat = Latent { z, mean: m, log_std: s };
    let rows = kl_rows(&mut tape, &lat, logits, means, log_stds)?;
    Ok(tape.value(rows).data().to_vec())
}

struct Graph<'a> {
    model: &'a Model,
    pv: ParamVars,
}

impl Graph<'_> {
    fn latent(&self, tape: &mut Tape, features: &Tensor, noise: &Tensor) -> Result<Latent> {
        let l = &self.model.layout;
        let s = self.model.config.mc_samples;
        let mut h = tape.constant(features.clone());
        for d in &l.encoder {
            h = self.pv.dense(tape, h, d, true)?;
        }
        let mean = self.pv.dense(tape, h, &l.enc_mean, false)?;
        let log_std = self.pv.dense(tape, h, &l.enc_log_std, false)?;
        let log_std = tape.clamp(log_std, LOG_STD_MIN, LOG_STD_MAX)?;
        let mean = tape.repeat_rows(mean, s)?;
        let log_std = tape.repeat_rows(log_std, s)?;
        let z = tape.gaussian_reparam_sample(mean, log_std, noise.clone())?;
        Ok(Latent { z, mean, log_std })
    }

    fn bc(&self, tape: &mut Tape, lat: &Latent, batch: &ExpertBatch) -> Result<Var> {
        let l = &self.model.layout;
        let s = self.model.config.mc_samples;
        let pred = self.pv.mlp(tape, lat.z, &l.action, &l.action_out)?;
        let n = batch.len();
        let target = Tensor::matrix(n * s, Action::DIM, batch.actions.data().repeat(s))?;
        let target = tape.constant(target);
        let r = tape.sub(pred, target)?;
        let h = tape.huber(r, HUBER_DELTA)?;
        let m = tape.mean(h)?;
        Ok(tape.scale(m, Action::DIM as f64)?)
    }

    fn value(&self, tape: &mut Tape, lat: &Latent, batch: &LabeledBatch, noise: &Tensor) -> Result<Var> {
        let l = &self.model.layout;
        let s = self.model.config.mc_samples;
        let target = batch.targets(&batch.returns, "return", s)?;
        let mut h = lat.z;
        for d in &l.value {
            h = self.pv.dense(tape, h, d, true)?;
        }
        let mean = self.pv.dense(tape, h, &l.value_mean, false)?;
        let log_std = self.pv.dense(tape, h, &l.value_log_std, false)?;
        let log_std = tape.clamp(log_std, LOG_STD_MIN, LOG_STD_MAX)?;
        let v = tape.gaussian_reparam_sample(mean, log_std, noise.clone())?;
        let target = tape.constant(target);
        let r = tape.sub(v, target)?;
        let h = tape.huber(r, HUBER_DELTA)?;
        Ok(tape.mean(h)?)
    }

    fn classifier(&self, tape: &mut Tape, lat: &Latent, batch: &LabeledBatch) -> Result<Var> {
        let l = &self.model.layout;
        let s = self.model.config.mc_samples;
        let y = batch.targets(&batch.failure, "outcome", s)?;
        let logit = self.pv.mlp(tape, lat.z, &l.classifier, &l.classifier_out)?;
        let sp = tape.softplus(logit)?;
        let y = tape.constant(y);
        let yl = tape.mul(logit, y)?;
        let bce = tape.sub(sp, yl)?;
        Ok(tape.mean(bce)?)
    }

    fn kl(&self, tape: &mut Tape, latents: &[&Latent]) -> Result<Var> {
        let l = &self.model.layout;
        let logits = self.pv.get(l.prior_logits);
        let means = self.pv.get(l.prior_means);
        let log_stds = self.pv.get(l.prior_log_stds);
        let mut total: Option<Var> = None;
        let mut rows = 0;
        for lat in latents {
            let k = kl_rows(tape, lat, logits, means, log_stds)?;
            rows += tape.value(k).rows();
            let s = tape.sum(k)?;
            total = Some(match total {
                Some(t) => tape.add(t, s)?,
                None => s,
            });
        }
        let total = total.ok_or(NetError::MissingBatch("expert or labeled"))?;
        Ok(tape.scale(total, 1.0 / rows as f64)?)
    }
}

fn check_noise(model: &Model, noise: &Tensor, rows: usize, cols: usize, what: &str) -> Result<()> {
    let want = [model.config.mc_samples * rows, cols];
    if noise.shape() != want {
        return Err(NetError::InputMismatch(format!(
            "{what} noise shape {:?}, expected {want:?}",
            noise.shape()
        )));
    }
    Ok(())
}

impl Model {
    /// Records the training objective for `mode` on `tape`. The bottleneck
    /// penalty covers every batch given. `Bcva` and `Classifier` need both
    /// batches; `Policy` ignores any labeled batch.
    pub fn loss_graph(
        &self,
        tape: &mut Tape,
        expert: Option<&ExpertBatch>,
        labeled: Option<&LabeledBatch>,
        noise: &NoiseDraw,
        mode: TrainMode,
    ) -> Result<LossGraph> {
        let labeled = if mode == TrainMode::Policy { None } else { labeled };
        self.graph_parts(tape, expert, labeled, noise, Some(mode))
    }

    fn graph_parts(
        &self,
        tape: &mut Tape,
        expert: Option<&ExpertBatch>,
        labeled: Option<&LabeledBatch>,
        noise: &NoiseDraw,
        mode: Option<TrainMode>,
    ) -> Result<LossGraph> {
        let d = self.config.latent_dim;
        let g = Graph {
            model: self,
            pv: ParamVars::record(tape, &self.store),
        };
        let mut latents = Vec::new();
        let mut bc = None;
        if let Some(b) = expert {
            check_noise(self, &noise.expert_latent, b.len(), d, "expert latent")?;
            let lat = g.latent(tape, &b.features, &noise.expert_latent)?;
            bc = Some(g.bc(tape, &lat, b)?);
            latents.push(lat);
        }
        let (mut value, mut classifier) = (None, None);
        if let Some(b) = labeled {
            check_noise(self, &noise.labeled_latent, b.len(), d, "labeled latent")?;
            let lat = g.latent(tape, &b.features, &noise.labeled_latent)?;
            match mode {
                Some(TrainMode::Bcva) => {
                    check_noise(self, &noise.value, b.len(), 1, "value")?;
                    value = Some(g.value(tape, &lat, b, &noise.value)?);
                }
                Some(TrainMode::Classifier) => classifier = Some(g.classifier(tape, &lat, b)?),
                _ => {}
            }
            latents.push(lat);
        }
        let refs: Vec<&Latent> = latents.iter().collect();
        let kl = g.kl(tape, &refs)?;
        let total = match mode {
            None => kl,
            Some(mode) => {
                let bc = bc.ok_or(NetError::MissingBatch("expert"))?;
                let aux = match mode {
                    TrainMode::Bcva => Some(value.ok_or(NetError::MissingBatch("labeled"))?),
                    TrainMode::Classifier => Some(classifier.ok_or(NetError::MissingBatch("labeled"))?),
                    TrainMode::Policy => None,
                };
                let mut t = bc;
                if let Some(a) = aux {
                    let a = tape.scale(a, self.config.lambda)?;
                    t = tape.add(t, a)?;
                }
                let k = tape.scale(kl, self.config.beta)?;
                tape.add(t, k)?
            }
        };
        Ok(LossGraph {
            total,
            bc,
            value,
            classifier,
            kl,
        })
    }

    /// Huber behavioral-cloning loss, summed over action dimensions and
    /// averaged over frames and latent samples.
    pub fn loss_bc(&self, expert: &ExpertBatch, noise: &NoiseDraw) -> Result<f64> {
        let mut tape = Tape::new();
        let g = self.graph_parts(&mut tape, Some(expert), None, noise, Some(TrainMode::Policy))?;
        Ok(tape.value(g.bc.expect("expert batch given")).item())
    }

    /// Huber loss between sampled values and discounted returns.
    pub fn loss_value(&self, labeled: &LabeledBatch, noise: &NoiseDraw) -> Result<f64> {
        let mut tape = Tape::new();
        let g = Graph {
            model: self,
            pv: ParamVars::record(&mut tape, &self.store),
        };
        check_noise(self, &noise.labeled_latent, labeled.len(), self.config.latent_dim, "labeled latent")?;
        check_noise(self, &noise.value, labeled.len(), 1, "value")?;
        let lat = g.latent(&mut tape, &labeled.features, &noise.labeled_latent)?;
        let v = g.value(&mut tape, &lat, labeled, &noise.value)?;
        Ok(tape.value(v).item())
    }

    /// Binary cross-entropy of the failure logit against episode outcomes.
    pub fn loss_classifier(&self, labeled: &LabeledBatch, noise: &NoiseDraw) -> Result<f64> {
        let mut tape = Tape::new();
        let g = Graph {
            model: self,
            pv: ParamVars::record(&mut tape, &self.store),
        };
        check_noise(self, &noise.labeled_latent, labeled.len(), self.config.latent_dim, "labeled latent")?;
        let lat = g.latent(&mut tape, &labeled.features, &noise.labeled_latent)?;
        let c = g.classifier(&mut tape, &lat, labeled)?;
        Ok(tape.value(c).item())
    }

    /// Monte-Carlo bottleneck penalty over the union of the given batches.
    pub fn loss_kl(&self, expert: Option<&ExpertBatch>, labeled: Option<&LabeledBatch>, noise: &NoiseDraw) -> Result<f64> {
        let mut tape = Tape::new();
        let g = self.graph_parts(&mut tape, expert, labeled, noise, None)?;
        Ok(tape.value(g.kl).item())
    }

    pub fn loss_combined(&self, expert: &ExpertBatch, labeled: &LabeledBatch, noise: &NoiseDraw) -> Result<LossTerms> {
        let mut tape = Tape::new();
        let g = self.loss_graph(&mut tape, Some(expert), Some(labeled), noise, TrainMode::Bcva)?;
        Ok(g.terms(&tape))
    }

    pub fn prior(&self) -> MixturePrior {
        let l = &self.layout;
        MixturePrior {
            logits: self.store.value(l.prior_logits).clone(),
            means: self.store.value(l.prior_means).clone(),
            log_stds: self.store.value(l.prior_log_stds).clone(),
        }
    }
}

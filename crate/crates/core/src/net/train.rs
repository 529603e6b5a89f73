use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{ExpertBatch, LabeledBatch, LabeledRow, Model, NetError, NoiseDraw, Result, TrainMode};
use crate::grad::{AdamConfig, Tape};
use crate::returns::LabeledDataset;
use crate::trajlog::Trajectory;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lr: f64,
    /// Frames per batch; each step draws one expert and one labeled batch.
    pub batch_size: usize,
    pub epochs: usize,
    pub steps_per_epoch: usize,
    pub seed: u64,
    pub mode: TrainMode,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            batch_size: 64,
            epochs: 10,
            steps_per_epoch: 100,
            seed: 0,
            mode: TrainMode::Bcva,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite())
            || self.batch_size == 0
            || self.epochs == 0
            || self.steps_per_epoch == 0
        {
            return Err(NetError::InvalidConfig(
                "lr, batch_size, epochs and steps_per_epoch must be positive".into(),
            ));
        }
        Ok(())
    }
}

/// Trajectories available to one training run.
#[derive(Debug, Clone, Default)]
pub struct TrainData<'a> {
    /// Expert demonstrations, the only source for the cloning loss.
    pub expert: Vec<&'a Trajectory>,
    /// Episodes with a known outcome, with returns when labeled.
    pub labeled: Vec<(&'a Trajectory, Option<&'a [f64]>)>,
}

impl<'a> TrainData<'a> {
    /// Expert demos from `data` feed the cloning loss; every episode with a
    /// known outcome feeds the value or classifier loss.
    pub fn from_labeled(data: &'a LabeledDataset) -> Self {
        let mut out = Self::default();
        for (t, r) in data.dataset.trajectories.iter().zip(&data.returns) {
            if t.provenance.is_expert() {
                out.expert.push(t);
            }
            if t.outcome.is_labeled() {
                out.labeled.push((t, r.as_deref()));
            }
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub total: f64,
    pub bc: f64,
    pub value: Option<f64>,
    pub classifier: Option<f64>,
    pub kl: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub curve: Vec<EpochRecord>,
    pub steps: u64,
}

/// Minibatch Adam on the objective for `config.mode`. Batches are drawn with
/// replacement from a generator seeded by `config.seed`, so a run is fully
/// determined by the model, the data order and the config.
pub fn train(model: &mut Model, data: &TrainData<'_>, config: &TrainConfig) -> Result<TrainReport> {
    config.validate()?;
    let expert: Vec<(&Trajectory, usize)> = data
        .expert
        .iter()
        .flat_map(|t| (0..t.steps.len()).map(move |i| (*t, i)))
        .collect();
    if expert.is_empty() {
        return Err(NetError::EmptyData("no expert frames".into()));
    }
    let labeled: Vec<LabeledRow<'_>> = data
        .labeled
        .iter()
        .flat_map(|&(t, r)| {
            (0..t.steps.len()).map(move |i| LabeledRow {
                trajectory: t,
                step: i,
                ret: r.map(|r| r[i]),
            })
        })
        .collect();
    let needs_labeled = config.mode != TrainMode::Policy;
    if needs_labeled && labeled.is_empty() {
        return Err(NetError::EmptyData("no labeled frames".into()));
    }
    let adam = AdamConfig {
        lr: config.lr,
        ..AdamConfig::default()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let b = config.batch_size;
    let bl = if needs_labeled { b } else { 0 };
    let mut curve = Vec::with_capacity(config.epochs);
    for epoch in 1..=config.epochs {
        let mut acc = EpochRecord {
            epoch,
            total: 0.0,
            bc: 0.0,
            value: None,
            classifier: None,
            kl: 0.0,
        };
        for _ in 0..config.steps_per_epoch {
            let e_rows: Vec<_> = (0..b).map(|_| expert[rng.random_range(0..expert.len())]).collect();
            let eb = ExpertBatch::new(model, &e_rows)?;
            let lb = if needs_labeled {
                let rows: Vec<_> = (0..bl).map(|_| labeled[rng.random_range(0..labeled.len())]).collect();
                Some(LabeledBatch::new(model, &rows)?)
            } else {
                None
            };
            let noise = NoiseDraw::for_model(&mut rng, model, b, bl);
            let mut tape = Tape::new();
            let g = model.loss_graph(&mut tape, Some(&eb), lb.as_ref(), &noise, config.mode)?;
            let t = g.terms(&tape);
            tape.backward(g.total, &mut model.store)?;
            drop(tape);
            model.store.adam_step(&adam)?;
            acc.total += t.total;
            acc.bc += t.bc.unwrap_or(0.0);
            acc.kl += t.kl;
            if let Some(v) = t.value {
                *acc.value.get_or_insert(0.0) += v;
            }
            if let Some(c) = t.classifier {
                *acc.classifier.get_or_insert(0.0) += c;
            }
        }
        let n = config.steps_per_epoch as f64;
        acc.total /= n;
        acc.bc /= n;
        acc.kl /= n;
        acc.value = acc.value.map(|v| v / n);
        acc.classifier = acc.classifier.map(|v| v / n);
        log::debug!("epoch {epoch}: loss {:.5}", acc.total);
        curve.push(acc);
    }
    Ok(TrainReport {
        curve,
        steps: model.store.steps(),
    })
}

use super::Model;
use crate::doorsim::{Decision, DoorWorldConfig, DoorsimError, Policy, WorldState};
use crate::trajlog::{Observation, Provenance};

/// Drives the door world from observations alone, reporting the value and
/// failure probability alongside each action.
#[derive(Debug, Clone)]
pub struct ModelPolicy<'a> {
    pub model: &'a Model,
    pub policy_id: String,
}

impl<'a> ModelPolicy<'a> {
    pub fn new(model: &'a Model, policy_id: impl Into<String>) -> Self {
        Self {
            model,
            policy_id: policy_id.into(),
        }
    }
}

impl Policy for ModelPolicy<'_> {
    fn provenance(&self) -> Provenance {
        Provenance::PolicyRollout {
            policy_id: self.policy_id.clone(),
        }
    }

    fn act(&mut self, _: &WorldState, observation: &Observation, _: &DoorWorldConfig) -> Result<Decision, DoorsimError> {
        let p = self
            .model
            .predict(observation)
            .map_err(|e| DoorsimError::Policy(e.to_string()))?;
        Ok(Decision {
            action: p.action,
            value: Some(p.value),
            failure_prob: Some(p.failure_prob),
        })
    }
}

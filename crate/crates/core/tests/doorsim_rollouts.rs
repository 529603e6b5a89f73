use std::collections::BTreeMap;

use bcva_core::doorsim::{
    reset, rollout, step, Decision, DoorWorldConfig, DoorsimError, ExpertConfig, NoisyExpert,
    Policy, ScriptedExpert, WorldState,
};
use bcva_core::helpgate::{GateConfig, GateSignal};
use bcva_core::trajlog::{Action, Observation, ObservationSpec, Outcome, Provenance};

fn spec() -> ObservationSpec {
    ObservationSpec::new(32, 32, 1).unwrap()
}

#[test]
fn expert_succeeds_on_500_seeds() {
    let cfg = DoorWorldConfig::default();
    let mut expert = ScriptedExpert::default();
    let mut lengths = Vec::new();
    for seed in 0..500 {
        let t = rollout(&mut expert, &cfg, &spec(), seed, "demo", None).unwrap();
        assert_eq!(t.outcome, Outcome::Success, "seed {seed}");
        assert_eq!(t.provenance, Provenance::ExpertDemo);
        lengths.push(t.len());
    }
    let max = lengths.iter().max().unwrap();
    assert!(*max < cfg.max_steps as usize, "longest demo {max}");
}

#[test]
fn noisy_expert_fails_between_20_and_80_percent() {
    let cfg = DoorWorldConfig::default();
    let mut policy = NoisyExpert::new(ExpertConfig {
        noise_std: 0.5,
        ..ExpertConfig::default()
    })
    .unwrap();
    let mut counts: BTreeMap<String, usize> = BTreeMap::new();
    let mut failures = 0;
    for seed in 0..500 {
        let t = rollout(&mut policy, &cfg, &spec(), seed, "r", None).unwrap();
        failures += usize::from(t.outcome.is_failure());
        *counts.entry(format!("{:?}", t.outcome)).or_default() += 1;
    }
    let frac = failures as f64 / 500.0;
    println!("failure fraction {frac}, outcomes {counts:?}");
    assert!((0.2..=0.8).contains(&frac), "failure fraction {frac}, {counts:?}");
}

#[test]
fn rollouts_are_bit_identical() {
    let cfg = DoorWorldConfig::default();
    let ecfg = ExpertConfig {
        noise_std: 0.5,
        ..ExpertConfig::default()
    };
    for seed in [3, 17, 99] {
        let a = rollout(&mut NoisyExpert::new(ecfg).unwrap(), &cfg, &spec(), seed, "x", None).unwrap();
        let b = rollout(&mut NoisyExpert::new(ecfg).unwrap(), &cfg, &spec(), seed, "x", None).unwrap();
        assert_eq!(a, b);
    }
}

#[test]
fn terminal_state_is_first_violation() {
    let cfg = DoorWorldConfig::default();
    let ecfg = ExpertConfig {
        noise_std: 0.5,
        ..ExpertConfig::default()
    };
    let mut policy = NoisyExpert::new(ecfg).unwrap();
    for seed in 0..50 {
        let t = rollout(&mut policy, &cfg, &spec(), seed, "x", None).unwrap();
        // Replay the recorded actions: no outcome before the last step.
        let mut s = reset(&cfg, seed).unwrap();
        let n = t.len();
        for (i, st) in t.steps.iter().enumerate().take(n - 1) {
            let (next, o) = step(&s, &st.action, &cfg);
            if i + 1 < n - 1 {
                assert_eq!(o, None, "seed {seed} step {i}");
            } else {
                assert_eq!(o, Some(t.outcome), "seed {seed}");
            }
            s = next;
        }
    }
}

struct Pessimist;

impl Policy for Pessimist {
    fn provenance(&self) -> Provenance {
        Provenance::PolicyRollout {
            policy_id: "pessimist".into(),
        }
    }

    fn act(&mut self, _: &WorldState, _: &Observation, _: &DoorWorldConfig) -> Result<Decision, DoorsimError> {
        Ok(Decision {
            action: Action::default(),
            value: Some(-1.0),
            failure_prob: None,
        })
    }
}

#[test]
fn gate_firing_at_first_frame_asks_for_help() {
    let cfg = DoorWorldConfig::default();
    let gate = GateConfig::new(0.0, 1, GateSignal::ValueHead).unwrap();
    let t = rollout(&mut Pessimist, &cfg, &spec(), 5, "g", Some(&gate)).unwrap();
    assert_eq!(t.outcome, Outcome::AskedForHelp);
    assert_eq!(t.len(), 1);

    let cls = GateConfig::new(0.5, 1, GateSignal::ClassifierHead).unwrap();
    assert!(matches!(
        rollout(&mut Pessimist, &cfg, &spec(), 5, "g", Some(&cls)),
        Err(DoorsimError::MissingSignal(_))
    ));
}

#[test]
fn zero_action_policy_times_out() {
    let cfg = DoorWorldConfig {
        max_steps: 12,
        ..DoorWorldConfig::default()
    };
    let mut p = Pessimist;
    let t = rollout(&mut p, &cfg, &spec(), 1, "t", None).unwrap();
    assert_eq!(t.outcome, Outcome::Failure(bcva_core::trajlog::FailureMode::Timeout));
    assert_eq!(t.len(), 13);
    let first = &t.steps[0].observation;
    assert!(t.steps.iter().all(|s| &s.observation == first));
}

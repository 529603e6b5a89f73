use super::*;
use crate::trajlog::tests::traj;
use crate::trajlog::{FailureMode, Outcome, Provenance};

fn tiny_config() -> ModelConfig {
    ModelConfig {
        latent_dim: 3,
        encoder_hidden: vec![5, 4],
        action_hidden: [4, 3],
        value_hidden: [3, 3, 3],
        prior_components: 2,
        mc_samples: 2,
        ..ModelConfig::default()
    }
}

fn spec() -> ObservationSpec {
    ObservationSpec::new(2, 2, 1).unwrap()
}

fn tiny_model() -> Model {
    let input = InputSpec {
        observation: spec(),
        joints: 1,
    };
    Model::new(tiny_config(), input, 11).unwrap()
}

fn set(model: &mut Model, name: &str, f: impl Fn(usize) -> f64) {
    let id = model.store.id(name).unwrap();
    for (i, v) in model.store.value_mut(id).data_mut().iter_mut().enumerate() {
        *v = f(i);
    }
}

fn features(n: usize, dim: usize) -> Tensor {
    let d = (0..n * dim).map(|i| ((i * 7) % 11) as f64 / 11.0 - 0.3).collect();
    Tensor::matrix(n, dim, d).unwrap()
}

#[test]
fn encode_shapes_and_determinism() {
    let m = tiny_model();
    let t = traj(&spec(), "a", 3, Outcome::Success);
    let o = &t.steps[1].observation;
    let (mean, ls) = m.encode(o).unwrap();
    assert_eq!((mean.len(), ls.len()), (3, 3));
    assert_eq!(m.encode(o).unwrap(), (mean, ls));
}

#[test]
fn zero_weights_give_bias_outputs() {
    let mut m = tiny_model();
    let names: Vec<String> = m.store.iter().map(|(n, _)| n.to_string()).collect();
    for n in names.iter().filter(|n| n.ends_with(".w")) {
        set(&mut m, n, |_| 0.0);
    }
    set(&mut m, "encoder.log_std.b", |i| -0.5 - i as f64);
    let t = traj(&spec(), "a", 2, Outcome::Success);
    let (mean, ls) = m.encode(&t.steps[0].observation).unwrap();
    assert_eq!(mean, vec![0.0; 3]);
    assert_eq!(ls, vec![-0.5, -1.5, -2.5]);
}

#[test]
fn encode_rejects_wrong_shape() {
    let m = tiny_model();
    let other = ObservationSpec::new(3, 2, 1).unwrap();
    let t = traj(&other, "a", 2, Outcome::Success);
    assert!(matches!(m.encode(&t.steps[0].observation), Err(NetError::InputMismatch(_))));
}

fn constant_action_head(m: &mut Model, bias: [f64; 4]) {
    set(m, "action.out.w", |_| 0.0);
    set(m, "action.out.b", |i| bias[i]);
}

#[test]
fn bc_loss_hand_values() {
    let mut m = tiny_model();
    let dim = m.input.dim();
    constant_action_head(&mut m, [0.3, -0.2, 1.0, 0.0]);
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let noise = NoiseDraw::for_model(&mut rng, &m, 4, 1);
    let exact = Tensor::matrix(4, 4, [0.3, -0.2, 1.0, 0.0].repeat(4)).unwrap();
    let b = ExpertBatch::from_parts(features(4, dim), exact).unwrap();
    assert_eq!(m.loss_bc(&b, &noise).unwrap(), 0.0);
    let off = Tensor::matrix(4, 4, [0.8, -0.2, 1.0, 0.0].repeat(4)).unwrap();
    let b = ExpertBatch::from_parts(features(4, dim), off).unwrap();
    assert!((m.loss_bc(&b, &noise).unwrap() - 0.125).abs() < 1e-15);
}

#[test]
fn expert_batch_rejects_rollouts() {
    let m = tiny_model();
    let t = traj(&spec(), "r", 3, Outcome::Failure(FailureMode::Collision));
    assert!(matches!(t.provenance, Provenance::PolicyRollout { .. }));
    assert!(matches!(ExpertBatch::new(&m, &[(&t, 0)]), Err(NetError::NonExpertStep(_))));
}

#[test]
fn value_loss_constant_predictor() {
    let mut m = tiny_model();
    let dim = m.input.dim();
    set(&mut m, "value.mean.w", |_| 0.0);
    set(&mut m, "value.mean.b", |_| 0.0);
    let noise = NoiseDraw::zeros(2, 3, 1, 4);
    let b = LabeledBatch::from_parts(
        features(4, dim),
        vec![Some(1.0), Some(-1.0), Some(1.0), Some(-1.0)],
        vec![Some(0.0), Some(1.0), Some(0.0), Some(1.0)],
    )
    .unwrap();
    assert_eq!(m.loss_value(&b, &noise).unwrap(), 0.5);

    let unlabeled = LabeledBatch::from_parts(features(2, dim), vec![Some(1.0), None], vec![Some(0.0); 2]).unwrap();
    let noise = NoiseDraw::zeros(2, 3, 1, 2);
    assert!(matches!(m.loss_value(&unlabeled, &noise), Err(NetError::Unlabeled { .. })));
}

#[test]
fn classifier_loss_hand_values() {
    let mut m = tiny_model();
    let dim = m.input.dim();
    set(&mut m, "classifier.out.w", |_| 0.0);
    set(&mut m, "classifier.out.b", |_| 0.0);
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let noise = NoiseDraw::for_model(&mut rng, &m, 1, 3);
    let b = LabeledBatch::from_parts(features(3, dim), vec![None; 3], vec![Some(1.0), Some(0.0), Some(1.0)]).unwrap();
    let l = m.loss_classifier(&b, &noise).unwrap();
    assert!((l - std::f64::consts::LN_2).abs() < 1e-15);
    set(&mut m, "classifier.out.b", |_| 40.0);
    let pos = LabeledBatch::from_parts(features(3, dim), vec![None; 3], vec![Some(1.0); 3]).unwrap();
    assert!(m.loss_classifier(&pos, &noise).unwrap() < 1e-15);
}

#[test]
fn combined_weighting() {
    assert!((combine(0.2, 0.1, 1000.0, 0.5, 1e-6) - 0.251).abs() < 1e-15);
    let cfg = ModelConfig::default();
    assert_eq!((cfg.lambda, cfg.beta), (0.5, 1e-6));

    let mut m = tiny_model();
    m.config.lambda = 0.0;
    m.config.beta = 0.0;
    let dim = m.input.dim();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let noise = NoiseDraw::for_model(&mut rng, &m, 3, 4);
    let eb = ExpertBatch::from_parts(features(3, dim), Tensor::full(&[3, 4], 0.4)).unwrap();
    let lb = LabeledBatch::from_parts(features(4, dim), vec![Some(0.5); 4], vec![Some(0.0); 4]).unwrap();
    let t = m.loss_combined(&eb, &lb, &noise).unwrap();
    assert_eq!(t.total, t.bc.unwrap());
    assert_eq!(t.total, m.loss_bc(&eb, &noise).unwrap());
}

#[test]
fn combined_matches_component_losses() {
    let m = tiny_model();
    let dim = m.input.dim();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let noise = NoiseDraw::for_model(&mut rng, &m, 3, 4);
    let eb = ExpertBatch::from_parts(features(3, dim), Tensor::full(&[3, 4], 0.4)).unwrap();
    let lb = LabeledBatch::from_parts(features(4, dim), vec![Some(-0.5); 4], vec![Some(1.0); 4]).unwrap();
    let t = m.loss_combined(&eb, &lb, &noise).unwrap();
    let bc = m.loss_bc(&eb, &noise).unwrap();
    let v = m.loss_value(&lb, &noise).unwrap();
    let kl = m.loss_kl(Some(&eb), Some(&lb), &noise).unwrap();
    assert_eq!(t.bc, Some(bc));
    assert_eq!(t.value, Some(v));
    assert_eq!(t.kl, kl);
    assert_eq!(t.total, combine(bc, v, kl, 0.5, 1e-6));
}

#[test]
fn rollouts_only_reach_value_and_kl_terms() {
    let m = tiny_model();
    let dim = m.input.dim();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let noise = NoiseDraw::for_model(&mut rng, &m, 3, 4);
    let eb = ExpertBatch::from_parts(features(3, dim), Tensor::full(&[3, 4], 0.1)).unwrap();
    let with_rollouts = LabeledBatch::from_parts(
        features(4, dim),
        vec![Some(0.9), Some(-0.7), Some(0.8), Some(-0.6)],
        vec![Some(0.0), Some(1.0), Some(0.0), Some(1.0)],
    )
    .unwrap();
    let mut f = features(4, dim);
    f.data_mut()[dim..2 * dim].iter_mut().for_each(|v| *v += 0.5);
    let experts_only = LabeledBatch::from_parts(f, vec![Some(0.9); 4], vec![Some(0.0); 4]).unwrap();
    let a = m.loss_combined(&eb, &with_rollouts, &noise).unwrap();
    let b = m.loss_combined(&eb, &experts_only, &noise).unwrap();
    assert_eq!(a.bc, b.bc);
    assert_ne!(a.value, b.value);
    assert_ne!(a.kl, b.kl);
}

fn outputs(m: &Model) -> Vec<Prediction> {
    let t = traj(&spec(), "a", 4, Outcome::Success);
    let obs: Vec<&Observation> = t.steps.iter().map(|s| &s.observation).collect();
    m.predict_batch(&obs).unwrap()
}

fn perturb(m: &Model, name: &str) -> Model {
    let mut p = m.clone();
    let id = p.store.id(name).unwrap();
    p.store.value_mut(id).data_mut().iter_mut().for_each(|v| *v += 0.05);
    p
}

#[test]
fn heads_share_the_encoder_only() {
    let m = tiny_model();
    let base = outputs(&m);
    let actions = |o: &[Prediction]| o.iter().map(|p| p.action).collect::<Vec<_>>();
    let values = |o: &[Prediction]| o.iter().map(|p| p.value).collect::<Vec<_>>();

    let enc = outputs(&perturb(&m, "encoder.0.w"));
    assert_ne!(actions(&enc), actions(&base));
    assert_ne!(values(&enc), values(&base));

    let val = outputs(&perturb(&m, "value.1.w"));
    assert_eq!(actions(&val), actions(&base));
    assert_ne!(values(&val), values(&base));

    let act = outputs(&perturb(&m, "action.0.w"));
    assert_ne!(actions(&act), actions(&base));
    assert_eq!(values(&act), values(&base));
}

#[test]
fn predict_is_deterministic_and_clamped() {
    let mut m = tiny_model();
    assert_eq!(outputs(&m), outputs(&m));
    set(&mut m, "value.mean.b", |_| 50.0);
    assert!(outputs(&m).iter().all(|p| p.value == 1.0));
    set(&mut m, "value.mean.b", |_| -50.0);
    assert!(outputs(&m).iter().all(|p| p.value == -1.0));
    let t = traj(&spec(), "a", 4, Outcome::Success);
    let single = m.predict(&t.steps[2].observation).unwrap();
    assert_eq!(single, outputs(&m)[2]);
}

#[test]
fn zero_lambda_leaves_value_head_without_gradient() {
    let mut m = tiny_model();
    m.config.lambda = 0.0;
    let dim = m.input.dim();
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let noise = NoiseDraw::for_model(&mut rng, &m, 3, 4);
    let eb = ExpertBatch::from_parts(features(3, dim), Tensor::full(&[3, 4], 0.4)).unwrap();
    let lb = LabeledBatch::from_parts(features(4, dim), vec![Some(-0.5); 4], vec![Some(1.0); 4]).unwrap();
    let mut tape = Tape::new();
    let g = m.loss_graph(&mut tape, Some(&eb), Some(&lb), &noise, TrainMode::Bcva).unwrap();
    tape.backward(g.total, &mut m.store).unwrap();
    let mut seen = 0;
    for id in m.store.ids().collect::<Vec<_>>() {
        if m.store.name(id).starts_with("value.") {
            assert!(m.store.grad(id).unwrap().data().iter().all(|&g| g == 0.0));
            seen += 1;
        }
    }
    assert_eq!(seen, 10);
    let enc = m.store.id("encoder.0.w").unwrap();
    assert!(m.store.grad(enc).unwrap().data().iter().any(|&g| g != 0.0));
}

fn toy_data() -> Vec<crate::trajlog::Trajectory> {
    vec![
        traj(&spec(), "e0", 5, Outcome::Success),
        traj(&spec(), "e1", 4, Outcome::Success),
        traj(&spec(), "r0", 6, Outcome::Failure(FailureMode::Timeout)),
    ]
}

#[test]
fn checkpoint_round_trip_is_bit_exact() {
    let mut m = tiny_model();
    let data = toy_data();
    let returns: Vec<Vec<f64>> = data.iter().map(|t| vec![0.5; t.len()]).collect();
    let td = TrainData {
        expert: vec![&data[0], &data[1]],
        labeled: data.iter().zip(&returns).map(|(t, r)| (t, Some(r.as_slice()))).collect(),
    };
    let cfg = TrainConfig {
        batch_size: 4,
        epochs: 2,
        steps_per_epoch: 3,
        ..TrainConfig::default()
    };
    train(&mut m, &td, &cfg).unwrap();
    let mut buf = Vec::new();
    write_checkpoint(&m, TrainMode::Bcva, None, &mut buf).unwrap();
    let (loaded, header) = read_checkpoint(buf.as_slice()).unwrap();
    assert_eq!(header.steps, 6);
    assert_eq!(header.mode, TrainMode::Bcva);
    let before = outputs(&m);
    let after = outputs(&loaded);
    for (a, b) in before.iter().zip(&after) {
        assert_eq!(a.value.to_bits(), b.value.to_bits());
        assert_eq!(a.failure_prob.to_bits(), b.failure_prob.to_bits());
        for (x, y) in a.action.to_array().iter().zip(b.action.to_array()) {
            assert_eq!(x.to_bits(), y.to_bits());
        }
    }
    for (name, t) in m.store.iter() {
        let id = loaded.store.id(name).unwrap();
        assert_eq!(loaded.store.value(id), t);
    }

    let mut again = Vec::new();
    write_checkpoint(&loaded, TrainMode::Bcva, None, &mut again).unwrap();
    assert_eq!(buf, again);

    for cut in [0, 7, 12, 30, buf.len() / 2, buf.len() - 1] {
        assert!(read_checkpoint(&buf[..cut]).is_err(), "cut at {cut}");
    }
    let mut bumped = buf.clone();
    bumped[8] = 9;
    assert!(matches!(read_checkpoint(bumped.as_slice()), Err(NetError::Checkpoint(m)) if m.contains("version")));
    let mut extra = buf.clone();
    extra.push(0);
    assert!(read_checkpoint(extra.as_slice()).is_err());

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ckpt");
    save_checkpoint(&m, TrainMode::Bcva, None, &path).unwrap();
    assert!(load_checkpoint(&path, Some(&tiny_config())).is_ok());
    let other = ModelConfig {
        latent_dim: 4,
        ..tiny_config()
    };
    assert!(matches!(load_checkpoint(&path, Some(&other)), Err(NetError::ConfigMismatch)));
}

#[test]
fn training_is_deterministic_and_rejects_empty_data() {
    let data = toy_data();
    let returns: Vec<Vec<f64>> = data.iter().map(|t| vec![-0.3; t.len()]).collect();
    let td = TrainData {
        expert: vec![&data[0], &data[1]],
        labeled: data.iter().zip(&returns).map(|(t, r)| (t, Some(r.as_slice()))).collect(),
    };
    let cfg = TrainConfig {
        batch_size: 5,
        epochs: 3,
        steps_per_epoch: 4,
        seed: 9,
        ..TrainConfig::default()
    };
    let run = |mode| {
        let mut m = tiny_model();
        let r = train(&mut m, &td, &TrainConfig { mode, ..cfg }).unwrap();
        let mut buf = Vec::new();
        write_checkpoint(&m, mode, None, &mut buf).unwrap();
        (r, buf)
    };
    for mode in [TrainMode::Bcva, TrainMode::Classifier, TrainMode::Policy] {
        let (ra, a) = run(mode);
        let (rb, b) = run(mode);
        assert_eq!(a, b);
        assert_eq!(ra, rb);
        assert_eq!(ra.curve.len(), 3);
    }

    let empty = TrainData::default();
    assert!(matches!(train(&mut tiny_model(), &empty, &cfg), Err(NetError::EmptyData(_))));
    let no_labels = TrainData {
        expert: vec![&data[0]],
        labeled: vec![],
    };
    assert!(matches!(train(&mut tiny_model(), &no_labels, &cfg), Err(NetError::EmptyData(_))));
    let policy = TrainConfig {
        mode: TrainMode::Policy,
        ..cfg
    };
    assert!(train(&mut tiny_model(), &no_labels, &policy).is_ok());
}

#[test]
fn kl_estimate_vanishes_when_prior_matches_posterior() {
    let n = 10_000;
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let noise = NoiseDraw::sample(&mut rng, 1, 2, n, 0).expert_latent;
    let prior = MixturePrior {
        logits: Tensor::zeros(&[1, 1]),
        means: Tensor::matrix(1, 2, vec![0.3, -0.4]).unwrap(),
        log_stds: Tensor::matrix(1, 2, vec![-0.5, 0.2]).unwrap(),
    };
    let s = mc_kl_samples(&[0.3, -0.4], &[-0.5, 0.2], &prior, &noise).unwrap();
    let mean = s.iter().sum::<f64>() / n as f64;
    assert!(mean.abs() <= 0.05, "{mean}");
}

#[test]
fn kl_estimate_matches_closed_form() {
    let n = 10_000;
    let mut rng = ChaCha8Rng::seed_from_u64(22);
    let noise = NoiseDraw::sample(&mut rng, 1, 1, n, 0).expert_latent;
    let prior = MixturePrior {
        logits: Tensor::zeros(&[1, 1]),
        means: Tensor::zeros(&[1, 1]),
        log_stds: Tensor::zeros(&[1, 1]),
    };
    let s = mc_kl_samples(&[1.0], &[0.0], &prior, &noise).unwrap();
    let mean = s.iter().sum::<f64>() / n as f64;
    let var = s.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    let se = (var / n as f64).sqrt();
    // KL(N(1,1) || N(0,1)) = (mu^2) / 2.
    assert!((mean - 0.5).abs() <= 3.0 * se, "{mean} +- {se}");
}

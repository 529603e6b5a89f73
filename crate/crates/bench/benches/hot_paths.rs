use bcva_core::doorsim::{render, reset, rollout};
use bcva_core::grad::Tape;
use bcva_core::helpgate::{default_nus, default_value_epsilons, sweep, EpisodeTrace};
use bcva_core::net::{ExpertBatch, LabeledBatch, NoiseDraw};
use bcva_core::returns::label_dataset;
use bcva_core::{
    Dataset, DistanceMetric, DoorWorldConfig, GateSignal, InputSpec, Model, ModelConfig, ObservationSpec,
    ReturnConfig, ScriptedExpert, TrainMode,
};
use criterion::{black_box, criterion_group, criterion_main, BatchSize, Criterion};

fn demos(n: u64) -> Dataset {
    let world = DoorWorldConfig::default();
    let spec = ObservationSpec::new(32, 32, 1).unwrap();
    let mut expert = ScriptedExpert::default();
    let ts = (0..n)
        .map(|s| rollout(&mut expert, &world, &spec, s, &format!("demo-{s}"), None).unwrap())
        .collect();
    Dataset::from_trajectories(spec, ts).unwrap()
}

fn simulator(c: &mut Criterion) {
    let world = DoorWorldConfig::default();
    let spec = ObservationSpec::new(32, 32, 1).unwrap();
    let state = reset(&world, 3).unwrap();
    c.bench_function("render 32x32", |b| b.iter(|| render(black_box(&state), &spec, &world)));
    let mut expert = ScriptedExpert::default();
    c.bench_function("expert episode", |b| {
        b.iter(|| rollout(&mut expert, &world, &spec, black_box(7), "e", None).unwrap())
    });
}

fn labeling(c: &mut Criterion) {
    let data = demos(20);
    let mut g = c.benchmark_group("label 20 demos");
    for metric in DistanceMetric::ALL {
        let cfg = ReturnConfig::new(0.99, metric).unwrap();
        g.bench_function(metric.name(), |b| b.iter(|| label_dataset(black_box(&data), &cfg, None).unwrap()));
    }
    g.finish();
}

fn gate_sweep(c: &mut Criterion) {
    let episodes: Vec<EpisodeTrace> = (0..200)
        .map(|i| EpisodeTrace {
            values: (0..120).map(|k| ((i * 31 + k * 7) % 100) as f64 / 50.0 - 1.0).collect(),
            failed: i % 3 == 0,
        })
        .collect();
    let (eps, nus) = (default_value_epsilons(), default_nus());
    c.bench_function("sweep 200 episodes", |b| {
        b.iter(|| sweep(black_box(&episodes), &eps, &nus, GateSignal::ValueHead).unwrap())
    });
}

fn training_step(c: &mut Criterion) {
    let data = demos(4);
    let spec = InputSpec {
        observation: data.spec,
        joints: 1,
    };
    let mut model = Model::new(ModelConfig::default(), spec, 0).unwrap();
    let steps: Vec<_> = data.trajectories.iter().flat_map(|t| (0..t.len()).map(move |i| (t, i))).take(64).collect();
    let expert = ExpertBatch::new(&model, &steps).unwrap();
    let labeled = LabeledBatch::from_parts(
        model.features(&steps.iter().map(|(t, i)| &t.steps[*i].observation).collect::<Vec<_>>()).unwrap(),
        vec![Some(-0.5); expert.len()],
        vec![Some(1.0); expert.len()],
    )
    .unwrap();
    let mut rng = rand_seed();
    let noise = NoiseDraw::for_model(&mut rng, &model, expert.len(), labeled.len());
    c.bench_function("loss + backward, batch 64", |b| {
        b.iter_batched(
            Tape::new,
            |mut tape| {
                let g = model.loss_graph(&mut tape, Some(&expert), Some(&labeled), &noise, TrainMode::Bcva).unwrap();
                tape.backward(g.total, model.params_mut()).unwrap();
            },
            BatchSize::SmallInput,
        )
    });
}

fn rand_seed() -> impl rand::Rng {
    use rand::SeedableRng;
    rand_chacha::ChaCha8Rng::seed_from_u64(0)
}

criterion_group!(benches, simulator, labeling, gate_sweep, training_step);
criterion_main!(benches);

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};

use permdec::data::{gen_synthetic, make_instance, Batch, Task};
use permdec::inference::{generate, BeamConfig};
use permdec::model::{Model, ModelConfig};
use permdec::numerics::RngStream;
use permdec::order::OrderDistribution;
use permdec::training::{batch_loss, Parallelism};

const MODES: [(&str, Parallelism); 2] = [
    ("sequential", Parallelism::Sequential),
    ("parallel", Parallelism::Parallel),
];

fn model() -> Model<f32> {
    let cfg = ModelConfig {
        vocab_size: 32,
        max_positions: 18,
        ..ModelConfig::tiny()
    };
    Model::new(cfg, 1).unwrap()
}

fn loss(c: &mut Criterion) {
    let m = model();
    let mut rng = RngStream::new(2);
    let dist = OrderDistribution::Alpha(0.5);
    let mut group = c.benchmark_group("batch_loss");
    for size in [8, 32] {
        let examples = gen_synthetic(Task::Copy, 32, (4, 16), size, &mut rng).unwrap();
        let inst: Vec<_> = examples
            .iter()
            .map(|e| make_instance(e, dist, 1, &mut rng).unwrap())
            .collect();
        let batch = Batch::from_instances(&inst).unwrap();
        for (name, par) in MODES {
            group.bench_with_input(BenchmarkId::new(name, size), &batch, |b, batch| {
                b.iter(|| batch_loss(&m, batch, dist, par, true, None).unwrap())
            });
        }
    }
    group.finish();
}

fn decode(c: &mut Criterion) {
    let m = model();
    let mut rng = RngStream::new(3);
    let sources: Vec<Vec<usize>> = gen_synthetic(Task::Copy, 32, (4, 16), 16, &mut rng)
        .unwrap()
        .into_iter()
        .map(|mut e| {
            e.source.push(permdec::data::vocab::EOS);
            e.source
        })
        .collect();
    let cfg = BeamConfig {
        beam: 4,
        max_len: 17,
        ..BeamConfig::default()
    };
    let mut group = c.benchmark_group("generate");
    for (name, par) in MODES {
        group.bench_function(name, |b| b.iter(|| generate(&m, &sources, &cfg, par).unwrap()));
    }
    group.finish();
}

criterion_group! {
    name = benches;
    config = Criterion::default().sample_size(20);
    targets = loss, decode
}
criterion_main!(benches);

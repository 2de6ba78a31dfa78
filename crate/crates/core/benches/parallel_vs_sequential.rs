use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use supsiam::encoder::{EncoderConfig, Model, PriorStats};
use supsiam::metrics::{manifold_smoothness, SmoothnessConfig};
use supsiam::molgraph::{NoiseConfig, TaskKind};
use supsiam::objective::{batch_gradients, LossWeights, ObjectiveConfig};
use supsiam::par::ExecMode;
use supsiam::synthetic::{generate, SyntheticConfig};
use supsiam::trainer::prepare_sample;

const MODES: [(&str, ExecMode); 2] = [("sequential", ExecMode::Sequential), ("parallel", ExecMode::Parallel)];

fn fixture() -> (Model, Vec<supsiam::molgraph::ConformerRecord>) {
    let ds = generate(&SyntheticConfig { n_molecules: 64, ..SyntheticConfig::default() });
    let mut model = Model::new(EncoderConfig::with_hidden_dim(32), TaskKind::Regression, 0).unwrap();
    model.prior = Some(PriorStats { mu_t: 0.5, sigma_t: 0.1 });
    (model, ds.records)
}

fn gradients(c: &mut Criterion) {
    let (model, records) = fixture();
    let noise = NoiseConfig { tau: 0.1, samples: 2, seed: 0 };
    let batch: Vec<_> = records
        .iter()
        .take(32)
        .enumerate()
        .map(|(i, r)| prepare_sample(r, &noise, model.config.cutoff, i as u64))
        .collect();
    let cfg = ObjectiveConfig {
        weights: LossWeights { lambda_y: 1.0, lambda_s: 1.0, lambda_r: 1.0 },
        posterior_samples: 10,
        stopgrad: true,
    };
    let mut g = c.benchmark_group("batch_gradients");
    g.sample_size(10);
    for (name, mode) in MODES {
        g.bench_with_input(BenchmarkId::from_parameter(name), &mode, |b, &m| {
            b.iter(|| batch_gradients(&model, &batch, &cfg, true, true, m).unwrap())
        });
    }
    g.finish();
}

fn smoothness(c: &mut Criterion) {
    let (model, records) = fixture();
    let cfg = SmoothnessConfig { tau: 0.1, samples: 10, seed: 0 };
    let mut g = c.benchmark_group("manifold_smoothness");
    g.sample_size(10);
    for (name, mode) in MODES {
        g.bench_with_input(BenchmarkId::from_parameter(name), &mode, |b, &m| {
            b.iter(|| manifold_smoothness(&model, &records, &cfg, m).unwrap())
        });
    }
    g.finish();
}

criterion_group!(benches, gradients, smoothness);
criterion_main!(benches);

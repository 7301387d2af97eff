use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use xhap_core::channel::ChannelParams;
use xhap_core::experiments::{burst_experiment, one_step_errors, ExperimentConfig};
use xhap_core::model::{ModelConfig, Normalization, XhapModel};
use xhap_core::par::Execution;
use xhap_core::restoration::{HoldLast, Predictor, RestorationConfig};
use xhap_core::traces::{generate_trace, Activity, Trace};
use xhap_core::training::{batch_gradient, Dataset, ExampleRef, TrainConfig};

const MODES: [(&str, Execution); 2] = [("sequential", Execution::Sequential), ("parallel", Execution::Parallel)];

fn setup() -> (XhapModel, Vec<Trace>) {
    let traces: Vec<Trace> = [Activity::DynTap, Activity::RbPushHold]
        .iter()
        .map(|&a| generate_trace(a, 30.0, 5).unwrap().trimmed().unwrap())
        .collect();
    let config = ModelConfig {
        history_len: 16,
        latent: 32,
        heads: 4,
        hidden: 32,
    };
    let mut model = XhapModel::new(config, 1).unwrap();
    model.normalization = Normalization::fit(&traces).unwrap();
    (model, traces)
}

fn bench_batch_gradient(c: &mut Criterion) {
    let (model, traces) = setup();
    let data = Dataset::from_traces(&traces, &model.normalization, 16, 3, 50).unwrap();
    let batch: Vec<ExampleRef> = data.examples.iter().take(64).copied().collect();
    let forcing = vec![vec![false; 3]; batch.len()];
    let mut group = c.benchmark_group("batch_gradient_64");
    group.sample_size(10);
    for (name, exec) in MODES {
        let cfg = TrainConfig {
            rollout_horizon: 3,
            execution: exec,
            ..Default::default()
        };
        group.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| batch_gradient(&model, &data, &batch, &forcing, &cfg).unwrap())
        });
    }
    group.finish();
}

fn bench_one_step_errors(c: &mut Criterion) {
    let (model, traces) = setup();
    let mut group = c.benchmark_group("one_step_errors_10k");
    group.sample_size(10);
    let trace = Trace {
        samples: traces[0].samples[..10_000].to_vec(),
        ..traces[0].clone()
    };
    for (name, exec) in MODES {
        group.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| one_step_errors(&model, &trace, 16, exec).unwrap())
        });
    }
    group.finish();
}

fn bench_burst_grid(c: &mut Criterion) {
    let (model, traces) = setup();
    let stream = Trace {
        samples: traces[1].samples[..20_000].to_vec(),
        ..traces[1].clone()
    };
    let rc = RestorationConfig {
        history_len: 16,
        ..Default::default()
    };
    let models: [&dyn Predictor; 2] = [&model, &HoldLast];
    let mut group = c.benchmark_group("burst_grid");
    group.sample_size(10);
    for (name, exec) in MODES {
        let cfg = ExperimentConfig {
            steps: stream.len(),
            execution: exec,
            ..Default::default()
        };
        group.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| burst_experiment(&models, &stream, &ChannelParams::default(), &rc, &cfg).unwrap())
        });
    }
    group.finish();
}

criterion_group!(benches, bench_batch_gradient, bench_one_step_errors, bench_burst_grid);
criterion_main!(benches);

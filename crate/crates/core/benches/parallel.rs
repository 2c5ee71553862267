//! Sequential vs rayon-pool execution of the data-parallel paths. Build with
//! `--no-default-features` to measure the sequential fallback alone.

use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use rand::Rng;

use icym2i::data::{Covariates, Gate, MaskTarget, MechanismKind, MechanismSpec, Variable};
use icym2i::experiment::{run_experiment, ArmKind, ExperimentConfig, GeneratorSpec, PidSettings, PropensitySource};
use icym2i::infotheory::DiscreteJoint;
use icym2i::metrics::weighted_auroc;
use icym2i::par;
use icym2i::pid::{pid_oracle_joint, OracleConfig};
use icym2i::predictors::MlpConfig;
use icym2i::rng::stream;

fn modes() -> [(&'static str, usize); 2] {
    [("sequential", 1), ("pool", 0)]
}

fn oracle_grid(c: &mut Criterion) {
    let mut g = c.benchmark_group("oracle_grid");
    g.sample_size(10);
    let joint = DiscreteJoint::new(2, 2, 2, vec![0.1, 0.15, 0.05, 0.2, 0.12, 0.08, 0.18, 0.12]).unwrap();
    for (name, parallel) in [("sequential", false), ("pool", true)] {
        let cfg = OracleConfig { grid_points: 801, parallel, ..OracleConfig::default() };
        g.bench_function(name, |b| b.iter(|| pid_oracle_joint(black_box(&joint), &cfg).unwrap()));
    }
    g.finish();
}

fn batch_auroc(c: &mut Criterion) {
    let mut rng = stream(1, "bench/auroc");
    let batches: Vec<(Vec<f64>, Vec<u8>)> = (0..64)
        .map(|_| {
            let y: Vec<u8> = (0..2000).map(|_| u8::from(rng.random::<bool>())).collect();
            let s = y.iter().map(|&v| f64::from(v) * 0.5 + rng.random::<f64>()).collect();
            (s, y)
        })
        .collect();
    let mut g = c.benchmark_group("batch_auroc");
    for (name, jobs) in modes() {
        g.bench_with_input(BenchmarkId::from_parameter(name), &jobs, |b, &jobs| {
            b.iter(|| par::map(batches.iter().collect(), jobs, |(s, y)| weighted_auroc(s, y, None).unwrap()))
        });
    }
    g.finish();
}

fn experiment_seeds(c: &mut Criterion) {
    let x1 = Covariates::Columns { source: Variable::X1, columns: vec![0] };
    let cfg = ExperimentConfig {
        name: "bench".into(),
        n: 1000,
        seeds: vec![1, 2, 3, 4],
        arms: vec![ArmKind::Oracle, ArmKind::Observed, ArmKind::Icym2i],
        blocks: vec![GeneratorSpec::LogicGate { gate: Gate::And }],
        mechanism: Some(MechanismSpec::binary(MechanismKind::Mar, MaskTarget::X2AndY, Variable::X1, 0.8, 0.2)),
        outcome_link: None,
        propensity: PropensitySource::Fitted { covariates: x1 },
        floor: 0.01,
        model: MlpConfig { epochs: 10, ..MlpConfig::default() },
        pid: PidSettings { enabled: false, ..PidSettings::default() },
        batch_size: 50,
    };
    let mut g = c.benchmark_group("experiment_seeds");
    g.sample_size(10);
    for (name, jobs) in modes() {
        g.bench_with_input(BenchmarkId::from_parameter(name), &jobs, |b, &jobs| {
            b.iter(|| run_experiment(black_box(&cfg), jobs).unwrap())
        });
    }
    g.finish();
}

criterion_group!(benches, oracle_grid, batch_auroc, experiment_seeds);
criterion_main!(benches);

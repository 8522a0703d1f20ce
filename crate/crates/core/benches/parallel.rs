use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use mdb_core::curation::image::Image;
use mdb_core::curation::{style_filter, MemoryImageStore, StageConfig};
use mdb_core::datasets::{make_mixture, split_records, Label, Manifest, MixtureSpec, SampleRecord, SplitRatios};
use mdb_core::experiment::{run_sweep, ExperimentConfig, ExperimentData, TestSet};
use mdb_core::par::Execution;
use mdb_core::spectra::{average_spectrum, Plane};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const MODES: [(&str, Execution); 2] = [("sequential", Execution::Sequential), ("parallel", Execution::Parallel)];

fn c_sweep(c: &mut Criterion) {
    let m = split_records(&make_mixture(&MixtureSpec::canonical(0)).unwrap(), SplitRatios::default(), 0).unwrap();
    let tests = [TestSet::new("mixture", m.clone())];
    let data = ExperimentData {
        train: &m,
        tests: &tests,
        image_root: None,
    };
    let mut cfg = ExperimentConfig::default();
    cfg.options.epochs = 1;
    let mut group = c.benchmark_group("c_sweep");
    group.sample_size(10);
    for (name, exec) in MODES {
        group.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| run_sweep(black_box(&cfg), &data, exec).unwrap())
        });
    }
    group.finish();
}

fn spectra(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let planes: Vec<Plane> = (0..16)
        .map(|_| Plane::from_fn(128, 128, |_, _| 0.0).unwrap())
        .map(|mut p| {
            p.values.iter_mut().for_each(|v| *v = rng.random_range(0.0..255.0));
            p
        })
        .collect();
    let mut group = c.benchmark_group("average_spectrum");
    group.sample_size(10);
    for (name, exec) in MODES {
        group.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| average_spectrum(black_box(&planes), 3.0, exec).unwrap())
        });
    }
    group.finish();
}

fn style(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let store = MemoryImageStore::new();
    let mut records = Vec::new();
    for i in 0..32 {
        let pixels = (0..128 * 128 * 3).map(|_| rng.random()).collect();
        store.insert(format!("{i}.png"), Image::new(128, 128, 3, pixels).unwrap());
        records.push(SampleRecord::new(format!("{i}"), format!("{i}.png"), Label::Fake, "gen"));
    }
    let m = Manifest::new(records).unwrap();
    let cfg = StageConfig::default();
    let mut group = c.benchmark_group("style_filter");
    group.sample_size(10);
    for (name, exec) in MODES {
        group.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| style_filter(black_box(&m), &cfg, &store, exec))
        });
    }
    group.finish();
}

criterion_group!(benches, c_sweep, spectra, style);
criterion_main!(benches);

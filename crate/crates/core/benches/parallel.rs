//! Sequential vs. data-parallel throughput on the hot loops.
//!
//! Output is bit-identical across modes (asserted in unit tests); these
//! benches measure what the rayon path buys at desk scale.

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use nalgebra::DMatrix;

use collapselab::dynamics::{
    sample_mixture_with, MixtureParams, Schedule, TptParams,
};
use collapselab::exec::ExecMode;
use collapselab::geometry::{active_subspace, build_simplex_etf, DEFAULT_RANK_TOL};
use collapselab::learner::{Activation, HeadMode, InitScheme, Scenario};
use collapselab::{Model, ModelConfig};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

fn mixture_fixture() -> (collapselab::SimplexEtf, MixtureParams) {
    let k = 10;
    let d = 64;
    let etf = build_simplex_etf(k, d, 1.0, Some(7)).unwrap();
    let tpt = TptParams::new(
        0.1,
        0.01,
        0,
        Schedule::Constant(etf.mean_sq_norm()),
        Schedule::Constant(0.2),
    )
    .unwrap();
    let sub = active_subspace(etf.means(), DEFAULT_RANK_TOL).unwrap();
    let perp = sub.complement();
    let mix = MixtureParams {
        pi: 0.5,
        nc_mean: etf.means().column(0).into(),
        ood_mean_perp: perp.basis().row(0).transpose() * 2.0,
        sigma_b: DMatrix::identity(k, k) * 0.2,
        perp_variance: 1.0,
        tpt,
    };
    (etf, mix)
}

fn bench_sampler(c: &mut Criterion) {
    let (etf, mix) = mixture_fixture();
    let mut group = c.benchmark_group("sample_mixture");
    for &n in &[8_192usize, 65_536] {
        for mode in [ExecMode::Sequential, ExecMode::Parallel] {
            group.bench_with_input(
                BenchmarkId::new(format!("{mode:?}"), n),
                &n,
                |b, &n| {
                    b.iter(|| sample_mixture_with(n, &etf, &mix, 50, 11, mode).unwrap());
                },
            );
        }
    }
    group.finish();
}

fn bench_gradients(c: &mut Criterion) {
    let mut model = Model::new(ModelConfig {
        input_dim: 32,
        hidden_widths: vec![128, 128],
        feature_dim: 64,
        activation: Activation::Tanh,
        head_mode: HeadMode::Single,
        k_per_task: 10,
        init_scheme: InitScheme::Standard,
        seed: 7,
    })
    .unwrap();
    model.add_head(0, &(0..10).collect::<Vec<_>>()).unwrap();

    let n = 8_192;
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let x = DMatrix::from_fn(n, 32, |_, _| rng.sample::<f64, _>(StandardNormal));
    let labels: Vec<usize> = (0..n).map(|_| rng.random_range(0..10)).collect();
    let tasks = vec![0usize; n];

    let mut group = c.benchmark_group("loss_and_grad");
    for mode in [ExecMode::Sequential, ExecMode::Parallel] {
        group.bench_with_input(BenchmarkId::new(format!("{mode:?}"), n), &n, |b, _| {
            b.iter(|| {
                model
                    .loss_and_grad_with(&x, &labels, &tasks, Scenario::Cil, mode)
                    .unwrap()
            });
        });
    }
    group.finish();
}

criterion_group!(benches, bench_sampler, bench_gradients);
criterion_main!(benches);

//! Benchmarks comparing the data-parallel core paths with their sequential
//! reference implementations. With `--no-default-features` the "parallel"
//! variants degrade to the sequential loop, so the pair measures the rayon
//! speedup (or its absence on small inputs).
//!
//! Run with `cargo bench -p rse-core`.

use criterion::{criterion_group, criterion_main, BatchSize, Criterion};
use nalgebra::DMatrix;

use rse_core::clustering::{
    build_pi, cluster_coefficients, dissimilarity, dissimilarity_matrix, form_clusters_target_k,
    SimilarityFactor,
};
use rse_core::grid::GridSpec;
use rse_core::lti::{decompose_semistable, default_tol_zero, LtiSystem};
use rse_core::par::{map_indexed, map_indexed_seq};
use rse_core::{assemble_state_space, build_measurement_matrix, compute_phi, default_sensors};

fn rts24_factor() -> SimilarityFactor {
    let grid = GridSpec::rts24();
    let (sys0, index) = assemble_state_space(&grid).unwrap();
    let sensors = default_sensors(&grid);
    let c = build_measurement_matrix(&grid, &index, &sensors).unwrap();
    let sys = LtiSystem::new(sys0.a().clone(), c).unwrap();
    let dec = decompose_semistable(sys.a(), default_tol_zero(sys.a())).unwrap();
    compute_phi(&sys, &dec).unwrap()
}

fn dissimilarity_matrix_seq(factor: &SimilarityFactor) -> DMatrix<f64> {
    let m = factor.m();
    let rows = map_indexed_seq(m, |i| {
        let mut row = vec![0.0f64; m];
        for (j, slot) in row.iter_mut().enumerate() {
            if j != i {
                *slot = dissimilarity(factor, i, j);
            }
        }
        row
    });
    DMatrix::from_fn(m, m, |i, j| rows[i][j])
}

fn bench_dissimilarity(c: &mut Criterion) {
    let factor = rts24_factor();
    let mut group = c.benchmark_group("dissimilarity_matrix");
    group.bench_function("parallel", |b| {
        b.iter(|| dissimilarity_matrix(std::hint::black_box(&factor)))
    });
    group.bench_function("sequential", |b| {
        b.iter(|| dissimilarity_matrix_seq(std::hint::black_box(&factor)))
    });
    group.finish();
}

fn bench_k_sweep(c: &mut Criterion) {
    let factor = rts24_factor();
    let ks = [5usize, 10, 21, 40, factor.m()];
    let cluster_at = |factor: &SimilarityFactor, k: usize| {
        let cl = form_clusters_target_k(factor, k).unwrap();
        let p = cluster_coefficients(factor, &cl);
        build_pi(&cl, &p).unwrap()
    };
    let mut group = c.benchmark_group("cluster_k_sweep");
    group.bench_function("parallel", |b| {
        b.iter_batched(
            || factor.clone(),
            |f| map_indexed(ks.len(), |i| cluster_at(&f, ks[i])),
            BatchSize::SmallInput,
        )
    });
    group.bench_function("sequential", |b| {
        b.iter_batched(
            || factor.clone(),
            |f| map_indexed_seq(ks.len(), |i| cluster_at(&f, ks[i])),
            BatchSize::SmallInput,
        )
    });
    group.finish();
}

criterion_group!(benches, bench_dissimilarity, bench_k_sweep);
criterion_main!(benches);

use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use gpframe::data::{chunk, kmeans, synthesize_glacier, ChunkMethod};
use gpframe::gp::{fit_cache, log_marginal_likelihood, predict, GpModel};
use gpframe::kernels::parse_kernel_expr;
use gpframe::scale::{
    aggregate, collapsed_bound, fit_experts, init_inducing, kron_matvec, svgp_fit, Aggregation, ExpertMarginals,
    ExpertOptions, KroneckerSystem, Sharing,
};
use gpframe::train::TrainConfig;

fn names() -> Vec<String> {
    vec!["a".into(), "b".into()]
}

fn model(text: &str, ell: f64, noise: f64) -> GpModel {
    let mut k = parse_kernel_expr(text, &names()).unwrap();
    for p in k.params_mut() {
        if p.name.contains("lengthscale") {
            p.set_value(ell);
        }
    }
    GpModel::new(k, noise)
}

fn cloud(n: usize, seed: u64) -> (DMatrix<f64>, DVector<f64>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x: DMatrix<f64> = DMatrix::from_fn(n, 2, |_, _| rng.random_range(0.0..4.0));
    let y = DVector::from_fn(n, |i, _| x[(i, 0)].sin() * x[(i, 1)].cos() + rng.random_range(-0.1..0.1));
    (x, y)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(40))]

    #[test]
    fn collapsed_bound_never_exceeds_the_evidence(n in 5usize..120, m in 1usize..20, ell in 0.2f64..3.0, noise in 0.01f64..1.0, seed in 0u64..500) {
        let gp = model("Mat52(a,b)", ell, noise);
        let (x, y) = cloud(n, seed);
        let (z, _) = cloud(m.min(n), seed + 1);
        let bound = collapsed_bound(&gp, &z, &x, &y).unwrap();
        let lml = log_marginal_likelihood(&fit_cache(&gp, &x, &y).unwrap());
        prop_assert!(bound <= lml + 1e-8, "{bound} > {lml}");
    }

    #[test]
    fn more_inducing_points_tighten_the_bound(n in 20usize..100, ell in 0.3f64..2.0, seed in 0u64..500) {
        let gp = model("SE(a,b)", ell, 0.1);
        let (x, y) = cloud(n, seed);
        let small = collapsed_bound(&gp, &x.rows(0, 5).into(), &x, &y).unwrap();
        let large = collapsed_bound(&gp, &x.rows(0, 15).into(), &x, &y).unwrap();
        prop_assert!(large >= small - 1e-8);
    }

    #[test]
    fn kron_matvec_matches_the_explicit_product(a in 1usize..6, b in 1usize..6, c in 1usize..4, seed in 0u64..500) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let f: Vec<DMatrix<f64>> = [a, b, c].iter().map(|&s| DMatrix::from_fn(s, s, |_, _| rng.random_range(-1.0..1.0))).collect();
        let v = DVector::from_fn(a * b * c, |_, _| rng.random_range(-1.0..1.0));
        let dense = f[0].kronecker(&f[1]).kronecker(&f[2]);
        let got = kron_matvec(&[&f[0], &f[1], &f[2]], &v);
        prop_assert!((got - dense * v).amax() < 1e-12);
    }

    #[test]
    fn bcm_precision_adds_up(means in prop::collection::vec(-2.0f64..2.0, 2..6), vars in prop::collection::vec(0.05f64..0.95, 6)) {
        let experts: Vec<ExpertMarginals> = means
            .iter()
            .zip(&vars)
            .map(|(&m, &v)| ExpertMarginals { mean: vec![m], latent_var: vec![v], prior_mean: vec![0.0], prior_var: vec![1.0], noise: 0.0 })
            .collect();
        let a = aggregate(&experts, Aggregation::Bcm, true).unwrap().prediction;
        let precision: f64 = experts.iter().map(|e| 1.0 / e.latent_var[0]).sum::<f64>() + 1.0 - experts.len() as f64;
        let weighted: f64 = experts.iter().map(|e| e.mean[0] / e.latent_var[0]).sum();
        prop_assert!((1.0 / a.latent_var[0] - precision).abs() < 1e-9 * precision);
        prop_assert!((a.mean[0] - weighted / precision).abs() < 1e-9);
        let r = aggregate(&experts, Aggregation::RobustBcm, true).unwrap().prediction;
        prop_assert!(r.latent_var[0] > 0.0 && r.latent_var[0].is_finite());
    }
}

#[test]
fn kronecker_posterior_mean_matches_the_exact_gp() {
    let ka = model("SE(a)", 0.8, 0.1).kernel;
    let kb = model("Mat32(a)", 1.3, 0.1).kernel;
    let ta = DMatrix::from_fn(7, 1, |i, _| i as f64 * 0.5);
    let tb = DMatrix::from_fn(9, 1, |i, _| (i as f64).sqrt());
    let sys = KroneckerSystem::from_grid(&[ka.clone(), kb.clone()], &[ta.clone(), tb.clone()], 0.1).unwrap();
    let x = DMatrix::from_fn(63, 2, |i, j| if j == 0 { ta[(i / 9, 0)] } else { tb[(i % 9, 0)] });
    let y = DVector::from_fn(63, |i, _| (x[(i, 0)] - x[(i, 1)]).sin());
    let mut k = parse_kernel_expr("SE(a) * Mat32(b)", &names()).unwrap();
    k.params_mut()[1].set_value(0.8);
    k.params_mut()[3].set_value(1.3);
    let gp = GpModel::new(k, 0.1);
    let cache = fit_cache(&gp, &x, &y).unwrap();
    let exact = predict(&gp, &cache, &x).unwrap();
    let mean = sys.posterior_mean(&y).unwrap();
    for i in 0..63 {
        assert!((mean[i] - exact.mean[i]).abs() < 1e-9);
        assert!((sys.posterior_variance()[i] - exact.latent_var[i]).abs() < 1e-9);
    }
    assert!((sys.log_marginal_likelihood(&y).unwrap() - log_marginal_likelihood(&cache)).abs() < 1e-9);
}

#[test]
fn kmeans_chunks_partition_the_synthetic_glacier() {
    let ds = synthesize_glacier(3000, 2);
    let method = ChunkMethod::KMeans { features: vec!["x".into(), "y".into()], k: 8, max_iter: 20, seed: 1 };
    let c = chunk(&ds, &method).unwrap();
    assert_eq!(c.assignment.len(), ds.len());
    assert_eq!(c.sizes().iter().sum::<usize>(), ds.len());
    assert!(c.sizes().iter().all(|&s| s > 0));
    // every row sits in the chunk of its nearest centroid
    let centroids = c.centroids.as_ref().unwrap();
    let (ix, iy) = (ds.feature_index("x").unwrap(), ds.feature_index("y").unwrap());
    for i in 0..ds.len() {
        let d = |k: usize| (ds.features[(i, ix)] - centroids[(k, 0)]).powi(2) + (ds.features[(i, iy)] - centroids[(k, 1)]).powi(2);
        let best = (0..c.n_chunks).map(d).fold(f64::INFINITY, f64::min);
        assert!(d(c.assignment[i]) <= best + 1e-9);
    }
}

#[test]
fn experts_fit_every_chunk_and_aggregate_sensibly() {
    let (x, y) = cloud(400, 3);
    let km = kmeans(&x, 4, 20, 0).unwrap();
    let chunking = gpframe::data::Chunking {
        method: ChunkMethod::KMeans { features: names(), k: 4, max_iter: 20, seed: 0 },
        assignment: km.assignment.clone(),
        n_chunks: 4,
        inertia: None,
        centroids: None,
    };
    let cfg = TrainConfig { epochs: 30, restarts: 1, learning_rate: 0.05, ..Default::default() };
    let (xs, ys) = cloud(100, 4);
    for sharing in [Sharing::Independent, Sharing::SharedHypers] {
        let options = ExpertOptions { sharing, ..Default::default() };
        let ens = fit_experts(&x, &y, &chunking, &model("Mat52(a,b)", 1.0, 0.1), &cfg, &options).unwrap();
        assert_eq!(ens.experts.len(), 4);
        assert!(ens.failures.is_empty());
        let p = ens.predict(&xs).unwrap().prediction;
        let rmse = ((0..100).map(|i| (p.mean[i] - ys[i]).powi(2)).sum::<f64>() / 100.0).sqrt();
        assert!(rmse < 0.15, "{sharing:?}: {rmse}");
        assert!(p.obs_var.iter().all(|v| *v > 0.0));
    }
}

#[test]
fn sparse_fit_improves_its_bound_and_predicts() {
    let (x, y) = cloud(300, 5);
    let gp = model("SE(a,b)", 1.0, 0.2);
    let z0 = init_inducing(&x, 20, 20, 0).unwrap();
    let start = collapsed_bound(&gp, &z0, &x, &y).unwrap();
    let cfg = TrainConfig { epochs: 60, restarts: 1, learning_rate: 0.05, ..Default::default() };
    let (sparse, trace) = svgp_fit(&gp, &x, &y, &z0, &cfg, true).unwrap();
    assert!(sparse.bound > start);
    assert!(trace.best_objective >= trace.initial_objective());
    let exact = log_marginal_likelihood(&fit_cache(&sparse.model, &x, &y).unwrap());
    assert!(sparse.bound <= exact + 1e-8);
    let (xs, ys) = cloud(50, 6);
    let p = sparse.predict(&xs).unwrap();
    let rmse = ((0..50).map(|i| (p.mean[i] - ys[i]).powi(2)).sum::<f64>() / 50.0).sqrt();
    assert!(rmse < 0.2, "{rmse}");
}

use mrri::integration::{
    gmm_objective, gmm_oracle, meta_estimator, stacked_sensitivity, variability, weighted_scores, GmmOptions,
    RidgePolicy, StackedScores,
};
use mrri::likelihood::{fit_local_mle, initial_theta, per_observation_scores, FitOptions};
use mrri::simulator::{simulate_dataset, DomainConfig, SimConfig};
use mrri::{DataSource, NodePath, ScoreMatrix, ThetaParams};
use nalgebra::DMatrix;
use proptest::prelude::*;

fn score_block(values: Vec<f64>, n: usize, p: usize, k: u16) -> ScoreMatrix {
    ScoreMatrix {
        values: DMatrix::from_row_slice(n, p, &values),
        theta_at: vec![0.0; p],
        node_path: NodePath::from_indices(&[k]),
    }
}

fn children(raw: &[Vec<f64>], n: usize, p: usize) -> Vec<ScoreMatrix> {
    raw.iter()
        .enumerate()
        .map(|(k, v)| score_block(v.clone(), n, p, k as u16))
        .collect()
}

proptest! {
    /// Projected scores have variability `S V^{-1} S^T`.
    #[test]
    fn projection_identity(
        raw in prop::collection::vec(prop::collection::vec(-2.0f64..2.0, 40 * 3), 1..4),
    ) {
        let (n, p) = (40, 3);
        let blocks = children(&raw, n, p);
        let stacked = StackedScores::from_children(&blocks).unwrap();
        let v = variability(&stacked, &RidgePolicy::default()).unwrap();
        prop_assume!(v.epsilon == 0.0);
        let s = stacked_sensitivity(&blocks);
        let out = weighted_scores(&s, &v, &stacked, &[0.0; 3], &NodePath::root()).unwrap();
        prop_assert_eq!(out.p(), p);
        let got = out.values.transpose() * &out.values;
        let want = &s * v.solve(&s.transpose());
        let scale = want.norm();
        prop_assert!((got - &want).norm() <= 1e-10 * scale, "scale {scale}");
    }

    /// A single child is returned unchanged.
    #[test]
    fn single_child_fixed_point(
        raw in prop::collection::vec(-2.0f64..2.0, 30 * 4),
        theta in prop::collection::vec(-3.0f64..3.0, 4),
    ) {
        let blocks = children(&[raw], 30, 4);
        let stacked = StackedScores::from_children(&blocks).unwrap();
        let v = variability(&stacked, &RidgePolicy::default()).unwrap();
        let s = stacked_sensitivity(&blocks);
        let child = ThetaParams::new(theta[..1].to_vec(), theta[1..3].to_vec(), theta[3]);
        let est = meta_estimator(&s, &v, &[child.clone()], &NodePath::root()).unwrap();
        for (a, b) in est.theta.to_vec().iter().zip(child.to_vec()) {
            prop_assert!((a - b).abs() <= 1e-9 * b.abs().max(1.0));
        }
    }
}

/// Two independent scalar blocks combine by inverse-variance weighting.
#[test]
fn scalar_blocks_give_inverse_variance_weights() {
    let n = 48;
    let a: Vec<f64> = (0..n).map(|i| if i < 24 { 1.0 } else { -1.0 }).collect();
    let b: Vec<f64> = (0..n).map(|i| if i % 2 == 0 { 3.0 } else { -3.0 }).collect();
    // orthogonal columns: zero cross-covariance
    assert_eq!(a.iter().zip(&b).map(|(x, y)| x * y).sum::<f64>(), 0.0);
    let blocks = vec![score_block(a.clone(), n, 1, 0), score_block(b.clone(), n, 1, 1)];
    let stacked = StackedScores::from_children(&blocks).unwrap();
    let v = variability(&stacked, &RidgePolicy::default()).unwrap();
    let (v1, v2) = (n as f64, 9.0 * n as f64);
    let (s1, s2) = (2.0, 5.0);
    let s = DMatrix::from_row_slice(1, 2, &[s1, s2]);
    let th = [ThetaParams::new(vec![], vec![], 1.0), ThetaParams::new(vec![], vec![], 4.0)];
    let est = meta_estimator(&s, &v, &th, &NodePath::root()).unwrap();
    let (w1, w2) = (s1 * s1 / v1, s2 * s2 / v2);
    let want = (w1 * 1.0 + w2 * 4.0) / (w1 + w2);
    assert!((est.theta.log_sigma2 - want).abs() < 1e-12);
    assert!((est.j[(0, 0)] - (w1 + w2)).abs() < 1e-12);
}

/// The oracle minimizes the objective at least as well as the closed form,
/// and lands close to it.
#[test]
fn oracle_objective_not_above_closed_form() {
    let mut c = SimConfig::preset("sim1-desk").unwrap();
    c.domain = DomainConfig::Grid { nx: 4, ny: 4 };
    c.partition.branching = vec![2];
    c.partition.min_leaf_size = 1;
    c.n = 2000;
    let domain = c.domain.build().unwrap();
    let tree = c.build_partition(&domain).unwrap();
    let data = simulate_dataset(&c, 0).unwrap();
    let blocks: Vec<_> = tree
        .leaves()
        .iter()
        .map(|l| data.block(l, tree.indices(l).unwrap()).unwrap())
        .collect();
    let fits: Vec<_> = blocks
        .iter()
        .map(|b| fit_local_mle(b, &c.spec, &initial_theta(b, &c.spec).unwrap(), &FitOptions::default()).unwrap())
        .collect();
    let scores: Vec<ScoreMatrix> = fits.iter().map(|f| f.scores.clone()).collect();
    let stacked = StackedScores::from_children(&scores).unwrap();
    let v = variability(&stacked, &RidgePolicy::default()).unwrap();
    let s = stacked_sensitivity(&scores);
    let thetas: Vec<ThetaParams> = fits.iter().map(|f| f.estimate.theta.clone()).collect();
    let meta = meta_estimator(&s, &v, &thetas, &NodePath::root()).unwrap();
    let producer = |t: &ThetaParams| {
        let sc = blocks
            .iter()
            .map(|b| per_observation_scores(b, t, &c.spec))
            .collect::<mrri::Result<Vec<_>>>()?;
        StackedScores::from_children(&sc)
    };
    let objective = |t: &ThetaParams| {
        let st = producer(t).unwrap();
        gmm_objective(&st.values.row_sum().transpose(), &v)
    };
    let oracle = gmm_oracle(producer, &v, &meta.theta, &c.spec, &GmmOptions::default()).unwrap();
    assert!(objective(&oracle) <= objective(&meta.theta) + 1e-8);
    let se = meta.std_errors().unwrap();
    for (k, (a, b)) in oracle.to_vec().iter().zip(meta.theta.to_vec()).enumerate() {
        assert!((a - b).abs() <= 0.5 * se[k], "component {k}: oracle {a} closed form {b} se {}", se[k]);
    }
}

#[test]
fn oracle_recovers_single_block_mle() {
    let mut c = SimConfig::preset("sim1-desk").unwrap();
    c.domain = DomainConfig::Grid { nx: 3, ny: 3 };
    c.n = 300;
    let data = simulate_dataset(&c, 1).unwrap();
    let block = data.block(&NodePath::root(), &(0..9).collect::<Vec<_>>()).unwrap();
    let tight = FitOptions {
        grad_tol: 1e-12,
        step_tol: 1e-14,
        max_iter: 2000,
    };
    let fit = fit_local_mle(&block, &c.spec, &initial_theta(&block, &c.spec).unwrap(), &tight).unwrap();
    let stacked = StackedScores::from_children(std::slice::from_ref(&fit.scores)).unwrap();
    let v = variability(&stacked, &RidgePolicy::default()).unwrap();
    let producer = |t: &ThetaParams| StackedScores::from_children(&[per_observation_scores(&block, t, &c.spec)?]);
    let start = ThetaParams::from_slice(
        &c.spec,
        &fit.estimate.theta.to_vec().iter().map(|x| x + 0.01).collect::<Vec<_>>(),
    )
    .unwrap();
    let oracle = gmm_oracle(producer, &v, &start, &c.spec, &GmmOptions::default()).unwrap();
    for (a, b) in oracle.to_vec().iter().zip(fit.estimate.theta.to_vec()) {
        assert!((a - b).abs() <= 1e-7 * b.abs().max(1.0), "{a} vs {b}");
    }
}

//! End-to-end acceptance checks. Each test writes one `PASS`/`FAIL` line to
//! stdout (bypassing the harness capture) and then asserts its verdict.
//!
//! The Monte Carlo studies are long on a single core: the two-ROI study alone
//! runs for about an hour.

use std::collections::BTreeSet;
use std::io::Write as _;
use std::sync::OnceLock;
use std::time::Instant;

use mrri::inference::z_contrast;
use mrri::integration::{
    gmm_oracle, meta_estimator, stacked_sensitivity, variability, weighted_scores, GmmOptions, RidgePolicy,
    StackedScores,
};
use mrri::likelihood::{fit_local_mle, initial_theta, log_likelihood, per_observation_scores, score, sensitivity_block};
use mrri::model::{build_cov_matrix, cov_nonstationary, implied_correlation_summary, mean_value};
use mrri::runtime::{execute, execute_with_report, fit_root, plan, read_dataset, write_dataset, ExecOptions};
use mrri::simulator::{run_study, simulate_dataset, DomainConfig, EstimatorSelection, MetricsTable, SimConfig, StudyReport};
use mrri::{
    build_partition, recursive_integrate, sequential_integrate, DataBlock, DataSource, Dataset, Location, MeanKind,
    Method, ModelSpec, NodePath, PartitionStrategy, ScoreMatrix, SpatialDomain, Stage, TauStructure, ThetaParams,
};
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, StandardNormal};

fn verdict(criterion: &str, pass: bool, detail: &str) {
    let line = format!(
        "criterion {criterion}: {} {detail}\n",
        if pass { "PASS" } else { "FAIL" }
    );
    // written past the harness capture so the line always shows in the log
    let mut out = std::io::stdout().lock();
    let _ = out.write_all(line.as_bytes());
    let _ = out.flush();
    assert!(pass, "criterion {criterion} failed: {detail}");
}

fn rel_gap(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs() / y.abs().max(1e-12))
        .fold(0.0, f64::max)
}

#[test]
fn criterion_1_single_leaf_equals_full_mle() {
    let started = Instant::now();
    let mut c = SimConfig::preset("sim1-desk").unwrap();
    c.domain = DomainConfig::Grid { nx: 4, ny: 4 };
    c.n = 2000;
    let data = simulate_dataset(&c, 0).unwrap();
    let tree = build_partition(&data.domain, &[1], PartitionStrategy::CoordinateSplit, 1).unwrap();
    let opts = c.integrate_options();
    let full = fit_root(&data, &c.spec, &ExecOptions::from(&opts)).unwrap();
    let want = full.estimate.theta.to_vec();
    let mut worst: f64 = 0.0;
    for est in [
        recursive_integrate(&tree, &data, &c.spec, &opts).unwrap(),
        sequential_integrate(&tree, &data, &c.spec, &opts).unwrap(),
    ] {
        for (a, b) in est.theta.to_vec().iter().zip(&want) {
            worst = worst.max((a - b).abs() / b.abs().max(1.0));
        }
    }
    let secs = started.elapsed().as_secs_f64();
    verdict(
        "1",
        worst <= 1e-6 && secs < 60.0,
        &format!("max component gap {worst:.2e} (bound 1e-6), {secs:.1} s (bound 60 s)"),
    );
}

#[test]
fn criterion_2_closed_form_matches_gmm_oracle() {
    let started = Instant::now();
    let mut c = SimConfig::preset("sim1-desk").unwrap();
    c.domain = DomainConfig::Grid { nx: 6, ny: 6 };
    c.partition.branching = vec![2];
    c.partition.min_leaf_size = 1;
    c.n = 2000;
    let domain = c.domain.build().unwrap();
    let tree = c.build_partition(&domain).unwrap();
    let data = simulate_dataset(&c, 0).unwrap();
    let blocks: Vec<DataBlock> = tree
        .leaves()
        .iter()
        .map(|l| data.block(l, tree.indices(l).unwrap()).unwrap())
        .collect();
    let fits: Vec<_> = blocks
        .iter()
        .map(|b| fit_local_mle(b, &c.spec, &initial_theta(b, &c.spec).unwrap(), &c.fit).unwrap())
        .collect();
    let scores: Vec<ScoreMatrix> = fits.iter().map(|f| f.scores.clone()).collect();
    let stacked = StackedScores::from_children(&scores).unwrap();
    let v = variability(&stacked, &c.ridge).unwrap();
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
    let oracle = gmm_oracle(producer, &v, &meta.theta, &c.spec, &GmmOptions::default()).unwrap();
    let gap = rel_gap(&meta.theta.to_vec(), &oracle.to_vec());
    let secs = started.elapsed().as_secs_f64();
    verdict(
        "2",
        gap <= 1e-4 && secs < 300.0,
        &format!("max relative gap closed form vs oracle {gap:.2e} (bound 1e-4), {secs:.1} s (bound 300 s)"),
    );
}

/// Bounds shared by the stationary designs.
fn check_table(t: &MetricsTable) -> (bool, Vec<String>) {
    let mut ok = true;
    let mut notes = Vec::new();
    for r in &t.rows {
        let rmse = (r.rmse - r.ese).abs() / r.ese;
        let ase = (r.ase - r.ese).abs() / r.ese;
        let bias = r.bias.abs() / r.ese;
        let good = rmse <= 0.15 && ase <= 0.20 && bias <= 0.2 && (0.90..=0.99).contains(&r.cp);
        ok &= good;
        notes.push(format!(
            "{}/{}: |RMSE-ESE|/ESE {rmse:.3} |ASE-ESE|/ESE {ase:.3} |BIAS|/ESE {bias:.3} CP {:.3}{}",
            t.method,
            r.parameter,
            r.cp,
            if good { "" } else { " <-" }
        ));
    }
    if t.failures > 0 {
        notes.push(format!("{}: {} failed replicates", t.method, t.failures));
    }
    (ok, notes)
}

fn print_notes(notes: &[String]) {
    let mut out = std::io::stdout().lock();
    for n in notes {
        let _ = writeln!(out, "    {n}");
    }
}

fn first_design() -> &'static StudyReport {
    static REPORT: OnceLock<StudyReport> = OnceLock::new();
    REPORT.get_or_init(|| {
        let mut c = SimConfig::preset("sim1-desk").unwrap();
        c.workers = std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1);
        run_study(&c).unwrap()
    })
}

#[test]
fn criterion_3_first_design_metrics() {
    let report = first_design();
    let mut pass = true;
    let mut notes = Vec::new();
    for m in [Method::Recursive, Method::Sequential] {
        let (ok, n) = check_table(report.table(m).unwrap());
        pass &= ok;
        notes.extend(n);
    }
    print_notes(&notes);
    verdict(
        "3",
        pass,
        &format!("S = 100, N = 2000, {} replicates, both estimators", report.config.replicates),
    );
}

#[test]
fn criterion_4_recursive_and_sequential_agree() {
    let report = first_design();
    let ase: Vec<f64> = report.table(Method::Sequential).unwrap().rows.iter().map(|r| r.ase).collect();
    let p = ase.len();
    let mut close = vec![0usize; p];
    let mut total = 0usize;
    for rep in &report.replicates {
        let (Some(r), Some(s)) = (rep.estimate(Method::Recursive), rep.estimate(Method::Sequential)) else {
            continue;
        };
        total += 1;
        for (k, (a, b)) in r.theta.to_vec().iter().zip(s.theta.to_vec()).enumerate() {
            if (a - b).abs() <= 0.5 * ase[k] {
                close[k] += 1;
            }
        }
    }
    let worst = close.iter().map(|&c| c as f64 / total as f64).fold(1.0, f64::min);
    verdict(
        "4",
        total > 0 && worst >= 0.95,
        &format!("smallest per-component share within 0.5 ASE: {:.3} over {total} replicates (bound 0.95)", worst),
    );
}

#[test]
fn criterion_5_two_roi_design() {
    let mut c = SimConfig::preset("sim3-desk").unwrap();
    c.workers = std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1);
    let report = run_study(&c).unwrap();
    let t = report.table(Method::Sequential).unwrap();
    let mut notes = Vec::new();
    let mut pass = t.failures == 0;
    for r in &t.rows {
        let good = (0.90..=0.99).contains(&r.cp);
        pass &= good;
        notes.push(format!("{}: CP {:.3}{}", r.parameter, r.cp, if good { "" } else { " <-" }));
    }
    // first covariate's coefficient in the range of each ROI
    let names = c.spec.param_names();
    let (q1, q2) = (
        names.iter().position(|n| n == "rho1[1]").unwrap(),
        names.iter().position(|n| n == "rho2[1]").unwrap(),
    );
    let truth = c.theta_true.to_vec();
    let diff = truth[q1] - truth[q2];
    let ests: Vec<_> = report.replicates.iter().filter_map(|r| r.estimate(Method::Sequential)).collect();
    let rate = |null: f64| {
        let hits = ests
            .iter()
            .filter(|e| z_contrast(e, q1, q2, null).map(|t| t.rejects(0.05)).unwrap_or(false))
            .count();
        hits as f64 / ests.len() as f64
    };
    let size = rate(diff);
    let power = rate(0.0);
    pass &= (0.01..=0.09).contains(&size) && power >= 0.90;
    notes.push(format!("type-I rate at the true difference {diff:.2}: {size:.3} (bounds 0.01..0.09)"));
    notes.push(format!("power against zero difference: {power:.3} (bound 0.90)"));
    if t.failures > 0 {
        notes.push(format!("{} failed replicates", t.failures));
    }
    print_notes(&notes);
    verdict("5", pass, &format!("two 10x10 ROIs, N = 2000, {} replicates, sequential", c.replicates));
}

fn draw_block(spec: &ModelSpec, theta: &ThetaParams, locs: Vec<Location>, n: usize, rng: &mut ChaCha20Rng) -> DataBlock {
    let s = locs.len();
    let mut x = DMatrix::zeros(n, spec.q);
    let mut y = DMatrix::zeros(n, s);
    for i in 0..n {
        x[(i, 0)] = 1.0;
        for k in 1..spec.q {
            x[(i, k)] = StandardNormal.sample(rng);
        }
        let xi: Vec<f64> = x.row(i).iter().copied().collect();
        let l = build_cov_matrix(&locs, &xi, theta, spec).unwrap().cholesky().unwrap().l();
        let z = DVector::from_fn(s, |_, _| StandardNormal.sample(rng));
        let mu = mean_value(spec, &xi, &theta.beta).unwrap();
        let draw = l * z;
        for j in 0..s {
            y[(i, j)] = mu + draw[j];
        }
    }
    DataBlock::new(&y, &x, locs, NodePath::root()).unwrap()
}

fn random_locs(rng: &mut ChaCha20Rng, two_roi: bool) -> Vec<Location> {
    let s = rng.random_range(2..6);
    (0..s)
        .map(|j| {
            let c = vec![rng.random_range(0.0..4.0), rng.random_range(0.0..4.0)];
            if two_roi {
                Location::with_roi(c, 1 + (j % 2) as u32)
            } else {
                Location::new(c)
            }
        })
        .collect()
}

fn worst_gradient_error(block: &DataBlock, theta: &ThetaParams, spec: &ModelSpec) -> f64 {
    let g = score(block, theta, spec).unwrap();
    let x = theta.to_vec();
    let mut worst: f64 = 0.0;
    for k in 0..x.len() {
        let h = 1e-5;
        let (mut up, mut dn) = (x.clone(), x.clone());
        up[k] += h;
        dn[k] -= h;
        let fu = log_likelihood(block, &ThetaParams::from_slice(spec, &up).unwrap(), spec).unwrap();
        let fd = log_likelihood(block, &ThetaParams::from_slice(spec, &dn).unwrap(), spec).unwrap();
        let num = (fu - fd) / (2.0 * h);
        worst = worst.max((g[k] - num).abs() / num.abs().max(1.0));
    }
    worst
}

fn gradient_suite(rng: &mut ChaCha20Rng) -> (bool, String) {
    let mut worst: f64 = 0.0;
    let stationary = ModelSpec::stationary(MeanKind::LinearInX, 2);
    for _ in 0..50 {
        let theta = ThetaParams::new(
            vec![rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)],
            vec![rng.random_range(-0.5..1.0), rng.random_range(-1.5..0.5)],
            rng.random_range(-0.5..0.5),
        );
        let locs = random_locs(rng, false);
        let block = draw_block(&stationary, &theta, locs, 6, rng);
        worst = worst.max(worst_gradient_error(&block, &theta, &stationary));
    }
    for i in 0..50 {
        let tau = if i % 2 == 0 { TauStructure::SingleTau2 } else { TauStructure::PerRoiTau2 };
        let spec = ModelSpec::nonstationary(MeanKind::ConstantIntercept, 3, 2, tau);
        let gamma: Vec<f64> = (0..spec.n_tau() + 6).map(|_| rng.random_range(-0.5..0.8)).collect();
        let theta = ThetaParams::new(vec![0.2], gamma, rng.random_range(-0.5..0.5));
        let locs = random_locs(rng, true);
        let block = draw_block(&spec, &theta, locs, 6, rng);
        worst = worst.max(worst_gradient_error(&block, &theta, &spec));
    }
    (worst <= 1e-5, format!("gradient vs finite differences, 100 instances: worst {worst:.1e}"))
}

fn equal_range_suite(rng: &mut ChaCha20Rng) -> (bool, String) {
    let spec = ModelSpec::nonstationary(MeanKind::ConstantIntercept, 3, 1, TauStructure::SingleTau2);
    let mut worst: f64 = 0.0;
    for _ in 0..200 {
        let log_tau2 = rng.random_range(-1.0..1.5);
        let rho: Vec<f64> = (0..3).map(|_| rng.random_range(-1.0..1.0)).collect();
        let x = [1.0, rng.random_range(-1.5..1.5), rng.random_range(-1.5..1.5)];
        let mut gamma = vec![log_tau2];
        gamma.extend_from_slice(&rho);
        let r = (rho[0] + rho[1] * x[1] + rho[2] * x[2]).exp();
        let a = Location::new(vec![rng.random_range(0.0..3.0), rng.random_range(0.0..3.0)]);
        let b = Location::new(vec![rng.random_range(0.0..3.0), rng.random_range(0.0..3.0)]);
        let got = cov_nonstationary(&a, &b, &x, &gamma, &spec).unwrap();
        let want = log_tau2.exp() * (-a.sq_dist(&b) / r).exp();
        worst = worst.max((got - want).abs() / want.abs());
    }
    (worst <= 1e-12, format!("equal-range reduction, 200 instances: worst {worst:.1e}"))
}

fn bartlett_suite(rng: &mut ChaCha20Rng) -> (bool, String) {
    let spec = ModelSpec::stationary(MeanKind::LinearInX, 2);
    let theta = ThetaParams::new(vec![0.2, -0.4], vec![0.0, 0.7f64.ln()], 0.5f64.ln());
    let locs = vec![
        Location::new(vec![0.0, 0.0]),
        Location::new(vec![1.0, 0.0]),
        Location::new(vec![0.0, 1.5]),
    ];
    let n = 20_000;
    let block = draw_block(&spec, &theta, locs, n, rng);
    let rows = per_observation_scores(&block, &theta, &spec).unwrap();
    let outer = sensitivity_block(&rows) / n as f64;
    let x = theta.to_vec();
    let p = x.len();
    let mut info = DMatrix::zeros(p, p);
    for j in 0..p {
        let h = 1e-5;
        let (mut up, mut dn) = (x.clone(), x.clone());
        up[j] += h;
        dn[j] -= h;
        let gu = score(&block, &ThetaParams::from_slice(&spec, &up).unwrap(), &spec).unwrap();
        let gd = score(&block, &ThetaParams::from_slice(&spec, &dn).unwrap(), &spec).unwrap();
        info.set_column(j, &(-(gu - gd) / (2.0 * h * n as f64)));
    }
    let mut worst: f64 = 0.0;
    for a in 0..p {
        for b in 0..p {
            let scale = (outer[(a, a)] * outer[(b, b)]).sqrt();
            worst = worst.max((outer[(a, b)] - info[(a, b)]).abs() / scale);
        }
    }
    (worst <= 0.1, format!("Bartlett identity, N = {n}: worst scaled gap {worst:.3} (bound 0.1)"))
}

fn projection_suite(rng: &mut ChaCha20Rng) -> (bool, String) {
    let (n, p) = (40, 3);
    let mut worst: f64 = 0.0;
    let mut used = 0;
    for _ in 0..50 {
        let k = rng.random_range(1..4);
        let blocks: Vec<ScoreMatrix> = (0..k)
            .map(|c| ScoreMatrix {
                values: DMatrix::from_fn(n, p, |_, _| rng.random_range(-2.0..2.0)),
                theta_at: vec![0.0; p],
                node_path: NodePath::from_indices(&[c as u16 + 1]),
            })
            .collect();
        let stacked = StackedScores::from_children(&blocks).unwrap();
        let v = variability(&stacked, &RidgePolicy::default()).unwrap();
        if v.epsilon != 0.0 {
            continue;
        }
        used += 1;
        let s = stacked_sensitivity(&blocks);
        let out = weighted_scores(&s, &v, &stacked, &[0.0; 3], &NodePath::root()).unwrap();
        let got = out.values.transpose() * &out.values;
        let want = &s * v.solve(&s.transpose());
        worst = worst.max((got - &want).norm() / want.norm());
    }
    (
        used > 0 && worst <= 1e-10,
        format!("projection identity, {used} instances: worst {worst:.1e}"),
    )
}

fn partition_suite(rng: &mut ChaCha20Rng) -> (bool, String) {
    let mut ok = true;
    for _ in 0..50 {
        let mut pts = BTreeSet::new();
        let target = rng.random_range(16..120);
        while pts.len() < target {
            pts.insert((rng.random_range(0..400), rng.random_range(0..400)));
        }
        let locs: Vec<Location> = pts
            .iter()
            .map(|&(a, b): &(i32, i32)| Location::new(vec![a as f64 / 7.0, b as f64 / 3.0]))
            .collect();
        let n = locs.len();
        let domain = SpatialDomain::new(locs).unwrap();
        let branching = [vec![2], vec![4], vec![2, 2], vec![3, 2]][rng.random_range(0..4)].clone();
        let tree = build_partition(&domain, &branching, PartitionStrategy::CoordinateSplit, 1).unwrap();
        let root: BTreeSet<usize> = tree.indices(&NodePath::root()).unwrap().iter().copied().collect();
        ok &= root == (0..n).collect();
        for path in tree.nodes().keys() {
            let kids = tree.children(path);
            if kids.is_empty() {
                continue;
            }
            let mut seen = BTreeSet::new();
            let mut total = 0;
            for k in &kids {
                let idx = tree.indices(k).unwrap();
                total += idx.len();
                seen.extend(idx.iter().copied());
            }
            let parent: BTreeSet<usize> = tree.indices(path).unwrap().iter().copied().collect();
            ok &= total == seen.len() && seen == parent;
        }
    }
    (ok, "partition disjoint union, 50 irregular domains".into())
}

fn determinism_suite() -> (bool, String) {
    let mut c = SimConfig::preset("sim1-desk").unwrap();
    c.n = 300;
    let d = simulate_dataset(&c, 2).unwrap();
    let tree = c.build_partition(&d.domain).unwrap();
    let mut ok = true;
    for method in [Method::Recursive, Method::Sequential] {
        let one = execute(&plan(&tree, method, 1).unwrap(), &tree, &d, &c.spec, &ExecOptions::default()).unwrap();
        let four = execute(&plan(&tree, method, 4).unwrap(), &tree, &d, &c.spec, &ExecOptions::default()).unwrap();
        let bits = |v: Vec<f64>| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
        ok &= bits(one.theta.to_vec()) == bits(four.theta.to_vec()) && one.j == four.j;
    }
    (ok, "worker-count determinism, 1 vs 4 workers".into())
}

fn container_suite(rng: &mut ChaCha20Rng) -> (bool, String) {
    let dir = tempfile::tempdir().unwrap();
    let mut ok = true;
    for t in 0..20 {
        let (n, s, q) = (rng.random_range(1..30), rng.random_range(1..15), rng.random_range(1..4));
        let roi = t % 2 == 0;
        let locs: Vec<Location> = (0..s)
            .map(|j| {
                let c = vec![j as f64 * 0.5, rng.random_range(-5.0..5.0)];
                if roi {
                    Location::with_roi(c, 1 + (j >= s / 2) as u32)
                } else {
                    Location::new(c)
                }
            })
            .collect();
        let y = DMatrix::from_fn(n, s, |_, _| f64::from_bits(rng.random::<u64>() >> 2));
        let x = DMatrix::from_fn(n, q, |_, k| if k == 0 { 1.0 } else { rng.random::<f64>() });
        let d = Dataset::new(y, x, SpatialDomain::new(locs).unwrap()).unwrap();
        let path = dir.path().join(format!("{t}.bin"));
        write_dataset(&path, &d).unwrap();
        let back = read_dataset(&path).unwrap().load().unwrap();
        let bits = |m: &DMatrix<f64>| m.iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        ok &= bits(&back.y) == bits(&d.y) && bits(&back.x) == bits(&d.x);
        ok &= back.domain.locations() == d.domain.locations();
    }
    (ok, "dataset container round trip, 20 random datasets".into())
}

#[test]
fn criterion_6_property_suites() {
    let mut rng = ChaCha20Rng::seed_from_u64(6);
    let results = [
        gradient_suite(&mut rng),
        equal_range_suite(&mut rng),
        bartlett_suite(&mut rng),
        projection_suite(&mut rng),
        partition_suite(&mut rng),
        determinism_suite(),
        container_suite(&mut rng),
    ];
    let notes: Vec<String> = results
        .iter()
        .map(|(ok, d)| format!("{} {d}", if *ok { "ok  " } else { "FAIL" }))
        .collect();
    print_notes(&notes);
    let passed = results.iter().filter(|(ok, _)| *ok).count();
    verdict("6", passed == results.len(), &format!("{passed}/{} property suites green", results.len()));
}

#[test]
fn criterion_7_fitted_amplitudes() {
    let spec = ModelSpec::nonstationary(MeanKind::ConstantIntercept, 5, 2, TauStructure::PerRoiTau2);
    let theta = ThetaParams::new(
        vec![-0.00538],
        vec![
            -0.108, -0.0699, 0.569, -0.00628, -0.0221, 0.0362, -0.00327, 0.561, -0.0046, -0.0119, 0.0656, -0.00397,
        ],
        -4.05,
    );
    let x = [1.0, 0.0, 0.0, 0.0, 0.0];
    let amp = |pair| implied_correlation_summary(&theta, &spec, &x, pair, 3).unwrap().amplitude;
    let got = [amp((1, 2)), amp((1, 1)), amp((2, 2))];
    let want = [0.915, 0.898, 0.933];
    let pass = got.iter().zip(&want).all(|(g, w)| (g - w).abs() <= 1e-3);
    verdict(
        "7",
        pass,
        &format!(
            "amplitudes between {:.4}, right {:.4}, left {:.4} (targets 0.915, 0.898, 0.933 +/- 0.001)",
            got[0], got[1], got[2]
        ),
    );
}

#[test]
fn criterion_8_large_grid_substitute() {
    let mut c = SimConfig::preset("sim2-desk").unwrap();
    c.workers = std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1);
    c.estimator = EstimatorSelection::Both;
    let report = run_study(&c).unwrap();
    let mut pass = true;
    let mut notes = Vec::new();
    for m in [Method::Recursive, Method::Sequential] {
        let (ok, n) = check_table(report.table(m).unwrap());
        pass &= ok;
        notes.extend(n);
    }
    let mut fewer = 0;
    let mut compared = 0;
    for rep in &report.replicates {
        if let (Some(r), Some(s)) = (rep.estimate(Method::Recursive), rep.estimate(Method::Sequential)) {
            compared += 1;
            if s.provenance.score_evaluations < r.provenance.score_evaluations {
                fewer += 1;
            }
        }
    }
    pass &= compared > 0 && fewer == compared;
    notes.push(format!(
        "sequential used fewer score evaluations in {fewer}/{compared} replicates"
    ));
    print_notes(&notes);
    verdict(
        "8",
        pass,
        &format!(
            "S = 1024, K = (4,4,4), N = {}, {} replicates, metric bounds and evaluation counts",
            c.n, c.replicates
        ),
    );
}

#[test]
fn criterion_8_leaf_stage_speedup() {
    let c = SimConfig::preset("sim2-desk").unwrap();
    let data = simulate_dataset(&c, 0).unwrap();
    let tree = c.build_partition(&data.domain).unwrap();
    let opts = ExecOptions::from(&c.integrate_options());
    let leaf_seconds = |workers| {
        let p = plan(&tree, Method::Sequential, workers).unwrap();
        let (_, report) = execute_with_report(&p, &tree, &data, &c.spec, &opts).unwrap();
        report.seconds(Stage::LeafFit)
    };
    // warm caches before timing
    leaf_seconds(1);
    let one = leaf_seconds(1);
    let four = leaf_seconds(4);
    let speedup = one / four;
    let cores = std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1);
    verdict(
        "8 (speedup)",
        speedup >= 1.5,
        &format!(
            "leaf-stage speedup 1 -> 4 workers {speedup:.2}x (bound 1.5x; {one:.2} s vs {four:.2} s on {cores} available cores)"
        ),
    );
}

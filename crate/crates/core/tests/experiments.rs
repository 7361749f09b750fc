use optsensor::densela::{random_stable_from, Matrix, SymPosDef};
use optsensor::experiments::{rule_of_thumb_sensor, run_fig1, run_fig2, ExperimentConfig};
use optsensor::flow::{flow_run, FlowOptions};
use optsensor::isospectral::{
    principal_angles, projector_from_sensor, random_projector, random_sensor_from,
};
use optsensor::kalmansim::{compare_sensors, psd_sqrt, SimConfig};
use optsensor::objective::{cost_j, SensorProblem};
use optsensor::rng;

#[test]
fn rule_of_thumb_is_the_small_gain_flow_limit() {
    let n = 6;
    let mut r = rng::stream(3, 0);
    let a = random_stable_from(&mut r, n, -0.5).unwrap();
    let q = SymPosDef::identity(n);
    let c0 = projector_from_sensor(&rule_of_thumb_sensor(&a, &q, &q, 1).unwrap());
    let pr = SensorProblem::new(a, q.clone(), q, 1e-4, 1).unwrap();
    let mut best: Option<(f64, optsensor::isospectral::Projector)> = None;
    for seed in 0..4 {
        let start = random_projector(n, 1, seed).unwrap();
        let t = flow_run(&pr, &start, &FlowOptions::default()).unwrap();
        if best.as_ref().is_none_or(|b| t.final_j() < b.0) {
            best = Some((t.final_j(), t.final_c));
        }
    }
    let angle = principal_angles(&c0, &best.unwrap().1).unwrap()[0];
    assert!(angle < 1e-3, "angle {angle}");
}

#[test]
fn fig1_fraction_is_ordered_by_margin() {
    let mut cfg = ExperimentConfig::fig1_default();
    cfg.n_samples = 60;
    cfg.margins = vec![0.1, 1.0, 3.0];
    cfg.gamma_grid = vec![1e-3, 1.0, 5.0, 10.0];
    let out = run_fig1(&cfg).unwrap();
    for &g in &cfg.gamma_grid {
        let rows: Vec<_> = cfg
            .margins
            .iter()
            .map(|&m| out.row("fig1", m, g).unwrap())
            .collect();
        assert_eq!(out.row("fig1", 0.1, 1e-3).unwrap().statistic, 100.0);
        for w in rows.windows(2) {
            let slack = 2.0 * (w[0].stderr.powi(2) + w[1].stderr.powi(2)).sqrt();
            assert!(w[1].statistic + slack >= w[0].statistic, "{:?}", w);
        }
    }
    assert!(out.faithful);
}

#[test]
fn fig1_stderr_shrinks_with_samples() {
    let mut cfg = ExperimentConfig::fig1_default();
    cfg.margins = vec![0.1];
    cfg.gamma_grid = vec![10.0];
    cfg.n_samples = 100;
    let small = run_fig1(&cfg).unwrap().rows[0].clone();
    cfg.n_samples = 400;
    let large = run_fig1(&cfg).unwrap().rows[0].clone();
    let ratio = large.stderr / small.stderr;
    assert!((0.3..0.75).contains(&ratio), "ratio {ratio}");
}

#[test]
fn fig2_ratios_and_ordering() {
    let mut cfg = ExperimentConfig::fig2_default();
    cfg.n_samples = 40;
    cfg.margins = vec![0.1, 0.5];
    cfg.gamma_grid = vec![0.01, 0.3, 1.2];
    let out = run_fig2(&cfg).unwrap();
    assert!(out.faithful);
    for &m in &cfg.margins {
        let c0: Vec<f64> = cfg
            .gamma_grid
            .iter()
            .map(|&g| out.row("fig2_c0", m, g).unwrap().statistic)
            .collect();
        // nearly indistinguishable at small gain, then growing
        assert!((c0[0] - 1.0).abs() < 1e-2, "{c0:?}");
        assert!(c0.windows(2).all(|w| w[1] + 1e-9 >= w[0]), "{c0:?}");
        for &g in &cfg.gamma_grid {
            let r0 = out.row("fig2_c0", m, g).unwrap();
            let rr = out.row("fig2_random", m, g).unwrap();
            assert!(r0.statistic >= 1.0 - 1e-9);
            assert!(rr.statistic > r0.statistic);
        }
    }
    let tight = out.row("fig2_c0", 0.1, 1.2).unwrap().statistic;
    let loose = out.row("fig2_c0", 0.5, 1.2).unwrap().statistic;
    assert!(tight > loose);
}

#[test]
fn random_sensor_loses_to_rule_of_thumb_on_average() {
    // theoretical costs, averaged over instances, plus one simulated comparison
    let n = 6;
    let q = SymPosDef::new(Matrix::identity(n, n) / (n as f64).sqrt()).unwrap();
    let l = SymPosDef::identity(n);
    let (mut sum0, mut sumr) = (0.0, 0.0);
    for k in 0..10u64 {
        let mut r = rng::stream(17, k);
        let a = random_stable_from(&mut r, n, -0.5).unwrap();
        let c0 = rule_of_thumb_sensor(&a.transpose(), &q, &l, 1).unwrap();
        let cr = random_sensor_from(&mut r, n, 1).unwrap();
        let pr = SensorProblem::new(a.transpose(), q.clone(), l.clone(), 1.0, 1).unwrap();
        let star = flow_run(&pr, &projector_from_sensor(&c0), &FlowOptions::default()).unwrap();
        let cstar = optsensor::isospectral::sensor_from_projector(&star.final_c).unwrap();
        let dt = 0.05 / a.matrix().norm();
        let mut t = SimConfig::new(
            a.clone(),
            psd_sqrt(q.matrix()).unwrap(),
            c0.clone(),
            1.0,
            dt,
            40.0,
        );
        t.n_paths = 4;
        t.seed = k;
        let rows = compare_sensors(&a, &q, &l, 1.0, &[cstar, c0, cr], &t).unwrap();
        // compare_sensors on plant A equals the sensor problem of A transposed
        let j0 = cost_j(
            &pr,
            &projector_from_sensor(&rule_of_thumb_sensor(&a.transpose(), &q, &l, 1).unwrap()),
        )
        .unwrap();
        assert!((rows[1].j - j0).abs() <= 1e-9 * j0);
        assert!((rows[0].ratio_to_best - 1.0).abs() < 1e-9);
        sum0 += rows[1].ratio_to_best;
        sumr += rows[2].ratio_to_best;
    }
    assert!(sumr > sum0, "random {sumr} vs rule of thumb {sum0}");
}

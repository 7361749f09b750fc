//! Acceptance suite: one PASS/FAIL line per criterion.
//!
//! Criteria listed in `KNOWN_GAPS` are still evaluated and reported as FAIL
//! when they fail; they do not fail the run. Any other failure does, and so
//! does a known gap that unexpectedly passes (so the list stays accurate).

use std::fs;
use std::time::{Duration, Instant};

use optsensor::densela::{
    closed_form_checks, gaussian_matrix, random_stable_from, Matrix, SymPosDef,
};
use optsensor::experiments::{run_fig1, run_fig2, ExperimentConfig};
use optsensor::extremal::{
    count_partitions_p, count_partitions_q, m0_relative_gap, signature_census, signature_formula,
    UnorderedPair,
};
use optsensor::flow::{flow_run, FlowOptions};
use optsensor::isospectral::{
    normal_metric, principal_angles, random_projector_from, retract, retraction_velocity, Projector,
};
use optsensor::kalmansim::{simulate_error_cov, InnovationSign, SimConfig};
use optsensor::objective::{big_m0, cost_j, grad_j, hessian_form, SensorProblem};
use optsensor::{rng, StableMatrix};
use optsensor_cli::run;

const KNOWN_GAPS: &[u32] = &[8];
const SEED: u64 = 20_240_601;

struct Outcome {
    pass: bool,
    detail: String,
}

fn binomial(n: usize, k: usize) -> usize {
    (0..k).fold(1, |acc, i| acc * (n - i) / (i + 1))
}

fn skew(r: &mut rng::SampleRng, n: usize) -> Matrix {
    let g = gaussian_matrix(r, n, n);
    (&g - g.transpose()) * 0.5
}

/// The 50-instance set shared by the gradient and Hessian criteria.
fn oracle_instances() -> Vec<(SensorProblem, Projector, rng::SampleRng)> {
    (0..50u64)
        .map(|k| {
            let n = 3 + (k % 4) as usize;
            let p = 1 + ((k / 4) % 2) as usize;
            let gamma = if (k / 8) % 2 == 0 { 0.05 } else { 0.5 };
            let mut r = rng::substream(SEED, &[2, k]);
            let a = random_stable_from(&mut r, n, -1.0).unwrap();
            let pr =
                SensorProblem::new(a, SymPosDef::identity(n), SymPosDef::identity(n), gamma, p)
                    .unwrap();
            let c = random_projector_from(&mut r, n, p).unwrap();
            (pr, c, r)
        })
        .collect()
}

fn j_along(pr: &SensorProblem, c: &Projector, omega: &Matrix, t: f64) -> f64 {
    cost_j(pr, &retract(c, omega, t).unwrap()).unwrap()
}

fn c1() -> Outcome {
    let checks = closed_form_checks().unwrap();
    let worst = checks.iter().map(|c| c.1).fold(0.0, f64::max);
    Outcome {
        pass: worst < 1e-10,
        detail: format!(
            "{} closed-form cases, max abs error {worst:.1e}",
            checks.len()
        ),
    }
}

fn c2() -> Outcome {
    let h = 1e-5;
    let mut worst = 0.0f64;
    let mut count = 0;
    for (pr, c, mut r) in oracle_instances() {
        let grad = grad_j(&pr, &c).unwrap();
        for _ in 0..10 {
            let omega = skew(&mut r, pr.n());
            let fd = (j_along(&pr, &c, &omega, h) - j_along(&pr, &c, &omega, -h)) / (2.0 * h);
            let v = retraction_velocity(&c, &omega).unwrap();
            let pred = normal_metric(&grad, &v).unwrap();
            worst = worst.max((fd - pred).abs() / (grad.norm() * v.norm()));
            count += 1;
        }
    }
    Outcome {
        pass: worst < 1e-4,
        detail: format!("{count} directions, max relative error {worst:.1e}"),
    }
}

fn c3() -> Outcome {
    let h = 1e-3;
    let mut worst = 0.0f64;
    for (pr, c, mut r) in oracle_instances() {
        let omega = skew(&mut r, pr.n());
        let j0 = cost_j(&pr, &c).unwrap();
        let second =
            (j_along(&pr, &c, &omega, h) - 2.0 * j0 + j_along(&pr, &c, &omega, -h)) / (h * h);
        let form = hessian_form(&pr, &c, &omega, &omega).unwrap();
        let scale = form.abs().max(1e-3 * j0 * omega.norm_squared());
        worst = worst.max((second - form).abs() / scale);
    }
    Outcome {
        pass: worst < 1e-3,
        detail: format!("50 instances, max relative error {worst:.1e}"),
    }
}

fn c4() -> Outcome {
    let mut problems = Vec::new();
    let mut cases = 0;
    for n in 2..=6usize {
        for p in 1..=3usize.min(n - 1) {
            cases += 1;
            let mut r = rng::substream(SEED, &[4, n as u64, p as u64]);
            let a = random_stable_from(&mut r, n, -1.0).unwrap();
            let id = SymPosDef::identity(n);
            let census = match signature_census(&a, &id, &id, p, 0.05) {
                Ok(c) => c,
                Err(e) => {
                    problems.push(format!("(n={n},p={p}) {e}"));
                    continue;
                }
            };
            if census.records.len() != binomial(n, p) {
                problems.push(format!("(n={n},p={p}) {} extremals", census.records.len()));
            }
            for rec in &census.records {
                let formula = signature_formula(&rec.index_set, n, p);
                if rec.signature.pair() != formula || rec.signature.n_zero != 0 {
                    problems.push(format!(
                        "(n={n},p={p}) {:?}: {:?} vs {formula}",
                        rec.index_set, rec.signature
                    ));
                }
            }
            let definite = census.definite();
            let minima = definite.iter().filter(|d| d.1 > 0).count();
            let maxima = definite.iter().filter(|d| d.1 < 0).count();
            if minima != 1 || maxima != 1 {
                problems.push(format!("(n={n},p={p}) {minima} minima, {maxima} maxima"));
            }
            let best = census
                .records
                .iter()
                .min_by(|x, y| x.j.total_cmp(&y.j))
                .unwrap();
            if best.index_set != (1..=p).collect::<Vec<_>>() {
                problems.push(format!("(n={n},p={p}) minimum at {:?}", best.index_set));
            }
        }
    }
    Outcome {
        pass: problems.is_empty(),
        detail: if problems.is_empty() {
            format!("{cases} (n,p) cases consistent")
        } else {
            problems.join("; ")
        },
    }
}

fn c5() -> Outcome {
    let pair = signature_formula(&[1, 3, 4, 6], 7, 4);
    Outcome {
        pass: pair == UnorderedPair(4, 8),
        detail: format!("formula pair {pair}"),
    }
}

fn c6() -> Outcome {
    let mut bad = Vec::new();
    for p in 1..=6usize {
        for m in 0..=60usize {
            let q = count_partitions_q(p, m, None);
            let expected = m
                .checked_sub(p * (p - 1) / 2)
                .map(|r| count_partitions_p(r, p))
                .unwrap_or(0);
            if q != expected {
                bad.push(format!("Q({p},{m})={q} vs {expected}"));
            }
        }
    }
    for n in 1..=10usize {
        for p in 1..=5usize.min(n) {
            let max_m = (n - p + 1..=n).sum::<usize>();
            let total: u64 = (0..=max_m).map(|m| count_partitions_q(p, m, Some(n))).sum();
            if total != binomial(n, p) as u64 {
                bad.push(format!("n={n},p={p}: total {total}"));
            }
        }
    }
    Outcome {
        pass: bad.is_empty(),
        detail: if bad.is_empty() {
            "identities hold for p<=6, m<=60 and n<=10, p<=5".into()
        } else {
            bad.join("; ")
        },
    }
}

fn c7() -> Outcome {
    let (n, p) = (5, 2);
    let mut r = rng::substream(SEED, &[7]);
    let a = random_stable_from(&mut r, n, -1.0).unwrap();
    let id = SymPosDef::identity(n);
    let census = signature_census(&a, &id, &id, p, 0.1).unwrap();
    let best = census
        .records
        .iter()
        .min_by(|x, y| x.j.total_cmp(&y.j))
        .unwrap();
    let pr = SensorProblem::new(a, id.clone(), id, 0.1, p).unwrap();
    let (mut to_min, mut unmatched, mut unconverged) = (0, 0, 0);
    for _ in 0..100 {
        let c0 = random_projector_from(&mut r, n, p).unwrap();
        let trace = match flow_run(&pr, &c0, &FlowOptions::default()) {
            Ok(t) if t.converged => t,
            _ => {
                unconverged += 1;
                continue;
            }
        };
        let angle = |rec: &optsensor::extremal::ExtremalRecord| {
            principal_angles(&trace.final_c, rec.projector())
                .unwrap()
                .into_iter()
                .fold(0.0, f64::max)
        };
        if angle(best) < 1e-4 {
            to_min += 1;
        }
        if !census.records.iter().any(|rec| angle(rec) < 1e-4) {
            unmatched += 1;
        }
    }
    Outcome {
        pass: to_min >= 99 && unmatched == 0,
        detail: format!(
            "{to_min}/100 reached the minimum, {unconverged} unconverged, {unmatched} unmatched limits"
        ),
    }
}

fn fig1_point(margin: f64, gamma: f64) -> (f64, f64, usize) {
    let mut cfg = ExperimentConfig::fig1_default();
    cfg.margins = vec![margin];
    cfg.gamma_grid = vec![gamma];
    cfg.n_samples = 500;
    cfg.master_seed = SEED;
    let out = run_fig1(&cfg).unwrap();
    let row = out.row("fig1", margin, gamma).unwrap();
    (row.statistic, row.stderr, row.n_effective)
}

fn c8() -> Outcome {
    let (f3, s3, n3) = fig1_point(3.0, 3.0);
    let (f01, s01, n01) = fig1_point(0.1, 10.0);
    Outcome {
        pass: (f3 - 99.21).abs() <= 2.0 && (f01 - 41.35).abs() <= 5.0,
        detail: format!(
            "margin 3, gamma 3: {f3:.2}% (se {s3:.2}, n {n3}; target 99.21 +- 2); \
             margin 0.1, gamma 10: {f01:.2}% (se {s01:.2}, n {n01}; target 41.35 +- 5)"
        ),
    }
}

fn fig2_point(experiment: &str, margin: f64, gamma: f64) -> (f64, f64, usize) {
    let mut cfg = ExperimentConfig::fig2_default();
    cfg.margins = vec![margin];
    cfg.gamma_grid = vec![gamma];
    cfg.n_samples = 300;
    cfg.master_seed = SEED;
    let out = run_fig2(&cfg).unwrap();
    let row = out.row(experiment, margin, gamma).unwrap();
    (row.statistic, row.stderr, row.n_effective)
}

fn c9() -> Outcome {
    let (r0, s0, n0) = fig2_point("fig2_c0", 0.1, 0.904);
    let (rr, sr, nr) = fig2_point("fig2_random", 0.5, 1.202);
    Outcome {
        pass: (r0 - 1.0520).abs() <= 0.03 && (rr - 1.3566).abs() <= 0.05,
        detail: format!(
            "c0 margin 0.1, gamma 0.904: {r0:.4} (se {s0:.4}, n {n0}; target 1.0520 +- 0.03); \
             random margin 0.5, gamma 1.202: {rr:.4} (se {sr:.4}, n {nr}; target 1.3566 +- 0.05)"
        ),
    }
}

fn c10() -> Outcome {
    let a = StableMatrix::new(Matrix::from_row_slice(2, 2, &[-1.0, 0.0, 0.0, -2.0])).unwrap();
    let mut cfg = SimConfig::new(
        a,
        Matrix::identity(2, 2),
        optsensor::isospectral::SensorMatrix::from_vector(&[1.0, 0.0]).unwrap(),
        1.0,
        1e-3,
        200.0,
    );
    cfg.seed = SEED;
    let plus = simulate_error_cov(&cfg).unwrap();
    cfg.innovation = InnovationSign::Minus;
    let minus = simulate_error_cov(&cfg).unwrap();
    Outcome {
        pass: plus.rel_error < 0.05 && minus.rel_error > 0.5,
        detail: format!(
            "standard filter rel_error {:.4}; literal minus sign rel_error {:.3}",
            plus.rel_error, minus.rel_error
        ),
    }
}

fn c11() -> Outcome {
    let n = 5;
    let mut worst = f64::INFINITY;
    for k in 0..200u64 {
        let mut r = rng::substream(SEED, &[11, k]);
        let a = random_stable_from(&mut r, n, -1.0).unwrap();
        let gq = gaussian_matrix(&mut r, n, n);
        let gl = gaussian_matrix(&mut r, n, n);
        let q = SymPosDef::new(&gq * gq.transpose()).unwrap();
        let l = SymPosDef::new(&gl * gl.transpose()).unwrap();
        let m0 = big_m0(&a, &q, &l).unwrap();
        worst = worst.min(m0_relative_gap(&m0).unwrap());
    }
    Outcome {
        pass: worst > 1e-12,
        detail: format!("200 draws, smallest relative M0 gap {worst:.2e}"),
    }
}

fn c12() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let problem = dir.path().join("problem.json");
    fs::write(
        &problem,
        r#"{"A":{"rows":3,"cols":3,"data":[-1,0.4,0,0,-2,0.3,0.2,0,-3]},"gamma":0.5,"p":1}"#,
    )
    .unwrap();
    let pf = problem.to_str().unwrap();
    let commands: Vec<(&str, Vec<&str>, &str)> = vec![
        ("fig1", vec!["fig1", "--samples", "40"], "fig1.csv"),
        ("fig2", vec!["fig2", "--samples", "8"], "fig2.csv"),
        (
            "enumerate",
            vec!["enumerate", "--config", pf],
            "extremals.csv",
        ),
        ("flow", vec!["flow", "--config", pf], "flow.csv"),
        (
            "verify-kalman",
            vec!["verify-kalman", "--samples", "8", "--path-csv"],
            "kalman_paths.csv",
        ),
    ];
    let mut bad = Vec::new();
    for (name, args, file) in &commands {
        let mut outputs = Vec::new();
        for rep in 0..2 {
            let out = dir.path().join(format!("{name}-{rep}"));
            let mut argv = vec!["optsensor"];
            argv.extend(args.iter().copied());
            argv.extend(["--seed", "7", "--out", out.to_str().unwrap()]);
            let code = run(argv);
            outputs.push(fs::read(out.join(file)).ok().filter(|_| code == 0));
        }
        if outputs[0].is_none() || outputs[0] != outputs[1] {
            bad.push(*name);
        }
    }
    Outcome {
        pass: bad.is_empty(),
        detail: if bad.is_empty() {
            format!("{} commands rerun byte-identical", commands.len())
        } else {
            format!("differing or failing: {}", bad.join(", "))
        },
    }
}

fn main() {
    let criteria: Vec<(u32, &str, Duration, fn() -> Outcome)> = vec![
        (1, "closed-form solver suite", Duration::from_secs(1), c1),
        (2, "gradient oracle", Duration::from_secs(30), c2),
        (3, "Hessian oracle", Duration::from_secs(120), c3),
        (4, "extremal census", Duration::from_secs(300), c4),
        (5, "worked signature example", Duration::from_secs(1), c5),
        (6, "partition identities", Duration::from_secs(10), c6),
        (7, "almost-global convergence", Duration::from_secs(300), c7),
        (8, "gamma* fraction points", Duration::from_secs(1800), c8),
        (
            9,
            "rule-of-thumb ratio points",
            Duration::from_secs(1800),
            c9,
        ),
        (10, "tr K equals MSE", Duration::from_secs(120), c10),
        (11, "M0 genericity", Duration::from_secs(10), c11),
        (12, "CLI determinism", Duration::from_secs(600), c12),
    ];
    let mut unexpected = Vec::new();
    for (id, name, budget, check) in criteria {
        let start = Instant::now();
        let outcome = check();
        let elapsed = start.elapsed();
        let pass = outcome.pass && elapsed <= budget;
        println!(
            "criterion {id:>2} {} {name}: {} [{:.1}s / budget {}s]",
            if pass { "PASS" } else { "FAIL" },
            outcome.detail,
            elapsed.as_secs_f64(),
            budget.as_secs()
        );
        if pass == KNOWN_GAPS.contains(&id) {
            unexpected.push(id);
        }
    }
    if !unexpected.is_empty() {
        eprintln!("unexpected outcome for criteria {unexpected:?}");
        std::process::exit(1);
    }
}

//! Batch studies over random stable systems.
//!
//! `fig1`: for each stability margin, the percentage of sampled systems whose
//! `γ*` exceeds each `γ` of the grid. `fig2`: the mean of `J(γ, c₀)/J(γ, c*)`
//! for the rule-of-thumb sensor `c₀`, and of `J(γ, c_r)/J(γ, c*)` for a random
//! unit sensor `c_r`.
//!
//! Sample `s` at margin index `i` draws from the random stream
//! `(experiment, i, s, ...)`, so results do not depend on thread count.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::densela::{random_stable_from, sym_eig, Matrix, StableMatrix, SymPosDef};
use crate::error::{Error, Result};
use crate::extremal::{gamma_star, m0_relative_gap, M0_GAP_REL};
use crate::flow::{flow_run, FlowOptions};
use crate::io::MatrixJson;
use crate::isospectral::{
    projector_from_sensor, random_projector_from, random_sensor_from, SensorMatrix,
};
use crate::objective::{big_m0, cost_j, SensorProblem};
use crate::rng;

/// Geometric grid size of the `γ*` scan in [`run_fig1`].
pub const FIG1_SCAN_POINTS: usize = 24;
/// Random starts added to the `c₀` start when searching for `c*`.
pub const FIG2_RANDOM_STARTS: usize = 4;

const FIG1_STREAM: u64 = 1;
const FIG2_STREAM: u64 = 2;

/// A weight matrix: a named preset or explicit entries.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum MatrixSpec {
    Preset(Preset),
    Explicit(MatrixJson),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Preset {
    /// `I`
    Identity,
    /// `I/2`
    HalfIdentity,
    /// `I/√n`
    IdentityOverSqrtN,
}

impl MatrixSpec {
    pub fn build(&self, n: usize) -> Result<SymPosDef> {
        match self {
            MatrixSpec::Preset(Preset::Identity) => Ok(SymPosDef::identity(n)),
            MatrixSpec::Preset(Preset::HalfIdentity) => {
                SymPosDef::new(Matrix::identity(n, n) * 0.5)
            }
            MatrixSpec::Preset(Preset::IdentityOverSqrtN) => {
                SymPosDef::new(Matrix::identity(n, n) / (n as f64).sqrt())
            }
            MatrixSpec::Explicit(j) => {
                let m = Matrix::try_from(j.clone())?;
                if m.nrows() != n || m.ncols() != n {
                    return Err(Error::Config(format!(
                        "weight matrix is {}x{}, expected {n}x{n}",
                        m.nrows(),
                        m.ncols()
                    )));
                }
                SymPosDef::new(m)
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub n: usize,
    pub p: usize,
    #[serde(rename = "Q_spec")]
    pub q_spec: MatrixSpec,
    #[serde(rename = "L_spec")]
    pub l_spec: MatrixSpec,
    /// Stability margins; sample matrices have spectral abscissa `−|margin|`.
    pub margins: Vec<f64>,
    pub gamma_grid: Vec<f64>,
    pub n_samples: usize,
    pub master_seed: u64,
}

impl ExperimentConfig {
    pub fn fig1_default() -> Self {
        ExperimentConfig {
            n: 4,
            p: 1,
            q_spec: MatrixSpec::Preset(Preset::HalfIdentity),
            l_spec: MatrixSpec::Preset(Preset::Identity),
            margins: vec![0.1, 0.5, 1.0, 3.0],
            gamma_grid: vec![
                0.001, 0.01, 0.1, 0.5, 1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0, 9.0, 10.0,
            ],
            n_samples: 500,
            master_seed: 0,
        }
    }

    pub fn fig2_default() -> Self {
        ExperimentConfig {
            n: 6,
            p: 1,
            q_spec: MatrixSpec::Preset(Preset::IdentityOverSqrtN),
            l_spec: MatrixSpec::Preset(Preset::Identity),
            margins: vec![0.01, 0.05, 0.1, 0.5],
            gamma_grid: vec![0.01, 0.1, 0.3, 0.6, 0.904, 1.202, 1.5, 2.0],
            n_samples: 300,
            master_seed: 0,
        }
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let cfg: ExperimentConfig = serde_json::from_str(s)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.n == 0 || self.p == 0 || self.p > self.n {
            return Err(Error::Config(format!(
                "need 1 <= p <= n, got n = {}, p = {}",
                self.n, self.p
            )));
        }
        if self.n_samples == 0 {
            return Err(Error::Config("n_samples must be >= 1".into()));
        }
        if self.margins.is_empty()
            || self
                .margins
                .iter()
                .any(|m| !(m.abs() > 0.0) || !m.is_finite())
        {
            return Err(Error::Config(
                "margins must be a nonempty list of nonzero finite numbers".into(),
            ));
        }
        if self.gamma_grid.is_empty()
            || self
                .gamma_grid
                .iter()
                .any(|g| !(*g > 0.0) || !g.is_finite())
        {
            return Err(Error::Config(
                "gamma_grid must be a nonempty list of positive finite numbers".into(),
            ));
        }
        if self.gamma_grid.windows(2).any(|w| !(w[0] < w[1])) {
            return Err(Error::Config(
                "gamma_grid must be strictly ascending".into(),
            ));
        }
        self.q_spec.build(self.n)?;
        self.l_spec.build(self.n)?;
        Ok(())
    }

    fn weights(&self) -> Result<(SymPosDef, SymPosDef)> {
        Ok((self.q_spec.build(self.n)?, self.l_spec.build(self.n)?))
    }

    fn uses_identity_l(&self) -> bool {
        matches!(self.l_spec, MatrixSpec::Preset(Preset::Identity))
    }

    /// Matches the reference setup of the `γ*` study.
    pub fn is_fig1_faithful(&self) -> bool {
        self.n == 4
            && self.p == 1
            && self.q_spec == MatrixSpec::Preset(Preset::HalfIdentity)
            && self.uses_identity_l()
    }

    /// Matches the reference setup of the rule-of-thumb study.
    pub fn is_fig2_faithful(&self) -> bool {
        self.n == 6
            && self.p == 1
            && self.q_spec == MatrixSpec::Preset(Preset::IdentityOverSqrtN)
            && self.uses_identity_l()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    pub experiment: String,
    pub margin: f64,
    pub gamma: f64,
    pub statistic: f64,
    pub stderr: f64,
    pub n_effective: usize,
}

#[derive(Debug, Clone, Serialize)]
pub struct ExperimentOutput {
    pub rows: Vec<ResultRow>,
    /// Samples excluded per margin (solver failures or non-converged flows).
    pub failures: Vec<(f64, usize)>,
    pub faithful: bool,
    pub assumptions: Vec<String>,
}

impl ExperimentOutput {
    pub fn to_csv(&self) -> Result<String> {
        rows_to_csv(&self.rows)
    }

    pub fn row(&self, experiment: &str, margin: f64, gamma: f64) -> Option<&ResultRow> {
        self.rows
            .iter()
            .find(|r| r.experiment == experiment && r.margin == margin && r.gamma == gamma)
    }
}

/// CSV with header `experiment,margin,gamma,statistic,stderr,n_effective`.
pub fn rows_to_csv(rows: &[ResultRow]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r)?;
    }
    if rows.is_empty() {
        w.write_record([
            "experiment",
            "margin",
            "gamma",
            "statistic",
            "stderr",
            "n_effective",
        ])?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Io(e.into_error()))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

/// Top-`p` eigenvectors of `M₀` as unit rows.
pub fn rule_of_thumb_sensor(
    a: &StableMatrix,
    q: &SymPosDef,
    l: &SymPosDef,
    p: usize,
) -> Result<SensorMatrix> {
    let m0 = big_m0(a, q, l)?;
    let gap = m0_relative_gap(&m0)?;
    if m0.nrows() > 1 && gap <= M0_GAP_REL {
        return Err(Error::Degenerate { gap });
    }
    if p == 0 || p > m0.nrows() {
        return Err(Error::Input(format!(
            "rank p = {p} must satisfy 1 <= p <= n = {}",
            m0.nrows()
        )));
    }
    let eig = sym_eig(&m0)?;
    SensorMatrix::new(eig.vectors.columns(0, p).transpose())
}

fn sample_system(
    cfg: &ExperimentConfig,
    stream: u64,
    margin_index: usize,
    sample: usize,
) -> Result<StableMatrix> {
    let margin = cfg.margins[margin_index].abs();
    let mut r = rng::substream(
        cfg.master_seed,
        &[stream, margin_index as u64, sample as u64],
    );
    random_stable_from(&mut r, cfg.n, -margin)
}

fn mean_and_stderr(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    if v.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let mean = v.iter().sum::<f64>() / n;
    if v.len() < 2 {
        return (mean, 0.0);
    }
    let var = v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

fn l_assumption(cfg: &ExperimentConfig) -> Vec<String> {
    if cfg.uses_identity_l() {
        vec!["L = I, so J is the mean-squared estimation error".into()]
    } else {
        Vec::new()
    }
}

/// Percentage of systems with `γ < γ*` for each margin and grid point.
/// `γ*` is scanned up to the largest grid value; systems that stay regular
/// that far count as `γ < γ*` everywhere on the grid.
pub fn run_fig1(cfg: &ExperimentConfig) -> Result<ExperimentOutput> {
    cfg.validate()?;
    let (q, l) = cfg.weights()?;
    let gamma_max = *cfg.gamma_grid.last().expect("validated nonempty");
    let mut rows = Vec::new();
    let mut failures = Vec::new();
    for (mi, &margin) in cfg.margins.iter().enumerate() {
        let stars: Vec<Option<(f64, bool)>> = (0..cfg.n_samples)
            .into_par_iter()
            .map(|s| {
                let a = sample_system(cfg, FIG1_STREAM, mi, s).ok()?;
                let gs = gamma_star(&a, &q, &l, cfg.p, gamma_max, FIG1_SCAN_POINTS).ok()?;
                Some((gs.gamma_star, gs.censored))
            })
            .collect();
        let ok: Vec<(f64, bool)> = stars.iter().flatten().copied().collect();
        failures.push((margin.abs(), cfg.n_samples - ok.len()));
        let n_eff = ok.len();
        for &g in &cfg.gamma_grid {
            let below = ok
                .iter()
                .filter(|(gs, censored)| *censored || g < *gs)
                .count();
            let frac = if n_eff == 0 {
                f64::NAN
            } else {
                below as f64 / n_eff as f64
            };
            let se = if n_eff == 0 {
                f64::NAN
            } else {
                (frac * (1.0 - frac) / n_eff as f64).sqrt()
            };
            rows.push(ResultRow {
                experiment: "fig1".into(),
                margin: margin.abs(),
                gamma: g,
                statistic: 100.0 * frac,
                stderr: 100.0 * se,
                n_effective: n_eff,
            });
        }
    }
    Ok(ExperimentOutput {
        rows,
        failures,
        faithful: cfg.is_fig1_faithful(),
        assumptions: l_assumption(cfg),
    })
}

/// `(J(c₀)/J(c*), J(c_r)/J(c*))` for one system at one gain, or `None` when no
/// flow converged.
fn fig2_ratios(
    a: &StableMatrix,
    q: &SymPosDef,
    l: &SymPosDef,
    p: usize,
    gamma: f64,
    c0: &SensorMatrix,
    cr: &SensorMatrix,
    starts: &[crate::isospectral::Projector],
) -> Result<Option<(f64, f64)>> {
    let problem = SensorProblem::new(a.clone(), q.clone(), l.clone(), gamma, p)?;
    let p0 = projector_from_sensor(c0);
    let opts = FlowOptions::default();
    let mut best = f64::INFINITY;
    for start in std::iter::once(&p0).chain(starts) {
        if let Ok(trace) = flow_run(&problem, start, &opts) {
            if trace.converged {
                best = best.min(trace.final_j());
            }
        }
    }
    if !best.is_finite() {
        return Ok(None);
    }
    let j0 = cost_j(&problem, &p0)?;
    let jr = cost_j(&problem, &projector_from_sensor(cr))?;
    Ok(Some((j0 / best, jr / best)))
}

/// Mean `J(γ, c₀)/J(γ, c*)` (`fig2_c0`) and `J(γ, c_r)/J(γ, c*)`
/// (`fig2_random`) per margin and gain. `c*` is the lowest converged flow
/// limit from `c₀` and [`FIG2_RANDOM_STARTS`] random projectors; `c_r` is drawn
/// once per system.
pub fn run_fig2(cfg: &ExperimentConfig) -> Result<ExperimentOutput> {
    cfg.validate()?;
    let (q, l) = cfg.weights()?;
    let mut rows = Vec::new();
    let mut failures = Vec::new();
    for (mi, &margin) in cfg.margins.iter().enumerate() {
        let per_sample: Vec<Option<Vec<Option<(f64, f64)>>>> = (0..cfg.n_samples)
            .into_par_iter()
            .map(|s| {
                let a = sample_system(cfg, FIG2_STREAM, mi, s).ok()?;
                let c0 = rule_of_thumb_sensor(&a, &q, &l, cfg.p).ok()?;
                let coords = [FIG2_STREAM, mi as u64, s as u64];
                let mut r = rng::substream(cfg.master_seed, &[coords[0], coords[1], coords[2], 1]);
                let cr = random_sensor_from(&mut r, cfg.n, cfg.p).ok()?;
                let starts = (0..FIG2_RANDOM_STARTS)
                    .map(|_| random_projector_from(&mut r, cfg.n, cfg.p))
                    .collect::<Result<Vec<_>>>()
                    .ok()?;
                Some(
                    cfg.gamma_grid
                        .iter()
                        .map(|&g| {
                            fig2_ratios(&a, &q, &l, cfg.p, g, &c0, &cr, &starts)
                                .ok()
                                .flatten()
                        })
                        .collect(),
                )
            })
            .collect();
        let mut excluded = 0;
        for sample in &per_sample {
            match sample {
                None => excluded += 1,
                Some(v) => excluded += usize::from(v.iter().any(Option::is_none)),
            }
        }
        failures.push((margin.abs(), excluded));
        for (gi, &g) in cfg.gamma_grid.iter().enumerate() {
            let ok: Vec<(f64, f64)> = per_sample
                .iter()
                .filter_map(|s| s.as_ref().and_then(|v| v[gi]))
                .collect();
            let r0: Vec<f64> = ok.iter().map(|r| r.0).collect();
            let rr: Vec<f64> = ok.iter().map(|r| r.1).collect();
            for (name, v) in [("fig2_c0", &r0), ("fig2_random", &rr)] {
                let (mean, se) = mean_and_stderr(v);
                rows.push(ResultRow {
                    experiment: name.into(),
                    margin: margin.abs(),
                    gamma: g,
                    statistic: mean,
                    stderr: se,
                    n_effective: v.len(),
                });
            }
        }
    }
    Ok(ExperimentOutput {
        rows,
        failures,
        faithful: cfg.is_fig2_faithful(),
        assumptions: l_assumption(cfg),
    })
}

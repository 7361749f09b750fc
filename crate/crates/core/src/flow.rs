//! Discrete double-bracket descent on `Sym(n, p)`.
//!
//! Each step moves along `t ↦ e^{tsΩ_g} C e^{−tsΩ_g}` where `Ω_g = −γ[C, M]` is the
//! canonical generator of the Riemannian gradient and `s = ±1` is the descent
//! sign found by probing `J` at the start of the run. Step lengths come from
//! Armijo backtracking. Close to an extremal the decrease predicted by the
//! Armijo model drops below the resolution of `J` itself; there a step is
//! accepted when `J` does not rise beyond rounding and `‖[C, M]‖` shrinks.

use serde::{Deserialize, Serialize};

use crate::densela::{commutator, sym_eig, Matrix};
use crate::error::{Error, Result};
use crate::io::matrix_serde;
use crate::isospectral::{principal_angles_of_bases, retract, Projector};
use crate::objective::{Linearization, SensorProblem};

/// Relative size of the rounding noise assumed on `J`.
pub const J_NOISE_REL: f64 = 1e-13;
/// Relative slack of the monotonicity assertion on recorded `J` values.
pub const MONOTONE_REL_TOL: f64 = 1e-12;
/// Maximum number of halvings in one line search.
pub const MAX_BACKTRACKS: usize = 40;
/// Largest principal angle (radians) accepted by [`classify_limit`].
pub const CLASSIFY_ANGLE_TOL: f64 = 1e-4;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FlowOptions {
    /// Initial step, scaled by `1/(γ‖M‖)`.
    pub initial_step: f64,
    /// Stop when `‖[C, M]‖_F` falls to this value.
    pub grad_tol: f64,
    pub max_iters: usize,
    pub backtrack_factor: f64,
    pub armijo_c: f64,
}

impl Default for FlowOptions {
    fn default() -> Self {
        FlowOptions {
            initial_step: 0.1,
            grad_tol: 1e-8,
            max_iters: 5000,
            backtrack_factor: 0.5,
            armijo_c: 1e-4,
        }
    }
}

impl FlowOptions {
    pub fn validate(&self) -> Result<()> {
        let positive = self.initial_step > 0.0
            && self.grad_tol > 0.0
            && self.max_iters > 0
            && self.backtrack_factor > 0.0
            && self.armijo_c > 0.0;
        if !positive || !(self.backtrack_factor < 1.0) || !(self.armijo_c < 1.0) {
            return Err(Error::Input(format!("invalid flow options {self:?}")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FlowIterate {
    pub iteration: usize,
    #[serde(rename = "J")]
    pub j: f64,
    pub grad_norm: f64,
    pub step: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct FlowTrace {
    pub iterates: Vec<FlowIterate>,
    pub final_c: Projector,
    pub converged: bool,
    pub descent_sign: i8,
}

impl FlowTrace {
    pub fn final_j(&self) -> f64 {
        self.iterates.last().map(|it| it.j).unwrap_or(f64::NAN)
    }

    pub fn final_grad_norm(&self) -> f64 {
        self.iterates
            .last()
            .map(|it| it.grad_norm)
            .unwrap_or(f64::NAN)
    }

    /// Number of accepted steps.
    pub fn iterations(&self) -> usize {
        self.iterates.last().map(|it| it.iteration).unwrap_or(0)
    }

    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        for it in &self.iterates {
            w.serialize(it)?;
        }
        let bytes = w.into_inner().map_err(|e| Error::Io(e.into_error()))?;
        Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
    }

    pub fn summary_json(&self) -> String {
        #[derive(Serialize)]
        struct Summary<'a> {
            converged: bool,
            descent_sign: i8,
            iterations: usize,
            #[serde(rename = "final_J")]
            final_j: f64,
            final_grad_norm: f64,
            #[serde(with = "matrix_serde")]
            final_c: &'a Matrix,
        }
        serde_json::to_string_pretty(&Summary {
            converged: self.converged,
            descent_sign: self.descent_sign,
            iterations: self.iterations(),
            final_j: self.final_j(),
            final_grad_norm: self.final_grad_norm(),
            final_c: self.final_c.matrix(),
        })
        .expect("summary serializes")
    }
}

/// Cost, bracket and gradient generator at one iterate.
struct Point {
    c: Projector,
    j: f64,
    m_norm: f64,
    comm_norm: f64,
    omega: Matrix,
}

impl Point {
    fn new(problem: &SensorProblem, c: Projector) -> Result<Self> {
        let lin = Linearization::new(problem, &c)?;
        let bracket = commutator(&lin.c, &lin.m);
        Ok(Point {
            j: (problem.l().matrix() * &lin.k).trace(),
            m_norm: lin.m.norm(),
            comm_norm: bracket.norm(),
            omega: bracket * (-problem.gamma()),
            c,
        })
    }

    fn noise(&self) -> f64 {
        J_NOISE_REL * self.j.abs()
    }
}

/// Compares `J` on either side of `C` along the gradient generator. Returns `+1`
/// when moving along `+Ω_g` lowers `J`, `−1` when `−Ω_g` does, and `+1` if the
/// difference is below rounding.
fn probe_sign(problem: &SensorProblem, pt: &Point) -> Result<i8> {
    let norm = pt.omega.norm();
    if norm == 0.0 {
        return Ok(1);
    }
    let h = 1e-3 / norm;
    let jp = Point::new(problem, retract(&pt.c, &pt.omega, h)?)?.j;
    let jm = Point::new(problem, retract(&pt.c, &pt.omega, -h)?)?.j;
    if (jp - jm).abs() <= 2.0 * pt.noise() {
        return Ok(1);
    }
    Ok(if jp < jm { 1 } else { -1 })
}

/// Armijo line search from trial step `t`. Returns the new point, the accepted
/// step and whether it was accepted without backtracking.
fn line_search(
    problem: &SensorProblem,
    pt: &Point,
    sign: i8,
    t: f64,
    opts: &FlowOptions,
    iteration: usize,
) -> Result<(Point, f64, bool)> {
    let slope = pt.omega.norm_squared();
    let dir = &pt.omega * f64::from(sign);
    let mut trial = t;
    for k in 0..=MAX_BACKTRACKS {
        let cand = Point::new(problem, retract(&pt.c, &dir, trial)?)?;
        let predicted = opts.armijo_c * trial * slope;
        let ok = if predicted > pt.noise() {
            cand.j <= pt.j - predicted
        } else {
            cand.j <= pt.j + pt.noise() && cand.comm_norm < pt.comm_norm
        };
        if ok {
            return Ok((cand, trial, k == 0));
        }
        trial *= opts.backtrack_factor;
    }
    // No acceptable step: see whether the other direction descends.
    let h = trial / opts.backtrack_factor;
    let other = Point::new(problem, retract(&pt.c, &(-&dir), h)?)?;
    if other.j < pt.j - pt.noise() {
        return Err(Error::SignFlip {
            iteration,
            previous: sign,
            current: -sign,
        });
    }
    Err(Error::Stagnation {
        iteration,
        j: pt.j,
        commutator_norm: pt.comm_norm,
        step: h,
    })
}

fn initial_trial(problem: &SensorProblem, pt: &Point, opts: &FlowOptions) -> f64 {
    let scale = problem.gamma() * pt.m_norm;
    if scale > 0.0 {
        opts.initial_step / scale
    } else {
        opts.initial_step
    }
}

/// Barzilai–Borwein trial step for the next iteration. The generator `Ω` is
/// fixed by conjugation with `e^{tΩ}`, so consecutive generators are compared
/// without transport. Falls back to growing or keeping the accepted step.
fn next_trial(
    prev: &Point,
    next: &Point,
    sign: i8,
    used: f64,
    easy: bool,
    opts: &FlowOptions,
    t0: f64,
) -> f64 {
    let fallback = if easy {
        used / opts.backtrack_factor
    } else {
        used
    };
    let s = &prev.omega * (used * f64::from(sign));
    let y = (&prev.omega - &next.omega) * f64::from(sign);
    let sy = s.dot(&y);
    if !(sy > 0.0) || next.omega.norm() == 0.0 {
        return fallback;
    }
    // s is t·Ω_prev; the next step is a multiple of Ω_next
    let alpha = s.norm_squared() / sy;
    alpha.clamp(1e-3 * t0, 1e6 * t0)
}

/// One Armijo descent step from `C`, starting the line search at retraction
/// parameter `h`.
pub fn flow_step(problem: &SensorProblem, c: &Projector, h: f64) -> Result<(Projector, f64)> {
    if !(h > 0.0) {
        return Err(Error::Input(format!("step must be positive, got {h}")));
    }
    let pt = Point::new(problem, c.clone())?;
    if pt.comm_norm == 0.0 || problem.gamma() == 0.0 {
        return Ok((pt.c, pt.j));
    }
    let sign = probe_sign(problem, &pt)?;
    let (next, _, _) = line_search(problem, &pt, sign, h, &FlowOptions::default(), 1)?;
    Ok((next.c, next.j))
}

/// Runs the descent until `‖[C, M]‖ ≤ grad_tol` or `max_iters` steps.
pub fn flow_run(problem: &SensorProblem, c0: &Projector, opts: &FlowOptions) -> Result<FlowTrace> {
    opts.validate()?;
    let mut pt = Point::new(problem, c0.clone())?;
    let mut iterates = vec![FlowIterate {
        iteration: 0,
        j: pt.j,
        grad_norm: pt.comm_norm,
        step: 0.0,
    }];
    let sign = if problem.gamma() == 0.0 {
        1
    } else {
        probe_sign(problem, &pt)?
    };
    let t0 = initial_trial(problem, &pt, opts);
    let mut t = t0;
    let mut converged = pt.comm_norm <= opts.grad_tol || problem.gamma() == 0.0;
    let mut iteration = 0;
    while !converged && iteration < opts.max_iters {
        iteration += 1;
        let (next, used, easy) = line_search(problem, &pt, sign, t, opts, iteration)?;
        assert!(
            next.j <= pt.j + MONOTONE_REL_TOL * pt.j.abs(),
            "J increased from {} to {} at iteration {iteration}",
            pt.j,
            next.j
        );
        t = next_trial(&pt, &next, sign, used, easy, opts, t0);
        pt = next;
        iterates.push(FlowIterate {
            iteration,
            j: pt.j,
            grad_norm: pt.comm_norm,
            step: used,
        });
        converged = pt.comm_norm <= opts.grad_tol;
    }
    Ok(FlowTrace {
        iterates,
        final_c: pt.c,
        converged,
        descent_sign: sign,
    })
}

/// Which eigenvectors of `M(C*)` span the range of `C*`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LimitClass {
    /// One-based positions in the descending eigenvalue order of `M(C*)`.
    pub index_set: Vec<usize>,
    /// Principal angles between the two subspaces, ascending.
    pub angles: Vec<f64>,
}

pub fn classify_limit(problem: &SensorProblem, c: &Projector) -> Result<LimitClass> {
    let lin = Linearization::new(problem, c)?;
    let eig = sym_eig(&lin.m)?;
    let n = c.n();
    let weight: Vec<f64> = (0..n)
        .map(|i| (c.matrix() * eig.vectors.column(i)).norm_squared())
        .collect();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| weight[b].partial_cmp(&weight[a]).unwrap().then(a.cmp(&b)));
    let mut chosen: Vec<usize> = order[..c.p()].to_vec();
    chosen.sort_unstable();
    let v = Matrix::from_columns(
        &chosen
            .iter()
            .map(|&i| eig.vectors.column(i))
            .collect::<Vec<_>>(),
    );
    let angles = principal_angles_of_bases(&c.range_basis(), &c.complement(), &v);
    if angles.iter().any(|&a| a >= CLASSIFY_ANGLE_TOL) {
        return Err(Error::Classification { angles });
    }
    Ok(LimitClass {
        index_set: chosen.iter().map(|i| i + 1).collect(),
        angles,
    })
}

//! The cost `J(γ, C) = tr(LK)`, the matrix `M = KRK`, and their derivatives on
//! `Sym(n, p)`.
//!
//! `K` is the stabilizing solution of `AᵀK + KA + Q − γKCK = 0` and `R` solves
//! `FR + RFᵀ + L = 0` with `F = A − γCK`. Along a tangent direction `X` the
//! derivatives of `K` and `R` are again Lyapunov solutions:
//!
//! ```text
//! Fᵀ K̇ + K̇ F = γ K X K
//! F Ṙ + Ṙ Fᵀ = γ [(XK + C K̇) R + R (KX + K̇ C)]
//! ```
//!
//! from which `dJ[[C, Ω]] = γ tr([C, M] Ω)`. The Riemannian gradient in the normal
//! metric is therefore `−γ[C, [C, M]]`, with canonical generator `−γ[C, M]`, and
//! the descent field is `+γ[C, [C, M]]`.

use serde::Serialize;

use crate::densela::{
    care_solve, commutator, lyapunov_solve, sym_eig, symmetrize, Lyapunov, Matrix, StableMatrix,
    SymPosDef,
};
use crate::error::{Error, Result};
use crate::io::matrix_serde;
use crate::isospectral::{tangent_basis, Projector, TangentVector};

/// A Kalman sensor design instance.
#[derive(Debug, Clone)]
pub struct SensorProblem {
    a: StableMatrix,
    q: SymPosDef,
    l: SymPosDef,
    gamma: f64,
    p: usize,
}

impl SensorProblem {
    pub fn new(a: StableMatrix, q: SymPosDef, l: SymPosDef, gamma: f64, p: usize) -> Result<Self> {
        let n = a.dim();
        for (name, m) in [("Q", q.matrix()), ("L", l.matrix())] {
            if m.nrows() != n {
                return Err(Error::Dimension(format!(
                    "{name} is {}x{}, A is {n}x{n}",
                    m.nrows(),
                    m.ncols()
                )));
            }
        }
        if !(gamma >= 0.0) || !gamma.is_finite() {
            return Err(Error::Input(format!(
                "gamma must be finite and >= 0, got {gamma}"
            )));
        }
        if p == 0 || p > n {
            return Err(Error::Input(format!(
                "rank p = {p} must satisfy 1 <= p <= n = {n}"
            )));
        }
        Ok(SensorProblem { a, q, l, gamma, p })
    }

    /// Same matrices, different gain.
    pub fn with_gamma(&self, gamma: f64) -> Result<Self> {
        SensorProblem::new(
            self.a.clone(),
            self.q.clone(),
            self.l.clone(),
            gamma,
            self.p,
        )
    }

    pub fn a(&self) -> &StableMatrix {
        &self.a
    }

    pub fn q(&self) -> &SymPosDef {
        &self.q
    }

    pub fn l(&self) -> &SymPosDef {
        &self.l
    }

    pub fn gamma(&self) -> f64 {
        self.gamma
    }

    pub fn p(&self) -> usize {
        self.p
    }

    pub fn n(&self) -> usize {
        self.a.dim()
    }

    fn check_point(&self, c: &Projector) -> Result<()> {
        if c.n() != self.n() || c.p() != self.p {
            return Err(Error::Dimension(format!(
                "projector is in Sym({}, {}), problem expects Sym({}, {})",
                c.n(),
                c.p(),
                self.n(),
                self.p
            )));
        }
        Ok(())
    }
}

/// Residual norms of the two defining equations.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct Residuals {
    pub riccati: f64,
    pub lyapunov: f64,
}

/// `K`, `R`, `M`, `J` and the gradient at one point.
#[derive(Debug, Clone, Serialize)]
pub struct CostEvaluation {
    #[serde(rename = "J")]
    pub j: f64,
    pub grad_norm: f64,
    #[serde(rename = "K", with = "matrix_serde")]
    pub k: Matrix,
    #[serde(rename = "R", with = "matrix_serde")]
    pub r: Matrix,
    #[serde(rename = "M", with = "matrix_serde")]
    pub m: Matrix,
    pub residuals: Residuals,
    /// `‖[C, M]‖_F`
    pub commutator_norm: f64,
    #[serde(skip)]
    pub grad: TangentVector,
}

impl CostEvaluation {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("evaluation serializes")
    }
}

/// Solution data at `C` plus the factored closed loop, for repeated
/// directional derivatives.
pub(crate) struct Linearization {
    pub c: Matrix,
    pub k: Matrix,
    pub r: Matrix,
    pub m: Matrix,
    pub gamma: f64,
    pub riccati_residual: f64,
    pub lyapunov_residual: f64,
    f_lyap: Lyapunov,
    ft_lyap: Lyapunov,
}

impl Linearization {
    pub fn new(problem: &SensorProblem, c: &Projector) -> Result<Self> {
        problem.check_point(c)?;
        let gamma = problem.gamma;
        let cm = c.matrix();
        let sol = care_solve(&problem.a, cm, problem.q.matrix(), gamma)?;
        let f = sol.closed_loop;
        let f_lyap = Lyapunov::new(&f)?;
        let ft_lyap = Lyapunov::new(&f.transpose())?;
        let l = problem.l.matrix();
        let r = f_lyap.solve(l)?;
        let lyapunov_residual = (&f * &r + &r * f.transpose() + l).norm();
        let k = sol.k;
        let m = symmetrize(&(&k * &r * &k));
        Ok(Linearization {
            c: cm.clone(),
            k,
            r,
            m,
            gamma,
            riccati_residual: sol.residual_norm,
            lyapunov_residual,
            f_lyap,
            ft_lyap,
        })
    }

    /// Derivative of `M` along the tangent matrix `x`.
    pub fn m_dot(&self, x: &Matrix) -> Result<Matrix> {
        let g = self.gamma;
        if g == 0.0 {
            return Ok(Matrix::zeros(x.nrows(), x.ncols()));
        }
        let (k, r, c) = (&self.k, &self.r, &self.c);
        let v = self.ft_lyap.solve(&(-(k * x * k) * g))?;
        let s = (x * k + c * &v) * r;
        let w = self.f_lyap.solve(&(-(&s + s.transpose()) * g))?;
        let vrk = &v * r * k;
        Ok(&vrk + vrk.transpose() + k * w * k)
    }
}

/// `(K, R)` at `C`.
pub fn solve_kr(problem: &SensorProblem, c: &Projector) -> Result<(Matrix, Matrix)> {
    let lin = Linearization::new(problem, c)?;
    Ok((lin.k, lin.r))
}

/// `J = tr(LK)`.
pub fn cost_j(problem: &SensorProblem, c: &Projector) -> Result<f64> {
    problem.check_point(c)?;
    let sol = care_solve(&problem.a, c.matrix(), problem.q.matrix(), problem.gamma)?;
    Ok((problem.l.matrix() * sol.k).trace())
}

/// `M = KRK`.
pub fn big_m(problem: &SensorProblem, c: &Projector) -> Result<Matrix> {
    Ok(Linearization::new(problem, c)?.m)
}

/// `M₀ = K₀R₀K₀` from the `γ = 0` Lyapunov equations.
pub fn big_m0(a: &StableMatrix, q: &SymPosDef, l: &SymPosDef) -> Result<Matrix> {
    let am = a.matrix();
    let k0 = lyapunov_solve(&am.transpose(), q.matrix())?;
    let r0 = lyapunov_solve(am, l.matrix())?;
    Ok(symmetrize(&(&k0 * &r0 * &k0)))
}

fn gradient_of(lin: &Linearization, c: &Projector) -> Result<TangentVector> {
    let omega = commutator(&lin.c, &lin.m) * (-lin.gamma);
    TangentVector::from_generator(c, &omega)
}

/// Riemannian gradient in the normal metric.
pub fn grad_j(problem: &SensorProblem, c: &Projector) -> Result<TangentVector> {
    let lin = Linearization::new(problem, c)?;
    gradient_of(&lin, c)
}

/// Everything at once.
pub fn evaluate(problem: &SensorProblem, c: &Projector) -> Result<CostEvaluation> {
    let lin = Linearization::new(problem, c)?;
    let grad = gradient_of(&lin, c)?;
    Ok(CostEvaluation {
        j: (problem.l.matrix() * &lin.k).trace(),
        grad_norm: grad.norm(),
        commutator_norm: commutator(&lin.c, &lin.m).norm(),
        residuals: Residuals {
            riccati: lin.riccati_residual,
            lyapunov: lin.lyapunov_residual,
        },
        grad,
        k: lin.k,
        r: lin.r,
        m: lin.m,
    })
}

fn form_terms(lin: &Linearization, ox: &Matrix, oy: &Matrix, m_dot_x: &Matrix) -> f64 {
    let c = &lin.c;
    let cm = commutator(c, &lin.m);
    let t1 = (commutator(c, ox) * commutator(&lin.m, oy)).trace();
    let t2 = (commutator(c, m_dot_x) * oy).trace();
    let t3 = (cm * commutator(ox, oy)).trace();
    lin.gamma * (t1 + t2 - 0.5 * t3)
}

/// `γ tr{[C,Ω_x][M,Ω_y] + [C,Ṁ_x]Ω_y − ½[C,M][Ω_x,Ω_y]}` with `Ṁ_x` the derivative
/// of `M` along `[C, Ω_x]`.
///
/// For any skew `Ω`, `hessian_form(C, Ω, Ω)` is the second derivative of `J`
/// along `t ↦ retract(C, Ω, t)` at `t = 0`.
pub fn hessian_form(
    problem: &SensorProblem,
    c: &Projector,
    ox: &Matrix,
    oy: &Matrix,
) -> Result<f64> {
    let lin = Linearization::new(problem, c)?;
    let m_dot = lin.m_dot(&commutator(&lin.c, ox))?;
    Ok(form_terms(&lin, ox, oy, &m_dot))
}

/// Hessian in the orthonormal basis of [`tangent_basis`].
#[derive(Debug, Clone)]
pub struct Hessian {
    /// `(H + Hᵀ)/2`
    pub matrix: Matrix,
    /// `‖H − Hᵀ‖ / ‖H‖` before symmetrization (0 when `H = 0`).
    pub asymmetry: f64,
    pub basis: Vec<TangentVector>,
}

impl Hessian {
    pub fn eigenvalues(&self) -> Vec<f64> {
        if self.matrix.nrows() == 0 {
            return Vec::new();
        }
        sym_eig(&self.matrix)
            .expect("symmetrized Hessian")
            .values
            .iter()
            .copied()
            .collect()
    }
}

pub fn hessian_matrix(problem: &SensorProblem, c: &Projector) -> Result<Hessian> {
    let lin = Linearization::new(problem, c)?;
    let basis = tangent_basis(c)?;
    let d = basis.len();
    let m_dots = basis
        .iter()
        .map(|b| lin.m_dot(b.x()))
        .collect::<Result<Vec<_>>>()?;
    let h = Matrix::from_fn(d, d, |a, b| {
        form_terms(&lin, basis[a].omega(), basis[b].omega(), &m_dots[a])
    });
    let norm = h.norm();
    let asymmetry = if norm > 0.0 {
        (&h - h.transpose()).norm() / norm
    } else {
        0.0
    };
    Ok(Hessian {
        matrix: symmetrize(&h),
        asymmetry,
        basis,
    })
}

/// Leading small-gain bilinear form `tr{[C,Ω_x][M₀,Ω_y] − ½[C,M₀][Ω_x,Ω_y]}`.
pub fn hessian_smallgamma(c: &Matrix, m0: &Matrix, ox: &Matrix, oy: &Matrix) -> f64 {
    let t1 = (commutator(c, ox) * commutator(m0, oy)).trace();
    let t2 = (commutator(c, m0) * commutator(ox, oy)).trace();
    t1 - 0.5 * t2
}

//! The manifold `Sym(n, p)` of rank-`p` orthogonal projectors.
//!
//! Tangent vectors at `C` are `X = [C, Ω]` for skew `Ω`. Each is stored with its
//! canonical generator, the unique `Ω` orthogonal to `ker ad_C`, which for a
//! projector is `Ω = C X (I − C) − (I − C) X C`. The normal metric pairs two
//! tangent vectors as `−tr(Ω_x Ω_y)`.
//!
//! Orientation: [`retract`] moves along `t ↦ e^{tΩ} C e^{−tΩ}`, whose velocity at
//! `t = 0` is `[Ω, C] = −[C, Ω]`. [`retraction_velocity`] returns that vector.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::densela::{
    check_square, commutator, expm, gaussian_matrix, sym_eig, symmetrize, Matrix,
};
use crate::error::{Error, Result};
use crate::io::matrix_serde;
use crate::rng;

pub const PROJECTOR_SYMMETRY_TOL: f64 = 1e-10;
pub const PROJECTOR_IDEMPOTENCY_TOL: f64 = 1e-8;
pub const PROJECTOR_TRACE_TOL: f64 = 1e-8;
pub const SENSOR_ORTHONORMALITY_TOL: f64 = 1e-10;
/// Idempotency drift above which a retracted point is re-projected.
pub const HYGIENE_TOL: f64 = 1e-12;

/// A point of `Sym(n, p)`: symmetric, idempotent, trace `p`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Projector {
    n: usize,
    p: usize,
    #[serde(rename = "C", with = "matrix_serde")]
    c: Matrix,
}

impl Projector {
    pub fn new(c: Matrix, p: usize) -> Result<Self> {
        check_square(&c, "projector")?;
        let n = c.nrows();
        if p == 0 || p > n {
            return Err(Error::Input(format!(
                "rank p = {p} must satisfy 1 <= p <= n = {n}"
            )));
        }
        let asym = (&c - c.transpose()).norm();
        let idem = (&c * &c - &c).norm();
        let tr_err = (c.trace() - p as f64).abs();
        if asym > PROJECTOR_SYMMETRY_TOL
            || idem > PROJECTOR_IDEMPOTENCY_TOL
            || tr_err > PROJECTOR_TRACE_TOL
        {
            return Err(Error::Input(format!(
                "not a rank-{p} projector: |C-C^T| = {asym:e}, |C^2-C| = {idem:e}, |tr C - p| = {tr_err:e}"
            )));
        }
        Ok(Projector { n, p, c })
    }

    /// Projector onto the span of orthonormal columns `v` (n × p).
    pub fn from_orthonormal_columns(v: &Matrix) -> Result<Self> {
        let c = symmetrize(&(v * v.transpose()));
        Projector::new(c, v.ncols())
    }

    /// Diagonal projector with ones at the given zero-based positions.
    pub fn coordinate(n: usize, ones: &[usize]) -> Result<Self> {
        let mut c = Matrix::zeros(n, n);
        for &i in ones {
            if i >= n || c[(i, i)] == 1.0 {
                return Err(Error::Input(format!(
                    "invalid coordinate index set {ones:?} for n = {n}"
                )));
            }
            c[(i, i)] = 1.0;
        }
        Projector::new(c, ones.len())
    }

    pub fn matrix(&self) -> &Matrix {
        &self.c
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn p(&self) -> usize {
        self.p
    }

    /// Dimension `np − p²` of the manifold.
    pub fn tangent_dim(&self) -> usize {
        self.n * self.p - self.p * self.p
    }

    /// `I − C`
    pub fn complement(&self) -> Matrix {
        Matrix::identity(self.n, self.n) - &self.c
    }

    /// Orthonormal basis (n × p) of the range, from the top eigenvectors.
    pub fn range_basis(&self) -> Matrix {
        let eig = sym_eig(&self.c).expect("projector is symmetric");
        eig.vectors.columns(0, self.p).into_owned()
    }

    fn same_point(&self, other: &Projector) -> bool {
        self.p == other.p
            && self.n == other.n
            && (&self.c - &other.c).norm() <= 1e-12 * (self.p as f64).sqrt().max(1.0)
    }
}

/// A `p × n` observation matrix with orthonormal rows.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SensorMatrix {
    #[serde(with = "matrix_serde")]
    c: Matrix,
}

impl SensorMatrix {
    pub fn new(c: Matrix) -> Result<Self> {
        let p = c.nrows();
        if p == 0 || p > c.ncols() {
            return Err(Error::Dimension(format!(
                "sensor matrix must be p x n with 1 <= p <= n, got {}x{}",
                p,
                c.ncols()
            )));
        }
        let err = (&c * c.transpose() - Matrix::identity(p, p)).norm();
        if err > SENSOR_ORTHONORMALITY_TOL {
            return Err(Error::Input(format!(
                "sensor rows are not orthonormal (|c c^T - I| = {err:e})"
            )));
        }
        Ok(SensorMatrix { c })
    }

    /// Normalizes a nonzero vector into a single-row sensor.
    pub fn from_vector(v: &[f64]) -> Result<Self> {
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if !(norm > 0.0) {
            return Err(Error::Input("sensor vector must be nonzero".into()));
        }
        SensorMatrix::new(Matrix::from_row_slice(1, v.len(), v) / norm)
    }

    pub fn matrix(&self) -> &Matrix {
        &self.c
    }

    pub fn p(&self) -> usize {
        self.c.nrows()
    }

    pub fn n(&self) -> usize {
        self.c.ncols()
    }
}

/// A tangent vector `X = [C, Ω]` with `Ω` the canonical generator.
#[derive(Debug, Clone)]
pub struct TangentVector {
    base: Projector,
    omega: Matrix,
    x: Matrix,
}

impl TangentVector {
    /// Builds `[C, Ω]`, replacing `Ω` by its component orthogonal to `ker ad_C`.
    pub fn from_generator(base: &Projector, omega: &Matrix) -> Result<Self> {
        check_skew(omega, base.n())?;
        let omega = horizontal_part(base, omega);
        let x = commutator(base.matrix(), &omega);
        Ok(TangentVector {
            base: base.clone(),
            omega,
            x,
        })
    }

    /// Wraps a tangent matrix `X`, computing its canonical generator.
    pub fn from_tangent(base: &Projector, x: &Matrix) -> Result<Self> {
        let omega = canonical_omega(base, x)?;
        Ok(TangentVector {
            base: base.clone(),
            x: commutator(base.matrix(), &omega),
            omega,
        })
    }

    pub fn zero(base: &Projector) -> Self {
        let n = base.n();
        TangentVector {
            base: base.clone(),
            omega: Matrix::zeros(n, n),
            x: Matrix::zeros(n, n),
        }
    }

    pub fn base(&self) -> &Projector {
        &self.base
    }

    pub fn omega(&self) -> &Matrix {
        &self.omega
    }

    pub fn x(&self) -> &Matrix {
        &self.x
    }

    /// Length in the normal metric.
    pub fn norm(&self) -> f64 {
        // −tr(ΩΩ) = |Ω|_F² for skew Ω
        self.omega.norm()
    }

    pub fn scaled(&self, s: f64) -> TangentVector {
        TangentVector {
            base: self.base.clone(),
            omega: &self.omega * s,
            x: &self.x * s,
        }
    }
}

fn check_skew(omega: &Matrix, n: usize) -> Result<()> {
    if omega.nrows() != n || omega.ncols() != n {
        return Err(Error::Dimension(format!(
            "generator is {}x{}, expected {n}x{n}",
            omega.nrows(),
            omega.ncols()
        )));
    }
    let sym = (omega + omega.transpose()).norm();
    if sym > 1e-10 * omega.norm().max(1.0) {
        return Err(Error::Input(format!(
            "generator is not skew-symmetric (|Ω+Ω^T| = {sym:e})"
        )));
    }
    Ok(())
}

/// Component of a skew `Ω` orthogonal to `ker ad_C`: `CΩ(I−C) + (I−C)ΩC`.
pub fn horizontal_part(c: &Projector, omega: &Matrix) -> Matrix {
    let cm = c.matrix();
    let co = c.complement();
    let h = cm * omega * &co + &co * omega * cm;
    (&h - h.transpose()) * 0.5
}

pub fn projector_from_sensor(c: &SensorMatrix) -> Projector {
    let m = symmetrize(&(c.matrix().transpose() * c.matrix()));
    Projector::new(m, c.p()).expect("orthonormal rows give a projector")
}

/// Orthonormal rows spanning the range of `C`, ordered by descending eigenvalue
/// with the sign convention of [`sym_eig`].
pub fn sensor_from_projector(c: &Projector) -> Result<SensorMatrix> {
    let eig = sym_eig(c.matrix())?;
    let p = c.p();
    for (i, &v) in eig.values.iter().enumerate() {
        let target = if i < p { 1.0 } else { 0.0 };
        if (v - target).abs() > 1e-6 {
            return Err(Error::Input(format!(
                "projector eigenvalues are not clustered at 0 and 1 (eigenvalue {i} = {v})"
            )));
        }
    }
    SensorMatrix::new(eig.vectors.columns(0, p).transpose())
}

/// Orthonormal `p × n` rows from a Gaussian draw.
pub fn random_sensor_from<R: Rng + ?Sized>(
    rng: &mut R,
    n: usize,
    p: usize,
) -> Result<SensorMatrix> {
    if p == 0 || p > n {
        return Err(Error::Input(format!(
            "rank p = {p} must satisfy 1 <= p <= n = {n}"
        )));
    }
    loop {
        let g = gaussian_matrix(rng, n, p);
        let qr = g.clone().qr();
        let r = qr.r();
        let min_diag = (0..p)
            .map(|i| r[(i, i)].abs())
            .fold(f64::INFINITY, f64::min);
        if min_diag > 1e-8 * g.norm() {
            let q = qr.q();
            return SensorMatrix::new(q.columns(0, p).transpose());
        }
    }
}

pub fn random_projector_from<R: Rng + ?Sized>(
    rng: &mut R,
    n: usize,
    p: usize,
) -> Result<Projector> {
    Ok(projector_from_sensor(&random_sensor_from(rng, n, p)?))
}

/// Uniformly distributed projector, deterministic per seed.
pub fn random_projector(n: usize, p: usize, seed: u64) -> Result<Projector> {
    random_projector_from(&mut rng::stream(seed, 0), n, p)
}

/// Orthonormal basis of `T_C Sym(n, p)`: `(1/√2)[C, θ_i θ_jᵀ − θ_j θ_iᵀ]` with `θ_i`
/// eigenvectors of `C` for eigenvalue 1 and `θ_j` for eigenvalue 0.
pub fn tangent_basis(c: &Projector) -> Result<Vec<TangentVector>> {
    let eig = sym_eig(c.matrix())?;
    let (n, p) = (c.n(), c.p());
    let theta = &eig.vectors;
    let scale = std::f64::consts::FRAC_1_SQRT_2;
    let mut basis = Vec::with_capacity(c.tangent_dim());
    for i in 0..p {
        for j in p..n {
            let ti = theta.column(i);
            let tj = theta.column(j);
            let omega = (ti * tj.transpose() - tj * ti.transpose()) * scale;
            let x = commutator(c.matrix(), &omega);
            basis.push(TangentVector {
                base: c.clone(),
                omega,
                x,
            });
        }
    }
    Ok(basis)
}

/// Minimum-norm skew preimage of `X` under `ad_C`.
pub fn canonical_omega(c: &Projector, x: &Matrix) -> Result<Matrix> {
    let n = c.n();
    if x.nrows() != n || x.ncols() != n {
        return Err(Error::Dimension(format!(
            "tangent matrix is {}x{}, expected {n}x{n}",
            x.nrows(),
            x.ncols()
        )));
    }
    let cm = c.matrix();
    let co = c.complement();
    // T_C = symmetric matrices with vanishing diagonal blocks C X C and (I−C) X (I−C).
    let off = (x - x.transpose()).norm() + (cm * x * cm).norm() + (&co * x * &co).norm();
    if off > 1e-8 * x.norm().max(1.0) {
        return Err(Error::Input(format!(
            "matrix is not tangent to Sym(n,p) at C (defect {off:e})"
        )));
    }
    let omega = cm * x * &co - &co * x * cm;
    Ok((&omega - omega.transpose()) * 0.5)
}

/// `κ_n(X, Y) = −tr(Ω_x Ω_y)`.
pub fn normal_metric(x: &TangentVector, y: &TangentVector) -> Result<f64> {
    if !x.base.same_point(&y.base) {
        return Err(Error::Input(
            "tangent vectors are based at different points".into(),
        ));
    }
    Ok(-(x.omega.component_mul(&y.omega.transpose())).sum())
}

/// `e^{tΩ} C e^{−tΩ}`, re-projected onto `Sym(n, p)` if rounding drift exceeds
/// [`HYGIENE_TOL`].
pub fn retract(c: &Projector, omega: &Matrix, t: f64) -> Result<Projector> {
    check_skew(omega, c.n())?;
    if t == 0.0 {
        return Ok(c.clone());
    }
    let q = expm(&(omega * t))?;
    let moved = symmetrize(&(&q * c.matrix() * q.transpose()));
    Ok(clean_projector(moved, c.p()))
}

/// Symmetric matrix close to a rank-`p` projector, rounded onto the manifold.
pub(crate) fn clean_projector(m: Matrix, p: usize) -> Projector {
    let m = symmetrize(&m);
    if (&m * &m - &m).norm() > HYGIENE_TOL {
        let eig = sym_eig(&m).expect("symmetric input");
        let v = eig.vectors.columns(0, p);
        let c = symmetrize(&(v * v.transpose()));
        let n = c.nrows();
        return Projector { n, p, c };
    }
    let n = m.nrows();
    Projector { n, p, c: m }
}

/// Velocity `[Ω, C]` of `t ↦ retract(C, Ω, t)` at `t = 0`.
pub fn retraction_velocity(c: &Projector, omega: &Matrix) -> Result<TangentVector> {
    TangentVector::from_generator(c, &(-omega))
}

/// Principal angles (radians, ascending) between the ranges of two projectors
/// of equal rank.
pub fn principal_angles(a: &Projector, b: &Projector) -> Result<Vec<f64>> {
    if a.n() != b.n() || a.p() != b.p() {
        return Err(Error::Dimension("projectors differ in n or p".into()));
    }
    Ok(principal_angles_of_bases(
        &a.range_basis(),
        &a.complement(),
        &b.range_basis(),
    ))
}

/// Angles between span(U) and span(V) from the sines `σ((I − UUᵀ) V)`.
pub(crate) fn principal_angles_of_bases(_u: &Matrix, u_perp: &Matrix, v: &Matrix) -> Vec<f64> {
    let s = (u_perp * v).singular_values();
    let mut angles: Vec<f64> = s.iter().map(|&x| x.clamp(0.0, 1.0).asin()).collect();
    angles.sort_by(|a, b| a.partial_cmp(b).unwrap());
    angles
}

//! Dense real linear algebra used by every other module.
//!
//! Matrices are `nalgebra::DMatrix<f64>`. The Lyapunov solver is a
//! Bartels–Stewart scheme on top of the real Schur form; the algebraic
//! Riccati solver is a Newton–Kleinman iteration that calls it.

use nalgebra::{linalg::Schur, DMatrix, DVector, SymmetricEigen};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::rng;

pub type Matrix = DMatrix<f64>;

/// Relative residual target for the Riccati solver.
pub const RICCATI_REL_TOL: f64 = 1e-10;
/// Newton iteration cap for the Riccati solver.
pub const MAX_NEWTON_ITERS: usize = 50;
/// Relative symmetry tolerance used when a symmetric input is required.
pub const SYMMETRY_TOL: f64 = 1e-12;

/// Tolerances for [`care_solve_with`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SolverConfig {
    pub riccati_rel_tol: f64,
    pub max_newton_iters: usize,
}

impl Default for SolverConfig {
    fn default() -> Self {
        SolverConfig {
            riccati_rel_tol: RICCATI_REL_TOL,
            max_newton_iters: MAX_NEWTON_ITERS,
        }
    }
}

/// A square matrix whose eigenvalues all have strictly negative real part.
#[derive(Debug, Clone, PartialEq)]
pub struct StableMatrix {
    m: Matrix,
    margin: f64,
}

impl StableMatrix {
    pub fn new(m: Matrix) -> Result<Self> {
        let (stable, margin) = is_stable(&m)?;
        if !stable {
            return Err(Error::Input(format!(
                "matrix is not stable (spectral abscissa {})",
                -margin
            )));
        }
        Ok(StableMatrix { m, margin })
    }

    pub fn matrix(&self) -> &Matrix {
        &self.m
    }

    /// `-max Re λ`.
    pub fn margin(&self) -> f64 {
        self.margin
    }

    pub fn dim(&self) -> usize {
        self.m.nrows()
    }

    pub fn transpose(&self) -> StableMatrix {
        StableMatrix {
            m: self.m.transpose(),
            margin: self.margin,
        }
    }

    pub fn into_inner(self) -> Matrix {
        self.m
    }
}

/// A symmetric positive definite matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct SymPosDef(Matrix);

impl SymPosDef {
    pub fn new(m: Matrix) -> Result<Self> {
        check_square(&m, "SymPosDef")?;
        check_symmetric(&m, SYMMETRY_TOL)?;
        let m = symmetrize(&m);
        let min = SymmetricEigen::new(m.clone()).eigenvalues.min();
        if !(min > 0.0) {
            return Err(Error::Input(format!(
                "matrix is not positive definite (smallest eigenvalue {min:e})"
            )));
        }
        Ok(SymPosDef(m))
    }

    pub fn identity(n: usize) -> Self {
        SymPosDef(Matrix::identity(n, n))
    }

    pub fn matrix(&self) -> &Matrix {
        &self.0
    }

    pub fn into_inner(self) -> Matrix {
        self.0
    }
}

/// Stabilizing solution of `AᵀK + KA + Q − γKCK = 0`.
#[derive(Debug, Clone)]
pub struct RiccatiSolution {
    pub k: Matrix,
    /// `A − γCK`
    pub closed_loop: Matrix,
    pub residual_norm: f64,
    pub iterations: usize,
}

pub fn symmetrize(m: &Matrix) -> Matrix {
    (m + m.transpose()) * 0.5
}

pub fn commutator(a: &Matrix, b: &Matrix) -> Matrix {
    a * b - b * a
}

pub(crate) fn check_square(m: &Matrix, what: &str) -> Result<()> {
    if !m.is_square() {
        return Err(Error::Dimension(format!(
            "{what} must be square, got {}x{}",
            m.nrows(),
            m.ncols()
        )));
    }
    Ok(())
}

pub(crate) fn check_symmetric(m: &Matrix, rel_tol: f64) -> Result<()> {
    let asym = (m - m.transpose()).norm();
    if asym > rel_tol * m.norm().max(1.0) {
        return Err(Error::Input(format!(
            "matrix is not symmetric (|S - S^T| = {asym:e})"
        )));
    }
    Ok(())
}

/// Real Schur form `m = U T Uᵀ`. The QR iteration occasionally stalls at the
/// tightest deflation tolerance; it is then retried with a looser one, on an
/// identity-shifted copy (same `U`, `T` shifted), and on a copy conjugated by a
/// fixed Householder reflection `H` (then `U = H U'`).
fn schur(m: Matrix) -> Result<(Matrix, Matrix)> {
    let n = m.nrows();
    let scale = m.norm().max(f64::MIN_POSITIVE);
    let iters = 1000 * n.max(1);
    for (eps, shift) in [
        (f64::EPSILON, 0.0),
        (8.0 * f64::EPSILON, 0.0),
        (f64::EPSILON, 0.37 * scale),
    ] {
        let shifted = &m + Matrix::identity(n, n) * shift;
        if let Some(s) = Schur::try_new(shifted, eps, iters) {
            let (u, mut t) = s.unpack();
            for i in 0..n {
                t[(i, i)] -= shift;
            }
            return Ok((u, t));
        }
    }
    let v = DVector::from_fn(n, |i, _| 1.0 + (i as f64 * 0.754_877_666).fract());
    let v = v.normalize();
    let h = Matrix::identity(n, n) - &v * v.transpose() * 2.0;
    for eps in [f64::EPSILON, 8.0 * f64::EPSILON] {
        if let Some(s) = Schur::try_new(&h * &m * &h, eps, iters) {
            let (u, t) = s.unpack();
            return Ok((&h * u, t));
        }
    }
    Err(Error::Solver(
        "real Schur decomposition did not converge".into(),
    ))
}

/// Diagonal blocks `(start, size)` of a quasi-triangular Schur factor.
fn schur_blocks(t: &Matrix) -> Vec<(usize, usize)> {
    let n = t.nrows();
    let mut blocks = Vec::with_capacity(n);
    let mut i = 0;
    while i < n {
        if i + 1 < n && t[(i + 1, i)] != 0.0 {
            blocks.push((i, 2));
            i += 2;
        } else {
            blocks.push((i, 1));
            i += 1;
        }
    }
    blocks
}

/// Eigenvalues `(re, im)` of the Schur factor, one entry per eigenvalue.
fn block_eigenvalues(t: &Matrix, blocks: &[(usize, usize)]) -> Vec<(f64, f64)> {
    let mut out = Vec::with_capacity(t.nrows());
    for &(s, size) in blocks {
        if size == 1 {
            out.push((t[(s, s)], 0.0));
        } else {
            let (a, b, c, d) = (t[(s, s)], t[(s, s + 1)], t[(s + 1, s)], t[(s + 1, s + 1)]);
            let half_tr = 0.5 * (a + d);
            let disc = 0.25 * (a - d) * (a - d) + b * c;
            if disc >= 0.0 {
                let r = disc.sqrt();
                out.push((half_tr + r, 0.0));
                out.push((half_tr - r, 0.0));
            } else {
                let r = (-disc).sqrt();
                out.push((half_tr, r));
                out.push((half_tr, -r));
            }
        }
    }
    out
}

/// Spectral abscissa `max Re λ(A)`.
pub fn spectral_abscissa(a: &Matrix) -> Result<f64> {
    check_square(a, "A")?;
    if a.iter().any(|x| !x.is_finite()) {
        return Err(Error::Input("matrix has non-finite entries".into()));
    }
    if a.nrows() == 0 {
        return Err(Error::Dimension("empty matrix".into()));
    }
    let (_, t) = schur(a.clone())?;
    let blocks = schur_blocks(&t);
    Ok(block_eigenvalues(&t, &blocks)
        .into_iter()
        .map(|(re, _)| re)
        .fold(f64::NEG_INFINITY, f64::max))
}

/// `(max Re λ < 0, −max Re λ)`.
pub fn is_stable(a: &Matrix) -> Result<(bool, f64)> {
    let abscissa = spectral_abscissa(a)?;
    // avoid reporting -0.0
    let margin = if abscissa == 0.0 { 0.0 } else { -abscissa };
    Ok((abscissa < 0.0, margin))
}

/// Symmetric eigendecomposition with eigenvalues sorted descending.
#[derive(Debug, Clone)]
pub struct SymEig {
    pub values: DVector<f64>,
    /// Columns are eigenvectors, in the order of `values`.
    pub vectors: Matrix,
}

/// Eigendecomposition `S = Θ diag(λ) Θᵀ` with `λ` descending (ties keep index
/// order) and each eigenvector's largest-magnitude component nonnegative.
pub fn sym_eig(s: &Matrix) -> Result<SymEig> {
    check_square(s, "S")?;
    check_symmetric(s, 1e-10)?;
    let n = s.nrows();
    let eig = SymmetricEigen::new(symmetrize(s));
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| {
        eig.eigenvalues[j]
            .partial_cmp(&eig.eigenvalues[i])
            .unwrap_or(std::cmp::Ordering::Equal)
    });
    let values = DVector::from_iterator(n, order.iter().map(|&i| eig.eigenvalues[i]));
    let mut vectors = Matrix::zeros(n, n);
    for (dst, &src) in order.iter().enumerate() {
        let mut col = eig.eigenvectors.column(src).into_owned();
        let mut pivot = 0;
        for i in 1..n {
            if col[i].abs() > col[pivot].abs() {
                pivot = i;
            }
        }
        if col[pivot] < 0.0 {
            col.neg_mut();
        }
        vectors.set_column(dst, &col);
    }
    Ok(SymEig { values, vectors })
}

/// Matrix exponential (scaling and squaring with Padé approximants).
pub fn expm(w: &Matrix) -> Result<Matrix> {
    check_square(w, "W")?;
    if w.nrows() == 0 {
        return Ok(w.clone());
    }
    Ok(w.exp())
}

/// Bartels–Stewart solver for `F X + X Fᵀ + P = 0` with `F` fixed.
///
/// Holds the real Schur form of `F` so that several right-hand sides can be
/// solved at `O(n³)` each without refactoring.
#[derive(Debug, Clone)]
pub struct Lyapunov {
    u: Matrix,
    t: Matrix,
    blocks: Vec<(usize, usize)>,
}

impl Lyapunov {
    /// Factors `F`; fails if `F` has an eigenvalue with nonnegative real part.
    pub fn new(f: &Matrix) -> Result<Self> {
        check_square(f, "F")?;
        if f.iter().any(|x| !x.is_finite()) {
            return Err(Error::Input("F has non-finite entries".into()));
        }
        let (u, t) = schur(f.clone())?;
        let blocks = schur_blocks(&t);
        for (re, im) in block_eigenvalues(&t, &blocks) {
            if !(re < 0.0) {
                return Err(Error::Solver(format!(
                    "Lyapunov operator requires a stable matrix; found eigenvalue {re} {} {}i",
                    if im < 0.0 { '-' } else { '+' },
                    im.abs()
                )));
            }
        }
        Ok(Lyapunov { u, t, blocks })
    }

    pub fn dim(&self) -> usize {
        self.t.nrows()
    }

    /// Solves `F X + X Fᵀ + P = 0`.
    pub fn solve(&self, p: &Matrix) -> Result<Matrix> {
        let n = self.dim();
        if p.nrows() != n || p.ncols() != n {
            return Err(Error::Dimension(format!(
                "right-hand side is {}x{}, expected {n}x{n}",
                p.nrows(),
                p.ncols()
            )));
        }
        let rhs = -(self.u.transpose() * p * &self.u);
        let y = self.solve_quasi_triangular(&rhs)?;
        Ok(symmetrize(&(&self.u * y * self.u.transpose())))
    }

    /// Solves `T Y + Y Tᵀ = C` block by block, bottom-right first.
    fn solve_quasi_triangular(&self, c: &Matrix) -> Result<Matrix> {
        let n = self.dim();
        let t = &self.t;
        let mut y = Matrix::zeros(n, n);
        for &(k, a) in self.blocks.iter().rev() {
            let k_end = k + a;
            for &(l, b) in self.blocks.iter().rev() {
                let l_end = l + b;
                let mut r = c.view((k, l), (a, b)).into_owned();
                if k_end < n {
                    r -= t.view((k, k_end), (a, n - k_end)) * y.view((k_end, l), (n - k_end, b));
                }
                if l_end < n {
                    r -= y.view((k, l_end), (a, n - l_end))
                        * t.view((l, l_end), (b, n - l_end)).transpose();
                }
                let block = solve_small_sylvester(
                    &t.view((k, k), (a, a)).into_owned(),
                    &t.view((l, l), (b, b)).into_owned(),
                    &r,
                )?;
                y.view_mut((k, l), (a, b)).copy_from(&block);
            }
        }
        Ok(y)
    }
}

/// Solves `T1 Y + Y T2ᵀ = R` for blocks of size at most 2 via vectorization.
fn solve_small_sylvester(t1: &Matrix, t2: &Matrix, r: &Matrix) -> Result<Matrix> {
    let (a, b) = (t1.nrows(), t2.nrows());
    let dim = a * b;
    let mut sys = Matrix::zeros(dim, dim);
    for j in 0..b {
        for i in 0..a {
            let row = i + a * j;
            for ip in 0..a {
                sys[(row, ip + a * j)] += t1[(i, ip)];
            }
            for jp in 0..b {
                sys[(row, i + a * jp)] += t2[(j, jp)];
            }
        }
    }
    let rhs = DVector::from_column_slice(r.as_slice());
    let sol = sys
        .lu()
        .solve(&rhs)
        .ok_or_else(|| Error::Solver("singular Sylvester block".into()))?;
    Ok(Matrix::from_column_slice(a, b, sol.as_slice()))
}

/// Solves `F X + X Fᵀ + P = 0` for stable `F`.
pub fn lyapunov_solve(f: &Matrix, p: &Matrix) -> Result<Matrix> {
    Lyapunov::new(f)?.solve(p)
}

/// Residual `AᵀK + KA + Q − γKCK`.
pub fn riccati_residual(a: &Matrix, c: &Matrix, q: &Matrix, gamma: f64, k: &Matrix) -> Matrix {
    a.transpose() * k + k * a + q - k * c * k * gamma
}

/// Stabilizing solution of `AᵀK + KA + Q − γKCK = 0` with default tolerances.
pub fn care_solve(a: &StableMatrix, c: &Matrix, q: &Matrix, gamma: f64) -> Result<RiccatiSolution> {
    care_solve_with(a.matrix(), c, q, gamma, &SolverConfig::default())
}

/// Newton–Kleinman iteration started at `K = 0`.
///
/// `A` must be stable so that the zero initial guess is stabilizing; every
/// subsequent iterate then keeps `A − γCK` stable. Once the residual meets the
/// tolerance one more Newton step is taken, which brings it to rounding level.
pub fn care_solve_with(
    a: &Matrix,
    c: &Matrix,
    q: &Matrix,
    gamma: f64,
    cfg: &SolverConfig,
) -> Result<RiccatiSolution> {
    check_square(a, "A")?;
    let n = a.nrows();
    for (name, m) in [("C", c), ("Q", q)] {
        if m.nrows() != n || m.ncols() != n {
            return Err(Error::Dimension(format!(
                "{name} is {}x{}, expected {n}x{n}",
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
    let tol = cfg.riccati_rel_tol * q.norm().max(1.0);
    let mut k = Matrix::zeros(n, n);
    let mut history = Vec::new();
    let mut polished = false;
    for it in 1..=cfg.max_newton_iters {
        let f = a - c * &k * gamma;
        let rhs = q + &k * c * &k * gamma;
        let next = Lyapunov::new(&f.transpose())
            .and_then(|lyap| lyap.solve(&rhs))
            .map_err(|e| match e {
                Error::Solver(msg) => Error::Solver(format!(
                    "Newton step {it} failed: {msg}; residual history {history:?}"
                )),
                other => other,
            })?;
        let res = riccati_residual(a, c, q, gamma, &next).norm();
        history.push(res);
        k = next;
        if res <= tol {
            if polished || gamma == 0.0 {
                return Ok(RiccatiSolution {
                    closed_loop: a - c * &k * gamma,
                    k,
                    residual_norm: res,
                    iterations: it,
                });
            }
            polished = true;
        }
    }
    if polished {
        let res = *history.last().unwrap();
        return Ok(RiccatiSolution {
            closed_loop: a - c * &k * gamma,
            k,
            residual_norm: res,
            iterations: cfg.max_newton_iters,
        });
    }
    Err(Error::RiccatiNonConvergence {
        iterations: cfg.max_newton_iters,
        history,
    })
}

/// Standard-normal `rows × cols` matrix.
pub fn gaussian_matrix<R: Rng + ?Sized>(rng: &mut R, rows: usize, cols: usize) -> Matrix {
    Matrix::from_fn(rows, cols, |_, _| rng.sample::<f64, _>(StandardNormal))
}

/// Gaussian `n × n` matrix shifted by a multiple of the identity so that its
/// spectral abscissa equals `target_max_re`.
pub fn random_stable_from<R: Rng + ?Sized>(
    rng: &mut R,
    n: usize,
    target_max_re: f64,
) -> Result<StableMatrix> {
    if n == 0 {
        return Err(Error::Dimension("n must be >= 1".into()));
    }
    if !(target_max_re < 0.0) {
        return Err(Error::Input(format!(
            "target spectral abscissa must be negative, got {target_max_re}"
        )));
    }
    let mut m = gaussian_matrix(rng, n, n);
    let mu = spectral_abscissa(&m)?;
    for i in 0..n {
        m[(i, i)] -= mu - target_max_re;
    }
    let abscissa = spectral_abscissa(&m)?;
    Ok(StableMatrix {
        m,
        margin: -abscissa,
    })
}

/// [`random_stable_from`] on stream 0 of `seed`.
pub fn random_stable(n: usize, target_max_re: f64, seed: u64) -> Result<StableMatrix> {
    random_stable_from(&mut rng::stream(seed, 0), n, target_max_re)
}

/// Scalar and diagonal instances with closed-form solutions, as
/// `(name, absolute error)` pairs.
pub fn closed_form_checks() -> Result<Vec<(&'static str, f64)>> {
    let diag = |v: &[f64]| Matrix::from_diagonal(&DVector::from_vec(v.to_vec()));
    let mut out = Vec::new();

    let x = lyapunov_solve(&diag(&[-1.0]), &diag(&[6.0]))?;
    out.push(("lyapunov scalar", (x[(0, 0)] - 3.0).abs()));

    let q = Matrix::from_row_slice(3, 3, &[2.0, 0.5, 0.0, 0.5, 1.0, 0.2, 0.0, 0.2, 3.0]);
    let x = lyapunov_solve(&(-Matrix::identity(3, 3)), &q)?;
    out.push(("lyapunov commuting", (x - &q * 0.5).amax()));

    let a = StableMatrix::new(diag(&[-1.0]))?;
    let k = care_solve(&a, &diag(&[1.0]), &diag(&[3.0]), 1.0)?.k;
    out.push(("riccati scalar", (k[(0, 0)] - 1.0).abs()));

    let a = StableMatrix::new(diag(&[-1.0, -2.0]))?;
    let k = care_solve(&a, &Matrix::identity(2, 2), &diag(&[3.0, 8.0]), 1.0)?.k;
    let expected = diag(&[1.0, -2.0 + 2.0 * 3f64.sqrt()]);
    out.push(("riccati diagonal", (k - expected).amax()));

    let k = care_solve(&a, &Matrix::identity(2, 2), &diag(&[3.0, 8.0]), 0.0)?.k;
    out.push(("riccati without gain", (k - diag(&[1.5, 2.0])).amax()));

    let (stable, margin) = is_stable(&diag(&[-1.0]))?;
    out.push((
        "stability scalar",
        if stable { (margin - 1.0).abs() } else { 1.0 },
    ));

    let h = std::f64::consts::FRAC_PI_2;
    let r = expm(&Matrix::from_row_slice(2, 2, &[0.0, h, -h, 0.0]))?;
    out.push((
        "expm rotation",
        (r - Matrix::from_row_slice(2, 2, &[0.0, 1.0, -1.0, 0.0])).amax(),
    ));
    Ok(out)
}

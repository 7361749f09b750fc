//! Extremal points of `J(γ, ·)` on `Sym(n, p)`.
//!
//! At `γ = 0` the extremals are the `C(n, p)` projectors onto spans of
//! eigenvectors of `M₀ = K₀R₀K₀`. Each is labelled by its index set: one-based
//! positions in the descending eigenvalue order of `M₀`. Continuation to
//! `γ > 0` solves `[C, M(C)] = 0` by Newton's method in tangent coordinates,
//! stepping `γ` adaptively.
//!
//! In the leading small-gain form the Hessian at the projector onto `{θ_i}_{i∈S}`
//! is diagonal in the basis `(θ_iθ_jᵀ − θ_jθ_iᵀ)/√2`, `i ∈ S, j ∉ S`, with entries
//! `d_i − d_j`. Hence the top subspace is the unique local minimum and the
//! positive count is `#{i ∈ S, j ∉ S : i < j} = np − p(p−1)/2 − Σ S`.

use std::collections::BTreeMap;

use nalgebra::DVector;
use serde::Serialize;

use crate::densela::{commutator, sym_eig, Matrix, StableMatrix, SymPosDef};
use crate::error::{Error, Result};
use crate::io::matrix_serde;
use crate::isospectral::{principal_angles, retract, tangent_basis, Projector};
use crate::objective::{
    big_m0, cost_j, hessian_matrix, hessian_smallgamma, Linearization, SensorProblem,
};

/// Relative eigenvalue threshold below which a Hessian eigenvalue counts as zero.
pub const ZERO_EIG_REL: f64 = 1e-8;
/// Relative gap between consecutive eigenvalues of `M₀` below which it is
/// treated as degenerate.
pub const M0_GAP_REL: f64 = 1e-10;
/// Continuation stops correcting once `‖[C, M]‖ ≤ CONTINUATION_TOL_REL · ‖M‖`.
pub const CONTINUATION_TOL_REL: f64 = 1e-10;
/// Largest principal angle between consecutive continuation points.
pub const TRACKING_ANGLE_MAX: f64 = std::f64::consts::FRAC_PI_4;
/// Budget of corrector attempts (successful or not) per continuation.
pub const MAX_CONTINUATION_ATTEMPTS: usize = 32;
const MAX_NEWTON_STEPS: usize = 30;
const MAX_FIXED_POINT_STEPS: usize = 200;

/// Counts of positive, negative and zero Hessian eigenvalues.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize)]
pub struct Signature {
    pub n_plus: usize,
    pub n_minus: usize,
    pub n_zero: usize,
}

impl Signature {
    /// Classifies eigenvalues with threshold `ZERO_EIG_REL · max|λ|`.
    pub fn from_eigenvalues(eigs: &[f64]) -> Self {
        let scale = eigs.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        let thr = ZERO_EIG_REL * scale;
        let mut s = Signature {
            n_plus: 0,
            n_minus: 0,
            n_zero: 0,
        };
        for &v in eigs {
            if scale == 0.0 || v.abs() < thr {
                s.n_zero += 1;
            } else if v > 0.0 {
                s.n_plus += 1;
            } else {
                s.n_minus += 1;
            }
        }
        s
    }

    pub fn dim(&self) -> usize {
        self.n_plus + self.n_minus + self.n_zero
    }

    pub fn pair(&self) -> UnorderedPair {
        UnorderedPair::new(self.n_plus, self.n_minus)
    }
}

/// `{a, b}` stored as `(min, max)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize)]
pub struct UnorderedPair(pub usize, pub usize);

impl UnorderedPair {
    pub fn new(a: usize, b: usize) -> Self {
        UnorderedPair(a.min(b), a.max(b))
    }
}

impl std::fmt::Display for UnorderedPair {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{{{},{}}}", self.0, self.1)
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct ExtremalRecord {
    /// One-based positions in the descending eigenvalue order of `M₀`.
    pub index_set: Vec<usize>,
    #[serde(rename = "C", with = "matrix_serde")]
    pub c: Matrix,
    #[serde(rename = "J")]
    pub j: f64,
    /// Hessian signature at `continued_gamma`; at `γ = 0`, that of the leading
    /// small-gain form.
    pub signature: Signature,
    /// Signature of the leading small-gain form at the `γ = 0` extremal.
    pub predicted_signature: Signature,
    /// Signature of the leading small-gain form (built from `M₀`) evaluated at
    /// this extremal.
    pub leading_signature: Signature,
    pub sig_formula_pair: UnorderedPair,
    pub continued_gamma: f64,
    pub hessian_eigenvalues: Vec<f64>,
    pub hessian_asymmetry: f64,
    #[serde(skip)]
    projector: Projector,
}

impl ExtremalRecord {
    pub fn projector(&self) -> &Projector {
        &self.projector
    }

    /// Smallest `|λ|` relative to the largest; `∞` for an empty Hessian.
    pub fn min_abs_eig_rel(&self) -> f64 {
        let scale = self
            .hessian_eigenvalues
            .iter()
            .fold(0.0f64, |m, v| m.max(v.abs()));
        let min = self
            .hessian_eigenvalues
            .iter()
            .fold(f64::INFINITY, |m, v| m.min(v.abs()));
        if scale == 0.0 {
            return if self.hessian_eigenvalues.is_empty() {
                f64::INFINITY
            } else {
                0.0
            };
        }
        min / scale
    }

    /// The Hessian signature equals both the `γ = 0` prediction and the
    /// signature of the leading form at this point, with no near-zero eigenvalue.
    pub fn is_regular(&self) -> bool {
        self.signature == self.predicted_signature
            && self.signature == self.leading_signature
            && self.min_abs_eig_rel() >= ZERO_EIG_REL
    }
}

/// All `p`-subsets of `0..n` in lexicographic order.
pub fn combinations(n: usize, p: usize) -> Vec<Vec<usize>> {
    fn rec(start: usize, n: usize, p: usize, cur: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
        if cur.len() == p {
            out.push(cur.clone());
            return;
        }
        for i in start..n {
            if n - i < p - cur.len() {
                break;
            }
            cur.push(i);
            rec(i + 1, n, p, cur, out);
            cur.pop();
        }
    }
    let mut out = Vec::new();
    if p <= n {
        rec(0, n, p, &mut Vec::with_capacity(p), &mut out);
    }
    out
}

/// Signature of [`hessian_smallgamma`] at `c`, in the basis of [`tangent_basis`].
pub fn signature_smallgamma(c: &Projector, m0: &Matrix) -> Result<Signature> {
    let basis = tangent_basis(c)?;
    let d = basis.len();
    if d == 0 {
        return Ok(Signature::from_eigenvalues(&[]));
    }
    let h = Matrix::from_fn(d, d, |a, b| {
        hessian_smallgamma(c.matrix(), m0, basis[a].omega(), basis[b].omega())
    });
    let eig = sym_eig(&crate::densela::symmetrize(&h))?;
    Ok(Signature::from_eigenvalues(eig.values.as_slice()))
}

/// Minimum gap between consecutive eigenvalues of `M₀` relative to `‖M₀‖`.
pub fn m0_relative_gap(m0: &Matrix) -> Result<f64> {
    let eig = sym_eig(m0)?;
    let scale = eig.values.amax();
    let gap = eig
        .values
        .as_slice()
        .windows(2)
        .map(|w| w[0] - w[1])
        .fold(f64::INFINITY, f64::min);
    Ok(if scale > 0.0 { gap / scale } else { 0.0 })
}

/// The `C(n, p)` extremals at `γ = 0`.
pub fn enumerate_extremals_gamma0(
    a: &StableMatrix,
    q: &SymPosDef,
    l: &SymPosDef,
    p: usize,
) -> Result<Vec<ExtremalRecord>> {
    let problem = SensorProblem::new(a.clone(), q.clone(), l.clone(), 0.0, p)?;
    let n = problem.n();
    let m0 = big_m0(a, q, l)?;
    let gap = m0_relative_gap(&m0)?;
    if n > 1 && gap <= M0_GAP_REL {
        return Err(Error::Degenerate { gap });
    }
    let eig = sym_eig(&m0)?;
    let mut records = Vec::new();
    for subset in combinations(n, p) {
        let v = Matrix::from_columns(
            &subset
                .iter()
                .map(|&i| eig.vectors.column(i))
                .collect::<Vec<_>>(),
        );
        let projector = Projector::from_orthonormal_columns(&v)?;
        let index_set: Vec<usize> = subset.iter().map(|i| i + 1).collect();
        let predicted = signature_smallgamma(&projector, &m0)?;
        records.push(ExtremalRecord {
            sig_formula_pair: signature_formula(&index_set, n, p),
            j: cost_j(&problem, &projector)?,
            c: projector.matrix().clone(),
            signature: predicted,
            predicted_signature: predicted,
            leading_signature: predicted,
            continued_gamma: 0.0,
            hessian_eigenvalues: Vec::new(),
            hessian_asymmetry: 0.0,
            index_set,
            projector,
        });
    }
    Ok(records)
}

/// Why a corrector gave up.
type CorrectorResult = std::result::Result<Projector, String>;

/// Newton's method on `r_b(C) = tr([C, M(C)] Ω_b)` over the tangent basis at the
/// current iterate. Moving along `[C, Ω_a]` changes `r_b` at rate
/// `tr([C,Ω_a][M,Ω_b]) + tr([C,Ṁ_a]Ω_b)`.
fn newton_correct(problem: &SensorProblem, start: &Projector) -> Result<CorrectorResult> {
    let mut c = start.clone();
    let mut prev = f64::INFINITY;
    for _ in 0..MAX_NEWTON_STEPS {
        let lin = Linearization::new(problem, &c)?;
        let bracket = commutator(&lin.c, &lin.m);
        let res = bracket.norm();
        if res <= CONTINUATION_TOL_REL * lin.m.norm() {
            return Ok(Ok(c));
        }
        if res >= prev {
            return Ok(Err(format!("Newton residual stalled at {res:e}")));
        }
        prev = res;
        let basis = tangent_basis(&c)?;
        let d = basis.len();
        let g = DVector::from_fn(d, |b, _| (&bracket * basis[b].omega()).trace());
        let m_dots = basis
            .iter()
            .map(|v| lin.m_dot(v.x()))
            .collect::<Result<Vec<_>>>()?;
        let jac = Matrix::from_fn(d, d, |b, a| {
            let oa = basis[a].omega();
            let ob = basis[b].omega();
            (commutator(&lin.c, oa) * commutator(&lin.m, ob)).trace()
                + (commutator(&lin.c, &m_dots[a]) * ob).trace()
        });
        let Some(xi) = jac.lu().solve(&(-g)) else {
            return Ok(Err("singular Newton system".into()));
        };
        let mut omega = Matrix::zeros(c.n(), c.n());
        for (a, v) in basis.iter().enumerate() {
            omega += v.omega() * xi[a];
        }
        if omega.norm() > TRACKING_ANGLE_MAX {
            return Ok(Err(format!("Newton step too large ({:e})", omega.norm())));
        }
        // velocity [C, Ω] is produced by e^{−tΩ} C e^{tΩ}
        c = retract(&c, &(-omega), 1.0)?;
    }
    Ok(Err("Newton iteration limit".into()))
}

/// Repeatedly replaces `C` by the projector onto the `p` eigenvectors of `M(C)`
/// closest to its range.
fn fixed_point_correct(problem: &SensorProblem, start: &Projector) -> Result<CorrectorResult> {
    let mut c = start.clone();
    let p = c.p();
    for _ in 0..MAX_FIXED_POINT_STEPS {
        let lin = Linearization::new(problem, &c)?;
        if commutator(&lin.c, &lin.m).norm() <= CONTINUATION_TOL_REL * lin.m.norm() {
            return Ok(Ok(c));
        }
        let eig = sym_eig(&lin.m)?;
        let mut weights: Vec<(f64, usize)> = (0..c.n())
            .map(|i| ((c.matrix() * eig.vectors.column(i)).norm_squared(), i))
            .collect();
        weights.sort_by(|x, y| y.0.partial_cmp(&x.0).unwrap());
        if weights[p - 1].0 < 0.5 {
            return Ok(Err("eigenvector tracking is ambiguous".into()));
        }
        let mut chosen: Vec<usize> = weights[..p].iter().map(|w| w.1).collect();
        chosen.sort_unstable();
        let v = Matrix::from_columns(
            &chosen
                .iter()
                .map(|&i| eig.vectors.column(i))
                .collect::<Vec<_>>(),
        );
        c = Projector::from_orthonormal_columns(&v)?;
    }
    Ok(Err("fixed-point iteration limit".into()))
}

fn correct(problem: &SensorProblem, start: &Projector) -> Result<CorrectorResult> {
    let attempt = match newton_correct(problem, start)? {
        Ok(c) => Ok(c),
        Err(_) => fixed_point_correct(problem, start)?,
    };
    Ok(attempt.and_then(|c| {
        let angle = principal_angles(start, &c)
            .map_err(|e| e.to_string())?
            .last()
            .copied()
            .unwrap_or(0.0);
        if angle > TRACKING_ANGLE_MAX {
            Err(format!("subspace moved by {angle} rad in one substep"))
        } else {
            Ok(c)
        }
    }))
}

/// Record for an already-corrected extremal of `problem`.
pub fn record_at(
    problem: &SensorProblem,
    template: &ExtremalRecord,
    c: Projector,
) -> Result<ExtremalRecord> {
    let hess = hessian_matrix(problem, &c)?;
    let m0 = big_m0(problem.a(), problem.q(), problem.l())?;
    let eigs = hess.eigenvalues();
    Ok(ExtremalRecord {
        index_set: template.index_set.clone(),
        c: c.matrix().clone(),
        j: cost_j(problem, &c)?,
        signature: Signature::from_eigenvalues(&eigs),
        predicted_signature: template.predicted_signature,
        leading_signature: signature_smallgamma(&c, &m0)?,
        sig_formula_pair: template.sig_formula_pair,
        continued_gamma: problem.gamma(),
        hessian_eigenvalues: eigs,
        hessian_asymmetry: hess.asymmetry,
        projector: c,
    })
}

/// Carries `record` from its `continued_gamma` to `problem.gamma()`.
pub fn continue_extremal(
    problem: &SensorProblem,
    record: &ExtremalRecord,
) -> Result<ExtremalRecord> {
    let target = problem.gamma();
    let mut g = record.continued_gamma;
    if target == g {
        return Ok(record.clone());
    }
    let mut c = record.projector.clone();
    let mut dg = (target - g) / 4.0;
    let mut last_reason = String::new();
    for _ in 0..MAX_CONTINUATION_ATTEMPTS {
        let next = if (target - (g + dg)) * dg.signum() <= 0.0 {
            target
        } else {
            g + dg
        };
        let pr = problem.with_gamma(next)?;
        match correct(&pr, &c)? {
            Ok(cn) => {
                c = cn;
                g = next;
                if g == target {
                    return record_at(problem, record, c);
                }
                dg *= 2.0;
            }
            Err(reason) => {
                last_reason = reason;
                dg *= 0.5;
            }
        }
    }
    Err(Error::Continuation {
        gamma: g + dg,
        reason: format!(
            "no convergence within {MAX_CONTINUATION_ATTEMPTS} corrector attempts: {last_reason}"
        ),
    })
}

/// Numeric Hessian signature at an extremal.
pub fn signature_numeric(problem: &SensorProblem, c: &Projector) -> Result<Signature> {
    let hess = hessian_matrix(problem, c)?;
    Ok(Signature::from_eigenvalues(&hess.eigenvalues()))
}

/// `{m − p(p+1)/2, np − p(p−1)/2 − m}` with `m = Σ index_set`.
pub fn signature_formula(index_set: &[usize], n: usize, p: usize) -> UnorderedPair {
    let m: usize = index_set.iter().sum();
    let a = m - p * (p + 1) / 2;
    let b = n * p - p * (p.saturating_sub(1)) / 2 - m;
    UnorderedPair::new(a, b)
}

/// Partitions of `m` into exactly `p` positive parts.
pub fn count_partitions_p(m: usize, p: usize) -> u64 {
    // table[i][k] = P(i, k)
    let mut table = vec![vec![0u64; p + 1]; m + 1];
    table[0][0] = 1;
    for i in 1..=m {
        for k in 1..=p.min(i) {
            table[i][k] = table[i - 1][k - 1] + table[i - k][k];
        }
    }
    table[m][p]
}

/// Partitions of `m` into exactly `p` distinct positive parts, each at most
/// `max_part` if given.
pub fn count_partitions_q(p: usize, m: usize, max_part: Option<usize>) -> u64 {
    match max_part {
        None => {
            let shift = p * p.saturating_sub(1) / 2;
            if m < shift {
                0
            } else {
                count_partitions_p(m - shift, p)
            }
        }
        Some(n) => {
            // ways[k][s]: k distinct parts from 1..=part with sum s
            let mut ways = vec![vec![0u64; m + 1]; p + 1];
            ways[0][0] = 1;
            for part in 1..=n.min(m) {
                for k in (1..=p).rev() {
                    for s in (part..=m).rev() {
                        ways[k][s] += ways[k - 1][s - part];
                    }
                }
            }
            ways[p][m]
        }
    }
}

/// Census of continued extremals by unordered signature pair.
#[derive(Debug, Clone, Serialize)]
pub struct Census {
    pub gamma: f64,
    pub counts: BTreeMap<String, usize>,
    pub records: Vec<ExtremalRecord>,
}

impl Census {
    pub fn count(&self, pair: UnorderedPair) -> usize {
        self.counts.get(&pair.to_string()).copied().unwrap_or(0)
    }

    /// Records whose numeric Hessian is definite, with the sign `+1` or `−1`.
    pub fn definite(&self) -> Vec<(&ExtremalRecord, i8)> {
        self.records
            .iter()
            .filter_map(|r| {
                let s = r.signature;
                let d = s.dim();
                if d == 0 || s.n_zero > 0 {
                    None
                } else if s.n_plus == d {
                    Some((r, 1))
                } else if s.n_minus == d {
                    Some((r, -1))
                } else {
                    None
                }
            })
            .collect()
    }

    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record([
            "index_set",
            "J",
            "n_plus",
            "n_minus",
            "n_zero",
            "continued_gamma",
        ])?;
        for r in &self.records {
            let idx: Vec<String> = r.index_set.iter().map(|i| i.to_string()).collect();
            w.write_record([
                idx.join(" "),
                format!("{:e}", r.j),
                r.signature.n_plus.to_string(),
                r.signature.n_minus.to_string(),
                r.signature.n_zero.to_string(),
                format!("{:e}", r.continued_gamma),
            ])?;
        }
        let bytes = w.into_inner().map_err(|e| Error::Io(e.into_error()))?;
        Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
    }
}

/// Expected census from the index-set sums, using partitions with parts `≤ n`.
pub fn census_prediction(n: usize, p: usize) -> BTreeMap<String, usize> {
    let mut out = BTreeMap::new();
    let lo = p * (p + 1) / 2;
    let hi = n * p - p * p.saturating_sub(1) / 2;
    for m in lo..=hi {
        let count = count_partitions_q(p, m, Some(n)) as usize;
        if count > 0 {
            let pair = UnorderedPair::new(m - lo, hi - m);
            *out.entry(pair.to_string()).or_insert(0) += count;
        }
    }
    out
}

pub fn signature_census(
    a: &StableMatrix,
    q: &SymPosDef,
    l: &SymPosDef,
    p: usize,
    gamma: f64,
) -> Result<Census> {
    let problem = SensorProblem::new(a.clone(), q.clone(), l.clone(), gamma, p)?;
    let mut records = Vec::new();
    for r in enumerate_extremals_gamma0(a, q, l, p)? {
        records.push(continue_extremal(&problem, &r)?);
    }
    let mut counts = BTreeMap::new();
    for r in &records {
        *counts.entry(r.signature.pair().to_string()).or_insert(0) += 1;
    }
    Ok(Census {
        gamma,
        counts,
        records,
    })
}

/// Outcome of [`gamma_star`].
#[derive(Debug, Clone, Serialize)]
pub struct GammaStar {
    pub gamma_star: f64,
    /// No departure up to `γ_max`; `gamma_star` equals `γ_max`.
    pub censored: bool,
    /// Set when `gamma_star` is where continuation failed rather than where a
    /// signature changed.
    pub continuation_failure: Option<String>,
}

/// Relative bisection tolerance of [`gamma_star`].
pub const GAMMA_STAR_REL_TOL: f64 = 1e-3;

/// Whether all records are regular after continuation to `gamma`; `Err` carries
/// the continuation failure message.
fn all_regular(
    base: &SensorProblem,
    records: &[ExtremalRecord],
    gamma: f64,
) -> Result<std::result::Result<(bool, Vec<ExtremalRecord>), String>> {
    let pr = base.with_gamma(gamma)?;
    let mut out = Vec::with_capacity(records.len());
    for r in records {
        match continue_extremal(&pr, r) {
            Ok(c) => out.push(c),
            Err(Error::Continuation { reason, .. }) => return Ok(Err(reason)),
            Err(e) => return Err(e),
        }
    }
    let ok = out.iter().all(|r| r.is_regular());
    Ok(Ok((ok, out)))
}

/// Smallest `γ ≤ γ_max` at which some continued extremal stops being regular
/// (see [`ExtremalRecord::is_regular`]) or cannot be continued. Scans a
/// geometric grid from `γ_max·1e−4` to `γ_max`, then bisects.
pub fn gamma_star(
    a: &StableMatrix,
    q: &SymPosDef,
    l: &SymPosDef,
    p: usize,
    gamma_max: f64,
    grid_size: usize,
) -> Result<GammaStar> {
    if !(gamma_max > 0.0) || grid_size < 2 {
        return Err(Error::Input(format!(
            "gamma_star needs gamma_max > 0 and grid_size >= 2 (got {gamma_max}, {grid_size})"
        )));
    }
    let base = SensorProblem::new(a.clone(), q.clone(), l.clone(), 0.0, p)?;
    let mut good = enumerate_extremals_gamma0(a, q, l, p)?;
    let mut lo = 0.0;
    let start = gamma_max * 1e-4;
    let ratio = (gamma_max / start).powf(1.0 / (grid_size - 1) as f64);
    for k in 0..grid_size {
        let g = if k + 1 == grid_size {
            gamma_max
        } else {
            start * ratio.powi(k as i32)
        };
        match all_regular(&base, &good, g)? {
            Ok((true, recs)) => {
                good = recs;
                lo = g;
            }
            outcome => {
                let mut failure = outcome.err();
                let mut hi = g;
                while hi - lo > GAMMA_STAR_REL_TOL * hi {
                    let mid = 0.5 * (lo + hi);
                    match all_regular(&base, &good, mid)? {
                        Ok((true, recs)) => {
                            good = recs;
                            lo = mid;
                        }
                        Ok((false, _)) => {
                            failure = None;
                            hi = mid;
                        }
                        Err(reason) => {
                            failure = Some(reason);
                            hi = mid;
                        }
                    }
                }
                return Ok(GammaStar {
                    gamma_star: hi,
                    censored: false,
                    continuation_failure: failure,
                });
            }
        }
    }
    Ok(GammaStar {
        gamma_star: gamma_max,
        censored: true,
        continuation_failure: None,
    })
}

//! Transport energy between empirical feature distributions.
//!
//! The bridge cost between two task-condition distributions is computed as
//! entropy-regularized optimal transport with squared Euclidean ground cost,
//! solved by log-domain Sinkhorn iterations with epsilon scaling. The
//! reported energy is the transport term `<coupling, cost>` only; the
//! entropic term is excluded so identical distributions approach zero cost
//! as epsilon shrinks. A closed-form Gaussian transport cost is provided as
//! a validation oracle.

use crate::data::{Dataset, Portion, Space};
use crate::{Error, Result};
use nalgebra::DMatrix;
use ndarray::{Array1, Array2, Axis};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::io::Write;
use std::path::Path;

/// Weighted point cloud in feature space.
#[derive(Debug, Clone, PartialEq)]
pub struct EmpiricalDistribution {
    points: Array2<f64>,
    weights: Array1<f64>,
}

impl EmpiricalDistribution {
    /// Validates: at least one point, finite coordinates, nonnegative
    /// weights summing to 1 within 1e-12.
    pub fn new(points: Array2<f64>, weights: Array1<f64>) -> Result<Self> {
        if points.nrows() == 0 {
            return Err(Error::InvalidConfig(
                "empirical distribution needs at least one point".into(),
            ));
        }
        if weights.len() != points.nrows() {
            return Err(Error::DimensionMismatch {
                expected: points.nrows(),
                got: weights.len(),
            });
        }
        if points.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidConfig(
                "empirical distribution contains non-finite coordinates".into(),
            ));
        }
        if weights.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(Error::InvalidConfig(
                "weights must be finite and nonnegative".into(),
            ));
        }
        let total: f64 = weights.sum();
        if (total - 1.0).abs() > 1e-12 {
            return Err(Error::InvalidConfig(format!(
                "weights must sum to 1 within 1e-12, got {total}"
            )));
        }
        Ok(EmpiricalDistribution { points, weights })
    }

    /// Uniform weights `1/n` over the given points.
    pub fn uniform(points: Array2<f64>) -> Result<Self> {
        let n = points.nrows();
        if n == 0 {
            return Err(Error::InvalidConfig(
                "empirical distribution needs at least one point".into(),
            ));
        }
        let w = Array1::from_elem(n, 1.0 / n as f64);
        // Uniform weights can miss 1.0 by a few ulps; renormalize exactly.
        let total = w.sum();
        Self::new(points, w / total)
    }

    /// Copy with zero-weight points removed.
    pub fn pruned(&self) -> Self {
        let keep: Vec<usize> = (0..self.n()).filter(|&i| self.weights[i] > 0.0).collect();
        if keep.len() == self.n() {
            return self.clone();
        }
        let points = self.points.select(Axis(0), &keep);
        let weights = Array1::from_iter(keep.iter().map(|&i| self.weights[i]));
        EmpiricalDistribution { points, weights }
    }

    pub fn n(&self) -> usize {
        self.points.nrows()
    }

    pub fn dimension(&self) -> usize {
        self.points.ncols()
    }

    pub fn points(&self) -> &Array2<f64> {
        &self.points
    }

    pub fn weights(&self) -> &Array1<f64> {
        &self.weights
    }
}

/// How the regularization strength is chosen for a problem instance.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Epsilon {
    /// Fixed value in squared feature units.
    Absolute(f64),
    /// Multiple of the median ground-cost entry, so the default is
    /// scale-free across problems.
    MedianScale(f64),
}

/// Solver configuration.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SBPConfig {
    pub epsilon: Epsilon,
    pub max_iterations: usize,
    /// L1 marginal violation below which the solve counts as converged.
    pub tolerance: f64,
    /// Number of warm-start stages; epsilon is halved between stages down
    /// to the target value.
    pub epsilon_scaling_steps: usize,
}

impl Default for SBPConfig {
    fn default() -> Self {
        SBPConfig {
            epsilon: Epsilon::MedianScale(0.08),
            max_iterations: 10_000,
            tolerance: 1e-8,
            epsilon_scaling_steps: 4,
        }
    }
}

impl SBPConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = match self.epsilon {
            Epsilon::Absolute(e) => e > 0.0 && e.is_finite(),
            Epsilon::MedianScale(s) => s > 0.0 && s.is_finite(),
        };
        if !ok {
            return Err(Error::InvalidConfig("epsilon must be positive".into()));
        }
        if !(self.tolerance > 0.0) {
            return Err(Error::InvalidConfig("tolerance must be positive".into()));
        }
        if self.epsilon_scaling_steps == 0 {
            return Err(Error::InvalidConfig(
                "epsilon_scaling_steps must be at least 1".into(),
            ));
        }
        Ok(())
    }

    /// Concrete epsilon for a given cost matrix.
    pub fn resolve_epsilon(&self, cost: &Array2<f64>) -> f64 {
        match self.epsilon {
            Epsilon::Absolute(e) => e,
            Epsilon::MedianScale(s) => {
                let med = median(cost);
                let scale = if med > 0.0 {
                    med
                } else {
                    let mean = cost.sum() / cost.len() as f64;
                    if mean > 0.0 {
                        mean
                    } else {
                        // All costs zero: any epsilon yields the same (zero) energy.
                        return 1.0;
                    }
                };
                s * scale
            }
        }
    }
}

fn median(m: &Array2<f64>) -> f64 {
    let mut v: Vec<f64> = m.iter().copied().collect();
    let mid = (v.len() - 1) / 2;
    let (_, med, _) = v.select_nth_unstable_by(mid, |a, b| a.partial_cmp(b).unwrap());
    *med
}

/// Entropic coupling together with the marginals it was asked to match.
#[derive(Debug, Clone)]
pub struct TransportPlan {
    pub coupling: Array2<f64>,
    pub source_marginal: Array1<f64>,
    pub target_marginal: Array1<f64>,
}

impl TransportPlan {
    /// Max of the L1 row-sum and column-sum violations.
    pub fn marginal_error(&self) -> f64 {
        let row_err: f64 = self
            .coupling
            .sum_axis(Axis(1))
            .iter()
            .zip(self.source_marginal.iter())
            .map(|(s, a)| (s - a).abs())
            .sum();
        let col_err: f64 = self
            .coupling
            .sum_axis(Axis(0))
            .iter()
            .zip(self.target_marginal.iter())
            .map(|(s, b)| (s - b).abs())
            .sum();
        row_err.max(col_err)
    }
}

/// Result of one transport solve.
#[derive(Debug, Clone)]
pub struct SBPResult {
    /// Transport term `<coupling, cost>` in squared feature units.
    pub energy: f64,
    pub plan: TransportPlan,
    pub iterations_used: usize,
    pub converged: bool,
    pub marginal_error: f64,
    /// Epsilon actually used (after resolving a median-scaled rule).
    pub epsilon_used: f64,
    /// Dual potentials at the final epsilon, reusable as a warm start.
    pub potentials: Potentials,
}

impl SBPResult {
    /// Escalates a non-converged solve to an error; used by strict callers.
    pub fn require_converged(&self, tolerance: f64) -> Result<&Self> {
        if self.converged {
            Ok(self)
        } else {
            Err(Error::NotConverged {
                iterations: self.iterations_used,
                marginal_error: self.marginal_error,
                tolerance,
            })
        }
    }
}

/// Pairwise squared Euclidean costs: `C[i][j] = ||p_i - q_j||^2`.
pub fn cost_matrix(p: &EmpiricalDistribution, q: &EmpiricalDistribution) -> Result<Array2<f64>> {
    if p.dimension() != q.dimension() {
        return Err(Error::DimensionMismatch {
            expected: p.dimension(),
            got: q.dimension(),
        });
    }
    let (n, m, d) = (p.n(), q.n(), p.dimension());
    let pp = p.points();
    let qq = q.points();
    let mut c = Array2::zeros((n, m));
    let cs = c.as_slice_mut().expect("standard layout");
    cs.par_chunks_mut(m).enumerate().for_each(|(i, row)| {
        for (j, out) in row.iter_mut().enumerate() {
            let mut acc = 0.0;
            for k in 0..d {
                let diff = pp[[i, k]] - qq[[j, k]];
                acc += diff * diff;
            }
            *out = acc;
        }
    });
    Ok(c)
}

/// Log-domain Sinkhorn solve with epsilon scaling. See [`sinkhorn_warm`].
pub fn sinkhorn(
    a: &Array1<f64>,
    b: &Array1<f64>,
    cost: &Array2<f64>,
    cfg: &SBPConfig,
) -> Result<SBPResult> {
    sinkhorn_warm(a, b, cost, cfg, None)
}

/// Dual potentials of a solve, reusable as a warm start for a nearby problem
/// of identical shape.
#[derive(Debug, Clone)]
pub struct Potentials {
    pub f: Array1<f64>,
    pub g: Array1<f64>,
}

/// Log-domain Sinkhorn for the coupling `diag(u) K diag(v)` with
/// `K = exp(-C/eps)`, scaled entirely through the dual potentials
/// `f = eps log u`, `g = eps log v` so small epsilon cannot underflow the
/// kernel. Without a warm start the solve anneals epsilon down a halving
/// ladder; supplied potentials replace the ladder and the solve runs at the
/// target epsilon directly. Marginals must be strictly positive. A
/// non-converged solve is not an error: the best iterate is returned with
/// `converged = false`.
pub fn sinkhorn_warm(
    a: &Array1<f64>,
    b: &Array1<f64>,
    cost: &Array2<f64>,
    cfg: &SBPConfig,
    warm: Option<&Potentials>,
) -> Result<SBPResult> {
    cfg.validate()?;
    let (n, m) = cost.dim();
    if a.len() != n || b.len() != m {
        return Err(Error::ShapeMismatch {
            expected: format!("marginals of lengths {n} and {m}"),
            got: format!("{} and {}", a.len(), b.len()),
        });
    }
    if a.iter().any(|v| !(*v > 0.0)) || b.iter().any(|v| !(*v > 0.0)) {
        return Err(Error::InvalidConfig(
            "marginals must be strictly positive; prune zero-weight points first".into(),
        ));
    }
    if cost.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidConfig("cost matrix must be finite".into()));
    }
    if let Some(p) = warm {
        if p.f.len() != n || p.g.len() != m {
            return Err(Error::ShapeMismatch {
                expected: format!("warm potentials of lengths {n} and {m}"),
                got: format!("{} and {}", p.f.len(), p.g.len()),
            });
        }
    }

    let eps_target = cfg.resolve_epsilon(cost);
    let cost_t = cost.t().as_standard_layout().to_owned();
    let log_a = a.mapv(f64::ln);
    let log_b = b.mapv(f64::ln);

    let mut f = warm.map(|p| p.f.clone()).unwrap_or_else(|| Array1::zeros(n));
    let mut g = warm.map(|p| p.g.clone()).unwrap_or_else(|| Array1::zeros(m));
    let mut row_lse = Array1::zeros(n);
    let mut col_lse = Array1::zeros(m);

    let stages = if warm.is_some() {
        1
    } else {
        cfg.epsilon_scaling_steps
    };
    // The loop stops at a stricter target than the reported tolerance so
    // that order-of-arguments asymmetry in the stopping state stays well
    // below the documented 1e-9 relative symmetry of the energy.
    let final_tol = cfg.tolerance * 5e-3;
    // Annealing stages are warm-up only: they stop early at a loose
    // tolerance and may not eat into the final stage's iteration share.
    let stage_cap = (cfg.max_iterations / 8).max(1);
    // Contraction rate is re-estimated over this many iterations to pick
    // the over-relaxation factor.
    const RATE_WINDOW: usize = 100;
    let mut iterations_used = 0usize;
    let budget = cfg.max_iterations;
    for stage in (0..stages).rev() {
        let eps = eps_target * (1u64 << stage) as f64;
        let stage_tol = if stage == 0 { final_tol } else { 1e-3 };
        let mut stage_iters = 0usize;
        // Both dual updates are over-relaxed by `omega`. Plain updates
        // (factor 1) are already fast on well-conditioned problems, so the
        // factor stays at 1 until the measured per-iteration contraction
        // rate reveals a poorly conditioned problem; it is then frozen at
        // the classical optimum for that rate. The fixed point is unchanged
        // by relaxation. Relaxed iterations overshoot transiently rather
        // than decay monotonically, so the divergence guard is generous: a
        // hundredfold error regression halves the relaxation excess and
        // re-arms, walking the factor back toward plain updates if the
        // relaxed scheme misbehaves.
        let mut omega = 1.0;
        let mut window_start_err = f64::INFINITY;
        let mut activation_err = f64::INFINITY;
        loop {
            // One row pass both updates the potential and, via the identity
            // row_sum_i = exp(f_i/eps + lse_i), prices the current row
            // violation for free.
            lse_pass(cost, &g, eps, &mut row_lse);
            let row_err: f64 = (0..n)
                .map(|i| (a[i] - (f[i] / eps + row_lse[i]).exp()).abs())
                .sum();
            if stage_iters > 0 && row_err <= stage_tol {
                break;
            }
            if iterations_used >= budget || (stage > 0 && stage_iters >= stage_cap) {
                break;
            }
            if stage == 0 {
                if omega > 1.0 && row_err > 100.0 * activation_err {
                    omega = 1.0 + (omega - 1.0) * 0.5;
                    activation_err = row_err;
                } else if stage_iters % RATE_WINDOW == 0 {
                    if omega == 1.0 && stage_iters > 0 && window_start_err.is_finite() {
                        let rate =
                            (row_err / window_start_err).powf(1.0 / RATE_WINDOW as f64);
                        if (0.99..1.0).contains(&rate) {
                            omega = (2.0 / (1.0 + (1.0 - rate).sqrt())).min(1.95);
                            activation_err = row_err;
                        }
                    }
                    window_start_err = row_err;
                }
            }
            for i in 0..n {
                f[i] += omega * (eps * (log_a[i] - row_lse[i]) - f[i]);
            }
            lse_pass(&cost_t, &f, eps, &mut col_lse);
            for j in 0..m {
                g[j] += omega * (eps * (log_b[j] - col_lse[j]) - g[j]);
            }
            iterations_used += 1;
            stage_iters += 1;
        }
        if f.iter().chain(g.iter()).any(|v| !v.is_finite()) {
            return Err(Error::NumericalOverflow("dual potential"));
        }
    }

    // One plain closing pass: pins the column marginal exactly given the
    // final potentials and makes degenerate problems (such as single-support
    // marginals) exact to machine precision regardless of the relaxation.
    lse_pass(cost, &g, eps_target, &mut row_lse);
    for i in 0..n {
        f[i] = eps_target * (log_a[i] - row_lse[i]);
    }
    lse_pass(&cost_t, &f, eps_target, &mut col_lse);
    for j in 0..m {
        g[j] = eps_target * (log_b[j] - col_lse[j]);
    }

    // Materialize the coupling at the target epsilon and measure the
    // achieved marginals honestly.
    let mut coupling = Array2::zeros((n, m));
    {
        let cs = coupling.as_slice_mut().expect("standard layout");
        let cc = cost.as_slice().expect("standard layout");
        cs.par_chunks_mut(m).enumerate().for_each(|(i, row)| {
            for (j, out) in row.iter_mut().enumerate() {
                *out = ((f[i] + g[j] - cc[i * m + j]) / eps_target).exp();
            }
        });
    }
    if coupling.iter().any(|v| !v.is_finite()) {
        return Err(Error::NumericalOverflow("coupling entry"));
    }
    let plan = TransportPlan {
        coupling,
        source_marginal: a.clone(),
        target_marginal: b.clone(),
    };
    let marginal_error = plan.marginal_error();
    Ok(SBPResult {
        energy: 0.0, // filled by the caller when a cost pairing is wanted
        plan,
        iterations_used,
        converged: marginal_error <= cfg.tolerance,
        marginal_error,
        epsilon_used: eps_target,
        potentials: Potentials { f, g },
    })
}

/// `out_i = logsumexp_j((pot_j - C_ij)/eps)` over rows of `cost_for_rows`,
/// which must be in standard layout.
fn lse_pass(cost_for_rows: &Array2<f64>, pot: &Array1<f64>, eps: f64, out: &mut Array1<f64>) {
    let m = cost_for_rows.ncols();
    let c = cost_for_rows.as_slice().expect("standard layout");
    let p = pot.as_slice().expect("contiguous");
    out.as_slice_mut()
        .expect("contiguous")
        .par_iter_mut()
        .enumerate()
        .for_each(|(i, o)| {
            let row = &c[i * m..(i + 1) * m];
            let mut hi = f64::NEG_INFINITY;
            for j in 0..m {
                let v = (p[j] - row[j]) / eps;
                if v > hi {
                    hi = v;
                }
            }
            let mut acc = 0.0;
            for j in 0..m {
                acc += ((p[j] - row[j]) / eps - hi).exp();
            }
            *o = hi + acc.ln();
        });
}

/// Transport energy between two distributions: solves the entropic problem
/// and pairs the coupling with the squared Euclidean cost.
pub fn sbp_energy(
    p0: &EmpiricalDistribution,
    p1: &EmpiricalDistribution,
    cfg: &SBPConfig,
) -> Result<SBPResult> {
    sbp_energy_warm(p0, p1, cfg, None)
}

/// [`sbp_energy`] with reusable dual potentials for repeated solves over
/// slowly moving distributions of fixed size.
pub fn sbp_energy_warm(
    p0: &EmpiricalDistribution,
    p1: &EmpiricalDistribution,
    cfg: &SBPConfig,
    warm: Option<&Potentials>,
) -> Result<SBPResult> {
    let p0 = p0.pruned();
    let p1 = p1.pruned();
    let cost = cost_matrix(&p0, &p1)?;
    let mut result = sinkhorn_warm(p0.weights(), p1.weights(), &cost, cfg, warm)?;
    result.energy = result
        .plan
        .coupling
        .iter()
        .zip(cost.iter())
        .map(|(g, c)| g * c)
        .sum();
    Ok(result)
}

/// Exact squared-2-Wasserstein cost between Gaussians:
/// `||mu0-mu1||^2 + tr(cov0 + cov1 - 2 (cov0^{1/2} cov1 cov0^{1/2})^{1/2})`.
pub fn gaussian_transport_oracle(
    mu0: &Array1<f64>,
    cov0: &Array2<f64>,
    mu1: &Array1<f64>,
    cov1: &Array2<f64>,
) -> Result<f64> {
    let d = mu0.len();
    if mu1.len() != d || cov0.dim() != (d, d) || cov1.dim() != (d, d) {
        return Err(Error::ShapeMismatch {
            expected: format!("dimension {d} mean/covariance pairs"),
            got: format!("{} / {:?} / {:?}", mu1.len(), cov0.dim(), cov1.dim()),
        });
    }
    let c0 = to_nalgebra(cov0);
    let c1 = to_nalgebra(cov1);
    let sqrt0 = sqrtm_psd(&c0)?;
    let inner = &sqrt0 * &c1 * &sqrt0;
    let sqrt_inner = sqrtm_psd(&inner)?;
    let mean_term: f64 = mu0
        .iter()
        .zip(mu1.iter())
        .map(|(a, b)| (a - b) * (a - b))
        .sum();
    let cov_term = c0.trace() + c1.trace() - 2.0 * sqrt_inner.trace();
    Ok((mean_term + cov_term).max(0.0))
}

fn to_nalgebra(m: &Array2<f64>) -> DMatrix<f64> {
    DMatrix::from_fn(m.nrows(), m.ncols(), |i, j| m[[i, j]])
}

/// Symmetric PSD matrix square root via eigendecomposition. Eigenvalues may
/// dip slightly negative from rounding and are clamped; anything beyond the
/// tolerance is a genuine violation.
fn sqrtm_psd(m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let scale = m.iter().fold(0.0f64, |acc, v| acc.max(v.abs())).max(1.0);
    let tol = 1e-9 * scale;
    for i in 0..m.nrows() {
        for j in (i + 1)..m.ncols() {
            if (m[(i, j)] - m[(j, i)]).abs() > tol {
                return Err(Error::NotPSD(format!(
                    "asymmetric at ({i},{j}): {} vs {}",
                    m[(i, j)],
                    m[(j, i)]
                )));
            }
        }
    }
    let sym = (m + m.transpose()) * 0.5;
    let eig = nalgebra::SymmetricEigen::new(sym);
    let mut vals = eig.eigenvalues.clone();
    for v in vals.iter_mut() {
        if *v < -tol {
            return Err(Error::NotPSD(format!("negative eigenvalue {v}")));
        }
        *v = v.max(0.0).sqrt();
    }
    let q = &eig.eigenvectors;
    Ok(q * DMatrix::from_diagonal(&vals) * q.transpose())
}

/// Per-participant transport energies across task transitions.
#[derive(Debug, Clone, PartialEq)]
pub struct EnergyTable {
    pub participants: Vec<String>,
    pub transitions: Vec<(Portion, Portion)>,
    /// `energies[[participant, transition]]`.
    pub energies: Array2<f64>,
}

/// Per-solve diagnostics emitted as one JSON object per line.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SolveDiagnostics {
    pub participant: String,
    pub transition: String,
    pub epsilon: f64,
    pub iterations: usize,
    pub marginal_error: f64,
    pub converged: bool,
    pub energy: f64,
}

/// Compute the per-participant energy table of a normalized dataset.
/// Solves are independent and run in parallel; results are deterministic
/// regardless of thread count.
pub fn energy_table(
    dataset: &Dataset,
    transitions: &[(Portion, Portion)],
    cfg: &SBPConfig,
) -> Result<(EnergyTable, Vec<SolveDiagnostics>)> {
    if dataset.space != Space::Normalized {
        return Err(Error::InvalidConfig(
            "energy table expects a normalized dataset".into(),
        ));
    }
    let participants = dataset.participants();
    let jobs: Vec<(usize, usize)> = (0..participants.len())
        .flat_map(|p| (0..transitions.len()).map(move |t| (p, t)))
        .collect();
    let solved: Vec<Result<(f64, SolveDiagnostics)>> = jobs
        .par_iter()
        .map(|&(pi, ti)| {
            let pid = &participants[pi];
            let (from, to) = transitions[ti];
            let p0 = EmpiricalDistribution::uniform(dataset.group(pid, from)?)?;
            let p1 = EmpiricalDistribution::uniform(dataset.group(pid, to)?)?;
            let r = sbp_energy(&p0, &p1, cfg)?;
            let diag = SolveDiagnostics {
                participant: pid.clone(),
                transition: format!("{from}->{to}"),
                epsilon: r.epsilon_used,
                iterations: r.iterations_used,
                marginal_error: r.marginal_error,
                converged: r.converged,
                energy: r.energy,
            };
            Ok((r.energy, diag))
        })
        .collect();

    let mut energies = Array2::zeros((participants.len(), transitions.len()));
    let mut diagnostics = Vec::with_capacity(jobs.len());
    for (&(pi, ti), outcome) in jobs.iter().zip(solved) {
        let (energy, diag) = outcome?;
        energies[[pi, ti]] = energy;
        diagnostics.push(diag);
    }
    Ok((
        EnergyTable {
            participants,
            transitions: transitions.to_vec(),
            energies,
        },
        diagnostics,
    ))
}

impl EnergyTable {
    /// Column of one transition.
    pub fn column(&self, transition: (Portion, Portion)) -> Option<Vec<f64>> {
        let idx = self.transitions.iter().position(|t| *t == transition)?;
        Some(self.energies.column(idx).to_vec())
    }

    /// CSV with header `participant_id,<from>-><to>,...`; floats in full
    /// round-trip precision.
    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut out = std::io::BufWriter::new(
            std::fs::File::create(path).map_err(|e| Error::io(path.display().to_string(), e))?,
        );
        self.write_csv_to(&mut out)
            .map_err(|e| Error::io(path.display().to_string(), e))
    }

    pub fn write_csv_to(&self, out: &mut impl Write) -> std::io::Result<()> {
        write!(out, "participant_id")?;
        for (from, to) in &self.transitions {
            write!(out, ",{from}->{to}")?;
        }
        writeln!(out)?;
        for (i, pid) in self.participants.iter().enumerate() {
            write!(out, "{pid}")?;
            for t in 0..self.transitions.len() {
                write!(out, ",{}", self.energies[[i, t]])?;
            }
            writeln!(out)?;
        }
        Ok(())
    }

    pub fn read_csv(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::io(path.display().to_string(), e))?;
        Self::from_csv_str(&text, &path.display().to_string())
    }

    pub fn from_csv_str(text: &str, origin: &str) -> Result<Self> {
        let mut rows = text
            .lines()
            .map(str::trim)
            .filter(|l| !l.is_empty() && !l.starts_with('#'));
        let header = rows.next().ok_or_else(|| Error::EmptyFile(origin.into()))?;
        let cols: Vec<&str> = header.split(',').map(str::trim).collect();
        if cols.first() != Some(&"participant_id") {
            return Err(Error::MissingColumn("participant_id".into()));
        }
        let mut transitions = Vec::new();
        for c in &cols[1..] {
            let (from, to) = c
                .split_once("->")
                .ok_or_else(|| Error::MissingColumn(format!("transition column, got `{c}`")))?;
            let parse = |s: &str| {
                s.parse::<Portion>().map_err(|label| Error::UnknownPortion {
                    row: 1,
                    label,
                })
            };
            transitions.push((parse(from)?, parse(to)?));
        }
        let mut participants = Vec::new();
        let mut values: Vec<f64> = Vec::new();
        for (lineno, line) in rows.enumerate() {
            let fields: Vec<&str> = line.split(',').map(str::trim).collect();
            if fields.len() != cols.len() {
                return Err(Error::MalformedRow {
                    row: lineno + 2,
                    expected: cols.len(),
                    found: fields.len(),
                });
            }
            participants.push(fields[0].to_string());
            for (j, raw) in fields[1..].iter().enumerate() {
                let v: f64 = raw.parse().unwrap_or(f64::NAN);
                if !v.is_finite() {
                    return Err(Error::NonFiniteValue {
                        row: lineno + 2,
                        column: cols[j + 1].to_string(),
                        value: raw.to_string(),
                    });
                }
                values.push(v);
            }
        }
        if participants.is_empty() {
            return Err(Error::EmptyFile(origin.into()));
        }
        let energies =
            Array2::from_shape_vec((participants.len(), transitions.len()), values)
                .expect("row-major values");
        Ok(EnergyTable {
            participants,
            transitions,
            energies,
        })
    }
}

/// Write solve diagnostics as JSON lines.
pub fn write_diagnostics(diags: &[SolveDiagnostics], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut out = std::io::BufWriter::new(
        std::fs::File::create(path).map_err(|e| Error::io(path.display().to_string(), e))?,
    );
    for d in diags {
        let line = serde_json::to_string(d).expect("diagnostics serialize");
        writeln!(out, "{line}").map_err(|e| Error::io(path.display().to_string(), e))?;
    }
    Ok(())
}

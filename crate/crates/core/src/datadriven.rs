//! Data-driven pipeline: sampling, SAA, out-of-sample evaluation,
//! cross-validated mechanism tuning, the Robustness Index and sign tests.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::conic::{self, Tolerances};
use crate::error::{Error, Result};
use crate::lowerlevel::{build_scenario_program, solve_lower_level, solve_recourse, FirstStage, LowerLevelSolution};
use crate::mechanism::{build_two_point, MechanismParams};
use crate::model::{MomentInfo, ProblemData, ScaleIndex};
use crate::risk::{empirical_risk, RiskSpec};
use crate::tldr::fit_tldr;

/// Derives a 64-bit seed from a master seed and a list of labels, so that
/// every experiment cell owns a stream independent of scheduling order.
pub fn derive_seed(master: u64, labels: &[&str]) -> u64 {
    let mut h = Sha256::new();
    h.update(master.to_le_bytes());
    for l in labels {
        h.update((l.len() as u64).to_le_bytes());
        h.update(l.as_bytes());
    }
    let out = h.finalize();
    let mut bytes = [0u8; 8];
    bytes.copy_from_slice(&out[..8]);
    u64::from_le_bytes(bytes)
}

/// Demand samples, one row per observation.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    samples: DMatrix<f64>,
    pub seed: Option<u64>,
    pub source: String,
}

impl Dataset {
    pub fn new(samples: DMatrix<f64>, source: impl Into<String>) -> Result<Self> {
        if samples.nrows() == 0 {
            return Err(Error::Data("dataset has no samples".into()));
        }
        if let Some(bad) = samples.iter().find(|v| !(**v >= 0.0 && v.is_finite())) {
            return Err(Error::Data(format!("dataset entry {bad} is not a finite nonnegative number")));
        }
        Ok(Dataset { samples, seed: None, source: source.into() })
    }

    pub fn from_rows(rows: &[Vec<f64>], source: impl Into<String>) -> Result<Self> {
        let m = crate::linalg::from_rows(rows, 0).ok_or_else(|| Error::shape("ragged sample rows"))?;
        Dataset::new(m, source)
    }

    pub fn n(&self) -> usize {
        self.samples.nrows()
    }

    pub fn dim(&self) -> usize {
        self.samples.ncols()
    }

    pub fn samples(&self) -> &DMatrix<f64> {
        &self.samples
    }

    pub fn sample(&self, i: usize) -> DVector<f64> {
        self.samples.row(i).transpose()
    }

    /// The rows at `idx`, in that order.
    pub fn subset(&self, idx: &[usize]) -> Result<Dataset> {
        let m = DMatrix::from_fn(idx.len(), self.dim(), |r, c| self.samples[(idx[r], c)]);
        Ok(Dataset { seed: self.seed, source: format!("{} (subset of {})", self.source, idx.len()), ..Dataset::new(m, "")? })
    }
}

/// How negative draws are brought back into the nonnegative orthant.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Truncation {
    /// Componentwise `max(0, ·)`.
    #[default]
    Clamp,
    /// Redraw whole vectors until all coordinates are nonnegative.
    Reject,
}

/// Upper limit on redraws per accepted sample in [`Truncation::Reject`].
const MAX_REJECTIONS: usize = 100_000;

/// `Σ^{1/2} z + μ` with `Σ_ii = σ_i²`, `Σ_ij = ρσ_iσ_j`, truncated at zero.
pub fn generate_truncated_mvn(
    mu: &DVector<f64>,
    sigma: &DVector<f64>,
    rho: f64,
    n: usize,
    seed: u64,
    mode: Truncation,
) -> Result<Dataset> {
    let dim = mu.len();
    if sigma.len() != dim {
        return Err(Error::shape(format!("mu has length {dim}, sigma has length {}", sigma.len())));
    }
    if n == 0 {
        return Err(Error::domain("n must be at least 1"));
    }
    if !(-1.0..=1.0).contains(&rho) {
        return Err(Error::domain(format!("correlation {rho} outside [-1, 1]")));
    }
    if sigma.iter().any(|s| !(*s >= 0.0)) {
        return Err(Error::domain("sigma must be nonnegative"));
    }
    let cov = DMatrix::from_fn(dim, dim, |i, j| if i == j { sigma[i] * sigma[i] } else { rho * sigma[i] * sigma[j] });
    let root = symmetric_sqrt(&cov)?;

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = DMatrix::zeros(n, dim);
    let mut z = DVector::zeros(dim);
    for row in 0..n {
        let mut tries = 0;
        loop {
            for zi in z.iter_mut() {
                *zi = rng.sample(StandardNormal);
            }
            let d = &root * &z + mu;
            let ok = d.iter().all(|v| *v >= 0.0);
            if ok || mode == Truncation::Clamp {
                for c in 0..dim {
                    out[(row, c)] = d[c].max(0.0);
                }
                break;
            }
            tries += 1;
            if tries >= MAX_REJECTIONS {
                return Err(Error::Data(format!("rejection sampling accepted nothing in {MAX_REJECTIONS} draws")));
            }
        }
    }
    let mut ds = Dataset::new(out, format!("truncated normal, rho = {rho}, {mode:?}"))?;
    ds.seed = Some(seed);
    Ok(ds)
}

fn symmetric_sqrt(cov: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let dim = cov.nrows();
    if dim == 0 {
        return Ok(DMatrix::zeros(0, 0));
    }
    let eig = SymmetricEigen::new(cov.clone());
    let scale = eig.eigenvalues.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let mut roots = DVector::zeros(dim);
    for (i, &l) in eig.eigenvalues.iter().enumerate() {
        if l < -1e-10 * scale.max(1.0) {
            return Err(Error::domain(format!("covariance is not positive semidefinite (eigenvalue {l})")));
        }
        roots[i] = l.max(0.0).sqrt();
    }
    let q = &eig.eigenvectors;
    Ok(q * DMatrix::from_diagonal(&roots) * q.transpose())
}

/// Componentwise mean and population (divide-by-n) standard deviation.
pub fn empirical_moments(d: &Dataset) -> MomentInfo {
    let n = d.n() as f64;
    let s = d.samples();
    let mu = DVector::from_fn(d.dim(), |c, _| s.column(c).sum() / n);
    let sigma = DVector::from_fn(d.dim(), |c, _| {
        let m = mu[c];
        (s.column(c).iter().map(|v| (v - m) * (v - m)).sum::<f64>() / n).sqrt()
    });
    MomentInfo::new(mu, sigma).expect("sample moments of nonnegative data are valid")
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SaaSolution {
    #[serde(serialize_with = "ser_vec")]
    pub x: DVector<f64>,
    pub value: f64,
    pub wall_ms: f64,
}

fn ser_vec<S: serde::Serializer>(v: &DVector<f64>, s: S) -> std::result::Result<S::Ok, S::Error> {
    s.collect_seq(v.iter())
}

/// `min cᵀx + ρ(g(x, d̃))` over `x ∈ X(b)` under the empirical law, one LP.
///
/// CVaR enters through the Rockafellar–Uryasev epigraph on equal weights,
/// which is the exact CVaR of the empirical law.
pub fn solve_saa(pd: &ProblemData, d: &Dataset, r: &RiskSpec) -> Result<SaaSolution> {
    if !matches!(r, RiskSpec::Expectation | RiskSpec::Cvar { .. }) {
        return Err(Error::capability(format!("SAA supports Expectation and CVaR, not {r:?}")));
    }
    if d.dim() != pd.dims().n_d {
        return Err(Error::shape(format!("samples have {} columns, N_d = {}", d.dim(), pd.dims().n_d)));
    }
    let rows: Vec<DVector<f64>> = (0..d.n()).map(|i| d.sample(i)).collect();
    let w = 1.0 / d.n() as f64;
    let scenarios: Vec<(f64, &DVector<f64>)> = rows.iter().map(|s| (w, s)).collect();
    let prog = build_scenario_program(pd, FirstStage::Decide { budget: pd.b() }, &scenarios, r)?;
    let res = conic::solve_optimal(&prog.problem, &Tolerances::default())?;
    let x = res.block(&prog.x.expect("decision program")).into_iter().map(|v| v.max(0.0)).collect();
    Ok(SaaSolution { x: DVector::from_vec(x), value: res.objective, wall_ms: res.wall_ms })
}

/// Out-of-sample cost `cᵀx + ρ̂(g(x, d̃))`: one recourse LP per sample, then
/// the empirical risk (CVaR by the ⌈βn⌉-largest rule).
pub fn evaluate_j(pd: &ProblemData, x: &DVector<f64>, d: &Dataset, r: &RiskSpec) -> Result<f64> {
    if x.iter().any(|v| *v < 0.0) {
        return Err(Error::domain("x must be nonnegative"));
    }
    let losses = (0..d.n()).map(|i| Ok(solve_recourse(pd, x, &d.sample(i))?.value)).collect::<Result<Vec<f64>>>()?;
    Ok(pd.c().dot(x) + empirical_risk(r, &losses)?)
}

/// Grid of ratio parameters `(κ, η)` searched by [`cross_validate`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CvGrid {
    pub kappas: Vec<f64>,
    pub etas: Vec<f64>,
}

impl Default for CvGrid {
    /// `{0, 0.05, …, 1}²`.
    fn default() -> Self {
        let axis: Vec<f64> = (0..=20).map(|i| i as f64 / 20.0).collect();
        CvGrid { kappas: axis.clone(), etas: axis }
    }
}

impl CvGrid {
    fn check(&self) -> Result<()> {
        let ok = |v: &[f64]| !v.is_empty() && v.iter().all(|x| (0.0..=1.0).contains(x)) && v.windows(2).all(|w| w[0] < w[1]);
        if ok(&self.kappas) && ok(&self.etas) {
            Ok(())
        } else {
            Err(Error::Config("grid axes must be nonempty, increasing and inside [0, 1]".into()))
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CvResult {
    pub kappa_star: f64,
    pub eta_star: f64,
    pub grid: CvGrid,
    /// `avg_cost[a][b]` is the fold-averaged validation cost at `(kappas[a], etas[b])`.
    pub avg_cost: Vec<Vec<f64>>,
    /// Fold of each training sample, by original row index.
    pub fold_of: Vec<usize>,
}

/// Validation score of one mechanism on one fold: first-stage cost plus the
/// empirical risk of `−pᵀ min{v, U d_ω}` over the validation samples.
fn fold_score(
    pd: &ProblemData,
    train_m: &MomentInfo,
    val: &[DVector<f64>],
    params: &MechanismParams,
    r: &RiskSpec,
) -> Result<f64> {
    let idx = ScaleIndex::unit();
    let d2 = build_two_point(&train_m.mu, params, idx)?;
    let ll = solve_lower_level(pd, &d2, r, idx)?;
    let fit = fit_tldr(pd, &ll.x, &d2, r, idx)?;
    let losses: Vec<f64> = val.iter().map(|d| -pd.p().dot(&fit.policy.apply(d))).collect();
    Ok(pd.c().dot(&ll.x) + empirical_risk(r, &losses)?)
}

/// K-fold cross-validation of `(κ, η)` with ties broken toward the smallest
/// `κ`, then the smallest `η`.
pub fn cross_validate(
    pd: &ProblemData,
    d_tr: &Dataset,
    r: &RiskSpec,
    folds: usize,
    seed: u64,
    grid: &CvGrid,
) -> Result<CvResult> {
    grid.check()?;
    if folds < 2 || d_tr.n() < folds {
        return Err(Error::domain(format!("{folds} folds need at least that many samples (have {})", d_tr.n())));
    }
    let n = d_tr.n();
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut fold_of = vec![0; n];
    for (pos, &i) in order.iter().enumerate() {
        fold_of[i] = pos % folds;
    }

    let (nk, ne) = (grid.kappas.len(), grid.etas.len());
    let mut total = vec![vec![0.0; ne]; nk];
    for f in 0..folds {
        let train_idx: Vec<usize> = (0..n).filter(|&i| fold_of[i] != f).collect();
        let val: Vec<DVector<f64>> = (0..n).filter(|&i| fold_of[i] == f).map(|i| d_tr.sample(i)).collect();
        let m = empirical_moments(&d_tr.subset(&train_idx)?);
        // Every cell with κ = 0, η = 0 or σ̂ = 0 is the same Dirac mechanism.
        let mut dirac_score = None;
        for (a, &kappa) in grid.kappas.iter().enumerate() {
            for (b, &eta) in grid.etas.iter().enumerate() {
                let params = MechanismParams::from_ratio(&m, kappa, eta)?;
                let score = if params.is_dirac() {
                    match dirac_score {
                        Some(s) => s,
                        None => {
                            let s = fold_score(pd, &m, &val, &params, r)?;
                            dirac_score = Some(s);
                            s
                        }
                    }
                } else {
                    fold_score(pd, &m, &val, &params, r)?
                };
                total[a][b] += score;
            }
        }
    }
    let avg_cost: Vec<Vec<f64>> = total.into_iter().map(|row| row.into_iter().map(|t| t / folds as f64).collect()).collect();
    let (mut ba, mut bb) = (0, 0);
    for a in 0..nk {
        for b in 0..ne {
            if avg_cost[a][b] < avg_cost[ba][bb] {
                (ba, bb) = (a, b);
            }
        }
    }
    Ok(CvResult { kappa_star: grid.kappas[ba], eta_star: grid.etas[bb], grid: grid.clone(), avg_cost, fold_of })
}

/// Lower-level solution under the tuned mechanism built from the full
/// training moments.
pub fn solve_tuned(pd: &ProblemData, d_tr: &Dataset, r: &RiskSpec, kappa: f64, eta: f64) -> Result<LowerLevelSolution> {
    let m = empirical_moments(d_tr);
    let params = MechanismParams::from_ratio(&m, kappa, eta)?;
    let d2 = build_two_point(&m.mu, &params, ScaleIndex::unit())?;
    solve_lower_level(pd, &d2, r, ScaleIndex::unit())
}

/// Denominators below this magnitude make the index undefined.
pub const RI_DENOMINATOR_FLOOR: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct RobustnessIndex {
    /// `(J_mech − J_saa) / J*`, NaN when undefined.
    pub value: f64,
    pub defined: bool,
}

pub fn robustness_index(j_mech: f64, j_saa: f64, j_star: f64) -> RobustnessIndex {
    if j_star.abs() < RI_DENOMINATOR_FLOOR || !j_star.is_finite() {
        RobustnessIndex { value: f64::NAN, defined: false }
    } else {
        RobustnessIndex { value: (j_mech - j_saa) / j_star, defined: true }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Direction {
    /// Alternative: the mechanism wins more than half the time.
    Plus,
    /// Alternative: the mechanism wins less than half the time.
    Minus,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SignTest {
    /// Nonzero differences.
    pub n: usize,
    /// Negative differences (mechanism cheaper).
    pub k: usize,
    pub p_value: f64,
}

/// One-sided sign test on `J_mech − J_saa` differences. Exact zeros are
/// dropped; `Plus` gives `P(Bin(n, ½) ≥ k)`, `Minus` gives `P(Bin(n, ½) ≤ k)`.
pub fn sign_test(diffs: &[f64], direction: Direction) -> Result<SignTest> {
    if diffs.iter().any(|d| d.is_nan()) {
        return Err(Error::domain("differences contain NaN"));
    }
    let n = diffs.iter().filter(|d| **d != 0.0).count();
    if n == 0 {
        return Err(Error::domain("sign test undefined: all differences are zero"));
    }
    let k = diffs.iter().filter(|d| **d < 0.0).count();
    let p_value = match direction {
        Direction::Plus => binomial_half_tail(n, k, n),
        Direction::Minus => binomial_half_tail(n, 0, k),
    };
    Ok(SignTest { n, k, p_value })
}

/// `P(lo ≤ Bin(n, ½) ≤ hi)`.
fn binomial_half_tail(n: usize, lo: usize, hi: usize) -> f64 {
    if lo > hi {
        return 0.0;
    }
    if n <= 60 {
        // C(n, i) < 2^60: exact integer sums, one rounding at the end.
        let mut c: u128 = 1;
        let mut sum: u128 = 0;
        for i in 0..=n {
            if (lo..=hi).contains(&i) {
                sum += c;
            }
            c = c * (n - i) as u128 / (i + 1) as u128;
        }
        return sum as f64 / 2f64.powi(n as i32);
    }
    let ln2n = n as f64 * std::f64::consts::LN_2;
    let mut log_c = 0.0f64;
    let mut terms = Vec::with_capacity(hi - lo + 1);
    for i in 0..=hi {
        if i >= lo {
            terms.push(log_c - ln2n);
        }
        log_c += ((n - i) as f64).ln() - ((i + 1) as f64).ln();
    }
    let top = terms.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let s: f64 = terms.iter().map(|t| (t - top).exp()).sum();
    (top + s.ln()).exp().min(1.0)
}

//! Problem data, ambiguity information and scaling.
//!
//! The two-stage model is
//!
//! ```text
//! min_x  cᵀx + ρ( g(x, d̃) ),   x ∈ X(b) = { x ≥ 0 : Gx ≤ b }
//! g(x, d) = min_y { −pᵀy : y ≥ 0, Ay ≤ x, Hy ≤ d }
//! ```
//!
//! Every function in this crate takes *unscaled* data together with a
//! [`ScaleIndex`] and applies the scaling internally.

use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{self, all_nonneg, serde_matrix, serde_vector};

/// Dimensions of a [`ProblemData`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Dims {
    pub n_x: usize,
    pub n_y: usize,
    pub n_d: usize,
    /// Number of budget rows.
    pub k: usize,
}

/// Deterministic data of the two-stage model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawProblem", into = "RawProblem")]
pub struct ProblemData {
    c: DVector<f64>,
    g: DMatrix<f64>,
    b: DVector<f64>,
    p: DVector<f64>,
    a: DMatrix<f64>,
    h: DMatrix<f64>,
}

#[derive(Serialize, Deserialize)]
struct RawProblem {
    #[serde(with = "serde_vector")]
    c: DVector<f64>,
    #[serde(rename = "G", with = "serde_matrix")]
    g: DMatrix<f64>,
    #[serde(with = "serde_vector")]
    b: DVector<f64>,
    #[serde(with = "serde_vector")]
    p: DVector<f64>,
    #[serde(rename = "A", with = "serde_matrix")]
    a: DMatrix<f64>,
    #[serde(rename = "H", with = "serde_matrix")]
    h: DMatrix<f64>,
}

impl TryFrom<RawProblem> for ProblemData {
    type Error = Error;
    fn try_from(r: RawProblem) -> Result<Self> {
        ProblemData::new(r.c, r.g, r.b, r.p, r.a, r.h)
    }
}

impl From<ProblemData> for RawProblem {
    fn from(pd: ProblemData) -> Self {
        RawProblem { c: pd.c, g: pd.g, b: pd.b, p: pd.p, a: pd.a, h: pd.h }
    }
}

impl ProblemData {
    /// Checks shape consistency only; sign and structure checks live in
    /// [`validate_problem`].
    pub fn new(
        c: DVector<f64>,
        g: DMatrix<f64>,
        b: DVector<f64>,
        p: DVector<f64>,
        a: DMatrix<f64>,
        h: DMatrix<f64>,
    ) -> Result<Self> {
        let (n_x, n_y) = (c.len(), p.len());
        let mut bad = Vec::new();
        if g.ncols() != n_x {
            bad.push(format!("G has {} columns, N_x = {n_x}", g.ncols()));
        }
        if g.nrows() != b.len() {
            bad.push(format!("G has {} rows, b has length {}", g.nrows(), b.len()));
        }
        if a.shape() != (n_x, n_y) {
            bad.push(format!("A is {}x{}, expected N_x x N_y = {n_x}x{n_y}", a.nrows(), a.ncols()));
        }
        if h.ncols() != n_y {
            bad.push(format!("H has {} columns, N_y = {n_y}", h.ncols()));
        }
        if !bad.is_empty() {
            return Err(Error::Shape(bad.join("; ")));
        }
        Ok(ProblemData { c, g, b, p, a, h })
    }

    pub fn dims(&self) -> Dims {
        Dims { n_x: self.c.len(), n_y: self.p.len(), n_d: self.h.nrows(), k: self.b.len() }
    }

    pub fn c(&self) -> &DVector<f64> {
        &self.c
    }
    pub fn g(&self) -> &DMatrix<f64> {
        &self.g
    }
    pub fn b(&self) -> &DVector<f64> {
        &self.b
    }
    pub fn p(&self) -> &DVector<f64> {
        &self.p
    }
    pub fn a(&self) -> &DMatrix<f64> {
        &self.a
    }
    pub fn h(&self) -> &DMatrix<f64> {
        &self.h
    }

    /// Same problem with a different budget vector.
    pub fn with_budget(&self, b: DVector<f64>) -> Result<Self> {
        if b.len() != self.g.nrows() {
            return Err(Error::shape(format!(
                "budget has length {}, G has {} rows",
                b.len(),
                self.g.nrows()
            )));
        }
        Ok(ProblemData { b, ..self.clone() })
    }

    pub fn h_is_identity(&self) -> bool {
        linalg::is_identity(&self.h)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CheckOutcome {
    Pass,
    Warn,
    Fail,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Check {
    pub name: String,
    pub outcome: CheckOutcome,
    pub detail: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValidationReport {
    pub checks: Vec<Check>,
}

pub const CHECK_NONNEG: &str = "nonnegativity";
pub const CHECK_A_NONZERO: &str = "A nonzero";
pub const CHECK_H_NONZERO: &str = "H nonzero";
pub const CHECK_H_COLUMNS: &str = "H one nonzero per column";
pub const CHECK_BUDGET: &str = "X(b) nonempty";

impl ValidationReport {
    pub fn outcome(&self, name: &str) -> Option<CheckOutcome> {
        self.checks.iter().find(|c| c.name == name).map(|c| c.outcome)
    }

    /// No check failed (warnings allowed).
    pub fn ok(&self) -> bool {
        self.checks.iter().all(|c| c.outcome != CheckOutcome::Fail)
    }

    pub fn all_pass(&self) -> bool {
        self.checks.iter().all(|c| c.outcome == CheckOutcome::Pass)
    }

    /// Whether the recourse-to-rule construction is available.
    pub fn single_nonzero_columns(&self) -> bool {
        self.outcome(CHECK_H_COLUMNS) == Some(CheckOutcome::Pass)
    }
}

fn check(name: &str, outcome: CheckOutcome, detail: impl Into<String>) -> Check {
    Check { name: name.to_string(), outcome, detail: detail.into() }
}

fn pass_fail(ok: bool) -> CheckOutcome {
    if ok {
        CheckOutcome::Pass
    } else {
        CheckOutcome::Fail
    }
}

/// Structural checks on a shape-consistent problem.
///
/// A column of `H` with more than one nonzero is a warning: the model is still
/// solvable but the recourse-to-rule construction is unavailable. A column with
/// no nonzero leaves the matching recourse variable unconstrained by demand and
/// fails.
pub fn validate_problem(pd: &ProblemData) -> Result<ValidationReport> {
    // Re-run the shape checks; ProblemData::new already enforces them but the
    // report should be self-contained.
    ProblemData::new(pd.c.clone(), pd.g.clone(), pd.b.clone(), pd.p.clone(), pd.a.clone(), pd.h.clone())?;

    let mut checks = Vec::new();
    let mut negatives = Vec::new();
    for (name, ok) in [
        ("c", all_nonneg(pd.c.iter().copied())),
        ("b", all_nonneg(pd.b.iter().copied())),
        ("p", all_nonneg(pd.p.iter().copied())),
        ("A", all_nonneg(pd.a.iter().copied())),
        ("H", all_nonneg(pd.h.iter().copied())),
    ] {
        if !ok {
            negatives.push(name);
        }
    }
    let g_finite = pd.g.iter().all(|v| v.is_finite());
    checks.push(check(
        CHECK_NONNEG,
        pass_fail(negatives.is_empty() && g_finite),
        if negatives.is_empty() && g_finite {
            "all entries finite; c, b, p, A, H nonnegative".to_string()
        } else if !g_finite {
            "G has non-finite entries".to_string()
        } else {
            format!("negative or non-finite entries in {}", negatives.join(", "))
        },
    ));

    let a_nz = pd.a.iter().any(|&v| v != 0.0);
    checks.push(check(CHECK_A_NONZERO, pass_fail(a_nz), if a_nz { "" } else { "A is the zero matrix" }));
    let h_nz = pd.h.iter().any(|&v| v != 0.0);
    checks.push(check(CHECK_H_NONZERO, pass_fail(h_nz), if h_nz { "" } else { "H is the zero matrix" }));

    let mut empty = Vec::new();
    let mut multi = Vec::new();
    for j in 0..pd.h.ncols() {
        match pd.h.column(j).iter().filter(|&&v| v != 0.0).count() {
            0 => empty.push(j),
            1 => {}
            _ => multi.push(j),
        }
    }
    let (outcome, detail) = if !empty.is_empty() {
        (CheckOutcome::Fail, format!("columns without a nonzero entry: {empty:?}"))
    } else if !multi.is_empty() {
        (
            CheckOutcome::Warn,
            format!("columns with more than one nonzero entry: {multi:?}; recourse-to-rule construction disabled"),
        )
    } else {
        (CheckOutcome::Pass, String::new())
    };
    checks.push(check(CHECK_H_COLUMNS, outcome, detail));

    let b_ok = pd.b.iter().all(|&v| v >= 0.0);
    checks.push(check(
        CHECK_BUDGET,
        pass_fail(b_ok),
        if b_ok { "x = 0 is feasible" } else { "b has a negative entry; x = 0 infeasible" },
    ));

    Ok(ValidationReport { checks })
}

/// Mean and marginal standard-deviation bounds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawMoment")]
pub struct MomentInfo {
    #[serde(with = "serde_vector")]
    pub mu: DVector<f64>,
    #[serde(with = "serde_vector")]
    pub sigma: DVector<f64>,
}

#[derive(Deserialize)]
struct RawMoment {
    #[serde(with = "serde_vector")]
    mu: DVector<f64>,
    #[serde(with = "serde_vector")]
    sigma: DVector<f64>,
}

impl TryFrom<RawMoment> for MomentInfo {
    type Error = Error;
    fn try_from(r: RawMoment) -> Result<Self> {
        MomentInfo::new(r.mu, r.sigma)
    }
}

impl MomentInfo {
    pub fn new(mu: DVector<f64>, sigma: DVector<f64>) -> Result<Self> {
        if mu.len() != sigma.len() {
            return Err(Error::shape(format!("mu has length {}, sigma {}", mu.len(), sigma.len())));
        }
        if !all_nonneg(mu.iter().copied()) || !all_nonneg(sigma.iter().copied()) {
            return Err(Error::domain("mu and sigma must be finite and nonnegative"));
        }
        Ok(MomentInfo { mu, sigma })
    }

    pub fn from_slices(mu: &[f64], sigma: &[f64]) -> Result<Self> {
        Self::new(DVector::from_column_slice(mu), DVector::from_column_slice(sigma))
    }

    pub fn len(&self) -> usize {
        self.mu.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mu.is_empty()
    }

    /// Moments at scale `idx`: (kμ, k^{s/2}σ).
    pub fn scaled(&self, idx: ScaleIndex) -> MomentInfo {
        MomentInfo { mu: &self.mu * idx.k, sigma: &self.sigma * idx.spread_factor() }
    }
}

/// Nominal mean, nominal covariance and 2-Wasserstein radius.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawWasserstein")]
pub struct WassersteinInfo {
    #[serde(with = "serde_vector")]
    pub mu_hat: DVector<f64>,
    #[serde(rename = "sigma_hat_matrix", with = "serde_matrix")]
    pub sigma_hat: DMatrix<f64>,
    pub epsilon: f64,
}

#[derive(Deserialize)]
struct RawWasserstein {
    #[serde(with = "serde_vector")]
    mu_hat: DVector<f64>,
    #[serde(with = "serde_matrix")]
    sigma_hat_matrix: DMatrix<f64>,
    epsilon: f64,
}

impl TryFrom<RawWasserstein> for WassersteinInfo {
    type Error = Error;
    fn try_from(r: RawWasserstein) -> Result<Self> {
        WassersteinInfo::new(r.mu_hat, r.sigma_hat_matrix, r.epsilon)
    }
}

const SYMMETRY_TOL: f64 = 1e-10;

impl WassersteinInfo {
    pub fn new(mu_hat: DVector<f64>, sigma_hat: DMatrix<f64>, epsilon: f64) -> Result<Self> {
        let n = mu_hat.len();
        if sigma_hat.shape() != (n, n) {
            return Err(Error::shape(format!(
                "sigma_hat is {}x{}, mu_hat has length {n}",
                sigma_hat.nrows(),
                sigma_hat.ncols()
            )));
        }
        if !all_nonneg(mu_hat.iter().copied()) {
            return Err(Error::domain("mu_hat must be finite and nonnegative"));
        }
        if !(epsilon >= 0.0 && epsilon.is_finite()) {
            return Err(Error::domain(format!("epsilon must be finite and >= 0, got {epsilon}")));
        }
        for i in 0..n {
            if !(sigma_hat[(i, i)] >= 0.0) {
                return Err(Error::domain(format!("sigma_hat[{i},{i}] is negative")));
            }
            for j in 0..i {
                if (sigma_hat[(i, j)] - sigma_hat[(j, i)]).abs() > SYMMETRY_TOL {
                    return Err(Error::domain(format!("sigma_hat not symmetric at ({i},{j})")));
                }
            }
        }
        Ok(WassersteinInfo { mu_hat, sigma_hat, epsilon })
    }

    /// Nominal data at scale `idx`: (kμ̂, k^s Σ̂, k^{s/2} ε).
    pub fn scaled(&self, idx: ScaleIndex) -> WassersteinInfo {
        WassersteinInfo {
            mu_hat: &self.mu_hat * idx.k,
            sigma_hat: &self.sigma_hat * idx.variance_factor(),
            epsilon: self.epsilon * idx.spread_factor(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum AmbiguityInfo {
    Moment(MomentInfo),
    Wasserstein(WassersteinInfo),
}

impl AmbiguityInfo {
    /// Moment description used by every downstream computation. For the
    /// Wasserstein case this is the outer approximation (μ̂, σ̂).
    pub fn moment_bounds(&self) -> MomentInfo {
        match self {
            AmbiguityInfo::Moment(m) => m.clone(),
            AmbiguityInfo::Wasserstein(w) => MomentInfo {
                mu: w.mu_hat.clone(),
                sigma: crate::mechanism::wasserstein_sigma_hat(w),
            },
        }
    }

    pub fn len(&self) -> usize {
        match self {
            AmbiguityInfo::Moment(m) => m.mu.len(),
            AmbiguityInfo::Wasserstein(w) => w.mu_hat.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Scale factor `k ≥ 1` and variance-growth exponent `s ∈ [1, 2)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawScale")]
pub struct ScaleIndex {
    pub k: f64,
    pub s: f64,
}

#[derive(Deserialize)]
struct RawScale {
    k: f64,
    s: f64,
}

impl TryFrom<RawScale> for ScaleIndex {
    type Error = Error;
    fn try_from(r: RawScale) -> Result<Self> {
        ScaleIndex::new(r.k, r.s)
    }
}

impl ScaleIndex {
    pub fn new(k: f64, s: f64) -> Result<Self> {
        if !(k >= 1.0 && k.is_finite()) {
            return Err(Error::domain(format!("scale factor k must be >= 1, got {k}")));
        }
        if !(1.0..2.0).contains(&s) {
            return Err(Error::domain(format!("scale exponent s must lie in [1, 2), got {s}")));
        }
        Ok(ScaleIndex { k, s })
    }

    /// k = 1, s = 1.
    pub fn unit() -> Self {
        ScaleIndex { k: 1.0, s: 1.0 }
    }

    /// k^{s/2}, the growth of standard deviations.
    pub fn spread_factor(&self) -> f64 {
        self.k.powf(self.s / 2.0)
    }

    /// k^s, the growth of variances.
    pub fn variance_factor(&self) -> f64 {
        self.k.powf(self.s)
    }
}

/// Scales ambiguity information and budget: means and budgets by `k`,
/// spreads by `k^{s/2}`.
pub fn apply_scaling(
    info: &AmbiguityInfo,
    b: &DVector<f64>,
    idx: ScaleIndex,
) -> Result<(AmbiguityInfo, DVector<f64>)> {
    // Re-validate: idx may have been built by struct literal.
    let idx = ScaleIndex::new(idx.k, idx.s)?;
    let scaled = match info {
        AmbiguityInfo::Moment(m) => AmbiguityInfo::Moment(m.scaled(idx)),
        AmbiguityInfo::Wasserstein(w) => AmbiguityInfo::Wasserstein(w.scaled(idx)),
    };
    Ok((scaled, b * idx.k))
}

/// Instance file: problem data, ambiguity and free-form metadata.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Instance {
    #[serde(flatten)]
    pub problem: ProblemData,
    pub ambiguity: AmbiguityInfo,
    #[serde(default)]
    pub meta: serde_json::Value,
}

impl Instance {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_json(&text)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let inst: Instance = serde_json::from_str(text)?;
        if inst.ambiguity.len() != inst.problem.dims().n_d {
            return Err(Error::shape(format!(
                "ambiguity has dimension {}, H has {} rows",
                inst.ambiguity.len(),
                inst.problem.dims().n_d
            )));
        }
        Ok(inst)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }
}

//! Experiment drivers: scale sweeps against the rule-based benchmark,
//! robustness runs under correlation shift, sign-test summaries and the
//! LP-versus-SOCP timing comparison.
//!
//! Cells run in parallel; outputs are merged in a fixed cell order and every
//! random stream is derived from the master seed and the cell labels, so the
//! files do not depend on scheduling.

use std::collections::BTreeMap;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::datadriven::{
    cross_validate, derive_seed, evaluate_j, generate_truncated_mvn, robustness_index, sign_test, solve_saa, solve_tuned,
    CvGrid, Dataset, Direction, Truncation,
};
use crate::error::{Error, Result};
use crate::instancegen::{build_parametric_a, default_registry, enumerate_instance_family, resolve, GeneratedInstance, InstanceDescriptor, Structure};
use crate::lowerlevel::{solve_lower_level, solve_v0};
use crate::mechanism::{build_two_point, MechanismParams};
use crate::model::ScaleIndex;
use crate::risk::{standard_coefficient, RiskSpec};
use crate::tldr::{
    analytic_gap_bounds, construct_tldr_from_recourse, evaluate_cost, fit_tldr, solve_tldr_dro, wcr, BoundParams, TldrPolicy,
};

/// Selects instances from the default family. Unset fields do not filter.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InstanceFilter {
    pub structures: Option<Vec<String>>,
    pub budgets: Option<Vec<f64>>,
    pub ids: Option<Vec<String>>,
    /// Keep every `stride`-th instance after the other filters.
    pub stride: usize,
    pub limit: Option<usize>,
}

impl Default for InstanceFilter {
    fn default() -> Self {
        InstanceFilter { structures: None, budgets: None, ids: None, stride: 1, limit: None }
    }
}

impl InstanceFilter {
    pub fn select(&self, registry: &[Structure]) -> Result<Vec<GeneratedInstance>> {
        if self.stride == 0 {
            return Err(Error::Config("stride must be at least 1".into()));
        }
        if let Some(wanted) = &self.structures {
            if let Some(bad) = wanted.iter().find(|w| !registry.iter().any(|s| &s.id == *w)) {
                return Err(Error::Config(format!("unknown structure {bad}")));
            }
        }
        let family = enumerate_instance_family(registry)?;
        if let Some(ids) = &self.ids {
            if let Some(bad) = ids.iter().find(|id| !family.iter().any(|g| &g.id() == *id)) {
                return Err(Error::Config(format!("unknown instance {bad}")));
            }
        }
        let keep = |g: &GeneratedInstance| {
            let d = &g.descriptor;
            self.structures.as_ref().is_none_or(|s| s.contains(&d.structure_id))
                && self.budgets.as_ref().is_none_or(|b| b.contains(&d.budget_multiplier))
                && self.ids.as_ref().is_none_or(|ids| ids.contains(&g.id()))
        };
        let out: Vec<GeneratedInstance> = family
            .into_iter()
            .filter(keep)
            .step_by(self.stride)
            .take(self.limit.unwrap_or(usize::MAX))
            .collect();
        if out.is_empty() {
            return Err(Error::Config("instance filter selects nothing".into()));
        }
        Ok(out)
    }
}

/// First 16 hex digits of the SHA-256 of the serialized config.
fn config_hash<T: Serialize>(cfg: &T) -> Result<String> {
    let digest = Sha256::digest(serde_json::to_vec(cfg)?);
    Ok(digest[..8].iter().map(|b| format!("{b:02x}")).collect())
}

fn in_pool<T: Send>(jobs: usize, f: impl FnOnce() -> T + Send) -> Result<T> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs)
        .build()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    Ok(pool.install(f))
}

/// A cell that did not produce a row.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SkippedCell {
    pub cell: String,
    pub reason: String,
    /// Unsupported input rather than a failure.
    pub capability: bool,
}

impl SkippedCell {
    fn new(cell: String, e: &Error) -> Self {
        SkippedCell { cell, reason: e.to_string(), capability: e.is_capability() }
    }
}

/// The five mechanisms of the scale sweep, as `(κ, η)`.
pub const SWEEP_MECHANISMS: [(f64, f64); 5] = [(0.0, 0.0), (0.5, 0.5), (0.5, 1.0), (1.0, 0.5), (1.0, 1.0)];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepConfig {
    pub master_seed: u64,
    pub filter: InstanceFilter,
    pub ks: Vec<f64>,
    pub s: f64,
    pub mechanisms: Vec<(f64, f64)>,
    /// Worker threads; 0 lets the pool decide. Not part of the config hash.
    pub jobs: usize,
}

impl Default for SweepConfig {
    fn default() -> Self {
        SweepConfig {
            master_seed: 0,
            filter: InstanceFilter::default(),
            ks: (1..=50).map(f64::from).collect(),
            s: 1.0,
            mechanisms: SWEEP_MECHANISMS.to_vec(),
            jobs: 0,
        }
    }
}

impl SweepConfig {
    fn check(&self) -> Result<()> {
        if self.ks.is_empty() || self.mechanisms.is_empty() {
            return Err(Error::Config("k list and mechanism list must be nonempty".into()));
        }
        for &k in &self.ks {
            ScaleIndex::new(k, self.s).map_err(|e| Error::Config(e.to_string()))?;
        }
        for &(kappa, eta) in &self.mechanisms {
            if !(0.0..=1.0).contains(&kappa) || !(0.0..=1.0).contains(&eta) {
                return Err(Error::Config(format!("mechanism ({kappa}, {eta}) outside [0, 1]^2")));
            }
        }
        Ok(())
    }

    fn hash(&self) -> Result<String> {
        config_hash(&SweepConfig { jobs: 0, ..self.clone() })
    }
}

/// One scale-sweep result.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub instance_id: String,
    pub budget_ratio: f64,
    pub kappa: f64,
    pub eta: f64,
    pub k: f64,
    #[serde(rename = "V0")]
    pub v0: f64,
    #[serde(rename = "Vbar")]
    pub vbar: f64,
    #[serde(rename = "C_mech")]
    pub c_mech: f64,
    #[serde(rename = "C_tldr")]
    pub c_tldr: f64,
    pub wcr: f64,
    pub loss_bound: f64,
    pub value_bound: f64,
    pub solve_ms_mech: f64,
    pub solve_ms_tldr: f64,
    /// Whether `C_mech` is exact (always so for expectation risk and `H = I`).
    pub exact: bool,
    pub seed: u64,
    pub config_hash: String,
}

/// Average WCR over instances for one `(budget, mechanism, k)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WcrSummaryRow {
    pub budget_ratio: f64,
    pub kappa: f64,
    pub eta: f64,
    pub k: f64,
    pub n_instances: usize,
    pub avg_wcr: f64,
    pub min_wcr: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepOutcome {
    pub rows: Vec<SweepRow>,
    pub summary: Vec<WcrSummaryRow>,
    pub skipped: Vec<SkippedCell>,
}

/// All mechanisms of one instance at one scale. The rule-based benchmark and
/// `V₀` do not depend on the mechanism and are solved once.
fn sweep_cell(g: &GeneratedInstance, k: f64, cfg: &SweepConfig, hash: &str) -> Vec<std::result::Result<SweepRow, SkippedCell>> {
    let id = g.id();
    let label = |kappa: f64, eta: f64| format!("{id} k={k} mechanism=({kappa}, {eta})");
    let fail_all = |e: Error| cfg.mechanisms.iter().map(|&(a, b)| Err(SkippedCell::new(label(a, b), &e))).collect();
    let pd = &g.problem;
    let m = &g.moments;
    let idx = match ScaleIndex::new(k, cfg.s) {
        Ok(i) => i,
        Err(e) => return fail_all(e),
    };
    let r = RiskSpec::Expectation;
    let shared = (|| {
        let v0 = solve_v0(pd, m, idx)?;
        let tldr = solve_tldr_dro(pd, m, idx)?;
        // Score the benchmark solution with the same evaluator as the
        // mechanisms so that solver error does not favour either side. The
        // conic value stands in when interior-point slack in Av ≤ x makes the
        // rule fail the feasibility check.
        let bench = TldrPolicy { v: tldr.v.clone(), u: nalgebra::DMatrix::identity(pd.dims().n_y, pd.dims().n_d) };
        let c_tldr = evaluate_cost(pd, &tldr.x, &bench, m, idx, &r).map(|c| c.value).unwrap_or(tldr.cost);
        // Rule fitted to the expectation mechanism, reused by every bound.
        let dirac = build_two_point(&m.mu, &MechanismParams::dirac(m.len()), idx)?;
        let u_exp = fit_tldr(pd, &v0.x, &dirac, &r, idx)?.policy.u;
        Ok::<_, Error>((v0, tldr, c_tldr, u_exp))
    })();
    let (v0, tldr, c_tldr, u_exp) = match shared {
        Ok(s) => s,
        Err(e) => return fail_all(e),
    };
    cfg.mechanisms
        .iter()
        .map(|&(kappa, eta)| {
            let one = || {
                let params = MechanismParams::from_ratio(m, kappa, eta)?;
                let d2 = build_two_point(&m.mu, &params, idx)?;
                let ll = solve_lower_level(pd, &d2, &r, idx)?;
                let fit = fit_tldr(pd, &ll.x, &d2, &r, idx)?;
                let cost = evaluate_cost(pd, &ll.x, &fit.policy, m, idx, &r)?;
                let (y_anchor, d_anchor) = match &ll.y_h {
                    Some(y_h) => (y_h, &d2.d_h),
                    None => (&ll.y_l, &d2.d_l),
                };
                let ubar = construct_tldr_from_recourse(y_anchor, d_anchor, pd.h())?.u;
                let bp = BoundParams {
                    alpha: standard_coefficient(&r),
                    idx,
                    tau: params.tau,
                    varsigma: params.varsigma.clone(),
                    sigma: m.sigma.clone(),
                    p: pd.p().clone(),
                };
                let bounds = analytic_gap_bounds(&fit.policy.u, &u_exp, &bp, &ubar)?;
                Ok(SweepRow {
                    instance_id: id.clone(),
                    budget_ratio: g.descriptor.budget_multiplier,
                    kappa,
                    eta,
                    k,
                    v0: v0.value,
                    vbar: fit.vbar,
                    c_mech: cost.value,
                    c_tldr,
                    wcr: wcr(cost.value, c_tldr),
                    loss_bound: bounds.loss_bound,
                    value_bound: bounds.value_bound,
                    solve_ms_mech: ll.wall_ms,
                    solve_ms_tldr: tldr.wall_ms,
                    exact: cost.exact,
                    seed: cfg.master_seed,
                    config_hash: hash.to_string(),
                })
            };
            one().map_err(|e: Error| SkippedCell::new(label(kappa, eta), &e))
        })
        .collect()
}

pub fn run_scale_sweep(cfg: &SweepConfig) -> Result<SweepOutcome> {
    cfg.check()?;
    let instances = cfg.filter.select(&default_registry())?;
    let hash = cfg.hash()?;
    let cells: Vec<(&GeneratedInstance, f64)> = instances.iter().flat_map(|g| cfg.ks.iter().map(move |&k| (g, k))).collect();
    let results: Vec<_> = in_pool(cfg.jobs, || cells.par_iter().map(|&(g, k)| sweep_cell(g, k, cfg, &hash)).collect())?;
    let mut rows = Vec::new();
    let mut skipped = Vec::new();
    for r in results.into_iter().flatten() {
        match r {
            Ok(row) => rows.push(row),
            Err(s) => skipped.push(s),
        }
    }
    let summary = summarize_wcr(&rows, cfg);
    Ok(SweepOutcome { rows, summary, skipped })
}

/// Equal-weight averages in budget, mechanism and `k` order.
pub fn summarize_wcr(rows: &[SweepRow], cfg: &SweepConfig) -> Vec<WcrSummaryRow> {
    let mut budgets: Vec<f64> = rows.iter().map(|r| r.budget_ratio).collect();
    budgets.sort_by(f64::total_cmp);
    budgets.dedup();
    let mut out = Vec::new();
    for &b in &budgets {
        for &(kappa, eta) in &cfg.mechanisms {
            for &k in &cfg.ks {
                let w: Vec<f64> = rows
                    .iter()
                    .filter(|r| r.budget_ratio == b && r.kappa == kappa && r.eta == eta && r.k == k)
                    .map(|r| r.wcr)
                    .collect();
                if w.is_empty() {
                    continue;
                }
                out.push(WcrSummaryRow {
                    budget_ratio: b,
                    kappa,
                    eta,
                    k,
                    n_instances: w.len(),
                    avg_wcr: w.iter().sum::<f64>() / w.len() as f64,
                    min_wcr: w.iter().cloned().fold(f64::INFINITY, f64::min),
                });
            }
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RobustnessConfig {
    pub master_seed: u64,
    pub filter: InstanceFilter,
    pub rho_tr: Vec<f64>,
    pub rho_te: Vec<f64>,
    /// Keep only `ρ_te − ρ_tr` in this list, when set.
    pub shifts: Option<Vec<f64>>,
    pub n_tr: Vec<usize>,
    pub n_te: usize,
    pub folds: usize,
    pub grid: CvGrid,
    pub risk: RiskSpec,
    pub truncation: Truncation,
    /// Worker threads; 0 lets the pool decide. Not part of the config hash.
    pub jobs: usize,
}

impl Default for RobustnessConfig {
    fn default() -> Self {
        RobustnessConfig {
            master_seed: 0,
            filter: InstanceFilter::default(),
            rho_tr: vec![0.0, 1.0],
            rho_te: (0..=10).map(|i| f64::from(i) / 10.0).collect(),
            shifts: None,
            n_tr: vec![100, 200, 400],
            n_te: 1000,
            folds: 5,
            grid: CvGrid::default(),
            risk: RiskSpec::Cvar { beta: 0.05 },
            truncation: Truncation::Clamp,
            jobs: 0,
        }
    }
}

/// Shifts compare on a 1e-9 grid so that `0.3 − 0.1` matches `0.2`.
fn shift_key(x: f64) -> i64 {
    (x * 1e9).round() as i64
}

impl RobustnessConfig {
    fn check(&self) -> Result<()> {
        let rho_ok = |v: &[f64]| !v.is_empty() && v.iter().all(|r| (0.0..=1.0).contains(r));
        if !rho_ok(&self.rho_tr) || !rho_ok(&self.rho_te) {
            return Err(Error::Config("correlation lists must be nonempty and inside [0, 1]".into()));
        }
        if self.n_tr.is_empty() || self.n_tr.iter().any(|&n| n < self.folds) || self.n_te == 0 {
            return Err(Error::Config(format!("sample sizes must be positive and n_tr >= folds = {}", self.folds)));
        }
        if !self.risk.is_optimizable() || !matches!(self.risk, RiskSpec::Expectation | RiskSpec::Cvar { .. }) {
            return Err(Error::capability(format!("robustness runs need Expectation or CVaR, got {:?}", self.risk)));
        }
        Ok(())
    }

    fn keeps(&self, rho_tr: f64, rho_te: f64) -> bool {
        self.shifts.as_ref().is_none_or(|s| s.iter().any(|&x| shift_key(x) == shift_key(rho_te - rho_tr)))
    }

    fn hash(&self) -> Result<String> {
        config_hash(&RobustnessConfig { jobs: 0, ..self.clone() })
    }
}

/// One robustness result. `robustness_index` is NaN when undefined.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RobustnessRow {
    pub instance_id: String,
    pub rho_tr: f64,
    pub rho_te: f64,
    pub n_tr: usize,
    pub seed: u64,
    pub kappa_star: f64,
    pub eta_star: f64,
    #[serde(rename = "J_mech")]
    pub j_mech: f64,
    #[serde(rename = "J_saa")]
    pub j_saa: f64,
    #[serde(rename = "J_star")]
    pub j_star: f64,
    pub robustness_index: f64,
    pub budget_ratio: f64,
    pub config_hash: String,
}

/// One-sided sign tests for one `(n_tr, budget, shift)` cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SignSummaryRow {
    pub n_tr: usize,
    pub budget_ratio: f64,
    pub shift: f64,
    /// Nonzero differences used by the test.
    pub n: usize,
    /// Differences favouring the mechanism.
    pub k: usize,
    pub p_plus: f64,
    pub p_minus: f64,
    /// Rows whose index is undefined; they still enter the test.
    pub undefined_index: usize,
    /// Mean of the defined indices.
    pub mean_index: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RobustnessOutcome {
    pub rows: Vec<RobustnessRow>,
    pub summary: Vec<SignSummaryRow>,
    pub skipped: Vec<SkippedCell>,
}

fn test_seed(master: u64, id: &str, rho_te: f64) -> u64 {
    derive_seed(master, &[id, "test", &format!("{rho_te}")])
}

fn train_seed(master: u64, id: &str, rho_tr: f64, n_tr: usize) -> u64 {
    derive_seed(master, &[id, "train", &format!("{rho_tr}"), &n_tr.to_string()])
}

/// `J* = J(x_SAA(D_te), D_te)` for one test set.
fn oracle_cost(g: &GeneratedInstance, test: &Dataset, r: &RiskSpec) -> Result<f64> {
    let saa = solve_saa(&g.problem, test, r)?;
    evaluate_j(&g.problem, &saa.x, test, r)
}

pub fn run_robustness(cfg: &RobustnessConfig) -> Result<RobustnessOutcome> {
    cfg.check()?;
    let instances = cfg.filter.select(&default_registry())?;
    let hash = cfg.hash()?;
    let r = cfg.risk;
    let rho_te: Vec<f64> =
        cfg.rho_te.iter().copied().filter(|&te| cfg.rho_tr.iter().any(|&tr| cfg.keeps(tr, te))).collect();

    // Test sets and their oracle costs are shared by every training cell.
    let test_cells: Vec<(usize, f64)> = (0..instances.len()).flat_map(|i| rho_te.iter().map(move |&t| (i, t))).collect();
    let tests: Vec<Result<(Dataset, f64)>> = in_pool(cfg.jobs, || {
        test_cells
            .par_iter()
            .map(|&(i, rho)| {
                let g = &instances[i];
                let seed = test_seed(cfg.master_seed, &g.id(), rho);
                let d = generate_truncated_mvn(&g.moments.mu, &g.moments.sigma, rho, cfg.n_te, seed, cfg.truncation)?;
                let j_star = oracle_cost(g, &d, &r)?;
                Ok((d, j_star))
            })
            .collect()
    })?;
    let test_of: BTreeMap<(usize, i64), &Result<(Dataset, f64)>> =
        test_cells.iter().zip(&tests).map(|(&(i, t), res)| ((i, shift_key(t)), res)).collect();

    let train_cells: Vec<(usize, f64, usize)> = (0..instances.len())
        .flat_map(|i| cfg.rho_tr.iter().flat_map(move |&tr| cfg.n_tr.iter().map(move |&n| (i, tr, n))))
        .collect();
    let results: Vec<Vec<std::result::Result<RobustnessRow, SkippedCell>>> = in_pool(cfg.jobs, || {
        train_cells
            .par_iter()
            .map(|&(i, rho_tr, n_tr)| {
                let g = &instances[i];
                let id = g.id();
                let targets: Vec<f64> = rho_te.iter().copied().filter(|&te| cfg.keeps(rho_tr, te)).collect();
                let seed = train_seed(cfg.master_seed, &id, rho_tr, n_tr);
                let label = |te: f64| format!("{id} rho_tr={rho_tr} rho_te={te} n_tr={n_tr}");
                let trained = (|| {
                    let pd = &g.problem;
                    let d_tr = generate_truncated_mvn(&g.moments.mu, &g.moments.sigma, rho_tr, n_tr, seed, cfg.truncation)?;
                    let cv = cross_validate(pd, &d_tr, &r, cfg.folds, derive_seed(seed, &["folds"]), &cfg.grid)?;
                    let mech = solve_tuned(pd, &d_tr, &r, cv.kappa_star, cv.eta_star)?;
                    let saa = solve_saa(pd, &d_tr, &r)?;
                    Ok::<_, Error>((cv, mech.x, saa.x))
                })();
                let (cv, x_mech, x_saa) = match trained {
                    Ok(t) => t,
                    Err(e) => return targets.iter().map(|&te| Err(SkippedCell::new(label(te), &e))).collect(),
                };
                targets
                    .iter()
                    .map(|&te| {
                        let row = (|| {
                            let (test, j_star) = match test_of[&(i, shift_key(te))] {
                                Ok(t) => t,
                                Err(e) => return Err(Error::Data(format!("test set unavailable: {e}"))),
                            };
                            let j_mech = evaluate_j(&g.problem, &x_mech, test, &r)?;
                            let j_saa = evaluate_j(&g.problem, &x_saa, test, &r)?;
                            Ok(RobustnessRow {
                                instance_id: id.clone(),
                                rho_tr,
                                rho_te: te,
                                n_tr,
                                seed,
                                kappa_star: cv.kappa_star,
                                eta_star: cv.eta_star,
                                j_mech,
                                j_saa,
                                j_star: *j_star,
                                robustness_index: robustness_index(j_mech, j_saa, *j_star).value,
                                budget_ratio: g.descriptor.budget_multiplier,
                                config_hash: hash.clone(),
                            })
                        })();
                        row.map_err(|e: Error| SkippedCell::new(label(te), &e))
                    })
                    .collect()
            })
            .collect()
    })?;

    let mut rows = Vec::new();
    let mut skipped = Vec::new();
    for r in results.into_iter().flatten() {
        match r {
            Ok(row) => rows.push(row),
            Err(s) => skipped.push(s),
        }
    }
    let summary = summarize_sign_tests(&rows)?;
    Ok(RobustnessOutcome { rows, summary, skipped })
}

/// Relative size below which `J_mech − J_saa` counts as a tie. Both costs
/// come from interior-point solves, so identical decisions differ by noise.
pub const TIE_TOLERANCE: f64 = 1e-7;

fn tie_snapped(diff: f64, scale: f64) -> f64 {
    if diff.abs() <= TIE_TOLERANCE * scale.abs().max(1.0) {
        0.0
    } else {
        diff
    }
}

/// Groups rows by `(n_tr, budget, ρ_te − ρ_tr)` and runs both one-sided
/// tests on `J_mech − J_saa`, with differences within [`TIE_TOLERANCE`]
/// dropped as ties. Cells made only of ties report NaN p-values.
pub fn summarize_sign_tests(rows: &[RobustnessRow]) -> Result<Vec<SignSummaryRow>> {
    let mut groups: BTreeMap<(usize, i64, i64), Vec<&RobustnessRow>> = BTreeMap::new();
    for r in rows {
        groups.entry((r.n_tr, shift_key(r.budget_ratio), shift_key(r.rho_te - r.rho_tr))).or_default().push(r);
    }
    let mut out = Vec::new();
    for ((n_tr, b, s), rs) in groups {
        let diffs: Vec<f64> = rs.iter().map(|r| tie_snapped(r.j_mech - r.j_saa, r.j_star)).collect();
        let defined: Vec<f64> = rs.iter().map(|r| r.robustness_index).filter(|v| v.is_finite()).collect();
        let (n, k, p_plus, p_minus) = match sign_test(&diffs, Direction::Plus) {
            Ok(plus) => (plus.n, plus.k, plus.p_value, sign_test(&diffs, Direction::Minus)?.p_value),
            Err(Error::Domain(_)) if diffs.iter().all(|d| *d == 0.0) => (0, 0, f64::NAN, f64::NAN),
            Err(e) => return Err(e),
        };
        out.push(SignSummaryRow {
            n_tr,
            budget_ratio: b as f64 / 1e9,
            shift: s as f64 / 1e9,
            n,
            k,
            p_plus,
            p_minus,
            undefined_index: rs.len() - defined.len(),
            mean_index: if defined.is_empty() { f64::NAN } else { defined.iter().sum::<f64>() / defined.len() as f64 },
        });
    }
    Ok(out)
}

/// Median wall times of the two solution paths for one problem size.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimingRow {
    pub n: usize,
    pub instances: usize,
    pub reps: usize,
    pub median_ms_lp: f64,
    pub median_ms_socp: f64,
    pub ratio: f64,
}

fn median(mut xs: Vec<f64>) -> f64 {
    xs.sort_by(f64::total_cmp);
    let n = xs.len();
    if n % 2 == 1 {
        xs[n / 2]
    } else {
        (xs[n / 2 - 1] + xs[n / 2]) / 2.0
    }
}

/// Times the lower-level LP under `mechanism` against the rule-based SOCP on
/// parametric structures of size `N`. Instances cycle through cost, markup
/// and moment variants with the small budget; runs are sequential so the
/// timings do not compete for cores.
pub fn run_timing(ns: &[usize], per_n: usize, reps: usize, mechanism: (f64, f64)) -> Result<Vec<TimingRow>> {
    if per_n == 0 || reps == 0 {
        return Err(Error::Config("timing needs at least one instance and one repetition".into()));
    }
    let idx = ScaleIndex::unit();
    let r = RiskSpec::Expectation;
    let mut out = Vec::new();
    for &n in ns {
        let structure = Structure { id: format!("parametric-{n}"), a: build_parametric_a(n, 2.0)?, exact: true };
        let mut lp = Vec::new();
        let mut socp = Vec::new();
        for i in 0..per_n {
            let d = InstanceDescriptor {
                structure_id: structure.id.clone(),
                cost_variant: (i % 2 + 1) as u8,
                markup_variant: (i / 2 % 4 + 1) as u8,
                moment_variant: (i / 8 % 5 + 1) as u8,
                budget_multiplier: 0.5,
            };
            let g = resolve(&structure, &d)?;
            let params = MechanismParams::from_ratio(&g.moments, mechanism.0, mechanism.1)?;
            let d2 = build_two_point(&g.moments.mu, &params, idx)?;
            for _ in 0..reps {
                lp.push(solve_lower_level(&g.problem, &d2, &r, idx)?.wall_ms);
                socp.push(solve_tldr_dro(&g.problem, &g.moments, idx)?.wall_ms);
            }
        }
        let (median_ms_lp, median_ms_socp) = (median(lp), median(socp));
        out.push(TimingRow { n, instances: per_n, reps, median_ms_lp, median_ms_socp, ratio: median_ms_socp / median_ms_lp });
    }
    Ok(out)
}

/// Out-of-sample comparison on one ingested sales split at one budget.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RealDataRow {
    pub budget_ratio: f64,
    pub n_tr: usize,
    pub n_te: usize,
    pub seed: u64,
    pub kappa_star: f64,
    pub eta_star: f64,
    #[serde(rename = "J_mech")]
    pub j_mech: f64,
    #[serde(rename = "J_saa")]
    pub j_saa: f64,
    /// `(J_saa − J_mech) / |J_saa|`; positive when the mechanism is cheaper.
    pub improvement: f64,
}

/// Tunes the mechanism on the training days, solves SAA, and scores both on
/// the test days, for each budget multiple of `cᵀAμ̂_tr`.
pub fn run_real_data(
    split: &crate::instancegen::SalesSplit,
    budgets: &[f64],
    r: &RiskSpec,
    folds: usize,
    grid: &CvGrid,
    seed: u64,
) -> Result<Vec<RealDataRow>> {
    let unit = split.problem.b()[0];
    budgets
        .iter()
        .map(|&bm| {
            let pd = split.problem.with_budget(nalgebra::DVector::from_element(1, bm * unit))?;
            let cv = cross_validate(&pd, &split.train, r, folds, derive_seed(seed, &["folds", &format!("{bm}")]), grid)?;
            let mech = solve_tuned(&pd, &split.train, r, cv.kappa_star, cv.eta_star)?;
            let saa = solve_saa(&pd, &split.train, r)?;
            let j_mech = evaluate_j(&pd, &mech.x, &split.test, r)?;
            let j_saa = evaluate_j(&pd, &saa.x, &split.test, r)?;
            Ok(RealDataRow {
                budget_ratio: bm,
                n_tr: split.train.n(),
                n_te: split.test.n(),
                seed,
                kappa_star: cv.kappa_star,
                eta_star: cv.eta_star,
                j_mech,
                j_saa,
                improvement: (j_saa - j_mech) / j_saa.abs(),
            })
        })
        .collect()
}

pub fn write_csv<T: Serialize>(path: impl AsRef<Path>, rows: &[T]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_csv<T: for<'de> Deserialize<'de>>(path: impl AsRef<Path>) -> Result<Vec<T>> {
    let mut rdr = csv::Reader::from_path(path)?;
    rdr.deserialize()
        .map(|r| {
            r.map_err(|e| Error::Parse { line: e.position().map_or(0, |p| p.line()), detail: e.to_string() })
        })
        .collect()
}

/// Mean of `xs`; used by summaries and by callers recomputing them.
pub fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn small_filter() -> InstanceFilter {
        InstanceFilter {
            structures: Some(vec!["identity-2".into(), "w-3".into()]),
            budgets: Some(vec![0.5]),
            stride: 7,
            ..InstanceFilter::default()
        }
    }

    #[test]
    fn filter_selects_and_rejects() {
        let reg = default_registry();
        let f = small_filter();
        let sel = f.select(&reg).unwrap();
        // 2 structures × 40 small-budget instances, every 7th.
        assert_eq!(sel.len(), 12);
        assert!(sel.iter().all(|g| g.descriptor.budget_multiplier == 0.5));
        let bad = InstanceFilter { ids: Some(vec!["nope".into()]), ..InstanceFilter::default() };
        assert!(matches!(bad.select(&reg), Err(Error::Config(_))));
        let none = InstanceFilter { budgets: Some(vec![7.0]), ..InstanceFilter::default() };
        assert!(none.select(&reg).is_err());
    }

    #[test]
    fn sweep_rows_obey_the_chain() {
        let cfg = SweepConfig {
            filter: InstanceFilter { limit: Some(3), ..small_filter() },
            ks: vec![1.0, 4.0],
            ..SweepConfig::default()
        };
        let out = run_scale_sweep(&cfg).unwrap();
        assert!(out.skipped.is_empty(), "{:?}", out.skipped);
        assert_eq!(out.rows.len(), 3 * 2 * 5);
        for r in &out.rows {
            let tol = 1e-6 * r.v0.abs().max(1.0);
            assert!(r.v0 <= r.vbar + tol && r.vbar <= r.c_mech + tol, "{r:?}");
            assert!(r.c_mech - r.v0 <= r.loss_bound + r.value_bound + tol, "{r:?}");
            assert!(r.wcr <= 1.0 + 1e-9 && r.exact, "{r:?}");
        }
        assert_eq!(out.summary.len(), 5 * 2);
        let first = &out.summary[0];
        let manual: Vec<f64> = out.rows.iter().filter(|r| r.kappa == 0.0 && r.eta == 0.0 && r.k == 1.0).map(|r| r.wcr).collect();
        assert_abs_diff_eq!(first.avg_wcr, mean(&manual), epsilon = 1e-15);
        // Timing columns aside, reruns agree and thread count does not matter.
        let again = run_scale_sweep(&SweepConfig { jobs: 1, ..cfg.clone() }).unwrap();
        let strip = |rows: &[SweepRow]| rows.iter().map(|r| SweepRow { solve_ms_mech: 0.0, solve_ms_tldr: 0.0, ..r.clone() }).collect::<Vec<_>>();
        assert_eq!(strip(&out.rows), strip(&again.rows));
    }

    #[test]
    fn zero_variance_dirac_has_unit_wcr() {
        let reg = vec![Structure { id: "one".into(), a: nalgebra::DMatrix::identity(1, 1), exact: false }];
        let mut g = enumerate_instance_family(&reg).unwrap().remove(0);
        g.moments.sigma[0] = 0.0;
        let cfg = SweepConfig { ks: vec![1.0], mechanisms: vec![(0.0, 0.0)], ..SweepConfig::default() };
        let row = sweep_cell(&g, 1.0, &cfg, "h").remove(0).unwrap();
        // Both sides are interior-point optima of the same LP; equality holds to solver accuracy.
        assert_abs_diff_eq!(row.wcr, 1.0, epsilon = 1e-8);
    }

    #[test]
    fn bad_configs() {
        let cfg = SweepConfig { ks: vec![0.5], ..SweepConfig::default() };
        assert!(matches!(run_scale_sweep(&cfg), Err(Error::Config(_))));
        let cfg = SweepConfig { mechanisms: vec![(1.5, 0.0)], ..SweepConfig::default() };
        assert!(run_scale_sweep(&cfg).is_err());
        let rc = RobustnessConfig { risk: RiskSpec::Var { beta: 0.1 }, ..RobustnessConfig::default() };
        assert!(run_robustness(&rc).unwrap_err().is_capability());
    }

    fn tiny_robustness() -> RobustnessConfig {
        RobustnessConfig {
            master_seed: 17,
            filter: InstanceFilter { limit: Some(2), ..small_filter() },
            rho_tr: vec![0.0, 1.0],
            rho_te: vec![0.0, 1.0],
            shifts: Some(vec![0.0, 1.0]),
            n_tr: vec![20],
            n_te: 50,
            grid: CvGrid { kappas: vec![0.0, 1.0], etas: vec![0.0, 1.0] },
            ..RobustnessConfig::default()
        }
    }

    #[test]
    fn robustness_rows_and_summary() {
        let cfg = tiny_robustness();
        let out = run_robustness(&cfg).unwrap();
        assert!(out.skipped.is_empty(), "{:?}", out.skipped);
        // Per instance: (0,0), (0,1), (1,1).
        assert_eq!(out.rows.len(), 2 * 3);
        for r in &out.rows {
            // J* optimizes the test objective, so neither method beats it.
            let tol = 1e-6 * r.j_star.abs().max(1.0);
            assert!(r.j_star <= r.j_mech + tol && r.j_star <= r.j_saa + tol, "{r:?}");
        }
        let shifts: Vec<f64> = out.summary.iter().map(|s| s.shift).collect();
        assert_eq!(shifts, [0.0, 1.0]);
        assert!(out.summary.iter().map(|s| s.n).sum::<usize>() <= 6);
        assert_eq!(out.rows, run_robustness(&RobustnessConfig { jobs: 1, ..cfg }).unwrap().rows);
    }

    #[test]
    fn csv_roundtrip_and_resummary() {
        let out = run_robustness(&tiny_robustness()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("rob.csv");
        write_csv(&path, &out.rows).unwrap();
        let back: Vec<RobustnessRow> = read_csv(&path).unwrap();
        assert_eq!(back.len(), out.rows.len());
        assert_eq!(summarize_sign_tests(&back).unwrap(), out.summary);
        let header = std::fs::read_to_string(&path).unwrap().lines().next().unwrap().to_string();
        assert!(header.starts_with(
            "instance_id,rho_tr,rho_te,n_tr,seed,kappa_star,eta_star,J_mech,J_saa,J_star,robustness_index"
        ));
    }

    #[test]
    fn sign_summary_examples() {
        let row = |d: f64, shift: f64| RobustnessRow {
            instance_id: "i".into(),
            rho_tr: 0.0,
            rho_te: shift,
            n_tr: 100,
            seed: 0,
            kappa_star: 0.0,
            eta_star: 0.0,
            j_mech: d,
            j_saa: 0.0,
            j_star: -1.0,
            robustness_index: -d,
            budget_ratio: 0.5,
            config_hash: String::new(),
        };
        let mut rows: Vec<RobustnessRow> = (0..8).map(|_| row(-1.0, 0.3)).collect();
        rows.extend([row(1.0, 0.3), row(2.0, 0.3), row(0.0, 0.3), row(3e-10, 0.3), row(0.0, 0.1)]);
        let s = summarize_sign_tests(&rows).unwrap();
        assert_eq!(s.len(), 2);
        assert!(s[0].p_plus.is_nan() && s[0].shift == 0.1);
        assert_eq!((s[1].n, s[1].k), (10, 8));
        assert_eq!(s[1].p_plus, 56.0 / 1024.0);
    }

    #[test]
    fn timing_rows_are_well_formed() {
        let t = run_timing(&[10], 2, 1, (1.0, 0.5)).unwrap();
        assert_eq!(t.len(), 1);
        assert!(t[0].median_ms_lp > 0.0 && t[0].median_ms_socp > 0.0);
        assert_eq!(median(vec![3.0, 1.0, 2.0, 10.0]), 2.5);
    }
}

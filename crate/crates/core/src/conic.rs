//! Linear and second-order-cone programs behind a narrow interface.
//!
//! Problems are assembled from variable blocks (free, nonnegative, or a
//! second-order cone whose first coordinate is the radius), sparse linear rows
//! and optional cone constraints on affine expressions. The backend is
//! Clarabel; residuals and cone violations are recomputed here so that an
//! `Optimal` status always means the returned point passed our own check.

use std::fmt::Write as _;
use std::time::Instant;

use clarabel::algebra::CscMatrix;
use clarabel::solver::{
    DefaultSettingsBuilder, DefaultSolver, IPSolver, SolverStatus, SupportedConeT,
};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum BlockKind {
    Free,
    Nonneg,
    /// Second-order cone `{(t, u) : ‖u‖ ≤ t}` over the block's coordinates.
    SecondOrder,
}

/// Contiguous run of variables.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Block {
    pub start: usize,
    pub len: usize,
    pub kind: BlockKind,
}

impl Block {
    /// Global index of the `i`-th variable in the block.
    pub fn at(&self, i: usize) -> usize {
        debug_assert!(i < self.len);
        self.start + i
    }

    pub fn indices(&self) -> std::ops::Range<usize> {
        self.start..self.start + self.len
    }
}

/// Affine expression `Σ coef·x_i + constant`.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Affine {
    pub terms: Vec<(usize, f64)>,
    pub constant: f64,
}

impl Affine {
    pub fn new(terms: Vec<(usize, f64)>, constant: f64) -> Self {
        Affine { terms, constant }
    }

    fn eval(&self, x: &[f64]) -> f64 {
        self.terms.iter().map(|&(i, c)| c * x[i]).sum::<f64>() + self.constant
    }

    fn magnitude(&self, x: &[f64]) -> f64 {
        self.terms
            .iter()
            .map(|&(i, c)| (c * x[i]).abs())
            .fold(self.constant.abs(), f64::max)
    }
}

#[derive(Debug, Clone, PartialEq)]
struct Row {
    terms: Vec<(usize, f64)>,
    rhs: f64,
}

/// `min costᵀx + offset` subject to equality rows, `≤` rows, block cones and
/// affine second-order cone constraints.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ConicProblem {
    n: usize,
    blocks: Vec<Block>,
    cost: Vec<f64>,
    offset: f64,
    eq: Vec<Row>,
    le: Vec<Row>,
    socs: Vec<Vec<Affine>>,
}

impl ConicProblem {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn num_vars(&self) -> usize {
        self.n
    }

    pub fn num_eq(&self) -> usize {
        self.eq.len()
    }

    pub fn num_le(&self) -> usize {
        self.le.len()
    }

    fn add_block(&mut self, len: usize, kind: BlockKind) -> Block {
        let b = Block { start: self.n, len, kind };
        self.n += len;
        self.cost.resize(self.n, 0.0);
        self.blocks.push(b);
        b
    }

    pub fn add_free(&mut self, len: usize) -> Block {
        self.add_block(len, BlockKind::Free)
    }

    pub fn add_nonneg(&mut self, len: usize) -> Block {
        self.add_block(len, BlockKind::Nonneg)
    }

    /// A second-order cone block of the given width (≥ 1).
    pub fn add_soc(&mut self, width: usize) -> Block {
        assert!(width >= 1, "second-order cone needs at least one coordinate");
        self.add_block(width, BlockKind::SecondOrder)
    }

    pub fn add_cost(&mut self, var: usize, coef: f64) {
        self.cost[var] += coef;
    }

    pub fn add_offset(&mut self, v: f64) {
        self.offset += v;
    }

    pub fn add_eq(&mut self, terms: impl IntoIterator<Item = (usize, f64)>, rhs: f64) {
        self.eq.push(Row { terms: terms.into_iter().collect(), rhs });
    }

    /// `Σ terms ≤ rhs`.
    pub fn add_le(&mut self, terms: impl IntoIterator<Item = (usize, f64)>, rhs: f64) {
        self.le.push(Row { terms: terms.into_iter().collect(), rhs });
    }

    /// `Σ terms ≥ rhs`.
    pub fn add_ge(&mut self, terms: impl IntoIterator<Item = (usize, f64)>, rhs: f64) {
        self.add_le(terms.into_iter().map(|(i, c)| (i, -c)), -rhs);
    }

    /// `(e_0, e_1, …)` in the second-order cone: `‖(e_1, …)‖ ≤ e_0`.
    pub fn add_soc_constraint(&mut self, exprs: Vec<Affine>) {
        assert!(!exprs.is_empty(), "empty cone constraint");
        self.socs.push(exprs);
    }

    fn check_well_formed(&self) -> Result<()> {
        let bad_term = |t: &[(usize, f64)]| t.iter().any(|&(i, c)| i >= self.n || !c.is_finite());
        if self.cost.iter().any(|c| !c.is_finite()) || !self.offset.is_finite() {
            return Err(Error::domain("non-finite objective coefficient"));
        }
        for (kind, rows) in [("equality", &self.eq), ("inequality", &self.le)] {
            for (r, row) in rows.iter().enumerate() {
                if bad_term(&row.terms) || !row.rhs.is_finite() {
                    return Err(Error::shape(format!("{kind} row {r} has a bad index or coefficient")));
                }
            }
        }
        for (k, cone) in self.socs.iter().enumerate() {
            if cone.iter().any(|e| bad_term(&e.terms) || !e.constant.is_finite()) {
                return Err(Error::shape(format!("cone constraint {k} has a bad index or coefficient")));
            }
        }
        Ok(())
    }

    /// Plain-text standard form for cross-checking with external solvers.
    ///
    /// ```text
    /// vars <n>
    /// block <free|nonneg|soc> <start> <len>
    /// obj <offset> <i>:<coef> ...
    /// eq <rhs> <i>:<coef> ...
    /// le <rhs> <i>:<coef> ...
    /// soc <const>|<i>:<coef>,... ; ...
    /// ```
    pub fn to_standard_form(&self) -> String {
        let mut out = String::new();
        let terms = |t: &[(usize, f64)]| t.iter().map(|(i, c)| format!("{i}:{c:e}")).collect::<Vec<_>>().join(" ");
        let _ = writeln!(out, "vars {}", self.n);
        for b in &self.blocks {
            let kind = match b.kind {
                BlockKind::Free => "free",
                BlockKind::Nonneg => "nonneg",
                BlockKind::SecondOrder => "soc",
            };
            let _ = writeln!(out, "block {kind} {} {}", b.start, b.len);
        }
        let obj: Vec<(usize, f64)> =
            self.cost.iter().enumerate().filter(|(_, c)| **c != 0.0).map(|(i, c)| (i, *c)).collect();
        let _ = writeln!(out, "obj {:e} {}", self.offset, terms(&obj));
        for r in &self.eq {
            let _ = writeln!(out, "eq {:e} {}", r.rhs, terms(&r.terms));
        }
        for r in &self.le {
            let _ = writeln!(out, "le {:e} {}", r.rhs, terms(&r.terms));
        }
        for cone in &self.socs {
            let parts: Vec<String> = cone
                .iter()
                .map(|e| {
                    let mut s = format!("{:e}", e.constant);
                    for (i, c) in &e.terms {
                        let _ = write!(s, ",{i}:{c:e}");
                    }
                    s
                })
                .collect();
            let _ = writeln!(out, "soc {}", parts.join(" ; "));
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Tolerances {
    /// Relative optimality gap.
    pub rel_gap: f64,
    /// Absolute optimality gap.
    pub abs_gap: f64,
    /// Scaled primal feasibility and cone violation.
    pub feas: f64,
    pub max_iter: u32,
}

impl Default for Tolerances {
    fn default() -> Self {
        Tolerances { rel_gap: 1e-9, abs_gap: 1e-9, feas: 1e-8, max_iter: 200 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SolveStatus {
    Optimal,
    Infeasible,
    Unbounded,
    NumericFailure,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SolveResult {
    pub status: SolveStatus,
    pub x: Vec<f64>,
    pub objective: f64,
    /// Largest scaled violation of an equality or `≤` row.
    pub primal_residual: f64,
    /// Largest scaled violation of a nonnegativity or second-order cone.
    pub cone_violation: f64,
    pub iterations: u32,
    /// Backend status string, kept for diagnostics.
    pub backend_status: String,
    pub wall_ms: f64,
}

impl SolveResult {
    pub fn block(&self, b: &Block) -> Vec<f64> {
        self.x[b.indices()].to_vec()
    }

    fn into_checked(self) -> Result<SolveResult> {
        if self.status == SolveStatus::Optimal {
            Ok(self)
        } else {
            Err(Error::Solver {
                status: self.status,
                detail: format!(
                    "backend status {}, residual {:.2e}, cone violation {:.2e}",
                    self.backend_status, self.primal_residual, self.cone_violation
                ),
            })
        }
    }
}

/// The backend measures feasibility on its equilibrated copy of the problem,
/// so a solution it calls solved can miss `feas` by a small factor in the
/// original units. Our own check allows that factor and nothing more.
pub const VERIFY_SLACK: f64 = 10.0;

/// Scaled violation: absolute violation divided by `max(1, magnitude)`.
fn scaled(viol: f64, magnitude: f64) -> f64 {
    viol.max(0.0) / magnitude.max(1.0)
}

fn merge_terms(terms: &[(usize, f64)]) -> Vec<(usize, f64)> {
    let mut t = terms.to_vec();
    t.sort_by_key(|&(i, _)| i);
    let mut out: Vec<(usize, f64)> = Vec::with_capacity(t.len());
    for (i, c) in t {
        match out.last_mut() {
            Some((j, acc)) if *j == i => *acc += c,
            _ => out.push((i, c)),
        }
    }
    out.retain(|&(_, c)| c != 0.0);
    out
}

fn dot(terms: &[(usize, f64)], x: &[f64]) -> f64 {
    terms.iter().map(|&(i, c)| c * x[i]).sum()
}

fn measure(p: &ConicProblem, x: &[f64]) -> (f64, f64) {
    // Violations are judged against the overall scale of the data and the
    // iterate, as interior-point methods stop with errors of size tol·scale.
    // The scale is ‖x‖∞ + ‖s‖∞ + ‖b‖∞ with s the row slacks, the same form
    // the backend uses.
    let consts = p.le.iter().chain(&p.eq).map(|r| r.rhs.abs());
    let consts = consts.chain(p.socs.iter().flatten().map(|e| e.constant.abs()));
    let bnorm = consts.fold(0.0f64, f64::max);
    let row_slack = p.le.iter().map(|r| (r.rhs - dot(&r.terms, x)).abs());
    let cone_slack = p.socs.iter().flatten().map(|e| e.eval(x).abs());
    let snorm = row_slack.chain(cone_slack).fold(0.0f64, f64::max);
    let xnorm = (x.iter().map(|v| v.abs()).fold(0.0f64, f64::max) + snorm + bnorm).max(1.0);
    let mut res: f64 = 0.0;
    for r in &p.eq {
        let a = Affine::new(r.terms.clone(), -r.rhs);
        res = res.max(scaled(a.eval(x).abs(), a.magnitude(x).max(xnorm)));
    }
    for r in &p.le {
        let a = Affine::new(r.terms.clone(), -r.rhs);
        res = res.max(scaled(a.eval(x), a.magnitude(x).max(xnorm)));
    }
    let mut cone: f64 = 0.0;
    for b in &p.blocks {
        let xs = &x[b.indices()];
        match b.kind {
            BlockKind::Free => {}
            BlockKind::Nonneg => {
                for &v in xs {
                    cone = cone.max(-v / xnorm);
                }
            }
            BlockKind::SecondOrder => {
                let tail = xs[1..].iter().map(|v| v * v).sum::<f64>().sqrt();
                cone = cone.max((tail - xs[0]) / xnorm);
            }
        }
    }
    for c in &p.socs {
        let vals: Vec<f64> = c.iter().map(|e| e.eval(x)).collect();
        let mag = c.iter().map(|e| e.magnitude(x)).fold(0.0, f64::max);
        let tail = vals[1..].iter().map(|v| v * v).sum::<f64>().sqrt();
        cone = cone.max(scaled(tail - vals[0], mag.max(xnorm)));
    }
    (res, cone)
}

/// Solves the problem. Statuses other than `Optimal` are reported, not
/// raised; use [`solve_optimal`] to turn them into errors.
pub fn solve(p: &ConicProblem, tol: &Tolerances) -> Result<SolveResult> {
    p.check_well_formed()?;
    let start = Instant::now();
    let n = p.n;

    // Row layout: equalities | ≤ rows and nonneg variables | SOC blocks | SOC constraints.
    let mut rows: Vec<usize> = Vec::new();
    let mut cols: Vec<usize> = Vec::new();
    let mut vals: Vec<f64> = Vec::new();
    let mut rhs: Vec<f64> = Vec::new();
    let mut push_row = |terms: &[(usize, f64)], sign: f64, b: f64, rows: &mut Vec<usize>| {
        let r = rhs.len();
        for (i, c) in merge_terms(terms) {
            rows.push(r);
            cols.push(i);
            vals.push(sign * c);
        }
        rhs.push(b);
    };
    for r in &p.eq {
        push_row(&r.terms, 1.0, r.rhs, &mut rows);
    }
    let mut cones = Vec::new();
    if !p.eq.is_empty() {
        cones.push(SupportedConeT::ZeroConeT(p.eq.len()));
    }
    let mut nonneg = 0;
    for r in &p.le {
        push_row(&r.terms, 1.0, r.rhs, &mut rows);
        nonneg += 1;
    }
    for b in p.blocks.iter().filter(|b| b.kind == BlockKind::Nonneg) {
        for i in b.indices() {
            push_row(&[(i, 1.0)], -1.0, 0.0, &mut rows);
            nonneg += 1;
        }
    }
    if nonneg > 0 {
        cones.push(SupportedConeT::NonnegativeConeT(nonneg));
    }
    for b in p.blocks.iter().filter(|b| b.kind == BlockKind::SecondOrder) {
        for i in b.indices() {
            push_row(&[(i, 1.0)], -1.0, 0.0, &mut rows);
        }
        cones.push(SupportedConeT::SecondOrderConeT(b.len));
    }
    for c in &p.socs {
        for e in c {
            // s = e(x)  ⇔  −aᵀx + s = constant
            push_row(&e.terms, -1.0, e.constant, &mut rows);
        }
        cones.push(SupportedConeT::SecondOrderConeT(c.len()));
    }
    let m = rhs.len();

    if n == 0 {
        // Nothing to optimize; feasibility is decided by the constants alone.
        let (res, cone) = measure(p, &[]);
        let ok = res <= tol.feas && cone <= tol.feas;
        return Ok(SolveResult {
            status: if ok { SolveStatus::Optimal } else { SolveStatus::Infeasible },
            x: vec![],
            objective: p.offset,
            primal_residual: res,
            cone_violation: cone,
            iterations: 0,
            backend_status: "trivial".into(),
            wall_ms: start.elapsed().as_secs_f64() * 1e3,
        });
    }

    let a = CscMatrix::new_from_triplets(m, n, rows, cols, vals);
    let pmat = CscMatrix::<f64>::zeros((n, n));
    // The backend first runs with a 100x safety margin on every tolerance,
    // then 10x, then none, and finally with heavier iterative refinement.
    // Later runs only happen when an earlier one stalls (regularization noise
    // on tiny residuals) and are accepted when our own checks pass.
    let mut last = None;
    let mut iterations = 0;
    for (margin, refine) in [(0.01, false), (0.1, false), (1.0, false), (1.0, true)] {
        let mut builder = DefaultSettingsBuilder::default();
        if refine {
            builder
                .iterative_refinement_reltol(1e-15)
                .iterative_refinement_abstol(1e-15)
                .iterative_refinement_max_iter(50)
                .static_regularization_constant(1e-10);
        }
        let settings = builder
            .verbose(std::env::var_os("DDRO_SOLVER_VERBOSE").is_some())
            .max_iter(tol.max_iter)
            .tol_gap_rel(tol.rel_gap * margin)
            .tol_gap_abs(tol.abs_gap * margin)
            .tol_feas(tol.feas * margin)
            .build()
            .map_err(|e| Error::Solver { status: SolveStatus::NumericFailure, detail: format!("settings: {e:?}") })?;
        let mut solver = DefaultSolver::new(&pmat, &p.cost, &a, &rhs, &cones, settings)
            .map_err(|e| Error::Solver { status: SolveStatus::NumericFailure, detail: format!("setup: {e:?}") })?;
        solver.solve();
        let sol = &solver.solution;
        iterations += sol.iterations;
        let x = sol.x.clone();
        let (primal_residual, cone_violation) = if x.iter().all(|v| v.is_finite()) {
            measure(p, &x)
        } else {
            (f64::INFINITY, f64::INFINITY)
        };
        let status = match sol.status {
            SolverStatus::Solved | SolverStatus::AlmostSolved => {
                let limit = tol.feas * VERIFY_SLACK;
                if primal_residual <= limit && cone_violation <= limit {
                    SolveStatus::Optimal
                } else {
                    SolveStatus::NumericFailure
                }
            }
            SolverStatus::PrimalInfeasible | SolverStatus::AlmostPrimalInfeasible => SolveStatus::Infeasible,
            SolverStatus::DualInfeasible | SolverStatus::AlmostDualInfeasible => SolveStatus::Unbounded,
            _ => SolveStatus::NumericFailure,
        };
        let done = status != SolveStatus::NumericFailure;
        last = Some((status, x, primal_residual, cone_violation, format!("{:?}", sol.status)));
        if done {
            break;
        }
    }
    let (status, x, primal_residual, cone_violation, backend_status) = last.expect("at least one attempt");
    let objective = p.cost.iter().zip(&x).map(|(c, v)| c * v).sum::<f64>() + p.offset;
    Ok(SolveResult {
        status,
        x,
        objective,
        primal_residual,
        cone_violation,
        iterations,
        backend_status,
        wall_ms: start.elapsed().as_secs_f64() * 1e3,
    })
}

/// Like [`solve`], but anything other than a certified optimum is an error.
pub fn solve_optimal(p: &ConicProblem, tol: &Tolerances) -> Result<SolveResult> {
    solve(p, tol)?.into_checked()
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    fn tol() -> Tolerances {
        Tolerances::default()
    }

    #[test]
    fn one_variable_lp() {
        let mut p = ConicProblem::new();
        let x = p.add_free(1);
        p.add_cost(x.at(0), 1.0);
        p.add_ge([(x.at(0), 1.0)], 3.0);
        let r = solve_optimal(&p, &tol()).unwrap();
        assert_abs_diff_eq!(r.objective, 3.0, epsilon = 1e-7);
    }

    #[test]
    fn triangle_lp() {
        let mut p = ConicProblem::new();
        let x = p.add_nonneg(2);
        p.add_cost(x.at(0), -1.0);
        p.add_cost(x.at(1), -1.0);
        p.add_le([(x.at(0), 1.0), (x.at(1), 1.0)], 1.0);
        let r = solve_optimal(&p, &tol()).unwrap();
        assert_abs_diff_eq!(r.objective, -1.0, epsilon = 1e-7);
        assert!(r.primal_residual <= 1e-8 && r.cone_violation <= 1e-8);
    }

    #[test]
    fn euclidean_norm_socp() {
        let mut p = ConicProblem::new();
        let c = p.add_soc(3);
        p.add_cost(c.at(0), 1.0);
        p.add_eq([(c.at(1), 1.0)], 3.0);
        p.add_eq([(c.at(2), 1.0)], 4.0);
        let r = solve_optimal(&p, &tol()).unwrap();
        assert_abs_diff_eq!(r.objective, 5.0, epsilon = 1e-6);

        // same thing through an affine cone constraint
        let mut q = ConicProblem::new();
        let t = q.add_free(1);
        q.add_cost(t.at(0), 1.0);
        q.add_soc_constraint(vec![Affine::new(vec![(t.at(0), 1.0)], 0.0), Affine::new(vec![], 3.0), Affine::new(vec![], 4.0)]);
        let r = solve_optimal(&q, &tol()).unwrap();
        assert_abs_diff_eq!(r.objective, 5.0, epsilon = 1e-6);
    }

    #[test]
    fn infeasible_and_unbounded_are_reported() {
        let mut p = ConicProblem::new();
        let x = p.add_nonneg(1);
        p.add_le([(x.at(0), 1.0)], -1.0);
        assert_eq!(solve(&p, &tol()).unwrap().status, SolveStatus::Infeasible);
        assert!(matches!(
            solve_optimal(&p, &tol()),
            Err(Error::Solver { status: SolveStatus::Infeasible, .. })
        ));

        let mut q = ConicProblem::new();
        let y = q.add_nonneg(1);
        q.add_cost(y.at(0), -1.0);
        assert_eq!(solve(&q, &tol()).unwrap().status, SolveStatus::Unbounded);
    }

    #[test]
    fn offset_and_duplicate_terms() {
        let mut p = ConicProblem::new();
        let x = p.add_nonneg(1);
        p.add_cost(x.at(0), 2.0);
        p.add_offset(-7.0);
        // x + x ≥ 4 written with duplicate terms
        p.add_ge([(x.at(0), 1.0), (x.at(0), 1.0)], 4.0);
        let r = solve_optimal(&p, &tol()).unwrap();
        assert_abs_diff_eq!(r.objective, -3.0, epsilon = 1e-7);
    }

    #[test]
    fn malformed_problems_are_rejected() {
        let mut p = ConicProblem::new();
        p.add_free(1);
        p.add_le([(5, 1.0)], 1.0);
        assert!(matches!(solve(&p, &tol()), Err(Error::Shape(_))));
        let mut q = ConicProblem::new();
        let x = q.add_free(1);
        q.add_cost(x.at(0), f64::NAN);
        assert!(matches!(solve(&q, &tol()), Err(Error::Domain(_))));
    }

    #[test]
    fn empty_problem() {
        let mut p = ConicProblem::new();
        p.add_offset(2.5);
        let r = solve_optimal(&p, &tol()).unwrap();
        assert_eq!(r.objective, 2.5);
    }

    #[test]
    fn standard_form_dump() {
        let mut p = ConicProblem::new();
        let x = p.add_nonneg(2);
        let c = p.add_soc(2);
        p.add_cost(x.at(0), 1.0);
        p.add_le([(x.at(0), 1.0), (c.at(1), -1.0)], 2.0);
        p.add_eq([(x.at(1), 1.0)], 1.0);
        p.add_soc_constraint(vec![Affine::new(vec![(x.at(0), 1.0)], 1.0), Affine::new(vec![(x.at(1), 2.0)], 0.0)]);
        let text = p.to_standard_form();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "vars 4");
        assert_eq!(lines[1], "block nonneg 0 2");
        assert_eq!(lines[2], "block soc 2 2");
        assert!(lines.iter().any(|l| l.starts_with("le 2e0 0:1e0 3:-1e0")));
        assert!(lines.iter().any(|l| l.starts_with("soc 1e0,0:1e0 ; 0e0,1:2e0")));
    }

    fn random_lp(costs: &[f64], caps: &[f64], budget: f64) -> ConicProblem {
        // min −Σ c_i x_i  s.t. x_i ≤ cap_i, Σ x_i ≤ budget, x ≥ 0
        let mut p = ConicProblem::new();
        let x = p.add_nonneg(costs.len());
        for (i, (&c, &cap)) in costs.iter().zip(caps).enumerate() {
            p.add_cost(x.at(i), -c);
            p.add_le([(x.at(i), 1.0)], cap);
        }
        p.add_le(x.indices().map(|i| (i, 1.0)), budget);
        p
    }

    /// Greedy fractional knapsack optimum of `random_lp`.
    fn greedy(costs: &[f64], caps: &[f64], budget: f64) -> f64 {
        let mut order: Vec<usize> = (0..costs.len()).collect();
        order.sort_by(|&a, &b| costs[b].total_cmp(&costs[a]));
        let mut left = budget;
        let mut val = 0.0;
        for i in order {
            let take = caps[i].min(left);
            val -= costs[i] * take;
            left -= take;
        }
        val
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]
        #[test]
        fn lp_matches_greedy_and_is_deterministic(
            data in proptest::collection::vec((0.1f64..10.0, 0.0f64..20.0), 1..6),
            budget in 0.0f64..50.0,
            lam in 0.1f64..10.0,
        ) {
            let (costs, caps): (Vec<f64>, Vec<f64>) = data.into_iter().unzip();
            let p = random_lp(&costs, &caps, budget);
            let a = solve_optimal(&p, &tol()).unwrap();
            let b = solve_optimal(&p, &tol()).unwrap();
            prop_assert_eq!(a.objective, b.objective);
            let want = greedy(&costs, &caps, budget);
            prop_assert!((a.objective - want).abs() <= 1e-6 * (1.0 + want.abs()));

            let scaled_costs: Vec<f64> = costs.iter().map(|c| c * lam).collect();
            let s = solve_optimal(&random_lp(&scaled_costs, &caps, budget), &tol()).unwrap();
            prop_assert!((s.objective - lam * a.objective).abs() <= 1e-6 * (1.0 + (lam * a.objective).abs()));
        }
    }
}

//! Truncated linear decision rules `y(d) = min{v, Ud}`.
//!
//! Covers feasibility (`Av ≤ x`, `HU ≤ I`), fitting a rule to a two-point
//! law, the second-order-cone reformulation of the worst-case expected loss
//! over a moment set, the joint rule-based benchmark, the recourse-to-rule
//! construction, and the analytic gap bounds.

use nalgebra::{DMatrix, DVector};
use serde::Serialize;

use crate::conic::{self, Affine, ConicProblem, Tolerances};
use crate::error::{Error, Result};
use crate::lowerlevel::{add_risk_objective, ScenarioLoss};
use crate::mechanism::TwoPointDistribution;
use crate::model::{MomentInfo, ProblemData, ScaleIndex};
use crate::risk::{standard_coefficient, RiskSpec};

/// Absolute slack (scaled by magnitude) accepted in feasibility checks.
pub const FEAS_TOL: f64 = 1e-8;
/// Slack allowed on LP recourse handed to `construct_tldr_from_recourse`,
/// relative to the largest demand or recourse entry.
pub const RECOURSE_TOL: f64 = 1e-7;

/// Worst-case values are multiplied by `pσ` after solving in standardized
/// units, so the optimality gap is tightened to keep absolute errors small.
fn worst_case_tolerances() -> Tolerances {
    Tolerances { rel_gap: 1e-10, abs_gap: 1e-10, ..Tolerances::default() }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TldrPolicy {
    pub v: DVector<f64>,
    pub u: DMatrix<f64>,
}

impl TldrPolicy {
    pub fn zero(n_y: usize, n_d: usize) -> Self {
        TldrPolicy { v: DVector::zeros(n_y), u: DMatrix::zeros(n_y, n_d) }
    }

    /// `min{v, Ud}` componentwise.
    pub fn apply(&self, d: &DVector<f64>) -> DVector<f64> {
        (&self.u * d).zip_map(&self.v, f64::min)
    }

    /// Feasibility for first-stage decision `x`: `v, U ≥ 0`, `Av ≤ x`, `HU ≤ I`.
    pub fn check_feasible(&self, pd: &ProblemData, x: &DVector<f64>) -> Result<()> {
        let dims = pd.dims();
        if self.v.len() != dims.n_y || self.u.shape() != (dims.n_y, dims.n_d) || x.len() != dims.n_x {
            return Err(Error::shape(format!(
                "policy v: {}, U: {}x{}, x: {} do not match N_y = {}, N_d = {}, N_x = {}",
                self.v.len(),
                self.u.nrows(),
                self.u.ncols(),
                x.len(),
                dims.n_y,
                dims.n_d,
                dims.n_x
            )));
        }
        let neg = |v: f64| v < -FEAS_TOL;
        if self.v.iter().any(|&v| neg(v)) || self.u.iter().any(|&v| neg(v)) {
            return Err(Error::domain("policy has negative entries"));
        }
        let av = pd.a() * &self.v;
        for i in 0..dims.n_x {
            if av[i] > x[i] + FEAS_TOL * x[i].abs().max(1.0) {
                return Err(Error::domain(format!("(Av)[{i}] = {} exceeds x[{i}] = {}", av[i], x[i])));
            }
        }
        let hu = pd.h() * &self.u;
        for i in 0..dims.n_d {
            for l in 0..dims.n_d {
                let cap = if i == l { 1.0 } else { 0.0 };
                if hu[(i, l)] > cap + FEAS_TOL {
                    return Err(Error::domain(format!("(HU)[{i},{l}] = {} exceeds {cap}", hu[(i, l)])));
                }
            }
        }
        Ok(())
    }

    /// If `U` is diagonal (square), returns the diagonal.
    pub fn diagonal(&self) -> Option<DVector<f64>> {
        if !self.u.is_square() {
            return None;
        }
        let n = self.u.nrows();
        for j in 0..n {
            for i in 0..n {
                if i != j && self.u[(i, j)] != 0.0 {
                    return None;
                }
            }
        }
        Some(self.u.diagonal())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TldrFit {
    /// Objective of the fitted rule under the two-point law.
    pub vbar: f64,
    pub policy: TldrPolicy,
    pub wall_ms: f64,
}

fn check_in_budget(pd: &ProblemData, x: &DVector<f64>, idx: ScaleIndex) -> Result<()> {
    let dims = pd.dims();
    if x.len() != dims.n_x {
        return Err(Error::shape(format!("x has length {}, N_x = {}", x.len(), dims.n_x)));
    }
    if x.iter().any(|&v| v < -FEAS_TOL) {
        return Err(Error::domain("x has negative entries"));
    }
    let gx = pd.g() * x;
    for r in 0..dims.k {
        let cap = idx.k * pd.b()[r];
        if gx[r] > cap + FEAS_TOL * cap.abs().max(1.0) {
            return Err(Error::domain(format!("(Gx)[{r}] = {} exceeds budget {cap}", gx[r])));
        }
    }
    Ok(())
}

/// Fits a rule to the two-point law for a fixed first stage:
///
/// ```text
/// min cᵀx + ρ(−pᵀw_ω)  s.t.  v, U, w ≥ 0,  Av ≤ x,  HU ≤ I,  w_ω ≤ v,  w_ω ≤ U d_ω
/// ```
///
/// With `H = I` the constraint `HU ≤ I` forces `U` diagonal with entries at
/// most one, and `U = I` is optimal, so `U` is fixed and the program shrinks.
///
/// The thresholds `v` are not unique: any `v ≥ max_ω w_ω` inside `Av ≤ x`
/// attains the same value. A second LP picks, among those, a `v` maximizing
/// `pᵀv`, which can only lower the worst-case cost of the rule.
pub fn fit_tldr(
    pd: &ProblemData,
    x_fixed: &DVector<f64>,
    d2: &TwoPointDistribution,
    r: &RiskSpec,
    idx: ScaleIndex,
) -> Result<TldrFit> {
    r.require_optimizable()?;
    check_in_budget(pd, x_fixed, idx)?;
    let dims = pd.dims();
    for d in [&d2.d_l, &d2.d_h] {
        if d.len() != dims.n_d {
            return Err(Error::shape(format!("demand has length {}, N_d = {}", d.len(), dims.n_d)));
        }
    }
    let identity = pd.h_is_identity();
    let scenarios = d2.scenarios();
    let tol = Tolerances::default();

    let mut prob = ConicProblem::new();
    prob.add_offset(pd.c().dot(x_fixed));
    let v = prob.add_nonneg(dims.n_y);
    let u = (!identity).then(|| prob.add_nonneg(dims.n_y * dims.n_d));
    // U stored row-major: U[j, i] at u.at(j * n_d + i)
    let uat = |j: usize, i: usize| u.expect("general form").at(j * dims.n_d + i);
    for i in 0..dims.n_x {
        let row: Vec<(usize, f64)> =
            (0..dims.n_y).filter(|&j| pd.a()[(i, j)] != 0.0).map(|j| (v.at(j), pd.a()[(i, j)])).collect();
        prob.add_le(row, x_fixed[i]);
    }
    if !identity {
        for i in 0..dims.n_d {
            for l in 0..dims.n_d {
                let row: Vec<(usize, f64)> =
                    (0..dims.n_y).filter(|&j| pd.h()[(i, j)] != 0.0).map(|j| (uat(j, l), pd.h()[(i, j)])).collect();
                if !row.is_empty() {
                    prob.add_le(row, if i == l { 1.0 } else { 0.0 });
                }
            }
        }
    }
    let mut ws = Vec::new();
    let mut losses = Vec::new();
    for &(pw, d) in &scenarios {
        let w = prob.add_nonneg(dims.n_y);
        for j in 0..dims.n_y {
            prob.add_le([(w.at(j), 1.0), (v.at(j), -1.0)], 0.0);
            if identity {
                prob.add_le([(w.at(j), 1.0)], d[j]);
            } else {
                let mut row = vec![(w.at(j), 1.0)];
                row.extend((0..dims.n_d).filter(|&i| d[i] != 0.0).map(|i| (uat(j, i), -d[i])));
                prob.add_le(row, 0.0);
            }
        }
        losses.push(ScenarioLoss {
            prob: pw,
            terms: (0..dims.n_y).filter(|&j| pd.p()[j] != 0.0).map(|j| (w.at(j), -pd.p()[j])).collect(),
            constant: 0.0,
        });
        ws.push(w);
    }
    add_risk_objective(&mut prob, &losses, r)?;
    let res = conic::solve_optimal(&prob, &tol)?;

    let u_mat = match u {
        None => DMatrix::identity(dims.n_y, dims.n_d),
        Some(ub) => DMatrix::from_fn(dims.n_y, dims.n_d, |j, i| res.x[ub.at(j * dims.n_d + i)].max(0.0)),
    };
    let v_first: Vec<f64> = res.block(&v).into_iter().map(|x| x.max(0.0)).collect();
    let mut w_max = vec![0.0f64; dims.n_y];
    for w in &ws {
        for j in 0..dims.n_y {
            w_max[j] = w_max[j].max(res.x[w.at(j)]);
        }
    }
    let lower: Vec<f64> = (0..dims.n_y).map(|j| (w_max[j].min(v_first[j]) * (1.0 - 1e-9)).max(0.0)).collect();
    let v_final = widen_thresholds(pd, x_fixed, &lower, &tol).unwrap_or_else(|_| DVector::from_vec(v_first));

    Ok(TldrFit { vbar: res.objective, policy: TldrPolicy { v: v_final, u: u_mat }, wall_ms: res.wall_ms })
}

/// `max pᵀv  s.t.  lower ≤ v,  Av ≤ x`.
fn widen_thresholds(pd: &ProblemData, x: &DVector<f64>, lower: &[f64], tol: &Tolerances) -> Result<DVector<f64>> {
    let dims = pd.dims();
    // The solver's scenario allocations can sit a hair above x; pull those
    // rows back before widening.
    let mut lower = lower.to_vec();
    let mut pull = vec![1.0f64; dims.n_y];
    for i in 0..dims.n_x {
        let base: f64 = (0..dims.n_y).map(|j| pd.a()[(i, j)] * lower[j]).sum();
        if base > x[i] && base > 0.0 {
            let t = x[i].max(0.0) / base;
            for j in 0..dims.n_y {
                if pd.a()[(i, j)] != 0.0 {
                    pull[j] = pull[j].min(t);
                }
            }
        }
    }
    for j in 0..dims.n_y {
        lower[j] *= pull[j];
    }
    let mut prob = ConicProblem::new();
    // v = lower + e with e ≥ 0
    let e = prob.add_nonneg(dims.n_y);
    for j in 0..dims.n_y {
        prob.add_cost(e.at(j), -pd.p()[j]);
        if pd.p()[j] == 0.0 {
            // Irrelevant threshold: keep it at its lower bound.
            prob.add_le([(e.at(j), 1.0)], 0.0);
        }
    }
    for i in 0..dims.n_x {
        let base: f64 = (0..dims.n_y).map(|j| pd.a()[(i, j)] * lower[j]).sum();
        let row: Vec<(usize, f64)> =
            (0..dims.n_y).filter(|&j| pd.a()[(i, j)] != 0.0).map(|j| (e.at(j), pd.a()[(i, j)])).collect();
        prob.add_le(row, (x[i] - base).max(0.0));
    }
    let res = conic::solve_optimal(&prob, tol)?;
    let mut ev: Vec<f64> = (0..dims.n_y).map(|j| res.x[e.at(j)].max(0.0)).collect();
    // Interior-point slack can push Av over x. Pull back only the widening
    // part, row by row, so one tight row cannot shrink unrelated thresholds.
    let mut factor = vec![1.0f64; dims.n_y];
    for i in 0..dims.n_x {
        let base: f64 = (0..dims.n_y).map(|j| pd.a()[(i, j)] * lower[j]).sum();
        let added: f64 = (0..dims.n_y).map(|j| pd.a()[(i, j)] * ev[j]).sum();
        let room = (x[i] - base).max(0.0);
        if added > room && added > 0.0 {
            let t = room / added;
            for j in 0..dims.n_y {
                if pd.a()[(i, j)] != 0.0 {
                    factor[j] = factor[j].min(t);
                }
            }
        }
    }
    for j in 0..dims.n_y {
        ev[j] *= factor[j];
    }
    Ok(DVector::from_fn(dims.n_y, |j, _| lower[j] + ev[j]))
}

/// Worst-case expectation `sup E[−pᵀ min{v, d̃}]` over nonnegative demand with
/// mean `kμ` and marginal standard deviations at most `k^{s/2}σ`.
///
/// Coordinates separate; each one is a small second-order cone program with
/// variables `λ, r` free and `s, q₁, q₂ ≥ 0`, where `q₁, q₂` certify that a
/// quadratic is nonnegative on the half-line of admissible demands. It is
/// solved in standardized units (see `add_worst_case_terms`) so that the
/// absolute accuracy does not degrade with the size of `μ`.
pub fn worst_case_expected_loss(v: &DVector<f64>, p: &DVector<f64>, m: &MomentInfo, idx: ScaleIndex) -> Result<f64> {
    let mut prob = ConicProblem::new();
    add_worst_case_terms(&mut prob, &WorstCaseInput::Fixed(v), p, m, idx)?;
    Ok(conic::solve_optimal(&prob, &worst_case_tolerances())?.objective)
}

enum WorstCaseInput<'a> {
    Fixed(&'a DVector<f64>),
    /// Index of `v_i` in the problem.
    Variable(&'a [usize]),
}

fn add_worst_case_terms(
    prob: &mut ConicProblem,
    v: &WorstCaseInput<'_>,
    p: &DVector<f64>,
    m: &MomentInfo,
    idx: ScaleIndex,
) -> Result<()> {
    let n = m.len();
    let vlen = match v {
        WorstCaseInput::Fixed(v) => v.len(),
        WorstCaseInput::Variable(ix) => ix.len(),
    };
    if p.len() != n || vlen != n {
        return Err(Error::shape(format!("v: {vlen}, p: {}, moments: {n} must agree", p.len())));
    }
    if let WorstCaseInput::Fixed(v) = v {
        if v.iter().any(|&x| !(x >= 0.0)) {
            return Err(Error::domain("thresholds must be nonnegative"));
        }
    }
    let sm = m.scaled(idx);
    for i in 0..n {
        let (mu, sig, pi) = (sm.mu[i], sm.sigma[i], p[i]);
        if pi == 0.0 {
            continue;
        }
        if sig == 0.0 {
            // Degenerate set {μ}: the dual is not attained, use −p·min{v, μ} directly.
            match v {
                WorstCaseInput::Fixed(v) => prob.add_offset(-pi * v[i].min(mu)),
                WorstCaseInput::Variable(ix) => {
                    let t = prob.add_nonneg(1).at(0);
                    prob.add_cost(t, -pi);
                    prob.add_le([(t, 1.0), (ix[i], -1.0)], 0.0);
                    prob.add_le([(t, 1.0)], mu);
                }
            }
            continue;
        }
        // Standardize z = (d − μ)/σ and split −p·min{v, d} = −p·d + p·(d − v)⁺.
        // The first part has expectation −pμ on the whole set; the second is
        // pσ·sup E(z − t)⁺ with t = (v − μ)/σ over laws on z ≥ L = −μ/σ with
        // E z = 0 and E z² ≤ 1. Its dual is min s + r subject to two
        // quadratics being nonnegative on [L, ∞), each written as a 3-cone
        // in the shifted variable u = z − L.
        let low = -mu / sig;
        let (t_terms, t_const) = match v {
            WorstCaseInput::Fixed(v) => {
                if v[i] == 0.0 {
                    continue;
                }
                (vec![], (v[i] - mu) / sig)
            }
            WorstCaseInput::Variable(ix) => (vec![(ix[i], 1.0 / sig)], low),
        };
        // At the optimum with a nonnegative lower atom both quadratics are
        // (z − t ∓ root)²/(4·root), root = sqrt(1 + t²); balancing uses their
        // ratio c/a at z = L, with t = 0 when v is a decision.
        let t_guess = if t_terms.is_empty() { t_const } else { 0.0 };
        let root = (1.0 + t_guess * t_guess).sqrt();
        let gamma_a = (low - t_guess + root).abs().max(1.0);
        let gamma_b = (low - t_guess - root).abs().max(1.0);
        let lam = prob.add_free(1).at(0);
        let r = prob.add_free(1).at(0);
        let nn = prob.add_nonneg(3);
        let (s, q1, q2) = (nn.at(0), nn.at(1), nn.at(2));
        prob.add_offset(-pi * mu);
        prob.add_cost(s, pi * sig);
        prob.add_cost(r, pi * sig);

        // f(z) = s z² + λ z + r ≥ 0 on z ≥ L
        let c_a = vec![(s, low * low), (lam, low), (r, 1.0)];
        prob.add_soc_constraint(quadratic_cone(s, vec![(s, 2.0 * low), (lam, 1.0), (q1, -1.0)], 0.0, c_a, 0.0, gamma_a));
        // f(z) − z + t ≥ 0 on z ≥ L
        let mut c_b = vec![(s, low * low), (lam, low), (r, 1.0)];
        c_b.extend(t_terms);
        prob.add_soc_constraint(quadratic_cone(
            s,
            vec![(s, 2.0 * low), (lam, 1.0), (q2, -1.0)],
            -1.0,
            c_b,
            t_const - low,
            gamma_b,
        ));
    }
    Ok(())
}

/// `(γa + c/γ, b, γa − c/γ) ∈ Q³`, i.e. `4ac ≥ b²` with `a, c ≥ 0`, where `a`
/// is a single variable and `b`, `c` are affine. `γ > 0` only balances the
/// two entries for conditioning.
fn quadratic_cone(a: usize, b: Vec<(usize, f64)>, b0: f64, c: Vec<(usize, f64)>, c0: f64, gamma: f64) -> Vec<Affine> {
    let mut head: Vec<(usize, f64)> = c.iter().map(|&(j, w)| (j, w / gamma)).collect();
    head.push((a, gamma));
    let mut tail: Vec<(usize, f64)> = c.into_iter().map(|(j, w)| (j, -w / gamma)).collect();
    tail.push((a, gamma));
    vec![Affine::new(head, c0 / gamma), Affine::new(b, b0), Affine::new(tail, -c0 / gamma)]
}

#[derive(Debug, Clone, PartialEq)]
pub struct TldrDroSolution {
    pub cost: f64,
    pub x: DVector<f64>,
    pub v: DVector<f64>,
    pub wall_ms: f64,
}

/// Rule-based benchmark: jointly chooses `x ∈ X(kb)` and `v ≥ 0` with `Av ≤ x`
/// (and `U = I`) to minimize `cᵀx` plus the worst-case expected loss. One SOCP.
pub fn solve_tldr_dro(pd: &ProblemData, m: &MomentInfo, idx: ScaleIndex) -> Result<TldrDroSolution> {
    if !pd.h_is_identity() {
        return Err(Error::capability("the rule-based benchmark requires H = I"));
    }
    let dims = pd.dims();
    if m.len() != dims.n_d {
        return Err(Error::shape(format!("moments have length {}, N_d = {}", m.len(), dims.n_d)));
    }
    let mut prob = ConicProblem::new();
    let x = prob.add_nonneg(dims.n_x);
    let v = prob.add_nonneg(dims.n_y);
    for i in 0..dims.n_x {
        prob.add_cost(x.at(i), pd.c()[i]);
    }
    for r in 0..dims.k {
        prob.add_le(
            (0..dims.n_x).filter(|&i| pd.g()[(r, i)] != 0.0).map(|i| (x.at(i), pd.g()[(r, i)])),
            idx.k * pd.b()[r],
        );
    }
    for i in 0..dims.n_x {
        let mut row: Vec<(usize, f64)> =
            (0..dims.n_y).filter(|&j| pd.a()[(i, j)] != 0.0).map(|j| (v.at(j), pd.a()[(i, j)])).collect();
        row.push((x.at(i), -1.0));
        prob.add_le(row, 0.0);
    }
    let vix: Vec<usize> = v.indices().collect();
    add_worst_case_terms(&mut prob, &WorstCaseInput::Variable(&vix), pd.p(), m, idx)?;
    let res = conic::solve_optimal(&prob, &worst_case_tolerances())?;
    Ok(TldrDroSolution {
        cost: res.objective,
        x: DVector::from_vec(res.block(&x).into_iter().map(|t| t.max(0.0)).collect()),
        v: DVector::from_vec(res.block(&v).into_iter().map(|t| t.max(0.0)).collect()),
        wall_ms: res.wall_ms,
    })
}

/// Rule that reproduces recourse `y_at` at demand `anchor_d`:
/// `U_{ji} = y_j / d_i` for the unique row `i` with `H_{ij} > 0`, `v = y_at`.
pub fn construct_tldr_from_recourse(y_at: &DVector<f64>, anchor_d: &DVector<f64>, h: &DMatrix<f64>) -> Result<TldrPolicy> {
    let (n_d, n_y) = h.shape();
    if y_at.len() != n_y || anchor_d.len() != n_d {
        return Err(Error::shape(format!(
            "y has length {}, d has length {}, H is {n_d}x{n_y}",
            y_at.len(),
            anchor_d.len()
        )));
    }
    let hy = h * y_at;
    // y usually comes from an LP solve, so judge its slack against the
    // scale of the whole demand vector rather than coordinate by coordinate.
    let scale = anchor_d.amax().max(y_at.amax()).max(1.0);
    for i in 0..n_d {
        if hy[i] > anchor_d[i] + RECOURSE_TOL * scale {
            return Err(Error::domain(format!("(Hy)[{i}] = {} exceeds d[{i}] = {}", hy[i], anchor_d[i])));
        }
    }
    let mut u = DMatrix::zeros(n_y, n_d);
    for j in 0..n_y {
        let rows: Vec<usize> = (0..n_d).filter(|&i| h[(i, j)] != 0.0).collect();
        let [i] = rows[..] else {
            return Err(Error::domain(format!(
                "column {j} of H has {} nonzero entries; the construction needs exactly one",
                rows.len()
            )));
        };
        if anchor_d[i] > 0.0 {
            u[(j, i)] = y_at[j].max(0.0) / anchor_d[i];
        } else if y_at[j] > RECOURSE_TOL * scale {
            return Err(Error::domain(format!("y[{j}] > 0 while its demand coordinate {i} is zero")));
        }
    }
    // Absorb the tolerated slack so that HU ≤ I holds exactly.
    for i in 0..n_d {
        if anchor_d[i] > 0.0 && hy[i] > anchor_d[i] {
            let t = anchor_d[i] / hy[i];
            for j in 0..n_y {
                u[(j, i)] *= t;
            }
        }
    }
    Ok(TldrPolicy { v: y_at.map(|t| t.max(0.0)), u })
}

/// Inputs of the analytic bounds.
#[derive(Debug, Clone, PartialEq)]
pub struct BoundParams {
    pub alpha: f64,
    pub idx: ScaleIndex,
    pub tau: f64,
    pub varsigma: DVector<f64>,
    pub sigma: DVector<f64>,
    pub p: DVector<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GapBounds {
    /// Upper bound on `C − V̄`.
    pub loss_bound: f64,
    /// Upper bound on `V̄ − V₀`.
    pub value_bound: f64,
    pub alpha: f64,
    pub k: f64,
    pub s: f64,
    pub tau: f64,
}

/// Evaluates the two bound formulas
///
/// ```text
/// loss  = (½+α) k^{s/2} pᵀU_mech σ + sqrt((1−τ)/τ) k^{s/2} pᵀU_mech ς
/// value = (½+α) k^{s/2} pᵀU_exp σ + (sqrt((1−τ)/τ) + sqrt(τ/(1−τ))) k^{s/2} pᵀŪ ς
/// ```
///
/// For the Dirac mechanism (`τ = 0` or `ς = 0`) the loss bound uses `U_exp`
/// and the value bound is zero.
pub fn analytic_gap_bounds(
    u_mech: &DMatrix<f64>,
    u_exp: &DMatrix<f64>,
    params: &BoundParams,
    ubar: &DMatrix<f64>,
) -> Result<GapBounds> {
    let BoundParams { alpha, idx, tau, varsigma, sigma, p } = params;
    let n_d = sigma.len();
    for (name, mat) in [("U_mech", u_mech), ("U_exp", u_exp), ("Ubar", ubar)] {
        if mat.shape() != (p.len(), n_d) {
            return Err(Error::shape(format!("{name} is {}x{}, expected {}x{n_d}", mat.nrows(), mat.ncols(), p.len())));
        }
    }
    if varsigma.len() != n_d {
        return Err(Error::shape("varsigma and sigma lengths differ"));
    }
    if !(0.0..1.0).contains(tau) {
        return Err(Error::domain(format!("bounds need tau in [0, 1), got {tau}")));
    }
    let kf = idx.spread_factor();
    let quad = |u: &DMatrix<f64>, w: &DVector<f64>| p.dot(&(u * w));
    let echo = |loss_bound, value_bound| GapBounds {
        loss_bound,
        value_bound,
        alpha: *alpha,
        k: idx.k,
        s: idx.s,
        tau: *tau,
    };
    let dirac = *tau == 0.0 || varsigma.iter().all(|&v| v == 0.0);
    if dirac {
        return Ok(echo((0.5 + alpha) * kf * quad(u_exp, sigma), 0.0));
    }
    let up = ((1.0 - tau) / tau).sqrt();
    let down = (tau / (1.0 - tau)).sqrt();
    let loss = (0.5 + alpha) * kf * quad(u_mech, sigma) + up * kf * quad(u_mech, varsigma);
    let value = (0.5 + alpha) * kf * quad(u_exp, sigma) + (up + down) * kf * quad(ubar, varsigma);
    Ok(echo(loss, value))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CostBoundParts {
    pub first_stage: f64,
    /// `−pᵀ min{v, U kμ}`: the rule's loss at the mean.
    pub nominal_loss: f64,
    /// `(½+α) k^{s/2} pᵀUσ`.
    pub spread_term: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CostEvaluation {
    pub value: f64,
    /// True when `value` is the exact worst-case cost; false for a certified upper bound.
    pub exact: bool,
    pub bound: Option<CostBoundParts>,
}

/// Worst-case cost of first stage `x` followed by rule `pol` over the moment set.
///
/// Exact for expectation risk when `H = I` and `U` is diagonal: each
/// coordinate `min{v_j, u_j d_j} = u_j min{v_j/u_j, d_j}` reduces to the conic
/// reformulation. Otherwise returns the upper bound
/// `cᵀx − pᵀmin{v, Ukμ} + (½+α) k^{s/2} pᵀUσ`, valid for any coherent risk with
/// standard coefficient `α`.
pub fn evaluate_cost(
    pd: &ProblemData,
    x: &DVector<f64>,
    pol: &TldrPolicy,
    m: &MomentInfo,
    idx: ScaleIndex,
    r: &RiskSpec,
) -> Result<CostEvaluation> {
    pol.check_feasible(pd, x)?;
    if m.len() != pd.dims().n_d {
        return Err(Error::shape(format!("moments have length {}, N_d = {}", m.len(), pd.dims().n_d)));
    }
    let first_stage = pd.c().dot(x);
    if *r == RiskSpec::Expectation && pd.h_is_identity() {
        if let Some(diag) = pol.diagonal() {
            let p_eff = pd.p().component_mul(&diag);
            let v_eff = DVector::from_fn(diag.len(), |j, _| if diag[j] > 0.0 { pol.v[j] / diag[j] } else { 0.0 });
            let wc = worst_case_expected_loss(&v_eff, &p_eff, m, idx)?;
            return Ok(CostEvaluation { value: first_stage + wc, exact: true, bound: None });
        }
    }
    let sm = m.scaled(idx);
    let nominal_loss = -pd.p().dot(&pol.apply(&sm.mu));
    let spread_term = (0.5 + standard_coefficient(r)) * pd.p().dot(&(&pol.u * &sm.sigma));
    Ok(CostEvaluation {
        value: first_stage + nominal_loss + spread_term,
        exact: false,
        bound: Some(CostBoundParts { first_stage, nominal_loss, spread_term }),
    })
}

/// Worst-case ratio `C_mech / C_tldr`.
pub fn wcr(c_mech: f64, c_tldr: f64) -> f64 {
    c_mech / c_tldr
}

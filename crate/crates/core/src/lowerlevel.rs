//! The operations team's programs: the expectation LP `V₀`, the two-scenario
//! risk-averse program `V_{ς,τ}`, the recourse LP `g(x, d)`, and the
//! assumption checks.

use nalgebra::DVector;
use serde::Serialize;

use crate::conic::{self, Block, ConicProblem, Tolerances};
use crate::error::{Error, Result};
use crate::mechanism::TwoPointDistribution;
use crate::model::{MomentInfo, ProblemData, ScaleIndex};
use crate::risk::RiskSpec;

/// Optimal value and decisions of a lower-level program.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LowerLevelSolution {
    pub value: f64,
    #[serde(serialize_with = "ser_vec")]
    pub x: DVector<f64>,
    #[serde(serialize_with = "ser_vec")]
    pub y_l: DVector<f64>,
    /// Recourse at the high atom; absent for the Dirac distribution.
    #[serde(serialize_with = "ser_opt_vec")]
    pub y_h: Option<DVector<f64>>,
    pub wall_ms: f64,
}

fn ser_vec<S: serde::Serializer>(v: &DVector<f64>, s: S) -> std::result::Result<S::Ok, S::Error> {
    s.collect_seq(v.iter())
}

fn ser_opt_vec<S: serde::Serializer>(v: &Option<DVector<f64>>, s: S) -> std::result::Result<S::Ok, S::Error> {
    match v {
        Some(v) => s.collect_seq(v.iter()),
        None => s.serialize_none(),
    }
}

/// Per-scenario loss `Σ coef·var + constant` with its probability.
pub(crate) struct ScenarioLoss {
    pub prob: f64,
    pub terms: Vec<(usize, f64)>,
    pub constant: f64,
}

/// Adds `risk(loss)` to the objective using the standard LP epigraphs.
///
/// CVaR(β): `t + (1/β) Σ prob·u`, `u ≥ loss − t`, `u ≥ 0`.
/// Mean-semideviation (q = 1): `E[loss] + λ Σ prob·dev`, `dev ≥ loss − E[loss]`,
/// `dev ≥ 0`; the mean is linear in the decisions so the model is exact.
pub(crate) fn add_risk_objective(prob: &mut ConicProblem, losses: &[ScenarioLoss], risk: &RiskSpec) -> Result<()> {
    risk.require_optimizable()?;
    let add_expectation = |prob: &mut ConicProblem, weight: f64| {
        for l in losses {
            for &(i, c) in &l.terms {
                prob.add_cost(i, weight * l.prob * c);
            }
            prob.add_offset(weight * l.prob * l.constant);
        }
    };
    match *risk {
        RiskSpec::Expectation => add_expectation(prob, 1.0),
        RiskSpec::Cvar { beta } => {
            let t = prob.add_free(1).at(0);
            let u = prob.add_nonneg(losses.len());
            prob.add_cost(t, 1.0);
            for (w, l) in losses.iter().enumerate() {
                prob.add_cost(u.at(w), l.prob / beta);
                // loss − t − u ≤ 0
                let mut row = l.terms.clone();
                row.push((t, -1.0));
                row.push((u.at(w), -1.0));
                prob.add_le(row, -l.constant);
            }
        }
        RiskSpec::MeanSemideviation { lambda, .. } => {
            add_expectation(prob, 1.0);
            let dev = prob.add_nonneg(losses.len());
            for (w, l) in losses.iter().enumerate() {
                prob.add_cost(dev.at(w), lambda * l.prob);
                // loss_w − Σ prob·loss − dev_w ≤ 0
                let mut row = l.terms.clone();
                let mut constant = l.constant;
                for other in losses {
                    row.extend(other.terms.iter().map(|&(i, c)| (i, -other.prob * c)));
                    constant -= other.prob * other.constant;
                }
                row.push((dev.at(w), -1.0));
                prob.add_le(row, -constant);
            }
        }
        RiskSpec::Var { .. } => unreachable!("rejected by require_optimizable"),
    }
    Ok(())
}

/// First-stage decision of a scenario program.
pub(crate) enum FirstStage<'a> {
    /// `x ∈ X(budget)` is optimized and `cᵀx` enters the objective.
    Decide { budget: &'a DVector<f64> },
    /// `x` is given; only recourse is optimized.
    Fixed(&'a DVector<f64>),
}

pub(crate) struct ScenarioProgram {
    pub problem: ConicProblem,
    pub x: Option<Block>,
    pub ys: Vec<Block>,
}

/// Builds `min [cᵀx] + risk(−pᵀy_ω)` over `y_ω ≥ 0`, `Ay_ω ≤ x`, `Hy_ω ≤ d_ω`.
pub(crate) fn build_scenario_program(
    pd: &ProblemData,
    first: FirstStage<'_>,
    scenarios: &[(f64, &DVector<f64>)],
    risk: &RiskSpec,
) -> Result<ScenarioProgram> {
    let dims = pd.dims();
    for (_, d) in scenarios {
        if d.len() != dims.n_d {
            return Err(Error::shape(format!("demand has length {}, H has {} rows", d.len(), dims.n_d)));
        }
    }
    let mut prob = ConicProblem::new();
    let x = match first {
        FirstStage::Decide { budget } => {
            if budget.len() != dims.k {
                return Err(Error::shape(format!("budget has length {}, G has {} rows", budget.len(), dims.k)));
            }
            let x = prob.add_nonneg(dims.n_x);
            for i in 0..dims.n_x {
                prob.add_cost(x.at(i), pd.c()[i]);
            }
            for r in 0..dims.k {
                prob.add_le(
                    (0..dims.n_x).filter(|&i| pd.g()[(r, i)] != 0.0).map(|i| (x.at(i), pd.g()[(r, i)])),
                    budget[r],
                );
            }
            Some(x)
        }
        FirstStage::Fixed(xv) => {
            if xv.len() != dims.n_x {
                return Err(Error::shape(format!("x has length {}, N_x = {}", xv.len(), dims.n_x)));
            }
            prob.add_offset(pd.c().dot(xv));
            None
        }
    };
    let first_value = |i: usize| match first {
        FirstStage::Fixed(xv) => xv[i],
        FirstStage::Decide { .. } => 0.0,
    };

    let mut ys = Vec::with_capacity(scenarios.len());
    let mut losses = Vec::with_capacity(scenarios.len());
    for &(p_w, d) in scenarios {
        let y = prob.add_nonneg(dims.n_y);
        for i in 0..dims.n_x {
            let mut row: Vec<(usize, f64)> =
                (0..dims.n_y).filter(|&j| pd.a()[(i, j)] != 0.0).map(|j| (y.at(j), pd.a()[(i, j)])).collect();
            if let Some(xb) = x {
                row.push((xb.at(i), -1.0));
                prob.add_le(row, 0.0);
            } else {
                prob.add_le(row, first_value(i));
            }
        }
        for r in 0..dims.n_d {
            prob.add_le(
                (0..dims.n_y).filter(|&j| pd.h()[(r, j)] != 0.0).map(|j| (y.at(j), pd.h()[(r, j)])),
                d[r],
            );
        }
        losses.push(ScenarioLoss {
            prob: p_w,
            terms: (0..dims.n_y).filter(|&j| pd.p()[j] != 0.0).map(|j| (y.at(j), -pd.p()[j])).collect(),
            constant: 0.0,
        });
        ys.push(y);
    }
    add_risk_objective(&mut prob, &losses, risk)?;
    Ok(ScenarioProgram { problem: prob, x, ys })
}

fn vec_of(values: Vec<f64>) -> DVector<f64> {
    // Interior-point iterates sit a hair inside the cone; snap to the bound.
    DVector::from_vec(values.into_iter().map(|v| v.max(0.0)).collect())
}

fn solve_program(pd: &ProblemData, budget: &DVector<f64>, scenarios: &[(f64, &DVector<f64>)], risk: &RiskSpec) -> Result<LowerLevelSolution> {
    let prog = build_scenario_program(pd, FirstStage::Decide { budget }, scenarios, risk)?;
    let res = conic::solve_optimal(&prog.problem, &Tolerances::default())?;
    let x = vec_of(res.block(&prog.x.expect("decision program")));
    let y_l = vec_of(res.block(&prog.ys[0]));
    let y_h = prog.ys.get(1).map(|b| vec_of(res.block(b)));
    Ok(LowerLevelSolution { value: res.objective, x, y_l, y_h, wall_ms: res.wall_ms })
}

/// `V₀`: the LP with demand fixed at `kμ` and budget `kb`.
pub fn solve_v0(pd: &ProblemData, m: &MomentInfo, idx: ScaleIndex) -> Result<LowerLevelSolution> {
    let budget = pd.b() * idx.k;
    let d = &m.mu * idx.k;
    solve_program(pd, &budget, &[(1.0, &d)], &RiskSpec::Expectation)
}

/// `V_{ς,τ}`: both scenarios of the two-point law with their own recourse.
/// A Dirac input reduces to the `V₀` program.
pub fn solve_lower_level(
    pd: &ProblemData,
    d2: &TwoPointDistribution,
    r: &RiskSpec,
    idx: ScaleIndex,
) -> Result<LowerLevelSolution> {
    r.require_optimizable()?;
    let budget = pd.b() * idx.k;
    if d2.is_dirac() {
        return solve_program(pd, &budget, &[(1.0, &d2.d_l)], &RiskSpec::Expectation);
    }
    let scenarios = [(1.0 - d2.tau, &d2.d_l), (d2.tau, &d2.d_h)];
    solve_program(pd, &budget, &scenarios, r)
}

/// Recourse value `g(x, d)` and an optimal recourse decision.
#[derive(Debug, Clone, PartialEq)]
pub struct Recourse {
    pub value: f64,
    pub y: DVector<f64>,
}

/// Solves `g(x, d) = min { −pᵀy : y ≥ 0, Ay ≤ x, Hy ≤ d }`.
pub fn solve_recourse(pd: &ProblemData, x: &DVector<f64>, d: &DVector<f64>) -> Result<Recourse> {
    let prog = build_scenario_program(pd, FirstStage::Fixed(x), &[(1.0, d)], &RiskSpec::Expectation)?;
    let res = conic::solve_optimal(&prog.problem, &Tolerances::default())?;
    // The fixed first stage contributed cᵀx as an offset; g excludes it.
    Ok(Recourse { value: res.objective - pd.c().dot(x), y: vec_of(res.block(&prog.ys[0])) })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AssumptionReport {
    /// `V₀` at `k = 1`.
    pub v0: f64,
    /// `V₀ < −1e-9`: buying something is strictly profitable.
    pub nontrivial: bool,
    /// Sufficient condition `p ≰ Aᵀc`: some product sells above its component cost.
    pub margin_condition: bool,
}

pub fn check_assumptions(pd: &ProblemData, m: &MomentInfo) -> Result<AssumptionReport> {
    let v0 = solve_v0(pd, m, ScaleIndex::unit())?.value;
    let atc = pd.a().transpose() * pd.c();
    let margin_condition = pd.p().iter().zip(atc.iter()).any(|(p, a)| p > a);
    Ok(AssumptionReport { v0, nontrivial: v0 < -1e-9, margin_condition })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mechanism::{build_two_point, MechanismParams};
    use crate::risk::{evaluate_risk, DiscreteLossDistribution};
    use approx::assert_abs_diff_eq;
    use nalgebra::DMatrix;
    use proptest::prelude::*;

    fn v(xs: &[f64]) -> DVector<f64> {
        DVector::from_column_slice(xs)
    }

    fn newsvendor(p: f64) -> ProblemData {
        let one = DMatrix::from_element(1, 1, 1.0);
        ProblemData::new(v(&[1.0]), one.clone(), v(&[100.0]), v(&[p]), one.clone(), one).unwrap()
    }

    fn fig2() -> TwoPointDistribution {
        TwoPointDistribution { d_l: v(&[0.0]), d_h: v(&[11.0]), tau: 10.0 / 11.0 }
    }

    #[test]
    fn v0_newsvendor() {
        let m = MomentInfo::from_slices(&[10.0], &[10f64.sqrt()]).unwrap();
        let s = solve_v0(&newsvendor(3.0), &m, ScaleIndex::unit()).unwrap();
        assert_abs_diff_eq!(s.value, -20.0, epsilon = 1e-6);
        assert_abs_diff_eq!(s.x[0], 10.0, epsilon = 1e-5);
        let s3 = solve_v0(&newsvendor(3.0), &m, ScaleIndex::new(3.0, 1.0).unwrap()).unwrap();
        assert_abs_diff_eq!(s3.value, -60.0, epsilon = 1e-6);
        let s0 = solve_v0(&newsvendor(0.0), &m, ScaleIndex::unit()).unwrap();
        assert_abs_diff_eq!(s0.value, 0.0, epsilon = 1e-7);
        assert_abs_diff_eq!(s0.x[0], 0.0, epsilon = 1e-6);
    }

    #[test]
    fn two_point_newsvendor() {
        let pd = newsvendor(3.0);
        let e = solve_lower_level(&pd, &fig2(), &RiskSpec::Expectation, ScaleIndex::unit()).unwrap();
        assert_abs_diff_eq!(e.value, -19.0, epsilon = 1e-6);
        assert_abs_diff_eq!(e.x[0], 11.0, epsilon = 1e-5);
        let c = solve_lower_level(&pd, &fig2(), &RiskSpec::cvar(0.5).unwrap(), ScaleIndex::unit()).unwrap();
        assert_abs_diff_eq!(c.value, -16.0, epsilon = 1e-6);
        assert_abs_diff_eq!(c.x[0], 11.0, epsilon = 1e-5);
        assert!(c.y_h.is_some());
    }

    #[test]
    fn dirac_matches_v0_for_every_supported_risk() {
        let pd = newsvendor(3.0);
        let d = TwoPointDistribution::dirac(v(&[10.0]));
        for r in [RiskSpec::Expectation, RiskSpec::cvar(0.05).unwrap(), RiskSpec::mean_semideviation(0.5, 1.0).unwrap()] {
            let s = solve_lower_level(&pd, &d, &r, ScaleIndex::unit()).unwrap();
            assert_abs_diff_eq!(s.value, -20.0, epsilon = 1e-6);
            assert!(s.y_h.is_none());
        }
    }

    #[test]
    fn unsupported_risk_is_a_capability_error() {
        let pd = newsvendor(3.0);
        for r in [RiskSpec::var(0.1).unwrap(), RiskSpec::mean_semideviation(0.5, 2.0).unwrap()] {
            let e = solve_lower_level(&pd, &fig2(), &r, ScaleIndex::unit()).unwrap_err();
            assert!(e.is_capability());
        }
    }

    #[test]
    fn semideviation_newsvendor_by_hand() {
        // loss(x) = −3·min(x, d): at x ≤ 11 losses are 0 (w.p. 1/11) and −3x.
        // mean −30x/11, upside deviation 30x/11 w.p. 1/11 → E[dev] = 30x/121.
        // objective x − 30x/11 + λ·30x/121 with λ = 0.5 is decreasing, so x = 11.
        let pd = newsvendor(3.0);
        let r = RiskSpec::mean_semideviation(0.5, 1.0).unwrap();
        let s = solve_lower_level(&pd, &fig2(), &r, ScaleIndex::unit()).unwrap();
        let want = 11.0 - 30.0 + 0.5 * 30.0 * 11.0 / 121.0;
        assert_abs_diff_eq!(s.value, want, epsilon = 1e-6);
    }

    #[test]
    fn recourse_lp() {
        let pd = newsvendor(3.0);
        let r = solve_recourse(&pd, &v(&[11.0]), &v(&[4.0])).unwrap();
        assert_abs_diff_eq!(r.value, -12.0, epsilon = 1e-6);
        assert_abs_diff_eq!(r.y[0], 4.0, epsilon = 1e-6);
        let r0 = solve_recourse(&pd, &v(&[11.0]), &v(&[0.0])).unwrap();
        assert_abs_diff_eq!(r0.value, 0.0, epsilon = 1e-7);
    }

    #[test]
    fn assumption_checks() {
        let m = MomentInfo::from_slices(&[10.0], &[1.0]).unwrap();
        let rep = check_assumptions(&newsvendor(3.0), &m).unwrap();
        assert!(rep.nontrivial && rep.margin_condition);
        assert_abs_diff_eq!(rep.v0, -20.0, epsilon = 1e-6);
        let flat = check_assumptions(&newsvendor(1.0), &m).unwrap();
        assert!(!flat.nontrivial && !flat.margin_condition);
        let free = check_assumptions(&newsvendor(0.0), &m).unwrap();
        assert!(!free.nontrivial);
    }

    /// Two components, three products, identity demand links.
    fn small_instance(p: [f64; 3], b: f64) -> ProblemData {
        let a = DMatrix::from_row_slice(2, 3, &[1.0, 1.0, 0.0, 0.0, 1.0, 1.0]);
        ProblemData::new(
            v(&[1.0, 1.5]),
            DMatrix::from_row_slice(1, 2, &[1.0, 1.5]),
            v(&[b]),
            v(&p),
            a,
            DMatrix::identity(3, 3),
        )
        .unwrap()
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]

        #[test]
        fn v0_is_positively_homogeneous(
            p in proptest::array::uniform3(0.5f64..8.0), mu in proptest::array::uniform3(1.0f64..40.0),
            b in 1.0f64..200.0, k in prop::sample::select(vec![2.0, 5.0, 10.0]),
        ) {
            let pd = small_instance(p, b);
            let m = MomentInfo::from_slices(&mu, &[1.0; 3]).unwrap();
            let base = solve_v0(&pd, &m, ScaleIndex::unit()).unwrap().value;
            let big = solve_v0(&pd, &m, ScaleIndex::new(k, 1.0).unwrap()).unwrap().value;
            prop_assert!((big - k * base).abs() <= 1e-6 * (k * base).abs().max(1.0));
        }

        #[test]
        fn expectation_two_point_is_above_v0(
            p in proptest::array::uniform3(0.5f64..8.0), mu in proptest::array::uniform3(5.0f64..40.0),
            sig in proptest::array::uniform3(0.0f64..5.0), eta in 0.0f64..=1.0, b in 1.0f64..200.0,
        ) {
            let pd = small_instance(p, b);
            let m = MomentInfo::from_slices(&mu, &sig).unwrap();
            let params = MechanismParams::from_ratio(&m, 1.0, eta).unwrap();
            let d2 = build_two_point(&m.mu, &params, ScaleIndex::unit()).unwrap();
            let v0 = solve_v0(&pd, &m, ScaleIndex::unit()).unwrap().value;
            let vt = solve_lower_level(&pd, &d2, &RiskSpec::Expectation, ScaleIndex::unit()).unwrap().value;
            prop_assert!(vt >= v0 - 1e-6 * v0.abs().max(1.0));
        }

        #[test]
        fn larger_budget_never_hurts(
            p in proptest::array::uniform3(0.5f64..8.0), b in 1.0f64..100.0, extra in 0.0f64..100.0,
        ) {
            let m = MomentInfo::from_slices(&[10.0, 20.0, 30.0], &[1.0; 3]).unwrap();
            let lo = solve_v0(&small_instance(p, b), &m, ScaleIndex::unit()).unwrap().value;
            let hi = solve_v0(&small_instance(p, b + extra), &m, ScaleIndex::unit()).unwrap().value;
            prop_assert!(hi <= lo + 1e-6 * lo.abs().max(1.0));
        }

        #[test]
        fn cvar_epigraph_matches_evaluated_risk(
            p in proptest::array::uniform3(0.5f64..8.0), mu in proptest::array::uniform3(5.0f64..40.0),
            sig in proptest::array::uniform3(0.5f64..5.0), eta in 0.05f64..=1.0, beta in 0.05f64..0.95,
            b in 1.0f64..200.0,
        ) {
            let pd = small_instance(p, b);
            let m = MomentInfo::from_slices(&mu, &sig).unwrap();
            let params = MechanismParams::from_ratio(&m, 1.0, eta).unwrap();
            let d2 = build_two_point(&m.mu, &params, ScaleIndex::unit()).unwrap();
            let r = RiskSpec::cvar(beta).unwrap();
            let s = solve_lower_level(&pd, &d2, &r, ScaleIndex::unit()).unwrap();
            let lossl = -pd.p().dot(&s.y_l);
            let lossh = -pd.p().dot(s.y_h.as_ref().unwrap());
            let law = DiscreteLossDistribution::new(vec![(lossl, 1.0 - d2.tau), (lossh, d2.tau)]).unwrap();
            let direct = pd.c().dot(&s.x) + evaluate_risk(&r, &law);
            prop_assert!((direct - s.value).abs() <= 1e-7 * s.value.abs().max(1.0));
        }
    }
}

//! Risk measures on finite loss distributions.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A law-invariant risk measure applied to losses (larger is worse).
///
/// The semideviation exponent is called `q` here; the usual symbol clashes
/// with the CVaR level.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", try_from = "RawRisk")]
pub enum RiskSpec {
    Expectation,
    /// Conditional value-at-risk: mean of the worst `beta` probability mass.
    Cvar { beta: f64 },
    /// Value-at-risk: smallest `t` with `P(loss ≤ t) ≥ 1 − beta`.
    Var { beta: f64 },
    MeanSemideviation { lambda: f64, q: f64 },
}

#[derive(Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
enum RawRisk {
    Expectation,
    Cvar { beta: f64 },
    Var { beta: f64 },
    MeanSemideviation {
        lambda: f64,
        #[serde(default = "one")]
        q: f64,
    },
}

fn one() -> f64 {
    1.0
}

impl TryFrom<RawRisk> for RiskSpec {
    type Error = Error;
    fn try_from(r: RawRisk) -> Result<Self> {
        match r {
            RawRisk::Expectation => Ok(RiskSpec::Expectation),
            RawRisk::Cvar { beta } => RiskSpec::cvar(beta),
            RawRisk::Var { beta } => RiskSpec::var(beta),
            RawRisk::MeanSemideviation { lambda, q } => RiskSpec::mean_semideviation(lambda, q),
        }
    }
}

fn check_beta(beta: f64) -> Result<()> {
    if beta > 0.0 && beta < 1.0 {
        Ok(())
    } else {
        Err(Error::domain(format!("beta must lie in (0, 1), got {beta}")))
    }
}

impl RiskSpec {
    pub fn cvar(beta: f64) -> Result<Self> {
        check_beta(beta)?;
        Ok(RiskSpec::Cvar { beta })
    }

    pub fn var(beta: f64) -> Result<Self> {
        check_beta(beta)?;
        Ok(RiskSpec::Var { beta })
    }

    pub fn mean_semideviation(lambda: f64, q: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&lambda) {
            return Err(Error::domain(format!("lambda must lie in [0, 1], got {lambda}")));
        }
        if !(1.0..=2.0).contains(&q) {
            return Err(Error::domain(format!("q must lie in [1, 2], got {q}")));
        }
        Ok(RiskSpec::MeanSemideviation { lambda, q })
    }

    /// Whether the measure can appear inside an LP in this crate.
    pub fn is_optimizable(&self) -> bool {
        match self {
            RiskSpec::Expectation | RiskSpec::Cvar { .. } => true,
            RiskSpec::MeanSemideviation { q, .. } => *q == 1.0,
            RiskSpec::Var { .. } => false,
        }
    }

    pub(crate) fn require_optimizable(&self) -> Result<()> {
        if self.is_optimizable() {
            return Ok(());
        }
        Err(Error::capability(match self {
            RiskSpec::Var { .. } => "VaR is evaluation-only and cannot be optimized".to_string(),
            RiskSpec::MeanSemideviation { q, .. } => {
                format!("mean-semideviation with q = {q} is evaluation-only; only q = 1 can be optimized")
            }
            _ => unreachable!(),
        }))
    }
}

/// Standard risk coefficient: the largest risk of a zero-mean, unit-variance loss.
pub fn standard_coefficient(r: &RiskSpec) -> f64 {
    match *r {
        RiskSpec::Expectation => 0.0,
        RiskSpec::Cvar { beta } | RiskSpec::Var { beta } => ((1.0 - beta) / beta).sqrt(),
        RiskSpec::MeanSemideviation { lambda, .. } => lambda,
    }
}

const PROB_TOL: f64 = 1e-10;

/// Finite loss law. Zero-probability atoms are dropped on construction.
#[derive(Debug, Clone, PartialEq)]
pub struct DiscreteLossDistribution {
    atoms: Vec<(f64, f64)>,
}

impl DiscreteLossDistribution {
    /// `atoms` are `(loss, probability)` pairs.
    pub fn new(atoms: Vec<(f64, f64)>) -> Result<Self> {
        if atoms.iter().any(|&(l, p)| !l.is_finite() || !p.is_finite() || p < 0.0) {
            return Err(Error::domain("atoms must have finite losses and nonnegative probabilities"));
        }
        let atoms: Vec<(f64, f64)> = atoms.into_iter().filter(|&(_, p)| p > 0.0).collect();
        if atoms.is_empty() {
            return Err(Error::domain("loss distribution has no atoms"));
        }
        let total: f64 = atoms.iter().map(|a| a.1).sum();
        if (total - 1.0).abs() > PROB_TOL {
            return Err(Error::domain(format!("probabilities sum to {total}, not 1")));
        }
        Ok(DiscreteLossDistribution { atoms })
    }

    /// Equal-weight empirical law.
    pub fn empirical(losses: &[f64]) -> Result<Self> {
        if losses.is_empty() {
            return Err(Error::domain("loss distribution has no atoms"));
        }
        let w = 1.0 / losses.len() as f64;
        Self::new(losses.iter().map(|&l| (l, w)).collect())
    }

    pub fn atoms(&self) -> &[(f64, f64)] {
        &self.atoms
    }

    pub fn mean(&self) -> f64 {
        self.atoms.iter().map(|(l, p)| l * p).sum()
    }
}

/// Exact risk of a finite law. CVaR splits the atom straddling the tail
/// boundary, so it is exact for arbitrary weights.
pub fn evaluate_risk(r: &RiskSpec, d: &DiscreteLossDistribution) -> f64 {
    match *r {
        RiskSpec::Expectation => d.mean(),
        RiskSpec::Cvar { beta } => {
            let mut sorted = d.atoms.clone();
            sorted.sort_by(|a, b| b.0.total_cmp(&a.0));
            let mut remaining = beta;
            let mut acc = 0.0;
            for (l, p) in sorted {
                if remaining <= 0.0 {
                    break;
                }
                let take = p.min(remaining);
                acc += take * l;
                remaining -= take;
            }
            // Rounding in the probabilities can leave a sliver of the tail
            // unassigned; it belongs to the smallest loss, which is never
            // reached with valid inputs. Normalize by the mass actually taken.
            acc / (beta - remaining.max(0.0))
        }
        RiskSpec::Var { beta } => {
            let mut sorted = d.atoms.clone();
            sorted.sort_by(|a, b| a.0.total_cmp(&b.0));
            let target = 1.0 - beta - PROB_TOL;
            let mut cum = 0.0;
            for &(l, p) in &sorted {
                cum += p;
                if cum >= target {
                    return l;
                }
            }
            sorted.last().unwrap().0
        }
        RiskSpec::MeanSemideviation { lambda, q } => {
            let m = d.mean();
            let dev: f64 = d.atoms.iter().map(|&(l, p)| p * (l - m).max(0.0).powf(q)).sum();
            m + lambda * dev.powf(1.0 / q)
        }
    }
}

/// Number of tail samples in the empirical CVaR rule: ⌈βn⌉, guarded against
/// products like 0.05·100 that land a hair above an integer.
pub fn tail_count(beta: f64, n: usize) -> usize {
    let raw = beta * n as f64;
    let nearest = raw.round();
    let count = if (raw - nearest).abs() <= 1e-9 * raw.max(1.0) { nearest } else { raw.ceil() };
    (count as usize).clamp(1, n)
}

/// Empirical risk of equal-weight samples. CVaR uses the average of the
/// ⌈βn⌉ largest losses; other measures use [`evaluate_risk`].
///
/// The ⌈βn⌉ rule equals exact CVaR only when βn is an integer; otherwise it
/// puts slightly more weight on the tail.
pub fn empirical_risk(r: &RiskSpec, losses: &[f64]) -> Result<f64> {
    if losses.is_empty() {
        return Err(Error::domain("no samples"));
    }
    match *r {
        RiskSpec::Cvar { beta } => {
            let m = tail_count(beta, losses.len());
            let mut sorted = losses.to_vec();
            sorted.sort_by(|a, b| b.total_cmp(a));
            Ok(sorted[..m].iter().sum::<f64>() / m as f64)
        }
        _ => Ok(evaluate_risk(r, &DiscreteLossDistribution::empirical(losses)?)),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    fn dist(atoms: &[(f64, f64)]) -> DiscreteLossDistribution {
        DiscreteLossDistribution::new(atoms.to_vec()).unwrap()
    }

    /// Rockafellar–Uryasev objective minimized over candidate thresholds.
    fn cvar_by_grid(beta: f64, d: &DiscreteLossDistribution) -> f64 {
        d.atoms()
            .iter()
            .map(|&(t, _)| t + d.atoms().iter().map(|&(l, p)| p * (l - t).max(0.0)).sum::<f64>() / beta)
            .fold(f64::INFINITY, f64::min)
    }

    #[test]
    fn coefficients() {
        assert_eq!(standard_coefficient(&RiskSpec::cvar(0.5).unwrap()), 1.0);
        assert_eq!(standard_coefficient(&RiskSpec::Expectation), 0.0);
        assert_eq!(standard_coefficient(&RiskSpec::mean_semideviation(0.3, 1.0).unwrap()), 0.3);
        assert_abs_diff_eq!(standard_coefficient(&RiskSpec::var(0.2).unwrap()), 2.0, epsilon = 1e-15);
    }

    #[test]
    fn spec_examples() {
        let cvar = RiskSpec::cvar(0.5).unwrap();
        assert_abs_diff_eq!(evaluate_risk(&cvar, &dist(&[(0.0, 0.5), (10.0, 0.5)])), 10.0, epsilon = 1e-12);

        let d = dist(&[(0.0, 1.0 / 11.0), (-33.0, 10.0 / 11.0)]);
        assert_abs_diff_eq!(evaluate_risk(&cvar, &d), -27.0, epsilon = 1e-12);
        assert_abs_diff_eq!(cvar_by_grid(0.5, &d), -27.0, epsilon = 1e-12);

        let var = RiskSpec::var(0.4).unwrap();
        assert_eq!(evaluate_risk(&var, &dist(&[(0.0, 0.5), (10.0, 0.5)])), 10.0);
    }

    #[test]
    fn semideviation_by_hand() {
        // mean 2.5; upside deviations (7.5 w.p. 0.25) → E = 1.875
        let d = dist(&[(0.0, 0.75), (10.0, 0.25)]);
        let r = RiskSpec::mean_semideviation(0.4, 1.0).unwrap();
        assert_abs_diff_eq!(evaluate_risk(&r, &d), 2.5 + 0.4 * 1.875, epsilon = 1e-12);
        let r2 = RiskSpec::mean_semideviation(1.0, 2.0).unwrap();
        assert_abs_diff_eq!(evaluate_risk(&r2, &d), 2.5 + (0.25f64 * 56.25).sqrt(), epsilon = 1e-12);
    }

    #[test]
    fn construction_errors() {
        assert!(DiscreteLossDistribution::new(vec![]).is_err());
        assert!(DiscreteLossDistribution::new(vec![(1.0, 0.5)]).is_err());
        assert!(DiscreteLossDistribution::new(vec![(f64::NAN, 1.0)]).is_err());
        assert!(DiscreteLossDistribution::empirical(&[]).is_err());
        assert!(RiskSpec::cvar(0.0).is_err());
        assert!(RiskSpec::cvar(1.0).is_err());
        assert!(RiskSpec::mean_semideviation(1.5, 1.0).is_err());
        assert!(RiskSpec::mean_semideviation(0.5, 3.0).is_err());
        // zero-probability atoms vanish
        assert_eq!(dist(&[(5.0, 0.0), (1.0, 1.0)]).atoms().len(), 1);
    }

    #[test]
    fn serde_format() {
        let r: RiskSpec = serde_json::from_str(r#"{"kind":"cvar","beta":0.05}"#).unwrap();
        assert_eq!(r, RiskSpec::Cvar { beta: 0.05 });
        assert_eq!(serde_json::to_string(&r).unwrap(), r#"{"kind":"cvar","beta":0.05}"#);
        let r: RiskSpec = serde_json::from_str(r#"{"kind":"mean_semideviation","lambda":0.3}"#).unwrap();
        assert_eq!(r, RiskSpec::MeanSemideviation { lambda: 0.3, q: 1.0 });
        assert!(serde_json::from_str::<RiskSpec>(r#"{"kind":"cvar","beta":1.5}"#).is_err());
        let e: RiskSpec = serde_json::from_str(r#"{"kind":"expectation"}"#).unwrap();
        assert_eq!(e, RiskSpec::Expectation);
    }

    #[test]
    fn optimizable_variants() {
        assert!(RiskSpec::Expectation.require_optimizable().is_ok());
        assert!(RiskSpec::cvar(0.1).unwrap().require_optimizable().is_ok());
        assert!(RiskSpec::mean_semideviation(0.1, 1.0).unwrap().require_optimizable().is_ok());
        let e = RiskSpec::var(0.1).unwrap().require_optimizable().unwrap_err();
        assert!(e.is_capability() && e.to_string().contains("VaR"));
        let e = RiskSpec::mean_semideviation(0.1, 1.5).unwrap().require_optimizable().unwrap_err();
        assert!(e.is_capability() && e.to_string().contains("q = 1.5"));
    }

    #[test]
    fn tail_count_guards_rounding() {
        assert_eq!(tail_count(0.05, 100), 5);
        assert_eq!(tail_count(0.05, 1000), 50);
        assert_eq!(tail_count(0.05, 11), 1);
        assert_eq!(tail_count(0.05, 20), 1);
        assert_eq!(tail_count(0.3, 10), 3);
        assert_eq!(tail_count(0.25, 10), 3);
    }

    #[test]
    fn empirical_rule_matches_exact_cvar_on_integer_tails() {
        let losses: Vec<f64> = (0..40).map(|i| ((i * 37) % 23) as f64 - 7.0).collect();
        for beta in [0.05, 0.1, 0.25, 0.5, 0.75] {
            let r = RiskSpec::cvar(beta).unwrap();
            let exact = evaluate_risk(&r, &DiscreteLossDistribution::empirical(&losses).unwrap());
            assert_abs_diff_eq!(empirical_risk(&r, &losses).unwrap(), exact, epsilon = 1e-12);
        }
        // non-integer βn: the rule averages one whole sample, exact CVaR does not
        let r = RiskSpec::cvar(0.05).unwrap();
        let l = [0.0, 10.0, 10.0, 10.0, 10.0, 10.0, 10.0, 10.0, 10.0, 10.0, 10.0];
        assert_eq!(empirical_risk(&r, &l).unwrap(), 10.0);
    }

    fn risk_strategy() -> impl Strategy<Value = RiskSpec> {
        prop_oneof![
            Just(RiskSpec::Expectation),
            (0.01f64..0.99).prop_map(|b| RiskSpec::Cvar { beta: b }),
            (0.01f64..0.99).prop_map(|b| RiskSpec::Var { beta: b }),
            (0.0f64..1.0, 1.0f64..2.0).prop_map(|(l, q)| RiskSpec::MeanSemideviation { lambda: l, q }),
        ]
    }

    fn dist_strategy() -> impl Strategy<Value = Vec<(f64, f64)>> {
        proptest::collection::vec((-100.0f64..100.0, 0.01f64..1.0), 1..8).prop_map(|v| {
            let total: f64 = v.iter().map(|a| a.1).sum();
            v.into_iter().map(|(l, w)| (l, w / total)).collect()
        })
    }

    proptest! {
        #[test]
        fn translation_invariance(r in risk_strategy(), atoms in dist_strategy(), t in -50.0f64..50.0) {
            let base = evaluate_risk(&r, &dist(&atoms));
            let shifted: Vec<_> = atoms.iter().map(|&(l, p)| (l + t, p)).collect();
            prop_assert!((evaluate_risk(&r, &dist(&shifted)) - base - t).abs() <= 1e-9);
        }

        #[test]
        fn positive_homogeneity(r in risk_strategy(), atoms in dist_strategy(), lam in 0.0f64..10.0) {
            let base = evaluate_risk(&r, &dist(&atoms));
            let scaled: Vec<_> = atoms.iter().map(|&(l, p)| (l * lam, p)).collect();
            prop_assert!((evaluate_risk(&r, &dist(&scaled)) - lam * base).abs() <= 1e-9 * (1.0 + lam * base.abs()));
        }

        #[test]
        fn monotonicity(r in risk_strategy(), atoms in dist_strategy(), bumps in proptest::collection::vec(0.0f64..5.0, 8)) {
            let base = evaluate_risk(&r, &dist(&atoms));
            let bigger: Vec<_> = atoms.iter().zip(&bumps).map(|(&(l, p), b)| (l + b, p)).collect();
            prop_assert!(evaluate_risk(&r, &dist(&bigger)) >= base - 1e-9);
        }

        #[test]
        fn cvar_dominates_mean_and_min(beta in 0.01f64..0.99, atoms in dist_strategy()) {
            let d = dist(&atoms);
            let cvar = evaluate_risk(&RiskSpec::Cvar { beta }, &d);
            let mean = d.mean();
            let min = atoms.iter().map(|a| a.0).fold(f64::INFINITY, f64::min);
            prop_assert!(cvar >= mean - 1e-9);
            prop_assert!(mean >= min - 1e-9);
        }

        #[test]
        fn cvar_equals_grid_minimization(beta in 0.01f64..0.99, atoms in dist_strategy()) {
            let d = dist(&atoms);
            let sorted = evaluate_risk(&RiskSpec::Cvar { beta }, &d);
            prop_assert!((sorted - cvar_by_grid(beta, &d)).abs() <= 1e-9 * (1.0 + sorted.abs()));
        }
    }
}

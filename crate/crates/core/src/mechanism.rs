//! Two-point forecast distributions.
//!
//! Given mean `μ`, spread `ς` and probability `τ`, the mechanism communicates
//!
//! ```text
//! d_l = kμ − sqrt(τ/(1−τ)) k^{s/2} ς   with probability 1 − τ
//! d_h = kμ + sqrt((1−τ)/τ) k^{s/2} ς   with probability τ
//! ```
//!
//! whose mean is `kμ` and marginal variance `k^s ς²`. Keeping `τ ≤ τ_max`
//! guarantees `d_l ≥ 0`.

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{MomentInfo, ScaleIndex, WassersteinInfo};

/// Output of a mechanism. `tau` is the probability of `d_h`; `tau == 0`
/// marks the Dirac distribution at `d_l == d_h`.
#[derive(Debug, Clone, PartialEq)]
pub struct TwoPointDistribution {
    pub d_l: DVector<f64>,
    pub d_h: DVector<f64>,
    pub tau: f64,
}

impl TwoPointDistribution {
    pub fn dirac(d: DVector<f64>) -> Self {
        TwoPointDistribution { d_l: d.clone(), d_h: d, tau: 0.0 }
    }

    pub fn is_dirac(&self) -> bool {
        self.tau == 0.0 || self.d_l == self.d_h
    }

    /// `(probability, atom)` pairs with positive probability.
    pub fn scenarios(&self) -> Vec<(f64, &DVector<f64>)> {
        if self.is_dirac() {
            vec![(1.0, &self.d_l)]
        } else {
            vec![(1.0 - self.tau, &self.d_l), (self.tau, &self.d_h)]
        }
    }

    pub fn mean(&self) -> DVector<f64> {
        &self.d_l * (1.0 - self.tau) + &self.d_h * self.tau
    }

    pub fn marginal_variance(&self) -> DVector<f64> {
        let m = self.mean();
        let lo = (&self.d_l - &m).map(|v| v * v);
        let hi = (&self.d_h - &m).map(|v| v * v);
        lo * (1.0 - self.tau) + hi * self.tau
    }

    /// Componentwise largest atom.
    pub fn d_max(&self) -> &DVector<f64> {
        &self.d_h
    }
}

/// Spread and probability of a mechanism.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MechanismParams {
    #[serde(with = "crate::linalg::serde_vector")]
    pub varsigma: DVector<f64>,
    pub tau: f64,
}

impl MechanismParams {
    /// Ratio form: `ς = κσ`, `τ = η·τ_max(μ, ς)`.
    pub fn from_ratio(m: &MomentInfo, kappa: f64, eta: f64) -> Result<Self> {
        for (name, v) in [("kappa", kappa), ("eta", eta)] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::domain(format!("{name} must lie in [0, 1], got {v}")));
            }
        }
        let varsigma = &m.sigma * kappa;
        let tau = eta * tau_max(&m.mu, &varsigma)?;
        Ok(MechanismParams { varsigma, tau })
    }

    /// Expectation mechanism: Dirac at the scaled mean.
    pub fn dirac(n: usize) -> Self {
        MechanismParams { varsigma: DVector::zeros(n), tau: 0.0 }
    }

    pub fn is_dirac(&self) -> bool {
        self.tau == 0.0 || self.varsigma.iter().all(|&v| v == 0.0)
    }

    /// Checks `0 ≤ ς ≤ bound` componentwise.
    pub fn check_spread(&self, bound: &DVector<f64>) -> Result<()> {
        if self.varsigma.len() != bound.len() {
            return Err(Error::shape(format!(
                "varsigma has length {}, bound {}",
                self.varsigma.len(),
                bound.len()
            )));
        }
        for (i, (&v, &b)) in self.varsigma.iter().zip(bound.iter()).enumerate() {
            if !(v >= 0.0) || v > b * (1.0 + 1e-12) {
                return Err(Error::domain(format!("varsigma[{i}] = {v} outside [0, {b}]")));
            }
        }
        Ok(())
    }
}

/// Probability given either as a float or as an exact fraction.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum TauValue {
    Rational { num: u64, den: u64 },
    Float(f64),
}

impl TauValue {
    pub fn value(&self) -> Result<f64> {
        match *self {
            TauValue::Float(t) => Ok(t),
            TauValue::Rational { den: 0, .. } => Err(Error::domain("tau denominator is zero")),
            TauValue::Rational { num, den } => Ok(num as f64 / den as f64),
        }
    }
}

/// Mechanism as written in configuration files.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum MechanismConfig {
    Ratio { kappa: f64, eta: f64 },
    Explicit {
        #[serde(with = "crate::linalg::serde_vector")]
        varsigma: DVector<f64>,
        tau: TauValue,
    },
}

impl MechanismConfig {
    /// Resolves against the moment bounds, enforcing `ς ≤ σ` and `τ ≤ τ_max`.
    pub fn resolve(&self, m: &MomentInfo) -> Result<MechanismParams> {
        let params = match self {
            MechanismConfig::Ratio { kappa, eta } => MechanismParams::from_ratio(m, *kappa, *eta)?,
            MechanismConfig::Explicit { varsigma, tau } => {
                MechanismParams { varsigma: varsigma.clone(), tau: tau.value()? }
            }
        };
        params.check_spread(&m.sigma)?;
        let tmax = tau_max(&m.mu, &params.varsigma)?;
        if !(0.0..=tmax).contains(&params.tau) {
            return Err(Error::domain(format!("tau = {} outside [0, tau_max = {tmax}]", params.tau)));
        }
        Ok(params)
    }
}

/// `τ_max = γ²/(1+γ²)` with `γ = min μ_i/ς_i` over coordinates with `ς_i > 0`.
/// Returns 1 when every `ς_i` is zero.
pub fn tau_max(mu: &DVector<f64>, varsigma: &DVector<f64>) -> Result<f64> {
    if mu.len() != varsigma.len() {
        return Err(Error::shape(format!("mu has length {}, varsigma {}", mu.len(), varsigma.len())));
    }
    let mut gamma = f64::INFINITY;
    for (i, (&m, &v)) in mu.iter().zip(varsigma.iter()).enumerate() {
        if v < 0.0 || !v.is_finite() {
            return Err(Error::domain(format!("varsigma[{i}] = {v} is not a finite nonnegative number")));
        }
        if v > 0.0 {
            if m <= 0.0 {
                return Err(Error::domain(format!(
                    "mu[{i}] = {m} with positive spread forces tau_max = 0"
                )));
            }
            gamma = gamma.min(m / v);
        }
    }
    if gamma.is_infinite() {
        return Ok(1.0);
    }
    let g2 = gamma * gamma;
    Ok(g2 / (1.0 + g2))
}

/// Relative slack below zero that is attributed to rounding in `d_l`.
const NONNEG_SLACK: f64 = 1e-9;

/// Builds the two-point law. `τ = 0` or `ς = 0` gives the Dirac at `kμ`.
pub fn build_two_point(
    mu: &DVector<f64>,
    params: &MechanismParams,
    idx: ScaleIndex,
) -> Result<TwoPointDistribution> {
    let tmax = tau_max(mu, &params.varsigma)?;
    let tau = params.tau;
    if !(tau >= 0.0) {
        return Err(Error::domain(format!("tau = {tau} is negative")));
    }
    if tau > tmax {
        return Err(Error::domain(format!("tau = {tau} exceeds tau_max = {tmax}")));
    }
    let center = mu * idx.k;
    if params.is_dirac() {
        return Ok(TwoPointDistribution::dirac(center));
    }
    let spread = &params.varsigma * idx.spread_factor();
    let down = (tau / (1.0 - tau)).sqrt();
    let up = ((1.0 - tau) / tau).sqrt();
    let mut d_l = &center - &spread * down;
    let d_h = &center + &spread * up;
    for i in 0..d_l.len() {
        if d_l[i] < 0.0 {
            // τ ≤ τ_max and k ≥ 1 give d_l ≥ (k − k^{s/2}) min μ ≥ 0 exactly;
            // anything beyond rounding means a broken precondition.
            assert!(
                d_l[i] >= -NONNEG_SLACK * center[i].max(1.0),
                "low atom coordinate {i} is {} despite tau <= tau_max",
                d_l[i]
            );
            d_l[i] = 0.0;
        }
    }
    Ok(TwoPointDistribution { d_l, d_h, tau })
}

/// Constant spread bound `sqrt(2·tr Σ̂ + 2ε²)` for the Wasserstein outer approximation.
pub fn wasserstein_sigma_hat(w: &WassersteinInfo) -> DVector<f64> {
    let v = (2.0 * w.sigma_hat.trace() + 2.0 * w.epsilon * w.epsilon).sqrt();
    DVector::from_element(w.mu_hat.len(), v)
}

/// Membership in the moment outer approximation of the scaled Wasserstein ball:
/// `‖mean − kμ̂‖ ≤ k^{s/2}ε` and `var_i ≤ k^s σ̂_i²`.
pub fn outer_membership(
    mean: &DVector<f64>,
    marginal_vars: &DVector<f64>,
    w: &WassersteinInfo,
    idx: ScaleIndex,
) -> bool {
    let n = w.mu_hat.len();
    if mean.len() != n || marginal_vars.len() != n {
        return false;
    }
    const REL: f64 = 1e-12;
    let radius = idx.spread_factor() * w.epsilon;
    let center = &w.mu_hat * idx.k;
    let dist = (mean - &center).norm();
    if dist > radius + REL * (1.0 + center.norm()) {
        return false;
    }
    let sig = wasserstein_sigma_hat(w);
    marginal_vars
        .iter()
        .zip(sig.iter())
        .all(|(&v, &s)| v <= idx.variance_factor() * s * s * (1.0 + REL) + REL)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use nalgebra::DMatrix;
    use proptest::prelude::*;

    fn v(xs: &[f64]) -> DVector<f64> {
        DVector::from_column_slice(xs)
    }

    #[test]
    fn tau_max_examples() {
        let s10 = 10f64.sqrt();
        assert_abs_diff_eq!(tau_max(&v(&[10.0]), &v(&[s10])).unwrap(), 10.0 / 11.0, epsilon = 1e-15);
        assert_eq!(tau_max(&v(&[10.0]), &v(&[0.0])).unwrap(), 1.0);
        let t = tau_max(&v(&[20.0, 40.0]), &v(&[20f64.sqrt(), 40f64.sqrt()])).unwrap();
        assert_abs_diff_eq!(t, 20.0 / 21.0, epsilon = 1e-14);
        assert!(matches!(tau_max(&v(&[0.0]), &v(&[1.0])), Err(Error::Domain(_))));
        // zero-spread coordinates impose nothing even at zero mean
        assert_abs_diff_eq!(tau_max(&v(&[0.0, 1.0]), &v(&[0.0, 1.0])).unwrap(), 0.5, epsilon = 1e-15);
    }

    #[test]
    fn build_examples() {
        let s10 = 10f64.sqrt();
        let mu = v(&[10.0]);
        let p = MechanismParams { varsigma: v(&[s10]), tau: 10.0 / 11.0 };
        let d = build_two_point(&mu, &p, ScaleIndex::unit()).unwrap();
        assert_abs_diff_eq!(d.d_l[0], 0.0, epsilon = 1e-12);
        assert_abs_diff_eq!(d.d_h[0], 11.0, epsilon = 1e-12);
        assert_eq!(d.tau, 10.0 / 11.0);

        let dirac = build_two_point(&mu, &MechanismParams { varsigma: v(&[s10]), tau: 0.0 }, ScaleIndex::unit()).unwrap();
        assert!(dirac.is_dirac());
        assert_eq!(dirac.d_l[0], 10.0);
        assert_eq!(dirac.scenarios().len(), 1);

        let d4 = build_two_point(&mu, &p, ScaleIndex::new(4.0, 1.0).unwrap()).unwrap();
        assert_abs_diff_eq!(d4.d_l[0], 20.0, epsilon = 1e-12);
        assert_abs_diff_eq!(d4.d_h[0], 42.0, epsilon = 1e-12);

        let too_big = MechanismParams { varsigma: v(&[s10]), tau: 0.95 };
        assert!(matches!(build_two_point(&mu, &too_big, ScaleIndex::unit()), Err(Error::Domain(_))));
    }

    #[test]
    fn ratio_form_and_config() {
        let m = MomentInfo::from_slices(&[10.0], &[10f64.sqrt()]).unwrap();
        let p = MechanismParams::from_ratio(&m, 1.0, 1.0).unwrap();
        assert_abs_diff_eq!(p.tau, 10.0 / 11.0, epsilon = 1e-15);
        let p0 = MechanismParams::from_ratio(&m, 0.0, 0.7).unwrap();
        assert!(p0.is_dirac());
        assert!(MechanismParams::from_ratio(&m, 1.2, 0.5).is_err());

        let cfg: MechanismConfig = serde_json::from_str(r#"{"kappa":0.5,"eta":1}"#).unwrap();
        assert_eq!(cfg, MechanismConfig::Ratio { kappa: 0.5, eta: 1.0 });
        let cfg: MechanismConfig =
            serde_json::from_str(&format!(r#"{{"varsigma":[{}],"tau":{{"num":10,"den":11}}}}"#, 10f64.sqrt())).unwrap();
        let p = cfg.resolve(&m).unwrap();
        assert_eq!(p.tau, 10.0 / 11.0);
        let d = build_two_point(&m.mu, &p, ScaleIndex::unit()).unwrap();
        assert_abs_diff_eq!(d.d_l[0], 0.0, epsilon = 1e-12);

        let wide: MechanismConfig = serde_json::from_str(r#"{"varsigma":[4],"tau":0.1}"#).unwrap();
        assert!(wide.resolve(&m).is_err());
        let late: MechanismConfig = serde_json::from_str(r#"{"varsigma":[1],"tau":0.999}"#).unwrap();
        assert!(late.resolve(&m).is_err());
    }

    #[test]
    fn sigma_hat_examples() {
        let one = WassersteinInfo::new(v(&[1.0]), DMatrix::from_element(1, 1, 1.0), 0.0).unwrap();
        assert_abs_diff_eq!(wasserstein_sigma_hat(&one)[0], 2f64.sqrt(), epsilon = 1e-15);
        let zero = WassersteinInfo::new(v(&[1.0]), DMatrix::zeros(1, 1), 0.0).unwrap();
        assert_eq!(wasserstein_sigma_hat(&zero)[0], 0.0);
        let two = WassersteinInfo::new(v(&[1.0, 1.0]), DMatrix::from_diagonal(&v(&[2.0, 3.0])), 1.0).unwrap();
        let s = wasserstein_sigma_hat(&two);
        assert_abs_diff_eq!(s[0], 12f64.sqrt(), epsilon = 1e-15);
        assert_abs_diff_eq!(s[1], 12f64.sqrt(), epsilon = 1e-15);
    }

    #[test]
    fn outer_membership_examples() {
        let w = WassersteinInfo::new(v(&[5.0, 8.0]), DMatrix::from_diagonal(&v(&[1.0, 2.0])), 0.5).unwrap();
        let idx = ScaleIndex::new(3.0, 1.5).unwrap();
        let sig = wasserstein_sigma_hat(&w);
        let params = MechanismParams::from_ratio(&MomentInfo::new(w.mu_hat.clone(), sig).unwrap(), 0.8, 0.6).unwrap();
        let d = build_two_point(&w.mu_hat, &params, idx).unwrap();
        assert!(outer_membership(&d.mean(), &d.marginal_variance(), &w, idx));

        let center = &w.mu_hat * idx.k;
        assert!(outer_membership(&center, &DVector::zeros(2), &w, idx));
        let mut off = center.clone();
        off[0] += 2.0 * idx.spread_factor() * w.epsilon;
        assert!(!outer_membership(&off, &DVector::zeros(2), &w, idx));
    }

    #[test]
    fn small_tau_approaches_the_mean() {
        let mu = v(&[10.0, 4.0]);
        let vs = v(&[3.0, 1.0]);
        for tau in [1e-2, 1e-4, 1e-6] {
            let d = build_two_point(&mu, &MechanismParams { varsigma: vs.clone(), tau }, ScaleIndex::unit()).unwrap();
            // |d_l − μ| = sqrt(τ/(1−τ))·ς ≤ 2 sqrt(τ) ς
            for i in 0..2 {
                assert!((d.d_l[i] - mu[i]).abs() <= 2.0 * tau.sqrt() * vs[i]);
                assert!(tau * d.d_h[i] <= tau * mu[i] + 2.0 * tau.sqrt() * vs[i]);
            }
        }
    }

    fn draw() -> impl Strategy<Value = (Vec<f64>, Vec<f64>, Vec<f64>, f64, f64, f64)> {
        (1usize..6).prop_flat_map(|n| {
            (
                proptest::collection::vec(0.5f64..100.0, n),
                proptest::collection::vec(0.0f64..30.0, n),
                proptest::collection::vec(0.0f64..=1.0, n),
                0.0f64..=1.0,
                1.0f64..50.0,
                1.0f64..1.999,
            )
        })
    }

    proptest! {
        #[test]
        fn moment_identities((mu, sigma, ratio, eta, k, s) in draw()) {
            let mu = v(&mu);
            let sigma = v(&sigma);
            let vs = sigma.component_mul(&v(&ratio));
            let tau = eta * tau_max(&mu, &vs).unwrap();
            let idx = ScaleIndex::new(k, s).unwrap();
            let d = build_two_point(&mu, &MechanismParams { varsigma: vs.clone(), tau }, idx).unwrap();
            let mean = d.mean();
            let var = d.marginal_variance();
            for i in 0..mu.len() {
                let target_mean = k * mu[i];
                prop_assert!((mean[i] - target_mean).abs() <= 1e-9 * target_mean.max(1.0));
                let target_var = if d.is_dirac() { 0.0 } else { idx.variance_factor() * vs[i] * vs[i] };
                prop_assert!((var[i] - target_var).abs() <= 1e-9 * target_var.max(1.0));
                prop_assert!(var[i] <= idx.variance_factor() * sigma[i] * sigma[i] * (1.0 + 1e-9) + 1e-9);
                prop_assert!(d.d_l[i] >= 0.0);
                prop_assert!(d.d_l[i] <= d.d_h[i]);
                let guard = (k - idx.spread_factor()) * mu.min();
                prop_assert!(d.d_l.min() >= guard - 1e-9 * k * mu.max());
            }
        }
    }
}

//! Asymptotic risk predictions in the proportional regime `d/n → γ > 1`.
//!
//! Identity covariance has closed forms through the Marchenko–Pastur
//! Stieltjes transform; general covariances go through the implicit systems
//! in `c₀` (ridgeless) and `m_n(−λ)` (ridge).

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::estimators::Algorithm;
use crate::model::SpectralDistribution;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TheoryLimit {
    pub algorithm: Algorithm,
    pub bias: f64,
    pub variance: f64,
    pub risk: f64,
    /// Heterogeneity radius, or `ρ` for the zero-collaboration baselines.
    pub r: f64,
    pub sigma: f64,
    pub gamma: f64,
    pub lambda: Option<f64>,
}

impl TheoryLimit {
    fn new(
        algorithm: Algorithm,
        bias: f64,
        variance: f64,
        r: f64,
        sigma: f64,
        gamma: f64,
        lambda: Option<f64>,
    ) -> Self {
        Self {
            algorithm,
            bias,
            variance,
            risk: bias + variance,
            r,
            sigma,
            gamma,
            lambda,
        }
    }

    fn relabel(mut self, algorithm: Algorithm) -> Self {
        self.algorithm = algorithm;
        self
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StieltjesMethod {
    ClosedForm,
    FixedPoint,
    /// Bisection on the monotone residual, used when the damped iteration
    /// fails to contract.
    Bisection,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StieltjesSolution {
    pub lambda: f64,
    pub gamma: f64,
    pub m: f64,
    pub m_prime: f64,
    pub method: StieltjesMethod,
}

fn check_gamma(gamma: f64) -> Result<()> {
    if gamma > 1.0 && gamma.is_finite() {
        Ok(())
    } else {
        Err(Error::DomainError(format!("gamma must exceed 1, got {gamma}")))
    }
}

fn check_lambda(lambda: f64) -> Result<()> {
    if lambda > 0.0 && lambda.is_finite() {
        Ok(())
    } else {
        Err(Error::DomainError(format!("lambda must be positive, got {lambda}")))
    }
}

fn check_nonneg(name: &str, x: f64) -> Result<()> {
    if x >= 0.0 && x.is_finite() {
        Ok(())
    } else {
        Err(Error::DomainError(format!(
            "{name} must be finite and nonnegative, got {x}"
        )))
    }
}

/// `m(−λ)` for the Marchenko–Pastur law with ratio `γ`.
///
/// With `b = 1 − γ + λ` the minus-branch root is `(√(b² + 4γλ) − b) / (2γλ)`;
/// for `b > 0` the rationalised form `2 / (b + √(b² + 4γλ))` avoids the
/// cancellation.
pub fn mp_stieltjes(lambda: f64, gamma: f64) -> Result<f64> {
    check_gamma(gamma)?;
    check_lambda(lambda)?;
    let b = 1.0 - gamma + lambda;
    let root = (b * b + 4.0 * gamma * lambda).sqrt();
    Ok(if b > 0.0 {
        2.0 / (b + root)
    } else {
        (root - b) / (2.0 * gamma * lambda)
    })
}

/// `m′(z)` at `z = −λ`, from differentiating `γzm² − (1−γ−z)m + 1 = 0`.
pub fn mp_stieltjes_deriv(lambda: f64, gamma: f64) -> Result<f64> {
    let m = mp_stieltjes(lambda, gamma)?;
    Ok((gamma * m * m + m) / ((1.0 - gamma + lambda) + 2.0 * gamma * lambda * m))
}

/// Fine-tuned FedAvg (and MAML) ridgeless limit.
pub fn ftfa_limit(r: f64, sigma: f64, gamma: f64) -> Result<TheoryLimit> {
    check_gamma(gamma)?;
    check_nonneg("r", r)?;
    check_nonneg("sigma", sigma)?;
    let bias = r * r * (1.0 - 1.0 / gamma);
    let variance = sigma * sigma / (gamma - 1.0);
    Ok(TheoryLimit::new(Algorithm::Ftfa, bias, variance, r, sigma, gamma, None))
}

/// Ridge-tuned FedAvg (and pFedMe) limit.
pub fn rtfa_limit(r: f64, sigma: f64, gamma: f64, lambda: f64) -> Result<TheoryLimit> {
    check_nonneg("r", r)?;
    check_nonneg("sigma", sigma)?;
    let m = mp_stieltjes(lambda, gamma)?;
    let mp = mp_stieltjes_deriv(lambda, gamma)?;
    let bias = r * r * lambda * lambda * mp;
    let variance = (sigma * sigma * gamma * (m - lambda * mp)).max(0.0);
    Ok(TheoryLimit::new(
        Algorithm::Rtfa,
        bias,
        variance,
        r,
        sigma,
        gamma,
        Some(lambda),
    ))
}

fn optimal_risk_closed_form(r: f64, sigma: f64, gamma: f64) -> f64 {
    let (r2, s2) = (r * r, sigma * sigma);
    let a = r2 * (1.0 - 1.0 / gamma);
    0.5 * (a - s2 + (a * a + s2 * s2 + 2.0 * s2 * r2 * (1.0 + 1.0 / gamma)).sqrt())
}

/// `λ* = σ²γ/r²` and the risk `σ²γ m(−λ*)`, cross-checked against the
/// completing-the-square expression.
pub fn rtfa_optimal(r: f64, sigma: f64, gamma: f64) -> Result<(f64, TheoryLimit)> {
    check_gamma(gamma)?;
    check_nonneg("sigma", sigma)?;
    check_nonneg("r", r)?;
    if r == 0.0 {
        return Err(Error::DegenerateHomogeneity);
    }
    let closed = optimal_risk_closed_form(r, sigma, gamma);
    if sigma == 0.0 {
        // λ* = 0: the ridgeless interpolant, risk r²(1 − 1/γ).
        let lim = ftfa_limit(r, 0.0, gamma)?.relabel(Algorithm::Rtfa);
        return Ok((
            0.0,
            TheoryLimit {
                lambda: Some(0.0),
                ..lim
            },
        ));
    }
    let lambda = sigma * sigma * gamma / (r * r);
    let lim = rtfa_limit(r, sigma, gamma, lambda)?;
    let via_m = sigma * sigma * gamma * mp_stieltjes(lambda, gamma)?;
    let scale = closed.abs().max(1.0);
    if (via_m - closed).abs() > 1e-10 * scale || (lim.risk - closed).abs() > 1e-10 * scale {
        return Err(Error::InternalInconsistency(format!(
            "optimal ridge risk mismatch: {via_m} vs {closed} vs {}",
            lim.risk
        )));
    }
    Ok((lambda, lim))
}

/// Zero personalization: bias `r²`, variance 0.
pub fn fedavg_limit(r: f64) -> Result<TheoryLimit> {
    check_nonneg("r", r)?;
    Ok(TheoryLimit::new(
        Algorithm::Fedavg,
        r * r,
        0.0,
        r,
        0.0,
        f64::INFINITY,
        None,
    ))
}

pub fn naive_limit(rho: f64, sigma: f64, gamma: f64) -> Result<TheoryLimit> {
    Ok(ftfa_limit(rho, sigma, gamma)?.relabel(Algorithm::Naive))
}

pub fn naive_ridge_limit(rho: f64, sigma: f64, gamma: f64, lambda: f64) -> Result<TheoryLimit> {
    Ok(rtfa_limit(rho, sigma, gamma, lambda)?.relabel(Algorithm::NaiveRidge))
}

pub fn naive_ridge_optimal(rho: f64, sigma: f64, gamma: f64) -> Result<(f64, TheoryLimit)> {
    let (l, lim) = rtfa_optimal(rho, sigma, gamma)?;
    Ok((l, lim.relabel(Algorithm::NaiveRidge)))
}

/// Whether fine-tuning beats the plain global model: `σ² < r²(γ−1)/γ`.
pub fn ftfa_beats_fedavg(r: f64, sigma: f64, gamma: f64) -> bool {
    let beats = sigma * sigma < r * r * (gamma - 1.0) / gamma;
    if let (Ok(ft), Ok(fa)) = (ftfa_limit(r, sigma, gamma), fedavg_limit(r)) {
        let gap = fa.risk - ft.risk;
        if gap.abs() > 1e-12 * fa.risk.max(1.0) {
            debug_assert_eq!(beats, gap > 0.0);
        }
    }
    beats
}

/// Theory prediction for one algorithm under identity covariance. `rho`
/// defaults to `r` for the zero-collaboration baselines.
pub fn predict(
    algorithm: Algorithm,
    gamma: f64,
    r: f64,
    sigma: f64,
    lambda: Option<f64>,
    rho: Option<f64>,
) -> Result<TheoryLimit> {
    let need_lambda = || lambda.ok_or_else(|| Error::DomainError(format!("{algorithm} needs lambda")));
    let rho = rho.unwrap_or(r);
    match algorithm {
        Algorithm::Fedavg => fedavg_limit(r).map(|l| TheoryLimit { sigma, gamma, ..l }),
        Algorithm::Ftfa => ftfa_limit(r, sigma, gamma),
        Algorithm::Maml => Ok(ftfa_limit(r, sigma, gamma)?.relabel(Algorithm::Maml)),
        Algorithm::Rtfa => rtfa_limit(r, sigma, gamma, need_lambda()?),
        Algorithm::Pfedme => Ok(rtfa_limit(r, sigma, gamma, need_lambda()?)?.relabel(Algorithm::Pfedme)),
        Algorithm::Naive => naive_limit(rho, sigma, gamma),
        Algorithm::NaiveRidge => naive_ridge_limit(rho, sigma, gamma, need_lambda()?),
    }
}

fn check_distribution(h: &SpectralDistribution) -> Result<()> {
    if h.support.iter().any(|&s| !(s > 0.0)) {
        return Err(Error::DomainError(
            "spectral distribution must be supported on positive reals".into(),
        ));
    }
    Ok(())
}

/// Non-negative root of `1 − 1/γ = ∫ dH(s) / (1 + c₀γs)`.
pub fn solve_c0(h: &SpectralDistribution, gamma: f64) -> Result<f64> {
    check_gamma(gamma)?;
    check_distribution(h)?;
    let target = 1.0 - 1.0 / gamma;
    let resid = |c: f64| h.integrate(|s| 1.0 / (1.0 + c * gamma * s)) - target;
    let mut lo = 0.0;
    let mut hi = 1.0;
    let mut grow = 0;
    while resid(hi) > 0.0 {
        lo = hi;
        hi *= 2.0;
        grow += 1;
        if grow > 2000 {
            return Err(Error::NoRoot);
        }
    }
    for _ in 0..400 {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        if resid(mid) > 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let c = 0.5 * (lo + hi);
    if resid(c).abs() > 1e-12 {
        return Err(Error::NoRoot);
    }
    Ok(c)
}

fn identity_like(h: &SpectralDistribution, g: &SpectralDistribution) -> bool {
    let is_delta1 = |d: &SpectralDistribution| d.support.len() == 1 && (d.support[0] - 1.0).abs() < 1e-15;
    is_delta1(h) && is_delta1(g)
}

fn ridgeless_general_unchecked(
    h: &SpectralDistribution,
    g: &SpectralDistribution,
    r: f64,
    sigma: f64,
    gamma: f64,
) -> Result<TheoryLimit> {
    let c0 = solve_c0(h, gamma)?;
    let den = |s: f64| {
        let t = 1.0 + c0 * gamma * s;
        t * t
    };
    let h2 = h.integrate(|s| s * s / den(s));
    let h1 = h.integrate(|s| s / den(s));
    let g1 = g.integrate(|s| s / den(s));
    let bias = r * r * (1.0 + gamma * c0 * h2 / h1) * g1;
    let variance = sigma * sigma * gamma * c0 * h2 / h1;
    Ok(TheoryLimit::new(Algorithm::Ftfa, bias, variance, r, sigma, gamma, None))
}

/// Ridgeless (FTFA/MAML) prediction for spectrum `H` and signal-weighted
/// spectrum `G`.
pub fn ridgeless_limits_general(
    h: &SpectralDistribution,
    g: &SpectralDistribution,
    r: f64,
    sigma: f64,
    gamma: f64,
) -> Result<TheoryLimit> {
    check_distribution(g)?;
    check_nonneg("r", r)?;
    check_nonneg("sigma", sigma)?;
    let lim = ridgeless_general_unchecked(h, g, r, sigma, gamma)?;
    let probe = ridgeless_general_unchecked(
        &SpectralDistribution::delta(1.0),
        &SpectralDistribution::delta(1.0),
        r,
        sigma,
        gamma,
    )?;
    let closed = ftfa_limit(r, sigma, gamma)?;
    let tol = 1e-10 * closed.risk.max(1.0);
    if (probe.bias - closed.bias).abs() > tol || (probe.variance - closed.variance).abs() > tol {
        return Err(Error::InternalInconsistency(format!(
            "ridgeless general reduction failed: ({}, {}) vs ({}, {})",
            probe.bias, probe.variance, closed.bias, closed.variance
        )));
    }
    if identity_like(h, g) {
        return Ok(probe);
    }
    Ok(lim)
}

/// `∫ dH / (s(1 − γ + γλm) + λ)`, the right side of the fixed point.
fn mn_map(h: &SpectralDistribution, gamma: f64, lambda: f64, m: f64) -> f64 {
    let a = 1.0 - gamma + gamma * lambda * m;
    h.integrate(|s| 1.0 / (s * a + lambda))
}

fn mn_in_domain(h: &SpectralDistribution, gamma: f64, lambda: f64, m: f64) -> bool {
    let a = 1.0 - gamma + gamma * lambda * m;
    m > 0.0 && h.support.iter().all(|&s| s * a + lambda > 0.0)
}

/// Damped fixed-point iteration for `m_n(−λ)`, with a bisection fallback on
/// the monotone residual `m − ∫ dH/(s(1−γ+γλm)+λ)` when the iteration does
/// not contract (small `λ` relative to the spectrum).
pub fn solve_mn(lambda: f64, h: &SpectralDistribution, gamma: f64) -> Result<StieltjesSolution> {
    check_gamma(gamma)?;
    check_lambda(lambda)?;
    check_distribution(h)?;
    const TOL: f64 = 1e-12;
    const MAX_ITER: usize = 100_000;

    let mut m = 1.0 / lambda;
    let mut method = None;
    let mut residual;
    for _ in 0..MAX_ITER {
        let next = mn_map(h, gamma, lambda, m);
        let damped = 0.5 * m + 0.5 * next;
        if !damped.is_finite() || !mn_in_domain(h, gamma, lambda, damped) {
            break;
        }
        residual = (next - m).abs();
        m = damped;
        if residual <= TOL * m.max(1.0) {
            method = Some(StieltjesMethod::FixedPoint);
            break;
        }
    }
    if method.is_none() {
        let s_max = h.support.iter().cloned().fold(0.0, f64::max);
        let mut lo = ((gamma - 1.0 - lambda / s_max) / (gamma * lambda)).max(0.0);
        let mut hi = 1.0 / lambda;
        let phi = |m: f64| m - mn_map(h, gamma, lambda, m);
        for _ in 0..300 {
            let mid = 0.5 * (lo + hi);
            if mid <= lo || mid >= hi {
                break;
            }
            let v = if mn_in_domain(h, gamma, lambda, mid) {
                phi(mid)
            } else {
                f64::NEG_INFINITY
            };
            if v < 0.0 {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        m = 0.5 * (lo + hi);
        residual = phi(m).abs();
        if !(residual <= 1e-10 * m.max(1.0)) {
            return Err(Error::NonConvergence {
                iterations: MAX_ITER,
                residual,
            });
        }
        method = Some(StieltjesMethod::Bisection);
    }
    // Implicit differentiation of the fixed point in z = −λ.
    let a = 1.0 - gamma + gamma * lambda * m;
    let d2 = |s: f64| {
        let t = s * a + lambda;
        t * t
    };
    let num = h.integrate(|s| (1.0 + s * gamma * m) / d2(s));
    let den = 1.0 + gamma * lambda * h.integrate(|s| s / d2(s));
    Ok(StieltjesSolution {
        lambda,
        gamma,
        m,
        m_prime: num / den,
        method: method.unwrap(),
    })
}

fn mn1_from(sol: &StieltjesSolution, h: &SpectralDistribution) -> f64 {
    let (g, l, m) = (sol.gamma, sol.lambda, sol.m);
    let a = 1.0 - g + g * l * m;
    let d2 = |s: f64| {
        let t = s * a + l;
        t * t
    };
    h.integrate(|s| s * s * a / d2(s)) / (1.0 + g * l * h.integrate(|s| s / d2(s)))
}

/// `m_{n,1}(−λ)`.
pub fn mn1(lambda: f64, h: &SpectralDistribution, gamma: f64) -> Result<f64> {
    let sol = solve_mn(lambda, h, gamma)?;
    Ok(mn1_from(&sol, h))
}

fn ridge_general_unchecked(
    h: &SpectralDistribution,
    g: &SpectralDistribution,
    r: f64,
    sigma: f64,
    gamma: f64,
    lambda: f64,
) -> Result<TheoryLimit> {
    let sol = solve_mn(lambda, h, gamma)?;
    let m1 = mn1_from(&sol, h);
    let a = 1.0 - gamma + gamma * lambda * sol.m;
    let d2 = |s: f64| {
        let t = s * a + lambda;
        t * t
    };
    let bias = lambda * lambda * r * r * (1.0 + gamma * m1) * g.integrate(|s| s / d2(s));
    let variance =
        sigma * sigma * gamma * h.integrate(|s| s * s * (1.0 - gamma + gamma * lambda * lambda * sol.m_prime) / d2(s));
    Ok(TheoryLimit::new(
        Algorithm::Rtfa,
        bias,
        variance.max(0.0),
        r,
        sigma,
        gamma,
        Some(lambda),
    ))
}

/// Ridge (RTFA/pFedMe) prediction for spectrum `H` and signal-weighted
/// spectrum `G`.
pub fn ridge_limits_general(
    h: &SpectralDistribution,
    g: &SpectralDistribution,
    r: f64,
    sigma: f64,
    gamma: f64,
    lambda: f64,
) -> Result<TheoryLimit> {
    check_distribution(g)?;
    check_nonneg("r", r)?;
    check_nonneg("sigma", sigma)?;
    let lim = ridge_general_unchecked(h, g, r, sigma, gamma, lambda)?;
    let delta = SpectralDistribution::delta(1.0);
    let probe = ridge_general_unchecked(&delta, &delta, r, sigma, gamma, lambda)?;
    let closed = rtfa_limit(r, sigma, gamma, lambda)?;
    let tol = 1e-8 * closed.risk.max(1.0);
    if (probe.bias - closed.bias).abs() > tol || (probe.variance - closed.variance).abs() > tol {
        return Err(Error::InternalInconsistency(format!(
            "ridge general reduction failed: ({}, {}) vs ({}, {})",
            probe.bias, probe.variance, closed.bias, closed.variance
        )));
    }
    Ok(lim)
}

/// Zero-personalization limit for a general covariance: `r² ∫ s dG`.
pub fn fedavg_limit_general(g: &SpectralDistribution, r: f64) -> Result<TheoryLimit> {
    check_distribution(g)?;
    check_nonneg("r", r)?;
    let bias = r * r * g.integrate(|s| s);
    Ok(TheoryLimit::new(
        Algorithm::Fedavg,
        bias,
        0.0,
        r,
        0.0,
        f64::INFINITY,
        None,
    ))
}

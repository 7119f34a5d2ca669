//! Browser bindings: theory curves and a small exact-risk simulation.
//! Every function returns a JSON string.

#![allow(clippy::too_many_arguments)]

use pflsim::estimators::{Algorithm, Estimator};
use pflsim::harness::theory_for;
use pflsim::model::{generate_population, PopulationSpec};
use pflsim::numerics::substream;
use pflsim::risk::exact_risks;
use pflsim::theory;
use serde::Serialize;
use wasm_bindgen::prelude::*;

#[derive(Serialize)]
struct Curve {
    x: Vec<f64>,
    series: Vec<(String, Vec<f64>)>,
}

fn js_err(e: impl std::fmt::Display) -> JsError {
    JsError::new(&e.to_string())
}

fn grid(lo: f64, hi: f64, points: usize, log: bool) -> Vec<f64> {
    let k = points.max(2);
    (0..k)
        .map(|i| {
            let t = i as f64 / (k - 1) as f64;
            if log {
                (lo.ln() + t * (hi.ln() - lo.ln())).exp()
            } else {
                lo + t * (hi - lo)
            }
        })
        .collect()
}

/// Limiting risk against the ridge parameter (log-spaced), with the
/// ridgeless and global-model levels as flat references.
#[wasm_bindgen]
pub fn risk_vs_lambda(
    gamma: f64,
    r: f64,
    sigma: f64,
    lambda_min: f64,
    lambda_max: f64,
    points: usize,
) -> Result<String, JsError> {
    let xs = grid(lambda_min, lambda_max, points, true);
    let rtfa = xs
        .iter()
        .map(|&l| theory::rtfa_limit(r, sigma, gamma, l).map(|t| t.risk))
        .collect::<Result<Vec<_>, _>>()
        .map_err(js_err)?;
    let ftfa = theory::ftfa_limit(r, sigma, gamma).map_err(js_err)?.risk;
    let curve = Curve {
        series: vec![
            ("rtfa / pfedme".into(), rtfa),
            ("ftfa / maml".into(), vec![ftfa; xs.len()]),
            ("fedavg".into(), vec![r * r; xs.len()]),
        ],
        x: xs,
    };
    serde_json::to_string(&curve).map_err(js_err)
}

/// Limiting risk against `γ = d/n` for each method, ridge at its optimum.
#[wasm_bindgen]
pub fn risk_vs_gamma(
    r: f64,
    sigma: f64,
    theta0_norm: f64,
    gamma_min: f64,
    gamma_max: f64,
    points: usize,
) -> Result<String, JsError> {
    let xs = grid(gamma_min.max(1.0 + 1e-6), gamma_max, points, false);
    let rho = (r * r + theta0_norm * theta0_norm).sqrt();
    let mut ftfa = Vec::new();
    let mut rtfa = Vec::new();
    let mut naive = Vec::new();
    for &g in &xs {
        ftfa.push(theory::ftfa_limit(r, sigma, g).map_err(js_err)?.risk);
        rtfa.push(if r > 0.0 {
            theory::rtfa_optimal(r, sigma, g).map_err(js_err)?.1.risk
        } else {
            0.0
        });
        naive.push(theory::naive_limit(rho, sigma, g).map_err(js_err)?.risk);
    }
    let curve = Curve {
        series: vec![
            ("ftfa / maml".into(), ftfa),
            ("rtfa at optimal lambda".into(), rtfa),
            ("fedavg".into(), vec![r * r; xs.len()]),
            ("local min-norm".into(), naive),
        ],
        x: xs,
    };
    serde_json::to_string(&curve).map_err(js_err)
}

#[derive(Serialize)]
struct SimRow {
    algorithm: Algorithm,
    bias: f64,
    variance: f64,
    risk: f64,
    theory: Option<f64>,
}

/// Draws one identity-covariance population and reports exact risk at
/// client 0 for every algorithm next to its limit.
#[wasm_bindgen]
pub fn simulate(
    m: usize,
    d: usize,
    n: usize,
    r: f64,
    sigma: f64,
    lambda: f64,
    alpha: f64,
    seed: u64,
) -> Result<String, JsError> {
    if m * n * d > 4_000_000 {
        return Err(JsError::new("population too large for the browser demo (m*n*d > 4e6)"));
    }
    let spec = PopulationSpec::identity(m, d, n, r, sigma);
    let ds = generate_population(&spec, &substream(seed, 0)).map_err(js_err)?;
    let mut rows = Vec::new();
    for alg in Algorithm::ALL {
        let est = Estimator::new(alg, lambda, alpha);
        let rep = match exact_risks(&ds, est, &[0]) {
            Ok(mut v) => v.remove(0),
            Err(e) => return Err(JsError::new(&format!("{alg}: {e}"))),
        };
        rows.push(SimRow {
            algorithm: alg,
            bias: rep.bias,
            variance: rep.variance,
            risk: rep.risk,
            theory: theory_for(est, &ds, 0).ok().map(|t| t.risk),
        });
    }
    serde_json::to_string(&rows).map_err(js_err)
}

//! Exact conditional bias/variance of every estimator given `(X, θ*)`, and a
//! Monte Carlo oracle that redraws the noise.
//!
//! Every estimator is affine in the noise,
//! `θ̂_i = θ̄_i + L_i M⁻¹ Σ_j F_jᵀ ξ_j + O_i ξ_i`, so the variance splits into
//! the global-noise trace (i), the cross term (ii) and the local trace (iii):
//!
//! * (i)   `tr(L_iᵀ Σ_i L_i · M⁻¹ S M⁻¹)` with `S = Σ_j σ_j² F_jᵀ F_j`
//! * (ii)  `2 σ_i² tr(O_iᵀ Σ_i L_i M⁻¹ F_iᵀ)`
//! * (iii) `σ_i² tr(O_iᵀ Σ_i O_i)`

use faer::{Col, Mat, MatRef};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::estimators::{
    apply_lookahead, factor_coupling, factor_global_gram, factor_meta_gram, pfedme_system, Algorithm, ClientRidge,
    Estimator, Response,
};
use crate::model::{ClientData, FederatedDataset};
use crate::numerics::{
    frobenius_inner, gram_lower_add, symmetrize_lower, RngStream, RowSpace, SpdFactor, SpdSystem, Vector, RANK_TOL,
};

const CLAMP_TOL: f64 = 1e-10;
const FAIL_TOL: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct McStats {
    pub redraws: usize,
    pub risk_se: f64,
    pub variance_se: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RiskReport {
    pub client_index: usize,
    pub algorithm: Algorithm,
    pub bias: f64,
    pub variance: f64,
    pub risk: f64,
    pub variance_terms: Option<[f64; 3]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mc: Option<McStats>,
}

fn clamp(x: f64, what: &str) -> Result<f64> {
    if !x.is_finite() {
        return Err(Error::NumericalInconsistency(format!("{what} is not finite")));
    }
    if x >= 0.0 {
        Ok(x)
    } else if x >= -CLAMP_TOL {
        Ok(0.0)
    } else if x >= -FAIL_TOL {
        log::debug!("{what} = {x:.3e} clamped to 0");
        Ok(0.0)
    } else {
        Err(Error::NumericalInconsistency(format!("{what} = {x:.3e} is negative")))
    }
}

fn report(client_index: usize, algorithm: Algorithm, bias: f64, terms: [f64; 3]) -> Result<RiskReport> {
    for (k, t) in terms.iter().enumerate() {
        if !t.is_finite() {
            return Err(Error::NumericalInconsistency(format!(
                "variance term {} is not finite",
                k + 1
            )));
        }
    }
    let bias = clamp(bias, "bias")?;
    let variance = clamp(terms.iter().sum(), "variance")?;
    Ok(RiskReport {
        client_index,
        algorithm,
        bias,
        variance,
        risk: bias + variance,
        variance_terms: Some(terms),
        mc: None,
    })
}

fn sub(a: &Vector, b: &Vector) -> Vector {
    a - b
}

fn scaled(m: MatRef<'_, f64>, a: f64) -> Mat<f64> {
    Mat::from_fn(m.nrows(), m.ncols(), |i, j| a * m[(i, j)])
}

/// `M⁻¹ S M⁻¹`.
fn sandwich(sys: &SpdSystem, s: &Mat<f64>) -> Mat<f64> {
    let left = sys.solve_mat(s.as_ref());
    let both = sys.solve_mat(left.transpose());
    // Exact symmetry keeps downstream traces stable.
    let d = both.nrows();
    Mat::from_fn(d, d, |i, j| 0.5 * (both[(i, j)] + both[(j, i)]))
}

/// `tr(Σ · Π B Π)` for symmetric `B`.
fn trace_projected(sigma: &SpdFactor, rs: &RowSpace, b: &Mat<f64>) -> f64 {
    let pb = rs.project_null_mat(b.as_ref());
    let pbp = rs.project_null_mat(pb.transpose());
    sigma.trace_product(pbp.as_ref())
}

/// `σ² tr(X⁺ᵀ Σ X⁺) = σ² Σ_k s_k⁻² v_kᵀ Σ v_k`.
fn pinv_trace(sigma: &SpdFactor, rs: &RowSpace) -> f64 {
    (0..rs.rank())
        .map(|k| sigma.quad_form(rs.basis.col(k)) / (rs.singular[k] * rs.singular[k]))
        .sum()
}

/// Noise operator shared by every client: `M`, `M⁻¹ S M⁻¹` and the noise-free
/// global estimate.
struct GlobalPart {
    sys: SpdSystem,
    b: Mat<f64>,
    center: Vector,
}

fn fedavg_part(ds: &FederatedDataset) -> Result<GlobalPart> {
    let d = ds.d();
    let mut w = Mat::<f64>::zeros(d, d);
    let mut s = Mat::<f64>::zeros(d, d);
    let mut rhs = Col::<f64>::zeros(d);
    let mut g = Mat::<f64>::zeros(d, d);
    for (c, &p) in ds.clients.iter().zip(&ds.weights) {
        let a = p / c.n() as f64;
        g.fill(0.0);
        gram_lower_add(g.as_mut(), c.x.as_ref(), 1.0);
        let sig2 = c.spec.sigma * c.spec.sigma;
        for j in 0..d {
            for i in j..d {
                w[(i, j)] += a * g[(i, j)];
                s[(i, j)] += sig2 * a * a * g[(i, j)];
            }
        }
        let xt = c.x.transpose() * (&c.x * &c.theta_star);
        rhs += scaled(xt.as_mat(), a).col(0);
    }
    symmetrize_lower(&mut w);
    symmetrize_lower(&mut s);
    let sys = factor_global_gram(&w)?;
    let center = sys.solve(rhs.as_ref());
    Ok(GlobalPart {
        b: sandwich(&sys, &s),
        sys,
        center,
    })
}

fn maml_part(ds: &FederatedDataset, alpha: f64) -> Result<GlobalPart> {
    if !alpha.is_finite() {
        return Err(Error::NonFiniteInput("exact_maml_risk"));
    }
    let d = ds.d();
    let mut m = Mat::<f64>::zeros(d, d);
    let mut s = Mat::<f64>::zeros(d, d);
    let mut rhs = Col::<f64>::zeros(d);
    for (c, &p) in ds.clients.iter().zip(&ds.weights) {
        let a = p / c.n() as f64;
        let wx = apply_lookahead(c.x.as_ref(), alpha, c.x.as_ref());
        let w2x = apply_lookahead(c.x.as_ref(), alpha, wx.as_ref());
        gram_lower_add(m.as_mut(), wx.as_ref(), a);
        let sig2 = c.spec.sigma * c.spec.sigma;
        if sig2 > 0.0 {
            gram_lower_add(s.as_mut(), w2x.as_ref(), sig2 * a * a);
        }
        let v = w2x.transpose() * (&c.x * &c.theta_star);
        rhs += scaled(v.as_mat(), a).col(0);
    }
    symmetrize_lower(&mut m);
    symmetrize_lower(&mut s);
    let sys = factor_meta_gram(&m)?;
    let center = sys.solve(rhs.as_ref());
    Ok(GlobalPart {
        b: sandwich(&sys, &s),
        sys,
        center,
    })
}

/// Shared pieces for the estimators built on the FedAvg global model.
pub struct FedavgRiskContext<'a> {
    ds: &'a FederatedDataset,
    part: GlobalPart,
}

impl<'a> FedavgRiskContext<'a> {
    pub fn new(ds: &'a FederatedDataset) -> Result<Self> {
        Ok(Self {
            ds,
            part: fedavg_part(ds)?,
        })
    }

    pub fn fedavg(&self, i: usize) -> Result<RiskReport> {
        let c = self.ds.client(i)?;
        let bias = c.sigma.quad_form(sub(&self.part.center, &c.theta_star).as_ref());
        let t1 = c.sigma.trace_product(self.part.b.as_ref());
        report(i, Algorithm::Fedavg, bias, [t1, 0.0, 0.0])
    }

    pub fn ftfa(&self, i: usize) -> Result<RiskReport> {
        let c = self.ds.client(i)?;
        let fi = scaled(c.x.transpose(), self.ds.weights[i] / c.n() as f64);
        projected_risk(c, i, Algorithm::Ftfa, &self.part, fi.as_ref())
    }

    pub fn rtfa(&self, i: usize, lambda: f64) -> Result<RiskReport> {
        let c = self.ds.client(i)?;
        let ridge = ClientRidge::new(c.x.as_ref(), lambda)?;
        let fi = scaled(c.x.transpose(), self.ds.weights[i] / c.n() as f64);
        ridge_risk(c, i, Algorithm::Rtfa, lambda, &ridge, &self.part, fi.as_ref())
    }
}

/// Risk of `Π_i θ̂₀ + X_i⁺ y_i` for a global model described by `part`.
/// `fi_t` is `F_iᵀ` (d × n_i).
fn projected_risk(
    c: &ClientData,
    i: usize,
    algorithm: Algorithm,
    part: &GlobalPart,
    fi_t: MatRef<'_, f64>,
) -> Result<RiskReport> {
    let rs = RowSpace::new(c.x.as_ref(), RANK_TOL)?;
    let sigma = c.sigma.as_ref();
    let bias = sigma.quad_form(rs.project_null(sub(&part.center, &c.theta_star).as_ref()).as_ref());
    let t1 = trace_projected(sigma, &rs, &part.b);
    let sig2 = c.spec.sigma * c.spec.sigma;
    let (t2, t3) = if sig2 > 0.0 {
        let p = part.sys.solve_mat(fi_t);
        let sp = sigma.apply_left(rs.project_null_mat(p.as_ref()).as_ref());
        let t2 = 2.0 * sig2 * frobenius_inner(rs.pinv().as_ref(), sp.as_ref());
        (t2, sig2 * pinv_trace(sigma, &rs))
    } else {
        (0.0, 0.0)
    };
    report(i, algorithm, bias, [t1, t2, t3])
}

/// Risk of `T_i⁻¹(X_iᵀ y_i / n_i + λ θ̂₀)` for a global model described by
/// `part`. `fi_t` is `F_iᵀ` (d × n_i).
fn ridge_risk(
    c: &ClientData,
    i: usize,
    algorithm: Algorithm,
    lambda: f64,
    ridge: &ClientRidge,
    part: &GlobalPart,
    fi_t: MatRef<'_, f64>,
) -> Result<RiskReport> {
    let sigma = c.sigma.as_ref();
    let x = c.x.as_ref();
    let gap = sub(&part.center, &c.theta_star);
    let bv = ridge.solve_t(x, gap.as_ref());
    let bias = lambda * lambda * sigma.quad_form(bv.as_ref());

    let d = c.d();
    let tinv = ridge.solve_t_mat(x, Mat::<f64>::identity(d, d).as_ref());
    let st = sigma.apply_left(tinv.as_ref());
    let g = &tinv * &st;
    let t1 = lambda * lambda * frobenius_inner(g.as_ref(), part.b.as_ref());

    let sig2 = c.spec.sigma * c.spec.sigma;
    let (t2, t3) = if sig2 > 0.0 {
        // O_i = X_iᵀ K_i⁻¹ (d × n).
        let o = ridge.kinv_x(x).transpose().to_owned();
        let p = part.sys.solve_mat(fi_t);
        let slp = scaled((&st * &p).as_ref(), lambda);
        let t2 = 2.0 * sig2 * frobenius_inner(o.as_ref(), slp.as_ref());
        let so = sigma.apply_left(o.as_ref());
        (t2, sig2 * frobenius_inner(o.as_ref(), so.as_ref()))
    } else {
        (0.0, 0.0)
    };
    report(i, algorithm, bias, [t1, t2, t3])
}

pub fn exact_fedavg_risk(ds: &FederatedDataset, i: usize) -> Result<RiskReport> {
    FedavgRiskContext::new(ds)?.fedavg(i)
}

pub fn exact_ftfa_risk(ds: &FederatedDataset, i: usize) -> Result<RiskReport> {
    FedavgRiskContext::new(ds)?.ftfa(i)
}

pub fn exact_rtfa_risk(ds: &FederatedDataset, i: usize, lambda: f64) -> Result<RiskReport> {
    ClientRidge::new(ds.client(i)?.x.as_ref(), lambda)?;
    FedavgRiskContext::new(ds)?.rtfa(i, lambda)
}

pub fn exact_maml_risk(ds: &FederatedDataset, i: usize, alpha: f64) -> Result<RiskReport> {
    exact_maml_risks(ds, &[i], alpha).map(|mut v| v.remove(0))
}

pub fn exact_maml_risks(ds: &FederatedDataset, clients: &[usize], alpha: f64) -> Result<Vec<RiskReport>> {
    let part = maml_part(ds, alpha)?;
    clients
        .iter()
        .map(|&i| {
            let c = ds.client(i)?;
            let w2x = apply_lookahead(
                c.x.as_ref(),
                alpha,
                apply_lookahead(c.x.as_ref(), alpha, c.x.as_ref()).as_ref(),
            );
            let fi_t = scaled(w2x.transpose(), ds.weights[i] / c.n() as f64);
            projected_risk(c, i, Algorithm::Maml, &part, fi_t.as_ref())
        })
        .collect()
}

pub fn exact_pfedme_risk(ds: &FederatedDataset, i: usize, lambda: f64) -> Result<RiskReport> {
    exact_pfedme_risks(ds, &[i], lambda).map(|mut v| v.remove(0))
}

pub fn exact_pfedme_risks(ds: &FederatedDataset, clients: &[usize], lambda: f64) -> Result<Vec<RiskReport>> {
    for &i in clients {
        ds.client(i)?;
    }
    let sys = pfedme_system(ds, lambda, Response::Signal)?;
    let q = factor_coupling(&sys.q)?;
    let center = q.solve(sys.rhs.as_ref());
    let d = ds.d();
    let mut s = Mat::<f64>::zeros(d, d);
    for ((c, &p), ridge) in ds.clients.iter().zip(&ds.weights).zip(&sys.ridges) {
        let sig2 = c.spec.sigma * c.spec.sigma;
        if sig2 > 0.0 {
            let kx = ridge.kinv_x(c.x.as_ref());
            gram_lower_add(s.as_mut(), kx.as_ref(), sig2 * p * p);
        }
    }
    symmetrize_lower(&mut s);
    let part = GlobalPart {
        b: sandwich(&q, &s),
        sys: q,
        center,
    };
    clients
        .iter()
        .map(|&i| {
            let c = &ds.clients[i];
            let ridge = &sys.ridges[i];
            let fi_t = scaled(ridge.kinv_x(c.x.as_ref()).transpose(), ds.weights[i]);
            ridge_risk(c, i, Algorithm::Pfedme, lambda, ridge, &part, fi_t.as_ref())
        })
        .collect()
}

/// Zero-collaboration risks: min-norm when `lambda` is `None`, ridge
/// otherwise.
pub fn exact_naive_risks(client: &ClientData, index: usize, lambda: Option<f64>) -> Result<RiskReport> {
    let sigma = client.sigma.as_ref();
    let sig2 = client.spec.sigma * client.spec.sigma;
    match lambda {
        None => {
            let rs = RowSpace::new(client.x.as_ref(), RANK_TOL)?;
            let bias = sigma.quad_form(rs.project_null(client.theta_star.as_ref()).as_ref());
            let t3 = if sig2 > 0.0 { sig2 * pinv_trace(sigma, &rs) } else { 0.0 };
            report(index, Algorithm::Naive, bias, [0.0, 0.0, t3])
        }
        Some(lambda) => {
            let x = client.x.as_ref();
            let ridge = ClientRidge::new(x, lambda)?;
            let bv = ridge.solve_t(x, client.theta_star.as_ref());
            let bias = lambda * lambda * sigma.quad_form(bv.as_ref());
            let t3 = if sig2 > 0.0 {
                let o = ridge.kinv_x(x).transpose().to_owned();
                let so = sigma.apply_left(o.as_ref());
                sig2 * frobenius_inner(o.as_ref(), so.as_ref())
            } else {
                0.0
            };
            report(index, Algorithm::NaiveRidge, bias, [0.0, 0.0, t3])
        }
    }
}

/// Exact risk of `est` at each listed client, sharing the global operator.
pub fn exact_risks(ds: &FederatedDataset, est: Estimator, clients: &[usize]) -> Result<Vec<RiskReport>> {
    match est {
        Estimator::Fedavg | Estimator::Ftfa | Estimator::Rtfa { .. } => {
            let ctx = FedavgRiskContext::new(ds)?;
            clients
                .iter()
                .map(|&i| match est {
                    Estimator::Fedavg => ctx.fedavg(i),
                    Estimator::Ftfa => ctx.ftfa(i),
                    Estimator::Rtfa { lambda } => ctx.rtfa(i, lambda),
                    _ => unreachable!(),
                })
                .collect()
        }
        Estimator::Maml { alpha } => exact_maml_risks(ds, clients, alpha),
        Estimator::Pfedme { lambda } => exact_pfedme_risks(ds, clients, lambda),
        Estimator::Naive => clients
            .iter()
            .map(|&i| exact_naive_risks(ds.client(i)?, i, None))
            .collect(),
        Estimator::NaiveRidge { lambda } => clients
            .iter()
            .map(|&i| exact_naive_risks(ds.client(i)?, i, Some(lambda)))
            .collect(),
    }
}

/// Monte Carlo risk: redraws every client's noise `noise_redraws` times with
/// `(X, θ*)` fixed and recomputes the estimator.
///
/// `risk` is the mean loss, `bias` the loss of the mean estimate and
/// `variance` the mean squared deviation from it, so `risk = bias + variance`.
pub fn mc_risk(
    est: Estimator,
    ds: &FederatedDataset,
    i: usize,
    noise_redraws: usize,
    stream: &RngStream,
) -> Result<RiskReport> {
    if noise_redraws < 2 {
        return Err(Error::InvalidConfig("mc_risk needs at least 2 noise redraws".into()));
    }
    let target = ds.client(i)?;
    let sigma = target.sigma.as_ref();
    let mut thetas = Vec::with_capacity(noise_redraws);
    for r in 0..noise_redraws {
        let mut s = stream.derive(&[r as u64]);
        let noise = ds
            .clients
            .iter()
            .map(|c| {
                let sd = c.spec.sigma;
                let z = s.gaussian_col(c.n());
                Col::from_fn(c.n(), |k| sd * z[k])
            })
            .collect();
        thetas.push(est.personal(&ds.with_noise(noise), i)?);
    }
    let rf = noise_redraws as f64;
    let first = thetas[0].clone();
    let mut mean_dev = Col::<f64>::zeros(ds.d());
    for t in &thetas {
        mean_dev += t - &first;
    }
    let mean = &first + Col::from_fn(ds.d(), |k| mean_dev[k] / rf);
    let losses: Vec<f64> = thetas
        .iter()
        .map(|t| sigma.quad_form(sub(t, &target.theta_star).as_ref()))
        .collect();
    let devs: Vec<f64> = thetas.iter().map(|t| sigma.quad_form(sub(t, &mean).as_ref())).collect();
    let (risk, risk_sd) = mean_sd(&losses);
    let (variance, var_sd) = mean_sd(&devs);
    let bias = sigma.quad_form(sub(&mean, &target.theta_star).as_ref());
    Ok(RiskReport {
        client_index: i,
        algorithm: est.algorithm(),
        bias,
        variance,
        risk,
        variance_terms: None,
        mc: Some(McStats {
            redraws: noise_redraws,
            risk_se: risk_sd / rf.sqrt(),
            variance_se: var_sd / rf.sqrt(),
        }),
    })
}

fn mean_sd(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

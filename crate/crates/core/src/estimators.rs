//! Closed-form estimators: the FedAvg/MAML/pFedMe global models and the
//! personalised models built from them, plus the two purely local baselines.

use std::fmt;
use std::str::FromStr;

use faer::linalg::solvers::Solve;
use faer::{Col, ColRef, Mat, MatRef, Side};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{ClientData, FederatedDataset};
use crate::numerics::{gram_lower_add, symmetrize_lower, RowSpace, SpdSystem, Vector, RANK_TOL, SINGULAR_TOL};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Algorithm {
    /// Zero personalization: every client uses the FedAvg global model.
    Fedavg,
    Ftfa,
    Rtfa,
    Maml,
    Pfedme,
    /// Zero collaboration, min-norm interpolation.
    Naive,
    NaiveRidge,
}

impl Algorithm {
    pub const ALL: [Algorithm; 7] = [
        Algorithm::Fedavg,
        Algorithm::Ftfa,
        Algorithm::Rtfa,
        Algorithm::Maml,
        Algorithm::Pfedme,
        Algorithm::Naive,
        Algorithm::NaiveRidge,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            Algorithm::Fedavg => "fedavg",
            Algorithm::Ftfa => "ftfa",
            Algorithm::Rtfa => "rtfa",
            Algorithm::Maml => "maml",
            Algorithm::Pfedme => "pfedme",
            Algorithm::Naive => "naive",
            Algorithm::NaiveRidge => "naive-ridge",
        }
    }

    pub fn uses_lambda(&self) -> bool {
        matches!(self, Algorithm::Rtfa | Algorithm::Pfedme | Algorithm::NaiveRidge)
    }

    pub fn uses_alpha(&self) -> bool {
        matches!(self, Algorithm::Maml)
    }
}

impl fmt::Display for Algorithm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Algorithm {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Algorithm::ALL
            .iter()
            .copied()
            .find(|a| a.as_str() == s)
            .ok_or_else(|| Error::Parse(format!("unknown algorithm `{s}`")))
    }
}

/// An algorithm together with its hyperparameter.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Estimator {
    Fedavg,
    Ftfa,
    Rtfa { lambda: f64 },
    Maml { alpha: f64 },
    Pfedme { lambda: f64 },
    Naive,
    NaiveRidge { lambda: f64 },
}

impl Estimator {
    pub fn new(algorithm: Algorithm, lambda: f64, alpha: f64) -> Self {
        match algorithm {
            Algorithm::Fedavg => Estimator::Fedavg,
            Algorithm::Ftfa => Estimator::Ftfa,
            Algorithm::Rtfa => Estimator::Rtfa { lambda },
            Algorithm::Maml => Estimator::Maml { alpha },
            Algorithm::Pfedme => Estimator::Pfedme { lambda },
            Algorithm::Naive => Estimator::Naive,
            Algorithm::NaiveRidge => Estimator::NaiveRidge { lambda },
        }
    }

    pub fn algorithm(&self) -> Algorithm {
        match self {
            Estimator::Fedavg => Algorithm::Fedavg,
            Estimator::Ftfa => Algorithm::Ftfa,
            Estimator::Rtfa { .. } => Algorithm::Rtfa,
            Estimator::Maml { .. } => Algorithm::Maml,
            Estimator::Pfedme { .. } => Algorithm::Pfedme,
            Estimator::Naive => Algorithm::Naive,
            Estimator::NaiveRidge { .. } => Algorithm::NaiveRidge,
        }
    }

    pub fn hyper(&self) -> Option<f64> {
        match *self {
            Estimator::Rtfa { lambda } | Estimator::Pfedme { lambda } | Estimator::NaiveRidge { lambda } => {
                Some(lambda)
            }
            Estimator::Maml { alpha } => Some(alpha),
            _ => None,
        }
    }

    /// Client `i`'s model under this estimator.
    pub fn personal(&self, ds: &FederatedDataset, i: usize) -> Result<Vector> {
        let client = ds.client(i)?;
        Ok(match *self {
            Estimator::Fedavg => fedavg_global(ds)?.theta,
            Estimator::Ftfa => ftfa_personalize(ds, i, &fedavg_global(ds)?)?.theta,
            Estimator::Rtfa { lambda } => rtfa_personalize(ds, i, &fedavg_global(ds)?, lambda)?.theta,
            Estimator::Maml { alpha } => maml_personalize(ds, i, &maml_global(ds, alpha)?)?.theta,
            Estimator::Pfedme { lambda } => {
                let (_, mut personals) = pfedme_solve(ds, lambda)?;
                personals.swap_remove(i).theta
            }
            Estimator::Naive => naive_minnorm(client, i)?.theta,
            Estimator::NaiveRidge { lambda } => naive_ridge(client, i, lambda)?.theta,
        })
    }
}

#[derive(Clone, Debug)]
pub struct GlobalModel {
    pub theta: Vector,
    pub algorithm: Algorithm,
    pub hyper: Option<f64>,
}

#[derive(Clone, Debug)]
pub struct PersonalModel {
    pub client_index: usize,
    pub theta: Vector,
    pub algorithm: Algorithm,
    pub hyper: Option<f64>,
}

fn check_lambda(lambda: f64) -> Result<()> {
    if lambda > 0.0 && lambda.is_finite() {
        Ok(())
    } else {
        Err(Error::NonPositiveLambda(lambda))
    }
}

fn scale(mut v: Vector, a: f64) -> Vector {
    for i in 0..v.nrows() {
        v[i] *= a;
    }
    v
}

fn axpy(y: &mut Vector, a: f64, x: ColRef<'_, f64>) {
    for i in 0..y.nrows() {
        y[i] += a * x[i];
    }
}

/// Pooled weighted Gram `W = Σ p_j Σ̂_j` and moment `Σ p_j X_jᵀ y_j / n_j`.
pub(crate) fn pooled_system(ds: &FederatedDataset) -> (Mat<f64>, Vector) {
    let d = ds.d();
    let mut w = Mat::<f64>::zeros(d, d);
    let mut rhs = Col::<f64>::zeros(d);
    for (c, &p) in ds.clients.iter().zip(&ds.weights) {
        let scale_j = p / c.n() as f64;
        gram_lower_add(w.as_mut(), c.x.as_ref(), scale_j);
        let b = c.x.transpose() * &c.y;
        axpy(&mut rhs, scale_j, b.as_ref());
    }
    symmetrize_lower(&mut w);
    (w, rhs)
}

pub(crate) fn factor_global_gram(w: &Mat<f64>) -> Result<SpdSystem> {
    SpdSystem::factor(w, SINGULAR_TOL).map_err(|ratio| Error::SingularGlobalGram { ratio })
}

/// `θ̂₀ = (Σ p_j Σ̂_j)⁻¹ Σ p_j X_jᵀ y_j / n_j`.
pub fn fedavg_global(ds: &FederatedDataset) -> Result<GlobalModel> {
    let (w, rhs) = pooled_system(ds);
    let sys = factor_global_gram(&w)?;
    Ok(GlobalModel {
        theta: sys.solve(rhs.as_ref()),
        algorithm: Algorithm::Fedavg,
        hyper: None,
    })
}

/// Interpolant of client `i` closest to `warm_start`: `Π_i θ + X_i⁺ y_i`.
pub(crate) fn project_onto_interpolants(client: &ClientData, warm_start: ColRef<'_, f64>) -> Result<Vector> {
    let rs = RowSpace::new(client.x.as_ref(), RANK_TOL)?;
    let mut theta = rs.project_null(warm_start);
    let fit = rs.pinv_apply(client.y.as_ref());
    axpy(&mut theta, 1.0, fit.as_ref());
    Ok(theta)
}

pub fn ftfa_personalize(ds: &FederatedDataset, i: usize, global: &GlobalModel) -> Result<PersonalModel> {
    let client = ds.client(i)?;
    Ok(PersonalModel {
        client_index: i,
        theta: project_onto_interpolants(client, global.theta.as_ref())?,
        algorithm: Algorithm::Ftfa,
        hyper: None,
    })
}

/// `(Σ̂ + λI)⁻¹` for one client, applied through the `n × n` kernel
/// `K = nλI + X Xᵀ` when `n ≤ d` and through the `d × d` matrix otherwise.
pub(crate) struct ClientRidge {
    lambda: f64,
    n: usize,
    inner: RidgeInner,
}

enum RidgeInner {
    Kernel(faer::linalg::solvers::Llt<f64>),
    Primal(faer::linalg::solvers::Llt<f64>),
}

impl ClientRidge {
    pub(crate) fn new(x: MatRef<'_, f64>, lambda: f64) -> Result<Self> {
        check_lambda(lambda)?;
        let (n, d) = (x.nrows(), x.ncols());
        let nf = n as f64;
        let inner = if n <= d {
            let mut k = x * x.transpose();
            for i in 0..n {
                k[(i, i)] += nf * lambda;
            }
            RidgeInner::Kernel(
                k.llt(Side::Lower)
                    .map_err(|e| Error::Linalg(format!("kernel cholesky failed: {e:?}")))?,
            )
        } else {
            let mut t = Mat::<f64>::zeros(d, d);
            gram_lower_add(t.as_mut(), x, 1.0 / nf);
            symmetrize_lower(&mut t);
            for i in 0..d {
                t[(i, i)] += lambda;
            }
            RidgeInner::Primal(
                t.llt(Side::Lower)
                    .map_err(|e| Error::Linalg(format!("ridge cholesky failed: {e:?}")))?,
            )
        };
        Ok(Self { lambda, n, inner })
    }

    /// `T⁻¹ v` with `T = Σ̂ + λI`.
    pub(crate) fn solve_t(&self, x: MatRef<'_, f64>, v: ColRef<'_, f64>) -> Vector {
        match &self.inner {
            RidgeInner::Kernel(k) => {
                let xv = x * v;
                let kxv = k.solve(xv.as_ref());
                let corr = x.transpose() * kxv;
                Col::from_fn(v.nrows(), |i| (v[i] - corr[i]) / self.lambda)
            }
            RidgeInner::Primal(t) => t.solve(v),
        }
    }

    /// `T⁻¹ M` column-wise.
    pub(crate) fn solve_t_mat(&self, x: MatRef<'_, f64>, m: MatRef<'_, f64>) -> Mat<f64> {
        match &self.inner {
            RidgeInner::Kernel(k) => {
                let xm = x * m;
                let kxm = k.solve(xm.as_ref());
                let corr = x.transpose() * kxm;
                Mat::from_fn(m.nrows(), m.ncols(), |i, j| (m[(i, j)] - corr[(i, j)]) / self.lambda)
            }
            RidgeInner::Primal(t) => t.solve(m),
        }
    }

    /// `K⁻¹ X = X T⁻¹ / n` (`n × d`).
    pub(crate) fn kinv_x(&self, x: MatRef<'_, f64>) -> Mat<f64> {
        match &self.inner {
            RidgeInner::Kernel(k) => k.solve(x),
            RidgeInner::Primal(t) => {
                let tinv_xt = t.solve(x.transpose());
                let nf = self.n as f64;
                Mat::from_fn(x.nrows(), x.ncols(), |i, j| tinv_xt[(j, i)] / nf)
            }
        }
    }

    /// `K⁻¹ v` for `v` of length `n`.
    pub(crate) fn kinv_apply(&self, x: MatRef<'_, f64>, v: ColRef<'_, f64>) -> Vector {
        match &self.inner {
            RidgeInner::Kernel(k) => k.solve(v),
            RidgeInner::Primal(t) => {
                // K⁻¹ = (I − X T⁻¹ Xᵀ / n) / (nλ)
                let nf = self.n as f64;
                let xtv = x.transpose() * v;
                let s = t.solve(xtv.as_ref());
                let xs = x * s;
                Col::from_fn(v.nrows(), |i| (v[i] - xs[i] / nf) / (nf * self.lambda))
            }
        }
    }
}

pub fn rtfa_personalize(ds: &FederatedDataset, i: usize, global: &GlobalModel, lambda: f64) -> Result<PersonalModel> {
    check_lambda(lambda)?;
    let client = ds.client(i)?;
    let ridge = ClientRidge::new(client.x.as_ref(), lambda)?;
    let mut rhs = client.moment();
    axpy(&mut rhs, lambda, global.theta.as_ref());
    Ok(PersonalModel {
        client_index: i,
        theta: ridge.solve_t(client.x.as_ref(), rhs.as_ref()),
        algorithm: Algorithm::Rtfa,
        hyper: Some(lambda),
    })
}

/// `W_j M` with `W_j = I − (α/n) X Xᵀ`, applied without forming `W_j`.
pub(crate) fn apply_lookahead(x: MatRef<'_, f64>, alpha: f64, m: MatRef<'_, f64>) -> Mat<f64> {
    let n = x.nrows() as f64;
    let xtm = x.transpose() * m;
    let xxtm = x * xtm;
    Mat::from_fn(m.nrows(), m.ncols(), |i, j| m[(i, j)] - alpha / n * xxtm[(i, j)])
}

/// Transformed client data `(W_j X_j, W_j y_j)` whose weighted least-squares
/// solution is the MAML global model.
pub(crate) fn maml_transformed(client: &ClientData, alpha: f64) -> (Mat<f64>, Vector) {
    let wx = apply_lookahead(client.x.as_ref(), alpha, client.x.as_ref());
    let wy = apply_lookahead(client.x.as_ref(), alpha, client.y.as_mat());
    (wx, wy.col(0).to_owned())
}

/// Meta-Gram `Σ (p_j/n_j) X_jᵀ W_j² X_j` and its moment.
pub(crate) fn maml_system(ds: &FederatedDataset, alpha: f64) -> (Mat<f64>, Vector) {
    let d = ds.d();
    let mut g = Mat::<f64>::zeros(d, d);
    let mut rhs = Col::<f64>::zeros(d);
    for (c, &p) in ds.clients.iter().zip(&ds.weights) {
        let s = p / c.n() as f64;
        let (wx, wy) = if alpha == 0.0 {
            (c.x.clone(), c.y.clone())
        } else {
            maml_transformed(c, alpha)
        };
        gram_lower_add(g.as_mut(), wx.as_ref(), s);
        let b = wx.transpose() * &wy;
        axpy(&mut rhs, s, b.as_ref());
    }
    symmetrize_lower(&mut g);
    (g, rhs)
}

pub(crate) fn factor_meta_gram(m: &Mat<f64>) -> Result<SpdSystem> {
    SpdSystem::factor(m, SINGULAR_TOL).map_err(|ratio| Error::SingularMetaGram { ratio })
}

/// Minimiser of `Σ p_j (1/2n_j) ‖W_j (X_j θ − y_j)‖²`.
pub fn maml_global(ds: &FederatedDataset, alpha: f64) -> Result<GlobalModel> {
    if !alpha.is_finite() {
        return Err(Error::NonFiniteInput("maml_global"));
    }
    let (g, rhs) = maml_system(ds, alpha);
    let sys = factor_meta_gram(&g)?;
    Ok(GlobalModel {
        theta: sys.solve(rhs.as_ref()),
        algorithm: Algorithm::Maml,
        hyper: Some(alpha),
    })
}

/// The MAML objective: each client's loss after one gradient step of size `α`.
pub fn maml_objective(ds: &FederatedDataset, alpha: f64, theta: ColRef<'_, f64>) -> f64 {
    ds.clients
        .iter()
        .zip(&ds.weights)
        .map(|(c, &p)| {
            let mut r = &c.x * theta;
            for k in 0..r.nrows() {
                r[k] -= c.y[k];
            }
            let wr = apply_lookahead(c.x.as_ref(), alpha, r.as_mat());
            p * wr.squared_norm_l2() / (2.0 * c.n() as f64)
        })
        .sum()
}

pub fn maml_objective_gradient(ds: &FederatedDataset, alpha: f64, theta: ColRef<'_, f64>) -> Vector {
    let mut g = Col::<f64>::zeros(ds.d());
    for (c, &p) in ds.clients.iter().zip(&ds.weights) {
        let mut r = &c.x * theta;
        for k in 0..r.nrows() {
            r[k] -= c.y[k];
        }
        let w2r = apply_lookahead(
            c.x.as_ref(),
            alpha,
            apply_lookahead(c.x.as_ref(), alpha, r.as_mat()).as_ref(),
        );
        let xt = c.x.transpose() * w2r.col(0);
        axpy(&mut g, p / c.n() as f64, xt.as_ref());
    }
    g
}

pub fn maml_personalize(ds: &FederatedDataset, i: usize, global: &GlobalModel) -> Result<PersonalModel> {
    let client = ds.client(i)?;
    Ok(PersonalModel {
        client_index: i,
        theta: project_onto_interpolants(client, global.theta.as_ref())?,
        algorithm: Algorithm::Maml,
        hyper: global.hyper,
    })
}

/// Per-client ridge operators and the assembled coupling system of pFedMe.
pub(crate) struct PfedmeSystem {
    pub ridges: Vec<ClientRidge>,
    /// `Q = I − λ Σ p_j T_j⁻¹ = Σ p_j X_jᵀ K_j⁻¹ X_j`.
    pub q: Mat<f64>,
    /// `Σ p_j T_j⁻¹ X_jᵀ y_j / n_j`.
    pub rhs: Vector,
}

/// Which response vector a system is assembled from.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) enum Response {
    Observed,
    /// Noise-free `X θ*`.
    Signal,
}

impl Response {
    pub(crate) fn of(self, c: &ClientData) -> Vector {
        match self {
            Response::Observed => c.y.clone(),
            Response::Signal => &c.x * &c.theta_star,
        }
    }
}

pub(crate) fn pfedme_system(ds: &FederatedDataset, lambda: f64, response: Response) -> Result<PfedmeSystem> {
    check_lambda(lambda)?;
    let d = ds.d();
    let mut q = Mat::<f64>::zeros(d, d);
    let mut rhs = Col::<f64>::zeros(d);
    let mut ridges = Vec::with_capacity(ds.m());
    for (c, &p) in ds.clients.iter().zip(&ds.weights) {
        let ridge = ClientRidge::new(c.x.as_ref(), lambda)?;
        match &ridge.inner {
            RidgeInner::Kernel(k) => {
                // X K⁻¹ Xᵀ = Cᵀ C with C = L⁻¹ X.
                let mut cmat = c.x.clone();
                faer::linalg::triangular_solve::solve_lower_triangular_in_place(k.L(), cmat.as_mut(), faer::Par::Seq);
                gram_lower_add(q.as_mut(), cmat.as_ref(), p);
            }
            RidgeInner::Primal(_) => {
                // Xᵀ K⁻¹ X = T⁻¹ Σ̂, symmetric since T and Σ̂ commute.
                let mut sh = Mat::<f64>::zeros(d, d);
                gram_lower_add(sh.as_mut(), c.x.as_ref(), 1.0 / c.n() as f64);
                symmetrize_lower(&mut sh);
                let qj = ridge.solve_t_mat(c.x.as_ref(), sh.as_ref());
                for j in 0..d {
                    for i in j..d {
                        q[(i, j)] += p * 0.5 * (qj[(i, j)] + qj[(j, i)]);
                    }
                }
            }
        }
        let y = response.of(c);
        let kinv_y = ridge.kinv_apply(c.x.as_ref(), y.as_ref());
        let v = c.x.transpose() * kinv_y;
        axpy(&mut rhs, p, v.as_ref());
        ridges.push(ridge);
    }
    symmetrize_lower(&mut q);
    Ok(PfedmeSystem { ridges, q, rhs })
}

pub(crate) fn factor_coupling(q: &Mat<f64>) -> Result<SpdSystem> {
    SpdSystem::factor(q, SINGULAR_TOL).map_err(|ratio| Error::SingularCoupling { ratio })
}

/// Joint minimiser of `Σ p_j [(1/2n_j)‖X_j θ_j − y_j‖² + (λ/2)‖θ_j − θ₀‖²]`.
pub fn pfedme_solve(ds: &FederatedDataset, lambda: f64) -> Result<(GlobalModel, Vec<PersonalModel>)> {
    let sys = pfedme_system(ds, lambda, Response::Observed)?;
    let theta0 = factor_coupling(&sys.q)?.solve(sys.rhs.as_ref());
    let personals = ds
        .clients
        .iter()
        .zip(&sys.ridges)
        .enumerate()
        .map(|(i, (c, ridge))| {
            let mut v = c.moment();
            axpy(&mut v, lambda, theta0.as_ref());
            PersonalModel {
                client_index: i,
                theta: ridge.solve_t(c.x.as_ref(), v.as_ref()),
                algorithm: Algorithm::Pfedme,
                hyper: Some(lambda),
            }
        })
        .collect();
    Ok((
        GlobalModel {
            theta: theta0,
            algorithm: Algorithm::Pfedme,
            hyper: Some(lambda),
        },
        personals,
    ))
}

pub fn pfedme_objective(ds: &FederatedDataset, lambda: f64, theta0: ColRef<'_, f64>, personals: &[Vector]) -> f64 {
    ds.clients
        .iter()
        .zip(&ds.weights)
        .zip(personals)
        .map(|((c, &p), t)| {
            let mut r = &c.x * t;
            for k in 0..r.nrows() {
                r[k] -= c.y[k];
            }
            let gap = t - theta0.to_owned();
            p * (r.squared_norm_l2() / (2.0 * c.n() as f64) + 0.5 * lambda * gap.squared_norm_l2())
        })
        .sum()
}

/// Zero-collaboration min-norm interpolant `X_i⁺ y_i`.
pub fn naive_minnorm(client: &ClientData, index: usize) -> Result<PersonalModel> {
    let rs = RowSpace::new(client.x.as_ref(), RANK_TOL)?;
    Ok(PersonalModel {
        client_index: index,
        theta: rs.pinv_apply(client.y.as_ref()),
        algorithm: Algorithm::Naive,
        hyper: None,
    })
}

/// Zero-collaboration ridge `(Σ̂ + λI)⁻¹ X_iᵀ y_i / n_i`.
pub fn naive_ridge(client: &ClientData, index: usize, lambda: f64) -> Result<PersonalModel> {
    check_lambda(lambda)?;
    let ridge = ClientRidge::new(client.x.as_ref(), lambda)?;
    let b = client.moment();
    Ok(PersonalModel {
        client_index: index,
        theta: ridge.solve_t(client.x.as_ref(), b.as_ref()),
        algorithm: Algorithm::NaiveRidge,
        hyper: Some(lambda),
    })
}

/// Gradient of `(1/2n)‖Xθ − y‖² + (λ/2)‖θ − center‖²`.
pub fn local_ridge_gradient(
    client: &ClientData,
    theta: ColRef<'_, f64>,
    lambda: f64,
    center: ColRef<'_, f64>,
) -> Vector {
    let mut r = &client.x * theta;
    for k in 0..r.nrows() {
        r[k] -= client.y[k];
    }
    let mut g = scale(client.x.transpose() * r, 1.0 / client.n() as f64);
    for i in 0..g.nrows() {
        g[i] += lambda * (theta[i] - center[i]);
    }
    g
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{generate_population, PopulationSpec, Theta0Spec};
    use crate::numerics::substream;

    fn rel(a: ColRef<'_, f64>, b: ColRef<'_, f64>) -> f64 {
        (a.to_owned() - b.to_owned()).norm_l2() / b.norm_l2().max(1e-300)
    }

    fn small(m: usize, d: usize, n: usize, r: f64, sigma: f64, seed: u64) -> FederatedDataset {
        generate_population(&PopulationSpec::identity(m, d, n, r, sigma), &substream(seed, 0)).unwrap()
    }

    #[test]
    fn fedavg_single_client_exact_recovery() {
        let ds = small(1, 10, 40, 1.0, 0.0, 1);
        let g = fedavg_global(&ds).unwrap();
        assert!(rel(g.theta.as_ref(), ds.clients[0].theta_star.as_ref()) < 1e-8);
    }

    #[test]
    fn fedavg_homogeneous_recovers_center() {
        let ds = small(8, 20, 10, 0.0, 0.0, 2);
        let g = fedavg_global(&ds).unwrap();
        assert!(rel(g.theta.as_ref(), ds.theta0_star.as_ref()) < 1e-8);
    }

    #[test]
    fn fedavg_underpooled_is_singular() {
        let ds = small(2, 30, 10, 1.0, 1.0, 3);
        assert!(matches!(fedavg_global(&ds), Err(Error::SingularGlobalGram { .. })));
    }

    #[test]
    fn ftfa_examples() {
        let ds = small(10, 30, 10, 1.0, 0.5, 4);
        let g = fedavg_global(&ds).unwrap();
        for i in 0..3 {
            let p = ftfa_personalize(&ds, i, &g).unwrap();
            let c = &ds.clients[i];
            let fit = &c.x * &p.theta;
            assert!(rel(fit.as_ref(), c.y.as_ref()) < 1e-8);
            // Fixed point: an interpolating warm start is returned unchanged.
            let again = ftfa_personalize(
                &ds,
                i,
                &GlobalModel {
                    theta: p.theta.clone(),
                    algorithm: Algorithm::Fedavg,
                    hyper: None,
                },
            )
            .unwrap();
            assert!(rel(again.theta.as_ref(), p.theta.as_ref()) < 1e-10);
        }
        let ds0 = small(10, 30, 10, 1.0, 0.0, 5);
        let truth = GlobalModel {
            theta: ds0.clients[0].theta_star.clone(),
            algorithm: Algorithm::Fedavg,
            hyper: None,
        };
        let p = ftfa_personalize(&ds0, 0, &truth).unwrap();
        assert!(rel(p.theta.as_ref(), ds0.clients[0].theta_star.as_ref()) < 1e-10);
    }

    #[test]
    fn ftfa_decomposition_identity() {
        let ds = small(10, 30, 10, 1.0, 0.7, 6);
        let g = fedavg_global(&ds).unwrap();
        let c = &ds.clients[2];
        let p = ftfa_personalize(&ds, 2, &g).unwrap();
        let rs = RowSpace::new(c.x.as_ref(), RANK_TOL).unwrap();
        let lhs = &p.theta - &c.theta_star;
        let mut rhs = rs.project_null((&g.theta - &c.theta_star).as_ref());
        let noise = rs.pinv_apply(c.xi.as_ref());
        axpy(&mut rhs, 1.0, noise.as_ref());
        assert!((&lhs - &rhs).norm_l2() < 1e-8 * lhs.norm_l2().max(1.0));
    }

    #[test]
    fn rtfa_limits_and_stationarity() {
        let ds = small(10, 30, 10, 1.0, 0.7, 7);
        let g = fedavg_global(&ds).unwrap();
        let big = rtfa_personalize(&ds, 0, &g, 1e8).unwrap();
        assert!(rel(big.theta.as_ref(), g.theta.as_ref()) < 1e-4);
        let tiny = rtfa_personalize(&ds, 0, &g, 1e-10).unwrap();
        let ft = ftfa_personalize(&ds, 0, &g).unwrap();
        assert!(rel(tiny.theta.as_ref(), ft.theta.as_ref()) < 1e-4);
        let mid = rtfa_personalize(&ds, 0, &g, 0.8).unwrap();
        let grad = local_ridge_gradient(&ds.clients[0], mid.theta.as_ref(), 0.8, g.theta.as_ref());
        assert!(grad.norm_l2() < 1e-8);
        assert!(matches!(
            rtfa_personalize(&ds, 0, &g, 0.0),
            Err(Error::NonPositiveLambda(_))
        ));
    }

    #[test]
    fn rtfa_expansion_identity() {
        // (Σ̂ + λI) θ̂ = λ θ̂₀ + Σ̂ θ* + Xᵀξ/n
        let ds = small(10, 30, 10, 1.0, 0.7, 8);
        let g = fedavg_global(&ds).unwrap();
        let c = &ds.clients[1];
        let lambda = 1.3;
        let p = rtfa_personalize(&ds, 1, &g, lambda).unwrap();
        let n = c.n() as f64;
        let xt = |v: &Vector| scale(c.x.transpose() * (&c.x * v), 1.0 / n);
        let mut lhs = xt(&p.theta);
        axpy(&mut lhs, lambda, p.theta.as_ref());
        let mut rhs = xt(&c.theta_star);
        axpy(&mut rhs, lambda, g.theta.as_ref());
        let noise = scale(c.x.transpose() * &c.xi, 1.0 / n);
        axpy(&mut rhs, 1.0, noise.as_ref());
        assert!((&lhs - &rhs).norm_l2() < 1e-8 * rhs.norm_l2());
    }

    #[test]
    fn client_ridge_paths_agree() {
        // n > d takes the primal path, n ≤ d the kernel path; both must
        // agree with a dense solve.
        for &(n, d) in &[(30usize, 8usize), (8, 30)] {
            let ds = small(1, d, n, 1.0, 1.0, 9 + n as u64);
            let c = &ds.clients[0];
            let lambda = 0.37;
            let ridge = ClientRidge::new(c.x.as_ref(), lambda).unwrap();
            let v = substream(99, 0).gaussian_col(d);
            let mut t = crate::numerics::gram(c.x.as_ref());
            for i in 0..d {
                for j in 0..d {
                    t[(i, j)] /= n as f64;
                }
                t[(i, i)] += lambda;
            }
            let dense = t.llt(Side::Lower).unwrap().solve(v.as_ref());
            assert!(rel(ridge.solve_t(c.x.as_ref(), v.as_ref()).as_ref(), dense.as_ref()) < 1e-10);
            let kx = ridge.kinv_x(c.x.as_ref());
            let mut k = &c.x * c.x.transpose();
            for i in 0..n {
                k[(i, i)] += n as f64 * lambda;
            }
            let kx_dense = k.llt(Side::Lower).unwrap().solve(c.x.as_ref());
            let diff = (&kx - &kx_dense).norm_l2() / kx_dense.norm_l2();
            assert!(diff < 1e-9, "n={n} d={d} diff={diff}");
            let u = substream(98, 0).gaussian_col(n);
            let ku = ridge.kinv_apply(c.x.as_ref(), u.as_ref());
            let ku_dense = k.llt(Side::Lower).unwrap().solve(u.as_ref());
            assert!(rel(ku.as_ref(), ku_dense.as_ref()) < 1e-9);
        }
    }

    #[test]
    fn maml_alpha_zero_is_fedavg() {
        let ds = small(10, 30, 10, 1.0, 0.7, 10);
        let fa = fedavg_global(&ds).unwrap();
        let ma = maml_global(&ds, 0.0).unwrap();
        assert!(rel(ma.theta.as_ref(), fa.theta.as_ref()) < 1e-10);
    }

    #[test]
    fn maml_homogeneous_recovers_center() {
        let ds = small(10, 30, 10, 0.0, 0.0, 11);
        let ma = maml_global(&ds, 0.05).unwrap();
        assert!(rel(ma.theta.as_ref(), ds.theta0_star.as_ref()) < 1e-8);
    }

    #[test]
    fn maml_normal_equations_hold() {
        let ds = small(10, 30, 10, 1.0, 0.7, 12);
        let ma = maml_global(&ds, 0.1).unwrap();
        let g = maml_objective_gradient(&ds, 0.1, ma.theta.as_ref());
        assert!(g.norm_l2() < 1e-8);
        let p = maml_personalize(&ds, 0, &ma).unwrap();
        let fit = &ds.clients[0].x * &p.theta;
        assert!(rel(fit.as_ref(), ds.clients[0].y.as_ref()) < 1e-8);
    }

    #[test]
    fn maml_gradient_matches_finite_difference() {
        let ds = small(4, 12, 6, 1.0, 0.5, 13);
        let theta = substream(13, 1).gaussian_col(12);
        let g = maml_objective_gradient(&ds, 0.2, theta.as_ref());
        let h = 1e-6;
        for k in 0..12 {
            let mut tp = theta.clone();
            let mut tm = theta.clone();
            tp[k] += h;
            tm[k] -= h;
            let fd = (maml_objective(&ds, 0.2, tp.as_ref()) - maml_objective(&ds, 0.2, tm.as_ref())) / (2.0 * h);
            assert!((fd - g[k]).abs() < 1e-6 * g.norm_l2().max(1.0));
        }
    }

    #[test]
    fn pfedme_stationary_and_consensus() {
        let ds = small(10, 30, 10, 1.0, 0.7, 14);
        let lambda = 0.9;
        let (g, ps) = pfedme_solve(&ds, lambda).unwrap();
        let mut avg = Col::<f64>::zeros(30);
        for (p, &w) in ps.iter().zip(&ds.weights) {
            axpy(&mut avg, w, p.theta.as_ref());
            let grad = local_ridge_gradient(&ds.clients[p.client_index], p.theta.as_ref(), lambda, g.theta.as_ref());
            assert!(grad.norm_l2() < 1e-8);
        }
        assert!((&avg - &g.theta).norm_l2() < 1e-10 * g.theta.norm_l2());
    }

    #[test]
    fn pfedme_large_lambda_collapses_to_fedavg() {
        let ds = small(10, 30, 10, 1.0, 0.7, 15);
        let fa = fedavg_global(&ds).unwrap();
        let (g, ps) = pfedme_solve(&ds, 1e6).unwrap();
        assert!(rel(g.theta.as_ref(), fa.theta.as_ref()) < 1e-3);
        for p in &ps {
            assert!(rel(p.theta.as_ref(), fa.theta.as_ref()) < 1e-3);
        }
    }

    #[test]
    fn pfedme_single_client() {
        let ds = small(1, 6, 12, 1.0, 0.5, 16);
        let lambda = 0.5;
        let (g, ps) = pfedme_solve(&ds, lambda).unwrap();
        assert!(rel(ps[0].theta.as_ref(), g.theta.as_ref()) < 1e-10);
        let grad = local_ridge_gradient(&ds.clients[0], ps[0].theta.as_ref(), lambda, g.theta.as_ref());
        assert!(grad.norm_l2() < 1e-8);
    }

    #[test]
    fn pfedme_beats_fedavg_rtfa_pair() {
        for seed in 0..5 {
            let ds = small(8, 25, 10, 1.0, 0.7, 100 + seed);
            let lambda = 0.6;
            let (g, ps) = pfedme_solve(&ds, lambda).unwrap();
            let thetas: Vec<Vector> = ps.iter().map(|p| p.theta.clone()).collect();
            let opt = pfedme_objective(&ds, lambda, g.theta.as_ref(), &thetas);
            let fa = fedavg_global(&ds).unwrap();
            let alt: Vec<Vector> = (0..ds.m())
                .map(|i| rtfa_personalize(&ds, i, &fa, lambda).unwrap().theta)
                .collect();
            let other = pfedme_objective(&ds, lambda, fa.theta.as_ref(), &alt);
            assert!(opt <= other + 1e-12);
        }
    }

    #[test]
    fn naive_examples() {
        let ds = small(1, 8, 20, 1.0, 0.0, 17);
        let c = &ds.clients[0];
        let p = naive_minnorm(c, 0).unwrap();
        assert!(rel(p.theta.as_ref(), c.theta_star.as_ref()) < 1e-8);

        let ds = small(3, 30, 10, 1.0, 0.5, 18);
        let c = &ds.clients[0];
        let p = naive_minnorm(c, 0).unwrap();
        let fit = &c.x * &p.theta;
        assert!(rel(fit.as_ref(), c.y.as_ref()) < 1e-8);
        let zero = GlobalModel {
            theta: Col::zeros(30),
            algorithm: Algorithm::Fedavg,
            hyper: None,
        };
        let ft = ftfa_personalize(&ds, 0, &zero).unwrap();
        assert!(rel(ft.theta.as_ref(), p.theta.as_ref()) < 1e-12);

        let big = naive_ridge(c, 0, 1e12).unwrap();
        assert!(big.theta.norm_l2() < 1e-10);
        let tiny = naive_ridge(c, 0, 1e-10).unwrap();
        assert!(rel(tiny.theta.as_ref(), p.theta.as_ref()) < 1e-4);
        let lam = 0.4;
        let r = naive_ridge(c, 0, lam).unwrap();
        let grad = local_ridge_gradient(c, r.theta.as_ref(), lam, Col::<f64>::zeros(30).as_ref());
        assert!(grad.norm_l2() < 1e-8);
        assert!(matches!(naive_ridge(c, 0, -1.0), Err(Error::NonPositiveLambda(_))));
    }

    #[test]
    fn estimators_are_affine_in_noise() {
        let spec = PopulationSpec {
            theta0: Theta0Spec::RandomNorm(1.0),
            ..PopulationSpec::identity(6, 20, 8, 1.0, 0.8)
        };
        let ds = generate_population(&spec, &substream(19, 0)).unwrap();
        let flipped = ds.with_noise(ds.clients.iter().map(|c| scale(c.xi.clone(), -1.0)).collect());
        let clean = ds.noiseless();
        for est in [
            Estimator::Fedavg,
            Estimator::Ftfa,
            Estimator::Rtfa { lambda: 0.7 },
            Estimator::Maml { alpha: 0.1 },
            Estimator::Pfedme { lambda: 0.7 },
            Estimator::Naive,
            Estimator::NaiveRidge { lambda: 0.7 },
        ] {
            let a = est.personal(&ds, 1).unwrap();
            let b = est.personal(&flipped, 1).unwrap();
            let c = est.personal(&clean, 1).unwrap();
            let mid = scale(&a + &b, 0.5);
            assert!((&mid - &c).norm_l2() < 1e-9 * c.norm_l2().max(1.0), "{:?}", est);
        }
    }

    #[test]
    fn algorithm_names_roundtrip() {
        for a in Algorithm::ALL {
            assert_eq!(a.as_str().parse::<Algorithm>().unwrap(), a);
        }
        assert!("bogus".parse::<Algorithm>().is_err());
    }
}

//! Iterative federated training on the linear model: FedAvg, fine-tuning,
//! ridge fine-tuning, MAML (first-order and Hessian-free), pFedMe and purely
//! local training.
//!
//! All randomness is drawn from streams derived from a fixed key, so a
//! client's batches in a round do not depend on which other clients were
//! sampled or on evaluation order.

use faer::{Col, ColRef};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::estimators::ClientRidge;
use crate::model::{ClientData, FederatedDataset};
use crate::numerics::{RngStream, Vector};
use crate::par_map;

const DIVERGENCE_NORM: f64 = 1e12;

// Top-level stream keys.
const KEY_SAMPLING: u64 = 0;
const KEY_BATCH: u64 = 1;
const KEY_PERSONAL: u64 = 2;
const KEY_LOCAL: u64 = 3;

// Batch roles within one local step.
const ROLE_META: u64 = 0;
const ROLE_LOOKAHEAD: u64 = 1;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Init {
    #[default]
    Zero,
    Given(Vec<f64>),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MamlVariant {
    FirstOrder,
    HessianFree,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    /// Communication rounds `R`.
    pub rounds: usize,
    /// Clients sampled per round `D`; all clients when absent.
    pub sampled_users: Option<usize>,
    /// Local SGM steps per round `K` (epochs for `local_train`).
    pub local_steps: usize,
    /// Batch size `B`; full batch when absent.
    pub batch_size: Option<usize>,
    /// `η`.
    pub global_stepsize: f64,
    /// `α`: personalization stepsize and MAML lookahead stepsize.
    pub personal_stepsize: f64,
    /// Personalization epochs `P`.
    pub personalization_steps: usize,
    pub lambda: f64,
    /// Server mixing `β` for pFedMe.
    pub pfedme_mixing: f64,
    /// Finite-difference step `δ` of the Hessian-free meta-gradient.
    pub hf_delta: f64,
    pub init: Init,
    /// Reuse the lookahead batch for the MAML meta-gradient.
    pub shared_batch: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            rounds: 400,
            sampled_users: None,
            local_steps: 1,
            batch_size: None,
            global_stepsize: 0.1,
            personal_stepsize: 0.1,
            personalization_steps: 0,
            lambda: 1.0,
            pfedme_mixing: 1.0,
            hf_delta: 1e-5,
            init: Init::Zero,
            shared_batch: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self, m: usize, d: usize) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidConfig(msg));
        if self.rounds == 0 {
            return bad("rounds must be at least 1".into());
        }
        if let Some(k) = self.sampled_users {
            if k == 0 || k > m {
                return bad(format!("sampled_users must lie in 1..={m}, got {k}"));
            }
        }
        if self.batch_size == Some(0) {
            return bad("batch_size must be at least 1".into());
        }
        for (name, v) in [("global_stepsize", self.global_stepsize), ("hf_delta", self.hf_delta)] {
            if !(v > 0.0 && v.is_finite()) {
                return bad(format!("{name} must be positive, got {v}"));
            }
        }
        // α = 0 is meaningful: MAML then reduces to FedAvg.
        if !(self.personal_stepsize >= 0.0 && self.personal_stepsize.is_finite()) {
            return bad(format!(
                "personal_stepsize must be nonnegative, got {}",
                self.personal_stepsize
            ));
        }
        if !(self.lambda > 0.0 && self.lambda.is_finite()) {
            return Err(Error::NonPositiveLambda(self.lambda));
        }
        if !(self.pfedme_mixing > 0.0 && self.pfedme_mixing <= 1.0) {
            return bad(format!("pfedme_mixing must lie in (0, 1], got {}", self.pfedme_mixing));
        }
        if let Init::Given(v) = &self.init {
            if v.len() != d {
                return bad(format!("init has length {}, expected {d}", v.len()));
            }
        }
        Ok(())
    }

    fn init_vector(&self, d: usize) -> Vector {
        match &self.init {
            Init::Zero => Col::zeros(d),
            Init::Given(v) => Col::from_fn(d, |i| v[i]),
        }
    }

    fn batch(&self, n: usize) -> usize {
        self.batch_size.unwrap_or(n).min(n)
    }
}

#[derive(Clone, Debug)]
pub struct Trajectory {
    /// Global iterate after each round; entry 0 is the initialisation.
    pub iterates: Vec<Vector>,
    /// Mean over clients of `‖θ − θ_i*‖²_Σ` for each entry of `iterates`.
    pub mean_risk: Vec<f64>,
    pub global: Vector,
    /// Personalized models, one per client, when the algorithm produces them.
    pub personals: Vec<Vector>,
}

impl Trajectory {
    fn start(ds: &FederatedDataset, theta: Vector) -> Self {
        Self {
            mean_risk: vec![mean_global_risk(ds, theta.as_ref())],
            iterates: vec![theta.clone()],
            global: theta,
            personals: Vec::new(),
        }
    }

    fn push(&mut self, ds: &FederatedDataset, theta: Vector) {
        self.mean_risk.push(mean_global_risk(ds, theta.as_ref()));
        self.iterates.push(theta.clone());
        self.global = theta;
    }
}

/// Mean over clients of the population risk of a shared model.
pub fn mean_global_risk(ds: &FederatedDataset, theta: ColRef<'_, f64>) -> f64 {
    let total: f64 = ds
        .clients
        .iter()
        .map(|c| c.sigma.quad_form((theta.to_owned() - &c.theta_star).as_ref()))
        .sum();
    total / ds.m() as f64
}

fn check_finite(theta: &Vector, round: usize) -> Result<()> {
    let norm = theta.norm_l2();
    if !norm.is_finite() || norm > DIVERGENCE_NORM {
        return Err(Error::Diverged { round, norm });
    }
    Ok(())
}

/// `(1/B) Σ_{k ∈ batch} x_k (x_kᵀ θ − y_k)`.
pub fn local_gradient(client: &ClientData, theta: ColRef<'_, f64>, batch: &[usize]) -> Vector {
    assert!(!batch.is_empty(), "local_gradient needs a nonempty batch");
    let d = client.d();
    let mut g = vec![0.0; d];
    for &k in batch {
        let row = client.x.row(k);
        let mut r = -client.y[k];
        for j in 0..d {
            r += row[j] * theta[j];
        }
        for j in 0..d {
            g[j] += r * row[j];
        }
    }
    let b = batch.len() as f64;
    Col::from_fn(d, |j| g[j] / b)
}

#[cfg(test)]
fn batch_loss(client: &ClientData, theta: ColRef<'_, f64>, batch: &[usize]) -> f64 {
    let row_loss = |k: usize| {
        let row = client.x.row(k);
        let mut r = -client.y[k];
        for j in 0..row.ncols() {
            r += row[j] * theta[j];
        }
        r * r
    };
    batch.iter().map(|&k| row_loss(k)).sum::<f64>() / (2.0 * batch.len() as f64)
}

fn step_batch(stream: &RngStream, n: usize, b: usize, keys: &[u64]) -> Vec<usize> {
    if b >= n {
        (0..n).collect()
    } else {
        stream.derive(keys).sample_without_replacement(n, b)
    }
}

fn sampled_clients(stream: &RngStream, m: usize, cfg: &TrainConfig, round: usize) -> Vec<usize> {
    match cfg.sampled_users {
        Some(k) if k < m => stream
            .derive(&[KEY_SAMPLING, round as u64])
            .sample_without_replacement(m, k),
        _ => (0..m).collect(),
    }
}

/// `θ ← θ − η g` in place.
fn descend(theta: &mut Vector, step: f64, g: &Vector) {
    for i in 0..theta.nrows() {
        theta[i] -= step * g[i];
    }
}

/// Server average of client iterates weighted by their sample counts, in
/// ascending client order.
fn n_weighted_average(ds: &FederatedDataset, clients: &[usize], iterates: &[Vector]) -> Vector {
    let total: f64 = clients.iter().map(|&j| ds.clients[j].n() as f64).sum();
    let mut avg = Col::<f64>::zeros(ds.d());
    for (&j, t) in clients.iter().zip(iterates) {
        let w = ds.clients[j].n() as f64 / total;
        for i in 0..avg.nrows() {
            avg[i] += w * t[i];
        }
    }
    avg
}

/// Runs rounds of sample → local update → n-weighted average.
fn run_rounds(
    ds: &FederatedDataset,
    cfg: &TrainConfig,
    stream: &RngStream,
    local: impl Fn(usize, usize, &Vector) -> Vector + Sync + Send,
    server: impl Fn(&Vector, Vector) -> Vector,
) -> Result<Trajectory> {
    cfg.validate(ds.m(), ds.d())?;
    let mut traj = Trajectory::start(ds, cfg.init_vector(ds.d()));
    for round in 0..cfg.rounds {
        let clients = sampled_clients(stream, ds.m(), cfg, round);
        let theta = traj.global.clone();
        let iterates = par_map(&clients, |&j| local(round, j, &theta));
        let next = server(&theta, n_weighted_average(ds, &clients, &iterates));
        check_finite(&next, round)?;
        traj.push(ds, next);
    }
    Ok(traj)
}

/// Federated averaging with `K` local SGM steps per round.
pub fn fedavg_train(ds: &FederatedDataset, cfg: &TrainConfig, stream: &RngStream) -> Result<Trajectory> {
    run_rounds(
        ds,
        cfg,
        stream,
        |round, j, theta| {
            let c = &ds.clients[j];
            let b = cfg.batch(c.n());
            let mut t = theta.clone();
            for step in 0..cfg.local_steps {
                let batch = step_batch(
                    stream,
                    c.n(),
                    b,
                    &[KEY_BATCH, round as u64, j as u64, step as u64, ROLE_META],
                );
                let g = local_gradient(c, t.as_ref(), &batch);
                descend(&mut t, cfg.global_stepsize, &g);
            }
            t
        },
        |_, avg| avg,
    )
}

/// `epochs` passes of minibatch SGM over a fresh permutation each epoch,
/// with gradient `g(θ) + λ(θ − center)` when `ridge` is given.
#[allow(clippy::too_many_arguments)]
fn sgm_epochs(
    client: &ClientData,
    start: &Vector,
    epochs: usize,
    step: f64,
    batch_size: usize,
    ridge: Option<(f64, &Vector)>,
    stream: &RngStream,
    mut path: Option<&mut Vec<Vector>>,
) -> Result<Vector> {
    let n = client.n();
    let b = batch_size.min(n);
    let mut theta = start.clone();
    if let Some(p) = path.as_deref_mut() {
        p.push(theta.clone());
    }
    for epoch in 0..epochs {
        let order: Vec<usize> = if b >= n {
            (0..n).collect()
        } else {
            stream.derive(&[epoch as u64]).permutation(n)
        };
        for chunk in order.chunks(b) {
            let mut batch = chunk.to_vec();
            batch.sort_unstable();
            let mut g = local_gradient(client, theta.as_ref(), &batch);
            if let Some((lambda, center)) = ridge {
                for i in 0..g.nrows() {
                    g[i] += lambda * (theta[i] - center[i]);
                }
            }
            descend(&mut theta, step, &g);
        }
        check_finite(&theta, epoch)?;
        if let Some(p) = path.as_deref_mut() {
            p.push(theta.clone());
        }
    }
    Ok(theta)
}

/// `P` epochs of local SGM from the global model (stepsize `α`).
pub fn ftfa_train(global: &Vector, client: &ClientData, cfg: &TrainConfig, stream: &RngStream) -> Result<Vector> {
    let b = cfg.batch(client.n());
    sgm_epochs(
        client,
        global,
        cfg.personalization_steps,
        cfg.personal_stepsize,
        b,
        None,
        stream,
        None,
    )
}

/// Like [`ftfa_train`] but returns the start and every epoch's iterate.
pub fn ftfa_train_path(
    global: &Vector,
    client: &ClientData,
    cfg: &TrainConfig,
    stream: &RngStream,
) -> Result<Vec<Vector>> {
    let b = cfg.batch(client.n());
    let mut path = Vec::with_capacity(cfg.personalization_steps + 1);
    sgm_epochs(
        client,
        global,
        cfg.personalization_steps,
        cfg.personal_stepsize,
        b,
        None,
        stream,
        Some(&mut path),
    )?;
    Ok(path)
}

/// `P` epochs of local SGM on the ridge objective recentred at the global
/// model.
pub fn rtfa_train(global: &Vector, client: &ClientData, cfg: &TrainConfig, stream: &RngStream) -> Result<Vector> {
    rtfa_run(global, client, cfg, stream, None)
}

/// Like [`rtfa_train`] but returns the start and every epoch's iterate.
pub fn rtfa_train_path(
    global: &Vector,
    client: &ClientData,
    cfg: &TrainConfig,
    stream: &RngStream,
) -> Result<Vec<Vector>> {
    let mut path = Vec::with_capacity(cfg.personalization_steps + 1);
    rtfa_run(global, client, cfg, stream, Some(&mut path))?;
    Ok(path)
}

fn rtfa_run(
    global: &Vector,
    client: &ClientData,
    cfg: &TrainConfig,
    stream: &RngStream,
    path: Option<&mut Vec<Vector>>,
) -> Result<Vector> {
    if !(cfg.lambda > 0.0) {
        return Err(Error::NonPositiveLambda(cfg.lambda));
    }
    let b = cfg.batch(client.n());
    sgm_epochs(
        client,
        global,
        cfg.personalization_steps,
        cfg.personal_stepsize,
        b,
        Some((cfg.lambda, global)),
        stream,
        path,
    )
}

fn personalize_all(
    ds: &FederatedDataset,
    global: &Vector,
    cfg: &TrainConfig,
    stream: &RngStream,
) -> Result<Vec<Vector>> {
    let idx: Vec<usize> = (0..ds.m()).collect();
    par_map(&idx, |&j| {
        ftfa_train(global, &ds.clients[j], cfg, &stream.derive(&[KEY_PERSONAL, j as u64]))
    })
    .into_iter()
    .collect()
}

/// Meta-gradient of one MAML local step.
///
/// Lookahead `w = θ − α g(θ; B₁)`; first-order returns `g(w; B₂)`, the
/// Hessian-free variant returns `(I − α Ĥ) g(w; B₂)` with
/// `Ĥ v = (g(θ + δv; B₁) − g(θ − δv; B₁)) / 2δ`.
pub fn maml_meta_gradient(
    client: &ClientData,
    theta: ColRef<'_, f64>,
    lookahead_batch: &[usize],
    meta_batch: &[usize],
    alpha: f64,
    delta: f64,
    variant: MamlVariant,
) -> Vector {
    let d = theta.nrows();
    let g1 = local_gradient(client, theta, lookahead_batch);
    let w = Col::from_fn(d, |i| theta[i] - alpha * g1[i]);
    let g2 = local_gradient(client, w.as_ref(), meta_batch);
    match variant {
        MamlVariant::FirstOrder => g2,
        MamlVariant::HessianFree => {
            let plus = Col::from_fn(d, |i| theta[i] + delta * g2[i]);
            let minus = Col::from_fn(d, |i| theta[i] - delta * g2[i]);
            let gp = local_gradient(client, plus.as_ref(), lookahead_batch);
            let gm = local_gradient(client, minus.as_ref(), lookahead_batch);
            Col::from_fn(d, |i| g2[i] - alpha * (gp[i] - gm[i]) / (2.0 * delta))
        }
    }
}

/// Federated MAML followed by `P` personalization epochs per client.
pub fn maml_train(
    ds: &FederatedDataset,
    cfg: &TrainConfig,
    stream: &RngStream,
    variant: MamlVariant,
) -> Result<Trajectory> {
    let alpha = cfg.personal_stepsize;
    let mut traj = run_rounds(
        ds,
        cfg,
        stream,
        |round, j, theta| {
            let c = &ds.clients[j];
            let b = cfg.batch(c.n());
            let mut t = theta.clone();
            for step in 0..cfg.local_steps {
                let key = |role| [KEY_BATCH, round as u64, j as u64, step as u64, role];
                let meta = step_batch(stream, c.n(), b, &key(ROLE_META));
                let look = if cfg.shared_batch {
                    meta.clone()
                } else {
                    step_batch(stream, c.n(), b, &key(ROLE_LOOKAHEAD))
                };
                let g = maml_meta_gradient(c, t.as_ref(), &look, &meta, alpha, cfg.hf_delta, variant);
                descend(&mut t, cfg.global_stepsize, &g);
            }
            t
        },
        |_, avg| avg,
    )?;
    if cfg.personalization_steps > 0 {
        traj.personals = personalize_all(ds, &traj.global, cfg, stream)?;
    }
    Ok(traj)
}

/// pFedMe: each local step solves the batch prox problem exactly, then moves
/// the local copy toward it; the server mixes with weight `β`.
pub fn pfedme_train(ds: &FederatedDataset, cfg: &TrainConfig, stream: &RngStream) -> Result<Trajectory> {
    let lambda = cfg.lambda;
    let full: Vec<Option<ClientRidge>> = ds
        .clients
        .iter()
        .map(|c| {
            if cfg.batch(c.n()) >= c.n() {
                ClientRidge::new(c.x.as_ref(), lambda).map(Some)
            } else {
                Ok(None)
            }
        })
        .collect::<Result<_>>()?;
    let prox = |c: &ClientData, ridge: Option<&ClientRidge>, batch: &[usize], anchor: &Vector| -> Result<Vector> {
        // argmin (1/2B)‖X_B θ − y_B‖² + (λ/2)‖θ − anchor‖²
        match ridge {
            Some(r) => {
                let mut rhs = c.moment();
                for i in 0..rhs.nrows() {
                    rhs[i] += lambda * anchor[i];
                }
                Ok(r.solve_t(c.x.as_ref(), rhs.as_ref()))
            }
            None => {
                let xb = faer::Mat::from_fn(batch.len(), c.d(), |k, j| c.x[(batch[k], j)]);
                let yb = Col::from_fn(batch.len(), |k| c.y[batch[k]]);
                let r = ClientRidge::new(xb.as_ref(), lambda)?;
                let mut rhs = xb.transpose() * &yb;
                let bf = batch.len() as f64;
                for i in 0..rhs.nrows() {
                    rhs[i] = rhs[i] / bf + lambda * anchor[i];
                }
                Ok(r.solve_t(xb.as_ref(), rhs.as_ref()))
            }
        }
    };
    let failure = std::sync::Mutex::new(None);
    let beta = cfg.pfedme_mixing;
    let mut traj = run_rounds(
        ds,
        cfg,
        stream,
        |round, j, theta| {
            let c = &ds.clients[j];
            let b = cfg.batch(c.n());
            let mut local = theta.clone();
            for step in 0..cfg.local_steps {
                let batch = step_batch(
                    stream,
                    c.n(),
                    b,
                    &[KEY_BATCH, round as u64, j as u64, step as u64, ROLE_META],
                );
                match prox(c, full[j].as_ref(), &batch, &local) {
                    Ok(personal) => {
                        for i in 0..local.nrows() {
                            local[i] -= cfg.global_stepsize * lambda * (local[i] - personal[i]);
                        }
                    }
                    Err(e) => {
                        failure.lock().unwrap().get_or_insert(e);
                        break;
                    }
                }
            }
            local
        },
        |prev, avg| Col::from_fn(prev.nrows(), |i| (1.0 - beta) * prev[i] + beta * avg[i]),
    )?;
    if let Some(e) = failure.into_inner().unwrap() {
        return Err(e);
    }
    let all: Vec<usize> = (0..ds.m()).collect();
    traj.personals = all
        .iter()
        .map(|&j| {
            prox(
                &ds.clients[j],
                full[j].as_ref(),
                &all_rows(ds.clients[j].n()),
                &traj.global,
            )
        })
        .collect::<Result<_>>()?;
    Ok(traj)
}

fn all_rows(n: usize) -> Vec<usize> {
    (0..n).collect()
}

/// Purely local SGM from zero for `K` epochs with stepsize `η`.
pub fn local_train(client: &ClientData, cfg: &TrainConfig, stream: &RngStream) -> Result<Vector> {
    let zero = Col::zeros(client.d());
    let b = cfg.batch(client.n());
    sgm_epochs(
        client,
        &zero,
        cfg.local_steps,
        cfg.global_stepsize,
        b,
        None,
        &stream.derive(&[KEY_LOCAL]),
        None,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::estimators::{
        fedavg_global, ftfa_personalize, maml_objective, naive_minnorm, pfedme_solve, rtfa_personalize,
    };
    use crate::model::{generate_population, PopulationSpec};
    use crate::numerics::substream;

    fn ds(m: usize, d: usize, n: usize, r: f64, sigma: f64, seed: u64) -> FederatedDataset {
        generate_population(&PopulationSpec::identity(m, d, n, r, sigma), &substream(seed, 0)).unwrap()
    }

    fn rel(a: &Vector, b: &Vector) -> f64 {
        (a - b).norm_l2() / b.norm_l2()
    }

    #[test]
    fn gradient_examples() {
        let data = ds(1, 6, 12, 1.0, 0.0, 1);
        let c = &data.clients[0];
        let all: Vec<usize> = (0..12).collect();
        assert!(local_gradient(c, c.theta_star.as_ref(), &all).norm_l2() < 1e-12);
        let theta = substream(5, 5).gaussian_col(6);
        let g = local_gradient(c, theta.as_ref(), &all);
        let expect = (c.x.transpose() * (&c.x * &theta)) * faer::Scale(1.0 / 12.0) - c.moment();
        assert!((&g - &expect).norm_l2() < 1e-12);
        let batch = [1, 4, 7];
        let gb = local_gradient(c, theta.as_ref(), &batch);
        for k in 0..6 {
            let mut tp = theta.clone();
            let mut tm = theta.clone();
            tp[k] += 1e-6;
            tm[k] -= 1e-6;
            let fd = (batch_loss(c, tp.as_ref(), &batch) - batch_loss(c, tm.as_ref(), &batch)) / 2e-6;
            assert!((fd - gb[k]).abs() < 1e-6 * gb.norm_l2().max(1.0));
        }
    }

    fn gd_cfg(rounds: usize, eta: f64) -> TrainConfig {
        TrainConfig {
            rounds,
            global_stepsize: eta,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn fedavg_full_batch_converges_and_diverges() {
        let data = ds(10, 20, 10, 1.0, 0.5, 2);
        let t = fedavg_train(&data, &gd_cfg(3000, 0.3), &substream(1, 0)).unwrap();
        let cf = fedavg_global(&data).unwrap().theta;
        assert!(rel(&t.global, &cf) < 1e-6, "{}", rel(&t.global, &cf));
        assert!(matches!(
            fedavg_train(&data, &gd_cfg(200, 50.0), &substream(1, 0)),
            Err(Error::Diverged { .. })
        ));
    }

    #[test]
    fn fedavg_homogeneous_risk_vanishes() {
        let data = ds(10, 20, 10, 0.0, 0.0, 3);
        let t = fedavg_train(&data, &gd_cfg(3000, 0.3), &substream(1, 0)).unwrap();
        assert!(*t.mean_risk.last().unwrap() < 1e-6);
        assert!(t.mean_risk.windows(2).all(|w| w[1] <= w[0] * (1.0 + 1e-12) + 1e-24));
    }

    #[test]
    fn fine_tuning_converges_to_closed_forms() {
        let data = ds(10, 20, 10, 1.0, 0.5, 4);
        let g = fedavg_global(&data).unwrap();
        let cfg = TrainConfig {
            personalization_steps: 20000,
            personal_stepsize: 0.2,
            lambda: 0.7,
            ..TrainConfig::default()
        };
        let s = substream(2, 0);
        let ft = ftfa_train(&g.theta, &data.clients[0], &cfg, &s).unwrap();
        let cf = ftfa_personalize(&data, 0, &g).unwrap().theta;
        assert!(rel(&ft, &cf) < 1e-6, "{}", rel(&ft, &cf));
        let rt = rtfa_train(&g.theta, &data.clients[0], &cfg, &s).unwrap();
        let cf = rtfa_personalize(&data, 0, &g, 0.7).unwrap().theta;
        assert!(rel(&rt, &cf) < 1e-6);
        let zero = TrainConfig {
            personalization_steps: 0,
            ..cfg
        };
        assert_eq!(ftfa_train(&g.theta, &data.clients[0], &zero, &s).unwrap(), g.theta);
    }

    #[test]
    fn fine_tuning_loss_is_monotone_in_p() {
        let data = ds(4, 20, 10, 1.0, 0.5, 5);
        let g = fedavg_global(&data).unwrap();
        let all: Vec<usize> = (0..10).collect();
        for c in &data.clients {
            let mut prev = f64::INFINITY;
            for p in 0..15 {
                let cfg = TrainConfig {
                    personalization_steps: p,
                    personal_stepsize: 0.1,
                    ..TrainConfig::default()
                };
                let t = ftfa_train(&g.theta, c, &cfg, &substream(0, 0)).unwrap();
                let loss = batch_loss(c, t.as_ref(), &all);
                assert!(loss <= prev + 1e-15);
                prev = loss;
            }
        }
    }

    #[test]
    fn maml_alpha_zero_is_fedavg_bitwise() {
        let data = ds(8, 20, 10, 1.0, 0.5, 6);
        let cfg = TrainConfig {
            rounds: 30,
            sampled_users: Some(3),
            local_steps: 4,
            batch_size: Some(3),
            global_stepsize: 0.05,
            personal_stepsize: 0.0,
            ..TrainConfig::default()
        };
        let s = substream(3, 0);
        let fa = fedavg_train(&data, &cfg, &s).unwrap();
        for variant in [MamlVariant::FirstOrder, MamlVariant::HessianFree] {
            let ma = maml_train(&data, &cfg, &s, variant).unwrap();
            assert_eq!(ma.iterates, fa.iterates);
        }
    }

    #[test]
    fn hessian_free_matches_exact_hessian() {
        let data = ds(1, 10, 8, 1.0, 0.5, 7);
        let c = &data.clients[0];
        let theta = substream(4, 4).gaussian_col(10);
        let look = [0, 2, 5];
        let meta = [1, 3, 4, 7];
        let alpha = 0.3;
        let hf = maml_meta_gradient(c, theta.as_ref(), &look, &meta, alpha, 1e-5, MamlVariant::HessianFree);
        let fo = maml_meta_gradient(c, theta.as_ref(), &look, &meta, alpha, 1e-5, MamlVariant::FirstOrder);
        let xb = faer::Mat::from_fn(3, 10, |k, j| c.x[(look[k], j)]);
        let hv = (xb.transpose() * (&xb * &fo)) * faer::Scale(1.0 / 3.0);
        let exact = &fo - hv * faer::Scale(alpha);
        assert!((&hf - &exact).norm_l2() < 1e-4 * exact.norm_l2().max(1.0));
    }

    #[test]
    fn maml_full_batch_decreases_objective() {
        let data = ds(6, 20, 10, 1.0, 0.5, 8);
        let alpha = 0.05;
        let cfg = TrainConfig {
            rounds: 50,
            global_stepsize: 0.1,
            personal_stepsize: alpha,
            shared_batch: true,
            ..TrainConfig::default()
        };
        let t = maml_train(&data, &cfg, &substream(5, 0), MamlVariant::HessianFree).unwrap();
        let objs: Vec<f64> = t
            .iterates
            .iter()
            .map(|th| maml_objective(&data, alpha, th.as_ref()))
            .collect();
        assert!(objs.windows(2).all(|w| w[1] <= w[0] + 1e-12));
    }

    #[test]
    fn pfedme_converges_to_closed_form() {
        let data = ds(10, 20, 10, 1.0, 0.5, 9);
        let lambda = 1.0;
        let cfg = TrainConfig {
            rounds: 4000,
            global_stepsize: 0.5,
            lambda,
            ..TrainConfig::default()
        };
        let t = pfedme_train(&data, &cfg, &substream(6, 0)).unwrap();
        let (g, ps) = pfedme_solve(&data, lambda).unwrap();
        assert!(rel(&t.global, &g.theta) < 1e-3, "{}", rel(&t.global, &g.theta));
        assert!(rel(&t.personals[0], &ps[0].theta) < 1e-3);
    }

    #[test]
    fn pfedme_large_lambda_pins_personals() {
        let data = ds(6, 20, 10, 1.0, 0.5, 10);
        let cfg = TrainConfig {
            rounds: 20,
            global_stepsize: 1e-7,
            lambda: 1e6,
            batch_size: Some(4),
            ..TrainConfig::default()
        };
        let t = pfedme_train(&data, &cfg, &substream(7, 0)).unwrap();
        for p in &t.personals {
            assert!((p - &t.global).norm_l2() < 1e-3 * t.global.norm_l2().max(1.0));
        }
        let wild = TrainConfig {
            rounds: 200,
            global_stepsize: 100.0,
            lambda: 1.0,
            ..TrainConfig::default()
        };
        assert!(matches!(
            pfedme_train(&data, &wild, &substream(7, 0)),
            Err(Error::Diverged { .. })
        ));
    }

    #[test]
    fn local_training_examples() {
        let data = ds(1, 20, 10, 1.0, 0.5, 11);
        let c = &data.clients[0];
        let cfg = TrainConfig {
            local_steps: 20000,
            global_stepsize: 0.2,
            ..TrainConfig::default()
        };
        let t = local_train(c, &cfg, &substream(8, 0)).unwrap();
        let cf = naive_minnorm(c, 0).unwrap().theta;
        assert!(rel(&t, &cf) < 1e-5);
        let none = TrainConfig { local_steps: 0, ..cfg };
        assert_eq!(local_train(c, &none, &substream(8, 0)).unwrap().norm_l2(), 0.0);

        let data = ds(1, 5, 40, 1.0, 0.0, 12);
        let c = &data.clients[0];
        let cfg = TrainConfig {
            local_steps: 300,
            batch_size: Some(8),
            global_stepsize: 0.1,
            ..TrainConfig::default()
        };
        let t = local_train(c, &cfg, &substream(9, 0)).unwrap();
        assert!(rel(&t, &c.theta_star) < 1e-4);
    }

    #[test]
    fn seeded_runs_are_reproducible_and_sampling_distinct() {
        let data = ds(8, 20, 10, 1.0, 0.5, 13);
        let cfg = TrainConfig {
            rounds: 10,
            sampled_users: Some(4),
            batch_size: Some(3),
            local_steps: 2,
            ..TrainConfig::default()
        };
        let a = fedavg_train(&data, &cfg, &substream(10, 0)).unwrap();
        let b = fedavg_train(&data, &cfg, &substream(10, 0)).unwrap();
        assert_eq!(a.iterates, b.iterates);
        for round in 0..10 {
            let s = sampled_clients(&substream(10, 0), 8, &cfg, round);
            let mut u = s.clone();
            u.dedup();
            assert_eq!(u.len(), 4);
        }
    }

    #[test]
    fn config_validation() {
        let cfg = TrainConfig {
            sampled_users: Some(20),
            ..TrainConfig::default()
        };
        assert!(cfg.validate(10, 5).is_err());
        let cfg = TrainConfig {
            global_stepsize: 0.0,
            ..TrainConfig::default()
        };
        assert!(cfg.validate(10, 5).is_err());
        let json = r#"{"rounds": 5, "bogus": 1}"#;
        assert!(serde_json::from_str::<TrainConfig>(json).is_err());
    }
}

//! Experiment configuration, trial and sweep execution, result persistence
//! and theory-vs-simulation summaries.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::estimators::{
    fedavg_global, ftfa_personalize, maml_global, naive_minnorm, pfedme_solve, rtfa_personalize, Algorithm, Estimator,
};
use crate::fedtrain::{
    fedavg_train, ftfa_train_path, local_train, maml_train, pfedme_train, rtfa_train_path, MamlVariant, TrainConfig,
};
use crate::model::{esd, generate_population, wesd, ClientData, FederatedDataset, PopulationSpec};
use crate::numerics::{substream, RngStream, Vector};
use crate::risk::{exact_risks, RiskReport};
use crate::theory::{self, TheoryLimit};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Hypers {
    /// Ridge parameter for rtfa, pfedme and naive-ridge.
    pub lambda: f64,
    /// Use `λ* = σ²γ/r²` (with `ρ` for naive-ridge) instead of `lambda`.
    pub lambda_optimal: bool,
    /// MAML lookahead stepsize.
    pub alpha: f64,
    pub eval_client: usize,
    /// Also emit an all-client mean row per algorithm.
    pub aggregate: bool,
    /// Settings for the `train` command.
    pub train: TrainConfig,
}

impl Default for Hypers {
    fn default() -> Self {
        Self {
            lambda: 1.0,
            lambda_optimal: false,
            alpha: 0.1,
            eval_client: 0,
            aggregate: false,
            train: TrainConfig::default(),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SweepAxes {
    pub m: Vec<usize>,
    pub d: Vec<usize>,
    pub gamma: Vec<f64>,
    pub r: Vec<f64>,
    pub sigma: Vec<f64>,
    pub lambda: Vec<f64>,
    pub alpha: Vec<f64>,
}

fn default_algorithms() -> Vec<Algorithm> {
    Algorithm::ALL.to_vec()
}

fn default_trials() -> usize {
    1
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepConfig {
    pub population: PopulationSpec,
    #[serde(default = "default_algorithms")]
    pub algorithms: Vec<Algorithm>,
    #[serde(default)]
    pub hypers: Hypers,
    #[serde(default)]
    pub sweep_axes: SweepAxes,
    #[serde(default = "default_trials")]
    pub trials: usize,
    #[serde(default)]
    pub master_seed: u64,
}

impl SweepConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: SweepConfig = serde_json::from_str(text).map_err(|e| Error::InvalidConfig(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_path(path: &std::path::Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn validate(&self) -> Result<()> {
        if self.trials == 0 {
            return Err(Error::InvalidConfig("trials must be at least 1".into()));
        }
        if self.algorithms.is_empty() {
            return Err(Error::InvalidConfig("algorithms must be nonempty".into()));
        }
        let a = &self.sweep_axes;
        if a.gamma.iter().any(|&g| !(g > 0.0)) {
            return Err(Error::InvalidConfig("gamma axis values must be positive".into()));
        }
        if a.m.contains(&0) || a.d.contains(&0) {
            return Err(Error::InvalidConfig("m and d axis values must be positive".into()));
        }
        Ok(())
    }

    /// First 16 hex digits of the SHA-256 of the canonical JSON encoding.
    pub fn hash(&self) -> String {
        let canonical = serde_json::to_string(self).expect("config serializes");
        let digest = Sha256::digest(canonical.as_bytes());
        digest.iter().take(8).map(|b| format!("{b:02x}")).collect()
    }

    /// Cartesian product of the axes, `m` outermost and `alpha` innermost.
    pub fn cells(&self) -> Result<Vec<Cell>> {
        let a = &self.sweep_axes;
        fn axis<T: Copy>(v: &[T]) -> Vec<Option<T>> {
            if v.is_empty() {
                vec![None]
            } else {
                v.iter().copied().map(Some).collect()
            }
        }
        let mut cells = Vec::new();
        for m in axis(&a.m) {
            for d in axis(&a.d) {
                for gamma in axis(&a.gamma) {
                    for r in axis(&a.r) {
                        for sigma in axis(&a.sigma) {
                            for lambda in axis(&a.lambda) {
                                for alpha in axis(&a.alpha) {
                                    let population = apply_axes(&self.population, m, d, gamma, r, sigma)?;
                                    let mut hypers = self.hypers.clone();
                                    if let Some(l) = lambda {
                                        hypers.lambda = l;
                                    }
                                    if let Some(al) = alpha {
                                        hypers.alpha = al;
                                    }
                                    cells.push(Cell {
                                        index: cells.len(),
                                        population,
                                        hypers,
                                    });
                                }
                            }
                        }
                    }
                }
            }
        }
        Ok(cells)
    }
}

#[derive(Clone, Debug)]
pub struct Cell {
    pub index: usize,
    pub population: PopulationSpec,
    pub hypers: Hypers,
}

/// Applies axis values to a population. A `d` or `gamma` value sets each
/// client's `n = round(d/γ)`, keeping the client's current ratio when only
/// `d` changes.
fn apply_axes(
    base: &PopulationSpec,
    m: Option<usize>,
    d: Option<usize>,
    gamma: Option<f64>,
    r: Option<f64>,
    sigma: Option<f64>,
) -> Result<PopulationSpec> {
    let mut pop = base.clone();
    let old_d = base.d;
    if let Some(m) = m {
        pop.m = m;
        if let Some(list) = &pop.clients {
            if list.len() != m {
                return Err(Error::InvalidConfig(
                    "the m axis needs a template client, not an explicit client list".into(),
                ));
            }
        }
    }
    if let Some(d) = d {
        pop.d = d;
    }
    let edit = |c: &mut crate::model::ClientSpec| {
        if d.is_some() || gamma.is_some() {
            let g = gamma.unwrap_or(old_d as f64 / c.n as f64);
            c.n = ((pop.d as f64 / g).round() as usize).max(1);
        }
        if let Some(r) = r {
            c.r = r;
        }
        if let Some(s) = sigma {
            c.sigma = s;
        }
    };
    if let Some(c) = pop.client.as_mut() {
        edit(c);
    }
    if let Some(list) = pop.clients.as_mut() {
        list.iter_mut().for_each(edit);
    }
    Ok(pop)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    pub trial: usize,
    pub seed: u64,
    pub cell: usize,
    pub config_hash: String,
    pub algorithm: Algorithm,
    pub m: usize,
    pub d: usize,
    pub n: usize,
    pub gamma: f64,
    pub r: f64,
    pub sigma: f64,
    pub lambda: Option<f64>,
    pub alpha: Option<f64>,
    /// Client index, or `all` for the all-client mean.
    pub client_index: String,
    pub bias: Option<f64>,
    pub variance: Option<f64>,
    pub risk: Option<f64>,
    pub theory_bias: Option<f64>,
    pub theory_variance: Option<f64>,
    pub theory_risk: Option<f64>,
    pub rel_err_risk: Option<f64>,
    pub status: String,
}

pub fn rel_err(risk: f64, theory: f64) -> f64 {
    (risk - theory).abs() / theory.max(1e-12)
}

fn rho_of(ds: &FederatedDataset, c: &ClientData) -> f64 {
    (c.spec.r * c.spec.r + ds.theta0_star.squared_norm_l2()).sqrt()
}

/// The estimator run for `alg` at client `c`, resolving `λ*` when requested.
fn estimator_for(alg: Algorithm, hypers: &Hypers, ds: &FederatedDataset, c: &ClientData) -> Result<Estimator> {
    let lambda = if hypers.lambda_optimal && alg.uses_lambda() {
        let gamma = c.spec.gamma(ds.d());
        let radius = if alg == Algorithm::NaiveRidge {
            rho_of(ds, c)
        } else {
            c.spec.r
        };
        let (l, _) = theory::rtfa_optimal(radius, c.spec.sigma, gamma)?;
        if !(l > 0.0) {
            return Err(Error::DomainError(
                "optimal lambda is zero for noiseless clients".into(),
            ));
        }
        l
    } else {
        hypers.lambda
    };
    Ok(Estimator::new(alg, lambda, hypers.alpha))
}

/// Theory prediction matched to client `i` of `ds`.
pub fn theory_for(est: Estimator, ds: &FederatedDataset, i: usize) -> Result<TheoryLimit> {
    let c = ds.client(i)?;
    let gamma = c.spec.gamma(ds.d());
    let (r, sigma) = (c.spec.r, c.spec.sigma);
    let alg = est.algorithm();
    let lambda = est.hyper().filter(|_| alg.uses_lambda());
    let rho = rho_of(ds, c);
    if c.sigma.is_identity() {
        return theory::predict(alg, gamma, r, sigma, lambda, Some(rho));
    }
    let h = esd(&c.sigma);
    let delta = &c.theta_star - &ds.theta0_star;
    let g_delta = if r > 0.0 {
        wesd(&c.sigma, delta.as_ref())?
    } else {
        h.clone()
    };
    let lam = || lambda.ok_or_else(|| Error::DomainError(format!("{alg} needs lambda")));
    let relabel = |mut l: TheoryLimit| {
        l.algorithm = alg;
        l
    };
    Ok(match alg {
        Algorithm::Fedavg => theory::fedavg_limit_general(&g_delta, r)?,
        Algorithm::Ftfa | Algorithm::Maml => relabel(theory::ridgeless_limits_general(&h, &g_delta, r, sigma, gamma)?),
        Algorithm::Rtfa | Algorithm::Pfedme => {
            relabel(theory::ridge_limits_general(&h, &g_delta, r, sigma, gamma, lam()?)?)
        }
        Algorithm::Naive | Algorithm::NaiveRidge => {
            let g_theta = wesd(&c.sigma, c.theta_star.as_ref())?;
            let lim = if alg == Algorithm::Naive {
                theory::ridgeless_limits_general(&h, &g_theta, rho, sigma, gamma)?
            } else {
                theory::ridge_limits_general(&h, &g_theta, rho, sigma, gamma, lam()?)?
            };
            relabel(lim)
        }
    })
}

struct RowContext<'a> {
    trial: usize,
    seed: u64,
    cell: usize,
    hash: &'a str,
    pop: &'a PopulationSpec,
}

impl RowContext<'_> {
    fn blank(&self, alg: Algorithm, hypers: &Hypers, client: usize) -> ResultRow {
        let spec = self.pop.client_specs().ok().and_then(|v| v.get(client).cloned());
        let (n, r, sigma) = spec.map(|s| (s.n, s.r, s.sigma)).unwrap_or((0, f64::NAN, f64::NAN));
        ResultRow {
            trial: self.trial,
            seed: self.seed,
            cell: self.cell,
            config_hash: self.hash.to_string(),
            algorithm: alg,
            m: self.pop.m,
            d: self.pop.d,
            n,
            gamma: if n > 0 { self.pop.d as f64 / n as f64 } else { f64::NAN },
            r,
            sigma,
            lambda: alg.uses_lambda().then_some(hypers.lambda),
            alpha: alg.uses_alpha().then_some(hypers.alpha),
            client_index: client.to_string(),
            bias: None,
            variance: None,
            risk: None,
            theory_bias: None,
            theory_variance: None,
            theory_risk: None,
            rel_err_risk: None,
            status: "ok".into(),
        }
    }
}

fn fill(row: &mut ResultRow, rep: &RiskReport, lim: Option<&TheoryLimit>) {
    row.bias = Some(rep.bias);
    row.variance = Some(rep.variance);
    row.risk = Some(rep.risk);
    if let Some(l) = lim {
        row.theory_bias = Some(l.bias);
        row.theory_variance = Some(l.variance);
        row.theory_risk = Some(l.risk);
        row.rel_err_risk = Some(rel_err(rep.risk, l.risk));
    }
}

/// One dataset draw, then exact risk and theory for every algorithm at the
/// evaluation client (and the all-client mean when requested). Failures
/// become rows with the error tag in `status`.
#[allow(clippy::too_many_arguments)]
pub fn run_trial(
    population: &PopulationSpec,
    algorithms: &[Algorithm],
    hypers: &Hypers,
    stream: &RngStream,
    trial: usize,
    cell: usize,
    hash: &str,
    seed: u64,
) -> Vec<ResultRow> {
    let ctx = RowContext {
        trial,
        seed,
        cell,
        hash,
        pop: population,
    };
    let i = hypers.eval_client;
    let ds = match generate_population(population, stream) {
        Ok(ds) if i < ds.m() => ds,
        Ok(_) => return failure_rows(&ctx, algorithms, hypers, &Error::ClientIndex(i)),
        Err(e) => return failure_rows(&ctx, algorithms, hypers, &e),
    };
    let mut rows = Vec::new();
    for &alg in algorithms {
        let mut row = ctx.blank(alg, hypers, i);
        let outcome = (|| -> Result<Vec<ResultRow>> {
            let est = estimator_for(alg, hypers, &ds, &ds.clients[i])?;
            row.lambda = est.hyper().filter(|_| alg.uses_lambda());
            let clients: Vec<usize> = if hypers.aggregate {
                (0..ds.m()).collect()
            } else {
                vec![i]
            };
            let reps = exact_risks(&ds, est, &clients)?;
            let lims: Vec<Option<TheoryLimit>> = clients.iter().map(|&j| theory_for(est, &ds, j).ok()).collect();
            let pos = clients.iter().position(|&j| j == i).unwrap();
            let mut out = Vec::new();
            let mut main = row.clone();
            fill(&mut main, &reps[pos], lims[pos].as_ref());
            if lims[pos].is_none() {
                main.status = "NoTheory".into();
            }
            out.push(main);
            if hypers.aggregate {
                let k = reps.len() as f64;
                let mean = |f: &dyn Fn(&RiskReport) -> f64| reps.iter().map(f).sum::<f64>() / k;
                let agg_rep = RiskReport {
                    client_index: i,
                    algorithm: alg,
                    bias: mean(&|r| r.bias),
                    variance: mean(&|r| r.variance),
                    risk: mean(&|r| r.risk),
                    variance_terms: None,
                    mc: None,
                };
                let agg_lim = if lims.iter().all(Option::is_some) {
                    let ls: Vec<&TheoryLimit> = lims.iter().flatten().collect();
                    let meanl = |f: &dyn Fn(&TheoryLimit) -> f64| ls.iter().map(|l| f(l)).sum::<f64>() / k;
                    let mut l = ls[0].clone();
                    l.bias = meanl(&|l| l.bias);
                    l.variance = meanl(&|l| l.variance);
                    l.risk = l.bias + l.variance;
                    Some(l)
                } else {
                    None
                };
                let mut agg = row.clone();
                agg.client_index = "all".into();
                fill(&mut agg, &agg_rep, agg_lim.as_ref());
                if agg_lim.is_none() {
                    agg.status = "NoTheory".into();
                }
                out.push(agg);
            }
            Ok(out)
        })();
        match outcome {
            Ok(out) => rows.extend(out),
            Err(e) => {
                row.status = e.tag().into();
                log::warn!("cell {cell} trial {trial} {alg}: {e}");
                rows.push(row);
            }
        }
    }
    rows
}

fn failure_rows(ctx: &RowContext<'_>, algorithms: &[Algorithm], hypers: &Hypers, e: &Error) -> Vec<ResultRow> {
    log::warn!("cell {} trial {}: {e}", ctx.cell, ctx.trial);
    algorithms
        .iter()
        .map(|&alg| {
            let mut row = ctx.blank(alg, hypers, hypers.eval_client);
            row.status = e.tag().into();
            row
        })
        .collect()
}

/// Runs every (cell, trial) pair, trial `t` of cell `c` on
/// `substream(master_seed, c·trials + t)`, returning rows in (cell, trial)
/// order.
pub fn run_sweep(cfg: &SweepConfig, jobs: Option<usize>) -> Result<Vec<ResultRow>> {
    cfg.validate()?;
    let cells = cfg.cells()?;
    let hash = cfg.hash();
    let tasks: Vec<(usize, usize)> = (0..cells.len())
        .flat_map(|c| (0..cfg.trials).map(move |t| (c, t)))
        .collect();
    let run = |&(c, t): &(usize, usize)| {
        let cell = &cells[c];
        let stream = substream(cfg.master_seed, (c * cfg.trials + t) as u64);
        run_trial(
            &cell.population,
            &cfg.algorithms,
            &cell.hypers,
            &stream,
            t,
            c,
            &hash,
            cfg.master_seed,
        )
    };
    let nested = execute(&tasks, jobs, run)?;
    Ok(nested.into_iter().flatten().collect())
}

#[cfg(feature = "parallel")]
fn execute<T: Sync, R: Send>(items: &[T], jobs: Option<usize>, f: impl Fn(&T) -> R + Sync + Send) -> Result<Vec<R>> {
    use rayon::prelude::*;
    match jobs {
        Some(j) => {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(j.max(1))
                .build()
                .map_err(|e| Error::InvalidConfig(format!("thread pool: {e}")))?;
            Ok(pool.install(|| items.par_iter().map(f).collect()))
        }
        None => Ok(items.par_iter().map(f).collect()),
    }
}

#[cfg(not(feature = "parallel"))]
fn execute<T, R>(items: &[T], _jobs: Option<usize>, f: impl Fn(&T) -> R) -> Result<Vec<R>> {
    Ok(items.iter().map(f).collect())
}

/// Single-cell run: the base configuration (axes ignored) for `trials`
/// trials with master seed `seed`.
pub fn run_simulate(cfg: &SweepConfig, seed: u64) -> Result<Vec<ResultRow>> {
    let single = SweepConfig {
        sweep_axes: SweepAxes::default(),
        master_seed: seed,
        ..cfg.clone()
    };
    run_sweep(&single, None)
}

pub fn write_rows<W: Write>(rows: &[ResultRow], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    if rows.is_empty() {
        w.write_record(RESULT_HEADER)?;
    }
    for row in rows {
        w.serialize(row)?;
    }
    w.flush()?;
    Ok(())
}

pub const RESULT_HEADER: [&str; 22] = [
    "trial",
    "seed",
    "cell",
    "config_hash",
    "algorithm",
    "m",
    "d",
    "n",
    "gamma",
    "r",
    "sigma",
    "lambda",
    "alpha",
    "client_index",
    "bias",
    "variance",
    "risk",
    "theory_bias",
    "theory_variance",
    "theory_risk",
    "rel_err_risk",
    "status",
];

pub fn read_rows<R: Read>(input: R) -> Result<Vec<ResultRow>> {
    let mut rdr = csv::Reader::from_reader(input);
    let headers = rdr.headers().map_err(|e| Error::Parse(e.to_string()))?.clone();
    if headers.iter().ne(RESULT_HEADER.iter().copied()) {
        return Err(Error::Parse("unexpected result header".into()));
    }
    let rows: Vec<ResultRow> = rdr
        .deserialize()
        .collect::<std::result::Result<_, _>>()
        .map_err(|e| Error::Parse(e.to_string()))?;
    if rows.is_empty() {
        return Err(Error::Parse("no result rows".into()));
    }
    Ok(rows)
}

/// Linear-interpolation quantile of sorted data.
pub fn quantile(sorted: &[f64], q: f64) -> f64 {
    let h = (sorted.len() - 1) as f64 * q;
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

/// Tolerance on the median relative error at dimension `d`.
pub fn tolerance(d: usize) -> f64 {
    if d <= 200 {
        0.15
    } else if d <= 400 {
        0.10
    } else {
        0.07
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CellSummary {
    pub cell: usize,
    pub algorithm: Algorithm,
    pub client_index: String,
    pub d: usize,
    pub gamma: f64,
    pub r: f64,
    pub sigma: f64,
    pub lambda: Option<f64>,
    pub alpha: Option<f64>,
    pub rows: usize,
    pub failures: usize,
    pub median_risk: Option<f64>,
    pub theory_risk: Option<f64>,
    pub rel_err_min: Option<f64>,
    pub rel_err_q25: Option<f64>,
    pub rel_err_median: Option<f64>,
    pub rel_err_q75: Option<f64>,
    pub rel_err_max: Option<f64>,
    pub tolerance: f64,
    pub pass: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub schema_version: u32,
    pub config_hash: String,
    pub cells: Vec<CellSummary>,
    pub all_pass: bool,
}

pub fn compare(rows: &[ResultRow]) -> Result<Summary> {
    if rows.is_empty() {
        return Err(Error::Parse("no result rows".into()));
    }
    let mut groups: BTreeMap<(usize, Algorithm, String), Vec<&ResultRow>> = BTreeMap::new();
    for r in rows {
        groups
            .entry((r.cell, r.algorithm, r.client_index.clone()))
            .or_default()
            .push(r);
    }
    let cells = groups
        .into_iter()
        .map(|((cell, algorithm, client_index), rs)| {
            let first = rs[0];
            let mut errs: Vec<f64> = rs.iter().filter_map(|r| r.rel_err_risk).collect();
            errs.sort_by(f64::total_cmp);
            let mut risks: Vec<f64> = rs.iter().filter_map(|r| r.risk).collect();
            risks.sort_by(f64::total_cmp);
            let mut theo: Vec<f64> = rs.iter().filter_map(|r| r.theory_risk).collect();
            theo.sort_by(f64::total_cmp);
            let q = |v: &[f64], p: f64| (!v.is_empty()).then(|| quantile(v, p));
            let tol = tolerance(first.d);
            let median = q(&errs, 0.5);
            CellSummary {
                cell,
                algorithm,
                client_index,
                d: first.d,
                gamma: first.gamma,
                r: first.r,
                sigma: first.sigma,
                lambda: first.lambda,
                alpha: first.alpha,
                rows: rs.len(),
                failures: rs.iter().filter(|r| r.status != "ok").count(),
                median_risk: q(&risks, 0.5),
                theory_risk: q(&theo, 0.5),
                rel_err_min: q(&errs, 0.0),
                rel_err_q25: q(&errs, 0.25),
                rel_err_median: median,
                rel_err_q75: q(&errs, 0.75),
                rel_err_max: q(&errs, 1.0),
                tolerance: tol,
                pass: median.is_some_and(|m| m <= tol),
            }
        })
        .collect::<Vec<_>>();
    Ok(Summary {
        schema_version: SCHEMA_VERSION,
        config_hash: rows[0].config_hash.clone(),
        all_pass: cells.iter().all(|c| c.pass),
        cells,
    })
}

pub fn format_summary(s: &Summary) -> String {
    let mut out = format!(
        "{:>4}  {:<12} {:>6} {:>5} {:>6} {:>10} {:>10} {:>9} {:>6}  {}\n",
        "cell", "algorithm", "client", "d", "gamma", "risk", "theory", "rel_err", "tol", "pass"
    );
    let f = |x: Option<f64>| x.map_or("-".to_string(), |v| format!("{v:.5}"));
    for c in &s.cells {
        out.push_str(&format!(
            "{:>4}  {:<12} {:>6} {:>5} {:>6.3} {:>10} {:>10} {:>9} {:>6.2}  {}\n",
            c.cell,
            c.algorithm.as_str(),
            c.client_index,
            c.d,
            c.gamma,
            f(c.median_risk),
            f(c.theory_risk),
            f(c.rel_err_median),
            c.tolerance,
            if c.pass { "yes" } else { "no" }
        ));
    }
    out
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TrainAlgo {
    Fedavg,
    Ftfa,
    Rtfa,
    MamlFo,
    MamlHf,
    Pfedme,
    Local,
}

impl FromStr for TrainAlgo {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "fedavg" => TrainAlgo::Fedavg,
            "ftfa" => TrainAlgo::Ftfa,
            "rtfa" => TrainAlgo::Rtfa,
            "maml-fo" => TrainAlgo::MamlFo,
            "maml-hf" => TrainAlgo::MamlHf,
            "pfedme" => TrainAlgo::Pfedme,
            "local" => TrainAlgo::Local,
            other => return Err(Error::Parse(format!("unknown training algorithm `{other}`"))),
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrajRow {
    pub phase: String,
    pub step: usize,
    pub risk: f64,
    pub distance_to_closed_form: f64,
}

fn rel_dist(a: &Vector, b: &Vector) -> f64 {
    (a - b).norm_l2() / b.norm_l2().max(1e-300)
}

fn client_risk(c: &ClientData, theta: &Vector) -> f64 {
    c.sigma.quad_form((theta - &c.theta_star).as_ref())
}

/// Runs one training algorithm on a dataset drawn from `substream(seed, 0)`
/// and reports each iterate's risk and distance to its closed form. Global
/// rows use the all-client mean risk; personal rows use the evaluation
/// client.
pub fn run_train(cfg: &SweepConfig, algo: TrainAlgo, seed: u64) -> Result<Vec<TrajRow>> {
    let ds = generate_population(&cfg.population, &substream(seed, 0))?;
    let tc = &cfg.hypers.train;
    let stream = substream(seed, 1);
    let i = cfg.hypers.eval_client;
    let client = ds.client(i)?;
    let mut rows = Vec::new();
    let global_rows = |rows: &mut Vec<TrajRow>, iterates: &[Vector], risks: &[f64], target: &Vector| {
        for (k, (t, r)) in iterates.iter().zip(risks).enumerate() {
            rows.push(TrajRow {
                phase: "global".into(),
                step: k,
                risk: *r,
                distance_to_closed_form: rel_dist(t, target),
            });
        }
    };
    let personal_rows = |rows: &mut Vec<TrajRow>, path: &[Vector], target: &Vector, offset: usize| {
        for (k, t) in path.iter().enumerate() {
            rows.push(TrajRow {
                phase: "personal".into(),
                step: k + offset,
                risk: client_risk(client, t),
                distance_to_closed_form: rel_dist(t, target),
            });
        }
    };
    match algo {
        TrainAlgo::Fedavg | TrainAlgo::Ftfa | TrainAlgo::Rtfa => {
            let traj = fedavg_train(&ds, tc, &stream)?;
            let cf = fedavg_global(&ds)?;
            global_rows(&mut rows, &traj.iterates, &traj.mean_risk, &cf.theta);
            let pstream = stream.derive(&[2, i as u64]);
            if algo == TrainAlgo::Ftfa {
                let path = ftfa_train_path(&traj.global, client, tc, &pstream)?;
                personal_rows(&mut rows, &path, &ftfa_personalize(&ds, i, &cf)?.theta, 0);
            } else if algo == TrainAlgo::Rtfa {
                let path = rtfa_train_path(&traj.global, client, tc, &pstream)?;
                personal_rows(&mut rows, &path, &rtfa_personalize(&ds, i, &cf, tc.lambda)?.theta, 0);
            }
        }
        TrainAlgo::MamlFo | TrainAlgo::MamlHf => {
            let variant = if algo == TrainAlgo::MamlFo {
                MamlVariant::FirstOrder
            } else {
                MamlVariant::HessianFree
            };
            let traj = maml_train(&ds, tc, &stream, variant)?;
            let cf = maml_global(&ds, tc.personal_stepsize)?;
            global_rows(&mut rows, &traj.iterates, &traj.mean_risk, &cf.theta);
            if let Some(p) = traj.personals.get(i) {
                let target = crate::estimators::maml_personalize(&ds, i, &cf)?.theta;
                personal_rows(&mut rows, std::slice::from_ref(p), &target, tc.personalization_steps);
            }
        }
        TrainAlgo::Pfedme => {
            let traj = pfedme_train(&ds, tc, &stream)?;
            let (g, ps) = pfedme_solve(&ds, tc.lambda)?;
            global_rows(&mut rows, &traj.iterates, &traj.mean_risk, &g.theta);
            personal_rows(
                &mut rows,
                std::slice::from_ref(&traj.personals[i]),
                &ps[i].theta,
                tc.rounds,
            );
        }
        TrainAlgo::Local => {
            let theta = local_train(client, tc, &stream)?;
            let cf = naive_minnorm(client, i)?.theta;
            rows.push(TrajRow {
                phase: "local".into(),
                step: tc.local_steps,
                risk: client_risk(client, &theta),
                distance_to_closed_form: rel_dist(&theta, &cf),
            });
        }
    }
    Ok(rows)
}

pub fn write_traj<W: Write>(rows: &[TrajRow], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for row in rows {
        w.serialize(row)?;
    }
    w.flush()?;
    Ok(())
}

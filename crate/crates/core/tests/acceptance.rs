//! End-to-end acceptance checks. Runs with its own harness so each criterion
//! prints one PASS/FAIL line; the process exits nonzero if any fails.
//!
//! `ACCEPTANCE_ONLY=1,6` restricts the run to the listed criteria.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::Instant;

use faer::{Mat, Side};
use pflsim::estimators::{fedavg_global, ftfa_personalize, naive_minnorm, pfedme_solve, rtfa_personalize, Estimator};
use pflsim::fedtrain::{
    fedavg_train, ftfa_train, local_train, maml_train, pfedme_train, rtfa_train, MamlVariant, TrainConfig,
};
use pflsim::model::{
    esd, generate_population, wesd, FederatedDataset, PopulationSpec, SpectralDistribution, SpectrumSpec,
};
use pflsim::numerics::{substream, Vector};
use pflsim::risk::{exact_maml_risk, exact_naive_risks, exact_pfedme_risk, mc_risk, FedavgRiskContext};
use pflsim::theory;

const SEEDS: u64 = 11;
const MASTER: u64 = 20_240_601;

struct Outcome {
    pass: bool,
    detail: String,
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let k = v.len();
    if k % 2 == 1 {
        v[k / 2]
    } else {
        0.5 * (v[k / 2 - 1] + v[k / 2])
    }
}

fn within(x: f64, target: f64, tol: f64) -> bool {
    (x - target).abs() <= tol * target.abs()
}

fn rel(a: &Vector, b: &Vector) -> f64 {
    (a - b).norm_l2() / b.norm_l2()
}

fn population(d: usize, sigma: f64, seed: u64) -> FederatedDataset {
    let spec = PopulationSpec::identity(200, d, d / 2, 1.0, sigma);
    generate_population(&spec, &substream(MASTER + d as u64, seed)).expect("population")
}

/// Grid used to locate the empirical optimum of the ridge parameter.
const LAMBDA_GRID: [f64; 13] = [0.5, 0.75, 1.0, 1.25, 1.5, 1.75, 2.0, 2.25, 2.5, 3.0, 3.5, 4.0, 5.0];

/// Everything criteria 1 to 5 need from one identity-covariance draw, always
/// evaluated at client 0.
struct SeedRisks {
    ftfa: f64,
    rtfa_grid: Vec<f64>,
    maml: f64,
    pfedme: f64,
    fedavg: f64,
    naive: f64,
    rho2: f64,
    seconds_ftfa: f64,
}

fn seed_risks(d: usize, seed: u64, full: bool) -> SeedRisks {
    let t0 = Instant::now();
    let ds = population(d, 1.0, seed);
    let ctx = FedavgRiskContext::new(&ds).unwrap();
    let ftfa = ctx.ftfa(0).unwrap().risk;
    let seconds_ftfa = t0.elapsed().as_secs_f64();
    let grid: &[f64] = if full { &LAMBDA_GRID } else { &[1.0] };
    let rtfa_grid = grid.iter().map(|&l| ctx.rtfa(0, l).unwrap().risk).collect();
    let pfedme = exact_pfedme_risk(&ds, 0, 1.0).unwrap().risk;
    let (maml, fedavg, naive) = if full {
        (
            exact_maml_risk(&ds, 0, 0.1).unwrap().risk,
            ctx.fedavg(0).unwrap().risk,
            exact_naive_risks(&ds.clients[0], 0, None).unwrap().risk,
        )
    } else {
        (f64::NAN, f64::NAN, f64::NAN)
    };
    let rho2 = ds.clients[0].theta_star.squared_norm_l2();
    SeedRisks {
        ftfa,
        rtfa_grid,
        maml,
        pfedme,
        fedavg,
        naive,
        rho2,
        seconds_ftfa,
    }
}

struct Fixture {
    d400: Vec<SeedRisks>,
    d800: Option<Vec<SeedRisks>>,
}

impl Fixture {
    fn d400(&mut self) -> &[SeedRisks] {
        if self.d400.is_empty() {
            self.d400 = (0..SEEDS).map(|s| seed_risks(400, s, true)).collect();
        }
        &self.d400
    }

    fn d800(&mut self) -> &[SeedRisks] {
        self.d800
            .get_or_insert_with(|| (0..SEEDS).map(|s| seed_risks(800, s, false)).collect())
    }
}

fn criterion_1(fx: &mut Fixture) -> Outcome {
    let rows = fx.d400();
    let med = median(rows.iter().map(|r| r.ftfa).collect());
    let slowest = rows.iter().map(|r| r.seconds_ftfa).fold(0.0, f64::max);
    Outcome {
        pass: within(med, 1.5, 0.10) && slowest < 120.0,
        detail: format!("median ftfa risk {med:.4} vs 1.5, slowest seed {slowest:.1}s"),
    }
}

fn criterion_2(fx: &mut Fixture) -> Outcome {
    let rows = fx.d400();
    let col = |k: usize| median(rows.iter().map(|r| r.rtfa_grid[k]).collect());
    let medians: Vec<f64> = (0..LAMBDA_GRID.len()).map(col).collect();
    let at = |l: f64| medians[LAMBDA_GRID.iter().position(|&g| g == l).unwrap()];
    let (r1, r2) = (at(1.0), at(2.0));
    let k = (0..medians.len())
        .min_by(|&a, &b| medians[a].total_cmp(&medians[b]))
        .unwrap();
    let best = LAMBDA_GRID[k];
    Outcome {
        pass: within(r1, 0.810660, 0.10) && within(r2, 0.780776, 0.10) && within(best, 2.0, 0.25),
        detail: format!("lambda=1 {r1:.4} vs 0.810660, lambda=2 {r2:.4} vs 0.780776, grid argmin {best}"),
    }
}

fn criterion_3(fx: &mut Fixture) -> Outcome {
    let rows = fx.d400();
    let med = median(rows.iter().map(|r| r.maml).collect());
    let gap = median(rows.iter().map(|r| (r.maml - r.ftfa).abs() / r.ftfa).collect());
    let worst = rows
        .iter()
        .map(|r| (r.maml - r.ftfa).abs() / r.ftfa)
        .fold(0.0, f64::max);
    Outcome {
        pass: within(med, 1.5, 0.10) && worst <= 0.05,
        detail: format!("median maml risk {med:.4} vs 1.5, same-seed gap to ftfa median {gap:.4} max {worst:.4}"),
    }
}

fn criterion_4(fx: &mut Fixture) -> Outcome {
    let med = median(fx.d400().iter().map(|r| r.pfedme).collect());
    let gap400 = median(fx.d400().iter().map(|r| (r.pfedme - r.rtfa_grid[2]).abs()).collect());
    let gap800 = median(fx.d800().iter().map(|r| (r.pfedme - r.rtfa_grid[0]).abs()).collect());
    Outcome {
        pass: within(med, 0.810660, 0.10) && gap800 < gap400,
        detail: format!(
            "median pfedme risk {med:.4} vs 0.810660, |pfedme - rtfa| {gap400:.5} at d=400, {gap800:.5} at d=800"
        ),
    }
}

fn criterion_5(fx: &mut Fixture) -> Outcome {
    let rows = fx.d400();
    let fedavg = median(rows.iter().map(|r| r.fedavg).collect());
    let naive = median(rows.iter().map(|r| r.naive).collect());
    // ρ² = r² + ‖θ₀*‖² = 2 here; the realized ‖θ_i*‖² concentrates on it.
    let rho2 = median(rows.iter().map(|r| r.rho2).collect());
    let gamma = 2.0;
    let naive_target = 2.0 * (1.0 - 1.0 / gamma) + 1.0 / (gamma - 1.0);
    let mut ordering = Vec::new();
    for sigma in [0.1, 1.0] {
        let mut ftfa = Vec::new();
        let mut fa = Vec::new();
        for s in 0..SEEDS {
            let ds = population(400, sigma, s);
            let ctx = FedavgRiskContext::new(&ds).unwrap();
            ftfa.push(ctx.ftfa(0).unwrap().risk);
            fa.push(ctx.fedavg(0).unwrap().risk);
        }
        let empirical = median(ftfa) < median(fa);
        ordering.push((sigma, theory::ftfa_beats_fedavg(1.0, sigma, gamma), empirical));
    }
    Outcome {
        pass: within(fedavg, 1.0, 0.10)
            && within(naive, naive_target, 0.10)
            && ordering.iter().all(|&(_, t, e)| t == e),
        detail: format!(
            "fedavg {fedavg:.4} vs 1, naive {naive:.4} vs {naive_target} (realized rho^2 {rho2:.3}), \
             ftfa<fedavg predicted/observed {:?}",
            ordering
        ),
    }
}

/// Larger root of `γλm² + (1 − γ + λ)m − 1 = 0`, written without reuse of
/// the library's branch logic.
fn stieltjes_quadratic(lambda: f64, gamma: f64) -> f64 {
    let (a, b, c) = (gamma * lambda, 1.0 - gamma + lambda, -1.0);
    (-b + (b * b - 4.0 * a * c).sqrt()) / (2.0 * a)
}

#[allow(clippy::approx_constant)]
fn criterion_6(_: &mut Fixture) -> Outcome {
    let mut ok = true;
    let mut notes = Vec::new();
    for (lambda, expect) in [(1.0, 0.707107), (2.0, 0.390388)] {
        let m = theory::mp_stieltjes(lambda, 2.0).unwrap();
        let q = stieltjes_quadratic(lambda, 2.0);
        ok &= (m - q).abs() < 1e-6 && (m - expect).abs() < 1e-6;
        notes.push(format!("m({lambda})={m:.7}"));
    }

    // Resolvent trace of XᵀX/n at d = 4000, n = 2000 through the n×n kernel:
    // tr((XᵀX/n + λ)⁻¹) = Σ 1/(μ_k + λ) + (d − n)/λ.
    let (d, n) = (4000usize, 2000usize);
    let mut s = substream(MASTER, 6);
    let x = Mat::from_fn(n, d, |_, _| s.gaussian());
    let k = (&x * x.transpose()) * faer::Scale(1.0 / n as f64);
    let mu = k.self_adjoint_eigenvalues(Side::Lower).unwrap();
    for lambda in [1.0, 2.0] {
        let trace = mu.iter().map(|&u| 1.0 / (u + lambda)).sum::<f64>() + (d - n) as f64 / lambda;
        let mc = trace / d as f64;
        let m = theory::mp_stieltjes(lambda, 2.0).unwrap();
        ok &= (m - mc).abs() < 1e-2;
        notes.push(format!("resolvent({lambda})={mc:.5}"));
    }

    let mut worst: f64 = 0.0;
    for lambda in [0.1, 0.5, 1.0, 2.0, 5.0] {
        for gamma in [1.5, 2.0, 3.0, 5.0, 10.0] {
            let h = 1e-4 * lambda;
            let fd = -(theory::mp_stieltjes(lambda + h, gamma).unwrap()
                - theory::mp_stieltjes(lambda - h, gamma).unwrap())
                / (2.0 * h);
            let dm = theory::mp_stieltjes_deriv(lambda, gamma).unwrap();
            worst = worst.max((fd - dm).abs() / dm.abs());
        }
    }
    ok &= worst < 1e-6;
    notes.push(format!("worst derivative rel err {worst:.2e}"));
    Outcome {
        pass: ok,
        detail: notes.join(", "),
    }
}

fn criterion_7(_: &mut Fixture) -> Outcome {
    let delta = SpectralDistribution::delta(1.0);
    let mut worst: f64 = 0.0;
    for &(r, sigma, gamma) in &[(1.0, 1.0, 2.0), (0.5, 2.0, 1.5), (2.0, 0.3, 5.0), (1.0, 0.0, 3.0)] {
        let a = theory::ridgeless_limits_general(&delta, &delta, r, sigma, gamma).unwrap();
        let b = theory::ftfa_limit(r, sigma, gamma).unwrap();
        worst = worst.max((a.risk - b.risk).abs() / b.risk.max(1e-300));
        for lambda in [0.1, 1.0, 4.0] {
            let a = theory::ridge_limits_general(&delta, &delta, r, sigma, gamma, lambda).unwrap();
            let b = theory::rtfa_limit(r, sigma, gamma, lambda).unwrap();
            worst = worst.max((a.risk - b.risk).abs() / b.risk.max(1e-300));
        }
    }
    assert!(worst < 1e-8, "point-mass reduction off by {worst:e}");

    let mut spec = PopulationSpec::identity(100, 2000, 1000, 1.0, 1.0);
    spec.client.as_mut().unwrap().spectrum = SpectrumSpec::Atoms {
        atoms: vec![(2.0, 0.5), (1.0, 0.5)],
        random_basis: false,
    };
    let ds = generate_population(&spec, &substream(MASTER, 7)).unwrap();
    let ctx = FedavgRiskContext::new(&ds).unwrap();
    let h = esd(&ds.clients[0].sigma);
    let clients = 0..3;
    let (mut sim_f, mut th_f, mut sim_r, mut th_r) = (0.0, 0.0, 0.0, 0.0);
    for i in clients.clone() {
        let c = &ds.clients[i];
        let g = wesd(&c.sigma, (&c.theta_star - &ds.theta0_star).as_ref()).unwrap();
        sim_f += ctx.ftfa(i).unwrap().risk;
        sim_r += ctx.rtfa(i, 1.0).unwrap().risk;
        th_f += theory::ridgeless_limits_general(&h, &g, 1.0, 1.0, 2.0).unwrap().risk;
        th_r += theory::ridge_limits_general(&h, &g, 1.0, 1.0, 2.0, 1.0).unwrap().risk;
    }
    Outcome {
        pass: within(sim_f, th_f, 0.10) && within(sim_r, th_r, 0.10),
        detail: format!(
            "reduction err {worst:.1e}; d=2000 ftfa {:.4} vs {:.4}, rtfa {:.4} vs {:.4}",
            sim_f / 3.0,
            th_f / 3.0,
            sim_r / 3.0,
            th_r / 3.0
        ),
    }
}

fn criterion_8(_: &mut Fixture) -> Outcome {
    let ds = |seed: u64, m: usize| {
        generate_population(
            &PopulationSpec::identity(m, 20, 10, 1.0, 0.5),
            &substream(MASTER, 80 + seed),
        )
        .unwrap()
    };
    let data = ds(0, 10);
    let g = fedavg_global(&data).unwrap();

    let cfg = TrainConfig {
        rounds: 3000,
        global_stepsize: 0.3,
        local_steps: 1,
        ..TrainConfig::default()
    };
    let fa = rel(
        &fedavg_train(&data, &cfg, &substream(MASTER, 81)).unwrap().global,
        &g.theta,
    );

    let tune = TrainConfig {
        personalization_steps: 20000,
        personal_stepsize: 0.2,
        lambda: 0.7,
        ..TrainConfig::default()
    };
    let s = substream(MASTER, 82);
    let ft = rel(
        &ftfa_train(&g.theta, &data.clients[0], &tune, &s).unwrap(),
        &ftfa_personalize(&data, 0, &g).unwrap().theta,
    );
    let rt = rel(
        &rtfa_train(&g.theta, &data.clients[0], &tune, &s).unwrap(),
        &rtfa_personalize(&data, 0, &g, 0.7).unwrap().theta,
    );

    let pcfg = TrainConfig {
        rounds: 4000,
        global_stepsize: 0.5,
        lambda: 1.0,
        ..TrainConfig::default()
    };
    let pt = pfedme_train(&data, &pcfg, &substream(MASTER, 83)).unwrap();
    let (pg, pp) = pfedme_solve(&data, 1.0).unwrap();
    let pf = rel(&pt.global, &pg.theta).max(rel(&pt.personals[0], &pp[0].theta));

    let lcfg = TrainConfig {
        local_steps: 20000,
        global_stepsize: 0.2,
        ..TrainConfig::default()
    };
    let c = &data.clients[0];
    let lo = rel(
        &local_train(c, &lcfg, &substream(MASTER, 84)).unwrap(),
        &naive_minnorm(c, 0).unwrap().theta,
    );

    let stoch = TrainConfig {
        rounds: 30,
        sampled_users: Some(3),
        local_steps: 4,
        batch_size: Some(3),
        global_stepsize: 0.05,
        personal_stepsize: 0.0,
        ..TrainConfig::default()
    };
    let s = substream(MASTER, 85);
    let reference = fedavg_train(&data, &stoch, &s).unwrap();
    let bitwise = [MamlVariant::FirstOrder, MamlVariant::HessianFree]
        .iter()
        .all(|&v| maml_train(&data, &stoch, &s, v).unwrap().iterates == reference.iterates);

    Outcome {
        pass: fa < 1e-5 && ft < 1e-6 && rt < 1e-6 && pf < 1e-3 && lo < 1e-5 && bitwise,
        detail: format!(
            "fedavg {fa:.1e}, ftfa {ft:.1e}, rtfa {rt:.1e}, pfedme {pf:.1e}, local {lo:.1e}, maml(alpha=0) bitwise {bitwise}"
        ),
    }
}

fn criterion_9(_: &mut Fixture) -> Outcome {
    let mut spec = PopulationSpec::identity(10, 100, 50, 1.0, 1.0);
    spec.client.as_mut().unwrap().spectrum = SpectrumSpec::Atoms {
        atoms: vec![(2.0, 0.5), (0.5, 0.5)],
        random_basis: true,
    };
    let ds = generate_population(&spec, &substream(MASTER, 9)).unwrap();
    let estimators = [
        Estimator::Fedavg,
        Estimator::Ftfa,
        Estimator::Rtfa { lambda: 1.0 },
        Estimator::Maml { alpha: 0.1 },
        Estimator::Pfedme { lambda: 1.0 },
        Estimator::Naive,
    ];
    let mut ok = true;
    let mut notes = Vec::new();
    for (k, est) in estimators.into_iter().enumerate() {
        let exact = pflsim::risk::exact_risks(&ds, est, &[0]).unwrap().remove(0).risk;
        let mc = mc_risk(est, &ds, 0, 2000, &substream(MASTER, 90 + k as u64)).unwrap();
        let se = mc.mc.unwrap().risk_se;
        let z = (mc.risk - exact) / se;
        ok &= z.abs() <= 3.0;
        notes.push(format!("{} z={z:+.2}", est.algorithm()));
    }
    Outcome {
        pass: ok,
        detail: notes.join(", "),
    }
}

fn criterion_10(_: &mut Fixture) -> Outcome {
    let mut checked = 0;
    let mut failures = Vec::new();
    for r in [0.25, 0.5, 1.0, 2.0, 4.0] {
        for sigma in [0.0, 0.1, 0.5, 1.0, 3.0] {
            for gamma in [1.25, 2.0, 4.0, 10.0] {
                checked += 1;
                let (_, opt) = theory::rtfa_optimal(r, sigma, gamma).unwrap();
                let ftfa = theory::ftfa_limit(r, sigma, gamma).unwrap().risk;
                let (r2, s2) = (r * r, sigma * sigma);
                let a = r2 * (1.0 - 1.0 / gamma);
                let square = 0.5 * (a - s2 + (a * a + s2 * s2 + 2.0 * s2 * r2 * (1.0 + 1.0 / gamma)).sqrt());
                let eps = 1e-12 * r2.max(1.0);
                if opt.risk > r2 + eps {
                    failures.push(format!("opt>r^2 at ({r},{sigma},{gamma})"));
                }
                if opt.risk > ftfa + eps {
                    failures.push(format!("opt>ftfa at ({r},{sigma},{gamma})"));
                }
                if (opt.risk - square).abs() > 1e-10 * square.max(1.0) {
                    failures.push(format!("square mismatch at ({r},{sigma},{gamma})"));
                }
                for rho in [r, (r2 + 1.0).sqrt()] {
                    let naive = theory::naive_limit(rho, sigma, gamma).unwrap().risk;
                    if ftfa > naive + eps {
                        failures.push(format!("ftfa>naive at ({r},{sigma},{gamma},rho={rho})"));
                    }
                }
            }
        }
    }
    Outcome {
        pass: failures.is_empty() && checked == 100,
        detail: if failures.is_empty() {
            format!("{checked} grid points")
        } else {
            failures.join("; ")
        },
    }
}

fn main() {
    // Respect the libtest flags cargo may pass (e.g. `--list`).
    if std::env::args().any(|a| a == "--list") {
        return;
    }
    let only: Option<Vec<usize>> = std::env::var("ACCEPTANCE_ONLY")
        .ok()
        .map(|v| v.split(',').filter_map(|s| s.trim().parse().ok()).collect());
    type Check = fn(&mut Fixture) -> Outcome;
    let checks: [(usize, &str, Check); 10] = [
        (1, "ftfa limit, identity covariance", criterion_1),
        (2, "rtfa limit and optimal ridge", criterion_2),
        (3, "maml matches ftfa", criterion_3),
        (4, "pfedme matches rtfa", criterion_4),
        (5, "zero-collaboration baselines", criterion_5),
        (6, "Stieltjes transform", criterion_6),
        (7, "general covariance predictors", criterion_7),
        (8, "iterative training reaches closed forms", criterion_8),
        (9, "exact risk vs Monte Carlo", criterion_9),
        (10, "risk inequalities", criterion_10),
    ];
    let mut fixture = Fixture {
        d400: Vec::new(),
        d800: None,
    };
    let mut failed = Vec::new();
    for (id, name, check) in checks {
        if only.as_ref().is_some_and(|o| !o.contains(&id)) {
            continue;
        }
        let start = Instant::now();
        let out = catch_unwind(AssertUnwindSafe(|| check(&mut fixture))).unwrap_or_else(|e| Outcome {
            pass: false,
            detail: format!(
                "panicked: {}",
                e.downcast_ref::<String>()
                    .cloned()
                    .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                    .unwrap_or_default()
            ),
        });
        let verdict = if out.pass { "PASS" } else { "FAIL" };
        println!(
            "criterion {id:>2} {verdict}  {name}: {} [{:.1}s]",
            out.detail,
            start.elapsed().as_secs_f64()
        );
        if !out.pass {
            failed.push(id);
        }
    }
    if !failed.is_empty() {
        println!("failed criteria: {failed:?}");
        std::process::exit(1);
    }
}

//! The statistical population: clients with related linear-regression tasks
//! `y = Xθ_i* + ξ`, where every `θ_i*` lies on a sphere of radius `r_i`
//! around a shared center `θ₀*`.

use std::sync::Arc;

use faer::{Col, ColRef, Mat};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{haar_orthogonal, sample_gaussian_rows, sample_sphere, RngStream, SpdFactor, Vector};

/// Covariance description for one client.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum SpectrumSpec {
    #[default]
    Identity,
    /// One eigenvalue per coordinate; length must equal `d`.
    Eigenvalues {
        values: Vec<f64>,
        #[serde(default)]
        random_basis: bool,
    },
    /// `(eigenvalue, mass)` pairs, expanded to `d` eigenvalues.
    Atoms {
        atoms: Vec<(f64, f64)>,
        #[serde(default)]
        random_basis: bool,
    },
}

impl SpectrumSpec {
    /// The `d` eigenvalues this spec describes, sorted descending.
    pub fn eigenvalues(&self, d: usize) -> Result<Vec<f64>> {
        let mut vals = match self {
            SpectrumSpec::Identity => vec![1.0; d],
            SpectrumSpec::Eigenvalues { values, .. } => {
                if values.len() != d {
                    return Err(Error::InvalidSpec(format!(
                        "{} eigenvalues given for dimension {d}",
                        values.len()
                    )));
                }
                values.clone()
            }
            SpectrumSpec::Atoms { atoms, .. } => {
                if atoms.is_empty() {
                    return Err(Error::InvalidSpec("no spectral atoms".into()));
                }
                let total: f64 = atoms.iter().map(|a| a.1).sum();
                if atoms.iter().any(|a| a.1 < 0.0) || (total - 1.0).abs() > 1e-9 {
                    return Err(Error::InvalidSpec(
                        "atom masses must be nonnegative and sum to 1".into(),
                    ));
                }
                let mut vals = Vec::with_capacity(d);
                let mut cumulative = 0.0;
                for &(s, mass) in atoms {
                    cumulative += mass;
                    let upto = ((cumulative * d as f64).round() as usize).min(d);
                    while vals.len() < upto {
                        vals.push(s);
                    }
                }
                let last = atoms.last().unwrap().0;
                while vals.len() < d {
                    vals.push(last);
                }
                vals
            }
        };
        vals.sort_by(|a, b| b.total_cmp(a));
        Ok(vals)
    }

    pub fn random_basis(&self) -> bool {
        match self {
            SpectrumSpec::Identity => false,
            SpectrumSpec::Eigenvalues { random_basis, .. } | SpectrumSpec::Atoms { random_basis, .. } => *random_basis,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClientSpec {
    pub n: usize,
    pub r: f64,
    pub sigma: f64,
    #[serde(default)]
    pub spectrum: SpectrumSpec,
}

impl ClientSpec {
    pub fn identity(n: usize, r: f64, sigma: f64) -> Self {
        Self {
            n,
            r,
            sigma,
            spectrum: SpectrumSpec::Identity,
        }
    }

    /// Overparameterisation ratio `d / n`.
    pub fn gamma(&self, d: usize) -> f64 {
        d as f64 / self.n as f64
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum Theta0Spec {
    Explicit(Vec<f64>),
    /// Uniformly random direction with the given norm.
    RandomNorm(f64),
}

impl Default for Theta0Spec {
    fn default() -> Self {
        Theta0Spec::RandomNorm(1.0)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum WeightScheme {
    #[default]
    Uniform,
    Proportional,
}

fn default_cov_bound() -> f64 {
    100.0
}

/// Population description. Exactly one of `client` (a template replicated
/// `m` times) or `clients` (an explicit list of length `m`) must be set.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PopulationSpec {
    pub m: usize,
    pub d: usize,
    #[serde(default)]
    pub theta0: Theta0Spec,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub client: Option<ClientSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub clients: Option<Vec<ClientSpec>>,
    #[serde(default)]
    pub weight_scheme: WeightScheme,
    /// Bound `M` with all covariance eigenvalues in `[1/M, M]`.
    #[serde(default = "default_cov_bound")]
    pub cov_bound: f64,
}

impl PopulationSpec {
    /// `m` identical identity-covariance clients.
    pub fn identity(m: usize, d: usize, n: usize, r: f64, sigma: f64) -> Self {
        Self {
            m,
            d,
            theta0: Theta0Spec::default(),
            client: Some(ClientSpec::identity(n, r, sigma)),
            clients: None,
            weight_scheme: WeightScheme::Uniform,
            cov_bound: default_cov_bound(),
        }
    }

    pub fn client_specs(&self) -> Result<Vec<ClientSpec>> {
        match (&self.client, &self.clients) {
            (Some(t), None) => Ok(vec![t.clone(); self.m]),
            (None, Some(list)) => {
                if list.len() != self.m {
                    return Err(Error::InvalidSpec(format!(
                        "{} clients listed but m = {}",
                        list.len(),
                        self.m
                    )));
                }
                Ok(list.clone())
            }
            _ => Err(Error::InvalidSpec(
                "exactly one of `client` and `clients` must be given".into(),
            )),
        }
    }

    /// Checks the spec and returns non-fatal warnings.
    pub fn validate(&self) -> Result<Vec<String>> {
        if self.m == 0 || self.d == 0 {
            return Err(Error::InvalidSpec("m and d must be positive".into()));
        }
        if !(self.cov_bound >= 1.0) {
            return Err(Error::InvalidSpec("cov_bound must be at least 1".into()));
        }
        if let Theta0Spec::Explicit(v) = &self.theta0 {
            if v.len() != self.d || v.iter().any(|x| !x.is_finite()) {
                return Err(Error::InvalidSpec("theta0 must be a finite vector of length d".into()));
            }
        }
        if let Theta0Spec::RandomNorm(rho) = self.theta0 {
            if !(rho >= 0.0) || !rho.is_finite() {
                return Err(Error::InvalidSpec("theta0 norm must be nonnegative".into()));
            }
        }
        let specs = self.client_specs()?;
        let mut warnings = Vec::new();
        for (i, c) in specs.iter().enumerate() {
            if c.n == 0 {
                return Err(Error::InvalidSpec(format!("client {i} has n = 0")));
            }
            if !(c.r >= 0.0) || !c.r.is_finite() {
                return Err(Error::InvalidSpec(format!("client {i} has invalid radius {}", c.r)));
            }
            if !(c.sigma >= 0.0) || !c.sigma.is_finite() {
                return Err(Error::InvalidSpec(format!("client {i} has invalid noise {}", c.sigma)));
            }
            let eig = c.spectrum.eigenvalues(self.d)?;
            let (lo, hi) = (1.0 / self.cov_bound, self.cov_bound);
            if eig.iter().any(|&s| !(s >= lo && s <= hi)) {
                return Err(Error::InvalidSpec(format!(
                    "client {i} covariance eigenvalues outside [{lo}, {hi}]"
                )));
            }
        }
        if let Some(i) = specs.iter().position(|c| c.gamma(self.d) <= 1.0) {
            warnings.push(format!(
                "client {i} is not overparameterized (d/n = {:.3} <= 1)",
                specs[i].gamma(self.d)
            ));
        }
        let gammas: Vec<f64> = specs.iter().map(|c| c.gamma(self.d)).collect();
        let gmax = gammas.iter().cloned().fold(f64::MIN, f64::max);
        let gmin = gammas.iter().cloned().fold(f64::MAX, f64::min);
        if gmax / gmin > 10.0 {
            warnings.push(format!("extreme spread of d/n across clients ({gmin:.3} .. {gmax:.3})"));
        }
        let mean_n = specs.iter().map(|c| c.n as f64).sum::<f64>() / specs.len() as f64;
        if (self.m as f64).powf(1.5) < mean_n {
            warnings.push(format!(
                "few clients for the sample size: m^1.5 = {:.1} < mean n = {mean_n:.1}",
                (self.m as f64).powf(1.5)
            ));
        }
        Ok(warnings)
    }
}

/// One client's data and ground truth.
#[derive(Clone, Debug)]
pub struct ClientData {
    pub x: Mat<f64>,
    pub y: Vector,
    pub theta_star: Vector,
    pub xi: Vector,
    pub spec: ClientSpec,
    pub sigma: Arc<SpdFactor>,
}

impl ClientData {
    pub fn n(&self) -> usize {
        self.x.nrows()
    }

    pub fn d(&self) -> usize {
        self.x.ncols()
    }

    /// `Xᵀ y / n`.
    pub fn moment(&self) -> Vector {
        let n = self.n() as f64;
        let mut b = self.x.transpose() * &self.y;
        for i in 0..b.nrows() {
            b[i] /= n;
        }
        b
    }

    /// Copy with responses replaced by `Xθ* + xi`.
    pub fn with_noise(&self, xi: Vector) -> ClientData {
        let mut y = &self.x * &self.theta_star;
        for k in 0..y.nrows() {
            y[k] += xi[k];
        }
        ClientData {
            x: self.x.clone(),
            y,
            theta_star: self.theta_star.clone(),
            xi,
            spec: self.spec.clone(),
            sigma: Arc::clone(&self.sigma),
        }
    }
}

#[derive(Clone, Debug)]
pub struct FederatedDataset {
    pub theta0_star: Vector,
    pub clients: Vec<ClientData>,
    pub weights: Vec<f64>,
    pub warnings: Vec<String>,
}

impl FederatedDataset {
    pub fn m(&self) -> usize {
        self.clients.len()
    }

    pub fn d(&self) -> usize {
        self.theta0_star.nrows()
    }

    pub fn client(&self, i: usize) -> Result<&ClientData> {
        self.clients.get(i).ok_or(Error::ClientIndex(i))
    }

    /// Same design matrices and parameters with every client's noise
    /// replaced by `noise[j]`.
    pub fn with_noise(&self, noise: Vec<Vector>) -> FederatedDataset {
        let clients = self.clients.iter().zip(noise).map(|(c, xi)| c.with_noise(xi)).collect();
        FederatedDataset {
            theta0_star: self.theta0_star.clone(),
            clients,
            weights: self.weights.clone(),
            warnings: self.warnings.clone(),
        }
    }

    /// Same data with the noise removed (`y = Xθ*`).
    pub fn noiseless(&self) -> FederatedDataset {
        self.with_noise(self.clients.iter().map(|c| Col::zeros(c.n())).collect())
    }
}

const STREAM_THETA0: u64 = 0;
const STREAM_BASIS: u64 = 1;
const STREAM_CLIENT: u64 = 2;

/// Draws a dataset from `spec`.
///
/// Every client uses its own derived stream, so a client's draw does not
/// depend on the sizes of the others. A shared template client gets a single
/// covariance (one basis draw) for the whole population; a listed client gets
/// its own.
pub fn generate_population(spec: &PopulationSpec, stream: &RngStream) -> Result<FederatedDataset> {
    let warnings = spec.validate()?;
    for w in &warnings {
        log::warn!("{w}");
    }
    let d = spec.d;
    let theta0_star = match &spec.theta0 {
        Theta0Spec::Explicit(v) => Col::from_fn(d, |i| v[i]),
        Theta0Spec::RandomNorm(rho) => {
            let mut s = stream.derive(&[STREAM_THETA0]);
            sample_sphere(&mut s, Col::<f64>::zeros(d).as_ref(), *rho)
        }
    };

    let specs = spec.client_specs()?;
    let make_factor = |c: &ClientSpec, key: u64| -> Result<Arc<SpdFactor>> {
        let eig = c.spectrum.eigenvalues(d)?;
        let factor = if c.spectrum.random_basis() {
            let mut s = stream.derive(&[STREAM_BASIS, key]);
            SpdFactor::new(eig, Some(haar_orthogonal(&mut s, d)))?
        } else if matches!(c.spectrum, SpectrumSpec::Identity) {
            SpdFactor::identity(d)
        } else {
            SpdFactor::diagonal(eig)?
        };
        Ok(Arc::new(factor))
    };
    let shared = match &spec.client {
        Some(t) => Some(make_factor(t, u64::MAX)?),
        None => None,
    };

    let mut clients = Vec::with_capacity(specs.len());
    for (i, c) in specs.into_iter().enumerate() {
        let sigma = match &shared {
            Some(f) => Arc::clone(f),
            None => make_factor(&c, i as u64)?,
        };
        let mut s = stream.derive(&[STREAM_CLIENT, i as u64]);
        let theta_star = sample_sphere(&mut s, theta0_star.as_ref(), c.r);
        let x = sample_gaussian_rows(&mut s, c.n, &sigma);
        let xi = Col::from_fn(c.n, |_| c.sigma * s.gaussian());
        let mut y = &x * &theta_star;
        for k in 0..c.n {
            y[k] += xi[k];
        }
        clients.push(ClientData {
            x,
            y,
            theta_star,
            xi,
            spec: c,
            sigma,
        });
    }
    let n_list: Vec<usize> = clients.iter().map(|c| c.n()).collect();
    let weights = client_weights(spec.weight_scheme, &n_list);
    Ok(FederatedDataset {
        theta0_star,
        clients,
        weights,
        warnings,
    })
}

/// Aggregation weights `p_j`.
pub fn client_weights(scheme: WeightScheme, n_list: &[usize]) -> Vec<f64> {
    let m = n_list.len();
    match scheme {
        WeightScheme::Uniform => vec![1.0 / m as f64; m],
        WeightScheme::Proportional => {
            let total: usize = n_list.iter().sum();
            n_list.iter().map(|&n| n as f64 / total as f64).collect()
        }
    }
}

/// Discrete probability distribution on the eigenvalue axis.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpectralDistribution {
    pub support: Vec<f64>,
    pub masses: Vec<f64>,
}

impl SpectralDistribution {
    /// Builds a distribution from atoms, merging equal support points and
    /// renormalising masses to sum to one.
    pub fn new(support: Vec<f64>, masses: Vec<f64>) -> Result<Self> {
        if support.len() != masses.len() || support.is_empty() {
            return Err(Error::InvalidSpec(
                "support and masses must be nonempty and equal length".into(),
            ));
        }
        if masses.iter().any(|&w| !(w >= 0.0)) || support.iter().any(|s| !s.is_finite()) {
            return Err(Error::InvalidSpec("masses must be nonnegative, support finite".into()));
        }
        let total: f64 = masses.iter().sum();
        if !(total > 0.0) {
            return Err(Error::InvalidSpec("total mass must be positive".into()));
        }
        let mut atoms: Vec<(f64, f64)> = support.into_iter().zip(masses).collect();
        atoms.sort_by(|a, b| b.0.total_cmp(&a.0));
        let mut merged: Vec<(f64, f64)> = Vec::new();
        for (s, w) in atoms {
            match merged.last_mut() {
                Some(last) if (last.0 - s).abs() <= 1e-12 * last.0.abs().max(1.0) => last.1 += w,
                _ => merged.push((s, w)),
            }
        }
        Ok(Self {
            support: merged.iter().map(|a| a.0).collect(),
            masses: merged.iter().map(|a| a.1 / total).collect(),
        })
    }

    /// Point mass at `s`.
    pub fn delta(s: f64) -> Self {
        Self {
            support: vec![s],
            masses: vec![1.0],
        }
    }

    /// `∫ f dμ`.
    pub fn integrate(&self, f: impl Fn(f64) -> f64) -> f64 {
        self.support.iter().zip(&self.masses).map(|(&s, &w)| w * f(s)).sum()
    }

    pub fn mass_at(&self, s: f64) -> f64 {
        self.support
            .iter()
            .zip(&self.masses)
            .filter(|(&x, _)| (x - s).abs() <= 1e-12 * s.abs().max(1.0))
            .map(|(_, &w)| w)
            .sum()
    }

    pub fn total_mass(&self) -> f64 {
        self.masses.iter().sum()
    }
}

/// Empirical spectral distribution of `Σ`: mass `1/d` at each eigenvalue.
pub fn esd(sigma: &SpdFactor) -> SpectralDistribution {
    let d = sigma.dim();
    SpectralDistribution::new(sigma.eigenvalues().to_vec(), vec![1.0 / d as f64; d])
        .expect("eigenvalues of an SpdFactor are valid atoms")
}

/// Eigenvalue distribution of `Σ` reweighted by the squared alignment of
/// `delta` with each eigenvector.
pub fn wesd(sigma: &SpdFactor, delta: ColRef<'_, f64>) -> Result<SpectralDistribution> {
    let norm2 = delta.squared_norm_l2();
    if norm2 == 0.0 {
        return Err(Error::ZeroVector);
    }
    let c = sigma.coords(delta);
    let masses: Vec<f64> = (0..c.nrows()).map(|i| c[i] * c[i] / norm2).collect();
    SpectralDistribution::new(sigma.eigenvalues().to_vec(), masses)
}

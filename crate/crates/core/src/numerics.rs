//! Sampling and dense linear-algebra kernels.
//!
//! Every random draw in the crate flows through [`RngStream`], a ChaCha12
//! generator addressed by `(master_seed, substream_id)`. ChaCha is counter
//! based, so a stream's output depends only on its address and never on how
//! many other streams were consumed before it.

use faer::linalg::matmul::triangular::{self, BlockStructure};
use faer::linalg::matmul::{self as mm};
use faer::linalg::solvers::Solve;
use faer::{Accum, Col, ColRef, Mat, MatMut, MatRef, Par, Side};
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha12Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};

pub type DenseMatrix = Mat<f64>;
pub type Vector = Col<f64>;

/// Relative singular-value cutoff used for pseudo-inverses and ranks.
pub const RANK_TOL: f64 = 1e-10;

/// Relative eigenvalue threshold below which an SPD system counts as singular.
pub const SINGULAR_TOL: f64 = 1e-10;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// A reproducible random stream addressed by `(master_seed, substream_id)`.
#[derive(Clone, Debug)]
pub struct RngStream {
    master_seed: u64,
    substream_id: u64,
    rng: ChaCha12Rng,
}

impl RngStream {
    pub fn new(master_seed: u64, substream_id: u64) -> Self {
        let mut rng = ChaCha12Rng::seed_from_u64(master_seed);
        rng.set_stream(substream_id);
        Self {
            master_seed,
            substream_id,
            rng,
        }
    }

    pub fn master_seed(&self) -> u64 {
        self.master_seed
    }

    pub fn substream_id(&self) -> u64 {
        self.substream_id
    }

    /// A child stream keyed by `keys`. The child depends only on this
    /// stream's address and the keys, not on how far this stream has been
    /// consumed.
    pub fn derive(&self, keys: &[u64]) -> RngStream {
        let mut id = splitmix64(self.substream_id ^ 0xA076_1D64_78BD_642F);
        for &k in keys {
            id = splitmix64(id ^ splitmix64(k));
        }
        RngStream::new(self.master_seed, id)
    }

    pub fn uniform(&mut self) -> f64 {
        self.rng.random::<f64>()
    }

    pub fn gaussian(&mut self) -> f64 {
        self.rng.sample(StandardNormal)
    }

    pub fn gaussian_col(&mut self, n: usize) -> Vector {
        Col::from_fn(n, |_| self.gaussian())
    }

    pub fn index(&mut self, bound: usize) -> usize {
        self.rng.random_range(0..bound)
    }

    /// Uniform random permutation of `0..n` (Fisher-Yates).
    pub fn permutation(&mut self, n: usize) -> Vec<usize> {
        let mut p: Vec<usize> = (0..n).collect();
        for i in (1..n).rev() {
            let j = self.index(i + 1);
            p.swap(i, j);
        }
        p
    }

    /// `k` distinct indices from `0..n`, returned in ascending order.
    pub fn sample_without_replacement(&mut self, n: usize, k: usize) -> Vec<usize> {
        assert!(k <= n, "cannot sample {k} of {n} without replacement");
        let mut p: Vec<usize> = (0..n).collect();
        for i in 0..k {
            let j = i + self.index(n - i);
            p.swap(i, j);
        }
        let mut out = p[..k].to_vec();
        out.sort_unstable();
        out
    }
}

impl RngCore for RngStream {
    fn next_u32(&mut self) -> u32 {
        self.rng.next_u32()
    }

    fn next_u64(&mut self) -> u64 {
        self.rng.next_u64()
    }

    fn fill_bytes(&mut self, dst: &mut [u8]) {
        self.rng.fill_bytes(dst)
    }
}

/// Stream for one trial of an experiment.
pub fn substream(master_seed: u64, trial_index: u64) -> RngStream {
    RngStream::new(master_seed, trial_index)
}

/// Eigen-factorisation `Σ = V diag(s) Vᵀ` of a covariance matrix.
///
/// Eigenvalues are kept sorted descending. `basis == None` means the
/// standard basis.
#[derive(Clone, Debug)]
pub struct SpdFactor {
    eigenvalues: Vec<f64>,
    basis: Option<Mat<f64>>,
}

impl SpdFactor {
    pub fn identity(d: usize) -> Self {
        Self {
            eigenvalues: vec![1.0; d],
            basis: None,
        }
    }

    /// `Σ = diag(eigenvalues)` in the order given.
    pub fn diagonal(eigenvalues: Vec<f64>) -> Result<Self> {
        let d = eigenvalues.len();
        let sorted = eigenvalues.windows(2).all(|w| w[0] >= w[1]);
        if sorted {
            Self::check_eigenvalues(&eigenvalues)?;
            return Ok(Self {
                eigenvalues,
                basis: None,
            });
        }
        let basis = Mat::<f64>::identity(d, d);
        Self::new(eigenvalues, Some(basis))
    }

    /// General factor from eigenvalues and an orthonormal basis whose k-th
    /// column is the eigenvector of `eigenvalues[k]`.
    pub fn new(eigenvalues: Vec<f64>, basis: Option<Mat<f64>>) -> Result<Self> {
        Self::check_eigenvalues(&eigenvalues)?;
        let d = eigenvalues.len();
        let Some(basis) = basis else {
            return Self::diagonal(eigenvalues);
        };
        if basis.nrows() != d || basis.ncols() != d {
            return Err(Error::InvalidSpec(format!(
                "basis is {}x{}, expected {d}x{d}",
                basis.nrows(),
                basis.ncols()
            )));
        }
        let gram = basis.transpose() * &basis;
        let mut dev = 0.0f64;
        for j in 0..d {
            for i in 0..d {
                let target = if i == j { 1.0 } else { 0.0 };
                dev = dev.max((gram[(i, j)] - target).abs());
            }
        }
        if dev > 1e-10 {
            return Err(Error::InvalidSpec(format!(
                "basis is not orthonormal (max deviation {dev:.3e})"
            )));
        }
        let mut order: Vec<usize> = (0..d).collect();
        order.sort_by(|&a, &b| eigenvalues[b].total_cmp(&eigenvalues[a]));
        let sorted_vals = order.iter().map(|&k| eigenvalues[k]).collect();
        let sorted_basis = Mat::from_fn(d, d, |i, j| basis[(i, order[j])]);
        Ok(Self {
            eigenvalues: sorted_vals,
            basis: Some(sorted_basis),
        })
    }

    fn check_eigenvalues(eigenvalues: &[f64]) -> Result<()> {
        if eigenvalues.is_empty() {
            return Err(Error::InvalidSpec("empty spectrum".into()));
        }
        if eigenvalues.iter().any(|s| !s.is_finite() || *s <= 0.0) {
            return Err(Error::InvalidSpec(
                "covariance eigenvalues must be finite and positive".into(),
            ));
        }
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.eigenvalues.len()
    }

    pub fn eigenvalues(&self) -> &[f64] {
        &self.eigenvalues
    }

    pub fn basis(&self) -> Option<MatRef<'_, f64>> {
        self.basis.as_ref().map(|b| b.as_ref())
    }

    pub fn is_identity(&self) -> bool {
        self.basis.is_none() && self.eigenvalues.iter().all(|&s| s == 1.0)
    }

    /// Coordinates of `v` in the eigenbasis.
    pub fn coords(&self, v: ColRef<'_, f64>) -> Vector {
        match &self.basis {
            None => v.to_owned(),
            Some(b) => b.transpose() * v,
        }
    }

    /// `Σ v`.
    pub fn apply(&self, v: ColRef<'_, f64>) -> Vector {
        match &self.basis {
            None => Col::from_fn(v.nrows(), |i| self.eigenvalues[i] * v[i]),
            Some(b) => {
                let c = b.transpose() * v;
                let scaled = Col::from_fn(c.nrows(), |i| self.eigenvalues[i] * c[i]);
                b * scaled
            }
        }
    }

    /// `Σ M`.
    pub fn apply_left(&self, m: MatRef<'_, f64>) -> Mat<f64> {
        match &self.basis {
            None => Mat::from_fn(m.nrows(), m.ncols(), |i, j| self.eigenvalues[i] * m[(i, j)]),
            Some(b) => {
                let mut c = b.transpose() * m;
                for j in 0..c.ncols() {
                    for i in 0..c.nrows() {
                        c[(i, j)] *= self.eigenvalues[i];
                    }
                }
                b * c
            }
        }
    }

    /// `Z Σ^{1/2}` using the symmetric square root; rows of `Z` map to
    /// `Σ^{1/2} z`.
    pub fn sqrt_apply_rows(&self, z: MatRef<'_, f64>) -> Mat<f64> {
        match &self.basis {
            None => Mat::from_fn(z.nrows(), z.ncols(), |i, j| z[(i, j)] * self.eigenvalues[j].sqrt()),
            Some(b) => {
                let mut c = z * b;
                for j in 0..c.ncols() {
                    let s = self.eigenvalues[j].sqrt();
                    for i in 0..c.nrows() {
                        c[(i, j)] *= s;
                    }
                }
                c * b.transpose()
            }
        }
    }

    pub fn dense(&self) -> Mat<f64> {
        let d = self.dim();
        self.apply_left(Mat::<f64>::identity(d, d).as_ref())
    }

    /// `vᵀ Σ v`.
    pub fn quad_form(&self, v: ColRef<'_, f64>) -> f64 {
        let c = self.coords(v);
        (0..c.nrows())
            .map(|i| self.eigenvalues[i] * c[i] * c[i])
            .sum::<f64>()
            .max(0.0)
    }

    /// `tr(Σ M)` for square `M`.
    pub fn trace_product(&self, m: MatRef<'_, f64>) -> f64 {
        match &self.basis {
            None => (0..m.nrows()).map(|i| self.eigenvalues[i] * m[(i, i)]).sum(),
            Some(_) => {
                let sm = self.apply_left(m);
                (0..sm.nrows()).map(|i| sm[(i, i)]).sum()
            }
        }
    }
}

/// `n` rows `x = Σ^{1/2} z`, `z ~ N(0, I_d)`.
pub fn sample_gaussian_rows(stream: &mut RngStream, n: usize, sigma_factor: &SpdFactor) -> Mat<f64> {
    let d = sigma_factor.dim();
    let mut z = Mat::<f64>::zeros(n, d);
    // Row-major fill so that a prefix of rows does not depend on `n`.
    for i in 0..n {
        for j in 0..d {
            z[(i, j)] = stream.gaussian();
        }
    }
    if sigma_factor.is_identity() {
        z
    } else {
        sigma_factor.sqrt_apply_rows(z.as_ref())
    }
}

/// Uniform point on the sphere of radius `radius` about `center`.
pub fn sample_sphere(stream: &mut RngStream, center: ColRef<'_, f64>, radius: f64) -> Vector {
    assert!(radius >= 0.0, "radius must be nonnegative");
    let d = center.nrows();
    if radius == 0.0 {
        return center.to_owned();
    }
    loop {
        let g = stream.gaussian_col(d);
        let norm = g.norm_l2();
        if norm > 0.0 {
            return Col::from_fn(d, |i| center[i] + radius * g[i] / norm);
        }
    }
}

/// Haar-distributed orthogonal matrix from the QR factorisation of a Gaussian
/// matrix with the sign convention `diag(R) > 0`.
pub fn haar_orthogonal(stream: &mut RngStream, d: usize) -> Mat<f64> {
    let g = Mat::from_fn(d, d, |_, _| stream.gaussian());
    let qr = g.qr();
    let mut q = qr.compute_thin_Q();
    let r = qr.thin_R();
    for j in 0..d {
        if r[(j, j)] < 0.0 {
            for i in 0..d {
                q[(i, j)] = -q[(i, j)];
            }
        }
    }
    q
}

/// Thin SVD view of the row space of an `n × d` design matrix.
///
/// `basis` (d × r) spans the row space, `left` (n × r) spans the column
/// space and `singular` holds the r retained singular values, so that
/// `X = left · diag(singular) · basisᵀ`.
#[derive(Clone, Debug)]
pub struct RowSpace {
    pub basis: Mat<f64>,
    pub left: Mat<f64>,
    pub singular: Vec<f64>,
}

impl RowSpace {
    pub fn new(x: MatRef<'_, f64>, tol: f64) -> Result<Self> {
        let (n, d) = (x.nrows(), x.ncols());
        // SVD of the d × n transpose: Xᵀ = U S Vᵀ, so X = V S Uᵀ.
        let svd = x
            .transpose()
            .thin_svd()
            .map_err(|e| Error::Linalg(format!("svd failed: {e:?}")))?;
        let s = svd.S().column_vector();
        let k = s.nrows();
        let smax = if k > 0 { s[0] } else { 0.0 };
        let rank = (0..k).filter(|&i| smax > 0.0 && s[i] > tol * smax).count();
        let u = svd.U();
        let v = svd.V();
        Ok(Self {
            basis: Mat::from_fn(d, rank, |i, j| u[(i, j)]),
            left: Mat::from_fn(n, rank, |i, j| v[(i, j)]),
            singular: (0..rank).map(|i| s[i]).collect(),
        })
    }

    pub fn rank(&self) -> usize {
        self.singular.len()
    }

    /// `Π v` with `Π = I − X⁺X`.
    pub fn project_null(&self, v: ColRef<'_, f64>) -> Vector {
        let c = self.basis.transpose() * v;
        let proj = &self.basis * c;
        Col::from_fn(v.nrows(), |i| v[i] - proj[i])
    }

    /// `Π M` applied column-wise.
    pub fn project_null_mat(&self, m: MatRef<'_, f64>) -> Mat<f64> {
        let c = self.basis.transpose() * m;
        let mut out = m.to_owned();
        mm::matmul(
            out.as_mut(),
            Accum::Add,
            self.basis.as_ref(),
            c.as_ref(),
            -1.0,
            Par::Seq,
        );
        out
    }

    /// `X⁺ b`.
    pub fn pinv_apply(&self, b: ColRef<'_, f64>) -> Vector {
        let mut c = self.left.transpose() * b;
        for (i, s) in self.singular.iter().enumerate() {
            c[i] /= s;
        }
        &self.basis * c
    }

    /// Dense `Π = I − V Vᵀ`.
    pub fn null_projector(&self) -> Mat<f64> {
        let d = self.basis.nrows();
        let mut p = Mat::<f64>::identity(d, d);
        mm::matmul(
            p.as_mut(),
            Accum::Add,
            self.basis.as_ref(),
            self.basis.transpose(),
            -1.0,
            Par::Seq,
        );
        p
    }

    /// `X⁺` as a dense `d × n` matrix.
    pub fn pinv(&self) -> Mat<f64> {
        let scaled = Mat::from_fn(self.basis.nrows(), self.rank(), |i, j| {
            self.basis[(i, j)] / self.singular[j]
        });
        scaled * self.left.transpose()
    }
}

fn check_finite_mat(m: MatRef<'_, f64>, what: &'static str) -> Result<()> {
    for j in 0..m.ncols() {
        for i in 0..m.nrows() {
            if !m[(i, j)].is_finite() {
                return Err(Error::NonFiniteInput(what));
            }
        }
    }
    Ok(())
}

fn check_finite_col(v: ColRef<'_, f64>, what: &'static str) -> Result<()> {
    if v.iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFiniteInput(what))
    }
}

/// Minimum-ℓ₂-norm least-squares solution of `A θ = b`; singular values below
/// `tol · s_max` are treated as zero.
pub fn min_norm_solve(a: MatRef<'_, f64>, b: ColRef<'_, f64>, tol: f64) -> Result<Vector> {
    check_finite_mat(a, "min_norm_solve")?;
    check_finite_col(b, "min_norm_solve")?;
    Ok(RowSpace::new(a, tol)?.pinv_apply(b))
}

/// Solves `(G + λI) θ = rhs` by Cholesky.
pub fn ridge_solve(g: MatRef<'_, f64>, rhs: ColRef<'_, f64>, lambda: f64) -> Result<Vector> {
    check_finite_mat(g, "ridge_solve")?;
    check_finite_col(rhs, "ridge_solve")?;
    if !lambda.is_finite() {
        return Err(Error::NonFiniteInput("ridge_solve"));
    }
    if lambda <= 0.0 {
        return Err(Error::NonPositiveLambda(lambda));
    }
    let d = g.nrows();
    let shifted = Mat::from_fn(d, d, |i, j| g[(i, j)] + if i == j { lambda } else { 0.0 });
    let llt = shifted
        .llt(Side::Lower)
        .map_err(|e| Error::Linalg(format!("cholesky failed: {e:?}")))?;
    Ok(llt.solve(rhs))
}

/// `Π v`: projection of `v` onto the null space of `X`.
pub fn null_projector_apply(x: MatRef<'_, f64>, v: ColRef<'_, f64>, tol: f64) -> Result<Vector> {
    check_finite_mat(x, "null_projector_apply")?;
    Ok(RowSpace::new(x, tol)?.project_null(v))
}

/// `vᵀ Σ v`.
pub fn weighted_quadratic_norm(sigma: &SpdFactor, v: ColRef<'_, f64>) -> f64 {
    assert_eq!(sigma.dim(), v.nrows(), "dimension mismatch");
    sigma.quad_form(v)
}

pub fn dot(a: ColRef<'_, f64>, b: ColRef<'_, f64>) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| x * y).sum()
}

/// `acc += alpha · Xᵀ X`, lower triangle only.
pub(crate) fn gram_lower_add(acc: MatMut<'_, f64>, x: MatRef<'_, f64>, alpha: f64) {
    triangular::matmul(
        acc,
        BlockStructure::TriangularLower,
        Accum::Add,
        x.transpose(),
        BlockStructure::Rectangular,
        x,
        BlockStructure::Rectangular,
        alpha,
        Par::Seq,
    );
}

/// Copies the lower triangle onto the upper one.
pub(crate) fn symmetrize_lower(m: &mut Mat<f64>) {
    let d = m.nrows();
    for j in 0..d {
        for i in (j + 1)..d {
            m[(j, i)] = m[(i, j)];
        }
    }
}

/// `Xᵀ X` as a full symmetric matrix.
pub fn gram(x: MatRef<'_, f64>) -> Mat<f64> {
    let d = x.ncols();
    let mut g = Mat::<f64>::zeros(d, d);
    gram_lower_add(g.as_mut(), x, 1.0);
    symmetrize_lower(&mut g);
    g
}

/// Cholesky-factored SPD system with an eigenvalue-ratio singularity check.
pub struct SpdSystem {
    llt: faer::linalg::solvers::Llt<f64>,
    ratio: f64,
}

impl SpdSystem {
    /// Factors `m`; returns `Err(ratio)` when `λ_min / λ_max ≤ threshold`.
    pub fn factor(m: &Mat<f64>, threshold: f64) -> std::result::Result<Self, f64> {
        let eig = m.self_adjoint_eigenvalues(Side::Lower).map_err(|_| f64::NAN)?;
        let max = eig.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let min = eig.iter().cloned().fold(f64::INFINITY, f64::min);
        let ratio = if max > 0.0 { min / max } else { f64::NEG_INFINITY };
        if !ratio.is_finite() || ratio <= threshold {
            return Err(if ratio.is_finite() { ratio } else { 0.0 });
        }
        let llt = m.llt(Side::Lower).map_err(|_| ratio)?;
        Ok(Self { llt, ratio })
    }

    pub fn ratio(&self) -> f64 {
        self.ratio
    }

    pub fn solve(&self, rhs: ColRef<'_, f64>) -> Vector {
        self.llt.solve(rhs)
    }

    pub fn solve_mat(&self, rhs: MatRef<'_, f64>) -> Mat<f64> {
        self.llt.solve(rhs)
    }
}

/// `tr(Aᵀ B)` = Σ_ij A_ij B_ij.
pub fn frobenius_inner(a: MatRef<'_, f64>, b: MatRef<'_, f64>) -> f64 {
    let mut s = 0.0;
    for j in 0..a.ncols() {
        for i in 0..a.nrows() {
            s += a[(i, j)] * b[(i, j)];
        }
    }
    s
}

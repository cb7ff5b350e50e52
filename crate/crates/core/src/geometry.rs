//! Simplex equiangular tight frames, Gram closed forms, and active
//! subspaces.
//!
//! Conventions used throughout:
//!
//! - A frame is stored as a `d x K` matrix whose columns are centered class
//!   means. [`build_simplex_etf`] produces frames with Gram
//!   `U^T U = beta (I_K - 11^T/K)`, i.e. `beta` scales the *Gram*, so each
//!   column has squared norm `beta (K-1)/K` (see
//!   [`SimplexEtf::mean_sq_norm`]) and distinct columns meet at cosine
//!   `-1/(K-1)`.
//! - A [`Subspace`] holds an orthonormal `r x d` row basis; projections are
//!   `v B^T B`.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use thiserror::Error;

/// Relative singular-value cutoff used when none is supplied.
pub const DEFAULT_RANK_TOL: f64 = 1e-9;

// Gram matrices of near-collapsed means have one singular value at numerical
// zero; this cutoff keeps it out of the pseudoinverse.
const PINV_REL_TOL: f64 = 1e-10;

#[derive(Debug, Error)]
pub enum GeometryError {
    #[error("simplex needs at least 2 classes, got {0}")]
    TooFewClasses(usize),
    #[error("ambient dimension {dim} too small for {k} classes (needs at least {min})")]
    AmbientTooSmall { dim: usize, k: usize, min: usize },
    #[error("scale parameter must be positive and finite, got {0}")]
    BadScale(f64),
    #[error("tolerance must be positive and finite, got {0}")]
    BadTolerance(f64),
    #[error("dimension mismatch: got {got}, expected {expected}")]
    DimensionMismatch { got: usize, expected: usize },
    #[error("matrix must be nonempty")]
    EmptyMatrix,
    #[error("rows are not orthonormal (max deviation {0:.3e})")]
    NotOrthonormal(f64),
}

/// A simplex equiangular tight frame of `K` centered class means in `R^d`.
#[derive(Debug, Clone)]
pub struct SimplexEtf {
    means: DMatrix<f64>,
    beta: f64,
}

impl SimplexEtf {
    /// Columns are the centered means; `d x K`.
    pub fn means(&self) -> &DMatrix<f64> {
        &self.means
    }

    /// Gram scale: `means^T means = beta (I - 11^T/K)`.
    pub fn beta(&self) -> f64 {
        self.beta
    }

    pub fn k(&self) -> usize {
        self.means.ncols()
    }

    pub fn dim(&self) -> usize {
        self.means.nrows()
    }

    /// Squared norm of each column, `beta (K-1)/K`. This is the natural
    /// scale parameter when a frame is described by its mean norms rather
    /// than its Gram.
    pub fn mean_sq_norm(&self) -> f64 {
        self.beta * (self.k() as f64 - 1.0) / self.k() as f64
    }
}

/// Builds a `k`-class simplex frame in `R^dim` with Gram
/// `beta (I - 11^T/k)`.
///
/// The base frame occupies the first `k-1` coordinates (via a Helmert basis
/// of the hyperplane orthogonal to `1`); with `rotation_seed` it is rotated
/// by a seeded orthogonal matrix, which changes the embedding but not the
/// Gram. Requires `k >= 2`, `dim >= k-1`, and positive finite `beta`.
pub fn build_simplex_etf(
    k: usize,
    dim: usize,
    beta: f64,
    rotation_seed: Option<u64>,
) -> Result<SimplexEtf, GeometryError> {
    if k < 2 {
        return Err(GeometryError::TooFewClasses(k));
    }
    if dim < k - 1 {
        return Err(GeometryError::AmbientTooSmall { dim, k, min: k - 1 });
    }
    if !(beta.is_finite() && beta > 0.0) {
        return Err(GeometryError::BadScale(beta));
    }

    // Helmert column j (k entries): j ones, then -j, then zeros, normalized.
    // The columns are orthonormal and orthogonal to 1, so H H^T = I - 11^T/k
    // and U = sqrt(beta) E H^T has exactly the target Gram.
    let sqrt_beta = beta.sqrt();
    let mut means = DMatrix::zeros(dim, k);
    for j in 1..k {
        let scale = sqrt_beta / ((j * (j + 1)) as f64).sqrt();
        for c in 0..k {
            let h = if c < j {
                1.0
            } else if c == j {
                -(j as f64)
            } else {
                0.0
            };
            means[(j - 1, c)] = scale * h;
        }
    }

    if let Some(seed) = rotation_seed {
        let q = seeded_rotation(dim, seed);
        means = q * means;
    }

    Ok(SimplexEtf { means, beta })
}

/// Orthogonal `dim x dim` matrix from the QR of a seeded Gaussian matrix,
/// with column signs fixed by the R diagonal so the result is canonical.
fn seeded_rotation(dim: usize, seed: u64) -> DMatrix<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let g = DMatrix::from_fn(dim, dim, |_, _| rng.sample::<f64, _>(StandardNormal));
    let qr = g.qr();
    let mut q = qr.q();
    let r = qr.r();
    for j in 0..dim {
        if r[(j, j)] < 0.0 {
            for i in 0..dim {
                q[(i, j)] = -q[(i, j)];
            }
        }
    }
    q
}

/// Gram matrix `means^T means`, symmetrized so downstream eigen routines
/// see an exactly symmetric input.
pub fn gram(means: &DMatrix<f64>) -> Result<DMatrix<f64>, GeometryError> {
    if means.nrows() == 0 || means.ncols() == 0 {
        return Err(GeometryError::EmptyMatrix);
    }
    let g = means.transpose() * means;
    Ok(0.5 * (&g + g.transpose()))
}

/// Moore-Penrose pseudoinverse of the Gram of `means`, computed through the
/// SVD with a relative singular-value cutoff.
pub fn gram_pseudoinverse(means: &DMatrix<f64>) -> Result<DMatrix<f64>, GeometryError> {
    let g = gram(means)?;
    let svd = g.clone().svd(true, true);
    let sigma_max = svd.singular_values.iter().cloned().fold(0.0_f64, f64::max);
    if sigma_max == 0.0 {
        return Ok(DMatrix::zeros(g.nrows(), g.ncols()));
    }
    let eps = sigma_max * PINV_REL_TOL;
    g.pseudo_inverse(eps)
        .map_err(|_| GeometryError::EmptyMatrix)
}

/// Orthonormal row basis of a linear subspace of `R^d`.
#[derive(Debug, Clone)]
pub struct Subspace {
    basis: DMatrix<f64>, // r x d, orthonormal rows
}

impl Subspace {
    /// Wraps an explicit `r x d` basis, verifying `B B^T = I_r`.
    pub fn from_orthonormal_rows(basis: DMatrix<f64>) -> Result<Self, GeometryError> {
        if basis.ncols() == 0 {
            return Err(GeometryError::EmptyMatrix);
        }
        let gram = &basis * basis.transpose();
        let mut dev = 0.0_f64;
        for i in 0..gram.nrows() {
            for j in 0..gram.ncols() {
                let target = if i == j { 1.0 } else { 0.0 };
                dev = dev.max((gram[(i, j)] - target).abs());
            }
        }
        if dev > 1e-8 {
            return Err(GeometryError::NotOrthonormal(dev));
        }
        Ok(Subspace { basis })
    }

    /// The trivial subspace {0} of `R^dim`.
    pub fn empty(dim: usize) -> Self {
        Subspace {
            basis: DMatrix::zeros(0, dim),
        }
    }

    pub fn rank(&self) -> usize {
        self.basis.nrows()
    }

    pub fn ambient_dim(&self) -> usize {
        self.basis.ncols()
    }

    pub fn basis(&self) -> &DMatrix<f64> {
        &self.basis
    }

    /// Coefficients of `v` in the basis, `B v`. Their Euclidean norm equals
    /// the norm of the projection of `v` onto the subspace.
    pub fn coefficients(&self, v: &DVector<f64>) -> Result<DVector<f64>, GeometryError> {
        if v.len() != self.ambient_dim() {
            return Err(GeometryError::DimensionMismatch {
                got: v.len(),
                expected: self.ambient_dim(),
            });
        }
        Ok(&self.basis * v)
    }

    /// Splits `v` into its in-span part and residual.
    pub fn project_vector(
        &self,
        v: &DVector<f64>,
    ) -> Result<(DVector<f64>, DVector<f64>), GeometryError> {
        let coeff = self.coefficients(v)?;
        let in_span = self.basis.transpose() * coeff;
        let residual = v - &in_span;
        Ok((in_span, residual))
    }

    /// Orthonormal basis of the orthogonal complement, derived from the
    /// eigenvectors of `I - B^T B` at eigenvalue one. Deterministic.
    pub fn complement(&self) -> Subspace {
        let d = self.ambient_dim();
        let p = DMatrix::identity(d, d) - self.basis.transpose() * &self.basis;
        let eig = p.symmetric_eigen();
        let mut cols: Vec<usize> = (0..d).filter(|&i| eig.eigenvalues[i] > 0.5).collect();
        // order by eigenvalue descending for a canonical basis
        cols.sort_by(|&a, &b| eig.eigenvalues[b].partial_cmp(&eig.eigenvalues[a]).unwrap());
        let mut basis = DMatrix::zeros(cols.len(), d);
        for (r, &c) in cols.iter().enumerate() {
            for i in 0..d {
                basis[(r, i)] = eig.eigenvectors[(i, c)];
            }
        }
        Subspace { basis }
    }
}

/// Left-singular subspace of `centered_means` (`d x K`) at relative
/// singular-value cutoff `rel_tol`. An all-zero input yields the empty
/// subspace of rank 0.
pub fn active_subspace(
    centered_means: &DMatrix<f64>,
    rel_tol: f64,
) -> Result<Subspace, GeometryError> {
    if !(rel_tol.is_finite() && rel_tol > 0.0) {
        return Err(GeometryError::BadTolerance(rel_tol));
    }
    if centered_means.nrows() == 0 || centered_means.ncols() == 0 {
        return Err(GeometryError::EmptyMatrix);
    }
    let d = centered_means.nrows();
    let svd = centered_means.clone().svd(true, false);
    let u = svd.u.as_ref().expect("svd requested u");
    let sv = &svd.singular_values;
    let sigma_max = sv.iter().cloned().fold(0.0_f64, f64::max);
    if sigma_max == 0.0 {
        return Ok(Subspace::empty(d));
    }
    let mut kept: Vec<usize> = (0..sv.len()).filter(|&i| sv[i] > rel_tol * sigma_max).collect();
    kept.sort_by(|&a, &b| sv[b].partial_cmp(&sv[a]).unwrap());
    let mut basis = DMatrix::zeros(kept.len(), d);
    for (r, &i) in kept.iter().enumerate() {
        for row in 0..d {
            basis[(r, row)] = u[(row, i)];
        }
    }
    Ok(Subspace { basis })
}

/// Splits each row of `vectors` (`n x d`) into in-span and residual parts
/// with respect to `sub`. Returns `(in_span, residual)`, both `n x d`.
pub fn project(
    vectors: &DMatrix<f64>,
    sub: &Subspace,
) -> Result<(DMatrix<f64>, DMatrix<f64>), GeometryError> {
    if vectors.ncols() != sub.ambient_dim() {
        return Err(GeometryError::DimensionMismatch {
            got: vectors.ncols(),
            expected: sub.ambient_dim(),
        });
    }
    let coeff = vectors * sub.basis().transpose(); // n x r
    let in_span = coeff * sub.basis(); // n x d
    let residual = vectors - &in_span;
    Ok((in_span, residual))
}

/// Number of singular values above `rel_tol` times the largest.
pub fn numerical_rank(matrix: &DMatrix<f64>, rel_tol: f64) -> Result<usize, GeometryError> {
    if !(rel_tol.is_finite() && rel_tol > 0.0) {
        return Err(GeometryError::BadTolerance(rel_tol));
    }
    if matrix.nrows() == 0 || matrix.ncols() == 0 {
        return Err(GeometryError::EmptyMatrix);
    }
    let svd = matrix.clone().svd(false, false);
    let sv = &svd.singular_values;
    let sigma_max = sv.iter().cloned().fold(0.0_f64, f64::max);
    if sigma_max == 0.0 {
        return Ok(0);
    }
    Ok(sv.iter().filter(|&&s| s > rel_tol * sigma_max).count())
}

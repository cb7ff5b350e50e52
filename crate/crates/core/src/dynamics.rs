//! Closed-form terminal-phase dynamics and the replay mixture model.
//!
//! Once training error hits zero at step `t0`, feature directions outside
//! the active subspace `S` receive no gradient signal and evolve only
//! through weight decay: per step they shrink by the decay factor
//! `upsilon = 1 - eta * lambda`. The module provides
//!
//! - the decayed out-of-distribution mean `upsilon^(t-t0) * mu_perp`,
//! - a sandwich on the variance of out-of-distribution features introduced
//!   by the in-span coefficient covariance `sigma_b` (scaled by the squared
//!   mean norm `beta_t`) plus the decayed frozen off-span variance,
//! - Monte-Carlo samplers for the pure off-distribution law `D_OOD` and
//!   the replay mixture `pi * D_NC + (1-pi) * D_OOD`,
//! - closed-form SNR predictors for the no-replay and replay cases, and
//! - the replay-buffer mean concentration bound `sqrt(tr(Sigma)/b)`.
//!
//! Scale conventions: every `beta` in this module is a *squared centered
//! mean norm* (the Gram diagonal), which is `SimplexEtf::mean_sq_norm()`,
//! not the frame's Gram scale parameter. Samplers are pure functions of
//! their explicit seed; output is bit-identical across the sequential and
//! parallel execution modes because sampling is chunked with per-chunk
//! derived seeds.

use nalgebra::{Cholesky, DMatrix, DVector};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use thiserror::Error;

use crate::exec::{derive_seed, map_indexed, ExecMode, CHUNK};
use crate::geometry::{active_subspace, GeometryError, SimplexEtf, DEFAULT_RANK_TOL};

#[derive(Debug, Error)]
pub enum DynamicsError {
    #[error("learning rate must be positive and finite, got {0}")]
    BadEta(f64),
    #[error("weight decay must be nonnegative and finite, got {0}")]
    BadLambda(f64),
    #[error("unstable decay step: eta * lambda = {0} >= 1")]
    UnstableStep(f64),
    #[error("{which} schedule produced or holds an invalid value {value}")]
    BadSchedule { which: &'static str, value: f64 },
    #[error("table schedule must hold at least one value")]
    EmptyTable,
    #[error("time {t} precedes the terminal-phase onset {t0}")]
    BeforeOnset { t: u64, t0: u64 },
    #[error("mixing coefficient must lie in [0, 1], got {0}")]
    BadPi(f64),
    #[error("variance must be nonnegative and finite, got {0}")]
    BadVariance(f64),
    #[error("dimension mismatch: got {got}, expected {expected}")]
    DimMismatch { got: usize, expected: usize },
    #[error("coefficient covariance must be {expected}x{expected}, got {got}x{got2}")]
    SigmaShape {
        got: usize,
        got2: usize,
        expected: usize,
    },
    #[error("in-distribution mean leaves the active subspace (residual norm {0:.3e})")]
    MeanNotInSpan(f64),
    #[error("off-span mean has an in-span component (projection norm {0:.3e})")]
    MeanNotPerp(f64),
    #[error("no off-span directions exist but off-span variance/mean is nonzero")]
    NoPerpRoom,
    #[error("need at least one head")]
    NoHeads,
    #[error("buffer size must be at least 1")]
    EmptyBuffer,
    #[error("replay ratio undefined: beta and delta both zero in the full-replay limit")]
    UndefinedLimit,
    #[error("predictor denominator vanished")]
    ZeroDenominator,
    #[error(transparent)]
    Geometry(#[from] GeometryError),
}

/// Scalar schedule over steps since terminal-phase onset.
#[derive(Debug, Clone, PartialEq)]
pub enum Schedule {
    Constant(f64),
    /// `base + slope * dt`, clamped at zero.
    Linear { base: f64, slope: f64 },
    /// `initial * rate^dt`.
    Geometric { initial: f64, rate: f64 },
    /// Indexed by `dt`, clamped to the last entry.
    Table(Vec<f64>),
}

impl Schedule {
    pub fn validate(&self, which: &'static str) -> Result<(), DynamicsError> {
        let bad = |value: f64| DynamicsError::BadSchedule { which, value };
        match self {
            Schedule::Constant(v) => {
                if !(v.is_finite() && *v >= 0.0) {
                    return Err(bad(*v));
                }
            }
            Schedule::Linear { base, slope } => {
                if !(base.is_finite() && *base >= 0.0) {
                    return Err(bad(*base));
                }
                if !slope.is_finite() {
                    return Err(bad(*slope));
                }
            }
            Schedule::Geometric { initial, rate } => {
                if !(initial.is_finite() && *initial >= 0.0) {
                    return Err(bad(*initial));
                }
                if !(rate.is_finite() && *rate >= 0.0) {
                    return Err(bad(*rate));
                }
            }
            Schedule::Table(values) => {
                if values.is_empty() {
                    return Err(DynamicsError::EmptyTable);
                }
                for &v in values {
                    if !(v.is_finite() && v >= 0.0) {
                        return Err(bad(v));
                    }
                }
            }
        }
        Ok(())
    }

    /// Value `dt` steps after onset; always finite and nonnegative for a
    /// validated schedule.
    pub fn value(&self, dt: u64) -> f64 {
        match self {
            Schedule::Constant(v) => *v,
            Schedule::Linear { base, slope } => (base + slope * dt as f64).max(0.0),
            Schedule::Geometric { initial, rate } => initial * rate.powf(dt as f64),
            Schedule::Table(values) => values[(dt as usize).min(values.len() - 1)],
        }
    }
}

/// Terminal-phase parameters: optimizer constants, onset step, and the
/// in-span scale (`beta`) and residual-variance (`delta`) trajectories.
#[derive(Debug, Clone)]
pub struct TptParams {
    eta: f64,
    lambda: f64,
    t0: u64,
    beta_schedule: Schedule,
    delta_schedule: Schedule,
}

impl TptParams {
    pub fn new(
        eta: f64,
        lambda: f64,
        t0: u64,
        beta_schedule: Schedule,
        delta_schedule: Schedule,
    ) -> Result<Self, DynamicsError> {
        if !(eta.is_finite() && eta > 0.0) {
            return Err(DynamicsError::BadEta(eta));
        }
        if !(lambda.is_finite() && lambda >= 0.0) {
            return Err(DynamicsError::BadLambda(lambda));
        }
        if eta * lambda >= 1.0 {
            return Err(DynamicsError::UnstableStep(eta * lambda));
        }
        beta_schedule.validate("beta")?;
        delta_schedule.validate("delta")?;
        Ok(TptParams {
            eta,
            lambda,
            t0,
            beta_schedule,
            delta_schedule,
        })
    }

    /// Default residual-variance trajectory: geometric decay from
    /// `delta0` at rate 0.99 per step.
    pub fn default_delta(delta0: f64) -> Schedule {
        Schedule::Geometric {
            initial: delta0,
            rate: 0.99,
        }
    }

    pub fn eta(&self) -> f64 {
        self.eta
    }

    pub fn lambda(&self) -> f64 {
        self.lambda
    }

    pub fn t0(&self) -> u64 {
        self.t0
    }

    pub fn beta_schedule(&self) -> &Schedule {
        &self.beta_schedule
    }

    pub fn delta_schedule(&self) -> &Schedule {
        &self.delta_schedule
    }

    /// Per-step off-span shrink factor `1 - eta * lambda`; 1 exactly when
    /// decay is off.
    pub fn decay_factor(&self) -> f64 {
        1.0 - self.eta * self.lambda
    }

    fn dt(&self, t: u64) -> Result<u64, DynamicsError> {
        t.checked_sub(self.t0)
            .ok_or(DynamicsError::BeforeOnset { t, t0: self.t0 })
    }

    pub fn beta_at(&self, t: u64) -> Result<f64, DynamicsError> {
        Ok(self.beta_schedule.value(self.dt(t)?))
    }

    pub fn delta_at(&self, t: u64) -> Result<f64, DynamicsError> {
        Ok(self.delta_schedule.value(self.dt(t)?))
    }

    /// `upsilon^(t-t0)`.
    pub fn decay_pow(&self, t: u64) -> Result<f64, DynamicsError> {
        Ok(self.decay_factor().powf(self.dt(t)? as f64))
    }
}

/// How per-head squared mean norms combine into one reported scale.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum BetaAggregation {
    #[default]
    Sum,
    Mean,
}

/// Aggregate in-span scale across heads. Note the variance sandwich is
/// invariant to this choice: with `m` heads of equal per-head scale the sum
/// form pairs with a `K/(K-1)` factor and the mean form with `mK/(K-1)`,
/// yielding identical bounds.
pub fn beta_active(per_head: &[f64], agg: BetaAggregation) -> Result<f64, DynamicsError> {
    if per_head.is_empty() {
        return Err(DynamicsError::NoHeads);
    }
    for &b in per_head {
        if !(b.is_finite() && b >= 0.0) {
            return Err(DynamicsError::BadVariance(b));
        }
    }
    let sum: f64 = per_head.iter().sum();
    Ok(match agg {
        BetaAggregation::Sum => sum,
        BetaAggregation::Mean => sum / per_head.len() as f64,
    })
}

/// Replay mixture: with probability `pi` a feature is drawn from the
/// collapsed in-distribution cloud `D_NC` (mean `nc_mean`, isotropic total
/// variance `delta_t`), otherwise from the decayed off-distribution law
/// `D_OOD` (in-span coefficients with covariance `sigma_b` on the frame,
/// off-span frozen Gaussian around `ood_mean_perp` with total variance
/// `perp_variance` at onset, both decayed by `upsilon^(t-t0)`).
#[derive(Debug, Clone)]
pub struct MixtureParams {
    pub pi: f64,
    pub nc_mean: DVector<f64>,
    pub ood_mean_perp: DVector<f64>,
    /// K x K covariance of the in-span frame coefficients at onset.
    pub sigma_b: DMatrix<f64>,
    /// Total off-span variance at onset.
    pub perp_variance: f64,
    pub tpt: TptParams,
}

impl MixtureParams {
    /// Checks the mixture against the frame it will be sampled on:
    /// `nc_mean` must lie in the frame's span, `ood_mean_perp` in its
    /// orthogonal complement, and `sigma_b` must be K x K.
    pub fn validate_for(&self, etf: &SimplexEtf) -> Result<(), DynamicsError> {
        let d = etf.dim();
        let k = etf.k();
        if self.nc_mean.len() != d {
            return Err(DynamicsError::DimMismatch {
                got: self.nc_mean.len(),
                expected: d,
            });
        }
        if self.ood_mean_perp.len() != d {
            return Err(DynamicsError::DimMismatch {
                got: self.ood_mean_perp.len(),
                expected: d,
            });
        }
        if self.sigma_b.nrows() != k || self.sigma_b.ncols() != k {
            return Err(DynamicsError::SigmaShape {
                got: self.sigma_b.nrows(),
                got2: self.sigma_b.ncols(),
                expected: k,
            });
        }
        if !(self.pi.is_finite() && (0.0..=1.0).contains(&self.pi)) {
            return Err(DynamicsError::BadPi(self.pi));
        }
        if !(self.perp_variance.is_finite() && self.perp_variance >= 0.0) {
            return Err(DynamicsError::BadVariance(self.perp_variance));
        }
        let sub = active_subspace(etf.means(), DEFAULT_RANK_TOL)?;
        let tol = 1e-8;
        let (_, nc_res) = sub.project_vector(&self.nc_mean)?;
        if nc_res.norm() > tol * (1.0 + self.nc_mean.norm()) {
            return Err(DynamicsError::MeanNotInSpan(nc_res.norm()));
        }
        let (perp_in, _) = sub.project_vector(&self.ood_mean_perp)?;
        if perp_in.norm() > tol * (1.0 + self.ood_mean_perp.norm()) {
            return Err(DynamicsError::MeanNotPerp(perp_in.norm()));
        }
        let perp_room = d - sub.rank();
        if perp_room == 0 && (self.perp_variance > 0.0 || self.ood_mean_perp.norm() > 0.0) {
            return Err(DynamicsError::NoPerpRoom);
        }
        Ok(())
    }
}

/// Decayed off-span mean at time `t`: `upsilon^(t-t0) * mu_perp_t0`.
/// With `lambda = 0` the input is returned unchanged (frozen residuals).
pub fn ood_mean_at(
    t: u64,
    mu_perp_t0: &DVector<f64>,
    tpt: &TptParams,
) -> Result<DVector<f64>, DynamicsError> {
    Ok(mu_perp_t0 * tpt.decay_pow(t)?)
}

/// Sandwich on the total variance of `D_OOD` at time `t`:
///
/// ```text
/// low  = beta_t * P/(K-1) * (tr(sigma_b) - lambda_max(sigma_b)) + upsilon^(2 dt) * v_perp
/// high = beta_t * P/(K-1) *  tr(sigma_b)                        + upsilon^(2 dt) * v_perp
/// ```
///
/// with `P = n_heads * K` and `beta_t` the per-head squared mean norm from
/// the schedule. The frame coefficient covariance must be `K x K` and
/// symmetric.
pub fn ood_variance_bounds(
    sigma_b: &DMatrix<f64>,
    tpt: &TptParams,
    t: u64,
    n_heads: usize,
    v_perp: f64,
) -> Result<(f64, f64), DynamicsError> {
    if n_heads == 0 {
        return Err(DynamicsError::NoHeads);
    }
    let k = sigma_b.nrows();
    if sigma_b.ncols() != k || k < 2 {
        return Err(DynamicsError::SigmaShape {
            got: sigma_b.nrows(),
            got2: sigma_b.ncols(),
            expected: k.max(2),
        });
    }
    if !(v_perp.is_finite() && v_perp >= 0.0) {
        return Err(DynamicsError::BadVariance(v_perp));
    }
    let beta_t = tpt.beta_at(t)?;
    let decay2 = tpt.decay_pow(t)?.powi(2);
    let sym = 0.5 * (sigma_b + sigma_b.transpose());
    let trace = sym.trace();
    let lambda_max = sym
        .symmetric_eigen()
        .eigenvalues
        .iter()
        .cloned()
        .fold(f64::NEG_INFINITY, f64::max)
        .max(0.0);
    let p = (n_heads * k) as f64;
    let factor = beta_t * p / (k as f64 - 1.0);
    let low = factor * (trace - lambda_max).max(0.0) + decay2 * v_perp;
    let high = factor * trace + decay2 * v_perp;
    Ok((low, high))
}

/// PSD factor L with L L^T = sigma (Cholesky, falling back to a clamped
/// eigendecomposition for semidefinite input).
fn psd_factor(sigma: &DMatrix<f64>) -> DMatrix<f64> {
    let sym = 0.5 * (sigma + sigma.transpose());
    if let Some(chol) = Cholesky::new(sym.clone()) {
        return chol.l();
    }
    let eig = sym.symmetric_eigen();
    let mut l = eig.eigenvectors.clone();
    for j in 0..l.ncols() {
        let s = eig.eigenvalues[j].max(0.0).sqrt();
        for i in 0..l.nrows() {
            l[(i, j)] *= s;
        }
    }
    l
}

struct OodMachine {
    means: DMatrix<f64>,      // d x K
    l_b: DMatrix<f64>,        // K x K
    perp_basis: DMatrix<f64>, // r_perp x d, orthonormal rows
    perp_coord_std: f64,
    decay: f64,
    mean_perp: DVector<f64>,
}

impl OodMachine {
    fn new(etf: &SimplexEtf, mix: &MixtureParams, t: u64) -> Result<Self, DynamicsError> {
        mix.validate_for(etf)?;
        let sub = active_subspace(etf.means(), DEFAULT_RANK_TOL)?;
        let perp = sub.complement();
        let r_perp = perp.rank();
        let perp_coord_std = if r_perp > 0 {
            (mix.perp_variance / r_perp as f64).sqrt()
        } else {
            0.0
        };
        Ok(OodMachine {
            means: etf.means().clone(),
            l_b: psd_factor(&mix.sigma_b),
            perp_basis: perp.basis().clone(),
            perp_coord_std,
            decay: mix.tpt.decay_pow(t)?,
            mean_perp: mix.ood_mean_perp.clone(),
        })
    }

    fn draw(&self, rng: &mut ChaCha8Rng, out: &mut [f64]) {
        let d = self.means.nrows();
        let k = self.means.ncols();
        let r_perp = self.perp_basis.nrows();
        let z1 = DVector::from_fn(k, |_, _| rng.sample::<f64, _>(StandardNormal));
        let b = &self.l_b * z1;
        let in_span = &self.means * b;
        let mut x: DVector<f64> = &self.mean_perp * self.decay + in_span;
        for r in 0..r_perp {
            let z: f64 = rng.sample(StandardNormal);
            let coeff = self.decay * self.perp_coord_std * z;
            for i in 0..d {
                x[i] += coeff * self.perp_basis[(r, i)];
            }
        }
        out.copy_from_slice(x.as_slice());
    }
}

fn sample_chunked<F>(n: usize, d: usize, seed: u64, mode: ExecMode, draw: F) -> DMatrix<f64>
where
    F: Fn(&mut ChaCha8Rng, &mut [f64]) + Sync,
{
    let n_chunks = n.div_ceil(CHUNK);
    let chunks = map_indexed(n_chunks, mode, |c| {
        let start = c * CHUNK;
        let len = CHUNK.min(n - start);
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, c as u64));
        let mut buf = vec![0.0; len * d];
        for row in 0..len {
            draw(&mut rng, &mut buf[row * d..(row + 1) * d]);
        }
        buf
    });
    let mut flat = Vec::with_capacity(n * d);
    for chunk in chunks {
        flat.extend_from_slice(&chunk);
    }
    DMatrix::from_row_slice(n, d, &flat)
}

/// Draws `n` samples of the pure off-distribution law at time `t`.
/// Deterministic per seed; see [`sample_ood_with`] to pin the execution
/// mode (the output does not depend on it).
pub fn sample_ood(
    n: usize,
    etf: &SimplexEtf,
    mix: &MixtureParams,
    t: u64,
    seed: u64,
) -> Result<DMatrix<f64>, DynamicsError> {
    sample_ood_with(n, etf, mix, t, seed, ExecMode::default())
}

pub fn sample_ood_with(
    n: usize,
    etf: &SimplexEtf,
    mix: &MixtureParams,
    t: u64,
    seed: u64,
    mode: ExecMode,
) -> Result<DMatrix<f64>, DynamicsError> {
    let machine = OodMachine::new(etf, mix, t)?;
    Ok(sample_chunked(n, etf.dim(), seed, mode, |rng, out| {
        machine.draw(rng, out)
    }))
}

/// Draws `n` samples of the replay mixture
/// `pi * D_NC + (1 - pi) * D_OOD` at time `t`.
pub fn sample_mixture(
    n: usize,
    etf: &SimplexEtf,
    mix: &MixtureParams,
    t: u64,
    seed: u64,
) -> Result<DMatrix<f64>, DynamicsError> {
    sample_mixture_with(n, etf, mix, t, seed, ExecMode::default())
}

pub fn sample_mixture_with(
    n: usize,
    etf: &SimplexEtf,
    mix: &MixtureParams,
    t: u64,
    seed: u64,
    mode: ExecMode,
) -> Result<DMatrix<f64>, DynamicsError> {
    let machine = OodMachine::new(etf, mix, t)?;
    let d = etf.dim();
    let delta_t = mix.tpt.delta_at(t)?;
    let nc_coord_std = (delta_t / d as f64).sqrt();
    let pi = mix.pi;
    let nc_mean = mix.nc_mean.clone();
    Ok(sample_chunked(n, d, seed, mode, move |rng, out| {
        let u: f64 = rng.random();
        if u < pi {
            for (i, slot) in out.iter_mut().enumerate() {
                let z: f64 = rng.sample(StandardNormal);
                *slot = nc_mean[i] + nc_coord_std * z;
            }
        } else {
            machine.draw(rng, out);
        }
    }))
}

/// Predicted in-distribution SNR without replay:
/// `(beta_t / upsilon^(2 dt) + 1)^-1`, computed as
/// `upsilon^(2 dt) / (beta_t + upsilon^(2 dt))`.
pub fn predicted_snr_ood(tpt: &TptParams, t: u64) -> Result<f64, DynamicsError> {
    let beta = tpt.beta_at(t)?;
    let v2 = tpt.decay_pow(t)?.powi(2);
    if beta == 0.0 {
        return Ok(1.0);
    }
    Ok(v2 / (beta + v2))
}

/// Predicted SNR under replay with pooled buffer mass `pi1 + pi2`:
///
/// ```text
/// r^2 = (pi1+pi2)^2 / (1-(pi1+pi2))^2
/// snr = (r^2 beta + upsilon^(2 dt)) / (r^2 delta + beta + upsilon^(2 dt))
/// ```
///
/// At `pi1 + pi2 >= 1` the expression degenerates to its full-replay limit
/// `beta / delta`.
pub fn predicted_snr_replay(
    pi1: f64,
    pi2: f64,
    beta: f64,
    delta: f64,
    tpt: &TptParams,
    t: u64,
) -> Result<f64, DynamicsError> {
    for pi in [pi1, pi2] {
        if !(pi.is_finite() && (0.0..=1.0).contains(&pi)) {
            return Err(DynamicsError::BadPi(pi));
        }
    }
    if !(beta.is_finite() && beta >= 0.0) {
        return Err(DynamicsError::BadVariance(beta));
    }
    if !(delta.is_finite() && delta >= 0.0) {
        return Err(DynamicsError::BadVariance(delta));
    }
    let s = pi1 + pi2;
    if s >= 1.0 {
        if delta > 0.0 {
            return Ok(beta / delta);
        }
        if beta > 0.0 {
            return Ok(f64::INFINITY);
        }
        return Err(DynamicsError::UndefinedLimit);
    }
    let r2 = (s / (1.0 - s)).powi(2);
    let v2 = tpt.decay_pow(t)?.powi(2);
    let num = r2 * beta + v2;
    let den = r2 * delta + beta + v2;
    if den == 0.0 {
        return Err(DynamicsError::ZeroDenominator);
    }
    Ok(num / den)
}

/// Root-mean-square error bound for a buffer mean of `b` samples drawn
/// from a distribution with covariance trace `sigma_trace`:
/// `sqrt(sigma_trace / b)`. The bound is tight in expectation.
pub fn buffer_mean_error_bound(sigma_trace: f64, b: usize) -> Result<f64, DynamicsError> {
    if b == 0 {
        return Err(DynamicsError::EmptyBuffer);
    }
    if !(sigma_trace.is_finite() && sigma_trace >= 0.0) {
        return Err(DynamicsError::BadVariance(sigma_trace));
    }
    Ok((sigma_trace / b as f64).sqrt())
}

//! Linear separability: probes, discriminant counterfactuals, and a
//! brute-force oracle.
//!
//! Everything here answers one question about a feature cloud: how much of
//! the class structure is recoverable by a linear readout? Three readouts
//! with different epistemics:
//!
//! - [`train_probe`]: multinomial logistic regression fit by full-batch
//!   gradient descent with Armijo backtracking. What a *retrained* linear
//!   classifier can do.
//! - [`lda`]: closed-form Gaussian discriminant `w_c = Sigma^-1 mu_c`,
//!   `b_c = -1/2 mu_c^T Sigma^-1 mu_c`, with the class means and the shared
//!   covariance each taken from ground-truth population statistics, from
//!   observed (buffer) statistics, or replaced by the identity. The
//!   combinations separate "the means degraded" from "the covariance
//!   degraded".
//! - [`brute_force_linear`]: deterministic angular grid search over unit
//!   directions with an exact threshold sweep, for binary problems in at
//!   most three dimensions. An accuracy ceiling no linear readout can beat
//!   by more than the grid error.
//!
//! Ties in prediction always go to the lowest class id.

use std::f64::consts::PI;

use nalgebra::{Cholesky, DMatrix, DVector};
use thiserror::Error;

use crate::exec::{map_indexed, ExecMode};
use crate::stats::{ClassStats, LabeledFeatures, StatsError};

/// Hard cap on oracle instance size; the grid sweep is quadratic-ish and
/// meant for small certified instances only.
pub const ORACLE_MAX_SAMPLES: usize = 10_000;

#[derive(Debug, Error)]
pub enum SeparabilityError {
    #[error("no data")]
    Empty,
    #[error("classifier shape mismatch: {what}")]
    Shape { what: &'static str },
    #[error("class list must be strictly increasing")]
    UnsortedClasses,
    #[error("dimension mismatch: got {got}, expected {expected}")]
    DimensionMismatch { got: usize, expected: usize },
    #[error("sample labeled {0} which the classifier does not know")]
    UnknownClass(usize),
    #[error("binary method got {0} classes")]
    NotBinary(usize),
    #[error("class {class_id} has {count} samples; need at least 2 for a covariance")]
    DegenerateGroup { class_id: usize, count: usize },
    #[error("class {0} appears in more than one group; pool tasks before discriminant analysis")]
    DuplicateClass(usize),
    #[error("{which} statistics required by the requested sources but not provided")]
    MissingSource { which: &'static str },
    #[error("mean and covariance statistics carry different class sets")]
    ClassSetMismatch,
    #[error("pooled covariance is singular; pass ridge > 0 to regularize (got ridge = {0})")]
    SingularCovariance(f64),
    #[error("grid oracle supports at most 3 dimensions, got {0}")]
    Unsupported(usize),
    #[error("oracle instance too large: {n} samples, max {max}")]
    TooLarge { n: usize, max: usize },
    #[error("{which} must be positive and finite, got {value}")]
    BadOption { which: &'static str, value: f64 },
    #[error(transparent)]
    Stats(#[from] StatsError),
}

/// Where a linear classifier came from; carried through result tables so
/// downstream comparisons stay legible.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Provenance {
    Probe,
    Lda,
    Oracle,
    Head,
}

/// Affine multi-class scorer: predicts `argmax_c (W x + b)_c`, with ties
/// resolved toward the lowest class id.
#[derive(Debug, Clone)]
pub struct LinearClassifier {
    weights: DMatrix<f64>, // C x d
    biases: DVector<f64>,  // C
    classes: Vec<usize>,   // strictly increasing, row i scores classes[i]
    provenance: Provenance,
}

impl LinearClassifier {
    pub fn new(
        weights: DMatrix<f64>,
        biases: DVector<f64>,
        classes: Vec<usize>,
        provenance: Provenance,
    ) -> Result<Self, SeparabilityError> {
        if weights.nrows() == 0 || weights.ncols() == 0 {
            return Err(SeparabilityError::Empty);
        }
        if biases.len() != weights.nrows() {
            return Err(SeparabilityError::Shape {
                what: "bias count differs from weight rows",
            });
        }
        if classes.len() != weights.nrows() {
            return Err(SeparabilityError::Shape {
                what: "class count differs from weight rows",
            });
        }
        if !classes.windows(2).all(|w| w[0] < w[1]) {
            return Err(SeparabilityError::UnsortedClasses);
        }
        Ok(LinearClassifier {
            weights,
            biases,
            classes,
            provenance,
        })
    }

    pub fn weights(&self) -> &DMatrix<f64> {
        &self.weights
    }

    pub fn biases(&self) -> &DVector<f64> {
        &self.biases
    }

    pub fn classes(&self) -> &[usize] {
        &self.classes
    }

    pub fn provenance(&self) -> Provenance {
        self.provenance
    }

    pub fn dim(&self) -> usize {
        self.weights.ncols()
    }

    pub fn scores(&self, x: &DVector<f64>) -> Result<DVector<f64>, SeparabilityError> {
        if x.len() != self.dim() {
            return Err(SeparabilityError::DimensionMismatch {
                got: x.len(),
                expected: self.dim(),
            });
        }
        Ok(&self.weights * x + &self.biases)
    }

    pub fn predict(&self, x: &DVector<f64>) -> Result<usize, SeparabilityError> {
        let scores = self.scores(x)?;
        let mut best = 0;
        for i in 1..scores.len() {
            if scores[i] > scores[best] {
                best = i;
            }
        }
        Ok(self.classes[best])
    }

    /// Fraction of samples whose predicted class matches the label.
    /// Labels outside the classifier's class set count as errors.
    pub fn accuracy(&self, data: &LabeledFeatures) -> Result<f64, SeparabilityError> {
        if data.is_empty() {
            return Err(SeparabilityError::Empty);
        }
        if data.dim() != self.dim() {
            return Err(SeparabilityError::DimensionMismatch {
                got: data.dim(),
                expected: self.dim(),
            });
        }
        // scores for all rows at once: n x C
        let scores = data.features() * self.weights.transpose();
        let mut correct = 0usize;
        for i in 0..data.len() {
            let mut best = 0;
            let mut best_score = scores[(i, 0)] + self.biases[0];
            for c in 1..self.classes.len() {
                let s = scores[(i, c)] + self.biases[c];
                if s > best_score {
                    best = c;
                    best_score = s;
                }
            }
            if self.classes[best] == data.class_ids()[i] {
                correct += 1;
            }
        }
        Ok(correct as f64 / data.len() as f64)
    }
}

/// Accuracy of `clf` on `data`; thin named wrapper over
/// [`LinearClassifier::accuracy`].
pub fn evaluate(clf: &LinearClassifier, data: &LabeledFeatures) -> Result<f64, SeparabilityError> {
    clf.accuracy(data)
}

/// Probe fitting knobs. `c` is the inverse regularization strength: the
/// objective is mean cross-entropy plus `||W||_F^2 / (2 c n)`, biases
/// unpenalized.
#[derive(Debug, Clone)]
pub struct ProbeOptions {
    pub c: f64,
    pub tol: f64,
    pub max_iter: usize,
}

impl Default for ProbeOptions {
    fn default() -> Self {
        ProbeOptions {
            c: 100.0,
            tol: 1e-6,
            max_iter: 10_000,
        }
    }
}

#[derive(Debug, Clone)]
pub struct ProbeReport {
    pub classifier: LinearClassifier,
    pub iterations: usize,
    pub converged: bool,
    pub final_loss: f64,
    pub grad_sup_norm: f64,
}

struct ProbeProblem<'a> {
    x: &'a DMatrix<f64>,
    y: Vec<usize>, // row -> class index
    n_classes: usize,
    reg: f64, // 1 / (c n)
}

impl ProbeProblem<'_> {
    fn loss(&self, w: &DMatrix<f64>, b: &DVector<f64>) -> f64 {
        let n = self.x.nrows();
        let mut logits = self.x * w.transpose();
        for i in 0..n {
            for c in 0..self.n_classes {
                logits[(i, c)] += b[c];
            }
        }
        let mut loss = 0.0;
        for i in 0..n {
            let row = logits.row(i);
            let m = row.max();
            let lse = m + row.iter().map(|&v| (v - m).exp()).sum::<f64>().ln();
            loss += lse - row[self.y[i]];
        }
        loss / n as f64 + 0.5 * self.reg * w.norm_squared()
    }

    fn loss_grad(&self, w: &DMatrix<f64>, b: &DVector<f64>) -> (f64, DMatrix<f64>, DVector<f64>) {
        let n = self.x.nrows();
        let mut logits = self.x * w.transpose();
        for i in 0..n {
            for c in 0..self.n_classes {
                logits[(i, c)] += b[c];
            }
        }
        let mut loss = 0.0;
        // logits becomes (P - Y) in place
        for i in 0..n {
            let row = logits.row(i);
            let m = row.max();
            let lse = m + row.iter().map(|&v| (v - m).exp()).sum::<f64>().ln();
            loss += lse - row[self.y[i]];
            for c in 0..self.n_classes {
                logits[(i, c)] = (logits[(i, c)] - lse).exp();
            }
            logits[(i, self.y[i])] -= 1.0;
        }
        loss = loss / n as f64 + 0.5 * self.reg * w.norm_squared();
        let mut grad_w = logits.transpose() * self.x / n as f64;
        grad_w += w * self.reg;
        let grad_b = logits.row_sum().transpose() / n as f64;
        (loss, grad_w, grad_b)
    }
}

/// Fits a multinomial logistic probe on the given features. Deterministic
/// (zero init, no randomness). Classes are the sorted distinct labels in
/// the data; a single-class probe converges immediately at zero weights.
pub fn train_probe(
    data: &LabeledFeatures,
    opts: &ProbeOptions,
) -> Result<ProbeReport, SeparabilityError> {
    if data.is_empty() {
        return Err(SeparabilityError::Empty);
    }
    for (which, value) in [("c", opts.c), ("tol", opts.tol)] {
        if !(value.is_finite() && value > 0.0) {
            return Err(SeparabilityError::BadOption { which, value });
        }
    }
    if opts.max_iter == 0 {
        return Err(SeparabilityError::BadOption {
            which: "max_iter",
            value: 0.0,
        });
    }
    let mut classes: Vec<usize> = data.class_ids().to_vec();
    classes.sort_unstable();
    classes.dedup();
    let index_of = |class: usize| classes.binary_search(&class).unwrap();
    let y: Vec<usize> = data.class_ids().iter().map(|&c| index_of(c)).collect();
    let n = data.len();
    let d = data.dim();
    let n_classes = classes.len();
    let problem = ProbeProblem {
        x: data.features(),
        y,
        n_classes,
        reg: 1.0 / (opts.c * n as f64),
    };

    let mut w = DMatrix::zeros(n_classes, d);
    let mut b = DVector::zeros(n_classes);
    let (mut loss, mut grad_w, mut grad_b) = problem.loss_grad(&w, &b);
    let mut step = 1.0_f64;
    let mut iterations = 0;
    let mut converged = false;
    for _ in 0..opts.max_iter {
        let sup = grad_w
            .iter()
            .chain(grad_b.iter())
            .fold(0.0f64, |m, &g| m.max(g.abs()));
        if sup < opts.tol {
            converged = true;
            break;
        }
        let g2 = grad_w.norm_squared() + grad_b.norm_squared();
        step = (step * 2.0).min(1e6);
        let mut accepted = false;
        while step >= 1e-18 {
            let cand_w = &w - &grad_w * step;
            let cand_b = &b - &grad_b * step;
            let cand_loss = problem.loss(&cand_w, &cand_b);
            if cand_loss <= loss - 1e-4 * step * g2 {
                w = cand_w;
                b = cand_b;
                let refreshed = problem.loss_grad(&w, &b);
                loss = refreshed.0;
                grad_w = refreshed.1;
                grad_b = refreshed.2;
                accepted = true;
                break;
            }
            step *= 0.5;
        }
        iterations += 1;
        if !accepted {
            break; // line search exhausted at numeric floor
        }
    }
    if !converged {
        let sup = grad_w
            .iter()
            .chain(grad_b.iter())
            .fold(0.0f64, |m, &g| m.max(g.abs()));
        converged = sup < opts.tol;
    }
    let grad_sup_norm = grad_w
        .iter()
        .chain(grad_b.iter())
        .fold(0.0f64, |m, &g| m.max(g.abs()));
    Ok(ProbeReport {
        classifier: LinearClassifier::new(w, b, classes, Provenance::Probe)?,
        iterations,
        converged,
        final_loss: loss,
        grad_sup_norm,
    })
}

/// Which statistics supply the per-class means: the ground-truth population
/// moments or the observed (buffer) moments.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MeanSource {
    Population,
    Observed,
}

/// Which statistics supply the shared covariance: pooled over the
/// population groups, pooled over the observed groups, or the identity.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CovSource {
    PooledPopulation,
    PooledObserved,
    Identity,
}

/// Pooled within-class covariance, count-weighted and unbiased:
/// `sum_c (n_c - 1) S_c / (sum_c n_c - K)`. Every group needs at least
/// two samples.
pub fn pooled_covariance(stats: &ClassStats) -> Result<DMatrix<f64>, SeparabilityError> {
    let d = stats.dim();
    let mut pooled = DMatrix::zeros(d, d);
    let mut dof = 0.0;
    for g in stats.groups() {
        if g.count < 2 {
            return Err(SeparabilityError::DegenerateGroup {
                class_id: g.class_id,
                count: g.count,
            });
        }
        let w = (g.count - 1) as f64;
        pooled += &g.cov * w;
        dof += w;
    }
    Ok(pooled / dof)
}

fn checked_classes(stats: &ClassStats) -> Result<Vec<usize>, SeparabilityError> {
    let groups = stats.groups();
    if groups.len() < 2 {
        return Err(SeparabilityError::NotBinary(groups.len()));
    }
    let mut classes = Vec::with_capacity(groups.len());
    for g in groups {
        if classes.contains(&g.class_id) {
            return Err(SeparabilityError::DuplicateClass(g.class_id));
        }
        classes.push(g.class_id);
    }
    if !classes.windows(2).all(|w| w[0] < w[1]) {
        return Err(SeparabilityError::UnsortedClasses);
    }
    Ok(classes)
}

/// Gaussian discriminant with independently chosen mean and covariance
/// sources. Discriminant `delta_c(x) = mu_c^T Sigma^-1 x - 1/2 mu_c^T
/// Sigma^-1 mu_c`; maximizing it is minimizing the squared Mahalanobis
/// distance to the class mean. `Sigma` is the pooled covariance of the
/// chosen source plus `ridge * I`, or exactly `I` for the identity source.
///
/// Only the statistics a source actually uses need to be provided; a
/// combination that draws means and covariance from different sources
/// requires both to cover the same class set.
pub fn lda(
    mean_source: MeanSource,
    cov_source: CovSource,
    stats_pop: Option<&ClassStats>,
    stats_obs: Option<&ClassStats>,
    ridge: f64,
) -> Result<LinearClassifier, SeparabilityError> {
    if !(ridge.is_finite() && ridge >= 0.0) {
        return Err(SeparabilityError::BadOption {
            which: "ridge",
            value: ridge,
        });
    }
    fn need<'a>(
        which: &'static str,
        s: Option<&'a ClassStats>,
    ) -> Result<&'a ClassStats, SeparabilityError> {
        s.ok_or(SeparabilityError::MissingSource { which })
    }
    let mean_stats = match mean_source {
        MeanSource::Population => need("population", stats_pop)?,
        MeanSource::Observed => need("observed", stats_obs)?,
    };
    let cov_stats = match cov_source {
        CovSource::PooledPopulation => Some(need("population", stats_pop)?),
        CovSource::PooledObserved => Some(need("observed", stats_obs)?),
        CovSource::Identity => None,
    };
    let classes = checked_classes(mean_stats)?;
    if let Some(cs) = cov_stats {
        if cs.dim() != mean_stats.dim() {
            return Err(SeparabilityError::DimensionMismatch {
                got: cs.dim(),
                expected: mean_stats.dim(),
            });
        }
        if !std::ptr::eq(cs, mean_stats) && checked_classes(cs)? != classes {
            return Err(SeparabilityError::ClassSetMismatch);
        }
    }
    let d = mean_stats.dim();
    let k = classes.len();
    let groups = mean_stats.groups();
    // d x K matrix of class means
    let means = DMatrix::from_fn(d, k, |i, j| groups[j].mean[i]);

    let solved = match cov_stats {
        None => means.clone(), // Sigma = I
        Some(cs) => {
            let regularized = pooled_covariance(cs)? + DMatrix::identity(d, d) * ridge;
            let chol = Cholesky::new(regularized)
                .ok_or(SeparabilityError::SingularCovariance(ridge))?;
            chol.solve(&means) // Sigma^-1 M, d x K
        }
    };
    let weights = solved.transpose(); // K x d
    let biases = DVector::from_fn(k, |j, _| -0.5 * means.column(j).dot(&solved.column(j)));
    LinearClassifier::new(weights, biases, classes, Provenance::Lda)
}

/// Outcome of the grid oracle: the certified best accuracy and the
/// classifier that achieves it.
#[derive(Debug, Clone)]
pub struct OracleResult {
    pub accuracy: f64,
    pub classifier: LinearClassifier,
}

struct SweepOutcome {
    accuracy: f64,
    threshold: f64,
    hi_is_second: bool, // does the class with the larger id sit above the threshold
}

/// Best threshold along one direction, scanning all n+1 split points of the
/// sorted projections and both label orientations. Thresholds sit at
/// midpoints so no sample lies on the boundary.
fn sweep_direction(proj: &[f64], is_second: &[bool]) -> SweepOutcome {
    let n = proj.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| proj[a].total_cmp(&proj[b]));
    let total_second: usize = is_second.iter().filter(|&&s| s).count();
    let total_first = n - total_second;

    let mut best = SweepOutcome {
        accuracy: -1.0,
        threshold: 0.0,
        hi_is_second: true,
    };
    let mut seconds_below = 0usize; // count of second-class samples among first k
    for k in 0..=n {
        if k > 0 {
            if is_second[order[k - 1]] {
                seconds_below += 1;
            }
            // a threshold must fall strictly between distinct projections
            if k < n && proj[order[k - 1]] == proj[order[k]] {
                continue;
            }
        }
        let firsts_below = k - seconds_below;
        let threshold = if k == 0 {
            proj[order[0]] - 1.0
        } else if k == n {
            proj[order[n - 1]] + 1.0
        } else {
            0.5 * (proj[order[k - 1]] + proj[order[k]])
        };
        // orientation A: second class above the threshold
        let correct_a = firsts_below + (total_second - seconds_below);
        // orientation B: first class above the threshold
        let correct_b = seconds_below + (total_first - firsts_below);
        for (correct, hi_is_second) in [(correct_a, true), (correct_b, false)] {
            let acc = correct as f64 / n as f64;
            if acc > best.accuracy {
                best = SweepOutcome {
                    accuracy: acc,
                    threshold,
                    hi_is_second,
                };
            }
        }
    }
    best
}

/// The direction grid: every unit direction spanned by `resolution` steps
/// per angle. One angle in 2D (half circle: lines are undirected), two in
/// 3D (hemisphere), none in 1D.
fn grid_directions(d: usize, resolution: usize) -> Vec<DVector<f64>> {
    match d {
        1 => vec![DVector::from_vec(vec![1.0])],
        2 => (0..resolution)
            .map(|i| {
                let theta = PI * i as f64 / resolution as f64;
                DVector::from_vec(vec![theta.cos(), theta.sin()])
            })
            .collect(),
        3 => {
            let mut dirs = Vec::with_capacity(resolution * resolution);
            for i in 0..resolution {
                let theta = PI * i as f64 / resolution as f64; // polar
                for j in 0..resolution {
                    let phi = PI * j as f64 / resolution as f64; // azimuth, half turn
                    dirs.push(DVector::from_vec(vec![
                        theta.sin() * phi.cos(),
                        theta.sin() * phi.sin(),
                        theta.cos(),
                    ]));
                }
            }
            dirs
        }
        _ => unreachable!("dimension checked by caller"),
    }
}

/// Deterministic brute-force linear oracle for small binary instances:
/// sweeps every direction of an angular grid (`angular_resolution` steps
/// per angle, so `R` directions in 2D and `R^2` in 3D) and finds the exact
/// optimal threshold per direction by a sorted scan over both label
/// orientations. The returned accuracy is within grid error of the true
/// linear optimum and never below any linear classifier evaluated on the
/// same data minus that error.
pub fn brute_force_linear(
    data: &LabeledFeatures,
    angular_resolution: usize,
) -> Result<OracleResult, SeparabilityError> {
    brute_force_linear_with(data, angular_resolution, ExecMode::default())
}

pub fn brute_force_linear_with(
    data: &LabeledFeatures,
    angular_resolution: usize,
    mode: ExecMode,
) -> Result<OracleResult, SeparabilityError> {
    if data.is_empty() {
        return Err(SeparabilityError::Empty);
    }
    if angular_resolution == 0 {
        return Err(SeparabilityError::BadOption {
            which: "angular_resolution",
            value: 0.0,
        });
    }
    let d = data.dim();
    if d > 3 || d == 0 {
        return Err(SeparabilityError::Unsupported(d));
    }
    let n = data.len();
    if n > ORACLE_MAX_SAMPLES {
        return Err(SeparabilityError::TooLarge {
            n,
            max: ORACLE_MAX_SAMPLES,
        });
    }
    let mut classes: Vec<usize> = data.class_ids().to_vec();
    classes.sort_unstable();
    classes.dedup();
    if classes.len() != 2 {
        return Err(SeparabilityError::NotBinary(classes.len()));
    }
    let is_second: Vec<bool> = data.class_ids().iter().map(|&c| c == classes[1]).collect();

    let dirs = grid_directions(d, angular_resolution);
    let outcomes = map_indexed(dirs.len(), mode, |i| {
        let w = &dirs[i];
        let proj: Vec<f64> = (0..n)
            .map(|r| data.features().row(r).transpose().dot(w))
            .collect();
        sweep_direction(&proj, &is_second)
    });
    // first strict maximum: deterministic and mode-invariant
    let mut best_idx = 0;
    for i in 1..outcomes.len() {
        if outcomes[i].accuracy > outcomes[best_idx].accuracy {
            best_idx = i;
        }
    }
    let best = &outcomes[best_idx];
    let best_dir = &dirs[best_idx];

    // Encode direction + threshold as a two-row affine scorer. The zero row
    // belongs to the class on the low side; ties on the boundary fall to
    // the lower class id, consistent with predict().
    let mut weights = DMatrix::zeros(2, d);
    let mut biases = DVector::zeros(2);
    let hi_row = if best.hi_is_second { 1 } else { 0 };
    for j in 0..d {
        weights[(hi_row, j)] = best_dir[j];
    }
    biases[hi_row] = -best.threshold;
    let classifier = LinearClassifier::new(weights, biases, classes, Provenance::Oracle)?;
    Ok(OracleResult {
        accuracy: best.accuracy,
        classifier,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::stats::{class_stats, std_normal_cdf, GroupBy, GroupMoments, Split};
    use approx::assert_abs_diff_eq;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    fn blobs(centers: &[(f64, f64)], n_per: usize, noise: f64, seed: u64) -> LabeledFeatures {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = centers.len() * n_per;
        let mut feats = DMatrix::zeros(n, 2);
        let mut labels = Vec::with_capacity(n);
        let mut row = 0;
        for (c, &(cx, cy)) in centers.iter().enumerate() {
            for _ in 0..n_per {
                feats[(row, 0)] = cx + noise * rng.sample::<f64, _>(StandardNormal);
                feats[(row, 1)] = cy + noise * rng.sample::<f64, _>(StandardNormal);
                labels.push(c);
                row += 1;
            }
        }
        LabeledFeatures::new(feats, labels, vec![0; n], vec![Split::Train; n]).unwrap()
    }

    fn xor_data() -> LabeledFeatures {
        let feats = DMatrix::from_row_slice(4, 2, &[0.0, 0.0, 1.0, 1.0, 0.0, 1.0, 1.0, 0.0]);
        LabeledFeatures::new(feats, vec![0, 0, 1, 1], vec![0; 4], vec![Split::Train; 4]).unwrap()
    }

    fn population_moments(means: &[Vec<f64>], cov: &DMatrix<f64>, count: usize) -> ClassStats {
        let groups = means
            .iter()
            .enumerate()
            .map(|(c, m)| GroupMoments {
                class_id: c,
                task_id: None,
                count,
                mean: DVector::from_vec(m.clone()),
                cov: cov.clone(),
                degenerate: false,
            })
            .collect();
        ClassStats::from_moments(groups).unwrap()
    }

    #[test]
    fn probe_separates_clean_blobs() {
        let data = blobs(&[(-4.0, 0.0), (4.0, 0.0), (0.0, 4.0)], 60, 0.3, 1);
        let report = train_probe(&data, &ProbeOptions::default()).unwrap();
        assert!(report.converged, "probe did not converge");
        assert_abs_diff_eq!(report.classifier.accuracy(&data).unwrap(), 1.0);
        assert_eq!(report.classifier.classes(), &[0, 1, 2]);
    }

    #[test]
    fn probe_gradient_matches_finite_differences() {
        let data = blobs(&[(-1.0, 0.5), (0.7, -0.2), (0.1, 1.1)], 4, 0.8, 9);
        let classes = vec![0, 1, 2];
        let y: Vec<usize> = data.class_ids().to_vec();
        let problem = ProbeProblem {
            x: data.features(),
            y,
            n_classes: classes.len(),
            reg: 1.0 / (5.0 * data.len() as f64),
        };
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let w = DMatrix::from_fn(3, 2, |_, _| rng.sample::<f64, _>(StandardNormal) * 0.4);
        let b = DVector::from_fn(3, |_, _| rng.sample::<f64, _>(StandardNormal) * 0.4);
        let (_, grad_w, grad_b) = problem.loss_grad(&w, &b);
        let eps = 1e-6;
        for i in 0..3 {
            for j in 0..2 {
                let mut wp = w.clone();
                let mut wm = w.clone();
                wp[(i, j)] += eps;
                wm[(i, j)] -= eps;
                let fd = (problem.loss(&wp, &b) - problem.loss(&wm, &b)) / (2.0 * eps);
                assert_abs_diff_eq!(grad_w[(i, j)], fd, epsilon = 1e-6);
            }
            let mut bp = b.clone();
            let mut bm = b.clone();
            bp[i] += eps;
            bm[i] -= eps;
            let fd = (problem.loss(&w, &bp) - problem.loss(&w, &bm)) / (2.0 * eps);
            assert_abs_diff_eq!(grad_b[i], fd, epsilon = 1e-6);
        }
    }

    #[test]
    fn probe_single_class_is_trivially_perfect() {
        let data = blobs(&[(2.0, -1.0)], 10, 0.5, 4);
        let report = train_probe(&data, &ProbeOptions::default()).unwrap();
        assert!(report.converged);
        assert_eq!(report.iterations, 0);
        assert_abs_diff_eq!(report.classifier.accuracy(&data).unwrap(), 1.0);
    }

    #[test]
    fn weaker_regularization_grows_the_probe_weights() {
        let data = blobs(&[(-2.0, 0.0), (2.0, 0.0)], 40, 0.5, 7);
        let tight = train_probe(
            &data,
            &ProbeOptions {
                c: 0.1,
                ..Default::default()
            },
        )
        .unwrap();
        let loose = train_probe(
            &data,
            &ProbeOptions {
                c: 1000.0,
                ..Default::default()
            },
        )
        .unwrap();
        assert!(
            loose.classifier.weights().norm() > tight.classifier.weights().norm() * 2.0,
            "regularization had no visible effect"
        );
    }

    #[test]
    fn probe_rejects_bad_options() {
        let data = blobs(&[(0.0, 0.0), (1.0, 1.0)], 3, 0.1, 0);
        assert!(train_probe(
            &data,
            &ProbeOptions {
                c: 0.0,
                ..Default::default()
            }
        )
        .is_err());
        assert!(train_probe(
            &data,
            &ProbeOptions {
                tol: -1.0,
                ..Default::default()
            }
        )
        .is_err());
        assert!(train_probe(
            &data,
            &ProbeOptions {
                max_iter: 0,
                ..Default::default()
            }
        )
        .is_err());
    }

    #[test]
    fn lda_recovers_the_bayes_direction() {
        // shared covariance diag(1, 4), means +-(2, 1)
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let n_per = 4000;
        let mut feats = DMatrix::zeros(2 * n_per, 2);
        let mut labels = Vec::new();
        for i in 0..2 * n_per {
            let sign = if i < n_per { -1.0 } else { 1.0 };
            feats[(i, 0)] = sign * 2.0 + rng.sample::<f64, _>(StandardNormal);
            feats[(i, 1)] = sign * 1.0 + 2.0 * rng.sample::<f64, _>(StandardNormal);
            labels.push(if i < n_per { 0 } else { 1 });
        }
        let data = LabeledFeatures::new(
            feats,
            labels,
            vec![0; 2 * n_per],
            vec![Split::Train; 2 * n_per],
        )
        .unwrap();
        let stats = class_stats(&data, GroupBy::Class).unwrap();
        let clf = lda(
            MeanSource::Observed,
            CovSource::PooledObserved,
            None,
            Some(&stats),
            0.0,
        )
        .unwrap();
        // Bayes direction Sigma^-1 (mu1 - mu0) = (4, 0.5)
        let w_diff = (clf.weights().row(1) - clf.weights().row(0)).transpose();
        let cos =
            w_diff.dot(&DVector::from_vec(vec![4.0, 0.5])) / (w_diff.norm() * 4.031128874f64);
        assert!(cos > 0.999, "direction cosine {cos}");
        assert!(clf.accuracy(&data).unwrap() > 0.95);
    }

    #[test]
    fn population_lda_hits_the_bayes_accuracy() {
        // shared covariance diag(1, 4), means -+(1, 1):
        // d_M^2 = (2,2) Sigma^-1 (2,2)^T = 4 + 1 = 5
        let cov = DMatrix::from_diagonal(&DVector::from_vec(vec![1.0, 4.0]));
        let stats = population_moments(
            &[vec![-1.0, -1.0], vec![1.0, 1.0]],
            &cov,
            10_000,
        );
        let clf = lda(
            MeanSource::Population,
            CovSource::PooledPopulation,
            Some(&stats),
            None,
            0.0,
        )
        .unwrap();
        let n_per = 50_000;
        let mut rng = ChaCha8Rng::seed_from_u64(20);
        let mut feats = DMatrix::zeros(2 * n_per, 2);
        let mut labels = Vec::with_capacity(2 * n_per);
        for i in 0..2 * n_per {
            let sign = if i < n_per { -1.0 } else { 1.0 };
            feats[(i, 0)] = sign + rng.sample::<f64, _>(StandardNormal);
            feats[(i, 1)] = sign + 2.0 * rng.sample::<f64, _>(StandardNormal);
            labels.push(if i < n_per { 0 } else { 1 });
        }
        let data = LabeledFeatures::new(
            feats,
            labels,
            vec![0; 2 * n_per],
            vec![Split::Train; 2 * n_per],
        )
        .unwrap();
        let bayes = std_normal_cdf(5.0f64.sqrt() / 2.0);
        let acc = clf.accuracy(&data).unwrap();
        assert!(
            (acc - bayes).abs() < 0.01,
            "accuracy {acc} vs closed form {bayes}"
        );
    }

    #[test]
    fn identity_population_lda_is_nearest_class_mean() {
        let cov = DMatrix::identity(2, 2);
        let stats = population_moments(&[vec![0.0, 0.0], vec![3.0, 1.0]], &cov, 100);
        let clf = lda(MeanSource::Population, CovSource::Identity, Some(&stats), None, 0.0)
            .unwrap();
        let cases = [
            (vec![0.2, -0.1], 0usize),
            (vec![2.9, 1.3], 1),
            (vec![1.4, 0.6], 0), // closer to the origin mean
        ];
        for (x, want) in cases {
            let x = DVector::from_vec(x);
            let nearest = if (&x - DVector::from_vec(vec![0.0, 0.0])).norm_squared()
                <= (&x - DVector::from_vec(vec![3.0, 1.0])).norm_squared()
            {
                0
            } else {
                1
            };
            assert_eq!(nearest, want);
            assert_eq!(clf.predict(&x).unwrap(), want);
        }
        // equidistant point: tie resolves to the lowest class id
        let mid = DVector::from_vec(vec![1.5, 0.5]);
        assert_eq!(clf.predict(&mid).unwrap(), 0);
    }

    #[test]
    fn identical_sources_make_all_variants_coincide() {
        let data = blobs(&[(-1.5, 0.2), (1.0, -0.8)], 200, 0.7, 31);
        let stats = class_stats(&data, GroupBy::Class).unwrap();
        // observed == population: the pooled pair and the identity pair
        // must produce the same classifiers
        let full_pop = lda(
            MeanSource::Population,
            CovSource::PooledPopulation,
            Some(&stats),
            Some(&stats),
            1e-9,
        )
        .unwrap();
        let full_obs = lda(
            MeanSource::Observed,
            CovSource::PooledObserved,
            Some(&stats),
            Some(&stats),
            1e-9,
        )
        .unwrap();
        assert_eq!(full_pop.weights(), full_obs.weights());
        assert_eq!(full_pop.biases(), full_obs.biases());
        let id_pop = lda(
            MeanSource::Population,
            CovSource::Identity,
            Some(&stats),
            Some(&stats),
            0.0,
        )
        .unwrap();
        let id_obs = lda(
            MeanSource::Observed,
            CovSource::Identity,
            Some(&stats),
            Some(&stats),
            0.0,
        )
        .unwrap();
        assert_eq!(id_pop.weights(), id_obs.weights());
        assert_eq!(id_pop.biases(), id_obs.biases());
    }

    #[test]
    fn identity_counterfactual_loses_accuracy_on_anisotropic_data() {
        // discriminative axis has low variance, nuisance axis high variance
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let n_per = 3000;
        let mut feats = DMatrix::zeros(2 * n_per, 2);
        let mut labels = Vec::new();
        for i in 0..2 * n_per {
            let sign = if i < n_per { -1.0 } else { 1.0 };
            feats[(i, 0)] = sign * 0.8 + 0.5 * rng.sample::<f64, _>(StandardNormal);
            feats[(i, 1)] = sign * 1.0 + 5.0 * rng.sample::<f64, _>(StandardNormal);
            labels.push(if i < n_per { 0 } else { 1 });
        }
        let data = LabeledFeatures::new(
            feats,
            labels,
            vec![0; 2 * n_per],
            vec![Split::Train; 2 * n_per],
        )
        .unwrap();
        let stats = class_stats(&data, GroupBy::Class).unwrap();
        let full = lda(
            MeanSource::Observed,
            CovSource::PooledObserved,
            None,
            Some(&stats),
            0.0,
        )
        .unwrap();
        let iso = lda(MeanSource::Observed, CovSource::Identity, None, Some(&stats), 0.0)
            .unwrap();
        let acc_full = full.accuracy(&data).unwrap();
        let acc_iso = iso.accuracy(&data).unwrap();
        assert!(
            acc_full > acc_iso + 0.02,
            "whitening should matter here: {acc_full} vs {acc_iso}"
        );
    }

    #[test]
    fn lda_predictions_are_affine_invariant_with_zero_ridge() {
        let data = blobs(&[(-1.0, 0.5), (1.2, -0.3)], 120, 0.8, 41);
        let stats = class_stats(&data, GroupBy::Class).unwrap();
        let clf = lda(
            MeanSource::Observed,
            CovSource::PooledObserved,
            None,
            Some(&stats),
            0.0,
        )
        .unwrap();
        // x' = A x + t with invertible A
        let a = DMatrix::from_row_slice(2, 2, &[2.0, 1.0, 0.5, 3.0]);
        let t = DVector::from_vec(vec![1.0, -2.0]);
        let mut transformed = DMatrix::zeros(data.len(), 2);
        for i in 0..data.len() {
            let x = data.features().row(i).transpose();
            let y = &a * x + &t;
            transformed[(i, 0)] = y[0];
            transformed[(i, 1)] = y[1];
        }
        let tdata = LabeledFeatures::new(
            transformed,
            data.class_ids().to_vec(),
            data.task_ids().to_vec(),
            data.splits().to_vec(),
        )
        .unwrap();
        let tstats = class_stats(&tdata, GroupBy::Class).unwrap();
        let tclf = lda(
            MeanSource::Observed,
            CovSource::PooledObserved,
            None,
            Some(&tstats),
            0.0,
        )
        .unwrap();
        for i in 0..data.len() {
            let x = data.features().row(i).transpose();
            let y = tdata.features().row(i).transpose();
            assert_eq!(clf.predict(&x).unwrap(), tclf.predict(&y).unwrap());
        }
        assert_abs_diff_eq!(
            clf.accuracy(&data).unwrap(),
            tclf.accuracy(&tdata).unwrap()
        );
    }

    #[test]
    fn singular_covariance_demands_a_ridge() {
        // all samples on a line: pooled covariance has rank 1
        let feats = DMatrix::from_row_slice(
            8,
            2,
            &[
                0.0, 0.0, 1.0, 2.0, 0.5, 1.0, 1.5, 3.0, 4.0, 8.0, 5.0, 10.0, 4.5, 9.0, 5.5, 11.0,
            ],
        );
        let data = LabeledFeatures::new(
            feats,
            vec![0, 0, 0, 0, 1, 1, 1, 1],
            vec![0; 8],
            vec![Split::Train; 8],
        )
        .unwrap();
        let stats = class_stats(&data, GroupBy::Class).unwrap();
        let err = lda(
            MeanSource::Observed,
            CovSource::PooledObserved,
            None,
            Some(&stats),
            0.0,
        )
        .unwrap_err();
        match err {
            SeparabilityError::SingularCovariance(r) => {
                assert_eq!(r, 0.0);
                assert!(err.to_string().contains("ridge > 0"));
            }
            other => panic!("expected SingularCovariance, got {other:?}"),
        }
        // a positive ridge repairs it
        assert!(lda(
            MeanSource::Observed,
            CovSource::PooledObserved,
            None,
            Some(&stats),
            1e-3,
        )
        .is_ok());
    }

    #[test]
    fn lda_source_preconditions() {
        let data = blobs(&[(0.0, 0.0), (2.0, 0.0)], 10, 0.2, 3);
        let stats = class_stats(&data, GroupBy::Class).unwrap();
        assert!(matches!(
            lda(MeanSource::Population, CovSource::Identity, None, Some(&stats), 0.0),
            Err(SeparabilityError::MissingSource {
                which: "population"
            })
        ));
        assert!(matches!(
            lda(MeanSource::Observed, CovSource::PooledObserved, Some(&stats), None, 0.0),
            Err(SeparabilityError::MissingSource { which: "observed" })
        ));
        assert!(matches!(
            lda(MeanSource::Observed, CovSource::Identity, None, Some(&stats), f64::NAN),
            Err(SeparabilityError::BadOption { which: "ridge", .. })
        ));
        // crossed sources require matching class sets
        let other = {
            let feats = DMatrix::from_row_slice(4, 2, &[0.0, 0.0, 0.1, 0.0, 5.0, 5.0, 5.1, 5.0]);
            let d = LabeledFeatures::new(
                feats,
                vec![0, 0, 2, 2],
                vec![0; 4],
                vec![Split::Train; 4],
            )
            .unwrap();
            class_stats(&d, GroupBy::Class).unwrap()
        };
        assert!(matches!(
            lda(
                MeanSource::Population,
                CovSource::PooledObserved,
                Some(&stats),
                Some(&other),
                0.0
            ),
            Err(SeparabilityError::ClassSetMismatch)
        ));
    }

    #[test]
    fn lda_rejects_degenerate_and_ambiguous_groups() {
        let feats = DMatrix::from_row_slice(3, 2, &[0.0, 0.0, 1.0, 1.0, 2.0, 2.0]);
        let data = LabeledFeatures::new(
            feats,
            vec![0, 0, 1],
            vec![0; 3],
            vec![Split::Train; 3],
        )
        .unwrap();
        let stats = class_stats(&data, GroupBy::Class).unwrap();
        assert!(matches!(
            lda(MeanSource::Observed, CovSource::PooledObserved, None, Some(&stats), 0.0),
            Err(SeparabilityError::DegenerateGroup {
                class_id: 1,
                count: 1
            })
        ));
        // identity covariance needs no second moments: a singleton class is fine
        assert!(lda(MeanSource::Observed, CovSource::Identity, None, Some(&stats), 0.0).is_ok());

        let feats = DMatrix::from_row_slice(
            8,
            2,
            &[
                0.0, 0.0, 0.1, 0.0, 1.0, 1.0, 1.1, 1.0, 0.0, 0.2, 0.1, 0.2, 1.0, 1.2, 1.1, 1.2,
            ],
        );
        let data = LabeledFeatures::new(
            feats,
            vec![0, 0, 1, 1, 0, 0, 1, 1],
            vec![0, 0, 0, 0, 1, 1, 1, 1],
            vec![Split::Train; 8],
        )
        .unwrap();
        let by_task = class_stats(&data, GroupBy::ClassTask).unwrap();
        assert!(matches!(
            lda(MeanSource::Observed, CovSource::PooledObserved, None, Some(&by_task), 0.0),
            Err(SeparabilityError::DuplicateClass(0))
        ));
    }

    #[test]
    fn oracle_finds_the_xor_ceiling() {
        let data = xor_data();
        let res = brute_force_linear(&data, 8).unwrap();
        assert_abs_diff_eq!(res.accuracy, 0.75);
        assert_abs_diff_eq!(res.classifier.accuracy(&data).unwrap(), 0.75);
        // and the probe cannot beat the oracle
        let probe = train_probe(&data, &ProbeOptions::default()).unwrap();
        assert!(probe.classifier.accuracy(&data).unwrap() <= 0.75 + 1e-12);
    }

    #[test]
    fn oracle_saturates_on_separated_1d_classes() {
        let feats = DMatrix::from_row_slice(4, 1, &[-3.0, -2.0, 2.0, 3.0]);
        let data = LabeledFeatures::new(
            feats,
            vec![0, 0, 1, 1],
            vec![0; 4],
            vec![Split::Train; 4],
        )
        .unwrap();
        let res = brute_force_linear(&data, 1).unwrap();
        assert_abs_diff_eq!(res.accuracy, 1.0);
    }

    #[test]
    fn oracle_on_identical_distributions_returns_the_majority_prior() {
        // both classes concentrated on the same point: nothing separates
        let feats = DMatrix::from_fn(10, 2, |_, j| if j == 0 { 0.5 } else { -0.3 });
        let labels = vec![0, 0, 0, 0, 0, 0, 1, 1, 1, 1];
        let data =
            LabeledFeatures::new(feats, labels, vec![0; 10], vec![Split::Train; 10]).unwrap();
        let res = brute_force_linear(&data, 16).unwrap();
        assert_abs_diff_eq!(res.accuracy, 0.6);
    }

    #[test]
    fn oracle_matches_bayes_on_md_two_gaussians() {
        // unit covariance, means -+(1, 0): d_M = 2, Bayes = Phi(1)
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let n_per = 5000;
        let mut feats = DMatrix::zeros(2 * n_per, 2);
        let mut labels = Vec::new();
        for i in 0..2 * n_per {
            let sign = if i < n_per { -1.0 } else { 1.0 };
            feats[(i, 0)] = sign + rng.sample::<f64, _>(StandardNormal);
            feats[(i, 1)] = rng.sample::<f64, _>(StandardNormal);
            labels.push(if i < n_per { 0 } else { 1 });
        }
        let data = LabeledFeatures::new(
            feats,
            labels,
            vec![0; 2 * n_per],
            vec![Split::Train; 2 * n_per],
        )
        .unwrap();
        let res = brute_force_linear(&data, 360).unwrap();
        let bayes = std_normal_cdf(1.0);
        assert!(
            (res.accuracy - bayes).abs() < 0.01,
            "oracle {} vs Phi(1) {}",
            res.accuracy,
            bayes
        );
    }

    #[test]
    fn oracle_separates_3d_blobs() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let n_per = 40;
        let mut feats = DMatrix::zeros(2 * n_per, 3);
        let mut labels = Vec::new();
        for i in 0..2 * n_per {
            let sign = if i < n_per { -1.0 } else { 1.0 };
            feats[(i, 0)] = sign * 2.0 + 0.3 * rng.sample::<f64, _>(StandardNormal);
            feats[(i, 1)] = 0.3 * rng.sample::<f64, _>(StandardNormal);
            feats[(i, 2)] = 0.3 * rng.sample::<f64, _>(StandardNormal);
            labels.push(if i < n_per { 0 } else { 1 });
        }
        let data = LabeledFeatures::new(
            feats,
            labels,
            vec![0; 2 * n_per],
            vec![Split::Train; 2 * n_per],
        )
        .unwrap();
        let res = brute_force_linear(&data, 30).unwrap();
        assert_abs_diff_eq!(res.accuracy, 1.0);
    }

    #[test]
    fn oracle_preconditions() {
        let data = blobs(&[(0.0, 0.0), (1.0, 0.0), (2.0, 0.0)], 5, 0.1, 2);
        assert!(matches!(
            brute_force_linear(&data, 8),
            Err(SeparabilityError::NotBinary(3))
        ));
        let wide = LabeledFeatures::new(
            DMatrix::zeros(4, 4),
            vec![0, 0, 1, 1],
            vec![0; 4],
            vec![Split::Train; 4],
        )
        .unwrap();
        assert!(matches!(
            brute_force_linear(&wide, 8),
            Err(SeparabilityError::Unsupported(4))
        ));
        let big = LabeledFeatures::new(
            DMatrix::zeros(ORACLE_MAX_SAMPLES + 1, 1),
            vec![0; ORACLE_MAX_SAMPLES + 1],
            vec![0; ORACLE_MAX_SAMPLES + 1],
            vec![Split::Train; ORACLE_MAX_SAMPLES + 1],
        )
        .unwrap();
        assert!(matches!(
            brute_force_linear(&big, 8),
            Err(SeparabilityError::TooLarge { .. })
        ));
        let ok = blobs(&[(0.0, 0.0), (1.0, 0.0)], 3, 0.01, 1);
        assert!(matches!(
            brute_force_linear(&ok, 0),
            Err(SeparabilityError::BadOption { .. })
        ));
    }

    #[test]
    fn oracle_is_deterministic_and_mode_invariant() {
        let data = blobs(&[(-1.0, 0.3), (0.8, -0.4)], 30, 0.9, 17);
        let a = brute_force_linear_with(&data, 64, ExecMode::Sequential).unwrap();
        let b = brute_force_linear_with(&data, 64, ExecMode::Parallel).unwrap();
        assert_eq!(a.accuracy, b.accuracy);
        assert_eq!(a.classifier.weights(), b.classifier.weights());
        assert_eq!(a.classifier.biases(), b.classifier.biases());
    }

    #[test]
    fn probe_stays_under_the_oracle_ceiling() {
        for seed in 0..5 {
            let data = blobs(&[(-0.6, 0.1), (0.6, -0.1)], 60, 1.0, 100 + seed);
            let oracle = brute_force_linear(&data, 360).unwrap();
            let probe = train_probe(&data, &ProbeOptions::default()).unwrap();
            let probe_acc = probe.classifier.accuracy(&data).unwrap();
            // grid error allowance: one angular step
            assert!(
                probe_acc <= oracle.accuracy + 0.02,
                "seed {seed}: probe {probe_acc} above oracle {}",
                oracle.accuracy
            );
        }
    }

    #[test]
    fn prediction_ties_go_to_the_lowest_class() {
        let clf = LinearClassifier::new(
            DMatrix::zeros(3, 2),
            DVector::zeros(3),
            vec![4, 7, 9],
            Provenance::Head,
        )
        .unwrap();
        assert_eq!(clf.predict(&DVector::from_vec(vec![1.0, -1.0])).unwrap(), 4);
    }

    #[test]
    fn constructor_and_accuracy_guards() {
        assert!(LinearClassifier::new(
            DMatrix::zeros(2, 3),
            DVector::zeros(2),
            vec![1, 0],
            Provenance::Lda
        )
        .is_err());
        assert!(LinearClassifier::new(
            DMatrix::zeros(2, 3),
            DVector::zeros(3),
            vec![0, 1],
            Provenance::Lda
        )
        .is_err());
        let clf = LinearClassifier::new(
            DMatrix::zeros(2, 3),
            DVector::zeros(2),
            vec![0, 1],
            Provenance::Lda,
        )
        .unwrap();
        assert!(matches!(
            clf.predict(&DVector::zeros(5)),
            Err(SeparabilityError::DimensionMismatch {
                got: 5,
                expected: 3
            })
        ));
        // unknown labels count as errors, not panics
        let data = blobs(&[(0.0, 0.0)], 4, 0.1, 1);
        let clf2 = LinearClassifier::new(
            DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, 1.0]),
            DVector::zeros(2),
            vec![5, 6],
            Provenance::Head,
        )
        .unwrap();
        assert_abs_diff_eq!(clf2.accuracy(&data).unwrap(), 0.0);
    }
}

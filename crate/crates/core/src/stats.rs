//! Per-class feature statistics and the collapse metric suite.
//!
//! Class means are always centered against the *unweighted* mean of class
//! means (the balanced-population global mean), so `sum_c mu~_c = 0` holds
//! identically and `sum_c n_c mu~_c = 0` holds for balanced counts.
//!
//! Metric conventions:
//!
//! - `nc1`: `delta` is the average over classes of the mean squared
//!   deviation from the class mean; `ratio` divides it by the trace of the
//!   covariance of the class means (population normalization, `1/K`).
//! - `nc2`: norm and cosine statistics of the centered means against the
//!   simplex target cosine `-1/(K-1)`; zero-norm centered means are
//!   excluded from the cosine statistics and counted.
//! - `nc3`: Frobenius distance between the Frobenius-normalized head and
//!   the normalized transposed centered means.
//! - `nc4`: agreement between the head's argmax rule and the nearest class
//!   mean rule; all ties resolve to the lowest index.
//! - `nc5_projection`: norm of the projection of a vector onto an active
//!   subspace (zero means the vector carries no in-distribution signal).

use nalgebra::{Cholesky, DMatrix, DVector};
use thiserror::Error;

use crate::geometry::{GeometryError, Subspace};

#[derive(Debug, Error)]
pub enum StatsError {
    #[error("no samples provided")]
    EmptyData,
    #[error("{field} has length {got}, expected {expected}")]
    LengthMismatch {
        field: &'static str,
        got: usize,
        expected: usize,
    },
    #[error("class {0} not present in the statistics")]
    UnknownClass(usize),
    #[error("class {0} appears in more than one group; regroup by class only")]
    AmbiguousClass(usize),
    #[error("metric needs at least two classes")]
    SingleClass,
    #[error("fewer than two classes with nonzero centered means")]
    InsufficientClasses,
    #[error("head shape {got_rows}x{got_cols} does not match {expected_rows}x{expected_cols}")]
    HeadShape {
        got_rows: usize,
        got_cols: usize,
        expected_rows: usize,
        expected_cols: usize,
    },
    #[error("{0} has zero norm")]
    ZeroMatrix(&'static str),
    #[error("signal-to-noise ratio undefined: equal means and zero total variance")]
    UndefinedSnr,
    #[error("squared distance must be nonnegative and finite, got {0}")]
    BadDistance(f64),
    #[error("ridge must be nonnegative and finite, got {0}")]
    BadRidge(f64),
    #[error("covariance sum is not positive semidefinite (ridge {0})")]
    NotPositiveDefinite(f64),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
}

/// Which population a stored feature row belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Split {
    /// Training data seen by the learner.
    Train,
    /// Rows held in the replay buffer.
    Buffer,
    /// Held-out rows standing in for the true population.
    Population,
}

impl Split {
    pub fn as_str(&self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Buffer => "buffer",
            Split::Population => "population",
        }
    }

    pub fn parse(s: &str) -> Option<Split> {
        match s {
            "train" => Some(Split::Train),
            "buffer" => Some(Split::Buffer),
            "population" => Some(Split::Population),
            _ => None,
        }
    }
}

/// An `n x d` feature matrix with per-row class, task, and split tags.
#[derive(Debug, Clone)]
pub struct LabeledFeatures {
    features: DMatrix<f64>,
    class_ids: Vec<usize>,
    task_ids: Vec<usize>,
    splits: Vec<Split>,
}

impl LabeledFeatures {
    pub fn new(
        features: DMatrix<f64>,
        class_ids: Vec<usize>,
        task_ids: Vec<usize>,
        splits: Vec<Split>,
    ) -> Result<Self, StatsError> {
        let n = features.nrows();
        if class_ids.len() != n {
            return Err(StatsError::LengthMismatch {
                field: "class_ids",
                got: class_ids.len(),
                expected: n,
            });
        }
        if task_ids.len() != n {
            return Err(StatsError::LengthMismatch {
                field: "task_ids",
                got: task_ids.len(),
                expected: n,
            });
        }
        if splits.len() != n {
            return Err(StatsError::LengthMismatch {
                field: "splits",
                got: splits.len(),
                expected: n,
            });
        }
        Ok(LabeledFeatures {
            features,
            class_ids,
            task_ids,
            splits,
        })
    }

    /// Wraps a feature matrix whose rows all share one class/task/split.
    pub fn single_class(
        features: DMatrix<f64>,
        class_id: usize,
        task_id: usize,
        split: Split,
    ) -> Self {
        let n = features.nrows();
        LabeledFeatures {
            features,
            class_ids: vec![class_id; n],
            task_ids: vec![task_id; n],
            splits: vec![split; n],
        }
    }

    pub fn len(&self) -> usize {
        self.features.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.features.ncols()
    }

    pub fn features(&self) -> &DMatrix<f64> {
        &self.features
    }

    pub fn class_ids(&self) -> &[usize] {
        &self.class_ids
    }

    pub fn task_ids(&self) -> &[usize] {
        &self.task_ids
    }

    pub fn splits(&self) -> &[Split] {
        &self.splits
    }

    /// Rows for which `keep` returns true, in original order.
    pub fn filter(&self, keep: impl Fn(usize) -> bool) -> LabeledFeatures {
        let rows: Vec<usize> = (0..self.len()).filter(|&i| keep(i)).collect();
        let mut features = DMatrix::zeros(rows.len(), self.dim());
        for (r, &i) in rows.iter().enumerate() {
            features.row_mut(r).copy_from(&self.features.row(i));
        }
        LabeledFeatures {
            features,
            class_ids: rows.iter().map(|&i| self.class_ids[i]).collect(),
            task_ids: rows.iter().map(|&i| self.task_ids[i]).collect(),
            splits: rows.iter().map(|&i| self.splits[i]).collect(),
        }
    }

    pub fn filter_split(&self, split: Split) -> LabeledFeatures {
        self.filter(|i| self.splits[i] == split)
    }

    /// Concatenates row blocks; all blocks must share the feature dimension.
    pub fn concat(blocks: &[&LabeledFeatures]) -> Result<LabeledFeatures, StatsError> {
        let nonempty: Vec<&&LabeledFeatures> = blocks.iter().filter(|b| !b.is_empty()).collect();
        let dim = match nonempty.first() {
            Some(b) => b.dim(),
            None => return Err(StatsError::EmptyData),
        };
        let total: usize = nonempty.iter().map(|b| b.len()).sum();
        let mut features = DMatrix::zeros(total, dim);
        let mut class_ids = Vec::with_capacity(total);
        let mut task_ids = Vec::with_capacity(total);
        let mut splits = Vec::with_capacity(total);
        let mut at = 0;
        for b in nonempty {
            if b.dim() != dim {
                return Err(StatsError::LengthMismatch {
                    field: "feature dimension",
                    got: b.dim(),
                    expected: dim,
                });
            }
            features.rows_mut(at, b.len()).copy_from(&b.features);
            class_ids.extend_from_slice(&b.class_ids);
            task_ids.extend_from_slice(&b.task_ids);
            splits.extend_from_slice(&b.splits);
            at += b.len();
        }
        LabeledFeatures::new(features, class_ids, task_ids, splits)
    }
}

/// Grouping key for [`class_stats`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GroupBy {
    Class,
    ClassTask,
}

/// First and second moments of one group of rows.
#[derive(Debug, Clone)]
pub struct GroupMoments {
    pub class_id: usize,
    /// Populated under [`GroupBy::ClassTask`].
    pub task_id: Option<usize>,
    pub count: usize,
    pub mean: DVector<f64>,
    /// Unbiased covariance; all zeros (and `degenerate`) when `count == 1`.
    pub cov: DMatrix<f64>,
    pub degenerate: bool,
}

/// Moments of every group plus the balanced global mean.
#[derive(Debug, Clone)]
pub struct ClassStats {
    groups: Vec<GroupMoments>, // sorted by (class_id, task_id)
    global_mean: DVector<f64>,
    dim: usize,
}

impl ClassStats {
    /// Assembles statistics from explicit moments; used by oracles and by
    /// model-based counterfactuals that never touch raw samples.
    pub fn from_moments(groups: Vec<GroupMoments>) -> Result<Self, StatsError> {
        if groups.is_empty() {
            return Err(StatsError::EmptyData);
        }
        let dim = groups[0].mean.len();
        let mut groups = groups;
        groups.sort_by_key(|g| (g.class_id, g.task_id));
        let mut global_mean = DVector::zeros(dim);
        for g in &groups {
            if g.mean.len() != dim {
                return Err(StatsError::LengthMismatch {
                    field: "group mean",
                    got: g.mean.len(),
                    expected: dim,
                });
            }
            global_mean += &g.mean;
        }
        global_mean /= groups.len() as f64;
        Ok(ClassStats {
            groups,
            global_mean,
            dim,
        })
    }

    pub fn groups(&self) -> &[GroupMoments] {
        &self.groups
    }

    pub fn n_groups(&self) -> usize {
        self.groups.len()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Unweighted mean of the group means.
    pub fn global_mean(&self) -> &DVector<f64> {
        &self.global_mean
    }

    /// Centered means as columns, `d x K`, in group order.
    pub fn centered_means(&self) -> DMatrix<f64> {
        let mut m = DMatrix::zeros(self.dim, self.groups.len());
        for (c, g) in self.groups.iter().enumerate() {
            m.set_column(c, &(&g.mean - &self.global_mean));
        }
        m
    }

    /// Centered mean of one group.
    pub fn centered_mean(&self, index: usize) -> DVector<f64> {
        &self.groups[index].mean - &self.global_mean
    }

    /// Index of the unique group with this class id.
    pub fn index_of_class(&self, class_id: usize) -> Result<usize, StatsError> {
        let mut found = None;
        for (i, g) in self.groups.iter().enumerate() {
            if g.class_id == class_id {
                if found.is_some() {
                    return Err(StatsError::AmbiguousClass(class_id));
                }
                found = Some(i);
            }
        }
        found.ok_or(StatsError::UnknownClass(class_id))
    }

    pub fn class_ids(&self) -> Vec<usize> {
        self.groups.iter().map(|g| g.class_id).collect()
    }
}

/// Groups rows and computes two-pass means and unbiased covariances.
/// Singleton groups get a zero covariance and the `degenerate` flag.
pub fn class_stats(data: &LabeledFeatures, group_by: GroupBy) -> Result<ClassStats, StatsError> {
    if data.is_empty() {
        return Err(StatsError::EmptyData);
    }
    let d = data.dim();
    let mut keys: Vec<(usize, Option<usize>)> = (0..data.len())
        .map(|i| match group_by {
            GroupBy::Class => (data.class_ids()[i], None),
            GroupBy::ClassTask => (data.class_ids()[i], Some(data.task_ids()[i])),
        })
        .collect();
    keys.sort();
    keys.dedup();

    let mut groups = Vec::with_capacity(keys.len());
    for (class_id, task_id) in keys {
        let rows: Vec<usize> = (0..data.len())
            .filter(|&i| {
                data.class_ids()[i] == class_id
                    && match task_id {
                        Some(t) => data.task_ids()[i] == t,
                        None => true,
                    }
            })
            .collect();
        let n = rows.len();
        let mut mean = DVector::zeros(d);
        for &i in &rows {
            mean += data.features().row(i).transpose();
        }
        mean /= n as f64;
        let mut cov = DMatrix::zeros(d, d);
        let degenerate = n == 1;
        if !degenerate {
            for &i in &rows {
                let dev = data.features().row(i).transpose() - &mean;
                cov.syger(1.0, &dev, &dev, 1.0);
            }
            cov /= (n - 1) as f64;
            // syger fills the lower triangle; mirror it
            for r in 0..d {
                for c in (r + 1)..d {
                    cov[(r, c)] = cov[(c, r)];
                }
            }
        }
        groups.push(GroupMoments {
            class_id,
            task_id,
            count: n,
            mean,
            cov,
            degenerate,
        });
    }
    ClassStats::from_moments(groups)
}

/// Within-class variance summary: `delta` is the mean over classes of the
/// average squared deviation; `ratio` divides by the between-class trace.
#[derive(Debug, Clone, Copy)]
pub struct Nc1 {
    pub delta: f64,
    pub ratio: f64,
}

pub fn nc1(data: &LabeledFeatures, stats: &ClassStats) -> Result<Nc1, StatsError> {
    if stats.n_groups() < 2 {
        return Err(StatsError::SingleClass);
    }
    if data.is_empty() {
        return Err(StatsError::EmptyData);
    }
    if data.dim() != stats.dim() {
        return Err(StatsError::LengthMismatch {
            field: "feature dimension",
            got: data.dim(),
            expected: stats.dim(),
        });
    }
    // mean squared deviation per group, averaged over groups
    let mut delta = 0.0;
    for g in stats.groups() {
        let rows: Vec<usize> = (0..data.len())
            .filter(|&i| {
                data.class_ids()[i] == g.class_id
                    && g.task_id.map_or(true, |t| data.task_ids()[i] == t)
            })
            .collect();
        if rows.is_empty() {
            return Err(StatsError::UnknownClass(g.class_id));
        }
        let mut acc = 0.0;
        for &i in &rows {
            acc += (data.features().row(i).transpose() - &g.mean).norm_squared();
        }
        delta += acc / rows.len() as f64;
    }
    delta /= stats.n_groups() as f64;

    // between-class trace: population covariance of the class means
    let k = stats.n_groups() as f64;
    let between: f64 = stats
        .groups()
        .iter()
        .enumerate()
        .map(|(i, _)| stats.centered_mean(i).norm_squared())
        .sum::<f64>()
        / k;
    Ok(Nc1 {
        delta,
        ratio: delta / between,
    })
}

/// Norm and angle statistics of the centered class means.
#[derive(Debug, Clone, Copy)]
pub struct Nc2Report {
    pub norm_mean: f64,
    pub norm_std: f64,
    pub cos_mean: f64,
    pub cos_std: f64,
    /// Simplex target `-1/(K-1)` for the full group count.
    pub cos_target: f64,
    /// Groups whose centered mean had zero norm, excluded from the cosine
    /// statistics.
    pub excluded: usize,
}

pub fn nc2(stats: &ClassStats) -> Result<Nc2Report, StatsError> {
    let k = stats.n_groups();
    if k < 2 {
        return Err(StatsError::SingleClass);
    }
    let centered: Vec<DVector<f64>> = (0..k).map(|i| stats.centered_mean(i)).collect();
    let norms: Vec<f64> = centered.iter().map(|v| v.norm()).collect();
    let max_norm = norms.iter().cloned().fold(0.0, f64::max);
    let cutoff = 1e-12 * (1.0 + max_norm);
    let kept: Vec<usize> = (0..k).filter(|&i| norms[i] > cutoff).collect();
    let excluded = k - kept.len();
    if kept.len() < 2 {
        return Err(StatsError::InsufficientClasses);
    }

    let norm_mean = norms.iter().sum::<f64>() / k as f64;
    let norm_var = norms.iter().map(|n| (n - norm_mean).powi(2)).sum::<f64>() / k as f64;

    let mut cosines = Vec::new();
    for (ai, &a) in kept.iter().enumerate() {
        for &b in kept.iter().skip(ai + 1) {
            cosines.push(centered[a].dot(&centered[b]) / (norms[a] * norms[b]));
        }
    }
    let cos_mean = cosines.iter().sum::<f64>() / cosines.len() as f64;
    let cos_var =
        cosines.iter().map(|c| (c - cos_mean).powi(2)).sum::<f64>() / cosines.len() as f64;

    Ok(Nc2Report {
        norm_mean,
        norm_std: norm_var.sqrt(),
        cos_mean,
        cos_std: cos_var.sqrt(),
        cos_target: -1.0 / (k as f64 - 1.0),
        excluded,
    })
}

/// Self-duality: Frobenius distance between the normalized head and the
/// normalized transposed centered means. Row `i` of `head_w` must classify
/// group `i` of `stats`.
pub fn nc3(head_w: &DMatrix<f64>, stats: &ClassStats) -> Result<f64, StatsError> {
    let k = stats.n_groups();
    if head_w.nrows() != k || head_w.ncols() != stats.dim() {
        return Err(StatsError::HeadShape {
            got_rows: head_w.nrows(),
            got_cols: head_w.ncols(),
            expected_rows: k,
            expected_cols: stats.dim(),
        });
    }
    let w_norm = head_w.norm();
    if w_norm == 0.0 {
        return Err(StatsError::ZeroMatrix("head"));
    }
    let m = stats.centered_means().transpose(); // K x d
    let m_norm = m.norm();
    if m_norm == 0.0 {
        return Err(StatsError::ZeroMatrix("centered means"));
    }
    Ok((head_w / w_norm - m / m_norm).norm())
}

/// Fraction of rows on which the head's argmax rule agrees with the
/// nearest-class-mean rule. Ties go to the lowest group index in both
/// rules. Row `i` of the head corresponds to group `i` of `stats`.
pub fn nc4(
    data: &LabeledFeatures,
    stats: &ClassStats,
    head_w: &DMatrix<f64>,
    head_b: &DVector<f64>,
) -> Result<f64, StatsError> {
    let k = stats.n_groups();
    if data.is_empty() {
        return Err(StatsError::EmptyData);
    }
    if head_w.nrows() != k || head_w.ncols() != stats.dim() {
        return Err(StatsError::HeadShape {
            got_rows: head_w.nrows(),
            got_cols: head_w.ncols(),
            expected_rows: k,
            expected_cols: stats.dim(),
        });
    }
    if head_b.len() != k {
        return Err(StatsError::LengthMismatch {
            field: "head bias",
            got: head_b.len(),
            expected: k,
        });
    }
    if data.dim() != stats.dim() {
        return Err(StatsError::LengthMismatch {
            field: "feature dimension",
            got: data.dim(),
            expected: stats.dim(),
        });
    }
    let mut agree = 0usize;
    for i in 0..data.len() {
        let x = data.features().row(i).transpose();
        let logits = head_w * &x + head_b;
        let head_pick = argmax_lowest(logits.iter().cloned());
        let ncc_pick = argmax_lowest(
            stats
                .groups()
                .iter()
                .map(|g| -((&x - &g.mean).norm_squared())),
        );
        if head_pick == ncc_pick {
            agree += 1;
        }
    }
    Ok(agree as f64 / data.len() as f64)
}

/// First index attaining the maximum (ties resolve to the lowest index).
pub fn argmax_lowest(values: impl Iterator<Item = f64>) -> usize {
    let mut best = f64::NEG_INFINITY;
    let mut best_i = 0;
    for (i, v) in values.enumerate() {
        if v > best {
            best = v;
            best_i = i;
        }
    }
    best_i
}

/// Norm of the projection of `v` onto `sub`; zero signals a vector with no
/// in-distribution component.
pub fn nc5_projection(v: &DVector<f64>, sub: &Subspace) -> Result<f64, StatsError> {
    Ok(sub.coefficients(v)?.norm())
}

/// One row of the assembled collapse trajectory.
#[derive(Debug, Clone, Copy)]
pub struct NcReport {
    pub nc1_delta: f64,
    pub nc1_ratio: f64,
    pub nc2_norm_mean: f64,
    pub nc2_norm_std: f64,
    pub nc2_cos_mean: f64,
    pub nc2_cos_std: f64,
    pub nc3_alignment: f64,
    pub nc4_agreement: f64,
    /// Mean off-task projection; filled by protocol code, NaN otherwise.
    pub nc5_projection: f64,
}

/// Squared distance between class means over the total within-class
/// variance. Infinite when the variance vanishes but the means differ.
pub fn snr(stats: &ClassStats, c1: usize, c2: usize) -> Result<f64, StatsError> {
    let i = stats.index_of_class(c1)?;
    let j = stats.index_of_class(c2)?;
    let gi = &stats.groups()[i];
    let gj = &stats.groups()[j];
    snr_from_moments(&gi.mean, &gi.cov, &gj.mean, &gj.cov)
}

pub fn snr_from_moments(
    mu1: &DVector<f64>,
    cov1: &DMatrix<f64>,
    mu2: &DVector<f64>,
    cov2: &DMatrix<f64>,
) -> Result<f64, StatsError> {
    if mu2.len() != mu1.len() {
        return Err(StatsError::LengthMismatch {
            field: "mean",
            got: mu2.len(),
            expected: mu1.len(),
        });
    }
    let gap = (mu1 - mu2).norm_squared();
    let trace = cov1.trace() + cov2.trace();
    if trace == 0.0 {
        if gap == 0.0 {
            return Err(StatsError::UndefinedSnr);
        }
        return Ok(f64::INFINITY);
    }
    Ok(gap / trace)
}

/// Squared Mahalanobis distance between two class means under the summed
/// covariance, with the ridge policy described on [`mahalanobis_from_moments`].
#[derive(Debug, Clone, Copy)]
pub struct MdResult {
    pub value: f64,
    /// Set when the ridge-free path had to drop null-space directions.
    pub rank_deficient: bool,
}

pub fn mahalanobis_sq(
    stats: &ClassStats,
    c1: usize,
    c2: usize,
    ridge: Option<f64>,
) -> Result<MdResult, StatsError> {
    let i = stats.index_of_class(c1)?;
    let j = stats.index_of_class(c2)?;
    let gi = &stats.groups()[i];
    let gj = &stats.groups()[j];
    mahalanobis_from_moments(&gi.mean, &gi.cov, &gj.mean, &gj.cov, ridge)
}

/// `(mu1-mu2)^T (cov1+cov2+ridge I)^-1 (mu1-mu2)`.
///
/// `ridge = None` applies the default relative ridge
/// `1e-6 * tr(cov1+cov2)/d`. An explicit `ridge = 0` solves exactly via
/// Cholesky and, if the sum is singular, falls back to the pseudoinverse
/// after projecting the mean gap onto the covariance column span, setting
/// `rank_deficient`.
pub fn mahalanobis_from_moments(
    mu1: &DVector<f64>,
    cov1: &DMatrix<f64>,
    mu2: &DVector<f64>,
    cov2: &DMatrix<f64>,
    ridge: Option<f64>,
) -> Result<MdResult, StatsError> {
    let d = mu1.len();
    if mu2.len() != d {
        return Err(StatsError::LengthMismatch {
            field: "mean",
            got: mu2.len(),
            expected: d,
        });
    }
    for (cov, name) in [(cov1, "cov1"), (cov2, "cov2")] {
        if cov.nrows() != d || cov.ncols() != d {
            return Err(StatsError::LengthMismatch {
                field: if name == "cov1" { "cov1 rows" } else { "cov2 rows" },
                got: cov.nrows().max(cov.ncols()),
                expected: d,
            });
        }
    }
    let sum = cov1 + cov2;
    let gap = mu1 - mu2;
    let ridge = match ridge {
        None => 1e-6 * sum.trace() / d as f64,
        Some(r) if r.is_finite() && r >= 0.0 => r,
        Some(r) => return Err(StatsError::BadRidge(r)),
    };

    if ridge > 0.0 {
        let mut reg = sum;
        for i in 0..d {
            reg[(i, i)] += ridge;
        }
        if let Some(chol) = Cholesky::new(reg) {
            let solved = chol.solve(&gap);
            return Ok(MdResult {
                value: gap.dot(&solved),
                rank_deficient: false,
            });
        }
        return Err(StatsError::NotPositiveDefinite(ridge));
    }

    if let Some(chol) = Cholesky::new(sum.clone()) {
        let solved = chol.solve(&gap);
        return Ok(MdResult {
            value: gap.dot(&solved),
            rank_deficient: false,
        });
    }

    // Singular without a ridge: measure only within the covariance span.
    let svd = sum.clone().svd(true, true);
    let sigma_max = svd.singular_values.iter().cloned().fold(0.0_f64, f64::max);
    if sigma_max == 0.0 {
        // zero covariance: no measurable direction at all
        return Ok(MdResult {
            value: 0.0,
            rank_deficient: true,
        });
    }
    let eps = sigma_max * 1e-12;
    let rank = svd.singular_values.iter().filter(|&&s| s > eps).count();
    let u = svd.u.as_ref().expect("svd requested u");
    let mut projected = DVector::zeros(d);
    for i in 0..svd.singular_values.len() {
        if svd.singular_values[i] > eps {
            let col = u.column(i);
            projected += col * col.dot(&gap);
        }
    }
    let pinv = sum
        .pseudo_inverse(eps)
        .map_err(|_| StatsError::NotPositiveDefinite(0.0))?;
    Ok(MdResult {
        value: projected.dot(&(&pinv * &projected)),
        rank_deficient: rank < d,
    })
}

/// Standard normal CDF through `erfc`, accurate to well below 1e-12.
pub fn std_normal_cdf(x: f64) -> f64 {
    0.5 * libm::erfc(-x / std::f64::consts::SQRT_2)
}

/// Bayes-optimal two-class accuracy implied by a squared Mahalanobis
/// distance: `1 - Phi(-sqrt(d2)/2)`.
pub fn separability_from_md(d2: f64) -> Result<f64, StatsError> {
    if !(d2.is_finite() && d2 >= 0.0) {
        if d2 == f64::INFINITY {
            return Ok(1.0);
        }
        return Err(StatsError::BadDistance(d2));
    }
    Ok(1.0 - std_normal_cdf(-d2.sqrt() / 2.0))
}

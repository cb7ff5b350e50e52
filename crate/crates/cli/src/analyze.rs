//! `collapselab analyze`: metric tables computed from a feature dump.

use std::fmt::Write as _;

use collapselab::geometry::{active_subspace, numerical_rank};
use collapselab::stats::{
    class_stats, mahalanobis_sq, nc1, nc2, nc5_projection, separability_from_md, snr, GroupBy,
    LabeledFeatures, Split,
};

use crate::error::{CliError, CliResult};

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum Metric {
    /// Within/between collapse metrics per task (NC1, NC2)
    Nc,
    /// Pairwise class SNR, Mahalanobis distance, and separability
    Snr,
    /// Drift score of each class mean against the train-split subspace
    Nc5,
    /// Observed (train) vs population moment gaps per class
    Gap,
}

pub fn cmd_analyze(data: &LabeledFeatures, metric: Metric) -> CliResult<String> {
    match metric {
        Metric::Nc => analyze_nc(data),
        Metric::Snr => analyze_snr(data),
        Metric::Nc5 => analyze_nc5(data),
        Metric::Gap => analyze_gap(data),
    }
}

fn fail(e: impl std::fmt::Display) -> CliError {
    CliError::failure(e.to_string())
}

fn tasks_of(data: &LabeledFeatures) -> Vec<usize> {
    let mut t: Vec<usize> = data.task_ids().to_vec();
    t.sort_unstable();
    t.dedup();
    t
}

/// NC1/NC2 per task plus a pooled `all` row. Tasks with fewer than two
/// classes cannot define between-class geometry and are skipped.
fn analyze_nc(data: &LabeledFeatures) -> CliResult<String> {
    let mut out = String::from(
        "task,rows,classes,nc1_delta,nc1_ratio,nc2_norm_mean,nc2_norm_std,nc2_cos_mean,nc2_cos_std,nc2_cos_target,nc2_excluded\n",
    );
    let mut scopes: Vec<(String, LabeledFeatures)> = tasks_of(data)
        .into_iter()
        .map(|t| (t.to_string(), data.filter(|i| data.task_ids()[i] == t)))
        .collect();
    scopes.push(("all".to_string(), data.clone()));
    for (name, rows) in scopes {
        let stats = class_stats(&rows, GroupBy::Class).map_err(fail)?;
        if stats.n_groups() < 2 {
            let _ = writeln!(out, "{name},{},{},,,,,,,,", rows.len(), stats.n_groups());
            continue;
        }
        let n1 = nc1(&rows, &stats).map_err(fail)?;
        let n2 = nc2(&stats).map_err(fail)?;
        let _ = writeln!(
            out,
            "{name},{},{},{},{},{},{},{},{},{},{}",
            rows.len(),
            stats.n_groups(),
            n1.delta,
            n1.ratio,
            n2.norm_mean,
            n2.norm_std,
            n2.cos_mean,
            n2.cos_std,
            n2.cos_target,
            n2.excluded
        );
    }
    Ok(out)
}

fn analyze_snr(data: &LabeledFeatures) -> CliResult<String> {
    let stats = class_stats(data, GroupBy::Class).map_err(fail)?;
    let ids = stats.class_ids();
    if ids.len() < 2 {
        return Err(CliError::failure(
            "snr needs at least two classes in the dump",
        ));
    }
    let mut out = String::from("class_a,class_b,snr,mahalanobis_sq,rank_deficient,separability\n");
    for i in 0..ids.len() {
        for j in (i + 1)..ids.len() {
            let s = snr(&stats, ids[i], ids[j]).map_err(fail)?;
            let md = mahalanobis_sq(&stats, ids[i], ids[j], None).map_err(fail)?;
            let sep = separability_from_md(md.value).map_err(fail)?;
            let _ = writeln!(
                out,
                "{},{},{},{},{},{}",
                ids[i], ids[j], s, md.value, md.rank_deficient, sep
            );
        }
    }
    Ok(out)
}

/// Projects each class's centered mean onto the subspace spanned by the
/// train-split class means, mirroring the protocol's drift score. Falls
/// back to all rows when the dump carries no split distinction.
fn analyze_nc5(data: &LabeledFeatures) -> CliResult<String> {
    let train = data.filter_split(Split::Train);
    let span_rows = if train.is_empty() { data.clone() } else { train };
    let span_stats = class_stats(&span_rows, GroupBy::Class).map_err(fail)?;
    let sub = active_subspace(&span_stats.centered_means(), 0.05).map_err(fail)?;

    let score_rows = {
        let pop = data.filter_split(Split::Population);
        if pop.is_empty() {
            data.clone()
        } else {
            pop
        }
    };
    let mut out = String::from("task,class,nc5_score\n");
    for t in tasks_of(&score_rows) {
        let rows = score_rows.filter(|i| score_rows.task_ids()[i] == t);
        let stats = class_stats(&rows, GroupBy::Class).map_err(fail)?;
        for (i, g) in stats.groups().iter().enumerate() {
            let score = nc5_projection(&stats.centered_mean(i), &sub).map_err(fail)?;
            let _ = writeln!(out, "{t},{},{score}", g.class_id);
        }
    }
    Ok(out)
}

/// Per-class observed-vs-population moment gaps. `degenerate` marks
/// classes whose observed side has fewer than two rows, where the
/// covariance estimate does not exist.
fn analyze_gap(data: &LabeledFeatures) -> CliResult<String> {
    let obs = data.filter_split(Split::Train);
    let pop = data.filter_split(Split::Population);
    if obs.is_empty() || pop.is_empty() {
        return Err(CliError::failure(
            "gap needs both train and population rows in the dump",
        ));
    }
    let so = class_stats(&obs, GroupBy::Class).map_err(fail)?;
    let sp = class_stats(&pop, GroupBy::Class).map_err(fail)?;
    let mut out =
        String::from("class,n_obs,n_pop,mean_gap,cov_gap,rank_obs,rank_pop,degenerate\n");
    for g in so.groups() {
        let pi = match sp.index_of_class(g.class_id) {
            Ok(i) => i,
            Err(_) => continue,
        };
        let p = &sp.groups()[pi];
        let mean_gap = (&g.mean - &p.mean).norm();
        let cov_gap = (&g.cov - &p.cov).norm();
        let rank_of = |m: &nalgebra::DMatrix<f64>| -> CliResult<usize> {
            numerical_rank(m, 0.05).map_err(fail)
        };
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{}",
            g.class_id,
            g.count,
            p.count,
            mean_gap,
            cov_gap,
            rank_of(&g.cov)?,
            rank_of(&p.cov)?,
            g.degenerate
        );
    }
    Ok(out)
}

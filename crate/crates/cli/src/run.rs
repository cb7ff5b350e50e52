//! `collapselab run`: sweep (seeds x rho x lambda), one result directory
//! per point, worker pool bounded by --jobs.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::thread;

use collapselab::continual::{
    forgetting, make_stream_with, run_protocol, ProtocolOptions, RunResult,
};
use collapselab::exec::ExecMode;

use crate::config::ExperimentConfig;
use crate::dump::{atomic_write, save_dump};
use crate::error::{CliError, CliResult};

#[derive(Clone, Copy)]
struct Point {
    seed: u64,
    rho: f64,
    lambda: f64,
}

struct PointSummary {
    seed: u64,
    rho: f64,
    lambda: f64,
    final_acc: f64,
    mean_shallow: Option<f64>,
    mean_deep: Option<f64>,
    dir: String,
}

pub fn cmd_run(
    cfg: &ExperimentConfig,
    out_dir: &Path,
    jobs: usize,
) -> CliResult<()> {
    let mut points = Vec::new();
    for &seed in &cfg.seeds {
        for &rho in &cfg.rhos {
            for &lambda in &cfg.lambdas {
                points.push(Point { seed, rho, lambda });
            }
        }
    }
    fs::create_dir_all(out_dir)
        .map_err(|e| CliError::failure(format!("creating {}: {e}", out_dir.display())))?;

    let total = points.len();
    let next = AtomicUsize::new(0);
    let done = AtomicUsize::new(0);
    let results: Mutex<Vec<(usize, Result<PointSummary, String>)>> = Mutex::new(Vec::new());
    let workers = jobs.max(1).min(total.max(1));

    thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                if i >= total {
                    break;
                }
                let p = points[i];
                let r = run_point(cfg, p, out_dir)
                    .map_err(|e| format!("seed {} rho {} lambda {}: {e}", p.seed, p.rho, p.lambda));
                let k = done.fetch_add(1, Ordering::Relaxed) + 1;
                eprintln!(
                    "[{k}/{total}] seed={} rho={} lambda={} {}",
                    p.seed,
                    p.rho,
                    p.lambda,
                    if r.is_ok() { "done" } else { "FAILED" }
                );
                results.lock().unwrap().push((i, r));
            });
        }
    });

    let mut results = results.into_inner().unwrap();
    results.sort_by_key(|(i, _)| *i);

    println!("seed\trho\tlambda\tfinal_acc\tmean_shallow\tmean_deep\tdir");
    let mut failures = Vec::new();
    for (_, r) in results {
        match r {
            Ok(s) => {
                let fmt_opt = |v: Option<f64>| match v {
                    Some(x) => format!("{x:.4}"),
                    None => String::new(),
                };
                println!(
                    "{}\t{}\t{}\t{:.4}\t{}\t{}\t{}",
                    s.seed,
                    s.rho,
                    s.lambda,
                    s.final_acc,
                    fmt_opt(s.mean_shallow),
                    fmt_opt(s.mean_deep),
                    s.dir
                );
            }
            Err(e) => failures.push(e),
        }
    }
    if failures.is_empty() {
        Ok(())
    } else {
        Err(CliError::failure(format!(
            "{} of {total} sweep points failed:\n  {}",
            failures.len(),
            failures.join("\n  ")
        )))
    }
}

fn run_point(cfg: &ExperimentConfig, p: Point, out_dir: &Path) -> CliResult<PointSummary> {
    let stream = make_stream_with(&cfg.stream_spec(p.seed))
        .map_err(|e| CliError::failure(format!("stream: {e}")))?;
    let options = ProtocolOptions {
        probe: cfg.probe.clone(),
        nc_every: cfg.nc_every,
        dumps: cfg.dumps,
        rank_tol: cfg.rank_tol,
        mode: ExecMode::default(),
    };
    let run = run_protocol(
        &stream,
        &cfg.model_config(p.seed),
        &cfg.hyper(p.lambda, p.seed),
        p.rho,
        &options,
    )
    .map_err(|e| CliError::failure(format!("protocol: {e}")))?;

    let dir = out_dir.join(format!("seed{}_rho{}_wd{}", p.seed, p.rho, p.lambda));
    fs::create_dir_all(&dir)
        .map_err(|e| CliError::failure(format!("creating {}: {e}", dir.display())))?;
    persist_run(cfg, p, &run, &dir)?;

    let n = run.matrices.head.n_sessions();
    let mut final_acc = 0.0;
    for j in 0..n {
        final_acc += run
            .matrices
            .head
            .get(n - 1, j)
            .map_err(|e| CliError::failure(e.to_string()))?;
    }
    final_acc /= n as f64;
    let summary = forgetting(&run.matrices).map_err(|e| CliError::failure(e.to_string()))?;

    Ok(PointSummary {
        seed: p.seed,
        rho: p.rho,
        lambda: p.lambda,
        final_acc,
        mean_shallow: summary.mean_shallow,
        mean_deep: summary.mean_deep,
        dir: dir.display().to_string(),
    })
}

fn persist_run(
    cfg: &ExperimentConfig,
    p: Point,
    run: &RunResult,
    dir: &Path,
) -> CliResult<()> {
    atomic_write(&dir.join("config.txt"), &cfg.snapshot(p.seed, p.rho, p.lambda))?;

    atomic_write(&dir.join("accuracy_head.csv"), &render_matrix(run, true)?)?;
    atomic_write(&dir.join("accuracy_probe.csv"), &render_matrix(run, false)?)?;

    let mut nc5 = String::from("session");
    for t in 0..run.nc5.first().map(|r| r.len()).unwrap_or(0) {
        let _ = write!(nc5, ",task{t}");
    }
    nc5.push('\n');
    for (s, row) in run.nc5.iter().enumerate() {
        let _ = write!(nc5, "{s}");
        for v in row {
            let _ = write!(nc5, ",{v}");
        }
        nc5.push('\n');
    }
    atomic_write(&dir.join("nc5.csv"), &nc5)?;

    let header = "nc1_delta,nc1_ratio,nc2_norm_mean,nc2_norm_std,nc2_cos_mean,nc2_cos_std,nc3_alignment,nc4_agreement,nc5_projection";
    let mut traj = format!("session,step,{header}\n");
    for point in &run.nc_trajectory {
        let r = &point.report;
        let _ = writeln!(
            traj,
            "{},{},{},{},{},{},{},{},{},{},{}",
            point.session,
            point.step,
            r.nc1_delta,
            r.nc1_ratio,
            r.nc2_norm_mean,
            r.nc2_norm_std,
            r.nc2_cos_mean,
            r.nc2_cos_std,
            r.nc3_alignment,
            r.nc4_agreement,
            r.nc5_projection
        );
    }
    atomic_write(&dir.join("nc_trajectory.csv"), &traj)?;

    let mut session_nc = format!("session,{header}\n");
    for (s, r) in run.session_end_nc.iter().enumerate() {
        let _ = writeln!(
            session_nc,
            "{s},{},{},{},{},{},{},{},{},{}",
            r.nc1_delta,
            r.nc1_ratio,
            r.nc2_norm_mean,
            r.nc2_norm_std,
            r.nc2_cos_mean,
            r.nc2_cos_std,
            r.nc3_alignment,
            r.nc4_agreement,
            r.nc5_projection
        );
    }
    atomic_write(&dir.join("session_nc.csv"), &session_nc)?;

    let summary = forgetting(&run.matrices).map_err(|e| CliError::failure(e.to_string()))?;
    let mut fstr = String::from("task,shallow,deep\n");
    for (t, (s, d)) in summary
        .per_task_shallow
        .iter()
        .zip(&summary.per_task_deep)
        .enumerate()
    {
        let _ = writeln!(fstr, "{t},{s},{d}");
    }
    if let (Some(ms), Some(md)) = (summary.mean_shallow, summary.mean_deep) {
        let _ = writeln!(fstr, "mean,{ms},{md}");
    }
    atomic_write(&dir.join("forgetting.csv"), &fstr)?;

    let mut onsets = String::from("session,tpt_onset\n");
    for (s, o) in run.tpt_onsets.iter().enumerate() {
        match o {
            Some(step) => {
                let _ = writeln!(onsets, "{s},{step}");
            }
            None => {
                let _ = writeln!(onsets, "{s},");
            }
        }
    }
    atomic_write(&dir.join("tpt_onsets.csv"), &onsets)?;

    for dump in &run.dumps {
        save_dump(
            &dir.join(format!("features_s{}.csv", dump.session)),
            &dump.features,
        )?;
    }

    if !run.warnings.is_empty() || !run.buffer_deviations.is_empty() {
        let mut w = String::new();
        for line in run.warnings.iter().chain(&run.buffer_deviations) {
            let _ = writeln!(w, "{line}");
        }
        atomic_write(&dir.join("warnings.txt"), &w)?;
    }
    Ok(())
}

/// Lower-triangle accuracy matrix; cells above the diagonal are empty.
fn render_matrix(run: &RunResult, head: bool) -> CliResult<String> {
    let m = if head {
        &run.matrices.head
    } else {
        &run.matrices.probe
    };
    let mut out = String::from("session");
    for t in 0..m.n_tasks() {
        let _ = write!(out, ",task{t}");
    }
    out.push('\n');
    for s in 0..m.n_sessions() {
        let _ = write!(out, "{s}");
        for t in 0..m.n_tasks() {
            match m.try_get(s, t) {
                Some(v) => {
                    let _ = write!(out, ",{v}");
                }
                None => out.push(','),
            }
        }
        out.push('\n');
    }
    Ok(out)
}

/// Resolves the output directory: the --out flag wins, then [output] dir.
pub fn resolve_out_dir(cfg: &ExperimentConfig, flag: Option<PathBuf>) -> CliResult<PathBuf> {
    match flag {
        Some(p) => Ok(p),
        None => match &cfg.out_dir {
            Some(d) => Ok(PathBuf::from(d)),
            None => Err(CliError::config(
                "no output directory: set `dir` under [output] or pass --out".to_string(),
            )),
        },
    }
}

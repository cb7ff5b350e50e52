//! `collapselab simulate`: closed-form predictors against Monte-Carlo
//! sampler measurements over a (t, pi, lambda) grid.

use std::fmt::Write as _;

use collapselab::dynamics::{predicted_snr_ood, predicted_snr_replay, sample_mixture};
use collapselab::exec::derive_seed;

use crate::config::SimulateConfig;
use crate::error::{CliError, CliResult};

pub fn cmd_simulate(cfg: &SimulateConfig, source: &str) -> CliResult<String> {
    let (etf, grid) = cfg.build(source)?;
    let mut out = String::from(
        "t,pi,lambda,predicted_snr_ood,predicted_snr_replay,predicted_mean_norm,mc_snr,mc_mean_norm\n",
    );
    let fail = |e: &dyn std::fmt::Display| CliError::failure(e.to_string());

    let mut row_idx: u64 = 0;
    let mut t = cfg.t0;
    loop {
        for (pi, lambda, mix) in &grid {
            let tpt = &mix.tpt;
            let p_ood = predicted_snr_ood(tpt, t).map_err(|e| fail(&e))?;
            let beta_t = tpt.beta_at(t).map_err(|e| fail(&e))?;
            let delta_t = tpt.delta_at(t).map_err(|e| fail(&e))?;
            let p_replay =
                predicted_snr_replay(*pi, 0.0, beta_t, delta_t, tpt, t).map_err(|e| fail(&e))?;

            // mixture mean: pi * nc_mean + (1 - pi) * upsilon^dt * mu_perp,
            // with the two parts orthogonal by construction
            let decay = tpt.decay_pow(t).map_err(|e| fail(&e))?;
            let nc_part = pi * mix.nc_mean.norm();
            let perp_part = (1.0 - pi) * decay * mix.ood_mean_perp.norm();
            let predicted_mean_norm = (nc_part * nc_part + perp_part * perp_part).sqrt();

            let samples = sample_mixture(
                cfg.samples,
                &etf,
                mix,
                t,
                derive_seed(cfg.seed, row_idx),
            )
            .map_err(|e| fail(&e))?;
            let n = samples.nrows() as f64;
            let mean = samples.row_mean().transpose();
            let mut total_var = 0.0;
            for i in 0..samples.nrows() {
                total_var += (samples.row(i).transpose() - &mean).norm_squared();
            }
            total_var /= n;
            let mc_mean_norm = mean.norm();
            let mc_snr = if total_var > 0.0 {
                mc_mean_norm * mc_mean_norm / total_var
            } else {
                f64::INFINITY
            };

            let _ = writeln!(
                out,
                "{t},{pi},{lambda},{p_ood},{p_replay},{predicted_mean_norm},{mc_snr},{mc_mean_norm}"
            );
            row_idx += 1;
        }
        if t >= cfg.t_max {
            break;
        }
        t = (t + cfg.t_stride).min(cfg.t_max);
    }
    Ok(out)
}

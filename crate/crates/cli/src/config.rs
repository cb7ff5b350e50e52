//! Sectioned key-value config files.
//!
//! The format is plain text: `[section]` headers, `key = value` lines,
//! `#` comments, blank lines ignored. Every diagnostic carries
//! `source:line:` so a bad file points at itself.

use std::collections::BTreeSet;

use collapselab::continual::{DumpPolicy, StreamSpec};
use collapselab::dynamics::{MixtureParams, Schedule, TptParams};
use collapselab::geometry::{active_subspace, build_simplex_etf, SimplexEtf};
use collapselab::learner::{Activation, HeadMode, Hyper, InitScheme, ModelConfig, Scenario};
use collapselab::separability::ProbeOptions;
use nalgebra::DMatrix;

use crate::error::{CliError, CliResult};

/// One `key = value` assignment with its location.
struct Entry {
    line: usize,
    section: String,
    key: String,
    value: String,
    used: bool,
}

/// Flat scan of a config file; typed readers consume entries by
/// (section, key) and whatever is left over at the end is an error.
pub struct Entries {
    source: String,
    items: Vec<Entry>,
}

impl Entries {
    pub fn parse(source: &str, text: &str, sections: &[&str]) -> CliResult<Entries> {
        let known: BTreeSet<&str> = sections.iter().copied().collect();
        let mut items = Vec::new();
        let mut current: Option<String> = None;
        for (idx, raw) in text.lines().enumerate() {
            let line = idx + 1;
            let stripped = match raw.find('#') {
                Some(p) => &raw[..p],
                None => raw,
            };
            let trimmed = stripped.trim();
            if trimmed.is_empty() {
                continue;
            }
            if let Some(name) = trimmed.strip_prefix('[') {
                let name = name
                    .strip_suffix(']')
                    .ok_or_else(|| err(source, line, "unterminated section header"))?
                    .trim();
                if !known.contains(name) {
                    return Err(err(
                        source,
                        line,
                        &format!(
                            "unknown section `[{name}]` (expected one of {})",
                            sections
                                .iter()
                                .map(|s| format!("[{s}]"))
                                .collect::<Vec<_>>()
                                .join(", ")
                        ),
                    ));
                }
                current = Some(name.to_string());
                continue;
            }
            let section = current
                .clone()
                .ok_or_else(|| err(source, line, "assignment before any [section] header"))?;
            let (key, value) = trimmed
                .split_once('=')
                .ok_or_else(|| err(source, line, "expected `key = value`"))?;
            items.push(Entry {
                line,
                section,
                key: key.trim().to_string(),
                value: value.trim().to_string(),
                used: false,
            });
        }
        Ok(Entries {
            source: source.to_string(),
            items,
        })
    }

    fn take(&mut self, section: &str, key: &str) -> Option<(usize, String)> {
        for e in &mut self.items {
            if !e.used && e.section == section && e.key == key {
                e.used = true;
                return Some((e.line, e.value.clone()));
            }
        }
        None
    }

    /// Every entry must have been consumed by a reader; anything left is a
    /// typo or an unsupported knob and gets a line-anchored rejection.
    pub fn finish(self) -> CliResult<()> {
        if let Some(e) = self.items.iter().find(|e| !e.used) {
            return Err(err(
                &self.source,
                e.line,
                &format!("unknown key `{}` in [{}]", e.key, e.section),
            ));
        }
        Ok(())
    }

    fn source(&self) -> &str {
        &self.source
    }
}

fn err(source: &str, line: usize, msg: &str) -> CliError {
    CliError::config(format!("{source}:{line}: {msg}"))
}

struct Reader<'a> {
    entries: &'a mut Entries,
    section: &'static str,
}

impl<'a> Reader<'a> {
    fn new(entries: &'a mut Entries, section: &'static str) -> Self {
        Reader { entries, section }
    }

    fn raw(&mut self, key: &str) -> Option<(usize, String)> {
        self.entries.take(self.section, key)
    }

    fn parse_with<T>(
        &mut self,
        key: &str,
        default: T,
        kind: &str,
        f: impl Fn(&str) -> Option<T>,
    ) -> CliResult<T> {
        match self.raw(key) {
            None => Ok(default),
            Some((line, v)) => f(&v).ok_or_else(|| {
                err(
                    self.entries.source(),
                    line,
                    &format!("`{key}` expects {kind}, got `{v}`"),
                )
            }),
        }
    }

    fn f64(&mut self, key: &str, default: f64) -> CliResult<f64> {
        self.parse_with(key, default, "a number", |v| {
            v.parse::<f64>().ok().filter(|x| x.is_finite())
        })
    }

    fn usize(&mut self, key: &str, default: usize) -> CliResult<usize> {
        self.parse_with(key, default, "a nonnegative integer", |v| v.parse().ok())
    }

    fn u64(&mut self, key: &str, default: u64) -> CliResult<u64> {
        self.parse_with(key, default, "a nonnegative integer", |v| v.parse().ok())
    }

    fn string(&mut self, key: &str) -> Option<String> {
        self.raw(key).map(|(_, v)| v)
    }

    fn f64_list(&mut self, key: &str, default: &[f64]) -> CliResult<Vec<f64>> {
        self.parse_with(key, default.to_vec(), "comma-separated numbers", |v| {
            split_list(v)
                .map(|tok| tok.parse::<f64>().ok().filter(|x| x.is_finite()))
                .collect()
        })
    }

    fn u64_list(&mut self, key: &str, default: &[u64]) -> CliResult<Vec<u64>> {
        self.parse_with(key, default.to_vec(), "comma-separated integers", |v| {
            split_list(v).map(|tok| tok.parse::<u64>().ok()).collect()
        })
    }

    fn usize_list(&mut self, key: &str, default: &[usize]) -> CliResult<Vec<usize>> {
        self.parse_with(key, default.to_vec(), "comma-separated integers", |v| {
            split_list(v).map(|tok| tok.parse::<usize>().ok()).collect()
        })
    }

    fn line_of(&mut self, key: &str) -> usize {
        0.max(
            self.entries
                .items
                .iter()
                .find(|e| e.section == self.section && e.key == key)
                .map(|e| e.line)
                .unwrap_or(0),
        )
    }
}

fn split_list(v: &str) -> impl Iterator<Item = &str> {
    v.split(',').map(str::trim).filter(|t| !t.is_empty())
}

/// Everything `collapselab run` needs: the stream, the model, the
/// optimizer, the sweep grid, and output options. Missing keys fall back
/// to the desk-scale defaults.
#[derive(Debug, Clone)]
pub struct ExperimentConfig {
    pub scenario: Scenario,
    pub n_tasks: usize,
    pub k_per_task: usize,
    pub d_input: usize,
    pub separation: f64,
    pub samples_per_class: usize,
    pub noise_sigma: f64,
    pub dil_shift_scale: f64,
    pub hidden: Vec<usize>,
    pub feature_dim: usize,
    pub activation: Activation,
    pub head_mode: HeadMode,
    pub init: InitScheme,
    pub lr: f64,
    pub batch: usize,
    pub steps: usize,
    pub rhos: Vec<f64>,
    pub lambdas: Vec<f64>,
    pub seeds: Vec<u64>,
    pub out_dir: Option<String>,
    pub dumps: DumpPolicy,
    pub nc_every: usize,
    pub rank_tol: f64,
    pub probe: ProbeOptions,
}

/// Replay fractions of Table-style sweeps: 0..10 percent plus full replay.
pub const DEFAULT_RHOS: [f64; 10] = [0.0, 0.01, 0.02, 0.03, 0.04, 0.05, 0.06, 0.08, 0.10, 1.0];

impl ExperimentConfig {
    pub fn parse(source: &str, text: &str) -> CliResult<ExperimentConfig> {
        let mut entries = Entries::parse(
            source,
            text,
            &["stream", "model", "train", "sweep", "output"],
        )?;

        let mut stream = Reader::new(&mut entries, "stream");
        let scenario = match stream.string("scenario") {
            None => Scenario::Cil,
            Some(v) => Scenario::parse(&v).ok_or_else(|| {
                let line = stream.line_of("scenario");
                err(source, line, &format!("`scenario` expects cil, til, or dil, got `{v}`"))
            })?,
        };
        let n_tasks = stream.usize("tasks", 4)?;
        let k_per_task = stream.usize("classes_per_task", 5)?;
        let d_input = stream.usize("input_dim", 32)?;
        let separation = stream.f64("separation", 1.0)?;
        let samples_per_class = stream.usize("samples_per_class", 200)?;
        let noise_sigma = stream.f64("noise_sigma", 1.0)?;
        let dil_shift_scale = stream.f64("dil_shift_scale", separation)?;

        let mut model = Reader::new(&mut entries, "model");
        let hidden = model.usize_list("hidden", &[64, 64])?;
        let feature_dim = model.usize("feature_dim", 32)?;
        let activation = match model.string("activation") {
            None => Activation::Relu,
            Some(v) => match v.as_str() {
                "relu" => Activation::Relu,
                "tanh" => Activation::Tanh,
                _ => {
                    let line = model.line_of("activation");
                    return Err(err(source, line, &format!("`activation` expects relu or tanh, got `{v}`")));
                }
            },
        };
        let head_mode = match model.string("head_mode") {
            None => match scenario {
                Scenario::Til => HeadMode::Multi,
                _ => HeadMode::Single,
            },
            Some(v) => match v.as_str() {
                "single" => HeadMode::Single,
                "multi" => HeadMode::Multi,
                _ => {
                    let line = model.line_of("head_mode");
                    return Err(err(source, line, &format!("`head_mode` expects single or multi, got `{v}`")));
                }
            },
        };
        let init = match model.string("init") {
            None => InitScheme::NormMatching,
            Some(v) => match v.as_str() {
                "standard" => InitScheme::Standard,
                "norm_matching" => InitScheme::NormMatching,
                _ => {
                    let line = model.line_of("init");
                    return Err(err(source, line, &format!("`init` expects standard or norm_matching, got `{v}`")));
                }
            },
        };

        let mut train = Reader::new(&mut entries, "train");
        let lr = train.f64("lr", 0.05)?;
        let batch = train.usize("batch", 64)?;
        let steps = train.usize("steps", 1200)?;

        let mut sweep = Reader::new(&mut entries, "sweep");
        let rhos = sweep.f64_list("rho", &DEFAULT_RHOS)?;
        let lambdas = sweep.f64_list("lambda", &[1e-3])?;
        let seeds = sweep.u64_list("seeds", &[1, 2, 3])?;

        let mut output = Reader::new(&mut entries, "output");
        let out_dir = output.string("dir");
        let dumps = match output.string("dumps") {
            None => DumpPolicy::FinalOnly,
            Some(v) => match v.as_str() {
                "none" => DumpPolicy::None,
                "final" => DumpPolicy::FinalOnly,
                "every" => DumpPolicy::EverySession,
                _ => {
                    let line = output.line_of("dumps");
                    return Err(err(source, line, &format!("`dumps` expects none, final, or every, got `{v}`")));
                }
            },
        };
        let nc_every = output.usize("nc_every", 0)?;
        let rank_tol = output.f64("rank_tol", 0.05)?;
        let probe = ProbeOptions {
            c: output.f64("probe_c", 50.0)?,
            tol: output.f64("probe_tol", 1e-3)?,
            max_iter: output.usize("probe_max_iter", 400)?,
        };

        entries.finish()?;

        let cfg = ExperimentConfig {
            scenario,
            n_tasks,
            k_per_task,
            d_input,
            separation,
            samples_per_class,
            noise_sigma,
            dil_shift_scale,
            hidden,
            feature_dim,
            activation,
            head_mode,
            init,
            lr,
            batch,
            steps,
            rhos,
            lambdas,
            seeds,
            out_dir,
            dumps,
            nc_every,
            rank_tol,
            probe,
        };
        cfg.validate(source)?;
        Ok(cfg)
    }

    fn validate(&self, source: &str) -> CliResult<()> {
        let bad = |msg: &str| Err(CliError::config(format!("{source}: {msg}")));
        if self.rhos.is_empty() {
            return bad("`rho` list must be nonempty");
        }
        if self.lambdas.is_empty() {
            return bad("`lambda` list must be nonempty");
        }
        if self.seeds.is_empty() {
            return bad("`seeds` list must be nonempty");
        }
        for &r in &self.rhos {
            if !(0.0..=1.0).contains(&r) {
                return bad(&format!("replay fraction {r} is outside [0, 1]"));
            }
        }
        for &l in &self.lambdas {
            if l < 0.0 {
                return bad(&format!("weight decay {l} is negative"));
            }
            if self.lr * l >= 1.0 {
                return bad(&format!(
                    "lr * weight decay = {} >= 1 makes the decay step unstable",
                    self.lr * l
                ));
            }
        }
        if !(self.lr > 0.0) {
            return bad("`lr` must be positive");
        }
        if self.batch == 0 {
            return bad("`batch` must be at least 1");
        }
        if self.steps == 0 {
            return bad("`steps` must be at least 1");
        }
        if self.feature_dim == 0 {
            return bad("`feature_dim` must be at least 1");
        }
        if !(self.rank_tol > 0.0) {
            return bad("`rank_tol` must be positive");
        }
        Ok(())
    }

    pub fn stream_spec(&self, seed: u64) -> StreamSpec {
        let mut spec = StreamSpec::new(
            self.scenario,
            self.n_tasks,
            self.k_per_task,
            self.d_input,
            self.separation,
            self.samples_per_class,
            seed,
        );
        spec.noise_sigma = self.noise_sigma;
        spec.dil_shift_scale = self.dil_shift_scale;
        spec
    }

    pub fn model_config(&self, seed: u64) -> ModelConfig {
        ModelConfig {
            input_dim: self.d_input,
            hidden_widths: self.hidden.clone(),
            feature_dim: self.feature_dim,
            activation: self.activation,
            head_mode: self.head_mode,
            k_per_task: self.k_per_task,
            init_scheme: self.init,
            seed,
        }
    }

    pub fn hyper(&self, weight_decay: f64, seed: u64) -> Hyper {
        Hyper {
            lr: self.lr,
            weight_decay,
            batch: self.batch,
            steps: self.steps,
            seed,
        }
    }

    /// Canonical snapshot written next to every sweep point so a result
    /// directory is self-describing and reruns are diffable.
    pub fn snapshot(&self, seed: u64, rho: f64, lambda: f64) -> String {
        let scenario = self.scenario.as_str();
        let hidden = self
            .hidden
            .iter()
            .map(|w| w.to_string())
            .collect::<Vec<_>>()
            .join(",");
        let activation = match self.activation {
            Activation::Relu => "relu",
            Activation::Tanh => "tanh",
        };
        let head_mode = match self.head_mode {
            HeadMode::Single => "single",
            HeadMode::Multi => "multi",
        };
        let init = match self.init {
            InitScheme::Standard => "standard",
            InitScheme::NormMatching => "norm_matching",
        };
        let dumps = match self.dumps {
            DumpPolicy::None => "none",
            DumpPolicy::FinalOnly => "final",
            DumpPolicy::EverySession => "every",
        };
        format!(
            "[stream]\nscenario = {scenario}\ntasks = {}\nclasses_per_task = {}\ninput_dim = {}\nseparation = {}\nsamples_per_class = {}\nnoise_sigma = {}\ndil_shift_scale = {}\n\n[model]\nhidden = {hidden}\nfeature_dim = {}\nactivation = {activation}\nhead_mode = {head_mode}\ninit = {init}\n\n[train]\nlr = {}\nbatch = {}\nsteps = {}\n\n[sweep]\nrho = {}\nlambda = {}\nseeds = {}\n\n[output]\ndumps = {dumps}\nnc_every = {}\nrank_tol = {}\nprobe_c = {}\nprobe_tol = {}\nprobe_max_iter = {}\n",
            self.n_tasks,
            self.k_per_task,
            self.d_input,
            self.separation,
            self.samples_per_class,
            self.noise_sigma,
            self.dil_shift_scale,
            self.feature_dim,
            self.lr,
            self.batch,
            self.steps,
            rho,
            lambda,
            seed,
            self.nc_every,
            self.rank_tol,
            self.probe.c,
            self.probe.tol,
            self.probe.max_iter,
        )
    }
}

/// Dynamics sweep description for `collapselab simulate`: a frame, a
/// replay mixture around it, and the grid of (t, pi, lambda) points.
pub struct SimulateConfig {
    pub eta: f64,
    pub lambdas: Vec<f64>,
    pub t0: u64,
    pub beta_base: f64,
    pub beta_slope: f64,
    pub delta0: f64,
    pub k: usize,
    pub dim: usize,
    pub beta_etf: f64,
    pub rotation_seed: Option<u64>,
    pub pis: Vec<f64>,
    pub nc_class: usize,
    pub sigma_b_scale: f64,
    pub perp_variance: f64,
    pub perp_mean_scale: f64,
    pub t_max: u64,
    pub t_stride: u64,
    pub samples: usize,
    pub seed: u64,
}

impl SimulateConfig {
    pub fn parse(source: &str, text: &str) -> CliResult<SimulateConfig> {
        let mut entries = Entries::parse(source, text, &["dynamics", "frame", "mixture", "sweep"])?;

        let mut dynamics = Reader::new(&mut entries, "dynamics");
        let eta = dynamics.f64("eta", 0.1)?;
        let lambdas = dynamics.f64_list("lambda", &[0.0, 0.01])?;
        let t0 = dynamics.u64("t0", 0)?;
        let beta_base = dynamics.f64("beta_base", 1.0)?;
        let beta_slope = dynamics.f64("beta_slope", 0.0)?;
        let delta0 = dynamics.f64("delta0", 0.5)?;

        let mut frame = Reader::new(&mut entries, "frame");
        let k = frame.usize("k", 4)?;
        let dim = frame.usize("dim", 8)?;
        let beta_etf = frame.f64("beta", 2.0)?;
        let rotation_seed = match frame.raw("rotation_seed") {
            None => None,
            Some((line, v)) => Some(v.parse::<u64>().map_err(|_| {
                err(source, line, &format!("`rotation_seed` expects an integer, got `{v}`"))
            })?),
        };

        let mut mixture = Reader::new(&mut entries, "mixture");
        let pis = mixture.f64_list("pi", &[0.0, 0.3, 0.6])?;
        let nc_class = mixture.usize("nc_class", 0)?;
        let sigma_b_scale = mixture.f64("sigma_b_scale", 0.25)?;
        let perp_variance = mixture.f64("perp_variance", 0.5)?;
        let perp_mean_scale = mixture.f64("perp_mean_scale", 2.0)?;

        let mut sweep = Reader::new(&mut entries, "sweep");
        let t_max = sweep.u64("t_max", 1000)?;
        let t_stride = sweep.u64("t_stride", 100)?;
        let samples = sweep.usize("samples", 4000)?;
        let seed = sweep.u64("seed", 1)?;

        entries.finish()?;

        let cfg = SimulateConfig {
            eta,
            lambdas,
            t0,
            beta_base,
            beta_slope,
            delta0,
            k,
            dim,
            beta_etf,
            rotation_seed,
            pis,
            nc_class,
            sigma_b_scale,
            perp_variance,
            perp_mean_scale,
            t_max,
            t_stride,
            samples,
            seed,
        };
        cfg.validate(source)?;
        Ok(cfg)
    }

    fn validate(&self, source: &str) -> CliResult<()> {
        let bad = |msg: String| Err(CliError::config(format!("{source}: {msg}")));
        if self.lambdas.is_empty() {
            return bad("`lambda` list must be nonempty".into());
        }
        if self.pis.is_empty() {
            return bad("`pi` list must be nonempty".into());
        }
        for &l in &self.lambdas {
            if self.eta * l >= 1.0 {
                return bad(format!(
                    "eta * lambda = {} >= 1: the decay factor leaves (0, 1]",
                    self.eta * l
                ));
            }
        }
        for &pi in &self.pis {
            if !(0.0..=1.0).contains(&pi) {
                return bad(format!("replay weight pi = {pi} is outside [0, 1]"));
            }
        }
        if self.nc_class >= self.k {
            return bad(format!(
                "nc_class = {} but the frame has only {} classes",
                self.nc_class, self.k
            ));
        }
        if self.t_stride == 0 {
            return bad("`t_stride` must be at least 1".into());
        }
        if self.samples == 0 {
            return bad("`samples` must be at least 1".into());
        }
        Ok(())
    }

    /// Builds the frame and the per-(pi, lambda) mixtures, mapping any
    /// rejection from the dynamics layer to a config error since every
    /// input is config-determined.
    pub fn build(
        &self,
        source: &str,
    ) -> CliResult<(SimplexEtf, Vec<(f64, f64, MixtureParams)>)> {
        let etf = build_simplex_etf(self.k, self.dim, self.beta_etf, self.rotation_seed)
            .map_err(|e| CliError::config(format!("{source}: frame rejected: {e}")))?;
        let comp = active_subspace(etf.means(), 1e-12)
            .map_err(|e| CliError::config(format!("{source}: {e}")))?
            .complement();
        let mut grid = Vec::new();
        for &lambda in &self.lambdas {
            let tpt = TptParams::new(
                self.eta,
                lambda,
                self.t0,
                Schedule::Linear {
                    base: self.beta_base,
                    slope: self.beta_slope,
                },
                TptParams::default_delta(self.delta0),
            )
            .map_err(|e| CliError::config(format!("{source}: dynamics rejected: {e}")))?;
            for &pi in &self.pis {
                let ood_mean_perp = if comp.rank() > 0 {
                    comp.basis().row(0).transpose() * self.perp_mean_scale
                } else {
                    nalgebra::DVector::zeros(self.dim)
                };
                let mix = MixtureParams {
                    pi,
                    nc_mean: etf.means().column(self.nc_class).into_owned(),
                    ood_mean_perp,
                    sigma_b: DMatrix::identity(self.k, self.k) * self.sigma_b_scale,
                    perp_variance: if comp.rank() > 0 { self.perp_variance } else { 0.0 },
                    tpt: tpt.clone(),
                };
                mix.validate_for(&etf)
                    .map_err(|e| CliError::config(format!("{source}: mixture rejected: {e}")))?;
                grid.push((pi, lambda, mix));
            }
        }
        Ok((etf, grid))
    }
}

//! Continual-learning protocol: synthetic task streams, a task-balanced
//! replay buffer, accuracy/forgetting matrices, and the session runner
//! that ties together training, linear probes, and collapse metrics.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use thiserror::Error;

use crate::exec::{derive_seed, ExecMode};
use crate::geometry::{active_subspace, numerical_rank, GeometryError};
use crate::learner::{
    detect_tpt, train_session_slice, HeadMode, HeadSel, Hyper, LearnerError, Model, ModelConfig,
    Scenario, TrainLog,
};
use crate::separability::{
    lda, train_probe, CovSource, MeanSource, ProbeOptions, SeparabilityError,
};
use crate::stats::{
    class_stats, nc1, nc2, nc3, nc4, nc5_projection, GroupBy, LabeledFeatures, NcReport, Split,
    StatsError,
};

/// Candidate draws allowed while placing class means before the stream
/// spec is declared infeasible.
pub const MAX_MEAN_ATTEMPTS: usize = 10_000;

#[derive(Debug, Error)]
pub enum ContinualError {
    #[error("bad stream spec: {0}")]
    BadSpec(&'static str),
    #[error(
        "could not place {k} class means at pairwise distance {min_dist:.3} in {d} \
         dimensions within {attempts} draws"
    )]
    InfeasibleSeparation {
        k: usize,
        d: usize,
        min_dist: f64,
        attempts: usize,
    },
    #[error("replay fraction must lie in [0, 1], got {0}")]
    BadRho(f64),
    #[error("task {0} is already stored in the buffer")]
    DuplicateTask(usize),
    #[error("cell ({session}, {task}) lies above the diagonal; task {task} had not been trained by session {session}")]
    UpperTriangle { session: usize, task: usize },
    #[error("cell ({session}, {task}) was never filled")]
    NotFilled { session: usize, task: usize },
    #[error("accuracy {0} is outside [0, 1]")]
    OutOfRange(f64),
    #[error("matrix shape: {0}")]
    Shape(&'static str),
    #[error("run holds no feature dump; rerun with dumps enabled")]
    MissingDump,
    #[error("statistics gap needs at least two completed sessions")]
    SingleSession,
    #[error("statistics gap needs a nonempty buffer (replay fraction was zero)")]
    EmptyBuffer,
    #[error("model config is incompatible with the stream: {0}")]
    ModelMismatch(&'static str),
    #[error(transparent)]
    Learner(#[from] LearnerError),
    #[error(transparent)]
    Stats(#[from] StatsError),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error(transparent)]
    Separability(#[from] SeparabilityError),
}

/// Generative description of a task stream. Class means are drawn from
/// `N(0, separation^2 I)` and rejection-sampled until every pair is at
/// least `separation * sqrt(d_input)` apart; samples add isotropic
/// Gaussian noise with standard deviation `noise_sigma`.
#[derive(Debug, Clone)]
pub struct StreamSpec {
    pub scenario: Scenario,
    pub n_tasks: usize,
    pub k_per_task: usize,
    pub d_input: usize,
    pub separation: f64,
    pub samples_per_class: usize,
    /// Sample noise scale around each class mean.
    pub noise_sigma: f64,
    /// Domain-incremental streams translate every class mean of task `t > 0`
    /// by a random direction scaled to `dil_shift_scale * sqrt(d_input)`.
    pub dil_shift_scale: f64,
    pub seed: u64,
}

impl StreamSpec {
    pub fn new(
        scenario: Scenario,
        n_tasks: usize,
        k_per_task: usize,
        d_input: usize,
        separation: f64,
        samples_per_class: usize,
        seed: u64,
    ) -> StreamSpec {
        StreamSpec {
            scenario,
            n_tasks,
            k_per_task,
            d_input,
            separation,
            samples_per_class,
            noise_sigma: 1.0,
            dil_shift_scale: separation,
            seed,
        }
    }

    /// Desk-scale profile: four tasks of five classes in 32 input
    /// dimensions, 200 train and 200 held-out rows per class.
    pub fn desk(scenario: Scenario, seed: u64) -> StreamSpec {
        StreamSpec::new(scenario, 4, 5, 32, 1.0, 200, seed)
    }

    fn validate(&self) -> Result<(), ContinualError> {
        if self.n_tasks == 0 {
            return Err(ContinualError::BadSpec("n_tasks must be at least 1"));
        }
        if self.k_per_task < 2 {
            return Err(ContinualError::BadSpec("k_per_task must be at least 2"));
        }
        if self.d_input == 0 {
            return Err(ContinualError::BadSpec("d_input must be at least 1"));
        }
        if !(self.separation.is_finite() && self.separation > 0.0) {
            return Err(ContinualError::BadSpec(
                "separation must be positive and finite",
            ));
        }
        if self.samples_per_class == 0 {
            return Err(ContinualError::BadSpec(
                "samples_per_class must be at least 1",
            ));
        }
        if !(self.noise_sigma.is_finite() && self.noise_sigma >= 0.0) {
            return Err(ContinualError::BadSpec(
                "noise_sigma must be nonnegative and finite",
            ));
        }
        if !(self.dil_shift_scale.is_finite() && self.dil_shift_scale >= 0.0) {
            return Err(ContinualError::BadSpec(
                "dil_shift_scale must be nonnegative and finite",
            ));
        }
        Ok(())
    }
}

/// One task's ground truth and samples. `means` holds one column per
/// class in ascending class-id order; `train` and `population` are
/// disjoint draws of `samples_per_class` rows per class.
#[derive(Debug, Clone)]
pub struct TaskData {
    pub task_id: usize,
    pub class_ids: Vec<usize>,
    pub means: DMatrix<f64>,
    pub train: LabeledFeatures,
    pub population: LabeledFeatures,
}

/// An ordered sequence of tasks produced by [`make_stream`].
#[derive(Debug, Clone)]
pub struct TaskStream {
    spec: StreamSpec,
    tasks: Vec<TaskData>,
}

impl TaskStream {
    pub fn spec(&self) -> &StreamSpec {
        &self.spec
    }

    pub fn tasks(&self) -> &[TaskData] {
        &self.tasks
    }

    pub fn len(&self) -> usize {
        self.tasks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tasks.is_empty()
    }

    /// Sorted distinct class ids across the whole stream.
    pub fn all_class_ids(&self) -> Vec<usize> {
        let mut ids: Vec<usize> = self
            .tasks
            .iter()
            .flat_map(|t| t.class_ids.iter().copied())
            .collect();
        ids.sort_unstable();
        ids.dedup();
        ids
    }
}

fn standard_normal_vector(rng: &mut ChaCha8Rng, d: usize) -> DVector<f64> {
    DVector::from_fn(d, |_, _| rng.sample::<f64, _>(StandardNormal))
}

fn draw_separated_means(
    k: usize,
    d: usize,
    scale: f64,
    min_dist: f64,
    seed: u64,
) -> Result<Vec<DVector<f64>>, ContinualError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut means: Vec<DVector<f64>> = Vec::with_capacity(k);
    let mut attempts = 0usize;
    while means.len() < k {
        if attempts >= MAX_MEAN_ATTEMPTS {
            return Err(ContinualError::InfeasibleSeparation {
                k,
                d,
                min_dist,
                attempts,
            });
        }
        attempts += 1;
        let cand = scale * standard_normal_vector(&mut rng, d);
        if means.iter().all(|m| (m - &cand).norm() >= min_dist) {
            means.push(cand);
        }
    }
    Ok(means)
}

fn seeded_permutation(n: usize, seed: u64) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut perm: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        let j = rng.random_range(0..=i);
        perm.swap(i, j);
    }
    perm
}

/// Draws `count` rows per class around the given means (columns in
/// ascending class-id order).
fn sample_rows(
    means: &DMatrix<f64>,
    class_ids: &[usize],
    task_id: usize,
    count: usize,
    sigma: f64,
    split: Split,
    seed: u64,
) -> Result<LabeledFeatures, ContinualError> {
    let d = means.nrows();
    let k = class_ids.len();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut features = DMatrix::zeros(k * count, d);
    let mut labels = Vec::with_capacity(k * count);
    for (c, &class) in class_ids.iter().enumerate() {
        for s in 0..count {
            let row = c * count + s;
            for j in 0..d {
                features[(row, j)] = means[(j, c)] + sigma * rng.sample::<f64, _>(StandardNormal);
            }
            labels.push(class);
        }
    }
    let n = labels.len();
    Ok(LabeledFeatures::new(
        features,
        labels,
        vec![task_id; n],
        vec![split; n],
    )?)
}

/// Builds a task stream with the default noise and shift scales.
pub fn make_stream(
    scenario: Scenario,
    n_tasks: usize,
    k_per_task: usize,
    d_input: usize,
    separation: f64,
    samples_per_class: usize,
    seed: u64,
) -> Result<TaskStream, ContinualError> {
    make_stream_with(&StreamSpec::new(
        scenario,
        n_tasks,
        k_per_task,
        d_input,
        separation,
        samples_per_class,
        seed,
    ))
}

/// Builds a task stream from an explicit spec. Class- and
/// task-incremental streams give every task a fresh block of class ids
/// with independent means; domain-incremental streams reuse one set of
/// ids and means and translate the whole layout rigidly per task.
pub fn make_stream_with(spec: &StreamSpec) -> Result<TaskStream, ContinualError> {
    spec.validate()?;
    let d = spec.d_input;
    let k_total = match spec.scenario {
        Scenario::Dil => spec.k_per_task,
        _ => spec.n_tasks * spec.k_per_task,
    };
    let min_dist = spec.separation * (d as f64).sqrt();
    let means = draw_separated_means(
        k_total,
        d,
        spec.separation,
        min_dist,
        derive_seed(spec.seed, 0),
    )?;
    let perm = seeded_permutation(k_total, derive_seed(spec.seed, 1));
    let shuffled: Vec<DVector<f64>> = (0..k_total).map(|c| means[perm[c]].clone()).collect();
    make_stream_from_means(spec, &shuffled)
}

/// Builds a task stream around caller-supplied class means instead of
/// randomly drawn ones (one mean per distinct class id in class-id order;
/// domain-incremental streams expect `k_per_task` means, the others
/// `n_tasks * k_per_task`). Shifts, sampling, and seeding match
/// [`make_stream_with`], so two streams that share a spec differ only in
/// the mean layout.
pub fn make_stream_from_means(
    spec: &StreamSpec,
    base_means: &[DVector<f64>],
) -> Result<TaskStream, ContinualError> {
    spec.validate()?;
    let d = spec.d_input;
    let k = spec.k_per_task;
    let k_total = match spec.scenario {
        Scenario::Dil => k,
        _ => spec.n_tasks * k,
    };
    if base_means.len() != k_total {
        return Err(ContinualError::BadSpec(
            "means must hold one vector per distinct class id",
        ));
    }
    if base_means.iter().any(|m| m.len() != d) {
        return Err(ContinualError::BadSpec(
            "every class mean must have d_input entries",
        ));
    }
    let means = base_means;

    let shifts: Vec<DVector<f64>> = match spec.scenario {
        Scenario::Dil => {
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(spec.seed, 2));
            let mut shifts = vec![DVector::zeros(d)];
            for _ in 1..spec.n_tasks {
                let dir = standard_normal_vector(&mut rng, d);
                let norm = dir.norm();
                let unit = if norm == 0.0 { dir } else { dir / norm };
                shifts.push(unit * (spec.dil_shift_scale * (d as f64).sqrt()));
            }
            shifts
        }
        _ => vec![DVector::zeros(d); spec.n_tasks],
    };

    let mut tasks = Vec::with_capacity(spec.n_tasks);
    for t in 0..spec.n_tasks {
        let class_ids: Vec<usize> = match spec.scenario {
            Scenario::Dil => (0..k).collect(),
            _ => (t * k..(t + 1) * k).collect(),
        };
        let mut task_means = DMatrix::zeros(d, k);
        for (c, &class) in class_ids.iter().enumerate() {
            let base = &means[class];
            task_means.set_column(c, &(base + &shifts[t]));
        }
        let train = sample_rows(
            &task_means,
            &class_ids,
            t,
            spec.samples_per_class,
            spec.noise_sigma,
            Split::Train,
            derive_seed(spec.seed, 100 + 2 * t as u64),
        )?;
        let population = sample_rows(
            &task_means,
            &class_ids,
            t,
            spec.samples_per_class,
            spec.noise_sigma,
            Split::Population,
            derive_seed(spec.seed, 101 + 2 * t as u64),
        )?;
        tasks.push(TaskData {
            task_id: t,
            class_ids,
            means: task_means,
            train,
            population,
        });
    }
    Ok(TaskStream {
        spec: spec.clone(),
        tasks,
    })
}

/// Class-stratified reservoir of past rows. Stores
/// `round(rho * samples_per_class)` rows per class of every task handed
/// to [`populate_buffer`], forcing at least one row per class when the
/// rounded quota vanishes (the deviation is recorded).
#[derive(Debug, Clone)]
pub struct ReplayBuffer {
    rho: f64,
    tasks: Vec<(usize, LabeledFeatures)>,
    deviations: Vec<String>,
}

impl ReplayBuffer {
    pub fn new(rho: f64) -> Result<ReplayBuffer, ContinualError> {
        if !(rho.is_finite() && (0.0..=1.0).contains(&rho)) {
            return Err(ContinualError::BadRho(rho));
        }
        Ok(ReplayBuffer {
            rho,
            tasks: Vec::new(),
            deviations: Vec::new(),
        })
    }

    pub fn rho(&self) -> f64 {
        self.rho
    }

    /// Stored rows per task, in insertion order.
    pub fn tasks(&self) -> &[(usize, LabeledFeatures)] {
        &self.tasks
    }

    /// Replay pools in the shape [`train_session`](crate::learner::train_session)
    /// expects.
    pub fn pools(&self) -> Vec<(usize, &LabeledFeatures)> {
        self.tasks.iter().map(|(t, rows)| (*t, rows)).collect()
    }

    pub fn total_rows(&self) -> usize {
        self.tasks.iter().map(|(_, rows)| rows.len()).sum()
    }

    /// Quota adjustments that were forced by rounding.
    pub fn deviations(&self) -> &[String] {
        &self.deviations
    }
}

/// Samples a class-stratified subset of the task's train rows into the
/// buffer. Selection is a partial Fisher-Yates pass per class, seeded by
/// `derive_seed(seed, class_id)`, so the stored set depends only on the
/// seed and the task, never on visit order.
pub fn populate_buffer(
    buffer: &mut ReplayBuffer,
    task: &TaskData,
    seed: u64,
) -> Result<(), ContinualError> {
    if buffer.tasks.iter().any(|(t, _)| *t == task.task_id) {
        return Err(ContinualError::DuplicateTask(task.task_id));
    }
    if buffer.rho == 0.0 {
        return Ok(());
    }
    let train = &task.train;
    let mut keep: Vec<usize> = Vec::new();
    for &class in &task.class_ids {
        let rows: Vec<usize> = (0..train.len())
            .filter(|&i| train.class_ids()[i] == class)
            .collect();
        let n_c = rows.len();
        if n_c == 0 {
            return Err(ContinualError::BadSpec("task train rows miss a class"));
        }
        let mut quota = (buffer.rho * n_c as f64).round() as usize;
        if quota == 0 {
            quota = 1;
            buffer.deviations.push(format!(
                "task {}, class {}: quota rounded to zero at rho = {}, kept 1 row",
                task.task_id, class, buffer.rho
            ));
        }
        let quota = quota.min(n_c);
        let mut pool = rows;
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, class as u64));
        for i in 0..quota {
            let j = rng.random_range(i..pool.len());
            pool.swap(i, j);
        }
        let mut picked: Vec<usize> = pool[..quota].to_vec();
        picked.sort_unstable();
        keep.extend(picked);
    }
    keep.sort_unstable();
    let keep_set: std::collections::HashSet<usize> = keep.iter().copied().collect();
    let subset = train.filter(|i| keep_set.contains(&i));
    let n = subset.len();
    let stored = LabeledFeatures::new(
        subset.features().clone(),
        subset.class_ids().to_vec(),
        subset.task_ids().to_vec(),
        vec![Split::Buffer; n],
    )?;
    buffer.tasks.push((task.task_id, stored));
    Ok(())
}

/// Lower-triangular accuracy matrix: `cell(i, j)` holds the accuracy on
/// task `j` measured after session `i`, defined only for `j <= i`.
#[derive(Debug, Clone)]
pub struct AccMatrix {
    n_sessions: usize,
    n_tasks: usize,
    cells: Vec<Option<f64>>,
}

impl AccMatrix {
    pub fn new(n_sessions: usize, n_tasks: usize) -> Result<AccMatrix, ContinualError> {
        if n_sessions == 0 || n_tasks == 0 {
            return Err(ContinualError::Shape("matrix dimensions must be positive"));
        }
        Ok(AccMatrix {
            n_sessions,
            n_tasks,
            cells: vec![None; n_sessions * n_tasks],
        })
    }

    pub fn n_sessions(&self) -> usize {
        self.n_sessions
    }

    pub fn n_tasks(&self) -> usize {
        self.n_tasks
    }

    fn check(&self, session: usize, task: usize) -> Result<usize, ContinualError> {
        if session >= self.n_sessions || task >= self.n_tasks {
            return Err(ContinualError::Shape("cell index out of bounds"));
        }
        if task > session {
            return Err(ContinualError::UpperTriangle { session, task });
        }
        Ok(session * self.n_tasks + task)
    }

    pub fn set(&mut self, session: usize, task: usize, value: f64) -> Result<(), ContinualError> {
        let at = self.check(session, task)?;
        if !(value.is_finite() && (0.0..=1.0).contains(&value)) {
            return Err(ContinualError::OutOfRange(value));
        }
        self.cells[at] = Some(value);
        Ok(())
    }

    pub fn get(&self, session: usize, task: usize) -> Result<f64, ContinualError> {
        let at = self.check(session, task)?;
        self.cells[at].ok_or(ContinualError::NotFilled { session, task })
    }

    /// `None` above the diagonal or where nothing was recorded; useful for
    /// rendering.
    pub fn try_get(&self, session: usize, task: usize) -> Option<f64> {
        if session >= self.n_sessions || task > session || task >= self.n_tasks {
            return None;
        }
        self.cells[session * self.n_tasks + task]
    }
}

/// Paired accuracy matrices: `head` scores the model's own classifier
/// (shallow knowledge), `probe` scores a fresh linear readout of the
/// frozen features (deep knowledge).
#[derive(Debug, Clone)]
pub struct ForgettingMatrix {
    pub head: AccMatrix,
    pub probe: AccMatrix,
}

impl ForgettingMatrix {
    pub fn new(n: usize) -> Result<ForgettingMatrix, ContinualError> {
        Ok(ForgettingMatrix {
            head: AccMatrix::new(n, n)?,
            probe: AccMatrix::new(n, n)?,
        })
    }
}

/// Forgetting per task: accuracy right after the task's own session minus
/// accuracy after the final session. The final task is excluded (it has
/// nothing to forget yet).
#[derive(Debug, Clone)]
pub struct ForgettingSummary {
    pub per_task_shallow: Vec<f64>,
    pub per_task_deep: Vec<f64>,
    pub mean_shallow: Option<f64>,
    pub mean_deep: Option<f64>,
}

pub fn forgetting(m: &ForgettingMatrix) -> Result<ForgettingSummary, ContinualError> {
    let n = m.head.n_sessions();
    if m.probe.n_sessions() != n || m.head.n_tasks() != n || m.probe.n_tasks() != n {
        return Err(ContinualError::Shape(
            "head and probe matrices must be square with equal sizes",
        ));
    }
    let last = n - 1;
    let mut shallow = Vec::new();
    let mut deep = Vec::new();
    for j in 0..last {
        shallow.push(m.head.get(j, j)? - m.head.get(last, j)?);
        deep.push(m.probe.get(j, j)? - m.probe.get(last, j)?);
    }
    let mean = |v: &[f64]| {
        if v.is_empty() {
            None
        } else {
            Some(v.iter().sum::<f64>() / v.len() as f64)
        }
    };
    Ok(ForgettingSummary {
        mean_shallow: mean(&shallow),
        mean_deep: mean(&deep),
        per_task_shallow: shallow,
        per_task_deep: deep,
    })
}

/// When to capture full feature dumps during a run.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DumpPolicy {
    None,
    FinalOnly,
    EverySession,
}

/// Knobs for [`run_protocol`].
#[derive(Debug, Clone)]
pub struct ProtocolOptions {
    pub probe: ProbeOptions,
    /// Record a collapse-metric snapshot every this many steps; zero means
    /// end-of-session only.
    pub nc_every: usize,
    pub dumps: DumpPolicy,
    /// Relative singular-value cutoff for the active subspace used by the
    /// drift score.
    pub rank_tol: f64,
    pub mode: ExecMode,
}

impl Default for ProtocolOptions {
    fn default() -> Self {
        ProtocolOptions {
            probe: ProbeOptions::default(),
            nc_every: 0,
            dumps: DumpPolicy::FinalOnly,
            rank_tol: 0.05,
            mode: ExecMode::default(),
        }
    }
}

/// Collapse metrics at one point of one session.
#[derive(Debug, Clone, Copy)]
pub struct NcPoint {
    pub session: usize,
    /// Steps completed within the session when the snapshot was taken.
    pub step: u64,
    pub report: NcReport,
}

/// All rows the model has seen by the end of a session (train, held-out,
/// and buffer rows of every task so far), mapped through the current
/// feature extractor.
#[derive(Debug, Clone)]
pub struct SessionDump {
    pub session: usize,
    pub features: LabeledFeatures,
}

/// Everything one protocol run produces.
#[derive(Debug, Clone)]
pub struct RunResult {
    pub scenario: Scenario,
    pub rho: f64,
    pub seed: u64,
    /// Task ids in training order.
    pub task_ids: Vec<usize>,
    pub matrices: ForgettingMatrix,
    /// Session-by-task drift scores, covering future tasks as well.
    pub nc5: Vec<Vec<f64>>,
    pub nc_trajectory: Vec<NcPoint>,
    pub session_end_nc: Vec<NcReport>,
    pub tpt_onsets: Vec<Option<u64>>,
    pub dumps: Vec<SessionDump>,
    pub buffer_deviations: Vec<String>,
    pub warnings: Vec<String>,
    pub model: Model,
}

fn feature_view(
    model: &Model,
    rows: &LabeledFeatures,
    mode: ExecMode,
) -> Result<LabeledFeatures, ContinualError> {
    let f = model.features_with(rows.features(), mode)?;
    Ok(LabeledFeatures::new(
        f,
        rows.class_ids().to_vec(),
        rows.task_ids().to_vec(),
        rows.splits().to_vec(),
    )?)
}

/// Classifier rows for exactly this task's classes, ascending.
fn task_classifier(
    model: &Model,
    scenario: Scenario,
    task: &TaskData,
) -> Result<(DMatrix<f64>, DVector<f64>), ContinualError> {
    let sel = match scenario {
        Scenario::Til => HeadSel::Task(task.task_id),
        _ => HeadSel::All,
    };
    let (w, b, classes) = model.classifier(sel)?;
    let mut wanted = task.class_ids.clone();
    wanted.sort_unstable();
    let rows: Vec<usize> = classes
        .iter()
        .enumerate()
        .filter(|(_, c)| wanted.binary_search(c).is_ok())
        .map(|(i, _)| i)
        .collect();
    let mut w_out = DMatrix::zeros(rows.len(), w.ncols());
    let mut b_out = DVector::zeros(rows.len());
    for (r, &i) in rows.iter().enumerate() {
        w_out.set_row(r, &w.row(i));
        b_out[r] = b[i];
    }
    Ok((w_out, b_out))
}

/// The span of the centered class means of everything trained so far, on
/// current features of the train rows. Domain-incremental streams keep
/// per-(class, task) groups so distinct domains contribute separately.
fn seen_subspace(
    model: &Model,
    stream: &TaskStream,
    seen: usize,
    rel_tol: f64,
    mode: ExecMode,
) -> Result<crate::geometry::Subspace, ContinualError> {
    let views: Vec<LabeledFeatures> = stream.tasks()[..seen]
        .iter()
        .map(|t| feature_view(model, &t.train, mode))
        .collect::<Result<_, _>>()?;
    let refs: Vec<&LabeledFeatures> = views.iter().collect();
    let all = LabeledFeatures::concat(&refs)?;
    let group_by = match stream.spec().scenario {
        Scenario::Dil => GroupBy::ClassTask,
        _ => GroupBy::Class,
    };
    let stats = class_stats(&all, group_by)?;
    Ok(active_subspace(&stats.centered_means(), rel_tol)?)
}

/// Mean projection norm of each task's held-out class means onto the
/// subspace spanned by the seen classes. Means are centered within the
/// scored task so the score tracks class distinctions rather than the
/// common feature offset every input shares; tasks whose structure the
/// features no longer carry score near zero.
fn nc5_scores(
    model: &Model,
    stream: &TaskStream,
    seen: usize,
    rel_tol: f64,
    mode: ExecMode,
) -> Result<Vec<f64>, ContinualError> {
    let sub = seen_subspace(model, stream, seen, rel_tol, mode)?;
    let mut row = Vec::with_capacity(stream.len());
    for task in stream.tasks() {
        let pop = feature_view(model, &task.population, mode)?;
        let stats = class_stats(&pop, GroupBy::Class)?;
        let mut acc = 0.0;
        for i in 0..stats.n_groups() {
            acc += nc5_projection(&stats.centered_mean(i), &sub)?;
        }
        row.push(acc / stats.n_groups() as f64);
    }
    Ok(row)
}

fn nc_report(
    model: &Model,
    stream: &TaskStream,
    session: usize,
    opts: &ProtocolOptions,
) -> Result<NcReport, ContinualError> {
    let task = &stream.tasks()[session];
    let train_f = feature_view(model, &task.train, opts.mode)?;
    let stats = class_stats(&train_f, GroupBy::Class)?;
    let n1 = nc1(&train_f, &stats)?;
    let n2 = nc2(&stats)?;
    let (w, b) = task_classifier(model, stream.spec().scenario, task)?;
    let n3 = nc3(&w, &stats)?;
    let n4 = nc4(&train_f, &stats, &w, &b)?;
    let n5 = if session == 0 {
        f64::NAN
    } else {
        let scores = nc5_scores(model, stream, session + 1, opts.rank_tol, opts.mode)?;
        scores[..session].iter().sum::<f64>() / session as f64
    };
    Ok(NcReport {
        nc1_delta: n1.delta,
        nc1_ratio: n1.ratio,
        nc2_norm_mean: n2.norm_mean,
        nc2_norm_std: n2.norm_std,
        nc2_cos_mean: n2.cos_mean,
        nc2_cos_std: n2.cos_std,
        nc3_alignment: n3,
        nc4_agreement: n4,
        nc5_projection: n5,
    })
}

fn session_dump(
    model: &Model,
    stream: &TaskStream,
    upto: usize,
    buffer: &ReplayBuffer,
    mode: ExecMode,
) -> Result<LabeledFeatures, ContinualError> {
    let mut parts: Vec<LabeledFeatures> = Vec::new();
    for task in &stream.tasks()[..=upto] {
        parts.push(feature_view(model, &task.train, mode)?);
        parts.push(feature_view(model, &task.population, mode)?);
    }
    for (_, rows) in buffer.tasks() {
        parts.push(feature_view(model, rows, mode)?);
    }
    let refs: Vec<&LabeledFeatures> = parts.iter().collect();
    Ok(LabeledFeatures::concat(&refs)?)
}

/// Runs the full protocol: one session per task in stream order, with
/// replay of everything buffered so far, head and probe evaluations after
/// every session, drift scores over all tasks, and feature dumps per the
/// options. Deterministic given the stream, config, hyper seed, and rho.
pub fn run_protocol(
    stream: &TaskStream,
    model_cfg: &ModelConfig,
    hyper: &Hyper,
    rho: f64,
    opts: &ProtocolOptions,
) -> Result<RunResult, ContinualError> {
    if stream.is_empty() {
        return Err(ContinualError::BadSpec("stream has no tasks"));
    }
    let scenario = stream.spec().scenario;
    match (scenario, model_cfg.head_mode) {
        (Scenario::Til, HeadMode::Single) => {
            return Err(ContinualError::ModelMismatch(
                "task-incremental runs need one head per task",
            ));
        }
        (Scenario::Dil, HeadMode::Multi) => {
            return Err(ContinualError::ModelMismatch(
                "domain-incremental runs use a single shared head",
            ));
        }
        _ => {}
    }
    if model_cfg.input_dim != stream.spec().d_input {
        return Err(ContinualError::ModelMismatch(
            "input_dim differs between model and stream",
        ));
    }
    if model_cfg.k_per_task != stream.spec().k_per_task {
        return Err(ContinualError::ModelMismatch(
            "k_per_task differs between model and stream",
        ));
    }
    if !(opts.rank_tol.is_finite() && opts.rank_tol > 0.0) {
        return Err(ContinualError::BadSpec("rank_tol must be positive"));
    }

    let n = stream.len();
    let mut model = Model::new(model_cfg.clone())?;
    let mut buffer = ReplayBuffer::new(rho)?;
    let mut matrices = ForgettingMatrix::new(n)?;
    let mut nc5 = Vec::with_capacity(n);
    let mut nc_trajectory = Vec::new();
    let mut session_end_nc = Vec::with_capacity(n);
    let mut tpt_onsets = Vec::with_capacity(n);
    let mut dumps = Vec::new();

    for (i, task) in stream.tasks().iter().enumerate() {
        if scenario != Scenario::Dil || i == 0 {
            model.add_head(task.task_id, &task.class_ids)?;
        }
        let session_hyper = Hyper {
            seed: derive_seed(hyper.seed, 7000 + i as u64),
            ..*hyper
        };
        let pools = buffer.pools();
        let mut log = TrainLog::new();
        let chunk = if opts.nc_every == 0 {
            session_hyper.steps.max(1)
        } else {
            opts.nc_every
        };
        let mut done = 0usize;
        while done < session_hyper.steps {
            let len = chunk.min(session_hyper.steps - done);
            let part = train_session_slice(
                &mut model,
                task.task_id,
                &task.train,
                &pools,
                &session_hyper,
                scenario,
                opts.mode,
                done,
                len,
            )?;
            log.records.extend(part.records);
            done += len;
            if opts.nc_every != 0 {
                let report = nc_report(&model, stream, i, opts)?;
                nc_trajectory.push(NcPoint {
                    session: i,
                    step: done as u64,
                    report,
                });
            }
        }
        log.tpt_onset = detect_tpt(&log);
        tpt_onsets.push(log.tpt_onset);
        session_end_nc.push(nc_report(&model, stream, i, opts)?);

        populate_buffer(
            &mut buffer,
            task,
            derive_seed(hyper.seed, 5000 + task.task_id as u64),
        )?;

        for (j, past) in stream.tasks()[..=i].iter().enumerate() {
            let acc = model.evaluate(&past.population, scenario)?;
            matrices.head.set(i, j, acc)?;
        }

        match scenario {
            Scenario::Til => {
                for (j, past) in stream.tasks()[..=i].iter().enumerate() {
                    let train_f = feature_view(&model, &past.train, opts.mode)?;
                    let probe = train_probe(&train_f, &opts.probe)?;
                    let eval_f = feature_view(&model, &past.population, opts.mode)?;
                    matrices
                        .probe
                        .set(i, j, probe.classifier.accuracy(&eval_f)?)?;
                }
            }
            _ => {
                let views: Vec<LabeledFeatures> = stream.tasks()[..=i]
                    .iter()
                    .map(|t| feature_view(&model, &t.train, opts.mode))
                    .collect::<Result<_, _>>()?;
                let refs: Vec<&LabeledFeatures> = views.iter().collect();
                let all = LabeledFeatures::concat(&refs)?;
                let probe = train_probe(&all, &opts.probe)?;
                for (j, past) in stream.tasks()[..=i].iter().enumerate() {
                    let eval_f = feature_view(&model, &past.population, opts.mode)?;
                    matrices
                        .probe
                        .set(i, j, probe.classifier.accuracy(&eval_f)?)?;
                }
            }
        }

        nc5.push(nc5_scores(&model, stream, i + 1, opts.rank_tol, opts.mode)?);

        let want = match opts.dumps {
            DumpPolicy::None => false,
            DumpPolicy::FinalOnly => i + 1 == n,
            DumpPolicy::EverySession => true,
        };
        if want {
            dumps.push(SessionDump {
                session: i,
                features: session_dump(&model, stream, i, &buffer, opts.mode)?,
            });
        }
    }

    Ok(RunResult {
        scenario,
        rho,
        seed: hyper.seed,
        task_ids: stream.tasks().iter().map(|t| t.task_id).collect(),
        matrices,
        nc5,
        nc_trajectory,
        session_end_nc,
        tpt_onsets,
        dumps,
        buffer_deviations: buffer.deviations().to_vec(),
        warnings: model.warnings().to_vec(),
        model,
    })
}

/// The four classifier counterfactuals compared after a run. They answer,
/// in order: what the features still support with full statistics, what
/// true means alone support, what buffer means alone support, and what
/// the buffer supports end to end.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LdaVariant {
    FullPopulation,
    PopulationMeansIdCov,
    ObservedMeansIdCov,
    FullBuffer,
}

impl LdaVariant {
    pub const ALL: [LdaVariant; 4] = [
        LdaVariant::FullPopulation,
        LdaVariant::PopulationMeansIdCov,
        LdaVariant::ObservedMeansIdCov,
        LdaVariant::FullBuffer,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            LdaVariant::FullPopulation => "full-population",
            LdaVariant::PopulationMeansIdCov => "population-means-id-cov",
            LdaVariant::ObservedMeansIdCov => "observed-means-id-cov",
            LdaVariant::FullBuffer => "full-buffer",
        }
    }

    fn sources(&self) -> (MeanSource, CovSource) {
        match self {
            LdaVariant::FullPopulation => (MeanSource::Population, CovSource::PooledPopulation),
            LdaVariant::PopulationMeansIdCov => (MeanSource::Population, CovSource::Identity),
            LdaVariant::ObservedMeansIdCov => (MeanSource::Observed, CovSource::Identity),
            LdaVariant::FullBuffer => (MeanSource::Observed, CovSource::PooledObserved),
        }
    }

    fn needs_buffer(&self) -> bool {
        matches!(
            self,
            LdaVariant::ObservedMeansIdCov | LdaVariant::FullBuffer
        )
    }
}

/// One counterfactual's outcome for one run. `accuracy` is measured on
/// the held-out rows of the run's final dump; statistically infeasible
/// variants carry a skip reason instead.
#[derive(Debug, Clone)]
pub struct LdaEntry {
    pub rho: f64,
    pub seed: u64,
    pub variant: LdaVariant,
    pub accuracy: Option<f64>,
    pub skipped: Option<String>,
}

/// Fits the four counterfactual classifiers on each run's final dump and
/// scores them on the held-out rows. Variants that the buffer cannot
/// support (no rows, or single-row classes for pooled covariance) are
/// reported as skipped rather than failing the suite.
pub fn lda_suite(runs: &[RunResult], ridge: f64) -> Result<Vec<LdaEntry>, ContinualError> {
    if runs.is_empty() {
        return Err(ContinualError::BadSpec("lda_suite needs at least one run"));
    }
    let mut out = Vec::new();
    for run in runs {
        let dump = run.dumps.last().ok_or(ContinualError::MissingDump)?;
        let train = dump.features.filter_split(Split::Train);
        let pop = dump.features.filter_split(Split::Population);
        if train.is_empty() || pop.is_empty() {
            return Err(ContinualError::BadSpec(
                "final dump lacks train or population rows",
            ));
        }
        let buf = dump.features.filter_split(Split::Buffer);
        let stats_pop = class_stats(&train, GroupBy::Class)?;
        let stats_obs = if buf.is_empty() {
            None
        } else {
            Some(class_stats(&buf, GroupBy::Class)?)
        };
        for variant in LdaVariant::ALL {
            let mut entry = LdaEntry {
                rho: run.rho,
                seed: run.seed,
                variant,
                accuracy: None,
                skipped: None,
            };
            if variant.needs_buffer() && stats_obs.is_none() {
                entry.skipped = Some(format!("buffer is empty at rho = {}", run.rho));
                out.push(entry);
                continue;
            }
            let (ms, cs) = variant.sources();
            match lda(ms, cs, Some(&stats_pop), stats_obs.as_ref(), ridge) {
                Ok(clf) => {
                    entry.accuracy = Some(clf.accuracy(&pop)?);
                }
                Err(
                    e @ (SeparabilityError::DegenerateGroup { .. }
                    | SeparabilityError::SingularCovariance(_)),
                ) => {
                    entry.skipped = Some(e.to_string());
                }
                Err(e) => return Err(e.into()),
            }
            out.push(entry);
        }
    }
    Ok(out)
}

/// How far the buffer's per-class statistics sit from the train-set
/// statistics of the same classes, in feature space, averaged over the
/// past (non-final) tasks. At full replay both gaps are exactly zero.
#[derive(Debug, Clone, Copy)]
pub struct StatisticsGap {
    pub rho: f64,
    /// Mean Euclidean distance between buffer and train class means.
    pub mean_gap: f64,
    /// Mean Frobenius distance between buffer and train class covariances.
    pub cov_gap: f64,
    /// Mean numerical rank of the buffer class covariances.
    pub rank_obs: f64,
    /// Mean numerical rank of the train class covariances.
    pub rank_pop: f64,
    pub n_groups: usize,
}

pub fn statistics_gap(run: &RunResult) -> Result<StatisticsGap, ContinualError> {
    let n_sessions = run.matrices.head.n_sessions();
    if n_sessions < 2 {
        return Err(ContinualError::SingleSession);
    }
    let dump = run.dumps.last().ok_or(ContinualError::MissingDump)?;
    let past: Vec<usize> = run.task_ids[..n_sessions - 1].to_vec();
    let in_past = |rows: &LabeledFeatures, i: usize| past.contains(&rows.task_ids()[i]);
    let train = dump.features.filter_split(Split::Train);
    let train_past = train.filter(|i| in_past(&train, i));
    let buf = dump.features.filter_split(Split::Buffer);
    if buf.is_empty() {
        return Err(ContinualError::EmptyBuffer);
    }
    let buf_past = buf.filter(|i| in_past(&buf, i));
    if buf_past.is_empty() || train_past.is_empty() {
        return Err(ContinualError::BadSpec("dump holds no past-task rows"));
    }
    let sp = class_stats(&train_past, GroupBy::ClassTask)?;
    let so = class_stats(&buf_past, GroupBy::ClassTask)?;
    let mut mean_gap = 0.0;
    let mut cov_gap = 0.0;
    let mut rank_obs = 0.0;
    let mut rank_pop = 0.0;
    let mut count = 0usize;
    for g_obs in so.groups() {
        let g_pop = sp
            .groups()
            .iter()
            .find(|g| g.class_id == g_obs.class_id && g.task_id == g_obs.task_id)
            .ok_or(ContinualError::BadSpec(
                "buffer holds a class absent from the train rows",
            ))?;
        mean_gap += (&g_obs.mean - &g_pop.mean).norm();
        cov_gap += (&g_obs.cov - &g_pop.cov).norm();
        rank_obs += numerical_rank(&g_obs.cov, 1e-8)? as f64;
        rank_pop += numerical_rank(&g_pop.cov, 1e-8)? as f64;
        count += 1;
    }
    let denom = count as f64;
    Ok(StatisticsGap {
        rho: run.rho,
        mean_gap: mean_gap / denom,
        cov_gap: cov_gap / denom,
        rank_obs: rank_obs / denom,
        rank_pop: rank_pop / denom,
        n_groups: count,
    })
}

//! A small trainable network with hand-coded backpropagation.
//!
//! The model is an MLP feature map (hidden layers with a pointwise
//! activation, then a *linear* feature layer) topped by one or more linear
//! heads. Heads are per-task blocks; the scenario decides how they combine:
//!
//! - task-incremental: softmax over the sample's own task head only, so
//!   gradients never touch other heads (they change only by the decay
//!   shrink, exactly);
//! - class-incremental: softmax over the concatenation of all heads;
//! - domain-incremental: a single fixed head.
//!
//! Updates are SGD with decoupled weight decay: every parameter is scaled
//! by `(1 - lr * wd)` and then moved by `-lr * grad`. Everything is
//! deterministic per seed, and the chunked batch-gradient computation is
//! bit-identical between sequential and parallel execution modes.

use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::exec::{derive_seed, map_indexed, ExecMode, CHUNK};
use crate::stats::{LabeledFeatures, NcReport, StatsError};

/// Batch rows per gradient chunk; small enough that desk-scale batches
/// still split across threads.
pub(crate) const GRAD_CHUNK: usize = 256;

/// A step counts as terminal-phase when its batch error is zero and its
/// loss sits below this threshold (exact zero cross-entropy never happens).
pub const TPT_LOSS_THRESHOLD: f64 = 1e-3;

const CHECKPOINT_MAGIC: &[u8; 4] = b"CLMD";
const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum LearnerError {
    #[error("bad model config: {0}")]
    BadConfig(&'static str),
    #[error("no head registered for task {0}")]
    UnknownHead(usize),
    #[error("class {0} is not covered by the selected head(s)")]
    UnknownClass(usize),
    #[error("class {0} already belongs to an existing head")]
    DuplicateClass(usize),
    #[error("head must carry {expected} classes, got {got}")]
    HeadSize { got: usize, expected: usize },
    #[error("no data")]
    EmptyData,
    #[error("dimension mismatch: got {got}, expected {expected}")]
    DimMismatch { got: usize, expected: usize },
    #[error("shape mismatch: {0}")]
    ShapeMismatch(&'static str),
    #[error("{0}")]
    ScenarioHeads(&'static str),
    #[error("unstable update: lr * weight_decay = {0} >= 1")]
    UnstableUpdate(f64),
    #[error("bad hyperparameter {which}: {value}")]
    BadHyper { which: &'static str, value: f64 },
    #[error("checkpoint corrupt: {0}")]
    Corrupt(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Stats(#[from] StatsError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Tanh,
}

impl Activation {
    #[inline]
    fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Relu => z.max(0.0),
            Activation::Tanh => z.tanh(),
        }
    }

    /// Derivative expressed through the activation output.
    #[inline]
    fn grad_from_output(self, a: f64) -> f64 {
        match self {
            Activation::Relu => {
                if a > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Tanh => 1.0 - a * a,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HeadMode {
    Single,
    Multi,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InitScheme {
    Standard,
    NormMatching,
}

/// Continual-learning scenario; decides head routing for loss and
/// evaluation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Scenario {
    Cil,
    Dil,
    Til,
}

impl Scenario {
    pub fn as_str(&self) -> &'static str {
        match self {
            Scenario::Cil => "cil",
            Scenario::Dil => "dil",
            Scenario::Til => "til",
        }
    }

    pub fn parse(s: &str) -> Option<Scenario> {
        match s {
            "cil" => Some(Scenario::Cil),
            "dil" => Some(Scenario::Dil),
            "til" => Some(Scenario::Til),
            _ => None,
        }
    }
}

#[derive(Debug, Clone)]
pub struct ModelConfig {
    pub input_dim: usize,
    pub hidden_widths: Vec<usize>,
    pub feature_dim: usize,
    pub activation: Activation,
    pub head_mode: HeadMode,
    pub k_per_task: usize,
    pub init_scheme: InitScheme,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    pub w: DMatrix<f64>, // out x in
    pub b: DVector<f64>, // out
}

impl Dense {
    fn seeded_uniform(out_dim: usize, in_dim: usize, seed: u64) -> Dense {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let bound = (1.0 / in_dim as f64).sqrt();
        let w = DMatrix::from_fn(out_dim, in_dim, |_, _| {
            (rng.random::<f64>() * 2.0 - 1.0) * bound
        });
        Dense {
            w,
            b: DVector::zeros(out_dim),
        }
    }
}

#[derive(Debug, Clone)]
pub struct Head {
    pub task_id: usize,
    pub dense: Dense,
    /// Class id scored by each row, in row order (unique, not necessarily
    /// sorted: class-incremental growth appends in arrival order).
    pub classes: Vec<usize>,
    /// Number of per-task blocks this head accumulated (single-head growth).
    pub blocks: usize,
}

#[derive(Debug, Clone)]
pub struct Model {
    cfg: ModelConfig,
    trunk: Vec<Dense>, // hidden layers (activated) then the linear feature layer
    heads: Vec<Head>,
    warnings: Vec<String>,
}

/// Head selection for scoring.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HeadSel {
    /// Concatenation of every head, in registration order.
    All,
    /// The head registered for this task id.
    Task(usize),
}

/// Per-parameter gradients, shaped exactly like the model's parameters.
#[derive(Debug, Clone)]
pub struct Grads {
    pub trunk: Vec<Dense>,
    pub heads: Vec<Dense>,
}

#[derive(Debug, Clone)]
pub struct Hyper {
    pub lr: f64,
    pub weight_decay: f64,
    pub batch: usize,
    pub steps: usize,
    pub seed: u64,
}

impl Hyper {
    fn validate(&self) -> Result<(), LearnerError> {
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return Err(LearnerError::BadHyper {
                which: "lr",
                value: self.lr,
            });
        }
        if !(self.weight_decay.is_finite() && self.weight_decay >= 0.0) {
            return Err(LearnerError::BadHyper {
                which: "weight_decay",
                value: self.weight_decay,
            });
        }
        if self.lr * self.weight_decay >= 1.0 {
            return Err(LearnerError::UnstableUpdate(self.lr * self.weight_decay));
        }
        if self.batch == 0 {
            return Err(LearnerError::BadHyper {
                which: "batch",
                value: 0.0,
            });
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepRecord {
    pub step: u64,
    pub loss: f64,
    pub train_error: f64,
}

#[derive(Debug, Clone, Default)]
pub struct TrainLog {
    pub records: Vec<StepRecord>,
    pub nc_snapshots: Vec<(u64, NcReport)>,
    pub tpt_onset: Option<u64>,
}

impl TrainLog {
    pub fn new() -> TrainLog {
        TrainLog::default()
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Appends `other`, shifting its step numbers past this log's end.
    /// The terminal-phase onset is re-detected over the merged record.
    pub fn merge(&mut self, other: TrainLog) {
        let offset = self.records.len() as u64;
        for mut r in other.records {
            r.step += offset;
            self.records.push(r);
        }
        for (step, report) in other.nc_snapshots {
            self.nc_snapshots.push((step + offset, report));
        }
        self.tpt_onset = detect_tpt(self);
    }
}

/// First step whose batch error is zero with loss under
/// [`TPT_LOSS_THRESHOLD`]; `None` when never reached.
pub fn detect_tpt(log: &TrainLog) -> Option<u64> {
    log.records
        .iter()
        .find(|r| r.train_error == 0.0 && r.loss < TPT_LOSS_THRESHOLD)
        .map(|r| r.step)
}

impl Model {
    pub fn new(cfg: ModelConfig) -> Result<Model, LearnerError> {
        if cfg.input_dim == 0 {
            return Err(LearnerError::BadConfig("input_dim must be at least 1"));
        }
        if cfg.feature_dim == 0 {
            return Err(LearnerError::BadConfig("feature_dim must be at least 1"));
        }
        if cfg.hidden_widths.iter().any(|&w| w == 0) {
            return Err(LearnerError::BadConfig("hidden widths must be at least 1"));
        }
        if cfg.k_per_task < 2 {
            return Err(LearnerError::BadConfig("k_per_task must be at least 2"));
        }
        let mut dims = Vec::with_capacity(cfg.hidden_widths.len() + 2);
        dims.push(cfg.input_dim);
        dims.extend_from_slice(&cfg.hidden_widths);
        dims.push(cfg.feature_dim);
        let trunk = (0..dims.len() - 1)
            .map(|l| Dense::seeded_uniform(dims[l + 1], dims[l], derive_seed(cfg.seed, l as u64)))
            .collect();
        Ok(Model {
            cfg,
            trunk,
            heads: Vec::new(),
            warnings: Vec::new(),
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn trunk(&self) -> &[Dense] {
        &self.trunk
    }

    pub fn heads(&self) -> &[Head] {
        &self.heads
    }

    /// Mutable views of every parameter tensor, trunk layers first and then
    /// heads in registration order. Exposed so external verification code
    /// (finite-difference checks) can perturb single parameters; training
    /// code must go through [`Model::apply_update`].
    pub fn layers_mut(&mut self) -> Vec<(&mut DMatrix<f64>, &mut DVector<f64>)> {
        let trunk = self.trunk.iter_mut().map(|d| (&mut d.w, &mut d.b));
        let heads = self
            .heads
            .iter_mut()
            .map(|h| (&mut h.dense.w, &mut h.dense.b));
        trunk.chain(heads).collect()
    }

    pub fn warnings(&self) -> &[String] {
        &self.warnings
    }

    pub fn head_for_task(&self, task_id: usize) -> Option<usize> {
        match self.cfg.head_mode {
            HeadMode::Single => {
                if self.heads.is_empty() {
                    None
                } else {
                    Some(0)
                }
            }
            HeadMode::Multi => self.heads.iter().position(|h| h.task_id == task_id),
        }
    }

    pub fn total_classes(&self) -> usize {
        self.heads.iter().map(|h| h.classes.len()).sum()
    }

    fn check_feasibility(&mut self) {
        let total = self.total_classes();
        if total > 0 && self.cfg.feature_dim < total - 1 {
            let msg = format!(
                "feature_dim {} is below {} - 1; a tight simplex frame over all classes cannot embed",
                self.cfg.feature_dim, total
            );
            if !self.warnings.contains(&msg) {
                self.warnings.push(msg);
            }
        }
    }

    /// Registers a task's classes. Multi-head mode appends a new head
    /// block; single-head mode creates the head on first call and grows it
    /// by a block of rows afterwards. Under the norm-matching scheme the
    /// new block's Frobenius norm is rescaled to the mean per-block norm
    /// of what already exists, preserving direction.
    ///
    /// Returns the index of the head the task routes to.
    pub fn add_head(&mut self, task_id: usize, classes: &[usize]) -> Result<usize, LearnerError> {
        if classes.len() != self.cfg.k_per_task {
            return Err(LearnerError::HeadSize {
                got: classes.len(),
                expected: self.cfg.k_per_task,
            });
        }
        let mut seen = classes.to_vec();
        seen.sort_unstable();
        seen.dedup();
        if seen.len() != classes.len() {
            return Err(LearnerError::DuplicateClass(classes[0]));
        }
        for head in &self.heads {
            for &c in classes {
                if head.classes.contains(&c) {
                    return Err(LearnerError::DuplicateClass(c));
                }
            }
        }
        let d = self.cfg.feature_dim;
        let k = classes.len();
        let init_seed = derive_seed(self.cfg.seed, 1000 + self.heads.len() as u64);
        let index = match self.cfg.head_mode {
            HeadMode::Multi => {
                let mut dense = Dense::seeded_uniform(k, d, init_seed);
                if self.cfg.init_scheme == InitScheme::NormMatching && !self.heads.is_empty() {
                    let mean_norm = self
                        .heads
                        .iter()
                        .map(|h| h.dense.w.norm())
                        .sum::<f64>()
                        / self.heads.len() as f64;
                    let own = dense.w.norm();
                    if own > 0.0 {
                        dense.w *= mean_norm / own;
                    }
                }
                self.heads.push(Head {
                    task_id,
                    dense,
                    classes: classes.to_vec(),
                    blocks: 1,
                });
                self.heads.len() - 1
            }
            HeadMode::Single => {
                if self.heads.is_empty() {
                    let dense = Dense::seeded_uniform(k, d, init_seed);
                    self.heads.push(Head {
                        task_id,
                        dense,
                        classes: classes.to_vec(),
                        blocks: 1,
                    });
                } else {
                    let head = &mut self.heads[0];
                    let block_seed =
                        derive_seed(self.cfg.seed, 1000 + head.blocks as u64);
                    let mut block = Dense::seeded_uniform(k, d, block_seed);
                    if self.cfg.init_scheme == InitScheme::NormMatching {
                        let mean_block_norm =
                            (head.dense.w.norm_squared() / head.blocks as f64).sqrt();
                        let own = block.w.norm();
                        if own > 0.0 {
                            block.w *= mean_block_norm / own;
                        }
                    }
                    let old_rows = head.dense.w.nrows();
                    let mut w = DMatrix::zeros(old_rows + k, d);
                    w.view_mut((0, 0), (old_rows, d)).copy_from(&head.dense.w);
                    w.view_mut((old_rows, 0), (k, d)).copy_from(&block.w);
                    let mut b = DVector::zeros(old_rows + k);
                    b.rows_mut(0, old_rows).copy_from(&head.dense.b);
                    head.dense = Dense { w, b };
                    head.classes.extend_from_slice(classes);
                    head.blocks += 1;
                }
                0
            }
        };
        self.check_feasibility();
        Ok(index)
    }

    fn forward_chunk(&self, x: &DMatrix<f64>) -> Vec<DMatrix<f64>> {
        let layers = self.trunk.len();
        let mut acts = Vec::with_capacity(layers + 1);
        acts.push(x.clone());
        for (l, dense) in self.trunk.iter().enumerate() {
            let mut z = acts[l].clone() * dense.w.transpose();
            for i in 0..z.nrows() {
                for j in 0..z.ncols() {
                    z[(i, j)] += dense.b[j];
                }
            }
            if l + 1 < layers {
                z.apply(|v| *v = self.cfg.activation.apply(*v));
            }
            acts.push(z);
        }
        acts
    }

    /// Feature-map output for a batch of inputs (rows).
    pub fn features(&self, x: &DMatrix<f64>) -> Result<DMatrix<f64>, LearnerError> {
        self.features_with(x, ExecMode::default())
    }

    pub fn features_with(
        &self,
        x: &DMatrix<f64>,
        mode: ExecMode,
    ) -> Result<DMatrix<f64>, LearnerError> {
        if x.ncols() != self.cfg.input_dim {
            return Err(LearnerError::DimMismatch {
                got: x.ncols(),
                expected: self.cfg.input_dim,
            });
        }
        let n = x.nrows();
        if n == 0 {
            return Err(LearnerError::EmptyData);
        }
        let n_chunks = n.div_ceil(CHUNK);
        let chunks = map_indexed(n_chunks, mode, |c| {
            let start = c * CHUNK;
            let len = CHUNK.min(n - start);
            let sub = x.rows(start, len).into_owned();
            self.forward_chunk(&sub).pop().expect("nonempty trunk")
        });
        let mut out = DMatrix::zeros(n, self.cfg.feature_dim);
        let mut row = 0;
        for chunk in chunks {
            out.rows_mut(row, chunk.nrows()).copy_from(&chunk);
            row += chunk.nrows();
        }
        Ok(out)
    }

    /// Logits for the selected head(s), plus the class id each column
    /// scores. `All` concatenates heads in registration order.
    pub fn logits(
        &self,
        x: &DMatrix<f64>,
        sel: HeadSel,
    ) -> Result<(DMatrix<f64>, Vec<usize>), LearnerError> {
        let feats = self.features(x)?;
        self.logits_from_features(&feats, sel)
    }

    pub fn logits_from_features(
        &self,
        feats: &DMatrix<f64>,
        sel: HeadSel,
    ) -> Result<(DMatrix<f64>, Vec<usize>), LearnerError> {
        if feats.ncols() != self.cfg.feature_dim {
            return Err(LearnerError::DimMismatch {
                got: feats.ncols(),
                expected: self.cfg.feature_dim,
            });
        }
        if self.heads.is_empty() {
            return Err(LearnerError::ScenarioHeads("model has no heads"));
        }
        let indices: Vec<usize> = match sel {
            HeadSel::All => (0..self.heads.len()).collect(),
            HeadSel::Task(t) => {
                vec![self.head_for_task(t).ok_or(LearnerError::UnknownHead(t))?]
            }
        };
        let total: usize = indices.iter().map(|&i| self.heads[i].classes.len()).sum();
        let mut logits = DMatrix::zeros(feats.nrows(), total);
        let mut classes = Vec::with_capacity(total);
        let mut col = 0;
        for &i in &indices {
            let head = &self.heads[i];
            let k = head.classes.len();
            let block = feats * head.dense.w.transpose();
            for r in 0..feats.nrows() {
                for c in 0..k {
                    logits[(r, col + c)] = block[(r, c)] + head.dense.b[c];
                }
            }
            classes.extend_from_slice(&head.classes);
            col += k;
        }
        Ok((logits, classes))
    }

    /// Head weight blocks stacked vertically (rows in head registration
    /// and row order); the object whose numerical rank the collapse theory
    /// constrains.
    pub fn stacked_head_weights(&self) -> Result<DMatrix<f64>, LearnerError> {
        if self.heads.is_empty() {
            return Err(LearnerError::ScenarioHeads("model has no heads"));
        }
        let rows: usize = self.heads.iter().map(|h| h.dense.w.nrows()).sum();
        let mut stacked = DMatrix::zeros(rows, self.cfg.feature_dim);
        let mut at = 0;
        for head in &self.heads {
            stacked
                .view_mut((at, 0), (head.dense.w.nrows(), self.cfg.feature_dim))
                .copy_from(&head.dense.w);
            at += head.dense.w.nrows();
        }
        Ok(stacked)
    }

    /// Weight rows and biases of the selected head(s), sorted by class id;
    /// the shape the nearest-mean agreement metric expects.
    pub fn classifier(
        &self,
        sel: HeadSel,
    ) -> Result<(DMatrix<f64>, DVector<f64>, Vec<usize>), LearnerError> {
        let n_rows: usize = match sel {
            HeadSel::All => self.heads.iter().map(|h| h.classes.len()).sum(),
            HeadSel::Task(t) => {
                let i = self.head_for_task(t).ok_or(LearnerError::UnknownHead(t))?;
                self.heads[i].classes.len()
            }
        };
        if n_rows == 0 {
            return Err(LearnerError::ScenarioHeads("model has no heads"));
        }
        let mut rows: Vec<(usize, usize, usize)> = Vec::with_capacity(n_rows); // (class, head, row)
        match sel {
            HeadSel::All => {
                for (h, head) in self.heads.iter().enumerate() {
                    for (r, &c) in head.classes.iter().enumerate() {
                        rows.push((c, h, r));
                    }
                }
            }
            HeadSel::Task(t) => {
                let i = self.head_for_task(t).ok_or(LearnerError::UnknownHead(t))?;
                for (r, &c) in self.heads[i].classes.iter().enumerate() {
                    rows.push((c, i, r));
                }
            }
        }
        rows.sort_unstable_by_key(|&(c, _, _)| c);
        let d = self.cfg.feature_dim;
        let mut w = DMatrix::zeros(rows.len(), d);
        let mut b = DVector::zeros(rows.len());
        let mut classes = Vec::with_capacity(rows.len());
        for (out, &(c, h, r)) in rows.iter().enumerate() {
            for j in 0..d {
                w[(out, j)] = self.heads[h].dense.w[(r, j)];
            }
            b[out] = self.heads[h].dense.b[r];
            classes.push(c);
        }
        Ok((w, b, classes))
    }

    fn scenario_heads(&self, scenario: Scenario) -> Result<(), LearnerError> {
        match scenario {
            Scenario::Dil => {
                if self.heads.len() != 1 {
                    return Err(LearnerError::ScenarioHeads(
                        "domain-incremental runs use exactly one head",
                    ));
                }
            }
            Scenario::Til => {
                if self.cfg.head_mode != HeadMode::Multi {
                    return Err(LearnerError::ScenarioHeads(
                        "task-incremental routing requires multi-head mode",
                    ));
                }
            }
            Scenario::Cil => {
                if self.heads.is_empty() {
                    return Err(LearnerError::ScenarioHeads("model has no heads"));
                }
            }
        }
        Ok(())
    }

    /// Mean cross-entropy, batch error rate, and exact gradients for one
    /// batch under the scenario's head routing. Output is identical across
    /// execution modes.
    pub fn loss_and_grad(
        &self,
        x: &DMatrix<f64>,
        labels: &[usize],
        tasks: &[usize],
        scenario: Scenario,
    ) -> Result<(f64, f64, Grads), LearnerError> {
        self.loss_and_grad_with(x, labels, tasks, scenario, ExecMode::default())
    }

    pub fn loss_and_grad_with(
        &self,
        x: &DMatrix<f64>,
        labels: &[usize],
        tasks: &[usize],
        scenario: Scenario,
        mode: ExecMode,
    ) -> Result<(f64, f64, Grads), LearnerError> {
        let n = x.nrows();
        if n == 0 {
            return Err(LearnerError::EmptyData);
        }
        if labels.len() != n || tasks.len() != n {
            return Err(LearnerError::ShapeMismatch(
                "labels/tasks length differs from batch rows",
            ));
        }
        if x.ncols() != self.cfg.input_dim {
            return Err(LearnerError::DimMismatch {
                got: x.ncols(),
                expected: self.cfg.input_dim,
            });
        }
        self.scenario_heads(scenario)?;

        // resolve routing up front so chunk workers stay infallible
        #[derive(Clone, Copy)]
        struct Route {
            head: usize,
            row_in_head: usize,
        }
        let mut routes = Vec::with_capacity(n);
        match scenario {
            Scenario::Cil | Scenario::Dil => {
                for &label in labels {
                    let mut found = None;
                    'outer: for (h, head) in self.heads.iter().enumerate() {
                        for (r, &c) in head.classes.iter().enumerate() {
                            if c == label {
                                found = Some(Route {
                                    head: h,
                                    row_in_head: r,
                                });
                                break 'outer;
                            }
                        }
                    }
                    routes.push(found.ok_or(LearnerError::UnknownClass(label))?);
                }
            }
            Scenario::Til => {
                for (&label, &task) in labels.iter().zip(tasks) {
                    let h = self
                        .head_for_task(task)
                        .ok_or(LearnerError::UnknownHead(task))?;
                    let r = self.heads[h]
                        .classes
                        .iter()
                        .position(|&c| c == label)
                        .ok_or(LearnerError::UnknownClass(label))?;
                    routes.push(Route {
                        head: h,
                        row_in_head: r,
                    });
                }
            }
        }
        // column offset of each head in the concatenated logit matrix
        let mut offsets = Vec::with_capacity(self.heads.len());
        let mut acc = 0;
        for head in &self.heads {
            offsets.push(acc);
            acc += head.classes.len();
        }

        struct Partial {
            loss: f64,
            errors: usize,
            trunk: Vec<Dense>,
            heads: Vec<Dense>,
        }
        let zero_grads = || Grads {
            trunk: self
                .trunk
                .iter()
                .map(|d| Dense {
                    w: DMatrix::zeros(d.w.nrows(), d.w.ncols()),
                    b: DVector::zeros(d.b.len()),
                })
                .collect(),
            heads: self
                .heads
                .iter()
                .map(|h| Dense {
                    w: DMatrix::zeros(h.dense.w.nrows(), h.dense.w.ncols()),
                    b: DVector::zeros(h.dense.b.len()),
                })
                .collect(),
        };

        let n_chunks = n.div_ceil(GRAD_CHUNK);
        let partials = map_indexed(n_chunks, mode, |ci| {
            let start = ci * GRAD_CHUNK;
            let len = GRAD_CHUNK.min(n - start);
            let xc = x.rows(start, len).into_owned();
            let acts = self.forward_chunk(&xc);
            let feats = &acts[acts.len() - 1];
            let d = self.cfg.feature_dim;
            let mut grads = zero_grads();
            let mut loss = 0.0;
            let mut errors = 0usize;
            let mut d_feats = DMatrix::zeros(len, d);

            match scenario {
                Scenario::Cil | Scenario::Dil => {
                    // joint softmax over the concatenation of all heads
                    let total = acc;
                    let mut logits = DMatrix::zeros(len, total);
                    for (h, head) in self.heads.iter().enumerate() {
                        let block = feats * head.dense.w.transpose();
                        for i in 0..len {
                            for c in 0..head.classes.len() {
                                logits[(i, offsets[h] + c)] = block[(i, c)] + head.dense.b[c];
                            }
                        }
                    }
                    for i in 0..len {
                        let route = routes[start + i];
                        let target = offsets[route.head] + route.row_in_head;
                        let row = logits.row(i);
                        let m = row.max();
                        let lse = m + row.iter().map(|&v| (v - m).exp()).sum::<f64>().ln();
                        loss += lse - row[target];
                        let mut best = 0;
                        for c in 1..total {
                            if row[c] > row[best] {
                                best = c;
                            }
                        }
                        if best != target {
                            errors += 1;
                        }
                        for c in 0..total {
                            logits[(i, c)] = (logits[(i, c)] - lse).exp();
                        }
                        logits[(i, target)] -= 1.0;
                    }
                    // scatter concatenated gradient back into head blocks
                    for (h, head) in self.heads.iter().enumerate() {
                        let k = head.classes.len();
                        let block = logits.columns(offsets[h], k).into_owned();
                        grads.heads[h].w.gemm(1.0, &block.transpose(), feats, 1.0);
                        for i in 0..len {
                            for c in 0..k {
                                grads.heads[h].b[c] += block[(i, c)];
                            }
                        }
                        d_feats.gemm(1.0, &block, &head.dense.w, 1.0);
                    }
                }
                Scenario::Til => {
                    // group chunk rows by head, preserving row order
                    for (h, head) in self.heads.iter().enumerate() {
                        let rows: Vec<usize> = (0..len)
                            .filter(|&i| routes[start + i].head == h)
                            .collect();
                        if rows.is_empty() {
                            continue;
                        }
                        let k = head.classes.len();
                        let mut sub = DMatrix::zeros(rows.len(), d);
                        for (si, &i) in rows.iter().enumerate() {
                            for j in 0..d {
                                sub[(si, j)] = feats[(i, j)];
                            }
                        }
                        let mut logits = &sub * head.dense.w.transpose();
                        for si in 0..rows.len() {
                            for c in 0..k {
                                logits[(si, c)] += head.dense.b[c];
                            }
                        }
                        for (si, &i) in rows.iter().enumerate() {
                            let target = routes[start + i].row_in_head;
                            let row = logits.row(si);
                            let m = row.max();
                            let lse =
                                m + row.iter().map(|&v| (v - m).exp()).sum::<f64>().ln();
                            loss += lse - row[target];
                            let mut best = 0;
                            for c in 1..k {
                                if row[c] > row[best] {
                                    best = c;
                                }
                            }
                            if best != target {
                                errors += 1;
                            }
                            for c in 0..k {
                                logits[(si, c)] = (logits[(si, c)] - lse).exp();
                            }
                            logits[(si, target)] -= 1.0;
                        }
                        grads.heads[h].w.gemm(1.0, &logits.transpose(), &sub, 1.0);
                        for si in 0..rows.len() {
                            for c in 0..k {
                                grads.heads[h].b[c] += logits[(si, c)];
                            }
                        }
                        let back = logits * &head.dense.w; // rows x d
                        for (si, &i) in rows.iter().enumerate() {
                            for j in 0..d {
                                d_feats[(i, j)] += back[(si, j)];
                            }
                        }
                    }
                }
            }

            // trunk backward; the last trunk layer is linear
            let layers = self.trunk.len();
            let mut d_act = d_feats;
            for l in (0..layers).rev() {
                let dz = if l + 1 < layers {
                    let mut dz = d_act;
                    let a = &acts[l + 1];
                    for i in 0..dz.nrows() {
                        for j in 0..dz.ncols() {
                            dz[(i, j)] *= self.cfg.activation.grad_from_output(a[(i, j)]);
                        }
                    }
                    dz
                } else {
                    d_act
                };
                grads.trunk[l].w.gemm(1.0, &dz.transpose(), &acts[l], 1.0);
                for i in 0..dz.nrows() {
                    for j in 0..dz.ncols() {
                        grads.trunk[l].b[j] += dz[(i, j)];
                    }
                }
                d_act = dz * &self.trunk[l].w;
            }

            Partial {
                loss,
                errors,
                trunk: grads.trunk,
                heads: grads.heads,
            }
        });

        let mut grads = zero_grads();
        let mut loss = 0.0;
        let mut errors = 0usize;
        for p in partials {
            loss += p.loss;
            errors += p.errors;
            for (acc, part) in grads.trunk.iter_mut().zip(&p.trunk) {
                acc.w += &part.w;
                acc.b += &part.b;
            }
            for (acc, part) in grads.heads.iter_mut().zip(&p.heads) {
                acc.w += &part.w;
                acc.b += &part.b;
            }
        }
        let scale = 1.0 / n as f64;
        for g in grads.trunk.iter_mut().chain(grads.heads.iter_mut()) {
            g.w *= scale;
            g.b *= scale;
        }
        Ok((loss * scale, errors as f64 * scale, grads))
    }

    /// One decoupled-decay SGD step: every parameter (trunk and all heads,
    /// biases included) is scaled by `(1 - lr*wd)` and then shifted by
    /// `-lr * grad`. Heads that received no gradient change by the shrink
    /// alone, exactly.
    pub fn apply_update(
        &mut self,
        grads: &Grads,
        lr: f64,
        weight_decay: f64,
    ) -> Result<(), LearnerError> {
        if !(lr.is_finite() && lr > 0.0) {
            return Err(LearnerError::BadHyper {
                which: "lr",
                value: lr,
            });
        }
        if !(weight_decay.is_finite() && weight_decay >= 0.0) {
            return Err(LearnerError::BadHyper {
                which: "weight_decay",
                value: weight_decay,
            });
        }
        if lr * weight_decay >= 1.0 {
            return Err(LearnerError::UnstableUpdate(lr * weight_decay));
        }
        if grads.trunk.len() != self.trunk.len() || grads.heads.len() != self.heads.len() {
            return Err(LearnerError::ShapeMismatch(
                "gradient layer count differs from model",
            ));
        }
        let shrink = 1.0 - lr * weight_decay;
        for (param, grad) in self.trunk.iter_mut().zip(&grads.trunk) {
            if param.w.shape() != grad.w.shape() || param.b.len() != grad.b.len() {
                return Err(LearnerError::ShapeMismatch("trunk gradient shape"));
            }
            param.w *= shrink;
            param.w -= &grad.w * lr;
            param.b *= shrink;
            param.b -= &grad.b * lr;
        }
        for (head, grad) in self.heads.iter_mut().zip(&grads.heads) {
            if head.dense.w.shape() != grad.w.shape() || head.dense.b.len() != grad.b.len() {
                return Err(LearnerError::ShapeMismatch("head gradient shape"));
            }
            head.dense.w *= shrink;
            head.dense.w -= &grad.w * lr;
            head.dense.b *= shrink;
            head.dense.b -= &grad.b * lr;
        }
        Ok(())
    }

    /// Accuracy of the scenario-appropriate readout on labeled inputs:
    /// joint over all heads for class-incremental, the single head for
    /// domain-incremental, the true task's head for task-incremental.
    /// Ties go to the lowest class id.
    pub fn evaluate(
        &self,
        data: &LabeledFeatures,
        scenario: Scenario,
    ) -> Result<f64, LearnerError> {
        if data.is_empty() {
            return Err(LearnerError::EmptyData);
        }
        self.scenario_heads(scenario)?;
        let feats = self.features(data.features())?;
        let mut correct = 0usize;
        match scenario {
            Scenario::Cil | Scenario::Dil => {
                let (logits, classes) = self.logits_from_features(&feats, HeadSel::All)?;
                for i in 0..data.len() {
                    let mut best_class = classes[0];
                    let mut best_score = logits[(i, 0)];
                    for c in 1..classes.len() {
                        let s = logits[(i, c)];
                        if s > best_score || (s == best_score && classes[c] < best_class) {
                            best_score = s;
                            best_class = classes[c];
                        }
                    }
                    if best_class == data.class_ids()[i] {
                        correct += 1;
                    }
                }
            }
            Scenario::Til => {
                for i in 0..data.len() {
                    let task = data.task_ids()[i];
                    let h = self
                        .head_for_task(task)
                        .ok_or(LearnerError::UnknownHead(task))?;
                    let head = &self.heads[h];
                    let mut best_class = head.classes[0];
                    let mut best_score = f64::NEG_INFINITY;
                    for (r, &c) in head.classes.iter().enumerate() {
                        let mut s = head.dense.b[r];
                        for j in 0..self.cfg.feature_dim {
                            s += head.dense.w[(r, j)] * feats[(i, j)];
                        }
                        if s > best_score || (s == best_score && c < best_class) {
                            best_score = s;
                            best_class = c;
                        }
                    }
                    if best_class == data.class_ids()[i] {
                        correct += 1;
                    }
                }
            }
        }
        Ok(correct as f64 / data.len() as f64)
    }

    // ---- checkpointing ----

    /// Flat little-endian binary checkpoint: magic, version, architecture
    /// header, head registry, then every float in declaration order
    /// (trunk weights row-major then biases, per layer; heads likewise).
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        let push_u64 = |out: &mut Vec<u8>, v: u64| out.extend_from_slice(&v.to_le_bytes());
        push_u64(&mut out, self.cfg.input_dim as u64);
        push_u64(&mut out, self.cfg.hidden_widths.len() as u64);
        for &w in &self.cfg.hidden_widths {
            push_u64(&mut out, w as u64);
        }
        push_u64(&mut out, self.cfg.feature_dim as u64);
        out.push(match self.cfg.activation {
            Activation::Relu => 0,
            Activation::Tanh => 1,
        });
        out.push(match self.cfg.head_mode {
            HeadMode::Single => 0,
            HeadMode::Multi => 1,
        });
        out.push(match self.cfg.init_scheme {
            InitScheme::Standard => 0,
            InitScheme::NormMatching => 1,
        });
        push_u64(&mut out, self.cfg.k_per_task as u64);
        push_u64(&mut out, self.cfg.seed);
        push_u64(&mut out, self.heads.len() as u64);
        for head in &self.heads {
            push_u64(&mut out, head.task_id as u64);
            push_u64(&mut out, head.blocks as u64);
            push_u64(&mut out, head.classes.len() as u64);
            for &c in &head.classes {
                push_u64(&mut out, c as u64);
            }
        }
        let push_dense = |out: &mut Vec<u8>, dense: &Dense| {
            for i in 0..dense.w.nrows() {
                for j in 0..dense.w.ncols() {
                    out.extend_from_slice(&dense.w[(i, j)].to_le_bytes());
                }
            }
            for i in 0..dense.b.len() {
                out.extend_from_slice(&dense.b[i].to_le_bytes());
            }
        };
        for dense in &self.trunk {
            push_dense(&mut out, dense);
        }
        for head in &self.heads {
            push_dense(&mut out, &head.dense);
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Model, LearnerError> {
        struct Reader<'a> {
            buf: &'a [u8],
            pos: usize,
        }
        impl<'a> Reader<'a> {
            fn take(&mut self, n: usize) -> Result<&'a [u8], LearnerError> {
                if self.pos + n > self.buf.len() {
                    return Err(LearnerError::Corrupt(format!(
                        "truncated at byte {} (wanted {} more)",
                        self.pos, n
                    )));
                }
                let s = &self.buf[self.pos..self.pos + n];
                self.pos += n;
                Ok(s)
            }
            fn u64(&mut self) -> Result<u64, LearnerError> {
                Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
            }
            fn u32(&mut self) -> Result<u32, LearnerError> {
                Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
            }
            fn u8(&mut self) -> Result<u8, LearnerError> {
                Ok(self.take(1)?[0])
            }
            fn f64(&mut self) -> Result<f64, LearnerError> {
                Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
            }
            fn usize64(&mut self) -> Result<usize, LearnerError> {
                let v = self.u64()?;
                usize::try_from(v)
                    .map_err(|_| LearnerError::Corrupt(format!("length {v} overflows usize")))
            }
        }
        let mut r = Reader { buf: bytes, pos: 0 };
        if r.take(4)? != CHECKPOINT_MAGIC {
            return Err(LearnerError::Corrupt("bad magic".into()));
        }
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(LearnerError::Corrupt(format!(
                "unsupported version {version}"
            )));
        }
        let input_dim = r.usize64()?;
        let n_hidden = r.usize64()?;
        if n_hidden > 1024 {
            return Err(LearnerError::Corrupt(format!(
                "implausible hidden layer count {n_hidden}"
            )));
        }
        let mut hidden_widths = Vec::with_capacity(n_hidden);
        for _ in 0..n_hidden {
            hidden_widths.push(r.usize64()?);
        }
        let feature_dim = r.usize64()?;
        let activation = match r.u8()? {
            0 => Activation::Relu,
            1 => Activation::Tanh,
            v => return Err(LearnerError::Corrupt(format!("unknown activation {v}"))),
        };
        let head_mode = match r.u8()? {
            0 => HeadMode::Single,
            1 => HeadMode::Multi,
            v => return Err(LearnerError::Corrupt(format!("unknown head mode {v}"))),
        };
        let init_scheme = match r.u8()? {
            0 => InitScheme::Standard,
            1 => InitScheme::NormMatching,
            v => return Err(LearnerError::Corrupt(format!("unknown init scheme {v}"))),
        };
        let k_per_task = r.usize64()?;
        let seed = r.u64()?;
        let cfg = ModelConfig {
            input_dim,
            hidden_widths,
            feature_dim,
            activation,
            head_mode,
            k_per_task,
            init_scheme,
            seed,
        };
        let mut model = Model::new(cfg)?;
        let n_heads = r.usize64()?;
        if n_heads > 4096 {
            return Err(LearnerError::Corrupt(format!(
                "implausible head count {n_heads}"
            )));
        }
        let mut registry = Vec::with_capacity(n_heads);
        for _ in 0..n_heads {
            let task_id = r.usize64()?;
            let blocks = r.usize64()?;
            let n_classes = r.usize64()?;
            if n_classes == 0 || n_classes > 1 << 20 {
                return Err(LearnerError::Corrupt(format!(
                    "implausible class count {n_classes}"
                )));
            }
            let mut classes = Vec::with_capacity(n_classes);
            for _ in 0..n_classes {
                classes.push(r.usize64()?);
            }
            registry.push((task_id, blocks, classes));
        }
        let read_dense = |r: &mut Reader, out_dim: usize, in_dim: usize| {
            let mut w = DMatrix::zeros(out_dim, in_dim);
            for i in 0..out_dim {
                for j in 0..in_dim {
                    w[(i, j)] = r.f64()?;
                }
            }
            let mut b = DVector::zeros(out_dim);
            for i in 0..out_dim {
                b[i] = r.f64()?;
            }
            Ok::<Dense, LearnerError>(Dense { w, b })
        };
        for l in 0..model.trunk.len() {
            let (out_dim, in_dim) = model.trunk[l].w.shape();
            model.trunk[l] = read_dense(&mut r, out_dim, in_dim)?;
        }
        for (task_id, blocks, classes) in registry {
            let dense = read_dense(&mut r, classes.len(), model.cfg.feature_dim)?;
            model.heads.push(Head {
                task_id,
                dense,
                classes,
                blocks,
            });
        }
        if r.pos != bytes.len() {
            return Err(LearnerError::Corrupt(format!(
                "{} trailing bytes",
                bytes.len() - r.pos
            )));
        }
        model.check_feasibility();
        Ok(model)
    }

    pub fn save(&self, path: &Path) -> Result<(), LearnerError> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Model, LearnerError> {
        Model::from_bytes(&std::fs::read(path)?)
    }
}

/// Per-pool sample counts for one batch: equal quotas with the remainder
/// rotating round-robin by step, so every pool's long-run share is equal.
pub(crate) fn plan_quotas(n_pools: usize, batch: usize, step: usize) -> Vec<usize> {
    let q = batch / n_pools;
    let r = batch % n_pools;
    let mut quotas = vec![q; n_pools];
    for i in 0..r {
        quotas[(step + i) % n_pools] += 1;
    }
    quotas
}

fn sample_indices(rng: &mut ChaCha8Rng, pool: usize, quota: usize) -> Vec<usize> {
    if quota <= pool {
        // partial Fisher-Yates: uniform subset without replacement
        let mut idx: Vec<usize> = (0..pool).collect();
        for i in 0..quota {
            let j = rng.random_range(i..pool);
            idx.swap(i, j);
        }
        idx.truncate(quota);
        idx
    } else {
        (0..quota).map(|_| rng.random_range(0..pool)).collect()
    }
}

/// Runs `hyper.steps` SGD steps on the current task's data mixed with the
/// replay pools. Batches are task-balanced: with `P` pools (current task
/// plus one per replay task), each contributes `batch/P` samples with the
/// remainder rotating per step. Quotas larger than a pool are filled by
/// sampling with replacement. Deterministic per `hyper.seed`.
pub fn train_session(
    model: &mut Model,
    current_task: usize,
    data: &LabeledFeatures,
    replay: &[(usize, &LabeledFeatures)],
    hyper: &Hyper,
    scenario: Scenario,
) -> Result<TrainLog, LearnerError> {
    train_session_with(
        model,
        current_task,
        data,
        replay,
        hyper,
        scenario,
        ExecMode::default(),
    )
}

#[allow(clippy::too_many_arguments)]
pub fn train_session_with(
    model: &mut Model,
    current_task: usize,
    data: &LabeledFeatures,
    replay: &[(usize, &LabeledFeatures)],
    hyper: &Hyper,
    scenario: Scenario,
    mode: ExecMode,
) -> Result<TrainLog, LearnerError> {
    train_session_slice(
        model,
        current_task,
        data,
        replay,
        hyper,
        scenario,
        mode,
        0,
        hyper.steps,
    )
}

/// Runs steps `start_step .. start_step + len` of a session. Batch
/// composition at global step `s` depends only on `hyper.seed` and `s`, so
/// a session split into slices (for mid-session measurements) replays the
/// exact batch stream of the unsliced call.
#[allow(clippy::too_many_arguments)]
pub fn train_session_slice(
    model: &mut Model,
    current_task: usize,
    data: &LabeledFeatures,
    replay: &[(usize, &LabeledFeatures)],
    hyper: &Hyper,
    scenario: Scenario,
    mode: ExecMode,
    start_step: usize,
    len: usize,
) -> Result<TrainLog, LearnerError> {
    hyper.validate()?;
    if data.is_empty() {
        return Err(LearnerError::EmptyData);
    }
    for (task, pool) in replay {
        if pool.is_empty() {
            return Err(LearnerError::EmptyData);
        }
        if pool.dim() != model.cfg.input_dim {
            return Err(LearnerError::DimMismatch {
                got: pool.dim(),
                expected: model.cfg.input_dim,
            });
        }
        let _ = task;
    }
    if data.dim() != model.cfg.input_dim {
        return Err(LearnerError::DimMismatch {
            got: data.dim(),
            expected: model.cfg.input_dim,
        });
    }
    model.scenario_heads(scenario)?;

    let mut pools: Vec<(usize, &LabeledFeatures)> = Vec::with_capacity(1 + replay.len());
    pools.push((current_task, data));
    pools.extend_from_slice(replay);
    let n_pools = pools.len();
    let d = model.cfg.input_dim;

    let mut log = TrainLog::new();
    for step in start_step..start_step + len {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(hyper.seed, step as u64));
        let quotas = plan_quotas(n_pools, hyper.batch, step);
        let mut x = DMatrix::zeros(hyper.batch, d);
        let mut labels = Vec::with_capacity(hyper.batch);
        let mut tasks = Vec::with_capacity(hyper.batch);
        let mut at = 0;
        for (p, &(task, pool)) in pools.iter().enumerate() {
            for idx in sample_indices(&mut rng, pool.len(), quotas[p]) {
                for j in 0..d {
                    x[(at, j)] = pool.features()[(idx, j)];
                }
                labels.push(pool.class_ids()[idx]);
                tasks.push(task);
                at += 1;
            }
        }
        debug_assert_eq!(at, hyper.batch);
        let (loss, err, grads) = model.loss_and_grad_with(&x, &labels, &tasks, scenario, mode)?;
        model.apply_update(&grads, hyper.lr, hyper.weight_decay)?;
        log.records.push(StepRecord {
            step: step as u64,
            loss,
            train_error: err,
        });
    }
    log.tpt_onset = detect_tpt(&log);
    Ok(log)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::stats::Split;
    use approx::assert_abs_diff_eq;
    use rand_distr::StandardNormal;

    fn gaussian_task(
        means: &[Vec<f64>],
        class_ids: &[usize],
        task_id: usize,
        n_per: usize,
        sigma: f64,
        seed: u64,
    ) -> LabeledFeatures {
        let d = means[0].len();
        let k = means.len();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut feats = DMatrix::zeros(k * n_per, d);
        let mut labels = Vec::new();
        for (c, mean) in means.iter().enumerate() {
            for r in 0..n_per {
                for j in 0..d {
                    feats[(c * n_per + r, j)] =
                        mean[j] + sigma * rng.sample::<f64, _>(StandardNormal);
                }
                labels.push(class_ids[c]);
            }
        }
        let n = k * n_per;
        LabeledFeatures::new(feats, labels, vec![task_id; n], vec![Split::Train; n]).unwrap()
    }

    fn tiny_config(head_mode: HeadMode) -> ModelConfig {
        ModelConfig {
            input_dim: 4,
            hidden_widths: vec![8],
            feature_dim: 5,
            activation: Activation::Tanh,
            head_mode,
            k_per_task: 2,
            init_scheme: InitScheme::Standard,
            seed: 42,
        }
    }

    #[test]
    fn same_seed_same_parameters() {
        let a = Model::new(tiny_config(HeadMode::Multi)).unwrap();
        let b = Model::new(tiny_config(HeadMode::Multi)).unwrap();
        for (x, y) in a.trunk.iter().zip(&b.trunk) {
            assert_eq!(x.w, y.w);
            assert_eq!(x.b, y.b);
        }
        let mut c = Model::new(ModelConfig {
            seed: 43,
            ..tiny_config(HeadMode::Multi)
        })
        .unwrap();
        assert_ne!(a.trunk[0].w, c.trunk[0].w);
        c.add_head(0, &[0, 1]).unwrap();
        assert_eq!(c.heads.len(), 1);
    }

    #[test]
    fn norm_matching_matches_existing_head_norm() {
        let mut cfg = tiny_config(HeadMode::Multi);
        cfg.init_scheme = InitScheme::NormMatching;
        let mut model = Model::new(cfg).unwrap();
        model.add_head(0, &[0, 1]).unwrap();
        // inflate head 0 to a known norm
        let target = 3.0;
        let norm0 = model.heads[0].dense.w.norm();
        model.heads[0].dense.w *= target / norm0;
        model.add_head(1, &[2, 3]).unwrap();
        assert_abs_diff_eq!(model.heads[1].dense.w.norm(), target, epsilon = 1e-12);
    }

    #[test]
    fn single_head_growth_keeps_classes_and_blocks() {
        let mut model = Model::new(ModelConfig {
            k_per_task: 2,
            ..tiny_config(HeadMode::Single)
        })
        .unwrap();
        model.add_head(0, &[0, 1]).unwrap();
        model.add_head(1, &[4, 2]).unwrap();
        assert_eq!(model.heads.len(), 1);
        assert_eq!(model.heads[0].classes, vec![0, 1, 4, 2]);
        assert_eq!(model.heads[0].blocks, 2);
        assert_eq!(model.heads[0].dense.w.nrows(), 4);
        assert!(matches!(
            model.add_head(2, &[4, 9]),
            Err(LearnerError::DuplicateClass(4))
        ));
    }

    #[test]
    fn feasibility_warning_fires_when_feature_dim_is_tight() {
        let mut model = Model::new(ModelConfig {
            feature_dim: 2,
            k_per_task: 2,
            ..tiny_config(HeadMode::Multi)
        })
        .unwrap();
        model.add_head(0, &[0, 1]).unwrap();
        assert!(model.warnings().is_empty());
        model.add_head(1, &[2, 3]).unwrap();
        assert_eq!(model.warnings().len(), 1);
    }

    #[test]
    fn zero_weight_head_gives_constant_logits_and_duplicated_inputs_identical_features() {
        let mut model = Model::new(tiny_config(HeadMode::Multi)).unwrap();
        model.add_head(0, &[0, 1]).unwrap();
        model.heads[0].dense.w.fill(0.0);
        model.heads[0].dense.b.fill(0.5);
        let x = DMatrix::from_row_slice(2, 4, &[0.3, -1.0, 2.0, 0.1, 0.3, -1.0, 2.0, 0.1]);
        let (logits, classes) = model.logits(&x, HeadSel::Task(0)).unwrap();
        assert_eq!(classes, vec![0, 1]);
        for i in 0..2 {
            assert_eq!(logits[(i, 0)], 0.5);
            assert_eq!(logits[(i, 1)], 0.5);
        }
        let feats = model.features(&x).unwrap();
        for j in 0..5 {
            assert_eq!(feats[(0, j)], feats[(1, j)]);
        }
    }

    fn flatten_params(model: &Model) -> Vec<f64> {
        let mut v = Vec::new();
        for dense in model.trunk.iter().chain(model.heads.iter().map(|h| &h.dense)) {
            v.extend(dense.w.iter().cloned());
            v.extend(dense.b.iter().cloned());
        }
        v
    }

    fn write_params(model: &mut Model, v: &[f64]) {
        let mut at = 0;
        let mut put = |dense: &mut Dense| {
            for x in dense.w.iter_mut() {
                *x = v[at];
                at += 1;
            }
            for x in dense.b.iter_mut() {
                *x = v[at];
                at += 1;
            }
        };
        for dense in model.trunk.iter_mut() {
            put(dense);
        }
        for head in model.heads.iter_mut() {
            put(&mut head.dense);
        }
        assert_eq!(at, v.len());
    }

    fn flatten_grads(grads: &Grads) -> Vec<f64> {
        let mut v = Vec::new();
        for dense in grads.trunk.iter().chain(grads.heads.iter()) {
            v.extend(dense.w.iter().cloned());
            v.extend(dense.b.iter().cloned());
        }
        v
    }

    fn finite_diff_check(scenario: Scenario, head_mode: HeadMode, seed: u64) {
        let mut model = Model::new(ModelConfig {
            seed,
            ..tiny_config(head_mode)
        })
        .unwrap();
        model.add_head(0, &[0, 1]).unwrap();
        if head_mode == HeadMode::Multi && scenario != Scenario::Dil {
            model.add_head(1, &[2, 3]).unwrap();
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xfeed);
        let n = 7;
        let x = DMatrix::from_fn(n, 4, |_, _| rng.sample::<f64, _>(StandardNormal));
        let all_classes: Vec<usize> = model.heads.iter().flat_map(|h| h.classes.clone()).collect();
        let labels: Vec<usize> = (0..n)
            .map(|i| all_classes[i % all_classes.len()])
            .collect();
        let tasks: Vec<usize> = labels
            .iter()
            .map(|&c| {
                model
                    .heads
                    .iter()
                    .position(|h| h.classes.contains(&c))
                    .map(|h| model.heads[h].task_id)
                    .unwrap()
            })
            .collect();
        let (_, _, grads) = model
            .loss_and_grad(&x, &labels, &tasks, scenario)
            .unwrap();
        let analytic = flatten_grads(&grads);
        let theta = flatten_params(&model);
        // probe a deterministic spread of parameters
        let stride = (theta.len() / 17).max(1);
        for p in (0..theta.len()).step_by(stride) {
            let eps = 1e-6 * (1.0 + theta[p].abs());
            let mut plus = theta.clone();
            plus[p] += eps;
            write_params(&mut model, &plus);
            let (lp, _, _) = model.loss_and_grad(&x, &labels, &tasks, scenario).unwrap();
            let mut minus = theta.clone();
            minus[p] -= eps;
            write_params(&mut model, &minus);
            let (lm, _, _) = model.loss_and_grad(&x, &labels, &tasks, scenario).unwrap();
            write_params(&mut model, &theta);
            let fd = (lp - lm) / (2.0 * eps);
            let denom = analytic[p].abs().max(fd.abs()).max(1e-8);
            assert!(
                (analytic[p] - fd).abs() / denom < 1e-5,
                "{scenario:?}/{head_mode:?} param {p}: analytic {} vs fd {}",
                analytic[p],
                fd
            );
        }
    }

    #[test]
    fn gradients_match_finite_differences_all_scenarios() {
        finite_diff_check(Scenario::Cil, HeadMode::Single, 1);
        finite_diff_check(Scenario::Cil, HeadMode::Multi, 2);
        finite_diff_check(Scenario::Til, HeadMode::Multi, 3);
        finite_diff_check(Scenario::Dil, HeadMode::Single, 4);
    }

    #[test]
    fn gradient_is_mode_invariant_across_chunks() {
        let mut model = Model::new(ModelConfig {
            input_dim: 6,
            hidden_widths: vec![16],
            feature_dim: 8,
            activation: Activation::Relu,
            head_mode: HeadMode::Single,
            k_per_task: 3,
            init_scheme: InitScheme::Standard,
            seed: 9,
        })
        .unwrap();
        model.add_head(0, &[0, 1, 2]).unwrap();
        let n = GRAD_CHUNK * 2 + 37; // forces multiple chunks
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let x = DMatrix::from_fn(n, 6, |_, _| rng.sample::<f64, _>(StandardNormal));
        let labels: Vec<usize> = (0..n).map(|i| i % 3).collect();
        let tasks = vec![0; n];
        let (l1, e1, g1) = model
            .loss_and_grad_with(&x, &labels, &tasks, Scenario::Cil, ExecMode::Sequential)
            .unwrap();
        let (l2, e2, g2) = model
            .loss_and_grad_with(&x, &labels, &tasks, Scenario::Cil, ExecMode::Parallel)
            .unwrap();
        assert_eq!(l1, l2);
        assert_eq!(e1, e2);
        for (a, b) in g1.trunk.iter().zip(&g2.trunk) {
            assert_eq!(a.w, b.w);
            assert_eq!(a.b, b.b);
        }
        for (a, b) in g1.heads.iter().zip(&g2.heads) {
            assert_eq!(a.w, b.w);
            assert_eq!(a.b, b.b);
        }
    }

    #[test]
    fn til_isolation_is_exact() {
        let mut model = Model::new(ModelConfig {
            k_per_task: 2,
            ..tiny_config(HeadMode::Multi)
        })
        .unwrap();
        model.add_head(0, &[0, 1]).unwrap();
        model.add_head(1, &[2, 3]).unwrap();
        let frozen_w = model.heads[1].dense.w.clone();
        let frozen_b = model.heads[1].dense.b.clone();
        let data = gaussian_task(&[vec![1.0; 4], vec![-1.0; 4]], &[0, 1], 0, 8, 0.2, 5);
        let hyper = Hyper {
            lr: 0.05,
            weight_decay: 0.01,
            batch: 8,
            steps: 3,
            seed: 11,
        };
        train_session(&mut model, 0, &data, &[], &hyper, Scenario::Til).unwrap();
        // the inactive head moves only by the decay shrink, applied once
        // per step: replaying those multiplies must match bit for bit
        let shrink = 1.0 - hyper.lr * hyper.weight_decay;
        let mut expected_w = frozen_w;
        let mut expected_b = frozen_b;
        for _ in 0..3 {
            expected_w *= shrink;
            expected_b *= shrink;
        }
        assert_eq!(model.heads[1].dense.w, expected_w);
        assert_eq!(model.heads[1].dense.b, expected_b);
    }

    #[test]
    fn zero_gradient_update_is_pure_shrink() {
        let mut model = Model::new(tiny_config(HeadMode::Multi)).unwrap();
        model.add_head(0, &[0, 1]).unwrap();
        let before = flatten_params(&model);
        let grads = Grads {
            trunk: model
                .trunk
                .iter()
                .map(|d| Dense {
                    w: DMatrix::zeros(d.w.nrows(), d.w.ncols()),
                    b: DVector::zeros(d.b.len()),
                })
                .collect(),
            heads: model
                .heads
                .iter()
                .map(|h| Dense {
                    w: DMatrix::zeros(h.dense.w.nrows(), h.dense.w.ncols()),
                    b: DVector::zeros(h.dense.b.len()),
                })
                .collect(),
        };
        model.apply_update(&grads, 0.1, 0.05).unwrap();
        let after = flatten_params(&model);
        for (x, y) in before.iter().zip(&after) {
            assert_eq!(*y, x * (1.0 - 0.1 * 0.05));
        }
    }

    #[test]
    fn separable_task_reaches_terminal_phase() {
        let mut model = Model::new(ModelConfig {
            input_dim: 8,
            hidden_widths: vec![32],
            feature_dim: 8,
            activation: Activation::Relu,
            head_mode: HeadMode::Single,
            k_per_task: 2,
            init_scheme: InitScheme::Standard,
            seed: 3,
        })
        .unwrap();
        model.add_head(0, &[0, 1]).unwrap();
        let mut mean0 = vec![0.0; 8];
        let mut mean1 = vec![0.0; 8];
        mean0[0] = 3.0;
        mean1[0] = -3.0;
        let data = gaussian_task(&[mean0, mean1], &[0, 1], 0, 50, 0.5, 21);
        let hyper = Hyper {
            lr: 0.05,
            weight_decay: 1e-3,
            batch: 32,
            steps: 600,
            seed: 8,
        };
        let log = train_session(&mut model, 0, &data, &[], &hyper, Scenario::Cil).unwrap();
        assert!(log.tpt_onset.is_some(), "never reached the terminal phase");
        assert!(model.evaluate(&data, Scenario::Cil).unwrap() > 0.99);
        // manual scan agrees with the detector
        let manual = log
            .records
            .iter()
            .find(|r| r.train_error == 0.0 && r.loss < TPT_LOSS_THRESHOLD)
            .map(|r| r.step);
        assert_eq!(log.tpt_onset, manual);
    }

    #[test]
    fn detect_tpt_edge_cases() {
        let mut log = TrainLog::new();
        assert_eq!(detect_tpt(&log), None);
        log.records.push(StepRecord {
            step: 0,
            loss: 1e-4,
            train_error: 0.0,
        });
        assert_eq!(detect_tpt(&log), Some(0));
        let never = TrainLog {
            records: vec![StepRecord {
                step: 0,
                loss: 0.5,
                train_error: 0.1,
            }],
            ..TrainLog::default()
        };
        assert_eq!(detect_tpt(&never), None);
    }

    #[test]
    fn log_merge_shifts_steps_and_redetects_onset() {
        let mut a = TrainLog {
            records: vec![StepRecord {
                step: 0,
                loss: 0.9,
                train_error: 0.4,
            }],
            ..TrainLog::default()
        };
        let b = TrainLog {
            records: vec![
                StepRecord {
                    step: 0,
                    loss: 0.2,
                    train_error: 0.1,
                },
                StepRecord {
                    step: 1,
                    loss: 1e-4,
                    train_error: 0.0,
                },
            ],
            ..TrainLog::default()
        };
        a.merge(b);
        assert_eq!(a.records.len(), 3);
        assert_eq!(a.records[2].step, 2);
        assert_eq!(a.tpt_onset, Some(2));
    }

    #[test]
    fn quota_plan_is_balanced_with_rotating_remainder() {
        let q = plan_quotas(3, 8, 0);
        assert_eq!(q.iter().sum::<usize>(), 8);
        assert!(q.iter().all(|&v| v == 2 || v == 3));
        // remainder rotates across steps
        let q0 = plan_quotas(3, 8, 0);
        let q1 = plan_quotas(3, 8, 1);
        assert_ne!(q0, q1);
        // across a full rotation every pool receives the same total
        let mut totals = vec![0usize; 3];
        for step in 0..3 {
            for (i, v) in plan_quotas(3, 8, step).iter().enumerate() {
                totals[i] += v;
            }
        }
        assert!(totals.iter().all(|&t| t == totals[0]));
    }

    #[test]
    fn oversized_quota_falls_back_to_replacement() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let picked = sample_indices(&mut rng, 3, 10);
        assert_eq!(picked.len(), 10);
        assert!(picked.iter().all(|&i| i < 3));
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let subset = sample_indices(&mut rng, 10, 4);
        let mut sorted = subset.clone();
        sorted.sort_unstable();
        sorted.dedup();
        assert_eq!(sorted.len(), 4, "without-replacement path must not repeat");
    }

    #[test]
    fn training_is_deterministic_per_seed() {
        let make = || {
            let mut model = Model::new(tiny_config(HeadMode::Single)).unwrap();
            model.add_head(0, &[0, 1]).unwrap();
            let data = gaussian_task(&[vec![1.0; 4], vec![-1.0; 4]], &[0, 1], 0, 20, 0.3, 2);
            let hyper = Hyper {
                lr: 0.05,
                weight_decay: 1e-3,
                batch: 16,
                steps: 25,
                seed: 77,
            };
            train_session(&mut model, 0, &data, &[], &hyper, Scenario::Cil).unwrap();
            flatten_params(&model)
        };
        assert_eq!(make(), make());
    }

    #[test]
    fn sliced_session_replays_the_unsliced_batch_stream() {
        let data = gaussian_task(&[vec![1.0; 4], vec![-1.0; 4]], &[0, 1], 0, 20, 0.3, 2);
        let hyper = Hyper {
            lr: 0.05,
            weight_decay: 1e-3,
            batch: 16,
            steps: 25,
            seed: 77,
        };
        let mut whole = Model::new(tiny_config(HeadMode::Single)).unwrap();
        whole.add_head(0, &[0, 1]).unwrap();
        let log_whole =
            train_session(&mut whole, 0, &data, &[], &hyper, Scenario::Cil).unwrap();

        let mut sliced = Model::new(tiny_config(HeadMode::Single)).unwrap();
        sliced.add_head(0, &[0, 1]).unwrap();
        let mut records = Vec::new();
        for (start, len) in [(0usize, 10usize), (10, 7), (17, 8)] {
            let log = train_session_slice(
                &mut sliced,
                0,
                &data,
                &[],
                &hyper,
                Scenario::Cil,
                ExecMode::default(),
                start,
                len,
            )
            .unwrap();
            records.extend(log.records);
        }
        assert_eq!(flatten_params(&whole), flatten_params(&sliced));
        assert_eq!(records.len(), log_whole.records.len());
        for (a, b) in records.iter().zip(&log_whole.records) {
            assert_eq!(a.step, b.step);
            assert_eq!(a.loss.to_bits(), b.loss.to_bits());
        }
    }

    #[test]
    fn untouched_input_directions_freeze_exactly_without_decay() {
        // data supported on the first two input coordinates: the other
        // four first-layer weight columns see a gradient of exactly zero,
        // so with wd = 0 they never move, and with wd > 0 they change by
        // the pure shrink alone
        let build = || {
            let mut model = Model::new(ModelConfig {
                input_dim: 6,
                hidden_widths: vec![16],
                feature_dim: 6,
                activation: Activation::Tanh,
                head_mode: HeadMode::Single,
                k_per_task: 2,
                init_scheme: InitScheme::Standard,
                seed: 12,
            })
            .unwrap();
            model.add_head(0, &[0, 1]).unwrap();
            model
        };
        let data = {
            let mut rng = ChaCha8Rng::seed_from_u64(6);
            let n_per = 40;
            let mut feats = DMatrix::zeros(2 * n_per, 6);
            let mut labels = Vec::new();
            for c in 0..2 {
                for r in 0..n_per {
                    let row = c * n_per + r;
                    feats[(row, 0)] = if c == 0 { 2.0 } else { -2.0 };
                    feats[(row, 0)] += 0.3 * rng.sample::<f64, _>(StandardNormal);
                    feats[(row, 1)] = 0.3 * rng.sample::<f64, _>(StandardNormal);
                    labels.push(c);
                }
            }
            let n = 2 * n_per;
            LabeledFeatures::new(feats, labels, vec![0; n], vec![Split::Train; n]).unwrap()
        };

        let mut frozen = build();
        let init_cols = frozen.trunk[0].w.columns(2, 4).into_owned();
        let hyper = Hyper {
            lr: 0.05,
            weight_decay: 0.0,
            batch: 32,
            steps: 300,
            seed: 4,
        };
        train_session(&mut frozen, 0, &data, &[], &hyper, Scenario::Cil).unwrap();
        assert_eq!(frozen.trunk[0].w.columns(2, 4).into_owned(), init_cols);
        // the touched columns must actually have moved
        assert_ne!(
            frozen.trunk[0].w.columns(0, 2).into_owned(),
            build().trunk[0].w.columns(0, 2).into_owned()
        );

        let mut decayed = build();
        let with_wd = Hyper {
            weight_decay: 1e-2,
            ..hyper
        };
        train_session(&mut decayed, 0, &data, &[], &with_wd, Scenario::Cil).unwrap();
        let mut expected = init_cols;
        for _ in 0..with_wd.steps {
            expected *= 1.0 - with_wd.lr * with_wd.weight_decay;
        }
        assert_eq!(decayed.trunk[0].w.columns(2, 4).into_owned(), expected);
    }

    #[test]
    fn later_standard_head_is_smaller_than_a_trained_one() {
        let mut model = Model::new(ModelConfig {
            input_dim: 4,
            hidden_widths: vec![16],
            feature_dim: 6,
            activation: Activation::Relu,
            head_mode: HeadMode::Multi,
            k_per_task: 2,
            init_scheme: InitScheme::Standard,
            seed: 15,
        })
        .unwrap();
        model.add_head(0, &[0, 1]).unwrap();
        let data = gaussian_task(&[vec![2.0; 4], vec![-2.0; 4]], &[0, 1], 0, 30, 0.3, 8);
        let hyper = Hyper {
            lr: 0.1,
            weight_decay: 1e-4,
            batch: 32,
            steps: 800,
            seed: 2,
        };
        train_session(&mut model, 0, &data, &[], &hyper, Scenario::Til).unwrap();
        model.add_head(1, &[2, 3]).unwrap();
        let trained = model.heads[0].dense.w.norm();
        let fresh = model.heads[1].dense.w.norm();
        assert!(
            fresh < trained,
            "trained head {trained} should outweigh fresh head {fresh}"
        );
    }

    #[test]
    fn evaluate_routes_by_scenario_and_breaks_ties_low() {
        let mut model = Model::new(tiny_config(HeadMode::Multi)).unwrap();
        model.add_head(0, &[0, 1]).unwrap();
        model.add_head(1, &[2, 3]).unwrap();
        // zero everything: all logits tie, prediction must be the lowest id
        for head in &mut model.heads {
            head.dense.w.fill(0.0);
            head.dense.b.fill(0.0);
        }
        for dense in &mut model.trunk {
            dense.w.fill(0.0);
            dense.b.fill(0.0);
        }
        let feats = DMatrix::zeros(2, 4);
        let data = LabeledFeatures::new(
            feats,
            vec![0, 2],
            vec![0, 1],
            vec![Split::Population; 2],
        )
        .unwrap();
        // CIL: every sample predicted as class 0
        assert_abs_diff_eq!(model.evaluate(&data, Scenario::Cil).unwrap(), 0.5);
        // TIL: sample 2 routes to head 1 whose lowest class is 2
        assert_abs_diff_eq!(model.evaluate(&data, Scenario::Til).unwrap(), 1.0);
        // unknown task head errors
        let bad = LabeledFeatures::new(DMatrix::zeros(1, 4), vec![0], vec![9], vec![Split::Train])
            .unwrap();
        assert!(matches!(
            model.evaluate(&bad, Scenario::Til),
            Err(LearnerError::UnknownHead(9))
        ));
    }

    #[test]
    fn checkpoint_round_trips_bit_exactly() {
        let mut model = Model::new(ModelConfig {
            input_dim: 5,
            hidden_widths: vec![7, 6],
            feature_dim: 4,
            activation: Activation::Relu,
            head_mode: HeadMode::Multi,
            k_per_task: 2,
            init_scheme: InitScheme::NormMatching,
            seed: 99,
        })
        .unwrap();
        model.add_head(0, &[0, 1]).unwrap();
        model.add_head(3, &[4, 2]).unwrap();
        let bytes = model.to_bytes();
        let back = Model::from_bytes(&bytes).unwrap();
        assert_eq!(back.to_bytes(), bytes);
        assert_eq!(back.heads[1].task_id, 3);
        assert_eq!(back.heads[1].classes, vec![4, 2]);
        let x = DMatrix::from_row_slice(1, 5, &[0.1, -0.2, 0.3, 0.7, -1.1]);
        assert_eq!(
            model.features(&x).unwrap(),
            back.features(&x).unwrap()
        );

        let mut corrupt = bytes.clone();
        corrupt[0] = b'X';
        assert!(matches!(
            Model::from_bytes(&corrupt),
            Err(LearnerError::Corrupt(_))
        ));
        assert!(matches!(
            Model::from_bytes(&bytes[..bytes.len() - 3]),
            Err(LearnerError::Corrupt(_))
        ));
        let mut trailing = bytes.clone();
        trailing.push(0);
        assert!(matches!(
            Model::from_bytes(&trailing),
            Err(LearnerError::Corrupt(_))
        ));
    }

    #[test]
    fn checkpoint_survives_disk_round_trip() {
        let mut model = Model::new(tiny_config(HeadMode::Single)).unwrap();
        model.add_head(0, &[0, 1]).unwrap();
        let dir = std::env::temp_dir().join(format!("collapselab-test-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("model.clmd");
        model.save(&path).unwrap();
        let back = Model::load(&path).unwrap();
        assert_eq!(back.to_bytes(), model.to_bytes());
        std::fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn scenario_head_requirements_are_enforced() {
        let mut multi = Model::new(tiny_config(HeadMode::Multi)).unwrap();
        multi.add_head(0, &[0, 1]).unwrap();
        multi.add_head(1, &[2, 3]).unwrap();
        let x = DMatrix::zeros(1, 4);
        assert!(matches!(
            multi.loss_and_grad(&x, &[0], &[0], Scenario::Dil),
            Err(LearnerError::ScenarioHeads(_))
        ));
        let mut single = Model::new(tiny_config(HeadMode::Single)).unwrap();
        single.add_head(0, &[0, 1]).unwrap();
        assert!(matches!(
            single.loss_and_grad(&x, &[0], &[0], Scenario::Til),
            Err(LearnerError::ScenarioHeads(_))
        ));
        assert!(matches!(
            single.loss_and_grad(&x, &[7], &[0], Scenario::Cil),
            Err(LearnerError::UnknownClass(7))
        ));
    }
}

//! Sequential training over a task stream and the resulting report.

use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::buffer::{memory_mb, BufferConfig, GradBuffer};
use crate::error::{Error, Result};
use crate::metrics::{average_accuracy, bwt, forgetting, forgetting_curve, psm, AccuracyMatrix};
use crate::model::{Mlp, MlpShape, DEFAULT_HIDDEN};
use crate::optim::{
    apply_step, ogd_direction, sfao_direction, sgd_direction, Decision, DecisionRecord,
    GateDecision, OptState, Thresholds, NO_SCORE,
};
use crate::stream::{StreamKind, TaskStream};
use crate::subspace::{ParamVector, DEFAULT_RANK_TOL};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Sgd,
    Ogd,
    Sfao,
}

impl Method {
    pub fn name(&self) -> &'static str {
        match self {
            Method::Sgd => "sgd",
            Method::Ogd => "ogd",
            Method::Sfao => "sfao",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimizerConfig {
    pub method: Method,
    pub thresholds: Thresholds,
    /// Monte Carlo sample size; `None` scans the whole buffer.
    pub k: Option<usize>,
    pub capacity: usize,
    pub tau_add: f64,
    pub tau_drop: f64,
    pub rank_tol: f64,
    /// Admit the current gradient into the buffer every this many steps.
    pub admit_every: usize,
    /// One buffer per parameter tensor, or a single buffer over all of them.
    pub per_layer: bool,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        let buf = BufferConfig::default();
        OptimizerConfig {
            method: Method::Sfao,
            thresholds: Thresholds::default(),
            k: Some(20),
            capacity: buf.capacity,
            tau_add: buf.tau_add,
            tau_drop: buf.tau_drop,
            rank_tol: DEFAULT_RANK_TOL,
            admit_every: 10,
            per_layer: true,
            lr: 1e-3,
            momentum: 0.9,
            weight_decay: 0.0,
        }
    }
}

impl OptimizerConfig {
    pub fn buffer_config(&self) -> BufferConfig {
        BufferConfig {
            capacity: self.capacity,
            tau_add: self.tau_add,
            tau_drop: self.tau_drop,
            rank_tol: self.rank_tol,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.buffer_config().validate()?;
        if self.k == Some(0) {
            return Err(Error::BadConfig("k must be positive".into()));
        }
        if self.admit_every == 0 {
            return Err(Error::BadConfig("admit_every must be positive".into()));
        }
        OptState::new(1, self.lr, self.momentum, self.weight_decay)?;
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub hidden: usize,
    /// On split streams, restrict the softmax to the current task's classes
    /// while training. Evaluation always uses the full head.
    pub mask_logits: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 2,
            batch_size: 32,
            hidden: DEFAULT_HIDDEN,
            mask_logits: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 || self.hidden == 0 {
            return Err(Error::BadConfig(
                "epochs, batch_size and hidden must be positive".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct DecisionCounts {
    pub accept: u64,
    pub project: u64,
    pub discard: u64,
}

impl DecisionCounts {
    fn record(&mut self, d: Decision) {
        match d {
            Decision::Accept => self.accept += 1,
            Decision::Project => self.project += 1,
            Decision::Discard => self.discard += 1,
        }
    }
}

/// Metrics that are pure functions of the accuracy matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub per_task_forgetting: Vec<f64>,
    pub avg_forgetting: f64,
    pub bwt: f64,
    pub psm: f64,
    pub avg_accuracy: f64,
    pub final_task_accuracy: f64,
    pub final_accuracies: Vec<f64>,
    /// Average forgetting after each task from the second one on.
    pub forgetting_curve: Vec<f64>,
}

impl Metrics {
    pub fn from_matrix(m: &AccuracyMatrix) -> Result<Self> {
        m.validate()?;
        let (per_task_forgetting, avg_forgetting) = forgetting(m)?;
        let last = m.tasks() - 1;
        let final_accuracies = (0..m.tasks())
            .map(|i| {
                m.get(i, last).ok_or(Error::IncompleteMatrix {
                    task: i,
                    after: last,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Metrics {
            per_task_forgetting,
            avg_forgetting,
            bwt: bwt(m)?,
            psm: psm(m)?,
            avg_accuracy: average_accuracy(m)?,
            final_task_accuracy: final_accuracies[last],
            final_accuracies,
            forgetting_curve: forgetting_curve(m)?,
        })
    }
}

/// Published stored-direction and memory figures for Split MNIST, carried in
/// every report so runs can be read against them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MemoryReference {
    pub sfao_stored_directions: usize,
    pub ogd_stored_directions: usize,
    /// `sfao_stored_directions / ogd_stored_directions`, independent of model size.
    pub stored_direction_ratio: f64,
    pub sfao_reported_mb: f64,
    pub ogd_reported_mb: f64,
    pub reported_mb_ratio: f64,
    pub note: String,
}

impl Default for MemoryReference {
    fn default() -> Self {
        let (sfao_n, ogd_n) = (200usize, 5625usize);
        let (sfao_mb, ogd_mb) = (153.71, 1441.82);
        MemoryReference {
            sfao_stored_directions: sfao_n,
            ogd_stored_directions: ogd_n,
            stored_direction_ratio: memory_mb(sfao_n, 1) / memory_mb(ogd_n, 1),
            sfao_reported_mb: sfao_mb,
            ogd_reported_mb: ogd_mb,
            reported_mb_ratio: sfao_mb / ogd_mb,
            note: "memory scales linearly in stored directions, so the direction ratio (~0.036) and the \
                   reported megabyte ratio (~0.107) cannot both hold for one parameter count"
                .into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub method: Method,
    pub seed: u64,
    pub lambda_proj: f64,
    pub lambda_accept: f64,
    pub matrix: AccuracyMatrix,
    #[serde(flatten)]
    pub metrics: Metrics,
    pub memory_mb: f64,
    pub stored_directions: Vec<usize>,
    pub decision_counts: DecisionCounts,
    pub memory_reference: MemoryReference,
    pub wall_clock_seconds: f64,
}

/// Everything a run produces.
#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub report: RunReport,
    pub decisions: Vec<DecisionRecord>,
    pub model: Mlp,
    pub buffers: Vec<GradBuffer>,
}

/// Emitted once per step and parameter group, after the update and before the
/// buffer admits anything from this step.
pub struct StepEvent<'a> {
    pub step: u64,
    pub task: usize,
    pub group: usize,
    pub grad: &'a ParamVector,
    pub direction: &'a ParamVector,
    pub decision: GateDecision,
    pub buffer: &'a GradBuffer,
    pub params_after: &'a ParamVector,
}

pub fn run_continual(
    stream: &TaskStream,
    opt: &OptimizerConfig,
    train: &TrainConfig,
    seed: u64,
) -> Result<RunReport> {
    Ok(run_continual_observed(stream, opt, train, seed, |_| {})?.report)
}

pub fn run_continual_observed<F>(
    stream: &TaskStream,
    opt: &OptimizerConfig,
    train: &TrainConfig,
    seed: u64,
    mut observer: F,
) -> Result<RunOutcome>
where
    F: FnMut(&StepEvent<'_>),
{
    opt.validate()?;
    train.validate()?;
    if stream.len() < 2 {
        return Err(Error::BadConfig("a stream needs at least 2 tasks".into()));
    }
    let started = Instant::now();

    let shape = MlpShape {
        in_dim: stream.in_dim,
        hidden: train.hidden,
        classes: stream.num_classes,
    };
    let mut init_rng = ChaCha8Rng::seed_from_u64(seed);
    let mut model = Mlp::init(shape, &mut init_rng);
    let mut order_rng = ChaCha8Rng::seed_from_u64(seed);
    order_rng.set_stream(1);

    let tensor_dims = shape.layer_dims();
    let group_dims: Vec<usize> = if opt.per_layer {
        tensor_dims.to_vec()
    } else {
        vec![shape.num_params()]
    };
    let mut buffers: Vec<GradBuffer> = group_dims
        .iter()
        .enumerate()
        .map(|(g, &d)| GradBuffer::new(d, opt.buffer_config(), buffer_seed(seed, g)))
        .collect();
    let mut states: Vec<OptState> = group_dims
        .iter()
        .map(|&d| OptState::new(d, opt.lr, opt.momentum, opt.weight_decay))
        .collect::<Result<_>>()?;

    let mut matrix = AccuracyMatrix::new(stream.len());
    let mut decisions = Vec::new();
    let mut counts = DecisionCounts::default();
    let mut step: u64 = 0;

    for (t, task) in stream.tasks.iter().enumerate() {
        let active = (train.mask_logits && stream.kind == StreamKind::SplitLabels)
            .then_some(task.classes.as_slice());
        let mut order: Vec<usize> = (0..task.train.len()).collect();
        for _ in 0..train.epochs {
            order.shuffle(&mut order_rng);
            for rows in order.chunks(train.batch_size) {
                let batch = task.train.select(rows);
                let (loss, grads) = model.loss_and_grads_masked(&batch, active)?;
                if !loss.is_finite() {
                    return Err(Error::NonFiniteLoss {
                        step: step as usize,
                    });
                }
                let grads = regroup(grads, opt.per_layer);
                let thetas = regroup(model.layers(), opt.per_layer);
                let mut next = Vec::with_capacity(thetas.len());
                for (gi, (g, theta)) in grads.iter().zip(&thetas).enumerate() {
                    let buf = &mut buffers[gi];
                    let (u, d) = direction(opt, g, buf).map_err(|e| e.in_layer(gi))?;
                    let theta_next =
                        apply_step(theta, &u, &mut states[gi]).map_err(|e| e.in_layer(gi))?;
                    counts.record(d.kind);
                    decisions.push(DecisionRecord {
                        step,
                        layer: gi,
                        score: d.score,
                        decision: d.kind,
                        u_norm: u.norm(),
                        buffer_size: buf.len(),
                    });
                    observer(&StepEvent {
                        step,
                        task: t,
                        group: gi,
                        grad: g,
                        direction: &u,
                        decision: d,
                        buffer: buf,
                        params_after: &theta_next,
                    });
                    next.push(theta_next);
                }
                model.set_layers(&ungroup(next, &tensor_dims))?;
                if opt.method != Method::Sgd && step.is_multiple_of(opt.admit_every as u64) {
                    for (buf, g) in buffers.iter_mut().zip(&grads) {
                        buf.admit(g)?;
                    }
                }
                step += 1;
            }
        }
        for (i, past) in stream.tasks.iter().enumerate().take(t + 1) {
            matrix.set(i, t, model.evaluate(&past.test)?)?;
        }
    }

    let metrics = Metrics::from_matrix(&matrix)?;
    let report = RunReport {
        method: opt.method,
        seed,
        lambda_proj: opt.thresholds.lambda_proj(),
        lambda_accept: opt.thresholds.lambda_accept(),
        matrix,
        metrics,
        memory_mb: buffers.iter().map(GradBuffer::memory_mb).sum(),
        stored_directions: buffers.iter().map(GradBuffer::len).collect(),
        decision_counts: counts,
        memory_reference: MemoryReference::default(),
        wall_clock_seconds: started.elapsed().as_secs_f64(),
    };
    Ok(RunOutcome {
        report,
        decisions,
        model,
        buffers,
    })
}

fn direction(
    opt: &OptimizerConfig,
    g: &ParamVector,
    buf: &mut GradBuffer,
) -> Result<(ParamVector, GateDecision)> {
    match opt.method {
        Method::Sgd => Ok((
            sgd_direction(g),
            GateDecision {
                kind: Decision::Accept,
                score: NO_SCORE,
            },
        )),
        Method::Ogd => Ok((
            ogd_direction(g, buf)?,
            GateDecision {
                kind: Decision::Project,
                score: NO_SCORE,
            },
        )),
        Method::Sfao => {
            let k = opt.k.unwrap_or(usize::MAX);
            sfao_direction(g, buf, &opt.thresholds, k)
        }
    }
}

fn buffer_seed(seed: u64, group: usize) -> u64 {
    seed ^ (0x9e37_79b9_7f4a_7c15u64.wrapping_mul(group as u64 + 1))
}

fn regroup(tensors: Vec<ParamVector>, per_layer: bool) -> Vec<ParamVector> {
    if per_layer {
        return tensors;
    }
    let flat: Vec<f64> = tensors
        .into_iter()
        .flat_map(ParamVector::into_inner)
        .collect();
    vec![ParamVector::new(flat)]
}

fn ungroup(groups: Vec<ParamVector>, dims: &[usize]) -> Vec<ParamVector> {
    if groups.len() == dims.len() {
        return groups;
    }
    let flat = groups
        .into_iter()
        .next()
        .map(ParamVector::into_inner)
        .unwrap_or_default();
    let mut out = Vec::with_capacity(dims.len());
    let mut at = 0;
    for &d in dims {
        out.push(ParamVector::new(flat[at..at + d].to_vec()));
        at += d;
    }
    out
}

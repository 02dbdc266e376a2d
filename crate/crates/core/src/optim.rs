//! Similarity-gated updates and the SGD / OGD baselines.
//!
//! For each layer the current gradient `g` is compared against a random subset
//! of that layer's [`GradBuffer`]. The largest sampled cosine `ŝ` picks one of
//! three directions:
//!
//! | condition                          | direction        |
//! |------------------------------------|------------------|
//! | `ŝ > lambda_accept`                | `g`              |
//! | `lambda_proj < ŝ <= lambda_accept` | `(I − QQᵀ) g`    |
//! | `ŝ <= lambda_proj`                 | `0`              |
//!
//! The chosen direction then feeds a momentum step with decoupled weight decay:
//! `m ← βm + (1−β)u`, `θ ← (1−ηλ)θ − ηm`.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::buffer::GradBuffer;
use crate::error::{Error, Result};
use crate::subspace::{ParamVector, ZERO_NORM};

/// Score reported when no cosine was computed (empty buffer, zero gradient, or
/// a rule that does not gate).
pub const NO_SCORE: f64 = -1.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Thresholds {
    lambda_proj: f64,
    lambda_accept: f64,
}

impl Thresholds {
    pub fn new(lambda_proj: f64, lambda_accept: f64) -> Result<Self> {
        let in_range = |x: f64| (-1.0..=1.0).contains(&x);
        if !(in_range(lambda_proj) && in_range(lambda_accept)) || lambda_proj > lambda_accept {
            return Err(Error::InvalidThresholds {
                proj: lambda_proj,
                accept: lambda_accept,
            });
        }
        Ok(Thresholds {
            lambda_proj,
            lambda_accept,
        })
    }

    /// Every observed score projects.
    pub fn always_project() -> Self {
        Thresholds {
            lambda_proj: -1.0,
            lambda_accept: 1.0,
        }
    }

    /// Every observed score discards.
    pub fn hard_reject() -> Self {
        Thresholds {
            lambda_proj: 1.0,
            lambda_accept: 1.0,
        }
    }

    pub fn lambda_proj(&self) -> f64 {
        self.lambda_proj
    }

    pub fn lambda_accept(&self) -> f64 {
        self.lambda_accept
    }
}

impl Default for Thresholds {
    fn default() -> Self {
        Thresholds {
            lambda_proj: 0.80,
            lambda_accept: 0.95,
        }
    }
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawThresholds {
    lambda_proj: f64,
    lambda_accept: f64,
}

impl<'de> Deserialize<'de> for Thresholds {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let raw = RawThresholds::deserialize(d)?;
        Thresholds::new(raw.lambda_proj, raw.lambda_accept).map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Decision {
    Accept,
    Project,
    Discard,
}

impl fmt::Display for Decision {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Decision::Accept => "accept",
            Decision::Project => "project",
            Decision::Discard => "discard",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GateDecision {
    pub kind: Decision,
    /// Sampled maximum cosine, or [`NO_SCORE`].
    pub score: f64,
}

/// Maps a sampled score onto a decision. `None` stands for an empty buffer and
/// always accepts.
pub fn gate(score: Option<f64>, th: &Thresholds) -> GateDecision {
    let Some(score) = score else {
        return GateDecision {
            kind: Decision::Accept,
            score: NO_SCORE,
        };
    };
    let kind = if score > th.lambda_accept {
        Decision::Accept
    } else if score > th.lambda_proj {
        Decision::Project
    } else {
        Decision::Discard
    };
    GateDecision { kind, score }
}

/// Gated direction for one layer. `k` is the Monte Carlo sample size; values at
/// or above the buffer length scan the whole buffer.
pub fn sfao_direction(
    g: &ParamVector,
    buf: &mut GradBuffer,
    th: &Thresholds,
    k: usize,
) -> Result<(ParamVector, GateDecision)> {
    g.check_dim(buf.dim())?;
    if k == 0 {
        return Err(Error::BadConfig("sample size k must be positive".into()));
    }
    if g.norm() <= ZERO_NORM {
        let d = GateDecision {
            kind: Decision::Discard,
            score: NO_SCORE,
        };
        return Ok((ParamVector::zeros(g.dim()), d));
    }
    let score = if buf.is_empty() {
        None
    } else {
        let subset = buf.sample_subset(k)?;
        match buf.mc_max_cos(g, &subset) {
            Ok(s) => Some(s),
            Err(Error::EmptyBuffer) => None,
            Err(e) => return Err(e),
        }
    };
    let decision = gate(score, th);
    let u = match decision.kind {
        Decision::Accept => g.clone(),
        Decision::Project => buf.basis().project_out(g)?,
        Decision::Discard => ParamVector::zeros(g.dim()),
    };
    Ok((u, decision))
}

pub fn sgd_direction(g: &ParamVector) -> ParamVector {
    g.clone()
}

/// Projection onto the orthogonal complement of the buffer span.
pub fn ogd_direction(g: &ParamVector, buf: &GradBuffer) -> Result<ParamVector> {
    buf.basis().project_out(g)
}

/// Momentum and learning-rate state for one layer.
#[derive(Debug, Clone, PartialEq)]
pub struct OptState {
    pub momentum: ParamVector,
    pub beta: f64,
    pub lr: f64,
    pub weight_decay: f64,
    pub step_count: u64,
}

impl OptState {
    pub fn new(dim: usize, lr: f64, beta: f64, weight_decay: f64) -> Result<Self> {
        if !(lr > 0.0 && lr.is_finite()) {
            return Err(Error::BadConfig(format!(
                "learning rate {lr} must be positive"
            )));
        }
        if !(0.0..1.0).contains(&beta) {
            return Err(Error::BadConfig(format!("momentum {beta} outside [0, 1)")));
        }
        if !(weight_decay >= 0.0 && weight_decay.is_finite()) {
            return Err(Error::BadConfig(format!(
                "weight decay {weight_decay} must be non-negative"
            )));
        }
        Ok(OptState {
            momentum: ParamVector::zeros(dim),
            beta,
            lr,
            weight_decay,
            step_count: 0,
        })
    }
}

/// `m ← βm + (1−β)u`, returns `(1 − η·wd)·θ − η·m`.
pub fn apply_step(
    theta: &ParamVector,
    u: &ParamVector,
    state: &mut OptState,
) -> Result<ParamVector> {
    u.check_dim(theta.dim())?;
    state.momentum.check_dim(theta.dim())?;
    let (beta, lr) = (state.beta, state.lr);
    let shrink = 1.0 - lr * state.weight_decay;
    for (m, &ui) in state.momentum.iter_mut().zip(u.iter()) {
        *m = beta * *m + (1.0 - beta) * ui;
    }
    let next = theta
        .iter()
        .zip(state.momentum.iter())
        .map(|(&t, &m)| shrink * t - lr * m)
        .collect();
    state.step_count += 1;
    Ok(ParamVector::new(next))
}

/// Applies the gated direction and step independently to each layer.
pub fn per_layer_step(
    grads: &[ParamVector],
    buffers: &mut [GradBuffer],
    ths: &[Thresholds],
    ks: &[usize],
    states: &mut [OptState],
    thetas: &[ParamVector],
) -> Result<(Vec<ParamVector>, Vec<GateDecision>)> {
    let layers = grads.len();
    let check = |what: &'static str, found: usize| {
        if found != layers {
            Err(Error::LengthMismatch {
                what,
                expected: layers,
                found,
            })
        } else {
            Ok(())
        }
    };
    check("buffers", buffers.len())?;
    check("thresholds", ths.len())?;
    check("sample sizes", ks.len())?;
    check("optimizer states", states.len())?;
    check("parameters", thetas.len())?;

    let mut next = Vec::with_capacity(layers);
    let mut decisions = Vec::with_capacity(layers);
    for (l, g) in grads.iter().enumerate() {
        let (u, d) =
            sfao_direction(g, &mut buffers[l], &ths[l], ks[l]).map_err(|e| e.in_layer(l))?;
        let theta = apply_step(&thetas[l], &u, &mut states[l]).map_err(|e| e.in_layer(l))?;
        next.push(theta);
        decisions.push(d);
    }
    Ok((next, decisions))
}

/// One row of the decision log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecisionRecord {
    pub step: u64,
    pub layer: usize,
    pub score: f64,
    pub decision: Decision,
    pub u_norm: f64,
    pub buffer_size: usize,
}

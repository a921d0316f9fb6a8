//! Gate scoring and expert selection at three granularities.
//!
//! The gate itself is always the same object: one linear map from the model
//! dimension to n expert logits followed by a row softmax. What changes per
//! level is only what gets scored:
//!
//! - token: every row of x is scored on its own, one gating group per token
//! - sequence: the mean-pooled row of x is scored once for the whole batch
//! - task: a learnable embedding row looked up by task id is scored once
//!
//! Selection keeps the m largest scores per group. Ties break toward the
//! lower expert index, selected indices are emitted in descending-score
//! order, and an optional renormalization rescales the kept scores to sum
//! to one.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Matrix2D, Rng};

/// Granularity at which gating decisions are made.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GateLevel {
    Token,
    Sequence,
    Task,
}

impl GateLevel {
    pub fn name(self) -> &'static str {
        match self {
            GateLevel::Token => "token",
            GateLevel::Sequence => "sequence",
            GateLevel::Task => "task",
        }
    }
}

/// Learnable gate parameters: the scoring map and, when task-level routing is
/// in play, one embedding row per task.
#[derive(Debug, Clone, PartialEq)]
pub struct GateParams {
    w_gate: Matrix2D,
    task_embeddings: Option<Matrix2D>,
}

impl GateParams {
    /// Seeded init of the d x n scoring map, uniform in (-a, a) with
    /// a = sqrt(6 / (d + n)); no task table.
    pub fn init(d: usize, n: usize, seed: u64) -> Result<Self> {
        if d == 0 || n == 0 {
            return Err(Error::EmptyInput("GateParams::init"));
        }
        let a = (6.0 / (d + n) as f64).sqrt();
        let mut rng = Rng::new(seed);
        Ok(Self {
            w_gate: Matrix2D::random_uniform(d, n, -a, a, &mut rng),
            task_embeddings: None,
        })
    }

    /// Same as `init` plus a num_tasks x d embedding table, rows uniform in
    /// (-1/sqrt(d), 1/sqrt(d)) so each row starts at unit-ish norm.
    pub fn init_with_tasks(d: usize, n: usize, num_tasks: usize, seed: u64) -> Result<Self> {
        let mut gate = Self::init(d, n, seed)?;
        if num_tasks == 0 {
            return Err(Error::EmptyInput("GateParams::init_with_tasks"));
        }
        let b = 1.0 / (d as f64).sqrt();
        // Continue the same stream so (seed, shapes) fixes all parameters.
        let mut rng = Rng::new(seed);
        let _ = Matrix2D::random_uniform(d, n, 0.0, 1.0, &mut rng); // advance past w_gate draws
        gate.task_embeddings = Some(Matrix2D::random_uniform(num_tasks, d, -b, b, &mut rng));
        Ok(gate)
    }

    pub fn from_parts(w_gate: Matrix2D, task_embeddings: Option<Matrix2D>) -> Result<Self> {
        if let Some(t) = &task_embeddings {
            if t.cols() != w_gate.rows() {
                return Err(Error::ShapeMismatch {
                    op: "GateParams::from_parts",
                    left: w_gate.shape(),
                    right: t.shape(),
                });
            }
        }
        Ok(Self { w_gate, task_embeddings })
    }

    pub fn d(&self) -> usize {
        self.w_gate.rows()
    }

    pub fn n_experts(&self) -> usize {
        self.w_gate.cols()
    }

    pub fn w_gate(&self) -> &Matrix2D {
        &self.w_gate
    }

    pub fn w_gate_mut(&mut self) -> &mut Matrix2D {
        &mut self.w_gate
    }

    pub fn task_embeddings(&self) -> Option<&Matrix2D> {
        self.task_embeddings.as_ref()
    }

    pub fn task_embeddings_mut(&mut self) -> Option<&mut Matrix2D> {
        self.task_embeddings.as_mut()
    }
}

/// Outcome of selection: per gating group, which experts fire and with what
/// mixing scores. `indices[g]` is sorted by descending score and
/// `scores[g][t]` belongs to `indices[g][t]`.
#[derive(Debug, Clone, PartialEq)]
pub struct GateDecision {
    pub groups: usize,
    pub indices: Vec<Vec<usize>>,
    pub scores: Vec<Vec<f64>>,
}

impl GateDecision {
    pub fn m(&self) -> usize {
        self.indices.first().map_or(0, Vec::len)
    }
}

/// What the gate scored, kept around because backward needs the exact inputs
/// and the full softmax rows, not just the selection.
#[derive(Debug, Clone)]
pub struct GateTrace {
    pub pooled: Matrix2D,
    pub probs: Matrix2D,
    pub decision: GateDecision,
}

/// Reduces x to the rows the gate scores at the given level.
pub fn pool_input(
    x: &Matrix2D,
    level: GateLevel,
    task_id: Option<usize>,
    gate: &GateParams,
) -> Result<Matrix2D> {
    match level {
        GateLevel::Token => Ok(x.clone()),
        GateLevel::Sequence => Ok(x.mean_rows()),
        GateLevel::Task => {
            let table = gate.task_embeddings().ok_or(Error::MissingTaskEmbeddings)?;
            let id = task_id.ok_or(Error::MissingTaskId)?;
            table.row_matrix(id).map_err(|_| Error::IndexOutOfRange {
                what: "task",
                index: id,
                len: table.rows(),
            })
        }
    }
}

/// Softmax-normalized expert scores, one row per gating group.
pub fn gate_scores(pooled: &Matrix2D, gate: &GateParams) -> Result<Matrix2D> {
    if pooled.cols() != gate.w_gate.rows() {
        return Err(Error::ShapeMismatch {
            op: "gate_scores",
            left: pooled.shape(),
            right: gate.w_gate.shape(),
        });
    }
    Ok(pooled.matmul(&gate.w_gate)?.softmax_rows())
}

/// Keeps the m largest scores per row. Ties break toward the lower expert
/// index; kept indices come out in descending-score order. With
/// `renormalize` the kept scores are rescaled to sum to one.
pub fn select_top_m(scores: &Matrix2D, m: usize, renormalize: bool) -> Result<GateDecision> {
    let n = scores.cols();
    if m == 0 {
        return Err(Error::InvalidConfig("selection size m must be at least 1".into()));
    }
    if m > n {
        return Err(Error::InvalidConfig(format!(
            "selection size m = {m} exceeds expert count n = {n}"
        )));
    }
    let mut indices = Vec::with_capacity(scores.rows());
    let mut kept_scores = Vec::with_capacity(scores.rows());
    for g in 0..scores.rows() {
        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by(|&a, &b| {
            scores
                .get(g, b)
                .partial_cmp(&scores.get(g, a))
                .expect("softmax scores are always comparable")
                .then(a.cmp(&b))
        });
        order.truncate(m);
        let mut sel: Vec<f64> = order.iter().map(|&k| scores.get(g, k)).collect();
        if renormalize {
            let sum: f64 = sel.iter().sum();
            for v in sel.iter_mut() {
                *v /= sum;
            }
        }
        indices.push(order);
        kept_scores.push(sel);
    }
    Ok(GateDecision { groups: scores.rows(), indices, scores: kept_scores })
}

/// Full routing pass: pool, score, select. Layers call this and keep the
/// trace for backward.
pub fn route(
    x: &Matrix2D,
    level: GateLevel,
    task_id: Option<usize>,
    gate: &GateParams,
    m: usize,
    renormalize: bool,
) -> Result<GateTrace> {
    let pooled = pool_input(x, level, task_id, gate)?;
    let probs = gate_scores(&pooled, gate)?;
    let decision = select_top_m(&probs, m, renormalize)?;
    Ok(GateTrace { pooled, probs, decision })
}

/// Gradients flowing out of the gate given gradients on the selected scores.
pub(crate) struct GateBackward {
    pub d_w_gate: Matrix2D,
    pub d_task_embeddings: Option<Matrix2D>,
    /// Contribution to the layer input, absent at task level where the gate
    /// never touches x.
    pub d_x: Option<Matrix2D>,
}

/// Backward through selection, softmax, scoring map, and pooling.
///
/// The discrete index set is treated as a constant (straight-through), but
/// the kept scores get true gradients: first through the optional
/// renormalization, then the full softmax Jacobian, then the linear map.
/// `d_selected[g][t]` is the loss gradient on `decision.scores[g][t]`.
pub(crate) fn gate_backward(
    trace: &GateTrace,
    gate: &GateParams,
    level: GateLevel,
    task_id: Option<usize>,
    s: usize,
    renormalize: bool,
    d_selected: &[Vec<f64>],
) -> Result<GateBackward> {
    let dec = &trace.decision;
    let n = gate.n_experts();
    let mut d_probs = Matrix2D::zeros(dec.groups, n);
    for g in 0..dec.groups {
        if renormalize {
            // G_t = p_t / S with S the sum of the kept raw scores, so
            // dL/dp_t = (dL/dG_t - sum_i dL/dG_i G_i) / S.
            let raw: Vec<f64> = dec.indices[g].iter().map(|&k| trace.probs.get(g, k)).collect();
            let sum: f64 = raw.iter().sum();
            let dot: f64 = d_selected[g]
                .iter()
                .zip(&dec.scores[g])
                .map(|(d, gk)| d * gk)
                .sum();
            for (t, &k) in dec.indices[g].iter().enumerate() {
                d_probs.set(g, k, (d_selected[g][t] - dot) / sum);
            }
        } else {
            for (t, &k) in dec.indices[g].iter().enumerate() {
                d_probs.set(g, k, d_selected[g][t]);
            }
        }
    }
    // Softmax Jacobian, row by row: d_logit_j = p_j (d_p_j - sum_c d_p_c p_c).
    let mut d_logits = Matrix2D::zeros(dec.groups, n);
    for g in 0..dec.groups {
        let dot: f64 = (0..n).map(|c| d_probs.get(g, c) * trace.probs.get(g, c)).sum();
        for j in 0..n {
            d_logits.set(g, j, trace.probs.get(g, j) * (d_probs.get(g, j) - dot));
        }
    }
    let d_w_gate = trace.pooled.transpose().matmul(&d_logits)?;
    let d_pooled = d_logits.matmul(&gate.w_gate().transpose())?;
    let d = gate.d();
    match level {
        GateLevel::Token => Ok(GateBackward {
            d_w_gate,
            d_task_embeddings: None,
            d_x: Some(d_pooled),
        }),
        GateLevel::Sequence => {
            // Pooling was a mean over s rows, so every row inherits 1/s of it.
            let mut d_x = Matrix2D::zeros(s, d);
            let inv = 1.0 / s as f64;
            for i in 0..s {
                for j in 0..d {
                    d_x.set(i, j, d_pooled.get(0, j) * inv);
                }
            }
            Ok(GateBackward { d_w_gate, d_task_embeddings: None, d_x: Some(d_x) })
        }
        GateLevel::Task => {
            let table = gate.task_embeddings().ok_or(Error::MissingTaskEmbeddings)?;
            let id = task_id.ok_or(Error::MissingTaskId)?;
            let mut d_table = Matrix2D::zeros(table.rows(), table.cols());
            for j in 0..d {
                d_table.set(id, j, d_pooled.get(0, j));
            }
            Ok(GateBackward { d_w_gate, d_task_embeddings: Some(d_table), d_x: None })
        }
    }
}

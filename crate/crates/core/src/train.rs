//! Desk-scale training check: the merged layer does not just match the mixed
//! layer's forward pass, it trains the same way.
//!
//! The task is deliberately tiny: seeded Gaussian clusters, one cluster per
//! class, classified by a single expert layer under softmax cross-entropy
//! with plain full-batch gradient descent. Every sample is its own length-1
//! sequence routed at sequence level. With a linear activation and shared
//! seeds, the mixed-output and merged-parameter runs must produce the same
//! loss curve; with a nonlinearity inside the experts they genuinely part
//! ways.

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::expert::ExpertBank;
use crate::gating::{GateLevel, GateParams};
use crate::meo::{BottleneckBlock, MeoLayer};
use crate::moe::{LayerGradients, MoeLayer};
use crate::tensor::{Matrix2D, Rng};

pub const TRAIN_CSV_HEADER: &str = "method,epoch,loss,accuracy";

/// One epoch of one method's run.
#[derive(Debug, Clone, PartialEq)]
pub struct EpochRow {
    pub method: &'static str,
    pub epoch: usize,
    pub loss: f64,
    pub accuracy: f64,
}

impl EpochRow {
    pub fn csv_line(&self) -> String {
        format!("{},{},{:.9},{:.9}", self.method, self.epoch, self.loss, self.accuracy)
    }
}

pub fn rows_to_csv(rows: &[EpochRow]) -> String {
    let mut out = String::from(TRAIN_CSV_HEADER);
    out.push('\n');
    for row in rows {
        out.push_str(&row.csv_line());
        out.push('\n');
    }
    out
}

/// Seeded cluster data: one Gaussian blob per class.
#[derive(Debug, Clone)]
pub struct ToyData {
    /// All samples stacked, one row each.
    pub inputs: Matrix2D,
    pub labels: Vec<usize>,
    pub classes: usize,
}

/// Cluster centers sit at distinct corners of a +/-2 hypercube spanned by the
/// first ceil(log2 classes) feature dimensions; remaining dimensions carry
/// pure noise.
pub fn make_clusters(
    classes: usize,
    per_class: usize,
    d: usize,
    noise: f64,
    seed: u64,
) -> Result<ToyData> {
    if classes < 2 || per_class == 0 || d == 0 {
        return Err(Error::InvalidConfig(format!(
            "cluster task needs classes >= 2, per_class >= 1, d >= 1; got {classes}, {per_class}, {d}"
        )));
    }
    let bits = usize::BITS as usize - (classes - 1).leading_zeros() as usize;
    if bits > d {
        return Err(Error::InvalidConfig(format!(
            "{classes} classes need at least {bits} feature dimensions, got {d}"
        )));
    }
    let mut rng = Rng::new(seed);
    let total = classes * per_class;
    let mut inputs = Matrix2D::zeros(total, d);
    let mut labels = Vec::with_capacity(total);
    for c in 0..classes {
        for i in 0..per_class {
            let row = inputs.row_mut(c * per_class + i);
            for (b, v) in row.iter_mut().enumerate().take(bits) {
                let center = if (c >> b) & 1 == 1 { 2.0 } else { -2.0 };
                *v = center + rng.normal(0.0, noise);
            }
            for v in row.iter_mut().skip(bits) {
                *v = rng.normal(0.0, noise);
            }
            labels.push(c);
        }
    }
    Ok(ToyData { inputs, labels, classes })
}

/// Softmax cross-entropy for a single-row logit matrix. Returns the loss,
/// the probabilities, and the argmax.
fn softmax_ce(logits: &Matrix2D, label: usize) -> (f64, Vec<f64>, usize) {
    let row = logits.row(0);
    let mut max = row[0];
    let mut argmax = 0;
    for (j, &v) in row.iter().enumerate() {
        if v > max {
            max = v;
            argmax = j;
        }
    }
    let exps: Vec<f64> = row.iter().map(|&v| (v - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    let probs: Vec<f64> = exps.iter().map(|&e| e / sum).collect();
    (-probs[label].ln(), probs, argmax)
}

fn zeroed_like(g: &LayerGradients) -> LayerGradients {
    LayerGradients {
        expert_weights: g
            .expert_weights
            .iter()
            .map(|w| Matrix2D::zeros(w.rows(), w.cols()))
            .collect(),
        expert_biases: g.expert_biases.iter().map(|b| vec![0.0; b.len()]).collect(),
        w_gate: Matrix2D::zeros(g.w_gate.rows(), g.w_gate.cols()),
        task_embeddings: g
            .task_embeddings
            .as_ref()
            .map(|t| Matrix2D::zeros(t.rows(), t.cols())),
        w_down: g.w_down.as_ref().map(|w| Matrix2D::zeros(w.rows(), w.cols())),
        w_up: g.w_up.as_ref().map(|w| Matrix2D::zeros(w.rows(), w.cols())),
        input: Matrix2D::zeros(1, 1),
    }
}

/// Adds every parameter gradient of `g` into `acc`. Input gradients are per
/// sample and not a parameter, so they are not accumulated.
fn add_grads(acc: &mut LayerGradients, g: &LayerGradients) -> Result<()> {
    for (a, b) in acc.expert_weights.iter_mut().zip(&g.expert_weights) {
        a.add_scaled_in_place(b, 1.0)?;
    }
    for (a, b) in acc.expert_biases.iter_mut().zip(&g.expert_biases) {
        for (x, y) in a.iter_mut().zip(b) {
            *x += y;
        }
    }
    acc.w_gate.add_scaled_in_place(&g.w_gate, 1.0)?;
    if let (Some(a), Some(b)) = (acc.task_embeddings.as_mut(), g.task_embeddings.as_ref()) {
        a.add_scaled_in_place(b, 1.0)?;
    }
    if let (Some(a), Some(b)) = (acc.w_down.as_mut(), g.w_down.as_ref()) {
        a.add_scaled_in_place(b, 1.0)?;
    }
    if let (Some(a), Some(b)) = (acc.w_up.as_mut(), g.w_up.as_ref()) {
        a.add_scaled_in_place(b, 1.0)?;
    }
    Ok(())
}

fn descend(
    bank: &mut ExpertBank,
    gate: &mut GateParams,
    bottleneck: Option<&mut BottleneckBlock>,
    g: &LayerGradients,
    lr: f64,
) -> Result<()> {
    for k in 0..bank.n_experts() {
        bank.weight_mut(k).add_scaled_in_place(&g.expert_weights[k], -lr)?;
        for (b, gb) in bank.bias_mut(k).iter_mut().zip(&g.expert_biases[k]) {
            *b -= lr * gb;
        }
    }
    gate.w_gate_mut().add_scaled_in_place(&g.w_gate, -lr)?;
    if let (Some(table), Some(gt)) = (gate.task_embeddings_mut(), g.task_embeddings.as_ref()) {
        table.add_scaled_in_place(gt, -lr)?;
    }
    if let Some(block) = bottleneck {
        if let Some(gd) = g.w_down.as_ref() {
            block.w_down.add_scaled_in_place(gd, -lr)?;
        }
        if let Some(gu) = g.w_up.as_ref() {
            block.w_up.add_scaled_in_place(gu, -lr)?;
        }
    }
    Ok(())
}

enum Trainee {
    Mixed(MoeLayer),
    Merged(MeoLayer),
}

impl Trainee {
    fn forward_cached_loss(
        &self,
        xi: &Matrix2D,
        label: usize,
    ) -> Result<(f64, bool, Matrix2D, TraineeCache)> {
        match self {
            Trainee::Mixed(layer) => {
                let (y, cache) = layer.forward_cached(xi, None)?;
                let (loss, probs, argmax) = softmax_ce(&y, label);
                Ok((loss, argmax == label, probs_row(&probs), TraineeCache::Mixed(cache)))
            }
            Trainee::Merged(layer) => {
                let (y, cache) = layer.forward_cached(xi, None)?;
                let (loss, probs, argmax) = softmax_ce(&y, label);
                Ok((loss, argmax == label, probs_row(&probs), TraineeCache::Merged(cache)))
            }
        }
    }

    fn backward(&self, cache: &TraineeCache, upstream: &Matrix2D) -> Result<LayerGradients> {
        match (self, cache) {
            (Trainee::Mixed(layer), TraineeCache::Mixed(c)) => layer.backward(c, upstream),
            (Trainee::Merged(layer), TraineeCache::Merged(c)) => layer.backward(c, upstream),
            _ => unreachable!("cache always comes from the matching layer"),
        }
    }

    fn descend(&mut self, g: &LayerGradients, lr: f64) -> Result<()> {
        match self {
            Trainee::Mixed(layer) => descend(&mut layer.bank, &mut layer.gate, None, g, lr),
            Trainee::Merged(layer) => {
                descend(&mut layer.bank, &mut layer.gate, layer.bottleneck.as_mut(), g, lr)
            }
        }
    }
}

enum TraineeCache {
    Mixed(crate::moe::MoeCache),
    Merged(crate::meo::MeoCache),
}

fn probs_row(probs: &[f64]) -> Matrix2D {
    Matrix2D::new(1, probs.len(), probs.to_vec()).expect("nonempty probability row")
}

/// Full-batch gradient descent. Reports loss and accuracy as measured at the
/// start of each epoch, before that epoch's update.
fn train(
    mut model: Trainee,
    method: &'static str,
    data: &ToyData,
    epochs: usize,
    lr: f64,
) -> Result<Vec<EpochRow>> {
    let n_samples = data.labels.len();
    let scale = 1.0 / n_samples as f64;
    let mut rows = Vec::with_capacity(epochs);
    for epoch in 1..=epochs {
        let mut total_loss = 0.0;
        let mut correct = 0usize;
        let mut acc: Option<LayerGradients> = None;
        for (i, &label) in data.labels.iter().enumerate() {
            let xi = data.inputs.row_matrix(i)?;
            let (loss, hit, probs, cache) = model.forward_cached_loss(&xi, label)?;
            total_loss += loss;
            correct += hit as usize;
            let mut upstream = probs;
            upstream.row_mut(0)[label] -= 1.0;
            let upstream = upstream.scale(scale);
            let g = model.backward(&cache, &upstream)?;
            match acc.as_mut() {
                Some(a) => add_grads(a, &g)?,
                None => {
                    let mut a = zeroed_like(&g);
                    add_grads(&mut a, &g)?;
                    acc = Some(a);
                }
            }
        }
        let mean_loss = total_loss * scale;
        if !mean_loss.is_finite() {
            return Err(Error::Diverged { epoch });
        }
        model.descend(acc.as_ref().expect("at least one sample"), lr)?;
        rows.push(EpochRow {
            method,
            epoch,
            loss: mean_loss,
            accuracy: correct as f64 / n_samples as f64,
        });
    }
    Ok(rows)
}

/// Trains a mixed-output layer and a merged-parameter layer from identical
/// seeds on the same data, returning the mixed rows followed by the merged
/// rows.
pub fn run_train_toy(cfg: &RunConfig) -> Result<Vec<EpochRow>> {
    let p = cfg.profile();
    let (d, n, m) = (p.d_model as usize, p.n_experts as usize, p.m_selected as usize);
    let toy = &cfg.toy;
    let data = make_clusters(toy.classes, toy.per_class, d, toy.noise, cfg.seed)?;
    let bank = ExpertBank::init(n, d, toy.classes, toy.activation, cfg.seed ^ 0xbadc)?;
    let gate = GateParams::init(d, n, cfg.seed ^ 0x9a7e)?;
    let moe = MoeLayer::new(
        bank.clone(),
        gate.clone(),
        GateLevel::Sequence,
        m,
        toy.placement,
        cfg.renormalize,
    )?;
    let meo = MeoLayer::new(bank, gate, GateLevel::Sequence, m, cfg.renormalize)?;
    let mut rows = train(Trainee::Mixed(moe), "moe", &data, toy.epochs, toy.learning_rate)?;
    rows.extend(train(Trainee::Merged(meo), "meo", &data, toy.epochs, toy.learning_rate)?);
    Ok(rows)
}

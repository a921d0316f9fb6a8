//! Independent reference implementations and numerical checkers.
//!
//! Everything here is deliberately written the slow, obvious way: scalar
//! loops instead of matmuls, central finite differences instead of the
//! layers' own backward passes. The fast paths are tested against these, not
//! against themselves.

use crate::error::{Error, Result};
use crate::expert::{ActivationKind, ActivationPlacement, ExpertBank};
use crate::gating::{self, GateDecision, GateLevel, GateParams};
use crate::meo::{meo_apply, MeoLayer};
use crate::moe::{check_decision, group_span, moe_apply, LayerGradients, MoeLayer};
use crate::tensor::{Matrix2D, Rng};

/// Elementwise gap statistics between two ways of computing the same layer.
#[derive(Debug, Clone, PartialEq)]
pub struct EquivalenceReport {
    pub max_abs_gap: f64,
    pub mean_abs_gap: f64,
    pub config_digest: String,
}

/// Scalar-loop mixture forward: no matmul shortcuts, bias added before the
/// input products are accumulated, so even the floating-point summation order
/// differs from the production path.
pub fn brute_force_moe(
    x: &Matrix2D,
    bank: &ExpertBank,
    decision: &GateDecision,
    placement: ActivationPlacement,
) -> Result<Matrix2D> {
    if x.cols() != bank.d_in() {
        return Err(Error::ShapeMismatch {
            op: "brute_force_moe",
            left: x.shape(),
            right: (bank.d_in(), bank.d_out()),
        });
    }
    check_decision(decision, x.rows(), bank.n_experts())?;
    let act = bank.activation();
    let mut out = Matrix2D::zeros(x.rows(), bank.d_out());
    for g in 0..decision.groups {
        let (r0, r1) = group_span(decision.groups, x.rows(), g);
        for i in r0..r1 {
            for j in 0..bank.d_out() {
                let mut mixed = 0.0;
                for (t, &k) in decision.indices[g].iter().enumerate() {
                    let mut a = bank.bias(k)[j];
                    for l in 0..bank.d_in() {
                        a += x.get(i, l) * bank.weight(k).get(l, j);
                    }
                    if placement == ActivationPlacement::InsideExperts {
                        a = act.apply(a);
                    }
                    mixed += decision.scores[g][t] * a;
                }
                if placement == ActivationPlacement::OutsideExperts {
                    mixed = act.apply(mixed);
                }
                out.set(i, j, mixed);
            }
        }
    }
    Ok(out)
}

/// |merged − mixed| statistics for one decision under the given placement.
pub fn equivalence_gap(
    x: &Matrix2D,
    bank: &ExpertBank,
    decision: &GateDecision,
    placement: ActivationPlacement,
) -> Result<EquivalenceReport> {
    let mixed = moe_apply(bank, x, decision, placement)?;
    let merged = meo_apply(bank, x, decision)?;
    let mut max = 0.0f64;
    let mut sum = 0.0f64;
    for (a, b) in merged.as_slice().iter().zip(mixed.as_slice()) {
        let gap = (a - b).abs();
        max = max.max(gap);
        sum += gap;
    }
    Ok(EquivalenceReport {
        max_abs_gap: max,
        mean_abs_gap: sum / merged.as_slice().len() as f64,
        config_digest: format!(
            "s={} d={}x{} n={} m={} groups={} act={} placement={}",
            x.rows(),
            bank.d_in(),
            bank.d_out(),
            bank.n_experts(),
            decision.m(),
            decision.groups,
            bank.activation().name(),
            placement.name(),
        ),
    })
}

/// Central finite differences of a scalar loss over a flat parameter vector.
pub fn finite_diff_grad<F>(loss: &mut F, theta: &[f64], eps: f64) -> Result<Vec<f64>>
where
    F: FnMut(&[f64]) -> Result<f64>,
{
    if eps <= 0.0 {
        return Err(Error::InvalidConfig(format!("finite difference eps {eps} must be positive")));
    }
    let mut work = theta.to_vec();
    let mut grad = vec![0.0; theta.len()];
    for i in 0..theta.len() {
        let orig = work[i];
        work[i] = orig + eps;
        let f_plus = loss(&work)?;
        work[i] = orig - eps;
        let f_minus = loss(&work)?;
        work[i] = orig;
        if !f_plus.is_finite() || !f_minus.is_finite() {
            return Err(Error::NonFinite("finite difference loss"));
        }
        grad[i] = (f_plus - f_minus) / (2.0 * eps);
    }
    Ok(grad)
}

/// Guarded relative error: |a − b| / max(|a|, |b|, 1e-3).
///
/// Above the floor this is the plain relative error. Below it the comparison
/// turns absolute at the floor's scale, which is what a central difference of
/// an O(1) loss in f64 can support: its rounding noise is a few ulps of the
/// loss over 2*eps, around 1e-9, so coordinates whose true gradient is zero
/// would otherwise report noise as error. A real backward bug still surfaces,
/// since it perturbs gradients by far more than 1e-8 absolute.
pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-3)
}

/// Worst per-coordinate relative error between two gradient vectors.
pub fn max_relative_error(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len(), "gradient length mismatch");
    a.iter().zip(b).map(|(x, y)| relative_error(*x, *y)).fold(0.0, f64::max)
}

/// Outcome of checking one layer's backward pass against finite differences.
#[derive(Debug, Clone)]
pub struct GradReport {
    pub label: String,
    pub max_rel_err: f64,
    pub coords: usize,
}

fn half_squared_distance(y: &Matrix2D, target: &Matrix2D) -> Result<f64> {
    let diff = y.sub(target)?;
    Ok(diff.as_slice().iter().map(|v| 0.5 * v * v).sum())
}

fn moe_loss(
    layer: &MoeLayer,
    x: &Matrix2D,
    task_id: Option<usize>,
    target: &Matrix2D,
) -> Result<f64> {
    let (y, _) = layer.forward(x, task_id)?;
    half_squared_distance(&y, target)
}

fn meo_forward_any(layer: &MeoLayer, x: &Matrix2D, task_id: Option<usize>) -> Result<Matrix2D> {
    if layer.level == GateLevel::Token {
        Ok(layer.token_level_forward(x)?.0)
    } else {
        Ok(layer.forward(x, task_id)?.0)
    }
}

fn meo_loss(
    layer: &MeoLayer,
    x: &Matrix2D,
    task_id: Option<usize>,
    target: &Matrix2D,
) -> Result<f64> {
    half_squared_distance(&meo_forward_any(layer, x, task_id)?, target)
}

struct GradAccumulator {
    worst: f64,
    coords: usize,
}

impl GradAccumulator {
    fn new() -> Self {
        Self { worst: 0.0, coords: 0 }
    }

    /// Runs finite differences over `theta` and folds the per-coordinate
    /// relative errors against the analytic gradient into the running worst.
    fn check<F>(&mut self, analytic: &[f64], theta: &[f64], loss: &mut F, eps: f64) -> Result<()>
    where
        F: FnMut(&[f64]) -> Result<f64>,
    {
        let fd = finite_diff_grad(loss, theta, eps)?;
        self.worst = self.worst.max(max_relative_error(analytic, &fd));
        self.coords += theta.len();
        Ok(())
    }
}

/// Checks every parameter gradient of an output-mixing layer, plus the input
/// gradient, against central finite differences.
pub fn gradcheck_moe(
    layer: &MoeLayer,
    x: &Matrix2D,
    task_id: Option<usize>,
    target: &Matrix2D,
    eps: f64,
    label: &str,
) -> Result<GradReport> {
    let (y, cache) = layer.forward_cached(x, task_id)?;
    let upstream = y.sub(target)?;
    let grads = layer.backward(&cache, &upstream)?;
    let mut acc = GradAccumulator::new();
    check_shared_groups(
        &mut acc,
        &grads,
        layer.bank.n_experts(),
        x,
        eps,
        |v, slot| {
            let mut l = layer.clone();
            slot.write(&mut l.bank, &mut l.gate, v);
            moe_loss(&l, x, task_id, target)
        },
        |xv| {
            let mut xp = x.clone();
            xp.as_mut_slice().copy_from_slice(xv);
            moe_loss(layer, &xp, task_id, target)
        },
        layer.gate.task_embeddings().is_some() && task_id.is_some(),
        &layer.bank,
        &layer.gate,
    )?;
    Ok(GradReport { label: label.to_string(), max_rel_err: acc.worst, coords: acc.coords })
}

/// Same as gradcheck_moe for the merged layer, covering the bottleneck
/// parameters when present.
pub fn gradcheck_meo(
    layer: &MeoLayer,
    x: &Matrix2D,
    task_id: Option<usize>,
    target: &Matrix2D,
    eps: f64,
    label: &str,
) -> Result<GradReport> {
    let (y, cache) = if layer.level == GateLevel::Token {
        layer.token_level_forward_cached(x)?
    } else {
        layer.forward_cached(x, task_id)?
    };
    let upstream = y.sub(target)?;
    let grads = layer.backward(&cache, &upstream)?;
    let mut acc = GradAccumulator::new();
    check_shared_groups(
        &mut acc,
        &grads,
        layer.bank.n_experts(),
        x,
        eps,
        |v, slot| {
            let mut l = layer.clone();
            slot.write(&mut l.bank, &mut l.gate, v);
            meo_loss(&l, x, task_id, target)
        },
        |xv| {
            let mut xp = x.clone();
            xp.as_mut_slice().copy_from_slice(xv);
            meo_loss(layer, &xp, task_id, target)
        },
        layer.gate.task_embeddings().is_some() && task_id.is_some(),
        &layer.bank,
        &layer.gate,
    )?;
    if let Some(block) = &layer.bottleneck {
        let d_w_down = grads.w_down.as_ref().ok_or(Error::MissingBottleneck)?;
        acc.check(
            d_w_down.as_slice(),
            block.w_down.as_slice(),
            &mut |v| {
                let mut l = layer.clone();
                l.bottleneck.as_mut().unwrap().w_down.as_mut_slice().copy_from_slice(v);
                meo_loss(&l, x, task_id, target)
            },
            eps,
        )?;
        let d_w_up = grads.w_up.as_ref().ok_or(Error::MissingBottleneck)?;
        acc.check(
            d_w_up.as_slice(),
            block.w_up.as_slice(),
            &mut |v| {
                let mut l = layer.clone();
                l.bottleneck.as_mut().unwrap().w_up.as_mut_slice().copy_from_slice(v);
                meo_loss(&l, x, task_id, target)
            },
            eps,
        )?;
    }
    Ok(GradReport { label: label.to_string(), max_rel_err: acc.worst, coords: acc.coords })
}

/// Which shared parameter a perturbation lands in.
enum ParamSlot {
    ExpertWeight(usize),
    ExpertBias(usize),
    Gate,
    TaskTable,
}

impl ParamSlot {
    fn write(&self, bank: &mut ExpertBank, gate: &mut GateParams, v: &[f64]) {
        match *self {
            ParamSlot::ExpertWeight(k) => bank.weight_mut(k).as_mut_slice().copy_from_slice(v),
            ParamSlot::ExpertBias(k) => bank.bias_mut(k).copy_from_slice(v),
            ParamSlot::Gate => gate.w_gate_mut().as_mut_slice().copy_from_slice(v),
            ParamSlot::TaskTable => {
                gate.task_embeddings_mut().unwrap().as_mut_slice().copy_from_slice(v)
            }
        }
    }
}

/// Walks the parameter groups shared by both layer kinds: expert weights and
/// biases, the gate map, the task table when routing uses it, and the input.
#[allow(clippy::too_many_arguments)]
fn check_shared_groups<F, G>(
    acc: &mut GradAccumulator,
    grads: &LayerGradients,
    n_experts: usize,
    x: &Matrix2D,
    eps: f64,
    mut loss_with_slot: F,
    mut loss_with_input: G,
    check_task_table: bool,
    bank: &ExpertBank,
    gate: &GateParams,
) -> Result<()>
where
    F: FnMut(&[f64], &ParamSlot) -> Result<f64>,
    G: FnMut(&[f64]) -> Result<f64>,
{
    for k in 0..n_experts {
        let slot = ParamSlot::ExpertWeight(k);
        acc.check(
            grads.expert_weights[k].as_slice(),
            bank.weight(k).as_slice(),
            &mut |v| loss_with_slot(v, &slot),
            eps,
        )?;
        let slot = ParamSlot::ExpertBias(k);
        acc.check(&grads.expert_biases[k], bank.bias(k), &mut |v| loss_with_slot(v, &slot), eps)?;
    }
    let slot = ParamSlot::Gate;
    acc.check(
        grads.w_gate.as_slice(),
        gate.w_gate().as_slice(),
        &mut |v| loss_with_slot(v, &slot),
        eps,
    )?;
    if check_task_table {
        let table = gate.task_embeddings().expect("caller checked");
        let d_table = grads.task_embeddings.as_ref().ok_or(Error::MissingTaskEmbeddings)?;
        let slot = ParamSlot::TaskTable;
        acc.check(d_table.as_slice(), table.as_slice(), &mut |v| loss_with_slot(v, &slot), eps)?;
    }
    acc.check(grads.input.as_slice(), x.as_slice(), &mut loss_with_input, eps)?;
    Ok(())
}

/// The committed gradient-check fixture: a small bank (n=4 experts, 5 -> 4)
/// with a smooth activation, exercised at every routing level, both
/// activation placements, and the token-level merged path with a live
/// bottleneck. Returns one report per case.
pub fn gradcheck_suite(eps: f64) -> Result<Vec<GradReport>> {
    let (s, d_in, d_out, n, m) = (3usize, 5usize, 4usize, 4usize, 2usize);
    let bank = ExpertBank::init(n, d_in, d_out, ActivationKind::Tanh, 9001)?;
    let gate = GateParams::init(d_in, n, 9002)?;
    let gate_tasks = GateParams::init_with_tasks(d_in, n, 3, 9003)?;
    let mut rng = Rng::new(9004);
    let x = Matrix2D::random_uniform(s, d_in, -1.0, 1.0, &mut rng);
    let target = Matrix2D::random_uniform(s, d_out, -1.0, 1.0, &mut rng);
    let mut reports = Vec::new();

    for (placement, level, gate_ref, task_id, label) in [
        (
            ActivationPlacement::InsideExperts,
            GateLevel::Sequence,
            &gate,
            None,
            "mixed outputs / activation inside / sequence routing",
        ),
        (
            ActivationPlacement::OutsideExperts,
            GateLevel::Sequence,
            &gate,
            None,
            "mixed outputs / activation outside / sequence routing",
        ),
        (
            ActivationPlacement::OutsideExperts,
            GateLevel::Token,
            &gate,
            None,
            "mixed outputs / activation outside / token routing",
        ),
        (
            ActivationPlacement::InsideExperts,
            GateLevel::Task,
            &gate_tasks,
            Some(1),
            "mixed outputs / activation inside / task routing",
        ),
    ] {
        let layer =
            MoeLayer::new(bank.clone(), gate_ref.clone(), level, m, placement, true)?;
        reports.push(gradcheck_moe(&layer, &x, task_id, &target, eps, label)?);
    }

    let meo_seq = MeoLayer::new(bank.clone(), gate.clone(), GateLevel::Sequence, m, true)?;
    reports.push(gradcheck_meo(&meo_seq, &x, None, &target, eps, "merged expert / sequence routing")?);

    let meo_task = MeoLayer::new(bank.clone(), gate_tasks.clone(), GateLevel::Task, m, true)?;
    reports.push(gradcheck_meo(&meo_task, &x, Some(2), &target, eps, "merged expert / task routing")?);

    // d_in = 5 leaves r = 5 as the only nontrivial reduction. The up
    // projection starts at zero, which would hide the down projection from
    // the loss entirely, so the fixture randomizes it.
    let mut meo_token = MeoLayer::new_token_level(bank, gate, m, true, 5, 9005)?;
    {
        let block = meo_token.bottleneck.as_mut().expect("token layer has a bottleneck");
        block.w_up = Matrix2D::random_uniform(block.hidden(), d_in, -0.5, 0.5, &mut rng);
    }
    reports.push(gradcheck_meo(
        &meo_token,
        &x,
        None,
        &target,
        eps,
        "merged expert / token routing with bottleneck",
    )?);
    Ok(reports)
}

/// One row of the seeded equivalence sweep.
#[derive(Debug, Clone)]
pub struct SuiteOutcome {
    pub case: usize,
    pub level: &'static str,
    pub renormalize: bool,
    pub activation: &'static str,
    pub s: usize,
    pub n: usize,
    pub m: usize,
    pub d_in: usize,
    pub d_out: usize,
    pub label: String,
    pub report: EquivalenceReport,
}

/// Deterministic sweep comparing the merged forward against output mixing
/// with the activation outside, across routing levels, renormalization
/// settings, activations, and shapes. Case i is fully determined by
/// (base_seed, i).
pub fn equivalence_suite(cases: usize, base_seed: u64) -> Result<Vec<SuiteOutcome>> {
    let levels = [GateLevel::Token, GateLevel::Sequence, GateLevel::Task];
    let acts = [
        ActivationKind::Identity,
        ActivationKind::Relu,
        ActivationKind::Gelu,
        ActivationKind::Tanh,
    ];
    let seq_lens = [1usize, 7, 128];
    let expert_counts = [1usize, 4, 16];
    let selections = [1usize, 2, 4];
    let mut outcomes = Vec::with_capacity(cases);
    for i in 0..cases {
        let level = levels[i % 3];
        let renormalize = (i / 3) % 2 == 1;
        let act = acts[(i / 6) % 4];
        let s = seq_lens[(i / 24) % 3];
        let n = expert_counts[(i / 5) % 3];
        let m = selections[(i / 2) % 3].min(n);
        let d_in = 3 + (i % 5);
        let d_out = 2 + (i % 4);
        let seed = base_seed + i as u64;
        let bank = ExpertBank::init(n, d_in, d_out, act, seed)?;
        let gate = if level == GateLevel::Task {
            GateParams::init_with_tasks(d_in, n, 3, seed ^ 0xabcd)?
        } else {
            GateParams::init(d_in, n, seed ^ 0xabcd)?
        };
        let task_id = if level == GateLevel::Task { Some(i % 3) } else { None };
        let mut rng = Rng::new(seed ^ 0x5eed);
        let x = Matrix2D::random_uniform(s, d_in, -1.0, 1.0, &mut rng);
        let trace = gating::route(&x, level, task_id, &gate, m, renormalize)?;
        let report =
            equivalence_gap(&x, &bank, &trace.decision, ActivationPlacement::OutsideExperts)?;
        let label = format!(
            "case {i:02}: level={} renorm={} {}",
            level.name(),
            if renormalize { "on" } else { "off" },
            report.config_digest,
        );
        outcomes.push(SuiteOutcome {
            case: i,
            level: level.name(),
            renormalize,
            activation: act.name(),
            s,
            n,
            m,
            d_in,
            d_out,
            label,
            report,
        });
    }
    Ok(outcomes)
}

/// Shape of the committed witness configuration: (s, d_in, d_out, n, m).
pub const WITNESS_SHAPE: (usize, usize, usize, usize, usize) = (7, 6, 5, 8, 4);

/// The committed configuration showing that placing the activation inside
/// the experts is a genuinely different function: with Relu the merged
/// forward departs from inside-mixing by a visible margin, while switching
/// the same weights to Identity collapses the gap to rounding noise.
///
/// Returns (relu_inside_report, identity_inside_report).
pub fn inequivalence_witness() -> Result<(EquivalenceReport, EquivalenceReport)> {
    let (s, d_in, d_out, n, m) = WITNESS_SHAPE;
    let relu_bank = ExpertBank::init(n, d_in, d_out, ActivationKind::Relu, 2024)?;
    let identity_bank = ExpertBank::from_parts(
        (0..n).map(|k| relu_bank.weight(k).clone()).collect(),
        (0..n).map(|k| relu_bank.bias(k).to_vec()).collect(),
        ActivationKind::Identity,
    )?;
    let gate = GateParams::init(d_in, n, 2025)?;
    let mut rng = Rng::new(2026);
    let x = Matrix2D::random_uniform(s, d_in, -1.0, 1.0, &mut rng);
    let trace = gating::route(&x, GateLevel::Sequence, None, &gate, m, true)?;
    let relu = equivalence_gap(&x, &relu_bank, &trace.decision, ActivationPlacement::InsideExperts)?;
    let identity =
        equivalence_gap(&x, &identity_bank, &trace.decision, ActivationPlacement::InsideExperts)?;
    Ok((relu, identity))
}

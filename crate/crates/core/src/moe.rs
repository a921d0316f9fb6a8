//! Mixture-of-experts layer: run every selected expert, mix by gate score.
//!
//! For token i with selected set T and scores G, the layer computes either
//!
//! - inside placement:  y_i = sum_k G_k * act(x_i W_k + b_k)
//! - outside placement: y_i = act(sum_k G_k * (x_i W_k + b_k))
//!
//! The two coincide exactly for the identity activation and differ for any
//! curved one; the merged formulation in `meo` reproduces the outside form.
//! Backward treats the selected index set as a constant and sends true
//! gradients through the kept scores, the softmax, and the pooling.

use crate::error::{Error, Result};
use crate::expert::{ActivationPlacement, ExpertBank};
use crate::gating::{self, GateDecision, GateLevel, GateParams, GateTrace};
use crate::tensor::Matrix2D;

/// Row span of gating group `g` in a batch of `s` rows. A decision either has
/// one group for the whole batch or one group per token.
pub(crate) fn group_span(groups: usize, s: usize, g: usize) -> (usize, usize) {
    if groups == 1 {
        (0, s)
    } else {
        (g, g + 1)
    }
}

pub(crate) fn check_decision(decision: &GateDecision, s: usize, n: usize) -> Result<()> {
    if decision.groups != 1 && decision.groups != s {
        return Err(Error::InvalidConfig(format!(
            "decision has {} groups for a batch of {s} rows, expected 1 or {s}",
            decision.groups
        )));
    }
    if decision.indices.len() != decision.groups || decision.scores.len() != decision.groups {
        return Err(Error::InvalidConfig(
            "decision index/score lists disagree with group count".into(),
        ));
    }
    for g in 0..decision.groups {
        if decision.indices[g].len() != decision.scores[g].len() {
            return Err(Error::InvalidConfig(format!(
                "group {g}: {} indices but {} scores",
                decision.indices[g].len(),
                decision.scores[g].len()
            )));
        }
        for &k in &decision.indices[g] {
            if k >= n {
                return Err(Error::IndexOutOfRange { what: "expert", index: k, len: n });
            }
        }
    }
    Ok(())
}

/// Applies the mixture for an already-made gating decision.
///
/// Both placements accumulate scaled expert outputs in selection order; the
/// placement only decides whether the activation runs per expert or once on
/// the accumulated sum, so with the identity activation the two paths produce
/// bit-identical results. Each expert term reuses `expert_forward`, which also
/// makes the m = 1 mixture bit-identical to a plain expert call.
pub fn moe_apply(
    bank: &ExpertBank,
    x: &Matrix2D,
    decision: &GateDecision,
    placement: ActivationPlacement,
) -> Result<Matrix2D> {
    if x.cols() != bank.d_in() {
        return Err(Error::ShapeMismatch {
            op: "moe_apply",
            left: x.shape(),
            right: (bank.d_in(), bank.d_out()),
        });
    }
    check_decision(decision, x.rows(), bank.n_experts())?;
    let s = x.rows();
    let act = bank.activation();
    let mut out = Matrix2D::zeros(s, bank.d_out());
    for g in 0..decision.groups {
        let (r0, r1) = group_span(decision.groups, s, g);
        let xg = x.row_range(r0, r1)?;
        for (t, &k) in decision.indices[g].iter().enumerate() {
            let gk = decision.scores[g][t];
            let term =
                bank.expert_forward(k, &xg, placement == ActivationPlacement::InsideExperts)?;
            for i in r0..r1 {
                let dst = out.row_mut(i);
                let src = term.row(i - r0);
                for j in 0..src.len() {
                    dst[j] += gk * src[j];
                }
            }
        }
        if placement == ActivationPlacement::OutsideExperts {
            for i in r0..r1 {
                for v in out.row_mut(i) {
                    *v = act.apply(*v);
                }
            }
        }
    }
    Ok(out)
}

/// Per-call state the backward pass needs: the exact input and the routing
/// trace the forward used. Holding it in a separate value rather than inside
/// the layer keeps each forward/backward pair confined to its caller.
#[derive(Debug, Clone)]
pub struct MoeCache {
    pub(crate) x: Matrix2D,
    pub(crate) trace: GateTrace,
    pub(crate) task_id: Option<usize>,
}

impl MoeCache {
    pub fn decision(&self) -> &GateDecision {
        &self.trace.decision
    }
}

/// Gradients of one layer forward. Experts outside the selected set keep
/// exactly zero entries. The bottleneck fields are only filled by the
/// token-level merged layer.
#[derive(Debug, Clone)]
pub struct LayerGradients {
    pub expert_weights: Vec<Matrix2D>,
    pub expert_biases: Vec<Vec<f64>>,
    pub w_gate: Matrix2D,
    pub task_embeddings: Option<Matrix2D>,
    pub w_down: Option<Matrix2D>,
    pub w_up: Option<Matrix2D>,
    pub input: Matrix2D,
}

/// Output-mixing mixture-of-experts layer.
#[derive(Debug, Clone)]
pub struct MoeLayer {
    pub bank: ExpertBank,
    pub gate: GateParams,
    pub level: GateLevel,
    pub m: usize,
    pub placement: ActivationPlacement,
    pub renormalize: bool,
}

impl MoeLayer {
    pub fn new(
        bank: ExpertBank,
        gate: GateParams,
        level: GateLevel,
        m: usize,
        placement: ActivationPlacement,
        renormalize: bool,
    ) -> Result<Self> {
        if gate.n_experts() != bank.n_experts() {
            return Err(Error::InvalidConfig(format!(
                "gate scores {} experts but the bank holds {}",
                gate.n_experts(),
                bank.n_experts()
            )));
        }
        if gate.d() != bank.d_in() {
            return Err(Error::InvalidConfig(format!(
                "gate input width {} does not match expert d_in {}",
                gate.d(),
                bank.d_in()
            )));
        }
        if m == 0 || m > bank.n_experts() {
            return Err(Error::InvalidConfig(format!(
                "m = {m} must be in 1..={}",
                bank.n_experts()
            )));
        }
        if level == GateLevel::Task && gate.task_embeddings().is_none() {
            return Err(Error::MissingTaskEmbeddings);
        }
        Ok(Self { bank, gate, level, m, placement, renormalize })
    }

    /// Routes and mixes. `task_id` is only consulted at task level.
    pub fn forward(
        &self,
        x: &Matrix2D,
        task_id: Option<usize>,
    ) -> Result<(Matrix2D, GateDecision)> {
        let (y, cache) = self.forward_cached(x, task_id)?;
        Ok((y, cache.trace.decision))
    }

    /// Forward that also returns the state backward needs.
    pub fn forward_cached(
        &self,
        x: &Matrix2D,
        task_id: Option<usize>,
    ) -> Result<(Matrix2D, MoeCache)> {
        let trace = gating::route(x, self.level, task_id, &self.gate, self.m, self.renormalize)?;
        let y = moe_apply(&self.bank, x, &trace.decision, self.placement)?;
        Ok((y, MoeCache { x: x.clone(), trace, task_id }))
    }

    /// Reverse-mode gradients of the forward recorded in `cache`, for an
    /// upstream gradient on the layer output. Pre-activations are recomputed
    /// from the cached input rather than stored; the arithmetic is
    /// deterministic, so they match the forward bit for bit.
    pub fn backward(&self, cache: &MoeCache, upstream: &Matrix2D) -> Result<LayerGradients> {
        let x = &cache.x;
        let s = x.rows();
        if upstream.shape() != (s, self.bank.d_out()) {
            return Err(Error::ShapeMismatch {
                op: "moe_backward",
                left: upstream.shape(),
                right: (s, self.bank.d_out()),
            });
        }
        let dec = &cache.trace.decision;
        let n = self.bank.n_experts();
        let act = self.bank.activation();
        let mut g_w: Vec<Matrix2D> =
            (0..n).map(|_| Matrix2D::zeros(self.bank.d_in(), self.bank.d_out())).collect();
        let mut g_b: Vec<Vec<f64>> = vec![vec![0.0; self.bank.d_out()]; n];
        let mut g_x = Matrix2D::zeros(s, self.bank.d_in());
        let mut d_selected: Vec<Vec<f64>> =
            dec.scores.iter().map(|v| vec![0.0; v.len()]).collect();

        for g in 0..dec.groups {
            let (r0, r1) = group_span(dec.groups, s, g);
            let xg = x.row_range(r0, r1)?;
            let ug = upstream.row_range(r0, r1)?;
            match self.placement {
                ActivationPlacement::InsideExperts => {
                    // y = sum_k gk * act(a_k):
                    //   dL/dgk  = <u, act(a_k)>
                    //   dL/da_k = gk * u ⊙ act'(a_k)
                    for (t, &k) in dec.indices[g].iter().enumerate() {
                        let gk = dec.scores[g][t];
                        let a = self.bank.expert_forward(k, &xg, false)?;
                        let h = a.map(|v| act.apply(v));
                        d_selected[g][t] = ug.frob_dot(&h)?;
                        let mut da = Matrix2D::zeros(a.rows(), a.cols());
                        for i in 0..a.rows() {
                            for j in 0..a.cols() {
                                da.set(i, j, gk * ug.get(i, j) * act.grad(a.get(i, j)));
                            }
                        }
                        accumulate_expert_grads(
                            &mut g_w[k],
                            &mut g_b[k],
                            &mut g_x,
                            r0,
                            &xg,
                            &da,
                            self.bank.weight(k),
                        )?;
                    }
                }
                ActivationPlacement::OutsideExperts => {
                    // y = act(z), z = sum_k gk * a_k:
                    //   dL/dz   = u ⊙ act'(z)
                    //   dL/dgk  = <dz, a_k>
                    //   dL/da_k = gk * dz
                    let mut a_terms = Vec::with_capacity(dec.indices[g].len());
                    let mut z = Matrix2D::zeros(r1 - r0, self.bank.d_out());
                    for (t, &k) in dec.indices[g].iter().enumerate() {
                        let a = self.bank.expert_forward(k, &xg, false)?;
                        z.add_scaled_in_place(&a, dec.scores[g][t])?;
                        a_terms.push(a);
                    }
                    let mut dz = Matrix2D::zeros(r1 - r0, self.bank.d_out());
                    for i in 0..dz.rows() {
                        for j in 0..dz.cols() {
                            dz.set(i, j, ug.get(i, j) * act.grad(z.get(i, j)));
                        }
                    }
                    for (t, &k) in dec.indices[g].iter().enumerate() {
                        let gk = dec.scores[g][t];
                        d_selected[g][t] = dz.frob_dot(&a_terms[t])?;
                        let da = dz.scale(gk);
                        accumulate_expert_grads(
                            &mut g_w[k],
                            &mut g_b[k],
                            &mut g_x,
                            r0,
                            &xg,
                            &da,
                            self.bank.weight(k),
                        )?;
                    }
                }
            }
        }

        let gb = gating::gate_backward(
            &cache.trace,
            &self.gate,
            self.level,
            cache.task_id,
            s,
            self.renormalize,
            &d_selected,
        )?;
        if let Some(dx_gate) = &gb.d_x {
            g_x.add_scaled_in_place(dx_gate, 1.0)?;
        }
        Ok(LayerGradients {
            expert_weights: g_w,
            expert_biases: g_b,
            w_gate: gb.d_w_gate,
            task_embeddings: gb.d_task_embeddings,
            w_down: None,
            w_up: None,
            input: g_x,
        })
    }
}

/// Shared accumulation for one expert term: given dL/da for the affine output
/// a = xg W + b over rows r0.., adds the weight, bias, and input gradients.
pub(crate) fn accumulate_expert_grads(
    g_w: &mut Matrix2D,
    g_b: &mut [f64],
    g_x: &mut Matrix2D,
    r0: usize,
    xg: &Matrix2D,
    da: &Matrix2D,
    w: &Matrix2D,
) -> Result<()> {
    g_w.add_scaled_in_place(&xg.transpose().matmul(da)?, 1.0)?;
    for (j, v) in da.col_sums().into_iter().enumerate() {
        g_b[j] += v;
    }
    let dx = da.matmul(&w.transpose())?;
    for i in 0..dx.rows() {
        let dst = g_x.row_mut(r0 + i);
        let src = dx.row(i);
        for j in 0..src.len() {
            dst[j] += src[j];
        }
    }
    Ok(())
}

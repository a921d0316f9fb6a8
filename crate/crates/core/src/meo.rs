//! Merged single-expert layer: collapse the selected experts into one.
//!
//! Instead of running every selected expert and mixing outputs, the layer
//! mixes parameters first,
//!
//!   W_hat = sum_k G_k W_k,   b_hat = sum_k G_k b_k,
//!
//! and runs one affine map y = act(x W_hat + b_hat). Because the affine part
//! is linear in its parameters this is algebraically identical to mixing the
//! expert pre-activations and applying the activation outside, while the
//! expert compute no longer grows with the number of selected experts.
//!
//! At token level a per-token merge would defeat that saving, so the
//! token-level path first lets tokens exchange information through a cheap
//! residual bottleneck, x + act(x W_down) W_up, and then routes once for the
//! whole sequence.

use crate::error::{Error, Result};
use crate::expert::{ActivationKind, ExpertBank};
use crate::gating::{self, GateDecision, GateLevel, GateParams, GateTrace};
use crate::moe::{check_decision, group_span, LayerGradients};
use crate::tensor::{Matrix2D, Rng};

/// Score-weighted combination of expert parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct MergedExpert {
    pub w_hat: Matrix2D,
    pub b_hat: Vec<f64>,
}

impl MergedExpert {
    /// The bare affine map x W_hat + b_hat.
    pub fn affine(&self, x: &Matrix2D) -> Result<Matrix2D> {
        let mut out = x.matmul(&self.w_hat)?;
        for i in 0..out.rows() {
            let row = out.row_mut(i);
            for j in 0..self.b_hat.len() {
                row[j] += self.b_hat[j];
            }
        }
        Ok(out)
    }
}

/// Sums G_k W_k and G_k b_k over the selected experts. The summation runs in
/// ascending expert-index order regardless of how the selection was ordered,
/// which makes the result independent of score ranking by construction.
pub fn merge_experts(bank: &ExpertBank, indices: &[usize], scores: &[f64]) -> Result<MergedExpert> {
    if indices.is_empty() {
        return Err(Error::EmptyInput("merge_experts"));
    }
    if indices.len() != scores.len() {
        return Err(Error::InvalidConfig(format!(
            "merge_experts got {} indices but {} scores",
            indices.len(),
            scores.len()
        )));
    }
    let mut pairs: Vec<(usize, f64)> = indices.iter().copied().zip(scores.iter().copied()).collect();
    pairs.sort_by_key(|&(k, _)| k);
    let mut w_hat = Matrix2D::zeros(bank.d_in(), bank.d_out());
    let mut b_hat = vec![0.0; bank.d_out()];
    for (k, gk) in pairs {
        if k >= bank.n_experts() {
            return Err(Error::IndexOutOfRange {
                what: "expert",
                index: k,
                len: bank.n_experts(),
            });
        }
        w_hat.add_scaled_in_place(bank.weight(k), gk)?;
        for (j, b) in bank.bias(k).iter().enumerate() {
            b_hat[j] += gk * b;
        }
    }
    Ok(MergedExpert { w_hat, b_hat })
}

/// Applies the merged formulation for an already-made decision: one merge and
/// one affine map per gating group, activation outside. With a per-token
/// decision this degenerates to one merge per token, which is exactly the
/// usage the bottleneck path exists to avoid, but it stays available because
/// the equivalence oracles exercise it.
pub fn meo_apply(bank: &ExpertBank, x: &Matrix2D, decision: &GateDecision) -> Result<Matrix2D> {
    if x.cols() != bank.d_in() {
        return Err(Error::ShapeMismatch {
            op: "meo_apply",
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
        let merged = merge_experts(bank, &decision.indices[g], &decision.scores[g])?;
        let y = merged.affine(&x.row_range(r0, r1)?)?;
        for i in r0..r1 {
            let dst = out.row_mut(i);
            let src = y.row(i - r0);
            for j in 0..src.len() {
                dst[j] = act.apply(src[j]);
            }
        }
    }
    Ok(out)
}

/// Residual token mixer for the token-level path: x + act(x W_down) W_up with
/// a d/r hidden width. W_up starts at zero so a fresh block is the identity.
#[derive(Debug, Clone, PartialEq)]
pub struct BottleneckBlock {
    pub w_down: Matrix2D,
    pub w_up: Matrix2D,
    pub activation: ActivationKind,
}

impl BottleneckBlock {
    /// `r` is the reduction factor: hidden width is d / r, and d must divide
    /// evenly.
    pub fn init(d: usize, r: usize, activation: ActivationKind, seed: u64) -> Result<Self> {
        if r == 0 || d == 0 {
            return Err(Error::EmptyInput("BottleneckBlock::init"));
        }
        if d % r != 0 {
            return Err(Error::InvalidConfig(format!(
                "bottleneck reduction {r} must divide the model width {d}"
            )));
        }
        let hidden = d / r;
        let a = (6.0 / (d + hidden) as f64).sqrt();
        let mut rng = Rng::new(seed);
        Ok(Self {
            w_down: Matrix2D::random_uniform(d, hidden, -a, a, &mut rng),
            w_up: Matrix2D::zeros(hidden, d),
            activation,
        })
    }

    pub fn hidden(&self) -> usize {
        self.w_down.cols()
    }

    /// Forward returning the pre-activation h = x W_down alongside the mixed
    /// output, because backward needs h.
    pub fn apply_cached(&self, x: &Matrix2D) -> Result<(Matrix2D, Matrix2D)> {
        if x.cols() != self.w_down.rows() {
            return Err(Error::ShapeMismatch {
                op: "bottleneck",
                left: x.shape(),
                right: self.w_down.shape(),
            });
        }
        let h = x.matmul(&self.w_down)?;
        let act = self.activation;
        let up = h.map(|v| act.apply(v)).matmul(&self.w_up)?;
        Ok((x.add(&up)?, h))
    }

    pub fn apply(&self, x: &Matrix2D) -> Result<Matrix2D> {
        Ok(self.apply_cached(x)?.0)
    }
}

/// Per-call state for the merged layer. `x_eff` is what the merged expert
/// actually consumed: the raw input, or the bottleneck output on the
/// token-level path (where `h` holds the bottleneck pre-activation).
#[derive(Debug, Clone)]
pub struct MeoCache {
    pub(crate) x: Matrix2D,
    pub(crate) x_eff: Matrix2D,
    pub(crate) h: Option<Matrix2D>,
    pub(crate) trace: GateTrace,
    pub(crate) task_id: Option<usize>,
    pub(crate) gating_level: GateLevel,
}

impl MeoCache {
    pub fn decision(&self) -> &GateDecision {
        &self.trace.decision
    }
}

/// Merged single-expert layer.
#[derive(Debug, Clone)]
pub struct MeoLayer {
    pub bank: ExpertBank,
    pub gate: GateParams,
    pub level: GateLevel,
    pub m: usize,
    pub renormalize: bool,
    pub bottleneck: Option<BottleneckBlock>,
}

impl MeoLayer {
    /// Sequence- or task-level layer. Token level needs the bottleneck
    /// variant, so it is rejected here.
    pub fn new(
        bank: ExpertBank,
        gate: GateParams,
        level: GateLevel,
        m: usize,
        renormalize: bool,
    ) -> Result<Self> {
        if level == GateLevel::Token {
            return Err(Error::WrongLevel { expected: "sequence or task", got: "token" });
        }
        Self::validate_parts(&bank, &gate, m)?;
        if level == GateLevel::Task && gate.task_embeddings().is_none() {
            return Err(Error::MissingTaskEmbeddings);
        }
        Ok(Self { bank, gate, level, m, renormalize, bottleneck: None })
    }

    /// Token-level layer: residual bottleneck with reduction r, then one
    /// sequence-granularity selection. Requires square experts in the model
    /// dimension because the bottleneck is residual in x.
    pub fn new_token_level(
        bank: ExpertBank,
        gate: GateParams,
        m: usize,
        renormalize: bool,
        r: usize,
        seed: u64,
    ) -> Result<Self> {
        Self::validate_parts(&bank, &gate, m)?;
        let bottleneck = BottleneckBlock::init(bank.d_in(), r, bank.activation(), seed)?;
        Ok(Self {
            bank,
            gate,
            level: GateLevel::Token,
            m,
            renormalize,
            bottleneck: Some(bottleneck),
        })
    }

    fn validate_parts(bank: &ExpertBank, gate: &GateParams, m: usize) -> Result<()> {
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
        Ok(())
    }

    /// Sequence/task-level forward: route once, merge once, apply once.
    pub fn forward(
        &self,
        x: &Matrix2D,
        task_id: Option<usize>,
    ) -> Result<(Matrix2D, GateDecision)> {
        let (y, cache) = self.forward_cached(x, task_id)?;
        Ok((y, cache.trace.decision))
    }

    pub fn forward_cached(
        &self,
        x: &Matrix2D,
        task_id: Option<usize>,
    ) -> Result<(Matrix2D, MeoCache)> {
        if self.level == GateLevel::Token {
            return Err(Error::WrongLevel { expected: "sequence or task", got: "token" });
        }
        let trace = gating::route(x, self.level, task_id, &self.gate, self.m, self.renormalize)?;
        let y = meo_apply(&self.bank, x, &trace.decision)?;
        Ok((
            y,
            MeoCache {
                x: x.clone(),
                x_eff: x.clone(),
                h: None,
                trace,
                task_id,
                gating_level: self.level,
            },
        ))
    }

    /// Token-level forward: bottleneck mix, one sequence-granularity routing
    /// over the mixed tokens, then the single merged expert.
    pub fn token_level_forward(&self, x: &Matrix2D) -> Result<(Matrix2D, GateDecision)> {
        let (y, cache) = self.token_level_forward_cached(x)?;
        Ok((y, cache.trace.decision))
    }

    pub fn token_level_forward_cached(&self, x: &Matrix2D) -> Result<(Matrix2D, MeoCache)> {
        if self.level != GateLevel::Token {
            return Err(Error::WrongLevel { expected: "token", got: self.level.name() });
        }
        let bottleneck = self.bottleneck.as_ref().ok_or(Error::MissingBottleneck)?;
        let (x_eff, h) = bottleneck.apply_cached(x)?;
        let trace =
            gating::route(&x_eff, GateLevel::Sequence, None, &self.gate, self.m, self.renormalize)?;
        let y = meo_apply(&self.bank, &x_eff, &trace.decision)?;
        Ok((
            y,
            MeoCache {
                x: x.clone(),
                x_eff,
                h: Some(h),
                trace,
                task_id: None,
                gating_level: GateLevel::Sequence,
            },
        ))
    }

    /// Reverse-mode gradients. Merged-parameter gradients fan out to the
    /// selected experts as dW_k = G_k dW_hat, db_k = G_k db_hat, and each kept
    /// score receives <W_k, dW_hat> + <b_k, db_hat>.
    pub fn backward(&self, cache: &MeoCache, upstream: &Matrix2D) -> Result<LayerGradients> {
        let x_eff = &cache.x_eff;
        let s = x_eff.rows();
        if upstream.shape() != (s, self.bank.d_out()) {
            return Err(Error::ShapeMismatch {
                op: "meo_backward",
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
        let mut g_x_eff = Matrix2D::zeros(s, self.bank.d_in());
        let mut d_selected: Vec<Vec<f64>> =
            dec.scores.iter().map(|v| vec![0.0; v.len()]).collect();

        for g in 0..dec.groups {
            let (r0, r1) = group_span(dec.groups, s, g);
            let xg = x_eff.row_range(r0, r1)?;
            let ug = upstream.row_range(r0, r1)?;
            let merged = merge_experts(&self.bank, &dec.indices[g], &dec.scores[g])?;
            let z = merged.affine(&xg)?;
            let mut dz = Matrix2D::zeros(z.rows(), z.cols());
            for i in 0..z.rows() {
                for j in 0..z.cols() {
                    dz.set(i, j, ug.get(i, j) * act.grad(z.get(i, j)));
                }
            }
            let d_w_hat = xg.transpose().matmul(&dz)?;
            let d_b_hat = dz.col_sums();
            for (t, &k) in dec.indices[g].iter().enumerate() {
                let gk = dec.scores[g][t];
                g_w[k].add_scaled_in_place(&d_w_hat, gk)?;
                for (j, v) in d_b_hat.iter().enumerate() {
                    g_b[k][j] += gk * v;
                }
                let bias_dot: f64 =
                    self.bank.bias(k).iter().zip(&d_b_hat).map(|(b, d)| b * d).sum();
                d_selected[g][t] = self.bank.weight(k).frob_dot(&d_w_hat)? + bias_dot;
            }
            let dx = dz.matmul(&merged.w_hat.transpose())?;
            for i in 0..dx.rows() {
                let dst = g_x_eff.row_mut(r0 + i);
                let src = dx.row(i);
                for j in 0..src.len() {
                    dst[j] += src[j];
                }
            }
        }

        let gb = gating::gate_backward(
            &cache.trace,
            &self.gate,
            cache.gating_level,
            cache.task_id,
            s,
            self.renormalize,
            &d_selected,
        )?;
        if let Some(dx_gate) = &gb.d_x {
            g_x_eff.add_scaled_in_place(dx_gate, 1.0)?;
        }

        // Bottleneck backward on the token-level path:
        //   x_eff = x + act(h) W_up, h = x W_down.
        let (g_x, g_w_down, g_w_up) = match (&self.bottleneck, &cache.h) {
            (Some(block), Some(h)) => {
                let bact = block.activation;
                let a = h.map(|v| bact.apply(v));
                let d_w_up = a.transpose().matmul(&g_x_eff)?;
                let d_a = g_x_eff.matmul(&block.w_up.transpose())?;
                let mut dh = Matrix2D::zeros(h.rows(), h.cols());
                for i in 0..h.rows() {
                    for j in 0..h.cols() {
                        dh.set(i, j, d_a.get(i, j) * bact.grad(h.get(i, j)));
                    }
                }
                let d_w_down = cache.x.transpose().matmul(&dh)?;
                let mut g_x = g_x_eff.clone();
                g_x.add_scaled_in_place(&dh.matmul(&block.w_down.transpose())?, 1.0)?;
                (g_x, Some(d_w_down), Some(d_w_up))
            }
            _ => (g_x_eff, None, None),
        };

        Ok(LayerGradients {
            expert_weights: g_w,
            expert_biases: g_b,
            w_gate: gb.d_w_gate,
            task_embeddings: gb.d_task_embeddings,
            w_down: g_w_down,
            w_up: g_w_up,
            input: g_x,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::expert::{ActivationKind, ActivationPlacement};
    use crate::moe::{moe_apply, MoeLayer};

    fn fixture_bank() -> ExpertBank {
        let w0 = Matrix2D::identity(2);
        let w1 = Matrix2D::identity(2).scale(2.0);
        ExpertBank::from_parts(
            vec![w0, w1],
            vec![vec![1.0, 1.0], vec![0.0, 0.0]],
            ActivationKind::Identity,
        )
        .unwrap()
    }

    #[test]
    fn merge_hand_case() {
        // 0.25 * I + 0.75 * 2I = 1.75 I, 0.25 * [1,1] + 0.75 * [0,0] = [0.25, 0.25].
        let merged = merge_experts(&fixture_bank(), &[0, 1], &[0.25, 0.75]).unwrap();
        assert_eq!(merged.w_hat.get(0, 0), 1.75);
        assert_eq!(merged.w_hat.get(1, 1), 1.75);
        assert_eq!(merged.w_hat.get(0, 1), 0.0);
        assert_eq!(merged.b_hat, vec![0.25, 0.25]);
    }

    #[test]
    fn merge_matches_entrywise_scalar_loop() {
        let bank = ExpertBank::init(5, 4, 3, ActivationKind::Identity, 52).unwrap();
        let indices = [4usize, 1, 2];
        let scores = [0.5, 0.3, 0.2];
        let merged = merge_experts(&bank, &indices, &scores).unwrap();
        for i in 0..4 {
            for j in 0..3 {
                let mut acc = 0.0;
                for (t, &k) in indices.iter().enumerate() {
                    acc += scores[t] * bank.weight(k).get(i, j);
                }
                assert!((merged.w_hat.get(i, j) - acc).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn merge_ignores_selection_ordering() {
        let bank = ExpertBank::init(6, 3, 3, ActivationKind::Identity, 53).unwrap();
        let a = merge_experts(&bank, &[5, 0, 3], &[0.5, 0.2, 0.3]).unwrap();
        let b = merge_experts(&bank, &[0, 3, 5], &[0.2, 0.3, 0.5]).unwrap();
        // Same index-score pairs in any order merge to the same parameters,
        // bit for bit, because summation always runs in index order.
        assert_eq!(a, b);
    }

    #[test]
    fn merge_is_homogeneous_in_scores() {
        let bank = ExpertBank::init(4, 3, 2, ActivationKind::Identity, 54).unwrap();
        let scores = [0.4, 0.35, 0.25];
        let base = merge_experts(&bank, &[0, 2, 3], &scores).unwrap();
        // Power-of-two scaling is exact.
        let doubled: Vec<f64> = scores.iter().map(|s| 2.0 * s).collect();
        let merged2 = merge_experts(&bank, &[0, 2, 3], &doubled).unwrap();
        assert_eq!(merged2.w_hat, base.w_hat.scale(2.0));
        assert_eq!(merged2.b_hat, base.b_hat.iter().map(|b| 2.0 * b).collect::<Vec<_>>());
        // Generic scaling only up to rounding.
        let c = 1.3;
        let scaled: Vec<f64> = scores.iter().map(|s| c * s).collect();
        let merged_c = merge_experts(&bank, &[0, 2, 3], &scaled).unwrap();
        assert!(merged_c.w_hat.max_abs_diff(&base.w_hat.scale(c)).unwrap() < 1e-12);
    }

    #[test]
    fn merged_apply_equals_output_mixing_outside() {
        let mut rng = Rng::new(55);
        for trial in 0..10u64 {
            let bank = ExpertBank::init(6, 5, 4, ActivationKind::Gelu, 100 + trial).unwrap();
            let gate = GateParams::init(5, 6, 200 + trial).unwrap();
            let x = Matrix2D::random_uniform(7, 5, -1.0, 1.0, &mut rng);
            for level in [GateLevel::Token, GateLevel::Sequence] {
                let trace = gating::route(&x, level, None, &gate, 3, trial % 2 == 0).unwrap();
                let mixed = moe_apply(
                    &bank,
                    &x,
                    &trace.decision,
                    ActivationPlacement::OutsideExperts,
                )
                .unwrap();
                let merged = meo_apply(&bank, &x, &trace.decision).unwrap();
                assert!(
                    merged.max_abs_diff(&mixed).unwrap() <= 1e-10,
                    "trial {trial} at {} level",
                    level.name()
                );
            }
        }
    }

    #[test]
    fn zero_up_projection_reduces_token_path_to_sequence_path() {
        // A fresh bottleneck has W_up = 0, so the token mixer is the identity
        // and the token-level layer must agree with a plain sequence-level
        // layer sharing the same parameters.
        let mut rng = Rng::new(56);
        let bank = ExpertBank::init(4, 6, 6, ActivationKind::Tanh, 57).unwrap();
        let gate = GateParams::init(6, 4, 58).unwrap();
        let token =
            MeoLayer::new_token_level(bank.clone(), gate.clone(), 2, true, 3, 59).unwrap();
        let seq = MeoLayer::new(bank, gate, GateLevel::Sequence, 2, true).unwrap();
        let x = Matrix2D::random_uniform(5, 6, -1.0, 1.0, &mut rng);
        let (yt, dt) = token.token_level_forward(&x).unwrap();
        let (ys, ds) = seq.forward(&x, None).unwrap();
        assert_eq!(dt, ds);
        assert_eq!(yt, ys);
    }

    #[test]
    fn entry_points_enforce_the_level() {
        let bank = ExpertBank::init(4, 6, 6, ActivationKind::Identity, 60).unwrap();
        let gate = GateParams::init(6, 4, 61).unwrap();
        assert!(matches!(
            MeoLayer::new(bank.clone(), gate.clone(), GateLevel::Token, 2, true),
            Err(Error::WrongLevel { .. })
        ));
        let token = MeoLayer::new_token_level(bank.clone(), gate.clone(), 2, true, 2, 62).unwrap();
        let x = Matrix2D::zeros(3, 6);
        assert!(matches!(token.forward(&x, None), Err(Error::WrongLevel { .. })));
        let seq = MeoLayer::new(bank, gate, GateLevel::Sequence, 2, true).unwrap();
        assert!(matches!(seq.token_level_forward(&x), Err(Error::WrongLevel { .. })));
    }

    #[test]
    fn bottleneck_requires_divisible_width() {
        assert!(BottleneckBlock::init(6, 4, ActivationKind::Gelu, 1).is_err());
        let block = BottleneckBlock::init(6, 3, ActivationKind::Gelu, 1).unwrap();
        assert_eq!(block.hidden(), 2);
    }

    #[test]
    fn backward_matches_output_mixing_backward_on_shared_parameters() {
        // Same parameters, same decision, identical function (outside
        // placement), so the two backward implementations must agree.
        let mut rng = Rng::new(63);
        let bank = ExpertBank::init(5, 4, 3, ActivationKind::Gelu, 64).unwrap();
        let gate = GateParams::init(4, 5, 65).unwrap();
        let x = Matrix2D::random_uniform(4, 4, -1.0, 1.0, &mut rng);
        let upstream = Matrix2D::random_uniform(4, 3, -1.0, 1.0, &mut rng);
        let moe = MoeLayer::new(
            bank.clone(),
            gate.clone(),
            GateLevel::Sequence,
            3,
            ActivationPlacement::OutsideExperts,
            true,
        )
        .unwrap();
        let meo = MeoLayer::new(bank, gate, GateLevel::Sequence, 3, true).unwrap();
        let (_, c_moe) = moe.forward_cached(&x, None).unwrap();
        let (_, c_meo) = meo.forward_cached(&x, None).unwrap();
        assert_eq!(c_moe.decision(), c_meo.decision());
        let g_moe = moe.backward(&c_moe, &upstream).unwrap();
        let g_meo = meo.backward(&c_meo, &upstream).unwrap();
        let rel = |a: f64, b: f64| (a - b).abs() / a.abs().max(b.abs()).max(1e-8);
        for k in 0..5 {
            let (wa, wb) = (&g_moe.expert_weights[k], &g_meo.expert_weights[k]);
            for (va, vb) in wa.as_slice().iter().zip(wb.as_slice()) {
                assert!(rel(*va, *vb) < 1e-8, "expert {k}: {va} vs {vb}");
            }
        }
        for (va, vb) in g_moe.w_gate.as_slice().iter().zip(g_meo.w_gate.as_slice()) {
            assert!(rel(*va, *vb) < 1e-8, "gate grad: {va} vs {vb}");
        }
        for (va, vb) in g_moe.input.as_slice().iter().zip(g_meo.input.as_slice()) {
            assert!(rel(*va, *vb) < 1e-8, "input grad: {va} vs {vb}");
        }
    }

    #[test]
    fn unselected_experts_get_exactly_zero_gradient() {
        let mut rng = Rng::new(66);
        let bank = ExpertBank::init(7, 4, 3, ActivationKind::Tanh, 67).unwrap();
        let gate = GateParams::init(4, 7, 68).unwrap();
        let layer = MeoLayer::new(bank, gate, GateLevel::Sequence, 2, true).unwrap();
        let x = Matrix2D::random_uniform(3, 4, -1.0, 1.0, &mut rng);
        let (y, cache) = layer.forward_cached(&x, None).unwrap();
        let grads = layer.backward(&cache, &y).unwrap();
        let selected = &cache.trace.decision.indices[0];
        for k in 0..7 {
            let zero = grads.expert_weights[k].as_slice().iter().all(|&v| v == 0.0);
            assert_eq!(zero, !selected.contains(&k), "expert {k}");
        }
    }

    #[test]
    fn token_backward_fills_bottleneck_gradients() {
        let mut rng = Rng::new(69);
        let bank = ExpertBank::init(4, 6, 6, ActivationKind::Tanh, 70).unwrap();
        let gate = GateParams::init(6, 4, 71).unwrap();
        let mut layer = MeoLayer::new_token_level(bank, gate, 2, true, 3, 72).unwrap();
        // Random up-projection so gradients reach W_down too.
        let block = layer.bottleneck.as_mut().unwrap();
        block.w_up = Matrix2D::random_uniform(2, 6, -0.5, 0.5, &mut rng);
        let x = Matrix2D::random_uniform(5, 6, -1.0, 1.0, &mut rng);
        let (y, cache) = layer.token_level_forward_cached(&x).unwrap();
        let grads = layer.backward(&cache, &y).unwrap();
        let w_down_grad = grads.w_down.expect("w_down gradient present");
        let w_up_grad = grads.w_up.expect("w_up gradient present");
        assert!(w_down_grad.as_slice().iter().any(|&v| v != 0.0));
        assert!(w_up_grad.as_slice().iter().any(|&v| v != 0.0));
    }
}

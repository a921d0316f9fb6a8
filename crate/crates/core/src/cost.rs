//! Closed-form FLOPs accounting for transformer profiles that swap their
//! feed-forward blocks for expert mixtures.
//!
//! Counting convention, applied everywhere: one multiply-accumulate is two
//! FLOPs, and only matrix multiplications are counted. Softmax, layer norm,
//! activations and residual adds are ignored. All arithmetic is exact u64.
//!
//! The point the numbers make: mixing expert outputs pays for m expert
//! forwards per layer, while merging expert parameters pays for one expert
//! forward plus a parameter-sum whose cost is a rounding error next to the
//! expert matmuls.

use crate::error::{Error, Result};
use crate::gating::GateLevel;
use serde::{Deserialize, Serialize};

/// Which layer construction a profile describes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelVariant {
    /// Dense feed-forward blocks, no experts.
    Vanilla,
    /// Run every selected expert and mix their outputs.
    Moe,
    /// Merge selected parameters, run one expert.
    Meo,
    /// Merged expert with the residual token mixer, routed per sequence.
    MeoToken,
}

impl ModelVariant {
    pub fn name(self) -> &'static str {
        match self {
            ModelVariant::Vanilla => "vanilla",
            ModelVariant::Moe => "moe",
            ModelVariant::Meo => "meo",
            ModelVariant::MeoToken => "meo_token",
        }
    }
}

fn default_reduce() -> u64 {
    64
}

/// Static description of one transformer configuration.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelProfile {
    pub layers: u64,
    pub d_model: u64,
    pub d_ff: u64,
    pub seq_len: u64,
    /// Output vocabulary; 0 drops the output head from the count.
    #[serde(default)]
    pub vocab: u64,
    pub n_experts: u64,
    pub m_selected: u64,
    pub level: GateLevel,
    pub variant: ModelVariant,
    /// Bottleneck reduction factor, used by the token-level merged variant.
    #[serde(default = "default_reduce")]
    pub r: u64,
}

impl ModelProfile {
    /// Four-layer, d=512 encoder with 32 experts routed per token.
    pub fn bert_small(variant: ModelVariant, level: GateLevel, m: u64) -> Self {
        Self {
            layers: 4,
            d_model: 512,
            d_ff: 2048,
            seq_len: 128,
            vocab: 30522,
            n_experts: 32,
            m_selected: m,
            level,
            variant,
            r: 64,
        }
    }

    /// Twelve-layer, d=768 encoder with 16 experts routed per sequence.
    pub fn bert_base(variant: ModelVariant, level: GateLevel, m: u64) -> Self {
        Self {
            layers: 12,
            d_model: 768,
            d_ff: 3072,
            seq_len: 128,
            vocab: 30522,
            n_experts: 16,
            m_selected: m,
            level,
            variant,
            r: 64,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.seq_len == 0 {
            return Err(Error::InvalidConfig("seq_len must be at least 1".into()));
        }
        if self.d_model == 0 || self.d_ff == 0 {
            return Err(Error::InvalidConfig("d_model and d_ff must be at least 1".into()));
        }
        if self.m_selected > self.n_experts {
            return Err(Error::InvalidConfig(format!(
                "m_selected = {} exceeds n_experts = {}",
                self.m_selected, self.n_experts
            )));
        }
        if self.variant == ModelVariant::MeoToken {
            if self.r == 0 {
                return Err(Error::InvalidConfig("reduction factor r must be at least 1".into()));
            }
            if self.d_model % self.r != 0 {
                return Err(Error::InvalidConfig(format!(
                    "reduction factor {} must divide d_model {}",
                    self.r, self.d_model
                )));
            }
        }
        Ok(())
    }
}

/// Everything the expert machinery costs beyond the expert matmuls
/// themselves, whole model, exact FLOPs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct Overheads {
    pub gating: u64,
    pub merging: u64,
    pub mixing: u64,
    pub bottleneck: u64,
}

impl Overheads {
    pub fn total(&self) -> u64 {
        self.gating + self.merging + self.mixing + self.bottleneck
    }
}

/// Full cost decomposition for one profile. Parts always sum to the total.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct CostReport {
    pub backbone_flops: u64,
    pub expert_forward_flops: u64,
    pub gating_flops: u64,
    pub merging_flops: u64,
    pub mixing_flops: u64,
    pub bottleneck_flops: u64,
    pub total_flops: u64,
}

/// Attention projections and score/value products for every layer, plus the
/// output head. The feed-forward (expert) cost is counted separately.
pub fn backbone_flops(p: &ModelProfile) -> u64 {
    let (l, d, s, v) = (p.layers, p.d_model, p.seq_len, p.vocab);
    // Per layer: four s*d*d projections plus the two s*s*d score and value
    // products, two FLOPs per multiply-accumulate.
    let attention = l * (8 * s * d * d + 4 * s * s * d);
    let head = 2 * s * d * v;
    attention + head
}

/// One fused two-matrix feed-forward expert (d -> d_ff -> d), per expert per
/// layer.
pub fn expert_forward_flops(p: &ModelProfile) -> u64 {
    4 * p.seq_len * p.d_model * p.d_ff
}

/// How many routing decisions one layer makes. Token-level routing decides
/// per token, except in the token-level merged variant where tokens are mixed
/// first and the whole sequence is routed once.
fn gating_groups(p: &ModelProfile) -> u64 {
    match (p.variant, p.level) {
        (ModelVariant::MeoToken, _) => 1,
        (_, GateLevel::Token) => p.seq_len,
        _ => 1,
    }
}

/// Whole-model overhead FLOPs for the profile's variant. A hypothetical
/// m_selected = 0 removes the expert machinery entirely, so every overhead is
/// zero there.
pub fn overhead_flops(p: &ModelProfile) -> Overheads {
    if p.variant == ModelVariant::Vanilla || p.m_selected == 0 {
        return Overheads::default();
    }
    let (l, d, dff, s, n, m) = (p.layers, p.d_model, p.d_ff, p.seq_len, p.n_experts, p.m_selected);
    let groups = gating_groups(p);
    let gating = groups * 2 * d * n * l;
    let mut over = Overheads { gating, ..Overheads::default() };
    match p.variant {
        ModelVariant::Vanilla => unreachable!("handled above"),
        ModelVariant::Moe => {
            // Score-weighted sum of m expert outputs, one s x d accumulation
            // per expert per layer.
            over.mixing = m * 2 * s * d * l;
        }
        ModelVariant::Meo | ModelVariant::MeoToken => {
            // Score-weighted sum of m parameter sets per routing group: both
            // expert matrices plus the two bias vectors, counted as d_ff each.
            over.merging = groups * m * 2 * (d * dff + dff * d + 2 * dff) * l;
            if p.variant == ModelVariant::MeoToken {
                over.bottleneck = 4 * s * d * (d / p.r) * l;
            }
        }
    }
    over
}

/// Assembles the full decomposition. Output mixing pays for m expert forwards
/// per layer; parameter merging pays for exactly one.
pub fn total_flops(p: &ModelProfile) -> Result<CostReport> {
    p.validate()?;
    let backbone = backbone_flops(p);
    let per_expert = p.layers * expert_forward_flops(p);
    let experts = match p.variant {
        ModelVariant::Vanilla => per_expert,
        ModelVariant::Moe => p.m_selected * per_expert,
        ModelVariant::Meo | ModelVariant::MeoToken => {
            if p.m_selected == 0 {
                0
            } else {
                per_expert
            }
        }
    };
    let over = overhead_flops(p);
    Ok(CostReport {
        backbone_flops: backbone,
        expert_forward_flops: experts,
        gating_flops: over.gating,
        merging_flops: over.merging,
        mixing_flops: over.mixing,
        bottleneck_flops: over.bottleneck,
        total_flops: backbone + experts + over.total(),
    })
}

pub fn gflops(v: u64) -> f64 {
    v as f64 / 1e9
}

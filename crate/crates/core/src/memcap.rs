//! Per-GPU memory footprint across the two memory tiers.

use std::fmt;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::hardware::{Precision, SystemSpec};
use crate::model::{build_head_graph, build_layer_graph, count_params, ModelSpec, OpProfile};
use crate::strategy::{Strategy, ZeroStage};

/// Training-state bytes per parameter, mixed precision with Adam.
pub mod state {
    /// Low-precision copy used by the matmuls.
    pub const COMPUTE_WEIGHT: f64 = 2.0;
    pub const MASTER_WEIGHT: f64 = 4.0;
    pub const GRADIENT: f64 = 4.0;
    /// First and second Adam moments in FP32.
    pub const ADAM_MOMENTS: f64 = 8.0;
    pub const SCRATCH: f64 = 2.0;
    pub const TOTAL: f64 = COMPUTE_WEIGHT + MASTER_WEIGHT + GRADIENT + ADAM_MOMENTS + SCRATCH;
}

/// Layers kept resident in tier 1 while the rest of an offloaded component
/// streams from tier 2 (current + prefetch).
const RESIDENT_LAYERS: f64 = 2.0;

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize)]
pub struct MemoryFootprint {
    pub weights: f64,
    pub master_and_optimizer: f64,
    pub gradients: f64,
    pub activations: f64,
    pub framework: f64,
    pub tier1_total: f64,
    pub tier2_total: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum ViolationReason {
    Tier1Capacity,
    Tier2Capacity,
    ClusterSize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Violation {
    pub reason: ViolationReason,
    pub bytes_over: f64,
    pub detail: String,
    pub footprint: Option<MemoryFootprint>,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.reason {
            ViolationReason::Tier1Capacity => {
                write!(f, "tier1 over by {:.3} GB", self.bytes_over / 1e9)?
            }
            ViolationReason::Tier2Capacity => {
                write!(f, "tier2 over by {:.3} GB", self.bytes_over / 1e9)?
            }
            ViolationReason::ClusterSize => write!(f, "cluster too small")?,
        }
        if !self.detail.is_empty() {
            write!(f, " ({})", self.detail)?;
        }
        Ok(())
    }
}

pub fn state_bytes_per_param(zero: ZeroStage, dp: u64) -> f64 {
    let dp = dp.max(1) as f64;
    let opt = state::MASTER_WEIGHT + state::ADAM_MOMENTS;
    let fixed = state::COMPUTE_WEIGHT + state::SCRATCH;
    match zero {
        ZeroStage::Z0 => fixed + opt + state::GRADIENT,
        ZeroStage::Z1 => fixed + opt / dp + state::GRADIENT,
        ZeroStage::Z2 => fixed + (opt + state::GRADIENT) / dp,
    }
}

/// Smallest GPU count whose combined tier-1 capacity holds the full
/// unsharded training state.
pub fn min_gpus_for_state(model: &ModelSpec, tier1_cap: f64) -> Result<u64> {
    let params = count_params(model)?.total_params as f64;
    Ok((params * state::TOTAL / tier1_cap).ceil() as u64)
}

/// Parameters resident on one GPU.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct LocalParams {
    /// Attention and embedding parameters, sharded by TP and PP.
    pub dense: f64,
    /// Expert parameters, sharded by EP, ES and PP.
    pub experts: f64,
}

pub fn local_params(model: &ModelSpec, strategy: &Strategy) -> Result<LocalParams> {
    let p = count_params(model)?;
    let dense =
        (p.attention_params + p.embedding_params) as f64 / (strategy.tp * strategy.pp) as f64;
    let experts = (p.expert_params_per_expert as f64 * model.num_experts as f64)
        / (strategy.ep * strategy.es * strategy.pp) as f64;
    Ok(LocalParams { dense, experts })
}

/// Microbatches whose activations are alive at once on the first stage.
pub fn in_flight_microbatches(strategy: &Strategy, batch: u64) -> u64 {
    strategy.pp.min(strategy.microbatches(batch)).max(1)
}

pub fn layers_per_stage(model: &ModelSpec, strategy: &Strategy) -> f64 {
    (model.num_layers / strategy.pp) as f64
}

pub fn footprint(
    model: &ModelSpec,
    strategy: &Strategy,
    sys: &SystemSpec,
    batch: u64,
    seq: u64,
) -> Result<MemoryFootprint> {
    let layer = build_layer_graph(model, strategy, seq, Precision::Fp8)?;
    let head = build_head_graph(model, strategy, seq, Precision::Fp8)?;
    footprint_from_graph(model, strategy, sys, batch, &layer, &head)
}

pub(crate) fn stored(ops: &[OpProfile]) -> f64 {
    ops.iter().map(|op| op.stored_act_bytes).sum()
}

pub fn footprint_from_graph(
    model: &ModelSpec,
    strategy: &Strategy,
    sys: &SystemSpec,
    batch: u64,
    layer: &[OpProfile],
    head: &[OpProfile],
) -> Result<MemoryFootprint> {
    footprint_from_stored(model, strategy, sys, batch, stored(layer), stored(head))
}

/// Footprint given the stored activation bytes of one layer and of the
/// embedding/logit head, both for a single microbatch.
pub fn footprint_from_stored(
    model: &ModelSpec,
    strategy: &Strategy,
    sys: &SystemSpec,
    batch: u64,
    layer_stored: f64,
    head_stored: f64,
) -> Result<MemoryFootprint> {
    if strategy.dp == 0 || strategy.microbatch == 0 || batch < strategy.dp * strategy.microbatch {
        return Err(Error::Range("batch smaller than dp * microbatch".into()));
    }
    let params = local_params(model, strategy)?;
    let shard = |zero_applies: bool, group: u64| if zero_applies { group as f64 } else { 1.0 };
    let opt_sharded = strategy.zero != ZeroStage::Z0;
    let grad_sharded = strategy.zero == ZeroStage::Z2;

    let weights = (params.dense + params.experts) * (state::COMPUTE_WEIGHT + state::SCRATCH);
    let opt_per_param = state::MASTER_WEIGHT + state::ADAM_MOMENTS;
    let master_and_optimizer = params.dense * opt_per_param / shard(opt_sharded, strategy.dp)
        + params.experts * opt_per_param / shard(opt_sharded, strategy.dp_exp);
    let gradients = params.dense * state::GRADIENT / shard(grad_sharded, strategy.dp)
        + params.experts * state::GRADIENT / shard(grad_sharded, strategy.dp_exp);

    let per_layer = layer_stored;
    let lps = layers_per_stage(model, strategy);
    let in_flight = in_flight_microbatches(strategy, batch) as f64;
    let activations = in_flight * (lps * per_layer + head_stored / strategy.pp as f64);

    let keep = (RESIDENT_LAYERS / lps).min(1.0);
    let split = |total: f64, offloaded: bool, resident_share: f64| {
        if offloaded {
            (total * resident_share, total * (1.0 - resident_share))
        } else {
            (total, 0.0)
        }
    };
    let (w1, w2) = split(weights, strategy.offload_weights, keep);
    let (a1, a2) = split(activations, strategy.offload_acts, keep);
    let (o1, o2) = split(master_and_optimizer, strategy.offload_opt, 0.0);
    let framework = sys.framework_overhead;

    Ok(MemoryFootprint {
        weights,
        master_and_optimizer,
        gradients,
        activations,
        framework,
        tier1_total: w1 + a1 + o1 + gradients + framework,
        tier2_total: w2 + a2 + o2,
    })
}

pub fn check_capacity(
    fp: &MemoryFootprint,
    sys: &SystemSpec,
) -> std::result::Result<(), Violation> {
    let detail = || {
        format!(
            "weights {:.2} GB, optimizer {:.2} GB, gradients {:.2} GB, activations {:.2} GB, framework {:.2} GB",
            fp.weights / 1e9,
            fp.master_and_optimizer / 1e9,
            fp.gradients / 1e9,
            fp.activations / 1e9,
            fp.framework / 1e9
        )
    };
    if fp.tier1_total > sys.tier1_cap {
        return Err(Violation {
            reason: ViolationReason::Tier1Capacity,
            bytes_over: fp.tier1_total - sys.tier1_cap,
            detail: detail(),
            footprint: Some(*fp),
        });
    }
    if fp.tier2_total > sys.tier2_cap {
        return Err(Violation {
            reason: ViolationReason::Tier2Capacity,
            bytes_over: fp.tier2_total - sys.tier2_cap,
            detail: detail(),
            footprint: Some(*fp),
        });
    }
    Ok(())
}

/// `Ok(footprint)` when both tiers fit, otherwise the overflowing tier.
pub fn feasible(
    model: &ModelSpec,
    strategy: &Strategy,
    sys: &SystemSpec,
    batch: u64,
    seq: u64,
) -> Result<std::result::Result<MemoryFootprint, Violation>> {
    let fp = footprint(model, strategy, sys, batch, seq)?;
    Ok(check_capacity(&fp, sys).map(|_| fp))
}

/// Tier-2 traffic per layer for each enabled offload flag (in + out).
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize)]
pub struct OffloadTraffic {
    /// Per layer, per forward or backward pass.
    pub weights_per_layer_pass: f64,
    /// Per layer, per microbatch.
    pub acts_per_layer_microbatch: f64,
    /// Per layer, once per optimizer step.
    pub optimizer_per_layer_step: f64,
}

impl OffloadTraffic {
    pub fn is_zero(&self) -> bool {
        self.weights_per_layer_pass == 0.0
            && self.acts_per_layer_microbatch == 0.0
            && self.optimizer_per_layer_step == 0.0
    }
}

pub fn offload_traffic_from_footprint(
    fp: &MemoryFootprint,
    model: &ModelSpec,
    strategy: &Strategy,
    batch: u64,
) -> OffloadTraffic {
    let lps = layers_per_stage(model, strategy);
    let in_flight = in_flight_microbatches(strategy, batch) as f64;
    let on = |flag: bool, bytes: f64| if flag { 2.0 * bytes } else { 0.0 };
    OffloadTraffic {
        weights_per_layer_pass: on(strategy.offload_weights, fp.weights / lps),
        acts_per_layer_microbatch: on(strategy.offload_acts, fp.activations / in_flight / lps),
        optimizer_per_layer_step: on(strategy.offload_opt, fp.master_and_optimizer / lps),
    }
}

pub fn offload_traffic(
    model: &ModelSpec,
    strategy: &Strategy,
    sys: &SystemSpec,
    batch: u64,
    seq: u64,
) -> Result<OffloadTraffic> {
    let fp = footprint(model, strategy, sys, batch, seq)?;
    Ok(offload_traffic_from_footprint(&fp, model, strategy, batch))
}

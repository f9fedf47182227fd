//! Placement of parallel groups onto network tiers and collective pricing.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::hardware::{SystemSpec, Topology};
use crate::memcap::{Violation, ViolationReason};
use crate::strategy::Strategy;

/// Share of collective time a GPU spends driving software collectives.
pub const SW_COLLECTIVE_GPU_OVERHEAD: f64 = 0.13;

/// Switch hops for traffic that leaves the high-bandwidth domain.
pub const SCALE_OUT_HOPS: u64 = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum CollectiveKind {
    Allreduce,
    ReduceScatter,
    AllGather,
    AllToAll,
    P2p,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct CommEvent {
    pub kind: CollectiveKind,
    /// Buffer size per participant.
    pub payload_bytes: f64,
    pub group_size: u64,
    /// Contiguous GPUs the group occupies.
    pub span_nodes: u64,
    pub overlappable: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Tier {
    ScaleUp,
    ScaleOut,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct TierChoice {
    pub tier: Tier,
    pub bw: f64,
    pub base_latency: f64,
    pub hops: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct GroupPlacement {
    pub group_size: u64,
    pub span_nodes: u64,
    pub tier: TierChoice,
}

/// Where each parallel dimension lands. `ep` is the all-to-all group.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Placement {
    pub tp: GroupPlacement,
    pub es: GroupPlacement,
    pub ep: GroupPlacement,
    pub pp: GroupPlacement,
    pub dp: GroupPlacement,
    pub dp_exp: GroupPlacement,
}

/// A group is served by the scale-up fabric iff it fits in one HBD; a group
/// that straddles HBDs runs at the scale-out rate.
pub fn tier_for_span(span_nodes: u64, sys: &SystemSpec) -> TierChoice {
    if span_nodes <= sys.hbd_size {
        TierChoice {
            tier: Tier::ScaleUp,
            bw: sys.su_bw,
            base_latency: sys.su_latency,
            hops: 1,
        }
    } else {
        // Under full_flat so_bw == su_bw, so only the hop count differs.
        debug_assert!(sys.topology != Topology::FullFlat || sys.so_bw == sys.su_bw);
        TierChoice {
            tier: Tier::ScaleOut,
            bw: sys.so_bw,
            base_latency: sys.so_latency,
            hops: SCALE_OUT_HOPS,
        }
    }
}

/// Ranks are laid out innermost to outermost as TP, ES, EP, PP, DP/DP_exp.
pub fn place_groups(strategy: &Strategy, sys: &SystemSpec) -> Result<Placement> {
    let n = strategy.total_gpus();
    if n > sys.cluster_size {
        return Err(Error::Infeasible(Box::new(Violation {
            reason: ViolationReason::ClusterSize,
            bytes_over: 0.0,
            detail: format!("{n} GPUs requested, cluster has {}", sys.cluster_size),
            footprint: None,
        })));
    }
    let group = |size: u64, span: u64| GroupPlacement {
        group_size: size,
        span_nodes: if size > 1 { span } else { 1 },
        tier: tier_for_span(if size > 1 { span } else { 1 }, sys),
    };
    let expert_block = strategy.ep * strategy.es;
    let stage_block = strategy.tp.max(expert_block);
    Ok(Placement {
        tp: group(strategy.tp, strategy.tp),
        es: group(strategy.es, strategy.es),
        ep: group(strategy.ep, expert_block),
        pp: group(if strategy.pp > 1 { 2 } else { 1 }, 2 * stage_block),
        dp: group(strategy.dp, n),
        dp_exp: group(strategy.dp_exp, n),
    })
}

/// Bytes each participant puts on the wire.
pub fn collective_bytes(kind: CollectiveKind, payload: f64, group: u64, hw: bool) -> f64 {
    if group <= 1 {
        return 0.0;
    }
    let frac = (group - 1) as f64 / group as f64;
    match kind {
        CollectiveKind::Allreduce => {
            let sw = 2.0 * payload * frac;
            if hw {
                sw / 2.0
            } else {
                sw
            }
        }
        CollectiveKind::ReduceScatter | CollectiveKind::AllGather => {
            if hw {
                payload * frac / 1.5
            } else {
                payload * frac
            }
        }
        CollectiveKind::AllToAll => payload * frac,
        CollectiveKind::P2p => payload,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize)]
pub struct CommTime {
    pub wire_t: f64,
    /// Compute-stream time spent driving software collectives; never hidden.
    pub gpu_overhead_t: f64,
}

impl std::ops::AddAssign for CommTime {
    fn add_assign(&mut self, rhs: Self) {
        self.wire_t += rhs.wire_t;
        self.gpu_overhead_t += rhs.gpu_overhead_t;
    }
}

fn ceil_log2(g: u64) -> u64 {
    if g <= 1 {
        0
    } else {
        64 - (g - 1).leading_zeros() as u64
    }
}

pub fn collective_time(ev: &CommEvent, tier: &TierChoice, sys: &SystemSpec) -> CommTime {
    if ev.group_size <= 1 {
        return CommTime::default();
    }
    let bytes = collective_bytes(ev.kind, ev.payload_bytes, ev.group_size, sys.hw_collectives);
    let latency = (tier.hops * ceil_log2(ev.group_size)) as f64 * tier.base_latency;
    let wire_t = latency + bytes / (tier.bw * sys.net_efficiency);
    let gpu_overhead_t = if sys.hw_collectives {
        0.0
    } else {
        SW_COLLECTIVE_GPU_OVERHEAD * wire_t
    };
    CommTime {
        wire_t,
        gpu_overhead_t,
    }
}

/// Bytes one GPU sends per direction (dispatch or combine) under balanced routing.
pub fn moe_alltoall_payload(tokens_per_gpu: f64, hidden: u64, dtype_bytes: f64, top_k: u64) -> f64 {
    tokens_per_gpu * hidden as f64 * dtype_bytes * top_k as f64
}

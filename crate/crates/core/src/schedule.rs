//! Training-step composition: pipeline schedule, overlap, recompute and
//! offload exposure on top of per-op and per-collective times.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::hardware::{op_time, Precision, SystemSpec};
use crate::memcap::{self, MemoryFootprint, OffloadTraffic};
use crate::model::{
    build_head_graph, build_layer_graph, flops_per_token, Block, ModelSpec, OpProfile,
};
use crate::topology::{
    collective_time, moe_alltoall_payload, place_groups, tier_for_span, CollectiveKind, CommEvent,
    CommTime, Placement, Tier,
};

pub use crate::strategy::{Recompute, Strategy, TpComm, TpOverlap, ZeroStage};

/// Wire time per tier and how much of it reached the critical path.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize)]
pub struct TierBreakdown {
    pub su_wire_t: f64,
    pub so_wire_t: f64,
    pub su_exposed_t: f64,
    pub so_exposed_t: f64,
    /// Compute-stream time lost to software collectives.
    pub gpu_overhead_t: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunEstimate {
    pub step_time: f64,
    pub compute_t: f64,
    pub exposed_comm_t: f64,
    pub bubble_t: f64,
    pub recompute_t: f64,
    pub exposed_offload_t: f64,
    pub footprint: MemoryFootprint,
    pub tokens_per_sec: f64,
    pub mfu: f64,
    pub strategy: Strategy,
    pub comm: TierBreakdown,
}

/// Compute-side costs of one pipeline stage for one microbatch, independent
/// of the communication and memory flags of a strategy.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct StageProfile {
    pub layer_fwd: f64,
    pub layer_bwd: f64,
    /// Forward time of the score, softmax and context ops of one layer.
    pub layer_attn_core_fwd: f64,
    pub layer_stored: f64,
    pub head_fwd: f64,
    pub head_bwd: f64,
    pub head_stored: f64,
}

fn pass_times(ops: &[OpProfile], sys: &SystemSpec, precision: Precision) -> (f64, f64) {
    ops.iter().fold((0.0, 0.0), |(f, b), op| {
        (
            f + op_time(op, sys, precision),
            b + op_time(&op.backward(), sys, precision),
        )
    })
}

pub fn stage_profile(
    model: &ModelSpec,
    sys: &SystemSpec,
    strategy: &Strategy,
    seq: u64,
    precision: Precision,
) -> Result<StageProfile> {
    let layer = build_layer_graph(model, strategy, seq, precision)?;
    let head = build_head_graph(model, strategy, seq, precision)?;
    let (layer_fwd, layer_bwd) = pass_times(&layer, sys, precision);
    let (head_fwd, head_bwd) = pass_times(&head, sys, precision);
    let layer_attn_core_fwd = layer
        .iter()
        .filter(|op| op.block == Block::AttentionCore)
        .map(|op| op_time(op, sys, precision))
        .sum();
    Ok(StageProfile {
        layer_fwd,
        layer_bwd,
        layer_attn_core_fwd,
        layer_stored: memcap::stored(&layer),
        head_fwd,
        head_bwd,
        head_stored: memcap::stored(&head),
    })
}

/// Per-layer collectives of one forward (or backward) pass: the tensor
/// parallel pair (attention over TP, experts over ES) and the MoE all-to-all
/// pair (dispatch, combine).
pub fn layer_events(
    model: &ModelSpec,
    strategy: &Strategy,
    seq: u64,
    precision: Precision,
) -> (Vec<CommEvent>, Vec<CommEvent>) {
    let a = precision.bytes();
    let t = (strategy.microbatch * seq) as f64;
    let h = model.hidden_dim as f64;
    let te = t * model.top_k as f64 * strategy.es as f64 / strategy.tp as f64;
    let overlappable = strategy.tp_overlap == TpOverlap::Ring;

    let mut tp = Vec::with_capacity(4);
    for (payload, group) in [(t * h * a, strategy.tp), (te * h * a, strategy.es)] {
        if group <= 1 {
            continue;
        }
        let ev = |kind, payload_bytes| CommEvent {
            kind,
            payload_bytes,
            group_size: group,
            span_nodes: group,
            overlappable,
        };
        match strategy.tp_comm {
            TpComm::Allreduce => tp.push(ev(CollectiveKind::Allreduce, payload)),
            TpComm::RsAg => {
                tp.push(ev(CollectiveKind::ReduceScatter, payload));
                tp.push(ev(CollectiveKind::AllGather, payload));
            }
            TpComm::P2pRsAg => {
                let share = payload * (group - 1) as f64 / group as f64;
                tp.push(ev(CollectiveKind::P2p, share));
                tp.push(ev(CollectiveKind::P2p, share));
            }
        }
    }

    let mut moe = Vec::with_capacity(2);
    if !model.is_dense() && strategy.ep > 1 {
        let payload =
            moe_alltoall_payload(t / strategy.tp as f64, model.hidden_dim, a, model.top_k);
        let ev = CommEvent {
            kind: CollectiveKind::AllToAll,
            payload_bytes: payload,
            group_size: strategy.ep,
            span_nodes: strategy.ep * strategy.es,
            overlappable: false,
        };
        moe.push(ev);
        moe.push(ev);
    }
    (tp, moe)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MicrobatchTime {
    /// Stage compute time, forward.
    pub fwd: f64,
    pub bwd: f64,
    /// Per-layer tensor-parallel events of one pass.
    pub tp_comm: Vec<CommEvent>,
    /// Per-layer all-to-all events of one pass.
    pub moe_comm: Vec<CommEvent>,
}

pub fn microbatch_time(
    model: &ModelSpec,
    sys: &SystemSpec,
    strategy: &Strategy,
    seq: u64,
) -> Result<MicrobatchTime> {
    let precision = Precision::Fp8;
    let p = stage_profile(model, sys, strategy, seq, precision)?;
    let (fwd, bwd) = stage_compute(model, strategy, &p);
    let (tp_comm, moe_comm) = layer_events(model, strategy, seq, precision);
    Ok(MicrobatchTime {
        fwd,
        bwd,
        tp_comm,
        moe_comm,
    })
}

fn stage_compute(model: &ModelSpec, strategy: &Strategy, p: &StageProfile) -> (f64, f64) {
    let layers = memcap::layers_per_stage(model, strategy);
    let pp = strategy.pp as f64;
    (
        layers * p.layer_fwd + p.head_fwd / pp,
        layers * p.layer_bwd + p.head_bwd / pp,
    )
}

/// Exposed part of `comm_t` when it may hide under `compute_t`.
pub fn overlap(comm_t: f64, compute_t: f64, overlapped: bool) -> f64 {
    if overlapped {
        (comm_t - compute_t).max(0.0)
    } else {
        comm_t
    }
}

/// Interleaved 1F1B bubble from per-stage, per-microbatch pass times.
pub fn pipeline_bubble(
    pp: u64,
    _microbatches: u64,
    interleave: u64,
    stage_fwd: f64,
    stage_bwd: f64,
) -> f64 {
    if pp <= 1 {
        return 0.0;
    }
    (pp - 1) as f64 * (stage_fwd + stage_bwd) / interleave.max(1) as f64
}

pub fn recompute_time(fwd_t: f64, attn_core_t: f64, mode: Recompute) -> f64 {
    match mode {
        Recompute::None => 0.0,
        Recompute::AttnOnly => attn_core_t,
        Recompute::Full => fwd_t,
    }
}

#[derive(Default, Clone, Copy)]
struct TierSplit {
    su: f64,
    so: f64,
    overhead: f64,
}

impl TierSplit {
    fn add(&mut self, tier: Tier, t: CommTime) {
        match tier {
            Tier::ScaleUp => self.su += t.wire_t,
            Tier::ScaleOut => self.so += t.wire_t,
        }
        self.overhead += t.gpu_overhead_t;
    }

    fn wire(&self) -> f64 {
        self.su + self.so
    }
}

fn price(events: &[CommEvent], sys: &SystemSpec, times: f64, acc: &mut TierSplit) {
    for ev in events {
        let tier = tier_for_span(ev.span_nodes, sys);
        let t = collective_time(ev, &tier, sys);
        acc.add(
            tier.tier,
            CommTime {
                wire_t: t.wire_t * times,
                gpu_overhead_t: t.gpu_overhead_t * times,
            },
        );
    }
}

/// Attribute `exposed` seconds of a split to its tiers by wire-time share.
fn expose(split: &TierSplit, exposed: f64, out: &mut TierBreakdown) {
    out.su_wire_t += split.su;
    out.so_wire_t += split.so;
    let wire = split.wire();
    if wire > 0.0 && exposed > 0.0 {
        out.su_exposed_t += exposed * split.su / wire;
        out.so_exposed_t += exposed * split.so / wire;
    }
}

fn dp_sync_events(
    model: &ModelSpec,
    strategy: &Strategy,
    placement: &Placement,
) -> Result<Vec<CommEvent>> {
    let local = memcap::local_params(model, strategy)?;
    let mut out = Vec::with_capacity(4);
    for (params, group) in [
        (local.dense, placement.dp),
        (local.experts, placement.dp_exp),
    ] {
        if group.group_size <= 1 || params == 0.0 {
            continue;
        }
        let ev = |kind, payload_bytes| CommEvent {
            kind,
            payload_bytes,
            group_size: group.group_size,
            span_nodes: group.span_nodes,
            overlappable: strategy.dp_overlap,
        };
        let grads = params * memcap::state::GRADIENT;
        match strategy.zero {
            ZeroStage::Z0 => out.push(ev(CollectiveKind::Allreduce, grads)),
            ZeroStage::Z1 | ZeroStage::Z2 => {
                out.push(ev(CollectiveKind::ReduceScatter, grads));
                out.push(ev(
                    CollectiveKind::AllGather,
                    params * memcap::state::COMPUTE_WEIGHT,
                ));
            }
        }
    }
    Ok(out)
}

pub fn estimate(
    model: &ModelSpec,
    sys: &SystemSpec,
    strategy: &Strategy,
    batch: u64,
    seq: u64,
) -> Result<RunEstimate> {
    estimate_with(model, sys, strategy, batch, seq, Precision::Fp8)
}

pub fn estimate_with(
    model: &ModelSpec,
    sys: &SystemSpec,
    strategy: &Strategy,
    batch: u64,
    seq: u64,
    precision: Precision,
) -> Result<RunEstimate> {
    strategy
        .validate(model, batch, None)
        .map_err(Error::InvalidStrategy)?;
    let profile = stage_profile(model, sys, strategy, seq, precision)?;
    estimate_from_profile(model, sys, strategy, batch, seq, precision, &profile)
}

/// `estimate` with the compute side precomputed; `profile` must come from
/// `stage_profile` for the same model, system, degrees, microbatch and
/// recompute mode.
pub fn estimate_from_profile(
    model: &ModelSpec,
    sys: &SystemSpec,
    strategy: &Strategy,
    batch: u64,
    seq: u64,
    precision: Precision,
    profile: &StageProfile,
) -> Result<RunEstimate> {
    let placement = place_groups(strategy, sys)?;
    let footprint = memcap::footprint_from_stored(
        model,
        strategy,
        sys,
        batch,
        profile.layer_stored,
        profile.head_stored,
    )?;
    memcap::check_capacity(&footprint, sys).map_err(|v| Error::Infeasible(Box::new(v)))?;

    let m = strategy.microbatches(batch) as f64;
    let v = strategy.interleave as f64;
    let layers = memcap::layers_per_stage(model, strategy);
    let (f, b) = stage_compute(model, strategy, profile);
    let rc = layers
        * recompute_time(
            profile.layer_fwd,
            profile.layer_attn_core_fwd,
            strategy.recompute,
        );

    let (tp_events, moe_events) = layer_events(model, strategy, seq, precision);
    let mut tp = TierSplit::default();
    price(&tp_events, sys, layers, &mut tp);
    let mut a2a = TierSplit::default();
    price(&moe_events, sys, layers, &mut a2a);
    let mut p2p = TierSplit::default();
    if strategy.pp > 1 {
        let payload = (strategy.microbatch * seq) as f64 * model.hidden_dim as f64
            / strategy.tp as f64
            * precision.bytes();
        let ev = CommEvent {
            kind: CollectiveKind::P2p,
            payload_bytes: payload,
            group_size: placement.pp.group_size,
            span_nodes: placement.pp.span_nodes,
            overlappable: false,
        };
        price(&[ev], sys, v, &mut p2p);
    }

    // Forward and backward carry the same collectives.
    let ring = strategy.tp_overlap == TpOverlap::Ring;
    let tp_exposed_f = overlap(tp.wire(), f, ring);
    let tp_exposed_b = overlap(tp.wire(), b, ring);
    let overhead = tp.overhead + a2a.overhead + p2p.overhead;
    let fwd_wall = f + tp_exposed_f + a2a.wire() + p2p.wire() + overhead;
    let bwd_wall = b + tp_exposed_b + a2a.wire() + p2p.wire() + overhead;

    let dp_events = dp_sync_events(model, strategy, &placement)?;
    let mut dp = TierSplit::default();
    price(&dp_events, sys, 1.0, &mut dp);
    let dp_exposed = overlap(dp.wire(), bwd_wall, strategy.dp_overlap) + dp.overhead;

    let compute_t = m * (f + b);
    let bubble_t = pipeline_bubble(
        strategy.pp,
        m as u64,
        strategy.interleave,
        fwd_wall,
        bwd_wall,
    );
    let recompute_t = m * rc;
    let exposed_comm_t = m * (fwd_wall - f) + m * (bwd_wall - b) + dp_exposed;
    let rest = compute_t + exposed_comm_t + bubble_t + recompute_t;

    let traffic = memcap::offload_traffic_from_footprint(&footprint, model, strategy, batch);
    let offload_t = offload_time(&traffic, sys, m, layers);
    let exposed_offload_t = (offload_t - rest).max(0.0);
    let step_time = rest + exposed_offload_t;

    let mut comm = TierBreakdown {
        gpu_overhead_t: m * 2.0 * overhead + dp.overhead,
        ..TierBreakdown::default()
    };
    let scaled = |s: &TierSplit, k: f64| TierSplit {
        su: s.su * k,
        so: s.so * k,
        overhead: s.overhead * k,
    };
    expose(
        &scaled(&tp, 2.0 * m),
        m * (tp_exposed_f + tp_exposed_b),
        &mut comm,
    );
    expose(&scaled(&a2a, 2.0 * m), 2.0 * m * a2a.wire(), &mut comm);
    expose(&scaled(&p2p, 2.0 * m), 2.0 * m * p2p.wire(), &mut comm);
    expose(&dp, dp_exposed - dp.overhead, &mut comm);

    let tokens_per_sec = (batch * seq) as f64 / step_time;
    let train_flops = flops_per_token(model)?.train as f64;
    let mfu =
        train_flops * tokens_per_sec / (strategy.total_gpus() as f64 * sys.peak_flops(precision));

    Ok(RunEstimate {
        step_time,
        compute_t,
        exposed_comm_t,
        bubble_t,
        recompute_t,
        exposed_offload_t,
        footprint,
        tokens_per_sec,
        mfu,
        strategy: *strategy,
        comm,
    })
}

fn offload_time(t: &OffloadTraffic, sys: &SystemSpec, microbatches: f64, layers: f64) -> f64 {
    if t.is_zero() {
        return 0.0;
    }
    let bytes = layers
        * (microbatches * (2.0 * t.weights_per_layer_pass + t.acts_per_layer_microbatch)
            + t.optimizer_per_layer_step);
    sys.tier2_transfer_time(bytes)
}

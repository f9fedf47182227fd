//! One point in the parallelization / optimization space.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::model::ModelSpec;

#[derive(
    Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize, Default,
)]
#[serde(rename_all = "snake_case")]
pub enum Recompute {
    #[default]
    None,
    AttnOnly,
    Full,
}

#[derive(
    Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize, Default,
)]
#[serde(rename_all = "snake_case")]
pub enum ZeroStage {
    #[default]
    Z0,
    Z1,
    Z2,
}

/// How tensor-parallel activations are synchronized.
#[derive(
    Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize, Default,
)]
#[serde(rename_all = "snake_case")]
pub enum TpComm {
    #[default]
    Allreduce,
    RsAg,
    P2pRsAg,
}

#[derive(
    Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize, Default,
)]
#[serde(rename_all = "snake_case")]
pub enum TpOverlap {
    #[default]
    None,
    Ring,
}

impl Recompute {
    pub const ALL: [Recompute; 3] = [Recompute::None, Recompute::AttnOnly, Recompute::Full];

    pub fn as_str(self) -> &'static str {
        match self {
            Recompute::None => "none",
            Recompute::AttnOnly => "attn_only",
            Recompute::Full => "full",
        }
    }
}

impl ZeroStage {
    pub const ALL: [ZeroStage; 3] = [ZeroStage::Z0, ZeroStage::Z1, ZeroStage::Z2];

    pub fn as_str(self) -> &'static str {
        match self {
            ZeroStage::Z0 => "z0",
            ZeroStage::Z1 => "z1",
            ZeroStage::Z2 => "z2",
        }
    }
}

impl TpComm {
    pub const ALL: [TpComm; 3] = [TpComm::Allreduce, TpComm::RsAg, TpComm::P2pRsAg];

    pub fn as_str(self) -> &'static str {
        match self {
            TpComm::Allreduce => "allreduce",
            TpComm::RsAg => "rs_ag",
            TpComm::P2pRsAg => "p2p_rs_ag",
        }
    }
}

impl TpOverlap {
    pub const ALL: [TpOverlap; 2] = [TpOverlap::None, TpOverlap::Ring];

    pub fn as_str(self) -> &'static str {
        match self {
            TpOverlap::None => "none",
            TpOverlap::Ring => "ring",
        }
    }
}

/// Field order doubles as the lexicographic tie-break order used by search.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Strategy {
    pub tp: u64,
    pub pp: u64,
    pub dp: u64,
    pub ep: u64,
    pub es: u64,
    pub dp_exp: u64,
    /// Sequences per microbatch.
    pub microbatch: u64,
    pub interleave: u64,
    #[serde(default)]
    pub recompute: Recompute,
    #[serde(default)]
    pub zero: ZeroStage,
    #[serde(default)]
    pub tp_comm: TpComm,
    #[serde(default)]
    pub tp_overlap: TpOverlap,
    #[serde(default)]
    pub dp_overlap: bool,
    #[serde(default)]
    pub fused_activation: bool,
    #[serde(default)]
    pub offload_weights: bool,
    #[serde(default)]
    pub offload_acts: bool,
    #[serde(default)]
    pub offload_opt: bool,
}

impl Strategy {
    /// A dense-model strategy: the MLP is sharded like attention (es = tp) and
    /// no expert parallelism is used.
    pub fn dense(tp: u64, pp: u64, dp: u64) -> Self {
        Strategy {
            tp,
            pp,
            dp,
            ep: 1,
            es: tp,
            dp_exp: dp,
            microbatch: 1,
            interleave: 1,
            recompute: Recompute::None,
            zero: ZeroStage::Z0,
            tp_comm: TpComm::Allreduce,
            tp_overlap: TpOverlap::None,
            dp_overlap: false,
            fused_activation: true,
            offload_weights: false,
            offload_acts: false,
            offload_opt: false,
        }
    }

    /// An MoE strategy with defaults for every non-degree field.
    pub fn moe(tp: u64, pp: u64, dp: u64, ep: u64, es: u64, dp_exp: u64) -> Self {
        Strategy {
            ep,
            es,
            dp_exp,
            ..Strategy::dense(tp, pp, dp)
        }
    }

    pub fn total_gpus(&self) -> u64 {
        self.tp * self.pp * self.dp
    }

    /// Microbatches each data-parallel replica runs per step.
    pub fn microbatches(&self, batch: u64) -> u64 {
        batch / self.dp / self.microbatch
    }

    /// Check every structural invariant against a model, a global batch and,
    /// when given, a target GPU count.
    pub fn validate(
        &self,
        model: &ModelSpec,
        batch: u64,
        total_gpus: Option<u64>,
    ) -> Result<(), Constraint> {
        let degrees = [
            self.tp,
            self.pp,
            self.dp,
            self.ep,
            self.es,
            self.dp_exp,
            self.microbatch,
            self.interleave,
        ];
        if degrees.contains(&0) {
            return Err(Constraint::ZeroDegree);
        }
        if let Some(n) = total_gpus {
            if self.total_gpus() != n {
                return Err(Constraint::GpuCount);
            }
        }
        if !model.num_heads.is_multiple_of(self.tp) {
            return Err(Constraint::HeadsDivisible);
        }
        if !model.num_experts.is_multiple_of(self.ep) {
            return Err(Constraint::ExpertsDivisible);
        }
        if !model.ff_dim.is_multiple_of(self.es) {
            return Err(Constraint::FfDivisible);
        }
        if self.ep * self.es * self.dp_exp != self.tp * self.dp {
            return Err(Constraint::ExpertDomain);
        }
        if self.dp > batch {
            return Err(Constraint::DpExceedsBatch);
        }
        if !batch.is_multiple_of(self.dp) {
            return Err(Constraint::BatchDivisible);
        }
        if !(batch / self.dp).is_multiple_of(self.microbatch) {
            return Err(Constraint::MicrobatchDivisible);
        }
        if self.pp == 1 && self.interleave > 1 {
            return Err(Constraint::InterleaveWithoutPipeline);
        }
        if !model.num_layers.is_multiple_of(self.pp * self.interleave) {
            return Err(Constraint::LayersDivisible);
        }
        Ok(())
    }
}

/// Strategy invariants, named so that rejections can be counted and reported.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Constraint {
    ZeroDegree,
    GpuCount,
    HeadsDivisible,
    ExpertsDivisible,
    FfDivisible,
    ExpertDomain,
    DpExceedsBatch,
    BatchDivisible,
    MicrobatchDivisible,
    InterleaveWithoutPipeline,
    LayersDivisible,
}

impl Constraint {
    pub const ALL: [Constraint; 11] = [
        Constraint::ZeroDegree,
        Constraint::GpuCount,
        Constraint::HeadsDivisible,
        Constraint::ExpertsDivisible,
        Constraint::FfDivisible,
        Constraint::ExpertDomain,
        Constraint::DpExceedsBatch,
        Constraint::BatchDivisible,
        Constraint::MicrobatchDivisible,
        Constraint::InterleaveWithoutPipeline,
        Constraint::LayersDivisible,
    ];

    pub fn rule(self) -> &'static str {
        match self {
            Constraint::ZeroDegree => "all degrees >= 1",
            Constraint::GpuCount => "tp*pp*dp = total_gpus",
            Constraint::HeadsDivisible => "H mod tp = 0",
            Constraint::ExpertsDivisible => "E mod ep = 0",
            Constraint::FfDivisible => "f mod es = 0",
            Constraint::ExpertDomain => "ep*es*dp_exp = tp*dp",
            Constraint::DpExceedsBatch => "dp <= batch",
            Constraint::BatchDivisible => "batch mod dp = 0",
            Constraint::MicrobatchDivisible => "(batch/dp) mod microbatch = 0",
            Constraint::InterleaveWithoutPipeline => "interleave > 1 requires pp > 1",
            Constraint::LayersDivisible => "L mod (pp*interleave) = 0",
        }
    }
}

impl fmt::Display for Constraint {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "violates {}", self.rule())
    }
}

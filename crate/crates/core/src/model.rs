//! LLM architecture description, parameter/FLOP accounting and the
//! per-layer operator graph that the timing model walks.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hardware::Precision;
use crate::strategy::{Constraint, Recompute, Strategy};

fn one() -> u64 {
    1
}

fn default_vocab() -> u64 {
    51200
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
pub enum AttentionKind {
    #[default]
    #[serde(rename = "MHA", alias = "mha")]
    Mha,
}

/// Architecture of a dense or mixture-of-experts decoder-only LLM.
///
/// A dense model is the `num_experts = top_k = 1` special case.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    pub name: String,
    pub num_layers: u64,
    pub hidden_dim: u64,
    pub ff_dim: u64,
    pub num_heads: u64,
    /// Defaults to `hidden_dim / num_heads`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub head_dim: Option<u64>,
    #[serde(default = "one")]
    pub num_experts: u64,
    #[serde(default = "one")]
    pub top_k: u64,
    #[serde(default)]
    pub gated_mlp: bool,
    pub seq_len: u64,
    #[serde(default = "default_vocab")]
    pub vocab_size: u64,
    #[serde(default)]
    pub attention_kind: AttentionKind,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct ParamCounts {
    /// Q, K, V and O projections over all layers.
    pub attention_params: u64,
    /// MLP parameters of a single expert over all layers.
    pub expert_params_per_expert: u64,
    /// Input and output embedding tables.
    pub embedding_params: u64,
    pub total_params: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct FlopsPerToken {
    pub fwd: u64,
    pub train: u64,
}

impl ModelSpec {
    pub fn head_dim(&self) -> u64 {
        self.head_dim
            .unwrap_or(self.hidden_dim / self.num_heads.max(1))
    }

    pub fn is_dense(&self) -> bool {
        self.num_experts == 1 && self.top_k == 1
    }

    /// Weight matrices per expert MLP (up, optional gate, down).
    pub fn mlp_matrices(&self) -> u64 {
        if self.gated_mlp {
            3
        } else {
            2
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(Error::InvalidModel(format!("{}: {msg}", self.name)));
        if self.num_layers == 0 || self.hidden_dim == 0 || self.ff_dim == 0 || self.num_heads == 0 {
            return bad("L, h, f and H must be positive");
        }
        if self.seq_len == 0 {
            return bad("seq_len must be positive");
        }
        if self.num_experts == 0 || self.top_k == 0 || self.top_k > self.num_experts {
            return bad("require 1 <= top_k <= num_experts");
        }
        if self.head_dim.is_none() && !self.hidden_dim.is_multiple_of(self.num_heads) {
            return bad("hidden_dim must equal num_heads * head_dim");
        }
        if self.head_dim == Some(0) {
            return bad("head_dim must be positive");
        }
        Ok(())
    }

    pub fn from_json(text: &str) -> std::result::Result<Self, serde_json::Error> {
        serde_json::from_str(text)
    }

    pub fn load(path: impl AsRef<std::path::Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let model = Self::from_json(&text).map_err(|source| Error::Json {
            path: path.to_path_buf(),
            source,
        })?;
        model.validate()?;
        Ok(model)
    }
}

fn checked(parts: &[u64]) -> Result<u64> {
    parts
        .iter()
        .try_fold(1u64, |acc, &x| acc.checked_mul(x))
        .ok_or_else(|| Error::Range("parameter count exceeds 2^64".into()))
}

fn add(a: u64, b: u64) -> Result<u64> {
    a.checked_add(b)
        .ok_or_else(|| Error::Range("parameter count exceeds 2^64".into()))
}

pub fn count_params(model: &ModelSpec) -> Result<ParamCounts> {
    let (l, h, f) = (model.num_layers, model.hidden_dim, model.ff_dim);
    let attention_params = checked(&[l, 4, h, h])?;
    let expert_params_per_expert = checked(&[l, model.mlp_matrices(), h, f])?;
    let embedding_params = checked(&[2, model.vocab_size, h])?;
    let all_experts = checked(&[expert_params_per_expert, model.num_experts])?;
    let total_params = add(add(attention_params, all_experts)?, embedding_params)?;
    if total_params >= 1 << 63 {
        return Err(Error::Range("parameter count exceeds 2^63".into()));
    }
    Ok(ParamCounts {
        attention_params,
        expert_params_per_expert,
        embedding_params,
        total_params,
    })
}

/// Model FLOPs per token (never includes recomputation).
pub fn flops_per_token(model: &ModelSpec) -> Result<FlopsPerToken> {
    let p = count_params(model)?;
    let (l, h, s) = (model.num_layers, model.hidden_dim, model.seq_len);
    let active =
        p.attention_params + model.top_k * p.expert_params_per_expert + model.vocab_size * h;
    let router = if model.num_experts > 1 {
        2 * h * model.num_experts * l
    } else {
        0
    };
    let fwd = 2 * active + 4 * s * h * l + router;
    Ok(FlopsPerToken {
        fwd,
        train: 3 * fwd,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum OpKind {
    Gemm,
    Bmm,
    Elementwise,
    /// All-to-all dispatch/combine placeholder; carries no work of its own.
    Marker,
}

/// Which part of the network an op belongs to; determines its owning
/// parallel degree and its recompute class.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Block {
    Attention,
    /// Score bmm, softmax and context bmm.
    AttentionCore,
    Router,
    Mlp,
    Head,
}

/// Per-GPU work of one operator for one microbatch, forward direction.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct OpProfile {
    pub name: &'static str,
    pub kind: OpKind,
    pub block: Block,
    pub flops: f64,
    pub weight_bytes: f64,
    pub act_in_bytes: f64,
    pub act_out_bytes: f64,
    pub stored_act_bytes: f64,
    /// Smallest gemm dimension after sharding; `u64::MAX` for non-gemm ops.
    pub min_gemm_dim: u64,
}

impl OpProfile {
    pub fn moved_bytes(&self) -> f64 {
        self.weight_bytes + self.act_in_bytes + self.act_out_bytes
    }

    /// Backward pass: data and weight gradients double both math and traffic.
    pub fn backward(&self) -> OpProfile {
        OpProfile {
            flops: 2.0 * self.flops,
            weight_bytes: 2.0 * self.weight_bytes,
            act_in_bytes: 2.0 * self.act_in_bytes,
            act_out_bytes: 2.0 * self.act_out_bytes,
            stored_act_bytes: 0.0,
            ..self.clone()
        }
    }

    pub fn is_matmul(&self) -> bool {
        matches!(self.kind, OpKind::Gemm | OpKind::Bmm)
    }
}

struct OpBuilder {
    ops: Vec<OpProfile>,
}

impl OpBuilder {
    #[allow(clippy::too_many_arguments)]
    fn push(
        &mut self,
        name: &'static str,
        kind: OpKind,
        block: Block,
        flops: f64,
        weight_bytes: f64,
        act_in_bytes: f64,
        act_out_bytes: f64,
        stored_act_bytes: f64,
        min_gemm_dim: u64,
    ) {
        self.ops.push(OpProfile {
            name,
            kind,
            block,
            flops,
            weight_bytes,
            act_in_bytes,
            act_out_bytes,
            stored_act_bytes,
            min_gemm_dim,
        });
    }
}

fn min_dim(dims: &[f64]) -> u64 {
    dims.iter().fold(f64::INFINITY, |a, &b| a.min(b)).max(1.0) as u64
}

// Rough per-element op counts for the non-matmul kernels.
const NORM_FLOPS: f64 = 8.0;
const SOFTMAX_FLOPS: f64 = 5.0;
const ACTIVATION_FLOPS: f64 = 8.0;

fn check_sharding(model: &ModelSpec, strategy: &Strategy) -> Result<()> {
    if strategy.tp == 0 || !model.num_heads.is_multiple_of(strategy.tp) {
        return Err(Error::InvalidStrategy(Constraint::HeadsDivisible));
    }
    if strategy.es == 0 || !model.ff_dim.is_multiple_of(strategy.es) {
        return Err(Error::InvalidStrategy(Constraint::FfDivisible));
    }
    if strategy.ep == 0 || !model.num_experts.is_multiple_of(strategy.ep) {
        return Err(Error::InvalidStrategy(Constraint::ExpertsDivisible));
    }
    Ok(())
}

/// Operators of one decoder layer for one microbatch of
/// `strategy.microbatch * seq` tokens, as seen by a single GPU.
pub fn build_layer_graph(
    model: &ModelSpec,
    strategy: &Strategy,
    seq: u64,
    precision: Precision,
) -> Result<Vec<OpProfile>> {
    check_sharding(model, strategy)?;
    let a = precision.bytes();
    let w = precision.bytes();
    let t = (strategy.microbatch * seq) as f64;
    let s = seq as f64;
    let h = model.hidden_dim as f64;
    let f = model.ff_dim as f64;
    let heads = model.num_heads as f64;
    let d = model.head_dim() as f64;
    let e = model.num_experts as f64;
    let k = model.top_k as f64;
    let tp = strategy.tp as f64;
    let es = strategy.es as f64;
    let ep = strategy.ep as f64;
    let fused = strategy.fused_activation;
    let moe = !model.is_dense();

    // Tokens resident per GPU in the expert layout and their per-expert share.
    let te = t * k * es / tp;
    let local_experts = e / ep;
    let tokens_per_expert = te / local_experts;
    let f_shard = f / es;
    let gate = if model.gated_mlp { 2.0 } else { 1.0 };

    let th = t * h / tp; // sequence-parallel activation shard
    let scores = t * s * heads / tp;
    let score_bytes = if fused { 0.0 } else { scores * a };

    let mut g = OpBuilder {
        ops: Vec::with_capacity(16),
    };
    use Block::*;
    use OpKind::*;

    g.push(
        "attn_norm",
        Elementwise,
        Attention,
        NORM_FLOPS * th,
        0.0,
        th * a,
        th * a,
        th * a,
        u64::MAX,
    );
    g.push(
        "qkv_proj",
        Gemm,
        Attention,
        2.0 * t * h * 3.0 * h / tp,
        3.0 * h * h / tp * w,
        t * h * a,
        3.0 * th * a,
        th * a,
        min_dim(&[t, h, 3.0 * h / tp]),
    );
    g.push(
        "attn_score",
        Bmm,
        AttentionCore,
        2.0 * t * s * h / tp,
        0.0,
        2.0 * th * a,
        score_bytes,
        2.0 * th * a,
        min_dim(&[s, d]),
    );
    let softmax_stored = if fused {
        t * heads / tp * a
    } else {
        scores * a
    };
    g.push(
        "attn_softmax",
        Elementwise,
        AttentionCore,
        SOFTMAX_FLOPS * scores,
        0.0,
        score_bytes,
        score_bytes,
        softmax_stored,
        u64::MAX,
    );
    g.push(
        "attn_context",
        Bmm,
        AttentionCore,
        2.0 * t * s * h / tp,
        0.0,
        score_bytes + th * a,
        th * a,
        th * a,
        min_dim(&[s, d]),
    );
    g.push(
        "out_proj",
        Gemm,
        Attention,
        2.0 * t * h * h / tp,
        h * h / tp * w,
        th * a,
        t * h * a,
        th * a,
        min_dim(&[t, h / tp, h]),
    );
    g.push(
        "attn_add_norm",
        Elementwise,
        Attention,
        NORM_FLOPS * th,
        0.0,
        2.0 * th * a,
        th * a,
        th * a,
        u64::MAX,
    );

    if moe {
        let tl = t / tp;
        g.push(
            "router",
            Gemm,
            Router,
            2.0 * tl * h * e,
            h * e / tp * w,
            tl * h * a,
            tl * e * a,
            tl * h * a,
            min_dim(&[tl, h, e]),
        );
        g.push(
            "top_k",
            Elementwise,
            Router,
            tl * e,
            0.0,
            tl * e * a,
            2.0 * tl * k * a,
            tl * e * a,
            u64::MAX,
        );
        g.push(
            "dispatch",
            Marker,
            Router,
            0.0,
            0.0,
            0.0,
            0.0,
            0.0,
            u64::MAX,
        );
    }

    let expert_w = local_experts * h * f_shard * w;
    g.push(
        "ffn_up",
        Gemm,
        Mlp,
        2.0 * te * h * f_shard,
        expert_w,
        te * h * a,
        te * f_shard * a,
        te * h / es * a,
        min_dim(&[tokens_per_expert, h, f_shard]),
    );
    if model.gated_mlp {
        g.push(
            "ffn_gate",
            Gemm,
            Mlp,
            2.0 * te * h * f_shard,
            expert_w,
            te * h * a,
            te * f_shard * a,
            0.0,
            min_dim(&[tokens_per_expert, h, f_shard]),
        );
    }
    let (act_in, act_out) = if fused {
        (0.0, 0.0)
    } else {
        (gate * te * f_shard * a, te * f_shard * a)
    };
    g.push(
        "ffn_act",
        Elementwise,
        Mlp,
        ACTIVATION_FLOPS * te * f_shard,
        0.0,
        act_in,
        act_out,
        gate * te * f_shard * a,
        u64::MAX,
    );
    g.push(
        "ffn_down",
        Gemm,
        Mlp,
        2.0 * te * f_shard * h,
        expert_w,
        te * f_shard * a,
        te * h * a,
        if fused { 0.0 } else { te * f_shard * a },
        min_dim(&[tokens_per_expert, f_shard, h]),
    );
    if moe {
        g.push("combine", Marker, Router, 0.0, 0.0, 0.0, 0.0, 0.0, u64::MAX);
    }
    g.push(
        "mlp_add_norm",
        Elementwise,
        Mlp,
        NORM_FLOPS * th,
        0.0,
        2.0 * th * a,
        th * a,
        th * a,
        u64::MAX,
    );

    apply_recompute(&mut g.ops, strategy.recompute);
    Ok(g.ops)
}

fn apply_recompute(ops: &mut [OpProfile], mode: Recompute) {
    match mode {
        Recompute::None => {}
        Recompute::AttnOnly => ops
            .iter_mut()
            .filter(|op| op.block == Block::AttentionCore)
            .for_each(|op| op.stored_act_bytes = 0.0),
        // Only the layer input survives.
        Recompute::Full => ops
            .iter_mut()
            .skip(1)
            .for_each(|op| op.stored_act_bytes = 0.0),
    }
}

/// Embedding lookup and output projection, once per model.
pub fn build_head_graph(
    model: &ModelSpec,
    strategy: &Strategy,
    seq: u64,
    precision: Precision,
) -> Result<Vec<OpProfile>> {
    check_sharding(model, strategy)?;
    let a = precision.bytes();
    let t = (strategy.microbatch * seq) as f64;
    let h = model.hidden_dim as f64;
    let v = model.vocab_size as f64;
    let tp = strategy.tp as f64;
    Ok(vec![
        OpProfile {
            name: "embed",
            kind: OpKind::Elementwise,
            block: Block::Head,
            flops: 0.0,
            weight_bytes: 0.0,
            act_in_bytes: t * h / tp * a,
            act_out_bytes: t * h / tp * a,
            stored_act_bytes: 0.0,
            min_gemm_dim: u64::MAX,
        },
        OpProfile {
            name: "logits",
            kind: OpKind::Gemm,
            block: Block::Head,
            flops: 2.0 * t * h * v / tp,
            weight_bytes: v * h / tp * precision.bytes(),
            act_in_bytes: t * h * a,
            act_out_bytes: t * v / tp * a,
            stored_act_bytes: t * h / tp * a,
            min_gemm_dim: min_dim(&[t, h, v / tp]),
        },
    ])
}

/// Every operator of a full forward pass: `L` decoder layers then the head.
pub fn build_model_graph(
    model: &ModelSpec,
    strategy: &Strategy,
    seq: u64,
    precision: Precision,
) -> Result<Vec<OpProfile>> {
    let layer = build_layer_graph(model, strategy, seq, precision)?;
    let mut ops = Vec::with_capacity(layer.len() * model.num_layers as usize + 2);
    for _ in 0..model.num_layers {
        ops.extend(layer.iter().cloned());
    }
    ops.extend(build_head_graph(model, strategy, seq, precision)?);
    Ok(ops)
}

/// Shipped architectures.
pub mod fixtures {
    use super::ModelSpec;

    pub const GPT_1_8T_JSON: &str = include_str!("../fixtures/models/gpt-1.8t.json");
    pub const GPT_29T_JSON: &str = include_str!("../fixtures/models/gpt-29t.json");
    pub const GPT3_175B_JSON: &str = include_str!("../fixtures/models/gpt3-175b.json");
    pub const DESK_MOE_JSON: &str = include_str!("../fixtures/models/desk-moe.json");

    fn parse(text: &str) -> ModelSpec {
        ModelSpec::from_json(text).expect("shipped model fixture parses")
    }

    pub fn gpt_1_8t() -> ModelSpec {
        parse(GPT_1_8T_JSON)
    }

    pub fn gpt_29t() -> ModelSpec {
        parse(GPT_29T_JSON)
    }

    pub fn gpt3_175b() -> ModelSpec {
        parse(GPT3_175B_JSON)
    }

    /// Small 16-expert model for desk-scale experiments.
    pub fn desk_moe() -> ModelSpec {
        parse(DESK_MOE_JSON)
    }

    pub fn by_name(name: &str) -> Option<ModelSpec> {
        match name {
            "gpt-1.8t" | "GPT-1.8T" => Some(gpt_1_8t()),
            "gpt-29t" | "GPT-29T" => Some(gpt_29t()),
            "gpt3-175b" | "GPT3-175B" => Some(gpt3_175b()),
            "desk-moe" => Some(desk_moe()),
            _ => None,
        }
    }
}

//! Node and cluster parameters, plus the efficiency curves that turn FLOPs
//! and bytes into seconds.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::OpProfile;

/// Sentinel capacity standing in for "large enough for any model".
pub const INFINITE_CAP: f64 = (1u64 << 62) as f64;

const GB: f64 = 1e9;
const NS: f64 = 1e-9;
const PF: f64 = 1e15;

/// Fraction of tier-2 bandwidth achieved by bulk offload transfers.
pub const TIER2_EFFICIENCY: f64 = 0.90;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Precision {
    #[default]
    Fp8,
    Fp16,
}

impl Precision {
    pub fn bytes(self) -> f64 {
        match self {
            Precision::Fp8 => 1.0,
            Precision::Fp16 => 2.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Topology {
    #[default]
    TwoTier,
    FullFlat,
}

/// One GPU node and the cluster it lives in, in SI units
/// (FLOP/s, bytes, bytes/s, seconds).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "SystemFile", into = "SystemFile")]
pub struct SystemSpec {
    pub name: String,
    pub flops_fp8: f64,
    pub flops_fp16: f64,
    pub tier1_bw: f64,
    pub tier1_cap: f64,
    pub tier1_latency: f64,
    pub tier2_bw: f64,
    pub tier2_cap: f64,
    pub tier2_latency: f64,
    pub hbd_size: u64,
    pub su_bw: f64,
    pub so_bw: f64,
    pub net_efficiency: f64,
    pub su_latency: f64,
    pub so_latency: f64,
    pub cluster_size: u64,
    pub topology: Topology,
    pub hw_collectives: bool,
    pub framework_overhead: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
enum Capacity {
    Gb(f64),
    Named(String),
}

impl Capacity {
    fn to_bytes(&self) -> std::result::Result<f64, String> {
        match self {
            Capacity::Gb(gb) => Ok(gb * GB),
            Capacity::Named(s) if s.eq_ignore_ascii_case("inf") => Ok(INFINITE_CAP),
            Capacity::Named(s) => Err(format!(
                "capacity must be a number of GB or \"inf\", got {s:?}"
            )),
        }
    }

    fn from_bytes(bytes: f64) -> Self {
        if bytes >= INFINITE_CAP {
            Capacity::Named("inf".into())
        } else {
            Capacity::Gb(bytes / GB)
        }
    }
}

fn default_net_efficiency() -> f64 {
    0.80
}

fn default_framework_gb() -> f64 {
    2.0
}

fn default_true() -> bool {
    true
}

/// On-disk layout: FLOPS in PF/s, bandwidths in GB/s, capacities in GB
/// (or "inf"), latencies in ns.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SystemFile {
    name: String,
    flops_fp8: f64,
    flops_fp16: f64,
    tier1_bw: f64,
    tier1_cap: Capacity,
    tier1_latency: f64,
    tier2_bw: f64,
    tier2_cap: Capacity,
    tier2_latency: f64,
    hbd_size: u64,
    su_bw: f64,
    so_bw: f64,
    #[serde(default = "default_net_efficiency")]
    net_efficiency: f64,
    su_latency: f64,
    so_latency: f64,
    cluster_size: u64,
    topology: Topology,
    #[serde(default = "default_true")]
    hw_collectives: bool,
    #[serde(default = "default_framework_gb")]
    framework_overhead: f64,
}

impl TryFrom<SystemFile> for SystemSpec {
    type Error = String;

    fn try_from(f: SystemFile) -> std::result::Result<Self, String> {
        let sys = SystemSpec {
            name: f.name,
            flops_fp8: f.flops_fp8 * PF,
            flops_fp16: f.flops_fp16 * PF,
            tier1_bw: f.tier1_bw * GB,
            tier1_cap: f.tier1_cap.to_bytes()?,
            tier1_latency: f.tier1_latency * NS,
            tier2_bw: f.tier2_bw * GB,
            tier2_cap: f.tier2_cap.to_bytes()?,
            tier2_latency: f.tier2_latency * NS,
            hbd_size: f.hbd_size,
            su_bw: f.su_bw * GB,
            so_bw: f.so_bw * GB,
            net_efficiency: f.net_efficiency,
            su_latency: f.su_latency * NS,
            so_latency: f.so_latency * NS,
            cluster_size: f.cluster_size,
            topology: f.topology,
            hw_collectives: f.hw_collectives,
            framework_overhead: f.framework_overhead * GB,
        };
        sys.validate().map_err(|e| e.to_string())?;
        Ok(sys)
    }
}

impl From<SystemSpec> for SystemFile {
    fn from(s: SystemSpec) -> Self {
        SystemFile {
            name: s.name,
            flops_fp8: s.flops_fp8 / PF,
            flops_fp16: s.flops_fp16 / PF,
            tier1_bw: s.tier1_bw / GB,
            tier1_cap: Capacity::from_bytes(s.tier1_cap),
            tier1_latency: s.tier1_latency / NS,
            tier2_bw: s.tier2_bw / GB,
            tier2_cap: Capacity::from_bytes(s.tier2_cap),
            tier2_latency: s.tier2_latency / NS,
            hbd_size: s.hbd_size,
            su_bw: s.su_bw / GB,
            so_bw: s.so_bw / GB,
            net_efficiency: s.net_efficiency,
            su_latency: s.su_latency / NS,
            so_latency: s.so_latency / NS,
            cluster_size: s.cluster_size,
            topology: s.topology,
            hw_collectives: s.hw_collectives,
            framework_overhead: s.framework_overhead / GB,
        }
    }
}

impl SystemSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidSystem(format!("{}: {msg}", self.name)));
        let positive = [
            ("flops_fp8", self.flops_fp8),
            ("flops_fp16", self.flops_fp16),
            ("tier1_bw", self.tier1_bw),
            ("tier1_cap", self.tier1_cap),
            ("tier2_bw", self.tier2_bw),
            ("tier2_cap", self.tier2_cap),
            ("su_bw", self.su_bw),
            ("so_bw", self.so_bw),
        ];
        for (name, v) in positive {
            if v.is_nan() || v <= 0.0 {
                return bad(format!("{name} must be positive"));
            }
        }
        let latencies = [
            self.tier1_latency,
            self.tier2_latency,
            self.su_latency,
            self.so_latency,
            self.framework_overhead,
        ];
        if latencies.iter().any(|&v| v.is_nan() || v < 0.0) {
            return bad("latencies and framework_overhead must be non-negative".into());
        }
        if !(self.net_efficiency > 0.0 && self.net_efficiency <= 1.0) {
            return bad("net_efficiency must lie in (0, 1]".into());
        }
        if self.hbd_size == 0 || self.cluster_size == 0 {
            return bad("hbd_size and cluster_size must be positive".into());
        }
        if !self.cluster_size.is_multiple_of(self.hbd_size) {
            return bad("hbd_size must divide cluster_size".into());
        }
        if self.topology == Topology::FullFlat && self.su_bw != self.so_bw {
            return bad("full_flat requires su_bw = so_bw".into());
        }
        Ok(())
    }

    pub fn from_json(text: &str) -> std::result::Result<Self, serde_json::Error> {
        serde_json::from_str(text)
    }

    pub fn load(path: impl AsRef<std::path::Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text).map_err(|source| Error::Json {
            path: path.to_path_buf(),
            source,
        })
    }

    pub fn peak_flops(&self, precision: Precision) -> f64 {
        match precision {
            Precision::Fp8 => self.flops_fp8,
            Precision::Fp16 => self.flops_fp16,
        }
    }

    /// Bulk transfer to or from tier-2 memory.
    pub fn tier2_transfer_time(&self, bytes: f64) -> f64 {
        bytes / (self.tier2_bw * TIER2_EFFICIENCY) + self.tier2_latency
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Ramp {
    Linear,
    /// Linear in `ln(size)`.
    Log,
}

/// Efficiency as a function of operation size: `anchor_eff` at and above
/// `anchor_size`, ramping down to `floor_eff` at `floor_size`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EfficiencyCurve {
    pub anchor_size: f64,
    pub anchor_eff: f64,
    pub floor_size: f64,
    pub floor_eff: f64,
    pub ramp: Ramp,
}

impl EfficiencyCurve {
    pub fn eval(&self, size: f64) -> f64 {
        if size >= self.anchor_size {
            return self.anchor_eff;
        }
        let eff = match self.ramp {
            Ramp::Linear => self.anchor_eff * size / self.anchor_size,
            Ramp::Log => {
                if size <= self.floor_size {
                    return self.floor_eff;
                }
                let frac =
                    (size / self.floor_size).ln() / (self.anchor_size / self.floor_size).ln();
                self.floor_eff + (self.anchor_eff - self.floor_eff) * frac
            }
        };
        eff.max(self.floor_eff)
    }
}

pub const FLOP_CURVE: EfficiencyCurve = EfficiencyCurve {
    anchor_size: 128.0,
    anchor_eff: 0.99,
    floor_size: 1.0,
    floor_eff: 0.10,
    ramp: Ramp::Linear,
};

pub const HBM_CURVE: EfficiencyCurve = EfficiencyCurve {
    anchor_size: 100e6,
    anchor_eff: 0.90,
    floor_size: 4096.0,
    floor_eff: 0.05,
    ramp: Ramp::Log,
};

pub fn flop_eff(min_gemm_dim: u64) -> f64 {
    FLOP_CURVE.eval(min_gemm_dim as f64)
}

pub fn hbm_eff(bytes: f64) -> f64 {
    HBM_CURVE.eval(bytes)
}

/// Roofline time of one op: the slower of math and HBM streaming.
pub fn op_time(op: &OpProfile, sys: &SystemSpec, precision: Precision) -> f64 {
    let compute_t = if op.flops > 0.0 {
        op.flops / (sys.peak_flops(precision) * flop_eff(op.min_gemm_dim))
    } else {
        0.0
    };
    let moved = op.moved_bytes();
    let mem_t = if moved > 0.0 {
        moved / (sys.tier1_bw * hbm_eff(moved))
    } else {
        0.0
    };
    compute_t.max(mem_t)
}

/// Reference systems.
pub mod fixtures {
    use super::SystemSpec;

    pub const FULLFLAT_JSON: &str = include_str!("../fixtures/systems/fullflat.json");
    pub const TWOTIER_HBD64_JSON: &str = include_str!("../fixtures/systems/twotier-hbd64.json");
    pub const TWOTIER_HBD128_JSON: &str = include_str!("../fixtures/systems/twotier-hbd128.json");
    pub const TWOTIER_HBD8_JSON: &str = include_str!("../fixtures/systems/twotier-hbd8.json");

    fn parse(text: &str) -> SystemSpec {
        SystemSpec::from_json(text).expect("shipped system fixture parses")
    }

    pub fn fullflat() -> SystemSpec {
        parse(FULLFLAT_JSON)
    }

    pub fn twotier_hbd64() -> SystemSpec {
        parse(TWOTIER_HBD64_JSON)
    }

    pub fn twotier_hbd128() -> SystemSpec {
        parse(TWOTIER_HBD128_JSON)
    }

    pub fn twotier_hbd8() -> SystemSpec {
        parse(TWOTIER_HBD8_JSON)
    }

    pub fn all() -> Vec<SystemSpec> {
        vec![
            fullflat(),
            twotier_hbd64(),
            twotier_hbd128(),
            twotier_hbd8(),
        ]
    }

    pub fn by_name(name: &str) -> Option<SystemSpec> {
        all()
            .into_iter()
            .find(|s| s.name.eq_ignore_ascii_case(name))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{Block, OpKind};
    use proptest::prelude::*;

    fn op(flops: f64, bytes: f64, dim: u64) -> OpProfile {
        OpProfile {
            name: "t",
            kind: OpKind::Gemm,
            block: Block::Attention,
            flops,
            weight_bytes: bytes,
            act_in_bytes: 0.0,
            act_out_bytes: 0.0,
            stored_act_bytes: 0.0,
            min_gemm_dim: dim,
        }
    }

    #[test]
    fn flop_eff_anchors() {
        assert_eq!(flop_eff(128), 0.99);
        assert_eq!(flop_eff(1_000_000), 0.99);
        assert!((flop_eff(64) - 0.495).abs() < 1e-12);
        assert_eq!(flop_eff(1), 0.10);
    }

    #[test]
    fn hbm_eff_anchors() {
        assert_eq!(hbm_eff(100e6), 0.90);
        assert_eq!(hbm_eff(1e9), 0.90);
        assert!((hbm_eff(4096.0) - 0.05).abs() < 1e-12);
        assert_eq!(hbm_eff(1.0), 0.05);
    }

    #[test]
    fn op_time_compute_bound_cancels() {
        let sys = fixtures::fullflat();
        let t = op_time(&op(9.2e15 * 0.99, 0.0, 4096), &sys, Precision::Fp8);
        assert!((t - 1.0).abs() < 1e-12);
    }

    #[test]
    fn op_time_memory_bound() {
        let sys = fixtures::fullflat();
        let t = op_time(&op(0.0, 27e12, u64::MAX), &sys, Precision::Fp8);
        // 27 TB / (30 TB/s * 0.9)
        assert!((t - 1.0).abs() < 1e-12);
        assert_eq!(op_time(&op(0.0, 0.0, 1), &sys, Precision::Fp8), 0.0);
    }

    #[test]
    fn tier2_transfer() {
        let sys = fixtures::fullflat();
        let t = sys.tier2_transfer_time(256e9);
        assert!((t - (1.0 / 0.9 + 2000e-9)).abs() < 1e-12);
        assert_eq!(sys.tier2_transfer_time(0.0), sys.tier2_latency);
        assert_eq!(fixtures::twotier_hbd8().tier2_bw, 450e9);
    }

    #[test]
    fn fixtures_transcribe_units() {
        let ff = fixtures::fullflat();
        assert_eq!(ff.flops_fp8, 9.2e15);
        assert_eq!(ff.tier1_bw, 30e12);
        assert_eq!(ff.tier1_cap, 432e9);
        assert_eq!(ff.su_bw, ff.so_bw);
        let tt = fixtures::twotier_hbd64();
        assert_eq!(tt.so_bw, 200e9);
        assert_eq!(tt.hbd_size, 64);
        assert_eq!(fixtures::twotier_hbd128().hbd_size, 128);
    }

    #[test]
    fn infinite_capacity_round_trips() {
        let mut doc: serde_json::Value = serde_json::from_str(fixtures::FULLFLAT_JSON).unwrap();
        doc["tier1_cap"] = "inf".into();
        let sys: SystemSpec = serde_json::from_value(doc).unwrap();
        assert_eq!(sys.tier1_cap, INFINITE_CAP);
        let back = serde_json::to_value(&sys).unwrap();
        assert_eq!(back["tier1_cap"], "inf");
    }

    #[test]
    fn full_flat_requires_equal_bandwidth() {
        let mut doc: serde_json::Value = serde_json::from_str(fixtures::FULLFLAT_JSON).unwrap();
        doc["so_bw"] = 200.0.into();
        assert!(serde_json::from_value::<SystemSpec>(doc).is_err());
    }

    proptest! {
        #[test]
        fn curves_monotone_and_clamped(a in 1u64..10_000_000_000u64, b in 1u64..10_000_000_000u64) {
            let (lo, hi) = (a.min(b), a.max(b));
            prop_assert!(flop_eff(lo) <= flop_eff(hi));
            prop_assert!(hbm_eff(lo as f64) <= hbm_eff(hi as f64));
            if lo >= 128 { prop_assert_eq!(flop_eff(lo), 0.99); }
            if lo as f64 >= 100e6 { prop_assert_eq!(hbm_eff(lo as f64), 0.90); }
        }

        #[test]
        fn op_time_non_increasing_in_resources(
            flops in 0.0f64..1e15, bytes in 0.0f64..1e12, dim in 1u64..4096, scale in 1.0f64..16.0
        ) {
            let sys = fixtures::twotier_hbd64();
            let o = op(flops, bytes, dim);
            let base = op_time(&o, &sys, Precision::Fp8);
            let mut faster = sys.clone();
            faster.flops_fp8 *= scale;
            prop_assert!(op_time(&o, &faster, Precision::Fp8) <= base);
            let mut wider = sys.clone();
            wider.tier1_bw *= scale;
            prop_assert!(op_time(&o, &wider, Precision::Fp8) <= base);
        }
    }

    #[test]
    fn roofline_scaling() {
        let sys = fixtures::fullflat();
        let c = op(1e14, 1.0, 4096);
        let c2 = op(2e14, 1.0, 4096);
        let t = op_time(&c, &sys, Precision::Fp8);
        assert!((op_time(&c2, &sys, Precision::Fp8) / t - 2.0).abs() < 1e-12);
        // Memory-bound above the HBM anchor: linear in bytes.
        let m = op(0.0, 1e9, u64::MAX);
        let m2 = op(0.0, 2e9, u64::MAX);
        let t = op_time(&m, &sys, Precision::Fp8);
        assert!((op_time(&m2, &sys, Precision::Fp8) / t - 2.0).abs() < 1e-12);
    }
}

//! Parameter sweeps and overlap / collective ablations.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hardware::{self, Precision, SystemSpec, Topology, INFINITE_CAP};
use crate::model::{self, ModelSpec};
use crate::report::{self, blank_row, fmt_f64, HEADER};
use crate::schedule::{estimate, RunEstimate};
use crate::search::{search, Axes, SearchSpec};
use crate::strategy::{Strategy, TpOverlap};

const GB: f64 = 1e9;
const PF: f64 = 1e15;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepAxis {
    Gpus,
    HbdSize,
    /// GB/s.
    SuBw,
    /// GB/s.
    SoBw,
    /// FP8 PF/s; FP16 scales by the same factor.
    Flops,
    /// GB/s.
    HbmBw,
    /// GB, or `"inf"`.
    HbmCap,
    /// 1 disables hardware collectives.
    SwCollectives,
    /// 1 disables TP and DP overlap.
    NoOverlap,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepMode {
    #[default]
    BestOfSearch,
    FixedStrategy,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum AxisValue {
    Num(f64),
    Text(String),
}

impl AxisValue {
    fn number(&self) -> Result<f64> {
        match self {
            AxisValue::Num(x) => Ok(*x),
            AxisValue::Text(s) if s.eq_ignore_ascii_case("inf") => Ok(f64::INFINITY),
            AxisValue::Text(s) => Err(Error::InvalidSweep(format!("not a number: {s:?}"))),
        }
    }

    pub fn label(&self) -> String {
        match self {
            AxisValue::Num(x) => fmt_f64(*x),
            AxisValue::Text(s) => s.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepSpec {
    pub axis: SweepAxis,
    pub values: Vec<AxisValue>,
    /// Path (relative to the sweep file) or built-in fixture name.
    pub model: String,
    pub system: String,
    pub batch: u64,
    #[serde(default)]
    pub seq: Option<u64>,
    pub gpus: u64,
    #[serde(default)]
    pub mode: SweepMode,
    #[serde(default)]
    pub strategy: Option<Strategy>,
}

impl SweepSpec {
    pub fn load(path: impl AsRef<Path>) -> Result<(Self, PathBuf)> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let spec: SweepSpec = serde_json::from_str(&text).map_err(|source| Error::Json {
            path: path.to_path_buf(),
            source,
        })?;
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Ok((spec, base))
    }

    pub fn validate(&self) -> Result<()> {
        if self.values.is_empty() {
            return Err(Error::InvalidSweep("values must be non-empty".into()));
        }
        let nums = self
            .values
            .iter()
            .map(AxisValue::number)
            .collect::<Result<Vec<_>>>()?;
        if nums.iter().any(|&x| x.is_nan() || x < 0.0) {
            return Err(Error::InvalidSweep("values must be non-negative".into()));
        }
        let flag = matches!(self.axis, SweepAxis::SwCollectives | SweepAxis::NoOverlap);
        if !flag && nums.iter().any(|&x| x <= 0.0) {
            return Err(Error::InvalidSweep("values must be positive".into()));
        }
        if nums.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::InvalidSweep(
                "values must be strictly increasing".into(),
            ));
        }
        if self.mode == SweepMode::FixedStrategy {
            if self.strategy.is_none() {
                return Err(Error::InvalidSweep(
                    "fixed_strategy mode needs a strategy".into(),
                ));
            }
            if self.axis == SweepAxis::Gpus {
                return Err(Error::InvalidSweep(
                    "a fixed strategy pins the GPU count".into(),
                ));
            }
        }
        Ok(())
    }
}

pub fn resolve_model(reference: &str, base: &Path) -> Result<ModelSpec> {
    let p = base.join(reference);
    if p.is_file() {
        return ModelSpec::load(p);
    }
    model::fixtures::by_name(reference)
        .ok_or_else(|| Error::io(p, std::io::ErrorKind::NotFound.into()))
}

pub fn resolve_system(reference: &str, base: &Path) -> Result<SystemSpec> {
    let p = base.join(reference);
    if p.is_file() {
        return SystemSpec::load(p);
    }
    hardware::fixtures::by_name(reference)
        .ok_or_else(|| Error::io(p, std::io::ErrorKind::NotFound.into()))
}

/// The system, GPU count and axes one sweep point runs with.
#[derive(Debug, Clone)]
pub struct PointContext {
    pub sys: SystemSpec,
    pub gpus: u64,
    pub axes: Axes,
}

pub fn apply_axis(
    axis: SweepAxis,
    value: &AxisValue,
    sys: &SystemSpec,
    gpus: u64,
) -> Result<PointContext> {
    let x = value.number()?;
    let mut sys = sys.clone();
    let mut gpus = gpus;
    let mut axes = Axes::default();
    let as_count = |x: f64| -> Result<u64> {
        if x.fract() != 0.0 || !x.is_finite() {
            return Err(Error::InvalidSweep(format!("{x} is not a whole count")));
        }
        Ok(x as u64)
    };
    match axis {
        SweepAxis::Gpus => gpus = as_count(x)?,
        SweepAxis::HbdSize => sys.hbd_size = as_count(x)?,
        SweepAxis::SuBw => {
            sys.su_bw = x * GB;
            if sys.topology == Topology::FullFlat {
                sys.so_bw = sys.su_bw;
            }
        }
        SweepAxis::SoBw => {
            sys.so_bw = x * GB;
            if sys.topology == Topology::FullFlat {
                sys.su_bw = sys.so_bw;
            }
        }
        SweepAxis::Flops => {
            let ratio = sys.flops_fp16 / sys.flops_fp8;
            sys.flops_fp8 = x * PF;
            sys.flops_fp16 = x * PF * ratio;
        }
        SweepAxis::HbmBw => sys.tier1_bw = x * GB,
        SweepAxis::HbmCap => {
            sys.tier1_cap = if x.is_infinite() {
                INFINITE_CAP
            } else {
                x * GB
            }
        }
        SweepAxis::SwCollectives => sys.hw_collectives = x == 0.0,
        SweepAxis::NoOverlap => axes.allow_overlap = x == 0.0,
    }
    sys.validate()?;
    Ok(PointContext { sys, gpus, axes })
}

fn without_overlap(s: &Strategy) -> Strategy {
    Strategy {
        tp_overlap: TpOverlap::None,
        dp_overlap: false,
        ..*s
    }
}

#[derive(Debug, Clone)]
pub struct SweepPoint {
    pub axis_value: String,
    pub result: std::result::Result<RunEstimate, String>,
}

fn diagnose(e: &Error) -> String {
    match e {
        Error::Infeasible(v) => format!("{v}"),
        other => other.to_string(),
    }
}

/// Best strategy for one context, or `None` when nothing is feasible.
pub fn best_of_search(
    model: &ModelSpec,
    ctx: &PointContext,
    batch: u64,
    seq: u64,
    threads: Option<usize>,
) -> Result<Option<RunEstimate>> {
    let spec = SearchSpec {
        model,
        sys: &ctx.sys,
        total_gpus: ctx.gpus,
        batch,
        seq,
        precision: Precision::Fp8,
        axes: ctx.axes,
    };
    Ok(search(&spec, 1, None, threads)?.top.into_iter().next())
}

pub fn run_sweep(
    spec: &SweepSpec,
    model: &ModelSpec,
    sys: &SystemSpec,
    threads: Option<usize>,
) -> Result<Vec<SweepPoint>> {
    spec.validate()?;
    let seq = spec.seq.unwrap_or(model.seq_len);
    let mut out = Vec::with_capacity(spec.values.len());
    for value in &spec.values {
        let label = value.label();
        let result = apply_axis(spec.axis, value, sys, spec.gpus).and_then(|ctx| match spec.mode {
            SweepMode::BestOfSearch => best_of_search(model, &ctx, spec.batch, seq, threads)?
                .ok_or_else(|| Error::InvalidSweep("no feasible strategy".into())),
            SweepMode::FixedStrategy => {
                let s = spec.strategy.as_ref().expect("validated");
                let s = if ctx.axes.allow_overlap {
                    *s
                } else {
                    without_overlap(s)
                };
                estimate(model, &ctx.sys, &s, spec.batch, seq)
            }
        });
        out.push(SweepPoint {
            axis_value: label,
            result: result.map_err(|e| diagnose(&e)),
        });
    }
    Ok(out)
}

/// Sweep rows plus `speedup` (tokens/s relative to the first point) and
/// `reason` for points without an estimate.
pub fn sweep_csv(points: &[SweepPoint]) -> Result<String> {
    let mut w = csv::WriterBuilder::new()
        .has_headers(false)
        .from_writer(Vec::new());
    let mut header: Vec<&str> = HEADER.to_vec();
    header.extend(["speedup", "reason"]);
    w.write_record(&header)?;
    let first = points
        .first()
        .and_then(|p| p.result.as_ref().ok())
        .map(|e| e.tokens_per_sec);
    for p in points {
        let mut r = match &p.result {
            Ok(e) => {
                let mut r = report::row(&p.axis_value, e);
                r.push(
                    first
                        .map(|f| fmt_f64(e.tokens_per_sec / f))
                        .unwrap_or_default(),
                );
                r
            }
            Err(_) => {
                let mut r = blank_row(&p.axis_value, None);
                r.push(String::new());
                r
            }
        };
        r.push(p.result.as_ref().err().cloned().unwrap_or_default());
        w.write_record(&r)?;
    }
    let bytes = w
        .into_inner()
        .map_err(|e| Error::Csv(e.into_error().into()))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Ablation {
    NoOverlap,
    SwCollectives,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct AblationRow {
    pub gpus: u64,
    pub baseline_step_s: f64,
    pub ablated_step_s: f64,
    pub slowdown_pct: f64,
}

/// GPU counts and best step times from a baseline sweep or search CSV with
/// GPU counts in `axis_value`; rows without a step time are skipped.
pub fn read_baseline(path: &Path) -> Result<Vec<(u64, f64)>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut r = csv::ReaderBuilder::new()
        .comment(Some(b'#'))
        .flexible(true)
        .from_reader(text.as_bytes());
    let headers = r.headers()?.clone();
    let col = |name: &str| {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::InvalidSweep(format!("baseline has no {name} column")))
    };
    let (gi, si) = (col("axis_value")?, col("step_s")?);
    let mut out = Vec::new();
    for rec in r.records() {
        let rec = rec?;
        let step = rec.get(si).unwrap_or("");
        if step.is_empty() {
            continue;
        }
        let gpus = rec
            .get(gi)
            .and_then(|g| g.parse::<f64>().ok())
            .filter(|g| g.fract() == 0.0 && *g >= 1.0)
            .ok_or_else(|| {
                Error::InvalidSweep(format!("bad gpu count in baseline: {:?}", rec.get(gi)))
            })?;
        let step: f64 = step
            .parse()
            .map_err(|_| Error::InvalidSweep(format!("bad step_s in baseline: {step:?}")))?;
        out.push((gpus as u64, step));
    }
    Ok(out)
}

/// Re-run best-of-search with the optimization removed at each GPU count.
pub fn ablate(
    model: &ModelSpec,
    sys: &SystemSpec,
    batch: u64,
    seq: u64,
    flag: Ablation,
    baseline: &[(u64, f64)],
    threads: Option<usize>,
) -> Result<Vec<AblationRow>> {
    let mut ablated_sys = sys.clone();
    let mut axes = Axes::default();
    match flag {
        Ablation::NoOverlap => axes.allow_overlap = false,
        Ablation::SwCollectives => ablated_sys.hw_collectives = false,
    }
    let mut rows = Vec::with_capacity(baseline.len());
    for &(gpus, baseline_step_s) in baseline {
        let ctx = PointContext {
            sys: ablated_sys.clone(),
            gpus,
            axes,
        };
        let Some(best) = best_of_search(model, &ctx, batch, seq, threads)? else {
            continue;
        };
        rows.push(AblationRow {
            gpus,
            baseline_step_s,
            ablated_step_s: best.step_time,
            slowdown_pct: 100.0 * (best.step_time - baseline_step_s) / baseline_step_s,
        });
    }
    Ok(rows)
}

pub fn ablation_csv(rows: &[AblationRow]) -> Result<String> {
    let mut w = csv::WriterBuilder::new()
        .has_headers(false)
        .from_writer(Vec::new());
    w.write_record(["gpus", "baseline_step_s", "ablated_step_s", "slowdown_pct"])?;
    for r in rows {
        w.write_record([
            r.gpus.to_string(),
            fmt_f64(r.baseline_step_s),
            fmt_f64(r.ablated_step_s),
            fmt_f64(r.slowdown_pct),
        ])?;
    }
    let bytes = w
        .into_inner()
        .map_err(|e| Error::Csv(e.into_error().into()))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

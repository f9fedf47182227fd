//! CSV rendering with a fixed column order, and atomic file writes.

use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::hardware::INFINITE_CAP;
use crate::schedule::RunEstimate;
use crate::search::{Outcome, SearchResult};
use crate::strategy::Strategy;

pub const HEADER: [&str; 26] = [
    "axis_value",
    "tp",
    "pp",
    "dp",
    "ep",
    "es",
    "dp_exp",
    "microbatch",
    "interleave",
    "recompute",
    "zero",
    "tp_comm",
    "tp_overlap",
    "dp_overlap",
    "off_w",
    "off_a",
    "off_o",
    "step_s",
    "compute_s",
    "exposed_comm_s",
    "bubble_s",
    "recompute_s",
    "offload_s",
    "tier1_gb",
    "tokens_per_s",
    "mfu",
];

const ESTIMATE_COLUMNS: usize = 9;

/// Shortest round-trip form; the capacity sentinel prints as `inf`.
pub fn fmt_f64(x: f64) -> String {
    if x >= INFINITE_CAP || x.is_infinite() {
        "inf".into()
    } else {
        format!("{x}")
    }
}

pub fn strategy_fields(s: &Strategy) -> Vec<String> {
    vec![
        s.tp.to_string(),
        s.pp.to_string(),
        s.dp.to_string(),
        s.ep.to_string(),
        s.es.to_string(),
        s.dp_exp.to_string(),
        s.microbatch.to_string(),
        s.interleave.to_string(),
        s.recompute.as_str().into(),
        s.zero.as_str().into(),
        s.tp_comm.as_str().into(),
        s.tp_overlap.as_str().into(),
        s.dp_overlap.to_string(),
        s.offload_weights.to_string(),
        s.offload_acts.to_string(),
        s.offload_opt.to_string(),
    ]
}

pub fn estimate_fields(e: &RunEstimate) -> Vec<String> {
    [
        e.step_time,
        e.compute_t,
        e.exposed_comm_t,
        e.bubble_t,
        e.recompute_t,
        e.exposed_offload_t,
        e.footprint.tier1_total / 1e9,
        e.tokens_per_sec,
        e.mfu,
    ]
    .iter()
    .map(|&x| fmt_f64(x))
    .collect()
}

pub fn row(axis_value: &str, e: &RunEstimate) -> Vec<String> {
    let mut r = vec![axis_value.to_string()];
    r.extend(strategy_fields(&e.strategy));
    r.extend(estimate_fields(e));
    r
}

/// A row for a point without an estimate; numeric columns are left blank.
pub fn blank_row(axis_value: &str, s: Option<&Strategy>) -> Vec<String> {
    let mut r = vec![axis_value.to_string()];
    match s {
        Some(s) => r.extend(strategy_fields(s)),
        None => r.extend(std::iter::repeat_n(String::new(), 16)),
    }
    r.extend(std::iter::repeat_n(String::new(), ESTIMATE_COLUMNS));
    r
}

fn writer() -> csv::Writer<Vec<u8>> {
    csv::WriterBuilder::new()
        .has_headers(false)
        .from_writer(Vec::new())
}

fn finish(w: csv::Writer<Vec<u8>>) -> Result<String> {
    let bytes = w
        .into_inner()
        .map_err(|e| Error::Csv(e.into_error().into()))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

/// Ranked rows (`axis_value` = rank) and a `#summary` footer line.
pub fn search_csv(result: &SearchResult) -> Result<String> {
    let mut w = writer();
    w.write_record(HEADER)?;
    for (i, e) in result.top.iter().enumerate() {
        w.write_record(row(&(i + 1).to_string(), e))?;
    }
    let mut out = finish(w)?;
    let (best, median, spread) = match &result.stats {
        Some(s) => (fmt_f64(s.best), fmt_f64(s.median), fmt_f64(s.spread)),
        None => (String::new(), String::new(), String::new()),
    };
    out.push_str(&format!(
        "#summary,best={best},median={median},spread={spread},evaluated={},feasible={}\n",
        result.evaluated, result.feasible
    ));
    Ok(out)
}

/// Every evaluated strategy in enumeration order with a `reason` column.
pub fn outcomes_csv(outcomes: &[Outcome]) -> Result<String> {
    let mut w = writer();
    let mut header: Vec<&str> = HEADER.to_vec();
    header.push("reason");
    w.write_record(&header)?;
    for (i, o) in outcomes.iter().enumerate() {
        let idx = i.to_string();
        let mut r = match &o.result {
            Ok(e) => row(&idx, e),
            Err(_) => blank_row(&idx, Some(&o.strategy)),
        };
        r.push(o.result.as_ref().err().cloned().unwrap_or_default());
        w.write_record(&r)?;
    }
    finish(w)
}

/// Write via a sibling temp file and rename, so readers never see a
/// partial file.
pub fn write_atomic(path: &Path, contents: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(|e| Error::io(dir, e))?;
    tmp.write_all(contents).map_err(|e| Error::io(path, e))?;
    tmp.flush().map_err(|e| Error::io(path, e))?;
    tmp.persist(path).map_err(|e| Error::io(path, e.error))?;
    Ok(())
}

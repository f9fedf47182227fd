//! Exhaustive strategy enumeration and deterministic ranking.

use std::cmp::Ordering;
use std::collections::{BTreeMap, BinaryHeap};

use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::hardware::{Precision, SystemSpec};
use crate::memcap::ViolationReason;
use crate::model::ModelSpec;
use crate::schedule::{estimate_from_profile, stage_profile, RunEstimate, StageProfile};
use crate::strategy::{Constraint, Recompute, Strategy, TpComm, TpOverlap, ZeroStage};

fn pow2_up_to(limit: u64) -> Vec<u64> {
    let mut out = Vec::new();
    let mut x = 1u64;
    while x <= limit {
        out.push(x);
        x = match x.checked_mul(2) {
            Some(y) => y,
            None => break,
        };
    }
    out
}

fn divisors(n: u64) -> Vec<u64> {
    (1..=n).filter(|d| n.is_multiple_of(*d)).collect()
}

/// Candidate values per axis before pairing them up.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct PruneHint {
    pub tp: Vec<u64>,
    pub pp: Vec<u64>,
    pub ep: Vec<u64>,
    pub es: Vec<u64>,
    pub dp_max: u64,
    pub gpus_max: u64,
}

pub fn prune_hint(model: &ModelSpec, sys: &SystemSpec, batch: u64) -> PruneHint {
    let keep = |limit: u64, dim: u64| -> Vec<u64> {
        pow2_up_to(limit)
            .into_iter()
            .filter(|d| dim.is_multiple_of(*d))
            .collect()
    };
    PruneHint {
        tp: keep(model.num_heads, model.num_heads),
        pp: keep(model.num_layers, model.num_layers),
        ep: keep(model.num_experts, model.num_experts),
        es: keep(model.ff_dim, model.ff_dim),
        dp_max: batch,
        gpus_max: sys.cluster_size,
    }
}

/// Degree-level candidates (interleave 1, default flags) and the count of
/// raw grid points dropped by each constraint.
#[derive(Debug, Clone, Default)]
pub struct Enumeration {
    pub bases: Vec<Strategy>,
    pub rejected: BTreeMap<Constraint, u64>,
}

pub fn enumerate_bases(model: &ModelSpec, total_gpus: u64, batch: u64) -> Enumeration {
    let mut out = Enumeration::default();
    let mut reject = |c: Constraint| *out.rejected.entry(c).or_insert(0) += 1;
    let mut bases = Vec::new();
    let microbatches = pow2_up_to(batch);
    for &tp in &pow2_up_to(model.num_heads) {
        for &pp in &pow2_up_to(model.num_layers) {
            for &ep in &pow2_up_to(model.num_experts) {
                for &es in &pow2_up_to(model.ff_dim) {
                    for &mb in &microbatches {
                        if !total_gpus.is_multiple_of(tp * pp) {
                            reject(Constraint::GpuCount);
                            continue;
                        }
                        let dp = total_gpus / (tp * pp);
                        if !(tp * dp).is_multiple_of(ep * es) {
                            reject(Constraint::ExpertDomain);
                            continue;
                        }
                        let s = Strategy {
                            microbatch: mb,
                            ..Strategy::moe(tp, pp, dp, ep, es, tp * dp / (ep * es))
                        };
                        match s.validate(model, batch, Some(total_gpus)) {
                            Ok(()) => bases.push(s),
                            Err(c) => reject(c),
                        }
                    }
                }
            }
        }
    }
    bases.sort();
    out.bases = bases;
    out
}

/// Which optional axes the enumerator may use.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Axes {
    pub allow_overlap: bool,
}

impl Default for Axes {
    fn default() -> Self {
        Axes {
            allow_overlap: true,
        }
    }
}

/// All strategies sharing `base`'s degrees and microbatch, in order.
pub fn expand(base: &Strategy, model: &ModelSpec, axes: Axes) -> Vec<Strategy> {
    let interleaves = if base.pp > 1 {
        divisors(model.num_layers / base.pp)
    } else {
        vec![1]
    };
    let overlaps: &[TpOverlap] = if axes.allow_overlap {
        &TpOverlap::ALL
    } else {
        &[TpOverlap::None]
    };
    let dp_overlaps: &[bool] = if axes.allow_overlap {
        &[false, true]
    } else {
        &[false]
    };
    let mut out = Vec::with_capacity(interleaves.len() * 864);
    for &interleave in &interleaves {
        for recompute in Recompute::ALL {
            for zero in ZeroStage::ALL {
                for tp_comm in TpComm::ALL {
                    for &tp_overlap in overlaps {
                        for &dp_overlap in dp_overlaps {
                            for off in 0..8u8 {
                                out.push(Strategy {
                                    interleave,
                                    recompute,
                                    zero,
                                    tp_comm,
                                    tp_overlap,
                                    dp_overlap,
                                    fused_activation: true,
                                    offload_weights: off & 4 != 0,
                                    offload_acts: off & 2 != 0,
                                    offload_opt: off & 1 != 0,
                                    ..*base
                                });
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

/// Every valid strategy in lexicographic order, plus rejection counts.
pub fn enumerate(
    model: &ModelSpec,
    sys: &SystemSpec,
    total_gpus: u64,
    batch: u64,
) -> Result<(Vec<Strategy>, BTreeMap<Constraint, u64>)> {
    check_gpus(sys, total_gpus)?;
    let e = enumerate_bases(model, total_gpus, batch);
    let all = e
        .bases
        .iter()
        .flat_map(|b| expand(b, model, Axes::default()))
        .collect();
    Ok((all, e.rejected))
}

fn check_gpus(sys: &SystemSpec, total_gpus: u64) -> Result<()> {
    if total_gpus == 0 || total_gpus > sys.cluster_size {
        return Err(Error::Range(format!(
            "gpus must be in 1..={}, got {total_gpus}",
            sys.cluster_size
        )));
    }
    Ok(())
}

/// Search context shared by every evaluation.
#[derive(Clone, Copy)]
pub struct SearchSpec<'a> {
    pub model: &'a ModelSpec,
    pub sys: &'a SystemSpec,
    pub total_gpus: u64,
    pub batch: u64,
    pub seq: u64,
    pub precision: Precision,
    pub axes: Axes,
}

/// Optional predicate restricting the space.
pub type Filter<'f> = &'f (dyn Fn(&Strategy) -> bool + Sync);

/// NEMO's default layout: one expert per EP rank and ES tied to TP.
pub fn nemo_default(model: &ModelSpec) -> impl Fn(&Strategy) -> bool + Sync + '_ {
    move |s: &Strategy| s.tp == s.es && s.ep == model.num_experts
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SearchStats {
    pub best: f64,
    pub median: f64,
    /// `(worst_in_top_n - best) / best`.
    pub spread: f64,
}

#[derive(Debug, Clone, Default, Serialize)]
pub struct SearchResult {
    pub top: Vec<RunEstimate>,
    pub evaluated: u64,
    pub feasible: u64,
    pub rejected: BTreeMap<Constraint, u64>,
    pub infeasible: BTreeMap<String, u64>,
    pub stats: Option<SearchStats>,
}

/// Ranking key: step time, then strategy.
struct Ranked(RunEstimate);

impl PartialEq for Ranked {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}

impl Eq for Ranked {}

impl PartialOrd for Ranked {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Ranked {
    fn cmp(&self, other: &Self) -> Ordering {
        rank_cmp(&self.0, &other.0)
    }
}

pub fn rank_cmp(a: &RunEstimate, b: &RunEstimate) -> Ordering {
    a.step_time
        .total_cmp(&b.step_time)
        .then_with(|| a.strategy.cmp(&b.strategy))
}

struct Partial {
    heap: BinaryHeap<Ranked>,
    steps: Vec<f64>,
    evaluated: u64,
    infeasible: BTreeMap<String, u64>,
}

impl Partial {
    fn new() -> Self {
        Partial {
            heap: BinaryHeap::new(),
            steps: Vec::new(),
            evaluated: 0,
            infeasible: BTreeMap::new(),
        }
    }

    fn offer(&mut self, e: RunEstimate, top_n: usize) {
        self.steps.push(e.step_time);
        if self.heap.len() < top_n {
            self.heap.push(Ranked(e));
        } else if let Some(worst) = self.heap.peek() {
            if rank_cmp(&e, &worst.0) == Ordering::Less {
                self.heap.pop();
                self.heap.push(Ranked(e));
            }
        }
    }

    fn merge(mut self, other: Partial, top_n: usize) -> Partial {
        for r in other.heap {
            if self.heap.len() < top_n {
                self.heap.push(r);
            } else if let Some(worst) = self.heap.peek() {
                if r < *worst {
                    self.heap.pop();
                    self.heap.push(r);
                }
            }
        }
        self.steps.extend(other.steps);
        self.evaluated += other.evaluated;
        for (k, v) in other.infeasible {
            *self.infeasible.entry(k).or_insert(0) += v;
        }
        self
    }
}

fn reason_tag(err: &Error) -> String {
    match err {
        Error::Infeasible(v) => match v.reason {
            ViolationReason::Tier1Capacity => "tier1_capacity".into(),
            ViolationReason::Tier2Capacity => "tier2_capacity".into(),
            ViolationReason::ClusterSize => "cluster_size".into(),
        },
        other => other.kind().into(),
    }
}

fn profiles(spec: &SearchSpec, base: &Strategy) -> [Result<StageProfile>; 3] {
    Recompute::ALL.map(|recompute| {
        stage_profile(
            spec.model,
            spec.sys,
            &Strategy { recompute, ..*base },
            spec.seq,
            spec.precision,
        )
    })
}

fn recompute_index(r: Recompute) -> usize {
    match r {
        Recompute::None => 0,
        Recompute::AttnOnly => 1,
        Recompute::Full => 2,
    }
}

/// Evaluate one strategy against a cached profile set.
fn evaluate_one(
    spec: &SearchSpec,
    s: &Strategy,
    profiles: &[Result<StageProfile>; 3],
) -> Result<RunEstimate> {
    match &profiles[recompute_index(s.recompute)] {
        Ok(p) => estimate_from_profile(
            spec.model,
            spec.sys,
            s,
            spec.batch,
            spec.seq,
            spec.precision,
            p,
        ),
        Err(e) => Err(Error::Range(e.to_string())),
    }
}

fn search_base(
    spec: &SearchSpec,
    base: &Strategy,
    filter: Option<Filter>,
    top_n: usize,
) -> Partial {
    let mut part = Partial::new();
    let candidates: Vec<Strategy> = expand(base, spec.model, spec.axes)
        .into_iter()
        .filter(|s| filter.is_none_or(|f| f(s)))
        .collect();
    if candidates.is_empty() {
        return part;
    }
    let profiles = profiles(spec, base);
    for s in &candidates {
        part.evaluated += 1;
        match evaluate_one(spec, s, &profiles) {
            Ok(e) => part.offer(e, top_n),
            Err(err) => *part.infeasible.entry(reason_tag(&err)).or_insert(0) += 1,
        }
    }
    part
}

fn median(mut xs: Vec<f64>) -> f64 {
    let n = xs.len();
    xs.sort_by(f64::total_cmp);
    if n % 2 == 1 {
        xs[n / 2]
    } else {
        (xs[n / 2 - 1] + xs[n / 2]) / 2.0
    }
}

fn in_pool<T: Send>(threads: Option<usize>, f: impl FnOnce() -> T + Send) -> Result<T> {
    match threads {
        Some(n) => {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(n)
                .build()
                .map_err(|e| Error::Range(format!("thread pool: {e}")))?;
            Ok(pool.install(f))
        }
        None => Ok(f()),
    }
}

/// Evaluate every enumerated strategy and keep the `top_n` fastest.
pub fn search(
    spec: &SearchSpec,
    top_n: usize,
    filter: Option<Filter>,
    threads: Option<usize>,
) -> Result<SearchResult> {
    if top_n == 0 {
        return Err(Error::Range("top_n must be >= 1".into()));
    }
    check_gpus(spec.sys, spec.total_gpus)?;
    let e = enumerate_bases(spec.model, spec.total_gpus, spec.batch);
    let part = in_pool(threads, || {
        e.bases
            .par_iter()
            .map(|b| search_base(spec, b, filter, top_n))
            .reduce(Partial::new, |a, b| a.merge(b, top_n))
    })?;
    let mut top: Vec<RunEstimate> = part.heap.into_iter().map(|r| r.0).collect();
    top.sort_by(rank_cmp);
    let stats = top.first().map(|best| {
        let worst = top.last().map_or(best.step_time, |w| w.step_time);
        SearchStats {
            best: best.step_time,
            median: median(part.steps.clone()),
            spread: (worst - best.step_time) / best.step_time,
        }
    });
    Ok(SearchResult {
        feasible: part.steps.len() as u64,
        top,
        evaluated: part.evaluated,
        rejected: e.rejected,
        infeasible: part.infeasible,
        stats,
    })
}

/// One evaluated strategy: its estimate or the reason it was dropped.
#[derive(Debug, Clone)]
pub struct Outcome {
    pub strategy: Strategy,
    pub result: std::result::Result<RunEstimate, String>,
}

/// Every enumerated strategy with its outcome, in enumeration order.
pub fn evaluate_all(
    spec: &SearchSpec,
    filter: Option<Filter>,
    threads: Option<usize>,
) -> Result<Vec<Outcome>> {
    check_gpus(spec.sys, spec.total_gpus)?;
    let e = enumerate_bases(spec.model, spec.total_gpus, spec.batch);
    let chunks: Vec<Vec<Outcome>> = in_pool(threads, || {
        e.bases
            .par_iter()
            .map(|base| {
                let profiles = profiles(spec, base);
                expand(base, spec.model, spec.axes)
                    .into_iter()
                    .filter(|s| filter.is_none_or(|f| f(s)))
                    .map(|s| Outcome {
                        strategy: s,
                        result: evaluate_one(spec, &s, &profiles).map_err(|err| reason_tag(&err)),
                    })
                    .collect()
            })
            .collect()
    })?;
    Ok(chunks.into_iter().flatten().collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::hardware::fixtures as systems;
    use crate::model::fixtures as models;
    use crate::schedule::estimate;

    #[test]
    fn tp_candidates_skip_64_for_96_heads() {
        let h = prune_hint(&models::gpt3_175b(), &systems::fullflat(), 1024);
        assert_eq!(h.tp, vec![1, 2, 4, 8, 16, 32]);
        assert_eq!(h.dp_max, 1024);
        let h = prune_hint(&models::gpt_1_8t(), &systems::fullflat(), 1024);
        assert_eq!(h.ep, vec![1, 2, 4, 8, 16]);
    }

    #[test]
    fn heads_rejections_counted() {
        let e = enumerate_bases(&models::gpt3_175b(), 4096, 1024);
        assert!(e.rejected[&Constraint::HeadsDivisible] > 0);
        assert!(e.bases.iter().all(|s| s.tp != 64));
    }

    #[test]
    fn published_rows_enumerated() {
        let e = enumerate_bases(&models::gpt_1_8t(), 4096, 1024);
        let want = Strategy::moe(4, 1, 1024, 16, 4, 64);
        assert!(e.bases.contains(&want));
        let e = enumerate_bases(&models::gpt_29t(), 8192, 1024);
        assert!(e.bases.contains(&Strategy::moe(8, 1, 1024, 128, 8, 8)));
        assert!(e.bases.contains(&Strategy::moe(16, 1, 512, 128, 16, 4)));
    }

    #[test]
    fn bases_sorted_and_unique() {
        let e = enumerate_bases(&models::desk_moe(), 64, 256);
        for w in e.bases.windows(2) {
            assert!(w[0] < w[1]);
        }
        let all: Vec<Strategy> = e
            .bases
            .iter()
            .flat_map(|b| expand(b, &models::desk_moe(), Axes::default()))
            .collect();
        for w in all.windows(2) {
            assert!(w[0] < w[1]);
        }
    }

    #[test]
    fn empty_space_reports_rejections() {
        // 3 GPUs cannot be split into power-of-two degrees beyond 1 x 1 x 3,
        // and dp = 3 does not divide a batch of 16.
        let (all, rejected) = enumerate(&models::desk_moe(), &systems::fullflat(), 3, 16).unwrap();
        assert!(all.is_empty());
        assert!(rejected.values().sum::<u64>() > 0);
    }

    #[test]
    fn search_matches_brute_force() {
        let model = models::desk_moe();
        let sys = systems::fullflat();
        let spec = SearchSpec {
            model: &model,
            sys: &sys,
            total_gpus: 4,
            batch: 8,
            seq: 2048,
            precision: Precision::Fp8,
            axes: Axes::default(),
        };
        let only: Filter = &|s: &Strategy| {
            s.zero == ZeroStage::Z0 && s.tp_comm == TpComm::Allreduce && s.dp_overlap
        };
        let got = search(&spec, 10, Some(only), Some(2)).unwrap();
        let (all, _) = enumerate(&model, &sys, 4, 8).unwrap();
        let mut oracle: Vec<RunEstimate> = all
            .iter()
            .filter(|s| only(s))
            .filter_map(|s| estimate(&model, &sys, s, 8, 2048).ok())
            .collect();
        oracle.sort_by(|a, b| {
            a.step_time
                .total_cmp(&b.step_time)
                .then(a.strategy.cmp(&b.strategy))
        });
        oracle.truncate(10);
        assert_eq!(got.top, oracle);
    }

    #[test]
    fn single_candidate_top1() {
        let model = models::desk_moe();
        let sys = systems::fullflat();
        let spec = SearchSpec {
            model: &model,
            sys: &sys,
            total_gpus: 1,
            batch: 1,
            seq: 2048,
            precision: Precision::Fp8,
            axes: Axes::default(),
        };
        let want = Strategy::moe(1, 1, 1, 1, 1, 1);
        let only: Filter = &move |s: &Strategy| *s == want;
        let got = search(&spec, 1, Some(only), None).unwrap();
        assert_eq!(got.top.len(), 1);
        assert_eq!(got.top[0].strategy, want);
        assert_eq!(got.stats.unwrap().spread, 0.0);
    }

    #[test]
    fn zero_top_n_rejected() {
        let model = models::desk_moe();
        let sys = systems::fullflat();
        let spec = SearchSpec {
            model: &model,
            sys: &sys,
            total_gpus: 1,
            batch: 1,
            seq: 2048,
            precision: Precision::Fp8,
            axes: Axes::default(),
        };
        assert!(search(&spec, 0, None, None).is_err());
    }
}

use std::sync::OnceLock;

use llmcd::hardware::{fixtures as systems, SystemSpec, INFINITE_CAP};
use llmcd::memcap::{footprint, in_flight_microbatches, local_params};
use llmcd::model::{count_params, fixtures as models, ModelSpec};
use llmcd::schedule::estimate;
use llmcd::search::enumerate_bases;
use llmcd::strategy::{Recompute, Strategy, TpComm, TpOverlap, ZeroStage};
use proptest::prelude::*;
use proptest::sample::select;
use proptest::strategy::Strategy as Gen;

const BATCH: u64 = 256;

fn desk() -> &'static ModelSpec {
    static M: OnceLock<ModelSpec> = OnceLock::new();
    M.get_or_init(models::desk_moe)
}

fn bases() -> &'static [Strategy] {
    static B: OnceLock<Vec<Strategy>> = OnceLock::new();
    B.get_or_init(|| {
        [16, 64, 256]
            .into_iter()
            .flat_map(|g| enumerate_bases(desk(), g, BATCH).bases)
            .collect()
    })
}

fn roomy(mut sys: SystemSpec) -> SystemSpec {
    sys.tier1_cap = INFINITE_CAP;
    sys.tier2_cap = INFINITE_CAP;
    sys
}

fn any_system() -> impl Gen<Value = SystemSpec> {
    select(systems::all())
}

fn any_strategy() -> impl Gen<Value = Strategy> {
    (
        0..bases().len(),
        select(Recompute::ALL.to_vec()),
        select(ZeroStage::ALL.to_vec()),
        select(TpComm::ALL.to_vec()),
        select(TpOverlap::ALL.to_vec()),
        any::<[bool; 4]>(),
    )
        .prop_map(|(i, recompute, zero, tp_comm, tp_overlap, flags)| {
            let base = bases()[i];
            // Interleave must divide the layers left per stage.
            let interleave =
                if base.pp > 1 && flags[0] && (desk().num_layers / base.pp).is_multiple_of(2) {
                    2
                } else {
                    1
                };
            Strategy {
                interleave,
                recompute,
                zero,
                tp_comm,
                tp_overlap,
                dp_overlap: flags[1],
                offload_weights: flags[2],
                offload_acts: flags[3],
                ..base
            }
        })
}

fn close(a: f64, b: f64) -> bool {
    (a - b).abs() <= 1e-9 * a.abs().max(b.abs())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn sharding_conserves_parameters(s in any_strategy()) {
        let m = desk();
        let p = local_params(m, &s).unwrap();
        let counts = count_params(m).unwrap();
        let dense = p.dense * (s.tp * s.pp) as f64;
        let experts = p.experts * (s.ep * s.es * s.pp) as f64;
        prop_assert!(close(dense + experts, counts.total_params as f64));
    }

    #[test]
    fn offload_conserves_bytes(s in any_strategy(), sys in any_system()) {
        let m = desk();
        let plain = Strategy { offload_weights: false, offload_acts: false, offload_opt: false, ..s };
        let base = footprint(m, &plain, &sys, BATCH, m.seq_len).unwrap();
        for bits in 1..8u8 {
            let c = Strategy {
                offload_weights: bits & 1 != 0,
                offload_acts: bits & 2 != 0,
                offload_opt: bits & 4 != 0,
                ..s
            };
            let fp = footprint(m, &c, &sys, BATCH, m.seq_len).unwrap();
            prop_assert!(close(fp.tier1_total + fp.tier2_total, base.tier1_total));
            prop_assert!(fp.tier1_total <= base.tier1_total);
        }
    }

    #[test]
    fn zero_never_grows_footprint(s in any_strategy(), sys in any_system()) {
        let m = desk();
        let t1: Vec<f64> = ZeroStage::ALL
            .iter()
            .map(|&zero| footprint(m, &Strategy { zero, ..s }, &sys, BATCH, m.seq_len).unwrap().tier1_total)
            .collect();
        prop_assert!(t1[0] >= t1[1] && t1[1] >= t1[2], "{t1:?}");
    }

    #[test]
    fn activations_linear_in_microbatch(s in any_strategy(), sys in any_system()) {
        let m = desk();
        prop_assume!(s.microbatch * 2 * s.dp <= BATCH);
        let doubled = Strategy { microbatch: s.microbatch * 2, ..s };
        let per = |st: &Strategy| {
            let fp = footprint(m, st, &sys, BATCH, m.seq_len).unwrap();
            fp.activations / in_flight_microbatches(st, BATCH) as f64
        };
        prop_assert!(close(per(&doubled), 2.0 * per(&s)));
    }

    #[test]
    fn breakdown_sums_to_step(s in any_strategy(), sys in any_system()) {
        let m = desk();
        let e = estimate(m, &roomy(sys), &s, BATCH, m.seq_len).unwrap();
        let parts = [e.compute_t, e.exposed_comm_t, e.bubble_t, e.recompute_t, e.exposed_offload_t];
        prop_assert!(parts.iter().all(|&x| x >= 0.0), "{parts:?}");
        prop_assert!(close(parts.iter().sum::<f64>(), e.step_time));
        prop_assert!(close(e.tokens_per_sec * e.step_time, (BATCH * m.seq_len) as f64));
        prop_assert!((0.0..=1.0).contains(&e.mfu));
    }

    #[test]
    fn faster_hardware_never_slower(s in any_strategy(), sys in any_system(), k in 1.0f64..4.0) {
        let m = desk();
        let sys = roomy(sys);
        let base = estimate(m, &sys, &s, BATCH, m.seq_len).unwrap().step_time;
        let bump: [fn(&mut SystemSpec, f64); 5] = [
            |x, k| { x.su_bw *= k; x.so_bw *= k; },
            |x, k| x.so_bw = (x.so_bw * k).min(x.su_bw),
            |x, k| x.tier1_bw *= k,
            |x, k| x.tier2_bw *= k,
            |x, k| { x.flops_fp8 *= k; x.flops_fp16 *= k; },
        ];
        for (i, f) in bump.iter().enumerate() {
            let mut faster = sys.clone();
            f(&mut faster, k);
            if faster.validate().is_err() {
                continue;
            }
            let t = estimate(m, &faster, &s, BATCH, m.seq_len).unwrap().step_time;
            prop_assert!(t <= base * (1.0 + 1e-12), "knob {i}: {t} > {base}");
        }
    }

    #[test]
    fn hw_collectives_never_slower(s in any_strategy(), sys in any_system()) {
        let m = desk();
        let hw = SystemSpec { hw_collectives: true, ..roomy(sys.clone()) };
        let sw = SystemSpec { hw_collectives: false, ..roomy(sys) };
        let a = estimate(m, &hw, &s, BATCH, m.seq_len).unwrap().step_time;
        let b = estimate(m, &sw, &s, BATCH, m.seq_len).unwrap().step_time;
        prop_assert!(a <= b * (1.0 + 1e-12), "hw {a} > sw {b}");
    }

    #[test]
    fn overlap_never_slower(s in any_strategy(), sys in any_system()) {
        let m = desk();
        let sys = roomy(sys);
        let off = Strategy { tp_overlap: TpOverlap::None, dp_overlap: false, ..s };
        let on = Strategy { tp_overlap: TpOverlap::Ring, dp_overlap: true, ..s };
        let a = estimate(m, &sys, &on, BATCH, m.seq_len).unwrap().step_time;
        let b = estimate(m, &sys, &off, BATCH, m.seq_len).unwrap().step_time;
        prop_assert!(a <= b * (1.0 + 1e-12), "{a} > {b}");
    }

    #[test]
    fn recompute_ordering(s in any_strategy(), sys in any_system()) {
        let m = desk();
        let sys = roomy(sys);
        let est: Vec<_> = Recompute::ALL
            .iter()
            .map(|&recompute| estimate(m, &sys, &Strategy { recompute, ..s }, BATCH, m.seq_len).unwrap())
            .collect();
        prop_assert_eq!(est[0].recompute_t, 0.0);
        prop_assert!(est[0].recompute_t <= est[1].recompute_t && est[1].recompute_t <= est[2].recompute_t);
        prop_assert!(est[0].footprint.activations >= est[1].footprint.activations);
        prop_assert!(est[1].footprint.activations >= est[2].footprint.activations);
    }
}

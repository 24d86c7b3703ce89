//! Serving properties on the reference 8x8 wafer of FP8 chips.

use flatsim::wafer::{AttentionDataflow, DecoderLayerSpec, ParallelismPlan, WaferConfig, WaferModel};

fn within(x: f64, target: f64, rel: f64) -> bool {
    (x - target).abs() <= rel * target
}

#[test]
fn batch_sweep_is_monotone_and_flat_leads() {
    let mut m = WaferModel::reference();
    let mut prev: Option<(f64, f64)> = None;
    for b in [1usize, 4, 16, 64, 128, 256, 512] {
        let plan = ParallelismPlan::reference(b);
        let flat = m.serve(&plan, AttentionDataflow::FlatAttention).unwrap();
        let mla = m.serve(&plan, AttentionDataflow::FlashMlaLike).unwrap();
        if let Some((thr, tpot)) = prev {
            assert!(flat.system_throughput >= thr, "throughput fell at batch {b}");
            assert!(flat.tpot_ms >= tpot, "TPOT fell at batch {b}");
        }
        prev = Some((flat.system_throughput, flat.tpot_ms));
        if b >= 16 {
            assert!(flat.system_throughput >= mla.system_throughput, "batch {b}");
        }
    }
}

#[test]
fn wider_expert_parallelism_spends_more_time_in_all_to_all() {
    let mut m = WaferModel::reference();
    let mut last = 0.0;
    for (ep, pp) in [(16, 4), (32, 2), (64, 1)] {
        let plan = ParallelismPlan { ep_degree: ep, pp_degree: pp, ..ParallelismPlan::reference(256) };
        let r = m.serve(&plan, AttentionDataflow::FlatAttention).unwrap();
        assert!(r.c2c_fraction > last, "EP{ep}: {} <= {last}", r.c2c_fraction);
        last = r.c2c_fraction;
    }
}

#[test]
fn pure_pipeline_has_no_all_to_all() {
    let mut m = WaferModel::reference();
    let plan = ParallelismPlan { ep_degree: 1, pp_degree: 64, layers: 64, ..ParallelismPlan::reference(16) };
    let lt = m.layer_times(&plan, AttentionDataflow::FlatAttention).unwrap();
    assert_eq!(lt.dispatch_seconds + lt.combine_seconds, 0.0);
}

#[test]
fn slow_links_at_batch_128() {
    let wafer = WaferConfig { d2d_bandwidth: 160e9, ..WaferConfig::reference() };
    let mut m = WaferModel::new(wafer, DecoderLayerSpec::deepseek_v3()).unwrap();
    let r = m.serve(&ParallelismPlan::reference(128), AttentionDataflow::FlatAttention).unwrap();
    assert!(within(r.per_chip_throughput, 3773.0, 0.30), "{}", r.per_chip_throughput);
    assert!(within(r.tpot_ms, 33.1, 0.30), "{}", r.tpot_ms);
}

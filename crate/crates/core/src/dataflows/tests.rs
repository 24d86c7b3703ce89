use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::numerics::reference_attention;
use crate::sim::{check_schedule, simulate, Mode, Schedule};

fn small_arch() -> ArchConfig {
    let mut a = ArchConfig::reference();
    a.noc.mesh_x = 4;
    a.noc.mesh_y = 4;
    a.hbm.num_channels = 4;
    a
}

fn rand_matrix(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Matrix {
    Matrix::from_fn(r, c, |_, _| rng.gen_range(-1.0..1.0))
}

fn tensors(w: &AttentionWorkload, seed: u64) -> AttentionTensors {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let hk = w.kv_heads();
    AttentionTensors {
        q: (0..w.batch * w.heads).map(|_| rand_matrix(&mut rng, w.s_q, w.qk_dim())).collect(),
        k: (0..w.batch * hk).map(|_| rand_matrix(&mut rng, w.s_kv, w.qk_dim())).collect(),
        v: (0..w.batch * hk).map(|_| rand_matrix(&mut rng, w.s_kv, w.v_dim())).collect(),
    }
}

fn run(w: &AttentionWorkload, s: &Schedule, arch: &ArchConfig) -> f64 {
    let v = check_schedule(s, arch);
    assert!(v.is_ok(), "{:?}", v.violations);
    let t = tensors(w, 11);
    let out = simulate(s, arch, Mode::Functional, Some(pack_inputs(w, &t).unwrap())).unwrap();
    let got = unpack_output(w, &out.tensors);
    got.max_rel_diff(&reference_attention(w, &t).unwrap())
}

fn flat(d: Dataflow, g: u32, slice: usize) -> FlatParams {
    FlatParams::for_dataflow(d, g, g, slice, slice).unwrap()
}

#[test]
fn flash_variants_match_reference() {
    let arch = small_arch();
    let w = AttentionWorkload::mha_prefill(1, 2, 64, 16);
    for v in [FlashVariant::Fa2, FlashVariant::Fa3] {
        let s = gen_flashattention(&w, &arch, v, 16).unwrap();
        assert!(run(&w, &s, &arch) < 1e-6, "{v:?}");
    }
}

#[test]
fn flat_variants_match_reference() {
    let arch = small_arch();
    let w = AttentionWorkload::mha_prefill(1, 2, 64, 16);
    for d in [Dataflow::FlatSc, Dataflow::FlatTc, Dataflow::FlatHc, Dataflow::FlatAsync] {
        let s = gen_flatattention(&w, &arch, &flat(d, 2, 16)).unwrap();
        assert!(run(&w, &s, &arch) < 1e-6, "{d}");
    }
}

#[test]
fn padded_shapes_are_masked() {
    let arch = small_arch();
    let w = AttentionWorkload::mha_prefill(1, 1, 60, 8);
    let s = gen_flatattention(&w, &arch, &flat(Dataflow::FlatHc, 2, 16)).unwrap();
    assert!(run(&w, &s, &arch) < 1e-6);
    let s = gen_flashattention(&w, &arch, FlashVariant::Fa2, 16).unwrap();
    assert!(run(&w, &s, &arch) < 1e-6);
}

#[test]
fn hbm_bytes_equal_closed_forms() {
    let arch = small_arch();
    let w = AttentionWorkload::mha_prefill(2, 2, 128, 16);
    let s = gen_flashattention(&w, &arch, FlashVariant::Fa3, 32).unwrap();
    let r = simulate(&s, &arch, Mode::Timing, None).unwrap().report;
    assert_eq!(r.hbm_bytes_read + r.hbm_bytes_written, io_flash(2, 2, 16, 128, 32).bytes_total);
    let s = gen_flatattention(&w, &arch, &flat(Dataflow::FlatAsync, 4, 16)).unwrap();
    let r = simulate(&s, &arch, Mode::Timing, None).unwrap().report;
    assert_eq!(r.hbm_bytes_read + r.hbm_bytes_written, io_flat(2, 2, 16, 128, 16, 4).bytes_total);
    assert_eq!(r.hbm_bytes_written, (2 * 2 * 128 * 16 * 2) as u64);
}

#[test]
fn hw_collectives_beat_sequential() {
    let arch = small_arch();
    let w = AttentionWorkload::mha_prefill(1, 4, 128, 32);
    let hw = simulate(&gen_flatattention(&w, &arch, &flat(Dataflow::FlatHc, 4, 32)).unwrap(), &arch, Mode::Timing, None)
        .unwrap()
        .report;
    let seq = simulate(&gen_flatattention(&w, &arch, &flat(Dataflow::FlatSc, 4, 32)).unwrap(), &arch, Mode::Timing, None)
        .unwrap()
        .report;
    assert_eq!(hw.hbm_bytes_read, seq.hbm_bytes_read);
    assert!(hw.total_cycles < seq.total_cycles);
}

#[test]
fn decode_variants_match_reference() {
    let arch = small_arch();
    let cases = [
        AttentionWorkload::mha_decode(2, 2, 64, 16),
        AttentionWorkload::spec_decode(1, 2, 64, 16, 2),
        AttentionWorkload::spec_decode(1, 2, 40, 8, 3),
        AttentionWorkload::gqa_decode(1, 4, 2, 64, 16),
        AttentionWorkload::mla_decode(1, 4, 64, 32, 8, 1),
        AttentionWorkload::mla_decode(1, 4, 64, 32, 8, 2),
    ];
    for w in &cases {
        let rows = effective_rows(w);
        let p = FlatParams::new(4, 1, rows, 16, Strategy::Hw, false);
        let s = gen_flat_decode(w, &arch, &p).unwrap();
        assert!(run(w, &s, &arch) < 1e-6, "{:?}", w.variant);
        let s = gen_flashattention(w, &arch, FlashVariant::Fa3, 16).unwrap();
        assert!(run(w, &s, &arch) < 1e-6, "{:?}", w.variant);
    }
}

#[test]
fn gqa_group_of_one_is_mha_decode() {
    let arch = small_arch();
    let p = FlatParams::new(4, 1, 1, 16, Strategy::Hw, false);
    let a = gen_flat_decode(&AttentionWorkload::gqa_decode(2, 4, 1, 64, 16), &arch, &p).unwrap();
    let b = gen_flat_decode(&AttentionWorkload::mha_decode(2, 4, 64, 16), &arch, &p).unwrap();
    assert_eq!(a.steps, b.steps);
    assert_eq!(a.buffers, b.buffers);
}

#[test]
fn causal_decode_skips_masked_blocks() {
    let arch = small_arch();
    let w = AttentionWorkload::spec_decode(1, 1, 64, 16, 4);
    let mut dense = w.clone();
    dense.causal = false;
    let p = FlatParams::new(1, 1, 4, 16, Strategy::Hw, false);
    let c = gen_flat_decode(&w, &arch, &p).unwrap();
    let d = gen_flat_decode(&dense, &arch, &p).unwrap();
    assert!(c.matrix_flops() <= d.matrix_flops());
}

#[test]
fn prefill_rejected_by_decode_generator() {
    let arch = small_arch();
    let p = FlatParams::new(2, 2, 16, 16, Strategy::Hw, false);
    assert!(gen_flat_decode(&AttentionWorkload::mha_prefill(1, 1, 64, 16), &arch, &p).is_err());
}

#[test]
fn invalid_params_rejected() {
    let arch = small_arch();
    let w = AttentionWorkload::mha_prefill(1, 1, 64, 16);
    let mut p = flat(Dataflow::FlatHc, 2, 16);
    p.block_r = 33;
    assert!(gen_flatattention(&w, &arch, &p).is_err());
    assert!(gen_flatattention(&w, &arch, &flat(Dataflow::FlatHc, 8, 16)).is_err());
    let mut no_hw = arch.clone();
    no_hw.noc.hw_collectives_enabled = false;
    assert!(gen_flatattention(&w, &no_hw, &flat(Dataflow::FlatHc, 2, 16)).is_err());
}

#[test]
fn l1_overflow_is_reported() {
    let arch = small_arch();
    let w = AttentionWorkload::mha_prefill(1, 1, 1024, 256);
    assert!(matches!(
        gen_flashattention(&w, &arch, FlashVariant::Fa2, 512),
        Err(Error::L1Overflow { .. })
    ));
}

#[test]
fn summa_matches_reference() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for (arch, m, n, k, blk) in [
        (small_arch(), 256, 256, 256, SummaBlock { bm: 64, bn: 64, bk: 32 }),
        (small_arch(), 100, 72, 40, SummaBlock { bm: 16, bn: 8, bk: 16 }),
        (small_arch(), 32, 128, 48, SummaBlock { bm: 16, bn: 16, bk: 16 }),
        (small_arch(), 20, 100, 24, SummaBlock { bm: 16, bn: 8, bk: 16 }),
        (small_arch(), 16, 40, 16, SummaBlock { bm: 16, bn: 8, bk: 8 }),
        (
            {
                let mut a = small_arch();
                a.noc.mesh_x = 1;
                a.noc.mesh_y = 1;
                a
            },
            48,
            40,
            24,
            SummaBlock { bm: 16, bn: 16, bk: 8 },
        ),
    ] {
        let a = rand_matrix(&mut rng, m, k);
        let b = rand_matrix(&mut rng, k, n);
        let s = gen_summa(m, n, k, &arch, blk).unwrap();
        assert!(check_schedule(&s, &arch).is_ok());
        let out = simulate(&s, &arch, Mode::Functional, Some(vec![a.clone(), b.clone(), Matrix::zeros(m, n)])).unwrap();
        let want = crate::numerics::reference_gemm(&a, &b).unwrap();
        assert!(out.tensors[2].max_rel_diff(&want) < 1e-12);
        let io = io_summa(m as u64, n as u64, k as u64, blk.bm as u64, blk.bn as u64, arch.noc.mesh_x as u64, arch.noc.mesh_y as u64);
        let r = out.report;
        assert_eq!(r.hbm_bytes_read + r.hbm_bytes_written, io.elements_total * arch.dtype_bytes as u64);
    }
}

#[test]
fn summa_single_wave_reads_each_element_once() {
    let arch = small_arch();
    let s = gen_summa(256, 256, 256, &arch, SummaBlock { bm: 64, bn: 64, bk: 64 }).unwrap();
    assert_eq!(s.declared_hbm_bytes().0, 2 * 256 * 256 * 2);
}

#[test]
fn dataflow_names_round_trip() {
    for d in Dataflow::ALL {
        assert_eq!(d.name().parse::<Dataflow>().unwrap(), d);
    }
    assert_eq!("FlatAsync".parse::<Dataflow>().unwrap(), Dataflow::FlatAsync);
    assert!("fa4".parse::<Dataflow>().is_err());
}

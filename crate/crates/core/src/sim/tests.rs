use super::*;
use crate::arch::ArchConfig;
use crate::engines::{GemmJob, VectorJob, VectorKind};
use crate::error::Error;
use crate::noc::{Axis, CollectiveKind, CollectiveRequest, Strategy, TileCoord};
use crate::numerics::Matrix;

fn small_arch() -> ArchConfig {
    let mut a = ArchConfig::reference();
    a.noc.mesh_x = 4;
    a.noc.mesh_y = 4;
    a.hbm.num_channels = 4;
    a
}

fn gemm_schedule() -> Schedule {
    let t = TileCoord::new(0, 0);
    let mut b = ScheduleBuilder::new("gemm", 2);
    let ta = b.tensor("A", 8, 4, false);
    let tb = b.tensor("B", 4, 6, false);
    let tc = b.tensor("C", 8, 6, true);
    let a = b.buffer(t, "a", 8, 4);
    let bb = b.buffer(t, "b", 4, 6);
    let c = b.buffer(t, "c", 8, 6);
    let reg = |tensor, rows, cols| TensorRegion { tensor, row0: 0, col0: 0, rows, cols };
    b.push(t, StepKind::HbmLoad { dst: a, region: reg(ta, 8, 4) }, &[]);
    b.push(t, StepKind::HbmLoad { dst: bb, region: reg(tb, 4, 6) }, &[]);
    b.push(
        t,
        StepKind::MatMul { job: GemmJob::new(8, 6, 4, 2), a, b: bb, b_transposed: false, c, accumulate: false },
        &[],
    );
    b.push(t, StepKind::HbmStore { src: c, region: reg(tc, 8, 6) }, &[]);
    b.finish()
}

#[test]
fn functional_gemm_matches_reference() {
    let s = gemm_schedule();
    let arch = small_arch();
    assert!(check_schedule(&s, &arch).is_ok());
    let a = Matrix::from_fn(8, 4, |r, c| (r * 4 + c) as f64 * 0.1 - 1.0);
    let bm = Matrix::from_fn(4, 6, |r, c| (r as f64 - c as f64) * 0.3);
    let out = simulate(&s, &arch, Mode::Functional, Some(vec![a.clone(), bm.clone(), Matrix::zeros(8, 6)])).unwrap();
    let want = crate::numerics::reference_gemm(&a, &bm).unwrap();
    assert!(out.tensors[2].max_rel_diff(&want) < 1e-12);
    assert_eq!(out.report.hbm_bytes_read, (32 + 24) * 2);
    assert_eq!(out.report.hbm_bytes_written, 48 * 2);
}

#[test]
fn timing_is_deterministic_and_breakdown_sums() {
    let s = gemm_schedule();
    let arch = small_arch();
    let r1 = simulate(&s, &arch, Mode::Timing, None).unwrap().report;
    let r2 = simulate(&s, &arch, Mode::Timing, None).unwrap().report;
    assert_eq!(r1, r2);
    assert_eq!(r1.breakdown.sum(), r1.total_cycles);
    assert!(r1.breakdown.matrix_engine >= 128);
}

#[test]
fn same_tile_loads_share_channel_fifo() {
    let arch = small_arch();
    let t = TileCoord::new(1, 0);
    let mut b = ScheduleBuilder::new("loads", 2);
    let ta = b.tensor("A", 64, 64, false);
    for i in 0..2 {
        let buf = b.buffer(t, format!("b{i}"), 32, 64);
        b.push(t, StepKind::HbmLoad { dst: buf, region: TensorRegion { tensor: ta, row0: 32 * i, col0: 0, rows: 32, cols: 64 } }, &[]);
    }
    let r = simulate(&b.finish(), &arch, Mode::Timing, None).unwrap().report;
    let one = (4096.0f64 / arch.hbm.channel_bytes_per_cycle).ceil() as u64;
    let setup = arch.tile.dma_setup_cycles;
    // Both DMAs start at 0; the second waits for the first on the channel.
    assert_eq!(r.total_cycles, setup + 1 + 2 * one + arch.hbm.access_latency + 1);
}

#[test]
fn l1_overflow_reported() {
    let arch = small_arch();
    let t = TileCoord::new(2, 3);
    let mut b = ScheduleBuilder::new("big", 2);
    let big = b.buffer(t, "huge", 512, 512);
    b.push(t, StepKind::VectorOp { job: VectorJob::new(VectorKind::Exp, 1, 2), op: VecOp::Fill { dst: big, value: 0.0 } }, &[]);
    match simulate(&b.finish(), &arch, Mode::Timing, None) {
        Err(Error::L1Overflow { step: 0, x: 2, y: 3, .. }) => {}
        other => panic!("unexpected {other:?}"),
    }
}

#[test]
fn cycle_is_deadlock() {
    let arch = small_arch();
    let t = TileCoord::new(0, 0);
    let bar = |deps: Vec<StepId>| Step { tile: t, kind: StepKind::Barrier { cycles: 1 }, deps };
    let s = Schedule { steps: vec![bar(vec![]), bar(vec![2]), bar(vec![1])], ..Default::default() };
    assert!(!check_schedule(&s, &arch).is_ok());
    match simulate(&s, &arch, Mode::Timing, None) {
        Err(Error::Deadlock { remaining: 2, .. }) => {}
        other => panic!("unexpected {other:?}"),
    }
}

#[test]
fn read_before_write_detected() {
    let arch = small_arch();
    let t = TileCoord::new(0, 0);
    let mut b = ScheduleBuilder::new("rbw", 2);
    let x = b.buffer(t, "x", 4, 4);
    let y = b.buffer(t, "y", 4, 1);
    b.push(t, StepKind::VectorOp { job: VectorJob::new(VectorKind::RowMax, 16, 2), op: VecOp::RowMax { src: x, dst: y } }, &[]);
    let v = check_schedule(&b.finish(), &arch);
    assert!(v.violations.iter().any(|m| m.contains("before any write")));
}

#[test]
fn row_reduce_and_multicast() {
    let arch = small_arch();
    let mut b = ScheduleBuilder::new("coll", 2);
    let out = b.tensor("O", 2, 2, true);
    let tiles: Vec<TileCoord> = (0..4).map(|x| TileCoord::new(x, 1)).collect();
    let parts: Vec<BufId> = tiles.iter().map(|&t| b.buffer(t, "p", 2, 2)).collect();
    for (i, (&t, &p)) in tiles.iter().zip(&parts).enumerate() {
        b.push(t, StepKind::VectorOp { job: VectorJob::new(VectorKind::Add, 4, 2), op: VecOp::Fill { dst: p, value: i as f64 + 1.0 } }, &[]);
    }
    let sum = b.buffer(tiles[0], "sum", 2, 2);
    let req = |kind| CollectiveRequest { kind, axis: Axis::Row, strategy: Strategy::Hw, root: tiles[0], size: 8, group_extent: 4 };
    let coll = |kind| Collective { req: req(kind), origin: tiles[0] };
    b.push(tiles[0], StepKind::Reduce { coll: coll(CollectiveKind::ReduceSum), op: ReduceOp::Sum, srcs: parts.clone(), dst: sum }, &[]);
    let copies: Vec<BufId> = tiles[1..].iter().map(|&t| b.buffer(t, "c", 2, 2)).collect();
    b.push(tiles[0], StepKind::Multicast { coll: coll(CollectiveKind::Multicast), src: sum, dsts: copies.clone() }, &[]);
    b.push(tiles[3], StepKind::HbmStore { src: copies[2], region: TensorRegion { tensor: out, row0: 0, col0: 0, rows: 2, cols: 2 } }, &[]);
    let s = b.finish();
    assert!(check_schedule(&s, &arch).is_ok());
    let res = simulate(&s, &arch, Mode::Functional, Some(vec![Matrix::zeros(2, 2)])).unwrap();
    assert_eq!(res.tensors[0], Matrix::filled(2, 2, 10.0));
    assert!(res.report.breakdown.inter_tile_comm > 0);
}

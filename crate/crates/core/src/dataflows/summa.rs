//! SUMMA GEMM: output-stationary tiles, panels broadcast along rows and columns.

use serde::{Deserialize, Serialize};

use crate::arch::ArchConfig;
use crate::engines::{gemm_cycles, GemmJob};

use super::io_summa;
use crate::error::{Error, Result};
use crate::noc::{Axis, CollectiveKind, CollectiveRequest, Strategy, TileCoord};
use crate::sim::{check_l1, Collective, Schedule, ScheduleBuilder, StepKind, TensorRegion};

/// Per-tile block: each tile owns a `bm × bn` block of C and consumes
/// `bk`-deep panels.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SummaBlock {
    pub bm: usize,
    pub bn: usize,
    pub bk: usize,
}

/// Block for an `m×n×k` GEMM. Every power-of-two block whose
/// double-buffered panels fit in L1 is costed as the larger of its
/// matrix-engine time and its HBM time; the cheapest wins, ties going to
/// less traffic and then deeper panels.
pub fn auto_block(m: usize, n: usize, k: usize, arch: &ArchConfig) -> Result<SummaBlock> {
    if m == 0 || n == 0 || k == 0 {
        return Err(Error::Contract("GEMM dimensions must be ≥ 1".into()));
    }
    let (mx, my) = (arch.noc.mesh_x as usize, arch.noc.mesh_y as usize);
    let d = arch.dtype_bytes as u64;
    let hbm_rate = arch.hbm.num_channels as f64 * arch.hbm.channel_bytes_per_cycle;
    let sizes = |len: usize, top: usize| -> Vec<usize> {
        let cap = len.next_power_of_two().clamp(16, top);
        (4..=9).map(|p| 1usize << p).filter(|&s| s <= cap).collect()
    };
    let mut best: Option<((f64, u64, usize), SummaBlock)> = None;
    for &bm in &sizes(m, 256) {
        for &bn in &sizes(n, 256) {
            for &bk in &sizes(k, 512) {
                if ((2 * bm * bk + 2 * bk * bn + bm * bn) as u64) * d > arch.tile.l1_capacity {
                    continue;
                }
                let (mb, nb, kb) = (m.div_ceil(bm), n.div_ceil(bn), k.div_ceil(bk));
                let h = mb.min(my);
                let folds = if mb < my { my / mb } else { 1 };
                let waves = mb.div_ceil(h) * nb.div_ceil(folds * mx);
                let job = GemmJob::new(bm as u64, bn as u64, bk as u64, d as u32);
                // Busiest HBM channel per panel step: A fetchers sit at
                // column (band row) mod band width, B fetchers on every column.
                let (ay, ax) = (h, nb.min(mx));
                let nch = arch.hbm.num_channels as usize;
                let mut chan = vec![0u64; nch];
                for y in 0..(folds * ay).min(my) {
                    chan[(y % ax) % nch] += (bm * bk) as u64 * d;
                }
                for x in 0..ax {
                    chan[x % nch] += (bk * bn) as u64 * d * folds.min(nb.div_ceil(mx)) as u64;
                }
                let feed = *chan.iter().max().unwrap_or(&0) as f64 / arch.hbm.channel_bytes_per_cycle;
                let step = (gemm_cycles(&job, &arch.tile) as f64).max(feed);
                let compute = (waves * kb) as f64 * step;
                let bytes = io_summa(m as u64, n as u64, k as u64, bm as u64, bn as u64, mx as u64, my as u64).elements_total * d;
                let cost = (compute.max(bytes as f64 / hbm_rate), bytes, usize::MAX - bk);
                if best.as_ref().is_none_or(|(c, _)| cost < *c) {
                    best = Some((cost, SummaBlock { bm, bn, bk }));
                }
            }
        }
    }
    best.map(|(_, b)| b).ok_or_else(|| Error::NoTiling(format!("no SUMMA block for {m}x{n}x{k} fits in L1")))
}

/// Tensors are declared as `A (m×k)`, `B (k×n)`, `C (m×n)`. When the output
/// has more blocks than the mesh has tiles it is covered in waves.
pub fn gen_summa(m: usize, n: usize, k: usize, arch: &ArchConfig, block: SummaBlock) -> Result<Schedule> {
    let SummaBlock { bm, bn, bk } = block;
    if m == 0 || n == 0 || k == 0 || bm == 0 || bn == 0 || bk == 0 {
        return Err(Error::Contract("GEMM and block dimensions must be ≥ 1".into()));
    }
    let (mx, my) = (arch.noc.mesh_x as usize, arch.noc.mesh_y as usize);
    let strategy = if arch.noc.hw_collectives_enabled { Strategy::Hw } else { Strategy::SwTree };
    let dtype = arch.dtype_bytes as usize;
    let mut b = ScheduleBuilder::new(format!("summa/{m}x{n}x{k}"), arch.dtype_bytes);
    b.set_group_shape(mx.min(n.div_ceil(bn)) as u32, my.min(m.div_ceil(bm)) as u32);
    let ta = b.tensor("a", m, k, false);
    let tb = b.tensor("b", k, n, false);
    let tc = b.tensor("c", m, n, true);

    let coord = |x: usize, y: usize| TileCoord::new(x as u32, y as u32);
    let bufs: Vec<_> = (0..my)
        .flat_map(|y| (0..mx).map(move |x| (x, y)))
        .map(|(x, y)| {
            let t = coord(x, y);
            (
                [b.buffer(t, "a", bm, bk), b.buffer(t, "a'", bm, bk)],
                [b.buffer(t, "b", bk, bn), b.buffer(t, "b'", bk, bn)],
                b.buffer(t, "c", bm, bn),
            )
        })
        .collect();
    let at = |x: usize, y: usize| y * mx + x;
    let coll = |kind, axis, origin: TileCoord, root: TileCoord, extent: usize, size: usize| Collective {
        req: CollectiveRequest { kind, axis, strategy, root, size: size as u64, group_extent: extent as u32 },
        origin,
    };

    let (mb, nb, kb) = (m.div_ceil(bm), n.div_ceil(bn), k.div_ceil(bk));
    // A short output (fewer block rows than mesh rows) is folded: the mesh
    // is cut into horizontal bands of `h` rows and each band runs its own
    // column wave concurrently.
    let h = mb.min(my);
    let folds = if mb < my { my / mb } else { 1 };
    let span = folds * mx;
    let mut phase = 0;
    for wy in 0..mb.div_ceil(h) {
        let ay = (mb - wy * h).min(h);
        let row0 = |y: usize| (wy * h + y) * bm;
        for wx in 0..nb.div_ceil(span) {
            // (first row of the band, first column block, band width)
            let bands: Vec<(usize, usize, usize)> = (0..folds)
                .map(|f| (f * h, wx * span + f * mx))
                .filter(|&(_, c0)| c0 < nb)
                .map(|(oy, c0)| (oy, c0, (nb - c0).min(mx)))
                .collect();
            for kk in 0..kb {
                let k0 = kk * bk;
                let kn = bk.min(k - k0);
                for &(oy, c0, ax) in &bands {
                    for y in 0..ay {
                        let (f, ty) = ((oy + y) % ax, oy + y);
                        let rows = bm.min(m - row0(y));
                        let region = TensorRegion { tensor: ta, row0: row0(y), col0: k0, rows, cols: kn };
                        b.push(coord(f, ty), StepKind::HbmLoad { dst: bufs[at(f, ty)].0[phase], region }, &[]);
                        if ax > 1 {
                            let dsts = (0..ax).filter(|&x| x != f).map(|x| bufs[at(x, ty)].0[phase]).collect();
                            let c = coll(CollectiveKind::Multicast, Axis::Row, coord(0, ty), coord(f, ty), ax, bm * bk * dtype);
                            b.push(coord(f, ty), StepKind::Multicast { coll: c, src: bufs[at(f, ty)].0[phase], dsts }, &[]);
                        }
                    }
                    for x in 0..ax {
                        let fy = oy + x % ay;
                        let col0 = (c0 + x) * bn;
                        let cols = bn.min(n - col0);
                        let region = TensorRegion { tensor: tb, row0: k0, col0, rows: kn, cols };
                        b.push(coord(x, fy), StepKind::HbmLoad { dst: bufs[at(x, fy)].1[phase], region }, &[]);
                        if ay > 1 {
                            let dsts = (oy..oy + ay).filter(|&y| y != fy).map(|y| bufs[at(x, y)].1[phase]).collect();
                            let c = coll(CollectiveKind::Multicast, Axis::Column, coord(x, oy), coord(x, fy), ay, bk * bn * dtype);
                            b.push(coord(x, fy), StepKind::Multicast { coll: c, src: bufs[at(x, fy)].1[phase], dsts }, &[]);
                        }
                    }
                    for y in oy..oy + ay {
                        for x in 0..ax {
                            let (a, bb, c) = bufs[at(x, y)];
                            let job = GemmJob::new(bm as u64, bn as u64, bk as u64, dtype as u32);
                            let kind =
                                StepKind::MatMul { job, a: a[phase], b: bb[phase], b_transposed: false, c, accumulate: kk > 0 };
                            b.push(coord(x, y), kind, &[]);
                        }
                    }
                }
                phase ^= 1;
            }
            for &(oy, c0, ax) in &bands {
                for y in 0..ay {
                    for x in 0..ax {
                        let rows = bm.min(m - row0(y));
                        let col0 = (c0 + x) * bn;
                        let cols = bn.min(n - col0);
                        let region = TensorRegion { tensor: tc, row0: row0(y), col0, rows, cols };
                        b.push(coord(x, oy + y), StepKind::HbmStore { src: bufs[at(x, oy + y)].2, region }, &[]);
                    }
                }
            }
        }
    }
    let s = b.finish();
    check_l1(&s, arch)?;
    Ok(s)
}

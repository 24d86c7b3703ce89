//! FlashAttention and FlatAttention schedule generation.
//!
//! Both dataflows share one emitter. FlashAttention is the degenerate 1×1
//! group: every tile runs the online-softmax loop on its own query block.
//! FlatAttention spreads a block over a `gy × gx` group, with row-wise
//! reductions of the softmax statistics and of the output.

use serde::{Deserialize, Serialize};

use crate::arch::ArchConfig;
use crate::engines::{GemmJob, VectorJob, VectorKind};
use crate::error::{Error, Result};
use crate::noc::{Axis, CollectiveKind, CollectiveRequest, Strategy, TileCoord};
use crate::numerics::{AttentionVariant, AttentionWorkload};
use crate::sim::{check_l1, BufId, Collective, ReduceOp, Schedule, ScheduleBuilder, StepId, StepKind, TensorId, TensorRegion, VecOp};

use super::{effective_rows, instance_count, FlatParams};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FlashVariant {
    Fa2,
    Fa3,
}

/// Per-tile FlashAttention with `m`-row query blocks and `m`-key K/V blocks.
/// FA3 keeps two query blocks in flight per tile so one block's softmax and
/// DMA overlap the other's GEMMs.
pub fn gen_flashattention(w: &AttentionWorkload, arch: &ArchConfig, variant: FlashVariant, m: usize) -> Result<Schedule> {
    w.validate()?;
    if m == 0 {
        return Err(Error::Contract("block size M must be ≥ 1".into()));
    }
    let rows = effective_rows(w);
    let layout = Layout {
        gx: 1,
        gy: 1,
        sr: m.min(rows),
        sc: m.min(w.s_kv),
        strategy: Strategy::Hw,
        slots: if variant == FlashVariant::Fa3 { 2 } else { 1 },
        kv_bufs: 1,
    };
    let label = format!("{}/{}", if variant == FlashVariant::Fa3 { "fa3" } else { "fa2" }, w.variant.name());
    emit(w, arch, layout, label)
}

/// FlatAttention per the group parameters. Decode variants are accepted and
/// mapped onto their effective query matrix (see [`gen_flat_decode`]).
pub fn gen_flatattention(w: &AttentionWorkload, arch: &ArchConfig, params: &FlatParams) -> Result<Schedule> {
    w.validate()?;
    params.validate(arch)?;
    let layout = Layout {
        gx: params.gx,
        gy: params.gy,
        sr: params.slice_r(),
        sc: params.slice_c(),
        strategy: params.strategy,
        slots: if params.async_heads { 2 } else { 1 },
        kv_bufs: if params.async_heads { 1 } else { 2 },
    };
    let tag = match (params.async_heads, params.strategy) {
        (true, _) => "flat_async",
        (false, Strategy::SwSeq) => "flat_sc",
        (false, Strategy::SwTree) => "flat_tc",
        (false, Strategy::Hw) => "flat_hc",
    };
    emit(w, arch, layout, format!("{tag}/{}", w.variant.name()))
}

/// Decode attention. Heads sharing a K/V stream are stacked into one
/// effective query matrix: 1 row for MHA decode, `spec_len` rows with a
/// causal mask for speculative decode, `G` rows per group for GQA and all
/// `H` heads for absorbed MLA. The result runs through the Flat emitter.
pub fn gen_flat_decode(w: &AttentionWorkload, arch: &ArchConfig, params: &FlatParams) -> Result<Schedule> {
    if w.variant == AttentionVariant::MhaPrefill {
        return Err(Error::Contract("gen_flat_decode expects a decode variant".into()));
    }
    gen_flatattention(w, arch, params)
}

#[derive(Debug, Clone, Copy)]
struct Layout {
    gx: u32,
    gy: u32,
    sr: usize,
    sc: usize,
    strategy: Strategy,
    slots: usize,
    kv_bufs: usize,
}

impl Layout {
    fn block_r(&self) -> usize {
        self.sr * self.gy as usize
    }

    fn block_c(&self) -> usize {
        self.sc * self.gx as usize
    }
}

#[derive(Debug, Clone, Copy)]
struct Shape {
    rows: usize,
    kv_len: usize,
    dk: usize,
    dv: usize,
    causal: Option<usize>,
    q_period: usize,
}

#[derive(Debug, Clone, Copy)]
struct TileBufs {
    q: BufId,
    k: [BufId; 2],
    v: [BufId; 2],
    s: BufId,
    o: BufId,
    m: [BufId; 2],
    m_loc: BufId,
    l_loc: BufId,
    mg: BufId,
    lg: BufId,
    alpha: BufId,
    l: BufId,
}

struct Slot {
    bufs: Vec<TileBufs>,
    kv_phase: usize,
}

#[derive(Debug, Clone, Copy)]
struct Unit {
    inst: usize,
    rb: usize,
}

struct Emitter {
    b: ScheduleBuilder,
    lay: Layout,
    shape: Shape,
    tensors: Vec<[TensorId; 4]>,
    dtype: u64,
}

fn emit(w: &AttentionWorkload, arch: &ArchConfig, lay: Layout, label: String) -> Result<Schedule> {
    let noc = &arch.noc;
    if lay.gx > noc.mesh_x || lay.gy > noc.mesh_y {
        return Err(Error::Contract("group exceeds mesh".into()));
    }
    let shape = Shape {
        rows: effective_rows(w),
        kv_len: w.s_kv,
        dk: w.qk_dim(),
        dv: w.v_dim(),
        causal: w.causal.then(|| w.causal_offset()),
        q_period: w.s_q,
    };
    let mut b = ScheduleBuilder::new(label, w.dtype_bytes as u32);
    b.set_group_shape(lay.gx, lay.gy);
    let tensors = (0..instance_count(w))
        .map(|i| {
            [
                b.tensor(format!("q{i}"), shape.rows, shape.dk, false),
                b.tensor(format!("k{i}"), shape.kv_len, shape.dk, false),
                b.tensor(format!("v{i}"), shape.kv_len, shape.dv, false),
                b.tensor(format!("o{i}"), shape.rows, shape.dv, true),
            ]
        })
        .collect();
    let mut e = Emitter { b, lay, shape, tensors, dtype: w.dtype_bytes as u64 };

    let row_blocks = shape.rows.div_ceil(lay.block_r());
    let units: Vec<Unit> =
        (0..instance_count(w)).flat_map(|inst| (0..row_blocks).map(move |rb| Unit { inst, rb })).collect();
    let ngx = noc.mesh_x / lay.gx;
    let ngy = noc.mesh_y / lay.gy;
    let ngroups = (ngx * ngy) as usize;
    for gi in 0..ngroups.min(units.len()) {
        let origin = TileCoord::new((gi as u32 % ngx) * lay.gx, (gi as u32 / ngx) * lay.gy);
        let mine: Vec<Unit> = units.iter().copied().skip(gi).step_by(ngroups).collect();
        e.run_group(origin, &mine);
    }
    let sched = e.b.finish();
    check_l1(&sched, arch)?;
    Ok(sched)
}

impl Emitter {
    fn tile(&self, origin: TileCoord, x: u32, y: u32) -> TileCoord {
        TileCoord::new(origin.x + x, origin.y + y)
    }

    fn idx(&self, x: u32, y: u32) -> usize {
        (y * self.lay.gx + x) as usize
    }

    fn alloc(&mut self, origin: TileCoord) -> Slot {
        let (sr, sc, dk, dv) = (self.lay.sr, self.lay.sc, self.shape.dk, self.shape.dv);
        let mut bufs = Vec::new();
        for y in 0..self.lay.gy {
            for x in 0..self.lay.gx {
                let t = self.tile(origin, x, y);
                let b = &mut self.b;
                let q = b.buffer(t, "q", sr, dk);
                let k0 = b.buffer(t, "k", sc, dk);
                let v0 = b.buffer(t, "v", sc, dv);
                let (k1, v1) =
                    if self.lay.kv_bufs == 2 { (b.buffer(t, "k'", sc, dk), b.buffer(t, "v'", sc, dv)) } else { (k0, v0) };
                let s = b.buffer(t, "s", sr, sc);
                let o = b.buffer(t, "o", sr, dv);
                let m = [b.buffer(t, "m", sr, 1), b.buffer(t, "m'", sr, 1)];
                let m_loc = b.buffer(t, "m_loc", sr, 1);
                let l_loc = b.buffer(t, "l_loc", sr, 1);
                let (mg, lg) =
                    if self.lay.gx > 1 { (b.buffer(t, "m_glob", sr, 1), b.buffer(t, "l_glob", sr, 1)) } else { (m_loc, l_loc) };
                let alpha = b.buffer(t, "alpha", sr, 1);
                let l = b.buffer(t, "l", sr, 1);
                bufs.push(TileBufs { q, k: [k0, k1], v: [v0, v1], s, o, m, m_loc, l_loc, mg, lg, alpha, l });
            }
        }
        Slot { bufs, kv_phase: 0 }
    }

    fn run_group(&mut self, origin: TileCoord, units: &[Unit]) {
        let mut slots: Vec<Slot> = (0..self.lay.slots).map(|_| self.alloc(origin)).collect();
        for chunk in units.chunks(self.lay.slots) {
            let iters: Vec<usize> = chunk.iter().map(|u| self.inner_iterations(u)).collect();
            let mut m_phase = vec![0usize; chunk.len()];
            for j in 0..iters.iter().copied().max().unwrap_or(0) {
                // A head in flight fetches only after the one ahead of it has
                // issued, so its loads never overtake the leader's in the
                // HBM queues.
                let mut gate: Vec<StepId> = Vec::new();
                for (i, u) in chunk.iter().enumerate() {
                    let lead = std::mem::take(&mut gate);
                    if j == 0 {
                        self.load_q(origin, &slots[i], u, &lead);
                    }
                    if j < iters[i] {
                        gate = self.iteration(origin, &mut slots[i], u, j, m_phase[i], &lead);
                        m_phase[i] ^= 1;
                        if j + 1 == iters[i] {
                            self.finish(origin, &slots[i], u);
                        }
                    }
                }
            }
        }
    }

    /// Real (unpadded) query rows `[lo, hi)` covered by tile row `y`.
    fn tile_rows(&self, u: &Unit, y: u32) -> (usize, usize) {
        let lo = u.rb * self.lay.block_r() + y as usize * self.lay.sr;
        (lo.min(self.shape.rows), (lo + self.lay.sr).min(self.shape.rows))
    }

    fn pos_range(&self, lo: usize, hi: usize) -> (usize, usize) {
        let p = self.shape.q_period.max(1);
        if hi - lo >= p {
            return (0, p - 1);
        }
        (lo..hi).map(|r| r % p).fold((usize::MAX, 0), |(a, b), x| (a.min(x), b.max(x)))
    }

    /// K/V blocks the unit must visit; blocks entirely above the causal
    /// diagonal for every row of the unit are skipped.
    fn inner_iterations(&self, u: &Unit) -> usize {
        let blocks = self.shape.kv_len.div_ceil(self.lay.block_c());
        let lo = u.rb * self.lay.block_r();
        let hi = (lo + self.lay.block_r()).min(self.shape.rows);
        match self.shape.causal {
            Some(off) if hi > lo => {
                let (_, maxpos) = self.pos_range(lo, hi);
                blocks.min((maxpos + off) / self.lay.block_c() + 1)
            }
            _ => blocks,
        }
    }

    fn needs_mask(&self, u: &Unit, x: u32, y: u32, j: usize) -> bool {
        let (lo, hi) = self.tile_rows(u, y);
        if lo >= hi {
            return false;
        }
        let key_end = j * self.lay.block_c() + (x as usize + 1) * self.lay.sc;
        if key_end > self.shape.kv_len {
            return true;
        }
        match self.shape.causal {
            Some(off) => key_end - 1 > self.pos_range(lo, hi).0 + off,
            None => false,
        }
    }

    fn vector(&mut self, t: TileCoord, kind: VectorKind, elements: usize, op: VecOp) {
        let job = VectorJob::new(kind, elements as u64, self.dtype as u32);
        self.b.push(t, StepKind::VectorOp { job, op }, &[]);
    }

    fn collective(&self, kind: CollectiveKind, axis: Axis, origin: TileCoord, root: TileCoord, extent: u32, bytes: usize) -> Collective {
        Collective {
            req: CollectiveRequest { kind, axis, strategy: self.lay.strategy, root, size: bytes as u64, group_extent: extent },
            origin,
        }
    }

    fn row_multicast(&mut self, origin: TileCoord, y: u32, bufs: &[TileBufs], pick: impl Fn(&TileBufs) -> BufId, bytes: usize) {
        let gx = self.lay.gx;
        if gx == 1 {
            return;
        }
        let root_x = y % gx;
        let root = self.tile(origin, root_x, y);
        let dsts = (0..gx).filter(|&x| x != root_x).map(|x| pick(&bufs[self.idx(x, y)])).collect();
        let coll = self.collective(CollectiveKind::Multicast, Axis::Row, self.tile(origin, 0, y), root, gx, bytes);
        self.b.push(root, StepKind::Multicast { coll, src: pick(&bufs[self.idx(root_x, y)]), dsts }, &[]);
    }

    fn row_reduce(&mut self, origin: TileCoord, y: u32, bufs: &[TileBufs], src: impl Fn(&TileBufs) -> BufId, dst: impl Fn(&TileBufs) -> BufId, op: ReduceOp, bytes: usize) {
        let gx = self.lay.gx;
        if gx == 1 {
            return;
        }
        let root_x = y % gx;
        let root = self.tile(origin, root_x, y);
        let srcs = (0..gx).map(|x| src(&bufs[self.idx(x, y)])).collect();
        let kind = if op == ReduceOp::Max { CollectiveKind::ReduceMax } else { CollectiveKind::ReduceSum };
        let coll = self.collective(kind, Axis::Row, self.tile(origin, 0, y), root, gx, bytes);
        self.b.push(root, StepKind::Reduce { coll, op, srcs, dst: dst(&bufs[self.idx(root_x, y)]) }, &[]);
    }

    fn col_multicast(&mut self, origin: TileCoord, x: u32, bufs: &[TileBufs], pick: impl Fn(&TileBufs) -> BufId, bytes: usize) {
        let gy = self.lay.gy;
        if gy == 1 {
            return;
        }
        let root_y = x % gy;
        let root = self.tile(origin, x, root_y);
        let dsts = (0..gy).filter(|&y| y != root_y).map(|y| pick(&bufs[self.idx(x, y)])).collect();
        let coll = self.collective(CollectiveKind::Multicast, Axis::Column, self.tile(origin, x, 0), root, gy, bytes);
        self.b.push(root, StepKind::Multicast { coll, src: pick(&bufs[self.idx(x, root_y)]), dsts }, &[]);
    }

    fn load_q(&mut self, origin: TileCoord, slot: &Slot, u: &Unit, gate: &[StepId]) {
        let dk = self.shape.dk;
        for y in 0..self.lay.gy {
            let (lo, hi) = self.tile_rows(u, y);
            let d = self.idx(y % self.lay.gx, y);
            let region = TensorRegion { tensor: self.tensors[u.inst][0], row0: lo, col0: 0, rows: hi - lo, cols: dk };
            let t = self.tile(origin, y % self.lay.gx, y);
            self.b.push(t, StepKind::HbmLoad { dst: slot.bufs[d].q, region }, gated(gate, y as usize));
            let bytes = self.lay.sr * dk * self.dtype as usize;
            self.row_multicast(origin, y, &slot.bufs, |b| b.q, bytes);
        }
    }

    fn iteration(&mut self, origin: TileCoord, slot: &mut Slot, u: &Unit, j: usize, mp: usize, gate: &[StepId]) -> Vec<StepId> {
        let Layout { gx, gy, sr, sc, .. } = self.lay;
        let Shape { dk, dv, kv_len, .. } = self.shape;
        let dtype = self.dtype as usize;
        let p = slot.kv_phase;
        if self.lay.kv_bufs == 2 {
            slot.kv_phase ^= 1;
        }
        let bufs = slot.bufs.clone();
        let [_, kt, vt, _] = self.tensors[u.inst];
        let mut loads = Vec::new();

        for x in 0..gx {
            let f = self.tile(origin, x, x % gy);
            let fb = bufs[self.idx(x, x % gy)];
            let k0 = (j * self.lay.block_c() + x as usize * sc).min(kv_len);
            let n = (k0 + sc).min(kv_len) - k0;
            let kr = TensorRegion { tensor: kt, row0: k0, col0: 0, rows: n, cols: dk };
            let vr = TensorRegion { tensor: vt, row0: k0, col0: 0, rows: n, cols: dv };
            let g = gated(gate, x as usize);
            self.b.push(f, StepKind::HbmLoad { dst: fb.k[p], region: kr }, g);
            loads.push(self.b.push(f, StepKind::HbmLoad { dst: fb.v[p], region: vr }, g));
            self.col_multicast(origin, x, &bufs, |b| b.k[p], sc * dk * dtype);
            self.col_multicast(origin, x, &bufs, |b| b.v[p], sc * dv * dtype);
        }

        for y in 0..gy {
            for x in 0..gx {
                let t = self.tile(origin, x, y);
                let tb = bufs[self.idx(x, y)];
                let job = GemmJob::new(sr as u64, sc as u64, dk as u64, dtype as u32);
                self.b.push(t, StepKind::MatMul { job, a: tb.q, b: tb.k[p], b_transposed: true, c: tb.s, accumulate: false }, &[]);
                if self.needs_mask(u, x, y, j) {
                    let op = VecOp::Mask {
                        buf: tb.s,
                        row0: u.rb * self.lay.block_r() + y as usize * sr,
                        col0: j * self.lay.block_c() + x as usize * sc,
                        q_period: self.shape.q_period,
                        causal_offset: self.shape.causal,
                        kv_len,
                    };
                    self.vector(t, VectorKind::Add, sr * sc, op);
                }
                self.vector(t, VectorKind::RowMax, sr * sc, VecOp::RowMax { src: tb.s, dst: tb.m_loc });
            }
        }
        for y in 0..gy {
            self.row_reduce(origin, y, &bufs, |b| b.m_loc, |b| b.mg, ReduceOp::Max, sr * dtype);
            self.row_multicast(origin, y, &bufs, |b| b.mg, sr * dtype);
        }

        for y in 0..gy {
            for x in 0..gx {
                let t = self.tile(origin, x, y);
                let tb = bufs[self.idx(x, y)];
                let (mc, mn) = (tb.m[mp], tb.m[mp ^ 1]);
                let op = if j == 0 { VecOp::Copy { src: tb.mg, dst: mn } } else { VecOp::Max { a: mc, b: tb.mg, dst: mn } };
                self.vector(t, VectorKind::Add, sr, op);
                self.vector(t, VectorKind::Exp, sr * sc, VecOp::ExpSub { src: tb.s, rowvec: mn, dst: tb.s });
                self.vector(t, VectorKind::RowSum, sr * sc, VecOp::RowSum { src: tb.s, dst: tb.l_loc });
            }
        }
        for y in 0..gy {
            self.row_reduce(origin, y, &bufs, |b| b.l_loc, |b| b.lg, ReduceOp::Sum, sr * dtype);
            self.row_multicast(origin, y, &bufs, |b| b.lg, sr * dtype);
        }

        for y in 0..gy {
            for x in 0..gx {
                let t = self.tile(origin, x, y);
                let tb = bufs[self.idx(x, y)];
                let (mc, mn) = (tb.m[mp], tb.m[mp ^ 1]);
                let job = GemmJob::new(sr as u64, dv as u64, sc as u64, dtype as u32);
                if j == 0 {
                    self.vector(t, VectorKind::Add, sr, VecOp::Copy { src: tb.lg, dst: tb.l });
                    self.b.push(t, StepKind::MatMul { job, a: tb.s, b: tb.v[p], b_transposed: false, c: tb.o, accumulate: false }, &[]);
                } else {
                    self.vector(t, VectorKind::Exp, sr, VecOp::Rescale { m_old: mc, m_new: mn, dst: tb.alpha });
                    self.vector(t, VectorKind::ScaleAccumulate, sr, VecOp::ScaleAdd { acc: tb.l, factor: tb.alpha, add: Some(tb.lg) });
                    self.vector(t, VectorKind::ScaleAccumulate, sr * dv, VecOp::ScaleAdd { acc: tb.o, factor: tb.alpha, add: None });
                    self.b.push(t, StepKind::MatMul { job, a: tb.s, b: tb.v[p], b_transposed: false, c: tb.o, accumulate: true }, &[]);
                }
            }
        }
        loads
    }

    fn finish(&mut self, origin: TileCoord, slot: &Slot, u: &Unit) {
        let (sr, dv, dtype) = (self.lay.sr, self.shape.dv, self.dtype as usize);
        for y in 0..self.lay.gy {
            self.row_reduce(origin, y, &slot.bufs, |b| b.o, |b| b.o, ReduceOp::Sum, sr * dv * dtype);
            let rx = y % self.lay.gx;
            let t = self.tile(origin, rx, y);
            let tb = slot.bufs[self.idx(rx, y)];
            self.vector(t, VectorKind::ScaleAccumulate, sr * dv, VecOp::DivRows { acc: tb.o, denom: tb.l });
            let (lo, hi) = self.tile_rows(u, y);
            let region = TensorRegion { tensor: self.tensors[u.inst][3], row0: lo, col0: 0, rows: hi - lo, cols: dv };
            self.b.push(t, StepKind::HbmStore { src: tb.o, region }, &[]);
        }
    }
}

/// Dependency on the leader's `i`-th fetch, wrapping when the leader issued
/// fewer fetches than the follower.
fn gated(gate: &[StepId], i: usize) -> &[StepId] {
    if gate.is_empty() {
        &[]
    } else {
        std::slice::from_ref(&gate[i % gate.len()])
    }
}

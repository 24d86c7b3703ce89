//! Deterministic discrete-event execution of a [`Schedule`].

use std::cmp::Reverse;
use std::collections::{BTreeSet, BinaryHeap};

use crate::arch::{ArchConfig, Edge};
use crate::engines::{gemm_cycles, gemm_ideal_cycles, vector_cycles, Direction, HbmChannels, HbmRequest};
use crate::error::{Error, Result};
use crate::noc::{collective_time, LinkTimeline, TileCoord};
use crate::numerics::{self, Matrix};

use super::report::{Breakdown, SimReport};
use super::schedule::{Category, ReduceOp, Schedule, StepId, StepKind, VecOp};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Timing,
    Functional,
}

/// Result of [`simulate`]; `tensors` is populated in functional mode only.
#[derive(Debug, Clone)]
pub struct SimOutput {
    pub report: SimReport,
    pub tensors: Vec<Matrix>,
    /// `(start, end)` cycle of every step, indexed by step id.
    pub timeline: Vec<(u64, u64)>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Resource {
    Matrix,
    Vector,
    Dma,
    Unbound,
}

fn resource_of(kind: &StepKind) -> Resource {
    match kind {
        StepKind::MatMul { .. } => Resource::Matrix,
        StepKind::VectorOp { .. } => Resource::Vector,
        StepKind::HbmLoad { .. } | StepKind::HbmStore { .. } | StepKind::LocalCopy { .. } => Resource::Dma,
        StepKind::Multicast { .. } | StepKind::Reduce { .. } | StepKind::Barrier { .. } => Resource::Unbound,
    }
}

struct TileState {
    matrix_busy: bool,
    vector_busy: bool,
    dma_free: u32,
    ready_matrix: BTreeSet<StepId>,
    ready_vector: BTreeSet<StepId>,
    ready_dma: BTreeSet<StepId>,
}

struct Exec<'a> {
    sched: &'a Schedule,
    arch: &'a ArchConfig,
    tiles: Vec<TileState>,
    links: LinkTimeline,
    hbm: HbmChannels,
    events: BinaryHeap<Reverse<(u64, StepId)>>,
    intervals: [Vec<(u64, u64)>; 5],
    matrix_busy: Vec<u64>,
    vector_busy: Vec<u64>,
    dma_busy: Vec<u64>,
    matrix_ideal: f64,
    payload: Option<Payload>,
    retouch: Vec<usize>,
    timeline: Vec<(u64, u64)>,
}

struct Payload {
    bufs: Vec<Option<Matrix>>,
    tensors: Vec<Matrix>,
}

/// Runs `schedule` on `arch`. In functional mode `inputs` supplies one
/// matrix per declared tensor (outputs may be zero-filled placeholders).
pub fn simulate(schedule: &Schedule, arch: &ArchConfig, mode: Mode, inputs: Option<Vec<Matrix>>) -> Result<SimOutput> {
    let noc = &arch.noc;
    let ntiles = noc.tile_count();
    for (i, st) in schedule.steps.iter().enumerate() {
        if !st.tile.is_inside(noc) {
            return Err(Error::Contract(format!("step {i} on tile {} outside the mesh", st.tile)));
        }
    }
    check_l1(schedule, arch)?;

    let payload = match mode {
        Mode::Timing => None,
        Mode::Functional => {
            let tensors = inputs.ok_or_else(|| Error::Contract("functional mode needs input tensors".into()))?;
            if tensors.len() != schedule.tensors.len() {
                return Err(Error::Contract(format!(
                    "{} tensors supplied, schedule declares {}",
                    tensors.len(),
                    schedule.tensors.len()
                )));
            }
            for (t, d) in tensors.iter().zip(&schedule.tensors) {
                if t.shape() != (d.rows, d.cols) {
                    return Err(Error::Shape(format!("tensor '{}' is {:?}, expected {:?}", d.name, t.shape(), (d.rows, d.cols))));
                }
            }
            Some(Payload { bufs: vec![None; schedule.buffers.len()], tensors })
        }
    };

    let mut ex = Exec {
        sched: schedule,
        arch,
        tiles: (0..ntiles)
            .map(|_| TileState {
                matrix_busy: false,
                vector_busy: false,
                dma_free: arch.tile.dma_channels,
                ready_matrix: BTreeSet::new(),
                ready_vector: BTreeSet::new(),
                ready_dma: BTreeSet::new(),
            })
            .collect(),
        links: LinkTimeline::new(),
        hbm: HbmChannels::new(&arch.hbm),
        events: BinaryHeap::new(),
        intervals: Default::default(),
        matrix_busy: vec![0; ntiles],
        vector_busy: vec![0; ntiles],
        dma_busy: vec![0; ntiles],
        matrix_ideal: 0.0,
        payload,
        retouch: Vec::new(),
        timeline: vec![(0, 0); schedule.steps.len()],
    };
    let total = ex.run()?;
    let report = ex.report(total);
    let tensors = ex.payload.map(|p| p.tensors).unwrap_or_default();
    Ok(SimOutput { report, tensors, timeline: ex.timeline })
}

/// Fails with [`Error::L1Overflow`] when any tile's static buffer
/// allocation exceeds its L1 capacity.
pub fn check_l1(schedule: &Schedule, arch: &ArchConfig) -> Result<()> {
    let noc = &arch.noc;
    let foot = schedule.l1_footprints(noc.mesh_x, noc.tile_count());
    if let Some((ti, &f)) = foot.iter().enumerate().find(|(_, &f)| f > arch.tile.l1_capacity) {
        let tile = TileCoord::new(ti as u32 % noc.mesh_x, ti as u32 / noc.mesh_x);
        let step = schedule.steps.iter().position(|s| s.tile == tile).unwrap_or(0);
        return Err(Error::L1Overflow { step, x: tile.x, y: tile.y, footprint: f, capacity: arch.tile.l1_capacity });
    }
    Ok(())
}

impl Exec<'_> {
    fn tile_index(&self, t: TileCoord) -> usize {
        t.index(self.arch.noc.mesh_x)
    }

    fn run(&mut self) -> Result<u64> {
        let n = self.sched.steps.len();
        let mut indeg = vec![0u32; n];
        let mut succ_start = vec![0u32; n + 1];
        for st in &self.sched.steps {
            for &d in &st.deps {
                succ_start[d as usize + 1] += 1;
            }
        }
        for i in 0..n {
            succ_start[i + 1] += succ_start[i];
        }
        let mut fill = succ_start.clone();
        let mut succ = vec![0 as StepId; succ_start[n] as usize];
        for (i, st) in self.sched.steps.iter().enumerate() {
            indeg[i] = st.deps.len() as u32;
            for &d in &st.deps {
                succ[fill[d as usize] as usize] = i as StepId;
                fill[d as usize] += 1;
            }
        }

        let mut done = 0usize;
        let mut now = 0u64;
        let mut touched: Vec<usize> = Vec::new();
        for i in 0..n {
            if indeg[i] == 0 {
                self.make_ready(i as StepId, 0, &mut touched);
            }
        }
        self.dispatch(0, &mut touched);

        while let Some(Reverse((t, id))) = self.events.pop() {
            now = t;
            self.complete(id, t)?;
            done += 1;
            for &s in &succ[succ_start[id as usize] as usize..succ_start[id as usize + 1] as usize] {
                indeg[s as usize] -= 1;
                if indeg[s as usize] == 0 {
                    self.make_ready(s, t, &mut touched);
                }
            }
            // Drain every completion at this cycle before dispatching.
            if self.events.peek().is_some_and(|Reverse((nt, _))| *nt == t) {
                continue;
            }
            self.dispatch(t, &mut touched);
        }
        if done != n {
            let stuck: Vec<usize> = (0..n).filter(|&i| indeg[i] > 0).take(16).collect();
            return Err(Error::Deadlock { remaining: n - done, stuck });
        }
        Ok(now)
    }

    fn make_ready(&mut self, id: StepId, t: u64, touched: &mut Vec<usize>) {
        let st = &self.sched.steps[id as usize];
        let ti = self.tile_index(st.tile);
        match resource_of(&st.kind) {
            Resource::Matrix => {
                self.tiles[ti].ready_matrix.insert(id);
            }
            Resource::Vector => {
                self.tiles[ti].ready_vector.insert(id);
            }
            Resource::Dma => {
                self.tiles[ti].ready_dma.insert(id);
            }
            Resource::Unbound => {
                let end = self.start_unbound(id, t);
                self.events.push(Reverse((end, id)));
                return;
            }
        }
        touched.push(ti);
    }

    fn dispatch(&mut self, t: u64, touched: &mut Vec<usize>) {
        touched.append(&mut self.retouch);
        touched.sort_unstable();
        touched.dedup();
        for ti in std::mem::take(touched) {
            if !self.tiles[ti].matrix_busy {
                if let Some(id) = self.tiles[ti].ready_matrix.pop_first() {
                    self.tiles[ti].matrix_busy = true;
                    let end = self.start_bound(id, t, ti);
                    self.events.push(Reverse((end, id)));
                }
            }
            if !self.tiles[ti].vector_busy {
                if let Some(id) = self.tiles[ti].ready_vector.pop_first() {
                    self.tiles[ti].vector_busy = true;
                    let end = self.start_bound(id, t, ti);
                    self.events.push(Reverse((end, id)));
                }
            }
            while self.tiles[ti].dma_free > 0 {
                let Some(id) = self.tiles[ti].ready_dma.pop_first() else { break };
                self.tiles[ti].dma_free -= 1;
                let end = self.start_bound(id, t, ti);
                self.events.push(Reverse((end, id)));
            }
        }
    }

    fn hbm_channel(&self, tile: TileCoord) -> (usize, u64) {
        let noc = &self.arch.noc;
        let nch = self.arch.hbm.num_channels as usize;
        let (lane, hops) = match self.arch.hbm.edge {
            Edge::South => (tile.x, tile.y as u64 + 1),
            Edge::North => (tile.x, (noc.mesh_y - tile.y) as u64),
            Edge::West => (tile.y, tile.x as u64 + 1),
            Edge::East => (tile.y, (noc.mesh_x - tile.x) as u64),
        };
        (lane as usize % nch, hops)
    }

    fn start_bound(&mut self, id: StepId, t: u64, ti: usize) -> u64 {
        let st = &self.sched.steps[id as usize];
        let tile = &self.arch.tile;
        let end = match &st.kind {
            StepKind::MatMul { job, .. } => {
                let c = gemm_cycles(job, tile);
                self.matrix_busy[ti] += c;
                self.matrix_ideal += gemm_ideal_cycles(job, tile);
                t + c
            }
            StepKind::VectorOp { job, .. } => {
                let c = vector_cycles(job, tile);
                self.vector_busy[ti] += c;
                t + c
            }
            StepKind::HbmLoad { region, .. } | StepKind::HbmStore { region, .. } => {
                let size = self.sched.region_bytes(region);
                let direction = if matches!(st.kind, StepKind::HbmLoad { .. }) { Direction::Read } else { Direction::Write };
                let (channel, hops) = self.hbm_channel(st.tile);
                let travel = hops * self.arch.noc.hop_latency;
                let end = if size == 0 {
                    t + tile.dma_setup_cycles
                } else {
                    let arrival = t + tile.dma_setup_cycles + travel;
                    self.hbm.issue(&HbmRequest { channel, size, direction }, arrival) + travel
                };
                self.dma_busy[ti] += end - t;
                end
            }
            StepKind::LocalCopy { bytes, .. } => {
                let c = tile.dma_setup_cycles + bytes.div_ceil(tile.l1_bandwidth as u64);
                self.dma_busy[ti] += c;
                t + c
            }
            _ => unreachable!("unbound step dispatched to a tile resource"),
        };
        self.intervals[category_slot(st.kind.category())].push((t, end));
        self.timeline[id as usize] = (t, end);
        end
    }

    fn start_unbound(&mut self, id: StepId, t: u64) -> u64 {
        let st = &self.sched.steps[id as usize];
        let (start, end) = match &st.kind {
            StepKind::Multicast { coll, .. } | StepKind::Reduce { coll, .. } => {
                let dur = collective_time(&coll.req, &self.arch.noc, &self.arch.tile)
                    .expect("collective validated at schedule construction");
                let links = coll.links();
                let grant = self.links.reserve(&links, t, dur);
                (grant, grant + dur)
            }
            StepKind::Barrier { cycles } => (t, t + cycles),
            _ => unreachable!("bound step started as unbound"),
        };
        self.timeline[id as usize] = (start, end);
        if end > start {
            self.intervals[category_slot(st.kind.category())].push((start, end));
        }
        end
    }

    fn complete(&mut self, id: StepId, _t: u64) -> Result<()> {
        let st = &self.sched.steps[id as usize];
        let ti = self.tile_index(st.tile);
        match resource_of(&st.kind) {
            Resource::Matrix => self.tiles[ti].matrix_busy = false,
            Resource::Vector => self.tiles[ti].vector_busy = false,
            Resource::Dma => self.tiles[ti].dma_free += 1,
            Resource::Unbound => {}
        }
        if let Resource::Matrix | Resource::Vector | Resource::Dma = resource_of(&st.kind) {
            // Freed resource: let this tile dispatch again.
            self.pending_touch(ti);
        }
        if self.payload.is_some() {
            self.execute(id)?;
        }
        Ok(())
    }

    fn pending_touch(&mut self, ti: usize) {
        // Re-dispatch happens through `dispatch`, which only visits touched
        // tiles; a freed engine with queued work must be visited too.
        let has_work = {
            let s = &self.tiles[ti];
            !s.ready_matrix.is_empty() || !s.ready_vector.is_empty() || !s.ready_dma.is_empty()
        };
        if has_work {
            self.retouch.push(ti);
        }
    }

    fn execute(&mut self, id: StepId) -> Result<()> {
        let sched = self.sched;
        let st = &sched.steps[id as usize];
        let p = self.payload.as_mut().expect("functional payload");
        let get = |bufs: &Vec<Option<Matrix>>, b: u32| -> Result<Matrix> {
            bufs[b as usize].clone().ok_or_else(|| {
                let d = &sched.buffers[b as usize];
                Error::Contract(format!("step {id} reads buffer '{}' on {} before any write", d.name, d.tile))
            })
        };
        match &st.kind {
            StepKind::HbmLoad { dst, region } => {
                // Regions may be smaller than the buffer; the rest is zero padding.
                let t = &p.tensors[region.tensor as usize];
                let d = &sched.buffers[*dst as usize];
                let mut m = Matrix::zeros(d.rows, d.cols);
                m.set_block(0, 0, &t.block(region.row0, region.col0, region.rows, region.cols, 0.0));
                p.bufs[*dst as usize] = Some(m);
            }
            StepKind::HbmStore { src, region } => {
                let m = get(&p.bufs, *src)?;
                let m = m.block(0, 0, region.rows, region.cols, 0.0);
                p.tensors[region.tensor as usize].set_block(region.row0, region.col0, &m);
            }
            StepKind::Multicast { src, dsts, .. } => {
                let m = get(&p.bufs, *src)?;
                for d in dsts {
                    p.bufs[*d as usize] = Some(m.clone());
                }
            }
            StepKind::Reduce { op, srcs, dst, .. } => {
                let mut acc = get(&p.bufs, srcs[0])?;
                for s in &srcs[1..] {
                    let m = get(&p.bufs, *s)?;
                    if m.shape() != acc.shape() {
                        return Err(Error::Shape(format!("step {id}: reduce operands differ in shape")));
                    }
                    for (a, b) in acc.data_mut().iter_mut().zip(m.data()) {
                        *a = match op {
                            ReduceOp::Sum => *a + b,
                            ReduceOp::Max => a.max(*b),
                        };
                    }
                }
                p.bufs[*dst as usize] = Some(acc);
            }
            StepKind::MatMul { a, b, b_transposed, c, accumulate, .. } => {
                let am = get(&p.bufs, *a)?;
                let bm = get(&p.bufs, *b)?;
                let decl = &sched.buffers[*c as usize];
                let mut cm = if *accumulate {
                    get(&p.bufs, *c)?
                } else {
                    Matrix::zeros(decl.rows, decl.cols)
                };
                numerics::matmul_into(&am, &bm, *b_transposed, &mut cm, *accumulate)
                    .map_err(|e| Error::Shape(format!("step {id}: {e}")))?;
                p.bufs[*c as usize] = Some(cm);
            }
            StepKind::VectorOp { op, .. } => exec_vec(op, &mut p.bufs, sched, id)?,
            StepKind::LocalCopy { src, dst, .. } => {
                let m = get(&p.bufs, *src)?;
                p.bufs[*dst as usize] = Some(m);
            }
            StepKind::Barrier { .. } => {}
        }
        Ok(())
    }

    fn report(&self, total: u64) -> SimReport {
        let breakdown = attribute(&self.intervals, total);
        let ntiles = self.arch.noc.tile_count() as f64;
        let busy: u64 = self.matrix_busy.iter().sum();
        let peak_bytes = self.arch.hbm.num_channels as f64 * self.arch.hbm.channel_bytes_per_cycle;
        let bytes = (self.hbm.bytes_read + self.hbm.bytes_written) as f64;
        SimReport {
            total_cycles: total,
            breakdown,
            matrix_busy: self.matrix_busy.clone(),
            vector_busy: self.vector_busy.clone(),
            dma_busy: self.dma_busy.clone(),
            hbm_bytes_read: self.hbm.bytes_read,
            hbm_bytes_written: self.hbm.bytes_written,
            matrix_utilization: if total == 0 { 0.0 } else { (self.matrix_ideal / (ntiles * total as f64)).min(1.0) },
            matrix_active_utilization: if busy == 0 { 0.0 } else { (self.matrix_ideal / busy as f64).min(1.0) },
            avg_hbm_bw_utilization: if total == 0 { 0.0 } else { (bytes / (peak_bytes * total as f64)).min(1.0) },
            steps: self.sched.steps.len(),
        }
    }
}

fn category_slot(c: Category) -> usize {
    match c {
        Category::Matrix => 0,
        Category::Vector => 1,
        Category::Comm => 2,
        Category::Hbm => 3,
        Category::Sync => 4,
    }
}

/// Charges every cycle of `[0, total)` to the highest-priority category
/// active anywhere on the chip; cycles with nothing active count as sync.
fn attribute(intervals: &[Vec<(u64, u64)>; 5], total: u64) -> Breakdown {
    // (time, +1/-1, slot) sweep.
    let mut edges: Vec<(u64, i8, usize)> = Vec::new();
    for (slot, v) in intervals.iter().enumerate() {
        for &(s, e) in v {
            if e > s {
                edges.push((s, 1, slot));
                edges.push((e, -1, slot));
            }
        }
    }
    edges.sort_unstable();
    let mut active = [0i64; 5];
    let mut charged = [0u64; 5];
    let mut last = 0u64;
    let mut i = 0;
    while i < edges.len() {
        let t = edges[i].0;
        if t > last {
            let slot = (0..5).find(|&s| active[s] > 0).unwrap_or(4);
            charged[slot] += t - last;
            last = t;
        }
        while i < edges.len() && edges[i].0 == t {
            active[edges[i].2] += edges[i].1 as i64;
            i += 1;
        }
    }
    if total > last {
        charged[4] += total - last;
    }
    Breakdown {
        matrix_engine: charged[0],
        vector_softmax: charged[1],
        inter_tile_comm: charged[2],
        hbm_access: charged[3],
        sync_overhead: charged[4],
    }
}

fn exec_vec(op: &VecOp, bufs: &mut [Option<Matrix>], sched: &Schedule, id: StepId) -> Result<()> {
    let get = |bufs: &[Option<Matrix>], b: u32| -> Result<Matrix> {
        bufs[b as usize].clone().ok_or_else(|| {
            let d = &sched.buffers[b as usize];
            Error::Contract(format!("step {id} reads buffer '{}' on {} before any write", d.name, d.tile))
        })
    };
    let decl = |b: u32| &sched.buffers[b as usize];
    match *op {
        VecOp::RowMax { src, dst } | VecOp::RowSum { src, dst } => {
            let m = get(bufs, src)?;
            let is_max = matches!(op, VecOp::RowMax { .. });
            let v: Vec<f64> = (0..m.rows())
                .map(|r| {
                    let row = m.row(r);
                    if is_max {
                        row.iter().cloned().fold(f64::NEG_INFINITY, f64::max)
                    } else {
                        row.iter().sum()
                    }
                })
                .collect();
            bufs[dst as usize] = Some(Matrix::column(&v));
        }
        VecOp::Max { a, b, dst } | VecOp::Add { a, b, dst } => {
            let mut x = get(bufs, a)?;
            let y = get(bufs, b)?;
            if x.shape() != y.shape() {
                return Err(Error::Shape(format!("step {id}: elementwise operands differ")));
            }
            let is_max = matches!(op, VecOp::Max { .. });
            for (p, q) in x.data_mut().iter_mut().zip(y.data()) {
                *p = if is_max { p.max(*q) } else { *p + q };
            }
            bufs[dst as usize] = Some(x);
        }
        VecOp::ExpSub { src, rowvec, dst } => {
            let mut s = get(bufs, src)?;
            let m = get(bufs, rowvec)?;
            for r in 0..s.rows() {
                let mr = m.data()[r];
                for v in s.row_mut(r) {
                    *v = if mr == f64::NEG_INFINITY { 0.0 } else { numerics::exp_shifted(*v, mr) };
                }
            }
            bufs[dst as usize] = Some(s);
        }
        VecOp::Rescale { m_old, m_new, dst } => {
            let a = get(bufs, m_old)?;
            let b = get(bufs, m_new)?;
            let v: Vec<f64> = a.data().iter().zip(b.data()).map(|(&o, &n)| numerics::rescale_factor(o, n)).collect();
            bufs[dst as usize] = Some(Matrix::column(&v));
        }
        VecOp::ScaleAdd { acc, factor, add } => {
            let mut x = get(bufs, acc)?;
            let f = get(bufs, factor)?;
            let addm = add.map(|b| get(bufs, b)).transpose()?;
            for r in 0..x.rows() {
                let fr = f.data()[r];
                let row = x.row_mut(r);
                row.iter_mut().for_each(|v| *v *= fr);
                if let Some(a) = &addm {
                    for (v, w) in row.iter_mut().zip(a.row(r)) {
                        *v += w;
                    }
                }
            }
            bufs[acc as usize] = Some(x);
        }
        VecOp::DivRows { acc, denom } => {
            let mut x = get(bufs, acc)?;
            let l = get(bufs, denom)?;
            for r in 0..x.rows() {
                let lr = l.data()[r];
                x.row_mut(r).iter_mut().for_each(|v| *v = if lr > 0.0 { *v / lr } else { 0.0 });
            }
            bufs[acc as usize] = Some(x);
        }
        VecOp::Mask { buf, row0, col0, q_period, causal_offset, kv_len } => {
            let mut x = get(bufs, buf)?;
            for r in 0..x.rows() {
                let limit = causal_offset.map_or(usize::MAX, |o| (row0 + r) % q_period.max(1) + o);
                for (c, v) in x.row_mut(r).iter_mut().enumerate() {
                    let key = col0 + c;
                    if key >= kv_len || key > limit {
                        *v = f64::NEG_INFINITY;
                    }
                }
            }
            bufs[buf as usize] = Some(x);
        }
        VecOp::Fill { dst, value } => {
            let d = decl(dst);
            bufs[dst as usize] = Some(Matrix::filled(d.rows, d.cols, value));
        }
        VecOp::Copy { src, dst } => {
            let m = get(bufs, src)?;
            bufs[dst as usize] = Some(m);
        }
        VecOp::Opaque => {}
    }
    Ok(())
}

//! Tile programs: typed steps over named L1 buffers, with dependency edges.

use std::collections::VecDeque;

use crate::arch::{ArchConfig, ValidationResult};
use crate::engines::{GemmJob, VectorJob};
use crate::noc::{segment_links, Axis, CollectiveRequest, TileCoord};

pub type StepId = u32;
pub type BufId = u32;
pub type TensorId = u32;

/// An L1 buffer statically allocated on one tile.
#[derive(Debug, Clone, PartialEq)]
pub struct BufferDecl {
    pub tile: TileCoord,
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    pub bytes: u64,
}

/// A tensor resident in HBM.
#[derive(Debug, Clone, PartialEq)]
pub struct TensorDecl {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    pub is_output: bool,
}

/// Rectangular window of an HBM tensor. Cells past the tensor edge are
/// padding: loads read zeros, stores drop them.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TensorRegion {
    pub tensor: TensorId,
    pub row0: usize,
    pub col0: usize,
    pub rows: usize,
    pub cols: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReduceOp {
    Sum,
    Max,
}

/// Functional semantics of a vector-engine step. Row vectors are `n × 1`
/// buffers; every operand lives on the step's tile.
#[derive(Debug, Clone, PartialEq)]
pub enum VecOp {
    /// `dst[r] = max_c src[r, c]`
    RowMax { src: BufId, dst: BufId },
    /// `dst[r] = Σ_c src[r, c]`
    RowSum { src: BufId, dst: BufId },
    /// Elementwise `dst = max(a, b)`.
    Max { a: BufId, b: BufId, dst: BufId },
    /// Elementwise `dst = a + b`.
    Add { a: BufId, b: BufId, dst: BufId },
    /// `dst[r, c] = exp(src[r, c] - rowvec[r])`, masked entries give 0.
    ExpSub { src: BufId, rowvec: BufId, dst: BufId },
    /// `dst[r] = exp(m_old[r] - m_new[r])`, or 0 before the first block.
    Rescale { m_old: BufId, m_new: BufId, dst: BufId },
    /// `acc[r, c] = factor[r] · acc[r, c] (+ add[r, c])`.
    ScaleAdd { acc: BufId, factor: BufId, add: Option<BufId> },
    /// `acc[r, c] /= denom[r]` (rows with zero denominator become 0).
    DivRows { acc: BufId, denom: BufId },
    /// Sets cell `(r, c)` to `-inf` when key `col0 + c` is at or past
    /// `kv_len`, or (with `causal_offset`) past `(row0 + r) % q_period + offset`.
    Mask { buf: BufId, row0: usize, col0: usize, q_period: usize, causal_offset: Option<usize>, kv_len: usize },
    Fill { dst: BufId, value: f64 },
    Copy { src: BufId, dst: BufId },
    /// Timing-only kernel with no tracked payload.
    Opaque,
}

impl VecOp {
    fn reads(&self, out: &mut Vec<BufId>) {
        match *self {
            VecOp::RowMax { src, .. } | VecOp::RowSum { src, .. } | VecOp::Copy { src, .. } => out.push(src),
            VecOp::Max { a, b, .. } | VecOp::Add { a, b, .. } => out.extend([a, b]),
            VecOp::ExpSub { src, rowvec, .. } => out.extend([src, rowvec]),
            VecOp::Rescale { m_old, m_new, .. } => out.extend([m_old, m_new]),
            VecOp::ScaleAdd { acc, factor, add } => {
                out.extend([acc, factor]);
                out.extend(add);
            }
            VecOp::DivRows { acc, denom } => out.extend([acc, denom]),
            VecOp::Mask { buf, .. } => out.push(buf),
            VecOp::Fill { .. } | VecOp::Opaque => {}
        }
    }

    fn writes(&self, out: &mut Vec<BufId>) {
        match *self {
            VecOp::RowMax { dst, .. }
            | VecOp::RowSum { dst, .. }
            | VecOp::Max { dst, .. }
            | VecOp::Add { dst, .. }
            | VecOp::ExpSub { dst, .. }
            | VecOp::Rescale { dst, .. }
            | VecOp::Fill { dst, .. }
            | VecOp::Copy { dst, .. } => out.push(dst),
            VecOp::ScaleAdd { acc, .. } | VecOp::DivRows { acc, .. } => out.push(acc),
            VecOp::Mask { buf, .. } => out.push(buf),
            VecOp::Opaque => {}
        }
    }
}

/// Row or column collective over `req.group_extent` tiles starting at `origin`.
#[derive(Debug, Clone, PartialEq)]
pub struct Collective {
    pub req: CollectiveRequest,
    pub origin: TileCoord,
}

impl Collective {
    pub fn tiles(&self) -> impl Iterator<Item = TileCoord> + '_ {
        (0..self.req.group_extent).map(move |i| match self.req.axis {
            Axis::Row => TileCoord::new(self.origin.x + i, self.origin.y),
            Axis::Column => TileCoord::new(self.origin.x, self.origin.y + i),
        })
    }

    pub fn links(&self) -> Vec<crate::noc::Link> {
        segment_links(self.origin, self.req.axis, self.req.group_extent)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum StepKind {
    HbmLoad { dst: BufId, region: TensorRegion },
    HbmStore { src: BufId, region: TensorRegion },
    /// Copies `src` (on the root) into every buffer of `dsts`.
    Multicast { coll: Collective, src: BufId, dsts: Vec<BufId> },
    /// Combines all `srcs` elementwise into `dst` (on the root).
    Reduce { coll: Collective, op: ReduceOp, srcs: Vec<BufId>, dst: BufId },
    /// `c (+)= a · op(b)`.
    MatMul { job: GemmJob, a: BufId, b: BufId, b_transposed: bool, c: BufId, accumulate: bool },
    VectorOp { job: VectorJob, op: VecOp },
    Barrier { cycles: u64 },
    LocalCopy { src: BufId, dst: BufId, bytes: u64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Category {
    Matrix,
    Vector,
    Comm,
    Hbm,
    Sync,
}

impl Category {
    pub const PRIORITY: [Category; 5] =
        [Category::Matrix, Category::Vector, Category::Comm, Category::Hbm, Category::Sync];
}

impl StepKind {
    pub fn category(&self) -> Category {
        match self {
            StepKind::HbmLoad { .. } | StepKind::HbmStore { .. } => Category::Hbm,
            StepKind::Multicast { .. } | StepKind::Reduce { .. } | StepKind::LocalCopy { .. } => Category::Comm,
            StepKind::MatMul { .. } => Category::Matrix,
            StepKind::VectorOp { .. } => Category::Vector,
            StepKind::Barrier { .. } => Category::Sync,
        }
    }

    pub fn reads(&self) -> Vec<BufId> {
        let mut v = Vec::new();
        match self {
            StepKind::HbmLoad { .. } | StepKind::Barrier { .. } => {}
            StepKind::HbmStore { src, .. } | StepKind::Multicast { src, .. } | StepKind::LocalCopy { src, .. } => {
                v.push(*src)
            }
            StepKind::Reduce { srcs, .. } => v.extend(srcs),
            StepKind::MatMul { a, b, c, accumulate, .. } => {
                v.extend([*a, *b]);
                if *accumulate {
                    v.push(*c);
                }
            }
            StepKind::VectorOp { op, .. } => op.reads(&mut v),
        }
        v
    }

    pub fn writes(&self) -> Vec<BufId> {
        let mut v = Vec::new();
        match self {
            StepKind::HbmLoad { dst, .. } | StepKind::Reduce { dst, .. } | StepKind::LocalCopy { dst, .. } => {
                v.push(*dst)
            }
            StepKind::Multicast { dsts, .. } => v.extend(dsts),
            StepKind::MatMul { c, .. } => v.push(*c),
            StepKind::VectorOp { op, .. } => op.writes(&mut v),
            StepKind::HbmStore { .. } | StepKind::Barrier { .. } => {}
        }
        v
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Step {
    pub tile: TileCoord,
    pub kind: StepKind,
    pub deps: Vec<StepId>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Schedule {
    pub steps: Vec<Step>,
    pub buffers: Vec<BufferDecl>,
    pub tensors: Vec<TensorDecl>,
    /// `(G_x, G_y)` of the tile groups this schedule uses.
    pub group_shape: (u32, u32),
    pub label: String,
    pub dtype_bytes: u32,
}

impl Schedule {
    pub fn region_bytes(&self, r: &TensorRegion) -> u64 {
        (r.rows * r.cols) as u64 * self.dtype_bytes as u64
    }

    /// `(read, written)` HBM bytes declared by load/store steps.
    pub fn declared_hbm_bytes(&self) -> (u64, u64) {
        let mut rd = 0;
        let mut wr = 0;
        for s in &self.steps {
            match &s.kind {
                StepKind::HbmLoad { region, .. } => rd += self.region_bytes(region),
                StepKind::HbmStore { region, .. } => wr += self.region_bytes(region),
                _ => {}
            }
        }
        (rd, wr)
    }

    /// Static L1 allocation per tile, indexed by `TileCoord::index`.
    pub fn l1_footprints(&self, mesh_x: u32, tiles: usize) -> Vec<u64> {
        let mut f = vec![0u64; tiles];
        for b in &self.buffers {
            let i = b.tile.index(mesh_x);
            if i < tiles {
                f[i] += b.bytes;
            }
        }
        f
    }

    pub fn tensor_id(&self, name: &str) -> Option<TensorId> {
        self.tensors.iter().position(|t| t.name == name).map(|i| i as TensorId)
    }

    /// Total matrix-engine FLOPs.
    pub fn matrix_flops(&self) -> u64 {
        self.steps
            .iter()
            .map(|s| match &s.kind {
                StepKind::MatMul { job, .. } => job.flops(),
                _ => 0,
            })
            .sum()
    }
}

/// Builds a [`Schedule`], inserting RAW/WAR/WAW dependencies automatically
/// from each step's buffer reads and writes.
#[derive(Debug, Default)]
pub struct ScheduleBuilder {
    sched: Schedule,
    last_writer: Vec<Option<StepId>>,
    readers: Vec<Vec<StepId>>,
}

impl ScheduleBuilder {
    pub fn new(label: impl Into<String>, dtype_bytes: u32) -> Self {
        ScheduleBuilder {
            sched: Schedule { label: label.into(), dtype_bytes, group_shape: (1, 1), ..Default::default() },
            ..Default::default()
        }
    }

    pub fn set_group_shape(&mut self, gx: u32, gy: u32) {
        self.sched.group_shape = (gx, gy);
    }

    pub fn dtype_bytes(&self) -> u32 {
        self.sched.dtype_bytes
    }

    pub fn tensor(&mut self, name: impl Into<String>, rows: usize, cols: usize, is_output: bool) -> TensorId {
        self.sched.tensors.push(TensorDecl { name: name.into(), rows, cols, is_output });
        (self.sched.tensors.len() - 1) as TensorId
    }

    pub fn buffer(&mut self, tile: TileCoord, name: impl Into<String>, rows: usize, cols: usize) -> BufId {
        let bytes = (rows * cols) as u64 * self.sched.dtype_bytes as u64;
        self.sched.buffers.push(BufferDecl { tile, name: name.into(), rows, cols, bytes });
        self.last_writer.push(None);
        self.readers.push(Vec::new());
        (self.sched.buffers.len() - 1) as BufId
    }

    pub fn buffer_decl(&self, b: BufId) -> &BufferDecl {
        &self.sched.buffers[b as usize]
    }

    pub fn len(&self) -> usize {
        self.sched.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sched.steps.is_empty()
    }

    /// Appends a step; `extra` adds ordering edges beyond data hazards.
    pub fn push(&mut self, tile: TileCoord, kind: StepKind, extra: &[StepId]) -> StepId {
        let id = self.sched.steps.len() as StepId;
        let mut deps: Vec<StepId> = extra.to_vec();
        let reads = kind.reads();
        let writes = kind.writes();
        for &b in &reads {
            if let Some(w) = self.last_writer[b as usize] {
                deps.push(w);
            }
        }
        for &b in &writes {
            if let Some(w) = self.last_writer[b as usize] {
                deps.push(w);
            }
            deps.extend(self.readers[b as usize].iter().copied().filter(|&r| r != id));
        }
        deps.sort_unstable();
        deps.dedup();
        for &b in &reads {
            self.readers[b as usize].push(id);
        }
        for &b in &writes {
            self.last_writer[b as usize] = Some(id);
            self.readers[b as usize].clear();
        }
        self.sched.steps.push(Step { tile, kind, deps });
        id
    }

    pub fn finish(self) -> Schedule {
        self.sched
    }
}

/// Static checks: acyclicity, def-before-use, L1 capacity and mesh bounds.
pub fn check_schedule(s: &Schedule, arch: &ArchConfig) -> ValidationResult {
    let mut r = ValidationResult::default();
    let n = s.steps.len();
    let noc = &arch.noc;

    if s.group_shape.0 > noc.mesh_x || s.group_shape.1 > noc.mesh_y || s.group_shape.0 == 0 || s.group_shape.1 == 0 {
        r.push(format!("group {:?} does not fit the {}x{} mesh", s.group_shape, noc.mesh_x, noc.mesh_y));
    }
    for (i, st) in s.steps.iter().enumerate() {
        if !st.tile.is_inside(noc) {
            r.push(format!("step {i} on tile {} outside the mesh", st.tile));
        }
        if st.deps.iter().any(|&d| d as usize >= n) {
            r.push(format!("step {i} depends on a missing step"));
        }
        if let StepKind::Multicast { coll, .. } | StepKind::Reduce { coll, .. } = &st.kind {
            if coll.tiles().any(|t| !t.is_inside(noc)) {
                r.push(format!("step {i} collective leaves the mesh"));
            }
        }
        for b in st.kind.reads().into_iter().chain(st.kind.writes()) {
            if b as usize >= s.buffers.len() {
                r.push(format!("step {i} uses undeclared buffer {b}"));
            }
        }
    }
    if !r.is_ok() {
        return r;
    }

    // Kahn's algorithm.
    let mut indeg = vec![0u32; n];
    let mut succ: Vec<Vec<StepId>> = vec![Vec::new(); n];
    for (i, st) in s.steps.iter().enumerate() {
        for &d in &st.deps {
            indeg[i] += 1;
            succ[d as usize].push(i as StepId);
        }
    }
    let mut queue: VecDeque<usize> = (0..n).filter(|&i| indeg[i] == 0).collect();
    let mut seen = 0;
    while let Some(i) = queue.pop_front() {
        seen += 1;
        for &j in &succ[i] {
            indeg[j as usize] -= 1;
            if indeg[j as usize] == 0 {
                queue.push_back(j as usize);
            }
        }
    }
    if seen != n {
        let cyc: Vec<usize> = (0..n).filter(|&i| indeg[i] > 0).take(8).collect();
        r.push(format!("dependency cycle through steps {cyc:?}"));
        return r;
    }

    // Every read must have a writer among its ancestors.
    let writers_of = |i: usize, b: BufId| s.steps[i].kind.writes().contains(&b);
    for (i, st) in s.steps.iter().enumerate() {
        for b in st.kind.reads() {
            if st.deps.iter().any(|&d| writers_of(d as usize, b)) {
                continue;
            }
            let mut stack: Vec<usize> = st.deps.iter().map(|&d| d as usize).collect();
            let mut visited = std::collections::HashSet::new();
            let mut found = false;
            while let Some(k) = stack.pop() {
                if !visited.insert(k) {
                    continue;
                }
                if writers_of(k, b) {
                    found = true;
                    break;
                }
                stack.extend(s.steps[k].deps.iter().map(|&d| d as usize));
            }
            if !found {
                let decl = &s.buffers[b as usize];
                r.push(format!("step {i} reads buffer '{}' on {} before any write", decl.name, decl.tile));
            }
        }
    }

    let tiles = noc.tile_count();
    for (i, f) in s.l1_footprints(noc.mesh_x, tiles).into_iter().enumerate() {
        if f > arch.tile.l1_capacity {
            r.push(format!(
                "tile ({},{}) L1 footprint {f} B exceeds capacity {} B",
                i as u32 % noc.mesh_x,
                i as u32 / noc.mesh_x,
                arch.tile.l1_capacity
            ));
        }
    }
    r
}

//! Per-tile timing models: matrix engine, vector engine and HBM channels.

use serde::{Deserialize, Serialize};

use crate::arch::{HbmSpec, TileSpec};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct GemmJob {
    pub m: u64,
    pub n: u64,
    pub k: u64,
    pub dtype_bytes: u32,
}

impl GemmJob {
    pub fn new(m: u64, n: u64, k: u64, dtype_bytes: u32) -> Self {
        GemmJob { m, n, k, dtype_bytes }
    }

    pub fn flops(&self) -> u64 {
        2 * self.m * self.n * self.k
    }
}

/// `ceil(m/rows) · ceil(n/cols) · k + setup`.
pub fn gemm_cycles(job: &GemmJob, tile: &TileSpec) -> u64 {
    if job.m == 0 || job.n == 0 || job.k == 0 {
        return 0;
    }
    job.m.div_ceil(tile.matrix_ce_rows as u64) * job.n.div_ceil(tile.matrix_ce_cols as u64) * job.k
        + tile.matrix_setup_cycles
}

/// Cycles the job would take at full CE-array occupancy with no setup.
pub fn gemm_ideal_cycles(job: &GemmJob, tile: &TileSpec) -> f64 {
    job.flops() as f64 / tile.matrix_flop_per_cycle() as f64
}

pub fn gemm_utilization(job: &GemmJob, tile: &TileSpec) -> f64 {
    let actual = gemm_cycles(job, tile);
    if actual == 0 {
        return 0.0;
    }
    gemm_ideal_cycles(job, tile) / actual as f64
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VectorKind {
    RowMax,
    RowSum,
    Exp,
    ScaleAccumulate,
    Add,
    Rope,
    RmsNorm,
}

impl VectorKind {
    pub fn flops_per_element(self) -> u64 {
        match self {
            VectorKind::RowMax | VectorKind::RowSum | VectorKind::Add | VectorKind::Exp => 1,
            VectorKind::ScaleAccumulate => 2,
            VectorKind::Rope => 4,
            VectorKind::RmsNorm => 3,
        }
    }

    /// L1 traffic per element in half-element units (operand reads plus
    /// result writes; row reductions write one value per row pair).
    fn l1_half_accesses(self) -> u64 {
        match self {
            VectorKind::RowMax | VectorKind::RowSum => 3,
            VectorKind::Exp | VectorKind::Rope | VectorKind::RmsNorm => 4,
            VectorKind::ScaleAccumulate | VectorKind::Add => 6,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct VectorJob {
    pub kind: VectorKind,
    pub elements: u64,
    pub dtype_bytes: u32,
}

impl VectorJob {
    pub fn new(kind: VectorKind, elements: u64, dtype_bytes: u32) -> Self {
        VectorJob { kind, elements, dtype_bytes }
    }

    pub fn flops(&self) -> u64 {
        self.elements * self.kind.flops_per_element()
    }

    pub fn l1_bytes(&self) -> u64 {
        (self.elements * self.dtype_bytes as u64 * self.kind.l1_half_accesses()).div_ceil(2)
    }
}

/// Compute-bound or L1-bound, whichever is slower.
pub fn vector_cycles(job: &VectorJob, tile: &TileSpec) -> u64 {
    let compute = job.flops().div_ceil(tile.vector_flop_per_cycle as u64);
    let memory = job.l1_bytes().div_ceil(tile.l1_bandwidth as u64);
    compute.max(memory)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Direction {
    Read,
    Write,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct HbmRequest {
    pub channel: usize,
    pub size: u64,
    pub direction: Direction,
}

pub fn hbm_service_cycles(size: u64, hbm: &HbmSpec) -> u64 {
    (size as f64 / hbm.channel_bytes_per_cycle).ceil() as u64
}

/// FIFO-per-channel HBM with a flat access latency. Requests are presented
/// in non-decreasing arrival order.
#[derive(Debug, Clone)]
pub struct HbmChannels {
    spec: HbmSpec,
    free_at: Vec<u64>,
    pub bytes_read: u64,
    pub bytes_written: u64,
    pub busy_cycles: u64,
}

impl HbmChannels {
    pub fn new(spec: &HbmSpec) -> Self {
        HbmChannels {
            spec: spec.clone(),
            free_at: vec![0; spec.num_channels as usize],
            bytes_read: 0,
            bytes_written: 0,
            busy_cycles: 0,
        }
    }

    /// Serves `req` arriving at `arrival`; returns its completion cycle.
    pub fn issue(&mut self, req: &HbmRequest, arrival: u64) -> u64 {
        assert!(req.size > 0, "zero-size HBM request");
        let service = hbm_service_cycles(req.size, &self.spec);
        let ch = req.channel % self.free_at.len();
        let end = self.free_at[ch].max(arrival) + service;
        self.free_at[ch] = end;
        self.busy_cycles += service;
        match req.direction {
            Direction::Read => self.bytes_read += req.size,
            Direction::Write => self.bytes_written += req.size,
        }
        end + self.spec.access_latency
    }
}

/// Completion cycle of every request when all arrive at cycle 0, in order.
pub fn hbm_service(reqs: &[HbmRequest], hbm: &HbmSpec) -> Vec<u64> {
    let mut ch = HbmChannels::new(hbm);
    reqs.iter().map(|r| ch.issue(r, 0)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::arch::ArchConfig;

    fn tile(setup: u64) -> TileSpec {
        let mut t = ArchConfig::reference().tile;
        t.matrix_setup_cycles = setup;
        t
    }

    #[test]
    fn gemm_128_cube() {
        let t = tile(85);
        let j = GemmJob::new(128, 128, 128, 2);
        assert_eq!(gemm_cycles(&j, &t), 4181);
        assert!((gemm_utilization(&j, &t) - 4096.0 / 4181.0).abs() < 1e-12);
        assert!(gemm_utilization(&j, &t) > 0.979);
    }

    #[test]
    fn gemm_single_pass_and_rounding() {
        let t = tile(0);
        assert_eq!(gemm_cycles(&GemmJob::new(32, 16, 1, 2), &t), 1);
        let full = GemmJob::new(32, 16, 128, 2);
        let half = GemmJob::new(16, 16, 128, 2);
        assert_eq!(gemm_cycles(&full, &t), gemm_cycles(&half, &t));
        assert!((gemm_utilization(&half, &t) - 0.5 * gemm_utilization(&full, &t)).abs() < 1e-12);
    }

    #[test]
    fn vector_costs() {
        let t = ArchConfig::reference().tile;
        assert_eq!(vector_cycles(&VectorJob::new(VectorKind::Exp, 0, 2), &t), 0);
        let rs = VectorJob::new(VectorKind::RowSum, 16384, 2);
        assert_eq!(rs.l1_bytes().div_ceil(512), 96);
        assert_eq!(vector_cycles(&rs, &t), 128);
        assert_eq!(vector_cycles(&VectorJob::new(VectorKind::ScaleAccumulate, 16384, 2), &t), 256);
    }

    #[test]
    fn hbm_fifo() {
        let mut h = ArchConfig::reference().hbm;
        h.channel_bytes_per_cycle = 64.0;
        let r = HbmRequest { channel: 0, size: 64 << 10, direction: Direction::Read };
        assert_eq!(hbm_service(&[r], &h), vec![1224]);
        let both = hbm_service(&[r, r], &h);
        assert_eq!(both[1] - both[0], 1024);
        let other = HbmRequest { channel: 1, ..r };
        assert_eq!(hbm_service(&[r, other], &h), vec![1224, 1224]);
    }

    #[test]
    fn hbm_counts_bytes() {
        let h = ArchConfig::reference().hbm;
        let mut ch = HbmChannels::new(&h);
        ch.issue(&HbmRequest { channel: 3, size: 100, direction: Direction::Read }, 0);
        ch.issue(&HbmRequest { channel: 3, size: 50, direction: Direction::Write }, 0);
        assert_eq!((ch.bytes_read, ch.bytes_written), (100, 50));
    }
}

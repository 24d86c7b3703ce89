use serde::{Deserialize, Serialize};

/// Exposed cycles per category. The five fields sum to the total runtime.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Breakdown {
    pub hbm_access: u64,
    pub inter_tile_comm: u64,
    pub matrix_engine: u64,
    pub vector_softmax: u64,
    pub sync_overhead: u64,
}

impl Breakdown {
    pub fn sum(&self) -> u64 {
        self.hbm_access + self.inter_tile_comm + self.matrix_engine + self.vector_softmax + self.sync_overhead
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimReport {
    pub total_cycles: u64,
    pub breakdown: Breakdown,
    pub matrix_busy: Vec<u64>,
    pub vector_busy: Vec<u64>,
    pub dma_busy: Vec<u64>,
    pub hbm_bytes_read: u64,
    pub hbm_bytes_written: u64,
    /// Useful matrix work over `tiles × total_cycles`.
    pub matrix_utilization: f64,
    /// Useful matrix work over the cycles matrix engines were busy.
    pub matrix_active_utilization: f64,
    pub avg_hbm_bw_utilization: f64,
    pub steps: usize,
}

impl SimReport {
    pub fn runtime_seconds(&self, frequency_hz: f64) -> f64 {
        self.total_cycles as f64 / frequency_hz
    }

    /// Flat `(name, value)` record in a fixed column order.
    pub fn fields(&self) -> Vec<(&'static str, String)> {
        let b = &self.breakdown;
        vec![
            ("total_cycles", self.total_cycles.to_string()),
            ("hbm_access", b.hbm_access.to_string()),
            ("inter_tile_comm", b.inter_tile_comm.to_string()),
            ("matrix_engine", b.matrix_engine.to_string()),
            ("vector_softmax", b.vector_softmax.to_string()),
            ("sync_overhead", b.sync_overhead.to_string()),
            ("hbm_bytes_read", self.hbm_bytes_read.to_string()),
            ("hbm_bytes_written", self.hbm_bytes_written.to_string()),
            ("matrix_utilization", format!("{:.6}", self.matrix_utilization)),
            ("matrix_active_utilization", format!("{:.6}", self.matrix_active_utilization)),
            ("avg_hbm_bw_utilization", format!("{:.6}", self.avg_hbm_bw_utilization)),
        ]
    }
}

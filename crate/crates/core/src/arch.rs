//! Accelerator configuration and derived peak quantities.
//!
//! An [`ArchConfig`] describes a 2D mesh of identical tiles, each with a
//! matrix engine, a vector engine, DMA channels and an L1 scratchpad, plus
//! HBM channels attached to one edge of the mesh.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Minimum L1 scratchpad size accepted by [`validate`].
pub const MIN_L1_CAPACITY: u64 = 64 * 1024;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TileSpec {
    /// Rows of the matrix-engine compute-element array.
    pub matrix_ce_rows: u32,
    /// Columns of the matrix-engine compute-element array.
    pub matrix_ce_cols: u32,
    /// Fixed cost paid by every matrix-engine job (cycles).
    pub matrix_setup_cycles: u64,
    /// Aggregate vector-engine throughput (FLOP/cycle).
    pub vector_flop_per_cycle: u32,
    /// L1 scratchpad capacity (bytes).
    pub l1_capacity: u64,
    /// L1 bandwidth seen by the vector engine (bytes/cycle).
    pub l1_bandwidth: u32,
    /// Independent DMA channels per tile.
    pub dma_channels: u32,
    /// Descriptor setup cost charged per DMA transfer (cycles).
    #[serde(default = "default_dma_setup")]
    pub dma_setup_cycles: u64,
}

fn default_dma_setup() -> u64 {
    16
}

impl TileSpec {
    /// One FMA per compute element per cycle, counted as two FLOPs.
    pub fn matrix_flop_per_cycle(&self) -> u64 {
        2 * self.matrix_ce_rows as u64 * self.matrix_ce_cols as u64
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NocSpec {
    pub mesh_x: u32,
    pub mesh_y: u32,
    pub link_bytes_per_cycle: u32,
    pub hop_latency: u64,
    pub hw_collectives_enabled: bool,
    /// Synchronization cost between consecutive software-tree steps (cycles).
    pub sync_barrier_cost: u64,
}

impl NocSpec {
    pub fn tile_count(&self) -> usize {
        self.mesh_x as usize * self.mesh_y as usize
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Edge {
    North,
    South,
    East,
    West,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HbmSpec {
    pub num_channels: u32,
    pub channel_bytes_per_cycle: f64,
    pub access_latency: u64,
    pub edge: Edge,
    /// Total HBM capacity (bytes); only used by the wafer-level estimator.
    #[serde(default)]
    pub capacity_bytes: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArchConfig {
    pub tile: TileSpec,
    pub noc: NocSpec,
    pub hbm: HbmSpec,
    pub frequency_hz: f64,
    pub dtype_bytes: u32,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct PeakSummary {
    pub peak_flops: f64,
    pub peak_hbm_bytes_per_s: f64,
    pub tile_flop_per_cycle: u64,
    pub link_bytes_per_s: f64,
}

impl PeakSummary {
    pub fn peak_tflops(&self) -> f64 {
        self.peak_flops / 1e12
    }

    pub fn peak_hbm_tb_per_s(&self) -> f64 {
        self.peak_hbm_bytes_per_s / 1e12
    }
}

/// Result of a static check. Violations are data, not failures.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ValidationResult {
    pub violations: Vec<String>,
}

impl ValidationResult {
    pub fn is_ok(&self) -> bool {
        self.violations.is_empty()
    }

    pub(crate) fn push(&mut self, msg: impl Into<String>) {
        self.violations.push(msg.into());
    }

    pub fn into_result(self) -> Result<()> {
        if self.is_ok() {
            Ok(())
        } else {
            Err(Error::InvalidConfig(self.violations.join("; ")))
        }
    }
}

pub fn validate(config: &ArchConfig) -> ValidationResult {
    let mut r = ValidationResult::default();
    let t = &config.tile;
    let n = &config.noc;
    let h = &config.hbm;
    let counts = [
        ("matrix_ce_rows", t.matrix_ce_rows),
        ("matrix_ce_cols", t.matrix_ce_cols),
        ("vector_flop_per_cycle", t.vector_flop_per_cycle),
        ("l1_bandwidth", t.l1_bandwidth),
        ("dma_channels", t.dma_channels),
        ("mesh_x", n.mesh_x),
        ("mesh_y", n.mesh_y),
        ("link_bytes_per_cycle", n.link_bytes_per_cycle),
        ("num_channels", h.num_channels),
        ("dtype_bytes", config.dtype_bytes),
    ];
    for (name, v) in counts {
        if v < 1 {
            r.push(format!("{name} ≥ 1"));
        }
    }
    if t.l1_capacity < MIN_L1_CAPACITY {
        r.push("l1_capacity ≥ 64 KiB");
    }
    if n.hop_latency < 1 {
        r.push("hop_latency ≥ 1");
    }
    if !(h.channel_bytes_per_cycle > 0.0 && h.channel_bytes_per_cycle.is_finite()) {
        r.push("channel_bytes_per_cycle > 0");
    }
    if !(config.frequency_hz > 0.0 && config.frequency_hz.is_finite()) {
        r.push("frequency_hz > 0");
    }
    r
}

pub fn derive_peaks(config: &ArchConfig) -> PeakSummary {
    let tile_flop_per_cycle = config.tile.matrix_flop_per_cycle();
    let tiles = config.noc.tile_count() as f64;
    PeakSummary {
        peak_flops: tiles * tile_flop_per_cycle as f64 * config.frequency_hz,
        peak_hbm_bytes_per_s: config.hbm.num_channels as f64
            * config.hbm.channel_bytes_per_cycle
            * config.frequency_hz,
        tile_flop_per_cycle,
        link_bytes_per_s: config.noc.link_bytes_per_cycle as f64 * config.frequency_hz,
    }
}

impl ArchConfig {
    /// The 32×32-tile FP16 reference accelerator.
    ///
    /// 32 HBM channels of 64.77 B/cycle at 965 MHz give 2.0 TB/s.
    pub fn reference() -> Self {
        ArchConfig {
            tile: TileSpec {
                matrix_ce_rows: 32,
                matrix_ce_cols: 16,
                matrix_setup_cycles: 192,
                vector_flop_per_cycle: 128,
                l1_capacity: 384 * 1024,
                l1_bandwidth: 512,
                dma_channels: 2,
                dma_setup_cycles: 16,
            },
            noc: NocSpec {
                mesh_x: 32,
                mesh_y: 32,
                link_bytes_per_cycle: 128,
                hop_latency: 1,
                hw_collectives_enabled: true,
                sync_barrier_cost: 64,
            },
            hbm: HbmSpec {
                num_channels: 32,
                channel_bytes_per_cycle: 64.77,
                access_latency: 200,
                edge: Edge::South,
                capacity_bytes: 64 << 30,
            },
            frequency_hz: 965e6,
            dtype_bytes: 2,
        }
    }

    /// FP8 variant used for the wafer-scale study: 1.9 GHz, two HBM stacks
    /// (4 TB/s, 128 GiB), one byte per element.
    pub fn reference_fp8() -> Self {
        let mut c = Self::reference();
        c.frequency_hz = 1.9e9;
        c.dtype_bytes = 1;
        // 32 column-mapped channels carrying two stacks' worth of bandwidth.
        c.hbm.channel_bytes_per_cycle = 4.0e12 / (32.0 * 1.9e9);
        c.hbm.capacity_bytes = 128 << 30;
        c
    }

    pub fn from_toml_str(s: &str) -> Result<Self> {
        let cfg: ArchConfig = toml::from_str(s).map_err(|e| Error::InvalidConfig(e.to_string()))?;
        validate(&cfg).into_result()?;
        Ok(cfg)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("arch config serializes")
    }

    pub fn cycles_to_seconds(&self, cycles: u64) -> f64 {
        cycles as f64 / self.frequency_hz
    }
}

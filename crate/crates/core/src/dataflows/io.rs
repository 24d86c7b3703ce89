//! Closed-form HBM traffic of the attention and GEMM dataflows.

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct IoModel {
    pub elements_total: u64,
    pub bytes_total: u64,
}

impl IoModel {
    pub fn from_elements(elements: u64, dtype_bytes: u64) -> Self {
        IoModel { elements_total: elements, bytes_total: elements * dtype_bytes }
    }

    /// `self / other` in elements.
    pub fn ratio(&self, other: &IoModel) -> f64 {
        self.elements_total as f64 / other.elements_total as f64
    }
}

/// FlashAttention traffic with `M`-row query blocks: Q read and O written
/// once, K and V streamed once per query block. `S` not divisible by `M`
/// is rounded up to whole blocks.
pub fn io_flash(b: u64, h: u64, d: u64, s: u64, m: u64) -> IoModel {
    io_blocked(b, h, d, s, m.max(1), 2)
}

/// FlatAttention traffic: a group of `N` tile rows shares each K/V fetch,
/// so the query block grows to `N·M` rows (clamped at `S`).
pub fn io_flat(b: u64, h: u64, d: u64, s: u64, m: u64, n: u64) -> IoModel {
    io_blocked(b, h, d, s, (m * n).max(1), 2)
}

fn io_blocked(b: u64, h: u64, d: u64, s: u64, block: u64, dtype: u64) -> IoModel {
    let bhds = b * h * d * s;
    IoModel::from_elements(2 * bhds + 2 * bhds * s.div_ceil(block), dtype)
}

/// SUMMA traffic for an `m×k · k×n` product on a `mesh_y × mesh_x` array of
/// `bm × bn` output blocks. A panels are re-read once per column wave and
/// B panels once per row wave; with a single wave each element moves once.
pub fn io_summa(m: u64, n: u64, k: u64, bm: u64, bn: u64, mesh_x: u64, mesh_y: u64) -> IoModel {
    let col_waves = n.div_ceil(bn * mesh_x);
    let row_waves = m.div_ceil(bm * mesh_y);
    IoModel::from_elements(m * k * col_waves + k * n * row_waves + m * n, 1)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn flash_examples() {
        assert_eq!(io_flash(2, 32, 128, 4096, 128).elements_total, 2_214_592_512);
        assert_eq!(io_flash(1, 1, 1, 1, 1).elements_total, 4);
        assert_eq!(io_flash(3, 5, 16, 256, 256).elements_total, 4 * 3 * 5 * 16 * 256);
    }

    #[test]
    fn flat_examples() {
        let f = io_flash(2, 32, 128, 4096, 128);
        let g = io_flat(2, 32, 128, 4096, 128, 8);
        assert_eq!(f.elements_total * 5, g.elements_total * 33);
        assert_eq!(io_flat(2, 4, 64, 1024, 128, 1), io_flash(2, 4, 64, 1024, 128));
        assert_eq!(io_flat(1, 2, 64, 1024, 128, 8).elements_total, 4 * 2 * 64 * 1024);
        assert_eq!(io_flat(1, 2, 64, 1024, 128, 32), io_flat(1, 2, 64, 1024, 128, 8));
    }

    #[test]
    fn summa_single_wave() {
        assert_eq!(io_summa(256, 256, 256, 64, 64, 4, 4).elements_total, 3 * 256 * 256);
        assert_eq!(io_summa(256, 256, 256, 32, 32, 4, 4).elements_total, 2 * 2 * 256 * 256 + 256 * 256);
    }
}

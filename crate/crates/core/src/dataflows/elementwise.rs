//! Row-parallel vector kernels (norms, RoPE, residual adds).
//!
//! Rows are dealt to tiles in contiguous runs; each tile streams its run
//! through two L1 staging buffers so the next chunk's load overlaps the
//! current chunk's vector work.

use crate::arch::ArchConfig;
use crate::engines::{VectorJob, VectorKind};
use crate::error::{Error, Result};
use crate::noc::TileCoord;
use crate::sim::{check_l1, Schedule, ScheduleBuilder, StepKind, TensorRegion, VecOp};

/// `y = op(x)` over a `rows × cols` activation, one pass through HBM.
pub fn gen_elementwise(rows: usize, cols: usize, kind: VectorKind, arch: &ArchConfig) -> Result<Schedule> {
    if rows == 0 || cols == 0 {
        return Err(Error::Contract("elementwise kernel needs rows, cols ≥ 1".into()));
    }
    let dtype = arch.dtype_bytes as usize;
    let tiles = arch.noc.tile_count();
    let per_tile = rows.div_ceil(tiles);
    let chunk = ((arch.tile.l1_capacity as usize / 4) / (cols * dtype)).clamp(1, per_tile);
    if chunk * cols * dtype * 2 > arch.tile.l1_capacity as usize {
        return Err(Error::NoTiling(format!("a {cols}-wide row does not fit in L1")));
    }

    let mut b = ScheduleBuilder::new(format!("{kind:?}/{rows}x{cols}").to_lowercase(), arch.dtype_bytes);
    let x = b.tensor("x", rows, cols, false);
    let y = b.tensor("y", rows, cols, true);
    let mx = arch.noc.mesh_x;
    for t in 0..rows.div_ceil(per_tile) {
        let tile = TileCoord::new(t as u32 % mx, t as u32 / mx);
        let bufs = [b.buffer(tile, "x", chunk, cols), b.buffer(tile, "x'", chunk, cols)];
        let (lo, hi) = (t * per_tile, ((t + 1) * per_tile).min(rows));
        for (i, r0) in (lo..hi).step_by(chunk).enumerate() {
            let n = chunk.min(hi - r0);
            let buf = bufs[i % 2];
            let load = b.push(tile, StepKind::HbmLoad { dst: buf, region: TensorRegion { tensor: x, row0: r0, col0: 0, rows: n, cols } }, &[]);
            let job = VectorJob::new(kind, (n * cols) as u64, arch.dtype_bytes);
            let op = b.push(tile, StepKind::VectorOp { job, op: VecOp::Opaque }, &[load]);
            b.push(tile, StepKind::HbmStore { src: buf, region: TensorRegion { tensor: y, row0: r0, col0: 0, rows: n, cols } }, &[op]);
        }
    }
    let s = b.finish();
    check_l1(&s, arch)?;
    Ok(s)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sim::{simulate, Mode};

    #[test]
    fn moves_each_element_once() {
        let arch = ArchConfig::reference_fp8();
        let s = gen_elementwise(512, 7168, VectorKind::RmsNorm, &arch).unwrap();
        let r = simulate(&s, &arch, Mode::Timing, None).unwrap().report;
        assert_eq!(r.hbm_bytes_read, 512 * 7168);
        assert_eq!(r.hbm_bytes_written, 512 * 7168);
        assert!(r.vector_busy.iter().sum::<u64>() > 0);
    }

    #[test]
    fn more_rows_never_finish_sooner() {
        let arch = ArchConfig::reference_fp8();
        let t = |rows| simulate(&gen_elementwise(rows, 7168, VectorKind::Add, &arch).unwrap(), &arch, Mode::Timing, None).unwrap().report.total_cycles;
        assert!(t(64) <= t(4096));
    }
}

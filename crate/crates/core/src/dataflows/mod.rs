//! Schedule generators for the attention and GEMM dataflows, plus their
//! closed-form HBM traffic.

mod attention;
mod elementwise;
mod io;
mod summa;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::arch::ArchConfig;
use crate::error::{Error, Result};
use crate::noc::Strategy;
use crate::numerics::{AttentionTensors, AttentionVariant, AttentionWorkload, Matrix};

pub use elementwise::gen_elementwise;
pub use attention::{gen_flashattention, gen_flat_decode, gen_flatattention, FlashVariant};
pub use io::{io_flash, io_flat, io_summa, IoModel};
pub use summa::{auto_block, gen_summa, SummaBlock};

#[cfg(test)]
mod tests;

/// Named attention dataflows.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Dataflow {
    Fa2,
    Fa3,
    FlatSc,
    FlatTc,
    FlatHc,
    FlatAsync,
}

impl Dataflow {
    pub const ALL: [Dataflow; 6] =
        [Dataflow::Fa2, Dataflow::Fa3, Dataflow::FlatSc, Dataflow::FlatTc, Dataflow::FlatHc, Dataflow::FlatAsync];

    pub fn name(self) -> &'static str {
        match self {
            Dataflow::Fa2 => "fa2",
            Dataflow::Fa3 => "fa3",
            Dataflow::FlatSc => "flat_sc",
            Dataflow::FlatTc => "flat_tc",
            Dataflow::FlatHc => "flat_hc",
            Dataflow::FlatAsync => "flat_async",
        }
    }

    pub fn is_flat(self) -> bool {
        !matches!(self, Dataflow::Fa2 | Dataflow::Fa3)
    }

    /// Collective strategy and async flag of a Flat dataflow.
    pub fn flat_mode(self) -> Option<(Strategy, bool)> {
        match self {
            Dataflow::FlatSc => Some((Strategy::SwSeq, false)),
            Dataflow::FlatTc => Some((Strategy::SwTree, false)),
            Dataflow::FlatHc => Some((Strategy::Hw, false)),
            Dataflow::FlatAsync => Some((Strategy::Hw, true)),
            _ => None,
        }
    }
}

impl fmt::Display for Dataflow {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Dataflow {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let key = s.to_ascii_lowercase().replace(['-', '.'], "_");
        Dataflow::ALL
            .into_iter()
            .find(|d| d.name() == key || d.name().replace('_', "") == key)
            .ok_or_else(|| Error::InvalidConfig(format!("unknown dataflow '{s}'")))
    }
}

/// Group shape and block sizes of a FlatAttention schedule.
///
/// A `gy × gx` tile group processes `block_r` query rows against `block_c`
/// keys per inner iteration; every tile owns a `slice_r × slice_c` piece.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FlatParams {
    pub gx: u32,
    pub gy: u32,
    pub block_r: usize,
    pub block_c: usize,
    pub strategy: Strategy,
    pub async_heads: bool,
}

impl FlatParams {
    pub fn new(gx: u32, gy: u32, slice_r: usize, slice_c: usize, strategy: Strategy, async_heads: bool) -> Self {
        FlatParams {
            gx,
            gy,
            block_r: slice_r * gy as usize,
            block_c: slice_c * gx as usize,
            strategy,
            async_heads,
        }
    }

    pub fn for_dataflow(d: Dataflow, gx: u32, gy: u32, slice_r: usize, slice_c: usize) -> Option<Self> {
        d.flat_mode().map(|(s, a)| FlatParams::new(gx, gy, slice_r, slice_c, s, a))
    }

    pub fn slice_r(&self) -> usize {
        self.block_r / self.gy as usize
    }

    pub fn slice_c(&self) -> usize {
        self.block_c / self.gx as usize
    }

    pub fn validate(&self, arch: &ArchConfig) -> Result<()> {
        if self.gx == 0 || self.gy == 0 || self.block_r == 0 || self.block_c == 0 {
            return Err(Error::Contract("group and block sizes must be ≥ 1".into()));
        }
        if self.block_r % self.gy as usize != 0 || self.block_c % self.gx as usize != 0 {
            return Err(Error::Contract(format!(
                "G_y={} must divide B_r={} and G_x={} must divide B_c={}",
                self.gy, self.block_r, self.gx, self.block_c
            )));
        }
        if self.gx > arch.noc.mesh_x || self.gy > arch.noc.mesh_y {
            return Err(Error::Contract(format!(
                "group {}x{} exceeds the {}x{} mesh",
                self.gx, self.gy, arch.noc.mesh_x, arch.noc.mesh_y
            )));
        }
        if self.strategy == Strategy::Hw && !arch.noc.hw_collectives_enabled && (self.gx > 1 || self.gy > 1) {
            return Err(Error::InvalidConfig("HW collectives requested but disabled in the NoC".into()));
        }
        Ok(())
    }
}

/// Rows of the effective query matrix of one K/V stream: all heads sharing
/// the stream are stacked, head-major.
pub fn effective_rows(w: &AttentionWorkload) -> usize {
    w.heads_per_kv() * w.s_q
}

/// Number of independent attention instances (one per K/V stream).
pub fn instance_count(w: &AttentionWorkload) -> usize {
    w.batch * w.kv_heads()
}

/// Whether `w` is one of the decode variants handled by [`gen_flat_decode`].
pub fn is_decode(w: &AttentionWorkload) -> bool {
    !matches!(w.variant, AttentionVariant::MhaPrefill)
}

/// HBM tensors in schedule order: `Q, K, V, O` per instance.
pub fn pack_inputs(w: &AttentionWorkload, t: &AttentionTensors) -> Result<Vec<Matrix>> {
    t.check(w)?;
    let hpk = w.heads_per_kv();
    let rows = effective_rows(w);
    let mut out = Vec::with_capacity(4 * instance_count(w));
    for b in 0..w.batch {
        for g in 0..w.kv_heads() {
            let mut q = Matrix::zeros(rows, w.qk_dim());
            for j in 0..hpk {
                q.set_block(j * w.s_q, 0, &t.q[b * w.heads + g * hpk + j]);
            }
            out.push(q);
            out.push(t.k[b * w.kv_heads() + g].clone());
            out.push(t.v[b * w.kv_heads() + g].clone());
            out.push(Matrix::zeros(rows, w.v_dim()));
        }
    }
    Ok(out)
}

/// Reassembles the `(B·S_q) × (H·v_dim)` output from simulated tensors.
pub fn unpack_output(w: &AttentionWorkload, tensors: &[Matrix]) -> Matrix {
    let hpk = w.heads_per_kv();
    let dv = w.v_dim();
    let mut out = Matrix::zeros(w.batch * w.s_q, w.heads * dv);
    for b in 0..w.batch {
        for g in 0..w.kv_heads() {
            let o = &tensors[4 * (b * w.kv_heads() + g) + 3];
            for j in 0..hpk {
                let h = g * hpk + j;
                out.set_block(b * w.s_q, h * dv, &o.block(j * w.s_q, 0, w.s_q, dv, 0.0));
            }
        }
    }
    out
}

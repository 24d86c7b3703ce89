//! Single simulation points described as data, and the functional oracle
//! suite. Nothing here touches the filesystem; callers own all I/O.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::arch::ArchConfig;
use crate::dataflows::{
    gen_flashattention, gen_flat_decode, gen_flatattention, gen_summa, io_flash, io_flat, is_decode,
    pack_inputs, unpack_output, Dataflow, FlashVariant, FlatParams, IoModel, SummaBlock,
};
use crate::error::{Error, Result};
use crate::noc::Strategy;
use crate::numerics::{reference_attention, reference_gemm, AttentionTensors, AttentionVariant, AttentionWorkload, Matrix};
use crate::sim::{check_schedule, simulate, Mode, Schedule, SimReport};
use crate::tiling::select_tiling;

/// Relative error above which a functional case fails.
pub const FUNCTIONAL_TOLERANCE: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum TilingMode {
    /// Slice and group picked by [`select_tiling`] (FlatAsync footprint).
    Auto,
    Manual { slice_r: usize, slice_c: usize, gx: u32, gy: u32 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttentionPoint {
    pub workload: AttentionWorkload,
    pub dataflow: Dataflow,
    pub tiling: TilingMode,
    /// Query block rows per tile for FA2/FA3.
    pub fa_block: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PointResult {
    pub report: SimReport,
    /// Closed-form traffic; only defined for MHA prefill.
    pub io: Option<IoModel>,
    pub flat: Option<FlatParams>,
    /// Set in functional mode.
    pub max_rel_err: Option<f64>,
}

impl AttentionPoint {
    pub fn new(workload: AttentionWorkload, dataflow: Dataflow) -> Self {
        AttentionPoint { workload, dataflow, tiling: TilingMode::Auto, fa_block: 128 }
    }

    pub fn flat_params(&self, arch: &ArchConfig) -> Result<Option<FlatParams>> {
        let Some((strategy, async_heads)) = self.dataflow.flat_mode() else {
            return Ok(None);
        };
        let p = match self.tiling {
            TilingMode::Auto => select_tiling(&self.workload, arch, true)?.flat_params(strategy, async_heads),
            TilingMode::Manual { slice_r, slice_c, gx, gy } => {
                FlatParams::new(gx, gy, slice_r, slice_c, strategy, async_heads)
            }
        };
        Ok(Some(p))
    }

    pub fn schedule(&self, arch: &ArchConfig) -> Result<(Schedule, Option<FlatParams>)> {
        let w = &self.workload;
        w.validate()?;
        let params = self.flat_params(arch)?;
        let s = match (&params, self.dataflow) {
            (Some(p), _) if is_decode(w) => gen_flat_decode(w, arch, p)?,
            (Some(p), _) => gen_flatattention(w, arch, p)?,
            (None, Dataflow::Fa2) => gen_flashattention(w, arch, FlashVariant::Fa2, self.fa_block)?,
            (None, _) => gen_flashattention(w, arch, FlashVariant::Fa3, self.fa_block)?,
        };
        Ok((s, params))
    }

    pub fn io_model(&self, flat: Option<&FlatParams>) -> Option<IoModel> {
        let w = &self.workload;
        if w.variant != AttentionVariant::MhaPrefill {
            return None;
        }
        let (b, h, d, s) = (w.batch as u64, w.heads as u64, w.head_dim as u64, w.s_q as u64);
        let io = match flat {
            Some(p) => io_flat(b, h, d, s, p.slice_r() as u64, p.gy as u64),
            None => io_flash(b, h, d, s, self.fa_block as u64),
        };
        Some(IoModel::from_elements(io.elements_total, w.dtype_bytes as u64))
    }

    /// Runs the point; functional mode also checks the output against the
    /// reference oracle using inputs drawn from `seed`.
    pub fn run(&self, arch: &ArchConfig, mode: Mode, seed: u64) -> Result<PointResult> {
        let (s, flat) = self.schedule(arch)?;
        let io = self.io_model(flat.as_ref());
        let (report, max_rel_err) = match mode {
            Mode::Timing => (simulate(&s, arch, mode, None)?.report, None),
            Mode::Functional => {
                let w = &self.workload;
                let t = random_tensors(w, seed);
                let out = simulate(&s, arch, mode, Some(pack_inputs(w, &t)?))?;
                let got = unpack_output(w, &out.tensors);
                (out.report, Some(got.max_rel_diff(&reference_attention(w, &t)?)))
            }
        };
        Ok(PointResult { report, io, flat, max_rel_err })
    }
}

pub fn random_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Matrix {
    Matrix::from_fn(rows, cols, |_, _| rng.gen_range(-1.0..1.0))
}

pub fn random_tensors(w: &AttentionWorkload, seed: u64) -> AttentionTensors {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let hk = w.kv_heads();
    AttentionTensors {
        q: (0..w.batch * w.heads).map(|_| random_matrix(&mut rng, w.s_q, w.qk_dim())).collect(),
        k: (0..w.batch * hk).map(|_| random_matrix(&mut rng, w.s_kv, w.qk_dim())).collect(),
        v: (0..w.batch * hk).map(|_| random_matrix(&mut rng, w.s_kv, w.v_dim())).collect(),
    }
}

/// Size limits for the functional suite.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ShapeCaps {
    pub max_seq: usize,
    pub max_dim: usize,
    pub max_group: u32,
}

impl Default for ShapeCaps {
    fn default() -> Self {
        ShapeCaps { max_seq: 128, max_dim: 32, max_group: 4 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ValidationCase {
    pub name: String,
    pub max_rel_err: f64,
    pub pass: bool,
}

/// Architecture used by the functional suite: the reference tile on a
/// mesh just large enough for the largest group.
pub fn validation_arch(caps: &ShapeCaps) -> ArchConfig {
    let mut a = ArchConfig::reference();
    a.noc.mesh_x = caps.max_group;
    a.noc.mesh_y = caps.max_group;
    a.hbm.num_channels = caps.max_group;
    a
}

/// Runs every dataflow on small shapes in functional mode. `tamper`, when
/// given, is applied to each simulated output before comparison; the
/// suite must then report failures.
pub fn validate_functional(caps: &ShapeCaps, tamper: Option<&dyn Fn(&mut Matrix)>) -> Result<Vec<ValidationCase>> {
    if caps.max_seq == 0 || caps.max_dim < 8 || caps.max_group == 0 {
        return Err(Error::InvalidConfig("validation caps need max_seq ≥ 1, max_dim ≥ 8, max_group ≥ 1".into()));
    }
    let arch = validation_arch(caps);
    let g = caps.max_group;
    let d = caps.max_dim;
    let mut cases = Vec::new();
    let mut check = |name: String, w: &AttentionWorkload, s: &Schedule| -> Result<()> {
        check_schedule(s, &arch).into_result()?;
        let t = random_tensors(w, 0x5eed);
        let out = simulate(s, &arch, Mode::Functional, Some(pack_inputs(w, &t)?))?;
        let mut got = unpack_output(w, &out.tensors);
        if let Some(f) = tamper {
            f(&mut got);
        }
        let err = got.max_rel_diff(&reference_attention(w, &t)?);
        cases.push(ValidationCase { name, max_rel_err: err, pass: err <= FUNCTIONAL_TOLERANCE });
        Ok(())
    };

    let mut seqs = vec![1, caps.max_seq / 2, caps.max_seq];
    seqs.retain(|&s| s >= 1);
    seqs.dedup();
    for &s in &seqs {
        for dd in [d / 2, d] {
            let w = AttentionWorkload::mha_prefill(2, 2, s, dd);
            let slice = 16.min(s.next_power_of_two()).max(1);
            for df in Dataflow::ALL {
                let p = AttentionPoint {
                    workload: w.clone(),
                    dataflow: df,
                    tiling: TilingMode::Manual { slice_r: slice, slice_c: slice, gx: g, gy: g },
                    fa_block: 32.min(s),
                };
                let (sched, _) = p.schedule(&arch)?;
                check(format!("{}/S{s}/D{dd}", df.name()), &w, &sched)?;
            }
        }
    }

    let s_kv = caps.max_seq.max(16);
    let decode = [
        AttentionWorkload::mha_decode(2, 2, s_kv, d / 2),
        AttentionWorkload::spec_decode(1, 2, s_kv, d / 2, 2),
        AttentionWorkload::gqa_decode(1, 4, 2, s_kv, d / 2),
        AttentionWorkload::mla_decode(1, 4, s_kv, d, 8, 2),
    ];
    for w in &decode {
        let rows = crate::dataflows::effective_rows(w);
        let p = FlatParams::new(g, 1, rows, 16, Strategy::Hw, false);
        check(format!("flat_decode/{}", w.variant.name()), w, &gen_flat_decode(w, &arch, &p)?)?;
        let s = gen_flashattention(w, &arch, FlashVariant::Fa3, 16)?;
        check(format!("fa3_decode/{}", w.variant.name()), w, &s)?;
    }

    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for (m, n, k) in [(caps.max_seq, caps.max_seq, d), (20, 100, 24)] {
        let block = SummaBlock { bm: 16, bn: 16, bk: 16 };
        let s = gen_summa(m, n, k, &arch, block)?;
        let (a, b) = (random_matrix(&mut rng, m, k), random_matrix(&mut rng, k, n));
        let out = simulate(&s, &arch, Mode::Functional, Some(vec![a.clone(), b.clone(), Matrix::zeros(m, n)]))?;
        let mut got = out.tensors[2].clone();
        if let Some(f) = tamper {
            f(&mut got);
        }
        let err = got.max_rel_diff(&reference_gemm(&a, &b)?);
        cases.push(ValidationCase { name: format!("summa/{m}x{n}x{k}"), max_rel_err: err, pass: err <= FUNCTIONAL_TOLERANCE });
    }
    Ok(cases)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> ShapeCaps {
        ShapeCaps { max_seq: 32, max_dim: 16, max_group: 2 }
    }

    #[test]
    fn tiny_suite_passes() {
        let cases = validate_functional(&tiny(), None).unwrap();
        assert!(cases.len() > 20);
        for c in &cases {
            assert!(c.pass, "{} {}", c.name, c.max_rel_err);
        }
    }

    #[test]
    fn sign_flip_is_caught() {
        let flip = |m: &mut Matrix| m.data_mut().iter_mut().for_each(|x| *x = -*x);
        let cases = validate_functional(&tiny(), Some(&flip)).unwrap();
        assert!(cases.iter().all(|c| !c.pass));
    }

    #[test]
    fn closed_form_only_for_prefill() {
        let p = AttentionPoint::new(AttentionWorkload::mha_decode(1, 2, 64, 16), Dataflow::Fa3);
        assert!(p.io_model(None).is_none());
        let p = AttentionPoint::new(AttentionWorkload::mha_prefill(1, 2, 64, 16).with_dtype(1), Dataflow::Fa3);
        let io = p.io_model(None).unwrap();
        assert_eq!(io.bytes_total, io.elements_total);
    }

    #[test]
    fn manual_tiling_reaches_the_generator() {
        let arch = validation_arch(&tiny());
        let p = AttentionPoint {
            workload: AttentionWorkload::mha_prefill(1, 2, 64, 16),
            dataflow: Dataflow::FlatHc,
            tiling: TilingMode::Manual { slice_r: 16, slice_c: 32, gx: 2, gy: 2 },
            fa_block: 16,
        };
        let r = p.run(&arch, Mode::Timing, 0).unwrap();
        let f = r.flat.unwrap();
        assert_eq!((f.block_r, f.block_c), (32, 64));
        let bytes = r.report.hbm_bytes_read + r.report.hbm_bytes_written;
        assert_eq!(bytes, r.io.unwrap().bytes_total);
    }
}

use std::path::Path;

use flatsim::experiment::{validate_functional, AttentionPoint};
use flatsim::tiling::select_tiling;
use flatsim::wafer::WaferModel;
use flatsim::{ArchConfig, AttentionWorkload, Mode, SimReport};
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::config::{Experiment, RunMode, ValidateConfig, WaferExperiment};
use crate::output::Table;
use crate::CliError;

/// Columns contributed by [`SimReport::fields`], in its order.
pub const REPORT_COLUMNS: [&str; 11] = [
    "total_cycles",
    "hbm_access",
    "inter_tile_comm",
    "matrix_engine",
    "vector_softmax",
    "sync_overhead",
    "hbm_bytes_read",
    "hbm_bytes_written",
    "matrix_utilization",
    "matrix_active_utilization",
    "avg_hbm_bw_utilization",
];

/// A finished table plus how many rows hit a simulation error.
pub struct Outcome {
    pub table: Table,
    pub failed: usize,
}

fn config_hash<T: Serialize>(value: &T) -> String {
    let json = serde_json::to_vec(value).expect("configs serialize");
    hex::encode(&Sha256::digest(&json)[..8])
}

fn blanks(n: usize) -> impl Iterator<Item = String> {
    std::iter::repeat_n(String::new(), n)
}

fn workload_cols(w: &AttentionWorkload) -> Vec<String> {
    vec![
        w.variant.name().into(),
        w.batch.to_string(),
        w.heads.to_string(),
        w.s_q.to_string(),
        w.s_kv.to_string(),
        w.head_dim.to_string(),
        w.dtype_bytes.to_string(),
    ]
}

const WORKLOAD_COLUMNS: [&str; 7] = ["variant", "batch", "heads", "seq_q", "seq_kv", "head_dim", "dtype_bytes"];

/// Runs every grid point in order. A failing point yields an `error` row.
pub fn sweep(exp: &Experiment, base: &Path) -> Result<Outcome, CliError> {
    let arch = exp.arch.load(base)?;
    let points = exp.points()?;
    run_points(exp, &arch, &points)
}

/// Like [`sweep`] but the grid must describe exactly one point.
pub fn simulate(exp: &Experiment, base: &Path) -> Result<Outcome, CliError> {
    let arch = exp.arch.load(base)?;
    let points = exp.points()?;
    if points.len() != 1 {
        return Err(CliError::Config(format!("simulate needs a single-point grid, got {} points", points.len())));
    }
    run_points(exp, &arch, &points)
}

fn run_points(exp: &Experiment, arch: &ArchConfig, points: &[AttentionPoint]) -> Result<Outcome, CliError> {
    let mut cols = vec!["experiment", "grid_index", "config_hash"];
    cols.extend(WORKLOAD_COLUMNS);
    cols.extend(["dataflow", "fa_block", "slice_r", "slice_c", "gx", "gy", "status"]);
    cols.extend(REPORT_COLUMNS);
    cols.extend(["io_elements", "io_bytes", "max_rel_err", "error"]);
    let mut table = Table::new(&cols);
    let mode = match exp.mode {
        RunMode::Timing => Mode::Timing,
        RunMode::Functional => Mode::Functional,
    };
    let mut failed = 0;
    for (i, p) in points.iter().enumerate() {
        let mut row = vec![exp.name.clone(), i.to_string(), config_hash(&(arch, p))];
        row.extend(workload_cols(&p.workload));
        row.extend([p.dataflow.name().to_string(), p.fa_block.to_string()]);
        match p.run(arch, mode, exp.seed) {
            Ok(r) => {
                log::info!("point {i}: {} {} cycles", p.dataflow, r.report.total_cycles);
                match r.flat {
                    Some(f) => {
                        row.extend([f.slice_r(), f.slice_c()].map(|x| x.to_string()));
                        row.extend([f.gx, f.gy].map(|x| x.to_string()));
                    }
                    None => row.extend(blanks(4)),
                }
                row.push("ok".into());
                row.extend(report_values(&r.report));
                match r.io {
                    Some(io) => row.extend([io.elements_total.to_string(), io.bytes_total.to_string()]),
                    None => row.extend(blanks(2)),
                }
                row.push(r.max_rel_err.map(|e| format!("{e:e}")).unwrap_or_default());
                row.push(String::new());
            }
            Err(e) => {
                log::error!("point {i} ({} {:?}): {e}", p.dataflow, p.workload.variant);
                failed += 1;
                row.extend(blanks(4));
                row.push("error".into());
                row.extend(blanks(REPORT_COLUMNS.len() + 3));
                row.push(e.to_string());
            }
        }
        table.push(row);
    }
    Ok(Outcome { table, failed })
}

fn report_values(r: &SimReport) -> impl Iterator<Item = String> {
    r.fields().into_iter().map(|(_, v)| v)
}

/// Chosen slice and group for every workload of the grid.
pub fn autotune(exp: &Experiment, base: &Path) -> Result<Outcome, CliError> {
    let arch = exp.arch.load(base)?;
    let mut cols = vec!["experiment", "grid_index"];
    cols.extend(WORKLOAD_COLUMNS);
    cols.extend(["async_heads", "slice_r", "slice_c", "gx", "gy", "predicted_util", "l1_footprint", "status", "error"]);
    let mut table = Table::new(&cols);
    let mut failed = 0;
    for (i, w) in exp.grid.workloads()?.iter().enumerate() {
        let mut row = vec![exp.name.clone(), i.to_string()];
        row.extend(workload_cols(w));
        row.push(exp.tiling.async_heads.to_string());
        match select_tiling(w, &arch, exp.tiling.async_heads) {
            Ok(t) => {
                row.extend([t.slice_r, t.slice_c].map(|x| x.to_string()));
                row.extend([t.gx, t.gy].map(|x| x.to_string()));
                row.extend([format!("{:.6}", t.predicted_util), t.l1_footprint.to_string(), "ok".into(), String::new()]);
            }
            Err(e) => {
                log::error!("workload {i}: {e}");
                failed += 1;
                row.extend(blanks(6));
                row.extend(["error".into(), e.to_string()]);
            }
        }
        table.push(row);
    }
    Ok(Outcome { table, failed })
}

/// One serving estimate per (plan, batch, dataflow).
pub fn wafer(exp: &WaferExperiment, base: &Path) -> Result<Outcome, CliError> {
    let wafer = exp.wafer(base)?;
    let layer = exp.layer.clone().unwrap_or_else(flatsim::DecoderLayerSpec::deepseek_v3);
    let plans = exp.plans()?;
    let mut model = WaferModel::new(wafer.clone(), layer.clone()).map_err(|e| CliError::Config(e.to_string()))?;
    let table_cols = [
        "experiment",
        "grid_index",
        "config_hash",
        "dataflow",
        "ep_degree",
        "pp_degree",
        "batch_per_chip",
        "layers",
        "spec_len",
        "acceptance_rate",
        "d2d_bandwidth",
        "status",
        "layer_seconds",
        "attention_seconds",
        "c2c_seconds",
        "t_iter",
        "tpot_ms",
        "system_throughput",
        "per_chip_throughput",
        "c2c_fraction",
        "attention_fraction",
        "active_experts",
        "error",
    ];
    let mut table = Table::new(&table_cols);
    let mut failed = 0;
    let mut i = 0;
    for plan in &plans {
        for &df in &exp.sweep.dataflows {
            let mut row = vec![exp.name.clone(), i.to_string(), config_hash(&(&wafer, &layer, plan))];
            row.extend([df.name().to_string(), plan.ep_degree.to_string(), plan.pp_degree.to_string()]);
            row.extend([plan.batch_per_chip, plan.layers, plan.spec_len].map(|x| x.to_string()));
            row.extend([plan.acceptance_rate, wafer.d2d_bandwidth].map(|x| x.to_string()));
            match model.serve(plan, df) {
                Ok(r) => {
                    log::info!("plan {i}: {} b={} {:.1} tok/s/chip", df.name(), plan.batch_per_chip, r.per_chip_throughput);
                    row.push("ok".into());
                    row.extend(
                        [
                            r.layer_seconds,
                            r.attention_seconds,
                            r.c2c_seconds,
                            r.t_iter,
                            r.tpot_ms,
                            r.system_throughput,
                            r.per_chip_throughput,
                            r.c2c_fraction,
                            r.attention_fraction,
                        ]
                        .map(|x| x.to_string()),
                    );
                    row.extend([r.active_experts.to_string(), String::new()]);
                }
                Err(e) => {
                    log::error!("plan {i}: {e}");
                    failed += 1;
                    row.push("error".into());
                    row.extend(blanks(10));
                    row.push(e.to_string());
                }
            }
            table.push(row);
            i += 1;
        }
    }
    Ok(Outcome { table, failed })
}

/// Functional oracle suite; a case above tolerance counts as a failure.
pub fn validate(cfg: &ValidateConfig) -> Result<Outcome, CliError> {
    let caps = cfg.caps.unwrap_or_default();
    let cases = validate_functional(&caps, None).map_err(|e| match e {
        flatsim::Error::InvalidConfig(m) => CliError::Config(m),
        other => CliError::Simulation(other.to_string()),
    })?;
    let mut table = Table::new(&["case", "max_rel_err", "pass"]);
    let mut failed = 0;
    for c in &cases {
        if !c.pass {
            log::error!("{} exceeds tolerance: {:e}", c.name, c.max_rel_err);
            failed += 1;
        }
        table.push(vec![c.name.clone(), format!("{:e}", c.max_rel_err), c.pass.to_string()]);
    }
    Ok(Outcome { table, failed })
}

#[cfg(test)]
mod tests {
    use super::*;
    use flatsim::experiment::ShapeCaps;

    #[test]
    fn report_columns_match_report_fields() {
        let w = AttentionWorkload::mha_prefill(1, 1, 32, 16);
        let p = AttentionPoint::new(w, flatsim::dataflows::Dataflow::Fa2);
        let mut arch = ArchConfig::reference();
        arch.noc.mesh_x = 2;
        arch.noc.mesh_y = 2;
        arch.hbm.num_channels = 2;
        let p = AttentionPoint { fa_block: 16, ..p };
        let r = p.run(&arch, Mode::Timing, 0).unwrap();
        let names: Vec<_> = r.report.fields().into_iter().map(|(n, _)| n).collect();
        assert_eq!(names, REPORT_COLUMNS);
    }

    #[test]
    fn hash_is_stable_and_sensitive() {
        let a = ArchConfig::reference();
        assert_eq!(config_hash(&a), config_hash(&a.clone()));
        assert_ne!(config_hash(&a), config_hash(&ArchConfig::reference_fp8()));
        assert_eq!(config_hash(&a).len(), 16);
    }

    #[test]
    fn shape_caps_default_is_small() {
        let c = ShapeCaps::default();
        assert!(c.max_seq <= 128 && c.max_dim <= 32 && c.max_group <= 4);
    }
}

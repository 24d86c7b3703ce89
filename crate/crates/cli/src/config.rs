//! Config file schema. Every subcommand reads one TOML file; relative
//! paths inside it resolve against the file's directory.

use std::path::{Path, PathBuf};

use flatsim::dataflows::Dataflow;
use flatsim::experiment::{AttentionPoint, ShapeCaps, TilingMode};
use flatsim::wafer::{AttentionDataflow, DecoderLayerSpec, ParallelismPlan, WaferConfig};
use flatsim::{ArchConfig, AttentionVariant, AttentionWorkload};
use serde::Deserialize;

use crate::CliError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum Format {
    #[default]
    Csv,
    Jsonl,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunMode {
    #[default]
    Timing,
    Functional,
}

/// Either a named preset or a TOML file holding a full `ArchConfig`.
#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArchRef {
    pub preset: Option<String>,
    pub file: Option<PathBuf>,
}

impl ArchRef {
    pub fn load(&self, base: &Path) -> Result<ArchConfig, CliError> {
        let arch = match (&self.preset, &self.file) {
            (Some(_), Some(_)) => return Err(CliError::Config("[arch] takes either preset or file, not both".into())),
            (_, Some(f)) => {
                let path = base.join(f);
                let text = std::fs::read_to_string(&path)
                    .map_err(|e| CliError::Config(format!("cannot read arch file {}: {e}", path.display())))?;
                ArchConfig::from_toml_str(&text).map_err(|e| CliError::Config(e.to_string()))?
            }
            (p, None) => match p.as_deref().unwrap_or("reference") {
                "reference" => ArchConfig::reference(),
                "reference_fp8" => ArchConfig::reference_fp8(),
                other => return Err(CliError::Config(format!("unknown arch preset '{other}'"))),
            },
        };
        flatsim::arch::validate(&arch).into_result().map_err(|e| CliError::Config(e.to_string()))?;
        Ok(arch)
    }
}

fn default_fa_block() -> usize {
    128
}

fn default_dtype() -> usize {
    2
}

fn default_spec_len() -> usize {
    2
}

fn default_gqa_group() -> usize {
    8
}

fn default_rope() -> usize {
    64
}

/// Attention workload grid. For decode variants `seq_len` is the KV length
/// and, for MLA, `head_dim` is the latent rank.
#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Grid {
    #[serde(default = "prefill_only")]
    pub variants: Vec<AttentionVariant>,
    pub seq_len: Vec<usize>,
    pub head_dim: Vec<usize>,
    pub heads: Vec<usize>,
    pub batch: Vec<usize>,
    pub dataflows: Vec<Dataflow>,
    #[serde(default = "default_fa_block")]
    pub fa_block: usize,
    #[serde(default = "default_dtype")]
    pub dtype_bytes: usize,
    #[serde(default = "default_spec_len")]
    pub spec_len: usize,
    #[serde(default = "default_gqa_group")]
    pub gqa_group: usize,
    #[serde(default = "default_rope")]
    pub rope_dim: usize,
}

fn prefill_only() -> Vec<AttentionVariant> {
    vec![AttentionVariant::MhaPrefill]
}

#[derive(Debug, Clone, Copy, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TilingSection {
    #[serde(default)]
    pub manual: Option<ManualTiling>,
    /// Footprint model used by `autotune`.
    #[serde(default = "yes")]
    pub async_heads: bool,
}

fn yes() -> bool {
    true
}

#[derive(Debug, Clone, Copy, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManualTiling {
    pub slice_r: usize,
    pub slice_c: usize,
    pub gx: u32,
    pub gy: u32,
}

/// `simulate`, `sweep` and `autotune` configs.
#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Experiment {
    pub name: String,
    #[serde(default)]
    pub output: Option<PathBuf>,
    #[serde(default)]
    pub format: Format,
    #[serde(default)]
    pub mode: RunMode,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub arch: ArchRef,
    pub grid: Grid,
    #[serde(default)]
    pub tiling: TilingSection,
}

impl Grid {
    fn check(&self) -> Result<(), CliError> {
        let lists = [
            ("variants", self.variants.len()),
            ("seq_len", self.seq_len.len()),
            ("head_dim", self.head_dim.len()),
            ("heads", self.heads.len()),
            ("batch", self.batch.len()),
            ("dataflows", self.dataflows.len()),
        ];
        if let Some((name, _)) = lists.iter().find(|(_, n)| *n == 0) {
            return Err(CliError::Config(format!("grids non-empty: '{name}' has no entries")));
        }
        Ok(())
    }

    fn workload(&self, v: AttentionVariant, b: usize, h: usize, s: usize, d: usize) -> AttentionWorkload {
        let w = match v {
            AttentionVariant::MhaPrefill => AttentionWorkload::mha_prefill(b, h, s, d),
            AttentionVariant::MhaDecode => AttentionWorkload::mha_decode(b, h, s, d),
            AttentionVariant::MhaSpecDecode => AttentionWorkload::spec_decode(b, h, s, d, self.spec_len),
            AttentionVariant::GqaDecode => AttentionWorkload::gqa_decode(b, h, self.gqa_group, s, d),
            AttentionVariant::MlaDecodeAbsorbed => AttentionWorkload::mla_decode(b, h, s, d, self.rope_dim, self.spec_len),
        };
        w.with_dtype(self.dtype_bytes)
    }

    /// Workloads in grid order: variant, batch, heads, seq_len, head_dim.
    pub fn workloads(&self) -> Result<Vec<AttentionWorkload>, CliError> {
        self.check()?;
        let mut out = Vec::new();
        for &v in &self.variants {
            for &b in &self.batch {
                for &h in &self.heads {
                    for &s in &self.seq_len {
                        for &d in &self.head_dim {
                            out.push(self.workload(v, b, h, s, d));
                        }
                    }
                }
            }
        }
        Ok(out)
    }
}

impl Experiment {
    /// Grid points with dataflow innermost.
    pub fn points(&self) -> Result<Vec<AttentionPoint>, CliError> {
        let tiling = match self.tiling.manual {
            Some(m) => TilingMode::Manual { slice_r: m.slice_r, slice_c: m.slice_c, gx: m.gx, gy: m.gy },
            None => TilingMode::Auto,
        };
        let mut out = Vec::new();
        for w in self.grid.workloads()? {
            for &df in &self.grid.dataflows {
                out.push(AttentionPoint { workload: w.clone(), dataflow: df, tiling, fa_block: self.grid.fa_block });
            }
        }
        Ok(out)
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WaferSection {
    pub chips_x: u32,
    pub chips_y: u32,
    pub d2d_bandwidth: f64,
    pub d2d_latency: f64,
}

/// Plan fields; degrees are lists so one file can sweep several plans.
#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PlanSection {
    pub ep_degree: Vec<u32>,
    pub pp_degree: Vec<u32>,
    pub layers: usize,
    pub spec_len: usize,
    pub acceptance_rate: f64,
    #[serde(default)]
    pub routing_seed: u64,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ServingSweep {
    pub batch: Vec<usize>,
    pub dataflows: Vec<AttentionDataflow>,
}

/// `wafer` config.
#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WaferExperiment {
    pub name: String,
    #[serde(default)]
    pub output: Option<PathBuf>,
    #[serde(default)]
    pub format: Format,
    #[serde(default)]
    pub arch: ArchRef,
    pub wafer: WaferSection,
    pub plan: PlanSection,
    pub sweep: ServingSweep,
    /// Decoder shapes; defaults to the DeepSeek-v3 layer.
    #[serde(default)]
    pub layer: Option<DecoderLayerSpec>,
}

impl WaferExperiment {
    pub fn wafer(&self, base: &Path) -> Result<WaferConfig, CliError> {
        let mut arch = self.arch.clone();
        if arch.preset.is_none() && arch.file.is_none() {
            arch.preset = Some("reference_fp8".into());
        }
        let w = &self.wafer;
        let cfg = WaferConfig {
            chips_x: w.chips_x,
            chips_y: w.chips_y,
            d2d_bandwidth: w.d2d_bandwidth,
            d2d_latency: w.d2d_latency,
            chip: arch.load(base)?,
        };
        cfg.validate().map_err(|e| CliError::Config(e.to_string()))?;
        Ok(cfg)
    }

    /// Plans in sweep order: ep, pp, batch.
    pub fn plans(&self) -> Result<Vec<ParallelismPlan>, CliError> {
        let p = &self.plan;
        let s = &self.sweep;
        for (name, n) in
            [("ep_degree", p.ep_degree.len()), ("pp_degree", p.pp_degree.len()), ("batch", s.batch.len()), ("dataflows", s.dataflows.len())]
        {
            if n == 0 {
                return Err(CliError::Config(format!("grids non-empty: '{name}' has no entries")));
            }
        }
        let mut out = Vec::new();
        for &ep in &p.ep_degree {
            for &pp in &p.pp_degree {
                for &b in &s.batch {
                    out.push(ParallelismPlan {
                        ep_degree: ep,
                        pp_degree: pp,
                        batch_per_chip: b,
                        layers: p.layers,
                        spec_len: p.spec_len,
                        acceptance_rate: p.acceptance_rate,
                        routing_seed: p.routing_seed,
                    });
                }
            }
        }
        Ok(out)
    }
}

/// `validate` config.
#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ValidateConfig {
    #[serde(default)]
    pub output: Option<PathBuf>,
    #[serde(default)]
    pub format: Format,
    #[serde(default)]
    pub caps: Option<ShapeCaps>,
}

pub fn load<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T, CliError> {
    let text =
        std::fs::read_to_string(path).map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
    toml::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
}

//! MoE decoder serving on a mesh of chips.
//!
//! Kernels and chip-to-chip traffic never overlap: every kernel of a layer
//! runs to completion on every chip before the next starts, and the expert
//! all-to-all runs between barriers. Per-chip kernel times come from the
//! tile simulator and are memoized by shape.

use std::collections::HashMap;
use std::fmt;
use std::str::FromStr;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::arch::ArchConfig;
use crate::dataflows::{auto_block, gen_elementwise, gen_flashattention, gen_flat_decode, gen_summa, FlashVariant};
use crate::engines::VectorKind;
use crate::error::{Error, Result};
use crate::noc::{route_xy, LinkTimeline, TileCoord};
use crate::numerics::AttentionWorkload;
use crate::sim::{simulate, Mode, Schedule};
use crate::tiling::select_tiling;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WaferConfig {
    pub chips_x: u32,
    pub chips_y: u32,
    /// Bytes per second on each directed chip-to-chip link.
    pub d2d_bandwidth: f64,
    /// Seconds per chip-to-chip hop.
    pub d2d_latency: f64,
    pub chip: ArchConfig,
}

impl WaferConfig {
    /// 8×8 chips, 1 TB/s and 256 ns links, FP8 chips.
    pub fn reference() -> Self {
        WaferConfig { chips_x: 8, chips_y: 8, d2d_bandwidth: 1e12, d2d_latency: 256e-9, chip: ArchConfig::reference_fp8() }
    }

    pub fn chips(&self) -> u32 {
        self.chips_x * self.chips_y
    }

    pub fn validate(&self) -> Result<()> {
        if self.chips_x == 0 || self.chips_y == 0 {
            return Err(Error::InvalidConfig("wafer needs at least one chip".into()));
        }
        if !(self.d2d_bandwidth >= 1e9 && self.d2d_bandwidth.is_finite()) {
            return Err(Error::InvalidConfig("d2d_bandwidth must be at least 1 GB/s".into()));
        }
        if !(self.d2d_latency >= 0.0 && self.d2d_latency.is_finite()) {
            return Err(Error::InvalidConfig("d2d_latency must be ≥ 0".into()));
        }
        crate::arch::validate(&self.chip).into_result()
    }

    fn coord(&self, chip: u32) -> TileCoord {
        TileCoord::new(chip % self.chips_x, chip / self.chips_x)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ParallelismPlan {
    pub ep_degree: u32,
    pub pp_degree: u32,
    /// Users decoded concurrently on each chip.
    pub batch_per_chip: usize,
    pub layers: usize,
    /// Query tokens per user per step (1 without speculative decoding).
    pub spec_len: usize,
    pub acceptance_rate: f64,
    #[serde(default)]
    pub routing_seed: u64,
}

impl ParallelismPlan {
    /// EP32-PP2 over 61 layers with two-token speculation at 0.7 acceptance.
    pub fn reference(batch_per_chip: usize) -> Self {
        ParallelismPlan { ep_degree: 32, pp_degree: 2, batch_per_chip, layers: 61, spec_len: 2, acceptance_rate: 0.7, routing_seed: 0 }
    }

    pub fn tokens_per_step(&self) -> f64 {
        1.0 + self.acceptance_rate * (self.spec_len as f64 - 1.0)
    }

    pub fn layers_per_stage(&self) -> usize {
        self.layers.div_ceil(self.pp_degree as usize)
    }

    pub fn validate(&self, wafer: &WaferConfig) -> Result<()> {
        if self.ep_degree == 0 || self.pp_degree == 0 {
            return Err(Error::InvalidConfig("ep_degree and pp_degree must be ≥ 1".into()));
        }
        if self.ep_degree as u64 * self.pp_degree as u64 > wafer.chips() as u64 {
            return Err(Error::InvalidConfig(format!(
                "EP{}-PP{} needs {} chips, wafer has {}",
                self.ep_degree,
                self.pp_degree,
                self.ep_degree * self.pp_degree,
                wafer.chips()
            )));
        }
        if !(0.0..=1.0).contains(&self.acceptance_rate) {
            return Err(Error::InvalidConfig("acceptance_rate must lie in [0, 1]".into()));
        }
        if self.spec_len == 0 || self.layers == 0 {
            return Err(Error::InvalidConfig("spec_len and layers must be ≥ 1".into()));
        }
        if (self.pp_degree as usize) > self.layers {
            return Err(Error::InvalidConfig("more pipeline stages than layers".into()));
        }
        Ok(())
    }

    /// Chips per pipeline stage that hold a full EP group.
    fn stage_chips(&self, wafer: &WaferConfig) -> u32 {
        (wafer.chips() / self.pp_degree) / self.ep_degree * self.ep_degree
    }

    /// Chips that carry users (replicas of whole EP groups; leftovers idle).
    pub fn active_chips(&self, wafer: &WaferConfig) -> u32 {
        self.stage_chips(wafer) * self.pp_degree
    }
}

/// Shapes of one MLA + MoE decoder layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DecoderLayerSpec {
    pub d_model: usize,
    pub heads: usize,
    pub q_rank: usize,
    pub kv_rank: usize,
    pub rope_dim: usize,
    pub nope_dim: usize,
    pub v_head_dim: usize,
    pub routed_experts: usize,
    pub shared_experts: usize,
    pub top_k: usize,
    pub expert_inter: usize,
    pub kv_len: usize,
}

impl DecoderLayerSpec {
    /// The public DeepSeek-v3 decoder configuration at a 4096-token context.
    pub fn deepseek_v3() -> Self {
        DecoderLayerSpec {
            d_model: 7168,
            heads: 128,
            q_rank: 1536,
            kv_rank: 512,
            rope_dim: 64,
            nope_dim: 128,
            v_head_dim: 128,
            routed_experts: 256,
            shared_experts: 1,
            top_k: 8,
            expert_inter: 2048,
            kv_len: 4096,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let dims = [self.d_model, self.heads, self.q_rank, self.kv_rank, self.nope_dim, self.v_head_dim, self.expert_inter];
        if dims.contains(&0) || self.routed_experts == 0 || self.top_k == 0 {
            return Err(Error::InvalidConfig("decoder dimensions must be ≥ 1".into()));
        }
        if self.top_k > self.routed_experts {
            return Err(Error::InvalidConfig("top_k exceeds the number of routed experts".into()));
        }
        Ok(())
    }

    fn attention_weights(&self) -> u64 {
        let qk = self.nope_dim + self.rope_dim;
        (self.d_model * self.q_rank
            + self.q_rank * self.heads * qk
            + self.d_model * (self.kv_rank + self.rope_dim)
            + self.heads * self.nope_dim * self.kv_rank
            + self.heads * self.kv_rank * self.v_head_dim
            + self.heads * self.v_head_dim * self.d_model) as u64
    }

    fn expert_weights(&self) -> u64 {
        (3 * self.d_model * self.expert_inter) as u64
    }

    /// Parameters resident on one chip for one layer, in elements.
    fn chip_weights(&self, ep: u32) -> u64 {
        let local = self.routed_experts.div_ceil(ep as usize) as u64;
        self.attention_weights()
            + (self.shared_experts as u64 + local) * self.expert_weights()
            + (self.d_model * self.routed_experts) as u64
    }

    /// Compressed KV cache bytes per user per layer.
    fn kv_bytes_per_user(&self, dtype: u64) -> u64 {
        (self.kv_len * (self.kv_rank + self.rope_dim)) as u64 * dtype
    }

    fn mla(&self, batch: usize, spec_len: usize, dtype: usize) -> AttentionWorkload {
        AttentionWorkload::mla_decode(batch, self.heads, self.kv_len, self.kv_rank, self.rope_dim, spec_len).with_dtype(dtype)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum AttentionDataflow {
    #[serde(rename = "flat", alias = "flat_attention")]
    FlatAttention,
    #[serde(rename = "flashmla", alias = "flash_mla_like")]
    FlashMlaLike,
}

impl AttentionDataflow {
    pub const ALL: [AttentionDataflow; 2] = [AttentionDataflow::FlatAttention, AttentionDataflow::FlashMlaLike];

    pub fn name(self) -> &'static str {
        match self {
            AttentionDataflow::FlatAttention => "flat",
            AttentionDataflow::FlashMlaLike => "flashmla",
        }
    }
}

impl fmt::Display for AttentionDataflow {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for AttentionDataflow {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace(['_', '-'], "").as_str() {
            "flat" | "flatattention" => Ok(AttentionDataflow::FlatAttention),
            "flashmla" | "flashmlalike" | "fa3" => Ok(AttentionDataflow::FlashMlaLike),
            _ => Err(Error::InvalidConfig(format!("unknown attention dataflow '{s}' (expected flat or flashmla)"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum KernelClass {
    Attention,
    Projection,
    Moe,
    Vector,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct KernelTime {
    pub name: &'static str,
    pub class: KernelClass,
    pub seconds: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
enum KernelKey {
    Gemm(usize, usize, usize),
    Vector(usize, usize, VectorKind),
    Attention(AttentionDataflow, usize, usize),
}

/// Memoized single-chip kernel cycles, keyed by kernel shape.
#[derive(Debug)]
pub struct KernelCache {
    arch: ArchConfig,
    layer: DecoderLayerSpec,
    cycles: HashMap<KernelKey, u64>,
    pub simulations: usize,
}

impl KernelCache {
    pub fn new(arch: ArchConfig, layer: DecoderLayerSpec) -> Self {
        KernelCache { arch, layer, cycles: HashMap::new(), simulations: 0 }
    }

    fn run(&mut self, key: KernelKey) -> Result<u64> {
        if let Some(&c) = self.cycles.get(&key) {
            return Ok(c);
        }
        let arch = &self.arch;
        let sched: Schedule = match key {
            KernelKey::Gemm(m, n, k) => gen_summa(m, n, k, arch, auto_block(m, n, k, arch)?)?,
            KernelKey::Vector(rows, cols, kind) => gen_elementwise(rows, cols, kind, arch)?,
            KernelKey::Attention(df, batch, spec) => {
                let w = self.layer.mla(batch, spec, arch.dtype_bytes as usize);
                match df {
                    AttentionDataflow::FlatAttention => {
                        let t = select_tiling(&w, arch, true)?;
                        let strategy = if arch.noc.hw_collectives_enabled { crate::noc::Strategy::Hw } else { crate::noc::Strategy::SwTree };
                        gen_flat_decode(&w, arch, &t.flat_params(strategy, true))?
                    }
                    AttentionDataflow::FlashMlaLike => flash_decode(&w, arch)?,
                }
            }
        };
        let c = simulate(&sched, arch, Mode::Timing, None)?.report.total_cycles;
        self.simulations += 1;
        self.cycles.insert(key, c);
        Ok(c)
    }

    fn seconds(&mut self, key: KernelKey) -> Result<f64> {
        let zero = match key {
            KernelKey::Gemm(m, n, k) => m == 0 || n == 0 || k == 0,
            KernelKey::Vector(r, c, _) => r == 0 || c == 0,
            KernelKey::Attention(_, b, s) => b == 0 || s == 0,
        };
        if zero {
            return Ok(0.0);
        }
        let cycles = self.run(key)?;
        Ok(self.arch.cycles_to_seconds(cycles))
    }
}

/// FA3-style decode with the widest block that fits in L1.
fn flash_decode(w: &AttentionWorkload, arch: &ArchConfig) -> Result<Schedule> {
    let mut last = None;
    for m in [128usize, 64, 32, 16] {
        match gen_flashattention(w, arch, FlashVariant::Fa3, m) {
            Ok(s) => return Ok(s),
            Err(e @ Error::L1Overflow { .. }) => last = Some(e),
            Err(e) => return Err(e),
        }
    }
    Err(last.expect("at least one block size tried"))
}

/// Token→expert assignment for one EP group.
#[derive(Debug, Clone, PartialEq)]
pub struct Routing {
    /// Tokens each routed expert receives from the whole group.
    pub expert_tokens: Vec<usize>,
    /// `copies[src][dst]`: token copies chip `src` sends to chip `dst`.
    pub copies: Vec<Vec<u64>>,
}

impl Routing {
    /// Every token picks `top_k` distinct experts uniformly at random; expert
    /// `e` lives on group chip `e / ceil(experts / ep)`.
    pub fn uniform(layer: &DecoderLayerSpec, ep: u32, tokens_per_chip: usize, seed: u64) -> Self {
        let ep = ep as usize;
        let per_chip = layer.routed_experts.div_ceil(ep);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut expert_tokens = vec![0usize; layer.routed_experts];
        let mut copies = vec![vec![0u64; ep]; ep];
        for row in copies.iter_mut() {
            for _ in 0..tokens_per_chip {
                for e in sample(&mut rng, layer.routed_experts, layer.top_k) {
                    expert_tokens[e] += 1;
                    row[e / per_chip] += 1;
                }
            }
        }
        Routing { expert_tokens, copies }
    }

    pub fn active_experts(&self) -> usize {
        self.expert_tokens.iter().filter(|&&n| n > 0).count()
    }
}

/// Serving estimate for one plan and batch.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ServingReport {
    pub dataflow: AttentionDataflow,
    pub ep_degree: u32,
    pub pp_degree: u32,
    pub batch_per_chip: usize,
    pub layer_seconds: f64,
    pub attention_seconds: f64,
    pub c2c_seconds: f64,
    pub t_iter: f64,
    pub tpot_ms: f64,
    pub system_throughput: f64,
    pub per_chip_throughput: f64,
    pub c2c_fraction: f64,
    pub attention_fraction: f64,
    pub active_experts: usize,
}

/// Per-layer times: kernels in execution order, then the two all-to-alls.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LayerTimes {
    pub kernels: Vec<KernelTime>,
    pub dispatch_seconds: f64,
    pub combine_seconds: f64,
}

impl LayerTimes {
    pub fn kernel_seconds(&self) -> f64 {
        self.kernels.iter().map(|k| k.seconds).sum()
    }

    pub fn total_seconds(&self) -> f64 {
        self.kernel_seconds() + self.dispatch_seconds + self.combine_seconds
    }

    pub fn class_seconds(&self, class: KernelClass) -> f64 {
        self.kernels.iter().filter(|k| k.class == class).map(|k| k.seconds).sum()
    }
}

/// Fails when one stage's weights and KV cache exceed a chip's HBM.
pub fn check_capacity(layer: &DecoderLayerSpec, plan: &ParallelismPlan, chip: &ArchConfig) -> Result<()> {
    let d = chip.dtype_bytes as u64;
    let per_layer = layer.chip_weights(plan.ep_degree) * d + plan.batch_per_chip as u64 * layer.kv_bytes_per_user(d);
    let required = per_layer * plan.layers_per_stage() as u64;
    let available = chip.hbm.capacity_bytes;
    if available > 0 && required > available {
        return Err(Error::HbmCapacity { required, available });
    }
    Ok(())
}

/// Kernel times of one decoder layer on one chip. Routed experts report the
/// slowest chip of the EP group.
pub fn layer_time(
    layer: &DecoderLayerSpec,
    plan: &ParallelismPlan,
    dataflow: AttentionDataflow,
    routing: &Routing,
    cache: &mut KernelCache,
) -> Result<Vec<KernelTime>> {
    check_capacity(layer, plan, &cache.arch)?;
    let l = layer;
    let t = plan.batch_per_chip * plan.spec_len;
    let qk = l.nope_dim + l.rope_dim;
    let mut out = Vec::new();
    let mut push = |name, class, seconds| out.push(KernelTime { name, class, seconds });
    use KernelClass::*;
    use KernelKey::{Gemm, Vector as Vec_};

    push("attn_norm", Vector, cache.seconds(Vec_(t, l.d_model, VectorKind::RmsNorm))?);
    push("q_down", Projection, cache.seconds(Gemm(t, l.q_rank, l.d_model))?);
    push("q_norm", Vector, cache.seconds(Vec_(t, l.q_rank, VectorKind::RmsNorm))?);
    push("q_up", Projection, cache.seconds(Gemm(t, l.heads * qk, l.q_rank))?);
    push("q_rope", Vector, cache.seconds(Vec_(t, l.heads * l.rope_dim, VectorKind::Rope))?);
    push("q_absorb", Projection, cache.seconds(Gemm(t, l.heads * l.kv_rank, l.nope_dim))?);
    push("kv_down", Projection, cache.seconds(Gemm(t, l.kv_rank + l.rope_dim, l.d_model))?);
    push("kv_norm_rope", Vector, cache.seconds(Vec_(t, l.kv_rank + l.rope_dim, VectorKind::Rope))?);
    push("attention", Attention, cache.seconds(KernelKey::Attention(dataflow, plan.batch_per_chip, plan.spec_len))?);
    push("v_absorb", Projection, cache.seconds(Gemm(t, l.heads * l.v_head_dim, l.kv_rank))?);
    push("o_proj", Projection, cache.seconds(Gemm(t, l.d_model, l.heads * l.v_head_dim))?);
    push("attn_residual", Vector, cache.seconds(Vec_(t, l.d_model, VectorKind::Add))?);
    push("moe_norm", Vector, cache.seconds(Vec_(t, l.d_model, VectorKind::RmsNorm))?);
    push("moe_gate", Moe, cache.seconds(Gemm(t, l.routed_experts, l.d_model))? + cache.seconds(Vec_(t, l.routed_experts, VectorKind::Exp))?);
    let si = l.shared_experts * l.expert_inter;
    let shared = cache.seconds(Gemm(t, 2 * si, l.d_model))? + cache.seconds(Vec_(t, si, VectorKind::Exp))? + cache.seconds(Gemm(t, l.d_model, si))?;
    push("shared_expert", Moe, shared);

    let per_chip = l.routed_experts.div_ceil(plan.ep_degree as usize);
    let mut slowest = 0.0f64;
    for experts in routing.expert_tokens.chunks(per_chip) {
        let mut s = 0.0;
        for &n in experts {
            s += cache.seconds(Gemm(n, 2 * l.expert_inter, l.d_model))?
                + cache.seconds(Vec_(n, l.expert_inter, VectorKind::Exp))?
                + cache.seconds(Gemm(n, l.d_model, l.expert_inter))?;
        }
        slowest = slowest.max(s);
    }
    push("routed_experts", Moe, slowest);
    push("moe_residual", Vector, cache.seconds(Vec_(t, l.d_model, VectorKind::Add))?);
    Ok(out)
}

/// All-to-all completion time when every EP group of one pipeline stage
/// sends `bytes_per_copy` for each routed token copy. Chip links are
/// booked on a shared timeline (1 ns per cycle); `reverse` swaps sources
/// and destinations for the combine.
pub fn c2c_time(plan: &ParallelismPlan, wafer: &WaferConfig, routing: &Routing, bytes_per_copy: u64, reverse: bool) -> f64 {
    let ep = plan.ep_degree;
    if ep <= 1 || bytes_per_copy == 0 {
        return 0.0;
    }
    let rate = ((wafer.d2d_bandwidth * 1e-9).round() as u64).max(1);
    let hop = (wafer.d2d_latency * 1e9).round() as u64;
    let mut links = LinkTimeline::new();
    let mut end = 0u64;
    for g in 0..plan.stage_chips(wafer) / ep {
        let base = g * ep;
        // Offsets rotate so every chip talks to a different peer per round.
        for off in 1..ep {
            for s in 0..ep {
                let d = (s + off) % ep;
                let copies = routing.copies[s as usize][d as usize];
                if copies == 0 {
                    continue;
                }
                let (a, b) = if reverse { (d, s) } else { (s, d) };
                let path = route_xy(wafer.coord(base + a), wafer.coord(base + b));
                end = end.max(links.schedule_transfer(&path, 0, copies * bytes_per_copy, rate, hop));
            }
        }
    }
    end as f64 * 1e-9
}

/// Memoizing estimator for one wafer and decoder shape.
#[derive(Debug)]
pub struct WaferModel {
    pub wafer: WaferConfig,
    pub layer: DecoderLayerSpec,
    pub cache: KernelCache,
}

impl WaferModel {
    pub fn new(wafer: WaferConfig, layer: DecoderLayerSpec) -> Result<Self> {
        wafer.validate()?;
        layer.validate()?;
        let cache = KernelCache::new(wafer.chip.clone(), layer.clone());
        Ok(WaferModel { wafer, layer, cache })
    }

    pub fn reference() -> Self {
        Self::new(WaferConfig::reference(), DecoderLayerSpec::deepseek_v3()).expect("reference wafer is valid")
    }

    pub fn routing(&self, plan: &ParallelismPlan) -> Routing {
        Routing::uniform(&self.layer, plan.ep_degree, plan.batch_per_chip * plan.spec_len, plan.routing_seed)
    }

    pub fn layer_times(&mut self, plan: &ParallelismPlan, dataflow: AttentionDataflow) -> Result<LayerTimes> {
        plan.validate(&self.wafer)?;
        let routing = self.routing(plan);
        let kernels = layer_time(&self.layer, plan, dataflow, &routing, &mut self.cache)?;
        let bytes = self.layer.d_model as u64 * self.wafer.chip.dtype_bytes as u64;
        Ok(LayerTimes {
            kernels,
            dispatch_seconds: c2c_time(plan, &self.wafer, &routing, bytes, false),
            combine_seconds: c2c_time(plan, &self.wafer, &routing, bytes, true),
        })
    }

    /// Hidden-state hand-off from one pipeline stage to the next.
    fn stage_handoff(&self, plan: &ParallelismPlan) -> f64 {
        if plan.pp_degree <= 1 || plan.batch_per_chip == 0 {
            return 0.0;
        }
        let bytes = (plan.batch_per_chip * plan.spec_len * self.layer.d_model) as f64 * self.wafer.chip.dtype_bytes as f64;
        let hops = (self.wafer.chips() / plan.pp_degree).div_ceil(self.wafer.chips_x).max(1) as f64;
        bytes / self.wafer.d2d_bandwidth + hops * self.wafer.d2d_latency
    }

    pub fn serve(&mut self, plan: &ParallelismPlan, dataflow: AttentionDataflow) -> Result<ServingReport> {
        let lt = self.layer_times(plan, dataflow)?;
        let layers = plan.layers_per_stage() as f64;
        let pp = plan.pp_degree as f64;
        let handoff = self.stage_handoff(plan);
        let stage = layers * lt.total_seconds() + handoff;
        // A user's step visits every stage once; the stages meanwhile serve
        // the other micro-batches.
        let t_iter = pp * stage;
        let tps = plan.tokens_per_step();
        let chips = plan.active_chips(&self.wafer) as f64;
        let users = chips * plan.batch_per_chip as f64;
        let throughput = if t_iter > 0.0 { users * tps / t_iter } else { 0.0 };
        let c2c = pp * (layers * (lt.dispatch_seconds + lt.combine_seconds) + handoff);
        let attention = pp * layers * lt.class_seconds(KernelClass::Attention);
        let frac = |x: f64| if t_iter > 0.0 { (x / t_iter).clamp(0.0, 1.0) } else { 0.0 };
        Ok(ServingReport {
            dataflow,
            ep_degree: plan.ep_degree,
            pp_degree: plan.pp_degree,
            batch_per_chip: plan.batch_per_chip,
            layer_seconds: lt.total_seconds(),
            attention_seconds: lt.class_seconds(KernelClass::Attention),
            c2c_seconds: lt.dispatch_seconds + lt.combine_seconds,
            t_iter,
            tpot_ms: t_iter / tps * 1e3,
            system_throughput: throughput,
            per_chip_throughput: if chips > 0.0 { throughput / chips } else { 0.0 },
            c2c_fraction: frac(c2c),
            attention_fraction: frac(attention),
            active_experts: self.routing(plan).active_experts(),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn small_chip() -> ArchConfig {
        let mut a = ArchConfig::reference_fp8();
        a.noc.mesh_x = 8;
        a.noc.mesh_y = 8;
        a.hbm.num_channels = 8;
        a
    }

    fn small_model() -> WaferModel {
        let wafer = WaferConfig { chips_x: 4, chips_y: 4, d2d_bandwidth: 1e12, d2d_latency: 256e-9, chip: small_chip() };
        let layer = DecoderLayerSpec {
            d_model: 512,
            heads: 32,
            q_rank: 128,
            kv_rank: 96,
            rope_dim: 32,
            nope_dim: 32,
            v_head_dim: 32,
            routed_experts: 64,
            shared_experts: 1,
            top_k: 4,
            expert_inter: 128,
            kv_len: 512,
        };
        WaferModel::new(wafer, layer).unwrap()
    }

    fn plan(ep: u32, pp: u32, batch: usize) -> ParallelismPlan {
        ParallelismPlan { ep_degree: ep, pp_degree: pp, batch_per_chip: batch, layers: 8, spec_len: 2, acceptance_rate: 0.7, routing_seed: 3 }
    }

    #[test]
    fn two_token_speculation_yields_1_7() {
        assert!((ParallelismPlan::reference(1).tokens_per_step() - 1.7).abs() < 1e-12);
    }

    #[test]
    fn no_expert_parallelism_means_no_all_to_all() {
        let mut m = small_model();
        let r = m.serve(&plan(1, 8, 8), AttentionDataflow::FlatAttention).unwrap();
        assert_eq!(m.layer_times(&plan(1, 8, 8), AttentionDataflow::FlatAttention).unwrap().dispatch_seconds, 0.0);
        assert_eq!(r.c2c_seconds, 0.0);
        let routing = m.routing(&plan(1, 1, 8));
        assert_eq!(c2c_time(&plan(1, 1, 8), &m.wafer, &routing, 512, false), 0.0);
    }

    #[test]
    fn empty_batch_costs_only_fixed_overheads() {
        let mut m = small_model();
        let lt = m.layer_times(&plan(4, 2, 0), AttentionDataflow::FlatAttention).unwrap();
        assert_eq!(lt.kernel_seconds(), 0.0);
        assert_eq!(lt.dispatch_seconds + lt.combine_seconds, 0.0);
        let r = m.serve(&plan(4, 2, 0), AttentionDataflow::FlatAttention).unwrap();
        assert_eq!(r.system_throughput, 0.0);
    }

    #[test]
    fn doubling_traffic_doubles_bytes_not_latency() {
        let m = small_model();
        let p = plan(8, 2, 4);
        let mut r = m.routing(&p);
        let once = c2c_time(&p, &m.wafer, &r, 512, false);
        for row in &mut r.copies {
            for c in row {
                *c *= 2;
            }
        }
        let twice = c2c_time(&p, &m.wafer, &r, 512, false);
        assert!(twice > once && twice <= 2.0 * once);
    }

    #[test]
    fn capacity_is_enforced() {
        let mut m = small_model();
        m.wafer.chip.hbm.capacity_bytes = 1 << 20;
        m.cache = KernelCache::new(m.wafer.chip.clone(), m.layer.clone());
        match m.serve(&plan(1, 1, 16), AttentionDataflow::FlatAttention) {
            Err(Error::HbmCapacity { required, available }) => assert!(required > available),
            other => panic!("expected capacity error, got {other:?}"),
        }
    }

    #[test]
    fn invalid_plans_are_rejected() {
        let m = small_model();
        assert!(plan(8, 4, 1).validate(&m.wafer).is_err());
        let mut p = plan(2, 2, 1);
        p.acceptance_rate = 1.5;
        assert!(p.validate(&m.wafer).is_err());
        assert!(plan(0, 1, 1).validate(&m.wafer).is_err());
    }

    #[test]
    fn dataflow_changes_only_the_attention_kernel() {
        let mut m = small_model();
        let flat = m.serve(&plan(4, 2, 64), AttentionDataflow::FlatAttention).unwrap();
        let before = m.cache.simulations;
        let flash = m.serve(&plan(4, 2, 64), AttentionDataflow::FlashMlaLike).unwrap();
        assert_eq!(m.cache.simulations, before + 1);
        assert!((flat.layer_seconds - flat.attention_seconds - (flash.layer_seconds - flash.attention_seconds)).abs() < 1e-12);
    }

    #[test]
    fn reports_are_deterministic() {
        let a = small_model().serve(&plan(4, 2, 8), AttentionDataflow::FlatAttention).unwrap();
        let b = small_model().serve(&plan(4, 2, 8), AttentionDataflow::FlatAttention).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn dataflow_names_parse() {
        for d in AttentionDataflow::ALL {
            assert_eq!(d.name().parse::<AttentionDataflow>().unwrap(), d);
        }
        assert!("flash".parse::<AttentionDataflow>().is_err());
    }

    proptest! {
        #[test]
        fn routing_conserves_token_copies(tokens in 0usize..64, ep in prop::sample::select(vec![1u32, 2, 4, 8, 16]), seed: u64) {
            let layer = DecoderLayerSpec::deepseek_v3();
            let r = Routing::uniform(&layer, ep, tokens, seed);
            let total = ep as usize * tokens * layer.top_k;
            prop_assert_eq!(r.expert_tokens.iter().sum::<usize>(), total);
            prop_assert_eq!(r.copies.iter().flatten().sum::<u64>() as usize, total);
            prop_assert!(r.active_experts() <= total.min(layer.routed_experts));
        }
    }
}

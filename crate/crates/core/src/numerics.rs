//! Reference oracles and the online-softmax block algebra.
//!
//! Everything here works in `f64`. Softmax scaling by `1/sqrt(d)` is expected
//! to be folded into the queries beforehand (see [`fold_softmax_scale`]), so
//! [`reference_attention`] computes `softmax(Q K^T) V` on whatever it gets.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Dense row-major matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn filled(rows: usize, cols: usize, v: f64) -> Self {
        Matrix { rows, cols, data: vec![v; rows * cols] }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m[(i, i)] = 1.0;
        }
        m
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::Shape(format!(
                "{} values for a {rows}x{cols} matrix",
                data.len()
            )));
        }
        Ok(Matrix { rows, cols, data })
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                data.push(f(r, c));
            }
        }
        Matrix { rows, cols, data }
    }

    pub fn column(v: &[f64]) -> Self {
        Matrix { rows: v.len(), cols: 1, data: v.to_vec() }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn transpose(&self) -> Matrix {
        Matrix::from_fn(self.cols, self.rows, |r, c| self[(c, r)])
    }

    /// Copy of rows `r0..r0+nr`, columns `c0..c0+nc`; out-of-range cells read as `pad`.
    pub fn block(&self, r0: usize, c0: usize, nr: usize, nc: usize, pad: f64) -> Matrix {
        Matrix::from_fn(nr, nc, |r, c| {
            let (rr, cc) = (r0 + r, c0 + c);
            if rr < self.rows && cc < self.cols {
                self[(rr, cc)]
            } else {
                pad
            }
        })
    }

    /// Writes `src` at `(r0, c0)`, dropping cells that fall outside `self`.
    pub fn set_block(&mut self, r0: usize, c0: usize, src: &Matrix) {
        for r in 0..src.rows {
            let rr = r0 + r;
            if rr >= self.rows {
                break;
            }
            for c in 0..src.cols {
                let cc = c0 + c;
                if cc < self.cols {
                    self[(rr, cc)] = src[(r, c)];
                }
            }
        }
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0f64, |m, v| m.max(v.abs()))
    }

    /// Largest elementwise `|a-b|`, normalised by `max(|b|_inf, tiny)`.
    pub fn max_rel_diff(&self, other: &Matrix) -> f64 {
        assert_eq!(self.shape(), other.shape(), "shape mismatch in max_rel_diff");
        let scale = other.max_abs().max(1e-300);
        self.data
            .iter()
            .zip(&other.data)
            .fold(0.0f64, |m, (a, b)| m.max((a - b).abs()))
            / scale
    }
}

impl std::ops::Index<(usize, usize)> for Matrix {
    type Output = f64;
    fn index(&self, (r, c): (usize, usize)) -> &f64 {
        &self.data[r * self.cols + c]
    }
}

impl std::ops::IndexMut<(usize, usize)> for Matrix {
    fn index_mut(&mut self, (r, c): (usize, usize)) -> &mut f64 {
        &mut self.data[r * self.cols + c]
    }
}

/// `C (+)= A · op(B)` where `op(B)` is `B^T` when `b_transposed`.
pub fn matmul_into(a: &Matrix, b: &Matrix, b_transposed: bool, c: &mut Matrix, accumulate: bool) -> Result<()> {
    let (k_b, n) = if b_transposed { (b.cols, b.rows) } else { (b.rows, b.cols) };
    if a.cols != k_b || c.rows != a.rows || c.cols != n {
        return Err(Error::Shape(format!(
            "{}x{} · {}{}x{} into {}x{}",
            a.rows,
            a.cols,
            if b_transposed { "T " } else { "" },
            b.rows,
            b.cols,
            c.rows,
            c.cols
        )));
    }
    if !accumulate {
        c.data.iter_mut().for_each(|v| *v = 0.0);
    }
    for i in 0..a.rows {
        let arow = a.row(i);
        if b_transposed {
            for j in 0..n {
                let brow = b.row(j);
                let dot: f64 = arow.iter().zip(brow).map(|(x, y)| x * y).sum();
                c[(i, j)] += dot;
            }
        } else {
            let crow = &mut c.data[i * n..(i + 1) * n];
            for (kk, &aik) in arow.iter().enumerate() {
                if aik == 0.0 {
                    continue;
                }
                let brow = &b.data[kk * n..(kk + 1) * n];
                for (cv, bv) in crow.iter_mut().zip(brow) {
                    *cv += aik * bv;
                }
            }
        }
    }
    Ok(())
}

/// Exact dense product.
pub fn reference_gemm(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    let mut c = Matrix::zeros(a.rows, b.cols);
    matmul_into(a, b, false, &mut c, false)?;
    Ok(c)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttentionVariant {
    MhaPrefill,
    MhaDecode,
    MhaSpecDecode,
    GqaDecode,
    MlaDecodeAbsorbed,
}

impl AttentionVariant {
    pub fn name(self) -> &'static str {
        match self {
            AttentionVariant::MhaPrefill => "mha_prefill",
            AttentionVariant::MhaDecode => "mha_decode",
            AttentionVariant::MhaSpecDecode => "mha_spec_decode",
            AttentionVariant::GqaDecode => "gqa_decode",
            AttentionVariant::MlaDecodeAbsorbed => "mla_decode_absorbed",
        }
    }
}

/// Shape description of one attention kernel invocation.
///
/// For MLA the key width is `latent_rank + rope_dim` and the value width is
/// `latent_rank`; all heads share the single latent KV stream.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct AttentionWorkload {
    pub variant: AttentionVariant,
    pub batch: usize,
    pub heads: usize,
    pub s_q: usize,
    pub s_kv: usize,
    pub head_dim: usize,
    #[serde(default = "one")]
    pub gqa_group: usize,
    #[serde(default)]
    pub latent_rank: usize,
    #[serde(default)]
    pub rope_dim: usize,
    #[serde(default = "one")]
    pub spec_len: usize,
    #[serde(default)]
    pub causal: bool,
    #[serde(default = "two")]
    pub dtype_bytes: usize,
}

fn one() -> usize {
    1
}

fn two() -> usize {
    2
}

impl AttentionWorkload {
    pub fn mha_prefill(batch: usize, heads: usize, s: usize, d: usize) -> Self {
        AttentionWorkload {
            variant: AttentionVariant::MhaPrefill,
            batch,
            heads,
            s_q: s,
            s_kv: s,
            head_dim: d,
            gqa_group: 1,
            latent_rank: 0,
            rope_dim: 0,
            spec_len: 1,
            causal: false,
            dtype_bytes: 2,
        }
    }

    pub fn mha_decode(batch: usize, heads: usize, s_kv: usize, d: usize) -> Self {
        AttentionWorkload {
            variant: AttentionVariant::MhaDecode,
            s_q: 1,
            s_kv,
            ..Self::mha_prefill(batch, heads, s_kv, d)
        }
    }

    pub fn spec_decode(batch: usize, heads: usize, s_kv: usize, d: usize, spec_len: usize) -> Self {
        AttentionWorkload {
            variant: AttentionVariant::MhaSpecDecode,
            s_q: spec_len,
            spec_len,
            causal: true,
            ..Self::mha_decode(batch, heads, s_kv, d)
        }
    }

    pub fn gqa_decode(batch: usize, heads: usize, group: usize, s_kv: usize, d: usize) -> Self {
        AttentionWorkload {
            variant: AttentionVariant::GqaDecode,
            gqa_group: group,
            ..Self::mha_decode(batch, heads, s_kv, d)
        }
    }

    /// Absorbed MLA decode; `spec_len` query tokens per user, causal across them.
    pub fn mla_decode(
        batch: usize,
        heads: usize,
        s_kv: usize,
        latent_rank: usize,
        rope_dim: usize,
        spec_len: usize,
    ) -> Self {
        AttentionWorkload {
            variant: AttentionVariant::MlaDecodeAbsorbed,
            batch,
            heads,
            s_q: spec_len,
            s_kv,
            head_dim: latent_rank + rope_dim,
            gqa_group: heads,
            latent_rank,
            rope_dim,
            spec_len,
            causal: spec_len > 1,
            dtype_bytes: 2,
        }
    }

    pub fn with_dtype(mut self, bytes: usize) -> Self {
        self.dtype_bytes = bytes;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Contract(format!("{}: {m}", self.variant.name())));
        if self.batch == 0 || self.heads == 0 || self.s_kv == 0 || self.s_q == 0 || self.head_dim == 0 {
            return bad("batch, heads, s_q, s_kv and head_dim must be ≥ 1");
        }
        if self.dtype_bytes == 0 {
            return bad("dtype_bytes ≥ 1");
        }
        match self.variant {
            AttentionVariant::MhaDecode if self.s_q != 1 => bad("S_q = 1 for MHA decode"),
            AttentionVariant::MhaSpecDecode if self.s_q != self.spec_len => bad("S_q = spec_len"),
            AttentionVariant::GqaDecode if self.gqa_group == 0 || self.heads % self.gqa_group != 0 => {
                bad("H mod G = 0")
            }
            AttentionVariant::MlaDecodeAbsorbed if self.latent_rank == 0 => bad("d_c > 0"),
            AttentionVariant::MlaDecodeAbsorbed if self.head_dim != self.latent_rank + self.rope_dim => {
                bad("head_dim = d_c + rope_dim")
            }
            AttentionVariant::MlaDecodeAbsorbed if self.s_q != self.spec_len => bad("S_q = spec_len"),
            _ => Ok(()),
        }
    }

    /// Number of distinct K/V streams per batch entry.
    pub fn kv_heads(&self) -> usize {
        match self.variant {
            AttentionVariant::GqaDecode => self.heads / self.gqa_group,
            AttentionVariant::MlaDecodeAbsorbed => 1,
            _ => self.heads,
        }
    }

    /// Query heads sharing one K/V stream.
    pub fn heads_per_kv(&self) -> usize {
        self.heads / self.kv_heads()
    }

    pub fn qk_dim(&self) -> usize {
        self.head_dim
    }

    pub fn v_dim(&self) -> usize {
        match self.variant {
            AttentionVariant::MlaDecodeAbsorbed => self.latent_rank,
            _ => self.head_dim,
        }
    }

    /// First unmasked key offset: query row `i` may see keys `j <= i + causal_offset()`.
    pub fn causal_offset(&self) -> usize {
        self.s_kv.saturating_sub(self.s_q)
    }

    /// Multiply-accumulates of the two attention GEMMs (dense, no masking).
    pub fn macs(&self) -> u64 {
        (self.batch * self.heads * self.s_q * self.s_kv * (self.qk_dim() + self.v_dim())) as u64
    }
}

/// Input tensors of [`reference_attention`].
///
/// `q[b * H + h]` is `S_q × qk_dim`; `k[b * H_kv + g]` is `S_kv × qk_dim` and
/// `v[b * H_kv + g]` is `S_kv × v_dim`, where `H_kv = workload.kv_heads()` and
/// head `h` reads stream `g = h / heads_per_kv`.
#[derive(Debug, Clone)]
pub struct AttentionTensors {
    pub q: Vec<Matrix>,
    pub k: Vec<Matrix>,
    pub v: Vec<Matrix>,
}

impl AttentionTensors {
    pub fn check(&self, w: &AttentionWorkload) -> Result<()> {
        w.validate()?;
        let hk = w.kv_heads();
        if self.q.len() != w.batch * w.heads || self.k.len() != w.batch * hk || self.v.len() != w.batch * hk {
            return Err(Error::Contract("tensor count does not match workload".into()));
        }
        for q in &self.q {
            if q.shape() != (w.s_q, w.qk_dim()) {
                return Err(Error::Contract(format!("Q shape {:?}", q.shape())));
            }
        }
        for (k, v) in self.k.iter().zip(&self.v) {
            if k.shape() != (w.s_kv, w.qk_dim()) || v.shape() != (w.s_kv, w.v_dim()) {
                return Err(Error::Contract(format!("K/V shape {:?}/{:?}", k.shape(), v.shape())));
            }
        }
        Ok(())
    }

    pub fn kv_index(w: &AttentionWorkload, b: usize, h: usize) -> usize {
        b * w.kv_heads() + h / w.heads_per_kv()
    }
}

/// Scales every query by `1/sqrt(d)`.
pub fn fold_softmax_scale(q: &mut Matrix, d: usize) {
    let s = 1.0 / (d as f64).sqrt();
    q.data_mut().iter_mut().for_each(|v| *v *= s);
}

/// Monolithic softmax attention. Returns `(B·S_q) × (H·v_dim)` with heads
/// concatenated along columns.
pub fn reference_attention(w: &AttentionWorkload, t: &AttentionTensors) -> Result<Matrix> {
    t.check(w)?;
    let dv = w.v_dim();
    let mut out = Matrix::zeros(w.batch * w.s_q, w.heads * dv);
    let offset = w.causal_offset();
    for b in 0..w.batch {
        for h in 0..w.heads {
            let q = &t.q[b * w.heads + h];
            let g = AttentionTensors::kv_index(w, b, h);
            let (k, v) = (&t.k[g], &t.v[g]);
            let mut scores = Matrix::zeros(w.s_q, w.s_kv);
            matmul_into(q, k, true, &mut scores, false)?;
            if w.causal {
                apply_causal_mask(&mut scores, 0, 0, offset);
            }
            let probs = softmax_rows(&scores);
            let o = reference_gemm(&probs, v)?;
            out.set_block(b * w.s_q, h * dv, &o);
        }
    }
    Ok(out)
}

/// Masks `scores` in place: local cell `(r, c)` sits at query row `row0 + r`
/// and key column `col0 + c`; keys beyond `query + offset` become `-inf`.
pub fn apply_causal_mask(scores: &mut Matrix, row0: usize, col0: usize, offset: usize) {
    for r in 0..scores.rows {
        let limit = row0 + r + offset;
        for c in 0..scores.cols {
            if col0 + c > limit {
                scores[(r, c)] = f64::NEG_INFINITY;
            }
        }
    }
}

/// Row softmax; all-masked rows produce all-zero weights.
pub fn softmax_rows(s: &Matrix) -> Matrix {
    let mut p = s.clone();
    for r in 0..p.rows {
        let row = p.row_mut(r);
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        if m == f64::NEG_INFINITY {
            row.iter_mut().for_each(|v| *v = 0.0);
            continue;
        }
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = (*v - m).exp();
            sum += *v;
        }
        row.iter_mut().for_each(|v| *v /= sum);
    }
    p
}

/// `exp(x - m)` with masked scores contributing zero.
#[inline]
pub fn exp_shifted(x: f64, m: f64) -> f64 {
    if x == f64::NEG_INFINITY {
        0.0
    } else {
        (x - m).exp()
    }
}

/// Rescale factor `exp(m_old - m_new)`; zero when nothing was accumulated yet.
#[inline]
pub fn rescale_factor(m_old: f64, m_new: f64) -> f64 {
    if m_old == f64::NEG_INFINITY {
        0.0
    } else {
        (m_old - m_new).exp()
    }
}

/// Running `(m, ℓ, A)` statistics of a streaming softmax.
#[derive(Debug, Clone, PartialEq)]
pub struct SoftmaxState {
    pub row_max: Vec<f64>,
    pub row_denom: Vec<f64>,
    pub accum: Matrix,
}

impl SoftmaxState {
    pub fn new(rows: usize, v_cols: usize) -> Self {
        SoftmaxState {
            row_max: vec![f64::NEG_INFINITY; rows],
            row_denom: vec![0.0; rows],
            accum: Matrix::zeros(rows, v_cols),
        }
    }

    pub fn rows(&self) -> usize {
        self.row_max.len()
    }

    /// `A / ℓ` per row; rows that never saw an unmasked score stay zero.
    pub fn finalize(&self) -> Matrix {
        let mut o = self.accum.clone();
        for r in 0..o.rows {
            let l = self.row_denom[r];
            let row = o.row_mut(r);
            if l > 0.0 {
                row.iter_mut().for_each(|v| *v /= l);
            } else {
                row.iter_mut().for_each(|v| *v = 0.0);
            }
        }
        o
    }
}

/// Folds one key block into the running state.
///
/// `m' = max(m, rowmax S)`, `ℓ' = e^{m-m'}ℓ + rowsum e^{S-m'}`,
/// `A' = diag(e^{m-m'}) A + e^{S-m'} V`.
pub fn online_softmax_update(state: SoftmaxState, scores: &Matrix, v: &Matrix) -> Result<SoftmaxState> {
    let mut st = state;
    if scores.rows != st.rows() || scores.cols != v.rows || v.cols != st.accum.cols {
        return Err(Error::Shape(format!(
            "state {}x{}, scores {:?}, v {:?}",
            st.rows(),
            st.accum.cols,
            scores.shape(),
            v.shape()
        )));
    }
    let mut p = Matrix::zeros(scores.rows, scores.cols);
    for r in 0..scores.rows {
        let srow = scores.row(r);
        let m_old = st.row_max[r];
        let m_new = srow.iter().cloned().fold(m_old, f64::max);
        let alpha = rescale_factor(m_old, m_new);
        let prow = p.row_mut(r);
        let mut sum = 0.0;
        for (pv, &s) in prow.iter_mut().zip(srow) {
            *pv = if m_new == f64::NEG_INFINITY { 0.0 } else { exp_shifted(s, m_new) };
            sum += *pv;
        }
        st.row_denom[r] = alpha * st.row_denom[r] + sum;
        st.row_max[r] = m_new;
        st.accum.row_mut(r).iter_mut().for_each(|a| *a *= alpha);
    }
    matmul_into(&p, v, false, &mut st.accum, true)?;
    Ok(st)
}

/// Merges per-tile partial states that cover disjoint key ranges.
pub fn distributed_softmax_merge(partials: &[SoftmaxState]) -> Result<SoftmaxState> {
    let first = partials
        .first()
        .ok_or_else(|| Error::Contract("merge of an empty partial list".into()))?;
    if partials.len() == 1 {
        return Ok(first.clone());
    }
    let rows = first.rows();
    let cols = first.accum.cols;
    if partials.iter().any(|p| p.rows() != rows || p.accum.cols != cols) {
        return Err(Error::Shape("partials disagree on shape".into()));
    }
    let mut out = SoftmaxState::new(rows, cols);
    for r in 0..rows {
        let m = partials.iter().map(|p| p.row_max[r]).fold(f64::NEG_INFINITY, f64::max);
        out.row_max[r] = m;
        let orow = out.accum.row_mut(r);
        let mut l = 0.0;
        for p in partials {
            let f = if m == f64::NEG_INFINITY { 0.0 } else { rescale_factor(p.row_max[r], m) };
            l += f * p.row_denom[r];
            for (o, a) in orow.iter_mut().zip(p.accum.row(r)) {
                *o += f * a;
            }
        }
        out.row_denom[r] = l;
    }
    Ok(out)
}

/// `W^UQK = W^UQ · W^UK^T` for one head (`d_c' × D` times `(d_c × D)^T`).
pub fn absorb_mla_weights(w_uq: &Matrix, w_uk: &Matrix) -> Result<Matrix> {
    if w_uq.cols != w_uk.cols {
        return Err(Error::Shape(format!(
            "W_uq {:?} and W_uk {:?} must share the head dimension",
            w_uq.shape(),
            w_uk.shape()
        )));
    }
    let mut out = Matrix::zeros(w_uq.rows, w_uk.rows);
    matmul_into(w_uq, w_uk, true, &mut out, false)?;
    Ok(out)
}

/// Rotary embedding on consecutive (even, odd) column pairs; row `r` sits at
/// position `positions[r]`.
pub fn apply_rope(x: &mut Matrix, positions: &[usize], base: f64) -> Result<()> {
    if positions.len() != x.rows || x.cols % 2 != 0 {
        return Err(Error::Shape("RoPE needs one position per row and an even width".into()));
    }
    let d = x.cols;
    for (r, &pos) in positions.iter().enumerate() {
        let row = x.row_mut(r);
        for i in 0..d / 2 {
            let theta = pos as f64 * base.powf(-2.0 * i as f64 / d as f64);
            let (s, c) = theta.sin_cos();
            let (a, b) = (row[2 * i], row[2 * i + 1]);
            row[2 * i] = a * c - b * s;
            row[2 * i + 1] = a * s + b * c;
        }
    }
    Ok(())
}

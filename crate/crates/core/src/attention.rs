//! Multi-headed self-attention: the dense reference, the incremental kernels
//! and the per-stream state that strings them together.
//!
//! Incremental attention keeps three kinds of state per head:
//!
//! * the raw score matrix `B = q·kᵀ`, patched row-wise for updated queries
//!   and column-wise for updated keys ([`qk_sparse_update`]);
//! * a column-axis [`DeltaGate`] over the attention matrix `A = softmax(B/√d_h)`;
//! * the cached product `A·v`, advanced with the delta identity
//!   `A_n v_n = A_o v_o + Ã_n ṽ_Δ + Ã_Δ (ṽ_n − ṽ_Δ)` ([`av_delta_update`]).
//!
//! Scores are stored unscaled; the `1/√d_h` factor is applied inside the
//! softmax.

use crate::cost::CostLedger;
use crate::error::{shape_err, Error, Result};
use crate::gating::{Axis, Buffer, DeltaGate, Policy};
use crate::index::IndexSet;
use crate::tensor::{linear, softmax_rows_in_place, Matrix};

#[derive(Debug, Clone, PartialEq)]
pub struct AttentionWeights {
    pub wq: Matrix,
    pub wk: Matrix,
    pub wv: Matrix,
    pub wp: Matrix,
    pub bq: Vec<f64>,
    pub bk: Vec<f64>,
    pub bv: Vec<f64>,
    pub bp: Vec<f64>,
    pub heads: usize,
}

impl AttentionWeights {
    pub fn dim(&self) -> usize {
        self.wq.rows()
    }

    pub fn head_dim(&self) -> usize {
        self.dim() / self.heads
    }

    pub fn validate(&self) -> Result<()> {
        let d = self.dim();
        if self.heads == 0 || !d.is_multiple_of(self.heads) {
            return Err(Error::Config(format!(
                "dim {d} is not divisible by {} heads",
                self.heads
            )));
        }
        for (name, w) in [("wq", &self.wq), ("wk", &self.wk), ("wv", &self.wv), ("wp", &self.wp)] {
            if w.shape() != (d, d) {
                return Err(shape_err(name, format!("{d}x{d}"), format!("{}x{}", w.rows(), w.cols())));
            }
        }
        for (name, b) in [("bq", &self.bq), ("bk", &self.bk), ("bv", &self.bv), ("bp", &self.bp)] {
            if b.len() != d {
                return Err(shape_err(name, d, b.len()));
            }
        }
        Ok(())
    }
}

/// Splits columns into `heads` contiguous slices.
pub fn head_split(x: &Matrix, heads: usize) -> Result<Vec<Matrix>> {
    if heads == 0 || !x.cols().is_multiple_of(heads) {
        return Err(Error::Config(format!(
            "width {} is not divisible by {heads} heads",
            x.cols()
        )));
    }
    let w = x.cols() / heads;
    (0..heads).map(|h| x.col_slice(h * w, w)).collect()
}

pub fn head_merge(parts: &[Matrix]) -> Result<Matrix> {
    Matrix::hconcat(parts)
}

fn scale_for(head_dim: usize) -> f64 {
    1.0 / (head_dim as f64).sqrt()
}

/// Attention probabilities `softmax(scores / √head_dim)`.
pub fn attention_probs(scores: &Matrix, head_dim: usize) -> Matrix {
    let mut a = scores.clone();
    softmax_rows_in_place(&mut a, scale_for(head_dim));
    a
}

fn project_qkv(x: &Matrix, w: &AttentionWeights, ledger: &mut CostLedger) -> Result<(Matrix, Matrix, Matrix)> {
    let d = w.dim();
    let q = linear(x, &w.wq, Some(&w.bq))?;
    let k = linear(x, &w.wk, Some(&w.bk))?;
    let v = linear(x, &w.wv, Some(&w.bv))?;
    ledger.token_wise(3 * x.rows() * d * d);
    Ok((q, k, v))
}

fn dense_heads(q: &Matrix, k: &Matrix, v: &Matrix, heads: usize, ledger: &mut CostLedger) -> Result<Matrix> {
    let qs = head_split(q, heads)?;
    let ks = head_split(k, heads)?;
    let vs = head_split(v, heads)?;
    let dh = q.cols() / heads;
    let mut outs = Vec::with_capacity(heads);
    for ((qh, kh), vh) in qs.iter().zip(&ks).zip(&vs) {
        let a = attention_probs(&qh.matmul_t(kh)?, dh);
        ledger.qk(qh.rows() * kh.rows() * dh);
        ledger.nonlinear(qh.rows() * kh.rows());
        outs.push(a.matmul(vh)?);
        ledger.av(qh.rows() * kh.rows() * dh);
    }
    head_merge(&outs)
}

/// Dense multi-headed self-attention on already-normalized tokens, including
/// the output projection.
pub fn msa_baseline(x: &Matrix, w: &AttentionWeights, ledger: &mut CostLedger) -> Result<Matrix> {
    w.validate()?;
    if x.cols() != w.dim() {
        return Err(shape_err("msa", w.dim(), x.cols()));
    }
    let (q, k, v) = project_qkv(x, w, ledger)?;
    let merged = dense_heads(&q, &k, &v, w.heads, ledger)?;
    let d = w.dim();
    ledger.token_wise(x.rows() * d * d);
    linear(&merged, &w.wp, Some(&w.bp))
}

/// Dense attention with keys and values mean-pooled over `pool × pool` patches.
pub fn msa_pooled_baseline(x: &Matrix, w: &AttentionWeights, pool: usize, ledger: &mut CostLedger) -> Result<Matrix> {
    w.validate()?;
    let (q, k, v) = project_qkv(x, w, ledger)?;
    let k = pool_tokens(&k, pool)?;
    let v = pool_tokens(&v, pool)?;
    let merged = dense_heads(&q, &k, &v, w.heads, ledger)?;
    let d = w.dim();
    ledger.token_wise(x.rows() * d * d);
    linear(&merged, &w.wp, Some(&w.bp))
}

fn check_qk_args(
    scores: &Matrix,
    q: &Matrix,
    k: &Matrix,
    q_sel: &Matrix,
    k_sel: &Matrix,
    rows: &IndexSet,
    cols: &IndexSet,
) -> Result<()> {
    if scores.shape() != (q.rows(), k.rows()) {
        return Err(shape_err(
            "qk_update",
            format!("{}x{} scores", q.rows(), k.rows()),
            format!("{}x{}", scores.rows(), scores.cols()),
        ));
    }
    rows.check_bounds(q.rows())?;
    cols.check_bounds(k.rows())?;
    if q_sel.rows() != rows.len() || k_sel.rows() != cols.len() {
        return Err(shape_err(
            "qk_update",
            format!("{} query / {} key rows", rows.len(), cols.len()),
            format!("{} / {}", q_sel.rows(), k_sel.rows()),
        ));
    }
    let w = q.cols();
    if k.cols() != w || q_sel.cols() != w || k_sel.cols() != w {
        return Err(shape_err("qk_update", format!("width {w}"), "mismatched head widths"));
    }
    Ok(())
}

/// Patches `scores` after the query rows at `rows` and the key rows at `cols`
/// changed. `q` and `k` are the already-updated buffers; `q_sel`/`k_sel` are
/// their gathered rows. Returns the MACs spent (`M·K·d + N·M_k·d`).
pub fn qk_sparse_update(
    scores: &mut Matrix,
    q: &Matrix,
    k: &Matrix,
    q_sel: &Matrix,
    k_sel: &Matrix,
    rows: &IndexSet,
    cols: &IndexSet,
) -> Result<usize> {
    check_qk_args(scores, q, k, q_sel, k_sel, rows, cols)?;
    let d = q.cols();
    let mut macs = 0;
    if !rows.is_empty() {
        scores.scatter_rows(rows, &q_sel.matmul_t(k)?)?;
        macs += rows.len() * k.rows() * d;
    }
    if !cols.is_empty() {
        scores.scatter_cols(cols, &q.matmul_t(k_sel)?)?;
        macs += q.rows() * cols.len() * d;
    }
    Ok(macs)
}

/// Same result as [`qk_sparse_update`] without recomputing the overlap block:
/// the column pass only covers query rows outside `rows`.
pub fn qk_sparse_update_nonoverlap(
    scores: &mut Matrix,
    q: &Matrix,
    k: &Matrix,
    q_sel: &Matrix,
    k_sel: &Matrix,
    rows: &IndexSet,
    cols: &IndexSet,
) -> Result<usize> {
    check_qk_args(scores, q, k, q_sel, k_sel, rows, cols)?;
    let d = q.cols();
    let mut macs = 0;
    if !rows.is_empty() {
        scores.scatter_rows(rows, &q_sel.matmul_t(k)?)?;
        macs += rows.len() * k.rows() * d;
    }
    let rest = rows.complement(q.rows());
    if !cols.is_empty() && !rest.is_empty() {
        let block = q.gather_rows(&rest)?.matmul_t(k_sel)?;
        scores.scatter_block(&rest, cols, &block)?;
        macs += rest.len() * cols.len() * d;
    }
    Ok(macs)
}

/// Advances `cache ≈ A·v` after the value rows at `idx` changed.
///
/// `a_full` is this frame's attention matrix; the column gate is forced to
/// `idx` so its deltas line up with `v_delta` (`M×d`, new minus old) and
/// `v_new` (`M×d`, current reference rows). Afterwards `cache` equals
/// `u_A · u_v` where `u_A` is the gate reference.
pub fn av_delta_update(
    cache: &mut Matrix,
    a_gate: &mut DeltaGate,
    a_full: &Matrix,
    idx: &IndexSet,
    v_delta: &Matrix,
    v_new: &Matrix,
    ledger: &mut CostLedger,
) -> Result<()> {
    if !a_gate.is_initialized() {
        return Err(Error::NotFlushed("attention gate"));
    }
    if a_gate.axis() != Axis::Cols {
        return Err(Error::Config("attention gate must gate columns".into()));
    }
    if v_delta.shape() != v_new.shape() || v_delta.rows() != idx.len() {
        return Err(shape_err(
            "av_delta_update",
            format!("{} value rows", idx.len()),
            format!("{}x{} / {}x{}", v_delta.rows(), v_delta.cols(), v_new.rows(), v_new.cols()),
        ));
    }
    if cache.shape() != (a_full.rows(), v_delta.cols()) {
        return Err(shape_err(
            "av_delta_update",
            format!("{}x{} cache", a_full.rows(), v_delta.cols()),
            format!("{}x{}", cache.rows(), cache.cols()),
        ));
    }
    let (u, a_delta) = a_gate.forced(a_full, idx)?;
    if idx.is_empty() {
        return Ok(());
    }
    let (n, m, d) = (a_full.rows(), idx.len(), v_delta.cols());
    ledger.adds(n * m);

    let a_new = u.gather_cols(idx)?;
    let mut update = a_new.matmul(v_delta)?;
    let v_old = v_new.sub(v_delta)?;
    update.add_assign(&a_delta.matmul(&v_old)?)?;
    cache.add_assign(&update)?;
    ledger.av(2 * n * m * d);
    ledger.adds(m * d + 2 * n * d);
    Ok(())
}

fn grid_side(tokens: usize) -> Result<usize> {
    let side = (tokens as f64).sqrt().round() as usize;
    if side * side != tokens {
        return Err(Error::Config(format!("{tokens} tokens do not form a square grid")));
    }
    Ok(side)
}

fn pooled_side(tokens: usize, pool: usize) -> Result<(usize, usize)> {
    let side = grid_side(tokens)?;
    if pool == 0 || side % pool != 0 {
        return Err(Error::Config(format!(
            "pool size {pool} does not divide grid side {side}"
        )));
    }
    Ok((side, side / pool))
}

/// Pooled positions whose patch contains at least one index of `mask`
/// (max-pooling of the binary mask).
pub fn pool_mask(mask: &IndexSet, tokens: usize, pool: usize) -> Result<IndexSet> {
    let (side, out_side) = pooled_side(tokens, pool)?;
    mask.check_bounds(tokens)?;
    let pooled: Vec<usize> = mask
        .iter()
        .map(|i| (i / side / pool) * out_side + (i % side) / pool)
        .collect();
    IndexSet::from_unsorted(pooled, out_side * out_side)
}

/// Mean of each `pool × pool` patch at the given pooled positions.
pub fn pool_tokens_at(x: &Matrix, pool: usize, positions: &IndexSet) -> Result<Matrix> {
    let (side, out_side) = pooled_side(x.rows(), pool)?;
    positions.check_bounds(out_side * out_side)?;
    let d = x.cols();
    let inv = 1.0 / (pool * pool) as f64;
    let mut out = Matrix::zeros(positions.len(), d);
    for (j, p) in positions.iter().enumerate() {
        let (pr, pc) = (p / out_side, p % out_side);
        let dst = out.row_mut(j);
        for r in pr * pool..(pr + 1) * pool {
            for c in pc * pool..(pc + 1) * pool {
                for (o, v) in dst.iter_mut().zip(x.row(r * side + c)) {
                    *o += v;
                }
            }
        }
        for o in dst.iter_mut() {
            *o *= inv;
        }
    }
    Ok(out)
}

/// Mean-pools tokens laid out row-major on a square grid.
pub fn pool_tokens(x: &Matrix, pool: usize) -> Result<Matrix> {
    let (_, out_side) = pooled_side(x.rows(), pool)?;
    pool_tokens_at(x, pool, &IndexSet::all(out_side * out_side))
}

/// Pooled keys and values plus the pooled positions touched by `mask`.
pub fn pooled_kv(k: &Matrix, v: &Matrix, mask: &IndexSet, pool: usize) -> Result<(Matrix, Matrix, IndexSet)> {
    if k.rows() != v.rows() {
        return Err(shape_err("pooled_kv", k.rows(), v.rows()));
    }
    Ok((pool_tokens(k, pool)?, pool_tokens(v, pool)?, pool_mask(mask, k.rows(), pool)?))
}

/// Largest entrywise deviation of the incremental state from its from-scratch value.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct InvariantReport {
    pub qk_max_abs: f64,
    pub av_max_abs: f64,
}

/// Buffers, gates and caches of one attention layer for one stream.
#[derive(Debug, Clone)]
pub struct AttentionState {
    tokens: usize,
    dim: usize,
    heads: usize,
    pool: usize,
    incremental: bool,
    q_buf: Buffer,
    k_buf: Buffer,
    v_buf: Buffer,
    pooled_k: Buffer,
    pooled_v: Buffer,
    scores: Vec<Matrix>,
    a_gates: Vec<DeltaGate>,
    v_gate: DeltaGate,
    av_cache: Vec<Matrix>,
    last_kv_selection: IndexSet,
    flushed: bool,
}

impl AttentionState {
    /// `pool = 1` disables key/value pooling. With `incremental = false` the
    /// two products are recomputed from the buffers every frame.
    pub fn new(tokens: usize, dim: usize, heads: usize, pool: usize, incremental: bool, policy: Policy) -> Result<Self> {
        if heads == 0 || !dim.is_multiple_of(heads) {
            return Err(Error::Config(format!("dim {dim} is not divisible by {heads} heads")));
        }
        let kv_tokens = if pool > 1 {
            let (_, s) = pooled_side(tokens, pool)?;
            s * s
        } else {
            tokens
        };
        Ok(Self {
            tokens,
            dim,
            heads,
            pool,
            incremental,
            q_buf: Buffer::new(tokens),
            k_buf: Buffer::new(tokens),
            v_buf: Buffer::new(tokens),
            pooled_k: Buffer::new(kv_tokens),
            pooled_v: Buffer::new(kv_tokens),
            scores: Vec::new(),
            a_gates: (0..heads).map(|_| DeltaGate::with_axis(policy, Axis::Cols)).collect(),
            v_gate: DeltaGate::new(policy),
            av_cache: Vec::new(),
            last_kv_selection: IndexSet::empty(),
            flushed: false,
        })
    }

    pub fn set_policy(&mut self, policy: Policy) {
        self.v_gate.set_policy(policy);
        for g in &mut self.a_gates {
            g.set_policy(policy);
        }
    }

    pub fn is_flushed(&self) -> bool {
        self.flushed
    }

    pub fn heads(&self) -> usize {
        self.heads
    }

    pub fn kv_tokens(&self) -> usize {
        self.pooled_k.tokens()
    }

    fn pooled(&self) -> bool {
        self.pool > 1
    }

    pub fn q_buffer(&self) -> Option<&Matrix> {
        self.q_buf.state()
    }

    /// Keys the queries attend to (pooled when pooling is on).
    pub fn key_source(&self) -> Option<&Matrix> {
        if self.pooled() {
            self.pooled_k.state()
        } else {
            self.k_buf.state()
        }
    }

    pub fn value_source(&self) -> Option<&Matrix> {
        if self.pooled() {
            self.pooled_v.state()
        } else {
            self.v_buf.state()
        }
    }

    pub fn scores(&self, head: usize) -> Option<&Matrix> {
        self.scores.get(head)
    }

    pub fn av_cache(&self, head: usize) -> Option<&Matrix> {
        self.av_cache.get(head)
    }

    pub fn attention_reference(&self, head: usize) -> Option<&Matrix> {
        self.a_gates.get(head).and_then(|g| g.reference())
    }

    pub fn value_reference(&self) -> Option<&Matrix> {
        self.v_gate.reference()
    }

    /// Tokens forwarded by the value gate on the last frame.
    pub fn last_value_selection(&self) -> &IndexSet {
        self.v_gate.last_mask()
    }

    /// Key/value positions refreshed on the last frame.
    pub fn last_kv_selection(&self) -> &IndexSet {
        &self.last_kv_selection
    }

    /// Runs one frame. `x_sel` holds the normalized tokens at `idx` (all
    /// tokens on the first frame). Returns the merged per-head `A·v`, before
    /// the output projection.
    pub fn forward(&mut self, w: &AttentionWeights, x_sel: &Matrix, idx: &IndexSet, ledger: &mut CostLedger) -> Result<Matrix> {
        if w.dim() != self.dim || w.heads != self.heads {
            return Err(shape_err(
                "attention",
                format!("dim {} / {} heads", self.dim, self.heads),
                format!("dim {} / {} heads", w.dim(), w.heads),
            ));
        }
        if !self.flushed && !idx.is_full(self.tokens) {
            return Err(Error::PartialFlush {
                expected: self.tokens,
                actual: idx.len(),
            });
        }
        let (q_sel, k_sel, v_sel) = project_qkv(x_sel, w, ledger)?;
        self.q_buf.forward(idx, &q_sel)?;
        let k_full = self.k_buf.forward(idx, &k_sel)?.clone();
        let v_full = self.v_buf.forward(idx, &v_sel)?.clone();

        let (k_sel, kv_idx) = if self.pooled() {
            let kv_idx = pool_mask(idx, self.tokens, self.pool)?;
            let pk = pool_tokens_at(&k_full, self.pool, &kv_idx)?;
            let pv = pool_tokens_at(&v_full, self.pool, &kv_idx)?;
            ledger.adds(2 * kv_idx.len() * self.pool * self.pool * self.dim);
            self.pooled_k.forward(&kv_idx, &pk)?;
            self.pooled_v.forward(&kv_idx, &pv)?;
            (pk, kv_idx)
        } else {
            (k_sel, idx.clone())
        };
        self.last_kv_selection = kv_idx.clone();

        let out = if !self.incremental {
            self.dense_frame(ledger)?
        } else if !self.flushed {
            self.flush_frame(ledger)?
        } else {
            self.sparse_frame(&q_sel, &k_sel, idx, &kv_idx, ledger)?
        };
        self.flushed = true;
        Ok(out)
    }

    fn split_sources(&self) -> Result<(Vec<Matrix>, Vec<Matrix>, Vec<Matrix>)> {
        let q = self.q_buf.state().ok_or(Error::NotFlushed("query buffer"))?;
        let k = self.key_source().ok_or(Error::NotFlushed("key buffer"))?;
        let v = self.value_source().ok_or(Error::NotFlushed("value buffer"))?;
        Ok((head_split(q, self.heads)?, head_split(k, self.heads)?, head_split(v, self.heads)?))
    }

    fn dense_frame(&mut self, ledger: &mut CostLedger) -> Result<Matrix> {
        let q = self.q_buf.state().ok_or(Error::NotFlushed("query buffer"))?;
        let k = self.key_source().ok_or(Error::NotFlushed("key buffer"))?;
        let v = self.value_source().ok_or(Error::NotFlushed("value buffer"))?;
        dense_heads(q, k, v, self.heads, ledger)
    }

    fn flush_frame(&mut self, ledger: &mut CostLedger) -> Result<Matrix> {
        let (qs, ks, vs) = self.split_sources()?;
        let dh = self.dim / self.heads;
        let (n, kv) = (self.tokens, self.kv_tokens());
        self.scores.clear();
        self.av_cache.clear();
        for (h, ((qh, kh), vh)) in qs.iter().zip(&ks).zip(&vs).enumerate() {
            let b = qh.matmul_t(kh)?;
            ledger.qk(n * kv * dh);
            let a = attention_probs(&b, dh);
            ledger.nonlinear(n * kv);
            self.a_gates[h].forced(&a, &IndexSet::all(kv))?;
            self.av_cache.push(a.matmul(vh)?);
            ledger.av(n * kv * dh);
            self.scores.push(b);
        }
        let v = self.value_source().expect("checked above").clone();
        self.v_gate.forward(&v)?;
        head_merge(&self.av_cache)
    }

    fn sparse_frame(
        &mut self,
        q_sel: &Matrix,
        k_sel: &Matrix,
        idx: &IndexSet,
        kv_idx: &IndexSet,
        ledger: &mut CostLedger,
    ) -> Result<Matrix> {
        let heads = self.heads;
        let dh = self.dim / heads;
        let (qs, ks, _) = self.split_sources()?;
        let q_sel = head_split(q_sel, heads)?;
        let k_sel = head_split(k_sel, heads)?;

        let mut probs = Vec::with_capacity(heads);
        for h in 0..heads {
            let macs = qk_sparse_update(&mut self.scores[h], &qs[h], &ks[h], &q_sel[h], &k_sel[h], idx, kv_idx)?;
            ledger.qk(macs);
            probs.push(attention_probs(&self.scores[h], dh));
            ledger.nonlinear(self.tokens * self.kv_tokens());
        }

        let v = self.value_source().expect("flushed").clone();
        ledger.adds(v.rows() * v.cols());
        let (v_idx, u_v, v_delta) = self.v_gate.forward(&v)?;
        let v_new = u_v.gather_rows(&v_idx)?;
        let v_delta = head_split(&v_delta, heads)?;
        let v_new = head_split(&v_new, heads)?;

        for h in 0..heads {
            av_delta_update(
                &mut self.av_cache[h],
                &mut self.a_gates[h],
                &probs[h],
                &v_idx,
                &v_delta[h],
                &v_new[h],
                ledger,
            )?;
        }
        head_merge(&self.av_cache)
    }

    /// Compares the incremental state against from-scratch products of the
    /// current buffers and gate references.
    pub fn check_invariants(&self) -> Result<InvariantReport> {
        if !self.flushed {
            return Err(Error::NotFlushed("attention state"));
        }
        let mut report = InvariantReport::default();
        if !self.incremental {
            return Ok(report);
        }
        let (qs, ks, _) = self.split_sources()?;
        let u_v = head_split(self.v_gate.reference().ok_or(Error::NotFlushed("value gate"))?, self.heads)?;
        for h in 0..self.heads {
            let b = qs[h].matmul_t(&ks[h])?;
            report.qk_max_abs = report.qk_max_abs.max(self.scores[h].max_abs_diff(&b)?);
            let u_a = self.a_gates[h].reference().ok_or(Error::NotFlushed("attention gate"))?;
            let av = u_a.matmul(&u_v[h])?;
            report.av_max_abs = report.av_max_abs.max(self.av_cache[h].max_abs_diff(&av)?);
        }
        Ok(report)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gating::Policy;

    fn weights_2x2() -> AttentionWeights {
        AttentionWeights {
            wq: Matrix::from_rows(&[[0.5, -0.25], [0.75, 1.0]]),
            wk: Matrix::from_rows(&[[1.0, 0.5], [-0.5, 0.25]]),
            wv: Matrix::from_rows(&[[0.2, 0.4], [-0.6, 0.8]]),
            wp: Matrix::from_rows(&[[1.0, -1.0], [0.5, 0.5]]),
            bq: vec![0.1, 0.0],
            bk: vec![0.0, -0.1],
            bv: vec![0.05, 0.05],
            bp: vec![0.0, 0.2],
            heads: 1,
        }
    }

    // Scalar loops straight from the definition, no matmul/softmax helpers.
    fn brute_force_msa(x: &Matrix, w: &AttentionWeights) -> Matrix {
        let (n, d) = x.shape();
        let lin = |wm: &Matrix, b: &[f64], i: usize, j: usize| -> f64 {
            (0..d).map(|p| x.get(i, p) * wm.get(p, j)).sum::<f64>() + b[j]
        };
        let mut out = Matrix::zeros(n, d);
        let mut merged = Matrix::zeros(n, d);
        for i in 0..n {
            let logits: Vec<f64> = (0..n)
                .map(|j| (0..d).map(|p| lin(&w.wq, &w.bq, i, p) * lin(&w.wk, &w.bk, j, p)).sum::<f64>() / (d as f64).sqrt())
                .collect();
            let z: f64 = logits.iter().map(|l| l.exp()).sum();
            for c in 0..d {
                let s: f64 = (0..n).map(|j| logits[j].exp() / z * lin(&w.wv, &w.bv, j, c)).sum();
                merged.set(i, c, s);
            }
        }
        for i in 0..n {
            for c in 0..d {
                let s: f64 = (0..d).map(|p| merged.get(i, p) * w.wp.get(p, c)).sum::<f64>() + w.bp[c];
                out.set(i, c, s);
            }
        }
        out
    }

    #[test]
    fn msa_matches_brute_force() {
        let w = weights_2x2();
        let x = Matrix::from_rows(&[[0.3, -1.2], [0.9, 0.4]]);
        let got = msa_baseline(&x, &w, &mut CostLedger::new()).unwrap();
        assert!(got.max_abs_diff(&brute_force_msa(&x, &w)).unwrap() < 1e-6);
    }

    #[test]
    fn msa_single_token_is_projected_value() {
        let w = weights_2x2();
        let x = Matrix::from_rows(&[[0.3, -1.2]]);
        let got = msa_baseline(&x, &w, &mut CostLedger::new()).unwrap();
        let v = linear(&x, &w.wv, Some(&w.bv)).unwrap();
        let expect = linear(&v, &w.wp, Some(&w.bp)).unwrap();
        assert!(got.max_abs_diff(&expect).unwrap() < 1e-12);
    }

    #[test]
    fn msa_is_permutation_equivariant() {
        let w = weights_2x2();
        let x = Matrix::from_rows(&[[0.3, -1.2], [0.9, 0.4], [-0.5, 0.1]]);
        let perm = Matrix::from_rows(&[[-0.5, 0.1], [0.3, -1.2], [0.9, 0.4]]);
        let a = msa_baseline(&x, &w, &mut CostLedger::new()).unwrap();
        let b = msa_baseline(&perm, &w, &mut CostLedger::new()).unwrap();
        for (src, dst) in [(2, 0), (0, 1), (1, 2)] {
            for c in 0..2 {
                assert!((a.get(src, c) - b.get(dst, c)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn head_split_convention() {
        let x = Matrix::from_rows(&[[0.0, 1.0, 2.0, 3.0], [4.0, 5.0, 6.0, 7.0]]);
        let parts = head_split(&x, 2).unwrap();
        assert_eq!(parts[0], Matrix::from_rows(&[[0.0, 1.0], [4.0, 5.0]]));
        assert_eq!(parts[1], Matrix::from_rows(&[[2.0, 3.0], [6.0, 7.0]]));
        assert_eq!(head_merge(&parts).unwrap(), x);
        assert_eq!(head_split(&x, 1).unwrap()[0], x);
        assert!(head_split(&x, 3).is_err());
    }

    #[test]
    fn qk_update_single_token() {
        // N=3, head width 2, token 1 changes in both q and k
        let mut q = Matrix::from_rows(&[[1.0, 0.0], [0.5, -1.0], [2.0, 1.0]]);
        let mut k = Matrix::from_rows(&[[0.0, 1.0], [1.0, 1.0], [-1.0, 0.5]]);
        let mut scores = q.matmul_t(&k).unwrap();
        let idx = IndexSet::new(vec![1], 3).unwrap();
        let q_sel = Matrix::from_rows(&[[3.0, 2.0]]);
        let k_sel = Matrix::from_rows(&[[-2.0, 0.25]]);
        q.scatter_rows(&idx, &q_sel).unwrap();
        k.scatter_rows(&idx, &k_sel).unwrap();
        let mut other = scores.clone();
        let macs = qk_sparse_update(&mut scores, &q, &k, &q_sel, &k_sel, &idx, &idx).unwrap();
        assert_eq!(scores, q.matmul_t(&k).unwrap());
        assert_eq!(macs, 2 * 3 * 2);
        let macs = qk_sparse_update_nonoverlap(&mut other, &q, &k, &q_sel, &k_sel, &idx, &idx).unwrap();
        assert_eq!(other, scores);
        assert_eq!(macs as u64, crate::cost::count_qk_nonoverlap(3, 1, 2));
    }

    #[test]
    fn qk_update_degenerate_selections() {
        let q = Matrix::from_rows(&[[1.0, 2.0], [3.0, 4.0]]);
        let k = Matrix::from_rows(&[[0.5, 0.5], [-1.0, 2.0]]);
        let stale = Matrix::filled(2, 2, 7.0);

        let mut s = stale.clone();
        qk_sparse_update(&mut s, &q, &k, &q, &k, &IndexSet::all(2), &IndexSet::all(2)).unwrap();
        assert_eq!(s, q.matmul_t(&k).unwrap());

        let mut s = stale.clone();
        let empty = Matrix::zeros(0, 2);
        qk_sparse_update(&mut s, &q, &k, &empty, &empty, &IndexSet::empty(), &IndexSet::empty()).unwrap();
        assert_eq!(s, stale);

        let mut s = stale.clone();
        let macs = qk_sparse_update_nonoverlap(&mut s, &q, &k, &q, &k, &IndexSet::all(2), &IndexSet::all(2)).unwrap();
        assert_eq!(s, q.matmul_t(&k).unwrap());
        assert_eq!(macs, 2 * 2 * 2);

        assert!(qk_sparse_update(&mut s, &q, &k, &empty, &k, &IndexSet::all(2), &IndexSet::all(2)).is_err());
    }

    #[test]
    fn av_delta_worked_example() {
        let a_o = Matrix::from_rows(&[[1.0, 0.0], [0.0, 1.0]]);
        let v_o = Matrix::from_rows(&[[1.0, 2.0], [3.0, 4.0]]);
        let mut gate = DeltaGate::with_axis(Policy::TopR { r: 1 }, Axis::Cols);
        gate.forced(&a_o, &IndexSet::all(2)).unwrap();
        let mut cache = a_o.matmul(&v_o).unwrap();

        let a_n = Matrix::from_rows(&[[0.6, 0.0], [0.4, 1.0]]);
        let idx = IndexSet::new(vec![0], 2).unwrap();
        let v_new = Matrix::from_rows(&[[5.0, 6.0]]);
        let v_delta = Matrix::from_rows(&[[4.0, 4.0]]);
        let mut ledger = CostLedger::new();
        av_delta_update(&mut cache, &mut gate, &a_n, &idx, &v_delta, &v_new, &mut ledger).unwrap();
        let expect = Matrix::from_rows(&[[3.0, 3.6], [5.0, 6.4]]);
        assert!(cache.max_abs_diff(&expect).unwrap() < 1e-12, "{cache:?}");
        assert_eq!(ledger.current().av, (2 * 2) * 2);

        // empty selection leaves the cache alone
        let before = cache.clone();
        av_delta_update(&mut cache, &mut gate, &a_n, &IndexSet::empty(), &Matrix::zeros(0, 2), &Matrix::zeros(0, 2), &mut ledger).unwrap();
        assert_eq!(cache, before);
    }

    #[test]
    fn av_delta_requires_flush() {
        let mut gate = DeltaGate::with_axis(Policy::TopR { r: 1 }, Axis::Cols);
        let mut cache = Matrix::zeros(2, 1);
        let err = av_delta_update(
            &mut cache,
            &mut gate,
            &Matrix::identity(2),
            &IndexSet::all(2),
            &Matrix::zeros(2, 1),
            &Matrix::zeros(2, 1),
            &mut CostLedger::new(),
        );
        assert!(matches!(err, Err(Error::NotFlushed(_))));
    }

    #[test]
    fn pooling_examples() {
        let x = Matrix::from_rows(&[[1.0], [2.0], [3.0], [6.0]]);
        let (k, v, idx) = pooled_kv(&x, &x, &IndexSet::new(vec![0], 4).unwrap(), 2).unwrap();
        assert_eq!(k, Matrix::from_rows(&[[3.0]]));
        assert_eq!(v, k);
        assert_eq!(idx.as_slice(), &[0]);

        assert_eq!(pool_tokens(&x, 1).unwrap(), x);
        assert_eq!(pool_mask(&IndexSet::new(vec![1, 3], 4).unwrap(), 4, 1).unwrap().as_slice(), &[1, 3]);

        let c = Matrix::filled(16, 3, 2.5);
        assert_eq!(pool_tokens(&c, 2).unwrap(), Matrix::filled(4, 3, 2.5));

        // 4x4 grid: token 5 = (1,1) → patch 0; token 6 = (1,2) → patch 1; token 15 → patch 3
        let m = pool_mask(&IndexSet::new(vec![5, 6, 15], 16).unwrap(), 16, 2).unwrap();
        assert_eq!(m.as_slice(), &[0, 1, 3]);

        assert!(pool_tokens(&Matrix::zeros(5, 1), 1).is_err());
        assert!(pool_tokens(&Matrix::zeros(9, 1), 2).is_err());
    }

    #[test]
    fn attention_state_flush_then_full_budget_matches_dense() {
        let w = weights_2x2();
        let mut st = AttentionState::new(3, 2, 1, 1, true, Policy::TopR { r: 3 }).unwrap();
        let mut ledger = CostLedger::new();
        let frames = [
            Matrix::from_rows(&[[0.3, -1.2], [0.9, 0.4], [-0.5, 0.1]]),
            Matrix::from_rows(&[[0.1, -1.0], [0.9, 0.4], [0.5, 0.7]]),
        ];
        for x in &frames {
            let merged = st.forward(&w, x, &IndexSet::all(3), &mut ledger).unwrap();
            let (q, k, v) = project_qkv(x, &w, &mut CostLedger::new()).unwrap();
            let dense = dense_heads(&q, &k, &v, 1, &mut CostLedger::new()).unwrap();
            assert!(merged.max_abs_diff(&dense).unwrap() < 1e-12);
            let inv = st.check_invariants().unwrap();
            assert!(inv.qk_max_abs < 1e-12 && inv.av_max_abs < 1e-12);
        }
    }

    #[test]
    fn attention_state_rejects_partial_first_frame() {
        let w = weights_2x2();
        let mut st = AttentionState::new(3, 2, 1, 1, true, Policy::TopR { r: 1 }).unwrap();
        let err = st.forward(&w, &Matrix::zeros(1, 2), &IndexSet::new(vec![0], 3).unwrap(), &mut CostLedger::new());
        assert!(matches!(err, Err(Error::PartialFlush { .. })));
    }
}

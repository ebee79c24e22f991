//! Operation and memory accounting.
//!
//! A multiply-accumulate counts as one operation. Linear transforms and the
//! two attention products are counted as MACs; gate error subtractions and
//! the extra additions of the delta attention-value update are counted as
//! `adds`. Softmax, layer norm and GELU are tallied separately as
//! `nonlinear` element counts and are not part of [`CostCounts::total`].

use serde::Serialize;

use crate::block::Mode;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct CostCounts {
    pub token_wise: u64,
    pub qk: u64,
    pub av: u64,
    pub adds: u64,
    pub nonlinear: u64,
}

impl CostCounts {
    pub fn macs(&self) -> u64 {
        self.token_wise + self.qk + self.av
    }

    /// MACs plus additions.
    pub fn total(&self) -> u64 {
        self.macs() + self.adds
    }

    /// The two attention products only.
    pub fn products(&self) -> u64 {
        self.qk + self.av
    }

    pub fn accumulate(&mut self, other: &CostCounts) {
        self.token_wise += other.token_wise;
        self.qk += other.qk;
        self.av += other.av;
        self.adds += other.adds;
        self.nonlinear += other.nonlinear;
    }
}

impl std::ops::Add for CostCounts {
    type Output = CostCounts;

    fn add(mut self, rhs: CostCounts) -> CostCounts {
        self.accumulate(&rhs);
        self
    }
}

impl std::iter::Sum for CostCounts {
    fn sum<I: Iterator<Item = CostCounts>>(iter: I) -> CostCounts {
        iter.fold(CostCounts::default(), |a, b| a + b)
    }
}

/// Running counts for the current frame plus one snapshot per finished frame.
#[derive(Debug, Clone, Default)]
pub struct CostLedger {
    current: CostCounts,
    frames: Vec<CostCounts>,
}

impl CostLedger {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn token_wise(&mut self, macs: usize) {
        self.current.token_wise += macs as u64;
    }

    pub fn qk(&mut self, macs: usize) {
        self.current.qk += macs as u64;
    }

    pub fn av(&mut self, macs: usize) {
        self.current.av += macs as u64;
    }

    pub fn adds(&mut self, adds: usize) {
        self.current.adds += adds as u64;
    }

    pub fn nonlinear(&mut self, elements: usize) {
        self.current.nonlinear += elements as u64;
    }

    pub fn current(&self) -> CostCounts {
        self.current
    }

    /// Closes the current frame, returning its counts.
    pub fn end_frame(&mut self) -> CostCounts {
        let done = std::mem::take(&mut self.current);
        self.frames.push(done);
        done
    }

    pub fn frames(&self) -> &[CostCounts] {
        &self.frames
    }

    /// Sum over finished frames and the open one.
    pub fn cumulative(&self) -> CostCounts {
        self.frames.iter().copied().sum::<CostCounts>() + self.current
    }

    /// Combines ledgers from independent runs frame by frame.
    pub fn merge(&mut self, other: &CostLedger) {
        if self.frames.len() < other.frames.len() {
            self.frames.resize(other.frames.len(), CostCounts::default());
        }
        for (a, b) in self.frames.iter_mut().zip(&other.frames) {
            a.accumulate(b);
        }
        self.current.accumulate(&other.current);
    }
}

/// Dimensions of one Transformer block.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BlockShape {
    pub tokens: usize,
    pub dim: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
}

impl BlockShape {
    pub fn new(tokens: usize, dim: usize, heads: usize, mlp_ratio: usize) -> Result<Self> {
        if heads == 0 || dim == 0 || !dim.is_multiple_of(heads) {
            return Err(Error::Config(format!(
                "dim {dim} must be a positive multiple of heads {heads}"
            )));
        }
        Ok(Self {
            tokens,
            dim,
            heads,
            mlp_ratio,
        })
    }

    fn token_wise_per_token(&self) -> u64 {
        let d = self.dim as u64;
        // qkv + projection + two MLP layers
        3 * d * d + d * d + 2 * self.mlp_ratio as u64 * d * d
    }

    fn nonlinear(&self, mlp_tokens: usize) -> u64 {
        let (n, d) = (self.tokens as u64, self.dim as u64);
        // two layer norms over all tokens, per-head softmax over the full score
        // matrix, GELU over the hidden layer of the forwarded tokens
        2 * n * d + self.heads as u64 * n * n + mlp_tokens as u64 * self.mlp_ratio as u64 * d
    }
}

/// Dense block cost: `3ND² + N²D + N²D + ND² + 2·ratio·ND²`.
pub fn count_block_baseline(shape: BlockShape) -> CostCounts {
    let (n, d) = (shape.tokens as u64, shape.dim as u64);
    CostCounts {
        token_wise: n * shape.token_wise_per_token(),
        qk: n * n * d,
        av: n * n * d,
        adds: 0,
        nonlinear: shape.nonlinear(shape.tokens),
    }
}

/// Cost of the first frame of an eventful block: identical to the dense block.
pub fn count_block_flush(shape: BlockShape) -> CostCounts {
    count_block_baseline(shape)
}

/// Steady-state cost of an eventful block in which every gate forwards `m` tokens.
///
/// Full (and STGT) mode: `3MD² + 2NMD + 2NMD + MD² + 2·ratio·MD²` MACs.
/// Additions: one `N·D` error subtraction for each of the four token gates,
/// `N·M` per head for the forced attention gate, and `M·D + 2·N·D` for the
/// delta attention-value update when `m > 0`.
///
/// Token-wise-only mode keeps `2·N²D` for the products and has three gates.
pub fn count_block_eventful(shape: BlockShape, m: usize, mode: Mode) -> Result<CostCounts> {
    if m > shape.tokens {
        return Err(Error::Config(format!(
            "selected tokens {m} exceed token count {}",
            shape.tokens
        )));
    }
    let (n, d, h, mm) = (
        shape.tokens as u64,
        shape.dim as u64,
        shape.heads as u64,
        m as u64,
    );
    let token_wise = mm * shape.token_wise_per_token();
    let nonlinear = shape.nonlinear(m);
    match mode {
        Mode::Full | Mode::Stgt => {
            let sparse_av_adds = if m > 0 { mm * d + 2 * n * d } else { 0 };
            Ok(CostCounts {
                token_wise,
                qk: 2 * n * mm * d,
                av: 2 * n * mm * d,
                adds: 4 * n * d + h * n * mm + sparse_av_adds,
                nonlinear,
            })
        }
        Mode::TokenwiseOnly => Ok(CostCounts {
            token_wise,
            qk: n * n * d,
            av: n * n * d,
            adds: 3 * n * d,
            nonlinear,
        }),
        Mode::SpatialPool(_) => Err(Error::Config(
            "spatial pooling has no closed-form count; its cost depends on the pooled selection"
                .into(),
        )),
    }
}

/// Query-key MACs of the non-overlapping update: `N·M·D + (N−M)·M·D`.
pub fn count_qk_nonoverlap(tokens: usize, m: usize, dim: usize) -> u64 {
    let (n, m, d) = (tokens as u64, m as u64, dim as u64);
    n * m * d + (n - m) * m * d
}

/// `baseline / eventful`.
pub fn savings_ratio(baseline: f64, eventful: f64) -> Result<f64> {
    if baseline.is_nan() || baseline <= 0.0 {
        return Err(Error::Config(format!("baseline cost must be positive, got {baseline}")));
    }
    if eventful == 0.0 {
        return Err(Error::Config("eventful cost is zero".into()));
    }
    Ok(baseline / eventful)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct MemoryEntry {
    pub name: &'static str,
    pub elements: u64,
    pub bytes: u64,
}

/// State memory of one full-mode eventful block.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct MemoryReport {
    pub bytes_per_element: u64,
    /// One token gate reference or buffer (`N·D`).
    pub token_state_bytes: u64,
    /// One attention-shaped tensor across all heads (`N²·H`).
    pub attention_state_bytes: u64,
    pub av_cache_bytes: u64,
    pub entries: Vec<MemoryEntry>,
    pub total_bytes: u64,
}

pub fn memory_report(tokens: usize, dim: usize, heads: usize, bytes_per_element: usize) -> Result<MemoryReport> {
    if tokens == 0 || dim == 0 || heads == 0 || bytes_per_element == 0 {
        return Err(Error::Config("memory report needs positive sizes".into()));
    }
    let (n, d, h, bpe) = (tokens as u64, dim as u64, heads as u64, bytes_per_element as u64);
    let token = n * d;
    let attn = n * n * h;
    let entries: Vec<MemoryEntry> = [
        ("gate_qkv.reference", token),
        ("buffer_q", token),
        ("buffer_k", token),
        ("buffer_v", token),
        ("scores", attn),
        ("gate_attention.reference", attn),
        ("gate_v.reference", token),
        ("av_cache", token),
        ("gate_proj.reference", token),
        ("buffer_proj", token),
        ("gate_mlp.reference", token),
        ("buffer_mlp", token),
    ]
    .into_iter()
    .map(|(name, elements)| MemoryEntry {
        name,
        elements,
        bytes: elements * bpe,
    })
    .collect();
    let total_bytes = entries.iter().map(|e| e.bytes).sum();
    Ok(MemoryReport {
        bytes_per_element: bpe,
        token_state_bytes: token * bpe,
        attention_state_bytes: attn * bpe,
        av_cache_bytes: token * bpe,
        entries,
        total_bytes,
    })
}

//! Transformer blocks: the dense two-residual block and its eventful
//! counterpart with gate/buffer pairs around every token-wise stage.

use std::fmt;
use std::str::FromStr;

use crate::attention::{msa_baseline, msa_pooled_baseline, AttentionState, AttentionWeights};
use crate::cost::{BlockShape, CostLedger};
use crate::error::{shape_err, Error, Result};
use crate::gating::{Buffer, Gate, Policy, StgtGate, TokenGate};
use crate::index::IndexSet;
use crate::tensor::{gelu, layer_norm, linear, Matrix};

/// How an eventful block exploits temporal redundancy.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// Gated token-wise operators plus incremental query-key and attention-value products.
    Full,
    /// Gated token-wise operators only; both attention products are recomputed every frame.
    TokenwiseOnly,
    /// Like `Full`, but the token gates compare against the previous frame.
    Stgt,
    /// Like `Full`, with keys and values mean-pooled over `p × p` patches.
    SpatialPool(usize),
}

impl Mode {
    pub fn name(&self) -> &'static str {
        match self {
            Mode::Full => "full",
            Mode::TokenwiseOnly => "tokenwise_only",
            Mode::Stgt => "stgt",
            Mode::SpatialPool(_) => "spatial_pool",
        }
    }

    pub fn pool(&self) -> usize {
        match *self {
            Mode::SpatialPool(p) => p,
            _ => 1,
        }
    }

    pub fn from_parts(name: &str, pool: usize) -> Result<Mode> {
        match name {
            "full" => Ok(Mode::Full),
            "tokenwise_only" => Ok(Mode::TokenwiseOnly),
            "stgt" => Ok(Mode::Stgt),
            "spatial_pool" if pool >= 1 => Ok(Mode::SpatialPool(pool)),
            "spatial_pool" => Err(Error::Config("spatial_pool needs pool_p >= 1".into())),
            other => Err(Error::Config(format!("unknown mode {other:?}"))),
        }
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Mode::SpatialPool(p) => write!(f, "spatial_pool({p})"),
            m => f.write_str(m.name()),
        }
    }
}

impl FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Mode> {
        match s.strip_prefix("spatial_pool(").and_then(|r| r.strip_suffix(')')) {
            Some(p) => {
                let p = p.parse().map_err(|_| Error::Config(format!("bad pool size in {s:?}")))?;
                Mode::from_parts("spatial_pool", p)
            }
            None => Mode::from_parts(s, 1),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerNormParams {
    pub gamma: Vec<f64>,
    pub beta: Vec<f64>,
    pub eps: f64,
}

impl LayerNormParams {
    pub fn apply(&self, x: &Matrix) -> Result<Matrix> {
        layer_norm(x, &self.gamma, &self.beta, self.eps)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MlpWeights {
    pub w1: Matrix,
    pub b1: Vec<f64>,
    pub w2: Matrix,
    pub b2: Vec<f64>,
}

impl MlpWeights {
    fn forward(&self, x: &Matrix, ledger: &mut CostLedger) -> Result<Matrix> {
        let (d, hidden) = self.w1.shape();
        let mut h = linear(x, &self.w1, Some(&self.b1))?;
        for r in 0..h.rows() {
            for v in h.row_mut(r) {
                *v = gelu(*v);
            }
        }
        ledger.nonlinear(x.rows() * hidden);
        ledger.token_wise(2 * x.rows() * d * hidden);
        linear(&h, &self.w2, Some(&self.b2))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BlockWeights {
    pub attn: AttentionWeights,
    pub mlp: MlpWeights,
    pub ln1: LayerNormParams,
    pub ln2: LayerNormParams,
}

impl BlockWeights {
    pub fn dim(&self) -> usize {
        self.attn.dim()
    }

    pub fn heads(&self) -> usize {
        self.attn.heads
    }

    pub fn mlp_ratio(&self) -> usize {
        self.mlp.w1.cols() / self.dim()
    }

    pub fn shape(&self, tokens: usize) -> BlockShape {
        BlockShape {
            tokens,
            dim: self.dim(),
            heads: self.heads(),
            mlp_ratio: self.mlp_ratio(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.attn.validate()?;
        let d = self.dim();
        let hidden = self.mlp.w1.cols();
        if self.mlp.w1.rows() != d || self.mlp.w2.shape() != (hidden, d) || !hidden.is_multiple_of(d) {
            return Err(shape_err("mlp weights", format!("{d}x(k·{d}) and (k·{d})x{d}"), "mismatch"));
        }
        if self.mlp.b1.len() != hidden || self.mlp.b2.len() != d {
            return Err(shape_err("mlp biases", format!("{hidden}/{d}"), format!("{}/{}", self.mlp.b1.len(), self.mlp.b2.len())));
        }
        for ln in [&self.ln1, &self.ln2] {
            if ln.gamma.len() != d || ln.beta.len() != d {
                return Err(shape_err("layer norm", d, ln.gamma.len()));
            }
        }
        Ok(())
    }
}

fn check_input(x: &Matrix, tokens: Option<usize>, dim: usize) -> Result<()> {
    if x.cols() != dim || tokens.is_some_and(|n| n != x.rows()) {
        return Err(shape_err(
            "block input",
            format!("{}x{dim}", tokens.map_or("N".to_string(), |n| n.to_string())),
            format!("{}x{}", x.rows(), x.cols()),
        ));
    }
    Ok(())
}

/// `y = MSA(LN(x)) + x`, `z = MLP(LN(y)) + y`.
pub fn block_baseline(x: &Matrix, w: &BlockWeights, ledger: &mut CostLedger) -> Result<Matrix> {
    dense_block(x, w, 1, ledger)
}

/// Dense block whose attention pools keys and values over `pool × pool` patches.
pub fn block_pooled_baseline(x: &Matrix, w: &BlockWeights, pool: usize, ledger: &mut CostLedger) -> Result<Matrix> {
    dense_block(x, w, pool, ledger)
}

fn dense_block(x: &Matrix, w: &BlockWeights, pool: usize, ledger: &mut CostLedger) -> Result<Matrix> {
    check_input(x, None, w.dim())?;
    let n = x.rows();
    let x_norm = w.ln1.apply(x)?;
    ledger.nonlinear(n * w.dim());
    let attn = if pool > 1 {
        msa_pooled_baseline(&x_norm, &w.attn, pool, ledger)?
    } else {
        msa_baseline(&x_norm, &w.attn, ledger)?
    };
    let y = attn.add(x)?;
    let y_norm = w.ln2.apply(&y)?;
    ledger.nonlinear(n * w.dim());
    w.mlp.forward(&y_norm, ledger)?.add(&y)
}

/// Tokens forwarded by each gate of a block on its last frame.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct SelectionCounts {
    pub qkv: usize,
    pub value: usize,
    pub proj: usize,
    pub mlp: usize,
}

/// Per-stream state of one eventful block.
#[derive(Debug, Clone)]
pub struct EventfulBlock {
    tokens: usize,
    dim: usize,
    mode: Mode,
    policy: Policy,
    gate_qkv: TokenGate,
    attn: AttentionState,
    gate_proj: TokenGate,
    buf_proj: Buffer,
    gate_mlp: TokenGate,
    buf_mlp: Buffer,
    last: SelectionCounts,
    frames: usize,
}

impl EventfulBlock {
    pub fn new(tokens: usize, w: &BlockWeights, mode: Mode, policy: Policy) -> Result<Self> {
        w.validate()?;
        policy.validate()?;
        let gate = |p: Policy| match mode {
            Mode::Stgt => TokenGate::Stgt(StgtGate::new(p)),
            _ => TokenGate::Reference(Gate::new(p)),
        };
        let incremental = mode != Mode::TokenwiseOnly;
        Ok(Self {
            tokens,
            dim: w.dim(),
            mode,
            policy,
            gate_qkv: gate(policy),
            attn: AttentionState::new(tokens, w.dim(), w.heads(), mode.pool(), incremental, policy)?,
            gate_proj: gate(policy),
            buf_proj: Buffer::new(tokens),
            gate_mlp: gate(policy),
            buf_mlp: Buffer::new(tokens),
            last: SelectionCounts::default(),
            frames: 0,
        })
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn policy(&self) -> Policy {
        self.policy
    }

    pub fn tokens(&self) -> usize {
        self.tokens
    }

    pub fn frames_seen(&self) -> usize {
        self.frames
    }

    /// Switches every gate in the block to a top-`r` policy from the next frame on.
    pub fn set_budget(&mut self, r: usize) {
        self.set_policy(Policy::TopR { r });
    }

    pub fn set_policy(&mut self, policy: Policy) {
        self.policy = policy;
        self.gate_qkv.set_policy(policy);
        self.attn.set_policy(policy);
        self.gate_proj.set_policy(policy);
        self.gate_mlp.set_policy(policy);
    }

    pub fn last_selection(&self) -> SelectionCounts {
        self.last
    }

    pub fn attention(&self) -> &AttentionState {
        &self.attn
    }

    pub fn forward(&mut self, w: &BlockWeights, x: &Matrix, ledger: &mut CostLedger) -> Result<Matrix> {
        check_input(x, Some(self.tokens), self.dim)?;
        let (n, d) = (self.tokens, self.dim);
        let steady = self.frames > 0;

        let x_norm = w.ln1.apply(x)?;
        ledger.nonlinear(n * d);
        if steady {
            ledger.adds(n * d);
        }
        let (idx, x_sel) = self.gate_qkv.forward(&x_norm)?;
        let merged = self.attn.forward(&w.attn, &x_sel, &idx, ledger)?;

        if steady {
            ledger.adds(n * d);
        }
        let (p_idx, p_sel) = self.gate_proj.forward(&merged)?;
        let proj = linear(&p_sel, &w.attn.wp, Some(&w.attn.bp))?;
        ledger.token_wise(p_idx.len() * d * d);
        let y = self.buf_proj.forward(&p_idx, &proj)?.add(x)?;

        let y_norm = w.ln2.apply(&y)?;
        ledger.nonlinear(n * d);
        if steady {
            ledger.adds(n * d);
        }
        let (m_idx, m_sel) = self.gate_mlp.forward(&y_norm)?;
        let hidden = w.mlp.forward(&m_sel, ledger)?;
        let z = self.buf_mlp.forward(&m_idx, &hidden)?.add(&y)?;

        self.last = SelectionCounts {
            qkv: idx.len(),
            value: if self.mode == Mode::TokenwiseOnly {
                0
            } else {
                self.attn.last_value_selection().len()
            },
            proj: p_idx.len(),
            mlp: m_idx.len(),
        };
        self.frames += 1;
        Ok(z)
    }

    /// Last selections of the three token gates.
    pub fn last_masks(&self) -> [&IndexSet; 3] {
        [
            self.gate_qkv.last_mask(),
            self.gate_proj.last_mask(),
            self.gate_mlp.last_mask(),
        ]
    }

    /// Element counts of every state tensor currently held, by name.
    pub fn state_elements(&self) -> Vec<(&'static str, usize)> {
        let size = |m: Option<&Matrix>| m.map_or(0, |m| m.rows() * m.cols());
        let heads = self.attn.heads();
        let sum_heads = |f: &dyn Fn(usize) -> usize| (0..heads).map(f).sum::<usize>();
        vec![
            ("gate_qkv.reference", size(self.gate_qkv.state())),
            ("buffer_q", size(self.attn.q_buffer())),
            ("buffer_k", size(self.attn.key_source())),
            ("buffer_v", size(self.attn.value_source())),
            ("scores", sum_heads(&|h| size(self.attn.scores(h)))),
            ("gate_attention.reference", sum_heads(&|h| size(self.attn.attention_reference(h)))),
            ("gate_v.reference", size(self.attn.value_reference())),
            ("av_cache", sum_heads(&|h| size(self.attn.av_cache(h)))),
            ("gate_proj.reference", size(self.gate_proj.state())),
            ("buffer_proj", size(self.buf_proj.state())),
            ("gate_mlp.reference", size(self.gate_mlp.state())),
            ("buffer_mlp", size(self.buf_mlp.state())),
        ]
    }
}

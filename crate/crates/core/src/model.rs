//! A stack of blocks with additive position embedding, mean pooling and a
//! linear classification head. Weights are random (seeded); nothing here is
//! trained.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::archive::TensorArchive;
use crate::attention::AttentionWeights;
use crate::block::{block_baseline, block_pooled_baseline, BlockWeights, EventfulBlock, LayerNormParams, MlpWeights, Mode, SelectionCounts};
use crate::cost::CostLedger;
use crate::error::{shape_err, Error, Result};
use crate::gating::Policy;
use crate::rng::seeded;
use crate::tensor::{Matrix, LAYER_NORM_EPS};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ModeName {
    #[default]
    Full,
    TokenwiseOnly,
    Stgt,
    SpatialPool,
}

fn default_mlp_ratio() -> usize {
    4
}

fn default_pool() -> usize {
    1
}

fn default_classes() -> usize {
    10
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub blocks: usize,
    #[serde(rename = "N")]
    pub tokens: usize,
    #[serde(rename = "D")]
    pub dim: usize,
    #[serde(rename = "H")]
    pub heads: usize,
    #[serde(default = "default_mlp_ratio")]
    pub mlp_ratio: usize,
    #[serde(default)]
    pub mode: ModeName,
    #[serde(default = "default_pool")]
    pub pool_p: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_classes")]
    pub classes: usize,
}

impl ModelConfig {
    pub fn new(blocks: usize, tokens: usize, dim: usize, heads: usize) -> Self {
        Self {
            blocks,
            tokens,
            dim,
            heads,
            mlp_ratio: 4,
            mode: ModeName::Full,
            pool_p: 1,
            seed: 0,
            classes: default_classes(),
        }
    }

    pub fn with_mode(mut self, mode: Mode) -> Self {
        self.mode = match mode {
            Mode::Full => ModeName::Full,
            Mode::TokenwiseOnly => ModeName::TokenwiseOnly,
            Mode::Stgt => ModeName::Stgt,
            Mode::SpatialPool(p) => {
                self.pool_p = p;
                ModeName::SpatialPool
            }
        };
        self
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn mode(&self) -> Mode {
        match self.mode {
            ModeName::Full => Mode::Full,
            ModeName::TokenwiseOnly => Mode::TokenwiseOnly,
            ModeName::Stgt => Mode::Stgt,
            ModeName::SpatialPool => Mode::SpatialPool(self.pool_p),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.tokens == 0 || self.dim == 0 || self.heads == 0 {
            return Err(Error::Config("N, D and H must be positive".into()));
        }
        if !self.dim.is_multiple_of(self.heads) {
            return Err(Error::Config(format!("D={} is not divisible by H={}", self.dim, self.heads)));
        }
        if self.mlp_ratio == 0 || self.classes == 0 {
            return Err(Error::Config("mlp_ratio and classes must be positive".into()));
        }
        if let Mode::SpatialPool(p) = self.mode() {
            let side = (self.tokens as f64).sqrt().round() as usize;
            if side * side != self.tokens || p == 0 || !side.is_multiple_of(p) {
                return Err(Error::Config(format!(
                    "spatial pooling needs a square token grid divisible by p (N={}, p={p})",
                    self.tokens
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelWeights {
    pub pos_embed: Matrix,
    pub blocks: Vec<BlockWeights>,
    pub head_w: Matrix,
    pub head_b: Vec<f64>,
}

// Samples are rounded to f32 so weights survive an archive round trip exactly.
fn gaussian(rng: &mut ChaCha8Rng, std: f64) -> f64 {
    let g: f64 = rng.sample(StandardNormal);
    (g * std) as f32 as f64
}

fn random_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize, std: f64) -> Matrix {
    let data = (0..rows * cols).map(|_| gaussian(rng, std)).collect();
    Matrix::from_vec(rows, cols, data).expect("finite samples")
}

fn random_vector(rng: &mut ChaCha8Rng, len: usize, mean: f64, std: f64) -> Vec<f64> {
    (0..len).map(|_| ((mean + gaussian(rng, std)) as f32) as f64).collect()
}

impl ModelWeights {
    /// Seeded random weights; each block draws from its own generator stream.
    pub fn random(cfg: &ModelConfig) -> Result<Self> {
        cfg.validate()?;
        let (n, d, h) = (cfg.tokens, cfg.dim, cfg.heads);
        let hidden = cfg.mlp_ratio * d;
        let proj_std = 1.0 / (d as f64).sqrt();
        let mut rng = seeded(cfg.seed, 0);
        let pos_embed = random_matrix(&mut rng, n, d, 0.1);
        let head_w = random_matrix(&mut rng, d, cfg.classes, proj_std);
        let head_b = random_vector(&mut rng, cfg.classes, 0.0, 0.02);
        let blocks = (0..cfg.blocks)
            .map(|b| {
                let mut rng = seeded(cfg.seed, 1 + b as u64);
                BlockWeights {
                    attn: AttentionWeights {
                        wq: random_matrix(&mut rng, d, d, proj_std),
                        wk: random_matrix(&mut rng, d, d, proj_std),
                        wv: random_matrix(&mut rng, d, d, proj_std),
                        wp: random_matrix(&mut rng, d, d, proj_std),
                        bq: random_vector(&mut rng, d, 0.0, 0.02),
                        bk: random_vector(&mut rng, d, 0.0, 0.02),
                        bv: random_vector(&mut rng, d, 0.0, 0.02),
                        bp: random_vector(&mut rng, d, 0.0, 0.02),
                        heads: h,
                    },
                    mlp: MlpWeights {
                        w1: random_matrix(&mut rng, d, hidden, proj_std),
                        b1: random_vector(&mut rng, hidden, 0.0, 0.02),
                        w2: random_matrix(&mut rng, hidden, d, 1.0 / (hidden as f64).sqrt()),
                        b2: random_vector(&mut rng, d, 0.0, 0.02),
                    },
                    ln1: LayerNormParams {
                        gamma: random_vector(&mut rng, d, 1.0, 0.1),
                        beta: random_vector(&mut rng, d, 0.0, 0.05),
                        eps: LAYER_NORM_EPS,
                    },
                    ln2: LayerNormParams {
                        gamma: random_vector(&mut rng, d, 1.0, 0.1),
                        beta: random_vector(&mut rng, d, 0.0, 0.05),
                        eps: LAYER_NORM_EPS,
                    },
                }
            })
            .collect();
        Ok(Self {
            pos_embed,
            blocks,
            head_w,
            head_b,
        })
    }

    pub fn tokens(&self) -> usize {
        self.pos_embed.rows()
    }

    pub fn dim(&self) -> usize {
        self.pos_embed.cols()
    }

    pub fn to_archive(&self) -> TensorArchive {
        let mut a = TensorArchive::new();
        a.metadata.insert("blocks".into(), self.blocks.len() as u64);
        a.metadata.insert("heads".into(), self.blocks.first().map_or(1, |b| b.heads()) as u64);
        a.insert_matrix("pos_embed", &self.pos_embed);
        a.insert_matrix("head.w", &self.head_w);
        a.insert_vector("head.b", &self.head_b);
        for (i, b) in self.blocks.iter().enumerate() {
            let p = |s: &str| format!("blocks.{i}.{s}");
            a.insert_matrix(p("attn.wq"), &b.attn.wq);
            a.insert_matrix(p("attn.wk"), &b.attn.wk);
            a.insert_matrix(p("attn.wv"), &b.attn.wv);
            a.insert_matrix(p("attn.wp"), &b.attn.wp);
            a.insert_vector(p("attn.bq"), &b.attn.bq);
            a.insert_vector(p("attn.bk"), &b.attn.bk);
            a.insert_vector(p("attn.bv"), &b.attn.bv);
            a.insert_vector(p("attn.bp"), &b.attn.bp);
            a.insert_matrix(p("mlp.w1"), &b.mlp.w1);
            a.insert_vector(p("mlp.b1"), &b.mlp.b1);
            a.insert_matrix(p("mlp.w2"), &b.mlp.w2);
            a.insert_vector(p("mlp.b2"), &b.mlp.b2);
            a.insert_vector(p("ln1.gamma"), &b.ln1.gamma);
            a.insert_vector(p("ln1.beta"), &b.ln1.beta);
            a.insert_vector(p("ln2.gamma"), &b.ln2.gamma);
            a.insert_vector(p("ln2.beta"), &b.ln2.beta);
        }
        a
    }

    pub fn from_archive(a: &TensorArchive) -> Result<Self> {
        let blocks = a.meta("blocks")? as usize;
        let heads = a.meta("heads")? as usize;
        let blocks = (0..blocks)
            .map(|i| {
                let p = |s: &str| format!("blocks.{i}.{s}");
                let ln = |g: &str, b: &str| -> Result<LayerNormParams> {
                    Ok(LayerNormParams {
                        gamma: a.vector(&p(g))?,
                        beta: a.vector(&p(b))?,
                        eps: LAYER_NORM_EPS,
                    })
                };
                let w = BlockWeights {
                    attn: AttentionWeights {
                        wq: a.matrix(&p("attn.wq"))?,
                        wk: a.matrix(&p("attn.wk"))?,
                        wv: a.matrix(&p("attn.wv"))?,
                        wp: a.matrix(&p("attn.wp"))?,
                        bq: a.vector(&p("attn.bq"))?,
                        bk: a.vector(&p("attn.bk"))?,
                        bv: a.vector(&p("attn.bv"))?,
                        bp: a.vector(&p("attn.bp"))?,
                        heads,
                    },
                    mlp: MlpWeights {
                        w1: a.matrix(&p("mlp.w1"))?,
                        b1: a.vector(&p("mlp.b1"))?,
                        w2: a.matrix(&p("mlp.w2"))?,
                        b2: a.vector(&p("mlp.b2"))?,
                    },
                    ln1: ln("ln1.gamma", "ln1.beta")?,
                    ln2: ln("ln2.gamma", "ln2.beta")?,
                };
                w.validate()?;
                Ok(w)
            })
            .collect::<Result<Vec<_>>>()?;
        let out = Self {
            pos_embed: a.matrix("pos_embed")?,
            blocks,
            head_w: a.matrix("head.w")?,
            head_b: a.vector("head.b")?,
        };
        if out.head_w.rows() != out.dim() || out.head_b.len() != out.head_w.cols() {
            return Err(shape_err("head", out.dim(), out.head_w.rows()));
        }
        Ok(out)
    }

    fn embed(&self, frame: &Matrix) -> Result<Matrix> {
        frame.add(&self.pos_embed)
    }

    fn head(&self, tokens: Matrix) -> Result<ModelOutput> {
        let pooled = tokens.mean_rows();
        let mut scores = Matrix::from_vec(1, pooled.len(), pooled.clone())?.matmul(&self.head_w)?;
        scores.add_row_vector(&self.head_b)?;
        Ok(ModelOutput {
            tokens,
            pooled,
            scores: scores.into_data(),
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelOutput {
    /// Output of the last block (`N×D`).
    pub tokens: Matrix,
    pub pooled: Vec<f64>,
    pub scores: Vec<f64>,
}

impl ModelOutput {
    /// Index of the largest class score (first on ties).
    pub fn argmax(&self) -> usize {
        self.scores
            .iter()
            .enumerate()
            .fold((0, f64::NEG_INFINITY), |best, (i, &s)| if s > best.1 { (i, s) } else { best })
            .0
    }
}

/// Dense forward pass of one frame. The classification head is not ledgered.
pub fn baseline_forward(w: &ModelWeights, frame: &Matrix, ledger: &mut CostLedger) -> Result<ModelOutput> {
    pooled_baseline_forward(w, frame, 1, ledger)
}

/// Dense forward pass with key/value pooling inside every block.
pub fn pooled_baseline_forward(w: &ModelWeights, frame: &Matrix, pool: usize, ledger: &mut CostLedger) -> Result<ModelOutput> {
    let mut x = w.embed(frame)?;
    for b in &w.blocks {
        x = if pool > 1 {
            block_pooled_baseline(&x, b, pool, ledger)?
        } else {
            block_baseline(&x, b, ledger)?
        };
    }
    w.head(x)
}

/// Per-stream state of an eventful model.
#[derive(Debug, Clone)]
pub struct EventfulModel {
    blocks: Vec<EventfulBlock>,
    tokens: usize,
}

impl EventfulModel {
    pub fn new(w: &ModelWeights, mode: Mode, policy: Policy) -> Result<Self> {
        let tokens = w.tokens();
        let blocks = w
            .blocks
            .iter()
            .map(|b| EventfulBlock::new(tokens, b, mode, policy))
            .collect::<Result<_>>()?;
        Ok(Self { blocks, tokens })
    }

    pub fn blocks(&self) -> &[EventfulBlock] {
        &self.blocks
    }

    pub fn tokens(&self) -> usize {
        self.tokens
    }

    /// Budget applies to every gate of every block from the next frame on.
    pub fn set_budget(&mut self, r: usize) {
        for b in &mut self.blocks {
            b.set_budget(r);
        }
    }

    pub fn set_policy(&mut self, policy: Policy) {
        for b in &mut self.blocks {
            b.set_policy(policy);
        }
    }

    pub fn forward(&mut self, w: &ModelWeights, frame: &Matrix, ledger: &mut CostLedger) -> Result<ModelOutput> {
        if w.blocks.len() != self.blocks.len() {
            return Err(Error::Config(format!(
                "weights have {} blocks, state has {}",
                w.blocks.len(),
                self.blocks.len()
            )));
        }
        let mut x = w.embed(frame)?;
        for (state, bw) in self.blocks.iter_mut().zip(&w.blocks) {
            x = state.forward(bw, &x, ledger)?;
        }
        w.head(x)
    }

    pub fn last_selections(&self) -> Vec<SelectionCounts> {
        self.blocks.iter().map(|b| b.last_selection()).collect()
    }
}

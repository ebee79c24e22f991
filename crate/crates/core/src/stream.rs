//! Synthetic token streams standing in for consecutive video frames.

use std::path::Path;

use rand::seq::index::sample;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::archive::TensorArchive;
use crate::error::{Error, Result};
use crate::rng::seeded;
use crate::tensor::Matrix;

// Generator stream id reserved for frame synthesis.
const FRAME_STREAM: u64 = 0x5354_5245_414d;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum StreamMode {
    /// Each frame perturbs `⌈ρN⌉` random tokens by Gaussian noise of scale `σ`.
    #[default]
    SparseChange,
    /// Every token moves along its own fixed direction by `ε` per frame.
    Drift,
    /// The first frame repeated.
    Static,
    /// Drift on every token plus sparse changes.
    Mixed,
}

fn default_frames() -> usize {
    8
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StreamConfig {
    #[serde(default)]
    pub mode: StreamMode,
    #[serde(default)]
    pub rho: f64,
    #[serde(default)]
    pub sigma: f64,
    #[serde(default)]
    pub eps: f64,
    #[serde(default = "default_frames")]
    pub frames: usize,
    #[serde(default)]
    pub seed: u64,
}

impl StreamConfig {
    pub fn sparse_change(rho: f64, sigma: f64, frames: usize, seed: u64) -> Self {
        Self {
            mode: StreamMode::SparseChange,
            rho,
            sigma,
            eps: 0.0,
            frames,
            seed,
        }
    }

    pub fn drift(eps: f64, frames: usize, seed: u64) -> Self {
        Self {
            mode: StreamMode::Drift,
            rho: 0.0,
            sigma: 0.0,
            eps,
            frames,
            seed,
        }
    }

    pub fn constant(frames: usize, seed: u64) -> Self {
        Self {
            mode: StreamMode::Static,
            rho: 0.0,
            sigma: 0.0,
            eps: 0.0,
            frames,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.rho) {
            return Err(Error::Config(format!("rho must lie in [0, 1], got {}", self.rho)));
        }
        if !(self.sigma >= 0.0 && self.sigma.is_finite()) || !(self.eps >= 0.0 && self.eps.is_finite()) {
            return Err(Error::Config("sigma and eps must be finite and >= 0".into()));
        }
        if self.frames == 0 {
            return Err(Error::Config("a stream needs at least one frame".into()));
        }
        Ok(())
    }

    /// Tokens redrawn per frame in the sparse modes.
    pub fn changed_per_frame(&self, tokens: usize) -> usize {
        ((self.rho * tokens as f64).ceil() as usize).min(tokens)
    }
}

/// Deterministic sequence of `cfg.frames` token matrices of shape `tokens × dim`.
pub fn gen_stream(cfg: &StreamConfig, tokens: usize, dim: usize) -> Result<Vec<Matrix>> {
    cfg.validate()?;
    let mut rng = seeded(cfg.seed, FRAME_STREAM);
    let normal = |rng: &mut rand_chacha::ChaCha8Rng, n: usize| -> Vec<f64> {
        (0..n).map(|_| rng.sample::<f64, _>(StandardNormal)).collect()
    };
    let first = Matrix::from_vec(tokens, dim, normal(&mut rng, tokens * dim))?;

    let drifting = matches!(cfg.mode, StreamMode::Drift | StreamMode::Mixed);
    let sparse = matches!(cfg.mode, StreamMode::SparseChange | StreamMode::Mixed);
    let directions = if drifting {
        let mut dirs = Matrix::from_vec(tokens, dim, normal(&mut rng, tokens * dim))?;
        for r in 0..tokens {
            let row = dirs.row_mut(r);
            let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            for v in row.iter_mut() {
                *v *= cfg.eps / norm;
            }
        }
        Some(dirs)
    } else {
        None
    };
    let changed = cfg.changed_per_frame(tokens);

    // Frames are emitted rounded to f32 so exported fixtures reproduce them
    // exactly; the generator state itself stays in f64.
    let emit = |m: &Matrix| {
        let data = m.data().iter().map(|&v| v as f32 as f64).collect();
        Matrix::from_vec(m.rows(), m.cols(), data)
    };
    let mut frames = Vec::with_capacity(cfg.frames);
    frames.push(emit(&first)?);
    let mut next = first;
    for _ in 1..cfg.frames {
        if let Some(dirs) = &directions {
            next.add_assign(dirs)?;
        }
        if sparse && changed > 0 {
            let mut rows = sample(&mut rng, tokens, changed).into_vec();
            rows.sort_unstable();
            for r in rows {
                let noise = normal(&mut rng, dim);
                for (v, e) in next.row_mut(r).iter_mut().zip(noise) {
                    *v += cfg.sigma * e;
                }
            }
        }
        frames.push(emit(&next)?);
    }
    Ok(frames)
}

/// Writes frames as a named-tensor archive (`frames.0000`, `frames.0001`, ...).
pub fn export_stream(frames: &[Matrix], dir: &Path) -> Result<()> {
    let mut a = TensorArchive::new();
    a.metadata.insert("frames".into(), frames.len() as u64);
    for (t, f) in frames.iter().enumerate() {
        a.insert_matrix(format!("frames.{t:04}"), f);
    }
    a.write(dir)
}

pub fn import_stream(dir: &Path) -> Result<Vec<Matrix>> {
    let a = TensorArchive::read(dir)?;
    let count = a.meta("frames")? as usize;
    (0..count).map(|t| a.matrix(&format!("frames.{t:04}"))).collect()
}

//! Paired oracle/eventful runs over synthetic streams, budget sweeps and
//! wall-time measurement.

use std::io::Write;
use std::path::Path;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::block::Mode;
use crate::cost::{savings_ratio, CostCounts, CostLedger};
use crate::error::{Error, Result};
use crate::gating::Policy;
use crate::model::{baseline_forward, pooled_baseline_forward, EventfulModel, ModelConfig, ModelOutput, ModelWeights};
use crate::stream::{gen_stream, StreamConfig};
use crate::tensor::Matrix;

/// The JSON document accepted by the CLI.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub stream: StreamConfig,
    pub policy: Policy,
    /// Budget override per frame (index = frame). `null` keeps the current budget.
    #[serde(default)]
    pub schedule: Vec<Option<usize>>,
}

impl RunConfig {
    pub fn new(model: ModelConfig, stream: StreamConfig, policy: Policy) -> Self {
        Self {
            model,
            stream,
            policy,
            schedule: Vec::new(),
        }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: RunConfig = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.stream.validate()?;
        self.policy.validate()
    }

    /// Same run with both generator seeds shifted by `offset`.
    pub fn reseeded(&self, offset: u64) -> Self {
        let mut c = self.clone();
        c.model.seed = c.model.seed.wrapping_add(offset);
        c.stream.seed = c.stream.seed.wrapping_add(offset);
        c
    }
}

/// One CSV row of a run.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FrameRecord {
    pub frame: usize,
    pub r_effective: Option<usize>,
    /// Mean over blocks of tokens forwarded by each gate.
    pub selected_qkv: f64,
    pub selected_p: f64,
    pub selected_mlp: f64,
    pub macs_total: u64,
    pub macs_qk: u64,
    pub macs_av: u64,
    pub macs_tokenwise: u64,
    pub adds_overhead: u64,
    pub rel_l2_error: f64,
    pub cosine: f64,
    pub argmax_match: u8,
    pub wall_ms: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunSummary {
    pub frames: usize,
    pub mode: String,
    pub flush_rel_l2_error: f64,
    /// Means over frames after the first.
    pub mean_rel_l2_error: f64,
    pub max_rel_l2_error: f64,
    pub final_rel_l2_error: f64,
    pub mean_cosine: f64,
    pub argmax_agreement: f64,
    pub steady_macs: f64,
    pub steady_ops: f64,
    pub baseline_ops_per_frame: u64,
    /// Baseline over eventful operations (MACs plus additions), steady state.
    pub savings_ratio: Option<f64>,
    pub flush_ops: u64,
    pub total_ops: u64,
    pub mean_wall_ms: f64,
}

#[derive(Debug, Clone)]
pub struct RunReport {
    pub records: Vec<FrameRecord>,
    pub eventful_costs: Vec<CostCounts>,
    pub baseline_costs: Vec<CostCounts>,
    pub summary: RunSummary,
}

impl RunReport {
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        for r in &self.records {
            w.serialize(r)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn summary_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(&self.summary)?)
    }
}

/// Relative L2 distance `‖a − b‖ / ‖b‖` (absolute when `b` is zero).
pub fn relative_l2(a: &Matrix, b: &Matrix) -> Result<f64> {
    let diff = a.sub(b)?.frobenius_norm();
    let base = b.frobenius_norm();
    Ok(if base > 0.0 { diff / base } else { diff })
}

pub fn cosine_similarity(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        if na == nb {
            1.0
        } else {
            0.0
        }
    } else {
        dot / (na * nb)
    }
}

fn oracle(w: &ModelWeights, mode: Mode, frame: &Matrix, ledger: &mut CostLedger) -> Result<ModelOutput> {
    match mode {
        Mode::SpatialPool(p) => pooled_baseline_forward(w, frame, p, ledger),
        _ => baseline_forward(w, frame, ledger),
    }
}

fn mean(values: impl Iterator<Item = f64>) -> f64 {
    let (sum, n) = values.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    if n == 0 {
        0.0
    } else {
        sum / n as f64
    }
}

/// Runs the oracle and the eventful model side by side on generated frames.
pub fn run_pair(cfg: &RunConfig) -> Result<RunReport> {
    cfg.validate()?;
    let weights = ModelWeights::random(&cfg.model)?;
    let frames = gen_stream(&cfg.stream, cfg.model.tokens, cfg.model.dim)?;
    run_pair_on(cfg, &weights, &frames)
}

/// [`run_pair`] with explicit weights and frames (e.g. imported fixtures).
pub fn run_pair_on(cfg: &RunConfig, weights: &ModelWeights, frames: &[Matrix]) -> Result<RunReport> {
    if weights.tokens() != cfg.model.tokens || weights.dim() != cfg.model.dim {
        return Err(Error::Config(format!(
            "weights are for {}x{} tokens, config says {}x{}",
            weights.tokens(),
            weights.dim(),
            cfg.model.tokens,
            cfg.model.dim
        )));
    }
    let mode = cfg.model.mode();
    let n = cfg.model.tokens;
    let mut model = EventfulModel::new(weights, mode, cfg.policy)?;
    let mut ev_ledger = CostLedger::new();
    let mut base_ledger = CostLedger::new();
    let mut records = Vec::with_capacity(frames.len());

    for (t, frame) in frames.iter().enumerate() {
        if let Some(Some(r)) = cfg.schedule.get(t) {
            model.set_budget(*r);
        }
        let expect = oracle(weights, mode, frame, &mut base_ledger)?;
        base_ledger.end_frame();

        let start = Instant::now();
        let got = model.forward(weights, frame, &mut ev_ledger)?;
        let wall_ms = start.elapsed().as_secs_f64() * 1e3;
        let cost = ev_ledger.end_frame();

        let sel = model.last_selections();
        let blocks = sel.len().max(1) as f64;
        let policy = model.blocks().first().map_or(cfg.policy, |b| b.policy());
        records.push(FrameRecord {
            frame: t + 1,
            r_effective: policy.fixed_count(n),
            selected_qkv: sel.iter().map(|s| s.qkv as f64).sum::<f64>() / blocks,
            selected_p: sel.iter().map(|s| s.proj as f64).sum::<f64>() / blocks,
            selected_mlp: sel.iter().map(|s| s.mlp as f64).sum::<f64>() / blocks,
            macs_total: cost.macs(),
            macs_qk: cost.qk,
            macs_av: cost.av,
            macs_tokenwise: cost.token_wise,
            adds_overhead: cost.adds,
            rel_l2_error: relative_l2(&got.tokens, &expect.tokens)?,
            cosine: cosine_similarity(got.tokens.data(), expect.tokens.data()),
            argmax_match: u8::from(got.argmax() == expect.argmax()),
            wall_ms,
        });
    }

    let eventful_costs = ev_ledger.frames().to_vec();
    let baseline_costs = base_ledger.frames().to_vec();
    let steady = &records[1.min(records.len())..];
    let steady_costs = &eventful_costs[1.min(eventful_costs.len())..];
    let steady_ops = mean(steady_costs.iter().map(|c| c.total() as f64));
    let baseline_ops = baseline_costs.first().map_or(0, |c| c.total());
    let summary = RunSummary {
        frames: records.len(),
        mode: mode.to_string(),
        flush_rel_l2_error: records.first().map_or(0.0, |r| r.rel_l2_error),
        mean_rel_l2_error: mean(steady.iter().map(|r| r.rel_l2_error)),
        max_rel_l2_error: steady.iter().map(|r| r.rel_l2_error).fold(0.0, f64::max),
        final_rel_l2_error: records.last().map_or(0.0, |r| r.rel_l2_error),
        mean_cosine: mean(steady.iter().map(|r| r.cosine)),
        argmax_agreement: mean(steady.iter().map(|r| r.argmax_match as f64)),
        steady_macs: mean(steady_costs.iter().map(|c| c.macs() as f64)),
        steady_ops,
        baseline_ops_per_frame: baseline_ops,
        savings_ratio: if steady_costs.is_empty() {
            None
        } else {
            savings_ratio(baseline_ops as f64, steady_ops).ok()
        },
        flush_ops: eventful_costs.first().map_or(0, |c| c.total()),
        total_ops: eventful_costs.iter().map(|c| c.total()).sum(),
        mean_wall_ms: mean(records.iter().skip(1).map(|r| r.wall_ms)),
    };
    Ok(RunReport {
        records,
        eventful_costs,
        baseline_costs,
        summary,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepRow {
    pub r: usize,
    pub seeds: usize,
    pub mean_error: f64,
    pub final_error: f64,
    pub argmax_agreement: f64,
    pub steady_macs: f64,
    pub steady_ops: f64,
    pub baseline_ops: u64,
    pub savings_ratio: f64,
}

/// One top-`r` run per `(r, seed)` with fresh state; rows are averaged over
/// seeds and sorted by `r`. Seed `s` shifts both the model and stream seeds.
pub fn sweep_budget(cfg: &RunConfig, r_values: &[usize], seeds: usize) -> Result<Vec<SweepRow>> {
    if r_values.is_empty() || seeds == 0 {
        return Err(Error::Config("sweep needs at least one budget and one seed".into()));
    }
    let mut rs = r_values.to_vec();
    rs.sort_unstable();
    rs.dedup();
    let jobs: Vec<(usize, u64)> = rs.iter().flat_map(|&r| (0..seeds as u64).map(move |s| (r, s))).collect();
    let summaries = jobs
        .par_iter()
        .map(|&(r, s)| {
            let mut c = cfg.reseeded(s);
            c.policy = Policy::TopR { r };
            c.schedule.clear();
            run_pair(&c).map(|rep| (r, rep.summary))
        })
        .collect::<Result<Vec<_>>>()?;

    rs.iter()
        .map(|&r| {
            let group: Vec<&RunSummary> = summaries.iter().filter(|(rr, _)| *rr == r).map(|(_, s)| s).collect();
            let steady_ops = mean(group.iter().map(|s| s.steady_ops));
            let baseline_ops = group[0].baseline_ops_per_frame;
            Ok(SweepRow {
                r,
                seeds: group.len(),
                mean_error: mean(group.iter().map(|s| s.mean_rel_l2_error)),
                final_error: mean(group.iter().map(|s| s.final_rel_l2_error)),
                argmax_agreement: mean(group.iter().map(|s| s.argmax_agreement)),
                steady_macs: mean(group.iter().map(|s| s.steady_macs)),
                steady_ops,
                baseline_ops,
                savings_ratio: savings_ratio(baseline_ops as f64, steady_ops).unwrap_or(f64::NAN),
            })
        })
        .collect()
}

pub fn write_rows_csv<T: Serialize, W: Write>(rows: &[T], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct WallTimeRow {
    pub variant: String,
    pub median_ms: f64,
    pub samples: usize,
}

fn median(mut v: Vec<f64>) -> f64 {
    if v.is_empty() {
        return f64::NAN;
    }
    v.sort_by(f64::total_cmp);
    let m = v.len() / 2;
    if v.len() % 2 == 1 {
        v[m]
    } else {
        0.5 * (v[m - 1] + v[m])
    }
}

/// Median per-frame wall time of the dense model and the `full` and
/// `tokenwise_only` eventful variants on the same frames.
///
/// The three variants are timed back to back on each frame so background
/// load affects them alike. The flush frame of every repetition is excluded.
pub fn measure_walltime(cfg: &RunConfig, repetitions: usize) -> Result<Vec<WallTimeRow>> {
    if repetitions < 3 {
        return Err(Error::Config("wall-time measurement needs at least 3 repetitions".into()));
    }
    cfg.validate()?;
    let weights = ModelWeights::random(&cfg.model)?;
    let frames = gen_stream(&cfg.stream, cfg.model.tokens, cfg.model.dim)?;
    let variants = [Mode::Full, Mode::TokenwiseOnly];
    let mut base_ms = Vec::new();
    let mut var_ms = vec![Vec::new(); variants.len()];

    for _ in 0..repetitions {
        let mut models = variants
            .iter()
            .map(|&m| EventfulModel::new(&weights, m, cfg.policy))
            .collect::<Result<Vec<_>>>()?;
        for (t, frame) in frames.iter().enumerate() {
            if let Some(Some(r)) = cfg.schedule.get(t) {
                models.iter_mut().for_each(|m| m.set_budget(*r));
            }
            let mut ledger = CostLedger::new();
            let start = Instant::now();
            std::hint::black_box(baseline_forward(&weights, frame, &mut ledger)?);
            let base = start.elapsed().as_secs_f64() * 1e3;
            let mut times = Vec::with_capacity(models.len());
            for m in models.iter_mut() {
                let start = Instant::now();
                std::hint::black_box(m.forward(&weights, frame, &mut ledger)?);
                times.push(start.elapsed().as_secs_f64() * 1e3);
            }
            if t > 0 {
                base_ms.push(base);
                for (acc, ms) in var_ms.iter_mut().zip(times) {
                    acc.push(ms);
                }
            }
        }
    }

    let mut rows = vec![WallTimeRow {
        variant: "baseline".into(),
        samples: base_ms.len(),
        median_ms: median(base_ms),
    }];
    for (m, ms) in variants.iter().zip(var_ms) {
        rows.push(WallTimeRow {
            variant: m.name().into(),
            samples: ms.len(),
            median_ms: median(ms),
        });
    }
    Ok(rows)
}

//! Self-checks comparing the incremental computations against from-scratch
//! recomputation. Used by the `equiv` CLI command.

use rand::seq::index::sample;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::Serialize;

use crate::attention::{av_delta_update, qk_sparse_update, qk_sparse_update_nonoverlap};
use crate::block::Mode;
use crate::cost::{count_block_eventful, count_block_flush, CostLedger};
use crate::error::Result;
use crate::gating::{Axis, DeltaGate, Policy};
use crate::harness::{run_pair, RunConfig};
use crate::index::IndexSet;
use crate::model::{EventfulModel, ModelConfig, ModelWeights};
use crate::rng::seeded;
use crate::stream::{gen_stream, StreamConfig};
use crate::tensor::{softmax_rows, Matrix};

/// Tolerance for exact-arithmetic identities evaluated in `f64`.
pub const STATE_TOL: f64 = 1e-6;
/// Tolerance on relative output error at full budget.
pub const OUTPUT_TOL: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CheckResult {
    pub name: String,
    pub passed: bool,
    /// Largest observed deviation (or mismatch count for exact checks).
    pub worst: f64,
    pub tolerance: f64,
}

impl CheckResult {
    fn new(name: impl Into<String>, worst: f64, tolerance: f64) -> Self {
        Self {
            name: name.into(),
            passed: worst <= tolerance,
            worst,
            tolerance,
        }
    }
}

fn normal_matrix<R: Rng>(rng: &mut R, rows: usize, cols: usize) -> Matrix {
    let data = (0..rows * cols).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
    Matrix::from_vec(rows, cols, data).expect("finite samples")
}

fn random_subset<R: Rng>(rng: &mut R, n: usize, m: usize) -> IndexSet {
    IndexSet::from_unsorted(sample(rng, n, m).into_vec(), n).expect("in range")
}

/// One random sparse QK update; returns the worst deviation of the two
/// update variants from `q·kᵀ`.
pub fn qk_instance(seed: u64) -> Result<f64> {
    let mut rng = seeded(seed, 0x514b);
    let n = rng.random_range(1..=24);
    let d = rng.random_range(1..=8);
    let m = rng.random_range(0..=n);
    let mut q = normal_matrix(&mut rng, n, d);
    let mut k = normal_matrix(&mut rng, n, d);
    let scores = q.matmul_t(&k)?;
    let idx = random_subset(&mut rng, n, m);
    let q_sel = normal_matrix(&mut rng, m, d);
    let k_sel = normal_matrix(&mut rng, m, d);
    q.scatter_rows(&idx, &q_sel)?;
    k.scatter_rows(&idx, &k_sel)?;
    let expect = q.matmul_t(&k)?;

    let mut a = scores.clone();
    qk_sparse_update(&mut a, &q, &k, &q_sel, &k_sel, &idx, &idx)?;
    let mut b = scores;
    qk_sparse_update_nonoverlap(&mut b, &q, &k, &q_sel, &k_sel, &idx, &idx)?;
    Ok(a.max_abs_diff(&expect)?.max(b.max_abs_diff(&expect)?))
}

/// A random sequence of AV delta updates; returns the worst deviation of the
/// cache from `u_A · u_v` over all steps.
pub fn av_instance(seed: u64, steps: usize) -> Result<f64> {
    let mut rng = seeded(seed, 0x4156);
    let n = rng.random_range(1..=24);
    let d = rng.random_range(1..=8);
    let all = IndexSet::all(n);
    let mut gate = DeltaGate::with_axis(Policy::TopR { r: n }, Axis::Cols);
    let a0 = softmax_rows(&normal_matrix(&mut rng, n, n));
    let mut u_v = normal_matrix(&mut rng, n, d);
    gate.forced(&a0, &all)?;
    let mut cache = a0.matmul(&u_v)?;
    let mut ledger = CostLedger::new();
    let mut worst: f64 = 0.0;
    for _ in 0..steps {
        let m = rng.random_range(0..=n);
        let idx = random_subset(&mut rng, n, m);
        let a = softmax_rows(&normal_matrix(&mut rng, n, n));
        let v_new = normal_matrix(&mut rng, m, d);
        let v_delta = v_new.sub(&u_v.gather_rows(&idx)?)?;
        u_v.scatter_rows(&idx, &v_new)?;
        av_delta_update(&mut cache, &mut gate, &a, &idx, &v_delta, &v_new, &mut ledger)?;
        let u_a = gate.reference().expect("flushed");
        worst = worst.max(cache.max_abs_diff(&u_a.matmul(&u_v)?)?);
    }
    Ok(worst)
}

fn small_config(mode: Mode, r: usize, seed: u64) -> RunConfig {
    RunConfig::new(
        ModelConfig::new(2, 16, 8, 2).with_mode(mode).with_seed(seed),
        StreamConfig::sparse_change(0.25, 1.0, 6, seed),
        Policy::TopR { r },
    )
}

const MODES: [Mode; 4] = [Mode::Full, Mode::TokenwiseOnly, Mode::Stgt, Mode::SpatialPool(2)];

/// Runs every check with `instances` random cases each.
pub fn run_suite(seed: u64, instances: usize) -> Result<Vec<CheckResult>> {
    let mut out = Vec::new();

    let mut qk: f64 = 0.0;
    let mut av: f64 = 0.0;
    for i in 0..instances as u64 {
        qk = qk.max(qk_instance(seed.wrapping_add(i))?);
        av = av.max(av_instance(seed.wrapping_add(i), 5)?);
    }
    out.push(CheckResult::new("qk_sparse_update", qk, STATE_TOL));
    out.push(CheckResult::new("av_delta_update", av, STATE_TOL));

    for mode in MODES {
        let rep = run_pair(&small_config(mode, 16, seed))?;
        let worst = rep.records.iter().map(|r| r.rel_l2_error).fold(0.0, f64::max);
        out.push(CheckResult::new(format!("full_budget[{mode}]"), worst, OUTPUT_TOL));
    }

    for mode in MODES {
        let cfg = small_config(mode, 4, seed);
        let w = ModelWeights::random(&cfg.model)?;
        let frames = gen_stream(&cfg.stream, cfg.model.tokens, cfg.model.dim)?;
        let mut model = EventfulModel::new(&w, mode, cfg.policy)?;
        let mut ledger = CostLedger::new();
        let mut worst: f64 = 0.0;
        for f in &frames {
            model.forward(&w, f, &mut ledger)?;
            for b in model.blocks() {
                let rep = b.attention().check_invariants()?;
                worst = worst.max(rep.qk_max_abs).max(rep.av_max_abs);
            }
        }
        out.push(CheckResult::new(format!("state_invariants[{mode}]"), worst, STATE_TOL));
    }

    for mode in [Mode::Full, Mode::TokenwiseOnly, Mode::Stgt] {
        let cfg = small_config(mode, 4, seed);
        let w = ModelWeights::random(&cfg.model)?;
        let frames = gen_stream(&cfg.stream, cfg.model.tokens, cfg.model.dim)?;
        let mut model = EventfulModel::new(&w, mode, cfg.policy)?;
        let mut ledger = CostLedger::new();
        let shape = w.blocks[0].shape(cfg.model.tokens);
        let blocks = w.blocks.len() as u64;
        let mut mismatches = 0usize;
        for (t, f) in frames.iter().enumerate() {
            model.forward(&w, f, &mut ledger)?;
            let got = ledger.end_frame();
            let per_block = if t == 0 {
                count_block_flush(shape)
            } else {
                count_block_eventful(shape, 4, mode)?
            };
            let want = (
                per_block.token_wise * blocks,
                per_block.qk * blocks,
                per_block.av * blocks,
                per_block.adds * blocks,
            );
            if (got.token_wise, got.qk, got.av, got.adds) != want {
                mismatches += 1;
            }
        }
        out.push(CheckResult::new(format!("ledger_matches_formula[{mode}]"), mismatches as f64, 0.0));
    }
    Ok(out)
}

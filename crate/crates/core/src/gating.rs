//! Token gates, buffers and selection policies.
//!
//! A [`Gate`] keeps a reference copy `u` of its input and, every frame,
//! forwards only the tokens whose distance from their reference is judged
//! significant by its [`Policy`]. A [`Buffer`] does the inverse: it scatters
//! the recomputed subset back into a full-size tensor. [`DeltaGate`] is the
//! variant used around the attention-value product; it hands back the
//! updated reference plus the gathered change since the last update.
//!
//! [`StgtGate`] is a comparison baseline that compares against the previous
//! frame instead of a reference, so unselected drift is forgotten.

use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::index::IndexSet;
use crate::tensor::Matrix;

/// Token selection rule applied to per-token error norms.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Policy {
    /// The `r` tokens with the largest error norm.
    TopR { r: usize },
    /// Every token whose error norm is strictly greater than `h`.
    Threshold { h: f64 },
}

impl Policy {
    pub fn validate(&self) -> Result<()> {
        match *self {
            Policy::Threshold { h } if !(h >= 0.0 && h.is_finite()) => {
                Err(Error::Config(format!("threshold must be finite and >= 0, got {h}")))
            }
            _ => Ok(()),
        }
    }

    pub fn select(&self, norms: &[f64]) -> IndexSet {
        match *self {
            Policy::TopR { r } => policy_top_r(norms, r),
            Policy::Threshold { h } => policy_threshold(norms, h),
        }
    }

    /// Number of tokens this policy selects out of `n`, if that is fixed.
    pub fn fixed_count(&self, n: usize) -> Option<usize> {
        match *self {
            Policy::TopR { r } => Some(r.min(n)),
            Policy::Threshold { .. } => None,
        }
    }
}

/// The `min(r, N)` largest norms, ties going to the smaller index. Sorted ascending.
pub fn policy_top_r(norms: &[f64], r: usize) -> IndexSet {
    let n = norms.len();
    let r = r.min(n);
    let mut order: Vec<usize> = (0..n).collect();
    let by_rank = |a: &usize, b: &usize| norms[*b].total_cmp(&norms[*a]).then(a.cmp(b));
    if r < n && r > 0 {
        order.select_nth_unstable_by(r - 1, by_rank);
    }
    let mut picked = order[..r].to_vec();
    picked.sort_unstable();
    IndexSet::new(picked, n).expect("distinct in-range indices")
}

/// Exactly `{ i : norms[i] > h }`.
pub fn policy_threshold(norms: &[f64], h: f64) -> IndexSet {
    IndexSet::new(
        norms
            .iter()
            .enumerate()
            .filter_map(|(i, &v)| (v > h).then_some(i))
            .collect(),
        norms.len(),
    )
    .expect("ascending in-range indices")
}

/// Which axis of the gated tensor indexes tokens.
///
/// Token gates use rows. The attention-matrix delta gate treats each column
/// of the N×N attention matrix as one token.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Axis {
    #[default]
    Rows,
    Cols,
}

impl Axis {
    fn tokens(self, m: &Matrix) -> usize {
        match self {
            Axis::Rows => m.rows(),
            Axis::Cols => m.cols(),
        }
    }

    fn norms(self, m: &Matrix) -> Vec<f64> {
        match self {
            Axis::Rows => m.row_l2_norms(),
            Axis::Cols => m.col_l2_norms(),
        }
    }

    fn gather(self, m: &Matrix, idx: &IndexSet) -> Result<Matrix> {
        match self {
            Axis::Rows => m.gather_rows(idx),
            Axis::Cols => m.gather_cols(idx),
        }
    }

    fn scatter(self, m: &mut Matrix, idx: &IndexSet, src: &Matrix) -> Result<()> {
        match self {
            Axis::Rows => m.scatter_rows(idx, src),
            Axis::Cols => m.scatter_cols(idx, src),
        }
    }
}

fn check_shape(op: &'static str, reference: &Matrix, c: &Matrix) -> Result<()> {
    if reference.shape() != c.shape() {
        return Err(shape_err(
            op,
            format!("{}x{}", reference.rows(), reference.cols()),
            format!("{}x{}", c.rows(), c.cols()),
        ));
    }
    Ok(())
}

/// Reference-based token gate.
#[derive(Debug, Clone)]
pub struct Gate {
    reference: Option<Matrix>,
    policy: Policy,
    last_mask: IndexSet,
}

impl Gate {
    pub fn new(policy: Policy) -> Self {
        Self {
            reference: None,
            policy,
            last_mask: IndexSet::empty(),
        }
    }

    pub fn policy(&self) -> Policy {
        self.policy
    }

    pub fn set_policy(&mut self, policy: Policy) {
        self.policy = policy;
    }

    pub fn is_initialized(&self) -> bool {
        self.reference.is_some()
    }

    pub fn reference(&self) -> Option<&Matrix> {
        self.reference.as_ref()
    }

    pub fn last_mask(&self) -> &IndexSet {
        &self.last_mask
    }

    /// Row norms of `u − c`; `None` before the first frame.
    pub fn error_norms(&self, c: &Matrix) -> Result<Option<Vec<f64>>> {
        match &self.reference {
            None => Ok(None),
            Some(u) => {
                check_shape("gate", u, c)?;
                Ok(Some(u.sub(c)?.row_l2_norms()))
            }
        }
    }

    /// Selects tokens of `c`, updates their references and returns them gathered.
    ///
    /// The first call selects everything and initializes the references.
    pub fn forward(&mut self, c: &Matrix) -> Result<(IndexSet, Matrix)> {
        let idx = match self.error_norms(c)? {
            None => {
                self.reference = Some(c.clone());
                self.last_mask = IndexSet::all(c.rows());
                return Ok((self.last_mask.clone(), c.clone()));
            }
            Some(norms) => self.policy.select(&norms),
        };
        let picked = c.gather_rows(&idx)?;
        self.reference
            .as_mut()
            .expect("initialized above")
            .scatter_rows(&idx, &picked)?;
        self.last_mask = idx.clone();
        Ok((idx, picked))
    }
}

/// Gate variant that reports the updated reference and the gathered change.
///
/// The change is reported new-minus-old (`c − u_prev`) so that
/// `u_prev + delta == u` on the selected tokens.
#[derive(Debug, Clone)]
pub struct DeltaGate {
    reference: Option<Matrix>,
    policy: Policy,
    last_mask: IndexSet,
    axis: Axis,
}

impl DeltaGate {
    pub fn new(policy: Policy) -> Self {
        Self::with_axis(policy, Axis::Rows)
    }

    pub fn with_axis(policy: Policy, axis: Axis) -> Self {
        Self {
            reference: None,
            policy,
            last_mask: IndexSet::empty(),
            axis,
        }
    }

    pub fn policy(&self) -> Policy {
        self.policy
    }

    pub fn set_policy(&mut self, policy: Policy) {
        self.policy = policy;
    }

    pub fn axis(&self) -> Axis {
        self.axis
    }

    pub fn is_initialized(&self) -> bool {
        self.reference.is_some()
    }

    pub fn reference(&self) -> Option<&Matrix> {
        self.reference.as_ref()
    }

    pub fn last_mask(&self) -> &IndexSet {
        &self.last_mask
    }

    /// Policy-driven step. Returns `(idx, u, delta)`.
    ///
    /// On the first frame every token is selected, `u = c` and `delta = c`.
    pub fn forward(&mut self, c: &Matrix) -> Result<(IndexSet, &Matrix, Matrix)> {
        let idx = match &self.reference {
            None => IndexSet::all(self.axis.tokens(c)),
            Some(u) => {
                check_shape("delta_gate", u, c)?;
                self.policy.select(&self.axis.norms(&u.sub(c)?))
            }
        };
        let (u, delta) = self.forced(c, &idx)?;
        Ok((idx, u, delta))
    }

    /// Step with an externally chosen selection in place of the policy.
    ///
    /// Before the first frame the selection must cover every token.
    pub fn forced(&mut self, c: &Matrix, idx: &IndexSet) -> Result<(&Matrix, Matrix)> {
        let tokens = self.axis.tokens(c);
        idx.check_bounds(tokens)?;
        if self.reference.is_none() {
            if !idx.is_full(tokens) {
                return Err(Error::PartialFlush {
                    expected: tokens,
                    actual: idx.len(),
                });
            }
            self.last_mask = idx.clone();
            return Ok((self.reference.insert(c.clone()), c.clone()));
        }
        let u = self.reference.as_mut().expect("checked above");
        check_shape("delta_gate", u, c)?;
        let fresh = self.axis.gather(c, idx)?;
        let delta = fresh.sub(&self.axis.gather(u, idx)?)?;
        self.axis.scatter(u, idx, &fresh)?;
        self.last_mask = idx.clone();
        Ok((u, delta))
    }
}

/// Holds the most recent known value of every token.
#[derive(Debug, Clone)]
pub struct Buffer {
    tokens: usize,
    state: Option<Matrix>,
}

impl Buffer {
    pub fn new(tokens: usize) -> Self {
        Self {
            tokens,
            state: None,
        }
    }

    pub fn state(&self) -> Option<&Matrix> {
        self.state.as_ref()
    }

    pub fn tokens(&self) -> usize {
        self.tokens
    }

    /// Scatters `values` into the state at `idx` and returns the full state.
    pub fn forward(&mut self, idx: &IndexSet, values: &Matrix) -> Result<&Matrix> {
        idx.check_bounds(self.tokens)?;
        if self.state.is_none() {
            if !idx.is_full(self.tokens) {
                return Err(Error::PartialFlush {
                    expected: self.tokens,
                    actual: idx.len(),
                });
            }
            if values.rows() != self.tokens {
                return Err(shape_err("buffer", self.tokens, values.rows()));
            }
            return Ok(self.state.insert(values.clone()));
        }
        let state = self.state.as_mut().expect("checked above");
        state.scatter_rows(idx, values)?;
        Ok(state)
    }
}

/// Previous-frame comparison gate (lossy baseline).
///
/// Errors are measured against the last frame rather than against the value
/// each token had when last forwarded, and the comparison tensor is
/// overwritten with the full input every frame.
#[derive(Debug, Clone)]
pub struct StgtGate {
    previous: Option<Matrix>,
    policy: Policy,
    last_mask: IndexSet,
}

impl StgtGate {
    pub fn new(policy: Policy) -> Self {
        Self {
            previous: None,
            policy,
            last_mask: IndexSet::empty(),
        }
    }

    pub fn policy(&self) -> Policy {
        self.policy
    }

    pub fn set_policy(&mut self, policy: Policy) {
        self.policy = policy;
    }

    pub fn previous(&self) -> Option<&Matrix> {
        self.previous.as_ref()
    }

    pub fn last_mask(&self) -> &IndexSet {
        &self.last_mask
    }

    pub fn error_norms(&self, c: &Matrix) -> Result<Option<Vec<f64>>> {
        match &self.previous {
            None => Ok(None),
            Some(p) => {
                check_shape("stgt_gate", p, c)?;
                Ok(Some(p.sub(c)?.row_l2_norms()))
            }
        }
    }

    pub fn forward(&mut self, c: &Matrix) -> Result<(IndexSet, Matrix)> {
        let idx = match self.error_norms(c)? {
            None => IndexSet::all(c.rows()),
            Some(norms) => self.policy.select(&norms),
        };
        let picked = c.gather_rows(&idx)?;
        self.previous = Some(c.clone());
        self.last_mask = idx.clone();
        Ok((idx, picked))
    }
}

/// A token gate of either flavour, as placed before token-wise operators.
#[derive(Debug, Clone)]
pub enum TokenGate {
    Reference(Gate),
    Stgt(StgtGate),
}

impl TokenGate {
    pub fn forward(&mut self, c: &Matrix) -> Result<(IndexSet, Matrix)> {
        match self {
            TokenGate::Reference(g) => g.forward(c),
            TokenGate::Stgt(g) => g.forward(c),
        }
    }

    pub fn policy(&self) -> Policy {
        match self {
            TokenGate::Reference(g) => g.policy(),
            TokenGate::Stgt(g) => g.policy(),
        }
    }

    pub fn set_policy(&mut self, policy: Policy) {
        match self {
            TokenGate::Reference(g) => g.set_policy(policy),
            TokenGate::Stgt(g) => g.set_policy(policy),
        }
    }

    pub fn last_mask(&self) -> &IndexSet {
        match self {
            TokenGate::Reference(g) => g.last_mask(),
            TokenGate::Stgt(g) => g.last_mask(),
        }
    }

    /// Stored comparison tensor (reference or previous frame).
    pub fn state(&self) -> Option<&Matrix> {
        match self {
            TokenGate::Reference(g) => g.reference(),
            TokenGate::Stgt(g) => g.previous(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn top_r(r: usize) -> Policy {
        Policy::TopR { r }
    }

    fn sorted_oracle(norms: &[f64], r: usize) -> Vec<usize> {
        let mut order: Vec<usize> = (0..norms.len()).collect();
        order.sort_by(|&a, &b| norms[b].partial_cmp(&norms[a]).unwrap().then(a.cmp(&b)));
        let mut v = order[..r.min(norms.len())].to_vec();
        v.sort();
        v
    }

    #[test]
    fn top_r_examples() {
        assert_eq!(policy_top_r(&[0.0, 1.0, 2.0, 0.0], 2).as_slice(), &[1, 2]);
        assert_eq!(policy_top_r(&[1.0, 1.0, 1.0], 2).as_slice(), &[0, 1]);
        assert_eq!(policy_top_r(&[3.0, 1.0], 5).as_slice(), &[0, 1]);
        assert!(policy_top_r(&[3.0, 1.0], 0).is_empty());
        assert!(policy_top_r(&[], 3).is_empty());
    }

    #[test]
    fn threshold_examples() {
        assert_eq!(policy_threshold(&[0.0, 1.0, 2.0], 0.5).as_slice(), &[1, 2]);
        assert!(policy_threshold(&[0.0, 0.0], 0.0).is_empty());
        assert_eq!(policy_threshold(&[1.0, 1.0 + 1e-12], 1.0).as_slice(), &[1]);
        for h in [0.2, 1.0, 5.0] {
            assert!(Policy::Threshold { h }.validate().is_ok());
        }
        assert!(Policy::Threshold { h: -0.1 }.validate().is_err());
        assert!(Policy::Threshold { h: f64::NAN }.validate().is_err());
    }

    #[test]
    fn policy_json_shape() {
        let p: Policy = serde_json::from_str(r#"{"kind":"top_r","r":4}"#).unwrap();
        assert_eq!(p, top_r(4));
        let p: Policy = serde_json::from_str(r#"{"kind":"threshold","h":0.2}"#).unwrap();
        assert_eq!(p, Policy::Threshold { h: 0.2 });
    }

    #[test]
    fn gate_first_call_flushes() {
        let mut g = Gate::new(top_r(1));
        let c = Matrix::from_rows(&[[1.0, 2.0], [3.0, 4.0], [5.0, 6.0]]);
        let (idx, out) = g.forward(&c).unwrap();
        assert!(idx.is_full(3));
        assert_eq!(out, c);
        assert_eq!(g.reference(), Some(&c));
    }

    #[test]
    fn gate_worked_example() {
        let mut g = Gate::new(top_r(2));
        g.forward(&Matrix::from_rows(&[[0.0, 0.0], [1.0, 0.0], [0.0, 1.0], [1.0, 1.0]]))
            .unwrap();
        let c = Matrix::from_rows(&[[0.0, 0.0], [2.0, 0.0], [0.0, 3.0], [1.0, 1.0]]);
        assert_eq!(g.error_norms(&c).unwrap().unwrap(), vec![0.0, 1.0, 2.0, 0.0]);
        let (idx, picked) = g.forward(&c).unwrap();
        assert_eq!(idx.as_slice(), &[1, 2]);
        assert_eq!(picked, Matrix::from_rows(&[[2.0, 0.0], [0.0, 3.0]]));
        assert_eq!(g.reference().unwrap(), &c);
        assert_eq!(g.last_mask(), &idx);
    }

    #[test]
    fn gate_static_input_is_noop() {
        let mut g = Gate::new(top_r(1));
        let c = Matrix::from_rows(&[[1.0], [2.0]]);
        g.forward(&c).unwrap();
        let (idx, picked) = g.forward(&c).unwrap();
        assert_eq!(idx.as_slice(), &[0]);
        assert_eq!(picked, Matrix::from_rows(&[[1.0]]));
        assert_eq!(g.reference().unwrap(), &c);
    }

    #[test]
    fn gate_rejects_shape_change() {
        let mut g = Gate::new(top_r(1));
        g.forward(&Matrix::zeros(3, 2)).unwrap();
        assert!(matches!(g.forward(&Matrix::zeros(4, 2)), Err(Error::Shape { .. })));
    }

    #[test]
    fn delta_gate_examples() {
        let mut g = DeltaGate::new(top_r(1));
        let prev = Matrix::from_rows(&[[0.0, 0.0], [1.0, 0.0]]);
        {
            let (idx, u, delta) = g.forward(&prev).unwrap();
            assert!(idx.is_full(2));
            assert_eq!(u, &prev);
            assert_eq!(delta, prev);
        }
        let c = Matrix::from_rows(&[[0.0, 0.0], [3.0, 0.0]]);
        let (idx, u, delta) = g.forward(&c).unwrap();
        assert_eq!(idx.as_slice(), &[1]);
        assert_eq!(u, &c);
        assert_eq!(delta, Matrix::from_rows(&[[2.0, 0.0]]));

        // unchanged input: zero deltas whatever is selected
        let (_, _, delta) = g.forward(&c).unwrap();
        assert!(delta.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn delta_gate_forced_cases() {
        let prev = Matrix::from_rows(&[[0.0, 0.0], [1.0, 0.0], [0.0, 1.0], [1.0, 1.0]]);
        let c = Matrix::from_rows(&[[0.0, 0.0], [2.0, 0.0], [0.0, 3.0], [1.0, 1.0]]);

        let mut full = DeltaGate::new(top_r(2));
        assert!(matches!(
            full.forced(&prev, &IndexSet::new(vec![0], 4).unwrap()),
            Err(Error::PartialFlush { .. })
        ));
        full.forced(&prev, &IndexSet::all(4)).unwrap();
        let (u, delta) = full.forced(&c, &IndexSet::all(4)).unwrap();
        assert_eq!(u, &c);
        assert_eq!(delta, c.sub(&prev).unwrap());

        let mut none = DeltaGate::new(top_r(2));
        none.forced(&prev, &IndexSet::all(4)).unwrap();
        let (u, delta) = none.forced(&c, &IndexSet::empty()).unwrap();
        assert_eq!(u, &prev);
        assert_eq!(delta.rows(), 0);

        // forced with the policy's own choice reproduces the policy step
        let mut by_policy = DeltaGate::new(top_r(2));
        let mut by_force = DeltaGate::new(top_r(2));
        by_policy.forward(&prev).unwrap();
        by_force.forward(&prev).unwrap();
        let (idx, u_p, d_p) = by_policy.forward(&c).unwrap();
        let (u_p, d_p) = (u_p.clone(), d_p);
        let (u_f, d_f) = by_force.forced(&c, &idx).unwrap();
        assert_eq!(u_f, &u_p);
        assert_eq!(d_f, d_p);

        assert!(matches!(
            none.forced(&c, &IndexSet::new(vec![9], 10).unwrap()),
            Err(Error::IndexOutOfRange { .. })
        ));
    }

    #[test]
    fn column_axis_delta_gate() {
        let mut g = DeltaGate::with_axis(top_r(1), Axis::Cols);
        let a0 = Matrix::from_rows(&[[1.0, 0.0], [0.0, 1.0]]);
        g.forward(&a0).unwrap();
        let a1 = Matrix::from_rows(&[[0.6, 0.0], [0.4, 1.0]]);
        let (idx, u, delta) = g.forward(&a1).unwrap();
        assert_eq!(idx.as_slice(), &[0]);
        assert_eq!(u, &a1);
        assert_eq!(delta.shape(), (2, 1));
        assert!((delta.get(0, 0) + 0.4).abs() < 1e-15);
        assert!((delta.get(1, 0) - 0.4).abs() < 1e-15);
    }

    #[test]
    fn buffer_examples() {
        let mut b = Buffer::new(2);
        assert!(matches!(
            b.forward(&IndexSet::new(vec![1], 2).unwrap(), &Matrix::from_rows(&[[1.0]])),
            Err(Error::PartialFlush { .. })
        ));
        let init = Matrix::zeros(2, 1);
        assert_eq!(b.forward(&IndexSet::all(2), &init).unwrap(), &init);
        assert_eq!(b.forward(&IndexSet::empty(), &Matrix::zeros(0, 1)).unwrap(), &init);
        let out = b
            .forward(&IndexSet::new(vec![1], 2).unwrap(), &Matrix::from_rows(&[[9.0]]))
            .unwrap();
        assert_eq!(out, &Matrix::from_rows(&[[0.0], [9.0]]));
        assert!(b.forward(&IndexSet::all(2), &Matrix::zeros(1, 1)).is_err());
    }

    #[test]
    fn stgt_static_and_flush() {
        let mut g = StgtGate::new(top_r(2));
        let c = Matrix::from_rows(&[[1.0], [2.0], [3.0]]);
        let (idx, _) = g.forward(&c).unwrap();
        assert!(idx.is_full(3));
        assert_eq!(g.error_norms(&c).unwrap().unwrap(), vec![0.0; 3]);
        let (idx, _) = g.forward(&c).unwrap();
        assert_eq!(idx.as_slice(), &[0, 1]);
    }

    // Ten-frame simulation: token 0 drifts by δ each frame while token 1 jumps
    // by a large amount, so top-1 always picks token 1. The reference gate's
    // error for token 0 grows as t·‖δ‖; the STGT gate only ever sees ‖δ‖.
    #[test]
    fn stgt_forgets_unselected_drift() {
        let delta = 0.1;
        let mut reference = Gate::new(top_r(1));
        let mut stgt = StgtGate::new(top_r(1));
        let frame = |t: usize| Matrix::from_rows(&[[t as f64 * delta], [t as f64 * 100.0]]);
        reference.forward(&frame(0)).unwrap();
        stgt.forward(&frame(0)).unwrap();
        for t in 1..=10 {
            let c = frame(t);
            let r_err = reference.error_norms(&c).unwrap().unwrap()[0];
            let s_err = stgt.error_norms(&c).unwrap().unwrap()[0];
            assert!((r_err - t as f64 * delta).abs() < 1e-12, "t={t} r_err={r_err}");
            assert!((s_err - delta).abs() < 1e-12, "t={t} s_err={s_err}");
            assert_eq!(reference.forward(&c).unwrap().0.as_slice(), &[1]);
            assert_eq!(stgt.forward(&c).unwrap().0.as_slice(), &[1]);
        }
    }

    proptest! {
        #[test]
        fn top_r_matches_sort_oracle(norms in proptest::collection::vec(0.0f64..4.0, 0..40), r in 0usize..50) {
            // coarse values to force ties
            let norms: Vec<f64> = norms.iter().map(|v| (v * 2.0).round() / 2.0).collect();
            let got = policy_top_r(&norms, r);
            prop_assert_eq!(got.len(), r.min(norms.len()));
            let want = sorted_oracle(&norms, r);
            prop_assert_eq!(got.as_slice(), want.as_slice());
        }

        #[test]
        fn gate_reference_consistency(
            frames in proptest::collection::vec(proptest::collection::vec(-2.0f64..2.0, 12), 2..6),
            r in 0usize..7,
        ) {
            let mut g = Gate::new(top_r(r));
            for f in &frames {
                let c = Matrix::from_vec(6, 2, f.clone()).unwrap();
                let before = g.reference().cloned();
                let (idx, picked) = g.forward(&c).unwrap();
                let u = g.reference().unwrap();
                prop_assert_eq!(&picked, &c.gather_rows(&idx).unwrap());
                for i in 0..6 {
                    if idx.contains(i) {
                        prop_assert_eq!(u.row(i), c.row(i));
                    } else {
                        prop_assert_eq!(u.row(i), before.as_ref().unwrap().row(i));
                    }
                }
                if before.is_some() {
                    prop_assert_eq!(idx.len(), r.min(6));
                }
            }
        }
    }
}

use crate::error::{Error, Result};

/// Strictly increasing list of token positions, validated against a token count.
///
/// This is the gather/scatter currency of the crate: gates produce one, buffers
/// and the sparse attention kernels consume it. A binary mask and an index list
/// are interchangeable views; [`IndexSet::from_mask`] and [`IndexSet::to_mask`]
/// convert between them.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Default)]
pub struct IndexSet {
    indices: Vec<usize>,
}

impl IndexSet {
    pub fn new(indices: Vec<usize>, len: usize) -> Result<Self> {
        for w in indices.windows(2) {
            if w[0] >= w[1] {
                return Err(Error::UnsortedIndices {
                    prev: w[0],
                    next: w[1],
                });
            }
        }
        if let Some(&last) = indices.last() {
            if last >= len {
                return Err(Error::IndexOutOfRange { index: last, len });
            }
        }
        Ok(Self { indices })
    }

    /// Sorts and deduplicates before validating.
    pub fn from_unsorted(mut indices: Vec<usize>, len: usize) -> Result<Self> {
        indices.sort_unstable();
        indices.dedup();
        Self::new(indices, len)
    }

    pub fn all(len: usize) -> Self {
        Self {
            indices: (0..len).collect(),
        }
    }

    pub fn empty() -> Self {
        Self::default()
    }

    pub fn from_mask(mask: &[bool]) -> Self {
        Self {
            indices: mask
                .iter()
                .enumerate()
                .filter_map(|(i, &m)| m.then_some(i))
                .collect(),
        }
    }

    pub fn to_mask(&self, len: usize) -> Vec<bool> {
        let mut mask = vec![false; len];
        for &i in &self.indices {
            mask[i] = true;
        }
        mask
    }

    /// Positions in `[0, len)` not in this set.
    pub fn complement(&self, len: usize) -> Self {
        let mut out = Vec::with_capacity(len.saturating_sub(self.indices.len()));
        let mut it = self.indices.iter().peekable();
        for i in 0..len {
            if it.peek() == Some(&&i) {
                it.next();
            } else {
                out.push(i);
            }
        }
        Self { indices: out }
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    pub fn is_full(&self, len: usize) -> bool {
        self.indices.len() == len
    }

    pub fn contains(&self, index: usize) -> bool {
        self.indices.binary_search(&index).is_ok()
    }

    pub fn as_slice(&self) -> &[usize] {
        &self.indices
    }

    pub fn iter(&self) -> impl Iterator<Item = usize> + '_ {
        self.indices.iter().copied()
    }

    /// Checks that every index is below `len`.
    pub fn check_bounds(&self, len: usize) -> Result<()> {
        match self.indices.last() {
            Some(&last) if last >= len => Err(Error::IndexOutOfRange { index: last, len }),
            _ => Ok(()),
        }
    }
}

impl<'a> IntoIterator for &'a IndexSet {
    type Item = &'a usize;
    type IntoIter = std::slice::Iter<'a, usize>;

    fn into_iter(self) -> Self::IntoIter {
        self.indices.iter()
    }
}

use std::fmt;

/// A set of leaf indices over a fixed universe `0..m`, stored as a bitset.
#[derive(Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct LeafSet {
    m: usize,
    words: Vec<u64>,
}

impl LeafSet {
    pub fn empty(m: usize) -> Self {
        LeafSet {
            m,
            words: vec![0; m.div_ceil(64)],
        }
    }

    pub fn full(m: usize) -> Self {
        let mut s = Self::empty(m);
        for i in 0..m {
            s.insert(i);
        }
        s
    }

    pub fn from_indices<I: IntoIterator<Item = usize>>(m: usize, indices: I) -> Self {
        let mut s = Self::empty(m);
        for i in indices {
            s.insert(i);
        }
        s
    }

    /// Size of the universe the set lives in.
    pub fn universe(&self) -> usize {
        self.m
    }

    pub fn insert(&mut self, i: usize) {
        assert!(i < self.m, "leaf index {i} outside universe of size {}", self.m);
        self.words[i / 64] |= 1 << (i % 64);
    }

    pub fn contains(&self, i: usize) -> bool {
        i < self.m && self.words[i / 64] & (1 << (i % 64)) != 0
    }

    pub fn len(&self) -> usize {
        self.words.iter().map(|w| w.count_ones() as usize).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.words.iter().all(|&w| w == 0)
    }

    pub fn iter(&self) -> impl Iterator<Item = usize> + '_ {
        (0..self.m).filter(move |&i| self.contains(i))
    }

    pub fn to_vec(&self) -> Vec<usize> {
        self.iter().collect()
    }

    pub fn complement(&self) -> Self {
        let mut out = self.clone();
        for w in out.words.iter_mut() {
            *w = !*w;
        }
        out.trim();
        out
    }

    pub fn union(&self, other: &Self) -> Self {
        debug_assert_eq!(self.m, other.m);
        let mut out = self.clone();
        for (a, b) in out.words.iter_mut().zip(&other.words) {
            *a |= *b;
        }
        out
    }

    pub fn union_with(&mut self, other: &Self) {
        debug_assert_eq!(self.m, other.m);
        for (a, b) in self.words.iter_mut().zip(&other.words) {
            *a |= *b;
        }
    }

    pub fn is_disjoint(&self, other: &Self) -> bool {
        self.words.iter().zip(&other.words).all(|(a, b)| a & b == 0)
    }

    pub fn is_subset(&self, other: &Self) -> bool {
        self.words.iter().zip(&other.words).all(|(a, b)| a & !b == 0)
    }

    fn trim(&mut self) {
        let rem = self.m % 64;
        if rem != 0 {
            if let Some(last) = self.words.last_mut() {
                *last &= (1u64 << rem) - 1;
            }
        }
    }
}

impl fmt::Debug for LeafSet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_set().entries(self.iter()).finish()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn complement_respects_universe() {
        let s = LeafSet::from_indices(70, [0, 65, 69]);
        let c = s.complement();
        assert_eq!(c.len(), 67);
        assert!(!c.contains(65));
        assert!(c.contains(68));
        assert_eq!(c.complement(), s);
        assert!(s.is_disjoint(&c));
        assert_eq!(s.union(&c), LeafSet::full(70));
    }
}

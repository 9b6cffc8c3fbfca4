use crate::error::{Error, Result};

/// Boolean attention mask, `true` = the query may attend to the key.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AttentionMask {
    queries: usize,
    keys: usize,
    allowed: Vec<bool>,
}

impl AttentionMask {
    pub fn new(queries: usize, keys: usize, allowed: Vec<bool>) -> Result<Self> {
        if allowed.len() != queries * keys {
            return Err(Error::Shape(format!(
                "mask {}x{} needs {} entries, got {}",
                queries,
                keys,
                queries * keys,
                allowed.len()
            )));
        }
        Ok(Self {
            queries,
            keys,
            allowed,
        })
    }

    pub fn all(queries: usize, keys: usize) -> Self {
        Self {
            queries,
            keys,
            allowed: vec![true; queries * keys],
        }
    }

    pub fn from_fn(queries: usize, keys: usize, f: impl Fn(usize, usize) -> bool) -> Self {
        let mut allowed = Vec::with_capacity(queries * keys);
        for q in 0..queries {
            for k in 0..keys {
                allowed.push(f(q, k));
            }
        }
        Self {
            queries,
            keys,
            allowed,
        }
    }

    /// Lower-triangular mask for autoregressive self-attention.
    pub fn causal(n: usize) -> Self {
        Self::from_fn(n, n, |q, k| k <= q)
    }

    pub fn queries(&self) -> usize {
        self.queries
    }

    pub fn keys(&self) -> usize {
        self.keys
    }

    #[inline]
    pub fn allows(&self, q: usize, k: usize) -> bool {
        self.allowed[q * self.keys + k]
    }

    pub fn row(&self, q: usize) -> &[bool] {
        &self.allowed[q * self.keys..(q + 1) * self.keys]
    }

    pub fn allowed_in_row(&self, q: usize) -> usize {
        self.row(q).iter().filter(|&&a| a).count()
    }

    pub fn is_all_allowed(&self) -> bool {
        self.allowed.iter().all(|&a| a)
    }

    /// Fails on the first query row with no allowed key.
    pub fn check_rows(&self) -> Result<()> {
        match (0..self.queries).find(|&q| self.allowed_in_row(q) == 0) {
            Some(row) => Err(Error::FullyMaskedRow { row }),
            None => Ok(()),
        }
    }

    /// Reorder key columns: column `j` of the result is column `perm[j]` of `self`.
    pub fn permute_keys(&self, perm: &[usize]) -> Self {
        Self::from_fn(self.queries, self.keys, |q, k| self.allows(q, perm[k]))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn causal_rows() {
        let m = AttentionMask::causal(3);
        assert_eq!(m.allowed_in_row(0), 1);
        assert_eq!(m.allowed_in_row(2), 3);
        assert!(m.check_rows().is_ok());
    }

    #[test]
    fn fully_masked_row_is_named() {
        let m = AttentionMask::new(2, 2, vec![true, false, false, false]).unwrap();
        match m.check_rows() {
            Err(Error::FullyMaskedRow { row }) => assert_eq!(row, 1),
            other => panic!("unexpected {other:?}"),
        }
    }
}

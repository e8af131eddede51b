use std::fmt;

use crate::error::{Error, Result};

/// Dense 0/1 matrix used as an attention mask (1 = may attend).
#[derive(Clone, PartialEq, Eq, Hash)]
pub struct BinaryMask {
    rows: usize,
    cols: usize,
    bits: Vec<bool>,
}

impl BinaryMask {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        BinaryMask {
            rows,
            cols,
            bits: vec![false; rows * cols],
        }
    }

    pub fn ones(rows: usize, cols: usize) -> Self {
        BinaryMask {
            rows,
            cols,
            bits: vec![true; rows * cols],
        }
    }

    pub fn from_fn(rows: usize, cols: usize, f: impl Fn(usize, usize) -> bool) -> Self {
        let mut m = Self::zeros(rows, cols);
        for r in 0..rows {
            for c in 0..cols {
                m.bits[r * cols + c] = f(r, c);
            }
        }
        m
    }

    pub fn from_rows(rows: &[Vec<u8>]) -> Self {
        let cols = rows.first().map_or(0, |r| r.len());
        assert!(rows.iter().all(|r| r.len() == cols), "ragged mask");
        BinaryMask {
            rows: rows.len(),
            cols,
            bits: rows.iter().flatten().map(|&b| b != 0).collect(),
        }
    }

    /// Causal mask (lower-triangular, diagonal included).
    pub fn causal(n: usize) -> Self {
        Self::from_fn(n, n, |r, c| c <= r)
    }

    /// Every query row may attend the first `valid` of `cols` keys.
    pub fn key_padding(rows: usize, cols: usize, valid: &[bool]) -> Self {
        assert_eq!(valid.len(), cols);
        Self::from_fn(rows, cols, |_, c| valid[c])
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> bool {
        self.bits[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: bool) {
        self.bits[r * self.cols + c] = v;
    }

    pub fn row(&self, r: usize) -> &[bool] {
        &self.bits[r * self.cols..(r + 1) * self.cols]
    }

    pub fn allowed(&self, r: usize) -> impl Iterator<Item = usize> + '_ {
        self.row(r)
            .iter()
            .enumerate()
            .filter_map(|(c, &b)| b.then_some(c))
    }

    /// Fails on the first row without any allowed entry.
    pub fn check_rows(&self) -> Result<()> {
        match (0..self.rows).find(|&r| !self.row(r).iter().any(|&b| b)) {
            Some(row) => Err(Error::InvalidMask { row }),
            None => Ok(()),
        }
    }
}

impl fmt::Debug for BinaryMask {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "BinaryMask {}x{}", self.rows, self.cols)?;
        for r in 0..self.rows {
            let line: String = self.row(r).iter().map(|&b| if b { '1' } else { '0' }).collect();
            writeln!(f, "  {line}")?;
        }
        Ok(())
    }
}

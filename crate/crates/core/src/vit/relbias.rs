//! Relative position bias indexing.
//!
//! Each attention layer owns a table of `(2g−1)² + 3` rows by `heads`
//! columns. Patch pairs index it by their grid offset; three extra rows cover
//! pairs involving the class token. The `[P, P]` index map expands the table
//! into the full token-pair bias, and [`RelBiasIndex::gather`] selects the
//! `k × k` sub-matrix for each image's kept tokens.

use std::rc::Rc;

use crate::scalar::Scalar;

#[derive(Clone, Debug)]
pub struct RelBiasIndex {
    grid: usize,
    tokens: usize,
    index_map: Vec<u32>,
}

impl RelBiasIndex {
    pub fn new(grid: usize) -> Self {
        let tokens = grid * grid + 1;
        let span = 2 * grid - 1;
        let base = (span * span) as u32;
        let mut index_map = vec![0u32; tokens * tokens];
        for i in 0..tokens {
            for j in 0..tokens {
                index_map[i * tokens + j] = match (i, j) {
                    (0, 0) => base,
                    (0, _) => base + 1,
                    (_, 0) => base + 2,
                    _ => {
                        let (ri, ci) = ((i - 1) / grid, (i - 1) % grid);
                        let (rj, cj) = ((j - 1) / grid, (j - 1) % grid);
                        let dr = ri + grid - 1 - rj;
                        let dc = ci + grid - 1 - cj;
                        (dr * span + dc) as u32
                    }
                };
            }
        }
        RelBiasIndex {
            grid,
            tokens,
            index_map,
        }
    }

    /// Rows of the learnable bias table.
    pub fn table_rows(&self) -> usize {
        let span = 2 * self.grid - 1;
        span * span + 3
    }

    pub fn num_tokens(&self) -> usize {
        self.tokens
    }

    /// Table row for the token pair `(i, j)` in original numbering.
    pub fn row(&self, i: usize, j: usize) -> u32 {
        self.index_map[i * self.tokens + j]
    }

    pub fn index_map(&self) -> &[u32] {
        &self.index_map
    }

    /// Table rows for every kept pair of every image, `B·k·k` entries.
    pub fn gather(&self, kept: &[Vec<usize>]) -> Rc<Vec<u32>> {
        let k = kept.first().map_or(0, Vec::len);
        let mut rows = Vec::with_capacity(kept.len() * k * k);
        for idx in kept {
            for &i in idx {
                let map_row = &self.index_map[i * self.tokens..(i + 1) * self.tokens];
                rows.extend(idx.iter().map(|&j| map_row[j]));
            }
        }
        Rc::new(rows)
    }

    /// Expands one head of a `[rows, heads]` table to the full `P×P` bias.
    pub fn materialize<T: Scalar>(&self, table: &[T], heads: usize, head: usize) -> Vec<T> {
        self.index_map
            .iter()
            .map(|&r| table[r as usize * heads + head])
            .collect()
    }
}

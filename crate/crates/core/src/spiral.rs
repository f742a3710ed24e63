//! Center-outward clockwise spiral ordering of an `n × n` token grid.
//!
//! The walk starts at `(n/2, n/2)` and follows arms of length 1, 1, 2, 2,
//! 3, 3, ... in the direction cycle right, down, left, up. The walk runs on
//! the unbounded plane; cells that fall outside the grid are stepped over
//! without being emitted, so for even `n` the final arms are clipped.

use crate::error::{invalid, Result};

/// Grid coordinate as `(row, col)`.
pub type Cell = (usize, usize);

/// Row-major `n × n` grid of token ids.
pub type Grid = Vec<Vec<u32>>;

const DIRECTIONS: [(isize, isize); 4] = [(0, 1), (1, 0), (0, -1), (-1, 0)];

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SpiralMap {
    n: usize,
    order: Vec<Cell>,
    inverse: Vec<usize>,
    // ranks k whose predecessor walk segment stepped over out-of-grid cells
    breaks: Vec<usize>,
}

impl SpiralMap {
    pub fn new(n: usize) -> Result<Self> {
        if n == 0 {
            return invalid("spiral grid side must be at least 1");
        }
        let total = n * n;
        let center = (n / 2) as isize;
        let (mut row, mut col) = (center, center);
        let mut order = Vec::with_capacity(total);
        let mut breaks = Vec::new();
        order.push((row as usize, col as usize));

        let mut skipped = false;
        let mut arm = 0usize;
        while order.len() < total {
            let len = arm / 2 + 1;
            let (dr, dc) = DIRECTIONS[arm % 4];
            for _ in 0..len {
                row += dr;
                col += dc;
                let inside = row >= 0 && col >= 0 && (row as usize) < n && (col as usize) < n;
                if !inside {
                    skipped = true;
                    continue;
                }
                if skipped {
                    breaks.push(order.len());
                    skipped = false;
                }
                order.push((row as usize, col as usize));
                if order.len() == total {
                    break;
                }
            }
            arm += 1;
        }

        let mut inverse = vec![0; total];
        for (rank, &(r, c)) in order.iter().enumerate() {
            inverse[r * n + c] = rank;
        }
        Ok(Self {
            n,
            order,
            inverse,
            breaks,
        })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn len(&self) -> usize {
        self.order.len()
    }

    pub fn is_empty(&self) -> bool {
        self.order.is_empty()
    }

    /// Spiral rank → `(row, col)`.
    pub fn order(&self) -> &[Cell] {
        &self.order
    }

    pub fn cell(&self, rank: usize) -> Cell {
        self.order[rank]
    }

    pub fn rank(&self, row: usize, col: usize) -> usize {
        self.inverse[row * self.n + col]
    }

    /// Ranks `k` where the walk crossed out-of-grid cells between rank
    /// `k - 1` and rank `k`. These are the only places consecutive ranks
    /// may fail to be 4-neighbors.
    pub fn adjacency_breaks(&self) -> &[usize] {
        &self.breaks
    }

    /// Reads `grid` in spiral order.
    pub fn flatten(&self, grid: &[Vec<u32>]) -> Result<Vec<u32>> {
        if grid.len() != self.n || grid.iter().any(|row| row.len() != self.n) {
            return invalid(format!("grid is not {0}x{0}", self.n));
        }
        Ok(self.order.iter().map(|&(r, c)| grid[r][c]).collect())
    }

    /// Writes a spiral-ordered sequence back onto the grid.
    pub fn unflatten(&self, seq: &[u32]) -> Result<Grid> {
        if seq.len() != self.len() {
            return invalid(format!(
                "sequence length {} does not match {} grid cells",
                seq.len(),
                self.len()
            ));
        }
        let mut grid = vec![vec![0; self.n]; self.n];
        for (&(r, c), &tok) in self.order.iter().zip(seq) {
            grid[r][c] = tok;
        }
        Ok(grid)
    }

    /// Spiral ranks covered by the centered `m × m` block.
    pub fn center_block(&self, m: usize) -> Result<CenterBlock> {
        let n = self.n;
        if m == 0 || m > n {
            return invalid(format!("block side {m} must be in 1..={n}"));
        }
        let mut ranks: Vec<usize> = if m == n {
            (0..n * n).collect()
        } else {
            let c = n / 2;
            let lo = (c + 1).checked_sub(m.div_ceil(2));
            let hi = c + m / 2;
            let Some(lo) = lo.filter(|_| hi < n) else {
                return invalid(format!("centered {m}x{m} block exceeds the {n}x{n} grid"));
            };
            let mut ranks = Vec::with_capacity(m * m);
            for r in lo..=hi {
                for c in lo..=hi {
                    ranks.push(self.rank(r, c));
                }
            }
            ranks
        };
        ranks.sort_unstable();
        let is_prefix = ranks.iter().enumerate().all(|(i, &r)| i == r);
        Ok(CenterBlock { ranks, is_prefix })
    }
}

/// Sorted spiral ranks of a centered block.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CenterBlock {
    pub ranks: Vec<usize>,
    /// True when `ranks == 0..m²`.
    pub is_prefix: bool,
}

pub fn build_spiral_map(n: usize) -> Result<SpiralMap> {
    SpiralMap::new(n)
}

pub fn spiral_flatten(grid: &[Vec<u32>], map: &SpiralMap) -> Result<Vec<u32>> {
    map.flatten(grid)
}

pub fn spiral_unflatten(seq: &[u32], map: &SpiralMap) -> Result<Grid> {
    map.unflatten(seq)
}

pub fn center_block_ranks(n: usize, m: usize) -> Result<CenterBlock> {
    SpiralMap::new(n)?.center_block(m)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn small_orders() {
        assert_eq!(SpiralMap::new(1).unwrap().order(), &[(0, 0)]);
        assert_eq!(
            SpiralMap::new(2).unwrap().order(),
            &[(1, 1), (1, 0), (0, 0), (0, 1)]
        );
        assert_eq!(
            SpiralMap::new(3).unwrap().order(),
            &[
                (1, 1),
                (1, 2),
                (2, 2),
                (2, 1),
                (2, 0),
                (1, 0),
                (0, 0),
                (0, 1),
                (0, 2)
            ]
        );
    }

    #[test]
    fn zero_side_rejected() {
        assert!(SpiralMap::new(0).is_err());
    }

    #[test]
    fn flatten_examples() {
        let m1 = SpiralMap::new(1).unwrap();
        assert_eq!(m1.flatten(&[vec![7]]).unwrap(), vec![7]);
        assert_eq!(m1.unflatten(&[7]).unwrap(), vec![vec![7]]);

        let m2 = SpiralMap::new(2).unwrap();
        let (a, b, c, d) = (10, 11, 12, 13);
        assert_eq!(
            m2.flatten(&[vec![a, b], vec![c, d]]).unwrap(),
            vec![d, c, a, b]
        );
        assert_eq!(
            m2.unflatten(&[d, c, a, b]).unwrap(),
            vec![vec![a, b], vec![c, d]]
        );
    }

    #[test]
    fn dimension_mismatch() {
        let map = SpiralMap::new(3).unwrap();
        assert!(map.flatten(&[vec![1, 2], vec![3, 4]]).is_err());
        assert!(map
            .flatten(&[vec![1, 2, 3], vec![3, 4], vec![1, 2, 3]])
            .is_err());
        assert!(map.unflatten(&[1, 2, 3]).is_err());
    }

    #[test]
    fn center_blocks() {
        let b = center_block_ranks(3, 3).unwrap();
        assert_eq!(b.ranks, (0..9).collect::<Vec<_>>());
        for m in [2, 4, 6, 8, 10, 12, 14] {
            let b = center_block_ranks(16, m).unwrap();
            assert!(b.is_prefix, "m={m}");
            assert_eq!(b.ranks.len(), m * m);
        }
        assert!(center_block_ranks(16, 16).unwrap().is_prefix);
        assert!(center_block_ranks(4, 5).is_err());
        assert!(center_block_ranks(4, 0).is_err());
    }

    #[test]
    fn odd_grid_has_no_breaks() {
        for n in (1..=31).step_by(2) {
            assert!(SpiralMap::new(n).unwrap().adjacency_breaks().is_empty());
        }
        assert!(!SpiralMap::new(4).unwrap().adjacency_breaks().is_empty());
    }

    proptest! {
        #[test]
        fn round_trip(n in 1usize..=32, seed in any::<u64>()) {
            let map = SpiralMap::new(n).unwrap();
            let grid: Grid = (0..n)
                .map(|r| (0..n).map(|c| ((seed >> ((r * n + c) % 48)) as u32) ^ (r * n + c) as u32).collect())
                .collect();
            let seq = map.flatten(&grid).unwrap();
            prop_assert_eq!(map.unflatten(&seq).unwrap(), grid);
        }
    }
}

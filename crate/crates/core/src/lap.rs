//! Rectangular linear assignment with forbidden cells.
//!
//! Shortest augmenting path solver in the Jonker-Volgenant family, working
//! directly on rectangular matrices (the smaller side is always fully
//! augmented). Forbidden cells are priced at a finite penalty larger than any
//! feasible matching, so the optimum first maximizes the number of feasible
//! pairs and then minimizes their cost. Pairs landing on a forbidden cell are
//! dropped from the result.

use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum LapError {
    #[error("cost buffer has {got} values, expected {rows}x{cols}")]
    Shape { rows: usize, cols: usize, got: usize },
    #[error("feasible cost at ({row}, {col}) must be finite and non-negative, got {value}")]
    BadCost { row: usize, col: usize, value: f64 },
}

/// Row-major cost matrix plus a feasibility mask of the same shape.
#[derive(Debug, Clone, PartialEq)]
pub struct CostMatrix {
    rows: usize,
    cols: usize,
    cost: Vec<f64>,
    feasible: Vec<bool>,
}

impl CostMatrix {
    /// All cells feasible.
    pub fn new(rows: usize, cols: usize, cost: Vec<f64>) -> Result<Self, LapError> {
        let feasible = vec![true; cost.len()];
        Self::with_mask(rows, cols, cost, feasible)
    }

    pub fn with_mask(rows: usize, cols: usize, cost: Vec<f64>, feasible: Vec<bool>) -> Result<Self, LapError> {
        if cost.len() != rows * cols || feasible.len() != rows * cols {
            return Err(LapError::Shape {
                rows,
                cols,
                got: cost.len().min(feasible.len()),
            });
        }
        for (k, (&c, &ok)) in cost.iter().zip(&feasible).enumerate() {
            if ok && !(c.is_finite() && c >= 0.0) {
                return Err(LapError::BadCost {
                    row: k / cols.max(1),
                    col: k % cols.max(1),
                    value: c,
                });
            }
        }
        Ok(Self {
            rows,
            cols,
            cost,
            feasible,
        })
    }

    /// Builds a matrix cell by cell; `None` marks a forbidden cell.
    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> Option<f64>) -> Result<Self, LapError> {
        let mut cost = Vec::with_capacity(rows * cols);
        let mut feasible = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                match f(r, c) {
                    Some(v) => {
                        cost.push(v);
                        feasible.push(true);
                    }
                    None => {
                        cost.push(0.0);
                        feasible.push(false);
                    }
                }
            }
        }
        Self::with_mask(rows, cols, cost, feasible)
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self, LapError> {
        let r = rows.len();
        let c = rows.first().map_or(0, Vec::len);
        let cost: Vec<f64> = rows.iter().flatten().copied().collect();
        Self::new(r, c, cost)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn cost(&self, r: usize, c: usize) -> f64 {
        self.cost[r * self.cols + c]
    }

    pub fn is_feasible(&self, r: usize, c: usize) -> bool {
        self.feasible[r * self.cols + c]
    }
}

/// Matched `(row, col)` pairs sorted by row, and their summed cost.
#[derive(Debug, Clone, PartialEq)]
pub struct Assignment {
    pub pairs: Vec<(usize, usize)>,
    pub total_cost: f64,
}

impl Assignment {
    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    /// `result[row] = Some(col)` for matched rows.
    pub fn row_to_col(&self, rows: usize) -> Vec<Option<usize>> {
        let mut out = vec![None; rows];
        for &(r, c) in &self.pairs {
            out[r] = Some(c);
        }
        out
    }
}

/// Maximum-cardinality, minimum-cost feasible matching.
pub fn solve(m: &CostMatrix) -> Assignment {
    if m.rows == 0 || m.cols == 0 || !m.feasible.iter().any(|&f| f) {
        return Assignment {
            pairs: Vec::new(),
            total_cost: 0.0,
        };
    }
    let max_feasible = m
        .cost
        .iter()
        .zip(&m.feasible)
        .filter(|(_, &ok)| ok)
        .fold(0.0f64, |acc, (&c, _)| acc.max(c));
    let penalty = max_feasible * m.rows.min(m.cols) as f64 + 1.0;

    let transpose = m.rows > m.cols;
    let (nr, nc) = if transpose { (m.cols, m.rows) } else { (m.rows, m.cols) };
    let mut cost = vec![0.0; nr * nc];
    for r in 0..m.rows {
        for c in 0..m.cols {
            let k = r * m.cols + c;
            let v = if m.feasible[k] { m.cost[k] } else { penalty };
            if transpose {
                cost[c * nc + r] = v;
            } else {
                cost[r * nc + c] = v;
            }
        }
    }

    let col4row = shortest_augmenting_path(nr, nc, &cost);

    let mut pairs: Vec<(usize, usize)> = col4row
        .iter()
        .enumerate()
        .map(|(i, &j)| if transpose { (j, i) } else { (i, j) })
        .filter(|&(r, c)| m.is_feasible(r, c))
        .collect();
    pairs.sort_unstable();
    let total_cost = pairs.iter().map(|&(r, c)| m.cost(r, c)).sum();
    Assignment { pairs, total_cost }
}

/// Dense solver for `nr <= nc`; returns the column of every row.
fn shortest_augmenting_path(nr: usize, nc: usize, cost: &[f64]) -> Vec<usize> {
    const NONE: usize = usize::MAX;
    let mut u = vec![0.0f64; nr];
    let mut v = vec![0.0f64; nc];
    let mut shortest = vec![f64::INFINITY; nc];
    let mut path = vec![NONE; nc];
    let mut col4row = vec![NONE; nr];
    let mut row4col = vec![NONE; nc];
    let mut visited_rows = vec![false; nr];
    let mut visited_cols = vec![false; nc];
    let mut remaining: Vec<usize> = Vec::with_capacity(nc);

    for cur_row in 0..nr {
        remaining.clear();
        remaining.extend(0..nc);
        visited_rows.fill(false);
        visited_cols.fill(false);
        shortest.fill(f64::INFINITY);

        let mut min_val = 0.0f64;
        let mut i = cur_row;
        let sink = loop {
            visited_rows[i] = true;
            let mut best_pos = NONE;
            let mut lowest = f64::INFINITY;
            for (pos, &j) in remaining.iter().enumerate() {
                let reduced = min_val + cost[i * nc + j] - u[i] - v[j];
                if reduced < shortest[j] {
                    path[j] = i;
                    shortest[j] = reduced;
                }
                let better = if best_pos == NONE {
                    true
                } else {
                    let bj = remaining[best_pos];
                    shortest[j] < lowest
                        || (shortest[j] == lowest
                            && ((row4col[j] == NONE && row4col[bj] != NONE)
                                || ((row4col[j] == NONE) == (row4col[bj] == NONE) && j < bj)))
                };
                if better {
                    lowest = shortest[j];
                    best_pos = pos;
                }
            }
            min_val = lowest;
            let j = remaining.swap_remove(best_pos);
            visited_cols[j] = true;
            if row4col[j] == NONE {
                break j;
            }
            i = row4col[j];
        };

        u[cur_row] += min_val;
        for r in 0..nr {
            if visited_rows[r] && r != cur_row {
                u[r] += min_val - shortest[col4row[r]];
            }
        }
        for c in 0..nc {
            if visited_cols[c] {
                v[c] -= min_val - shortest[c];
            }
        }

        let mut j = sink;
        loop {
            let r = path[j];
            row4col[j] = r;
            std::mem::swap(&mut col4row[r], &mut j);
            if r == cur_row {
                break;
            }
        }
    }
    col4row
}


#[cfg(test)]
mod tests {
    use super::oracle::brute_force;
    use super::*;
    use proptest::prelude::*;

    fn check_valid(m: &CostMatrix, a: &Assignment) {
        let mut rows = std::collections::HashSet::new();
        let mut cols = std::collections::HashSet::new();
        for &(r, c) in &a.pairs {
            assert!(rows.insert(r) && cols.insert(c));
            assert!(m.is_feasible(r, c));
        }
    }

    #[test]
    fn identity_zero_diagonal() {
        let m = CostMatrix::from_rows(&[vec![0.0, 1.0], vec![1.0, 0.0]]).unwrap();
        let a = solve(&m);
        assert_eq!(a.pairs, vec![(0, 0), (1, 1)]);
        assert_eq!(a.total_cost, 0.0);
    }

    #[test]
    fn two_by_two_matches_brute_force() {
        let m = CostMatrix::from_rows(&[vec![1.0, 2.0], vec![3.0, 1.0]]).unwrap();
        // 1 + 1 = 2 beats 2 + 3 = 5
        assert_eq!(brute_force(&m), (2, 2.0));
        let a = solve(&m);
        assert_eq!(a.pairs, vec![(0, 0), (1, 1)]);
        assert_eq!(a.total_cost, 2.0);
    }

    #[test]
    fn single_row_picks_minimum() {
        let m = CostMatrix::from_rows(&[vec![5.0, 3.0]]).unwrap();
        let a = solve(&m);
        assert_eq!(a.pairs, vec![(0, 1)]);
        assert_eq!(a.total_cost, 3.0);
    }

    #[test]
    fn tall_matrix_is_transposed() {
        let m = CostMatrix::from_rows(&[vec![4.0], vec![1.0], vec![3.0]]).unwrap();
        let a = solve(&m);
        assert_eq!(a.pairs, vec![(1, 0)]);
        assert_eq!(a.total_cost, 1.0);
    }

    #[test]
    fn empty_and_all_forbidden() {
        let m = CostMatrix::new(0, 3, vec![]).unwrap();
        assert!(solve(&m).is_empty());
        let m = CostMatrix::from_fn(2, 2, |_, _| None).unwrap();
        assert!(solve(&m).is_empty());
    }

    #[test]
    fn cardinality_before_cost() {
        // Cheap (0,0) would block row 1, whose only feasible cell is column 0.
        let m = CostMatrix::from_fn(2, 2, |r, c| match (r, c) {
            (0, 0) => Some(0.0),
            (0, 1) => Some(100.0),
            (1, 0) => Some(50.0),
            _ => None,
        })
        .unwrap();
        let a = solve(&m);
        assert_eq!(a.pairs, vec![(0, 1), (1, 0)]);
        assert_eq!(a.total_cost, 150.0);
    }

    #[test]
    fn rejects_bad_input() {
        assert!(matches!(
            CostMatrix::new(2, 2, vec![0.0; 3]),
            Err(LapError::Shape { .. })
        ));
        assert!(matches!(
            CostMatrix::new(1, 1, vec![-1.0]),
            Err(LapError::BadCost { .. })
        ));
        assert!(matches!(
            CostMatrix::new(1, 1, vec![f64::NAN]),
            Err(LapError::BadCost { .. })
        ));
        // forbidden cells may hold anything
        assert!(CostMatrix::with_mask(1, 1, vec![f64::INFINITY], vec![false]).is_ok());
    }

    fn matrix_strategy() -> impl Strategy<Value = CostMatrix> {
        (0usize..=7, 0usize..=7).prop_flat_map(|(r, c)| {
            (
                prop::collection::vec(0.0f64..10.0, r * c),
                prop::collection::vec(prop::bool::weighted(0.7), r * c),
            )
                .prop_map(move |(cost, mask)| CostMatrix::with_mask(r, c, cost, mask).unwrap())
        })
    }

    proptest! {
        #[test]
        fn matches_exhaustive_search(m in matrix_strategy()) {
            let a = solve(&m);
            check_valid(&m, &a);
            let (card, cost) = brute_force(&m);
            prop_assert_eq!(a.len(), card);
            prop_assert!((a.total_cost - cost).abs() <= 1e-9 * (1.0 + cost));
        }

        #[test]
        fn row_permutation_preserves_cost(m in matrix_strategy(), seed in any::<u64>()) {
            use rand::seq::SliceRandom;
            use rand::SeedableRng;
            let mut perm: Vec<usize> = (0..m.rows()).collect();
            perm.shuffle(&mut rand_chacha::ChaCha8Rng::seed_from_u64(seed));
            let p = CostMatrix::from_fn(m.rows(), m.cols(), |r, c| {
                m.is_feasible(perm[r], c).then(|| m.cost(perm[r], c))
            }).unwrap();
            let a = solve(&m);
            let b = solve(&p);
            prop_assert_eq!(a.len(), b.len());
            prop_assert!((a.total_cost - b.total_cost).abs() <= 1e-9 * (1.0 + a.total_cost));
        }

        #[test]
        fn scaling_keeps_pairs(m in matrix_strategy(), scale in 0.1f64..50.0) {
            let s = CostMatrix::from_fn(m.rows(), m.cols(), |r, c| {
                m.is_feasible(r, c).then(|| m.cost(r, c) * scale)
            }).unwrap();
            let a = solve(&m);
            let b = solve(&s);
            prop_assert_eq!(&a.pairs, &b.pairs);
            prop_assert!((b.total_cost - scale * a.total_cost).abs() <= 1e-9 * (1.0 + b.total_cost));
        }
    }
}

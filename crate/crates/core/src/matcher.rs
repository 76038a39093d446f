//! Pairwise image matching on patch descriptors: distance matrix,
//! reciprocal-weight reweighting, mutual nearest neighbours and the spatial
//! consistency score used to rerank candidates.

use crate::error::{Error, Result};
use crate::patch::PatchGrid;
use crate::vlad::{cos_dist, PatchDescriptor};

/// Dense `rows × cols` matrix of nonnegative distances, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct DistanceMatrix {
    rows: usize,
    cols: usize,
    values: Vec<f64>,
}

impl DistanceMatrix {
    pub fn new(rows: usize, cols: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != rows * cols {
            return Err(Error::Dimension(format!(
                "{} values for a {rows}x{cols} matrix",
                values.len()
            )));
        }
        if values.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
            return Err(Error::Invariant("distances must be finite and nonnegative".into()));
        }
        Ok(Self { rows, cols, values })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values[i * self.cols + j]
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.values[i * self.cols..(i + 1) * self.cols]
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PatchMatch {
    pub query: usize,
    pub reference: usize,
    /// Matrix entry at `(query, reference)`.
    pub value: f64,
}

/// A one-to-one partial matching between query and reference patches.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct MatchSet {
    pub pairs: Vec<PatchMatch>,
}

impl MatchSet {
    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn mean_value(&self) -> f64 {
        if self.pairs.is_empty() {
            f64::INFINITY
        } else {
            self.pairs.iter().map(|p| p.value).sum::<f64>() / self.pairs.len() as f64
        }
    }
}

/// Cosine distances between every query and reference descriptor. Tiny
/// negative values from rounding are clamped to zero.
pub fn distance_matrix(query: &[PatchDescriptor], reference: &[PatchDescriptor]) -> Result<DistanceMatrix> {
    if query.is_empty() || reference.is_empty() {
        return Err(Error::InvalidArgument("distance matrix needs non-empty inputs".into()));
    }
    let dim = query[0].vector.len();
    if query.iter().chain(reference).any(|d| d.vector.len() != dim) {
        return Err(Error::Dimension("descriptors differ in dimension".into()));
    }
    let mut values = Vec::with_capacity(query.len() * reference.len());
    for q in query {
        for r in reference {
            values.push(cos_dist(&q.vector, &r.vector).max(0.0));
        }
    }
    DistanceMatrix::new(query.len(), reference.len(), values)
}

/// Hadamard product with the reciprocal weight outer product:
/// `out[i][j] = D[i][j] / (w_q[i] · w_r[j])`.
pub fn weight_matrix(query_weights: &[f64], ref_weights: &[f64], d: &DistanceMatrix) -> Result<DistanceMatrix> {
    if query_weights.len() != d.rows || ref_weights.len() != d.cols {
        return Err(Error::Dimension(format!(
            "weights ({}, {}) do not match a {}x{} matrix",
            query_weights.len(),
            ref_weights.len(),
            d.rows,
            d.cols
        )));
    }
    if query_weights.iter().chain(ref_weights).any(|w| !(*w > 0.0 && w.is_finite())) {
        return Err(Error::InvalidArgument("weights must be positive".into()));
    }
    let mut values = Vec::with_capacity(d.values.len());
    for (i, wq) in query_weights.iter().enumerate() {
        for (j, wr) in ref_weights.iter().enumerate() {
            values.push(d.get(i, j) / (wq * wr));
        }
    }
    DistanceMatrix::new(d.rows, d.cols, values)
}

/// Pairs `(i, j)` where `j` is row `i`'s argmin and `i` is column `j`'s
/// argmin, ties resolved to the lowest index. Output is ordered by `i`.
pub fn mutual_nn(d: &DistanceMatrix) -> MatchSet {
    let row_best: Vec<usize> = (0..d.rows).map(|i| argmin(d.row(i).iter().copied())).collect();
    let col_best: Vec<usize> = (0..d.cols)
        .map(|j| argmin((0..d.rows).map(|i| d.get(i, j))))
        .collect();
    let pairs = row_best
        .iter()
        .enumerate()
        .filter(|&(i, &j)| col_best[j] == i)
        .map(|(i, &j)| PatchMatch {
            query: i,
            reference: j,
            value: d.get(i, j),
        })
        .collect();
    MatchSet { pairs }
}

fn argmin(values: impl Iterator<Item = f64>) -> usize {
    let mut best = (0, f64::INFINITY);
    for (i, v) in values.enumerate() {
        if v < best.1 {
            best = (i, v);
        }
    }
    best.0
}

/// Spatial consistency of a match set on the patch lattice.
///
/// With grid displacements `dx = gx_q − gx_r`, `dy = gy_q − gy_r` and their
/// means over the matches, each match contributes
/// `(n_x − 1 − |dx − mean dx|) + (n_y − 1 − |dy − mean dy|)`.
pub fn spatial_score(matches: &MatchSet, query_grid: &PatchGrid, ref_grid: &PatchGrid) -> f64 {
    if matches.is_empty() {
        return 0.0;
    }
    let disp: Vec<(f64, f64)> = matches
        .pairs
        .iter()
        .map(|m| {
            let (qx, qy) = query_grid.coords(m.query);
            let (rx, ry) = ref_grid.coords(m.reference);
            (qx as f64 - rx as f64, qy as f64 - ry as f64)
        })
        .collect();
    let n = disp.len() as f64;
    let mean_x = disp.iter().map(|d| d.0).sum::<f64>() / n;
    let mean_y = disp.iter().map(|d| d.1).sum::<f64>() / n;
    let x_span = (query_grid.n_x - 1) as f64;
    let y_span = (query_grid.n_y - 1) as f64;
    disp.iter()
        .map(|(dx, dy)| (x_span - (dx - mean_x).abs()) + (y_span - (dy - mean_y).abs()))
        .sum()
}

/// Outcome of scoring one query/reference pair.
#[derive(Debug, Clone, PartialEq)]
pub struct PairMatch {
    pub score: f64,
    pub matches: MatchSet,
}

/// Distance matrix, optional reciprocal weighting, mutual NN, then the
/// spatial score. With `weighted = false` the descriptor weights are ignored.
pub fn pair_match(
    query: &[PatchDescriptor],
    reference: &[PatchDescriptor],
    query_grid: &PatchGrid,
    ref_grid: &PatchGrid,
    weighted: bool,
) -> Result<PairMatch> {
    if query.len() != query_grid.len() || reference.len() != ref_grid.len() {
        return Err(Error::Dimension(format!(
            "descriptor counts ({}, {}) do not match grids ({}, {})",
            query.len(),
            reference.len(),
            query_grid.len(),
            ref_grid.len()
        )));
    }
    let mut d = distance_matrix(query, reference)?;
    if weighted {
        let wq: Vec<f64> = query.iter().map(|p| p.weight).collect();
        let wr: Vec<f64> = reference.iter().map(|p| p.weight).collect();
        d = weight_matrix(&wq, &wr, &d)?;
    }
    let matches = mutual_nn(&d);
    Ok(PairMatch {
        score: spatial_score(&matches, query_grid, ref_grid),
        matches,
    })
}

pub fn pair_score(
    query: &[PatchDescriptor],
    reference: &[PatchDescriptor],
    query_grid: &PatchGrid,
    ref_grid: &PatchGrid,
    weighted: bool,
) -> Result<f64> {
    pair_match(query, reference, query_grid, ref_grid, weighted).map(|m| m.score)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn desc(v: &[f64], weight: f64) -> PatchDescriptor {
        PatchDescriptor { vector: v.to_vec(), grid_x: 0, grid_y: 0, weight }
    }

    #[test]
    fn distance_matrix_examples() {
        let e = [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]];
        let list: Vec<_> = e.iter().map(|v| desc(v, 1.0)).collect();
        let d = distance_matrix(&list, &list).unwrap();
        assert!((0..3).all(|i| d.get(i, i) == 0.0));

        let one = distance_matrix(&[desc(&[0.6, 0.8], 1.0)], &[desc(&[1.0, 0.0], 1.0)]).unwrap();
        assert_abs_diff_eq!(one.get(0, 0), 0.4, epsilon = 1e-15);

        let q = [desc(&e[0], 1.0), desc(&e[1], 1.0)];
        let r = [desc(&e[1], 1.0), desc(&e[0], 1.0), desc(&e[2], 1.0)];
        let d = distance_matrix(&q, &r).unwrap();
        assert_eq!(d.values(), &[1.0, 0.0, 1.0, 0.0, 1.0, 1.0]);

        assert!(distance_matrix(&[], &r).is_err());
    }

    #[test]
    fn weight_matrix_examples() {
        let d = DistanceMatrix::new(2, 2, vec![0.1, 0.5, 0.9, 0.3]).unwrap();
        assert_eq!(weight_matrix(&[1.0, 1.0], &[1.0, 1.0], &d).unwrap(), d);

        let single = DistanceMatrix::new(1, 1, vec![0.8]).unwrap();
        let w = weight_matrix(&[2.0], &[4.0], &single).unwrap();
        assert_abs_diff_eq!(w.get(0, 0), 0.1, epsilon = 1e-15);

        assert!(weight_matrix(&[1.0], &[1.0, 1.0], &d).is_err());
        assert!(weight_matrix(&[1.0, 0.0], &[1.0, 1.0], &d).is_err());
    }

    #[test]
    fn mutual_nn_examples() {
        let one = DistanceMatrix::new(1, 1, vec![0.7]).unwrap();
        assert_eq!(mutual_nn(&one).pairs, vec![PatchMatch { query: 0, reference: 0, value: 0.7 }]);

        let n = 4;
        let diag: Vec<f64> = (0..n * n).map(|i| if i % (n + 1) == 0 { 0.0 } else { 1.0 }).collect();
        let m = mutual_nn(&DistanceMatrix::new(n, n, diag).unwrap());
        assert_eq!(m.pairs.iter().map(|p| (p.query, p.reference)).collect::<Vec<_>>(), vec![(0, 0), (1, 1), (2, 2), (3, 3)]);

        // all-equal matrix: only (0, 0) survives lowest-index tie breaking
        let flat = DistanceMatrix::new(3, 3, vec![0.5; 9]).unwrap();
        assert_eq!(mutual_nn(&flat).len(), 1);
    }

    #[test]
    fn spatial_score_examples() {
        let grid = PatchGrid::new(30, 30, 5, 5).unwrap(); // 6 x 6, spans (5, 5)
        assert_eq!(spatial_score(&MatchSet::default(), &grid, &grid), 0.0);

        let same = MatchSet {
            pairs: (0..4).map(|i| PatchMatch { query: i, reference: i, value: 0.0 }).collect(),
        };
        assert_eq!(spatial_score(&same, &grid, &grid), 4.0 * 10.0);

        // dx = {0, 2}, dy = {0, 0}
        let two = MatchSet {
            pairs: vec![
                PatchMatch { query: grid.index(0, 0), reference: grid.index(0, 0), value: 0.0 },
                PatchMatch { query: grid.index(3, 1), reference: grid.index(1, 1), value: 0.0 },
            ],
        };
        assert_eq!(spatial_score(&two, &grid, &grid), 18.0);
        let mut reversed = two.clone();
        reversed.pairs.reverse();
        assert_eq!(spatial_score(&reversed, &grid, &grid), 18.0);
    }

    #[test]
    fn pair_score_self_and_uniform_weights() {
        let grid = PatchGrid::new(10, 10, 5, 5).unwrap();
        let descs: Vec<_> = [[1.0, 0.0], [0.0, 1.0], [0.6, 0.8], [-1.0, 0.0]]
            .iter()
            .map(|v| desc(v, 1.0))
            .collect();
        let other: Vec<_> = [[0.0, 1.0], [1.0, 0.0], [-1.0, 0.0], [0.6, -0.8]]
            .iter()
            .map(|v| desc(v, 1.0))
            .collect();
        let self_score = pair_score(&descs, &descs, &grid, &grid, true).unwrap();
        assert_eq!(self_score, 4.0 * 2.0);
        assert!(pair_score(&descs, &other, &grid, &grid, true).unwrap() < self_score);
        assert_eq!(
            pair_match(&descs, &other, &grid, &grid, true).unwrap(),
            pair_match(&descs, &other, &grid, &grid, false).unwrap()
        );
    }
}

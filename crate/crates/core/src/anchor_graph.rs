//! Sparse instance-to-anchor affinity graphs.
//!
//! Each modality gets a k-nearest-anchor graph with adaptive weights; the
//! per-modality graphs are fused by an entrywise (Hadamard) product so that
//! only edges present in every modality survive.

use std::io::Write;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::spectral::{self, SpectralState};

/// Sparse `N × P` nonnegative matrix stored as rows of `(anchor, weight)`
/// pairs sorted by anchor index.
#[derive(Debug, Clone, PartialEq)]
pub struct AnchorGraph {
    n_anchors: usize,
    rows: Vec<Vec<(usize, f64)>>,
}

impl AnchorGraph {
    /// Builds a graph from explicit rows. Entries are sorted by anchor,
    /// explicit zeros dropped; duplicate or out-of-range anchors and negative
    /// or non-finite weights are rejected.
    pub fn from_rows(n_anchors: usize, rows: Vec<Vec<(usize, f64)>>) -> Result<Self> {
        let mut rows = rows;
        for (i, row) in rows.iter_mut().enumerate() {
            row.retain(|&(_, w)| w != 0.0);
            row.sort_by_key(|&(p, _)| p);
            for (pos, &(p, w)) in row.iter().enumerate() {
                if p >= n_anchors {
                    return Err(Error::Shape(format!(
                        "row {i}: anchor {p} out of range for {n_anchors} anchors"
                    )));
                }
                if !(w.is_finite() && w >= 0.0) {
                    return Err(Error::InvalidArgument(format!(
                        "row {i}: invalid weight {w} for anchor {p}"
                    )));
                }
                if pos > 0 && row[pos - 1].0 == p {
                    return Err(Error::InvalidArgument(format!(
                        "row {i}: duplicate anchor {p}"
                    )));
                }
            }
        }
        Ok(Self { n_anchors, rows })
    }

    /// Dense `N × P` matrix → sparse graph.
    pub fn from_dense(dense: &DMatrix<f64>) -> Result<Self> {
        let rows = dense
            .row_iter()
            .map(|r| r.iter().copied().enumerate().filter(|&(_, w)| w != 0.0).collect())
            .collect();
        Self::from_rows(dense.ncols(), rows)
    }

    pub fn n_rows(&self) -> usize {
        self.rows.len()
    }

    pub fn n_anchors(&self) -> usize {
        self.n_anchors
    }

    pub fn row(&self, i: usize) -> &[(usize, f64)] {
        &self.rows[i]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[(usize, f64)]> {
        self.rows.iter().map(Vec::as_slice)
    }

    pub fn nnz(&self) -> usize {
        self.rows.iter().map(Vec::len).sum()
    }

    pub fn row_sums(&self) -> Vec<f64> {
        self.rows.iter().map(|r| r.iter().map(|&(_, w)| w).sum()).collect()
    }

    /// Column sums, i.e. the total weight attached to each anchor.
    pub fn column_sums(&self) -> DVector<f64> {
        let mut out = DVector::zeros(self.n_anchors);
        for row in &self.rows {
            for &(p, w) in row {
                out[p] += w;
            }
        }
        out
    }

    pub fn to_dense(&self) -> DMatrix<f64> {
        let mut out = DMatrix::zeros(self.rows.len(), self.n_anchors);
        for (i, row) in self.rows.iter().enumerate() {
            for &(p, w) in row {
                out[(i, p)] = w;
            }
        }
        out
    }

    /// Dense copy of row `i`.
    pub fn dense_row(&self, i: usize) -> DVector<f64> {
        let mut out = DVector::zeros(self.n_anchors);
        for &(p, w) in &self.rows[i] {
            out[p] = w;
        }
        out
    }

    /// `self · M` for a dense `P × c` matrix.
    pub fn mul_dense(&self, m: &DMatrix<f64>) -> DMatrix<f64> {
        assert_eq!(m.nrows(), self.n_anchors);
        let mut out = DMatrix::zeros(self.rows.len(), m.ncols());
        for (i, row) in self.rows.iter().enumerate() {
            for &(p, w) in row {
                for c in 0..m.ncols() {
                    out[(i, c)] += w * m[(p, c)];
                }
            }
        }
        out
    }

    /// `Σ_ij self_ij · other_ij`.
    pub fn frobenius_dot(&self, other: &AnchorGraph) -> f64 {
        self.rows
            .iter()
            .zip(&other.rows)
            .map(|(a, b)| {
                let (mut ia, mut ib, mut acc) = (0, 0, 0.0);
                while ia < a.len() && ib < b.len() {
                    match a[ia].0.cmp(&b[ib].0) {
                        std::cmp::Ordering::Less => ia += 1,
                        std::cmp::Ordering::Greater => ib += 1,
                        std::cmp::Ordering::Equal => {
                            acc += a[ia].1 * b[ib].1;
                            ia += 1;
                            ib += 1;
                        }
                    }
                }
                acc
            })
            .sum()
    }

    pub fn frobenius_norm_sq(&self) -> f64 {
        self.rows.iter().flatten().map(|&(_, w)| w * w).sum()
    }

    /// Writes `i j w` lines sorted by `(i, j)`.
    pub fn dump(&self, mut out: impl Write) -> std::io::Result<()> {
        for (i, row) in self.rows.iter().enumerate() {
            for &(p, w) in row {
                writeln!(out, "{i} {p} {w:?}")?;
            }
        }
        Ok(())
    }

    pub fn dump_to_file(&self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = std::io::BufWriter::new(file);
        self.dump(&mut w).map_err(|e| Error::io(path, e))?;
        w.flush().map_err(|e| Error::io(path, e))
    }
}

/// Adaptive weights for one instance from all of its anchor distances.
///
/// The `k + 1` nearest anchors (ties broken by lower anchor index) give
/// weights `(b_{k+1} − b_j) / Σ_{j'≤k} (b_{k+1} − b_{j'})` on the first `k`.
/// When all `k + 1` distances coincide the denominator vanishes and the
/// weights fall back to `1/k`.
pub fn adaptive_weights(distances: &[f64], k: usize) -> Vec<(usize, f64)> {
    assert!(k >= 1 && k < distances.len(), "need 1 <= k < P");
    let mut order: Vec<usize> = (0..distances.len()).collect();
    let by_dist = |a: &usize, b: &usize| distances[*a].total_cmp(&distances[*b]).then(a.cmp(b));
    order.select_nth_unstable_by(k, by_dist);
    let nearest = &mut order[..=k];
    nearest.sort_unstable_by(by_dist);

    let kth = distances[nearest[k]];
    let gaps: Vec<f64> = nearest[..k].iter().map(|&p| kth - distances[p]).collect();
    let denom: f64 = gaps.iter().sum();

    let mut row: Vec<(usize, f64)> = if denom > 0.0 {
        nearest[..k]
            .iter()
            .zip(&gaps)
            .map(|(&p, &g)| (p, g / denom))
            .collect()
    } else {
        nearest[..k].iter().map(|&p| (p, 1.0 / k as f64)).collect()
    };
    row.sort_unstable_by_key(|&(p, _)| p);
    row
}

/// k-nearest-anchor graph of one modality: `features` is `d × N`, `anchors`
/// is `d × P`. Distances are exact squared Euclidean.
pub fn build_anchor_graph(
    features: &DMatrix<f64>,
    anchors: &DMatrix<f64>,
    k: usize,
) -> Result<AnchorGraph> {
    let p = anchors.ncols();
    if k == 0 || k >= p {
        return Err(Error::InvalidArgument(format!(
            "neighbor count k={k} must satisfy 1 <= k < P={p}"
        )));
    }
    if features.nrows() != anchors.nrows() {
        return Err(Error::Shape(format!(
            "features have dimension {} but anchors have {}",
            features.nrows(),
            anchors.nrows()
        )));
    }
    let rows = (0..features.ncols())
        .into_par_iter()
        .map(|i| {
            let x = features.column(i);
            let dist: Vec<f64> = anchors
                .column_iter()
                .map(|t| x.iter().zip(t.iter()).map(|(a, b)| (a - b) * (a - b)).sum())
                .collect();
            let mut row = adaptive_weights(&dist, k);
            row.retain(|&(_, w)| w > 0.0);
            row
        })
        .collect();
    Ok(AnchorGraph { n_anchors: p, rows })
}

/// Entrywise product of graphs sharing `N` and `P`. With `renormalize`,
/// nonzero rows are rescaled to sum to one.
pub fn fuse_graphs(graphs: &[AnchorGraph], renormalize: bool) -> Result<AnchorGraph> {
    let first = graphs
        .first()
        .ok_or_else(|| Error::InvalidArgument("no graphs to fuse".into()))?;
    for (m, g) in graphs.iter().enumerate() {
        if g.n_rows() != first.n_rows() || g.n_anchors() != first.n_anchors() {
            return Err(Error::Shape(format!(
                "graph {m} is {}x{}, graph 0 is {}x{}",
                g.n_rows(),
                g.n_anchors(),
                first.n_rows(),
                first.n_anchors()
            )));
        }
    }
    let rows = (0..first.n_rows())
        .map(|i| {
            let mut row: Vec<(usize, f64)> = first.row(i).to_vec();
            for g in &graphs[1..] {
                let other = g.row(i);
                row = row
                    .into_iter()
                    .filter_map(|(p, w)| {
                        other
                            .binary_search_by_key(&p, |&(q, _)| q)
                            .ok()
                            .map(|pos| (p, w * other[pos].1))
                    })
                    .filter(|&(_, w)| w != 0.0)
                    .collect();
            }
            if renormalize {
                let sum: f64 = row.iter().map(|&(_, w)| w).sum();
                if sum > 0.0 {
                    for e in &mut row {
                        e.1 /= sum;
                    }
                }
            }
            row
        })
        .collect();
    Ok(AnchorGraph {
        n_anchors: first.n_anchors(),
        rows,
    })
}

/// Initial embedding from the fused graph: eigenvectors of the `clusters`
/// smallest eigenvalues of `I − D^{-1/2} Âᵀ Â D^{-1/2}`, `D = diag(Âᵀ1)`.
pub fn initial_laplacian_embedding(
    fused: &AnchorGraph,
    clusters: usize,
    degree_floor: f64,
) -> Result<SpectralState> {
    let p = fused.n_anchors();
    if clusters == 0 || clusters > p {
        return Err(Error::InvalidArgument(format!(
            "cluster count {clusters} must be in 1..={p}"
        )));
    }
    let degrees = spectral::update_lambda(fused);
    let usable = degrees.iter().filter(|&&d| d > degree_floor).count();
    if usable < clusters {
        return Err(Error::Numerical(format!(
            "fused anchor graph has only {usable} anchors with nonzero degree, fewer than \
             C={clusters}; use more anchors, a smaller C, or --renormalize-fusion"
        )));
    }
    let gram = spectral::normalized_gram(fused, &degrees, degree_floor);
    let mut state = spectral::update_embedding(&gram, clusters)?;
    state.lambda = degrees;
    Ok(state)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn weights_of(row: &[(usize, f64)]) -> Vec<f64> {
        row.iter().map(|&(_, w)| w).collect()
    }

    #[test]
    fn weights_from_sorted_distances() {
        let row = adaptive_weights(&[1.0, 2.0, 4.0], 2);
        assert_eq!(row.len(), 2);
        assert!((row[0].1 - 0.6).abs() < 1e-15);
        assert!((row[1].1 - 0.4).abs() < 1e-15);
    }

    #[test]
    fn coincident_anchor_gets_full_weight() {
        let row = adaptive_weights(&[5.0, 0.0, 3.0], 1);
        assert_eq!(row, vec![(1, 1.0)]);
    }

    #[test]
    fn equal_distances_fall_back_to_uniform() {
        let row = adaptive_weights(&[3.0, 3.0, 3.0], 2);
        assert_eq!(row, vec![(0, 0.5), (1, 0.5)]);
    }

    #[test]
    fn kth_distance_ties_break_by_lower_index() {
        // anchors 1, 2, 3 tie at the second-nearest distance
        let row = adaptive_weights(&[0.5, 1.0, 1.0, 1.0, 9.0], 2);
        let anchors: Vec<usize> = row.iter().map(|&(p, _)| p).collect();
        assert_eq!(anchors, vec![0, 1]);
        // b_{k+1} = 1 ties with b_2, so weights are (0.5/0.5, 0/0.5)
        assert_eq!(weights_of(&row), vec![1.0, 0.0]);
    }

    #[test]
    fn build_validates_shapes() {
        let x = DMatrix::from_element(2, 4, 1.0);
        let t = DMatrix::from_element(2, 3, 0.0);
        assert!(build_anchor_graph(&x, &t, 3).is_err());
        assert!(build_anchor_graph(&x, &t, 0).is_err());
        let t3 = DMatrix::from_element(3, 3, 0.0);
        assert!(matches!(build_anchor_graph(&x, &t3, 1), Err(Error::Shape(_))));
    }

    #[test]
    fn fuse_single_graph_is_identity() {
        let g = AnchorGraph::from_rows(3, vec![vec![(0, 0.6), (1, 0.4)], vec![(2, 1.0)]]).unwrap();
        assert_eq!(fuse_graphs(std::slice::from_ref(&g), false).unwrap(), g);
    }

    #[test]
    fn fuse_overlapping_support() {
        let a = AnchorGraph::from_rows(3, vec![vec![(0, 0.6), (1, 0.4)]]).unwrap();
        let b = AnchorGraph::from_rows(3, vec![vec![(1, 0.5), (2, 0.5)]]).unwrap();
        let fused = fuse_graphs(&[a.clone(), b.clone()], false).unwrap();
        assert_eq!(fused.row(0).len(), 1);
        assert_eq!(fused.row(0)[0].0, 1);
        assert!((fused.row(0)[0].1 - 0.2).abs() < 1e-15);
        let renorm = fuse_graphs(&[a, b], true).unwrap();
        assert_eq!(renorm.row(0), &[(1, 1.0)]);
    }

    #[test]
    fn fuse_disjoint_support_gives_zero_row() {
        let a = AnchorGraph::from_rows(4, vec![vec![(0, 0.5), (1, 0.5)]]).unwrap();
        let b = AnchorGraph::from_rows(4, vec![vec![(2, 0.5), (3, 0.5)]]).unwrap();
        for renorm in [false, true] {
            let fused = fuse_graphs(&[a.clone(), b.clone()], renorm).unwrap();
            assert!(fused.row(0).is_empty());
        }
    }

    #[test]
    fn fuse_shape_mismatch() {
        let a = AnchorGraph::from_rows(4, vec![vec![(0, 1.0)]]).unwrap();
        let b = AnchorGraph::from_rows(3, vec![vec![(0, 1.0)]]).unwrap();
        assert!(matches!(fuse_graphs(&[a, b], false), Err(Error::Shape(_))));
    }

    #[test]
    fn dump_format() {
        let g = AnchorGraph::from_rows(3, vec![vec![(2, 0.25), (0, 0.75)], vec![(1, 1.0)]]).unwrap();
        let mut buf = Vec::new();
        g.dump(&mut buf).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap(), "0 0 0.75\n0 2 0.25\n1 1 1.0\n");
    }

    fn two_block_graph() -> AnchorGraph {
        // instances 0..3 use anchors {0,1}, instances 3..6 use anchors {2,3}
        let rows = (0..6)
            .map(|i| if i < 3 { vec![(0, 0.5), (1, 0.5)] } else { vec![(2, 0.3), (3, 0.7)] })
            .collect();
        AnchorGraph::from_rows(4, rows).unwrap()
    }

    /// Brute-force component count of the bipartite instance/anchor graph.
    fn brute_components(g: &AnchorGraph) -> usize {
        let n = g.n_rows();
        let mut label: Vec<usize> = (0..n).collect();
        loop {
            let mut changed = false;
            for i in 0..n {
                for j in 0..n {
                    let shared = g.row(i).iter().any(|&(p, _)| g.row(j).iter().any(|&(q, _)| p == q));
                    if shared && label[i] != label[j] {
                        let m = label[i].min(label[j]);
                        label[i] = m;
                        label[j] = m;
                        changed = true;
                    }
                }
            }
            if !changed {
                break;
            }
        }
        let mut l = label.clone();
        l.sort_unstable();
        l.dedup();
        l.len()
    }

    #[test]
    fn two_blocks_give_two_zero_eigenvalues() {
        let g = two_block_graph();
        assert_eq!(brute_components(&g), 2);
        let state = initial_laplacian_embedding(&g, 2, 1e-10).unwrap();
        assert!(state.eigenvalues.iter().all(|&e| e <= 1e-10), "{:?}", state.eigenvalues);
        let vtv = state.v.transpose() * &state.v;
        assert!((vtv - DMatrix::identity(2, 2)).abs().max() <= 1e-8);
    }

    #[test]
    fn square_embedding_has_full_trace() {
        let g = two_block_graph();
        let state = initial_laplacian_embedding(&g, 4, 1e-10).unwrap();
        let deg = g.column_sums();
        let e = spectral::normalized_gram(&g, &deg, 1e-10);
        let lap = DMatrix::identity(4, 4) - &e;
        let tr = (state.v.transpose() * &lap * &state.v).trace();
        assert!((tr - lap.trace()).abs() < 1e-10);
    }

    #[test]
    fn embedding_rejects_too_few_usable_anchors() {
        let g = AnchorGraph::from_rows(4, vec![vec![(0, 1.0)], vec![(0, 1.0)]]).unwrap();
        assert!(matches!(initial_laplacian_embedding(&g, 2, 1e-10), Err(Error::Numerical(_))));
        assert!(initial_laplacian_embedding(&g, 5, 1e-10).is_err());
    }

    fn features_strategy() -> impl Strategy<Value = (DMatrix<f64>, DMatrix<f64>, usize)> {
        (1usize..4, 1usize..12, 2usize..9).prop_flat_map(|(d, n, p)| {
            (
                proptest::collection::vec(-5.0f64..5.0, d * n),
                proptest::collection::vec(-5.0f64..5.0, d * p),
                1..p,
            )
                .prop_map(move |(x, t, k)| {
                    (DMatrix::from_vec(d, n, x), DMatrix::from_vec(d, p, t), k)
                })
        })
    }

    proptest! {
        #[test]
        fn rows_are_stochastic_and_ordered((x, t, k) in features_strategy()) {
            let g = build_anchor_graph(&x, &t, k).unwrap();
            for i in 0..g.n_rows() {
                let row = g.row(i);
                prop_assert!(row.len() <= k);
                let sum: f64 = row.iter().map(|&(_, w)| w).sum();
                prop_assert!((sum - 1.0).abs() <= 1e-12);
                prop_assert!(row.iter().all(|&(_, w)| w >= 0.0));
                // nearer anchors never get less weight
                let dist = |p: usize| (x.column(i) - t.column(p)).norm_squared();
                for &(p, wp) in row {
                    for &(q, wq) in row {
                        if dist(p) < dist(q) {
                            prop_assert!(wp >= wq);
                        }
                    }
                }
            }
        }

        #[test]
        fn anchor_permutation_permutes_columns((x, t, k) in features_strategy(), seed in any::<u64>()) {
            use rand::{seq::SliceRandom, SeedableRng};
            let p = t.ncols();
            let mut perm: Vec<usize> = (0..p).collect();
            perm.shuffle(&mut rand_chacha::ChaCha8Rng::seed_from_u64(seed));
            let permuted = t.select_columns(&perm);
            let g = build_anchor_graph(&x, &t, k).unwrap().to_dense();
            let h = build_anchor_graph(&x, &permuted, k).unwrap().to_dense();
            // exact ties may pick different anchors, so only compare tie-free rows
            for i in 0..x.ncols() {
                let mut d: Vec<f64> = (0..p).map(|q| (x.column(i) - t.column(q)).norm_squared()).collect();
                d.sort_by(f64::total_cmp);
                if d.windows(2).any(|w| w[0] == w[1]) {
                    continue;
                }
                for (new, &old) in perm.iter().enumerate() {
                    prop_assert!((h[(i, new)] - g[(i, old)]).abs() <= 1e-12);
                }
            }
        }

        #[test]
        fn fusion_never_grows_rows((x, t, k) in features_strategy(), shift in -1.0f64..1.0) {
            let g1 = build_anchor_graph(&x, &t, k).unwrap();
            let x2 = x.map(|v| v * 1.3 + shift);
            let g2 = build_anchor_graph(&x2, &t, k).unwrap();
            let fused = fuse_graphs(&[g1.clone(), g2.clone()], false).unwrap();
            for i in 0..fused.n_rows() {
                prop_assert!(fused.row(i).len() <= g1.row(i).len().min(g2.row(i).len()));
                let sum: f64 = fused.row(i).iter().map(|&(_, w)| w).sum();
                prop_assert!(sum <= 1.0 + 1e-12);
                prop_assert!(fused.row(i).iter().all(|&(_, w)| (0.0..=1.0).contains(&w)));
            }
        }
    }
}

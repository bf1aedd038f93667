//! Anchor degrees, the normalized anchor Gram matrix and its spectral
//! embedding, plus connected-component diagnostics.
//!
//! For a row-stochastic anchor graph `S` (`N × P`) with degrees
//! `Λ = diag(Sᵀ1)`, the normalized Gram matrix is
//! `E = Λ^{-1/2} Sᵀ S Λ^{-1/2}` and the anchor Laplacian is `L = I − E`.
//! The multiplicity of the zero eigenvalue of `L` equals the number of
//! connected components of the instance graph `S Sᵀ`.

use nalgebra::{DMatrix, DVector};

use crate::anchor_graph::AnchorGraph;
use crate::error::{Error, Result};

/// Degree floor applied before `Λ^{-1/2}`.
pub const DEFAULT_DEGREE_FLOOR: f64 = 1e-10;
/// Eigenvalues of `L` below this count as zero.
pub const DEFAULT_ZERO_EIGEN_TOL: f64 = 1e-6;
/// Edges with weight at or below this are ignored when counting components.
pub const DEFAULT_EDGE_THRESHOLD: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq)]
pub struct SpectralState {
    /// Anchor degrees, the diagonal of `Λ`.
    pub lambda: DVector<f64>,
    /// `P × C` orthonormal embedding.
    pub v: DMatrix<f64>,
    /// The `C` smallest eigenvalues of `L`, ascending.
    pub eigenvalues: Vec<f64>,
}

impl SpectralState {
    /// `Λ^{-1/2} V` with the degree floor applied.
    pub fn scaled_embedding(&self, degree_floor: f64) -> DMatrix<f64> {
        let mut out = self.v.clone();
        for (mut row, &deg) in out.row_iter_mut().zip(self.lambda.iter()) {
            row *= inv_sqrt_degree(deg, degree_floor);
        }
        out
    }
}

fn inv_sqrt_degree(deg: f64, floor: f64) -> f64 {
    if deg > 0.0 {
        1.0 / deg.max(floor).sqrt()
    } else {
        0.0
    }
}

/// Column sums of `S`: total mass each anchor receives.
pub fn update_lambda(s: &AnchorGraph) -> DVector<f64> {
    s.column_sums()
}

/// `E = Λ^{-1/2} Sᵀ S Λ^{-1/2}`, with `Λ^{-1/2}_p = 1/√max(Λ_p, floor)` and
/// zero rows/columns for zero-degree anchors.
pub fn normalized_gram(s: &AnchorGraph, lambda: &DVector<f64>, degree_floor: f64) -> DMatrix<f64> {
    let p = s.n_anchors();
    assert_eq!(lambda.len(), p);
    let scale: Vec<f64> = lambda.iter().map(|&d| inv_sqrt_degree(d, degree_floor)).collect();
    let mut gram = DMatrix::zeros(p, p);
    for row in s.rows() {
        for &(a, wa) in row {
            let xa = wa * scale[a];
            for &(b, wb) in row {
                gram[(a, b)] += xa * wb * scale[b];
            }
        }
    }
    gram
}

/// Spectral embedding from the normalized Gram matrix: eigenvectors of the
/// `clusters` largest eigenvalues of `E`, i.e. the smallest of `L = I − E`.
///
/// Eigenvector signs are fixed so that the largest-magnitude entry (first
/// one on ties) is positive. `lambda` in the returned state is left empty;
/// callers attach the degrees they used.
pub fn update_embedding(gram: &DMatrix<f64>, clusters: usize) -> Result<SpectralState> {
    let p = gram.nrows();
    if clusters == 0 || clusters > p {
        return Err(Error::InvalidArgument(format!(
            "cluster count {clusters} must be in 1..={p}"
        )));
    }
    if gram.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numerical("normalized Gram matrix has non-finite entries".into()));
    }
    let sym = (gram + gram.transpose()) * 0.5;
    let eig = sym
        .try_symmetric_eigen(1e-14, 10_000)
        .ok_or_else(|| Error::Numerical(format!("symmetric eigensolver did not converge on {p}x{p} matrix")))?;

    let mut order: Vec<usize> = (0..p).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]).then(a.cmp(&b)));
    let chosen = &order[..clusters];

    let mut v = eig.eigenvectors.select_columns(chosen);
    for mut col in v.column_iter_mut() {
        let mut best = 0;
        for (i, x) in col.iter().enumerate() {
            if x.abs() > col[best].abs() {
                best = i;
            }
        }
        if col[best] < 0.0 {
            col.neg_mut();
        }
    }
    let eigenvalues = chosen.iter().map(|&i| 1.0 - eig.eigenvalues[i]).collect();
    Ok(SpectralState {
        lambda: DVector::zeros(0),
        v,
        eigenvalues,
    })
}

/// Full ascending spectrum of `L = I − E`.
pub fn laplacian_spectrum(gram: &DMatrix<f64>) -> Vec<f64> {
    let sym = (gram + gram.transpose()) * 0.5;
    let mut ev: Vec<f64> = sym.symmetric_eigenvalues().iter().map(|e| 1.0 - e).collect();
    ev.sort_by(f64::total_cmp);
    ev
}

/// Number of `L` eigenvalues below `tol` for graph `s` with its own degrees.
pub fn zero_eigen_multiplicity(s: &AnchorGraph, degree_floor: f64, tol: f64) -> usize {
    let gram = normalized_gram(s, &update_lambda(s), degree_floor);
    laplacian_spectrum(&gram).iter().filter(|&&e| e < tol).count()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ComponentCount {
    /// Components of the bipartite instance/anchor graph that contain at
    /// least one instance; equal to the components of `S Sᵀ`.
    pub instance_components: usize,
    /// Anchors with no edge above the threshold.
    pub isolated_anchors: usize,
}

/// Connected components of the bipartite graph with edges `S_ip > threshold`.
pub fn count_components(s: &AnchorGraph, threshold: f64) -> ComponentCount {
    let n = s.n_rows();
    let p = s.n_anchors();
    let mut parent: Vec<usize> = (0..n + p).collect();
    fn find(parent: &mut [usize], mut x: usize) -> usize {
        while parent[x] != x {
            parent[x] = parent[parent[x]];
            x = parent[x];
        }
        x
    }
    let mut anchor_used = vec![false; p];
    for (i, row) in s.rows().enumerate() {
        for &(a, w) in row {
            if w > threshold {
                anchor_used[a] = true;
                let (ri, ra) = (find(&mut parent, i), find(&mut parent, n + a));
                if ri != ra {
                    parent[ri.max(ra)] = ri.min(ra);
                }
            }
        }
    }
    let mut roots: Vec<usize> = (0..n).map(|i| find(&mut parent, i)).collect();
    roots.sort_unstable();
    roots.dedup();
    ComponentCount {
        instance_components: roots.len(),
        isolated_anchors: anchor_used.iter().filter(|&&u| !u).count(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// `n_per` instances per block, each block owning `p_per` anchors.
    fn block_graph(blocks: usize, n_per: usize, p_per: usize, rng: &mut ChaCha8Rng) -> AnchorGraph {
        let mut rows = Vec::new();
        for b in 0..blocks {
            for _ in 0..n_per {
                let w: Vec<f64> = (0..p_per).map(|_| rng.random_range(0.1..1.0)).collect();
                let sum: f64 = w.iter().sum();
                rows.push((0..p_per).map(|j| (b * p_per + j, w[j] / sum)).collect());
            }
        }
        AnchorGraph::from_rows(blocks * p_per, rows).unwrap()
    }

    #[test]
    fn lambda_of_row_stochastic_graph_sums_to_n() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let g = block_graph(3, 7, 2, &mut rng);
        assert!((update_lambda(&g).sum() - 21.0).abs() < 1e-12);
    }

    #[test]
    fn lambda_concentrated_and_uniform() {
        let g = AnchorGraph::from_rows(3, vec![vec![(0, 1.0)]; 5]).unwrap();
        assert_eq!(update_lambda(&g).as_slice(), &[5.0, 0.0, 0.0]);
        let u = AnchorGraph::from_rows(4, vec![(0..4).map(|p| (p, 0.25)).collect(); 8]).unwrap();
        assert_eq!(update_lambda(&u).as_slice(), &[2.0; 4]);
    }

    #[test]
    fn pure_blocks_give_unit_eigenvalues() {
        // each instance sits entirely on one anchor: E is diagonal with ones
        let rows = (0..6).map(|i| vec![(i / 3, 1.0)]).collect();
        let g = AnchorGraph::from_rows(2, rows).unwrap();
        let e = normalized_gram(&g, &update_lambda(&g), DEFAULT_DEGREE_FLOOR);
        assert!((e - DMatrix::identity(2, 2)).abs().max() < 1e-12);
    }

    #[test]
    fn block_constant_gram_is_block_diagonal() {
        // block b: instances spread uniformly over anchors {2b, 2b+1}
        let rows = (0..8).map(|i| {
            let b = i / 4;
            vec![(2 * b, 0.5), (2 * b + 1, 0.5)]
        });
        let g = AnchorGraph::from_rows(4, rows.collect()).unwrap();
        let e = normalized_gram(&g, &update_lambda(&g), DEFAULT_DEGREE_FLOOR);
        // Λ = 2 everywhere, SᵀS block = 4·0.25 = 1, so E blocks are all 0.5
        for a in 0..4 {
            for b in 0..4 {
                let expected = if a / 2 == b / 2 { 0.5 } else { 0.0 };
                assert!((e[(a, b)] - expected).abs() < 1e-12);
            }
        }
        let mut ev: Vec<f64> = e.symmetric_eigenvalues().iter().copied().collect();
        ev.sort_by(|a, b| b.total_cmp(a));
        assert!((ev[0] - 1.0).abs() < 1e-12 && (ev[1] - 1.0).abs() < 1e-12);
        assert!(ev[2].abs() < 1e-12 && ev[3].abs() < 1e-12);
    }

    #[test]
    fn single_anchor_gram_is_one() {
        let g = AnchorGraph::from_rows(1, vec![vec![(0, 1.0)]; 4]).unwrap();
        let e = normalized_gram(&g, &update_lambda(&g), DEFAULT_DEGREE_FLOOR);
        assert!((e[(0, 0)] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn zero_degree_anchor_contributes_nothing() {
        let g = AnchorGraph::from_rows(3, vec![vec![(0, 0.5), (1, 0.5)]]).unwrap();
        let e = normalized_gram(&g, &update_lambda(&g), DEFAULT_DEGREE_FLOOR);
        assert!(e.row(2).iter().all(|&v| v == 0.0));
        assert!(e.column(2).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn gram_spectrum_in_unit_interval() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..20 {
            let n = rng.random_range(1..30);
            let p = rng.random_range(1..10);
            let mut dense = DMatrix::from_fn(n, p, |_, _| {
                if rng.random_bool(0.6) { rng.random_range(0.0..1.0) } else { 0.0 }
            });
            for mut row in dense.row_iter_mut() {
                row[0] += 0.1;
                let total = row.sum();
                row /= total;
            }
            let g = AnchorGraph::from_dense(&dense).unwrap();
            let e = normalized_gram(&g, &update_lambda(&g), DEFAULT_DEGREE_FLOOR);
            for ev in e.symmetric_eigenvalues().iter() {
                assert!(*ev >= -1e-8 && *ev <= 1.0 + 1e-8, "{ev}");
            }
        }
    }

    #[test]
    fn embedding_of_disconnected_blocks() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let g = block_graph(3, 5, 3, &mut rng);
        let e = normalized_gram(&g, &update_lambda(&g), DEFAULT_DEGREE_FLOOR);
        let state = update_embedding(&e, 3).unwrap();
        assert!(state.eigenvalues.iter().all(|&ev| ev.abs() <= 1e-10), "{:?}", state.eigenvalues);
        assert!(state.eigenvalues.windows(2).all(|w| w[0] <= w[1]));
        let vtv = state.v.transpose() * &state.v;
        assert!((vtv - DMatrix::identity(3, 3)).abs().max() <= 1e-8);
    }

    #[test]
    fn identity_gram_has_zero_laplacian_eigenvalues() {
        let state = update_embedding(&DMatrix::identity(5, 5), 3).unwrap();
        assert!(state.eigenvalues.iter().all(|&e| e.abs() < 1e-12));
        let vtv = state.v.transpose() * &state.v;
        assert!((vtv - DMatrix::identity(3, 3)).abs().max() <= 1e-8);
    }

    #[test]
    fn embedding_sign_convention() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let a = DMatrix::from_fn(6, 6, |_, _| rng.random_range(-1.0..1.0));
        let e = &a * a.transpose();
        let s1 = update_embedding(&e, 2).unwrap();
        let s2 = update_embedding(&e, 2).unwrap();
        assert_eq!(s1, s2);
        for col in s1.v.column_iter() {
            let max = col.iter().copied().fold(0.0f64, |m, x| if x.abs() > m.abs() { x } else { m });
            assert!(max > 0.0);
        }
    }

    /// Ky Fan optimality: no random orthonormal basis beats the eigenvectors.
    #[test]
    fn embedding_beats_random_orthonormal_bases() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let dense = DMatrix::from_fn(40, 10, |_, _| rng.random_range(0.0..1.0));
        let g = AnchorGraph::from_dense(&dense).unwrap();
        let e = normalized_gram(&g, &update_lambda(&g), DEFAULT_DEGREE_FLOOR);
        let lap = DMatrix::identity(10, 10) - &e;
        let state = update_embedding(&e, 3).unwrap();
        let best = (state.v.transpose() * &lap * &state.v).trace();
        let sum_small: f64 = state.eigenvalues.iter().sum();
        assert!((best - sum_small).abs() < 1e-10);
        for _ in 0..500 {
            let r = DMatrix::from_fn(10, 3, |_, _| rng.random_range(-1.0..1.0));
            let q = r.qr().q();
            let tr = (q.transpose() * &lap * &q).trace();
            assert!(best <= tr + 1e-12);
        }
    }

    #[test]
    fn embedding_rejects_bad_cluster_count() {
        assert!(update_embedding(&DMatrix::identity(3, 3), 0).is_err());
        assert!(update_embedding(&DMatrix::identity(3, 3), 4).is_err());
    }

    #[test]
    fn components_of_blocks_and_mixed() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let g = block_graph(3, 4, 2, &mut rng);
        assert_eq!(
            count_components(&g, DEFAULT_EDGE_THRESHOLD),
            ComponentCount { instance_components: 3, isolated_anchors: 0 }
        );
        let mixed = AnchorGraph::from_dense(&DMatrix::from_element(5, 4, 0.25)).unwrap();
        assert_eq!(count_components(&mixed, DEFAULT_EDGE_THRESHOLD).instance_components, 1);
    }

    #[test]
    fn components_report_isolated_anchors_and_threshold() {
        let g = AnchorGraph::from_rows(4, vec![vec![(0, 1.0 - 1e-9), (1, 1e-9)], vec![(2, 1.0)]]).unwrap();
        let c = count_components(&g, DEFAULT_EDGE_THRESHOLD);
        assert_eq!(c, ComponentCount { instance_components: 2, isolated_anchors: 2 });
        let c0 = count_components(&g, 0.0);
        assert_eq!(c0, ComponentCount { instance_components: 2, isolated_anchors: 1 });
    }

    #[test]
    fn components_match_zero_eigen_multiplicity() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for blocks in 1..6 {
            let g = block_graph(blocks, 6, 3, &mut rng);
            let bfs = count_components(&g, DEFAULT_EDGE_THRESHOLD).instance_components;
            let spec = zero_eigen_multiplicity(&g, DEFAULT_DEGREE_FLOOR, DEFAULT_ZERO_EIGEN_TOL);
            assert_eq!(bfs, blocks);
            assert_eq!(spec, blocks);
        }
    }

    /// Nonzero spectrum of `S Λ^{-1} Sᵀ` (N × N) equals that of `E` (P × P).
    #[test]
    fn instance_and_anchor_spectra_agree() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for _ in 0..10 {
            let n = rng.random_range(5..50);
            let p = rng.random_range(2..8);
            let dense = DMatrix::from_fn(n, p, |_, _| {
                if rng.random_bool(0.5) { rng.random_range(0.0..1.0) } else { 0.0 }
            });
            let g = AnchorGraph::from_dense(&dense).unwrap();
            let lambda = update_lambda(&g);
            let e = normalized_gram(&g, &lambda, DEFAULT_DEGREE_FLOOR);
            let inv = DMatrix::from_diagonal(&lambda.map(|d| if d > 0.0 { 1.0 / d } else { 0.0 }));
            let s = g.to_dense();
            let big = &s * inv * s.transpose();
            let mut a: Vec<f64> = e.symmetric_eigenvalues().iter().copied().filter(|v| v.abs() > 1e-9).collect();
            let mut b: Vec<f64> = big.symmetric_eigenvalues().iter().copied().filter(|v| v.abs() > 1e-9).collect();
            a.sort_by(f64::total_cmp);
            b.sort_by(f64::total_cmp);
            assert_eq!(a.len(), b.len());
            for (x, y) in a.iter().zip(&b) {
                assert!((x - y).abs() <= 1e-8);
            }
        }
    }

    #[test]
    fn scaled_embedding_applies_inverse_sqrt_degree() {
        let state = SpectralState {
            lambda: DVector::from_vec(vec![4.0, 0.0, 1.0]),
            v: DMatrix::from_element(3, 1, 1.0),
            eigenvalues: vec![0.0],
        };
        let s = state.scaled_embedding(DEFAULT_DEGREE_FLOOR);
        assert_eq!(s.column(0).as_slice(), &[0.5, 0.0, 1.0]);
    }
}

//! Top-K dependency hypergraph construction and degree-normalized
//! hypergraph convolution.
//!
//! Row u of the incidence matrix is the hyperedge anchored at node u: the
//! up-to-K peers with the highest positive cosine dependency on u, each
//! stored at its selecting score. Candidates with dependency <= 0 are
//! excluded even when that leaves fewer than K members: negative weights
//! would break the inverse-square-root degree normalization. Ties break
//! toward the lower node index so construction is reproducible.
//!
//! Gradients never flow through the discrete top-K selection; the tape
//! variant treats the selected pair set as a constant of the step while
//! the weights and the convolution input remain differentiable.

use crate::numerics::cosine_similarity;
use crate::tape::{Tape, Var};
use crate::tensor::{Tensor, TensorError};
use thiserror::Error;

const DEGREE_EPS: f64 = 1e-12;

#[derive(Error, Debug)]
pub enum HypergraphError {
    #[error("negative hyperedge weight {weight} at edge {edge}, node {node}")]
    NegativeWeight {
        edge: usize,
        node: usize,
        weight: f64,
    },
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

/// Square weighted incidence: row u holds the hyperedge anchored at u.
#[derive(Debug, Clone, PartialEq)]
pub struct Hypergraph {
    n: usize,
    k: usize,
    /// Per-row (node, weight) pairs, sorted by node index.
    rows: Vec<Vec<(usize, f64)>>,
}

impl Hypergraph {
    pub fn n(&self) -> usize {
        self.n
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn row(&self, u: usize) -> &[(usize, f64)] {
        &self.rows[u]
    }

    /// Weighted edge degree: sum of row u.
    pub fn edge_degree(&self) -> Vec<f64> {
        self.rows
            .iter()
            .map(|r| r.iter().map(|&(_, w)| w).sum())
            .collect()
    }

    /// Weighted node degree: column sums.
    pub fn node_degree(&self) -> Vec<f64> {
        let mut deg = vec![0.0; self.n];
        for r in &self.rows {
            for &(c, w) in r {
                deg[c] += w;
            }
        }
        deg
    }

    pub fn to_dense(&self) -> Tensor {
        let mut h = Tensor::zeros(vec![self.n, self.n]);
        for (r, row) in self.rows.iter().enumerate() {
            for &(c, w) in row {
                h.set(r, c, w);
            }
        }
        h
    }

    /// Debug dump as `edge<TAB>node<TAB>weight` triples.
    pub fn dump_tsv(&self) -> String {
        use std::fmt::Write;
        let mut out = String::new();
        for (r, row) in self.rows.iter().enumerate() {
            for &(c, w) in row {
                let _ = writeln!(out, "{r}\t{c}\t{w:.17}");
            }
        }
        out
    }
}

/// Cosine dependency between rows u and v of an embedding matrix.
pub fn dependency(embs: &Tensor, u: usize, v: usize) -> f64 {
    cosine_similarity(embs.row(u), embs.row(v))
}

/// All dependencies of row u, computed on demand: no n x n matrix is ever
/// materialized for a single query.
pub fn dependency_row(embs: &Tensor, u: usize) -> Vec<f64> {
    (0..embs.rows()).map(|v| dependency(embs, u, v)).collect()
}

/// The selected peer sets, detached from any weights.
#[derive(Debug, Clone, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct HyperStructure {
    pub n: usize,
    pub k: usize,
    pub include_self: bool,
    /// Per-row selected node indices, sorted ascending.
    pub neighbors: Vec<Vec<usize>>,
}

/// Select the top-K positive-dependency peers of every node.
pub fn select_topk(embs: &Tensor, k: usize, include_self: bool) -> HyperStructure {
    assert!(k >= 1, "K must be at least 1");
    let n = embs.rows();
    let mut neighbors = Vec::with_capacity(n);
    for u in 0..n {
        let mut scored: Vec<(usize, f64)> = dependency_row(embs, u)
            .into_iter()
            .enumerate()
            .filter(|&(v, c)| v != u && c > 0.0)
            .collect();
        // Highest score first; ties toward the lower index.
        scored.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
        scored.truncate(k);
        let mut sel: Vec<usize> = scored.into_iter().map(|(v, _)| v).collect();
        if include_self {
            sel.push(u);
        }
        sel.sort_unstable();
        neighbors.push(sel);
    }
    HyperStructure {
        n,
        k,
        include_self,
        neighbors,
    }
}

/// Attach cosine weights to an already-selected structure. Self-members
/// weigh their own cosine, which is 1 for any nonzero row.
pub fn weights_from_structure(embs: &Tensor, structure: &HyperStructure) -> Hypergraph {
    let rows = structure
        .neighbors
        .iter()
        .enumerate()
        .map(|(u, sel)| {
            sel.iter()
                .map(|&v| (v, dependency(embs, u, v)))
                .collect::<Vec<_>>()
        })
        .collect();
    Hypergraph {
        n: structure.n,
        k: structure.k,
        rows,
    }
}

/// Build the per-layer dependency hypergraph from current embeddings.
pub fn build_hypergraph(embs: &Tensor, k: usize) -> Hypergraph {
    build_hypergraph_with(embs, k, false)
}

pub fn build_hypergraph_with(embs: &Tensor, k: usize, include_self: bool) -> Hypergraph {
    let structure = select_topk(embs, k, include_self);
    weights_from_structure(embs, &structure)
}

/// H_tilde: every entry divided by the square root of its row's edge
/// degree times its column's node degree; zero degrees map to zero.
pub fn normalize(hg: &Hypergraph) -> Result<Tensor, HypergraphError> {
    for (r, row) in hg.rows.iter().enumerate() {
        for &(c, w) in row {
            if w < 0.0 {
                return Err(HypergraphError::NegativeWeight {
                    edge: r,
                    node: c,
                    weight: w,
                });
            }
        }
    }
    let de = hg.edge_degree();
    let dv = hg.node_degree();
    let mut out = Tensor::zeros(vec![hg.n, hg.n]);
    for (r, row) in hg.rows.iter().enumerate() {
        for &(c, w) in row {
            let denom = de[r] * dv[c];
            if denom > DEGREE_EPS {
                out.set(r, c, w / denom.sqrt());
            }
        }
    }
    Ok(out)
}

/// Psi = LeakyReLU(H_tilde H_tilde^T Z W), slope 0.2.
pub fn hyper_convolve(h_tilde: &Tensor, z: &Tensor, w: &Tensor) -> Result<Tensor, TensorError> {
    let mixed = h_tilde.matmul(&h_tilde.transpose())?.matmul(z)?.matmul(w)?;
    Ok(crate::numerics::leaky_relu(&mixed, 0.2))
}

/// Tape version of the full branch: cosine weights on the fixed selected
/// structure, degree normalization, then the convolution. Gradients flow
/// through `z` and `w` and through the cosine weights, not the selection.
pub fn hyper_branch_var(
    tape: &Tape,
    z: Var,
    w: Var,
    structure: &HyperStructure,
) -> Result<Var, TensorError> {
    let normalized = tape.normalize_rows(z, crate::numerics::COSINE_EPS);
    let cosines = tape.matmul(normalized, tape.transpose(normalized))?;
    let mut mask = Tensor::zeros(vec![structure.n, structure.n]);
    for (u, sel) in structure.neighbors.iter().enumerate() {
        for &v in sel {
            mask.set(u, v, 1.0);
        }
    }
    let incidence = tape.hadamard(cosines, tape.constant(mask))?;
    let edge_deg = tape.row_sums(incidence);
    let node_deg = tape.transpose(tape.sum_rows(incidence));
    let h_tilde = tape.scale_cols(
        tape.scale_rows(incidence, tape.pow_neg_half(edge_deg, DEGREE_EPS))?,
        tape.pow_neg_half(node_deg, DEGREE_EPS),
    )?;
    let mixed = tape.matmul(tape.matmul(tape.matmul(h_tilde, tape.transpose(h_tilde))?, z)?, w)?;
    Ok(tape.leaky_relu(mixed, 0.2))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_mat(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Tensor {
        Tensor::matrix(r, c, (0..r * c).map(|_| rng.gen_range(-1.0..1.0)).collect())
    }

    #[test]
    fn dependency_trivial_cases() {
        let same = Tensor::matrix(3, 2, vec![1.0, 2.0, 1.0, 2.0, 1.0, 2.0]);
        for u in 0..3 {
            for v in 0..3 {
                assert!((dependency(&same, u, v) - 1.0).abs() < 1e-12);
            }
        }
        let ortho = Tensor::matrix(2, 2, vec![1.0, 0.0, 0.0, 1.0]);
        assert!(dependency(&ortho, 0, 1).abs() < 1e-15);
    }

    #[test]
    fn dependency_row_matches_full_matrix_oracle() {
        // Dense n^2 oracle.
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let embs = rand_mat(&mut rng, 3, 4);
        let mut full = vec![vec![0.0; 3]; 3];
        for u in 0..3 {
            for v in 0..3 {
                full[u][v] = cosine_similarity(embs.row(u), embs.row(v));
            }
        }
        for u in 0..3 {
            let lazy = dependency_row(&embs, u);
            for v in 0..3 {
                assert!((lazy[v] - full[u][v]).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn saturation_when_k_exceeds_candidates() {
        // Positive-quadrant rows so every pairwise cosine is positive.
        let embs = Tensor::matrix(3, 2, vec![1.0, 0.1, 0.5, 1.0, 1.0, 1.0]);
        let hg = build_hypergraph(&embs, 2);
        for u in 0..3 {
            let members: Vec<usize> = hg.row(u).iter().map(|&(v, _)| v).collect();
            let expected: Vec<usize> = (0..3).filter(|&v| v != u).collect();
            assert_eq!(members, expected);
            for &(v, w) in hg.row(u) {
                assert!((w - dependency(&embs, u, v)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn single_node_has_empty_row() {
        let embs = Tensor::matrix(1, 3, vec![1.0, 2.0, 3.0]);
        let hg = build_hypergraph(&embs, 8);
        assert!(hg.row(0).is_empty());
    }

    #[test]
    fn empty_input_gives_empty_hypergraph() {
        let embs = Tensor::zeros(vec![0, 4]);
        let hg = build_hypergraph(&embs, 3);
        assert_eq!(hg.n(), 0);
        assert!(normalize(&hg).unwrap().is_empty());
    }

    #[test]
    fn topk_matches_sort_oracle() {
        // O(n^2 log n) full-sort oracle, 20 nodes.
        let mut rng = ChaCha8Rng::seed_from_u64(33);
        let embs = rand_mat(&mut rng, 20, 6);
        for k in [1usize, 3, 8] {
            let hg = build_hypergraph(&embs, k);
            for u in 0..20 {
                let mut all: Vec<(usize, f64)> = (0..20)
                    .filter(|&v| v != u)
                    .map(|v| (v, dependency(&embs, u, v)))
                    .filter(|&(_, c)| c > 0.0)
                    .collect();
                all.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
                all.truncate(k);
                all.sort_by_key(|&(v, _)| v);
                assert_eq!(hg.row(u).len(), all.len());
                for (&(v, w), &(ov, ow)) in hg.row(u).iter().zip(&all) {
                    assert_eq!(v, ov);
                    assert!((w - ow).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn negative_dependencies_excluded() {
        let embs = Tensor::matrix(2, 2, vec![1.0, 0.0, -1.0, 0.0]);
        let hg = build_hypergraph(&embs, 4);
        assert!(hg.row(0).is_empty());
        assert!(hg.row(1).is_empty());
    }

    #[test]
    fn include_self_adds_unit_weight() {
        let embs = Tensor::matrix(2, 2, vec![1.0, 0.0, -1.0, 0.0]);
        let hg = build_hypergraph_with(&embs, 4, true);
        assert_eq!(hg.row(0).len(), 1);
        let (v, w) = hg.row(0)[0];
        assert_eq!(v, 0);
        assert!((w - 1.0).abs() < 1e-12);
    }

    #[test]
    fn normalize_unit_degrees() {
        let embs = Tensor::matrix(2, 2, vec![1.0, 0.0, -1.0, 0.0]);
        let mut hg = build_hypergraph_with(&embs, 1, true);
        hg.rows[1].clear(); // single self-loop hyperedge at node 0
        let h = hg.to_dense();
        let ht = normalize(&hg).unwrap();
        assert!(ht.max_abs_diff(&h) < 1e-15);
    }

    #[test]
    fn normalize_uniform_weights_hand_oracle() {
        // Hand degree-product oracle at k = 2: one hyperedge with
        // two nodes at uniform weight w.
        let w = 0.6;
        let hg = Hypergraph {
            n: 3,
            k: 2,
            rows: vec![vec![(1, w), (2, w)], vec![], vec![]],
        };
        let ht = normalize(&hg).unwrap();
        // Edge degree of row 0 is 2w, node degree of each member is w.
        let expected = w / (2.0 * w * w).sqrt();
        assert!((ht.at(0, 1) - expected).abs() < 1e-12);
        assert!((ht.at(0, 2) - expected).abs() < 1e-12);
    }

    #[test]
    fn negative_weight_rejected_by_normalize() {
        let hg = Hypergraph {
            n: 2,
            k: 1,
            rows: vec![vec![(1, -0.5)], vec![]],
        };
        assert!(matches!(
            normalize(&hg),
            Err(HypergraphError::NegativeWeight { edge: 0, node: 1, .. })
        ));
    }

    #[test]
    fn convolve_identity_operator() {
        let n = 3;
        let mut eye = Tensor::zeros(vec![n, n]);
        for i in 0..n {
            eye.set(i, i, 1.0);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let z = rand_mat(&mut rng, n, 2);
        let mut w = Tensor::zeros(vec![2, 2]);
        w.set(0, 0, 1.0);
        w.set(1, 1, 1.0);
        let psi = hyper_convolve(&eye, &z, &w).unwrap();
        assert!(psi.max_abs_diff(&crate::numerics::leaky_relu(&z, 0.2)) < 1e-15);
        let zero = Tensor::zeros(vec![n, 2]);
        assert!(hyper_convolve(&eye, &zero, &w).unwrap().max_abs_diff(&zero) < 1e-15);
    }

    #[test]
    fn convolve_matches_dense_oracle() {
        // Dense matmul oracle on a 4-node fixture.
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let embs = rand_mat(&mut rng, 4, 3);
        let hg = build_hypergraph(&embs, 2);
        let ht = normalize(&hg).unwrap();
        let z = rand_mat(&mut rng, 4, 3);
        let w = rand_mat(&mut rng, 3, 3);
        let got = hyper_convolve(&ht, &z, &w).unwrap();
        let oracle = crate::numerics::leaky_relu(
            &ht.matmul(&ht.transpose())
                .unwrap()
                .matmul(&z)
                .unwrap()
                .matmul(&w)
                .unwrap(),
            0.2,
        );
        assert!(got.max_abs_diff(&oracle) < 1e-15);
    }

    #[test]
    fn tape_branch_matches_plain_pipeline() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let embs = rand_mat(&mut rng, 5, 3);
        let w = rand_mat(&mut rng, 3, 3);
        let structure = select_topk(&embs, 2, false);
        let hg = weights_from_structure(&embs, &structure);
        let plain = hyper_convolve(&normalize(&hg).unwrap(), &embs, &w).unwrap();
        let tape = Tape::new();
        let z = tape.leaf(embs.clone());
        let wv = tape.leaf(w.clone());
        let psi = hyper_branch_var(&tape, z, wv, &structure).unwrap();
        assert!(tape.value(psi).max_abs_diff(&plain) < 1e-12);
    }

    #[test]
    fn gram_operator_is_positive_semidefinite() {
        // Jacobi eigenvalue oracle on <= 10-node instances.
        fn jacobi_eigenvalues(m: &Tensor) -> Vec<f64> {
            let n = m.rows();
            let mut a: Vec<Vec<f64>> = (0..n).map(|i| m.row(i).to_vec()).collect();
            for _ in 0..200 {
                let (mut p, mut q, mut max) = (0, 1, 0.0);
                for i in 0..n {
                    for j in i + 1..n {
                        if a[i][j].abs() > max {
                            max = a[i][j].abs();
                            p = i;
                            q = j;
                        }
                    }
                }
                if max < 1e-14 {
                    break;
                }
                let theta = 0.5 * (2.0 * a[p][q]).atan2(a[p][p] - a[q][q]);
                let (c, s) = (theta.cos(), theta.sin());
                for k in 0..n {
                    let (akp, akq) = (a[k][p], a[k][q]);
                    a[k][p] = c * akp + s * akq;
                    a[k][q] = -s * akp + c * akq;
                }
                for k in 0..n {
                    let (apk, aqk) = (a[p][k], a[q][k]);
                    a[p][k] = c * apk + s * aqk;
                    a[q][k] = -s * apk + c * aqk;
                }
            }
            (0..n).map(|i| a[i][i]).collect()
        }
        let mut rng = ChaCha8Rng::seed_from_u64(51);
        for n in [4usize, 7, 10] {
            let embs = rand_mat(&mut rng, n, 3);
            let ht = normalize(&build_hypergraph(&embs, 3)).unwrap();
            let gram = ht.matmul(&ht.transpose()).unwrap();
            for ev in jacobi_eigenvalues(&gram) {
                assert!(ev >= -1e-9, "eigenvalue {ev} < -1e-9");
            }
        }
    }

    #[test]
    fn determinism_and_scale_invariance() {
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let embs = rand_mat(&mut rng, 12, 4);
        let a = build_hypergraph(&embs, 3);
        let b = build_hypergraph(&embs, 3);
        assert_eq!(a, b);
        let scaled = build_hypergraph(&embs.scale(3.25), 3);
        for u in 0..12 {
            assert_eq!(a.row(u).len(), scaled.row(u).len());
            for (&(v, w), &(sv, sw)) in a.row(u).iter().zip(scaled.row(u)) {
                assert_eq!(v, sv);
                assert!((w - sw).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn row_sparsity_bounded_by_k() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let embs = rand_mat(&mut rng, 15, 4);
        for k in [1usize, 2, 5] {
            let hg = build_hypergraph(&embs, k);
            for u in 0..15 {
                assert!(hg.row(u).len() <= k);
                for &(v, w) in hg.row(u) {
                    assert!((w - dependency(&embs, u, v)).abs() < 1e-12);
                }
            }
        }
    }
}

//! Collaborative signal propagation over the bipartite graph and fusion
//! with the hypergraph branch.
//!
//! The propagation layer is the weightless, nonlinearity-free
//! degree-normalized neighborhood sum; zero-degree nodes receive zero
//! messages (there is no self-term, the fusion step carries identity
//! through the sum).

use crate::data::InteractionGraph;
use crate::tensor::{SparseMatrix, Tensor, TensorError};
use std::rc::Rc;

/// Degree-normalized message operators: (user-from-item, item-from-user).
///
/// The item-side operator is the exact transpose of the user-side one.
pub fn bipartite_operators(graph: &InteractionGraph) -> (Rc<SparseMatrix>, Rc<SparseMatrix>) {
    let mut user_side = SparseMatrix::new(graph.n_users(), graph.n_items());
    let mut item_side = SparseMatrix::new(graph.n_items(), graph.n_users());
    for (u, v) in graph.edges() {
        let w = 1.0 / ((graph.user_degree(u) * graph.item_degree(v)) as f64).sqrt();
        user_side.push(u.0, v.0, w);
        item_side.push(v.0, u.0, w);
    }
    (Rc::new(user_side), Rc::new(item_side))
}

/// One propagation hop: users aggregate from items and items from users.
pub fn lightgcn_layer(
    graph: &InteractionGraph,
    user_embs: &Tensor,
    item_embs: &Tensor,
) -> Result<(Tensor, Tensor), TensorError> {
    let (user_op, item_op) = bipartite_operators(graph);
    Ok((user_op.apply(item_embs)?, item_op.apply(user_embs)?))
}

/// Elementwise fusion of the local propagation output and the hypergraph
/// output of the same layer.
pub fn fuse(local: &Tensor, global: &Tensor) -> Result<Tensor, TensorError> {
    local.add(global)
}

/// Average pooling over all layer matrices (layer 0 included).
pub fn final_representation(per_layer: &[Tensor]) -> Result<Tensor, TensorError> {
    assert!(!per_layer.is_empty(), "final_representation needs >= 1 layer");
    let mut acc = per_layer[0].clone();
    for t in &per_layer[1..] {
        acc = acc.add(t)?;
    }
    Ok(acc.scale(1.0 / per_layer.len() as f64))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{parse_interactions, InteractionGraph};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_mat(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Tensor {
        Tensor::matrix(r, c, (0..r * c).map(|_| rng.gen_range(-1.0..1.0)).collect())
    }

    #[test]
    fn single_neighbor_unit_degrees_pass_message_through() {
        let g = parse_interactions("0\t0").unwrap();
        let zu = Tensor::matrix(1, 2, vec![0.3, -0.4]);
        let zv = Tensor::matrix(1, 2, vec![1.5, 2.5]);
        let (u_next, v_next) = lightgcn_layer(&g, &zu, &zv).unwrap();
        assert!(u_next.max_abs_diff(&zv) < 1e-15);
        assert!(v_next.max_abs_diff(&zu) < 1e-15);
    }

    #[test]
    fn isolated_user_receives_zero() {
        let g = InteractionGraph::from_dense_edges(2, 1, [(1, 0)]);
        let zu = Tensor::matrix(2, 2, vec![1.0, 1.0, 2.0, 2.0]);
        let zv = Tensor::matrix(1, 2, vec![3.0, -3.0]);
        let (u_next, _) = lightgcn_layer(&g, &zu, &zv).unwrap();
        assert_eq!(u_next.row(0), &[0.0, 0.0]);
        assert!((u_next.at(1, 0) - 3.0).abs() < 1e-12);
    }

    #[test]
    fn complete_bipartite_2x2_normalization_oracle() {
        // Hand-evaluated normalization: all degrees are 2, so each
        // user message is (z_v0 + z_v1) / 2.
        let g = parse_interactions("0\t0\n0\t1\n1\t0\n1\t1").unwrap();
        let zu = Tensor::matrix(2, 2, vec![1.0, 1.0, 1.0, 1.0]);
        let zv = Tensor::matrix(2, 2, vec![1.0, 3.0, 5.0, 7.0]);
        let (u_next, _) = lightgcn_layer(&g, &zu, &zv).unwrap();
        for i in 0..2 {
            assert!((u_next.at(i, 0) - 3.0).abs() < 1e-12);
            assert!((u_next.at(i, 1) - 5.0).abs() < 1e-12);
        }
    }

    #[test]
    fn layer_is_linear() {
        let g = parse_interactions("0\t0\n0\t1\n1\t1\n2\t0").unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let z1 = rand_mat(&mut rng, g.n_items(), 3);
        let z2 = rand_mat(&mut rng, g.n_items(), 3);
        let zu = Tensor::zeros(vec![g.n_users(), 3]);
        let (a, _) = lightgcn_layer(&g, &zu, &z1).unwrap();
        let (b, _) = lightgcn_layer(&g, &zu, &z2).unwrap();
        let (sum, _) = lightgcn_layer(&g, &zu, &z1.add(&z2).unwrap()).unwrap();
        assert!(sum.max_abs_diff(&a.add(&b).unwrap()) < 1e-12);
        let (scaled, _) = lightgcn_layer(&g, &zu, &z1.scale(2.5)).unwrap();
        assert!(scaled.max_abs_diff(&a.scale(2.5)) < 1e-15);
    }

    #[test]
    fn operators_are_transposes() {
        let g = parse_interactions("0\t0\n0\t1\n1\t1\n2\t0\n2\t2").unwrap();
        let (user_op, item_op) = bipartite_operators(&g);
        let dense_u = user_op.to_dense();
        let dense_v = item_op.to_dense();
        assert!(dense_u.max_abs_diff(&dense_v.transpose()) < 1e-15);
    }

    #[test]
    fn fuse_cases() {
        let a = Tensor::matrix(2, 2, vec![1.0, 2.0, 3.0, 4.0]);
        let zero = Tensor::zeros(vec![2, 2]);
        assert!(fuse(&a, &zero).unwrap().max_abs_diff(&a) < 1e-15);
        assert!(fuse(&a, &a).unwrap().max_abs_diff(&a.scale(2.0)) < 1e-15);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = rand_mat(&mut rng, 3, 2);
        let y = rand_mat(&mut rng, 3, 2);
        let fused = fuse(&x, &y).unwrap();
        for i in 0..3 {
            for j in 0..2 {
                assert!((fused.at(i, j) - (x.at(i, j) + y.at(i, j))).abs() < 1e-15);
            }
        }
        assert!(fuse(&a, &Tensor::zeros(vec![3, 2])).is_err());
    }

    #[test]
    fn final_representation_cases() {
        let a = Tensor::matrix(2, 2, vec![1.0, 2.0, 3.0, 4.0]);
        assert!(final_representation(&[a.clone()]).unwrap().max_abs_diff(&a) < 1e-15);
        let cancel = final_representation(&[a.clone(), a.scale(-1.0)]).unwrap();
        assert!(cancel.max_abs_diff(&Tensor::zeros(vec![2, 2])) < 1e-15);
        // Loop oracle over 3 random layers.
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let layers: Vec<Tensor> = (0..3).map(|_| rand_mat(&mut rng, 2, 3)).collect();
        let got = final_representation(&layers).unwrap();
        for i in 0..2 {
            for j in 0..3 {
                let mean: f64 = layers.iter().map(|l| l.at(i, j)).sum::<f64>() / 3.0;
                assert!((got.at(i, j) - mean).abs() < 1e-14);
            }
        }
    }
}

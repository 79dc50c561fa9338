//! Plain (non-recorded) numeric kernels and the finite-difference
//! gradient checker.
//!
//! The functions here mirror the tape ops but operate directly on
//! [`Tensor`] values; they are used by evaluation code and by oracles in
//! tests where no gradients are needed.

use crate::tape::{Tape, Var};
use crate::tensor::{Tensor, TensorError};
use thiserror::Error;

/// Norm threshold below which a vector counts as zero for cosine purposes.
pub const COSINE_EPS: f64 = 1e-12;

/// Stable row softmax of a 1 x n tensor.
pub fn softmax_row(logits: &Tensor) -> Tensor {
    let m = logits
        .data()
        .iter()
        .cloned()
        .fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.data().iter().map(|&v| (v - m).exp()).collect();
    let z: f64 = exps.iter().sum();
    Tensor::new(logits.shape().to_vec(), exps.iter().map(|e| e / z).collect())
}

/// Stable log-sum-exp of a 1 x n tensor.
pub fn logsumexp_row(x: &Tensor) -> f64 {
    let m = x.data().iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    m + x.data().iter().map(|&v| (v - m).exp()).sum::<f64>().ln()
}

pub fn leaky_relu(x: &Tensor, slope: f64) -> Tensor {
    assert!((0.0..1.0).contains(&slope), "slope must be in [0,1)");
    x.map(|v| if v >= 0.0 { v } else { slope * v })
}

/// Cosine similarity of two equal-length slices. Returns 0 when either
/// vector has norm <= [`COSINE_EPS`]: untrained embeddings must not abort
/// hypergraph construction.
pub fn cosine_similarity(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len(), "cosine_similarity length mismatch");
    let na = a.iter().map(|v| v * v).sum::<f64>().sqrt();
    let nb = b.iter().map(|v| v * v).sum::<f64>().sqrt();
    if na <= COSINE_EPS || nb <= COSINE_EPS {
        return 0.0;
    }
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    dot / (na * nb)
}

#[derive(Error, Debug)]
pub enum CheckError {
    #[error("function returned a non-finite value during gradient check")]
    NonFinite,
    #[error("gradient check target must be scalar, got shape {0:?}")]
    NotScalar(Vec<usize>),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

/// Outcome of a finite-difference check.
#[derive(Debug, Clone)]
pub struct CheckReport {
    /// Largest relative error over all coordinates of all inputs.
    pub max_rel_err: f64,
    /// (input index, coordinate, analytic, numeric) at the worst coordinate.
    pub worst: Option<(usize, usize, f64, f64)>,
}

/// Relative error floor: coordinates where both gradients are below this
/// magnitude compare in absolute terms instead, so finite-difference noise
/// on vanishing gradients does not dominate the report.
const REL_FLOOR: f64 = 1e-4;

fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(REL_FLOOR)
}

/// Compare reverse-mode gradients of `f` against central differences
/// (f(x+eps) - f(x-eps)) / 2 eps, per coordinate of every input.
pub fn gradient_check<F>(f: F, inputs: &[Tensor], eps: f64) -> Result<CheckReport, CheckError>
where
    F: Fn(&Tape, &[Var]) -> Result<Var, TensorError>,
{
    let eval = |xs: &[Tensor]| -> Result<f64, CheckError> {
        let tape = Tape::new();
        let vars: Vec<Var> = xs.iter().map(|t| tape.leaf(t.clone())).collect();
        let out = f(&tape, &vars)?;
        let v = tape.value(out);
        if v.len() != 1 {
            return Err(CheckError::NotScalar(v.shape().to_vec()));
        }
        if !v.is_finite() {
            return Err(CheckError::NonFinite);
        }
        Ok(v.item())
    };

    // Analytic gradients at the base point.
    let tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let out = f(&tape, &vars)?;
    let base = tape.value(out);
    if base.len() != 1 {
        return Err(CheckError::NotScalar(base.shape().to_vec()));
    }
    if !base.is_finite() {
        return Err(CheckError::NonFinite);
    }
    let grads = tape.backward(out);
    let analytic: Vec<Tensor> = vars.iter().map(|&v| grads.grad(v)).collect();

    let mut report = CheckReport {
        max_rel_err: 0.0,
        worst: None,
    };
    let mut xs: Vec<Tensor> = inputs.to_vec();
    for i in 0..xs.len() {
        for j in 0..xs[i].len() {
            let orig = xs[i].data()[j];
            xs[i].data_mut()[j] = orig + eps;
            let fp = eval(&xs)?;
            xs[i].data_mut()[j] = orig - eps;
            let fm = eval(&xs)?;
            xs[i].data_mut()[j] = orig;
            let numeric = (fp - fm) / (2.0 * eps);
            let a = analytic[i].data()[j];
            let e = rel_err(a, numeric);
            if e > report.max_rel_err {
                report.max_rel_err = e;
                report.worst = Some((i, j, a, numeric));
            }
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::rc::Rc;

    fn rand_mat(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Tensor {
        Tensor::matrix(r, c, (0..r * c).map(|_| rng.gen_range(-1.5..1.5)).collect())
    }

    #[test]
    fn softmax_symmetry_and_singleton() {
        let s = softmax_row(&Tensor::row_vector(vec![0.0, 0.0, 0.0]));
        for &v in s.data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
        let one = softmax_row(&Tensor::row_vector(vec![42.0]));
        assert_eq!(one.data(), &[1.0]);
    }

    #[test]
    fn softmax_large_inputs_stable() {
        // Stable formula e^{x-max} oracle.
        let s = softmax_row(&Tensor::row_vector(vec![1000.0, 0.0]));
        assert!(s.is_finite());
        assert!((s.data()[0] - 1.0).abs() < 1e-12);
        assert!(s.data()[1] < 1e-12);
        assert!((s.data().iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn softmax_sums_to_one_and_shift_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..50 {
            let x = rand_mat(&mut rng, 1, 6);
            let s = softmax_row(&x);
            assert!((s.data().iter().sum::<f64>() - 1.0).abs() < 1e-12);
            let shifted = softmax_row(&x.map(|v| v + 3.7));
            assert!(s.max_abs_diff(&shifted) < 1e-12);
        }
    }

    #[test]
    fn logsumexp_cases() {
        assert!((logsumexp_row(&Tensor::row_vector(vec![0.0, 0.0])) - 2.0f64.ln()).abs() < 1e-15);
        assert!((logsumexp_row(&Tensor::row_vector(vec![-4.2])) - (-4.2)).abs() < 1e-15);
        // Shifted-sum oracle: both entries at 1000.
        let v = logsumexp_row(&Tensor::row_vector(vec![1000.0, 1000.0]));
        assert!((v - (1000.0 + 2.0f64.ln())).abs() < 1e-9);
    }

    #[test]
    fn leaky_relu_cases() {
        let y = leaky_relu(&Tensor::row_vector(vec![2.0, -1.0]), 0.2);
        assert_eq!(y.data(), &[2.0, -0.2]);
    }

    #[test]
    fn leaky_relu_gradient_at_negative_input() {
        // Finite-difference oracle: slope at x = -1 is 0.2.
        let report = gradient_check(
            |t, xs| Ok(t.sum_all(t.leaky_relu(xs[0], 0.2))),
            &[Tensor::row_vector(vec![-1.0])],
            1e-5,
        )
        .unwrap();
        assert!(report.max_rel_err < 1e-6, "{report:?}");
    }

    #[test]
    fn cosine_cases() {
        let a = [1.0, 2.0];
        assert!((cosine_similarity(&a, &a) - 1.0).abs() < 1e-12);
        assert!(cosine_similarity(&[1.0, 0.0], &[0.0, 1.0]).abs() < 1e-15);
        // Hand oracle 4/(sqrt(5) * sqrt(5)) = 0.8.
        assert!((cosine_similarity(&[1.0, 2.0], &[2.0, 1.0]) - 0.8).abs() < 1e-12);
        assert_eq!(cosine_similarity(&[0.0, 0.0], &[1.0, 1.0]), 0.0);
    }

    #[test]
    fn gradient_check_square() {
        let report = gradient_check(
            |t, xs| {
                let y = t.hadamard(xs[0], xs[0])?;
                Ok(t.sum_all(y))
            },
            &[Tensor::scalar(3.0)],
            1e-5,
        )
        .unwrap();
        assert!(report.max_rel_err < 1e-6, "{report:?}");
        let (_, _, a, _) = report.worst.unwrap_or((0, 0, 6.0, 6.0));
        assert!((a - 6.0).abs() < 1e-9);
    }

    #[test]
    fn gradient_check_softmax_sum_is_constant() {
        // sum(softmax(x)) == 1, so the gradient is the zero vector.
        let report = gradient_check(
            |t, xs| Ok(t.sum_all(t.softmax_rows(xs[0]))),
            &[Tensor::row_vector(vec![0.3, -1.0, 2.0])],
            1e-5,
        )
        .unwrap();
        assert!(report.max_rel_err < 1e-6, "{report:?}");
    }

    #[test]
    fn non_finite_function_reports_failure() {
        let res = gradient_check(
            |t, xs| {
                let huge = t.scale(xs[0], 1e308);
                let sq = t.hadamard(huge, huge)?;
                Ok(t.sum_all(sq))
            },
            &[Tensor::scalar(10.0)],
            1e-5,
        );
        assert!(res.is_err());
    }

    /// Every backward rule against central differences, randomized shapes,
    /// 100+ trials with a fixed seed.
    #[test]
    fn all_backward_rules_pass_gradient_check() {
        let mut rng = ChaCha8Rng::seed_from_u64(2024);
        let mut trials = 0usize;
        for round in 0..13 {
            let r = 1 + (round % 4);
            let c = 2 * (1 + (round % 3)); // even, for rotate_pairs
            let a = rand_mat(&mut rng, r, c);
            let b = rand_mat(&mut rng, r, c);
            let sq = rand_mat(&mut rng, c, c);
            let colv = rand_mat(&mut rng, c, 1).map(|v| v.abs() + 0.5);
            let rowv = rand_mat(&mut rng, r, 1).map(|v| v.abs() + 0.5);
            let mut sparse = crate::tensor::SparseMatrix::new(r + 1, r);
            for i in 0..r {
                sparse.push(i, i, rng.gen_range(0.2..1.0));
                sparse.push(r, i, rng.gen_range(-1.0..1.0));
            }
            let sparse = Rc::new(sparse);

            type Case<'a> = (
                &'a str,
                Box<dyn Fn(&Tape, &[Var]) -> Result<Var, TensorError>>,
                Vec<Tensor>,
            );
            let idx: Vec<usize> = (0..r + 2).map(|_| rng.gen_range(0..r)).collect();
            let idx2 = idx.clone();
            let cases: Vec<Case> = vec![
                ("add", Box::new(|t, x| Ok(t.sum_all(t.add(x[0], x[1])?))), vec![a.clone(), b.clone()]),
                ("sub", Box::new(|t, x| Ok(t.sum_all(t.sub(x[0], x[1])?))), vec![a.clone(), b.clone()]),
                ("hadamard", Box::new(|t, x| Ok(t.sum_all(t.hadamard(x[0], x[1])?))), vec![a.clone(), b.clone()]),
                ("scale", Box::new(|t, x| Ok(t.sum_all(t.scale(x[0], -1.7)))), vec![a.clone()]),
                ("matmul", Box::new(|t, x| Ok(t.sum_squares(t.matmul(x[0], x[1])?))), vec![a.clone(), sq.clone()]),
                ("transpose", Box::new(|t, x| Ok(t.sum_squares(t.transpose(x[0])))), vec![a.clone()]),
                ("concat_rows", Box::new(|t, x| Ok(t.sum_squares(t.concat_rows(&[x[0], x[1]])?))), vec![a.clone(), b.clone()]),
                ("sum_rows", Box::new(|t, x| Ok(t.sum_squares(t.sum_rows(x[0])))), vec![a.clone()]),
                ("mean_rows", Box::new(|t, x| Ok(t.sum_squares(t.mean_rows(x[0])))), vec![a.clone()]),
                ("row_sums", Box::new(|t, x| Ok(t.sum_squares(t.row_sums(x[0])))), vec![a.clone()]),
                ("slice_col", Box::new(|t, x| Ok(t.sum_squares(t.slice_col(x[0], 1)))), vec![a.clone()]),
                ("diag", Box::new(|t, x| Ok(t.sum_squares(t.diag(x[0])))), vec![sq.clone()]),
                ("softmax_rows", Box::new(|t, x| Ok(t.sum_squares(t.softmax_rows(x[0])))), vec![a.clone()]),
                ("logsumexp_rows", Box::new(|t, x| Ok(t.sum_squares(t.logsumexp_rows(x[0])))), vec![a.clone()]),
                ("leaky_relu", Box::new(|t, x| Ok(t.sum_squares(t.leaky_relu(x[0], 0.2)))), vec![a.clone()]),
                ("relu", Box::new(|t, x| Ok(t.sum_squares(t.relu(x[0])))), vec![a.clone()]),
                ("tanh", Box::new(|t, x| Ok(t.sum_squares(t.tanh(x[0])))), vec![a.clone()]),
                ("rows_dot", Box::new(|t, x| Ok(t.sum_squares(t.rows_dot(x[0], x[1])?))), vec![a.clone(), b.clone()]),
                (
                    "gather_rows",
                    Box::new(move |t, x| Ok(t.sum_squares(t.gather_rows(x[0], &idx2)))),
                    vec![a.clone()],
                ),
                ("normalize_rows", Box::new(|t, x| Ok(t.sum_squares(t.normalize_rows(x[0], 1e-12)))), vec![a.clone()]),
                ("scale_rows", Box::new(|t, x| Ok(t.sum_squares(t.scale_rows(x[0], x[1])?))), vec![a.clone(), rowv.clone()]),
                ("scale_cols", Box::new(|t, x| Ok(t.sum_squares(t.scale_cols(x[0], x[1])?))), vec![a.clone(), colv.clone()]),
                ("pow_neg_half", Box::new(|t, x| Ok(t.sum_squares(t.pow_neg_half(x[0], 1e-12)))), vec![rowv.clone()]),
                ("sum_squares", Box::new(|t, x| Ok(t.sum_squares(x[0]))), vec![a.clone()]),
                (
                    "spmm",
                    Box::new(move |t, x| Ok(t.sum_squares(t.spmm(sparse.clone(), x[0])?))),
                    vec![rand_mat(&mut rng.clone(), r, c)],
                ),
                ("rotate_pairs", Box::new(|t, x| Ok(t.sum_squares(t.rotate_pairs(x[0], x[1])?))), vec![a.clone(), b.clone()]),
            ];
            for (name, f, inputs) in cases {
                let report = gradient_check(&f, &inputs, 1e-5).unwrap();
                assert!(
                    report.max_rel_err < 1e-4,
                    "{name} failed at round {round}: {report:?}"
                );
                trials += 1;
            }
        }
        assert!(trials >= 100, "expected at least 100 trials, ran {trials}");
    }
}

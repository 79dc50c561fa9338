//! Reverse-mode automatic differentiation on a per-step tape.
//!
//! The tape is rebuilt for every optimization step: the hypergraph topology
//! changes between steps, so there is nothing to gain from a persistent
//! graph. Values are recorded during the forward pass; [`Tape::backward`]
//! walks the records in reverse and accumulates gradients additively
//! across fan-out.
//!
//! Operations are methods on [`Tape`] taking [`Var`] handles. Each op
//! registers a closed-form backward rule; every rule is checked against
//! central differences in the test suite.

use crate::tensor::{SparseMatrix, Tensor, TensorError};
use std::cell::RefCell;
use std::rc::Rc;

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

type BackwardFn = Box<dyn Fn(&Tensor, &[&Tensor], &Tensor) -> Vec<Tensor>>;

struct Record {
    out: usize,
    parents: Vec<usize>,
    backward: BackwardFn,
}

/// Recording tape for one forward/backward pass.
#[derive(Default)]
pub struct Tape {
    values: RefCell<Vec<Tensor>>,
    records: RefCell<Vec<Record>>,
}

/// Gradients of a scalar target with respect to every tape variable.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient of the target w.r.t. `v`; zeros if the target does not depend on it.
    pub fn grad(&self, v: Var) -> Tensor {
        match &self.grads[v.0] {
            Some(g) => g.clone(),
            None => Tensor::zeros(self.shapes[v.0].clone()),
        }
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    /// Record an input variable (trainable parameter or data).
    pub fn leaf(&self, value: Tensor) -> Var {
        let mut vals = self.values.borrow_mut();
        vals.push(value);
        Var(vals.len() - 1)
    }

    /// Record a constant. Identical to [`Tape::leaf`]; the caller simply
    /// never reads its gradient.
    pub fn constant(&self, value: Tensor) -> Var {
        self.leaf(value)
    }

    pub fn value(&self, v: Var) -> Tensor {
        self.values.borrow()[v.0].clone()
    }

    pub fn shape(&self, v: Var) -> Vec<usize> {
        self.values.borrow()[v.0].shape().to_vec()
    }

    pub fn len(&self) -> usize {
        self.values.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: Tensor, parents: Vec<usize>, backward: BackwardFn) -> Var {
        let out = self.leaf(value);
        self.records.borrow_mut().push(Record {
            out: out.0,
            parents,
            backward,
        });
        out
    }

    fn with<T>(&self, v: Var, f: impl FnOnce(&Tensor) -> T) -> T {
        f(&self.values.borrow()[v.0])
    }

    fn with2<T>(&self, a: Var, b: Var, f: impl FnOnce(&Tensor, &Tensor) -> T) -> T {
        let vals = self.values.borrow();
        f(&vals[a.0], &vals[b.0])
    }

    // ---- elementwise and linear ops -------------------------------------

    pub fn add(&self, a: Var, b: Var) -> Result<Var, TensorError> {
        let v = self.with2(a, b, |x, y| x.add(y))?;
        Ok(self.push(
            v,
            vec![a.0, b.0],
            Box::new(|g, _, _| vec![g.clone(), g.clone()]),
        ))
    }

    pub fn sub(&self, a: Var, b: Var) -> Result<Var, TensorError> {
        let v = self.with2(a, b, |x, y| x.sub(y))?;
        Ok(self.push(
            v,
            vec![a.0, b.0],
            Box::new(|g, _, _| vec![g.clone(), g.scale(-1.0)]),
        ))
    }

    pub fn hadamard(&self, a: Var, b: Var) -> Result<Var, TensorError> {
        let v = self.with2(a, b, |x, y| x.hadamard(y))?;
        Ok(self.push(
            v,
            vec![a.0, b.0],
            Box::new(|g, p, _| {
                vec![
                    g.hadamard(p[1]).expect("shape checked"),
                    g.hadamard(p[0]).expect("shape checked"),
                ]
            }),
        ))
    }

    pub fn scale(&self, a: Var, c: f64) -> Var {
        let v = self.with(a, |x| x.scale(c));
        self.push(v, vec![a.0], Box::new(move |g, _, _| vec![g.scale(c)]))
    }

    pub fn matmul(&self, a: Var, b: Var) -> Result<Var, TensorError> {
        let v = self.with2(a, b, |x, y| x.matmul(y))?;
        Ok(self.push(
            v,
            vec![a.0, b.0],
            Box::new(|g, p, _| {
                let ga = g.matmul(&p[1].transpose()).expect("shape checked");
                let gb = p[0].transpose().matmul(g).expect("shape checked");
                vec![ga, gb]
            }),
        ))
    }

    pub fn transpose(&self, a: Var) -> Var {
        let v = self.with(a, |x| x.transpose());
        self.push(v, vec![a.0], Box::new(|g, _, _| vec![g.transpose()]))
    }

    pub fn concat_rows(&self, parts: &[Var]) -> Result<Var, TensorError> {
        assert!(!parts.is_empty(), "concat_rows needs at least one part");
        let vals = self.values.borrow();
        let cols = vals[parts[0].0].cols();
        let mut data = Vec::new();
        let mut row_counts = Vec::new();
        for p in parts {
            let t = &vals[p.0];
            if t.cols() != cols {
                return Err(TensorError::ShapeMismatch {
                    op: "concat_rows",
                    left: vals[parts[0].0].shape().to_vec(),
                    right: t.shape().to_vec(),
                });
            }
            row_counts.push(t.rows());
            data.extend_from_slice(t.data());
        }
        drop(vals);
        let total: usize = row_counts.iter().sum();
        let out = Tensor::matrix(total, cols, data);
        Ok(self.push(
            out,
            parts.iter().map(|p| p.0).collect(),
            Box::new(move |g, _, _| {
                let cols = g.cols();
                let mut offset = 0;
                let mut grads = Vec::with_capacity(row_counts.len());
                for &r in &row_counts {
                    let slice = g.data()[offset * cols..(offset + r) * cols].to_vec();
                    grads.push(Tensor::matrix(r, cols, slice));
                    offset += r;
                }
                grads
            }),
        ))
    }

    /// Collapse rows: R x C -> 1 x C column totals.
    pub fn sum_rows(&self, a: Var) -> Var {
        let v = self.with(a, |x| {
            let (r, c) = (x.rows(), x.cols());
            let mut out = vec![0.0; c];
            for i in 0..r {
                for j in 0..c {
                    out[j] += x.at(i, j);
                }
            }
            Tensor::row_vector(out)
        });
        self.push(
            v,
            vec![a.0],
            Box::new(|g, p, _| {
                let (r, c) = (p[0].rows(), p[0].cols());
                let mut out = Tensor::zeros(vec![r, c]);
                for i in 0..r {
                    for j in 0..c {
                        out.set(i, j, g.at(0, j));
                    }
                }
                vec![out]
            }),
        )
    }

    /// R x C -> 1 x C column means.
    pub fn mean_rows(&self, a: Var) -> Var {
        let r = self.with(a, |x| x.rows());
        let s = self.sum_rows(a);
        self.scale(s, 1.0 / r as f64)
    }

    /// Per-row totals: R x C -> R x 1.
    pub fn row_sums(&self, a: Var) -> Var {
        let v = self.with(a, |x| {
            let data = (0..x.rows()).map(|i| x.row(i).iter().sum()).collect();
            Tensor::matrix(x.rows(), 1, data)
        });
        self.push(
            v,
            vec![a.0],
            Box::new(|g, p, _| {
                let (r, c) = (p[0].rows(), p[0].cols());
                let mut out = Tensor::zeros(vec![r, c]);
                for i in 0..r {
                    for j in 0..c {
                        out.set(i, j, g.at(i, 0));
                    }
                }
                vec![out]
            }),
        )
    }

    /// Column j as an R x 1 vector.
    pub fn slice_col(&self, a: Var, j: usize) -> Var {
        let v = self.with(a, |x| {
            let data = (0..x.rows()).map(|i| x.at(i, j)).collect();
            Tensor::matrix(x.rows(), 1, data)
        });
        self.push(
            v,
            vec![a.0],
            Box::new(move |g, p, _| {
                let mut out = Tensor::zeros(p[0].shape().to_vec());
                for i in 0..p[0].rows() {
                    out.set(i, j, g.at(i, 0));
                }
                vec![out]
            }),
        )
    }

    /// Main diagonal of a square matrix as an R x 1 vector.
    pub fn diag(&self, a: Var) -> Var {
        let v = self.with(a, |x| {
            assert_eq!(x.rows(), x.cols(), "diag requires a square matrix");
            let data = (0..x.rows()).map(|i| x.at(i, i)).collect();
            Tensor::matrix(x.rows(), 1, data)
        });
        self.push(
            v,
            vec![a.0],
            Box::new(|g, p, _| {
                let mut out = Tensor::zeros(p[0].shape().to_vec());
                for i in 0..p[0].rows() {
                    out.set(i, i, g.at(i, 0));
                }
                vec![out]
            }),
        )
    }

    /// Row-wise softmax with max-subtraction for stability.
    pub fn softmax_rows(&self, a: Var) -> Var {
        let v = self.with(a, |x| {
            let mut out = x.clone();
            for i in 0..x.rows() {
                let row = x.row(i);
                let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let exps: Vec<f64> = row.iter().map(|&v| (v - m).exp()).collect();
                let z: f64 = exps.iter().sum();
                for (j, e) in exps.iter().enumerate() {
                    out.set(i, j, e / z);
                }
            }
            out
        });
        self.push(
            v,
            vec![a.0],
            Box::new(|g, _, y| {
                let (r, c) = (y.rows(), y.cols());
                let mut out = Tensor::zeros(vec![r, c]);
                for i in 0..r {
                    let dot: f64 = (0..c).map(|j| g.at(i, j) * y.at(i, j)).sum();
                    for j in 0..c {
                        out.set(i, j, y.at(i, j) * (g.at(i, j) - dot));
                    }
                }
                vec![out]
            }),
        )
    }

    /// Row-wise stable log-sum-exp: R x C -> R x 1.
    pub fn logsumexp_rows(&self, a: Var) -> Var {
        let v = self.with(a, |x| {
            let data = (0..x.rows())
                .map(|i| {
                    let row = x.row(i);
                    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    m + row.iter().map(|&v| (v - m).exp()).sum::<f64>().ln()
                })
                .collect();
            Tensor::matrix(x.rows(), 1, data)
        });
        self.push(
            v,
            vec![a.0],
            Box::new(|g, p, _| {
                let x = p[0];
                let (r, c) = (x.rows(), x.cols());
                let mut out = Tensor::zeros(vec![r, c]);
                for i in 0..r {
                    let row = x.row(i);
                    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    let exps: Vec<f64> = row.iter().map(|&v| (v - m).exp()).collect();
                    let z: f64 = exps.iter().sum();
                    for j in 0..c {
                        out.set(i, j, g.at(i, 0) * exps[j] / z);
                    }
                }
                vec![out]
            }),
        )
    }

    pub fn leaky_relu(&self, a: Var, slope: f64) -> Var {
        let v = self.with(a, |x| x.map(|v| if v >= 0.0 { v } else { slope * v }));
        self.push(
            v,
            vec![a.0],
            Box::new(move |g, p, _| {
                vec![g
                    .checked_binary(p[0], "leaky_relu_bwd", |gv, xv| {
                        gv * if xv >= 0.0 { 1.0 } else { slope }
                    })
                    .expect("shape checked")]
            }),
        )
    }

    pub fn relu(&self, a: Var) -> Var {
        let v = self.with(a, |x| x.map(|v| v.max(0.0)));
        self.push(
            v,
            vec![a.0],
            Box::new(|g, p, _| {
                vec![g
                    .checked_binary(p[0], "relu_bwd", |gv, xv| if xv > 0.0 { gv } else { 0.0 })
                    .expect("shape checked")]
            }),
        )
    }

    pub fn tanh(&self, a: Var) -> Var {
        let v = self.with(a, |x| x.map(f64::tanh));
        self.push(
            v,
            vec![a.0],
            Box::new(|g, _, y| {
                vec![g
                    .checked_binary(y, "tanh_bwd", |gv, yv| gv * (1.0 - yv * yv))
                    .expect("shape checked")]
            }),
        )
    }

    /// Row-wise dot products of two R x C matrices: R x 1.
    pub fn rows_dot(&self, a: Var, b: Var) -> Result<Var, TensorError> {
        let v = self.with2(a, b, |x, y| -> Result<Tensor, TensorError> {
            if x.shape() != y.shape() {
                return Err(TensorError::ShapeMismatch {
                    op: "rows_dot",
                    left: x.shape().to_vec(),
                    right: y.shape().to_vec(),
                });
            }
            let data = (0..x.rows())
                .map(|i| x.row(i).iter().zip(y.row(i)).map(|(a, b)| a * b).sum())
                .collect();
            Ok(Tensor::matrix(x.rows(), 1, data))
        })?;
        Ok(self.push(
            v,
            vec![a.0, b.0],
            Box::new(|g, p, _| {
                let (x, y) = (p[0], p[1]);
                let (r, c) = (x.rows(), x.cols());
                let mut ga = Tensor::zeros(vec![r, c]);
                let mut gb = Tensor::zeros(vec![r, c]);
                for i in 0..r {
                    for j in 0..c {
                        ga.set(i, j, g.at(i, 0) * y.at(i, j));
                        gb.set(i, j, g.at(i, 0) * x.at(i, j));
                    }
                }
                vec![ga, gb]
            }),
        ))
    }

    /// Select rows by index (duplicates allowed); backward scatter-adds.
    pub fn gather_rows(&self, a: Var, indices: &[usize]) -> Var {
        let idx = indices.to_vec();
        let v = self.with(a, |x| {
            let c = x.cols();
            let mut data = Vec::with_capacity(idx.len() * c);
            for &i in &idx {
                data.extend_from_slice(x.row(i));
            }
            Tensor::matrix(idx.len(), c, data)
        });
        self.push(
            v,
            vec![a.0],
            Box::new(move |g, p, _| {
                let mut out = Tensor::zeros(p[0].shape().to_vec());
                let c = out.cols();
                for (k, &i) in idx.iter().enumerate() {
                    for j in 0..c {
                        let cur = out.at(i, j);
                        out.set(i, j, cur + g.at(k, j));
                    }
                }
                vec![out]
            }),
        )
    }

    /// L2-normalize each row; rows with norm <= eps become zero rows.
    pub fn normalize_rows(&self, a: Var, eps: f64) -> Var {
        let v = self.with(a, |x| {
            let mut out = x.clone();
            for i in 0..x.rows() {
                let n = x.row(i).iter().map(|v| v * v).sum::<f64>().sqrt();
                for j in 0..x.cols() {
                    out.set(i, j, if n <= eps { 0.0 } else { x.at(i, j) / n });
                }
            }
            out
        });
        self.push(
            v,
            vec![a.0],
            Box::new(move |g, p, y| {
                let x = p[0];
                let (r, c) = (x.rows(), x.cols());
                let mut out = Tensor::zeros(vec![r, c]);
                for i in 0..r {
                    let n = x.row(i).iter().map(|v| v * v).sum::<f64>().sqrt();
                    if n <= eps {
                        continue;
                    }
                    let gy: f64 = (0..c).map(|j| g.at(i, j) * y.at(i, j)).sum();
                    for j in 0..c {
                        out.set(i, j, (g.at(i, j) - gy * y.at(i, j)) / n);
                    }
                }
                vec![out]
            }),
        )
    }

    /// Scale row i of `a` by `v[i]` (`v` is R x 1).
    pub fn scale_rows(&self, a: Var, v: Var) -> Result<Var, TensorError> {
        let out = self.with2(a, v, |x, s| -> Result<Tensor, TensorError> {
            if s.rows() != x.rows() || s.cols() != 1 {
                return Err(TensorError::ShapeMismatch {
                    op: "scale_rows",
                    left: x.shape().to_vec(),
                    right: s.shape().to_vec(),
                });
            }
            let mut out = x.clone();
            for i in 0..x.rows() {
                for j in 0..x.cols() {
                    out.set(i, j, x.at(i, j) * s.at(i, 0));
                }
            }
            Ok(out)
        })?;
        Ok(self.push(
            out,
            vec![a.0, v.0],
            Box::new(|g, p, _| {
                let (x, s) = (p[0], p[1]);
                let (r, c) = (x.rows(), x.cols());
                let mut ga = Tensor::zeros(vec![r, c]);
                let mut gs = Tensor::zeros(vec![r, 1]);
                for i in 0..r {
                    let mut acc = 0.0;
                    for j in 0..c {
                        ga.set(i, j, g.at(i, j) * s.at(i, 0));
                        acc += g.at(i, j) * x.at(i, j);
                    }
                    gs.set(i, 0, acc);
                }
                vec![ga, gs]
            }),
        ))
    }

    /// Scale column j of `a` by `v[j]` (`v` is C x 1).
    pub fn scale_cols(&self, a: Var, v: Var) -> Result<Var, TensorError> {
        let out = self.with2(a, v, |x, s| -> Result<Tensor, TensorError> {
            if s.rows() != x.cols() || s.cols() != 1 {
                return Err(TensorError::ShapeMismatch {
                    op: "scale_cols",
                    left: x.shape().to_vec(),
                    right: s.shape().to_vec(),
                });
            }
            let mut out = x.clone();
            for i in 0..x.rows() {
                for j in 0..x.cols() {
                    out.set(i, j, x.at(i, j) * s.at(j, 0));
                }
            }
            Ok(out)
        })?;
        Ok(self.push(
            out,
            vec![a.0, v.0],
            Box::new(|g, p, _| {
                let (x, s) = (p[0], p[1]);
                let (r, c) = (x.rows(), x.cols());
                let mut ga = Tensor::zeros(vec![r, c]);
                let mut gs = Tensor::zeros(vec![c, 1]);
                for i in 0..r {
                    for j in 0..c {
                        ga.set(i, j, g.at(i, j) * s.at(j, 0));
                        let cur = gs.at(j, 0);
                        gs.set(j, 0, cur + g.at(i, j) * x.at(i, j));
                    }
                }
                vec![ga, gs]
            }),
        ))
    }

    /// Elementwise x^(-1/2); entries <= eps map to 0 with zero gradient.
    pub fn pow_neg_half(&self, a: Var, eps: f64) -> Var {
        let v = self.with(a, |x| {
            x.map(|v| if v <= eps { 0.0 } else { 1.0 / v.sqrt() })
        });
        self.push(
            v,
            vec![a.0],
            Box::new(move |g, p, _| {
                vec![g
                    .checked_binary(p[0], "pow_neg_half_bwd", |gv, xv| {
                        if xv <= eps {
                            0.0
                        } else {
                            gv * (-0.5) * xv.powf(-1.5)
                        }
                    })
                    .expect("shape checked")]
            }),
        )
    }

    /// Sum of squared entries as a 1 x 1 scalar.
    pub fn sum_squares(&self, a: Var) -> Var {
        let v = self.with(a, |x| Tensor::scalar(x.frobenius_sq()));
        self.push(
            v,
            vec![a.0],
            Box::new(|g, p, _| vec![p[0].scale(2.0 * g.item())]),
        )
    }

    /// Sum of all entries as a 1 x 1 scalar.
    pub fn sum_all(&self, a: Var) -> Var {
        let v = self.with(a, |x| Tensor::scalar(x.data().iter().sum()));
        self.push(
            v,
            vec![a.0],
            Box::new(|g, p, _| {
                let s = g.item();
                vec![p[0].map(|_| s)]
            }),
        )
    }

    /// Sparse matrix product `A x` with constant `A`.
    pub fn spmm(&self, a: Rc<SparseMatrix>, x: Var) -> Result<Var, TensorError> {
        let v = self.with(x, |xv| a.apply(xv))?;
        Ok(self.push(
            v,
            vec![x.0],
            Box::new(move |g, _, _| vec![a.apply_transpose(g).expect("shape checked")]),
        ))
    }

    /// Rotate consecutive value pairs of `values` as complex numbers by the
    /// phase angles stored at the even positions of `phases`.
    pub fn rotate_pairs(&self, values: Var, phases: Var) -> Result<Var, TensorError> {
        let v = self.with2(values, phases, |x, p| -> Result<Tensor, TensorError> {
            if x.shape() != p.shape() {
                return Err(TensorError::ShapeMismatch {
                    op: "rotate_pairs",
                    left: x.shape().to_vec(),
                    right: p.shape().to_vec(),
                });
            }
            assert!(x.cols() % 2 == 0, "rotate_pairs requires an even dimension");
            let mut out = x.clone();
            for i in 0..x.rows() {
                for k in 0..x.cols() / 2 {
                    let (a, b) = (x.at(i, 2 * k), x.at(i, 2 * k + 1));
                    let th = p.at(i, 2 * k);
                    out.set(i, 2 * k, a * th.cos() - b * th.sin());
                    out.set(i, 2 * k + 1, a * th.sin() + b * th.cos());
                }
            }
            Ok(out)
        })?;
        Ok(self.push(
            v,
            vec![values.0, phases.0],
            Box::new(|g, p, _| {
                let (x, ph) = (p[0], p[1]);
                let (r, c) = (x.rows(), x.cols());
                let mut gx = Tensor::zeros(vec![r, c]);
                let mut gp = Tensor::zeros(vec![r, c]);
                for i in 0..r {
                    for k in 0..c / 2 {
                        let (a, b) = (x.at(i, 2 * k), x.at(i, 2 * k + 1));
                        let th = ph.at(i, 2 * k);
                        let (g1, g2) = (g.at(i, 2 * k), g.at(i, 2 * k + 1));
                        gx.set(i, 2 * k, g1 * th.cos() + g2 * th.sin());
                        gx.set(i, 2 * k + 1, -g1 * th.sin() + g2 * th.cos());
                        gp.set(
                            i,
                            2 * k,
                            g1 * (-a * th.sin() - b * th.cos()) + g2 * (a * th.cos() - b * th.sin()),
                        );
                    }
                }
                vec![gx, gp]
            }),
        ))
    }

    // ---- backward pass ---------------------------------------------------

    /// Propagate gradients from a scalar `target` back to every variable.
    pub fn backward(&self, target: Var) -> Gradients {
        let values = self.values.borrow();
        let records = self.records.borrow();
        let mut grads: Vec<Option<Tensor>> = vec![None; values.len()];
        grads[target.0] = Some(values[target.0].map(|_| 1.0));
        for rec in records.iter().rev() {
            let upstream = match &grads[rec.out] {
                Some(g) => g.clone(),
                None => continue,
            };
            let parent_vals: Vec<&Tensor> = rec.parents.iter().map(|&p| &values[p]).collect();
            let contributions = (rec.backward)(&upstream, &parent_vals, &values[rec.out]);
            debug_assert_eq!(contributions.len(), rec.parents.len());
            for (&p, contrib) in rec.parents.iter().zip(contributions) {
                match &mut grads[p] {
                    Some(g) => *g = g.add(&contrib).expect("gradient shape"),
                    slot @ None => *slot = Some(contrib),
                }
            }
        }
        Gradients {
            shapes: values.iter().map(|t| t.shape().to_vec()).collect(),
            grads,
        }
    }
}

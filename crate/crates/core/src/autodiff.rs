//! Tape-based reverse-mode differentiation over 2-D `f64` tensors.
//!
//! Nodes are appended in evaluation order, so the tape is already a
//! topological order; `backward` walks it once in reverse. Subgradient
//! conventions: `abs'(0) = 0` and `relu'(0) = 0`.

use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::tensor::{gemm, gemm_strided, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Const,
    Param,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Tanh(Var),
    Relu(Var),
    Abs(Var),
    Square(Var),
    Sqrt(Var),
    Exp(Var),
    Sum(Var),
    Mean(Var),
    MeanRows(Var),
    SumCols(Var),
    Transpose(Var),
    ConcatCols(Vec<Var>),
    SliceCols(Var, usize, usize),
    LayerNorm { input: Var, inv_std: Vec<f64> },
    StraightThrough { to: Var },
    GatherRows(Var, Vec<usize>),
}

#[derive(Debug, Clone)]
struct Node {
    value: Tensor,
    op: Op,
}

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    param_leaves: Vec<Option<Var>>,
    nonfinite: Option<String>,
}

pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    param_leaves: Vec<Option<Var>>,
}

impl Gradients {
    pub fn wrt(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradient for every registered parameter; parameters the loss never
    /// touched get zeros.
    pub fn params(&self, store: &ParamStore) -> Vec<Tensor> {
        store
            .iter()
            .map(|(id, _, t)| {
                self.param_leaves
                    .get(id.0)
                    .copied()
                    .flatten()
                    .and_then(|v| self.grads[v.0].clone())
                    .unwrap_or_else(|| Tensor::zeros(t.shape()))
            })
            .collect()
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        if self.nonfinite.is_none() && !value.is_finite() {
            self.nonfinite = Some(format!("{} (node {})", op_name(&op), self.nodes.len()));
        }
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value.item()
    }

    /// First op that produced a NaN or infinity, if any.
    pub fn check_finite(&self) -> Result<()> {
        match &self.nonfinite {
            Some(what) => Err(Error::NonFinite(what.clone())),
            None => Ok(()),
        }
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Const)
    }

    /// Leaf bound to a registered parameter. Repeated calls return the same
    /// node so gradients accumulate in one place.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if self.param_leaves.len() <= id.0 {
            self.param_leaves.resize(id.0 + 1, None);
        }
        if let Some(v) = self.param_leaves[id.0] {
            return v;
        }
        let v = self.push(store.get(id).clone(), Op::Param);
        self.param_leaves[id.0] = Some(v);
        v
    }

    /// Copy of `v` with no gradient path.
    pub fn stop_grad(&mut self, v: Var) -> Var {
        let t = self.value(v).clone();
        self.constant(t)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (m, k) = self.value(a).dims2().expect("matmul lhs 2-D");
        let (k2, n) = self.value(b).dims2().expect("matmul rhs 2-D");
        assert_eq!(k, k2, "matmul inner dims {k} vs {k2}");
        let mut out = vec![0.0; m * n];
        gemm(self.value(a).data(), self.value(b).data(), m, k, n, &mut out);
        self.push(Tensor::matrix(m, n, out).unwrap(), Op::MatMul(a, b))
    }

    fn same_shape(&self, a: Var, b: Var, op: &str) {
        assert_eq!(
            self.value(a).shape(),
            self.value(b).shape(),
            "{op}: shape mismatch"
        );
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.same_shape(a, b, "add");
        let t = self.value(a).zip_map(self.value(b), |x, y| x + y);
        self.push(t, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.same_shape(a, b, "sub");
        let t = self.value(a).zip_map(self.value(b), |x, y| x - y);
        self.push(t, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.same_shape(a, b, "mul");
        let t = self.value(a).zip_map(self.value(b), |x, y| x * y);
        self.push(t, Op::Mul(a, b))
    }

    /// `a[i, j] + row[0, j]` for `a: [n, m]`, `row: [1, m]`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let (n, m) = self.value(a).dims2().expect("add_row lhs 2-D");
        assert_eq!(self.value(row).shape(), &[1, m], "add_row: row shape");
        let r = self.value(row).data().to_vec();
        let mut t = self.value(a).clone();
        for i in 0..n {
            for (x, b) in t.data_mut()[i * m..(i + 1) * m].iter_mut().zip(&r) {
                *x += b;
            }
        }
        self.push(t, Op::AddRow(a, row))
    }

    /// `a - row` broadcast over rows.
    pub fn sub_row(&mut self, a: Var, row: Var) -> Var {
        let neg = self.scale(row, -1.0);
        self.add_row(a, neg)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let t = self.value(a).map(|x| x * c);
        self.push(t, Op::Scale(a, c))
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let t = self.value(a).map(|x| x + c);
        self.push(t, Op::AddScalar(a))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let t = self.value(a).map(f64::tanh);
        self.push(t, Op::Tanh(a))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let t = self.value(a).map(|x| x.max(0.0));
        self.push(t, Op::Relu(a))
    }

    /// `max(a, 0)`; same op as `relu`, named for penalty terms.
    pub fn hinge(&mut self, a: Var) -> Var {
        self.relu(a)
    }

    pub fn abs(&mut self, a: Var) -> Var {
        let t = self.value(a).map(f64::abs);
        self.push(t, Op::Abs(a))
    }

    pub fn square(&mut self, a: Var) -> Var {
        let t = self.value(a).map(|x| x * x);
        self.push(t, Op::Square(a))
    }

    pub fn sqrt(&mut self, a: Var) -> Var {
        let t = self.value(a).map(f64::sqrt);
        self.push(t, Op::Sqrt(a))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let t = self.value(a).map(f64::exp);
        self.push(t, Op::Exp(a))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).sum();
        self.push(Tensor::scalar(s), Op::Sum(a))
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let s = t.sum() / t.len() as f64;
        self.push(Tensor::scalar(s), Op::Mean(a))
    }

    /// Column means: `[n, m] -> [1, m]`.
    pub fn mean_rows(&mut self, a: Var) -> Var {
        let (n, m) = self.value(a).dims2().expect("mean_rows 2-D");
        let mut out = vec![0.0; m];
        let d = self.value(a).data();
        for i in 0..n {
            for j in 0..m {
                out[j] += d[i * m + j];
            }
        }
        for o in out.iter_mut() {
            *o /= n as f64;
        }
        self.push(Tensor::matrix(1, m, out).unwrap(), Op::MeanRows(a))
    }

    /// Row sums: `[n, m] -> [n, 1]`.
    pub fn sum_cols(&mut self, a: Var) -> Var {
        let (n, m) = self.value(a).dims2().expect("sum_cols 2-D");
        let d = self.value(a).data();
        let out: Vec<f64> = (0..n).map(|i| d[i * m..(i + 1) * m].iter().sum()).collect();
        self.push(Tensor::matrix(n, 1, out).unwrap(), Op::SumCols(a))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let t = self.value(a).transpose();
        self.push(t, Op::Transpose(a))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty(), "concat_cols of nothing");
        let n = self.value(parts[0]).rows();
        let widths: Vec<usize> = parts
            .iter()
            .map(|p| {
                assert_eq!(self.value(*p).rows(), n, "concat_cols: row mismatch");
                self.value(*p).cols()
            })
            .collect();
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(n * total);
        for i in 0..n {
            for p in parts {
                out.extend_from_slice(self.value(*p).row(i));
            }
        }
        self.push(
            Tensor::matrix(n, total, out).unwrap(),
            Op::ConcatCols(parts.to_vec()),
        )
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Var {
        let (n, m) = self.value(a).dims2().expect("slice_cols 2-D");
        assert!(start <= end && end <= m, "slice_cols {start}..{end} of {m}");
        let d = self.value(a).data();
        let mut out = Vec::with_capacity(n * (end - start));
        for i in 0..n {
            out.extend_from_slice(&d[i * m + start..i * m + end]);
        }
        self.push(
            Tensor::matrix(n, end - start, out).unwrap(),
            Op::SliceCols(a, start, end),
        )
    }

    /// Per-row standardization without affine parameters.
    pub fn layer_norm(&mut self, a: Var, eps: f64) -> Var {
        let (n, m) = self.value(a).dims2().expect("layer_norm 2-D");
        let d = self.value(a).data();
        let mut out = vec![0.0; n * m];
        let mut inv_std = Vec::with_capacity(n);
        for i in 0..n {
            let r = &d[i * m..(i + 1) * m];
            let mu = r.iter().sum::<f64>() / m as f64;
            let var = r.iter().map(|x| (x - mu) * (x - mu)).sum::<f64>() / m as f64;
            let is = 1.0 / (var + eps).sqrt();
            for j in 0..m {
                out[i * m + j] = (r[j] - mu) * is;
            }
            inv_std.push(is);
        }
        self.push(
            Tensor::matrix(n, m, out).unwrap(),
            Op::LayerNorm { input: a, inv_std },
        )
    }

    /// Forward value of `value`, gradient routed entirely to `to`.
    pub fn straight_through(&mut self, value: Var, to: Var) -> Var {
        self.same_shape(value, to, "straight_through");
        let t = self.value(value).clone();
        self.push(t, Op::StraightThrough { to })
    }

    pub fn gather_rows(&mut self, a: Var, idx: &[usize]) -> Var {
        let (n, m) = self.value(a).dims2().expect("gather_rows 2-D");
        let mut out = Vec::with_capacity(idx.len() * m);
        for &i in idx {
            assert!(i < n, "gather_rows index {i} of {n}");
            out.extend_from_slice(self.value(a).row(i));
        }
        self.push(
            Tensor::matrix(idx.len(), m, out).unwrap(),
            Op::GatherRows(a, idx.to_vec()),
        )
    }

    /// `relu(x·W + b)`-style dense layer helper: `x·W + b`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Var {
        let h = self.matmul(x, w);
        self.add_row(h, b)
    }

    /// Reverse pass from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        self.check_finite()?;
        let shape = self.value(loss).shape();
        if self.value(loss).len() != 1 {
            return Err(Error::NonScalarLoss(shape.to_vec()));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(Tensor::full(shape, 1.0));

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            if !g.is_finite() {
                return Err(Error::NonFinite(format!(
                    "gradient of {} (node {idx})",
                    op_name(&self.nodes[idx].op)
                )));
            }
            let node = &self.nodes[idx];
            // Leaves keep their gradient for the caller.
            if matches!(node.op, Op::Const | Op::Param) {
                grads[idx] = Some(g);
                continue;
            }
            match &node.op {
                Op::Const | Op::Param => unreachable!(),
                Op::MatMul(a, b) => {
                    let (m, k) = self.value(*a).dims2()?;
                    let n = self.value(*b).cols();
                    // dA = dC · Bᵀ
                    let mut da = vec![0.0; m * k];
                    gemm_strided(
                        g.data(),
                        (n as isize, 1),
                        self.value(*b).data(),
                        (1, n as isize),
                        m,
                        n,
                        k,
                        0.0,
                        &mut da,
                    );
                    // dB = Aᵀ · dC
                    let mut db = vec![0.0; k * n];
                    gemm_strided(
                        self.value(*a).data(),
                        (1, k as isize),
                        g.data(),
                        (n as isize, 1),
                        k,
                        m,
                        n,
                        0.0,
                        &mut db,
                    );
                    accumulate(&mut grads, *a, Tensor::matrix(m, k, da)?);
                    accumulate(&mut grads, *b, Tensor::matrix(k, n, db)?);
                }
                Op::Add(a, b) => {
                    accumulate(&mut grads, *a, g.clone());
                    accumulate(&mut grads, *b, g);
                }
                Op::Sub(a, b) => {
                    accumulate(&mut grads, *b, g.map(|x| -x));
                    accumulate(&mut grads, *a, g);
                }
                Op::Mul(a, b) => {
                    let ga = g.zip_map(self.value(*b), |x, y| x * y);
                    let gb = g.zip_map(self.value(*a), |x, y| x * y);
                    accumulate(&mut grads, *a, ga);
                    accumulate(&mut grads, *b, gb);
                }
                Op::AddRow(a, row) => {
                    let (n, m) = g.dims2()?;
                    let mut gr = vec![0.0; m];
                    for i in 0..n {
                        for (acc, x) in gr.iter_mut().zip(g.row(i)) {
                            *acc += x;
                        }
                    }
                    accumulate(&mut grads, *row, Tensor::matrix(1, m, gr)?);
                    accumulate(&mut grads, *a, g);
                }
                Op::Scale(a, c) => {
                    let c = *c;
                    accumulate(&mut grads, *a, g.map(|x| x * c));
                }
                Op::AddScalar(a) => accumulate(&mut grads, *a, g),
                Op::Tanh(a) => {
                    let ga = g.zip_map(&node.value, |x, y| x * (1.0 - y * y));
                    accumulate(&mut grads, *a, ga);
                }
                Op::Relu(a) => {
                    let ga = g.zip_map(self.value(*a), |x, v| if v > 0.0 { x } else { 0.0 });
                    accumulate(&mut grads, *a, ga);
                }
                Op::Abs(a) => {
                    let ga = g.zip_map(self.value(*a), |x, v| x * sign0(v));
                    accumulate(&mut grads, *a, ga);
                }
                Op::Square(a) => {
                    let ga = g.zip_map(self.value(*a), |x, v| 2.0 * v * x);
                    accumulate(&mut grads, *a, ga);
                }
                Op::Sqrt(a) => {
                    let ga = g.zip_map(&node.value, |x, y| x / (2.0 * y));
                    accumulate(&mut grads, *a, ga);
                }
                Op::Exp(a) => {
                    let ga = g.zip_map(&node.value, |x, y| x * y);
                    accumulate(&mut grads, *a, ga);
                }
                Op::Sum(a) => {
                    let s = g.item();
                    let ga = Tensor::full(self.value(*a).shape(), s);
                    accumulate(&mut grads, *a, ga);
                }
                Op::Mean(a) => {
                    let n = self.value(*a).len() as f64;
                    let ga = Tensor::full(self.value(*a).shape(), g.item() / n);
                    accumulate(&mut grads, *a, ga);
                }
                Op::MeanRows(a) => {
                    let (n, m) = self.value(*a).dims2()?;
                    let mut ga = vec![0.0; n * m];
                    for i in 0..n {
                        for j in 0..m {
                            ga[i * m + j] = g.data()[j] / n as f64;
                        }
                    }
                    accumulate(&mut grads, *a, Tensor::matrix(n, m, ga)?);
                }
                Op::SumCols(a) => {
                    let (n, m) = self.value(*a).dims2()?;
                    let mut ga = vec![0.0; n * m];
                    for i in 0..n {
                        for j in 0..m {
                            ga[i * m + j] = g.data()[i];
                        }
                    }
                    accumulate(&mut grads, *a, Tensor::matrix(n, m, ga)?);
                }
                Op::Transpose(a) => accumulate(&mut grads, *a, g.transpose()),
                Op::ConcatCols(parts) => {
                    let (n, total) = g.dims2()?;
                    let mut offset = 0;
                    for p in parts {
                        let w = self.value(*p).cols();
                        let mut gp = Vec::with_capacity(n * w);
                        for i in 0..n {
                            gp.extend_from_slice(&g.data()[i * total + offset..i * total + offset + w]);
                        }
                        accumulate(&mut grads, *p, Tensor::matrix(n, w, gp)?);
                        offset += w;
                    }
                }
                Op::SliceCols(a, start, end) => {
                    let (n, m) = self.value(*a).dims2()?;
                    let w = end - start;
                    let mut ga = vec![0.0; n * m];
                    for i in 0..n {
                        ga[i * m + start..i * m + end].copy_from_slice(&g.data()[i * w..(i + 1) * w]);
                    }
                    accumulate(&mut grads, *a, Tensor::matrix(n, m, ga)?);
                }
                Op::LayerNorm { input, inv_std } => {
                    let (n, m) = g.dims2()?;
                    let y = node.value.data();
                    let mut ga = vec![0.0; n * m];
                    for i in 0..n {
                        let gy = &g.data()[i * m..(i + 1) * m];
                        let yr = &y[i * m..(i + 1) * m];
                        let mean_g = gy.iter().sum::<f64>() / m as f64;
                        let mean_gy = gy.iter().zip(yr).map(|(a, b)| a * b).sum::<f64>() / m as f64;
                        for j in 0..m {
                            ga[i * m + j] = inv_std[i] * (gy[j] - mean_g - yr[j] * mean_gy);
                        }
                    }
                    accumulate(&mut grads, *input, Tensor::matrix(n, m, ga)?);
                }
                Op::StraightThrough { to } => accumulate(&mut grads, *to, g),
                Op::GatherRows(a, idx) => {
                    let (n, m) = self.value(*a).dims2()?;
                    let mut ga = vec![0.0; n * m];
                    for (r, &src) in idx.iter().enumerate() {
                        for j in 0..m {
                            ga[src * m + j] += g.data()[r * m + j];
                        }
                    }
                    accumulate(&mut grads, *a, Tensor::matrix(n, m, ga)?);
                }
            }
        }
        Ok(Gradients {
            grads,
            param_leaves: self.param_leaves.clone(),
        })
    }

    /// `∂loss/∂p` for every parameter in `store` (zeros where unreached).
    pub fn grad(&self, loss: Var, store: &ParamStore) -> Result<Vec<Tensor>> {
        Ok(self.backward(loss)?.params(store))
    }
}

#[inline]
pub(crate) fn sign0(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

fn accumulate(grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
    match &mut grads[v.0] {
        Some(acc) => acc.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

fn op_name(op: &Op) -> &'static str {
    match op {
        Op::Const => "const",
        Op::Param => "param",
        Op::MatMul(..) => "matmul",
        Op::Add(..) => "add",
        Op::Sub(..) => "sub",
        Op::Mul(..) => "mul",
        Op::AddRow(..) => "add_row",
        Op::Scale(..) => "scale",
        Op::AddScalar(..) => "add_scalar",
        Op::Tanh(..) => "tanh",
        Op::Relu(..) => "relu",
        Op::Abs(..) => "abs",
        Op::Square(..) => "square",
        Op::Sqrt(..) => "sqrt",
        Op::Exp(..) => "exp",
        Op::Sum(..) => "sum",
        Op::Mean(..) => "mean",
        Op::MeanRows(..) => "mean_rows",
        Op::SumCols(..) => "sum_cols",
        Op::Transpose(..) => "transpose",
        Op::ConcatCols(..) => "concat_cols",
        Op::SliceCols(..) => "slice_cols",
        Op::LayerNorm { .. } => "layer_norm",
        Op::StraightThrough { .. } => "straight_through",
        Op::GatherRows(..) => "gather_rows",
    }
}

/// Central finite-difference gradient of `f` at `x`.
pub fn finite_diff(f: impl Fn(&Tensor) -> f64, x: &Tensor, h: f64) -> Tensor {
    let mut g = Tensor::zeros(x.shape());
    let mut probe = x.clone();
    for i in 0..x.len() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + h;
        let up = f(&probe);
        probe.data_mut()[i] = orig - h;
        let down = f(&probe);
        probe.data_mut()[i] = orig;
        g.data_mut()[i] = (up - down) / (2.0 * h);
    }
    g
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{Dist, Rng};

    fn rand(rng: &mut Rng, r: usize, c: usize) -> Tensor {
        rng.draw(Dist::Normal, &[r, c])
    }

    /// Checks `d/dx sum(w ⊙ op(x))` against central differences at ten
    /// random points, with a random weighting `w` so every output entry
    /// contributes a distinct cotangent.
    fn check_unary(name: &str, op: impl Fn(&mut Graph, Var) -> Var, shape: (usize, usize), shift: f64) {
        let mut rng = Rng::new(42, name);
        for _ in 0..10 {
            let x0 = rand(&mut rng, shape.0, shape.1).map(|v| v + shift);
            let probe = {
                let mut g = Graph::new();
                let x = g.constant(x0.clone());
                let y = op(&mut g, x);
                g.value(y).shape().to_vec()
            };
            let w = rng.draw(Dist::Normal, &probe);
            let eval = |x: &Tensor| {
                let mut g = Graph::new();
                let xv = g.constant(x.clone());
                let y = op(&mut g, xv);
                g.value(y).data().iter().zip(w.data()).map(|(a, b)| a * b).sum::<f64>()
            };
            let mut g = Graph::new();
            let xv = g.constant(x0.clone());
            let y = op(&mut g, xv);
            let wv = g.constant(w.clone());
            let yw = g.mul(y, wv);
            let l = g.sum(yw);
            let grads = g.backward(l).unwrap();
            let analytic = grads.wrt(xv).unwrap();
            let numeric = finite_diff(eval, &x0, 1e-5);
            for (a, n) in analytic.data().iter().zip(numeric.data()) {
                let denom = a.abs().max(n.abs()).max(1e-6);
                assert!((a - n).abs() / denom < 1e-4, "{name}: analytic {a} numeric {n}");
            }
        }
    }

    #[test]
    fn square_derivative_at_three() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::scalar(3.0));
        let y = g.square(x);
        let l = g.sum(y);
        let grads = g.backward(l).unwrap();
        assert_eq!(grads.wrt(x).unwrap().item(), 6.0);
    }

    #[test]
    fn l1_subgradient_is_zero_at_zero() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::matrix(1, 3, vec![1.0, -2.0, 0.0]).unwrap());
        let a = g.abs(x);
        let l = g.sum(a);
        let grads = g.backward(l).unwrap();
        assert_eq!(grads.wrt(x).unwrap().data(), &[1.0, -1.0, 0.0]);
    }

    #[test]
    fn hinge_gradient_is_zero_at_kink() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::matrix(1, 3, vec![0.5, 0.0, -0.5]).unwrap());
        let h = g.hinge(x);
        let l = g.sum(h);
        let grads = g.backward(l).unwrap();
        assert_eq!(grads.wrt(x).unwrap().data(), &[1.0, 0.0, 0.0]);
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::zeros(&[2, 2]));
        assert!(matches!(g.backward(x), Err(Error::NonScalarLoss(_))));
    }

    #[test]
    fn nan_is_reported() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::scalar(-1.0));
        let s = g.sqrt(x);
        let l = g.sum(s);
        assert!(matches!(g.backward(l), Err(Error::NonFinite(_))));
    }

    #[test]
    fn unreached_params_get_zero_gradient() {
        let mut store = ParamStore::new();
        let a = store.add("a", Tensor::scalar(2.0));
        let _b = store.add("b", Tensor::zeros(&[2, 3]));
        let mut g = Graph::new();
        let av = g.param(&store, a);
        let l = g.square(av);
        let grads = g.grad(l, &store).unwrap();
        assert_eq!(grads[0].item(), 4.0);
        assert_eq!(grads[1], Tensor::zeros(&[2, 3]));
    }

    #[test]
    fn linearity_of_backward() {
        let mut rng = Rng::new(9, "lin");
        let x0 = rand(&mut rng, 3, 4);
        let grad_of = |which: u8| {
            let mut g = Graph::new();
            let x = g.constant(x0.clone());
            let t = g.tanh(x);
            let l1 = g.mean(t);
            let s = g.square(x);
            let l2 = g.sum(s);
            let l = match which {
                0 => l1,
                1 => l2,
                _ => g.add(l1, l2),
            };
            g.backward(l).unwrap().wrt(x).unwrap().clone()
        };
        let sum = grad_of(0).zip_map(&grad_of(1), |a, b| a + b);
        let joint = grad_of(2);
        for (a, b) in sum.data().iter().zip(joint.data()) {
            assert!((a - b).abs() <= 1e-15 * a.abs().max(1.0));
        }
    }

    #[test]
    fn finite_difference_elementwise_ops() {
        check_unary("tanh", |g, x| g.tanh(x), (3, 4), 0.0);
        check_unary("relu", |g, x| g.relu(x), (3, 4), 0.0);
        check_unary("abs", |g, x| g.abs(x), (3, 4), 0.0);
        check_unary("square", |g, x| g.square(x), (3, 4), 0.0);
        check_unary("sqrt", |g, x| g.sqrt(x), (3, 4), 5.0);
        check_unary("exp", |g, x| g.exp(x), (3, 4), 0.0);
        check_unary("scale", |g, x| g.scale(x, -1.7), (3, 4), 0.0);
        check_unary("add_scalar", |g, x| g.add_scalar(x, 0.3), (3, 4), 0.0);
    }

    #[test]
    fn finite_difference_reductions_and_layout() {
        check_unary("sum", |g, x| g.sum(x), (3, 4), 0.0);
        check_unary("mean", |g, x| g.mean(x), (3, 4), 0.0);
        check_unary("mean_rows", |g, x| g.mean_rows(x), (5, 3), 0.0);
        check_unary("sum_cols", |g, x| g.sum_cols(x), (5, 3), 0.0);
        check_unary("transpose", |g, x| g.transpose(x), (2, 5), 0.0);
        check_unary("slice_cols", |g, x| g.slice_cols(x, 1, 3), (4, 5), 0.0);
        check_unary("layer_norm", |g, x| g.layer_norm(x, 1e-5), (4, 6), 0.0);
        check_unary("gather_rows", |g, x| g.gather_rows(x, &[2, 0, 2, 1]), (3, 4), 0.0);
        check_unary(
            "concat_cols",
            |g, x| {
                let t = g.tanh(x);
                g.concat_cols(&[x, t, x])
            },
            (3, 2),
            0.0,
        );
    }

    #[test]
    fn finite_difference_binary_ops() {
        let mut rng = Rng::new(1, "bin");
        let other = rand(&mut rng, 4, 3);
        let row = rand(&mut rng, 1, 3);
        let right = rand(&mut rng, 3, 5);
        let o = other.clone();
        check_unary("add", move |g, x| { let c = g.constant(o.clone()); g.add(x, c) }, (4, 3), 0.0);
        let o = other.clone();
        check_unary("sub_lhs", move |g, x| { let c = g.constant(o.clone()); g.sub(x, c) }, (4, 3), 0.0);
        let o = other.clone();
        check_unary("sub_rhs", move |g, x| { let c = g.constant(o.clone()); g.sub(c, x) }, (4, 3), 0.0);
        let o = other.clone();
        check_unary("mul", move |g, x| { let c = g.constant(o.clone()); g.mul(x, c) }, (4, 3), 0.0);
        check_unary("mul_self", |g, x| g.mul(x, x), (4, 3), 0.0);
        let r = row.clone();
        check_unary("add_row_lhs", move |g, x| { let c = g.constant(r.clone()); g.add_row(x, c) }, (4, 3), 0.0);
        let o = other.clone();
        check_unary("add_row_rhs", move |g, x| { let c = g.constant(o.clone()); g.add_row(c, x) }, (1, 3), 0.0);
        let rt = right.clone();
        check_unary("matmul_lhs", move |g, x| { let c = g.constant(rt.clone()); g.matmul(x, c) }, (4, 3), 0.0);
        let o = other.clone();
        check_unary("matmul_rhs", move |g, x| { let c = g.constant(o.clone()); g.matmul(c, x) }, (3, 5), 0.0);
        check_unary("gram", |g, x| { let t = g.transpose(x); g.matmul(t, x) }, (4, 3), 0.0);
    }

    #[test]
    fn straight_through_routes_gradient() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::matrix(1, 2, vec![5.0, 6.0]).unwrap());
        let b = g.constant(Tensor::matrix(1, 2, vec![1.0, 2.0]).unwrap());
        let st = g.straight_through(a, b);
        assert_eq!(g.value(st).data(), &[5.0, 6.0]);
        let s = g.square(st);
        let l = g.sum(s);
        let grads = g.backward(l).unwrap();
        assert_eq!(grads.wrt(b).unwrap().data(), &[10.0, 12.0]);
        assert!(grads.wrt(a).is_none());
    }
}

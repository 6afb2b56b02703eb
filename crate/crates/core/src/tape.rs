//! Reverse-mode differentiation over dense `f64` matrices.
//!
//! Every operation evaluates eagerly and records itself on a [`Tape`].
//! Calling [`Tape::backward`] on a `1 × 1` node walks the record in reverse
//! and returns the gradient of that scalar with respect to every node that
//! depends on a [`Tape::param`] leaf. Leaves created with [`Tape::constant`]
//! never receive gradients, and neither does anything computed only from
//! constants, so forward-only use costs little more than plain evaluation.
//!
//! Vectors are represented as `1 × d` rows or `n × 1` columns; there is no
//! implicit broadcasting beyond the explicit `*_row` / `*_col` operations.
//!
//! ```
//! use landmark_match::tape::Tape;
//! use ndarray::array;
//!
//! let mut t = Tape::new();
//! let w = t.param(array![[1.0, 2.0], [3.0, 4.0]]);
//! let x = t.constant(array![[1.0, 1.0]]);
//! let y = t.matmul(x, w); // [4, 6]
//! let loss = t.sum(y);
//! let grads = t.backward(loss);
//! assert_eq!(t.scalar(loss), 10.0);
//! assert_eq!(grads.get(w).unwrap(), &array![[1.0, 1.0], [1.0, 1.0]]);
//! ```

use ndarray::{s, Array2, Axis, Zip};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulT(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    AddCol(Var, Var),
    MulRow(Var, Var),
    Scale(Var, f64),
    Offset(Var),
    Relu(Var),
    Tanh(Var),
    Exp(Var),
    SoftmaxRows(Var),
    LayerNormRows { x: Var, inv_std: Vec<f64> },
    L2NormalizeRows { x: Var, norms: Vec<f64> },
    MeanRows(Var),
    Sum(Var),
    LogSumExpRows(Var),
    LogSumExpCols(Var),
    SliceCols(Var, usize, usize),
    ConcatCols(Vec<Var>),
    RepeatRows(Var),
}

struct Node {
    value: Array2<f64>,
    op: Op,
    tracked: bool,
}

/// Recorded computation.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients produced by [`Tape::backward`].
pub struct Gradients {
    grads: Vec<Option<Array2<f64>>>,
}

impl Gradients {
    /// Gradient for `v`, or `None` when `v` does not influence the root or is
    /// not tracked.
    pub fn get(&self, v: Var) -> Option<&Array2<f64>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradient for `v`, zero-filled to `shape` when absent.
    pub fn get_or_zeros(&self, v: Var, shape: (usize, usize)) -> Array2<f64> {
        self.get(v).cloned().unwrap_or_else(|| Array2::zeros(shape))
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Differentiable leaf.
    pub fn param(&mut self, value: Array2<f64>) -> Var {
        self.push_raw(value, Op::Leaf, true)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, value: Array2<f64>) -> Var {
        self.push_raw(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Array2<f64> {
        &self.nodes[v.0].value
    }

    /// Value of a `1 × 1` node.
    pub fn scalar(&self, v: Var) -> f64 {
        let val = self.value(v);
        debug_assert_eq!(val.dim(), (1, 1), "scalar() on non-scalar node");
        val[[0, 0]]
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.value(v).dim()
    }

    fn tracked(&self, v: Var) -> bool {
        self.nodes[v.0].tracked
    }

    fn push_raw(&mut self, value: Array2<f64>, op: Op, tracked: bool) -> Var {
        self.nodes.push(Node { value, op, tracked });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, value: Array2<f64>, op: Op, inputs: &[Var]) -> Var {
        let tracked = inputs.iter().any(|&v| self.tracked(v));
        self.push_raw(value, op, tracked)
    }

    /// `a · b`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).dot(self.value(b));
        self.push(value, Op::MatMul(a, b), &[a, b])
    }

    /// `a · bᵀ`.
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).dot(&self.value(b).t());
        self.push(value, Op::MatMulT(a, b), &[a, b])
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let value = self.value(a).t().to_owned();
        self.push(value, Op::Transpose(a), &[a])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a) + self.value(b);
        self.push(value, Op::Add(a, b), &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a) - self.value(b);
        self.push(value, Op::Sub(a, b), &[a, b])
    }

    /// Element-wise product of equally shaped nodes.
    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a) * self.value(b);
        self.push(value, Op::Mul(a, b), &[a, b])
    }

    /// `m + r` where `r` is a `1 × d` row added to every row of `m`.
    pub fn add_row(&mut self, m: Var, r: Var) -> Var {
        let value = self.value(m) + self.value(r);
        self.push(value, Op::AddRow(m, r), &[m, r])
    }

    /// `m + c` where `c` is an `n × 1` column added to every column of `m`.
    pub fn add_col(&mut self, m: Var, c: Var) -> Var {
        let value = self.value(m) + self.value(c);
        self.push(value, Op::AddCol(m, c), &[m, c])
    }

    /// `m ⊙ r` with a `1 × d` row broadcast over rows.
    pub fn mul_row(&mut self, m: Var, r: Var) -> Var {
        let value = self.value(m) * self.value(r);
        self.push(value, Op::MulRow(m, r), &[m, r])
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let value = self.value(a) * c;
        self.push(value, Op::Scale(a, c), &[a])
    }

    /// `a + c` for a scalar constant `c`.
    pub fn offset(&mut self, a: Var, c: f64) -> Var {
        let value = self.value(a) + c;
        self.push(value, Op::Offset(a), &[a])
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(|x| x.max(0.0));
        self.push(value, Op::Relu(a), &[a])
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(f64::tanh);
        self.push(value, Op::Tanh(a), &[a])
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(f64::exp);
        self.push(value, Op::Exp(a), &[a])
    }

    /// Row-wise softmax.
    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let mut value = self.value(a).clone();
        for mut row in value.rows_mut() {
            let max = row.fold(f64::NEG_INFINITY, |m, &x| m.max(x));
            row.mapv_inplace(|x| (x - max).exp());
            let sum = row.sum();
            row /= sum;
        }
        self.push(value, Op::SoftmaxRows(a), &[a])
    }

    /// Row-wise standardisation `(x - mean) / sqrt(var + eps)`, no affine part.
    pub fn layer_norm_rows(&mut self, a: Var, eps: f64) -> Var {
        let mut value = self.value(a).clone();
        let d = value.ncols() as f64;
        let mut inv_std = Vec::with_capacity(value.nrows());
        for mut row in value.rows_mut() {
            let mean = row.sum() / d;
            row.mapv_inplace(|x| x - mean);
            let var = row.iter().map(|x| x * x).sum::<f64>() / d;
            let inv = 1.0 / (var + eps).sqrt();
            row *= inv;
            inv_std.push(inv);
        }
        self.push(value, Op::LayerNormRows { x: a, inv_std }, &[a])
    }

    /// Row-wise L2 normalisation; an all-zero row stays zero.
    pub fn l2_normalize_rows(&mut self, a: Var) -> Var {
        let mut value = self.value(a).clone();
        let mut norms = Vec::with_capacity(value.nrows());
        for mut row in value.rows_mut() {
            let n = row.dot(&row).sqrt();
            if n > 0.0 {
                row /= n;
            }
            norms.push(n);
        }
        self.push(value, Op::L2NormalizeRows { x: a, norms }, &[a])
    }

    /// Mean over rows, `n × d → 1 × d`.
    pub fn mean_rows(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let value = v.sum_axis(Axis(0)).insert_axis(Axis(0)) / v.nrows() as f64;
        self.push(value, Op::MeanRows(a), &[a])
    }

    /// Sum of all entries, `→ 1 × 1`.
    pub fn sum(&mut self, a: Var) -> Var {
        let value = Array2::from_elem((1, 1), self.value(a).sum());
        self.push(value, Op::Sum(a), &[a])
    }

    /// Log-sum-exp along each row, `n × m → n × 1`.
    pub fn logsumexp_rows(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let mut out = Array2::zeros((v.nrows(), 1));
        for (i, row) in v.rows().into_iter().enumerate() {
            out[[i, 0]] = lse(row.iter().copied());
        }
        self.push(out, Op::LogSumExpRows(a), &[a])
    }

    /// Log-sum-exp down each column, `n × m → 1 × m`.
    pub fn logsumexp_cols(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let mut out = Array2::zeros((1, v.ncols()));
        for (j, col) in v.columns().into_iter().enumerate() {
            out[[0, j]] = lse(col.iter().copied());
        }
        self.push(out, Op::LogSumExpCols(a), &[a])
    }

    /// Columns `start..end`.
    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Var {
        let value = self.value(a).slice(s![.., start..end]).to_owned();
        self.push(value, Op::SliceCols(a, start, end), &[a])
    }

    /// Horizontal concatenation of nodes with equal row counts.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let views: Vec<_> = parts.iter().map(|&p| self.value(p).view()).collect();
        let value = ndarray::concatenate(Axis(1), &views).expect("concat_cols: row mismatch");
        self.push(value, Op::ConcatCols(parts.to_vec()), parts)
    }

    /// Stack a `1 × d` row `n` times.
    pub fn repeat_rows(&mut self, r: Var, n: usize) -> Var {
        let row = self.value(r);
        debug_assert_eq!(row.nrows(), 1);
        let value = row.broadcast((n, row.ncols())).unwrap().to_owned();
        self.push(value, Op::RepeatRows(r), &[r])
    }

    /// Gradients of the `1 × 1` node `root` with respect to every tracked node.
    pub fn backward(&self, root: Var) -> Gradients {
        assert_eq!(self.shape(root), (1, 1), "backward root must be scalar");
        let n = root.0 + 1;
        let mut grads: Vec<Option<Array2<f64>>> = vec![None; self.nodes.len()];
        grads[root.0] = Some(Array2::ones((1, 1)));

        for idx in (0..n).rev() {
            let node = &self.nodes[idx];
            if !node.tracked || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(node, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Gradients { grads }
    }

    fn propagate(&self, node: &Node, g: &Array2<f64>, grads: &mut [Option<Array2<f64>>]) {
        let y = &node.value;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                if self.tracked(*a) {
                    accumulate(grads, *a, g.dot(&self.value(*b).t()));
                }
                if self.tracked(*b) {
                    accumulate(grads, *b, self.value(*a).t().dot(g));
                }
            }
            Op::MatMulT(a, b) => {
                if self.tracked(*a) {
                    accumulate(grads, *a, g.dot(self.value(*b)));
                }
                if self.tracked(*b) {
                    accumulate(grads, *b, g.t().dot(self.value(*a)));
                }
            }
            Op::Transpose(a) => self.acc(grads, *a, || g.t().to_owned()),
            Op::Add(a, b) => {
                self.acc(grads, *a, || g.clone());
                self.acc(grads, *b, || g.clone());
            }
            Op::Sub(a, b) => {
                self.acc(grads, *a, || g.clone());
                self.acc(grads, *b, || -g);
            }
            Op::Mul(a, b) => {
                self.acc(grads, *a, || g * self.value(*b));
                self.acc(grads, *b, || g * self.value(*a));
            }
            Op::AddRow(m, r) => {
                self.acc(grads, *m, || g.clone());
                self.acc(grads, *r, || g.sum_axis(Axis(0)).insert_axis(Axis(0)));
            }
            Op::AddCol(m, c) => {
                self.acc(grads, *m, || g.clone());
                self.acc(grads, *c, || g.sum_axis(Axis(1)).insert_axis(Axis(1)));
            }
            Op::MulRow(m, r) => {
                self.acc(grads, *m, || g * self.value(*r));
                self.acc(grads, *r, || {
                    (g * self.value(*m)).sum_axis(Axis(0)).insert_axis(Axis(0))
                });
            }
            Op::Scale(a, c) => self.acc(grads, *a, || g * *c),
            Op::Offset(a) => self.acc(grads, *a, || g.clone()),
            Op::Relu(a) => self.acc(grads, *a, || {
                let mut out = g.clone();
                Zip::from(&mut out).and(y).for_each(|o, &yv| {
                    if yv <= 0.0 {
                        *o = 0.0;
                    }
                });
                out
            }),
            Op::Tanh(a) => self.acc(grads, *a, || {
                let mut out = g.clone();
                Zip::from(&mut out).and(y).for_each(|o, &yv| *o *= 1.0 - yv * yv);
                out
            }),
            Op::Exp(a) => self.acc(grads, *a, || g * y),
            Op::SoftmaxRows(a) => self.acc(grads, *a, || {
                let mut out = g * y;
                for (mut row, yrow) in out.rows_mut().into_iter().zip(y.rows()) {
                    let dot = row.sum();
                    Zip::from(&mut row).and(&yrow).for_each(|o, &yv| *o -= yv * dot);
                }
                out
            }),
            Op::LayerNormRows { x, inv_std } => self.acc(grads, *x, || {
                let d = y.ncols() as f64;
                let mut out = g.clone();
                for (i, mut row) in out.rows_mut().into_iter().enumerate() {
                    let yrow = y.row(i);
                    let sum_g = row.sum();
                    let sum_gy = row.dot(&yrow);
                    let inv = inv_std[i];
                    Zip::from(&mut row).and(&yrow).for_each(|o, &yv| {
                        *o = inv * (*o - sum_g / d - yv * sum_gy / d);
                    });
                }
                out
            }),
            Op::L2NormalizeRows { x, norms } => self.acc(grads, *x, || {
                let mut out = g.clone();
                for (i, mut row) in out.rows_mut().into_iter().enumerate() {
                    let n = norms[i];
                    if n > 0.0 {
                        let yrow = y.row(i);
                        let dot = row.dot(&yrow);
                        Zip::from(&mut row).and(&yrow).for_each(|o, &yv| *o = (*o - yv * dot) / n);
                    } else {
                        row.fill(0.0);
                    }
                }
                out
            }),
            Op::MeanRows(a) => self.acc(grads, *a, || {
                let rows = self.value(*a).nrows();
                let row = g / rows as f64;
                row.broadcast((rows, row.ncols())).unwrap().to_owned()
            }),
            Op::Sum(a) => self.acc(grads, *a, || {
                Array2::from_elem(self.shape(*a), g[[0, 0]])
            }),
            Op::LogSumExpRows(a) => self.acc(grads, *a, || {
                let x = self.value(*a);
                let mut out = x.clone();
                for (i, mut row) in out.rows_mut().into_iter().enumerate() {
                    let (lse_i, gi) = (y[[i, 0]], g[[i, 0]]);
                    row.mapv_inplace(|v| gi * (v - lse_i).exp());
                }
                out
            }),
            Op::LogSumExpCols(a) => self.acc(grads, *a, || {
                let x = self.value(*a);
                let mut out = x.clone();
                for (j, mut col) in out.columns_mut().into_iter().enumerate() {
                    let (lse_j, gj) = (y[[0, j]], g[[0, j]]);
                    col.mapv_inplace(|v| gj * (v - lse_j).exp());
                }
                out
            }),
            Op::SliceCols(a, start, end) => self.acc(grads, *a, || {
                let mut out = Array2::zeros(self.shape(*a));
                out.slice_mut(s![.., *start..*end]).assign(g);
                out
            }),
            Op::ConcatCols(parts) => {
                let mut col = 0;
                for &p in parts {
                    let w = self.shape(p).1;
                    let start = col;
                    self.acc(grads, p, || g.slice(s![.., start..start + w]).to_owned());
                    col += w;
                }
            }
            Op::RepeatRows(r) => {
                self.acc(grads, *r, || g.sum_axis(Axis(0)).insert_axis(Axis(0)))
            }
        }
    }

    fn acc(&self, grads: &mut [Option<Array2<f64>>], v: Var, f: impl FnOnce() -> Array2<f64>) {
        if self.tracked(v) {
            accumulate(grads, v, f());
        }
    }
}

fn accumulate(grads: &mut [Option<Array2<f64>>], v: Var, delta: Array2<f64>) {
    match &mut grads[v.0] {
        Some(existing) => *existing += &delta,
        slot @ None => *slot = Some(delta),
    }
}

/// Numerically stable log-sum-exp.
pub fn lse(values: impl Iterator<Item = f64> + Clone) -> f64 {
    let max = values.clone().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    max + values.map(|v| (v - max).exp()).sum::<f64>().ln()
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Array2<f64> {
        Array2::from_shape_fn((r, c), |_| rng.random_range(-1.0..1.0))
    }

    /// Central differences of `f` at `x` compared with the tape gradient.
    fn check(x0: Array2<f64>, f: impl Fn(&mut Tape, Var) -> Var) {
        let mut t = Tape::new();
        let x = t.param(x0.clone());
        let out = f(&mut t, x);
        let grads = t.backward(out);
        let analytic = grads.get_or_zeros(x, x0.dim());
        let h = 1e-6;
        for idx in 0..x0.len() {
            let eval = |delta: f64| {
                let mut xp = x0.clone();
                let (r, c) = (idx / x0.ncols(), idx % x0.ncols());
                xp[[r, c]] += delta;
                let mut t = Tape::new();
                let x = t.param(xp);
                let out = f(&mut t, x);
                t.scalar(out)
            };
            let numeric = (eval(h) - eval(-h)) / (2.0 * h);
            let a = analytic.as_slice().unwrap()[idx];
            assert!(
                (a - numeric).abs() <= 1e-6 * (1.0 + numeric.abs()),
                "entry {idx}: analytic {a} vs numeric {numeric}"
            );
        }
    }

    #[test]
    fn matmul_chain_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let w = random(&mut rng, 3, 4);
        let x0 = random(&mut rng, 2, 3);
        check(x0, |t, x| {
            let w = t.constant(w.clone());
            let y = t.matmul(x, w);
            let yt = t.matmul_t(y, y);
            let tr = t.transpose(yt);
            t.sum(tr)
        });
    }

    #[test]
    fn softmax_layernorm_normalize_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x0 = random(&mut rng, 3, 5);
        let probe = random(&mut rng, 3, 5);
        check(x0.clone(), |t, x| {
            let p = t.constant(probe.clone());
            let s = t.softmax_rows(x);
            let m = t.mul(s, p);
            t.sum(m)
        });
        check(x0.clone(), |t, x| {
            let p = t.constant(probe.clone());
            let s = t.layer_norm_rows(x, 1e-5);
            let m = t.mul(s, p);
            t.sum(m)
        });
        check(x0, |t, x| {
            let p = t.constant(probe.clone());
            let s = t.l2_normalize_rows(x);
            let m = t.mul(s, p);
            t.sum(m)
        });
    }

    #[test]
    fn broadcast_and_reduction_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let m = random(&mut rng, 3, 4);
        let probe = random(&mut rng, 3, 4);
        check(random(&mut rng, 1, 4), |t, r| {
            let m = t.constant(m.clone());
            let p = t.constant(probe.clone());
            let a = t.add_row(m, r);
            let b = t.mul_row(a, r);
            let c = t.mul(b, p);
            let rep = t.repeat_rows(r, 3);
            let d = t.add(c, rep);
            let e = t.tanh(d);
            t.sum(e)
        });
        check(random(&mut rng, 3, 1), |t, c| {
            let m = t.constant(m.clone());
            let a = t.add_col(m, c);
            let l = t.logsumexp_rows(a);
            let lc = t.logsumexp_cols(a);
            let s1 = t.sum(l);
            let s2 = t.sum(lc);
            let s = t.sub(s1, s2);
            let e = t.exp(s);
            t.scale(e, 0.5)
        });
        check(random(&mut rng, 3, 4), |t, x| {
            let a = t.slice_cols(x, 1, 3);
            let b = t.slice_cols(x, 0, 2);
            let c = t.concat_cols(&[a, b, x]);
            let mr = t.mean_rows(c);
            let r = t.relu(mr);
            let o = t.offset(r, 2.0);
            let sq = t.mul(o, o);
            t.sum(sq)
        });
    }

    #[test]
    fn constants_receive_no_gradient() {
        let mut t = Tape::new();
        let c = t.constant(array![[1.0, 2.0]]);
        let p = t.param(array![[3.0, 4.0]]);
        let m = t.mul(c, p);
        let s = t.sum(m);
        let g = t.backward(s);
        assert!(g.get(c).is_none());
        assert_eq!(g.get(p).unwrap(), &array![[1.0, 2.0]]);
    }

    #[test]
    fn zero_row_normalization_is_zero() {
        let mut t = Tape::new();
        let x = t.param(array![[0.0, 0.0], [3.0, 4.0]]);
        let y = t.l2_normalize_rows(x);
        assert_eq!(t.value(y), &array![[0.0, 0.0], [0.6, 0.8]]);
        let s = t.sum(y);
        let g = t.backward(s);
        assert_eq!(g.get(x).unwrap().row(0).to_vec(), vec![0.0, 0.0]);
    }
}

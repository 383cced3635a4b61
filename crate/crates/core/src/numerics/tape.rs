use std::cell::{Ref, RefCell};

use super::kernels;
use super::{Real, Rng, Tensor};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Backward rule for operations defined outside this module (quantizers).
pub trait CustomBackward<T: Real> {
    fn name(&self) -> &'static str;

    /// One gradient per input, in input order; `None` means no contribution.
    fn backward(
        &self,
        inputs: &[&Tensor<T>],
        output: &Tensor<T>,
        grad: &Tensor<T>,
    ) -> Result<Vec<Option<Tensor<T>>>>;
}

enum Op<T: Real> {
    Leaf,
    MatMul(Var, Var),
    MatMulNt(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Scale(Var, T),
    Sigmoid(Var),
    Tanh(Var),
    SliceCols {
        src: Var,
        start: usize,
    },
    ConcatCols(Vec<Var>),
    Mask {
        src: Var,
        mask: Vec<T>,
    },
    GatherRows {
        table: Var,
        idx: Vec<usize>,
    },
    Sum(Var),
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        probs: Vec<T>,
    },
    Custom {
        inputs: Vec<Var>,
        rule: Box<dyn CustomBackward<T>>,
    },
}

struct Node<T: Real> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// Append-only record of a forward computation.
///
/// Node indices are a topological order, so the backward sweep is a single
/// reverse pass over the node list.
pub struct Tape<T: Real> {
    nodes: RefCell<Vec<Node<T>>>,
}

/// Gradients of one scalar with respect to every node that needed one.
pub struct Grads<T: Real> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Real> Grads<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

enum Bcast {
    Same,
    LeftScalar,
    RightScalar,
}

fn bcast(op: &'static str, a: &[usize], b: &[usize]) -> Result<Bcast> {
    let (na, nb) = (a.iter().product::<usize>(), b.iter().product::<usize>());
    if a == b {
        Ok(Bcast::Same)
    } else if na == 1 {
        Ok(Bcast::LeftScalar)
    } else if nb == 1 {
        Ok(Bcast::RightScalar)
    } else {
        Err(Error::shape(op, a, b))
    }
}

fn zip_map<T: Real>(
    a: &Tensor<T>,
    b: &Tensor<T>,
    mode: &Bcast,
    f: impl Fn(T, T) -> T,
) -> Tensor<T> {
    match mode {
        Bcast::Same => Tensor::from_parts(
            a.shape().to_vec(),
            a.data()
                .iter()
                .zip(b.data())
                .map(|(&x, &y)| f(x, y))
                .collect(),
        ),
        Bcast::LeftScalar => {
            let x = a.item();
            Tensor::from_parts(
                b.shape().to_vec(),
                b.data().iter().map(|&y| f(x, y)).collect(),
            )
        }
        Bcast::RightScalar => {
            let y = b.item();
            Tensor::from_parts(
                a.shape().to_vec(),
                a.data().iter().map(|&x| f(x, y)).collect(),
            )
        }
    }
}

fn map<T: Real>(a: &Tensor<T>, f: impl Fn(T) -> T) -> Tensor<T> {
    Tensor::from_parts(a.shape().to_vec(), a.data().iter().map(|&x| f(x)).collect())
}

/// Reduce a broadcast gradient back onto a scalar operand.
fn reduce_to<T: Real>(shape: &[usize], g: Tensor<T>) -> Tensor<T> {
    if shape.iter().product::<usize>() == 1 && g.len() != 1 {
        Tensor::from_parts(shape.to_vec(), vec![g.data().iter().copied().sum()])
    } else {
        g
    }
}

fn matrix_dims(t: &Tensor<impl Real>) -> (usize, usize) {
    (t.rows(), t.cols())
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: RefCell::new(Vec::new()),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(
        &self,
        op_name: &'static str,
        value: Tensor<T>,
        op: Op<T>,
        needs_grad: bool,
    ) -> Result<Var> {
        if !value.all_finite() {
            return Err(Error::NonFinite { op: op_name });
        }
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Ok(Var(nodes.len() - 1))
    }

    fn needs(&self, vars: &[Var]) -> bool {
        let nodes = self.nodes.borrow();
        vars.iter().any(|v| nodes[v.0].needs_grad)
    }

    /// Record an input. Parameters pass `requires_grad = true`.
    pub fn leaf(&self, value: Tensor<T>, requires_grad: bool) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            op: Op::Leaf,
            needs_grad: requires_grad,
        });
        Var(nodes.len() - 1)
    }

    pub fn constant(&self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> Ref<'_, Tensor<T>> {
        Ref::map(self.nodes.borrow(), |n| &n[v.0].value)
    }

    pub fn shape(&self, v: Var) -> Vec<usize> {
        self.nodes.borrow()[v.0].value.shape().to_vec()
    }

    pub fn matmul(&self, a: Var, b: Var) -> Result<Var> {
        let out = {
            let (ta, tb) = (self.value(a), self.value(b));
            let ((m, k), (k2, n)) = (matrix_dims(&ta), matrix_dims(&tb));
            if ta.shape().len() != 2 || tb.shape().len() != 2 || k != k2 {
                return Err(Error::shape("matmul", ta.shape(), tb.shape()));
            }
            Tensor::from_parts(vec![m, n], kernels::matmul(ta.data(), tb.data(), m, k, n))
        };
        self.push("matmul", out, Op::MatMul(a, b), self.needs(&[a, b]))
    }

    /// `a · bᵀ`, the layout used for `out × in` weight matrices.
    pub fn matmul_nt(&self, a: Var, b: Var) -> Result<Var> {
        let out = {
            let (ta, tb) = (self.value(a), self.value(b));
            let ((m, k), (n, k2)) = (matrix_dims(&ta), matrix_dims(&tb));
            if ta.shape().len() != 2 || tb.shape().len() != 2 || k != k2 {
                return Err(Error::shape("matmul_nt", ta.shape(), tb.shape()));
            }
            Tensor::from_parts(
                vec![m, n],
                kernels::matmul_nt(ta.data(), tb.data(), m, k, n),
            )
        };
        self.push("matmul_nt", out, Op::MatMulNt(a, b), self.needs(&[a, b]))
    }

    fn binary(
        &self,
        name: &'static str,
        a: Var,
        b: Var,
        op: Op<T>,
        f: impl Fn(T, T) -> T,
    ) -> Result<Var> {
        let out = {
            let (ta, tb) = (self.value(a), self.value(b));
            let mode = bcast(name, ta.shape(), tb.shape())?;
            zip_map(&ta, &tb, &mode, f)
        };
        self.push(name, out, op, self.needs(&[a, b]))
    }

    pub fn add(&self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, Op::Sub(a, b), |x, y| x - y)
    }

    pub fn mul(&self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, Op::Mul(a, b), |x, y| x * y)
    }

    /// Add a length-`n` bias to every row of an `m × n` matrix.
    pub fn add_row(&self, a: Var, bias: Var) -> Result<Var> {
        let out = {
            let (ta, tb) = (self.value(a), self.value(bias));
            if ta.shape().len() != 2 || ta.cols() != tb.len() {
                return Err(Error::shape("add_row", ta.shape(), tb.shape()));
            }
            let mut data = ta.data().to_vec();
            kernels::add_row(&mut data, tb.data());
            Tensor::from_parts(ta.shape().to_vec(), data)
        };
        self.push("add_row", out, Op::AddRow(a, bias), self.needs(&[a, bias]))
    }

    pub fn scale(&self, a: Var, s: T) -> Result<Var> {
        let out = map(&self.value(a), |x| x * s);
        self.push("scale", out, Op::Scale(a, s), self.needs(&[a]))
    }

    pub fn sigmoid(&self, a: Var) -> Result<Var> {
        let out = map(&self.value(a), kernels::sigmoid);
        self.push("sigmoid", out, Op::Sigmoid(a), self.needs(&[a]))
    }

    pub fn tanh(&self, a: Var) -> Result<Var> {
        let out = map(&self.value(a), |x| x.tanh());
        self.push("tanh", out, Op::Tanh(a), self.needs(&[a]))
    }

    /// Columns `start..start+len` of a matrix.
    pub fn slice_cols(&self, a: Var, start: usize, len: usize) -> Result<Var> {
        let out = {
            let ta = self.value(a);
            let (m, n) = matrix_dims(&ta);
            if ta.shape().len() != 2 || len == 0 || start + len > n {
                return Err(Error::shape("slice_cols", ta.shape(), &[start, len]));
            }
            let mut data = Vec::with_capacity(m * len);
            for i in 0..m {
                data.extend_from_slice(&ta.data()[i * n + start..i * n + start + len]);
            }
            Tensor::from_parts(vec![m, len], data)
        };
        self.push(
            "slice_cols",
            out,
            Op::SliceCols { src: a, start },
            self.needs(&[a]),
        )
    }

    pub fn concat_cols(&self, parts: &[Var]) -> Result<Var> {
        let out = {
            let nodes = self.nodes.borrow();
            let first = &nodes[parts
                .first()
                .ok_or_else(|| Error::invalid("concat of nothing"))?
                .0]
                .value;
            let m = first.rows();
            let mut widths = Vec::with_capacity(parts.len());
            for p in parts {
                let t = &nodes[p.0].value;
                if t.shape().len() != 2 || t.rows() != m {
                    return Err(Error::shape("concat_cols", first.shape(), t.shape()));
                }
                widths.push(t.cols());
            }
            let total: usize = widths.iter().sum();
            let mut data = Vec::with_capacity(m * total);
            for i in 0..m {
                for p in parts {
                    data.extend_from_slice(nodes[p.0].value.row(i));
                }
            }
            Tensor::from_parts(vec![m, total], data)
        };
        self.push(
            "concat_cols",
            out,
            Op::ConcatCols(parts.to_vec()),
            self.needs(parts),
        )
    }

    /// Inverted dropout: survivors are scaled by `1/(1-p)`. Identity when
    /// not training or `p == 0`.
    pub fn dropout(&self, x: Var, p: f64, rng: &mut Rng, training: bool) -> Result<Var> {
        if !(0.0..1.0).contains(&p) {
            return Err(Error::invalid(format!(
                "dropout probability {p} not in [0, 1)"
            )));
        }
        if !training || p == 0.0 {
            return Ok(x);
        }
        let keep = T::of(1.0 / (1.0 - p));
        let n = self.value(x).len();
        let mask: Vec<T> = (0..n)
            .map(|_| if rng.bernoulli(p) { T::zero() } else { keep })
            .collect();
        self.apply_mask(x, mask)
    }

    /// Elementwise product with a constant mask (saved for backward).
    pub fn apply_mask(&self, x: Var, mask: Vec<T>) -> Result<Var> {
        let out = {
            let tx = self.value(x);
            if mask.len() != tx.len() {
                return Err(Error::shape("mask", tx.shape(), &[mask.len()]));
            }
            Tensor::from_parts(
                tx.shape().to_vec(),
                tx.data().iter().zip(&mask).map(|(&v, &m)| v * m).collect(),
            )
        };
        self.push("dropout", out, Op::Mask { src: x, mask }, self.needs(&[x]))
    }

    /// Rows of an embedding table.
    pub fn gather_rows(&self, table: Var, idx: &[usize]) -> Result<Var> {
        let out = {
            let t = self.value(table);
            let (v, e) = matrix_dims(&t);
            let mut data = Vec::with_capacity(idx.len() * e);
            for &i in idx {
                if i >= v {
                    return Err(Error::invalid(format!("row index {i} out of range {v}")));
                }
                data.extend_from_slice(t.row(i));
            }
            Tensor::from_parts(vec![idx.len(), e], data)
        };
        let op = Op::GatherRows {
            table,
            idx: idx.to_vec(),
        };
        self.push("gather_rows", out, op, self.needs(&[table]))
    }

    pub fn sum(&self, a: Var) -> Result<Var> {
        let s: T = self.value(a).data().iter().copied().sum();
        self.push("sum", Tensor::scalar(s), Op::Sum(a), self.needs(&[a]))
    }

    /// Mean negative log-likelihood of `targets` under row-wise softmax.
    pub fn cross_entropy(&self, logits: Var, targets: &[usize]) -> Result<Var> {
        let (loss, probs) = {
            let t = self.value(logits);
            let (m, c) = matrix_dims(&t);
            if t.shape().len() != 2 || targets.len() != m {
                return Err(Error::shape("cross_entropy", t.shape(), &[targets.len()]));
            }
            if let Some(&bad) = targets.iter().find(|&&k| k >= c) {
                return Err(Error::invalid(format!(
                    "target class {bad} out of range {c}"
                )));
            }
            let logp = kernels::log_softmax(t.data(), c);
            let mut total = T::zero();
            for (i, &k) in targets.iter().enumerate() {
                total = total - logp[i * c + k];
            }
            let probs: Vec<T> = logp.iter().map(|v| v.exp()).collect();
            (total / T::of(m as f64), probs)
        };
        let op = Op::CrossEntropy {
            logits,
            targets: targets.to_vec(),
            probs,
        };
        self.push(
            "cross_entropy",
            Tensor::scalar(loss),
            op,
            self.needs(&[logits]),
        )
    }

    /// Record an externally computed value with its own backward rule.
    pub fn custom(
        &self,
        inputs: &[Var],
        value: Tensor<T>,
        rule: Box<dyn CustomBackward<T>>,
    ) -> Result<Var> {
        let name = rule.name();
        let needs = self.needs(inputs);
        let op = Op::Custom {
            inputs: inputs.to_vec(),
            rule,
        };
        self.push(name, value, op, needs)
    }

    /// Reverse sweep from a single-element `loss`.
    pub fn backward(&self, loss: Var) -> Result<Grads<T>> {
        let nodes = self.nodes.borrow();
        if nodes[loss.0].value.len() != 1 {
            return Err(Error::invalid("backward needs a scalar loss"));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::scalar(T::one()));

        let acc = |grads: &mut Vec<Option<Tensor<T>>>, v: Var, g: Tensor<T>| {
            if !nodes[v.0].needs_grad {
                return;
            }
            let g = reduce_to(nodes[v.0].value.shape(), g);
            match &mut grads[v.0] {
                Some(existing) => {
                    for (e, x) in existing.data_mut().iter_mut().zip(g.data()) {
                        *e = *e + *x;
                    }
                }
                slot @ None => *slot = Some(g),
            }
        };

        for i in (0..=loss.0).rev() {
            let node = &nodes[i];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            let val = |v: Var| &nodes[v.0].value;
            match &node.op {
                Op::Leaf => {}
                Op::MatMul(a, b) => {
                    let (ta, tb) = (val(*a), val(*b));
                    let ((m, k), n) = (matrix_dims(ta), tb.cols());
                    let ga = kernels::matmul_nt(g.data(), tb.data(), m, n, k);
                    let gb = kernels::matmul_tn(ta.data(), g.data(), m, k, n);
                    acc(&mut grads, *a, Tensor::from_parts(vec![m, k], ga));
                    acc(&mut grads, *b, Tensor::from_parts(vec![k, n], gb));
                }
                Op::MatMulNt(a, b) => {
                    let (ta, tb) = (val(*a), val(*b));
                    let ((m, k), n) = (matrix_dims(ta), tb.rows());
                    let ga = kernels::matmul(g.data(), tb.data(), m, n, k);
                    let gb = kernels::matmul_tn(g.data(), ta.data(), m, n, k);
                    acc(&mut grads, *a, Tensor::from_parts(vec![m, k], ga));
                    acc(&mut grads, *b, Tensor::from_parts(vec![n, k], gb));
                }
                Op::Add(a, b) => {
                    acc(&mut grads, *a, g.clone());
                    acc(&mut grads, *b, g.clone());
                }
                Op::Sub(a, b) => {
                    acc(&mut grads, *a, g.clone());
                    acc(&mut grads, *b, map(&g, |x| -x));
                }
                Op::Mul(a, b) => {
                    let (ta, tb) = (val(*a), val(*b));
                    let ga = mul_broadcast(&g, tb);
                    let gb = mul_broadcast(&g, ta);
                    acc(&mut grads, *a, ga);
                    acc(&mut grads, *b, gb);
                }
                Op::AddRow(a, bias) => {
                    let n = val(*bias).len();
                    let mut gb = vec![T::zero(); n];
                    for row in g.data().chunks(n) {
                        for (s, &x) in gb.iter_mut().zip(row) {
                            *s = *s + x;
                        }
                    }
                    acc(
                        &mut grads,
                        *bias,
                        Tensor::from_parts(val(*bias).shape().to_vec(), gb),
                    );
                    acc(&mut grads, *a, g.clone());
                }
                Op::Scale(a, s) => acc(&mut grads, *a, map(&g, |x| x * *s)),
                Op::Sigmoid(a) => {
                    let y = &node.value;
                    let d = y
                        .data()
                        .iter()
                        .zip(g.data())
                        .map(|(&s, &gi)| gi * s * (T::one() - s));
                    acc(
                        &mut grads,
                        *a,
                        Tensor::from_parts(y.shape().to_vec(), d.collect()),
                    );
                }
                Op::Tanh(a) => {
                    let y = &node.value;
                    let d = y
                        .data()
                        .iter()
                        .zip(g.data())
                        .map(|(&t, &gi)| gi * (T::one() - t * t));
                    acc(
                        &mut grads,
                        *a,
                        Tensor::from_parts(y.shape().to_vec(), d.collect()),
                    );
                }
                Op::SliceCols { src, start } => {
                    let t = val(*src);
                    let (m, n) = matrix_dims(t);
                    let len = g.cols();
                    let mut full = vec![T::zero(); m * n];
                    for r in 0..m {
                        full[r * n + start..r * n + start + len].copy_from_slice(g.row(r));
                    }
                    acc(&mut grads, *src, Tensor::from_parts(vec![m, n], full));
                }
                Op::ConcatCols(parts) => {
                    let m = g.rows();
                    let mut offset = 0;
                    for p in parts {
                        let w = val(*p).cols();
                        let mut part = Vec::with_capacity(m * w);
                        for r in 0..m {
                            part.extend_from_slice(&g.row(r)[offset..offset + w]);
                        }
                        offset += w;
                        acc(&mut grads, *p, Tensor::from_parts(vec![m, w], part));
                    }
                }
                Op::Mask { src, mask } => {
                    let d = g
                        .data()
                        .iter()
                        .zip(mask)
                        .map(|(&gi, &mi)| gi * mi)
                        .collect();
                    acc(&mut grads, *src, Tensor::from_parts(g.shape().to_vec(), d));
                }
                Op::GatherRows { table, idx } => {
                    let t = val(*table);
                    let e = t.cols();
                    let mut gt = vec![T::zero(); t.len()];
                    for (r, &i) in idx.iter().enumerate() {
                        for (s, &x) in gt[i * e..(i + 1) * e].iter_mut().zip(g.row(r)) {
                            *s = *s + x;
                        }
                    }
                    acc(
                        &mut grads,
                        *table,
                        Tensor::from_parts(t.shape().to_vec(), gt),
                    );
                }
                Op::Sum(a) => {
                    let shape = val(*a).shape().to_vec();
                    acc(&mut grads, *a, Tensor::full(&shape, g.item()));
                }
                Op::CrossEntropy {
                    logits,
                    targets,
                    probs,
                } => {
                    let t = val(*logits);
                    let (m, c) = matrix_dims(t);
                    let scale = g.item() / T::of(m as f64);
                    let mut d: Vec<T> = probs.iter().map(|&p| p * scale).collect();
                    for (i, &k) in targets.iter().enumerate() {
                        d[i * c + k] = d[i * c + k] - scale;
                    }
                    acc(&mut grads, *logits, Tensor::from_parts(vec![m, c], d));
                }
                Op::Custom { inputs, rule } => {
                    let ins: Vec<&Tensor<T>> = inputs.iter().map(|v| val(*v)).collect();
                    let gs = rule.backward(&ins, &node.value, &g)?;
                    for (v, gi) in inputs.iter().zip(gs) {
                        if let Some(gi) = gi {
                            acc(&mut grads, *v, gi);
                        }
                    }
                }
            }
            grads[i] = Some(g);
        }
        Ok(Grads { grads })
    }
}

fn mul_broadcast<T: Real>(g: &Tensor<T>, other: &Tensor<T>) -> Tensor<T> {
    if other.len() == g.len() {
        Tensor::from_parts(
            g.shape().to_vec(),
            g.data()
                .iter()
                .zip(other.data())
                .map(|(&a, &b)| a * b)
                .collect(),
        )
    } else if other.len() == 1 {
        let s = other.item();
        map(g, |x| x * s)
    } else {
        // `g` has the scalar operand's partner shape; the caller reduces.
        debug_assert_eq!(g.len(), 1);
        let s = g.item();
        map(other, |x| x * s)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], v: &[f64]) -> Tensor<f64> {
        Tensor::from_f64(shape, v).unwrap()
    }

    /// Central differences of `f` with respect to every element of `x`.
    fn numeric_grad(x: &Tensor<f64>, f: impl Fn(&Tensor<f64>) -> f64) -> Vec<f64> {
        let h = 1e-5;
        (0..x.len())
            .map(|i| {
                let mut p = x.clone();
                p.data_mut()[i] += h;
                let mut m = x.clone();
                m.data_mut()[i] -= h;
                (f(&p) - f(&m)) / (2.0 * h)
            })
            .collect()
    }

    fn assert_close(a: &[f64], b: &[f64], rel: f64) {
        for (x, y) in a.iter().zip(b) {
            let scale = x.abs().max(y.abs()).max(1e-8);
            assert!((x - y).abs() / scale <= rel, "{x} vs {y}");
        }
    }

    #[test]
    fn matmul_examples() {
        let tape = Tape::<f64>::new();
        let a = tape.constant(t(&[2, 2], &[1., 0., 0., 1.]));
        let b = tape.constant(t(&[2, 2], &[3., 4., 5., 6.]));
        let c = tape.matmul(a, b).unwrap();
        assert_eq!(tape.value(c).data(), &[3., 4., 5., 6.]);

        let a = tape.constant(t(&[1, 2], &[1., 2.]));
        let b = tape.constant(t(&[2, 1], &[3., 4.]));
        let c = tape.matmul(a, b).unwrap();
        assert_eq!(tape.value(c).data(), &[11.]);

        let bad = tape.constant(t(&[3, 1], &[1., 1., 1.]));
        assert!(matches!(tape.matmul(a, bad), Err(Error::Shape { .. })));
    }

    #[test]
    fn matmul_gradient_matches_finite_differences() {
        let mut rng = Rng::new(5);
        let a0 = Tensor::<f64>::randn(&[3, 4], 1.0, &mut rng);
        let b0 = Tensor::<f64>::randn(&[4, 2], 1.0, &mut rng);
        let tape = Tape::new();
        let a = tape.leaf(a0.clone(), true);
        let b = tape.constant(b0.clone());
        let s = tape.sum(tape.matmul(a, b).unwrap()).unwrap();
        let g = tape.backward(s).unwrap();
        let fd = numeric_grad(&a0, |x| {
            crate::numerics::kernels::matmul(x.data(), b0.data(), 3, 4, 2)
                .iter()
                .sum()
        });
        assert_close(g.get(a).unwrap().data(), &fd, 1e-6);
    }

    #[test]
    fn pointwise_values() {
        let tape = Tape::<f64>::new();
        let z = tape.constant(Tensor::scalar(0.0));
        assert_eq!(tape.value(tape.sigmoid(z).unwrap()).item(), 0.5);
        assert_eq!(tape.value(tape.tanh(z).unwrap()).item(), 0.0);
    }

    #[test]
    fn sigmoid_and_tanh_gradients() {
        let x0 = t(&[1, 5], &[-3.0, -0.5, 0.0, 0.7, 2.5]);
        for use_tanh in [false, true] {
            let tape = Tape::new();
            let x = tape.leaf(x0.clone(), true);
            let y = if use_tanh {
                tape.tanh(x)
            } else {
                tape.sigmoid(x)
            }
            .unwrap();
            let s = tape.sum(y).unwrap();
            let g = tape.backward(s).unwrap();
            let fd = numeric_grad(&x0, |x| {
                x.data()
                    .iter()
                    .map(|&v| {
                        if use_tanh {
                            v.tanh()
                        } else {
                            kernels::sigmoid(v)
                        }
                    })
                    .sum()
            });
            assert_close(g.get(x).unwrap().data(), &fd, 1e-6);
        }
    }

    #[test]
    fn composed_graph_gradient() {
        // sum(tanh(x·Wᵀ + b) * sigmoid(x) slice) exercises most rules at once
        let mut rng = Rng::new(9);
        let x0 = Tensor::<f64>::randn(&[2, 3], 1.0, &mut rng);
        let w0 = Tensor::<f64>::randn(&[4, 3], 1.0, &mut rng);
        let b0 = Tensor::<f64>::randn(&[4], 1.0, &mut rng);
        let run = |tape: &Tape<f64>, x: Var, w: Var, b: Var| -> Var {
            let z = tape.add_row(tape.matmul_nt(x, w).unwrap(), b).unwrap();
            let h = tape.tanh(z).unwrap();
            let left = tape.slice_cols(h, 0, 3).unwrap();
            let gate = tape.sigmoid(x).unwrap();
            let p = tape.mul(left, gate).unwrap();
            let cat = tape.concat_cols(&[p, h]).unwrap();
            let sc = tape.scale(cat, 0.5).unwrap();
            let two = tape.constant(Tensor::scalar(2.0));
            let q = tape.sub(tape.mul(sc, two).unwrap(), sc).unwrap();
            tape.sum(q).unwrap()
        };
        let tape = Tape::new();
        let (x, w, b) = (
            tape.leaf(x0.clone(), true),
            tape.leaf(w0.clone(), true),
            tape.leaf(b0.clone(), true),
        );
        let s = run(&tape, x, w, b);
        let g = tape.backward(s).unwrap();
        let eval = |xv: &Tensor<f64>, wv: &Tensor<f64>, bv: &Tensor<f64>| {
            let tp = Tape::new();
            let (x, w, b) = (
                tp.constant(xv.clone()),
                tp.constant(wv.clone()),
                tp.constant(bv.clone()),
            );
            let out = run(&tp, x, w, b);
            let v = tp.value(out).item();
            v
        };
        assert_close(
            g.get(x).unwrap().data(),
            &numeric_grad(&x0, |v| eval(v, &w0, &b0)),
            1e-6,
        );
        assert_close(
            g.get(w).unwrap().data(),
            &numeric_grad(&w0, |v| eval(&x0, v, &b0)),
            1e-6,
        );
        assert_close(
            g.get(b).unwrap().data(),
            &numeric_grad(&b0, |v| eval(&x0, &w0, v)),
            1e-6,
        );
    }

    #[test]
    fn cross_entropy_values_and_gradient() {
        let tape = Tape::<f64>::new();
        let uniform = tape.constant(Tensor::zeros(&[2, 5]));
        let l = tape.cross_entropy(uniform, &[0, 3]).unwrap();
        assert!((tape.value(l).item() - 5f64.ln()).abs() < 1e-12);

        let big = tape.constant(t(&[1, 2], &[1e6, 0.0]));
        let l = tape.cross_entropy(big, &[0]).unwrap();
        assert!(tape.value(l).item().abs() < 1e-12);

        assert!(tape.cross_entropy(big, &[2]).is_err());

        let mut rng = Rng::new(2);
        let z0 = Tensor::<f64>::randn(&[3, 4], 2.0, &mut rng);
        let targets = [1, 0, 3];
        let tape = Tape::new();
        let z = tape.leaf(z0.clone(), true);
        let l = tape.cross_entropy(z, &targets).unwrap();
        let g = tape.backward(l).unwrap();
        let fd = numeric_grad(&z0, |zv| {
            let tp = Tape::new();
            let v = tp.constant(zv.clone());
            let l = tp.cross_entropy(v, &targets).unwrap();
            let out = tp.value(l).item();
            out
        });
        assert_close(g.get(z).unwrap().data(), &fd, 1e-5);
    }

    #[test]
    fn dropout_behaviour() {
        let tape = Tape::<f64>::new();
        let mut rng = Rng::new(1);
        let x = tape.constant(Tensor::full(&[1, 8], 2.0));
        assert_eq!(tape.dropout(x, 0.0, &mut rng, true).unwrap(), x);
        assert_eq!(tape.dropout(x, 0.5, &mut rng, false).unwrap(), x);
        assert!(tape.dropout(x, 1.0, &mut rng, true).is_err());

        let y = tape.dropout(x, 0.2, &mut rng, true).unwrap();
        for &v in tape.value(y).data() {
            assert!(v == 0.0 || v == 2.5, "{v}");
        }
    }

    #[test]
    fn dropout_survivor_fraction() {
        let tape = Tape::<f32>::new();
        let mut rng = Rng::new(4);
        let x = tape.constant(Tensor::full(&[1000, 1000], 1.0));
        let y = tape.dropout(x, 0.25, &mut rng, true).unwrap();
        let kept = tape.value(y).data().iter().filter(|&&v| v != 0.0).count();
        let frac = kept as f64 / 1e6;
        assert!((0.745..=0.755).contains(&frac), "{frac}");
    }

    #[test]
    fn gather_rows_scatters_gradient() {
        let tape = Tape::<f64>::new();
        let table = tape.leaf(t(&[3, 2], &[1., 2., 3., 4., 5., 6.]), true);
        let rows = tape.gather_rows(table, &[2, 0, 2]).unwrap();
        assert_eq!(tape.value(rows).data(), &[5., 6., 1., 2., 5., 6.]);
        let s = tape.sum(rows).unwrap();
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(table).unwrap().data(), &[1., 1., 0., 0., 2., 2.]);
    }

    #[test]
    fn non_finite_is_an_error() {
        let tape = Tape::<f32>::new();
        let a = tape.constant(Tensor::scalar(1e30));
        assert!(matches!(
            tape.mul(a, a),
            Err(Error::NonFinite { op: "mul" })
        ));
    }
}

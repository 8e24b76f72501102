//! Reverse-mode automatic differentiation over dense `f64` tensors.
//!
//! Nodes are appended in evaluation order, so the node index is already a
//! topological order and the backward pass is a single reverse sweep.
//! Structured operations (trilinear scoring, unrolled inference, losses)
//! plug in through [`CustomOp`].

use std::borrow::Cow;

use ndarray::{s, Array2, ArrayD, ArrayView2, Axis, Ix2, IxDyn};

pub type Tensor = ArrayD<f64>;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// A node with a hand-written adjoint.
///
/// `backward` receives the input values, the node's own output and the
/// adjoint of that output, and returns one adjoint per input (same order and
/// shapes as the inputs).
pub trait CustomOp: Send + Sync {
    fn backward(&self, inputs: &[&Tensor], output: &Tensor, grad: &Tensor) -> Vec<Tensor>;
}

enum Op<'a> {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Sigmoid(Var),
    Tanh(Var),
    OneMinus(Var),
    Gather(Var, Vec<usize>),
    Row(Var, usize),
    StackRows(Vec<Var>),
    ConcatCols(Var, Var),
    AppendOnes(Var),
    Transpose(Var),
    Sum(Var),
    Custom(Vec<Var>, Box<dyn CustomOp + 'a>),
}

struct Node<'a> {
    value: Cow<'a, Tensor>,
    op: Op<'a>,
}

#[derive(Default)]
pub struct Tape<'a> {
    nodes: Vec<Node<'a>>,
}

/// Adjoints produced by [`Tape::backward`], indexed by [`Var`].
pub struct Grads {
    inner: Vec<Option<Tensor>>,
}

impl Grads {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.inner[v.0].as_ref()
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.inner[v.0].take()
    }
}

pub fn view2(t: &Tensor) -> ArrayView2<'_, f64> {
    t.view()
        .into_dimensionality::<Ix2>()
        .expect("expected a matrix")
}

fn dyn2(a: Array2<f64>) -> Tensor {
    a.into_dyn()
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl<'a> Tape<'a> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Cow<'a, Tensor>, op: Op<'a>) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(Cow::Owned(value), Op::Leaf)
    }

    /// A leaf borrowing its value, used for parameters.
    pub fn leaf_ref(&mut self, value: &'a Tensor) -> Var {
        self.push(Cow::Borrowed(value), Op::Leaf)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let out = view2(self.value(a)).dot(&view2(self.value(b)));
        self.push(Cow::Owned(dyn2(out)), Op::MatMul(a, b))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a) + self.value(b);
        self.push(Cow::Owned(out), Op::Add(a, b))
    }

    /// Adds a bias vector to every row of a matrix.
    pub fn add_row(&mut self, a: Var, bias: Var) -> Var {
        let mut out = view2(self.value(a)).to_owned();
        let b = self.value(bias);
        for mut row in out.rows_mut() {
            row += &b.view().into_dimensionality::<ndarray::Ix1>().expect("bias vector");
        }
        self.push(Cow::Owned(dyn2(out)), Op::AddRow(a, bias))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a) * self.value(b);
        self.push(Cow::Owned(out), Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let out = self.value(a) * c;
        self.push(Cow::Owned(out), Op::Scale(a, c))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let out = self.value(a).mapv(sigmoid);
        self.push(Cow::Owned(out), Op::Sigmoid(a))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let out = self.value(a).mapv(f64::tanh);
        self.push(Cow::Owned(out), Op::Tanh(a))
    }

    pub fn one_minus(&mut self, a: Var) -> Var {
        let out = self.value(a).mapv(|x| 1.0 - x);
        self.push(Cow::Owned(out), Op::OneMinus(a))
    }

    /// Selects rows of `table`, e.g. an embedding lookup.
    pub fn gather(&mut self, table: Var, rows: Vec<usize>) -> Var {
        let t = view2(self.value(table));
        let out = t.select(Axis(0), &rows);
        self.push(Cow::Owned(dyn2(out)), Op::Gather(table, rows))
    }

    /// Row `i` of a matrix as a `1 x d` matrix.
    pub fn row(&mut self, a: Var, i: usize) -> Var {
        let out = view2(self.value(a)).slice(s![i..i + 1, ..]).to_owned();
        self.push(Cow::Owned(dyn2(out)), Op::Row(a, i))
    }

    /// Stacks `1 x d` rows into an `m x d` matrix.
    pub fn stack_rows(&mut self, rows: Vec<Var>) -> Var {
        let views: Vec<_> = rows.iter().map(|&r| view2(self.value(r))).collect();
        let out = ndarray::concatenate(Axis(0), &views).expect("row widths differ");
        self.push(Cow::Owned(dyn2(out)), Op::StackRows(rows))
    }

    pub fn concat_cols(&mut self, a: Var, b: Var) -> Var {
        let out = ndarray::concatenate(Axis(1), &[view2(self.value(a)), view2(self.value(b))])
            .expect("row counts differ");
        self.push(Cow::Owned(dyn2(out)), Op::ConcatCols(a, b))
    }

    /// Appends a constant column of ones (bias augmentation).
    pub fn append_ones(&mut self, a: Var) -> Var {
        let m = view2(self.value(a));
        let mut out = Array2::ones((m.nrows(), m.ncols() + 1));
        out.slice_mut(s![.., ..m.ncols()]).assign(&m);
        self.push(Cow::Owned(dyn2(out)), Op::AppendOnes(a))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let out = view2(self.value(a)).t().to_owned();
        self.push(Cow::Owned(dyn2(out)), Op::Transpose(a))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let out = ArrayD::from_elem(IxDyn(&[]), self.value(a).sum());
        self.push(Cow::Owned(out), Op::Sum(a))
    }

    pub fn custom(&mut self, inputs: Vec<Var>, output: Tensor, op: Box<dyn CustomOp + 'a>) -> Var {
        self.push(Cow::Owned(output), Op::Custom(inputs, op))
    }

    /// Computes adjoints of the scalar `output` with respect to every node.
    pub fn backward(&self, output: Var) -> Grads {
        assert_eq!(self.value(output).len(), 1, "backward needs a scalar output");
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[output.0] = Some(ArrayD::ones(self.value(output).raw_dim()));

        for idx in (0..=output.0).rev() {
            let (lower, upper) = grads.split_at_mut(idx);
            let Some(g) = upper[0].as_ref() else {
                continue;
            };
            let node = &self.nodes[idx];
            let mut acc = |v: Var, delta: Tensor| {
                debug_assert!(v.0 < idx);
                match &mut lower[v.0] {
                    Some(existing) => *existing += &delta,
                    slot @ None => *slot = Some(delta),
                }
            };
            match &node.op {
                Op::Leaf => {}
                Op::MatMul(a, b) => {
                    let g2 = view2(g);
                    let av = view2(self.value(*a));
                    let bv = view2(self.value(*b));
                    acc(*a, dyn2(g2.dot(&bv.t())));
                    acc(*b, dyn2(av.t().dot(&g2)));
                }
                Op::Add(a, b) => {
                    acc(*a, g.clone());
                    acc(*b, g.clone());
                }
                Op::AddRow(a, bias) => {
                    acc(*a, g.clone());
                    acc(*bias, view2(g).sum_axis(Axis(0)).into_dyn());
                }
                Op::Mul(a, b) => {
                    acc(*a, g * self.value(*b));
                    acc(*b, g * self.value(*a));
                }
                Op::Scale(a, c) => acc(*a, g * *c),
                Op::Sigmoid(a) => {
                    let y = &node.value;
                    let mut d = g.clone();
                    d.zip_mut_with(y, |d, &y| *d *= y * (1.0 - y));
                    acc(*a, d);
                }
                Op::Tanh(a) => {
                    let y = &node.value;
                    let mut d = g.clone();
                    d.zip_mut_with(y, |d, &y| *d *= 1.0 - y * y);
                    acc(*a, d);
                }
                Op::OneMinus(a) => acc(*a, -g),
                Op::Gather(table, rows) => {
                    let mut d = Array2::zeros(view2(self.value(*table)).raw_dim());
                    let g2 = view2(g);
                    for (out_row, &r) in rows.iter().enumerate() {
                        let mut target = d.row_mut(r);
                        target += &g2.row(out_row);
                    }
                    acc(*table, dyn2(d));
                }
                Op::Row(a, i) => {
                    let mut d = Array2::zeros(view2(self.value(*a)).raw_dim());
                    d.slice_mut(s![*i..*i + 1, ..]).assign(&view2(g));
                    acc(*a, dyn2(d));
                }
                Op::StackRows(rows) => {
                    let g2 = view2(g);
                    for (i, &r) in rows.iter().enumerate() {
                        acc(r, dyn2(g2.slice(s![i..i + 1, ..]).to_owned()));
                    }
                }
                Op::ConcatCols(a, b) => {
                    let g2 = view2(g);
                    let split = view2(self.value(*a)).ncols();
                    acc(*a, dyn2(g2.slice(s![.., ..split]).to_owned()));
                    acc(*b, dyn2(g2.slice(s![.., split..]).to_owned()));
                }
                Op::AppendOnes(a) => {
                    let g2 = view2(g);
                    let cols = g2.ncols() - 1;
                    acc(*a, dyn2(g2.slice(s![.., ..cols]).to_owned()));
                }
                Op::Transpose(a) => acc(*a, dyn2(view2(g).t().to_owned())),
                Op::Sum(a) => {
                    let scalar = g.iter().next().copied().unwrap_or(0.0);
                    acc(*a, ArrayD::from_elem(self.value(*a).raw_dim(), scalar));
                }
                Op::Custom(inputs, op) => {
                    let values: Vec<&Tensor> = inputs.iter().map(|&v| self.value(v)).collect();
                    let deltas = op.backward(&values, &node.value, g);
                    assert_eq!(deltas.len(), inputs.len(), "custom op returned wrong arity");
                    for (&v, d) in inputs.iter().zip(deltas) {
                        acc(v, d);
                    }
                }
            }
        }

        Grads { inner: grads }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{arr1, arr2};

    fn scalar(t: &Tensor) -> f64 {
        t.iter().next().copied().unwrap()
    }

    #[test]
    fn matmul_gradient() {
        let mut tape = Tape::new();
        let a = tape.leaf(arr2(&[[1.0, 2.0], [3.0, 4.0]]).into_dyn());
        let b = tape.leaf(arr2(&[[5.0], [6.0]]).into_dyn());
        let c = tape.matmul(a, b);
        let s = tape.sum(c);
        assert_eq!(scalar(tape.value(s)), 17.0 + 39.0);
        let g = tape.backward(s);
        assert_eq!(g.get(a).unwrap(), &arr2(&[[5.0, 6.0], [5.0, 6.0]]).into_dyn());
        assert_eq!(g.get(b).unwrap(), &arr2(&[[4.0], [6.0]]).into_dyn());
    }

    #[test]
    fn shared_input_accumulates() {
        let mut tape = Tape::new();
        let x = tape.leaf(arr2(&[[3.0]]).into_dyn());
        let y = tape.mul(x, x);
        let s = tape.sum(y);
        let g = tape.backward(s);
        assert_eq!(scalar(g.get(x).unwrap()), 6.0);
    }

    #[test]
    fn bias_and_gather() {
        let mut tape = Tape::new();
        let table = tape.leaf(arr2(&[[1.0, 0.0], [0.0, 1.0], [2.0, 2.0]]).into_dyn());
        let bias = tape.leaf(arr1(&[0.5, -0.5]).into_dyn());
        let rows = tape.gather(table, vec![2, 0, 2]);
        let out = tape.add_row(rows, bias);
        let s = tape.sum(out);
        assert_eq!(scalar(tape.value(s)), 4.0 + 1.0 + 4.0);
        let g = tape.backward(s);
        assert_eq!(
            g.get(table).unwrap(),
            &arr2(&[[1.0, 1.0], [0.0, 0.0], [2.0, 2.0]]).into_dyn()
        );
        assert_eq!(g.get(bias).unwrap(), &arr1(&[3.0, 3.0]).into_dyn());
    }

    #[test]
    fn unused_branch_has_no_gradient() {
        let mut tape = Tape::new();
        let x = tape.leaf(arr2(&[[1.0]]).into_dyn());
        let unused = tape.leaf(arr2(&[[2.0]]).into_dyn());
        let y = tape.tanh(x);
        let s = tape.sum(y);
        let g = tape.backward(s);
        assert!(g.get(unused).is_none());
        let expected = 1.0 - 1f64.tanh().powi(2);
        assert!((scalar(g.get(x).unwrap()) - expected).abs() < 1e-15);
    }
}

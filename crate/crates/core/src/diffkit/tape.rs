//! Matrix-valued Wengert tape with a single reverse sweep.
//!
//! Every recorded value is a dense 2-D array. Vectors are `1×n` rows and
//! scalars are `1×1`. Broadcasting is limited to the right operand of
//! `add_bcast` / `mul_bcast`, which may be `1×1`, `1×cols` or `rows×1`.

use ndarray::{Array2, Axis, Zip};

use super::real::Real;
use super::DiffError;

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Constant,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Neg(Var),
    Scale(Var, f64),
    Offset(Var, f64),
    Tanh(Var),
    Exp(Var),
    Sin(Var),
    Square(Var),
    Abs(Var),
    Sign(Var),
    Clip(Var, f64, f64),
    MatMul(Var, Var),
    Transpose(Var),
    Sum(Var),
    Mean(Var),
    AddBcast(Var, Var),
    MulBcast(Var, Var),
}

#[derive(Clone, Debug)]
struct Node<T> {
    op: Op,
    value: Array2<T>,
    requires_grad: bool,
}

/// Ordered record of primitive operations.
///
/// Nodes are appended in evaluation order, so the record is always
/// topologically sorted. Leaves (`leaf`) receive gradients; constants do not.
#[derive(Clone, Debug, Default)]
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
}

/// Gradients produced by one reverse sweep, indexed by leaf.
#[derive(Clone, Debug)]
pub struct Gradients<T> {
    grads: Vec<Option<Array2<T>>>,
    shapes: Vec<(usize, usize)>,
}

impl<T: Real> Gradients<T> {
    /// Gradient with respect to `var`, or zeros when the output does not
    /// depend on it. `None` if `var` was not part of the sweep.
    pub fn wrt(&self, var: Var) -> Option<Array2<T>> {
        let shape = *self.shapes.get(var.0)?;
        Some(match &self.grads[var.0] {
            Some(g) => g.clone(),
            None => Array2::zeros(shape),
        })
    }

    /// Moves the gradient out, leaving zeros behind.
    pub fn take(&mut self, var: Var) -> Option<Array2<T>> {
        let shape = *self.shapes.get(var.0)?;
        Some(self.grads[var.0].take().unwrap_or_else(|| Array2::zeros(shape)))
    }
}

fn shape_of<T>(a: &Array2<T>) -> (usize, usize) {
    (a.nrows(), a.ncols())
}

fn bcast_compatible(a: (usize, usize), b: (usize, usize)) -> bool {
    b == a || b == (1, 1) || b == (1, a.1) || b == (a.0, 1)
}

fn zip_with<T: Real>(a: &Array2<T>, b: &Array2<T>, f: impl Fn(T, T) -> T) -> Array2<T> {
    Zip::from(a).and(b).map_collect(|&x, &y| f(x, y))
}

fn reduce_to<T: Real>(g: &Array2<T>, shape: (usize, usize)) -> Array2<T> {
    let gs = shape_of(g);
    if gs == shape {
        return g.clone();
    }
    match shape {
        (1, 1) => Array2::from_elem((1, 1), g.sum()),
        (1, c) if c == gs.1 => g.sum_axis(Axis(0)).insert_axis(Axis(0)),
        (r, 1) if r == gs.0 => g.sum_axis(Axis(1)).insert_axis(Axis(1)),
        _ => unreachable!("broadcast shapes are checked at record time"),
    }
}

fn accumulate<T: Real>(slot: &mut Option<Array2<T>>, contrib: Array2<T>) {
    match slot {
        Some(existing) => Zip::from(existing).and(&contrib).for_each(|e, &c| *e = *e + c),
        None => *slot = Some(contrib),
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Records a differentiable input.
    pub fn leaf(&mut self, value: Array2<T>) -> Var {
        self.push_raw(Op::Leaf, value, true)
    }

    /// Records an input that never receives a gradient.
    pub fn constant(&mut self, value: Array2<T>) -> Var {
        self.push_raw(Op::Constant, value, false)
    }

    pub fn scalar_constant(&mut self, value: f64) -> Var {
        self.constant(Array2::from_elem((1, 1), T::from_f64(value)))
    }

    pub fn value(&self, var: Var) -> &Array2<T> {
        &self.nodes[var.0].value
    }

    pub fn shape(&self, var: Var) -> (usize, usize) {
        shape_of(&self.nodes[var.0].value)
    }

    pub fn is_leaf(&self, var: Var) -> bool {
        matches!(self.nodes.get(var.0), Some(Node { op: Op::Leaf, .. }))
    }

    pub fn requires_grad(&self, var: Var) -> bool {
        self.nodes[var.0].requires_grad
    }

    fn push_raw(&mut self, op: Op, value: Array2<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node { op, value, requires_grad });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, op: Op) -> Var {
        let value = self.eval(&op);
        let requires_grad = self.operands(&op).iter().any(|v| self.nodes[v.0].requires_grad);
        self.push_raw(op, value, requires_grad)
    }

    fn check(&self, var: Var) -> Result<(), DiffError> {
        if var.0 < self.nodes.len() {
            Ok(())
        } else {
            Err(DiffError::UnknownVar(var.0))
        }
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<(), DiffError> {
        self.check(a)?;
        self.check(b)?;
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(DiffError::ShapeMismatch { op, left: sa, right: sb });
        }
        Ok(())
    }

    fn operands(&self, op: &Op) -> Vec<Var> {
        match *op {
            Op::Leaf | Op::Constant => vec![],
            Op::Add(a, b)
            | Op::Sub(a, b)
            | Op::Mul(a, b)
            | Op::Div(a, b)
            | Op::MatMul(a, b)
            | Op::AddBcast(a, b)
            | Op::MulBcast(a, b) => vec![a, b],
            Op::Neg(a)
            | Op::Scale(a, _)
            | Op::Offset(a, _)
            | Op::Tanh(a)
            | Op::Exp(a)
            | Op::Sin(a)
            | Op::Square(a)
            | Op::Abs(a)
            | Op::Sign(a)
            | Op::Clip(a, _, _)
            | Op::Transpose(a)
            | Op::Sum(a)
            | Op::Mean(a) => vec![a],
        }
    }

    fn eval(&self, op: &Op) -> Array2<T> {
        let v = |x: Var| &self.nodes[x.0].value;
        match *op {
            Op::Leaf | Op::Constant => unreachable!("inputs are never re-evaluated"),
            Op::Add(a, b) => zip_with(v(a), v(b), |x, y| x + y),
            Op::Sub(a, b) => zip_with(v(a), v(b), |x, y| x - y),
            Op::Mul(a, b) => zip_with(v(a), v(b), |x, y| x * y),
            Op::Div(a, b) => zip_with(v(a), v(b), |x, y| x / y),
            Op::Neg(a) => v(a).mapv(|x| -x),
            Op::Scale(a, c) => {
                let c = T::from_f64(c);
                v(a).mapv(|x| x * c)
            }
            Op::Offset(a, c) => {
                let c = T::from_f64(c);
                v(a).mapv(|x| x + c)
            }
            Op::Tanh(a) => v(a).mapv(Real::tanh),
            Op::Exp(a) => v(a).mapv(Real::exp),
            Op::Sin(a) => v(a).mapv(Real::sin),
            Op::Square(a) => v(a).mapv(|x| x * x),
            Op::Abs(a) => v(a).mapv(Real::abs),
            Op::Sign(a) => v(a).mapv(Real::sign),
            Op::Clip(a, lo, hi) => v(a).mapv(|x| {
                if x.primal() < lo {
                    T::from_f64(lo)
                } else if x.primal() > hi {
                    T::from_f64(hi)
                } else {
                    x
                }
            }),
            Op::MatMul(a, b) => v(a).dot(v(b)),
            Op::Transpose(a) => v(a).t().to_owned(),
            Op::Sum(a) => Array2::from_elem((1, 1), v(a).sum()),
            Op::Mean(a) => {
                let n = T::from_f64(v(a).len() as f64);
                Array2::from_elem((1, 1), v(a).sum() / n)
            }
            Op::AddBcast(a, b) => {
                let bb = v(b).broadcast(v(a).raw_dim()).expect("checked at record time");
                Zip::from(v(a)).and(&bb).map_collect(|&x, &y| x + y)
            }
            Op::MulBcast(a, b) => {
                let bb = v(b).broadcast(v(a).raw_dim()).expect("checked at record time");
                Zip::from(v(a)).and(&bb).map_collect(|&x, &y| x * y)
            }
        }
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, DiffError> {
        self.same_shape("add", a, b)?;
        Ok(self.push(Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, DiffError> {
        self.same_shape("sub", a, b)?;
        Ok(self.push(Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, DiffError> {
        self.same_shape("mul", a, b)?;
        Ok(self.push(Op::Mul(a, b)))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var, DiffError> {
        self.same_shape("div", a, b)?;
        Ok(self.push(Op::Div(a, b)))
    }

    pub fn neg(&mut self, a: Var) -> Result<Var, DiffError> {
        self.check(a)?;
        Ok(self.push(Op::Neg(a)))
    }

    /// Multiplication by a fixed scalar.
    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var, DiffError> {
        self.check(a)?;
        Ok(self.push(Op::Scale(a, c)))
    }

    /// Addition of a fixed scalar.
    pub fn offset(&mut self, a: Var, c: f64) -> Result<Var, DiffError> {
        self.check(a)?;
        Ok(self.push(Op::Offset(a, c)))
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var, DiffError> {
        self.check(a)?;
        Ok(self.push(Op::Tanh(a)))
    }

    pub fn exp(&mut self, a: Var) -> Result<Var, DiffError> {
        self.check(a)?;
        Ok(self.push(Op::Exp(a)))
    }

    pub fn sin(&mut self, a: Var) -> Result<Var, DiffError> {
        self.check(a)?;
        Ok(self.push(Op::Sin(a)))
    }

    pub fn square(&mut self, a: Var) -> Result<Var, DiffError> {
        self.check(a)?;
        Ok(self.push(Op::Square(a)))
    }

    pub fn abs(&mut self, a: Var) -> Result<Var, DiffError> {
        self.check(a)?;
        Ok(self.push(Op::Abs(a)))
    }

    pub fn sign(&mut self, a: Var) -> Result<Var, DiffError> {
        self.check(a)?;
        Ok(self.push(Op::Sign(a)))
    }

    /// Componentwise clamp to `[lo, hi]`; the gradient passes where
    /// `lo <= a <= hi`.
    pub fn clip(&mut self, a: Var, lo: f64, hi: f64) -> Result<Var, DiffError> {
        self.check(a)?;
        Ok(self.push(Op::Clip(a, lo, hi)))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, DiffError> {
        self.check(a)?;
        self.check(b)?;
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.1 != sb.0 {
            return Err(DiffError::ShapeMismatch { op: "matmul", left: sa, right: sb });
        }
        Ok(self.push(Op::MatMul(a, b)))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var, DiffError> {
        self.check(a)?;
        Ok(self.push(Op::Transpose(a)))
    }

    pub fn sum(&mut self, a: Var) -> Result<Var, DiffError> {
        self.check(a)?;
        Ok(self.push(Op::Sum(a)))
    }

    pub fn mean(&mut self, a: Var) -> Result<Var, DiffError> {
        self.check(a)?;
        if self.value(a).is_empty() {
            return Err(DiffError::EmptyReduction);
        }
        Ok(self.push(Op::Mean(a)))
    }

    /// `a + b` with `b` broadcast over rows, columns or both.
    pub fn add_bcast(&mut self, a: Var, b: Var) -> Result<Var, DiffError> {
        self.check(a)?;
        self.check(b)?;
        let (sa, sb) = (self.shape(a), self.shape(b));
        if !bcast_compatible(sa, sb) {
            return Err(DiffError::ShapeMismatch { op: "add_bcast", left: sa, right: sb });
        }
        Ok(self.push(Op::AddBcast(a, b)))
    }

    /// `a ⊙ b` with `b` broadcast over rows, columns or both.
    pub fn mul_bcast(&mut self, a: Var, b: Var) -> Result<Var, DiffError> {
        self.check(a)?;
        self.check(b)?;
        let (sa, sb) = (self.shape(a), self.shape(b));
        if !bcast_compatible(sa, sb) {
            return Err(DiffError::ShapeMismatch { op: "mul_bcast", left: sa, right: sb });
        }
        Ok(self.push(Op::MulBcast(a, b)))
    }

    /// Replaces the value of a leaf. Shapes must agree; call [`Tape::replay`]
    /// afterwards to refresh dependent nodes.
    pub fn set_leaf(&mut self, var: Var, value: Array2<T>) -> Result<(), DiffError> {
        self.check(var)?;
        if !self.is_leaf(var) {
            return Err(DiffError::MissingLeaf(var.0));
        }
        let expected = self.shape(var);
        if shape_of(&value) != expected {
            return Err(DiffError::ShapeMismatch {
                op: "set_leaf",
                left: expected,
                right: shape_of(&value),
            });
        }
        self.nodes[var.0].value = value;
        Ok(())
    }

    /// Re-evaluates every node that depends on a leaf, in recording order.
    /// Constant-only subgraphs keep their recorded values.
    pub fn replay(&mut self) {
        for i in 0..self.nodes.len() {
            let node = &self.nodes[i];
            if !node.requires_grad || matches!(node.op, Op::Leaf | Op::Constant) {
                continue;
            }
            let op = node.op.clone();
            let value = self.eval(&op);
            self.nodes[i].value = value;
        }
    }

    /// Reverse sweep from a `1×1` output.
    pub fn backward(&self, output: Var) -> Result<Gradients<T>, DiffError> {
        self.check(output)?;
        let shape = self.shape(output);
        if shape != (1, 1) {
            return Err(DiffError::NonScalarOutput { shape });
        }
        self.backward_with_seed(output, Array2::from_elem((1, 1), T::one()))
    }

    /// Reverse sweep seeded with an arbitrary cotangent of the output's shape.
    pub fn backward_with_seed(&self, output: Var, seed: Array2<T>) -> Result<Gradients<T>, DiffError> {
        self.check(output)?;
        let out_shape = self.shape(output);
        if shape_of(&seed) != out_shape {
            return Err(DiffError::ShapeMismatch {
                op: "backward_seed",
                left: out_shape,
                right: shape_of(&seed),
            });
        }
        let n = output.0 + 1;
        let mut grads: Vec<Option<Array2<T>>> = vec![None; n];
        grads[output.0] = Some(seed);
        for i in (0..n).rev() {
            let node = &self.nodes[i];
            if matches!(node.op, Op::Leaf | Op::Constant) || !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            let val = |x: Var| &self.nodes[x.0].value;
            let rg = |x: Var| self.nodes[x.0].requires_grad;
            match node.op {
                Op::Leaf | Op::Constant => unreachable!(),
                Op::Add(a, b) => {
                    if rg(b) {
                        accumulate(&mut grads[b.0], g.clone());
                    }
                    if rg(a) {
                        accumulate(&mut grads[a.0], g);
                    }
                }
                Op::Sub(a, b) => {
                    if rg(b) {
                        accumulate(&mut grads[b.0], g.mapv(|x| -x));
                    }
                    if rg(a) {
                        accumulate(&mut grads[a.0], g);
                    }
                }
                Op::Mul(a, b) => {
                    if rg(a) {
                        accumulate(&mut grads[a.0], zip_with(&g, val(b), |x, y| x * y));
                    }
                    if rg(b) {
                        accumulate(&mut grads[b.0], zip_with(&g, val(a), |x, y| x * y));
                    }
                }
                Op::Div(a, b) => {
                    if rg(a) {
                        accumulate(&mut grads[a.0], zip_with(&g, val(b), |x, y| x / y));
                    }
                    if rg(b) {
                        let q = &node.value;
                        let gb = Zip::from(&g)
                            .and(q)
                            .and(val(b))
                            .map_collect(|&gg, &qq, &bb| -(gg * qq / bb));
                        accumulate(&mut grads[b.0], gb);
                    }
                }
                Op::Neg(a) => accumulate(&mut grads[a.0], g.mapv(|x| -x)),
                Op::Scale(a, c) => {
                    let c = T::from_f64(c);
                    accumulate(&mut grads[a.0], g.mapv(|x| x * c));
                }
                Op::Offset(a, _) => accumulate(&mut grads[a.0], g),
                Op::Tanh(a) => {
                    let y = &node.value;
                    accumulate(&mut grads[a.0], zip_with(&g, y, |gg, yy| gg * (T::one() - yy * yy)));
                }
                Op::Exp(a) => accumulate(&mut grads[a.0], zip_with(&g, &node.value, |gg, yy| gg * yy)),
                Op::Sin(a) => accumulate(&mut grads[a.0], zip_with(&g, val(a), |gg, xx| gg * xx.cos())),
                Op::Square(a) => {
                    accumulate(&mut grads[a.0], zip_with(&g, val(a), |gg, xx| gg * (xx + xx)));
                }
                Op::Abs(a) => accumulate(&mut grads[a.0], zip_with(&g, val(a), |gg, xx| gg * xx.sign())),
                Op::Sign(_) => {}
                Op::Clip(a, lo, hi) => {
                    let ga = zip_with(&g, val(a), |gg, xx| {
                        let p = xx.primal();
                        if p >= lo && p <= hi {
                            gg
                        } else {
                            T::zero()
                        }
                    });
                    accumulate(&mut grads[a.0], ga);
                }
                Op::MatMul(a, b) => {
                    if rg(a) {
                        accumulate(&mut grads[a.0], g.dot(&val(b).t()));
                    }
                    if rg(b) {
                        accumulate(&mut grads[b.0], val(a).t().dot(&g));
                    }
                }
                Op::Transpose(a) => accumulate(&mut grads[a.0], g.t().to_owned()),
                Op::Sum(a) => {
                    let s = g[(0, 0)];
                    accumulate(&mut grads[a.0], Array2::from_elem(val(a).raw_dim(), s));
                }
                Op::Mean(a) => {
                    let s = g[(0, 0)] / T::from_f64(val(a).len() as f64);
                    accumulate(&mut grads[a.0], Array2::from_elem(val(a).raw_dim(), s));
                }
                Op::AddBcast(a, b) => {
                    if rg(b) {
                        accumulate(&mut grads[b.0], reduce_to(&g, shape_of(val(b))));
                    }
                    if rg(a) {
                        accumulate(&mut grads[a.0], g);
                    }
                }
                Op::MulBcast(a, b) => {
                    if rg(b) {
                        let ga = zip_with(&g, val(a), |x, y| x * y);
                        accumulate(&mut grads[b.0], reduce_to(&ga, shape_of(val(b))));
                    }
                    if rg(a) {
                        let bb = val(b).broadcast(g.raw_dim()).expect("checked at record time");
                        let ga = Zip::from(&g).and(&bb).map_collect(|&x, &y| x * y);
                        accumulate(&mut grads[a.0], ga);
                    }
                }
            }
        }
        let shapes = self.nodes[..n].iter().map(|nd| shape_of(&nd.value)).collect();
        // Only leaf gradients survive the sweep.
        for (i, slot) in grads.iter_mut().enumerate() {
            if !matches!(self.nodes[i].op, Op::Leaf) {
                *slot = None;
            }
        }
        Ok(Gradients { grads, shapes })
    }
}

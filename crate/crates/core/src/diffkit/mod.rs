//! Minimal differentiation engine.
//!
//! Reverse mode comes from [`Tape`]. Forward mode comes from running the same
//! tape over [`Dual`] elements, and running the reverse sweep of a dual tape
//! gives forward-over-reverse second derivatives along one direction.

mod real;
mod tape;

pub use real::{sign0, Dual, Real};
pub use tape::{Gradients, Tape, Var};

use ndarray::Array2;
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DiffError {
    #[error("shape mismatch in {op}: {left:?} vs {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: (usize, usize),
        right: (usize, usize),
    },
    #[error("gradient requested of a non-scalar output with shape {shape:?}")]
    NonScalarOutput { shape: (usize, usize) },
    #[error("node {0} is not a recorded leaf")]
    MissingLeaf(usize),
    #[error("node {0} does not exist on this tape")]
    UnknownVar(usize),
    #[error("reduction over an empty array")]
    EmptyReduction,
    #[error("expected a vector of length {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("axis {axis} out of range for a {dim}-dimensional input")]
    AxisOutOfRange { axis: usize, dim: usize },
}

/// Gradient of the scalar `output` with respect to each of `leaves`.
pub fn grad<T: Real>(tape: &Tape<T>, output: Var, leaves: &[Var]) -> Result<Vec<Array2<T>>, DiffError> {
    for &leaf in leaves {
        if !tape.is_leaf(leaf) {
            return Err(DiffError::MissingLeaf(leaf.index()));
        }
    }
    let grads = tape.backward(output)?;
    leaves
        .iter()
        .map(|&leaf| {
            grads
                .wrt(leaf)
                .ok_or(DiffError::MissingLeaf(leaf.index()))
        })
        .collect()
}

/// A map `R^n -> R^k` that can be recorded on a tape of any element type.
///
/// `record` receives the input as a `1×n` row and returns a `1×k` row.
pub trait VectorFunction {
    fn input_dim(&self) -> usize;
    fn output_dim(&self) -> usize;
    fn record<T: Real>(&self, tape: &mut Tape<T>, input: Var) -> Result<Var, DiffError>;
}

/// A scalar field `R^d -> R`, recorded from a `1×d` coordinate row.
pub trait ScalarField {
    fn dim(&self) -> usize;
    fn record<T: Real>(&self, tape: &mut Tape<T>, coord: Var) -> Result<Var, DiffError>;
}

fn row<T: Real>(values: impl IntoIterator<Item = T>) -> Array2<T> {
    let v: Vec<T> = values.into_iter().collect();
    let n = v.len();
    Array2::from_shape_vec((1, n), v).expect("row shape")
}

/// Recorded linearization of a [`VectorFunction`] at a fixed point.
///
/// Both tapes are recorded once; each product only replays them.
pub struct Linearization {
    forward: Tape<Dual>,
    forward_in: Var,
    forward_out: Var,
    reverse: Tape<f64>,
    reverse_in: Var,
    reverse_out: Var,
    point: Vec<f64>,
    value: Vec<f64>,
}

impl Linearization {
    pub fn new<F: VectorFunction>(func: &F, point: &[f64]) -> Result<Self, DiffError> {
        if point.len() != func.input_dim() {
            return Err(DiffError::DimensionMismatch { expected: func.input_dim(), got: point.len() });
        }
        let mut forward = Tape::<Dual>::new();
        let forward_in = forward.leaf(row(point.iter().map(|&p| Dual::constant(p))));
        let forward_out = func.record(&mut forward, forward_in)?;
        let mut reverse = Tape::<f64>::new();
        let reverse_in = reverse.leaf(row(point.iter().copied()));
        let reverse_out = func.record(&mut reverse, reverse_in)?;
        let value: Vec<f64> = reverse.value(reverse_out).iter().copied().collect();
        if value.len() != func.output_dim() {
            return Err(DiffError::DimensionMismatch { expected: func.output_dim(), got: value.len() });
        }
        Ok(Self {
            forward,
            forward_in,
            forward_out,
            reverse,
            reverse_in,
            reverse_out,
            point: point.to_vec(),
            value,
        })
    }

    pub fn input_dim(&self) -> usize {
        self.point.len()
    }

    pub fn output_dim(&self) -> usize {
        self.value.len()
    }

    /// Function value at the linearization point.
    pub fn value(&self) -> &[f64] {
        &self.value
    }

    /// `J·v`.
    pub fn jvp(&mut self, direction: &[f64]) -> Result<Vec<f64>, DiffError> {
        if direction.len() != self.input_dim() {
            return Err(DiffError::DimensionMismatch { expected: self.input_dim(), got: direction.len() });
        }
        let input = row(self.point.iter().zip(direction).map(|(&p, &d)| Dual::new(p, d)));
        self.forward.set_leaf(self.forward_in, input)?;
        self.forward.replay();
        Ok(self.forward.value(self.forward_out).iter().map(|d| d.tangent).collect())
    }

    /// `Jᵀ·w`.
    pub fn vjp(&self, covector: &[f64]) -> Result<Vec<f64>, DiffError> {
        if covector.len() != self.output_dim() {
            return Err(DiffError::DimensionMismatch { expected: self.output_dim(), got: covector.len() });
        }
        let shape = self.reverse.shape(self.reverse_out);
        let seed = Array2::from_shape_vec(shape, covector.to_vec()).expect("seed shape");
        let grads = self.reverse.backward_with_seed(self.reverse_out, seed)?;
        let g = grads.wrt(self.reverse_in).ok_or(DiffError::MissingLeaf(self.reverse_in.index()))?;
        Ok(g.iter().copied().collect())
    }

    /// Dense Jacobian built column by column from `jvp`.
    pub fn dense_jacobian(&mut self) -> Result<Array2<f64>, DiffError> {
        let (n, k) = (self.input_dim(), self.output_dim());
        let mut jac = Array2::zeros((k, n));
        let mut e = vec![0.0; n];
        for j in 0..n {
            e[j] = 1.0;
            let col = self.jvp(&e)?;
            e[j] = 0.0;
            for (i, c) in col.into_iter().enumerate() {
                jac[(i, j)] = c;
            }
        }
        Ok(jac)
    }
}

/// Directional derivative `J·v` of `func` at `point`.
pub fn jvp<F: VectorFunction>(func: &F, point: &[f64], direction: &[f64]) -> Result<Vec<f64>, DiffError> {
    Linearization::new(func, point)?.jvp(direction)
}

/// Gradient covector `Jᵀ·w` of `func` at `point`.
pub fn vjp<F: VectorFunction>(func: &F, point: &[f64], covector: &[f64]) -> Result<Vec<f64>, DiffError> {
    Linearization::new(func, point)?.vjp(covector)
}

/// `∂²u/∂x_axis²` at `coord`, by forward-over-reverse.
///
/// The field is recorded on a dual tape with the coordinate tangent set to
/// the unit vector of `axis`; the reverse sweep then carries `∇u` in the
/// primal and `H·e_axis` in the tangent.
pub fn second_derivative<F: ScalarField>(field: &F, coord: &[f64], axis: usize) -> Result<f64, DiffError> {
    let dim = field.dim();
    if coord.len() != dim {
        return Err(DiffError::DimensionMismatch { expected: dim, got: coord.len() });
    }
    if axis >= dim {
        return Err(DiffError::AxisOutOfRange { axis, dim });
    }
    let mut tape = Tape::<Dual>::new();
    let x = tape.leaf(row(coord
        .iter()
        .enumerate()
        .map(|(i, &c)| Dual::new(c, if i == axis { 1.0 } else { 0.0 }))));
    let u = field.record(&mut tape, x)?;
    let g = grad(&tape, u, &[x])?;
    Ok(g[0][(0, axis)].tangent)
}

/// `∂u/∂x_axis` at `coord`, by reverse mode.
pub fn first_derivative<F: ScalarField>(field: &F, coord: &[f64], axis: usize) -> Result<f64, DiffError> {
    let dim = field.dim();
    if coord.len() != dim {
        return Err(DiffError::DimensionMismatch { expected: dim, got: coord.len() });
    }
    if axis >= dim {
        return Err(DiffError::AxisOutOfRange { axis, dim });
    }
    let mut tape = Tape::<f64>::new();
    let x = tape.leaf(row(coord.iter().copied()));
    let u = field.record(&mut tape, x)?;
    Ok(grad(&tape, u, &[x])?[0][(0, axis)])
}

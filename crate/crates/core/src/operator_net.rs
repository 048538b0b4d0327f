//! DeepONet: a branch net encodes the sensor values of the input function,
//! a trunk net encodes evaluation coordinates, and the two are merged by an
//! inner product plus a shared scalar bias.
//!
//! Coordinate derivatives of the trunk are propagated as Taylor jets built
//! from tape primitives, so one reverse sweep differentiates physics
//! residuals with respect to the parameters.

use std::fs;
use std::path::Path;

use ndarray::{Array2, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::diffkit::{self, DiffError, Gradients, Real, ScalarField, Tape, Var, VectorFunction};

#[derive(Debug, Error)]
pub enum NetError {
    #[error("invalid architecture: {0}")]
    InvalidArch(String),
    #[error("{what}: expected {expected}, got {got}")]
    Shape { what: &'static str, expected: usize, got: usize },
    #[error(transparent)]
    Diff(#[from] DiffError),
    #[error("checkpoint i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("checkpoint format: {0}")]
    Format(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    #[default]
    Tanh,
}

/// Hard-constraint output mask.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Transform {
    #[default]
    None,
    /// `y(1−y)`.
    #[serde(rename = "dirichlet_1d")]
    Dirichlet1d,
    /// `x(1−x)·y(1−y)`.
    #[serde(rename = "dirichlet_2d_space")]
    Dirichlet2dSpace,
    /// `t·x(1−x)` for coordinates `(x, t)`.
    ZeroIcDirichletBc,
}

impl Transform {
    pub fn coord_dim(self) -> Option<usize> {
        match self {
            Transform::None => None,
            Transform::Dirichlet1d => Some(1),
            Transform::Dirichlet2dSpace | Transform::ZeroIcDirichletBc => Some(2),
        }
    }

    /// Mask value with first and second derivatives along each axis.
    pub fn mask_jet(self, coord: &[f64]) -> MaskJet {
        match self {
            Transform::None => MaskJet { value: 1.0, d1: [0.0; 2], d2: [0.0; 2] },
            Transform::Dirichlet1d => {
                let y = coord[0];
                MaskJet { value: y * (1.0 - y), d1: [1.0 - 2.0 * y, 0.0], d2: [-2.0, 0.0] }
            }
            Transform::Dirichlet2dSpace => {
                let (x, y) = (coord[0], coord[1]);
                let (px, py) = (x * (1.0 - x), y * (1.0 - y));
                MaskJet {
                    value: px * py,
                    d1: [(1.0 - 2.0 * x) * py, px * (1.0 - 2.0 * y)],
                    d2: [-2.0 * py, -2.0 * px],
                }
            }
            Transform::ZeroIcDirichletBc => {
                let (x, t) = (coord[0], coord[1]);
                let px = x * (1.0 - x);
                MaskJet { value: t * px, d1: [t * (1.0 - 2.0 * x), px], d2: [-2.0 * t, 0.0] }
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MaskJet {
    pub value: f64,
    pub d1: [f64; 2],
    pub d2: [f64; 2],
}

/// Layer widths, activation and output transform.
///
/// `branch_widths[0]` is the sensor count and `trunk_widths[0]` the
/// coordinate dimension; both nets end in the latent width `p`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArchSpec {
    pub branch_widths: Vec<usize>,
    pub trunk_widths: Vec<usize>,
    #[serde(default)]
    pub activation: Activation,
    #[serde(default)]
    pub transform: Transform,
}

pub const DEFAULT_WIDTH: usize = 128;
pub const DEFAULT_DEPTH: usize = 3;

impl ArchSpec {
    /// Three layers of 128 units in each net, `p = 128`.
    pub fn standard(sensor_count: usize, coord_dim: usize, transform: Transform) -> Self {
        let mut branch_widths = vec![sensor_count];
        let mut trunk_widths = vec![coord_dim];
        branch_widths.extend([DEFAULT_WIDTH; DEFAULT_DEPTH]);
        trunk_widths.extend([DEFAULT_WIDTH; DEFAULT_DEPTH]);
        Self { branch_widths, trunk_widths, activation: Activation::Tanh, transform }
    }

    pub fn sensor_count(&self) -> usize {
        self.branch_widths[0]
    }

    pub fn coord_dim(&self) -> usize {
        self.trunk_widths[0]
    }

    pub fn latent_dim(&self) -> usize {
        *self.branch_widths.last().expect("validated")
    }

    pub fn validate(&self) -> Result<(), NetError> {
        if self.branch_widths.len() < 2 || self.trunk_widths.len() < 2 {
            return Err(NetError::InvalidArch("each net needs an input width and at least one layer".into()));
        }
        if self.branch_widths.iter().chain(&self.trunk_widths).any(|&w| w == 0) {
            return Err(NetError::InvalidArch("widths must be positive".into()));
        }
        if self.branch_widths.last() != self.trunk_widths.last() {
            return Err(NetError::InvalidArch(format!(
                "branch output width {} differs from trunk output width {}",
                self.branch_widths.last().unwrap(),
                self.trunk_widths.last().unwrap()
            )));
        }
        if !(1..=2).contains(&self.coord_dim()) {
            return Err(NetError::InvalidArch(format!("coordinate dimension {} not in 1..=2", self.coord_dim())));
        }
        if let Some(d) = self.transform.coord_dim() {
            if d != self.coord_dim() {
                return Err(NetError::InvalidArch(format!(
                    "transform {:?} needs {d}-D coordinates, trunk takes {}",
                    self.transform,
                    self.coord_dim()
                )));
            }
        }
        Ok(())
    }
}

/// Fully connected layer, `x·W + b` with `W` of shape `in×out`.
#[derive(Clone, Debug, PartialEq)]
pub struct Dense {
    pub weight: Array2<f64>,
    pub bias: Array2<f64>,
}

/// All trainable parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct DeepOnetParams {
    pub arch: ArchSpec,
    pub branch: Vec<Dense>,
    pub trunk: Vec<Dense>,
    pub output_bias: f64,
}

/// Tape handles of a registered parameter set.
#[derive(Clone, Debug)]
pub struct ParamVars {
    pub branch: Vec<(Var, Var)>,
    pub trunk: Vec<(Var, Var)>,
    pub output_bias: Var,
}

impl ParamVars {
    /// Handles in block order (see [`DeepOnetParams::blocks`]).
    pub fn blocks(&self) -> Vec<Var> {
        let mut out = Vec::new();
        for &(w, b) in self.branch.iter().chain(&self.trunk) {
            out.push(w);
            out.push(b);
        }
        out.push(self.output_bias);
        out
    }
}

/// Which coordinate derivatives to propagate, per axis.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct JetRequest {
    pub first: [bool; 2],
    pub second: [bool; 2],
}

impl JetRequest {
    pub const VALUE: JetRequest = JetRequest { first: [false; 2], second: [false; 2] };

    pub fn first(axis: usize) -> Self {
        let mut r = Self::default();
        r.first[axis] = true;
        r
    }

    pub fn second(axis: usize) -> Self {
        let mut r = Self::default();
        r.first[axis] = true;
        r.second[axis] = true;
        r
    }

    pub fn union(self, other: JetRequest) -> Self {
        let mut r = self;
        for a in 0..2 {
            r.first[a] |= other.first[a];
            r.second[a] |= other.second[a];
        }
        r
    }

    fn needs_first(&self, axis: usize) -> bool {
        self.first[axis] || self.second[axis]
    }
}

/// Trunk output and its coordinate jets, each `points×p`.
/// `None` marks an identically zero lane.
#[derive(Clone, Debug)]
pub struct TrunkJets {
    pub value: Var,
    pub d1: [Option<Var>; 2],
    pub d2: [Option<Var>; 2],
}

/// Network output over a batch, each entry `functions×points`.
#[derive(Clone, Debug)]
pub struct FieldJets {
    pub value: Var,
    pub d1: [Option<Var>; 2],
    pub d2: [Option<Var>; 2],
}

impl FieldJets {
    pub fn d1(&self, axis: usize) -> Result<Var, NetError> {
        self.d1[axis].ok_or_else(|| NetError::InvalidArch(format!("first derivative along axis {axis} not recorded")))
    }

    pub fn d2(&self, axis: usize) -> Result<Var, NetError> {
        self.d2[axis].ok_or_else(|| NetError::InvalidArch(format!("second derivative along axis {axis} not recorded")))
    }
}

fn mat<T: Real>(a: &Array2<f64>) -> Array2<T> {
    a.mapv(T::from_f64)
}

fn opt_add<T: Real>(tape: &mut Tape<T>, a: Option<Var>, b: Option<Var>) -> Result<Option<Var>, DiffError> {
    Ok(match (a, b) {
        (Some(a), Some(b)) => Some(tape.add(a, b)?),
        (x, None) | (None, x) => x,
    })
}

/// Evaluation coordinates as a `points×dim` array from a list of points.
pub fn coords_from_points(points: &[Vec<f64>]) -> Array2<f64> {
    let dim = points.first().map_or(1, |p| p.len());
    Array2::from_shape_fn((points.len(), dim), |(i, j)| points[i][j])
}

/// Row vector (`1×n`) from a slice.
pub fn row_vector(values: &[f64]) -> Array2<f64> {
    Array2::from_shape_vec((1, values.len()), values.to_vec()).expect("row shape")
}

impl DeepOnetParams {
    /// Glorot-normal weights, zero biases, zero output bias.
    pub fn init(arch: &ArchSpec, seed: u64) -> Result<Self, NetError> {
        arch.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut layers = |widths: &[usize]| -> Vec<Dense> {
            widths
                .windows(2)
                .map(|w| {
                    let (fan_in, fan_out) = (w[0], w[1]);
                    let std = (2.0 / (fan_in + fan_out) as f64).sqrt();
                    let dist = Normal::new(0.0, std).expect("finite std");
                    Dense {
                        weight: Array2::from_shape_simple_fn((fan_in, fan_out), || dist.sample(&mut rng)),
                        bias: Array2::zeros((1, fan_out)),
                    }
                })
                .collect()
        };
        let branch = layers(&arch.branch_widths);
        let trunk = layers(&arch.trunk_widths);
        Ok(Self { arch: arch.clone(), branch, trunk, output_bias: 0.0 })
    }

    /// Same architecture with every parameter set to zero.
    pub fn zeros(arch: &ArchSpec) -> Result<Self, NetError> {
        let mut p = Self::init(arch, 0)?;
        for layer in p.branch.iter_mut().chain(p.trunk.iter_mut()) {
            layer.weight.fill(0.0);
        }
        Ok(p)
    }

    pub fn sensor_count(&self) -> usize {
        self.arch.sensor_count()
    }

    pub fn coord_dim(&self) -> usize {
        self.arch.coord_dim()
    }

    /// Parameter blocks in a fixed order: branch `(W, b)` per layer, trunk
    /// `(W, b)` per layer, then the `1×1` output bias.
    pub fn blocks(&self) -> Vec<Array2<f64>> {
        let mut out = Vec::new();
        for layer in self.branch.iter().chain(&self.trunk) {
            out.push(layer.weight.clone());
            out.push(layer.bias.clone());
        }
        out.push(Array2::from_elem((1, 1), self.output_bias));
        out
    }

    pub fn block_names(&self) -> Vec<String> {
        let mut out = Vec::new();
        for (net, layers) in [("branch", &self.branch), ("trunk", &self.trunk)] {
            for i in 0..layers.len() {
                out.push(format!("{net}.{i}.weight"));
                out.push(format!("{net}.{i}.bias"));
            }
        }
        out.push("output_bias".into());
        out
    }

    /// Inverse of [`DeepOnetParams::blocks`].
    pub fn with_blocks(&self, blocks: &[Array2<f64>]) -> Result<Self, NetError> {
        let expected = self.blocks();
        if blocks.len() != expected.len() {
            return Err(NetError::Shape { what: "parameter block count", expected: expected.len(), got: blocks.len() });
        }
        for (a, b) in blocks.iter().zip(&expected) {
            if a.dim() != b.dim() {
                return Err(NetError::Shape { what: "parameter block size", expected: b.len(), got: a.len() });
            }
        }
        let mut out = self.clone();
        let mut it = blocks.iter();
        for layer in out.branch.iter_mut().chain(out.trunk.iter_mut()) {
            layer.weight = it.next().unwrap().clone();
            layer.bias = it.next().unwrap().clone();
        }
        out.output_bias = it.next().unwrap()[(0, 0)];
        Ok(out)
    }

    pub fn parameter_count(&self) -> usize {
        self.blocks().iter().map(|b| b.len()).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.blocks().iter().all(|b| b.iter().all(|v| v.is_finite()))
    }

    /// Puts the parameters on `tape`, as leaves when `trainable`.
    pub fn register<T: Real>(&self, tape: &mut Tape<T>, trainable: bool) -> ParamVars {
        let mut put = |a: &Array2<f64>| if trainable { tape.leaf(mat(a)) } else { tape.constant(mat(a)) };
        let branch = self.branch.iter().map(|l| (put(&l.weight), put(&l.bias))).collect();
        let trunk = self.trunk.iter().map(|l| (put(&l.weight), put(&l.bias))).collect();
        let output_bias = put(&Array2::from_elem((1, 1), self.output_bias));
        ParamVars { branch, trunk, output_bias }
    }

    /// Gradient blocks for the parameters registered as `vars`.
    pub fn collect_gradients(&self, grads: &mut Gradients<f64>, vars: &ParamVars) -> Vec<Array2<f64>> {
        vars.blocks()
            .into_iter()
            .map(|v| grads.take(v).expect("parameter registered before the output"))
            .collect()
    }

    /// Branch net on a `functions×m` input. The last layer is linear.
    pub fn record_branch<T: Real>(&self, tape: &mut Tape<T>, vars: &ParamVars, inputs: Var) -> Result<Var, NetError> {
        let (_, m) = tape.shape(inputs);
        if m != self.sensor_count() {
            return Err(NetError::Shape { what: "sensor count", expected: self.sensor_count(), got: m });
        }
        let mut h = inputs;
        let last = vars.branch.len() - 1;
        for (i, &(w, b)) in vars.branch.iter().enumerate() {
            let z = tape.matmul(h, w)?;
            let z = tape.add_bcast(z, b)?;
            h = if i == last { z } else { tape.tanh(z)? };
        }
        Ok(h)
    }

    /// Trunk net with coordinate jets. Every layer, including the last, is
    /// followed by `tanh`.
    pub fn record_trunk<T: Real>(
        &self,
        tape: &mut Tape<T>,
        vars: &ParamVars,
        coords: &Array2<f64>,
        request: JetRequest,
    ) -> Result<TrunkJets, NetError> {
        let (n_pts, dim) = coords.dim();
        if dim != self.coord_dim() {
            return Err(NetError::Shape { what: "coordinate dimension", expected: self.coord_dim(), got: dim });
        }
        let y = tape.constant(mat(coords));
        let (w0, b0) = vars.trunk[0];
        let z = tape.matmul(y, w0)?;
        let mut z0 = tape.add_bcast(z, b0)?;
        let mut z1: [Option<Var>; 2] = [None; 2];
        let mut z2: [Option<Var>; 2] = [None; 2];
        #[allow(clippy::needless_range_loop)]
        for axis in 0..dim {
            if request.needs_first(axis) {
                let sel = Array2::from_shape_fn((n_pts, dim), |(_, j)| if j == axis { 1.0 } else { 0.0 });
                let sel = tape.constant(mat(&sel));
                z1[axis] = Some(tape.matmul(sel, w0)?);
            }
        }
        let n_layers = vars.trunk.len();
        for layer in 0..n_layers {
            if layer > 0 {
                let (w, b) = vars.trunk[layer];
                let z = tape.matmul(z0, w)?;
                z0 = tape.add_bcast(z, b)?;
                for axis in 0..dim {
                    if let Some(h1) = z1[axis] {
                        z1[axis] = Some(tape.matmul(h1, w)?);
                    }
                    if let Some(h2) = z2[axis] {
                        z2[axis] = Some(tape.matmul(h2, w)?);
                    }
                }
            }
            // tanh with jets: h' = s·z', h'' = s·z'' − 2h·s·z'², s = 1 − h².
            let h = tape.tanh(z0)?;
            let needs_slope = z1.iter().any(Option::is_some);
            if needs_slope {
                let hsq = tape.square(h)?;
                let neg = tape.scale(hsq, -1.0)?;
                let slope = tape.offset(neg, 1.0)?;
                for axis in 0..dim {
                    let Some(d1) = z1[axis] else { continue };
                    let h1 = tape.mul(slope, d1)?;
                    if request.second[axis] {
                        let d1sq = tape.square(d1)?;
                        let hs = tape.mul(h, slope)?;
                        let curv = tape.mul(hs, d1sq)?;
                        let curv = tape.scale(curv, -2.0)?;
                        let lin = match z2[axis] {
                            Some(d2) => Some(tape.mul(slope, d2)?),
                            None => None,
                        };
                        z2[axis] = opt_add(tape, lin, Some(curv))?;
                    }
                    z1[axis] = Some(h1);
                }
            }
            z0 = h;
        }
        Ok(TrunkJets { value: z0, d1: z1, d2: z2 })
    }

    /// Merges branch features `functions×p` with trunk jets and applies the
    /// output transform, producing `functions×points` jets.
    pub fn record_merge<T: Real>(
        &self,
        tape: &mut Tape<T>,
        output_bias: Var,
        branch_out: Var,
        trunk: &TrunkJets,
        coords: &Array2<f64>,
    ) -> Result<FieldJets, NetError> {
        let tv = tape.transpose(trunk.value)?;
        let raw = tape.matmul(branch_out, tv)?;
        let raw = tape.add_bcast(raw, output_bias)?;
        let mut raw1: [Option<Var>; 2] = [None; 2];
        let mut raw2: [Option<Var>; 2] = [None; 2];
        for axis in 0..2 {
            if let Some(t1) = trunk.d1[axis] {
                let t = tape.transpose(t1)?;
                raw1[axis] = Some(tape.matmul(branch_out, t)?);
            }
            if let Some(t2) = trunk.d2[axis] {
                let t = tape.transpose(t2)?;
                raw2[axis] = Some(tape.matmul(branch_out, t)?);
            }
        }
        let transform = self.arch.transform;
        if transform == Transform::None {
            return Ok(FieldJets { value: raw, d1: raw1, d2: raw2 });
        }
        let n_pts = coords.nrows();
        let jets: Vec<MaskJet> = coords.axis_iter(Axis(0)).map(|c| transform.mask_jet(&c.to_vec())).collect();
        let row = |f: &dyn Fn(&MaskJet) -> f64| -> Array2<T> {
            Array2::from_shape_fn((1, n_pts), |(_, j)| T::from_f64(f(&jets[j])))
        };
        let m0 = tape.constant(row(&|j| j.value));
        let value = tape.mul_bcast(raw, m0)?;
        let mut d1: [Option<Var>; 2] = [None; 2];
        let mut d2: [Option<Var>; 2] = [None; 2];
        for axis in 0..2 {
            let Some(r1) = raw1[axis] else { continue };
            let ma = tape.constant(row(&|j| j.d1[axis]));
            let a = tape.mul_bcast(raw, ma)?;
            let b = tape.mul_bcast(r1, m0)?;
            d1[axis] = Some(tape.add(a, b)?);
            if let Some(r2) = raw2[axis] {
                let maa = tape.constant(row(&|j| j.d2[axis]));
                let t0 = tape.mul_bcast(raw, maa)?;
                let ma2 = tape.constant(row(&|j| 2.0 * j.d1[axis]));
                let t1 = tape.mul_bcast(r1, ma2)?;
                let t2 = tape.mul_bcast(r2, m0)?;
                let s = tape.add(t0, t1)?;
                d2[axis] = Some(tape.add(s, t2)?);
            }
        }
        Ok(FieldJets { value, d1, d2 })
    }

    /// Full recording: branch on `inputs`, trunk on `coords`.
    pub fn record_field<T: Real>(
        &self,
        tape: &mut Tape<T>,
        vars: &ParamVars,
        inputs: Var,
        coords: &Array2<f64>,
        request: JetRequest,
    ) -> Result<FieldJets, NetError> {
        let b = self.record_branch(tape, vars, inputs)?;
        let t = self.record_trunk(tape, vars, coords, request)?;
        self.record_merge(tape, vars.output_bias, b, &t, coords)
    }

    /// Trunk jets evaluated with frozen parameters.
    pub fn trunk_features(&self, coords: &Array2<f64>, request: JetRequest) -> Result<TrunkFeatures, NetError> {
        let mut tape = Tape::<f64>::new();
        let vars = self.register(&mut tape, false);
        let jets = self.record_trunk(&mut tape, &vars, coords, request)?;
        let grab = |v: Option<Var>| v.map(|v| tape.value(v).clone());
        Ok(TrunkFeatures {
            coords: coords.clone(),
            value: tape.value(jets.value).clone(),
            d1: [grab(jets.d1[0]), grab(jets.d1[1])],
            d2: [grab(jets.d2[0]), grab(jets.d2[1])],
        })
    }

    /// Network output `functions×points` for a batch of inputs.
    pub fn forward_batch(&self, inputs: &Array2<f64>, coords: &Array2<f64>) -> Result<Array2<f64>, NetError> {
        let mut tape = Tape::<f64>::new();
        let vars = self.register(&mut tape, false);
        let x = tape.constant(inputs.clone());
        let field = self.record_field(&mut tape, &vars, x, coords, JetRequest::VALUE)?;
        Ok(tape.value(field.value).clone())
    }

    /// `G(f)(y)` at every row of `coords`.
    pub fn forward(&self, f: &[f64], coords: &Array2<f64>) -> Result<Vec<f64>, NetError> {
        let out = self.forward_batch(&row_vector(f), coords)?;
        Ok(out.iter().copied().collect())
    }

    /// Gradient with respect to the sensor values of a scalar functional of
    /// the outputs. `functional` receives the `1×points` output row.
    pub fn forward_grad_f(
        &self,
        f: &[f64],
        coords: &Array2<f64>,
        functional: impl FnOnce(&mut Tape<f64>, Var) -> Result<Var, DiffError>,
    ) -> Result<Vec<f64>, NetError> {
        let mut tape = Tape::<f64>::new();
        let vars = self.register(&mut tape, false);
        let x = tape.leaf(row_vector(f));
        let field = self.record_field(&mut tape, &vars, x, coords, JetRequest::VALUE)?;
        let out = functional(&mut tape, field.value)?;
        let g = diffkit::grad(&tape, out, &[x])?;
        Ok(g[0].iter().copied().collect())
    }

    /// `∂²u/∂y_axis²` at one coordinate, by forward-over-reverse.
    pub fn second_coordinate_derivative(&self, f: &[f64], coord: &[f64], axis: usize) -> Result<f64, NetError> {
        self.check_input(f)?;
        Ok(diffkit::second_derivative(&PointField { params: self, f }, coord, axis)?)
    }

    /// `∂u/∂y_axis` at one coordinate, by reverse mode.
    pub fn first_coordinate_derivative(&self, f: &[f64], coord: &[f64], axis: usize) -> Result<f64, NetError> {
        self.check_input(f)?;
        Ok(diffkit::first_derivative(&PointField { params: self, f }, coord, axis)?)
    }

    fn check_input(&self, f: &[f64]) -> Result<(), NetError> {
        if f.len() != self.sensor_count() {
            return Err(NetError::Shape { what: "sensor count", expected: self.sensor_count(), got: f.len() });
        }
        Ok(())
    }
}

/// Frozen trunk outputs on a coordinate set.
#[derive(Clone, Debug)]
pub struct TrunkFeatures {
    pub coords: Array2<f64>,
    pub value: Array2<f64>,
    pub d1: [Option<Array2<f64>>; 2],
    pub d2: [Option<Array2<f64>>; 2],
}

impl TrunkFeatures {
    /// Records the features as constants.
    pub fn record<T: Real>(&self, tape: &mut Tape<T>) -> TrunkJets {
        let mut put = |a: &Option<Array2<f64>>| a.as_ref().map(|a| tape.constant(mat(a)));
        let d1 = [put(&self.d1[0]), put(&self.d1[1])];
        let d2 = [put(&self.d2[0]), put(&self.d2[1])];
        let value = tape.constant(mat(&self.value));
        TrunkJets { value, d1, d2 }
    }
}

/// The network at a fixed input function as a field of the coordinates.
struct PointField<'a> {
    params: &'a DeepOnetParams,
    f: &'a [f64],
}

impl ScalarField for PointField<'_> {
    fn dim(&self) -> usize {
        self.params.coord_dim()
    }

    fn record<T: Real>(&self, tape: &mut Tape<T>, coord: Var) -> Result<Var, DiffError> {
        let p = self.params;
        let vars = p.register(tape, false);
        let x = tape.constant(mat(&row_vector(self.f)));
        let b = p.record_branch(tape, &vars, x).map_err(into_diff)?;
        let mut h = coord;
        for &(w, bias) in &vars.trunk {
            let z = tape.matmul(h, w)?;
            let z = tape.add_bcast(z, bias)?;
            h = tape.tanh(z)?;
        }
        let ht = tape.transpose(h)?;
        let raw = tape.matmul(b, ht)?;
        let raw = tape.add(raw, vars.output_bias)?;
        let dim = p.coord_dim();
        let component = |tape: &mut Tape<T>, axis: usize| -> Result<Var, DiffError> {
            let sel = Array2::from_shape_fn((dim, 1), |(i, _)| if i == axis { T::one() } else { T::zero() });
            let sel = tape.constant(sel);
            tape.matmul(coord, sel)
        };
        // s(1−s) = s − s².
        let bump = |tape: &mut Tape<T>, s: Var| -> Result<Var, DiffError> {
            let sq = tape.square(s)?;
            tape.sub(s, sq)
        };
        match p.arch.transform {
            Transform::None => Ok(raw),
            Transform::Dirichlet1d => {
                let y = component(tape, 0)?;
                let m = bump(tape, y)?;
                tape.mul(raw, m)
            }
            Transform::Dirichlet2dSpace => {
                let x = component(tape, 0)?;
                let y = component(tape, 1)?;
                let mx = bump(tape, x)?;
                let my = bump(tape, y)?;
                let m = tape.mul(mx, my)?;
                tape.mul(raw, m)
            }
            Transform::ZeroIcDirichletBc => {
                let x = component(tape, 0)?;
                let t = component(tape, 1)?;
                let mx = bump(tape, x)?;
                let m = tape.mul(t, mx)?;
                tape.mul(raw, m)
            }
        }
    }
}

fn into_diff(e: NetError) -> DiffError {
    match e {
        NetError::Diff(d) => d,
        NetError::Shape { expected, got, .. } => DiffError::DimensionMismatch { expected, got },
        other => panic!("unexpected error while recording a point field: {other}"),
    }
}

/// The map `f ↦ (G(f)(y₁), …, G(f)(yₙ))` on a fixed grid, with the trunk
/// evaluated once.
pub struct OperatorMap<'a> {
    params: &'a DeepOnetParams,
    trunk: TrunkFeatures,
}

impl<'a> OperatorMap<'a> {
    pub fn new(params: &'a DeepOnetParams, coords: &Array2<f64>) -> Result<Self, NetError> {
        let trunk = params.trunk_features(coords, JetRequest::VALUE)?;
        Ok(Self { params, trunk })
    }

    pub fn coords(&self) -> &Array2<f64> {
        &self.trunk.coords
    }

    pub fn params(&self) -> &DeepOnetParams {
        self.params
    }

    pub fn trunk(&self) -> &TrunkFeatures {
        &self.trunk
    }

    /// Outputs for a `functions×m` batch.
    pub fn eval_batch(&self, inputs: &Array2<f64>) -> Result<Array2<f64>, NetError> {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(inputs.clone());
        let out = self.record_batch(&mut tape, x)?;
        Ok(tape.value(out).clone())
    }

    pub fn eval(&self, f: &[f64]) -> Result<Vec<f64>, NetError> {
        Ok(self.eval_batch(&row_vector(f))?.iter().copied().collect())
    }

    /// Records the map on a batch; output is `functions×points`.
    pub fn record_batch<T: Real>(&self, tape: &mut Tape<T>, inputs: Var) -> Result<Var, NetError> {
        let vars = self.params.register(tape, false);
        let b = self.params.record_branch(tape, &vars, inputs)?;
        let t = self.trunk.record(tape);
        Ok(self.params.record_merge(tape, vars.output_bias, b, &t, &self.trunk.coords)?.value)
    }
}

impl VectorFunction for OperatorMap<'_> {
    fn input_dim(&self) -> usize {
        self.params.sensor_count()
    }

    fn output_dim(&self) -> usize {
        self.trunk.coords.nrows()
    }

    fn record<T: Real>(&self, tape: &mut Tape<T>, input: Var) -> Result<Var, DiffError> {
        self.record_batch(tape, input).map_err(into_diff)
    }
}

/// Parameters plus run metadata, as persisted on disk.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub params: DeepOnetParams,
    pub seed: u64,
    pub step: u64,
}

const CHECKPOINT_FORMAT: &str = "stablepde-deeponet";
const CHECKPOINT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct MatrixRecord {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct LayerRecord {
    weight: MatrixRecord,
    bias: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CheckpointRecord {
    format: String,
    version: u32,
    arch: ArchSpec,
    seed: u64,
    step: u64,
    output_bias: f64,
    branch: Vec<LayerRecord>,
    trunk: Vec<LayerRecord>,
}

impl Checkpoint {
    pub fn to_json(&self) -> Result<String, NetError> {
        let layer = |l: &Dense| LayerRecord {
            weight: MatrixRecord { rows: l.weight.nrows(), cols: l.weight.ncols(), data: l.weight.iter().copied().collect() },
            bias: l.bias.iter().copied().collect(),
        };
        let rec = CheckpointRecord {
            format: CHECKPOINT_FORMAT.into(),
            version: CHECKPOINT_VERSION,
            arch: self.params.arch.clone(),
            seed: self.seed,
            step: self.step,
            output_bias: self.params.output_bias,
            branch: self.params.branch.iter().map(layer).collect(),
            trunk: self.params.trunk.iter().map(layer).collect(),
        };
        serde_json::to_string(&rec).map_err(|e| NetError::Format(e.to_string()))
    }

    pub fn from_json(text: &str) -> Result<Self, NetError> {
        let rec: CheckpointRecord = serde_json::from_str(text).map_err(|e| NetError::Format(e.to_string()))?;
        if rec.format != CHECKPOINT_FORMAT || rec.version != CHECKPOINT_VERSION {
            return Err(NetError::Format(format!("unsupported checkpoint {} v{}", rec.format, rec.version)));
        }
        rec.arch.validate()?;
        let layers = |recs: Vec<LayerRecord>, widths: &[usize]| -> Result<Vec<Dense>, NetError> {
            if recs.len() + 1 != widths.len() {
                return Err(NetError::Format("layer count does not match the architecture".into()));
            }
            recs.into_iter()
                .zip(widths.windows(2))
                .map(|(r, w)| {
                    if r.weight.rows != w[0] || r.weight.cols != w[1] || r.bias.len() != w[1] {
                        return Err(NetError::Format("layer shape does not match the architecture".into()));
                    }
                    let weight = Array2::from_shape_vec((r.weight.rows, r.weight.cols), r.weight.data)
                        .map_err(|e| NetError::Format(e.to_string()))?;
                    let bias = Array2::from_shape_vec((1, w[1]), r.bias).map_err(|e| NetError::Format(e.to_string()))?;
                    Ok(Dense { weight, bias })
                })
                .collect()
        };
        let branch = layers(rec.branch, &rec.arch.branch_widths)?;
        let trunk = layers(rec.trunk, &rec.arch.trunk_widths)?;
        Ok(Self {
            params: DeepOnetParams { arch: rec.arch, branch, trunk, output_bias: rec.output_bias },
            seed: rec.seed,
            step: rec.step,
        })
    }

    pub fn save(&self, path: &Path) -> Result<(), NetError> {
        fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, NetError> {
        Self::from_json(&fs::read_to_string(path)?)
    }
}

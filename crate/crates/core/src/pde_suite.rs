//! Problem definitions: residual operators, boundary and initial penalties,
//! collocation layouts and loss assembly.
//!
//! All problems live on `[0,1]` or `[0,1]²`. Two-dimensional coordinates are
//! `(x, y)` for the 2-D Poisson problem and `(x, t)` for the parabolic ones.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use ndarray::{s, Array2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::diffkit::{DiffError, Real, Tape, Var};
use crate::function_spaces::{
    eval_bitrig, hammersley, interp_weights, rescale_to_range, sample_bitrig, sample_polynomial_deg3, uniform_grid,
    FunctionSample, GrfSampler, GrfSpec, SamplingError,
};
use crate::operator_net::{DeepOnetParams, FieldJets, JetRequest, NetError, ParamVars, Transform, TrunkFeatures, TrunkJets};

#[derive(Debug, Error)]
pub enum ProblemError {
    #[error("invalid problem spec: {0}")]
    InvalidSpec(String),
    #[error("point {0:?} lies outside the unit domain")]
    OutsideDomain(Vec<f64>),
    #[error("{what}: expected {expected}, got {got}")]
    Shape { what: &'static str, expected: usize, got: usize },
    #[error("empty batch")]
    EmptyBatch,
    #[error(transparent)]
    Net(#[from] NetError),
    #[error(transparent)]
    Diff(#[from] DiffError),
    #[error(transparent)]
    Sampling(#[from] SamplingError),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProblemKind {
    Antiderivative,
    Poisson1d,
    Poisson2d,
    HelmholtzNeumann,
    HeatIc,
    HeatSource,
    DiffrecSource,
    DiffrecCoeff,
}

impl ProblemKind {
    pub const ALL: [ProblemKind; 8] = [
        ProblemKind::Antiderivative,
        ProblemKind::Poisson1d,
        ProblemKind::Poisson2d,
        ProblemKind::HelmholtzNeumann,
        ProblemKind::HeatIc,
        ProblemKind::HeatSource,
        ProblemKind::DiffrecSource,
        ProblemKind::DiffrecCoeff,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            ProblemKind::Antiderivative => "antiderivative",
            ProblemKind::Poisson1d => "poisson1d",
            ProblemKind::Poisson2d => "poisson2d",
            ProblemKind::HelmholtzNeumann => "helmholtz_neumann",
            ProblemKind::HeatIc => "heat_ic",
            ProblemKind::HeatSource => "heat_source",
            ProblemKind::DiffrecSource => "diffrec_source",
            ProblemKind::DiffrecCoeff => "diffrec_coeff",
        }
    }

    /// Trunk input dimension.
    pub fn coord_dim(self) -> usize {
        match self {
            ProblemKind::Antiderivative | ProblemKind::Poisson1d | ProblemKind::HelmholtzNeumann => 1,
            _ => 2,
        }
    }

    /// Problems whose second coordinate is time.
    pub fn is_parabolic(self) -> bool {
        matches!(
            self,
            ProblemKind::HeatIc | ProblemKind::HeatSource | ProblemKind::DiffrecSource | ProblemKind::DiffrecCoeff
        )
    }

    /// Names of the scalar constants this problem requires.
    pub fn required_constants(self) -> &'static [&'static str] {
        match self {
            ProblemKind::HelmholtzNeumann => &["helmholtz_shift"],
            ProblemKind::HeatIc | ProblemKind::HeatSource => &["alpha"],
            ProblemKind::DiffrecSource => &["diffusion", "reaction"],
            ProblemKind::DiffrecCoeff => &["diffusion"],
            _ => &[],
        }
    }

    pub fn default_constants(self) -> BTreeMap<String, f64> {
        self.required_constants()
            .iter()
            .map(|&k| {
                let v = match k {
                    "helmholtz_shift" => 2.0,
                    _ => 0.01,
                };
                (k.to_string(), v)
            })
            .collect()
    }

    pub fn default_sensor_count(self) -> usize {
        match self {
            ProblemKind::Antiderivative => 50,
            ProblemKind::Poisson2d => 21 * 21,
            _ => 100,
        }
    }

    pub fn default_collocation(self) -> CollocationCounts {
        let c = |interior, boundary, initial| CollocationCounts { interior, boundary, initial };
        match self {
            ProblemKind::Antiderivative => c(20, 0, 1),
            ProblemKind::Poisson1d | ProblemKind::HelmholtzNeumann => c(100, 2, 0),
            ProblemKind::Poisson2d => c(10_000, 0, 0),
            _ => c(200, 40, 20),
        }
    }

    pub fn default_sampler(self) -> InputSampler {
        match self {
            ProblemKind::Poisson1d => InputSampler::Polynomial { lo: -1.0, hi: 1.0 },
            ProblemKind::Poisson2d => InputSampler::Bitrig { modes_r: 10, modes_s: 10 },
            ProblemKind::HeatIc => InputSampler::Grf { length_scale: 1.0, variance: 1.0 },
            ProblemKind::DiffrecCoeff => InputSampler::GrfRescaled { length_scale: 1.4, variance: 1.0, lo: 1.0, hi: 5.0 },
            _ => InputSampler::Grf { length_scale: 0.2, variance: 1.0 },
        }
    }

    /// Evaluation points per axis.
    pub fn default_eval_points(self) -> usize {
        match self {
            ProblemKind::Antiderivative => 50,
            _ => 100,
        }
    }

    pub fn default_transform(self) -> Transform {
        match self {
            ProblemKind::Poisson2d => Transform::Dirichlet2dSpace,
            _ => Transform::None,
        }
    }

    pub fn allowed_transforms(self) -> &'static [Transform] {
        match self {
            ProblemKind::Poisson1d => &[Transform::None, Transform::Dirichlet1d],
            ProblemKind::Poisson2d => &[Transform::None, Transform::Dirichlet2dSpace],
            ProblemKind::HeatSource | ProblemKind::DiffrecSource | ProblemKind::DiffrecCoeff => {
                &[Transform::None, Transform::ZeroIcDirichletBc]
            }
            _ => &[Transform::None],
        }
    }

    fn interior_request(self) -> JetRequest {
        match self {
            ProblemKind::Antiderivative => JetRequest::first(0),
            ProblemKind::Poisson1d | ProblemKind::HelmholtzNeumann => JetRequest::second(0),
            ProblemKind::Poisson2d => JetRequest::second(0).union(JetRequest::second(1)),
            _ => JetRequest::second(0).union(JetRequest::first(1)),
        }
    }

    fn boundary_request(self) -> JetRequest {
        match self {
            ProblemKind::HelmholtzNeumann => JetRequest::first(0),
            _ => JetRequest::VALUE,
        }
    }
}

impl fmt::Display for ProblemKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ProblemKind {
    type Err = ProblemError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        ProblemKind::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| ProblemError::InvalidSpec(format!("unknown problem kind `{s}`")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CollocationCounts {
    pub interior: usize,
    pub boundary: usize,
    pub initial: usize,
}

/// Distribution of input functions.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum InputSampler {
    Grf { length_scale: f64, variance: f64 },
    /// Cubic with coefficients uniform on `[lo, hi]`.
    Polynomial { lo: f64, hi: f64 },
    Bitrig { modes_r: usize, modes_s: usize },
    /// GRF draw rescaled affinely onto `[lo, hi]`.
    GrfRescaled { length_scale: f64, variance: f64, lo: f64, hi: f64 },
}

/// Serializable problem definition.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProblemSpec {
    pub kind: ProblemKind,
    pub sensor_count: usize,
    pub collocation: CollocationCounts,
    pub sampler: InputSampler,
    pub constants: BTreeMap<String, f64>,
    pub eval_points: usize,
}

impl ProblemSpec {
    pub fn new(kind: ProblemKind) -> Self {
        Self {
            kind,
            sensor_count: kind.default_sensor_count(),
            collocation: kind.default_collocation(),
            sampler: kind.default_sampler(),
            constants: kind.default_constants(),
            eval_points: kind.default_eval_points(),
        }
    }

    pub fn constant(&self, name: &str) -> f64 {
        self.constants[name]
    }

    pub fn validate(&self) -> Result<(), ProblemError> {
        let bad = |msg: String| Err(ProblemError::InvalidSpec(msg));
        let kind = self.kind;
        let required = kind.required_constants();
        for name in required {
            match self.constants.get(*name) {
                None => return bad(format!("{kind} requires constant `{name}`")),
                Some(v) if !v.is_finite() => return bad(format!("constant `{name}` must be finite")),
                _ => {}
            }
        }
        if let Some(extra) = self.constants.keys().find(|k| !required.contains(&k.as_str())) {
            return bad(format!("constant `{extra}` is not used by {kind}"));
        }
        for name in ["alpha", "diffusion"] {
            if let Some(&v) = self.constants.get(name) {
                if v <= 0.0 {
                    return bad(format!("constant `{name}` must be positive"));
                }
            }
        }
        if self.sensor_count < 2 {
            return bad("sensor_count must be at least 2".into());
        }
        if kind == ProblemKind::Poisson2d {
            let side = grid_side(self.sensor_count);
            if side.is_none() {
                return bad(format!("poisson2d sensor_count {} is not a perfect square", self.sensor_count));
            }
        }
        let c = self.collocation;
        if c.interior == 0 {
            return bad("interior collocation count must be positive".into());
        }
        match kind {
            ProblemKind::Antiderivative => {
                if c.boundary != 0 || c.initial != 1 {
                    return bad("antiderivative uses no boundary points and exactly one initial point".into());
                }
            }
            ProblemKind::Poisson1d | ProblemKind::HelmholtzNeumann => {
                if c.boundary != 2 || c.initial != 0 {
                    return bad(format!("{kind} uses exactly two boundary points and no initial points"));
                }
            }
            ProblemKind::Poisson2d => {
                if !c.boundary.is_multiple_of(4) || c.initial != 0 {
                    return bad("poisson2d boundary count must be a multiple of 4 and initial count 0".into());
                }
            }
            _ => {
                if !c.boundary.is_multiple_of(2) || c.boundary == 0 || c.initial == 0 {
                    return bad(format!("{kind} needs an even positive boundary count and a positive initial count"));
                }
            }
        }
        match self.sampler {
            InputSampler::Grf { length_scale, variance } | InputSampler::GrfRescaled { length_scale, variance, .. }
                if !(length_scale > 0.0 && variance > 0.0) =>
            {
                return bad("GRF length scale and variance must be positive".into());
            }
            InputSampler::GrfRescaled { lo, hi, .. } | InputSampler::Polynomial { lo, hi } if !(lo <= hi) => {
                return bad(format!("malformed range [{lo}, {hi}]"));
            }
            InputSampler::Bitrig { modes_r, modes_s } if modes_r == 0 || modes_s == 0 => {
                return bad("bitrig mode counts must be positive".into());
            }
            _ => {}
        }
        let bitrig = matches!(self.sampler, InputSampler::Bitrig { .. });
        if bitrig != (kind == ProblemKind::Poisson2d) {
            return bad("the bitrig sampler is used exactly for poisson2d".into());
        }
        if self.eval_points < 2 {
            return bad("eval_points must be at least 2".into());
        }
        Ok(())
    }
}

fn grid_side(n: usize) -> Option<usize> {
    let side = (n as f64).sqrt().round() as usize;
    (side >= 2 && side * side == n).then_some(side)
}

/// Where the sensors of an input function sit.
#[derive(Clone, Debug, PartialEq)]
pub enum SensorLayout {
    Line(Vec<f64>),
    /// Tensor grid, flattened with the x index outer.
    Grid { xs: Vec<f64>, ys: Vec<f64> },
}

impl SensorLayout {
    pub fn len(&self) -> usize {
        match self {
            SensorLayout::Line(xs) => xs.len(),
            SensorLayout::Grid { xs, ys } => xs.len() * ys.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Sensor coordinates as `m×d`.
    pub fn points(&self) -> Array2<f64> {
        match self {
            SensorLayout::Line(xs) => Array2::from_shape_fn((xs.len(), 1), |(i, _)| xs[i]),
            SensorLayout::Grid { xs, ys } => {
                let ny = ys.len();
                Array2::from_shape_fn((xs.len() * ny, 2), |(k, j)| if j == 0 { xs[k / ny] } else { ys[k % ny] })
            }
        }
    }

    /// `m×n` matrix `P` with `f(points) = fᵀ·P`, piecewise linear on a line
    /// and bilinear on a grid. Line layouts read the first coordinate.
    pub fn interpolation_matrix(&self, points: &Array2<f64>) -> Array2<f64> {
        let n = points.nrows();
        let mut p = Array2::zeros((self.len(), n));
        for j in 0..n {
            match self {
                SensorLayout::Line(xs) => {
                    let (i, w) = interp_weights(xs, points[(j, 0)]);
                    p[(i, j)] += 1.0 - w;
                    if w > 0.0 {
                        p[(i + 1, j)] += w;
                    }
                }
                SensorLayout::Grid { xs, ys } => {
                    let ny = ys.len();
                    let (ix, wx) = interp_weights(xs, points[(j, 0)]);
                    let (iy, wy) = interp_weights(ys, points[(j, 1)]);
                    for (di, cx) in [(0, 1.0 - wx), (1, wx)] {
                        for (dj, cy) in [(0, 1.0 - wy), (1, wy)] {
                            let c = cx * cy;
                            if c != 0.0 {
                                p[((ix + di) * ny + iy + dj, j)] += c;
                            }
                        }
                    }
                }
            }
        }
        p
    }
}

/// One draw from a problem's input distribution.
#[derive(Clone, Debug, PartialEq)]
pub struct InputDraw {
    pub values: Vec<f64>,
    pub seed: u64,
    /// Mode coefficients for bitrig draws.
    pub coeffs: Option<Array2<f64>>,
}

/// Collocation points of one problem instance, with source interpolation
/// matrices for the interior and initial sets.
#[derive(Clone, Debug)]
pub struct CollocationSet {
    pub interior: Array2<f64>,
    pub boundary: Array2<f64>,
    /// Outward normal sign per boundary point (`1×n_bc`).
    pub boundary_normals: Array2<f64>,
    pub initial: Array2<f64>,
    pub interior_interp: Array2<f64>,
    pub initial_interp: Array2<f64>,
}

impl CollocationSet {
    pub fn counts(&self) -> CollocationCounts {
        CollocationCounts { interior: self.interior.nrows(), boundary: self.boundary.nrows(), initial: self.initial.nrows() }
    }
}

/// Per-term losses.
#[derive(Clone, Copy, Debug, PartialEq, Default, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub physics: f64,
    pub bc: f64,
    pub ic: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn new(physics: f64, bc: f64, ic: f64) -> Self {
        Self { physics, bc, ic, total: physics + bc + ic }
    }
}

/// Loss nodes recorded on a tape.
#[derive(Clone, Copy, Debug)]
pub struct LossVars {
    pub physics: Var,
    pub bc: Var,
    pub ic: Var,
    pub total: Var,
    /// `functions×1` per-sample totals.
    pub per_sample: Var,
}

impl LossVars {
    pub fn breakdown<T: Real>(&self, tape: &Tape<T>) -> LossBreakdown {
        let get = |v: Var| tape.value(v)[(0, 0)].primal();
        let b = LossBreakdown::new(get(self.physics), get(self.bc), get(self.ic));
        debug_assert_eq!(b.total.to_bits(), get(self.total).to_bits());
        b
    }
}

/// Trunk jets on the three point sets.
#[derive(Clone, Debug)]
pub struct CollocationTrunks {
    pub interior: TrunkJets,
    pub boundary: Option<TrunkJets>,
    pub initial: Option<TrunkJets>,
}

/// Frozen trunk features on the three point sets.
#[derive(Clone, Debug)]
pub struct CollocationFeatures {
    pub interior: TrunkFeatures,
    pub boundary: Option<TrunkFeatures>,
    pub initial: Option<TrunkFeatures>,
}

impl CollocationFeatures {
    pub fn record<T: Real>(&self, tape: &mut Tape<T>) -> CollocationTrunks {
        CollocationTrunks {
            interior: self.interior.record(tape),
            boundary: self.boundary.as_ref().map(|f| f.record(tape)),
            initial: self.initial.as_ref().map(|f| f.record(tape)),
        }
    }
}

/// A validated problem with its sensor layout and cached samplers.
#[derive(Clone, Debug)]
pub struct Problem {
    spec: ProblemSpec,
    sensors: SensorLayout,
    grf: Option<GrfSampler>,
}

impl Problem {
    pub fn new(spec: ProblemSpec) -> Result<Self, ProblemError> {
        spec.validate()?;
        let sensors = match spec.kind {
            ProblemKind::Poisson2d => {
                let side = grid_side(spec.sensor_count).expect("validated");
                let g = uniform_grid(side);
                SensorLayout::Grid { xs: g.clone(), ys: g }
            }
            _ => SensorLayout::Line(uniform_grid(spec.sensor_count)),
        };
        let grf = match (spec.sampler, &sensors) {
            (
                InputSampler::Grf { length_scale, variance } | InputSampler::GrfRescaled { length_scale, variance, .. },
                SensorLayout::Line(xs),
            ) => Some(GrfSampler::new(GrfSpec { length_scale, variance, ..GrfSpec::new(length_scale) }, xs)?),
            _ => None,
        };
        Ok(Self { spec, sensors, grf })
    }

    pub fn from_kind(kind: ProblemKind) -> Result<Self, ProblemError> {
        Self::new(ProblemSpec::new(kind))
    }

    pub fn spec(&self) -> &ProblemSpec {
        &self.spec
    }

    pub fn kind(&self) -> ProblemKind {
        self.spec.kind
    }

    pub fn sensors(&self) -> &SensorLayout {
        &self.sensors
    }

    pub fn sensor_count(&self) -> usize {
        self.sensors.len()
    }

    pub fn coord_dim(&self) -> usize {
        self.spec.kind.coord_dim()
    }

    /// One input function for `seed`.
    pub fn sample_input(&self, seed: u64) -> Result<InputDraw, ProblemError> {
        let line = |s: FunctionSample| InputDraw { values: s.values, seed, coeffs: None };
        Ok(match (self.spec.sampler, &self.sensors) {
            (InputSampler::Grf { .. }, _) => line(self.grf.as_ref().expect("grf sampler").sample(seed)),
            (InputSampler::GrfRescaled { lo, hi, .. }, _) => {
                let raw = self.grf.as_ref().expect("grf sampler").sample(seed);
                line(rescale_to_range(&raw, lo, hi)?)
            }
            (InputSampler::Polynomial { lo, hi }, SensorLayout::Line(xs)) => line(sample_polynomial_deg3((lo, hi), xs, seed)?),
            (InputSampler::Bitrig { modes_r, modes_s }, SensorLayout::Grid { xs, ys }) => {
                let b = sample_bitrig(modes_r, modes_s, xs, ys, seed)?;
                InputDraw { values: b.flat_values(), seed, coeffs: Some(b.coeffs) }
            }
            _ => unreachable!("sampler and layout validated together"),
        })
    }

    /// Uniform evaluation grid, `points×dim`. The IC-driven heat problem is
    /// evaluated on the final-time slice `t = 1`.
    pub fn eval_grid(&self) -> Array2<f64> {
        let n = self.spec.eval_points;
        let g = uniform_grid(n);
        match self.spec.kind {
            k if k.coord_dim() == 1 => Array2::from_shape_fn((n, 1), |(i, _)| g[i]),
            ProblemKind::HeatIc => Array2::from_shape_fn((n, 2), |(i, j)| if j == 0 { g[i] } else { 1.0 }),
            _ => Array2::from_shape_fn((n * n, 2), |(k, j)| if j == 0 { g[k / n] } else { g[k % n] }),
        }
    }

    /// Collocation points. Interior points come from a Hammersley set with
    /// its origin point dropped, so they are strictly inside the domain; a
    /// non-zero `seed` applies a seeded toroidal shift to them.
    pub fn make_collocation(&self, seed: u64) -> Result<CollocationSet, ProblemError> {
        let kind = self.spec.kind;
        let counts = self.spec.collocation;
        let dim = kind.coord_dim();
        let mut interior = hammersley(counts.interior + 1, dim)?.slice(s![1.., ..]).to_owned();
        if seed != 0 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let shift: Vec<f64> = (0..dim).map(|_| rng.random::<f64>()).collect();
            for mut row in interior.axis_iter_mut(Axis(0)) {
                for (v, s) in row.iter_mut().zip(&shift) {
                    let w = (*v + s).fract();
                    *v = if w == 0.0 { 0.5 } else { w };
                }
            }
        }
        let (boundary, normals) = match kind {
            ProblemKind::Antiderivative => (Array2::zeros((0, 1)), vec![]),
            ProblemKind::Poisson1d | ProblemKind::HelmholtzNeumann => {
                (Array2::from_shape_vec((2, 1), vec![0.0, 1.0]).expect("shape"), vec![-1.0, 1.0])
            }
            ProblemKind::Poisson2d => {
                let per = counts.boundary / 4;
                let g = uniform_grid(per);
                let mut pts = Vec::with_capacity(counts.boundary * 2);
                for &v in &g {
                    pts.extend([v, 0.0, v, 1.0, 0.0, v, 1.0, v]);
                }
                (Array2::from_shape_vec((counts.boundary, 2), pts).expect("shape"), vec![1.0; counts.boundary])
            }
            _ => {
                let per = counts.boundary / 2;
                let g = uniform_grid(per);
                let mut pts = Vec::with_capacity(counts.boundary * 2);
                let mut normals = Vec::with_capacity(counts.boundary);
                for &t in &g {
                    pts.extend([0.0, t, 1.0, t]);
                    normals.extend([-1.0, 1.0]);
                }
                (Array2::from_shape_vec((counts.boundary, 2), pts).expect("shape"), normals)
            }
        };
        let initial = match kind {
            ProblemKind::Antiderivative => Array2::zeros((1, 1)),
            k if k.is_parabolic() => {
                let g = uniform_grid(counts.initial);
                Array2::from_shape_fn((counts.initial, 2), |(i, j)| if j == 0 { g[i] } else { 0.0 })
            }
            _ => Array2::zeros((0, dim)),
        };
        let interior_interp = self.sensors.interpolation_matrix(&interior);
        let initial_interp = self.sensors.interpolation_matrix(&initial);
        let nb = normals.len();
        Ok(CollocationSet {
            interior,
            boundary,
            boundary_normals: Array2::from_shape_vec((1, nb), normals).expect("shape"),
            initial,
            interior_interp,
            initial_interp,
        })
    }

    fn check_transform(&self, params: &DeepOnetParams) -> Result<Transform, ProblemError> {
        let t = params.arch.transform;
        if !self.spec.kind.allowed_transforms().contains(&t) {
            return Err(ProblemError::InvalidSpec(format!("transform {t:?} is not valid for {}", self.spec.kind)));
        }
        if params.sensor_count() != self.sensor_count() {
            return Err(ProblemError::Shape { what: "sensor count", expected: self.sensor_count(), got: params.sensor_count() });
        }
        if params.coord_dim() != self.coord_dim() {
            return Err(ProblemError::Shape { what: "coordinate dimension", expected: self.coord_dim(), got: params.coord_dim() });
        }
        Ok(t)
    }

    fn bc_enforced(transform: Transform) -> bool {
        transform != Transform::None
    }

    fn ic_enforced(transform: Transform) -> bool {
        transform == Transform::ZeroIcDirichletBc
    }

    fn needs_boundary(&self, transform: Transform) -> bool {
        !Self::bc_enforced(transform) && self.spec.collocation.boundary > 0
    }

    fn needs_initial(&self, transform: Transform) -> bool {
        !Self::ic_enforced(transform) && self.spec.collocation.initial > 0
    }

    /// Trunk jets for every point set, recorded from `vars`.
    pub fn record_trunks<T: Real>(
        &self,
        params: &DeepOnetParams,
        tape: &mut Tape<T>,
        vars: &ParamVars,
        colloc: &CollocationSet,
    ) -> Result<CollocationTrunks, ProblemError> {
        let t = self.check_transform(params)?;
        let kind = self.spec.kind;
        let interior = params.record_trunk(tape, vars, &colloc.interior, kind.interior_request())?;
        let boundary = if self.needs_boundary(t) {
            Some(params.record_trunk(tape, vars, &colloc.boundary, kind.boundary_request())?)
        } else {
            None
        };
        let initial = if self.needs_initial(t) {
            Some(params.record_trunk(tape, vars, &colloc.initial, JetRequest::VALUE)?)
        } else {
            None
        };
        Ok(CollocationTrunks { interior, boundary, initial })
    }

    /// Trunk jets with the parameters frozen.
    pub fn trunk_features(&self, params: &DeepOnetParams, colloc: &CollocationSet) -> Result<CollocationFeatures, ProblemError> {
        let t = self.check_transform(params)?;
        let kind = self.spec.kind;
        let interior = params.trunk_features(&colloc.interior, kind.interior_request())?;
        let boundary = if self.needs_boundary(t) {
            Some(params.trunk_features(&colloc.boundary, kind.boundary_request())?)
        } else {
            None
        };
        let initial = if self.needs_initial(t) { Some(params.trunk_features(&colloc.initial, JetRequest::VALUE)?) } else { None };
        Ok(CollocationFeatures { interior, boundary, initial })
    }

    /// Residual `𝒩[u]` at the interior points given the output jets and the
    /// input function interpolated to the same points (`functions×points`).
    pub fn record_residual<T: Real>(
        &self,
        tape: &mut Tape<T>,
        jets: &FieldJets,
        input_at_points: Var,
        points: &Array2<f64>,
    ) -> Result<Var, ProblemError> {
        let spec = &self.spec;
        let u = jets.value;
        Ok(match spec.kind {
            ProblemKind::Antiderivative => {
                let du = jets.d1(0)?;
                tape.sub(du, input_at_points)?
            }
            ProblemKind::Poisson1d => {
                let uxx = jets.d2(0)?;
                let neg = tape.neg(uxx)?;
                tape.sub(neg, input_at_points)?
            }
            ProblemKind::Poisson2d => {
                let uxx = jets.d2(0)?;
                let uyy = jets.d2(1)?;
                let lap = tape.add(uxx, uyy)?;
                let neg = tape.neg(lap)?;
                tape.sub(neg, input_at_points)?
            }
            ProblemKind::HelmholtzNeumann => {
                let uxx = jets.d2(0)?;
                let neg = tape.neg(uxx)?;
                let shifted = tape.scale(u, spec.constant("helmholtz_shift"))?;
                let lhs = tape.add(neg, shifted)?;
                tape.sub(lhs, input_at_points)?
            }
            ProblemKind::HeatIc | ProblemKind::HeatSource => {
                let ut = jets.d1(1)?;
                let uxx = jets.d2(0)?;
                let diff = tape.scale(uxx, spec.constant("alpha"))?;
                let r = tape.sub(ut, diff)?;
                if spec.kind == ProblemKind::HeatSource {
                    tape.sub(r, input_at_points)?
                } else {
                    r
                }
            }
            ProblemKind::DiffrecSource => {
                let ut = jets.d1(1)?;
                let uxx = jets.d2(0)?;
                let diff = tape.scale(uxx, spec.constant("diffusion"))?;
                let usq = tape.square(u)?;
                let react = tape.scale(usq, spec.constant("reaction"))?;
                let r = tape.sub(ut, diff)?;
                let r = tape.sub(r, react)?;
                tape.sub(r, input_at_points)?
            }
            ProblemKind::DiffrecCoeff => {
                let ut = jets.d1(1)?;
                let uxx = jets.d2(0)?;
                let diff = tape.scale(uxx, spec.constant("diffusion"))?;
                let usq = tape.square(u)?;
                let react = tape.mul(input_at_points, usq)?;
                let src = Array2::from_shape_fn((1, points.nrows()), |(_, j)| {
                    T::from_f64((std::f64::consts::PI * points[(j, 0)]).sin())
                });
                let src = tape.constant(src);
                let r = tape.sub(ut, diff)?;
                let r = tape.add(r, react)?;
                let neg_src = tape.neg(src)?;
                tape.add_bcast(r, neg_src)?
            }
        })
    }

    /// Records the loss for a `functions×m` batch of inputs sharing `colloc`.
    ///
    /// Every term is a plain mean of squares, first over points per sample,
    /// then over samples. Terms enforced by the output transform are zero.
    #[allow(clippy::too_many_arguments)]
    pub fn record_loss<T: Real>(
        &self,
        params: &DeepOnetParams,
        tape: &mut Tape<T>,
        output_bias: Var,
        branch_out: Var,
        inputs: Var,
        trunks: &CollocationTrunks,
        colloc: &CollocationSet,
    ) -> Result<LossVars, ProblemError> {
        let transform = self.check_transform(params)?;
        let (n_fn, m) = tape.shape(inputs);
        if n_fn == 0 {
            return Err(ProblemError::EmptyBatch);
        }
        if m != self.sensor_count() {
            return Err(ProblemError::Shape { what: "sensor count", expected: self.sensor_count(), got: m });
        }

        let field = params.record_merge(tape, output_bias, branch_out, &trunks.interior, &colloc.interior)?;
        let p_int = tape.constant(colloc.interior_interp.mapv(T::from_f64));
        let f_int = tape.matmul(inputs, p_int)?;
        let res = self.record_residual(tape, &field, f_int, &colloc.interior)?;
        let physics_rows = row_mean_of_squares(tape, res)?;

        let bc_rows = match (&trunks.boundary, self.needs_boundary(transform)) {
            (Some(bt), true) => {
                let bf = params.record_merge(tape, output_bias, branch_out, bt, &colloc.boundary)?;
                let mismatch = if self.spec.kind == ProblemKind::HelmholtzNeumann {
                    let n = tape.constant(colloc.boundary_normals.mapv(T::from_f64));
                    let d = bf.d1(0)?;
                    tape.mul_bcast(d, n)?
                } else {
                    bf.value
                };
                Some(row_mean_of_squares(tape, mismatch)?)
            }
            _ => None,
        };

        let ic_rows = match (&trunks.initial, self.needs_initial(transform)) {
            (Some(it), true) => {
                let icf = params.record_merge(tape, output_bias, branch_out, it, &colloc.initial)?;
                let mismatch = if self.spec.kind == ProblemKind::HeatIc {
                    let p_ic = tape.constant(colloc.initial_interp.mapv(T::from_f64));
                    let f_ic = tape.matmul(inputs, p_ic)?;
                    tape.sub(icf.value, f_ic)?
                } else {
                    icf.value
                };
                Some(row_mean_of_squares(tape, mismatch)?)
            }
            _ => None,
        };

        let physics = tape.mean(physics_rows)?;
        let zero = || Array2::zeros((1, 1));
        let bc = match bc_rows {
            Some(r) => tape.mean(r)?,
            None => tape.constant(zero()),
        };
        let ic = match ic_rows {
            Some(r) => tape.mean(r)?,
            None => tape.constant(zero()),
        };
        let pb = tape.add(physics, bc)?;
        let total = tape.add(pb, ic)?;
        let mut per_sample = physics_rows;
        for r in [bc_rows, ic_rows].into_iter().flatten() {
            per_sample = tape.add(per_sample, r)?;
        }
        Ok(LossVars { physics, bc, ic, total, per_sample })
    }

    /// Loss of `params` on a batch, with parameters treated as constants.
    pub fn assemble_loss(
        &self,
        params: &DeepOnetParams,
        inputs: &Array2<f64>,
        colloc: &CollocationSet,
    ) -> Result<LossBreakdown, ProblemError> {
        let mut tape = Tape::<f64>::new();
        let vars = params.register(&mut tape, false);
        let x = tape.constant(inputs.clone());
        let b = params.record_branch(&mut tape, &vars, x)?;
        let trunks = self.record_trunks(params, &mut tape, &vars, colloc)?;
        let loss = self.record_loss(params, &mut tape, vars.output_bias, b, x, &trunks, colloc)?;
        Ok(loss.breakdown(&tape))
    }

    /// `𝒩[G_θ(f)]` at each of `points`.
    pub fn physics_residual(
        &self,
        params: &DeepOnetParams,
        f: &[f64],
        points: &Array2<f64>,
    ) -> Result<Vec<f64>, ProblemError> {
        self.check_transform(params)?;
        if f.len() != self.sensor_count() {
            return Err(ProblemError::Shape { what: "sensor count", expected: self.sensor_count(), got: f.len() });
        }
        if points.ncols() != self.coord_dim() {
            return Err(ProblemError::Shape { what: "coordinate dimension", expected: self.coord_dim(), got: points.ncols() });
        }
        check_domain(points)?;
        let mut tape = Tape::<f64>::new();
        let vars = params.register(&mut tape, false);
        let x = tape.constant(Array2::from_shape_vec((1, f.len()), f.to_vec()).expect("row"));
        let jets = params.record_field(&mut tape, &vars, x, points, self.spec.kind.interior_request())?;
        let p = tape.constant(self.sensors.interpolation_matrix(points));
        let fi = tape.matmul(x, p)?;
        let r = self.record_residual(&mut tape, &jets, fi, points)?;
        Ok(tape.value(r).iter().copied().collect())
    }

    /// Exact value of a bitrig input at arbitrary points.
    pub fn bitrig_values(coeffs: &Array2<f64>, points: &Array2<f64>) -> Vec<f64> {
        points.axis_iter(Axis(0)).map(|p| eval_bitrig(coeffs, p[0], p[1])).collect()
    }
}

fn row_mean_of_squares<T: Real>(tape: &mut Tape<T>, a: Var) -> Result<Var, DiffError> {
    let (_, n) = tape.shape(a);
    let sq = tape.square(a)?;
    let w = tape.constant(Array2::from_elem((n, 1), T::from_f64(1.0 / n as f64)));
    tape.matmul(sq, w)
}

/// Errors unless every coordinate lies in `[0, 1]`.
pub fn check_domain(points: &Array2<f64>) -> Result<(), ProblemError> {
    for row in points.axis_iter(Axis(0)) {
        if row.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(ProblemError::OutsideDomain(row.to_vec()));
        }
    }
    Ok(())
}

/// Stacks input rows into a `functions×m` batch.
pub fn stack_inputs(rows: &[Vec<f64>]) -> Array2<f64> {
    let m = rows.first().map_or(0, Vec::len);
    Array2::from_shape_fn((rows.len(), m), |(i, j)| rows[i][j])
}

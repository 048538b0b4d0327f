//! Input-function samplers and point sets.

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal, Uniform};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SamplingError {
    #[error("length scale must be positive, got {0}")]
    BadLengthScale(f64),
    #[error("jitter must be non-negative, got {0}")]
    BadJitter(f64),
    #[error("sensor locations must be strictly increasing within [0, 1]")]
    BadSensors,
    #[error("kernel matrix is not positive definite even with jitter {jitter:e}")]
    Cholesky { jitter: f64 },
    #[error("malformed range [{lo}, {hi}]")]
    BadRange { lo: f64, hi: f64 },
    #[error("unsupported dimension {0} (expected 1 or 2)")]
    UnsupportedDim(usize),
    #[error("point count must be at least 1")]
    EmptyPointSet,
    #[error("mode counts must be at least 1")]
    BadModeCount,
}

/// Which generator produced a [`FunctionSample`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SamplerKind {
    Grf,
    Polynomial,
    Bitrig,
    Fixed,
}

impl SamplerKind {
    pub fn as_str(self) -> &'static str {
        match self {
            SamplerKind::Grf => "grf",
            SamplerKind::Polynomial => "polynomial",
            SamplerKind::Bitrig => "bitrig",
            SamplerKind::Fixed => "fixed",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleMeta {
    pub kind: SamplerKind,
    pub seed: u64,
    pub length_scale: Option<f64>,
}

/// An input function discretized on its sensors.
#[derive(Clone, Debug, PartialEq)]
pub struct FunctionSample {
    pub sensor_xs: Vec<f64>,
    pub values: Vec<f64>,
    pub meta: SampleMeta,
}

impl FunctionSample {
    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn max_abs(&self) -> f64 {
        self.values.iter().fold(0.0, |m, v| m.max(v.abs()))
    }
}

/// Gaussian random field with squared-exponential kernel.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GrfSpec {
    pub length_scale: f64,
    #[serde(default = "default_variance")]
    pub variance: f64,
    #[serde(default = "default_jitter")]
    pub jitter: f64,
}

fn default_variance() -> f64 {
    1.0
}

fn default_jitter() -> f64 {
    DEFAULT_JITTER
}

/// Default diagonal jitter. Near-zero pivots are truncated instead, so no
/// jitter noise is injected unless the factorization genuinely fails.
pub const DEFAULT_JITTER: f64 = 0.0;
/// First non-zero rung of the jitter ladder.
pub const MIN_JITTER: f64 = 1e-14;
/// Largest jitter tried before giving up.
pub const MAX_JITTER: f64 = 1e-6;

impl GrfSpec {
    pub fn new(length_scale: f64) -> Self {
        Self { length_scale, variance: 1.0, jitter: DEFAULT_JITTER }
    }

    fn validate(&self) -> Result<(), SamplingError> {
        if !(self.length_scale > 0.0) {
            return Err(SamplingError::BadLengthScale(self.length_scale));
        }
        if !(self.jitter >= 0.0) {
            return Err(SamplingError::BadJitter(self.jitter));
        }
        Ok(())
    }
}

pub fn check_sensors(xs: &[f64]) -> Result<(), SamplingError> {
    let in_unit = xs.iter().all(|&x| (0.0..=1.0).contains(&x));
    let increasing = xs.windows(2).all(|w| w[0] < w[1]);
    if xs.is_empty() || !in_unit || !increasing {
        return Err(SamplingError::BadSensors);
    }
    Ok(())
}

/// `n` uniformly spaced points covering `[0, 1]` including both ends.
pub fn uniform_grid(n: usize) -> Vec<f64> {
    match n {
        0 => vec![],
        1 => vec![0.0],
        _ => (0..n).map(|i| i as f64 / (n - 1) as f64).collect(),
    }
}

/// Lower Cholesky factor of a symmetric positive semidefinite matrix.
///
/// Pivots within `1e-10·max(diag)` of zero are treated as exact zeros and
/// their column is dropped; a clearly negative pivot returns `None`.
pub fn cholesky(a: &Array2<f64>) -> Option<Array2<f64>> {
    let n = a.nrows();
    let scale = (0..n).fold(0.0f64, |m, i| m.max(a[(i, i)].abs()));
    let floor = 1e-10 * scale;
    let mut l = Array2::<f64>::zeros((n, n));
    for j in 0..n {
        let mut d = a[(j, j)];
        for k in 0..j {
            d -= l[(j, k)] * l[(j, k)];
        }
        if d.is_nan() || d < -floor {
            return None;
        }
        if d <= floor {
            continue;
        }
        let d = d.sqrt();
        l[(j, j)] = d;
        for i in (j + 1)..n {
            let mut s = a[(i, j)];
            for k in 0..j {
                s -= l[(i, k)] * l[(j, k)];
            }
            l[(i, j)] = s / d;
        }
    }
    Some(l)
}

/// Kernel matrix `variance·exp(−(xᵢ−xⱼ)²/(2l²))`.
pub fn rbf_kernel(spec: &GrfSpec, xs: &[f64]) -> Array2<f64> {
    let n = xs.len();
    let two_l2 = 2.0 * spec.length_scale * spec.length_scale;
    Array2::from_shape_fn((n, n), |(i, j)| {
        let d = xs[i] - xs[j];
        spec.variance * (-(d * d) / two_l2).exp()
    })
}

/// Reusable GRF sampler holding the factored covariance.
#[derive(Clone, Debug)]
pub struct GrfSampler {
    spec: GrfSpec,
    sensor_xs: Vec<f64>,
    factor: Array2<f64>,
    jitter_used: f64,
}

impl GrfSampler {
    /// Factors `K + jitter·I`, escalating the jitter ×10 up to
    /// [`MAX_JITTER`] until the factorization succeeds.
    pub fn new(spec: GrfSpec, sensor_xs: &[f64]) -> Result<Self, SamplingError> {
        spec.validate()?;
        check_sensors(sensor_xs)?;
        let k = rbf_kernel(&spec, sensor_xs);
        let n = sensor_xs.len();
        let mut jitter = spec.jitter;
        loop {
            let mut kj = k.clone();
            for i in 0..n {
                kj[(i, i)] += jitter;
            }
            if let Some(factor) = cholesky(&kj) {
                return Ok(Self { spec, sensor_xs: sensor_xs.to_vec(), factor, jitter_used: jitter });
            }
            let next = if jitter == 0.0 { MIN_JITTER } else { jitter * 10.0 };
            if next > MAX_JITTER * (1.0 + 1e-9) {
                return Err(SamplingError::Cholesky { jitter });
            }
            jitter = next;
        }
    }

    pub fn jitter_used(&self) -> f64 {
        self.jitter_used
    }

    pub fn sensor_xs(&self) -> &[f64] {
        &self.sensor_xs
    }

    /// Draws `L·z` with `z` standard normal from `seed`.
    pub fn sample(&self, seed: u64) -> FunctionSample {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let z: Vec<f64> = (0..self.sensor_xs.len()).map(|_| StandardNormal.sample(&mut rng)).collect();
        let n = z.len();
        let values = (0..n)
            .map(|i| (0..=i).map(|k| self.factor[(i, k)] * z[k]).sum())
            .collect();
        FunctionSample {
            sensor_xs: self.sensor_xs.clone(),
            values,
            meta: SampleMeta { kind: SamplerKind::Grf, seed, length_scale: Some(self.spec.length_scale) },
        }
    }
}

pub fn sample_grf(spec: GrfSpec, sensor_xs: &[f64], seed: u64) -> Result<FunctionSample, SamplingError> {
    Ok(GrfSampler::new(spec, sensor_xs)?.sample(seed))
}

/// Cubic with coefficients drawn uniformly from `coeff_range`.
pub fn sample_polynomial_deg3(
    coeff_range: (f64, f64),
    sensor_xs: &[f64],
    seed: u64,
) -> Result<FunctionSample, SamplingError> {
    let (lo, hi) = coeff_range;
    if !(lo <= hi) || !lo.is_finite() || !hi.is_finite() {
        return Err(SamplingError::BadRange { lo, hi });
    }
    check_sensors(sensor_xs)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let coeffs: [f64; 4] = if lo == hi {
        [lo; 4]
    } else {
        let dist = Uniform::new(lo, hi).map_err(|_| SamplingError::BadRange { lo, hi })?;
        [dist.sample(&mut rng), dist.sample(&mut rng), dist.sample(&mut rng), dist.sample(&mut rng)]
    };
    Ok(FunctionSample {
        sensor_xs: sensor_xs.to_vec(),
        values: eval_cubic(&coeffs, sensor_xs),
        meta: SampleMeta { kind: SamplerKind::Polynomial, seed, length_scale: None },
    })
}

/// `Σ c_k x^k` for `k = 0..3`.
pub fn eval_cubic(coeffs: &[f64; 4], xs: &[f64]) -> Vec<f64> {
    xs.iter()
        .map(|&x| coeffs[0] + x * (coeffs[1] + x * (coeffs[2] + x * coeffs[3])))
        .collect()
}

/// Bi-trigonometric source `Σ c_rs sin(rπx) sin(sπy)` on a tensor grid.
#[derive(Clone, Debug, PartialEq)]
pub struct BitrigSample {
    /// `R×S` coefficients; entry `(r-1, s-1)` multiplies mode `(r, s)`.
    pub coeffs: Array2<f64>,
    pub grid_x: Vec<f64>,
    pub grid_y: Vec<f64>,
    /// `values[(i, j)] = f(grid_x[i], grid_y[j])`.
    pub values: Array2<f64>,
    pub seed: u64,
}

impl BitrigSample {
    pub fn from_coeffs(coeffs: Array2<f64>, grid_x: &[f64], grid_y: &[f64], seed: u64) -> Self {
        let values = Array2::from_shape_fn((grid_x.len(), grid_y.len()), |(i, j)| {
            eval_bitrig(&coeffs, grid_x[i], grid_y[j])
        });
        Self { coeffs, grid_x: grid_x.to_vec(), grid_y: grid_y.to_vec(), values, seed }
    }

    /// Row-major flattening (x index outer), the branch-input layout.
    pub fn flat_values(&self) -> Vec<f64> {
        self.values.iter().copied().collect()
    }
}

pub fn eval_bitrig(coeffs: &Array2<f64>, x: f64, y: f64) -> f64 {
    let pi = std::f64::consts::PI;
    let mut acc = 0.0;
    for ((r, s), &c) in coeffs.indexed_iter() {
        acc += c * ((r + 1) as f64 * pi * x).sin() * ((s + 1) as f64 * pi * y).sin();
    }
    acc
}

pub fn sample_bitrig(
    modes_r: usize,
    modes_s: usize,
    grid_x: &[f64],
    grid_y: &[f64],
    seed: u64,
) -> Result<BitrigSample, SamplingError> {
    if modes_r == 0 || modes_s == 0 {
        return Err(SamplingError::BadModeCount);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let coeffs = Array2::from_shape_fn((modes_r, modes_s), |_| StandardNormal.sample(&mut rng));
    Ok(BitrigSample::from_coeffs(coeffs, grid_x, grid_y, seed))
}

/// Affine map sending the sample's value range onto `[lo, hi]`. A constant
/// sample maps to the midpoint.
pub fn rescale_to_range(sample: &FunctionSample, lo: f64, hi: f64) -> Result<FunctionSample, SamplingError> {
    if !(hi > lo) {
        return Err(SamplingError::BadRange { lo, hi });
    }
    let (min, max) = sample
        .values
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
    let values = if !(max > min) {
        vec![0.5 * (lo + hi); sample.values.len()]
    } else {
        let scale = (hi - lo) / (max - min);
        sample
            .values
            .iter()
            .map(|&v| {
                if v == max {
                    hi
                } else {
                    lo + (v - min) * scale
                }
            })
            .collect()
    };
    Ok(FunctionSample { values, ..sample.clone() })
}

/// Base-2 radical inverse (van der Corput).
pub fn radical_inverse_base2(mut i: u64) -> f64 {
    let mut inv = 0.5;
    let mut acc = 0.0;
    while i > 0 {
        if i & 1 == 1 {
            acc += inv;
        }
        inv *= 0.5;
        i >>= 1;
    }
    acc
}

/// Hammersley set: `i/n` in 1-D, `(i/n, φ₂(i))` in 2-D, `i = 0..n`.
/// Returned as an `n×dim` array.
pub fn hammersley(n: usize, dim: usize) -> Result<Array2<f64>, SamplingError> {
    if n == 0 {
        return Err(SamplingError::EmptyPointSet);
    }
    match dim {
        1 => Ok(Array2::from_shape_fn((n, 1), |(i, _)| i as f64 / n as f64)),
        2 => Ok(Array2::from_shape_fn((n, 2), |(i, j)| {
            if j == 0 {
                i as f64 / n as f64
            } else {
                radical_inverse_base2(i as u64)
            }
        })),
        d => Err(SamplingError::UnsupportedDim(d)),
    }
}

/// Multiplies values by `x(1−x)` so the profile vanishes at both ends.
pub fn boundary_mask_profile(sample: &FunctionSample) -> FunctionSample {
    let values = sample
        .sensor_xs
        .iter()
        .zip(&sample.values)
        .map(|(&x, &v)| v * x * (1.0 - x))
        .collect();
    FunctionSample { values, ..sample.clone() }
}

/// Piecewise-linear interpolation of `(xs, ys)` at `x`, clamped to the ends.
pub fn interp_linear(xs: &[f64], ys: &[f64], x: f64) -> f64 {
    let (idx, w) = interp_weights(xs, x);
    ys[idx] * (1.0 - w) + if w > 0.0 { ys[idx + 1] * w } else { 0.0 }
}

/// Left index and right weight for linear interpolation on a sorted grid.
pub fn interp_weights(xs: &[f64], x: f64) -> (usize, f64) {
    let n = xs.len();
    if n == 1 || x <= xs[0] {
        return (0, 0.0);
    }
    if x >= xs[n - 1] {
        return (n - 1, 0.0);
    }
    let hi = xs.partition_point(|&v| v <= x);
    let lo = hi - 1;
    let w = (x - xs[lo]) / (xs[hi] - xs[lo]);
    (lo, w)
}

/// Seeded uniform draws in `(−1, 1)`, used for warm starts.
pub fn uniform_unit_noise(rng: &mut impl Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
}

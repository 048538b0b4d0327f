//! Classical solvers producing reference solutions: adaptive Dormand–Prince
//! for the ODE, finite differences for the elliptic problems,
//! Crank–Nicolson for heat and implicit Euler with Picard iteration for
//! diffusion–reaction.

use std::f64::consts::PI;
use std::io::Write;

use ndarray::{Array2, Axis};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::function_spaces::{interp_linear, interp_weights, uniform_grid};
use crate::pde_suite::{Problem, ProblemKind, SensorLayout};

#[derive(Debug, Error)]
pub enum SolverError {
    #[error("step size underflow at x = {x}")]
    StepUnderflow { x: f64 },
    #[error("singular tridiagonal system at row {row}")]
    Singular { row: usize },
    #[error("Picard iteration did not converge at time step {step} (last change {change:e})")]
    PicardDiverged { step: usize, change: f64 },
    #[error("invalid solver input: {0}")]
    BadInput(String),
    #[error("non-finite solution value")]
    NonFinite,
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SolverMeta {
    pub method: String,
    pub resolution: Vec<usize>,
    pub order: f64,
}

/// Solution values on a tensor-product grid. Two-dimensional values are
/// flattened with the first axis outer.
#[derive(Clone, Debug, PartialEq)]
pub struct GridSolution {
    pub axes: Vec<Vec<f64>>,
    pub values: Vec<f64>,
    pub meta: SolverMeta,
}

impl GridSolution {
    fn new(axes: Vec<Vec<f64>>, values: Vec<f64>, meta: SolverMeta) -> Result<Self, SolverError> {
        debug_assert_eq!(axes.iter().map(Vec::len).product::<usize>(), values.len());
        if values.iter().any(|v| !v.is_finite()) {
            return Err(SolverError::NonFinite);
        }
        Ok(Self { axes, values, meta })
    }

    pub fn dim(&self) -> usize {
        self.axes.len()
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Grid points as `len×dim`.
    pub fn points(&self) -> Array2<f64> {
        match self.axes.as_slice() {
            [xs] => Array2::from_shape_fn((xs.len(), 1), |(i, _)| xs[i]),
            [xs, ys] => {
                let ny = ys.len();
                Array2::from_shape_fn((xs.len() * ny, 2), |(k, j)| if j == 0 { xs[k / ny] } else { ys[k % ny] })
            }
            _ => unreachable!("solutions are 1-D or 2-D"),
        }
    }

    /// Value at grid index `(i, j)` of a 2-D solution.
    pub fn at(&self, i: usize, j: usize) -> f64 {
        self.values[i * self.axes[1].len() + j]
    }

    /// Piecewise-(bi)linear interpolation at `points` (`n×dim`).
    pub fn interpolate(&self, points: &Array2<f64>) -> Vec<f64> {
        points
            .axis_iter(Axis(0))
            .map(|p| match self.axes.as_slice() {
                [xs] => interp_linear(xs, &self.values, p[0]),
                [xs, ys] => {
                    let (ix, wx) = interp_weights(xs, p[0]);
                    let (iy, wy) = interp_weights(ys, p[1]);
                    let mut acc = 0.0;
                    for (di, cx) in [(0, 1.0 - wx), (1, wx)] {
                        for (dj, cy) in [(0, 1.0 - wy), (1, wy)] {
                            if cx * cy != 0.0 {
                                acc += cx * cy * self.at(ix + di, iy + dj);
                            }
                        }
                    }
                    acc
                }
                _ => unreachable!("solutions are 1-D or 2-D"),
            })
            .collect()
    }

    /// CSV with one column per grid axis followed by `value`.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<(), SolverError> {
        let mut w = csv::Writer::from_writer(out);
        let names = ["x", "y"];
        let mut header: Vec<&str> = names[..self.dim()].to_vec();
        header.push("value");
        w.write_record(&header)?;
        let pts = self.points();
        for (row, v) in pts.axis_iter(Axis(0)).zip(&self.values) {
            let mut rec: Vec<String> = row.iter().map(|c| c.to_string()).collect();
            rec.push(v.to_string());
            w.write_record(&rec)?;
        }
        w.flush().map_err(csv::Error::from)?;
        Ok(())
    }
}

/// Piecewise-linear reconstruction of sensor values.
pub fn sensor_function<'a>(xs: &'a [f64], ys: &'a [f64]) -> impl Fn(f64) -> f64 + 'a {
    move |x| interp_linear(xs, ys, x)
}

/// Thomas algorithm for `a_i x_{i−1} + b_i x_i + c_i x_{i+1} = d_i`.
/// `a[0]` and `c[n−1]` are ignored.
pub fn solve_tridiagonal(a: &[f64], b: &[f64], c: &[f64], d: &[f64]) -> Result<Vec<f64>, SolverError> {
    let n = d.len();
    let mut cp = vec![0.0; n];
    let mut dp = vec![0.0; n];
    let mut denom = b[0];
    if denom == 0.0 {
        return Err(SolverError::Singular { row: 0 });
    }
    cp[0] = c[0] / denom;
    dp[0] = d[0] / denom;
    for i in 1..n {
        denom = b[i] - a[i] * cp[i - 1];
        if denom == 0.0 || !denom.is_finite() {
            return Err(SolverError::Singular { row: i });
        }
        cp[i] = if i + 1 < n { c[i] / denom } else { 0.0 };
        dp[i] = (d[i] - a[i] * dp[i - 1]) / denom;
    }
    let mut x = vec![0.0; n];
    x[n - 1] = dp[n - 1];
    for i in (0..n - 1).rev() {
        x[i] = dp[i] - cp[i] * x[i + 1];
    }
    Ok(x)
}

// Dormand–Prince 5(4) tableau.
const DP_C: [f64; 7] = [0.0, 1.0 / 5.0, 3.0 / 10.0, 4.0 / 5.0, 8.0 / 9.0, 1.0, 1.0];
const DP_A: [[f64; 6]; 7] = [
    [0.0; 6],
    [1.0 / 5.0, 0.0, 0.0, 0.0, 0.0, 0.0],
    [3.0 / 40.0, 9.0 / 40.0, 0.0, 0.0, 0.0, 0.0],
    [44.0 / 45.0, -56.0 / 15.0, 32.0 / 9.0, 0.0, 0.0, 0.0],
    [19372.0 / 6561.0, -25360.0 / 2187.0, 64448.0 / 6561.0, -212.0 / 729.0, 0.0, 0.0],
    [9017.0 / 3168.0, -355.0 / 33.0, 46732.0 / 5247.0, 49.0 / 176.0, -5103.0 / 18656.0, 0.0],
    [35.0 / 384.0, 0.0, 500.0 / 1113.0, 125.0 / 192.0, -2187.0 / 6784.0, 11.0 / 84.0],
];
const DP_B5: [f64; 7] = [35.0 / 384.0, 0.0, 500.0 / 1113.0, 125.0 / 192.0, -2187.0 / 6784.0, 11.0 / 84.0, 0.0];
const DP_B4: [f64; 7] = [
    5179.0 / 57600.0,
    0.0,
    7571.0 / 16695.0,
    393.0 / 640.0,
    -92097.0 / 339200.0,
    187.0 / 2100.0,
    1.0 / 40.0,
];

/// One Dormand–Prince step: fifth-order solution and error estimate.
fn dp_step(rhs: &impl Fn(f64, f64) -> f64, x: f64, u: f64, h: f64) -> (f64, f64) {
    let mut k = [0.0; 7];
    for s in 0..7 {
        let du: f64 = (0..s).map(|j| DP_A[s][j] * k[j]).sum();
        k[s] = rhs(x + DP_C[s] * h, u + h * du);
    }
    let u5 = u + h * (0..7).map(|s| DP_B5[s] * k[s]).sum::<f64>();
    let u4 = u + h * (0..7).map(|s| DP_B4[s] * k[s]).sum::<f64>();
    (u5, u5 - u4)
}

/// Fixed-step Dormand–Prince integration of `u' = rhs(x, u)` from `x0` to `x1`.
pub fn dopri5_fixed(rhs: impl Fn(f64, f64) -> f64, x0: f64, u0: f64, x1: f64, steps: usize) -> f64 {
    let h = (x1 - x0) / steps as f64;
    let mut u = u0;
    for i in 0..steps {
        u = dp_step(&rhs, x0 + i as f64 * h, u, h).0;
    }
    u
}

/// Adaptive Dormand–Prince integration of `u' = rhs(x, u)`, `u(x0) = u0`,
/// reporting `u` at each of the sorted `outputs ≥ x0`.
pub fn dopri5_adaptive(
    rhs: impl Fn(f64, f64) -> f64,
    x0: f64,
    u0: f64,
    outputs: &[f64],
    atol: f64,
    rtol: f64,
) -> Result<Vec<f64>, SolverError> {
    let mut out = Vec::with_capacity(outputs.len());
    let (mut x, mut u) = (x0, u0);
    let mut h: f64 = 1e-3;
    let h_min = 1e-14;
    for &target in outputs {
        if target < x {
            return Err(SolverError::BadInput("output grid must be sorted and start at or after x0".into()));
        }
        while x < target {
            let step = h.min(target - x);
            let (u_new, err) = dp_step(&rhs, x, u, step);
            let scale = atol + rtol * u.abs().max(u_new.abs());
            let ratio = err.abs() / scale;
            if ratio <= 1.0 {
                x = if step == target - x { target } else { x + step };
                u = u_new;
            }
            let factor = if ratio == 0.0 { 5.0 } else { (0.9 * ratio.powf(-0.2)).clamp(0.2, 5.0) };
            h = step * factor;
            if h < h_min && x < target {
                return Err(SolverError::StepUnderflow { x });
            }
        }
        out.push(u);
    }
    Ok(out)
}

/// `u' = f(x)`, `u(0) = 0`, with absolute tolerance `1e-8`.
pub fn solve_ode_rk45(f: impl Fn(f64) -> f64, output_grid: &[f64]) -> Result<GridSolution, SolverError> {
    if output_grid.windows(2).any(|w| w[0] >= w[1]) || output_grid.first().is_some_and(|&x| x < 0.0) {
        return Err(SolverError::BadInput("output grid must be increasing within [0, 1]".into()));
    }
    let values = dopri5_adaptive(|x, _| f(x), 0.0, 0.0, output_grid, 1e-8, 1e-8)?;
    GridSolution::new(
        vec![output_grid.to_vec()],
        values,
        SolverMeta { method: "dopri5".into(), resolution: vec![output_grid.len()], order: 5.0 },
    )
}

fn check_grid(n: usize, what: &str) -> Result<(), SolverError> {
    if n < 3 {
        return Err(SolverError::BadInput(format!("{what} needs at least 3 grid points, got {n}")));
    }
    Ok(())
}

/// `−u″ = f` on `[0,1]`, `u(0) = u(1) = 0`, central differences.
pub fn solve_poisson_1d_fd(f: impl Fn(f64) -> f64, n_grid: usize) -> Result<GridSolution, SolverError> {
    check_grid(n_grid, "poisson")?;
    let xs = uniform_grid(n_grid);
    let h = 1.0 / (n_grid - 1) as f64;
    let n = n_grid - 2;
    let off = vec![-1.0; n];
    let diag = vec![2.0; n];
    let rhs: Vec<f64> = (1..=n).map(|i| h * h * f(xs[i])).collect();
    let inner = solve_tridiagonal(&off, &diag, &off, &rhs)?;
    let mut values = vec![0.0; n_grid];
    values[1..=n].copy_from_slice(&inner);
    GridSolution::new(
        vec![xs],
        values,
        SolverMeta { method: "fd_central".into(), resolution: vec![n_grid], order: 2.0 },
    )
}

/// `−u″ + c·u = f` on `[0,1]` with `u′(0) = u′(1) = 0`, central differences
/// and ghost-point closure.
pub fn solve_helmholtz_neumann_fd(f: impl Fn(f64) -> f64, shift: f64, n_grid: usize) -> Result<GridSolution, SolverError> {
    check_grid(n_grid, "helmholtz")?;
    if !(shift > 0.0) {
        return Err(SolverError::BadInput("helmholtz shift must be positive".into()));
    }
    let xs = uniform_grid(n_grid);
    let h = 1.0 / (n_grid - 1) as f64;
    let h2 = h * h;
    let n = n_grid;
    let mut a = vec![-1.0; n];
    let b = vec![2.0 + shift * h2; n];
    let mut c = vec![-1.0; n];
    c[0] = -2.0;
    a[n - 1] = -2.0;
    let rhs: Vec<f64> = xs.iter().map(|&x| h2 * f(x)).collect();
    let values = solve_tridiagonal(&a, &b, &c, &rhs)?;
    GridSolution::new(
        vec![xs],
        values,
        SolverMeta { method: "fd_central_ghost_neumann".into(), resolution: vec![n_grid], order: 2.0 },
    )
}

/// `Σ c_rs sin(rπx) sin(sπy) / ((r²+s²)π²)` at one point.
pub fn poisson_2d_value(coeffs: &Array2<f64>, x: f64, y: f64) -> f64 {
    let mut acc = 0.0;
    for ((r, s), &c) in coeffs.indexed_iter() {
        let (r, s) = ((r + 1) as f64, (s + 1) as f64);
        acc += c * (r * PI * x).sin() * (s * PI * y).sin() / ((r * r + s * s) * PI * PI);
    }
    acc
}

/// Exact solution of `−Δu = Σ c_rs sin(rπx) sin(sπy)` with zero boundary
/// values on the tensor grid `xs × ys`.
pub fn solve_poisson_2d_analytic(coeffs: &Array2<f64>, xs: &[f64], ys: &[f64]) -> Result<GridSolution, SolverError> {
    let values = xs.iter().flat_map(|&x| ys.iter().map(move |&y| poisson_2d_value(coeffs, x, y))).collect();
    let (rs, ss) = coeffs.dim();
    GridSolution::new(
        vec![xs.to_vec(), ys.to_vec()],
        values,
        SolverMeta { method: "eigen_expansion".into(), resolution: vec![rs, ss], order: f64::INFINITY },
    )
}

/// Sine coefficients of grid values on a uniform `side×side` grid (x index
/// outer). Exact for modes up to `side − 2` in each direction.
pub fn sine_coefficients(values: &[f64], side: usize) -> Array2<f64> {
    let n = side - 1;
    let modes = side - 2;
    let g = uniform_grid(side);
    let sin_tab = Array2::from_shape_fn((modes, side), |(r, i)| ((r + 1) as f64 * PI * g[i]).sin());
    let f = Array2::from_shape_fn((side, side), |(i, j)| values[i * side + j]);
    let scale = (2.0 / n as f64).powi(2);
    // c = S·F·Sᵀ, boundary rows contribute zero through the sine table.
    sin_tab.dot(&f).dot(&sin_tab.t()) * scale
}

/// Time integrator for the heat solver.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum TimeScheme {
    #[default]
    CrankNicolson,
    ImplicitEuler,
}

/// Which heat problem to solve.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum HeatMode {
    /// `u(x,0) = f(x)`, no source.
    InitialCondition,
    /// `u(x,0) = 0`, constant-in-time source `f(x)`.
    Source,
}

/// `u_t − α u_xx = s(x)` on `[0,1]×[0,t_final]` with zero Dirichlet
/// boundaries, `nx` space and `nt` time points.
pub fn solve_heat_fd(
    mode: HeatMode,
    f: impl Fn(f64) -> f64,
    alpha: f64,
    nx: usize,
    nt: usize,
    t_final: f64,
    scheme: TimeScheme,
) -> Result<GridSolution, SolverError> {
    check_grid(nx, "heat")?;
    if nt < 2 || !(alpha > 0.0) || !(t_final > 0.0) {
        return Err(SolverError::BadInput("heat needs nt ≥ 2, α > 0 and t_final > 0".into()));
    }
    let xs = uniform_grid(nx);
    let ts: Vec<f64> = (0..nt).map(|k| t_final * k as f64 / (nt - 1) as f64).collect();
    let h = 1.0 / (nx - 1) as f64;
    let dt = t_final / (nt - 1) as f64;
    let r = alpha * dt / (h * h);
    let n = nx - 2;
    let theta = match scheme {
        TimeScheme::CrankNicolson => 0.5,
        TimeScheme::ImplicitEuler => 1.0,
    };
    let (src, u0): (Vec<f64>, Vec<f64>) = match mode {
        HeatMode::InitialCondition => (vec![0.0; n], xs.iter().map(|&x| f(x)).collect()),
        HeatMode::Source => ((1..=n).map(|i| f(xs[i])).collect(), vec![0.0; nx]),
    };
    let off = vec![-theta * r; n];
    let diag = vec![1.0 + 2.0 * theta * r; n];
    // Stored time-major then transposed to x-outer.
    let mut rows: Vec<Vec<f64>> = Vec::with_capacity(nt);
    rows.push(u0.clone());
    let mut u: Vec<f64> = u0[1..=n].to_vec();
    // Boundary values of the initial condition act only at t = 0.
    let (mut left, mut right) = (u0[0], u0[nx - 1]);
    for _ in 1..nt {
        let rhs: Vec<f64> = (0..n)
            .map(|i| {
                let ul = if i == 0 { left } else { u[i - 1] };
                let ur = if i + 1 == n { right } else { u[i + 1] };
                u[i] + (1.0 - theta) * r * (ul - 2.0 * u[i] + ur) + dt * src[i]
            })
            .collect();
        u = solve_tridiagonal(&off, &diag, &off, &rhs)?;
        left = 0.0;
        right = 0.0;
        let mut full = vec![0.0; nx];
        full[1..=n].copy_from_slice(&u);
        rows.push(full);
    }
    let values = (0..nx).flat_map(|i| rows.iter().map(move |row| row[i])).collect();
    let method = match scheme {
        TimeScheme::CrankNicolson => "crank_nicolson",
        TimeScheme::ImplicitEuler => "implicit_euler",
    };
    let order = if scheme == TimeScheme::CrankNicolson { 2.0 } else { 1.0 };
    GridSolution::new(vec![xs, ts], values, SolverMeta { method: method.into(), resolution: vec![nx, nt], order })
}

/// Diffusion–reaction variant.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ReactionMode {
    /// `u_t − D u_xx − k u² − f(x) = 0`, `f` is the input.
    Source,
    /// `u_t − D u_xx + k(x) u² − sin(πx) = 0`, `k` is the input.
    Coefficient,
}

pub const PICARD_TOL: f64 = 1e-10;
pub const PICARD_MAX_ITER: usize = 50;

/// Implicit Euler in time with Picard iteration on `u²`, zero Dirichlet
/// boundaries and zero initial condition on `[0,1]²`.
pub fn solve_diffusion_reaction(
    input: impl Fn(f64) -> f64,
    mode: ReactionMode,
    diffusion: f64,
    k_const: f64,
    nx: usize,
    nt: usize,
) -> Result<GridSolution, SolverError> {
    check_grid(nx, "diffusion-reaction")?;
    if nt < 2 || !(diffusion > 0.0) {
        return Err(SolverError::BadInput("diffusion-reaction needs nt ≥ 2 and D > 0".into()));
    }
    let xs = uniform_grid(nx);
    let ts = uniform_grid(nt);
    let h = 1.0 / (nx - 1) as f64;
    let dt = 1.0 / (nt - 1) as f64;
    let r = diffusion * dt / (h * h);
    let n = nx - 2;
    let inner: Vec<f64> = xs[1..=n].to_vec();
    // Signed reaction coefficient σ(x) in u_t = D u_xx + σ u² + s.
    let (sigma, src): (Vec<f64>, Vec<f64>) = match mode {
        ReactionMode::Source => (vec![k_const; n], inner.iter().map(|&x| input(x)).collect()),
        ReactionMode::Coefficient => {
            let k: Vec<f64> = inner.iter().map(|&x| input(x)).collect();
            if k.iter().any(|&v| !(v >= 0.0)) {
                return Err(SolverError::BadInput("reaction coefficient must be non-negative".into()));
            }
            (k.iter().map(|v| -v).collect(), inner.iter().map(|&x| (PI * x).sin()).collect())
        }
    };
    let off = vec![-r; n];
    let diag = vec![1.0 + 2.0 * r; n];
    let mut rows: Vec<Vec<f64>> = vec![vec![0.0; nx]];
    let mut u = vec![0.0; n];
    for step in 1..nt {
        let mut iterate = u.clone();
        let mut converged = false;
        let mut change = f64::INFINITY;
        for _ in 0..PICARD_MAX_ITER {
            let rhs: Vec<f64> =
                (0..n).map(|i| u[i] + dt * (src[i] + sigma[i] * iterate[i] * iterate[i])).collect();
            let next = solve_tridiagonal(&off, &diag, &off, &rhs)?;
            change = next.iter().zip(&iterate).fold(0.0, |m, (a, b)| m.max((a - b).abs()));
            iterate = next;
            if !change.is_finite() {
                break;
            }
            if change < PICARD_TOL {
                converged = true;
                break;
            }
        }
        if !converged {
            return Err(SolverError::PicardDiverged { step, change });
        }
        u = iterate;
        let mut full = vec![0.0; nx];
        full[1..=n].copy_from_slice(&u);
        rows.push(full);
    }
    let values = (0..nx).flat_map(|i| rows.iter().map(move |row| row[i])).collect();
    GridSolution::new(
        vec![xs, ts],
        values,
        SolverMeta { method: "implicit_euler_picard".into(), resolution: vec![nx, nt], order: 1.0 },
    )
}

/// Default resolution for 1-D elliptic solves.
pub const DEFAULT_NX_ELLIPTIC: usize = 201;
/// Default space and time resolution for parabolic solves.
pub const DEFAULT_N_PARABOLIC: usize = 201;

/// Reference solution of `problem` for the input sampled on its sensors,
/// evaluated at `points`.
pub fn reference_solution(problem: &Problem, input: &[f64], points: &Array2<f64>) -> Result<Vec<f64>, SolverError> {
    if input.len() != problem.sensor_count() {
        return Err(SolverError::BadInput(format!(
            "input has {} values, problem has {} sensors",
            input.len(),
            problem.sensor_count()
        )));
    }
    let spec = problem.spec();
    let (xs, side) = match problem.sensors() {
        SensorLayout::Line(xs) => (xs.as_slice(), 0),
        SensorLayout::Grid { xs, .. } => (xs.as_slice(), xs.len()),
    };
    let f = sensor_function(xs, input);
    let n = DEFAULT_N_PARABOLIC;
    let sol = match spec.kind {
        ProblemKind::Antiderivative => {
            let grid: Vec<f64> = points.column(0).to_vec();
            let sorted = grid.windows(2).all(|w| w[0] < w[1]);
            if sorted {
                return Ok(solve_ode_rk45(f, &grid)?.values);
            }
            solve_ode_rk45(f, &uniform_grid(DEFAULT_NX_ELLIPTIC))?
        }
        ProblemKind::Poisson1d => solve_poisson_1d_fd(f, DEFAULT_NX_ELLIPTIC)?,
        ProblemKind::HelmholtzNeumann => solve_helmholtz_neumann_fd(f, spec.constant("helmholtz_shift"), DEFAULT_NX_ELLIPTIC)?,
        ProblemKind::Poisson2d => {
            let coeffs = sine_coefficients(input, side);
            return Ok(points.axis_iter(Axis(0)).map(|p| poisson_2d_value(&coeffs, p[0], p[1])).collect());
        }
        ProblemKind::HeatIc => {
            solve_heat_fd(HeatMode::InitialCondition, f, spec.constant("alpha"), n, n, 1.0, TimeScheme::CrankNicolson)?
        }
        ProblemKind::HeatSource => {
            solve_heat_fd(HeatMode::Source, f, spec.constant("alpha"), n, n, 1.0, TimeScheme::CrankNicolson)?
        }
        ProblemKind::DiffrecSource => solve_diffusion_reaction(
            f,
            ReactionMode::Source,
            spec.constant("diffusion"),
            spec.constant("reaction"),
            n,
            n,
        )?,
        ProblemKind::DiffrecCoeff => {
            solve_diffusion_reaction(f, ReactionMode::Coefficient, spec.constant("diffusion"), 0.0, n, n)?
        }
    };
    Ok(sol.interpolate(points))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn max_err(a: &[f64], b: impl Fn(usize) -> f64) -> f64 {
        a.iter().enumerate().fold(0.0, |m, (i, v)| m.max((v - b(i)).abs()))
    }

    #[test]
    fn thomas_solves_small_system() {
        let x = solve_tridiagonal(&[0.0, 1.0, 1.0], &[4.0, 4.0, 4.0], &[1.0, 1.0, 0.0], &[5.0, 6.0, 5.0]).unwrap();
        for v in x {
            assert!((v - 1.0).abs() < 1e-15);
        }
        assert!(matches!(solve_tridiagonal(&[0.0], &[0.0], &[0.0], &[1.0]), Err(SolverError::Singular { row: 0 })));
    }

    #[test]
    fn rk45_trivial_cases() {
        let grid = uniform_grid(11);
        let s = solve_ode_rk45(|_| 1.0, &grid).unwrap();
        assert!(max_err(&s.values, |i| grid[i]) <= 1e-8);
        let z = solve_ode_rk45(|_| 0.0, &grid).unwrap();
        assert!(z.values.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn rk45_cosine_from_sensors() {
        let xs = uniform_grid(200);
        let ys: Vec<f64> = xs.iter().map(|&x| (PI * x).cos()).collect();
        let s = solve_ode_rk45(sensor_function(&xs, &ys), &[0.5, 1.0]).unwrap();
        assert!(s.values[1].abs() <= 2e-4);
        assert!((s.values[0] - 1.0 / PI).abs() <= 2e-4);
    }

    #[test]
    fn poisson_analytic_and_zero() {
        let s = solve_poisson_1d_fd(|x| PI * PI * (PI * x).sin(), 1001).unwrap();
        let xs = &s.axes[0];
        assert!(max_err(&s.values, |i| (PI * xs[i]).sin()) <= 1e-5);
        let z = solve_poisson_1d_fd(|_| 0.0, 11).unwrap();
        assert!(z.values.iter().all(|&v| v == 0.0));
        assert!(solve_poisson_1d_fd(|_| 0.0, 2).is_err());
    }

    #[test]
    fn helmholtz_cases() {
        let s = solve_helmholtz_neumann_fd(|_| 2.0, 2.0, 51).unwrap();
        assert!(max_err(&s.values, |_| 1.0) < 1e-12);
        let s = solve_helmholtz_neumann_fd(|x| (2.0 + PI * PI) * (PI * x).cos(), 2.0, 1001).unwrap();
        let xs = &s.axes[0];
        assert!(max_err(&s.values, |i| (PI * xs[i]).cos()) <= 1e-4);
    }

    #[test]
    fn poisson_2d_single_mode() {
        let c = Array2::from_elem((1, 1), 1.0);
        let g = uniform_grid(3);
        let s = solve_poisson_2d_analytic(&c, &g, &g).unwrap();
        assert!((s.at(1, 1) - 1.0 / (2.0 * PI * PI)).abs() < 1e-15);
        assert!(s.at(0, 1).abs() < 1e-15 && s.at(2, 2).abs() < 1e-15);
    }

    #[test]
    fn sine_coefficients_recover_modes() {
        let side = 21;
        let c = Array2::from_shape_fn((10, 10), |(r, s)| ((r * 7 + s * 3) % 5) as f64 - 2.0);
        let g = uniform_grid(side);
        let vals: Vec<f64> = (0..side * side)
            .map(|k| crate::function_spaces::eval_bitrig(&c, g[k / side], g[k % side]))
            .collect();
        let back = sine_coefficients(&vals, side);
        for ((r, s), &v) in back.indexed_iter() {
            let expect = if r < 10 && s < 10 { c[(r, s)] } else { 0.0 };
            assert!((v - expect).abs() < 1e-10);
        }
    }

    #[test]
    fn heat_initial_condition_decay() {
        let s = solve_heat_fd(HeatMode::InitialCondition, |x| (PI * x).sin(), 0.01, 401, 401, 1.0, TimeScheme::CrankNicolson)
            .unwrap();
        let pts = s.points();
        let err = max_err(&s.values, |k| (-0.01 * PI * PI * pts[(k, 1)]).exp() * (PI * pts[(k, 0)]).sin());
        assert!(err <= 1e-4, "{err}");
    }

    #[test]
    fn heat_zero_source() {
        let s = solve_heat_fd(HeatMode::Source, |_| 0.0, 0.01, 21, 21, 1.0, TimeScheme::CrankNicolson).unwrap();
        assert!(s.values.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn diffusion_reaction_degenerate_and_zero() {
        let z = solve_diffusion_reaction(|_| 0.0, ReactionMode::Source, 0.01, 0.01, 21, 21).unwrap();
        assert!(z.values.iter().all(|&v| v == 0.0));
        let f = |x: f64| (2.0 * PI * x).sin() + x;
        let dr = solve_diffusion_reaction(f, ReactionMode::Source, 0.01, 0.0, 101, 101).unwrap();
        let heat = solve_heat_fd(HeatMode::Source, f, 0.01, 101, 101, 1.0, TimeScheme::ImplicitEuler).unwrap();
        assert!(max_err(&dr.values, |i| heat.values[i]) <= 1e-6);
    }

    #[test]
    fn grid_solution_csv_and_interpolation() {
        let s = solve_poisson_1d_fd(|_| 1.0, 5).unwrap();
        let mut buf = Vec::new();
        s.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("x,value\n"));
        assert_eq!(text.lines().count(), 6);
        let v = s.interpolate(&Array2::from_shape_vec((1, 1), vec![0.25]).unwrap());
        assert_eq!(v[0], s.values[1]);
    }
}

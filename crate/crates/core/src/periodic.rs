//! T-periodic matrix functions and their evolution families.
//!
//! Coefficient matrices are truncated Fourier series per entry, so
//! periodicity is exact by construction and linear operations (sums,
//! aggregation by a zero-eigenbasis, products) stay in the same
//! representation. Monodromy maps come from classical fixed-step RK4; a
//! fourth-order commutator-free Magnus integrator takes over when the step
//! count RK4 would need for stability at large dispersal becomes
//! impractical. Both are deterministic for fixed inputs.

use num_complex::Complex;

use crate::error::{Error, Result};
use crate::matrix::{self, Matrix, Vector};
use crate::zero_structure::ZeroEigenBasis;

/// Default integration resolution.
pub const DEFAULT_STEPS_PER_PERIOD: usize = 4096;
/// Largest step count the RK4 stability rule may request before the
/// integrator switches to the Magnus method.
pub const RK4_STEP_LIMIT: usize = 65_536;
/// Minimum admissible steps per period.
pub const MIN_STEPS_PER_PERIOD: usize = 16;
/// Grid resolution used for pointwise validations.
pub const VALIDATION_GRID: usize = 1024;

/// One truncated Fourier series
/// `c0 + sum_k a_k cos(2 pi k t / T) + b_k sin(2 pi k t / T)`.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct FourierSeries {
    c0: f64,
    cos: Vec<f64>,
    sin: Vec<f64>,
}

impl FourierSeries {
    pub fn new(c0: f64, cos: Vec<f64>, sin: Vec<f64>) -> Self {
        Self { c0, cos, sin }
    }

    pub fn constant(c0: f64) -> Self {
        Self {
            c0,
            cos: Vec::new(),
            sin: Vec::new(),
        }
    }

    pub fn mean(&self) -> f64 {
        self.c0
    }

    pub fn cos_coefficients(&self) -> &[f64] {
        &self.cos
    }

    pub fn sin_coefficients(&self) -> &[f64] {
        &self.sin
    }

    /// Number of harmonics carried (trailing zeros included).
    pub fn harmonics(&self) -> usize {
        self.cos.len().max(self.sin.len())
    }

    pub fn is_finite(&self) -> bool {
        self.c0.is_finite()
            && self.cos.iter().all(|x| x.is_finite())
            && self.sin.iter().all(|x| x.is_finite())
    }

    pub fn eval(&self, t: f64, period: f64) -> f64 {
        let theta = std::f64::consts::TAU * (t.rem_euclid(period) / period);
        let mut out = self.c0;
        for (k, &a) in self.cos.iter().enumerate() {
            out += a * ((k + 1) as f64 * theta).cos();
        }
        for (k, &b) in self.sin.iter().enumerate() {
            out += b * ((k + 1) as f64 * theta).sin();
        }
        out
    }

    fn eval_with_tables(&self, cos_t: &[f64], sin_t: &[f64]) -> f64 {
        let mut out = self.c0;
        for (k, &a) in self.cos.iter().enumerate() {
            out += a * cos_t[k];
        }
        for (k, &b) in self.sin.iter().enumerate() {
            out += b * sin_t[k];
        }
        out
    }

    pub fn scaled(&self, factor: f64) -> Self {
        Self {
            c0: self.c0 * factor,
            cos: self.cos.iter().map(|x| x * factor).collect(),
            sin: self.sin.iter().map(|x| x * factor).collect(),
        }
    }

    pub fn plus(&self, other: &Self) -> Self {
        let nc = self.cos.len().max(other.cos.len());
        let ns = self.sin.len().max(other.sin.len());
        let mut cos = vec![0.0; nc];
        let mut sin = vec![0.0; ns];
        for (k, &a) in self.cos.iter().enumerate() {
            cos[k] += a;
        }
        for (k, &a) in other.cos.iter().enumerate() {
            cos[k] += a;
        }
        for (k, &b) in self.sin.iter().enumerate() {
            sin[k] += b;
        }
        for (k, &b) in other.sin.iter().enumerate() {
            sin[k] += b;
        }
        Self {
            c0: self.c0 + other.c0,
            cos,
            sin,
        }
    }

    /// Exact product of two series (harmonic convolution).
    pub fn product(&self, other: &Self) -> Self {
        let ka = self.harmonics() as isize;
        let kb = other.harmonics() as isize;
        let a = self.complex_coefficients();
        let b = other.complex_coefficients();
        let kc = ka + kb;
        let mut c = vec![Complex::new(0.0, 0.0); (2 * kc + 1) as usize];
        for (i, &ai) in a.iter().enumerate() {
            let ki = i as isize - ka;
            for (j, &bj) in b.iter().enumerate() {
                let kj = j as isize - kb;
                c[(ki + kj + kc) as usize] += ai * bj;
            }
        }
        Self::from_complex_coefficients(&c, kc as usize)
    }

    /// Term-by-term derivative.
    pub fn derivative(&self, period: f64) -> Self {
        let omega = std::f64::consts::TAU / period;
        let k = self.harmonics();
        let mut cos = vec![0.0; k];
        let mut sin = vec![0.0; k];
        for i in 0..k {
            let w = (i + 1) as f64 * omega;
            let a = self.cos.get(i).copied().unwrap_or(0.0);
            let b = self.sin.get(i).copied().unwrap_or(0.0);
            cos[i] = w * b;
            sin[i] = -w * a;
        }
        Self { c0: 0.0, cos, sin }
    }

    /// Closed-form integral of the series from 0 to `t`.
    pub fn integral_from_zero(&self, t: f64, period: f64) -> f64 {
        let omega = std::f64::consts::TAU / period;
        let mut out = self.c0 * t;
        for (k, &a) in self.cos.iter().enumerate() {
            let w = (k + 1) as f64 * omega;
            out += a * (w * t).sin() / w;
        }
        for (k, &b) in self.sin.iter().enumerate() {
            let w = (k + 1) as f64 * omega;
            out += b * (1.0 - (w * t).cos()) / w;
        }
        out
    }

    /// Projection of uniformly spaced samples over one period
    /// (sample `j` taken at `t = j T / N`, endpoint excluded).
    pub fn fit(samples: &[f64], harmonics: usize) -> Self {
        let n = samples.len();
        let c0 = samples.iter().sum::<f64>() / n as f64;
        let mut cos = vec![0.0; harmonics];
        let mut sin = vec![0.0; harmonics];
        for k in 1..=harmonics {
            let mut ak = 0.0;
            let mut bk = 0.0;
            for (j, &f) in samples.iter().enumerate() {
                let th = std::f64::consts::TAU * ((k * j) % n) as f64 / n as f64;
                ak += f * th.cos();
                bk += f * th.sin();
            }
            cos[k - 1] = 2.0 * ak / n as f64;
            sin[k - 1] = 2.0 * bk / n as f64;
        }
        Self { c0, cos, sin }
    }

    fn complex_coefficients(&self) -> Vec<Complex<f64>> {
        let k = self.harmonics();
        let mut c = vec![Complex::new(0.0, 0.0); 2 * k + 1];
        c[k] = Complex::new(self.c0, 0.0);
        for i in 0..k {
            let a = self.cos.get(i).copied().unwrap_or(0.0);
            let b = self.sin.get(i).copied().unwrap_or(0.0);
            c[k + i + 1] = Complex::new(a / 2.0, -b / 2.0);
            c[k - i - 1] = Complex::new(a / 2.0, b / 2.0);
        }
        c
    }

    fn from_complex_coefficients(c: &[Complex<f64>], k: usize) -> Self {
        let mut cos = vec![0.0; k];
        let mut sin = vec![0.0; k];
        for i in 0..k {
            cos[i] = 2.0 * c[k + i + 1].re;
            sin[i] = -2.0 * c[k + i + 1].im;
        }
        Self {
            c0: c[k].re,
            cos,
            sin,
        }
    }

    pub(crate) fn add_to_mean(&mut self, delta: f64) {
        self.c0 += delta;
    }
}

/// A T-periodic matrix-valued function with truncated Fourier entries.
#[derive(Debug, Clone)]
pub struct PeriodicMatrixFn {
    dim: usize,
    period: f64,
    entries: Vec<FourierSeries>,
    cooperative: bool,
    max_harmonics: usize,
}

impl PeriodicMatrixFn {
    /// `entries` are row-major, length `dim * dim`.
    pub fn new(dim: usize, period: f64, entries: Vec<FourierSeries>) -> Result<Self> {
        if dim == 0 {
            return Err(Error::InvalidMatrix("dimension must be positive".into()));
        }
        if !(period > 0.0) || !period.is_finite() {
            return Err(Error::InvalidMatrix(format!("invalid period {period}")));
        }
        if entries.len() != dim * dim {
            return Err(Error::InvalidMatrix(format!(
                "expected {} entry series, got {}",
                dim * dim,
                entries.len()
            )));
        }
        if entries.iter().any(|e| !e.is_finite()) {
            return Err(Error::InvalidMatrix(
                "non-finite Fourier coefficient".into(),
            ));
        }
        let max_harmonics = entries.iter().map(|e| e.harmonics()).max().unwrap_or(0);
        Ok(Self {
            dim,
            period,
            entries,
            cooperative: false,
            max_harmonics,
        })
    }

    /// As [`PeriodicMatrixFn::new`], then checks cooperativity on the
    /// validation grid and flags the function.
    pub fn cooperative(dim: usize, period: f64, entries: Vec<FourierSeries>) -> Result<Self> {
        let f = Self::new(dim, period, entries)?;
        f.validate_cooperative_on_grid()?;
        Ok(Self {
            cooperative: true,
            ..f
        })
    }

    pub fn constant(m: &Matrix, period: f64) -> Result<Self> {
        matrix::check_square_finite(m)?;
        let n = m.nrows();
        let entries = (0..n * n)
            .map(|k| FourierSeries::constant(m[(k / n, k % n)]))
            .collect();
        let f = Self::new(n, period, entries)?;
        Ok(Self {
            cooperative: matrix::is_cooperative(m),
            ..f
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn period(&self) -> f64 {
        self.period
    }

    pub fn entry(&self, i: usize, j: usize) -> &FourierSeries {
        &self.entries[i * self.dim + j]
    }

    pub fn is_cooperative_flagged(&self) -> bool {
        self.cooperative
    }

    /// Marks the function cooperative without a grid check; for internal
    /// combinations whose cooperativity is known structurally.
    pub fn assume_cooperative(mut self) -> Self {
        self.cooperative = true;
        self
    }

    /// Off-diagonal entries must stay above `-1e-12` (relative to the
    /// coefficient scale) on a 1024-point period grid.
    pub fn validate_cooperative_on_grid(&self) -> Result<()> {
        let scale = self
            .entries
            .iter()
            .map(|e| {
                e.c0.abs().max(
                    e.cos
                        .iter()
                        .chain(e.sin.iter())
                        .fold(0.0, |m: f64, x| m.max(x.abs())),
                )
            })
            .fold(1.0, f64::max);
        let tol = -1e-12 * scale;
        for g in 0..VALIDATION_GRID {
            let t = self.period * g as f64 / VALIDATION_GRID as f64;
            for i in 0..self.dim {
                for j in 0..self.dim {
                    if i != j && self.entry(i, j).eval(t, self.period) < tol {
                        return Err(Error::H2Violation(format!(
                            "off-diagonal entry ({i}, {j}) is negative at t = {t:.6}"
                        )));
                    }
                }
            }
        }
        Ok(())
    }

    pub fn evaluate(&self, t: f64) -> Matrix {
        let mut out = Matrix::zeros(self.dim, self.dim);
        self.eval_into(t, &mut out);
        out
    }

    pub fn eval_into(&self, t: f64, out: &mut Matrix) {
        let theta = std::f64::consts::TAU * (t.rem_euclid(self.period) / self.period);
        // cos(k theta), sin(k theta) by the angle-addition recurrence
        let mut cos_t = [0.0; 64];
        let mut sin_t = [0.0; 64];
        let kmax = self.max_harmonics;
        let (mut cos_v, mut sin_v);
        let (cos_t, sin_t): (&mut [f64], &mut [f64]) = if kmax <= 64 {
            (&mut cos_t[..kmax], &mut sin_t[..kmax])
        } else {
            cos_v = vec![0.0; kmax];
            sin_v = vec![0.0; kmax];
            (&mut cos_v, &mut sin_v)
        };
        if kmax > 0 {
            let (s1, c1) = theta.sin_cos();
            cos_t[0] = c1;
            sin_t[0] = s1;
            for k in 1..kmax {
                cos_t[k] = cos_t[k - 1] * c1 - sin_t[k - 1] * s1;
                sin_t[k] = sin_t[k - 1] * c1 + cos_t[k - 1] * s1;
            }
        }
        for i in 0..self.dim {
            for j in 0..self.dim {
                out[(i, j)] = self.entries[i * self.dim + j].eval_with_tables(cos_t, sin_t);
            }
        }
    }

    pub fn mean_matrix(&self) -> Matrix {
        Matrix::from_fn(self.dim, self.dim, |i, j| self.entry(i, j).mean())
    }

    pub fn scaled(&self, factor: f64) -> Self {
        Self {
            dim: self.dim,
            period: self.period,
            entries: self.entries.iter().map(|e| e.scaled(factor)).collect(),
            cooperative: self.cooperative && factor >= 0.0,
            max_harmonics: self.max_harmonics,
        }
    }

    pub fn plus(&self, other: &Self) -> Result<Self> {
        if self.dim != other.dim || self.period != other.period {
            return Err(Error::Precondition(
                "periodic matrix functions must share dimension and period".into(),
            ));
        }
        let entries: Vec<FourierSeries> = self
            .entries
            .iter()
            .zip(other.entries.iter())
            .map(|(a, b)| a.plus(b))
            .collect();
        let max_harmonics = entries.iter().map(|e| e.harmonics()).max().unwrap_or(0);
        Ok(Self {
            dim: self.dim,
            period: self.period,
            entries,
            cooperative: self.cooperative && other.cooperative,
            max_harmonics,
        })
    }

    /// Adds a constant matrix to the mean terms.
    pub fn with_added_constant(&self, m: &Matrix) -> Result<Self> {
        if m.nrows() != self.dim || m.ncols() != self.dim {
            return Err(Error::Precondition(
                "constant term dimension mismatch".into(),
            ));
        }
        let mut out = self.clone();
        for i in 0..self.dim {
            for j in 0..self.dim {
                out.entries[i * self.dim + j].add_to_mean(m[(i, j)]);
            }
        }
        out.cooperative = self.cooperative && matrix::is_cooperative(m);
        Ok(out)
    }

    /// Aggregates to the reduced function `P M(t) Q`, coefficient by
    /// coefficient; exact because aggregation is linear.
    pub fn aggregated(&self, basis: &ZeroEigenBasis) -> Result<Self> {
        if basis.dim() != self.dim {
            return Err(Error::Precondition(
                "basis dimension does not match the periodic function".into(),
            ));
        }
        let a0 = basis.alpha0();
        let k = self.max_harmonics;
        let coeff = |pick: &dyn Fn(&FourierSeries) -> f64| -> Result<Matrix> {
            let m = Matrix::from_fn(self.dim, self.dim, |i, j| pick(self.entry(i, j)));
            basis.transform(&m)
        };
        let mean = coeff(&|e| e.c0)?;
        let mut cos_mats = Vec::with_capacity(k);
        let mut sin_mats = Vec::with_capacity(k);
        for h in 0..k {
            cos_mats.push(coeff(&move |e| e.cos.get(h).copied().unwrap_or(0.0))?);
            sin_mats.push(coeff(&move |e| e.sin.get(h).copied().unwrap_or(0.0))?);
        }
        let entries: Vec<FourierSeries> = (0..a0 * a0)
            .map(|idx| {
                let (i, j) = (idx / a0, idx % a0);
                FourierSeries {
                    c0: mean[(i, j)],
                    cos: cos_mats.iter().map(|m| m[(i, j)]).collect(),
                    sin: sin_mats.iter().map(|m| m[(i, j)]).collect(),
                }
            })
            .collect();
        let max_harmonics = entries.iter().map(|e| e.harmonics()).max().unwrap_or(0);
        Ok(Self {
            dim: a0,
            period: self.period,
            entries,
            cooperative: self.cooperative,
            max_harmonics,
        })
    }

    /// Largest absolute entry value over the validation grid.
    pub fn max_abs_on_grid(&self) -> f64 {
        let mut out: f64 = 0.0;
        let mut buf = Matrix::zeros(self.dim, self.dim);
        for g in 0..VALIDATION_GRID {
            let t = self.period * g as f64 / VALIDATION_GRID as f64;
            self.eval_into(t, &mut buf);
            out = out.max(buf.amax());
        }
        out
    }
}

/// Fixed-step integrator choice.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Integrator {
    /// Classical 4th-order Runge-Kutta on the matrix ODE.
    RungeKutta4,
    /// 4th-order commutator-free Magnus scheme, two exponentials per step;
    /// unconditionally stable on the dissipative generators used here.
    Magnus4,
}

#[derive(Debug, Clone, Copy)]
pub struct IntegrationPlan {
    pub integrator: Integrator,
    pub steps_per_period: usize,
}

/// Chooses integrator and step count for the generator `d L + M(t)`.
///
/// RK4 needs steps proportional to `d ||L||_inf T` to stay stable; the rule
/// `16 d ||L||_inf T` is honored up to [`RK4_STEP_LIMIT`], beyond which the
/// Magnus integrator runs at the requested resolution instead.
pub fn integration_plan(
    d: f64,
    dispersal_inf_norm: f64,
    period: f64,
    requested: usize,
) -> IntegrationPlan {
    let requested = requested.max(MIN_STEPS_PER_PERIOD);
    let needed = 16.0 * d * dispersal_inf_norm * period;
    if needed <= requested as f64 {
        IntegrationPlan {
            integrator: Integrator::RungeKutta4,
            steps_per_period: requested,
        }
    } else if needed <= RK4_STEP_LIMIT as f64 {
        IntegrationPlan {
            integrator: Integrator::RungeKutta4,
            steps_per_period: needed.ceil() as usize,
        }
    } else {
        IntegrationPlan {
            integrator: Integrator::Magnus4,
            steps_per_period: requested,
        }
    }
}

/// Monodromy map of a periodic generator with its exponential growth bound
/// `ln r(map) / T`.
#[derive(Debug, Clone)]
pub struct MonodromyResult {
    pub map: Matrix,
    pub steps_per_period: usize,
    pub growth_bound: f64,
}

/// Integrates `dPhi/dt = A(t) Phi`, `Phi(0) = I` over one period with
/// classical RK4 at fixed step `T / stepsPerPeriod`.
pub fn monodromy(generator: &PeriodicMatrixFn, steps_per_period: usize) -> Result<MonodromyResult> {
    monodromy_with(generator, steps_per_period, Integrator::RungeKutta4)
}

pub fn monodromy_with(
    generator: &PeriodicMatrixFn,
    steps_per_period: usize,
    integrator: Integrator,
) -> Result<MonodromyResult> {
    if steps_per_period < MIN_STEPS_PER_PERIOD {
        return Err(Error::Precondition(format!(
            "stepsPerPeriod must be at least {MIN_STEPS_PER_PERIOD}"
        )));
    }
    let n = generator.dim();
    let mut map = Matrix::identity(n, n);
    let mut stepper = Stepper::new(n, n, integrator);
    let h = generator.period() / steps_per_period as f64;
    for step in 0..steps_per_period {
        stepper.advance(generator, step as f64 * h, h, &mut map);
        if map.iter().any(|x| !x.is_finite()) {
            return Err(Error::IntegrationOverflow { step });
        }
    }
    if generator.is_cooperative_flagged() {
        for x in map.iter_mut() {
            if *x < 0.0 && *x >= -1e-10 {
                *x = 0.0;
            }
        }
    }
    let r = matrix::spectral_radius(&map)?;
    if !(r > 0.0) {
        return Err(Error::Inconsistency(
            "monodromy spectral radius vanished (underflow or overflow)".into(),
        ));
    }
    Ok(MonodromyResult {
        map,
        steps_per_period,
        growth_bound: r.ln() / generator.period(),
    })
}

// Commutator-free Magnus nodes (Gauss points) and weights; each half-step
// leans on the node nearest to it.
const SQRT3_OVER_6: f64 = 0.288_675_134_594_812_9;
const CF4_C1: f64 = 0.5 - SQRT3_OVER_6;
const CF4_C2: f64 = 0.5 + SQRT3_OVER_6;
const CF4_A1: f64 = 0.25 - SQRT3_OVER_6;
const CF4_A2: f64 = 0.25 + SQRT3_OVER_6;

struct Stepper {
    integrator: Integrator,
    node1: Matrix,
    node2: Matrix,
    k1: Matrix,
    k2: Matrix,
    k3: Matrix,
    k4: Matrix,
    tmp: Matrix,
}

impl Stepper {
    /// `width` is the column count of the propagated state (`n` for the
    /// full propagator, 1 for a single trajectory).
    fn new(n: usize, width: usize, integrator: Integrator) -> Self {
        let z = || Matrix::zeros(n, width);
        Self {
            integrator,
            node1: Matrix::zeros(n, n),
            node2: Matrix::zeros(n, n),
            k1: z(),
            k2: z(),
            k3: z(),
            k4: z(),
            tmp: z(),
        }
    }

    /// Advances the propagator (or a packed set of state columns) from `t`
    /// to `t + h`.
    fn advance(&mut self, gen: &PeriodicMatrixFn, t: f64, h: f64, state: &mut Matrix) {
        match self.integrator {
            Integrator::RungeKutta4 => {
                gen.eval_into(t, &mut self.node1);
                mul_to(&self.node1, state, &mut self.k1);
                assign_axpy(&mut self.tmp, state, 0.5 * h, &self.k1);
                gen.eval_into(t + 0.5 * h, &mut self.node1);
                mul_to(&self.node1, &self.tmp, &mut self.k2);
                assign_axpy(&mut self.tmp, state, 0.5 * h, &self.k2);
                mul_to(&self.node1, &self.tmp, &mut self.k3);
                assign_axpy(&mut self.tmp, state, h, &self.k3);
                gen.eval_into(t + h, &mut self.node1);
                mul_to(&self.node1, &self.tmp, &mut self.k4);
                let w = h / 6.0;
                for i in 0..state.len() {
                    state[i] += w
                        * (self.k1[i] + 2.0 * self.k2[i] + 2.0 * self.k3[i] + self.k4[i]);
                }
            }
            Integrator::Magnus4 => {
                gen.eval_into(t + CF4_C1 * h, &mut self.node1);
                gen.eval_into(t + CF4_C2 * h, &mut self.node2);
                // right factor weights the earlier node more; the left
                // factor swaps the weights
                let right = combined(h * CF4_A2, &self.node1, h * CF4_A1, &self.node2);
                let left = combined(h * CF4_A1, &self.node1, h * CF4_A2, &self.node2);
                let gr = expm(&right);
                let gl = expm(&left);
                mul_to(&gr, state, &mut self.tmp);
                mul_to(&gl, &self.tmp, state);
            }
        }
    }
}

fn mul_to(a: &Matrix, b: &Matrix, out: &mut Matrix) {
    out.gemm(1.0, a, b, 0.0);
}

fn assign_axpy(out: &mut Matrix, base: &Matrix, alpha: f64, x: &Matrix) {
    out.copy_from(base);
    for i in 0..out.len() {
        out[i] += alpha * x[i];
    }
}

fn combined(alpha: f64, x: &Matrix, beta: f64, y: &Matrix) -> Matrix {
    let mut out = Matrix::zeros(x.nrows(), x.ncols());
    for i in 0..out.len() {
        out[i] = alpha * x[i] + beta * y[i];
    }
    out
}

/// Matrix exponential by Pade-13 with scaling and squaring.
pub(crate) fn expm(a: &Matrix) -> Matrix {
    const THETA13: f64 = 5.371920351148152;
    const B: [f64; 14] = [
        64764752532480000.0,
        32382376266240000.0,
        7771770303897600.0,
        1187353796428800.0,
        129060195264000.0,
        10559470521600.0,
        670442572800.0,
        33522128640.0,
        1323241920.0,
        40840800.0,
        960960.0,
        16380.0,
        182.0,
        1.0,
    ];
    let n = a.nrows();
    let norm = (0..n)
        .map(|j| a.column(j).iter().map(|x| x.abs()).sum::<f64>())
        .fold(0.0, f64::max);
    let s = if norm > THETA13 {
        ((norm / THETA13).log2().ceil() as i32).max(0)
    } else {
        0
    };
    let a1 = a * 0.5f64.powi(s);
    let a2 = &a1 * &a1;
    let a4 = &a2 * &a2;
    let a6 = &a2 * &a4;
    let id = Matrix::identity(n, n);
    let u_hi = &a6 * B[13] + &a4 * B[11] + &a2 * B[9];
    let u_poly = &a6 * u_hi + &a6 * B[7] + &a4 * B[5] + &a2 * B[3] + &id * B[1];
    let u = &a1 * u_poly;
    let v_hi = &a6 * B[12] + &a4 * B[10] + &a2 * B[8];
    let v = &a6 * v_hi + &a6 * B[6] + &a4 * B[4] + &a2 * B[2] + &id * B[0];
    let num = &v + &u;
    let den = &v - &u;
    let mut x = den
        .lu()
        .solve(&num)
        .expect("Pade denominator singular; non-finite input to expm");
    for _ in 0..s {
        x = &x * &x;
    }
    x
}

/// Principal eigenvalue `ln r(map) / T` of the periodic problem generated by
/// `d L + M(t)`, with the integrator chosen by [`integration_plan`].
pub fn principal_eigenvalue(
    l: &crate::zero_structure::ConnectivityMatrix,
    m: &PeriodicMatrixFn,
    d: f64,
    steps_per_period: usize,
) -> Result<f64> {
    let (generator, plan) = dispersal_generator(l, m, d, steps_per_period)?;
    Ok(monodromy_with(&generator, plan.steps_per_period, plan.integrator)?.growth_bound)
}

pub(crate) fn dispersal_generator(
    l: &crate::zero_structure::ConnectivityMatrix,
    m: &PeriodicMatrixFn,
    d: f64,
    steps_per_period: usize,
) -> Result<(PeriodicMatrixFn, IntegrationPlan)> {
    if !(d >= 0.0) || !d.is_finite() {
        return Err(Error::Precondition(format!("dispersal rate {d} invalid")));
    }
    if l.dim() != m.dim() {
        return Err(Error::Precondition(
            "connectivity and coefficient dimensions differ".into(),
        ));
    }
    if !m.is_cooperative_flagged() {
        m.validate_cooperative_on_grid()?;
    }
    let generator = m
        .with_added_constant(&(l.matrix() * d))?
        .assume_cooperative();
    let plan = integration_plan(d, l.inf_norm(), m.period(), steps_per_period);
    Ok((generator, plan))
}

/// A trajectory sampled on the integration grid over one period.
#[derive(Debug, Clone)]
pub struct PeriodicTrajectory {
    pub times: Vec<f64>,
    pub values: Vec<Vector>,
}

impl PeriodicTrajectory {
    pub fn dim(&self) -> usize {
        self.values.first().map_or(0, |v| v.len())
    }
}

/// Principal eigenvalue with its nonnegative periodic eigenfunction
/// `u(t) = e^{-lambda t} Phi(t, 0) phi`, normalized so the maximum entry
/// over grid and components is one.
pub fn principal_eigenfunction(
    l: &crate::zero_structure::ConnectivityMatrix,
    m: &PeriodicMatrixFn,
    d: f64,
    steps_per_period: usize,
) -> Result<(f64, PeriodicTrajectory)> {
    let (generator, plan) = dispersal_generator(l, m, d, steps_per_period)?;
    let mono = monodromy_with(&generator, plan.steps_per_period, plan.integrator)?;
    let lambda = mono.growth_bound;
    let phi = nonnegative_eigenvector(&mono.map)?;

    let n = generator.dim();
    let steps = plan.steps_per_period;
    let h = generator.period() / steps as f64;
    let mut stepper = Stepper::new(n, 1, plan.integrator);
    let mut state = Matrix::zeros(n, 1);
    state.column_mut(0).copy_from(&phi);
    let mut times = Vec::with_capacity(steps + 1);
    let mut values = Vec::with_capacity(steps + 1);
    times.push(0.0);
    values.push(phi.clone());
    for step in 0..steps {
        let t = step as f64 * h;
        stepper.advance(&generator, t, h, &mut state);
        if state.iter().any(|x| !x.is_finite()) {
            return Err(Error::IntegrationOverflow { step });
        }
        let tn = (step + 1) as f64 * h;
        times.push(tn);
        values.push(Vector::from_column_slice(state.as_slice()) * (-lambda * tn).exp());
    }
    let peak = values
        .iter()
        .flat_map(|v| v.iter())
        .fold(f64::NEG_INFINITY, |m, &x| m.max(x));
    if !(peak > 0.0) {
        return Err(Error::Inconsistency(
            "principal eigenfunction has no positive part".into(),
        ));
    }
    for v in &mut values {
        v.unscale_mut(peak);
    }
    Ok((lambda, PeriodicTrajectory { times, values }))
}

/// Nonnegative eigenvector of a nonnegative map for its spectral radius:
/// power iteration when the map is entrywise positive, otherwise shifted
/// inverse iteration with a nonnegativity repair.
fn nonnegative_eigenvector(map: &Matrix) -> Result<Vector> {
    let n = map.nrows();
    if map.iter().all(|&x| x > 0.0) {
        return matrix::power_iterate(map);
    }
    let r = matrix::spectral_radius(map)?;
    let sigma = r * (1.0 + 1e-10) + 1e-300;
    let mut shifted = map.clone();
    for i in 0..n {
        shifted[(i, i)] -= sigma;
    }
    let lu = shifted.lu();
    let mut x = Vector::from_element(n, 1.0 / n as f64);
    for _ in 0..64 {
        let mut y = lu.solve(&x).ok_or_else(|| {
            Error::Inconsistency("inverse iteration hit an exactly singular shift".into())
        })?;
        // normalize by the entry of largest magnitude so the dominant
        // component comes out +1
        let (mut pivot, mut pmag) = (0usize, 0.0);
        for (i, &v) in y.iter().enumerate() {
            if v.abs() > pmag {
                pmag = v.abs();
                pivot = i;
            }
        }
        if pmag == 0.0 {
            return Err(Error::Inconsistency("inverse iteration collapsed".into()));
        }
        let pivot_value = y[pivot];
        y.unscale_mut(pivot_value);
        let diff = x
            .iter()
            .zip(y.iter())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        x = y;
        if diff < 1e-13 {
            break;
        }
    }
    for v in x.iter_mut() {
        if *v < 0.0 && *v >= -1e-10 {
            *v = 0.0;
        }
    }
    if x.iter().any(|&v| v < 0.0) {
        return Err(Error::Inconsistency(
            "no nonnegative eigenvector found for the spectral radius".into(),
        ));
    }
    let residual = (map * &x - &x * r).amax();
    if residual > 1e-7 * r.max(1.0) {
        return Err(Error::Inconsistency(format!(
            "eigenvector residual {residual:.3e} too large"
        )));
    }
    Ok(x)
}

/// Sup over the grid of the max-norm of `u(t) - Q P u(t)`, the distance of a
/// trajectory from the aggregated subspace.
pub fn aggregation_residual(basis: &ZeroEigenBasis, u: &PeriodicTrajectory) -> Result<f64> {
    if u.dim() != basis.dim() {
        return Err(Error::Precondition(
            "trajectory dimension does not match the basis".into(),
        ));
    }
    let qp = basis.q() * basis.p();
    let mut worst: f64 = 0.0;
    for v in &u.values {
        let proj = &qp * v;
        let res = v
            .iter()
            .zip(proj.iter())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        worst = worst.max(res);
    }
    Ok(worst)
}

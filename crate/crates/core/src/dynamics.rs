//! Deterministic dynamics: vector fields, undriven and controlled flows,
//! Jacobians and dissipativity probes.
//!
//! Flows are integrated with an embedded Dormand–Prince 5(4) pair by
//! default (relative tolerance `1e-8`, absolute `1e-10`). A fixed-step
//! classical Runge–Kutta scheme is available for reference runs.

use std::fmt;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

type EvalFn = dyn Fn(&DVector<f64>) -> DVector<f64> + Send + Sync;
type JacFn = dyn Fn(&DVector<f64>) -> DMatrix<f64> + Send + Sync;
type DerivFn = dyn Fn(&DVector<f64>, &[DVector<f64>]) -> DVector<f64> + Send + Sync;

/// A smooth vector field on `R^d`.
///
/// Besides the field itself a `VectorField` may carry an exact Jacobian and
/// an exact multilinear derivative oracle `D^k f(x)[v_1, .., v_k]`. Missing
/// pieces are filled in by central finite differences.
#[derive(Clone)]
pub struct VectorField {
    dim: usize,
    eval: Arc<EvalFn>,
    jac: Option<Arc<JacFn>>,
    derivs: Option<Arc<DerivFn>>,
}

impl fmt::Debug for VectorField {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("VectorField")
            .field("dim", &self.dim)
            .field("exact_jacobian", &self.jac.is_some())
            .field("derivative_oracle", &self.derivs.is_some())
            .finish()
    }
}

impl VectorField {
    pub fn new<F>(dim: usize, eval: F) -> Self
    where
        F: Fn(&DVector<f64>) -> DVector<f64> + Send + Sync + 'static,
    {
        Self {
            dim,
            eval: Arc::new(eval),
            jac: None,
            derivs: None,
        }
    }

    /// Attach an exact Jacobian.
    pub fn with_jacobian<J>(mut self, jac: J) -> Self
    where
        J: Fn(&DVector<f64>) -> DMatrix<f64> + Send + Sync + 'static,
    {
        self.jac = Some(Arc::new(jac));
        self
    }

    /// Attach an exact oracle for `D^k f(x)[v_1, .., v_k]`, `k = dirs.len()`.
    /// With `k = 0` the oracle must return `f(x)`.
    pub fn with_derivatives<D>(mut self, derivs: D) -> Self
    where
        D: Fn(&DVector<f64>, &[DVector<f64>]) -> DVector<f64> + Send + Sync + 'static,
    {
        self.derivs = Some(Arc::new(derivs));
        self
    }

    /// `f(x) = A x`, with exact Jacobian and derivatives.
    pub fn linear(a: DMatrix<f64>) -> Self {
        assert!(a.is_square(), "linear field needs a square matrix");
        let dim = a.nrows();
        let (a1, a2, a3) = (a.clone(), a.clone(), a);
        Self::new(dim, move |x| &a1 * x)
            .with_jacobian(move |_| a2.clone())
            .with_derivatives(move |x, dirs| match dirs.len() {
                0 => &a3 * x,
                1 => &a3 * &dirs[0],
                _ => DVector::zeros(x.len()),
            })
    }

    pub fn zero(dim: usize) -> Self {
        Self::constant(DVector::zeros(dim))
    }

    /// The constant field `x -> v`.
    pub fn constant(v: DVector<f64>) -> Self {
        let dim = v.len();
        let v0 = v.clone();
        Self::new(dim, move |_| v0.clone())
            .with_jacobian(move |_| DMatrix::zeros(dim, dim))
            .with_derivatives(move |_, dirs| {
                if dirs.is_empty() {
                    v.clone()
                } else {
                    DVector::zeros(dim)
                }
            })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn eval(&self, x: &DVector<f64>) -> DVector<f64> {
        (self.eval)(x)
    }

    pub fn has_exact_jacobian(&self) -> bool {
        self.jac.is_some()
    }

    pub fn has_derivative_oracle(&self) -> bool {
        self.derivs.is_some()
    }

    /// Exact Jacobian when supplied, central differences otherwise.
    pub fn jacobian(&self, x: &DVector<f64>) -> DMatrix<f64> {
        if let Some(jac) = &self.jac {
            return jac(x);
        }
        if let Some(d) = &self.derivs {
            let mut out = DMatrix::zeros(self.dim, self.dim);
            for j in 0..self.dim {
                let mut e = DVector::zeros(self.dim);
                e[j] = 1.0;
                out.set_column(j, &d(x, &[e]));
            }
            return out;
        }
        numeric_jacobian(&*self.eval, x)
    }

    /// `D^k f(x)[v_1, .., v_k]`. Uses the oracle when present; otherwise a
    /// symmetric `2^k`-point stencil on the highest exact level available.
    pub fn derivative(&self, x: &DVector<f64>, dirs: &[DVector<f64>]) -> DVector<f64> {
        if let Some(d) = &self.derivs {
            return d(x, dirs);
        }
        match dirs.len() {
            0 => self.eval(x),
            1 => self.jacobian(x) * &dirs[0],
            k => {
                if let Some(jac) = &self.jac {
                    let v0 = dirs[0].clone();
                    let g = |y: &DVector<f64>| jac(y) * &v0;
                    stencil_derivative(&g, x, &dirs[1..], k)
                } else {
                    stencil_derivative(&*self.eval, x, dirs, k)
                }
            }
        }
    }
}

/// Free-function form of [`VectorField::jacobian`].
pub fn jacobian(f: &VectorField, x: &DVector<f64>) -> DMatrix<f64> {
    f.jacobian(x)
}

fn numeric_jacobian(f: &EvalFn, x: &DVector<f64>) -> DMatrix<f64> {
    let d = x.len();
    let base = f(x);
    let mut out = DMatrix::zeros(base.len(), d);
    let h0 = f64::EPSILON.cbrt();
    let mut xp = x.clone();
    for j in 0..d {
        let h = h0 * x[j].abs().max(1.0);
        let orig = xp[j];
        xp[j] = orig + h;
        let fp = f(&xp);
        xp[j] = orig - h;
        let fm = f(&xp);
        xp[j] = orig;
        out.set_column(j, &((fp - fm) / (2.0 * h)));
    }
    out
}

/// Symmetric stencil for the multilinear derivative of `g` along `dirs`.
/// `order` is the total derivative order the result stands for and only
/// sets the step size.
fn stencil_derivative<G>(g: &G, x: &DVector<f64>, dirs: &[DVector<f64>], order: usize) -> DVector<f64>
where
    G: Fn(&DVector<f64>) -> DVector<f64> + ?Sized,
{
    let k = dirs.len();
    let norms: Vec<f64> = dirs.iter().map(|v| v.norm()).collect();
    if norms.contains(&0.0) {
        return DVector::zeros(g(x).len());
    }
    let h = f64::EPSILON.powf(1.0 / (order as f64 + 2.0)) * x.norm().max(1.0);
    let unit: Vec<DVector<f64>> = dirs.iter().zip(&norms).map(|(v, n)| v / *n).collect();
    let mut acc: Option<DVector<f64>> = None;
    for mask in 0..(1u32 << k) {
        let mut y = x.clone();
        let mut sign = 1.0;
        for (i, u) in unit.iter().enumerate() {
            if mask & (1 << i) != 0 {
                y += u * h;
            } else {
                y -= u * h;
                sign = -sign;
            }
        }
        let v = g(&y) * sign;
        acc = Some(match acc {
            Some(a) => a + v,
            None => v,
        });
    }
    let scale: f64 = norms.iter().product::<f64>() / (2.0 * h).powi(k as i32);
    acc.unwrap() * scale
}

/// How a breakpoint table is interpolated.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Interpolation {
    /// `values[i]` holds on `[breaks[i], breaks[i+1])`.
    PiecewiseConstant,
    /// `values[i]` is the value at `breaks[i]`, linear in between.
    PiecewiseLinear,
}

/// A control `zeta: [0, T] -> R^n` stored as a breakpoint table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ControlSignal {
    breaks: Vec<f64>,
    values: Vec<DVector<f64>>,
    interp: Interpolation,
    dim: usize,
}

impl ControlSignal {
    pub fn new(breaks: Vec<f64>, values: Vec<DVector<f64>>, interp: Interpolation) -> Result<Self> {
        if breaks.len() < 2 {
            return Err(Error::InvalidParameter(
                "a control needs at least two breakpoints".into(),
            ));
        }
        if breaks[0] != 0.0 {
            return Err(Error::InvalidParameter("first breakpoint must be 0".into()));
        }
        if breaks.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(Error::InvalidParameter(
                "breakpoints must be strictly increasing".into(),
            ));
        }
        let want = match interp {
            Interpolation::PiecewiseConstant => breaks.len() - 1,
            Interpolation::PiecewiseLinear => breaks.len(),
        };
        if values.len() != want {
            return Err(Error::Dimension(format!(
                "control with {} breakpoints needs {want} values, got {}",
                breaks.len(),
                values.len()
            )));
        }
        let dim = values[0].len();
        if values.iter().any(|v| v.len() != dim) {
            return Err(Error::Dimension("control values of unequal length".into()));
        }
        Ok(Self {
            breaks,
            values,
            interp,
            dim,
        })
    }

    pub fn zero(dim: usize, horizon: f64) -> Self {
        Self::constant(DVector::zeros(dim), horizon)
    }

    pub fn constant(v: DVector<f64>, horizon: f64) -> Self {
        assert!(horizon > 0.0, "control horizon must be positive");
        Self {
            dim: v.len(),
            breaks: vec![0.0, horizon],
            values: vec![v],
            interp: Interpolation::PiecewiseConstant,
        }
    }

    /// Piecewise-linear samples of a continuous control, `per_unit` breakpoints per unit time.
    pub fn sample_continuous<F>(f: F, horizon: f64, per_unit: usize) -> Self
    where
        F: Fn(f64) -> DVector<f64>,
    {
        let pieces = ((horizon * per_unit as f64).ceil() as usize).max(1);
        let breaks: Vec<f64> = (0..=pieces).map(|i| horizon * i as f64 / pieces as f64).collect();
        let values: Vec<DVector<f64>> = breaks.iter().map(|&t| f(t)).collect();
        let dim = values[0].len();
        Self {
            breaks,
            values,
            interp: Interpolation::PiecewiseLinear,
            dim,
        }
    }

    pub fn horizon(&self) -> f64 {
        *self.breaks.last().unwrap()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn breakpoints(&self) -> &[f64] {
        &self.breaks
    }

    pub fn values(&self) -> &[DVector<f64>] {
        &self.values
    }

    pub fn interpolation(&self) -> Interpolation {
        self.interp
    }

    /// Value at `t`, clamped to `[0, T]`.
    pub fn eval(&self, t: f64) -> DVector<f64> {
        let t = t.clamp(0.0, self.horizon());
        let i = match self.breaks.partition_point(|&b| b <= t) {
            0 => 0,
            p => (p - 1).min(self.breaks.len() - 2),
        };
        match self.interp {
            Interpolation::PiecewiseConstant => self.values[i].clone(),
            Interpolation::PiecewiseLinear => {
                let (t0, t1) = (self.breaks[i], self.breaks[i + 1]);
                let w = (t - t0) / (t1 - t0);
                &self.values[i] * (1.0 - w) + &self.values[i + 1] * w
            }
        }
    }

    /// Run `self` then `other`. Both must be piecewise constant.
    pub fn concat(&self, other: &ControlSignal) -> Result<ControlSignal> {
        if self.interp != Interpolation::PiecewiseConstant || other.interp != Interpolation::PiecewiseConstant {
            return Err(Error::InvalidParameter(
                "only piecewise-constant controls concatenate".into(),
            ));
        }
        if self.dim != other.dim {
            return Err(Error::Dimension("control dimensions differ".into()));
        }
        let shift = self.horizon();
        let mut breaks = self.breaks.clone();
        breaks.extend(other.breaks[1..].iter().map(|b| b + shift));
        let mut values = self.values.clone();
        values.extend(other.values.iter().cloned());
        ControlSignal::new(breaks, values, Interpolation::PiecewiseConstant)
    }
}

/// Integration scheme.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Method {
    /// Classical fourth-order Runge–Kutta with fixed step.
    Rk4 { step: f64 },
    /// Embedded Dormand–Prince 5(4) pair with error control.
    DormandPrince { rtol: f64, atol: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IntegratorConfig {
    pub method: Method,
    pub max_steps: usize,
    /// A segment aborts once `|x|` exceeds this value.
    pub blowup_norm: f64,
}

impl Default for IntegratorConfig {
    fn default() -> Self {
        Self {
            method: Method::DormandPrince {
                rtol: 1e-8,
                atol: 1e-10,
            },
            max_steps: 1_000_000,
            blowup_norm: 1e8,
        }
    }
}

impl IntegratorConfig {
    pub fn adaptive(rtol: f64, atol: f64) -> Self {
        Self {
            method: Method::DormandPrince { rtol, atol },
            ..Self::default()
        }
    }

    pub fn rk4(step: f64) -> Self {
        Self {
            method: Method::Rk4 { step },
            ..Self::default()
        }
    }

    /// Same scheme with tolerances (or step) scaled by `factor`.
    pub fn tightened(&self, factor: f64) -> Self {
        let method = match self.method {
            Method::Rk4 { step } => Method::Rk4 { step: step * factor },
            Method::DormandPrince { rtol, atol } => Method::DormandPrince {
                rtol: rtol * factor,
                atol: atol * factor,
            },
        };
        Self { method, ..*self }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = match self.method {
            Method::Rk4 { step } => step > 0.0,
            Method::DormandPrince { rtol, atol } => rtol > 0.0 && atol > 0.0,
        };
        if !ok {
            return Err(Error::InvalidParameter(
                "integrator tolerance/step must be positive".into(),
            ));
        }
        if self.max_steps == 0 {
            return Err(Error::InvalidParameter("max_steps must be positive".into()));
        }
        Ok(())
    }
}

fn guard(x: &DVector<f64>, t: f64, cfg: &IntegratorConfig) -> Result<()> {
    let norm = x.norm();
    if !norm.is_finite() {
        return Err(Error::NonFinite { t });
    }
    if norm > cfg.blowup_norm {
        return Err(Error::BlowUp { norm, t });
    }
    Ok(())
}

/// Integrate the non-autonomous system `x' = rhs(t, x)` from `t0` to `t1`.
pub fn integrate<F>(rhs: F, x0: &DVector<f64>, t0: f64, t1: f64, cfg: &IntegratorConfig) -> Result<DVector<f64>>
where
    F: Fn(f64, &DVector<f64>) -> DVector<f64>,
{
    if t1 < t0 {
        return Err(Error::InvalidParameter(format!("backward integration {t0} -> {t1}")));
    }
    if t1 == t0 {
        return Ok(x0.clone());
    }
    match cfg.method {
        Method::Rk4 { step } => rk4(&rhs, x0, t0, t1, step, cfg),
        Method::DormandPrince { rtol, atol } => dopri(&rhs, x0, t0, t1, rtol, atol, cfg),
    }
}

fn rk4<F>(rhs: &F, x0: &DVector<f64>, t0: f64, t1: f64, step: f64, cfg: &IntegratorConfig) -> Result<DVector<f64>>
where
    F: Fn(f64, &DVector<f64>) -> DVector<f64>,
{
    let n = ((t1 - t0) / step).ceil().max(1.0) as usize;
    if n > cfg.max_steps {
        return Err(Error::StepLimit {
            max_steps: cfg.max_steps,
            t: t0,
        });
    }
    let h = (t1 - t0) / n as f64;
    let mut x = x0.clone();
    for i in 0..n {
        let t = t0 + i as f64 * h;
        let k1 = rhs(t, &x);
        let k2 = rhs(t + 0.5 * h, &(&x + &k1 * (0.5 * h)));
        let k3 = rhs(t + 0.5 * h, &(&x + &k2 * (0.5 * h)));
        let k4 = rhs(t + h, &(&x + &k3 * h));
        x += (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (h / 6.0);
        guard(&x, t + h, cfg)?;
    }
    Ok(x)
}

// Dormand–Prince 5(4) tableau.
const C2: f64 = 1.0 / 5.0;
const C3: f64 = 3.0 / 10.0;
const C4: f64 = 4.0 / 5.0;
const C5: f64 = 8.0 / 9.0;
const A21: f64 = 1.0 / 5.0;
const A31: f64 = 3.0 / 40.0;
const A32: f64 = 9.0 / 40.0;
const A41: f64 = 44.0 / 45.0;
const A42: f64 = -56.0 / 15.0;
const A43: f64 = 32.0 / 9.0;
const A51: f64 = 19372.0 / 6561.0;
const A52: f64 = -25360.0 / 2187.0;
const A53: f64 = 64448.0 / 6561.0;
const A54: f64 = -212.0 / 729.0;
const A61: f64 = 9017.0 / 3168.0;
const A62: f64 = -355.0 / 33.0;
const A63: f64 = 46732.0 / 5247.0;
const A64: f64 = 49.0 / 176.0;
const A65: f64 = -5103.0 / 18656.0;
const B1: f64 = 35.0 / 384.0;
const B3: f64 = 500.0 / 1113.0;
const B4: f64 = 125.0 / 192.0;
const B5: f64 = -2187.0 / 6784.0;
const B6: f64 = 11.0 / 84.0;
// Difference between the fifth- and fourth-order weights.
const E1: f64 = 71.0 / 57600.0;
const E3: f64 = -71.0 / 16695.0;
const E4: f64 = 71.0 / 1920.0;
const E5: f64 = -17253.0 / 339200.0;
const E6: f64 = 22.0 / 525.0;
const E7: f64 = -1.0 / 40.0;

fn dopri<F>(
    rhs: &F,
    x0: &DVector<f64>,
    t0: f64,
    t1: f64,
    rtol: f64,
    atol: f64,
    cfg: &IntegratorConfig,
) -> Result<DVector<f64>>
where
    F: Fn(f64, &DVector<f64>) -> DVector<f64>,
{
    let err_norm = |x: &DVector<f64>, y: &DVector<f64>, e: &DVector<f64>| -> f64 {
        let n = x.len().max(1) as f64;
        let s: f64 = (0..x.len())
            .map(|i| {
                let sc = atol + rtol * x[i].abs().max(y[i].abs());
                (e[i] / sc).powi(2)
            })
            .sum();
        (s / n).sqrt()
    };

    let span = t1 - t0;
    let mut t = t0;
    let mut x = x0.clone();
    let mut k1 = rhs(t, &x);

    // Initial step guess.
    let mut h = {
        let scale = x.map(|v| atol + rtol * v.abs());
        let d0 = (x.component_div(&scale).norm_squared() / x.len().max(1) as f64).sqrt();
        let d1 = (k1.component_div(&scale).norm_squared() / x.len().max(1) as f64).sqrt();
        let h0 = if d0 < 1e-5 || d1 < 1e-5 { 1e-6 } else { 0.01 * d0 / d1 };
        h0.min(span)
    };

    let mut steps = 0usize;
    let mut last_factor = 1.0f64;
    while t < t1 {
        if steps >= cfg.max_steps {
            return Err(Error::StepLimit {
                max_steps: cfg.max_steps,
                t,
            });
        }
        steps += 1;
        let mut last = false;
        if t + h >= t1 || t1 - (t + h) < 1e-12 * span {
            h = t1 - t;
            last = true;
        }
        let k2 = rhs(t + C2 * h, &(&x + &k1 * (h * A21)));
        let k3 = rhs(t + C3 * h, &(&x + (&k1 * A31 + &k2 * A32) * h));
        let k4 = rhs(t + C4 * h, &(&x + (&k1 * A41 + &k2 * A42 + &k3 * A43) * h));
        let k5 = rhs(t + C5 * h, &(&x + (&k1 * A51 + &k2 * A52 + &k3 * A53 + &k4 * A54) * h));
        let k6 = rhs(
            t + h,
            &(&x + (&k1 * A61 + &k2 * A62 + &k3 * A63 + &k4 * A64 + &k5 * A65) * h),
        );
        let y = &x + (&k1 * B1 + &k3 * B3 + &k4 * B4 + &k5 * B5 + &k6 * B6) * h;
        let k7 = rhs(t + h, &y);
        let e = (&k1 * E1 + &k3 * E3 + &k4 * E4 + &k5 * E5 + &k6 * E6 + &k7 * E7) * h;
        let err = err_norm(&x, &y, &e);
        if !err.is_finite() {
            // Shrink hard; a non-finite trial usually means the step overshot.
            h *= 0.1;
            if h < 1e-15 * t.abs().max(1.0) {
                return Err(Error::NonFinite { t });
            }
            continue;
        }
        if err <= 1.0 {
            t = if last { t1 } else { t + h };
            x = y;
            k1 = k7;
            guard(&x, t, cfg)?;
            let factor = if err == 0.0 {
                5.0
            } else {
                (0.9 * err.powf(-0.2)).clamp(0.2, 5.0)
            };
            // No growth right after a rejection.
            let factor = if last_factor < 1.0 { factor.min(1.0) } else { factor };
            last_factor = factor;
            h *= factor;
        } else {
            let factor = (0.9 * err.powf(-0.2)).clamp(0.1, 1.0);
            last_factor = factor;
            h *= factor;
            if h < 1e-15 * t.abs().max(1.0) {
                return Err(Error::StepUnderflow { t });
            }
        }
    }
    Ok(x)
}

/// `S_t(x)`: the undriven flow.
pub fn flow(f: &VectorField, x: &DVector<f64>, t: f64, cfg: &IntegratorConfig) -> Result<DVector<f64>> {
    if t < 0.0 {
        return Err(Error::InvalidParameter(format!("negative flow time {t}")));
    }
    if x.len() != f.dim() {
        return Err(Error::Dimension(format!(
            "state of length {} for field of dim {}",
            x.len(),
            f.dim()
        )));
    }
    integrate(|_, y| f.eval(y), x, 0.0, t, cfg)
}

/// `S_T(x, zeta)`: the flow of `x' = f(x) + B zeta(t)` on `[0, T]`.
///
/// The integrator restarts at every breakpoint of `zeta` so that kinks and
/// jumps of the control never sit inside a step.
pub fn controlled_flow(
    f: &VectorField,
    b: &DMatrix<f64>,
    x: &DVector<f64>,
    zeta: &ControlSignal,
    horizon: f64,
    cfg: &IntegratorConfig,
) -> Result<DVector<f64>> {
    if b.nrows() != f.dim() || b.ncols() != zeta.dim() {
        return Err(Error::Dimension(format!(
            "B is {}x{}, field dim {}, control dim {}",
            b.nrows(),
            b.ncols(),
            f.dim(),
            zeta.dim()
        )));
    }
    if horizon < 0.0 || horizon > zeta.horizon() * (1.0 + 1e-12) {
        return Err(Error::InvalidParameter(format!(
            "horizon {horizon} outside control domain [0, {}]",
            zeta.horizon()
        )));
    }
    let mut state = x.clone();
    let breaks = zeta.breakpoints();
    for (i, w) in breaks.windows(2).enumerate() {
        let (a, bnd) = (w[0], w[1].min(horizon));
        if a >= horizon {
            break;
        }
        state = match zeta.interpolation() {
            Interpolation::PiecewiseConstant => {
                let push = b * &zeta.values()[i];
                integrate(|_, y| f.eval(y) + &push, &state, a, bnd, cfg)?
            }
            Interpolation::PiecewiseLinear => {
                let (v0, v1) = (&zeta.values()[i], &zeta.values()[i + 1]);
                let (p0, p1) = (b * v0, b * v1);
                let len = w[1] - w[0];
                integrate(
                    |t, y| {
                        let s = (t - a) / len;
                        f.eval(y) + &p0 * (1.0 - s) + &p1 * s
                    },
                    &state,
                    a,
                    bnd,
                    cfg,
                )?
            }
        };
    }
    Ok(state)
}

/// The flow `S_t(x)` together with its derivative `D_x S_t(x)`, from the
/// variational equation `Phi' = Df(x(t)) Phi`, `Phi(0) = I`.
pub fn flow_with_sensitivity(
    f: &VectorField,
    x: &DVector<f64>,
    t: f64,
    cfg: &IntegratorConfig,
) -> Result<(DVector<f64>, DMatrix<f64>)> {
    let d = f.dim();
    let mut aug = DVector::zeros(d + d * d);
    aug.rows_mut(0, d).copy_from(x);
    for i in 0..d {
        aug[d + i * d + i] = 1.0;
    }
    let aug_cfg = IntegratorConfig {
        blowup_norm: f64::INFINITY,
        ..*cfg
    };
    let out = integrate(
        |_, y| {
            let xs = y.rows(0, d).into_owned();
            let phi = DMatrix::from_column_slice(d, d, &y.as_slice()[d..]);
            let jac = f.jacobian(&xs);
            let dphi = jac * phi;
            let mut r = DVector::zeros(d + d * d);
            r.rows_mut(0, d).copy_from(&f.eval(&xs));
            r.rows_mut(d, d * d).copy_from_slice(dphi.as_slice());
            r
        },
        &aug,
        0.0,
        t,
        &aug_cfg,
    )?;
    let xt = out.rows(0, d).into_owned();
    guard(&xt, t, cfg)?;
    let phi = DMatrix::from_column_slice(d, d, &out.as_slice()[d..]);
    Ok((xt, phi))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Violation {
    pub index: usize,
    /// `<f(y), y> - (-alpha |y|^2 + beta)`, positive for a violation.
    pub excess: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DissipativityReport {
    pub alpha: f64,
    pub beta: f64,
    pub samples: usize,
    pub violations: Vec<Violation>,
    /// Largest excess over all samples (negative when every sample passes).
    pub worst_margin: f64,
}

impl DissipativityReport {
    pub fn passed(&self) -> bool {
        self.violations.is_empty()
    }
}

/// Probe `<f(y), y> <= -alpha |y|^2 + beta` on the given states.
pub fn check_dissipativity(f: &VectorField, alpha: f64, beta: f64, samples: &[DVector<f64>]) -> DissipativityReport {
    let mut violations = Vec::new();
    let mut worst = f64::NEG_INFINITY;
    for (index, y) in samples.iter().enumerate() {
        let excess = f.eval(y).dot(y) + alpha * y.norm_squared() - beta;
        worst = worst.max(excess);
        if excess > 0.0 {
            violations.push(Violation { index, excess });
        }
    }
    DissipativityReport {
        alpha,
        beta,
        samples: samples.len(),
        violations,
        worst_margin: worst,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    macro_rules! assert_close {
        ($a:expr, $b:expr, $tol:expr) => {{
            let (a, b): (f64, f64) = ($a, $b);
            assert!((a - b).abs() <= $tol, "{} vs {} (tol {})", a, b, $tol);
        }};
    }

    fn v(xs: &[f64]) -> DVector<f64> {
        DVector::from_row_slice(xs)
    }

    fn cubic_1d() -> VectorField {
        VectorField::new(1, |x| v(&[-x[0].powi(3)]))
    }

    #[test]
    fn linear_decay_closed_form() {
        let f = VectorField::linear(DMatrix::from_element(1, 1, -1.0));
        let y = flow(&f, &v(&[1.0]), std::f64::consts::LN_2, &IntegratorConfig::default()).unwrap();
        assert_close!(y[0], 0.5, 1e-9);
    }

    #[test]
    fn cubic_decay_closed_form() {
        let y = flow(&cubic_1d(), &v(&[1.0]), 1.5, &IntegratorConfig::default()).unwrap();
        assert_close!(y[0], 0.5, 1e-8);
    }

    #[test]
    fn zero_time_is_identity() {
        let x = v(&[0.3, -2.0]);
        let f = VectorField::new(2, |x| v(&[x[1], -x[0]]));
        assert_eq!(flow(&f, &x, 0.0, &IntegratorConfig::default()).unwrap(), x);
    }

    #[test]
    fn rk4_matches_adaptive() {
        let f = cubic_1d();
        let a = flow(&f, &v(&[1.0]), 1.5, &IntegratorConfig::rk4(1e-3)).unwrap();
        assert_close!(a[0], 0.5, 1e-10);
    }

    #[test]
    fn blowup_is_reported() {
        let f = VectorField::new(1, |x| v(&[x[0] * x[0]]));
        let err = flow(&f, &v(&[1.0]), 2.0, &IntegratorConfig::default()).unwrap_err();
        assert!(err.is_numeric(), "{err}");
    }

    #[test]
    fn controlled_flow_constant_push() {
        let f = VectorField::zero(2);
        let b = DMatrix::identity(2, 2);
        let zeta = ControlSignal::constant(v(&[1.0, -2.0]), 3.0);
        let y = controlled_flow(&f, &b, &v(&[0.5, 0.5]), &zeta, 3.0, &IntegratorConfig::default()).unwrap();
        assert_close!(y[0], 3.5, 1e-12);
        assert_close!(y[1], -5.5, 1e-12);
    }

    #[test]
    fn controlled_flow_linear_forcing() {
        let f = VectorField::linear(DMatrix::from_element(1, 1, -1.0));
        let b = DMatrix::from_element(1, 1, 1.0);
        let t = 2.0;
        let zeta = ControlSignal::constant(v(&[1.0]), t);
        let y = controlled_flow(&f, &b, &v(&[0.0]), &zeta, t, &IntegratorConfig::default()).unwrap();
        assert_close!(y[0], 1.0 - (-t).exp(), 1e-8);
    }

    #[test]
    fn zero_control_matches_flow() {
        let f = VectorField::new(2, |x| v(&[x[1], -x[0] - x[1] - x[0].powi(3)]));
        let b = DMatrix::from_row_slice(2, 1, &[0.0, 1.0]);
        let x = v(&[1.0, 0.2]);
        let cfg = IntegratorConfig::default();
        let a = controlled_flow(&f, &b, &x, &ControlSignal::zero(1, 1.7), 1.7, &cfg).unwrap();
        let c = flow(&f, &x, 1.7, &cfg).unwrap();
        assert!((a - c).norm() < 1e-9);
    }

    #[test]
    fn piecewise_linear_control_integrates_exactly() {
        // f = 0, B = 1, zeta(t) = t on [0, 2] -> x(2) = x0 + 2.
        let zeta = ControlSignal::sample_continuous(|t| v(&[t]), 2.0, 1000);
        assert!(zeta.breakpoints().len() >= 2001);
        let y = controlled_flow(
            &VectorField::zero(1),
            &DMatrix::from_element(1, 1, 1.0),
            &v(&[1.0]),
            &zeta,
            2.0,
            &IntegratorConfig::default(),
        )
        .unwrap();
        assert_close!(y[0], 3.0, 1e-10);
    }

    #[test]
    fn control_signal_validation() {
        assert!(ControlSignal::new(
            vec![0.0, 1.0, 1.0],
            vec![v(&[0.0]), v(&[0.0])],
            Interpolation::PiecewiseConstant
        )
        .is_err());
        assert!(ControlSignal::new(vec![0.1, 1.0], vec![v(&[0.0])], Interpolation::PiecewiseConstant).is_err());
        assert!(ControlSignal::new(vec![0.0, 1.0], vec![v(&[0.0])], Interpolation::PiecewiseLinear).is_err());
        let c = ControlSignal::new(
            vec![0.0, 1.0, 2.0],
            vec![v(&[1.0]), v(&[2.0])],
            Interpolation::PiecewiseConstant,
        )
        .unwrap();
        assert_eq!(c.eval(0.5)[0], 1.0);
        assert_eq!(c.eval(1.5)[0], 2.0);
        assert_eq!(c.eval(2.0)[0], 2.0);
        let cc = c.concat(&ControlSignal::constant(v(&[5.0]), 1.0)).unwrap();
        assert_eq!(cc.horizon(), 3.0);
        assert_eq!(cc.eval(2.5)[0], 5.0);
    }

    #[test]
    fn jacobian_of_linear_and_cubic() {
        let a = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, -3.0, 0.5]);
        let lin = VectorField::new(2, {
            let a = a.clone();
            move |x| &a * x
        });
        let j = lin.jacobian(&v(&[0.3, 9.0]));
        assert!((j - &a).abs().max() < 1e-8);
        let j = cubic_1d().jacobian(&v(&[2.0]));
        assert_close!(j[(0, 0)], -12.0, 12.0 * 1e-5);
    }

    #[test]
    fn numeric_higher_derivatives() {
        // f(x) = x^3 -> f''' = 6, f''(2) = 12.
        let f = VectorField::new(1, |x| v(&[x[0].powi(3)]));
        let one = v(&[1.0]);
        let d2 = f.derivative(&v(&[2.0]), &[one.clone(), one.clone()]);
        assert_close!(d2[0], 12.0, 1e-4 * 12.0);
        let d3 = f.derivative(&v(&[0.7]), &[one.clone(), one.clone(), one.clone()]);
        assert_close!(d3[0], 6.0, 1e-4 * 6.0);
    }

    #[test]
    fn dissipativity_examples() {
        let contracting = VectorField::linear(DMatrix::from_element(1, 1, -1.0));
        let samples: Vec<_> = (-10..=10).map(|i| v(&[i as f64 * 0.7])).collect();
        assert!(check_dissipativity(&contracting, 1.0, 0.0, &samples).passed());

        let expanding = VectorField::linear(DMatrix::from_element(1, 1, 1.0));
        let rep = check_dissipativity(&expanding, 1.0, 0.0, &[v(&[1.0])]);
        assert_eq!(rep.violations.len(), 1);
        assert_close!(rep.worst_margin, 2.0, 1e-12);
    }

    #[test]
    fn sensitivity_of_linear_flow_is_matrix_exponential() {
        let a = DMatrix::from_row_slice(2, 2, &[0.0, 1.0, -1.0, -0.5]);
        let f = VectorField::linear(a.clone());
        let (_, phi) = flow_with_sensitivity(&f, &v(&[1.0, 0.0]), 0.8, &IntegratorConfig::default()).unwrap();
        let expected = (a * 0.8).exp();
        assert!((phi - expected).abs().max() < 1e-8);
    }
}

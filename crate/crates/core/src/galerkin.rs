//! Galerkin truncation of the parabolic equation
//! `u' - nu Lap u + P_N F(u) = h + zeta` on the torus `T^D`, with
//! `F(u) = a u^p + g(u)`.
//!
//! Coordinates are taken in the real trigonometric basis
//! `{1} ∪ {sqrt2 cos(k.x), sqrt2 sin(k.x) : 0 < |k| <= N}` (one `k` per
//! `±k` pair, `|k| = |k_1| + .. + |k_D|`), which is orthonormal for the
//! normalized measure on the torus. Euclidean norms of coefficient vectors
//! are therefore `L^2` norms, and the low modes `H_1` come first.
//!
//! The nonlinearity is evaluated on a uniform grid and projected back; with
//! at least `(p + 1) N + 1` points per axis the projection of polynomial
//! terms is exact.

use std::cmp::Reverse;
use std::f64::consts::{FRAC_PI_2, SQRT_2, TAU};
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::controllability::{hormander_tower_with, TowerConfig};
use crate::dynamics::{controlled_flow, integrate, ControlSignal, IntegratorConfig, Interpolation, VectorField};
use crate::error::{Error, Result};
use crate::jet::{flat_bump, Jet};
use crate::linalg::{hstack, pinv, residual_against};
use crate::rng::{stream, Purpose};

/// The perturbation `g` in `F = a u^p + g`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Perturbation {
    #[default]
    Zero,
    /// `g(u) = sin u`.
    Sine,
    /// `g(u) = -a u^p chi(u)` with a smooth cutoff `chi` equal to 1 on
    /// `|u| <= inner` and 0 on `|u| >= outer`, so `F` vanishes near 0.
    Cutoff { inner: f64, outer: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GalerkinSystem {
    /// Spatial dimension `D`.
    pub space_dim: usize,
    /// Truncation level `N`.
    pub n: usize,
    pub nu: f64,
    pub a: f64,
    pub p: u32,
    #[serde(default)]
    pub g: Perturbation,
    /// Coefficients of `h` in basis order; empty means `h = 0`.
    #[serde(default)]
    pub h: Vec<f64>,
    /// Grid points per axis; defaults to `(p + 1) N + 1`.
    #[serde(default)]
    pub grid: Option<usize>,
}

impl GalerkinSystem {
    pub fn new(space_dim: usize, n: usize, nu: f64, a: f64, p: u32, g: Perturbation) -> Self {
        Self {
            space_dim,
            n,
            nu,
            a,
            p,
            g,
            h: Vec::new(),
            grid: None,
        }
    }

    pub fn min_grid(&self) -> usize {
        (self.p as usize + 1) * self.n + 1
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidParameter(m));
        if !(1..=3).contains(&self.space_dim) {
            return bad(format!("space_dim must be 1, 2 or 3, got {}", self.space_dim));
        }
        if self.n == 0 {
            return bad("truncation level must be at least 1".into());
        }
        if !(self.nu > 0.0) {
            return bad(format!("viscosity must be positive, got {}", self.nu));
        }
        if !(self.a >= 0.0) {
            return bad(format!("a must be nonnegative, got {}", self.a));
        }
        if self.p < 3 || self.p.is_multiple_of(2) {
            return bad(format!("p must be an odd integer >= 3, got {}", self.p));
        }
        if let Perturbation::Cutoff { inner, outer } = self.g {
            if !(inner > 0.0 && outer > inner) {
                return bad(format!("cutoff needs 0 < inner < outer, got {inner}, {outer}"));
            }
        }
        if let Some(m) = self.grid {
            if m < self.min_grid() {
                return bad(format!("grid {m} below the dealiasing minimum {}", self.min_grid()));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "k", rename_all = "snake_case")]
pub enum BasisFn {
    Const,
    Cos(Vec<i32>),
    Sin(Vec<i32>),
}

impl BasisFn {
    pub fn eval(&self, x: &[f64]) -> f64 {
        match self {
            BasisFn::Const => 1.0,
            BasisFn::Cos(k) => SQRT_2 * dot(k, x).cos(),
            BasisFn::Sin(k) => SQRT_2 * dot(k, x).sin(),
        }
    }

    pub fn eigenvalue(&self) -> f64 {
        match self {
            BasisFn::Const => 0.0,
            BasisFn::Cos(k) | BasisFn::Sin(k) => -k.iter().map(|&c| (c * c) as f64).sum::<f64>(),
        }
    }
}

fn dot(k: &[i32], x: &[f64]) -> f64 {
    k.iter().zip(x).map(|(&a, b)| a as f64 * b).sum()
}

/// Representatives of `{k : 0 < |k|_1 <= n}` modulo `k ~ -k`, by level.
fn modes(d: usize, n: usize) -> Vec<Vec<i32>> {
    let n = n as i32;
    let mut out = Vec::new();
    let mut k = vec![-n; d];
    loop {
        let l1: i32 = k.iter().map(|c| c.abs()).sum();
        let first = k.iter().find(|&&c| c != 0).copied().unwrap_or(0);
        if l1 > 0 && l1 <= n && first > 0 {
            out.push(k.clone());
        }
        let mut i = 0;
        loop {
            if i == d {
                out.sort_by_key(|k| (k.iter().map(|c| c.abs()).sum::<i32>(), Reverse(k.clone())));
                return out;
            }
            k[i] += 1;
            if k[i] <= n {
                break;
            }
            k[i] = -n;
            i += 1;
        }
    }
}

/// Jet of the cutoff `chi` at `u`.
fn cutoff_jet(u: f64, inner: f64, outer: f64, order: usize) -> Jet {
    let x = Jet::var(u, order);
    let s = x.mul(&x).affine(
        1.0 / (outer * outer - inner * inner),
        -inner * inner / (outer * outer - inner * inner),
    );
    if s.0[0] <= 0.0 {
        return Jet::constant(1.0, order);
    }
    if s.0[0] >= 1.0 {
        return Jet::constant(0.0, order);
    }
    let up = flat_bump(&s.affine(-1.0, 1.0));
    let down = flat_bump(&s);
    up.mul(&up.add(&down).recip())
}

/// The compiled truncated system: basis, grid transforms and the field.
#[derive(Debug)]
pub struct Galerkin {
    sys: GalerkinSystem,
    basis: Vec<BasisFn>,
    h1: usize,
    lap: DVector<f64>,
    h: DVector<f64>,
    grid: usize,
    /// Basis functions sampled on the grid (points x basis).
    synth: DMatrix<f64>,
    /// Quadrature projection (basis x points).
    analysis: DMatrix<f64>,
}

impl Galerkin {
    pub fn new(sys: GalerkinSystem) -> Result<Self> {
        sys.validate()?;
        let d = sys.space_dim;
        let mut basis = vec![BasisFn::Const];
        let mut h1 = 1;
        for k in modes(d, sys.n) {
            if k.iter().map(|c| c.abs()).sum::<i32>() == 1 {
                h1 += 2;
            }
            basis.push(BasisFn::Cos(k.clone()));
            basis.push(BasisFn::Sin(k));
        }
        let dim = basis.len();
        let h = if sys.h.is_empty() {
            DVector::zeros(dim)
        } else if sys.h.len() == dim {
            DVector::from_column_slice(&sys.h)
        } else {
            return Err(Error::Dimension(format!(
                "h has {} coefficients, basis has {dim}",
                sys.h.len()
            )));
        };
        let m = sys.grid.unwrap_or_else(|| sys.min_grid());
        let npts = m.pow(d as u32);
        let mut synth = DMatrix::zeros(npts, dim);
        let mut x = vec![0.0; d];
        for pt in 0..npts {
            let mut rem = pt;
            for xi in x.iter_mut() {
                *xi = TAU * (rem % m) as f64 / m as f64;
                rem /= m;
            }
            for (j, b) in basis.iter().enumerate() {
                synth[(pt, j)] = b.eval(&x);
            }
        }
        let analysis = synth.transpose() / npts as f64;
        let lap = DVector::from_iterator(dim, basis.iter().map(BasisFn::eigenvalue));
        Ok(Self {
            sys,
            basis,
            h1,
            lap,
            h,
            grid: m,
            synth,
            analysis,
        })
    }

    pub fn system(&self) -> &GalerkinSystem {
        &self.sys
    }

    /// `dim H_N`.
    pub fn dim(&self) -> usize {
        self.basis.len()
    }

    /// `dim H_1 = 2D + 1`.
    pub fn h1_dim(&self) -> usize {
        self.h1
    }

    pub fn basis(&self) -> &[BasisFn] {
        &self.basis
    }

    pub fn grid_size(&self) -> usize {
        self.grid
    }

    /// Grid nodes, in the order used by [`Galerkin::to_grid`].
    pub fn grid_points(&self) -> Vec<Vec<f64>> {
        let (m, d) = (self.grid, self.sys.space_dim);
        (0..m.pow(d as u32))
            .map(|pt| {
                let mut rem = pt;
                (0..d)
                    .map(|_| {
                        let x = TAU * (rem % m) as f64 / m as f64;
                        rem /= m;
                        x
                    })
                    .collect()
            })
            .collect()
    }

    /// The embedding `H_1 -> H_N` (identity on the first `2D + 1` coordinates).
    pub fn control_matrix(&self) -> DMatrix<f64> {
        DMatrix::identity(self.dim(), self.h1)
    }

    pub fn laplacian(&self, u: &DVector<f64>) -> DVector<f64> {
        u.component_mul(&self.lap)
    }

    pub fn to_grid(&self, u: &DVector<f64>) -> DVector<f64> {
        &self.synth * u
    }

    /// `P_N` of a function given by its grid values.
    pub fn project(&self, values: &DVector<f64>) -> DVector<f64> {
        &self.analysis * values
    }

    /// `P_N` of a function given pointwise.
    pub fn project_fn(&self, f: impl Fn(&[f64]) -> f64) -> DVector<f64> {
        let vals = DVector::from_iterator(self.synth.nrows(), self.grid_points().iter().map(|x| f(x)));
        self.project(&vals)
    }

    /// `P_N(phi_1 ... phi_k)`.
    pub fn product(&self, factors: &[DVector<f64>]) -> DVector<f64> {
        let mut acc = DVector::from_element(self.synth.nrows(), 1.0);
        for f in factors {
            acc.component_mul_assign(&self.to_grid(f));
        }
        self.project(&acc)
    }

    /// `P_N phi^k`.
    pub fn power(&self, phi: &DVector<f64>, k: u32) -> DVector<f64> {
        let g = self.to_grid(phi).map(|v| v.powi(k as i32));
        self.project(&g)
    }

    /// `k`-th derivative of the scalar nonlinearity `F` at `u`.
    pub fn scalar_derivative(&self, u: f64, k: usize) -> f64 {
        let (a, p) = (self.sys.a, self.sys.p as usize);
        let poly = if k <= p {
            let falling: f64 = ((p - k + 1)..=p).map(|i| i as f64).product();
            a * falling * u.powi((p - k) as i32)
        } else {
            0.0
        };
        let g = match self.sys.g {
            Perturbation::Zero => 0.0,
            Perturbation::Sine => (u + k as f64 * FRAC_PI_2).sin(),
            Perturbation::Cutoff { inner, outer } => {
                let g = Jet::var(u, k).powi(self.sys.p).mul(&cutoff_jet(u, inner, outer, k));
                -a * g.derivative(k)
            }
        };
        poly + g
    }

    /// `P_N F(u)`.
    pub fn nonlinearity(&self, u: &DVector<f64>) -> DVector<f64> {
        let g = self.to_grid(u).map(|v| self.scalar_derivative(v, 0));
        self.project(&g)
    }

    /// `f_N(u) = nu Lap u - P_N F(u) + h`.
    pub fn eval(&self, u: &DVector<f64>) -> DVector<f64> {
        self.laplacian(u) * self.sys.nu - self.nonlinearity(u) + &self.h
    }

    /// Right-hand side of the two-control system without `zeta`:
    /// `nu Lap (u + xi) - P_N F(u + xi) + h`.
    pub fn eval_shifted(&self, u: &DVector<f64>, xi: &DVector<f64>) -> DVector<f64> {
        self.eval(&(u + xi))
    }

    pub fn jacobian(&self, u: &DVector<f64>) -> DMatrix<f64> {
        let w = self.to_grid(u).map(|v| self.scalar_derivative(v, 1));
        let mut weighted = self.synth.clone();
        for (mut row, wi) in weighted.row_iter_mut().zip(w.iter()) {
            row *= *wi;
        }
        DMatrix::from_diagonal(&(&self.lap * self.sys.nu)) - &self.analysis * weighted
    }

    /// `D^k f_N(u)[v_1, .., v_k]`.
    pub fn derivative(&self, u: &DVector<f64>, dirs: &[DVector<f64>]) -> DVector<f64> {
        let k = dirs.len();
        if k == 0 {
            return self.eval(u);
        }
        let mut g = self.to_grid(u).map(|v| self.scalar_derivative(v, k));
        for v in dirs {
            g.component_mul_assign(&self.to_grid(v));
        }
        let mut out = -self.project(&g);
        if k == 1 {
            out += self.laplacian(&dirs[0]) * self.sys.nu;
        }
        out
    }

    /// `f_N` as a [`VectorField`] with exact Jacobian and derivative oracle.
    pub fn vector_field(self: &Arc<Self>) -> VectorField {
        let (a, b, c) = (self.clone(), self.clone(), self.clone());
        VectorField::new(self.dim(), move |u| a.eval(u))
            .with_jacobian(move |u| b.jacobian(u))
            .with_derivatives(move |u, dirs| c.derivative(u, dirs))
    }
}

pub fn build_field(sys: &GalerkinSystem) -> Result<VectorField> {
    Ok(Arc::new(Galerkin::new(sys.clone())?).vector_field())
}

/// The nested subspaces `H_1 = V_1 ⊂ V_2 ⊂ ..`, with
/// `V_{i+1} = span{P_N(phi_1 ... phi_p) : phi_j ∈ V_i}`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SubspaceTower {
    /// Orthonormal bases, generation 1 first.
    pub generations: Vec<DMatrix<f64>>,
    pub dims: Vec<usize>,
    /// First generation equal to `H_N`; `None` if the tower stalled.
    pub full_at: Option<usize>,
}

/// Above this many `p`-tuples, generations are spanned by powers of random
/// elements instead, which have the same span.
const MAX_PRODUCTS: usize = 20_000;

fn multisets(r: usize, p: usize) -> Vec<Vec<usize>> {
    fn rec(start: usize, r: usize, left: usize, cur: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
        if left == 0 {
            out.push(cur.clone());
            return;
        }
        for i in start..r {
            cur.push(i);
            rec(i, r, left - 1, cur, out);
            cur.pop();
        }
    }
    let mut out = Vec::new();
    rec(0, r, p, &mut Vec::new(), &mut out);
    out
}

fn count_multisets(r: usize, p: usize) -> usize {
    (0..p).fold(1usize, |acc, i| acc.saturating_mul(r + i) / (i + 1))
}

/// Gram–Schmidt step: append `v` to the orthonormal `cols` if it is new.
fn extend_basis(cols: &mut Vec<DVector<f64>>, v: &DVector<f64>, rel: f64) -> bool {
    let norm = v.norm();
    if norm == 0.0 || !norm.is_finite() {
        return false;
    }
    let q = as_matrix(cols, v.len());
    let r = residual_against(&q, &(v / norm));
    let rn = r.norm();
    if rn > rel {
        cols.push(r / rn);
        true
    } else {
        false
    }
}

fn as_matrix(cols: &[DVector<f64>], rows: usize) -> DMatrix<f64> {
    if cols.is_empty() {
        return DMatrix::zeros(rows, 0);
    }
    hstack(
        &cols
            .iter()
            .map(|c| DMatrix::from_column_slice(rows, 1, c.as_slice()))
            .collect::<Vec<_>>(),
        rows,
    )
}

pub fn subspace_tower(model: &Galerkin, max_gen: usize) -> SubspaceTower {
    const REL: f64 = 1e-9;
    let (dim, p) = (model.dim(), model.sys.p as usize);
    let mut cols: Vec<DVector<f64>> = (0..model.h1)
        .map(|i| DVector::from_fn(dim, |r, _| (r == i) as u8 as f64))
        .collect();
    let mut generations = vec![as_matrix(&cols, dim)];
    let mut dims = vec![cols.len()];
    let mut rng = stream(0, Purpose::Other, 0);
    while generations.len() < max_gen.max(1) && cols.len() < dim {
        let prev = cols.clone();
        let grid: Vec<DVector<f64>> = prev.iter().map(|c| model.to_grid(c)).collect();
        if count_multisets(prev.len(), p) <= MAX_PRODUCTS {
            for idx in multisets(prev.len(), p) {
                let mut g = grid[idx[0]].clone();
                for &i in &idx[1..] {
                    g.component_mul_assign(&grid[i]);
                }
                extend_basis(&mut cols, &model.project(&g), REL);
                if cols.len() == dim {
                    break;
                }
            }
        } else {
            for _ in 0..4 * dim {
                let z: Vec<f64> = (0..prev.len()).map(|_| StandardNormal.sample(&mut rng)).collect();
                let phi = as_matrix(&prev, dim) * DVector::from_vec(z);
                extend_basis(&mut cols, &model.power(&phi, p as u32), REL);
                if cols.len() == dim {
                    break;
                }
            }
        }
        let stalled = cols.len() == prev.len();
        generations.push(as_matrix(&cols, dim));
        dims.push(cols.len());
        if stalled {
            break;
        }
    }
    let full_at = dims.iter().position(|&d| d == dim).map(|i| i + 1);
    SubspaceTower {
        generations,
        dims,
        full_at,
    }
}

/// The smallest of `radii` (scanned in increasing order) at which the
/// bracket tower of the Galerkin field at `radius * direction / |direction|`
/// spans `H_N`. With `g != 0` this depends on how far out the probe sits.
pub fn tower_radius(
    model: &Galerkin,
    direction: &DVector<f64>,
    radii: &[f64],
    cfg: &TowerConfig,
) -> Result<Option<f64>> {
    if direction.len() != model.dim() || direction.norm() == 0.0 {
        return Err(Error::Dimension(format!(
            "direction must be a nonzero vector of length {}",
            model.dim()
        )));
    }
    let f = build_field(model.system())?;
    let b = model.control_matrix();
    let unit = direction.normalize();
    let mut sorted = radii.to_vec();
    sorted.sort_by(f64::total_cmp);
    for r in sorted {
        if hormander_tower_with(&f, &b, &(&unit * r), cfg)?.passed() {
            return Ok(Some(r));
        }
    }
    Ok(None)
}

fn integrate_shifted(
    model: &Galerkin,
    u0: &DVector<f64>,
    xi: &DVector<f64>,
    zeta: &DVector<f64>,
    t: f64,
    cfg: &IntegratorConfig,
) -> Result<DVector<f64>> {
    integrate(|_, u| model.eval_shifted(u, xi) + zeta, u0, 0.0, t, cfg)
}

/// `S_delta(u0, delta^{-1/p} phi, delta^{-1} psi)` for the two-control
/// system; tends to `u0 + psi - P_N phi^p` as `delta -> 0`.
pub fn scaling_control_endpoint(
    model: &Galerkin,
    u0: &DVector<f64>,
    phi: &DVector<f64>,
    psi: &DVector<f64>,
    delta: f64,
    cfg: &IntegratorConfig,
) -> Result<DVector<f64>> {
    if !(delta > 0.0) {
        return Err(Error::InvalidParameter(format!("delta must be positive, got {delta}")));
    }
    let dim = model.dim();
    if u0.len() != dim || phi.len() != dim || psi.len() != dim {
        return Err(Error::Dimension(format!("vectors must lie in H_N of dimension {dim}")));
    }
    let xi = phi * delta.powf(-1.0 / model.sys.p as f64);
    let zeta = psi / delta;
    match integrate_shifted(model, u0, &xi, &zeta, delta, cfg) {
        Err(e) if e.is_numeric() => integrate_shifted(model, u0, &xi, &zeta, delta, &cfg.tightened(1e-2)),
        r => r,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SteeringConfig {
    /// First `delta` tried for every scaling move, halved on failure.
    pub delta_start: f64,
    /// Smallest `delta` for the moves `u -> u - P_N phi^p`.
    pub delta_min: f64,
    /// Smallest duration of a direct `H_1` burst.
    pub burst_delta_min: f64,
    /// Piecewise-constant pieces per burst.
    pub substeps: usize,
    pub max_rounds: usize,
    pub seed: u64,
    pub integrator: IntegratorConfig,
}

impl Default for SteeringConfig {
    fn default() -> Self {
        Self {
            delta_start: 1e-2,
            delta_min: 1e-6,
            burst_delta_min: 1e-12,
            substeps: 16,
            max_rounds: 12,
            seed: 0,
            integrator: IntegratorConfig::default(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SteeringResult {
    /// Piecewise-constant control with values in `H_1`; `None` if no motion was needed.
    pub control: Option<ControlSignal>,
    /// `|S_T(u0, zeta) - target|`, recomputed from the final control.
    pub achieved_error: f64,
    pub endpoint: DVector<f64>,
    pub rounds: usize,
    pub converged: bool,
}

impl SteeringResult {
    pub fn horizon(&self) -> f64 {
        self.control.as_ref().map_or(0.0, ControlSignal::horizon)
    }
}

/// One step `V_i -> V_{i+1}` of the tower, with generators `phi_j ∈ V_i`
/// such that `V_{i+1} = V_i + span{P_N phi_j^p}`.
struct TowerMove {
    lower: DMatrix<f64>,
    phis: Vec<DVector<f64>>,
    solve: DMatrix<f64>,
}

const CANDIDATES: usize = 256;

fn plan_moves(model: &Galerkin, tower: &SubspaceTower, seed: u64) -> Vec<TowerMove> {
    let mut rng = stream(seed, Purpose::Steering, 0);
    let (dim, p) = (model.dim(), model.sys.p);
    let mut moves = Vec::new();
    for w in tower.generations.windows(2) {
        let (lower, upper) = (&w[0], &w[1]);
        let mut cols: Vec<DVector<f64>> = lower.column_iter().map(|c| c.into_owned()).collect();
        let mut phis = Vec::new();
        let mut images = Vec::new();
        while cols.len() < upper.ncols() {
            let q = as_matrix(&cols, dim);
            let best = (0..CANDIDATES)
                .map(|_| {
                    let z: Vec<f64> = (0..lower.ncols()).map(|_| StandardNormal.sample(&mut rng)).collect();
                    let phi = lower * DVector::from_vec(z);
                    let phi = &phi / phi.norm();
                    let img = model.power(&phi, p);
                    let gain = residual_against(&q, &img).norm();
                    (gain, phi, img)
                })
                .max_by(|a, b| a.0.total_cmp(&b.0))
                .expect("at least one candidate");
            if !extend_basis(&mut cols, &best.2, 1e-6) {
                break;
            }
            phis.push(best.1);
            images.push(DMatrix::from_column_slice(dim, 1, best.2.as_slice()));
        }
        let mut blocks = vec![lower.clone()];
        blocks.extend(images);
        let solve = pinv(&hstack(&blocks, dim), 1e-10);
        moves.push(TowerMove {
            lower: lower.clone(),
            phis,
            solve,
        });
    }
    moves
}

fn odd_root(x: f64, p: u32) -> f64 {
    x.signum() * x.abs().powf(1.0 / p as f64)
}

struct Steerer<'a> {
    model: &'a Galerkin,
    field: VectorField,
    b: DMatrix<f64>,
    moves: Vec<TowerMove>,
    cfg: SteeringConfig,
    u: DVector<f64>,
    pieces: Vec<(f64, DVector<f64>)>,
    elapsed: f64,
}

type Snapshot = (DVector<f64>, usize, f64);

impl Steerer<'_> {
    fn snapshot(&self) -> Snapshot {
        (self.u.clone(), self.pieces.len(), self.elapsed)
    }

    fn restore(&mut self, s: Snapshot) {
        self.u = s.0;
        self.pieces.truncate(s.1);
        self.elapsed = s.2;
    }

    fn run_piece(&mut self, dt: f64, zeta: DVector<f64>) -> Result<()> {
        let push = &self.b * &zeta;
        let field = &self.field;
        self.u = integrate(|_, y| field.eval(y) + &push, &self.u, 0.0, dt, &self.cfg.integrator)?;
        self.pieces.push((dt, zeta));
        self.elapsed += dt;
        Ok(())
    }

    /// Run `attempt` with `delta` halving from `delta_start` until the
    /// state lands within `tol` of `goal` or `delta` would drop below `floor`.
    fn with_schedule<F>(&mut self, goal: &DVector<f64>, tol: f64, floor: f64, mut attempt: F) -> Result<()>
    where
        F: FnMut(&mut Self, f64) -> Result<()>,
    {
        let mut delta = self.cfg.delta_start;
        loop {
            let snap = self.snapshot();
            let err = match attempt(self, delta) {
                Ok(()) => (&self.u - goal).norm(),
                Err(e) if e.is_numeric() => f64::INFINITY,
                Err(e) => return Err(e),
            };
            let last = delta / 2.0 < floor;
            if err <= tol || (last && err.is_finite()) {
                return Ok(());
            }
            self.restore(snap);
            if last {
                return Err(Error::Numeric(format!(
                    "steering step failed down to delta = {delta:e}"
                )));
            }
            delta /= 2.0;
        }
    }

    /// Move the `H_1` coordinates to those of `target` with a short burst.
    fn burst(&mut self, target: &DVector<f64>, tol: f64) -> Result<()> {
        let n1 = self.model.h1_dim();
        let mut goal = self.u.clone();
        goal.rows_mut(0, n1).copy_from(&target.rows(0, n1));
        if (&goal - &self.u).norm() <= tol * 1e-3 {
            return Ok(());
        }
        let steps = self.cfg.substeps.max(1);
        let floor = self.cfg.burst_delta_min;
        let g = goal.clone();
        self.with_schedule(&goal, tol, floor, move |s, delta| {
            let dt = delta / steps as f64;
            for j in 0..steps {
                let remaining = delta - j as f64 * dt;
                // Aim at the goal over the remaining time, cancelling the drift in H_1.
                let drift = s.field.eval(&s.u);
                let zeta = (g.rows(0, n1) - s.u.rows(0, n1)) / remaining - drift.rows(0, n1);
                s.run_piece(dt, zeta)?;
            }
            Ok(())
        })
    }

    /// Realize `u -> u - P_N phi^p` with `phi ∈ V_{level+1}`.
    fn power_move(&mut self, level: usize, phi: &DVector<f64>, tol: f64) -> Result<()> {
        let p = self.model.sys.p;
        let goal = &self.u - self.model.power(phi, p);
        let start = self.u.clone();
        let zero = DVector::zeros(self.model.h1_dim());
        let phi = phi.clone();
        let floor = self.cfg.delta_min;
        self.with_schedule(&goal, tol, floor, move |s, delta| {
            let lift = &phi * delta.powf(-1.0 / p as f64);
            s.reach(level, &(&start + &lift), tol / 4.0)?;
            s.run_piece(delta, zero.clone())?;
            let back = &s.u - &lift;
            s.reach(level, &back, tol / 4.0)
        })
    }

    /// Move toward `target` along the component of `target - u` in `V_{level+1}`.
    fn reach(&mut self, level: usize, target: &DVector<f64>, tol: f64) -> Result<()> {
        if level == 0 {
            return self.burst(target, tol);
        }
        let r = target - &self.u;
        let mv = &self.moves[level - 1];
        let coef = &mv.solve * &r;
        let n_lower = mv.lower.ncols();
        let steps = mv.phis.len() + 1;
        let step_tol = tol / (2.0 * steps as f64);
        let p = self.model.sys.p;
        let plan: Vec<DVector<f64>> = mv
            .phis
            .iter()
            .enumerate()
            .filter_map(|(j, phi)| {
                // c P_N phi^p = -P_N (root(-c) phi)^p since p is odd.
                let c = coef[n_lower + j];
                (c.abs() > step_tol * 1e-3).then(|| phi * odd_root(-c, p))
            })
            .collect();
        for phi in plan {
            self.power_move(level - 1, &phi, step_tol)?;
        }
        let lower = &self.moves[level - 1].lower;
        let rest = lower * (lower.transpose() * (target - &self.u));
        let goal = &self.u + rest;
        self.reach(level - 1, &goal, step_tol)
    }
}

/// Build a control `zeta` with values in `H_1` such that the solution of
/// `u' = f_N(u) + zeta` started at `u0` ends within `eps` of `target`.
///
/// Increments are decomposed along the subspace tower: components in `H_1`
/// are applied by short bursts, and each `-P_N phi^p` component by lifting
/// to `u + delta^{-1/p} phi`, flowing freely for `delta`, and lowering back.
/// The residual is replanned from the reached state up to `max_rounds`
/// times. The result is verified by integrating the final control.
pub fn synthesize_steering(
    model: &Galerkin,
    u0: &DVector<f64>,
    target: &DVector<f64>,
    eps: f64,
    time_budget: f64,
    cfg: &SteeringConfig,
) -> Result<SteeringResult> {
    let dim = model.dim();
    if u0.len() != dim || target.len() != dim {
        return Err(Error::Dimension(format!("states must lie in H_N of dimension {dim}")));
    }
    if !(eps > 0.0) || !(time_budget > 0.0) {
        return Err(Error::InvalidParameter("eps and time_budget must be positive".into()));
    }
    cfg.integrator.validate()?;
    let tower = subspace_tower(model, 64);
    let top = tower.generations.len() - 1;
    let mut st = Steerer {
        model,
        field: Arc::new(Galerkin::new(model.sys.clone())?).vector_field(),
        b: model.control_matrix(),
        moves: plan_moves(model, &tower, cfg.seed),
        cfg: *cfg,
        u: u0.clone(),
        pieces: Vec::new(),
        elapsed: 0.0,
    };
    let mut best = (st.snapshot(), (target - u0).norm());
    let mut rounds = 0;
    while rounds < cfg.max_rounds && best.1 >= eps {
        rounds += 1;
        let snap = st.snapshot();
        match st.reach(top, target, eps / 2.0) {
            Ok(()) => {}
            Err(e) if e.is_numeric() => {
                st.restore(snap);
                break;
            }
            Err(e) => return Err(e),
        }
        if st.elapsed > time_budget {
            st.restore(snap);
            break;
        }
        let err = (target - &st.u).norm();
        if err < best.1 {
            best = (st.snapshot(), err);
        }
    }
    st.restore(best.0);

    if st.pieces.is_empty() {
        return Ok(SteeringResult {
            control: None,
            achieved_error: (target - u0).norm(),
            endpoint: u0.clone(),
            rounds,
            converged: (target - u0).norm() < eps,
        });
    }
    let mut breaks = vec![0.0];
    for (dt, _) in &st.pieces {
        breaks.push(breaks.last().unwrap() + dt);
    }
    let values = st.pieces.iter().map(|(_, z)| z.clone()).collect();
    let control = ControlSignal::new(breaks, values, Interpolation::PiecewiseConstant)?;
    let endpoint = controlled_flow(&st.field, &st.b, u0, &control, control.horizon(), &cfg.integrator)?;
    let achieved_error = (&endpoint - target).norm();
    Ok(SteeringResult {
        converged: achieved_error < eps && control.horizon() <= time_budget,
        control: Some(control),
        achieved_error,
        endpoint,
        rounds,
    })
}

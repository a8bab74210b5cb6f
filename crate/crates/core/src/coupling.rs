//! Couplings: maximal couplings of two densities, the three-branch block
//! coupling of two copies of the embedded chain, and its continuous-time lift.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, RngCore};
use rand_distr::{Distribution, Exp};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dynamics::flow;
use crate::error::{Error, Result};
use crate::linalg::{pinv, rank_with_tol, relative_tol, singular_values};
use crate::noise::{log_density_product, Density, JumpLaw};
use crate::pdmp::{block_jacobian, f_block, SystemSpec};
use crate::rng::{stream, Purpose};

/// Default number of proposals for rejection steps.
pub const DEFAULT_REJECTION_BUDGET: usize = 1_000_000;

/// Result of one draw from a maximal coupling.
#[derive(Debug, Clone, PartialEq)]
pub struct CoupledDraw {
    pub x: DVector<f64>,
    pub y: DVector<f64>,
    pub hit: bool,
}

/// Draw `(x, y)` with `x ~ p`, `y ~ q` and `P{x != y} = TV(p, q)`.
///
/// `x ~ p` is kept as `y` with probability `min(1, q(x)/p(x))`; otherwise
/// `y` comes from the normalized `(q - p)+` by rejection from `q`.
pub fn maximal_coupling_sample(
    p: &dyn Density,
    q: &dyn Density,
    rng: &mut dyn RngCore,
    budget: usize,
) -> Result<CoupledDraw> {
    if p.dim() != q.dim() {
        return Err(Error::Dimension("densities live on different spaces".into()));
    }
    let x = p.sample(rng);
    let log_ratio = q.log_density(&x) - p.log_density(&x);
    if log_ratio >= 0.0 || rng.random::<f64>() < log_ratio.exp() {
        return Ok(CoupledDraw {
            y: x.clone(),
            x,
            hit: true,
        });
    }
    for _ in 0..budget {
        let y = q.sample(rng);
        let accept = 1.0 - (p.log_density(&y) - q.log_density(&y)).exp();
        if accept > 0.0 && rng.random::<f64>() < accept {
            return Ok(CoupledDraw { x, y, hit: false });
        }
    }
    Err(Error::RejectionBudget(budget))
}

/// Tensor midpoint grid on a box.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuadGrid {
    pub lo: Vec<f64>,
    pub hi: Vec<f64>,
    pub cells: Vec<usize>,
}

impl QuadGrid {
    pub fn uniform(lo: f64, hi: f64, cells: usize, dim: usize) -> Self {
        Self {
            lo: vec![lo; dim],
            hi: vec![hi; dim],
            cells: vec![cells; dim],
        }
    }

    fn for_each_midpoint(&self, mut f: impl FnMut(&DVector<f64>)) -> f64 {
        let dim = self.lo.len();
        let widths: Vec<f64> = (0..dim)
            .map(|i| (self.hi[i] - self.lo[i]) / self.cells[i] as f64)
            .collect();
        let total: usize = self.cells.iter().product();
        let mut x = DVector::zeros(dim);
        for idx in 0..total {
            let mut rem = idx;
            for i in 0..dim {
                let c = rem % self.cells[i];
                rem /= self.cells[i];
                x[i] = self.lo[i] + (c as f64 + 0.5) * widths[i];
            }
            f(&x);
        }
        widths.iter().product()
    }
}

/// `TV(p, q) = 1/2 int |p - q|` by the midpoint rule.
pub fn tv_quadrature(p: &dyn Density, q: &dyn Density, grid: &QuadGrid) -> Result<f64> {
    let dim = p.dim();
    if q.dim() != dim || grid.lo.len() != dim || grid.hi.len() != dim || grid.cells.len() != dim {
        return Err(Error::Dimension("densities and grid disagree on dimension".into()));
    }
    if dim > 3 {
        return Err(Error::InvalidParameter("quadrature is limited to dimension 3".into()));
    }
    let (mut mp, mut mq, mut diff) = (0.0, 0.0, 0.0);
    let vol = grid.for_each_midpoint(|x| {
        let (a, b) = (p.density(x), q.density(x));
        mp += a;
        mq += b;
        diff += (a - b).abs();
    });
    for (name, m) in [("p", mp * vol), ("q", mq * vol)] {
        if (1.0 - m).abs() > 1e-3 {
            return Err(Error::Domain(format!("grid misses mass of {name}: integral {m:.6}")));
        }
    }
    Ok((0.5 * diff * vol).clamp(0.0, 1.0))
}

/// How a hit attempt couples the jumps inside `B(x_hat, r)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HitMode {
    /// Exact maximal coupling of the one-step pushforwards. Needs `m = 1`
    /// and a square invertible `B`.
    ExactDensity,
    /// Gauss–Newton matching of the endpoints with a density-ratio accept,
    /// including the Jacobian factor when `m n = d`.
    Shooting,
    /// Independent jumps (never coalesces; a reference mode).
    Independent,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ShootingConfig {
    pub max_iter: usize,
    pub tol: f64,
    /// Proposals allowed for the residual draw after a rejected shot.
    pub fallback_budget: usize,
}

impl Default for ShootingConfig {
    fn default() -> Self {
        Self {
            max_iter: 20,
            tol: 1e-8,
            fallback_budget: 200,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CouplingPolicy {
    pub x_hat: DVector<f64>,
    pub r: f64,
    /// Jumps per block.
    pub m: usize,
    pub hit_mode: HitMode,
    pub shooting: ShootingConfig,
    /// Radius of the compact `B(0, R)` whose entry time is recorded as `I`.
    pub compact_radius: f64,
}

impl CouplingPolicy {
    pub fn new(x_hat: DVector<f64>, r: f64, m: usize, hit_mode: HitMode) -> Self {
        let compact_radius = x_hat.norm() + r;
        Self {
            x_hat,
            r,
            m,
            hit_mode,
            shooting: ShootingConfig::default(),
            compact_radius,
        }
    }

    /// Use the Lyapunov level `2 sqrt((beta/alpha)(1 + lambda/(2 alpha)))`,
    /// enlarged if needed so that `B(x_hat, r)` lies inside `B(0, R)`.
    pub fn with_lyapunov_radius(mut self, alpha: f64, beta: f64, rate: f64) -> Self {
        self.compact_radius = lyapunov_radius(alpha, beta, rate).max(self.x_hat.norm() + self.r);
        self
    }

    pub fn validate(&self, spec: &SystemSpec) -> Result<()> {
        if !(self.r > 0.0) {
            return Err(Error::InvalidParameter("hit radius r must be positive".into()));
        }
        if self.m == 0 {
            return Err(Error::InvalidParameter("block length m must be at least 1".into()));
        }
        if self.x_hat.len() != spec.dim() {
            return Err(Error::Dimension("x_hat has the wrong length".into()));
        }
        if !(self.compact_radius > 0.0) {
            return Err(Error::InvalidParameter("compact radius must be positive".into()));
        }
        if spec.noise.jump_law().is_none() {
            return Err(Error::InvalidParameter(
                "coupling needs a single compound Poisson driver with a density".into(),
            ));
        }
        if self.hit_mode == HitMode::ExactDensity {
            let b = &spec.b;
            if self.m != 1 || !b.is_square() || b.determinant().abs() < 1e-300 {
                return Err(Error::InvalidParameter(
                    "exact-density hits need m = 1 and a square invertible B".into(),
                ));
            }
        }
        Ok(())
    }
}

/// `2 sqrt((beta/alpha)(1 + lambda/(2 alpha)))`.
pub fn lyapunov_radius(alpha: f64, beta: f64, rate: f64) -> f64 {
    2.0 * ((beta / alpha) * (1.0 + rate / (2.0 * alpha))).sqrt()
}

/// Density of `a + B xi` for `xi ~ law` with `B` square invertible.
struct Pushforward<'a> {
    law: &'a JumpLaw,
    shift: DVector<f64>,
    b: &'a DMatrix<f64>,
    b_inv: DMatrix<f64>,
    log_det: f64,
}

impl<'a> Pushforward<'a> {
    fn new(law: &'a JumpLaw, shift: DVector<f64>, b: &'a DMatrix<f64>, b_inv: DMatrix<f64>) -> Self {
        let log_det = b.determinant().abs().ln();
        Self {
            law,
            shift,
            b,
            b_inv,
            log_det,
        }
    }

    fn jump_of(&self, y: &DVector<f64>) -> DVector<f64> {
        &self.b_inv * (y - &self.shift)
    }
}

impl Density for Pushforward<'_> {
    fn dim(&self) -> usize {
        self.shift.len()
    }

    fn log_density(&self, y: &DVector<f64>) -> f64 {
        self.law.log_density(&self.jump_of(y)) - self.log_det
    }

    fn sample(&self, rng: &mut dyn RngCore) -> DVector<f64> {
        &self.shift + self.b * self.law.sample(rng)
    }
}

/// Which rule coupled a block.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Branch {
    /// Equal states, identical jumps.
    Identical,
    /// Both states near `x_hat`; the block ended with equal states.
    Hit,
    /// Both states near `x_hat`; the coupled attempt missed.
    Miss,
    /// Not both near `x_hat`; independent jumps.
    Apart,
}

/// One coupled block: the `m` post-jump states of each component.
#[derive(Debug, Clone)]
pub struct BlockStep {
    pub z: Vec<DVector<f64>>,
    pub z_prime: Vec<DVector<f64>>,
    pub branch: Branch,
    /// A shooting solve failed or the residual draw ran out of budget.
    pub solver_fallback: bool,
}

fn states_along(spec: &SystemSpec, z: &DVector<f64>, s: &[f64], xi: &[DVector<f64>]) -> Result<Vec<DVector<f64>>> {
    let mut out = Vec::with_capacity(s.len());
    let mut x = z.clone();
    for (w, eta) in s.iter().zip(xi) {
        x = spec.step(&x, *w, eta)?;
        out.push(x.clone());
    }
    Ok(out)
}

fn draw_jumps(law: &JumpLaw, m: usize, rng: &mut dyn RngCore) -> Vec<DVector<f64>> {
    (0..m).map(|_| law.sample(rng)).collect()
}

/// Outcome of the deterministic Gauss–Newton solve.
#[derive(Debug, Clone, PartialEq)]
pub struct ShootSolve {
    pub xi: Option<Vec<DVector<f64>>>,
    pub residual: f64,
    pub iterations: usize,
    /// The block Jacobian lost rank during the solve.
    pub singular: bool,
}

fn flatten(xi: &[DVector<f64>]) -> DVector<f64> {
    let n: usize = xi.iter().map(|v| v.len()).sum();
    DVector::from_iterator(n, xi.iter().flat_map(|v| v.iter().copied()))
}

fn unflatten(v: &DVector<f64>, n: usize) -> Vec<DVector<f64>> {
    v.as_slice().chunks(n).map(DVector::from_column_slice).collect()
}

/// Solve `F_m(z', s, xi') = target` by minimum-norm Gauss–Newton from `start`.
pub fn shoot_solve(
    spec: &SystemSpec,
    z_prime: &DVector<f64>,
    s: &[f64],
    start: &[DVector<f64>],
    target: &DVector<f64>,
    cfg: &ShootingConfig,
) -> Result<ShootSolve> {
    let d = spec.dim();
    let n = spec.noise_dim();
    let mut xi = start.to_vec();
    let mut res = target - f_block(spec, z_prime, s, &xi)?;
    let mut norm = res.norm();
    for it in 0..=cfg.max_iter {
        if norm <= cfg.tol {
            return Ok(ShootSolve {
                xi: Some(xi),
                residual: norm,
                iterations: it,
                singular: false,
            });
        }
        if it == cfg.max_iter {
            break;
        }
        let jac = block_jacobian(spec, z_prime, s, &xi)?;
        let sv = singular_values(&jac);
        if rank_with_tol(&sv, relative_tol(&sv, 1e-10)) < d {
            return Ok(ShootSolve {
                xi: None,
                residual: norm,
                iterations: it,
                singular: true,
            });
        }
        let delta = pinv(&jac, 1e-12) * &res;
        let base = flatten(&xi);
        // Backtrack on the residual norm.
        let mut step = 1.0;
        let mut improved = false;
        for _ in 0..12 {
            let cand = unflatten(&(&base + &delta * step), n);
            match f_block(spec, z_prime, s, &cand) {
                Ok(val) => {
                    let r = target - val;
                    if r.norm() < norm {
                        xi = cand;
                        res = r;
                        norm = res.norm();
                        improved = true;
                        break;
                    }
                }
                Err(e) if e.is_numeric() => {}
                Err(e) => return Err(e),
            }
            step *= 0.5;
        }
        if !improved {
            break;
        }
    }
    Ok(ShootSolve {
        xi: None,
        residual: norm,
        iterations: cfg.max_iter,
        singular: false,
    })
}

/// `ln |det D_xi F_m(z, s, xi)|` when the block Jacobian is square, zero
/// otherwise.
fn log_jacobian(spec: &SystemSpec, z: &DVector<f64>, s: &[f64], xi: &[DVector<f64>]) -> Result<f64> {
    if s.len() * spec.noise_dim() != spec.dim() {
        return Ok(0.0);
    }
    Ok(block_jacobian(spec, z, s, xi)?.determinant().abs().ln())
}

/// Find `xi'` with `F_m(z', s, xi') = F_m(z, s, xi)` starting from `xi`,
/// and accept it with probability `min(1, ell^m(xi') |det D xi'/D xi| / ell^m(xi))`.
/// The Jacobian factor is only available when `m n = d`; otherwise it is
/// left out. `None` on non-convergence, rank loss or rejection.
pub fn shoot_match(
    spec: &SystemSpec,
    z: &DVector<f64>,
    z_prime: &DVector<f64>,
    s: &[f64],
    xi: &[DVector<f64>],
    cfg: &ShootingConfig,
    rng: &mut dyn RngCore,
) -> Result<Option<Vec<DVector<f64>>>> {
    if z == z_prime {
        return Ok(Some(xi.to_vec()));
    }
    let law = spec
        .noise
        .jump_law()
        .ok_or_else(|| Error::InvalidParameter("shooting needs a jump density".into()))?;
    let target = f_block(spec, z, s, xi)?;
    let solve = shoot_solve(spec, z_prime, s, xi, &target, cfg)?;
    let Some(cand) = solve.xi else {
        return Ok(None);
    };
    let log_ratio = log_density_product(law, &cand) - log_density_product(law, xi) + log_jacobian(spec, z, s, xi)?
        - log_jacobian(spec, z_prime, s, &cand)?;
    if log_ratio >= 0.0 || rng.random::<f64>() < log_ratio.exp() {
        Ok(Some(cand))
    } else {
        Ok(None)
    }
}

fn shooting_block(
    spec: &SystemSpec,
    policy: &CouplingPolicy,
    law: &JumpLaw,
    z: &DVector<f64>,
    zp: &DVector<f64>,
    s: &[f64],
    rng: &mut dyn RngCore,
) -> Result<BlockStep> {
    let m = policy.m;
    let xi = draw_jumps(law, m, rng);
    let path = states_along(spec, z, s, &xi)?;
    let mut fallback = false;
    if let Some(xi_p) = shoot_match(spec, z, zp, s, &xi, &policy.shooting, rng)? {
        let mut path_p = states_along(spec, zp, s, &xi_p)?;
        // The solve matched the endpoint to tolerance; make it exact.
        *path_p.last_mut().expect("m >= 1") = path.last().expect("m >= 1").clone();
        return Ok(BlockStep {
            z: path,
            z_prime: path_p,
            branch: Branch::Hit,
            solver_fallback: false,
        });
    }
    // Residual draw: propose xi'' ~ ell^m and keep it with probability
    // 1 - ell^m(zeta) |det D zeta/D xi''| / ell^m(xi''), where
    // F_m(z, s, zeta) = F_m(z', s, xi'').
    let mut chosen = None;
    for _ in 0..policy.shooting.fallback_budget {
        let cand = draw_jumps(law, m, rng);
        let target = f_block(spec, zp, s, &cand)?;
        let back = shoot_solve(spec, z, s, &cand, &target, &policy.shooting)?;
        let accept = match back.xi {
            Some(zeta) => {
                let log_back = log_density_product(law, &zeta) - log_density_product(law, &cand)
                    + log_jacobian(spec, zp, s, &cand)?
                    - log_jacobian(spec, z, s, &zeta)?;
                1.0 - log_back.exp()
            }
            None => 1.0,
        };
        if accept > 0.0 && rng.random::<f64>() < accept {
            chosen = Some(cand);
            break;
        }
    }
    let xi_p = chosen.unwrap_or_else(|| {
        fallback = true;
        draw_jumps(law, m, rng)
    });
    let path_p = states_along(spec, zp, s, &xi_p)?;
    Ok(BlockStep {
        z: path,
        z_prime: path_p,
        branch: Branch::Miss,
        solver_fallback: fallback,
    })
}

/// Couple one block of `m = s.len()` jumps from `(z, z')` with shared
/// waiting times `s`.
pub fn block_couple(
    spec: &SystemSpec,
    policy: &CouplingPolicy,
    z: &DVector<f64>,
    z_prime: &DVector<f64>,
    s: &[f64],
    rng: &mut dyn RngCore,
) -> Result<BlockStep> {
    if s.len() != policy.m {
        return Err(Error::Dimension(format!(
            "block needs {} waiting times, got {}",
            policy.m,
            s.len()
        )));
    }
    let law = spec
        .noise
        .jump_law()
        .ok_or_else(|| Error::InvalidParameter("coupling needs a jump density".into()))?;
    if z == z_prime {
        let xi = draw_jumps(law, policy.m, rng);
        let path = states_along(spec, z, s, &xi)?;
        return Ok(BlockStep {
            z_prime: path.clone(),
            z: path,
            branch: Branch::Identical,
            solver_fallback: false,
        });
    }
    let near = (z - &policy.x_hat).norm() < policy.r && (z_prime - &policy.x_hat).norm() < policy.r;
    if !near || policy.hit_mode == HitMode::Independent {
        let xi = draw_jumps(law, policy.m, rng);
        let xi_p = draw_jumps(law, policy.m, rng);
        return Ok(BlockStep {
            z: states_along(spec, z, s, &xi)?,
            z_prime: states_along(spec, z_prime, s, &xi_p)?,
            branch: if near { Branch::Miss } else { Branch::Apart },
            solver_fallback: false,
        });
    }
    match policy.hit_mode {
        HitMode::ExactDensity => {
            let b_inv = spec
                .b
                .clone()
                .try_inverse()
                .ok_or_else(|| Error::InvalidParameter("B is not invertible".into()))?;
            let a = flow(&spec.field, z, s[0], &spec.integrator)?;
            let ap = flow(&spec.field, z_prime, s[0], &spec.integrator)?;
            let p = Pushforward::new(law, a, &spec.b, b_inv.clone());
            let q = Pushforward::new(law, ap, &spec.b, b_inv);
            let draw = maximal_coupling_sample(&p, &q, rng, DEFAULT_REJECTION_BUDGET)?;
            Ok(BlockStep {
                z: vec![draw.x],
                z_prime: vec![draw.y],
                branch: if draw.hit { Branch::Hit } else { Branch::Miss },
                solver_fallback: false,
            })
        }
        HitMode::Shooting => shooting_block(spec, policy, law, z, z_prime, s, rng),
        HitMode::Independent => unreachable!("handled above"),
    }
}

/// One run of the coupled pair and its hitting times. Times are counted in
/// jumps and are multiples of `m`; `None` means not reached.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CouplingRecord {
    /// First block start with both components in `B(0, R)`.
    pub i: Option<usize>,
    /// First block start with both components in `B(x_hat, r)`.
    pub j: Option<usize>,
    /// First block start from which the components coincide.
    pub k: Option<usize>,
    /// Jump time `tau_K`.
    pub tau_k: Option<f64>,
    /// Coalescence time of the continuous lift, `T <= tau_K`.
    pub t: Option<f64>,
    pub censored: bool,
    pub horizon: f64,
    pub branches: Vec<Branch>,
    pub solver_fallbacks: usize,
}

impl CouplingRecord {
    /// `T > t`, counting censored runs as not yet coalesced.
    pub fn survives(&self, t: f64) -> bool {
        match self.t {
            Some(tc) => tc > t,
            None => true,
        }
    }

    /// Ordering invariants: `I <= J <= K` when finite and `T <= tau_K`.
    pub fn is_consistent(&self) -> bool {
        let le = |a: Option<usize>, b: Option<usize>| match (a, b) {
            (Some(x), Some(y)) => x <= y,
            (None, Some(_)) => false,
            _ => true,
        };
        let t_ok = match (self.t, self.tau_k) {
            (Some(t), Some(tk)) => t <= tk,
            (None, None) => true,
            _ => false,
        };
        le(self.i, self.j) && le(self.j, self.k) && t_ok && self.censored == self.k.is_none()
    }
}

/// States of both components observed at requested times.
pub type Observations = Vec<(DVector<f64>, DVector<f64>)>;

struct CoupledRun {
    record: CouplingRecord,
    observed: Observations,
}

fn run_impl(
    spec: &SystemSpec,
    policy: &CouplingPolicy,
    x: &DVector<f64>,
    x_prime: &DVector<f64>,
    horizon: f64,
    t_grid: &[f64],
    rng: &mut dyn RngCore,
) -> Result<CoupledRun> {
    policy.validate(spec)?;
    if !(horizon > 0.0) {
        return Err(Error::InvalidParameter("horizon must be positive".into()));
    }
    if x.len() != spec.dim() || x_prime.len() != spec.dim() {
        return Err(Error::Dimension("initial states have the wrong length".into()));
    }
    let exp = Exp::new(spec.noise.total_rate()).map_err(|e| Error::InvalidParameter(e.to_string()))?;
    let m = policy.m;
    let mut order: Vec<usize> = (0..t_grid.len()).collect();
    order.sort_by(|&a, &b| t_grid[a].total_cmp(&t_grid[b]));
    let mut observed: Observations = vec![(DVector::zeros(0), DVector::zeros(0)); t_grid.len()];
    let mut next_obs = 0usize;
    let obs_end = order.last().map(|&i| t_grid[i]).unwrap_or(f64::NEG_INFINITY);

    let (mut z, mut zp) = (x.clone(), x_prime.clone());
    let (mut i_hit, mut j_hit, mut k_hit) = (None, None, None);
    let mut tau_k = None;
    let mut t_coal = None;
    let mut branches = Vec::new();
    let mut fallbacks = 0usize;
    let mut tau = 0.0;
    let mut jumps = 0usize;
    if z == zp {
        i_hit = Some(0);
        j_hit = Some(0);
        k_hit = Some(0);
        tau_k = Some(0.0);
        t_coal = Some(0.0);
    }
    loop {
        if k_hit.is_none() {
            if i_hit.is_none() && z.norm() <= policy.compact_radius && zp.norm() <= policy.compact_radius {
                i_hit = Some(jumps);
            }
            if j_hit.is_none() && (&z - &policy.x_hat).norm() < policy.r && (&zp - &policy.x_hat).norm() < policy.r {
                j_hit = Some(jumps);
            }
        }
        let need_obs = next_obs < order.len();
        if (k_hit.is_some() || tau > horizon) && !need_obs {
            break;
        }
        if tau > horizon.max(obs_end) {
            break;
        }
        let s: Vec<f64> = (0..m).map(|_| exp.sample(rng)).collect();
        let step = if k_hit.is_none() && tau > horizon {
            // Past the horizon only the observations matter; keep the
            // components running without attempting to couple.
            let ind = CouplingPolicy {
                hit_mode: HitMode::Independent,
                ..policy.clone()
            };
            block_couple(spec, &ind, &z, &zp, &s, rng)?
        } else {
            block_couple(spec, policy, &z, &zp, &s, rng)?
        };
        // Observations inside this block.
        let mut seg_start = tau;
        let mut seg_z = z.clone();
        let mut seg_zp = zp.clone();
        for (idx, w) in s.iter().enumerate() {
            while next_obs < order.len() && t_grid[order[next_obs]] < seg_start + w {
                let t = t_grid[order[next_obs]];
                let a = flow(&spec.field, &seg_z, t - seg_start, &spec.integrator)?;
                let b = if seg_z == seg_zp {
                    a.clone()
                } else {
                    flow(&spec.field, &seg_zp, t - seg_start, &spec.integrator)?
                };
                observed[order[next_obs]] = (a, b);
                next_obs += 1;
            }
            seg_start += w;
            seg_z = step.z[idx].clone();
            seg_zp = step.z_prime[idx].clone();
        }
        if k_hit.is_none() {
            branches.push(step.branch);
            if step.solver_fallback {
                fallbacks += 1;
            }
        }
        let block_tau = tau;
        tau = seg_start;
        jumps += m;
        if k_hit.is_none() && step.z.last() == step.z_prime.last() {
            k_hit = Some(jumps);
            tau_k = Some(tau);
            // Earliest index in the block from which the states agree.
            let mut first = m;
            while first > 0 && step.z[first - 1] == step.z_prime[first - 1] {
                first -= 1;
            }
            t_coal = Some(if first == 0 {
                block_tau
            } else {
                block_tau + s[..first].iter().sum::<f64>()
            });
        }
        z = step.z.last().expect("m >= 1").clone();
        zp = step.z_prime.last().expect("m >= 1").clone();
    }
    let censored = k_hit.is_none();
    Ok(CoupledRun {
        record: CouplingRecord {
            i: i_hit,
            j: j_hit,
            k: k_hit,
            tau_k,
            t: t_coal,
            censored,
            horizon,
            branches,
            solver_fallbacks: fallbacks,
        },
        observed,
    })
}

/// Run the coupled pair from `(x, x')` until coalescence or until the block
/// start time passes `horizon`.
pub fn run_coupling(
    spec: &SystemSpec,
    policy: &CouplingPolicy,
    x: &DVector<f64>,
    x_prime: &DVector<f64>,
    horizon: f64,
    rng: &mut dyn RngCore,
) -> Result<CouplingRecord> {
    Ok(run_impl(spec, policy, x, x_prime, horizon, &[], rng)?.record)
}

/// As [`run_coupling`], also returning `(Z_t, Z'_t)` at each time in `t_grid`.
pub fn run_coupling_observed(
    spec: &SystemSpec,
    policy: &CouplingPolicy,
    x: &DVector<f64>,
    x_prime: &DVector<f64>,
    horizon: f64,
    t_grid: &[f64],
    rng: &mut dyn RngCore,
) -> Result<(CouplingRecord, Observations)> {
    let run = run_impl(spec, policy, x, x_prime, horizon, t_grid, rng)?;
    Ok((run.record, run.observed))
}

/// Many independent coupling runs; run `r` uses stream `(seed, Coupling, r)`.
pub fn run_coupling_batch(
    spec: &SystemSpec,
    policy: &CouplingPolicy,
    x: &DVector<f64>,
    x_prime: &DVector<f64>,
    horizon: f64,
    t_grid: &[f64],
    replicas: usize,
    seed: u64,
) -> Result<Vec<(CouplingRecord, Observations)>> {
    (0..replicas)
        .into_par_iter()
        .map(|r| {
            let mut rng = stream(seed, Purpose::Coupling, r as u64);
            run_coupling_observed(spec, policy, x, x_prime, horizon, t_grid, &mut rng)
        })
        .collect()
}

/// Block-end states `(z_{jm}, z'_{jm})` for `j = 1..=blocks`.
pub fn coupled_chain(
    spec: &SystemSpec,
    policy: &CouplingPolicy,
    x: &DVector<f64>,
    x_prime: &DVector<f64>,
    blocks: usize,
    rng: &mut dyn RngCore,
) -> Result<Vec<(DVector<f64>, DVector<f64>, Branch)>> {
    policy.validate(spec)?;
    let exp = Exp::new(spec.noise.total_rate()).map_err(|e| Error::InvalidParameter(e.to_string()))?;
    let (mut z, mut zp) = (x.clone(), x_prime.clone());
    let mut out = Vec::with_capacity(blocks);
    for _ in 0..blocks {
        let s: Vec<f64> = (0..policy.m).map(|_| exp.sample(rng)).collect();
        let step = block_couple(spec, policy, &z, &zp, &s, rng)?;
        z = step.z.last().expect("m >= 1").clone();
        zp = step.z_prime.last().expect("m >= 1").clone();
        out.push((z.clone(), zp.clone(), step.branch));
    }
    Ok(out)
}

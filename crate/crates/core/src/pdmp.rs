//! The jump-flow process `dX = f(X) dt + B dY`: trajectories, the embedded
//! chain at jump times and the deterministic block maps `F_k`.

use nalgebra::{DMatrix, DVector};
use rand::RngCore;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dynamics::{flow, flow_with_sensitivity, IntegratorConfig, VectorField};
use crate::error::{Error, Result};
use crate::noise::{CompoundPoissonPath, JumpLaw, NoiseModel};
use crate::rng::{stream, Purpose};

/// The tuple `(f, B, noise, integrator)`.
#[derive(Debug, Clone)]
pub struct SystemSpec {
    pub field: VectorField,
    pub b: DMatrix<f64>,
    pub noise: NoiseModel,
    pub integrator: IntegratorConfig,
}

impl SystemSpec {
    pub fn new(field: VectorField, b: DMatrix<f64>, noise: NoiseModel, integrator: IntegratorConfig) -> Result<Self> {
        let spec = Self {
            field,
            b,
            noise,
            integrator,
        };
        spec.validate()?;
        Ok(spec)
    }

    /// A single compound Poisson driver with the default integrator.
    pub fn single(field: VectorField, b: DMatrix<f64>, rate: f64, law: JumpLaw) -> Result<Self> {
        Self::new(field, b, NoiseModel::Single { rate, law }, IntegratorConfig::default())
    }

    pub fn validate(&self) -> Result<()> {
        self.noise.validate()?;
        self.integrator.validate()?;
        if self.b.nrows() != self.field.dim() {
            return Err(Error::Dimension(format!(
                "B has {} rows but the field has dimension {}",
                self.b.nrows(),
                self.field.dim()
            )));
        }
        if self.b.ncols() != self.noise.dim() {
            return Err(Error::Dimension(format!(
                "B has {} columns but jumps have dimension {}",
                self.b.ncols(),
                self.noise.dim()
            )));
        }
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.field.dim()
    }

    pub fn noise_dim(&self) -> usize {
        self.b.ncols()
    }

    pub fn with_integrator(&self, integrator: IntegratorConfig) -> Self {
        Self {
            integrator,
            ..self.clone()
        }
    }

    /// One step of the embedded chain: `S_wait(x) + B eta`.
    pub fn step(&self, x: &DVector<f64>, wait: f64, eta: &DVector<f64>) -> Result<DVector<f64>> {
        Ok(flow(&self.field, x, wait, &self.integrator)? + &self.b * eta)
    }
}

/// A sampled solution, stored as its jump skeleton. States between jumps
/// are re-integrated on demand.
#[derive(Debug, Clone)]
pub struct Trajectory {
    pub x0: DVector<f64>,
    pub path: CompoundPoissonPath,
    /// `X_{tau_k}` for `k = 1..=N_T`.
    pub post_jump_states: Vec<DVector<f64>>,
    spec: SystemSpec,
}

impl Trajectory {
    /// `N_t`.
    pub fn jumps_by(&self, t: f64) -> usize {
        self.path.count_at(t)
    }

    /// `X_tau_k` with `X_tau_0 = x0`.
    pub fn embedded(&self, k: usize) -> &DVector<f64> {
        if k == 0 {
            &self.x0
        } else {
            &self.post_jump_states[k - 1]
        }
    }

    /// `X_t` for `t` in `[0, horizon]`; right-continuous at the jump times.
    pub fn state_at(&self, t: f64) -> Result<DVector<f64>> {
        if !(0.0..=self.path.horizon).contains(&t) {
            return Err(Error::InvalidParameter(format!(
                "time {t} outside [0, {}]",
                self.path.horizon
            )));
        }
        let k = self.jumps_by(t);
        let t0 = if k == 0 { 0.0 } else { self.path.jump_times[k - 1] };
        flow(&self.spec.field, self.embedded(k), t - t0, &self.spec.integrator)
    }
}

/// Sample `X` on `[0, horizon]` from `x0`.
pub fn simulate(spec: &SystemSpec, x0: &DVector<f64>, horizon: f64, rng: &mut dyn RngCore) -> Result<Trajectory> {
    if x0.len() != spec.dim() {
        return Err(Error::Dimension("initial state has the wrong length".into()));
    }
    let path = spec.noise.sample_path(horizon, rng)?;
    let mut states = Vec::with_capacity(path.jumps.len());
    let mut x = x0.clone();
    for (w, eta) in path.waiting_times().iter().zip(&path.jumps) {
        x = spec.step(&x, *w, eta)?;
        states.push(x.clone());
    }
    Ok(Trajectory {
        x0: x0.clone(),
        path,
        post_jump_states: states,
        spec: spec.clone(),
    })
}

/// `k` steps of the embedded chain. Returns the waiting times, the jumps
/// and the states `X_tau_1..X_tau_k`.
pub fn embedded_chain(
    spec: &SystemSpec,
    x0: &DVector<f64>,
    k: usize,
    rng: &mut dyn RngCore,
) -> Result<(Vec<f64>, Vec<DVector<f64>>, Vec<DVector<f64>>)> {
    let mut ev = spec.noise.events();
    let mut waits = Vec::with_capacity(k);
    let mut jumps = Vec::with_capacity(k);
    let mut states = Vec::with_capacity(k);
    let mut x = x0.clone();
    for _ in 0..k {
        let (w, eta) = ev.next_event(rng);
        x = spec.step(&x, w, &eta)?;
        waits.push(w);
        jumps.push(eta);
        states.push(x.clone());
    }
    Ok((waits, jumps, states))
}

fn check_block_args(spec: &SystemSpec, x: &DVector<f64>, s: &[f64], xi: &[DVector<f64>]) -> Result<()> {
    if s.len() != xi.len() {
        return Err(Error::Dimension(format!(
            "{} waiting times but {} jumps",
            s.len(),
            xi.len()
        )));
    }
    if x.len() != spec.dim() {
        return Err(Error::Dimension("state has the wrong length".into()));
    }
    if xi.iter().any(|v| v.len() != spec.noise_dim()) {
        return Err(Error::Dimension("jump vector has the wrong length".into()));
    }
    if s.iter().any(|&w| !(w >= 0.0)) {
        return Err(Error::InvalidParameter("waiting times must be nonnegative".into()));
    }
    Ok(())
}

/// `F_k(x, s, xi)`: `F_0 = x`, `F_j = S_{s_j}(F_{j-1}) + B xi_j`.
pub fn f_block(spec: &SystemSpec, x: &DVector<f64>, s: &[f64], xi: &[DVector<f64>]) -> Result<DVector<f64>> {
    check_block_args(spec, x, s, xi)?;
    let mut z = x.clone();
    for (w, eta) in s.iter().zip(xi) {
        z = spec.step(&z, *w, eta)?;
    }
    Ok(z)
}

/// `D_xi F_k(x, s, xi)` as a `d x (k n)` matrix; column block `j` is
/// `Phi_k ... Phi_{j+1} B` with `Phi_i` the flow derivative over `s_i`.
pub fn block_jacobian(spec: &SystemSpec, x: &DVector<f64>, s: &[f64], xi: &[DVector<f64>]) -> Result<DMatrix<f64>> {
    Ok(block_value_and_jacobian(spec, x, s, xi)?.1)
}

/// `F_k` and its jump-derivative from one forward sweep.
pub fn block_value_and_jacobian(
    spec: &SystemSpec,
    x: &DVector<f64>,
    s: &[f64],
    xi: &[DVector<f64>],
) -> Result<(DVector<f64>, DMatrix<f64>)> {
    check_block_args(spec, x, s, xi)?;
    let (d, n, k) = (spec.dim(), spec.noise_dim(), s.len());
    let mut z = x.clone();
    let mut phis = Vec::with_capacity(k);
    for (w, eta) in s.iter().zip(xi) {
        let (zt, phi) = flow_with_sensitivity(&spec.field, &z, *w, &spec.integrator)?;
        z = zt + &spec.b * eta;
        phis.push(phi);
    }
    let mut jac = DMatrix::zeros(d, k * n);
    let mut p = DMatrix::<f64>::identity(d, d);
    for j in (0..k).rev() {
        jac.view_mut((0, j * n), (d, n)).copy_from(&(&p * &spec.b));
        p *= &phis[j];
    }
    Ok((z, jac))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MomentPoint {
    /// Jump index `k` or time `t`.
    pub at: f64,
    pub estimate: f64,
    pub stderr: f64,
}

/// Monte Carlo second moments `E|X_tau_k|^2` and `E|X_t|^2`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MomentReport {
    pub replicas: usize,
    pub embedded: Vec<MomentPoint>,
    pub continuous: Vec<MomentPoint>,
}

fn mean_and_stderr(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, f64::NAN);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

/// One replica: `|X_tau_k|^2` for `k = 0..=k_max` and `|X_t|^2` on the grid.
fn moment_replica(
    spec: &SystemSpec,
    x0: &DVector<f64>,
    k_max: usize,
    t_grid: &[f64],
    rng: &mut dyn RngCore,
) -> Result<(Vec<f64>, Vec<f64>)> {
    let mut emb = Vec::with_capacity(k_max + 1);
    emb.push(x0.norm_squared());
    let mut cont = vec![0.0; t_grid.len()];
    let mut order: Vec<usize> = (0..t_grid.len()).collect();
    order.sort_by(|&a, &b| t_grid[a].total_cmp(&t_grid[b]));
    let mut next_t = 0usize;

    let mut ev = spec.noise.events();
    let mut x = x0.clone();
    let mut tau = 0.0;
    let mut k = 0usize;
    while k < k_max || next_t < order.len() {
        let (w, eta) = ev.next_event(rng);
        while next_t < order.len() && t_grid[order[next_t]] < tau + w {
            let t = t_grid[order[next_t]];
            cont[order[next_t]] = flow(&spec.field, &x, t - tau, &spec.integrator)?.norm_squared();
            next_t += 1;
        }
        if k >= k_max && next_t == order.len() {
            break;
        }
        x = spec.step(&x, w, &eta)?;
        tau += w;
        k += 1;
        if k <= k_max {
            emb.push(x.norm_squared());
        }
    }
    Ok((emb, cont))
}

/// Estimate `E|X_tau_k|^2` for `k <= k_max` and `E|X_t|^2` for `t` in
/// `t_grid` from `replicas` independent runs. Replica `r` uses the stream
/// `(seed, Path, r)`, so the result does not depend on the thread count.
pub fn empirical_moment(
    spec: &SystemSpec,
    x0: &DVector<f64>,
    k_max: usize,
    t_grid: &[f64],
    replicas: usize,
    seed: u64,
) -> Result<MomentReport> {
    if replicas < 2 {
        return Err(Error::InvalidParameter("need at least two replicas".into()));
    }
    if t_grid.iter().any(|&t| !(t >= 0.0)) {
        return Err(Error::InvalidParameter("time grid must be nonnegative".into()));
    }
    let runs: Vec<(Vec<f64>, Vec<f64>)> = (0..replicas)
        .into_par_iter()
        .map(|r| {
            let mut rng = stream(seed, Purpose::Path, r as u64);
            moment_replica(spec, x0, k_max, t_grid, &mut rng)
        })
        .collect::<Result<_>>()?;
    let column = |f: &dyn Fn(&(Vec<f64>, Vec<f64>)) -> f64| -> (f64, f64) {
        let xs: Vec<f64> = runs.iter().map(f).collect();
        mean_and_stderr(&xs)
    };
    let embedded = (0..=k_max)
        .map(|k| {
            let (estimate, stderr) = column(&|r| r.0[k]);
            MomentPoint {
                at: k as f64,
                estimate,
                stderr,
            }
        })
        .collect();
    let continuous = t_grid
        .iter()
        .enumerate()
        .map(|(i, &t)| {
            let (estimate, stderr) = column(&|r| r.1[i]);
            MomentPoint {
                at: t,
                estimate,
                stderr,
            }
        })
        .collect();
    Ok(MomentReport {
        replicas,
        embedded,
        continuous,
    })
}

/// Right-hand side of the pathwise Lyapunov bound for the embedded chain:
/// `(1+eps)^k e^{-2 alpha tau_k} |x0|^2
///   + C_eps sum_j e^{-2 alpha (tau_k - tau_j)} (1+eps)^{k-j} (1 + |eta_j|^2)`
/// with `C_eps = (1 + 1/eps) max(beta/alpha, |B|^2)`, valid for `eps <= 1`.
pub fn pathwise_moment_bound(
    x0_norm2: f64,
    waits: &[f64],
    jumps: &[DVector<f64>],
    alpha: f64,
    beta: f64,
    b_norm: f64,
    eps: f64,
) -> Vec<f64> {
    let c_eps = (1.0 + 1.0 / eps) * (beta / alpha).max(b_norm * b_norm);
    let mut out = Vec::with_capacity(waits.len());
    let mut bound = x0_norm2;
    for (w, eta) in waits.iter().zip(jumps) {
        bound = (1.0 + eps) * (-2.0 * alpha * w).exp() * bound + c_eps * (1.0 + eta.norm_squared());
        out.push(bound);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::noise::JumpLaw;
    use proptest::prelude::*;

    fn v(xs: &[f64]) -> DVector<f64> {
        DVector::from_row_slice(xs)
    }

    fn free_system(d: usize) -> SystemSpec {
        SystemSpec::single(
            VectorField::zero(d),
            DMatrix::identity(d, d),
            1.0,
            JumpLaw::standard_gaussian(d),
        )
        .unwrap()
    }

    fn linear_system(alpha: f64) -> SystemSpec {
        SystemSpec::single(
            VectorField::linear(DMatrix::from_element(1, 1, -alpha)),
            DMatrix::identity(1, 1),
            1.0,
            JumpLaw::standard_gaussian(1),
        )
        .unwrap()
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let e = SystemSpec::single(
            VectorField::zero(2),
            DMatrix::identity(3, 3),
            1.0,
            JumpLaw::standard_gaussian(3),
        );
        assert!(matches!(e, Err(Error::Dimension(_))));
        let e = SystemSpec::single(
            VectorField::zero(2),
            DMatrix::identity(2, 2),
            1.0,
            JumpLaw::standard_gaussian(1),
        );
        assert!(matches!(e, Err(Error::Dimension(_))));
    }

    #[test]
    fn free_system_sums_jumps() {
        let spec = free_system(2);
        let mut rng = stream(5, Purpose::Path, 0);
        let x0 = v(&[1.0, -1.0]);
        let tr = simulate(&spec, &x0, 10.0, &mut rng).unwrap();
        let expected = &x0 + tr.path.value_at(10.0, 2);
        assert!((tr.state_at(10.0).unwrap() - expected).norm() < 1e-12);
    }

    #[test]
    fn rare_jumps_follow_the_flow() {
        let spec = SystemSpec::single(
            VectorField::linear(DMatrix::from_element(1, 1, -1.0)),
            DMatrix::identity(1, 1),
            1e-9,
            JumpLaw::standard_gaussian(1),
        )
        .unwrap();
        let mut rng = stream(5, Purpose::Path, 1);
        let tr = simulate(&spec, &v(&[1.0]), 2.0, &mut rng).unwrap();
        assert_eq!(tr.jumps_by(2.0), 0);
        assert!((tr.state_at(2.0).unwrap()[0] - (-2.0f64).exp()).abs() < 1e-9);
    }

    #[test]
    fn trajectory_is_cadlag_at_jumps() {
        let spec = linear_system(0.5);
        let mut rng = stream(6, Purpose::Path, 0);
        let tr = simulate(&spec, &v(&[2.0]), 20.0, &mut rng).unwrap();
        assert!(!tr.post_jump_states.is_empty());
        for (k, &t) in tr.path.jump_times.iter().enumerate() {
            assert_eq!(&tr.state_at(t).unwrap(), &tr.post_jump_states[k]);
        }
    }

    #[test]
    fn f_block_matches_simulate_bitwise() {
        let spec = SystemSpec::single(
            VectorField::new(1, |x| v(&[-x[0] - x[0].powi(3)])),
            DMatrix::identity(1, 1),
            1.0,
            JumpLaw::standard_gaussian(1),
        )
        .unwrap();
        let mut rng = stream(7, Purpose::Path, 0);
        let x0 = v(&[0.4]);
        let tr = simulate(&spec, &x0, 15.0, &mut rng).unwrap();
        let s = tr.path.waiting_times();
        for k in 0..=s.len() {
            let fk = f_block(&spec, &x0, &s[..k], &tr.path.jumps[..k]).unwrap();
            assert_eq!(&fk, tr.embedded(k));
        }
    }

    #[test]
    fn f_block_examples() {
        let spec = free_system(2);
        let x = v(&[1.0, 2.0]);
        assert_eq!(f_block(&spec, &x, &[], &[]).unwrap(), x);
        let out = f_block(&spec, &x, &[0.3, 0.9], &[v(&[1.0, 0.0]), v(&[0.5, -1.0])]).unwrap();
        assert!((out - v(&[2.5, 1.0])).norm() < 1e-14);
        assert!(f_block(&spec, &x, &[0.3], &[]).is_err());
    }

    #[test]
    fn block_jacobian_free_identity() {
        let spec = free_system(3);
        let j = block_jacobian(&spec, &v(&[0.0, 1.0, 2.0]), &[0.7], &[v(&[1.0, 1.0, 1.0])]).unwrap();
        assert!((j - DMatrix::<f64>::identity(3, 3)).abs().max() < 1e-12);
    }

    #[test]
    fn block_jacobian_linear_uses_exponentials() {
        let a = DMatrix::from_row_slice(2, 2, &[0.0, 1.0, -1.0, -1.0]);
        let b = DMatrix::from_row_slice(2, 1, &[0.0, 1.0]);
        let spec = SystemSpec::single(
            VectorField::linear(a.clone()),
            b.clone(),
            1.0,
            JumpLaw::standard_gaussian(1),
        )
        .unwrap();
        let s = [0.4, 1.1, 0.25];
        let xi = [v(&[0.1]), v(&[-0.3]), v(&[2.0])];
        let j = block_jacobian(&spec, &v(&[1.0, 0.0]), &s, &xi).unwrap();
        for blk in 0..3 {
            let tail: f64 = s[blk + 1..].iter().sum();
            let expect = (&a * tail).exp() * &b;
            assert!((j.columns(blk, 1) - expect).abs().max() < 1e-8, "block {blk}");
        }
    }

    #[test]
    fn block_jacobian_matches_finite_differences() {
        let spec = SystemSpec::single(
            VectorField::new(2, |x| v(&[x[1], -x[0] - x[1] - x[0].powi(3)])),
            DMatrix::from_row_slice(2, 1, &[0.0, 1.0]),
            1.0,
            JumpLaw::standard_gaussian(1),
        )
        .unwrap();
        let x = v(&[0.5, -0.2]);
        let s = [0.6, 0.8];
        let xi = vec![v(&[0.3]), v(&[-0.7])];
        let j = block_jacobian(&spec, &x, &s, &xi).unwrap();
        let h = 1e-5;
        for c in 0..2 {
            let mut xp = xi.clone();
            let mut xm = xi.clone();
            xp[c][0] += h;
            xm[c][0] -= h;
            let fd = (f_block(&spec, &x, &s, &xp).unwrap() - f_block(&spec, &x, &s, &xm).unwrap()) / (2.0 * h);
            assert!((j.column(c) - fd).norm() < 1e-4, "column {c}");
        }
    }

    #[test]
    fn moments_are_thread_count_independent() {
        let spec = linear_system(0.5);
        let x0 = v(&[2.0]);
        let pool1 = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
        let pool4 = rayon::ThreadPoolBuilder::new().num_threads(4).build().unwrap();
        let a = pool1.install(|| empirical_moment(&spec, &x0, 5, &[0.5, 3.0], 300, 9).unwrap());
        let b = pool4.install(|| empirical_moment(&spec, &x0, 5, &[0.5, 3.0], 300, 9).unwrap());
        assert_eq!(a, b);
    }

    #[test]
    fn huge_mean_wait_tracks_flow() {
        let spec = SystemSpec::single(
            VectorField::linear(DMatrix::from_element(1, 1, -0.5)),
            DMatrix::identity(1, 1),
            1e-12,
            JumpLaw::standard_gaussian(1),
        )
        .unwrap();
        let rep = empirical_moment(&spec, &v(&[2.0]), 0, &[0.0, 1.0, 2.0], 50, 1).unwrap();
        for p in &rep.continuous {
            assert!((p.estimate - 4.0 * (-p.at).exp()).abs() < 1e-8);
        }
    }

    #[test]
    fn pathwise_bound_holds_on_linear_paths() {
        let alpha = 0.5;
        let spec = linear_system(alpha);
        for r in 0..200 {
            let mut rng = stream(21, Purpose::Path, r);
            let x0 = v(&[2.0]);
            let (w, eta, states) = embedded_chain(&spec, &x0, 30, &mut rng).unwrap();
            let bound = pathwise_moment_bound(4.0, &w, &eta, alpha, 0.0, 1.0, 0.1);
            for (s, b) in states.iter().zip(&bound) {
                assert!(s.norm_squared() <= *b + 1e-9);
            }
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]
        #[test]
        fn block_composition(split in 0usize..4, seed in 0u64..1000) {
            let spec = linear_system(0.3);
            let mut rng = stream(seed, Purpose::Other, 0);
            let x0 = v(&[1.0]);
            let (s, xi, _) = embedded_chain(&spec, &x0, 4, &mut rng).unwrap();
            let mid = f_block(&spec, &x0, &s[..split], &xi[..split]).unwrap();
            let whole = f_block(&spec, &x0, &s, &xi).unwrap();
            let rest = f_block(&spec, &mid, &s[split..], &xi[split..]).unwrap();
            prop_assert_eq!(whole, rest);
        }
    }
}

//! Networks of pinned, coupled oscillators whose driven sites exchange
//! energy with compound Poisson baths, in Langevin and semi-Markov form.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::controllability::{kalman_rank, RankCertificate};
use crate::dynamics::{IntegratorConfig, VectorField};
use crate::error::{Error, Result};
use crate::jet::{flat_bump, Jet};
use crate::linalg::{singular_values, spd_sqrt};
use crate::noise::{JumpLaw, NoiseModel};
use crate::pdmp::SystemSpec;

/// The anharmonic part `U` of the potential.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Potential {
    #[default]
    Zero,
    /// `U(q) = amplitude * sum_i cos q_i`.
    CosineSum { amplitude: f64 },
    /// `U(q) = amplitude * prod_i b(q_i / radius)` with the smooth bump
    /// `b(x) = e * exp(-1 / (1 - x^2))` on `|x| < 1`, zero outside.
    Bump { amplitude: f64, radius: f64 },
}

impl Potential {
    fn validate(&self) -> Result<()> {
        match *self {
            Potential::Bump { radius, .. } if !(radius > 0.0) => Err(Error::InvalidParameter(format!(
                "bump radius must be positive, got {radius}"
            ))),
            _ => Ok(()),
        }
    }

    /// Derivatives `b^{(0..=order)}` of the one-dimensional bump at `x`.
    fn bump_derivs(x: f64, radius: f64, order: usize) -> Vec<f64> {
        let s = x / radius;
        if s.abs() >= 1.0 {
            return vec![0.0; order + 1];
        }
        let t = Jet::var(s, order);
        let jet = flat_bump(&t.mul(&t).affine(-1.0, 1.0));
        (0..=order)
            .map(|k| std::f64::consts::E * jet.derivative(k) / radius.powi(k as i32))
            .collect()
    }

    /// The mixed partial `d^{alpha} U(q)` for the multi-index `alpha`.
    pub fn partial(&self, q: &DVector<f64>, alpha: &[usize]) -> f64 {
        let order: usize = alpha.iter().sum();
        match *self {
            Potential::Zero => 0.0,
            Potential::CosineSum { amplitude } => {
                let nonzero: Vec<usize> = (0..alpha.len()).filter(|&i| alpha[i] > 0).collect();
                match nonzero.len() {
                    0 => amplitude * q.iter().map(|x| x.cos()).sum::<f64>(),
                    1 => amplitude * (q[nonzero[0]] + order as f64 * std::f64::consts::FRAC_PI_2).cos(),
                    _ => 0.0,
                }
            }
            Potential::Bump { amplitude, radius } => {
                amplitude
                    * q.iter()
                        .zip(alpha)
                        .map(|(&x, &a)| Self::bump_derivs(x, radius, a)[a])
                        .product::<f64>()
            }
        }
    }

    pub fn value(&self, q: &DVector<f64>) -> f64 {
        self.partial(q, &vec![0; q.len()])
    }

    pub fn gradient(&self, q: &DVector<f64>) -> DVector<f64> {
        let n = q.len();
        DVector::from_fn(n, |i, _| {
            let mut a = vec![0; n];
            a[i] = 1;
            self.partial(q, &a)
        })
    }

    pub fn hessian(&self, q: &DVector<f64>) -> DMatrix<f64> {
        let n = q.len();
        DMatrix::from_fn(n, n, |i, j| {
            let mut a = vec![0; n];
            a[i] += 1;
            a[j] += 1;
            self.partial(q, &a)
        })
    }

    /// Frobenius norm of the symmetric tensor `D^m U(q)`.
    pub fn derivative_norm(&self, q: &DVector<f64>, m: usize) -> f64 {
        let n = q.len();
        match *self {
            Potential::Zero => 0.0,
            Potential::CosineSum { amplitude } => {
                if m == 0 {
                    return self.value(q).abs();
                }
                let phase = m as f64 * std::f64::consts::FRAC_PI_2;
                amplitude.abs() * q.iter().map(|x| (x + phase).cos().powi(2)).sum::<f64>().sqrt()
            }
            Potential::Bump { amplitude, radius } => {
                // Sum over ordered index tuples = sum over multi-indices
                // weighted by multinomials; accumulate prod b^{(a_i)}^2 / a_i!.
                let derivs: Vec<Vec<f64>> = q.iter().map(|&x| Self::bump_derivs(x, radius, m)).collect();
                let fact = |k: usize| (1..=k).map(|i| i as f64).product::<f64>();
                let mut dp = vec![0.0; m + 1];
                dp[0] = 1.0;
                for d in derivs.iter().take(n) {
                    let mut next = vec![0.0; m + 1];
                    for (t, &v) in dp.iter().enumerate() {
                        if v == 0.0 {
                            continue;
                        }
                        for a in 0..=m - t {
                            next[t + a] += v * d[a] * d[a] / fact(a);
                        }
                    }
                    dp = next;
                }
                amplitude.abs() * (fact(m) * dp[m]).sqrt()
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkSpec {
    /// Rows of the nonsingular coupling matrix `omega` (`|I| x |I|`).
    pub omega: Vec<Vec<f64>>,
    /// Driven sites `J`, as 0-based indices into `I`.
    pub driven: Vec<usize>,
    /// Dissipation `gamma_j`, one per driven site.
    pub gamma: Vec<f64>,
    /// Bath couplings `lambda_j` of the semi-Markov form.
    #[serde(default)]
    pub lambda: Vec<f64>,
    #[serde(default)]
    pub potential: Potential,
    /// Jump rate of each bath.
    pub rates: Vec<f64>,
    /// One-dimensional jump law of each bath.
    pub laws: Vec<JumpLaw>,
}

impl NetworkSpec {
    /// A chain of `length` unit masses, each pinned and joined to its
    /// neighbours by unit springs, driven at both ends by standard Gaussian
    /// baths of unit rate.
    pub fn chain(length: usize, gamma: f64) -> Result<Self> {
        if length < 2 {
            return Err(Error::InvalidParameter(format!(
                "a chain needs at least 2 masses, got {length}"
            )));
        }
        let k = chain_stiffness(length);
        let omega = spd_sqrt(&k).ok_or_else(|| Error::Numeric("chain stiffness is not positive definite".into()))?;
        Ok(Self {
            omega: omega.row_iter().map(|r| r.iter().copied().collect()).collect(),
            driven: vec![0, length - 1],
            gamma: vec![gamma; 2],
            lambda: Vec::new(),
            potential: Potential::Zero,
            rates: vec![1.0; 2],
            laws: vec![JumpLaw::standard_gaussian(1); 2],
        })
    }

    pub fn with_potential(mut self, potential: Potential) -> Self {
        self.potential = potential;
        self
    }

    pub fn with_lambda(mut self, lambda: f64) -> Self {
        self.lambda = vec![lambda; self.driven.len()];
        self
    }

    /// `|I|`.
    pub fn size(&self) -> usize {
        self.omega.len()
    }

    pub fn omega_matrix(&self) -> DMatrix<f64> {
        let n = self.size();
        DMatrix::from_fn(n, n, |i, j| self.omega[i][j])
    }

    /// `[iota_j]_{j ∈ J}` as an `|I| x |J|` matrix.
    pub fn injection(&self) -> DMatrix<f64> {
        DMatrix::from_fn(self.size(), self.driven.len(), |i, j| {
            (self.driven[j] == i) as u8 as f64
        })
    }

    pub fn condition_number(&self) -> f64 {
        let sv = singular_values(&self.omega_matrix());
        sv[0] / sv[sv.len() - 1]
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.size();
        let bad = |m: String| Err(Error::InvalidParameter(m));
        if n == 0 || self.omega.iter().any(|r| r.len() != n) {
            return Err(Error::Dimension("omega must be a nonempty square matrix".into()));
        }
        if self.driven.is_empty() {
            return bad("the driven set must be nonempty".into());
        }
        let mut seen = vec![false; n];
        for &j in &self.driven {
            if j >= n || seen[j] {
                return bad(format!("driven index {j} is out of range or repeated"));
            }
            seen[j] = true;
        }
        let m = self.driven.len();
        if self.gamma.len() != m || self.rates.len() != m || self.laws.len() != m {
            return Err(Error::Dimension(
                "gamma, rates and laws need one entry per driven site".into(),
            ));
        }
        if !self.lambda.is_empty() && self.lambda.len() != m {
            return Err(Error::Dimension("lambda needs one entry per driven site".into()));
        }
        if self.gamma.iter().any(|g| !(*g > 0.0)) {
            return bad("dissipation constants must be positive".into());
        }
        if self.lambda.iter().any(|l| !(*l > 0.0)) {
            return bad("bath couplings must be positive".into());
        }
        let cond = self.condition_number();
        if !cond.is_finite() || cond > 1e12 {
            return Err(Error::Numeric(format!("omega is singular (condition number {cond:e})")));
        }
        self.potential.validate()?;
        self.noise().validate()
    }

    pub fn noise(&self) -> NoiseModel {
        NoiseModel::Baths {
            rates: self.rates.clone(),
            laws: self.laws.clone(),
        }
    }
}

/// Stiffness of the pinned chain: 3 on interior diagonal entries, 2 at the
/// ends, -1 between neighbours.
pub fn chain_stiffness(length: usize) -> DMatrix<f64> {
    DMatrix::from_fn(length, length, |i, j| {
        if i == j {
            if i == 0 || i + 1 == length {
                2.0
            } else {
                3.0
            }
        } else if i.abs_diff(j) == 1 {
            -1.0
        } else {
            0.0
        }
    })
}

/// Linear part of the Langevin drift in `(p, omega q)` coordinates.
pub fn langevin_matrix(nw: &NetworkSpec) -> DMatrix<f64> {
    let n = nw.size();
    let omega = nw.omega_matrix();
    let e = nw.injection();
    let gamma = &e * DMatrix::from_diagonal(&DVector::from_column_slice(&nw.gamma)) * e.transpose();
    let mut a = DMatrix::zeros(2 * n, 2 * n);
    a.view_mut((0, 0), (n, n)).copy_from(&(-gamma));
    a.view_mut((0, n), (n, n)).copy_from(&(-omega.transpose()));
    a.view_mut((n, 0), (n, n)).copy_from(&omega);
    a
}

/// A drift `A x - [0; grad U(q); 0]` where `q = W^{-1} x[block]`.
fn anharmonic_field(
    a: DMatrix<f64>,
    potential: Potential,
    p_off: usize,
    q_off: usize,
    w: DMatrix<f64>,
) -> Result<VectorField> {
    let n = w.nrows();
    let dim = a.nrows();
    let w_inv = w
        .clone()
        .try_inverse()
        .ok_or_else(|| Error::Numeric("coupling matrix is singular".into()))?;
    if potential == Potential::Zero {
        return Ok(VectorField::linear(a));
    }
    let (a1, a2, wi1, wi2) = (a.clone(), a, w_inv.clone(), w_inv);
    let field = VectorField::new(dim, move |x| {
        let q = &wi1 * x.rows(q_off, n);
        let mut y = &a1 * x;
        let mut top = y.rows_mut(p_off, n);
        top -= potential.gradient(&q);
        y
    })
    .with_jacobian(move |x| {
        let q = &wi2 * x.rows(q_off, n);
        let mut j = a2.clone();
        let block = potential.hessian(&q) * &wi2;
        let mut view = j.view_mut((p_off, q_off), (n, n));
        view -= block;
        j
    });
    Ok(field)
}

/// `d(p, omega q) = [[-gamma iota iota*, -omega*], [omega, 0]] (p, omega q) dt
/// - (grad U(q), 0) dt + sum_j (iota_j, 0) dN_j`.
pub fn build_langevin(nw: &NetworkSpec) -> Result<SystemSpec> {
    nw.validate()?;
    let n = nw.size();
    let a = langevin_matrix(nw);
    let field = anharmonic_field(a, nw.potential, 0, n, nw.omega_matrix())?;
    let mut b = DMatrix::zeros(2 * n, nw.driven.len());
    b.view_mut((0, 0), (n, nw.driven.len())).copy_from(&nw.injection());
    SystemSpec::new(field, b, nw.noise(), IntegratorConfig::default())
}

/// `omega~` with `omega~* omega~ = omega* omega - sum_j lambda_j^2 iota_j iota_j*`,
/// taken as the symmetric square root.
pub fn reduced_omega(nw: &NetworkSpec) -> Result<DMatrix<f64>> {
    if nw.lambda.is_empty() {
        return Err(Error::InvalidParameter(
            "the semi-Markov form needs bath couplings lambda".into(),
        ));
    }
    let omega = nw.omega_matrix();
    let e = nw.injection();
    let l2 = DMatrix::from_diagonal(&DVector::from_iterator(
        nw.lambda.len(),
        nw.lambda.iter().map(|l| l * l),
    ));
    let target = omega.transpose() * &omega - &e * l2 * e.transpose();
    spd_sqrt(&target).ok_or_else(|| {
        Error::InvalidParameter("lambda too large: omega* omega - lambda^2 iota iota* is not positive definite".into())
    })
}

/// Linear part of the semi-Markov drift in `(r, p, omega~ q)` coordinates.
pub fn semimarkov_matrix(nw: &NetworkSpec) -> Result<DMatrix<f64>> {
    let (n, m) = (nw.size(), nw.driven.len());
    let wt = reduced_omega(nw)?;
    let e = nw.injection();
    let lam = DMatrix::from_diagonal(&DVector::from_column_slice(&nw.lambda));
    let gam = DMatrix::from_diagonal(&DVector::from_column_slice(&nw.gamma));
    let mut a = DMatrix::zeros(m + 2 * n, m + 2 * n);
    a.view_mut((0, 0), (m, m)).copy_from(&(-gam));
    a.view_mut((0, m), (m, n)).copy_from(&(&lam * e.transpose()));
    a.view_mut((m, 0), (n, m)).copy_from(&(-(&e * &lam)));
    a.view_mut((m, m + n), (n, n)).copy_from(&(-wt.transpose()));
    a.view_mut((m + n, m), (n, n)).copy_from(&wt);
    Ok(a)
}

/// The Markovian bath-variable form: forcing acts on the `|J|` auxiliary
/// coordinates `r` only.
pub fn build_semimarkov(nw: &NetworkSpec) -> Result<SystemSpec> {
    nw.validate()?;
    let (n, m) = (nw.size(), nw.driven.len());
    let a = semimarkov_matrix(nw)?;
    let field = anharmonic_field(a, nw.potential, m, m + n, reduced_omega(nw)?)?;
    let b = DMatrix::identity(m + 2 * n, m);
    SystemSpec::new(field, b, nw.noise(), IntegratorConfig::default())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GrowthCheck {
    /// `1 / (4 |I|)`.
    pub bound_exponent: f64,
    /// Least-squares slope of `log |grad U|` against `log |q|`, when defined.
    pub fitted_exponent: Option<f64>,
    /// Largest `|grad U| / (1 + |q|^e)` on the first and last thirds of the ray.
    pub head_ratio: f64,
    pub tail_ratio: f64,
    /// Largest Hessian norm seen, a Lipschitz constant estimate.
    pub lipschitz_estimate: f64,
    pub passed: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecayCheck {
    /// `|q_n|^k |D^{k+1} U(q_n)|` at the last ray point, for each `k`.
    pub final_values: Vec<f64>,
    /// The same at the first ray point.
    pub initial_values: Vec<f64>,
    pub min_norm: f64,
    pub passed: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConditionReport {
    pub kalman: RankCertificate,
    /// Spot check along the ray only; not a proof of the global bound.
    pub growth: GrowthCheck,
    pub decay: DecayCheck,
    pub passed: bool,
}

/// Check the Kalman condition on `(omega* omega, sum iota_j iota_j*)` and
/// probe the growth and decay hypotheses on `U` along `ray`.
pub fn check_conditions(nw: &NetworkSpec, ray: &[DVector<f64>]) -> Result<ConditionReport> {
    nw.validate()?;
    if ray.is_empty() {
        return Err(Error::InvalidParameter("the probe ray must be nonempty".into()));
    }
    let n = nw.size();
    if ray.iter().any(|q| q.len() != n) {
        return Err(Error::Dimension(format!("ray points must have length {n}")));
    }
    let omega = nw.omega_matrix();
    let kalman = kalman_rank(&(omega.transpose() * &omega), &nw.injection())?;
    let u = nw.potential;

    let e = 1.0 / (4.0 * n as f64);
    let ratios: Vec<f64> = ray
        .iter()
        .map(|q| u.gradient(q).norm() / (1.0 + q.norm().powf(e)))
        .collect();
    let third = ray.len().div_ceil(3);
    let head_ratio = ratios[..third].iter().copied().fold(0.0, f64::max);
    let tail_ratio = ratios[ray.len() - third..].iter().copied().fold(0.0, f64::max);
    let lipschitz_estimate = ray.iter().map(|q| u.hessian(q).norm()).fold(0.0, f64::max);
    let pts: Vec<(f64, f64)> = ray
        .iter()
        .map(|q| (q.norm(), u.gradient(q).norm()))
        .filter(|(r, g)| *r > 0.0 && *g > 1e-12)
        .map(|(r, g)| (r.ln(), g.ln()))
        .collect();
    let fitted_exponent = (pts.len() >= 2).then(|| {
        let mx = pts.iter().map(|p| p.0).sum::<f64>() / pts.len() as f64;
        let my = pts.iter().map(|p| p.1).sum::<f64>() / pts.len() as f64;
        let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
        let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
        if sxx > 0.0 {
            sxy / sxx
        } else {
            0.0
        }
    });
    let growth = GrowthCheck {
        bound_exponent: e,
        fitted_exponent,
        head_ratio,
        tail_ratio,
        lipschitz_estimate,
        passed: lipschitz_estimate.is_finite() && (tail_ratio <= 1e-12 || (ray.len() >= 3 && tail_ratio < head_ratio)),
    };

    // The state dimension of the Langevin system.
    let d = 2 * n;
    let term = |q: &DVector<f64>, k: usize| q.norm().powi(k as i32) * u.derivative_norm(q, k + 1);
    let first = &ray[0];
    let last = &ray[ray.len() - 1];
    let initial_values: Vec<f64> = (0..d).map(|k| term(first, k)).collect();
    let final_values: Vec<f64> = (0..d).map(|k| term(last, k)).collect();
    let min_norm = ray.iter().map(|q| q.norm()).fold(f64::INFINITY, f64::min);
    let decayed = final_values
        .iter()
        .zip(&initial_values)
        .all(|(f, i)| *f <= 1e-10 || (*f < 1e-3 * i.max(1.0)));
    let decay = DecayCheck {
        final_values,
        initial_values,
        min_norm,
        passed: min_norm > 0.0 && decayed,
    };
    let passed = kalman.passed() && growth.passed && decay.passed;
    Ok(ConditionReport {
        kalman,
        growth,
        decay,
        passed,
    })
}

/// Points `scale * n * direction`, `n = 1..=count`.
pub fn ray(direction: &DVector<f64>, scale: f64, count: usize) -> Vec<DVector<f64>> {
    (1..=count).map(|n| direction * (scale * n as f64)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dynamics::flow;
    use crate::pdmp::simulate;
    use crate::rng::{stream, Purpose};

    fn single_mass() -> NetworkSpec {
        NetworkSpec {
            omega: vec![vec![1.0]],
            driven: vec![0],
            gamma: vec![1.0],
            lambda: Vec::new(),
            potential: Potential::Zero,
            rates: vec![1.0],
            laws: vec![JumpLaw::standard_gaussian(1)],
        }
    }

    #[test]
    fn single_mass_drift() {
        let a = langevin_matrix(&single_mass());
        assert_eq!(a, DMatrix::from_row_slice(2, 2, &[-1.0, -1.0, 1.0, 0.0]));
        let spec = build_langevin(&single_mass()).unwrap();
        assert_eq!(spec.b, DMatrix::from_row_slice(2, 1, &[1.0, 0.0]));
    }

    #[test]
    fn chain_reproduces_spring_forces() {
        let nw = NetworkSpec::chain(3, 0.5).unwrap();
        let omega = nw.omega_matrix();
        let k = omega.transpose() * &omega;
        let want = DMatrix::from_row_slice(3, 3, &[2.0, -1.0, 0.0, -1.0, 3.0, -1.0, 0.0, -1.0, 2.0]);
        assert!((k - want).norm() < 1e-12);
        // dp = -K q: check against the drift on a state with p = 0.
        let spec = build_langevin(&nw).unwrap();
        let q = DVector::from_row_slice(&[0.3, -1.0, 2.0]);
        let mut x = DVector::zeros(6);
        x.rows_mut(3, 3).copy_from(&(&omega * &q));
        let dp = spec.field.eval(&x).rows(0, 3).into_owned();
        let expect = DVector::from_row_slice(&[-(2.0 * 0.3 + 1.0), -(-3.0 - 0.3 - 2.0), -(2.0 * 2.0 + 1.0)]);
        assert!((dp - expect).norm() < 1e-12);
        assert!(NetworkSpec::chain(1, 1.0).is_err());
    }

    #[test]
    fn drift_spectrum_is_stable() {
        for l in 2..=6 {
            let nw = NetworkSpec::chain(l, 0.7).unwrap();
            let eig = langevin_matrix(&nw).complex_eigenvalues();
            assert!(check_conditions(&nw, &[DVector::from_element(l, 1.0)])
                .unwrap()
                .kalman
                .passed());
            assert!(eig.iter().all(|z| z.re < -1e-9), "L={l}: {eig}");
        }
        // A mass that no bath reaches keeps an undamped mode.
        let nw = NetworkSpec {
            omega: vec![vec![1.0, 0.0], vec![0.0, 2.0]],
            driven: vec![0],
            gamma: vec![1.0],
            ..single_mass()
        };
        let eig = langevin_matrix(&nw).complex_eigenvalues();
        assert!(eig.iter().all(|z| z.re <= 1e-12));
        assert!(eig.iter().any(|z| z.re.abs() < 1e-12));
        assert!(!check_conditions(&nw, &[DVector::from_element(2, 1.0)])
            .unwrap()
            .kalman
            .passed());
    }

    #[test]
    fn undamped_flow_conserves_energy() {
        let nw = NetworkSpec::chain(4, 1.0).unwrap();
        let mut a = langevin_matrix(&nw);
        a.view_mut((0, 0), (4, 4)).fill(0.0);
        let f = VectorField::linear(a);
        let x0 = DVector::from_fn(8, |i, _| (i as f64 * 0.7).sin());
        let cfg = IntegratorConfig::adaptive(1e-11, 1e-13);
        let x1 = flow(&f, &x0, 7.3, &cfg).unwrap();
        assert!((x1.norm_squared() - x0.norm_squared()).abs() < 1e-8);
    }

    #[test]
    fn semimarkov_reduced_coupling() {
        let nw = NetworkSpec::chain(2, 1.0).unwrap().with_lambda(0.1);
        let wt = reduced_omega(&nw).unwrap();
        let omega = nw.omega_matrix();
        let e = nw.injection();
        let lhs = wt.transpose() * &wt + &e * e.transpose() * 0.01;
        assert!((lhs - omega.transpose() * &omega).norm() < 1e-10);
        let spec = build_semimarkov(&nw).unwrap();
        assert_eq!((spec.dim(), spec.noise_dim()), (6, 2));
        let a = semimarkov_matrix(&nw).unwrap();
        assert!(kalman_rank(&a, &spec.b).unwrap().passed());
        assert!(NetworkSpec::chain(2, 1.0).unwrap().with_lambda(5.0).validate().is_ok());
        assert!(reduced_omega(&NetworkSpec::chain(2, 1.0).unwrap().with_lambda(5.0)).is_err());
    }

    #[test]
    fn semimarkov_decouples_as_lambda_vanishes() {
        for lam in [1e-2, 1e-4] {
            let nw = NetworkSpec::chain(3, 1.0).unwrap().with_lambda(lam);
            let a = semimarkov_matrix(&nw).unwrap();
            let coupling = a.view((0, 2), (2, 6)).norm() + a.view((2, 0), (6, 2)).norm();
            assert!(coupling <= 4.0 * lam);
        }
    }

    #[test]
    fn potential_partials_match_differences() {
        let q = DVector::from_row_slice(&[0.3, -0.5]);
        for u in [
            Potential::CosineSum { amplitude: 0.7 },
            Potential::Bump {
                amplitude: 2.0,
                radius: 1.5,
            },
        ] {
            let g = u.gradient(&q);
            let h = u.hessian(&q);
            let eps = 1e-6;
            for i in 0..2 {
                let mut d = DVector::zeros(2);
                d[i] = eps;
                let fd = (u.value(&(&q + &d)) - u.value(&(&q - &d))) / (2.0 * eps);
                assert!((fd - g[i]).abs() < 1e-7);
                let fdh = (u.gradient(&(&q + &d)) - u.gradient(&(&q - &d))) / (2.0 * eps);
                assert!((fdh - h.column(i)).norm() < 1e-6);
            }
            // Frobenius norm of D^2 U is the Hessian's.
            assert!((u.derivative_norm(&q, 2) - h.norm()).abs() < 1e-12);
        }
    }

    #[test]
    fn hypothesis_examples() {
        let nw = NetworkSpec::chain(2, 1.0).unwrap();
        let dir = DVector::from_element(2, 1.0);
        let r = check_conditions(&nw, &ray(&dir, std::f64::consts::TAU, 20)).unwrap();
        assert!(r.passed, "{r:?}");

        let cos = nw.clone().with_potential(Potential::CosineSum { amplitude: 1.0 });
        let r = check_conditions(&cos, &ray(&dir, std::f64::consts::TAU, 20)).unwrap();
        assert!(r.growth.passed);
        assert!(!r.decay.passed);
        assert!(!r.passed);

        let bump = nw.with_potential(Potential::Bump {
            amplitude: 1.0,
            radius: 2.0,
        });
        let r = check_conditions(&bump, &ray(&dir, 0.5, 20)).unwrap();
        assert!(r.decay.passed && r.growth.passed && r.passed, "{r:?}");
    }

    /// Second moments of the linear network solve
    /// `M' = A M + M A* + B diag(rate_j E eta_j^2) B*`.
    #[test]
    fn second_moments_match_lyapunov_flow() {
        let nw = NetworkSpec::chain(2, 0.8).unwrap();
        let spec = build_langevin(&nw).unwrap();
        let a = langevin_matrix(&nw);
        let q = &spec.b * spec.b.transpose();
        let x0 = DVector::from_row_slice(&[1.0, 0.0, 0.0, -0.5]);
        let t = 2.5;
        let d = 4;
        let m0 = &x0 * x0.transpose();
        let rhs = |_: f64, m: &DVector<f64>| {
            let m = DMatrix::from_column_slice(d, d, m.as_slice());
            let dm = &a * &m + &m * a.transpose() + &q;
            DVector::from_column_slice(dm.as_slice())
        };
        let mt = crate::dynamics::integrate(
            rhs,
            &DVector::from_column_slice(m0.as_slice()),
            0.0,
            t,
            &IntegratorConfig::default(),
        )
        .unwrap();
        let mt = DMatrix::from_column_slice(d, d, mt.as_slice());

        let reps = 4000;
        let samples: Vec<DVector<f64>> = (0..reps)
            .map(|r| {
                let mut rng = stream(17, Purpose::Path, r);
                simulate(&spec, &x0, t, &mut rng).unwrap().state_at(t).unwrap()
            })
            .collect();
        for i in 0..d {
            let vals: Vec<f64> = samples.iter().map(|x| x[i] * x[i]).collect();
            let mean = vals.iter().sum::<f64>() / reps as f64;
            let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (reps - 1) as f64;
            let se = (var / reps as f64).sqrt();
            assert!(
                (mean - mt[(i, i)]).abs() < 3.0 * se + 1e-9,
                "coord {i}: {mean} vs {} (se {se})",
                mt[(i, i)]
            );
        }
    }
}

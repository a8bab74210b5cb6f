//! Compound Poisson drivers: jump laws with evaluable densities, path
//! sampling and waiting-time moments.

use std::f64::consts::PI;

use nalgebra::DVector;
use rand::{Rng, RngCore};
use rand_distr::{Distribution, Exp, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A probability law on `R^n` with a density and a sampler.
pub trait Density: Send + Sync {
    fn dim(&self) -> usize;

    fn log_density(&self, x: &DVector<f64>) -> f64;

    fn density(&self, x: &DVector<f64>) -> f64 {
        self.log_density(x).exp()
    }

    fn sample(&self, rng: &mut dyn RngCore) -> DVector<f64>;
}

/// Built-in jump laws. All have continuous, strictly positive densities on
/// the whole of `R^n` and finite second moment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum JumpLaw {
    /// `N(0, sigma^2 I_n)`.
    Gaussian { dim: usize, sigma: f64 },
    /// Independent Laplace coordinates with the given scale.
    Laplace { dim: usize, scale: f64 },
    /// `weight * N(mean_a, sigma^2 I) + (1 - weight) * N(mean_b, sigma^2 I)`.
    GaussianMixture {
        weight: f64,
        mean_a: Vec<f64>,
        mean_b: Vec<f64>,
        sigma: f64,
    },
}

impl JumpLaw {
    pub fn standard_gaussian(dim: usize) -> Self {
        JumpLaw::Gaussian { dim, sigma: 1.0 }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidParameter(m.to_string()));
        match self {
            JumpLaw::Gaussian { dim, sigma } => {
                if *dim == 0 || !(*sigma > 0.0 && sigma.is_finite()) {
                    return bad("gaussian law needs dim > 0 and sigma > 0");
                }
            }
            JumpLaw::Laplace { dim, scale } => {
                if *dim == 0 || !(*scale > 0.0 && scale.is_finite()) {
                    return bad("laplace law needs dim > 0 and scale > 0");
                }
            }
            JumpLaw::GaussianMixture {
                weight,
                mean_a,
                mean_b,
                sigma,
            } => {
                if !(0.0..=1.0).contains(weight) || !(*sigma > 0.0 && sigma.is_finite()) {
                    return bad("mixture needs weight in [0, 1] and sigma > 0");
                }
                if mean_a.is_empty() || mean_a.len() != mean_b.len() {
                    return bad("mixture means must be nonempty and of equal length");
                }
            }
        }
        Ok(())
    }

    /// `Lambda = E |eta|^2`.
    pub fn second_moment(&self) -> f64 {
        match self {
            JumpLaw::Gaussian { dim, sigma } => *dim as f64 * sigma * sigma,
            JumpLaw::Laplace { dim, scale } => *dim as f64 * 2.0 * scale * scale,
            JumpLaw::GaussianMixture {
                weight,
                mean_a,
                mean_b,
                sigma,
            } => {
                let na: f64 = mean_a.iter().map(|v| v * v).sum();
                let nb: f64 = mean_b.iter().map(|v| v * v).sum();
                weight * na + (1.0 - weight) * nb + mean_a.len() as f64 * sigma * sigma
            }
        }
    }

    pub fn mean(&self) -> DVector<f64> {
        match self {
            JumpLaw::Gaussian { dim, .. } | JumpLaw::Laplace { dim, .. } => DVector::zeros(*dim),
            JumpLaw::GaussianMixture {
                weight, mean_a, mean_b, ..
            } => DVector::from_iterator(
                mean_a.len(),
                mean_a.iter().zip(mean_b).map(|(a, b)| weight * a + (1.0 - weight) * b),
            ),
        }
    }
}

fn gaussian_log(x: &DVector<f64>, mean: Option<&[f64]>, sigma: f64) -> f64 {
    let n = x.len() as f64;
    let sq: f64 = match mean {
        Some(m) => x.iter().zip(m).map(|(a, b)| (a - b) * (a - b)).sum(),
        None => x.norm_squared(),
    };
    -0.5 * sq / (sigma * sigma) - n * (sigma.ln() + 0.5 * (2.0 * PI).ln())
}

fn standard_normal_vec(n: usize, rng: &mut dyn RngCore) -> DVector<f64> {
    DVector::from_iterator(n, (0..n).map(|_| StandardNormal.sample(rng)))
}

impl Density for JumpLaw {
    fn dim(&self) -> usize {
        match self {
            JumpLaw::Gaussian { dim, .. } | JumpLaw::Laplace { dim, .. } => *dim,
            JumpLaw::GaussianMixture { mean_a, .. } => mean_a.len(),
        }
    }

    fn log_density(&self, x: &DVector<f64>) -> f64 {
        match self {
            JumpLaw::Gaussian { sigma, .. } => gaussian_log(x, None, *sigma),
            JumpLaw::Laplace { scale, .. } => {
                let l1: f64 = x.iter().map(|v| v.abs()).sum();
                -l1 / scale - x.len() as f64 * (2.0 * scale).ln()
            }
            JumpLaw::GaussianMixture {
                weight,
                mean_a,
                mean_b,
                sigma,
            } => {
                let la = weight.ln() + gaussian_log(x, Some(mean_a), *sigma);
                let lb = (1.0 - weight).ln() + gaussian_log(x, Some(mean_b), *sigma);
                let hi = la.max(lb);
                if hi == f64::NEG_INFINITY {
                    return hi;
                }
                hi + ((la - hi).exp() + (lb - hi).exp()).ln()
            }
        }
    }

    fn sample(&self, rng: &mut dyn RngCore) -> DVector<f64> {
        match self {
            JumpLaw::Gaussian { dim, sigma } => standard_normal_vec(*dim, rng) * *sigma,
            JumpLaw::Laplace { dim, scale } => {
                let exp = Exp::new(1.0).expect("unit rate");
                DVector::from_iterator(
                    *dim,
                    (0..*dim).map(|_| {
                        let e: f64 = exp.sample(rng);
                        if rng.random::<bool>() {
                            e * scale
                        } else {
                            -e * scale
                        }
                    }),
                )
            }
            JumpLaw::GaussianMixture {
                weight,
                mean_a,
                mean_b,
                sigma,
            } => {
                let pick_a = rng.random::<f64>() < *weight;
                let m = if pick_a { mean_a } else { mean_b };
                standard_normal_vec(m.len(), rng) * *sigma + DVector::from_column_slice(m)
            }
        }
    }
}

/// Uniform law on an axis-aligned box. Not a valid jump law (its density
/// vanishes off the box) but handy as a coupling test case.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UniformBox {
    pub lo: Vec<f64>,
    pub hi: Vec<f64>,
}

impl UniformBox {
    pub fn new(lo: Vec<f64>, hi: Vec<f64>) -> Self {
        assert_eq!(lo.len(), hi.len());
        assert!(lo.iter().zip(&hi).all(|(a, b)| b > a), "empty box");
        Self { lo, hi }
    }

    pub fn interval(lo: f64, hi: f64) -> Self {
        Self::new(vec![lo], vec![hi])
    }
}

impl Density for UniformBox {
    fn dim(&self) -> usize {
        self.lo.len()
    }

    fn log_density(&self, x: &DVector<f64>) -> f64 {
        let inside = x
            .iter()
            .zip(self.lo.iter().zip(&self.hi))
            .all(|(v, (a, b))| v >= a && v <= b);
        if inside {
            -self.lo.iter().zip(&self.hi).map(|(a, b)| (b - a).ln()).sum::<f64>()
        } else {
            f64::NEG_INFINITY
        }
    }

    fn sample(&self, rng: &mut dyn RngCore) -> DVector<f64> {
        DVector::from_iterator(
            self.lo.len(),
            self.lo
                .iter()
                .zip(&self.hi)
                .map(|(a, b)| a + (b - a) * rng.random::<f64>()),
        )
    }
}

/// `Y_t = sum_k eta_k 1[tau_k <= t]` on `[0, horizon]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompoundPoissonPath {
    /// Total jump rate.
    pub rate: f64,
    pub jump_times: Vec<f64>,
    pub jumps: Vec<DVector<f64>>,
    pub horizon: f64,
}

impl CompoundPoissonPath {
    /// `N_t = max{k : tau_k <= t}`.
    pub fn count_at(&self, t: f64) -> usize {
        self.jump_times.partition_point(|&s| s <= t)
    }

    /// Waiting times `t_k = tau_k - tau_{k-1}`, `tau_0 = 0`.
    pub fn waiting_times(&self) -> Vec<f64> {
        let mut prev = 0.0;
        self.jump_times
            .iter()
            .map(|&t| {
                let w = t - prev;
                prev = t;
                w
            })
            .collect()
    }

    /// `Y_t`.
    pub fn value_at(&self, t: f64, dim: usize) -> DVector<f64> {
        let k = self.count_at(t);
        self.jumps[..k].iter().fold(DVector::zeros(dim), |acc, j| acc + j)
    }
}

/// Sample a compound Poisson path with rate `rate` and jump law `law` on `[0, horizon]`.
pub fn sample_path(rate: f64, law: &dyn Density, horizon: f64, rng: &mut dyn RngCore) -> Result<CompoundPoissonPath> {
    NoiseModel::check_rate(rate)?;
    if !(horizon > 0.0) {
        return Err(Error::InvalidParameter(format!(
            "horizon must be positive, got {horizon}"
        )));
    }
    let exp = Exp::new(rate).map_err(|e| Error::InvalidParameter(e.to_string()))?;
    let mut t = 0.0;
    let mut jump_times = Vec::new();
    let mut jumps = Vec::new();
    loop {
        t += exp.sample(rng);
        if t > horizon {
            break;
        }
        jump_times.push(t);
        jumps.push(law.sample(rng));
    }
    Ok(CompoundPoissonPath {
        rate,
        jump_times,
        jumps,
        horizon,
    })
}

/// `E exp(c tau_k) = (lambda / (lambda - c))^k` for `c < lambda`.
pub fn waiting_exp_moment(rate: f64, c: f64, k: u32) -> Result<f64> {
    NoiseModel::check_rate(rate)?;
    if c >= rate {
        return Err(Error::Domain(format!(
            "exponential moment E exp({c} tau_k) is infinite for rate {rate}"
        )));
    }
    Ok((rate / (rate - c)).powi(k as i32))
}

/// `ell^m(xi) = prod_j ell(xi_j)`.
pub fn density_product(law: &dyn Density, xi: &[DVector<f64>]) -> f64 {
    log_density_product(law, xi).exp()
}

pub fn log_density_product(law: &dyn Density, xi: &[DVector<f64>]) -> f64 {
    xi.iter().map(|x| law.log_density(x)).sum()
}

/// The random driver of a system: one compound Poisson process, or several
/// independent one-dimensional baths acting on separate coordinates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum NoiseModel {
    Single {
        rate: f64,
        law: JumpLaw,
    },
    /// Bath `j` jumps at rate `rates[j]` with the one-dimensional law
    /// `laws[j]` along coordinate `j`.
    Baths {
        rates: Vec<f64>,
        laws: Vec<JumpLaw>,
    },
}

impl NoiseModel {
    fn check_rate(rate: f64) -> Result<()> {
        if !(rate > 0.0 && rate.is_finite()) {
            return Err(Error::InvalidParameter(format!(
                "jump rate must be positive, got {rate}"
            )));
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            NoiseModel::Single { rate, law } => {
                Self::check_rate(*rate)?;
                law.validate()
            }
            NoiseModel::Baths { rates, laws } => {
                if rates.is_empty() || rates.len() != laws.len() {
                    return Err(Error::InvalidParameter(
                        "baths need equal, nonzero numbers of rates and laws".into(),
                    ));
                }
                for (r, l) in rates.iter().zip(laws) {
                    Self::check_rate(*r)?;
                    l.validate()?;
                    if l.dim() != 1 {
                        return Err(Error::Dimension("each bath law must be one-dimensional".into()));
                    }
                }
                Ok(())
            }
        }
    }

    /// Dimension `n` of the jump vectors.
    pub fn dim(&self) -> usize {
        match self {
            NoiseModel::Single { law, .. } => law.dim(),
            NoiseModel::Baths { rates, .. } => rates.len(),
        }
    }

    pub fn total_rate(&self) -> f64 {
        match self {
            NoiseModel::Single { rate, .. } => *rate,
            NoiseModel::Baths { rates, .. } => rates.iter().sum(),
        }
    }

    /// `E |eta|^2` of a single event of the merged stream.
    pub fn jump_second_moment(&self) -> f64 {
        match self {
            NoiseModel::Single { law, .. } => law.second_moment(),
            NoiseModel::Baths { rates, laws } => {
                let total: f64 = rates.iter().sum();
                rates.iter().zip(laws).map(|(r, l)| r / total * l.second_moment()).sum()
            }
        }
    }

    /// The law of a single jump when it has a density on `R^n`.
    pub fn jump_law(&self) -> Option<&JumpLaw> {
        match self {
            NoiseModel::Single { law, .. } => Some(law),
            NoiseModel::Baths { .. } => None,
        }
    }

    pub fn events(&self) -> EventStream<'_> {
        EventStream {
            model: self,
            clock: 0.0,
            pending: None,
        }
    }

    pub fn sample_path(&self, horizon: f64, rng: &mut dyn RngCore) -> Result<CompoundPoissonPath> {
        self.validate()?;
        if !(horizon > 0.0) {
            return Err(Error::InvalidParameter(format!(
                "horizon must be positive, got {horizon}"
            )));
        }
        let mut jump_times = Vec::new();
        let mut jumps = Vec::new();
        let mut ev = self.events();
        let mut t = 0.0;
        loop {
            let (w, eta) = ev.next_event(rng);
            t += w;
            if t > horizon {
                break;
            }
            jump_times.push(t);
            jumps.push(eta);
        }
        Ok(CompoundPoissonPath {
            rate: self.total_rate(),
            jump_times,
            jumps,
            horizon,
        })
    }
}

/// An unbounded sequence of `(waiting time, jump)` events.
///
/// For independent baths each bath keeps its own next arrival time and the
/// queue is merged, so every bath has exactly its own Poisson clock.
pub struct EventStream<'a> {
    model: &'a NoiseModel,
    clock: f64,
    pending: Option<Vec<f64>>,
}

impl EventStream<'_> {
    pub fn next_event(&mut self, rng: &mut dyn RngCore) -> (f64, DVector<f64>) {
        match self.model {
            NoiseModel::Single { rate, law } => {
                let w: f64 = Exp::new(*rate).expect("validated rate").sample(rng);
                (w, law.sample(rng))
            }
            NoiseModel::Baths { rates, laws } => {
                let clock = self.clock;
                let next = self.pending.get_or_insert_with(|| {
                    rates
                        .iter()
                        .map(|r| clock + Exp::new(*r).expect("validated rate").sample(rng))
                        .collect()
                });
                let (j, &t) = next
                    .iter()
                    .enumerate()
                    .min_by(|a, b| a.1.total_cmp(b.1))
                    .expect("at least one bath");
                next[j] = t + Exp::new(rates[j]).expect("validated rate").sample(rng);
                let w = t - self.clock;
                self.clock = t;
                let mut eta = DVector::zeros(rates.len());
                eta[j] = laws[j].sample(rng)[0];
                (w, eta)
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{stream, Purpose};
    use proptest::prelude::*;

    fn laws() -> Vec<JumpLaw> {
        vec![
            JumpLaw::standard_gaussian(1),
            JumpLaw::Gaussian { dim: 2, sigma: 0.7 },
            JumpLaw::Laplace { dim: 1, scale: 0.5 },
            JumpLaw::Laplace { dim: 2, scale: 1.3 },
            JumpLaw::GaussianMixture {
                weight: 0.3,
                mean_a: vec![-1.5],
                mean_b: vec![2.0],
                sigma: 0.6,
            },
            JumpLaw::GaussianMixture {
                weight: 0.5,
                mean_a: vec![1.0, 0.0],
                mean_b: vec![-1.0, 0.5],
                sigma: 0.8,
            },
        ]
    }

    /// Midpoint rule over `[-L, L]^n`.
    fn grid_mass(law: &JumpLaw, half: f64, cells: usize) -> f64 {
        let n = law.dim();
        let h = 2.0 * half / cells as f64;
        let total = cells.pow(n as u32);
        let mut mass = 0.0;
        for idx in 0..total {
            let mut rem = idx;
            let x = DVector::from_iterator(
                n,
                (0..n).map(|_| {
                    let i = rem % cells;
                    rem /= cells;
                    -half + (i as f64 + 0.5) * h
                }),
            );
            mass += law.density(&x);
        }
        mass * h.powi(n as i32)
    }

    #[test]
    fn densities_integrate_to_one() {
        for law in laws() {
            let cells = if law.dim() == 1 { 20_000 } else { 800 };
            let m = grid_mass(&law, 20.0, cells);
            assert!((0.999..=1.001).contains(&m), "{law:?}: mass {m}");
        }
    }

    #[test]
    fn densities_strictly_positive_on_probe_box() {
        for law in laws() {
            let n = law.dim();
            for i in -30..=30 {
                let x = DVector::from_element(n, i as f64);
                assert!(law.density(&x) > 0.0 || law.log_density(&x) > f64::NEG_INFINITY);
                assert!(law.log_density(&x).is_finite(), "{law:?} at {i}");
            }
        }
    }

    #[test]
    fn sampler_matches_second_moment_and_mean() {
        let mut rng = stream(11, Purpose::Other, 0);
        for law in laws() {
            let n = 200_000;
            let mut m2 = 0.0;
            let mut m1 = DVector::zeros(law.dim());
            let mut m4 = 0.0;
            for _ in 0..n {
                let x = law.sample(&mut rng);
                let s = x.norm_squared();
                m2 += s;
                m4 += s * s;
                m1 += x;
            }
            let mean2 = m2 / n as f64;
            let se = ((m4 / n as f64 - mean2 * mean2) / n as f64).sqrt();
            assert!((mean2 - law.second_moment()).abs() < 4.0 * se, "{law:?}: {mean2}");
            let mean = m1 / n as f64;
            assert!((mean - law.mean()).norm() < 0.02, "{law:?}");
        }
    }

    #[test]
    fn sampler_matches_density_by_histogram() {
        // Chi-square style check on a 1D histogram for the non-Gaussian laws.
        let mut rng = stream(12, Purpose::Other, 0);
        for law in laws().into_iter().filter(|l| l.dim() == 1) {
            let n = 200_000;
            let (lo, hi, bins) = (-4.0, 4.0, 40);
            let w = (hi - lo) / bins as f64;
            let mut counts = vec![0usize; bins];
            for _ in 0..n {
                let x = law.sample(&mut rng)[0];
                if x >= lo && x < hi {
                    counts[((x - lo) / w) as usize] += 1;
                }
            }
            for (i, &c) in counts.iter().enumerate() {
                let mid = lo + (i as f64 + 0.5) * w;
                // Simpson on the bin for the expected probability.
                let f = |t: f64| law.density(&DVector::from_element(1, t));
                let p = w / 6.0 * (f(mid - w / 2.0) + 4.0 * f(mid) + f(mid + w / 2.0));
                let expect = p * n as f64;
                let sd = (expect * (1.0 - p)).sqrt().max(1.0);
                assert!((c as f64 - expect).abs() < 5.0 * sd, "{law:?} bin {i}: {c} vs {expect}");
            }
        }
    }

    #[test]
    fn poisson_count_and_waiting_times() {
        let law = JumpLaw::standard_gaussian(1);
        let mut rng = stream(1, Purpose::Path, 0);
        let reps = 4000;
        let mut total = 0usize;
        for _ in 0..reps {
            let p = sample_path(2.0, &law, 10.0, &mut rng).unwrap();
            assert!(p.waiting_times().iter().all(|&w| w > 0.0));
            assert!(p.jump_times.iter().all(|&t| t <= 10.0));
            assert_eq!(p.jump_times.len(), p.jumps.len());
            total += p.jump_times.len();
        }
        let mean = total as f64 / reps as f64;
        // Poisson(20): stderr sqrt(20 / reps).
        assert!((mean - 20.0).abs() < 4.0 * (20.0 / reps as f64).sqrt(), "{mean}");
    }

    #[test]
    fn gaussian_jump_second_moment_three_dims() {
        let law = JumpLaw::standard_gaussian(3);
        let mut rng = stream(2, Purpose::Path, 0);
        let p = sample_path(5.0, &law, 20_000.0, &mut rng).unwrap();
        let m: f64 = p.jumps.iter().map(|j| j.norm_squared()).sum::<f64>() / p.jumps.len() as f64;
        assert!((m - 3.0).abs() < 0.05, "{m}");
    }

    #[test]
    fn waiting_moment_closed_form() {
        assert_eq!(waiting_exp_moment(1.0, 0.0, 7).unwrap(), 1.0);
        assert_eq!(waiting_exp_moment(2.0, 1.0, 3).unwrap(), 8.0);
        assert!(matches!(waiting_exp_moment(2.0, 2.0, 1), Err(Error::Domain(_))));
    }

    #[test]
    fn density_product_examples() {
        let law = JumpLaw::standard_gaussian(1);
        assert_eq!(density_product(&law, &[]), 1.0);
        let z = DVector::zeros(1);
        let v = density_product(&law, &[z.clone(), z]);
        assert!((v - 1.0 / (2.0 * PI)).abs() < 1e-15);
    }

    #[test]
    fn baths_put_each_jump_on_one_coordinate() {
        let model = NoiseModel::Baths {
            rates: vec![1.0, 3.0],
            laws: vec![JumpLaw::standard_gaussian(1), JumpLaw::standard_gaussian(1)],
        };
        model.validate().unwrap();
        let mut rng = stream(3, Purpose::Path, 0);
        let p = model.sample_path(5000.0, &mut rng).unwrap();
        let mut hits = [0usize; 2];
        for j in &p.jumps {
            let nz: Vec<usize> = (0..2).filter(|&i| j[i] != 0.0).collect();
            assert_eq!(nz.len(), 1);
            hits[nz[0]] += 1;
        }
        // Rates 1 and 3 over 5000 time units.
        assert!((hits[0] as f64 - 5000.0).abs() < 4.0 * 5000f64.sqrt());
        assert!((hits[1] as f64 - 15000.0).abs() < 4.0 * 15000f64.sqrt());
    }

    proptest! {
        #[test]
        fn log_density_sum_matches_product(xs in proptest::collection::vec(-3.0f64..3.0, 0..6)) {
            for law in laws().into_iter().filter(|l| l.dim() == 1) {
                let xi: Vec<DVector<f64>> = xs.iter().map(|&x| DVector::from_element(1, x)).collect();
                let direct: f64 = xi.iter().map(|x| law.density(x)).product();
                let via_log = density_product(&law, &xi);
                prop_assert!((direct - via_log).abs() <= 1e-12 * direct.max(1e-300));
            }
        }

        #[test]
        fn moment_formula_is_multiplicative(rate in 0.1f64..5.0, frac in -2.0f64..0.99, k in 0u32..8) {
            let c = rate * frac;
            let a = waiting_exp_moment(rate, c, k).unwrap();
            let b = waiting_exp_moment(rate, c, 1).unwrap().powi(k as i32);
            prop_assert!((a - b).abs() <= 1e-12 * b);
        }
    }
}

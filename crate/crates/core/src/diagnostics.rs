//! Estimators that turn simulations into statements about mixing:
//! histogram total variation, exponential fits of decay curves, coupling
//! tails, and long-run summaries of the invariant law.

use std::collections::BTreeMap;

use nalgebra::DVector;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::coupling::{run_coupling_batch, CouplingPolicy, CouplingRecord};
use crate::dynamics::flow;
use crate::pdmp::SystemSpec;
use crate::rng::{stream, Purpose};
use crate::{Error, Result};

const BOOTSTRAP_RESAMPLES: usize = 100;
const MAX_BINS_PER_AXIS: usize = 400;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TvEstimate {
    pub estimate: f64,
    pub stderr: f64,
    /// Bins per coordinate.
    pub bins: Vec<usize>,
}

/// Shared rectangular grid over the pooled sample range.
#[derive(Debug, Clone)]
struct Grid {
    lo: Vec<f64>,
    width: Vec<f64>,
    bins: Vec<usize>,
}

impl Grid {
    fn cell(&self, x: &DVector<f64>) -> u64 {
        let mut idx = 0u64;
        for (i, &n) in self.bins.iter().enumerate() {
            let j = if self.width[i] > 0.0 {
                (((x[i] - self.lo[i]) / self.width[i]).floor().max(0.0) as usize).min(n - 1)
            } else {
                0
            };
            idx = idx * n as u64 + j as u64;
        }
        idx
    }
}

fn quantile_sorted(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (pos - lo as f64) * (sorted[hi] - sorted[lo])
}

/// Freedman–Diaconis width `2 IQR n^{-1/(d+2)}`, which is the usual
/// `n^{-1/3}` rule in one dimension.
fn fd_bins(sorted: &[f64], dim: usize) -> usize {
    let range = sorted[sorted.len() - 1] - sorted[0];
    if range <= 0.0 {
        return 1;
    }
    let iqr = quantile_sorted(sorted, 0.75) - quantile_sorted(sorted, 0.25);
    let h = 2.0 * iqr * (sorted.len() as f64).powf(-1.0 / (dim as f64 + 2.0));
    if !(h > 0.0) {
        return MAX_BINS_PER_AXIS;
    }
    ((range / h).ceil() as usize).clamp(1, MAX_BINS_PER_AXIS)
}

fn build_grid(a: &[DVector<f64>], b: &[DVector<f64>], bins: Option<usize>) -> Grid {
    let dim = a[0].len();
    let mut lo = Vec::with_capacity(dim);
    let mut width = Vec::with_capacity(dim);
    let mut counts = Vec::with_capacity(dim);
    for i in 0..dim {
        let mut col: Vec<f64> = a.iter().chain(b).map(|x| x[i]).collect();
        col.sort_by(f64::total_cmp);
        let n = bins.unwrap_or_else(|| fd_bins(&col, dim)).max(1);
        let (min, max) = (col[0], col[col.len() - 1]);
        lo.push(min);
        width.push((max - min) / n as f64);
        counts.push(n);
    }
    Grid {
        lo,
        width,
        bins: counts,
    }
}

fn tv_from_cells(a: &[u64], b: &[u64]) -> f64 {
    let mut counts: BTreeMap<u64, (usize, usize)> = BTreeMap::new();
    for &c in a {
        counts.entry(c).or_default().0 += 1;
    }
    for &c in b {
        counts.entry(c).or_default().1 += 1;
    }
    let (na, nb) = (a.len() as f64, b.len() as f64);
    0.5 * counts
        .values()
        .map(|&(ka, kb)| (ka as f64 / na - kb as f64 / nb).abs())
        .sum::<f64>()
}

/// `1/2 sum_cells |p_a - p_b|` on a shared grid, with a bootstrap standard
/// error. `bins` fixes the count per coordinate; `None` picks it by the
/// Freedman–Diaconis rule. Biased downward for continuous laws.
pub fn histogram_tv(a: &[DVector<f64>], b: &[DVector<f64>], bins: Option<usize>, seed: u64) -> Result<TvEstimate> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::InvalidParameter("both sample sets must be nonempty".into()));
    }
    let dim = a[0].len();
    if dim == 0 || dim > 3 {
        return Err(Error::InvalidParameter(format!(
            "histogram TV supports dimension 1..=3, got {dim}"
        )));
    }
    if a.iter().chain(b).any(|x| x.len() != dim) {
        return Err(Error::Dimension("samples have mixed lengths".into()));
    }
    if bins == Some(0) {
        return Err(Error::InvalidParameter("bin count must be positive".into()));
    }
    let grid = build_grid(a, b, bins);
    let ca: Vec<u64> = a.iter().map(|x| grid.cell(x)).collect();
    let cb: Vec<u64> = b.iter().map(|x| grid.cell(x)).collect();
    let estimate = tv_from_cells(&ca, &cb);
    let boot: Vec<f64> = (0..BOOTSTRAP_RESAMPLES)
        .into_par_iter()
        .map(|r| {
            let mut rng = stream(seed, Purpose::Bootstrap, r as u64);
            let ra: Vec<u64> = (0..ca.len()).map(|_| ca[rng.random_range(0..ca.len())]).collect();
            let rb: Vec<u64> = (0..cb.len()).map(|_| cb[rng.random_range(0..cb.len())]).collect();
            tv_from_cells(&ra, &rb)
        })
        .collect();
    let (_, sd) = mean_sd(&boot);
    Ok(TvEstimate {
        estimate,
        stderr: sd,
        bins: grid.bins,
    })
}

fn mean_sd(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub t: f64,
    pub value: f64,
    pub stderr: f64,
}

/// Fit of `value(t) ~ C e^{-c t}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MixingReport {
    pub curve: Vec<CurvePoint>,
    pub rate: f64,
    pub rate_stderr: f64,
    pub prefactor: f64,
    pub r_squared: f64,
    pub censored_fraction: f64,
    pub points_used: usize,
    /// `rate` is positive and more than two standard errors from zero.
    pub mixing: bool,
}

/// Weighted least squares of `ln value` against `t` over the points with
/// a positive finite value. Weights are `value^2 / stderr^2`, the inverse
/// delta-method variance of `ln value`; they fall back to uniform when
/// some usable point has zero or missing stderr.
pub fn mixing_fit(curve: &[CurvePoint]) -> Result<MixingReport> {
    let usable: Vec<&CurvePoint> = curve
        .iter()
        .filter(|p| p.t.is_finite() && p.value.is_finite() && p.value > 0.0)
        .collect();
    if usable.len() < 4 {
        return Err(Error::Domain(format!(
            "need at least 4 usable points for a rate fit, got {}",
            usable.len()
        )));
    }
    let uniform = usable.iter().any(|p| !(p.stderr > 0.0) || !p.stderr.is_finite());
    let w: Vec<f64> = usable
        .iter()
        .map(|p| if uniform { 1.0 } else { (p.value / p.stderr).powi(2) })
        .collect();
    let x: Vec<f64> = usable.iter().map(|p| p.t).collect();
    let y: Vec<f64> = usable.iter().map(|p| p.value.ln()).collect();
    let sw: f64 = w.iter().sum();
    let xm = w.iter().zip(&x).map(|(w, x)| w * x).sum::<f64>() / sw;
    let ym = w.iter().zip(&y).map(|(w, y)| w * y).sum::<f64>() / sw;
    let sxx: f64 = w.iter().zip(&x).map(|(w, x)| w * (x - xm).powi(2)).sum();
    let sxy: f64 = (0..x.len()).map(|i| w[i] * (x[i] - xm) * (y[i] - ym)).sum();
    let syy: f64 = w.iter().zip(&y).map(|(w, y)| w * (y - ym).powi(2)).sum();
    if !(sxx > 0.0) {
        return Err(Error::Domain("rate fit needs at least two distinct times".into()));
    }
    let slope = sxy / sxx;
    let intercept = ym - slope * xm;
    let sse: f64 = (0..x.len())
        .map(|i| w[i] * (y[i] - intercept - slope * x[i]).powi(2))
        .sum();
    let r_squared = if syy > 0.0 {
        (1.0 - sse / syy).clamp(0.0, 1.0)
    } else {
        1.0
    };
    let dof = (x.len() - 2) as f64;
    let rate_stderr = (sse / dof / sxx).sqrt();
    let rate = -slope;
    Ok(MixingReport {
        curve: curve.to_vec(),
        rate,
        rate_stderr,
        prefactor: intercept.exp(),
        r_squared,
        censored_fraction: 0.0,
        points_used: x.len(),
        mixing: rate > 1e-12 && rate > 2.0 * rate_stderr,
    })
}

/// `P{T > t}` on `grid`, counting censored runs as not yet coalesced.
pub fn survival_curve(records: &[CouplingRecord], grid: &[f64]) -> Vec<CurvePoint> {
    let n = records.len() as f64;
    grid.iter()
        .map(|&t| {
            let p = records.iter().filter(|r| r.survives(t)).count() as f64 / n;
            CurvePoint {
                t,
                value: p,
                stderr: (p * (1.0 - p) / n).sqrt(),
            }
        })
        .collect()
}

/// Exponential fit of the coupling tail. Only grid times up to the 95th
/// percentile of the observed coalescence times enter the fit, and only
/// where the survival is strictly between 0 and 1.
pub fn survival_fit(records: &[CouplingRecord], grid: &[f64]) -> Result<MixingReport> {
    if records.is_empty() {
        return Err(Error::InvalidParameter("no coupling records".into()));
    }
    let mut times: Vec<f64> = records.iter().filter_map(|r| r.t).collect();
    if times.is_empty() {
        return Err(Error::Domain("every coupling run is censored".into()));
    }
    times.sort_by(f64::total_cmp);
    let cut = quantile_sorted(&times, 0.95);
    let curve = survival_curve(records, grid);
    let fit_points: Vec<CurvePoint> = curve.iter().copied().filter(|p| p.t <= cut && p.value < 1.0).collect();
    let mut report = mixing_fit(&fit_points)?;
    report.curve = curve;
    report.censored_fraction = records.iter().filter(|r| r.censored).count() as f64 / records.len() as f64;
    Ok(report)
}

/// TV and coupling tail from one batch of coupled runs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CouplingCurves {
    pub tv: Vec<CurvePoint>,
    pub survival: Vec<CurvePoint>,
    pub records: Vec<CouplingRecord>,
}

impl CouplingCurves {
    /// Largest `tv - survival - 2 * combined stderr` over the grid; the
    /// coupling inequality holds empirically when this is at most zero.
    pub fn worst_excess(&self) -> f64 {
        self.tv
            .iter()
            .zip(&self.survival)
            .map(|(a, b)| a.value - b.value - 2.0 * (a.stderr.powi(2) + b.stderr.powi(2)).sqrt())
            .fold(f64::NEG_INFINITY, f64::max)
    }
}

/// Run `replicas` coupled pairs from `(x, x')` and estimate, at each grid
/// time, the histogram TV between the two components and `P{T > t}`.
#[allow(clippy::too_many_arguments)]
pub fn coupling_curves(
    spec: &SystemSpec,
    policy: &CouplingPolicy,
    x: &DVector<f64>,
    x_prime: &DVector<f64>,
    horizon: f64,
    grid: &[f64],
    replicas: usize,
    seed: u64,
    bins: Option<usize>,
) -> Result<CouplingCurves> {
    if replicas == 0 {
        return Err(Error::InvalidParameter("need at least one replica".into()));
    }
    let runs = run_coupling_batch(spec, policy, x, x_prime, horizon, grid, replicas, seed)?;
    let tv = grid
        .iter()
        .enumerate()
        .map(|(i, &t)| {
            let a: Vec<DVector<f64>> = runs.iter().map(|r| r.1[i].0.clone()).collect();
            let b: Vec<DVector<f64>> = runs.iter().map(|r| r.1[i].1.clone()).collect();
            let est = histogram_tv(&a, &b, bins, seed ^ (i as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15))?;
            Ok(CurvePoint {
                t,
                value: est.estimate,
                stderr: est.stderr,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let records: Vec<CouplingRecord> = runs.into_iter().map(|r| r.0).collect();
    Ok(CouplingCurves {
        tv,
        survival: survival_curve(&records, grid),
        records,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InvariantConfig {
    /// Time discarded at the start of each replica.
    pub burn_in: f64,
    /// Snapshots per replica after the burn-in.
    pub samples: usize,
    /// Time between snapshots.
    pub spacing: f64,
    pub replicas: usize,
    pub seed: u64,
    /// Bins per coordinate histogram; `None` for Freedman–Diaconis.
    #[serde(default)]
    pub bins: Option<usize>,
}

impl Default for InvariantConfig {
    fn default() -> Self {
        Self {
            burn_in: 20.0,
            samples: 200,
            spacing: 0.5,
            replicas: 64,
            seed: 0,
            bins: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Histogram {
    pub coordinate: usize,
    /// `bins + 1` edges.
    pub edges: Vec<f64>,
    /// Normalized so that the density integrates to 1.
    pub density: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InvariantSummary {
    /// Time average of `|X_t|^2` past the burn-in.
    pub second_moment: f64,
    pub second_moment_stderr: f64,
    /// Average of `|X_tau_k|^2` over jumps past the burn-in.
    pub embedded_second_moment: f64,
    pub embedded_stderr: f64,
    pub histograms: Vec<Histogram>,
    pub replicas: usize,
}

struct ReplicaSummary {
    snapshots: Vec<DVector<f64>>,
    embedded_mean: f64,
}

fn invariant_replica(
    spec: &SystemSpec,
    x0: &DVector<f64>,
    cfg: &InvariantConfig,
    replica: usize,
) -> Result<ReplicaSummary> {
    let mut rng = stream(cfg.seed, Purpose::Invariant, replica as u64);
    let end = cfg.burn_in + (cfg.samples - 1) as f64 * cfg.spacing;
    let mut ev = spec.noise.events();
    let mut x = x0.clone();
    let mut tau = 0.0;
    let mut next = 0usize;
    let mut snapshots = Vec::with_capacity(cfg.samples);
    let (mut emb_sum, mut emb_count) = (0.0, 0usize);
    loop {
        let (w, eta) = ev.next_event(&mut rng);
        while next < cfg.samples {
            let t = cfg.burn_in + next as f64 * cfg.spacing;
            if t >= tau + w {
                break;
            }
            snapshots.push(flow(&spec.field, &x, t - tau, &spec.integrator)?);
            next += 1;
        }
        if tau + w > end && next == cfg.samples {
            break;
        }
        x = spec.step(&x, w, &eta)?;
        tau += w;
        if tau >= cfg.burn_in {
            emb_sum += x.norm_squared();
            emb_count += 1;
        }
    }
    Ok(ReplicaSummary {
        snapshots,
        embedded_mean: if emb_count > 0 {
            emb_sum / emb_count as f64
        } else {
            f64::NAN
        },
    })
}

/// Long-run summary from `x0`: time averages over snapshots spaced
/// `spacing` apart after `burn_in`, pooled over independent replicas.
/// Standard errors come from the spread of the per-replica means.
pub fn invariant_estimate(spec: &SystemSpec, x0: &DVector<f64>, cfg: &InvariantConfig) -> Result<InvariantSummary> {
    if !(cfg.burn_in >= 0.0) || !(cfg.spacing > 0.0) || cfg.samples == 0 {
        return Err(Error::InvalidParameter(
            "burn-in must be nonnegative, spacing positive and samples nonzero".into(),
        ));
    }
    if cfg.replicas < 2 {
        return Err(Error::InvalidParameter("need at least two replicas".into()));
    }
    if x0.len() != spec.dim() {
        return Err(Error::Dimension("initial state has the wrong length".into()));
    }
    let reps: Vec<ReplicaSummary> = (0..cfg.replicas)
        .into_par_iter()
        .map(|r| invariant_replica(spec, x0, cfg, r))
        .collect::<Result<_>>()?;
    let cont: Vec<f64> = reps
        .iter()
        .map(|r| r.snapshots.iter().map(|x| x.norm_squared()).sum::<f64>() / r.snapshots.len() as f64)
        .collect();
    let emb: Vec<f64> = reps.iter().map(|r| r.embedded_mean).filter(|v| v.is_finite()).collect();
    let (m2, sd2) = mean_sd(&cont);
    let (e2, esd) = if emb.is_empty() {
        (f64::NAN, f64::NAN)
    } else {
        mean_sd(&emb)
    };
    let histograms = (0..spec.dim())
        .map(|i| {
            let mut col: Vec<f64> = reps
                .iter()
                .flat_map(|r| r.snapshots.iter().map(move |x| x[i]))
                .collect();
            col.sort_by(f64::total_cmp);
            coordinate_histogram(i, &col, cfg.bins)
        })
        .collect();
    Ok(InvariantSummary {
        second_moment: m2,
        second_moment_stderr: sd2 / (cont.len() as f64).sqrt(),
        embedded_second_moment: e2,
        embedded_stderr: esd / (emb.len() as f64).sqrt(),
        histograms,
        replicas: cfg.replicas,
    })
}

fn coordinate_histogram(coordinate: usize, sorted: &[f64], bins: Option<usize>) -> Histogram {
    let n = bins.unwrap_or_else(|| fd_bins(sorted, 1)).max(1);
    let (lo, hi) = (sorted[0], sorted[sorted.len() - 1]);
    let width = if hi > lo { (hi - lo) / n as f64 } else { 1.0 };
    let mut counts = vec![0usize; n];
    for &v in sorted {
        let j = (((v - lo) / width).floor().max(0.0) as usize).min(n - 1);
        counts[j] += 1;
    }
    let scale = 1.0 / (sorted.len() as f64 * width);
    Histogram {
        coordinate,
        edges: (0..=n).map(|j| lo + j as f64 * width).collect(),
        density: counts.iter().map(|&c| c as f64 * scale).collect(),
    }
}

/// Two-sample Kolmogorov–Smirnov statistic and its asymptotic p-value.
pub fn ks_two_sample(a: &[f64], b: &[f64]) -> Result<(f64, f64)> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::InvalidParameter("both samples must be nonempty".into()));
    }
    let mut a = a.to_vec();
    let mut b = b.to_vec();
    a.sort_by(f64::total_cmp);
    b.sort_by(f64::total_cmp);
    let (na, nb) = (a.len() as f64, b.len() as f64);
    let (mut i, mut j) = (0usize, 0usize);
    let mut d: f64 = 0.0;
    while i < a.len() && j < b.len() {
        let v = a[i].min(b[j]);
        while i < a.len() && a[i] <= v {
            i += 1;
        }
        while j < b.len() && b[j] <= v {
            j += 1;
        }
        d = d.max((i as f64 / na - j as f64 / nb).abs());
    }
    let en = (na * nb / (na + nb)).sqrt();
    Ok((d, kolmogorov_q((en + 0.12 + 0.11 / en) * d)))
}

/// `Q(x) = 2 sum_{k>=1} (-1)^{k-1} e^{-2 k^2 x^2}`.
fn kolmogorov_q(x: f64) -> f64 {
    if x < 1e-3 {
        return 1.0;
    }
    let mut sum = 0.0;
    let mut sign = 1.0;
    for k in 1..=200 {
        let term = (-2.0 * (k * k) as f64 * x * x).exp();
        sum += sign * term;
        if term < 1e-16 {
            break;
        }
        sign = -sign;
    }
    (2.0 * sum).clamp(0.0, 1.0)
}

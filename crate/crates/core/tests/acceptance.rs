//! End-to-end acceptance checks. Prints one PASS/FAIL line per criterion
//! and exits nonzero if any hard criterion fails.

use std::f64::consts::PI;
use std::fs;
use std::path::Path;
use std::process::Command;
use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use num_bigint::{BigInt, Sign};
use rand::Rng;
use rayon::prelude::*;
use statrs::distribution::{Continuous, ContinuousCDF, Laplace, Normal};

use jumpmix::controllability::{constant_bracket_chain, hormander_tower, kalman_rank, DEFAULT_REL_TOL};
use jumpmix::coupling::{coupled_chain, maximal_coupling_sample, CouplingPolicy, HitMode};
use jumpmix::diagnostics::{coupling_curves, invariant_estimate, ks_two_sample, survival_fit, InvariantConfig};
use jumpmix::dynamics::{controlled_flow, IntegratorConfig};
use jumpmix::galerkin::{
    build_field, scaling_control_endpoint, synthesize_steering, BasisFn, Galerkin, GalerkinSystem, Perturbation,
    SteeringConfig,
};
use jumpmix::gallery::{cubic_system, linear_system, oscillator_system};
use jumpmix::network::{build_langevin, chain_stiffness, check_conditions, langevin_matrix, ray, NetworkSpec};
use jumpmix::noise::{Density, JumpLaw, UniformBox};
use jumpmix::pdmp::{embedded_chain, empirical_moment, SystemSpec};
use jumpmix::rng::{stream, Purpose};

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

/// Midpoint rule for `1/2 int |p - q|` on `[lo, hi]`.
fn tv_midpoint(p: impl Fn(f64) -> f64, q: impl Fn(f64) -> f64, lo: f64, hi: f64, cells: usize) -> f64 {
    let h = (hi - lo) / cells as f64;
    0.5 * (0..cells)
        .map(|i| {
            let x = lo + (i as f64 + 0.5) * h;
            (p(x) - q(x)).abs() * h
        })
        .sum::<f64>()
}

fn criterion_1() -> Outcome {
    let n = 100_000;
    let std = Normal::new(0.0, 1.0).unwrap();
    let pdf = move |m: f64, s: f64| move |x: f64| Normal::new(m, s).unwrap().pdf(x);
    let lap = Laplace::new(0.0, 1.0).unwrap();
    let mix = move |x: f64| 0.5 * Normal::new(-1.5, 0.7).unwrap().pdf(x) + 0.5 * Normal::new(1.5, 0.7).unwrap().pdf(x);
    let unif = |a: f64| move |x: f64| if (a..a + 1.0).contains(&x) { 1.0 } else { 0.0 };
    let g = |m: f64, s: f64| JumpLaw::GaussianMixture {
        weight: 1.0,
        mean_a: vec![m],
        mean_b: vec![m],
        sigma: s,
    };
    type Pair = (&'static str, Box<dyn Density + Sync>, Box<dyn Density + Sync>, f64);
    let pairs: Vec<Pair> = vec![
        (
            "N(0,1)|N(1,1)",
            Box::new(g(0.0, 1.0)),
            Box::new(g(1.0, 1.0)),
            2.0 * std.cdf(0.5) - 1.0,
        ),
        (
            "N(0,1)|N(0,4)",
            Box::new(JumpLaw::Gaussian { dim: 1, sigma: 1.0 }),
            Box::new(JumpLaw::Gaussian { dim: 1, sigma: 2.0 }),
            tv_midpoint(pdf(0.0, 1.0), pdf(0.0, 2.0), -20.0, 20.0, 400_000),
        ),
        (
            "Laplace(1)|N(0,1)",
            Box::new(JumpLaw::Laplace { dim: 1, scale: 1.0 }),
            Box::new(JumpLaw::standard_gaussian(1)),
            tv_midpoint(|x| lap.pdf(x), pdf(0.0, 1.0), -40.0, 40.0, 800_000),
        ),
        (
            "mixture|N(0,1)",
            Box::new(JumpLaw::GaussianMixture {
                weight: 0.5,
                mean_a: vec![-1.5],
                mean_b: vec![1.5],
                sigma: 0.7,
            }),
            Box::new(JumpLaw::standard_gaussian(1)),
            tv_midpoint(mix, pdf(0.0, 1.0), -20.0, 20.0, 400_000),
        ),
        (
            "U[0,1]|U[0.5,1.5]",
            Box::new(UniformBox::interval(0.0, 1.0)),
            Box::new(UniformBox::interval(0.5, 1.5)),
            tv_midpoint(unif(0.0), unif(0.5), -1.0, 3.0, 400_000),
        ),
    ];
    let mut pass = true;
    let mut parts = Vec::new();
    for (idx, (name, p, q, tv)) in pairs.iter().enumerate() {
        let chunks = 100;
        let misses: usize = (0..chunks)
            .into_par_iter()
            .map(|c| {
                let mut rng = stream(1000 + idx as u64, Purpose::Maximal, c as u64);
                (0..n / chunks)
                    .filter(|_| {
                        !maximal_coupling_sample(p.as_ref(), q.as_ref(), &mut rng, 100_000)
                            .unwrap()
                            .hit
                    })
                    .count()
            })
            .sum();
        let rate = misses as f64 / n as f64;
        let se = (tv * (1.0 - tv) / n as f64).sqrt();
        let ok = (rate - tv).abs() <= 3.0 * se;
        pass &= ok;
        parts.push(format!("{name}: miss {rate:.4} vs {tv:.4}"));
    }
    outcome(pass, parts.join("; "))
}

fn linear_gallery() -> SystemSpec {
    linear_system(0.5, 1.0).unwrap()
}

fn criterion_2() -> Outcome {
    let spec = linear_gallery();
    let rep = empirical_moment(&spec, &DVector::from_element(1, 2.0), 10, &[], 10_000, 2).unwrap();
    // M_k = rho M_{k-1} + Lambda with rho = lambda / (lambda + 2 alpha).
    let rho = 1.0 / (1.0 + 2.0 * 0.5);
    let mut m = 4.0;
    let mut worst: f64 = 0.0;
    let mut pass = true;
    for (k, p) in rep.embedded.iter().enumerate() {
        if k > 0 {
            m = rho * m + 1.0;
        }
        let z = if p.stderr > 0.0 {
            (p.estimate - m).abs() / p.stderr
        } else {
            0.0
        };
        worst = worst.max(z);
        pass &= (p.estimate - m).abs() <= 3.0 * p.stderr + 1e-12;
    }
    outcome(pass, format!("k <= 10, worst deviation {worst:.2} sigma"))
}

fn criterion_3() -> Outcome {
    let spec = linear_gallery();
    let cfg = InvariantConfig {
        burn_in: 20.0,
        samples: 2000,
        spacing: 0.5,
        replicas: 64,
        seed: 3,
        bins: None,
    };
    let s = invariant_estimate(&spec, &DVector::from_element(1, 2.0), &cfg).unwrap();
    let cont = (s.second_moment - 1.0).abs() / 1.0;
    let emb = (s.embedded_second_moment - 2.0).abs() / 2.0;
    outcome(
        cont < 0.05 && emb < 0.05,
        format!(
            "E|X|^2 = {:.4} (target 1.0), embedded {:.4} (target 2.0)",
            s.second_moment, s.embedded_second_moment
        ),
    )
}

fn criterion_4() -> Outcome {
    let spec = cubic_system().unwrap();
    let policy = CouplingPolicy::new(DVector::zeros(1), 1.0, 1, HitMode::ExactDensity);
    let grid: Vec<f64> = (0..=40).map(|i| i as f64 * 0.25).collect();
    let curves = coupling_curves(
        &spec,
        &policy,
        &DVector::from_element(1, 3.0),
        &DVector::from_element(1, -2.0),
        10.0,
        &grid,
        10_000,
        4,
        None,
    )
    .unwrap();
    let excess = curves.worst_excess();
    let fit = survival_fit(&curves.records, &grid).unwrap();
    let pass = excess <= 0.0 && fit.r_squared >= 0.95 && fit.rate > 0.0;
    outcome(
        pass,
        format!(
            "max(TV - tail - 2se) = {excess:.4}, tail rate {:.3}, R^2 {:.4}",
            fit.rate, fit.r_squared
        ),
    )
}

/// Smallest Bonferroni-scaled KS p-value between the coupled components and
/// plain embedded chains, at blocks 1, 5 and 10.
fn marginal_min_p(spec: &SystemSpec, policy: &CouplingPolicy, x: &DVector<f64>, xp: &DVector<f64>, seed: u64) -> f64 {
    let n = 10_000;
    let blocks = [1usize, 5, 10];
    let m = policy.m;
    let coupled: Vec<_> = (0..n)
        .into_par_iter()
        .map(|r| {
            let mut rng = stream(seed, Purpose::Coupling, r as u64);
            coupled_chain(spec, policy, x, xp, 10, &mut rng).unwrap()
        })
        .collect();
    let plain = |start: &DVector<f64>, salt: u64| -> Vec<Vec<DVector<f64>>> {
        (0..n)
            .into_par_iter()
            .map(|r| {
                let mut rng = stream(seed ^ salt, Purpose::Plain, r as u64);
                embedded_chain(spec, start, 10 * m, &mut rng).unwrap().2
            })
            .collect()
    };
    let plain_x = plain(x, 0x51);
    let plain_xp = plain(xp, 0xa7);
    let d = spec.dim();
    let tests = (blocks.len() * d * 2) as f64;
    let mut min_p: f64 = 1.0;
    for &b in &blocks {
        for i in 0..d {
            let z: Vec<f64> = coupled.iter().map(|c| c[b - 1].0[i]).collect();
            let zp: Vec<f64> = coupled.iter().map(|c| c[b - 1].1[i]).collect();
            let px: Vec<f64> = plain_x.iter().map(|c| c[b * m - 1][i]).collect();
            let pxp: Vec<f64> = plain_xp.iter().map(|c| c[b * m - 1][i]).collect();
            for (a, c) in [(&z, &px), (&zp, &pxp)] {
                let (_, p) = ks_two_sample(a, c).unwrap();
                min_p = min_p.min((p * tests).min(1.0));
            }
        }
    }
    min_p
}

fn criterion_5() -> Outcome {
    let cubic = cubic_system().unwrap();
    let (x, xp) = (DVector::from_element(1, 1.5), DVector::from_element(1, -0.5));
    let exact = CouplingPolicy::new(DVector::zeros(1), 1.0, 1, HitMode::ExactDensity);
    let indep = CouplingPolicy::new(DVector::zeros(1), 1.0, 1, HitMode::Independent);
    let p_exact = marginal_min_p(&cubic, &exact, &x, &xp, 51);
    let p_indep = marginal_min_p(&cubic, &indep, &x, &xp, 52);
    let osc = oscillator_system().unwrap();
    let shoot = CouplingPolicy::new(DVector::zeros(2), 1.0, 2, HitMode::Shooting);
    let p_shoot = marginal_min_p(
        &osc,
        &shoot,
        &DVector::from_row_slice(&[0.3, 0.0]),
        &DVector::from_row_slice(&[-0.2, 0.3]),
        53,
    );
    let hard = p_exact > 0.01 && p_indep > 0.01;
    let shoot_ok = p_shoot > 0.001;
    outcome(
        hard,
        format!(
            "adjusted p: exact {p_exact:.3}, independent {p_indep:.3}, shooting {p_shoot:.2e} ({})",
            if shoot_ok {
                "reported ok"
            } else {
                "reported below 0.001"
            }
        ),
    )
}

/// Orthonormal basis for `D = 1`, `N = 2` under `dx / 2 pi`.
fn basis_1d(j: usize, x: f64) -> f64 {
    let s = 2f64.sqrt();
    match j {
        0 => 1.0,
        1 => s * x.cos(),
        2 => s * x.sin(),
        3 => s * (2.0 * x).cos(),
        4 => s * (2.0 * x).sin(),
        _ => unreachable!(),
    }
}

fn eval_1d(c: &DVector<f64>, x: f64) -> f64 {
    (0..5).map(|j| c[j] * basis_1d(j, x)).sum()
}

/// `P_N g` by an equispaced rule, exact for trigonometric polynomials of
/// degree below 64.
fn project_1d(g: impl Fn(f64) -> f64) -> DVector<f64> {
    let m = 64;
    DVector::from_fn(5, |j, _| {
        (0..m)
            .map(|i| {
                let x = 2.0 * PI * i as f64 / m as f64;
                g(x) * basis_1d(j, x)
            })
            .sum::<f64>()
            / m as f64
    })
}

fn check_basis_order(model: &Galerkin) -> bool {
    model.basis()
        == [
            BasisFn::Const,
            BasisFn::Cos(vec![1]),
            BasisFn::Sin(vec![1]),
            BasisFn::Cos(vec![2]),
            BasisFn::Sin(vec![2]),
        ]
}

fn criterion_6() -> Outcome {
    let a = 1.0;
    let sys = GalerkinSystem::new(1, 2, 0.5, a, 3, Perturbation::Zero);
    let model = Galerkin::new(sys.clone()).unwrap();
    let f = build_field(&sys).unwrap();
    let mut rng = stream(6, Purpose::Other, 0);
    let e = |j: usize| DVector::from_fn(5, |i, _| (i == j) as u8 as f64);
    let mut worst: f64 = 0.0;
    let u = DVector::from_fn(5, |_, _| rng.random_range(-0.5..0.5));
    for i in 0..3 {
        for j in i..3 {
            for k in j..3 {
                let got = constant_bracket_chain(&f, &[e(i), e(j), e(k)], &u);
                let want = project_1d(|x| basis_1d(i, x) * basis_1d(j, x) * basis_1d(k, x)) * (-a * 6.0);
                worst = worst.max((got - &want).norm() / (1.0 + want.norm()));
            }
        }
    }
    let mut tower_ok = true;
    let mut gens = 0;
    for x in [DVector::zeros(5), u.clone()] {
        let c = hormander_tower(&f, &model.control_matrix(), &x, 3, DEFAULT_REL_TOL).unwrap();
        tower_ok &= c.passed() && c.dimension_reached == 5;
        gens = gens.max(c.generations_used);
    }
    outcome(
        check_basis_order(&model) && worst < 1e-8 && tower_ok,
        format!("max bracket error {worst:.2e}, tower dim 5 in {gens} generations"),
    )
}

/// Row-echelon rank of an integer matrix by fraction-free elimination.
fn bareiss_rank(mut m: Vec<Vec<BigInt>>) -> usize {
    let rows = m.len();
    let cols = m[0].len();
    let mut rank = 0;
    let mut prev = BigInt::from(1);
    for c in 0..cols {
        let Some(piv) = (rank..rows).find(|&r| m[r][c].sign() != Sign::NoSign) else {
            continue;
        };
        m.swap(rank, piv);
        for r in rank + 1..rows {
            for cc in c + 1..cols {
                let v = &m[rank][c] * &m[r][cc] - &m[r][c] * &m[rank][cc];
                m[r][cc] = v / &prev;
            }
            m[r][c] = BigInt::from(0);
        }
        prev = m[rank][c].clone();
        rank += 1;
        if rank == rows {
            break;
        }
    }
    rank
}

/// Exact rank of `[E, K E, .., K^{n-1} E]` for the integer chain stiffness.
fn brute_force_chain_rank(len: usize) -> usize {
    let k: Vec<Vec<i64>> = (0..len)
        .map(|i| {
            (0..len)
                .map(|j| {
                    if i == j {
                        if i == 0 || i == len - 1 {
                            2
                        } else {
                            3
                        }
                    } else if i.abs_diff(j) == 1 {
                        -1
                    } else {
                        0
                    }
                })
                .collect()
        })
        .collect();
    let mut block: Vec<Vec<BigInt>> = (0..len)
        .map(|i| vec![BigInt::from((i == 0) as i64), BigInt::from((i == len - 1) as i64)])
        .collect();
    let mut cols: Vec<Vec<BigInt>> = (0..len).map(|_| Vec::new()).collect();
    for _ in 0..len {
        for i in 0..len {
            cols[i].extend(block[i].iter().cloned());
        }
        block = (0..len)
            .map(|i| {
                (0..2)
                    .map(|c| (0..len).map(|j| BigInt::from(k[i][j]) * &block[j][c]).sum())
                    .collect()
            })
            .collect();
    }
    bareiss_rank(cols)
}

fn criterion_7() -> Outcome {
    let mut pass = true;
    let mut parts = Vec::new();
    for len in 2..=6 {
        let nw = NetworkSpec::chain(len, 1.0).unwrap();
        let dir = DVector::from_element(len, 1.0);
        let rep = check_conditions(&nw, &ray(&dir, 1.0, 10)).unwrap();
        let brute = brute_force_chain_rank(len);
        let k_ok = chain_stiffness(len)
            == DMatrix::from_fn(len, len, |i, j| {
                if i == j {
                    if i == 0 || i == len - 1 {
                        2.0
                    } else {
                        3.0
                    }
                } else if i.abs_diff(j) == 1 {
                    -1.0
                } else {
                    0.0
                }
            });
        let spec = build_langevin(&nw).unwrap();
        let full = kalman_rank(&langevin_matrix(&nw), &spec.b).unwrap();
        let ok = k_ok && rep.kalman.passed() && rep.kalman.dimension_reached == brute && brute == len && full.passed();
        pass &= ok;
        parts.push(format!("L={len} rank {}/{brute}", rep.kalman.dimension_reached));
    }
    let mut decoupled = NetworkSpec::chain(3, 1.0).unwrap();
    decoupled.omega = vec![vec![1.0, 0.0, 0.0], vec![0.0, 1.0, 0.0], vec![0.0, 0.0, 1.0]];
    decoupled.driven = vec![0];
    decoupled.gamma = vec![1.0];
    decoupled.rates = vec![1.0];
    decoupled.laws = vec![JumpLaw::standard_gaussian(1)];
    let rep = check_conditions(&decoupled, &ray(&DVector::from_element(3, 1.0), 1.0, 10)).unwrap();
    pass &= !rep.kalman.passed();
    parts.push(format!("decoupled verdict {:?}", rep.kalman.verdict));
    outcome(pass, parts.join(", "))
}

fn log_log_slope(pts: &[(f64, f64)]) -> f64 {
    let n = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
    pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum::<f64>() / pts.iter().map(|p| (p.0 - mx).powi(2)).sum::<f64>()
}

fn criterion_8() -> Outcome {
    let sys = GalerkinSystem::new(1, 2, 0.5, 1.0, 3, Perturbation::Zero);
    let model = Galerkin::new(sys).unwrap();
    let cfg = IntegratorConfig::default();
    let bound = 1.0 / 3.0 - 0.1;
    let slopes: Vec<f64> = (0..5)
        .into_par_iter()
        .map(|case| {
            let mut rng = stream(8, Purpose::Other, case);
            let mut draw = || DVector::from_fn(5, |_, _| rng.random_range(-1.0..1.0)).normalize();
            let (u0, phi, psi) = (draw(), draw(), draw());
            let cube = project_1d(|x| eval_1d(&phi, x).powi(3));
            let limit = &u0 + &psi - cube;
            let pts: Vec<(f64, f64)> = (4..=10)
                .map(|j| {
                    let delta = 2f64.powi(-j);
                    let end = scaling_control_endpoint(&model, &u0, &phi, &psi, delta, &cfg).unwrap();
                    (delta.ln(), (end - &limit).norm_squared().ln())
                })
                .collect();
            log_log_slope(&pts)
        })
        .collect();
    let worst = slopes.iter().copied().fold(f64::INFINITY, f64::min);
    outcome(
        worst >= bound,
        format!("smallest log-log slope {worst:.3} over 5 unit-norm cases (need >= {bound:.3})"),
    )
}

fn criterion_9() -> Outcome {
    let sys = GalerkinSystem::new(1, 2, 0.5, 1.0, 3, Perturbation::Zero);
    let model = Galerkin::new(sys.clone()).unwrap();
    let f = build_field(&sys).unwrap();
    let b = model.control_matrix();
    let u0 = DVector::zeros(5);
    let errors: Vec<f64> = (0..10)
        .into_par_iter()
        .map(|i| {
            let mut rng = stream(9, Purpose::Steering, i);
            let dir = DVector::from_fn(5, |_, _| rng.random_range(-1.0..1.0));
            let target = dir.normalize() * rng.random_range(0.0..2.0);
            let cfg = SteeringConfig {
                seed: i,
                ..SteeringConfig::default()
            };
            let res = synthesize_steering(&model, &u0, &target, 1e-2, 50.0, &cfg).unwrap();
            let end = match &res.control {
                Some(c) => controlled_flow(
                    &f,
                    &b,
                    &u0,
                    c,
                    c.horizon(),
                    &IntegratorConfig::default().tightened(1e-1),
                )
                .unwrap(),
                None => u0.clone(),
            };
            (end - target).norm()
        })
        .collect();
    let worst = errors.iter().copied().fold(0.0, f64::max);
    outcome(
        worst < 1e-2,
        format!("worst a-posteriori error {worst:.2e} over 10 targets"),
    )
}

fn run_cli(dir: &Path, sub: &str, config: &Path, threads: usize) -> bool {
    Command::new(env!("CARGO_BIN_EXE_jumpmix"))
        .args([sub, "--config"])
        .arg(config)
        .arg("--out")
        .arg(dir)
        .args(["--threads", &threads.to_string()])
        .output()
        .map(|o| o.status.success())
        .unwrap_or(false)
}

fn csv_files(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out: Vec<(String, Vec<u8>)> = fs::read_dir(dir)
        .unwrap()
        .filter_map(|e| e.ok())
        .map(|e| e.path())
        .filter(|p| p.extension().is_some_and(|x| x == "csv"))
        .map(|p| {
            (
                p.file_name().unwrap().to_string_lossy().into_owned(),
                fs::read(&p).unwrap(),
            )
        })
        .collect();
    out.sort();
    out
}

fn criterion_10() -> Outcome {
    let root = tempfile::tempdir().unwrap();
    let configs = [
        (
            "simulate",
            r#"{"system": {"kind": "preset", "name": "cubic"}, "replicas": 200, "seed": 10,
                        "simulate": {"invariant": {"burn_in": 5.0, "samples": 50, "spacing": 0.5}}}"#,
        ),
        (
            "couple",
            r#"{"system": {"kind": "preset", "name": "oscillator"}, "replicas": 200, "seed": 11}"#,
        ),
        (
            "mixing",
            r#"{"system": {"kind": "preset", "name": "cubic"}, "replicas": 500, "seed": 12}"#,
        ),
        (
            "check",
            r#"{"system": {"kind": "preset", "name": "galerkin"}, "seed": 13}"#,
        ),
        (
            "galerkin-steer",
            r#"{"system": {"kind": "preset", "name": "galerkin"}, "seed": 14,
                              "steer": {"targets": 3}}"#,
        ),
        ("network", r#"{"network": {"chain_length": 4}}"#),
    ];
    let mut pass = true;
    let mut files = 0;
    for (sub, text) in configs {
        let cfg = root.path().join(format!("{sub}.json"));
        fs::write(&cfg, text).unwrap();
        let (a, b) = (
            root.path().join(format!("{sub}-1")),
            root.path().join(format!("{sub}-4")),
        );
        let ran = run_cli(&a, sub, &cfg, 1) && run_cli(&b, sub, &cfg, 4);
        let (ca, cb) = (csv_files(&a), csv_files(&b));
        let same = ran && !ca.is_empty() && ca == cb;
        if !same {
            eprintln!("  {sub}: ran={ran}, files {} vs {}", ca.len(), cb.len());
        }
        files += ca.len();
        pass &= same;
    }
    outcome(
        pass,
        format!("6 subcommands, {files} CSVs identical across 1 and 4 threads"),
    )
}

type Criterion = (&'static str, fn() -> Outcome);

fn main() {
    let criteria: [Criterion; 10] = [
        ("maximal coupling miss rate equals TV", criterion_1),
        ("embedded-chain moment recursion", criterion_2),
        ("stationary second moments", criterion_3),
        ("coupling inequality and exponential tail", criterion_4),
        ("block coupling preserves marginals", criterion_5),
        ("Galerkin bracket identity and tower", criterion_6),
        ("Kalman certificates for chains", criterion_7),
        ("scaling-control convergence rate", criterion_8),
        ("steering a-posteriori error", criterion_9),
        ("determinism across thread counts", criterion_10),
    ];
    let mut failed = 0;
    for (i, (name, run)) in criteria.iter().enumerate() {
        let start = Instant::now();
        let o = run();
        let secs = start.elapsed().as_secs_f64();
        println!(
            "criterion {:>2} {}: {} [{}] ({secs:.1}s)",
            i + 1,
            if o.pass { "PASS" } else { "FAIL" },
            name,
            o.detail
        );
        if !o.pass {
            failed += 1;
        }
    }
    if failed > 0 {
        eprintln!("{failed} acceptance criteria failed");
        std::process::exit(1);
    }
}

//! Batch experiment driver behind the `jumpmix` binary.
//!
//! Each subcommand reads a JSON [`ExperimentConfig`], applies flag
//! overrides, writes `resolved_config.json` next to its outputs and then
//! CSV tables plus a JSON summary. Replica `r` always draws from its own
//! stream, so outputs are byte-identical for any `--threads`.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::controllability::{hormander_tower, kalman_rank, solid_cert, RankCertificate, DEFAULT_REL_TOL};
use crate::coupling::{run_coupling_batch, CouplingPolicy, HitMode, ShootingConfig};
use crate::diagnostics::{
    coupling_curves, invariant_estimate, mixing_fit, survival_curve, survival_fit, InvariantConfig, InvariantSummary,
    MixingReport,
};
use crate::dynamics::{check_dissipativity, jacobian, DissipativityReport, VectorField};
use crate::galerkin::{synthesize_steering, Galerkin, GalerkinSystem, SteeringConfig};
use crate::gallery::{galerkin_system, Preset};
use crate::network::{build_langevin, build_semimarkov, check_conditions, langevin_matrix, ray, NetworkSpec};
use crate::noise::JumpLaw;
use crate::pdmp::{empirical_moment, simulate, MomentReport, SystemSpec};
use crate::rng::{stream, Purpose};
use crate::{Error, Result};

pub const THREADS_ENV: &str = "JUMPMIX_THREADS";

#[derive(Debug, Parser)]
#[command(
    name = "jumpmix",
    version,
    about = "Mixing experiments for jump-driven dynamical systems"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
    #[command(flatten)]
    pub common: CommonArgs,
}

#[derive(Debug, Clone, Args)]
pub struct CommonArgs {
    /// JSON experiment configuration; defaults apply when omitted.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[arg(long, global = true)]
    pub replicas: Option<usize>,
    /// Output directory.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Worker threads. Results do not depend on this.
    #[arg(long, global = true, env = THREADS_ENV)]
    pub threads: Option<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Subcommand)]
pub enum Command {
    /// Sample trajectories and moment curves.
    Simulate,
    /// Run coupled pairs and record coalescence times.
    Couple,
    /// Histogram TV and coupling tail curves with exponential fits.
    Mixing,
    /// Dissipativity, Kalman, bracket and solid-controllability certificates.
    Check,
    /// Synthesize controls steering a Galerkin system to random targets.
    GalerkinSteer,
    /// Build oscillator network models and check their hypotheses.
    Network,
}

impl Command {
    pub fn name(self) -> &'static str {
        match self {
            Command::Simulate => "simulate",
            Command::Couple => "couple",
            Command::Mixing => "mixing",
            Command::Check => "check",
            Command::GalerkinSteer => "galerkin-steer",
            Command::Network => "network",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum SystemConfig {
    Preset {
        name: Preset,
    },
    /// `f(x) = A x - cubic ⊙ x^3` (coordinatewise cube).
    Polynomial {
        a: Vec<Vec<f64>>,
        #[serde(default)]
        cubic: Vec<f64>,
        b: Vec<Vec<f64>>,
        rate: f64,
        law: JumpLaw,
    },
    Galerkin {
        system: GalerkinSystem,
        rate: f64,
        sigma: f64,
    },
    Network {
        network: NetworkSpec,
        #[serde(default)]
        form: NetworkForm,
    },
}

impl Default for SystemConfig {
    fn default() -> Self {
        SystemConfig::Preset { name: Preset::Cubic }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NetworkForm {
    #[default]
    Langevin,
    SemiMarkov,
}

/// Overrides for the coupling policy; unset fields come from the system.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CouplingConfig {
    #[serde(default)]
    pub x_hat: Option<Vec<f64>>,
    #[serde(default)]
    pub r: Option<f64>,
    #[serde(default)]
    pub m: Option<usize>,
    #[serde(default)]
    pub hit_mode: Option<HitMode>,
    #[serde(default)]
    pub shooting: Option<ShootingConfig>,
    #[serde(default)]
    pub compact_radius: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SimulateConfig {
    /// Largest jump index in the embedded moment curve.
    pub k_max: usize,
    /// Trajectories written in full.
    pub trajectories: usize,
    /// Points per written trajectory.
    pub trajectory_points: usize,
    /// Long-run summary; skipped when absent.
    pub invariant: Option<InvariantSettings>,
}

impl Default for SimulateConfig {
    fn default() -> Self {
        Self {
            k_max: 10,
            trajectories: 4,
            trajectory_points: 101,
            invariant: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InvariantSettings {
    pub burn_in: f64,
    pub samples: usize,
    pub spacing: f64,
    #[serde(default)]
    pub bins: Option<usize>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MixingConfig {
    /// Histogram bins per coordinate; Freedman–Diaconis when absent.
    pub bins: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CheckConfig {
    /// `(alpha, beta)`; the preset's constants when absent.
    pub dissipativity: Option<(f64, f64)>,
    pub dissipativity_samples: usize,
    /// Sampling box half-width for the dissipativity check.
    pub sample_radius: f64,
    pub max_gen: usize,
    pub rel_tol: f64,
    /// Waiting times for the solid certificate; `m` ones when absent.
    pub s_hat: Option<Vec<f64>>,
    pub probes: usize,
}

impl Default for CheckConfig {
    fn default() -> Self {
        Self {
            dissipativity: None,
            dissipativity_samples: 1000,
            sample_radius: 10.0,
            max_gen: 6,
            rel_tol: DEFAULT_REL_TOL,
            s_hat: None,
            probes: 16,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SteerConfig {
    pub targets: usize,
    /// Targets are uniform in the ball of this radius.
    pub target_radius: f64,
    pub eps: f64,
    pub time_budget: f64,
    /// Start state; zero when absent.
    pub u0: Option<Vec<f64>>,
    pub steering: SteeringConfig,
}

impl Default for SteerConfig {
    fn default() -> Self {
        Self {
            targets: 10,
            target_radius: 2.0,
            eps: 1e-2,
            time_budget: 50.0,
            u0: None,
            steering: SteeringConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NetworkConfig {
    pub spec: Option<NetworkSpec>,
    /// Chain length used when `spec` is absent.
    pub chain_length: usize,
    pub chain_gamma: f64,
    /// Direction of the probe ray in `q`; all ones when absent.
    pub ray_direction: Option<Vec<f64>>,
    pub ray_scale: f64,
    pub ray_points: usize,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        Self {
            spec: None,
            chain_length: 3,
            chain_gamma: 1.0,
            ray_direction: None,
            ray_scale: 1.0,
            ray_points: 30,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub system: SystemConfig,
    pub seed: u64,
    pub replicas: usize,
    pub horizon: f64,
    pub coupling: CouplingConfig,
    pub output: PathBuf,
    /// Start states; the system's defaults when absent.
    pub x0: Option<Vec<f64>>,
    pub x0_prime: Option<Vec<f64>>,
    /// Observation times; `grid_points` evenly spaced on `[0, horizon]`
    /// when absent.
    pub times: Option<Vec<f64>>,
    pub grid_points: usize,
    pub simulate: SimulateConfig,
    pub mixing: MixingConfig,
    pub check: CheckConfig,
    pub steer: SteerConfig,
    pub network: NetworkConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            system: SystemConfig::default(),
            seed: 0,
            replicas: 1000,
            horizon: 10.0,
            coupling: CouplingConfig::default(),
            output: PathBuf::from("out"),
            x0: None,
            x0_prime: None,
            times: None,
            grid_points: 21,
            simulate: SimulateConfig::default(),
            mixing: MixingConfig::default(),
            check: CheckConfig::default(),
            steer: SteerConfig::default(),
            network: NetworkConfig::default(),
        }
    }
}

/// A system together with its coupling policy and start points.
pub struct Built {
    pub spec: SystemSpec,
    pub policy: CouplingPolicy,
    pub x0: DVector<f64>,
    pub x0_prime: DVector<f64>,
    pub dissipativity: Option<(f64, f64)>,
    pub galerkin: Option<GalerkinSystem>,
}

fn matrix(rows: &[Vec<f64>], what: &str) -> Result<DMatrix<f64>> {
    let n = rows.len();
    let m = rows.first().map_or(0, Vec::len);
    if n == 0 || m == 0 || rows.iter().any(|r| r.len() != m) {
        return Err(Error::Dimension(format!(
            "{what} must be a nonempty rectangular matrix"
        )));
    }
    Ok(DMatrix::from_fn(n, m, |i, j| rows[i][j]))
}

fn default_policy(spec: &SystemSpec) -> CouplingPolicy {
    let (d, n) = (spec.dim(), spec.noise_dim());
    let m = d.div_ceil(n).max(1);
    let exact = m == 1 && spec.b.is_square() && spec.b.determinant().abs() > 1e-12;
    let mode = if exact {
        HitMode::ExactDensity
    } else {
        HitMode::Shooting
    };
    CouplingPolicy::new(DVector::zeros(d), 1.0, m, mode)
}

impl SystemConfig {
    pub fn build(&self) -> Result<Built> {
        match self {
            SystemConfig::Preset { name } => {
                let e = name.build()?;
                Ok(Built {
                    galerkin: (*name == Preset::Galerkin).then(crate::gallery::galerkin_preset),
                    spec: e.spec,
                    policy: e.policy,
                    x0: e.x0,
                    x0_prime: e.x0_prime,
                    dissipativity: e.dissipativity,
                })
            }
            SystemConfig::Polynomial { a, cubic, b, rate, law } => {
                let a = matrix(a, "a")?;
                let b = matrix(b, "b")?;
                let d = a.nrows();
                if !a.is_square() || b.nrows() != d {
                    return Err(Error::Dimension("a must be square with as many rows as b".into()));
                }
                if !cubic.is_empty() && cubic.len() != d {
                    return Err(Error::Dimension("cubic needs one coefficient per coordinate".into()));
                }
                let c = if cubic.is_empty() { vec![0.0; d] } else { cubic.clone() };
                let (a1, c1) = (a.clone(), c.clone());
                let f = VectorField::new(d, move |x| {
                    let mut y = &a1 * x;
                    for i in 0..x.len() {
                        y[i] -= c1[i] * x[i].powi(3);
                    }
                    y
                })
                .with_jacobian(move |x| {
                    let mut j = a.clone();
                    for i in 0..x.len() {
                        j[(i, i)] -= 3.0 * c[i] * x[i] * x[i];
                    }
                    j
                });
                let spec = SystemSpec::single(f, b, *rate, law.clone())?;
                let mut x0 = DVector::zeros(d);
                x0[0] = 1.0;
                Ok(Built {
                    policy: default_policy(&spec),
                    x0_prime: -&x0,
                    x0,
                    spec,
                    dissipativity: None,
                    galerkin: None,
                })
            }
            SystemConfig::Galerkin { system, rate, sigma } => {
                let spec = galerkin_system(system, *rate, *sigma)?;
                let mut x0 = DVector::zeros(spec.dim());
                x0[0] = 1.0;
                Ok(Built {
                    policy: default_policy(&spec),
                    x0_prime: -&x0,
                    x0,
                    spec,
                    dissipativity: None,
                    galerkin: Some(system.clone()),
                })
            }
            SystemConfig::Network { network, form } => {
                let spec = match form {
                    NetworkForm::Langevin => build_langevin(network)?,
                    NetworkForm::SemiMarkov => build_semimarkov(network)?,
                };
                let d = spec.dim();
                Ok(Built {
                    policy: default_policy(&spec),
                    x0: DVector::from_element(d, 0.5),
                    x0_prime: DVector::from_element(d, -0.5),
                    spec,
                    dissipativity: None,
                    galerkin: None,
                })
            }
        }
    }
}

fn vector(xs: &[f64], d: usize, what: &str) -> Result<DVector<f64>> {
    if xs.len() != d {
        return Err(Error::Dimension(format!(
            "{what} has length {}, expected {d}",
            xs.len()
        )));
    }
    Ok(DVector::from_row_slice(xs))
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::Io(format!("{}: {e}", path.display())))?;
        serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn apply(&mut self, args: &CommonArgs) {
        if let Some(s) = args.seed {
            self.seed = s;
        }
        if let Some(r) = args.replicas {
            self.replicas = r;
        }
        if let Some(o) = &args.out {
            self.output = o.clone();
        }
    }

    /// Fill every defaulted field from the system so that the emitted
    /// configuration reproduces the run without relying on defaults.
    pub fn resolve(&mut self) -> Result<Built> {
        if !(self.horizon > 0.0 && self.horizon.is_finite()) {
            return Err(Error::InvalidParameter(format!(
                "horizon must be positive, got {}",
                self.horizon
            )));
        }
        if self.replicas == 0 {
            return Err(Error::InvalidParameter("replicas must be positive".into()));
        }
        let mut built = self.system.build()?;
        let d = built.spec.dim();
        let c = &mut self.coupling;
        let p = &mut built.policy;
        if let Some(x) = &c.x_hat {
            p.x_hat = vector(x, d, "coupling.x_hat")?;
        }
        if let Some(r) = c.r {
            p.r = r;
        }
        if let Some(m) = c.m {
            p.m = m;
        }
        if let Some(h) = c.hit_mode {
            p.hit_mode = h;
        }
        if let Some(s) = c.shooting {
            p.shooting = s;
        }
        let rate = built.spec.noise.total_rate();
        p.compact_radius = match (c.compact_radius, self.check.dissipativity.or(built.dissipativity)) {
            (Some(radius), _) => radius,
            (None, Some((alpha, beta))) => p.clone().with_lyapunov_radius(alpha, beta, rate).compact_radius,
            (None, None) => p.x_hat.norm() + p.r,
        };
        *c = CouplingConfig {
            x_hat: Some(p.x_hat.iter().copied().collect()),
            r: Some(p.r),
            m: Some(p.m),
            hit_mode: Some(p.hit_mode),
            shooting: Some(p.shooting),
            compact_radius: Some(p.compact_radius),
        };
        match &self.x0 {
            Some(x) => built.x0 = vector(x, d, "x0")?,
            None => self.x0 = Some(built.x0.iter().copied().collect()),
        }
        match &self.x0_prime {
            Some(x) => built.x0_prime = vector(x, d, "x0_prime")?,
            None => self.x0_prime = Some(built.x0_prime.iter().copied().collect()),
        }
        if self.times.is_none() {
            let n = self.grid_points.max(2);
            self.times = Some((0..n).map(|i| self.horizon * i as f64 / (n - 1) as f64).collect());
        }
        if self
            .times
            .as_ref()
            .is_some_and(|t| t.iter().any(|&t| !(t >= 0.0 && t.is_finite())))
        {
            return Err(Error::InvalidParameter(
                "observation times must be finite and nonnegative".into(),
            ));
        }
        if self.check.dissipativity.is_none() {
            self.check.dissipativity = built.dissipativity;
        }
        if self.check.s_hat.is_none() {
            self.check.s_hat = Some(vec![1.0; built.policy.m]);
        }
        Ok(built)
    }

    pub fn times(&self) -> &[f64] {
        self.times.as_deref().unwrap_or(&[])
    }
}

/// Exit code for an error: 2 for numerical failures, 1 otherwise.
pub fn exit_code(e: &Error) -> i32 {
    if e.is_numeric() {
        2
    } else {
        1
    }
}

/// Parse `argv`, run the subcommand and return the process exit code.
pub fn main_with_args<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match run(cli.command, &cli.common) {
        Ok(dir) => {
            eprintln!("{}: wrote {}", cli.command.name(), dir.display());
            0
        }
        Err(e) => {
            eprintln!("{}: {e}", cli.command.name());
            exit_code(&e)
        }
    }
}

/// Run one subcommand and return the output directory.
pub fn run(command: Command, args: &CommonArgs) -> Result<PathBuf> {
    let mut cfg = match &args.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    cfg.apply(args);
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Some(t) = args.threads {
        if t == 0 {
            return Err(Error::InvalidParameter("--threads must be positive".into()));
        }
        builder = builder.num_threads(t);
    }
    let pool = builder.build().map_err(|e| Error::Config(e.to_string()))?;
    pool.install(|| execute(command, cfg))
}

/// Run a subcommand on an already loaded configuration.
pub fn execute(command: Command, mut cfg: ExperimentConfig) -> Result<PathBuf> {
    let built = if command == Command::Network {
        None
    } else {
        Some(cfg.resolve()?)
    };
    let out = cfg.output.clone();
    fs::create_dir_all(&out)?;
    write_json(&out.join("resolved_config.json"), &cfg)?;
    match (command, built) {
        (Command::Network, _) => run_network(&cfg, &out)?,
        (Command::Simulate, Some(b)) => run_simulate(&cfg, &b, &out)?,
        (Command::Couple, Some(b)) => run_couple(&cfg, &b, &out)?,
        (Command::Mixing, Some(b)) => run_mixing(&cfg, &b, &out)?,
        (Command::Check, Some(b)) => run_check(&cfg, &b, &out)?,
        (Command::GalerkinSteer, Some(b)) => run_steer(&cfg, &b, &out)?,
        _ => unreachable!("every other command resolves a system"),
    }
    Ok(out)
}

fn fmt(x: f64) -> String {
    format!("{x:.16e}")
}

fn fmt_opt(x: Option<f64>) -> String {
    x.map(fmt).unwrap_or_default()
}

fn idx_opt(x: Option<usize>) -> String {
    x.map(|v| v.to_string()).unwrap_or_default()
}

fn write_csv(path: &Path, header: &[String], rows: &[Vec<String>]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(header)?;
    for r in rows {
        w.write_record(r)?;
    }
    w.flush()?;
    Ok(())
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut f = fs::File::create(path)?;
    serde_json::to_writer_pretty(&mut f, value)?;
    f.write_all(b"\n")?;
    Ok(())
}

fn headers(fixed: &[&str], prefix: &str, d: usize) -> Vec<String> {
    fixed
        .iter()
        .map(|s| s.to_string())
        .chain((1..=d).map(|i| format!("{prefix}{i}")))
        .collect()
}

#[derive(Serialize)]
struct SimulateSummary {
    moments: MomentReport,
    invariant: Option<InvariantSummary>,
}

fn run_simulate(cfg: &ExperimentConfig, b: &Built, out: &Path) -> Result<()> {
    let sc = &cfg.simulate;
    let d = b.spec.dim();
    let n_pts = sc.trajectory_points.max(2);
    let runs: Vec<(Vec<Vec<String>>, Vec<Vec<String>>)> = (0..sc.trajectories)
        .into_par_iter()
        .map(|r| {
            let mut rng = stream(cfg.seed, Purpose::Path, r as u64);
            let traj = simulate(&b.spec, &b.x0, cfg.horizon, &mut rng)?;
            let skeleton = (0..=traj.post_jump_states.len())
                .map(|k| {
                    let tau = if k == 0 { 0.0 } else { traj.path.jump_times[k - 1] };
                    let mut row = vec![r.to_string(), k.to_string(), fmt(tau)];
                    row.extend(traj.embedded(k).iter().map(|v| fmt(*v)));
                    row
                })
                .collect();
            let dense = (0..n_pts)
                .map(|i| {
                    let t = cfg.horizon * i as f64 / (n_pts - 1) as f64;
                    let x = traj.state_at(t)?;
                    let mut row = vec![r.to_string(), fmt(t)];
                    row.extend(x.iter().map(|v| fmt(*v)));
                    Ok(row)
                })
                .collect::<Result<_>>()?;
            Ok((skeleton, dense))
        })
        .collect::<Result<_>>()?;
    let (skeleton, dense): (Vec<_>, Vec<_>) = runs.into_iter().unzip();
    let skeleton: Vec<Vec<String>> = skeleton.into_iter().flatten().collect();
    let dense: Vec<Vec<String>> = dense.into_iter().flatten().collect();
    write_csv(
        &out.join("trajectories.csv"),
        &headers(&["replica", "k", "tau_k"], "x_", d),
        &skeleton,
    )?;
    write_csv(&out.join("paths.csv"), &headers(&["replica", "t"], "x_", d), &dense)?;

    let moments = empirical_moment(&b.spec, &b.x0, sc.k_max, cfg.times(), cfg.replicas.max(2), cfg.seed)?;
    for (file, col, pts) in [
        ("embedded_moments.csv", "k", &moments.embedded),
        ("moments.csv", "t", &moments.continuous),
    ] {
        let rows: Vec<Vec<String>> = pts
            .iter()
            .map(|p| vec![fmt(p.at), fmt(p.estimate), fmt(p.stderr)])
            .collect();
        write_csv(&out.join(file), &headers(&[col, "estimate", "stderr"], "", 0), &rows)?;
    }

    let invariant = match &sc.invariant {
        Some(s) => {
            let ic = InvariantConfig {
                burn_in: s.burn_in,
                samples: s.samples,
                spacing: s.spacing,
                replicas: cfg.replicas.max(2),
                seed: cfg.seed,
                bins: s.bins,
            };
            let summary = invariant_estimate(&b.spec, &b.x0, &ic)?;
            let mut rows = Vec::new();
            for hgram in &summary.histograms {
                for (j, dens) in hgram.density.iter().enumerate() {
                    rows.push(vec![
                        hgram.coordinate.to_string(),
                        fmt(hgram.edges[j]),
                        fmt(hgram.edges[j + 1]),
                        fmt(*dens),
                    ]);
                }
            }
            let h: Vec<String> = ["coordinate", "lo", "hi", "density"]
                .iter()
                .map(|s| s.to_string())
                .collect();
            write_csv(&out.join("invariant_histograms.csv"), &h, &rows)?;
            Some(summary)
        }
        None => None,
    };
    write_json(&out.join("summary.json"), &SimulateSummary { moments, invariant })
}

#[derive(Serialize)]
struct CoupleSummary {
    replicas: usize,
    censored_fraction: f64,
    consistent: bool,
    tail_fit: Option<MixingReport>,
    tail_fit_error: Option<String>,
}

fn tail_rows(curve: &[crate::diagnostics::CurvePoint]) -> Vec<Vec<String>> {
    curve
        .iter()
        .map(|p| vec![fmt(p.t), fmt(p.value), fmt(p.stderr)])
        .collect()
}

fn split_fit(r: Result<MixingReport>) -> Result<(Option<MixingReport>, Option<String>)> {
    match r {
        Ok(rep) => Ok((Some(rep), None)),
        Err(e @ Error::Domain(_)) => Ok((None, Some(e.to_string()))),
        Err(e) => Err(e),
    }
}

fn run_couple(cfg: &ExperimentConfig, b: &Built, out: &Path) -> Result<()> {
    let runs = run_coupling_batch(
        &b.spec,
        &b.policy,
        &b.x0,
        &b.x0_prime,
        cfg.horizon,
        &[],
        cfg.replicas,
        cfg.seed,
    )?;
    let records: Vec<_> = runs.into_iter().map(|r| r.0).collect();
    let rows: Vec<Vec<String>> = records
        .iter()
        .enumerate()
        .map(|(n, r)| {
            vec![
                n.to_string(),
                idx_opt(r.i),
                idx_opt(r.j),
                idx_opt(r.k),
                fmt_opt(r.tau_k),
                fmt_opt(r.t),
                r.censored.to_string(),
                r.branches.len().to_string(),
                r.solver_fallbacks.to_string(),
            ]
        })
        .collect();
    let h: Vec<String> = [
        "replica",
        "I",
        "J",
        "K",
        "tau_K",
        "T",
        "censored",
        "blocks",
        "solver_fallbacks",
    ]
    .iter()
    .map(|s| s.to_string())
    .collect();
    write_csv(&out.join("records.csv"), &h, &rows)?;
    let tail = survival_curve(&records, cfg.times());
    let h: Vec<String> = ["t", "survival", "stderr"].iter().map(|s| s.to_string()).collect();
    write_csv(&out.join("tail.csv"), &h, &tail_rows(&tail))?;
    let (tail_fit, tail_fit_error) = split_fit(survival_fit(&records, cfg.times()))?;
    write_json(
        &out.join("summary.json"),
        &CoupleSummary {
            replicas: records.len(),
            censored_fraction: records.iter().filter(|r| r.censored).count() as f64 / records.len() as f64,
            consistent: records.iter().all(|r| r.is_consistent()),
            tail_fit,
            tail_fit_error,
        },
    )
}

#[derive(Serialize)]
struct MixingSummary {
    /// Fit of the coupling tail `P{T > t}`.
    report: Option<MixingReport>,
    report_error: Option<String>,
    /// Fit of the histogram TV curve.
    tv_fit: Option<MixingReport>,
    tv_fit_error: Option<String>,
    /// Largest `tv - tail - 2 * stderr` over the grid.
    worst_excess: f64,
    coupling_inequality_holds: bool,
}

fn run_mixing(cfg: &ExperimentConfig, b: &Built, out: &Path) -> Result<()> {
    let curves = coupling_curves(
        &b.spec,
        &b.policy,
        &b.x0,
        &b.x0_prime,
        cfg.horizon,
        cfg.times(),
        cfg.replicas,
        cfg.seed,
        cfg.mixing.bins,
    )?;
    let rows: Vec<Vec<String>> = curves
        .tv
        .iter()
        .zip(&curves.survival)
        .map(|(a, s)| vec![fmt(a.t), fmt(a.value), fmt(a.stderr), fmt(s.value), fmt(s.stderr)])
        .collect();
    let h: Vec<String> = ["t", "tv", "tv_stderr", "survival", "survival_stderr"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    write_csv(&out.join("curve.csv"), &h, &rows)?;
    let (report, report_error) = split_fit(survival_fit(&curves.records, cfg.times()))?;
    let (tv_fit, tv_fit_error) = split_fit(mixing_fit(&curves.tv))?;
    let worst_excess = curves.worst_excess();
    write_json(
        &out.join("mixing_report.json"),
        &MixingSummary {
            report,
            report_error,
            tv_fit,
            tv_fit_error,
            worst_excess,
            coupling_inequality_holds: worst_excess <= 0.0,
        },
    )
}

#[derive(Serialize)]
struct CheckSummary {
    dissipativity: Option<DissipativityReport>,
    kalman: RankCertificate,
    hormander: RankCertificate,
    solid: RankCertificate,
}

fn run_check(cfg: &ExperimentConfig, b: &Built, out: &Path) -> Result<()> {
    let cc = &cfg.check;
    let f = &b.spec.field;
    let d = b.spec.dim();
    let x_hat = &b.policy.x_hat;
    let dissipativity = match cc.dissipativity {
        Some((alpha, beta)) => {
            let mut rng = stream(cfg.seed, Purpose::Other, 0);
            let samples: Vec<DVector<f64>> = (0..cc.dissipativity_samples)
                .map(|_| DVector::from_fn(d, |_, _| rng.random_range(-cc.sample_radius..=cc.sample_radius)))
                .collect();
            Some(check_dissipativity(f, alpha, beta, &samples))
        }
        None => None,
    };
    let kalman = kalman_rank(&jacobian(f, x_hat), &b.spec.b)?;
    let hormander = hormander_tower(f, &b.spec.b, x_hat, cc.max_gen, cc.rel_tol)?;
    let s_hat = cc.s_hat.clone().unwrap_or_else(|| vec![1.0; b.policy.m]);
    let solid = solid_cert(&b.spec, x_hat, s_hat.len(), &s_hat, cc.probes, cfg.seed)?;
    let rows: Vec<Vec<String>> = [&kalman, &hormander, &solid]
        .iter()
        .map(|c| {
            vec![
                c.kind.clone(),
                format!("{:?}", c.verdict).to_lowercase(),
                c.dimension_reached.to_string(),
                c.target_dim.to_string(),
                fmt(c.tolerance),
            ]
        })
        .collect();
    let h: Vec<String> = ["kind", "verdict", "dimension_reached", "target_dim", "tolerance"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    write_csv(&out.join("certificates.csv"), &h, &rows)?;
    write_json(
        &out.join("certificates.json"),
        &CheckSummary {
            dissipativity,
            kalman,
            hormander,
            solid,
        },
    )
}

#[derive(Serialize)]
struct SteerOutcome {
    target: Vec<f64>,
    endpoint: Vec<f64>,
    achieved_error: f64,
    horizon: f64,
    rounds: usize,
    converged: bool,
}

/// Uniform in the ball of radius `radius`.
fn ball_point(rng: &mut impl Rng, d: usize, radius: f64) -> DVector<f64> {
    let g = DVector::from_fn(d, |_, _| StandardNormal.sample(rng));
    let r = radius * rng.random::<f64>().powf(1.0 / d as f64);
    g.normalize() * r
}

fn run_steer(cfg: &ExperimentConfig, b: &Built, out: &Path) -> Result<()> {
    let sys = b
        .galerkin
        .as_ref()
        .ok_or_else(|| Error::Config("galerkin-steer needs a galerkin system".into()))?;
    let model = Galerkin::new(sys.clone())?;
    let sc = &cfg.steer;
    let d = model.dim();
    let u0 = match &sc.u0 {
        Some(u) => vector(u, d, "steer.u0")?,
        None => DVector::zeros(d),
    };
    let results: Vec<(DVector<f64>, crate::galerkin::SteeringResult)> = (0..sc.targets)
        .into_par_iter()
        .map(|i| {
            let mut rng = stream(cfg.seed, Purpose::Steering, i as u64);
            let target = ball_point(&mut rng, d, sc.target_radius);
            let sconf = SteeringConfig {
                seed: cfg.seed.wrapping_add(i as u64),
                ..sc.steering
            };
            let res = synthesize_steering(&model, &u0, &target, sc.eps, sc.time_budget, &sconf)?;
            Ok((target, res))
        })
        .collect::<Result<_>>()?;
    let mut rows = Vec::new();
    let mut ctrl_rows = Vec::new();
    let h1 = model.h1_dim();
    for (i, (_, r)) in results.iter().enumerate() {
        rows.push(vec![
            i.to_string(),
            fmt(r.achieved_error),
            fmt(r.horizon()),
            r.rounds.to_string(),
            r.converged.to_string(),
        ]);
        if let Some(c) = &r.control {
            for (t, v) in c.breakpoints().iter().zip(c.values()) {
                let mut row = vec![i.to_string(), fmt(*t)];
                row.extend(v.iter().map(|x| fmt(*x)));
                ctrl_rows.push(row);
            }
        }
    }
    let h: Vec<String> = ["target", "achieved_error", "horizon", "rounds", "converged"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    write_csv(&out.join("steering.csv"), &h, &rows)?;
    write_csv(
        &out.join("controls.csv"),
        &headers(&["target", "t"], "zeta_", h1),
        &ctrl_rows,
    )?;
    let outcomes: Vec<SteerOutcome> = results
        .iter()
        .map(|(t, r)| SteerOutcome {
            target: t.iter().copied().collect(),
            endpoint: r.endpoint.iter().copied().collect(),
            achieved_error: r.achieved_error,
            horizon: r.horizon(),
            rounds: r.rounds,
            converged: r.converged,
        })
        .collect();
    write_json(&out.join("summary.json"), &outcomes)
}

#[derive(Serialize)]
struct NetworkSummary {
    network: NetworkSpec,
    langevin_dim: usize,
    semimarkov_dim: Option<usize>,
    conditions: crate::network::ConditionReport,
}

fn run_network(cfg: &ExperimentConfig, out: &Path) -> Result<()> {
    let nc = &cfg.network;
    let nw = match &nc.spec {
        Some(s) => s.clone(),
        None => NetworkSpec::chain(nc.chain_length, nc.chain_gamma)?,
    };
    nw.validate()?;
    let n = nw.size();
    let dir = match &nc.ray_direction {
        Some(v) => vector(v, n, "network.ray_direction")?,
        None => DVector::from_element(n, 1.0),
    };
    let conditions = check_conditions(&nw, &ray(&dir, nc.ray_scale, nc.ray_points))?;
    let langevin = build_langevin(&nw)?;
    let semimarkov_dim = if nw.lambda.is_empty() {
        None
    } else {
        Some(build_semimarkov(&nw)?.dim())
    };
    let a = langevin_matrix(&nw);
    let rows: Vec<Vec<String>> = a
        .row_iter()
        .enumerate()
        .map(|(i, r)| {
            let mut row = vec![i.to_string()];
            row.extend(r.iter().map(|x| fmt(*x)));
            row
        })
        .collect();
    write_csv(
        &out.join("langevin_matrix.csv"),
        &headers(&["row"], "col_", a.ncols()),
        &rows,
    )?;
    write_json(
        &out.join("network.json"),
        &NetworkSummary {
            network: nw,
            langevin_dim: langevin.dim(),
            semimarkov_dim,
            conditions,
        },
    )
}

//! Rank certificates for controllability: the Kalman matrix, Lie brackets,
//! the bracket tower at a point and a sampled block-Jacobian test.

use std::cmp::Ordering;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dynamics::VectorField;
use crate::error::{Error, Result};
use crate::linalg::{hstack, orthonormal_span, rank_with_tol, relative_tol, residual_against, singular_values};
use crate::noise::Density;
use crate::pdmp::{block_jacobian, SystemSpec};
use crate::rng::{stream, Purpose};

/// Default relative singular-value cutoff for bracket towers.
pub const DEFAULT_REL_TOL: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Verdict {
    Pass,
    Fail,
    /// No full-rank witness was found, which does not disprove the property.
    Inconclusive,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankCertificate {
    pub kind: String,
    pub point: Vec<f64>,
    pub dimension_reached: usize,
    pub target_dim: usize,
    pub generations_used: usize,
    /// Span dimension after each generation (generation 0 first).
    pub generation_dims: Vec<usize>,
    pub singular_values: Vec<f64>,
    pub tolerance: f64,
    pub verdict: Verdict,
    /// For sampled certificates: the flattened jumps of the best probe.
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub witness: Option<Vec<f64>>,
}

impl RankCertificate {
    pub fn passed(&self) -> bool {
        self.verdict == Verdict::Pass
    }
}

/// `[B, AB, .., A^{d-1} B]`.
pub fn kalman_matrix(a: &DMatrix<f64>, b: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let d = a.nrows();
    if !a.is_square() || b.nrows() != d {
        return Err(Error::Dimension(format!(
            "A is {}x{}, B is {}x{}",
            a.nrows(),
            a.ncols(),
            b.nrows(),
            b.ncols()
        )));
    }
    let mut blocks = Vec::with_capacity(d);
    let mut cur = b.clone();
    for _ in 0..d {
        let next = a * &cur;
        blocks.push(cur);
        cur = next;
    }
    Ok(hstack(&blocks, d))
}

/// Numeric rank of the Kalman matrix with cutoff `d * sigma_max * eps * 1e3`.
pub fn kalman_rank(a: &DMatrix<f64>, b: &DMatrix<f64>) -> Result<RankCertificate> {
    let d = a.nrows();
    let k = kalman_matrix(a, b)?;
    let sv = singular_values(&k);
    let tol = d as f64 * sv.first().copied().unwrap_or(0.0) * f64::EPSILON * 1e3;
    let rank = if sv.first().copied().unwrap_or(0.0) == 0.0 {
        0
    } else {
        rank_with_tol(&sv, tol)
    };
    Ok(RankCertificate {
        kind: "kalman".into(),
        point: Vec::new(),
        dimension_reached: rank,
        target_dim: d,
        generations_used: d.saturating_sub(1),
        generation_dims: Vec::new(),
        singular_values: sv,
        tolerance: tol,
        verdict: if rank == d { Verdict::Pass } else { Verdict::Fail },
        witness: None,
    })
}

/// `[U, V](x) = DV(x) U(x) - DU(x) V(x)`.
pub fn lie_bracket(u: &VectorField, v: &VectorField, x: &DVector<f64>) -> DVector<f64> {
    v.jacobian(x) * u.eval(x) - u.jacobian(x) * v.eval(x)
}

/// Symbolic iterated brackets of a field `f` with constant fields `b_i`.
///
/// Every bracket word expands by the chain rule into a linear combination of
/// terms `D^k f(x)[t_1, .., t_k]` whose arguments are again terms or
/// constants. Arguments are kept sorted (higher derivatives are symmetric),
/// so equal terms merge and exact cancellations are caught symbolically.
mod words {
    use super::*;

    #[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
    pub enum Term {
        B(usize),
        F(Vec<Term>),
    }

    /// Linear combination of terms, sorted and merged.
    #[derive(Debug, Clone, PartialEq)]
    pub struct Expr(pub Vec<(f64, Term)>);

    fn canon(t: Term) -> Term {
        match t {
            Term::B(i) => Term::B(i),
            Term::F(mut args) => {
                args.sort();
                Term::F(args)
            }
        }
    }

    impl Expr {
        pub fn constant(i: usize) -> Self {
            Expr(vec![(1.0, Term::B(i))])
        }

        pub fn field() -> Self {
            Expr(vec![(1.0, Term::F(Vec::new()))])
        }

        pub fn normalize(mut terms: Vec<(f64, Term)>) -> Self {
            terms = terms.into_iter().map(|(c, t)| (c, canon(t))).collect();
            terms.sort_by(|a, b| a.1.cmp(&b.1));
            let mut out: Vec<(f64, Term)> = Vec::with_capacity(terms.len());
            for (c, t) in terms {
                match out.last_mut() {
                    Some((c0, t0)) if *t0 == t => *c0 += c,
                    _ => out.push((c, t)),
                }
            }
            out.retain(|(c, _)| *c != 0.0);
            Expr(out)
        }

        pub fn is_zero(&self) -> bool {
            self.0.is_empty()
        }

        /// Structural key used to drop duplicate words (up to sign and scale).
        pub fn shape_key(&self) -> Vec<Term> {
            self.0.iter().map(|(_, t)| t.clone()).collect()
        }
    }

    /// Derivative of a single term in the direction of the field `u`.
    fn d_term(t: &Term, u: &Expr) -> Vec<(f64, Term)> {
        match t {
            Term::B(_) => Vec::new(),
            Term::F(args) => {
                let mut out = Vec::new();
                for (c, ut) in &u.0 {
                    let mut a = Vec::with_capacity(args.len() + 1);
                    a.push(ut.clone());
                    a.extend(args.iter().cloned());
                    out.push((*c, Term::F(a)));
                }
                for (i, arg) in args.iter().enumerate() {
                    for (c, dt) in d_term(arg, u) {
                        let mut a = args.clone();
                        a[i] = dt;
                        out.push((c, Term::F(a)));
                    }
                }
                out
            }
        }
    }

    /// `D_u v`.
    fn d_expr(v: &Expr, u: &Expr) -> Vec<(f64, Term)> {
        let mut out = Vec::new();
        for (c, t) in &v.0 {
            for (c2, t2) in d_term(t, u) {
                out.push((c * c2, t2));
            }
        }
        out
    }

    /// `[u, v] = D_u v - D_v u`.
    pub fn bracket(u: &Expr, v: &Expr) -> Expr {
        let mut terms = d_expr(v, u);
        terms.extend(d_expr(u, v).into_iter().map(|(c, t)| (-c, t)));
        Expr::normalize(terms)
    }

    pub fn eval_term(t: &Term, f: &VectorField, cols: &[DVector<f64>], x: &DVector<f64>) -> DVector<f64> {
        match t {
            Term::B(i) => cols[*i].clone(),
            Term::F(args) => {
                let dirs: Vec<DVector<f64>> = args.iter().map(|a| eval_term(a, f, cols, x)).collect();
                f.derivative(x, &dirs)
            }
        }
    }

    /// Value and the sum of absolute term magnitudes (a cancellation scale).
    pub fn eval(e: &Expr, f: &VectorField, cols: &[DVector<f64>], x: &DVector<f64>) -> (DVector<f64>, f64) {
        let mut acc = DVector::zeros(x.len());
        let mut scale = 0.0;
        for (c, t) in &e.0 {
            let v = eval_term(t, f, cols, x) * *c;
            scale += v.norm();
            acc += v;
        }
        (acc, scale)
    }
}

pub use words::Expr as BracketExpr;

/// Settings for [`hormander_tower_with`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TowerConfig {
    pub max_gen: usize,
    /// Relative singular-value cutoff.
    pub rel_tol: f64,
    /// A bracket whose value is below `zero_tol` times its term scale is
    /// treated as an exact cancellation.
    pub zero_tol: f64,
    /// Cap on the number of words carried to the next generation.
    pub max_frontier: usize,
}

impl Default for TowerConfig {
    fn default() -> Self {
        Self {
            max_gen: 6,
            rel_tol: DEFAULT_REL_TOL,
            zero_tol: 1e-10,
            max_frontier: 4096,
        }
    }
}

/// Span of `{b, [v_1, [v_2, .., [v_k, f]..]]}` at `x_hat`, with `b` ranging
/// over the columns of `B` and `v_i` over those columns and `f`. Generation
/// `k` adds the words of depth `k`.
pub fn hormander_tower(
    f: &VectorField,
    b: &DMatrix<f64>,
    x_hat: &DVector<f64>,
    max_gen: usize,
    tol: f64,
) -> Result<RankCertificate> {
    hormander_tower_with(
        f,
        b,
        x_hat,
        &TowerConfig {
            max_gen,
            rel_tol: tol,
            ..TowerConfig::default()
        },
    )
}

pub fn hormander_tower_with(
    f: &VectorField,
    b: &DMatrix<f64>,
    x_hat: &DVector<f64>,
    cfg: &TowerConfig,
) -> Result<RankCertificate> {
    let d = f.dim();
    if b.nrows() != d || x_hat.len() != d {
        return Err(Error::Dimension("B, field and point disagree on dimension".into()));
    }
    if cfg.max_gen == 0 {
        return Err(Error::InvalidParameter("max_gen must be at least 1".into()));
    }
    let q = orthonormal_span(b, cfg.rel_tol);
    let cols: Vec<DVector<f64>> = (0..q.ncols()).map(|i| q.column(i).into_owned()).collect();

    let mut basis = q.clone();
    let mut accepted: Vec<DVector<f64>> = cols.clone();
    let mut dims = vec![basis.ncols()];
    let mut seen = std::collections::HashSet::new();
    let mut frontier: Vec<words::Expr> = vec![words::Expr::field()];
    let generators: Vec<words::Expr> = (0..cols.len()).map(words::Expr::constant).collect();
    let mut gens_used = 0;

    for gen in 1..=cfg.max_gen {
        if basis.ncols() == d {
            break;
        }
        gens_used = gen;
        let mut next = Vec::new();
        for w in &frontier {
            let mut apply = |v: &words::Expr| {
                let e = words::bracket(v, w);
                if !e.is_zero() && seen.insert(e.shape_key()) {
                    next.push(e);
                }
            };
            for g in &generators {
                apply(g);
            }
            // [f, f] = 0, so f only brackets against deeper words.
            if gen > 1 {
                apply(&words::Expr::field());
            }
        }
        let values: Vec<(DVector<f64>, f64)> = next.par_iter().map(|e| words::eval(e, f, &cols, x_hat)).collect();
        let mut keep = Vec::new();
        for (e, (val, scale)) in next.into_iter().zip(values) {
            let norm = val.norm();
            if !norm.is_finite() {
                return Err(Error::Numeric("non-finite bracket value".into()));
            }
            // A word vanishing at the point still brackets into nonzero words.
            keep.push(e);
            if norm <= cfg.zero_tol * scale.max(f64::MIN_POSITIVE) || norm == 0.0 {
                continue;
            }
            let unit = val / norm;
            let resid = residual_against(&basis, &unit);
            if resid.norm() > cfg.rel_tol.sqrt() {
                accepted.push(unit);
                let mat = hstack(
                    &accepted
                        .iter()
                        .map(|c| DMatrix::from_column_slice(d, 1, c.as_slice()))
                        .collect::<Vec<_>>(),
                    d,
                );
                basis = orthonormal_span(&mat, cfg.rel_tol);
            }
        }
        dims.push(basis.ncols());
        if keep.len() > cfg.max_frontier {
            keep.truncate(cfg.max_frontier);
        }
        frontier = keep;
        if frontier.is_empty() {
            break;
        }
    }

    let mat = hstack(
        &accepted
            .iter()
            .map(|c| DMatrix::from_column_slice(d, 1, c.as_slice()))
            .collect::<Vec<_>>(),
        d,
    );
    let sv = singular_values(&mat);
    let tol = relative_tol(&sv, cfg.rel_tol);
    let rank = rank_with_tol(&sv, tol);
    Ok(RankCertificate {
        kind: "hormander".into(),
        point: x_hat.iter().copied().collect(),
        dimension_reached: rank,
        target_dim: d,
        generations_used: gens_used,
        generation_dims: dims,
        singular_values: sv,
        tolerance: tol,
        verdict: if rank == d { Verdict::Pass } else { Verdict::Fail },
        witness: None,
    })
}

/// Evaluate the right-normed bracket `[v_1, [v_2, .., [v_k, f]..]]` at `x`,
/// where each `v_i` is a constant field given by its vector.
pub fn constant_bracket_chain(f: &VectorField, vs: &[DVector<f64>], x: &DVector<f64>) -> DVector<f64> {
    let mut e = words::Expr::field();
    for i in (0..vs.len()).rev() {
        e = words::bracket(&words::Expr::constant(i), &e);
    }
    words::eval(&e, f, vs, x).0
}

/// Sampled rank test of `D_xi F_m(x_hat, s_hat, .)`: passes as soon as one
/// probe has full rank `d`, otherwise the verdict is inconclusive.
pub fn solid_cert(
    spec: &SystemSpec,
    x_hat: &DVector<f64>,
    m: usize,
    s_hat: &[f64],
    probes: usize,
    seed: u64,
) -> Result<RankCertificate> {
    let (d, n) = (spec.dim(), spec.noise_dim());
    if s_hat.len() != m {
        return Err(Error::Dimension(format!("need {m} waiting times, got {}", s_hat.len())));
    }
    if probes == 0 {
        return Err(Error::InvalidParameter("need at least one probe".into()));
    }
    let point: Vec<f64> = x_hat.iter().copied().collect();
    if m * n < d {
        return Ok(RankCertificate {
            kind: "solid".into(),
            point,
            dimension_reached: m * n,
            target_dim: d,
            generations_used: m,
            generation_dims: Vec::new(),
            singular_values: Vec::new(),
            tolerance: 0.0,
            verdict: Verdict::Fail,
            witness: None,
        });
    }
    let results: Vec<(usize, f64, Vec<f64>, f64, Vec<f64>)> = (0..probes)
        .into_par_iter()
        .map(|i| {
            let mut rng = stream(seed, Purpose::Probe, i as u64);
            let xi: Vec<DVector<f64>> = (0..m)
                .map(|_| match spec.noise.jump_law() {
                    Some(law) => law.sample(&mut rng),
                    None => crate::noise::JumpLaw::standard_gaussian(n).sample(&mut rng),
                })
                .collect();
            let jac = block_jacobian(spec, x_hat, s_hat, &xi)?;
            let sv = singular_values(&jac);
            let tol = relative_tol(&sv, DEFAULT_REL_TOL);
            let rank = if sv.first().copied().unwrap_or(0.0) == 0.0 {
                0
            } else {
                rank_with_tol(&sv, tol)
            };
            // Conditioning of the retained spectrum ranks equally good probes.
            let quality = if rank == 0 { 0.0 } else { sv[rank - 1] / sv[0] };
            let flat = xi.iter().flat_map(|v| v.iter().copied()).collect();
            Ok((rank, quality, sv, tol, flat))
        })
        .collect::<Result<_>>()?;
    let best = results
        .into_iter()
        .max_by(|a, b| a.0.cmp(&b.0).then(a.1.partial_cmp(&b.1).unwrap_or(Ordering::Equal)))
        .expect("probes > 0");
    let (rank, _, sv, tol, flat) = best;
    Ok(RankCertificate {
        kind: "solid".into(),
        point,
        dimension_reached: rank,
        target_dim: d,
        generations_used: m,
        generation_dims: Vec::new(),
        singular_values: sv,
        tolerance: tol,
        verdict: if rank == d {
            Verdict::Pass
        } else {
            Verdict::Inconclusive
        },
        witness: Some(flat),
    })
}

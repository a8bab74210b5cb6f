//! Ready-made systems with matching coupling policies and start points.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::coupling::{CouplingPolicy, HitMode};
use crate::dynamics::VectorField;
use crate::galerkin::{build_field, Galerkin, GalerkinSystem, Perturbation};
use crate::network::{build_langevin, NetworkSpec};
use crate::noise::JumpLaw;
use crate::pdmp::SystemSpec;
use crate::Result;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Preset {
    /// `dx = -x/2 dt + dY`, unit rate, standard Gaussian jumps.
    Linear,
    /// `dx = (-x - x^3) dt + dY`.
    Cubic,
    /// Damped oscillator with cubic friction, kicked in the velocity only.
    Oscillator,
    /// Galerkin truncation with `D = 1`, `N = 2`, `p = 3`, forced on `H_1`.
    Galerkin,
    /// Two-mass harmonic chain kicked at both ends.
    Chain,
}

impl Preset {
    pub const ALL: [Preset; 5] = [
        Preset::Linear,
        Preset::Cubic,
        Preset::Oscillator,
        Preset::Galerkin,
        Preset::Chain,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Preset::Linear => "linear",
            Preset::Cubic => "cubic",
            Preset::Oscillator => "oscillator",
            Preset::Galerkin => "galerkin",
            Preset::Chain => "chain",
        }
    }

    pub fn build(self) -> Result<GalleryEntry> {
        match self {
            Preset::Linear => {
                let policy = CouplingPolicy::new(v(&[0.0]), 1.0, 1, HitMode::ExactDensity);
                Ok(GalleryEntry {
                    spec: linear_system(0.5, 1.0)?,
                    policy,
                    x0: v(&[2.0]),
                    x0_prime: v(&[-2.0]),
                    dissipativity: Some((0.5, 1e-9)),
                })
            }
            Preset::Cubic => Ok(GalleryEntry {
                spec: cubic_system()?,
                policy: CouplingPolicy::new(v(&[0.0]), 1.0, 1, HitMode::ExactDensity),
                x0: v(&[3.0]),
                x0_prime: v(&[-2.0]),
                dissipativity: Some((1.0, 1e-9)),
            }),
            Preset::Oscillator => Ok(GalleryEntry {
                spec: oscillator_system()?,
                policy: CouplingPolicy::new(v(&[0.0, 0.0]), 1.0, 2, HitMode::Shooting),
                x0: v(&[1.0, 0.0]),
                x0_prime: v(&[-1.0, 0.5]),
                dissipativity: Some((1.0, 1e-9)),
            }),
            Preset::Galerkin => {
                let sys = galerkin_preset();
                let spec = galerkin_system(&sys, 1.0, 1.0)?;
                let d = spec.dim();
                let mut x0 = DVector::zeros(d);
                x0[0] = 1.0;
                Ok(GalleryEntry {
                    policy: CouplingPolicy::new(DVector::zeros(d), 0.5, 2, HitMode::Shooting),
                    x0_prime: -&x0,
                    x0,
                    spec,
                    dissipativity: None,
                })
            }
            Preset::Chain => {
                // Both ends kick together, with one two-dimensional law.
                let baths = build_langevin(&NetworkSpec::chain(2, 1.0)?)?;
                let spec = SystemSpec::single(baths.field, baths.b, 1.0, JumpLaw::standard_gaussian(2))?;
                let d = spec.dim();
                Ok(GalleryEntry {
                    policy: CouplingPolicy::new(DVector::zeros(d), 1.0, 2, HitMode::Shooting),
                    x0: DVector::from_element(d, 0.5),
                    x0_prime: DVector::from_element(d, -0.5),
                    spec,
                    dissipativity: None,
                })
            }
        }
    }
}

/// A system with everything needed to couple two copies of it.
#[derive(Debug, Clone)]
pub struct GalleryEntry {
    pub spec: SystemSpec,
    pub policy: CouplingPolicy,
    pub x0: DVector<f64>,
    pub x0_prime: DVector<f64>,
    /// `(alpha, beta)` with `(f(x), x) <= -alpha |x|^2 + beta`, when the
    /// field is dissipative in the Euclidean norm.
    pub dissipativity: Option<(f64, f64)>,
}

fn v(xs: &[f64]) -> DVector<f64> {
    DVector::from_row_slice(xs)
}

/// `dx = -alpha x dt + dY` in one dimension with jump rate `rate` and
/// standard Gaussian jumps.
pub fn linear_system(alpha: f64, rate: f64) -> Result<SystemSpec> {
    SystemSpec::single(
        VectorField::linear(DMatrix::from_element(1, 1, -alpha)),
        DMatrix::identity(1, 1),
        rate,
        JumpLaw::standard_gaussian(1),
    )
}

pub fn cubic_system() -> Result<SystemSpec> {
    let f = VectorField::new(1, |x| v(&[-x[0] - x[0].powi(3)]))
        .with_jacobian(|x| DMatrix::from_element(1, 1, -1.0 - 3.0 * x[0] * x[0]));
    SystemSpec::single(f, DMatrix::identity(1, 1), 1.0, JumpLaw::standard_gaussian(1))
}

/// `q' = p - q`, `p' = -q - p - p^3`, jumps in `p` only. Degenerate noise,
/// but `(f(x), x) = -|x|^2 - p^4`.
pub fn oscillator_system() -> Result<SystemSpec> {
    let f = VectorField::new(2, |x| v(&[x[1] - x[0], -x[0] - x[1] - x[1].powi(3)]))
        .with_jacobian(|x| DMatrix::from_row_slice(2, 2, &[-1.0, 1.0, -1.0, -1.0 - 3.0 * x[1] * x[1]]));
    SystemSpec::single(
        f,
        DMatrix::from_row_slice(2, 1, &[0.0, 1.0]),
        1.0,
        JumpLaw::standard_gaussian(1),
    )
}

pub fn galerkin_preset() -> GalerkinSystem {
    GalerkinSystem::new(1, 2, 0.5, 1.0, 3, Perturbation::Zero)
}

/// The Galerkin field driven on `H_1` by Gaussian jumps of scale `sigma`.
pub fn galerkin_system(sys: &GalerkinSystem, rate: f64, sigma: f64) -> Result<SystemSpec> {
    let model = Galerkin::new(sys.clone())?;
    SystemSpec::single(
        build_field(sys)?,
        model.control_matrix(),
        rate,
        JumpLaw::Gaussian {
            dim: model.h1_dim(),
            sigma,
        },
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dynamics::check_dissipativity;
    use crate::rng::{stream, Purpose};
    use rand::Rng;

    #[test]
    fn every_preset_builds_and_validates() {
        for p in Preset::ALL {
            let e = p.build().unwrap();
            e.spec.validate().unwrap();
            e.policy.validate(&e.spec).unwrap();
            assert_eq!(e.x0.len(), e.spec.dim());
            assert_eq!(e.x0_prime.len(), e.spec.dim());
            assert!(e.policy.m * e.spec.noise_dim() >= e.spec.dim(), "{}", p.name());
        }
    }

    #[test]
    fn stated_dissipativity_constants_hold() {
        let mut rng = stream(3, Purpose::Other, 0);
        for p in Preset::ALL {
            let e = p.build().unwrap();
            let Some((alpha, beta)) = e.dissipativity else { continue };
            let d = e.spec.dim();
            let samples: Vec<DVector<f64>> = (0..2000)
                .map(|_| DVector::from_fn(d, |_, _| rng.random_range(-20.0..20.0)))
                .collect();
            assert!(
                check_dissipativity(&e.spec.field, alpha, beta, &samples).passed(),
                "{}",
                p.name()
            );
        }
    }

    #[test]
    fn preset_names_round_trip() {
        for p in Preset::ALL {
            let s = serde_json::to_string(&p).unwrap();
            assert_eq!(s, format!("\"{}\"", p.name()));
            assert_eq!(serde_json::from_str::<Preset>(&s).unwrap(), p);
        }
    }
}

//! Galerkin truncation of `u' = nu Lap u - u^3 + h` on the circle: the
//! subspace tower grown from the forced modes, and the scaling limit
//! `S_delta(u0, delta^{-1/3} phi, psi / delta) -> u0 + psi - P_N phi^3`.

use jumpmix::dynamics::IntegratorConfig;
use jumpmix::galerkin::{scaling_control_endpoint, subspace_tower, Galerkin, GalerkinSystem, Perturbation};
use jumpmix::rng::{stream, Purpose};
use nalgebra::DVector;
use rand::Rng;

pub fn run_example() -> Result<(), Box<dyn std::error::Error>> {
    let model = Galerkin::new(GalerkinSystem::new(1, 3, 0.5, 1.0, 3, Perturbation::Zero))?;
    println!(
        "H_N has dimension {}, forced H_1 has dimension {}",
        model.dim(),
        model.h1_dim()
    );
    for b in model.basis().iter().take(model.h1_dim()) {
        println!("  forced mode {b:?}, eigenvalue {}", b.eigenvalue());
    }

    let tower = subspace_tower(&model, 6);
    println!(
        "tower dimensions {:?}, full at generation {:?}",
        tower.dims, tower.full_at
    );

    let mut rng = stream(2, Purpose::Other, 0);
    let mut unit = |d: usize| DVector::from_fn(d, |_, _| rng.random_range(-1.0..1.0)).normalize();
    let d = model.dim();
    let (u0, psi) = (unit(d), unit(d));
    let mut phi = DVector::zeros(d);
    phi.rows_mut(0, model.h1_dim()).copy_from(&unit(model.h1_dim()));
    let limit = &u0 + &psi - model.power(&phi, 3);

    let cfg = IntegratorConfig::adaptive(1e-10, 1e-12);
    println!("{:>10} {:>12}", "delta", "error");
    for k in [2, 4, 6, 8, 10] {
        let delta = 2f64.powi(-k);
        let end = scaling_control_endpoint(&model, &u0, &phi, &psi, delta, &cfg)?;
        println!("{delta:10.2e} {:12.4e}", (end - &limit).norm());
    }
    Ok(())
}

#[allow(dead_code)]
fn main() -> Result<(), Box<dyn std::error::Error>> {
    run_example()
}

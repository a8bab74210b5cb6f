//! Steer the Galerkin system between states using controls that act only
//! on the forced modes, then re-check the endpoint with a tighter solver.

use jumpmix::dynamics::controlled_flow;
use jumpmix::galerkin::{build_field, synthesize_steering, Galerkin, SteeringConfig};
use jumpmix::gallery::galerkin_preset;
use jumpmix::rng::{stream, Purpose};
use nalgebra::DVector;
use rand::Rng;

pub fn run_example() -> Result<(), Box<dyn std::error::Error>> {
    let model = Galerkin::new(galerkin_preset())?;
    let field = build_field(&galerkin_preset())?;
    let b = model.control_matrix();
    let u0 = DVector::zeros(model.dim());
    let cfg = SteeringConfig::default();

    let mut rng = stream(4, Purpose::Steering, 0);
    for i in 0..3 {
        let target = DVector::from_fn(model.dim(), |_, _| rng.random_range(-1.5..1.5));
        let res = synthesize_steering(&model, &u0, &target, 1e-2, 50.0, &cfg)?;
        let check = match &res.control {
            Some(c) => {
                let end = controlled_flow(&field, &b, &u0, c, c.horizon(), &cfg.integrator.tightened(1e-1))?;
                (end - &target).norm()
            }
            None => (&u0 - &target).norm(),
        };
        println!(
            "target {i}: T = {:.3e}, reported error {:.2e}, re-integrated {:.2e}, rounds {}",
            res.horizon(),
            res.achieved_error,
            check,
            res.rounds
        );
    }
    Ok(())
}

#[allow(dead_code)]
fn main() -> Result<(), Box<dyn std::error::Error>> {
    run_example()
}

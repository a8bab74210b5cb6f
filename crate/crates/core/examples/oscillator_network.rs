//! A chain of three anharmonic oscillators with heat baths at both ends:
//! build the Langevin and semi-Markov models, check their hypotheses and
//! simulate the chain.

use jumpmix::network::{build_langevin, build_semimarkov, check_conditions, ray, NetworkSpec, Potential};
use jumpmix::pdmp::simulate;
use jumpmix::rng::{stream, Purpose};
use nalgebra::DVector;

pub fn run_example() -> Result<(), Box<dyn std::error::Error>> {
    let nw = NetworkSpec::chain(3, 1.0)?
        .with_potential(Potential::Bump {
            amplitude: 0.5,
            radius: 2.0,
        })
        .with_lambda(0.5);
    println!("omega condition number {:.3}", nw.condition_number());

    let probe = ray(&DVector::from_element(3, 1.0), 2.0, 24);
    let report = check_conditions(&nw, &probe)?;
    println!(
        "Kalman {:?}, growth {} (exponent bound {:.3}), decay {}",
        report.kalman.verdict, report.growth.passed, report.growth.bound_exponent, report.decay.passed
    );

    let langevin = build_langevin(&nw)?;
    let semimarkov = build_semimarkov(&nw)?;
    println!(
        "Langevin state dim {}, semi-Markov state dim {}",
        langevin.dim(),
        semimarkov.dim()
    );

    let mut rng = stream(6, Purpose::Path, 0);
    let x0 = DVector::zeros(langevin.dim());
    let traj = simulate(&langevin, &x0, 50.0, &mut rng)?;
    let energy = |x: &DVector<f64>| 0.5 * x.norm_squared();
    println!(
        "{} bath kicks on [0, 50], quadratic energy at t = 50: {:.3}",
        traj.post_jump_states.len(),
        energy(&traj.state_at(50.0)?)
    );
    Ok(())
}

#[allow(dead_code)]
fn main() -> Result<(), Box<dyn std::error::Error>> {
    run_example()
}

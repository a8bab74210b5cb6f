//! Bracket and solid-controllability certificates for a damped oscillator
//! kicked only in its velocity.

use jumpmix::controllability::{hormander_tower, kalman_rank, lie_bracket, solid_cert};
use jumpmix::dynamics::{jacobian, VectorField};
use jumpmix::gallery::Preset;
use nalgebra::DVector;

pub fn run_example() -> Result<(), Box<dyn std::error::Error>> {
    let e = Preset::Oscillator.build()?;
    let x_hat = DVector::zeros(2);
    let b = e.spec.b.column(0).into_owned();

    // [b, f] at the origin points along q, which b alone misses.
    let bracket = lie_bracket(&VectorField::constant(b.clone()), &e.spec.field, &x_hat);
    println!("b = {:?}  [b, f](0) = {:?}", b.as_slice(), bracket.as_slice());

    let tower = hormander_tower(&e.spec.field, &e.spec.b, &x_hat, 3, 1e-10)?;
    println!(
        "bracket tower dims by generation {:?} -> {:?}",
        tower.generation_dims, tower.verdict
    );

    let kalman = kalman_rank(&jacobian(&e.spec.field, &x_hat), &e.spec.b)?;
    println!(
        "Kalman rank of the linearization {}/{}",
        kalman.dimension_reached, kalman.target_dim
    );

    // Two jumps reach a two-dimensional state from one noise coordinate.
    let solid = solid_cert(&e.spec, &x_hat, 2, &[0.5, 0.5], 16, 7)?;
    println!(
        "solid controllability with m = 2: {:?}, smallest singular value {:.3e}",
        solid.verdict,
        solid.singular_values.last().copied().unwrap_or(0.0)
    );
    let one = solid_cert(&e.spec, &x_hat, 1, &[0.5], 16, 7)?;
    println!(
        "with m = 1: {:?} (rank {} of {})",
        one.verdict, one.dimension_reached, one.target_dim
    );
    Ok(())
}

#[allow(dead_code)]
fn main() -> Result<(), Box<dyn std::error::Error>> {
    run_example()
}

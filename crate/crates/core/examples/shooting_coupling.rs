//! Couple two copies of a degenerately forced oscillator. One noise
//! coordinate cannot match two state coordinates in one jump, so blocks of
//! two jumps are matched by Gauss-Newton shooting.

use jumpmix::coupling::{run_coupling, Branch};
use jumpmix::gallery::Preset;
use jumpmix::rng::{stream, Purpose};

pub fn run_example() -> Result<(), Box<dyn std::error::Error>> {
    let e = Preset::Oscillator.build()?;
    println!(
        "policy: x_hat = {:?}, r = {}, m = {}, {:?}",
        e.policy.x_hat.as_slice(),
        e.policy.r,
        e.policy.m,
        e.policy.hit_mode
    );

    let runs = 200;
    let (mut coalesced, mut t_sum, mut hits, mut fallbacks) = (0, 0.0, 0, 0);
    for r in 0..runs {
        let mut rng = stream(9, Purpose::Coupling, r);
        let rec = run_coupling(&e.spec, &e.policy, &e.x0, &e.x0_prime, 30.0, &mut rng)?;
        assert!(rec.is_consistent());
        if let Some(t) = rec.t {
            coalesced += 1;
            t_sum += t;
        }
        hits += rec.branches.iter().filter(|b| **b == Branch::Hit).count();
        fallbacks += rec.solver_fallbacks;
    }
    println!(
        "{coalesced}/{runs} pairs coalesced by t = 30, mean T {:.2}",
        t_sum / coalesced.max(1) as f64
    );
    println!("{hits} successful shots, {fallbacks} solver fallbacks");
    Ok(())
}

#[allow(dead_code)]
fn main() -> Result<(), Box<dyn std::error::Error>> {
    run_example()
}

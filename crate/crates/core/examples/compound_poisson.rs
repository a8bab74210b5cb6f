//! Sample a compound Poisson path and compare the waiting-time statistics
//! with their exact values.

use jumpmix::noise::{sample_path, waiting_exp_moment, JumpLaw};
use jumpmix::rng::{stream, Purpose};

pub fn run_example() -> Result<(), Box<dyn std::error::Error>> {
    let (rate, horizon) = (2.0, 5_000.0);
    let law = JumpLaw::Laplace { dim: 2, scale: 0.5 };
    let mut rng = stream(11, Purpose::Plain, 0);
    let path = sample_path(rate, &law, horizon, &mut rng)?;

    let waits = path.waiting_times();
    let mean_wait = waits.iter().sum::<f64>() / waits.len() as f64;
    println!(
        "{} jumps on [0, {horizon}], expected about {}",
        path.count_at(horizon),
        rate * horizon
    );
    println!("mean waiting time {mean_wait:.4} (exact {:.4})", 1.0 / rate);

    // tau_3 = w_1 + w_2 + w_3, so disjoint triples give independent copies.
    let tau3: Vec<f64> = waits.chunks_exact(3).map(|c| c.iter().sum()).collect();
    let empirical = tau3.iter().map(|t| (0.5 * t).exp()).sum::<f64>() / tau3.len() as f64;
    println!(
        "E exp(tau_3 / 2) {empirical:.4} vs exact {:.4}",
        waiting_exp_moment(rate, 0.5, 3)?
    );

    let second = path.jumps.iter().map(|j| j.norm_squared()).sum::<f64>() / path.jumps.len() as f64;
    println!("mean |eta|^2 {second:.4} vs law {:.4}", law.second_moment());
    println!("Y at t = 1: {:?}", path.value_at(1.0, 2).as_slice());
    Ok(())
}

#[allow(dead_code)]
fn main() -> Result<(), Box<dyn std::error::Error>> {
    run_example()
}

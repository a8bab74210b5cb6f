//! Long-run behaviour of `dx = -x/2 dt + dY`: the second-moment recursion
//! along jump times, a pathwise bound, and the invariant histogram.

use jumpmix::diagnostics::{invariant_estimate, InvariantConfig};
use jumpmix::gallery::linear_system;
use jumpmix::pdmp::empirical_moment;
use nalgebra::DVector;

pub fn run_example() -> Result<(), Box<dyn std::error::Error>> {
    let (alpha, rate) = (0.5, 1.0);
    let spec = linear_system(alpha, rate)?;
    let x0 = DVector::from_element(1, 3.0);

    // M_k = rho M_{k-1} + E|eta|^2 with rho = lambda / (lambda + 2 alpha).
    let rho = rate / (rate + 2.0 * alpha);
    let report = empirical_moment(&spec, &x0, 6, &[0.0, 2.0, 8.0], 4000, 1)?;
    let mut exact = 9.0;
    println!("{:>3} {:>9} {:>9} {:>8}", "k", "MC", "exact", "stderr");
    for p in &report.embedded {
        println!("{:3} {:9.4} {:9.4} {:8.4}", p.at, p.estimate, exact, p.stderr);
        exact = rho * exact + 1.0;
    }
    for p in &report.continuous {
        println!("E|X_t|^2 at t = {}: {:.4} +- {:.4}", p.at, p.estimate, p.stderr);
    }

    let cfg = InvariantConfig {
        samples: 400,
        replicas: 16,
        ..InvariantConfig::default()
    };
    let inv = invariant_estimate(&spec, &x0, &cfg)?;
    println!(
        "stationary E|X|^2 {:.3} +- {:.3} (exact {}), along jumps {:.3} +- {:.3} (exact {})",
        inv.second_moment,
        inv.second_moment_stderr,
        rate / (2.0 * alpha),
        inv.embedded_second_moment,
        inv.embedded_stderr,
        1.0 / (1.0 - rho)
    );
    let h = &inv.histograms[0];
    let peak = h.density.iter().cloned().fold(0.0, f64::max);
    println!(
        "histogram: {} bins on [{:.2}, {:.2}], peak density {peak:.3}",
        h.density.len(),
        h.edges[0],
        h.edges[h.edges.len() - 1]
    );
    Ok(())
}

#[allow(dead_code)]
fn main() -> Result<(), Box<dyn std::error::Error>> {
    run_example()
}

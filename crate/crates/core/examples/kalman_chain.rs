//! Kalman rank of harmonic chains driven at both ends, and of a network
//! whose middle is cut off from the baths.

use jumpmix::controllability::kalman_rank;
use jumpmix::network::{build_langevin, chain_stiffness, langevin_matrix, NetworkSpec};
use nalgebra::DMatrix;

pub fn run_example() -> Result<(), Box<dyn std::error::Error>> {
    for len in 2..=6 {
        let a = chain_stiffness(len);
        let mut b = DMatrix::zeros(len, 2);
        b[(0, 0)] = 1.0;
        b[(len - 1, 1)] = 1.0;
        let cert = kalman_rank(&a, &b)?;
        println!(
            "chain of {len}: rank {}/{} -> {:?}",
            cert.dimension_reached, cert.target_dim, cert.verdict
        );
    }

    let nw = NetworkSpec::chain(4, 0.5)?;
    let a = langevin_matrix(&nw);
    let d = a.nrows();
    let full = kalman_rank(&a, &build_langevin(&nw)?.b)?;
    println!("full Langevin system (d = {d}): {:?}", full.verdict);

    // Masses 0 and 1 form one pair, 2 and 3 another; only mass 0 is driven.
    let mut split = nw.clone();
    split.omega = vec![
        vec![1.0, 0.5, 0.0, 0.0],
        vec![0.5, 1.0, 0.0, 0.0],
        vec![0.0, 0.0, 1.0, 0.5],
        vec![0.0, 0.0, 0.5, 1.0],
    ];
    split.driven = vec![0];
    split.gamma = vec![0.5];
    split.rates = vec![1.0];
    split.laws.truncate(1);
    let k = split.omega_matrix();
    let cert = kalman_rank(&(k.transpose() * &k), &split.injection())?;
    println!(
        "split network: rank {}/{} -> {:?}",
        cert.dimension_reached, cert.target_dim, cert.verdict
    );
    Ok(())
}

#[allow(dead_code)]
fn main() -> Result<(), Box<dyn std::error::Error>> {
    run_example()
}

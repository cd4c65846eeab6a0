use std::io::Write;

use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::kernels::{i2, i2_oracle, i3, i3_oracle, ActivationKind, Cov2, Cov3};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IntegralCheck {
    pub activation: String,
    pub integral: String,
    pub index: usize,
    pub closed_form: f64,
    pub monte_carlo: f64,
    pub std_error: f64,
    /// `|closed − mc| / std_error`.
    pub z: f64,
    pub pass: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IntegralValidation {
    pub samples: usize,
    pub z_max: f64,
    pub checks: Vec<IntegralCheck>,
}

impl IntegralValidation {
    pub fn all_pass(&self) -> bool {
        self.checks.iter().all(|c| c.pass)
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["activation", "integral", "index", "closed_form", "monte_carlo", "std_error", "z", "pass"])?;
        for c in &self.checks {
            w.write_record([
                c.activation.clone(),
                c.integral.clone(),
                c.index.to_string(),
                format!("{:.12e}", c.closed_form),
                format!("{:.12e}", c.monte_carlo),
                format!("{:.6e}", c.std_error),
                format!("{:.4}", c.z),
                c.pass.to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Random 3×3 covariance `A Aᵀ / 3` with i.i.d. standard normal `A`.
pub fn random_covariance(seed: u64) -> DMatrix<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let a: DMatrix<f64> = DMatrix::from_fn(3, 3, |_, _| StandardNormal.sample(&mut rng));
    &a * a.transpose() / 3.0
}

/// Compares the closed-form `I2` and `I3` with Monte-Carlo estimates over
/// `n_cov` random covariances per activation.
pub fn validate_integrals(
    acts: &[ActivationKind],
    n_cov: usize,
    samples: usize,
    z_max: f64,
    seed: u64,
) -> Result<IntegralValidation> {
    let jobs: Vec<(ActivationKind, usize, bool)> = acts
        .iter()
        .flat_map(|&a| (0..n_cov).flat_map(move |i| [(a, i, false), (a, i, true)]))
        .collect();
    let checks = jobs
        .par_iter()
        .map(|&(act, i, third)| {
            let c = random_covariance(seed.wrapping_add(i as u64));
            let mc_seed = seed.wrapping_add(1_000_000 + 2 * i as u64 + third as u64);
            let (closed, (mc, se)) = if third {
                let cov = Cov3 {
                    c00: c[(0, 0)],
                    c11: c[(1, 1)],
                    c22: c[(2, 2)],
                    c01: c[(0, 1)],
                    c02: c[(0, 2)],
                    c12: c[(1, 2)],
                };
                (i3(act, cov)?, i3_oracle(act, cov, samples, mc_seed)?)
            } else {
                let cov = Cov2::new(c[(0, 0)], c[(1, 1)], c[(0, 1)]);
                (i2(act, cov)?, i2_oracle(act, cov, samples, mc_seed)?)
            };
            let z = (closed - mc).abs() / se.max(1e-300);
            Ok(IntegralCheck {
                activation: act.to_string(),
                integral: if third { "I3" } else { "I2" }.into(),
                index: i,
                closed_form: closed,
                monte_carlo: mc,
                std_error: se,
                z,
                pass: z <= z_max,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(IntegralValidation { samples, z_max, checks })
}

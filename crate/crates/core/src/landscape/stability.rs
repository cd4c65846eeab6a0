use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dynamics::{integrate, rhs_gd, IntegrationConfig, Optimizer, OptimizerKind};
use crate::error::{Error, Result};
use crate::kernels::ActivationKind;
use crate::state::{induced_distance, perturb, OverlapState, PerturbMode};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct StabilityConfig {
    pub sigmas: Vec<f64>,
    pub trials: usize,
    pub relax_steps: u64,
    /// Learning rate of the relaxation; every step moves the state by `relax_eta · rhs`.
    pub relax_eta: f64,
    pub mode: PerturbMode,
    pub seed: u64,
    /// Largest gradient max-norm accepted at the probed state.
    pub fixed_point_tol: f64,
}

impl Default for StabilityConfig {
    fn default() -> Self {
        StabilityConfig {
            sigmas: (0..9).map(|i| 10f64.powf(-4.0 + 0.5 * i as f64)).collect(),
            trials: 20,
            relax_steps: 100_000,
            relax_eta: 0.01,
            mode: PerturbMode::FiniteD { d: 784 },
            seed: 0,
            fixed_point_tol: 1e-8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StabilityReport {
    pub sigma_grid: Vec<f64>,
    /// Induced distance between the relaxed state and the fixed point.
    pub mean_distance: Vec<f64>,
    pub std_distance: Vec<f64>,
    /// Relaxed loss minus the loss of the fixed point.
    pub mean_loss_gap: Vec<f64>,
    pub std_loss_gap: Vec<f64>,
    pub trials: usize,
    pub relax_steps: u64,
    pub relax_eta: f64,
}

impl StabilityReport {
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["sigma", "mean_distance", "std_distance", "mean_loss_gap", "std_loss_gap"])?;
        for i in 0..self.sigma_grid.len() {
            w.write_record([
                format!("{:.6e}", self.sigma_grid[i]),
                format!("{:.10e}", self.mean_distance[i]),
                format!("{:.10e}", self.std_distance[i]),
                format!("{:.10e}", self.mean_loss_gap[i]),
                format!("{:.10e}", self.std_loss_gap[i]),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

fn mean_std(x: &[f64]) -> (f64, f64) {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    if x.len() < 2 {
        return (mean, f64::NAN);
    }
    let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// Perturbs a fixed point in weight space, relaxes it by gradient descent
/// and records how far it ends up from where it started.
pub fn stability_probe(s: &OverlapState, cfg: &StabilityConfig, act: ActivationKind) -> Result<StabilityReport> {
    if cfg.trials == 0 {
        return Err(Error::InvalidArgument("need at least one trial".into()));
    }
    let grad = rhs_gd(s, act, false)?.max_norm();
    if grad >= cfg.fixed_point_tol {
        return Err(Error::InvalidArgument(format!(
            "state is not a fixed point (gradient max-norm {grad:.3e})"
        )));
    }
    let base_loss = s.population_loss(act)?;
    let opt = OptimizerKind::new(Optimizer::Gd, cfg.relax_eta);
    let icfg = IntegrationConfig {
        dt: 1.0,
        max_steps: cfg.relax_steps,
        grad_tol: 1e-13,
        ..IntegrationConfig::for_eta(cfg.relax_eta)
    };
    let jobs: Vec<(usize, usize)> = (0..cfg.sigmas.len())
        .flat_map(|a| (0..cfg.trials).map(move |t| (a, t)))
        .collect();
    let results: Vec<(f64, f64)> = jobs
        .par_iter()
        .map(|&(a, t)| {
            let seed = cfg.seed.wrapping_add((a * cfg.trials + t) as u64);
            let start = perturb(s, cfg.sigmas[a], cfg.mode, seed)?;
            let tr = integrate(&start, &opt, &icfg, act)?;
            Ok((induced_distance(s, &tr.terminal)?, tr.terminal_loss - base_loss))
        })
        .collect::<Result<_>>()?;
    let mut report = StabilityReport {
        sigma_grid: cfg.sigmas.clone(),
        mean_distance: vec![],
        std_distance: vec![],
        mean_loss_gap: vec![],
        std_loss_gap: vec![],
        trials: cfg.trials,
        relax_steps: cfg.relax_steps,
        relax_eta: cfg.relax_eta,
    };
    for chunk in results.chunks(cfg.trials) {
        let d: Vec<f64> = chunk.iter().map(|r| r.0).collect();
        let g: Vec<f64> = chunk.iter().map(|r| r.1).collect();
        let (md, sd) = mean_std(&d);
        let (mg, sg) = mean_std(&g);
        report.mean_distance.push(md);
        report.std_distance.push(sd);
        report.mean_loss_gap.push(mg);
        report.std_loss_gap.push(sg);
    }
    Ok(report)
}

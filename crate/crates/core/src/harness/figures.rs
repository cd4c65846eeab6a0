use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::ansatz::{catalog_records, family_catalog, SolverOptions};
use crate::dynamics::{integrate, IntegrationConfig};
use crate::error::{Error, Result};
use crate::state::random_init;

use super::config::{ExperimentConfig, InitSpec};
use super::ensemble::{run_ensemble, FamilyStats};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossTrace {
    pub seed: u64,
    pub times: Vec<f64>,
    pub losses: Vec<f64>,
}

impl LossTrace {
    /// Largest increase between consecutive recorded losses.
    pub fn max_increase(&self) -> f64 {
        self.losses.windows(2).map(|w| w[1] - w[0]).fold(0.0, f64::max)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DynamicsBundle {
    #[serde(rename = "K")]
    pub k: usize,
    #[serde(rename = "M")]
    pub m: usize,
    pub traces: Vec<LossTrace>,
    /// Family losses from the fixed-point solver.
    pub reference_levels: Vec<f64>,
}

impl DynamicsBundle {
    pub fn write_traces_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["seed", "time", "loss"])?;
        for t in &self.traces {
            for (time, loss) in t.times.iter().zip(&t.losses) {
                w.write_record([t.seed.to_string(), format!("{time:.6e}"), format!("{loss:.10e}")])?;
            }
        }
        w.flush()?;
        Ok(())
    }

    pub fn write_levels_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["loss"])?;
        for l in &self.reference_levels {
            w.write_record([format!("{l:.12e}")])?;
        }
        w.flush()?;
        Ok(())
    }

    /// Fraction of trajectories whose final loss is below `eps`.
    pub fn zero_fraction(&self, eps: f64) -> f64 {
        let n = self.traces.iter().filter(|t| t.losses.last().is_some_and(|&l| l < eps)).count();
        n as f64 / self.traces.len().max(1) as f64
    }
}

/// Loss curves of `cfg.n_seeds` trajectories sampled every `record_every`
/// steps, with the solver's family losses as reference levels.
pub fn run_dynamics_figure(cfg: &ExperimentConfig, record_every: u64) -> Result<DynamicsBundle> {
    cfg.validate()?;
    if record_every == 0 {
        return Err(Error::InvalidArgument("record_every must be at least 1".into()));
    }
    let io = cfg.init_options()?;
    let icfg = IntegrationConfig { record_every, ..cfg.integration.clone() };
    let traces = (0..cfg.n_seeds as u64)
        .into_par_iter()
        .map(|i| {
            let seed = cfg.seed_base.wrapping_add(i);
            let s0 = random_init(cfg.k, cfg.m, &io, seed)?;
            let tr = integrate(&s0, &cfg.optimizer, &icfg, cfg.activation)?;
            Ok(LossTrace { seed, times: tr.times, losses: tr.losses })
        })
        .collect::<Result<Vec<_>>>()?;
    let reference_levels = if cfg.k >= cfg.m {
        let entries = family_catalog(cfg.k, cfg.m, cfg.catalog_k1_max.min(cfg.m), cfg.activation, &SolverOptions::default())?;
        catalog_records(&entries).iter().map(|r| r.loss).collect()
    } else {
        Vec::new()
    };
    Ok(DynamicsBundle { k: cfg.k, m: cfg.m, traces, reference_levels })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FiniteDRow {
    pub d: usize,
    pub global_percent: f64,
    pub families: Vec<FamilyStats>,
    /// Mean classifier block residual over the classified runs.
    pub mean_block_residual: f64,
    pub max_block_residual: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FiniteDReport {
    pub rows: Vec<FiniteDRow>,
}

impl FiniteDReport {
    /// Families observed with at least `min_count` runs at every `d`.
    pub fn common_families(&self, min_count: usize) -> Vec<usize> {
        let Some(first) = self.rows.first() else { return Vec::new() };
        first
            .families
            .iter()
            .map(|f| f.k1)
            .filter(|&k1| {
                self.rows.iter().all(|r| r.families.iter().any(|f| f.k1 == k1 && f.count >= min_count))
            })
            .collect()
    }

    /// Per-family loss spread along the `d` grid.
    pub fn std_along_d(&self, k1: usize) -> Vec<f64> {
        self.rows
            .iter()
            .map(|r| r.families.iter().find(|f| f.k1 == k1).map_or(f64::NAN, |f| f.std_loss))
            .collect()
    }

    /// True when the spread of every common family strictly shrinks as `d` grows.
    pub fn broadening_decreases(&self, min_count: usize) -> bool {
        let fams = self.common_families(min_count);
        !fams.is_empty()
            && fams.iter().all(|&k1| self.std_along_d(k1).windows(2).all(|w| w[1] < w[0]))
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["d", "k1", "count", "mean_loss", "std_loss", "global_percent", "mean_block_residual"])?;
        for r in &self.rows {
            for f in &r.families {
                w.write_record([
                    r.d.to_string(),
                    f.k1.to_string(),
                    f.count.to_string(),
                    format!("{:.10e}", f.mean_loss),
                    format!("{:.6e}", f.std_loss),
                    format!("{:.2}", r.global_percent),
                    format!("{:.6e}", r.mean_block_residual),
                ])?;
            }
        }
        w.flush()?;
        Ok(())
    }
}

/// Runs the ensemble of `cfg` once per init dimension in `dims` (ascending)
/// and compares the spread of the terminal losses of each family.
///
/// With a Gaussian teacher the teacher is drawn at the same dimension, so the
/// terminal states feel the finite-`d` fluctuations of both networks.
pub fn finite_d_robustness(cfg: &ExperimentConfig, dims: &[usize]) -> Result<FiniteDReport> {
    if dims.is_empty() {
        return Err(Error::InvalidArgument("need at least one dimension".into()));
    }
    let mut rows = Vec::new();
    for &d in dims {
        let rep = run_ensemble(&ExperimentConfig { init: InitSpec::DInit(d), attach_catalog: false, ..cfg.clone() })?;
        let res: Vec<f64> = rep.per_seed.iter().filter_map(|r| r.block_residual).collect();
        rows.push(FiniteDRow {
            d,
            global_percent: rep.global_percent,
            families: rep.family_stats(),
            mean_block_residual: if res.is_empty() { 0.0 } else { res.iter().sum::<f64>() / res.len() as f64 },
            max_block_residual: res.iter().copied().fold(0.0, f64::max),
        });
    }
    Ok(FiniteDReport { rows })
}

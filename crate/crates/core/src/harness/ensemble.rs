use std::collections::BTreeMap;
use std::fmt;
use std::io::Write;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::ansatz::{catalog_records, classify, family_catalog, FamilyLabel, SolverOptions};
use crate::dynamics::{integrate, IntegrationConfig, Optimizer, StopReason};
use crate::error::Result;
use crate::state::random_init;

use super::config::{ClassificationThresholds, ExperimentConfig, TeacherSpec};

/// Outcome of one trajectory.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SeedLabel {
    Global,
    Local(usize),
    Unclassified,
    /// Gradient above `delta` at the end of the budget, or the run failed.
    NonConverged,
}

impl fmt::Display for SeedLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SeedLabel::Global => f.write_str("global"),
            SeedLabel::Local(k1) => write!(f, "k1={k1}"),
            SeedLabel::Unclassified => f.write_str("unclassified"),
            SeedLabel::NonConverged => f.write_str("nc"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedRecord {
    pub seed: u64,
    pub terminal_loss: f64,
    pub grad_norm: f64,
    pub label: SeedLabel,
    /// `None` when the run failed; see `error`.
    pub stop_reason: Option<StopReason>,
    pub steps: u64,
    /// Block-structure residual of the classifier, for classified runs.
    pub block_residual: Option<f64>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Histogram {
    pub bin_edges: Vec<f64>,
    pub counts: Vec<usize>,
}

impl Histogram {
    /// Linear bins over `[0, max]` of the finite values; bins are half-open
    /// except the last, which includes `max`.
    pub fn of(values: &[f64], bins: usize) -> Self {
        let finite: Vec<f64> = values.iter().copied().filter(|v| v.is_finite()).collect();
        let hi = finite.iter().copied().fold(0.0f64, f64::max);
        let hi = if hi > 0.0 { hi } else { 1e-12 };
        let bin_edges: Vec<f64> = (0..=bins).map(|i| hi * i as f64 / bins as f64).collect();
        let mut counts = vec![0; bins];
        for v in finite {
            let b = ((v.max(0.0) / hi) * bins as f64) as usize;
            counts[b.min(bins - 1)] += 1;
        }
        Histogram { bin_edges, counts }
    }
}

/// A family loss level predicted by the fixed-point solver.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TheoryLevel {
    pub k1: usize,
    pub extra: usize,
    pub embedded: bool,
    pub loss: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FamilyStats {
    pub k1: usize,
    pub count: usize,
    pub mean_loss: f64,
    pub std_loss: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnsembleReport {
    #[serde(rename = "K")]
    pub k: usize,
    #[serde(rename = "M")]
    pub m: usize,
    pub optimizer: Optimizer,
    pub n_seeds: usize,
    pub seed_base: u64,
    pub thresholds: ClassificationThresholds,
    pub classify_tol: f64,
    pub per_seed: Vec<SeedRecord>,
    /// Histogram of the finite terminal losses.
    pub histogram: Histogram,
    pub family_counts: BTreeMap<usize, usize>,
    /// Percent of seeds per anti-aligned count; `0` is the global minimum.
    pub family_percentages: BTreeMap<usize, f64>,
    pub global_percent: f64,
    pub local_percent: f64,
    pub unclassified_percent: f64,
    pub nc_percent: f64,
    pub failed_runs: usize,
    pub family_losses_theory: Vec<TheoryLevel>,
}

impl EnsembleReport {
    pub fn count(&self, label: SeedLabel) -> usize {
        self.per_seed.iter().filter(|r| r.label == label).count()
    }

    /// Terminal-loss mean and sample standard deviation of each spurious family.
    pub fn family_stats(&self) -> Vec<FamilyStats> {
        let mut by: BTreeMap<usize, Vec<f64>> = BTreeMap::new();
        for r in &self.per_seed {
            if let SeedLabel::Local(k1) = r.label {
                by.entry(k1).or_default().push(r.terminal_loss);
            }
        }
        by.into_iter()
            .map(|(k1, v)| {
                let n = v.len() as f64;
                let mean = v.iter().sum::<f64>() / n;
                let std = if v.len() > 1 {
                    (v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0)).sqrt()
                } else {
                    f64::NAN
                };
                FamilyStats { k1, count: v.len(), mean_loss: mean, std_loss: std }
            })
            .collect()
    }

    pub fn write_per_seed_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["seed", "terminal_loss", "grad_norm", "label", "stop_reason", "steps"])?;
        for r in &self.per_seed {
            w.write_record([
                r.seed.to_string(),
                format!("{:.12e}", r.terminal_loss),
                format!("{:.6e}", r.grad_norm),
                r.label.to_string(),
                r.stop_reason.map(|s| s.to_string()).unwrap_or_else(|| "failed".into()),
                r.steps.to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn write_histogram_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["bin_lo", "bin_hi", "count"])?;
        let e = &self.histogram.bin_edges;
        for (i, c) in self.histogram.counts.iter().enumerate() {
            w.write_record([format!("{:.8e}", e[i]), format!("{:.8e}", e[i + 1]), c.to_string()])?;
        }
        w.flush()?;
        Ok(())
    }

    /// Writes `per_seed.csv`, `histogram.csv` and `report.json` into `dir`.
    pub fn write_outputs(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        self.write_per_seed_csv(std::fs::File::create(dir.join("per_seed.csv"))?)?;
        self.write_histogram_csv(std::fs::File::create(dir.join("histogram.csv"))?)?;
        let json = serde_json::to_string_pretty(self)?;
        std::fs::write(dir.join("report.json"), json + "\n")?;
        Ok(())
    }

    pub fn summary(&self) -> String {
        let mut s = format!(
            "K={} M={} {} seeds: global {:.2}%  local {:.2}%  unclassified {:.2}%  nc {:.2}%",
            self.k,
            self.m,
            self.n_seeds,
            self.global_percent,
            self.local_percent,
            self.unclassified_percent,
            self.nc_percent
        );
        for (k1, p) in &self.family_percentages {
            if *k1 > 0 {
                s.push_str(&format!("\n  k1={k1}: {p:.2}%"));
            }
        }
        s
    }
}

fn run_seed(cfg: &ExperimentConfig, icfg: &IntegrationConfig, seed: u64) -> SeedRecord {
    let t = &cfg.thresholds;
    let failed = |e: String| SeedRecord {
        seed,
        terminal_loss: f64::NAN,
        grad_norm: f64::NAN,
        label: SeedLabel::NonConverged,
        stop_reason: None,
        steps: 0,
        block_residual: None,
        error: Some(e),
    };
    let run = cfg
        .init_options()
        .and_then(|io| random_init(cfg.k, cfg.m, &io, seed))
        .and_then(|s0| integrate(&s0, &cfg.optimizer, icfg, cfg.activation));
    let tr = match run {
        Ok(tr) => tr,
        Err(e) => return failed(e.to_string()),
    };
    let loss = tr.terminal_loss;
    let grad = tr.terminal_grad;
    let mut block_residual = None;
    let label = if !loss.is_finite() {
        SeedLabel::NonConverged
    } else if loss < t.epsilon {
        SeedLabel::Global
    } else if grad > t.delta {
        SeedLabel::NonConverged
    } else {
        let c = classify(&tr.terminal, cfg.classify_tol);
        block_residual = Some(c.block_residual);
        match c.family {
            FamilyLabel::Local(k1) => SeedLabel::Local(k1),
            // An aligned state whose loss is above epsilon is not the global minimum.
            FamilyLabel::Global | FamilyLabel::Unclassified => SeedLabel::Unclassified,
        }
    };
    SeedRecord {
        seed,
        terminal_loss: loss,
        grad_norm: grad,
        label,
        stop_reason: Some(tr.stop_reason),
        steps: tr.steps,
        block_residual,
        error: None,
    }
}

fn theory_levels(cfg: &ExperimentConfig) -> Vec<TheoryLevel> {
    let gd_like = matches!(cfg.optimizer.kind, Optimizer::Gd)
        || (cfg.optimizer.kind == Optimizer::Sgd && !cfg.optimizer.sgd_keep_i4);
    if !cfg.attach_catalog || !gd_like || cfg.teacher != TeacherSpec::Orthonormal || cfg.k < cfg.m {
        return Vec::new();
    }
    let k1_max = cfg.catalog_k1_max.min(cfg.m);
    match family_catalog(cfg.k, cfg.m, k1_max, cfg.activation, &SolverOptions::default()) {
        Ok(entries) => catalog_records(&entries)
            .into_iter()
            .map(|r| TheoryLevel { k1: r.k1, extra: r.extra, embedded: r.embedded, loss: r.loss })
            .collect(),
        Err(e) => {
            log::warn!("family catalog failed: {e}");
            Vec::new()
        }
    }
}

/// Integrates `cfg.n_seeds` trajectories from seeds `seed_base + i` and
/// aggregates their terminal labels.
///
/// A run is global when its loss is below `epsilon`, non-converged when its
/// gradient is above `delta`, and otherwise labeled by the family classifier.
/// Failed runs are recorded as non-converged with their error message.
pub fn run_ensemble(cfg: &ExperimentConfig) -> Result<EnsembleReport> {
    cfg.validate()?;
    let icfg = IntegrationConfig { record_every: 0, ..cfg.integration.clone() };
    let per_seed: Vec<SeedRecord> = (0..cfg.n_seeds as u64)
        .into_par_iter()
        .map(|i| run_seed(cfg, &icfg, cfg.seed_base.wrapping_add(i)))
        .collect();
    for r in &per_seed {
        if let Some(e) = &r.error {
            log::warn!("seed {} failed: {e}", r.seed);
        }
    }
    let n = per_seed.len();
    let pct = |c: usize| 100.0 * c as f64 / n as f64;
    let mut family_counts = BTreeMap::new();
    let (mut global, mut local, mut uncl, mut nc) = (0, 0, 0, 0);
    for r in &per_seed {
        match r.label {
            SeedLabel::Global => {
                global += 1;
                *family_counts.entry(0).or_insert(0) += 1;
            }
            SeedLabel::Local(k1) => {
                local += 1;
                *family_counts.entry(k1).or_insert(0) += 1;
            }
            SeedLabel::Unclassified => uncl += 1,
            SeedLabel::NonConverged => nc += 1,
        }
    }
    let losses: Vec<f64> = per_seed.iter().map(|r| r.terminal_loss).collect();
    Ok(EnsembleReport {
        k: cfg.k,
        m: cfg.m,
        optimizer: cfg.optimizer.kind,
        n_seeds: n,
        seed_base: cfg.seed_base,
        thresholds: cfg.thresholds,
        classify_tol: cfg.classify_tol,
        histogram: Histogram::of(&losses, cfg.histogram_bins),
        family_percentages: family_counts.iter().map(|(&k, &c)| (k, pct(c))).collect(),
        family_counts,
        global_percent: pct(global),
        local_percent: pct(local),
        unclassified_percent: pct(uncl),
        nc_percent: pct(nc),
        failed_runs: per_seed.iter().filter(|r| r.error.is_some()).count(),
        family_losses_theory: theory_levels(cfg),
        per_seed,
    })
}

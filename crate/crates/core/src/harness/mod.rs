//! Experiment orchestration: ensembles, table reproduction, figure data and
//! the command-line interface.

pub mod cli;
mod config;
mod ensemble;
mod figures;
mod tables;
mod validate;

pub use config::{
    ensemble_integration, read_matrix_csv, ClassificationThresholds, ExperimentConfig, InitSpec, TeacherSpec,
};
pub use ensemble::{run_ensemble, EnsembleReport, FamilyStats, Histogram, SeedLabel, SeedRecord, TheoryLevel};
pub use figures::{finite_d_robustness, run_dynamics_figure, DynamicsBundle, FiniteDReport, FiniteDRow, LossTrace};
pub use tables::{
    binomial_check, reproduce_table, table_spec, CellResult, CellSpec, Quantity, RowSpec, TableId, TableReport,
};
pub use validate::{random_covariance, validate_integrals, IntegralCheck, IntegralValidation};

use crate::ansatz::FamilyRecord;
use crate::error::Result;
use crate::kernels::ActivationKind;
use crate::landscape::{stability_probe, StabilityConfig};

/// Marks each record stable when five perturbations of size 1e-2 relax back
/// to within induced distance 1e-3.
pub fn annotate_stability(records: &mut [FamilyRecord], act: ActivationKind) -> Result<()> {
    let cfg = StabilityConfig { sigmas: vec![1e-2], trials: 5, ..Default::default() };
    for r in records.iter_mut() {
        let rep = stability_probe(&r.state(), &cfg, act)?;
        r.stable = Some(rep.mean_distance[0] < 1e-3);
    }
    Ok(())
}

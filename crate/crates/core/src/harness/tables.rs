use std::fmt;
use std::io::Write;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::dynamics::Optimizer;
use crate::error::{Error, Result};

use super::config::{ClassificationThresholds, ExperimentConfig};
use super::ensemble::{run_ensemble, EnsembleReport, SeedLabel};

/// Published ensemble tables that can be re-measured.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TableId {
    /// Anti-aligned counts for `M = 17`, `K = 17, 18, 19`.
    T1,
    /// Global-minimum rate per optimizer.
    T2,
    /// GD statistics for `K = M`.
    T4a,
    /// GD statistics for `K = M + 1`.
    T4b,
    /// nGD statistics for `K = M`.
    T5,
    /// nGD statistics for `K = M + 1`.
    T6,
}

impl TableId {
    pub const ALL: [TableId; 6] = [TableId::T1, TableId::T2, TableId::T4a, TableId::T4b, TableId::T5, TableId::T6];
}

impl fmt::Display for TableId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            TableId::T1 => "t1",
            TableId::T2 => "t2",
            TableId::T4a => "t4a",
            TableId::T4b => "t4b",
            TableId::T5 => "t5",
            TableId::T6 => "t6",
        })
    }
}

impl FromStr for TableId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        TableId::ALL
            .into_iter()
            .find(|t| t.to_string() == s.trim().to_ascii_lowercase())
            .ok_or_else(|| Error::InvalidArgument(format!("unknown table id '{s}'")))
    }
}

/// What a table cell counts.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Quantity {
    Global,
    /// All spurious families together.
    Local,
    /// Neither global nor a classified family: non-converged plus unclassified runs.
    None,
    /// Runs in the family with this many anti-aligned units (`0` is global).
    Family(usize),
}

impl Quantity {
    pub fn count(&self, rep: &EnsembleReport) -> usize {
        rep.per_seed
            .iter()
            .filter(|r| match (self, r.label) {
                (Quantity::Global, SeedLabel::Global) | (Quantity::Family(0), SeedLabel::Global) => true,
                (Quantity::Local, SeedLabel::Local(_)) => true,
                (Quantity::None, SeedLabel::NonConverged | SeedLabel::Unclassified) => true,
                (Quantity::Family(k), SeedLabel::Local(k1)) => *k > 0 && *k == k1,
                _ => false,
            })
            .count()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CellSpec {
    pub column: String,
    pub quantity: Quantity,
    /// Published percentage; `None` where the table reads "N/C".
    pub reference: Option<f64>,
}

/// One ensemble of a table together with the cells it fills.
#[derive(Debug, Clone, PartialEq)]
pub struct RowSpec {
    pub label: String,
    pub k: usize,
    pub m: usize,
    pub optimizer: Optimizer,
    pub thresholds: ClassificationThresholds,
    pub cells: Vec<CellSpec>,
}

const T1: [(usize, [f64; 5]); 3] = [
    (17, [13.09, 27.52, 29.05, 18.94, 7.55]),
    (18, [59.29, 0.00, 2.10, 10.83, 8.99]),
    (19, [99.63, 0.00, 0.05, 0.31, 0.0]),
];

const T2: [(Optimizer, [Option<f64>; 3]); 4] = [
    (Optimizer::Gd, [Some(13.25), Some(64.18), Some(77.50)]),
    (Optimizer::Gd2Layer, [Some(13.24), Some(67.91), Some(99.48)]),
    (Optimizer::Ngd, [Some(14.12), Some(58.35), None]),
    (Optimizer::Ongd, [None, None, None]),
];

/// `(K, local, global, none)`.
const T4A: [(usize, f64, f64, f64); 15] = [
    (6, 0.91, 98.82, 0.27),
    (7, 5.30, 94.37, 0.33),
    (8, 13.16, 86.09, 0.75),
    (9, 21.15, 78.53, 0.32),
    (10, 33.27, 66.38, 0.35),
    (11, 43.74, 55.92, 0.34),
    (12, 54.62, 45.12, 0.26),
    (13, 63.87, 35.93, 0.20),
    (14, 71.69, 28.08, 0.23),
    (15, 77.99, 21.81, 0.20),
    (16, 82.48, 17.44, 0.08),
    (17, 86.79, 13.18, 0.03),
    (18, 90.42, 9.51, 0.07),
    (19, 92.54, 7.38, 0.08),
    (20, 94.76, 5.21, 0.03),
];

/// `(K, local, global, none)` with `M = K - 1`.
const T4B: [(usize, f64, f64, f64); 12] = [
    (9, 0.07, 99.74, 0.19),
    (10, 0.75, 98.95, 0.30),
    (11, 1.93, 97.26, 0.81),
    (12, 3.83, 94.25, 1.92),
    (13, 5.74, 91.42, 2.84),
    (14, 8.37, 87.46, 4.17),
    (15, 13.50, 81.16, 5.34),
    (16, 18.12, 75.36, 6.52),
    (17, 28.58, 65.47, 5.95),
    (18, 36.88, 57.50, 5.62),
    (19, 42.25, 52.62, 5.13),
    (20, 51.46, 44.24, 4.30),
];

/// `(K, local, global, none, epsilon, delta)`.
const T5: [(usize, f64, f64, f64, f64, f64); 19] = [
    (2, 0.00, 99.77, 0.23, 1e-2, 1e-2),
    (3, 0.15, 99.85, 0.00, 1e-2, 1e-2),
    (4, 0.02, 99.98, 0.00, 1e-2, 1e-2),
    (5, 0.01, 99.99, 0.00, 1e-2, 1e-2),
    (6, 0.00, 100.00, 0.00, 1e-2, 1e-2),
    (7, 0.62, 99.38, 0.00, 1e-2, 1e-2),
    (8, 4.87, 95.13, 0.00, 1e-2, 1e-2),
    (9, 12.93, 87.07, 0.00, 1e-2, 1e-2),
    (10, 24.15, 75.85, 0.00, 1e-2, 1e-2),
    (11, 36.45, 63.55, 0.00, 1e-2, 1e-2),
    (12, 49.95, 50.05, 0.00, 1e-2, 1e-2),
    (13, 58.57, 41.43, 0.00, 1e-2, 1e-2),
    (14, 67.92, 32.08, 0.00, 1e-2, 1e-2),
    (15, 75.37, 24.63, 0.00, 1e-2, 1e-2),
    (16, 81.49, 18.51, 0.00, 1e-2, 1e-2),
    (17, 85.88, 14.12, 0.00, 1e-2, 1e-2),
    (18, 89.77, 10.23, 0.00, 1e-2, 1e-2),
    (19, 92.01, 7.99, 0.00, 1e-2, 1e-2),
    (20, 94.38, 5.62, 0.00, 1e-2, 1e-2),
];

/// `(K, local, global, none, epsilon, delta)` with `M = K - 1`.
const T6: [(usize, f64, f64, f64, f64, f64); 18] = [
    (3, 2.73, 97.27, 0.00, 0.123, 1e-1),
    (4, 48.95, 51.05, 0.00, 0.11, 1e-1),
    (5, 1.34, 98.66, 0.00, 0.105, 1e-1),
    (6, 1.40, 98.60, 0.00, 0.105, 1e-1),
    (7, 2.87, 97.12, 0.01, 1e-1, 1e-1),
    (8, 1.80, 98.19, 0.01, 1e-1, 1e-1),
    (9, 1.49, 98.48, 0.03, 1e-1, 1e-1),
    (10, 2.57, 97.42, 0.01, 1e-1, 1e-1),
    (11, 4.25, 95.74, 0.01, 1e-1, 1e-1),
    (12, 6.61, 93.39, 0.00, 1e-1, 1e-1),
    (13, 10.58, 89.42, 0.00, 1e-1, 1e-1),
    (14, 15.64, 84.36, 0.00, 1e-1, 1e-1),
    (15, 21.55, 78.45, 0.00, 1e-1, 1e-1),
    (16, 27.54, 72.46, 0.00, 1e-1, 1e-1),
    (17, 34.73, 65.27, 0.00, 1e-1, 1e-1),
    (18, 41.66, 58.34, 0.00, 1e-1, 1e-1),
    (19, 48.76, 51.24, 0.00, 1e-1, 1e-1),
    (20, 55.83, 44.17, 0.00, 1e-1, 1e-1),
];

fn three_cells(local: f64, global: f64, none: f64) -> Vec<CellSpec> {
    vec![
        CellSpec { column: "local".into(), quantity: Quantity::Local, reference: Some(local) },
        CellSpec { column: "global".into(), quantity: Quantity::Global, reference: Some(global) },
        CellSpec { column: "none".into(), quantity: Quantity::None, reference: Some(none) },
    ]
}

fn km_label(k: usize, m: usize) -> String {
    format!("K={k} M={m}")
}

/// Thresholds used for the nGD rows of the optimizer comparison.
fn ngd_thresholds(k: usize, m: usize) -> ClassificationThresholds {
    if k == m {
        ClassificationThresholds { epsilon: 1e-2, delta: 1e-2 }
    } else {
        ClassificationThresholds { epsilon: 1e-1, delta: 1e-1 }
    }
}

/// The experiment grid behind a table.
pub fn table_spec(id: TableId) -> Vec<RowSpec> {
    let gd = ClassificationThresholds::default();
    match id {
        TableId::T1 => T1
            .iter()
            .map(|&(k, vals)| RowSpec {
                label: km_label(k, 17),
                k,
                m: 17,
                optimizer: Optimizer::Gd,
                thresholds: gd,
                cells: vals
                    .iter()
                    .enumerate()
                    .map(|(k1, &p)| CellSpec { column: format!("k1={k1}"), quantity: Quantity::Family(k1), reference: Some(p) })
                    .collect(),
            })
            .collect(),
        TableId::T2 => T2
            .iter()
            .flat_map(|&(opt, vals)| {
                [17usize, 18, 19].into_iter().zip(vals).map(move |(k, p)| RowSpec {
                    label: format!("{opt} {}", km_label(k, 17)),
                    k,
                    m: 17,
                    optimizer: opt,
                    thresholds: if matches!(opt, Optimizer::Ngd | Optimizer::Ongd) { ngd_thresholds(k, 17) } else { gd },
                    cells: vec![CellSpec { column: "global".into(), quantity: Quantity::Global, reference: p }],
                })
            })
            .collect(),
        TableId::T4a => T4A
            .iter()
            .map(|&(k, l, g, n)| RowSpec {
                label: km_label(k, k),
                k,
                m: k,
                optimizer: Optimizer::Gd,
                thresholds: gd,
                cells: three_cells(l, g, n),
            })
            .collect(),
        TableId::T4b => T4B
            .iter()
            .map(|&(k, l, g, n)| RowSpec {
                label: km_label(k, k - 1),
                k,
                m: k - 1,
                optimizer: Optimizer::Gd,
                thresholds: gd,
                cells: three_cells(l, g, n),
            })
            .collect(),
        TableId::T5 | TableId::T6 => {
            let (rows, shift): (&[(usize, f64, f64, f64, f64, f64)], usize) =
                if id == TableId::T5 { (&T5, 0) } else { (&T6, 1) };
            rows.iter()
                .map(|&(k, l, g, n, epsilon, delta)| RowSpec {
                    label: km_label(k, k - shift),
                    k,
                    m: k - shift,
                    optimizer: Optimizer::Ngd,
                    thresholds: ClassificationThresholds { epsilon, delta },
                    cells: three_cells(l, g, n),
                })
                .collect()
        }
    }
}

/// Three-sigma binomial acceptance of a measured count against a published
/// percentage. Returns the 3σ half-width in percent and the verdict.
///
/// Cells published as exactly 0% (or 100%) accept a deviation of at most one
/// count, and "N/C" cells accept at most one run reaching the counted outcome.
pub fn binomial_check(reference: Option<f64>, count: usize, n: usize) -> (f64, bool) {
    let measured = 100.0 * count as f64 / n as f64;
    let Some(reference) = reference else {
        return (f64::NAN, count <= 1);
    };
    let p = reference / 100.0;
    if p <= 0.0 {
        return (0.0, count <= 1);
    }
    if p >= 1.0 {
        return (0.0, n - count <= 1);
    }
    let sigma3 = 300.0 * (p * (1.0 - p) / n as f64).sqrt();
    (sigma3, (measured - reference).abs() <= sigma3)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellResult {
    pub row: String,
    pub column: String,
    #[serde(rename = "K")]
    pub k: usize,
    #[serde(rename = "M")]
    pub m: usize,
    pub optimizer: Optimizer,
    pub epsilon: f64,
    pub delta: f64,
    pub reference: Option<f64>,
    pub measured: f64,
    pub count: usize,
    pub n_seeds: usize,
    pub sigma3: f64,
    pub pass: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TableReport {
    pub id: TableId,
    pub scale: f64,
    pub n_seeds: usize,
    pub cells: Vec<CellResult>,
}

impl TableReport {
    pub fn all_pass(&self) -> bool {
        self.cells.iter().all(|c| c.pass)
    }

    pub fn cell(&self, row: &str, column: &str) -> Option<&CellResult> {
        self.cells.iter().find(|c| c.row == row && c.column == column)
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record([
            "row", "column", "K", "M", "optimizer", "epsilon", "delta", "reference", "measured", "count", "n_seeds",
            "sigma3", "pass",
        ])?;
        for c in &self.cells {
            w.write_record([
                c.row.clone(),
                c.column.clone(),
                c.k.to_string(),
                c.m.to_string(),
                c.optimizer.to_string(),
                format!("{:e}", c.epsilon),
                format!("{:e}", c.delta),
                c.reference.map(|p| format!("{p:.2}")).unwrap_or_else(|| "N/C".into()),
                format!("{:.2}", c.measured),
                c.count.to_string(),
                c.n_seeds.to_string(),
                format!("{:.2}", c.sigma3),
                c.pass.to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

impl fmt::Display for TableReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "table {} at {} seeds per row", self.id, self.n_seeds)?;
        for c in &self.cells {
            let reference = c.reference.map(|p| format!("{p:6.2}")).unwrap_or_else(|| "   N/C".into());
            writeln!(
                f,
                "  {:<22} {:<8} reference {reference}  measured {:6.2}  ±{:5.2}  {}",
                c.row,
                c.column,
                c.measured,
                c.sigma3,
                if c.pass { "pass" } else { "FAIL" }
            )?;
        }
        Ok(())
    }
}

/// Re-runs the ensembles behind a published table at `scale · 10⁴` seeds per
/// row and compares every cell.
///
/// `base` supplies everything a row does not fix (integration, init, teacher,
/// seed base, activation). `only` restricts the run to the listed `(K, M)`
/// pairs; an empty slice runs the full grid.
pub fn reproduce_table(
    id: TableId,
    scale: f64,
    base: &ExperimentConfig,
    only: &[(usize, usize)],
) -> Result<TableReport> {
    if !(scale > 0.0 && scale <= 1.0) {
        return Err(Error::InvalidArgument(format!("scale must lie in (0, 1], got {scale}")));
    }
    let n_seeds = ((1e4 * scale).round() as usize).max(1);
    let mut cells = Vec::new();
    for row in table_spec(id) {
        if !only.is_empty() && !only.contains(&(row.k, row.m)) {
            continue;
        }
        let cfg = ExperimentConfig {
            k: row.k,
            m: row.m,
            n_seeds,
            thresholds: row.thresholds,
            attach_catalog: false,
            ..base.clone().with_optimizer(row.optimizer, base.optimizer.eta)
        };
        log::info!("table {id}: running {}", row.label);
        let rep = run_ensemble(&cfg)?;
        for cell in &row.cells {
            let count = cell.quantity.count(&rep);
            let (sigma3, pass) = binomial_check(cell.reference, count, n_seeds);
            cells.push(CellResult {
                row: row.label.clone(),
                column: cell.column.clone(),
                k: row.k,
                m: row.m,
                optimizer: row.optimizer,
                epsilon: row.thresholds.epsilon,
                delta: row.thresholds.delta,
                reference: cell.reference,
                measured: 100.0 * count as f64 / n_seeds as f64,
                count,
                n_seeds,
                sigma3,
                pass,
            });
        }
    }
    if cells.is_empty() {
        return Err(Error::InvalidArgument(format!("no rows of table {id} match the requested (K, M)")));
    }
    Ok(TableReport { id, scale, n_seeds, cells })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn published_rows_sum_to_100() {
        for id in [TableId::T4a, TableId::T4b, TableId::T5, TableId::T6] {
            for row in table_spec(id) {
                let s: f64 = row.cells.iter().map(|c| c.reference.unwrap()).sum();
                assert!((s - 100.0).abs() < 0.02, "{id} {} sums to {s}", row.label);
            }
        }
        let t1 = table_spec(TableId::T1);
        assert_eq!(t1.len(), 3);
        assert_eq!(t1[2].cells[0].reference, Some(99.63));
    }

    #[test]
    fn binomial_rules() {
        assert!(binomial_check(Some(0.0), 1, 1000).1);
        assert!(!binomial_check(Some(0.0), 2, 1000).1);
        assert!(binomial_check(Some(100.0), 999, 1000).1);
        assert!(binomial_check(None, 0, 1000).1);
        let (s, ok) = binomial_check(Some(86.09), 861, 1000);
        assert!(ok && (s - 3.28).abs() < 0.01);
        assert!(!binomial_check(Some(86.09), 900, 1000).1);
    }

    #[test]
    fn ids_parse() {
        for id in TableId::ALL {
            assert_eq!(id.to_string().parse::<TableId>().unwrap(), id);
        }
        assert!("t3".parse::<TableId>().is_err());
    }

    #[test]
    fn tiny_table_run() {
        let base = ExperimentConfig::default();
        let rep = reproduce_table(TableId::T5, 0.0002, &base, &[(2, 2)]).unwrap();
        assert_eq!(rep.n_seeds, 2);
        assert_eq!(rep.cells.len(), 3);
        assert!(reproduce_table(TableId::T5, 0.0, &base, &[]).is_err());
        assert!(reproduce_table(TableId::T5, 0.5, &base, &[(99, 99)]).is_err());
    }
}

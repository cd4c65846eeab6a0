//! Command-line front end.

use std::ffi::OsString;
use std::fs::File;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use crate::ansatz::{
    catalog_records, classify, family_catalog, solve_family, write_catalog_csv, FamilyRecord, SolveOutcome,
    SolverOptions,
};
use crate::dynamics::{integrate, IntegrationConfig, Optimizer};
use crate::error::{Error, Result};
use crate::kernels::ActivationKind;
use crate::landscape::{
    applicable_swaps, barrier_height, connectivity_suite, stability_probe, string_method, string_method_from,
    swap_via_silent_unit, write_path_csv, StabilityConfig, StringConfig, StringPath, SwapKind,
};
use crate::state::{random_init, OverlapState, PerturbMode};

use super::config::{ExperimentConfig, InitSpec, TeacherSpec};
use super::ensemble::run_ensemble;
use super::figures::{finite_d_robustness, run_dynamics_figure};
use super::tables::{reproduce_table, TableId};
use super::validate::validate_integrals;
use super::annotate_stability;

#[derive(Debug, Parser)]
#[command(name = "committee", version, about = "Order-parameter dynamics of teacher-student committee machines")]
struct Cli {
    /// TOML experiment config; command-line flags override its entries.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Base seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args, Default)]
struct ExperimentArgs {
    #[arg(long = "K")]
    k: Option<usize>,
    #[arg(long = "M")]
    m: Option<usize>,
    #[arg(long)]
    n_seeds: Option<usize>,
    /// gd, gd_2layer, sgd, ngd or ongd.
    #[arg(long)]
    optimizer: Option<Optimizer>,
    #[arg(long)]
    eta: Option<f64>,
    /// relu, erf or lrelu:<alpha>.
    #[arg(long)]
    activation: Option<ActivationKind>,
    /// Time step; one step moves the state by dt·η·rhs.
    #[arg(long)]
    dt: Option<f64>,
    #[arg(long)]
    max_steps: Option<u64>,
    /// Input dimension of the random initializations.
    #[arg(long, conflicts_with = "infinite_d")]
    d_init: Option<usize>,
    /// Start every run from the d → ∞ initialization.
    #[arg(long)]
    infinite_d: bool,
    /// orthonormal, gaussian or a path to a CSV teacher overlap matrix.
    #[arg(long)]
    teacher: Option<String>,
    /// Global-minimum loss threshold.
    #[arg(long)]
    epsilon: Option<f64>,
    /// Gradient threshold for non-converged runs.
    #[arg(long)]
    delta: Option<f64>,
    #[arg(long)]
    classify_tol: Option<f64>,
}

#[derive(Debug, Args)]
struct StringArgs {
    #[arg(long, default_value_t = 32)]
    images: usize,
    #[arg(long, default_value_t = 0.01)]
    dtau: f64,
    #[arg(long, default_value_t = 100_000)]
    max_iters: usize,
}

impl StringArgs {
    fn config(&self) -> StringConfig {
        StringConfig { images: self.images, dtau: self.dtau, max_iters: self.max_iters, ..Default::default() }
    }
}

#[derive(Debug, Args)]
struct FamilyArgs {
    #[arg(long = "K")]
    k: usize,
    #[arg(long = "M")]
    m: usize,
    #[arg(long)]
    k1: usize,
    /// Active extra units of the family (default 0: the width-M family padded with silent units).
    #[arg(long, default_value_t = 0)]
    extra: usize,
    #[arg(long, default_value = "relu")]
    activation: ActivationKind,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Integrate a single trajectory.
    Simulate {
        #[command(flatten)]
        exp: ExperimentArgs,
        #[arg(long, default_value_t = 100)]
        record_every: u64,
    },
    /// Integrate an ensemble of random initializations and classify the terminals.
    Ensemble {
        #[command(flatten)]
        exp: ExperimentArgs,
        /// Attach the solver's family losses.
        #[arg(long)]
        catalog: bool,
    },
    /// Solve the fixed-point families of a (K, M) pair.
    FixedPoint {
        #[arg(long = "K")]
        k: usize,
        #[arg(long = "M")]
        m: usize,
        #[arg(long)]
        k1_max: usize,
        #[arg(long, default_value = "relu")]
        activation: ActivationKind,
        /// Probe each record with a small perturbation and store the verdict.
        #[arg(long)]
        stability: bool,
    },
    /// Minimum-energy path between a global minimum and its two-unit swap.
    String {
        #[arg(long = "K")]
        k: usize,
        #[arg(long, default_value = "relu")]
        activation: ActivationKind,
        /// Reconnect the swap after appending one silent unit.
        #[arg(long)]
        embed: bool,
        /// Endpoint state files (JSON); override the swap construction.
        #[arg(long, requires = "to")]
        from: Option<PathBuf>,
        #[arg(long, requires = "from")]
        to: Option<PathBuf>,
        /// Also write every image as JSON.
        #[arg(long)]
        states: bool,
        #[command(flatten)]
        string: StringArgs,
    },
    /// String-method swaps between units of different roles of a family.
    Connectivity {
        #[command(flatten)]
        family: FamilyArgs,
        /// Comma-separated swap kinds (default: all that the family admits).
        #[arg(long, value_delimiter = ',')]
        kinds: Vec<SwapKind>,
        #[command(flatten)]
        string: StringArgs,
    },
    /// Perturb a family fixed point and measure how far relaxation carries it.
    Stability {
        #[command(flatten)]
        family: FamilyArgs,
        /// Append this many silent units before probing.
        #[arg(long, default_value_t = 0)]
        embed: usize,
        #[arg(long, value_delimiter = ',')]
        sigmas: Vec<f64>,
        #[arg(long, default_value_t = 20)]
        trials: usize,
        #[arg(long, default_value_t = 100_000)]
        relax_steps: u64,
        #[arg(long, default_value_t = 0.01)]
        relax_eta: f64,
        /// Perturb the d → ∞ overlaps instead of sampled weights.
        #[arg(long)]
        meanfield: bool,
        #[arg(long, default_value_t = 784)]
        d: usize,
    },
    /// Check the closed-form Gaussian integrals against Monte Carlo.
    ValidateIntegrals {
        #[arg(long, default_value_t = 1_000_000)]
        samples: usize,
        #[arg(long, default_value_t = 50)]
        covariances: usize,
        #[arg(long, default_value_t = 4.0)]
        z_max: f64,
    },
    /// Re-measure a published ensemble table.
    Table {
        /// t1, t2, t4a, t4b, t5 or t6.
        id: TableId,
        #[arg(long, default_value_t = 0.1)]
        scale: f64,
        /// Restrict to rows with these K:M pairs.
        #[arg(long, value_delimiter = ',', value_parser = parse_pair)]
        only: Vec<(usize, usize)>,
        #[command(flatten)]
        exp: ExperimentArgs,
    },
    /// Compare ensembles started from weights sampled at several dimensions.
    FiniteD {
        #[command(flatten)]
        exp: ExperimentArgs,
        #[arg(long, value_delimiter = ',', default_values_t = [196, 392, 784])]
        dims: Vec<usize>,
    },
    /// Loss curves of an ensemble with the family reference levels.
    Dynamics {
        #[command(flatten)]
        exp: ExperimentArgs,
        #[arg(long, default_value_t = 100)]
        record_every: u64,
    },
}

fn parse_pair(s: &str) -> std::result::Result<(usize, usize), String> {
    let (k, m) = s.split_once(':').ok_or_else(|| format!("expected K:M, got '{s}'"))?;
    Ok((k.parse().map_err(|e| format!("{e}"))?, m.parse().map_err(|e| format!("{e}"))?))
}

impl ExperimentArgs {
    fn apply(&self, base: ExperimentConfig) -> Result<ExperimentConfig> {
        let mut cfg = base;
        if let Some(k) = self.k {
            cfg.k = k;
        }
        if let Some(m) = self.m {
            cfg.m = m;
        }
        if let Some(n) = self.n_seeds {
            cfg.n_seeds = n;
        }
        if self.optimizer.is_some() || self.eta.is_some() {
            let kind = self.optimizer.unwrap_or(cfg.optimizer.kind);
            let eta = self.eta.unwrap_or(cfg.optimizer.eta);
            cfg = cfg.with_optimizer(kind, eta);
        }
        if let Some(a) = self.activation {
            cfg.activation = a;
        }
        if let Some(dt) = self.dt {
            cfg.integration.dt = dt;
        }
        if let Some(s) = self.max_steps {
            cfg.integration.max_steps = s;
        }
        if let Some(d) = self.d_init {
            cfg.init = InitSpec::DInit(d);
        }
        if self.infinite_d {
            cfg.init = InitSpec::InfiniteD;
        }
        if let Some(t) = &self.teacher {
            cfg.teacher = match t.as_str() {
                "orthonormal" => TeacherSpec::Orthonormal,
                "gaussian" => TeacherSpec::Gaussian,
                path => TeacherSpec::MatrixFile(PathBuf::from(path)),
            };
        }
        if let Some(e) = self.epsilon {
            cfg.thresholds.epsilon = e;
        }
        if let Some(d) = self.delta {
            cfg.thresholds.delta = d;
        }
        if let Some(t) = self.classify_tol {
            cfg.classify_tol = t;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

struct Ctx {
    config: Option<ExperimentConfig>,
    out: PathBuf,
    seed: Option<u64>,
}

impl Ctx {
    fn experiment(&self, exp: &ExperimentArgs) -> Result<ExperimentConfig> {
        let mut cfg = self.config.clone().unwrap_or_default();
        if let Some(s) = self.seed {
            cfg.seed_base = s;
        }
        exp.apply(cfg)
    }

    fn file(&self, name: &str) -> Result<File> {
        std::fs::create_dir_all(&self.out)?;
        Ok(File::create(self.out.join(name))?)
    }

    fn json<T: Serialize>(&self, name: &str, value: &T) -> Result<()> {
        std::fs::create_dir_all(&self.out)?;
        std::fs::write(self.out.join(name), serde_json::to_string_pretty(value)? + "\n")?;
        Ok(())
    }
}

fn read_state(path: &Path) -> Result<OverlapState> {
    let s: OverlapState = serde_json::from_str(&std::fs::read_to_string(path)?)?;
    s.check_realizable()?;
    Ok(s)
}

fn family_state(f: &FamilyArgs) -> Result<(FamilyRecord, OverlapState)> {
    if f.k1 > f.m || f.k < f.m + f.extra {
        return Err(Error::InvalidArgument(format!(
            "need k1 <= M and K >= M + extra, got K={} M={} k1={} extra={}",
            f.k, f.m, f.k1, f.extra
        )));
    }
    match solve_family(f.k1, f.m - f.k1, f.extra, None, f.activation, &SolverOptions::default())? {
        SolveOutcome::Solved(rec) => {
            let s = rec.state();
            let s = if f.k > s.k { s.embed(f.k - s.k, 1.0)? } else { s };
            Ok((rec, s))
        }
        SolveOutcome::NoSolution { reason, .. } => Err(Error::NoSolution(reason)),
    }
}

#[derive(Serialize)]
struct PathSummary {
    barrier: f64,
    iterations: usize,
    initial_force: f64,
    final_force: f64,
    max_clip: f64,
    endpoint_losses: (f64, f64),
}

fn path_summary(p: &StringPath) -> PathSummary {
    PathSummary {
        barrier: barrier_height(p),
        iterations: p.iterations_run,
        initial_force: p.initial_force,
        final_force: p.final_force,
        max_clip: p.max_clip,
        endpoint_losses: (p.losses[0], *p.losses.last().expect("non-empty path")),
    }
}

/// Exit status: 0 success, 1 failed validation or runtime error.
fn execute(cmd: Command, ctx: &Ctx) -> Result<i32> {
    match cmd {
        Command::Simulate { exp, record_every } => {
            let cfg = ctx.experiment(&exp)?;
            let s0 = random_init(cfg.k, cfg.m, &cfg.init_options()?, cfg.seed_base)?;
            let icfg = IntegrationConfig { record_every, ..cfg.integration.clone() };
            let tr = integrate(&s0, &cfg.optimizer, &icfg, cfg.activation)?;
            tr.write_csv(ctx.file("trajectory.csv")?, false)?;
            let c = classify(&tr.terminal, cfg.classify_tol);
            #[derive(Serialize)]
            struct Summary {
                seed: u64,
                terminal_loss: f64,
                terminal_grad: f64,
                steps: u64,
                stop_reason: String,
                family: String,
                terminal: OverlapState,
            }
            let sum = Summary {
                seed: cfg.seed_base,
                terminal_loss: tr.terminal_loss,
                terminal_grad: tr.terminal_grad,
                steps: tr.steps,
                stop_reason: tr.stop_reason.to_string(),
                family: c.family.to_string(),
                terminal: tr.terminal,
            };
            ctx.json("summary.json", &sum)?;
            println!(
                "loss {:.6e}  grad {:.2e}  {} after {} steps  family {}",
                sum.terminal_loss, sum.terminal_grad, sum.stop_reason, sum.steps, sum.family
            );
            Ok(0)
        }
        Command::Ensemble { exp, catalog } => {
            let mut cfg = ctx.experiment(&exp)?;
            cfg.attach_catalog |= catalog;
            let rep = run_ensemble(&cfg)?;
            rep.write_outputs(&ctx.out)?;
            println!("{}", rep.summary());
            Ok(0)
        }
        Command::FixedPoint { k, m, k1_max, activation, stability } => {
            let entries = family_catalog(k, m, k1_max, activation, &SolverOptions::default())?;
            let mut records: Vec<FamilyRecord> = catalog_records(&entries).into_iter().cloned().collect();
            if stability {
                annotate_stability(&mut records, activation)?;
            }
            write_catalog_csv(&records.iter().collect::<Vec<_>>(), ctx.file("catalog.csv")?)?;
            ctx.json("catalog.json", &records)?;
            ctx.json("catalog_entries.json", &entries)?;
            for e in &entries {
                match &e.outcome {
                    SolveOutcome::Solved(r) => println!(
                        "k1={} extra={}{}  loss {:.10}  residual {:.1e}",
                        r.k1,
                        r.extra,
                        if r.embedded { " (embedded)" } else { "" },
                        r.loss,
                        r.residual_norm
                    ),
                    SolveOutcome::NoSolution { reason, .. } => {
                        println!("k1={} extra={}  no solution: {reason}", e.k1, e.extra)
                    }
                }
            }
            Ok(0)
        }
        Command::String { k, activation, embed, from, to, states, string } => {
            let cfg = string.config();
            let path = match (from, to) {
                (Some(a), Some(b)) => string_method(&read_state(&a)?, &read_state(&b)?, &cfg, activation)?,
                _ => {
                    if k < 2 {
                        return Err(Error::InvalidArgument("a swap needs K >= 2".into()));
                    }
                    let a = OverlapState::global_minimum(k);
                    if embed {
                        let e = a.embed(1, 1.0)?;
                        string_method_from(&swap_via_silent_unit(&e, 0, 1, k, cfg.images)?, &cfg, activation)?
                    } else {
                        let mut perm: Vec<usize> = (0..k).collect();
                        perm.swap(0, 1);
                        string_method(&a, &a.permute_units(&perm)?, &cfg, activation)?
                    }
                }
            };
            write_path_csv(&path, ctx.file("path.csv")?)?;
            if states {
                ctx.json("path_states.json", &path.images)?;
            }
            let sum = path_summary(&path);
            ctx.json("path_summary.json", &sum)?;
            println!("barrier {:.6e} after {} iterations", sum.barrier, sum.iterations);
            Ok(0)
        }
        Command::Connectivity { family, kinds, string } => {
            let (_, s) = family_state(&family)?;
            let kinds = if kinds.is_empty() { applicable_swaps(&s, 0.05) } else { kinds };
            let results = connectivity_suite(&s, &kinds, &string.config(), family.activation, 0.05)?;
            #[derive(Serialize)]
            struct Row {
                swap_kind: String,
                units: (usize, usize),
                barrier: f64,
                profile: String,
                min_loss: f64,
                path: PathSummary,
            }
            let mut rows = Vec::new();
            for r in &results {
                write_path_csv(&r.path, ctx.file(&format!("path_{}.csv", r.swap_kind))?)?;
                let min_loss = r.path.losses.iter().copied().fold(f64::INFINITY, f64::min);
                println!("{:<18} barrier {:.3e}  min loss {:.5}  {}", r.swap_kind, r.barrier, min_loss, r.profile);
                rows.push(Row {
                    swap_kind: r.swap_kind.to_string(),
                    units: r.units,
                    barrier: r.barrier,
                    profile: r.profile.to_string(),
                    min_loss,
                    path: path_summary(&r.path),
                });
            }
            ctx.json("connectivity.json", &rows)?;
            Ok(0)
        }
        Command::Stability { family, embed, sigmas, trials, relax_steps, relax_eta, meanfield, d } => {
            let (_, s) = family_state(&family)?;
            let s = if embed > 0 { s.embed(embed, 1.0)? } else { s };
            let mut cfg = StabilityConfig {
                trials,
                relax_steps,
                relax_eta,
                mode: if meanfield { PerturbMode::Meanfield } else { PerturbMode::FiniteD { d } },
                seed: ctx.seed.unwrap_or(0),
                ..Default::default()
            };
            if !sigmas.is_empty() {
                cfg.sigmas = sigmas;
            }
            let rep = stability_probe(&s, &cfg, family.activation)?;
            rep.write_csv(ctx.file("stability.csv")?)?;
            for (i, sg) in rep.sigma_grid.iter().enumerate() {
                println!("sigma {sg:.2e}  distance {:.3e} ± {:.1e}", rep.mean_distance[i], rep.std_distance[i]);
            }
            Ok(0)
        }
        Command::ValidateIntegrals { samples, covariances, z_max } => {
            let acts = [ActivationKind::Relu, ActivationKind::LeakyRelu { alpha: 0.01 }, ActivationKind::Erf];
            let rep = validate_integrals(&acts, covariances, samples, z_max, ctx.seed.unwrap_or(0))?;
            rep.write_csv(ctx.file("integrals.csv")?)?;
            let worst = rep.checks.iter().map(|c| c.z).fold(0.0, f64::max);
            let failed = rep.checks.iter().filter(|c| !c.pass).count();
            println!("{} checks, {failed} beyond {z_max} sigma, worst z = {worst:.2}", rep.checks.len());
            Ok(if rep.all_pass() { 0 } else { 1 })
        }
        Command::Table { id, scale, only, exp } => {
            let base = ctx.experiment(&exp)?;
            let rep = reproduce_table(id, scale, &base, &only)?;
            rep.write_csv(ctx.file(&format!("table_{id}.csv"))?)?;
            ctx.json(&format!("table_{id}.json"), &rep)?;
            print!("{rep}");
            Ok(if rep.all_pass() { 0 } else { 1 })
        }
        Command::FiniteD { exp, dims } => {
            let mut cfg = ctx.experiment(&exp)?;
            if exp.teacher.is_none() && ctx.config.is_none() {
                cfg.teacher = TeacherSpec::Gaussian;
            }
            let rep = finite_d_robustness(&cfg, &dims)?;
            rep.write_csv(ctx.file("finite_d.csv")?)?;
            ctx.json("finite_d.json", &rep)?;
            for k1 in rep.common_families(2) {
                let s: Vec<String> = rep.std_along_d(k1).iter().map(|x| format!("{x:.3e}")).collect();
                println!("k1={k1}: loss std along d = [{}]", s.join(", "));
            }
            Ok(0)
        }
        Command::Dynamics { exp, record_every } => {
            let cfg = ctx.experiment(&exp)?;
            let b = run_dynamics_figure(&cfg, record_every)?;
            b.write_traces_csv(ctx.file("traces.csv")?)?;
            b.write_levels_csv(ctx.file("levels.csv")?)?;
            println!(
                "{} traces, {:.1}% end below {:.0e}",
                b.traces.len(),
                100.0 * b.zero_fraction(cfg.thresholds.epsilon),
                cfg.thresholds.epsilon
            );
            Ok(0)
        }
    }
}

/// Runs the command line `argv` (including the program name) and returns the
/// process exit code: 0 on success, 1 on a failed validation or runtime
/// error, 2 on a usage error.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    let config = match cli.config.as_deref().map(ExperimentConfig::load).transpose() {
        Ok(c) => c,
        Err(e) => {
            eprintln!("error: --config: {e}");
            return 2;
        }
    };
    let out = cli
        .out
        .clone()
        .or_else(|| config.as_ref().map(|c| c.outputs.clone()))
        .unwrap_or_else(|| PathBuf::from("out"));
    let ctx = Ctx { config, out, seed: cli.seed };
    let pool = match rayon::ThreadPoolBuilder::new().num_threads(cli.threads.unwrap_or(0)).build() {
        Ok(p) => p,
        Err(e) => {
            eprintln!("error: --threads: {e}");
            return 2;
        }
    };
    match pool.install(|| execute(cli.command, &ctx)) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    }
}

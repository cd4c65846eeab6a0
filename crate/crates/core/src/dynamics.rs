//! Right-hand sides and fixed-step integration of the overlap ODEs.
//!
//! Time is measured so that `ds/dt = η · rhs(s)`; every `rhs_*` function
//! returns the bracket with `η` factored out. One Euler step therefore moves
//! the state by `dt · η · rhs(s)`.

use std::io::Write;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernels::{i2_raw, i3_coefficients, swapped_b, ActivationKind};
use crate::linalg::{clip_psd, psd_factor, symmetrize};
use crate::state::{overlaps_from_weights, OverlapState, WeightRealization};

/// Training rule.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Optimizer {
    #[default]
    Gd,
    /// GD on both layers (readout `v` trained too).
    Gd2Layer,
    /// Online SGD; optionally keeps the diffusive second-order term.
    Sgd,
    /// GD with the radial component removed (`Q_ii = 1`).
    Ngd,
    /// GD projected onto orthonormal student weights (`Q = I`).
    Ongd,
}

impl std::fmt::Display for Optimizer {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let name = match self {
            Optimizer::Gd => "gd",
            Optimizer::Gd2Layer => "gd_2layer",
            Optimizer::Sgd => "sgd",
            Optimizer::Ngd => "ngd",
            Optimizer::Ongd => "ongd",
        };
        f.write_str(name)
    }
}

impl std::str::FromStr for Optimizer {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "gd" => Ok(Optimizer::Gd),
            "gd_2layer" | "2l-gd" | "gd2layer" => Ok(Optimizer::Gd2Layer),
            "sgd" => Ok(Optimizer::Sgd),
            "ngd" => Ok(Optimizer::Ngd),
            "ongd" => Ok(Optimizer::Ongd),
            other => Err(Error::InvalidArgument(format!("unknown optimizer '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OptimizerKind {
    pub kind: Optimizer,
    pub eta: f64,
    #[serde(default)]
    pub sgd_keep_i4: bool,
    #[serde(default = "default_i4_samples")]
    pub i4_samples: usize,
}

fn default_i4_samples() -> usize {
    20_000
}

impl Default for OptimizerKind {
    fn default() -> Self {
        OptimizerKind::new(Optimizer::Gd, 0.1)
    }
}

impl OptimizerKind {
    pub fn new(kind: Optimizer, eta: f64) -> Self {
        OptimizerKind { kind, eta, sgd_keep_i4: false, i4_samples: default_i4_samples() }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.eta > 0.0 && self.eta.is_finite()) {
            return Err(Error::InvalidArgument(format!("eta must be > 0, got {}", self.eta)));
        }
        if self.sgd_keep_i4 && self.i4_samples < 1000 {
            return Err(Error::InvalidArgument("i4_samples must be >= 1000".into()));
        }
        Ok(())
    }

    /// Checks the entry constraint of the constrained optimizers.
    pub fn check_constraints(&self, s: &OverlapState) -> Result<()> {
        match self.kind {
            Optimizer::Ngd => {
                for i in 0..s.k {
                    let dev = (s.q[(i, i)] - 1.0).abs();
                    if dev > 1e-8 {
                        return Err(Error::Constraint(format!(
                            "ngd needs Q_ii = 1, unit {i} deviates by {dev:.2e}"
                        )));
                    }
                }
                Ok(())
            }
            Optimizer::Ongd => {
                let dev = (&s.q - DMatrix::<f64>::identity(s.k, s.k)).abs().max();
                if dev > 1e-8 {
                    return Err(Error::Constraint(format!("ongd needs Q = I, deviation {dev:.2e}")));
                }
                Ok(())
            }
            _ => Ok(()),
        }
    }
}

/// Time derivatives of `(R, Q, v)` with the learning rate factored out.
#[derive(Debug, Clone, PartialEq)]
pub struct Rhs {
    pub dr: DMatrix<f64>,
    pub dq: DMatrix<f64>,
    pub dv: DVector<f64>,
}

impl Rhs {
    pub fn zeros(k: usize, m: usize) -> Self {
        Rhs { dr: DMatrix::zeros(k, m), dq: DMatrix::zeros(k, k), dv: DVector::zeros(k) }
    }

    /// Max-norm over all three components.
    pub fn max_norm(&self) -> f64 {
        self.dr
            .iter()
            .chain(self.dq.iter())
            .chain(self.dv.iter())
            .fold(0.0f64, |a, &b| a.max(b.abs()))
    }

    pub fn is_finite(&self) -> bool {
        self.dr.iter().chain(self.dq.iter()).chain(self.dv.iter()).all(|x| x.is_finite())
    }
}

/// `G_i(x) = E[g'(λ_i) x Δ]` for `x` ranging over teacher fields (`rho`,
/// `K × M`) and student fields (`lambda`, `K × K`, `lambda[(i, k)] = G_i(λ_k)`),
/// with `Δ = Σ v*_m g(ρ_m) - Σ v_j g(λ_j)`.
pub(crate) struct ErrorCorrelations {
    pub rho: DMatrix<f64>,
    pub lambda: DMatrix<f64>,
}

pub(crate) fn error_correlations(s: &OverlapState, act: ActivationKind) -> ErrorCorrelations {
    let (k, m) = (s.k, s.m);
    // Every I3 is linear in the covariances touching x1, so for each unit i and
    // partner p only the coefficients (a, b) need transcendental functions.
    let mut at = DMatrix::zeros(k, m);
    let mut as_ = DMatrix::zeros(k, k);
    let mut beta = DVector::<f64>::zeros(k);
    for i in 0..k {
        let qii = s.q[(i, i)];
        let mut b_sum = 0.0;
        for n in 0..m {
            let (a, b) = i3_coefficients(act, qii, s.r[(i, n)], s.t[(n, n)]);
            at[(i, n)] = s.v_star[n] * a;
            b_sum += s.v_star[n] * b;
        }
        beta[i] += b_sum;
        // Student pairs share `a`, and the two `b`s differ by a variance
        // ratio, so each unordered pair is evaluated once.
        for j in i..k {
            let qjj = s.q[(j, j)];
            let (a, b) = i3_coefficients(act, qii, s.q[(i, j)], qjj);
            as_[(i, j)] = -s.v[j] * a;
            beta[i] -= s.v[j] * b;
            if j != i {
                as_[(j, i)] = -s.v[i] * a;
                beta[j] -= s.v[i] * swapped_b(act, b, qii, qjj);
            }
        }
    }
    let mut rho = &at * &s.t + &as_ * &s.r;
    let mut lambda = &at * s.r.transpose() + &as_ * &s.q;
    for i in 0..k {
        for n in 0..m {
            rho[(i, n)] += beta[i] * s.r[(i, n)];
        }
        for j in 0..k {
            lambda[(i, j)] += beta[i] * s.q[(i, j)];
        }
    }
    ErrorCorrelations { rho, lambda }
}

fn readout_gradient(s: &OverlapState, act: ActivationKind) -> DVector<f64> {
    DVector::from_fn(s.k, |i, _| {
        let qii = s.q[(i, i)];
        let teacher: f64 = (0..s.m)
            .map(|n| s.v_star[n] * i2_raw(act, qii, s.t[(n, n)], s.r[(i, n)]))
            .sum();
        let student: f64 =
            (0..s.k).map(|j| s.v[j] * i2_raw(act, qii, s.q[(j, j)], s.q[(i, j)])).sum();
        teacher - student
    })
}

/// Gradient-flow right-hand side.
pub fn rhs_gd(s: &OverlapState, act: ActivationKind, train_v: bool) -> Result<Rhs> {
    s.check_realizable()?;
    Ok(rhs_gd_unchecked(s, act, train_v))
}

pub(crate) fn rhs_gd_unchecked(s: &OverlapState, act: ActivationKind, train_v: bool) -> Rhs {
    let g = error_correlations(s, act);
    let k = s.k;
    let mut dr = g.rho;
    let mut a = g.lambda;
    for i in 0..k {
        let vi = s.v[i];
        dr.row_mut(i).scale_mut(vi);
        a.row_mut(i).scale_mut(vi);
    }
    let dq = &a + a.transpose();
    let dv = if train_v { readout_gradient(s, act) } else { DVector::zeros(k) };
    Rhs { dr, dq, dv }
}

/// Online-SGD right-hand side.
///
/// Without the second-order term this is exactly [`rhs_gd`]. With it, `dQ`
/// gains `η v_i v_k E[g'(λ_i) g'(λ_k) Δ²]`, estimated by Monte Carlo over the
/// joint Gaussian law of the local fields with a fixed seed so that the
/// right-hand side is a deterministic function of the state.
pub fn rhs_sgd(s: &OverlapState, act: ActivationKind, opt: &OptimizerKind) -> Result<Rhs> {
    let mut out = rhs_gd(s, act, false)?;
    if opt.sgd_keep_i4 {
        let corr = diffusion_term(s, act, opt.i4_samples, 0x5eed_0004)?;
        out.dq += corr * opt.eta;
    }
    Ok(out)
}

fn diffusion_term(s: &OverlapState, act: ActivationKind, n_samples: usize, seed: u64) -> Result<DMatrix<f64>> {
    let (k, m) = (s.k, s.m);
    let l = psd_factor(&s.joint_gram(), 1e-8)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut z = DVector::zeros(k + m);
    let mut acc = DMatrix::zeros(k, k);
    let mut gp = DVector::zeros(k);
    for _ in 0..n_samples {
        for zi in z.iter_mut() {
            *zi = rng.sample(StandardNormal);
        }
        let x = &l * &z;
        let mut delta = 0.0;
        for n in 0..m {
            delta += s.v_star[n] * act.g(x[k + n]);
        }
        for i in 0..k {
            delta -= s.v[i] * act.g(x[i]);
            gp[i] = s.v[i] * act.dg(x[i]);
        }
        let d2 = delta * delta;
        for i in 0..k {
            if gp[i] == 0.0 {
                continue;
            }
            for j in 0..k {
                acc[(i, j)] += gp[i] * gp[j] * d2;
            }
        }
    }
    Ok(symmetrize(&(acc / n_samples as f64)))
}

/// Normalized-GD right-hand side; requires `Q_ii = 1`.
pub fn rhs_ngd(s: &OverlapState, act: ActivationKind) -> Result<Rhs> {
    s.check_realizable()?;
    OptimizerKind::new(Optimizer::Ngd, 1.0).check_constraints(s)?;
    Ok(rhs_ngd_unchecked(s, act))
}

fn rhs_ngd_unchecked(s: &OverlapState, act: ActivationKind) -> Rhs {
    let g = error_correlations(s, act);
    let k = s.k;
    let radial = DVector::from_fn(k, |i, _| s.v[i] * g.lambda[(i, i)]);
    let mut dr = g.rho;
    let mut a = g.lambda;
    for i in 0..k {
        let vi = s.v[i];
        dr.row_mut(i).scale_mut(vi);
        a.row_mut(i).scale_mut(vi);
        for n in 0..s.m {
            dr[(i, n)] -= s.r[(i, n)] * radial[i];
        }
    }
    let mut dq = &a + a.transpose();
    for i in 0..k {
        for j in 0..k {
            dq[(i, j)] -= s.q[(i, j)] * (radial[i] + radial[j]);
        }
    }
    Rhs { dr, dq, dv: DVector::zeros(k) }
}

/// Orthonormalized-GD right-hand side; requires `Q = I`.
pub fn rhs_ongd(s: &OverlapState, act: ActivationKind) -> Result<Rhs> {
    s.check_realizable()?;
    OptimizerKind::new(Optimizer::Ongd, 1.0).check_constraints(s)?;
    Ok(rhs_ongd_unchecked(s, act))
}

fn rhs_ongd_unchecked(s: &OverlapState, act: ActivationKind) -> Rhs {
    let g = error_correlations(s, act);
    let k = s.k;
    let mut dr = g.rho - &g.lambda * &s.r;
    for i in 0..k {
        dr.row_mut(i).scale_mut(s.v[i]);
    }
    Rhs { dr, dq: DMatrix::zeros(k, k), dv: DVector::zeros(k) }
}

/// Right-hand side for any optimizer, with its entry checks.
pub fn rhs(s: &OverlapState, act: ActivationKind, opt: &OptimizerKind) -> Result<Rhs> {
    match opt.kind {
        Optimizer::Gd => rhs_gd(s, act, false),
        Optimizer::Gd2Layer => rhs_gd(s, act, true),
        Optimizer::Sgd => rhs_sgd(s, act, opt),
        Optimizer::Ngd => rhs_ngd(s, act),
        Optimizer::Ongd => rhs_ongd(s, act),
    }
}

fn rhs_fast(s: &OverlapState, act: ActivationKind, opt: &OptimizerKind) -> Result<Rhs> {
    Ok(match opt.kind {
        Optimizer::Gd => rhs_gd_unchecked(s, act, false),
        Optimizer::Gd2Layer => rhs_gd_unchecked(s, act, true),
        Optimizer::Sgd => {
            let mut out = rhs_gd_unchecked(s, act, false);
            if opt.sgd_keep_i4 {
                out.dq += diffusion_term(s, act, opt.i4_samples, 0x5eed_0004)? * opt.eta;
            }
            out
        }
        Optimizer::Ngd => rhs_ngd_unchecked(s, act),
        Optimizer::Ongd => rhs_ongd_unchecked(s, act),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scheme {
    #[default]
    Euler,
    Heun,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct IntegrationConfig {
    /// Time step; one step moves the state by `dt · η · rhs`.
    pub dt: f64,
    pub max_steps: u64,
    /// Stop when the max-norm of `η · rhs` falls below this.
    pub grad_tol: f64,
    /// Record a snapshot every this many steps (0 records only the endpoints).
    pub record_every: u64,
    /// Stop when the loss falls below this.
    pub loss_floor: f64,
    /// Steps between loss evaluations for the floor check.
    pub loss_check_every: u64,
    pub scheme: Scheme,
}

impl Default for IntegrationConfig {
    fn default() -> Self {
        IntegrationConfig::for_eta(0.1)
    }
}

impl IntegrationConfig {
    /// Defaults with `dt · η = 0.01`.
    pub fn for_eta(eta: f64) -> Self {
        IntegrationConfig {
            dt: 0.01 / eta,
            max_steps: 1_200_000,
            grad_tol: 1e-9,
            record_every: 0,
            loss_floor: 0.0,
            loss_check_every: 100,
            scheme: Scheme::Euler,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.dt > 0.0 && self.dt.is_finite()) {
            return Err(Error::InvalidArgument(format!("dt must be > 0, got {}", self.dt)));
        }
        if self.grad_tol < 0.0 || self.loss_floor < 0.0 {
            return Err(Error::InvalidArgument("tolerances must be >= 0".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    GradTol,
    LossFloor,
    MaxSteps,
}

impl std::fmt::Display for StopReason {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            StopReason::GradTol => "grad_tol",
            StopReason::LossFloor => "loss_floor",
            StopReason::MaxSteps => "max_steps",
        })
    }
}

#[derive(Debug, Clone)]
pub struct Trajectory {
    pub times: Vec<f64>,
    pub states: Vec<OverlapState>,
    pub losses: Vec<f64>,
    pub grad_norms: Vec<f64>,
    pub terminal: OverlapState,
    pub terminal_loss: f64,
    pub terminal_grad: f64,
    pub steps: u64,
    pub stop_reason: StopReason,
    /// Largest eigenvalue magnitude removed by the realizability guard.
    pub max_clip: f64,
    /// Number of steps at which the guard had to intervene.
    pub clip_steps: u64,
}

impl Trajectory {
    /// Writes `time,loss,grad_norm` rows, optionally followed by the flattened
    /// `(Q upper triangle, R)` coordinates of each snapshot.
    pub fn write_csv<W: Write>(&self, out: W, with_states: bool) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let mut header = vec!["time".to_string(), "loss".into(), "grad_norm".into()];
        if with_states {
            if let Some(s) = self.states.first() {
                for i in 0..s.k {
                    for j in i..s.k {
                        header.push(format!("Q_{i}_{j}"));
                    }
                }
                for i in 0..s.k {
                    for n in 0..s.m {
                        header.push(format!("R_{i}_{n}"));
                    }
                }
            }
        }
        w.write_record(&header)?;
        for idx in 0..self.times.len() {
            let mut row = vec![
                format!("{:.10e}", self.times[idx]),
                format!("{:.10e}", self.losses[idx]),
                format!("{:.10e}", self.grad_norms[idx]),
            ];
            if with_states {
                row.extend(self.states[idx].coordinates().iter().map(|x| format!("{x:.10e}")));
            }
            w.write_record(&row)?;
        }
        w.flush()?;
        Ok(())
    }
}


/// Keeps an integrated state inside the realizable set.
struct Guard {
    t_inv: DMatrix<f64>,
    /// Whitening factor `T^{-1/2}` used for the orthonormal constraint.
    t_inv_sqrt: DMatrix<f64>,
    t_sqrt: DMatrix<f64>,
}

impl Guard {
    fn new(t: &DMatrix<f64>) -> Result<Self> {
        let t_inv = t
            .clone()
            .try_inverse()
            .ok_or_else(|| Error::NotRealizable("teacher overlap T is singular".into()))?;
        let eig = nalgebra::SymmetricEigen::new(symmetrize(t));
        let v = &eig.eigenvectors;
        let t_sqrt = v * DMatrix::from_diagonal(&eig.eigenvalues.map(f64::sqrt)) * v.transpose();
        let t_inv_sqrt =
            v * DMatrix::from_diagonal(&eig.eigenvalues.map(|l| 1.0 / l.sqrt())) * v.transpose();
        Ok(Guard { t_inv, t_inv_sqrt, t_sqrt })
    }

    /// Returns the clipped magnitude (0 if the state was already realizable).
    fn apply(&self, s: &mut OverlapState, kind: Optimizer) -> f64 {
        match kind {
            Optimizer::Ngd => {
                // Euler drifts off the sphere at second order; rescale each unit.
                let scale: Vec<f64> = (0..s.k).map(|i| 1.0 / s.q[(i, i)].max(1e-300).sqrt()).collect();
                for i in 0..s.k {
                    for j in 0..s.k {
                        s.q[(i, j)] *= scale[i] * scale[j];
                    }
                    s.q[(i, i)] = 1.0;
                    for n in 0..s.m {
                        s.r[(i, n)] *= scale[i];
                    }
                }
                self.clip_schur(s)
            }
            Optimizer::Ongd => {
                // Q = I is exact, so realizability means the whitened R has
                // singular values at most one.
                let w = &s.r * &self.t_inv_sqrt;
                let svd = w.clone().svd(true, true);
                let top = svd.singular_values.iter().cloned().fold(0.0f64, f64::max);
                if top <= 1.0 + 1e-12 {
                    return 0.0;
                }
                let u = svd.u.expect("requested");
                let vt = svd.v_t.expect("requested");
                let sv = svd.singular_values.map(|x| x.min(1.0));
                s.r = u * DMatrix::from_diagonal(&sv) * vt * &self.t_sqrt;
                top * top - 1.0
            }
            _ => self.clip_schur(s),
        }
    }

    fn clip_schur(&self, s: &mut OverlapState) -> f64 {
        let par = symmetrize(&(&s.r * &self.t_inv * s.r.transpose()));
        let n = &s.q - &par;
        let shifted = &n + DMatrix::<f64>::identity(s.k, s.k) * crate::linalg::PSD_TOL;
        if shifted.cholesky().is_some() {
            return 0.0;
        }
        let (clipped, mag) = clip_psd(&n);
        s.q = par + clipped;
        mag
    }
}

fn add_scaled(s: &OverlapState, d: &Rhs, h: f64) -> OverlapState {
    let mut out = s.clone();
    out.r += &d.dr * h;
    out.q += &d.dq * h;
    out.q = symmetrize(&out.q);
    out.v += &d.dv * h;
    out
}

fn combine(a: &Rhs, b: &Rhs) -> Rhs {
    Rhs {
        dr: (&a.dr + &b.dr) * 0.5,
        dq: (&a.dq + &b.dq) * 0.5,
        dv: (&a.dv + &b.dv) * 0.5,
    }
}

/// Integrates the overlap ODEs from `s0`.
pub fn integrate(
    s0: &OverlapState,
    opt: &OptimizerKind,
    cfg: &IntegrationConfig,
    act: ActivationKind,
) -> Result<Trajectory> {
    opt.validate()?;
    cfg.validate()?;
    s0.check_realizable()?;
    opt.check_constraints(s0)?;
    let guard = Guard::new(&s0.t)?;
    let h = cfg.dt * opt.eta;
    let mut s = s0.clone();
    let mut traj = Trajectory {
        times: Vec::new(),
        states: Vec::new(),
        losses: Vec::new(),
        grad_norms: Vec::new(),
        terminal: s0.clone(),
        terminal_loss: 0.0,
        terminal_grad: 0.0,
        steps: 0,
        stop_reason: StopReason::MaxSteps,
        max_clip: 0.0,
        clip_steps: 0,
    };
    let mut step: u64 = 0;
    let stop = loop {
        let d = rhs_fast(&s, act, opt)?;
        if !d.is_finite() {
            return Err(Error::NonFinite { step });
        }
        let grad = d.max_norm() * opt.eta;
        let at_record = step == 0 || (cfg.record_every > 0 && step % cfg.record_every == 0);
        let check_loss = cfg.loss_floor > 0.0
            && cfg.loss_check_every > 0
            && step % cfg.loss_check_every == 0;
        let mut loss = None;
        if at_record || check_loss {
            let l = s.loss_unchecked(act);
            if !l.is_finite() {
                return Err(Error::NonFinite { step });
            }
            loss = Some(l);
        }
        if at_record {
            traj.times.push(step as f64 * cfg.dt);
            traj.states.push(s.clone());
            traj.losses.push(loss.expect("computed at record points"));
            traj.grad_norms.push(grad);
        }
        if grad < cfg.grad_tol {
            break StopReason::GradTol;
        }
        if check_loss && loss.is_some_and(|l| l < cfg.loss_floor) {
            break StopReason::LossFloor;
        }
        if step >= cfg.max_steps {
            break StopReason::MaxSteps;
        }
        let mut next = add_scaled(&s, &d, h);
        if cfg.scheme == Scheme::Heun {
            let d2 = rhs_fast(&next, act, opt)?;
            next = add_scaled(&s, &combine(&d, &d2), h);
        }
        let clip = guard.apply(&mut next, opt.kind);
        traj.max_clip = traj.max_clip.max(clip);
        if clip > 0.0 {
            traj.clip_steps += 1;
        }
        s = next;
        step += 1;
    };
    let terminal_loss = s.loss_unchecked(act);
    let terminal_grad = rhs_fast(&s, act, opt)?.max_norm() * opt.eta;
    if traj.times.last().is_none_or(|&t| t < step as f64 * cfg.dt) {
        traj.times.push(step as f64 * cfg.dt);
        traj.states.push(s.clone());
        traj.losses.push(terminal_loss);
        traj.grad_norms.push(terminal_grad);
    }
    if traj.max_clip > 1e-4 {
        log::warn!("realizability guard clipped {:.3e} during integration", traj.max_clip);
    } else if traj.max_clip > 0.0 {
        log::debug!("realizability guard clipped {:.3e} during integration", traj.max_clip);
    }
    traj.terminal = s;
    traj.terminal_loss = terminal_loss;
    traj.terminal_grad = terminal_grad;
    traj.steps = step;
    traj.stop_reason = stop;
    Ok(traj)
}

/// Options for [`finite_d_reference`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FiniteDConfig {
    /// Macroscopic time step (same convention as [`IntegrationConfig::dt`]).
    pub dt: f64,
    pub steps: u64,
    pub record_every: u64,
    pub batch: usize,
}

/// Trains explicit weights by batch-averaged gradient descent and records the
/// measured overlaps, for validation against [`integrate`].
///
/// One step moves each student row by `dt · η · √d · v_i · mean(Δ g'(λ_i) x)`,
/// which matches the ODE time scale. Only the first layer is trained.
pub fn finite_d_reference(
    s0: &WeightRealization,
    opt: &OptimizerKind,
    cfg: &FiniteDConfig,
    act: ActivationKind,
    seed: u64,
) -> Result<Trajectory> {
    let k = s0.w.nrows();
    let m = s0.w_star.nrows();
    let d = s0.d;
    if s0.w.ncols() != d || s0.w_star.ncols() != d {
        return Err(Error::Shape("weight matrices must have d columns".into()));
    }
    if cfg.batch < 2 {
        return Err(Error::InvalidArgument("batch must be at least 2".into()));
    }
    if !(opt.eta >= 0.0) {
        return Err(Error::InvalidArgument("eta must be >= 0".into()));
    }
    let sd = (d as f64).sqrt();
    let lr = cfg.dt * opt.eta * sd / cfg.batch as f64;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut w = s0.w.clone();
    let w_star = &s0.w_star;
    let mut x = DMatrix::zeros(d, cfg.batch);
    let mut times = Vec::new();
    let mut states = Vec::new();
    let mut losses = Vec::new();
    let mut grads = Vec::new();
    let mut record = |w: &DMatrix<f64>, step: u64| -> Result<()> {
        let st = overlaps_from_weights(&WeightRealization { d, w: w.clone(), w_star: w_star.clone() });
        let loss = st.loss_unchecked(act);
        if !loss.is_finite() {
            return Err(Error::NonFinite { step });
        }
        times.push(step as f64 * cfg.dt);
        losses.push(loss);
        grads.push(f64::NAN);
        states.push(st);
        Ok(())
    };
    record(&w, 0)?;
    let v = DVector::from_element(k, 1.0);
    let v_star = DVector::from_element(m, 1.0);
    for step in 1..=cfg.steps {
        for xi in x.iter_mut() {
            *xi = rng.sample(StandardNormal);
        }
        let lambda = &w * &x / sd;
        let rho = w_star * &x / sd;
        let mut coef = DMatrix::zeros(k, cfg.batch);
        for b in 0..cfg.batch {
            let mut delta = 0.0;
            for n in 0..m {
                delta += v_star[n] * act.g(rho[(n, b)]);
            }
            for i in 0..k {
                delta -= v[i] * act.g(lambda[(i, b)]);
            }
            for i in 0..k {
                coef[(i, b)] = v[i] * delta * act.dg(lambda[(i, b)]);
            }
        }
        w += coef * x.transpose() * lr;
        if !w.iter().all(|x| x.is_finite()) {
            return Err(Error::NonFinite { step });
        }
        if (cfg.record_every > 0 && step % cfg.record_every == 0) || step == cfg.steps {
            record(&w, step)?;
        }
    }
    let terminal = states.last().expect("at least the initial state").clone();
    let terminal_loss = *losses.last().expect("non-empty");
    Ok(Trajectory {
        times,
        states,
        losses,
        grad_norms: grads,
        terminal,
        terminal_loss,
        terminal_grad: f64::NAN,
        steps: cfg.steps,
        stop_reason: StopReason::MaxSteps,
        max_clip: 0.0,
        clip_steps: 0,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernels::ActivationKind::Relu;
    use crate::state::{random_init, InitNorm, InitOptions};

    fn single(q: f64, r: f64) -> OverlapState {
        OverlapState::new(DMatrix::from_element(1, 1, q), DMatrix::from_element(1, 1, r)).unwrap()
    }

    #[test]
    fn global_minimum_is_stationary() {
        for k in 1..5 {
            let g = OverlapState::global_minimum(k);
            let d = rhs_gd(&g, Relu, true).unwrap();
            assert!(d.max_norm() < 1e-15, "k={k}: {}", d.max_norm());
            assert!(rhs_ngd(&g, Relu).unwrap().max_norm() < 1e-15);
            assert!(rhs_ongd(&g, Relu).unwrap().max_norm() < 1e-15);
        }
    }

    #[test]
    fn single_unit_from_orthogonal_start() {
        let s = single(1.0, 0.0);
        let d = rhs_gd(&s, Relu, false).unwrap();
        assert!((d.dr[(0, 0)] - 0.25).abs() < 1e-15);
        let n = rhs_ngd(&s, Relu).unwrap();
        assert!((n.dr[(0, 0)] - 0.25).abs() < 1e-15);
        assert!(n.dq[(0, 0)].abs() < 1e-15);
    }

    #[test]
    fn sgd_without_diffusion_is_gd() {
        let opt = OptimizerKind::new(Optimizer::Sgd, 0.5);
        for seed in 0..10 {
            let s = random_init(3, 2, &InitOptions::default(), seed).unwrap();
            assert_eq!(rhs_sgd(&s, Relu, &opt).unwrap(), rhs_gd(&s, Relu, false).unwrap());
        }
    }

    #[test]
    fn sgd_diffusion_sign() {
        let mut opt = OptimizerKind::new(Optimizer::Sgd, 0.5);
        opt.sgd_keep_i4 = true;
        let g = OverlapState::global_minimum(2);
        let d = rhs_sgd(&g, Relu, &opt).unwrap();
        assert!(d.max_norm() < 1e-15);
        let s = single(1.0, 0.0);
        let gd = rhs_gd(&s, Relu, false).unwrap();
        let sgd = rhs_sgd(&s, Relu, &opt).unwrap();
        assert!(sgd.dq[(0, 0)] > gd.dq[(0, 0)] + 0.01);
    }

    #[test]
    fn single_unit_converges() {
        let s = single(1.0, 0.1);
        let opt = OptimizerKind::new(Optimizer::Gd, 0.1);
        let cfg = IntegrationConfig { max_steps: 200_000, ..IntegrationConfig::for_eta(0.1) };
        let tr = integrate(&s, &opt, &cfg, Relu).unwrap();
        assert!(tr.terminal_loss < 1e-8, "loss {}", tr.terminal_loss);
        assert!((tr.terminal.r[(0, 0)] - 1.0).abs() < 1e-4);
        assert!((tr.terminal.q[(0, 0)] - 1.0).abs() < 1e-4);
        assert_eq!(tr.stop_reason, StopReason::GradTol);
    }

    #[test]
    fn minimum_stops_immediately() {
        let g = OverlapState::global_minimum(3);
        let opt = OptimizerKind::default();
        let tr = integrate(&g, &opt, &IntegrationConfig::default(), Relu).unwrap();
        assert_eq!(tr.steps, 0);
        assert_eq!(tr.stop_reason, StopReason::GradTol);
        assert_eq!(tr.terminal, g);
    }

    #[test]
    fn loss_decreases_along_gd() {
        let opt = OptimizerKind::new(Optimizer::Gd, 1.0);
        let cfg = IntegrationConfig {
            dt: 0.05,
            max_steps: 2000,
            record_every: 1,
            ..IntegrationConfig::for_eta(1.0)
        };
        for seed in 0..4 {
            let s = random_init(4, 3, &InitOptions::default(), seed).unwrap();
            let tr = integrate(&s, &opt, &cfg, Relu).unwrap();
            for w in tr.losses.windows(2) {
                assert!(w[1] <= w[0] + 1e-10, "seed {seed}: {} -> {}", w[0], w[1]);
            }
        }
    }

    #[test]
    fn ngd_keeps_unit_norms() {
        let init = InitOptions { norm: InitNorm::UnitNorm, ..Default::default() };
        let s = random_init(3, 3, &init, 5).unwrap();
        let opt = OptimizerKind::new(Optimizer::Ngd, 0.1);
        let cfg = IntegrationConfig { max_steps: 1000, grad_tol: 0.0, ..IntegrationConfig::for_eta(0.1) };
        let tr = integrate(&s, &opt, &cfg, Relu).unwrap();
        for i in 0..3 {
            assert!((tr.terminal.q[(i, i)] - 1.0).abs() < 1e-8);
        }
    }

    #[test]
    fn ongd_keeps_orthonormality() {
        let init = InitOptions { norm: InitNorm::Orthonormal, ..Default::default() };
        let s = random_init(3, 3, &init, 5).unwrap();
        let opt = OptimizerKind::new(Optimizer::Ongd, 0.1);
        let cfg = IntegrationConfig { max_steps: 1000, grad_tol: 0.0, ..IntegrationConfig::for_eta(0.1) };
        let tr = integrate(&s, &opt, &cfg, Relu).unwrap();
        assert!((tr.terminal.q.clone() - DMatrix::<f64>::identity(3, 3)).abs().max() < 1e-8);
    }

    #[test]
    fn constraint_violations_are_rejected() {
        let s = random_init(3, 3, &InitOptions::default(), 1).unwrap();
        assert!(rhs_ngd(&s, Relu).is_err());
        assert!(rhs_ongd(&s, Relu).is_err());
        let opt = OptimizerKind::new(Optimizer::Ongd, 0.1);
        assert!(integrate(&s, &opt, &IntegrationConfig::default(), Relu).is_err());
    }

    #[test]
    fn zero_learning_rate_reference_is_constant() {
        let s = OverlapState::isotropic(2, 2);
        let wr = crate::state::sample_weights(&s, 20, 1).unwrap();
        let opt = OptimizerKind { eta: 0.0, ..OptimizerKind::default() };
        let cfg = FiniteDConfig { dt: 0.1, steps: 5, record_every: 1, batch: 16 };
        let tr = finite_d_reference(&wr, &opt, &cfg, Relu, 0).unwrap();
        for st in &tr.states {
            assert_eq!(st, &tr.states[0]);
        }
    }

    #[test]
    fn csv_export_has_header() {
        let s = single(1.0, 0.1);
        let cfg = IntegrationConfig { max_steps: 10, record_every: 5, ..IntegrationConfig::default() };
        let tr = integrate(&s, &OptimizerKind::default(), &cfg, Relu).unwrap();
        let mut buf = Vec::new();
        tr.write_csv(&mut buf, true).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("time,loss,grad_norm,Q_0_0,R_0_0\n"));
        assert_eq!(text.lines().count(), 1 + tr.times.len());
    }
}

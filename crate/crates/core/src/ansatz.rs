//! Block-symmetric fixed points: parameterization, classification, solver.
//!
//! Student units are split into `k1` anti-aligned units, `k2` aligned units and
//! `extra` over-width units. Each block of `R` and `Q` carries one scalar on
//! its diagonal and one off it. Unit order in the expanded state is extra rows
//! first, then anti-aligned, then aligned; teacher columns list the teachers
//! of anti-aligned units first.

use std::io::Write;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dynamics::{integrate, rhs_gd_unchecked, IntegrationConfig, Optimizer, OptimizerKind};
use crate::error::{Error, Result};
use crate::kernels::ActivationKind;
use crate::state::OverlapState;

/// Scalars of the block ansatz. Fields whose block is empty are ignored.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnsatzParams {
    pub k1: usize,
    pub k2: usize,
    pub extra: usize,
    /// `R` of an anti-aligned unit with its own teacher.
    pub sigma_r: f64,
    /// `R` of an anti-aligned unit with the other anti-aligned teachers.
    pub s: f64,
    /// `R` of an anti-aligned unit with the aligned teachers.
    pub phi: f64,
    pub q: f64,
    pub e: f64,
    pub b: f64,
    pub tau: f64,
    /// `R` of an aligned unit with the anti-aligned teachers.
    pub f: f64,
    pub p: f64,
    pub mu: f64,
    pub u: f64,
    pub iota: f64,
    pub kappa: f64,
    pub omega: f64,
    pub nu: f64,
    pub gamma: f64,
    /// `Q` between distinct extra units.
    #[serde(default)]
    pub xi: f64,
}

/// One scalar of the ansatz.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Symbol {
    SigmaR,
    S,
    Phi,
    Q,
    E,
    B,
    Tau,
    F,
    P,
    Mu,
    U,
    Iota,
    Kappa,
    Omega,
    Nu,
    Gamma,
    Xi,
}

impl Symbol {
    pub const ALL: [Symbol; 17] = [
        Symbol::SigmaR,
        Symbol::S,
        Symbol::Phi,
        Symbol::Q,
        Symbol::E,
        Symbol::B,
        Symbol::Tau,
        Symbol::F,
        Symbol::P,
        Symbol::Mu,
        Symbol::U,
        Symbol::Iota,
        Symbol::Kappa,
        Symbol::Omega,
        Symbol::Nu,
        Symbol::Gamma,
        Symbol::Xi,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Symbol::SigmaR => "sigma_r",
            Symbol::S => "s",
            Symbol::Phi => "phi",
            Symbol::Q => "q",
            Symbol::E => "e",
            Symbol::B => "b",
            Symbol::Tau => "tau",
            Symbol::F => "f",
            Symbol::P => "p",
            Symbol::Mu => "mu",
            Symbol::U => "u",
            Symbol::Iota => "iota",
            Symbol::Kappa => "kappa",
            Symbol::Omega => "omega",
            Symbol::Nu => "nu",
            Symbol::Gamma => "gamma",
            Symbol::Xi => "xi",
        }
    }
}

impl AnsatzParams {
    /// All scalars zero.
    pub fn zeros(k1: usize, k2: usize, extra: usize) -> Self {
        AnsatzParams {
            k1,
            k2,
            extra,
            sigma_r: 0.0,
            s: 0.0,
            phi: 0.0,
            q: 0.0,
            e: 0.0,
            b: 0.0,
            tau: 0.0,
            f: 0.0,
            p: 0.0,
            mu: 0.0,
            u: 0.0,
            iota: 0.0,
            kappa: 0.0,
            omega: 0.0,
            nu: 0.0,
            gamma: 0.0,
            xi: 0.0,
        }
    }

    /// The perfectly aligned configuration with `m` teachers and silent extra units.
    pub fn global_minimum(m: usize, extra: usize) -> Self {
        AnsatzParams { b: 1.0, p: 1.0, ..AnsatzParams::zeros(0, m, extra) }
    }

    pub fn k(&self) -> usize {
        self.k1 + self.k2 + self.extra
    }

    pub fn m(&self) -> usize {
        self.k1 + self.k2
    }

    pub fn get(&self, sym: Symbol) -> f64 {
        match sym {
            Symbol::SigmaR => self.sigma_r,
            Symbol::S => self.s,
            Symbol::Phi => self.phi,
            Symbol::Q => self.q,
            Symbol::E => self.e,
            Symbol::B => self.b,
            Symbol::Tau => self.tau,
            Symbol::F => self.f,
            Symbol::P => self.p,
            Symbol::Mu => self.mu,
            Symbol::U => self.u,
            Symbol::Iota => self.iota,
            Symbol::Kappa => self.kappa,
            Symbol::Omega => self.omega,
            Symbol::Nu => self.nu,
            Symbol::Gamma => self.gamma,
            Symbol::Xi => self.xi,
        }
    }

    pub fn set(&mut self, sym: Symbol, x: f64) {
        let slot = match sym {
            Symbol::SigmaR => &mut self.sigma_r,
            Symbol::S => &mut self.s,
            Symbol::Phi => &mut self.phi,
            Symbol::Q => &mut self.q,
            Symbol::E => &mut self.e,
            Symbol::B => &mut self.b,
            Symbol::Tau => &mut self.tau,
            Symbol::F => &mut self.f,
            Symbol::P => &mut self.p,
            Symbol::Mu => &mut self.mu,
            Symbol::U => &mut self.u,
            Symbol::Iota => &mut self.iota,
            Symbol::Kappa => &mut self.kappa,
            Symbol::Omega => &mut self.omega,
            Symbol::Nu => &mut self.nu,
            Symbol::Gamma => &mut self.gamma,
            Symbol::Xi => &mut self.xi,
        };
        *slot = x;
    }

    /// Scalars that appear in the expanded matrices for these block sizes.
    ///
    /// In the generic well-specified case (`k1, k2 ≥ 2`, no extra units) these
    /// are the eleven `ς, s, φ, q, e, b, τ, f, p, μ, u`.
    pub fn active_symbols(&self) -> Vec<Symbol> {
        active_symbols(self.k1, self.k2, self.extra)
    }

    pub fn active_values(&self) -> Vec<f64> {
        self.active_symbols().into_iter().map(|s| self.get(s)).collect()
    }

    pub fn with_active_values(&self, x: &[f64]) -> Self {
        let mut out = self.clone();
        for (sym, &v) in self.active_symbols().into_iter().zip(x) {
            out.set(sym, v);
        }
        out
    }

    fn check_sizes(&self) -> Result<()> {
        if self.m() == 0 {
            return Err(Error::InvalidArgument("k1 + k2 must be at least 1".into()));
        }
        Ok(())
    }
}

pub fn active_symbols(k1: usize, k2: usize, extra: usize) -> Vec<Symbol> {
    use Symbol::*;
    let mut out = Vec::new();
    if k1 >= 1 {
        out.push(SigmaR);
        if k1 >= 2 {
            out.push(S);
        }
        if k2 >= 1 {
            out.push(Phi);
        }
        out.push(Q);
        if k1 >= 2 {
            out.push(E);
        }
    }
    if k2 >= 1 {
        out.push(B);
        if k2 >= 2 {
            out.push(Tau);
        }
        if k1 >= 1 {
            out.push(F);
        }
        out.push(P);
        if k2 >= 2 {
            out.push(Mu);
        }
    }
    if k1 >= 1 && k2 >= 1 {
        out.push(U);
    }
    if extra >= 1 {
        if k1 >= 1 {
            out.push(Iota);
        }
        if k2 >= 1 {
            out.push(Kappa);
        }
        out.push(Omega);
        if k1 >= 1 {
            out.push(Nu);
        }
        if k2 >= 1 {
            out.push(Gamma);
        }
        if extra >= 2 {
            out.push(Xi);
        }
    }
    out
}

/// Block of a student unit in the expanded state.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UnitRole {
    Extra,
    Anti,
    Aligned,
}

struct Layout {
    extra: usize,
    k1: usize,
}

impl Layout {
    fn anti(&self, a: usize) -> usize {
        self.extra + a
    }
    fn aligned(&self, c: usize) -> usize {
        self.extra + self.k1 + c
    }
    fn anti_teacher(&self, a: usize) -> usize {
        a
    }
    fn aligned_teacher(&self, c: usize) -> usize {
        self.k1 + c
    }
}

/// Assembles the full state with `T = I` and unit readouts, without checks.
fn expand_raw(p: &AnsatzParams) -> OverlapState {
    let (k, m) = (p.k(), p.m());
    let l = Layout { extra: p.extra, k1: p.k1 };
    let mut r = DMatrix::zeros(k, m);
    let mut q = DMatrix::zeros(k, k);
    for x in 0..p.extra {
        for a in 0..p.k1 {
            r[(x, l.anti_teacher(a))] = p.iota;
        }
        for c in 0..p.k2 {
            r[(x, l.aligned_teacher(c))] = p.kappa;
        }
    }
    for a in 0..p.k1 {
        let i = l.anti(a);
        for a2 in 0..p.k1 {
            r[(i, l.anti_teacher(a2))] = if a == a2 { p.sigma_r } else { p.s };
        }
        for c in 0..p.k2 {
            r[(i, l.aligned_teacher(c))] = p.phi;
        }
    }
    for c in 0..p.k2 {
        let i = l.aligned(c);
        for a in 0..p.k1 {
            r[(i, l.anti_teacher(a))] = p.f;
        }
        for c2 in 0..p.k2 {
            r[(i, l.aligned_teacher(c2))] = if c == c2 { p.b } else { p.tau };
        }
    }
    let role = |i: usize| -> UnitRole {
        if i < p.extra {
            UnitRole::Extra
        } else if i < p.extra + p.k1 {
            UnitRole::Anti
        } else {
            UnitRole::Aligned
        }
    };
    for i in 0..k {
        for j in 0..k {
            let same = i == j;
            q[(i, j)] = match (role(i), role(j)) {
                (UnitRole::Extra, UnitRole::Extra) => {
                    if same {
                        p.omega
                    } else {
                        p.xi
                    }
                }
                (UnitRole::Anti, UnitRole::Anti) => {
                    if same {
                        p.q
                    } else {
                        p.e
                    }
                }
                (UnitRole::Aligned, UnitRole::Aligned) => {
                    if same {
                        p.p
                    } else {
                        p.mu
                    }
                }
                (UnitRole::Extra, UnitRole::Anti) | (UnitRole::Anti, UnitRole::Extra) => p.nu,
                (UnitRole::Extra, UnitRole::Aligned) | (UnitRole::Aligned, UnitRole::Extra) => p.gamma,
                (UnitRole::Anti, UnitRole::Aligned) | (UnitRole::Aligned, UnitRole::Anti) => p.u,
            };
        }
    }
    OverlapState::new(q, r).expect("consistent block sizes")
}

/// Expands the ansatz into a full overlap state (`T = I`, `v = v* = 1`).
pub fn expand(p: &AnsatzParams) -> Result<OverlapState> {
    p.check_sizes()?;
    let s = expand_raw(p);
    s.check_realizable()?;
    Ok(s)
}

/// Fixed-point residuals of the ansatz, one per active scalar, read off the
/// full gradient-flow right-hand side at one representative entry per block.
pub fn reduced_residuals(p: &AnsatzParams, act: ActivationKind) -> Result<Vec<f64>> {
    let s = expand(p)?;
    Ok(block_read(p, &s, act))
}

fn block_read(p: &AnsatzParams, s: &OverlapState, act: ActivationKind) -> Vec<f64> {
    let d = rhs_gd_unchecked(s, act, false);
    let l = Layout { extra: p.extra, k1: p.k1 };
    p.active_symbols()
        .into_iter()
        .map(|sym| match sym {
            Symbol::SigmaR => d.dr[(l.anti(0), l.anti_teacher(0))],
            Symbol::S => d.dr[(l.anti(0), l.anti_teacher(1))],
            Symbol::Phi => d.dr[(l.anti(0), l.aligned_teacher(0))],
            Symbol::Q => d.dq[(l.anti(0), l.anti(0))],
            Symbol::E => d.dq[(l.anti(0), l.anti(1))],
            Symbol::B => d.dr[(l.aligned(0), l.aligned_teacher(0))],
            Symbol::Tau => d.dr[(l.aligned(0), l.aligned_teacher(1))],
            Symbol::F => d.dr[(l.aligned(0), l.anti_teacher(0))],
            Symbol::P => d.dq[(l.aligned(0), l.aligned(0))],
            Symbol::Mu => d.dq[(l.aligned(0), l.aligned(1))],
            Symbol::U => d.dq[(l.anti(0), l.aligned(0))],
            Symbol::Iota => d.dr[(0, l.anti_teacher(0))],
            Symbol::Kappa => d.dr[(0, l.aligned_teacher(0))],
            Symbol::Omega => d.dq[(0, 0)],
            Symbol::Nu => d.dq[(0, l.anti(0))],
            Symbol::Gamma => d.dq[(0, l.aligned(0))],
            Symbol::Xi => d.dq[(0, 1)],
        })
        .collect()
}

/// Reads block averages of a state already in ansatz order.
pub fn fit_params(s: &OverlapState, k1: usize, k2: usize, extra: usize) -> Result<AnsatzParams> {
    if s.k != k1 + k2 + extra || s.m != k1 + k2 {
        return Err(Error::Shape(format!(
            "state (K={}, M={}) does not match blocks ({k1}, {k2}, {extra})",
            s.k, s.m
        )));
    }
    let mut p = AnsatzParams::zeros(k1, k2, extra);
    let mut sums = vec![(0.0, 0usize); Symbol::ALL.len()];
    let idx = |sym: Symbol| Symbol::ALL.iter().position(|&x| x == sym).expect("listed");
    let roles = roles(k1, k2, extra);
    for (i, &ri) in roles.iter().enumerate() {
        for n in 0..s.m {
            let sym = r_symbol(ri, i, n, extra, k1);
            let e = &mut sums[idx(sym)];
            e.0 += s.r[(i, n)];
            e.1 += 1;
        }
        for (j, &rj) in roles.iter().enumerate() {
            let sym = q_symbol(ri, rj, i == j);
            let e = &mut sums[idx(sym)];
            e.0 += s.q[(i, j)];
            e.1 += 1;
        }
    }
    for (n, sym) in Symbol::ALL.iter().enumerate() {
        if sums[n].1 > 0 {
            p.set(*sym, sums[n].0 / sums[n].1 as f64);
        }
    }
    Ok(p)
}

fn roles(k1: usize, k2: usize, extra: usize) -> Vec<UnitRole> {
    let mut out = vec![UnitRole::Extra; extra];
    out.extend(std::iter::repeat_n(UnitRole::Anti, k1));
    out.extend(std::iter::repeat_n(UnitRole::Aligned, k2));
    out
}

fn r_symbol(role: UnitRole, i: usize, n: usize, extra: usize, k1: usize) -> Symbol {
    let anti_teacher = n < k1;
    match role {
        UnitRole::Extra => {
            if anti_teacher {
                Symbol::Iota
            } else {
                Symbol::Kappa
            }
        }
        UnitRole::Anti => {
            if !anti_teacher {
                Symbol::Phi
            } else if i - extra == n {
                Symbol::SigmaR
            } else {
                Symbol::S
            }
        }
        UnitRole::Aligned => {
            if anti_teacher {
                Symbol::F
            } else if i - extra - k1 == n - k1 {
                Symbol::B
            } else {
                Symbol::Tau
            }
        }
    }
}

fn q_symbol(a: UnitRole, b: UnitRole, diagonal: bool) -> Symbol {
    use UnitRole::*;
    match (a, b) {
        (Extra, Extra) => {
            if diagonal {
                Symbol::Omega
            } else {
                Symbol::Xi
            }
        }
        (Anti, Anti) => {
            if diagonal {
                Symbol::Q
            } else {
                Symbol::E
            }
        }
        (Aligned, Aligned) => {
            if diagonal {
                Symbol::P
            } else {
                Symbol::Mu
            }
        }
        (Extra, Anti) | (Anti, Extra) => Symbol::Nu,
        (Extra, Aligned) | (Aligned, Extra) => Symbol::Gamma,
        (Anti, Aligned) | (Aligned, Anti) => Symbol::U,
    }
}

/// Family label of a classified state.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind", content = "k1")]
pub enum FamilyLabel {
    Global,
    Local(usize),
    Unclassified,
}

impl std::fmt::Display for FamilyLabel {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            FamilyLabel::Global => f.write_str("global"),
            FamilyLabel::Local(k1) => write!(f, "k1={k1}"),
            FamilyLabel::Unclassified => f.write_str("unclassified"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Classification {
    pub k1: usize,
    pub k2: usize,
    pub extra: usize,
    /// Matched teacher of every student unit (`None` for extra units).
    pub assignment: Vec<Option<usize>>,
    pub roles: Vec<UnitRole>,
    /// Max deviation of the reordered state from its block averages.
    pub block_residual: f64,
    pub family: FamilyLabel,
}

/// Counts anti-aligned units by greedy matching of students to teachers on `|R|`.
pub fn classify(s: &OverlapState, align_tol: f64) -> Classification {
    let (k, m) = (s.k, s.m);
    let mut assignment = vec![None; k];
    let mut unit_free: Vec<bool> = (0..k).map(|i| s.q[(i, i)] >= align_tol).collect();
    let mut teacher_free = vec![true; m];
    loop {
        let mut best: Option<(usize, usize, f64)> = None;
        for i in 0..k {
            if !unit_free[i] {
                continue;
            }
            for n in 0..m {
                if !teacher_free[n] {
                    continue;
                }
                let v = s.r[(i, n)].abs();
                if best.is_none_or(|(_, _, b)| v > b) {
                    best = Some((i, n, v));
                }
            }
        }
        let Some((i, n, _)) = best else { break };
        assignment[i] = Some(n);
        unit_free[i] = false;
        teacher_free[n] = false;
    }
    let roles: Vec<UnitRole> = (0..k)
        .map(|i| match assignment[i] {
            None => UnitRole::Extra,
            Some(n) if s.r[(i, n)] < -align_tol => UnitRole::Anti,
            Some(_) => UnitRole::Aligned,
        })
        .collect();
    let k1 = roles.iter().filter(|&&r| r == UnitRole::Anti).count();
    let k2 = roles.iter().filter(|&&r| r == UnitRole::Aligned).count();
    let extra = k - k1 - k2;
    let block_residual = if k1 + k2 == m {
        block_residual(s, &assignment, &roles, k1, k2, extra)
    } else {
        f64::INFINITY
    };
    let family = if block_residual > 10.0 * align_tol {
        FamilyLabel::Unclassified
    } else if k1 == 0 {
        FamilyLabel::Global
    } else {
        FamilyLabel::Local(k1)
    };
    Classification { k1, k2, extra, assignment, roles, block_residual, family }
}

/// Reorders `s` into ansatz order: returns (unit permutation, teacher permutation).
fn ansatz_order(
    assignment: &[Option<usize>],
    roles: &[UnitRole],
) -> (Vec<usize>, Vec<usize>) {
    let mut units = Vec::new();
    let mut teachers = Vec::new();
    for want in [UnitRole::Extra, UnitRole::Anti, UnitRole::Aligned] {
        for (i, &r) in roles.iter().enumerate() {
            if r == want {
                units.push(i);
                if let Some(n) = assignment[i] {
                    teachers.push(n);
                }
            }
        }
    }
    (units, teachers)
}

/// Reorders units and teachers so that the state is in ansatz order.
pub fn canonical_order(s: &OverlapState, c: &Classification) -> OverlapState {
    let (units, teachers) = ansatz_order(&c.assignment, &c.roles);
    let k = s.k;
    let m = teachers.len();
    let q = DMatrix::from_fn(k, k, |i, j| s.q[(units[i], units[j])]);
    let r = DMatrix::from_fn(k, m, |i, n| s.r[(units[i], teachers[n])]);
    let t = DMatrix::from_fn(m, m, |a, b| s.t[(teachers[a], teachers[b])]);
    let v = DVector::from_fn(k, |i, _| s.v[units[i]]);
    let v_star = DVector::from_fn(m, |n, _| s.v_star[teachers[n]]);
    OverlapState { k, m, q, r, t, v, v_star }
}

fn block_residual(
    s: &OverlapState,
    assignment: &[Option<usize>],
    roles: &[UnitRole],
    k1: usize,
    k2: usize,
    extra: usize,
) -> f64 {
    let c = Classification {
        k1,
        k2,
        extra,
        assignment: assignment.to_vec(),
        roles: roles.to_vec(),
        block_residual: 0.0,
        family: FamilyLabel::Unclassified,
    };
    let ordered = canonical_order(s, &c);
    let Ok(p) = fit_params(&ordered, k1, k2, extra) else {
        return f64::INFINITY;
    };
    let fitted = expand_raw(&p);
    (&ordered.q - &fitted.q).abs().max().max((&ordered.r - &fitted.r).abs().max())
}

/// An accepted fixed point of the ansatz.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FamilyRecord {
    #[serde(rename = "K")]
    pub k: usize,
    #[serde(rename = "M")]
    pub m: usize,
    pub k1: usize,
    pub extra: usize,
    pub params: AnsatzParams,
    pub loss: f64,
    pub residual_norm: f64,
    /// Max-norm of the full right-hand side at the expanded state.
    pub rhs_norm: f64,
    pub stable: Option<bool>,
    /// True when this is a width-`M` solution padded with silent units.
    pub embedded: bool,
}

impl FamilyRecord {
    pub fn state(&self) -> OverlapState {
        let s = expand_raw(&self.params);
        if self.k > s.k {
            s.embed(self.k - s.k, 1.0).expect("k > s.k")
        } else {
            s
        }
    }
}

/// Outcome of [`solve_family`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "status")]
pub enum SolveOutcome {
    Solved(FamilyRecord),
    NoSolution { attempts: usize, best_residual: f64, reason: String },
}

impl SolveOutcome {
    pub fn record(&self) -> Option<&FamilyRecord> {
        match self {
            SolveOutcome::Solved(r) => Some(r),
            SolveOutcome::NoSolution { .. } => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SolverOptions {
    /// Acceptance threshold on the max-norm of the reduced residuals.
    pub tol: f64,
    pub max_newton: usize,
    /// Relative finite-difference step of the Jacobian.
    pub fd_step: f64,
    pub multistarts: usize,
    /// Uniform jitter half-width applied to the guess for restarts.
    pub jitter: f64,
    /// Step budget of the relaxation fallback.
    pub relax_steps: u64,
    pub seed: u64,
    /// Minimum norm of genuine extra units.
    pub min_extra_norm: f64,
    pub align_tol: f64,
}

impl Default for SolverOptions {
    fn default() -> Self {
        SolverOptions {
            tol: 1e-10,
            max_newton: 60,
            fd_step: 1e-6,
            multistarts: 5,
            jitter: 0.1,
            relax_steps: 400_000,
            seed: 0,
            min_extra_norm: 1e-6,
            align_tol: 0.05,
        }
    }
}

fn max_abs(v: &[f64]) -> f64 {
    v.iter().fold(0.0f64, |a, &b| a.max(b.abs()))
}

const R_SYMBOLS: [Symbol; 8] = [
    Symbol::SigmaR,
    Symbol::S,
    Symbol::Phi,
    Symbol::B,
    Symbol::Tau,
    Symbol::F,
    Symbol::Iota,
    Symbol::Kappa,
];

/// Unknowns and equations handed to Newton.
///
/// The full system solves every active scalar. The span system keeps all
/// units inside the teacher span (`Q = R Rᵀ`), which the gradient flow
/// preserves, and solves only the `R` equations; its solutions are
/// realizable by construction.
struct System<'a> {
    base: &'a AnsatzParams,
    span: bool,
    symbols: Vec<Symbol>,
}

impl<'a> System<'a> {
    fn new(base: &'a AnsatzParams, span: bool) -> Self {
        let symbols = base
            .active_symbols()
            .into_iter()
            .filter(|s| !span || R_SYMBOLS.contains(s))
            .collect();
        System { base, span, symbols }
    }

    fn start(&self) -> Vec<f64> {
        self.symbols.iter().map(|&s| self.base.get(s)).collect()
    }

    fn params(&self, x: &[f64]) -> AnsatzParams {
        let mut p = self.base.clone();
        for (&sym, &v) in self.symbols.iter().zip(x) {
            p.set(sym, v);
        }
        if self.span {
            with_span_overlaps(&p)
        } else {
            p
        }
    }

    /// Residuals, or `None` off the domain of the kernels.
    ///
    /// Fixed points of the well-specified problem lie on the boundary of the
    /// realizable set (`Q = R Rᵀ`), so finite-difference probes are allowed
    /// to step slightly outside it; realizability is enforced on acceptance.
    fn residual(&self, x: &[f64], act: ActivationKind) -> Option<Vec<f64>> {
        if x.iter().any(|v| !v.is_finite()) {
            return None;
        }
        let p = self.params(x);
        let s = expand_raw(&p);
        if (0..s.k).any(|i| s.q[(i, i)] < 0.0) {
            return None;
        }
        let all = block_read(&p, &s, act);
        let out: Vec<f64> = if self.span {
            p.active_symbols()
                .into_iter()
                .zip(all)
                .filter(|(sym, _)| self.symbols.contains(sym))
                .map(|(_, v)| v)
                .collect()
        } else {
            all
        };
        out.iter().all(|v| v.is_finite()).then_some(out)
    }
}

fn jacobian(sys: &System, x: &[f64], act: ActivationKind, rel: f64) -> Option<DMatrix<f64>> {
    let n = x.len();
    let mut jac = DMatrix::zeros(n, n);
    let mut xp = x.to_vec();
    for j in 0..n {
        let h = rel * x[j].abs().max(1.0);
        // Central differences where both sides are in the domain, one-sided otherwise.
        xp[j] = x[j] + h;
        let fp = sys.residual(&xp, act);
        xp[j] = x[j] - h;
        let fm = sys.residual(&xp, act);
        xp[j] = x[j];
        let col: Vec<f64> = match (fp, fm) {
            (Some(a), Some(b)) => a.iter().zip(&b).map(|(a, b)| (a - b) / (2.0 * h)).collect(),
            (Some(a), None) => {
                let f0 = sys.residual(x, act)?;
                a.iter().zip(&f0).map(|(a, b)| (a - b) / h).collect()
            }
            (None, Some(b)) => {
                let f0 = sys.residual(x, act)?;
                f0.iter().zip(&b).map(|(a, b)| (a - b) / h).collect()
            }
            (None, None) => return None,
        };
        for i in 0..n {
            jac[(i, j)] = col[i];
        }
    }
    Some(jac)
}

/// Damped Newton iteration; returns the final parameters and residual max-norm.
fn newton(sys: &System, act: ActivationKind, opts: &SolverOptions) -> Option<(AnsatzParams, f64)> {
    let mut x = sys.start();
    let mut f = sys.residual(&x, act)?;
    let mut norm = max_abs(&f);
    for _ in 0..opts.max_newton {
        if norm < opts.tol * 1e-2 {
            break;
        }
        let jac = jacobian(sys, &x, act, opts.fd_step)?;
        let rhs = -DVector::from_column_slice(&f);
        let svd = jac.svd(true, true);
        let smax = svd.singular_values.max();
        let step = svd.solve(&rhs, smax * 1e-13).ok()?;
        let mut alpha = 1.0;
        let mut accepted = false;
        for _ in 0..40 {
            let trial: Vec<f64> = x.iter().zip(step.iter()).map(|(a, d)| a + alpha * d).collect();
            if let Some(ft) = sys.residual(&trial, act) {
                let nt = max_abs(&ft);
                if nt < norm {
                    x = trial;
                    f = ft;
                    norm = nt;
                    accepted = true;
                    break;
                }
            }
            alpha *= 0.5;
        }
        if !accepted {
            break;
        }
    }
    Some((sys.params(&x), norm))
}

/// Relaxes the expanded guess under the gradient flow, which preserves the
/// block structure, and reads the block averages back.
fn relax(guess: &AnsatzParams, act: ActivationKind, steps: u64) -> Option<AnsatzParams> {
    let s = expand(guess).ok()?;
    let opt = OptimizerKind::new(Optimizer::Gd, 1.0);
    let cfg = IntegrationConfig {
        dt: 0.02,
        max_steps: steps,
        grad_tol: 1e-11,
        ..IntegrationConfig::for_eta(1.0)
    };
    let tr = integrate(&s, &opt, &cfg, act).ok()?;
    fit_params(&tr.terminal, guess.k1, guess.k2, guess.extra).ok()
}

/// Starting points for family `(k1, k2, extra)`.
///
/// Anti-aligned units point against their teacher with a small positive
/// spill-over onto the aligned teachers, aligned units sit near their teacher
/// with a small pull towards the anti-aligned ones, and `Q = R Rᵀ` keeps the
/// guess inside the teacher span. With extra units there are two guesses:
/// extra units sharing the anti-aligned teachers, and extra units opposing
/// every teacher.
pub fn auto_guesses(k1: usize, k2: usize, extra: usize) -> Vec<AnsatzParams> {
    let m = (k1 + k2).max(1) as f64;
    let mut a = AnsatzParams::zeros(k1, k2, extra);
    if extra == 0 {
        a.sigma_r = -0.6;
        a.s = 0.02;
        a.phi = 0.45 / m.sqrt();
        a.b = 1.0;
        a.tau = -0.02;
        a.f = 0.2;
        return vec![with_span_overlaps(&a)];
    }
    a.sigma_r = -0.7;
    a.s = 0.15;
    a.phi = 0.02;
    a.b = 1.0;
    a.tau = -0.003;
    a.f = 0.06;
    a.iota = 0.4 / extra as f64;
    a.kappa = -0.1;
    let mut b = AnsatzParams::zeros(k1, k2, extra);
    b.sigma_r = -0.5;
    b.s = 0.3;
    b.phi = 0.1;
    b.b = 1.0;
    b.f = 0.2;
    b.iota = -0.3;
    b.kappa = -0.3;
    vec![with_span_overlaps(&a), with_span_overlaps(&b)]
}

/// First entry of [`auto_guesses`].
pub fn auto_guess(k1: usize, k2: usize, extra: usize) -> AnsatzParams {
    auto_guesses(k1, k2, extra).swap_remove(0)
}

/// Sets the `Q` scalars to the values of `R Rᵀ` (all units in the teacher span).
pub fn with_span_overlaps(p: &AnsatzParams) -> AnsatzParams {
    let s = expand_raw(p);
    let q = &s.r * s.r.transpose();
    let rebuilt = OverlapState { q, ..s };
    let mut out = fit_params(&rebuilt, p.k1, p.k2, p.extra).expect("same blocks");
    for sym in R_SYMBOLS {
        out.set(sym, p.get(sym));
    }
    out
}

fn jittered(p: &AnsatzParams, rng: &mut ChaCha8Rng, width: f64) -> AnsatzParams {
    let mut out = p.clone();
    for sym in R_SYMBOLS {
        out.set(sym, p.get(sym) + rng.random_range(-width..=width));
    }
    with_span_overlaps(&out)
}

/// Solves the reduced fixed-point system of family `(k1, k2, extra)`.
///
/// Cycles through the guesses (the supplied one, or [`auto_guesses`]), first
/// as given and then jittered. Every start tries damped Newton on the full
/// system, then on the span system, then gradient-flow relaxation followed by
/// a Newton polish.
/// A solution is accepted only if the residual is below `opts.tol`, the state
/// is realizable, classification recovers `k1`, and, when `extra > 0`, the
/// extra units are not silent.
pub fn solve_family(
    k1: usize,
    k2: usize,
    extra: usize,
    guess: Option<&AnsatzParams>,
    act: ActivationKind,
    opts: &SolverOptions,
) -> Result<SolveOutcome> {
    if k1 + k2 == 0 {
        return Err(Error::InvalidArgument("k1 + k2 must be at least 1".into()));
    }
    if let Some(g) = guess {
        if (g.k1, g.k2, g.extra) != (k1, k2, extra) {
            return Err(Error::InvalidArgument("guess has different block sizes".into()));
        }
    }
    if k1 == 0 && extra == 0 {
        let p = AnsatzParams::global_minimum(k2, 0);
        return Ok(SolveOutcome::Solved(make_record(&p, act, 0.0)?));
    }
    let bases = match guess {
        Some(g) => vec![g.clone()],
        None => auto_guesses(k1, k2, extra),
    };
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed ^ ((k1 as u64) << 32) ^ ((extra as u64) << 48) ^ k2 as u64);
    let mut best = f64::INFINITY;
    let mut reason = String::from("no start converged");
    let attempts = opts.multistarts.max(1);
    for attempt in 0..attempts {
        let base = &bases[attempt % bases.len()];
        let start = if attempt < bases.len() { base.clone() } else { jittered(base, &mut rng, opts.jitter) };
        // Full system, then the span system, then relaxation and a polish.
        for method in 0..3 {
            let found = match method {
                0 => newton(&System::new(&start, false), act, opts),
                1 => newton(&System::new(&start, true), act, opts),
                _ => relax(&start, act, opts.relax_steps)
                    .and_then(|relaxed| newton(&System::new(&relaxed, false), act, opts)),
            };
            let Some((p, norm)) = found else { continue };
            best = best.min(norm);
            if norm >= opts.tol {
                continue;
            }
            match accept(&p, opts) {
                Ok(()) => return Ok(SolveOutcome::Solved(make_record(&p, act, norm)?)),
                Err(why) => reason = why,
            }
        }
    }
    Ok(SolveOutcome::NoSolution { attempts, best_residual: best, reason })
}

fn accept(p: &AnsatzParams, opts: &SolverOptions) -> std::result::Result<(), String> {
    let s = expand(p).map_err(|e| format!("not realizable: {e}"))?;
    if p.extra > 0 && p.omega < opts.min_extra_norm {
        return Err(format!("extra units are silent (Omega = {:.2e})", p.omega));
    }
    let c = classify(&s, opts.align_tol);
    if c.k1 != p.k1 {
        return Err(format!("converged to a state with k1 = {} instead of {}", c.k1, p.k1));
    }
    Ok(())
}

fn make_record(p: &AnsatzParams, act: ActivationKind, residual: f64) -> Result<FamilyRecord> {
    let s = expand(p)?;
    Ok(FamilyRecord {
        k: s.k,
        m: s.m,
        k1: p.k1,
        extra: p.extra,
        params: p.clone(),
        loss: s.population_loss(act)?,
        residual_norm: residual,
        rhs_norm: rhs_gd_unchecked(&s, act, false).max_norm(),
        stable: None,
        embedded: false,
    })
}

/// One row of a family catalog: a solved family or a recorded failure.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CatalogEntry {
    pub k1: usize,
    pub extra: usize,
    pub outcome: SolveOutcome,
}

/// Solves every family `k1 = 0..=k1_max` of a `(K, M)` pair.
///
/// For `K > M` the catalog holds both the width-`M` families padded with
/// silent units (flagged `embedded`) and the genuine families with
/// `extra = K - M` active extra units. Records with equal loss (within 1e-8)
/// are deduplicated, keeping the first.
pub fn family_catalog(
    k: usize,
    m: usize,
    k1_max: usize,
    act: ActivationKind,
    opts: &SolverOptions,
) -> Result<Vec<CatalogEntry>> {
    if k < m || m == 0 {
        return Err(Error::InvalidArgument(format!("catalog needs K >= M >= 1, got ({k}, {m})")));
    }
    if k1_max > m {
        return Err(Error::InvalidArgument(format!("k1_max = {k1_max} exceeds M = {m}")));
    }
    let mut out = Vec::new();
    let extra = k - m;
    for k1 in 0..=k1_max {
        let outcome = solve_family(k1, m - k1, 0, None, act, opts)?;
        let outcome = match outcome {
            SolveOutcome::Solved(mut rec) if extra > 0 => {
                rec.embedded = true;
                rec.k = k;
                SolveOutcome::Solved(rec)
            }
            other => other,
        };
        out.push(CatalogEntry { k1, extra: 0, outcome });
        if extra > 0 && k1 > 0 {
            let outcome = solve_family(k1, m - k1, extra, None, act, opts)?;
            out.push(CatalogEntry { k1, extra, outcome });
        }
    }
    let mut seen: Vec<f64> = Vec::new();
    for entry in out.iter_mut() {
        if let SolveOutcome::Solved(rec) = &entry.outcome {
            if seen.iter().any(|&l| (l - rec.loss).abs() < 1e-8) {
                entry.outcome = SolveOutcome::NoSolution {
                    attempts: 0,
                    best_residual: rec.residual_norm,
                    reason: format!("duplicate of an earlier record with loss {:.10}", rec.loss),
                };
            } else {
                seen.push(rec.loss);
            }
        }
    }
    Ok(out)
}

/// Solved records of a catalog.
pub fn catalog_records(entries: &[CatalogEntry]) -> Vec<&FamilyRecord> {
    entries.iter().filter_map(|e| e.outcome.record()).collect()
}

/// Writes records as CSV: K, M, k1, extra, loss, residual_norm, stable, then
/// one column per ansatz scalar.
pub fn write_catalog_csv<W: Write>(records: &[&FamilyRecord], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let mut header: Vec<String> =
        ["K", "M", "k1", "extra", "loss", "residual_norm", "stable", "embedded"].map(String::from).to_vec();
    header.extend(Symbol::ALL.iter().map(|s| s.name().to_string()));
    w.write_record(&header)?;
    for r in records {
        let mut row = vec![
            r.k.to_string(),
            r.m.to_string(),
            r.k1.to_string(),
            r.extra.to_string(),
            format!("{:.12e}", r.loss),
            format!("{:.3e}", r.residual_norm),
            r.stable.map(|b| b.to_string()).unwrap_or_default(),
            r.embedded.to_string(),
        ];
        row.extend(Symbol::ALL.iter().map(|&s| format!("{:.12e}", r.params.get(s))));
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernels::ActivationKind::Relu;

    #[test]
    fn global_minimum_expands_to_identity() {
        let s = expand(&AnsatzParams::global_minimum(4, 0)).unwrap();
        assert_eq!(s, OverlapState::global_minimum(4));
        let r = reduced_residuals(&AnsatzParams::global_minimum(4, 0), Relu).unwrap();
        assert!(max_abs(&r) < 1e-12);
    }

    #[test]
    fn symbol_placement_k1_2_k2_3() {
        let mut p = AnsatzParams::zeros(2, 3, 0);
        // distinct small values so that placement is visible
        for (n, sym) in Symbol::ALL.iter().enumerate() {
            p.set(*sym, 0.001 * (n + 1) as f64);
        }
        let s = expand_raw(&p);
        assert_eq!(s.r[(0, 0)], p.sigma_r);
        assert_eq!(s.r[(0, 1)], p.s);
        assert_eq!(s.r[(1, 0)], p.s);
        assert_eq!(s.r[(0, 4)], p.phi);
        assert_eq!(s.r[(2, 0)], p.f);
        assert_eq!(s.r[(3, 3)], p.b);
        assert_eq!(s.r[(3, 4)], p.tau);
        assert_eq!(s.q[(0, 1)], p.e);
        assert_eq!(s.q[(0, 2)], p.u);
        assert_eq!(s.q[(2, 2)], p.p);
        assert_eq!(s.q[(3, 4)], p.mu);
    }

    #[test]
    fn extra_rows_come_first() {
        let mut p = AnsatzParams::zeros(2, 3, 1);
        for (n, sym) in Symbol::ALL.iter().enumerate() {
            p.set(*sym, 0.001 * (n + 1) as f64);
        }
        let s = expand_raw(&p);
        assert_eq!(s.r[(0, 0)], p.iota);
        assert_eq!(s.r[(0, 2)], p.kappa);
        assert_eq!(s.q[(0, 0)], p.omega);
        assert_eq!(s.q[(0, 1)], p.nu);
        assert_eq!(s.q[(0, 3)], p.gamma);
        assert_eq!(s.r[(1, 0)], p.sigma_r);
    }

    #[test]
    fn active_symbol_counts() {
        assert_eq!(active_symbols(2, 3, 0).len(), 11);
        assert_eq!(active_symbols(2, 3, 1).len(), 16);
        assert_eq!(active_symbols(1, 5, 0).len(), 9);
        assert_eq!(active_symbols(0, 4, 0).len(), 4);
    }

    #[test]
    fn classify_simple_states() {
        let g = OverlapState::global_minimum(3);
        let c = classify(&g, 0.05);
        assert_eq!(c.k1, 0);
        assert_eq!(c.family, FamilyLabel::Global);
        let q = DMatrix::from_diagonal(&DVector::from_vec(vec![0.09, 0.81, 0.81]));
        let r = DMatrix::from_diagonal(&DVector::from_vec(vec![-0.3, 0.9, 0.9]));
        let s = OverlapState::new(q, r).unwrap();
        assert_eq!(classify(&s, 0.05).k1, 1);
    }

    #[test]
    fn silent_units_are_extra() {
        let s = OverlapState::global_minimum(3).embed(1, 1.0).unwrap();
        let c = classify(&s, 0.05);
        assert_eq!((c.k1, c.k2, c.extra), (0, 3, 1));
        assert_eq!(c.assignment[3], None);
    }

    #[test]
    fn k1_one_family_at_small_width() {
        let out = solve_family(1, 3, 0, None, Relu, &SolverOptions::default()).unwrap();
        let rec = out.record().expect("k1 = 1 family at K = M = 4");
        assert!(rec.residual_norm < 1e-10);
        assert!(rec.rhs_norm < 1e-9);
        assert!(rec.loss > 1e-3);
        assert!(rec.params.sigma_r < 0.0);
    }
}

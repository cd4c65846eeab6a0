//! The macroscopic state of a teacher-student pair and its microscopic bridge.
//!
//! An [`OverlapState`] holds the overlaps `Q = W Wᵀ/d`, `R = W W*ᵀ/d`,
//! `T = W* W*ᵀ/d` together with the readout vectors. Everything the dynamics
//! and the landscape probes need is a function of these quantities.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};
use crate::kernels::{i2_raw, ActivationKind};
use crate::linalg::{clip_psd, min_eigenvalue, psd_sqrt, symmetrize, PSD_TOL};

/// Order parameters of a student of width `k` facing a teacher of width `m`.
#[derive(Debug, Clone, PartialEq)]
pub struct OverlapState {
    pub k: usize,
    pub m: usize,
    /// Student-student overlaps, `k × k`.
    pub q: DMatrix<f64>,
    /// Student-teacher overlaps, `k × m`.
    pub r: DMatrix<f64>,
    /// Teacher-teacher overlaps, `m × m`.
    pub t: DMatrix<f64>,
    /// Student readout.
    pub v: DVector<f64>,
    /// Teacher readout.
    pub v_star: DVector<f64>,
}

impl OverlapState {
    /// State with unit readouts and an orthonormal teacher.
    pub fn new(q: DMatrix<f64>, r: DMatrix<f64>) -> Result<Self> {
        let k = q.nrows();
        let m = r.ncols();
        Self::with_teacher(q, r, DMatrix::identity(m, m)).and_then(|s| {
            debug_assert_eq!(s.k, k);
            Ok(s)
        })
    }

    pub fn with_teacher(q: DMatrix<f64>, r: DMatrix<f64>, t: DMatrix<f64>) -> Result<Self> {
        let k = q.nrows();
        let m = t.nrows();
        let s = OverlapState {
            k,
            m,
            q,
            r,
            t,
            v: DVector::from_element(k, 1.0),
            v_star: DVector::from_element(m, 1.0),
        };
        s.check_shapes()?;
        Ok(s)
    }

    /// The perfectly learned state `Q = R = T = I`.
    pub fn global_minimum(m: usize) -> Self {
        OverlapState::new(DMatrix::identity(m, m), DMatrix::identity(m, m)).expect("square shapes")
    }

    /// The `d → ∞` random initialization `Q = I`, `R = 0`.
    pub fn isotropic(k: usize, m: usize) -> Self {
        OverlapState::new(DMatrix::identity(k, k), DMatrix::zeros(k, m)).expect("consistent shapes")
    }

    pub fn check_shapes(&self) -> Result<()> {
        let (k, m) = (self.k, self.m);
        let ok = self.q.shape() == (k, k)
            && self.r.shape() == (k, m)
            && self.t.shape() == (m, m)
            && self.v.len() == k
            && self.v_star.len() == m;
        if ok {
            Ok(())
        } else {
            Err(Error::Shape(format!(
                "K={k}, M={m} but Q {:?}, R {:?}, T {:?}, v {}, v* {}",
                self.q.shape(),
                self.r.shape(),
                self.t.shape(),
                self.v.len(),
                self.v_star.len()
            )))
        }
    }

    /// The `(K+M) × (K+M)` joint Gram matrix `[[Q, R], [Rᵀ, T]]`.
    pub fn joint_gram(&self) -> DMatrix<f64> {
        let n = self.k + self.m;
        let mut g = DMatrix::zeros(n, n);
        g.view_mut((0, 0), (self.k, self.k)).copy_from(&self.q);
        g.view_mut((0, self.k), (self.k, self.m)).copy_from(&self.r);
        g.view_mut((self.k, 0), (self.m, self.k)).copy_from(&self.r.transpose());
        g.view_mut((self.k, self.k), (self.m, self.m)).copy_from(&self.t);
        g
    }

    /// Student covariance left after removing the teacher subspace,
    /// `N = Q - R T⁻¹ Rᵀ`.
    pub fn orthogonal_gram(&self) -> Result<DMatrix<f64>> {
        let t_inv = self
            .t
            .clone()
            .try_inverse()
            .ok_or_else(|| Error::NotRealizable("teacher overlap T is singular".into()))?;
        Ok(symmetrize(&(&self.q - &self.r * t_inv * self.r.transpose())))
    }

    /// Checks symmetry, joint positive semidefiniteness and entrywise
    /// Cauchy-Schwarz bounds.
    pub fn check_realizable(&self) -> Result<()> {
        self.check_shapes()?;
        let asym_q = (&self.q - self.q.transpose()).abs().max();
        let asym_t = (&self.t - self.t.transpose()).abs().max();
        if asym_q > 1e-12 || asym_t > 1e-12 {
            return Err(Error::NotRealizable(format!(
                "asymmetric overlaps (Q {asym_q:.2e}, T {asym_t:.2e})"
            )));
        }
        for x in self.q.iter().chain(self.r.iter()).chain(self.t.iter()) {
            if !x.is_finite() {
                return Err(Error::NotRealizable("non-finite overlap".into()));
            }
        }
        let min = min_eigenvalue(&self.joint_gram());
        if min < -PSD_TOL {
            return Err(Error::NotRealizable(format!(
                "joint Gram matrix has eigenvalue {min:.3e}"
            )));
        }
        for i in 0..self.k {
            let qii = self.q[(i, i)].max(0.0);
            for j in 0..self.k {
                let bound = (qii * self.q[(j, j)].max(0.0)).sqrt() + 1e-9;
                if self.q[(i, j)].abs() > bound {
                    return Err(Error::NotRealizable(format!("|Q[{i},{j}]| exceeds bound")));
                }
            }
            for n in 0..self.m {
                let bound = (qii * self.t[(n, n)].max(0.0)).sqrt() + 1e-9;
                if self.r[(i, n)].abs() > bound {
                    return Err(Error::NotRealizable(format!("|R[{i},{n}]| exceeds bound")));
                }
            }
        }
        Ok(())
    }

    pub fn is_realizable(&self) -> bool {
        self.check_realizable().is_ok()
    }

    /// Projects `Q` so that `Q - R T⁻¹ Rᵀ` is positive semidefinite, keeping
    /// `R` and `T` fixed. Returns the magnitude of the clipped eigenvalue.
    pub fn project_realizable(&mut self) -> Result<f64> {
        let t_inv = self
            .t
            .clone()
            .try_inverse()
            .ok_or_else(|| Error::NotRealizable("teacher overlap T is singular".into()))?;
        let par = symmetrize(&(&self.r * t_inv * self.r.transpose()));
        let n = symmetrize(&(&self.q - &par));
        let (clipped, mag) = clip_psd(&n);
        if mag > 0.0 {
            self.q = par + clipped;
        }
        Ok(mag)
    }

    /// Population loss `½ E[(student - teacher)²]` in closed form.
    pub fn population_loss(&self, act: ActivationKind) -> Result<f64> {
        self.check_realizable()?;
        Ok(self.loss_unchecked(act))
    }

    /// Population loss without the realizability check.
    pub fn loss_unchecked(&self, act: ActivationKind) -> f64 {
        let (k, m) = (self.k, self.m);
        let mut student = 0.0;
        for i in 0..k {
            for j in 0..k {
                student += self.v[i]
                    * self.v[j]
                    * i2_raw(act, self.q[(i, i)], self.q[(j, j)], self.q[(i, j)]);
            }
        }
        let mut teacher = 0.0;
        for n in 0..m {
            for p in 0..m {
                teacher += self.v_star[n]
                    * self.v_star[p]
                    * i2_raw(act, self.t[(n, n)], self.t[(p, p)], self.t[(n, p)]);
            }
        }
        let mut cross = 0.0;
        for i in 0..k {
            for n in 0..m {
                cross += self.v[i]
                    * self.v_star[n]
                    * i2_raw(act, self.q[(i, i)], self.t[(n, n)], self.r[(i, n)]);
            }
        }
        let loss = 0.5 * student + 0.5 * teacher - cross;
        if loss < 0.0 && loss > -1e-12 {
            0.0
        } else {
            loss
        }
    }

    /// Relabels the student units: unit `perm[i]` of `self` becomes unit `i`.
    pub fn permute_units(&self, perm: &[usize]) -> Result<Self> {
        check_permutation(perm, self.k)?;
        let k = self.k;
        let q = DMatrix::from_fn(k, k, |i, j| self.q[(perm[i], perm[j])]);
        let r = DMatrix::from_fn(k, self.m, |i, n| self.r[(perm[i], n)]);
        let v = DVector::from_fn(k, |i, _| self.v[perm[i]]);
        Ok(OverlapState { q, r, v, ..self.clone() })
    }

    /// Appends `extra` inactive (zero-weight) student units with readout `v_extra`.
    pub fn embed(&self, extra: usize, v_extra: f64) -> Result<Self> {
        if extra == 0 {
            return Err(Error::InvalidArgument("embed needs at least one extra unit".into()));
        }
        let k = self.k + extra;
        let mut q = DMatrix::zeros(k, k);
        q.view_mut((0, 0), (self.k, self.k)).copy_from(&self.q);
        let mut r = DMatrix::zeros(k, self.m);
        r.view_mut((0, 0), (self.k, self.m)).copy_from(&self.r);
        let mut v = DVector::from_element(k, v_extra);
        v.rows_mut(0, self.k).copy_from(&self.v);
        Ok(OverlapState { k, q, r, v, ..self.clone() })
    }

    /// Flattened `(Q upper triangle, R)` coordinates.
    pub fn coordinates(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.k * (self.k + 1) / 2 + self.k * self.m);
        for i in 0..self.k {
            for j in i..self.k {
                out.push(self.q[(i, j)]);
            }
        }
        for i in 0..self.k {
            for n in 0..self.m {
                out.push(self.r[(i, n)]);
            }
        }
        out
    }

    /// Inverse of [`coordinates`](Self::coordinates), keeping `T` and the readouts of `self`.
    pub fn with_coordinates(&self, x: &[f64]) -> Self {
        let mut s = self.clone();
        let mut idx = 0;
        for i in 0..self.k {
            for j in i..self.k {
                s.q[(i, j)] = x[idx];
                s.q[(j, i)] = x[idx];
                idx += 1;
            }
        }
        for i in 0..self.k {
            for n in 0..self.m {
                s.r[(i, n)] = x[idx];
                idx += 1;
            }
        }
        s
    }
}

pub(crate) fn check_permutation(perm: &[usize], k: usize) -> Result<()> {
    if perm.len() != k {
        return Err(Error::InvalidArgument(format!(
            "permutation has length {} but K = {k}",
            perm.len()
        )));
    }
    let mut seen = vec![false; k];
    for &p in perm {
        if p >= k || seen[p] {
            return Err(Error::InvalidArgument(format!("{perm:?} is not a permutation")));
        }
        seen[p] = true;
    }
    Ok(())
}

/// Expected squared weight distance between independent realizations of two
/// states, `sqrt(Tr(Qa + Qb - Ra Rbᵀ - Rb Raᵀ))`, assuming `T = I`.
pub fn induced_distance(a: &OverlapState, b: &OverlapState) -> Result<f64> {
    if a.k != b.k || a.m != b.m {
        return Err(Error::Shape(format!(
            "distance between (K={}, M={}) and (K={}, M={})",
            a.k, a.m, b.k, b.m
        )));
    }
    let mut tr = a.q.trace() + b.q.trace();
    for i in 0..a.k {
        for n in 0..a.m {
            tr -= 2.0 * a.r[(i, n)] * b.r[(i, n)];
        }
    }
    Ok(tr.max(0.0).sqrt())
}

// Flat JSON interchange format: {"K", "M", "Q", "R", "T", "v", "v_star"} with
// row-major arrays.
#[derive(Serialize, Deserialize)]
struct FlatState {
    #[serde(rename = "K")]
    k: usize,
    #[serde(rename = "M")]
    m: usize,
    #[serde(rename = "Q")]
    q: Vec<f64>,
    #[serde(rename = "R")]
    r: Vec<f64>,
    #[serde(rename = "T")]
    t: Vec<f64>,
    v: Vec<f64>,
    v_star: Vec<f64>,
}

fn row_major(m: &DMatrix<f64>) -> Vec<f64> {
    m.transpose().as_slice().to_vec()
}

impl Serialize for OverlapState {
    fn serialize<S: Serializer>(&self, serializer: S) -> std::result::Result<S::Ok, S::Error> {
        FlatState {
            k: self.k,
            m: self.m,
            q: row_major(&self.q),
            r: row_major(&self.r),
            t: row_major(&self.t),
            v: self.v.as_slice().to_vec(),
            v_star: self.v_star.as_slice().to_vec(),
        }
        .serialize(serializer)
    }
}

impl<'de> Deserialize<'de> for OverlapState {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> std::result::Result<Self, D::Error> {
        use serde::de::Error as _;
        let f = FlatState::deserialize(deserializer)?;
        let (k, m) = (f.k, f.m);
        let check = |name: &str, got: usize, want: usize| {
            if got == want {
                Ok(())
            } else {
                Err(D::Error::custom(format!("{name} has {got} entries, expected {want}")))
            }
        };
        check("Q", f.q.len(), k * k)?;
        check("R", f.r.len(), k * m)?;
        check("T", f.t.len(), m * m)?;
        check("v", f.v.len(), k)?;
        check("v_star", f.v_star.len(), m)?;
        Ok(OverlapState {
            k,
            m,
            q: DMatrix::from_row_slice(k, k, &f.q),
            r: DMatrix::from_row_slice(k, m, &f.r),
            t: DMatrix::from_row_slice(m, m, &f.t),
            v: DVector::from_vec(f.v),
            v_star: DVector::from_vec(f.v_star),
        })
    }
}

/// Explicit weights realizing a state at input dimension `d`.
#[derive(Debug, Clone)]
pub struct WeightRealization {
    pub d: usize,
    /// Student weights, `K × d`.
    pub w: DMatrix<f64>,
    /// Teacher weights, `M × d`.
    pub w_star: DMatrix<f64>,
}

impl WeightRealization {
    /// Measured overlaps with unit readouts.
    pub fn overlaps(&self) -> OverlapState {
        overlaps_from_weights(self)
    }
}

pub fn overlaps_from_weights(wr: &WeightRealization) -> OverlapState {
    let d = wr.d as f64;
    let q = symmetrize(&(&wr.w * wr.w.transpose() / d));
    let r = &wr.w * wr.w_star.transpose() / d;
    let t = symmetrize(&(&wr.w_star * wr.w_star.transpose() / d));
    let k = q.nrows();
    let m = t.nrows();
    OverlapState {
        k,
        m,
        q,
        r,
        t,
        v: DVector::from_element(k, 1.0),
        v_star: DVector::from_element(m, 1.0),
    }
}

fn gaussian_matrix(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
    // Filled row by row so that the draw order does not depend on nalgebra's layout.
    let mut m = DMatrix::zeros(rows, cols);
    for i in 0..rows {
        for j in 0..cols {
            m[(i, j)] = rng.sample(StandardNormal);
        }
    }
    m
}

/// Draws weights whose measured overlaps reproduce `s` exactly.
///
/// The teacher rows and the orthogonal student component are built on a
/// seeded orthonormal basis, so `overlaps_from_weights` returns `s` up to
/// rounding. Requires `d ≥ K + M`.
pub fn sample_weights(s: &OverlapState, d: usize, seed: u64) -> Result<WeightRealization> {
    let (k, m) = (s.k, s.m);
    if d < k + m {
        return Err(Error::InvalidArgument(format!(
            "exact realization needs d >= K + M = {}, got {d}",
            k + m
        )));
    }
    let t_chol = s
        .t
        .clone()
        .cholesky()
        .ok_or_else(|| Error::NotRealizable("teacher overlap T is not positive definite".into()))?;
    let n = s.orthogonal_gram()?;
    let min = min_eigenvalue(&n);
    if min < -PSD_TOL {
        return Err(Error::NotRealizable(format!(
            "Q - R T⁻¹ Rᵀ has eigenvalue {min:.3e}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let g = gaussian_matrix(d, k + m, &mut rng);
    let basis = g.qr().q(); // d × (K+M), orthonormal columns
    let sd = (d as f64).sqrt();
    let teacher_basis = basis.columns(0, m).transpose(); // M × d
    let noise_basis = basis.columns(m, k).transpose(); // K × d
    let w_star = t_chol.l() * teacher_basis * sd;
    let t_inv = s.t.clone().try_inverse().expect("T has a Cholesky factor");
    let w = &s.r * t_inv * &w_star + psd_sqrt(&n) * noise_basis * sd;
    Ok(WeightRealization { d, w, w_star })
}

/// How the student weights of a random initialization are constrained.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitNorm {
    /// i.i.d. standard normal entries.
    #[default]
    Free,
    /// Rows rescaled to squared norm `d` (`Q_ii = 1`).
    UnitNorm,
    /// Rows Gram-Schmidt orthonormalized to `W Wᵀ = d I`.
    Orthonormal,
}

/// Teacher configuration used by random initializations.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum TeacherConfig {
    /// Orthonormal rows, `T = I`.
    #[default]
    Orthonormal,
    /// i.i.d. standard normal teacher weights at the init dimension.
    Gaussian,
    /// A fixed teacher overlap matrix (row-major, `M × M`).
    Matrix { t: Vec<f64> },
}

/// Options for [`random_init`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InitOptions {
    /// Input dimension of the sampled weights; `None` is the `d → ∞` limit.
    pub d_init: Option<usize>,
    #[serde(default)]
    pub norm: InitNorm,
    #[serde(default)]
    pub teacher: TeacherConfig,
}

impl Default for InitOptions {
    fn default() -> Self {
        InitOptions { d_init: Some(784), norm: InitNorm::Free, teacher: TeacherConfig::Orthonormal }
    }
}

/// Samples a finite-dimensional random initialization and returns its overlaps.
pub fn random_init(k: usize, m: usize, opts: &InitOptions, seed: u64) -> Result<OverlapState> {
    random_weights(k, m, opts, seed).map(|wr| match wr {
        Some(wr) => overlaps_from_weights(&wr),
        None => OverlapState::isotropic(k, m),
    })
}

/// Samples the weights behind [`random_init`]; `None` for the `d → ∞` limit.
pub fn random_weights(
    k: usize,
    m: usize,
    opts: &InitOptions,
    seed: u64,
) -> Result<Option<WeightRealization>> {
    let Some(d) = opts.d_init else {
        return Ok(None);
    };
    if d == 0 {
        return Err(Error::InvalidArgument("d_init must be at least 1".into()));
    }
    if opts.norm == InitNorm::Orthonormal && d < k {
        return Err(Error::InvalidArgument("orthonormal init needs d >= K".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut w = gaussian_matrix(k, d, &mut rng);
    let sd = (d as f64).sqrt();
    match opts.norm {
        InitNorm::Free => {}
        InitNorm::UnitNorm => {
            for mut row in w.row_iter_mut() {
                let norm = row.norm();
                row *= sd / norm;
            }
        }
        InitNorm::Orthonormal => {
            let qr = w.transpose().qr();
            w = qr.q().transpose() * sd;
        }
    }
    let w_star = match &opts.teacher {
        TeacherConfig::Orthonormal => {
            if d < m {
                return Err(Error::InvalidArgument("orthonormal teacher needs d >= M".into()));
            }
            // The student law is rotation invariant, so coordinate axes are as
            // good as any orthonormal frame.
            DMatrix::from_fn(m, d, |n, j| if n == j { sd } else { 0.0 })
        }
        TeacherConfig::Gaussian => gaussian_matrix(m, d, &mut rng),
        TeacherConfig::Matrix { t } => {
            if t.len() != m * m {
                return Err(Error::Shape(format!("teacher matrix needs {} entries", m * m)));
            }
            if d < m {
                return Err(Error::InvalidArgument("teacher matrix needs d >= M".into()));
            }
            let t = DMatrix::from_row_slice(m, m, t);
            let l = t
                .cholesky()
                .ok_or_else(|| Error::NotRealizable("teacher matrix is not positive definite".into()))?
                .l();
            let axes = DMatrix::from_fn(m, d, |n, j| if n == j { sd } else { 0.0 });
            l * axes
        }
    };
    Ok(Some(WeightRealization { d, w, w_star }))
}

/// Perturbation model for [`perturb`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "mode")]
pub enum PerturbMode {
    /// `d → ∞` average of isotropic weight noise: `Q → Q + σ² I`.
    Meanfield,
    /// Sample weights at dimension `d`, add noise, re-measure.
    FiniteD { d: usize },
}

/// Isotropic Gaussian weight-space perturbation of a state.
pub fn perturb(s: &OverlapState, sigma: f64, mode: PerturbMode, seed: u64) -> Result<OverlapState> {
    if !(sigma >= 0.0) {
        return Err(Error::InvalidArgument(format!("sigma must be >= 0, got {sigma}")));
    }
    if sigma == 0.0 {
        return Ok(s.clone());
    }
    match mode {
        PerturbMode::Meanfield => {
            let mut out = s.clone();
            for i in 0..s.k {
                out.q[(i, i)] += sigma * sigma;
            }
            Ok(out)
        }
        PerturbMode::FiniteD { d } => {
            let mut wr = sample_weights(s, d, seed)?;
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9_7f4a_7c15);
            let noise = gaussian_matrix(s.k, d, &mut rng) * sigma;
            wr.w += noise;
            let mut out = overlaps_from_weights(&wr);
            out.v = s.v.clone();
            out.v_star = s.v_star.clone();
            // Keep T bit-identical to the input; re-measurement only adds rounding.
            out.t = s.t.clone();
            Ok(out)
        }
    }
}

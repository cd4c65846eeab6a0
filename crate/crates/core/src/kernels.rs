//! Gaussian expectations of activation products.
//!
//! Every loss and flow formula in the crate reduces to three expectations
//! over zero-mean jointly Gaussian variables:
//!
//! * `I2 = <g(x1) g(x2)>`
//! * `I3 = <g'(x0) x1 g(x2)>`
//! * `I4 = <g'(x0) g'(x1) g(x2) g(x3)>`
//!
//! `I2` and `I3` have closed forms for ReLU, Leaky ReLU and erf. `I4` is only
//! available as a Monte-Carlo estimate. The Monte-Carlo oracles for `I2` and
//! `I3` exist to validate the closed forms.
//!
//! All `I3` closed forms share one structure: the expectation is linear in the
//! covariances that involve `x1`, so `I3 = C12 * a(C00, C02, C22) + C01 *
//! b(C00, C02, C22)`. [`i3_coefficients`] exposes the pair `(a, b)`, which the
//! flow code uses to turn the sums over hidden units into matrix products.

use std::f64::consts::{FRAC_2_PI, PI};
use std::fmt;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{psd_factor, PSD_TOL};

const TWO_PI: f64 = 2.0 * PI;

/// Activation function of the hidden units.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ActivationKind {
    Relu,
    /// Leaky ReLU with leak slope `alpha` in `[0, 1]`.
    LeakyRelu { alpha: f64 },
    /// `erf(x / sqrt(2))`.
    Erf,
}

impl Default for ActivationKind {
    fn default() -> Self {
        ActivationKind::Relu
    }
}

impl ActivationKind {
    pub fn leaky(alpha: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&alpha) {
            return Err(Error::InvalidArgument(format!(
                "leak slope must lie in [0, 1], got {alpha}"
            )));
        }
        Ok(ActivationKind::LeakyRelu { alpha })
    }

    /// The activation itself.
    pub fn g(&self, x: f64) -> f64 {
        match *self {
            ActivationKind::Relu => x.max(0.0),
            ActivationKind::LeakyRelu { alpha } => {
                if x >= 0.0 {
                    x
                } else {
                    alpha * x
                }
            }
            ActivationKind::Erf => libm::erf(x * std::f64::consts::FRAC_1_SQRT_2),
        }
    }

    /// Derivative; the ReLU step is taken as 0 at the origin.
    pub fn dg(&self, x: f64) -> f64 {
        match *self {
            ActivationKind::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            ActivationKind::LeakyRelu { alpha } => {
                if x >= 0.0 {
                    1.0
                } else {
                    alpha
                }
            }
            ActivationKind::Erf => (FRAC_2_PI).sqrt() * (-0.5 * x * x).exp(),
        }
    }
}

impl fmt::Display for ActivationKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ActivationKind::Relu => write!(f, "relu"),
            ActivationKind::LeakyRelu { alpha } => write!(f, "lrelu:{alpha}"),
            ActivationKind::Erf => write!(f, "erf"),
        }
    }
}

impl FromStr for ActivationKind {
    type Err = Error;

    /// Accepts `relu`, `erf`, `lrelu:<alpha>` or `leaky_relu:<alpha>`.
    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim().to_ascii_lowercase();
        match s.as_str() {
            "relu" => return Ok(ActivationKind::Relu),
            "erf" => return Ok(ActivationKind::Erf),
            _ => {}
        }
        if let Some((name, alpha)) = s.split_once(':') {
            if name == "lrelu" || name == "leaky_relu" {
                let alpha: f64 = alpha
                    .parse()
                    .map_err(|_| Error::InvalidArgument(format!("bad leak slope `{alpha}`")))?;
                return ActivationKind::leaky(alpha);
            }
        }
        Err(Error::InvalidArgument(format!("unknown activation `{s}`")))
    }
}

/// Covariance of a pair `(x1, x2)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Cov2 {
    pub c11: f64,
    pub c22: f64,
    pub c12: f64,
}

impl Cov2 {
    pub fn new(c11: f64, c22: f64, c12: f64) -> Self {
        Cov2 { c11, c22, c12 }
    }

    pub fn matrix(&self) -> DMatrix<f64> {
        DMatrix::from_row_slice(2, 2, &[self.c11, self.c12, self.c12, self.c22])
    }
}

/// Covariance of a triple `(x0, x1, x2)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Cov3 {
    pub c00: f64,
    pub c11: f64,
    pub c22: f64,
    pub c01: f64,
    pub c02: f64,
    pub c12: f64,
}

impl Cov3 {
    pub fn matrix(&self) -> DMatrix<f64> {
        DMatrix::from_row_slice(
            3,
            3,
            &[
                self.c00, self.c01, self.c02, //
                self.c01, self.c11, self.c12, //
                self.c02, self.c12, self.c22,
            ],
        )
    }
}

/// Full symmetric covariance of `(x0, x1, x2, x3)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Cov4 {
    pub c: [[f64; 4]; 4],
}

impl Cov4 {
    pub fn identity() -> Self {
        let mut c = [[0.0; 4]; 4];
        for (i, row) in c.iter_mut().enumerate() {
            row[i] = 1.0;
        }
        Cov4 { c }
    }

    pub fn matrix(&self) -> DMatrix<f64> {
        DMatrix::from_fn(4, 4, |i, j| self.c[i][j])
    }
}

#[inline]
fn clamp_unit(x: f64) -> f64 {
    x.clamp(-1.0, 1.0)
}

/// ReLU `I2` without validation; zero variances give the analytic limit 0.
#[inline]
pub(crate) fn i2_relu_raw(c11: f64, c22: f64, c12: f64) -> f64 {
    let vv = c11 * c22;
    if c11 <= 0.0 || c22 <= 0.0 || vv <= 0.0 {
        return 0.0;
    }
    let s = (vv - c12 * c12).max(0.0).sqrt();
    // The angle is taken from the same `s`, so rounding in `s` cancels to first
    // order near perfectly correlated pairs (an acos there loses half the digits).
    (s + c12 * (PI - s.atan2(c12))) / TWO_PI
}

/// `I2` without validation.
#[inline]
pub(crate) fn i2_raw(act: ActivationKind, c11: f64, c22: f64, c12: f64) -> f64 {
    match act {
        ActivationKind::Relu => i2_relu_raw(c11, c22, c12),
        ActivationKind::LeakyRelu { alpha } => {
            let w = (1.0 - alpha) * (1.0 - alpha);
            alpha * c12 + w * i2_relu_raw(c11, c22, c12)
        }
        ActivationKind::Erf => {
            let den = ((1.0 + c11) * (1.0 + c22)).sqrt();
            FRAC_2_PI * clamp_unit(c12 / den).asin()
        }
    }
}

/// Coefficients `(a, b)` with `I3 = c12 * a + c01 * b`.
///
/// Only the covariances that do not involve `x1` enter. Zero variance of the
/// derivative variable `x0` (or of `x2` for the rectifiers) gives `(0, 0)`
/// for the rectified part, the analytic limit of an inactive unit.
#[inline]
pub fn i3_coefficients(act: ActivationKind, c00: f64, c02: f64, c22: f64) -> (f64, f64) {
    match act {
        ActivationKind::Relu => relu_i3_coefficients(c00, c02, c22),
        ActivationKind::LeakyRelu { alpha } => {
            let (a, b) = relu_i3_coefficients(c00, c02, c22);
            let w = (1.0 - alpha) * (1.0 - alpha);
            (alpha + w * a, w * b)
        }
        ActivationKind::Erf => {
            let den2 = (1.0 + c00) * (1.0 + c22) - c02 * c02;
            let den = den2.max(1e-300).sqrt();
            let a = FRAC_2_PI / den;
            (a, -a * c02 / (1.0 + c00))
        }
    }
}

/// Given `b` from `i3_coefficients(act, c00, c02, c22)`, the `b` of the
/// swapped call `i3_coefficients(act, c22, c02, c00)`; `a` is symmetric.
#[inline]
pub(crate) fn swapped_b(act: ActivationKind, b: f64, c00: f64, c22: f64) -> f64 {
    match act {
        ActivationKind::Relu | ActivationKind::LeakyRelu { .. } => {
            if c22 > 0.0 {
                b * c00 / c22
            } else {
                0.0
            }
        }
        ActivationKind::Erf => b * (1.0 + c00) / (1.0 + c22),
    }
}

#[inline]
fn relu_i3_coefficients(c00: f64, c02: f64, c22: f64) -> (f64, f64) {
    if c00 <= 0.0 || c22 <= 0.0 {
        return (0.0, 0.0);
    }
    let vv = c22 * c00;
    let s = (vv - c02 * c02).max(0.0).sqrt();
    let a = (PI - s.atan2(c02)) / TWO_PI;
    let b = s / (c00 * TWO_PI);
    (a, b)
}

fn check_psd(m: &DMatrix<f64>) -> Result<()> {
    psd_factor(m, PSD_TOL).map(|_| ())
}

/// `<g(x1) g(x2)>` in closed form.
pub fn i2(act: ActivationKind, cov: Cov2) -> Result<f64> {
    if cov.c11 < 0.0 {
        return Err(Error::NegativeVariance(cov.c11));
    }
    if cov.c22 < 0.0 {
        return Err(Error::NegativeVariance(cov.c22));
    }
    check_psd(&cov.matrix())?;
    Ok(i2_raw(act, cov.c11, cov.c22, cov.c12))
}

/// `<g'(x0) x1 g(x2)>` in closed form.
///
/// `c00 = 0` is accepted and returns the inactive-unit limit.
pub fn i3(act: ActivationKind, cov: Cov3) -> Result<f64> {
    for v in [cov.c00, cov.c11, cov.c22] {
        if v < 0.0 {
            return Err(Error::NegativeVariance(v));
        }
    }
    check_psd(&cov.matrix())?;
    let (a, b) = i3_coefficients(act, cov.c00, cov.c02, cov.c22);
    Ok(cov.c12 * a + cov.c01 * b)
}

/// Monte-Carlo estimate of `E[f(x)]` for `x ~ N(0, cov)`, with its standard error.
pub fn gaussian_mc<F>(cov: &DMatrix<f64>, n_samples: usize, seed: u64, mut f: F) -> Result<(f64, f64)>
where
    F: FnMut(&[f64]) -> f64,
{
    if n_samples < 2 {
        return Err(Error::InvalidArgument("need at least two samples".into()));
    }
    let factor = psd_factor(cov, PSD_TOL)?;
    let n = cov.nrows();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut z = DVector::<f64>::zeros(n);
    let mut x = vec![0.0; n];
    // Welford accumulation keeps the variance estimate stable at 1e7 samples.
    let mut mean = 0.0;
    let mut m2 = 0.0;
    for k in 0..n_samples {
        for zi in z.iter_mut() {
            *zi = StandardNormal.sample(&mut rng);
        }
        for (i, xi) in x.iter_mut().enumerate() {
            let mut acc = 0.0;
            for j in 0..n {
                acc += factor[(i, j)] * z[j];
            }
            *xi = acc;
        }
        let y = f(&x);
        let delta = y - mean;
        mean += delta / (k + 1) as f64;
        m2 += delta * (y - mean);
    }
    let var = m2 / (n_samples - 1) as f64;
    Ok((mean, (var / n_samples as f64).sqrt()))
}

fn require_samples(n: usize, min: usize) -> Result<()> {
    if n < min {
        return Err(Error::InvalidArgument(format!(
            "at least {min} samples required, got {n}"
        )));
    }
    Ok(())
}

/// Monte-Carlo oracle for [`i2`].
pub fn i2_oracle(act: ActivationKind, cov: Cov2, n_samples: usize, seed: u64) -> Result<(f64, f64)> {
    require_samples(n_samples, 10_000)?;
    gaussian_mc(&cov.matrix(), n_samples, seed, |x| act.g(x[0]) * act.g(x[1]))
}

/// Monte-Carlo oracle for [`i3`].
pub fn i3_oracle(act: ActivationKind, cov: Cov3, n_samples: usize, seed: u64) -> Result<(f64, f64)> {
    require_samples(n_samples, 10_000)?;
    gaussian_mc(&cov.matrix(), n_samples, seed, |x| act.dg(x[0]) * x[1] * act.g(x[2]))
}

/// Monte-Carlo estimate of `<g'(x0) g'(x1) g(x2) g(x3)>`.
pub fn i4_numeric(act: ActivationKind, cov: Cov4, n_samples: usize, seed: u64) -> Result<(f64, f64)> {
    require_samples(n_samples, 100_000)?;
    gaussian_mc(&cov.matrix(), n_samples, seed, |x| {
        act.dg(x[0]) * act.dg(x[1]) * act.g(x[2]) * act.g(x[3])
    })
}

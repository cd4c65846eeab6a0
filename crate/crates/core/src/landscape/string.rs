use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::spline::{linear_interp, NaturalSpline};
use crate::ansatz::{classify, UnitRole};
use crate::dynamics::rhs_gd_unchecked;
use crate::error::{Error, Result};
use crate::kernels::ActivationKind;
use crate::state::{induced_distance, OverlapState};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct StringConfig {
    /// Number of segments `P`; the path has `P + 1` images.
    pub images: usize,
    pub dtau: f64,
    pub max_iters: usize,
    /// Stop once the largest transverse force drops below this.
    pub force_tol: f64,
    pub check_every: usize,
    /// Stop when the force decreased by less than this fraction over the
    /// last ten checks.
    pub plateau: f64,
    /// Largest realizability clip tolerated for a spline-resampled image
    /// before falling back to linear interpolation.
    pub clip_budget: f64,
}

impl Default for StringConfig {
    fn default() -> Self {
        StringConfig {
            images: 32,
            dtau: 0.01,
            max_iters: 100_000,
            force_tol: 1e-8,
            check_every: 100,
            plateau: 1e-3,
            clip_budget: 1e-6,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StringPath {
    pub images: Vec<OverlapState>,
    /// Cumulative induced distance from the first image.
    pub arc_lengths: Vec<f64>,
    pub losses: Vec<f64>,
    pub iterations_run: usize,
    /// Largest transverse force over interior images before and after relaxation.
    pub initial_force: f64,
    pub final_force: f64,
    /// Largest eigenvalue removed by realizability projections.
    pub max_clip: f64,
}

impl StringPath {
    pub fn arc_fractions(&self) -> Vec<f64> {
        let total = self.arc_lengths.last().copied().unwrap_or(0.0);
        self.arc_lengths
            .iter()
            .map(|&a| if total > 0.0 { a / total } else { 0.0 })
            .collect()
    }
}

fn check_pair(a: &OverlapState, b: &OverlapState) -> Result<()> {
    if a.k != b.k || a.m != b.m {
        return Err(Error::Shape(format!(
            "endpoints have (K={}, M={}) and (K={}, M={})",
            a.k, a.m, b.k, b.m
        )));
    }
    if a.t != b.t || a.v != b.v || a.v_star != b.v_star {
        return Err(Error::Shape("endpoints differ in T or readouts".into()));
    }
    Ok(())
}

fn arc_lengths(images: &[OverlapState]) -> Result<Vec<f64>> {
    let mut out = Vec::with_capacity(images.len());
    out.push(0.0);
    for w in images.windows(2) {
        let last = *out.last().expect("non-empty");
        out.push(last + induced_distance(&w[0], &w[1])?);
    }
    Ok(out)
}

/// Resamples `nodes` at `p + 1` points equally spaced in arc length.
/// Returns the images and the largest clip applied.
fn reparameterize(
    nodes: &[OverlapState],
    p: usize,
    a: &OverlapState,
    b: &OverlapState,
    clip_budget: f64,
) -> Result<(Vec<OverlapState>, f64)> {
    let arcs = arc_lengths(nodes)?;
    let total = *arcs.last().expect("non-empty");
    if !(total > 1e-14) {
        let mut out: Vec<OverlapState> = (0..=p).map(|_| a.clone()).collect();
        out[p] = b.clone();
        return Ok((out, 0.0));
    }
    // Drop repeated knots so that the abscissae increase strictly.
    let mut xs = Vec::with_capacity(nodes.len());
    let mut coords = Vec::with_capacity(nodes.len());
    for (i, node) in nodes.iter().enumerate() {
        if i > 0 && arcs[i] - xs.last().copied().unwrap_or(f64::NEG_INFINITY) <= 1e-14 * total {
            if i == nodes.len() - 1 {
                *xs.last_mut().expect("non-empty") = arcs[i];
                *coords.last_mut().expect("non-empty") = node.coordinates();
            }
            continue;
        }
        xs.push(arcs[i]);
        coords.push(node.coordinates());
    }
    let dim = coords[0].len();
    let splines: Vec<NaturalSpline> = (0..dim)
        .map(|c| NaturalSpline::new(&xs, coords.iter().map(|x| x[c]).collect()))
        .collect();
    let mut out = Vec::with_capacity(p + 1);
    let mut max_clip = 0.0f64;
    out.push(a.clone());
    for k in 1..p {
        let s = total * k as f64 / p as f64;
        let x: Vec<f64> = splines.iter().map(|sp| sp.eval(s)).collect();
        let mut img = a.with_coordinates(&x);
        let mut clip = img.project_realizable()?;
        if clip > clip_budget {
            let column: Vec<f64> = (0..dim)
                .map(|c| {
                    let ys: Vec<f64> = coords.iter().map(|x| x[c]).collect();
                    linear_interp(&xs, &ys, s)
                })
                .collect();
            img = a.with_coordinates(&column);
            clip = img.project_realizable()?;
        }
        max_clip = max_clip.max(clip);
        out.push(img);
    }
    out.push(b.clone());
    Ok((out, max_clip))
}

fn force_coordinates(s: &OverlapState, act: ActivationKind) -> Vec<f64> {
    let d = rhs_gd_unchecked(s, act, false);
    let mut out = Vec::with_capacity(s.k * (s.k + 1) / 2 + s.k * s.m);
    for i in 0..s.k {
        for j in i..s.k {
            out.push(d.dq[(i, j)]);
        }
    }
    out.extend(d.dr.transpose().iter());
    out
}

/// Largest norm of the force component orthogonal to the path.
fn transverse_force(images: &[OverlapState], act: ActivationKind) -> f64 {
    let mut worst = 0.0f64;
    for i in 1..images.len() - 1 {
        let prev = images[i - 1].coordinates();
        let next = images[i + 1].coordinates();
        let tangent: Vec<f64> = next.iter().zip(&prev).map(|(a, b)| a - b).collect();
        let tn = tangent.iter().map(|x| x * x).sum::<f64>().sqrt();
        let f = force_coordinates(&images[i], act);
        let along = if tn > 0.0 {
            f.iter().zip(&tangent).map(|(a, b)| a * b).sum::<f64>() / tn
        } else {
            0.0
        };
        let perp: f64 = f
            .iter()
            .zip(&tangent)
            .map(|(fi, ti)| {
                let t = if tn > 0.0 { ti / tn } else { 0.0 };
                let x = fi - along * t;
                x * x
            })
            .sum();
        worst = worst.max(perp.sqrt());
    }
    worst
}

/// Zero-temperature string method starting from the straight line between `a` and `b`.
pub fn string_method(
    a: &OverlapState,
    b: &OverlapState,
    cfg: &StringConfig,
    act: ActivationKind,
) -> Result<StringPath> {
    check_pair(a, b)?;
    let p = cfg.images;
    let xa = a.coordinates();
    let xb = b.coordinates();
    let mut nodes = Vec::with_capacity(p + 1);
    nodes.push(a.clone());
    for k in 1..p {
        let w = k as f64 / p as f64;
        let x: Vec<f64> = xa.iter().zip(&xb).map(|(u, v)| (1.0 - w) * u + w * v).collect();
        let mut img = a.with_coordinates(&x);
        img.project_realizable()?;
        nodes.push(img);
    }
    nodes.push(b.clone());
    string_method_from(&nodes, cfg, act)
}

/// String method starting from an arbitrary chain of states; the first and
/// last entries are the fixed endpoints.
pub fn string_method_from(
    chain: &[OverlapState],
    cfg: &StringConfig,
    act: ActivationKind,
) -> Result<StringPath> {
    if chain.len() < 2 {
        return Err(Error::InvalidArgument("a path needs at least two states".into()));
    }
    if cfg.images < 8 {
        return Err(Error::InvalidArgument(format!("need at least 8 segments, got {}", cfg.images)));
    }
    if !(cfg.dtau > 0.0) {
        return Err(Error::InvalidArgument("dtau must be > 0".into()));
    }
    let a = &chain[0];
    let b = &chain[chain.len() - 1];
    for s in chain {
        check_pair(a, s)?;
    }
    a.check_realizable()?;
    b.check_realizable()?;
    let p = cfg.images;
    let (mut images, mut max_clip) = reparameterize(chain, p, a, b, cfg.clip_budget)?;
    let initial_force = transverse_force(&images, act);
    let mut history = vec![initial_force];
    let mut force = initial_force;
    let mut iters = 0;
    while iters < cfg.max_iters && force >= cfg.force_tol {
        for img in images.iter_mut().take(p).skip(1) {
            let d = rhs_gd_unchecked(img, act, false);
            img.r += &d.dr * cfg.dtau;
            img.q += &d.dq * cfg.dtau;
            img.q = crate::linalg::symmetrize(&img.q);
            max_clip = max_clip.max(img.project_realizable()?);
        }
        if images.iter().any(|s| s.q.iter().chain(s.r.iter()).any(|x| !x.is_finite())) {
            return Err(Error::NonFinite { step: iters as u64 });
        }
        let (next, clip) = reparameterize(&images, p, a, b, cfg.clip_budget)?;
        images = next;
        max_clip = max_clip.max(clip);
        iters += 1;
        if iters % cfg.check_every.max(1) == 0 {
            force = transverse_force(&images, act);
            history.push(force);
            if history.len() > 10 {
                let old = history[history.len() - 11];
                if force > (1.0 - cfg.plateau) * old {
                    break;
                }
            }
        }
    }
    let final_force = transverse_force(&images, act);
    if max_clip > cfg.clip_budget {
        log::warn!("string projections clipped {max_clip:.3e}");
    }
    let losses = images.iter().map(|s| s.loss_unchecked(act)).collect();
    Ok(StringPath {
        arc_lengths: arc_lengths(&images)?,
        images,
        losses,
        iterations_run: iters,
        initial_force,
        final_force,
        max_clip,
    })
}

/// `max(loss) - max(loss(first), loss(last))`.
pub fn barrier_height(path: &StringPath) -> f64 {
    let Some(&first) = path.losses.first() else { return 0.0 };
    let last = *path.losses.last().expect("non-empty");
    let top = path.losses.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    top - first.max(last)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PathProfile {
    Flat,
    Collapsing,
    Barrier,
}

impl std::fmt::Display for PathProfile {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            PathProfile::Flat => "flat",
            PathProfile::Collapsing => "collapsing",
            PathProfile::Barrier => "barrier",
        })
    }
}

/// Collapsing when an interior image falls below `collapse_ratio` times the
/// endpoint loss; otherwise flat when the barrier is below `flat_tol`.
pub fn classify_profile(path: &StringPath, flat_tol: f64, collapse_ratio: f64) -> PathProfile {
    let n = path.losses.len();
    let end = path.losses[0].max(path.losses[n - 1]);
    let interior_min = path.losses[1..n - 1].iter().cloned().fold(f64::INFINITY, f64::min);
    if n > 2 && interior_min < collapse_ratio * end {
        PathProfile::Collapsing
    } else if barrier_height(path) < flat_tol {
        PathProfile::Flat
    } else {
        PathProfile::Barrier
    }
}

/// Which two unit roles a swap exchanges.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SwapKind {
    SameKind,
    ExtraVsAnti,
    AlignedVsAnti,
    ExtraVsAligned,
}

impl SwapKind {
    pub const ALL: [SwapKind; 4] =
        [SwapKind::SameKind, SwapKind::ExtraVsAnti, SwapKind::AlignedVsAnti, SwapKind::ExtraVsAligned];
}

impl std::fmt::Display for SwapKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            SwapKind::SameKind => "same_kind",
            SwapKind::ExtraVsAnti => "extra_vs_anti",
            SwapKind::AlignedVsAnti => "aligned_vs_anti",
            SwapKind::ExtraVsAligned => "extra_vs_aligned",
        })
    }
}

impl std::str::FromStr for SwapKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        SwapKind::ALL
            .into_iter()
            .find(|k| k.to_string() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown swap kind '{s}'")))
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ConnectivityResult {
    pub swap_kind: SwapKind,
    /// The two exchanged units.
    pub units: (usize, usize),
    pub barrier: f64,
    pub profile: PathProfile,
    pub path: StringPath,
}

fn is_silent(s: &OverlapState, i: usize) -> bool {
    s.q[(i, i)].abs() < 1e-12 && s.r.row(i).iter().all(|x| x.abs() < 1e-12)
}

/// Moves the weight of unit `from` onto the silent unit `to` along
/// `w_to = t w_from`, `w_from = (1 - t) w_from`, which leaves the network
/// function unchanged for positively homogeneous activations.
pub fn transfer_path(s: &OverlapState, from: usize, to: usize, steps: usize) -> Result<Vec<OverlapState>> {
    if from >= s.k || to >= s.k || from == to {
        return Err(Error::InvalidArgument(format!("invalid transfer {from} -> {to}")));
    }
    if !is_silent(s, to) {
        return Err(Error::InvalidArgument(format!("unit {to} is not silent")));
    }
    let steps = steps.max(1);
    let qff = s.q[(from, from)];
    Ok((0..=steps)
        .map(|n| {
            let t = n as f64 / steps as f64;
            let u = 1.0 - t;
            let mut out = s.clone();
            for j in 0..s.k {
                if j == from || j == to {
                    continue;
                }
                let x = s.q[(from, j)];
                out.q[(to, j)] = t * x;
                out.q[(j, to)] = t * x;
                out.q[(from, j)] = u * x;
                out.q[(j, from)] = u * x;
            }
            out.q[(to, to)] = t * t * qff;
            out.q[(from, from)] = u * u * qff;
            out.q[(from, to)] = t * u * qff;
            out.q[(to, from)] = t * u * qff;
            for n in 0..s.m {
                let x = s.r[(from, n)];
                out.r[(to, n)] = t * x;
                out.r[(from, n)] = u * x;
            }
            out
        })
        .collect())
}

/// Chain exchanging units `i` and `j` through the silent unit `e` in three
/// transfers (`i → e`, `j → i`, `e → j`).
pub fn swap_via_silent_unit(
    s: &OverlapState,
    i: usize,
    j: usize,
    e: usize,
    steps: usize,
) -> Result<Vec<OverlapState>> {
    let first = transfer_path(s, i, e, steps)?;
    let second = transfer_path(first.last().expect("non-empty"), j, i, steps)?;
    let third = transfer_path(second.last().expect("non-empty"), e, j, steps)?;
    let mut out = first;
    out.extend(second.into_iter().skip(1));
    out.extend(third.into_iter().skip(1));
    Ok(out)
}

fn swap_perm(k: usize, i: usize, j: usize) -> Vec<usize> {
    let mut p: Vec<usize> = (0..k).collect();
    p.swap(i, j);
    p
}

/// Swap kinds for which `s` has enough units of the required roles.
pub fn applicable_swaps(s: &OverlapState, align_tol: f64) -> Vec<SwapKind> {
    let c = classify(s, align_tol);
    let n = |role: UnitRole| c.roles.iter().filter(|&&r| r == role).count();
    let (extra, anti, aligned) = (n(UnitRole::Extra), n(UnitRole::Anti), n(UnitRole::Aligned));
    SwapKind::ALL
        .into_iter()
        .filter(|k| match k {
            SwapKind::SameKind => anti >= 2 || aligned >= 2,
            SwapKind::ExtraVsAnti => extra >= 1 && anti >= 1,
            SwapKind::AlignedVsAnti => aligned >= 1 && anti >= 1,
            SwapKind::ExtraVsAligned => extra >= 1 && aligned >= 1,
        })
        .collect()
}

/// Runs the string method between `s` and the relabelings of `s` that
/// exchange two units of the requested roles.
///
/// Roles come from [`classify`]. Swaps that involve a silent unit start from
/// the function-preserving transfer chain instead of the straight line.
pub fn connectivity_suite(
    s: &OverlapState,
    kinds: &[SwapKind],
    cfg: &StringConfig,
    act: ActivationKind,
    align_tol: f64,
) -> Result<Vec<ConnectivityResult>> {
    let c = classify(s, align_tol);
    let of = |role: UnitRole| -> Vec<usize> { (0..s.k).filter(|&i| c.roles[i] == role).collect() };
    let (extra, anti, aligned) = (of(UnitRole::Extra), of(UnitRole::Anti), of(UnitRole::Aligned));
    let pick = |kind: SwapKind| -> Result<(usize, usize)> {
        let need = |v: &[usize], n: usize, what: &str| -> Result<()> {
            if v.len() < n {
                Err(Error::InvalidArgument(format!("{kind} swap needs {n} {what} unit(s), state has {}", v.len())))
            } else {
                Ok(())
            }
        };
        match kind {
            SwapKind::SameKind => {
                if anti.len() >= 2 {
                    Ok((anti[0], anti[1]))
                } else {
                    need(&aligned, 2, "aligned")?;
                    Ok((aligned[0], aligned[1]))
                }
            }
            SwapKind::ExtraVsAnti => {
                need(&extra, 1, "extra")?;
                need(&anti, 1, "anti-aligned")?;
                Ok((extra[0], anti[0]))
            }
            SwapKind::AlignedVsAnti => {
                need(&aligned, 1, "aligned")?;
                need(&anti, 1, "anti-aligned")?;
                Ok((aligned[0], anti[0]))
            }
            SwapKind::ExtraVsAligned => {
                need(&extra, 1, "extra")?;
                need(&aligned, 1, "aligned")?;
                Ok((extra[0], aligned[0]))
            }
        }
    };
    let jobs: Vec<(SwapKind, usize, usize)> = kinds
        .iter()
        .map(|&k| pick(k).map(|(i, j)| (k, i, j)))
        .collect::<Result<_>>()?;
    jobs.into_par_iter()
        .map(|(kind, i, j)| {
            let b = s.permute_units(&swap_perm(s.k, i, j))?;
            let silent = (0..s.k).find(|&e| e != i && e != j && is_silent(s, e));
            let path = if is_silent(s, i) {
                string_method_from(&transfer_path(s, j, i, cfg.images)?, cfg, act)?
            } else if is_silent(s, j) {
                string_method_from(&transfer_path(s, i, j, cfg.images)?, cfg, act)?
            } else if let Some(e) = silent {
                string_method_from(&swap_via_silent_unit(s, i, j, e, cfg.images)?, cfg, act)?
            } else {
                string_method(s, &b, cfg, act)?
            };
            let barrier = barrier_height(&path);
            let profile = classify_profile(&path, 1e-4, 0.5);
            Ok(ConnectivityResult { swap_kind: kind, units: (i, j), barrier, profile, path })
        })
        .collect()
}

/// Writes `image_index,arc_fraction,loss` rows.
pub fn write_path_csv<W: Write>(path: &StringPath, out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["image_index", "arc_fraction", "loss"])?;
    for (i, (f, l)) in path.arc_fractions().iter().zip(&path.losses).enumerate() {
        w.write_record([i.to_string(), format!("{f:.10e}"), format!("{l:.10e}")])?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernels::ActivationKind::Relu;

    fn quick() -> StringConfig {
        StringConfig { images: 8, max_iters: 200, ..Default::default() }
    }

    #[test]
    fn identical_endpoints_give_constant_path() {
        let a = OverlapState::global_minimum(3);
        let p = string_method(&a, &a, &quick(), Relu).unwrap();
        assert_eq!(p.images.len(), 9);
        assert!(p.images.iter().all(|s| *s == a));
        assert_eq!(barrier_height(&p), 0.0);
    }

    #[test]
    fn endpoints_stay_bit_identical() {
        let a = OverlapState::global_minimum(3);
        let b = a.permute_units(&[1, 0, 2]).unwrap();
        let p = string_method(&a, &b, &quick(), Relu).unwrap();
        assert_eq!(p.images[0], a);
        assert_eq!(*p.images.last().unwrap(), b);
        assert!(p.arc_lengths.windows(2).all(|w| w[1] >= w[0]));
    }

    #[test]
    fn transfer_keeps_the_loss() {
        let s = OverlapState::global_minimum(3).embed(1, 1.0).unwrap();
        let chain = swap_via_silent_unit(&s, 0, 1, 3, 6).unwrap();
        assert_eq!(*chain.last().unwrap(), s.permute_units(&[1, 0, 2, 3]).unwrap());
        for st in &chain {
            st.check_realizable().unwrap();
            assert!(st.loss_unchecked(Relu).abs() < 1e-14);
        }
    }

    #[test]
    fn profile_rules() {
        let mk = |losses: Vec<f64>| StringPath {
            images: vec![],
            arc_lengths: vec![],
            losses,
            iterations_run: 0,
            initial_force: 0.0,
            final_force: 0.0,
            max_clip: 0.0,
        };
        assert_eq!(classify_profile(&mk(vec![0.1, 0.1, 0.1]), 1e-4, 0.5), PathProfile::Flat);
        assert_eq!(classify_profile(&mk(vec![0.1, 0.01, 0.1]), 1e-4, 0.5), PathProfile::Collapsing);
        assert_eq!(classify_profile(&mk(vec![0.1, 0.2, 0.1]), 1e-4, 0.5), PathProfile::Barrier);
        assert!((barrier_height(&mk(vec![0.1, 0.2, 0.05])) - 0.1).abs() < 1e-15);
    }
}

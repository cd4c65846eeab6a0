use committee::ansatz::{solve_family, SolverOptions};
use committee::kernels::ActivationKind;
use committee::landscape::{
    barrier_height, connectivity_suite, string_method, string_method_from, transfer_path,
    StringConfig, SwapKind,
};
use committee::state::OverlapState;

const RELU: ActivationKind = ActivationKind::Relu;

fn cfg(images: usize, iters: usize) -> StringConfig {
    StringConfig { images, max_iters: iters, ..StringConfig::default() }
}

fn swapped(s: &OverlapState, i: usize, j: usize) -> OverlapState {
    let mut perm: Vec<usize> = (0..s.k).collect();
    perm.swap(i, j);
    s.permute_units(&perm).unwrap()
}

fn max_gap(a: &OverlapState, b: &OverlapState) -> f64 {
    a.coordinates().iter().zip(b.coordinates()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

#[test]
fn relaxed_string_is_evenly_spaced() {
    let a = OverlapState::global_minimum(3);
    let b = swapped(&a, 0, 1);
    let path = string_method(&a, &b, &cfg(16, 3000), RELU).unwrap();
    let p = path.images.len() - 1;
    for (i, f) in path.arc_fractions().iter().enumerate() {
        assert!((f - i as f64 / p as f64).abs() < 0.01, "image {i} at arc fraction {f}");
    }
    assert!(barrier_height(&path) >= -1e-12);
    assert!(path.final_force <= path.initial_force);
    assert_eq!(path.images[0], a);
    assert_eq!(path.images[p], b);
}

/// The induced distance is not a metric on coordinates, so resampling is only
/// approximately a projection.
#[test]
fn reparameterization_is_nearly_idempotent() {
    let a = OverlapState::global_minimum(3);
    let b = swapped(&a, 1, 2);
    let once = string_method(&a, &b, &cfg(16, 500), RELU).unwrap();
    let again = string_method_from(&once.images, &cfg(16, 0), RELU).unwrap();
    let twice = string_method_from(&again.images, &cfg(16, 0), RELU).unwrap();
    let shift = again
        .arc_fractions()
        .iter()
        .zip(twice.arc_fractions())
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max);
    assert!(shift < 1e-3, "second pass moved arc fractions by {shift:.3e}");
    let gap = again.images.iter().zip(&twice.images).map(|(x, y)| max_gap(x, y)).fold(0.0, f64::max);
    assert!(gap < 1e-2, "second pass moved images by {gap:.3e}");
}

#[test]
fn silent_unit_transfer_is_flat() {
    let base = OverlapState::global_minimum(3).embed(1, 1.0).unwrap();
    let chain = transfer_path(&base, 0, 3, 16).unwrap();
    let l0 = base.loss_unchecked(RELU);
    for s in &chain {
        assert!((s.loss_unchecked(RELU) - l0).abs() < 1e-12);
        assert!(s.is_realizable());
    }
}

#[test]
fn barriers_of_a_local_minimum_are_nonnegative() {
    let opts = SolverOptions::default();
    let rec = solve_family(1, 3, 0, None, RELU, &opts).unwrap();
    let rec = rec.record().expect("k1 = 1 family at K = M = 4");
    let s = rec.state();
    let res = connectivity_suite(&s, &[SwapKind::SameKind, SwapKind::AlignedVsAnti], &cfg(16, 2000), RELU, 0.05).unwrap();
    for r in &res {
        assert!(r.barrier >= -1e-12, "{} barrier {}", r.swap_kind, r.barrier);
        assert_eq!(r.path.images[0], s);
        assert!(r.path.losses.iter().all(|l| l.is_finite()));
    }
}

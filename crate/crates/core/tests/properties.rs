use std::collections::HashMap;

use committee::ansatz::{
    auto_guess, classify, expand, with_span_overlaps, AnsatzParams, FamilyLabel, Symbol,
};
use committee::dynamics::{rhs_gd, rhs_sgd, Optimizer, OptimizerKind};
use committee::kernels::{i2, i3, ActivationKind, Cov2, Cov3};
use committee::state::{random_init, InitNorm, InitOptions, OverlapState, TeacherConfig};
use nalgebra::DMatrix;
use proptest::prelude::*;

fn acts() -> impl Strategy<Value = ActivationKind> {
    prop_oneof![
        Just(ActivationKind::Relu),
        Just(ActivationKind::LeakyRelu { alpha: 0.2 }),
        Just(ActivationKind::Erf),
    ]
}

fn state(k: usize, m: usize, seed: u64, gaussian: bool) -> OverlapState {
    let teacher = if gaussian { TeacherConfig::Gaussian } else { TeacherConfig::Orthonormal };
    let opts = InitOptions { d_init: Some(30), norm: InitNorm::Free, teacher };
    random_init(k, m, &opts, seed).unwrap()
}

fn shuffled(n: usize, seed: u64) -> Vec<usize> {
    let mut perm: Vec<usize> = (0..n).collect();
    let mut x = seed.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
    for i in (1..n).rev() {
        x = x.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
        perm.swap(i, (x >> 33) as usize % (i + 1));
    }
    perm
}

fn permute_teachers(s: &OverlapState, perm: &[usize]) -> OverlapState {
    let m = s.m;
    let mut out = s.clone();
    out.r = DMatrix::from_fn(s.k, m, |i, n| s.r[(i, perm[n])]);
    out.t = DMatrix::from_fn(m, m, |a, b| s.t[(perm[a], perm[b])]);
    out.v_star = nalgebra::DVector::from_fn(m, |n, _| s.v_star[perm[n]]);
    out
}

/// Random realizable ansatz point near the default guess of the family.
fn params(k1: usize, k2: usize, extra: usize, jitter: &[f64]) -> AnsatzParams {
    let mut p = auto_guess(k1, k2, extra);
    let r_syms = [Symbol::SigmaR, Symbol::S, Symbol::Phi, Symbol::B, Symbol::Tau, Symbol::F, Symbol::Iota, Symbol::Kappa];
    for (sym, dx) in r_syms.into_iter().zip(jitter) {
        p.set(sym, p.get(sym) + dx);
    }
    let mut p = with_span_overlaps(&p);
    p.q += 0.2;
    p.p += 0.1;
    p.omega += 0.15;
    p
}

#[derive(Clone, Copy, PartialEq, Eq, Hash, Debug)]
enum Role {
    Extra,
    Anti(usize),
    Aligned(usize),
}

fn unit_role(i: usize, k1: usize, extra: usize) -> Role {
    if i < extra {
        Role::Extra
    } else if i < extra + k1 {
        Role::Anti(i - extra)
    } else {
        Role::Aligned(i - extra - k1)
    }
}

fn teacher_role(n: usize, k1: usize) -> Role {
    if n < k1 { Role::Anti(n) } else { Role::Aligned(n - k1) }
}

fn kind(r: Role) -> u8 {
    match r {
        Role::Extra => 0,
        Role::Anti(_) => 1,
        Role::Aligned(_) => 2,
    }
}

fn same(a: Role, b: Role) -> bool {
    a != Role::Extra && a == b
}

/// Largest spread of the entries of `x` within one class of `class`.
fn spread<F: Fn(usize, usize) -> (u8, u8, bool)>(x: &DMatrix<f64>, class: F) -> f64 {
    let mut groups: HashMap<(u8, u8, bool), (f64, f64)> = HashMap::new();
    for i in 0..x.nrows() {
        for j in 0..x.ncols() {
            let e = groups.entry(class(i, j)).or_insert((f64::INFINITY, f64::NEG_INFINITY));
            e.0 = e.0.min(x[(i, j)]);
            e.1 = e.1.max(x[(i, j)]);
        }
    }
    groups.values().map(|(lo, hi)| hi - lo).fold(0.0, f64::max)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn relu_integrals_scale_linearly(a in 0.1f64..3.0, seed in 0u64..1000) {
        let c = committee::harness::random_covariance(seed);
        let c3 = |f: f64| Cov3 {
            c00: f * c[(0, 0)], c11: f * c[(1, 1)], c22: f * c[(2, 2)],
            c01: f * c[(0, 1)], c02: f * c[(0, 2)], c12: f * c[(1, 2)],
        };
        let c2 = |f: f64| Cov2::new(f * c[(0, 0)], f * c[(1, 1)], f * c[(0, 1)]);
        let act = ActivationKind::Relu;
        let (x, y) = (i2(act, c2(1.0)).unwrap(), i2(act, c2(a)).unwrap());
        prop_assert!((y - a * x).abs() <= 1e-12 * (1.0 + y.abs()));
        let (x, y) = (i3(act, c3(1.0)).unwrap(), i3(act, c3(a)).unwrap());
        prop_assert!((y - a * x).abs() <= 1e-12 * (1.0 + y.abs()));
    }

    #[test]
    fn i2_symmetric_in_its_arguments(act in acts(), seed in 0u64..1000) {
        let c = committee::harness::random_covariance(seed);
        let x = i2(act, Cov2::new(c[(0, 0)], c[(1, 1)], c[(0, 1)])).unwrap();
        let y = i2(act, Cov2::new(c[(1, 1)], c[(0, 0)], c[(0, 1)])).unwrap();
        prop_assert!((x - y).abs() <= 1e-13 * (1.0 + x.abs()));
    }

    #[test]
    fn loss_is_nonnegative(act in acts(), k in 1usize..7, m in 1usize..7, seed in 0u64..10_000, g in any::<bool>()) {
        let s = state(k, m, seed, g);
        prop_assert!(s.population_loss(act).unwrap() >= -1e-12);
    }

    #[test]
    fn dq_is_symmetric(act in acts(), k in 1usize..7, m in 1usize..7, seed in 0u64..10_000) {
        let s = state(k, m, seed, true);
        let d = rhs_gd(&s, act, true).unwrap();
        prop_assert_eq!(&d.dq, &d.dq.transpose());
    }

    #[test]
    fn rhs_commutes_with_relabelling(act in acts(), k in 2usize..7, m in 2usize..7, seed in 0u64..10_000) {
        let s = state(k, m, seed, true);
        let pu = shuffled(k, seed);
        let pt = shuffled(m, seed ^ 0xabcdef);
        let moved = permute_teachers(&s.permute_units(&pu).unwrap(), &pt);
        let d = rhs_gd(&s, act, true).unwrap();
        let dm = rhs_gd(&moved, act, true).unwrap();
        for i in 0..k {
            prop_assert!((dm.dv[i] - d.dv[pu[i]]).abs() < 1e-12);
            for j in 0..k {
                prop_assert!((dm.dq[(i, j)] - d.dq[(pu[i], pu[j])]).abs() < 1e-12);
            }
            for n in 0..m {
                prop_assert!((dm.dr[(i, n)] - d.dr[(pu[i], pt[n])]).abs() < 1e-12);
            }
        }
        let l0 = s.population_loss(act).unwrap();
        prop_assert!((moved.population_loss(act).unwrap() - l0).abs() < 1e-12);
    }

    #[test]
    fn sgd_without_second_order_is_gd(act in acts(), k in 1usize..6, m in 1usize..6, seed in 0u64..10_000, eta in 0.01f64..2.0) {
        let s = state(k, m, seed, false);
        let a = rhs_sgd(&s, act, &OptimizerKind::new(Optimizer::Sgd, eta)).unwrap();
        let b = rhs_gd(&s, act, false).unwrap();
        prop_assert_eq!(a.dr, b.dr);
        prop_assert_eq!(a.dq, b.dq);
    }

    #[test]
    fn ansatz_manifold_is_invariant(
        k1 in 0usize..4,
        k2 in 2usize..4,
        extra in 0usize..3,
        jitter in proptest::collection::vec(-0.05f64..0.05, 8),
        act in acts(),
    ) {
        let p = params(k1, k2, extra, &jitter);
        let s = expand(&p).unwrap();
        let d = rhs_gd(&s, act, false).unwrap();
        let r_spread = spread(&d.dr, |i, n| {
            let (a, b) = (unit_role(i, k1, extra), teacher_role(n, k1));
            (kind(a), kind(b), same(a, b))
        });
        let q_spread = spread(&d.dq, |i, j| {
            let (a, b) = (unit_role(i, k1, extra), unit_role(j, k1, extra));
            (kind(a), kind(b), i == j)
        });
        prop_assert!(r_spread < 1e-12, "dR spread {}", r_spread);
        prop_assert!(q_spread < 1e-12, "dQ spread {}", q_spread);
    }

    #[test]
    fn classification_recovers_shuffled_family(
        k1 in 0usize..4,
        k2 in 1usize..4,
        extra in 0usize..2,
        jitter in proptest::collection::vec(-0.03f64..0.03, 8),
        seed in 0u64..10_000,
    ) {
        let p = params(k1, k2, extra, &jitter);
        let s = expand(&p).unwrap();
        let moved = permute_teachers(&s.permute_units(&shuffled(s.k, seed)).unwrap(), &shuffled(s.m, !seed));
        let c = classify(&moved, 0.05);
        prop_assert_eq!((c.k1, c.k2, c.extra), (k1, k2, extra));
        prop_assert!(c.block_residual < 1e-12);
        let want = if k1 == 0 { FamilyLabel::Global } else { FamilyLabel::Local(k1) };
        prop_assert_eq!(c.family, want);
        prop_assert_eq!(classify(&s, 0.05).family, c.family);
    }
}

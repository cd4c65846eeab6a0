use committee::ansatz::{expand, reduced_residuals, with_span_overlaps, AnsatzParams, Symbol};
use committee::dynamics::rhs_gd;
use committee::kernels::{i2, i3, ActivationKind, Cov2, Cov3};
use committee::state::{random_init, InitNorm, InitOptions, OverlapState, TeacherConfig};
use nalgebra::{DMatrix, DVector};
use std::f64::consts::PI;

/// Field covariances of the stacked vector (λ_1..λ_K, ρ_1..ρ_M).
fn field_cov(s: &OverlapState) -> DMatrix<f64> {
    let (k, m) = (s.k, s.m);
    DMatrix::from_fn(k + m, k + m, |a, b| match (a < k, b < k) {
        (true, true) => s.q[(a, b)],
        (true, false) => s.r[(a, b - k)],
        (false, true) => s.r[(b, a - k)],
        (false, false) => s.t[(a - k, b - k)],
    })
}

/// `I3(a, b, c)` with `x0, x1, x2` the fields with stacked indices `a, b, c`.
fn i3_slots(act: ActivationKind, c: &DMatrix<f64>, a: usize, b: usize, d: usize) -> f64 {
    i3(
        act,
        Cov3 { c00: c[(a, a)], c11: c[(b, b)], c22: c[(d, d)], c01: c[(a, b)], c02: c[(a, d)], c12: c[(b, d)] },
    )
    .unwrap()
}

/// Direct double sums of the flow equations, one Gaussian integral per term.
fn naive_rhs(s: &OverlapState, act: ActivationKind) -> (DMatrix<f64>, DMatrix<f64>, DVector<f64>) {
    let (k, m) = (s.k, s.m);
    let c = field_cov(s);
    let bracket = |i: usize, x: usize| -> f64 {
        let teacher: f64 = (0..m).map(|n| s.v_star[n] * i3_slots(act, &c, i, x, k + n)).sum();
        let student: f64 = (0..k).map(|j| s.v[j] * i3_slots(act, &c, i, x, j)).sum();
        s.v[i] * (teacher - student)
    };
    let dr = DMatrix::from_fn(k, m, |i, n| bracket(i, k + n));
    let dq = DMatrix::from_fn(k, k, |i, l| bracket(i, l) + bracket(l, i));
    let dv = DVector::from_fn(k, |i, _| {
        let t: f64 = (0..m).map(|n| s.v_star[n] * i2(act, Cov2::new(c[(i, i)], c[(k + n, k + n)], c[(i, k + n)])).unwrap()).sum();
        let st: f64 = (0..k).map(|j| s.v[j] * i2(act, Cov2::new(c[(i, i)], c[(j, j)], c[(i, j)])).unwrap()).sum();
        t - st
    });
    (dr, dq, dv)
}

fn random_state(k: usize, m: usize, seed: u64) -> OverlapState {
    let opts = InitOptions { d_init: Some(40), norm: InitNorm::Free, teacher: TeacherConfig::Gaussian };
    let mut s = random_init(k, m, &opts, seed).unwrap();
    for i in 0..k {
        s.v[i] = 0.5 + 0.13 * ((seed as usize + 3 * i) % 7) as f64;
    }
    for n in 0..m {
        s.v_star[n] = 1.2 - 0.1 * n as f64;
    }
    s
}

#[test]
fn rhs_matches_direct_sums() {
    let acts = [ActivationKind::Relu, ActivationKind::LeakyRelu { alpha: 0.1 }, ActivationKind::Erf];
    for (seed, (k, m)) in [(3usize, 2usize), (4, 4), (5, 3), (2, 5)].into_iter().enumerate() {
        let s = random_state(k, m, seed as u64);
        for act in acts {
            let fast = rhs_gd(&s, act, true).unwrap();
            let (dr, dq, dv) = naive_rhs(&s, act);
            let err = (&fast.dr - &dr).abs().max().max((&fast.dq - &dq).abs().max()).max((&fast.dv - &dv).abs().max());
            assert!(err < 1e-12, "{act} K={k} M={m}: deviation {err:.3e}");
        }
    }
}

#[test]
fn first_layer_flow_leaves_readout_alone() {
    let s = random_state(3, 3, 9);
    assert_eq!(rhs_gd(&s, ActivationKind::Relu, false).unwrap().dv, DVector::zeros(3));
}

/// First fixed-point equation of the K = M ansatz, transcribed term by term.
#[allow(clippy::too_many_arguments)]
fn e_sigma(k1: f64, k2: f64, sg: f64, s: f64, phi: f64, q: f64, e: f64, f: f64, p: f64, u: f64) -> f64 {
    let acos = f64::acos;
    -1.0 / (2.0 * PI * q)
        * (k1 * sg * (q * q - e * e).sqrt() - sg * (q * q - e * e).sqrt()
            + (k1 - 1.0) * q * s * acos(-e / (q * q).sqrt())
            + f * k2 * q * acos(-u / (p * q).sqrt())
            - k1 * sg * (q - s * s).sqrt()
            + k2 * sg * (p * q - u * u).sqrt()
            - k2 * sg * (q - phi * phi).sqrt()
            + q * sg * acos(-q / (q * q).sqrt())
            + sg * (q - s * s).sqrt()
            - sg * (q - sg * sg).sqrt()
            - q * acos(-sg / q.sqrt()))
}

#[test]
fn transcribed_sigma_equation_matches_block_read() {
    let mut p = AnsatzParams::zeros(2, 3, 0);
    let vals = [
        (Symbol::SigmaR, -0.31),
        (Symbol::S, 0.07),
        (Symbol::Phi, 0.11),
        (Symbol::Q, 0.42),
        (Symbol::E, 0.05),
        (Symbol::B, 0.93),
        (Symbol::Tau, -0.04),
        (Symbol::F, 0.17),
        (Symbol::P, 0.97),
        (Symbol::Mu, 0.02),
        (Symbol::U, -0.06),
    ];
    for (sym, x) in vals {
        p.set(sym, x);
    }
    // Q from the span of R plus some diagonal slack keeps the point realizable.
    let mut p = with_span_overlaps(&p);
    p.q += 0.1;
    p.p += 0.05;
    expand(&p).expect("test point is realizable");
    let res = reduced_residuals(&p, ActivationKind::Relu).unwrap();
    let idx = p.active_symbols().iter().position(|&s| s == Symbol::SigmaR).unwrap();
    let want = e_sigma(2.0, 3.0, p.sigma_r, p.s, p.phi, p.q, p.e, p.f, p.p, p.u);
    assert!((res[idx] - want).abs() < 1e-9, "block read {} vs transcription {want}", res[idx]);
}

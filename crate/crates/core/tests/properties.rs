//! Randomized invariants of the process, the kernels, the reweighting and the container.

use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use sdkrylov::covariance::{cubic_spherical_kernel, matern_kernel};
use sdkrylov::fggk::{qr_update, FggkOps, FggkOptions, FggkState, OpCounts, StepOutcome};
use sdkrylov::linalg::rel_frobenius;
use sdkrylov::mm::{mm_solve, MmProblem};
use sdkrylov::operators::{diag_map, DenseMap, DenseSpd, DiagSpd, SpdMap};
use sdkrylov::problems::{generate, read_container, write_container, ProblemKind, ProblemSpec};
use sdkrylov::solvers::{weight_matrix, InverseProblem};

fn config(cases: u32) -> ProptestConfig {
    ProptestConfig {
        cases,
        ..ProptestConfig::default()
    }
}

fn random_matrix(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
    DMatrix::from_fn(rows, cols, |_, _| StandardNormal.sample(rng))
}

fn random_diag(n: usize, rng: &mut ChaCha8Rng) -> DiagSpd {
    diag_map(DVector::from_fn(n, |_, _| rng.random_range(0.5..2.0))).unwrap()
}

struct Instance {
    a: DenseMap,
    q: DenseSpd,
    r: DiagSpd,
    rinv: DiagSpd,
    c: DVector<f64>,
}

impl Instance {
    fn random(m: usize, n: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = DenseMap::new(random_matrix(m, n, &mut rng));
        let b = random_matrix(n, n, &mut rng);
        let q = DenseSpd::new(&b * b.transpose() / n as f64 + DMatrix::identity(n, n)).unwrap();
        let r = random_diag(m, &mut rng);
        let rinv = r.inverse();
        let c = DVector::from_fn(m, |_, _| StandardNormal.sample(&mut rng));
        Self { a, q, r, rinv, c }
    }

    fn ops(&self) -> FggkOps<'_> {
        FggkOps {
            a: &self.a,
            rinv: &self.rinv,
            q: &self.q,
        }
    }
}

proptest! {
    #![proptest_config(config(24))]

    #[test]
    fn process_relations_and_orthogonality(seed in 0u64..10_000, m in 8usize..30, n in 4usize..20, k in 1usize..10) {
        prop_assume!(k < n);
        let inst = Instance::random(m, n, seed);
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
        let mut s = FggkState::init(inst.ops(), &inst.c, FggkOptions::default()).unwrap();
        for _ in 0..k {
            if s.step(inst.ops(), &random_diag(n, &mut rng)).unwrap() == StepOutcome::Breakdown {
                break;
            }
        }
        prop_assume!(!s.is_broken_down() && !s.rank_deficient());
        let rinv = DMatrix::from_diagonal(inst.rinv.values());
        let lhs = inst.a.matrix() * (inst.q.matrix() * s.v_k() + s.w_matrix());
        prop_assert!(rel_frobenius(&lhs, &(s.u_matrix() * s.m_matrix())) <= 1e-10);

        let u = s.u_matrix();
        let eu = (u.transpose() * &rinv * &u - DMatrix::identity(u.ncols(), u.ncols())).norm();
        prop_assert!(eu <= 1e-10, "U orthogonality loss {eu:e}");
        let v = s.v_k();
        let ev = (v.transpose() * inst.q.matrix() * &v - DMatrix::identity(v.ncols(), v.ncols())).norm();
        prop_assert!(ev <= 1e-10, "V orthogonality loss {ev:e}");

        s.extend_v(inst.ops()).unwrap();
        let lhs = inst.a.matrix().transpose() * &rinv * s.u_matrix();
        prop_assert!(rel_frobenius(&lhs, &(s.v_matrix() * s.t_matrix())) <= 1e-10);
    }

    #[test]
    fn step_costs_follow_the_budget(seed in 0u64..10_000, k in 1usize..12) {
        let inst = Instance::random(30, 20, seed);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut s = FggkState::init(inst.ops(), &inst.c, FggkOptions::default()).unwrap();
        let base = s.counts();
        for _ in 0..k {
            s.step(inst.ops(), &random_diag(20, &mut rng)).unwrap();
        }
        let c = s.counts();
        let delta = OpCounts {
            a_forward: c.a_forward - base.a_forward,
            a_adjoint: c.a_adjoint - base.a_adjoint,
            q: c.q - base.q,
            rinv: c.rinv - base.rinv,
            dinv: c.dinv - base.dinv,
        };
        prop_assert_eq!(delta, OpCounts { a_forward: k, a_adjoint: k, q: 2 * k, rinv: k, dinv: k });
    }

    #[test]
    fn qr_update_matches_full_factorization(seed in 0u64..10_000, rows in 4usize..30, cols in 1usize..6) {
        prop_assume!(cols <= rows);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let w = random_matrix(rows, cols, &mut rng);
        let mut q = DMatrix::zeros(rows, 0);
        let mut r = DMatrix::zeros(0, 0);
        for j in 0..cols {
            let up = qr_update(&q, &r, &w.column(j).into_owned()).unwrap();
            prop_assert!(!up.rank_deficient);
            q = up.q;
            r = up.r;
        }
        prop_assert!(rel_frobenius(&(&q * &r), &w) <= 1e-12);
        prop_assert!((q.transpose() * &q - DMatrix::identity(cols, cols)).norm() <= 1e-12);
        for i in 0..cols {
            prop_assert!(r[(i, i)] > 0.0);
            for j in 0..i {
                prop_assert_eq!(r[(i, j)], 0.0);
            }
        }
        let full = w.clone().qr();
        let rf = full.r();
        for i in 0..cols {
            prop_assert!((rf[(i, i)].abs() - r[(i, i)]).abs() <= 1e-10 * r[(i, i)].max(1.0));
        }
    }
}

proptest! {
    #![proptest_config(config(256))]

    #[test]
    fn weights_are_positive_and_decrease_with_magnitude(a in -1e3f64..1e3, b in -1e3f64..1e3, eps in 1e-10f64..1.0) {
        let d = weight_matrix(&DVector::from_vec(vec![a, b]), eps).unwrap();
        let v = d.values();
        prop_assert!(v[0] > 0.0 && v[1] > 0.0 && v.iter().all(|x| x.is_finite()));
        if a.abs() < b.abs() {
            prop_assert!(v[0] >= v[1]);
        } else if a.abs() > b.abs() {
            prop_assert!(v[0] <= v[1]);
        }
    }

    #[test]
    fn matern_is_a_decreasing_correlation(d1 in 0.0f64..5.0, d2 in 0.0f64..5.0, nu in prop::sample::select(vec![0.5, 1.5, 2.5, 0.2, 1.0, 3.7]), ell in 0.01f64..3.0) {
        let (lo, hi) = if d1 <= d2 { (d1, d2) } else { (d2, d1) };
        let kl = matern_kernel(lo, nu, ell).unwrap();
        let kh = matern_kernel(hi, nu, ell).unwrap();
        prop_assert!(kl > 0.0 || lo > 0.0);
        prop_assert!((0.0..=1.0).contains(&kl) && (0.0..=1.0).contains(&kh));
        prop_assert!(kh <= kl + 1e-12);
        prop_assert_eq!(matern_kernel(0.0, nu, ell).unwrap(), 1.0);
    }

    #[test]
    fn cubic_kernel_stays_in_unit_interval(d1 in 0.0f64..std::f64::consts::PI, d2 in 0.0f64..std::f64::consts::PI, theta in 0.01f64..3.0) {
        let (lo, hi) = if d1 <= d2 { (d1, d2) } else { (d2, d1) };
        let kl = cubic_spherical_kernel(lo, theta).unwrap();
        let kh = cubic_spherical_kernel(hi, theta).unwrap();
        prop_assert!((0.0..=1.0).contains(&kl) && (0.0..=1.0).contains(&kh));
        prop_assert!(kh <= kl + 1e-12);
    }
}

proptest! {
    #![proptest_config(config(16))]

    #[test]
    fn mm_descends_on_small_problems(seed in 0u64..10_000, n in 3usize..10, ll in -2.0f64..1.0, la in -2.0f64..1.0, le in -8.0f64..-2.0) {
        let inst = Instance::random(2 * n, n, seed);
        let p = InverseProblem::new(
            std::sync::Arc::new(inst.a.clone()),
            std::sync::Arc::new(inst.r.clone()),
            std::sync::Arc::new(inst.q.clone()),
            inst.c.clone(),
        )
        .unwrap();
        let mp = MmProblem::new(&p).unwrap();
        let its = mm_solve(&mp, 10f64.powf(ll), 10f64.powf(la), 10f64.powf(le), 20).unwrap();
        for w in its.windows(2) {
            prop_assert!(w[1].objective <= w[0].objective + 1e-12 * w[0].objective.abs(), "{:e} -> {:e}", w[0].objective, w[1].objective);
        }
    }

    #[test]
    fn container_round_trip(seed in 0u64..1_000, side in 4usize..12, spikes in 0usize..4) {
        let mut spec = ProblemSpec::new(ProblemKind::Custom);
        spec.side = side;
        spec.n_spikes = spikes.min(side);
        spec.seed = seed;
        let tp = generate(&spec).unwrap();
        let mut buf = Vec::new();
        write_container(&mut buf, &tp).unwrap();
        let back = read_container(&mut buf.as_slice()).unwrap();
        prop_assert_eq!(&back.s_true, &tp.s_true);
        prop_assert_eq!(&back.s1_true, &tp.s1_true);
        prop_assert_eq!(&back.s2_true, &tp.s2_true);
        prop_assert_eq!(&back.problem.d, &tp.problem.d);
        prop_assert_eq!(back.seed, tp.seed);
        prop_assert_eq!(back.descriptor.to_text(), tp.descriptor.to_text());
        let probe = DVector::from_fn(tp.problem.n(), |i, _| (i as f64).sin());
        prop_assert_eq!(back.problem.a.apply(&probe), tp.problem.a.apply(&probe));
        prop_assert_eq!(back.problem.q.apply(&probe), tp.problem.q.apply(&probe));
        let probe_m = DVector::from_fn(tp.problem.d.len(), |i, _| (i as f64).cos());
        prop_assert_eq!(back.problem.r.apply(&probe_m), tp.problem.r.apply(&probe_m));
    }
}

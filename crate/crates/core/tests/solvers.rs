use pfmg::fem::ConstraintMask;
use pfmg::krylov::{estimate_spectrum, gmres, DenseMatrix, Diagonal, FnOperator, Identity, LinearOperator, SolverControl};
use pfmg::mesh::{build_lshape, build_square, BoundaryId};
use pfmg::mgsolve::{
    build_level_contexts, chebyshev_apply, chebyshev_bound, ChebyshevMode, ChebyshevParams, LevelStack, MgParams,
    Multigrid, PreconditionerKind,
};
use pfmg::model::{LinearizationState, MaterialParams, SplitKind};
use pfmg::verify::assemble_jacobian;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Gaussian elimination with partial pivoting.
fn dense_solve(n: usize, a: &[f64], b: &[f64]) -> Vec<f64> {
    let mut m = a.to_vec();
    let mut x = b.to_vec();
    for k in 0..n {
        let p = (k..n).max_by(|&i, &j| m[i * n + k].abs().total_cmp(&m[j * n + k].abs())).unwrap();
        for j in 0..n {
            m.swap(k * n + j, p * n + j);
        }
        x.swap(k, p);
        for i in k + 1..n {
            let f = m[i * n + k] / m[k * n + k];
            for j in k..n {
                m[i * n + j] -= f * m[k * n + j];
            }
            x[i] -= f * x[k];
        }
    }
    for k in (0..n).rev() {
        let s: f64 = (k + 1..n).map(|j| m[k * n + j] * x[j]).sum();
        x[k] = (x[k] - s) / m[k * n + k];
    }
    x
}

fn laplace_1d(n: usize) -> DenseMatrix<f64> {
    let mut data = vec![0.0; n * n];
    for i in 0..n {
        data[i * n + i] = 2.0;
        if i > 0 {
            data[i * n + i - 1] = -1.0;
        }
        if i + 1 < n {
            data[i * n + i + 1] = -1.0;
        }
    }
    DenseMatrix { n, data }
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

#[test]
fn gmres_poisson_nine_dofs_matches_direct_solve() {
    // 5-point Laplacian on a 3x3 interior grid
    let n = 9;
    let mut data = vec![0.0; n * n];
    for i in 0..3 {
        for j in 0..3 {
            let r = 3 * i + j;
            data[r * n + r] = 4.0;
            if i > 0 {
                data[r * n + r - 3] = -1.0;
            }
            if i < 2 {
                data[r * n + r + 3] = -1.0;
            }
            if j > 0 {
                data[r * n + r - 1] = -1.0;
            }
            if j < 2 {
                data[r * n + r + 1] = -1.0;
            }
        }
    }
    let b: Vec<f64> = (0..n).map(|i| 1.0 + i as f64).collect();
    let exact = dense_solve(n, &data, &b);
    let a = DenseMatrix { n, data };
    let ctl = SolverControl { abs_tol: 1e-14, rel_tol: 1e-14, max_iters: 50, restart: 30 };
    let rep = gmres(&a, &Identity(n), &b, None, &ctl).unwrap();
    let err: Vec<f64> = rep.x.iter().zip(&exact).map(|(x, e)| x - e).collect();
    assert!(norm(&err) <= 1e-10 * norm(&exact));
    assert!(rep.iterations <= 9);
}

#[test]
fn gmres_rejects_mismatched_sizes() {
    let ctl = SolverControl::default();
    assert!(gmres(&Identity(3), &Identity(4), &[1.0, 2.0, 3.0], None, &ctl).is_err());
    let bad = SolverControl { restart: 0, ..ctl };
    assert!(gmres(&Identity(3), &Identity(3), &[1.0, 2.0, 3.0], None, &bad).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn gmres_solves_random_spd_systems(seed in any::<u64>(), n in 2usize..20) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let g: Vec<f64> = (0..n * n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let mut data = vec![0.0; n * n];
        for i in 0..n {
            for j in 0..n {
                data[i * n + j] = (0..n).map(|k| g[k * n + i] * g[k * n + j]).sum::<f64>();
            }
            data[i * n + i] += 1.0;
        }
        let b: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let exact = dense_solve(n, &data, &b);
        let a = DenseMatrix { n, data };
        let ctl = SolverControl { abs_tol: 1e-13, rel_tol: 1e-13, max_iters: 200, restart: 5 };
        let rep = gmres(&a, &Diagonal(vec![1.0; n]), &b, None, &ctl).unwrap();
        let err: Vec<f64> = rep.x.iter().zip(&exact).map(|(x, e)| x - e).collect();
        prop_assert!(norm(&err) <= 1e-8 * norm(&exact).max(1e-12));
        prop_assert!(rep.residual <= 1e-12 * norm(&b).max(1.0));
    }

    #[test]
    fn spectrum_estimate_is_inside_true_range(seed in any::<u64>(), n in 5usize..40) {
        let a = laplace_1d(n);
        let diag = vec![2.0; n];
        let est = estimate_spectrum(&a, &diag, 10, seed, None).unwrap();
        let pi = std::f64::consts::PI;
        let (lo, hi) = (1.0 - (pi / (n + 1) as f64).cos(), 1.0 + (pi / (n + 1) as f64).cos());
        // Ritz values lie inside the spectrum
        prop_assert!(est.lambda_min >= lo - 1e-10 && est.lambda_max <= hi + 1e-10);
    }

    #[test]
    fn chebyshev_respects_minmax_bound(degree in 1usize..8, seed in any::<u64>()) {
        let n = 31;
        let a = laplace_1d(n);
        let diag = vec![2.0; n];
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let b_hi: f64 = 1.2 * (1.0 + (std::f64::consts::PI / 32.0).cos());
        let params = ChebyshevParams { degree, a: b_hi / rng.gen_range(2.0..10.0), b: b_hi, mode: ChebyshevMode::Smoother };
        let theta = 0.5 * (params.a + params.b);
        let delta = 0.5 * (params.b - params.a);
        let t = |x: f64| -> f64 {
            if x.abs() <= 1.0 { (degree as f64 * x.acos()).cos() } else { x.signum().powi(degree as i32) * (degree as f64 * x.abs().acosh()).cosh() }
        };
        let skip = vec![false; n];
        for k in 1..=n {
            let lam = 1.0 - (k as f64 * std::f64::consts::PI / 32.0).cos();
            let v: Vec<f64> = (1..=n).map(|i| (i as f64 * k as f64 * std::f64::consts::PI / 32.0).sin()).collect();
            let mut x = v.clone();
            chebyshev_apply(&a, &diag, &params, &skip, &mut x, &vec![0.0; n], false);
            let factor = t((theta - lam) / delta) / t(theta / delta);
            let measured = x.iter().zip(&v).map(|(a, b)| a * b).sum::<f64>() / norm(&v).powi(2);
            prop_assert!((measured - factor).abs() < 1e-10);
            if lam >= params.a && lam <= params.b {
                prop_assert!(measured.abs() <= chebyshev_bound(theta / delta, degree) * (1.0 + 1e-10));
            }
        }
    }
}

#[test]
fn spectrum_of_1d_laplace_is_close_after_ten_steps() {
    let n = 33;
    let a = laplace_1d(n);
    let est = estimate_spectrum(&a, &vec![2.0; n], 10, 1, None).unwrap();
    let lmax = 1.0 + (std::f64::consts::PI / 34.0).cos();
    assert!(est.lambda_max >= 0.8 * lmax && est.lambda_max <= lmax + 1e-12, "{}", est.lambda_max);
}

#[test]
fn chebyshev_solver_bound_tracks_measured_reduction() {
    let n = 10;
    let d: Vec<f64> = (1..=n).map(|i| i as f64).collect();
    let a = Diagonal(d.clone());
    let est = estimate_spectrum(&a, &vec![1.0; n], 10, 3, None).unwrap();
    for tol in [1e-1, 1e-2, 1e-3] {
        let params = ChebyshevParams::solver(&est, tol, 50);
        let sigma = ((params.b + params.a) / (params.b - params.a)) as f64;
        let bound = chebyshev_bound(sigma, params.degree);
        // error e = 1 in every eigencomponent; solve A x = A 1 from x = 0
        let b = d.clone();
        let mut x = vec![0.0; n];
        chebyshev_apply(&a, &vec![1.0; n], &params, &vec![false; n], &mut x, &b, true);
        let measured = x.iter().map(|xi| (1.0 - xi).abs()).fold(0.0, f64::max);
        assert!(measured <= bound * (1.0 + 1e-10) && measured >= 0.5 * bound, "tol {tol}: {measured} vs {bound}");
    }
}

fn elasticity_setup(
    levels: usize,
) -> (pfmg::mesh::GridHierarchy<f64>, MaterialParams<f64>) {
    let h = build_lshape(500.0, levels, None).unwrap();
    let params = MaterialParams::new(10.95, 6.16, 2.7e-3, 1e-10, 44.0);
    (h, params)
}

fn intact_state(map: &pfmg::fem::DofMap) -> LinearizationState<f64> {
    let mut u = vec![0.0; map.n_dofs()];
    for i in map.phi_range() {
        u[i] = 1.0;
    }
    LinearizationState::frozen(map, u, 0.0)
}

fn fixed_mask(stack: &LevelStack<'_, f64>) -> Vec<bool> {
    let sp = stack.finest();
    let mut flags = vec![false; sp.n_dofs()];
    for v in sp.mesh.boundary_vertices(BoundaryId::Fixed) {
        for c in 0..2 {
            flags[sp.map.index(v, c)] = true;
        }
    }
    flags
}

#[test]
fn vcycle_of_zero_is_zero() {
    let (h, params) = elasticity_setup(3);
    let stack = LevelStack::new(&h, &params);
    let map = &stack.finest().map;
    let st = intact_state(map);
    let dir = fixed_mask(&stack);
    for kind in [PreconditionerKind::Full, PreconditionerKind::BlockDiag] {
        let mg = Multigrid::new(&stack, &st, &vec![false; map.n_dofs()], &dir, &params, SplitKind::NoSplit, kind, MgParams::default()).unwrap();
        assert!(mg.vcycle(&vec![0.0; map.n_dofs()]).iter().all(|&x| x == 0.0));
    }
}

#[test]
fn single_level_cycle_is_coarse_solve() {
    let (h, params) = elasticity_setup(1);
    let stack = LevelStack::new(&h, &params);
    let map = &stack.finest().map;
    let st = intact_state(map);
    let dir = fixed_mask(&stack);
    let mg = Multigrid::new(&stack, &st, &vec![false; map.n_dofs()], &dir, &params, SplitKind::NoSplit, PreconditionerKind::Full, MgParams::default()).unwrap();
    let r: Vec<f64> = (0..map.n_dofs()).map(|i| (i as f64).sin()).collect();
    assert_eq!(mg.vcycle(&r), mg.coarse_solve(&r));
}

#[test]
fn coarse_solve_on_three_cell_lshape_is_accurate() {
    // phase-field block only: G_c eps (grad, grad) + G_c / eps (., .), a reaction-diffusion Poisson problem
    let (h, mut params) = elasticity_setup(1);
    params.eps = 500.0;
    let stack = LevelStack::new(&h, &params);
    let space = stack.finest();
    let map = &space.map;
    let n = map.n_dofs();
    let st = intact_state(map);
    let dir = fixed_mask(&stack);
    let mg = Multigrid::new(&stack, &st, &vec![false; n], &dir, &params, SplitKind::NoSplit, PreconditionerKind::Full, MgParams::default()).unwrap();
    let mut mask = ConstraintMask::none(n);
    for (i, &d) in dir.iter().enumerate() {
        if d {
            mask.constrain(i, 0.0);
        }
    }
    let a = assemble_jacobian(space, &st, &mask, &params, SplitKind::NoSplit);
    let dense: Vec<f64> = (0..n * n).map(|k| a.get(k / n, k % n)).collect();
    let mut r: Vec<f64> = (0..n).map(|i| if map.is_phi(i) { 1.0 + (i % 5) as f64 } else { 0.0 }).collect();
    mask.zero_constrained(&mut r);
    let exact = dense_solve(n, &dense, &r);
    let x = mg.coarse_solve(&r);
    let err: Vec<f64> = x.iter().zip(&exact).map(|(a, b)| a - b).collect();
    assert!(norm(&err) <= 1e-2 * norm(&exact), "{}", norm(&err) / norm(&exact));
}

#[test]
fn multigrid_preconditioned_gmres_converges() {
    let (h, params) = elasticity_setup(4);
    let stack = LevelStack::new(&h, &params);
    let map = &stack.finest().map;
    let n = map.n_dofs();
    let st = intact_state(map);
    let dir = fixed_mask(&stack);
    for kind in [PreconditionerKind::Full, PreconditionerKind::BlockDiag] {
        let mg = Multigrid::new(&stack, &st, &vec![false; n], &dir, &params, SplitKind::NoSplit, kind, MgParams::default()).unwrap();
        let op = mg.fine_operator();
        let a = FnOperator { n, f: |s: &[f64], d: &mut [f64]| op.vmult(s, d) };
        let mut b: Vec<f64> = vec![1.0; n];
        op.mask().zero_constrained(&mut b);
        let ctl = SolverControl { abs_tol: 1e-12, rel_tol: 1e-8, max_iters: 200, restart: 50 };
        let rep = gmres(&a, &mg, &b, None, &ctl).unwrap();
        assert!(rep.iterations < 40, "{kind:?}: {}", rep.iterations);
        let mut ax = vec![0.0; n];
        a.apply(&rep.x, &mut ax);
        let res: Vec<f64> = ax.iter().zip(&b).map(|(x, y)| x - y).collect();
        assert!(norm(&res) <= 1e-8 * norm(&b) * 1.01);
    }
}

#[test]
fn coarse_active_sets_follow_injection() {
    let h = build_square(1.0, 4).unwrap();
    let params = MaterialParams::new(1.0, 1.0, 1.0, 1e-10, 0.1);
    let stack = LevelStack::new(&h, &params);
    let fine = stack.finest();
    let n = fine.n_dofs();
    let st = intact_state(&fine.map);
    let none = vec![false; n];
    let ctx = build_level_contexts(&stack, &st, &none, &none, &params, SplitKind::NoSplit, &MgParams::default()).unwrap();
    assert!(ctx.iter().all(|c| c.active.iter().all(|&a| !a)));

    let all_phi: Vec<bool> = (0..n).map(|i| fine.map.is_phi(i)).collect();
    let ctx = build_level_contexts(&stack, &st, &all_phi, &none, &params, SplitKind::NoSplit, &MgParams::default()).unwrap();
    for (l, c) in ctx.iter().enumerate() {
        let map = &stack.spaces[l].map;
        assert!((0..map.n_dofs()).all(|i| c.active[i] == map.is_phi(i)));
    }

    // the centre vertex exists from level 1 on; an off-lattice vertex only on the finest
    for (lat, first) in [([4i64, 4, 0], 1usize), ([1, 3, 0], 3)] {
        let v = fine.mesh.vertex_at_lattice(&lat).unwrap();
        let mut one = vec![false; n];
        one[fine.map.phi_index(v)] = true;
        let ctx = build_level_contexts(&stack, &st, &one, &none, &params, SplitKind::NoSplit, &MgParams::default()).unwrap();
        for (l, c) in ctx.iter().enumerate() {
            let count = c.active.iter().filter(|&&a| a).count();
            assert_eq!(count, usize::from(l >= first), "lattice {lat:?} level {l}");
            if l >= first {
                let m = &stack.spaces[l];
                let scale = 1i64 << (3 - l);
                let cv = m.mesh.vertex_at_lattice(&[lat[0] / scale, lat[1] / scale, 0]).unwrap();
                assert!(c.active[m.map.phi_index(cv)]);
            }
        }
    }
}

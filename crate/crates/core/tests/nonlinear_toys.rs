use pfmg::fem::{ConstraintMask, DofMap};
use pfmg::krylov::SolverControl;
use pfmg::mesh::{build_lshape, build_square, BoundaryId};
use pfmg::mgsolve::LevelStack;
use pfmg::model::{MaterialParams, SplitKind};
use pfmg::nonlinear::{compute_active_set, lumped_mass_inverse, solve_step, SolverSettings, StepInput};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn tight() -> SolverSettings {
    SolverSettings {
        linear: SolverControl { abs_tol: 1e-14, rel_tol: 1e-12, max_iters: 500, restart: 50 },
        ..SolverSettings::default()
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn active_set_matches_brute_force(seed in any::<u64>(), c in 1.0f64..200.0) {
        let h = build_square(2.0, 2).unwrap();
        let m = h.finest();
        let map = DofMap::new(1, m);
        assert_eq!(map.phi_range().len(), 9);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = map.n_dofs();
        let r: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let u: Vec<f64> = (0..n).map(|_| rng.gen_range(0.0..1.0)).collect();
        let old: Vec<f64> = (0..n).map(|_| rng.gen_range(0.0..1.0)).collect();
        let inv = lumped_mass_inverse(m, &map).unwrap();
        let got = compute_active_set(&r, &u, &old, &inv, &map, c);
        // lumped masses: 1/4 at corners, 1/2 on edges, 1 in the centre
        for v in 0..m.n_vertices() {
            let lat = m.vertex_lattice(v);
            let on_edge = |x: i64| x == 0 || x == 2;
            let mass = match (on_edge(lat[0]), on_edge(lat[1])) {
                (true, true) => 0.25,
                (false, false) => 1.0,
                _ => 0.5,
            };
            let i = map.phi_index(v);
            let expect = r[i] / mass + c * (u[i] - old[i]) > 0.0;
            prop_assert_eq!(got[i], expect);
        }
        prop_assert!(map.u_range().all(|i| !got[i]));
    }
}

#[test]
fn frozen_phase_field_elasticity_needs_one_correction() {
    let h = build_lshape(500.0, 3, None).unwrap();
    let params = MaterialParams::new(10.95, 6.16, 2.7e-3, 1e-10, 20.0);
    let stack = LevelStack::new(&h, &params);
    let sp = stack.finest();
    let map = &sp.map;
    let n = map.n_dofs();
    let mut dir = ConstraintMask::none(n);
    for v in sp.mesh.boundary_vertices(BoundaryId::Fixed) {
        dir.constrain(map.index(v, 0), 0.0);
        dir.constrain(map.index(v, 1), 0.0);
    }
    for v in sp.mesh.boundary_vertices(BoundaryId::Loaded) {
        dir.constrain(map.index(v, 1), 1e-3);
    }
    // phi may not exceed 0.999, and the guess phi = 1 sits above it: every
    // phase-field DoF is active and pinned, so the step is linear elasticity
    let mut old = vec![0.0f64; n];
    let mut guess = vec![0.0; n];
    for i in map.phi_range() {
        old[i] = 0.999;
        guess[i] = 1.0;
    }
    let settings = tight();
    let input = StepInput {
        initial_guess: &guess,
        u_prev1: &old,
        u_prev2: &old,
        t: 1.0,
        t_prev1: 0.0,
        t_prev2: 0.0,
        dirichlet: &dir,
        previous_active: None,
    };
    let out = solve_step(&stack, &input, &params, SplitKind::NoSplit, &settings).unwrap();
    let recs = &out.report.records;
    assert_eq!(recs.len(), 2, "{recs:?}");
    assert!(recs[0].changed && !recs[1].changed);
    assert!(recs[1].residual <= settings.active_set.eps_as);
    assert!(map.phi_range().all(|i| out.active[i] && out.u[i] == 0.999));
    assert!(map.u_range().any(|i| out.u[i].abs() > 1e-5));

    // restarting from the converged state with the same set takes one iteration
    let again = StepInput {
        initial_guess: &out.u,
        previous_active: Some(&out.active),
        ..input
    };
    let out2 = solve_step(&stack, &again, &params, SplitKind::NoSplit, &settings).unwrap();
    assert_eq!(out2.report.iterations(), 1);
    let shift = out2.u.iter().zip(&out.u).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    assert!(shift < 1e-9, "{shift}");
}

/// Q1 mass and stiffness on the unit square, lexicographic corners.
fn unit_cell_matrices() -> ([[f64; 4]; 4], [[f64; 4]; 4]) {
    let mut m = [[0.0; 4]; 4];
    let mut k = [[0.0; 4]; 4];
    for i in 0..4 {
        for j in 0..4 {
            let same_x = (i & 1) == (j & 1);
            let same_y = (i >> 1) == (j >> 1);
            let m1 = |s: bool| if s { 1.0 / 3.0 } else { 1.0 / 6.0 };
            let k1 = |s: bool| if s { 1.0 } else { -1.0 };
            m[i][j] = m1(same_x) * m1(same_y);
            k[i][j] = k1(same_x) * m1(same_y) + m1(same_x) * k1(same_y);
        }
    }
    (m, k)
}

#[test]
fn single_cell_obstacle_toy() {
    // eps = 1 keeps the reduced matrix an M-matrix, so the free corners stay below 1
    let (g_c, eps) = (1.0, 1.0);
    let h = build_square(1.0, 1).unwrap();
    let params = MaterialParams::new(1.0, 1.0, g_c, 1e-10, eps);
    let stack = LevelStack::new(&h, &params);
    let sp = stack.finest();
    let map = &sp.map;
    let mesh = sp.mesh;
    let n = map.n_dofs();
    let mut dir = ConstraintMask::none(n);
    for i in map.u_range() {
        dir.constrain(i, 0.0);
    }
    // corner order by coordinates
    let corner: Vec<usize> = (0..4)
        .map(|k| mesh.vertex_at_lattice(&[(k & 1) as i64, (k >> 1) as i64, 0]).unwrap())
        .collect();
    // the crack term drives phi towards 1; corner 0 is capped at 0.3
    let caps = [0.3, 1.0, 1.0, 1.0];
    let mut old = vec![0.0f64; n];
    for k in 0..4 {
        old[map.phi_index(corner[k])] = caps[k];
    }
    let input = StepInput {
        initial_guess: &old,
        u_prev1: &old,
        u_prev2: &old,
        t: 1.0,
        t_prev1: 0.0,
        t_prev2: 0.0,
        dirichlet: &dir,
        previous_active: None,
    };
    let out = solve_step(&stack, &input, &params, SplitKind::NoSplit, &tight()).unwrap();
    let phi: Vec<f64> = (0..4).map(|k| out.u[map.phi_index(corner[k])]).collect();
    let active: Vec<bool> = (0..4).map(|k| out.active[map.phi_index(corner[k])]).collect();
    assert_eq!(active, vec![true, false, false, false]);
    assert_eq!(phi[0], 0.3);

    // reduced system (G_c/eps M + G_c eps K) phi = G_c/eps M 1 on corners 1..3
    let (m, k) = unit_cell_matrices();
    let a = |i: usize, j: usize| g_c / eps * m[i][j] + g_c * eps * k[i][j];
    let rhs = |i: usize| g_c / eps * m[i].iter().sum::<f64>() - a(i, 0) * 0.3;
    let mut mat = [[0.0; 3]; 3];
    let mut b = [0.0; 3];
    for i in 0..3 {
        for j in 0..3 {
            mat[i][j] = a(i + 1, j + 1);
        }
        b[i] = rhs(i + 1);
    }
    // Cramer's rule
    let det = |x: &[[f64; 3]; 3]| {
        x[0][0] * (x[1][1] * x[2][2] - x[1][2] * x[2][1]) - x[0][1] * (x[1][0] * x[2][2] - x[1][2] * x[2][0])
            + x[0][2] * (x[1][0] * x[2][1] - x[1][1] * x[2][0])
    };
    let d = det(&mat);
    for col in 0..3 {
        let mut t = mat;
        for row in 0..3 {
            t[row][col] = b[row];
        }
        let expect = det(&t) / d;
        assert!((phi[col + 1] - expect).abs() < 1e-9, "corner {}: {} vs {expect}", col + 1, phi[col + 1]);
        assert!(phi[col + 1] <= caps[col + 1]);
    }
    // complementarity: the multiplier at the active corner is non-negative
    let lagrange = -(0..4).map(|j| a(0, j) * phi[j]).sum::<f64>() + g_c / eps * m[0].iter().sum::<f64>();
    assert!(lagrange > 0.0);
}

#[test]
fn step_rejects_bad_inputs() {
    let h = build_square(1.0, 2).unwrap();
    let params = MaterialParams::new(1.0, 1.0, 1.0, 1e-10, 0.5);
    let stack = LevelStack::new(&h, &params);
    let map = &stack.finest().map;
    let n = map.n_dofs();
    let u = vec![1.0; n];
    let mut dir = ConstraintMask::none(n);
    dir.constrain(map.phi_index(0), 1.0);
    let input = StepInput {
        initial_guess: &u,
        u_prev1: &u,
        u_prev2: &u,
        t: 1.0,
        t_prev1: 0.0,
        t_prev2: 0.0,
        dirichlet: &dir,
        previous_active: None,
    };
    assert!(solve_step(&stack, &input, &params, SplitKind::NoSplit, &tight()).is_err());
    let short = vec![1.0; n - 1];
    let dir = ConstraintMask::none(n);
    let input = StepInput { initial_guess: &short, dirichlet: &dir, ..input };
    assert!(solve_step(&stack, &input, &params, SplitKind::NoSplit, &tight()).is_err());
}

//! Primal-dual active set iteration for one time step of the
//! irreversibility-constrained problem `phi <= phi_old`.

use crate::error::{invalid, Error, Result};
use crate::fem::{lumped_mass, ConstraintMask, DofMap};
use crate::krylov::{gmres, SolverControl};
use crate::mesh::LevelMesh;
use crate::mgsolve::{LevelStack, MgParams, Multigrid, PreconditionerKind};
use crate::model::{residual, LinearizationState, MaterialParams, SplitKind};
use crate::scalar::{norm2, Real};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ActiveSetParams {
    pub c: f64,
    pub eps_as: f64,
    pub max_iters: usize,
}

impl Default for ActiveSetParams {
    fn default() -> Self {
        Self {
            c: 100.0,
            eps_as: 1e-10,
            max_iters: 50,
        }
    }
}

impl ActiveSetParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.c > 0.0 && self.eps_as > 0.0) || self.max_iters == 0 {
            return Err(invalid("active set parameters must be positive"));
        }
        Ok(())
    }
}

/// Everything that configures the solver stack of one time step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SolverSettings {
    pub active_set: ActiveSetParams,
    pub linear: SolverControl,
    pub mg: MgParams,
    pub preconditioner: PreconditionerKind,
    /// A run aborts when the phase field leaves [0, 1] by more than this.
    pub phi_bound_limit: f64,
}

impl Default for SolverSettings {
    fn default() -> Self {
        Self {
            active_set: ActiveSetParams::default(),
            linear: SolverControl::default(),
            mg: MgParams::default(),
            preconditioner: PreconditionerKind::Full,
            phi_bound_limit: 1e-3,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IterationRecord {
    pub set_size: usize,
    pub changed: bool,
    /// Filtered residual norm before the correction.
    pub residual: f64,
    pub gmres_iterations: usize,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct ActiveSetReport {
    pub records: Vec<IterationRecord>,
    pub converged: bool,
}

impl ActiveSetReport {
    pub fn iterations(&self) -> usize {
        self.records.len()
    }

    pub fn total_gmres(&self) -> usize {
        self.records.iter().map(|r| r.gmres_iterations).sum()
    }

    pub fn mean_gmres(&self) -> f64 {
        if self.records.is_empty() {
            0.0
        } else {
            self.total_gmres() as f64 / self.records.len() as f64
        }
    }

    pub fn final_residual(&self) -> f64 {
        self.records.last().map_or(0.0, |r| r.residual)
    }
}

/// Reciprocal lumped (Gauss-Lobatto) mass for every DoF of the level.
pub fn lumped_mass_inverse<T: Real>(mesh: &LevelMesh<T>, map: &DofMap) -> Result<Vec<T>> {
    let m = lumped_mass(mesh);
    if let Some(v) = m.iter().position(|&x| !(x > T::zero())) {
        return Err(Error::Internal(format!("lumped mass of vertex {v} is not positive")));
    }
    let mut inv = vec![T::zero(); map.n_dofs()];
    for comp in 0..map.n_components() {
        for (v, &mv) in m.iter().enumerate() {
            inv[map.index(v, comp)] = T::one() / mv;
        }
    }
    Ok(inv)
}

/// Phase-field DoFs with `(M^{-1} R)_i + c (U - U_old)_i > 0`, as a per-DoF flag.
pub fn compute_active_set<T: Real>(r: &[T], u: &[T], u_old: &[T], mass_inv: &[T], map: &DofMap, c: T) -> Vec<bool> {
    let mut active = vec![false; map.n_dofs()];
    for i in map.phi_range() {
        active[i] = mass_inv[i] * r[i] + c * (u[i] - u_old[i]) > T::zero();
    }
    active
}

/// Time-step data: history, Dirichlet values at the new time, and the final
/// active set of the previous step.
#[derive(Debug, Clone, Copy)]
pub struct StepInput<'a, T> {
    pub initial_guess: &'a [T],
    pub u_prev1: &'a [T],
    pub u_prev2: &'a [T],
    pub t: T,
    pub t_prev1: T,
    pub t_prev2: T,
    pub dirichlet: &'a ConstraintMask<T>,
    pub previous_active: Option<&'a [bool]>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepOutcome<T> {
    pub u: Vec<T>,
    pub active: Vec<bool>,
    pub report: ActiveSetReport,
}

/// Runs the active set loop until the set is unchanged and the filtered
/// residual is below `eps_as`.
///
/// Each iteration evaluates the set at `U_k`, pins Dirichlet and active DoFs
/// to their targets, and applies one multigrid-preconditioned GMRES correction
/// of the filtered Jacobian system at the pinned state.
pub fn solve_step<T: Real>(
    stack: &LevelStack<'_, T>,
    input: &StepInput<'_, T>,
    params: &MaterialParams<T>,
    split: SplitKind,
    settings: &SolverSettings,
) -> Result<StepOutcome<T>> {
    settings.active_set.validate()?;
    let space = stack.finest();
    let map = &space.map;
    let n = map.n_dofs();
    for (name, len) in [
        ("initial guess", input.initial_guess.len()),
        ("u_prev1", input.u_prev1.len()),
        ("u_prev2", input.u_prev2.len()),
        ("dirichlet mask", input.dirichlet.len()),
    ] {
        if len != n {
            return Err(invalid(format!("{name} has length {len}, expected {n}")));
        }
    }
    if let Some(i) = input.dirichlet.is_constrained.iter().enumerate().position(|(i, &c)| c && map.is_phi(i)) {
        return Err(invalid(format!("Dirichlet constraint on phase-field DoF {i}")));
    }
    let mass_inv = lumped_mass_inverse(space.mesh, map)?;
    let c = T::lit(settings.active_set.c);
    let mut previous: Vec<bool> = match input.previous_active {
        Some(a) if a.len() == n => a.to_vec(),
        Some(a) => return Err(invalid(format!("previous active set has length {}, expected {n}", a.len()))),
        None => vec![false; n],
    };
    let dirichlet_flags = &input.dirichlet.is_constrained;
    let mut u = input.initial_guess.to_vec();
    input.dirichlet.set_constrained(&mut u);
    let mut report = ActiveSetReport::default();

    for _ in 0..settings.active_set.max_iters {
        let state = LinearizationState::new(
            map,
            u.clone(),
            input.u_prev1.to_vec(),
            input.u_prev2.to_vec(),
            input.t,
            input.t_prev1,
            input.t_prev2,
        );
        let mut r = residual(space, &state, Some(input.dirichlet), params, split);
        r.iter_mut().for_each(|x| *x = -*x);
        let active = compute_active_set(&r, &u, input.u_prev1, &mass_inv, map, c);

        let mut mask = input.dirichlet.clone();
        for i in map.phi_range() {
            if active[i] {
                mask.constrain(i, input.u_prev1[i]);
            }
        }
        mask.set_constrained(&mut u);
        let state = LinearizationState {
            u: u.clone(),
            ..state
        };
        let mut rt = residual(space, &state, Some(&mask), params, split);
        rt.iter_mut().for_each(|x| *x = -*x);
        let res = norm2(&rt).to_f64_lossy();
        if !res.is_finite() {
            return Err(Error::ActiveSetNoConvergence {
                iterations: report.iterations() + 1,
                residual: res,
            });
        }

        let mg = Multigrid::new(
            stack,
            &state,
            &active,
            dirichlet_flags,
            params,
            split,
            settings.preconditioner,
            settings.mg,
        )?;
        let sol = gmres(mg.fine_operator(), &mg, &rt, None, &settings.linear)?;
        for (ui, &di) in u.iter_mut().zip(&sol.x) {
            *ui += di;
        }
        mask.set_constrained(&mut u);

        let changed = active != previous;
        report.records.push(IterationRecord {
            set_size: active.iter().filter(|&&a| a).count(),
            changed,
            residual: res,
            gmres_iterations: sol.iterations,
        });
        log::debug!(
            "active set iteration {}: |A| = {}, changed = {changed}, residual = {res:e}, gmres = {}",
            report.iterations(),
            report.records.last().map_or(0, |r| r.set_size),
            sol.iterations
        );
        previous = active;
        if !changed && res <= settings.active_set.eps_as {
            report.converged = true;
            return Ok(StepOutcome {
                u,
                active: previous,
                report,
            });
        }
    }
    Err(Error::ActiveSetNoConvergence {
        iterations: report.iterations(),
        residual: report.final_residual(),
    })
}

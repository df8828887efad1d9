//! Benchmark configurations and the time-stepping driver.

use std::sync::Arc;

use crate::error::{invalid, Error, Result};
use crate::fem::ConstraintMask;
use crate::krylov::splitmix64;
use crate::mesh::{build_lshape, build_square, locate_cells, Aabb, BoundaryId, GridHierarchy};
use crate::mgsolve::LevelStack;
use crate::model::{
    boundary_load, bulk_energy, crack_bulk, crack_energy, fracture_volume, LevelSpace, LinearizationState, MaterialParams,
    SplitKind,
};
use crate::nonlinear::{solve_step, SolverSettings, StepInput};
use crate::scalar::Real;

pub type TimeFn<T> = Arc<dyn Fn(T) -> T + Send + Sync>;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Geometry<T> {
    /// `(0, side)^2`
    Square { side: T },
    /// L-shaped panel of outer edge `side`, optionally extruded to 3D.
    LShape { side: T, extrude: Option<T> },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum EpsRule<T> {
    /// `eps` equals the finest cell diameter.
    EqualsH,
    Fixed(T),
}

/// Prescribed value of one displacement component on a tagged boundary.
#[derive(Clone)]
pub struct DirichletCondition<T> {
    pub boundary: BoundaryId,
    pub component: usize,
    pub value: TimeFn<T>,
}

impl<T> std::fmt::Debug for DirichletCondition<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("DirichletCondition")
            .field("boundary", &self.boundary)
            .field("component", &self.component)
            .finish()
    }
}

/// Smooth deterministic gradient noise mapped to `[0.1, 1]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NoiseField {
    pub seed: u64,
    pub frequency: f64,
}

impl Default for NoiseField {
    fn default() -> Self {
        Self {
            seed: 2,
            frequency: 0.5,
        }
    }
}

impl NoiseField {
    fn gradient(&self, lattice: [i64; 3], dim: usize) -> [f64; 3] {
        let mut s = self.seed;
        for &c in lattice.iter().take(dim) {
            s = splitmix64(&mut s) ^ (c as u64);
        }
        let h = splitmix64(&mut s);
        let u = (h >> 11) as f64 / (1u64 << 53) as f64;
        if dim == 2 {
            let a = u * std::f64::consts::TAU;
            [a.cos(), a.sin(), 0.0]
        } else {
            let v = (splitmix64(&mut s) >> 11) as f64 / (1u64 << 53) as f64;
            let z = 2.0 * u - 1.0;
            let r = (1.0 - z * z).sqrt();
            let a = v * std::f64::consts::TAU;
            [r * a.cos(), r * a.sin(), z]
        }
    }

    /// Raw noise in roughly `[-sqrt(dim)/2, sqrt(dim)/2]`.
    pub fn raw(&self, p: &[f64; 3], dim: usize) -> f64 {
        let mut base = [0i64; 3];
        let mut frac = [0.0; 3];
        for d in 0..dim {
            let x = p[d] * self.frequency;
            base[d] = x.floor() as i64;
            frac[d] = x - x.floor();
        }
        let mut sum = 0.0;
        for k in 0..(1usize << dim) {
            let mut corner = base;
            let mut w = 1.0;
            let mut dotp = 0.0;
            let mut lat = [0i64; 3];
            for d in 0..dim {
                let bit = (k >> d) & 1;
                corner[d] += bit as i64;
                lat[d] = corner[d];
                w *= if bit == 1 { frac[d] } else { 1.0 - frac[d] };
            }
            let g = self.gradient(lat, dim);
            for d in 0..dim {
                dotp += g[d] * (frac[d] - ((k >> d) & 1) as f64);
            }
            sum += w * dotp;
        }
        sum
    }

    /// Scale factor in `[0.1, 1]`.
    pub fn value(&self, p: &[f64; 3], dim: usize) -> f64 {
        let bound = 0.5 * (dim as f64).sqrt();
        let s = (0.5 * (self.raw(p, dim) / bound + 1.0)).clamp(0.0, 1.0);
        0.1 + 0.9 * s
    }
}

/// Complete description of one benchmark run.
#[derive(Clone)]
pub struct Scenario<T> {
    pub name: String,
    pub geometry: Geometry<T>,
    pub n_levels: usize,
    /// `eps` is overwritten from `eps_rule` when the run starts.
    pub material: MaterialParams<T>,
    pub split: SplitKind,
    pub dt: T,
    pub t_end: T,
    pub eps_rule: EpsRule<T>,
    pub dirichlet: Vec<DirichletCondition<T>>,
    pub initial_cracks: Vec<Aabb<T>>,
    pub load_boundary: BoundaryId,
    pub qoi_direction: usize,
}

impl<T: Real> std::fmt::Debug for Scenario<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Scenario")
            .field("name", &self.name)
            .field("geometry", &self.geometry)
            .field("n_levels", &self.n_levels)
            .field("material", &self.material)
            .field("split", &self.split)
            .field("dt", &self.dt)
            .field("t_end", &self.t_end)
            .field("eps_rule", &self.eps_rule)
            .field("initial_cracks", &self.initial_cracks)
            .finish()
    }
}

/// Cell diameter of the finest level for a square of edge `side` with `n_levels` levels.
fn square_h<T: Real>(side: T, n_levels: usize) -> T {
    let edge = side / T::from_usize_lossy(1 << (n_levels - 1));
    edge * T::lit(2.0).sqrt()
}

/// Pressurized-fracture benchmark on `(0, 4)^2` with two initial cracks.
pub fn make_multiple_fractures<T: Real>(n_levels: usize, random_field: Option<NoiseField>) -> Result<Scenario<T>> {
    if n_levels < 2 {
        return Err(invalid(format!("multiple fractures needs at least 2 levels, got {n_levels}")));
    }
    let side = T::lit(4.0);
    let h = square_h(side, n_levels);
    let half_h = h / T::lit(2.0);
    let (mu, lambda) = MaterialParams::<T>::lame_from_young(T::lit(1e4), T::lit(0.2));
    let mut material = MaterialParams::new(mu, lambda, T::one(), T::lit(1e-10), h).with_pressure(|t| T::lit(1e3) * t);
    if let Some(noise) = random_field {
        material = material.with_modulus_field(move |x: &[T; 3]| {
            let p = [x[0].to_f64_lossy(), x[1].to_f64_lossy(), x[2].to_f64_lossy()];
            T::lit(noise.value(&p, 2))
        });
    }
    let zero: TimeFn<T> = Arc::new(|_| T::zero());
    let c = T::lit;
    Ok(Scenario {
        name: if random_field.is_some() {
            "multiple_fractures_random".into()
        } else {
            "multiple_fractures".into()
        },
        geometry: Geometry::Square { side },
        n_levels,
        material,
        split: SplitKind::NoSplit,
        dt: c(0.01),
        t_end: c(0.25),
        eps_rule: EpsRule::EqualsH,
        dirichlet: (0..2)
            .map(|component| DirichletCondition {
                boundary: BoundaryId::Outer,
                component,
                value: zero.clone(),
            })
            .collect(),
        initial_cracks: vec![
            Aabb::new([c(2.5) - half_h, c(0.8), T::zero()], [c(2.5) + half_h, c(1.5), T::zero()]),
            Aabb::new([c(0.5), c(3.0) - half_h, T::zero()], [c(1.5), c(3.0) + half_h, T::zero()]),
        ],
        load_boundary: BoundaryId::Outer,
        qoi_direction: 1,
    })
}

/// Applied vertical displacement of the L-shaped panel (mm) at time `t` (s).
pub fn lshape_displacement<T: Real>(t: T) -> T {
    if t < T::lit(0.3) {
        t
    } else if t < T::lit(0.8) {
        T::lit(0.6) - t
    } else {
        t - T::one()
    }
}

/// L-shaped panel (outer edge 500 mm), 2D or extruded to 250 mm in 3D.
pub fn make_lshape<T: Real>(n_levels: usize, dim: usize, eps_rule: EpsRule<T>) -> Result<Scenario<T>> {
    if n_levels < 2 {
        return Err(invalid(format!("L-shape needs at least 2 levels, got {n_levels}")));
    }
    if dim != 2 && dim != 3 {
        return Err(invalid(format!("dimension must be 2 or 3, got {dim}")));
    }
    let extrude = (dim == 3).then(|| T::lit(250.0));
    let zero: TimeFn<T> = Arc::new(|_| T::zero());
    let mut dirichlet: Vec<_> = (0..dim)
        .map(|component| DirichletCondition {
            boundary: BoundaryId::Fixed,
            component,
            value: zero.clone(),
        })
        .collect();
    dirichlet.push(DirichletCondition {
        boundary: BoundaryId::Loaded,
        component: 1,
        value: Arc::new(lshape_displacement),
    });
    Ok(Scenario {
        name: if dim == 2 { "lshape2d".into() } else { "lshape3d".into() },
        geometry: Geometry::LShape {
            side: T::lit(500.0),
            extrude,
        },
        n_levels,
        material: MaterialParams::new(T::lit(10.95), T::lit(6.16), T::lit(8.9e-5), T::lit(1e-10), T::one()),
        split: SplitKind::Miehe,
        dt: T::lit(1e-3),
        t_end: T::lit(2.0),
        eps_rule,
        dirichlet,
        initial_cracks: Vec::new(),
        load_boundary: BoundaryId::TractionFree,
        qoi_direction: 1,
    })
}

impl<T: Real> Scenario<T> {
    pub fn dim(&self) -> usize {
        match self.geometry {
            Geometry::Square { .. } => 2,
            Geometry::LShape { extrude, .. } => {
                if extrude.is_some() {
                    3
                } else {
                    2
                }
            }
        }
    }

    pub fn build_hierarchy(&self) -> Result<GridHierarchy<T>> {
        match self.geometry {
            Geometry::Square { side } => build_square(side, self.n_levels),
            Geometry::LShape { side, extrude } => build_lshape(side, self.n_levels, extrude),
        }
    }

    pub fn resolve_eps(&self, hierarchy: &GridHierarchy<T>) -> T {
        match self.eps_rule {
            EpsRule::EqualsH => hierarchy.finest().cell_diameter(),
            EpsRule::Fixed(e) => e,
        }
    }

    /// Number of time steps, `round(t_end / dt)`.
    pub fn n_steps(&self) -> usize {
        (self.t_end / self.dt).round().to_usize().unwrap_or(0)
    }

    pub fn time(&self, step: usize) -> T {
        T::from_usize_lossy(step) * self.dt
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.dt > T::zero()) {
            return Err(invalid(format!("dt must be positive, got {}", self.dt)));
        }
        if !(self.t_end >= T::zero()) {
            return Err(invalid(format!("t_end must be non-negative, got {}", self.t_end)));
        }
        if let EpsRule::Fixed(e) = self.eps_rule {
            if !(e > T::zero()) {
                return Err(invalid(format!("eps must be positive, got {e}")));
            }
        }
        let dim = self.dim();
        if self.qoi_direction >= dim {
            return Err(invalid(format!("QoI direction {} out of range", self.qoi_direction)));
        }
        if let Some(d) = self.dirichlet.iter().find(|d| d.component >= dim) {
            return Err(invalid(format!("Dirichlet component {} out of range", d.component)));
        }
        Ok(())
    }

    /// Dirichlet mask on the finest level at time `t`.
    pub fn dirichlet_mask(&self, space: &LevelSpace<'_, T>, t: T) -> ConstraintMask<T> {
        let mut mask = ConstraintMask::none(space.n_dofs());
        for cond in &self.dirichlet {
            let value = (cond.value)(t);
            for v in space.mesh.boundary_vertices(cond.boundary) {
                mask.constrain(space.map.index(v, cond.component), value);
            }
        }
        mask
    }

    /// Phase-field DoFs whose support overlaps an initial crack box.
    pub fn initial_crack_dofs(&self, space: &LevelSpace<'_, T>) -> Vec<usize> {
        let mut flag = vec![false; space.mesh.n_vertices()];
        for b in &self.initial_cracks {
            for c in locate_cells(space.mesh, b) {
                for &v in space.mesh.cell(c) {
                    flag[v] = true;
                }
            }
        }
        flag.iter()
            .enumerate()
            .filter(|(_, &f)| f)
            .map(|(v, _)| space.map.phi_index(v))
            .collect()
    }

    /// `u = 0`, `phi = 0` on initial cracks and `1` elsewhere.
    pub fn initial_state(&self, space: &LevelSpace<'_, T>) -> Vec<T> {
        let mut u = vec![T::zero(); space.n_dofs()];
        for i in space.map.phi_range() {
            u[i] = T::one();
        }
        for i in self.initial_crack_dofs(space) {
            u[i] = T::zero();
        }
        u
    }
}

/// Quantities recorded after every completed time step.
#[derive(Debug, Clone, PartialEq)]
pub struct TimestepRecord {
    pub step: usize,
    pub time: f64,
    pub active_set_iters: usize,
    pub gmres_iters: Vec<usize>,
    pub load: f64,
    pub crack_energy: f64,
    pub bulk_energy: f64,
    pub n_active: usize,
    /// `int (1 - phi) dx`
    pub fracture_volume: f64,
    /// `int (1 - phi)^2 dx`
    pub crack_bulk: f64,
    /// `min_i (phi_old - phi)_i`
    pub min_decrease: f64,
    pub phi_min: f64,
    pub phi_max: f64,
    /// Largest phase-field value on the initial crack DoFs.
    pub max_phi_on_initial_crack: f64,
}

impl TimestepRecord {
    pub fn gmres_total(&self) -> usize {
        self.gmres_iters.iter().sum()
    }

    pub fn gmres_mean(&self) -> f64 {
        if self.gmres_iters.is_empty() {
            0.0
        } else {
            self.gmres_total() as f64 / self.gmres_iters.len() as f64
        }
    }
}

/// Receives the state after the initial setup and after every step.
pub trait RunObserver<T> {
    fn on_start(&mut self, _space: &LevelSpace<'_, T>, _u: &[T]) -> Result<()> {
        Ok(())
    }

    fn on_step(&mut self, record: &TimestepRecord, space: &LevelSpace<'_, T>, u: &[T]) -> Result<()>;
}

/// Result of a run; `failure` is set when a step did not converge.
#[derive(Debug)]
pub struct RunOutcome<T> {
    pub records: Vec<TimestepRecord>,
    pub initial_u: Vec<T>,
    pub final_u: Vec<T>,
    pub eps: T,
    pub h: T,
    pub n_dofs: usize,
    pub failure: Option<Error>,
}

/// Runs all time steps of a scenario.
pub fn run<T: Real>(
    scenario: &Scenario<T>,
    settings: &SolverSettings,
    observers: &mut [&mut dyn RunObserver<T>],
) -> Result<RunOutcome<T>> {
    scenario.validate()?;
    let hierarchy = scenario.build_hierarchy()?;
    let eps = scenario.resolve_eps(&hierarchy);
    let mut params = scenario.material.clone();
    params.eps = eps;
    params.validate(hierarchy.dim())?;
    let stack = LevelStack::new(&hierarchy, &params);
    let space = stack.finest();
    let map = &space.map;
    let phi_range = map.phi_range();

    let u0 = scenario.initial_state(space);
    let crack_dofs = scenario.initial_crack_dofs(space);
    for obs in observers.iter_mut() {
        obs.on_start(space, &u0)?;
    }
    let mut u_prev1 = u0.clone();
    let mut u_prev2 = u0.clone();
    let mut active: Option<Vec<bool>> = None;
    let mut records = Vec::new();
    let mut failure = None;

    for step in 1..=scenario.n_steps() {
        let t = scenario.time(step);
        let t1 = scenario.time(step - 1);
        let t2 = scenario.time(step.saturating_sub(2));
        let dirichlet = scenario.dirichlet_mask(space, t);
        let input = StepInput {
            initial_guess: &u_prev1,
            u_prev1: &u_prev1,
            u_prev2: &u_prev2,
            t,
            t_prev1: t1,
            t_prev2: t2,
            dirichlet: &dirichlet,
            previous_active: active.as_deref(),
        };
        let outcome = match solve_step(&stack, &input, &params, scenario.split, settings) {
            Ok(o) => o,
            Err(e) => {
                failure = Some(e);
                break;
            }
        };
        let u = outcome.u;
        let state = LinearizationState::frozen(map, u.clone(), t);
        let phi = &u[phi_range.clone()];
        let phi_old = &u_prev1[phi_range.clone()];
        let min_decrease = phi
            .iter()
            .zip(phi_old)
            .map(|(&a, &b)| (b - a).to_f64_lossy())
            .fold(f64::INFINITY, f64::min);
        let phi_min = phi.iter().map(|x| x.to_f64_lossy()).fold(f64::INFINITY, f64::min);
        let phi_max = phi.iter().map(|x| x.to_f64_lossy()).fold(f64::NEG_INFINITY, f64::max);
        let max_on_crack = crack_dofs
            .iter()
            .map(|&i| u[i].to_f64_lossy())
            .fold(f64::NEG_INFINITY, f64::max);
        let excess = (-phi_min).max(phi_max - 1.0);
        if excess > 1e-8 {
            log::warn!("step {step}: phase field leaves [0, 1] by {excess:e}");
        }
        if excess > settings.phi_bound_limit {
            failure = Some(Error::BoundViolation { step, excess });
            break;
        }
        let load = boundary_load(
            space,
            &state,
            &params,
            scenario.split,
            scenario.load_boundary,
            scenario.qoi_direction,
        )?;
        let record = TimestepRecord {
            step,
            time: t.to_f64_lossy(),
            active_set_iters: outcome.report.iterations(),
            gmres_iters: outcome.report.records.iter().map(|r| r.gmres_iterations).collect(),
            load: load.to_f64_lossy(),
            crack_energy: crack_energy(space, &state, &params).to_f64_lossy(),
            bulk_energy: bulk_energy(space, &state, &params, scenario.split).to_f64_lossy(),
            n_active: outcome.active.iter().filter(|&&a| a).count(),
            fracture_volume: fracture_volume(space, &state).to_f64_lossy(),
            crack_bulk: crack_bulk(space, &state).to_f64_lossy(),
            min_decrease,
            phi_min,
            phi_max,
            max_phi_on_initial_crack: if crack_dofs.is_empty() { 0.0 } else { max_on_crack },
        };
        log::info!(
            "step {step} t={:.4} as={} gmres={} load={:.6e}",
            record.time,
            record.active_set_iters,
            record.gmres_total(),
            record.load
        );
        for obs in observers.iter_mut() {
            obs.on_step(&record, space, &u)?;
        }
        records.push(record);
        active = Some(outcome.active);
        u_prev2 = std::mem::replace(&mut u_prev1, u);
    }

    Ok(RunOutcome {
        records,
        initial_u: u0,
        final_u: u_prev1,
        eps,
        h: hierarchy.finest().cell_diameter(),
        n_dofs: map.n_dofs(),
        failure,
    })
}

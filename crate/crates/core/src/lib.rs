//! Matrix-free geometric multigrid solver for pressurized phase-field fracture
//! on nested structured quadrilateral and hexahedral meshes.

pub mod error;
pub mod fem;
pub mod io;
pub mod krylov;
pub mod linalg;
pub mod mesh;
pub mod mgsolve;
pub mod model;
pub mod nonlinear;
pub mod scalar;
pub mod scenarios;
pub mod verify;

pub use error::{Error, Result};
pub use scalar::Real;

/// Double-precision aliases for the common case.
pub type Hierarchy = mesh::GridHierarchy<f64>;
pub type Mesh = mesh::LevelMesh<f64>;
pub type Material = model::MaterialParams<f64>;
pub type Constraints = fem::ConstraintMask<f64>;
pub type State = model::LinearizationState<f64>;
pub type Space<'m> = model::LevelSpace<'m, f64>;
pub type Operator<'s, 'm> = model::PhaseFieldOperator<'s, 'm, f64>;
pub type Preconditioner<'s, 'm> = mgsolve::Multigrid<'s, 'm, f64>;
pub type ScenarioF64 = scenarios::Scenario<f64>;
pub type Outcome = scenarios::RunOutcome<f64>;

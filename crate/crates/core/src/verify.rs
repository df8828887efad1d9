//! Reference checks of the matrix-free operators against independent
//! computations: an explicitly assembled sparse Jacobian, central finite
//! differences of the residual, and the adjointness of the grid transfers.

use crate::fem::{shape_eval, ConstraintMask, DofMap, LevelTransfer, QuadratureRule};
use crate::krylov::splitmix64;
use crate::linalg::{mandel_len, mandel_pairs, sym_eigen, trace, zero2, Tensor2};
use crate::mesh::{build_lshape, build_square, GridHierarchy};
use crate::model::{
    ddeg, degradation, residual, split_tangent, strain_split, LevelSpace, LinearizationState, MaterialParams,
    PhaseFieldOperator, SplitKind,
};
use crate::Result;

/// Compressed sparse row matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct CsrMatrix {
    n: usize,
    offsets: Vec<usize>,
    cols: Vec<usize>,
    vals: Vec<f64>,
}

impl CsrMatrix {
    /// Sums duplicate entries.
    pub fn from_triplets(n: usize, mut triplets: Vec<(usize, usize, f64)>) -> Self {
        triplets.sort_by_key(|&(r, c, _)| (r, c));
        let mut offsets = vec![0; n + 1];
        let mut cols: Vec<usize> = Vec::new();
        let mut vals: Vec<f64> = Vec::new();
        let mut last = None;
        for (r, c, v) in triplets {
            if last == Some((r, c)) {
                *vals.last_mut().unwrap() += v;
            } else {
                cols.push(c);
                vals.push(v);
                offsets[r + 1] += 1;
                last = Some((r, c));
            }
        }
        for r in 0..n {
            offsets[r + 1] += offsets[r];
        }
        Self { n, offsets, cols, vals }
    }

    pub fn n_rows(&self) -> usize {
        self.n
    }

    pub fn nnz(&self) -> usize {
        self.vals.len()
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        let range = self.offsets[r]..self.offsets[r + 1];
        match self.cols[range.clone()].binary_search(&c) {
            Ok(k) => self.vals[range.start + k],
            Err(_) => 0.0,
        }
    }

    pub fn matvec(&self, x: &[f64]) -> Vec<f64> {
        (0..self.n)
            .map(|r| (self.offsets[r]..self.offsets[r + 1]).map(|k| self.vals[k] * x[self.cols[k]]).sum())
            .collect()
    }
}

// Voigt index pairs; shear entries hold engineering strains 2 e_ij.
fn voigt_pairs(dim: usize) -> &'static [(usize, usize)] {
    mandel_pairs(dim)
}

fn isotropic_voigt(dim: usize, lambda: f64, mu: f64) -> Vec<f64> {
    let n = mandel_len(dim);
    let mut d = vec![0.0; n * n];
    for a in 0..dim {
        for b in 0..dim {
            d[a * n + b] = lambda;
        }
        d[a * n + a] += 2.0 * mu;
    }
    for s in dim..n {
        d[s * n + s] = mu;
    }
    d
}

fn mandel_to_voigt(c: &[f64], dim: usize) -> Vec<f64> {
    let n = mandel_len(dim);
    let scale = |i: usize| if i < dim { 1.0 } else { std::f64::consts::SQRT_2 };
    let mut out = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            out[i * n + j] = c[i * n + j] / (scale(i) * scale(j));
        }
    }
    out
}

fn tensor_to_voigt_stress(s: &Tensor2<f64>, dim: usize) -> Vec<f64> {
    voigt_pairs(dim).iter().map(|&(i, j)| s[i][j]).collect()
}

/// Point data of one cell: strain, phase field, extrapolated phase field,
/// reference gradients scaled to physical, and shape values.
struct CellPoint {
    strain: Tensor2<f64>,
    phi: f64,
    phi_tilde: f64,
    values: Vec<f64>,
    grads: Vec<[f64; 3]>,
    jxw: f64,
}

fn cell_points(space: &LevelSpace<'_, f64>, state: &LinearizationState<f64>, cell: usize) -> Vec<CellPoint> {
    let mesh = space.mesh;
    let map = &space.map;
    let dim = map.dim();
    let size = mesh.cell_size();
    let rule = QuadratureRule::<f64>::gauss(dim);
    let det: f64 = size[..dim].iter().product();
    let corners = mesh.cell(cell);
    rule.points()
        .iter()
        .zip(rule.weights())
        .map(|(p, &w)| {
            let (values, ref_grads) = shape_eval(dim, p);
            let grads: Vec<[f64; 3]> = ref_grads
                .iter()
                .map(|g| {
                    let mut out = [0.0; 3];
                    for d in 0..dim {
                        out[d] = g[d] / size[d];
                    }
                    out
                })
                .collect();
            let mut gu: Tensor2<f64> = zero2();
            let mut phi = 0.0;
            let mut phi_tilde = 0.0;
            for (k, &v) in corners.iter().enumerate() {
                for (c, row) in gu.iter_mut().enumerate().take(dim) {
                    for j in 0..dim {
                        row[j] += state.u[map.index(v, c)] * grads[k][j];
                    }
                }
                phi += state.u[map.phi_index(v)] * values[k];
                phi_tilde += state.phi_tilde[v] * values[k];
            }
            let mut strain: Tensor2<f64> = zero2();
            for i in 0..dim {
                for j in 0..dim {
                    strain[i][j] = 0.5 * (gu[i][j] + gu[j][i]);
                }
            }
            CellPoint {
                strain,
                phi,
                phi_tilde,
                values,
                grads,
                jxw: w * det,
            }
        })
        .collect()
}

// Strain-displacement row block of corner k, component c (Voigt).
fn b_column(dim: usize, grad: &[f64; 3], c: usize) -> Vec<f64> {
    voigt_pairs(dim)
        .iter()
        .map(|&(i, j)| {
            if i == j {
                if c == i {
                    grad[i]
                } else {
                    0.0
                }
            } else if c == i {
                grad[j]
            } else if c == j {
                grad[i]
            } else {
                0.0
            }
        })
        .collect()
}

/// Filtered Jacobian assembled element by element from strain-displacement
/// matrices: identity on constrained rows, zero constrained columns.
///
/// The isotropic tangent is formed directly from the Lame parameters; the
/// spectral split uses its closed-form tangent.
pub fn assemble_jacobian(
    space: &LevelSpace<'_, f64>,
    state: &LinearizationState<f64>,
    mask: &ConstraintMask<f64>,
    params: &MaterialParams<f64>,
    split: SplitKind,
) -> CsrMatrix {
    let mesh = space.mesh;
    let map = &space.map;
    let dim = map.dim();
    let nv = mandel_len(dim);
    let p = params.pressure(state.t);
    let kappa = params.kappa;
    let mut triplets = Vec::new();
    let gdof = |v: usize, c: usize| if c == dim { map.phi_index(v) } else { map.index(v, c) };
    for cell in 0..mesh.n_cells() {
        let corners = mesh.cell(cell);
        for (q, pt) in cell_points(space, state, cell).iter().enumerate() {
            let s = space.modulus(cell, q);
            let (lam, mu) = (s * params.lambda, s * params.mu);
            let (d_plus, d_minus, sigma_plus, e_plus) = match split {
                SplitKind::NoSplit => {
                    let d = isotropic_voigt(dim, lam, mu);
                    let tr = trace(&pt.strain, dim);
                    let mut sig: Tensor2<f64> = zero2();
                    let mut energy = 0.5 * lam * tr * tr;
                    for i in 0..dim {
                        for j in 0..dim {
                            sig[i][j] = 2.0 * mu * pt.strain[i][j];
                            energy += mu * pt.strain[i][j] * pt.strain[i][j];
                        }
                        sig[i][i] += lam * tr;
                    }
                    (d, vec![0.0; nv * nv], sig, energy)
                }
                SplitKind::Miehe => {
                    let (cp, cm) = split_tangent(&pt.strain, dim, split, lam, mu);
                    let sr = strain_split(&pt.strain, dim, split, lam, mu);
                    (mandel_to_voigt(&cp, dim), mandel_to_voigt(&cm, dim), sr.sigma_plus, sr.energy_plus)
                }
            };
            let g = degradation(pt.phi_tilde, kappa);
            let d: Vec<f64> = d_plus.iter().zip(&d_minus).map(|(a, b)| g * a + b).collect();
            let mut coupling = tensor_to_voigt_stress(&sigma_plus, dim);
            let gp = 0.5 * ddeg(pt.phi, kappa);
            for (m, &(i, j)) in voigt_pairs(dim).iter().enumerate() {
                coupling[m] *= gp;
                if i == j {
                    coupling[m] += 2.0 * pt.phi * p;
                }
            }
            let mass = (1.0 - kappa) * e_plus + 2.0 * p * trace(&pt.strain, dim) + params.g_c / params.eps;
            let stiff = params.g_c * params.eps;
            for (a, &va) in corners.iter().enumerate() {
                for ca in 0..dim {
                    let ba = b_column(dim, &pt.grads[a], ca);
                    for (b, &vb) in corners.iter().enumerate() {
                        for cb in 0..dim {
                            let bb = b_column(dim, &pt.grads[b], cb);
                            let mut k = 0.0;
                            for i in 0..nv {
                                for j in 0..nv {
                                    k += ba[i] * d[i * nv + j] * bb[j];
                                }
                            }
                            triplets.push((gdof(va, ca), gdof(vb, cb), k * pt.jxw));
                        }
                    }
                }
                for (b, &vb) in corners.iter().enumerate() {
                    for cb in 0..dim {
                        let bb = b_column(dim, &pt.grads[b], cb);
                        let k: f64 = coupling.iter().zip(&bb).map(|(x, y)| x * y).sum();
                        triplets.push((gdof(va, dim), gdof(vb, cb), pt.values[a] * k * pt.jxw));
                    }
                    let gg: f64 = (0..dim).map(|j| pt.grads[a][j] * pt.grads[b][j]).sum();
                    let k = mass * pt.values[a] * pt.values[b] + stiff * gg;
                    triplets.push((gdof(va, dim), gdof(vb, dim), k * pt.jxw));
                }
            }
        }
    }
    let c = &mask.is_constrained;
    triplets.retain(|&(r, col, _)| !c[r] && !c[col]);
    triplets.extend(c.iter().enumerate().filter(|(_, &x)| x).map(|(i, _)| (i, i, 1.0)));
    CsrMatrix::from_triplets(map.n_dofs(), triplets)
}

/// Outcome of one named check.
#[derive(Debug, Clone, PartialEq)]
pub struct CheckResult {
    pub name: String,
    /// Worst observed error.
    pub error: f64,
    pub tolerance: f64,
}

impl CheckResult {
    pub fn passed(&self) -> bool {
        self.error <= self.tolerance
    }
}

struct Rng(u64);

impl Rng {
    fn uniform(&mut self) -> f64 {
        (splitmix64(&mut self.0) >> 11) as f64 / (1u64 << 53) as f64
    }

    fn range(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }
}

fn rel_error(a: &[f64], b: &[f64]) -> f64 {
    let diff = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
    let scale = b.iter().map(|y| y * y).sum::<f64>().sqrt();
    if scale == 0.0 {
        diff
    } else {
        diff / scale
    }
}

fn max_rel_error(a: &[f64], b: &[f64]) -> f64 {
    let diff = a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
    let scale = b.iter().map(|y| y.abs()).fold(0.0, f64::max);
    if scale == 0.0 {
        diff
    } else {
        diff / scale
    }
}

/// Small meshes covering both dimensions and both geometries.
pub fn oracle_meshes() -> Result<Vec<GridHierarchy<f64>>> {
    Ok(vec![
        build_square(1.0, 2)?,
        build_square(4.0, 3)?,
        build_lshape(500.0, 3, None)?,
        build_lshape(500.0, 2, Some(250.0))?,
    ])
}

fn oracle_params(extent: f64, rng: &mut Rng, heterogeneous: bool) -> MaterialParams<f64> {
    let (mu, lambda) = MaterialParams::lame_from_young(rng.range(1.0, 10.0), rng.range(0.1, 0.35));
    let mut params = MaterialParams::new(mu, lambda, rng.range(0.5, 2.0), 1e-4, 0.1 * extent)
        .with_pressure(|t| 3.0 * t + 0.5);
    if heterogeneous {
        let f = rng.range(0.5, 2.0) / extent;
        params = params.with_modulus_field(move |x| 1.0 + 0.5 * (f * x[0]).sin() * (f * x[1]).cos());
    }
    params
}

fn random_state(map: &DofMap, extent: f64, rng: &mut Rng) -> LinearizationState<f64> {
    let n = map.n_dofs();
    let mut field = |scale: f64| -> Vec<f64> {
        (0..n)
            .map(|i| {
                if map.is_phi(i) {
                    rng.range(0.0, 1.0)
                } else {
                    scale * rng.range(-1.0, 1.0)
                }
            })
            .collect()
    };
    let amp = 0.05 * extent;
    let u = field(amp);
    let u1 = field(amp);
    let u2 = field(amp);
    LinearizationState::new(map, u, u1, u2, 0.3, 0.2, 0.1)
}

fn random_mask(map: &DofMap, rng: &mut Rng) -> ConstraintMask<f64> {
    let mut mask = ConstraintMask::none(map.n_dofs());
    for i in 0..map.n_dofs() {
        if rng.uniform() < 0.2 {
            mask.constrain(i, rng.range(-1.0, 1.0));
        }
    }
    mask
}

fn mesh_extent(h: &GridHierarchy<f64>) -> f64 {
    let b = h.bounding_box();
    b.max[0] - b.min[0]
}

/// Matrix-free versus assembled Jacobian on `samples` random states per mesh,
/// both splits, with and without constraint masks.
pub fn check_assembled(samples: usize, seed: u64) -> Result<CheckResult> {
    let mut rng = Rng(seed);
    let mut worst: f64 = 0.0;
    for h in oracle_meshes()? {
        let extent = mesh_extent(&h);
        let mesh = h.finest();
        for s in 0..samples {
            let params = oracle_params(extent, &mut rng, s % 2 == 1);
            let space = LevelSpace::new(mesh, h.n_levels() - 1, &params);
            let map = &space.map;
            let state = random_state(map, extent, &mut rng);
            for split in [SplitKind::NoSplit, SplitKind::Miehe] {
                for masked in [false, true] {
                    let mask = if masked {
                        random_mask(map, &mut rng)
                    } else {
                        ConstraintMask::none(map.n_dofs())
                    };
                    let a = assemble_jacobian(&space, &state, &mask, &params, split);
                    let op = PhaseFieldOperator::new(&space, &state, mask, &params, split);
                    let v: Vec<f64> = (0..map.n_dofs()).map(|_| rng.range(-1.0, 1.0)).collect();
                    let mut mf = vec![0.0; v.len()];
                    op.vmult(&v, &mut mf);
                    worst = worst.max(rel_error(&mf, &a.matvec(&v)));
                }
            }
        }
    }
    Ok(CheckResult {
        name: "matrix-free Jacobian equals assembled matrix".into(),
        error: worst,
        tolerance: 1e-12,
    })
}

// Smallest eigenvalue gap and smallest |eigenvalue| / |trace| over all points.
fn spectral_margin(space: &LevelSpace<'_, f64>, state: &LinearizationState<f64>) -> f64 {
    let dim = space.map.dim();
    let mut margin = f64::INFINITY;
    for cell in 0..space.mesh.n_cells() {
        for pt in cell_points(space, state, cell) {
            let mut a = vec![0.0; dim * dim];
            for i in 0..dim {
                for j in 0..dim {
                    a[i * dim + j] = pt.strain[i][j];
                }
            }
            let (vals, _) = sym_eigen(&a, dim);
            for i in 0..dim {
                margin = margin.min(vals[i].abs());
                for j in 0..i {
                    margin = margin.min((vals[i] - vals[j]).abs());
                }
            }
            margin = margin.min(trace(&pt.strain, dim).abs());
        }
    }
    margin
}

/// Central finite differences of the residual against the Jacobian action at
/// `delta = 1e-6`. Spectral-split samples are redrawn until every strain has
/// eigenvalue gaps (and distance from zero) above `1e-3`.
pub fn check_fd_jacobian(samples: usize, seed: u64) -> Result<CheckResult> {
    let mut rng = Rng(seed);
    let delta = 1e-6;
    let mut worst: f64 = 0.0;
    let h = build_square(1.0, 2)?;
    let mesh = h.finest();
    for split in [SplitKind::NoSplit, SplitKind::Miehe] {
        for s in 0..samples {
            let params = oracle_params(1.0, &mut rng, s % 2 == 1);
            let space = LevelSpace::new(mesh, 1, &params);
            let map = &space.map;
            let mut state;
            let mut tries = 0;
            loop {
                state = random_state(map, 20.0, &mut rng);
                tries += 1;
                if split == SplitKind::NoSplit || spectral_margin(&space, &state) > 1e-3 || tries > 1000 {
                    break;
                }
            }
            let v: Vec<f64> = (0..map.n_dofs()).map(|_| rng.range(-1.0, 1.0)).collect();
            let op = PhaseFieldOperator::new(&space, &state, ConstraintMask::none(map.n_dofs()), &params, split);
            let mut jv = vec![0.0; v.len()];
            op.vmult_unfiltered(&v, &mut jv);
            let shifted = |sign: f64| {
                let u: Vec<f64> = state.u.iter().zip(&v).map(|(a, b)| a + sign * delta * b).collect();
                let st = LinearizationState { u, ..state.clone() };
                residual(&space, &st, None, &params, split)
            };
            let rp = shifted(1.0);
            let rm = shifted(-1.0);
            let fd: Vec<f64> = rp.iter().zip(&rm).map(|(a, b)| (a - b) / (2.0 * delta)).collect();
            worst = worst.max(max_rel_error(&fd, &jv));
        }
    }
    Ok(CheckResult {
        name: "finite-difference Jacobian".into(),
        error: worst,
        tolerance: 1e-5,
    })
}

/// `<P x, y> = <x, R y>` for random vectors on every level pair.
pub fn check_transfer_adjoint(seed: u64) -> Result<CheckResult> {
    let mut rng = Rng(seed);
    let mut worst: f64 = 0.0;
    for h in [build_square(1.0, 4)?, build_lshape(500.0, 3, None)?, build_lshape(500.0, 3, Some(250.0))?] {
        for w in h.levels().windows(2) {
            let t = LevelTransfer::new(&w[0], &w[1]);
            let ncomp = w[0].dim() + 1;
            let x: Vec<f64> = (0..ncomp * w[0].n_vertices()).map(|_| rng.range(-1.0, 1.0)).collect();
            let y: Vec<f64> = (0..ncomp * w[1].n_vertices()).map(|_| rng.range(-1.0, 1.0)).collect();
            let px = t.prolongate(&x)?;
            let ry = t.restrict(&y)?;
            let lhs: f64 = px.iter().zip(&y).map(|(a, b)| a * b).sum();
            let rhs: f64 = x.iter().zip(&ry).map(|(a, b)| a * b).sum();
            worst = worst.max((lhs - rhs).abs() / lhs.abs().max(rhs.abs()).max(1.0));
        }
    }
    Ok(CheckResult {
        name: "prolongation and restriction are adjoint".into(),
        error: worst,
        tolerance: 1e-13,
    })
}

/// Every check with its default sample count.
pub fn run_all(seed: u64) -> Result<Vec<CheckResult>> {
    Ok(vec![
        check_assembled(5, seed)?,
        check_fd_jacobian(10, seed ^ 0xF00D)?,
        check_transfer_adjoint(seed ^ 0xBEEF)?,
    ])
}

//! Pressurized phase-field fracture model on one mesh level: residual of the
//! quasi-monolithic semilinear form, matrix-free Jacobian action, operator
//! diagonal, strain-energy splits and quantities of interest.
//!
//! Unknowns per vertex are the displacement `u` and the phase field `phi`
//! (1 intact, 0 broken). The displacement equation uses the time-lagged
//! extrapolation `phi_tilde`, so the Jacobian block `G_u,phi` vanishes.

use std::fmt;
use std::sync::Arc;

use crate::error::{invalid, Result};
use crate::fem::{apply_cellwise, cell_gather, map_cells, shape_eval, CellBasis, ConstraintMask, DofMap, QuadratureRule};
use crate::linalg::{ddot, frobenius, from_mandel, identity2, mandel_len, sym_eigen, to_mandel, trace, zero2, Tensor2};
use crate::mesh::{BoundaryId, LevelMesh};
use crate::scalar::Real;

pub type PressureFn<T> = Arc<dyn Fn(T) -> T + Send + Sync>;
pub type ScalarField<T> = Arc<dyn Fn(&[T; 3]) -> T + Send + Sync>;

/// Material and regularization parameters.
#[derive(Clone)]
pub struct MaterialParams<T> {
    pub mu: T,
    pub lambda: T,
    pub g_c: T,
    pub kappa: T,
    pub eps: T,
    /// Pressure inside the fracture as a function of time.
    pub pressure_fn: PressureFn<T>,
    /// Optional elastic-modulus scale factor in `[0.1, 1]` (scales mu and lambda jointly).
    pub modulus_field: Option<ScalarField<T>>,
}

impl<T: Real> MaterialParams<T> {
    pub fn new(mu: T, lambda: T, g_c: T, kappa: T, eps: T) -> Self {
        Self {
            mu,
            lambda,
            g_c,
            kappa,
            eps,
            pressure_fn: Arc::new(|_| T::zero()),
            modulus_field: None,
        }
    }

    /// Lamé parameters from Young's modulus and Poisson ratio (plane strain / 3D).
    pub fn lame_from_young(e: T, nu: T) -> (T, T) {
        let two = T::lit(2.0);
        let mu = e / (two * (T::one() + nu));
        let lambda = e * nu / ((T::one() + nu) * (T::one() - two * nu));
        (mu, lambda)
    }

    pub fn with_pressure(mut self, f: impl Fn(T) -> T + Send + Sync + 'static) -> Self {
        self.pressure_fn = Arc::new(f);
        self
    }

    pub fn with_modulus_field(mut self, f: impl Fn(&[T; 3]) -> T + Send + Sync + 'static) -> Self {
        self.modulus_field = Some(Arc::new(f));
        self
    }

    pub fn pressure(&self, t: T) -> T {
        (self.pressure_fn)(t)
    }

    pub fn validate(&self, dim: usize) -> Result<()> {
        let z = T::zero();
        if !(self.mu > z) {
            return Err(invalid(format!("mu must be positive, got {}", self.mu)));
        }
        if !(self.lambda > -T::lit(2.0) * self.mu / T::from_usize_lossy(dim)) {
            return Err(invalid(format!("lambda {} violates lambda > -2 mu / dim", self.lambda)));
        }
        if !(self.g_c > z) {
            return Err(invalid(format!("G_c must be positive, got {}", self.g_c)));
        }
        if !(self.kappa > z && self.kappa < T::one()) {
            return Err(invalid(format!("kappa must lie in (0, 1), got {}", self.kappa)));
        }
        if !(self.eps > z) {
            return Err(invalid(format!("eps must be positive, got {}", self.eps)));
        }
        Ok(())
    }
}

impl<T: Real> fmt::Debug for MaterialParams<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("MaterialParams")
            .field("mu", &self.mu)
            .field("lambda", &self.lambda)
            .field("g_c", &self.g_c)
            .field("kappa", &self.kappa)
            .field("eps", &self.eps)
            .field("modulus_field", &self.modulus_field.is_some())
            .finish()
    }
}

/// Tension/compression split of the elastic energy.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum SplitKind {
    /// The whole energy is degraded.
    NoSplit,
    /// Spectral split: only tensile strain energy is degraded.
    Miehe,
}

/// `g(phi) = (1 - kappa) phi^2 + kappa`
#[inline]
pub fn degradation<T: Real>(phi: T, kappa: T) -> T {
    (T::one() - kappa) * phi * phi + kappa
}

#[inline]
pub fn ddeg<T: Real>(phi: T, kappa: T) -> T {
    T::lit(2.0) * (T::one() - kappa) * phi
}

/// Linear extrapolation of the phase field from the two previous steps,
/// clamped to `[0, 1]`. Falls back to `phi_prev1` when both previous times coincide.
pub fn extrapolate<T: Real>(phi_prev1: &[T], phi_prev2: &[T], t: T, t_prev1: T, t_prev2: T) -> Vec<T> {
    let dt_prev = t_prev1 - t_prev2;
    let factor = if dt_prev > T::zero() {
        (t - t_prev1) / dt_prev
    } else {
        T::zero()
    };
    phi_prev1
        .iter()
        .zip(phi_prev2)
        .map(|(&a, &b)| (a + factor * (a - b)).max(T::zero()).min(T::one()))
        .collect()
}

/// Energies and stresses of a strain split.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SplitResult<T> {
    pub energy_plus: T,
    pub energy_minus: T,
    pub sigma_plus: Tensor2<T>,
    pub sigma_minus: Tensor2<T>,
}

#[inline]
fn pos<T: Real>(x: T) -> T {
    x.max(T::zero())
}

#[inline]
fn neg<T: Real>(x: T) -> T {
    x.min(T::zero())
}

/// Derivative of the ramp `max(x, 0)`; the kink at zero takes the mean slope.
#[inline]
fn dpos<T: Real>(x: T) -> T {
    if x > T::zero() {
        T::one()
    } else if x < T::zero() {
        T::zero()
    } else {
        T::lit(0.5)
    }
}

struct Spectral<T> {
    vals: [T; 3],
    vecs: [[T; 3]; 3], // vecs[i] is the i-th eigenvector
}

fn spectral<T: Real>(e: &Tensor2<T>, dim: usize) -> Spectral<T> {
    let mut a = vec![T::zero(); dim * dim];
    for i in 0..dim {
        for j in 0..dim {
            a[i * dim + j] = e[i][j];
        }
    }
    let (vals, vecs) = sym_eigen(&a, dim);
    let mut out = Spectral {
        vals: [T::zero(); 3],
        vecs: [[T::zero(); 3]; 3],
    };
    for i in 0..dim {
        out.vals[i] = vals[i];
        for k in 0..dim {
            out.vecs[i][k] = vecs[k * dim + i];
        }
    }
    out
}

/// Energy split `E = E+ + E-` and stresses `sigma+- = dE+-/de`.
pub fn strain_split<T: Real>(e: &Tensor2<T>, dim: usize, kind: SplitKind, lambda: T, mu: T) -> SplitResult<T> {
    let half = T::lit(0.5);
    let two = T::lit(2.0);
    let tr = trace(e, dim);
    match kind {
        SplitKind::NoSplit => {
            let mut sigma = zero2();
            for i in 0..dim {
                for j in 0..dim {
                    sigma[i][j] = two * mu * e[i][j];
                }
                sigma[i][i] += lambda * tr;
            }
            SplitResult {
                energy_plus: half * lambda * tr * tr + mu * ddot(e, e, dim),
                energy_minus: T::zero(),
                sigma_plus: sigma,
                sigma_minus: zero2(),
            }
        }
        SplitKind::Miehe => {
            let sp = spectral(e, dim);
            let mut e_plus = zero2();
            let mut e_minus = zero2();
            let mut sum_p = T::zero();
            let mut sum_m = T::zero();
            for i in 0..dim {
                let lp = pos(sp.vals[i]);
                let lm = neg(sp.vals[i]);
                sum_p += lp * lp;
                sum_m += lm * lm;
                for a in 0..dim {
                    for b in 0..dim {
                        let nn = sp.vecs[i][a] * sp.vecs[i][b];
                        e_plus[a][b] += lp * nn;
                        e_minus[a][b] += lm * nn;
                    }
                }
            }
            let mut sp_out = zero2();
            let mut sm_out = zero2();
            for a in 0..dim {
                for b in 0..dim {
                    sp_out[a][b] = two * mu * e_plus[a][b];
                    sm_out[a][b] = two * mu * e_minus[a][b];
                }
                sp_out[a][a] += lambda * pos(tr);
                sm_out[a][a] += lambda * neg(tr);
            }
            SplitResult {
                energy_plus: half * lambda * pos(tr) * pos(tr) + mu * sum_p,
                energy_minus: half * lambda * neg(tr) * neg(tr) + mu * sum_m,
                sigma_plus: sp_out,
                sigma_minus: sm_out,
            }
        }
    }
}

/// Tangents `dsigma+/de` and `dsigma-/de` as row-major Mandel matrices.
///
/// For the spectral split the divided differences of nearly equal eigenvalue
/// pairs (gap below `1e-8 |e|`) are replaced by the mean of the one-sided slopes.
pub fn split_tangent<T: Real>(e: &Tensor2<T>, dim: usize, kind: SplitKind, lambda: T, mu: T) -> (Vec<T>, Vec<T>) {
    let n = mandel_len(dim);
    let two = T::lit(2.0);
    let mut c_plus = vec![T::zero(); n * n];
    let mut c_minus = vec![T::zero(); n * n];
    let mut basis = vec![T::zero(); n];
    let mut col = vec![T::zero(); n];
    let id = identity2::<T>(dim);

    let (h_tr, coeff, sp) = match kind {
        SplitKind::NoSplit => (T::one(), None, None),
        SplitKind::Miehe => {
            let sp = spectral(e, dim);
            let tol = T::lit(1e-8) * frobenius(e, dim);
            let mut c = [[T::zero(); 3]; 3];
            for i in 0..dim {
                for j in 0..dim {
                    let (li, lj) = (sp.vals[i], sp.vals[j]);
                    c[i][j] = if i == j {
                        dpos(li)
                    } else if (li - lj).abs() <= tol {
                        T::lit(0.5) * (dpos(li) + dpos(lj))
                    } else {
                        (pos(li) - pos(lj)) / (li - lj)
                    };
                }
            }
            (dpos(trace(e, dim)), Some(c), Some(sp))
        }
    };

    for m in 0..n {
        basis.iter_mut().for_each(|x| *x = T::zero());
        basis[m] = T::one();
        let de = from_mandel(&basis, dim);
        let tr_de = trace(&de, dim);
        // projected strain increment P+[de]
        let p_de = match (&coeff, &sp) {
            (Some(c), Some(sp)) => {
                let mut out = zero2();
                for i in 0..dim {
                    for j in 0..dim {
                        let mut proj = T::zero();
                        for a in 0..dim {
                            for b in 0..dim {
                                proj += sp.vecs[i][a] * de[a][b] * sp.vecs[j][b];
                            }
                        }
                        let f = c[i][j] * proj;
                        for a in 0..dim {
                            for b in 0..dim {
                                out[a][b] += f * sp.vecs[i][a] * sp.vecs[j][b];
                            }
                        }
                    }
                }
                out
            }
            _ => de,
        };
        let mut dsp = zero2();
        let mut dsm = zero2();
        for a in 0..dim {
            for b in 0..dim {
                dsp[a][b] = two * mu * p_de[a][b] + lambda * h_tr * tr_de * id[a][b];
                let full = two * mu * de[a][b] + lambda * tr_de * id[a][b];
                dsm[a][b] = full - dsp[a][b];
            }
        }
        to_mandel(&dsp, dim, &mut col);
        for r in 0..n {
            c_plus[r * n + m] = col[r];
        }
        to_mandel(&dsm, dim, &mut col);
        for r in 0..n {
            c_minus[r * n + m] = col[r];
        }
    }
    (c_plus, c_minus)
}

/// Linearization point: current coefficients, two previous time-step
/// solutions and the extrapolated phase field (per vertex).
#[derive(Debug, Clone, PartialEq)]
pub struct LinearizationState<T> {
    pub u: Vec<T>,
    pub u_prev1: Vec<T>,
    pub u_prev2: Vec<T>,
    pub t: T,
    pub t_prev1: T,
    pub t_prev2: T,
    pub phi_tilde: Vec<T>,
}

impl<T: Real> LinearizationState<T> {
    pub fn new(map: &DofMap, u: Vec<T>, u_prev1: Vec<T>, u_prev2: Vec<T>, t: T, t_prev1: T, t_prev2: T) -> Self {
        let r = map.phi_range();
        let phi_tilde = extrapolate(&u_prev1[r.clone()], &u_prev2[r], t, t_prev1, t_prev2);
        Self {
            u,
            u_prev1,
            u_prev2,
            t,
            t_prev1,
            t_prev2,
            phi_tilde,
        }
    }

    /// Stationary state: all histories equal `u`.
    pub fn frozen(map: &DofMap, u: Vec<T>, t: T) -> Self {
        Self::new(map, u.clone(), u.clone(), u, t, t, t)
    }

    pub fn phi<'a>(&'a self, map: &DofMap) -> &'a [T] {
        &self.u[map.phi_range()]
    }
}

/// One mesh level with its DoF numbering, tabulated Gauss basis and the
/// elastic-modulus scale factor at every quadrature point.
#[derive(Debug, Clone)]
pub struct LevelSpace<'m, T> {
    pub mesh: &'m LevelMesh<T>,
    pub map: DofMap,
    pub basis: CellBasis<T>,
    modulus: Vec<T>,
}

impl<'m, T: Real> LevelSpace<'m, T> {
    pub fn new(mesh: &'m LevelMesh<T>, level: usize, params: &MaterialParams<T>) -> Self {
        let rule = QuadratureRule::gauss(mesh.dim());
        let basis = CellBasis::new(&rule, mesh.cell_size());
        let nq = basis.n_q();
        let modulus = match &params.modulus_field {
            None => vec![T::one(); mesh.n_cells() * nq],
            Some(f) => {
                let size = mesh.cell_size();
                let dim = mesh.dim();
                map_cells(mesh.n_cells(), nq, |c, out| {
                    let o = mesh.cell_origin(c);
                    for (q, m) in out.iter_mut().enumerate() {
                        let r = basis.ref_point(q);
                        let mut x = [T::zero(); 3];
                        for d in 0..dim {
                            x[d] = o[d] + r[d] * size[d];
                        }
                        *m = f(&x);
                    }
                })
            }
        };
        Self {
            mesh,
            map: DofMap::new(level, mesh),
            basis,
            modulus,
        }
    }

    pub fn n_dofs(&self) -> usize {
        self.map.n_dofs()
    }

    /// Elastic-modulus scale factor at quadrature point `q` of `cell`.
    #[inline]
    pub fn modulus(&self, cell: usize, q: usize) -> T {
        self.modulus[cell * self.basis.n_q() + q]
    }
}

/// Field values of the state at one quadrature point.
struct QFields<T> {
    grad_u: Tensor2<T>,
    phi: T,
    grad_phi: [T; 3],
    phi_tilde: T,
}

fn gather_vertex_field<T: Real>(field: &[T], mesh: &LevelMesh<T>, cell: usize, out: &mut [T]) {
    for (k, &v) in mesh.cell(cell).iter().enumerate() {
        out[k] = field[v];
    }
}

fn eval_fields<T: Real>(basis: &CellBasis<T>, dim: usize, q: usize, local: &[T], local_pt: &[T]) -> QFields<T> {
    let nc = basis.n_corner();
    let mut grad_u = zero2();
    let mut phi = T::zero();
    let mut grad_phi = [T::zero(); 3];
    let mut phi_tilde = T::zero();
    for k in 0..nc {
        let g = basis.grad(q, k);
        let n = basis.value(q, k);
        for (c, row) in grad_u.iter_mut().enumerate().take(dim) {
            let uc = local[c * nc + k];
            for j in 0..dim {
                row[j] += uc * g[j];
            }
        }
        let pk = local[dim * nc + k];
        phi += pk * n;
        for j in 0..dim {
            grad_phi[j] += pk * g[j];
        }
        phi_tilde += local_pt[k] * n;
    }
    QFields {
        grad_u,
        phi,
        grad_phi,
        phi_tilde,
    }
}

fn sym_part<T: Real>(g: &Tensor2<T>, dim: usize) -> Tensor2<T> {
    let half = T::lit(0.5);
    let mut e = zero2();
    for i in 0..dim {
        for j in 0..dim {
            e[i][j] = half * (g[i][j] + g[j][i]);
        }
    }
    e
}

/// Which diagonal blocks of the Jacobian an application includes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Block {
    /// Full coupled operator (`G_uu`, `G_phi,u`, `G_phi,phi`).
    Full,
    /// Displacement block `G_uu` only.
    U,
    /// Phase-field block `G_phi,phi` only.
    Phi,
}

/// Linearization data at one quadrature point.
#[derive(Clone, Copy)]
struct QData<T> {
    // g(phi_tilde) C+ + C- (Mandel, row-major)
    tangent: [T; 36],
    // 1/2 g'(phi) sigma+ + 2 phi p I
    coupling: Tensor2<T>,
    // (1 - kappa) E+ + 2 p div u + G_c / eps
    mass: T,
}

/// Residual `A_h(U)` with constrained rows set to zero (when a mask is given).
pub fn residual<T: Real>(
    space: &LevelSpace<'_, T>,
    state: &LinearizationState<T>,
    mask: Option<&ConstraintMask<T>>,
    params: &MaterialParams<T>,
    split: SplitKind,
) -> Vec<T> {
    let mesh = space.mesh;
    let map = &space.map;
    let basis = &space.basis;
    let dim = map.dim();
    let nc = basis.n_corner();
    let p = params.pressure(state.t);
    let two = T::lit(2.0);
    let half = T::lit(0.5);
    let nl = map.dofs_per_cell();

    let buf = map_cells(mesh.n_cells(), nl, |c, out| {
        let mut local = vec![T::zero(); nl];
        let mut local_pt = vec![T::zero(); nc];
        cell_gather(&state.u, mesh, map, c, None, &mut local);
        gather_vertex_field(&state.phi_tilde, mesh, c, &mut local_pt);
        for q in 0..basis.n_q() {
            let f = eval_fields(basis, dim, q, &local, &local_pt);
            let e = sym_part(&f.grad_u, dim);
            let div = trace(&e, dim);
            let s = space.modulus(c, q);
            let sr = strain_split(&e, dim, split, s * params.lambda, s * params.mu);
            let g_t = degradation(f.phi_tilde, params.kappa);
            let jxw = basis.jxw(q);
            let pu = f.phi_tilde * f.phi_tilde * p;
            let phi_src = half * ddeg(f.phi, params.kappa) * sr.energy_plus + two * f.phi * p * div
                - params.g_c / params.eps * (T::one() - f.phi);
            let phi_grad_coef = params.g_c * params.eps;
            for k in 0..nc {
                let g = basis.grad(q, k);
                for cc in 0..dim {
                    let mut acc = pu * g[cc];
                    for j in 0..dim {
                        acc += (g_t * sr.sigma_plus[cc][j] + sr.sigma_minus[cc][j]) * g[j];
                    }
                    out[cc * nc + k] += jxw * acc;
                }
                let mut gg = T::zero();
                for j in 0..dim {
                    gg += f.grad_phi[j] * g[j];
                }
                out[dim * nc + k] += jxw * (phi_src * basis.value(q, k) + phi_grad_coef * gg);
            }
        }
    });
    let mut r = vec![T::zero(); map.n_dofs()];
    for (c, chunk) in buf.chunks(nl).enumerate() {
        crate::fem::cell_scatter_add(chunk, mesh, map, c, mask, &mut r);
    }
    r
}

/// Matrix-free Jacobian of the semilinear form at a fixed linearization point,
/// filtered by a constraint mask.
pub struct PhaseFieldOperator<'s, 'm, T> {
    space: &'s LevelSpace<'m, T>,
    mask: ConstraintMask<T>,
    qdata: Vec<QData<T>>,
    stiffness: T,
}

impl<'s, 'm, T: Real> PhaseFieldOperator<'s, 'm, T> {
    pub fn new(
        space: &'s LevelSpace<'m, T>,
        state: &LinearizationState<T>,
        mask: ConstraintMask<T>,
        params: &MaterialParams<T>,
        split: SplitKind,
    ) -> Self {
        let mesh = space.mesh;
        let map = &space.map;
        let basis = &space.basis;
        let dim = map.dim();
        let nc = basis.n_corner();
        let nq = basis.n_q();
        let nm = mandel_len(dim);
        let p = params.pressure(state.t);
        let two = T::lit(2.0);
        let half = T::lit(0.5);
        let nl = map.dofs_per_cell();
        let blank = QData {
            tangent: [T::zero(); 36],
            coupling: zero2(),
            mass: T::zero(),
        };
        let mut qdata = vec![blank; mesh.n_cells() * nq];
        let fill = |c: usize, out: &mut [QData<T>]| {
            let mut local = vec![T::zero(); nl];
            let mut local_pt = vec![T::zero(); nc];
            cell_gather(&state.u, mesh, map, c, None, &mut local);
            gather_vertex_field(&state.phi_tilde, mesh, c, &mut local_pt);
            for (q, qd) in out.iter_mut().enumerate() {
                let f = eval_fields(basis, dim, q, &local, &local_pt);
                let e = sym_part(&f.grad_u, dim);
                let s = space.modulus(c, q);
                let (lam, mu) = (s * params.lambda, s * params.mu);
                let sr = strain_split(&e, dim, split, lam, mu);
                let (cp, cm) = split_tangent(&e, dim, split, lam, mu);
                let g_t = degradation(f.phi_tilde, params.kappa);
                for i in 0..nm * nm {
                    qd.tangent[i] = g_t * cp[i] + cm[i];
                }
                let gp = half * ddeg(f.phi, params.kappa);
                for a in 0..dim {
                    for b in 0..dim {
                        qd.coupling[a][b] = gp * sr.sigma_plus[a][b];
                    }
                    qd.coupling[a][a] += two * f.phi * p;
                }
                qd.mass = (T::one() - params.kappa) * sr.energy_plus
                    + two * p * trace(&e, dim)
                    + params.g_c / params.eps;
            }
        };
        if mesh.n_cells() >= crate::fem::PARALLEL_CELL_THRESHOLD {
            use rayon::prelude::*;
            qdata.par_chunks_mut(nq).enumerate().for_each(|(c, out)| fill(c, out));
        } else {
            qdata.chunks_mut(nq).enumerate().for_each(|(c, out)| fill(c, out));
        }
        Self {
            space,
            mask,
            qdata,
            stiffness: params.g_c * params.eps,
        }
    }

    pub fn space(&self) -> &LevelSpace<'m, T> {
        self.space
    }

    pub fn mask(&self) -> &ConstraintMask<T> {
        &self.mask
    }

    pub fn n_dofs(&self) -> usize {
        self.space.n_dofs()
    }

    fn local_apply(&self, cell: usize, block: Block, src: &[T], out: &mut [T]) {
        let basis = &self.space.basis;
        let dim = self.space.map.dim();
        let nc = basis.n_corner();
        let nm = mandel_len(dim);
        let nq = basis.n_q();
        let do_u = block != Block::Phi;
        let do_phi = block != Block::U;
        let do_coupling = block == Block::Full;
        let mut de_m = [T::zero(); 6];
        let mut ds_m = [T::zero(); 6];
        for q in 0..nq {
            let qd = &self.qdata[cell * nq + q];
            let jxw = basis.jxw(q);
            let mut grad_du = zero2();
            let mut dphi = T::zero();
            let mut grad_dphi = [T::zero(); 3];
            for k in 0..nc {
                let g = basis.grad(q, k);
                if do_u {
                    for (c, row) in grad_du.iter_mut().enumerate().take(dim) {
                        let uc = src[c * nc + k];
                        for j in 0..dim {
                            row[j] += uc * g[j];
                        }
                    }
                }
                if do_phi {
                    let pk = src[dim * nc + k];
                    dphi += pk * basis.value(q, k);
                    for j in 0..dim {
                        grad_dphi[j] += pk * g[j];
                    }
                }
            }
            let mut dsigma = zero2();
            let mut phi_val = T::zero();
            if do_u {
                let de = sym_part(&grad_du, dim);
                to_mandel(&de, dim, &mut de_m);
                for r in 0..nm {
                    let mut s = T::zero();
                    for m in 0..nm {
                        s += qd.tangent[r * nm + m] * de_m[m];
                    }
                    ds_m[r] = s;
                }
                dsigma = from_mandel(&ds_m[..nm], dim);
                if do_coupling {
                    phi_val += ddot(&qd.coupling, &de, dim);
                }
            }
            if do_phi {
                phi_val += qd.mass * dphi;
            }
            for k in 0..nc {
                let g = basis.grad(q, k);
                if do_u {
                    for c in 0..dim {
                        let mut acc = T::zero();
                        for j in 0..dim {
                            acc += dsigma[c][j] * g[j];
                        }
                        out[c * nc + k] += jxw * acc;
                    }
                }
                if do_phi || do_coupling {
                    let mut acc = phi_val * basis.value(q, k);
                    if do_phi {
                        let mut gg = T::zero();
                        for j in 0..dim {
                            gg += grad_dphi[j] * g[j];
                        }
                        acc += self.stiffness * gg;
                    }
                    out[dim * nc + k] += jxw * acc;
                }
            }
        }
    }

    /// Filtered product `dst = G~ src` restricted to a block.
    pub fn apply_block(&self, block: Block, src: &[T], dst: &mut [T]) {
        let sp = self.space;
        apply_cellwise(sp.mesh, &sp.map, Some(&self.mask), src, dst, |c, local, out| {
            self.local_apply(c, block, local, out)
        });
        let keep = match block {
            Block::Full => return,
            Block::U => sp.map.u_range(),
            Block::Phi => sp.map.phi_range(),
        };
        for (i, d) in dst.iter_mut().enumerate() {
            if !keep.contains(&i) {
                *d = T::zero();
            }
        }
    }

    /// Filtered product `dst = G~ src`.
    pub fn vmult(&self, src: &[T], dst: &mut [T]) {
        self.apply_block(Block::Full, src, dst)
    }

    /// Unfiltered product `G src` (constraints ignored).
    pub fn vmult_unfiltered(&self, src: &[T], dst: &mut [T]) {
        let sp = self.space;
        apply_cellwise(sp.mesh, &sp.map, None, src, dst, |c, local, out| {
            self.local_apply(c, Block::Full, local, out)
        });
    }

    /// Exact diagonal of the filtered operator (1 on constrained rows).
    pub fn diagonal(&self) -> Vec<T> {
        let sp = self.space;
        let mesh = sp.mesh;
        let map = &sp.map;
        let nl = map.dofs_per_cell();
        let nc = mesh.corners_per_cell();
        let buf = map_cells(mesh.n_cells(), nl, |c, out| {
            let mut unit = vec![T::zero(); nl];
            let mut col = vec![T::zero(); nl];
            for j in 0..nl {
                unit.iter_mut().for_each(|x| *x = T::zero());
                col.iter_mut().for_each(|x| *x = T::zero());
                unit[j] = T::one();
                self.local_apply(c, Block::Full, &unit, &mut col);
                out[j] = col[j];
            }
        });
        let mut diag = vec![T::zero(); map.n_dofs()];
        for (c, chunk) in buf.chunks(nl).enumerate() {
            let corners = mesh.cell(c);
            for comp in 0..map.n_components() {
                for (k, &v) in corners.iter().enumerate() {
                    diag[map.index(v, comp)] += chunk[comp * nc + k];
                }
            }
        }
        for (d, &c) in diag.iter_mut().zip(&self.mask.is_constrained) {
            if c {
                *d = T::one();
            }
        }
        diag
    }
}

/// `G~ v` at a linearization point (builds a temporary operator).
pub fn jacobian_vmult<T: Real>(
    space: &LevelSpace<'_, T>,
    state: &LinearizationState<T>,
    mask: &ConstraintMask<T>,
    params: &MaterialParams<T>,
    split: SplitKind,
    v: &[T],
) -> Vec<T> {
    let op = PhaseFieldOperator::new(space, state, mask.clone(), params, split);
    let mut out = vec![T::zero(); v.len()];
    op.vmult(v, &mut out);
    out
}

/// Diagonal of the filtered Jacobian (builds a temporary operator).
pub fn diagonal<T: Real>(
    space: &LevelSpace<'_, T>,
    state: &LinearizationState<T>,
    mask: &ConstraintMask<T>,
    params: &MaterialParams<T>,
    split: SplitKind,
) -> Vec<T> {
    PhaseFieldOperator::new(space, state, mask.clone(), params, split).diagonal()
}

fn integrate<T: Real, F>(space: &LevelSpace<'_, T>, state: &LinearizationState<T>, density: F) -> T
where
    F: Fn(usize, usize, &QFields<T>) -> T + Sync + Send,
{
    let mesh = space.mesh;
    let map = &space.map;
    let basis = &space.basis;
    let dim = map.dim();
    let nl = map.dofs_per_cell();
    let nc = basis.n_corner();
    let per_cell = map_cells(mesh.n_cells(), 1, |c, out| {
        let mut local = vec![T::zero(); nl];
        let mut local_pt = vec![T::zero(); nc];
        cell_gather(&state.u, mesh, map, c, None, &mut local);
        gather_vertex_field(&state.phi_tilde, mesh, c, &mut local_pt);
        for q in 0..basis.n_q() {
            let f = eval_fields(basis, dim, q, &local, &local_pt);
            out[0] += basis.jxw(q) * density(c, q, &f);
        }
    });
    per_cell.into_iter().sum()
}

/// `int G_c/2 (1/eps (1-phi)^2 + eps |grad phi|^2) dx`
pub fn crack_energy<T: Real>(space: &LevelSpace<'_, T>, state: &LinearizationState<T>, params: &MaterialParams<T>) -> T {
    let dim = space.map.dim();
    let half = T::lit(0.5);
    integrate(space, state, |_, _, f| {
        let gp2: T = (0..dim).map(|j| f.grad_phi[j] * f.grad_phi[j]).sum();
        let d = T::one() - f.phi;
        half * params.g_c * (d * d / params.eps + params.eps * gp2)
    })
}

/// `int (g(phi) E+ + E- + phi^2 p div u) dx`
pub fn bulk_energy<T: Real>(
    space: &LevelSpace<'_, T>,
    state: &LinearizationState<T>,
    params: &MaterialParams<T>,
    split: SplitKind,
) -> T {
    let dim = space.map.dim();
    let p = params.pressure(state.t);
    integrate(space, state, |c, q, f| {
        let e = sym_part(&f.grad_u, dim);
        let s = space.modulus(c, q);
        let sr = strain_split(&e, dim, split, s * params.lambda, s * params.mu);
        degradation(f.phi, params.kappa) * sr.energy_plus + sr.energy_minus + f.phi * f.phi * p * trace(&e, dim)
    })
}

/// `int (1 - phi) dx`
pub fn fracture_volume<T: Real>(space: &LevelSpace<'_, T>, state: &LinearizationState<T>) -> T {
    integrate(space, state, |_, _, f| T::one() - f.phi)
}

/// `int (1 - phi)^2 dx`
pub fn crack_bulk<T: Real>(space: &LevelSpace<'_, T>, state: &LinearizationState<T>) -> T {
    integrate(space, state, |_, _, f| (T::one() - f.phi) * (T::one() - f.phi))
}

/// `int_Gamma ((g(phi) sigma+ + sigma-) n)_direction ds` over faces tagged `boundary`.
pub fn boundary_load<T: Real>(
    space: &LevelSpace<'_, T>,
    state: &LinearizationState<T>,
    params: &MaterialParams<T>,
    split: SplitKind,
    boundary: BoundaryId,
    direction: usize,
) -> Result<T> {
    let mesh = space.mesh;
    let map = &space.map;
    let dim = map.dim();
    if direction >= dim {
        return Err(invalid(format!("direction {direction} out of range for dimension {dim}")));
    }
    let faces: Vec<_> = mesh.boundary_faces().iter().filter(|f| f.id == boundary).collect();
    if faces.is_empty() {
        return Err(invalid(format!("no faces tagged {boundary:?}")));
    }
    let nl = map.dofs_per_cell();
    let nc = mesh.corners_per_cell();
    let size = mesh.cell_size();
    let face_rule = QuadratureRule::<T>::gauss(dim - 1);
    let mut local = vec![T::zero(); nl];
    let mut total = T::zero();
    for f in faces {
        let axis = f.axis();
        let side = T::from_usize_lossy(f.face % 2);
        let tangential: Vec<usize> = (0..dim).filter(|&d| d != axis).collect();
        let area: T = tangential.iter().fold(T::one(), |a, &d| a * size[d]);
        cell_gather(&state.u, mesh, map, f.cell, None, &mut local);
        let origin = mesh.cell_origin(f.cell);
        for (fp, &w) in face_rule.points().iter().zip(face_rule.weights()) {
            let mut r = [T::zero(); 3];
            r[axis] = side;
            for (i, &d) in tangential.iter().enumerate() {
                r[d] = fp[i];
            }
            let (vals, grads) = shape_eval(dim, &r);
            let mut grad_u = zero2();
            let mut phi = T::zero();
            for k in 0..nc {
                for (c, row) in grad_u.iter_mut().enumerate().take(dim) {
                    for j in 0..dim {
                        row[j] += local[c * nc + k] * grads[k][j] / size[j];
                    }
                }
                phi += local[dim * nc + k] * vals[k];
            }
            let e = sym_part(&grad_u, dim);
            let s = match &params.modulus_field {
                None => T::one(),
                Some(field) => {
                    let mut x = [T::zero(); 3];
                    for d in 0..dim {
                        x[d] = origin[d] + r[d] * size[d];
                    }
                    field(&x)
                }
            };
            let sr = strain_split(&e, dim, split, s * params.lambda, s * params.mu);
            let g = degradation(phi, params.kappa);
            let sign = T::from_i32(f.normal_sign()).unwrap_or_else(T::one);
            let traction = g * sr.sigma_plus[direction][axis] + sr.sigma_minus[direction][axis];
            total += w * area * sign * traction;
        }
    }
    Ok(total)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mesh::build_square;

    fn diag2(a: f64, b: f64) -> Tensor2<f64> {
        [[a, 0.0, 0.0], [0.0, b, 0.0], [0.0, 0.0, 0.0]]
    }

    #[test]
    fn degradation_values() {
        assert_eq!(degradation(1.0, 1e-10), 1.0);
        assert_eq!(degradation(0.0, 1e-10), 1e-10);
        assert!((degradation(0.5f64, 1e-10) - 0.2500000000750).abs() < 1e-16);
        assert!((ddeg(0.5f64, 0.0) - 1.0).abs() < 1e-16);
    }

    #[test]
    fn extrapolation_examples() {
        let a = vec![0.7, 0.3];
        assert_eq!(extrapolate(&a, &a, 3.0, 2.0, 1.0), a);
        assert_eq!(extrapolate(&a, &[0.0, 0.0], 1.0, 0.0, 0.0), a);
        let r = extrapolate(&[0.8f64], &[1.0], 0.3, 0.2, 0.1);
        assert!((r[0] - 0.6).abs() < 1e-14);
        let clamped = extrapolate(&[0.1], &[0.5], 0.3, 0.2, 0.1);
        assert_eq!(clamped[0], 0.0);
    }

    #[test]
    fn split_examples() {
        let z = strain_split(&zero2::<f64>(), 2, SplitKind::Miehe, 1.0, 1.0);
        assert_eq!(z.energy_plus, 0.0);
        assert_eq!(z.energy_minus, 0.0);

        let m = strain_split(&diag2(2.0, -1.0), 2, SplitKind::Miehe, 0.0, 1.0);
        assert!((m.energy_plus - 4.0).abs() < 1e-14);
        assert!((m.sigma_plus[0][0] - 4.0).abs() < 1e-14);
        assert!(m.sigma_plus[1][1].abs() < 1e-14);
        assert!((m.energy_minus - 1.0).abs() < 1e-14);

        let n = strain_split(&diag2(1.0, 1.0), 2, SplitKind::NoSplit, 1.0, 1.0);
        assert!((n.energy_plus - 4.0).abs() < 1e-14);
        assert!((n.sigma_plus[0][0] - 4.0).abs() < 1e-14);
        assert!((n.sigma_plus[1][1] - 4.0).abs() < 1e-14);
        assert_eq!(n.energy_minus, 0.0);
    }

    #[test]
    fn miehe_parts_sum_to_full_energy() {
        let e = [[0.3, -0.7, 0.2], [-0.7, -0.1, 0.4], [0.2, 0.4, 0.05]];
        for dim in 2..=3 {
            let full = strain_split::<f64>(&e, dim, SplitKind::NoSplit, 2.0, 1.5);
            let m = strain_split::<f64>(&e, dim, SplitKind::Miehe, 2.0, 1.5);
            assert!((m.energy_plus + m.energy_minus - full.energy_plus).abs() < 1e-13);
            for i in 0..dim {
                for j in 0..dim {
                    let s = m.sigma_plus[i][j] + m.sigma_minus[i][j];
                    assert!((s - full.sigma_plus[i][j]).abs() < 1e-13);
                }
            }
        }
    }

    #[test]
    fn miehe_tangent_matches_finite_differences() {
        let e = [[0.3, -0.2, 0.1], [-0.2, -0.15, 0.05], [0.1, 0.05, 0.02]];
        let h = 1e-7;
        for dim in 2..=3 {
            let n = mandel_len(dim);
            let (cp, _) = split_tangent::<f64>(&e, dim, SplitKind::Miehe, 1.3, 0.8);
            let mut em = vec![0.0; n];
            to_mandel(&e, dim, &mut em);
            for m in 0..n {
                let mut ep = em.clone();
                let mut en = em.clone();
                ep[m] += h;
                en[m] -= h;
                let sp = strain_split(&from_mandel(&ep, dim), dim, SplitKind::Miehe, 1.3, 0.8).sigma_plus;
                let sn = strain_split(&from_mandel(&en, dim), dim, SplitKind::Miehe, 1.3, 0.8).sigma_plus;
                let mut spm = vec![0.0; n];
                let mut snm = vec![0.0; n];
                to_mandel(&sp, dim, &mut spm);
                to_mandel(&sn, dim, &mut snm);
                for r in 0..n {
                    let fd = (spm[r] - snm[r]) / (2.0 * h);
                    assert!((fd - cp[r * n + m]).abs() < 1e-6, "dim {dim} r {r} m {m}");
                }
            }
        }
    }

    #[test]
    fn tangent_degenerate_eigenvalues_are_finite() {
        let (cp, cm) = split_tangent::<f64>(&diag2(1.0, 1.0), 2, SplitKind::Miehe, 1.0, 1.0);
        assert!(cp.iter().chain(&cm).all(|x| x.is_finite()));
        let (cp0, _) = split_tangent(&zero2::<f64>(), 3, SplitKind::Miehe, 1.0, 1.0);
        assert!(cp0.iter().all(|x| x.is_finite()));
    }

    fn unit_setup(levels: usize) -> (crate::mesh::GridHierarchy<f64>, MaterialParams<f64>) {
        let h = build_square(1.0, levels).unwrap();
        let p = MaterialParams::new(1.0, 1.0, 1.0, 1e-10, 0.5);
        (h, p)
    }

    #[test]
    fn stress_free_intact_state_is_stationary() {
        let (h, params) = unit_setup(2);
        let space = LevelSpace::new(h.finest(), 1, &params);
        let mut u = vec![0.0; space.n_dofs()];
        for i in space.map.phi_range() {
            u[i] = 1.0;
        }
        let st = LinearizationState::frozen(&space.map, u.clone(), 0.0);
        let r = residual(&space, &st, None, &params, SplitKind::NoSplit);
        assert!(r.iter().all(|x| x.abs() < 1e-15));

        let pressured = params.clone().with_pressure(|_| 3.0);
        let r = residual(&space, &st, None, &pressured, SplitKind::NoSplit);
        assert!(space.map.phi_range().all(|i| r[i].abs() < 1e-14));
        // u-rows equal (p, div w)
        let mut expected = vec![0.0; space.n_dofs()];
        let b = &space.basis;
        for c in 0..h.finest().n_cells() {
            for q in 0..b.n_q() {
                for (k, &v) in h.finest().cell(c).iter().enumerate() {
                    for d in 0..2 {
                        expected[space.map.index(v, d)] += b.jxw(q) * 3.0 * b.grad(q, k)[d];
                    }
                }
            }
        }
        for i in space.map.u_range() {
            assert!((r[i] - expected[i]).abs() < 1e-14);
        }
    }

    #[test]
    fn crack_energy_constant_fields() {
        let (h, params) = unit_setup(3);
        let space = LevelSpace::new(h.finest(), 2, &params);
        let mut u = vec![0.0; space.n_dofs()];
        let st = LinearizationState::frozen(&space.map, u.clone(), 0.0);
        let e0 = crack_energy(&space, &st, &params);
        assert!((e0 - 1.0 / (2.0 * 0.5)).abs() < 1e-14);
        for i in space.map.phi_range() {
            u[i] = 1.0;
        }
        let st = LinearizationState::frozen(&space.map, u, 0.0);
        assert!(crack_energy(&space, &st, &params).abs() < 1e-28);
    }

    #[test]
    fn bulk_energy_uniform_strain() {
        let (h, params) = unit_setup(3);
        let space = LevelSpace::new(h.finest(), 2, &params);
        let a = 0.01;
        let mut u = vec![0.0; space.n_dofs()];
        for (v, x) in h.finest().vertices().iter().enumerate() {
            u[space.map.index(v, 0)] = a * x[0];
            u[space.map.index(v, 1)] = a * x[1];
            u[space.map.phi_index(v)] = 1.0;
        }
        let st = LinearizationState::frozen(&space.map, u, 0.0);
        let e = bulk_energy(&space, &st, &params, SplitKind::NoSplit);
        let expect = 0.5 * 1.0 * (2.0 * a) * (2.0 * a) + 2.0 * 1.0 * a * a;
        assert!((e - expect).abs() < 1e-12 * expect.max(1.0));
    }

    #[test]
    fn boundary_load_uniaxial() {
        let (h, params) = unit_setup(3);
        let space = LevelSpace::new(h.finest(), 2, &params);
        let a = 0.02;
        let mut u = vec![0.0; space.n_dofs()];
        for (v, x) in h.finest().vertices().iter().enumerate() {
            u[space.map.index(v, 1)] = a * x[1];
            u[space.map.phi_index(v)] = 1.0;
        }
        let st = LinearizationState::frozen(&space.map, u.clone(), 0.0);
        // all outer faces: y-traction on top is (lambda + 2 mu) a, bottom the negative,
        // sides carry sigma_xy = 0
        let total = boundary_load(&space, &st, &params, SplitKind::NoSplit, BoundaryId::Outer, 1).unwrap();
        assert!(total.abs() < 1e-12);
        let neg: Vec<f64> = u.iter().enumerate().map(|(i, &x)| if space.map.is_phi(i) { x } else { -x }).collect();
        let st_neg = LinearizationState::frozen(&space.map, neg, 0.0);
        let lx = boundary_load(&space, &st, &params, SplitKind::NoSplit, BoundaryId::Outer, 0).unwrap();
        let lx_neg = boundary_load(&space, &st_neg, &params, SplitKind::NoSplit, BoundaryId::Outer, 0).unwrap();
        assert!((lx + lx_neg).abs() < 1e-14);
        assert!(boundary_load(&space, &st, &params, SplitKind::NoSplit, BoundaryId::Loaded, 1).is_err());
        assert!(boundary_load(&space, &st, &params, SplitKind::NoSplit, BoundaryId::Outer, 2).is_err());
    }

    #[test]
    fn all_constrained_operator_is_identity() {
        let (h, params) = unit_setup(2);
        let space = LevelSpace::new(h.finest(), 1, &params);
        let n = space.n_dofs();
        let mut mask = ConstraintMask::none(n);
        mask.is_constrained.iter_mut().for_each(|c| *c = true);
        let st = LinearizationState::frozen(&space.map, vec![0.5; n], 0.0);
        let v: Vec<f64> = (0..n).map(|i| i as f64 * 0.1 - 1.0).collect();
        assert_eq!(jacobian_vmult(&space, &st, &mask, &params, SplitKind::Miehe, &v), v);
        assert!(diagonal(&space, &st, &mask, &params, SplitKind::Miehe).iter().all(|&d| d == 1.0));
        let zero = jacobian_vmult(&space, &st, &ConstraintMask::none(n), &params, SplitKind::NoSplit, &vec![0.0; n]);
        assert!(zero.iter().all(|&x| x == 0.0));
    }
}

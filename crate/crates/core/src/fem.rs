//! Q1 finite-element substrate: reference basis, quadrature, DoF numbering,
//! cell-local gather/scatter with constraint filtering and the cell loop that
//! all matrix-free operators are built on.

use rayon::prelude::*;

use crate::error::{invalid, Result};
use crate::mesh::LevelMesh;
use crate::scalar::Real;

/// Cell loops with at least this many cells are evaluated in parallel.
pub const PARALLEL_CELL_THRESHOLD: usize = 64;

/// Tensor-product rule on the reference cell `[0,1]^dim`.
#[derive(Debug, Clone)]
pub struct QuadratureRule<T> {
    dim: usize,
    points: Vec<[T; 3]>,
    weights: Vec<T>,
}

impl<T: Real> QuadratureRule<T> {
    fn tensor(dim: usize, pts_1d: [T; 2], w_1d: [T; 2]) -> Self {
        let n = 1usize << dim;
        let mut points = Vec::with_capacity(n);
        let mut weights = Vec::with_capacity(n);
        for k in 0..n {
            let mut p = [T::zero(); 3];
            let mut w = T::one();
            for d in 0..dim {
                let i = (k >> d) & 1;
                p[d] = pts_1d[i];
                w *= w_1d[i];
            }
            points.push(p);
            weights.push(w);
        }
        Self { dim, points, weights }
    }

    /// Two-point Gauss rule per direction (exact for degree 3 per direction).
    pub fn gauss(dim: usize) -> Self {
        let off = T::lit(0.5) / T::lit(3.0).sqrt();
        let half = T::lit(0.5);
        Self::tensor(dim, [half - off, half + off], [half, half])
    }

    /// Two-point Gauss-Lobatto rule per direction; points are the cell vertices.
    pub fn gauss_lobatto(dim: usize) -> Self {
        let half = T::lit(0.5);
        Self::tensor(dim, [T::zero(), T::one()], [half, half])
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn points(&self) -> &[[T; 3]] {
        &self.points
    }

    pub fn weights(&self) -> &[T] {
        &self.weights
    }
}

/// Values and reference gradients of the `2^dim` Q1 basis functions.
///
/// Corner `k` sits at `((k>>0)&1, (k>>1)&1, (k>>2)&1)`.
pub fn shape_eval<T: Real>(dim: usize, p: &[T; 3]) -> (Vec<T>, Vec<[T; 3]>) {
    let n = 1usize << dim;
    let mut values = vec![T::one(); n];
    let mut grads = vec![[T::zero(); 3]; n];
    for k in 0..n {
        let mut g = [T::one(); 3];
        for d in 0..dim {
            let (f, df) = if (k >> d) & 1 == 1 {
                (p[d], T::one())
            } else {
                (T::one() - p[d], -T::one())
            };
            values[k] *= f;
            for (e, ge) in g.iter_mut().enumerate().take(dim) {
                *ge *= if e == d { df } else { f };
            }
        }
        for d in dim..3 {
            g[d] = T::zero();
        }
        grads[k] = g;
    }
    (values, grads)
}

/// Q1 basis tabulated at the points of a quadrature rule for the (uniform)
/// cells of one level, with physical gradients and `JxW` weights.
#[derive(Debug, Clone)]
pub struct CellBasis<T> {
    dim: usize,
    n_q: usize,
    n_corner: usize,
    values: Vec<T>,
    grads: Vec<[T; 3]>,
    jxw: Vec<T>,
    ref_points: Vec<[T; 3]>,
}

impl<T: Real> CellBasis<T> {
    pub fn new(rule: &QuadratureRule<T>, cell_size: [T; 3]) -> Self {
        let dim = rule.dim();
        let n_corner = 1usize << dim;
        let vol = (0..dim).fold(T::one(), |a, d| a * cell_size[d]);
        let mut values = Vec::new();
        let mut grads = Vec::new();
        for p in rule.points() {
            let (v, g) = shape_eval(dim, p);
            values.extend(v);
            grads.extend(g.into_iter().map(|mut gk| {
                for d in 0..dim {
                    gk[d] /= cell_size[d];
                }
                gk
            }));
        }
        Self {
            dim,
            n_q: rule.len(),
            n_corner,
            values,
            grads,
            jxw: rule.weights().iter().map(|&w| w * vol).collect(),
            ref_points: rule.points().to_vec(),
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn n_q(&self) -> usize {
        self.n_q
    }

    pub fn n_corner(&self) -> usize {
        self.n_corner
    }

    #[inline]
    pub fn value(&self, q: usize, k: usize) -> T {
        self.values[q * self.n_corner + k]
    }

    #[inline]
    pub fn grad(&self, q: usize, k: usize) -> &[T; 3] {
        &self.grads[q * self.n_corner + k]
    }

    #[inline]
    pub fn jxw(&self, q: usize) -> T {
        self.jxw[q]
    }

    pub fn ref_point(&self, q: usize) -> &[T; 3] {
        &self.ref_points[q]
    }
}

/// Component of a global DoF.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Component {
    Displacement(usize),
    PhaseField,
}

/// Component-blocked numbering: `index = component * n_vertices + vertex`,
/// displacement components first, phase field last.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DofMap {
    pub level: usize,
    dim: usize,
    n_vertices: usize,
}

impl DofMap {
    pub fn new<T: Real>(level: usize, mesh: &LevelMesh<T>) -> Self {
        Self {
            level,
            dim: mesh.dim(),
            n_vertices: mesh.n_vertices(),
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn n_components(&self) -> usize {
        self.dim + 1
    }

    pub fn n_vertices(&self) -> usize {
        self.n_vertices
    }

    pub fn n_dofs(&self) -> usize {
        self.n_components() * self.n_vertices
    }

    #[inline]
    pub fn index(&self, vertex: usize, component: usize) -> usize {
        component * self.n_vertices + vertex
    }

    pub fn phi_index(&self, vertex: usize) -> usize {
        self.index(vertex, self.dim)
    }

    pub fn component_of(&self, i: usize) -> Component {
        let c = i / self.n_vertices;
        if c == self.dim {
            Component::PhaseField
        } else {
            Component::Displacement(c)
        }
    }

    pub fn vertex_of(&self, i: usize) -> usize {
        i % self.n_vertices
    }

    pub fn is_phi(&self, i: usize) -> bool {
        i >= self.dim * self.n_vertices
    }

    pub fn u_range(&self) -> std::ops::Range<usize> {
        0..self.dim * self.n_vertices
    }

    pub fn phi_range(&self) -> std::ops::Range<usize> {
        self.dim * self.n_vertices..self.n_dofs()
    }

    /// Local vector length per cell.
    pub fn dofs_per_cell(&self) -> usize {
        self.n_components() << self.dim
    }
}

/// Per-DoF constraint flags with prescribed values.
///
/// The filtered operator acts as the identity on constrained rows and ignores
/// constrained columns in unconstrained rows.
#[derive(Debug, Clone, PartialEq)]
pub struct ConstraintMask<T> {
    pub is_constrained: Vec<bool>,
    pub inhomogeneity: Vec<T>,
}

impl<T: Real> ConstraintMask<T> {
    pub fn none(n: usize) -> Self {
        Self {
            is_constrained: vec![false; n],
            inhomogeneity: vec![T::zero(); n],
        }
    }

    pub fn len(&self) -> usize {
        self.is_constrained.len()
    }

    pub fn is_empty(&self) -> bool {
        self.is_constrained.is_empty()
    }

    pub fn constrain(&mut self, i: usize, value: T) {
        self.is_constrained[i] = true;
        self.inhomogeneity[i] = value;
    }

    pub fn n_constrained(&self) -> usize {
        self.is_constrained.iter().filter(|&&c| c).count()
    }

    /// Zeroes constrained entries of `v`.
    pub fn zero_constrained(&self, v: &mut [T]) {
        for (x, &c) in v.iter_mut().zip(&self.is_constrained) {
            if c {
                *x = T::zero();
            }
        }
    }

    /// Writes the prescribed values into constrained entries of `v`.
    pub fn set_constrained(&self, v: &mut [T]) {
        for ((x, &c), &g) in v.iter_mut().zip(&self.is_constrained).zip(&self.inhomogeneity) {
            if c {
                *x = g;
            }
        }
    }
}

/// Gathers the local coefficients of `cell` (`local[comp * 2^dim + corner]`).
/// Constrained entries read as zero when a mask is given.
pub fn cell_gather<T: Real>(
    v: &[T],
    mesh: &LevelMesh<T>,
    map: &DofMap,
    cell: usize,
    mask: Option<&ConstraintMask<T>>,
    local: &mut [T],
) {
    let corners = mesh.cell(cell);
    let nc = corners.len();
    for comp in 0..map.n_components() {
        for (k, &vert) in corners.iter().enumerate() {
            let i = map.index(vert, comp);
            local[comp * nc + k] = match mask {
                Some(m) if m.is_constrained[i] => T::zero(),
                _ => v[i],
            };
        }
    }
}

/// Adds local contributions into `w`; constrained rows receive nothing when a
/// mask is given.
pub fn cell_scatter_add<T: Real>(
    local: &[T],
    mesh: &LevelMesh<T>,
    map: &DofMap,
    cell: usize,
    mask: Option<&ConstraintMask<T>>,
    w: &mut [T],
) {
    let corners = mesh.cell(cell);
    let nc = corners.len();
    for comp in 0..map.n_components() {
        for (k, &vert) in corners.iter().enumerate() {
            let i = map.index(vert, comp);
            if let Some(m) = mask {
                if m.is_constrained[i] {
                    continue;
                }
            }
            w[i] += local[comp * nc + k];
        }
    }
}

/// Evaluates `kernel(cell, local_out)` for every cell (in parallel on large
/// meshes) and returns the flat buffer of local results, cell after cell.
pub fn map_cells<T, F>(n_cells: usize, n_local: usize, kernel: F) -> Vec<T>
where
    T: Real,
    F: Fn(usize, &mut [T]) + Sync + Send,
{
    let mut buf = vec![T::zero(); n_cells * n_local];
    if n_local == 0 {
        return buf;
    }
    if n_cells >= PARALLEL_CELL_THRESHOLD {
        buf.par_chunks_mut(n_local)
            .enumerate()
            .for_each(|(c, out)| kernel(c, out));
    } else {
        buf.chunks_mut(n_local).enumerate().for_each(|(c, out)| kernel(c, out));
    }
    buf
}

/// Matrix-free product `dst = sum_k C^T P_k^T G_k P_k C src`.
///
/// Local results are computed concurrently but scattered in cell order, so the
/// result does not depend on the number of threads. With a mask, constrained
/// rows are set to `src` (identity).
pub fn apply_cellwise<T, F>(
    mesh: &LevelMesh<T>,
    map: &DofMap,
    mask: Option<&ConstraintMask<T>>,
    src: &[T],
    dst: &mut [T],
    kernel: F,
) where
    T: Real,
    F: Fn(usize, &[T], &mut [T]) + Sync + Send,
{
    let nl = map.dofs_per_cell();
    let buf = map_cells(mesh.n_cells(), nl, |c, out| {
        let mut local = vec![T::zero(); nl];
        cell_gather(src, mesh, map, c, mask, &mut local);
        kernel(c, &local, out);
    });
    dst.iter_mut().for_each(|x| *x = T::zero());
    for (c, chunk) in buf.chunks(nl).enumerate() {
        cell_scatter_add(chunk, mesh, map, c, mask, dst);
    }
    if let Some(m) = mask {
        for (i, &c) in m.is_constrained.iter().enumerate() {
            if c {
                dst[i] = src[i];
            }
        }
    }
}

/// Diagonal lumped mass per vertex, assembled with Gauss-Lobatto quadrature.
pub fn lumped_mass<T: Real>(mesh: &LevelMesh<T>) -> Vec<T> {
    let rule = QuadratureRule::gauss_lobatto(mesh.dim());
    let basis = CellBasis::new(&rule, mesh.cell_size());
    let mut m = vec![T::zero(); mesh.n_vertices()];
    for c in 0..mesh.n_cells() {
        for (k, &v) in mesh.cell(c).iter().enumerate() {
            for q in 0..basis.n_q() {
                m[v] += basis.value(q, k) * basis.jxw(q);
            }
        }
    }
    m
}

/// Grid transfer between level `l` (coarse) and `l + 1` (fine).
#[derive(Debug, Clone)]
pub struct LevelTransfer<T> {
    n_coarse: usize,
    n_fine: usize,
    // CSR over fine vertices: interpolation weights of coarse vertices
    offsets: Vec<usize>,
    cols: Vec<usize>,
    weights: Vec<T>,
    // coarse vertex -> coincident fine vertex
    injection: Vec<usize>,
}

impl<T: Real> LevelTransfer<T> {
    pub fn new(coarse: &LevelMesh<T>, fine: &LevelMesh<T>) -> Self {
        let dim = coarse.dim();
        let mut rows: Vec<Vec<(usize, T)>> = vec![Vec::new(); fine.n_vertices()];
        let mut seen = vec![false; fine.n_vertices()];
        let half = T::lit(0.5);
        let n_sub = 3usize.pow(dim as u32);
        for c in 0..coarse.n_cells() {
            let corners = coarse.cell(c);
            let base = coarse.vertex_lattice(corners[0]);
            for s in 0..n_sub {
                let mut off = [0i64; 3];
                let mut rest = s;
                for o in off.iter_mut().take(dim) {
                    *o = (rest % 3) as i64;
                    rest /= 3;
                }
                let mut lat = [0i64; 3];
                for d in 0..dim {
                    lat[d] = 2 * base[d] + off[d];
                }
                let fv = fine.vertex_at_lattice(&lat).expect("nested meshes");
                if seen[fv] {
                    continue;
                }
                seen[fv] = true;
                for (k, &cv) in corners.iter().enumerate() {
                    let mut w = T::one();
                    for d in 0..dim {
                        let bit = ((k >> d) & 1) as i64;
                        w *= match (off[d], bit) {
                            (1, _) => half,
                            (o, b) if o == 2 * b => T::one(),
                            _ => T::zero(),
                        };
                    }
                    if w != T::zero() {
                        rows[fv].push((cv, w));
                    }
                }
            }
        }
        let mut offsets = Vec::with_capacity(fine.n_vertices() + 1);
        let mut cols = Vec::new();
        let mut weights = Vec::new();
        offsets.push(0);
        for r in rows {
            for (cv, w) in r {
                cols.push(cv);
                weights.push(w);
            }
            offsets.push(cols.len());
        }
        let injection = (0..coarse.n_vertices())
            .map(|v| {
                let p = coarse.vertex_lattice(v);
                fine.vertex_at_lattice(&[2 * p[0], 2 * p[1], 2 * p[2]])
                    .expect("coarse vertex persists")
            })
            .collect();
        Self {
            n_coarse: coarse.n_vertices(),
            n_fine: fine.n_vertices(),
            offsets,
            cols,
            weights,
            injection,
        }
    }

    pub fn n_coarse_vertices(&self) -> usize {
        self.n_coarse
    }

    pub fn n_fine_vertices(&self) -> usize {
        self.n_fine
    }

    /// Fine vertex coincident with a coarse vertex.
    pub fn injection(&self) -> &[usize] {
        &self.injection
    }

    fn n_comp(&self, len: usize, n: usize) -> Result<usize> {
        if n == 0 || len % n != 0 {
            return Err(invalid(format!("vector of length {len} does not match {n} vertices")));
        }
        Ok(len / n)
    }

    /// Q1 interpolation of a coarse vector (any number of components).
    pub fn prolongate(&self, coarse: &[T]) -> Result<Vec<T>> {
        let nc = self.n_comp(coarse.len(), self.n_coarse)?;
        let mut fine = vec![T::zero(); nc * self.n_fine];
        for comp in 0..nc {
            let src = &coarse[comp * self.n_coarse..(comp + 1) * self.n_coarse];
            let dst = &mut fine[comp * self.n_fine..(comp + 1) * self.n_fine];
            for (fv, d) in dst.iter_mut().enumerate() {
                let mut s = T::zero();
                for j in self.offsets[fv]..self.offsets[fv + 1] {
                    s += self.weights[j] * src[self.cols[j]];
                }
                *d = s;
            }
        }
        Ok(fine)
    }

    /// Transpose of [`Self::prolongate`] (residual restriction).
    pub fn restrict(&self, fine: &[T]) -> Result<Vec<T>> {
        let nc = self.n_comp(fine.len(), self.n_fine)?;
        let mut coarse = vec![T::zero(); nc * self.n_coarse];
        for comp in 0..nc {
            let src = &fine[comp * self.n_fine..(comp + 1) * self.n_fine];
            let dst = &mut coarse[comp * self.n_coarse..(comp + 1) * self.n_coarse];
            for (fv, &s) in src.iter().enumerate() {
                for j in self.offsets[fv]..self.offsets[fv + 1] {
                    dst[self.cols[j]] += self.weights[j] * s;
                }
            }
        }
        Ok(coarse)
    }

    /// Nodal injection: each coarse vertex takes the value of its coincident fine vertex.
    pub fn restrict_nodal<V: Copy>(&self, fine: &[V]) -> Result<Vec<V>> {
        let nc = self.n_comp(fine.len(), self.n_fine)?;
        let mut out = Vec::with_capacity(nc * self.n_coarse);
        for comp in 0..nc {
            out.extend(self.injection.iter().map(|&fv| fine[comp * self.n_fine + fv]));
        }
        Ok(out)
    }
}

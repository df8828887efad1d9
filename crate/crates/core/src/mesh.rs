//! Nested structured quadrilateral / hexahedral mesh hierarchies.
//!
//! Every hierarchy starts from a handful of equally sized axis-aligned boxes
//! placed on an integer lattice. Level `l` splits each coarse box into
//! `2^(l*dim)` congruent children, so all cells of a level share one size and
//! every vertex of level `l` reappears on level `l + 1` at lattice coordinate
//! `2 * x`.

use std::collections::{BTreeSet, HashMap, HashSet};

use crate::error::{invalid, Result};
use crate::scalar::Real;

/// Boundary classification of a mesh face.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum BoundaryId {
    Outer,
    Fixed,
    Loaded,
    /// Traction-free boundary on which the reaction load is evaluated.
    TractionFree,
}

/// Axis-aligned box. Components beyond the mesh dimension are ignored.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Aabb<T> {
    pub min: [T; 3],
    pub max: [T; 3],
}

impl<T: Real> Aabb<T> {
    pub fn new(min: [T; 3], max: [T; 3]) -> Self {
        Self { min, max }
    }

    /// Positive-measure overlap of the closures in the first `dim` axes.
    pub fn overlaps(&self, other: &Aabb<T>, dim: usize) -> bool {
        (0..dim).all(|d| self.max[d].min(other.max[d]) - self.min[d].max(other.min[d]) > T::zero())
    }

    pub fn contains_point(&self, p: &[T; 3], dim: usize) -> bool {
        (0..dim).all(|d| p[d] >= self.min[d] && p[d] <= self.max[d])
    }

    pub fn volume(&self, dim: usize) -> T {
        (0..dim).fold(T::one(), |acc, d| acc * (self.max[d] - self.min[d]))
    }
}

/// A boundary face: `face = 2 * axis + side` where side 0 is the lower face.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BoundaryFace {
    pub cell: usize,
    pub face: usize,
    pub id: BoundaryId,
}

impl BoundaryFace {
    pub fn axis(&self) -> usize {
        self.face / 2
    }

    /// +1 for the upper face along the axis, -1 for the lower one.
    pub fn normal_sign(&self) -> i32 {
        if self.face % 2 == 1 {
            1
        } else {
            -1
        }
    }
}

/// One level of the hierarchy.
#[derive(Debug, Clone)]
pub struct LevelMesh<T> {
    dim: usize,
    vertices: Vec<[T; 3]>,
    cells: Vec<usize>,
    boundary_faces: Vec<BoundaryFace>,
    cell_size: [T; 3],
    vertex_lattice: Vec<[i64; 3]>,
    cell_lattice: Vec<[i64; 3]>,
    lattice_index: HashMap<[i64; 3], usize>,
}

impl<T: Real> LevelMesh<T> {
    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn corners_per_cell(&self) -> usize {
        1 << self.dim
    }

    pub fn n_vertices(&self) -> usize {
        self.vertices.len()
    }

    pub fn n_cells(&self) -> usize {
        self.cell_lattice.len()
    }

    pub fn vertices(&self) -> &[[T; 3]] {
        &self.vertices
    }

    pub fn vertex(&self, v: usize) -> [T; 3] {
        self.vertices[v]
    }

    /// Vertex indices of a cell in lexicographic corner order (x fastest).
    pub fn cell(&self, c: usize) -> &[usize] {
        let n = self.corners_per_cell();
        &self.cells[c * n..(c + 1) * n]
    }

    pub fn boundary_faces(&self) -> &[BoundaryFace] {
        &self.boundary_faces
    }

    /// Edge lengths shared by all cells of this level.
    pub fn cell_size(&self) -> [T; 3] {
        self.cell_size
    }

    pub fn cell_volume(&self) -> T {
        (0..self.dim).fold(T::one(), |acc, d| acc * self.cell_size[d])
    }

    pub fn cell_diameter(&self) -> T {
        (0..self.dim)
            .map(|d| self.cell_size[d] * self.cell_size[d])
            .sum::<T>()
            .sqrt()
    }

    /// Lower corner of a cell.
    pub fn cell_origin(&self, c: usize) -> [T; 3] {
        self.vertices[self.cell(c)[0]]
    }

    pub fn cell_box(&self, c: usize) -> Aabb<T> {
        let lo = self.cell_origin(c);
        let mut hi = lo;
        for d in 0..self.dim {
            hi[d] = lo[d] + self.cell_size[d];
        }
        Aabb::new(lo, hi)
    }

    /// Integer lattice coordinate of a vertex on this level.
    pub fn vertex_lattice(&self, v: usize) -> [i64; 3] {
        self.vertex_lattice[v]
    }

    pub fn vertex_at_lattice(&self, p: &[i64; 3]) -> Option<usize> {
        self.lattice_index.get(p).copied()
    }

    /// Vertices touching at least one face with the given tag, sorted.
    pub fn boundary_vertices(&self, id: BoundaryId) -> Vec<usize> {
        let mut set = BTreeSet::new();
        for f in self.boundary_faces.iter().filter(|f| f.id == id) {
            set.extend(self.face_vertices(f.cell, f.face));
        }
        set.into_iter().collect()
    }

    /// Corner vertices of a cell face.
    pub fn face_vertices(&self, cell: usize, face: usize) -> Vec<usize> {
        let axis = face / 2;
        let side = face % 2;
        let corners = self.cell(cell);
        (0..self.corners_per_cell())
            .filter(|k| (k >> axis) & 1 == side)
            .map(|k| corners[k])
            .collect()
    }
}

/// `n_levels` nested meshes, ordered coarse to fine.
#[derive(Debug, Clone)]
pub struct GridHierarchy<T> {
    dim: usize,
    levels: Vec<LevelMesh<T>>,
    coarse_cells: Vec<Aabb<T>>,
    bounds: Aabb<T>,
}

impl<T: Real> GridHierarchy<T> {
    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn n_levels(&self) -> usize {
        self.levels.len()
    }

    pub fn level(&self, l: usize) -> &LevelMesh<T> {
        &self.levels[l]
    }

    pub fn finest(&self) -> &LevelMesh<T> {
        self.levels.last().expect("hierarchy has at least one level")
    }

    pub fn levels(&self) -> &[LevelMesh<T>] {
        &self.levels
    }

    pub fn coarse_cells(&self) -> &[Aabb<T>] {
        &self.coarse_cells
    }

    pub fn bounding_box(&self) -> Aabb<T> {
        self.bounds
    }

    pub fn domain_volume(&self) -> T {
        self.coarse_cells.iter().map(|b| b.volume(self.dim)).sum()
    }
}

/// Coarse block layout on an integer lattice.
struct CoarseLayout<T> {
    dim: usize,
    origin: [T; 3],
    edge: [T; 3],
    blocks: Vec<[i64; 3]>,
}

type Tagger<'a, T> = dyn Fn(&Aabb<T>, usize) -> BoundaryId + 'a;

fn build<T: Real>(layout: CoarseLayout<T>, n_levels: usize, tagger: &Tagger<'_, T>) -> GridHierarchy<T> {
    let dim = layout.dim;
    let coarse_cells: Vec<Aabb<T>> = layout
        .blocks
        .iter()
        .map(|b| {
            let mut lo = [T::zero(); 3];
            let mut hi = [T::zero(); 3];
            for d in 0..dim {
                lo[d] = layout.origin[d] + T::lit(b[d] as f64) * layout.edge[d];
                hi[d] = lo[d] + layout.edge[d];
            }
            Aabb::new(lo, hi)
        })
        .collect();
    let mut bounds = coarse_cells[0];
    for b in &coarse_cells[1..] {
        for d in 0..dim {
            bounds.min[d] = bounds.min[d].min(b.min[d]);
            bounds.max[d] = bounds.max[d].max(b.max[d]);
        }
    }

    let mut levels = Vec::with_capacity(n_levels);
    let mut cell_lattice = layout.blocks.clone();
    for l in 0..n_levels {
        if l > 0 {
            let n_child = 1usize << dim;
            let mut next = Vec::with_capacity(cell_lattice.len() * n_child);
            for parent in &cell_lattice {
                for k in 0..n_child {
                    let mut c = [0i64; 3];
                    for d in 0..dim {
                        c[d] = 2 * parent[d] + ((k >> d) & 1) as i64;
                    }
                    next.push(c);
                }
            }
            cell_lattice = next;
        }
        let scale = T::lit((1u64 << l) as f64);
        let mut unit = [T::zero(); 3];
        for d in 0..dim {
            unit[d] = layout.edge[d] / scale;
        }
        levels.push(build_level(dim, &layout.origin, unit, cell_lattice.clone(), tagger));
    }

    GridHierarchy {
        dim,
        levels,
        coarse_cells,
        bounds,
    }
}

fn build_level<T: Real>(
    dim: usize,
    origin: &[T; 3],
    unit: [T; 3],
    cell_lattice: Vec<[i64; 3]>,
    tagger: &Tagger<'_, T>,
) -> LevelMesh<T> {
    let n_corner = 1usize << dim;
    let corner_of = |c: &[i64; 3], k: usize| {
        let mut p = *c;
        for d in 0..dim {
            p[d] += ((k >> d) & 1) as i64;
        }
        p
    };

    // Sorted by (z, y, x) so vertex numbering is lexicographic.
    let mut lattice_set = BTreeSet::new();
    for c in &cell_lattice {
        for k in 0..n_corner {
            let p = corner_of(c, k);
            lattice_set.insert([p[2], p[1], p[0]]);
        }
    }
    let vertex_lattice: Vec<[i64; 3]> = lattice_set.into_iter().map(|p| [p[2], p[1], p[0]]).collect();
    let lattice_index: HashMap<[i64; 3], usize> =
        vertex_lattice.iter().enumerate().map(|(i, p)| (*p, i)).collect();
    let vertices: Vec<[T; 3]> = vertex_lattice
        .iter()
        .map(|p| {
            let mut x = [T::zero(); 3];
            for d in 0..dim {
                x[d] = origin[d] + T::lit(p[d] as f64) * unit[d];
            }
            x
        })
        .collect();

    let mut cells = Vec::with_capacity(cell_lattice.len() * n_corner);
    for c in &cell_lattice {
        for k in 0..n_corner {
            cells.push(lattice_index[&corner_of(c, k)]);
        }
    }

    let occupied: HashSet<[i64; 3]> = cell_lattice.iter().copied().collect();
    let mut boundary_faces = Vec::new();
    for (ci, c) in cell_lattice.iter().enumerate() {
        for axis in 0..dim {
            for side in 0..2 {
                let mut nb = *c;
                nb[axis] += if side == 1 { 1 } else { -1 };
                if occupied.contains(&nb) {
                    continue;
                }
                let lo_v = &vertices[cells[ci * n_corner]];
                let mut fb = Aabb::new(*lo_v, *lo_v);
                for d in 0..dim {
                    fb.max[d] = lo_v[d] + unit[d];
                }
                let plane = if side == 1 { fb.max[axis] } else { fb.min[axis] };
                fb.min[axis] = plane;
                fb.max[axis] = plane;
                boundary_faces.push(BoundaryFace {
                    cell: ci,
                    face: 2 * axis + side,
                    id: tagger(&fb, axis),
                });
            }
        }
    }

    LevelMesh {
        dim,
        vertices,
        cells,
        boundary_faces,
        cell_size: unit,
        vertex_lattice,
        cell_lattice,
        lattice_index,
    }
}

/// Square `(0, side)^2` made of one coarse cell, refined `n_levels - 1` times.
/// All boundary faces are tagged [`BoundaryId::Outer`].
pub fn build_square<T: Real>(side_length: T, n_levels: usize) -> Result<GridHierarchy<T>> {
    if !(side_length > T::zero()) {
        return Err(invalid(format!("side length must be positive, got {side_length}")));
    }
    if n_levels == 0 {
        return Err(invalid("at least one level is required"));
    }
    let layout = CoarseLayout {
        dim: 2,
        origin: [T::zero(); 3],
        edge: [side_length; 3],
        blocks: vec![[0, 0, 0]],
    };
    Ok(build(layout, n_levels, &|_, _| BoundaryId::Outer))
}

/// L-shaped panel `(0,s)^2 \ ((s/2,s) x (0,s/2))`, optionally extruded in z.
///
/// Face tags (overlap with positive measure decides membership):
/// `Fixed` on `(0, s/2) x {0}`, `Loaded` on `(s - 30 s/500, s) x {s/2}`,
/// `TractionFree` on the top edge `y = s`, `Outer` everywhere else.
pub fn build_lshape<T: Real>(side_length: T, n_levels: usize, extrude: Option<T>) -> Result<GridHierarchy<T>> {
    if !(side_length > T::zero()) {
        return Err(invalid(format!("side length must be positive, got {side_length}")));
    }
    if n_levels == 0 {
        return Err(invalid("at least one level is required"));
    }
    if let Some(depth) = extrude {
        if !(depth > T::zero()) {
            return Err(invalid(format!("extrusion depth must be positive, got {depth}")));
        }
    }
    let half = side_length / T::lit(2.0);
    let dim = if extrude.is_some() { 3 } else { 2 };
    let layout = CoarseLayout {
        dim,
        origin: [T::zero(); 3],
        edge: [half, half, extrude.unwrap_or(half)],
        blocks: vec![[0, 0, 0], [0, 1, 0], [1, 1, 0]],
    };
    let s = side_length;
    let load_lo = s - T::lit(30.0 / 500.0) * s;
    let tagger = move |f: &Aabb<T>, axis: usize| {
        if axis != 1 {
            return BoundaryId::Outer;
        }
        let y = f.min[1];
        let overlap = |lo: T, hi: T| f.max[0].min(hi) - f.min[0].max(lo) > T::zero();
        if y == T::zero() && overlap(T::zero(), half) {
            BoundaryId::Fixed
        } else if y == half && overlap(load_lo, s) {
            BoundaryId::Loaded
        } else if y == s {
            BoundaryId::TractionFree
        } else {
            BoundaryId::Outer
        }
    };
    Ok(build(layout, n_levels, &tagger))
}

/// Cells whose closure overlaps `region` with positive measure.
pub fn locate_cells<T: Real>(mesh: &LevelMesh<T>, region: &Aabb<T>) -> Vec<usize> {
    (0..mesh.n_cells())
        .filter(|&c| mesh.cell_box(c).overlaps(region, mesh.dim()))
        .collect()
}

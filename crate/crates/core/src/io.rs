//! Output writers: per-step CSV metrics and legacy ASCII VTK snapshots.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use crate::error::Result;
use crate::fem::DofMap;
use crate::mesh::LevelMesh;
use crate::model::LevelSpace;
use crate::scalar::Real;
use crate::scenarios::{RunObserver, TimestepRecord};

pub const CSV_HEADER: [&str; 9] = [
    "step",
    "time",
    "as_iters",
    "gmres_total",
    "gmres_mean",
    "load_y",
    "crack_energy",
    "bulk_energy",
    "n_active",
];

/// Float with 17 significant digits.
pub fn fmt_f64(x: f64) -> String {
    format!("{x:.16e}")
}

/// Appends one row per time step and flushes after every row.
pub struct CsvSink<W: Write> {
    writer: csv::Writer<W>,
}

impl CsvSink<File> {
    pub fn create(path: &Path) -> Result<Self> {
        Self::new(File::create(path)?)
    }
}

impl<W: Write> CsvSink<W> {
    pub fn new(inner: W) -> Result<Self> {
        let mut writer = csv::Writer::from_writer(inner);
        writer.write_record(CSV_HEADER).map_err(csv_err)?;
        writer.flush()?;
        Ok(Self { writer })
    }

    pub fn write(&mut self, r: &TimestepRecord) -> Result<()> {
        let row = [
            r.step.to_string(),
            fmt_f64(r.time),
            r.active_set_iters.to_string(),
            r.gmres_total().to_string(),
            fmt_f64(r.gmres_mean()),
            fmt_f64(r.load),
            fmt_f64(r.crack_energy),
            fmt_f64(r.bulk_energy),
            r.n_active.to_string(),
        ];
        self.writer.write_record(&row).map_err(csv_err)?;
        self.writer.flush()?;
        Ok(())
    }

    pub fn into_inner(self) -> Option<W> {
        self.writer.into_inner().ok()
    }
}

fn csv_err(e: csv::Error) -> crate::error::Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => io.into(),
        other => crate::error::Error::Internal(format!("csv: {other:?}")),
    }
}

impl<T: Real, W: Write> RunObserver<T> for CsvSink<W> {
    fn on_step(&mut self, record: &TimestepRecord, _space: &LevelSpace<'_, T>, _u: &[T]) -> Result<()> {
        self.write(record)
    }
}

/// Writes the finest-level solution as a legacy ASCII VTK unstructured grid
/// with point data `displacement` and `phase_field`.
pub fn write_vtk<T: Real, W: Write>(out: &mut W, mesh: &LevelMesh<T>, map: &DofMap, u: &[T]) -> Result<()> {
    let dim = mesh.dim();
    let nv = mesh.n_vertices();
    let nc = mesh.n_cells();
    let corners = mesh.corners_per_cell();
    writeln!(out, "# vtk DataFile Version 3.0")?;
    writeln!(out, "phase-field fracture solution")?;
    writeln!(out, "ASCII")?;
    writeln!(out, "DATASET UNSTRUCTURED_GRID")?;
    writeln!(out, "POINTS {nv} double")?;
    for x in mesh.vertices() {
        writeln!(out, "{} {} {}", x[0], x[1], x[2])?;
    }
    // lexicographic corner order -> VTK counter-clockwise order
    let order: &[usize] = if dim == 2 { &[0, 1, 3, 2] } else { &[0, 1, 3, 2, 4, 5, 7, 6] };
    writeln!(out, "CELLS {nc} {}", nc * (corners + 1))?;
    for c in 0..nc {
        let cell = mesh.cell(c);
        write!(out, "{corners}")?;
        for &k in order {
            write!(out, " {}", cell[k])?;
        }
        writeln!(out)?;
    }
    writeln!(out, "CELL_TYPES {nc}")?;
    let ty = if dim == 2 { 9 } else { 12 };
    for _ in 0..nc {
        writeln!(out, "{ty}")?;
    }
    writeln!(out, "POINT_DATA {nv}")?;
    writeln!(out, "VECTORS displacement double")?;
    for v in 0..nv {
        let mut comps = [T::zero(); 3];
        for (d, c) in comps.iter_mut().enumerate().take(dim) {
            *c = u[map.index(v, d)];
        }
        writeln!(out, "{} {} {}", comps[0], comps[1], comps[2])?;
    }
    writeln!(out, "SCALARS phase_field double 1")?;
    writeln!(out, "LOOKUP_TABLE default")?;
    for v in 0..nv {
        writeln!(out, "{}", u[map.phi_index(v)])?;
    }
    Ok(())
}

pub fn write_vtk_file<T: Real>(path: &Path, mesh: &LevelMesh<T>, map: &DofMap, u: &[T]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_vtk(&mut w, mesh, map, u)?;
    w.flush()?;
    Ok(())
}

/// Writes `solution_NNNNN.vtk` for the initial state and every `every`-th step.
pub struct VtkSink {
    dir: PathBuf,
    every: usize,
    pub written: Vec<PathBuf>,
}

impl VtkSink {
    pub fn new(dir: impl Into<PathBuf>, every: usize) -> Self {
        Self {
            dir: dir.into(),
            every,
            written: Vec::new(),
        }
    }

    fn write<T: Real>(&mut self, step: usize, space: &LevelSpace<'_, T>, u: &[T]) -> Result<()> {
        let path = self.dir.join(format!("solution_{step:05}.vtk"));
        write_vtk_file(&path, space.mesh, &space.map, u)?;
        self.written.push(path);
        Ok(())
    }
}

impl<T: Real> RunObserver<T> for VtkSink {
    fn on_start(&mut self, space: &LevelSpace<'_, T>, u: &[T]) -> Result<()> {
        if self.every > 0 {
            self.write(0, space, u)?;
        }
        Ok(())
    }

    fn on_step(&mut self, record: &TimestepRecord, space: &LevelSpace<'_, T>, u: &[T]) -> Result<()> {
        if self.every > 0 && record.step % self.every == 0 {
            self.write(record.step, space, u)?;
        }
        Ok(())
    }
}

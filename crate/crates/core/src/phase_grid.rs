//! Phase space `Ω × S`: uniform Cartesian cells times a discrete-ordinates
//! quadrature of the unit circle (or the two-point sphere of a rod).
//!
//! Fields are stored cell-major, direction-minor. Boundary traces are stored
//! per *slot*, a (boundary face, direction) pair with nonzero `ν·θ`. Outflow
//! and inflow slots are ordered so that inflow slot `j` is the image of
//! outflow slot `j` under `θ ↦ −θ`; the time reflection is then a pure index
//! reversal in time.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Faces whose `|ν·θ|` falls below this carry no flux.
pub const GRAZING_TOL: f64 = 1e-12;

/// Convex spatial domain.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Geometry {
    Rod1d { length: f64 },
    Box2d { width: f64, height: f64 },
    Disk2d { radius: f64 },
}

impl Geometry {
    /// Diameter of the domain.
    pub fn diameter(&self) -> f64 {
        match *self {
            Geometry::Rod1d { length } => length,
            Geometry::Box2d { width, height } => width.hypot(height),
            Geometry::Disk2d { radius } => 2.0 * radius,
        }
    }

    pub fn dim(&self) -> usize {
        match self {
            Geometry::Rod1d { .. } => 1,
            _ => 2,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GeometryConfig {
    #[serde(flatten)]
    pub geometry: Geometry,
    /// Cells per axis. One entry applies to every axis.
    pub n_cells: Vec<usize>,
    /// Number of ordinates on the circle (ignored for the rod).
    #[serde(default = "default_n_theta")]
    pub n_theta: usize,
    /// Particle speed.
    #[serde(default = "default_speed")]
    pub c: f64,
}

fn default_n_theta() -> usize {
    8
}

fn default_speed() -> f64 {
    1.0
}

impl GeometryConfig {
    pub fn rod(length: f64, n: usize, c: f64) -> Self {
        Self {
            geometry: Geometry::Rod1d { length },
            n_cells: vec![n],
            n_theta: 2,
            c,
        }
    }

    pub fn square(side: f64, n: usize, n_theta: usize, c: f64) -> Self {
        Self {
            geometry: Geometry::Box2d {
                width: side,
                height: side,
            },
            n_cells: vec![n, n],
            n_theta,
            c,
        }
    }

    pub fn disk(radius: f64, n: usize, n_theta: usize, c: f64) -> Self {
        Self {
            geometry: Geometry::Disk2d { radius },
            n_cells: vec![n],
            n_theta,
            c,
        }
    }

    /// Same domain and angles, `factor` times more cells per axis.
    pub fn refined(&self, factor: usize) -> Self {
        let mut out = self.clone();
        out.n_cells = self.n_cells.iter().map(|n| n * factor).collect();
        out
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Side {
    XMinus = 0,
    XPlus = 1,
    YMinus = 2,
    YPlus = 3,
}

impl Side {
    pub const ALL: [Side; 4] = [Side::XMinus, Side::XPlus, Side::YMinus, Side::YPlus];

    pub fn normal(self) -> [f64; 2] {
        match self {
            Side::XMinus => [-1.0, 0.0],
            Side::XPlus => [1.0, 0.0],
            Side::YMinus => [0.0, -1.0],
            Side::YPlus => [0.0, 1.0],
        }
    }

    fn axis(self) -> usize {
        (self as usize) / 2
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Face {
    pub cell: usize,
    pub side: Side,
    pub normal: [f64; 2],
    /// Length (2D) or unit count (1D) of the face.
    pub measure: f64,
    /// Cell width normal to the face.
    pub spacing: f64,
}

/// A (boundary face, direction) pair with nonzero normal flux.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Slot {
    pub face: usize,
    pub dir: usize,
}

/// Which part of `∂Ω × S` a trace lives on.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TracePart {
    Inflow,
    Outflow,
    Full,
}

impl TracePart {
    pub fn flipped(self) -> Self {
        match self {
            TracePart::Inflow => TracePart::Outflow,
            TracePart::Outflow => TracePart::Inflow,
            TracePart::Full => TracePart::Full,
        }
    }

    pub(crate) fn code(self) -> u32 {
        match self {
            TracePart::Inflow => 0,
            TracePart::Outflow => 1,
            TracePart::Full => 2,
        }
    }

    pub(crate) fn from_code(code: u32) -> Option<Self> {
        match code {
            0 => Some(TracePart::Inflow),
            1 => Some(TracePart::Outflow),
            2 => Some(TracePart::Full),
            _ => None,
        }
    }
}

/// Upwind side used by [`PhaseSpaceGrid::directional_derivative`].
///
/// `Along` differences from the side `θ` comes from, approximating `θ·∇f`.
/// `Against` uses the opposite neighbour and is the exact transpose of the
/// `Along` stencil.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Upwind {
    Along,
    Against,
}

/// Per-direction streaming data along one axis.
#[derive(Clone, Copy, Debug)]
pub(crate) struct AxisStencil {
    pub coef: f64,
    pub upwind: Side,
    pub downwind: Side,
}

/// A discrete element of `V⁰`: one value per (cell, direction).
#[derive(Clone, Debug, PartialEq)]
pub struct Field {
    n_cells: usize,
    n_dirs: usize,
    values: Vec<f64>,
}

impl Field {
    pub fn zeros(grid: &PhaseSpaceGrid) -> Self {
        Self {
            n_cells: grid.n_cells(),
            n_dirs: grid.n_dirs(),
            values: vec![0.0; grid.n_dofs()],
        }
    }

    pub fn constant(grid: &PhaseSpaceGrid, value: f64) -> Self {
        Self {
            n_cells: grid.n_cells(),
            n_dirs: grid.n_dirs(),
            values: vec![value; grid.n_dofs()],
        }
    }

    pub fn from_values(grid: &PhaseSpaceGrid, values: Vec<f64>) -> Result<Self> {
        if values.len() != grid.n_dofs() {
            return Err(Error::ShapeMismatch {
                expected: grid.n_dofs(),
                found: values.len(),
            });
        }
        Ok(Self {
            n_cells: grid.n_cells(),
            n_dirs: grid.n_dirs(),
            values,
        })
    }

    /// Samples `f(x, θ)` at cell centres and ordinates.
    pub fn from_fn(grid: &PhaseSpaceGrid, f: impl Fn([f64; 2], [f64; 2]) -> f64) -> Self {
        let mut out = Self::zeros(grid);
        for (i, x) in grid.centers().iter().enumerate() {
            for (k, theta) in grid.directions().iter().enumerate() {
                out.values[i * grid.n_dirs() + k] = f(*x, *theta);
            }
        }
        out
    }

    pub fn n_cells(&self) -> usize {
        self.n_cells
    }

    pub fn n_dirs(&self) -> usize {
        self.n_dirs
    }

    #[inline]
    pub fn get(&self, cell: usize, dir: usize) -> f64 {
        self.values[cell * self.n_dirs + dir]
    }

    #[inline]
    pub fn set(&mut self, cell: usize, dir: usize, value: f64) {
        self.values[cell * self.n_dirs + dir] = value;
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    /// `self += a * other`
    pub fn axpy(&mut self, a: f64, other: &Field) {
        for (x, y) in self.values.iter_mut().zip(&other.values) {
            *x += a * y;
        }
    }

    pub fn scale(&mut self, a: f64) {
        self.values.iter_mut().for_each(|v| *v *= a);
    }

    pub fn scaled(&self, a: f64) -> Field {
        let mut out = self.clone();
        out.scale(a);
        out
    }

    pub fn sub(&self, other: &Field) -> Field {
        let mut out = self.clone();
        out.axpy(-1.0, other);
        out
    }

    pub fn add(&self, other: &Field) -> Field {
        let mut out = self.clone();
        out.axpy(1.0, other);
        out
    }

    pub fn max_abs(&self) -> f64 {
        self.values.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub(crate) fn check(&self, grid: &PhaseSpaceGrid) -> Result<()> {
        if self.n_cells != grid.n_cells() || self.n_dirs != grid.n_dirs() {
            return Err(Error::ShapeMismatch {
                expected: grid.n_dofs(),
                found: self.values.len(),
            });
        }
        Ok(())
    }
}

/// Values on boundary slots over time samples.
///
/// Only slots of the stored `part` are represented: inflow traces hold one
/// value per slot with `ν·θ < 0`, outflow traces per slot with `ν·θ > 0`.
#[derive(Clone, Debug, PartialEq)]
pub struct BoundaryTrace {
    part: TracePart,
    n_slots: usize,
    n_samples: usize,
    dt: f64,
    values: Vec<f64>,
}

impl BoundaryTrace {
    pub fn zeros(grid: &PhaseSpaceGrid, part: TracePart, n_samples: usize, dt: f64) -> Self {
        let n_slots = grid.slots(part).len();
        Self {
            part,
            n_slots,
            n_samples,
            dt,
            values: vec![0.0; n_slots * n_samples],
        }
    }

    pub fn from_values(
        grid: &PhaseSpaceGrid,
        part: TracePart,
        n_samples: usize,
        dt: f64,
        values: Vec<f64>,
    ) -> Result<Self> {
        let n_slots = grid.slots(part).len();
        if values.len() != n_slots * n_samples {
            return Err(Error::ShapeMismatch {
                expected: n_slots * n_samples,
                found: values.len(),
            });
        }
        Ok(Self {
            part,
            n_slots,
            n_samples,
            dt,
            values,
        })
    }

    /// Samples `h(t, face, θ)` on every slot of `part` at `t = n·dt`.
    pub fn from_fn(
        grid: &PhaseSpaceGrid,
        part: TracePart,
        n_samples: usize,
        dt: f64,
        h: impl Fn(f64, &Face, [f64; 2]) -> f64,
    ) -> Self {
        let mut out = Self::zeros(grid, part, n_samples, dt);
        let slots = grid.slots(part);
        for n in 0..n_samples {
            let t = n as f64 * dt;
            for (j, slot) in slots.iter().enumerate() {
                out.values[n * slots.len() + j] =
                    h(t, &grid.faces()[slot.face], grid.directions()[slot.dir]);
            }
        }
        out
    }

    pub fn part(&self) -> TracePart {
        self.part
    }

    pub fn n_slots(&self) -> usize {
        self.n_slots
    }

    pub fn n_samples(&self) -> usize {
        self.n_samples
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn sample(&self, n: usize) -> &[f64] {
        &self.values[n * self.n_slots..(n + 1) * self.n_slots]
    }

    pub fn sample_mut(&mut self, n: usize) -> &mut [f64] {
        &mut self.values[n * self.n_slots..(n + 1) * self.n_slots]
    }

    /// A single-time trace holding sample `n`.
    pub fn at_sample(&self, n: usize) -> BoundaryTrace {
        BoundaryTrace {
            part: self.part,
            n_slots: self.n_slots,
            n_samples: 1,
            dt: self.dt,
            values: self.sample(n).to_vec(),
        }
    }

    pub fn axpy(&mut self, a: f64, other: &BoundaryTrace) {
        for (x, y) in self.values.iter_mut().zip(&other.values) {
            *x += a * y;
        }
    }

    pub fn scale(&mut self, a: f64) {
        self.values.iter_mut().for_each(|v| *v *= a);
    }

    /// Trapezoid weight of sample `n` on `[0, (n_samples-1)·dt]`.
    pub fn time_weight(&self, n: usize) -> f64 {
        time_weight(n, self.n_samples, self.dt)
    }

    /// `L²([0,τ]; T±)` inner product, trapezoidal in time.
    ///
    /// Sums are grouped so that time reversal (sample `n ↔ N−1−n`, and the
    /// half swap of a full trace) leaves the result bitwise unchanged.
    pub fn l2_inner(&self, grid: &PhaseSpaceGrid, other: &BoundaryTrace) -> f64 {
        let w = grid.slot_weights(self.part);
        let half = if self.part == TracePart::Full { self.n_slots() / 2 } else { self.n_slots() };
        let per_sample: Vec<f64> = (0..self.n_samples)
            .map(|n| {
                let a = self.sample(n);
                let b = other.sample(n);
                let sum = |r: std::ops::Range<usize>| -> f64 { r.map(|j| a[j] * b[j] * w[j]).sum() };
                let first = sum(0..half);
                if half == self.n_slots() {
                    first
                } else {
                    first + sum(half..self.n_slots())
                }
            })
            .collect();
        let n = self.n_samples;
        paired_sum(n, |i| n - 1 - i, |i| self.time_weight(i) * per_sample[i])
    }

    pub fn l2_norm(&self, grid: &PhaseSpaceGrid) -> f64 {
        self.l2_inner(grid, self).sqrt()
    }

    /// `C([0,τ]; T±)` norm.
    pub fn sup_norm(&self, grid: &PhaseSpaceGrid) -> f64 {
        (0..self.n_samples)
            .map(|n| grid.slot_norm(self.part, self.sample(n)))
            .fold(0.0, f64::max)
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }
}

/// `Σ term(i)` over `0..n`, adding each term to that of its partner first.
/// Addition is commutative in floating point, so with an involutive
/// `partner`, permuting the terms along it does not change the rounding.
pub(crate) fn paired_sum(n: usize, partner: impl Fn(usize) -> usize, term: impl Fn(usize) -> f64) -> f64 {
    let mut total = 0.0;
    for i in 0..n {
        let p = partner(i);
        if p == i {
            total += term(i);
        } else if i < p {
            total += term(i) + term(p);
        }
    }
    total
}

pub(crate) fn time_weight(n: usize, n_samples: usize, dt: f64) -> f64 {
    if n_samples <= 1 {
        1.0
    } else if n == 0 || n + 1 == n_samples {
        0.5 * dt
    } else {
        dt
    }
}

/// Spatial cells × ordinates, with the boundary bookkeeping used by traces.
#[derive(Clone, Debug)]
pub struct PhaseSpaceGrid {
    config: GeometryConfig,
    dim: usize,
    nx: usize,
    ny: usize,
    dx: f64,
    dy: f64,
    centers: Vec<[f64; 2]>,
    cell_index: Vec<(usize, usize)>,
    lookup: Vec<Option<usize>>,
    neighbors: Vec<[Option<usize>; 4]>,
    cell_faces: Vec<[Option<usize>; 4]>,
    faces: Vec<Face>,
    directions: Vec<[f64; 2]>,
    weights: Vec<f64>,
    opposite: Vec<usize>,
    stencils: Vec<[Option<AxisStencil>; 2]>,
    outflow_slots: Vec<Slot>,
    inflow_slots: Vec<Slot>,
    full_slots: Vec<Slot>,
    outflow_weights: Vec<f64>,
    inflow_weights: Vec<f64>,
    full_weights: Vec<f64>,
    diameter: f64,
    speed: f64,
}

impl PhaseSpaceGrid {
    pub fn new(config: &GeometryConfig) -> Result<Self> {
        let geometry = config.geometry;
        let dim = geometry.dim();
        if !(config.c > 0.0 && config.c.is_finite()) {
            return Err(Error::InvalidGrid(format!(
                "speed must be positive, got {}",
                config.c
            )));
        }
        let (extent, origin) = match geometry {
            Geometry::Rod1d { length } => ([length, 1.0], [0.0, 0.0]),
            Geometry::Box2d { width, height } => ([width, height], [0.0, 0.0]),
            Geometry::Disk2d { radius } => ([2.0 * radius, 2.0 * radius], [-radius, -radius]),
        };
        if !extent.iter().all(|e| *e > 0.0 && e.is_finite()) {
            return Err(Error::InvalidGrid(format!(
                "domain dimensions must be positive: {geometry:?}"
            )));
        }
        let (nx, ny) = match (dim, config.n_cells.as_slice()) {
            (1, [n]) => (*n, 1),
            (2, [n]) => (*n, *n),
            (2, [nx, ny]) if !matches!(geometry, Geometry::Disk2d { .. }) => (*nx, *ny),
            _ => {
                return Err(Error::InvalidGrid(format!(
                    "n_cells {:?} does not fit a {dim}D domain",
                    config.n_cells
                )))
            }
        };
        if nx < 2 || (dim == 2 && ny < 2) {
            return Err(Error::InvalidGrid("need at least 2 cells per axis".into()));
        }

        let (directions, weights, opposite) = if dim == 1 {
            (vec![[1.0, 0.0], [-1.0, 0.0]], vec![1.0, 1.0], vec![1, 0])
        } else {
            let n = config.n_theta;
            if n < 2 || !n.is_multiple_of(2) {
                return Err(Error::InvalidGrid(format!(
                    "n_theta must be even and at least 2, got {n}"
                )));
            }
            let half = n / 2;
            let mut dirs = vec![[0.0; 2]; n];
            for k in 0..half {
                let phi = (k as f64 + 0.5) * 2.0 * PI / n as f64;
                dirs[k] = [phi.cos(), phi.sin()];
                dirs[k + half] = [-phi.cos(), -phi.sin()];
            }
            let opposite = (0..n).map(|k| (k + half) % n).collect();
            (dirs, vec![2.0 * PI / n as f64; n], opposite)
        };

        let dx = extent[0] / nx as f64;
        let dy = if dim == 1 { 1.0 } else { extent[1] / ny as f64 };

        let mut lookup = vec![None; nx * ny];
        let mut centers = Vec::new();
        let mut cell_index = Vec::new();
        for iy in 0..ny {
            for ix in 0..nx {
                let c = if dim == 1 {
                    [(ix as f64 + 0.5) * dx, 0.0]
                } else {
                    [
                        origin[0] + (ix as f64 + 0.5) * dx,
                        origin[1] + (iy as f64 + 0.5) * dy,
                    ]
                };
                let active = match geometry {
                    Geometry::Disk2d { radius } => c[0] * c[0] + c[1] * c[1] <= radius * radius,
                    _ => true,
                };
                if active {
                    lookup[iy * nx + ix] = Some(centers.len());
                    centers.push(c);
                    cell_index.push((ix, iy));
                }
            }
        }
        if centers.is_empty() {
            return Err(Error::InvalidGrid("no active cells".into()));
        }

        let at = |ix: isize, iy: isize| -> Option<usize> {
            if ix < 0 || iy < 0 || ix >= nx as isize || iy >= ny as isize {
                None
            } else {
                lookup[iy as usize * nx + ix as usize]
            }
        };
        let mut neighbors = Vec::with_capacity(centers.len());
        let mut cell_faces = Vec::with_capacity(centers.len());
        let mut faces = Vec::new();
        for (i, &(ix, iy)) in cell_index.iter().enumerate() {
            let (ix, iy) = (ix as isize, iy as isize);
            let nb = [
                at(ix - 1, iy),
                at(ix + 1, iy),
                if dim == 2 { at(ix, iy - 1) } else { None },
                if dim == 2 { at(ix, iy + 1) } else { None },
            ];
            let mut cf = [None; 4];
            for side in Side::ALL {
                if side.axis() >= dim || nb[side as usize].is_some() {
                    continue;
                }
                let (measure, spacing) = if side.axis() == 0 { (dy, dx) } else { (dx, dy) };
                cf[side as usize] = Some(faces.len());
                faces.push(Face {
                    cell: i,
                    side,
                    normal: side.normal(),
                    measure,
                    spacing,
                });
            }
            neighbors.push(nb);
            cell_faces.push(cf);
        }

        let stencils = directions
            .iter()
            .map(|theta| {
                let mut s = [None; 2];
                for (axis, (lo, hi)) in [(Side::XMinus, Side::XPlus), (Side::YMinus, Side::YPlus)]
                    .into_iter()
                    .enumerate()
                {
                    let t: f64 = theta[axis];
                    if t.abs() < GRAZING_TOL {
                        continue;
                    }
                    let h = if axis == 0 { dx } else { dy };
                    let (upwind, downwind) = if t > 0.0 { (lo, hi) } else { (hi, lo) };
                    s[axis] = Some(AxisStencil {
                        coef: t.abs() / h,
                        upwind,
                        downwind,
                    });
                }
                s
            })
            .collect();

        let diameter = geometry.diameter();
        let mut outflow_slots = Vec::new();
        let mut inflow_slots = Vec::new();
        for (f, face) in faces.iter().enumerate() {
            for (k, theta) in directions.iter().enumerate() {
                let s = dot(face.normal, *theta);
                if s > GRAZING_TOL {
                    outflow_slots.push(Slot { face: f, dir: k });
                    inflow_slots.push(Slot {
                        face: f,
                        dir: opposite[k],
                    });
                }
            }
        }
        let full_slots: Vec<Slot> = outflow_slots
            .iter()
            .chain(inflow_slots.iter())
            .copied()
            .collect();
        let slot_weight = |s: &Slot| {
            let face = &faces[s.face];
            diameter * dot(face.normal, directions[s.dir]).abs() * face.measure * weights[s.dir]
        };
        let outflow_weights = outflow_slots.iter().map(slot_weight).collect();
        let inflow_weights = inflow_slots.iter().map(slot_weight).collect();
        let full_weights = full_slots.iter().map(slot_weight).collect();

        Ok(Self {
            config: config.clone(),
            dim,
            nx,
            ny,
            dx,
            dy,
            centers,
            cell_index,
            lookup,
            neighbors,
            cell_faces,
            faces,
            directions,
            weights,
            opposite,
            stencils,
            outflow_slots,
            inflow_slots,
            full_slots,
            outflow_weights,
            inflow_weights,
            full_weights,
            diameter,
            speed: config.c,
        })
    }

    pub fn config(&self) -> &GeometryConfig {
        &self.config
    }

    pub fn geometry(&self) -> Geometry {
        self.config.geometry
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Cells per axis of the underlying Cartesian lattice.
    pub fn shape(&self) -> (usize, usize) {
        (self.nx, self.ny)
    }

    pub fn spacing(&self) -> (f64, f64) {
        (self.dx, self.dy)
    }

    pub fn n_cells(&self) -> usize {
        self.centers.len()
    }

    pub fn n_dirs(&self) -> usize {
        self.directions.len()
    }

    pub fn n_dofs(&self) -> usize {
        self.n_cells() * self.n_dirs()
    }

    pub fn cell_volume(&self) -> f64 {
        self.dx * self.dy
    }

    pub fn centers(&self) -> &[[f64; 2]] {
        &self.centers
    }

    pub fn cell_lattice_index(&self, cell: usize) -> (usize, usize) {
        self.cell_index[cell]
    }

    pub fn cell_at(&self, ix: usize, iy: usize) -> Option<usize> {
        if ix >= self.nx || iy >= self.ny {
            return None;
        }
        self.lookup[iy * self.nx + ix]
    }

    pub fn neighbor(&self, cell: usize, side: Side) -> Option<usize> {
        self.neighbors[cell][side as usize]
    }

    pub fn cell_face(&self, cell: usize, side: Side) -> Option<usize> {
        self.cell_faces[cell][side as usize]
    }

    pub fn faces(&self) -> &[Face] {
        &self.faces
    }

    pub fn directions(&self) -> &[[f64; 2]] {
        &self.directions
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    /// Index of `−θ_k`.
    pub fn opposite(&self, k: usize) -> usize {
        self.opposite[k]
    }

    pub(crate) fn stencil(&self, k: usize) -> &[Option<AxisStencil>; 2] {
        &self.stencils[k]
    }

    /// Measure of the sphere: 2 for the rod, `2π` for the circle.
    pub fn sphere_measure(&self) -> f64 {
        self.weights.iter().sum()
    }

    /// Diameter `l` of the domain.
    pub fn diameter(&self) -> f64 {
        self.diameter
    }

    /// Particle speed `c`.
    pub fn speed(&self) -> f64 {
        self.speed
    }

    /// Crossing time `T = l / c`.
    pub fn crossing_time(&self) -> f64 {
        self.diameter / self.speed
    }

    pub fn slots(&self, part: TracePart) -> &[Slot] {
        match part {
            TracePart::Inflow => &self.inflow_slots,
            TracePart::Outflow => &self.outflow_slots,
            TracePart::Full => &self.full_slots,
        }
    }

    /// `l·|ν·θ|·|face|·w_k` per slot: the `T` inner-product weights.
    pub fn slot_weights(&self, part: TracePart) -> &[f64] {
        match part {
            TracePart::Inflow => &self.inflow_weights,
            TracePart::Outflow => &self.outflow_weights,
            TracePart::Full => &self.full_weights,
        }
    }

    /// `|ν·θ| / spacing` for a slot: the weight of its ghost value in the
    /// upwind difference of the adjacent cell.
    #[inline]
    pub(crate) fn slot_flux_coef(&self, slot: &Slot) -> f64 {
        let face = &self.faces[slot.face];
        dot(face.normal, self.directions[slot.dir]).abs() / face.spacing
    }

    /// Diagonal of the `V⁰` mass matrix at dof `(cell, dir)`.
    #[inline]
    pub fn mass(&self, dir: usize) -> f64 {
        self.cell_volume() * self.weights[dir]
    }

    /// `⟨f, g⟩_{V⁰} = Σ f g |cell| w_k`
    pub fn v0_inner(&self, f: &Field, g: &Field) -> Result<f64> {
        f.check(self)?;
        g.check(self)?;
        Ok(self.v0_inner_raw(f.values(), g.values()))
    }

    pub fn v0_inner_raw(&self, f: &[f64], g: &[f64]) -> f64 {
        let nd = self.n_dirs();
        let mut per_dir = vec![0.0; nd];
        for (a, b) in f.chunks_exact(nd).zip(g.chunks_exact(nd)) {
            for k in 0..nd {
                per_dir[k] += a[k] * b[k];
            }
        }
        paired_sum(nd, |k| self.opposite(k), |k| per_dir[k] * self.mass(k))
    }

    pub fn v0_norm(&self, f: &Field) -> f64 {
        self.v0_inner_raw(f.values(), f.values()).sqrt()
    }

    /// First-order upwind `θ·∇f` with zero ghost values outside `Ω`.
    pub fn directional_derivative(&self, f: &Field, upwind: Upwind) -> Result<Field> {
        f.check(self)?;
        let mut out = Field::zeros(self);
        self.stream_raw(f.values(), out.values_mut(), upwind == Upwind::Against);
        Ok(out)
    }

    /// `out = D f` (or `Dᵀ f` when `transpose`), zero ghosts.
    pub(crate) fn stream_raw(&self, f: &[f64], out: &mut [f64], transpose: bool) {
        let nd = self.n_dirs();
        for i in 0..self.n_cells() {
            let nb = &self.neighbors[i];
            for k in 0..nd {
                let center = f[i * nd + k];
                let mut acc = 0.0;
                for st in self.stencils[k].iter().flatten() {
                    let side = if transpose { st.downwind } else { st.upwind };
                    let other = nb[side as usize].map_or(0.0, |j| f[j * nd + k]);
                    acc += st.coef * (center - other);
                }
                out[i * nd + k] = acc;
            }
        }
    }

    /// Upwind `θ·∇f` with the field's own boundary value as ghost, so that
    /// constants differentiate to zero everywhere. Used by the `V¹` norm.
    pub fn derivative_with_trace(&self, f: &Field) -> Result<Field> {
        f.check(self)?;
        let mut out = Field::zeros(self);
        self.free_stream_raw(f.values(), out.values_mut(), false);
        Ok(out)
    }

    pub(crate) fn free_stream_raw(&self, f: &[f64], out: &mut [f64], transpose: bool) {
        let nd = self.n_dirs();
        for i in 0..self.n_cells() {
            let nb = &self.neighbors[i];
            for k in 0..nd {
                let mut acc = 0.0;
                for st in self.stencils[k].iter().flatten() {
                    if transpose {
                        if nb[st.upwind as usize].is_some() {
                            acc += st.coef * f[i * nd + k];
                        }
                        if let Some(j) = nb[st.downwind as usize] {
                            acc -= st.coef * f[j * nd + k];
                        }
                    } else if let Some(j) = nb[st.upwind as usize] {
                        acc += st.coef * (f[i * nd + k] - f[j * nd + k]);
                    }
                }
                out[i * nd + k] = acc;
            }
        }
    }

    /// `‖f‖_{V¹}² = l²‖θ·∇f‖² + ‖f‖² + ‖γf‖_T²`, with the full boundary trace.
    pub fn v1_norm(&self, f: &Field) -> Result<f64> {
        let df = self.derivative_with_trace(f)?;
        let l = self.diameter;
        let trace = self.restrict_trace(f, TracePart::Full)?;
        let t = self.slot_norm(TracePart::Full, trace.sample(0));
        Ok((l * l * self.v0_inner_raw(df.values(), df.values())
            + self.v0_inner_raw(f.values(), f.values())
            + t * t)
            .sqrt())
    }

    pub(crate) fn slot_norm(&self, part: TracePart, values: &[f64]) -> f64 {
        values
            .iter()
            .zip(self.slot_weights(part))
            .map(|(v, w)| v * v * w)
            .sum::<f64>()
            .sqrt()
    }

    /// `‖h‖_T = sqrt(l Σ |ν·θ| h² |face| w)` for a single-time trace.
    pub fn trace_norm(&self, h: &BoundaryTrace) -> Result<f64> {
        if h.n_samples() != 1 {
            return Err(Error::InvalidArgument(format!(
                "trace_norm expects a single-time trace, got {} samples",
                h.n_samples()
            )));
        }
        Ok(self.slot_norm(h.part(), h.sample(0)))
    }

    /// Samples boundary-adjacent cell values on the slots of `part`.
    pub fn restrict_trace(&self, f: &Field, part: TracePart) -> Result<BoundaryTrace> {
        f.check(self)?;
        let mut out = BoundaryTrace::zeros(self, part, 1, 0.0);
        self.gather_slots(part, f.values(), out.sample_mut(0));
        Ok(out)
    }

    pub(crate) fn gather_slots(&self, part: TracePart, f: &[f64], out: &mut [f64]) {
        let nd = self.n_dirs();
        for (o, s) in out.iter_mut().zip(self.slots(part)) {
            *o = f[self.faces[s.face].cell * nd + s.dir];
        }
    }

    /// Transpose of [`gather_slots`]: `out += scale · Cᵀ values`.
    pub(crate) fn scatter_slots(&self, part: TracePart, values: &[f64], scale: f64, out: &mut [f64]) {
        let nd = self.n_dirs();
        for (v, s) in values.iter().zip(self.slots(part)) {
            out[self.faces[s.face].cell * nd + s.dir] += scale * v;
        }
    }

    /// `| ⟨θ·∇u, v⟩ + ⟨θ·∇v, u⟩ − ∮ (θ·ν) u v |` by discrete quadrature.
    pub fn green_identity_residual(&self, u: &Field, v: &Field) -> Result<f64> {
        let du = self.derivative_with_trace(u)?;
        let dv = self.derivative_with_trace(v)?;
        let volume = self.v0_inner_raw(du.values(), v.values())
            + self.v0_inner_raw(dv.values(), u.values());
        let nd = self.n_dirs();
        let mut boundary = 0.0;
        for face in &self.faces {
            for (k, theta) in self.directions.iter().enumerate() {
                let idx = face.cell * nd + k;
                boundary += dot(face.normal, *theta)
                    * u.values()[idx]
                    * v.values()[idx]
                    * face.measure
                    * self.weights[k];
            }
        }
        Ok((volume - boundary).abs())
    }

    /// Largest `Σ_axes |θ_a| / h_a` over the ordinates.
    pub(crate) fn max_streaming_rate(&self) -> f64 {
        self.stencils
            .iter()
            .map(|s| s.iter().flatten().map(|a| a.coef).sum::<f64>())
            .fold(0.0, f64::max)
    }
}

#[inline]
pub(crate) fn dot(a: [f64; 2], b: [f64; 2]) -> f64 {
    a[0] * b[0] + a[1] * b[1]
}

//! Optical coefficients, the scattering kernel, and the analytic constants
//! that govern decay and contraction.

use std::f64::consts::{E, PI, SQRT_2};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::phase_grid::{Field, PhaseSpaceGrid};

/// Row-sum tolerance reported by [`validate_kernel`].
pub const CONSERVATION_TOL: f64 = 1e-10;
/// Row-sum tolerance enforced at construction.
const CONSTRUCTION_TOL: f64 = 1e-12;
const MAX_BALANCE_ROUNDS: usize = 10_000;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum KernelKind {
    Isotropic,
    HenyeyGreenstein { g: f64 },
    Table,
}

/// Which angular operator to apply.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum KernelMode {
    /// `(Ku)_k = Σ κ[k][k'] u_k' w_k'`
    Forward,
    /// `(K*u)_k = Σ κ[k'][k] u_k' w_k'`
    Adjoint,
}

/// Quadrature-normalized scattering kernel, uniform or per cell.
#[derive(Clone, Debug, PartialEq)]
pub struct Kernel {
    kind: KernelKind,
    n_dirs: usize,
    n_tables: usize,
    /// `κ[t][k][k']`
    kappa: Vec<f64>,
    /// `κ[t][k][k'] w_k'`: the matrix of `K` per table.
    forward: Vec<f64>,
    /// `κ[t][k'][k] w_k'`: the matrix of `K*` per table.
    adjoint: Vec<f64>,
}

impl Kernel {
    pub fn isotropic(grid: &PhaseSpaceGrid) -> Self {
        let n = grid.n_dirs();
        let v = 1.0 / grid.sphere_measure();
        Self::assemble(grid, KernelKind::Isotropic, 1, vec![v; n * n])
    }

    /// Henyey–Greenstein phase function, normalized on the discrete sphere.
    pub fn henyey_greenstein(grid: &PhaseSpaceGrid, g: f64) -> Result<Self> {
        if !(g > -1.0 && g < 1.0) {
            return Err(Error::InvalidMedium(format!(
                "anisotropy g must lie in (-1, 1), got {g}"
            )));
        }
        let n = grid.n_dirs();
        let dirs = grid.directions();
        let mut kappa = vec![0.0; n * n];
        for k in 0..n {
            for kp in 0..n {
                let cos = dirs[k][0] * dirs[kp][0] + dirs[k][1] * dirs[kp][1];
                kappa[k * n + kp] = if grid.dim() == 1 {
                    if cos > 0.0 {
                        0.5 * (1.0 + g)
                    } else {
                        0.5 * (1.0 - g)
                    }
                } else {
                    (1.0 - g * g) / (2.0 * PI * (1.0 + g * g - 2.0 * g * cos))
                };
            }
        }
        Self::balanced(grid, KernelKind::HenyeyGreenstein { g }, 1, kappa)
    }

    /// Tabulated kernel: `n_tables` blocks of `n_dirs × n_dirs` values, one
    /// block for all cells or one per cell. Rows are rebalanced.
    pub fn from_table(grid: &PhaseSpaceGrid, values: Vec<f64>) -> Result<Self> {
        let n_tables = table_count(grid, values.len())?;
        if let Some(v) = values.iter().find(|v| !(**v >= 0.0) || !v.is_finite()) {
            return Err(Error::InvalidMedium(format!(
                "kernel table entries must be finite and nonnegative, found {v}"
            )));
        }
        Self::balanced(grid, KernelKind::Table, n_tables, values)
    }

    /// Wraps a table as-is, without rebalancing. Used to exercise
    /// [`validate_kernel`] on deliberately broken kernels.
    pub fn from_raw(grid: &PhaseSpaceGrid, values: Vec<f64>) -> Result<Self> {
        let n_tables = table_count(grid, values.len())?;
        Ok(Self::assemble(grid, KernelKind::Table, n_tables, values))
    }

    /// Alternates row scaling (conservation) and averaging over the
    /// reciprocal pair until both hold. The last operation is always the
    /// averaging step, so reciprocity is bitwise exact.
    fn balanced(
        grid: &PhaseSpaceGrid,
        kind: KernelKind,
        n_tables: usize,
        mut kappa: Vec<f64>,
    ) -> Result<Self> {
        let n = grid.n_dirs();
        let w = grid.weights();
        let neg: Vec<usize> = (0..n).map(|k| grid.opposite(k)).collect();
        for t in 0..n_tables {
            let block = &mut kappa[t * n * n..(t + 1) * n * n];
            let mut rounds = 0;
            loop {
                for k in 0..n {
                    let row = &mut block[k * n..(k + 1) * n];
                    let s: f64 = row.iter().zip(w).map(|(a, b)| a * b).sum();
                    if s <= 0.0 {
                        return Err(Error::InvalidMedium(format!(
                            "kernel row {k} of table {t} has no mass"
                        )));
                    }
                    row.iter_mut().for_each(|v| *v /= s);
                }
                for k in 0..n {
                    for kp in 0..n {
                        let (a, b) = (k * n + kp, neg[kp] * n + neg[k]);
                        if a < b {
                            let avg = 0.5 * (block[a] + block[b]);
                            block[a] = avg;
                            block[b] = avg;
                        }
                    }
                }
                let dev = (0..n)
                    .map(|k| {
                        let s: f64 = block[k * n..(k + 1) * n]
                            .iter()
                            .zip(w)
                            .map(|(a, b)| a * b)
                            .sum();
                        (s - 1.0).abs()
                    })
                    .fold(0.0, f64::max);
                if dev <= 0.1 * CONSTRUCTION_TOL {
                    break;
                }
                rounds += 1;
                if rounds >= MAX_BALANCE_ROUNDS {
                    return Err(Error::InvalidMedium(format!(
                        "kernel table {t} cannot be made conservative and reciprocal \
                         (row deviation {dev:e})"
                    )));
                }
            }
        }
        Ok(Self::assemble(grid, kind, n_tables, kappa))
    }

    fn assemble(grid: &PhaseSpaceGrid, kind: KernelKind, n_tables: usize, kappa: Vec<f64>) -> Self {
        let n = grid.n_dirs();
        let w = grid.weights();
        let mut forward = vec![0.0; kappa.len()];
        let mut adjoint = vec![0.0; kappa.len()];
        for t in 0..n_tables {
            let o = t * n * n;
            for k in 0..n {
                for kp in 0..n {
                    forward[o + k * n + kp] = kappa[o + k * n + kp] * w[kp];
                    adjoint[o + k * n + kp] = kappa[o + kp * n + k] * w[kp];
                }
            }
        }
        Self {
            kind,
            n_dirs: n,
            n_tables,
            kappa,
            forward,
            adjoint,
        }
    }

    pub fn kind(&self) -> &KernelKind {
        &self.kind
    }

    pub fn n_tables(&self) -> usize {
        self.n_tables
    }

    /// `κ[k][k']` at `cell`.
    pub fn value(&self, cell: usize, k: usize, kp: usize) -> f64 {
        let n = self.n_dirs;
        self.kappa[self.table_of(cell) * n * n + k * n + kp]
    }

    pub fn table(&self, t: usize) -> &[f64] {
        let n = self.n_dirs;
        &self.kappa[t * n * n..(t + 1) * n * n]
    }

    #[inline]
    fn table_of(&self, cell: usize) -> usize {
        if self.n_tables == 1 {
            0
        } else {
            cell
        }
    }

    /// Row-major `n_dirs × n_dirs` matrix of `K` or `K*` at `cell`.
    #[inline]
    pub(crate) fn matrix(&self, cell: usize, mode: KernelMode) -> &[f64] {
        let n = self.n_dirs;
        let t = self.table_of(cell);
        let m = match mode {
            KernelMode::Forward => &self.forward,
            KernelMode::Adjoint => &self.adjoint,
        };
        &m[t * n * n..(t + 1) * n * n]
    }
}

fn table_count(grid: &PhaseSpaceGrid, len: usize) -> Result<usize> {
    let nn = grid.n_dirs() * grid.n_dirs();
    if len == nn {
        Ok(1)
    } else if len == nn * grid.n_cells() && grid.n_cells() > 1 {
        Ok(grid.n_cells())
    } else {
        Err(Error::InvalidMedium(format!(
            "kernel table has {len} entries; expected {nn} or {}",
            nn * grid.n_cells()
        )))
    }
}

/// Absorption, scattering and kernel on a grid.
#[derive(Clone, Debug)]
pub struct Medium {
    mu_a: Vec<f64>,
    mu_s: Vec<f64>,
    kernel: Kernel,
    mu_a_bar: f64,
    mu_s_bar: f64,
}

impl Medium {
    pub fn new(grid: &PhaseSpaceGrid, mu_a: Vec<f64>, mu_s: Vec<f64>, kernel: Kernel) -> Result<Self> {
        for (name, v) in [("mu_a", &mu_a), ("mu_s", &mu_s)] {
            if v.len() != grid.n_cells() {
                return Err(Error::ShapeMismatch {
                    expected: grid.n_cells(),
                    found: v.len(),
                });
            }
            if let Some(bad) = v.iter().find(|x| !(**x >= 0.0) || !x.is_finite()) {
                return Err(Error::InvalidMedium(format!(
                    "{name} must be finite and nonnegative, found {bad}"
                )));
            }
        }
        if kernel.n_dirs != grid.n_dirs() || (kernel.n_tables != 1 && kernel.n_tables != grid.n_cells())
        {
            return Err(Error::InvalidMedium("kernel does not match grid".into()));
        }
        let max = |v: &[f64]| v.iter().copied().fold(0.0, f64::max);
        Ok(Self {
            mu_a_bar: max(&mu_a),
            mu_s_bar: max(&mu_s),
            mu_a,
            mu_s,
            kernel,
        })
    }

    pub fn constant(grid: &PhaseSpaceGrid, mu_a: f64, mu_s: f64, kernel: Kernel) -> Result<Self> {
        let n = grid.n_cells();
        Self::new(grid, vec![mu_a; n], vec![mu_s; n], kernel)
    }

    /// `μa = μs = 0` with an isotropic kernel.
    pub fn vacuum(grid: &PhaseSpaceGrid) -> Self {
        Self::constant(grid, 0.0, 0.0, Kernel::isotropic(grid)).expect("vacuum is valid")
    }

    pub fn mu_a(&self) -> &[f64] {
        &self.mu_a
    }

    pub fn mu_s(&self) -> &[f64] {
        &self.mu_s
    }

    pub fn mu_a_bar(&self) -> f64 {
        self.mu_a_bar
    }

    pub fn mu_s_bar(&self) -> f64 {
        self.mu_s_bar
    }

    pub fn kernel(&self) -> &Kernel {
        &self.kernel
    }

    /// No scattering anywhere.
    pub fn is_ballistic(&self) -> bool {
        self.mu_s_bar == 0.0
    }

    /// Resamples per-cell data onto another grid over the same domain by
    /// nearest cell centre. Uniform kernels carry over unchanged.
    pub fn transfer(&self, from: &PhaseSpaceGrid, to: &PhaseSpaceGrid) -> Result<Self> {
        if from.n_dirs() != to.n_dirs() || from.geometry() != to.geometry() {
            return Err(Error::InvalidArgument(
                "media can only be transferred between grids of the same domain and angles".into(),
            ));
        }
        let (nx, ny) = from.shape();
        let (dx, dy) = from.spacing();
        let origin = match from.geometry() {
            crate::phase_grid::Geometry::Disk2d { radius } => [-radius, -radius],
            _ => [0.0, 0.0],
        };
        let map: Vec<usize> = to
            .centers()
            .iter()
            .map(|c| {
                let ix = (((c[0] - origin[0]) / dx).floor() as isize).clamp(0, nx as isize - 1);
                let iy = if from.dim() == 1 {
                    0
                } else {
                    (((c[1] - origin[1]) / dy).floor() as isize).clamp(0, ny as isize - 1)
                };
                from.cell_at(ix as usize, iy as usize).unwrap_or(0)
            })
            .collect();
        let pick = |v: &[f64]| map.iter().map(|&i| v[i]).collect::<Vec<_>>();
        let kernel = if self.kernel.n_tables == 1 {
            Kernel::assemble(to, self.kernel.kind.clone(), 1, self.kernel.kappa.clone())
        } else {
            let nn = to.n_dirs() * to.n_dirs();
            let mut kappa = Vec::with_capacity(nn * map.len());
            for &i in &map {
                kappa.extend_from_slice(self.kernel.table(i));
            }
            Kernel::assemble(to, self.kernel.kind.clone(), map.len(), kappa)
        };
        Medium::new(to, pick(&self.mu_a), pick(&self.mu_s), kernel)
    }

    /// `out[cell] = M · f[cell]` with `M` the `K`/`K*` block, or its
    /// Euclidean transpose, scaled per cell by `scale[cell]`; accumulates.
    pub(crate) fn accumulate_kernel(
        &self,
        mode: KernelMode,
        transpose: bool,
        scale: &[f64],
        f: &[f64],
        out: &mut [f64],
    ) {
        let n = self.kernel.n_dirs;
        for (i, (fi, oi)) in f.chunks_exact(n).zip(out.chunks_exact_mut(n)).enumerate() {
            let s = scale[i];
            if s == 0.0 {
                continue;
            }
            let m = self.kernel.matrix(i, mode);
            if transpose {
                for kp in 0..n {
                    let v = s * fi[kp];
                    let row = &m[kp * n..(kp + 1) * n];
                    for k in 0..n {
                        oi[k] += row[k] * v;
                    }
                }
            } else {
                for k in 0..n {
                    let row = &m[k * n..(k + 1) * n];
                    let acc: f64 = row.iter().zip(fi).map(|(a, b)| a * b).sum();
                    oi[k] += s * acc;
                }
            }
        }
    }
}

/// `K f`, the angular average against `κ`.
pub fn apply_scattering(m: &Medium, grid: &PhaseSpaceGrid, f: &Field) -> Result<Field> {
    apply_kernel(m, grid, f, KernelMode::Forward)
}

/// `K* f`, with transposed kernel indices.
pub fn apply_scattering_adjoint(m: &Medium, grid: &PhaseSpaceGrid, f: &Field) -> Result<Field> {
    apply_kernel(m, grid, f, KernelMode::Adjoint)
}

fn apply_kernel(m: &Medium, grid: &PhaseSpaceGrid, f: &Field, mode: KernelMode) -> Result<Field> {
    let mut out = Field::zeros(grid);
    f.check(grid)?;
    if m.kernel.n_dirs != grid.n_dirs() {
        return Err(Error::InvalidMedium("kernel does not match grid".into()));
    }
    let ones = vec![1.0; grid.n_cells()];
    m.accumulate_kernel(mode, false, &ones, f.values(), out.values_mut());
    Ok(out)
}

#[derive(Clone, Debug, PartialEq)]
pub enum KernelViolation {
    Nonnegativity { table: usize, k: usize, kp: usize, value: f64 },
    Conservation { table: usize, row: usize, deviation: f64 },
    Reciprocity { table: usize, k: usize, kp: usize },
}

impl std::fmt::Display for KernelViolation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            KernelViolation::Nonnegativity { table, k, kp, value } => {
                write!(f, "nonnegativity: κ[{table}][{k}][{kp}] = {value}")
            }
            KernelViolation::Conservation {
                table,
                row,
                deviation,
            } => write!(f, "conservation: table {table} row {row} off by {deviation:e}"),
            KernelViolation::Reciprocity { table, k, kp } => {
                write!(f, "reciprocity: table {table} pair ({k}, {kp})")
            }
        }
    }
}

/// Checks nonnegativity, conservation and reciprocity of the kernel.
pub fn validate_kernel(m: &Medium, grid: &PhaseSpaceGrid) -> Vec<KernelViolation> {
    let kernel = &m.kernel;
    let n = kernel.n_dirs;
    let w = grid.weights();
    let mut out = Vec::new();
    for t in 0..kernel.n_tables {
        let block = kernel.table(t);
        for k in 0..n {
            for kp in 0..n {
                let v = block[k * n + kp];
                if !(v >= 0.0) {
                    out.push(KernelViolation::Nonnegativity {
                        table: t,
                        k,
                        kp,
                        value: v,
                    });
                }
                if v != block[grid.opposite(kp) * n + grid.opposite(k)] {
                    out.push(KernelViolation::Reciprocity { table: t, k, kp });
                }
            }
            let s: f64 = block[k * n..(k + 1) * n]
                .iter()
                .zip(w)
                .map(|(a, b)| a * b)
                .sum();
            if !((s - 1.0).abs() <= CONSERVATION_TOL) {
                out.push(KernelViolation::Conservation {
                    table: t,
                    row: k,
                    deviation: s - 1.0,
                });
            }
        }
    }
    out
}

/// Weak-scattering diagnostics and decay constants.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RegimeReport {
    pub l: f64,
    pub c: f64,
    pub crossing_time: f64,
    pub mu_a_bar: f64,
    pub mu_s_bar: f64,
    /// `l μ̄s e^{l(μ̄a+μ̄s)}`
    pub lhs: f64,
    /// `lhs < e⁻¹`
    pub satisfied: bool,
    pub omega_star: f64,
    pub e_star: f64,
    pub alpha0: f64,
    pub beta0: f64,
    pub alpha: f64,
    pub beta: f64,
}

pub fn regime_report(m: &Medium, grid: &PhaseSpaceGrid) -> RegimeReport {
    RegimeReport::new(grid.diameter(), grid.speed(), m.mu_a_bar, m.mu_s_bar)
}

impl RegimeReport {
    pub fn new(l: f64, c: f64, mu_a_bar: f64, mu_s_bar: f64) -> Self {
        let t = l / c;
        let ls = l * (mu_a_bar + mu_s_bar);
        let growth = ls.exp();
        let lhs = l * mu_s_bar * growth;
        let (omega_star, e_star) = if mu_s_bar > 0.0 {
            ((t * growth * c * mu_s_bar).ln() / t, (growth * mu_s_bar * l * E).ln() / t)
        } else {
            (f64::NEG_INFINITY, f64::NEG_INFINITY)
        };
        let alpha0 = 1.0 + SQRT_2 + ls;
        let beta0 = SQRT_2 + (1.0 + ls) * growth;
        let q = (SQRT_2 * E - 1.0) / (SQRT_2 * E);
        Self {
            l,
            c,
            crossing_time: t,
            mu_a_bar,
            mu_s_bar,
            lhs,
            satisfied: lhs < (-1.0f64).exp(),
            omega_star,
            e_star,
            alpha0,
            beta0,
            alpha: q / alpha0,
            beta: q / beta0,
        }
    }

    fn growth(&self) -> f64 {
        (self.l * (self.mu_a_bar + self.mu_s_bar)).exp()
    }

    /// Upper bound on `‖R(t)‖` (and so on `‖S(t)‖`) in `V⁰`.
    ///
    /// `e·e^{l(μ̄a+μ̄s)}·(e·e^{l(μ̄a+μ̄s)}·l·μ̄s)^{t/T−1}`; without scattering
    /// everything has left the domain after one crossing time.
    pub fn decay_bound(&self, t: f64) -> f64 {
        if self.mu_s_bar == 0.0 {
            return if t > self.crossing_time {
                0.0
            } else {
                (self.l * self.mu_a_bar).exp()
            };
        }
        let g = self.growth();
        E * g * (E * g * self.l * self.mu_s_bar).powf(t / self.crossing_time - 1.0)
    }

    /// `M_ω e^{(ω + M_ω c μ̄s) t}` with `M_ω = e^{−ωT}`.
    pub fn direct_bound(&self, t: f64, omega: f64) -> f64 {
        let m = (-omega * self.crossing_time).exp();
        m * ((omega + m * self.c * self.mu_s_bar) * t).exp()
    }

    /// `N_ω e^{(ω + N_ω c μ̄s) t}` with `N_ω = e^{−ωT} e^{l(μ̄a+μ̄s)}`.
    pub fn reversed_bound(&self, t: f64, omega: f64) -> f64 {
        let n = (-omega * self.crossing_time).exp() * self.growth();
        n * ((omega + n * self.c * self.mu_s_bar) * t).exp()
    }

    /// Smallest multiple of `T` at which `decay_bound² ≤ 0.5`.
    pub fn suggested_tau(&self) -> Option<f64> {
        if !self.satisfied {
            return None;
        }
        (1..=1000)
            .map(|m| m as f64 * self.crossing_time)
            .find(|&t| self.decay_bound(t).powi(2) <= 0.5)
    }
}

/// A linear map on fields.
pub type FieldMap<'a> = &'a mut dyn FnMut(&Field) -> Result<Field>;

/// Power-iteration estimate of the `V⁰` operator norm of a linear map.
///
/// With `adjoint` the iteration runs on `A*A` and returns its square root;
/// without it `A` is assumed self-adjoint in `V⁰` and iterated directly.
pub fn operator_norm_estimate(
    grid: &PhaseSpaceGrid,
    apply: FieldMap<'_>,
    mut adjoint: Option<FieldMap<'_>>,
    iters: usize,
    seed: u64,
) -> Result<f64> {
    if iters < 1 {
        return Err(Error::InvalidArgument("power iteration needs iters >= 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut x = Field::zeros(grid);
    x.values_mut()
        .iter_mut()
        .for_each(|v| *v = rng.gen_range(-1.0..1.0));
    let n0 = grid.v0_norm(&x);
    x.scale(1.0 / n0);
    let mut estimate = 0.0;
    for _ in 0..iters {
        let y = apply(&x)?;
        match adjoint.as_mut() {
            Some(adj) => {
                estimate = grid.v0_norm(&y);
                let z = adj(&y)?;
                let nz = grid.v0_norm(&z);
                if nz == 0.0 {
                    return Ok(estimate);
                }
                x = z.scaled(1.0 / nz);
            }
            None => {
                let ny = grid.v0_norm(&y);
                estimate = ny;
                if ny == 0.0 {
                    return Ok(0.0);
                }
                x = y.scaled(1.0 / ny);
            }
        }
    }
    Ok(estimate)
}

/// Gaussian bump `base + peak·exp(−|x−center|²/(2 width²))` per cell.
pub fn gaussian_bump(grid: &PhaseSpaceGrid, base: f64, peak: f64, center: [f64; 2], width: f64) -> Vec<f64> {
    grid.centers()
        .iter()
        .map(|x| {
            let r2 = (x[0] - center[0]).powi(2) + (x[1] - center[1]).powi(2);
            base + peak * (-r2 / (2.0 * width * width)).exp()
        })
        .collect()
}

/// `value` inside either of two disks, `base` elsewhere.
pub fn two_disk(grid: &PhaseSpaceGrid, base: f64, value: f64, disks: [([f64; 2], f64); 2]) -> Vec<f64> {
    grid.centers()
        .iter()
        .map(|x| {
            let inside = disks
                .iter()
                .any(|(c, r)| (x[0] - c[0]).powi(2) + (x[1] - c[1]).powi(2) <= r * r);
            if inside {
                value
            } else {
                base
            }
        })
        .collect()
}

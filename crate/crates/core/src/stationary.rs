//! Stationary direct and reversed problems by source iteration with
//! upwind transport sweeps.

use log::warn;

use crate::error::{Error, Result};
use crate::evolution::{Dynamics, Stepper};
use crate::medium::{regime_report, KernelMode, Medium};
use crate::phase_grid::{BoundaryTrace, Field, PhaseSpaceGrid, Side, TracePart};

pub const DEFAULT_TOL: f64 = 1e-10;
pub const DEFAULT_MAX_SWEEPS: usize = 500;

#[derive(Clone, Debug)]
pub struct StationarySpec {
    /// `f` (direct) or `ρ` (reversed); enters as `source / l`.
    pub source: Field,
    /// Inflow data, a single-time inflow trace.
    pub inflow: Option<BoundaryTrace>,
    /// Absolute `V⁰` residual tolerance; `None` uses `1e−10·(1 + ‖rhs‖)`.
    pub tol: Option<f64>,
    pub max_sweeps: usize,
}

impl StationarySpec {
    pub fn new(source: Field) -> Self {
        Self {
            source,
            inflow: None,
            tol: None,
            max_sweeps: DEFAULT_MAX_SWEEPS,
        }
    }

    pub fn with_inflow(mut self, h: BoundaryTrace) -> Self {
        self.inflow = Some(h);
        self
    }

    pub fn with_tol(mut self, tol: f64) -> Self {
        self.tol = Some(tol);
        self
    }
}

#[derive(Clone, Debug)]
pub struct StationarySolution {
    pub field: Field,
    pub sweeps: usize,
    /// `V⁰` residual after each sweep.
    pub residual_history: Vec<f64>,
    /// Tolerance the residual was held to.
    pub tol: f64,
}

/// `(θ·∇)u + μa u + μs(I−K)u = f/l` with `u = h` on the inflow boundary.
pub fn solve_stationary_direct(
    grid: &PhaseSpaceGrid,
    medium: &Medium,
    spec: &StationarySpec,
) -> Result<StationarySolution> {
    solve(grid, medium, Dynamics::Direct, spec)
}

/// `(θ·∇)ψ − μa ψ − μs(I−K*)ψ = ρ/l` with `ψ = h` on the inflow boundary.
pub fn solve_stationary_reversed(
    grid: &PhaseSpaceGrid,
    medium: &Medium,
    spec: &StationarySpec,
) -> Result<StationarySolution> {
    if !regime_report(medium, grid).satisfied {
        warn!("weak-scattering condition fails; the reversed stationary problem has no stability guarantee");
    }
    solve(grid, medium, Dynamics::Reversed, spec)
}

fn solve(
    grid: &PhaseSpaceGrid,
    medium: &Medium,
    dynamics: Dynamics,
    spec: &StationarySpec,
) -> Result<StationarySolution> {
    spec.source.check(grid)?;
    if spec.max_sweeps < 1 {
        return Err(Error::InvalidArgument("max_sweeps must be >= 1".into()));
    }
    let mut rhs = spec.source.scaled(1.0 / grid.diameter()).into_values();
    if let Some(h) = &spec.inflow {
        if h.part() != TracePart::Inflow || h.n_samples() != 1 {
            return Err(Error::InvalidArgument(
                "stationary inflow must be a single-time inflow trace".into(),
            ));
        }
        // the stepper's injection with unit scale is exactly the ghost term
        let stepper = Stepper::new(grid, medium, dynamics, 0.0);
        stepper.inject(h.sample(0), 1.0, &mut rhs);
    }
    let tol = match spec.tol {
        Some(t) if t > 0.0 => t,
        Some(t) => return Err(Error::InvalidArgument(format!("tol must be > 0, got {t}"))),
        None => DEFAULT_TOL * (1.0 + grid.v0_inner_raw(&rhs, &rhs).sqrt()),
    };
    let solver = SourceIteration::new(grid, medium, dynamics, false)?;
    let (x, history) = solver.solve(&rhs, tol, spec.max_sweeps)?;
    Ok(StationarySolution {
        field: Field::from_values(grid, x)?,
        sweeps: history.len(),
        residual_history: history,
        tol,
    })
}

/// Source iteration for `A x = b`, with `A` the zero-ghost stationary
/// operator of `dynamics` or its Euclidean transpose.
pub(crate) struct SourceIteration<'a> {
    grid: &'a PhaseSpaceGrid,
    medium: &'a Medium,
    dynamics: Dynamics,
    transpose: bool,
    /// Sweep diagonal `Σ coef ± σ` per (cell, direction).
    diag: Vec<f64>,
    /// `±μs` multiplying the lagged kernel term on the right-hand side.
    lag: Vec<f64>,
    mode: KernelMode,
}

impl<'a> SourceIteration<'a> {
    pub fn new(
        grid: &'a PhaseSpaceGrid,
        medium: &'a Medium,
        dynamics: Dynamics,
        transpose: bool,
    ) -> Result<Self> {
        let (sign, mode) = match dynamics {
            Dynamics::Direct => (1.0, KernelMode::Forward),
            Dynamics::Reversed => (-1.0, KernelMode::Adjoint),
            _ => {
                return Err(Error::InvalidArgument(
                    "stationary problems use the direct or reversed operator".into(),
                ))
            }
        };
        let nd = grid.n_dirs();
        let mut diag = vec![0.0; grid.n_dofs()];
        for i in 0..grid.n_cells() {
            let sigma = medium.mu_a()[i] + medium.mu_s()[i];
            for k in 0..nd {
                let coef: f64 = grid.stencil(k).iter().flatten().map(|s| s.coef).sum();
                let d = coef + sign * sigma;
                if !(d > 0.0) {
                    return Err(Error::InvalidArgument(format!(
                        "sweep diagonal {d} is not positive at cell {i}; refine the grid"
                    )));
                }
                diag[i * nd + k] = d;
            }
        }
        let lag = medium.mu_s().iter().map(|m| sign * m).collect();
        Ok(Self {
            grid,
            medium,
            dynamics,
            transpose,
            diag,
            lag,
            mode,
        })
    }

    /// Solves `(D + diag) x = rhs` (or the transposed stencil) direction by
    /// direction in upwind (downwind) order.
    fn sweep(&self, rhs: &[f64], x: &mut [f64]) {
        let g = self.grid;
        let nd = g.n_dirs();
        let (nx, ny) = g.shape();
        for k in 0..nd {
            let st = g.stencil(k);
            let dir = g.directions()[k];
            // the transpose marches against the flow
            let forward_x = (dir[0] > 0.0) != self.transpose;
            let forward_y = (dir[1] > 0.0) != self.transpose;
            for jy in 0..ny {
                let iy = if forward_y { jy } else { ny - 1 - jy };
                for jx in 0..nx {
                    let ix = if forward_x { jx } else { nx - 1 - jx };
                    let Some(i) = g.cell_at(ix, iy) else { continue };
                    let mut acc = rhs[i * nd + k];
                    for a in st.iter().flatten() {
                        let side: Side = if self.transpose { a.downwind } else { a.upwind };
                        if let Some(j) = g.neighbor(i, side) {
                            acc += a.coef * x[j * nd + k];
                        }
                    }
                    x[i * nd + k] = acc / self.diag[i * nd + k];
                }
            }
        }
    }

    pub fn solve(&self, b: &[f64], tol: f64, max_sweeps: usize) -> Result<(Vec<f64>, Vec<f64>)> {
        let g = self.grid;
        let n = g.n_dofs();
        let stepper = Stepper::new(g, self.medium, self.dynamics, 0.0);
        let mut x = vec![0.0; n];
        let mut rhs = vec![0.0; n];
        let mut ax = vec![0.0; n];
        let mut history = Vec::new();
        for _ in 0..max_sweeps {
            rhs.copy_from_slice(b);
            self.medium
                .accumulate_kernel(self.mode, self.transpose, &self.lag, &x, &mut rhs);
            self.sweep(&rhs, &mut x);
            // independent residual of the full operator
            stepper.generator(&x, &mut ax, self.transpose);
            let r: Vec<f64> = b.iter().zip(&ax).map(|(bi, ai)| bi - ai).collect();
            let res = g.v0_inner_raw(&r, &r).sqrt();
            if !res.is_finite() {
                return Err(Error::NonFinite {
                    step: history.len(),
                    time: 0.0,
                });
            }
            history.push(res);
            if res <= tol {
                return Ok((x, history));
            }
        }
        Err(Error::NotConverged {
            solver: "source iteration",
            iterations: max_sweeps,
            residual: *history.last().unwrap_or(&f64::NAN),
        })
    }
}

/// `φ = l((θ·∇)ψ − (μa+μs)ψ)`, zero ghosts.
pub fn infsup_witness(grid: &PhaseSpaceGrid, medium: &Medium, psi: &Field) -> Result<Field> {
    psi.check(grid)?;
    let stepper = Stepper::new(grid, medium, Dynamics::BallisticReversed, 0.0);
    let mut out = Field::zeros(grid);
    stepper.generator(psi.values(), out.values_mut(), false);
    out.scale(grid.diameter());
    Ok(out)
}

/// `l⟨(θ·∇)ψ − μaψ − μs(I−K*)ψ, φ⟩`, zero ghosts.
pub fn reversed_bilinear_form(grid: &PhaseSpaceGrid, medium: &Medium, psi: &Field, phi: &Field) -> Result<f64> {
    psi.check(grid)?;
    phi.check(grid)?;
    let stepper = Stepper::new(grid, medium, Dynamics::Reversed, 0.0);
    let mut bpsi = vec![0.0; grid.n_dofs()];
    stepper.generator(psi.values(), &mut bpsi, false);
    Ok(grid.diameter() * grid.v0_inner_raw(&bpsi, phi.values()))
}

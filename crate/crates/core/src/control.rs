//! Boundary control: the map `Υ` from inflow data to the state at `τ`, its
//! adjoint, and the minimum-norm control `h_min = Υ*(ΥΥ*)⁻¹v★`.

use log::warn;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::evolution::{apply_mass, apply_trace_mass, evolve, evolve_transpose, Dynamics, EvolutionSpec};
use crate::krylov::conjugate_gradient;
use crate::medium::Medium;
use crate::phase_grid::{BoundaryTrace, Field, PhaseSpaceGrid, TracePart};
use crate::timereversal::{measure_with_dt, reflect_angle, reflect_time};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AdjointMode {
    /// Transpose of the discrete stepping map in the discrete inner products.
    ExactDiscrete,
    /// `(c/l)·U Λ V`, the continuum duality composed from discrete parts.
    Continuum,
}

/// `Υh = v(τ)` for the direct problem with zero initial state and inflow `h`.
pub fn steer(grid: &PhaseSpaceGrid, medium: &Medium, h: &BoundaryTrace, tau: f64) -> Result<Field> {
    if h.part() != TracePart::Inflow {
        return Err(Error::InvalidArgument("controls live on the inflow part".into()));
    }
    let spec = EvolutionSpec::new(tau, h.dt()).with_inflow(h.clone());
    Ok(evolve(grid, medium, Dynamics::Direct, &Field::zeros(grid), &spec)?.final_field)
}

/// `Υ*g` as an inflow trace on the time grid `(tau, dt)`.
pub fn adjoint_steer(
    grid: &PhaseSpaceGrid,
    medium: &Medium,
    g: &Field,
    tau: f64,
    dt: f64,
    mode: AdjointMode,
) -> Result<BoundaryTrace> {
    g.check(grid)?;
    match mode {
        AdjointMode::ExactDiscrete => {
            let n_steps = EvolutionSpec::new(tau, dt).n_steps(grid)?;
            let mut wg = g.values().to_vec();
            apply_mass(grid, &mut wg, false);
            let (_, h) = evolve_transpose(grid, medium, Dynamics::Direct, n_steps, dt, Some(&wg), None, true)?;
            let mut h = h.expect("requested");
            apply_trace_mass(grid, &mut h, true);
            Ok(h)
        }
        AdjointMode::Continuum => {
            let m = measure_with_dt(grid, medium, &reflect_angle(grid, g), tau, dt)?;
            let mut h = reflect_time(grid, &m.trace);
            h.scale(grid.speed() / grid.diameter());
            Ok(h)
        }
    }
}

#[derive(Clone, Debug)]
pub struct ControlSolveReport {
    pub h_min: BoundaryTrace,
    pub cg_iterations: usize,
    /// Relative residual `‖ΥΥ*w − v★‖/‖v★‖` per CG iteration.
    pub residual_history: Vec<f64>,
    /// `‖Υh_min − v★‖/‖v★‖`
    pub achieved: f64,
    pub converged: bool,
    pub final_state: Field,
}

#[derive(Clone, Copy, Debug)]
pub struct ControlOptions {
    pub tol: f64,
    pub max_iter: usize,
    pub mode: AdjointMode,
    /// Adds `εI` to the normal operator; zero disables it.
    pub tikhonov: f64,
}

impl Default for ControlOptions {
    fn default() -> Self {
        Self {
            tol: 1e-3,
            max_iter: 200,
            mode: AdjointMode::ExactDiscrete,
            tikhonov: 0.0,
        }
    }
}

/// Minimum-norm inflow control steering zero to `v_star` at `tau`, by
/// conjugate gradients on `ΥΥ*`.
///
/// Running out of iterations is not an error: the report carries the
/// residual reached, since rough targets may be only weakly reachable.
pub fn min_norm_control(
    grid: &PhaseSpaceGrid,
    medium: &Medium,
    v_star: &Field,
    tau: f64,
    dt: f64,
    opts: &ControlOptions,
) -> Result<ControlSolveReport> {
    v_star.check(grid)?;
    if tau < grid.crossing_time() {
        return Err(Error::InvalidArgument(format!(
            "tau = {tau} is shorter than the crossing time {}",
            grid.crossing_time()
        )));
    }
    let n_steps = EvolutionSpec::new(tau, dt).n_steps(grid)?;
    if opts.mode == AdjointMode::Continuum {
        warn!("conjugate gradients with the continuum adjoint: the normal operator is only approximately symmetric");
    }
    let inner = |a: &[f64], b: &[f64]| grid.v0_inner_raw(a, b);
    let normal = |w: &[f64]| -> Result<Vec<f64>> {
        let wf = Field::from_values(grid, w.to_vec())?;
        let h = adjoint_steer(grid, medium, &wf, tau, dt, opts.mode)?;
        let mut out = steer(grid, medium, &h, tau)?.into_values();
        if opts.tikhonov > 0.0 {
            for (o, wi) in out.iter_mut().zip(w) {
                *o += opts.tikhonov * wi;
            }
        }
        Ok(out)
    };
    let cg = conjugate_gradient(&mut |w| normal(w), v_star.values(), &inner, opts.tol, opts.max_iter)?;
    let w = Field::from_values(grid, cg.x)?;
    let h_min = if v_star.max_abs() == 0.0 {
        BoundaryTrace::zeros(grid, TracePart::Inflow, n_steps + 1, dt)
    } else {
        adjoint_steer(grid, medium, &w, tau, dt, opts.mode)?
    };
    let final_state = steer(grid, medium, &h_min, tau)?;
    let vn = grid.v0_norm(v_star);
    let achieved = if vn == 0.0 {
        0.0
    } else {
        grid.v0_norm(&final_state.sub(v_star)) / vn
    };
    if !cg.converged {
        warn!(
            "control CG stopped after {} iterations at relative residual {:e}",
            cg.iterations,
            cg.residual_history.last().unwrap()
        );
    }
    Ok(ControlSolveReport {
        h_min,
        cg_iterations: cg.iterations,
        residual_history: cg.residual_history,
        achieved,
        converged: cg.converged,
        final_state,
    })
}

//! Measurement, reflections, the time-reversal operator `G`, the error
//! operator `Q = I − GΛ`, and the two reconstruction solvers.

use std::collections::HashMap;

use log::{info, warn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::evolution::{
    apply_mass, evolve, evolve_transpose, fit_timestep, Dynamics, EvolutionSpec, DEFAULT_CFL_SAFETY,
};
use crate::krylov::{conjugate_gradient, gmres};
use crate::medium::{operator_norm_estimate, regime_report, Medium};
use crate::phase_grid::{time_weight, BoundaryTrace, Field, Geometry, PhaseSpaceGrid, TracePart};
use crate::stationary::{solve_stationary_reversed, SourceIteration, StationarySpec};

/// How the reversed evolution is started.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Lift {
    /// Solve the reversed stationary problem with the reflected data at
    /// `t = 0` and start from it.
    Stationary,
    /// Start from `ψ = 0`.
    Zero,
}

/// Outflow data `Λu₀` on `[0, τ]`, one sample per step.
#[derive(Clone, Debug)]
pub struct Measurement {
    pub trace: BoundaryTrace,
    pub tau: f64,
    pub dt: f64,
}

impl Measurement {
    pub fn new(trace: BoundaryTrace, tau: f64) -> Result<Self> {
        if trace.part() != TracePart::Outflow {
            return Err(Error::InvalidArgument("measurements live on the outflow part".into()));
        }
        let n = trace.n_samples();
        if n < 2 || ((n - 1) as f64 * trace.dt() - tau).abs() > 1e-9 * tau.max(1.0) {
            return Err(Error::InvalidArgument(format!(
                "{n} samples at dt = {} do not span tau = {tau}",
                trace.dt()
            )));
        }
        Ok(Self {
            dt: trace.dt(),
            trace,
            tau,
        })
    }

    pub fn n_steps(&self) -> usize {
        self.trace.n_samples() - 1
    }
}

/// `Λu₀` with the CFL step fitted to `tau`.
pub fn measure(grid: &PhaseSpaceGrid, medium: &Medium, u0: &Field, tau: f64) -> Result<Measurement> {
    let (dt, _) = fit_timestep(grid, tau, DEFAULT_CFL_SAFETY)?;
    measure_with_dt(grid, medium, u0, tau, dt)
}

pub fn measure_with_dt(
    grid: &PhaseSpaceGrid,
    medium: &Medium,
    u0: &Field,
    tau: f64,
    dt: f64,
) -> Result<Measurement> {
    let spec = EvolutionSpec::new(tau, dt).recording();
    let tr = evolve(grid, medium, Dynamics::Direct, u0, &spec)?;
    Ok(Measurement {
        trace: tr.outflow.expect("recorded"),
        tau,
        dt,
    })
}

/// `(Uh)(t, θ) = h(τ − t, −θ)`: reverses time and maps each slot to its
/// angular mirror, swapping the inflow and outflow parts.
pub fn reflect_time(grid: &PhaseSpaceGrid, h: &BoundaryTrace) -> BoundaryTrace {
    let n = h.n_samples();
    let mut out = BoundaryTrace::zeros(grid, h.part().flipped(), n, h.dt());
    let half = grid.slots(TracePart::Outflow).len();
    for s in 0..n {
        let src = h.sample(n - 1 - s);
        let dst = out.sample_mut(s);
        match h.part() {
            TracePart::Full => {
                dst[..half].copy_from_slice(&src[half..]);
                dst[half..].copy_from_slice(&src[..half]);
            }
            _ => dst.copy_from_slice(src),
        }
    }
    out
}

/// `(Vw)(x, θ) = w(x, −θ)`
pub fn reflect_angle(grid: &PhaseSpaceGrid, f: &Field) -> Field {
    let nd = grid.n_dirs();
    let mut out = f.clone();
    reflect_angle_raw(grid, f.values(), out.values_mut());
    debug_assert_eq!(out.n_dirs(), nd);
    out
}

pub(crate) fn reflect_angle_raw(grid: &PhaseSpaceGrid, f: &[f64], out: &mut [f64]) {
    let nd = grid.n_dirs();
    for (src, dst) in f.chunks_exact(nd).zip(out.chunks_exact_mut(nd)) {
        for k in 0..nd {
            dst[grid.opposite(k)] = src[k];
        }
    }
}

/// Applies `V` to every snapshot and reverses their order.
pub fn reflect_snapshots(grid: &PhaseSpaceGrid, snapshots: &[Field]) -> Vec<Field> {
    snapshots.iter().rev().map(|f| reflect_angle(grid, f)).collect()
}

/// `Gh = V ψ(τ)`, where `ψ` solves the reversed problem with inflow `Uh`.
pub fn time_reversal(grid: &PhaseSpaceGrid, medium: &Medium, h: &Measurement, lift: Lift) -> Result<Field> {
    if h.trace.part() != TracePart::Outflow {
        return Err(Error::InvalidArgument("time reversal expects outflow data".into()));
    }
    let inflow = reflect_time(grid, &h.trace);
    let psi0 = match lift {
        Lift::Zero => Field::zeros(grid),
        Lift::Stationary => {
            let spec = StationarySpec::new(Field::zeros(grid)).with_inflow(inflow.at_sample(0));
            solve_stationary_reversed(grid, medium, &spec)?.field
        }
    };
    let spec = EvolutionSpec::new(h.tau, h.dt).with_inflow(inflow);
    let tr = evolve(grid, medium, Dynamics::Reversed, &psi0, &spec)?;
    Ok(reflect_angle(grid, &tr.final_field))
}

/// `Qu₀ = u₀ − G(Λu₀)`
pub fn apply_q(grid: &PhaseSpaceGrid, medium: &Medium, u0: &Field, tau: f64, lift: Lift) -> Result<Field> {
    let (dt, _) = fit_timestep(grid, tau, DEFAULT_CFL_SAFETY)?;
    apply_q_with_dt(grid, medium, u0, tau, dt, lift)
}

pub fn apply_q_with_dt(
    grid: &PhaseSpaceGrid,
    medium: &Medium,
    u0: &Field,
    tau: f64,
    dt: f64,
    lift: Lift,
) -> Result<Field> {
    let m = measure_with_dt(grid, medium, u0, tau, dt)?;
    Ok(u0.sub(&time_reversal(grid, medium, &m, lift)?))
}

/// `V R(τ) V S(τ) u₀`, the composition that `Q` equals in the continuum.
pub fn q_composition(grid: &PhaseSpaceGrid, medium: &Medium, u0: &Field, tau: f64, dt: f64) -> Result<Field> {
    let spec = EvolutionSpec::new(tau, dt);
    let s = evolve(grid, medium, Dynamics::Direct, u0, &spec)?.final_field;
    let r = evolve(grid, medium, Dynamics::Reversed, &reflect_angle(grid, &s), &spec)?.final_field;
    Ok(reflect_angle(grid, &r))
}

/// Linear operators `Λ`, `G` and their Euclidean transposes on one time grid.
pub(crate) struct ReversalOperators<'a> {
    pub grid: &'a PhaseSpaceGrid,
    pub medium: &'a Medium,
    pub tau: f64,
    pub dt: f64,
    pub n_steps: usize,
    pub lift: Lift,
}

impl<'a> ReversalOperators<'a> {
    pub fn new(grid: &'a PhaseSpaceGrid, medium: &'a Medium, tau: f64, dt: f64, lift: Lift) -> Result<Self> {
        let n_steps = EvolutionSpec::new(tau, dt).n_steps(grid)?;
        Ok(Self {
            grid,
            medium,
            tau,
            dt,
            n_steps,
            lift,
        })
    }

    pub fn lambda(&self, u0: &Field) -> Result<Measurement> {
        measure_with_dt(self.grid, self.medium, u0, self.tau, self.dt)
    }

    pub fn g(&self, h: &Measurement) -> Result<Field> {
        time_reversal(self.grid, self.medium, h, self.lift)
    }

    pub fn q(&self, u0: &Field) -> Result<Field> {
        Ok(u0.sub(&self.g(&self.lambda(u0)?)?))
    }

    /// `Gᵀ g` as an outflow trace.
    pub fn g_transpose(&self, g: &[f64]) -> Result<BoundaryTrace> {
        let grid = self.grid;
        let mut vg = vec![0.0; grid.n_dofs()];
        reflect_angle_raw(grid, g, &mut vg);
        let (psi0_t, inflow_t) = evolve_transpose(
            grid,
            self.medium,
            Dynamics::Reversed,
            self.n_steps,
            self.dt,
            Some(&vg),
            None,
            true,
        )?;
        let mut inflow_t = inflow_t.expect("requested");
        if self.lift == Lift::Stationary {
            // ψ₀ = A⁻¹ E (Uh)(0), so the sample-0 gradient gains Eᵀ A⁻ᵀ ψ₀ᵀ
            let solver = SourceIteration::new(grid, self.medium, Dynamics::Reversed, true)?;
            let tol = 1e-13 * (1.0 + grid.v0_inner_raw(&psi0_t, &psi0_t).sqrt());
            let (y, _) = solver.solve(&psi0_t, tol, 2000)?;
            let stepper = crate::evolution::Stepper::new(grid, self.medium, Dynamics::Reversed, 0.0);
            stepper.extract(&y, 1.0, inflow_t.sample_mut(0));
        }
        Ok(reflect_time(grid, &inflow_t))
    }

    /// `Λᵀ z`
    pub fn lambda_transpose(&self, z: &BoundaryTrace) -> Result<Vec<f64>> {
        let (x, _) = evolve_transpose(
            self.grid,
            self.medium,
            Dynamics::Direct,
            self.n_steps,
            self.dt,
            None,
            Some(z),
            false,
        )?;
        Ok(x)
    }

    /// `Qᵀ x = x − Λᵀ Gᵀ x`
    pub fn q_transpose(&self, x: &[f64]) -> Result<Vec<f64>> {
        let z = self.g_transpose(x)?;
        let lz = self.lambda_transpose(&z)?;
        Ok(x.iter().zip(&lz).map(|(a, b)| a - b).collect())
    }
}

/// Neumann-series outcome.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum ReconstructionStatus {
    Converged,
    MaxIterations,
    Diverged,
}

#[derive(Clone, Debug)]
pub struct ReconstructionReport {
    /// `‖u₀⁽ⁿ⁾ − u₀⁽ⁿ⁻¹⁾‖_{V⁰}`, with `u₀⁽⁻¹⁾ = 0`.
    pub increments: Vec<f64>,
    /// `V¹` increments, stationary lift only.
    pub increments_v1: Vec<f64>,
    /// `‖u₀⁽ⁿ⁾ − u₀‖_{V⁰} / ‖u₀‖_{V⁰}` when the truth is known.
    pub errors: Vec<f64>,
    /// Successive increment ratios.
    pub ratios: Vec<f64>,
    pub contraction_estimate: f64,
    pub status: ReconstructionStatus,
    pub converged: bool,
    pub final_field: Field,
}

/// Relative increment below which the series is considered summed.
pub const NEUMANN_REL_TOL: f64 = 1e-10;

/// Partial sums of `Σ Qⁿ G h`.
pub fn reconstruct_neumann(
    grid: &PhaseSpaceGrid,
    medium: &Medium,
    h: &Measurement,
    n_iter: usize,
    lift: Lift,
    ground_truth: Option<&Field>,
) -> Result<ReconstructionReport> {
    if n_iter < 1 {
        return Err(Error::InvalidArgument("n_iter must be >= 1".into()));
    }
    if lift == Lift::Stationary && !regime_report(medium, grid).satisfied {
        warn!("stationary lift outside the weak-scattering regime");
    }
    let ops = ReversalOperators::new(grid, medium, h.tau, h.dt, lift)?;
    let truth_norm = ground_truth.map(|t| grid.v0_norm(t));
    let mut report = ReconstructionReport {
        increments: Vec::new(),
        increments_v1: Vec::new(),
        errors: Vec::new(),
        ratios: Vec::new(),
        contraction_estimate: 0.0,
        status: ReconstructionStatus::MaxIterations,
        converged: false,
        final_field: Field::zeros(grid),
    };
    let mut u = Field::zeros(grid);
    let mut residual = h.clone();
    let mut above_one = 0;
    for it in 0..=n_iter {
        let inc = ops.g(&residual)?;
        u.axpy(1.0, &inc);
        let d = grid.v0_norm(&inc);
        report.increments.push(d);
        if lift == Lift::Stationary {
            report.increments_v1.push(grid.v1_norm(&inc)?);
        }
        if let (Some(t), Some(tn)) = (ground_truth, truth_norm) {
            report.errors.push(grid.v0_norm(&u.sub(t)) / tn);
        }
        if it > 0 {
            let prev = report.increments[it - 1];
            let ratio = if prev > 0.0 { d / prev } else { 0.0 };
            report.ratios.push(ratio);
            above_one = if ratio > 1.0 { above_one + 1 } else { 0 };
            if above_one >= 3 {
                report.status = ReconstructionStatus::Diverged;
                break;
            }
        }
        let un = grid.v0_norm(&u);
        info!("neumann iteration {it}: increment {d:e}");
        if d <= NEUMANN_REL_TOL * un || un == 0.0 {
            report.status = ReconstructionStatus::Converged;
            break;
        }
        if it == n_iter {
            break;
        }
        let lu = ops.lambda(&u)?;
        let mut r = h.trace.clone();
        r.axpy(-1.0, &lu.trace);
        residual = Measurement {
            trace: r,
            tau: h.tau,
            dt: h.dt,
        };
    }
    let positive: Vec<f64> = report.ratios.iter().copied().filter(|r| *r > 0.0).collect();
    report.contraction_estimate = if positive.is_empty() {
        0.0
    } else {
        (positive.iter().map(|r| r.ln()).sum::<f64>() / positive.len() as f64).exp()
    };
    report.converged = report.status == ReconstructionStatus::Converged;
    report.final_field = u;
    Ok(report)
}

#[derive(Clone, Debug)]
pub struct FredholmReport {
    pub field: Field,
    pub iterations: usize,
    pub residual_history: Vec<f64>,
    pub near_breakdown: bool,
}

pub const GMRES_RESTART: usize = 30;

/// Solves `(I − Q)u₀ = Gh` with restarted GMRES in the `V⁰` inner product,
/// zero initial guess, zero lift.
pub fn solve_fredholm(
    grid: &PhaseSpaceGrid,
    medium: &Medium,
    h: &Measurement,
    tol: f64,
    max_iter: usize,
) -> Result<FredholmReport> {
    let ops = ReversalOperators::new(grid, medium, h.tau, h.dt, Lift::Zero)?;
    let rhs = ops.g(h)?;
    let inner = |a: &[f64], b: &[f64]| grid.v0_inner_raw(a, b);
    let mut apply = |x: &[f64]| -> Result<Vec<f64>> {
        let f = Field::from_values(grid, x.to_vec())?;
        Ok(ops.g(&ops.lambda(&f)?)?.into_values())
    };
    let out = gmres(&mut apply, rhs.values(), &inner, GMRES_RESTART, tol, max_iter)?;
    if out.near_breakdown {
        warn!("GMRES met a near-breakdown; 1 may lie close to the spectrum of Q");
    }
    if !out.converged {
        return Err(Error::NotConverged {
            solver: "gmres",
            iterations: out.iterations,
            residual: *out.residual_history.last().unwrap(),
        });
    }
    Ok(FredholmReport {
        field: Field::from_values(grid, out.x)?,
        iterations: out.iterations,
        residual_history: out.residual_history,
        near_breakdown: out.near_breakdown,
    })
}

/// Power-iteration estimate of `‖Q‖`: in `V⁰` for the zero lift, in `V¹`
/// for the stationary lift.
pub fn contraction_factor(
    grid: &PhaseSpaceGrid,
    medium: &Medium,
    tau: f64,
    lift: Lift,
    iters: usize,
    seed: u64,
) -> Result<f64> {
    let (dt, _) = fit_timestep(grid, tau, DEFAULT_CFL_SAFETY)?;
    let ops = ReversalOperators::new(grid, medium, tau, dt, lift)?;
    match lift {
        Lift::Zero => {
            let mut apply = |f: &Field| ops.q(f);
            let mut adjoint = |f: &Field| {
                let mut w = f.values().to_vec();
                apply_mass(grid, &mut w, false);
                let mut x = ops.q_transpose(&w)?;
                apply_mass(grid, &mut x, true);
                Field::from_values(grid, x)
            };
            operator_norm_estimate(grid, &mut apply, Some(&mut adjoint), iters, seed)
        }
        Lift::Stationary => v1_norm_estimate(grid, &ops, iters, seed),
    }
}

/// `Γx = l² D_fᵀ W D_f x + W x + Cᵀ W_T C x`, the `V¹` Gram operator.
fn v1_gram(grid: &PhaseSpaceGrid, x: &[f64]) -> Vec<f64> {
    let l = grid.diameter();
    let n = grid.n_dofs();
    let mut dx = vec![0.0; n];
    grid.free_stream_raw(x, &mut dx, false);
    apply_mass(grid, &mut dx, false);
    let mut out = vec![0.0; n];
    grid.free_stream_raw(&dx, &mut out, true);
    out.iter_mut().for_each(|v| *v *= l * l);
    let mut wx = x.to_vec();
    apply_mass(grid, &mut wx, false);
    for (o, v) in out.iter_mut().zip(&wx) {
        *o += v;
    }
    let mut tr = vec![0.0; grid.slots(TracePart::Full).len()];
    grid.gather_slots(TracePart::Full, x, &mut tr);
    for (t, w) in tr.iter_mut().zip(grid.slot_weights(TracePart::Full)) {
        *t *= w;
    }
    grid.scatter_slots(TracePart::Full, &tr, 1.0, &mut out);
    out
}

fn v1_norm_estimate(grid: &PhaseSpaceGrid, ops: &ReversalOperators<'_>, iters: usize, seed: u64) -> Result<f64> {
    if iters < 1 {
        return Err(Error::InvalidArgument("power iteration needs iters >= 1".into()));
    }
    let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
    let gram_norm = |x: &[f64]| dot(x, &v1_gram(grid, x)).sqrt();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut x: Vec<f64> = (0..grid.n_dofs()).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let n0 = gram_norm(&x);
    x.iter_mut().for_each(|v| *v /= n0);
    let mut estimate = 0.0;
    for _ in 0..iters {
        let qx = ops.q(&Field::from_values(grid, x.clone())?)?;
        estimate = gram_norm(qx.values());
        // Q^{*V¹} = Γ⁻¹ Qᵀ Γ
        let gq = v1_gram(grid, qx.values());
        let rhs = ops.q_transpose(&gq)?;
        let out = conjugate_gradient(&mut |v| Ok(v1_gram(grid, v)), &rhs, &dot, 1e-12, 5000)?;
        let nz = gram_norm(&out.x);
        if nz == 0.0 {
            break;
        }
        x = out.x.iter().map(|v| v / nz).collect();
    }
    Ok(estimate)
}

/// Averages a trace recorded on a grid refined 2× in space and time onto
/// the coarse slots and time samples.
///
/// Each coarse face is covered by one (rod) or two (box) fine faces with the
/// same side; values are averaged over them. In time, interior coarse
/// samples use weights `(¼, ½, ¼)` around the coincident fine sample.
pub fn restrict_fine_trace(
    fine: &PhaseSpaceGrid,
    coarse: &PhaseSpaceGrid,
    trace: &BoundaryTrace,
) -> Result<BoundaryTrace> {
    if matches!(coarse.geometry(), Geometry::Disk2d { .. }) {
        return Err(Error::InvalidArgument(
            "fine-to-coarse trace transfer is only defined for rods and boxes".into(),
        ));
    }
    let (cx, cy) = coarse.shape();
    let (fx, fy) = fine.shape();
    let factor_y = if coarse.dim() == 1 { 1 } else { 2 };
    if fx != 2 * cx || fy != factor_y * cy || fine.n_dirs() != coarse.n_dirs() {
        return Err(Error::InvalidArgument("fine grid must be the 2x refinement".into()));
    }
    if trace.part() != TracePart::Outflow || !(trace.n_samples() - 1).is_multiple_of(2) {
        return Err(Error::InvalidArgument(
            "expected an outflow trace with an even number of steps".into(),
        ));
    }
    let mut fine_slot: HashMap<(usize, usize), usize> = HashMap::new();
    for (j, s) in fine.slots(TracePart::Outflow).iter().enumerate() {
        fine_slot.insert((s.face, s.dir), j);
    }
    // for every coarse outflow slot, the fine slots covering it
    let mut cover: Vec<Vec<usize>> = Vec::new();
    for s in coarse.slots(TracePart::Outflow) {
        let face = &coarse.faces()[s.face];
        let (ix, iy) = coarse.cell_lattice_index(face.cell);
        let mut children = Vec::new();
        for dy in 0..factor_y {
            for dxi in 0..2 {
                let (fxi, fyi) = (2 * ix + dxi, factor_y * iy + dy);
                let Some(c) = fine.cell_at(fxi, fyi) else { continue };
                if let Some(ff) = fine.cell_face(c, face.side) {
                    if let Some(j) = fine_slot.get(&(ff, s.dir)) {
                        children.push(*j);
                    }
                }
            }
        }
        if children.is_empty() {
            return Err(Error::InvalidArgument("coarse face has no fine counterpart".into()));
        }
        cover.push(children);
    }
    let n_coarse = (trace.n_samples() - 1) / 2 + 1;
    let mut out = BoundaryTrace::zeros(coarse, TracePart::Outflow, n_coarse, 2.0 * trace.dt());
    let space = |s: usize, j: usize| -> f64 {
        let v = trace.sample(s);
        cover[j].iter().map(|&c| v[c]).sum::<f64>() / cover[j].len() as f64
    };
    for n in 0..n_coarse {
        let f = 2 * n;
        for j in 0..cover.len() {
            let v = if n == 0 || n + 1 == n_coarse {
                space(f, j)
            } else {
                0.25 * space(f - 1, j) + 0.5 * space(f, j) + 0.25 * space(f + 1, j)
            };
            out.sample_mut(n)[j] = v;
        }
    }
    Ok(out)
}

/// `L²([0,τ]; T₊)` norm of a measurement.
pub fn measurement_norm(grid: &PhaseSpaceGrid, h: &Measurement) -> f64 {
    let w = grid.slot_weights(TracePart::Outflow);
    let n = h.trace.n_samples();
    (0..n)
        .map(|s| {
            time_weight(s, n, h.dt)
                * h.trace
                    .sample(s)
                    .iter()
                    .zip(w)
                    .map(|(v, w)| v * v * w)
                    .sum::<f64>()
        })
        .sum::<f64>()
        .sqrt()
}

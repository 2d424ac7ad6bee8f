//! Explicit upwind time stepping of the direct, reversed and ballistic
//! transport problems, plus the exact transpose of the stepping map.
//!
//! One step reads
//!
//! ```text
//! x⁺ = x − c·dt·L x + c·dt·E η + (c·dt/l)·f(tₙ)
//! ```
//!
//! where `L` is the zero-ghost generator, `E` injects inflow values as upwind
//! ghosts and `η = (hⁿ + hⁿ⁺¹)/2` is the time-centred inflow sample.

use log::warn;

use crate::error::{Error, Result};
use crate::medium::{operator_norm_estimate, regime_report, KernelMode, Medium};
use crate::phase_grid::{time_weight, BoundaryTrace, Field, PhaseSpaceGrid, TracePart};

/// Relative slack on `τ/dt` being an integer.
const STEP_COUNT_SLACK: f64 = 1e-9;
const NAN_CHECK_EVERY: usize = 100;
/// Reversed solutions above this multiple of the growth bound are flagged.
const GROWTH_WARN_FACTOR: f64 = 10.0;

pub const DEFAULT_CFL_SAFETY: f64 = 0.9;

/// Which transport operator drives the evolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Dynamics {
    /// `θ·∇ + μa + μs(I − K)`
    Direct,
    /// `θ·∇ − μa − μs(I − K*)`
    Reversed,
    /// `θ·∇ + (μa + μs)`
    BallisticDirect,
    /// `θ·∇ − (μa + μs)`
    BallisticReversed,
}

impl Dynamics {
    fn sign(self) -> f64 {
        match self {
            Dynamics::Direct | Dynamics::BallisticDirect => 1.0,
            Dynamics::Reversed | Dynamics::BallisticReversed => -1.0,
        }
    }

    fn kernel(self) -> Option<KernelMode> {
        match self {
            Dynamics::Direct => Some(KernelMode::Forward),
            Dynamics::Reversed => Some(KernelMode::Adjoint),
            _ => None,
        }
    }

    fn is_reversed(self) -> bool {
        self.sign() < 0.0
    }
}

/// Time-dependent source `f`, entering the equation as `f/l`.
#[derive(Clone, Debug)]
pub enum Forcing {
    Constant(Field),
    /// One field per step, evaluated at `tₙ`, `n = 0..n_steps`.
    Steps(Vec<Field>),
}

impl Forcing {
    fn at(&self, n: usize) -> &Field {
        match self {
            Forcing::Constant(f) => f,
            Forcing::Steps(v) => &v[n],
        }
    }
}

#[derive(Clone, Debug)]
pub struct EvolutionSpec {
    pub tau: f64,
    pub dt: f64,
    pub forcing: Option<Forcing>,
    /// Inflow data with `n_steps + 1` samples.
    pub inflow: Option<BoundaryTrace>,
    pub record_trace: bool,
    /// Snapshot stride; `None` keeps only the final field.
    pub record_every: Option<usize>,
}

impl EvolutionSpec {
    pub fn new(tau: f64, dt: f64) -> Self {
        Self {
            tau,
            dt,
            forcing: None,
            inflow: None,
            record_trace: false,
            record_every: None,
        }
    }

    /// `τ` with the CFL step shrunk so that it divides `τ` exactly.
    pub fn fitted(grid: &PhaseSpaceGrid, tau: f64, cfl_safety: f64) -> Result<Self> {
        let (dt, _) = fit_timestep(grid, tau, cfl_safety)?;
        Ok(Self::new(tau, dt))
    }

    pub fn with_inflow(mut self, inflow: BoundaryTrace) -> Self {
        self.inflow = Some(inflow);
        self
    }

    pub fn with_forcing(mut self, forcing: Forcing) -> Self {
        self.forcing = Some(forcing);
        self
    }

    pub fn recording(mut self) -> Self {
        self.record_trace = true;
        self
    }

    pub fn with_snapshots(mut self, every: usize) -> Self {
        self.record_every = Some(every);
        self
    }

    /// Validates these settings against `grid` and returns the step count.
    pub fn n_steps(&self, grid: &PhaseSpaceGrid) -> Result<usize> {
        if !(self.tau >= 0.0 && self.tau.is_finite()) {
            return Err(Error::InvalidArgument(format!("tau must be >= 0, got {}", self.tau)));
        }
        if !(self.dt > 0.0) {
            return Err(Error::InvalidArgument(format!("dt must be > 0, got {}", self.dt)));
        }
        let limit = cfl_limit(grid);
        if self.dt > limit * (1.0 + 1e-12) {
            return Err(Error::Cfl {
                dt: self.dt,
                limit,
            });
        }
        let ratio = self.tau / self.dt;
        let n = ratio.round();
        if (n - ratio).abs() > STEP_COUNT_SLACK * ratio.max(1.0) {
            return Err(Error::NonIntegerSteps { ratio });
        }
        let n = n as usize;
        if let Some(h) = &self.inflow {
            if h.part() != TracePart::Inflow {
                return Err(Error::InvalidArgument("inflow trace must be the inflow part".into()));
            }
            if h.n_samples() != n + 1 || h.n_slots() != grid.slots(TracePart::Inflow).len() {
                return Err(Error::ShapeMismatch {
                    expected: (n + 1) * grid.slots(TracePart::Inflow).len(),
                    found: h.values().len(),
                });
            }
        }
        match &self.forcing {
            Some(Forcing::Steps(v)) if v.len() < n => {
                return Err(Error::ShapeMismatch {
                    expected: n,
                    found: v.len(),
                })
            }
            Some(Forcing::Constant(f)) => f.check(grid)?,
            _ => {}
        }
        if self.record_every == Some(0) {
            return Err(Error::InvalidArgument("record_every must be >= 1".into()));
        }
        Ok(n)
    }
}

#[derive(Clone, Debug)]
pub struct Trajectory {
    pub times: Vec<f64>,
    pub snapshots: Vec<Field>,
    pub final_field: Field,
    /// Outflow values at every step `0..=n_steps` when recorded.
    pub outflow: Option<BoundaryTrace>,
    pub n_steps: usize,
    pub dt: f64,
}

/// Largest stable step: `1 / (c · max_k Σ_a |θ_a|/h_a)`.
fn cfl_limit(grid: &PhaseSpaceGrid) -> f64 {
    1.0 / (grid.speed() * grid.max_streaming_rate())
}

/// `safety · h_eff / c`, where `h_eff = Δx` in 1D and the directional
/// width `1 / max_k(|θ_x|/Δx + |θ_y|/Δy)` in 2D.
pub fn cfl_timestep(grid: &PhaseSpaceGrid, cfl_safety: f64) -> Result<f64> {
    if !(cfl_safety > 0.0 && cfl_safety <= 1.0) {
        return Err(Error::InvalidArgument(format!(
            "cfl_safety must lie in (0, 1], got {cfl_safety}"
        )));
    }
    Ok(cfl_safety * cfl_limit(grid))
}

/// Largest `dt ≤ cfl_timestep` dividing `tau`, and the step count.
pub fn fit_timestep(grid: &PhaseSpaceGrid, tau: f64, cfl_safety: f64) -> Result<(f64, usize)> {
    let dt = cfl_timestep(grid, cfl_safety)?;
    if tau == 0.0 {
        return Ok((dt, 0));
    }
    let n = (tau / dt * (1.0 - 1e-12)).ceil().max(1.0) as usize;
    Ok((tau / n as f64, n))
}

/// Precomputed linear step for one dynamics on one grid.
pub(crate) struct Stepper<'a> {
    grid: &'a PhaseSpaceGrid,
    medium: &'a Medium,
    dynamics: Dynamics,
    /// `±(μa + μs)` per cell.
    reaction: Vec<f64>,
    /// `∓μs` per cell, zero for ballistic dynamics.
    scatter: Vec<f64>,
    cdt: f64,
    scratch: Vec<f64>,
}

impl<'a> Stepper<'a> {
    pub fn new(grid: &'a PhaseSpaceGrid, medium: &'a Medium, dynamics: Dynamics, dt: f64) -> Self {
        let s = dynamics.sign();
        let reaction = medium
            .mu_a()
            .iter()
            .zip(medium.mu_s())
            .map(|(a, b)| s * (a + b))
            .collect();
        let scatter = if dynamics.kernel().is_some() {
            medium.mu_s().iter().map(|m| -s * m).collect()
        } else {
            vec![0.0; grid.n_cells()]
        };
        Self {
            grid,
            medium,
            dynamics,
            reaction,
            scatter,
            cdt: grid.speed() * dt,
            scratch: vec![0.0; grid.n_dofs()],
        }
    }

    /// `out = L x` (or `Lᵀ x`).
    pub fn generator(&self, x: &[f64], out: &mut [f64], transpose: bool) {
        let nd = self.grid.n_dirs();
        self.grid.stream_raw(x, out, transpose);
        for (i, (xi, oi)) in x.chunks_exact(nd).zip(out.chunks_exact_mut(nd)).enumerate() {
            let r = self.reaction[i];
            for (o, v) in oi.iter_mut().zip(xi) {
                *o += r * v;
            }
        }
        if let Some(mode) = self.dynamics.kernel() {
            self.medium
                .accumulate_kernel(mode, transpose, &self.scatter, x, out);
        }
    }

    /// `x ← x − c·dt·L x` (or with `Lᵀ`).
    pub fn propagate(&mut self, x: &mut [f64], transpose: bool) {
        let mut scratch = std::mem::take(&mut self.scratch);
        self.generator(x, &mut scratch, transpose);
        for (xi, li) in x.iter_mut().zip(&scratch) {
            *xi -= self.cdt * li;
        }
        self.scratch = scratch;
    }

    /// `x += scale · E η` over the inflow slots.
    pub fn inject(&self, eta: &[f64], scale: f64, x: &mut [f64]) {
        let nd = self.grid.n_dirs();
        for (v, slot) in eta.iter().zip(self.grid.slots(TracePart::Inflow)) {
            let cell = self.grid.faces()[slot.face].cell;
            x[cell * nd + slot.dir] += scale * self.grid.slot_flux_coef(slot) * v;
        }
    }

    /// `out[j] += scale · (Eᵀ x)_j`
    pub fn extract(&self, x: &[f64], scale: f64, out: &mut [f64]) {
        let nd = self.grid.n_dirs();
        for (o, slot) in out.iter_mut().zip(self.grid.slots(TracePart::Inflow)) {
            let cell = self.grid.faces()[slot.face].cell;
            *o += scale * self.grid.slot_flux_coef(slot) * x[cell * nd + slot.dir];
        }
    }

    pub fn cdt(&self) -> f64 {
        self.cdt
    }
}

/// Runs `dynamics` from `x0` under `spec`.
pub fn evolve(
    grid: &PhaseSpaceGrid,
    medium: &Medium,
    dynamics: Dynamics,
    x0: &Field,
    spec: &EvolutionSpec,
) -> Result<Trajectory> {
    x0.check(grid)?;
    if !x0.is_finite() {
        return Err(Error::NonFinite { step: 0, time: 0.0 });
    }
    let n_steps = spec.n_steps(grid)?;
    let mut stepper = Stepper::new(grid, medium, dynamics, spec.dt);
    let cdt = stepper.cdt();
    let forcing_scale = cdt / grid.diameter();
    let n_in = grid.slots(TracePart::Inflow).len();
    let mut eta = vec![0.0; n_in];

    let mut x = x0.values().to_vec();
    let mut outflow = spec
        .record_trace
        .then(|| BoundaryTrace::zeros(grid, TracePart::Outflow, n_steps + 1, spec.dt));
    let mut times = Vec::new();
    let mut snapshots = Vec::new();
    let record = |n: usize, x: &[f64], times: &mut Vec<f64>, snaps: &mut Vec<Field>| {
        if let Some(every) = spec.record_every {
            if n.is_multiple_of(every) {
                times.push(n as f64 * spec.dt);
                snaps.push(Field::from_values(grid, x.to_vec()).unwrap());
            }
        }
    };
    if let Some(tr) = outflow.as_mut() {
        grid.gather_slots(TracePart::Outflow, &x, tr.sample_mut(0));
    }
    record(0, &x, &mut times, &mut snapshots);

    let watch_growth = dynamics.is_reversed() && spec.inflow.is_none() && spec.forcing.is_none();
    let regime = regime_report(medium, grid);
    let norm0 = grid.v0_norm(x0);
    let mut warned = false;

    for n in 0..n_steps {
        if let Some(f) = &spec.forcing {
            let fv = f.at(n).values();
            stepper.propagate(&mut x, false);
            for (xi, fi) in x.iter_mut().zip(fv) {
                *xi += forcing_scale * fi;
            }
        } else {
            stepper.propagate(&mut x, false);
        }
        if let Some(h) = &spec.inflow {
            for ((e, a), b) in eta.iter_mut().zip(h.sample(n)).zip(h.sample(n + 1)) {
                *e = 0.5 * (a + b);
            }
            stepper.inject(&eta, cdt, &mut x);
        }
        if let Some(tr) = outflow.as_mut() {
            grid.gather_slots(TracePart::Outflow, &x, tr.sample_mut(n + 1));
        }
        record(n + 1, &x, &mut times, &mut snapshots);
        if (n + 1) % NAN_CHECK_EVERY == 0 || n + 1 == n_steps {
            if !x.iter().all(|v| v.is_finite()) {
                return Err(Error::NonFinite {
                    step: n + 1,
                    time: (n + 1) as f64 * spec.dt,
                });
            }
            if watch_growth && !warned && norm0 > 0.0 {
                let t = (n + 1) as f64 * spec.dt;
                let norm = grid.v0_inner_raw(&x, &x).sqrt();
                let bound = regime.reversed_bound(t, 0.0) * norm0;
                if norm > GROWTH_WARN_FACTOR * bound {
                    warn!(
                        "reversed solution norm {norm:e} exceeds {GROWTH_WARN_FACTOR}x the \
                         growth bound {bound:e} at t = {t}; the scheme may be unstable"
                    );
                    warned = true;
                }
            }
        }
    }
    Ok(Trajectory {
        times,
        snapshots,
        final_field: Field::from_values(grid, x)?,
        outflow,
        n_steps,
        dt: spec.dt,
    })
}

pub fn evolve_direct(grid: &PhaseSpaceGrid, medium: &Medium, u0: &Field, spec: &EvolutionSpec) -> Result<Trajectory> {
    evolve(grid, medium, Dynamics::Direct, u0, spec)
}

pub fn evolve_reversed(
    grid: &PhaseSpaceGrid,
    medium: &Medium,
    psi0: &Field,
    spec: &EvolutionSpec,
) -> Result<Trajectory> {
    evolve(grid, medium, Dynamics::Reversed, psi0, spec)
}

/// Pure transport with total attenuation `μa + μs`, signed per `reversed`.
pub fn evolve_ballistic(
    grid: &PhaseSpaceGrid,
    medium: &Medium,
    u0: &Field,
    spec: &EvolutionSpec,
    reversed: bool,
) -> Result<Trajectory> {
    let d = if reversed {
        Dynamics::BallisticReversed
    } else {
        Dynamics::BallisticDirect
    };
    evolve(grid, medium, d, u0, spec)
}

/// Euclidean transpose of `(x₀, h) ↦ (x_N, y₀..y_N)` for zero forcing.
///
/// Given a weight `g` on the final state and `z` on the recorded outflow
/// samples, returns `(x₀ᵀ, hᵀ)`: the gradient of `⟨g, x_N⟩ + Σ ⟨zₙ, yₙ⟩`
/// with respect to the initial state and to each inflow sample.
#[allow(clippy::too_many_arguments)]
pub(crate) fn evolve_transpose(
    grid: &PhaseSpaceGrid,
    medium: &Medium,
    dynamics: Dynamics,
    n_steps: usize,
    dt: f64,
    final_weight: Option<&[f64]>,
    outflow_weight: Option<&BoundaryTrace>,
    want_inflow: bool,
) -> Result<(Vec<f64>, Option<BoundaryTrace>)> {
    let mut stepper = Stepper::new(grid, medium, dynamics, dt);
    let cdt = stepper.cdt();
    let mut lambda = match final_weight {
        Some(g) => g.to_vec(),
        None => vec![0.0; grid.n_dofs()],
    };
    if let Some(z) = outflow_weight {
        if z.n_samples() != n_steps + 1 || z.part() != TracePart::Outflow {
            return Err(Error::InvalidArgument("outflow weight has the wrong shape".into()));
        }
        grid.scatter_slots(TracePart::Outflow, z.sample(n_steps), 1.0, &mut lambda);
    }
    let mut inflow =
        want_inflow.then(|| BoundaryTrace::zeros(grid, TracePart::Inflow, n_steps + 1, dt));
    for n in (0..n_steps).rev() {
        if let Some(h) = inflow.as_mut() {
            stepper.extract(&lambda, 0.5 * cdt, h.sample_mut(n));
            stepper.extract(&lambda, 0.5 * cdt, h.sample_mut(n + 1));
        }
        stepper.propagate(&mut lambda, true);
        if let Some(z) = outflow_weight {
            grid.scatter_slots(TracePart::Outflow, z.sample(n), 1.0, &mut lambda);
        }
        if (n % NAN_CHECK_EVERY == 0) && !lambda.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite {
                step: n,
                time: n as f64 * dt,
            });
        }
    }
    Ok((lambda, inflow))
}

/// Solution operator `u₀ ↦ u(t)` with zero forcing and inflow.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Semigroup {
    S,
    R,
}

/// `V⁰` norm of `S(t)` or `R(t)` by power iteration on `A*A`, with the
/// exact discrete adjoint.
pub fn semigroup_norm(
    grid: &PhaseSpaceGrid,
    medium: &Medium,
    t: f64,
    which: Semigroup,
    iters: usize,
    seed: u64,
) -> Result<f64> {
    if iters < 3 {
        return Err(Error::InvalidArgument("semigroup_norm needs iters >= 3".into()));
    }
    if !(t >= 0.0) {
        return Err(Error::InvalidArgument(format!("t must be >= 0, got {t}")));
    }
    if t == 0.0 {
        return Ok(1.0);
    }
    let (dt, n_steps) = fit_timestep(grid, t, DEFAULT_CFL_SAFETY)?;
    let dynamics = match which {
        Semigroup::S => Dynamics::Direct,
        Semigroup::R => Dynamics::Reversed,
    };
    let spec = EvolutionSpec::new(t, dt);
    let mut forward = |f: &Field| Ok(evolve(grid, medium, dynamics, f, &spec)?.final_field);
    let mut adjoint = |f: &Field| v0_adjoint(grid, medium, dynamics, n_steps, dt, f);
    operator_norm_estimate(grid, &mut forward, Some(&mut adjoint), iters, seed)
}

/// `V⁰` adjoint of the zero-data evolution map: `W⁻¹ Aᵀ W`.
pub(crate) fn v0_adjoint(
    grid: &PhaseSpaceGrid,
    medium: &Medium,
    dynamics: Dynamics,
    n_steps: usize,
    dt: f64,
    f: &Field,
) -> Result<Field> {
    let mut w = f.values().to_vec();
    apply_mass(grid, &mut w, false);
    let (mut x, _) = evolve_transpose(grid, medium, dynamics, n_steps, dt, Some(&w), None, false)?;
    apply_mass(grid, &mut x, true);
    Field::from_values(grid, x)
}

/// Multiplies by the `V⁰` mass diagonal (or its inverse).
pub(crate) fn apply_mass(grid: &PhaseSpaceGrid, x: &mut [f64], inverse: bool) {
    let nd = grid.n_dirs();
    let m: Vec<f64> = (0..nd)
        .map(|k| if inverse { 1.0 / grid.mass(k) } else { grid.mass(k) })
        .collect();
    for chunk in x.chunks_exact_mut(nd) {
        for (v, mk) in chunk.iter_mut().zip(&m) {
            *v *= mk;
        }
    }
}

/// Multiplies a trace by its `L²([0,τ]; T)` weights (or their inverse).
pub(crate) fn apply_trace_mass(grid: &PhaseSpaceGrid, h: &mut BoundaryTrace, inverse: bool) {
    let w = grid.slot_weights(h.part()).to_vec();
    let (n, dt) = (h.n_samples(), h.dt());
    for s in 0..n {
        let tw = time_weight(s, n, dt);
        for (v, ws) in h.sample_mut(s).iter_mut().zip(&w) {
            let m = tw * ws;
            *v = if inverse { *v / m } else { *v * m };
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::medium::Kernel;
    use crate::phase_grid::GeometryConfig;
    use approx::assert_relative_eq;

    fn rod(n: usize) -> PhaseSpaceGrid {
        PhaseSpaceGrid::new(&GeometryConfig::rod(1.0, n, 1.0)).unwrap()
    }

    #[test]
    fn cfl_examples() {
        assert_relative_eq!(cfl_timestep(&rod(100), 0.9).unwrap(), 0.009, max_relative = 1e-14);
        let g = PhaseSpaceGrid::new(&GeometryConfig::rod(1.0, 100, 2.0)).unwrap();
        assert_relative_eq!(cfl_timestep(&g, 1.0).unwrap(), 0.005, max_relative = 1e-14);
        assert!(cfl_timestep(&g, 0.0).is_err());
        assert!(cfl_timestep(&g, 1.5).is_err());
    }

    #[test]
    fn spec_validation() {
        let g = rod(100);
        assert!(matches!(
            EvolutionSpec::new(1.0, 0.02).n_steps(&g),
            Err(Error::Cfl { .. })
        ));
        assert!(matches!(
            EvolutionSpec::new(1.0, 0.0066).n_steps(&g),
            Err(Error::NonIntegerSteps { .. })
        ));
        assert_eq!(EvolutionSpec::new(1.0, 0.005).n_steps(&g).unwrap(), 200);
    }

    #[test]
    fn zero_data_stays_zero() {
        let g = PhaseSpaceGrid::new(&GeometryConfig::square(1.0, 8, 4, 1.0)).unwrap();
        let m = Medium::constant(&g, 0.1, 0.5, Kernel::isotropic(&g)).unwrap();
        let spec = EvolutionSpec::fitted(&g, 0.5, 0.9).unwrap().recording();
        let tr = evolve_direct(&g, &m, &Field::zeros(&g), &spec).unwrap();
        assert_eq!(tr.final_field.max_abs(), 0.0);
        assert!(tr.outflow.unwrap().values().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn snapshots_follow_stride() {
        let g = rod(20);
        let m = Medium::vacuum(&g);
        let spec = EvolutionSpec::new(1.0, 0.05).with_snapshots(3);
        let tr = evolve_direct(&g, &m, &Field::constant(&g, 1.0), &spec).unwrap();
        assert_eq!(tr.snapshots.len(), 20 / 3 + 1);
    }

    #[test]
    fn transpose_matches_inner_products() {
        let g = PhaseSpaceGrid::new(&GeometryConfig::square(1.0, 5, 4, 1.0)).unwrap();
        let m = Medium::constant(&g, 0.2, 0.7, Kernel::henyey_greenstein(&g, 0.4).unwrap()).unwrap();
        let (dt, n) = fit_timestep(&g, 0.3, 0.9).unwrap();
        let x0 = Field::from_fn(&g, |x, t| (3.0 * x[0]).sin() + t[0] * x[1]);
        let h = BoundaryTrace::from_fn(&g, TracePart::Inflow, n + 1, dt, |t, f, th| {
            1.0 + t * f.normal[0] + th[1]
        });
        let gw = Field::from_fn(&g, |x, t| x[0] - x[1] * t[1]);
        let z = BoundaryTrace::from_fn(&g, TracePart::Outflow, n + 1, dt, |t, _, th| t - th[0]);
        for dynamics in [Dynamics::Direct, Dynamics::Reversed] {
            let spec = EvolutionSpec::new(0.3, dt).with_inflow(h.clone()).recording();
            let tr = evolve(&g, &m, dynamics, &x0, &spec).unwrap();
            let lhs: f64 = dot(tr.final_field.values(), gw.values())
                + dot(tr.outflow.as_ref().unwrap().values(), z.values());
            let (x0t, ht) =
                evolve_transpose(&g, &m, dynamics, n, dt, Some(gw.values()), Some(&z), true).unwrap();
            let rhs = dot(&x0t, x0.values()) + dot(ht.unwrap().values(), h.values());
            assert_relative_eq!(lhs, rhs, max_relative = 1e-12);
        }
    }

    fn dot(a: &[f64], b: &[f64]) -> f64 {
        a.iter().zip(b).map(|(x, y)| x * y).sum()
    }
}

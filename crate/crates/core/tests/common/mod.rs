//! Dense reference operators assembled from first principles, used as
//! oracles for the matrix-free code.
#![allow(dead_code)]

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rtetr::control::{min_norm_control, steer, ControlOptions};
use rtetr::medium::Medium;
use rtetr::phase_grid::{BoundaryTrace, Field, PhaseSpaceGrid, TracePart};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_field(grid: &PhaseSpaceGrid, rng: &mut ChaCha8Rng) -> Field {
    let mut f = Field::zeros(grid);
    f.values_mut().iter_mut().for_each(|v| *v = rng.gen_range(-1.0..1.0));
    f
}

pub fn random_trace(grid: &PhaseSpaceGrid, part: TracePart, n: usize, dt: f64, rng: &mut ChaCha8Rng) -> BoundaryTrace {
    let mut h = BoundaryTrace::zeros(grid, part, n, dt);
    h.values_mut().iter_mut().for_each(|v| *v = rng.gen_range(-1.0..1.0));
    h
}

/// Smooth bump centred in the domain with a mild angular tilt.
pub fn smooth_bump(grid: &PhaseSpaceGrid, center: [f64; 2], width2: f64) -> Field {
    Field::from_fn(grid, |x, t| {
        let r2 = (x[0] - center[0]).powi(2) + (x[1] - center[1]).powi(2);
        (-r2 / width2).exp() * (1.0 + 0.2 * t[0])
    })
}

/// Diagonal of the `V⁰` mass matrix.
pub fn mass(grid: &PhaseSpaceGrid) -> DVector<f64> {
    let nd = grid.n_dirs();
    DVector::from_fn(grid.n_dofs(), |i, _| grid.cell_volume() * grid.weights()[i % nd])
}

/// First-order upwind `θ·∇` with zero ghosts, built from the lattice.
pub fn upwind_matrix(grid: &PhaseSpaceGrid) -> DMatrix<f64> {
    let nd = grid.n_dirs();
    let n = grid.n_dofs();
    let (dx, dy) = grid.spacing();
    let mut d = DMatrix::zeros(n, n);
    for i in 0..grid.n_cells() {
        let (ix, iy) = grid.cell_lattice_index(i);
        for (k, th) in grid.directions().iter().enumerate() {
            let row = i * nd + k;
            let axes: &[(f64, f64, i64, i64)] = &[(th[0], dx, 1, 0), (th[1], dy, 0, 1)];
            for &(comp, h, ax, ay) in &axes[..grid.dim()] {
                if comp.abs() < 1e-12 {
                    continue;
                }
                let coef = comp.abs() / h;
                d[(row, row)] += coef;
                let s = if comp > 0.0 { -1 } else { 1 };
                let (jx, jy) = (ix as i64 + s * ax, iy as i64 + s * ay);
                if jx >= 0 && jy >= 0 {
                    if let Some(j) = grid.cell_at(jx as usize, jy as usize) {
                        d[(row, j * nd + k)] -= coef;
                    }
                }
            }
        }
    }
    d
}

/// Block-diagonal matrix of `K` (or `K*`): entries `κ[k][k']w_k'`.
pub fn kernel_matrix(grid: &PhaseSpaceGrid, medium: &Medium, adjoint: bool) -> DMatrix<f64> {
    let nd = grid.n_dirs();
    let w = grid.weights();
    let mut m = DMatrix::zeros(grid.n_dofs(), grid.n_dofs());
    for i in 0..grid.n_cells() {
        for k in 0..nd {
            for kp in 0..nd {
                let kappa = if adjoint {
                    medium.kernel().value(i, kp, k)
                } else {
                    medium.kernel().value(i, k, kp)
                };
                m[(i * nd + k, i * nd + kp)] = kappa * w[kp];
            }
        }
    }
    m
}

/// `θ·∇ ± (μa+μs) ∓ μs K(*)`: the direct (`reversed = false`) or reversed
/// transport operator with zero ghosts.
pub fn transport_matrix(grid: &PhaseSpaceGrid, medium: &Medium, reversed: bool) -> DMatrix<f64> {
    let nd = grid.n_dirs();
    let s = if reversed { -1.0 } else { 1.0 };
    let mut a = upwind_matrix(grid);
    let k = kernel_matrix(grid, medium, reversed);
    for row in 0..grid.n_dofs() {
        let i = row / nd;
        let (ma, ms) = (medium.mu_a()[i], medium.mu_s()[i]);
        a[(row, row)] += s * (ma + ms);
        for col in (i * nd)..((i + 1) * nd) {
            a[(row, col)] -= s * ms * k[(row, col)];
        }
    }
    a
}

/// Assembles a linear map column by column.
pub fn assemble(n_in: usize, n_out: usize, mut apply: impl FnMut(&[f64]) -> Vec<f64>) -> DMatrix<f64> {
    let mut m = DMatrix::zeros(n_out, n_in);
    let mut e = vec![0.0; n_in];
    for j in 0..n_in {
        e[j] = 1.0;
        let col = apply(&e);
        assert_eq!(col.len(), n_out);
        for (i, v) in col.into_iter().enumerate() {
            m[(i, j)] = v;
        }
        e[j] = 0.0;
    }
    m
}

/// `V⁰` operator norm of a dense map between fields.
pub fn v0_operator_norm(grid: &PhaseSpaceGrid, a: &DMatrix<f64>) -> f64 {
    let w = mass(grid);
    let sq = w.map(f64::sqrt);
    let isq = sq.map(|v| 1.0 / v);
    let b = DMatrix::from_diagonal(&sq) * a * DMatrix::from_diagonal(&isq);
    b.singular_values().max()
}

pub fn rel_diff(a: &[f64], b: &[f64]) -> f64 {
    let num: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let den: f64 = b.iter().map(|y| y * y).sum::<f64>().sqrt();
    if den == 0.0 {
        num
    } else {
        num / den
    }
}

/// Ghost term `Σ |ν·θ|/Δ · h` on the inflow cells.
pub fn injected(g: &PhaseSpaceGrid, h: &BoundaryTrace) -> DVector<f64> {
    let nd = g.n_dirs();
    let mut out = DVector::zeros(g.n_dofs());
    for (j, slot) in g.slots(TracePart::Inflow).iter().enumerate() {
        let face = &g.faces()[slot.face];
        let th = g.directions()[slot.dir];
        let coef = (face.normal[0] * th[0] + face.normal[1] * th[1]).abs() / face.spacing;
        out[face.cell * nd + slot.dir] += coef * h.sample(0)[j];
    }
    out
}

/// Dense matrix of `Υ` on raw values, and the `L²` weight of each trace entry.
pub fn dense_control_map(g: &PhaseSpaceGrid, m: &Medium, tau: f64, dt: f64, n: usize) -> (DMatrix<f64>, DVector<f64>) {
    let proto = BoundaryTrace::zeros(g, TracePart::Inflow, n + 1, dt);
    let len = proto.values().len();
    let mut w = DVector::zeros(len);
    let mut e = proto.clone();
    for i in 0..len {
        e.values_mut()[i] = 1.0;
        w[i] = e.l2_inner(g, &e);
        e.values_mut()[i] = 0.0;
    }
    let a = assemble(len, g.n_dofs(), |x| {
        let mut h = proto.clone();
        h.values_mut().copy_from_slice(x);
        steer(g, m, &h, tau).unwrap().into_values()
    });
    (a, w)
}


#[derive(Debug)]
pub struct MinNormCheck {
    /// CG control against the weighted pseudo-inverse solution.
    pub rel_diff: f64,
    pub h_min_norm: f64,
    /// Norm of the random control that produced the target.
    pub h_rand_norm: f64,
    pub null_dirs: usize,
    /// Largest `‖Υ(h + z) − Υh‖` relative to `‖Υh‖` over null directions `z`.
    pub max_drift: f64,
    /// Smallest `‖h + z‖ − ‖h‖` over the same directions.
    pub min_excess: f64,
}

/// Steers to a reachable `Υh_rand` with CG and compares the control with
/// the dense minimum-norm solution and with perturbations along the null
/// space of `Υ`.
pub fn min_norm_oracle_check(g: &PhaseSpaceGrid, m: &Medium, tau: f64, dt: f64, n: usize, seed: u64) -> MinNormCheck {
    let (a, wt) = dense_control_map(g, m, tau, dt, n);
    let sf = DMatrix::from_diagonal(&mass(g).map(f64::sqrt));
    let isq = DMatrix::from_diagonal(&wt.map(|v| 1.0 / v.sqrt()));
    // W_f^{1/2} Υ W_t^{−1/2} is Υ between Euclidean spaces
    let b = &sf * &a * &isq;
    let svd = b.clone().svd(true, true);
    let smax = svd.singular_values.max();

    let h_rand = random_trace(g, TracePart::Inflow, n + 1, dt, &mut rng(seed));
    let v = steer(g, m, &h_rand, tau).unwrap();
    let rhs = &sf * DVector::from_column_slice(v.values());
    let oracle = &isq * (svd.clone().pseudo_inverse(1e-10 * smax).unwrap() * rhs);

    let opts = ControlOptions {
        tol: 1e-10,
        max_iter: 2000,
        ..ControlOptions::default()
    };
    let rep = min_norm_control(g, m, &v, tau, dt, &opts).unwrap();
    let got = DVector::from_column_slice(rep.h_min.values());
    let wn = |x: &DVector<f64>| x.iter().zip(wt.iter()).map(|(a, w)| a * a * w).sum::<f64>().sqrt();
    let h0 = wn(&got);
    let reached = (&a * &got).norm().max(1.0);
    // null directions: random vectors with the row space projected out
    let vt = svd.v_t.as_ref().unwrap();
    let rank = svd.singular_values.iter().filter(|s| **s > 1e-10 * smax).count();
    let row_space = vt.rows(0, rank);
    let mut r = rng(seed + 1);
    let (mut max_drift, mut min_excess) = (0f64, f64::INFINITY);
    let null_dirs = b.ncols() - rank;
    for _ in 0..null_dirs.min(20) {
        let x = DVector::from_fn(b.ncols(), |_, _| r.gen_range(-1.0..1.0));
        let z = &x - row_space.transpose() * (row_space * &x);
        let z = z.normalize() * 0.3;
        let other: DVector<f64> = &got + &isq * z;
        max_drift = max_drift.max((&a * &other - &a * &got).norm() / reached);
        min_excess = min_excess.min(wn(&other) - h0);
    }
    MinNormCheck {
        rel_diff: wn(&(&got - &oracle)) / wn(&oracle),
        h_min_norm: rep.h_min.l2_norm(g),
        h_rand_norm: h_rand.l2_norm(g),
        null_dirs,
        max_drift,
        min_excess,
    }
}

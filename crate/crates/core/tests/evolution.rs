mod common;

use common::*;
use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;
use rand::Rng;
use rtetr::evolution::*;
use rtetr::medium::*;
use rtetr::phase_grid::*;

fn boxg(n: usize, nt: usize) -> PhaseSpaceGrid {
    PhaseSpaceGrid::new(&GeometryConfig::square(1.0, n, nt, 1.0)).unwrap()
}

fn weak(g: &PhaseSpaceGrid) -> Medium {
    Medium::constant(g, 0.05, 0.1, Kernel::henyey_greenstein(g, 0.3).unwrap()).unwrap()
}

/// Rod pulse against `u0(x ∓ ct)·e^{∓cμa t}`; relative `L²` error.
fn rod_characteristics_error(n: usize, mu_a: f64, reversed: bool) -> f64 {
    let g = PhaseSpaceGrid::new(&GeometryConfig::rod(1.0, n, 1.0)).unwrap();
    let m = Medium::constant(&g, mu_a, 0.0, Kernel::isotropic(&g)).unwrap();
    let pulse = |x: f64| (-((x - 0.5) / 0.1).powi(2)).exp();
    let u0 = Field::from_fn(&g, |x, _| pulse(x[0]));
    let t = 0.25;
    let spec = EvolutionSpec::fitted(&g, t, 0.9).unwrap();
    let d = if reversed { Dynamics::Reversed } else { Dynamics::Direct };
    let out = evolve(&g, &m, d, &u0, &spec).unwrap().final_field;
    let s = if reversed { 1.0 } else { -1.0 };
    let exact = Field::from_fn(&g, |x, th| pulse(x[0] - t * th[0]) * (s * mu_a * t).exp());
    g.v0_norm(&out.sub(&exact)) / g.v0_norm(&exact)
}

#[test]
fn absorbing_rod_follows_characteristics_at_first_order() {
    let e512 = rod_characteristics_error(512, 1.0, false);
    let e1024 = rod_characteristics_error(1024, 1.0, false);
    assert!(e512 <= 0.02, "error {e512}");
    let ratio = e512 / e1024;
    assert!((1.6..=2.4).contains(&ratio), "ratio {ratio}");
}

#[test]
fn reversed_rod_grows_along_characteristics() {
    let e = rod_characteristics_error(512, 1.0, true);
    assert!(e <= 0.02, "error {e}");
}

#[test]
fn vacuum_rod_evacuates() {
    let g = PhaseSpaceGrid::new(&GeometryConfig::rod(1.0, 200, 1.0)).unwrap();
    let m = Medium::vacuum(&g);
    let u0 = Field::from_fn(&g, |x, _| (-((x[0] - 0.4) / 0.1).powi(2)).exp());
    let spec = EvolutionSpec::fitted(&g, 1.2, 0.9).unwrap().with_snapshots(1);
    let tr = evolve_ballistic(&g, &m, &u0, &spec, false).unwrap();
    let norms: Vec<f64> = tr.snapshots.iter().map(|f| g.v0_norm(f)).collect();
    assert!(norms.windows(2).all(|w| w[1] <= w[0]));
    assert!(norms.last().unwrap() / norms[0] <= 1e-2);
    assert!(semigroup_norm(&g, &m, 1.2, Semigroup::S, 5, 1).unwrap() <= 1e-2);
    assert_eq!(semigroup_norm(&g, &m, 0.0, Semigroup::S, 5, 1).unwrap(), 1.0);
}

#[test]
fn ballistic_equals_direct_without_scattering() {
    let g = boxg(8, 8);
    let m = Medium::constant(&g, 0.3, 0.0, Kernel::isotropic(&g)).unwrap();
    let u0 = random_field(&g, &mut rng(1));
    let spec = EvolutionSpec::fitted(&g, 0.7, 0.9).unwrap();
    let a = evolve_direct(&g, &m, &u0, &spec).unwrap().final_field;
    let b = evolve_ballistic(&g, &m, &u0, &spec, false).unwrap().final_field;
    assert_eq!(a.values(), b.values());
}

/// Explicit step `x ← (I − c dt A)x + c dt E η + (c dt/l) f` assembled densely.
#[test]
fn stepping_matches_dense_recurrence() {
    let g = boxg(5, 4);
    let m = weak(&g);
    let (dt, n) = fit_timestep(&g, 0.6, 0.9).unwrap();
    let cdt = g.speed() * dt;
    let a = transport_matrix(&g, &m, false);
    let step = DMatrix::identity(g.n_dofs(), g.n_dofs()) - cdt * &a;
    let mut r = rng(2);
    let u0 = random_field(&g, &mut r);
    let f = random_field(&g, &mut r);
    let h = random_trace(&g, TracePart::Inflow, n + 1, dt, &mut r);
    let nd = g.n_dirs();
    let spec = EvolutionSpec::new(0.6, dt)
        .with_inflow(h.clone())
        .with_forcing(Forcing::Constant(f.clone()));
    let got = evolve_direct(&g, &m, &u0, &spec).unwrap().final_field;

    let mut x = DVector::from_column_slice(u0.values());
    let fv = DVector::from_column_slice(f.values());
    for s in 0..n {
        let mut inj = DVector::zeros(g.n_dofs());
        for (j, slot) in g.slots(TracePart::Inflow).iter().enumerate() {
            let face = &g.faces()[slot.face];
            let th = g.directions()[slot.dir];
            let coef = (face.normal[0] * th[0] + face.normal[1] * th[1]).abs() / face.spacing;
            inj[face.cell * nd + slot.dir] += coef * 0.5 * (h.sample(s)[j] + h.sample(s + 1)[j]);
        }
        x = &step * x + cdt * inj + (cdt / g.diameter()) * &fv;
    }
    assert!(rel_diff(got.values(), x.as_slice()) < 1e-12);
}

#[test]
fn semigroup_norm_agrees_with_dense_singular_value() {
    let g = boxg(5, 4);
    let m = weak(&g);
    let t = g.crossing_time();
    let (dt, n) = fit_timestep(&g, t, 0.9).unwrap();
    let a = transport_matrix(&g, &m, false);
    let step = DMatrix::identity(g.n_dofs(), g.n_dofs()) - g.speed() * dt * a;
    let prop = (0..n).fold(DMatrix::identity(g.n_dofs(), g.n_dofs()), |acc, _| &step * acc);
    let exact = v0_operator_norm(&g, &prop);
    let est = semigroup_norm(&g, &m, t, Semigroup::S, 200, 3).unwrap();
    assert!(est <= exact * (1.0 + 1e-10) && est >= 0.999 * exact, "{est} vs {exact}");
}

#[test]
fn semigroup_norms_respect_growth_bounds() {
    let g = boxg(12, 8);
    let m = weak(&g);
    let r = regime_report(&m, &g);
    for mult in [0.5, 1.0, 2.0] {
        let t = mult * g.crossing_time();
        let s = semigroup_norm(&g, &m, t, Semigroup::S, 20, 5).unwrap();
        let rn = semigroup_norm(&g, &m, t, Semigroup::R, 20, 5).unwrap();
        assert!(s <= 1.1 * r.direct_bound(t, 0.0), "S({t}) = {s}");
        assert!(rn <= 1.1 * r.reversed_bound(t, 0.0), "R({t}) = {rn}");
    }
    let t2 = 2.0 * g.crossing_time();
    assert!(semigroup_norm(&g, &m, t2, Semigroup::S, 20, 5).unwrap() <= 1.1 * r.decay_bound(t2));
}

#[test]
fn support_spreads_at_most_at_speed_c() {
    let g = boxg(40, 8);
    let m = weak(&g);
    let c = [0.5, 0.5];
    let r0 = 0.1;
    let u0 = Field::from_fn(&g, |x, _| {
        if (x[0] - c[0]).hypot(x[1] - c[1]) <= r0 {
            1.0
        } else {
            0.0
        }
    });
    let t = 0.2;
    let spec = EvolutionSpec::fitted(&g, t, 0.9).unwrap();
    let u = evolve_direct(&g, &m, &u0, &spec).unwrap().final_field;
    // the explicit stencil moves information one cell per step at most
    let nd = g.n_dirs();
    let reach = r0 + t + 2f64.sqrt() / 40.0;
    let (dt, n) = fit_timestep(&g, t, 0.9).unwrap();
    let stencil_reach = r0 + n as f64 * 2f64.sqrt() / 40.0;
    let _ = dt;
    for (i, x) in g.centers().iter().enumerate() {
        let d = (x[0] - c[0]).hypot(x[1] - c[1]);
        if d > stencil_reach.max(reach) + 1e-12 {
            assert!(u.values()[i * nd..(i + 1) * nd].iter().all(|v| *v == 0.0));
        }
    }
    // away from the smeared front the mass is negligible
    let outside: f64 = g
        .centers()
        .iter()
        .enumerate()
        .filter(|(_, x)| (x[0] - c[0]).hypot(x[1] - c[1]) > reach + 3.0 / 40.0)
        .map(|(i, _)| u.values()[i * nd..(i + 1) * nd].iter().map(|v| v.abs()).sum::<f64>())
        .sum();
    assert!(outside <= 0.05 * u.values().iter().map(|v| v.abs()).sum::<f64>());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn evolution_is_linear(seed in any::<u64>(), a in -2.0f64..2.0, b in -2.0f64..2.0) {
        let g = boxg(6, 8);
        let m = weak(&g);
        let mut r = rng(seed);
        let (u, w) = (random_field(&g, &mut r), random_field(&g, &mut r));
        let spec = EvolutionSpec::fitted(&g, 0.8, 0.9).unwrap();
        for d in [Dynamics::Direct, Dynamics::Reversed] {
            let su = evolve(&g, &m, d, &u, &spec).unwrap().final_field;
            let sw = evolve(&g, &m, d, &w, &spec).unwrap().final_field;
            let comb = u.scaled(a).add(&w.scaled(b));
            let sc = evolve(&g, &m, d, &comb, &spec).unwrap().final_field;
            let lin = su.scaled(a).add(&sw.scaled(b));
            prop_assert!(g.v0_norm(&sc.sub(&lin)) <= 1e-10 * (1.0 + g.v0_norm(&sc)));
        }
    }

    #[test]
    fn direct_problem_preserves_nonnegativity(seed in any::<u64>(), mus in 0.0f64..2.0, mua in 0.0f64..2.0) {
        let g = boxg(6, 8);
        let m = Medium::constant(&g, mua, mus, Kernel::henyey_greenstein(&g, 0.5).unwrap()).unwrap();
        let mut r = rng(seed);
        let (dt, n) = fit_timestep(&g, 0.7, 0.9).unwrap();
        let mut u0 = random_field(&g, &mut r);
        u0.values_mut().iter_mut().for_each(|v| *v = v.abs());
        let mut f = random_field(&g, &mut r);
        f.values_mut().iter_mut().for_each(|v| *v = v.abs());
        let mut h = BoundaryTrace::zeros(&g, TracePart::Inflow, n + 1, dt);
        h.values_mut().iter_mut().for_each(|v| *v = r.gen_range(0.0..1.0));
        let spec = EvolutionSpec::new(0.7, dt).with_inflow(h).with_forcing(Forcing::Constant(f)).with_snapshots(1);
        let tr = evolve_direct(&g, &m, &u0, &spec).unwrap();
        for s in &tr.snapshots {
            prop_assert!(s.values().iter().all(|v| *v >= 0.0));
        }
    }

    #[test]
    fn constant_forcing_matches_duhamel_sum(seed in any::<u64>()) {
        let g = boxg(4, 4);
        let m = weak(&g);
        let mut r = rng(seed);
        let f = random_field(&g, &mut r);
        let (dt, n) = fit_timestep(&g, 0.5, 0.9).unwrap();
        let spec = EvolutionSpec::new(0.5, dt).with_forcing(Forcing::Constant(f.clone()));
        let forced = evolve_direct(&g, &m, &Field::zeros(&g), &spec).unwrap().final_field;
        // Σ_{j<n} S_step^j (c dt / l) f
        let scale = g.speed() * dt / g.diameter();
        let mut acc = Field::zeros(&g);
        let mut term = f.scaled(scale);
        let one = EvolutionSpec::new(dt, dt);
        for _ in 0..n {
            acc.axpy(1.0, &term);
            term = evolve_direct(&g, &m, &term, &one).unwrap().final_field;
        }
        prop_assert!(g.v0_norm(&forced.sub(&acc)) <= 1e-12 * (1.0 + g.v0_norm(&forced)));
    }
}

use std::f64::consts::PI;
use std::sync::Arc;

use eulerian_cutfem::forms::{assemble_mass, velocity_pattern, CutGeometry, ReferenceData};
use eulerian_cutfem::geometry::{classify, RigidState};
use eulerian_cutfem::mesh::build_structured_mesh;
use eulerian_cutfem::solver::{factor, relative_residual};
use eulerian_cutfem::spaces::{build_multiplier_space, FeFunction};
use eulerian_cutfem::stepper::{
    assemble_block_matrix, assemble_step_system, compute_force, energy_terms, ode_update, BcMode, Layouts, Scheme, SchemeConfig, Simulation,
    StepOperators,
};
use nalgebra::{DMatrix, Point2, Vector2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn cfg(h: f64, dt: f64) -> SchemeConfig {
    SchemeConfig {
        h,
        dt,
        ..SchemeConfig::default()
    }
}

fn operators(cfg: &SchemeConfig, state: RigidState, delta_h: f64) -> StepOperators {
    let mesh = build_structured_mesh(cfg.h).unwrap();
    let layouts = Layouts::new(&mesh, cfg).unwrap();
    let refd = ReferenceData::new(cfg.k, 2 * cfg.k);
    StepOperators::build(cfg, &mesh, &layouts, &refd, state, delta_h).unwrap()
}

/// Block-row residuals of `(u, lambda = 0)` with `u_prev = u` and boundary datum `xi`,
/// before any Dirichlet treatment.
fn raw_residual(ops: &StepOperators, u: &[[f64; 2]], xi: Vector2<f64>) -> (f64, f64) {
    let a = ops.stiffness.combine(1.0, &ops.ghost, ops.gamma_gp);
    let ru = a.matvec2(u);
    let (b, _, ell) = ops.coupling.as_ref().unwrap();
    let bu = b.matvec2(u);
    let velocity = ru.iter().flatten().fold(0.0f64, |m, v| m.max(v.abs()));
    let multiplier = bu
        .iter()
        .zip(ell)
        .flat_map(|(r, l)| [r[0] - l * xi.x, r[1] - l * xi.y])
        .fold(0.0f64, |m, v| m.max(v.abs()));
    (velocity, multiplier)
}

#[test]
fn rigid_translation_is_consistent() {
    let c = cfg(0.1, 0.02);
    let xi = Vector2::new(0.3, -0.7);
    let state = RigidState::new(Point2::new(0.5, 0.8), 0.1, xi);
    let ops = operators(&c, state, 0.05);
    let u = vec![[xi.x, xi.y]; ops.n_velocity()];
    let (rv, rm) = raw_residual(&ops, &u, xi);
    assert!(rv < 1e-11 && rm < 1e-13, "{rv:e} {rm:e}");

    let map = ops.vel.clone();
    let bump = FeFunction::interpolate(map, |x| {
        let b = 1e-3 * (-(x - Point2::new(0.5, 0.65)).norm_squared() * 50.0).exp();
        [xi.x + b, xi.y]
    });
    let (rv, rm) = raw_residual(&ops, &bump.coeffs, xi);
    assert!(rv.max(rm) > 1e-7, "{rv:e} {rm:e}");
}

#[test]
fn force_of_constant_multiplier_is_its_interface_integral() {
    let mesh = build_structured_mesh(0.025).unwrap();
    let decomp = classify(&mesh, &RigidState::initial(), 0.0).unwrap();
    let mult = Arc::new(build_multiplier_space(&mesh, &decomp, 1).unwrap());
    let geo = CutGeometry::new(&mesh, &decomp, 4).unwrap();
    let lam = FeFunction::interpolate(mult, |_| [0.0, 2.0]);
    let f = compute_force(&mesh, &lam, &geo).unwrap();
    assert!(f.x.abs() < 1e-12);
    assert!((f.y - 0.4 * PI).abs() / (0.4 * PI) < 5e-3, "{}", f.y);
}

#[test]
fn block_matrix_matches_dense_assembly() {
    let c = cfg(0.25, 0.1);
    let state = RigidState::new(Point2::new(0.5, 0.55), 0.1, Vector2::new(0.0, -0.2));
    let ops = operators(&c, state, 0.02);
    let a0 = 1.0 / c.dt;
    let (n, m) = (ops.n_velocity(), ops.n_multiplier());
    let dense = |s: &eulerian_cutfem::sparse::SparseMatrix| DMatrix::from_fn(s.nrows, s.ncols, |i, j| s.get(i, j));
    let (b, j, _) = ops.coupling.as_ref().unwrap();
    let mut k = a0 * dense(&ops.mass) + dense(&ops.stiffness) + ops.gamma_gp * dense(&ops.ghost);
    let mut bd = dense(b);
    for d in 0..n {
        if ops.vel.dirichlet[d] {
            k.row_mut(d).fill(0.0);
            k.column_mut(d).fill(0.0);
            k[(d, d)] = 1.0;
            bd.column_mut(d).fill(0.0);
        }
    }
    let mut expected = DMatrix::zeros(n + m, n + m);
    expected.view_mut((0, 0), (n, n)).copy_from(&k);
    expected.view_mut((0, n), (n, m)).copy_from(&bd.transpose());
    expected.view_mut((n, 0), (m, n)).copy_from(&bd);
    expected.view_mut((n, n), (m, m)).copy_from(&(-c.gamma_lambda * dense(j)));
    let got = dense(&assemble_block_matrix(&c, &ops, a0));
    let scale = expected.amax();
    assert!((got - expected).amax() <= 1e-13 * scale);
}

#[test]
fn multiplier_stabilisation_is_negative_semidefinite() {
    let c = cfg(0.1, 0.02);
    let ops = operators(&c, RigidState::initial(), 0.0);
    let (_, j, _) = ops.coupling.as_ref().unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..100 {
        let v: Vec<[f64; 2]> = (0..ops.n_multiplier()).map(|_| [rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)]).collect();
        assert!(-c.gamma_lambda * j.bilinear2(&v, &v) <= 1e-14);
    }
}

#[test]
fn first_step_system_is_solved_accurately() {
    let c = cfg(0.1, 0.02);
    let ops = operators(&c, RigidState::new(Point2::new(0.5, 0.79), 0.1, Vector2::new(0.0, -0.5)), 0.02);
    let u_prev = vec![[0.0; 2]; ops.n_velocity()];
    let (a, rhs) = assemble_step_system(&c, &ops, &u_prev, None, Vector2::new(0.0, -0.5)).unwrap();
    let fs = factor(&a).unwrap();
    for b in &rhs {
        let x = fs.solve(b).unwrap();
        if b.iter().any(|v| *v != 0.0) {
            assert!(relative_residual(&a, &x, b) <= 1e-10);
        }
    }
}

#[test]
fn first_step_falls_with_few_coupling_iterations() {
    let mut sim = Simulation::new(cfg(0.05, 0.01)).unwrap();
    let r = sim.step().unwrap().clone();
    assert!(r.state.xi.y < 0.0 && r.force.y > 0.0);
    assert!(r.state.xi.x.abs() < 1e-10);
    assert!(r.iterations <= 5, "{}", r.iterations);
    // one step of free fall is the upper bound of the speed
    assert!(r.state.xi.y > -0.01);
}

#[test]
fn zero_gravity_keeps_everything_at_rest() {
    let mut sim = Simulation::new(SchemeConfig {
        gravity: [0.0, 0.0],
        t_end: 0.1,
        scheme: Scheme::Bdf2,
        ..SchemeConfig::default()
    })
    .unwrap();
    for r in sim.run().unwrap() {
        assert_eq!(r.state.xi, Vector2::zeros());
        assert_eq!(r.force, Vector2::zeros());
        assert_eq!(r.state.center, Point2::new(0.5, 0.8));
    }
    assert!(sim.velocity().coeffs.iter().all(|v| *v == [0.0, 0.0]));
}

#[test]
fn strip_grows_with_c_delta() {
    let mut active = Vec::new();
    for c_delta in [1.5, 3.0, 6.0] {
        let mut sim = Simulation::new(SchemeConfig {
            c_delta,
            t_end: 0.06,
            ..cfg(0.05, 0.02)
        })
        .unwrap();
        let rs = sim.run().unwrap();
        let r = &rs[2];
        let expected = c_delta * rs[1].state.xi.norm() * 0.02;
        assert!((r.delta_h - expected).abs() <= 1e-15 * expected.max(1.0));
        active.push(r.n_active);
    }
    assert!(active.windows(2).all(|w| w[0] <= w[1]), "{active:?}");
}

#[test]
fn fall_speed_is_bounded_by_free_fall() {
    let mut sim = Simulation::new(SchemeConfig {
        t_end: 0.3,
        ..cfg(0.05, 0.02)
    })
    .unwrap();
    let rs = sim.run().unwrap();
    for w in rs.windows(2) {
        // accelerating downwards, never faster than g t
        assert!(w[1].state.xi.y < w[0].state.xi.y);
        assert!(-w[1].state.xi.y < w[1].t);
        assert!(w[1].energy_residual.unwrap() <= 1e-9);
    }
}

#[test]
fn nitsche_and_multipliers_give_similar_first_steps() {
    let run = |bc_mode| {
        let mut sim = Simulation::new(SchemeConfig {
            bc_mode,
            ..cfg(0.05, 0.02)
        })
        .unwrap();
        sim.step().unwrap().state.xi.y
    };
    let (l, n) = (run(BcMode::Lagrange), run(BcMode::Nitsche));
    assert!((l - n).abs() < 0.1 * l.abs(), "{l} {n}");
}

#[test]
fn stronger_gravity_falls_faster() {
    let runs: Vec<Vec<f64>> = [0.0, 0.5, 1.0]
        .iter()
        .map(|c| {
            let mut sim = Simulation::new(SchemeConfig {
                gravity: [0.0, -1.0 - c],
                t_end: 0.1,
                ..cfg(0.05, 0.02)
            })
            .unwrap();
            sim.run().unwrap().iter().skip(1).map(|r| r.state.xi.y).collect()
        })
        .collect();
    for n in 0..runs[0].len() {
        assert!(runs[0][n] > runs[1][n] && runs[1][n] > runs[2][n], "step {}", n + 1);
    }
}

#[test]
fn energy_stays_within_a_gronwall_bound() {
    let c = SchemeConfig {
        t_end: 1.0,
        ..cfg(0.05, 0.02)
    };
    let mut sim = Simulation::new(c.clone()).unwrap();
    let refd = ReferenceData::new(c.k, 2 * c.k);
    let mut energy = Vec::new();
    for _ in 0..c.n_steps() {
        let r = sim.step().unwrap().clone();
        let u = sim.velocity();
        let decomp = classify(&sim.mesh, &r.state, r.delta_h).unwrap();
        let geo = CutGeometry::new(&sim.mesh, &decomp, 2 * c.k).unwrap();
        let mass = assemble_mass(&sim.mesh, &u.map, &geo, &refd, &velocity_pattern(&sim.mesh, &u.map, &decomp)).unwrap();
        energy.push((r.t, mass.bilinear2(&u.coeffs, &u.coeffs) + r.state.xi.norm_squared()));
    }
    // E(t) <= exp(C t) C' |g|^2 t: least-squares C for ln(E / t) = ln C' + C t,
    // then the smallest C' making it a bound
    let pts: Vec<(f64, f64)> = energy.iter().map(|&(t, e)| (t, (e / t).ln())).collect();
    let n = pts.len() as f64;
    let (mt, my) = (pts.iter().map(|p| p.0).sum::<f64>() / n, pts.iter().map(|p| p.1).sum::<f64>() / n);
    let slope = pts.iter().map(|p| (p.0 - mt) * (p.1 - my)).sum::<f64>() / pts.iter().map(|p| (p.0 - mt).powi(2)).sum::<f64>();
    let c_prime = energy.iter().map(|&(t, e)| e / (t * (slope * t).exp())).fold(0.0f64, f64::max);
    assert!(slope < 10.0, "fitted exponent {slope}");
    assert!(c_prime.is_finite() && c_prime < 1.0, "fitted constant {c_prime}");
}

#[test]
fn energy_identity_detects_perturbations() {
    let c = cfg(0.05, 0.02);
    let xi = Simulation::new(c.clone()).unwrap().step().unwrap().state.xi;
    let mut sim = Simulation::new(c.clone()).unwrap();
    let start = sim.state();
    let sol = sim.solve_fluid(sim.trial_state(xi).unwrap(), 0.0).unwrap();
    let xi_new = ode_update(&c, sol.force, &[start]);
    let lam = &sol.lambda.as_ref().unwrap().coeffs;
    let defect = |u: &[[f64; 2]]| {
        energy_terms(&c, &sol.ops, u, &sol.u_prev, lam, xi_new, start.xi, xi, sol.force).relative_defect()
    };
    assert!(defect(&sol.u.coeffs) <= 1e-9);
    let bumped: Vec<[f64; 2]> = sol.u.coeffs.iter().map(|v| [v[0] + 1e-3, v[1] + 1e-3]).collect();
    assert!(defect(&bumped) > 1e-7);
    let zeros = vec![[0.0; 2]; sol.u.coeffs.len()];
    let z = energy_terms(&c, &sol.ops, &zeros, &zeros, &vec![[0.0; 2]; lam.len()], Vector2::zeros(), Vector2::zeros(), Vector2::zeros(), Vector2::zeros());
    assert_eq!(z.relative_defect(), 0.0);
}

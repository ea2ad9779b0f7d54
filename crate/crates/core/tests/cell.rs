use homogenize_core::cell::{
    build_table, cell_stages, estimate_effective_lagrangian, f_ab, nonstationary_cell_cost,
    point_to_point_cost, CellOptions, CellProblemSpec, EndpointMode, MicroGrid, TableLattice,
};
use homogenize_core::env::{create_environment, EnvironmentHandle, EnvironmentSpec};
use homogenize_core::interp::Axis;
use homogenize_core::model::{DynamicsSpec, LagrangianSpec, MacroTerm, ModelSpec, RunningCost};
use homogenize_core::parallel::with_workers;
use homogenize_core::{Error, Vector};
use proptest::prelude::*;

fn quadratic_model(dim: usize) -> ModelSpec {
    ModelSpec::new(
        dim,
        1.0,
        DynamicsSpec::CalculusOfVariations,
        LagrangianSpec::new(RunningCost::quadratic()),
    )
}

fn periodic(dim: usize) -> EnvironmentHandle {
    create_environment(EnvironmentSpec::periodic(1.0, 0.0, 2.0, dim), 7).unwrap()
}

fn micro(h: f64, dt: f64, k: f64, n: Option<usize>, tube: Option<f64>) -> MicroGrid {
    MicroGrid {
        micro_dt: dt,
        micro_lattice: h,
        control_radius: k,
        control_grid_n: n,
        tube_halfwidth: tube,
    }
}

fn spec1(u: f64, b: f64, g: &MicroGrid) -> CellProblemSpec {
    CellProblemSpec::new(0.0, Vector::new1(0.0), Vector::new1(u), g, b)
}

/// Minimum over every control sequence, each cost summed right to left
/// like the recursion it is compared with.
fn brute_force(model: &ModelSpec, env: &EnvironmentHandle, spec: &CellProblemSpec, a: f64, b: f64) -> f64 {
    let st = cell_stages(model, env, spec, a, b).unwrap();
    let n = st.steps();
    let nc = st.controls().len();
    let mut best = f64::INFINITY;
    let total = nc.pow(n as u32);
    for code in 0..total {
        let mut seq = Vec::with_capacity(n);
        let mut c = code;
        for _ in 0..n {
            seq.push(c % nc);
            c /= nc;
        }
        let mut idx = st.start_index();
        let mut states = vec![idx];
        let mut ok = st.admissible(0, idx);
        for (k, &c) in seq.iter().enumerate() {
            let off = st.controls()[c].offset;
            idx = [idx[0] + off[0], idx[1] + off[1]];
            ok &= st.admissible(k + 1, idx);
            states.push(idx);
        }
        if !ok {
            continue;
        }
        let mut cost = st.terminal(idx);
        for k in (0..n).rev() {
            cost += st.stage(k, states[k], seq[k]);
        }
        if cost < best {
            best = cost;
        }
    }
    best
}

#[test]
fn dp_equals_exhaustive_enumeration_1d() {
    let model = quadratic_model(1);
    let env = periodic(1);
    for tube in [None, Some(0.25)] {
        for &u in &[0.0, 0.5, 1.0, -1.25] {
            let g = micro(0.125, 0.125, 3.0, Some(5), tube);
            let spec = spec1(u, 5.0 * 0.125, &g);
            let dp = point_to_point_cost(&model, &env, &spec, CellOptions::fast()).unwrap();
            let oracle = brute_force(&model, &env, &spec, 0.0, spec.horizon_b);
            assert_eq!(dp.value, oracle, "u = {u}, tube = {tube:?}");
        }
    }
}

#[test]
fn dp_equals_exhaustive_enumeration_with_offset_interval() {
    let model = quadratic_model(1);
    let env = periodic(1);
    let g = micro(0.125, 0.125, 3.0, Some(7), None);
    let spec = spec1(0.75, 1.0, &g);
    let dp = f_ab(&model, &env, 0.25, 0.875, &spec, CellOptions::fast()).unwrap();
    assert_eq!(dp.value, brute_force(&model, &env, &spec, 0.25, 0.875));
}

#[test]
fn dp_equals_exhaustive_enumeration_2d() {
    let model = quadratic_model(2);
    let env = create_environment(EnvironmentSpec::shot_noise(2.0, 0.4, 0.5, 1.5, 2), 11).unwrap();
    let g = micro(0.25, 0.25, 2.0, Some(3), None);
    let spec = CellProblemSpec::new(0.0, Vector::new2(0.3, -0.2), Vector::new2(1.0, -0.5), &g, 0.75);
    let dp = point_to_point_cost(&model, &env, &spec, CellOptions::fast()).unwrap();
    assert_eq!(dp.value, brute_force(&model, &env, &spec, 0.0, 0.75));
}

#[test]
fn argmin_path_reproduces_value_and_endpoints() {
    let model = quadratic_model(1);
    let env = periodic(1);
    let g = micro(1.0 / 32.0, 1.0 / 16.0, 4.0, None, Some(1.0));
    let spec = spec1(0.75, 6.0, &g);
    let r = point_to_point_cost(&model, &env, &spec, CellOptions::default()).unwrap();
    let path = &r.argmin_path;
    assert_eq!(path.len(), 6 * 16 + 1);
    assert!((path[0].position[0]).abs() < 1e-15);
    assert!((path.last().unwrap().position[0] - 4.5).abs() <= r.endpoint_residual + 1e-12);
    assert!(r.endpoint_residual <= g.micro_lattice / 2.0);
    // Path velocities match the recorded controls for f = u.
    for w in path.windows(2) {
        let v = (w[1].position[0] - w[0].position[0]) / (w[1].time - w[0].time);
        assert!((v - w[0].control[0]).abs() < 1e-9);
    }
}

#[test]
fn constant_lagrangian_gives_duration_times_constant() {
    let mut lag = LagrangianSpec::new(RunningCost::Constant { value: 0.25 });
    lag.macro_term = MacroTerm {
        constant: 0.5,
        ..MacroTerm::default()
    };
    let model = ModelSpec::new(1, 1.0, DynamicsSpec::CalculusOfVariations, lag);
    let env = create_environment(EnvironmentSpec::constant(1.0, 1), 0).unwrap();
    let g = micro(1.0 / 16.0, 1.0 / 8.0, 2.0, None, Some(1.0));
    for &u in &[0.0, 0.5, -1.5] {
        let r = point_to_point_cost(&model, &env, &spec1(u, 12.5, &g), CellOptions::default()).unwrap();
        assert!((r.value - 12.5 * 1.75).abs() <= r.dp_tolerance + 1e-12, "{}", r.value);
        let est = estimate_effective_lagrangian(&model, &env, &spec1(u, 200.0, &g), &[12.5, 25.0, 50.0, 100.0], true)
            .unwrap();
        assert!((est.value - 1.75).abs() <= est.error + est.dp_rate + 1e-12);
    }
}

#[test]
fn y_independent_quadratic_reaches_running_cost() {
    let model = quadratic_model(1);
    let env = create_environment(EnvironmentSpec::constant(0.0, 1), 0).unwrap();
    let g = micro(1.0 / 32.0, 1.0 / 16.0, 4.0, None, Some(1.0));
    let est = estimate_effective_lagrangian(&model, &env, &spec1(1.0, 200.0, &g), &[12.5, 25.0, 50.0, 100.0, 200.0], true)
        .unwrap();
    assert!((est.value - 0.5).abs() <= 0.01, "{}", est.value);
    // Jensen: no path beats the straight line.
    for (f, b) in est.series.f_values.iter().zip(&est.series.b_values) {
        assert!(*f >= 0.5 * b - 1e-9);
    }
}

#[test]
fn forward_schedule_matches_backward_solves() {
    let model = quadratic_model(1);
    let env = periodic(1);
    let g = micro(1.0 / 64.0, 1.0 / 16.0, 4.0, None, Some(1.0));
    let sched = [2.0, 4.0, 6.0, 8.0];
    let est = estimate_effective_lagrangian(&model, &env, &spec1(0.625, 8.0, &g), &sched, false).unwrap();
    for (b, f) in sched.iter().zip(&est.series.f_values) {
        let r = point_to_point_cost(&model, &env, &spec1(0.625, *b, &g), CellOptions::fast()).unwrap();
        assert!((r.value - f).abs() <= 1e-12 * (1.0 + f.abs()), "b = {b}: {} vs {f}", r.value);
    }
}

#[test]
fn periodic_phase_offsets_agree() {
    let model = quadratic_model(1);
    let env = periodic(1);
    let g = micro(1.0 / 64.0, 1.0 / 16.0, 4.0, None, Some(1.0));
    let sched = [12.5, 25.0, 50.0, 100.0, 200.0];
    let a = estimate_effective_lagrangian(&model, &env, &spec1(1.0, 200.0, &g), &sched, true).unwrap();
    let shifted = env.shift(Vector::new1(0.3));
    let b = estimate_effective_lagrangian(&model, &shifted, &spec1(1.0, 200.0, &g), &sched, true).unwrap();
    let errs = a.error + a.dp_rate + b.error + b.dp_rate;
    assert!((a.value - b.value).abs() <= 2.0 * errs, "{} vs {}", a.value, b.value);
    assert!(a.value >= model.l_star(&env, Vector::new1(1.0)) - a.error);
}

#[test]
fn enlarging_control_radius_does_not_change_value() {
    let model = quadratic_model(1);
    let env = periodic(1);
    let k = model.truncation_radius(&env, 10.0).unwrap();
    let base = micro(1.0 / 32.0, 1.0 / 16.0, k, None, Some(1.0));
    let wide = micro(1.0 / 32.0, 1.0 / 16.0, 2.0 * k, None, Some(1.0));
    let a = point_to_point_cost(&model, &env, &spec1(1.0, 6.0, &base), CellOptions::fast()).unwrap();
    let b = point_to_point_cost(&model, &env, &spec1(1.0, 6.0, &wide), CellOptions::fast()).unwrap();
    assert!((a.value - b.value).abs() < 1e-6);
}

#[test]
fn unreachable_target_is_infeasible() {
    let model = quadratic_model(1);
    let env = periodic(1);
    let g = micro(1.0 / 8.0, 1.0 / 8.0, 1.0, None, None);
    assert!(point_to_point_cost(&model, &env, &spec1(1.0, 1.0, &g), CellOptions::fast()).is_ok());
    let mut spec = spec1(1.0, 1.0, &g);
    spec.control_radius = 2.0;
    spec.u_tilde = Vector::new1(2.0);
    // Speed 2 needs two cells per step, the lattice caps it at one.
    spec.control_grid_n = Some(3);
    assert!(matches!(
        point_to_point_cost(&model, &env, &spec, CellOptions::fast()),
        Err(Error::Infeasible(_))
    ));
}

#[test]
fn penalty_mode_never_exceeds_hard_constraint() {
    let model = quadratic_model(1);
    let env = periodic(1);
    let g = micro(1.0 / 16.0, 1.0 / 8.0, 3.0, None, None);
    let hard = point_to_point_cost(&model, &env, &spec1(0.5, 3.0, &g), CellOptions::fast()).unwrap();
    let mut soft = spec1(0.5, 3.0, &g);
    soft.endpoint = EndpointMode::Penalty { weight: 100.0 };
    let soft = point_to_point_cost(&model, &env, &soft, CellOptions::fast()).unwrap();
    assert!(soft.value <= hard.value);
}

#[test]
fn frozen_and_released_agree_for_x_independent_lagrangian() {
    let model = quadratic_model(1);
    let env = periodic(1);
    let g = micro(1.0 / 32.0, 1.0 / 16.0, 4.0, None, Some(1.0));
    let eps = 1.0 / 16.0;
    let mut spec = spec1(0.5, 3.2, &g);
    spec.x0 = Vector::new1(0.25);
    spec.fast_origin = Some(Vector::new1(4.0));
    let frozen = point_to_point_cost(&model, &env, &spec, CellOptions::fast()).unwrap();
    let released = nonstationary_cell_cost(&model, &env, &spec, eps, CellOptions::fast()).unwrap();
    assert_eq!(frozen.value, released.value);
}

#[test]
fn released_state_precondition_is_enforced() {
    let model = quadratic_model(1);
    let env = periodic(1);
    let g = micro(1.0 / 32.0, 1.0 / 16.0, 4.0, None, Some(1.0));
    // τ = ε b = 1 and f*(4) = 4 > η = 1.
    let spec = spec1(0.5, 16.0, &g);
    assert!(matches!(
        nonstationary_cell_cost(&model, &env, &spec, 1.0 / 16.0, CellOptions::fast()),
        Err(Error::Domain(_))
    ));
}

fn lattice_1d(t: Axis, x: Axis, u: Axis) -> TableLattice {
    TableLattice { t, x: vec![x], u: vec![u] }
}

#[test]
fn table_of_y_independent_model_is_closed_form() {
    let mut model = quadratic_model(1);
    model.lagrangian.macro_term = MacroTerm {
        bilinear: 0.1,
        clip: 1.0,
        ..MacroTerm::default()
    };
    let env = create_environment(EnvironmentSpec::constant(0.0, 1), 0).unwrap();
    let g = micro(1.0 / 32.0, 1.0 / 16.0, 4.0, None, Some(1.0));
    let lat = lattice_1d(
        Axis::new(0.0, 1.0, 3).unwrap(),
        Axis::new(-1.0, 1.0, 3).unwrap(),
        Axis::new(-2.0, 2.0, 5).unwrap(),
    );
    let sched = [12.5, 25.0, 50.0, 100.0];
    let table = build_table(&model, &env, &lat, &g, &sched, String::new()).unwrap();
    for i in 0..table.values.len() {
        let (t, x, u) = lat.node(i);
        let exact = 0.5 * u[0] * u[0] + 0.1 * t * x[0];
        assert!((table.values[i] - exact).abs() <= 0.01, "node {i}: {} vs {exact}", table.values[i]);
        assert!(table.values[i] >= model.l_star(&env, u) - table.errors[i] - 0.1);
    }
    // Interpolation at nodes is exact.
    let v = table.value(0.5, Vector::new1(0.0), Vector::new1(1.0)).unwrap();
    assert_eq!(v, table.values[lat.grid().flatten(&[1, 1, 3])]);
    assert!(matches!(table.value(0.5, Vector::new1(0.0), Vector::new1(3.0)), Err(Error::Extrapolation(_))));
    assert!(table.max_time_slope() <= model.lip_l_t() + 0.02);
}

#[test]
fn single_node_table_equals_estimate() {
    let model = quadratic_model(1);
    let env = periodic(1);
    let g = micro(1.0 / 32.0, 1.0 / 16.0, 4.0, None, Some(1.0));
    let sched = [12.5, 25.0, 50.0, 100.0];
    let lat = lattice_1d(Axis::point(0.0), Axis::point(0.0), Axis::point(0.75));
    let table = build_table(&model, &env, &lat, &g, &sched, String::new()).unwrap();
    let est = estimate_effective_lagrangian(&model, &env, &spec1(0.75, 100.0, &g), &sched, true).unwrap();
    assert_eq!(table.values, vec![est.value]);
    assert_eq!(table.errors, vec![est.error + est.dp_rate]);
}

#[test]
fn tables_do_not_depend_on_worker_count() {
    let model = quadratic_model(1);
    let env = periodic(1);
    let g = micro(1.0 / 16.0, 1.0 / 8.0, 4.0, None, Some(1.0));
    let sched = [3.0, 6.0, 12.0, 24.0];
    let lat = lattice_1d(Axis::point(0.0), Axis::new(0.0, 0.5, 2).unwrap(), Axis::new(-1.0, 1.0, 5).unwrap());
    let run = |w| with_workers(w, || build_table(&model, &env, &lat, &g, &sched, String::new()).unwrap());
    let one = run(1);
    assert_eq!(one, run(4));
    assert_eq!(one, run(8));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    /// Translating the field by the distance the reference line covers in
    /// time `s` is the same as moving the interval by `s`.
    #[test]
    fn shift_covariance_is_exact(a16 in 0u32..32, len16 in 1u32..48, s4 in 0u32..16, u8_ in -8i32..=8) {
        let model = quadratic_model(1);
        let env = periodic(1);
        let g = micro(1.0 / 32.0, 1.0 / 16.0, 4.0, None, Some(0.5));
        let u = u8_ as f64 / 8.0;
        // s·u is a multiple of the lattice spacing 1/32.
        let (a, b, s) = (a16 as f64 / 16.0, (a16 + len16) as f64 / 16.0, s4 as f64 / 4.0);
        let spec = spec1(u, b + s, &g);
        let moved = f_ab(&model, &env, a + s, b + s, &spec, CellOptions::fast()).unwrap();
        let shifted_env = env.shift(Vector::new1(s * u));
        let base = f_ab(&model, &shifted_env, a, b, &spec, CellOptions::fast()).unwrap();
        prop_assert!((moved.value - base.value).abs() <= 1e-12, "{} vs {}", moved.value, base.value);
    }

    #[test]
    fn subadditive_and_coercive(a16 in 0u32..16, m16 in 1u32..24, l16 in 1u32..24, u8_ in -8i32..=8) {
        let model = quadratic_model(1);
        let env = periodic(1);
        let g = micro(1.0 / 32.0, 1.0 / 16.0, 4.0, None, None);
        let u = u8_ as f64 / 8.0;
        let a = a16 as f64 / 16.0;
        let b = a + m16 as f64 / 16.0;
        let l = b + l16 as f64 / 16.0;
        let spec = spec1(u, l, &g);
        let opts = CellOptions { record_path: false, richardson: true };
        let f_al = f_ab(&model, &env, a, l, &spec, opts).unwrap();
        let f_ab_ = f_ab(&model, &env, a, b, &spec, opts).unwrap();
        let f_bl = f_ab(&model, &env, b, l, &spec, opts).unwrap();
        let tol = 2.0 * f_al.dp_tolerance.max(f_ab_.dp_tolerance).max(f_bl.dp_tolerance);
        prop_assert!(f_al.value <= f_ab_.value + f_bl.value + tol);
        let lstar = model.l_star(&env, Vector::new1(u));
        for r in [&f_al, &f_ab_, &f_bl] {
            prop_assert!(r.value >= r.duration * lstar - r.dp_tolerance);
        }
    }
}

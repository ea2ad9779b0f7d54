use homogenize_core::cell::{EffectiveLagrangianTable, MicroGrid, TableLattice, TableMetadata};
use homogenize_core::env::{create_environment, EnvironmentHandle, EnvironmentSpec};
use homogenize_core::interp::Axis;
use homogenize_core::model::{DynamicsSpec, LagrangianSpec, MacroTerm, ModelSpec, RunningCost, Terminal};
use homogenize_core::solve::{
    approximate_by_step_control, evaluate_cost, fine_stage, macro_gap_bound, repair_control, rollout_policy,
    solve_fine, solve_fine_from, solve_homogenized, solve_homogenized_from, solve_macro, step_approximation_bound,
    sup_gap, value_lipschitz_bound, ControlInput, GridSpec, OnDemandCellCosts, StepControl,
};
use homogenize_core::{Error, Vector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn model_with(running: RunningCost, terminal: Terminal) -> ModelSpec {
    let mut lag = LagrangianSpec::new(running);
    lag.terminal = terminal;
    ModelSpec::new(1, 1.0, DynamicsSpec::CalculusOfVariations, lag)
}

fn periodic() -> EnvironmentHandle {
    create_environment(EnvironmentSpec::periodic(1.0, 0.0, 2.0, 1), 1).unwrap()
}

fn flat(c: f64) -> EnvironmentHandle {
    create_environment(EnvironmentSpec::constant(c, 1), 0).unwrap()
}

fn grid1(dt: f64, dx: f64, half: f64, k: f64, n: usize) -> GridSpec {
    GridSpec {
        t_start: 0.0,
        horizon: 1.0,
        dt,
        space_box: vec![[-half, half]],
        dx,
        control_radius: k,
        control_grid_n: n,
    }
}

fn table_from(f: impl Fn(f64, Vector, Vector) -> f64, x: Axis, u: Axis) -> EffectiveLagrangianTable {
    let lattice = TableLattice {
        t: Axis::new(0.0, 1.0, 5).unwrap(),
        x: vec![x],
        u: vec![u],
    };
    let meta = TableMetadata {
        model_hash: String::new(),
        seed: 0,
        b_schedule: vec![],
        micro: None,
        dp_rate: 0.0,
    };
    EffectiveLagrangianTable::from_fn(lattice, meta, f)
}

/// Minimum over all control sequences from every start node, summed right
/// to left with the same clamp penalty as the solver.
fn enumerate(
    grid: &GridSpec,
    controls: &[Vector],
    penalty: f64,
    psi: impl Fn(Vector) -> f64,
    stage: impl Fn(f64, Vector, Vector) -> (f64, Vector),
) -> Vec<f64> {
    let steps = grid.steps();
    let n = grid.space().len();
    let nc = controls.len();
    (0..n)
        .map(|node| {
            let mut best = f64::INFINITY;
            for code in 0..nc.pow(steps as u32) {
                let mut c = code;
                let mut x = grid.node(node);
                let mut costs = Vec::new();
                for k in 0..steps {
                    let u = controls[c % nc];
                    c /= nc;
                    let (s, foot) = stage(grid.time(k), x, u);
                    let (foot, hit) = grid.clamp(foot);
                    costs.push(if hit { s + penalty * grid.dt } else { s });
                    x = foot;
                }
                let mut total = psi(x);
                for s in costs.iter().rev() {
                    total += s;
                }
                best = best.min(total);
            }
            best
        })
        .collect()
}

#[test]
fn zero_lagrangian_gives_zero_value() {
    let model = model_with(RunningCost::Constant { value: 0.0 }, Terminal::Zero);
    let v = solve_fine(&model, &flat(0.0), 0.25, &grid1(0.125, 0.25, 1.0, 2.0, 5)).unwrap();
    assert!(v.values.iter().all(|&x| x == 0.0));
}

#[test]
fn zero_control_is_optimal_without_potential() {
    let model = model_with(RunningCost::quadratic(), Terminal::Zero);
    let v = solve_fine(&model, &flat(0.0), 0.25, &grid1(0.125, 0.25, 1.0, 2.0, 5)).unwrap();
    assert!(v.values.iter().all(|&x| x == 0.0));
    assert!(v.policy.iter().all(|u| u[0] == 0.0));
}

#[test]
fn fine_solver_equals_enumeration() {
    let model = model_with(RunningCost::quadratic(), Terminal::Cosine { amplitude: 0.5, frequency: 1.0 });
    let env = periodic();
    // dt·K = dx: every foot lands on a node.
    let grid = GridSpec {
        horizon: 1.0,
        ..grid1(0.25, 0.5, 1.0, 2.0, 3)
    };
    let eps = 0.3;
    let field = solve_fine(&model, &env, eps, &grid).unwrap();
    let oracle = enumerate(
        &grid,
        &grid.controls(),
        model.l_upper(&env, 2.0),
        |x| model.psi(x),
        |t, x, u| fine_stage(&model, &env, eps, grid.dt, t, x, u),
    );
    assert_eq!(field.slice(0), &oracle[..]);
}

#[test]
fn homogenized_solver_equals_enumeration() {
    let model = model_with(RunningCost::quadratic(), Terminal::Abs);
    let table = table_from(
        |t, x, u| 0.7 * u[0] * u[0] + 0.2 * t + 0.1 * x[0],
        Axis::new(-1.0, 1.0, 3).unwrap(),
        Axis::new(-2.0, 2.0, 5).unwrap(),
    );
    let grid = grid1(0.25, 0.5, 1.0, 2.0, 3);
    let field = solve_homogenized(&model, &table, &grid).unwrap();
    let penalty = table.values.iter().fold(0.0f64, |a, v| a.max(v.abs()));
    let oracle = enumerate(&grid, &grid.controls(), penalty, |x| model.psi(x), |t, x, u| {
        (grid.dt * table.value(t, x, u).unwrap(), x + u * grid.dt)
    });
    assert_eq!(field.slice(0), &oracle[..]);
}

#[test]
fn macro_solver_equals_enumeration() {
    let model = model_with(RunningCost::quadratic(), Terminal::Abs);
    let grid = grid1(0.25, 0.5, 1.0, 2.0, 3);
    let costs = |t: f64, x: Vector, u: Vector| Some(0.25 * (u[0] * u[0] + (3.0 * x[0]).sin() + t));
    let field = solve_macro(&model, &costs, &grid, 0.1).unwrap();
    let penalty = 0.5 * 4.0;
    let oracle = enumerate(&grid, &grid.controls(), penalty, |x| model.psi(x), |t, x, u| {
        (costs(t, x, u).unwrap(), x + u * grid.dt)
    });
    assert_eq!(field.slice(0), &oracle[..]);
}

#[test]
fn macro_equals_homogenized_for_y_independent_costs() {
    let model = model_with(RunningCost::quadratic(), Terminal::Cosine { amplitude: 1.0, frequency: 1.0 });
    let grid = grid1(0.0625, 0.125, 2.0, 2.0, 17);
    let tau = grid.dt;
    let costs = move |_t: f64, _x: Vector, u: Vector| Some(tau * (0.5 * u[0] * u[0]));
    let v_macro = solve_macro(&model, &costs, &grid, 0.01).unwrap();
    let table = table_from(|_, _, u| 0.5 * u[0] * u[0], Axis::point(0.0), Axis::new(-2.0, 2.0, 17).unwrap());
    let v_hom = solve_homogenized(&model, &table, &grid).unwrap();
    for (a, b) in v_macro.values.iter().zip(&v_hom.values) {
        assert!((a - b).abs() <= 1e-9);
    }
}

#[test]
fn single_macro_step_is_a_direct_scan() {
    let model = model_with(RunningCost::quadratic(), Terminal::Abs);
    let grid = GridSpec {
        dt: 1.0,
        ..grid1(1.0, 2.0, 2.0, 2.0, 5)
    };
    let costs = |_t: f64, x: Vector, u: Vector| Some(0.5 * u[0] * u[0] + 0.1 * x[0]);
    let field = solve_macro(&model, &costs, &grid, 0.1).unwrap();
    for node in 0..grid.space().len() {
        let x = grid.node(node);
        let scan = grid
            .controls()
            .iter()
            .map(|&u| {
                let (foot, hit) = grid.clamp(x + u);
                let pen = if hit { 0.5 * 4.0 } else { 0.0 };
                costs(0.0, x, u).unwrap() + pen + model.psi(foot)
            })
            .fold(f64::INFINITY, f64::min);
        assert_eq!(field.slice(0)[node], scan);
    }
}

#[test]
fn all_infeasible_controls_is_an_error() {
    let model = model_with(RunningCost::quadratic(), Terminal::Zero);
    let grid = grid1(0.25, 0.5, 1.0, 2.0, 3);
    let costs = |_t: f64, _x: Vector, _u: Vector| None;
    assert!(matches!(solve_macro(&model, &costs, &grid, 0.1), Err(Error::Infeasible(_))));
}

#[test]
fn constant_table_gives_linear_value() {
    let model = model_with(RunningCost::quadratic(), Terminal::Zero);
    let table = table_from(|_, _, _| 0.75, Axis::point(0.0), Axis::new(-2.0, 2.0, 5).unwrap());
    let grid = grid1(0.0625, 0.125, 1.0, 2.0, 5);
    let v = solve_homogenized(&model, &table, &grid).unwrap();
    for k in 0..=grid.steps() {
        let exact = 0.75 * (1.0 - grid.time(k));
        assert!(v.slice(k).iter().all(|&x| (x - exact).abs() <= 1e-12));
    }
}

#[test]
fn time_dependent_table_term_adds_its_quadrature() {
    let model = model_with(RunningCost::quadratic(), Terminal::Abs);
    let base = table_from(|_, _, u| 0.5 * u[0] * u[0], Axis::point(0.0), Axis::new(-2.0, 2.0, 9).unwrap());
    let shifted = table_from(|t, _, u| 0.5 * u[0] * u[0] + 0.1 * t, Axis::point(0.0), Axis::new(-2.0, 2.0, 9).unwrap());
    let grid = grid1(0.0625, 0.125, 1.0, 2.0, 9);
    let a = solve_homogenized(&model, &base, &grid).unwrap();
    let b = solve_homogenized(&model, &shifted, &grid).unwrap();
    for k in 0..=grid.steps() {
        let quad: f64 = (k..grid.steps()).map(|i| grid.dt * 0.1 * grid.time(i)).sum();
        for (x, y) in a.slice(k).iter().zip(b.slice(k)) {
            assert!((y - x - quad).abs() <= 1e-12);
        }
    }
}

#[test]
fn extrapolation_is_reported() {
    let model = model_with(RunningCost::quadratic(), Terminal::Zero);
    let table = table_from(|_, _, u| u[0] * u[0], Axis::point(0.0), Axis::new(-1.0, 1.0, 5).unwrap());
    let grid = grid1(0.0625, 0.125, 1.0, 2.0, 5);
    assert!(matches!(solve_homogenized(&model, &table, &grid), Err(Error::Extrapolation(_))));
}

#[test]
fn dynamic_programming_principle_holds_across_slices() {
    let model = model_with(RunningCost::quadratic(), Terminal::Cosine { amplitude: 1.0, frequency: 1.0 });
    let env = periodic();
    let grid = grid1(1.0 / 48.0, 1.0 / 16.0, 1.0, 3.0, 13);
    let full = solve_fine(&model, &env, 0.25, &grid).unwrap();
    let m = 24;
    let head = GridSpec {
        horizon: grid.time(m),
        ..grid.clone()
    };
    let part = solve_fine_from(&model, &env, 0.25, &head, full.slice(m)).unwrap();
    for k in 0..=m {
        for (a, b) in part.slice(k).iter().zip(full.slice(k)) {
            assert!((a - b).abs() <= 1e-12);
        }
    }
    let table = table_from(|t, _, u| 0.5 * u[0] * u[0] + t, Axis::point(0.0), Axis::new(-3.0, 3.0, 13).unwrap());
    let full = solve_homogenized(&model, &table, &grid).unwrap();
    let part = solve_homogenized_from(&model, &table, &head, full.slice(m)).unwrap();
    assert_eq!(part.slice(0), full.slice(0));
}

#[test]
fn raising_the_terminal_cost_never_lowers_values() {
    let env = periodic();
    let grid = grid1(1.0 / 48.0, 1.0 / 16.0, 1.0, 3.0, 13);
    let low = model_with(RunningCost::quadratic(), Terminal::Cosine { amplitude: 1.0, frequency: 1.0 });
    let high = model_with(RunningCost::quadratic(), Terminal::Cosine { amplitude: 1.0, frequency: 1.0 });
    let a = solve_fine(&low, &env, 0.25, &grid).unwrap();
    let psi: Vec<f64> = (0..grid.space().len()).map(|i| high.psi(grid.node(i)) + 0.1 * (i % 3) as f64).collect();
    let b = solve_fine_from(&high, &env, 0.25, &grid, &psi).unwrap();
    assert!(a.values.iter().zip(&b.values).all(|(x, y)| y >= x));
}

#[test]
fn constant_cost_shift_moves_values_linearly() {
    let env = periodic();
    let grid = grid1(1.0 / 48.0, 1.0 / 16.0, 1.0, 3.0, 13);
    let base = model_with(RunningCost::quadratic(), Terminal::Abs);
    let mut shifted = base.clone();
    shifted.lagrangian.macro_term = MacroTerm {
        constant: 0.375,
        ..MacroTerm::default()
    };
    let a = solve_fine(&base, &env, 0.25, &grid).unwrap();
    let b = solve_fine(&shifted, &env, 0.25, &grid).unwrap();
    for k in 0..=grid.steps() {
        let c = 0.375 * (1.0 - grid.time(k));
        for (x, y) in a.slice(k).iter().zip(b.slice(k)) {
            assert!((y - x - c).abs() <= 1e-12);
        }
    }
}

#[test]
fn spatial_lipschitz_quotient_stays_below_diagnostic_bound() {
    let env = periodic();
    let model = model_with(RunningCost::quadratic(), Terminal::Cosine { amplitude: 1.0, frequency: 1.0 });
    let bound = value_lipschitz_bound(&model, &env, 3.0);
    for eps in [0.25, 0.125] {
        let grid = grid1(eps / 12.0, eps / 4.0, 1.0, 3.0, 25);
        let v = solve_fine(&model, &env, eps, &grid).unwrap();
        assert!(v.lipschitz_quotient() <= 2.0 * bound, "{} vs {bound}", v.lipschitz_quotient());
    }
}

#[test]
fn value_field_csv_round_trip() {
    let model = model_with(RunningCost::quadratic(), Terminal::Abs);
    let v = solve_fine(&model, &periodic(), 0.5, &grid1(0.125, 0.5, 1.0, 4.0, 5)).unwrap();
    let text = v.to_csv().unwrap();
    let back = homogenize_core::solve::ValueField::from_csv(&text).unwrap();
    assert_eq!(back, v);
}

#[test]
fn cost_of_constant_lagrangian() {
    let model = model_with(RunningCost::Constant { value: 1.5 }, Terminal::Zero);
    let u = StepControl::new(vec![0.25, 0.5, 1.0], vec![Vector::new1(1.0), Vector::new1(-2.0)]).unwrap();
    let c = evaluate_cost(&model, &flat(0.5), 0.1, Vector::new1(0.0), &u, 0.01).unwrap();
    assert!((c.total - 2.0 * 0.75).abs() <= 1e-12);
    assert!((c.endpoint[0] - (0.25 - 1.0)).abs() <= 1e-12);
}

#[test]
fn cost_of_zero_control_with_x_independent_lagrangian() {
    let model = model_with(RunningCost::quadratic(), Terminal::Zero);
    let u = StepControl::new(vec![0.0, 1.0], vec![Vector::new1(0.0)]).unwrap();
    let env = periodic();
    let c = evaluate_cost(&model, &env, 0.1, Vector::new1(0.3), &u, 0.01).unwrap();
    assert!((c.total - env.evaluate(Vector::new1(3.0))).abs() <= 1e-12);
}

#[test]
fn rolled_out_policy_reproduces_value() {
    let model = model_with(RunningCost::quadratic(), Terminal::Cosine { amplitude: 1.0, frequency: 1.0 });
    let env = periodic();
    let eps = 0.25;
    let grid = grid1(eps / 24.0, eps / 8.0, 2.0, 3.0, 61);
    let v = solve_fine(&model, &env, eps, &grid).unwrap();
    for &x in &[-0.5, 0.0, 0.375] {
        let u = rollout_policy(&v, &model, Vector::new1(x)).unwrap();
        let j = evaluate_cost(&model, &env, eps, Vector::new1(x), &u, eps / 64.0).unwrap();
        let dp = v.value(0.0, Vector::new1(x)).unwrap();
        assert!((j.total - dp).abs() <= 0.1, "x = {x}: {} vs {dp}", j.total);
    }
}

#[test]
fn step_controls_pass_through_unchanged() {
    let model = model_with(RunningCost::quadratic(), Terminal::Zero);
    let u = StepControl::new(vec![0.0, 0.3, 1.0], vec![Vector::new1(1.0), Vector::new1(-2.0)]).unwrap();
    let s = approximate_by_step_control(&model, Vector::ZERO, ControlInput::Step(&u), 0.1).unwrap();
    assert_eq!(s, u);
}

#[test]
fn step_approximation_of_a_sine_control() {
    let model = model_with(RunningCost::quadratic(), Terminal::Zero);
    let env = flat(0.0);
    let wave = |t: f64| Vector::new1(2.0 * (7.0 * t).sin());
    let fine = approximate_by_step_control(&model, Vector::ZERO, ControlInput::Path { t0: 0.0, t1: 1.0, u: &wave }, 1.0 / 4096.0)
        .unwrap();
    let reference = evaluate_cost(&model, &env, 1.0, Vector::ZERO, &fine, 1e-3).unwrap().total;
    let mut last = f64::INFINITY;
    for k in 2..7 {
        let kappa = 0.5f64.powi(k);
        let s = approximate_by_step_control(&model, Vector::ZERO, ControlInput::Path { t0: 0.0, t1: 1.0, u: &wave }, kappa)
            .unwrap();
        let c = evaluate_cost(&model, &env, 1.0, Vector::ZERO, &s, 1e-3).unwrap().total;
        let delta = (reference - c).abs();
        assert!(delta <= step_approximation_bound(&model, &env, 1.0, kappa, 2.0));
        assert!(delta <= last + 1e-12, "κ = {kappa}: {delta} > {last}");
        last = delta;
    }
}

#[test]
fn bounded_controls_are_not_repaired() {
    let model = model_with(RunningCost::quadratic(), Terminal::Zero);
    let env = periodic();
    let u = StepControl::new(vec![0.0, 0.5, 1.0], vec![Vector::new1(0.5), Vector::new1(-0.25)]).unwrap();
    let r = repair_control(&model, &env, 0.5, Vector::ZERO, &u, 1e4, 0.01).unwrap();
    assert_eq!(r.control, u);
    assert_eq!(r.iterations, 0);
}

#[test]
fn repair_threshold_is_reported() {
    let model = model_with(RunningCost::quadratic(), Terminal::Zero);
    let env = periodic();
    let u = StepControl::new(vec![0.0, 0.5, 1.0], vec![Vector::new1(5.0), Vector::new1(-0.25)]).unwrap();
    assert!(matches!(
        repair_control(&model, &env, 0.5, Vector::ZERO, &u, 2.0, 0.01),
        Err(Error::RepairThreshold { .. })
    ));
}

#[test]
fn a_single_spike_is_repaired_at_lower_cost() {
    let model = model_with(RunningCost::quadratic(), Terminal::Zero);
    let env = periodic();
    let u0 = StepControl::new(vec![0.0, 1.0], vec![Vector::new1(0.5)]).unwrap();
    let w = evaluate_cost(&model, &env, 0.5, Vector::ZERO, &u0, 1e-3).unwrap().running;
    let r = model.control_threshold(&env, w + 1.0, 1.0, 1.0).unwrap().r;
    let spike = 10.0 * r;
    let len = 1.0 / (spike * spike);
    let u = StepControl::new(
        vec![0.0, 0.4, 0.4 + len, 1.0],
        vec![Vector::new1(0.5), Vector::new1(spike), Vector::new1(0.5)],
    )
    .unwrap();
    let out = repair_control(&model, &env, 0.5, Vector::ZERO, &u, r, 1e-4).unwrap();
    assert!(out.cost_after < out.cost_before);
    assert!(out.control.sup_norm() <= r);
    let end = |c: &StepControl| evaluate_cost(&model, &env, 0.5, Vector::ZERO, c, 1e-4).unwrap().endpoint;
    assert!((end(&out.control) - end(&u)).norm() <= 1e-9);
    assert_eq!(out.iterations, 1);
}

#[test]
fn randomized_repairs_keep_endpoints_and_lower_costs() {
    let env = periodic();
    for (m, model) in [
        model_with(RunningCost::quadratic(), Terminal::Zero),
        ModelSpec::new(1, 1.0, DynamicsSpec::BoundedSpeed { c: 2.0 }, LagrangianSpec::new(RunningCost::quadratic())),
    ]
    .iter()
    .enumerate()
    {
        let mut rng = ChaCha8Rng::seed_from_u64(42 + m as u64);
        for case in 0..50 {
            let n = rng.random_range(4..12);
            let mut breaks = vec![0.0];
            for i in 1..n {
                breaks.push(i as f64 / n as f64 + rng.random_range(-0.2..0.2) / n as f64);
            }
            breaks.push(1.0);
            let mut vals: Vec<Vector> = (0..n).map(|_| Vector::new1(rng.random_range(-1.0..1.0))).collect();
            let base = StepControl::new(breaks.clone(), vals.clone()).unwrap();
            let w = evaluate_cost(model, &env, 0.25, Vector::ZERO, &base, 1e-3).unwrap().running;
            let r = model.control_threshold(&env, w + 1.0, 1.0, 1.0).unwrap().r;
            // Short spikes: split chosen intervals and insert a large control.
            let spikes = rng.random_range(1..4);
            let mut offending = 0;
            for _ in 0..spikes {
                let i = rng.random_range(0..vals.len());
                let a = breaks[i];
                let u = rng.random_range(2.0..20.0) * r * if rng.random::<bool>() { 1.0 } else { -1.0 };
                let len = 0.1 / (u * u * vals.len() as f64);
                if a + len >= breaks[i + 1] {
                    continue;
                }
                breaks.insert(i + 1, a + len);
                vals.insert(i, Vector::new1(u));
                offending += 1;
            }
            let u = StepControl::new(breaks, vals).unwrap();
            let out = repair_control(model, &env, 0.25, Vector::ZERO, &u, r, 1e-4)
                .unwrap_or_else(|e| panic!("model {m} case {case}: {e}"));
            assert!(out.control.sup_norm() <= r);
            assert!(out.cost_after <= out.cost_before + 1e-9, "model {m} case {case}");
            assert!(out.iterations <= offending);
            let end = |c: &StepControl| evaluate_cost(model, &env, 0.25, Vector::ZERO, c, 1e-4).unwrap().endpoint;
            assert!((end(&out.control) - end(&u)).norm() <= 1e-9);
        }
    }
}

#[test]
fn macro_cell_costs_track_the_fine_problem() {
    let model = model_with(RunningCost::quadratic(), Terminal::Cosine { amplitude: 1.0, frequency: 1.0 });
    let env = periodic();
    let eps = 1.0 / 16.0;
    let tau = 0.125;
    let micro = MicroGrid {
        micro_dt: 1.0 / 16.0,
        micro_lattice: 1.0 / 32.0,
        control_radius: 4.0,
        control_grid_n: None,
        tube_halfwidth: Some(1.0),
    };
    let costs = OnDemandCellCosts { model: &model, env: &env, eps, tau, micro };
    let coarse = GridSpec {
        t_start: 0.5,
        ..grid1(tau, 0.25, 1.0, 2.0, 9)
    };
    let v_macro = solve_macro(&model, &costs, &coarse, eps).unwrap();
    let fine_grid = GridSpec {
        t_start: 0.5,
        ..grid1(eps / 12.0, eps / 4.0, 1.0, 3.0, 49)
    };
    let v_fine = solve_fine(&model, &env, eps, &fine_grid).unwrap();
    let gap = sup_gap(&v_macro, &v_fine, &[[-0.5, 0.5]]).unwrap();
    let bound = macro_gap_bound(&model, tau, 4.0);
    assert!(gap <= bound, "{gap} vs {bound}");
}

//! Acceptance suite: desk-scale verification of the full pipeline, one test
//! per criterion, each printing a pass line with its measurements.
//!
//! Run with `cargo test --test acceptance -- --nocapture` to see the lines.
//!
//! Monte Carlo decay assertions follow the ensemble noise rule: a decay
//! claim fires only beyond two combined standard errors; common random
//! numbers across the ε sweep make that resolvable at desk-scale path
//! counts.

use homlab::cell::{
    build_cell_table, solve_cell, solve_correctors, solve_invariant_density, solve_poisson,
    CellEvaluator, CellOptions, CellTable, CenteringMode, MollifiedDensityEvaluator,
};
use homlab::coeffs::CoefficientSpec;
use homlab::error::HomError;
use homlab::expr::Expr;
use homlab::fbsde::{
    monotone_decay_verdict, simulate_forward, simulate_limit_ensemble, DecayVerdict,
    EnsembleStat, GSource, SimConfig,
};
use homlab::homog::{average_coefficients, HomogenizedTable};
use homlab::pde::{
    sample_terminal, select_mollification_index, solve_epsilon_system, solve_limit_system,
    solve_regularized_system, DecouplingField, FieldEvaluator, MollifiedData, PdeOptions,
};
use homlab::torus::{assemble_generator, interpolate, PeriodicField, TorusGrid};
use nalgebra::DVector;
use std::f64::consts::PI;
use std::sync::OnceLock;
use std::time::Instant;

const SEED: u64 = 0x5eed_2024;

fn pass(criterion: &str, started: Instant, detail: &str) {
    println!(
        "[acceptance] {criterion}: PASS ({:.1} s) — {detail}",
        started.elapsed().as_secs_f64()
    );
}

// ---------------------------------------------------------------- fixtures

/// Linear oscillatory diffusion (b = e = c = f = 0, a = 2 + sin 2πx):
/// fields for ε ∈ {1/4, 1/8, 1/16, 1/32} and the ᾱ = √3 limit field.
struct HarmonicFix {
    spec: CoefficientSpec,
    cells: CellTable,
    cell_eval: CellEvaluator,
    theta_lim: DecouplingField,
    lim_eval: FieldEvaluator,
    eps: Vec<(u32, DecouplingField, FieldEvaluator)>,
    t_end: f64,
    times: Vec<f64>,
}

static HARMONIC: OnceLock<HarmonicFix> = OnceLock::new();

fn harmonic() -> &'static HarmonicFix {
    HARMONIC.get_or_init(|| {
        let t_end = 0.0625;
        let spec = CoefficientSpec::preset("harmonic-1d").unwrap();
        let grid = TorusGrid::new(1, 64).unwrap();
        let cells =
            build_cell_table(&spec, &[-2.0], &[2.0], 9, grid, &CellOptions::default()).unwrap();
        let cell_eval = CellEvaluator::new(&cells);
        let table = homlab::homog::build_table(&cells, &spec, -6.0, 6.0, 5).unwrap();
        let times: Vec<f64> = (0..=128).map(|i| t_end * i as f64 / 128.0).collect();
        let opts = PdeOptions::default();
        let h = sample_terminal(&spec, grid).unwrap();
        let theta_lim = solve_limit_system(&table, &h, t_end, grid, &times, &opts).unwrap();
        let lim_eval = FieldEvaluator::new(&theta_lim);
        let eps = [4u32, 8, 16, 32]
            .iter()
            .map(|&k| {
                let m = 16 * k as usize;
                let g = TorusGrid::new(1, m).unwrap();
                let hk = sample_terminal(&spec, g).unwrap();
                let f = solve_epsilon_system(&spec, k, &hk, t_end, g, &times, &opts).unwrap();
                let e = FieldEvaluator::new(&f);
                (k, f, e)
            })
            .collect();
        HarmonicFix {
            spec,
            cells,
            cell_eval,
            theta_lim,
            lim_eval,
            eps,
            t_end,
            times,
        }
    })
}

fn harmonic_sim(k: u32, n_paths: usize, n_steps: usize, base: Option<usize>) -> SimConfig {
    SimConfig {
        eps_k: k,
        t0: 0.0,
        t_end: harmonic().t_end,
        x0: vec![0.1],
        n_paths,
        n_steps,
        store_every: (n_steps / 128).max(1),
        seed: SEED,
        brownian_base_steps: base,
    }
}

/// Full quasilinear problem: y-dependent diffusion and drift, gradient
/// coupling, nonzero driver. Used by the remainder, auxiliary-SDE and m(n)
/// criteria.
struct QuasiFix {
    spec: CoefficientSpec,
    cells: CellTable,
    cell_eval: CellEvaluator,
    table: HomogenizedTable,
    theta_lim: DecouplingField,
    lim_eval: FieldEvaluator,
    zetas: Vec<(u32, DecouplingField, FieldEvaluator)>,
    m_sel: Vec<homlab::pde::MollificationIndex>,
    eps: Vec<(u32, DecouplingField, FieldEvaluator)>,
    t_end: f64,
}

static QUASI: OnceLock<QuasiFix> = OnceLock::new();

fn quasi() -> &'static QuasiFix {
    QUASI.get_or_init(|| {
        let t_end = 0.05;
        let spec = CoefficientSpec::preset("quasilinear-demo").unwrap();
        let grid = TorusGrid::new(1, 64).unwrap();
        let cells =
            build_cell_table(&spec, &[-2.0], &[2.0], 65, grid, &CellOptions::default()).unwrap();
        let cell_eval = CellEvaluator::new(&cells);
        let table = homlab::homog::build_table(&cells, &spec, -5.0, 5.0, 9).unwrap();
        let times: Vec<f64> = (0..=128).map(|i| t_end * i as f64 / 128.0).collect();
        let opts = PdeOptions::default();
        let pde_grid = TorusGrid::new(1, 64).unwrap();
        let h = sample_terminal(&spec, pde_grid).unwrap();
        let theta_lim = solve_limit_system(&table, &h, t_end, pde_grid, &times, &opts).unwrap();
        let lim_eval = FieldEvaluator::new(&theta_lim);
        let zetas: Vec<(u32, DecouplingField, FieldEvaluator)> = [2u32, 4, 8]
            .iter()
            .map(|&n| {
                let md =
                    homlab::pde::mollify_terminal_and_driver(&table, &h, n, 9).unwrap();
                let f = solve_regularized_system(&md, t_end, pde_grid, &times, &opts).unwrap();
                let e = FieldEvaluator::new(&f);
                (n, f, e)
            })
            .collect();
        let eps: Vec<(u32, DecouplingField, FieldEvaluator)> = [4u32, 8, 16]
            .iter()
            .map(|&k| {
                let m = 16 * k as usize;
                let g = TorusGrid::new(1, m).unwrap();
                let hk = sample_terminal(&spec, g).unwrap();
                let f = solve_epsilon_system(&spec, k, &hk, t_end, g, &times, &opts).unwrap();
                let e = FieldEvaluator::new(&f);
                (k, f, e)
            })
            .collect();
        // observed sup |Y| from a small preliminary ensemble at the first ε
        let pre_cfg = SimConfig {
            eps_k: 4,
            t0: 0.0,
            t_end,
            x0: vec![0.1],
            n_paths: 512,
            n_steps: 512,
            store_every: 8,
            seed: SEED,
            brownian_base_steps: None,
        };
        let pre = simulate_forward(&pre_cfg, &spec, &eps[0].2).unwrap();
        let sup_y = pre.estimate_monitors().sup_abs_y;
        let m_sel = zetas
            .iter()
            .map(|(n, f, _)| {
                select_mollification_index(&cells, f, *n, &[2, 4, 8, 16, 32], sup_y).unwrap()
            })
            .collect();
        QuasiFix {
            spec,
            cells,
            cell_eval,
            table,
            theta_lim,
            lim_eval,
            zetas,
            m_sel,
            eps,
            t_end,
        }
    })
}

fn quasi_sim(k: u32, n_paths: usize, n_steps: usize) -> SimConfig {
    SimConfig {
        eps_k: k,
        t0: 0.0,
        t_end: quasi().t_end,
        x0: vec![0.1],
        n_paths,
        n_steps,
        store_every: (n_steps / 128).max(1),
        seed: SEED,
        brownian_base_steps: None,
    }
}

fn fmt_stats(values: &[EnsembleStat]) -> String {
    values
        .iter()
        .map(|s| format!("{:.3e}±{:.1e}", s.value, s.se))
        .collect::<Vec<_>>()
        .join(", ")
}

// ---------------------------------------------------------------- criteria

#[test]
fn criterion_01_cell_analytic_oracle() {
    let t0 = Instant::now();
    let spec = CoefficientSpec::preset("harmonic-1d").unwrap();
    let grid = TorusGrid::new(1, 64).unwrap();
    let p = solve_invariant_density(&spec, &[0.0], grid).unwrap();
    let mut sup: f64 = 0.0;
    for i in 0..64 {
        let x = i as f64 / 64.0;
        let exact = 3.0f64.sqrt() / (2.0 + (2.0 * PI * x).sin());
        sup = sup.max((p.comp(0)[i] - exact).abs());
    }
    assert!(sup <= 1e-8, "density sup error {sup}");
    let sol = solve_cell(&spec, &[0.0], grid, &CellOptions::default()).unwrap();
    let (_, _, al) = average_coefficients(&sol, &spec, &[0.0]).unwrap();
    let alpha_err = (al[(0, 0)] - 3.0f64.sqrt()).abs();
    assert!(alpha_err <= 1e-8, "alpha error {alpha_err}");
    pass(
        "criterion 01 (cell analytic oracle)",
        t0,
        &format!("sup|p - closed form| = {sup:.2e}, |ᾱ - √3| = {alpha_err:.2e}"),
    );
}

#[test]
fn criterion_02_poisson_oracle() {
    let t0 = Instant::now();
    let spec = CoefficientSpec::preset("constant").unwrap();
    let grid = TorusGrid::new(1, 64).unwrap();
    let gen = assemble_generator(grid, &spec, &[0.0]).unwrap();
    let p = DVector::from_element(64, 1.0);
    let phi = DVector::from_fn(64, |i, _| (2.0 * PI * i as f64 / 64.0).cos());
    let (hat, info) = solve_poisson(&gen, &phi, &p, &CellOptions::default(), true).unwrap();
    let mut sup: f64 = 0.0;
    for i in 0..64 {
        let x = i as f64 / 64.0;
        sup = sup.max((hat[i] - (2.0 * PI * x).cos() / (2.0 * PI * PI)).abs());
    }
    assert!(sup <= 1e-8, "poisson sup error {sup}");
    assert!(info.residual <= 1e-8);

    // compatibility rejection on a non-centered right-hand side
    let bad = DVector::from_fn(64, |i, _| 0.5 + (2.0 * PI * i as f64 / 64.0).cos());
    let err = solve_poisson(&gen, &bad, &p, &CellOptions::default(), true);
    assert!(matches!(err, Err(HomError::Compatibility { .. })));
    pass(
        "criterion 02 (Poisson oracle)",
        t0,
        &format!("sup error {sup:.2e}, residual {:.1e}, strict rejection fires", info.residual),
    );
}

#[test]
fn criterion_03_derivative_consistency() {
    let t0 = Instant::now();
    let spec = CoefficientSpec::preset("separable-drift").unwrap();
    let grid = TorusGrid::new(1, 64).unwrap();
    let y0 = [0.0];
    // route A: differentiated Poisson equation with coefficient step h;
    // route B: central difference of the correctors at y ± h
    let mut diffs = Vec::new();
    let hs = [1e-2, 5e-3, 2.5e-3];
    for &h in &hs {
        let a = homlab::cell::corrector_y_derivatives(&spec, &y0, grid, h).unwrap();
        let (b_p, _, _, _) = solve_correctors(&spec, &[h], grid, CenteringMode::Auto).unwrap();
        let (b_m, _, _, _) = solve_correctors(&spec, &[-h], grid, CenteringMode::Auto).unwrap();
        let fd = (b_p.comp(0) - b_m.comp(0)) / (2.0 * h);
        diffs.push((a.dy_bhat.comp(0) - fd).amax().max(1e-300));
    }
    let slope = (diffs[0] / diffs[2]).ln() / (hs[0] / hs[2]).ln();
    assert!(slope >= 1.9, "log-log slope {slope}, differences {diffs:?}");

    // Lipschitz quotient of the density stable within 10% as h halves
    let qspec = CoefficientSpec::preset("quasilinear-demo").unwrap();
    let base = solve_invariant_density(&qspec, &[0.3], grid).unwrap();
    let mut quotients = Vec::new();
    for &h in &[4e-2, 2e-2, 1e-2] {
        let ph = solve_invariant_density(&qspec, &[0.3 + h], grid).unwrap();
        let d = ph.comp(0) - base.comp(0);
        let l2 = homlab::torus::quadrature_of(grid, &d.component_mul(&d)).sqrt();
        quotients.push(l2 / h);
    }
    for w in quotients.windows(2) {
        let rel = (w[1] - w[0]).abs() / w[0];
        assert!(rel <= 0.10, "quotient drift {rel:.3} in {quotients:?}");
    }
    pass(
        "criterion 03 (derivative consistency)",
        t0,
        &format!("route-vs-FD slope {slope:.2}, Lipschitz quotients {quotients:?}"),
    );
}

#[test]
fn criterion_04_limit_pde_oracle() {
    let t0 = Instant::now();
    let grid = TorusGrid::new(1, 64).unwrap();
    let table = HomogenizedTable::from_fn(
        1,
        1,
        vec![vec![-4.0, 4.0]],
        vec![vec![-8.0, 8.0]],
        |_, _| vec![0.0],
        |_, _| vec![0.0],
        |_| vec![1.0],
    )
    .unwrap();
    let h = PeriodicField::from_fn(grid, 1, |x| vec![(2.0 * PI * x[0]).sin()]).unwrap();
    let field =
        solve_limit_system(&table, &h, 0.1, grid, &[0.0], &PdeOptions::default()).unwrap();
    let decay = (-2.0 * PI * PI * 0.1).exp();
    assert!((decay - 0.138911).abs() < 1e-6);
    let mut sup: f64 = 0.0;
    for i in 0..64 {
        let x = i as f64 / 64.0;
        sup = sup.max((field.comp_values(0, 0)[i] - decay * (2.0 * PI * x).sin()).abs());
    }
    assert!(sup <= 1e-6, "amplitude error {sup}");
    pass(
        "criterion 04 (limit PDE oracle)",
        t0,
        &format!("amplitude e^(-2π²/10) = {decay:.6}, sup error {sup:.2e}"),
    );
}

#[test]
fn criterion_05_homogenization_limit() {
    let t0 = Instant::now();
    let fix = harmonic();
    // sup_x |θ_ε(0, x) − θ(0, x)| on 512 probe points
    let probes: Vec<f64> = (0..512).map(|i| i as f64 / 512.0).collect();
    let mut errs = Vec::new();
    for (_, _, eval) in &fix.eps {
        let mut sup: f64 = 0.0;
        let mut y = [0.0];
        let mut yl = [0.0];
        let mut z = [0.0];
        for &x in &probes {
            eval.eval_into(0.0, &[x], &mut y, &mut z);
            fix.lim_eval.eval_into(0.0, &[x], &mut yl, &mut z);
            sup = sup.max((y[0] - yl[0]).abs());
        }
        errs.push(sup);
    }
    for w in errs.windows(2) {
        assert!(w[1] < w[0], "sup errors not strictly decreasing: {errs:?}");
    }
    assert!(
        errs[3] <= 0.3 * errs[0],
        "ε = 1/32 error {:.3e} vs 0.3 × (ε = 1/4 error {:.3e})",
        errs[3],
        errs[0]
    );
    pass(
        "criterion 05 (homogenization limit)",
        t0,
        &format!("sup|θ_ε(0,·) − θ(0,·)| = {errs:?}"),
    );
}

#[test]
fn criterion_06_php_metrics() {
    let t0 = Instant::now();
    let fix = harmonic();
    let mut sup_metric = Vec::new();
    let mut int_metric = Vec::new();
    let mut local_sup = Vec::new();
    let mut local_int = Vec::new();
    for (k, _, eval) in &fix.eps {
        let cfg = harmonic_sim(*k, 10_000, 1024, None);
        let ens = simulate_forward(&cfg, &fix.spec, eval).unwrap();
        let m = ens
            .convergence_metrics(&fix.spec, &fix.cell_eval, eval, &fix.lim_eval)
            .unwrap();
        sup_metric.push(m.e_sup_y2);
        int_metric.push(m.e_int_z2);
        local_sup.push(m.local_e_sup_y2);
        local_int.push(m.local_e_int_z2);
    }
    assert_eq!(
        monotone_decay_verdict(&sup_metric),
        DecayVerdict::Pass,
        "E sup|Y−θ(·,X)|²: {}",
        fmt_stats(&sup_metric)
    );
    assert_eq!(
        monotone_decay_verdict(&int_metric),
        DecayVerdict::Pass,
        "E ∫|Ẑ−∇θ(I+∇b̂)|²: {}",
        fmt_stats(&int_metric)
    );
    // Theorem 3.1 local variant on [T−c, T]
    assert_eq!(monotone_decay_verdict(&local_sup), DecayVerdict::Pass);
    assert_eq!(monotone_decay_verdict(&local_int), DecayVerdict::Pass);
    pass(
        "criterion 06 (PHP point 2 metrics)",
        t0,
        &format!(
            "sup metric: [{}]; integral metric: [{}]; local variants decay as well",
            fmt_stats(&sup_metric),
            fmt_stats(&int_metric)
        ),
    );
}

#[test]
fn criterion_07_ergodic_decay() {
    let t0 = Instant::now();
    let t_end = 0.03125;
    let spec = CoefficientSpec::preset("divergence-form").unwrap();
    let grid = TorusGrid::new(1, 64).unwrap();
    let cells = build_cell_table(&spec, &[-2.0], &[2.0], 5, grid, &CellOptions::default()).unwrap();
    let cell_eval = CellEvaluator::new(&cells);
    let times: Vec<f64> = (0..=128).map(|i| t_end * i as f64 / 128.0).collect();
    let opts = PdeOptions::default();
    let phi = Expr::parse("cos(2*pi*x1)").unwrap();
    let mut stats = Vec::new();
    for &k in &[4u32, 8, 16, 32] {
        let m = 16 * k as usize;
        let g = TorusGrid::new(1, m).unwrap();
        let h = sample_terminal(&spec, g).unwrap();
        let field = solve_epsilon_system(&spec, k, &h, t_end, g, &times, &opts).unwrap();
        let eval = FieldEvaluator::new(&field);
        let cfg = SimConfig {
            eps_k: k,
            t0: 0.0,
            t_end,
            x0: vec![0.1],
            n_paths: 1024,
            n_steps: 4096,
            store_every: 32,
            seed: SEED,
            brownian_base_steps: None,
        };
        let ens = simulate_forward(&cfg, &spec, &eval).unwrap();
        let stat = ens
            .ergodic_average(&spec, &cell_eval, &eval, &cells, &phi, GSource::XHat)
            .unwrap();
        stats.push(stat);

        if k == 4 {
            let phi_const = Expr::parse("0.3").unwrap();
            let zero = ens
                .ergodic_average(&spec, &cell_eval, &eval, &cells, &phi_const, GSource::Constant(0.0))
                .unwrap();
            assert!(zero.value <= 1e-10, "constant φ statistic {}", zero.value);
        }
    }
    assert_eq!(
        monotone_decay_verdict(&stats),
        DecayVerdict::Pass,
        "ergodic statistic: {}",
        fmt_stats(&stats)
    );
    pass(
        "criterion 07 (ergodic decay)",
        t0,
        &format!("E sup|∫(φ−φ̄)dr|: [{}]; constant φ at 1e−10", fmt_stats(&stats)),
    );
}

#[test]
fn criterion_08_remainder_scaling() {
    let t0 = Instant::now();
    let fix = quasi();
    let mut r_stats = Vec::new();
    let mut s_stats = Vec::new();
    for (k, _, eval) in &fix.eps {
        let cfg = quasi_sim(*k, 2048, 2048);
        let mut ens = simulate_forward(&cfg, &fix.spec, eval).unwrap();
        let rep = ens
            .remainder_terms(&fix.spec, &fix.cell_eval, eval)
            .unwrap()
            .report
            .clone();
        r_stats.push(rep.e_sup_r2);
        s_stats.push(rep.e_sup_s2);
    }
    for (name, stats) in [("R", &r_stats), ("S", &s_stats)] {
        for w in stats.windows(2) {
            let ratio = w[1].value / w[0].value;
            assert!(
                (0.15..=0.6).contains(&ratio),
                "E sup|{name}|² consecutive ratio {ratio:.3} outside [0.15, 0.6]: {}",
                fmt_stats(stats)
            );
        }
        assert_eq!(monotone_decay_verdict(stats), DecayVerdict::Pass);
    }
    pass(
        "criterion 08 (remainder scaling)",
        t0,
        &format!(
            "E sup|R|²: [{}]; E sup|S|²: [{}]; ratios within [0.15, 0.6]",
            fmt_stats(&r_stats),
            fmt_stats(&s_stats)
        ),
    );
}

#[test]
fn criterion_09_auxiliary_sde_structure() {
    let t0 = Instant::now();
    // trivial-coupling case: U ≡ X pathwise to 1e−12
    {
        let spec = CoefficientSpec::preset("constant").unwrap();
        let grid = TorusGrid::new(1, 32).unwrap();
        let cells =
            build_cell_table(&spec, &[-2.0], &[2.0], 5, grid, &CellOptions::default()).unwrap();
        let cell_eval = CellEvaluator::new(&cells);
        let table = homlab::homog::build_table(&cells, &spec, -4.0, 4.0, 3).unwrap();
        let pde_grid = TorusGrid::new(1, 64).unwrap();
        let h = sample_terminal(&spec, pde_grid).unwrap();
        let times: Vec<f64> = (0..=64).map(|i| 0.125 * i as f64 / 64.0).collect();
        let opts = PdeOptions::default();
        let eps_field =
            solve_epsilon_system(&spec, 1, &h, 0.125, pde_grid, &times, &opts).unwrap();
        let eps_eval = FieldEvaluator::new(&eps_field);
        let md = MollifiedData::identity(&table, &h).unwrap();
        let zeta = solve_regularized_system(&md, 0.125, pde_grid, &times, &opts).unwrap();
        let zeta_eval = FieldEvaluator::new(&zeta);
        let pm = MollifiedDensityEvaluator::new(&cells, 4.0).unwrap();
        let cfg = SimConfig {
            eps_k: 1,
            t0: 0.0,
            t_end: 0.125,
            x0: vec![0.1],
            n_paths: 256,
            n_steps: 256,
            store_every: 4,
            seed: SEED,
            brownian_base_steps: None,
        };
        let mut ens = simulate_forward(&cfg, &spec, &eps_eval).unwrap();
        ens.simulate_auxiliary_sde(&spec, &cell_eval, &eps_eval, &zeta_eval, &pm, 4)
            .unwrap();
        let aux = ens.aux.as_ref().unwrap();
        let mut gap: f64 = 0.0;
        for i in 0..aux.u.len() {
            gap = gap.max((aux.u[i] - ens.x[i]).abs());
        }
        assert!(gap <= 1e-12, "trivial coupling sup|U − X| = {gap:.2e}");
    }

    // 2-D (ε, n) sweep on the quasilinear problem
    let fix = quasi();
    let n_list: Vec<u32> = fix.zetas.iter().map(|(n, _, _)| *n).collect();
    let mut table_rows: Vec<(u32, u32, [EnsembleStat; 3])> = Vec::new();
    for (k, _, eval) in &fix.eps {
        let cfg = quasi_sim(*k, 2048, 2048);
        let mut ens = simulate_forward(&cfg, &fix.spec, eval).unwrap();
        for (n, _, zeta_eval) in &fix.zetas {
            let m_used = fix.m_sel.iter().find(|s| s.n == *n).unwrap().m;
            let pm = MollifiedDensityEvaluator::new(&fix.cells, m_used as f64).unwrap();
            ens.simulate_auxiliary_sde(&fix.spec, &fix.cell_eval, eval, zeta_eval, &pm, *n)
                .unwrap();
            let prop = ens.proposition_metrics().unwrap();
            table_rows.push((
                *k,
                *n,
                [prop.e_sup_u_x2, prop.e_sup_v_y2, prop.e_int_what_zhat2],
            ));
        }
    }
    for (k, n, m) in &table_rows {
        println!(
            "  (ε = 1/{k}, n = {n}): E sup|U−X|² = {:.3e}±{:.1e}, E sup|V−Y|² = {:.3e}±{:.1e}, E∫|Ŵ−Ẑ|² = {:.3e}±{:.1e}",
            m[0].value, m[0].se, m[1].value, m[1].se, m[2].value, m[2].se
        );
    }
    let metric_names = ["E sup|U−X|²", "E sup|V−Y|²", "E ∫|Ŵ−Ẑ|²"];
    for (mi, name) in metric_names.iter().enumerate() {
        // decrease in ε at fixed n
        for &n in &n_list {
            let series: Vec<EnsembleStat> = table_rows
                .iter()
                .filter(|(_, rn, _)| *rn == n)
                .map(|(_, _, m)| m[mi])
                .collect();
            let verdict = monotone_decay_verdict(&series);
            assert_eq!(
                verdict,
                DecayVerdict::Pass,
                "{name} at n = {n} not decreasing in ε: {}",
                fmt_stats(&series)
            );
        }
        // floors (smallest ε) decrease in n
        let k_min = fix.eps.last().unwrap().0;
        let floors: Vec<EnsembleStat> = n_list
            .iter()
            .map(|&n| {
                table_rows
                    .iter()
                    .find(|(k, rn, _)| *k == k_min && *rn == n)
                    .unwrap()
                    .2[mi]
            })
            .collect();
        for w in floors.windows(2) {
            assert!(
                w[1].value < w[0].value,
                "{name} floors not decreasing in n: {}",
                fmt_stats(&floors)
            );
        }
    }
    pass(
        "criterion 09 (auxiliary SDE structure)",
        t0,
        &format!(
            "trivial coupling exact; {} (ε, n) combinations decay in ε and floor-order in n",
            table_rows.len()
        ),
    );
}

#[test]
fn criterion_10_mollification_index_rule() {
    let t0 = Instant::now();
    // y-independent density: m(n) = n
    let fix = harmonic();
    let grid = TorusGrid::new(1, 64).unwrap();
    let table = homlab::homog::build_table(&fix.cells, &fix.spec, -4.0, 4.0, 3).unwrap();
    let h = sample_terminal(&fix.spec, grid).unwrap();
    let md = MollifiedData::identity(&table, &h).unwrap();
    let times: Vec<f64> = vec![0.0, 0.02];
    let zeta =
        solve_regularized_system(&md, 0.04, grid, &times, &PdeOptions::default()).unwrap();
    let sel =
        select_mollification_index(&fix.cells, &zeta, 4, &[2, 4, 8, 16, 32], 1.0).unwrap();
    assert_eq!(sel.m, 4, "y-independent p must give m(n) = n");
    assert!(!sel.saturated);

    // zero-Hessian injection: m(n) = n
    let mut zeta0 = zeta.clone();
    zeta0.stats.sup_hess = 0.0;
    let sel0 =
        select_mollification_index(&quasi().cells, &zeta0, 8, &[2, 4, 8, 16, 32], 1.0).unwrap();
    assert_eq!(sel0.m, 8, "zero Hessian must give m(n) = n");

    // defining inequality holds at the returned index on the quasilinear fixture
    for sel in &quasi().m_sel {
        assert!(sel.m >= sel.n);
        assert!(
            !sel.saturated && sel.product <= sel.threshold,
            "m({}) = {}: product {:.3e} vs 1/n = {:.3e}",
            sel.n,
            sel.m,
            sel.product,
            sel.threshold
        );
        println!(
            "  m({}) = {} (hessian sup {:.3e}, density gap {:.3e}, product {:.3e} ≤ {:.3e})",
            sel.n, sel.m, sel.hessian_sup, sel.density_gap, sel.product, sel.threshold
        );
    }
    pass(
        "criterion 10 (m(n) selection rule)",
        t0,
        "trivial cases return n; quasilinear indices satisfy the defining inequality",
    );
}

#[test]
fn criterion_11_martingale_identification() {
    let t0 = Instant::now();
    let fix = harmonic();
    let t_end = fix.t_end;
    let target = t_end * 3.0f64.sqrt();
    // ε = 1/32, fine steps for the quadratic-variation accumulators
    let (k, _, eval) = fix.eps.last().unwrap();
    assert_eq!(*k, 32);
    // the Euler chain's occupation measure carries an O(dt/ε²) bias for
    // multiplicative noise, so the quadratic-variation estimator needs
    // dt ≪ ε²; path count stays small because the comparison is a
    // consistency check, not a power test
    let cfg = harmonic_sim(*k, 32, 131_072, None);
    let mut ens = simulate_forward(&cfg, &fix.spec, eval).unwrap();
    let summary = ens
        .martingale_diagnostics(&fix.spec, &fix.cell_eval, eval)
        .unwrap();
    let qv = summary.mean_qv_n_t;
    let gap = (qv.value - target).abs();
    assert!(
        gap <= 2.0 * qv.se,
        "mean [N]_T = {:.6e} ± {:.1e} vs T√3 = {target:.6e} (gap {gap:.2e})",
        qv.value,
        qv.se
    );

    // moment comparison against the pathwise-coupled limit simulation
    let table = homlab::homog::build_table(&fix.cells, &fix.spec, -6.0, 6.0, 5).unwrap();
    let lim = simulate_limit_ensemble(&cfg, &fix.spec, &table, &fix.lim_eval).unwrap();
    let d1 = (summary.e_x_t.value - lim.e_x_t.value).abs();
    let s1 = 2.0 * (summary.e_x_t.se.powi(2) + lim.e_x_t.se.powi(2)).sqrt();
    assert!(d1 <= s1, "E X_T: {:.4e} vs {:.4e} (2SE {s1:.2e})", summary.e_x_t.value, lim.e_x_t.value);
    let d2 = (summary.e_x_t2.value - lim.e_x_t2.value).abs();
    let s2 = 2.0 * (summary.e_x_t2.se.powi(2) + lim.e_x_t2.se.powi(2)).sqrt();
    assert!(d2 <= s2, "E X_T²: {:.4e} vs {:.4e} (2SE {s2:.2e})", summary.e_x_t2.value, lim.e_x_t2.value);
    pass(
        "criterion 11 (martingale identification)",
        t0,
        &format!(
            "mean [N]_T = {:.5} ± {:.1e} vs T√3 = {target:.5}; moment gaps {d1:.2e} ≤ {s1:.2e}, {d2:.2e} ≤ {s2:.2e}",
            qv.value, qv.se
        ),
    );
}

#[test]
fn criterion_12_determinism_and_hygiene() {
    let t0 = Instant::now();
    // (a) identical (config, seed) reproduce byte-identical reports
    let toml = r#"
[coefficients]
preset = "harmonic-1d"

[grid]
p_dim = 1
q_dim = 1
n_cell = 32
m_pde = 32

[cell]
y_min = -1.0
y_max = 1.0
y_nodes = 3
comp_tol = 1e-8
residual_tol = 1e-9
h_y = 1e-3
centering = "auto"
validation_density = 8

[table]
z_min = -3.0
z_max = 3.0
z_nodes = 3

[pde]
t_end = 0.05

[mc]
t0 = 0.0
x0 = [0.1]
n_paths = 128
n_steps = 64
store_every = 4
seed = 99

[sweep]
eps_k = [2]
n_reg = []
m_candidates = []
"#;
    let cfg = homlab::harness::ExperimentConfig::from_toml(toml).unwrap();
    let opts = homlab::harness::RunOptions::default();
    let r1 = homlab::harness::run_pipeline(&cfg, &opts).unwrap();
    let r2 = homlab::harness::run_pipeline(&cfg, &opts).unwrap();
    assert_eq!(
        r1.to_json().unwrap(),
        r2.to_json().unwrap(),
        "reports must be byte-identical"
    );

    // (b) doubling n_steps moves every metric by less than its standard
    //     error (Brownian paths shared through the refinement base)
    let fix = harmonic();
    let (k, _, eval) = &fix.eps[1];
    let base = Some(8192usize);
    let run = |n_steps: usize| {
        let cfg = harmonic_sim(*k, 256, n_steps, base);
        let mut ens = simulate_forward(&cfg, &fix.spec, eval).unwrap();
        let conv = ens
            .convergence_metrics(&fix.spec, &fix.cell_eval, eval, &fix.lim_eval)
            .unwrap();
        let mart = ens
            .martingale_diagnostics(&fix.spec, &fix.cell_eval, eval)
            .unwrap();
        let mon = ens.estimate_monitors();
        vec![
            ("php_sup_y2", conv.e_sup_y2),
            ("php_int_z2", conv.e_int_z2),
            ("qv_n_mean", mart.mean_qv_n_t),
            ("e_sup_x2", mon.e_sup_x2),
            ("lemma_b1", mon.e_int_one_plus_y_z2),
        ]
    };
    let coarse = run(4096);
    let fine = run(8192);
    for ((name, a), (_, b)) in coarse.iter().zip(&fine) {
        let delta = (a.value - b.value).abs();
        assert!(
            delta < a.se.max(1e-14),
            "metric {name} moved by {delta:.3e} exceeding its SE {:.3e}",
            a.se
        );
    }

    // (c) halving the PDE step moves the profile far below any tolerance
    let grid = TorusGrid::new(1, 32).unwrap();
    let table = HomogenizedTable::from_fn(
        1,
        1,
        vec![vec![-4.0, 4.0]],
        vec![vec![-8.0, 8.0]],
        |_, _| vec![0.0],
        |_, _| vec![0.0],
        |_| vec![1.0],
    )
    .unwrap();
    let h = PeriodicField::from_fn(grid, 1, |x| vec![(2.0 * PI * x[0]).sin()]).unwrap();
    let solve_dt = |dt: f64| {
        let opts = PdeOptions {
            fixed_dt: Some(dt),
            dealias: false,
            ..PdeOptions::default()
        };
        solve_limit_system(&table, &h, 0.02, grid, &[0.0], &opts)
            .unwrap()
            .comp_values(0, 0)
            .to_vec()
    };
    let a = solve_dt(4e-4);
    let b = solve_dt(2e-4);
    let pde_delta = a
        .iter()
        .zip(&b)
        .map(|(x, y)| (x - y).abs())
        .fold(0.0f64, f64::max);
    assert!(pde_delta <= 1e-6, "halving dt moved θ(0,·) by {pde_delta:.2e}");

    pass(
        "criterion 12 (determinism and numerics hygiene)",
        t0,
        &format!(
            "byte-identical reports; step-doubling shifts within SE; dt-halving moves θ(0,·) by {pde_delta:.1e}"
        ),
    );
}

// sanity helper used by multiple criteria: node values of sin terminal match
#[test]
fn terminal_values_exact_on_fields() {
    let fix = harmonic();
    let (k, field, _) = &fix.eps[0];
    let g = field.grid;
    let last = field.times.len() - 1;
    for i in 0..g.n_total() {
        let x = g.node(i);
        let expect = (2.0 * PI * x[0]).sin();
        assert_eq!(
            field.comp_values(last, 0)[i],
            expect,
            "terminal snapshot must be the sampled data (k = {k})"
        );
    }
    let _ = interpolate(
        &PeriodicField::scalar(g, DVector::from_column_slice(field.comp_values(last, 0))).unwrap(),
        0,
        &[0.3],
    );
}

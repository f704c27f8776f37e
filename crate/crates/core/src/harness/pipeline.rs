//! Experiment orchestration: staged pipeline with content-addressed caching,
//! ε/n sweeps with decay verdicts, and report assembly.
//!
//! Stage order: validate → cell table → homogenized table → limit and
//! regularized solves → per-ε oscillatory solves → Monte Carlo + metrics →
//! report. Stage outputs are cached by a content hash of their inputs
//! (config sections, upstream keys, crate version), so an edited config
//! never reuses stale artifacts. Any stage error aborts with the stage name
//! and artifact key.

use super::cache::{
    cell_table_from_archive, cell_table_to_archive, content_key, field_from_archive,
    field_to_archive, table_from_archive, table_to_archive, Archive, CacheDir,
};
use super::config::ExperimentConfig;
use super::report::{
    CellsStageReport, CheckOutcome, EnvironmentStamp, FieldReport, PdeStageReport, Report,
    SweepReport, SweepRow, TableStageReport, VerdictRow,
};
use crate::cell::{
    build_cell_table, CellEvaluator, CellOptions, CellTable, MollifiedDensityEvaluator,
};
use crate::coeffs::{CoefficientSpec, ValidationReport};
use crate::error::{HomError, Result};
use crate::expr::Expr;
use crate::fbsde::{
    monotone_decay_verdict, simulate_forward, simulate_limit_ensemble, DecayVerdict, EnsembleStat,
    GSource, PathEnsemble, SimConfig,
};
use crate::homog::{build_table, check_ellipticity, HomogenizedTable};
use crate::pde::{
    grad_holder_quotient, mollify_terminal_and_driver, sample_terminal,
    select_mollification_index, solve_epsilon_system, solve_limit_system,
    solve_regularized_system, DecouplingField, FieldEvaluator, MollificationIndex, PdeOptions,
};
use crate::torus::{PeriodicField, TorusGrid};
use std::collections::BTreeMap;
use std::path::PathBuf;

pub const CRATE_VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    pub cache_dir: Option<PathBuf>,
    pub threads: Option<usize>,
    pub seed_override: Option<u64>,
}

fn stage_err(stage: &str, artifact: &str, e: HomError) -> HomError {
    HomError::Stage {
        stage: stage.into(),
        artifact: artifact.into(),
        source: Box::new(e),
    }
}

pub fn stage_validate(cfg: &ExperimentConfig) -> Result<(CoefficientSpec, ValidationReport)> {
    let spec = cfg.to_spec()?;
    let ybox = cfg.cell.y_min.abs().max(cfg.cell.y_max.abs()).max(1.0);
    let report = spec.validate_assumptions_with_box(
        cfg.cell.validation_density,
        ybox,
        cfg.table.z_max.abs().max(1.0),
    )?;
    Ok((spec, report))
}

fn cell_options(cfg: &ExperimentConfig) -> CellOptions {
    CellOptions {
        comp_tol: cfg.cell.comp_tol,
        residual_tol: cfg.cell.residual_tol,
        h_y: cfg.cell.h_y,
        centering: cfg.centering_mode(),
    }
}

pub fn stage_cells(
    cfg: &ExperimentConfig,
    spec: &CoefficientSpec,
    cache: Option<&CacheDir>,
) -> Result<(CellTable, CellsStageReport)> {
    let key = content_key(&[
        "cells",
        CRATE_VERSION,
        &cfg.section_hash(&["coefficients", "constants", "grid", "cell"]),
    ]);
    let mut cache_hit = false;
    let table = if let Some(c) = cache.filter(|c| c.has(&key)) {
        cache_hit = true;
        cell_table_from_archive(c.load(&key)?)?
    } else {
        let grid = TorusGrid::new(cfg.grid.p_dim, cfg.grid.n_cell)?;
        let q = cfg.grid.q_dim;
        let t = build_cell_table(
            spec,
            &vec![cfg.cell.y_min; q],
            &vec![cfg.cell.y_max; q],
            cfg.cell.y_nodes,
            grid,
            &cell_options(cfg),
        )?;
        if let Some(c) = cache {
            c.store(&key, &cell_table_to_archive(&t)?)?;
        }
        t
    };
    let mut min_density = f64::INFINITY;
    let mut max_inv = 0.0f64;
    let mut max_poisson = 0.0f64;
    let mut max_shift = 0.0f64;
    for e in &table.entries {
        min_density = min_density.min(e.p.comp(0).min());
        max_inv = max_inv.max(e.residuals.invariant);
        for r in e
            .residuals
            .bhat
            .iter()
            .chain(&e.residuals.ehat)
            .chain(&e.residuals.dy_bhat)
            .chain(&e.residuals.dy_ehat)
        {
            max_poisson = max_poisson.max(*r);
        }
        for s in e.shift_b.iter().chain(&e.shift_e) {
            max_shift = max_shift.max(s.abs());
        }
    }
    let report = CellsStageReport {
        cache_key: key,
        cache_hit,
        n_entries: table.n_entries(),
        min_density,
        max_invariant_residual: max_inv,
        max_poisson_residual: max_poisson,
        max_centering_shift: max_shift,
    };
    Ok((table, report))
}

pub fn stage_table(
    cfg: &ExperimentConfig,
    spec: &CoefficientSpec,
    cells: &CellTable,
    cells_key: &str,
    cache: Option<&CacheDir>,
) -> Result<(HomogenizedTable, TableStageReport)> {
    let key = content_key(&[
        "table",
        CRATE_VERSION,
        cells_key,
        &cfg.section_hash(&["table"]),
    ]);
    let mut cache_hit = false;
    let table = if let Some(c) = cache.filter(|c| c.has(&key)) {
        cache_hit = true;
        table_from_archive(c.load(&key)?)?
    } else {
        let t = build_table(cells, spec, cfg.table.z_min, cfg.table.z_max, cfg.table.z_nodes)?;
        if let Some(c) = cache {
            c.store(&key, &table_to_archive(&t)?)?;
        }
        t
    };
    let ell = check_ellipticity(&table, 1e-6);
    let alpha_samples: Vec<(f64, f64)> = table.y_axes[0]
        .iter()
        .map(|&y0| {
            let mut y = vec![0.0; table.q_dim];
            y[0] = y0;
            (y0, table.alpha_bar(&y)[(0, 0)])
        })
        .collect();
    let report = TableStageReport {
        cache_key: key,
        cache_hit,
        ellipticity: ell,
        alpha_samples,
        provenance: table.provenance.clone(),
    };
    Ok((table, report))
}

pub struct PdeArtifacts {
    pub limit: DecouplingField,
    pub regularized: Vec<(u32, DecouplingField)>,
    pub oscillatory: Vec<(u32, DecouplingField)>,
    pub terminal: PeriodicField,
    pub snapshot_times: Vec<f64>,
}

fn pde_options(cfg: &ExperimentConfig) -> PdeOptions {
    PdeOptions {
        rtol: cfg.pde.rtol,
        atol: cfg.pde.atol,
        dt_init: cfg.pde.dt_init,
        dt_min: cfg.pde.dt_min,
        dealias: cfg.pde.dealias,
        ..PdeOptions::default()
    }
}

fn field_report(
    field: &DecouplingField,
    key: &str,
    hit: bool,
    h_sup: f64,
    vbar_sup: Option<f64>,
) -> FieldReport {
    let bound_ok = match vbar_sup {
        Some(vs) => field
            .times
            .iter()
            .zip(&field.sup_per_slice)
            .all(|(&t, &s)| s <= h_sup + (field.t_end - t) * vs + 1e-9),
        None => field.stats.sup_abs.is_finite(),
    };
    FieldReport {
        cache_key: key.to_string(),
        cache_hit: hit,
        stats: field.stats.clone(),
        bound_monitor_ok: bound_ok,
        grad_holder_quotient: grad_holder_quotient(field, 0.05 * field.t_end),
    }
}

pub fn stage_pde(
    cfg: &ExperimentConfig,
    spec: &CoefficientSpec,
    table: &HomogenizedTable,
    table_key: &str,
    cache: Option<&CacheDir>,
) -> Result<(PdeArtifacts, PdeStageReport)> {
    let opts = pde_options(cfg);
    let grid = TorusGrid::new(cfg.grid.p_dim, cfg.grid.m_pde)?;
    let terminal = sample_terminal(spec, grid)?;
    let h_sup = terminal.comps().iter().map(|c| c.amax()).fold(0.0, f64::max);

    // snapshot times = the Monte Carlo stored grid
    let store_every = cfg.store_every();
    let s_nodes = if cfg.mc.n_steps == 0 {
        1
    } else {
        cfg.mc.n_steps / store_every
    };
    let dt = (cfg.pde.t_end - cfg.mc.t0) / cfg.mc.n_steps.max(1) as f64;
    let mut snapshot_times: Vec<f64> = (0..=s_nodes)
        .map(|s| (cfg.mc.t0 + (s * store_every) as f64 * dt).min(cfg.pde.t_end))
        .collect();
    snapshot_times.push(0.0);

    let solve_cached = |kind: &str,
                        extra: &str,
                        solver: &dyn Fn() -> Result<DecouplingField>|
     -> Result<(DecouplingField, String, bool)> {
        let key = content_key(&[
            kind,
            CRATE_VERSION,
            table_key,
            extra,
            &cfg.section_hash(&["pde", "mc", "grid"]),
        ]);
        if let Some(c) = cache.filter(|c| c.has(&key)) {
            return Ok((field_from_archive(c.load(&key)?)?, key, true));
        }
        let f = solver()?;
        if let Some(c) = cache {
            c.store(&key, &field_to_archive(&f)?)?;
        }
        Ok((f, key, false))
    };

    let (limit, limit_key, limit_hit) = solve_cached("pde-limit", "", &|| {
        solve_limit_system(table, &terminal, cfg.pde.t_end, grid, &snapshot_times, &opts)
    })
    .map_err(|e| stage_err("pde-limit", "", e))?;
    let limit_rep = field_report(&limit, &limit_key, limit_hit, h_sup, Some(table.max_abs_vbar()));

    let mut regularized = Vec::new();
    let mut reg_reports = Vec::new();
    for &n in &cfg.sweep.n_reg {
        let (f, key, hit) = solve_cached("pde-reg", &format!("n={n}"), &|| {
            let md = mollify_terminal_and_driver(table, &terminal, n, 9)?;
            solve_regularized_system(&md, cfg.pde.t_end, grid, &snapshot_times, &opts)
        })
        .map_err(|e| stage_err("pde-regularized", &format!("n={n}"), e))?;
        let md_gap = mollify_terminal_and_driver(table, &terminal, n, 9)?;
        let h_n_sup = md_gap.h_n.comps().iter().map(|c| c.amax()).fold(0.0, f64::max);
        reg_reports.push((n, field_report(&f, &key, hit, h_n_sup, Some(md_gap.table_n.max_abs_vbar()))));
        regularized.push((n, f));
    }

    let mut oscillatory = Vec::new();
    let mut osc_reports = Vec::new();
    for &k in &cfg.sweep.eps_k {
        let m_eps = cfg.grid.m_pde.max(16 * k as usize);
        let m_eps = m_eps + (m_eps % 2);
        let eps_grid = TorusGrid::new(cfg.grid.p_dim, m_eps)?;
        let eps_terminal = sample_terminal(spec, eps_grid)?;
        let (f, key, hit) = solve_cached("pde-eps", &format!("k={k},m={m_eps}"), &|| {
            solve_epsilon_system(
                spec,
                k,
                &eps_terminal,
                cfg.pde.t_end,
                eps_grid,
                &snapshot_times,
                &opts,
            )
        })
        .map_err(|e| stage_err("pde-oscillatory", &format!("k={k}"), e))?;
        osc_reports.push((k, field_report(&f, &key, hit, h_sup, None)));
        oscillatory.push((k, f));
    }

    let mut profiles = BTreeMap::new();
    let profile_of = |f: &DecouplingField| -> Vec<(f64, f64)> {
        let nt = f.grid.n_total();
        let vals = f.comp_values(0, 0);
        (0..nt).map(|i| (f.grid.node(i)[0], vals[i])).collect()
    };
    profiles.insert("theta_limit_t0".to_string(), profile_of(&limit));
    for (k, f) in &oscillatory {
        profiles.insert(format!("theta_eps_k{k}_t0"), profile_of(f));
    }
    for (n, f) in &regularized {
        profiles.insert(format!("zeta_n{n}_t0"), profile_of(f));
    }

    let report = PdeStageReport {
        limit: limit_rep,
        regularized: reg_reports,
        oscillatory: osc_reports,
        m_selection: Vec::new(),
        profiles,
    };
    Ok((
        PdeArtifacts {
            limit,
            regularized,
            oscillatory,
            terminal,
            snapshot_times,
        },
        report,
    ))
}

fn sim_config(cfg: &ExperimentConfig, k: u32) -> SimConfig {
    SimConfig {
        eps_k: k,
        t0: cfg.mc.t0,
        t_end: cfg.pde.t_end,
        x0: cfg.mc.x0.clone(),
        n_paths: cfg.mc.n_paths,
        n_steps: cfg.mc.n_steps,
        store_every: cfg.store_every(),
        seed: cfg.mc.seed,
        brownian_base_steps: None,
    }
}

/// Monte Carlo stage: per-ε metrics, per-(ε, n) auxiliary metrics, m(n)
/// selection, sweep verdicts, consistency checks.
#[allow(clippy::too_many_arguments)]
pub fn stage_mc(
    cfg: &ExperimentConfig,
    spec: &CoefficientSpec,
    cells: &CellTable,
    table: &HomogenizedTable,
    pde: &PdeArtifacts,
    raw_dump_dir: Option<&std::path::Path>,
) -> Result<(SweepReport, Vec<MollificationIndex>, Vec<CheckOutcome>)> {
    let cell_eval = CellEvaluator::new(cells);
    let limit_eval = FieldEvaluator::new(&pde.limit);
    let phi_cos = Expr::parse("cos(2*pi*x1)").expect("static expression");
    let mut rows: Vec<SweepRow> = Vec::new();
    let mut eps_metrics: BTreeMap<String, Vec<EnsembleStat>> = BTreeMap::new();
    let mut prop_metrics: BTreeMap<(u32, String), Vec<EnsembleStat>> = BTreeMap::new();
    let mut m_selection: Vec<MollificationIndex> = Vec::new();
    let mut checks: Vec<CheckOutcome> = Vec::new();
    let mut zeta_evals: Vec<(u32, FieldEvaluator)> = pde
        .regularized
        .iter()
        .map(|(n, f)| (*n, FieldEvaluator::new(f)))
        .collect();
    zeta_evals.sort_by_key(|(n, _)| *n);

    let mut int_z2_sq_values: Vec<f64> = Vec::new();
    let mut sup_y_ok = true;
    let n_list: Vec<u32> = if cfg.sweep.n_reg.is_empty() {
        vec![0]
    } else {
        cfg.sweep.n_reg.clone()
    };

    for (eps_idx, (k, eps_field)) in pde.oscillatory.iter().enumerate() {
        let scfg = sim_config(cfg, *k);
        let eps_eval = FieldEvaluator::new(eps_field);
        let mut ens: PathEnsemble = simulate_forward(&scfg, spec, &eps_eval)
            .map_err(|e| stage_err("mc-forward", &format!("k={k}"), e))?;
        ens.modified_processes(&cell_eval)?;
        let monitors = ens.estimate_monitors();
        sup_y_ok &= monitors.sup_abs_y <= eps_field.stats.sup_abs + 1e-9;
        int_z2_sq_values.push(monitors.e_int_z2_sq.value);

        if eps_idx == 0 && !cfg.sweep.m_candidates.is_empty() {
            for (n, reg_field) in &pde.regularized {
                let sel = select_mollification_index(
                    cells,
                    reg_field,
                    *n,
                    &cfg.sweep.m_candidates,
                    monitors.sup_abs_y,
                )?;
                m_selection.push(sel);
            }
        }

        let conv = ens.convergence_metrics(spec, &cell_eval, &eps_eval, &limit_eval)?;
        let rem = ens
            .remainder_terms(spec, &cell_eval, &eps_eval)?
            .report
            .clone();
        let ergodic = ens.ergodic_average(
            spec,
            &cell_eval,
            &eps_eval,
            cells,
            &phi_cos,
            GSource::Constant(0.0),
        )?;
        let mart = ens.martingale_diagnostics(spec, &cell_eval, &eps_eval)?;
        let limit_ens = simulate_limit_ensemble(&scfg, spec, table, &limit_eval)?;

        let mut base: BTreeMap<String, EnsembleStat> = BTreeMap::new();
        let point = |v: f64| EnsembleStat { value: v, se: 0.0 };
        base.insert("php_sup_y2".into(), conv.e_sup_y2);
        base.insert("php_int_z2".into(), conv.e_int_z2);
        base.insert("php_local_sup_y2".into(), conv.local_e_sup_y2);
        base.insert("php_local_int_z2".into(), conv.local_e_int_z2);
        base.insert("remainder_sup_r2".into(), rem.e_sup_r2);
        base.insert("remainder_sup_s2".into(), rem.e_sup_s2);
        base.insert("ergodic_cos".into(), ergodic);
        base.insert("qv_n_mean".into(), mart.mean_qv_n_t);
        base.insert("x_t_mean".into(), mart.e_x_t);
        base.insert("x_t_sq_mean".into(), mart.e_x_t2);
        base.insert("limit_qv_mean".into(), limit_ens.mean_int_alpha);
        base.insert("limit_x_t_mean".into(), limit_ens.e_x_t);
        base.insert("limit_x_t_sq_mean".into(), limit_ens.e_x_t2);
        base.insert("monitor_sup_abs_y".into(), point(monitors.sup_abs_y));
        base.insert("monitor_e_sup_x2".into(), monitors.e_sup_x2);
        base.insert("monitor_int_z2_sq".into(), monitors.e_int_z2_sq);
        base.insert("monitor_lemma_b1".into(), monitors.e_int_one_plus_y_z2);
        base.insert("y_t0".into(), point(ens.y_t0()[0]));
        base.insert("theta_t0_limit".into(), point(limit_ens.y_t0[0]));

        for (name, stat) in &base {
            eps_metrics.entry(name.clone()).or_default().push(*stat);
        }

        for &n in &n_list {
            let mut metrics = base.clone();
            if n > 0 {
                if let Some((_, zeta_eval)) = zeta_evals.iter().find(|(nn, _)| *nn == n) {
                    let m_used = m_selection
                        .iter()
                        .find(|s| s.n == n)
                        .map(|s| s.m)
                        .unwrap_or(n);
                    let pm = MollifiedDensityEvaluator::new(cells, m_used as f64)?;
                    ens.simulate_auxiliary_sde(spec, &cell_eval, &eps_eval, zeta_eval, &pm, n)
                        .map_err(|e| stage_err("mc-auxiliary", &format!("k={k},n={n}"), e))?;
                    let prop = ens.proposition_metrics()?;
                    metrics.insert("prop_sup_u_x2".into(), prop.e_sup_u_x2);
                    metrics.insert("prop_sup_v_y2".into(), prop.e_sup_v_y2);
                    metrics.insert("prop_int_what_zhat2".into(), prop.e_int_what_zhat2);
                    for key in ["prop_sup_u_x2", "prop_sup_v_y2", "prop_int_what_zhat2"] {
                        prop_metrics
                            .entry((n, key.to_string()))
                            .or_default()
                            .push(metrics[key]);
                    }
                }
            }
            rows.push(SweepRow {
                eps_k: *k,
                n_reg: n,
                metrics,
            });
        }

        if eps_idx == 0 {
            if let Some(dir) = raw_dump_dir {
                let mut archive = Archive::new(serde_json::json!({
                    "kind": "raw-paths", "eps_k": k, "seed": cfg.mc.seed,
                }));
                let s = ens.n_stored();
                archive.push("times", vec![s], ens.times.clone());
                archive.push("x", vec![cfg.mc.n_paths, s, ens.p_dim], ens.x.clone());
                archive.push("y", vec![cfg.mc.n_paths, s, ens.q_dim], ens.y.clone());
                archive.push(
                    "z",
                    vec![cfg.mc.n_paths, s, ens.q_dim * ens.p_dim],
                    ens.z.clone(),
                );
                super::cache::write_archive(&dir.join(format!("ensemble_k{k}.homz")), &archive)?;
            }
        }
    }

    // verdicts across ε (rows are ordered by the eps_k list)
    let mut verdicts = Vec::new();
    if pde.oscillatory.len() >= 2 {
        for name in [
            "php_sup_y2",
            "php_int_z2",
            "php_local_sup_y2",
            "php_local_int_z2",
            "remainder_sup_r2",
            "remainder_sup_s2",
            "ergodic_cos",
        ] {
            if let Some(values) = eps_metrics.get(name) {
                verdicts.push(VerdictRow {
                    metric: name.to_string(),
                    n_reg: None,
                    verdict: monotone_decay_verdict(values),
                    values: values.clone(),
                });
            }
        }
        for ((n, name), values) in &prop_metrics {
            if values.len() >= 2 {
                verdicts.push(VerdictRow {
                    metric: name.clone(),
                    n_reg: Some(*n),
                    verdict: monotone_decay_verdict(values),
                    values: values.clone(),
                });
            }
        }
    }

    checks.push(CheckOutcome {
        name: "sup_y_bounded_by_field".into(),
        passed: sup_y_ok,
        detail: "pathwise sup |Y| never exceeds sup |θ_ε| (composition bound)".into(),
    });
    if int_z2_sq_values.len() >= 2 {
        let max = int_z2_sq_values.iter().cloned().fold(f64::MIN, f64::max);
        let min = int_z2_sq_values.iter().cloned().fold(f64::MAX, f64::min);
        checks.push(CheckOutcome {
            name: "z_moment_uniform_in_eps".into(),
            passed: min > 0.0 && max <= 2.0 * min || max < 1e-20,
            detail: format!("E(∫|Z|²)² over the sweep: min {min:.4e}, max {max:.4e}"),
        });
    }
    for sel in &m_selection {
        checks.push(CheckOutcome {
            name: format!("mollification_index_n{}", sel.n),
            passed: !sel.saturated,
            detail: format!(
                "m({}) = {}, product {:.3e} vs 1/n = {:.3e}{}",
                sel.n,
                sel.m,
                sel.product,
                sel.threshold,
                if sel.saturated { " (saturated)" } else { "" }
            ),
        });
    }

    Ok((
        SweepReport {
            rows,
            verdicts,
        },
        m_selection,
        checks,
    ))
}

/// Run the full pipeline and assemble the report.
pub fn run_pipeline(cfg: &ExperimentConfig, opts: &RunOptions) -> Result<Report> {
    let mut cfg = cfg.clone();
    if let Some(seed) = opts.seed_override {
        cfg.mc.seed = seed;
    }
    cfg.validate()?;
    let cache = opts.cache_dir.as_ref().map(|p| CacheDir::new(p.clone()));
    let cache_ref = cache.as_ref();

    let (spec, validation) =
        stage_validate(&cfg).map_err(|e| stage_err("validate", "", e))?;
    let mut checks: Vec<CheckOutcome> = vec![CheckOutcome {
        name: "validation".into(),
        passed: validation.passed,
        detail: "Assumption (H) hypothesis checks on the sample grid".into(),
    }];
    if !validation.passed {
        return Ok(Report {
            crate_name: "homlab".into(),
            environment: EnvironmentStamp {
                crate_version: CRATE_VERSION.into(),
                requested_threads: opts.threads,
            },
            config_hash: cfg.config_hash(),
            config: cfg.clone(),
            validation,
            cells: None,
            table: None,
            pde: None,
            sweep: None,
            checks,
            overall_pass: false,
        });
    }

    let (cells, cells_report) =
        stage_cells(&cfg, &spec, cache_ref).map_err(|e| stage_err("cells", "", e))?;
    let cells_key = cells_report.cache_key.clone();
    let (table, table_report) = stage_table(&cfg, &spec, &cells, &cells_key, cache_ref)
        .map_err(|e| stage_err("table", &cells_key, e))?;
    checks.push(CheckOutcome {
        name: "ellipticity".into(),
        passed: table_report.ellipticity.passed,
        detail: format!(
            "min eigenvalue of ᾱ over y nodes: {:.6e}",
            table_report.ellipticity.min_eigenvalue
        ),
    });

    let (pde_art, mut pde_report) = stage_pde(&cfg, &spec, &table, &table_report.cache_key, cache_ref)?;
    checks.push(CheckOutcome {
        name: "pde_bound_monitors".into(),
        passed: pde_report.limit.bound_monitor_ok
            && pde_report.regularized.iter().all(|(_, r)| r.bound_monitor_ok),
        detail: "sup|θ| per slice within sup|H| + (T − t) sup|v̄|".into(),
    });

    let raw_dir = if cfg.output.raw_paths {
        let dir = PathBuf::from(&cfg.output.dir);
        std::fs::create_dir_all(&dir)?;
        Some(dir)
    } else {
        None
    };
    let (sweep, m_selection, mc_checks) = stage_mc(
        &cfg,
        &spec,
        &cells,
        &table,
        &pde_art,
        raw_dir.as_deref(),
    )?;
    pde_report.m_selection = m_selection;
    checks.extend(mc_checks);

    let any_fail_verdict = sweep
        .verdicts
        .iter()
        .any(|v| v.verdict == DecayVerdict::Fail);
    checks.push(CheckOutcome {
        name: "no_failing_decay_verdict".into(),
        passed: !any_fail_verdict,
        detail: "no sweep metric increases beyond 2 combined standard errors".into(),
    });
    let overall = checks.iter().all(|c| c.passed);

    Ok(Report {
        crate_name: "homlab".into(),
        environment: EnvironmentStamp {
            crate_version: CRATE_VERSION.into(),
            requested_threads: opts.threads,
        },
        config_hash: cfg.config_hash(),
        config: cfg,
        validation,
        cells: Some(cells_report),
        table: Some(table_report),
        pde: Some(pde_report),
        sweep: Some(sweep),
        checks,
        overall_pass: overall,
    })
}

/// Write the requested output files; returns the paths written.
pub fn write_outputs(report: &Report, out_dir: &std::path::Path) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(out_dir)?;
    let mut written = Vec::new();
    for fmt in &report.config.output.formats {
        let (name, contents) = match fmt.as_str() {
            "json" => ("report.json".to_string(), report.to_json()?),
            "csv" => ("sweep.csv".to_string(), report.to_csv()),
            "plotdata" => ("plotdata.csv".to_string(), report.to_plotdata()),
            other => {
                return Err(HomError::Config(format!(
                    "unknown output format `{other}` (expected json, csv or plotdata)"
                )))
            }
        };
        let path = out_dir.join(name);
        std::fs::write(&path, contents)?;
        written.push(path);
    }
    Ok(written)
}

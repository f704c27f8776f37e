//! Frozen-parameter cell problems on the torus.
//!
//! For each frozen `y` this module solves
//!
//! * the invariant density: `L_y* p(·,y) = 0`, `∫ p = 1`, `p > 0`,
//! * Poisson problems `L_y φ̂ + φ = 0`, `∫ φ̂ dx = 0` (solvable only when φ is
//!   centered against `p` — the discrete right-hand side is always recentered
//!   by the constant `∫ φ p dx`, silently below `comp_tol`, as a hard error
//!   above it in strict mode),
//! * the correctors `b̂`, `ê` and their spatial gradients,
//! * first parameter derivatives of the correctors through the differentiated
//!   Poisson equation `L_y ∂b̂/∂y_j + ∂b/∂y_j + (∂L_y/∂y_j) b̂ = 0` with
//!   coefficient derivatives by central differences; second derivatives by
//!   central differences of first derivatives; mixed x-y derivatives by
//!   spectral differentiation of the parameter derivatives,
//! * the density derivative `∂p/∂y_j` by central differences,
//! * mollification of `p` in the parameter: `p_m(x, ·) = p(x, ·) * ρ_m`,
//!   computed by quadrature over the table's y-grid with a discretely
//!   normalized bump kernel (so a y-independent density is reproduced
//!   exactly and `∫ p_m dx = 1` holds to quadrature accuracy).
//!
//! Nullspace handling is a bordered (augmented) linear system with the
//! normalization row; one LU factorization per operator is shared by all
//! right-hand sides at the same `y`.

use crate::coeffs::CoefficientSpec;
use crate::error::{HomError, Result};
use crate::torus::{
    assemble_adjoint, assemble_generator, assemble_generator_from_samples, diff_matrix,
    quadrature_of, GeneratorMatrix, PeriodicField, RealSpectrum1D, Spectrum, TorusGrid,
    TrigBasis1D,
};
use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::Serialize;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum CenteringMode {
    /// Error when the centering integral exceeds `comp_tol`.
    Strict,
    /// Replace `b_i` by `b_i - ∫ b_i p dx` (likewise `e_j`) and record the shift.
    Auto,
}

#[derive(Debug, Clone, Copy)]
pub struct CellOptions {
    /// Threshold between silent recentering and a compatibility error.
    pub comp_tol: f64,
    /// Target residual for Poisson solves (recorded; solves are direct).
    pub residual_tol: f64,
    /// Step for parameter (y) finite differences.
    pub h_y: f64,
    pub centering: CenteringMode,
}

impl Default for CellOptions {
    fn default() -> Self {
        CellOptions {
            comp_tol: 1e-8,
            residual_tol: 1e-9,
            h_y: 1e-3,
            centering: CenteringMode::Auto,
        }
    }
}

/// LU-factored bordered system `[[A, 1], [w^T, 0]]` used for both the
/// invariant density (A = L*, rhs_last = 1) and Poisson solves (A = L,
/// rhs_last = 0).
struct BorderedSolver {
    lu: nalgebra::LU<f64, nalgebra::Dyn, nalgebra::Dyn>,
    n: usize,
}

impl BorderedSolver {
    fn new(a: &DMatrix<f64>, grid: TorusGrid) -> BorderedSolver {
        let n = a.nrows();
        let w = grid.weight();
        let mut m = DMatrix::zeros(n + 1, n + 1);
        m.view_mut((0, 0), (n, n)).copy_from(a);
        for i in 0..n {
            m[(i, n)] = 1.0;
            m[(n, i)] = w;
        }
        BorderedSolver { lu: m.lu(), n }
    }

    fn solve(&self, rhs: &DVector<f64>, rhs_last: f64) -> Result<DVector<f64>> {
        let mut full = DVector::zeros(self.n + 1);
        full.rows_mut(0, self.n).copy_from(rhs);
        full[self.n] = rhs_last;
        let sol = self.lu.solve(&full).ok_or_else(|| {
            HomError::Discretization(
                "bordered system is singular beyond the expected nullspace; try a larger grid"
                    .into(),
            )
        })?;
        Ok(sol.rows(0, self.n).into_owned())
    }
}

/// Solve `L_y* p = 0`, `∫ p dx = 1`.
pub fn solve_invariant_density(
    spec: &CoefficientSpec,
    y: &[f64],
    grid: TorusGrid,
) -> Result<PeriodicField> {
    let gen = assemble_generator(grid, spec, y)?;
    solve_invariant_density_from(&gen)
}

pub fn solve_invariant_density_from(gen: &GeneratorMatrix) -> Result<PeriodicField> {
    let grid = gen.grid;
    let adj = assemble_adjoint(gen);
    let solver = BorderedSolver::new(&adj.mat, grid);
    let zero = DVector::zeros(grid.n_total());
    let mut p = solver.solve(&zero, 1.0)?;
    let mass = quadrature_of(grid, &p);
    if !(mass.is_finite() && mass.abs() > 1e-14) {
        return Err(HomError::Discretization(
            "invariant density solve produced zero mass".into(),
        ));
    }
    p /= mass;
    let pmin = p.min();
    if pmin <= 0.0 {
        return Err(HomError::Resolution(format!(
            "invariant density not positive (min p = {pmin:.3e}); increase the grid resolution"
        )));
    }
    PeriodicField::scalar(grid, p)
}

#[derive(Debug, Clone, Serialize, Default)]
pub struct PoissonInfo {
    /// Measured `∫ φ p dx` before recentering.
    pub centering_integral: f64,
    /// Sup-norm residual `‖L φ̂ + (φ - shift)‖∞`.
    pub residual: f64,
}

/// Solve `L φ̂ + φ = 0` with `∫ φ̂ dx = 0`.
///
/// The right-hand side is recentered against `p` by subtracting the constant
/// `∫ φ p dx` (exact because `∫ p dx = 1`); in strict mode a centering
/// integral above `comp_tol · max(1, ‖φ‖∞)` is an error instead.
pub fn solve_poisson(
    gen: &GeneratorMatrix,
    phi: &DVector<f64>,
    p: &DVector<f64>,
    opts: &CellOptions,
    strict: bool,
) -> Result<(DVector<f64>, PoissonInfo)> {
    if gen.adjoint {
        return Err(HomError::usage(
            "solve_poisson expects the generator, not its adjoint",
        ));
    }
    let grid = gen.grid;
    let ctx = PoissonContext::new(gen, p.clone());
    ctx.solve(phi, opts, strict, grid)
}

/// Shared LU for many Poisson solves at one `y`.
struct PoissonContext {
    solver: BorderedSolver,
    p: DVector<f64>,
    mat: DMatrix<f64>,
}

impl PoissonContext {
    fn new(gen: &GeneratorMatrix, p: DVector<f64>) -> PoissonContext {
        PoissonContext {
            solver: BorderedSolver::new(&gen.mat, gen.grid),
            p,
            mat: gen.mat.clone(),
        }
    }

    fn solve(
        &self,
        phi: &DVector<f64>,
        opts: &CellOptions,
        strict: bool,
        grid: TorusGrid,
    ) -> Result<(DVector<f64>, PoissonInfo)> {
        let centering = quadrature_of(grid, &phi.component_mul(&self.p));
        let scale = phi.amax().max(1.0);
        if strict && centering.abs() > opts.comp_tol * scale {
            return Err(HomError::Compatibility {
                measured: centering,
                tolerance: opts.comp_tol * scale,
            });
        }
        let centered = phi.map(|v| v - centering);
        let rhs = -&centered;
        let mut hat = self.solver.solve(&rhs, 0.0)?;
        let mean = quadrature_of(grid, &hat);
        hat.apply(|v| *v -= mean);
        let residual = (&self.mat * &hat + &centered).amax();
        Ok((
            hat,
            PoissonInfo {
                centering_integral: centering,
                residual,
            },
        ))
    }
}

#[derive(Debug, Clone, Serialize, Default)]
pub struct CellResiduals {
    pub invariant: f64,
    pub bhat: Vec<f64>,
    pub ehat: Vec<f64>,
    pub dy_bhat: Vec<f64>,
    pub dy_ehat: Vec<f64>,
}

/// All torus fields attached to one frozen `y`.
///
/// Component layouts (row-major, 0-based):
/// `grad_x_bhat[(l, i)] = ∂b̂_l/∂x_i` (P×P), `grad_x_ehat` Q×P,
/// `dy_bhat[(l, j)] = ∂b̂_l/∂y_j` (P×Q), `dy_ehat` Q×Q,
/// `dyy_bhat[(l, j, j')]` P×Q×Q, `dyy_ehat` Q×Q×Q,
/// `dxy_bhat[(l, i, j)] = ∂²b̂_l/∂x_i∂y_j` P×P×Q, `dxy_ehat` Q×P×Q,
/// `dy_p[j] = ∂p/∂y_j`.
#[derive(Debug, Clone)]
pub struct CellSolution {
    pub y: Vec<f64>,
    pub p: PeriodicField,
    pub bhat: PeriodicField,
    pub ehat: PeriodicField,
    pub grad_x_bhat: PeriodicField,
    pub grad_x_ehat: PeriodicField,
    pub dy_bhat: PeriodicField,
    pub dy_ehat: PeriodicField,
    pub dyy_bhat: PeriodicField,
    pub dyy_ehat: PeriodicField,
    pub dxy_bhat: PeriodicField,
    pub dxy_ehat: PeriodicField,
    pub dy_p: PeriodicField,
    pub residuals: CellResiduals,
    /// Centering shifts applied to (b, e) under auto mode.
    pub shift_b: Vec<f64>,
    pub shift_e: Vec<f64>,
}

/// Correctors and gradients at one `y` (no parameter derivatives yet).
struct CellCore {
    gen: GeneratorMatrix,
    p: PeriodicField,
    p_residual: f64,
    bhat: Vec<DVector<f64>>,
    ehat: Vec<DVector<f64>>,
    shift_b: Vec<f64>,
    shift_e: Vec<f64>,
    res_b: Vec<f64>,
    res_e: Vec<f64>,
}

fn solve_cell_core(
    spec: &CoefficientSpec,
    y: &[f64],
    grid: TorusGrid,
    opts: &CellOptions,
) -> Result<CellCore> {
    let gen = assemble_generator(grid, spec, y)?;
    let p = solve_invariant_density_from(&gen)?;
    let adj = assemble_adjoint(&gen);
    let p_residual = (&adj.mat * p.comp(0)).amax();
    let ctx = PoissonContext::new(&gen, p.comp(0).clone());
    let strict = opts.centering == CenteringMode::Strict;
    let nt = grid.n_total();

    let mut bhat = Vec::with_capacity(spec.p_dim);
    let mut shift_b = Vec::with_capacity(spec.p_dim);
    let mut res_b = Vec::with_capacity(spec.p_dim);
    for i in 0..spec.p_dim {
        let prog = &spec.compiled().b[i];
        let phi = DVector::from_fn(nt, |k, _| prog.eval(&grid.node(k), y, &[]));
        let (hat, info) = ctx.solve(&phi, opts, strict, grid)?;
        bhat.push(hat);
        shift_b.push(info.centering_integral);
        res_b.push(info.residual);
    }
    let mut ehat = Vec::with_capacity(spec.q_dim);
    let mut shift_e = Vec::with_capacity(spec.q_dim);
    let mut res_e = Vec::with_capacity(spec.q_dim);
    for j in 0..spec.q_dim {
        let prog = &spec.compiled().e[j];
        let phi = DVector::from_fn(nt, |k, _| prog.eval(&grid.node(k), y, &[]));
        let (hat, info) = ctx.solve(&phi, opts, strict, grid)?;
        ehat.push(hat);
        shift_e.push(info.centering_integral);
        res_e.push(info.residual);
    }
    Ok(CellCore {
        gen,
        p,
        p_residual,
        bhat,
        ehat,
        shift_b,
        shift_e,
        res_b,
        res_e,
    })
}

/// Solve the correctors `b̂`, `ê` and their spatial gradients at one `y`.
/// Returns `(b̂, ê, ∇ₓb̂, ∇ₓê)`.
pub fn solve_correctors(
    spec: &CoefficientSpec,
    y: &[f64],
    grid: TorusGrid,
    centering: CenteringMode,
) -> Result<(PeriodicField, PeriodicField, PeriodicField, PeriodicField)> {
    let opts = CellOptions {
        centering,
        ..CellOptions::default()
    };
    let core = solve_cell_core(spec, y, grid, &opts)?;
    let (gb, ge) = corrector_gradients(&core, grid, spec)?;
    Ok((
        PeriodicField::new(grid, core.bhat)?,
        PeriodicField::new(grid, core.ehat)?,
        gb,
        ge,
    ))
}

fn corrector_gradients(
    core: &CellCore,
    grid: TorusGrid,
    spec: &CoefficientSpec,
) -> Result<(PeriodicField, PeriodicField)> {
    let p = spec.p_dim;
    let q = spec.q_dim;
    let d1: Vec<DMatrix<f64>> = (0..p)
        .map(|axis| diff_matrix(grid, axis, 1))
        .collect::<Result<_>>()?;
    let mut gb = Vec::with_capacity(p * p);
    for l in 0..p {
        for d in d1.iter() {
            gb.push(d * &core.bhat[l]);
        }
    }
    let mut ge = Vec::with_capacity(q * p);
    for j in 0..q {
        for d in d1.iter() {
            ge.push(d * &core.ehat[j]);
        }
    }
    Ok((PeriodicField::new(grid, gb)?, PeriodicField::new(grid, ge)?))
}

/// `∂a/∂y_j`, `∂b/∂y_j` nodal samples by central differences.
fn coefficient_y_derivative_samples(
    spec: &CoefficientSpec,
    y: &[f64],
    j: usize,
    h: f64,
    grid: TorusGrid,
) -> (Vec<DVector<f64>>, Vec<DVector<f64>>) {
    let p = spec.p_dim;
    let nt = grid.n_total();
    let mut da = vec![DVector::zeros(nt); p * p];
    let mut db = vec![DVector::zeros(nt); p];
    for idx in 0..nt {
        let x = grid.node(idx);
        let dam = spec.da_dy(&x, y, j, h);
        for r in 0..p {
            for c in 0..p {
                da[r * p + c][idx] = dam[(r, c)];
            }
        }
        let dbv = spec.db_dy(&x, y, j, h);
        for r in 0..p {
            db[r][idx] = dbv[r];
        }
    }
    (da, db)
}

/// First parameter derivatives of the correctors at the core's `y` via the
/// differentiated Poisson equation; right-hand sides recentered against p.
fn first_y_derivatives(
    spec: &CoefficientSpec,
    core: &CellCore,
    grid: TorusGrid,
    opts: &CellOptions,
) -> Result<(Vec<DVector<f64>>, Vec<DVector<f64>>, Vec<f64>, Vec<f64>)> {
    let p = spec.p_dim;
    let q = spec.q_dim;
    let nt = grid.n_total();
    let y = &core.gen.y;
    let ctx = PoissonContext::new(&core.gen, core.p.comp(0).clone());
    let mut dy_b = vec![DVector::zeros(nt); p * q];
    let mut dy_e = vec![DVector::zeros(nt); q * q];
    let mut res_b = Vec::new();
    let mut res_e = Vec::new();
    for j in 0..q {
        let (da, db) = coefficient_y_derivative_samples(spec, y, j, opts.h_y, grid);
        // ∂L/∂y_j has the same differential structure with derivative coefficients
        let dl = assemble_generator_from_samples(grid, &da, &db, y.to_vec())?;
        for l in 0..p {
            let rhs = &db[l] + &dl.mat * &core.bhat[l];
            let (hat, info) = ctx.solve(&rhs, opts, false, grid)?;
            dy_b[l * q + j] = hat;
            res_b.push(info.residual);
        }
        let mut de = vec![DVector::zeros(nt); q];
        for idx in 0..nt {
            let x = grid.node(idx);
            let dev = spec.de_dy(&x, y, j, opts.h_y);
            for r in 0..q {
                de[r][idx] = dev[r];
            }
        }
        for l in 0..q {
            let rhs = &de[l] + &dl.mat * &core.ehat[l];
            let (hat, info) = ctx.solve(&rhs, opts, false, grid)?;
            dy_e[l * q + j] = hat;
            res_e.push(info.residual);
        }
    }
    Ok((dy_b, dy_e, res_b, res_e))
}

/// Parameter-derivative bundle for one `y`.
pub struct CorrectorYDerivatives {
    pub dy_bhat: PeriodicField,
    pub dy_ehat: PeriodicField,
    pub dyy_bhat: PeriodicField,
    pub dyy_ehat: PeriodicField,
    pub dxy_bhat: PeriodicField,
    pub dxy_ehat: PeriodicField,
}

/// Compute all corrector parameter derivatives at `y`.
pub fn corrector_y_derivatives(
    spec: &CoefficientSpec,
    y: &[f64],
    grid: TorusGrid,
    h_y: f64,
) -> Result<CorrectorYDerivatives> {
    let opts = CellOptions {
        h_y,
        ..CellOptions::default()
    };
    let core = solve_cell_core(spec, y, grid, &opts)?;
    let sol = finish_cell_solution(spec, core, grid, &opts)?;
    Ok(CorrectorYDerivatives {
        dy_bhat: sol.dy_bhat,
        dy_ehat: sol.dy_ehat,
        dyy_bhat: sol.dyy_bhat,
        dyy_ehat: sol.dyy_ehat,
        dxy_bhat: sol.dxy_bhat,
        dxy_ehat: sol.dxy_ehat,
    })
}

/// Central finite difference of the invariant density in each `y_j`.
pub fn density_y_derivative(
    spec: &CoefficientSpec,
    y: &[f64],
    grid: TorusGrid,
    h_y: f64,
) -> Result<PeriodicField> {
    let q = spec.q_dim;
    let mut comps = Vec::with_capacity(q);
    for j in 0..q {
        let mut yp = y.to_vec();
        let mut ym = y.to_vec();
        yp[j] += h_y;
        ym[j] -= h_y;
        let pp = solve_invariant_density(spec, &yp, grid)?;
        let pm = solve_invariant_density(spec, &ym, grid)?;
        comps.push((pp.comp(0) - pm.comp(0)) / (2.0 * h_y));
    }
    PeriodicField::new(grid, comps)
}

/// Full cell solution with every derivative field.
pub fn solve_cell(
    spec: &CoefficientSpec,
    y: &[f64],
    grid: TorusGrid,
    opts: &CellOptions,
) -> Result<CellSolution> {
    let core = solve_cell_core(spec, y, grid, opts)?;
    finish_cell_solution(spec, core, grid, opts)
}

fn finish_cell_solution(
    spec: &CoefficientSpec,
    core: CellCore,
    grid: TorusGrid,
    opts: &CellOptions,
) -> Result<CellSolution> {
    let p_dim = spec.p_dim;
    let q_dim = spec.q_dim;
    let nt = grid.n_total();
    let y = core.gen.y.clone();
    let h = opts.h_y;

    let (dy_b, dy_e, res_dyb, res_dye) = first_y_derivatives(spec, &core, grid, opts)?;

    // second derivatives: central differences of the first-derivative route
    // at y ± h e_j'. Skipped (all zero) when nothing depends on y.
    let mut dyy_b = vec![DVector::zeros(nt); p_dim * q_dim * q_dim];
    let mut dyy_e = vec![DVector::zeros(nt); q_dim * q_dim * q_dim];
    let mut dy_p = vec![DVector::zeros(nt); q_dim];
    let depends_on_y = spec.compiled().generator_depends_on_y
        || spec.e.iter().any(|e| e.depends_on_y());
    if depends_on_y {
        for jp in 0..q_dim {
            let mut yp = y.clone();
            let mut ym = y.clone();
            yp[jp] += h;
            ym[jp] -= h;
            let core_p = solve_cell_core(spec, &yp, grid, opts)?;
            let core_m = solve_cell_core(spec, &ym, grid, opts)?;
            let (dyb_p, dye_p, _, _) = first_y_derivatives(spec, &core_p, grid, opts)?;
            let (dyb_m, dye_m, _, _) = first_y_derivatives(spec, &core_m, grid, opts)?;
            for l in 0..p_dim {
                for j in 0..q_dim {
                    dyy_b[l * q_dim * q_dim + j * q_dim + jp] =
                        (&dyb_p[l * q_dim + j] - &dyb_m[l * q_dim + j]) / (2.0 * h);
                }
            }
            for l in 0..q_dim {
                for j in 0..q_dim {
                    dyy_e[l * q_dim * q_dim + j * q_dim + jp] =
                        (&dye_p[l * q_dim + j] - &dye_m[l * q_dim + j]) / (2.0 * h);
                }
            }
            dy_p[jp] = (core_p.p.comp(0) - core_m.p.comp(0)) / (2.0 * h);
        }
    }

    // mixed derivatives: spectral x-gradients of the first y-derivatives
    let d1: Vec<DMatrix<f64>> = (0..p_dim)
        .map(|axis| diff_matrix(grid, axis, 1))
        .collect::<Result<_>>()?;
    let mut dxy_b = vec![DVector::zeros(nt); p_dim * p_dim * q_dim];
    for l in 0..p_dim {
        for (i, d) in d1.iter().enumerate() {
            for j in 0..q_dim {
                dxy_b[l * p_dim * q_dim + i * q_dim + j] = d * &dy_b[l * q_dim + j];
            }
        }
    }
    let mut dxy_e = vec![DVector::zeros(nt); q_dim * p_dim * q_dim];
    for l in 0..q_dim {
        for (i, d) in d1.iter().enumerate() {
            for j in 0..q_dim {
                dxy_e[l * p_dim * q_dim + i * q_dim + j] = d * &dy_e[l * q_dim + j];
            }
        }
    }

    let (grad_x_bhat, grad_x_ehat) = corrector_gradients(&core, grid, spec)?;

    let residuals = CellResiduals {
        invariant: core.p_residual,
        bhat: core.res_b.clone(),
        ehat: core.res_e.clone(),
        dy_bhat: res_dyb,
        dy_ehat: res_dye,
    };

    Ok(CellSolution {
        y,
        p: core.p,
        bhat: PeriodicField::new(grid, core.bhat)?,
        ehat: PeriodicField::new(grid, core.ehat)?,
        grad_x_bhat,
        grad_x_ehat,
        dy_bhat: PeriodicField::new(grid, dy_b)?,
        dy_ehat: PeriodicField::new(grid, dy_e)?,
        dyy_bhat: PeriodicField::new(grid, dyy_b)?,
        dyy_ehat: PeriodicField::new(grid, dyy_e)?,
        dxy_bhat: PeriodicField::new(grid, dxy_b)?,
        dxy_ehat: PeriodicField::new(grid, dxy_e)?,
        dy_p: PeriodicField::new(grid, dy_p)?,
        residuals,
        shift_b: core.shift_b,
        shift_e: core.shift_e,
    })
}

/// Rectangular table of cell solutions over a parameter box with multilinear
/// interpolation in `y`.
pub struct CellTable {
    pub grid: TorusGrid,
    /// One strictly increasing axis per parameter dimension.
    pub y_axes: Vec<Vec<f64>>,
    /// Row-major over the y-grid (axis 0 slowest).
    pub entries: Vec<CellSolution>,
    pub q_dim: usize,
    pub p_dim: usize,
}

/// Build a cell table over the box `[y_lo, y_hi]` with `nodes_per_axis`
/// nodes per axis; cell solves run in parallel, any failure aborts with its y.
pub fn build_cell_table(
    spec: &CoefficientSpec,
    y_lo: &[f64],
    y_hi: &[f64],
    nodes_per_axis: usize,
    grid: TorusGrid,
    opts: &CellOptions,
) -> Result<CellTable> {
    let q = spec.q_dim;
    if y_lo.len() != q || y_hi.len() != q {
        return Err(HomError::usage("y box dimension mismatch"));
    }
    let mut y_axes = Vec::with_capacity(q);
    for d in 0..q {
        if nodes_per_axis == 1 {
            y_axes.push(vec![0.5 * (y_lo[d] + y_hi[d])]);
        } else {
            if y_hi[d] <= y_lo[d] {
                return Err(HomError::usage("y box must have positive extent"));
            }
            let ax: Vec<f64> = (0..nodes_per_axis)
                .map(|i| y_lo[d] + (y_hi[d] - y_lo[d]) * i as f64 / (nodes_per_axis - 1) as f64)
                .collect();
            y_axes.push(ax);
        }
    }
    let n_nodes: usize = y_axes.iter().map(|a| a.len()).product();
    let ys: Vec<Vec<f64>> = (0..n_nodes)
        .map(|idx| {
            let mut rem = idx;
            let mut y = vec![0.0; q];
            for d in (0..q).rev() {
                let len = y_axes[d].len();
                y[d] = y_axes[d][rem % len];
                rem /= len;
            }
            y
        })
        .collect();
    let results: Vec<Result<CellSolution>> = ys
        .par_iter()
        .map(|y| solve_cell(spec, y, grid, opts))
        .collect();
    let mut entries = Vec::with_capacity(n_nodes);
    for (y, r) in ys.iter().zip(results) {
        match r {
            Ok(sol) => entries.push(sol),
            Err(e) => {
                return Err(HomError::Solver(format!(
                    "cell solve failed at y = {y:?}: {e}"
                )))
            }
        }
    }
    Ok(CellTable {
        grid,
        y_axes,
        entries,
        q_dim: q,
        p_dim: spec.p_dim,
    })
}

impl CellTable {
    pub fn n_entries(&self) -> usize {
        self.entries.len()
    }

    /// Locate `y` per axis: (base index, linear weight toward base+1),
    /// clamped to the axis hull.
    pub fn locate(&self, y: &[f64]) -> Vec<(usize, f64)> {
        self.y_axes
            .iter()
            .zip(y)
            .map(|(axis, &v)| locate_on_axis(axis, v))
            .collect()
    }

    /// Corner flat indices and multilinear weights for `y`.
    pub fn corners(&self, y: &[f64]) -> Vec<(usize, f64)> {
        corner_weights(&self.y_axes, y)
    }

    /// Multilinear interpolation of the invariant density's nodal values.
    pub fn density_at_nodes(&self, y: &[f64]) -> DVector<f64> {
        let corners = self.corners(y);
        let nt = self.grid.n_total();
        let mut out = DVector::zeros(nt);
        for (idx, w) in corners {
            out += self.entries[idx].p.comp(0) * w;
        }
        out
    }

    /// Hull of the parameter box.
    pub fn y_bounds(&self) -> (Vec<f64>, Vec<f64>) {
        (
            self.y_axes.iter().map(|a| a[0]).collect(),
            self.y_axes.iter().map(|a| *a.last().unwrap()).collect(),
        )
    }
}

fn locate_on_axis(axis: &[f64], v: f64) -> (usize, f64) {
    let n = axis.len();
    if n == 1 || v <= axis[0] {
        return (0, 0.0);
    }
    if v >= axis[n - 1] {
        return (n.saturating_sub(2), 1.0);
    }
    let mut lo = 0usize;
    let mut hi = n - 1;
    while hi - lo > 1 {
        let mid = (lo + hi) / 2;
        if axis[mid] <= v {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let t = (v - axis[lo]) / (axis[lo + 1] - axis[lo]);
    (lo, t)
}

fn corner_weights(axes: &[Vec<f64>], y: &[f64]) -> Vec<(usize, f64)> {
    let q = axes.len();
    let locs: Vec<(usize, f64)> = axes
        .iter()
        .zip(y)
        .map(|(axis, &v)| locate_on_axis(axis, v))
        .collect();
    let mut out = Vec::with_capacity(1 << q);
    for mask in 0..(1usize << q) {
        let mut idx = 0usize;
        let mut w = 1.0;
        for d in 0..q {
            let len = axes[d].len();
            let (base, t) = locs[d];
            let hi = (mask >> d) & 1 == 1;
            let i = if hi { (base + 1).min(len - 1) } else { base };
            w *= if hi { t } else { 1.0 - t };
            idx = idx * len + i;
        }
        if w != 0.0 {
            out.push((idx, w));
        }
    }
    out
}

/// Smooth bump supported on the unit ball (unnormalized), argument `|u|²`.
pub fn bump(r2: f64) -> f64 {
    if r2 < 1.0 {
        (-1.0 / (1.0 - r2)).exp()
    } else {
        0.0
    }
}

/// Mollified invariant density `p_m(x, y)`: parameter-convolution of the
/// table's densities against the bump kernel of radius `1/m`, computed by
/// quadrature over the table's y-grid with discrete kernel normalization
/// (positivity and unit x-mass are inherited exactly).
pub struct DensityMollifier<'a> {
    table: &'a CellTable,
    pub m: f64,
}

impl<'a> DensityMollifier<'a> {
    pub fn new(table: &'a CellTable, m: f64) -> Result<DensityMollifier<'a>> {
        if m <= 0.0 {
            return Err(HomError::usage("mollification index must be positive"));
        }
        Ok(DensityMollifier { table, m })
    }

    /// Kernel weights over table nodes for a query `y`; errors when the
    /// support ball exits the table hull.
    fn weights(&self, y: &[f64]) -> Result<Vec<(usize, f64)>> {
        let (lo, hi) = self.table.y_bounds();
        let r = 1.0 / self.m;
        for d in 0..self.table.q_dim {
            if y[d] - r < lo[d] - 1e-12 || y[d] + r > hi[d] + 1e-12 {
                return Err(HomError::Domain(format!(
                    "mollifier support [{:.4}, {:.4}] exceeds the y-table box [{:.4}, {:.4}] on axis {d}",
                    y[d] - r,
                    y[d] + r,
                    lo[d],
                    hi[d]
                )));
            }
        }
        let mut weights = Vec::new();
        kernel_weights(&self.table.y_axes, y, self.m, &mut weights);
        if weights.is_empty() {
            return Err(HomError::Domain(
                "mollifier support contains no table nodes; refine the y-grid or lower m".into(),
            ));
        }
        Ok(weights)
    }

    /// Full nodal field of `p_m(·, y)`.
    pub fn field(&self, y: &[f64]) -> Result<DVector<f64>> {
        let weights = self.weights(y)?;
        let nt = self.table.grid.n_total();
        let mut out = DVector::zeros(nt);
        for (idx, w) in weights {
            out += self.table.entries[idx].p.comp(0) * w;
        }
        Ok(out)
    }

    /// `‖p_m(·, y) − p(·, y)‖₂` with `p(·, y)` interpolated in the table.
    pub fn l2_gap(&self, y: &[f64]) -> Result<f64> {
        let pm = self.field(y)?;
        let p = self.table.density_at_nodes(y);
        let d = &pm - &p;
        Ok((quadrature_of(self.table.grid, &d.component_mul(&d))).sqrt())
    }

    /// Max of `l2_gap` over admissible table nodes with `|y| ≤ y_bound`.
    pub fn sup_gap(&self, y_bound: f64) -> Result<f64> {
        let mut sup: f64 = 0.0;
        let mut seen = false;
        let q = self.table.q_dim;
        let counts: Vec<usize> = self.table.y_axes.iter().map(|a| a.len()).collect();
        let total: usize = counts.iter().product();
        for idx in 0..total {
            let mut rem = idx;
            let mut y = vec![0.0; q];
            for d in (0..q).rev() {
                y[d] = self.table.y_axes[d][rem % counts[d]];
                rem /= counts[d];
            }
            let norm: f64 = y.iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm > y_bound {
                continue;
            }
            if let Ok(g) = self.l2_gap(&y) {
                sup = sup.max(g);
                seen = true;
            }
        }
        if !seen {
            return Err(HomError::Domain(
                "no admissible y nodes for the mollification gap; widen the y-table".into(),
            ));
        }
        Ok(sup)
    }
}

/// Normalized bump-kernel weights over the tensor grid nodes (shared by the
/// density mollifier and its hot-loop evaluator). Empty result means the
/// kernel is narrower than the local grid spacing.
fn kernel_weights(axes: &[Vec<f64>], y: &[f64], m: f64, out: &mut Vec<(usize, f64)>) {
    out.clear();
    let q = axes.len();
    let counts: Vec<usize> = axes.iter().map(|a| a.len()).collect();
    let total: usize = counts.iter().product();
    let mut total_w = 0.0;
    for idx in 0..total {
        let mut rem = idx;
        let mut r2 = 0.0;
        let mut trap = 1.0;
        for d in (0..q).rev() {
            let i = rem % counts[d];
            rem /= counts[d];
            let ax = &axes[d];
            let u = (y[d] - ax[i]) * m;
            r2 += u * u;
            let wl = if i == 0 { 0.0 } else { ax[i] - ax[i - 1] };
            let wr = if i + 1 == ax.len() { 0.0 } else { ax[i + 1] - ax[i] };
            trap *= 0.5 * (wl + wr);
        }
        let k = bump(r2);
        if k > 0.0 {
            let w = trap * k;
            total_w += w;
            out.push((idx, w));
        }
    }
    if total_w > 0.0 {
        for w in out.iter_mut() {
            w.1 /= total_w;
        }
    } else {
        out.clear();
    }
}

/// Cached trigonometric spectra of every cell field for fast pointwise
/// evaluation at arbitrary `(x, y)`; the workhorse of the Monte Carlo layer.
pub struct CellEvaluator {
    pub p_dim: usize,
    pub q_dim: usize,
    n: usize,
    table_axes: Vec<Vec<f64>>,
    /// per y-node, per component (fixed layout, see `CompCounts`)
    fast: Option<Vec<Vec<RealSpectrum1D>>>,
    generic: Option<Vec<Vec<Spectrum>>>,
    counts: CompCounts,
    basis_len: usize,
}

#[derive(Debug, Clone, Copy)]
struct CompCounts {
    bhat: usize,
    ehat: usize,
    dxb: usize,
    dxe: usize,
    dyb: usize,
    dye: usize,
    dyyb: usize,
    dyye: usize,
    dxyb: usize,
    dxye: usize,
}

impl CompCounts {
    fn new(p: usize, q: usize) -> CompCounts {
        CompCounts {
            bhat: p,
            ehat: q,
            dxb: p * p,
            dxe: q * p,
            dyb: p * q,
            dye: q * q,
            dyyb: p * q * q,
            dyye: q * q * q,
            dxyb: p * p * q,
            dxye: q * p * q,
        }
    }

    fn total(&self) -> usize {
        1 + self.bhat
            + self.ehat
            + self.dxb
            + self.dxe
            + self.dyb
            + self.dye
            + self.dyyb
            + self.dyye
            + self.dxyb
            + self.dxye
    }
}

/// Pointwise cell-field values at one `(x, y)` query. Layouts match
/// [`CellSolution`].
#[derive(Debug, Clone, Default)]
pub struct CellValues {
    pub p: f64,
    pub bhat: Vec<f64>,
    pub ehat: Vec<f64>,
    pub dx_bhat: Vec<f64>,
    pub dx_ehat: Vec<f64>,
    pub dy_bhat: Vec<f64>,
    pub dy_ehat: Vec<f64>,
    pub dyy_bhat: Vec<f64>,
    pub dyy_ehat: Vec<f64>,
    pub dxy_bhat: Vec<f64>,
    pub dxy_ehat: Vec<f64>,
}

impl CellValues {
    pub fn sized(p: usize, q: usize) -> CellValues {
        CellValues {
            p: 0.0,
            bhat: vec![0.0; p],
            ehat: vec![0.0; q],
            dx_bhat: vec![0.0; p * p],
            dx_ehat: vec![0.0; q * p],
            dy_bhat: vec![0.0; p * q],
            dy_ehat: vec![0.0; q * q],
            dyy_bhat: vec![0.0; p * q * q],
            dyy_ehat: vec![0.0; q * q * q],
            dxy_bhat: vec![0.0; p * p * q],
            dxy_ehat: vec![0.0; q * p * q],
        }
    }
}

impl CellEvaluator {
    pub fn new(table: &CellTable) -> CellEvaluator {
        let p = table.p_dim;
        let q = table.q_dim;
        let counts = CompCounts::new(p, q);
        let collect_comps = |sol: &CellSolution| -> Vec<DVector<f64>> {
            let mut v: Vec<DVector<f64>> = Vec::with_capacity(counts.total());
            v.push(sol.p.comp(0).clone());
            v.extend(sol.bhat.comps().iter().cloned());
            v.extend(sol.ehat.comps().iter().cloned());
            v.extend(sol.grad_x_bhat.comps().iter().cloned());
            v.extend(sol.grad_x_ehat.comps().iter().cloned());
            v.extend(sol.dy_bhat.comps().iter().cloned());
            v.extend(sol.dy_ehat.comps().iter().cloned());
            v.extend(sol.dyy_bhat.comps().iter().cloned());
            v.extend(sol.dyy_ehat.comps().iter().cloned());
            v.extend(sol.dxy_bhat.comps().iter().cloned());
            v.extend(sol.dxy_ehat.comps().iter().cloned());
            v
        };
        if p == 1 {
            let fast: Vec<Vec<RealSpectrum1D>> = table
                .entries
                .iter()
                .map(|sol| {
                    collect_comps(sol)
                        .iter()
                        .map(|v| {
                            let mut s = RealSpectrum1D::from_values(v);
                            s.truncate(1e-13);
                            s
                        })
                        .collect()
                })
                .collect();
            let basis_len = fast
                .iter()
                .flat_map(|specs| specs.iter().map(|s| s.required_len()))
                .max()
                .unwrap_or(1);
            CellEvaluator {
                p_dim: p,
                q_dim: q,
                n: table.grid.points_per_axis(),
                table_axes: table.y_axes.clone(),
                fast: Some(fast),
                generic: None,
                counts,
                basis_len,
            }
        } else {
            let generic = table
                .entries
                .iter()
                .map(|sol| {
                    collect_comps(sol)
                        .iter()
                        .map(|v| Spectrum::from_values(table.grid, v))
                        .collect()
                })
                .collect();
            CellEvaluator {
                p_dim: p,
                q_dim: q,
                n: table.grid.points_per_axis(),
                table_axes: table.y_axes.clone(),
                fast: None,
                generic: Some(generic),
                counts,
                basis_len: 0,
            }
        }
    }

    pub fn points_per_axis(&self) -> usize {
        self.n
    }

    /// Harmonic count a shared [`TrigBasis1D`] must provide.
    pub fn basis_len(&self) -> usize {
        self.basis_len
    }

    /// Build a basis adequate for every cached spectrum (P = 1 fast path).
    #[inline]
    pub fn basis_at(&self, x0: f64) -> TrigBasis1D {
        TrigBasis1D::with_len(x0, self.basis_len)
    }

    pub fn axis_nodes(&self) -> &[Vec<f64>] {
        &self.table_axes
    }

    /// Evaluate all cell fields at `(x, y)` into a reusable buffer.
    pub fn eval_into(&self, x: &[f64], y: &[f64], out: &mut CellValues) {
        if self.fast.is_some() {
            let basis = self.basis_at(x[0]);
            self.eval_with_basis(&basis, y, out);
        } else {
            self.eval_generic(x, y, out);
        }
    }

    /// Fast-path evaluation with a caller-provided basis (must cover
    /// `basis_len()` harmonics).
    pub fn eval_with_basis(&self, basis: &TrigBasis1D, y: &[f64], out: &mut CellValues) {
        let corners = corner_weights(&self.table_axes, y);
        let c = &self.counts;
        let total = c.total();
        let mut vals = [0.0f64; 64];
        debug_assert!(total <= 64);
        let fast = self.fast.as_ref().expect("1D fast path");
        for &(node, w) in &corners {
            let specs = &fast[node];
            for (k, s) in specs.iter().enumerate() {
                vals[k] += w * s.eval(basis);
            }
        }
        self.scatter(&vals, out);
    }

    fn eval_generic(&self, x: &[f64], y: &[f64], out: &mut CellValues) {
        let corners = corner_weights(&self.table_axes, y);
        let c = &self.counts;
        let total = c.total();
        let mut vals = [0.0f64; 64];
        debug_assert!(total <= 64);
        {
            let generic = self.generic.as_ref().unwrap();
            for &(node, w) in &corners {
                let specs = &generic[node];
                for (k, s) in specs.iter().enumerate() {
                    vals[k] += w * s.eval(x);
                }
            }
        }
        self.scatter(&vals, out);
    }

    fn scatter(&self, vals: &[f64], out: &mut CellValues) {
        let c = &self.counts;
        let mut off = 0usize;
        let take = |dst: &mut [f64], len: usize, off: &mut usize, vals: &[f64]| {
            dst[..len].copy_from_slice(&vals[*off..*off + len]);
            *off += len;
        };
        out.p = vals[0];
        off += 1;
        take(&mut out.bhat, c.bhat, &mut off, vals);
        take(&mut out.ehat, c.ehat, &mut off, vals);
        take(&mut out.dx_bhat, c.dxb, &mut off, vals);
        take(&mut out.dx_ehat, c.dxe, &mut off, vals);
        take(&mut out.dy_bhat, c.dyb, &mut off, vals);
        take(&mut out.dy_ehat, c.dye, &mut off, vals);
        take(&mut out.dyy_bhat, c.dyyb, &mut off, vals);
        take(&mut out.dyy_ehat, c.dyye, &mut off, vals);
        take(&mut out.dxy_bhat, c.dxyb, &mut off, vals);
        take(&mut out.dxy_ehat, c.dxye, &mut off, vals);
    }

    /// Density only.
    pub fn density_at(&self, x: &[f64], y: &[f64]) -> f64 {
        let corners = corner_weights(&self.table_axes, y);
        let mut acc = 0.0;
        if let Some(fast) = &self.fast {
            let basis = self.basis_at(x[0]);
            for &(node, w) in &corners {
                acc += w * fast[node][0].eval(&basis);
            }
        } else {
            let generic = self.generic.as_ref().unwrap();
            for &(node, w) in &corners {
                acc += w * generic[node][0].eval(x);
            }
        }
        acc
    }
}

/// Hot-loop evaluator for the mollified density `p_m(x, y)`.
pub struct MollifiedDensityEvaluator {
    fast: Option<Vec<RealSpectrum1D>>,
    generic: Option<Vec<Spectrum>>,
    axes: Vec<Vec<f64>>,
    pub m: f64,
    basis_len: usize,
}

impl MollifiedDensityEvaluator {
    pub fn new(table: &CellTable, m: f64) -> Result<MollifiedDensityEvaluator> {
        if m <= 0.0 {
            return Err(HomError::usage("mollification index must be positive"));
        }
        if table.p_dim == 1 {
            let fast: Vec<RealSpectrum1D> = table
                .entries
                .iter()
                .map(|s| {
                    let mut sp = RealSpectrum1D::from_values(s.p.comp(0));
                    sp.truncate(1e-13);
                    sp
                })
                .collect();
            let basis_len = fast.iter().map(|s| s.required_len()).max().unwrap_or(1);
            Ok(MollifiedDensityEvaluator {
                fast: Some(fast),
                generic: None,
                axes: table.y_axes.clone(),
                m,
                basis_len,
            })
        } else {
            Ok(MollifiedDensityEvaluator {
                fast: None,
                generic: Some(
                    table
                        .entries
                        .iter()
                        .map(|s| Spectrum::from_values(table.grid, s.p.comp(0)))
                        .collect(),
                ),
                axes: table.y_axes.clone(),
                m,
                basis_len: 0,
            })
        }
    }

    pub fn basis_len(&self) -> usize {
        self.basis_len
    }

    /// Kernel node weights for the query `y`. The hot path must not abort
    /// mid-path: a kernel narrower than the grid spacing falls back to the
    /// nearest node (still a positive density).
    pub fn node_weights(&self, y: &[f64], out: &mut Vec<(usize, f64)>) {
        kernel_weights(&self.axes, y, self.m, out);
        if out.is_empty() {
            let q = self.axes.len();
            let counts: Vec<usize> = self.axes.iter().map(|a| a.len()).collect();
            let total: usize = counts.iter().product();
            let mut best = (0usize, f64::INFINITY);
            for idx in 0..total {
                let mut rem = idx;
                let mut d2 = 0.0;
                for d in (0..q).rev() {
                    let i = rem % counts[d];
                    rem /= counts[d];
                    let diff = y[d] - self.axes[d][i];
                    d2 += diff * diff;
                }
                if d2 < best.1 {
                    best = (idx, d2);
                }
            }
            out.push((best.0, 1.0));
        }
    }

    /// `p_m(x, y)` with a prepared 1D basis and node weights.
    #[inline]
    pub fn eval_with_basis(&self, basis: &TrigBasis1D, weights: &[(usize, f64)]) -> f64 {
        let fast = self.fast.as_ref().expect("1D fast path");
        let mut acc = 0.0;
        for &(node, w) in weights {
            acc += w * fast[node].eval(basis);
        }
        acc
    }

    pub fn eval(&self, x: &[f64], y: &[f64]) -> f64 {
        let mut weights = Vec::new();
        self.node_weights(y, &mut weights);
        if let Some(fast) = &self.fast {
            let basis = TrigBasis1D::with_len(x[0], self.basis_len);
            weights.iter().map(|&(j, w)| w * fast[j].eval(&basis)).sum()
        } else {
            let generic = self.generic.as_ref().unwrap();
            weights.iter().map(|&(j, w)| w * generic[j].eval(x)).sum()
        }
    }
}

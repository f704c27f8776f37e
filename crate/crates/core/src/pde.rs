//! Backward-in-time solves of the oscillatory, limit and regularized
//! quasilinear systems by a Fourier pseudo-spectral method of lines.
//!
//! All systems share one integrator: reverse time `τ = T − t`, differentiate
//! in space spectrally (FFT), step explicitly with an embedded
//! Dormand–Prince 5(4) pair under a PI step controller and a hard stability
//! cap derived from the coefficient bounds and the grid's extreme
//! wavenumber. When coefficients depend on the solution, the assembled
//! right-hand side is dealiased with the 2/3 rule. The terminal condition is
//! stored verbatim, so `θ(T, ·)` equals it exactly at the nodes.
//!
//! The oscillatory system is solved on the unit torus for `ε = 1/k` with
//! integer `k`: the rescaled coefficients `x ↦ g(kx)` are then 1-periodic,
//! which together with a 1-periodic terminal condition makes the reduction
//! exact. A fine grid with at least `16 k` nodes per axis is required.

use crate::coeffs::CoefficientSpec;
use crate::error::{HomError, Result};
use crate::homog::HomogenizedTable;
use crate::torus::{PeriodicField, RealSpectrum1D, Spectrum, TorusGrid, TrigBasis1D};
use nalgebra::DVector;
use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};
use serde::Serialize;
use std::f64::consts::PI;
use std::sync::Arc;

#[derive(Debug, Clone, Copy)]
pub struct PdeOptions {
    pub rtol: f64,
    pub atol: f64,
    pub dt_init: f64,
    pub dt_min: f64,
    pub dealias: bool,
    /// Safety factor applied to the explicit stability cap.
    pub stab_safety: f64,
    /// Bypass adaptivity with a fixed step (self-convergence studies).
    pub fixed_dt: Option<f64>,
}

impl Default for PdeOptions {
    fn default() -> Self {
        PdeOptions {
            rtol: 1e-8,
            atol: 1e-10,
            dt_init: 1e-6,
            dt_min: 1e-8,
            dealias: true,
            stab_safety: 0.8,
            fixed_dt: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, serde::Deserialize)]
pub enum SystemKind {
    Limit,
    /// Oscillatory system at ε = 1/k.
    Epsilon { k: u32 },
    /// Regularized system at mollification index n.
    Regularized { n: u32 },
}

#[derive(Debug, Clone, Serialize, serde::Deserialize)]
pub struct SolveStats {
    pub accepted: u64,
    pub rejected: u64,
    pub min_dt: f64,
    pub sup_abs: f64,
    pub sup_grad: f64,
    pub sup_hess: f64,
}

/// Space-time solution θ(t, x) on a periodic grid with spectral gradients
/// (and Hessians when requested). Immutable once solved.
#[derive(Clone)]
pub struct DecouplingField {
    pub grid: TorusGrid,
    pub q_dim: usize,
    pub t_end: f64,
    /// ascending snapshot times; the last one is `t_end`
    pub times: Vec<f64>,
    /// per snapshot: component-major nodal values, length Q·M^P
    pub values: Vec<DVector<f64>>,
    /// per snapshot: [q][axis] blocks, length Q·P·M^P
    pub grads: Vec<DVector<f64>>,
    /// per snapshot: [q][i][j] blocks, length Q·P·P·M^P (regularized solves)
    pub hessians: Option<Vec<DVector<f64>>>,
    pub system: SystemKind,
    pub stats: SolveStats,
    /// sup |θ| per snapshot
    pub sup_per_slice: Vec<f64>,
    /// sup |∇²θ| per snapshot (when recorded)
    pub hess_sup_per_slice: Vec<f64>,
}

impl DecouplingField {
    pub fn n_times(&self) -> usize {
        self.times.len()
    }

    pub fn snapshot_index(&self, t: f64) -> Result<usize> {
        self.times
            .iter()
            .position(|&s| (s - t).abs() <= 1e-10 * (1.0 + t.abs()))
            .ok_or_else(|| HomError::usage(format!("time {t} is not a stored snapshot")))
    }

    /// Component values at a snapshot (length M^P slice).
    pub fn comp_values(&self, ti: usize, l: usize) -> &[f64] {
        let nt = self.grid.n_total();
        &self.values[ti].as_slice()[l * nt..(l + 1) * nt]
    }

    pub fn sup_abs(&self) -> f64 {
        self.stats.sup_abs
    }
}

/// Spectral workspace: FFT plans and scratch for one grid.
pub struct SpectralOps {
    grid: TorusGrid,
    fwd: Arc<dyn Fft<f64>>,
    inv: Arc<dyn Fft<f64>>,
    buf: Vec<Complex<f64>>,
    line: Vec<Complex<f64>>,
}

impl SpectralOps {
    pub fn new(grid: TorusGrid) -> SpectralOps {
        assert!(grid.p_dim() <= 2, "spectral solves support P in {{1, 2}}");
        let mut planner = FftPlanner::new();
        let n = grid.points_per_axis();
        SpectralOps {
            grid,
            fwd: planner.plan_fft_forward(n),
            inv: planner.plan_fft_inverse(n),
            buf: vec![Complex::new(0.0, 0.0); grid.n_total()],
            line: vec![Complex::new(0.0, 0.0); n],
        }
    }

    fn axis_fft(&mut self, forward: bool, axis_is_slow: bool) {
        // For P <= 2 we operate on axis 0 (slow) or axis 1 (fast).
        let n = self.grid.points_per_axis();
        let nt = self.grid.n_total();
        let blocks = nt / n;
        let plan = if forward { &self.fwd } else { &self.inv };
        if axis_is_slow {
            for b in 0..blocks {
                for k in 0..n {
                    self.line[k] = self.buf[k * blocks + b];
                }
                plan.process(&mut self.line);
                let scale = if forward { 1.0 / n as f64 } else { 1.0 };
                for k in 0..n {
                    self.buf[k * blocks + b] = self.line[k] * scale;
                }
            }
        } else {
            for b in 0..blocks {
                let row = &mut self.buf[b * n..(b + 1) * n];
                self.line.copy_from_slice(row);
                plan.process(&mut self.line);
                let scale = if forward { 1.0 / n as f64 } else { 1.0 };
                for (dst, src) in row.iter_mut().zip(&self.line) {
                    *dst = src * scale;
                }
            }
        }
    }

    /// Load real values, transform to spectral coefficients in `buf`.
    fn forward(&mut self, vals: &[f64]) {
        for (b, &v) in self.buf.iter_mut().zip(vals) {
            *b = Complex::new(v, 0.0);
        }
        self.axis_fft(true, true);
        if self.grid.p_dim() == 2 {
            self.axis_fft(true, false);
        }
    }

    /// Inverse transform `buf` into real values (spectrum is consumed).
    fn inverse_into(&mut self, out: &mut [f64]) {
        self.axis_fft(false, true);
        if self.grid.p_dim() == 2 {
            self.axis_fft(false, false);
        }
        for (o, b) in out.iter_mut().zip(&self.buf) {
            *o = b.re;
        }
    }

    fn wavenumber(n: usize, k: usize) -> f64 {
        let kk = if k <= n / 2 { k as isize } else { k as isize - n as isize };
        2.0 * PI * kk as f64
    }

    /// Multiply the spectrum by the symbol of ∂/∂x_axis (odd derivative:
    /// Nyquist mode zeroed).
    fn apply_d1(&mut self, axis: usize) {
        let n = self.grid.points_per_axis();
        let p = self.grid.p_dim();
        let nt = self.grid.n_total();
        for idx in 0..nt {
            let k = if p == 1 {
                idx
            } else if axis == 0 {
                idx / n
            } else {
                idx % n
            };
            let factor = if k == n / 2 {
                Complex::new(0.0, 0.0)
            } else {
                Complex::new(0.0, Self::wavenumber(n, k))
            };
            self.buf[idx] *= factor;
        }
    }

    /// Multiply by the symbol of ∂²/∂x_axis² (Nyquist gets −(πN)²).
    fn apply_d2(&mut self, axis: usize) {
        let n = self.grid.points_per_axis();
        let p = self.grid.p_dim();
        let nt = self.grid.n_total();
        for idx in 0..nt {
            let k = if p == 1 {
                idx
            } else if axis == 0 {
                idx / n
            } else {
                idx % n
            };
            let w = Self::wavenumber(n, k);
            self.buf[idx] *= -w * w;
        }
    }

    /// 2/3-rule dealias filter applied in place to a real array.
    pub fn dealias(&mut self, vals: &mut [f64]) {
        self.forward(vals);
        let n = self.grid.points_per_axis();
        let p = self.grid.p_dim();
        let cutoff = n as isize / 3;
        let nt = self.grid.n_total();
        for idx in 0..nt {
            let keep = if p == 1 {
                mode_abs(n, idx) <= cutoff
            } else {
                mode_abs(n, idx / n) <= cutoff && mode_abs(n, idx % n) <= cutoff
            };
            if !keep {
                self.buf[idx] = Complex::new(0.0, 0.0);
            }
        }
        self.inverse_into(vals);
    }

    /// Gradient (per axis) of one component.
    pub fn gradient(&mut self, vals: &[f64], out: &mut [Vec<f64>]) {
        let p = self.grid.p_dim();
        for axis in 0..p {
            self.forward(vals);
            self.apply_d1(axis);
            self.inverse_into(&mut out[axis]);
        }
    }

    /// Second derivative ∂²/∂x_i∂x_j of one component.
    pub fn second_derivative(&mut self, vals: &[f64], i: usize, j: usize, out: &mut [f64]) {
        self.forward(vals);
        if i == j {
            self.apply_d2(i);
        } else {
            self.apply_d1(i);
            self.apply_d1(j);
        }
        self.inverse_into(out);
    }
}

fn mode_abs(n: usize, k: usize) -> isize {
    let kk = if k <= n / 2 { k as isize } else { k as isize - n as isize };
    kk.abs()
}

/// Compute spectral gradient and Hessian blocks of a component-major state.
pub fn field_gradient_and_hessian(
    grid: TorusGrid,
    q_dim: usize,
    state: &[f64],
    want_hessian: bool,
) -> (Vec<f64>, Option<Vec<f64>>) {
    let mut ops = SpectralOps::new(grid);
    let p = grid.p_dim();
    let nt = grid.n_total();
    let mut grad = vec![0.0; q_dim * p * nt];
    let mut hess = if want_hessian {
        Some(vec![0.0; q_dim * p * p * nt])
    } else {
        None
    };
    let mut axis_bufs: Vec<Vec<f64>> = vec![vec![0.0; nt]; p];
    let mut d2 = vec![0.0; nt];
    for l in 0..q_dim {
        let comp = &state[l * nt..(l + 1) * nt];
        ops.gradient(comp, &mut axis_bufs);
        for a in 0..p {
            grad[(l * p + a) * nt..(l * p + a + 1) * nt].copy_from_slice(&axis_bufs[a]);
        }
        if let Some(h) = hess.as_mut() {
            for i in 0..p {
                for j in 0..p {
                    ops.second_derivative(comp, i, j, &mut d2);
                    let off = ((l * p + i) * p + j) * nt;
                    h[off..off + nt].copy_from_slice(&d2);
                }
            }
        }
    }
    (grad, hess)
}

// Dormand-Prince 5(4) tableau
const DP_C: [f64; 7] = [0.0, 1.0 / 5.0, 3.0 / 10.0, 4.0 / 5.0, 8.0 / 9.0, 1.0, 1.0];
const DP_A: [[f64; 6]; 7] = [
    [0.0, 0.0, 0.0, 0.0, 0.0, 0.0],
    [1.0 / 5.0, 0.0, 0.0, 0.0, 0.0, 0.0],
    [3.0 / 40.0, 9.0 / 40.0, 0.0, 0.0, 0.0, 0.0],
    [44.0 / 45.0, -56.0 / 15.0, 32.0 / 9.0, 0.0, 0.0, 0.0],
    [
        19372.0 / 6561.0,
        -25360.0 / 2187.0,
        64448.0 / 6561.0,
        -212.0 / 729.0,
        0.0,
        0.0,
    ],
    [
        9017.0 / 3168.0,
        -355.0 / 33.0,
        46732.0 / 5247.0,
        49.0 / 176.0,
        -5103.0 / 18656.0,
        0.0,
    ],
    [
        35.0 / 384.0,
        0.0,
        500.0 / 1113.0,
        125.0 / 192.0,
        -2187.0 / 6784.0,
        11.0 / 84.0,
    ],
];
const DP_B4: [f64; 7] = [
    5179.0 / 57600.0,
    0.0,
    7571.0 / 16695.0,
    393.0 / 640.0,
    -92097.0 / 339200.0,
    187.0 / 2100.0,
    1.0 / 40.0,
];

struct Integration {
    snapshots: Vec<DVector<f64>>,
    accepted: u64,
    rejected: u64,
    min_dt: f64,
}

/// Integrate dy/dτ = rhs(τ, y) from τ=0 over ascending `tau_out` (first
/// entry may be 0), storing the state at every output time.
fn integrate(
    rhs: &mut dyn FnMut(f64, &DVector<f64>, &mut DVector<f64>),
    y0: DVector<f64>,
    tau_out: &[f64],
    dt_cap: f64,
    opts: &PdeOptions,
) -> Result<Integration> {
    let n = y0.len();
    let mut k: Vec<DVector<f64>> = (0..7).map(|_| DVector::zeros(n)).collect();
    let mut y = y0;
    let mut ytmp = DVector::zeros(n);
    let mut yerr = DVector::zeros(n);
    let mut tau = 0.0f64;
    let mut snapshots = Vec::with_capacity(tau_out.len());
    let mut out_iter = tau_out.iter().peekable();
    while let Some(&&t) = out_iter.peek() {
        if t <= 1e-14 {
            snapshots.push(y.clone());
            out_iter.next();
        } else {
            break;
        }
    }
    let tau_max = *tau_out.last().unwrap();
    let mut dt = opts
        .fixed_dt
        .unwrap_or_else(|| opts.dt_init.min(dt_cap))
        .min(dt_cap)
        .max(opts.dt_min);
    let mut accepted = 0u64;
    let mut rejected = 0u64;
    let mut min_dt = f64::INFINITY;
    rhs(0.0, &y, &mut k[0]);
    while tau < tau_max - 1e-14 {
        let next_out = **out_iter.peek().expect("pending output time");
        let mut step = dt.min(dt_cap).min(tau_max - tau);
        let hit_output = tau + step >= next_out - 1e-14;
        if hit_output {
            step = next_out - tau;
        }
        if step < opts.dt_min && !hit_output {
            // tiny boundary-hitting steps are fine; controller underflow is not
            return Err(HomError::Solver(format!(
                "step size underflow (dt = {step:.3e} < dt_min = {:.3e}) at tau = {tau:.6}; the system appears too stiff for the configured limits",
                opts.dt_min
            )));
        }
        for s in 1..7 {
            ytmp.copy_from(&y);
            for (j, kj) in k.iter().enumerate().take(s) {
                let a = DP_A[s][j];
                if a != 0.0 {
                    ytmp.axpy(step * a, kj, 1.0);
                }
            }
            let (head, tail) = k.split_at_mut(s);
            let _ = head;
            rhs(tau + DP_C[s] * step, &ytmp, &mut tail[0]);
        }
        // 5th-order solution is stage 7's argument (FSAL): ytmp holds it
        // error = y5 - y4
        yerr.copy_from(&ytmp);
        for (j, kj) in k.iter().enumerate() {
            let b4 = DP_B4[j];
            if b4 != 0.0 {
                yerr.axpy(-step * b4, kj, 1.0);
            }
        }
        yerr -= &y;
        let mut err_norm = 0.0f64;
        for i in 0..n {
            let sc = opts.atol + opts.rtol * y[i].abs().max(ytmp[i].abs());
            err_norm = err_norm.max((yerr[i] / sc).abs());
        }
        if !err_norm.is_finite() {
            return Err(HomError::Solver(format!(
                "non-finite state during time integration at tau = {tau:.6}"
            )));
        }
        let accept = opts.fixed_dt.is_some() || err_norm <= 1.0;
        if accept {
            tau += step;
            y.copy_from(&ytmp);
            // FSAL: k7 is f at the accepted state; k[6] is overwritten next step
            k.swap(0, 6);
            accepted += 1;
            min_dt = min_dt.min(step);
            if hit_output {
                snapshots.push(y.clone());
                out_iter.next();
            }
        } else {
            // k[0] = f(tau, y) is still valid for the retried smaller step
            rejected += 1;
        }
        if opts.fixed_dt.is_none() {
            let factor = if err_norm <= 1e-30 {
                5.0
            } else {
                (0.9 * err_norm.powf(-0.2)).clamp(0.2, 5.0)
            };
            dt = (dt * factor).min(dt_cap).max(opts.dt_min * 0.5);
        }
        if accepted + rejected > 100_000_000 {
            return Err(HomError::Solver("time integration exceeded the step budget".into()));
        }
    }
    // flush any outputs exactly at tau_max
    while out_iter.peek().is_some() {
        snapshots.push(y.clone());
        out_iter.next();
    }
    Ok(Integration {
        snapshots,
        accepted,
        rejected,
        min_dt: if min_dt.is_finite() { min_dt } else { 0.0 },
    })
}

fn wavenumber_max(grid: TorusGrid) -> f64 {
    PI * grid.points_per_axis() as f64
}

#[allow(clippy::too_many_arguments)]
fn finish_field(
    grid: TorusGrid,
    q_dim: usize,
    t_end: f64,
    times: Vec<f64>,
    snapshots: Vec<DVector<f64>>,
    system: SystemKind,
    want_hessian: bool,
    integ: &Integration,
) -> Result<DecouplingField> {
    let mut values = Vec::with_capacity(snapshots.len());
    let mut grads = Vec::with_capacity(snapshots.len());
    let mut hessians = if want_hessian { Some(Vec::new()) } else { None };
    let mut sup_per_slice = Vec::with_capacity(snapshots.len());
    let mut hess_sup_per_slice = Vec::new();
    let mut sup_abs = 0.0f64;
    let mut sup_grad = 0.0f64;
    let mut sup_hess = 0.0f64;
    for snap in snapshots {
        if snap.iter().any(|v| !v.is_finite()) {
            return Err(HomError::Solver("non-finite snapshot".into()));
        }
        let (g, h) = field_gradient_and_hessian(grid, q_dim, snap.as_slice(), want_hessian);
        let s_abs = snap.amax();
        sup_abs = sup_abs.max(s_abs);
        sup_per_slice.push(s_abs);
        sup_grad = sup_grad.max(g.iter().fold(0.0f64, |m, v| m.max(v.abs())));
        if let Some(hv) = h {
            let hs = hv.iter().fold(0.0f64, |m, v| m.max(v.abs()));
            sup_hess = sup_hess.max(hs);
            hess_sup_per_slice.push(hs);
            hessians.as_mut().unwrap().push(DVector::from_vec(hv));
        }
        grads.push(DVector::from_vec(g));
        values.push(snap);
    }
    Ok(DecouplingField {
        grid,
        q_dim,
        t_end,
        times,
        values,
        grads,
        hessians,
        system,
        stats: SolveStats {
            accepted: integ.accepted,
            rejected: integ.rejected,
            min_dt: integ.min_dt,
            sup_abs,
            sup_grad,
            sup_hess,
        },
        sup_per_slice,
        hess_sup_per_slice,
    })
}

fn normalize_times(t_end: f64, requested: &[f64]) -> Result<Vec<f64>> {
    let mut times: Vec<f64> = requested.to_vec();
    times.push(t_end);
    times.push(0.0);
    times.sort_by(|a, b| a.partial_cmp(b).unwrap());
    times.dedup_by(|a, b| (*a - *b).abs() < 1e-12);
    if times[0] < 0.0 || *times.last().unwrap() > t_end + 1e-12 {
        return Err(HomError::usage("snapshot times must lie in [0, T]"));
    }
    Ok(times)
}

/// Shared driver: integrate the reversed-time system and collect snapshots.
fn run_backward_solve(
    grid: TorusGrid,
    q_dim: usize,
    terminal: &PeriodicField,
    t_end: f64,
    requested_times: &[f64],
    dt_cap: f64,
    opts: &PdeOptions,
    system: SystemKind,
    want_hessian: bool,
    rhs: &mut dyn FnMut(f64, &DVector<f64>, &mut DVector<f64>),
) -> Result<DecouplingField> {
    let nt = grid.n_total();
    if terminal.n_comp() != q_dim || terminal.grid != grid {
        return Err(HomError::usage("terminal condition does not match the grid"));
    }
    let times = normalize_times(t_end, requested_times)?;
    // reversed-time outputs, ascending in tau
    let tau_out: Vec<f64> = times.iter().rev().map(|&t| t_end - t).collect();
    let mut y0 = DVector::zeros(q_dim * nt);
    for l in 0..q_dim {
        y0.rows_mut(l * nt, nt).copy_from(terminal.comp(l));
    }
    let integ = integrate(rhs, y0, &tau_out, dt_cap, opts)?;
    // snapshots arrive in ascending tau = descending t; reverse to ascending t
    let snapshots: Vec<DVector<f64>> = integ.snapshots.iter().rev().cloned().collect();
    finish_field(
        grid, q_dim, t_end, times, snapshots, system, want_hessian, &integ,
    )
}

/// Solve the effective (limit) system driven by a homogenized table.
pub fn solve_limit_system(
    table: &HomogenizedTable,
    terminal: &PeriodicField,
    t_end: f64,
    grid: TorusGrid,
    snapshot_times: &[f64],
    opts: &PdeOptions,
) -> Result<DecouplingField> {
    let q = table.q_dim;
    let p = table.p_dim;
    if grid.p_dim() != p {
        return Err(HomError::usage("grid dimension does not match the table"));
    }
    let nt = grid.n_total();
    let kmax = wavenumber_max(grid);
    let dt_cap = opts.stab_safety * 2.8
        / (0.5 * table.max_abs_albar() * p as f64 * p as f64 * kmax * kmax
            + table.max_abs_ubar() * p as f64 * kmax
            + 1.0);
    let mut ops = SpectralOps::new(grid);
    let mut grad = vec![vec![0.0; nt]; q * p];
    let mut hess = vec![vec![0.0; nt]; q * p * p];
    let mut scratch = vec![0.0; nt];
    let mut alpha = vec![0.0; p * p];
    let mut ub = vec![0.0; p];
    let mut vb = vec![0.0; q];
    let mut yv = vec![0.0; q];
    let mut zv = vec![0.0; q * p];
    let dealias = opts.dealias;
    let mut rhs = move |_tau: f64, state: &DVector<f64>, out: &mut DVector<f64>| {
        for l in 0..q {
            let comp = &state.as_slice()[l * nt..(l + 1) * nt];
            let mut axes: Vec<Vec<f64>> = (0..p).map(|a| std::mem::take(&mut grad[l * p + a])).collect();
            ops.gradient(comp, &mut axes);
            for (a, v) in axes.into_iter().enumerate() {
                grad[l * p + a] = v;
            }
            for i in 0..p {
                for j in i..p {
                    ops.second_derivative(comp, i, j, &mut scratch);
                    hess[(l * p + i) * p + j].copy_from_slice(&scratch);
                    if i != j {
                        let tmp = hess[(l * p + i) * p + j].clone();
                        hess[(l * p + j) * p + i] = tmp;
                    }
                }
            }
        }
        for idx in 0..nt {
            for l in 0..q {
                yv[l] = state[l * nt + idx];
            }
            for l in 0..q {
                for a in 0..p {
                    zv[l * p + a] = grad[l * p + a][idx];
                }
            }
            table.alpha_bar_into(&yv, &mut alpha);
            table.u_v_bar_into(&yv, &zv, &mut ub, &mut vb);
            for l in 0..q {
                let mut acc = vb[l];
                for i in 0..p {
                    acc += ub[i] * grad[l * p + i][idx];
                    for j in 0..p {
                        acc += 0.5 * alpha[i * p + j] * hess[(l * p + i) * p + j][idx];
                    }
                }
                out[l * nt + idx] = acc;
            }
        }
        if dealias {
            for l in 0..q {
                let mut slice = out.as_slice()[l * nt..(l + 1) * nt].to_vec();
                ops.dealias(&mut slice);
                out.rows_mut(l * nt, nt).copy_from_slice(&slice);
            }
        }
    };
    run_backward_solve(
        grid,
        q,
        terminal,
        t_end,
        snapshot_times,
        dt_cap,
        opts,
        SystemKind::Limit,
        false,
        &mut rhs,
    )
}

/// Solve the oscillatory system at ε = 1/k on the unit torus.
pub fn solve_epsilon_system(
    spec: &CoefficientSpec,
    k: u32,
    terminal: &PeriodicField,
    t_end: f64,
    grid: TorusGrid,
    snapshot_times: &[f64],
    opts: &PdeOptions,
) -> Result<DecouplingField> {
    if k == 0 {
        return Err(HomError::usage("epsilon must be 1/k with k >= 1"));
    }
    let p = spec.p_dim;
    let q = spec.q_dim;
    if grid.p_dim() != p {
        return Err(HomError::usage("grid dimension does not match the spec"));
    }
    let m = grid.points_per_axis();
    if m < 16 * k as usize {
        return Err(HomError::Resolution(format!(
            "grid with {m} nodes per axis cannot resolve eps = 1/{k}; need at least {}",
            16 * k
        )));
    }
    let nt = grid.n_total();
    let kf = k as f64;
    // fast-variable coordinates at the nodes
    let xbar: Vec<Vec<f64>> = (0..nt)
        .map(|i| grid.node(i).iter().map(|&x| (kf * x).fract()).collect())
        .collect();
    let progs = spec.compiled();
    // hoist coefficient samples that depend on x only
    let hoist = |prog: &crate::expr::Program, dep_y: bool, dep_z: bool| -> Option<Vec<f64>> {
        if dep_y || dep_z {
            None
        } else {
            Some((0..nt).map(|i| prog.eval(&xbar[i], &[], &[])).collect())
        }
    };
    let a_static: Vec<Option<Vec<f64>>> = (0..p * p)
        .map(|ij| {
            let dep = spec.sigma.iter().any(|e| e.depends_on_y());
            if dep {
                None
            } else {
                Some(
                    (0..nt)
                        .map(|i| {
                            let mut acc = 0.0;
                            let (r, c) = (ij / p, ij % p);
                            for l in 0..p {
                                acc += progs.sigma[r * p + l].eval(&xbar[i], &[], &[])
                                    * progs.sigma[c * p + l].eval(&xbar[i], &[], &[]);
                            }
                            acc
                        })
                        .collect(),
                )
            }
        })
        .collect();
    let b_static: Vec<Option<Vec<f64>>> = (0..p)
        .map(|i| hoist(&progs.b[i], spec.b[i].depends_on_y(), false))
        .collect();
    let e_static: Vec<Option<Vec<f64>>> = (0..q)
        .map(|j| hoist(&progs.e[j], spec.e[j].depends_on_y(), false))
        .collect();
    let c_static: Vec<Option<Vec<f64>>> = (0..p)
        .map(|i| hoist(&progs.c[i], spec.c[i].depends_on_y(), spec.c[i].depends_on_z()))
        .collect();
    let f_static: Vec<Option<Vec<f64>>> = (0..q)
        .map(|j| hoist(&progs.f[j], spec.f[j].depends_on_y(), spec.f[j].depends_on_z()))
        .collect();

    let lam_big = spec.constants.big_lambda;
    let kmax = wavenumber_max(grid);
    // stability cap from the uniform coefficient bounds; |z| is not uniformly
    // bounded so its growth factor uses the terminal scale plus headroom
    let zscale = 1.0 + terminal.comps().iter().map(|c| c.amax()).fold(0.0, f64::max) * kmax;
    let amax = lam_big * lam_big * p as f64;
    let driftmax = kf * lam_big + lam_big * (1.0 + zscale);
    let dt_cap = opts.stab_safety * 2.8
        / (0.5 * amax * p as f64 * p as f64 * kmax * kmax + driftmax * p as f64 * kmax + kf * lam_big);

    let quasilinear = progs.generator_depends_on_y
        || spec.c.iter().any(|e| e.depends_on_y() || e.depends_on_z())
        || spec.e.iter().any(|e| e.depends_on_y())
        || spec.f.iter().any(|e| e.depends_on_y() || e.depends_on_z());
    let dealias = opts.dealias && quasilinear;

    let mut ops = SpectralOps::new(grid);
    let mut grad = vec![vec![0.0; nt]; q * p];
    let mut hess = vec![vec![0.0; nt]; q * p * p];
    let mut scratch = vec![0.0; nt];
    let mut yv = vec![0.0; q];
    let mut zv = vec![0.0; q * p];
    let mut rhs = move |_tau: f64, state: &DVector<f64>, out: &mut DVector<f64>| {
        for l in 0..q {
            let comp = &state.as_slice()[l * nt..(l + 1) * nt];
            let mut axes: Vec<Vec<f64>> = (0..p).map(|a| std::mem::take(&mut grad[l * p + a])).collect();
            ops.gradient(comp, &mut axes);
            for (a, v) in axes.into_iter().enumerate() {
                grad[l * p + a] = v;
            }
            for i in 0..p {
                for j in i..p {
                    ops.second_derivative(comp, i, j, &mut scratch);
                    hess[(l * p + i) * p + j].copy_from_slice(&scratch);
                    if i != j {
                        let tmp = hess[(l * p + i) * p + j].clone();
                        hess[(l * p + j) * p + i] = tmp;
                    }
                }
            }
        }
        for idx in 0..nt {
            let xb = &xbar[idx];
            for l in 0..q {
                yv[l] = state[l * nt + idx];
            }
            for l in 0..q {
                for a in 0..p {
                    zv[l * p + a] = grad[l * p + a][idx];
                }
            }
            // a at (x̄, y)
            let mut a_val = [0.0f64; 4];
            for ij in 0..p * p {
                a_val[ij] = match &a_static[ij] {
                    Some(v) => v[idx],
                    None => {
                        let (r, c) = (ij / p, ij % p);
                        let mut acc = 0.0;
                        for l2 in 0..p {
                            acc += progs.sigma[r * p + l2].eval(xb, &yv, &[])
                                * progs.sigma[c * p + l2].eval(xb, &yv, &[]);
                        }
                        acc
                    }
                };
            }
            let coeff = |stat: &Option<Vec<f64>>, prog: &crate::expr::Program| -> f64 {
                match stat {
                    Some(v) => v[idx],
                    None => prog.eval(xb, &yv, &zv),
                }
            };
            for l in 0..q {
                let mut acc = kf * coeff(&e_static[l], &progs.e[l])
                    + coeff(&f_static[l], &progs.f[l]);
                for i in 0..p {
                    let drift = kf * coeff(&b_static[i], &progs.b[i])
                        + coeff(&c_static[i], &progs.c[i]);
                    acc += drift * grad[l * p + i][idx];
                    for j in 0..p {
                        acc += 0.5 * a_val[i * p + j] * hess[(l * p + i) * p + j][idx];
                    }
                }
                out[l * nt + idx] = acc;
            }
        }
        if dealias {
            for l in 0..q {
                let mut slice = out.as_slice()[l * nt..(l + 1) * nt].to_vec();
                ops.dealias(&mut slice);
                out.rows_mut(l * nt, nt).copy_from_slice(&slice);
            }
        }
    };
    run_backward_solve(
        grid,
        q,
        terminal,
        t_end,
        snapshot_times,
        dt_cap,
        opts,
        SystemKind::Epsilon { k },
        false,
        &mut rhs,
    )
}

/// Regularized terminal condition and driver: `H_n` by discrete convolution
/// on the spatial grid, `v̄_n` by kernel quadrature of table queries over the
/// (y, z) box, retabulated on the axes trimmed by the kernel radius `1/n`.
pub struct MollifiedData {
    pub n: u32,
    pub h_n: PeriodicField,
    /// table with `v̄` replaced by `v̄_n` (`ū`, `ᾱ` unchanged)
    pub table_n: HomogenizedTable,
    /// sup |H_n - H| on the grid
    pub h_gap: f64,
}

/// Mollify the terminal condition and driver at index `n`.
pub fn mollify_terminal_and_driver(
    table: &HomogenizedTable,
    terminal: &PeriodicField,
    n: u32,
    kernel_pts: usize,
) -> Result<MollifiedData> {
    if n == 0 {
        return Err(HomError::usage("mollification index must be >= 1"));
    }
    let radius = 1.0 / n as f64;
    let grid = terminal.grid;
    let p = grid.p_dim();
    let q = terminal.n_comp();
    let nt = grid.n_total();

    // H_n: normalized discrete convolution on the torus grid
    let mut h_comps = Vec::with_capacity(q);
    for l in 0..q {
        let src = terminal.comp(l);
        let mut dst = DVector::zeros(nt);
        for i in 0..nt {
            let xi = grid.node(i);
            let mut acc = 0.0;
            let mut wsum = 0.0;
            for jdx in 0..nt {
                let xj = grid.node(jdx);
                let mut r2 = 0.0;
                for d in 0..p {
                    let mut dd = (xi[d] - xj[d]).abs();
                    if dd > 0.5 {
                        dd = 1.0 - dd;
                    }
                    let u = dd * n as f64;
                    r2 += u * u;
                }
                let w = crate::cell::bump(r2);
                if w > 0.0 {
                    acc += w * src[jdx];
                    wsum += w;
                }
            }
            dst[i] = if wsum > 0.0 { acc / wsum } else { src[i] };
        }
        h_comps.push(dst);
    }
    let h_n = PeriodicField::new(grid, h_comps)?;
    let mut h_gap = 0.0f64;
    for l in 0..q {
        h_gap = h_gap.max((h_n.comp(l) - terminal.comp(l)).amax());
    }

    // v̄_n is retabulated on the box shrunk by the kernel radius, so every
    // kernel sample stays inside the source table (no clamping)
    let trim = |axis: &Vec<f64>| -> Result<Vec<f64>> {
        let lo = axis[0] + radius;
        let hi = *axis.last().unwrap() - radius;
        if lo > hi + 1e-12 {
            return Err(HomError::Domain(format!(
                "mollifier radius {radius} exceeds the table half-extent [{}, {}]",
                axis[0],
                axis.last().unwrap()
            )));
        }
        let len = axis.len();
        if len == 1 || hi - lo < 1e-12 {
            return Ok(vec![0.5 * (lo + hi)]);
        }
        Ok((0..len)
            .map(|i| lo + (hi - lo) * i as f64 / (len - 1) as f64)
            .collect())
    };
    let y_axes: Vec<Vec<f64>> = table.y_axes.iter().map(trim).collect::<Result<_>>()?;
    let z_axes: Vec<Vec<f64>> = table.z_axes.iter().map(trim).collect::<Result<_>>()?;
    let dims = table.q_dim + table.q_dim * table.p_dim;
    let g = kernel_pts.max(3) | 1; // odd, symmetric stencil
    // tensor midpointless symmetric grid over [-radius, radius]^dims
    let offs: Vec<f64> = (0..g)
        .map(|i| -radius + 2.0 * radius * i as f64 / (g - 1) as f64)
        .collect();
    let total: usize = offs.len().pow(dims as u32);
    let mut kernel: Vec<(Vec<f64>, f64)> = Vec::new();
    let mut wsum = 0.0;
    for idx in 0..total {
        let mut rem = idx;
        let mut u = vec![0.0; dims];
        let mut r2 = 0.0;
        for d in (0..dims).rev() {
            u[d] = offs[rem % g];
            rem /= g;
            let s = u[d] * n as f64;
            r2 += s * s;
        }
        let w = crate::cell::bump(r2);
        if w > 0.0 {
            wsum += w;
            kernel.push((u, w));
        }
    }
    for kw in &mut kernel {
        kw.1 /= wsum;
    }
    let qd = table.q_dim;
    let pd = table.p_dim;
    let table_n = HomogenizedTable::from_fn(
        pd,
        qd,
        y_axes,
        z_axes,
        |y, z| table.u_bar(y, z).as_slice().to_vec(),
        |y, z| {
            let mut acc = vec![0.0; qd];
            let mut yq = vec![0.0; qd];
            let mut zq = vec![0.0; qd * pd];
            for (u, w) in &kernel {
                for d in 0..qd {
                    yq[d] = y[d] - u[d];
                }
                for d in 0..qd * pd {
                    zq[d] = z[d] - u[qd + d];
                }
                let v = table.v_bar(&yq, &zq);
                for l in 0..qd {
                    acc[l] += w * v[l];
                }
            }
            acc
        },
        |y| table.alpha_bar(y).as_slice().to_vec(),
    )?;
    Ok(MollifiedData {
        n,
        h_n,
        table_n,
        h_gap,
    })
}

impl MollifiedData {
    /// No-op mollification: `H_n = H`, `v̄_n = v̄` (test oracles).
    pub fn identity(table: &HomogenizedTable, terminal: &PeriodicField) -> Result<MollifiedData> {
        let table_n = HomogenizedTable::from_fn(
            table.p_dim,
            table.q_dim,
            table.y_axes.clone(),
            table.z_axes.clone(),
            |y, z| table.u_bar(y, z).as_slice().to_vec(),
            |y, z| table.v_bar(y, z).as_slice().to_vec(),
            |y| table.alpha_bar(y).as_slice().to_vec(),
        )?;
        Ok(MollifiedData {
            n: u32::MAX,
            h_n: terminal.clone(),
            table_n,
            h_gap: 0.0,
        })
    }
}

/// Solve the regularized system (mollified driver and terminal condition),
/// recording spectral Hessians and their sup-norms per slice.
pub fn solve_regularized_system(
    mollified: &MollifiedData,
    t_end: f64,
    grid: TorusGrid,
    snapshot_times: &[f64],
    opts: &PdeOptions,
) -> Result<DecouplingField> {
    let table = &mollified.table_n;
    let q = table.q_dim;
    let p = table.p_dim;
    let nt = grid.n_total();
    let kmax = wavenumber_max(grid);
    let dt_cap = opts.stab_safety * 2.8
        / (0.5 * table.max_abs_albar() * p as f64 * p as f64 * kmax * kmax
            + table.max_abs_ubar() * p as f64 * kmax
            + 1.0);
    let mut ops = SpectralOps::new(grid);
    let mut grad = vec![vec![0.0; nt]; q * p];
    let mut hess = vec![vec![0.0; nt]; q * p * p];
    let mut scratch = vec![0.0; nt];
    let mut alpha = vec![0.0; p * p];
    let mut ub = vec![0.0; p];
    let mut vb = vec![0.0; q];
    let mut yv = vec![0.0; q];
    let mut zv = vec![0.0; q * p];
    let dealias = opts.dealias;
    let mut rhs = move |_tau: f64, state: &DVector<f64>, out: &mut DVector<f64>| {
        for l in 0..q {
            let comp = &state.as_slice()[l * nt..(l + 1) * nt];
            let mut axes: Vec<Vec<f64>> = (0..p).map(|a| std::mem::take(&mut grad[l * p + a])).collect();
            ops.gradient(comp, &mut axes);
            for (a, v) in axes.into_iter().enumerate() {
                grad[l * p + a] = v;
            }
            for i in 0..p {
                for j in i..p {
                    ops.second_derivative(comp, i, j, &mut scratch);
                    hess[(l * p + i) * p + j].copy_from_slice(&scratch);
                    if i != j {
                        let tmp = hess[(l * p + i) * p + j].clone();
                        hess[(l * p + j) * p + i] = tmp;
                    }
                }
            }
        }
        for idx in 0..nt {
            for l in 0..q {
                yv[l] = state[l * nt + idx];
            }
            for l in 0..q {
                for a in 0..p {
                    zv[l * p + a] = grad[l * p + a][idx];
                }
            }
            table.alpha_bar_into(&yv, &mut alpha);
            table.u_v_bar_into(&yv, &zv, &mut ub, &mut vb);
            for l in 0..q {
                let mut acc = vb[l];
                for i in 0..p {
                    acc += ub[i] * grad[l * p + i][idx];
                    for j in 0..p {
                        acc += 0.5 * alpha[i * p + j] * hess[(l * p + i) * p + j][idx];
                    }
                }
                out[l * nt + idx] = acc;
            }
        }
        if dealias {
            for l in 0..q {
                let mut slice = out.as_slice()[l * nt..(l + 1) * nt].to_vec();
                ops.dealias(&mut slice);
                out.rows_mut(l * nt, nt).copy_from_slice(&slice);
            }
        }
    };
    let sys = SystemKind::Regularized {
        n: if mollified.n == u32::MAX { 0 } else { mollified.n },
    };
    run_backward_solve(
        grid,
        q,
        &mollified.h_n,
        t_end,
        snapshot_times,
        dt_cap,
        opts,
        sys,
        true,
        &mut rhs,
    )
}

#[derive(Debug, Clone, Serialize)]
pub struct MollificationIndex {
    pub n: u32,
    pub m: u32,
    /// sup over stored slices of |∇²ζ_n|
    pub hessian_sup: f64,
    /// density gap at the returned index
    pub density_gap: f64,
    /// the defining product at the returned index
    pub product: f64,
    pub threshold: f64,
    /// no candidate satisfied the inequality; largest candidate returned
    pub saturated: bool,
    /// parameter-ball radius used for the density-gap sup
    pub y_bound: f64,
}

/// Pick the mollification index `m(n)`: the smallest candidate `m ≥ n` with
/// `sup|∇²ζ_n| · sup_{|y| ≤ Ybound} ‖p_m(·,y) − p(·,y)‖₂ ≤ 1/n`. The ball
/// radius is the observed sup of the driving process plus the field bound,
/// each with 10% headroom. Returns the largest candidate with a warning flag
/// when none qualifies.
pub fn select_mollification_index(
    cell_table: &crate::cell::CellTable,
    zeta: &DecouplingField,
    n: u32,
    m_candidates: &[u32],
    observed_sup_y: f64,
) -> Result<MollificationIndex> {
    if m_candidates.is_empty() {
        return Err(HomError::usage("empty mollification candidate list"));
    }
    if zeta.hessians.is_none() {
        return Err(HomError::usage(
            "field has no recorded Hessian; solve the regularized system first",
        ));
    }
    let hess_sup = zeta.stats.sup_hess;
    let y_bound = 1.1 * observed_sup_y + 1.1 * zeta.stats.sup_abs;
    let threshold = 1.0 / n as f64;
    let mut cands: Vec<u32> = m_candidates.iter().copied().filter(|&m| m >= n).collect();
    cands.sort_unstable();
    if cands.is_empty() {
        cands = vec![*m_candidates.iter().max().unwrap()];
    }
    let mut last = None;
    for &m in &cands {
        let moll = crate::cell::DensityMollifier::new(cell_table, m as f64)?;
        let gap = moll.sup_gap(y_bound)?;
        let product = hess_sup * gap;
        last = Some((m, gap, product));
        if product <= threshold {
            return Ok(MollificationIndex {
                n,
                m,
                hessian_sup: hess_sup,
                density_gap: gap,
                product,
                threshold,
                saturated: false,
                y_bound,
            });
        }
    }
    let (m, gap, product) = last.unwrap();
    Ok(MollificationIndex {
        n,
        m,
        hessian_sup: hess_sup,
        density_gap: gap,
        product,
        threshold,
        saturated: true,
        y_bound,
    })
}

/// Fast interpolation of a decoupling field at arbitrary `(t, x)`: spectral
/// in space, linear between stored snapshots in time.
pub struct FieldEvaluator {
    pub times: Vec<f64>,
    pub p_dim: usize,
    pub q_dim: usize,
    n: usize,
    val_fast: Option<Vec<Vec<RealSpectrum1D>>>,
    grad_fast: Option<Vec<Vec<RealSpectrum1D>>>,
    val_gen: Option<Vec<Vec<Spectrum>>>,
    grad_gen: Option<Vec<Vec<Spectrum>>>,
    pub sup_abs: f64,
    basis_len: usize,
}

impl FieldEvaluator {
    pub fn new(field: &DecouplingField) -> FieldEvaluator {
        let grid = field.grid;
        let p = grid.p_dim();
        let q = field.q_dim;
        let nt = grid.n_total();
        if p == 1 {
            let trunc = |slice: &[f64]| {
                let mut s = RealSpectrum1D::from_values(&DVector::from_column_slice(slice));
                s.truncate(1e-13);
                s
            };
            let val_fast: Vec<Vec<RealSpectrum1D>> = field
                .values
                .iter()
                .map(|snap| {
                    (0..q)
                        .map(|l| trunc(&snap.as_slice()[l * nt..(l + 1) * nt]))
                        .collect()
                })
                .collect();
            let grad_fast: Vec<Vec<RealSpectrum1D>> = field
                .grads
                .iter()
                .map(|snap| {
                    (0..q * p)
                        .map(|c| trunc(&snap.as_slice()[c * nt..(c + 1) * nt]))
                        .collect()
                })
                .collect();
            let basis_len = val_fast
                .iter()
                .chain(grad_fast.iter())
                .flat_map(|specs| specs.iter().map(|s| s.required_len()))
                .max()
                .unwrap_or(1);
            FieldEvaluator {
                times: field.times.clone(),
                p_dim: p,
                q_dim: q,
                n: grid.points_per_axis(),
                val_fast: Some(val_fast),
                grad_fast: Some(grad_fast),
                val_gen: None,
                grad_gen: None,
                sup_abs: field.stats.sup_abs,
                basis_len,
            }
        } else {
            let val_gen = field
                .values
                .iter()
                .map(|snap| {
                    (0..q)
                        .map(|l| {
                            Spectrum::from_values(
                                grid,
                                &DVector::from_column_slice(&snap.as_slice()[l * nt..(l + 1) * nt]),
                            )
                        })
                        .collect()
                })
                .collect();
            let grad_gen = field
                .grads
                .iter()
                .map(|snap| {
                    (0..q * p)
                        .map(|c| {
                            Spectrum::from_values(
                                grid,
                                &DVector::from_column_slice(&snap.as_slice()[c * nt..(c + 1) * nt]),
                            )
                        })
                        .collect()
                })
                .collect();
            FieldEvaluator {
                times: field.times.clone(),
                p_dim: p,
                q_dim: q,
                n: grid.points_per_axis(),
                val_gen: Some(val_gen),
                grad_gen: Some(grad_gen),
                val_fast: None,
                grad_fast: None,
                sup_abs: field.stats.sup_abs,
                basis_len: 0,
            }
        }
    }

    pub fn points_per_axis(&self) -> usize {
        self.n
    }

    pub fn basis_len(&self) -> usize {
        self.basis_len
    }

    /// Bracketing snapshot index and linear weight for time `t` (clamped).
    #[inline]
    pub fn locate_time(&self, t: f64) -> (usize, f64) {
        let times = &self.times;
        let nt = times.len();
        if t <= times[0] {
            return (0, 0.0);
        }
        if t >= times[nt - 1] {
            return (nt - 2, 1.0);
        }
        let mut lo = 0;
        let mut hi = nt - 1;
        while hi - lo > 1 {
            let mid = (lo + hi) / 2;
            if times[mid] <= t {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        (lo, (t - times[lo]) / (times[lo + 1] - times[lo]))
    }

    /// θ and ∇ₓθ at `(t, x)` into caller buffers (`z_out` row-major Q×P).
    pub fn eval_into(&self, t: f64, x: &[f64], y_out: &mut [f64], z_out: &mut [f64]) {
        let (ti, w) = self.locate_time(t);
        let q = self.q_dim;
        let p = self.p_dim;
        if let (Some(vf), Some(gf)) = (&self.val_fast, &self.grad_fast) {
            let basis = TrigBasis1D::with_len(x[0], self.basis_len);
            for l in 0..q {
                let v0 = vf[ti][l].eval(&basis);
                let v1 = vf[ti + 1][l].eval(&basis);
                y_out[l] = (1.0 - w) * v0 + w * v1;
                let g0 = gf[ti][l].eval(&basis);
                let g1 = gf[ti + 1][l].eval(&basis);
                z_out[l] = (1.0 - w) * g0 + w * g1;
            }
        } else {
            let vg = self.val_gen.as_ref().unwrap();
            let gg = self.grad_gen.as_ref().unwrap();
            for l in 0..q {
                y_out[l] = (1.0 - w) * vg[ti][l].eval(x) + w * vg[ti + 1][l].eval(x);
                for a in 0..p {
                    z_out[l * p + a] =
                        (1.0 - w) * gg[ti][l * p + a].eval(x) + w * gg[ti + 1][l * p + a].eval(x);
                }
            }
        }
    }

    /// Value-only evaluation at a stored snapshot (no time blending).
    pub fn eval_values_at_snapshot(&self, ti: usize, x: &[f64], y_out: &mut [f64]) {
        if let Some(vf) = &self.val_fast {
            let basis = TrigBasis1D::with_len(x[0], self.basis_len);
            for l in 0..self.q_dim {
                y_out[l] = vf[ti][l].eval(&basis);
            }
        } else {
            let vg = self.val_gen.as_ref().unwrap();
            for l in 0..self.q_dim {
                y_out[l] = vg[ti][l].eval(x);
            }
        }
    }
}

/// Empirical temporal Hölder-1/2 quotient of ∇ₓθ on `[t0, T − eta]`,
/// reported without asserting an exponent.
pub fn grad_holder_quotient(field: &DecouplingField, eta: f64) -> f64 {
    let mut q = 0.0f64;
    for i in 0..field.times.len().saturating_sub(1) {
        let (t0, t1) = (field.times[i], field.times[i + 1]);
        if t1 > field.t_end - eta {
            break;
        }
        let diff = (&field.grads[i + 1] - &field.grads[i]).amax();
        q = q.max(diff / (t1 - t0).sqrt());
    }
    q
}

/// Sample a terminal condition from coefficient expressions onto a grid.
pub fn sample_terminal(spec: &CoefficientSpec, grid: TorusGrid) -> Result<PeriodicField> {
    PeriodicField::from_fn(grid, spec.q_dim, |x| {
        spec.eval_h(x).as_slice().to_vec()
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cell::{build_cell_table, CellOptions};
    use crate::homog::build_table;

    fn heat_table() -> HomogenizedTable {
        HomogenizedTable::from_fn(
            1,
            1,
            vec![vec![-4.0, 4.0]],
            vec![vec![-8.0, 8.0]],
            |_, _| vec![0.0],
            |_, _| vec![0.0],
            |_| vec![1.0],
        )
        .unwrap()
    }

    fn sine_terminal(grid: TorusGrid) -> PeriodicField {
        PeriodicField::from_fn(grid, 1, |x| vec![(2.0 * PI * x[0]).sin()]).unwrap()
    }

    #[test]
    fn heat_kernel_oracle() {
        let grid = TorusGrid::new(1, 64).unwrap();
        let table = heat_table();
        let h = sine_terminal(grid);
        let t_end = 0.1;
        let field = solve_limit_system(&table, &h, t_end, grid, &[0.0], &PdeOptions::default())
            .unwrap();
        let vals = field.comp_values(0, 0);
        let decay = (-2.0 * PI * PI * t_end).exp();
        let mut sup: f64 = 0.0;
        for (i, v) in vals.iter().enumerate() {
            let x = i as f64 / 64.0;
            sup = sup.max((v - decay * (2.0 * PI * x).sin()).abs());
        }
        assert!(sup < 1e-6, "sup error {sup}, amplitude {decay}");
        assert!((decay - 0.138911).abs() < 1e-6);
    }

    #[test]
    fn terminal_condition_exact() {
        let grid = TorusGrid::new(1, 32).unwrap();
        let table = heat_table();
        let h = sine_terminal(grid);
        let field =
            solve_limit_system(&table, &h, 0.05, grid, &[0.0, 0.02], &PdeOptions::default())
                .unwrap();
        let last = field.times.len() - 1;
        assert_eq!(field.times[last], 0.05);
        for i in 0..32 {
            assert_eq!(field.comp_values(last, 0)[i], h.comp(0)[i]);
        }
    }

    #[test]
    fn constants_are_equilibria() {
        let table = heat_table(); // v̄ ≡ 0
        let grid = TorusGrid::new(1, 16).unwrap();
        let h = PeriodicField::from_fn(grid, 1, |_| vec![0.7]).unwrap();
        let field =
            solve_limit_system(&table, &h, 0.1, grid, &[0.0, 0.05], &PdeOptions::default())
                .unwrap();
        for ti in 0..field.n_times() {
            for v in field.comp_values(ti, 0) {
                assert!((v - 0.7).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn epsilon_system_matches_limit_when_coefficients_are_slow() {
        // x-independent coefficients: the oscillatory and limit systems coincide
        use crate::coeffs::Constants;
        use crate::expr::Expr;
        let spec = CoefficientSpec::new(
            1,
            1,
            vec![Expr::parse("1").unwrap()],
            vec![Expr::zero()],
            vec![Expr::zero()],
            vec![Expr::parse("0.2*z").unwrap()],
            vec![Expr::parse("0.1*y").unwrap()],
            vec![Expr::parse("sin(2*pi*x)").unwrap()],
            Constants {
                k: 7.0,
                lambda: 1.0,
                big_lambda: 2.0,
                k_map: vec![(0.0, 1.0)],
            },
        )
        .unwrap();
        let table = HomogenizedTable::from_fn(
            1,
            1,
            vec![vec![-4.0, 4.0]],
            vec![vec![-16.0, 16.0]],
            |_, z| vec![0.2 * z[0]],
            |y, _| vec![0.1 * y[0]],
            |_| vec![1.0],
        )
        .unwrap();
        let opts = PdeOptions {
            rtol: 1e-10,
            atol: 1e-12,
            ..PdeOptions::default()
        };
        let t_end = 0.05;
        let grid_coarse = TorusGrid::new(1, 64).unwrap();
        let h = sine_terminal(grid_coarse);
        let limit = solve_limit_system(&table, &h, t_end, grid_coarse, &[0.0], &opts).unwrap();
        let eps = solve_epsilon_system(&spec, 4, &h, t_end, grid_coarse, &[0.0], &opts).unwrap();
        let d = (DVector::from_column_slice(limit.comp_values(0, 0))
            - DVector::from_column_slice(eps.comp_values(0, 0)))
        .amax();
        assert!(d <= 1e-8, "|theta_eps - theta| = {d}");
    }

    #[test]
    fn epsilon_system_under_resolution_refused() {
        let spec = CoefficientSpec::preset("harmonic-1d").unwrap();
        let grid = TorusGrid::new(1, 64).unwrap();
        let h = sine_terminal(grid);
        let r = solve_epsilon_system(&spec, 8, &h, 0.05, grid, &[0.0], &PdeOptions::default());
        assert!(matches!(r, Err(HomError::Resolution(_))));
    }

    #[test]
    fn gradient_and_hessian_spectral() {
        let grid = TorusGrid::new(1, 32).unwrap();
        let vals: Vec<f64> = (0..32).map(|i| (2.0 * PI * i as f64 / 32.0).sin()).collect();
        let (g, h) = field_gradient_and_hessian(grid, 1, &vals, true);
        for i in 0..32 {
            let x = i as f64 / 32.0;
            assert!((g[i] - 2.0 * PI * (2.0 * PI * x).cos()).abs() < 1e-10);
            assert!((h.as_ref().unwrap()[i] + 4.0 * PI * PI * (2.0 * PI * x).sin()).abs() < 1e-8);
        }
        let c = vec![1.5; 32];
        let (gc, _) = field_gradient_and_hessian(grid, 1, &c, false);
        assert!(gc.iter().all(|v| v.abs() < 1e-12));
    }

    #[test]
    fn mollified_terminal_properties() {
        let grid = TorusGrid::new(1, 64).unwrap();
        let table = heat_table();
        // constant H reproduced exactly
        let hc = PeriodicField::from_fn(grid, 1, |_| vec![2.5]).unwrap();
        let md = mollify_terminal_and_driver(&table, &hc, 8, 9).unwrap();
        assert!((md.h_n.comp(0).map(|v| (v - 2.5).abs())).max() < 1e-13);
        assert!(md.h_gap < 1e-13);

        // band-limited H: gap decays in n
        let hs = sine_terminal(grid);
        let mut gaps = Vec::new();
        for &n in &[4u32, 8, 16] {
            gaps.push(mollify_terminal_and_driver(&table, &hs, n, 9).unwrap().h_gap);
        }
        assert!(gaps[1] < gaps[0] && gaps[2] < gaps[1], "{gaps:?}");
        assert!(gaps[1] <= 0.5 * gaps[0] && gaps[2] <= 0.5 * gaps[1], "{gaps:?}");
    }

    #[test]
    fn mollified_driver_affine_exact_in_interior() {
        let table = HomogenizedTable::from_fn(
            1,
            1,
            vec![(0..17).map(|i| -2.0 + 0.25 * i as f64).collect()],
            vec![(0..17).map(|i| -2.0 + 0.25 * i as f64).collect()],
            |_, _| vec![0.0],
            |y, z| vec![0.3 * y[0] - 0.7 * z[0] + 0.2],
            |_| vec![1.0],
        )
        .unwrap();
        let grid = TorusGrid::new(1, 16).unwrap();
        let h = sine_terminal(grid);
        let md = mollify_terminal_and_driver(&table, &h, 4, 9).unwrap();
        for &(y, z) in &[(0.0, 0.0), (0.5, -1.0), (-1.2, 1.3)] {
            let v = md.table_n.v_bar(&[y], &[z])[0];
            let expect = 0.3 * y - 0.7 * z + 0.2;
            assert!((v - expect).abs() < 1e-12, "{v} vs {expect}");
        }
    }

    #[test]
    fn regularized_identity_matches_limit() {
        let grid = TorusGrid::new(1, 64).unwrap();
        let table = heat_table();
        let h = sine_terminal(grid);
        let opts = PdeOptions {
            rtol: 1e-10,
            atol: 1e-12,
            ..PdeOptions::default()
        };
        let limit = solve_limit_system(&table, &h, 0.05, grid, &[0.0], &opts).unwrap();
        let md = MollifiedData::identity(&table, &h).unwrap();
        let reg = solve_regularized_system(&md, 0.05, grid, &[0.0], &opts).unwrap();
        let d = (DVector::from_column_slice(limit.comp_values(0, 0))
            - DVector::from_column_slice(reg.comp_values(0, 0)))
        .amax();
        assert!(d < 1e-9, "zeta_n vs theta: {d}");
        assert!(reg.hessians.is_some());
    }

    #[test]
    fn regularized_sup_norm_monitor() {
        let spec = CoefficientSpec::preset("quasilinear-demo").unwrap();
        let g = TorusGrid::new(1, 32).unwrap();
        let ct = build_cell_table(&spec, &[-2.0], &[2.0], 9, g, &CellOptions::default()).unwrap();
        let table = build_table(&ct, &spec, -5.0, 5.0, 9).unwrap();
        let grid = TorusGrid::new(1, 64).unwrap();
        let h = sample_terminal(&spec, grid).unwrap();
        let t_end = 0.25;
        let md = mollify_terminal_and_driver(&table, &h, 4, 7).unwrap();
        let reg = solve_regularized_system(
            &md,
            t_end,
            grid,
            &[0.0, 0.05, 0.1, 0.2],
            &PdeOptions::default(),
        )
        .unwrap();
        let h_sup = md.h_n.comps().iter().map(|c| c.amax()).fold(0.0, f64::max);
        let v_sup = md.table_n.max_abs_vbar();
        for (ti, &t) in reg.times.iter().enumerate() {
            let bound = h_sup + (t_end - t) * v_sup + 1e-9;
            assert!(
                reg.sup_per_slice[ti] <= bound,
                "slice {ti}: sup {} > bound {bound}",
                reg.sup_per_slice[ti]
            );
        }
        assert!(!reg.hess_sup_per_slice.is_empty());
    }

    #[test]
    fn mollification_index_trivial_cases() {
        // y-independent density: gap = 0 so m(n) = n
        let spec = CoefficientSpec::preset("harmonic-1d").unwrap();
        let g = TorusGrid::new(1, 32).unwrap();
        let ct = build_cell_table(&spec, &[-2.0], &[2.0], 17, g, &CellOptions::default()).unwrap();
        let table = build_table(&ct, &spec, -3.0, 3.0, 5).unwrap();
        let grid = TorusGrid::new(1, 32).unwrap();
        let h = sample_terminal(&spec, grid).unwrap();
        let md = mollify_terminal_and_driver(&table, &h, 4, 7).unwrap();
        let reg =
            solve_regularized_system(&md, 0.1, grid, &[0.0], &PdeOptions::default()).unwrap();
        let sel =
            select_mollification_index(&ct, &reg, 4, &[2, 4, 8, 16, 32], 1.0).unwrap();
        assert_eq!(sel.m, 4);
        assert!(!sel.saturated);
        assert!(sel.density_gap < 1e-12);

        // zero-Hessian injection: product is 0 at every m so m(n) = n
        let mut reg0 = reg;
        reg0.stats.sup_hess = 0.0;
        let sel0 =
            select_mollification_index(&ct, &reg0, 8, &[2, 4, 8, 16, 32], 1.0).unwrap();
        assert_eq!(sel0.m, 8);
        assert!(!sel0.saturated);
    }

    #[test]
    fn self_convergence_fixed_step_order() {
        // temporal order measured by step-halving on a mode stiff enough to
        // keep truncation error above the roundoff floor
        let grid = TorusGrid::new(1, 32).unwrap();
        let table = heat_table();
        let h = PeriodicField::from_fn(grid, 1, |x| {
            vec![(2.0 * PI * x[0]).sin() + 0.5 * (10.0 * PI * x[0]).sin()]
        })
        .unwrap();
        let t_end = 0.02;
        let mut profiles = Vec::new();
        for &dt in &[4e-4, 2e-4, 1e-4] {
            let opts = PdeOptions {
                fixed_dt: Some(dt),
                dealias: false,
                ..PdeOptions::default()
            };
            let f = solve_limit_system(&table, &h, t_end, grid, &[0.0], &opts).unwrap();
            profiles.push(f.comp_values(0, 0).to_vec());
        }
        let sup = |a: &[f64], b: &[f64]| {
            a.iter()
                .zip(b)
                .map(|(x, y)| (x - y).abs())
                .fold(0.0f64, f64::max)
        };
        let d1 = sup(&profiles[0], &profiles[1]);
        let d2 = sup(&profiles[1], &profiles[2]);
        assert!(d1 > 1e-13 && d2 > 1e-15, "differences at roundoff: {d1}, {d2}");
        let slope = (d1 / d2).log2();
        assert!(slope >= 2.0, "temporal order {slope}, diffs {d1}, {d2}");
        // halving dt moves the profile by far less than any tolerance in play
        assert!(d2 <= 1e-6);
    }

    #[test]
    fn field_evaluator_consistency() {
        let grid = TorusGrid::new(1, 64).unwrap();
        let table = heat_table();
        let h = sine_terminal(grid);
        let field = solve_limit_system(
            &table,
            &h,
            0.1,
            grid,
            &[0.0, 0.025, 0.05, 0.075],
            &PdeOptions::default(),
        )
        .unwrap();
        let ev = FieldEvaluator::new(&field);
        let mut y = [0.0];
        let mut z = [0.0];
        // at a snapshot and a node: exact reproduction
        ev.eval_into(0.05, &[5.0 / 64.0], &mut y, &mut z);
        let ti = field.snapshot_index(0.05).unwrap();
        assert!((y[0] - field.comp_values(ti, 0)[5]).abs() < 1e-11);
        // analytic gradient: 2π e^{-2π² (T-t)} cos(2πx)
        let decay = (-2.0 * PI * PI * 0.05).exp();
        let expect_z = 2.0 * PI * decay * (2.0 * PI * 5.0 / 64.0).cos();
        assert!((z[0] - expect_z).abs() < 1e-5, "{} vs {expect_z}", z[0]);
    }

    #[test]
    fn holder_quotient_finite() {
        let grid = TorusGrid::new(1, 32).unwrap();
        let table = heat_table();
        let h = sine_terminal(grid);
        let field = solve_limit_system(
            &table,
            &h,
            0.1,
            grid,
            &[0.0, 0.02, 0.04, 0.06, 0.08],
            &PdeOptions::default(),
        )
        .unwrap();
        let q = grad_holder_quotient(&field, 0.01);
        assert!(q.is_finite() && q > 0.0);
    }

    #[test]
    fn p2_limit_smoke() {
        // 2D isotropic heat: sin(2πx1) decays at the same rate as in 1D
        let grid = TorusGrid::new(2, 16).unwrap();
        let table = HomogenizedTable::from_fn(
            2,
            1,
            vec![vec![-4.0, 4.0]],
            vec![vec![-8.0, 8.0], vec![-8.0, 8.0]],
            |_, _| vec![0.0, 0.0],
            |_, _| vec![0.0],
            |_| vec![1.0, 0.0, 0.0, 1.0],
        )
        .unwrap();
        let h = PeriodicField::from_fn(grid, 1, |x| vec![(2.0 * PI * x[0]).sin()]).unwrap();
        let t_end = 0.02;
        let field =
            solve_limit_system(&table, &h, t_end, grid, &[0.0], &PdeOptions::default()).unwrap();
        let decay = (-2.0 * PI * PI * t_end).exp();
        let mut sup: f64 = 0.0;
        for idx in 0..grid.n_total() {
            let x = grid.node(idx);
            sup = sup.max((field.comp_values(0, 0)[idx] - decay * (2.0 * PI * x[0]).sin()).abs());
        }
        assert!(sup < 1e-6, "2D heat error {sup}");
    }
}

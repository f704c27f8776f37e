//! Seeded Monte Carlo construction of the forward-backward system and every
//! derived process and statistic.
//!
//! The forward SDE is simulated through the decoupling field: along a path,
//! `Y_t = θ_ε(t, X_t)` and `Z_t = ∇ₓθ_ε(t, X_t)` (the field's spectral
//! gradient), so the Monte Carlo layer is an exact transport of the PDE
//! solve and homogenization error is never conflated with a backward-solver
//! error. Euler-Maruyama runs on a fine grid of `n_steps` steps; every
//! stochastic integral is a left-endpoint (Itô) sum on that grid, and only
//! every `store_every`-th node is kept in memory.
//!
//! Determinism and common random numbers: path `i` draws its increments from
//! an own counter-based stream (`seed`, stream `i`), so reruns are
//! bit-identical, ensembles at different ε share the same increments (the
//! time grid is ε-independent), and the auxiliary and limit simulations are
//! pathwise coupled to the driving ensemble. Operations that need fine-grid
//! integrals re-walk the paths from the same streams instead of storing
//! them.
//!
//! Derived processes (all layouts row-major):
//! `X̄ = X/ε mod 1`, `X̂ = X + ε b̂(X̄, Y)`, `Ŷ = Y − ε ê(X̄, Y)`,
//! `Ẑ = Z − ∇ₓê(X̄, Y)`; remainders `R`, `S` with their drift/noise parts;
//! the auxiliary SDE `U` with the density-ratio-weighted diffusion and its
//! companions `V = ζ_n(·, U)`, `W = ∇ₓζ_n(·, U)`, `Ŵ = W (I + ∇ₓb̂)(X̄, V)`;
//! the martingales `N`, `M` and quadratic variations `[N]`, `[M]`, `[M, N]`.

use crate::cell::{CellEvaluator, CellValues, MollifiedDensityEvaluator};
use crate::coeffs::CoefficientSpec;
use crate::error::{HomError, Result};
use crate::expr::Expr;
use crate::homog::{effective_integrands, HomogenizedTable};
use crate::pde::FieldEvaluator;
use crate::torus::TrigBasis1D;
use nalgebra::DVector;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::Serialize;

const MAXP: usize = 2;
const MAXQ: usize = 2;

/// Seeded simulation configuration. `eps_k` encodes ε = 1/k.
#[derive(Debug, Clone, Serialize)]
pub struct SimConfig {
    pub eps_k: u32,
    pub t0: f64,
    pub t_end: f64,
    pub x0: Vec<f64>,
    pub n_paths: usize,
    /// fine Euler grid on [t0, t_end]
    pub n_steps: usize,
    /// stored-node stride (must divide n_steps)
    pub store_every: usize,
    pub seed: u64,
    /// Draw Brownian increments on this finer base grid and sum them per
    /// Euler step, so runs with different `n_steps` but the same base share
    /// one Brownian path (step-refinement studies). `None` draws directly
    /// on the Euler grid.
    pub brownian_base_steps: Option<usize>,
}

impl SimConfig {
    pub fn validate(&self, p_dim: usize) -> Result<()> {
        if self.eps_k == 0 {
            return Err(HomError::usage("eps must be 1/k with k >= 1"));
        }
        if self.x0.len() != p_dim {
            return Err(HomError::usage("x0 dimension mismatch"));
        }
        if self.t0 > self.t_end {
            return Err(HomError::usage("t0 must not exceed the terminal time"));
        }
        if self.t0 < self.t_end {
            if self.n_steps < 16 {
                return Err(HomError::usage("n_steps must be at least 16"));
            }
            if self.store_every == 0 || self.n_steps % self.store_every != 0 {
                return Err(HomError::usage("store_every must divide n_steps"));
            }
        }
        if self.n_paths == 0 {
            return Err(HomError::usage("n_paths must be positive"));
        }
        if let Some(base) = self.brownian_base_steps {
            if base < self.n_steps || base % self.n_steps.max(1) != 0 {
                return Err(HomError::usage(
                    "brownian_base_steps must be a multiple of n_steps",
                ));
            }
        }
        Ok(())
    }

    pub fn eps(&self) -> f64 {
        1.0 / self.eps_k as f64
    }

    fn dt(&self) -> f64 {
        if self.n_steps == 0 {
            0.0
        } else {
            (self.t_end - self.t0) / self.n_steps as f64
        }
    }

    fn refine(&self) -> usize {
        match self.brownian_base_steps {
            Some(base) if self.n_steps > 0 => base / self.n_steps,
            _ => 1,
        }
    }
}

/// Mean and standard error of an ensemble estimate.
#[derive(Debug, Clone, Copy, Serialize, PartialEq)]
pub struct EnsembleStat {
    pub value: f64,
    pub se: f64,
}

pub fn mean_se(xs: &[f64]) -> EnsembleStat {
    let n = xs.len().max(1) as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return EnsembleStat { value: mean, se: 0.0 };
    }
    let var = xs.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
    EnsembleStat {
        value: mean,
        se: (var / n).sqrt(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum DecayVerdict {
    Pass,
    Abstain,
    Fail,
}

/// Monotone-decay verdict under the 2-combined-SE rule: every consecutive
/// pair must decrease beyond noise for a pass; an increase beyond noise is a
/// fail; anything inside the noise band abstains.
pub fn monotone_decay_verdict(points: &[EnsembleStat]) -> DecayVerdict {
    let mut verdict = DecayVerdict::Pass;
    for w in points.windows(2) {
        let combined = 2.0 * (w[0].se * w[0].se + w[1].se * w[1].se).sqrt();
        let diff = w[0].value - w[1].value;
        if diff > combined {
            continue;
        } else if diff < -combined {
            return DecayVerdict::Fail;
        } else {
            verdict = DecayVerdict::Abstain;
        }
    }
    verdict
}

/// One fine-grid step exposed to walk visitors. `dw` is the increment used
/// to advance from `t` (all zeros on the terminal node).
pub struct StepView<'a> {
    pub k: usize,
    pub t: f64,
    pub x: &'a [f64],
    pub xbar: &'a [f64],
    pub y: &'a [f64],
    pub z: &'a [f64],
    pub dw: &'a [f64],
    pub terminal: bool,
}

struct WalkCtx<'a> {
    cfg: &'a SimConfig,
    spec: &'a CoefficientSpec,
    theta_eps: &'a FieldEvaluator,
    p: usize,
    q: usize,
}

impl<'a> WalkCtx<'a> {
    fn new(
        cfg: &'a SimConfig,
        spec: &'a CoefficientSpec,
        theta_eps: &'a FieldEvaluator,
    ) -> Result<WalkCtx<'a>> {
        let p = spec.p_dim;
        let q = spec.q_dim;
        if p > MAXP || q > MAXQ {
            return Err(HomError::usage("Monte Carlo layer is exercised at P, Q <= 2"));
        }
        cfg.validate(p)?;
        if theta_eps.p_dim != p || theta_eps.q_dim != q {
            return Err(HomError::usage("field dimensions do not match the spec"));
        }
        Ok(WalkCtx {
            cfg,
            spec,
            theta_eps,
            p,
            q,
        })
    }

    /// Deterministically re-run path `path`, invoking the visitor at every
    /// fine node including the terminal one.
    fn run_path(&self, path: usize, on_step: &mut dyn FnMut(&StepView)) {
        let cfg = self.cfg;
        let (p, q) = (self.p, self.q);
        let dt = cfg.dt();
        let refine = cfg.refine();
        let sdt_base = (dt / refine as f64).sqrt();
        let keps = cfg.eps_k as f64;
        let progs = self.spec.compiled();
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(path as u64 + 1);
        let normal = StandardNormal;

        let mut x = [0.0f64; MAXP];
        x[..p].copy_from_slice(&cfg.x0);
        let mut xbar = [0.0f64; MAXP];
        let mut y = [0.0f64; MAXQ];
        let mut z = [0.0f64; MAXQ * MAXP];
        let mut dw = [0.0f64; MAXP];
        let mut sig = [0.0f64; MAXP * MAXP];
        for k in 0..=cfg.n_steps {
            let t = if k == cfg.n_steps {
                cfg.t_end
            } else {
                cfg.t0 + k as f64 * dt
            };
            for i in 0..p {
                xbar[i] = (x[i] * keps).rem_euclid(1.0);
            }
            self.theta_eps
                .eval_into(t, &x[..p], &mut y[..q], &mut z[..q * p]);
            let terminal = k == cfg.n_steps;
            if terminal {
                dw[..p].fill(0.0);
            } else {
                dw[..p].fill(0.0);
                // base-grid draws summed per step keep the Brownian path
                // fixed under step refinement
                for _ in 0..refine {
                    for d in dw.iter_mut().take(p) {
                        let g: f64 = normal.sample(&mut rng);
                        *d += sdt_base * g;
                    }
                }
            }
            on_step(&StepView {
                k,
                t,
                x: &x[..p],
                xbar: &xbar[..p],
                y: &y[..q],
                z: &z[..q * p],
                dw: &dw[..p],
                terminal,
            });
            if !terminal {
                // drift (ε⁻¹ b + c), diffusion σ, all at (x̄, y, z)
                for i in 0..p {
                    let b = progs.b[i].eval(&xbar[..p], &y[..q], &[]);
                    let c = progs.c[i].eval(&xbar[..p], &y[..q], &z[..q * p]);
                    let mut dx = (keps * b + c) * dt;
                    for j in 0..p {
                        sig[i * p + j] = progs.sigma[i * p + j].eval(&xbar[..p], &y[..q], &[]);
                        dx += sig[i * p + j] * dw[j];
                    }
                    x[i] += dx;
                }
            }
        }
    }
}

/// Per-path monitor accumulators filled during the forward simulation.
#[derive(Debug, Clone, Default)]
struct PathMonitors {
    sup_y: f64,
    sup_x2: f64,
    int_z2: f64,
    int_one_plus_y_z2: f64,
    y_t0: Vec<f64>,
    y_t_end: Vec<f64>,
}

/// Seeded path ensemble: stored nodes of (X, Y, Z) plus everything the
/// derived operations fill in.
pub struct PathEnsemble {
    pub cfg: SimConfig,
    pub p_dim: usize,
    pub q_dim: usize,
    /// stored times (length S+1)
    pub times: Vec<f64>,
    pub x: Vec<f64>,
    pub y: Vec<f64>,
    pub z: Vec<f64>,
    monitors: Vec<PathMonitors>,
    pub modified: Option<ModifiedPaths>,
    pub remainders: Option<RemainderPaths>,
    pub aux: Option<AuxPaths>,
    pub martingales: Option<MartingalePaths>,
}

pub struct ModifiedPaths {
    pub xhat: Vec<f64>,
    pub yhat: Vec<f64>,
    pub zhat: Vec<f64>,
}

#[derive(Debug, Clone, Serialize)]
pub struct RemainderReport {
    pub e_sup_r2: EnsembleStat,
    pub e_sup_s2: EnsembleStat,
}

pub struct RemainderPaths {
    /// stored R and S paths plus their drift/noise decompositions
    pub r: Vec<f64>,
    pub s: Vec<f64>,
    pub r_drift: Vec<f64>,
    pub r_noise: Vec<f64>,
    pub s_drift: Vec<f64>,
    pub s_noise: Vec<f64>,
    pub report: RemainderReport,
}

pub struct AuxPaths {
    pub n_reg: u32,
    pub u: Vec<f64>,
    pub v: Vec<f64>,
    pub w: Vec<f64>,
    pub what: Vec<f64>,
    /// per path: sup|U − X|², sup|V − Y|², ∫|Ŵ − Ẑ|² dt
    sup_u_x2: Vec<f64>,
    sup_v_y2: Vec<f64>,
    int_w_z2: Vec<f64>,
}

pub struct MartingalePaths {
    pub n_mart: Vec<f64>,
    pub m_mart: Vec<f64>,
    pub qv_n: Vec<f64>,
    pub qv_m: Vec<f64>,
    pub qv_mn: Vec<f64>,
    /// per path, terminal values
    qv_n_final: Vec<f64>,
    x_final: Vec<f64>,
    x2_final: Vec<f64>,
}

impl PathEnsemble {
    pub fn n_stored(&self) -> usize {
        self.times.len()
    }

    #[inline]
    pub fn at(&self, arr: &[f64], path: usize, node: usize, dim: usize, comp: usize) -> f64 {
        arr[(path * self.n_stored() + node) * dim + comp]
    }

    fn stored_dims(&self) -> (usize, usize) {
        (self.p_dim, self.q_dim)
    }
}

/// Euler-Maruyama simulation of the forward SDE through the decoupling
/// field; stores (X, Y, Z) on the coarse grid and the basic path monitors.
pub fn simulate_forward(
    cfg: &SimConfig,
    spec: &CoefficientSpec,
    theta_eps: &FieldEvaluator,
) -> Result<PathEnsemble> {
    let ctx = WalkCtx::new(cfg, spec, theta_eps)?;
    let (p, q) = (ctx.p, ctx.q);
    let s_nodes = if cfg.n_steps == 0 {
        1
    } else {
        cfg.n_steps / cfg.store_every + 1
    };
    let times: Vec<f64> = if cfg.n_steps == 0 {
        vec![cfg.t0]
    } else {
        (0..s_nodes)
            .map(|s| {
                if s + 1 == s_nodes {
                    cfg.t_end
                } else {
                    cfg.t0 + (s * cfg.store_every) as f64 * cfg.dt()
                }
            })
            .collect()
    };
    struct Out {
        x_row: Vec<f64>,
        y_row: Vec<f64>,
        z_row: Vec<f64>,
        mon: PathMonitors,
    }
    let dt = cfg.dt();
    let outs: Vec<Out> = (0..cfg.n_paths)
        .into_par_iter()
        .map(|path| {
            let mut out = Out {
                x_row: vec![0.0; s_nodes * p],
                y_row: vec![0.0; s_nodes * q],
                z_row: vec![0.0; s_nodes * q * p],
                mon: PathMonitors::default(),
            };
            ctx.run_path(path, &mut |sv| {
                if cfg.store_every == 0 || sv.k % cfg.store_every.max(1) == 0 {
                    let s = if cfg.n_steps == 0 { 0 } else { sv.k / cfg.store_every };
                    out.x_row[s * p..(s + 1) * p].copy_from_slice(sv.x);
                    out.y_row[s * q..(s + 1) * q].copy_from_slice(sv.y);
                    out.z_row[s * q * p..(s + 1) * q * p].copy_from_slice(sv.z);
                }
                let ynorm2: f64 = sv.y.iter().map(|v| v * v).sum();
                let xnorm2: f64 = sv.x.iter().map(|v| v * v).sum();
                let znorm2: f64 = sv.z.iter().map(|v| v * v).sum();
                out.mon.sup_y = out.mon.sup_y.max(ynorm2.sqrt());
                out.mon.sup_x2 = out.mon.sup_x2.max(xnorm2);
                if !sv.terminal {
                    out.mon.int_z2 += znorm2 * dt;
                    out.mon.int_one_plus_y_z2 += (1.0 + ynorm2.sqrt()) * znorm2 * dt;
                }
                if sv.k == 0 {
                    out.mon.y_t0 = sv.y.to_vec();
                }
                if sv.terminal {
                    out.mon.y_t_end = sv.y.to_vec();
                }
            });
            out
        })
        .collect();
    let mut ens = PathEnsemble {
        cfg: cfg.clone(),
        p_dim: p,
        q_dim: q,
        times,
        x: vec![0.0; cfg.n_paths * s_nodes * p],
        y: vec![0.0; cfg.n_paths * s_nodes * q],
        z: vec![0.0; cfg.n_paths * s_nodes * q * p],
        monitors: Vec::with_capacity(cfg.n_paths),
        modified: None,
        remainders: None,
        aux: None,
        martingales: None,
    };
    for (path, out) in outs.into_iter().enumerate() {
        ens.x[path * s_nodes * p..(path + 1) * s_nodes * p].copy_from_slice(&out.x_row);
        ens.y[path * s_nodes * q..(path + 1) * s_nodes * q].copy_from_slice(&out.y_row);
        ens.z[path * s_nodes * q * p..(path + 1) * s_nodes * q * p].copy_from_slice(&out.z_row);
        ens.monitors.push(out.mon);
    }
    Ok(ens)
}

impl PathEnsemble {
    /// Fill `X̂, Ŷ, Ẑ` at the stored nodes (pointwise algebraic definitions).
    pub fn modified_processes(&mut self, cells: &CellEvaluator) -> Result<()> {
        let (p, q) = self.stored_dims();
        let s_nodes = self.n_stored();
        let eps = self.cfg.eps();
        let keps = self.cfg.eps_k as f64;
        let n_paths = self.cfg.n_paths;
        let rows: Vec<(Vec<f64>, Vec<f64>, Vec<f64>)> = (0..n_paths)
            .into_par_iter()
            .map(|path| {
                let mut vals = CellValues::sized(p, q);
                let mut xhat = vec![0.0; s_nodes * p];
                let mut yhat = vec![0.0; s_nodes * q];
                let mut zhat = vec![0.0; s_nodes * q * p];
                let mut xbar = [0.0f64; MAXP];
                for s in 0..s_nodes {
                    for i in 0..p {
                        xbar[i] = (self.at(&self.x, path, s, p, i) * keps).rem_euclid(1.0);
                    }
                    let yv: Vec<f64> = (0..q).map(|l| self.at(&self.y, path, s, q, l)).collect();
                    cells.eval_into(&xbar[..p], &yv, &mut vals);
                    for i in 0..p {
                        xhat[s * p + i] = self.at(&self.x, path, s, p, i) + eps * vals.bhat[i];
                    }
                    for l in 0..q {
                        yhat[s * q + l] = yv[l] - eps * vals.ehat[l];
                    }
                    for l in 0..q {
                        for i in 0..p {
                            zhat[s * q * p + l * p + i] = self.at(&self.z, path, s, q * p, l * p + i)
                                - vals.dx_ehat[l * p + i];
                        }
                    }
                }
                (xhat, yhat, zhat)
            })
            .collect();
        let mut xhat = vec![0.0; n_paths * s_nodes * p];
        let mut yhat = vec![0.0; n_paths * s_nodes * q];
        let mut zhat = vec![0.0; n_paths * s_nodes * q * p];
        for (path, (xr, yr, zr)) in rows.into_iter().enumerate() {
            xhat[path * s_nodes * p..(path + 1) * s_nodes * p].copy_from_slice(&xr);
            yhat[path * s_nodes * q..(path + 1) * s_nodes * q].copy_from_slice(&yr);
            zhat[path * s_nodes * q * p..(path + 1) * s_nodes * q * p].copy_from_slice(&zr);
        }
        self.modified = Some(ModifiedPaths { xhat, yhat, zhat });
        Ok(())
    }

    /// Accumulate the remainder processes `R`, `S` (drift and noise parts
    /// separately) on the fine grid; store them at the coarse nodes and
    /// report `E sup|R|²`, `E sup|S|²`.
    pub fn remainder_terms(
        &mut self,
        spec: &CoefficientSpec,
        cells: &CellEvaluator,
        theta_eps: &FieldEvaluator,
    ) -> Result<&RemainderPaths> {
        let ctx = WalkCtx::new(&self.cfg, spec, theta_eps)?;
        let (p, q) = (ctx.p, ctx.q);
        let s_nodes = self.n_stored();
        let cfg = &self.cfg;
        let eps = cfg.eps();
        let dt = cfg.dt();
        struct Out {
            r_row: Vec<f64>,
            s_row: Vec<f64>,
            rd_row: Vec<f64>,
            rn_row: Vec<f64>,
            sd_row: Vec<f64>,
            sn_row: Vec<f64>,
            sup_r2: f64,
            sup_s2: f64,
        }
        let progs = spec.compiled();
        let outs: Vec<Out> = (0..cfg.n_paths)
            .into_par_iter()
            .map(|path| {
                let mut vals = CellValues::sized(p, q);
                let mut r = [0.0f64; MAXP];
                let mut rd = [0.0f64; MAXP];
                let mut rn = [0.0f64; MAXP];
                let mut s_acc = [0.0f64; MAXQ];
                let mut sd = [0.0f64; MAXQ];
                let mut sn = [0.0f64; MAXQ];
                let mut out = Out {
                    r_row: vec![0.0; s_nodes * p],
                    s_row: vec![0.0; s_nodes * q],
                    rd_row: vec![0.0; s_nodes * p],
                    rn_row: vec![0.0; s_nodes * p],
                    sd_row: vec![0.0; s_nodes * q],
                    sn_row: vec![0.0; s_nodes * q],
                    sup_r2: 0.0,
                    sup_s2: 0.0,
                };
                let mut zaz = [0.0f64; MAXQ * MAXQ];
                let mut sig = [0.0f64; MAXP * MAXP];
                let mut a = [0.0f64; MAXP * MAXP];
                ctx.run_path(path, &mut |sv| {
                    if sv.k % cfg.store_every.max(1) == 0 && cfg.n_steps > 0 {
                        let s = sv.k / cfg.store_every;
                        for i in 0..p {
                            out.r_row[s * p + i] = r[i];
                            out.rd_row[s * p + i] = rd[i];
                            out.rn_row[s * p + i] = rn[i];
                        }
                        for l in 0..q {
                            out.s_row[s * q + l] = s_acc[l];
                            out.sd_row[s * q + l] = sd[l];
                            out.sn_row[s * q + l] = sn[l];
                        }
                    }
                    let r2: f64 = r[..p].iter().map(|v| v * v).sum();
                    let s2: f64 = s_acc[..q].iter().map(|v| v * v).sum();
                    out.sup_r2 = out.sup_r2.max(r2);
                    out.sup_s2 = out.sup_s2.max(s2);
                    if sv.terminal {
                        return;
                    }
                    cells.eval_into(sv.xbar, sv.y, &mut vals);
                    // σ and a = σσ* at (x̄, y)
                    for i in 0..p {
                        for j in 0..p {
                            sig[i * p + j] = progs.sigma[i * p + j].eval(sv.xbar, sv.y, &[]);
                        }
                    }
                    for i in 0..p {
                        for j in 0..p {
                            let mut acc = 0.0;
                            for l in 0..p {
                                acc += sig[i * p + l] * sig[j * p + l];
                            }
                            a[i * p + j] = acc;
                        }
                    }
                    // [Z a Z*]_{j j'}
                    for j in 0..q {
                        for jp in 0..q {
                            let mut acc = 0.0;
                            for i in 0..p {
                                for ip in 0..p {
                                    acc += sv.z[j * p + i] * a[i * p + ip] * sv.z[jp * p + ip];
                                }
                            }
                            zaz[j * q + jp] = acc;
                        }
                    }
                    let fv: Vec<f64> =
                        (0..q).map(|l| progs.f[l].eval(sv.xbar, sv.y, sv.z)).collect();
                    // drift parts: R(1) = ε(−∇_y b̂ f + ½ ∇²_yy b̂ [Z a Z*])
                    for lp in 0..p {
                        let mut d = 0.0;
                        for j in 0..q {
                            d -= vals.dy_bhat[lp * q + j] * fv[j];
                        }
                        for j in 0..q {
                            for jp in 0..q {
                                d += 0.5 * vals.dyy_bhat[lp * q * q + j * q + jp] * zaz[j * q + jp];
                            }
                        }
                        // noise part: R(2) = ε ∇_y b̂ Z σ, applied to dw
                        let mut ndw = 0.0;
                        for j in 0..q {
                            let mut zs = [0.0f64; MAXP];
                            for c in 0..p {
                                let mut acc = 0.0;
                                for i in 0..p {
                                    acc += sv.z[j * p + i] * sig[i * p + c];
                                }
                                zs[c] = acc;
                            }
                            let mut row = 0.0;
                            for c in 0..p {
                                row += zs[c] * sv.dw[c];
                            }
                            ndw += vals.dy_bhat[lp * q + j] * row;
                        }
                        rd[lp] += eps * d * dt;
                        rn[lp] += eps * ndw;
                        r[lp] = rd[lp] + rn[lp];
                    }
                    for lq in 0..q {
                        let mut d = 0.0;
                        for j in 0..q {
                            d -= vals.dy_ehat[lq * q + j] * fv[j];
                        }
                        for j in 0..q {
                            for jp in 0..q {
                                d += 0.5 * vals.dyy_ehat[lq * q * q + j * q + jp] * zaz[j * q + jp];
                            }
                        }
                        let mut ndw = 0.0;
                        for j in 0..q {
                            let mut row = 0.0;
                            for c in 0..p {
                                let mut zs = 0.0;
                                for i in 0..p {
                                    zs += sv.z[j * p + i] * sig[i * p + c];
                                }
                                row += zs * sv.dw[c];
                            }
                            ndw += vals.dy_ehat[lq * q + j] * row;
                        }
                        sd[lq] += eps * d * dt;
                        sn[lq] += eps * ndw;
                        s_acc[lq] = sd[lq] + sn[lq];
                    }
                });
                out
            })
            .collect();
        let n_paths = cfg.n_paths;
        let mut rp = RemainderPaths {
            r: vec![0.0; n_paths * s_nodes * p],
            s: vec![0.0; n_paths * s_nodes * q],
            r_drift: vec![0.0; n_paths * s_nodes * p],
            r_noise: vec![0.0; n_paths * s_nodes * p],
            s_drift: vec![0.0; n_paths * s_nodes * q],
            s_noise: vec![0.0; n_paths * s_nodes * q],
            report: RemainderReport {
                e_sup_r2: EnsembleStat { value: 0.0, se: 0.0 },
                e_sup_s2: EnsembleStat { value: 0.0, se: 0.0 },
            },
        };
        let mut sup_r2 = Vec::with_capacity(n_paths);
        let mut sup_s2 = Vec::with_capacity(n_paths);
        for (path, out) in outs.into_iter().enumerate() {
            rp.r[path * s_nodes * p..(path + 1) * s_nodes * p].copy_from_slice(&out.r_row);
            rp.r_drift[path * s_nodes * p..(path + 1) * s_nodes * p].copy_from_slice(&out.rd_row);
            rp.r_noise[path * s_nodes * p..(path + 1) * s_nodes * p].copy_from_slice(&out.rn_row);
            rp.s[path * s_nodes * q..(path + 1) * s_nodes * q].copy_from_slice(&out.s_row);
            rp.s_drift[path * s_nodes * q..(path + 1) * s_nodes * q].copy_from_slice(&out.sd_row);
            rp.s_noise[path * s_nodes * q..(path + 1) * s_nodes * q].copy_from_slice(&out.sn_row);
            sup_r2.push(out.sup_r2);
            sup_s2.push(out.sup_s2);
        }
        rp.report.e_sup_r2 = mean_se(&sup_r2);
        rp.report.e_sup_s2 = mean_se(&sup_s2);
        self.remainders = Some(rp);
        Ok(self.remainders.as_ref().unwrap())
    }

    /// Evolve the auxiliary SDE pathwise-coupled to the driving ensemble and
    /// fill `U, V, W, Ŵ` plus the per-path proposition statistics.
    #[allow(clippy::too_many_arguments)]
    pub fn simulate_auxiliary_sde(
        &mut self,
        spec: &CoefficientSpec,
        cells: &CellEvaluator,
        theta_eps: &FieldEvaluator,
        zeta: &FieldEvaluator,
        p_m: &MollifiedDensityEvaluator,
        n_reg: u32,
    ) -> Result<()> {
        let ctx = WalkCtx::new(&self.cfg, spec, theta_eps)?;
        let (p, q) = (ctx.p, ctx.q);
        if p != 1 {
            return Err(HomError::usage(
                "auxiliary SDE walk uses the 1D fast path; P = 1 required",
            ));
        }
        let s_nodes = self.n_stored();
        let cfg = &self.cfg;
        let dt = cfg.dt();
        let progs = spec.compiled();
        struct Out {
            u_row: Vec<f64>,
            v_row: Vec<f64>,
            w_row: Vec<f64>,
            what_row: Vec<f64>,
            sup_u_x2: f64,
            sup_v_y2: f64,
            int_w_z2: f64,
            error: Option<HomError>,
        }
        let outs: Vec<Out> = (0..cfg.n_paths)
            .into_par_iter()
            .map(|path| {
                let mut vals_y = CellValues::sized(p, q);
                let mut vals_v = CellValues::sized(p, q);
                let mut out = Out {
                    u_row: vec![0.0; s_nodes * p],
                    v_row: vec![0.0; s_nodes * q],
                    w_row: vec![0.0; s_nodes * q * p],
                    what_row: vec![0.0; s_nodes * q * p],
                    sup_u_x2: 0.0,
                    sup_v_y2: 0.0,
                    int_w_z2: 0.0,
                    error: None,
                };
                let mut u = [0.0f64; MAXP];
                u[..p].copy_from_slice(&cfg.x0);
                let mut v = [0.0f64; MAXQ];
                let mut w = [0.0f64; MAXQ * MAXP];
                let mut what = [0.0f64; MAXQ * MAXP];
                let mut zhat = [0.0f64; MAXQ * MAXP];
                let mut u_drift = [0.0f64; MAXP];
                let mut v_dummy = [0.0f64; MAXQ];
                let mut moll_w_y: Vec<(usize, f64)> = Vec::new();
                let mut moll_w_v: Vec<(usize, f64)> = Vec::new();
                ctx.run_path(path, &mut |sv| {
                    if out.error.is_some() {
                        return;
                    }
                    // companions at the current state
                    zeta.eval_into(sv.t, &u[..p], &mut v[..q], &mut w[..q * p]);
                    let basis = cells.basis_at(sv.xbar[0]);
                    cells.eval_with_basis(&basis, sv.y, &mut vals_y);
                    cells.eval_with_basis(&basis, &v[..q], &mut vals_v);
                    for l in 0..q {
                        for i in 0..p {
                            let mut acc = w[l * p + i];
                            for c in 0..p {
                                acc += w[l * p + c] * vals_v.dx_bhat[c * p + i];
                            }
                            what[l * p + i] = acc;
                        }
                    }
                    for l in 0..q {
                        for i in 0..p {
                            zhat[l * p + i] = sv.z[l * p + i] - vals_y.dx_ehat[l * p + i];
                        }
                    }
                    // stats and storage
                    let du2: f64 = (0..p).map(|i| (u[i] - sv.x[i]) * (u[i] - sv.x[i])).sum();
                    let dv2: f64 = (0..q).map(|l| (v[l] - sv.y[l]) * (v[l] - sv.y[l])).sum();
                    out.sup_u_x2 = out.sup_u_x2.max(du2);
                    out.sup_v_y2 = out.sup_v_y2.max(dv2);
                    if !sv.terminal {
                        let dwz2: f64 = (0..q * p)
                            .map(|c| (what[c] - zhat[c]) * (what[c] - zhat[c]))
                            .sum();
                        out.int_w_z2 += dwz2 * dt;
                    }
                    if cfg.n_steps > 0 && sv.k % cfg.store_every == 0 {
                        let s = sv.k / cfg.store_every;
                        out.u_row[s * p..(s + 1) * p].copy_from_slice(&u[..p]);
                        out.v_row[s * q..(s + 1) * q].copy_from_slice(&v[..q]);
                        out.w_row[s * q * p..(s + 1) * q * p].copy_from_slice(&w[..q * p]);
                        out.what_row[s * q * p..(s + 1) * q * p].copy_from_slice(&what[..q * p]);
                    }
                    if sv.terminal {
                        return;
                    }
                    // density ratio p_m(x̄, V)/p_m(x̄, Y)
                    p_m.node_weights(&v[..q], &mut moll_w_v);
                    p_m.node_weights(sv.y, &mut moll_w_y);
                    let pm_basis = TrigBasis1D::with_len(sv.xbar[0], p_m.basis_len());
                    let pm_v = p_m.eval_with_basis(&pm_basis, &moll_w_v);
                    let pm_y = p_m.eval_with_basis(&pm_basis, &moll_w_y);
                    if pm_v < 1e-6 || pm_y < 1e-6 {
                        out.error = Some(HomError::non_finite(
                            "mollified density below the positivity floor",
                            format!("path {path}, t = {:.5}, x̄ = {:.4}", sv.t, sv.xbar[0]),
                        ));
                        return;
                    }
                    let ratio = (pm_v / pm_y).sqrt();
                    // drift u(x̄, Y, Ẑ): the shifted gradient is Ẑ + ∇ₓê = Z
                    let cv: Vec<f64> =
                        (0..p).map(|i| progs.c[i].eval(sv.xbar, sv.y, sv.z)).collect();
                    let fv: Vec<f64> =
                        (0..q).map(|l| progs.f[l].eval(sv.xbar, sv.y, sv.z)).collect();
                    let ev: Vec<f64> =
                        (0..q).map(|l| progs.e[l].eval(sv.xbar, sv.y, &[])).collect();
                    let mut a = [0.0f64; MAXP * MAXP];
                    let mut sig_y = [0.0f64; MAXP * MAXP];
                    for i in 0..p {
                        for j in 0..p {
                            sig_y[i * p + j] = progs.sigma[i * p + j].eval(sv.xbar, sv.y, &[]);
                        }
                    }
                    for i in 0..p {
                        for j in 0..p {
                            let mut acc = 0.0;
                            for l in 0..p {
                                acc += sig_y[i * p + l] * sig_y[j * p + l];
                            }
                            a[i * p + j] = acc;
                        }
                    }
                    effective_integrands(
                        p,
                        q,
                        &a[..p * p],
                        &ev,
                        &cv,
                        &fv,
                        &vals_y,
                        sv.z,
                        &mut u_drift[..p],
                        &mut v_dummy[..q],
                        None,
                    );
                    // diffusion  ratio · (I + ∇ₓb̂)σ at (x̄, V)
                    let mut sig_v = [0.0f64; MAXP * MAXP];
                    for i in 0..p {
                        for j in 0..p {
                            sig_v[i * p + j] =
                                progs.sigma[i * p + j].eval(sv.xbar, &v[..q], &[]);
                        }
                    }
                    for i in 0..p {
                        let mut du = u_drift[i] * dt;
                        for j in 0..p {
                            let mut ib_sig = sig_v[i * p + j];
                            for c in 0..p {
                                ib_sig += vals_v.dx_bhat[i * p + c] * sig_v[c * p + j];
                            }
                            du += ratio * ib_sig * sv.dw[j];
                        }
                        u[i] += du;
                    }
                });
                out
            })
            .collect();
        let n_paths = cfg.n_paths;
        let mut aux = AuxPaths {
            n_reg,
            u: vec![0.0; n_paths * s_nodes * p],
            v: vec![0.0; n_paths * s_nodes * q],
            w: vec![0.0; n_paths * s_nodes * q * p],
            what: vec![0.0; n_paths * s_nodes * q * p],
            sup_u_x2: Vec::with_capacity(n_paths),
            sup_v_y2: Vec::with_capacity(n_paths),
            int_w_z2: Vec::with_capacity(n_paths),
        };
        for (path, out) in outs.into_iter().enumerate() {
            if let Some(e) = out.error {
                return Err(e);
            }
            aux.u[path * s_nodes * p..(path + 1) * s_nodes * p].copy_from_slice(&out.u_row);
            aux.v[path * s_nodes * q..(path + 1) * s_nodes * q].copy_from_slice(&out.v_row);
            aux.w[path * s_nodes * q * p..(path + 1) * s_nodes * q * p]
                .copy_from_slice(&out.w_row);
            aux.what[path * s_nodes * q * p..(path + 1) * s_nodes * q * p]
                .copy_from_slice(&out.what_row);
            aux.sup_u_x2.push(out.sup_u_x2);
            aux.sup_v_y2.push(out.sup_v_y2);
            aux.int_w_z2.push(out.int_w_z2);
        }
        self.aux = Some(aux);
        Ok(())
    }

    /// The homogenization metrics: `E sup |Y − θ(·, X)|²` and
    /// `E ∫ |Ẑ − ∇ₓθ(·, X)(I + ∇ₓb̂)(X̄, Y)|² dt`, plus the same pair
    /// restricted to `[T − c, T]` with `c = (T − t0)/2`.
    pub fn convergence_metrics(
        &self,
        spec: &CoefficientSpec,
        cells: &CellEvaluator,
        theta_eps: &FieldEvaluator,
        theta_lim: &FieldEvaluator,
    ) -> Result<ConvergenceMetrics> {
        let ctx = WalkCtx::new(&self.cfg, spec, theta_eps)?;
        let (p, q) = (ctx.p, ctx.q);
        let cfg = &self.cfg;
        let dt = cfg.dt();
        let t_split = cfg.t_end - 0.5 * (cfg.t_end - cfg.t0);
        struct Out {
            sup_y2: f64,
            int_z2: f64,
            local_sup_y2: f64,
            local_int_z2: f64,
        }
        let outs: Vec<Out> = (0..cfg.n_paths)
            .into_par_iter()
            .map(|path| {
                let mut vals = CellValues::sized(p, q);
                let mut th = [0.0f64; MAXQ];
                let mut gth = [0.0f64; MAXQ * MAXP];
                let mut out = Out {
                    sup_y2: 0.0,
                    int_z2: 0.0,
                    local_sup_y2: 0.0,
                    local_int_z2: 0.0,
                };
                ctx.run_path(path, &mut |sv| {
                    theta_lim.eval_into(sv.t, sv.x, &mut th[..q], &mut gth[..q * p]);
                    cells.eval_into(sv.xbar, sv.y, &mut vals);
                    let mut dy2 = 0.0;
                    for l in 0..q {
                        let d = sv.y[l] - th[l];
                        dy2 += d * d;
                    }
                    out.sup_y2 = out.sup_y2.max(dy2);
                    if sv.t >= t_split {
                        out.local_sup_y2 = out.local_sup_y2.max(dy2);
                    }
                    if sv.terminal {
                        return;
                    }
                    // |Ẑ − ∇θ (I + ∇ₓb̂)|²
                    let mut dz2 = 0.0;
                    for l in 0..q {
                        for i in 0..p {
                            let zh = sv.z[l * p + i] - vals.dx_ehat[l * p + i];
                            let mut target = gth[l * p + i];
                            for c in 0..p {
                                target += gth[l * p + c] * vals.dx_bhat[c * p + i];
                            }
                            let d = zh - target;
                            dz2 += d * d;
                        }
                    }
                    out.int_z2 += dz2 * dt;
                    if sv.t >= t_split {
                        out.local_int_z2 += dz2 * dt;
                    }
                });
                out
            })
            .collect();
        let sup: Vec<f64> = outs.iter().map(|o| o.sup_y2).collect();
        let int: Vec<f64> = outs.iter().map(|o| o.int_z2).collect();
        let lsup: Vec<f64> = outs.iter().map(|o| o.local_sup_y2).collect();
        let lint: Vec<f64> = outs.iter().map(|o| o.local_int_z2).collect();
        Ok(ConvergenceMetrics {
            e_sup_y2: mean_se(&sup),
            e_int_z2: mean_se(&int),
            local_e_sup_y2: mean_se(&lsup),
            local_e_int_z2: mean_se(&lint),
        })
    }

    /// Proposition-level distances, from the auxiliary simulation.
    pub fn proposition_metrics(&self) -> Result<PropositionMetrics> {
        let aux = self
            .aux
            .as_ref()
            .ok_or_else(|| HomError::usage("auxiliary SDE has not been simulated"))?;
        Ok(PropositionMetrics {
            n_reg: aux.n_reg,
            e_sup_u_x2: mean_se(&aux.sup_u_x2),
            e_sup_v_y2: mean_se(&aux.sup_v_y2),
            e_int_what_zhat2: mean_se(&aux.int_w_z2),
        })
    }

    /// Ergodic-averaging statistic
    /// `E sup_t |∫_0^t [φ(X̄_r, Y_r, G_r) − φ̄(Y_r, G_r)] dr|` with
    /// `φ̄(y, g) = ∫ φ(x, y, g) p(x, y) dx` by nodal quadrature.
    ///
    /// φ is an expression over `x1..` (fast variable), `y1..` (backward
    /// value) and `z1l` (companion process G components).
    pub fn ergodic_average(
        &self,
        spec: &CoefficientSpec,
        cells: &CellEvaluator,
        theta_eps: &FieldEvaluator,
        cell_table: &crate::cell::CellTable,
        phi: &Expr,
        g_source: GSource,
    ) -> Result<EnsembleStat> {
        let ctx = WalkCtx::new(&self.cfg, spec, theta_eps)?;
        let (p, q) = (ctx.p, ctx.q);
        let cfg = &self.cfg;
        let dt = cfg.dt();
        let prog = phi.compile(p);
        let (_, _, zr, zc) = phi.var_extent();
        let g_dim = match g_source {
            GSource::Constant(_) => 1,
            GSource::XHat | GSource::Aux => p,
        };
        if zr > 1 || zc > g_dim {
            return Err(HomError::usage(
                "phi's companion arguments exceed the selected G dimension",
            ));
        }
        let grid = cell_table.grid;
        let nt = grid.n_total();
        let qw = grid.weight();
        let nodes: Vec<Vec<f64>> = grid.nodes();
        let aux_u = match g_source {
            GSource::Aux => {
                let aux = self
                    .aux
                    .as_ref()
                    .ok_or_else(|| HomError::usage("G = U requires the auxiliary simulation"))?;
                Some(&aux.u)
            }
            _ => None,
        };
        let s_last = self.n_stored() - 1;
        let eps = cfg.eps();
        let outs: Vec<f64> = (0..cfg.n_paths)
            .into_par_iter()
            .map(|path| {
                let mut vals = CellValues::sized(p, q);
                let mut acc = [0.0f64; 1];
                let mut sup = 0.0f64;
                let mut g = [0.0f64; MAXP];
                ctx.run_path(path, &mut |sv| {
                    if sv.terminal {
                        return;
                    }
                    match g_source {
                        GSource::Constant(c) => g[0] = c,
                        GSource::XHat => {
                            cells.eval_into(sv.xbar, sv.y, &mut vals);
                            for i in 0..p {
                                g[i] = sv.x[i] + eps * vals.bhat[i];
                            }
                        }
                        GSource::Aux => {
                            // linear interpolation of the stored auxiliary path
                            let u = aux_u.unwrap();
                            let pos = sv.k as f64 / cfg.store_every as f64;
                            let s0 = (pos.floor() as usize).min(s_last);
                            let s1 = (s0 + 1).min(s_last);
                            let w = pos - s0 as f64;
                            for i in 0..p {
                                let a = self.at(u, path, s0, p, i);
                                let b = self.at(u, path, s1, p, i);
                                g[i] = (1.0 - w) * a + w * b;
                            }
                        }
                    }
                    let val = prog.eval(sv.xbar, sv.y, &g[..g_dim]);
                    // φ̄(y, g): quadrature against the density at the nodes
                    let pn = density_nodal(cell_table, sv.y);
                    let mut bar = 0.0;
                    for (i, xn) in nodes.iter().enumerate() {
                        bar += qw * prog.eval(xn, sv.y, &g[..g_dim]) * pn(i);
                    }
                    acc[0] += (val - bar) * dt;
                    sup = sup.max(acc[0].abs());
                });
                let _ = nt;
                sup
            })
            .collect();
        Ok(mean_se(&outs))
    }

    /// Martingale accumulators and quadratic variations; stored at coarse
    /// nodes, with per-path terminal values for moment comparisons.
    pub fn martingale_diagnostics(
        &mut self,
        spec: &CoefficientSpec,
        cells: &CellEvaluator,
        theta_eps: &FieldEvaluator,
    ) -> Result<MartingaleSummary> {
        let ctx = WalkCtx::new(&self.cfg, spec, theta_eps)?;
        let (p, q) = (ctx.p, ctx.q);
        let cfg = &self.cfg;
        let dt = cfg.dt();
        let s_nodes = self.n_stored();
        let progs = spec.compiled();
        struct Out {
            n_row: Vec<f64>,
            m_row: Vec<f64>,
            qvn_row: Vec<f64>,
            qvm_row: Vec<f64>,
            qvmn_row: Vec<f64>,
            qvn_final: Vec<f64>,
            x_final: Vec<f64>,
        }
        let outs: Vec<Out> = (0..cfg.n_paths)
            .into_par_iter()
            .map(|path| {
                let mut vals = CellValues::sized(p, q);
                let mut n_acc = [0.0f64; MAXP];
                let mut m_acc = [0.0f64; MAXQ];
                let mut qvn = [0.0f64; MAXP * MAXP];
                let mut qvm = [0.0f64; MAXQ * MAXQ];
                let mut qvmn = [0.0f64; MAXQ * MAXP];
                let mut out = Out {
                    n_row: vec![0.0; s_nodes * p],
                    m_row: vec![0.0; s_nodes * q],
                    qvn_row: vec![0.0; s_nodes * p * p],
                    qvm_row: vec![0.0; s_nodes * q * q],
                    qvmn_row: vec![0.0; s_nodes * q * p],
                    qvn_final: vec![0.0; p * p],
                    x_final: vec![0.0; p],
                };
                let mut sig = [0.0f64; MAXP * MAXP];
                let mut a = [0.0f64; MAXP * MAXP];
                let mut ib = [0.0f64; MAXP * MAXP];
                let mut zhat = [0.0f64; MAXQ * MAXP];
                ctx.run_path(path, &mut |sv| {
                    if cfg.n_steps > 0 && sv.k % cfg.store_every == 0 {
                        let s = sv.k / cfg.store_every;
                        out.n_row[s * p..(s + 1) * p].copy_from_slice(&n_acc[..p]);
                        out.m_row[s * q..(s + 1) * q].copy_from_slice(&m_acc[..q]);
                        out.qvn_row[s * p * p..(s + 1) * p * p].copy_from_slice(&qvn[..p * p]);
                        out.qvm_row[s * q * q..(s + 1) * q * q].copy_from_slice(&qvm[..q * q]);
                        out.qvmn_row[s * q * p..(s + 1) * q * p].copy_from_slice(&qvmn[..q * p]);
                    }
                    if sv.terminal {
                        out.qvn_final.copy_from_slice(&qvn[..p * p]);
                        out.x_final.copy_from_slice(sv.x);
                        return;
                    }
                    cells.eval_into(sv.xbar, sv.y, &mut vals);
                    for i in 0..p {
                        for j in 0..p {
                            sig[i * p + j] = progs.sigma[i * p + j].eval(sv.xbar, sv.y, &[]);
                            ib[i * p + j] =
                                if i == j { 1.0 } else { 0.0 } + vals.dx_bhat[i * p + j];
                        }
                    }
                    for i in 0..p {
                        for j in 0..p {
                            let mut acc = 0.0;
                            for l in 0..p {
                                acc += sig[i * p + l] * sig[j * p + l];
                            }
                            a[i * p + j] = acc;
                        }
                    }
                    for l in 0..q {
                        for i in 0..p {
                            zhat[l * p + i] = sv.z[l * p + i] - vals.dx_ehat[l * p + i];
                        }
                    }
                    // dN = (I + ∇ₓb̂)σ dW ; dM = Ẑ σ dW
                    for i in 0..p {
                        let mut dn = 0.0;
                        for j in 0..p {
                            let mut ibs = 0.0;
                            for c in 0..p {
                                ibs += ib[i * p + c] * sig[c * p + j];
                            }
                            dn += ibs * sv.dw[j];
                        }
                        n_acc[i] += dn;
                    }
                    for l in 0..q {
                        let mut dm = 0.0;
                        for j in 0..p {
                            let mut zs = 0.0;
                            for c in 0..p {
                                zs += zhat[l * p + c] * sig[c * p + j];
                            }
                            dm += zs * sv.dw[j];
                        }
                        m_acc[l] += dm;
                    }
                    // d[N] = α dt = (I+∇ₓb̂) a (I+∇ₓb̂)* dt
                    for i in 0..p {
                        for j in 0..p {
                            let mut acc = 0.0;
                            for c in 0..p {
                                for d in 0..p {
                                    acc += ib[i * p + c] * a[c * p + d] * ib[j * p + d];
                                }
                            }
                            qvn[i * p + j] += acc * dt;
                        }
                    }
                    // d[M] = Ẑ a Ẑ* dt ; d[M,N] = Ẑ a (I+∇ₓb̂)* dt
                    for l in 0..q {
                        for lp in 0..q {
                            let mut acc = 0.0;
                            for c in 0..p {
                                for d in 0..p {
                                    acc += zhat[l * p + c] * a[c * p + d] * zhat[lp * p + d];
                                }
                            }
                            qvm[l * q + lp] += acc * dt;
                        }
                        for i in 0..p {
                            let mut acc = 0.0;
                            for c in 0..p {
                                for d in 0..p {
                                    acc += zhat[l * p + c] * a[c * p + d] * ib[i * p + d];
                                }
                            }
                            qvmn[l * p + i] += acc * dt;
                        }
                    }
                });
                out
            })
            .collect();
        let n_paths = cfg.n_paths;
        let mut mp = MartingalePaths {
            n_mart: vec![0.0; n_paths * s_nodes * p],
            m_mart: vec![0.0; n_paths * s_nodes * q],
            qv_n: vec![0.0; n_paths * s_nodes * p * p],
            qv_m: vec![0.0; n_paths * s_nodes * q * q],
            qv_mn: vec![0.0; n_paths * s_nodes * q * p],
            qv_n_final: Vec::with_capacity(n_paths),
            x_final: Vec::with_capacity(n_paths * p),
            x2_final: Vec::with_capacity(n_paths),
        };
        for (path, out) in outs.into_iter().enumerate() {
            mp.n_mart[path * s_nodes * p..(path + 1) * s_nodes * p].copy_from_slice(&out.n_row);
            mp.m_mart[path * s_nodes * q..(path + 1) * s_nodes * q].copy_from_slice(&out.m_row);
            mp.qv_n[path * s_nodes * p * p..(path + 1) * s_nodes * p * p]
                .copy_from_slice(&out.qvn_row);
            mp.qv_m[path * s_nodes * q * q..(path + 1) * s_nodes * q * q]
                .copy_from_slice(&out.qvm_row);
            mp.qv_mn[path * s_nodes * q * p..(path + 1) * s_nodes * q * p]
                .copy_from_slice(&out.qvmn_row);
            mp.qv_n_final.push(out.qvn_final.iter().sum::<f64>() / p as f64); // trace/P
            mp.x_final.extend_from_slice(&out.x_final);
            mp.x2_final
                .push(out.x_final.iter().map(|v| v * v).sum::<f64>());
        }
        let qv = mean_se(&mp.qv_n_final);
        let x1: Vec<f64> = (0..n_paths).map(|i| mp.x_final[i * p]).collect();
        let ex = mean_se(&x1);
        let ex2 = mean_se(&mp.x2_final);
        let y_t0 = self.monitors[0].y_t0.clone();
        self.martingales = Some(mp);
        Ok(MartingaleSummary {
            mean_qv_n_t: qv,
            e_x_t: ex,
            e_x_t2: ex2,
            y_t0,
        })
    }

    /// Boundedness monitors from the forward simulation.
    pub fn estimate_monitors(&self) -> MonitorReport {
        let sup_y: Vec<f64> = self.monitors.iter().map(|m| m.sup_y).collect();
        let sup_x2: Vec<f64> = self.monitors.iter().map(|m| m.sup_x2).collect();
        let int_z2_sq: Vec<f64> = self.monitors.iter().map(|m| m.int_z2 * m.int_z2).collect();
        let lemma: Vec<f64> = self
            .monitors
            .iter()
            .map(|m| m.int_one_plus_y_z2)
            .collect();
        MonitorReport {
            sup_abs_y: sup_y.iter().fold(0.0f64, |a, &b| a.max(b)),
            e_sup_x2: mean_se(&sup_x2),
            e_int_z2_sq: mean_se(&int_z2_sq),
            e_int_one_plus_y_z2: mean_se(&lemma),
        }
    }

    /// Mean terminal backward value (= E H(X_T), the Feynman-Kac side).
    pub fn mean_terminal_y(&self) -> Vec<EnsembleStat> {
        (0..self.q_dim)
            .map(|l| {
                let vals: Vec<f64> = self.monitors.iter().map(|m| m.y_t_end[l]).collect();
                mean_se(&vals)
            })
            .collect()
    }

    /// Initial backward value Y_{t0} (deterministic across paths).
    pub fn y_t0(&self) -> Vec<f64> {
        self.monitors[0].y_t0.clone()
    }
}

fn density_nodal<'a>(
    table: &'a crate::cell::CellTable,
    y: &[f64],
) -> impl Fn(usize) -> f64 + 'a {
    let corners = table.corners(y);
    move |idx: usize| {
        let mut acc = 0.0;
        for &(ci, w) in &corners {
            acc += w * table.entries[ci].p.comp(0)[idx];
        }
        acc
    }
}

#[derive(Debug, Clone, Copy)]
pub enum GSource {
    /// corrector-shifted forward process X̂
    XHat,
    /// auxiliary process U (requires the auxiliary simulation)
    Aux,
    Constant(f64),
}

#[derive(Debug, Clone, Serialize)]
pub struct ConvergenceMetrics {
    pub e_sup_y2: EnsembleStat,
    pub e_int_z2: EnsembleStat,
    /// same metrics restricted to the terminal half-interval
    pub local_e_sup_y2: EnsembleStat,
    pub local_e_int_z2: EnsembleStat,
}

#[derive(Debug, Clone, Serialize)]
pub struct PropositionMetrics {
    pub n_reg: u32,
    pub e_sup_u_x2: EnsembleStat,
    pub e_sup_v_y2: EnsembleStat,
    pub e_int_what_zhat2: EnsembleStat,
}

#[derive(Debug, Clone, Serialize)]
pub struct MartingaleSummary {
    /// ensemble mean of trace([N]_T)/P
    pub mean_qv_n_t: EnsembleStat,
    pub e_x_t: EnsembleStat,
    pub e_x_t2: EnsembleStat,
    pub y_t0: Vec<f64>,
}

#[derive(Debug, Clone, Serialize)]
pub struct MonitorReport {
    /// pathwise sup of |Y| over the whole ensemble
    pub sup_abs_y: f64,
    pub e_sup_x2: EnsembleStat,
    pub e_int_z2_sq: EnsembleStat,
    pub e_int_one_plus_y_z2: EnsembleStat,
}

/// Pathwise-coupled simulation of the limit forward-backward system (used
/// for moment comparisons and Feynman-Kac checks); shares the Brownian
/// streams of the driving ensemble.
pub struct LimitEnsemble {
    pub e_x_t: EnsembleStat,
    pub e_x_t2: EnsembleStat,
    /// ensemble mean of trace(∫ ᾱ(Y_s) ds)/P
    pub mean_int_alpha: EnsembleStat,
    pub y_t0: Vec<f64>,
    pub e_h_x_t: Vec<EnsembleStat>,
}

pub fn simulate_limit_ensemble(
    cfg: &SimConfig,
    spec: &CoefficientSpec,
    table: &HomogenizedTable,
    theta_lim: &FieldEvaluator,
) -> Result<LimitEnsemble> {
    let p = table.p_dim;
    let q = table.q_dim;
    cfg.validate(p)?;
    if p > MAXP || q > MAXQ {
        return Err(HomError::usage("Monte Carlo layer is exercised at P, Q <= 2"));
    }
    let dt = cfg.dt();
    let refine = cfg.refine();
    let sdt_base = (dt / refine as f64).sqrt();
    struct Out {
        x_t: Vec<f64>,
        int_alpha: f64,
        y0: Vec<f64>,
        h_x_t: Vec<f64>,
    }
    let outs: Vec<Out> = (0..cfg.n_paths)
        .into_par_iter()
        .map(|path| {
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
            rng.set_stream(path as u64 + 1);
            let normal = StandardNormal;
            let mut x = [0.0f64; MAXP];
            x[..p].copy_from_slice(&cfg.x0);
            let mut y = [0.0f64; MAXQ];
            let mut z = [0.0f64; MAXQ * MAXP];
            let mut ub = vec![0.0; p];
            let mut vb = vec![0.0; q];
            let mut sq = vec![0.0; p * p];
            let mut al = vec![0.0; p * p];
            let mut int_alpha = 0.0;
            let mut y0 = vec![0.0; q];
            for k in 0..=cfg.n_steps {
                let t = if k == cfg.n_steps {
                    cfg.t_end
                } else {
                    cfg.t0 + k as f64 * dt
                };
                theta_lim.eval_into(t, &x[..p], &mut y[..q], &mut z[..q * p]);
                if k == 0 {
                    y0.copy_from_slice(&y[..q]);
                }
                if k == cfg.n_steps {
                    break;
                }
                table.u_v_bar_into(&y[..q], &z[..q * p], &mut ub, &mut vb);
                table.sqrt_alpha_bar_into(&y[..q], &mut sq);
                table.alpha_bar_into(&y[..q], &mut al);
                int_alpha += (0..p).map(|i| al[i * p + i]).sum::<f64>() / p as f64 * dt;
                let mut dw = [0.0f64; MAXP];
                for _ in 0..refine {
                    for d in dw.iter_mut().take(p) {
                        let g: f64 = normal.sample(&mut rng);
                        *d += sdt_base * g;
                    }
                }
                for i in 0..p {
                    let mut dx = ub[i] * dt;
                    for j in 0..p {
                        dx += sq[i * p + j] * dw[j];
                    }
                    x[i] += dx;
                }
            }
            let h = spec.eval_h(&x[..p]);
            Out {
                x_t: x[..p].to_vec(),
                int_alpha,
                y0,
                h_x_t: h.as_slice().to_vec(),
            }
        })
        .collect();
    let x1: Vec<f64> = outs.iter().map(|o| o.x_t[0]).collect();
    let x2: Vec<f64> = outs
        .iter()
        .map(|o| o.x_t.iter().map(|v| v * v).sum::<f64>())
        .collect();
    let ia: Vec<f64> = outs.iter().map(|o| o.int_alpha).collect();
    let e_h: Vec<EnsembleStat> = (0..q)
        .map(|l| {
            let vals: Vec<f64> = outs.iter().map(|o| o.h_x_t[l]).collect();
            mean_se(&vals)
        })
        .collect();
    Ok(LimitEnsemble {
        e_x_t: mean_se(&x1),
        e_x_t2: mean_se(&x2),
        mean_int_alpha: mean_se(&ia),
        y_t0: outs[0].y0.clone(),
        e_h_x_t: e_h,
    })
}

/// Helper for building DVector views of stored paths in tests.
pub fn stored_component(ens: &PathEnsemble, arr: &[f64], path: usize, dim: usize, comp: usize) -> DVector<f64> {
    let s = ens.n_stored();
    DVector::from_fn(s, |node, _| arr[(path * s + node) * dim + comp])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cell::{build_cell_table, CellOptions};
    use crate::homog::build_table;
    use crate::pde::{sample_terminal, solve_epsilon_system, solve_limit_system, PdeOptions};
    use crate::torus::TorusGrid;
    use std::f64::consts::PI;

    fn constant_setup() -> (
        CoefficientSpec,
        crate::cell::CellTable,
        HomogenizedTable,
        crate::pde::DecouplingField,
    ) {
        let spec = CoefficientSpec::preset("constant").unwrap();
        let g = TorusGrid::new(1, 32).unwrap();
        let ct = build_cell_table(&spec, &[-2.0], &[2.0], 9, g, &CellOptions::default()).unwrap();
        let table = build_table(&ct, &spec, -8.0, 8.0, 5).unwrap();
        let grid = TorusGrid::new(1, 64).unwrap();
        let h = sample_terminal(&spec, grid).unwrap();
        let times: Vec<f64> = (0..=32).map(|i| 0.25 * i as f64 / 32.0).collect();
        let field =
            solve_epsilon_system(&spec, 1, &h, 0.25, grid, &times, &PdeOptions::default()).unwrap();
        (spec, ct, table, field)
    }

    fn base_cfg(n_paths: usize) -> SimConfig {
        SimConfig {
            eps_k: 1,
            t0: 0.0,
            t_end: 0.25,
            x0: vec![0.1],
            n_paths,
            n_steps: 256,
            store_every: 8,
            seed: 42,
            brownian_base_steps: None,
        }
    }

    #[test]
    fn gaussian_forward_mean() {
        // σ ≡ 1, b = c = 0: X_T = x0 + B_T
        let (spec, _, _, field) = constant_setup();
        let ev = FieldEvaluator::new(&field);
        let cfg = base_cfg(4000);
        let ens = simulate_forward(&cfg, &spec, &ev).unwrap();
        let s_last = ens.n_stored() - 1;
        let xs: Vec<f64> = (0..cfg.n_paths)
            .map(|p| ens.at(&ens.x, p, s_last, 1, 0))
            .collect();
        let stat = mean_se(&xs);
        assert!(
            (stat.value - 0.1).abs() <= 3.0 * stat.se,
            "mean {} ± {}",
            stat.value,
            stat.se
        );
        // variance close to T
        let var = xs.iter().map(|v| (v - stat.value) * (v - stat.value)).sum::<f64>()
            / (xs.len() - 1) as f64;
        assert!((var - 0.25).abs() < 0.02, "var {var}");
    }

    #[test]
    fn zero_length_interval() {
        let (spec, _, _, field) = constant_setup();
        let ev = FieldEvaluator::new(&field);
        let mut cfg = base_cfg(10);
        cfg.t0 = 0.25;
        cfg.n_steps = 0;
        let ens = simulate_forward(&cfg, &spec, &ev).unwrap();
        assert_eq!(ens.n_stored(), 1);
        for p in 0..10 {
            assert_eq!(ens.at(&ens.x, p, 0, 1, 0), 0.1);
            // Y = H(x0) = sin(2π · 0.1)
            let expect = (2.0 * PI * 0.1).sin();
            assert!((ens.at(&ens.y, p, 0, 1, 0) - expect).abs() < 1e-9);
        }
    }

    #[test]
    fn determinism_bit_identical() {
        let (spec, _, _, field) = constant_setup();
        let ev = FieldEvaluator::new(&field);
        let cfg = base_cfg(64);
        let a = simulate_forward(&cfg, &spec, &ev).unwrap();
        let b = simulate_forward(&cfg, &spec, &ev).unwrap();
        assert_eq!(a.x, b.x);
        assert_eq!(a.y, b.y);
        assert_eq!(a.z, b.z);
    }

    #[test]
    fn modified_processes_trivial_correctors() {
        let (spec, ct, _, field) = constant_setup();
        let ev = FieldEvaluator::new(&field);
        let cells = CellEvaluator::new(&ct);
        let cfg = base_cfg(32);
        let mut ens = simulate_forward(&cfg, &spec, &ev).unwrap();
        ens.modified_processes(&cells).unwrap();
        let m = ens.modified.as_ref().unwrap();
        for i in 0..m.xhat.len() {
            assert!((m.xhat[i] - ens.x[i]).abs() < 1e-12);
            assert!((m.yhat[i] - ens.y[i]).abs() < 1e-12);
            assert!((m.zhat[i] - ens.z[i]).abs() < 1e-12);
        }
    }

    #[test]
    fn remainders_vanish_without_parameter_coupling() {
        let (spec, ct, _, field) = constant_setup();
        let ev = FieldEvaluator::new(&field);
        let cells = CellEvaluator::new(&ct);
        let cfg = base_cfg(16);
        let mut ens = simulate_forward(&cfg, &spec, &ev).unwrap();
        let rp = ens.remainder_terms(&spec, &cells, &ev).unwrap();
        assert!(rp.report.e_sup_r2.value < 1e-24);
        assert!(rp.report.e_sup_s2.value < 1e-24);
    }

    #[test]
    fn remainder_decomposition_identity() {
        let spec = CoefficientSpec::preset("quasilinear-demo").unwrap();
        let g = TorusGrid::new(1, 32).unwrap();
        let ct = build_cell_table(&spec, &[-2.0], &[2.0], 17, g, &CellOptions::default()).unwrap();
        let cells = CellEvaluator::new(&ct);
        let grid = TorusGrid::new(1, 64).unwrap();
        let h = sample_terminal(&spec, grid).unwrap();
        let times: Vec<f64> = (0..=16).map(|i| 0.1 * i as f64 / 16.0).collect();
        let field =
            solve_epsilon_system(&spec, 4, &h, 0.1, grid, &times, &PdeOptions::default()).unwrap();
        let ev = FieldEvaluator::new(&field);
        let cfg = SimConfig {
            eps_k: 4,
            t0: 0.0,
            t_end: 0.1,
            x0: vec![0.1],
            n_paths: 8,
            n_steps: 64,
            store_every: 4,
            seed: 7,
            brownian_base_steps: None,
        };
        let mut ens = simulate_forward(&cfg, &spec, &ev).unwrap();
        let rp = ens.remainder_terms(&spec, &cells, &ev).unwrap();
        assert!(rp.report.e_sup_s2.value > 0.0, "S should be nonzero here");
        for i in 0..rp.r.len() {
            assert!((rp.r[i] - (rp.r_drift[i] + rp.r_noise[i])).abs() < 1e-12);
        }
        for i in 0..rp.s.len() {
            assert!((rp.s[i] - (rp.s_drift[i] + rp.s_noise[i])).abs() < 1e-12);
        }
    }

    #[test]
    fn auxiliary_sde_trivial_coupling() {
        // x-independent, constant σ, b = e = 0: U ≡ X pathwise
        let (spec, ct, table, field) = constant_setup();
        let ev = FieldEvaluator::new(&field);
        let cells = CellEvaluator::new(&ct);
        let cfg = base_cfg(64);
        let mut ens = simulate_forward(&cfg, &spec, &ev).unwrap();
        // ζ_n = θ via the identity mollification on the limit system
        let grid = TorusGrid::new(1, 64).unwrap();
        let h = sample_terminal(&spec, grid).unwrap();
        let md = crate::pde::MollifiedData::identity(&table, &h).unwrap();
        let times: Vec<f64> = (0..=32).map(|i| 0.25 * i as f64 / 32.0).collect();
        let zeta = crate::pde::solve_regularized_system(&md, 0.25, grid, &times, &PdeOptions::default())
            .unwrap();
        let zev = FieldEvaluator::new(&zeta);
        let pm = MollifiedDensityEvaluator::new(&ct, 4.0).unwrap();
        ens.simulate_auxiliary_sde(&spec, &cells, &ev, &zev, &pm, 4).unwrap();
        let aux = ens.aux.as_ref().unwrap();
        let mut max_gap: f64 = 0.0;
        for i in 0..aux.u.len() {
            max_gap = max_gap.max((aux.u[i] - ens.x[i]).abs());
        }
        assert!(max_gap <= 1e-12, "sup |U - X| = {max_gap}");
        // initial condition U_{t0} = X_{t0}
        assert_eq!(ens.at(&aux.u, 3, 0, 1, 0), ens.at(&ens.x, 3, 0, 1, 0));
        let prop = ens.proposition_metrics().unwrap();
        assert!(prop.e_sup_u_x2.value <= 1e-24);
    }

    #[test]
    fn convergence_metrics_trivial_case() {
        // θ_ε = θ when nothing oscillates: both metrics at solver tolerance
        let (spec, ct, table, field) = constant_setup();
        let ev = FieldEvaluator::new(&field);
        let cells = CellEvaluator::new(&ct);
        let grid = TorusGrid::new(1, 64).unwrap();
        let h = sample_terminal(&spec, grid).unwrap();
        let times: Vec<f64> = (0..=32).map(|i| 0.25 * i as f64 / 32.0).collect();
        let opts = PdeOptions {
            rtol: 1e-10,
            atol: 1e-12,
            ..PdeOptions::default()
        };
        let limit = solve_limit_system(&table, &h, 0.25, grid, &times, &opts).unwrap();
        let lev = FieldEvaluator::new(&limit);
        let cfg = base_cfg(128);
        let ens = simulate_forward(&cfg, &spec, &ev).unwrap();
        let m = ens.convergence_metrics(&spec, &cells, &ev, &lev).unwrap();
        assert!(m.e_sup_y2.value < 1e-6, "sup metric {}", m.e_sup_y2.value);
        assert!(m.e_int_z2.value < 1e-6, "int metric {}", m.e_int_z2.value);
        assert!(m.local_e_sup_y2.value <= m.e_sup_y2.value + 1e-18);
    }

    #[test]
    fn ergodic_statistic_constant_phi() {
        let (spec, ct, _, field) = constant_setup();
        let ev = FieldEvaluator::new(&field);
        let cells = CellEvaluator::new(&ct);
        let cfg = base_cfg(16);
        let ens = simulate_forward(&cfg, &spec, &ev).unwrap();
        let phi = Expr::parse("0.7").unwrap();
        let stat = ens
            .ergodic_average(&spec, &cells, &ev, &ct, &phi, GSource::Constant(0.0))
            .unwrap();
        assert!(stat.value <= 1e-10, "constant phi statistic {}", stat.value);
    }

    #[test]
    fn martingale_qv_constant_diffusion() {
        // σ ≡ 1, b̂ = 0: [N]_T = T exactly
        let (spec, ct, _, field) = constant_setup();
        let ev = FieldEvaluator::new(&field);
        let cells = CellEvaluator::new(&ct);
        let cfg = base_cfg(8);
        let mut ens = simulate_forward(&cfg, &spec, &ev).unwrap();
        let summary = ens.martingale_diagnostics(&spec, &cells, &ev).unwrap();
        assert!((summary.mean_qv_n_t.value - 0.25).abs() < 1e-12);
        assert!(summary.mean_qv_n_t.se < 1e-15);
    }

    #[test]
    fn limit_ensemble_is_coupled_and_consistent() {
        let (spec, _, table, field) = constant_setup();
        // for the constant preset the limit system equals the ε-system
        let ev = FieldEvaluator::new(&field);
        let cfg = base_cfg(512);
        let ens = simulate_forward(&cfg, &spec, &ev).unwrap();
        let lim = simulate_limit_ensemble(&cfg, &spec, &table, &ev).unwrap();
        // pathwise identical dynamics under shared increments
        let s_last = ens.n_stored() - 1;
        let xs: Vec<f64> = (0..cfg.n_paths)
            .map(|p| ens.at(&ens.x, p, s_last, 1, 0))
            .collect();
        let fwd = mean_se(&xs);
        assert!((fwd.value - lim.e_x_t.value).abs() < 1e-10);
        // Feynman-Kac: Y_0 = E H(X_T) within 3 SE
        let y0 = ens.y_t0()[0];
        let fk = ens.mean_terminal_y()[0];
        assert!(
            (y0 - fk.value).abs() <= 3.0 * fk.se,
            "y0 {} vs E H(X_T) {} ± {}",
            y0,
            fk.value,
            fk.se
        );
    }

    #[test]
    fn monitors_bounded_by_field() {
        let (spec, _, _, field) = constant_setup();
        let ev = FieldEvaluator::new(&field);
        let cfg = base_cfg(64);
        let ens = simulate_forward(&cfg, &spec, &ev).unwrap();
        let rep = ens.estimate_monitors();
        assert!(rep.sup_abs_y <= field.stats.sup_abs + 1e-12);
        assert!(rep.e_sup_x2.value.is_finite());
        assert!(rep.e_int_z2_sq.value.is_finite());
    }

    #[test]
    fn decay_verdict_rules() {
        let p = |v: f64, se: f64| EnsembleStat { value: v, se };
        assert_eq!(
            monotone_decay_verdict(&[p(1.0, 0.01), p(0.5, 0.01), p(0.2, 0.01)]),
            DecayVerdict::Pass
        );
        assert_eq!(
            monotone_decay_verdict(&[p(1.0, 0.3), p(0.9, 0.3)]),
            DecayVerdict::Abstain
        );
        assert_eq!(
            monotone_decay_verdict(&[p(1.0, 0.01), p(1.5, 0.01)]),
            DecayVerdict::Fail
        );
    }

    #[test]
    fn mean_se_basics() {
        let s = mean_se(&[1.0, 2.0, 3.0, 4.0]);
        assert!((s.value - 2.5).abs() < 1e-15);
        assert!((s.se - (5.0f64 / 3.0 / 4.0).sqrt()).abs() < 1e-12);
    }
}

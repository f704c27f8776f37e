//! Effective (homogenized) coefficients.
//!
//! Pointwise integrands, with `z` the Q×P gradient argument and every cell
//! field evaluated at `(x, y)`:
//!
//! ```text
//! u(x,y,z) = (I + ∇ₓb̂) c(x,y, z + ∇ₓê) − (∇_y b̂) e + ∇²ₓᵧb̂ [a (z + ∇ₓê)*]
//! v(x,y,z) = f(x,y, z + ∇ₓê) + ∇ₓê c(x,y, z + ∇ₓê) − (∇_y ê) e + ∇²ₓᵧê [a (z + ∇ₓê)*]
//! α(x,y)   = (I + ∇ₓb̂) a (I + ∇ₓb̂)*
//! ```
//!
//! with the index convention `(∇²ₓᵧb̂ M)_l = Σ_{i,j} ∂²b̂_l/∂x_i∂y_j M_{i,j}`
//! for a P×Q matrix `M = a (z + ∇ₓê)*`. Component ranges are checked at
//! build time; a dimension mismatch is an error, never a silent guess.
//!
//! The averaged coefficients receive a transformed gradient argument:
//!
//! ```text
//! ū(y,z) = ∫ u(x, y, z (I + ∇ₓb̂)(x,y)) p(x,y) dx        (v̄ likewise)
//! ᾱ(y)   = ∫ α(x,y) p(x,y) dx
//! ```
//!
//! and are tabulated over a rectangular (y, z) box with multilinear
//! interpolation; queries outside the box clamp to the boundary and bump an
//! extrapolation counter surfaced in reports. `ᾱ^{1/2}` is the symmetric
//! square root via eigendecomposition.

use crate::cell::{CellSolution, CellTable, CellValues, DensityMollifier};
use crate::coeffs::CoefficientSpec;
use crate::error::{HomError, Result};
use crate::torus::{interpolate, TorusGrid};
use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::Serialize;
use sha2::{Digest, Sha256};
use std::sync::atomic::{AtomicU64, Ordering};

/// `z_eff = z + ∇ₓê` (row-major Q×P).
pub fn shifted_gradient(cells: &CellValues, z: &[f64], out: &mut [f64]) {
    for (o, (zv, de)) in out.iter_mut().zip(z.iter().zip(&cells.dx_ehat)) {
        *o = zv + de;
    }
}

/// Allocation-free evaluation of (u, v, α) from pointwise ingredients.
///
/// `a` is the P×P diffusion matrix, `e` the Q-vector, `cv`/`fv` are `c` and
/// `f` already evaluated at `z_eff = z + ∇ₓê`.
#[allow(clippy::too_many_arguments)]
pub fn effective_integrands(
    p: usize,
    q: usize,
    a: &[f64],
    e: &[f64],
    cv: &[f64],
    fv: &[f64],
    cells: &CellValues,
    z_eff: &[f64],
    u_out: &mut [f64],
    v_out: &mut [f64],
    alpha_out: Option<&mut [f64]>,
) {
    // M[i][j] = Σ_l a[i,l] z_eff[j,l]  (P×Q)
    let mut m = [0.0f64; 16];
    debug_assert!(p * q <= 16);
    for i in 0..p {
        for j in 0..q {
            let mut acc = 0.0;
            for l in 0..p {
                acc += a[i * p + l] * z_eff[j * p + l];
            }
            m[i * q + j] = acc;
        }
    }
    for l in 0..p {
        let mut acc = cv[l];
        for i in 0..p {
            acc += cells.dx_bhat[l * p + i] * cv[i];
        }
        for j in 0..q {
            acc -= cells.dy_bhat[l * q + j] * e[j];
        }
        for i in 0..p {
            for j in 0..q {
                acc += cells.dxy_bhat[l * p * q + i * q + j] * m[i * q + j];
            }
        }
        u_out[l] = acc;
    }
    for l in 0..q {
        let mut acc = fv[l];
        for i in 0..p {
            acc += cells.dx_ehat[l * p + i] * cv[i];
        }
        for j in 0..q {
            acc -= cells.dy_ehat[l * q + j] * e[j];
        }
        for i in 0..p {
            for j in 0..q {
                acc += cells.dxy_ehat[l * p * q + i * q + j] * m[i * q + j];
            }
        }
        v_out[l] = acc;
    }
    if let Some(alpha) = alpha_out {
        // α = (I + ∇ₓb̂) a (I + ∇ₓb̂)*
        for i in 0..p {
            for j in 0..p {
                let mut acc = 0.0;
                for k in 0..p {
                    let ib_ik = if i == k { 1.0 } else { 0.0 } + cells.dx_bhat[i * p + k];
                    for l in 0..p {
                        let ib_jl = if j == l { 1.0 } else { 0.0 } + cells.dx_bhat[j * p + l];
                        acc += ib_ik * a[k * p + l] * ib_jl;
                    }
                }
                alpha[i * p + j] = acc;
            }
        }
    }
}

/// Extract all cell fields at grid node `idx` (no interpolation).
pub fn cell_values_at_node(sol: &CellSolution, idx: usize, out: &mut CellValues) {
    let copy = |f: &crate::torus::PeriodicField, dst: &mut Vec<f64>| {
        for (k, c) in f.comps().iter().enumerate() {
            dst[k] = c[idx];
        }
    };
    out.p = sol.p.comp(0)[idx];
    copy(&sol.bhat, &mut out.bhat);
    copy(&sol.ehat, &mut out.ehat);
    copy(&sol.grad_x_bhat, &mut out.dx_bhat);
    copy(&sol.grad_x_ehat, &mut out.dx_ehat);
    copy(&sol.dy_bhat, &mut out.dy_bhat);
    copy(&sol.dy_ehat, &mut out.dy_ehat);
    copy(&sol.dyy_bhat, &mut out.dyy_bhat);
    copy(&sol.dyy_ehat, &mut out.dyy_ehat);
    copy(&sol.dxy_bhat, &mut out.dxy_bhat);
    copy(&sol.dxy_ehat, &mut out.dxy_ehat);
}

/// Cell fields at an arbitrary `x` by trigonometric interpolation.
fn cell_values_at_point(sol: &CellSolution, x: &[f64], out: &mut CellValues) {
    let interp_all = |f: &crate::torus::PeriodicField, dst: &mut Vec<f64>| {
        for k in 0..f.n_comp() {
            dst[k] = interpolate(f, k, x);
        }
    };
    out.p = interpolate(&sol.p, 0, x);
    interp_all(&sol.bhat, &mut out.bhat);
    interp_all(&sol.ehat, &mut out.ehat);
    interp_all(&sol.grad_x_bhat, &mut out.dx_bhat);
    interp_all(&sol.grad_x_ehat, &mut out.dx_ehat);
    interp_all(&sol.dy_bhat, &mut out.dy_bhat);
    interp_all(&sol.dy_ehat, &mut out.dy_ehat);
    interp_all(&sol.dyy_bhat, &mut out.dyy_bhat);
    interp_all(&sol.dyy_ehat, &mut out.dyy_ehat);
    interp_all(&sol.dxy_bhat, &mut out.dxy_bhat);
    interp_all(&sol.dxy_ehat, &mut out.dxy_ehat);
}

/// Pointwise `(u, v, α)` at `(x, y = cell.y, z)`; cell fields are supplied by
/// trigonometric interpolation at `x`.
pub fn pointwise_integrands(
    cell: &CellSolution,
    spec: &CoefficientSpec,
    x: &[f64],
    z: &[f64],
) -> Result<(DVector<f64>, DVector<f64>, DMatrix<f64>)> {
    let p = spec.p_dim;
    let q = spec.q_dim;
    if z.len() != q * p {
        return Err(HomError::usage("z must be a Q×P row-major gradient"));
    }
    let mut cells = CellValues::sized(p, q);
    cell_values_at_point(cell, x, &mut cells);
    let a = spec.eval_a(x, &cell.y);
    let e = spec.eval_e(x, &cell.y);
    let mut z_eff = vec![0.0; q * p];
    shifted_gradient(&cells, z, &mut z_eff);
    let cv = spec.eval_c(x, &cell.y, &z_eff);
    let fv = spec.eval_f(x, &cell.y, &z_eff);
    let mut u = vec![0.0; p];
    let mut v = vec![0.0; q];
    let mut alpha = vec![0.0; p * p];
    effective_integrands(
        p,
        q,
        a.as_slice(),
        e.as_slice(),
        cv.as_slice(),
        fv.as_slice(),
        &cells,
        &z_eff,
        &mut u,
        &mut v,
        Some(&mut alpha),
    );
    Ok((
        DVector::from_vec(u),
        DVector::from_vec(v),
        DMatrix::from_fn(p, p, |i, j| alpha[i * p + j]),
    ))
}

/// `(ū(y,z), v̄(y,z), ᾱ(y))` by quadrature of the pointwise integrands
/// against `p(·, y)`; the integrand receives the transformed gradient
/// `z (I + ∇ₓb̂)(x, y)`, not `z` itself.
pub fn average_coefficients(
    cell: &CellSolution,
    spec: &CoefficientSpec,
    z: &[f64],
) -> Result<(DVector<f64>, DVector<f64>, DMatrix<f64>)> {
    let p = spec.p_dim;
    let q = spec.q_dim;
    if z.len() != q * p {
        return Err(HomError::usage("z must be a Q×P row-major gradient"));
    }
    let grid = cell.p.grid;
    let nt = grid.n_total();
    let w = grid.weight();
    let y = &cell.y;
    let mut cells = CellValues::sized(p, q);
    let mut u_acc = vec![0.0; p];
    let mut v_acc = vec![0.0; q];
    let mut al_acc = vec![0.0; p * p];
    let mut u_buf = vec![0.0; p];
    let mut v_buf = vec![0.0; q];
    let mut al_buf = vec![0.0; p * p];
    let mut z_arg = vec![0.0; q * p];
    let mut z_eff = vec![0.0; q * p];
    for idx in 0..nt {
        let x = grid.node(idx);
        cell_values_at_node(cell, idx, &mut cells);
        // z_arg = z (I + ∇ₓb̂)
        for j in 0..q {
            for i in 0..p {
                let mut acc = z[j * p + i];
                for k in 0..p {
                    acc += z[j * p + k] * cells.dx_bhat[k * p + i];
                }
                z_arg[j * p + i] = acc;
            }
        }
        shifted_gradient(&cells, &z_arg, &mut z_eff);
        let a = spec.eval_a(&x, y);
        let e = spec.eval_e(&x, y);
        let cv = spec.eval_c(&x, y, &z_eff);
        let fv = spec.eval_f(&x, y, &z_eff);
        effective_integrands(
            p,
            q,
            a.as_slice(),
            e.as_slice(),
            cv.as_slice(),
            fv.as_slice(),
            &cells,
            &z_eff,
            &mut u_buf,
            &mut v_buf,
            Some(&mut al_buf),
        );
        let pw = cells.p * w;
        for l in 0..p {
            u_acc[l] += u_buf[l] * pw;
        }
        for l in 0..q {
            v_acc[l] += v_buf[l] * pw;
        }
        for k in 0..p * p {
            al_acc[k] += al_buf[k] * pw;
        }
    }
    Ok((
        DVector::from_vec(u_acc),
        DVector::from_vec(v_acc),
        DMatrix::from_fn(p, p, |i, j| al_acc[i * p + j]),
    ))
}

/// Tabulated effective coefficients over a rectangular (y, z) box with
/// multilinear interpolation; immutable and safe for concurrent reads.
pub struct HomogenizedTable {
    pub p_dim: usize,
    pub q_dim: usize,
    pub y_axes: Vec<Vec<f64>>,
    pub z_axes: Vec<Vec<f64>>,
    /// `[y_flat][z_flat][P]`
    ubar: Vec<f64>,
    /// `[y_flat][z_flat][Q]`
    vbar: Vec<f64>,
    /// `[y_flat][P×P]`
    albar: Vec<f64>,
    /// `[y_flat][P×P]`
    sqrt_albar: Vec<f64>,
    /// content hash of the cell table this was built from
    pub provenance: String,
    extrapolations: AtomicU64,
}

fn axis_linspace(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    if n == 1 {
        return vec![0.5 * (lo + hi)];
    }
    (0..n)
        .map(|i| lo + (hi - lo) * i as f64 / (n - 1) as f64)
        .collect()
}

fn unflatten(axes: &[Vec<f64>], mut idx: usize) -> Vec<usize> {
    let mut out = vec![0; axes.len()];
    for d in (0..axes.len()).rev() {
        out[d] = idx % axes[d].len();
        idx /= axes[d].len();
    }
    out
}

fn locate_clamped(axis: &[f64], v: f64) -> (usize, f64, bool) {
    let n = axis.len();
    if n == 1 {
        return (0, 0.0, (v - axis[0]).abs() > 1e-12);
    }
    if v <= axis[0] {
        return (0, 0.0, v < axis[0] - 1e-12);
    }
    if v >= axis[n - 1] {
        return (n - 2, 1.0, v > axis[n - 1] + 1e-12);
    }
    let mut lo = 0;
    let mut hi = n - 1;
    while hi - lo > 1 {
        let mid = (lo + hi) / 2;
        if axis[mid] <= v {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    ((lo), (v - axis[lo]) / (axis[lo + 1] - axis[lo]), false)
}

/// Content hash of a cell table (y-grid plus density and corrector data).
pub fn cell_table_hash(table: &CellTable) -> String {
    let mut hasher = Sha256::new();
    for axis in &table.y_axes {
        for v in axis {
            hasher.update(v.to_le_bytes());
        }
    }
    for e in &table.entries {
        for f in [&e.p, &e.bhat, &e.ehat] {
            for c in f.comps() {
                for v in c.iter() {
                    hasher.update(v.to_le_bytes());
                }
            }
        }
    }
    hex::encode(hasher.finalize())
}

/// Build the table: averages at every (y, z) node, `ᾱ^{1/2}` by symmetric
/// eigendecomposition. A non-PSD `ᾱ` is a hard error naming the y node.
pub fn build_table(
    cell_table: &CellTable,
    spec: &CoefficientSpec,
    z_min: f64,
    z_max: f64,
    z_nodes: usize,
) -> Result<HomogenizedTable> {
    let p = spec.p_dim;
    let q = spec.q_dim;
    let zd = q * p;
    let y_axes = cell_table.y_axes.clone();
    let z_axes: Vec<Vec<f64>> = (0..zd).map(|_| axis_linspace(z_min, z_max, z_nodes)).collect();
    let ny: usize = y_axes.iter().map(|a| a.len()).product();
    let nz: usize = z_axes.iter().map(|a| a.len()).product();

    // averages over (y, z) nodes, parallel over y
    let per_y: Vec<Result<(Vec<f64>, Vec<f64>, Vec<f64>)>> = (0..ny)
        .into_par_iter()
        .map(|yi| {
            let sol = &cell_table.entries[yi];
            let mut u_all = vec![0.0; nz * p];
            let mut v_all = vec![0.0; nz * q];
            let mut z = vec![0.0; zd];
            for zi in 0..nz {
                let zm = unflatten(&z_axes, zi);
                for d in 0..zd {
                    z[d] = z_axes[d][zm[d]];
                }
                let (u, v, _) = average_coefficients(sol, spec, &z)?;
                u_all[zi * p..(zi + 1) * p].copy_from_slice(u.as_slice());
                v_all[zi * q..(zi + 1) * q].copy_from_slice(v.as_slice());
            }
            let (_, _, al) = average_coefficients(sol, spec, &vec![0.0; zd])?;
            Ok((u_all, v_all, al.as_slice().to_vec()))
        })
        .collect();

    let mut ubar = vec![0.0; ny * nz * p];
    let mut vbar = vec![0.0; ny * nz * q];
    let mut albar = vec![0.0; ny * p * p];
    let mut sqrt_albar = vec![0.0; ny * p * p];
    for (yi, r) in per_y.into_iter().enumerate() {
        let (u_all, v_all, al) = r?;
        ubar[yi * nz * p..(yi + 1) * nz * p].copy_from_slice(&u_all);
        vbar[yi * nz * q..(yi + 1) * nz * q].copy_from_slice(&v_all);
        // nalgebra stores column-major; α is symmetric so the slice order is safe
        let alm = DMatrix::from_column_slice(p, p, &al);
        let eig = nalgebra::SymmetricEigen::new(alm.clone());
        let min_eig = eig.eigenvalues.min();
        if min_eig <= 0.0 {
            return Err(HomError::Solver(format!(
                "effective diffusion not positive definite at y node {:?} (min eig {min_eig:.3e}); cell solve defect",
                cell_table.entries[yi].y
            )));
        }
        let sq = &eig.eigenvectors
            * DMatrix::from_diagonal(&eig.eigenvalues.map(f64::sqrt))
            * eig.eigenvectors.transpose();
        for i in 0..p {
            for j in 0..p {
                albar[yi * p * p + i * p + j] = alm[(i, j)];
                sqrt_albar[yi * p * p + i * p + j] = sq[(i, j)];
            }
        }
    }
    Ok(HomogenizedTable {
        p_dim: p,
        q_dim: q,
        y_axes,
        z_axes,
        ubar,
        vbar,
        albar,
        sqrt_albar,
        provenance: cell_table_hash(cell_table),
        extrapolations: AtomicU64::new(0),
    })
}

/// Serializable raw contents of a [`HomogenizedTable`] (cache interchange).
#[derive(Debug, Clone, Serialize, serde::Deserialize)]
pub struct TableParts {
    pub p_dim: usize,
    pub q_dim: usize,
    pub y_axes: Vec<Vec<f64>>,
    pub z_axes: Vec<Vec<f64>>,
    pub ubar: Vec<f64>,
    pub vbar: Vec<f64>,
    pub albar: Vec<f64>,
    pub sqrt_albar: Vec<f64>,
    pub provenance: String,
}

impl HomogenizedTable {
    pub fn to_parts(&self) -> TableParts {
        TableParts {
            p_dim: self.p_dim,
            q_dim: self.q_dim,
            y_axes: self.y_axes.clone(),
            z_axes: self.z_axes.clone(),
            ubar: self.ubar.clone(),
            vbar: self.vbar.clone(),
            albar: self.albar.clone(),
            sqrt_albar: self.sqrt_albar.clone(),
            provenance: self.provenance.clone(),
        }
    }

    pub fn from_parts(parts: TableParts) -> HomogenizedTable {
        HomogenizedTable {
            p_dim: parts.p_dim,
            q_dim: parts.q_dim,
            y_axes: parts.y_axes,
            z_axes: parts.z_axes,
            ubar: parts.ubar,
            vbar: parts.vbar,
            albar: parts.albar,
            sqrt_albar: parts.sqrt_albar,
            provenance: parts.provenance,
            extrapolations: AtomicU64::new(0),
        }
    }

    /// Synthetic table from closures (test harnesses, analytic oracles).
    #[allow(clippy::too_many_arguments)]
    pub fn from_fn(
        p_dim: usize,
        q_dim: usize,
        y_axes: Vec<Vec<f64>>,
        z_axes: Vec<Vec<f64>>,
        ubar_fn: impl Fn(&[f64], &[f64]) -> Vec<f64>,
        vbar_fn: impl Fn(&[f64], &[f64]) -> Vec<f64>,
        albar_fn: impl Fn(&[f64]) -> Vec<f64>,
    ) -> Result<HomogenizedTable> {
        let p = p_dim;
        let q = q_dim;
        let zd = q * p;
        let ny: usize = y_axes.iter().map(|a| a.len()).product();
        let nz: usize = z_axes.iter().map(|a| a.len()).product();
        let mut ubar = vec![0.0; ny * nz * p];
        let mut vbar = vec![0.0; ny * nz * q];
        let mut albar = vec![0.0; ny * p * p];
        let mut sqrt_albar = vec![0.0; ny * p * p];
        for yi in 0..ny {
            let ym = unflatten(&y_axes, yi);
            let y: Vec<f64> = ym.iter().zip(&y_axes).map(|(&i, a)| a[i]).collect();
            for zi in 0..nz {
                let zm = unflatten(&z_axes, zi);
                let z: Vec<f64> = zm.iter().zip(&z_axes).map(|(&i, a)| a[i]).collect();
                let u = ubar_fn(&y, &z);
                let v = vbar_fn(&y, &z);
                ubar[(yi * nz + zi) * p..(yi * nz + zi + 1) * p].copy_from_slice(&u);
                vbar[(yi * nz + zi) * q..(yi * nz + zi + 1) * q].copy_from_slice(&v);
            }
            let al = albar_fn(&y);
            let alm = DMatrix::from_column_slice(p, p, &al);
            let eig = nalgebra::SymmetricEigen::new(alm.clone());
            if eig.eigenvalues.min() <= 0.0 {
                return Err(HomError::Solver(format!(
                    "synthetic effective diffusion not positive definite at y = {y:?}"
                )));
            }
            let sq = &eig.eigenvectors
                * DMatrix::from_diagonal(&eig.eigenvalues.map(f64::sqrt))
                * eig.eigenvectors.transpose();
            for i in 0..p {
                for j in 0..p {
                    albar[yi * p * p + i * p + j] = alm[(i, j)];
                    sqrt_albar[yi * p * p + i * p + j] = sq[(i, j)];
                }
            }
            let _ = zd;
        }
        Ok(HomogenizedTable {
            p_dim: p,
            q_dim: q,
            y_axes,
            z_axes,
            ubar,
            vbar,
            albar,
            sqrt_albar,
            provenance: "synthetic".into(),
            extrapolations: AtomicU64::new(0),
        })
    }

    pub fn extrapolation_count(&self) -> u64 {
        self.extrapolations.load(Ordering::Relaxed)
    }

    fn y_corners(&self, y: &[f64]) -> Vec<(usize, f64)> {
        let mut clamped = false;
        let locs: Vec<(usize, f64)> = self
            .y_axes
            .iter()
            .zip(y)
            .map(|(axis, &v)| {
                let (b, t, c) = locate_clamped(axis, v);
                clamped |= c;
                (b, t)
            })
            .collect();
        if clamped {
            self.extrapolations.fetch_add(1, Ordering::Relaxed);
        }
        corner_list(&self.y_axes, &locs)
    }

    fn z_corners(&self, z: &[f64]) -> Vec<(usize, f64)> {
        let mut clamped = false;
        let locs: Vec<(usize, f64)> = self
            .z_axes
            .iter()
            .zip(z)
            .map(|(axis, &v)| {
                let (b, t, c) = locate_clamped(axis, v);
                clamped |= c;
                (b, t)
            })
            .collect();
        if clamped {
            self.extrapolations.fetch_add(1, Ordering::Relaxed);
        }
        corner_list(&self.z_axes, &locs)
    }

    /// `ᾱ(y)` (row-major P×P into `out`).
    pub fn alpha_bar_into(&self, y: &[f64], out: &mut [f64]) {
        let pp = self.p_dim * self.p_dim;
        out[..pp].fill(0.0);
        for (yi, w) in self.y_corners(y) {
            for k in 0..pp {
                out[k] += w * self.albar[yi * pp + k];
            }
        }
    }

    pub fn alpha_bar(&self, y: &[f64]) -> DMatrix<f64> {
        let p = self.p_dim;
        let mut buf = vec![0.0; p * p];
        self.alpha_bar_into(y, &mut buf);
        DMatrix::from_fn(p, p, |i, j| buf[i * p + j])
    }

    pub fn sqrt_alpha_bar_into(&self, y: &[f64], out: &mut [f64]) {
        let pp = self.p_dim * self.p_dim;
        out[..pp].fill(0.0);
        for (yi, w) in self.y_corners(y) {
            for k in 0..pp {
                out[k] += w * self.sqrt_albar[yi * pp + k];
            }
        }
    }

    pub fn sqrt_alpha_bar(&self, y: &[f64]) -> DMatrix<f64> {
        let p = self.p_dim;
        let mut buf = vec![0.0; p * p];
        self.sqrt_alpha_bar_into(y, &mut buf);
        DMatrix::from_fn(p, p, |i, j| buf[i * p + j])
    }

    /// `ū(y, z)` and `v̄(y, z)` in one lookup (shared corners).
    pub fn u_v_bar_into(&self, y: &[f64], z: &[f64], u_out: &mut [f64], v_out: &mut [f64]) {
        let p = self.p_dim;
        let q = self.q_dim;
        let nz: usize = self.z_axes.iter().map(|a| a.len()).product();
        u_out[..p].fill(0.0);
        v_out[..q].fill(0.0);
        let yc = self.y_corners(y);
        let zc = self.z_corners(z);
        for &(yi, wy) in &yc {
            for &(zi, wz) in &zc {
                let w = wy * wz;
                let ub = (yi * nz + zi) * p;
                for l in 0..p {
                    u_out[l] += w * self.ubar[ub + l];
                }
                let vb = (yi * nz + zi) * q;
                for l in 0..q {
                    v_out[l] += w * self.vbar[vb + l];
                }
            }
        }
    }

    pub fn u_bar(&self, y: &[f64], z: &[f64]) -> DVector<f64> {
        let mut u = vec![0.0; self.p_dim];
        let mut v = vec![0.0; self.q_dim];
        self.u_v_bar_into(y, z, &mut u, &mut v);
        DVector::from_vec(u)
    }

    pub fn v_bar(&self, y: &[f64], z: &[f64]) -> DVector<f64> {
        let mut u = vec![0.0; self.p_dim];
        let mut v = vec![0.0; self.q_dim];
        self.u_v_bar_into(y, z, &mut u, &mut v);
        DVector::from_vec(v)
    }

    /// Sup of |v̄| over table nodes (used by maximum-principle monitors).
    pub fn max_abs_vbar(&self) -> f64 {
        self.vbar.iter().fold(0.0f64, |m, v| m.max(v.abs()))
    }

    pub fn max_abs_ubar(&self) -> f64 {
        self.ubar.iter().fold(0.0f64, |m, v| m.max(v.abs()))
    }

    pub fn max_abs_albar(&self) -> f64 {
        self.albar.iter().fold(0.0f64, |m, v| m.max(v.abs()))
    }

    /// Minimum eigenvalue of `ᾱ` over y nodes with its location.
    pub fn min_alpha_eigenvalue(&self) -> (f64, Vec<f64>) {
        let p = self.p_dim;
        let ny: usize = self.y_axes.iter().map(|a| a.len()).product();
        let mut min = f64::INFINITY;
        let mut at = vec![];
        for yi in 0..ny {
            let alm = DMatrix::from_fn(p, p, |i, j| self.albar[yi * p * p + i * p + j]);
            let eig = nalgebra::SymmetricEigen::new(alm).eigenvalues.min();
            if eig < min {
                min = eig;
                let ym = unflatten(&self.y_axes, yi);
                at = ym.iter().zip(&self.y_axes).map(|(&i, a)| a[i]).collect();
            }
        }
        (min, at)
    }
}

fn corner_list(axes: &[Vec<f64>], locs: &[(usize, f64)]) -> Vec<(usize, f64)> {
    let d = axes.len();
    let mut out = Vec::with_capacity(1 << d);
    for mask in 0..(1usize << d) {
        let mut idx = 0;
        let mut w = 1.0;
        for k in 0..d {
            let len = axes[k].len();
            let (base, t) = locs[k];
            let hi = (mask >> k) & 1 == 1;
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

#[derive(Debug, Clone, Serialize)]
pub struct EllipticityReport {
    pub min_eigenvalue: f64,
    pub at_y: Vec<f64>,
    pub margin: f64,
    pub passed: bool,
}

/// Assert `ᾱ(y)` is uniformly elliptic over the table's y nodes.
pub fn check_ellipticity(table: &HomogenizedTable, margin: f64) -> EllipticityReport {
    let (min_eig, at_y) = table.min_alpha_eigenvalue();
    EllipticityReport {
        min_eigenvalue: min_eig,
        at_y,
        margin,
        passed: min_eig > margin,
    }
}

/// Pointwise `α_n(x, y, y')` = `(p_m(x,y) / p_m(x,y')) α(x,y)` with cell
/// fields multilinear in `y` and the bare `a` from the spec.
pub fn alpha_n_pointwise(
    cell_table: &CellTable,
    spec: &CoefficientSpec,
    m: f64,
    x: &[f64],
    y: &[f64],
    y2: &[f64],
) -> Result<DMatrix<f64>> {
    let moll = DensityMollifier::new(cell_table, m)?;
    let p = spec.p_dim;
    let pm_y = interp_at(&moll.field(y)?, cell_table.grid, x);
    let pm_y2 = interp_at(&moll.field(y2)?, cell_table.grid, x);
    if pm_y2 < 1e-6 {
        return Err(HomError::non_finite(
            "mollified density ratio (denominator below positivity floor)",
            format!("x={x:?}, y'={y2:?}"),
        ));
    }
    // α(x, y) with ∇ₓb̂ interpolated in y
    let corners = cell_table.corners(y);
    let mut dxb = vec![0.0; p * p];
    for &(ci, w) in &corners {
        let f = &cell_table.entries[ci].grad_x_bhat;
        for k in 0..p * p {
            dxb[k] += w * interpolate(f, k, x);
        }
    }
    let a = spec.eval_a(x, y);
    let mut alpha = DMatrix::zeros(p, p);
    for i in 0..p {
        for j in 0..p {
            let mut acc = 0.0;
            for k in 0..p {
                let ib_ik = if i == k { 1.0 } else { 0.0 } + dxb[i * p + k];
                for l in 0..p {
                    let ib_jl = if j == l { 1.0 } else { 0.0 } + dxb[j * p + l];
                    acc += ib_ik * a[(k, l)] * ib_jl;
                }
            }
            alpha[(i, j)] = acc;
        }
    }
    Ok(alpha * (pm_y / pm_y2))
}

fn interp_at(values: &DVector<f64>, grid: TorusGrid, x: &[f64]) -> f64 {
    let f = crate::torus::PeriodicField::scalar(grid, values.clone()).expect("finite field");
    interpolate(&f, 0, x)
}

/// `ᾱ_n(y, y') = ∫ α_n(x, y, y') p(x, y') dx` by nodal quadrature.
pub fn alpha_n_bar(
    cell_table: &CellTable,
    spec: &CoefficientSpec,
    m: f64,
    y: &[f64],
    y2: &[f64],
) -> Result<DMatrix<f64>> {
    let moll = DensityMollifier::new(cell_table, m)?;
    let p = cell_table.p_dim;
    let grid = cell_table.grid;
    let nt = grid.n_total();
    let w = grid.weight();
    let pm_y = moll.field(y)?;
    let pm_y2 = moll.field(y2)?;
    let p_y2 = cell_table.density_at_nodes(y2);
    // ∇ₓb̂ interpolated in y at every node
    let corners = cell_table.corners(y);
    let mut out = DMatrix::zeros(p, p);
    let mut dxb = vec![0.0; p * p];
    for idx in 0..nt {
        let x = grid.node(idx);
        dxb.fill(0.0);
        for &(ci, cw) in &corners {
            let f = &cell_table.entries[ci].grad_x_bhat;
            for k in 0..p * p {
                dxb[k] += cw * f.comp(k)[idx];
            }
        }
        if pm_y2[idx] < 1e-6 {
            return Err(HomError::non_finite(
                "mollified density ratio (denominator below positivity floor)",
                format!("node {idx}, y'={y2:?}"),
            ));
        }
        let a = spec.eval_a(&x, y);
        let ratio = pm_y[idx] / pm_y2[idx];
        for i in 0..p {
            for j in 0..p {
                let mut acc = 0.0;
                for k in 0..p {
                    let ib_ik = if i == k { 1.0 } else { 0.0 } + dxb[i * p + k];
                    for l in 0..p {
                        let ib_jl = if j == l { 1.0 } else { 0.0 } + dxb[j * p + l];
                        acc += ib_ik * a[(k, l)] * ib_jl;
                    }
                }
                out[(i, j)] += w * ratio * acc * p_y2[idx];
            }
        }
    }
    Ok(out)
}

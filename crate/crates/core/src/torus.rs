//! Uniform periodic grids on the P-torus, Fourier-spectral differentiation
//! and quadrature, and nodal assembly of the frozen-parameter generator
//!
//! ```text
//!     L_y = 1/2 Σ_ij a_ij(·, y) ∂²/∂x_i∂x_j + Σ_i b_i(·, y) ∂/∂x_i
//! ```
//!
//! as a dense matrix acting on nodal values. The discrete adjoint is the
//! plain transpose: quadrature weights are uniform, so the transpose is the
//! exact adjoint for the discrete inner product `<u, v> = N^{-P} Σ u_i v_i`.
//!
//! Differentiation matrices are the classical trigonometric-collocation
//! circulants, rescaled from period 2π to period 1. Their diagonals are set
//! to the negative off-diagonal row sum so that constants are annihilated to
//! machine precision, which the invariant-density solves rely on.

use crate::coeffs::CoefficientSpec;
use crate::error::{HomError, Result};
use nalgebra::{DMatrix, DVector};
use rustfft::num_complex::Complex;
use rustfft::FftPlanner;
use std::f64::consts::PI;

/// Largest dense operator we are willing to assemble (desk scale).
pub const MAX_DENSE_NODES: usize = 4096;

/// Uniform grid on `[0,1)^P` with `n` nodes per axis, node coordinates
/// `k / n`. Wrap-around indexing: index `n` is the same node as index 0.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TorusGrid {
    p_dim: usize,
    n: usize,
}

impl TorusGrid {
    pub fn new(p_dim: usize, n: usize) -> Result<Self> {
        if p_dim == 0 {
            return Err(HomError::Grid("P must be positive".into()));
        }
        if n < 8 || n % 2 != 0 {
            return Err(HomError::Grid(format!(
                "points-per-axis must be even and >= 8, got {n}"
            )));
        }
        let total = n.checked_pow(p_dim as u32).ok_or_else(|| {
            HomError::Grid("grid size overflow".into())
        })?;
        if total > MAX_DENSE_NODES {
            return Err(HomError::Grid(format!(
                "{total} nodes exceeds the dense-solve limit {MAX_DENSE_NODES}"
            )));
        }
        Ok(TorusGrid { p_dim, n })
    }

    pub fn p_dim(&self) -> usize {
        self.p_dim
    }

    pub fn points_per_axis(&self) -> usize {
        self.n
    }

    pub fn n_total(&self) -> usize {
        self.n.pow(self.p_dim as u32)
    }

    /// Coordinates of flat node `idx` (axis 0 slowest).
    pub fn node(&self, idx: usize) -> Vec<f64> {
        let mut out = vec![0.0; self.p_dim];
        let mut rem = idx;
        for a in (0..self.p_dim).rev() {
            out[a] = (rem % self.n) as f64 / self.n as f64;
            rem /= self.n;
        }
        out
    }

    pub fn nodes(&self) -> Vec<Vec<f64>> {
        (0..self.n_total()).map(|i| self.node(i)).collect()
    }

    /// Uniform quadrature weight (the mean-value rule, exact for
    /// trigonometric polynomials of degree < n).
    pub fn weight(&self) -> f64 {
        1.0 / self.n_total() as f64
    }
}

/// Nodal samples of a (vector-valued) 1-periodic field.
#[derive(Debug, Clone)]
pub struct PeriodicField {
    pub grid: TorusGrid,
    comps: Vec<DVector<f64>>,
}

impl PeriodicField {
    pub fn new(grid: TorusGrid, comps: Vec<DVector<f64>>) -> Result<Self> {
        for (i, c) in comps.iter().enumerate() {
            if c.len() != grid.n_total() {
                return Err(HomError::Grid(format!(
                    "component {i} has {} values, grid has {} nodes",
                    c.len(),
                    grid.n_total()
                )));
            }
            if c.iter().any(|v| !v.is_finite()) {
                return Err(HomError::non_finite("field", format!("component {i}")));
            }
        }
        Ok(PeriodicField { grid, comps })
    }

    pub fn from_fn(grid: TorusGrid, n_comp: usize, f: impl Fn(&[f64]) -> Vec<f64>) -> Result<Self> {
        let mut comps = vec![DVector::zeros(grid.n_total()); n_comp];
        for idx in 0..grid.n_total() {
            let x = grid.node(idx);
            let vals = f(&x);
            for (c, v) in comps.iter_mut().zip(&vals) {
                c[idx] = *v;
            }
        }
        PeriodicField::new(grid, comps)
    }

    pub fn scalar(grid: TorusGrid, values: DVector<f64>) -> Result<Self> {
        PeriodicField::new(grid, vec![values])
    }

    pub fn n_comp(&self) -> usize {
        self.comps.len()
    }

    pub fn comp(&self, i: usize) -> &DVector<f64> {
        &self.comps[i]
    }

    pub fn comps(&self) -> &[DVector<f64>] {
        &self.comps
    }

    /// Torus integral per component.
    pub fn quadrature(&self) -> Vec<f64> {
        let w = self.grid.weight();
        self.comps.iter().map(|c| c.sum() * w).collect()
    }
}

/// Torus integral of a nodal vector.
pub fn quadrature_of(grid: TorusGrid, values: &DVector<f64>) -> f64 {
    values.sum() * grid.weight()
}

/// First-derivative trigonometric collocation matrix on n points of [0,1).
fn d1_matrix_1d(n: usize) -> DMatrix<f64> {
    let mut m = DMatrix::zeros(n, n);
    for j in 0..n {
        let mut rowsum = 0.0;
        for k in 0..n {
            if j == k {
                continue;
            }
            let d = j as isize - k as isize;
            let sign = if d % 2 == 0 { 1.0 } else { -1.0 };
            let v = PI * sign / (PI * d as f64 / n as f64).tan();
            m[(j, k)] = v;
            rowsum += v;
        }
        m[(j, j)] = -rowsum;
    }
    m
}

/// Second-derivative trigonometric collocation matrix on n points of [0,1).
fn d2_matrix_1d(n: usize) -> DMatrix<f64> {
    let scale = 4.0 * PI * PI;
    let mut m = DMatrix::zeros(n, n);
    for j in 0..n {
        let mut rowsum = 0.0;
        for k in 0..n {
            if j == k {
                continue;
            }
            let d = j as isize - k as isize;
            let sign = if d % 2 == 0 { 1.0 } else { -1.0 };
            let s = (PI * d as f64 / n as f64).sin();
            let v = -scale * sign / (2.0 * s * s);
            m[(j, k)] = v;
            rowsum += v;
        }
        // closed form would be -scale (n²/12 + 1/6); the negative row sum is
        // identical in exact arithmetic and keeps L·1 = 0 to roundoff
        m[(j, j)] = -rowsum;
    }
    m
}

fn identity(n: usize) -> DMatrix<f64> {
    DMatrix::identity(n, n)
}

/// Lift a one-axis operator to the full product grid (axis 0 slowest).
fn lift_axis(grid: TorusGrid, op: &DMatrix<f64>, axis: usize) -> DMatrix<f64> {
    let n = grid.points_per_axis();
    let mut out = if axis == 0 { op.clone() } else { identity(n) };
    for a in 1..grid.p_dim() {
        let factor = if a == axis { op.clone() } else { identity(n) };
        out = out.kronecker(&factor);
    }
    out
}

/// Spectral differentiation matrix along `axis`, order 1 or 2.
pub fn diff_matrix(grid: TorusGrid, axis: usize, order: usize) -> Result<DMatrix<f64>> {
    if axis >= grid.p_dim() {
        return Err(HomError::usage(format!(
            "axis {axis} out of range for P = {}",
            grid.p_dim()
        )));
    }
    let base = match order {
        1 => d1_matrix_1d(grid.points_per_axis()),
        2 => d2_matrix_1d(grid.points_per_axis()),
        _ => return Err(HomError::usage("derivative order must be 1 or 2")),
    };
    Ok(lift_axis(grid, &base, axis))
}

/// Mixed second derivative ∂²/∂x_i∂x_j (i ≠ j) as D1_i · D1_j.
pub fn mixed_diff_matrix(grid: TorusGrid, i: usize, j: usize) -> Result<DMatrix<f64>> {
    let di = diff_matrix(grid, i, 1)?;
    let dj = diff_matrix(grid, j, 1)?;
    Ok(&di * &dj)
}

/// Dense frozen-parameter generator (or its adjoint).
#[derive(Debug, Clone)]
pub struct GeneratorMatrix {
    pub mat: DMatrix<f64>,
    pub adjoint: bool,
    pub y: Vec<f64>,
    pub grid: TorusGrid,
}

/// Assemble `L_y` from nodal coefficient samples: `a_comps` is the row-major
/// P×P list of nodal vectors, `b_comps` the P nodal drift vectors.
pub fn assemble_generator_from_samples(
    grid: TorusGrid,
    a_comps: &[DVector<f64>],
    b_comps: &[DVector<f64>],
    y: Vec<f64>,
) -> Result<GeneratorMatrix> {
    let p = grid.p_dim();
    let nt = grid.n_total();
    if a_comps.len() != p * p || b_comps.len() != p {
        return Err(HomError::usage("coefficient sample count mismatch"));
    }
    for v in a_comps.iter().chain(b_comps.iter()) {
        if v.iter().any(|u| !u.is_finite()) {
            return Err(HomError::non_finite("coefficient sample", "generator assembly"));
        }
    }
    let mut mat = DMatrix::zeros(nt, nt);
    for i in 0..p {
        for j in 0..p {
            let dij = if i == j {
                diff_matrix(grid, i, 2)?
            } else {
                mixed_diff_matrix(grid, i, j)?
            };
            let coef = &a_comps[i * p + j];
            // mat += 0.5 * diag(coef) * dij, done row-wise
            for r in 0..nt {
                let s = 0.5 * coef[r];
                if s != 0.0 {
                    for cidx in 0..nt {
                        mat[(r, cidx)] += s * dij[(r, cidx)];
                    }
                }
            }
        }
    }
    for i in 0..p {
        let d1 = diff_matrix(grid, i, 1)?;
        let coef = &b_comps[i];
        for r in 0..nt {
            let s = coef[r];
            if s != 0.0 {
                for cidx in 0..nt {
                    mat[(r, cidx)] += s * d1[(r, cidx)];
                }
            }
        }
    }
    let gen = GeneratorMatrix {
        mat,
        adjoint: false,
        y,
        grid,
    };
    let resid = gen.apply_to_ones_norm();
    if resid > 1e-10 {
        return Err(HomError::Discretization(format!(
            "assembled generator does not annihilate constants: |L 1|_inf = {resid:.3e}"
        )));
    }
    Ok(gen)
}

/// Assemble `L_y` for a coefficient spec at frozen `y`.
pub fn assemble_generator(
    grid: TorusGrid,
    spec: &CoefficientSpec,
    y: &[f64],
) -> Result<GeneratorMatrix> {
    if y.iter().any(|v| !v.is_finite()) {
        return Err(HomError::non_finite("y", "assemble_generator"));
    }
    let p = grid.p_dim();
    if p != spec.p_dim {
        return Err(HomError::usage("grid dimension does not match spec"));
    }
    let nt = grid.n_total();
    let mut a_comps = vec![DVector::zeros(nt); p * p];
    let mut b_comps = vec![DVector::zeros(nt); p];
    for idx in 0..nt {
        let x = grid.node(idx);
        let a = spec.eval_a(&x, y);
        for i in 0..p {
            for j in 0..p {
                a_comps[i * p + j][idx] = a[(i, j)];
            }
        }
        let b = spec.eval_b(&x, y);
        for i in 0..p {
            b_comps[i][idx] = b[i];
        }
    }
    assemble_generator_from_samples(grid, &a_comps, &b_comps, y.to_vec())
}

impl GeneratorMatrix {
    pub fn apply_to_ones_norm(&self) -> f64 {
        let ones = DVector::from_element(self.mat.nrows(), 1.0);
        (&self.mat * ones).amax()
    }
}

/// Formal adjoint with respect to the uniform quadrature inner product: the
/// matrix transpose. Applying it twice returns the original operator.
pub fn assemble_adjoint(gen: &GeneratorMatrix) -> GeneratorMatrix {
    GeneratorMatrix {
        mat: gen.mat.transpose(),
        adjoint: !gen.adjoint,
        y: gen.y.clone(),
        grid: gen.grid,
    }
}

/// Band-limited (trigonometric) interpolant of one field component.
///
/// Stored as real cosine/sine coefficients per mode; the Nyquist mode is
/// folded into `cos(π n x)` per axis, which reproduces nodal values exactly
/// and keeps the interpolant real and 1-periodic.
#[derive(Debug, Clone)]
pub struct Spectrum {
    grid: TorusGrid,
    /// Full complex spectrum, normalized by 1/N^P, axis-0 slowest.
    coef: Vec<Complex<f64>>,
}

impl Spectrum {
    pub fn from_values(grid: TorusGrid, values: &DVector<f64>) -> Spectrum {
        let n = grid.points_per_axis();
        let nt = grid.n_total();
        assert_eq!(values.len(), nt);
        let mut data: Vec<Complex<f64>> = values.iter().map(|&v| Complex::new(v, 0.0)).collect();
        let mut planner = FftPlanner::new();
        let fft = planner.plan_fft_forward(n);
        // transform along each axis
        let p = grid.p_dim();
        let mut stride_block = nt / n; // size of the block spanned by the fastest axes
        for _axis in 0..p {
            // gather lines along the current slowest axis, transform, scatter back
            // we always transform axis 0 of the current layout then rotate axes
            let mut line = vec![Complex::new(0.0, 0.0); n];
            for block in 0..stride_block {
                for k in 0..n {
                    line[k] = data[k * stride_block + block];
                }
                fft.process(&mut line);
                for k in 0..n {
                    data[k * stride_block + block] = line[k] / n as f64;
                }
            }
            // rotate: bring next axis into slowest position
            if p > 1 {
                let mut rotated = vec![Complex::new(0.0, 0.0); nt];
                for idx in 0..nt {
                    let i0 = idx / stride_block;
                    let rest = idx % stride_block;
                    rotated[rest * n + i0] = data[idx];
                }
                data = rotated;
                stride_block = nt / n; // same value, layout rotated
            }
        }
        Spectrum { grid, coef: data }
    }

    /// Evaluate the interpolant at an arbitrary point of R^P (1-periodic).
    pub fn eval(&self, x: &[f64]) -> f64 {
        let n = self.grid.points_per_axis();
        let p = self.grid.p_dim();
        assert_eq!(x.len(), p);
        // per-axis basis values phi_k(x_a) as complex e^{2 pi i k x},
        // with Nyquist replaced by cos(pi n x)
        let mut basis: Vec<Vec<Complex<f64>>> = Vec::with_capacity(p);
        for &xa in x {
            let mut row = Vec::with_capacity(n);
            let w = Complex::from_polar(1.0, 2.0 * PI * xa);
            let mut pw = Complex::new(1.0, 0.0);
            for k in 0..n {
                let kk = if k <= n / 2 { k as isize } else { k as isize - n as isize };
                let val = if k == n / 2 {
                    Complex::new((PI * n as f64 * xa).cos(), 0.0)
                } else if kk >= 0 {
                    pw
                } else {
                    Complex::from_polar(1.0, 2.0 * PI * kk as f64 * xa)
                };
                row.push(val);
                if (k as isize) < n as isize / 2 {
                    pw *= w;
                }
            }
            basis.push(row);
        }
        let mut acc = Complex::new(0.0, 0.0);
        let nt = self.grid.n_total();
        for idx in 0..nt {
            let mut rem = idx;
            let mut phi = Complex::new(1.0, 0.0);
            for a in (0..p).rev() {
                let k = rem % n;
                rem /= n;
                phi *= basis[a][k];
            }
            acc += self.coef[idx] * phi;
        }
        acc.re
    }
}

/// Evaluate a field component at an arbitrary point by trigonometric
/// interpolation (exact at nodes, 1-periodic).
pub fn interpolate(field: &PeriodicField, comp: usize, x: &[f64]) -> f64 {
    Spectrum::from_values(field.grid, field.comp(comp)).eval(x)
}

/// Precomputed cos/sin table for fast repeated 1D spectral evaluation at one
/// point; shared across every field interpolated at that point.
pub struct TrigBasis1D {
    /// cos(2 pi k x) for k = 0..len-1; index n/2 (when present) doubles as
    /// the Nyquist value cos(π n x)
    pub cos_k: Vec<f64>,
    /// sin(2 pi k x) for k = 0..len-1
    pub sin_k: Vec<f64>,
}

impl TrigBasis1D {
    #[inline]
    pub fn new(n: usize, x: f64) -> TrigBasis1D {
        TrigBasis1D::with_len(x, n / 2 + 1)
    }

    /// Basis with `len` harmonics (enough for truncated spectra).
    #[inline]
    pub fn with_len(x: f64, len: usize) -> TrigBasis1D {
        let mut cos_k = Vec::with_capacity(len);
        let mut sin_k = Vec::with_capacity(len);
        let (s1, c1) = (2.0 * PI * x).sin_cos();
        let mut ck = 1.0f64;
        let mut sk = 0.0f64;
        for _ in 0..len {
            cos_k.push(ck);
            sin_k.push(sk);
            let cn = ck * c1 - sk * s1;
            let sn = sk * c1 + ck * s1;
            ck = cn;
            sk = sn;
        }
        TrigBasis1D { cos_k, sin_k }
    }
}

/// Real cosine/sine form of a 1D spectrum for fast evaluation:
/// `f(x) = a0 + Σ_{k=1}^{K} (a_k cos 2πkx + b_k sin 2πkx) + nyq · cos πnx`.
///
/// Smooth fields decay spectrally fast, so [`RealSpectrum1D::truncate`] can
/// drop negligible trailing modes and hot loops pay only for the modes that
/// carry energy.
#[derive(Debug, Clone)]
pub struct RealSpectrum1D {
    a: Vec<f64>,
    b: Vec<f64>,
    nyquist: f64,
    half_n: usize,
}

impl RealSpectrum1D {
    pub fn from_values(values: &DVector<f64>) -> RealSpectrum1D {
        let n = values.len();
        let half = n / 2;
        let mut planner = FftPlanner::new();
        let fft = planner.plan_fft_forward(n);
        let mut data: Vec<Complex<f64>> = values.iter().map(|&v| Complex::new(v, 0.0)).collect();
        fft.process(&mut data);
        let mut a = vec![0.0; half];
        let mut b = vec![0.0; half];
        a[0] = data[0].re / n as f64;
        for k in 1..half {
            a[k] = 2.0 * data[k].re / n as f64;
            b[k] = -2.0 * data[k].im / n as f64;
        }
        RealSpectrum1D {
            a,
            b,
            nyquist: data[half].re / n as f64,
            half_n: half,
        }
    }

    /// Drop trailing modes whose coefficients are below `rel_tol` times the
    /// largest coefficient (the Nyquist fold included).
    pub fn truncate(&mut self, rel_tol: f64) {
        let scale = self
            .a
            .iter()
            .chain(self.b.iter())
            .fold(self.nyquist.abs(), |m, v| m.max(v.abs()));
        let tol = rel_tol * scale.max(1e-300);
        if self.nyquist.abs() <= tol {
            self.nyquist = 0.0;
        }
        let mut keep = self.a.len();
        while keep > 1 && self.a[keep - 1].abs() <= tol && self.b[keep - 1].abs() <= tol {
            keep -= 1;
        }
        self.a.truncate(keep);
        self.b.truncate(keep);
    }

    /// Number of basis harmonics a matching [`TrigBasis1D`] must provide.
    pub fn required_len(&self) -> usize {
        if self.nyquist != 0.0 {
            self.half_n + 1
        } else {
            self.a.len()
        }
    }

    /// Needs a basis with at least `required_len()` harmonics at the query x.
    #[inline]
    pub fn eval(&self, basis: &TrigBasis1D) -> f64 {
        let mut acc = self.a[0];
        for ((&ak, &bk), (&ck, &sk)) in self.a[1..]
            .iter()
            .zip(&self.b[1..])
            .zip(basis.cos_k[1..self.a.len()].iter().zip(&basis.sin_k[1..self.a.len()]))
        {
            acc += ak * ck + bk * sk;
        }
        if self.nyquist != 0.0 {
            acc += self.nyquist * basis.cos_k[self.half_n];
        }
        acc
    }
}

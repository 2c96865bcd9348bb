//! Grid discretization of S_{h,ρ} and the spectral, kernel and convergence
//! checks built on it.
//!
//! Rows are assembled by integrating the flowed evaluation exactly in t
//! (the admissible time interval is computed in closed form for constant
//! speed) with multilinear interpolation onto the grid. The result is then
//! projected onto the μ-self-adjoint matrices.

use faer::{Mat, Side};
use rustfft::num_complex::Complex;
use rustfft::FftPlanner;
use thiserror::Error;

use crate::expr::Expr;
use crate::manifold::{torus_distance, ChartAtlas, Density, PeriodicGrid};
use crate::numeric::{linear_fit, GaussLegendre};
use crate::walk::Walker;

#[derive(Debug, Clone, Error, PartialEq)]
pub enum MarkovError {
    #[error("grid must have at least 16 cells per axis, got {0}")]
    GridTooSmall(usize),
    #[error("t-quadrature needs at least 8 nodes, got {0}")]
    TooFewNodes(usize),
    #[error("top eigenvalue is not simple: λ₁ − λ₂ = {0:e}")]
    DegenerateTop(f64),
    #[error("eigensolver failed to converge")]
    Eigensolver,
}

/// Row-compressed sparse matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseRows {
    pub indptr: Vec<usize>,
    pub indices: Vec<u32>,
    pub values: Vec<f64>,
}

impl SparseRows {
    pub fn rows(&self) -> usize {
        self.indptr.len() - 1
    }

    pub fn row(&self, a: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        let r = self.indptr[a]..self.indptr[a + 1];
        self.indices[r.clone()].iter().map(|&i| i as usize).zip(self.values[r].iter().copied())
    }

    pub fn nnz(&self) -> usize {
        self.values.len()
    }

    pub fn get(&self, a: usize, b: usize) -> f64 {
        let r = self.indptr[a]..self.indptr[a + 1];
        match self.indices[r.clone()].binary_search(&(b as u32)) {
            Ok(k) => self.values[r.start + k],
            Err(_) => 0.0,
        }
    }

    pub fn mul_vec(&self, x: &[f64]) -> Vec<f64> {
        (0..self.rows()).map(|a| self.row(a).map(|(b, v)| v * x[b]).sum()).collect()
    }

    pub fn transpose(&self) -> SparseRows {
        let n = self.rows();
        let mut counts = vec![0usize; n + 1];
        for &i in &self.indices {
            counts[i as usize + 1] += 1;
        }
        for i in 0..n {
            counts[i + 1] += counts[i];
        }
        let mut next = counts.clone();
        let mut indices = vec![0u32; self.nnz()];
        let mut values = vec![0.0; self.nnz()];
        for a in 0..n {
            for (b, v) in self.row(a) {
                let k = next[b];
                indices[k] = a as u32;
                values[k] = v;
                next[b] += 1;
            }
        }
        SparseRows { indptr: counts, indices, values }
    }
}

/// Accumulates one sparse row at a time.
struct RowScratch {
    dense: Vec<f64>,
    touched: Vec<usize>,
}

impl RowScratch {
    fn new(n: usize) -> Self {
        Self { dense: vec![0.0; n], touched: Vec::new() }
    }

    fn add(&mut self, i: usize, v: f64) {
        if self.dense[i] == 0.0 {
            self.touched.push(i);
        }
        self.dense[i] += v;
        if self.dense[i] == 0.0 {
            // keep the index tracked even if it cancels
            self.dense[i] = f64::MIN_POSITIVE * 0.0;
        }
    }

    fn flush(&mut self, out: &mut SparseRows) {
        self.touched.sort_unstable();
        self.touched.dedup();
        for &i in &self.touched {
            let v = self.dense[i];
            if v != 0.0 {
                out.indices.push(i as u32);
                out.values.push(v);
            }
            self.dense[i] = 0.0;
        }
        self.touched.clear();
        out.indptr.push(out.values.len());
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AssemblyOptions {
    /// Cells per axis.
    pub grid: usize,
    /// Gauss–Legendre nodes per smooth piece of the t-integral.
    pub t_nodes: usize,
}

impl Default for AssemblyOptions {
    fn default() -> Self {
        Self { grid: 64, t_nodes: 8 }
    }
}

#[derive(Debug, Clone)]
pub struct MarkovMatrix {
    pub grid: PeriodicGrid,
    pub h: f64,
    pub rho: f64,
    pub t_nodes: usize,
    /// μ-mass of each cell, summing to 1.
    pub weights: Vec<f64>,
    /// K = W S, symmetric after projection.
    pub kernel: SparseRows,
    /// max |w_a S_ab − w_b S_ba| before projection.
    pub asymmetry: f64,
    /// Largest relative diagonal correction restoring S1 = 1.
    pub row_sum_fix: f64,
}

/// Admissible times {t ∈ ]−h, h[ : flow stays in the inner cube}, an interval
/// because the speed along the axis is positive.
pub fn admissible_interval(walker: &Walker<'_>, chart: usize, axis: usize, w: &[f64], h: f64) -> (f64, f64) {
    let c = &walker.atlas.charts[chart];
    let side = c.block.sides[axis];
    if walker.density.uniform {
        let v = side / walker.density.local(walker.atlas, chart, w);
        let lo = ((-side - w[axis]) / v).max(-h);
        let hi = ((side - w[axis]) / v).min(h);
        return (lo, hi.max(lo));
    }
    let inside = |t: f64| matches!(walker.flow_local(chart, axis, t, w), Ok(p) if c.in_block(&p));
    let edge = |sign: f64| {
        if inside(sign * h) {
            return sign * h;
        }
        let (mut a, mut b) = (0.0, h);
        for _ in 0..60 {
            let m = 0.5 * (a + b);
            if inside(sign * m) {
                a = m;
            } else {
                b = m;
            }
        }
        sign * a
    };
    (edge(-1.0), edge(1.0))
}

/// Breakpoints in [ta, tb] where the straight path x + t d crosses a grid line.
fn crossings(x: &[f64], d: &[f64], ta: f64, tb: f64, g: usize, out: &mut Vec<f64>) {
    out.clear();
    out.push(ta);
    let gf = g as f64;
    for k in 0..x.len() {
        if d[k] == 0.0 {
            continue;
        }
        let ua = (x[k] + ta * d[k]) * gf - 0.5;
        let ub = (x[k] + tb * d[k]) * gf - 0.5;
        let (lo, hi) = if ua < ub { (ua, ub) } else { (ub, ua) };
        let mut m = lo.floor() + 1.0;
        while m < hi {
            out.push(((m + 0.5) / gf - x[k]) / d[k]);
            m += 1.0;
        }
    }
    out.push(tb);
    out.sort_by(|a, b| a.total_cmp(b));
    out.dedup_by(|a, b| (*a - *b).abs() < 1e-15);
}

pub fn assemble(
    atlas: &ChartAtlas,
    density: &Density,
    h: f64,
    opts: &AssemblyOptions,
) -> Result<MarkovMatrix, MarkovError> {
    if opts.grid < 16 {
        return Err(MarkovError::GridTooSmall(opts.grid));
    }
    if opts.t_nodes < 8 {
        return Err(MarkovError::TooFewNodes(opts.t_nodes));
    }
    let n = atlas.n;
    let grid = PeriodicGrid::new(n, opts.grid);
    let size = grid.len();
    let walker = Walker::new(atlas, density);
    let rule = GaussLegendre::new(opts.t_nodes);
    let norm = 1.0 / (n * atlas.len()) as f64;
    let inv2h = 1.0 / (2.0 * h);
    let linear: Vec<Option<Vec<f64>>> = atlas.charts.iter().map(|c| c.phi.affine_matrix()).collect();

    let mut s = SparseRows { indptr: vec![0], indices: Vec::new(), values: Vec::new() };
    let mut scratch = RowScratch::new(size);
    let mut iw = Vec::with_capacity(1 << n);
    let mut breaks = Vec::new();
    let mut d = vec![0.0; n];
    for a in 0..size {
        let x = grid.point(a);
        let mut diag = 0.0;
        for (i, chart) in atlas.charts.iter().enumerate() {
            let Some(w) = chart.inner_coords(&x) else {
                diag += n as f64;
                continue;
            };
            for j in 0..n {
                let (ta, tb) = admissible_interval(&walker, i, j, &w, h);
                diag += 1.0 - (tb - ta) * inv2h;
                if tb <= ta {
                    continue;
                }
                match (&linear[i], density.uniform) {
                    (Some(m), true) => {
                        let v = chart.block.sides[j] / density.local(atlas, i, &w);
                        for k in 0..n {
                            d[k] = m[k * n + j] * v;
                        }
                        crossings(&x, &d, ta, tb, grid.g, &mut breaks);
                        for piece in breaks.windows(2) {
                            for (t, wt) in rule.on(piece[0], piece[1]) {
                                let y: Vec<f64> = (0..n).map(|k| x[k] + t * d[k]).collect();
                                grid.interp_weights(&y, &mut iw);
                                for &(b, c) in &iw {
                                    scratch.add(b, norm * inv2h * wt * c);
                                }
                            }
                        }
                    }
                    _ => {
                        let ends = [ta, tb].map(|t| {
                            walker.flow_local(i, j, t, &w).map(|p| chart.psi_inv(&p)).unwrap_or_else(|_| x.clone())
                        });
                        let span = ends[0]
                            .iter()
                            .zip(&ends[1])
                            .map(|(p, q)| crate::manifold::wrap_centered(q - p).abs())
                            .fold(0.0, f64::max);
                        let pieces = ((span * grid.g as f64 * 2.0).ceil() as usize).max(1);
                        let dt = (tb - ta) / pieces as f64;
                        for p in 0..pieces {
                            let t0 = ta + p as f64 * dt;
                            for (t, wt) in rule.on(t0, t0 + dt) {
                                let y = match walker.flow_local(i, j, t, &w) {
                                    Ok(p) => chart.psi_inv(&p),
                                    Err(_) => x.clone(),
                                };
                                grid.interp_weights(&y, &mut iw);
                                for &(b, c) in &iw {
                                    scratch.add(b, norm * inv2h * wt * c);
                                }
                            }
                        }
                    }
                }
            }
        }
        scratch.add(a, norm * diag);
        scratch.flush(&mut s);
    }

    let mut weights: Vec<f64> = (0..size).map(|a| density.eval(atlas, &grid.point(a))).collect();
    let total: f64 = weights.iter().sum();
    weights.iter_mut().for_each(|v| *v /= total);

    // K = ½(W S + Sᵀ W), then restore row sums on the diagonal
    let mut ws = s.clone();
    for a in 0..size {
        for k in ws.indptr[a]..ws.indptr[a + 1] {
            ws.values[k] *= weights[a];
        }
    }
    let wst = ws.transpose();
    let mut kernel = SparseRows { indptr: vec![0], indices: Vec::new(), values: Vec::new() };
    let mut asymmetry: f64 = 0.0;
    let mut row_sum_fix: f64 = 0.0;
    for a in 0..size {
        let (mut p, mut q) = (ws.indptr[a], wst.indptr[a]);
        let (pe, qe) = (ws.indptr[a + 1], wst.indptr[a + 1]);
        let start = kernel.values.len();
        while p < pe || q < qe {
            let ip = if p < pe { ws.indices[p] } else { u32::MAX };
            let iq = if q < qe { wst.indices[q] } else { u32::MAX };
            let (col, x, y) = if ip == iq {
                p += 1;
                q += 1;
                (ip, ws.values[p - 1], wst.values[q - 1])
            } else if ip < iq {
                p += 1;
                (ip, ws.values[p - 1], 0.0)
            } else {
                q += 1;
                (iq, 0.0, wst.values[q - 1])
            };
            asymmetry = asymmetry.max((x - y).abs());
            kernel.indices.push(col);
            kernel.values.push(0.5 * (x + y));
        }
        let row: f64 = kernel.values[start..].iter().sum();
        let fix = weights[a] - row;
        row_sum_fix = row_sum_fix.max(fix.abs() / weights[a]);
        match kernel.indices[start..].binary_search(&(a as u32)) {
            Ok(k) => kernel.values[start + k] += fix,
            Err(k) => {
                kernel.indices.insert(start + k, a as u32);
                kernel.values.insert(start + k, fix);
            }
        }
        kernel.indptr.push(kernel.values.len());
    }
    Ok(MarkovMatrix { grid, h, rho: atlas.rho, t_nodes: opts.t_nodes, weights, kernel, asymmetry, row_sum_fix })
}

impl MarkovMatrix {
    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    pub fn entry(&self, a: usize, b: usize) -> f64 {
        self.kernel.get(a, b) / self.weights[a]
    }

    /// S f.
    pub fn apply(&self, f: &[f64]) -> Vec<f64> {
        let k = self.kernel.mul_vec(f);
        k.iter().zip(&self.weights).map(|(v, w)| v / w).collect()
    }

    pub fn row_sums(&self) -> Vec<f64> {
        (0..self.len()).map(|a| self.kernel.row(a).map(|(_, v)| v).sum::<f64>() / self.weights[a]).collect()
    }

    pub fn max_row_sum_error(&self) -> f64 {
        self.row_sums().iter().map(|s| (s - 1.0).abs()).fold(0.0, f64::max)
    }

    pub fn min_entry(&self) -> f64 {
        (0..self.len())
            .flat_map(|a| self.kernel.row(a).map(move |(_, v)| (a, v)))
            .map(|(a, v)| v / self.weights[a])
            .fold(f64::INFINITY, f64::min)
    }

    /// max |w_a S_ab − w_b S_ba| after projection.
    pub fn symmetry_defect(&self) -> f64 {
        let t = self.kernel.transpose();
        let mut worst: f64 = 0.0;
        for a in 0..self.len() {
            for ((b1, v1), (b2, v2)) in self.kernel.row(a).zip(t.row(a)) {
                if b1 != b2 {
                    return f64::INFINITY;
                }
                worst = worst.max((v1 - v2).abs());
            }
        }
        worst
    }

    /// B = W^{−1/2} K W^{−1/2}, dense.
    pub fn symmetric_dense(&self) -> Mat<f64> {
        let n = self.len();
        let mut b = Mat::<f64>::zeros(n, n);
        let s: Vec<f64> = self.weights.iter().map(|w| 1.0 / w.sqrt()).collect();
        for a in 0..n {
            for (c, v) in self.kernel.row(a) {
                b[(a, c)] = v * s[a] * s[c];
            }
        }
        b
    }

    /// Σ w_a u_a v_a.
    pub fn inner(&self, u: &[f64], v: &[f64]) -> f64 {
        self.weights.iter().zip(u).zip(v).map(|((w, a), b)| w * a * b).sum()
    }

    pub fn grid_values(&self, f: &Expr) -> Vec<f64> {
        (0..self.len()).map(|a| f.value(&self.grid.point(a))).collect()
    }
}

/// ((I − S)u, v)_μ / h².
pub fn dirichlet_form(m: &MarkovMatrix, u: &[f64], v: &[f64]) -> f64 {
    let k = m.kernel.mul_vec(u);
    let mut acc = 0.0;
    for a in 0..m.len() {
        acc += (m.weights[a] * u[a] - k[a]) * v[a];
    }
    acc / (m.h * m.h)
}

/// Eigenvalues in descending order and, optionally, the matching
/// orthonormal eigenvectors of B as columns.
#[derive(Debug, Clone)]
pub struct Spectrum {
    pub values: Vec<f64>,
    pub vectors: Option<Mat<f64>>,
}

pub fn spectrum(m: &MarkovMatrix, with_vectors: bool) -> Result<Spectrum, MarkovError> {
    let b = m.symmetric_dense();
    let n = b.nrows();
    if with_vectors {
        let e = b.self_adjoint_eigen(Side::Lower).map_err(|_| MarkovError::Eigensolver)?;
        let s = e.S();
        let u = e.U();
        let values: Vec<f64> = (0..n).map(|k| s[n - 1 - k]).collect();
        let vectors = Mat::from_fn(n, n, |i, j| u[(i, n - 1 - j)]);
        Ok(Spectrum { values, vectors: Some(vectors) })
    } else {
        let mut values = b.self_adjoint_eigenvalues(Side::Lower).map_err(|_| MarkovError::Eigensolver)?;
        values.reverse();
        Ok(Spectrum { values, vectors: None })
    }
}

impl Spectrum {
    pub fn top(&self) -> f64 {
        self.values[0]
    }

    pub fn bottom(&self) -> f64 {
        *self.values.last().expect("nonempty spectrum")
    }

    /// Eigenvector of S (not B) for index k, i.e. W^{−1/2} u_k.
    pub fn eigenfunction(&self, m: &MarkovMatrix, k: usize) -> Option<Vec<f64>> {
        let u = self.vectors.as_ref()?;
        Some((0..m.len()).map(|a| u[(a, k)] / m.weights[a].sqrt()).collect())
    }
}

/// g = 1 − λ₂.
pub fn spectral_gap(values: &[f64]) -> Result<f64, MarkovError> {
    let d = values[0] - values[1];
    if d < 1e-12 {
        return Err(MarkovError::DegenerateTop(d));
    }
    Ok(1.0 - values[1])
}

/// Largest eigenvalue of B restricted to the μ-complement of the constants,
/// i.e. λ₂, by Lanczos iteration for grids too large for a dense solve.
pub fn second_eigenvalue(m: &MarkovMatrix, max_iter: usize) -> Result<f64, MarkovError> {
    use rand::{Rng, SeedableRng};
    let size = m.len();
    let sw: Vec<f64> = m.weights.iter().map(|w| w.sqrt()).collect();
    let isw: Vec<f64> = sw.iter().map(|v| 1.0 / v).collect();
    let deflate = |v: &mut [f64]| {
        let c: f64 = v.iter().zip(&sw).map(|(a, b)| a * b).sum();
        v.iter_mut().zip(&sw).for_each(|(a, b)| *a -= c * b);
    };
    let normalize = |v: &mut [f64]| {
        let n = v.iter().map(|a| a * a).sum::<f64>().sqrt();
        v.iter_mut().for_each(|a| *a /= n);
        n
    };
    let apply = |v: &[f64], out: &mut [f64]| {
        let scaled: Vec<f64> = v.iter().zip(&isw).map(|(a, b)| a * b).collect();
        for a in 0..size {
            out[a] = isw[a] * m.kernel.row(a).map(|(b, k)| k * scaled[b]).sum::<f64>();
        }
    };
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0x5eed);
    let mut q: Vec<f64> = (0..size).map(|_| rng.gen::<f64>() - 0.5).collect();
    deflate(&mut q);
    normalize(&mut q);
    let mut prev = vec![0.0; size];
    let mut w = vec![0.0; size];
    let (mut alpha, mut beta) = (Vec::new(), Vec::new());
    let mut last = f64::NAN;
    let mut stable = 0;
    for it in 0..max_iter {
        apply(&q, &mut w);
        deflate(&mut w);
        let a: f64 = w.iter().zip(&q).map(|(x, y)| x * y).sum();
        let b_prev = beta.last().copied().unwrap_or(0.0);
        for k in 0..size {
            w[k] -= a * q[k] + b_prev * prev[k];
        }
        alpha.push(a);
        let b = normalize(&mut w);
        if (it + 1) % 25 == 0 || b < 1e-14 || it + 1 == max_iter {
            let t = Mat::from_fn(alpha.len(), alpha.len(), |i, j| match i.abs_diff(j) {
                0 => alpha[i],
                1 => beta[i.min(j)],
                _ => 0.0,
            });
            let ritz = t.self_adjoint_eigenvalues(Side::Lower).map_err(|_| MarkovError::Eigensolver)?;
            let top = ritz.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            if (top - last).abs() <= 1e-6 * (1.0 - top).abs() {
                stable += 1;
                if stable >= 2 {
                    return Ok(top);
                }
            } else {
                stable = 0;
            }
            last = top;
            if b < 1e-14 {
                return Ok(top);
            }
        }
        beta.push(b);
        std::mem::swap(&mut prev, &mut q);
        std::mem::swap(&mut q, &mut w);
    }
    Ok(last)
}

#[derive(Debug, Clone, PartialEq)]
pub struct SanityReport {
    pub max_row_sum_error: f64,
    pub top: f64,
    pub second: f64,
    pub bottom: f64,
    /// min eigenvalue of I − S in the μ inner product.
    pub min_dirichlet_eigenvalue: f64,
    /// |⟨u₁, √w⟩|, 1 for a constant top eigenvector.
    pub top_alignment: f64,
    pub min_entry: f64,
    pub pass: bool,
}

pub fn sanity(m: &MarkovMatrix, spec: &Spectrum) -> SanityReport {
    let rs = m.max_row_sum_error();
    let top = spec.top();
    let second = spec.values[1];
    let bottom = spec.bottom();
    let align = spec
        .vectors
        .as_ref()
        .map(|u| (0..m.len()).map(|a| u[(a, 0)] * m.weights[a].sqrt()).sum::<f64>().abs())
        .unwrap_or(f64::NAN);
    let min_entry = m.min_entry();
    let simple = (top - 1.0).abs() <= 1e-8 && top - second > 1e-10;
    let aligned = align.is_nan() || (align - 1.0).abs() <= 1e-8;
    let pass = rs <= 1e-8
        && top <= 1.0 + 1e-8
        && bottom >= -1.0 - 1e-8
        && 1.0 - top >= -1e-8
        && simple
        && aligned
        && min_entry >= -1e-12;
    SanityReport {
        max_row_sum_error: rs,
        top,
        second,
        bottom,
        min_dirichlet_eigenvalue: 1.0 - top,
        top_alignment: align,
        min_entry,
        pass,
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct KernelBound {
    pub h: f64,
    pub delta: f64,
    pub c_est: f64,
    /// Largest remainder row mass 1 − c h^{−n} |cell| #{b : d(a, b) < δh}.
    pub tau: f64,
    /// Smallest entry of the remainder on the near-diagonal block.
    pub min_remainder: f64,
}

/// Largest c with (Sⁿ)_ab ≥ c h^{−n} |cell| whenever d(x_a, x_b) < δh.
pub fn kernel_lower_bound(m: &MarkovMatrix, delta: f64) -> KernelBound {
    let n = m.grid.n;
    let size = m.len();
    let radius = delta * m.h;
    let unit = m.h.powi(-(n as i32)) * m.grid.cell_volume();
    let mut rows: Vec<Vec<(usize, f64)>> = Vec::with_capacity(size);
    let mut scratch = vec![0.0; size];
    let mut touched = Vec::new();
    let mut c_est = f64::INFINITY;
    for a in 0..size {
        let mut cur: Vec<(usize, f64)> = m.kernel.row(a).map(|(b, v)| (b, v / m.weights[a])).collect();
        for _ in 1..n {
            for &(k, v) in &cur {
                for (b, s) in m.kernel.row(k) {
                    if scratch[b] == 0.0 {
                        touched.push(b);
                    }
                    scratch[b] += v * s / m.weights[k];
                }
            }
            touched.sort_unstable();
            touched.dedup();
            cur = touched.iter().map(|&b| (b, scratch[b])).collect();
            for &b in &touched {
                scratch[b] = 0.0;
            }
            touched.clear();
        }
        let xa = m.grid.point(a);
        let near: Vec<(usize, f64)> = (0..size)
            .filter(|&b| torus_distance(&xa, &m.grid.point(b)) < radius)
            .map(|b| (b, cur.iter().find(|e| e.0 == b).map_or(0.0, |e| e.1)))
            .collect();
        for &(_, v) in &near {
            c_est = c_est.min(v / unit);
        }
        rows.push(near);
    }
    let mut tau: f64 = 0.0;
    let mut min_remainder = f64::INFINITY;
    for near in &rows {
        tau = tau.max(1.0 - c_est * unit * near.len() as f64);
        for &(_, v) in near {
            min_remainder = min_remainder.min(v - c_est * unit);
        }
    }
    KernelBound { h: m.h, delta, c_est, tau, min_remainder }
}

/// max over the band λ ∈ [a, 1] of ‖e‖_∞ / (h^{−n/2} ‖e‖_{2,μ}).
pub fn eigenfunction_linf(m: &MarkovMatrix, spec: &Spectrum, band: f64) -> (f64, usize) {
    let Some(u) = spec.vectors.as_ref() else { return (f64::NAN, 0) };
    let scale = m.h.powf(m.grid.n as f64 / 2.0);
    let mut best: f64 = 0.0;
    let mut count = 0;
    for (k, &lam) in spec.values.iter().enumerate() {
        if lam < band {
            break;
        }
        count += 1;
        let sup = (0..m.len()).map(|a| (u[(a, k)] / m.weights[a].sqrt()).abs()).fold(0.0, f64::max);
        best = best.max(sup * scale);
    }
    (best, count)
}

#[derive(Debug, Clone, PartialEq)]
pub struct WeylReport {
    pub zetas: Vec<f64>,
    pub counts: Vec<usize>,
    /// Slope of log N against log(1 + ζ) over the top decade
    /// [C′h⁻²/10, C′h⁻²]; NaN unless C′h⁻² ≥ 10.
    pub exponent: f64,
    pub c_prime: f64,
}

/// N(ζ) = #{k : (1 − λ_k)/h² ≤ ζ} on a log-spaced ζ grid up to C′h⁻².
pub fn weyl_count(values: &[f64], h: f64, c_prime: f64, points: usize) -> WeylReport {
    let mut zeta: Vec<f64> = values.iter().map(|l| (1.0 - l) / (h * h)).collect();
    zeta.sort_by(|a, b| a.total_cmp(b));
    let zmax = c_prime / (h * h);
    let zmin = zeta.iter().copied().find(|&z| z > 1e-9).unwrap_or(zmax).min(zmax);
    let zetas: Vec<f64> = (0..points)
        .map(|k| zmin * (zmax / zmin).powf(k as f64 / (points - 1).max(1) as f64))
        .collect();
    let counts: Vec<usize> = zetas.iter().map(|&z| zeta.partition_point(|&v| v <= z)).collect();
    let (xs, ys): (Vec<f64>, Vec<f64>) = zetas
        .iter()
        .zip(&counts)
        .filter(|(z, _)| zmax >= 10.0 * (1.0 - 1e-9) && **z >= zmax / 10.0 * (1.0 - 1e-9))
        .map(|(z, c)| ((1.0 + z).ln(), (*c as f64).ln()))
        .unzip();
    let exponent = if xs.len() >= 3 { linear_fit(&xs, &ys).0 } else { f64::NAN };
    WeylReport { zetas, counts, exponent, c_prime }
}

/// Sample points where every chart either excludes x or admits the full
/// time interval ]−h_max, h_max[ on every axis.
pub fn interior_points(atlas: &ChartAtlas, density: &Density, h_max: f64, per_axis: usize) -> Vec<Vec<f64>> {
    let walker = Walker::new(atlas, density);
    crate::operator::lattice(atlas.n, per_axis)
        .into_iter()
        .filter(|x| {
            atlas.charts.iter().enumerate().all(|(i, c)| match c.inner_coords(x) {
                None => true,
                Some(w) => (0..atlas.n).all(|j| {
                    let (a, b) = admissible_interval(&walker, i, j, &w, h_max);
                    a <= -h_max && b >= h_max
                }),
            })
        })
        .collect()
}

/// (I − S_h) f / h² at x, with f evaluated exactly along the flows.
pub fn continuous_generator(atlas: &ChartAtlas, density: &Density, f: &Expr, x: &[f64], h: f64) -> f64 {
    let walker = Walker::new(atlas, density);
    let rule = GaussLegendre::new(16);
    let n = atlas.n;
    let fx = f.value(x);
    let mut acc = 0.0;
    for (i, c) in atlas.charts.iter().enumerate() {
        let Some(w) = c.inner_coords(x) else { continue };
        for j in 0..n {
            let (ta, tb) = admissible_interval(&walker, i, j, &w, h);
            if tb <= ta {
                continue;
            }
            let integral: f64 = rule
                .on(ta, tb)
                .map(|(t, wt)| {
                    let y = walker.flow_local(i, j, t, &w).map(|p| c.psi_inv(&p)).unwrap_or_else(|_| x.to_vec());
                    wt * (f.value(&y) - fx)
                })
                .sum();
            acc += integral / (2.0 * h);
        }
    }
    -acc / ((n * atlas.len()) as f64 * h * h)
}

/// X_ij f(x) and X_ij² f(x) for the chart field of axis j.
fn chart_derivatives(atlas: &ChartAtlas, density: &Density, chart: usize, axis: usize, f: &Expr, w: &[f64]) -> (f64, f64) {
    let c = &atlas.charts[chart];
    let n = atlas.n;
    if let (Some(m), true) = (c.phi.affine_matrix(), density.uniform) {
        let v = c.block.sides[axis] / density.local(atlas, chart, w);
        let d: Vec<f64> = (0..n).map(|k| m[k * n + axis] * v).collect();
        let x = c.psi_inv(w);
        let grad: f64 = (0..n).map(|k| d[k] * f.diff(k).value(&x)).sum();
        let mut hess = 0.0;
        for k in 0..n {
            for l in 0..n {
                hess += d[k] * d[l] * f.diff(k).diff(l).value(&x);
            }
        }
        return (grad, hess);
    }
    let walker = Walker::new(atlas, density);
    let eta = 1e-3;
    let at = |t: f64| {
        let p = walker.flow_local(chart, axis, t, w).unwrap_or_else(|_| w.to_vec());
        f.value(&c.psi_inv(&p))
    };
    let (fp, f0, fm) = (at(eta), at(0.0), at(-eta));
    ((fp - fm) / (2.0 * eta), (fp - 2.0 * f0 + fm) / (eta * eta))
}

/// L f(x) = −(1/6nN) Σ_{i ∋ x} Σ_j X_ij² f(x).
pub fn limit_generator(atlas: &ChartAtlas, density: &Density, f: &Expr, x: &[f64]) -> f64 {
    let n = atlas.n;
    let mut acc = 0.0;
    for (i, c) in atlas.charts.iter().enumerate() {
        let Some(w) = c.inner_coords(x) else { continue };
        for j in 0..n {
            acc += chart_derivatives(atlas, density, i, j, f, &w).1;
        }
    }
    -acc / (6.0 * (n * atlas.len()) as f64)
}

/// sup over `points` of |(I − S_h)f/h² − L f| for each h.
pub fn generator_residual(atlas: &ChartAtlas, density: &Density, f: &Expr, hs: &[f64], points: &[Vec<f64>]) -> Vec<f64> {
    let target: Vec<f64> = points.iter().map(|x| limit_generator(atlas, density, f, x)).collect();
    hs.iter()
        .map(|&h| {
            points
                .iter()
                .zip(&target)
                .map(|(x, t)| (continuous_generator(atlas, density, f, x, h) - t).abs())
                .fold(0.0, f64::max)
        })
        .collect()
}

/// Product Gauss–Legendre rule over a box, each axis split at `cuts`.
fn box_rule(lo: &[f64], hi: &[f64], cuts: &[Vec<f64>], rule: &GaussLegendre) -> Vec<(Vec<f64>, f64)> {
    let n = lo.len();
    let axes: Vec<Vec<(f64, f64)>> = (0..n)
        .map(|k| {
            let mut pts = vec![lo[k]];
            pts.extend(cuts[k].iter().copied().filter(|c| *c > lo[k] && *c < hi[k]));
            pts.push(hi[k]);
            pts.windows(2).flat_map(|p| rule.on(p[0], p[1]).collect::<Vec<_>>()).collect()
        })
        .collect();
    let mut out = vec![(Vec::with_capacity(n), 1.0)];
    for ax in &axes {
        let mut next = Vec::with_capacity(out.len() * ax.len());
        for (p, w) in &out {
            for &(t, wt) in ax {
                let mut q = p.clone();
                q.push(t);
                next.push((q, w * wt));
            }
        }
        out = next;
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct DirichletPoint {
    pub h: f64,
    pub value: f64,
    pub limit: f64,
    pub residual: f64,
}

/// B_h(f, φ) = ((I − S_h)f, φ)_μ / h² by quadrature over each inner cube in
/// chart coordinates, with the w_j axis split where the admissible time
/// interval starts to shrink.
pub fn dirichlet_continuous(atlas: &ChartAtlas, density: &Density, f: &Expr, phi: &Expr, h: f64, nodes: usize) -> f64 {
    let walker = Walker::new(atlas, density);
    let rule = GaussLegendre::new(nodes);
    let trule = GaussLegendre::new(16);
    let n = atlas.n;
    let mut total = 0.0;
    for (i, c) in atlas.charts.iter().enumerate() {
        let sides = &c.block.sides;
        let lo: Vec<f64> = sides.iter().map(|s| -s).collect();
        for j in 0..n {
            let gamma0 = density.local(atlas, i, &vec![0.0; n]);
            let inner = sides[j] * (1.0 - h / gamma0);
            let mut cuts = vec![Vec::new(); n];
            cuts[j] = vec![-inner, inner];
            for (w, wt) in box_rule(&lo, sides, &cuts, &rule) {
                let x = c.psi_inv(&w);
                let (ta, tb) = admissible_interval(&walker, i, j, &w, h);
                if tb <= ta {
                    continue;
                }
                let fx = f.value(&x);
                let diff: f64 = trule
                    .on(ta, tb)
                    .map(|(t, tw)| {
                        let y = walker.flow_local(i, j, t, &w).map(|p| c.psi_inv(&p)).unwrap_or_else(|_| x.clone());
                        tw * (fx - f.value(&y))
                    })
                    .sum();
                total += wt * diff / (2.0 * h) * phi.value(&x) * density.local(atlas, i, &w);
            }
        }
    }
    total / ((n * atlas.len()) as f64 * h * h)
}

/// (1/6nN) Σ_i Σ_j (X_ij f, X_ij φ)_{L²(Q_i, μ)}.
pub fn dirichlet_limit(atlas: &ChartAtlas, density: &Density, f: &Expr, phi: &Expr, nodes: usize) -> f64 {
    let rule = GaussLegendre::new(nodes);
    let n = atlas.n;
    let mut total = 0.0;
    for (i, c) in atlas.charts.iter().enumerate() {
        let sides = &c.block.sides;
        let lo: Vec<f64> = sides.iter().map(|s| -s).collect();
        for (w, wt) in box_rule(&lo, sides, &vec![Vec::new(); n], &rule) {
            let g = density.local(atlas, i, &w);
            for j in 0..n {
                let xf = chart_derivatives(atlas, density, i, j, f, &w).0;
                let xp = chart_derivatives(atlas, density, i, j, phi, &w).0;
                total += wt * xf * xp * g;
            }
        }
    }
    total / (6.0 * (n * atlas.len()) as f64)
}

pub fn dirichlet_limit_check(atlas: &ChartAtlas, density: &Density, f: &Expr, phi: &Expr, hs: &[f64]) -> Vec<DirichletPoint> {
    let nodes = 16;
    let limit = dirichlet_limit(atlas, density, f, phi, nodes);
    hs.iter()
        .map(|&h| {
            let value = dirichlet_continuous(atlas, density, f, phi, h, nodes);
            DirichletPoint { h, value, limit, residual: (value - limit).abs() }
        })
        .collect()
}

/// n-dimensional FFT over a gⁿ grid, axis 0 fastest.
fn fft_nd(data: &mut [Complex<f64>], n: usize, g: usize, inverse: bool) {
    let mut planner = FftPlanner::new();
    let fft = if inverse { planner.plan_fft_inverse(g) } else { planner.plan_fft_forward(g) };
    let mut line = vec![Complex::new(0.0, 0.0); g];
    for axis in 0..n {
        let stride = g.pow(axis as u32);
        let total = data.len();
        for start in 0..total {
            // lines start where the axis index is zero
            if !(start / stride).is_multiple_of(g) {
                continue;
            }
            for k in 0..g {
                line[k] = data[start + k * stride];
            }
            fft.process(&mut line);
            for k in 0..g {
                data[start + k * stride] = line[k];
            }
        }
    }
    if inverse {
        let s = 1.0 / data.len() as f64;
        data.iter_mut().for_each(|v| *v *= s);
    }
}

fn frequency(k: usize, g: usize) -> f64 {
    if k <= g / 2 {
        k as f64
    } else {
        k as f64 - g as f64
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FrequencySplit {
    pub low: Vec<f64>,
    pub high: Vec<f64>,
    /// ‖u‖_{H¹}, which bounds ‖u^L‖_{H¹}.
    pub h1: f64,
    pub low_h1: f64,
    pub high_l2: f64,
}

/// u^L = u ∗ ψ_h with ψ the periodized unit-mass Gaussian of standard
/// deviation h, u^H = u − u^L; norms on the torus with Lebesgue measure.
pub fn frequency_split(u: &[f64], grid: &PeriodicGrid, h: f64) -> FrequencySplit {
    let (n, g) = (grid.n, grid.g);
    let mut spec: Vec<Complex<f64>> = u.iter().map(|&v| Complex::new(v, 0.0)).collect();
    fft_nd(&mut spec, n, g, false);
    let total = spec.len() as f64;
    let mut low = spec.clone();
    let mut high = spec;
    let mut h1 = 0.0;
    let mut full = 0.0;
    let mut l2h = 0.0;
    let two_pi = 2.0 * std::f64::consts::PI;
    for idx in 0..low.len() {
        let mi = grid.multi_index(idx);
        let k2: f64 = mi.iter().map(|&k| frequency(k, g).powi(2)).sum();
        let mult = (-0.5 * two_pi * two_pi * h * h * k2).exp();
        let c = low[idx];
        low[idx] = c * mult;
        high[idx] = c * (1.0 - mult);
        let norm = |z: Complex<f64>| z.norm_sqr() / (total * total);
        h1 += (1.0 + two_pi * two_pi * k2) * norm(low[idx]);
        full += (1.0 + two_pi * two_pi * k2) * norm(c);
        l2h += norm(high[idx]);
    }
    fft_nd(&mut low, n, g, true);
    fft_nd(&mut high, n, g, true);
    FrequencySplit {
        low: low.iter().map(|z| z.re).collect(),
        high: high.iter().map(|z| z.re).collect(),
        h1: full.sqrt(),
        low_h1: h1.sqrt(),
        high_l2: l2h.sqrt(),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SplitSummary {
    pub h: f64,
    pub family: usize,
    /// max ‖u^H‖₂ / h over the family.
    pub high_over_h: f64,
    /// max ‖u^L‖_{H¹} over the family.
    pub low_h1: f64,
    /// max ‖u‖_{H¹} over the family.
    pub h1: f64,
}

/// Near-top eigenfunctions (λ ≥ 1 − h²) scaled so ‖u‖²_μ + E(u) = 1.
pub fn split_near_top(m: &MarkovMatrix, spec: &Spectrum) -> SplitSummary {
    let h = m.h;
    let mut high: f64 = 0.0;
    let mut low: f64 = 0.0;
    let mut full: f64 = 0.0;
    let mut family = 0;
    for (k, &lam) in spec.values.iter().enumerate() {
        if lam < 1.0 - h * h {
            break;
        }
        let Some(e) = spec.eigenfunction(m, k) else { break };
        family += 1;
        let zeta = ((1.0 - lam) / (h * h)).max(0.0);
        let scale = 1.0 / (1.0 + zeta).sqrt();
        let u: Vec<f64> = e.iter().map(|v| v * scale).collect();
        let s = frequency_split(&u, &m.grid, h);
        high = high.max(s.high_l2 / h);
        low = low.max(s.low_h1);
        full = full.max(s.h1);
    }
    SplitSummary { h, family, high_over_h: high, low_h1: low, h1: full }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TvReport {
    pub ks: Vec<u64>,
    pub distances: Vec<f64>,
    /// −slope of log D(k) over the last decade of k.
    pub rate: f64,
    pub k_max: u64,
}

/// D(k) = max_{a ∈ starts} ½ Σ_b |(Sᵏ)_ab − μ_b| from the eigendecomposition.
pub fn tv_distances(m: &MarkovMatrix, spec: &Spectrum, starts: &[usize], ks: &[u64]) -> Vec<f64> {
    let u = spec.vectors.as_ref().expect("eigenvectors required");
    let size = m.len();
    let sw: Vec<f64> = m.weights.iter().map(|w| w.sqrt()).collect();
    ks.iter()
        .map(|&k| {
            let modes: Vec<(usize, f64)> = (1..size)
                .filter_map(|j| {
                    let c = spec.values[j].powi(k.min(i32::MAX as u64) as i32);
                    (c.abs() > 1e-17).then_some((j, c))
                })
                .collect();
            if k == 0 {
                return starts.iter().map(|&a| 0.5 * ((1.0 - m.weights[a]) + (1.0 - m.weights[a]))).fold(0.0, f64::max);
            }
            if modes.is_empty() {
                return 0.0;
            }
            let left = Mat::from_fn(starts.len(), modes.len(), |r, c| {
                let (j, coef) = modes[c];
                coef * u[(starts[r], j)] / sw[starts[r]]
            });
            let right = Mat::from_fn(modes.len(), size, |c, b| u[(b, modes[c].0)] * sw[b]);
            let prod = &left * &right;
            (0..starts.len())
                .map(|r| 0.5 * (0..size).map(|b| prod[(r, b)].abs()).sum::<f64>())
                .fold(0.0, f64::max)
        })
        .collect()
}

/// D(k) on a dyadic ladder plus a dense sample of [k_max/10, k_max] with
/// k_max = ⌈20/g⌉, and the decay rate fitted on that last decade.
pub fn tv_decay(m: &MarkovMatrix, spec: &Spectrum, starts: &[usize], gap: f64) -> TvReport {
    let k_max = (20.0 / gap).ceil().max(10.0) as u64;
    let lo = (k_max / 10).max(1);
    let mut ks: Vec<u64> = std::iter::once(0).chain((0..).map(|p| 1u64 << p).take_while(|&k| k < lo)).collect();
    let tail: Vec<u64> = (0..12).map(|i| lo + (k_max - lo) * i / 11).collect();
    ks.extend(&tail);
    ks.dedup();
    let distances = tv_distances(m, spec, starts, &ks);
    let (xs, ys): (Vec<f64>, Vec<f64>) = ks
        .iter()
        .zip(&distances)
        .filter(|(k, d)| **k >= lo && **d > 0.0)
        .map(|(k, d)| (*k as f64, d.ln()))
        .unzip();
    let rate = if xs.len() >= 2 { -linear_fit(&xs, &ys).0 } else { f64::NAN };
    TvReport { ks, distances, rate, k_max }
}

/// Start points for sup-row TV: every `stride`-th node per axis.
pub fn tv_starts(grid: &PeriodicGrid, stride: usize) -> Vec<usize> {
    (0..grid.len()).filter(|&a| grid.multi_index(a).iter().all(|k| k % stride == 0)).collect()
}

/// Stationary cell masses aggregated onto a coarse `bins`ⁿ grid.
pub fn coarse_stationary(m: &MarkovMatrix, bins: usize) -> Vec<f64> {
    let mut out = vec![0.0; bins.pow(m.grid.n as u32)];
    for a in 0..m.len() {
        out[crate::walk::cell_of(&m.grid.point(a), bins)] += m.weights[a];
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::expr::parse;
    use crate::manifold::{build_atlas, lattice_centers, AtlasOptions};
    use crate::operator::OperatorSpec;

    fn laplace1d(g: usize, h: f64) -> (ChartAtlas, Density, MarkovMatrix) {
        let centers = lattice_centers(&[4], &[0.125]);
        let atlas = build_atlas(&OperatorSpec::laplacian(1), 0.25, &centers, &AtlasOptions::default()).unwrap();
        let d = Density::build(&atlas);
        let m = assemble(&atlas, &d, h, &AssemblyOptions { grid: g, t_nodes: 8 }).unwrap();
        (atlas, d, m)
    }

    fn laplace2d(g: usize, h: f64) -> (ChartAtlas, Density, MarkovMatrix) {
        let centers = lattice_centers(&[4, 4], &[0.125, 0.125]);
        let atlas = build_atlas(&OperatorSpec::laplacian(2), 0.25, &centers, &AtlasOptions::default()).unwrap();
        let d = Density::build(&atlas);
        let m = assemble(&atlas, &d, h, &AssemblyOptions { grid: g, t_nodes: 8 }).unwrap();
        (atlas, d, m)
    }

    #[test]
    fn rows_sum_to_one_and_matrix_is_weighted_symmetric() {
        let (_, _, m) = laplace2d(16, 0.3);
        assert!(m.max_row_sum_error() <= 1e-12);
        assert!(m.symmetry_defect() <= 1e-15);
        assert!(m.min_entry() >= -1e-12);
        let ones = vec![1.0; m.len()];
        assert!(m.apply(&ones).iter().all(|v| (v - 1.0).abs() <= 1e-12));
    }

    #[test]
    fn spectrum_in_unit_interval_with_simple_constant_top() {
        let (_, _, m) = laplace2d(16, 0.3);
        let s = spectrum(&m, true).unwrap();
        let r = sanity(&m, &s);
        assert!(r.pass, "{r:?}");
        let g = spectral_gap(&s.values).unwrap();
        assert!(g > 0.0);
        // the gap is h² times the smallest nonzero eigenvalue of (I − S)/h²
        let a_min = (1.0 - s.values[1]) / (m.h * m.h);
        assert_eq!(g, m.h * m.h * a_min);
    }

    #[test]
    fn dirichlet_form_is_nonnegative_and_symmetric() {
        let (_, _, m) = laplace2d(16, 0.2);
        let mut state = 99u64;
        let mut next = || {
            state = state.wrapping_mul(6364136223846793005).wrapping_add(1);
            (state >> 11) as f64 / (1u64 << 53) as f64 - 0.5
        };
        for _ in 0..100 {
            let u: Vec<f64> = (0..m.len()).map(|_| next()).collect();
            assert!(dirichlet_form(&m, &u, &u) >= -1e-12);
        }
        let u: Vec<f64> = (0..m.len()).map(|_| next()).collect();
        let v: Vec<f64> = (0..m.len()).map(|_| next()).collect();
        assert!((dirichlet_form(&m, &u, &v) - dirichlet_form(&m, &v, &u)).abs() <= 1e-10);
        assert!(dirichlet_form(&m, &vec![1.0; m.len()], &v).abs() <= 1e-10);
    }

    #[test]
    fn single_axis_multiplier_model_on_low_modes() {
        let h = 0.025;
        let (_, _, m) = laplace1d(1024, h);
        let s = spectrum(&m, false).unwrap();
        // two charts cover every point; interior motion has multiplier sinc
        for k in 1..=4 {
            let a = 2.0 * std::f64::consts::PI * k as f64 * 0.25 * h;
            let model = 1.0 - 0.5 * (1.0 - a.sin() / a);
            for idx in [2 * k - 1, 2 * k] {
                let ratio = (1.0 - s.values[idx]) / (1.0 - model);
                assert!((ratio - 1.0).abs() <= 0.05, "k={k}: ratio {ratio}");
            }
        }
    }

    #[test]
    fn lanczos_matches_dense_second_eigenvalue() {
        let (_, _, m) = laplace2d(16, 0.2);
        let s = spectrum(&m, false).unwrap();
        let l2 = second_eigenvalue(&m, 400).unwrap();
        assert!(((1.0 - l2) / (1.0 - s.values[1]) - 1.0).abs() < 1e-6, "{l2} vs {}", s.values[1]);
    }

    #[test]
    fn degenerate_top_reported() {
        assert!(matches!(spectral_gap(&[1.0, 1.0, 0.5]), Err(MarkovError::DegenerateTop(_))));
    }

    #[test]
    fn kernel_bound_positive_with_remainder_below_one() {
        let (_, _, m) = laplace1d(128, 0.2);
        let b = kernel_lower_bound(&m, 0.125);
        assert!(b.c_est > 0.0 && b.tau < 1.0, "{b:?}");
        assert!(b.min_remainder >= -1e-12);
    }

    #[test]
    fn constant_eigenfunction_ratio_is_h_to_half_n() {
        let (_, _, m) = laplace2d(16, 0.3);
        let s = spectrum(&m, true).unwrap();
        let (ratio, count) = eigenfunction_linf(&m, &Spectrum { values: vec![s.values[0]], vectors: s.vectors.clone() }, 0.99);
        assert_eq!(count, 1);
        assert!((ratio - 0.3).abs() < 1e-10);
        let (r, c) = eigenfunction_linf(&m, &s, 0.9);
        assert!(r.is_finite() && c >= 1);
    }

    #[test]
    fn weyl_counts_start_at_one_and_grow() {
        let (_, _, m) = laplace1d(256, 0.1);
        let s = spectrum(&m, false).unwrap();
        let w = weyl_count(&s.values, 0.1, 0.1, 20);
        let z0 = weyl_count(&s.values, 0.1, 0.1, 2);
        assert!(z0.counts[0] >= 2);
        assert!(w.exponent.is_finite());
        assert!(weyl_count(&s.values, 0.2, 0.1, 20).exponent.is_nan());
        assert_eq!(*w.counts.last().unwrap(), s.values.iter().filter(|&&l| (1.0 - l) / 0.01 <= 10.0).count());
        assert!(w.counts.windows(2).all(|p| p[0] <= p[1]));
    }

    #[test]
    fn generator_residual_shrinks_quadratically() {
        let (atlas, d, _) = laplace1d(16, 0.4);
        let hs = [0.4, 0.2, 0.1, 0.05];
        let pts = interior_points(&atlas, &d, 0.4, 200);
        assert!(!pts.is_empty());
        let f = parse("cos(2*pi*x1)").unwrap();
        let r = generator_residual(&atlas, &d, &f, &hs, &pts);
        for p in r.windows(2) {
            let ratio = p[0] / p[1];
            assert!((3.0..=5.0).contains(&ratio), "{r:?}");
        }
        let one = parse("1").unwrap();
        assert!(generator_residual(&atlas, &d, &one, &hs, &pts).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn linear_function_has_zero_generator_in_the_interior() {
        let (atlas, d, _) = laplace1d(16, 0.4);
        let pts = interior_points(&atlas, &d, 0.2, 100);
        let f = parse("x1").unwrap();
        for x in &pts {
            // x1 stays linear along interior flows that do not wrap
            if x[0] > 0.2 && x[0] < 0.8 {
                assert!(continuous_generator(&atlas, &d, &f, x, 0.2).abs() < 1e-9);
                assert_eq!(limit_generator(&atlas, &d, &f, x), 0.0);
            }
        }
    }

    #[test]
    fn dirichlet_limit_residual_decreases() {
        let (atlas, d, _) = laplace1d(16, 0.4);
        let f = parse("cos(2*pi*x1)").unwrap();
        let phi = parse("sin(2*pi*x1) + cos(2*pi*x1)").unwrap();
        let r = dirichlet_limit_check(&atlas, &d, &f, &phi, &[0.4, 0.2, 0.1, 0.05]);
        assert!(r.windows(2).all(|p| p[1].residual < p[0].residual), "{r:?}");
        let one = parse("1").unwrap();
        assert!(dirichlet_continuous(&atlas, &d, &one, &phi, 0.1, 16).abs() < 1e-14);
        // limit: (1/6nN) Σ_i ∫_{Q_i} side² f' φ' = (2/24)·side²·∫ f'φ'
        let exact = 2.0 / 24.0 * 0.0625 * 0.5 * (2.0 * std::f64::consts::PI).powi(2);
        assert!((r[0].limit - exact).abs() < 1e-10, "{} vs {exact}", r[0].limit);
    }

    #[test]
    fn frequency_split_of_constant_has_no_high_part() {
        let grid = PeriodicGrid::new(2, 32);
        let u = vec![0.7; grid.len()];
        let s = frequency_split(&u, &grid, 0.1);
        assert!(s.high.iter().all(|v| v.abs() < 1e-14));
        assert!((s.low_h1 - 0.7).abs() < 1e-12);
        // a single mode is damped by the Gaussian multiplier
        let k = 3.0;
        let u: Vec<f64> = (0..grid.len()).map(|a| (2.0 * std::f64::consts::PI * k * grid.point(a)[0]).cos()).collect();
        let s = frequency_split(&u, &grid, 0.05);
        let mult = (-2.0 * std::f64::consts::PI.powi(2) * 0.0025 * k * k).exp();
        assert!((s.high_l2 - (1.0 - mult) / 2f64.sqrt()).abs() < 1e-12);
    }

    #[test]
    fn tv_matches_repeated_multiplication() {
        let (_, _, m) = laplace1d(32, 0.4);
        let s = spectrum(&m, true).unwrap();
        let starts: Vec<usize> = (0..m.len()).collect();
        let ks = [0u64, 1, 2, 5, 9];
        let spectral = tv_distances(&m, &s, &starts, &ks);
        let size = m.len();
        let mut dense: Vec<Vec<f64>> = (0..size).map(|a| (0..size).map(|b| if a == b { 1.0 } else { 0.0 }).collect()).collect();
        let mut k_now = 0;
        for (idx, &k) in ks.iter().enumerate() {
            while k_now < k {
                dense = dense.iter().map(|row| {
                    let mut out = vec![0.0; size];
                    for (c, &v) in row.iter().enumerate() {
                        if v != 0.0 {
                            for b in 0..size {
                                out[b] += v * m.entry(c, b);
                            }
                        }
                    }
                    out
                }).collect();
                k_now += 1;
            }
            let direct = dense
                .iter()
                .map(|row| 0.5 * row.iter().zip(&m.weights).map(|(p, w)| (p - w).abs()).sum::<f64>())
                .fold(0.0, f64::max);
            assert!((direct - spectral[idx]).abs() < 1e-10, "k={k}: {direct} vs {}", spectral[idx]);
        }
        assert!((spectral[0] - (1.0 - 1.0 / 32.0)).abs() < 1e-12);
        let g = spectral_gap(&s.values).unwrap();
        let rep = tv_decay(&m, &s, &starts, g);
        assert!(rep.distances.windows(2).all(|p| p[1] <= p[0] + 1e-12));
        assert!((rep.rate / g - 1.0).abs() < 0.2, "rate {} gap {g}", rep.rate);
    }
}

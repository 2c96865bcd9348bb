//! Second-order operators in local coordinates, subunit tests, and the
//! Oleinik–Radkevich fields.

use thiserror::Error;

use crate::expr::{self, Expr, ExprError};
use crate::manifold::{wrap, PeriodicGrid};
use crate::numeric::{rk4_autonomous, sym_min_eigenvalue, GaussLegendre};

#[derive(Debug, Error)]
pub enum OperatorError {
    #[error("coefficient matrix must be {n}x{n}, got {rows} rows")]
    Shape { n: usize, rows: usize },
    #[error("a{i}{j} and a{j}{i} differ at {point:?}")]
    NotSymmetric { i: usize, j: usize, point: Vec<f64> },
    #[error("coefficient uses x{index} but the operator has dimension {n}")]
    Arity { index: usize, n: usize },
    #[error("epsilon must lie in (0, 1], got {0}")]
    Epsilon(f64),
    #[error("brackets up to length {max_depth} do not span at {point:?}")]
    NotSpanned { max_depth: usize, point: Vec<f64> },
    #[error(transparent)]
    Expr(#[from] ExprError),
}

/// A = -Σ a_ij ∂_i∂_j + Σ b_k ∂_k + d, with a declared subellipticity order.
#[derive(Debug, Clone)]
pub struct OperatorSpec {
    pub name: String,
    pub n: usize,
    /// Row-major n×n.
    pub a2: Vec<Expr>,
    pub b: Vec<Expr>,
    pub d: Expr,
    pub epsilon: f64,
}

impl OperatorSpec {
    pub fn new(
        name: impl Into<String>,
        a2: Vec<Vec<Expr>>,
        b: Vec<Expr>,
        d: Expr,
        epsilon: f64,
    ) -> Result<Self, OperatorError> {
        let n = a2.len();
        if a2.iter().any(|r| r.len() != n) || (!b.is_empty() && b.len() != n) {
            return Err(OperatorError::Shape { n, rows: a2.len() });
        }
        if !(epsilon > 0.0 && epsilon <= 1.0) {
            return Err(OperatorError::Epsilon(epsilon));
        }
        let flat: Vec<Expr> = a2.into_iter().flatten().collect();
        let b = if b.is_empty() { vec![expr::constant(0.0); n] } else { b };
        for e in flat.iter().chain(&b).chain(std::iter::once(&d)) {
            if e.arity() > n {
                return Err(OperatorError::Arity { index: e.arity(), n });
            }
        }
        let spec = Self { name: name.into(), n, a2: flat, b, d, epsilon };
        spec.check_symmetric()?;
        Ok(spec)
    }

    /// -Δ on n variables, subelliptic of order 1.
    pub fn laplacian(n: usize) -> Self {
        let a2 = (0..n)
            .map(|i| (0..n).map(|j| expr::constant(if i == j { 1.0 } else { 0.0 })).collect())
            .collect();
        Self::new("laplacian", a2, vec![], expr::constant(0.0), 1.0).expect("valid")
    }

    /// -∂₁² - x₁^{2k} ∂₂² on ℝ², order 1/(k+1).
    pub fn grushin(k: u32) -> Self {
        let a22 = Expr::pow(expr::var(0), 2 * k);
        let z = || expr::constant(0.0);
        Self::new(
            format!("grushin{k}"),
            vec![vec![expr::constant(1.0), z()], vec![z(), a22]],
            vec![],
            z(),
            1.0 / (k as f64 + 1.0),
        )
        .expect("valid")
    }

    fn check_symmetric(&self) -> Result<(), OperatorError> {
        let n = self.n;
        let probes = [0.13, 0.71, 0.37, 0.92];
        for i in 0..n {
            for j in i + 1..n {
                if self.a2[i * n + j] == self.a2[j * n + i] {
                    continue;
                }
                for s in 0..probes.len() {
                    let x: Vec<f64> = (0..n).map(|k| probes[(s + k) % probes.len()]).collect();
                    let a = self.a2[i * n + j].eval(&x)?;
                    let b = self.a2[j * n + i].eval(&x)?;
                    if (a - b).abs() > 1e-12 * (1.0 + a.abs()) {
                        return Err(OperatorError::NotSymmetric { i: i + 1, j: j + 1, point: x });
                    }
                }
            }
        }
        Ok(())
    }

    pub fn coeff(&self, i: usize, j: usize) -> &Expr {
        &self.a2[i * self.n + j]
    }

    /// A₂(x), row-major.
    pub fn a2_at(&self, x: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.n * self.n];
        self.a2_into(x, &mut out);
        out
    }

    pub fn a2_into(&self, x: &[f64], out: &mut [f64]) {
        for (o, e) in out.iter_mut().zip(&self.a2) {
            *o = e.value(x);
        }
    }

    /// Largest |a(x) - a(x + e_j)| over a sample lattice and all coefficients.
    pub fn periodicity_defect(&self, per_axis: usize) -> f64 {
        let mut worst: f64 = 0.0;
        for x in lattice(self.n, per_axis) {
            for j in 0..self.n {
                let mut y = x.clone();
                y[j] += 1.0;
                for e in self.a2.iter().chain(&self.b).chain(std::iter::once(&self.d)) {
                    worst = worst.max((e.value(&x) - e.value(&y)).abs());
                }
            }
        }
        worst
    }
}

/// Cell-centred sample lattice over [0,1)^n.
pub fn lattice(n: usize, per_axis: usize) -> Vec<Vec<f64>> {
    let total = per_axis.pow(n as u32);
    (0..total)
        .map(|mut k| {
            (0..n)
                .map(|_| {
                    let i = k % per_axis;
                    k /= per_axis;
                    (i as f64 + 0.5) / per_axis as f64
                })
                .collect()
        })
        .collect()
}

pub fn principal_symbol(spec: &OperatorSpec, x: &[f64], xi: &[f64]) -> f64 {
    let a = spec.a2_at(x);
    let n = spec.n;
    let mut s = 0.0;
    for i in 0..n {
        for j in 0..n {
            s += a[i * n + j] * xi[i] * xi[j];
        }
    }
    s
}

#[derive(Debug, Clone)]
pub struct PsdReport {
    pub min_eigenvalue: f64,
    pub worst_point: Vec<f64>,
    pub pass: bool,
}

pub const PSD_TOL: f64 = 1e-10;

/// Sampled λ_min(A₂) over a lattice of `per_axis`ⁿ points of [0,1)ⁿ,
/// including the lattice corners so that degeneracy lines at 0 are hit.
pub fn check_psd(spec: &OperatorSpec, per_axis: usize) -> PsdReport {
    let n = spec.n;
    let total = per_axis.pow(n as u32);
    let mut best = (f64::INFINITY, vec![0.0; n]);
    let mut a = vec![0.0; n * n];
    for mut k in 0..total {
        let x: Vec<f64> = (0..n)
            .map(|_| {
                let i = k % per_axis;
                k /= per_axis;
                i as f64 / per_axis as f64
            })
            .collect();
        spec.a2_into(&x, &mut a);
        let m = sym_min_eigenvalue(&a, n);
        if m < best.0 {
            best = (m, x);
        }
    }
    PsdReport { min_eigenvalue: best.0, worst_point: best.1, pass: best.0 >= -PSD_TOL }
}

#[derive(Debug, Clone, PartialEq)]
pub struct VectorField {
    pub comps: Vec<Expr>,
}

impl VectorField {
    pub fn new(comps: Vec<Expr>) -> Self {
        Self { comps }
    }

    pub fn coordinate(n: usize, j: usize) -> Self {
        Self::new((0..n).map(|i| expr::constant(if i == j { 1.0 } else { 0.0 })).collect())
    }

    pub fn dim(&self) -> usize {
        self.comps.len()
    }

    pub fn at(&self, x: &[f64]) -> Vec<f64> {
        self.comps.iter().map(|e| e.value(x)).collect()
    }

    pub fn is_zero(&self) -> bool {
        self.comps.iter().all(Expr::is_zero)
    }

    pub fn scaled(&self, s: f64) -> Self {
        Self::new(self.comps.iter().map(|e| Expr::mul(expr::constant(s), e.clone())).collect())
    }

    /// Lie bracket [self, other]^k = Σ_i (self_i ∂_i other_k − other_i ∂_i self_k).
    pub fn bracket(&self, other: &VectorField) -> VectorField {
        let n = self.dim();
        let comps = (0..n)
            .map(|k| {
                let mut acc = expr::constant(0.0);
                for i in 0..n {
                    acc = Expr::add(acc, Expr::mul(self.comps[i].clone(), other.comps[k].diff(i)));
                    acc = Expr::sub(acc, Expr::mul(other.comps[i].clone(), self.comps[k].diff(i)));
                }
                acc
            })
            .collect();
        VectorField::new(comps)
    }
}

/// λ_min(A₂(x) − X Xᵀ) ≥ −tol.
pub fn is_subunit(spec: &OperatorSpec, field: &VectorField, x: &[f64], tol: f64) -> bool {
    subunit_margin(spec, field, x) >= -tol
}

pub fn subunit_margin(spec: &OperatorSpec, field: &VectorField, x: &[f64]) -> f64 {
    let n = spec.n;
    let mut a = spec.a2_at(x);
    let v = field.at(x);
    for i in 0..n {
        for j in 0..n {
            a[i * n + j] -= v[i] * v[j];
        }
    }
    sym_min_eigenvalue(&a, n)
}

#[derive(Debug, Clone)]
pub struct OrFields {
    /// Rescaled fields Ỹ_j = C^{-1/2} Σ_i a_ij ∂_i.
    pub fields: Vec<VectorField>,
    pub c: f64,
}

/// Oleinik–Radkevich fields rescaled by C = 2·max_j sup a_jj over `samples`.
pub fn or_fields(spec: &OperatorSpec, samples: &[Vec<f64>]) -> OrFields {
    let n = spec.n;
    let mut sup: f64 = 0.0;
    for x in samples {
        for j in 0..n {
            sup = sup.max(spec.coeff(j, j).value(x));
        }
    }
    let c = 2.0 * sup;
    let scale = if c > 0.0 { 1.0 / c.sqrt() } else { 0.0 };
    let fields = (0..n)
        .map(|j| {
            VectorField::new(
                (0..n)
                    .map(|i| {
                        let a = spec.coeff(i, j).clone();
                        if scale == 1.0 {
                            a
                        } else {
                            Expr::mul(expr::constant(scale), a)
                        }
                    })
                    .collect(),
            )
        })
        .collect();
    OrFields { fields, c }
}

/// Unscaled Y_j = Σ_i a_ij ∂_i.
pub fn or_fields_unscaled(spec: &OperatorSpec) -> Vec<VectorField> {
    let n = spec.n;
    (0..n)
        .map(|j| VectorField::new((0..n).map(|i| spec.coeff(i, j).clone()).collect()))
        .collect()
}

/// Smallest r such that the fields and their iterated brackets of length
/// ≤ r span ℝⁿ at x with smallest singular value above `tol`.
pub fn bracket_depth(
    fields: &[VectorField],
    x: &[f64],
    max_depth: usize,
    tol: f64,
) -> Result<usize, OperatorError> {
    let n = x.len();
    let mut level: Vec<VectorField> = fields.iter().filter(|f| !f.is_zero()).cloned().collect();
    let mut columns: Vec<Vec<f64>> = Vec::new();
    for depth in 1..=max_depth {
        columns.extend(level.iter().map(|f| f.at(x)));
        if smallest_singular(&columns, n) > tol {
            return Ok(depth);
        }
        if depth == max_depth {
            break;
        }
        let mut next = Vec::new();
        for a in fields {
            for b in &level {
                let br = a.bracket(b);
                if !br.is_zero() && !next.contains(&br) {
                    next.push(br);
                }
            }
        }
        level = next;
    }
    Err(OperatorError::NotSpanned { max_depth, point: x.to_vec() })
}

fn smallest_singular(columns: &[Vec<f64>], n: usize) -> f64 {
    if columns.len() < n {
        return 0.0;
    }
    let mut g = vec![0.0; n * n];
    for v in columns {
        for i in 0..n {
            for j in 0..n {
                g[i * n + j] += v[i] * v[j];
            }
        }
    }
    sym_min_eigenvalue(&g, n).max(0.0).sqrt()
}

/// Local Markov average 𝖸_h f = (1/n) Σ_j (1/2h) ∫_{-h}^{h} f(e^{tỸ_j} x) dt
/// for a grid function f on the torus, evaluated at every grid node.
pub fn or_local_markov(or: &OrFields, h: f64, f: &[f64], grid: &PeriodicGrid) -> Vec<f64> {
    let n = grid.n;
    let q = GaussLegendre::new(16);
    let mut pos: Vec<(f64, f64)> = q.on(0.0, h).collect();
    pos.sort_by(|a, b| a.0.total_cmp(&b.0));
    let mut out = vec![0.0; f.len()];
    for (node, o) in out.iter_mut().enumerate() {
        let x0 = grid.point(node);
        let mut acc = 0.0;
        for field in &or.fields {
            for sign in [1.0, -1.0] {
                let mut y = x0.clone();
                let mut t_prev = 0.0;
                for &(t, w) in &pos {
                    let _ = rk4_autonomous(&mut y, sign * (t - t_prev), 1e-3, |p, dp| {
                        for (k, c) in field.comps.iter().enumerate() {
                            dp[k] = c.value(p);
                        }
                        Ok(())
                    });
                    t_prev = t;
                    let yw = wrap(&y);
                    acc += w * grid.interpolate(f, &yw);
                }
            }
        }
        *o = acc / (2.0 * h * n as f64);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::expr::parse;
    use proptest::prelude::*;

    fn spec2(a11: &str, a12: &str, a22: &str) -> OperatorSpec {
        let p = |s: &str| parse(s).unwrap();
        OperatorSpec::new(
            "t",
            vec![vec![p(a11), p(a12)], vec![p(a12), p(a22)]],
            vec![],
            expr::constant(0.0),
            0.5,
        )
        .unwrap()
    }

    #[test]
    fn laplacian_symbol() {
        let s = OperatorSpec::laplacian(2);
        assert_eq!(principal_symbol(&s, &[0.3, 0.4], &[1.0, 2.0]), 5.0);
        assert_eq!(principal_symbol(&s, &[0.3, 0.4], &[0.0, 0.0]), 0.0);
    }

    #[test]
    fn grushin_symbol() {
        let s = OperatorSpec::grushin(1);
        let (x1, x2, a, b) = (0.7, -0.2, 1.3, -0.4);
        let v = principal_symbol(&s, &[x1, x2], &[a, b]);
        assert!((v - (a * a + x1 * x1 * b * b)).abs() < 1e-14);
    }

    #[test]
    fn psd_checks() {
        let r = check_psd(&OperatorSpec::laplacian(2), 8);
        assert_eq!(r.min_eigenvalue, 1.0);
        assert!(r.pass);
        let g = check_psd(&OperatorSpec::grushin(1), 16);
        assert_eq!(g.min_eigenvalue, 0.0);
        assert_eq!(g.worst_point[0], 0.0);
        let bad = check_psd(&spec2("sin(2*pi*x1)", "0", "1"), 16);
        assert!(!bad.pass);
        assert!(bad.min_eigenvalue < -0.5);
        assert!(bad.worst_point[0] > 0.5);
    }

    #[test]
    fn rejects_asymmetric_and_out_of_range() {
        let p = |s: &str| parse(s).unwrap();
        let asym = OperatorSpec::new(
            "a",
            vec![vec![p("1"), p("x1")], vec![p("x2"), p("1")]],
            vec![],
            p("0"),
            1.0,
        );
        assert!(matches!(asym, Err(OperatorError::NotSymmetric { .. })));
        let arity = OperatorSpec::new("a", vec![vec![p("x2")]], vec![], p("0"), 1.0);
        assert!(matches!(arity, Err(OperatorError::Arity { .. })));
        let eps = OperatorSpec::new("a", vec![vec![p("1")]], vec![], p("0"), 0.0);
        assert!(matches!(eps, Err(OperatorError::Epsilon(_))));
    }

    #[test]
    fn subunit_examples() {
        let g = OperatorSpec::grushin(1);
        let zero = VectorField::new(vec![expr::constant(0.0), expr::constant(0.0)]);
        assert!(is_subunit(&g, &zero, &[0.3, 0.1], 0.0));
        let x1d2 = VectorField::new(vec![expr::constant(0.0), expr::var(0)]);
        for x in [[0.0, 0.0], [0.5, -1.0], [-2.0, 3.0]] {
            assert!(is_subunit(&g, &x1d2, &x, 1e-12));
            // equality direction: the margin is exactly zero
            assert!(subunit_margin(&g, &x1d2, &x).abs() < 1e-12);
        }
        let lap = OperatorSpec::laplacian(2);
        let two = VectorField::coordinate(2, 0).scaled(2.0);
        assert!(!is_subunit(&lap, &two, &[0.0, 0.0], 1e-10));
    }

    #[test]
    fn or_fields_for_grushin_and_laplacian() {
        let lap = OperatorSpec::laplacian(2);
        let or = or_fields(&lap, &lattice(2, 4));
        assert_eq!(or.c, 2.0);
        let unscaled = or_fields_unscaled(&OperatorSpec::grushin(2));
        assert_eq!(unscaled[0].at(&[0.5, 0.0]), vec![1.0, 0.0]);
        assert_eq!(unscaled[1].at(&[0.5, 0.0]), vec![0.0, 0.5f64.powi(4)]);
    }

    #[test]
    fn or_fields_are_subunit_on_samples() {
        let s = spec2("1 + x2^2", "x1*x2/2", "x1^2 + cos(x2)^2");
        let samples: Vec<Vec<f64>> =
            lattice(2, 32).into_iter().map(|x| vec![2.0 * x[0] - 1.0, 2.0 * x[1] - 1.0]).collect();
        let or = or_fields(&s, &samples);
        for x in &samples {
            for f in &or.fields {
                assert!(is_subunit(&s, f, x, 1e-12), "{x:?}");
            }
        }
    }

    #[test]
    fn hormander_depths() {
        let lap = or_fields_unscaled(&OperatorSpec::laplacian(2));
        assert_eq!(bracket_depth(&lap, &[0.2, 0.3], 4, 1e-8).unwrap(), 1);
        let g = or_fields_unscaled(&OperatorSpec::grushin(1));
        assert_eq!(bracket_depth(&g, &[0.0, 0.4], 6, 1e-8).unwrap(), 3);
        assert_eq!(bracket_depth(&g, &[0.5, 0.4], 6, 1e-8).unwrap(), 1);
        let sos = vec![VectorField::coordinate(2, 0), VectorField::new(vec![expr::constant(0.0), expr::var(0)])];
        assert_eq!(bracket_depth(&sos, &[0.0, 0.4], 6, 1e-8).unwrap(), 2);
        let flat = vec![VectorField::coordinate(2, 0)];
        assert!(matches!(bracket_depth(&flat, &[0.0, 0.0], 4, 1e-8), Err(OperatorError::NotSpanned { .. })));
    }

    #[test]
    fn bracket_depth_invariant_under_scaling() {
        let g = or_fields_unscaled(&OperatorSpec::grushin(2));
        for s in [0.5, 3.0] {
            let scaled: Vec<_> = g.iter().map(|f| f.scaled(s)).collect();
            assert_eq!(bracket_depth(&scaled, &[0.0, 0.1], 8, 1e-8).unwrap(), 5);
        }
    }

    #[test]
    fn local_markov_constant_and_cosine() {
        let lap = OperatorSpec::laplacian(1);
        let or = or_fields(&lap, &lattice(1, 8));
        let grid = PeriodicGrid::new(1, 512);
        let ones = vec![1.0; grid.len()];
        for v in or_local_markov(&or, 0.1, &ones, &grid) {
            assert!((v - 1.0).abs() < 1e-12);
        }
        let k = 2.0 * std::f64::consts::PI;
        let f: Vec<f64> = (0..grid.len()).map(|i| (k * grid.point(i)[0]).cos()).collect();
        let h = 0.1;
        let ht = h / 2f64.sqrt();
        let mult = (k * ht).sin() / (k * ht);
        let out = or_local_markov(&or, h, &f, &grid);
        for i in (0..grid.len()).step_by(37) {
            assert!((out[i] - mult * f[i]).abs() < 2e-4, "{} vs {}", out[i], mult * f[i]);
        }
    }

    #[test]
    fn local_markov_preserves_linear_profile_in_flat_region() {
        // f(x) = x near the middle of the circle; the odd t-average keeps it
        let lap = OperatorSpec::laplacian(1);
        let or = or_fields(&lap, &lattice(1, 8));
        let grid = PeriodicGrid::new(1, 256);
        let f: Vec<f64> = (0..grid.len()).map(|i| grid.point(i)[0]).collect();
        let out = or_local_markov(&or, 0.05, &f, &grid);
        for i in 64..192 {
            assert!((out[i] - f[i]).abs() < 1e-12);
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(50))]
        #[test]
        fn matrix_subunit_inequality(seed in 0u64..u64::MAX) {
            // A = G Gᵀ with G random 3×3; |Σ_i a_ij ξ_i|² ≤ 2 a_jj ⟨Aξ,ξ⟩
            let mut s = seed | 1;
            let mut next = move || {
                s ^= s << 13; s ^= s >> 7; s ^= s << 17;
                (s >> 11) as f64 / (1u64 << 53) as f64 * 2.0 - 1.0
            };
            let n = 3;
            let g: Vec<f64> = (0..9).map(|_| next()).collect();
            let mut a = [0.0; 9];
            for i in 0..n { for j in 0..n { for k in 0..n { a[i*n+j] += g[i*n+k]*g[j*n+k]; } } }
            for _ in 0..200 {
                let xi: Vec<f64> = (0..n).map(|_| next()).collect();
                let q: f64 = (0..n).map(|i| (0..n).map(|j| a[i*n+j]*xi[i]*xi[j]).sum::<f64>()).sum();
                for j in 0..n {
                    let lhs: f64 = (0..n).map(|i| a[i*n+j]*xi[i]).sum::<f64>().powi(2);
                    prop_assert!(lhs <= 2.0 * a[j*n+j] * q + 1e-9);
                }
            }
        }
    }
}

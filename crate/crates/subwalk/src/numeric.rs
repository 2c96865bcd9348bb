//! Scalar-generic numerical kernels: Gauss–Legendre rules, a fixed-step
//! RK4 integrator, and tiny dense linear algebra for n ≤ 4 matrices.

use num_traits::Float;

fn c<T: Float>(v: f64) -> T {
    T::from(v).unwrap()
}

/// Gauss–Legendre nodes and weights on [-1, 1].
///
/// Newton iteration on P_m started from the Chebyshev-like guess; nodes
/// come back in increasing order.
pub fn gauss_legendre<T: Float>(m: usize) -> (Vec<T>, Vec<T>) {
    assert!(m >= 1, "quadrature needs at least one node");
    let mut nodes = vec![T::zero(); m];
    let mut weights = vec![T::zero(); m];
    let pi = c::<T>(std::f64::consts::PI);
    let mf = c::<T>(m as f64);
    for i in 0..m.div_ceil(2) {
        let mut x = (pi * (c::<T>(i as f64) + c(0.75)) / (mf + c(0.5))).cos();
        let mut dp = T::one();
        for _ in 0..100 {
            let (p, d) = legendre(m, x);
            dp = d;
            let dx = p / d;
            x = x - dx;
            if dx.abs() <= T::epsilon() * c(4.0) {
                break;
            }
        }
        let (_, d) = legendre(m, x);
        if d != T::zero() {
            dp = d;
        }
        let w = c::<T>(2.0) / ((T::one() - x * x) * dp * dp);
        nodes[i] = -x;
        nodes[m - 1 - i] = x;
        weights[i] = w;
        weights[m - 1 - i] = w;
    }
    if m % 2 == 1 {
        nodes[m / 2] = T::zero();
    }
    (nodes, weights)
}

fn legendre<T: Float>(m: usize, x: T) -> (T, T) {
    let mut p0 = T::one();
    let mut p1 = x;
    if m == 0 {
        return (T::one(), T::zero());
    }
    for k in 2..=m {
        let kf = c::<T>(k as f64);
        let p2 = ((c::<T>(2.0) * kf - T::one()) * x * p1 - (kf - T::one()) * p0) / kf;
        p0 = p1;
        p1 = p2;
    }
    let mf = c::<T>(m as f64);
    let d = mf * (x * p1 - p0) / (x * x - T::one());
    (p1, d)
}

/// Precomputed Gauss–Legendre rule, reusable across intervals.
#[derive(Debug, Clone)]
pub struct GaussLegendre {
    pub nodes: Vec<f64>,
    pub weights: Vec<f64>,
}

impl GaussLegendre {
    pub fn new(m: usize) -> Self {
        let (nodes, weights) = gauss_legendre(m);
        Self { nodes, weights }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Nodes and weights mapped onto [a, b].
    pub fn on(&self, a: f64, b: f64) -> impl Iterator<Item = (f64, f64)> + '_ {
        let mid = 0.5 * (a + b);
        let half = 0.5 * (b - a);
        self.nodes
            .iter()
            .zip(&self.weights)
            .map(move |(x, w)| (mid + half * x, half * w))
    }

    pub fn integrate(&self, a: f64, b: f64, mut f: impl FnMut(f64) -> f64) -> f64 {
        self.on(a, b).map(|(t, w)| w * f(t)).sum()
    }
}

/// Classical RK4 with at most `max_step` per step, integrating `y' = f(y)`
/// from time 0 to `t` (negative `t` runs backwards).
pub fn rk4_autonomous<T: Float>(
    y: &mut [T],
    t: T,
    max_step: T,
    mut f: impl FnMut(&[T], &mut [T]) -> Result<(), ()>,
) -> Result<(), ()> {
    let n = y.len();
    if t == T::zero() {
        return Ok(());
    }
    let steps = (t.abs() / max_step).ceil().to_usize().unwrap_or(1).max(1);
    let dt = t / c(steps as f64);
    let half = dt / c(2.0);
    let mut k1 = vec![T::zero(); n];
    let mut k2 = vec![T::zero(); n];
    let mut k3 = vec![T::zero(); n];
    let mut k4 = vec![T::zero(); n];
    let mut tmp = vec![T::zero(); n];
    for _ in 0..steps {
        f(y, &mut k1)?;
        for i in 0..n {
            tmp[i] = y[i] + half * k1[i];
        }
        f(&tmp, &mut k2)?;
        for i in 0..n {
            tmp[i] = y[i] + half * k2[i];
        }
        f(&tmp, &mut k3)?;
        for i in 0..n {
            tmp[i] = y[i] + dt * k3[i];
        }
        f(&tmp, &mut k4)?;
        for i in 0..n {
            y[i] = y[i] + dt / c(6.0) * (k1[i] + c::<T>(2.0) * (k2[i] + k3[i]) + k4[i]);
        }
    }
    Ok(())
}

/// Eigenvalues of a small symmetric matrix (row-major), ascending.
/// Cyclic Jacobi; exact enough for the n ≤ 4 matrices used here.
pub fn sym_eigenvalues(a: &[f64], n: usize) -> Vec<f64> {
    let mut m = a.to_vec();
    for _sweep in 0..64 {
        let mut off = 0.0;
        for p in 0..n {
            for q in p + 1..n {
                off += m[p * n + q] * m[p * n + q];
            }
        }
        if off < 1e-300 {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                let apq = m[p * n + q];
                if apq.abs() < 1e-300 {
                    continue;
                }
                let app = m[p * n + p];
                let aqq = m[q * n + q];
                let theta = (aqq - app) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let cs = 1.0 / (t * t + 1.0).sqrt();
                let sn = t * cs;
                for k in 0..n {
                    let mkp = m[k * n + p];
                    let mkq = m[k * n + q];
                    m[k * n + p] = cs * mkp - sn * mkq;
                    m[k * n + q] = sn * mkp + cs * mkq;
                }
                for k in 0..n {
                    let mpk = m[p * n + k];
                    let mqk = m[q * n + k];
                    m[p * n + k] = cs * mpk - sn * mqk;
                    m[q * n + k] = sn * mpk + cs * mqk;
                }
            }
        }
    }
    let mut ev: Vec<f64> = (0..n).map(|i| m[i * n + i]).collect();
    ev.sort_by(|a, b| a.total_cmp(b));
    ev
}

pub fn sym_min_eigenvalue(a: &[f64], n: usize) -> f64 {
    match n {
        0 => f64::INFINITY,
        1 => a[0],
        2 => {
            let tr = 0.5 * (a[0] + a[3]);
            let d = (0.25 * (a[0] - a[3]).powi(2) + a[1] * a[2]).max(0.0).sqrt();
            tr - d
        }
        _ => sym_eigenvalues(a, n)[0],
    }
}

/// Solve `a x = b` for a small dense matrix by partial-pivot elimination.
pub fn solve(a: &[f64], b: &[f64], n: usize) -> Option<Vec<f64>> {
    let mut m = a.to_vec();
    let mut x = b.to_vec();
    for col in 0..n {
        let piv = (col..n).max_by(|&i, &j| m[i * n + col].abs().total_cmp(&m[j * n + col].abs()))?;
        if m[piv * n + col].abs() < 1e-300 {
            return None;
        }
        if piv != col {
            for k in 0..n {
                m.swap(piv * n + k, col * n + k);
            }
            x.swap(piv, col);
        }
        for r in col + 1..n {
            let f = m[r * n + col] / m[col * n + col];
            if f != 0.0 {
                for k in col..n {
                    m[r * n + k] -= f * m[col * n + k];
                }
                x[r] -= f * x[col];
            }
        }
    }
    for r in (0..n).rev() {
        let mut s = x[r];
        for k in r + 1..n {
            s -= m[r * n + k] * x[k];
        }
        x[r] = s / m[r * n + r];
    }
    Some(x)
}

pub fn inverse(a: &[f64], n: usize) -> Option<Vec<f64>> {
    let mut inv = vec![0.0; n * n];
    for j in 0..n {
        let mut e = vec![0.0; n];
        e[j] = 1.0;
        let col = solve(a, &e, n)?;
        for i in 0..n {
            inv[i * n + j] = col[i];
        }
    }
    Some(inv)
}

pub fn determinant(a: &[f64], n: usize) -> f64 {
    let mut m = a.to_vec();
    let mut det = 1.0;
    for col in 0..n {
        let piv = match (col..n).max_by(|&i, &j| m[i * n + col].abs().total_cmp(&m[j * n + col].abs())) {
            Some(p) => p,
            None => return 0.0,
        };
        if m[piv * n + col] == 0.0 {
            return 0.0;
        }
        if piv != col {
            for k in 0..n {
                m.swap(piv * n + k, col * n + k);
            }
            det = -det;
        }
        det *= m[col * n + col];
        for r in col + 1..n {
            let f = m[r * n + col] / m[col * n + col];
            for k in col..n {
                m[r * n + k] -= f * m[col * n + k];
            }
        }
    }
    det
}

pub fn mat_vec(a: &[f64], x: &[f64], n: usize) -> Vec<f64> {
    (0..n).map(|i| (0..n).map(|k| a[i * n + k] * x[k]).sum()).collect()
}

pub fn mat_mul(a: &[f64], b: &[f64], n: usize) -> Vec<f64> {
    let mut out = vec![0.0; n * n];
    for i in 0..n {
        for k in 0..n {
            let aik = a[i * n + k];
            for j in 0..n {
                out[i * n + j] += aik * b[k * n + j];
            }
        }
    }
    out
}

/// Ordinary least squares line fit; returns (slope, intercept, r²).
pub fn linear_fit(x: &[f64], y: &[f64]) -> (f64, f64, f64) {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = x.iter().map(|a| (a - mx).powi(2)).sum();
    let syy: f64 = y.iter().map(|b| (b - my).powi(2)).sum();
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let r2 = if syy > 0.0 { sxy * sxy / (sxx * syy) } else { 1.0 };
    (slope, intercept, r2)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn gauss_legendre_integrates_polynomials_exactly() {
        for m in [1usize, 2, 5, 8, 16] {
            let q = GaussLegendre::new(m);
            for deg in 0..2 * m {
                let exact = if deg % 2 == 0 { 2.0 / (deg as f64 + 1.0) } else { 0.0 };
                let v = q.integrate(-1.0, 1.0, |x| x.powi(deg as i32));
                assert!((v - exact).abs() < 1e-13, "m={m} deg={deg}: {v}");
            }
        }
    }

    #[test]
    fn sixteen_point_rule_known_first_node() {
        let (x, w) = gauss_legendre::<f64>(16);
        assert!((x[15] - 0.989_400_934_991_649_9).abs() < 1e-15);
        assert!((w[15] - 0.027_152_459_411_754_1).abs() < 1e-15);
    }

    #[test]
    fn single_precision_rule() {
        let (x, w) = gauss_legendre::<f32>(4);
        let s: f32 = x.iter().zip(&w).map(|(x, w)| w * x * x).sum();
        assert!((s - 2.0 / 3.0).abs() < 1e-6);
    }

    #[test]
    fn rk4_exponential_growth() {
        let mut y = [1.0f64];
        rk4_autonomous(&mut y, 1.0, 1e-3, |y, dy| {
            dy[0] = y[0];
            Ok(())
        })
        .unwrap();
        assert!((y[0] - std::f64::consts::E).abs() < 1e-12);
    }

    #[test]
    fn rk4_rotation_round_trip() {
        let mut y = [1.0f64, 0.0];
        let rot = |y: &[f64], dy: &mut [f64]| {
            dy[0] = -y[1];
            dy[1] = y[0];
            Ok(())
        };
        rk4_autonomous(&mut y, 2.0, 1e-3, rot).unwrap();
        assert!((y[0] - 2.0f64.cos()).abs() < 1e-12);
        rk4_autonomous(&mut y, -2.0, 1e-3, rot).unwrap();
        assert!((y[0] - 1.0).abs() < 1e-12 && y[1].abs() < 1e-12);
    }

    #[test]
    fn small_linear_algebra() {
        let a = [4.0, 1.0, 0.0, 1.0, 3.0, 1.0, 0.0, 1.0, 2.0];
        let ev = sym_eigenvalues(&a, 3);
        let tr: f64 = ev.iter().sum();
        assert!((tr - 9.0).abs() < 1e-12);
        assert!((ev.iter().product::<f64>() - determinant(&a, 3)).abs() < 1e-10);
        let inv = inverse(&a, 3).unwrap();
        let id = mat_mul(&a, &inv, 3);
        for i in 0..3 {
            for j in 0..3 {
                let e = if i == j { 1.0 } else { 0.0 };
                assert!((id[i * 3 + j] - e).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn fit_recovers_line() {
        let x = [0.0, 1.0, 2.0, 3.0];
        let y: Vec<f64> = x.iter().map(|v| 2.0 * v - 1.0).collect();
        let (s, i, r2) = linear_fit(&x, &y);
        assert!((s - 2.0).abs() < 1e-14 && (i + 1.0).abs() < 1e-14 && (r2 - 1.0).abs() < 1e-14);
    }

    proptest! {
        #[test]
        fn two_by_two_closed_form_matches_jacobi(a in -3.0f64..3.0, b in -3.0f64..3.0, d in -3.0f64..3.0) {
            let m = [a, b, b, d];
            let j = sym_eigenvalues(&m, 2)[0];
            prop_assert!((sym_min_eigenvalue(&m, 2) - j).abs() < 1e-12);
        }
    }
}

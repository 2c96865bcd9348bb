//! Discrete subunit distance: anisotropic Dijkstra on a box grid with edge
//! costs √(vᵀ (A₂ + ε I)⁻¹ v) taken at edge midpoints.

use std::cmp::Ordering;
use std::collections::BinaryHeap;

use crate::fefferman_phong::{NumericDiffeo, UniversalBlock};
use crate::numeric;
use crate::operator::OperatorSpec;

pub const DEFAULT_EPS_SCHEDULE: [f64; 3] = [1e-2, 1e-3, 1e-4];

#[derive(Debug, Clone, PartialEq)]
pub struct MetricGrid {
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
    /// Nodes per axis.
    pub resolution: Vec<usize>,
    pub eps_reg: f64,
    /// Integer offsets, each a vector of length n.
    pub stencil: Vec<Vec<i64>>,
}

/// All nonzero offsets with max-norm at most `radius`.
pub fn box_stencil(n: usize, radius: i64) -> Vec<Vec<i64>> {
    let side = (2 * radius + 1) as usize;
    let mut out = Vec::new();
    for mut k in 0..side.pow(n as u32) {
        let o: Vec<i64> = (0..n)
            .map(|_| {
                let d = (k % side) as i64 - radius;
                k /= side;
                d
            })
            .collect();
        if o.iter().any(|&d| d != 0) {
            out.push(o);
        }
    }
    out
}

impl MetricGrid {
    /// Box centered at `x0` with the given half-widths; x0 is a node when
    /// the resolution is odd.
    pub fn around(x0: &[f64], half: &[f64], resolution: usize, eps_reg: f64) -> Self {
        let n = x0.len();
        assert!(resolution >= 16, "resolution must be at least 16");
        Self {
            lower: x0.iter().zip(half).map(|(c, h)| c - h).collect(),
            upper: x0.iter().zip(half).map(|(c, h)| c + h).collect(),
            resolution: vec![resolution; n],
            eps_reg,
            stencil: box_stencil(n, 2),
        }
    }

    pub fn dim(&self) -> usize {
        self.lower.len()
    }

    pub fn len(&self) -> usize {
        self.resolution.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn spacing(&self, axis: usize) -> f64 {
        (self.upper[axis] - self.lower[axis]) / (self.resolution[axis] - 1) as f64
    }

    pub fn multi_index(&self, mut i: usize) -> Vec<usize> {
        self.resolution
            .iter()
            .map(|&r| {
                let k = i % r;
                i /= r;
                k
            })
            .collect()
    }

    pub fn flat_index(&self, idx: &[usize]) -> usize {
        idx.iter().zip(&self.resolution).rev().fold(0, |acc, (&k, &r)| acc * r + k)
    }

    pub fn node(&self, i: usize) -> Vec<f64> {
        self.multi_index(i)
            .iter()
            .enumerate()
            .map(|(a, &k)| self.lower[a] + k as f64 * self.spacing(a))
            .collect()
    }

    /// Index of the node nearest to x.
    pub fn nearest(&self, x: &[f64]) -> usize {
        let idx: Vec<usize> = (0..self.dim())
            .map(|a| {
                let u = ((x[a] - self.lower[a]) / self.spacing(a)).round();
                u.clamp(0.0, (self.resolution[a] - 1) as f64) as usize
            })
            .collect();
        self.flat_index(&idx)
    }

    pub fn with_eps(&self, eps_reg: f64) -> Self {
        Self { eps_reg, ..self.clone() }
    }
}

/// Cost of the constant-velocity segment v at x: √(vᵀ (A₂(x) + ε I)⁻¹ v).
pub fn local_cost(spec: &OperatorSpec, x: &[f64], v: &[f64], eps_reg: f64) -> f64 {
    let n = spec.n;
    let mut a = spec.a2_at(x);
    cost_from_matrix(&mut a, n, v, eps_reg)
}

fn cost_from_matrix(a: &mut [f64], n: usize, v: &[f64], eps_reg: f64) -> f64 {
    if v.iter().all(|&c| c == 0.0) {
        return 0.0;
    }
    for i in 0..n {
        a[i * n + i] += eps_reg;
    }
    let y = numeric::solve(a, v, n).expect("regularized matrix is positive definite");
    v.iter().zip(&y).map(|(p, q)| p * q).sum::<f64>().max(0.0).sqrt()
}

#[derive(Debug, Clone, PartialEq)]
pub struct DistanceField {
    pub x0: Vec<f64>,
    pub source: usize,
    pub grid: MetricGrid,
    pub values: Vec<f64>,
    /// Regularizations combined into `values`.
    pub eps: Vec<f64>,
}

#[derive(Copy, Clone, PartialEq)]
struct Item {
    d: f64,
    node: usize,
}

impl Eq for Item {}

impl Ord for Item {
    fn cmp(&self, other: &Self) -> Ordering {
        other.d.total_cmp(&self.d).then_with(|| other.node.cmp(&self.node))
    }
}

impl PartialOrd for Item {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

/// (A₂ + ε I)⁻¹ sampled on the half-step lattice, which holds every stencil
/// midpoint.
struct HalfLattice {
    res: Vec<usize>,
    inv: Vec<f64>,
    n: usize,
}

impl HalfLattice {
    fn new(spec: &OperatorSpec, grid: &MetricGrid) -> Self {
        let n = grid.dim();
        let res: Vec<usize> = grid.resolution.iter().map(|r| 2 * r - 1).collect();
        let total: usize = res.iter().product();
        let mut inv = Vec::with_capacity(total * n * n);
        let mut a = vec![0.0; n * n];
        for mut k in 0..total {
            let x: Vec<f64> = (0..n)
                .map(|ax| {
                    let i = k % res[ax];
                    k /= res[ax];
                    grid.lower[ax] + 0.5 * i as f64 * grid.spacing(ax)
                })
                .collect();
            spec.a2_into(&x, &mut a);
            for i in 0..n {
                a[i * n + i] += grid.eps_reg;
            }
            inv.extend(numeric::inverse(&a, n).expect("regularized matrix is positive definite"));
        }
        Self { res, inv, n }
    }

    fn cost(&self, half_idx: &[usize], v: &[f64]) -> f64 {
        let n = self.n;
        let flat = half_idx.iter().zip(&self.res).rev().fold(0, |acc, (&k, &r)| acc * r + k);
        let m = &self.inv[flat * n * n..(flat + 1) * n * n];
        let mut q = 0.0;
        for i in 0..n {
            for j in 0..n {
                q += v[i] * m[i * n + j] * v[j];
            }
        }
        q.max(0.0).sqrt()
    }
}

/// Dijkstra distances from the node nearest `x0` over the stencil graph.
pub fn distance_map(spec: &OperatorSpec, x0: &[f64], grid: &MetricGrid) -> DistanceField {
    let n = grid.dim();
    let lattice = HalfLattice::new(spec, grid);
    let h: Vec<f64> = (0..n).map(|a| grid.spacing(a)).collect();
    let offsets: Vec<(Vec<i64>, Vec<f64>)> = grid
        .stencil
        .iter()
        .map(|o| (o.clone(), o.iter().zip(&h).map(|(&k, s)| k as f64 * s).collect()))
        .collect();
    let source = grid.nearest(x0);
    let mut dist = vec![f64::INFINITY; grid.len()];
    let mut done = vec![false; grid.len()];
    dist[source] = 0.0;
    let mut heap = BinaryHeap::new();
    heap.push(Item { d: 0.0, node: source });
    let mut nb = vec![0usize; n];
    let mut mid = vec![0usize; n];
    while let Some(Item { d, node }) = heap.pop() {
        if done[node] {
            continue;
        }
        done[node] = true;
        let idx = grid.multi_index(node);
        'edges: for (o, v) in &offsets {
            for a in 0..n {
                let k = idx[a] as i64 + o[a];
                if k < 0 || k >= grid.resolution[a] as i64 {
                    continue 'edges;
                }
                nb[a] = k as usize;
                mid[a] = (2 * idx[a] as i64 + o[a]) as usize;
            }
            let next = grid.flat_index(&nb);
            if done[next] {
                continue;
            }
            let cand = d + lattice.cost(&mid, v);
            if cand < dist[next] {
                dist[next] = cand;
                heap.push(Item { d: cand, node: next });
            }
        }
    }
    DistanceField { x0: x0.to_vec(), source, grid: grid.clone(), values: dist, eps: vec![grid.eps_reg] }
}

/// Limit ε → 0 from maps at a decreasing ε schedule: d_ε ≈ d₀ − C ε^p with
/// the rate fitted from the last three maps (ratio clamped to [√10, 100]).
pub fn extrapolated_distance(spec: &OperatorSpec, x0: &[f64], grid: &MetricGrid, schedule: &[f64]) -> DistanceField {
    let maps: Vec<DistanceField> = schedule.iter().map(|&e| distance_map(spec, x0, &grid.with_eps(e))).collect();
    let mut out = maps.last().expect("nonempty schedule").clone();
    out.eps = schedule.to_vec();
    if maps.len() < 3 {
        return out;
    }
    let k = maps.len();
    let (d1, d2, d3) = (&maps[k - 3].values, &maps[k - 2].values, &maps[k - 1].values);
    let decade = (schedule[k - 3] / schedule[k - 2]).log10();
    let lo = 10f64.powf(0.5 * decade);
    let hi = 10f64.powf(2.0 * decade);
    for i in 0..out.values.len() {
        let step = d3[i] - d2[i];
        let prev = d2[i] - d1[i];
        let ratio = if step > 0.0 { (prev / step).clamp(lo, hi) } else { hi };
        out.values[i] = d3[i] + step.max(0.0) / (ratio - 1.0);
    }
    out
}

impl DistanceField {
    pub fn at(&self, x: &[f64]) -> f64 {
        self.values[self.grid.nearest(x)]
    }

    /// Nodes with d̂ < rho.
    pub fn ball(&self, rho: f64) -> Vec<usize> {
        (0..self.values.len()).filter(|&i| self.values[i] < rho).collect()
    }

    /// max |x_axis − x0_axis| over the ball of radius rho.
    pub fn half_width(&self, rho: f64, axis: usize) -> f64 {
        self.ball(rho)
            .into_iter()
            .map(|i| (self.grid.node(i)[axis] - self.x0[axis]).abs())
            .fold(0.0, f64::max)
    }

    /// Largest violation d(x0, b) − d(x0, a) − d̂_edge(a, b) over sampled
    /// stencil edges; zero up to rounding for an exact shortest-path field.
    pub fn triangle_defect(&self, spec: &OperatorSpec, samples: usize) -> f64 {
        let g = &self.grid;
        let n = g.dim();
        let step = (g.len() / samples.max(1)).max(1);
        let mut worst: f64 = 0.0;
        for a in (0..g.len()).step_by(step) {
            let idx = g.multi_index(a);
            for o in &g.stencil {
                let nb: Option<Vec<usize>> = (0..n)
                    .map(|ax| {
                        let k = idx[ax] as i64 + o[ax];
                        (k >= 0 && k < g.resolution[ax] as i64).then_some(k as usize)
                    })
                    .collect();
                let Some(nb) = nb else { continue };
                let pa = g.node(a);
                let pb = g.node(g.flat_index(&nb));
                let mid: Vec<f64> = pa.iter().zip(&pb).map(|(p, q)| 0.5 * (p + q)).collect();
                let v: Vec<f64> = pa.iter().zip(&pb).map(|(p, q)| q - p).collect();
                let edge = local_cost(spec, &mid, &v, g.eps_reg);
                let b = g.flat_index(&nb);
                worst = worst.max(self.values[b] - self.values[a] - edge);
            }
        }
        worst
    }
}

/// Grid nodes of the subunit ball B(x0, rho).
pub fn ball(spec: &OperatorSpec, x0: &[f64], rho: f64, grid: &MetricGrid) -> Vec<Vec<f64>> {
    let field = distance_map(spec, x0, grid);
    field.ball(rho).into_iter().map(|i| grid.node(i)).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct BallBoxReport {
    pub rho: f64,
    /// min over nodes outside Φ(Q_ρ) of d̂/ρ.
    pub c_in: f64,
    /// max over nodes inside Φ(Q_ρ) of d̂/ρ.
    pub c_out: f64,
    /// Half-width of B(x0, ρ) along each axis.
    pub half_widths: Vec<f64>,
    pub pass: bool,
}

/// Φ(Q_ρ) membership of x, via the inverse map of the block.
pub fn in_image_block(block: &UniversalBlock, phi: &NumericDiffeo, x0: &[f64], x: &[f64]) -> bool {
    let d: Vec<f64> = x.iter().zip(x0).map(|(a, b)| a - b).collect();
    match phi.inverse(&d) {
        Ok(w) => block.contains(&w),
        Err(_) => false,
    }
}

pub fn ballbox_from_field(field: &DistanceField, block: &UniversalBlock, phi: &NumericDiffeo) -> BallBoxReport {
    let rho = block.rho;
    let g = &field.grid;
    let mut c_in = f64::INFINITY;
    let mut c_out: f64 = 0.0;
    for i in 0..g.len() {
        let x = g.node(i);
        let r = field.values[i] / rho;
        if in_image_block(block, phi, &field.x0, &x) {
            c_out = c_out.max(r);
        } else {
            c_in = c_in.min(r);
        }
    }
    let half_widths = (0..g.dim()).map(|a| field.half_width(rho, a)).collect();
    BallBoxReport { rho, c_in, c_out, half_widths, pass: c_in.is_finite() && c_out.is_finite() && c_in > 0.0 }
}

/// Ball-box constants on a grid spanning three block half-widths per axis,
/// with ε-extrapolated distances.
/// The default ε schedule scaled by (min side / max side)², so that the
/// regularized ball stays thinner than the block along its shortest axis.
pub fn eps_schedule(sides: &[f64]) -> Vec<f64> {
    let lo = sides.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = sides.iter().cloned().fold(0.0, f64::max);
    let scale = if hi > 0.0 && lo > 0.0 { (lo / hi).powi(2).min(1.0) } else { 1.0 };
    DEFAULT_EPS_SCHEDULE.iter().map(|e| e * scale).collect()
}

pub fn ballbox_check(
    spec: &OperatorSpec,
    x0: &[f64],
    block: &UniversalBlock,
    phi: &NumericDiffeo,
    resolution: usize,
) -> (BallBoxReport, DistanceField) {
    let half: Vec<f64> = block.sides.iter().map(|s| 3.0 * s).collect();
    let schedule = eps_schedule(&block.sides);
    let grid = MetricGrid::around(x0, &half, resolution, schedule[0]);
    let field = extrapolated_distance(spec, x0, &grid, &schedule);
    (ballbox_from_field(&field, block, phi), field)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::expr::parse;
    use crate::fefferman_phong::{build_block, BlockOptions};
    use proptest::prelude::*;

    #[test]
    fn cost_examples() {
        let lap = OperatorSpec::laplacian(2);
        assert!((local_cost(&lap, &[0.0, 0.0], &[0.3, 0.4], 1e-14) - 0.5).abs() < 1e-9);
        assert_eq!(local_cost(&lap, &[0.0, 0.0], &[0.0, 0.0], 1e-3), 0.0);
        let g = OperatorSpec::grushin(1);
        for eps in [1e-2, 1e-4, 1e-6] {
            let c = local_cost(&g, &[0.0, 0.3], &[0.0, 0.01], eps);
            assert!((c - 0.01 / eps.sqrt()).abs() < 1e-9 * c);
        }
    }

    #[test]
    fn cost_nonincreasing_in_eps() {
        let g = OperatorSpec::grushin(1);
        let mut prev = f64::INFINITY;
        for eps in [1e-6, 1e-4, 1e-2, 1.0] {
            let c = local_cost(&g, &[0.1, 0.0], &[0.02, 0.05], eps);
            assert!(c <= prev);
            prev = c;
        }
    }

    #[test]
    fn euclidean_distances_within_five_percent() {
        let lap = OperatorSpec::laplacian(2);
        let grid = MetricGrid::around(&[0.0, 0.0], &[0.5, 0.5], 101, 1e-12);
        let f = distance_map(&lap, &[0.0, 0.0], &grid);
        let h = grid.spacing(0);
        for i in 0..grid.len() {
            let x = grid.node(i);
            let e = (x[0] * x[0] + x[1] * x[1]).sqrt();
            if e >= 10.0 * h {
                assert!((f.values[i] / e - 1.0).abs() <= 0.05, "{x:?}");
            }
        }
        assert_eq!(f.values[f.source], 0.0);
        assert!(f.triangle_defect(&lap, 500) <= 1e-12);
    }

    #[test]
    fn euclidean_ball_matches_disc() {
        let lap = OperatorSpec::laplacian(2);
        let grid = MetricGrid::around(&[0.0, 0.0], &[0.3, 0.3], 121, 1e-12);
        let pts = ball(&lap, &[0.0, 0.0], 0.2, &grid);
        let f = distance_map(&lap, &[0.0, 0.0], &grid);
        let inside = pts.len();
        let disc = (0..grid.len())
            .filter(|&i| {
                let x = grid.node(i);
                x[0] * x[0] + x[1] * x[1] < 0.04
            })
            .count();
        let sym = (0..grid.len())
            .filter(|&i| {
                let x = grid.node(i);
                (x[0] * x[0] + x[1] * x[1] < 0.04) != (f.values[i] < 0.2)
            })
            .count();
        assert!((sym as f64) <= 0.05 * disc as f64, "{sym} vs {disc} ({inside})");
        assert_eq!(ball(&lap, &[0.0, 0.0], 1e-9, &grid).len(), 1);
    }

    #[test]
    fn grushin_vertical_distance_grows_like_square_root() {
        let g = OperatorSpec::grushin(1);
        let grid = MetricGrid::around(&[0.0, 0.0], &[0.6, 0.12], 161, 1e-6);
        let f = distance_map(&g, &[0.0, 0.0], &grid);
        let ratios: Vec<f64> = [0.03, 0.06, 0.12].iter().map(|&y| f.at(&[0.0, y]) / f64::sqrt(y)).collect();
        let (lo, hi) = ratios.iter().fold((f64::INFINITY, 0.0f64), |(a, b), &r| (a.min(r), b.max(r)));
        assert!(hi / lo < 1.5, "{ratios:?}");
    }

    #[test]
    fn scaling_and_monotonicity_and_symmetry() {
        let p = |s: &str| parse(s).unwrap();
        let spec = OperatorSpec::new(
            "s",
            vec![vec![p("1 + 0.5*sin(x2)"), p("0.2*x1")], vec![p("0.2*x1"), p("x1^2 + 0.1")]],
            vec![],
            p("0"),
            0.5,
        )
        .unwrap();
        let grid = MetricGrid::around(&[0.0, 0.0], &[0.4, 0.4], 41, 1e-3);
        let base = distance_map(&spec, &[0.0, 0.0], &grid);
        for r in [2.0, 10.0] {
            let scaled = OperatorSpec::new(
                "r",
                (0..2).map(|i| (0..2).map(|j| Expr::mul(crate::expr::constant(r * r), spec.coeff(i, j).clone())).collect()).collect(),
                vec![],
                p("0"),
                0.5,
            )
            .unwrap();
            let f = distance_map(&scaled, &[0.0, 0.0], &grid.with_eps(1e-3 * r * r));
            for (a, b) in f.values.iter().zip(&base.values) {
                assert!((a - b / r).abs() <= 1e-12 * b.max(1.0));
            }
        }
        let coarse = distance_map(&spec, &[0.0, 0.0], &grid.with_eps(1e-1));
        let fine = distance_map(&spec, &[0.0, 0.0], &grid.with_eps(1e-5));
        assert!(fine.values.iter().zip(&coarse.values).all(|(a, b)| a >= b));

        let even = OperatorSpec::grushin(1);
        let f = distance_map(&even, &[0.0, 0.0], &grid);
        for i in 0..grid.len() {
            let x = grid.node(i);
            let y = [-x[0], -x[1]];
            assert!((f.values[i] - f.at(&y)).abs() <= 1e-12);
        }
    }

    use crate::expr::Expr;

    #[test]
    fn laplacian_block_constants_are_isotropic() {
        let lap = OperatorSpec::laplacian(2);
        let (b, phi) = build_block(&lap, &[0.0, 0.0], 0.1, &BlockOptions::default()).unwrap();
        let (r, _) = ballbox_check(&lap, &[0.0, 0.0], &b, &phi, 121);
        assert!(r.c_in >= 0.5 && r.c_in <= 2.0, "{r:?}");
        assert!(r.c_out >= 0.5 && r.c_out <= 2.0, "{r:?}");
    }

    #[test]
    fn grushin_outer_constant_stable_and_wrong_exponent_detected() {
        let g = OperatorSpec::grushin(1);
        let mut outs = Vec::new();
        let mut good_in = 0.0;
        for rho in [0.05, 0.1] {
            let (b, phi) = build_block(&g, &[0.0, 0.0], rho, &BlockOptions::default()).unwrap();
            let (r, field) = ballbox_check(&g, &[0.0, 0.0], &b, &phi, 129);
            outs.push(r.c_out);
            good_in = r.c_in;
            if rho == 0.1 {
                let mut wrong = b.clone();
                wrong.kappa[1] = 4.0;
                wrong.sides[1] = b.c[1] * rho.powi(4);
                let bad = ballbox_from_field(&field, &wrong, &phi);
                assert!(bad.c_in < 0.5 * r.c_in, "{bad:?} vs {r:?}");
            }
        }
        assert!(outs[0] / outs[1] < 2.0 && outs[1] / outs[0] < 2.0, "{outs:?}");
        assert!(good_in > 0.0);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]
        #[test]
        fn cost_is_homogeneous_of_degree_one(a in 0.1f64..3.0, b in -1.0f64..1.0, c in 0.1f64..3.0,
                                             v0 in -1.0f64..1.0, v1 in -1.0f64..1.0, t in 0.1f64..5.0) {
            let p = |x: f64| parse(&format!("{x}")).unwrap();
            let off = b * (a * c).sqrt() * 0.9;
            let spec = OperatorSpec::new("h", vec![vec![p(a), p(off)], vec![p(off), p(c)]], vec![], p(0.0), 1.0).unwrap();
            let c1 = local_cost(&spec, &[0.0, 0.0], &[v0, v1], 1e-3);
            let c2 = local_cost(&spec, &[0.0, 0.0], &[t * v0, t * v1], 1e-3);
            prop_assert!((c2 - t * c1).abs() <= 1e-9 * c2.max(1.0));
        }
    }
}

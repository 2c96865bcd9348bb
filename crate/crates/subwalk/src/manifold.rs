//! The flat torus 𝕋ⁿ = [0,1)ⁿ, its atlas of subunit cubes, and the density μ
//! glued from a partition of unity.

use num_traits::Float;
use thiserror::Error;

use crate::fefferman_phong::{build_block, BlockOptions, NumericDiffeo, StageError, UniversalBlock};
use crate::operator::OperatorSpec;

/// Componentwise reduction mod 1 into [0, 1).
pub fn wrap<T: Float>(x: &[T]) -> Vec<T> {
    x.iter().map(|&v| wrap1(v)).collect()
}

pub fn wrap1<T: Float>(v: T) -> T {
    let r = v - v.floor();
    // v slightly below an integer can round up to exactly 1
    if r >= T::one() {
        T::zero()
    } else {
        r
    }
}

/// Representative of a displacement in [-1/2, 1/2).
pub fn wrap_centered<T: Float>(v: T) -> T {
    let half = T::from(0.5).unwrap();
    wrap1(v + half) - half
}

/// Euclidean distance on the flat torus.
pub fn torus_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| wrap_centered(x - y).powi(2))
        .sum::<f64>()
        .sqrt()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TorusManifold {
    pub n: usize,
}

impl TorusManifold {
    pub fn new(n: usize) -> Self {
        Self { n }
    }

    pub fn wrap(&self, x: &[f64]) -> Vec<f64> {
        wrap(x)
    }
}

/// Uniform lattice with nodes at the cell centres (k + ½)/G on each axis, row-major with axis 0
/// fastest.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PeriodicGrid {
    pub n: usize,
    pub g: usize,
}

impl PeriodicGrid {
    pub fn new(n: usize, g: usize) -> Self {
        Self { n, g }
    }

    pub fn len(&self) -> usize {
        self.g.pow(self.n as u32)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn spacing(&self) -> f64 {
        1.0 / self.g as f64
    }

    pub fn cell_volume(&self) -> f64 {
        self.spacing().powi(self.n as i32)
    }

    pub fn multi_index(&self, mut i: usize) -> Vec<usize> {
        (0..self.n)
            .map(|_| {
                let k = i % self.g;
                i /= self.g;
                k
            })
            .collect()
    }

    pub fn flat_index(&self, idx: &[usize]) -> usize {
        idx.iter().rev().fold(0, |acc, &k| acc * self.g + k % self.g)
    }

    pub fn point(&self, i: usize) -> Vec<f64> {
        self.multi_index(i).into_iter().map(|k| (k as f64 + 0.5) / self.g as f64).collect()
    }

    /// Multilinear (hat-function) weights of the 2ⁿ nodes around x.
    pub fn interp_weights(&self, x: &[f64], out: &mut Vec<(usize, f64)>) {
        out.clear();
        let g = self.g as f64;
        let mut base = [0usize; 4];
        let mut frac = [0f64; 4];
        for k in 0..self.n {
            let u = wrap1(x[k]) * g - 0.5;
            let f = u.floor();
            base[k] = (f + g) as usize % self.g;
            frac[k] = u - f;
        }
        for corner in 0..(1usize << self.n) {
            let mut w = 1.0;
            let mut idx = 0usize;
            for k in (0..self.n).rev() {
                let up = (corner >> k) & 1;
                w *= if up == 1 { frac[k] } else { 1.0 - frac[k] };
                idx = idx * self.g + (base[k] + up) % self.g;
            }
            if w != 0.0 {
                out.push((idx, w));
            }
        }
    }

    pub fn interpolate(&self, f: &[f64], x: &[f64]) -> f64 {
        let mut w = Vec::with_capacity(1 << self.n);
        self.interp_weights(x, &mut w);
        w.iter().map(|&(i, c)| c * f[i]).sum()
    }
}

#[derive(Debug, Error)]
pub enum AtlasError {
    #[error("{count} test points are not covered by any inner cube (first: {first:?})")]
    Coverage { count: usize, first: Vec<f64> },
    #[error("block construction failed at center {center:?}: {source}")]
    Block {
        center: Vec<f64>,
        #[source]
        source: StageError,
    },
    #[error("operator dimension {spec} does not match lattice dimension {lattice}")]
    Dimension { spec: usize, lattice: usize },
}

/// One subunit cube on the torus: Ψ(x) = Φ⁻¹(x − center) with the
/// displacement taken in [-1/2, 1/2).
#[derive(Debug, Clone)]
pub struct SubunitChart {
    pub center: Vec<f64>,
    pub block: UniversalBlock,
    pub phi: NumericDiffeo,
    pub c_star: f64,
    /// Half-extent of the dilated cube's image, per torus axis.
    bbox: Vec<f64>,
}

impl SubunitChart {
    pub fn new(center: Vec<f64>, block: UniversalBlock, phi: NumericDiffeo, c_star: f64) -> Self {
        let n = center.len();
        let mut bbox = vec![0.0; n];
        let sides: Vec<f64> = block.sides.iter().map(|s| s * c_star).collect();
        if let Some(m) = phi.affine_matrix() {
            for i in 0..n {
                bbox[i] = (0..n).map(|j| m[i * n + j].abs() * sides[j]).sum();
            }
        } else {
            // corners and face centres of the dilated block, padded
            for corner in 0..3usize.pow(n as u32) {
                let mut k = corner;
                let w: Vec<f64> = (0..n)
                    .map(|j| {
                        let d = (k % 3) as f64 - 1.0;
                        k /= 3;
                        d * sides[j]
                    })
                    .collect();
                if let Ok(x) = phi.forward(&w) {
                    for i in 0..n {
                        bbox[i] = f64::max(bbox[i], x[i].abs());
                    }
                }
            }
            for b in &mut bbox {
                *b *= 1.5;
            }
        }
        Self { center, block, phi, c_star, bbox }
    }

    pub fn dim(&self) -> usize {
        self.center.len()
    }

    pub fn sides(&self) -> &[f64] {
        &self.block.sides
    }

    /// Displacement from the center in [-1/2, 1/2)ⁿ.
    pub fn displacement(&self, x: &[f64]) -> Vec<f64> {
        x.iter().zip(&self.center).map(|(a, c)| wrap_centered(a - c)).collect()
    }

    /// Ψ(x), or None when x is clearly outside the dilated cube.
    pub fn psi(&self, x: &[f64]) -> Option<Vec<f64>> {
        let d = self.displacement(x);
        if d.iter().zip(&self.bbox).any(|(v, b)| v.abs() > *b) {
            return None;
        }
        self.phi.inverse(&d).ok()
    }

    pub fn psi_inv(&self, w: &[f64]) -> Vec<f64> {
        let d = self.phi.forward(w).unwrap_or_else(|_| vec![f64::NAN; w.len()]);
        wrap(&d.iter().zip(&self.center).map(|(a, c)| a + c).collect::<Vec<_>>())
    }

    pub fn in_block(&self, w: &[f64]) -> bool {
        w.iter().zip(&self.block.sides).all(|(v, s)| v.abs() < *s)
    }

    pub fn in_dilated_block(&self, w: &[f64]) -> bool {
        w.iter().zip(&self.block.sides).all(|(v, s)| v.abs() < self.c_star * s)
    }

    /// Ψ(x) if x lies in the inner cube Q_i.
    pub fn inner_coords(&self, x: &[f64]) -> Option<Vec<f64>> {
        self.psi(x).filter(|w| self.in_block(w))
    }

    /// |det DΨ⁻¹(w)|.
    pub fn jacobian_det(&self, w: &[f64]) -> f64 {
        self.phi.jacobian_det(w).abs()
    }

    /// Largest |Ψ(Ψ⁻¹(w)) − w| over a tensor sample of the inner block.
    pub fn round_trip_residual(&self, per_axis: usize) -> f64 {
        let n = self.dim();
        let mut worst: f64 = 0.0;
        for mut k in 0..per_axis.pow(n as u32) {
            let w: Vec<f64> = (0..n)
                .map(|j| {
                    let i = k % per_axis;
                    k /= per_axis;
                    let t = (i as f64 + 0.5) / per_axis as f64 * 2.0 - 1.0;
                    t * self.block.sides[j] * 0.999
                })
                .collect();
            let x = self.psi_inv(&w);
            match self.psi(&x) {
                Some(back) => {
                    for j in 0..n {
                        worst = worst.max((back[j] - w[j]).abs());
                    }
                }
                None => return f64::INFINITY,
            }
        }
        worst
    }
}

#[derive(Debug, Clone)]
pub struct ChartAtlas {
    pub n: usize,
    pub rho: f64,
    pub charts: Vec<SubunitChart>,
}

#[derive(Debug, Clone)]
pub struct AtlasOptions {
    pub block: BlockOptions,
    /// Coverage test lattice resolution per axis.
    pub coverage_resolution: usize,
}

impl Default for AtlasOptions {
    fn default() -> Self {
        Self { block: BlockOptions::default(), coverage_resolution: 200 }
    }
}

/// Chart centers on a product lattice: `counts[k]` equally spaced centers
/// along axis k, offset by `offset[k]`.
pub fn lattice_centers(counts: &[usize], offset: &[f64]) -> Vec<Vec<f64>> {
    let n = counts.len();
    let total: usize = counts.iter().product();
    (0..total)
        .map(|mut k| {
            (0..n)
                .map(|a| {
                    let i = k % counts[a];
                    k /= counts[a];
                    wrap1(offset[a] + i as f64 / counts[a] as f64)
                })
                .collect()
        })
        .collect()
}

pub fn build_atlas(
    spec: &OperatorSpec,
    rho: f64,
    centers: &[Vec<f64>],
    opts: &AtlasOptions,
) -> Result<ChartAtlas, AtlasError> {
    let n = spec.n;
    if let Some(c) = centers.iter().find(|c| c.len() != n) {
        return Err(AtlasError::Dimension { spec: n, lattice: c.len() });
    }
    let mut charts = Vec::with_capacity(centers.len());
    for c in centers {
        let (block, phi) = build_block(spec, c, rho, &opts.block)
            .map_err(|source| AtlasError::Block { center: c.clone(), source })?;
        charts.push(SubunitChart::new(c.clone(), block, phi, opts.block.c_star));
    }
    let atlas = ChartAtlas { n, rho, charts };
    let uncovered = atlas.uncovered_points(opts.coverage_resolution);
    if let Some(first) = uncovered.first() {
        return Err(AtlasError::Coverage { count: uncovered.len(), first: first.clone() });
    }
    Ok(atlas)
}

impl ChartAtlas {
    pub fn len(&self) -> usize {
        self.charts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.charts.is_empty()
    }

    /// Cell centres of a `res`ⁿ lattice not inside any inner cube.
    pub fn uncovered_points(&self, res: usize) -> Vec<Vec<f64>> {
        crate::operator::lattice(self.n, res)
            .into_iter()
            .filter(|x| !self.charts.iter().any(|c| c.inner_coords(x).is_some()))
            .collect()
    }

    /// True when every chart map is affine with the same |det|.
    pub fn uniform_volume(&self) -> Option<f64> {
        let mut det = None;
        for c in &self.charts {
            let m = c.phi.affine_matrix()?;
            let d = crate::numeric::determinant(&m, self.n).abs();
            match det {
                None => det = Some(d),
                Some(e) if (d - e).abs() <= 1e-12 * e => {}
                Some(_) => return None,
            }
        }
        det
    }

    /// Largest h for which every flow from an inner cube stays in the
    /// dilated cube: the step |t|·side_j must not exceed (c* − 1)·side_j.
    pub fn h0(&self) -> f64 {
        self.charts.iter().map(|c| c.c_star - 1.0).fold(f64::INFINITY, f64::min)
    }

    /// Smallest physical speed |side_j · ∂Φ/∂w_j| over charts and axes,
    /// measured at the chart center.
    pub fn min_physical_speed(&self) -> f64 {
        let mut best = f64::INFINITY;
        for c in &self.charts {
            let zero = vec![0.0; self.n];
            let jac = c.phi.jacobian(&zero);
            for j in 0..self.n {
                let col: f64 = (0..self.n).map(|i| jac[i * self.n + j].powi(2)).sum::<f64>().sqrt();
                best = best.min(col * c.block.sides[j]);
            }
        }
        best
    }
}

/// Standard C^∞ bump exp(−1/(1−t²)) on (−1, 1).
pub fn bump(t: f64) -> f64 {
    if t.abs() >= 1.0 {
        0.0
    } else {
        (-1.0 / (1.0 - t * t)).exp()
    }
}

/// μ = Σ_k ψ_k |det DΨ_k| / Z with ψ_k = β_k / Σ_l β_l.
#[derive(Debug, Clone)]
pub struct Density {
    /// Normalization constant Z.
    pub normalization: f64,
    /// Set when every chart is affine with equal volume factor; μ is then
    /// the constant 1.
    pub uniform: bool,
    pub quadrature_resolution: usize,
}

impl Density {
    pub fn build(atlas: &ChartAtlas) -> Self {
        Self::build_with_resolution(atlas, 256)
    }

    pub fn build_with_resolution(atlas: &ChartAtlas, res: usize) -> Self {
        if atlas.uniform_volume().is_some() {
            return Self { normalization: 1.0, uniform: true, quadrature_resolution: res };
        }
        let mut d = Self { normalization: 1.0, uniform: false, quadrature_resolution: res };
        let pts = crate::operator::lattice(atlas.n, res);
        let total: f64 = pts.iter().map(|x| d.unnormalized(atlas, x)).sum::<f64>() / pts.len() as f64;
        d.normalization = total;
        d
    }

    fn bump_weight(chart: &SubunitChart, w: &[f64]) -> f64 {
        w.iter()
            .zip(&chart.block.sides)
            .map(|(v, s)| bump(v / (chart.c_star * s)))
            .product()
    }

    fn unnormalized(&self, atlas: &ChartAtlas, x: &[f64]) -> f64 {
        let mut beta_sum = 0.0;
        let mut acc = 0.0;
        for c in &atlas.charts {
            if let Some(w) = c.psi(x) {
                let b = Self::bump_weight(c, &w);
                if b > 0.0 {
                    beta_sum += b;
                    // |det DΨ(x)| = 1/|det DΦ(w)|
                    acc += b / c.jacobian_det(&w);
                }
            }
        }
        if beta_sum > 0.0 {
            acc / beta_sum
        } else {
            0.0
        }
    }

    /// μ density with respect to Lebesgue measure on the torus.
    pub fn eval(&self, atlas: &ChartAtlas, x: &[f64]) -> f64 {
        if self.uniform {
            return 1.0;
        }
        self.unnormalized(atlas, x) / self.normalization
    }

    /// γ̃_i(w) = μ(Ψ_i⁻¹ w)·|det DΨ_i⁻¹(w)|.
    pub fn local(&self, atlas: &ChartAtlas, chart: usize, w: &[f64]) -> f64 {
        let c = &atlas.charts[chart];
        if self.uniform {
            return c.jacobian_det(w);
        }
        self.eval(atlas, &c.psi_inv(w)) * c.jacobian_det(w)
    }

    /// Midpoint-rule total mass on a `res`ⁿ lattice.
    pub fn total_mass(&self, atlas: &ChartAtlas, res: usize) -> f64 {
        let pts = crate::operator::lattice(atlas.n, res);
        pts.iter().map(|x| self.eval(atlas, x)).sum::<f64>() / pts.len() as f64
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::expr::parse;
    use proptest::prelude::*;

    #[test]
    fn wrap_examples() {
        assert_eq!(wrap(&[1.25, -0.5]), vec![0.25, 0.5]);
        assert_eq!(wrap(&[0.0, 0.0]), vec![0.0, 0.0]);
        assert_eq!(wrap1(-1e-18f64), 0.0);
        assert_eq!(wrap_centered(0.75), -0.25);
        assert_eq!(wrap(&[1.5f32]), vec![0.5f32]);
    }

    proptest! {
        #[test]
        fn wrap_is_idempotent(a in -1e6f64..1e6, b in -10.0f64..10.0) {
            let w = wrap(&[a, b]);
            prop_assert_eq!(wrap(&w), w.clone());
            prop_assert!(w.iter().all(|v| (0.0..1.0).contains(v)));
        }
    }

    #[test]
    fn grid_indexing_and_interpolation() {
        let g = PeriodicGrid::new(2, 8);
        for i in 0..g.len() {
            assert_eq!(g.flat_index(&g.multi_index(i)), i);
        }
        let f: Vec<f64> = (0..g.len()).map(|i| g.point(i)[0] + 2.0 * g.point(i)[1]).collect();
        let v = g.interpolate(&f, &[0.3, 0.4]);
        assert!((v - 1.1).abs() < 1e-12);
        let mut w = Vec::new();
        g.interp_weights(&[0.99, 0.5], &mut w);
        assert!((w.iter().map(|p| p.1).sum::<f64>() - 1.0).abs() < 1e-15);
        assert!(w.iter().any(|p| g.multi_index(p.0)[0] == 0));
    }

    fn laplace_atlas(n: usize, rho: f64, per_axis: usize) -> Result<ChartAtlas, AtlasError> {
        let spec = OperatorSpec::laplacian(n);
        let offs = vec![0.5 / per_axis as f64; n];
        let centers = lattice_centers(&vec![per_axis; n], &offs);
        let opts = AtlasOptions { coverage_resolution: 200, ..Default::default() };
        build_atlas(&spec, rho, &centers, &opts)
    }

    #[test]
    fn laplace_atlas_on_two_torus() {
        let atlas = laplace_atlas(2, 0.1, 5).unwrap();
        assert_eq!(atlas.len(), 25);
        for c in &atlas.charts {
            assert_eq!(c.block.kappa, vec![1.0, 1.0]);
            assert!(c.round_trip_residual(6) <= 1e-8);
        }
        assert!(atlas.uncovered_points(200).is_empty());
    }

    #[test]
    fn single_short_chart_does_not_cover_the_circle() {
        let spec = OperatorSpec::laplacian(1);
        let r = build_atlas(&spec, 0.4, &[vec![0.0]], &AtlasOptions::default());
        assert!(matches!(r, Err(AtlasError::Coverage { .. })));
    }

    #[test]
    fn periodic_grushin_blocks_are_anisotropic_at_the_degeneracy() {
        let p = |s: &str| parse(s).unwrap();
        let spec = OperatorSpec::new(
            "pg",
            vec![vec![p("1"), p("0")], vec![p("0"), p("cos(2*pi*x1)^2")]],
            vec![],
            p("0"),
            0.5,
        )
        .unwrap();
        let rho = 0.12;
        let opts = BlockOptions::default();
        let (deg, _) = build_block(&spec, &[0.25, 0.0], rho, &opts).unwrap();
        let (flat, _) = build_block(&spec, &[0.0, 0.0], rho, &opts).unwrap();
        assert_eq!(deg.kappa, vec![1.0, 2.0]);
        assert_eq!(flat.kappa, vec![1.0, 1.0]);
        assert!(deg.sides[1] < 0.7 * flat.sides[1]);
    }

    #[test]
    fn density_of_symmetric_atlas_is_one() {
        let atlas = laplace_atlas(1, 0.25, 4).unwrap();
        let d = Density::build(&atlas);
        assert!(d.uniform);
        assert!((d.total_mass(&atlas, 256) - 1.0).abs() <= 1e-6);
        for x in [0.0, 0.1, 0.77] {
            assert_eq!(d.eval(&atlas, &[x]), 1.0);
        }
    }

    #[test]
    fn general_density_path_agrees_on_affine_atlas() {
        // Force the quadrature path and check it reproduces the constant.
        let atlas = laplace_atlas(1, 0.25, 4).unwrap();
        let mut d = Density { normalization: 1.0, uniform: false, quadrature_resolution: 256 };
        let pts = crate::operator::lattice(1, 256);
        d.normalization = pts.iter().map(|x| d.unnormalized(&atlas, x)).sum::<f64>() / 256.0;
        assert!((d.total_mass(&atlas, 256) - 1.0).abs() <= 1e-6);
        let min = pts.iter().map(|x| d.eval(&atlas, x)).fold(f64::INFINITY, f64::min);
        assert!(min > 0.0);
        assert!((min - 1.0).abs() < 1e-9);
    }

    #[test]
    fn bump_shape() {
        assert_eq!(bump(1.0), 0.0);
        assert!((bump(0.0) - (-1.0f64).exp()).abs() < 1e-16);
        assert!(bump(0.5) > bump(0.9));
    }
}

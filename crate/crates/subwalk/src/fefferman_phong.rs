//! Calderón–Zygmund selection and the iterated straightening that turns a
//! degenerate operator into its universal block Q_ρ = ∏ ]−c_jρ^{κ_j}, c_jρ^{κ_j}[.
//!
//! Every stage works in displacement coordinates around the block center.
//! Stage j picks a pivot direction, straightens the field
//! Y = ∂_p + Σ_q (a_pq / a_pp) ∂_q along its flow (the pivot coordinate is the
//! flow time, so the mixed coefficients vanish identically), averages the
//! remaining coefficients over the admissible slab and hands the averaged
//! field to the next stage.

use std::fmt;
use std::sync::Arc;

use thiserror::Error;

use crate::expr::{self, Expr};
use crate::numeric::{self, rk4_autonomous, GaussLegendre};
use crate::operator::{OperatorSpec, VectorField};

#[derive(Debug, Clone, Error, PartialEq)]
pub enum DiffeoError {
    #[error("integral curve left the working domain")]
    FlowEscape,
    #[error("affine map is singular")]
    Singular,
}

#[derive(Debug, Clone, Error, PartialEq)]
pub enum StageError {
    #[error("stage {stage}: no dyadic scale up to 2^-40 satisfies the selection rule")]
    NoSelection { stage: usize },
    #[error("stage {stage}: pivot coefficient degenerates at the block center")]
    Degenerate { stage: usize },
    #[error("stage {stage}: integral curve escaped before r1 reached 1e-3")]
    FlowEscape { stage: usize },
    #[error("stage {stage}: straightened coefficients off by {residual:e}")]
    Residual { stage: usize, residual: f64 },
}

impl StageError {
    pub fn stage(&self) -> usize {
        match self {
            StageError::NoSelection { stage }
            | StageError::Degenerate { stage }
            | StageError::FlowEscape { stage }
            | StageError::Residual { stage, .. } => *stage,
        }
    }
}

/// Vector field on ℝᵐ given as a closure.
#[derive(Clone)]
pub struct FieldFn(pub Arc<dyn Fn(&[f64], &mut [f64]) + Send + Sync>);

impl fmt::Debug for FieldFn {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("FieldFn(..)")
    }
}

#[derive(Debug, Clone)]
pub enum ElementaryMap {
    /// x ↦ M x + b.
    Affine { matrix: Vec<f64>, offset: Vec<f64> },
    /// Acts on coordinates `lead..n`; the coordinate `lead + axis` becomes
    /// the flow parameter of `field` normalized to unit `axis` component.
    /// The curve starts on the slice where that coordinate is zero.
    AxisFlow { lead: usize, axis: usize, field: FieldFn, max_step: f64, bound: f64 },
}

/// Composition of elementary maps; `forward` applies them in list order.
#[derive(Debug, Clone)]
pub struct NumericDiffeo {
    pub n: usize,
    pub maps: Vec<ElementaryMap>,
}

pub const JACOBIAN_STEP: f64 = 1e-5;

impl NumericDiffeo {
    pub fn identity(n: usize) -> Self {
        Self { n, maps: Vec::new() }
    }

    pub fn affine(matrix: Vec<f64>, offset: Vec<f64>) -> Self {
        let n = offset.len();
        Self { n, maps: vec![ElementaryMap::Affine { matrix, offset }] }
    }

    pub fn push(&mut self, m: ElementaryMap) {
        self.maps.push(m);
    }

    /// `self` followed by `other`.
    pub fn then(mut self, other: NumericDiffeo) -> NumericDiffeo {
        self.maps.extend(other.maps);
        self
    }

    pub fn forward(&self, w: &[f64]) -> Result<Vec<f64>, DiffeoError> {
        let mut x = w.to_vec();
        for m in &self.maps {
            x = apply(m, &x, self.n, false)?;
        }
        Ok(x)
    }

    pub fn inverse(&self, x: &[f64]) -> Result<Vec<f64>, DiffeoError> {
        let mut w = x.to_vec();
        for m in self.maps.iter().rev() {
            w = apply(m, &w, self.n, true)?;
        }
        Ok(w)
    }

    /// Product matrix and offset when every piece is affine.
    pub fn affine_parts(&self) -> Option<(Vec<f64>, Vec<f64>)> {
        let n = self.n;
        let mut m: Vec<f64> = (0..n * n).map(|k| if k % (n + 1) == 0 { 1.0 } else { 0.0 }).collect();
        let mut b = vec![0.0; n];
        for e in &self.maps {
            match e {
                ElementaryMap::Affine { matrix, offset } => {
                    m = numeric::mat_mul(matrix, &m, n);
                    b = numeric::mat_vec(matrix, &b, n);
                    for i in 0..n {
                        b[i] += offset[i];
                    }
                }
                ElementaryMap::AxisFlow { .. } => return None,
            }
        }
        Some((m, b))
    }

    pub fn affine_matrix(&self) -> Option<Vec<f64>> {
        self.affine_parts().map(|p| p.0)
    }

    pub fn is_affine(&self) -> bool {
        self.maps.iter().all(|m| matches!(m, ElementaryMap::Affine { .. }))
    }

    /// DΦ(w), row-major; exact for affine maps, central differences otherwise.
    pub fn jacobian(&self, w: &[f64]) -> Vec<f64> {
        if let Some(m) = self.affine_matrix() {
            return m;
        }
        let n = self.n;
        let mut jac = vec![0.0; n * n];
        for j in 0..n {
            let mut wp = w.to_vec();
            let mut wm = w.to_vec();
            wp[j] += JACOBIAN_STEP;
            wm[j] -= JACOBIAN_STEP;
            let (Ok(fp), Ok(fm)) = (self.forward(&wp), self.forward(&wm)) else {
                return vec![f64::NAN; n * n];
            };
            for i in 0..n {
                jac[i * n + j] = (fp[i] - fm[i]) / (2.0 * JACOBIAN_STEP);
            }
        }
        jac
    }

    pub fn jacobian_det(&self, w: &[f64]) -> f64 {
        numeric::determinant(&self.jacobian(w), self.n)
    }
}

fn apply(m: &ElementaryMap, x: &[f64], n: usize, inverse: bool) -> Result<Vec<f64>, DiffeoError> {
    match m {
        ElementaryMap::Affine { matrix, offset } => {
            if inverse {
                let rhs: Vec<f64> = x.iter().zip(offset).map(|(a, b)| a - b).collect();
                numeric::solve(matrix, &rhs, n).ok_or(DiffeoError::Singular)
            } else {
                let mut y = numeric::mat_vec(matrix, x, n);
                for i in 0..n {
                    y[i] += offset[i];
                }
                Ok(y)
            }
        }
        ElementaryMap::AxisFlow { lead, axis, field, max_step, bound } => {
            let mut out = x.to_vec();
            let mut tail = x[*lead..].to_vec();
            let s = tail[*axis];
            if !inverse {
                tail[*axis] = 0.0;
            }
            let time = if inverse { -s } else { s };
            axis_flow(&mut tail, *axis, time, field, *max_step, *bound)?;
            tail[*axis] = s;
            out[*lead..].copy_from_slice(&tail);
            Ok(out)
        }
    }
}

/// Integrate dζ/dσ = V(ζ)/V_axis(ζ) for parameter length `time`.
fn axis_flow(
    y: &mut [f64],
    axis: usize,
    time: f64,
    field: &FieldFn,
    max_step: f64,
    bound: f64,
) -> Result<(), DiffeoError> {
    let m = y.len();
    let mut v = vec![0.0; m];
    rk4_autonomous(y, time, max_step, |p, dp| {
        if p.iter().any(|c| !c.is_finite() || c.abs() > bound) {
            return Err(());
        }
        (field.0)(p, &mut v);
        let lead = v[axis];
        if lead.abs() < 1e-12 || !lead.is_finite() {
            return Err(());
        }
        for k in 0..m {
            dp[k] = v[k] / lead;
        }
        Ok(())
    })
    .map_err(|_| DiffeoError::FlowEscape)?;
    if y.iter().any(|c| !c.is_finite() || c.abs() > bound) {
        return Err(DiffeoError::FlowEscape);
    }
    Ok(())
}

/// Lift a map on ℝᵐ to ℝⁿ acting on the trailing m coordinates.
fn lift(map: &ElementaryMap, m: usize, n: usize) -> ElementaryMap {
    let lead = n - m;
    match map {
        ElementaryMap::Affine { matrix, offset } => {
            let mut big: Vec<f64> = (0..n * n).map(|k| if k % (n + 1) == 0 { 1.0 } else { 0.0 }).collect();
            let mut off = vec![0.0; n];
            for i in 0..m {
                for j in 0..m {
                    big[(lead + i) * n + lead + j] = matrix[i * m + j];
                }
                off[lead + i] = offset[i];
            }
            ElementaryMap::Affine { matrix: big, offset: off }
        }
        ElementaryMap::AxisFlow { lead: inner, axis, field, max_step, bound } => ElementaryMap::AxisFlow {
            lead: lead + inner,
            axis: *axis,
            field: field.clone(),
            max_step: *max_step,
            bound: *bound,
        },
    }
}

/// Symmetric coefficient field on ℝᵐ (displacement coordinates).
pub trait CoefficientField: Send + Sync {
    fn dim(&self) -> usize;
    /// Row-major m×m values at z.
    fn eval(&self, z: &[f64], out: &mut [f64]);

    /// Sampled sup over the cube of half-width `half` of |a_ij| and all
    /// partial derivatives up to order 2.
    fn derivative_sup(&self, half: f64, per_axis: usize) -> f64 {
        finite_difference_sup(self, half, per_axis)
    }
}

fn cube_samples(m: usize, half: f64, per_axis: usize) -> Vec<Vec<f64>> {
    let total = per_axis.pow(m as u32);
    (0..total)
        .map(|mut k| {
            (0..m)
                .map(|_| {
                    let i = k % per_axis;
                    k /= per_axis;
                    if per_axis == 1 {
                        0.0
                    } else {
                        -half + 2.0 * half * i as f64 / (per_axis - 1) as f64
                    }
                })
                .collect()
        })
        .collect()
}

fn finite_difference_sup<F: CoefficientField + ?Sized>(f: &F, half: f64, per_axis: usize) -> f64 {
    let m = f.dim();
    let eta = 1e-3 * half.max(1e-6);
    let mut v0 = vec![0.0; m * m];
    let mut vp = vec![0.0; m * m];
    let mut vm = vec![0.0; m * m];
    let mut best: f64 = 0.0;
    for z in cube_samples(m, half, per_axis.min(16)) {
        f.eval(&z, &mut v0);
        best = v0.iter().fold(best, |b, v| b.max(v.abs()));
        for k in 0..m {
            let mut zp = z.clone();
            let mut zm = z.clone();
            zp[k] += eta;
            zm[k] -= eta;
            f.eval(&zp, &mut vp);
            f.eval(&zm, &mut vm);
            for e in 0..m * m {
                let d1 = (vp[e] - vm[e]) / (2.0 * eta);
                let d2 = (vp[e] - 2.0 * v0[e] + vm[e]) / (eta * eta);
                best = best.max(d1.abs()).max(d2.abs());
            }
        }
    }
    best
}

/// Coefficients of an operator around a base point, with exact symbolic
/// derivative bounds.
#[derive(Debug, Clone)]
pub struct SymbolicField {
    pub exprs: Vec<Expr>,
    pub m: usize,
    pub origin: Vec<f64>,
}

impl SymbolicField {
    pub fn from_spec(spec: &OperatorSpec, origin: &[f64]) -> Self {
        Self { exprs: spec.a2.clone(), m: spec.n, origin: origin.to_vec() }
    }
}

impl CoefficientField for SymbolicField {
    fn dim(&self) -> usize {
        self.m
    }

    fn eval(&self, z: &[f64], out: &mut [f64]) {
        let x: Vec<f64> = z.iter().zip(&self.origin).map(|(a, b)| a + b).collect();
        for (o, e) in out.iter_mut().zip(&self.exprs) {
            *o = e.value(&x);
        }
    }

    fn derivative_sup(&self, half: f64, per_axis: usize) -> f64 {
        let m = self.m;
        let mut all: Vec<Expr> = Vec::new();
        for e in &self.exprs {
            all.push(e.clone());
            for i in 0..m {
                let d = e.diff(i);
                for j in i..m {
                    all.push(d.diff(j));
                }
                all.push(d);
            }
        }
        let mut best: f64 = 0.0;
        for z in cube_samples(m, half, per_axis) {
            let x: Vec<f64> = z.iter().zip(&self.origin).map(|(a, b)| a + b).collect();
            for e in &all {
                best = best.max(e.value(&x).abs());
            }
        }
        best
    }
}

/// Result of the dyadic selection δ₁ = 2^{−N₁}.
#[derive(Debug, Clone, PartialEq)]
pub struct CzSelection {
    pub delta: f64,
    pub exponent: u32,
    pub pivot: usize,
    pub r: f64,
    /// max_{Q(0,δ)} |a_ij| / (R δ²); the selection rule bounds it by 40.
    pub max_ratio: f64,
    /// min_{Q(0,δ)} a_pp / (R δ²); the selection rule bounds it below by 1.
    pub pivot_ratio: f64,
}

impl CzSelection {
    pub fn lemma_holds(&self) -> bool {
        self.max_ratio <= 40.0 && self.pivot_ratio >= 1.0
    }
}

/// Smallest N₁ ≤ 40 with max_i max_{Q(0,δ₁)} |a_ii| ≥ 10 R δ₁², sampling
/// `per_axis`ᵐ points of the closed cube.
pub fn cz_select(field: &dyn CoefficientField, r: f64, per_axis: usize, stage: usize) -> Result<CzSelection, StageError> {
    let m = field.dim();
    let mut vals = vec![0.0; m * m];
    for exponent in 0..=40u32 {
        let delta = 0.5f64.powi(exponent as i32);
        let samples = cube_samples(m, delta, per_axis);
        let mut diag_max = vec![0.0f64; m];
        for z in &samples {
            field.eval(z, &mut vals);
            for i in 0..m {
                diag_max[i] = diag_max[i].max(vals[i * m + i].abs());
            }
        }
        let (pivot, best) = diag_max
            .iter()
            .enumerate()
            .fold((0, f64::NEG_INFINITY), |acc, (i, &v)| if v > acc.1 { (i, v) } else { acc });
        if best >= 10.0 * r * delta * delta {
            let mut max_abs: f64 = 0.0;
            let mut pivot_min = f64::INFINITY;
            for z in &samples {
                field.eval(z, &mut vals);
                max_abs = vals.iter().fold(max_abs, |b, v| b.max(v.abs()));
                pivot_min = pivot_min.min(vals[pivot * m + pivot]);
            }
            let scale = r * delta * delta;
            return Ok(CzSelection {
                delta,
                exponent,
                pivot,
                r,
                max_ratio: max_abs / scale,
                pivot_ratio: pivot_min / scale,
            });
        }
    }
    Err(StageError::NoSelection { stage })
}

/// ã_ij(y) = 100 δ₁⁻² a_ij(origin + δ₁ y / 10), by symbolic substitution.
pub fn rescale_cz(exprs: &[Expr], n: usize, origin: &[f64], delta: f64) -> Vec<Expr> {
    let subs: Vec<Expr> = (0..n)
        .map(|k| Expr::add(expr::constant(origin[k]), Expr::mul(expr::constant(delta / 10.0), expr::var(k))))
        .collect();
    let scale = 100.0 / (delta * delta);
    exprs.iter().map(|e| Expr::mul(expr::constant(scale), e.substitute(&subs))).collect()
}

/// Sampled sup over the unit cube Q(0,1) of rescaled coefficients and their
/// derivatives up to order 2.
pub fn universal_bound(rescaled: &[Expr], n: usize) -> f64 {
    SymbolicField { exprs: rescaled.to_vec(), m: n, origin: vec![0.0; n] }.derivative_sup(1.0, 16)
}

/// Straightening of one stage: local map E(s, z) = ζ on ℝᵐ and the full
/// transformed coefficient matrix J⁻¹ F(ζ) J⁻ᵀ in (s, z) coordinates.
#[derive(Clone)]
pub struct Straightened {
    pub map: NumericDiffeo,
    pub pivot: usize,
    pub parent: Arc<dyn CoefficientField>,
    /// Radius in s over which the flow was verified.
    pub r1: f64,
    pub residual: f64,
}

impl fmt::Debug for Straightened {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Straightened")
            .field("map", &self.map)
            .field("pivot", &self.pivot)
            .field("r1", &self.r1)
            .field("residual", &self.residual)
            .finish()
    }
}

impl Straightened {
    /// Transformed coefficients at (s, z), row-major m×m.
    pub fn transformed(&self, sz: &[f64], out: &mut [f64]) {
        let m = self.parent.dim();
        let zeta = match self.map.forward(sz) {
            Ok(z) => z,
            Err(_) => {
                out.iter_mut().for_each(|o| *o = f64::NAN);
                return;
            }
        };
        let jac = self.map.jacobian(sz);
        let jinv = numeric::inverse(&jac, m).unwrap_or_else(|| vec![f64::NAN; m * m]);
        let mut f = vec![0.0; m * m];
        self.parent.eval(&zeta, &mut f);
        let tmp = numeric::mat_mul(&jinv, &f, m);
        for i in 0..m {
            for j in 0..m {
                out[i * m + j] = (0..m).map(|k| tmp[i * m + k] * jinv[j * m + k]).sum();
            }
        }
    }

    pub fn pivot_coefficient(&self, s: f64) -> f64 {
        let m = self.parent.dim();
        let mut sz = vec![0.0; m];
        sz[0] = s;
        let mut out = vec![0.0; m * m];
        self.transformed(&sz, &mut out);
        out[0]
    }
}

/// Pivot row of F normalized by its diagonal entry.
fn pivot_field(parent: Arc<dyn CoefficientField>, pivot: usize) -> FieldFn {
    FieldFn(Arc::new(move |z: &[f64], v: &mut [f64]| {
        let m = parent.dim();
        let mut f = vec![0.0; m * m];
        parent.eval(z, &mut f);
        let app = f[pivot * m + pivot];
        for q in 0..m {
            v[q] = f[pivot * m + q] / app;
        }
    }))
}

/// Build the straightening flow of Y = ∂_p + Σ_q (a_pq / a_pp) ∂_q.
///
/// When Y is constant on samples of the working cube the map is affine;
/// otherwise it is a permutation followed by an axis flow.
pub fn straighten(
    parent: Arc<dyn CoefficientField>,
    pivot: usize,
    half: f64,
    per_axis: usize,
    stage: usize,
) -> Result<Straightened, StageError> {
    let m = parent.dim();
    let mut f = vec![0.0; m * m];
    let mut reference: Option<Vec<f64>> = None;
    let mut constant = true;
    for z in cube_samples(m, half, per_axis.min(32)) {
        parent.eval(&z, &mut f);
        let app = f[pivot * m + pivot];
        if !(app > 0.0) {
            continue;
        }
        let v: Vec<f64> = (0..m).map(|q| f[pivot * m + q] / app).collect();
        match &reference {
            None => reference = Some(v),
            Some(r) => {
                if r.iter().zip(&v).any(|(a, b)| (a - b).abs() > 1e-12 * (1.0 + a.abs())) {
                    constant = false;
                }
            }
        }
    }
    // column 0 carries s, the remaining columns carry z in index order
    let others: Vec<usize> = (0..m).filter(|&q| q != pivot).collect();
    let mut perm = vec![0.0; m * m];
    perm[pivot * m] = 1.0;
    for (c, &q) in others.iter().enumerate() {
        perm[q * m + c + 1] = 1.0;
    }
    let mut f0 = vec![0.0; m * m];
    parent.eval(&vec![0.0; m], &mut f0);
    if !(f0[pivot * m + pivot] > 0.0) {
        return Err(StageError::Degenerate { stage });
    }
    let mut r1 = half;
    let map = if constant {
        let app = f0[pivot * m + pivot];
        let v: Vec<f64> = (0..m).map(|q| f0[pivot * m + q] / app).collect();
        let mut mat = perm.clone();
        for q in 0..m {
            mat[q * m] = v[q];
        }
        NumericDiffeo::affine(mat, vec![0.0; m])
    } else {
        let field = pivot_field(parent.clone(), pivot);
        let mut d = NumericDiffeo::affine(perm, vec![0.0; m]);
        d.push(ElementaryMap::AxisFlow { lead: 0, axis: pivot, field, max_step: 1e-3, bound: 10.0 });
        // shrink r1 until flows from the sample slice stay finite
        loop {
            let ok = cube_samples(m, r1, 5).iter().all(|sz| d.forward(sz).is_ok());
            if ok {
                break;
            }
            r1 *= 0.5;
            if r1 < 1e-3 {
                return Err(StageError::FlowEscape { stage });
            }
        }
        d
    };
    let mut st = Straightened { map, pivot, parent, r1, residual: 0.0 };
    let mut out = vec![0.0; m * m];
    let mut worst: f64 = 0.0;
    let check = r1.min(half);
    for sz in cube_samples(m, check, 5) {
        st.transformed(&sz, &mut out);
        let zeta = st.map.forward(&sz).map_err(|_| StageError::FlowEscape { stage })?;
        st.parent.eval(&zeta, &mut f);
        let app = f[pivot * m + pivot];
        if app <= 0.0 {
            continue;
        }
        worst = worst.max((out[0] / app - 1.0).abs());
        for j in 1..m {
            worst = worst.max(out[j].abs() / app);
        }
    }
    st.residual = worst;
    if !(worst <= 1e-4) {
        return Err(StageError::Residual { stage, residual: worst });
    }
    Ok(st)
}

/// b̄(z) = (1/2 side) ∫_{−side}^{side} b(s, z) ds over the trailing block of
/// the straightened coefficients, with a 16-node Gauss–Legendre rule.
#[derive(Clone)]
pub struct SlabAverage {
    pub inner: Straightened,
    pub side: f64,
    rule: GaussLegendre,
}

impl SlabAverage {
    pub fn new(inner: Straightened, side: f64) -> Self {
        Self { inner, side, rule: GaussLegendre::new(16) }
    }
}

impl CoefficientField for SlabAverage {
    fn dim(&self) -> usize {
        self.inner.parent.dim() - 1
    }

    fn eval(&self, z: &[f64], out: &mut [f64]) {
        let m = self.inner.parent.dim();
        let k = m - 1;
        out.iter_mut().for_each(|o| *o = 0.0);
        let mut full = vec![0.0; m * m];
        let mut sz = vec![0.0; m];
        sz[1..].copy_from_slice(z);
        for (s, w) in self.rule.on(-self.side, self.side) {
            sz[0] = s;
            self.inner.transformed(&sz, &mut full);
            for i in 0..k {
                for j in 0..k {
                    out[i * k + j] += w * full[(i + 1) * m + j + 1];
                }
            }
        }
        let norm = 1.0 / (2.0 * self.side);
        out.iter_mut().for_each(|o| *o *= norm);
    }
}

/// Scalar slab average (1/2ρ) ∫_{−ρ}^{ρ} b(w) dw with 16 nodes.
pub fn average_slab(b: impl Fn(f64) -> f64, rho: f64) -> f64 {
    GaussLegendre::new(16).integrate(-rho, rho, b) / (2.0 * rho)
}

/// Half-width reached by the unit-speed subunit motion along the pivot:
/// the smaller of the two solutions of ∫₀^side ds / √b(±s) = ρ, capped.
pub fn admissible_side(b: impl Fn(f64) -> f64, rho: f64, cap: f64) -> f64 {
    let min_step = cap * 1e-5;
    let one_way = |dir: f64| {
        let mut s = 0.0;
        let mut acc = 0.0;
        loop {
            let g = b(dir * s).max(0.0);
            let step = (rho * g.sqrt() / 64.0).clamp(min_step, cap / 256.0);
            let mid = b(dir * (s + 0.5 * step)).max(1e-300);
            let inc = step / mid.sqrt();
            if acc + inc >= rho {
                return s + step * (rho - acc) / inc;
            }
            acc += inc;
            s += step;
            if s >= cap {
                return cap;
            }
        }
    };
    one_way(1.0).min(one_way(-1.0))
}

#[derive(Debug, Clone, PartialEq)]
pub struct StageRecord {
    pub stage: usize,
    pub dim: usize,
    pub selection: CzSelection,
    /// Physical axis of the pivot for stage 1; index within the reduced
    /// coordinates for later stages.
    pub pivot: usize,
    /// Sup of rescaled coefficients and derivatives (stage 1 only).
    pub universal_bound: Option<f64>,
    pub side: f64,
    pub side_half: f64,
    pub kappa_raw: f64,
    pub residual: f64,
    pub affine: bool,
    /// Minimum eigenvalue of the reduced field on samples.
    pub reduced_min_eigenvalue: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct UniversalBlock {
    pub rho: f64,
    pub kappa: Vec<f64>,
    pub c: Vec<f64>,
    /// c_j ρ^{κ_j}, the block half-widths.
    pub sides: Vec<f64>,
    pub stages: Vec<StageRecord>,
    /// κ comes from a two-radius fit, not from a closed form.
    pub estimated: bool,
}

impl UniversalBlock {
    pub fn contains(&self, w: &[f64]) -> bool {
        w.iter().zip(&self.sides).all(|(v, s)| v.abs() < *s)
    }

    pub fn kappa_monotone(&self) -> bool {
        self.kappa.windows(2).all(|p| p[0] <= p[1]) && self.kappa.first() == Some(&1.0)
    }
}

#[derive(Debug, Clone)]
pub struct BlockOptions {
    /// Samples per axis for every sup/max over a cube.
    pub samples_per_axis: usize,
    /// Dilation factor of Q_ρ*.
    pub c_star: f64,
    /// Upper bound on any half-width.
    pub max_side: f64,
}

impl Default for BlockOptions {
    fn default() -> Self {
        Self { samples_per_axis: 64, c_star: 1.5, max_side: 0.3 }
    }
}

struct StageRun {
    sides: Vec<f64>,
    records: Vec<StageRecord>,
    maps: Vec<NumericDiffeo>,
}

fn run_stages(spec: &OperatorSpec, x0: &[f64], rho: f64, opts: &BlockOptions) -> Result<StageRun, StageError> {
    let n = spec.n;
    let mut field: Arc<dyn CoefficientField> = Arc::new(SymbolicField::from_spec(spec, x0));
    let mut sides = Vec::with_capacity(n);
    let mut records = Vec::with_capacity(n);
    let mut maps = Vec::with_capacity(n);
    for stage in 1..=n {
        let m = field.dim();
        let per_axis = if m > 2 { opts.samples_per_axis.min(16) } else { opts.samples_per_axis };
        let r = 10.0 * field.derivative_sup(0.5, per_axis.min(32)).max(f64::MIN_POSITIVE);
        let sel = cz_select(field.as_ref(), r, per_axis, stage)?;
        let universal = (stage == 1).then(|| {
            let resc = rescale_cz(&spec.a2, n, x0, sel.delta);
            universal_bound(&resc, n)
        });
        let work = (opts.c_star * opts.max_side).min(0.5);
        let st = straighten(field.clone(), sel.pivot, work, per_axis, stage)?;
        let side = admissible_side(|s| st.pivot_coefficient(s), rho, opts.max_side);
        if !(side > 1e-12) {
            return Err(StageError::Degenerate { stage });
        }
        let affine = st.map.is_affine();
        let reduced_min = if m > 1 {
            let avg = SlabAverage::new(st.clone(), side);
            let k = m - 1;
            let mut out = vec![0.0; k * k];
            let mut worst = f64::INFINITY;
            for z in cube_samples(k, side, 5) {
                avg.eval(&z, &mut out);
                worst = worst.min(numeric::sym_min_eigenvalue(&out, k));
            }
            worst
        } else {
            f64::INFINITY
        };
        records.push(StageRecord {
            stage,
            dim: m,
            selection: sel.clone(),
            pivot: sel.pivot,
            universal_bound: universal,
            side,
            side_half: f64::NAN,
            kappa_raw: f64::NAN,
            residual: st.residual,
            affine,
            reduced_min_eigenvalue: reduced_min,
        });
        sides.push(side);
        maps.push(st.map.clone());
        if m > 1 {
            field = Arc::new(SlabAverage::new(st, side));
        }
    }
    Ok(StageRun { sides, records, maps })
}

fn quarter(v: f64) -> f64 {
    (v * 4.0).round() / 4.0
}

/// Universal block at `x0` and the map Φ from block coordinates w to the
/// displacement x − x0.
pub fn build_block(
    spec: &OperatorSpec,
    x0: &[f64],
    rho: f64,
    opts: &BlockOptions,
) -> Result<(UniversalBlock, NumericDiffeo), StageError> {
    let n = spec.n;
    let full = run_stages(spec, x0, rho, opts)?;
    let half = run_stages(spec, x0, rho / 2.0, opts)?;
    let mut kappa = Vec::with_capacity(n);
    let mut c = Vec::with_capacity(n);
    let mut records = full.records;
    for j in 0..n {
        let raw = (full.sides[j] / half.sides[j]).log2();
        let k = quarter(raw);
        records[j].side_half = half.sides[j];
        records[j].kappa_raw = raw;
        kappa.push(k);
        c.push(full.sides[j] / rho.powf(k));
    }
    // innermost stage first: E_n, …, E_1, each lifted onto trailing coordinates
    let mut phi = NumericDiffeo::identity(n);
    for map in full.maps.iter().rev() {
        for e in &map.maps {
            let lifted = lift(e, map.n, n);
            phi.push(lifted);
        }
    }
    let block = UniversalBlock { rho, kappa, c, sides: full.sides, stages: records, estimated: true };
    Ok((block, phi))
}

/// Ã = −Σ c_j² ρ^{2κ_j} ∂²_{w_j}.
pub fn model_operator(block: &UniversalBlock) -> OperatorSpec {
    let n = block.sides.len();
    let a2 = (0..n)
        .map(|i| {
            (0..n)
                .map(|j| expr::constant(if i == j { block.sides[i] * block.sides[i] } else { 0.0 }))
                .collect()
        })
        .collect();
    OperatorSpec::new("model", a2, vec![], expr::constant(0.0), 1.0).expect("diagonal constant operator")
}

/// Velocity field c_j ρ^{κ_j} ∂_{w_j} of the model curve γ_j.
pub fn model_curve_field(block: &UniversalBlock, j: usize) -> VectorField {
    VectorField::coordinate(block.sides.len(), j).scaled(block.sides[j])
}

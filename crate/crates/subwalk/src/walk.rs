//! The (h,ρ) random walk: pick a chart i, an axis j and a time t ∈ ]−h, h[,
//! flow along the normalized chart field and keep the move only when both
//! endpoints sit in the inner cube Q_i.

use rand::RngCore;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::manifold::{wrap, ChartAtlas, Density};

#[derive(Debug, Clone, Error, PartialEq)]
pub enum WalkError {
    #[error("step size {h} must lie in (0, {h0}]")]
    StepSize { h: f64, h0: f64 },
    #[error("steps and ensemble size must be positive")]
    Empty,
    #[error("start point has dimension {got}, expected {expected}")]
    Dimension { got: usize, expected: usize },
}

#[derive(Debug, Clone, PartialEq)]
pub struct WalkConfig {
    pub h: f64,
    pub rho: f64,
    pub steps: usize,
    pub start: Vec<f64>,
    pub seed: u64,
    pub ensemble: usize,
    /// Keep every `thin`-th position of each trajectory; 0 keeps none.
    pub thin: usize,
    /// Histogram cells per axis.
    pub bins: usize,
}

impl WalkConfig {
    pub fn validate(&self, atlas: &ChartAtlas) -> Result<(), WalkError> {
        let h0 = atlas.h0();
        if !(self.h > 0.0 && self.h <= h0) {
            return Err(WalkError::StepSize { h: self.h, h0 });
        }
        if self.steps == 0 || self.ensemble == 0 || self.bins == 0 {
            return Err(WalkError::Empty);
        }
        if self.start.len() != atlas.n {
            return Err(WalkError::Dimension { got: self.start.len(), expected: atlas.n });
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct WalkState {
    pub position: Vec<f64>,
    pub step: u64,
}

/// Outcome of a single step.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Move {
    Accepted,
    /// Start point outside the chosen inner cube.
    OutsideStart,
    /// Flowed point outside the chosen inner cube.
    OutsideEnd,
    /// Integration left the dilated cube.
    Escape,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Draw {
    pub chart: usize,
    pub axis: usize,
    pub t: f64,
}

/// Counter-keyed generator: the draw for (seed, trajectory, step) does not
/// depend on anything else.
pub fn draw(seed: u64, trajectory: u64, step: u64, charts: usize, n: usize, h: f64) -> Draw {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(trajectory);
    rng.set_word_pos(step as u128 * 16);
    let pick = |r: u64, m: usize| ((r as u128 * m as u128) >> 64) as usize;
    let chart = pick(rng.next_u64(), charts);
    let axis = pick(rng.next_u64(), n);
    let u = ((rng.next_u64() >> 11) as f64 + 0.5) / (1u64 << 53) as f64;
    Draw { chart, axis, t: h * (2.0 * u - 1.0) }
}

pub struct Walker<'a> {
    pub atlas: &'a ChartAtlas,
    pub density: &'a Density,
}

impl<'a> Walker<'a> {
    pub fn new(atlas: &'a ChartAtlas, density: &'a Density) -> Self {
        Self { atlas, density }
    }

    /// w-coordinate flow of side_j/γ̃_i · ∂_{w_j} for time t from w.
    pub fn flow_local(&self, chart: usize, axis: usize, t: f64, w: &[f64]) -> Result<Vec<f64>, Move> {
        let c = &self.atlas.charts[chart];
        let side = c.block.sides[axis];
        let mut w = w.to_vec();
        if t == 0.0 {
            return Ok(w);
        }
        if self.density.uniform {
            let gamma = self.density.local(self.atlas, chart, &w);
            w[axis] += t * side / gamma;
        } else {
            let dt = t / 8.0;
            let rate = |p: &[f64], v: f64| {
                let mut q = p.to_vec();
                q[axis] = v;
                side / self.density.local(self.atlas, chart, &q)
            };
            for _ in 0..8 {
                let y = w[axis];
                let k1 = rate(&w, y);
                let k2 = rate(&w, y + 0.5 * dt * k1);
                let k3 = rate(&w, y + 0.5 * dt * k2);
                let k4 = rate(&w, y + dt * k3);
                w[axis] = y + dt / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4);
                if !w[axis].is_finite() || !c.in_dilated_block(&w) {
                    return Err(Move::Escape);
                }
            }
        }
        if !c.in_dilated_block(&w) {
            return Err(Move::Escape);
        }
        Ok(w)
    }

    /// Torus-level flow Ψ_i⁻¹ ∘ flow ∘ Ψ_i; x must lie in the dilated cube.
    pub fn flow(&self, chart: usize, axis: usize, t: f64, x: &[f64]) -> Result<Vec<f64>, Move> {
        let c = &self.atlas.charts[chart];
        let w = c.psi(x).filter(|w| c.in_dilated_block(w)).ok_or(Move::Escape)?;
        let w2 = self.flow_local(chart, axis, t, &w)?;
        Ok(c.psi_inv(&w2))
    }

    /// Apply one draw to x.
    pub fn apply(&self, d: Draw, x: &[f64]) -> (Vec<f64>, Move) {
        let c = &self.atlas.charts[d.chart];
        let Some(w) = c.inner_coords(x) else {
            return (x.to_vec(), Move::OutsideStart);
        };
        match self.flow_local(d.chart, d.axis, d.t, &w) {
            Err(m) => (x.to_vec(), m),
            Ok(w2) if c.in_block(&w2) => (c.psi_inv(&w2), Move::Accepted),
            Ok(_) => (x.to_vec(), Move::OutsideEnd),
        }
    }

    pub fn step(&self, state: &WalkState, config: &WalkConfig, trajectory: u64) -> (WalkState, Draw, Move) {
        let d = draw(config.seed, trajectory, state.step, self.atlas.len(), self.atlas.n, config.h);
        let (position, mv) = self.apply(d, &state.position);
        (WalkState { position, step: state.step + 1 }, d, mv)
    }

    pub fn simulate(&self, config: &WalkConfig) -> Result<TrajectoryBatch, WalkError> {
        config.validate(self.atlas)?;
        let n = self.atlas.n;
        let mut batch = TrajectoryBatch::new(n, config.bins, self.atlas.len());
        let burn_in = config.steps / 4;
        for traj in 0..config.ensemble {
            let mut state = WalkState { position: wrap(&config.start), step: 0 };
            let mut kept = Vec::new();
            for k in 0..config.steps {
                let (next, d, mv) = self.step(&state, config, traj as u64);
                batch.record_move(d.chart, mv);
                state = next;
                if k >= burn_in {
                    batch.add_sample(&state.position);
                }
                if config.thin > 0 && (k + 1) % config.thin == 0 {
                    kept.push(state.position.clone());
                }
            }
            batch.endpoints.push(state.position.clone());
            batch.trajectories.push(kept);
        }
        Ok(batch)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryBatch {
    pub n: usize,
    pub bins: usize,
    pub histogram: Vec<u64>,
    pub samples: u64,
    pub trajectories: Vec<Vec<Vec<f64>>>,
    pub endpoints: Vec<Vec<f64>>,
    pub accepted: Vec<u64>,
    pub rejected: Vec<u64>,
    pub escapes: u64,
}

/// Cell of x on a `bins`ⁿ grid, axis 0 fastest.
pub fn cell_of(x: &[f64], bins: usize) -> usize {
    x.iter().rev().fold(0, |acc, &v| acc * bins + ((v * bins as f64).floor() as usize).min(bins - 1))
}

impl TrajectoryBatch {
    fn new(n: usize, bins: usize, charts: usize) -> Self {
        Self {
            n,
            bins,
            histogram: vec![0; bins.pow(n as u32)],
            samples: 0,
            trajectories: Vec::new(),
            endpoints: Vec::new(),
            accepted: vec![0; charts],
            rejected: vec![0; charts],
            escapes: 0,
        }
    }

    fn record_move(&mut self, chart: usize, mv: Move) {
        match mv {
            Move::Accepted => self.accepted[chart] += 1,
            Move::Escape => {
                self.escapes += 1;
                self.rejected[chart] += 1;
            }
            _ => self.rejected[chart] += 1,
        }
    }

    fn add_sample(&mut self, x: &[f64]) {
        self.histogram[cell_of(x, self.bins)] += 1;
        self.samples += 1;
    }

    pub fn acceptance_rate(&self) -> f64 {
        let a: u64 = self.accepted.iter().sum();
        let r: u64 = self.rejected.iter().sum();
        a as f64 / (a + r).max(1) as f64
    }

    /// Counts of trajectory endpoints per cell of a `bins`ⁿ grid.
    pub fn endpoint_counts(&self, bins: usize) -> Vec<u64> {
        let mut c = vec![0; bins.pow(self.n as u32)];
        for x in &self.endpoints {
            c[cell_of(x, bins)] += 1;
        }
        c
    }
}

/// Total variation between empirical endpoint counts and a target
/// distribution, together with the 3σ Monte Carlo allowance
/// 3·½Σ√(p(1−p)/N).
#[derive(Debug, Clone, PartialEq)]
pub struct StationaryCheck {
    pub tv: f64,
    pub allowance: f64,
    pub pass: bool,
}

pub fn stationary_check(counts: &[u64], target: &[f64]) -> StationaryCheck {
    let total: u64 = counts.iter().sum();
    let nn = total.max(1) as f64;
    let mut tv = 0.0;
    let mut sigma = 0.0;
    for (c, p) in counts.iter().zip(target) {
        tv += (*c as f64 / nn - p).abs();
        sigma += (p * (1.0 - p) / nn).sqrt();
    }
    let tv = 0.5 * tv;
    let allowance = 3.0 * 0.5 * sigma;
    StationaryCheck { tv, allowance, pass: tv <= allowance }
}

/// Bowker symmetry test of a transition count table: the statistic
/// Σ_{a<b} (n_ab − n_ba)²/(n_ab + n_ba) against P + 3√(2P).
#[derive(Debug, Clone, PartialEq)]
pub struct ReversibilityCheck {
    pub statistic: f64,
    pub pairs: usize,
    pub threshold: f64,
    pub pass: bool,
}

pub fn bowker_check(counts: &[u64], cells: usize) -> ReversibilityCheck {
    let mut stat = 0.0;
    let mut pairs = 0;
    for a in 0..cells {
        for b in a + 1..cells {
            let (x, y) = (counts[a * cells + b] as f64, counts[b * cells + a] as f64);
            if x + y > 0.0 {
                stat += (x - y) * (x - y) / (x + y);
                pairs += 1;
            }
        }
    }
    let threshold = pairs as f64 + 3.0 * (2.0 * pairs as f64).sqrt();
    ReversibilityCheck { statistic: stat, pairs, threshold, pass: stat <= threshold }
}

/// One `lag`-step transition per trajectory, started from a μ-distributed
/// endpoint of `batch` and binned on a `bins`ⁿ grid.
pub fn transition_counts(
    walker: &Walker<'_>,
    batch: &TrajectoryBatch,
    config: &WalkConfig,
    bins: usize,
    lag: usize,
) -> Vec<u64> {
    let cells = bins.pow(batch.n as u32);
    let mut counts = vec![0u64; cells * cells];
    for (k, x) in batch.endpoints.iter().enumerate() {
        let mut state = WalkState { position: x.clone(), step: config.steps as u64 };
        for _ in 0..lag.max(1) {
            state = walker.step(&state, config, k as u64).0;
        }
        counts[cell_of(x, bins) * cells + cell_of(&state.position, bins)] += 1;
    }
    counts
}

/// max over samples of |∂_{w_j}(γ̃ · a_j)| by central differences, where
/// a_j is the flux coefficient of axis j.
pub fn divergence_residual(
    gamma: impl Fn(&[f64]) -> f64,
    sides: &[f64],
    normalized: bool,
    per_axis: usize,
) -> f64 {
    let n = sides.len();
    let eta = 1e-3;
    let flux = |w: &[f64], j: usize| {
        let g = gamma(w);
        let a = if normalized { sides[j] / g } else { sides[j] };
        g * a
    };
    let mut worst: f64 = 0.0;
    for mut k in 0..per_axis.pow(n as u32) {
        let w: Vec<f64> = (0..n)
            .map(|j| {
                let i = k % per_axis;
                k /= per_axis;
                ((i as f64 + 0.5) / per_axis as f64 * 2.0 - 1.0) * sides[j]
            })
            .collect();
        for j in 0..n {
            let mut wp = w.clone();
            let mut wm = w.clone();
            wp[j] += eta * sides[j];
            wm[j] -= eta * sides[j];
            let d = (flux(&wp, j) - flux(&wm, j)) / (2.0 * eta * sides[j]);
            worst = worst.max(d.abs());
        }
    }
    worst
}

/// Divergence of the chart fields with respect to γ̃_i(w) dw.
pub fn check_divfree(atlas: &ChartAtlas, density: &Density, chart: usize) -> f64 {
    let c = &atlas.charts[chart];
    divergence_residual(|w| density.local(atlas, chart, w), &c.block.sides, true, 6)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::manifold::{build_atlas, lattice_centers, AtlasOptions};
    use crate::operator::OperatorSpec;

    fn laplace1d() -> (ChartAtlas, Density) {
        let centers = lattice_centers(&[4], &[0.125]);
        let atlas = build_atlas(&OperatorSpec::laplacian(1), 0.25, &centers, &AtlasOptions::default()).unwrap();
        let d = Density::build(&atlas);
        (atlas, d)
    }

    fn cfg(h: f64, steps: usize, ensemble: usize, seed: u64) -> WalkConfig {
        WalkConfig { h, rho: 0.25, steps, start: vec![0.1], seed, ensemble, thin: 1, bins: 8 }
    }

    #[test]
    fn zero_time_flow_and_reversal() {
        let (atlas, d) = laplace1d();
        let w = Walker::new(&atlas, &d);
        assert!((w.flow(0, 0, 0.0, &[0.1]).unwrap()[0] - 0.1).abs() < 1e-15);
        let y = w.flow(0, 0, 0.3, &[0.1]).unwrap();
        assert!((y[0] - (0.1 + 0.3 * 0.25)).abs() < 1e-12);
        let back = w.flow(0, 0, -0.3, &y).unwrap();
        assert!((back[0] - 0.1).abs() < 1e-8);
    }

    #[test]
    fn outside_start_is_unchanged_and_interior_moves() {
        let (atlas, d) = laplace1d();
        let w = Walker::new(&atlas, &d);
        // chart 0 covers ]−0.125, 0.375[ around 0.125
        let (x, mv) = w.apply(Draw { chart: 0, axis: 0, t: 0.1 }, &[0.6]);
        assert_eq!((x, mv), (vec![0.6], Move::OutsideStart));
        let (x, mv) = w.apply(Draw { chart: 0, axis: 0, t: 0.01 }, &[0.125]);
        assert_eq!(mv, Move::Accepted);
        assert!((x[0] - 0.1275).abs() < 1e-12);
    }

    #[test]
    fn rejection_matches_geometric_test() {
        let (atlas, d) = laplace1d();
        let w = Walker::new(&atlas, &d);
        let c = cfg(0.4, 10_000, 1, 7);
        let mut state = WalkState { position: vec![0.3], step: 0 };
        for _ in 0..c.steps {
            let (next, dr, mv) = w.step(&state, &c, 0);
            let chart = &atlas.charts[dr.chart];
            let start_in = chart.inner_coords(&state.position);
            let expected = match start_in {
                None => false,
                Some(v) => {
                    let end = v[0] + dr.t * chart.block.sides[0];
                    end.abs() < chart.block.sides[0]
                }
            };
            assert_eq!(mv == Move::Accepted, expected);
            if !expected {
                assert_eq!(next.position, state.position);
            }
            state = next;
        }
    }

    #[test]
    fn acceptance_lower_near_cube_boundary() {
        let (atlas, d) = laplace1d();
        let w = Walker::new(&atlas, &d);
        let rate = |x: f64| {
            let mut acc = 0;
            let mut tried = 0;
            for k in 0..100_000u64 {
                let dr = draw(3, 0, k, atlas.len(), 1, 0.4);
                if atlas.charts[dr.chart].inner_coords(&[x]).is_none() {
                    continue;
                }
                tried += 1;
                if w.apply(dr, &[x]).1 == Move::Accepted {
                    acc += 1;
                }
            }
            acc as f64 / tried as f64
        };
        // 0.37 sits just inside chart 0's edge, 0.125 is its center
        assert!(rate(0.37) < rate(0.125));
    }

    #[test]
    fn seeded_runs_are_identical() {
        let (atlas, d) = laplace1d();
        let w = Walker::new(&atlas, &d);
        let a = w.simulate(&cfg(0.2, 200, 3, 11)).unwrap();
        let b = w.simulate(&cfg(0.2, 200, 3, 11)).unwrap();
        assert_eq!(a, b);
        let c = w.simulate(&cfg(0.2, 200, 3, 12)).unwrap();
        assert_ne!(a.endpoints, c.endpoints);
        assert_eq!(a.histogram.iter().sum::<u64>(), a.samples);
        assert_eq!(a.samples, 3 * (200 - 50));
    }

    #[test]
    fn histogram_covers_torus_and_approaches_uniform() {
        let (atlas, d) = laplace1d();
        let w = Walker::new(&atlas, &d);
        let b = w.simulate(&cfg(0.4, 4000, 4, 5)).unwrap();
        assert!(b.histogram.iter().all(|&c| c > 0));
        assert_eq!(b.escapes, 0);
        let mut tvs = Vec::new();
        for steps in [2, 8, 32, 128] {
            let e = w.simulate(&WalkConfig { thin: 0, ..cfg(0.4, steps, 2000, 9) }).unwrap();
            tvs.push(stationary_check(&e.endpoint_counts(8), &[0.125; 8]).tv);
        }
        assert!(tvs.windows(2).all(|p| p[1] <= p[0] + 0.02), "{tvs:?}");
        assert!(tvs[3] < 0.5 * tvs[0]);
    }

    #[test]
    fn reversibility_and_stationarity_statistics() {
        let (atlas, d) = laplace1d();
        let w = Walker::new(&atlas, &d);
        let c = WalkConfig { thin: 0, ..cfg(0.4, 200, 4000, 21) };
        let b = w.simulate(&c).unwrap();
        let s = stationary_check(&b.endpoint_counts(8), &[0.125; 8]);
        assert!(s.pass, "{s:?}");
        let t = transition_counts(&w, &b, &c, 8, 10);
        assert!(bowker_check(&t, 8).pass);
    }

    #[test]
    fn bowker_detects_a_drift() {
        let mut counts = vec![0u64; 9];
        counts[1] = 400;
        counts[3] = 100;
        counts[5] = 400;
        counts[7] = 100;
        assert!(!bowker_check(&counts, 3).pass);
    }

    #[test]
    fn divergence_free_by_normalization() {
        let (atlas, d) = laplace1d();
        for i in 0..atlas.len() {
            assert!(check_divfree(&atlas, &d, i) <= 1e-12);
        }
        let gamma = |w: &[f64]| 1.0 + 0.3 * w[0] + 0.2 * w[1] * w[1];
        assert!(divergence_residual(gamma, &[0.2, 0.1], true, 6) <= 1e-12);
        assert!(divergence_residual(gamma, &[0.2, 0.1], false, 6) > 1e-3);
        assert_eq!(divergence_residual(|_| 2.0, &[0.2, 0.1], false, 6), 0.0);
    }

    #[test]
    fn invalid_step_size_rejected() {
        let (atlas, d) = laplace1d();
        let w = Walker::new(&atlas, &d);
        assert!(matches!(w.simulate(&cfg(0.9, 10, 1, 0)), Err(WalkError::StepSize { .. })));
    }
}

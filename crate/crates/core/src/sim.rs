//! Ground-truth simulation of `x_{t+1} = θᵀ z_t + w_t` with standard normal
//! noise, plus the additive `θ_* = θ_sim + θ_δ` construction.
//!
//! Randomness comes from [`RngStream`]: ChaCha20 keyed by a 64-bit seed with
//! a separate 64-bit stream id. Normals are drawn with the ziggurat sampler
//! of `rand_distr::StandardNormal`, so a given `(seed, stream_id)` pair
//! reproduces the same noise sequence on every platform.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::StandardNormal;
use std::collections::VecDeque;

use crate::error::{Error, Result};
use crate::lqr::{CostMatrices, ThetaParams};

#[derive(Debug, Clone)]
pub struct RngStream {
    seed: u64,
    stream_id: u64,
    rng: ChaCha20Rng,
}

impl RngStream {
    pub fn new(seed: u64, stream_id: u64) -> Self {
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        rng.set_stream(stream_id);
        Self { seed, stream_id, rng }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn stream_id(&self) -> u64 {
        self.stream_id
    }

    pub fn standard_normal(&mut self) -> f64 {
        self.rng.sample(StandardNormal)
    }

    /// Uniform in `[0, 1)`.
    pub fn uniform(&mut self) -> f64 {
        self.rng.random::<f64>()
    }

    pub fn normal_vector(&mut self, len: usize) -> DVector<f64> {
        DVector::from_fn(len, |_, _| self.standard_normal())
    }

    /// Column-major fill, so the draw order is fixed by the shape alone.
    pub fn normal_matrix(&mut self, nrows: usize, ncols: usize) -> DMatrix<f64> {
        DMatrix::from_fn(nrows, ncols, |_, _| self.standard_normal())
    }
}

/// Mixes a list of words into one seed (SplitMix64 finalizer per word).
pub fn derive_seed(parts: &[u64]) -> u64 {
    fn mix(mut z: u64) -> u64 {
        z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
        z ^ (z >> 31)
    }
    parts.iter().fold(0x9e37_79b9_7f4a_7c15, |acc, &p| {
        mix(acc.wrapping_add(0x9e37_79b9_7f4a_7c15) ^ mix(p))
    })
}

/// Source of the process noise `w_t`.
pub trait NoiseSource {
    fn draw(&mut self, len: usize) -> DVector<f64>;
}

impl NoiseSource for RngStream {
    fn draw(&mut self, len: usize) -> DVector<f64> {
        self.normal_vector(len)
    }
}

/// Replays a fixed noise sequence, then zeros once it runs out.
#[derive(Debug, Clone, Default)]
pub struct FixedNoise {
    queue: VecDeque<DVector<f64>>,
}

impl FixedNoise {
    pub fn zeros() -> Self {
        Self::default()
    }

    pub fn from_sequence(seq: impl IntoIterator<Item = DVector<f64>>) -> Self {
        Self {
            queue: seq.into_iter().collect(),
        }
    }
}

impl NoiseSource for FixedNoise {
    fn draw(&mut self, len: usize) -> DVector<f64> {
        match self.queue.pop_front() {
            Some(w) if w.len() == len => w,
            Some(w) => panic!("fixed noise vector has length {}, expected {len}", w.len()),
            None => DVector::zeros(len),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimState {
    pub state: DVector<f64>,
    pub step: usize,
}

impl SimState {
    pub fn zero(n: usize) -> Self {
        Self {
            state: DVector::zeros(n),
            step: 0,
        }
    }

    pub fn at(state: DVector<f64>) -> Self {
        Self { state, step: 0 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepRecord {
    /// `z = [xᵀ uᵀ]ᵀ`.
    pub z_vector: DVector<f64>,
    pub next_state: DVector<f64>,
    pub cost: f64,
}

pub fn stage_cost(costs: &CostMatrices, x: &DVector<f64>, u: &DVector<f64>) -> f64 {
    (x.transpose() * costs.q() * x)[(0, 0)] + (u.transpose() * costs.r() * u)[(0, 0)]
}

pub fn stack_z(x: &DVector<f64>, u: &DVector<f64>) -> DVector<f64> {
    let mut z = DVector::zeros(x.len() + u.len());
    z.rows_mut(0, x.len()).copy_from(x);
    z.rows_mut(x.len(), u.len()).copy_from(u);
    z
}

/// Advances `state` one step under `control`, charging the cost of the
/// current `(x, u)`.
pub fn step_system(
    theta: &ThetaParams,
    state: &mut SimState,
    control: &DVector<f64>,
    costs: &CostMatrices,
    noise: &mut impl NoiseSource,
) -> Result<StepRecord> {
    let (n, m) = (theta.n(), theta.m());
    if state.state.len() != n || control.len() != m || !costs.fits(theta) {
        return Err(Error::dims(
            "step_system",
            format!("state {n}, control {m}"),
            format!("state {}, control {}", state.state.len(), control.len()),
        ));
    }
    let x = &state.state;
    let cost = stage_cost(costs, x, control);
    let w = noise.draw(n);
    let next_state = theta.a() * x + theta.b() * control + w;
    let record = StepRecord {
        z_vector: stack_z(x, control),
        next_state: next_state.clone(),
        cost,
    };
    state.state = next_state;
    state.step += 1;
    Ok(record)
}

/// `θ_* = θ_sim + θ_δ`, returned with `‖θ_δ‖_F`.
pub fn make_true_theta(theta_sim: &ThetaParams, theta_delta: &ThetaParams) -> Result<(ThetaParams, f64)> {
    let theta = theta_sim.try_add(theta_delta)?;
    Ok((theta, theta_delta.frobenius_norm()))
}

/// A perturbation with uniformly random direction and radius uniform in
/// `[0, m_delta]`.
pub fn sample_theta_delta(m_delta: f64, n: usize, m: usize, rng: &mut RngStream) -> Result<ThetaParams> {
    if !(m_delta >= 0.0) || !m_delta.is_finite() {
        return Err(Error::Domain(format!("m_delta must be finite and >= 0, got {m_delta}")));
    }
    if m_delta == 0.0 {
        return Ok(ThetaParams::zeros(n, m));
    }
    let radius = m_delta * rng.uniform();
    let dir = loop {
        let g = rng.normal_matrix(n + m, n);
        let norm = g.norm();
        if norm > 0.0 {
            break g / norm;
        }
    };
    ThetaParams::from_stacked(&(dir * radius), n)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lqr::reference_systems;

    #[test]
    fn zero_parameter_with_zero_noise() {
        let theta = ThetaParams::zeros(3, 2);
        let costs = CostMatrices::identity(3, 2);
        let mut s = SimState::at(DVector::from_vec(vec![1.0, 2.0, 3.0]));
        let rec = step_system(&theta, &mut s, &DVector::zeros(2), &costs, &mut FixedNoise::zeros()).unwrap();
        assert_eq!(rec.next_state, DVector::zeros(3));
        assert_eq!(rec.cost, 14.0);
        assert_eq!(s.step, 1);
    }

    #[test]
    fn identity_dynamics_hold_state() {
        let theta = ThetaParams::new(DMatrix::identity(3, 3), DMatrix::zeros(3, 1)).unwrap();
        let q = DMatrix::from_diagonal(&DVector::from_vec(vec![2.5, 1.0, 1.0]));
        let costs = CostMatrices::new(q, DMatrix::identity(1, 1)).unwrap();
        let e1 = DVector::from_vec(vec![1.0, 0.0, 0.0]);
        let mut s = SimState::at(e1.clone());
        let rec = step_system(&theta, &mut s, &DVector::zeros(1), &costs, &mut FixedNoise::zeros()).unwrap();
        assert_eq!(rec.next_state, e1);
        assert_eq!(rec.cost, 2.5);
    }

    #[test]
    fn reference_system_step() {
        let (star, _) = reference_systems();
        let costs = CostMatrices::identity(3, 2);
        let mut s = SimState::at(DVector::from_vec(vec![1.0, 0.0, 0.0]));
        let u = DVector::from_vec(vec![1.0, 0.0]);
        let rec = step_system(&star, &mut s, &u, &costs, &mut FixedNoise::zeros()).unwrap();
        let expected = DVector::from_vec(vec![1.6, 0.5, 0.5]);
        assert!((rec.next_state - expected).norm() < 1e-15);
        assert_eq!(rec.z_vector.as_slice(), &[1.0, 0.0, 0.0, 1.0, 0.0]);
        assert_eq!(rec.cost, 2.0);
    }

    #[test]
    fn step_rejects_bad_dimensions() {
        let (star, _) = reference_systems();
        let costs = CostMatrices::identity(3, 2);
        let mut s = SimState::zero(3);
        let err = step_system(&star, &mut s, &DVector::zeros(3), &costs, &mut FixedNoise::zeros());
        assert!(matches!(err, Err(Error::DimensionMismatch { .. })));
    }

    #[test]
    fn reference_pair_differs_in_two_entries() {
        let (star, sim) = reference_systems();
        let diff = star.try_sub(&sim).unwrap().stacked();
        let nonzero: Vec<_> = diff.iter().filter(|v| v.abs() > 1e-15).collect();
        assert_eq!(nonzero.len(), 2);
        assert!((diff[(0, 0)] + 0.1).abs() < 1e-12);
        assert!((diff[(3, 0)] + 0.1).abs() < 1e-12);
        let (rebuilt, norm) = make_true_theta(&sim, &star.try_sub(&sim).unwrap()).unwrap();
        assert!((norm - 0.02f64.sqrt()).abs() < 1e-12);
        assert!(norm <= 0.15);
        assert!((rebuilt.stacked() - star.stacked()).norm() < 1e-15);
    }

    #[test]
    fn zero_delta_is_identity() {
        let (_, sim) = reference_systems();
        let (theta, norm) = make_true_theta(&sim, &ThetaParams::zeros(3, 2)).unwrap();
        assert_eq!(theta, sim);
        assert_eq!(norm, 0.0);
        let mut rng = RngStream::new(1, 0);
        assert_eq!(sample_theta_delta(0.0, 3, 2, &mut rng).unwrap(), ThetaParams::zeros(3, 2));
    }

    #[test]
    fn delta_round_trip() {
        let (_, sim) = reference_systems();
        let mut rng = RngStream::new(3, 0);
        for _ in 0..50 {
            let d = sample_theta_delta(0.15, 3, 2, &mut rng).unwrap();
            assert!(d.frobenius_norm() <= 0.15);
            let (theta, _) = make_true_theta(&sim, &d).unwrap();
            assert!((theta.try_sub(&sim).unwrap().stacked() - d.stacked()).norm() < 1e-15);
        }
    }

    #[test]
    fn delta_radius_distribution() {
        let mut rng = RngStream::new(11, 4);
        let norms: Vec<f64> = (0..10_000)
            .map(|_| sample_theta_delta(1.0, 3, 2, &mut rng).unwrap().frobenius_norm())
            .collect();
        let max = norms.iter().copied().fold(0.0, f64::max);
        let mean = norms.iter().sum::<f64>() / norms.len() as f64;
        assert!(max <= 1.0);
        assert!((mean - 0.5).abs() < 0.02, "mean radius {mean}");
    }

    #[test]
    fn noise_is_white_standard_normal() {
        let mut rng = RngStream::new(2024, 9);
        let n = 3;
        let draws = 100_000;
        let mut mean = DVector::zeros(n);
        let mut second = DMatrix::zeros(n, n);
        for _ in 0..draws {
            let w = rng.draw(n);
            second += &w * w.transpose();
            mean += w;
        }
        mean /= draws as f64;
        second /= draws as f64;
        let cov = second - &mean * mean.transpose();
        assert!(mean.iter().all(|m| m.abs() < 0.02));
        assert!((cov - DMatrix::identity(n, n)).iter().all(|e| e.abs() < 0.05));
    }

    #[test]
    fn streams_are_reproducible_and_distinct() {
        let a: Vec<f64> = {
            let mut r = RngStream::new(5, 1);
            (0..16).map(|_| r.standard_normal()).collect()
        };
        let b: Vec<f64> = {
            let mut r = RngStream::new(5, 1);
            (0..16).map(|_| r.standard_normal()).collect()
        };
        let c: Vec<f64> = {
            let mut r = RngStream::new(5, 2);
            (0..16).map(|_| r.standard_normal()).collect()
        };
        assert_eq!(a, b);
        assert_ne!(a, c);
        assert_ne!(derive_seed(&[1, 2, 3]), derive_seed(&[1, 3, 2]));
    }

    #[test]
    fn costs_are_nonnegative() {
        let (star, _) = reference_systems();
        let costs = CostMatrices::identity(3, 2);
        let mut rng = RngStream::new(8, 0);
        let mut s = SimState::zero(3);
        for _ in 0..200 {
            let u = rng.normal_vector(2);
            let rec = step_system(&star, &mut s, &u, &costs, &mut rng).unwrap();
            assert!(rec.cost >= 0.0);
            let x = rec.z_vector.rows(0, 3).into_owned();
            let recomputed = stage_cost(&costs, &x, &u);
            assert!((rec.cost - recomputed).abs() <= 1e-12 * recomputed.max(1.0));
        }
    }
}

//! Noise models.
//!
//! A noise model is a pure function of `(seed, n, θ_n, w_n)`. Randomness comes
//! from a ChaCha8 generator keyed by the seed with the iteration index as the
//! stream number, so step `n` of a run draws the same numbers regardless of
//! what happened at other steps. Two runs that share a seed and agree on the
//! state at step `n` therefore see identical noise at step `n`.

use nalgebra::DVector;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

/// The pair (M⁽¹⁾_{n+1}, M⁽²⁾_{n+1}).
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseRecord {
    pub m1: DVector<f64>,
    pub m2: DVector<f64>,
}

impl NoiseRecord {
    pub fn zeros(d: usize) -> Self {
        NoiseRecord { m1: DVector::zeros(d), m2: DVector::zeros(d) }
    }
}

pub trait NoiseModel: Sync {
    /// Write the noise for the update from index `n` into `out`.
    fn sample_into(&self, seed: u64, n: u64, theta: &DVector<f64>, w: &DVector<f64>, out: &mut NoiseRecord);

    /// Domination parameters (m₁, m₂) when the model guarantees them.
    fn bounds(&self) -> Option<(f64, f64)> {
        None
    }

    fn sample(&self, seed: u64, n: u64, theta: &DVector<f64>, w: &DVector<f64>) -> NoiseRecord {
        let mut out = NoiseRecord::zeros(theta.len());
        self.sample_into(seed, n, theta, w, &mut out);
        out
    }
}

/// Generator for step `n` of the run with the given seed.
pub fn step_rng(seed: u64, n: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(n);
    rng
}

#[derive(Debug, Clone, Copy, Default)]
pub struct ZeroNoise;

impl NoiseModel for ZeroNoise {
    fn sample_into(&self, _: u64, _: u64, _: &DVector<f64>, _: &DVector<f64>, out: &mut NoiseRecord) {
        out.m1.fill(0.0);
        out.m2.fill(0.0);
    }

    fn bounds(&self) -> Option<(f64, f64)> {
        Some((0.0, 0.0))
    }
}

/// Independent uniform directions on the unit sphere, scaled by
/// `c·(1+‖θ‖+‖w‖)`. Mean zero, and dominated with m₁ = m₂ = c.
#[derive(Debug, Clone, Copy)]
pub struct SphereNoise {
    pub c: f64,
}

fn unit_direction(rng: &mut ChaCha8Rng, out: &mut DVector<f64>) {
    loop {
        for x in out.iter_mut() {
            *x = StandardNormal.sample(rng);
        }
        let norm = out.norm();
        if norm > 0.0 {
            *out /= norm;
            return;
        }
    }
}

impl NoiseModel for SphereNoise {
    fn sample_into(&self, seed: u64, n: u64, theta: &DVector<f64>, w: &DVector<f64>, out: &mut NoiseRecord) {
        let mut rng = step_rng(seed, n);
        let scale = self.c * (1.0 + theta.norm() + w.norm());
        unit_direction(&mut rng, &mut out.m1);
        unit_direction(&mut rng, &mut out.m2);
        out.m1 *= scale;
        out.m2 *= scale;
    }

    fn bounds(&self) -> Option<(f64, f64)> {
        Some((self.c, self.c))
    }
}

/// ‖M⁽¹⁾‖ ≤ m₁(1+‖θ‖+‖w‖) and ‖M⁽²⁾‖ ≤ m₂(1+‖θ‖+‖w‖).
pub fn validate_noise_bound(noise: &NoiseRecord, theta: &DVector<f64>, w: &DVector<f64>, m1: f64, m2: f64) -> bool {
    let scale = 1.0 + theta.norm() + w.norm();
    noise.m1.norm() <= m1 * scale && noise.m2.norm() <= m2 * scale
}

//! GTD(0), GTD2 and TDC as instances of the linear two-timescale iteration.
//!
//! An [`MdpSpec`] is a Markov chain induced by a fixed policy together with
//! state rewards and linear features. Samples are drawn iid: s ~ π, s' ~ P(s,·).
//! With A = E[φ(φ−γφ')ᵀ], C = E[φφᵀ] and b = E[rφ] the variants map to:
//!
//! | variant | Γ₁ | W₁     | v₁ | Γ₂ | W₂ | v₂ |
//! |---------|----|--------|----|----|----|----|
//! | GTD(0)  | 0  | −Aᵀ    | 0  | A  | I  | b  |
//! | GTD2    | 0  | −Aᵀ    | 0  | A  | C  | b  |
//! | TDC     | A  | C − Aᵀ | b  | A  | C  | b  |

use std::fmt;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp1, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{self, inverse_condition, spectral_norm};
use crate::noise::{step_rng, NoiseModel, NoiseRecord};
use crate::sa::{check_assumptions, MatrixSpec};

/// Row sums may deviate from one by this much.
const STOCHASTIC_TOL: f64 = 1e-12;
const RANK_RCOND: f64 = 1e-10;
/// Discount used by [`random_mdp`].
pub const DEFAULT_DISCOUNT: f64 = 0.5;
const MAX_TRIES: u32 = 100;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawMdp", into = "RawMdp")]
pub struct MdpSpec {
    pub transitions: DMatrix<f64>,
    pub rewards: DVector<f64>,
    pub gamma: f64,
    /// S×d, row s is φ(s)ᵀ.
    pub features: DMatrix<f64>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawMdp {
    num_states: usize,
    transitions: Vec<Vec<f64>>,
    rewards: Vec<f64>,
    gamma: f64,
    features: Vec<Vec<f64>>,
}

impl TryFrom<RawMdp> for MdpSpec {
    type Error = String;
    fn try_from(raw: RawMdp) -> std::result::Result<Self, String> {
        let spec = MdpSpec::new(
            linalg::matrix_from_rows(&raw.transitions, "transitions")?,
            linalg::vector_from_slice(&raw.rewards, "rewards")?,
            raw.gamma,
            linalg::matrix_from_rows(&raw.features, "features")?,
        )
        .map_err(|e| e.to_string())?;
        if spec.num_states() != raw.num_states {
            return Err(format!("num_states = {} but transitions have {} rows", raw.num_states, spec.num_states()));
        }
        Ok(spec)
    }
}

impl From<MdpSpec> for RawMdp {
    fn from(m: MdpSpec) -> Self {
        RawMdp {
            num_states: m.num_states(),
            transitions: linalg::matrix_to_rows(&m.transitions),
            rewards: m.rewards.iter().copied().collect(),
            gamma: m.gamma,
            features: linalg::matrix_to_rows(&m.features),
        }
    }
}

impl MdpSpec {
    /// Validates shapes, stochasticity, |r| ≤ 1, γ ∈ [0,1), ‖φ(s)‖ ≤ 1 and rank(Φ) = d.
    pub fn new(transitions: DMatrix<f64>, rewards: DVector<f64>, gamma: f64, features: DMatrix<f64>) -> Result<Self> {
        let s = transitions.nrows();
        let bad = |msg: String| Err(Error::InvalidInput(msg));
        if s == 0 || transitions.ncols() != s {
            return bad(format!("transitions must be square and non-empty, got {:?}", transitions.shape()));
        }
        for (i, row) in transitions.row_iter().enumerate() {
            if row.iter().any(|&p| !(p >= 0.0)) || (row.sum() - 1.0).abs() > STOCHASTIC_TOL {
                return bad(format!("transitions row {i} is not a probability vector"));
            }
        }
        if rewards.len() != s {
            return bad(format!("rewards has length {}, expected {s}", rewards.len()));
        }
        if rewards.iter().any(|r| !(r.abs() <= 1.0)) {
            return bad("rewards must satisfy |r(s)| <= 1".into());
        }
        if !(0.0..1.0).contains(&gamma) {
            return bad(format!("gamma = {gamma} is outside [0, 1)"));
        }
        if features.nrows() != s || features.ncols() == 0 {
            return bad(format!("features must be {s}×d, got {:?}", features.shape()));
        }
        for (i, row) in features.row_iter().enumerate() {
            if !(row.norm() <= 1.0 + 1e-12) {
                return bad(format!("feature row {i} has norm above 1"));
            }
        }
        let d = features.ncols();
        if d > s || inverse_condition(&features) < RANK_RCOND {
            return Err(Error::RankDeficient { dim: d });
        }
        Ok(MdpSpec { transitions, rewards, gamma, features })
    }

    pub fn num_states(&self) -> usize {
        self.transitions.nrows()
    }

    pub fn dim(&self) -> usize {
        self.features.ncols()
    }

    pub fn phi(&self, s: usize) -> DVector<f64> {
        self.features.row(s).transpose()
    }
}

/// Stationary distribution of an irreducible, aperiodic chain.
pub fn stationary_distribution(p: &DMatrix<f64>) -> Result<DVector<f64>> {
    let s = p.nrows();
    if s == 0 || p.ncols() != s {
        return Err(Error::InvalidInput("transition matrix must be square and non-empty".into()));
    }
    if !is_primitive(p) {
        return Err(Error::NotErgodic);
    }
    // (Pᵀ − I)π = 0 with the last equation replaced by Σπ = 1.
    let mut m = p.transpose() - DMatrix::identity(s, s);
    m.row_mut(s - 1).fill(1.0);
    let mut rhs = DVector::zeros(s);
    rhs[s - 1] = 1.0;
    let lu = m.clone().lu();
    let mut pi = lu.solve(&rhs).ok_or(Error::NotErgodic)?;
    let residual = &rhs - &m * &pi;
    if let Some(dpi) = lu.solve(&residual) {
        pi += dpi;
    }
    if pi.iter().any(|&x| !(x > 0.0)) {
        return Err(Error::NotErgodic);
    }
    let total = pi.sum();
    Ok(pi / total)
}

/// Some power P^k with k ≤ (S−1)²+1 is strictly positive (Wielandt's bound).
fn is_primitive(p: &DMatrix<f64>) -> bool {
    let s = p.nrows();
    let pattern: Vec<Vec<bool>> = (0..s).map(|i| (0..s).map(|j| p[(i, j)] > 0.0).collect()).collect();
    let mut power = pattern.clone();
    let max_power = (s - 1) * (s - 1) + 1;
    for _ in 0..max_power {
        if power.iter().flatten().all(|&x| x) {
            return true;
        }
        power = (0..s)
            .map(|i| (0..s).map(|j| (0..s).any(|k| power[i][k] && pattern[k][j])).collect())
            .collect();
    }
    power.iter().flatten().all(|&x| x)
}

/// Exact A, C, b under the stationary distribution.
#[derive(Debug, Clone, PartialEq)]
pub struct ExpectedMatrices {
    pub a: DMatrix<f64>,
    pub c: DMatrix<f64>,
    pub b: DVector<f64>,
    pub pi: DVector<f64>,
}

pub fn expected_matrices(mdp: &MdpSpec) -> Result<ExpectedMatrices> {
    let d = mdp.dim();
    if d > mdp.num_states() || inverse_condition(&mdp.features) < RANK_RCOND {
        return Err(Error::RankDeficient { dim: d });
    }
    let pi = stationary_distribution(&mdp.transitions)?;
    let phi = &mdp.features;
    let d_pi = DMatrix::from_diagonal(&pi);
    let weighted = phi.transpose() * &d_pi;
    let next = &mdp.transitions * phi;
    let a = &weighted * (phi - next * mdp.gamma);
    let c = &weighted * phi;
    let b = &weighted * &mdp.rewards;
    Ok(ExpectedMatrices { a, c, b, pi })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GtdVariant {
    Gtd0,
    Gtd2,
    Tdc,
}

impl GtdVariant {
    pub const ALL: [GtdVariant; 3] = [GtdVariant::Gtd0, GtdVariant::Gtd2, GtdVariant::Tdc];
}

impl fmt::Display for GtdVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            GtdVariant::Gtd0 => "gtd0",
            GtdVariant::Gtd2 => "gtd2",
            GtdVariant::Tdc => "tdc",
        })
    }
}

impl FromStr for GtdVariant {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gtd0" => Ok(GtdVariant::Gtd0),
            "gtd2" => Ok(GtdVariant::Gtd2),
            "tdc" => Ok(GtdVariant::Tdc),
            other => Err(Error::InvalidInput(format!("unknown variant {other:?} (expected gtd0, gtd2 or tdc)"))),
        }
    }
}

/// A GTD-family algorithm on a concrete MDP: the mapped [`MatrixSpec`], the
/// noise domination parameters and the sampling tables.
#[derive(Debug, Clone)]
pub struct GtdInstance {
    pub variant: GtdVariant,
    pub spec: MatrixSpec,
    pub m1: f64,
    pub m2: f64,
    pub expected: ExpectedMatrices,
    pub mdp: MdpSpec,
    pi_cdf: Vec<f64>,
    row_cdf: Vec<Vec<f64>>,
    phis: Vec<DVector<f64>>,
}

/// One iid draw (s, s').
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Transition {
    pub s: usize,
    pub s_next: usize,
}

fn cdf(weights: impl Iterator<Item = f64>) -> Vec<f64> {
    let mut acc = 0.0;
    let mut out: Vec<f64> = weights
        .map(|w| {
            acc += w;
            acc
        })
        .collect();
    // Guard against the total falling just short of one.
    if let Some(last) = out.last_mut() {
        *last = f64::INFINITY;
    }
    out
}

fn draw(cdf: &[f64], u: f64) -> usize {
    cdf.iter().position(|&c| u < c).unwrap_or(cdf.len() - 1)
}

pub fn build_gtd(variant: GtdVariant, mdp: &MdpSpec) -> Result<GtdInstance> {
    let ex = expected_matrices(mdp)?;
    let d = mdp.dim();
    let (a, c, b) = (&ex.a, &ex.c, &ex.b);
    let zero_m = DMatrix::zeros(d, d);
    let zero_v = DVector::zeros(d);
    let spec = match variant {
        GtdVariant::Gtd0 => MatrixSpec::new(zero_m, -a.transpose(), zero_v, a.clone(), DMatrix::identity(d, d), b.clone())?,
        GtdVariant::Gtd2 => MatrixSpec::new(zero_m, -a.transpose(), zero_v, a.clone(), c.clone(), b.clone())?,
        GtdVariant::Tdc => MatrixSpec::new(a.clone(), c - a.transpose(), b.clone(), a.clone(), c.clone(), b.clone())?,
    };
    let report = check_assumptions(&spec);
    if let Some(which) = report.failure() {
        return Err(Error::AssumptionViolated { which: format!("{variant}: {which}") });
    }
    let gamma = mdp.gamma;
    let (na, nb, nc) = (spectral_norm(a), b.norm(), spectral_norm(c));
    let (m1, m2) = match variant {
        GtdVariant::Gtd0 => (1.0 + gamma + na, 1.0 + nb.max(gamma + na)),
        GtdVariant::Gtd2 => (1.0 + gamma + na, 1.0 + nb.max(gamma + na).max(nc)),
        GtdVariant::Tdc => (2.0 + gamma + na + nc, 2.0 + gamma + na + nc),
    };
    let pi_cdf = cdf(ex.pi.iter().copied());
    let row_cdf = (0..mdp.num_states()).map(|s| cdf(mdp.transitions.row(s).iter().copied())).collect();
    let phis = (0..mdp.num_states()).map(|s| mdp.phi(s)).collect();
    Ok(GtdInstance { variant, spec, m1, m2, expected: ex, mdp: mdp.clone(), pi_cdf, row_cdf, phis })
}

impl GtdInstance {
    pub fn dim(&self) -> usize {
        self.spec.dim()
    }

    /// The transition used at step `n` of the run with this seed.
    pub fn transition(&self, seed: u64, n: u64) -> Transition {
        let mut rng = step_rng(seed, n);
        let s = draw(&self.pi_cdf, rng.gen::<f64>());
        let s_next = draw(&self.row_cdf[s], rng.gen::<f64>());
        Transition { s, s_next }
    }

    /// TD error δ = r + γθᵀφ' − θᵀφ.
    pub fn td_error(&self, t: Transition, theta: &DVector<f64>) -> f64 {
        let (phi, phi_next) = (&self.phis[t.s], &self.phis[t.s_next]);
        self.mdp.rewards[t.s] + self.mdp.gamma * phi_next.dot(theta) - phi.dot(theta)
    }

    /// The raw sampled increments (g₁, g₂) whose expectations are h₁, h₂.
    pub fn sampled_updates(&self, t: Transition, theta: &DVector<f64>, w: &DVector<f64>) -> (DVector<f64>, DVector<f64>) {
        let d = self.dim();
        let mut g1 = DVector::zeros(d);
        let mut g2 = DVector::zeros(d);
        self.sampled_into(t, theta, w, &mut g1, &mut g2);
        (g1, g2)
    }

    fn sampled_into(&self, t: Transition, theta: &DVector<f64>, w: &DVector<f64>, g1: &mut DVector<f64>, g2: &mut DVector<f64>) {
        let (phi, phi_next) = (&self.phis[t.s], &self.phis[t.s_next]);
        let gamma = self.mdp.gamma;
        let delta = self.td_error(t, theta);
        let phi_w = phi.dot(w);
        match self.variant {
            GtdVariant::Gtd0 => {
                // g₁ = (φ − γφ')φᵀw, g₂ = δφ − w
                g1.copy_from(phi);
                g1.axpy(-gamma, phi_next, 1.0);
                *g1 *= phi_w;
                g2.copy_from(w);
                g2.axpy(delta, phi, -1.0);
            }
            GtdVariant::Gtd2 => {
                // g₁ = (φ − γφ')φᵀw, g₂ = (δ − φᵀw)φ
                g1.copy_from(phi);
                g1.axpy(-gamma, phi_next, 1.0);
                *g1 *= phi_w;
                g2.copy_from(phi);
                *g2 *= delta - phi_w;
            }
            GtdVariant::Tdc => {
                // g₁ = δφ − γφ'(φᵀw), g₂ = (δ − φᵀw)φ
                g1.copy_from(phi);
                *g1 *= delta;
                g1.axpy(-gamma * phi_w, phi_next, 1.0);
                g2.copy_from(phi);
                *g2 *= delta - phi_w;
            }
        }
    }
}

impl NoiseModel for GtdInstance {
    fn sample_into(&self, seed: u64, n: u64, theta: &DVector<f64>, w: &DVector<f64>, out: &mut NoiseRecord) {
        let t = self.transition(seed, n);
        self.sampled_into(t, theta, w, &mut out.m1, &mut out.m2);
        // M = g − h = g − v + Γθ + Ww
        let spec = &self.spec;
        out.m1 -= &spec.v1;
        out.m1.gemv(1.0, &spec.gamma1, theta, 1.0);
        out.m1.gemv(1.0, &spec.w1, w, 1.0);
        out.m2 -= &spec.v2;
        out.m2.gemv(1.0, &spec.gamma2, theta, 1.0);
        out.m2.gemv(1.0, &spec.w2, w, 1.0);
    }

    fn bounds(&self) -> Option<(f64, f64)> {
        Some((self.m1, self.m2))
    }
}

/// Noise (M⁽¹⁾, M⁽²⁾) for step `n` of the run with this seed.
pub fn sample_noise(instance: &GtdInstance, theta: &DVector<f64>, w: &DVector<f64>, seed: u64, n: u64) -> NoiseRecord {
    instance.sample(seed, n, theta, w)
}

/// Random MDP with [`DEFAULT_DISCOUNT`].
pub fn random_mdp(num_states: usize, dim: usize, seed: u64, ensure_assumptions: bool) -> Result<MdpSpec> {
    random_mdp_with_discount(num_states, dim, DEFAULT_DISCOUNT, seed, ensure_assumptions)
}

/// Rows of P are Dirichlet(1,…,1) mixed with a uniform floor, rewards are
/// uniform on [−1, 1], features are unit-norm Gaussian directions. Draws are
/// repeated until Φ has full rank and, when requested, all three variants
/// pass the positive-definiteness check.
pub fn random_mdp_with_discount(num_states: usize, dim: usize, gamma: f64, seed: u64, ensure_assumptions: bool) -> Result<MdpSpec> {
    if dim == 0 || num_states < dim {
        return Err(Error::InvalidInput(format!("need S >= d >= 1, got S={num_states}, d={dim}")));
    }
    if !(0.0..1.0).contains(&gamma) {
        return Err(Error::InvalidInput(format!("gamma = {gamma} is outside [0, 1)")));
    }
    let floor = 0.01f64.min(0.5 / num_states as f64);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for _ in 0..MAX_TRIES {
        let p: DMatrix<f64> = DMatrix::from_fn(num_states, num_states, |_, _| Exp1.sample(&mut rng));
        let p = DMatrix::from_fn(num_states, num_states, |i, j| {
            floor + (1.0 - floor * num_states as f64) * p[(i, j)] / p.row(i).sum()
        });
        let r = DVector::from_fn(num_states, |_, _| rng.gen_range(-1.0..=1.0));
        let mut phi: DMatrix<f64> = DMatrix::from_fn(num_states, dim, |_, _| StandardNormal.sample(&mut rng));
        for mut row in phi.row_iter_mut() {
            let norm = row.norm();
            if norm > 0.0 {
                row /= norm;
            }
        }
        let mdp = match MdpSpec::new(p, r, gamma, phi) {
            Ok(m) => m,
            Err(Error::RankDeficient { .. }) => continue,
            Err(e) => return Err(e),
        };
        if !ensure_assumptions || GtdVariant::ALL.iter().all(|&v| build_gtd(v, &mdp).is_ok()) {
            return Ok(mdp);
        }
    }
    Err(Error::GenerationFailed { tries: MAX_TRIES })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn draw_respects_cdf() {
        let c = cdf([0.25, 0.5, 0.25].into_iter());
        assert_eq!(draw(&c, 0.0), 0);
        assert_eq!(draw(&c, 0.3), 1);
        assert_eq!(draw(&c, 0.999999), 2);
    }

    #[test]
    fn variant_names_round_trip() {
        for v in GtdVariant::ALL {
            assert_eq!(v.to_string().parse::<GtdVariant>().unwrap(), v);
        }
        assert!("gtd1".parse::<GtdVariant>().is_err());
    }
}

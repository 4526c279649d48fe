//! Finite-time constants and thresholds.
//!
//! [`build_ledger`] evaluates every explicit constant that enters the
//! high-probability rate bounds for a given system and configuration. Most
//! are closed forms; the a_n/b_n constants need a forward scan. Constants
//! that overflow `f64` (the projection thresholds and what depends on them)
//! are kept as natural logarithms.
//!
//! Naming follows the quantities' usual symbols: `C_anbn_*` bound the
//! discounted step-size sums a_n, b_n; `C_Dn_*` bound products of
//! ‖I − α_k X₁‖ (resp. W₂, β_k); `K_*` are index thresholds.

use std::f64::consts::E;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{lambda_max_gram, lambda_min_sym, spectral_norm};
use crate::sa::{default_radius, DerivedSystem, StepSchedule, PROJECTION_INDICES};

/// Hard cap on forward scans.
pub const SCAN_CAP: u64 = 100_000_000;

/// Beyond this magnitude values are reported as log10.
const PLAIN_LIMIT: f64 = 1e300;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LedgerConfig {
    pub delta: f64,
    pub p: f64,
    pub r_theta: f64,
    pub r_w: f64,
    pub m1: f64,
    pub m2: f64,
    pub d: usize,
    pub schedule: StepSchedule,
}

impl LedgerConfig {
    /// δ = 0.05, p = 2 and R = 10·(1+‖θ*‖+‖w*‖) for both radii.
    pub fn defaults(system: &DerivedSystem, schedule: StepSchedule, m1: f64, m2: f64) -> Self {
        let r = default_radius(system);
        LedgerConfig { delta: 0.05, p: 2.0, r_theta: r, r_w: r, m1, m2, d: system.dim(), schedule }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidInput(m.to_string()));
        if !(self.delta > 0.0 && self.delta < 1.0) {
            return bad("ledger.delta must lie in (0, 1)");
        }
        if !(self.p > 1.0 && self.p.is_finite()) {
            return bad("ledger.p must exceed 1");
        }
        if !(self.r_theta > 0.0 && self.r_w > 0.0 && self.r_theta.is_finite() && self.r_w.is_finite()) {
            return bad("ledger radii must be positive and finite");
        }
        if !(self.m1 >= 0.0 && self.m2 >= 0.0 && self.m1.is_finite() && self.m2.is_finite()) {
            return bad("ledger noise parameters m1, m2 must be non-negative");
        }
        if self.d == 0 {
            return bad("ledger dimension must be at least 1");
        }
        Ok(())
    }

    /// 4d²/δ, the constant inside every logarithm.
    fn log_base(&self) -> f64 {
        4.0 * (self.d * self.d) as f64 / self.delta
    }
}

/// (q₁, q₂, q_min) with q₁ = λ_min(X₁+X₁ᵀ)/4, q₂ = λ_min(W₂+W₂ᵀ)/4.
pub fn q_values(system: &DerivedSystem) -> (f64, f64, f64) {
    let q1 = lambda_min_sym(&system.x1) / 4.0;
    let q2 = lambda_min_sym(&system.spec.w2) / 4.0;
    (q1, q2, q1.min(q2))
}

/// ν(n; γ) = (n+1)^{−γ/2} √ln(4d²(n+1)^p/δ).
pub fn nu(n: f64, gamma: f64, cfg: &LedgerConfig) -> f64 {
    let m = n + 1.0;
    m.powf(-gamma / 2.0) * (cfg.log_base().ln() + cfg.p * m.ln()).sqrt()
}

/// ln ν given ln(n+1); usable when n itself overflows.
fn ln_nu_from_ln(ln_m: f64, gamma: f64, cfg: &LedgerConfig) -> f64 {
    -gamma / 2.0 * ln_m + 0.5 * (cfg.log_base().ln() + cfg.p * ln_m).ln()
}

/// ℓ* = ⌈β/(2(α−β))⌉.
pub fn ell_star(schedule: &StepSchedule) -> u32 {
    let x = schedule.beta() / (2.0 * (schedule.alpha() - schedule.beta()));
    x.ceil() as u32
}

/// Threshold K and constant C of the discounted step-size sum bound
/// Σ_{k<n} (k+1)^{-2p} e^{-2q̂ Σ_{j=k+1}^{n-1} (j+1)^{-p}} ≤ (C e^{q̂}/q̂) n^{-p}.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AnbnConstant {
    /// Smallest K ≥ 1 with e^{−q̂ Σ_{k=1}^{n−1}(k+1)^{−p}} ≤ n^{−p} for every n ≥ K.
    pub k: u64,
    /// max_{1≤i≤K} i^p e^{−q̂ Σ_{k=1}^{i−1}(k+1)^{−p}}.
    pub c: f64,
}

pub fn anbn_constant(p: f64, qhat: f64, name: &str) -> Result<AnbnConstant> {
    if !(qhat > 0.0) || !(p > 0.0 && p < 1.0) {
        return Err(Error::InvalidInput(format!("{name}: need q > 0 and exponent in (0, 1)")));
    }
    // f(n) = p ln n − q̂ S(n) with S(n) = Σ_{k=1}^{n−1}(k+1)^{−p}; the condition
    // is f(n) ≤ 0. Its increment is at most p/n − q̂(n+1)^{−p}, which stays
    // negative once q̂ n (n+1)^{−p} ≥ p because n(n+1)^{−p} increases. From such
    // an n on, f(n) ≤ 0 persists.
    let mono_estimate = (p / qhat).powf(1.0 / (1.0 - p));
    // S(n) ≤ ∫₁ⁿ x^{−p}dx, so f(cap) > 0 is certain when the integral bound says so.
    let cap = SCAN_CAP as f64;
    let f_cap_lower = p * cap.ln() - qhat * (cap.powf(1.0 - p) - 1.0) / (1.0 - p);
    if mono_estimate > 2.0 * cap || f_cap_lower > 0.0 {
        return Err(Error::CapExceeded { name: name.to_string(), cap: SCAN_CAP });
    }
    let mut s = 0.0;
    let mut last_fail = 0u64;
    let mut log_c = f64::NEG_INFINITY;
    let mut log_c_at_fail = f64::NEG_INFINITY;
    for n in 1..=SCAN_CAP {
        let nf = n as f64;
        if n >= 2 {
            s += nf.powf(-p);
        }
        let f = p * nf.ln() - qhat * s;
        log_c = log_c.max(f);
        if f > 0.0 {
            last_fail = n;
            log_c_at_fail = log_c;
        }
        let monotone = qhat * nf * (nf + 1.0).powf(-p) >= p;
        if monotone && f <= 0.0 {
            // f(1) = 0 and f(K) ≤ 0, so the maximum over i ≤ K is the maximum
            // over the failing prefix, floored at zero.
            let k = last_fail + 1;
            let c = log_c_at_fail.max(0.0).exp();
            return Ok(AnbnConstant { k, c });
        }
    }
    Err(Error::CapExceeded { name: name.to_string(), cap: SCAN_CAP })
}

/// a_n and b_n together with their bounds.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AnBn {
    pub a_n: f64,
    pub b_n: f64,
    pub bound_a: f64,
    pub bound_b: f64,
}

/// a_n = Σ_{k<n} α_k² e^{−2q₁Σ_{j=k+1}^{n−1}α_j} for n = 0..=n_max, by the
/// recursion a_{n+1} = a_n e^{−2q₁α_n} + α_n². Same for b_n with β and q₂.
pub fn an_bn_sequences(n_max: usize, q1: f64, q2: f64, schedule: &StepSchedule) -> (Vec<f64>, Vec<f64>) {
    let mut a = Vec::with_capacity(n_max + 1);
    let mut b = Vec::with_capacity(n_max + 1);
    let (mut an, mut bn) = (0.0, 0.0);
    for n in 0..=n_max {
        a.push(an);
        b.push(bn);
        let (al, be) = schedule.stepsizes(n as u64);
        an = an * (-2.0 * q1 * al).exp() + al * al;
        bn = bn * (-2.0 * q2 * be).exp() + be * be;
    }
    (a, b)
}

pub fn an_bn(n: u64, system: &DerivedSystem, schedule: &StepSchedule) -> Result<AnBn> {
    let (q1, q2, _) = q_values(system);
    let ca = anbn_constant(schedule.alpha(), q1, "K_anbn_theta")?;
    let cb = anbn_constant(schedule.beta(), q2, "K_anbn_w")?;
    let (a, b) = an_bn_sequences(n as usize, q1, q2, schedule);
    let nf = n as f64;
    Ok(AnBn {
        a_n: a[n as usize],
        b_n: b[n as usize],
        bound_a: ca.c * q1.exp() / q1 * nf.powf(-schedule.alpha()),
        bound_b: cb.c * q2.exp() / q2 * nf.powf(-schedule.beta()),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Moderateness {
    Alpha,
    Beta,
}

/// Ratio test u_k/u_{k+1} ≤ (α_{k+1}/α_k)(β_k/β_{k+1})·e^{(q₁/2)α_{k+1}}
/// (α kind) or with e^{(q₂/2)β_{k+2}} (β kind), for every k ≥ k0 such that
/// u_{k+1} is available. `u[k]` is the k-th term.
pub fn moderateness_check(u: &[f64], kind: Moderateness, k0: usize, system: &DerivedSystem, schedule: &StepSchedule) -> bool {
    let (q1, q2, _) = q_values(system);
    (k0..u.len().saturating_sub(1)).all(|k| moderate_at(u[k], u[k + 1], k as f64, kind, q1, q2, schedule))
}

/// One step of the ratio test at index k (real-valued so large k work).
pub fn moderate_at(uk: f64, uk1: f64, k: f64, kind: Moderateness, q1: f64, q2: f64, schedule: &StepSchedule) -> bool {
    let (a0, a1) = (schedule.alpha_at(k), schedule.alpha_at(k + 1.0));
    let (b0, b1) = (schedule.beta_at(k), schedule.beta_at(k + 1.0));
    let factor = match kind {
        Moderateness::Alpha => (q1 / 2.0 * a1).exp(),
        Moderateness::Beta => (q2 / 2.0 * schedule.beta_at(k + 2.0)).exp(),
    };
    uk / uk1 <= (a1 / a0) * (b0 / b1) * factor
}

/// K_α(z) = max{⌈(q₁/(2(α−β+z)))^{1/α}⌉, ⌈(4(α−β+z)/q₁)^{1/(1−α)}⌉}.
pub fn k_alpha(z: f64, q1: f64, schedule: &StepSchedule) -> f64 {
    let (a, b) = (schedule.alpha(), schedule.beta());
    let c = a - b + z;
    (q1 / (2.0 * c)).powf(1.0 / a).ceil().max((4.0 * c / q1).powf(1.0 / (1.0 - a)).ceil())
}

/// K_β(z) = max{⌈(q₂/(α−β+z))^{1/β}⌉, ⌈(4(α−β+z)/q₂)^{1/(1−β)}⌉}.
pub fn k_beta(z: f64, q2: f64, schedule: &StepSchedule) -> f64 {
    let (a, b) = (schedule.alpha(), schedule.beta());
    let c = a - b + z;
    (q2 / c).powf(1.0 / b).ceil().max((4.0 * c / q2).powf(1.0 / (1.0 - b)).ceil())
}

/// Smallest n ≥ 0 with (n+1)^{−γ} ≤ r.
fn first_step_below(r: f64, gamma: f64) -> f64 {
    if r >= 1.0 {
        return 0.0;
    }
    let mut k = (r.powf(-1.0 / gamma) - 1.0).ceil().max(0.0);
    if k < 9.0e15 {
        let step = |n: f64| (n + 1.0).powf(-gamma);
        while step(k) > r {
            k += 1.0;
        }
        while k > 0.0 && step(k - 1.0) <= r {
            k -= 1.0;
        }
    }
    k
}

/// [2X ln(2X·base^{γ/p})]^{1/γ}: beyond it n^{−γ} ln(base·n^p) ≤ p/(γX)·… holds.
/// A non-positive logarithm means the inequality holds for every n ≥ 1.
fn log_threshold(x: f64, gamma: f64, cfg: &LedgerConfig) -> f64 {
    let inner = 2.0 * x * (2.0 * x * cfg.log_base().powf(gamma / cfg.p)).ln();
    if inner > 0.0 {
        inner.powf(1.0 / gamma)
    } else {
        0.0
    }
}

/// C_Dn for a matrix M (X₁ or W₂) with margin q and exponent γ: threshold,
/// μ and the constant.
fn dn_constant(m: &nalgebra::DMatrix<f64>, q: f64, gamma: f64, name: &str) -> Result<(f64, f64, f64)> {
    let lmin = lambda_min_sym(m);
    let lmax = lambda_max_gram(m);
    let mu = -lmin + lmax;
    let k = (lmax / (lmin - 2.0 * q)).powf(1.0 / gamma).ceil();
    let exponent = mu + 2.0 * q;
    if exponent <= 0.0 {
        return Ok((k, mu, 1.0));
    }
    if !(k <= SCAN_CAP as f64) {
        return Err(Error::CapExceeded { name: name.to_string(), cap: SCAN_CAP });
    }
    // The largest product over ℓ₁ ≤ ℓ₂ ≤ K of e^{γ_ℓ(μ+2q)} is the full one.
    let sum: f64 = (0..=k as u64).map(|l| ((l + 1) as f64).powf(-gamma)).sum();
    Ok((k, mu, (exponent * sum / 2.0).exp().max(1.0)))
}

/// Index of the last sparse projection needed: the smallest k^k − 1 ≥ N′.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FinalIndex {
    Exact(u64),
    /// k^k − 1 beyond 64 bits; `ln_value` = k ln k. `k` is integral (or
    /// infinite when N′ itself overflows).
    Huge { k: f64, ln_value: f64 },
}

impl FinalIndex {
    /// ln(N_final + 1).
    pub fn ln_plus_one(&self) -> f64 {
        match *self {
            FinalIndex::Exact(n) => ((n as f64) + 1.0).ln(),
            FinalIndex::Huge { ln_value, .. } => ln_value,
        }
    }
}

fn final_index(ln_n_prime: f64) -> FinalIndex {
    // n ≥ N′ for an integer n means n ≥ ⌈N′⌉.
    if ln_n_prime < (PROJECTION_INDICES[14] as f64).ln() {
        // Absorb the rounding in exp(ln N′) so that N′ = k^k − 1 maps to itself.
        let target = (ln_n_prime.exp() * (1.0 - 1e-12)).ceil();
        if let Some(&n) = PROJECTION_INDICES.iter().find(|&&n| n as f64 >= target) {
            return FinalIndex::Exact(n);
        }
    }
    // k^k − 1 ≥ N′ ⇔ k ln k ≥ ln(N′ + 1) ≈ ln N′ at this scale. Newton on
    // k ln k = L, then the smallest integer above the root.
    if !ln_n_prime.is_finite() {
        return FinalIndex::Huge { k: f64::INFINITY, ln_value: f64::INFINITY };
    }
    let mut k = (ln_n_prime / ln_n_prime.ln()).max(16.0);
    for _ in 0..100 {
        let next = (k + ln_n_prime) / (k.ln() + 1.0);
        if (next - k).abs() <= 1e-12 * k {
            k = next;
            break;
        }
        k = next;
    }
    let mut k = k.ceil().max(16.0);
    // Unit steps only where f64 still resolves them.
    if k < 4.0e15 {
        while k > 16.0 && (k - 1.0) * (k - 1.0).ln() >= ln_n_prime {
            k -= 1.0;
        }
        while k * k.ln() < ln_n_prime {
            k += 1.0;
        }
    }
    // k is at or above the root, so k ln k ≥ ln N′ up to rounding.
    FinalIndex::Huge { k, ln_value: (k * k.ln()).max(ln_n_prime) }
}

/// Deviations ‖θ_{n0}−θ*‖ and ‖w_{n0}−w*‖ used by the n0-dependent constants.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Deviations {
    pub theta: f64,
    pub w: f64,
}

/// All constants for one system and configuration.
#[derive(Debug, Clone, PartialEq)]
pub struct ConstantsLedger {
    pub cfg: LedgerConfig,
    pub system: DerivedSystem,
    pub norm_x1: f64,
    pub norm_w1: f64,
    pub norm_w2_inv: f64,
    pub norm_gamma2: f64,
    pub norm_w1_w2inv: f64,
    pub q1: f64,
    pub q2: f64,
    pub q_min: f64,
    pub k_anbn_theta: u64,
    pub k_anbn_w: u64,
    pub c_anbn_theta: f64,
    pub c_anbn_w: f64,
    pub k_smalleig_alpha: f64,
    pub k_smalleig_beta: f64,
    pub k_dn1: f64,
    pub k_dn2: f64,
    pub mu1: f64,
    pub mu2: f64,
    pub c_dn_theta: f64,
    pub c_dn_w: f64,
    pub c_r_theta: f64,
    pub c_r_w: f64,
    pub l_theta: f64,
    pub l_w: f64,
    pub c_t: f64,
    pub c_int: f64,
    pub k_int_a: f64,
    pub k_int_b: f64,
    pub k_epsdom_a: f64,
    pub k_epsdom_b: f64,
    pub k_alpha_0: f64,
    pub k_alpha_half_beta: f64,
    pub k_beta_half_beta: f64,
    pub k_consteps_alpha: f64,
    pub k_consteps_beta: f64,
    pub c_rtheta_theta: f64,
    pub c_rtheta_w: f64,
    pub k_largetheta: f64,
    pub c_ra: f64,
    pub c_rb: f64,
    pub a2: f64,
    pub a3: f64,
    pub a1_pp: f64,
    pub a4c1: f64,
    pub a5c1: f64,
    pub a4c0: f64,
    pub a5c0: f64,
    pub a4_prime: f64,
    pub a5_prime: f64,
    pub k_a4a5_a: f64,
    pub k_a4a5_b: f64,
    pub ln_k_proj_w: f64,
    pub ln_k_proj_theta: f64,
    pub ell_star: u32,
    pub k_u_monotone: f64,
    pub n_thm3: f64,
    pub n_thm4: f64,
    pub n_thm2: f64,
    pub ln_n_prime: f64,
    pub n_final: FinalIndex,
    pub ln_c_final_theta: f64,
    pub ln_c_final_w: f64,
}

pub fn build_ledger(system: &DerivedSystem, cfg: &LedgerConfig) -> Result<ConstantsLedger> {
    cfg.validate()?;
    let sch = cfg.schedule;
    let (alpha, beta) = (sch.alpha(), sch.beta());
    if alpha == beta {
        return Err(Error::DegenerateTimescales);
    }
    if !(alpha < 1.0 && alpha > beta && beta > 0.0) {
        return Err(Error::InvalidSchedule { alpha, beta });
    }
    if cfg.d != system.dim() {
        return Err(Error::InvalidInput(format!("ledger.d = {} but the system has dimension {}", cfg.d, system.dim())));
    }
    let (q1, q2, q_min) = q_values(system);
    if !(q1 > 0.0) {
        return Err(Error::AssumptionViolated { which: "X1 + X1^T is not positive definite".into() });
    }
    if !(q2 > 0.0) {
        return Err(Error::AssumptionViolated { which: "W2 + W2^T is not positive definite".into() });
    }
    let d3 = (cfg.d as f64).powi(3);
    let (r_th, r_w, p, delta) = (cfg.r_theta, cfg.r_w, cfg.p, cfg.delta);
    let spec = &system.spec;
    let norm_x1 = spectral_norm(&system.x1);
    let norm_w1 = spectral_norm(&spec.w1);
    let norm_w2_inv = spectral_norm(&system.w2_inv);
    let norm_gamma2 = spectral_norm(&spec.gamma2);
    let norm_w1_w2inv = spectral_norm(&system.w1_w2inv());

    let an = anbn_constant(alpha, q1, "K_anbn_theta")?;
    let bn = anbn_constant(beta, q2, "K_anbn_w")?;
    let c_anbn_theta = an.c * q1.exp() / q1;
    let c_anbn_w = bn.c * q2.exp() / q2;

    let w2 = &spec.w2;
    let k_smalleig_alpha = first_step_below((lambda_min_sym(&system.x1) - 2.0 * q1) / lambda_max_gram(&system.x1), alpha);
    let k_smalleig_beta = first_step_below((lambda_min_sym(w2) - 2.0 * q2) / lambda_max_gram(w2), beta);
    let (k_dn1, mu1, c_dn_theta) = dn_constant(&system.x1, q1, alpha, "K_Dn1")?;
    let (k_dn2, mu2, c_dn_w) = dn_constant(w2, q2, beta, "K_Dn2")?;

    let c_r_theta = 3.0;
    let c_r_w = 1.5 + q2.exp() / q2 * norm_gamma2 * c_dn_w * c_r_theta * r_th / r_w;

    let reach = 1.0 + c_r_theta * r_th + c_r_w * r_w + system.theta_star.norm() + system.w_star.norm();
    let l_theta = 2.0 * (c_dn_theta * reach * (cfg.m2 + cfg.m1 * norm_w1 * norm_w2_inv)).powi(2);
    let l_w = 2.0 * (c_dn_w * reach * cfg.m2).powi(2);

    let gap = alpha - beta;
    let c_t = norm_x1 + 2.0 * gap * (1.0 + norm_x1);
    let c_int = 2.0 * (q2 / 2.0).exp() / q2;
    let k_int_a = 2f64.powf(1.0 / gap);
    let k_int_b = (3.0 * alpha / q2).powf(1.0 / (1.0 - beta)) - 2.0;
    let k_epsdom_a = (l_theta * c_anbn_theta / (l_w * c_anbn_w)).powf(1.0 / gap);
    let k_epsdom_b = (1.0 + alpha / (2.0 * q_min)).powf(1.0 / (1.0 - alpha));

    let k_alpha_0 = k_alpha(0.0, q1, &sch);
    let k_alpha_half_beta = k_alpha(beta / 2.0, q1, &sch);
    let k_beta_half_beta = k_beta(beta / 2.0, q2, &sch);

    let k_consteps_alpha = log_threshold(4.0 * d3 * l_theta * c_anbn_theta * p / (alpha * r_th * r_th), alpha, cfg);
    let k_consteps_beta = log_threshold(4.0 * d3 * l_w * c_anbn_w * p / (beta * r_w * r_w), beta, cfg);

    let c_rtheta_theta = norm_w1 * norm_w2_inv * q2.exp() / q2 * c_r_theta * norm_gamma2 * c_dn_w;
    let c_rtheta_w = norm_w1 * norm_w2_inv * (2.5 + 2.0 * (q1 / 2.0).exp() / q1 * c_t * c_dn_theta * c_r_w);
    let k_largetheta = (2.0 / 3.0 * c_rtheta_theta + 2.0 / 3.0 * c_rtheta_w * r_w / r_th).powf(1.0 / gap);

    let c_ra = c_dn_theta * norm_w1_w2inv.max(1.0);
    let c_rb = norm_w1_w2inv * (1.0 + 2.0 * (q1 / 2.0).exp() / q1 * c_t * c_dn_theta);

    let ell = ell_star(&sch);
    let a2 = (q1 + 2.0 * gap).exp() * c_dn_w * norm_gamma2 * c_rb * 2.0 * (q2 / 2.0).exp() / q2;
    let a3 = c_r_w * r_w;
    let geom: f64 = (0..ell).map(|i| a2.powi(i as i32)).sum();
    let sqrt_w = (d3 * l_w * c_anbn_w).sqrt();
    let a1_pp = c_dn_w * norm_gamma2 * c_int;
    let a4c1 = d3 * l_w * c_anbn_w
        * (c_dn_w * norm_gamma2 * (r_th + c_ra * q1.exp() * (2.0 / q_min) * (r_th + r_w)) + c_dn_w * r_w)
        * E
        * geom;
    let a5c1 = c_ra * (c_r_theta * r_th + c_r_w * r_w);
    let a4c0 = (E + E * E * a1_pp) * geom * sqrt_w + a3 * a2.powi(ell as i32);
    let a5c0 = (4.0 * d3 * l_theta * c_anbn_theta).sqrt();
    let a4_prime = a4c1 + 1.0;
    let a5_prime = 4.0 + 2.0 * a5c1 + 2.0 * c_rb * a4c1;
    // X ν(n; γ) ≤ 1 holds from the start when X = 0.
    let nu_below_one = |x: f64, g: f64| if x > 0.0 { log_threshold(p / (g * x * x), g, cfg) } else { 0.0 };
    let k_a4a5_a = nu_below_one(a4c0, beta);
    let k_a4a5_b = nu_below_one((c_rb * a4c0).min(a5c0), alpha);

    // K = x^x with x = (A′/R)^{2/γ}; ln K = x ln x.
    let ln_double_exp = |a: f64, r: f64, g: f64| {
        let x = (a / r).powf(2.0 / g);
        x * x.ln()
    };
    let ln_k_proj_w = ln_double_exp(a4_prime, r_w, beta);
    let ln_k_proj_theta = ln_double_exp(a5_prime, r_th, alpha);

    let b2 = cfg.log_base().powf(1.0 / p);
    let k_u_monotone = (1.0 / beta).exp() / b2;

    let n_thm3 = [
        k_smalleig_alpha,
        k_smalleig_beta,
        k_alpha_0,
        k_consteps_beta,
        k_largetheta,
        (p - 1.0).powf(-1.0 / (p - 1.0)),
    ]
    .into_iter()
    .fold(f64::NEG_INFINITY, f64::max);
    let n_thm4 = [
        k_alpha_half_beta,
        k_beta_half_beta,
        (1.0 / beta).exp() * delta.powf(1.0 / p) / (4.0 * (cfg.d * cfg.d) as f64).powf(1.0 / p),
        k_int_a,
        k_int_b,
        k_epsdom_a,
        k_epsdom_b,
    ]
    .into_iter()
    .fold(f64::NEG_INFINITY, f64::max)
        + 1.0;
    let n_thm2 = n_thm3.max(n_thm4);
    let ln_pos = |x: f64| x.max(1.0).ln();
    let ln_n_prime = [
        ln_pos(n_thm2),
        ln_pos(k_a4a5_a),
        ln_pos(k_a4a5_b),
        ln_k_proj_w.max(0.0),
        ln_k_proj_theta.max(0.0),
        1.0 / beta,
        (2.0 / beta) * (2.0 / beta).ln(),
    ]
    .into_iter()
    .fold(f64::NEG_INFINITY, f64::max);
    let n_final = final_index(ln_n_prime);
    let ln_m = n_final.ln_plus_one();
    let ln_c_final_theta = a5_prime.ln() - ln_nu_from_ln(ln_m, alpha, cfg);
    let ln_c_final_w = a4_prime.ln() - ln_nu_from_ln(ln_m, beta, cfg);

    let ledger = ConstantsLedger {
        cfg: *cfg,
        system: system.clone(),
        norm_x1,
        norm_w1,
        norm_w2_inv,
        norm_gamma2,
        norm_w1_w2inv,
        q1,
        q2,
        q_min,
        k_anbn_theta: an.k,
        k_anbn_w: bn.k,
        c_anbn_theta,
        c_anbn_w,
        k_smalleig_alpha,
        k_smalleig_beta,
        k_dn1,
        k_dn2,
        mu1,
        mu2,
        c_dn_theta,
        c_dn_w,
        c_r_theta,
        c_r_w,
        l_theta,
        l_w,
        c_t,
        c_int,
        k_int_a,
        k_int_b,
        k_epsdom_a,
        k_epsdom_b,
        k_alpha_0,
        k_alpha_half_beta,
        k_beta_half_beta,
        k_consteps_alpha,
        k_consteps_beta,
        c_rtheta_theta,
        c_rtheta_w,
        k_largetheta,
        c_ra,
        c_rb,
        a2,
        a3,
        a1_pp,
        a4c1,
        a5c1,
        a4c0,
        a5c0,
        a4_prime,
        a5_prime,
        k_a4a5_a,
        k_a4a5_b,
        ln_k_proj_w,
        ln_k_proj_theta,
        ell_star: ell,
        k_u_monotone,
        n_thm3,
        n_thm4,
        n_thm2,
        ln_n_prime,
        n_final,
        ln_c_final_theta,
        ln_c_final_w,
    };
    Ok(ledger)
}

impl ConstantsLedger {
    pub fn schedule(&self) -> StepSchedule {
        self.cfg.schedule
    }

    /// Deviations assumed when none are supplied: (R_θ, R_w).
    pub fn default_deviations(&self) -> Deviations {
        Deviations { theta: self.cfg.r_theta, w: self.cfg.r_w }
    }

    pub fn nu(&self, n: f64, gamma: f64) -> f64 {
        nu(n, gamma, &self.cfg)
    }

    /// ε^{(θ)}_n = √(d³ L_θ C_anbn_θ) ν(n; α).
    pub fn eps_theta(&self, n: f64) -> f64 {
        (self.d3() * self.l_theta * self.c_anbn_theta).sqrt() * self.nu(n, self.schedule().alpha())
    }

    /// ε^{(w)}_n = √(d³ L_w C_anbn_w) ν(n; β).
    pub fn eps_w(&self, n: f64) -> f64 {
        (self.d3() * self.l_w * self.c_anbn_w).sqrt() * self.nu(n, self.schedule().beta())
    }

    fn d3(&self) -> f64 {
        (self.cfg.d as f64).powi(3)
    }

    /// C_Rc(n0) = β_{n0}‖θ_{n0}−θ*‖ + C_Ra e^{q₁}(2/q_min)[‖θ_{n0}−θ*‖ + (α_{n0}/β_{n0})‖w_{n0}−w*‖].
    pub fn c_rc(&self, n0: f64, dev: Deviations) -> f64 {
        let sch = self.schedule();
        let (a, b) = (sch.alpha_at(n0), sch.beta_at(n0));
        b * dev.theta + self.c_ra * self.q1.exp() * (2.0 / self.q_min) * (dev.theta + a / b * dev.w)
    }

    /// A₁(n0) = e + e[C_Dn_w‖Γ₂‖C_Rc(n0) + C_Dn_w‖w_{n0}−w*‖]/ε^{(w)}_{n0} + e²C_Dn_w‖Γ₂‖C_Int.
    pub fn a1(&self, n0: f64, dev: Deviations) -> f64 {
        let g = self.c_dn_w * self.norm_gamma2;
        E + E * (g * self.c_rc(n0, dev) + self.c_dn_w * dev.w) / self.eps_w(n0) + E * E * g * self.c_int
    }

    fn geom(&self, ell: u32) -> f64 {
        (0..ell).map(|i| self.a2.powi(i as i32)).sum()
    }

    /// A₄(n0) = A₁(n0)Σ_{i<ℓ*}A₂ⁱ √(d³L_w C_anbn_w) + A₃A₂^{ℓ*}.
    pub fn a4(&self, n0: f64, dev: Deviations) -> f64 {
        self.a1(n0, dev) * self.geom(self.ell_star) * (self.d3() * self.l_w * self.c_anbn_w).sqrt()
            + self.a3 * self.a2.powi(self.ell_star as i32)
    }

    /// A₅(n0) = 2[C_Ra(C_R^θR_θ + C_R^wR_w)/ε^{(θ)}_{n0−1} + 1]√(4d³L_θC_anbn_θ) + 2C_Rb A₄(n0).
    pub fn a5(&self, n0: f64, dev: Deviations) -> f64 {
        let reach = self.c_r_theta * self.cfg.r_theta + self.c_r_w * self.cfg.r_w;
        2.0 * (self.c_ra * reach / self.eps_theta(n0 - 1.0) + 1.0) * (4.0 * self.d3() * self.l_theta * self.c_anbn_theta).sqrt()
            + 2.0 * self.c_rb * self.a4(n0, dev)
    }

    /// u_n(ℓ) = [A₁(n0)Σ_{i<ℓ}A₂ⁱ]ε^{(w)}_n + A₃A₂^ℓ(α_n/β_n)^ℓ, with the
    /// default deviations.
    pub fn u_ladder(&self, n: f64, ell: u32, n0: f64) -> f64 {
        self.u_ladder_with(n, ell, n0, self.default_deviations())
    }

    pub fn u_ladder_with(&self, n: f64, ell: u32, n0: f64, dev: Deviations) -> f64 {
        let sch = self.schedule();
        let ratio = sch.alpha_at(n) / sch.beta_at(n);
        self.a1(n0, dev) * self.geom(ell) * self.eps_w(n) + self.a3 * self.a2.powi(ell as i32) * ratio.powi(ell as i32)
    }

    /// The flat list of named entries in report order.
    pub fn entries(&self) -> Vec<LedgerEntry> {
        let n0 = self.n_thm2;
        let dev = self.default_deviations();
        let sch = self.schedule();
        let mut out = Vec::new();
        let mut put = |name: &str, value: f64, source: &str| out.push(LedgerEntry::plain(name, value, source));
        put("q1", self.q1, "q1 = lambda_min(X1 + X1^T)/4");
        put("q2", self.q2, "q2 = lambda_min(W2 + W2^T)/4");
        put("q_min", self.q_min, "q_min = min(q1, q2)");
        put("K_anbn_theta", self.k_anbn_theta as f64, "a_n/b_n lemma: least K with exp(-q1 sum_{k=1}^{n-1}(k+1)^-alpha) <= n^-alpha for all n >= K (forward scan)");
        put("K_anbn_w", self.k_anbn_w as f64, "a_n/b_n lemma: least K with exp(-q2 sum_{k=1}^{n-1}(k+1)^-beta) <= n^-beta for all n >= K (forward scan)");
        put("C_anbn_theta", self.c_anbn_theta, "a_n/b_n lemma: a_n <= C n^-alpha, C = max_{i<=K} i^alpha exp(-q1 sum) * e^q1/q1");
        put("C_anbn_w", self.c_anbn_w, "a_n/b_n lemma: b_n <= C n^-beta, C = max_{i<=K} i^beta exp(-q2 sum) * e^q2/q2");
        put("K_smalleig_alpha", self.k_smalleig_alpha, "contraction lemma: alpha_n <= (lambda_min(X1+X1^T) - 2q1)/lambda_max(X1^T X1)");
        put("K_smalleig_beta", self.k_smalleig_beta, "contraction lemma: beta_n <= (lambda_min(W2+W2^T) - 2q2)/lambda_max(W2^T W2)");
        put("K_Dn1", self.k_dn1, "product bound: ceil((lambda_max(X1^T X1)/(lambda_min(X1+X1^T) - 2q1))^(1/alpha))");
        put("K_Dn2", self.k_dn2, "product bound: ceil((lambda_max(W2^T W2)/(lambda_min(W2+W2^T) - 2q2))^(1/beta))");
        put("mu1", self.mu1, "product bound: mu1 = -lambda_min(X1+X1^T) + lambda_max(X1^T X1)");
        put("mu2", self.mu2, "product bound: mu2 = -lambda_min(W2+W2^T) + lambda_max(W2^T W2)");
        put("C_Dn_theta", self.c_dn_theta, "product bound: prod ||I - alpha_k X1|| <= C exp(-q1 sum alpha_k)");
        put("C_Dn_w", self.c_dn_w, "product bound: prod ||I - beta_k W2|| <= C exp(-q2 sum beta_k)");
        put("C_R_theta", self.c_r_theta, "boundedness on the good event: C_R^theta = 3");
        put("C_R_w", self.c_r_w, "boundedness on the good event: C_R^w = 3/2 + (e^q2/q2)||Gamma2|| C_Dn_w C_R^theta R_theta/R_w");
        out.push(LedgerEntry::plain("L_theta", self.l_theta, "Azuma increment scale for the theta martingale: 2[C_Dn_theta (1 + C_R^theta R_theta + C_R^w R_w + |theta*| + |w*|)(m2 + m1 |W1||W2^-1|)]^2").reconstructed());
        out.push(LedgerEntry::plain("L_w", self.l_w, "Azuma increment scale for the w martingale: 2[C_Dn_w (1 + C_R^theta R_theta + C_R^w R_w + |theta*| + |w*|) m2]^2").reconstructed());
        let mut put = |name: &str, value: f64, source: &str| out.push(LedgerEntry::plain(name, value, source));
        put("eps_theta(n0)", self.eps_theta(n0), "eps_theta(n) = sqrt(d^3 L_theta C_anbn_theta) nu(n; alpha), evaluated at n0 = N_thm2");
        put("eps_w(n0)", self.eps_w(n0), "eps_w(n) = sqrt(d^3 L_w C_anbn_w) nu(n; beta), evaluated at n0 = N_thm2");
        put("nu(n0,alpha)", self.nu(n0, sch.alpha()), "nu(n; gamma) = (n+1)^(-gamma/2) sqrt(ln(4 d^2 (n+1)^p/delta)), at n0 = N_thm2");
        put("nu(n0,beta)", self.nu(n0, sch.beta()), "nu(n; gamma) = (n+1)^(-gamma/2) sqrt(ln(4 d^2 (n+1)^p/delta)), at n0 = N_thm2");
        put("C_T", self.c_t, "T_n bound: C_T = ||X1|| + 2(alpha - beta)(1 + ||X1||)");
        put("C_Int", self.c_int, "integral comparison: C_Int = 2 e^(q2/2)/q2");
        put("K_Int_a", self.k_int_a, "integral comparison: K_a = 2^(1/(alpha - beta))");
        put("K_Int_b", self.k_int_b, "integral comparison: K_b = (3 alpha/q2)^(1/(1 - beta)) - 2");
        put("K_epsdom_a", self.k_epsdom_a, "eps domination: (L_theta C_anbn_theta/(L_w C_anbn_w))^(1/(alpha - beta))");
        put("K_epsdom_b", self.k_epsdom_b, "eps domination: (1 + alpha/(2 q_min))^(1/(1 - alpha))");
        put("K_alpha(0)", self.k_alpha_0, "moderateness threshold K_alpha(z) at z = 0");
        put("K_alpha(beta/2)", self.k_alpha_half_beta, "moderateness threshold K_alpha(z) at z = beta/2");
        put("K_beta(beta/2)", self.k_beta_half_beta, "moderateness threshold K_beta(z) at z = beta/2");
        put("K_consteps_alpha", self.k_consteps_alpha, "eps_theta(n) <= R_theta/2 beyond this index");
        put("K_consteps_beta", self.k_consteps_beta, "eps_w(n) <= R_w/2 beyond this index");
        put("C_Rtheta_theta", self.c_rtheta_theta, "R_n theta bound: |W1||W2^-1|(e^q2/q2) C_R^theta ||Gamma2|| C_Dn_w");
        put("C_Rtheta_w", self.c_rtheta_w, "R_n theta bound: |W1||W2^-1|[5/2 + (2 e^(q1/2)/q1) C_T C_Dn_theta C_R^w]");
        put("K_largetheta", self.k_largetheta, "large theta lemma: [2/3 C_Rtheta_theta + 2/3 C_Rtheta_w R_w/R_theta]^(1/(alpha - beta))");
        put("C_Ra", self.c_ra, "R_n w bound: C_Dn_theta max(|W1 W2^-1|, 1)");
        put("C_Rb", self.c_rb, "R_n w bound: |W1 W2^-1|(1 + (2 e^(q1/2)/q1) C_T C_Dn_theta)");
        put("C_Rc(n0)", self.c_rc(n0, dev), "R_n w bound: beta_n0 |theta_n0 - theta*| + C_Ra e^q1 (2/q_min)[...], deviations (R_theta, R_w), n0 = N_thm2");
        put("A1(n0)", self.a1(n0, dev), "w-rate ladder: A1 = e + e[C_Dn_w |Gamma2| C_Rc + C_Dn_w |w_n0 - w*|]/eps_w(n0) + e^2 C_Dn_w |Gamma2| C_Int, n0 = N_thm2");
        put("A2", self.a2, "w-rate ladder: A2 = e^(q1 + 2(alpha - beta)) C_Dn_w |Gamma2| C_Rb 2 e^(q2/2)/q2");
        put("A3", self.a3, "w-rate ladder: A3 = C_R^w R_w");
        put("A4(n0)", self.a4(n0, dev), "w-rate ladder: A4 = A1 sum_{i<l*} A2^i sqrt(d^3 L_w C_anbn_w) + A3 A2^l*, n0 = N_thm2");
        put("A5(n0)", self.a5(n0, dev), "theta rate: A5 = 2[C_Ra(C_R^theta R_theta + C_R^w R_w)/eps_theta(n0-1) + 1] sqrt(4 d^3 L_theta C_anbn_theta) + 2 C_Rb A4, n0 = N_thm2");
        put("A1_pp", self.a1_pp, "n0-free ladder constant: A1'' = C_Dn_w |Gamma2| C_Int");
        put("A4C1", self.a4c1, "n0-free ladder constant A_{4,C1}");
        put("A5C1", self.a5c1, "n0-free ladder constant A_{5,C1} = C_Ra(C_R^theta R_theta + C_R^w R_w)");
        put("A4C0", self.a4c0, "n0-free ladder constant A_{4,C0}");
        put("A5C0", self.a5c0, "n0-free ladder constant A_{5,C0} = sqrt(4 d^3 L_theta C_anbn_theta)");
        put("A4_prime", self.a4_prime, "A4' = A_{4,C1} + 1");
        put("A5_prime", self.a5_prime, "A5' = 4 + 2 A_{5,C1} + 2 C_Rb A_{4,C1}");
        put("K_A4A5_a", self.k_a4a5_a, "threshold making A_{4,C0} nu(n; beta) <= 1");
        put("K_A4A5_b", self.k_a4a5_b, "threshold making min(C_Rb A_{4,C0}, A_{5,C0}) nu(n; alpha) <= 1");
        out.push(LedgerEntry::from_ln("K_proj_w", self.ln_k_proj_w, "sparse projection threshold [(A4'/R_w)^(2/beta)]^((A4'/R_w)^(2/beta))"));
        out.push(LedgerEntry::from_ln("K_proj_theta", self.ln_k_proj_theta, "sparse projection threshold [(A5'/R_theta)^(2/alpha)]^((A5'/R_theta)^(2/alpha))"));
        let mut put = |name: &str, value: f64, source: &str| out.push(LedgerEntry::plain(name, value, source));
        put("ell_star", self.ell_star as f64, "l* = ceil(beta/(2(alpha - beta)))");
        put("K_u_monotone", self.k_u_monotone, "u_n(l) is decreasing from e^(1/beta)/B2 on, B2 = (4 d^2/delta)^(1/p)");
        put("N_thm3", self.n_thm3, "lower bound on n0 for the good-event probability bound");
        put("N_thm4", self.n_thm4, "lower bound on n0 for the w-rate bound");
        put("N_thm2", self.n_thm2, "max(N_thm3, N_thm4)");
        out.push(LedgerEntry::from_ln("N_prime", self.ln_n_prime, "N' = max(N_thm2, K_A4A5_a, K_A4A5_b, K_proj_w, K_proj_theta, e^(1/beta), (2/beta)^(2/beta))"));
        out.push(match self.n_final {
            FinalIndex::Exact(n) => LedgerEntry::plain("N_final", n as f64, "first sparse-projection index k^k - 1 >= N'"),
            FinalIndex::Huge { ln_value, .. } => LedgerEntry::from_ln("N_final", ln_value, "first sparse-projection index k^k - 1 >= N'"),
        });
        out.push(LedgerEntry::from_ln("C_final_theta", self.ln_c_final_theta, "C_final_theta = A5'/nu(N_final; alpha)"));
        out.push(LedgerEntry::from_ln("C_final_w", self.ln_c_final_w, "C_final_w = A4'/nu(N_final; beta)"));
        out
    }

    /// JSON document `{ "values": {name: value|null}, "entries": [...] }`.
    pub fn to_json(&self) -> serde_json::Value {
        let entries = self.entries();
        let values: serde_json::Map<String, serde_json::Value> = entries
            .iter()
            .map(|e| (e.name.clone(), e.value.map_or(serde_json::Value::Null, serde_json::Value::from)))
            .collect();
        serde_json::json!({
            "alpha": self.schedule().alpha(),
            "beta": self.schedule().beta(),
            "config": self.cfg,
            "values": values,
            "entries": entries,
        })
    }
}

/// One named constant of the JSON report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LedgerEntry {
    pub name: String,
    /// Plain value, absent when only the logarithm is representable.
    pub value: Option<f64>,
    pub log10_value: Option<f64>,
    /// True when `value` is absent and `log10_value` carries the magnitude.
    pub log_space: bool,
    pub paper_source: String,
    pub reconstructed: bool,
}

impl LedgerEntry {
    fn plain(name: &str, value: f64, source: &str) -> Self {
        LedgerEntry {
            name: name.to_string(),
            value: value.is_finite().then_some(value),
            log10_value: (value > 0.0 && value.is_finite()).then(|| value.log10()),
            log_space: false,
            paper_source: source.to_string(),
            reconstructed: false,
        }
    }

    fn from_ln(name: &str, ln_value: f64, source: &str) -> Self {
        let plain = ln_value < PLAIN_LIMIT.ln();
        LedgerEntry {
            name: name.to_string(),
            value: plain.then(|| ln_value.exp()),
            log10_value: ln_value.is_finite().then(|| ln_value / std::f64::consts::LN_10),
            log_space: !plain,
            paper_source: source.to_string(),
            reconstructed: false,
        }
    }

    fn reconstructed(mut self) -> Self {
        self.reconstructed = true;
        self
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_below_is_exact() {
        let k = first_step_below(0.1, 0.5);
        assert_eq!(k, 99.0);
        assert_eq!(first_step_below(1.5, 0.5), 0.0);
    }

    #[test]
    fn final_index_small_and_huge() {
        assert_eq!(final_index(10f64.ln()), FinalIndex::Exact(26));
        assert_eq!(final_index(26f64.ln()), FinalIndex::Exact(26));
        assert_eq!(final_index(0.0), FinalIndex::Exact(3));
        match final_index(1000.0) {
            FinalIndex::Huge { k, ln_value } => {
                assert!(ln_value >= 1000.0);
                assert!((k - 1.0) * (k - 1.0).ln() < 1000.0);
                assert_eq!(k, k.floor());
            }
            other => panic!("unexpected {other:?}"),
        }
        match final_index(1e300) {
            FinalIndex::Huge { k, ln_value } => assert!(ln_value >= 1e300 && k.is_finite()),
            other => panic!("unexpected {other:?}"),
        }
    }
}

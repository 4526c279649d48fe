//! Shared helpers for the integration tests: seeded systems and the pointwise
//! checks of the ledger's lemma bounds.

#![allow(dead_code)]

use nalgebra::DMatrix;
use ttsa_core::gtd::{build_gtd, random_mdp, GtdInstance, GtdVariant};
use ttsa_core::ledger::{an_bn_sequences, build_ledger, moderate_at, ConstantsLedger, LedgerConfig, Moderateness};
use ttsa_core::{derive_system, DerivedSystem, StepSchedule};

/// Relative slack for rounding in the pointwise comparisons.
pub const SLACK: f64 = 1e-12;

/// Points checked beyond a threshold that lies past `n_max`.
pub const TAIL_POINTS: u64 = 10_000;

pub fn schedule(alpha: f64, beta: f64) -> StepSchedule {
    StepSchedule::new(alpha, beta).unwrap()
}

/// GTD instance on the seeded random MDP with S states and d features.
pub fn gtd_instance(variant: GtdVariant, states: usize, dim: usize, seed: u64) -> GtdInstance {
    build_gtd(variant, &random_mdp(states, dim, seed, true).unwrap()).unwrap()
}

pub fn gtd_system(inst: &GtdInstance) -> DerivedSystem {
    derive_system(&inst.spec).unwrap()
}

pub fn gtd_ledger(inst: &GtdInstance, sch: StepSchedule) -> ConstantsLedger {
    let sys = gtd_system(inst);
    let cfg = LedgerConfig::defaults(&sys, sch, inst.m1, inst.m2);
    build_ledger(&sys, &cfg).unwrap()
}

/// Ten seeded GTD systems (S = 5, d = 2) cycling through the variants, with
/// their ledgers. MDP seeds count up from 85; a seed whose a_n scan exceeds
/// the cap (a nearly singular X₁) is skipped.
pub fn ten_systems(sch: StepSchedule) -> Vec<(GtdInstance, ConstantsLedger)> {
    let mut out = Vec::new();
    let mut seed = 85;
    while out.len() < 10 {
        let inst = gtd_instance(GtdVariant::ALL[out.len() % 3], 5, 2, seed);
        let sys = gtd_system(&inst);
        match build_ledger(&sys, &LedgerConfig::defaults(&sys, sch, inst.m1, inst.m2)) {
            Ok(l) => out.push((inst, l)),
            Err(ttsa_core::Error::CapExceeded { .. }) => {}
            Err(e) => panic!("seed {seed}: {e}"),
        }
        seed += 1;
    }
    out
}

/// Largest index where n and n + 1 are distinct doubles (with margin).
pub const RESOLVABLE: f64 = 4.0e15;

/// Indices to check for a bound that should hold from threshold `k` on:
/// every integer in [k, n_max], or `TAIL_POINTS` consecutive integers from k
/// when k is beyond n_max. Past integer resolution the points are spread
/// geometrically over [k, 10⁶k] instead.
pub fn window(k: f64, n_max: u64) -> Box<dyn Iterator<Item = f64>> {
    let start = k.max(0.0).ceil();
    if start >= RESOLVABLE {
        return Box::new((0..=TAIL_POINTS).map(move |i| start * 1e6f64.powf(i as f64 / TAIL_POINTS as f64)));
    }
    let end = if start <= n_max as f64 { n_max as f64 } else { start + TAIL_POINTS as f64 };
    Box::new((0..=(end - start) as u64).map(move |i| start + i as f64))
}

/// Like [`window`], restricted to indices whose successor is representable,
/// for checks that compare consecutive terms.
pub fn pair_window(k: f64, n_max: u64) -> impl Iterator<Item = f64> {
    window(k, n_max).filter(|&n| n + 1.0 > n)
}

#[derive(Debug)]
pub struct Check {
    pub name: &'static str,
    pub ok: bool,
    pub detail: String,
}

fn check(name: &'static str, first_failure: Option<String>) -> Check {
    Check { name, ok: first_failure.is_none(), detail: first_failure.unwrap_or_default() }
}

fn le(x: f64, bound: f64) -> bool {
    x <= bound + SLACK * bound.abs()
}

fn spectral(m: &DMatrix<f64>) -> f64 {
    m.singular_values().max()
}

/// max over i ≤ n ≤ n_max of Σ_{k=i}^{n} [ln‖I − γ_k M‖ + q γ_k].
fn worst_log_product(m: &DMatrix<f64>, q: f64, step: impl Fn(u64) -> f64, n_max: u64) -> f64 {
    let id = DMatrix::identity(m.nrows(), m.ncols());
    let (mut run, mut lowest, mut worst) = (0.0f64, 0.0f64, f64::NEG_INFINITY);
    for k in 0..=n_max {
        let g = step(k);
        run += spectral(&(&id - m * g)).ln() + q * g;
        worst = worst.max(run - lowest);
        lowest = lowest.min(run);
    }
    worst
}

/// Every lemma-level bound of the ledger, checked pointwise on [threshold, n_max].
pub fn lemma_checks(l: &ConstantsLedger, n_max: u64) -> Vec<Check> {
    let sch = l.schedule();
    let (alpha, beta) = (sch.alpha(), sch.beta());
    let x1 = &l.system.x1;
    let w2 = &l.system.spec.w2;
    let mut out = Vec::new();

    let (a, b) = an_bn_sequences(n_max as usize, l.q1, l.q2, &sch);
    out.push(check(
        "a_n bound",
        (1..=n_max as usize)
            .find(|&n| !le(a[n], l.c_anbn_theta * (n as f64).powf(-alpha)))
            .map(|n| format!("n={n}: a_n={}", a[n])),
    ));
    out.push(check(
        "b_n bound",
        (1..=n_max as usize)
            .find(|&n| !le(b[n], l.c_anbn_w * (n as f64).powf(-beta)))
            .map(|n| format!("n={n}: b_n={}", b[n])),
    ));

    let worst = worst_log_product(x1, l.q1, |k| sch.stepsizes(k).0, n_max);
    out.push(check(
        "product bound theta",
        (!le(worst, l.c_dn_theta.ln())).then(|| format!("log excess {worst} > ln C {}", l.c_dn_theta.ln())),
    ));
    let worst = worst_log_product(w2, l.q2, |k| sch.stepsizes(k).1, n_max);
    out.push(check(
        "product bound w",
        (!le(worst, l.c_dn_w.ln())).then(|| format!("log excess {worst} > ln C {}", l.c_dn_w.ln())),
    ));

    let id = DMatrix::identity(x1.nrows(), x1.ncols());
    out.push(check(
        "small step contraction theta",
        window(l.k_smalleig_alpha, n_max)
            .find(|&n| !le(spectral(&(&id - x1 * sch.alpha_at(n))), 1.0))
            .map(|n| format!("n={n}")),
    ));
    out.push(check(
        "small step contraction w",
        window(l.k_smalleig_beta, n_max)
            .find(|&n| !le(spectral(&(&id - w2 * sch.beta_at(n))), 1.0))
            .map(|n| format!("n={n}")),
    ));

    out.push(check(
        "eps domination",
        window(l.k_epsdom_a, n_max).find(|&n| !le(l.eps_theta(n), l.eps_w(n))).map(|n| format!("n={n}")),
    ));
    out.push(check("eps domination of exponential factors", exp_domination(l, n_max)));

    out.push(check(
        "eps_theta below R/2",
        window(l.k_consteps_alpha, n_max)
            .find(|&n| !le(l.eps_theta(n), l.cfg.r_theta / 2.0))
            .map(|n| format!("n={n}")),
    ));
    out.push(check(
        "eps_w below R/2",
        window(l.k_consteps_beta, n_max).find(|&n| !le(l.eps_w(n), l.cfg.r_w / 2.0)).map(|n| format!("n={n}")),
    ));

    let n0 = l.n_thm2;
    let u = |n: f64, ell: u32| l.u_ladder(n, ell, n0);
    let ells = 0..=l.ell_star;
    out.push(check(
        "u ladder monotone",
        ells.clone().find_map(|ell| {
            pair_window(l.k_u_monotone, n_max).find(|&n| !le(u(n + 1.0, ell), u(n, ell))).map(|n| format!("ell={ell} n={n}"))
        }),
    ));
    out.push(check(
        "u ladder alpha-moderate",
        ells.clone().find_map(|ell| {
            pair_window(l.k_alpha_half_beta, n_max)
                .find(|&k| !moderate_at(u(k, ell), u(k + 1.0, ell), k, Moderateness::Alpha, l.q1, l.q2, &sch))
                .map(|k| format!("ell={ell} k={k}"))
        }),
    ));
    out.push(check(
        "u ladder beta-moderate",
        ells.clone().find_map(|ell| {
            pair_window(l.k_beta_half_beta, n_max)
                .find(|&k| !moderate_at(u(k, ell), u(k + 1.0, ell), k, Moderateness::Beta, l.q1, l.q2, &sch))
                .map(|k| format!("ell={ell} k={k}"))
        }),
    ));
    let a4 = l.a4(n0, l.default_deviations());
    out.push(check(
        "u ladder closure",
        window(n0, n_max).find(|&n| !le(u(n, l.ell_star), a4 * l.nu(n, beta))).map(|n| format!("n={n}")),
    ));
    out
}

/// e^{−q₂Σ_{j=n0}^{n}β_j} ≤ e^{−q_min Σ_{j=n0+1}^{n}α_j} ≤ min(ε^θ_n/ε^θ_{n0}, ε^w_n/ε^w_{n0})
/// for a few n0 ≥ K_epsdom_b and n0 ≤ n.
fn exp_domination(l: &ConstantsLedger, n_max: u64) -> Option<String> {
    let sch = l.schedule();
    let k = l.k_epsdom_b.max(0.0).ceil();
    for n0 in [k, 2.0 * k + 1.0, 10.0 * k + 7.0] {
        let end = if n0 < n_max as f64 { n_max as f64 } else { n0 + TAIL_POINTS as f64 };
        assert!(end < RESOLVABLE, "K_epsdom_b = {k} beyond integer resolution");
        let (mut sum_b, mut sum_a) = (sch.beta_at(n0), 0.0);
        let (et0, ew0) = (l.eps_theta(n0), l.eps_w(n0));
        let mut n = n0;
        while n <= end {
            let lhs = (-l.q2 * sum_b).exp();
            let mid = (-l.q_min * sum_a).exp();
            let rhs = (l.eps_theta(n) / et0).min(l.eps_w(n) / ew0);
            if !le(lhs, mid) || !le(mid, rhs) {
                return Some(format!("n0={n0} n={n}: {lhs} {mid} {rhs}"));
            }
            n += 1.0;
            sum_b += sch.beta_at(n);
            sum_a += sch.alpha_at(n);
        }
    }
    None
}

//! Checks run on trajectories: the error decomposition, rate fits across
//! seeds, the projected/unprojected coupling and the scaled-error lower bound.

use std::io::Write;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::noise::NoiseModel;
use crate::sa::{derive_system, lockstep, run_with_system, DerivedSystem, MatrixSpec, ProjectionConfig, RunOptions, StepSchedule, Trajectory};

/// Components of θ_{n+1} − θ* = Δ⁽θ⁾ + L⁽θ⁾ + R⁽θ⁾ and w_{n+1} − w* = Δ⁽ʷ⁾ + L⁽ʷ⁾ + R⁽ʷ⁾.
///
/// Entry `i` of each sequence belongs to index `n0 + i`. `t_term[i]` is T at
/// that index; T starts at n0 + 1 and is stored as zero before.
#[derive(Debug, Clone, PartialEq)]
pub struct Decomposition {
    pub n0: u64,
    pub delta_theta: Vec<DVector<f64>>,
    pub l_theta: Vec<DVector<f64>>,
    pub r_theta_term: Vec<DVector<f64>>,
    pub t_term: Vec<DVector<f64>>,
    pub delta_w: Vec<DVector<f64>>,
    pub l_w: Vec<DVector<f64>>,
    pub r_w_term: Vec<DVector<f64>>,
    pub residual_theta: f64,
    pub residual_w: f64,
    /// Largest violation of the telescoped form of R⁽θ⁾.
    pub residual_telescoping: f64,
    pub max_iterate_norm: f64,
}

/// Forward recursions, for n ≥ n0 and with P_n = I − α_nX₁, Q_n = I − β_nW₂:
///
/// ```text
/// Δ⁽θ⁾_{n+1} = P_nΔ⁽θ⁾_n                         Δ⁽θ⁾_{n0} = θ_{n0} − θ*
/// L⁽θ⁾_{n+1} = P_nL⁽θ⁾_n + α_n(M⁽¹⁾ − W₁W₂⁻¹M⁽²⁾)
/// R⁽θ⁾_{n+1} = P_nR⁽θ⁾_n + (α_n/β_n)W₁W₂⁻¹(w_{n+1} − w_n)
/// Δ⁽ʷ⁾_{n+1} = Q_nΔ⁽ʷ⁾_n                         Δ⁽ʷ⁾_{n0} = w_{n0} − w*
/// L⁽ʷ⁾_{n+1} = Q_nL⁽ʷ⁾_n + β_nM⁽²⁾
/// R⁽ʷ⁾_{n+1} = Q_nR⁽ʷ⁾_n − β_nΓ₂(θ_n − θ*)
/// T_{n+1}    = P_nT_n + [α_n/β_n − (α_{n−1}/β_{n−1})P_n]W₁W₂⁻¹(w_n − w*),  T_{n0+1} = 0
/// ```
///
/// and the telescoped identity
/// R⁽θ⁾_{n+1} = (α_n/β_n)W₁W₂⁻¹(w_{n+1} − w*) − Π_{j=n0+1}^{n}P_j (α_{n0}/β_{n0})W₁W₂⁻¹(w_{n0} − w*) − T_{n+1}.
pub fn decompose(traj: &Trajectory, system: &DerivedSystem, n0: u64) -> Result<Decomposition> {
    let horizon = traj.diverged_at.map_or(traj.horizon, |k| k.saturating_sub(1));
    if n0 > horizon {
        return Err(Error::InvalidInput(format!("n0 = {n0} lies beyond the recorded horizon {horizon}")));
    }
    let noise = traj.noise.as_ref().ok_or(Error::MissingNoise { from: n0 })?;
    if (noise.len() as u64) < horizon {
        return Err(Error::MissingNoise { from: noise.len() as u64 });
    }
    if let Some(ev) = traj.projections_applied.iter().find(|e| e.n > n0 && e.n <= horizon) {
        return Err(Error::ProjectedStretch { index: ev.n });
    }
    let state = |n: u64| {
        traj.state_at(n)
            .ok_or_else(|| Error::InvalidInput(format!("trajectory has no recorded state at index {n}")))
    };

    let d = system.dim();
    let spec = &system.spec;
    let sch = traj.schedule;
    let coupling = system.w1_w2inv();
    let eye = DMatrix::<f64>::identity(d, d);
    let (ts, ws) = (&system.theta_star, &system.w_star);

    let start = state(n0)?;
    let len = (horizon - n0 + 1) as usize;
    let mut out = Decomposition {
        n0,
        delta_theta: Vec::with_capacity(len),
        l_theta: Vec::with_capacity(len),
        r_theta_term: Vec::with_capacity(len),
        t_term: Vec::with_capacity(len),
        delta_w: Vec::with_capacity(len),
        l_w: Vec::with_capacity(len),
        r_w_term: Vec::with_capacity(len),
        residual_theta: 0.0,
        residual_w: 0.0,
        residual_telescoping: 0.0,
        max_iterate_norm: start.theta.norm().max(start.w.norm()),
    };
    let zero = DVector::zeros(d);
    let mut dt = &start.theta - ts;
    let mut lt = zero.clone();
    let mut rt = zero.clone();
    let mut t = zero.clone();
    let mut dw = &start.w - ws;
    let mut lw = zero.clone();
    let mut rw = zero.clone();
    let ratio = |n: u64| {
        let (a, b) = sch.stepsizes(n);
        a / b
    };
    let anchor = ratio(n0) * (&coupling * (&start.w - ws));
    let mut carried = anchor.clone();

    let push = |out: &mut Decomposition, parts: [&DVector<f64>; 7]| {
        out.delta_theta.push(parts[0].clone());
        out.l_theta.push(parts[1].clone());
        out.r_theta_term.push(parts[2].clone());
        out.t_term.push(parts[3].clone());
        out.delta_w.push(parts[4].clone());
        out.l_w.push(parts[5].clone());
        out.r_w_term.push(parts[6].clone());
    };
    push(&mut out, [&dt, &lt, &rt, &t, &dw, &lw, &rw]);

    let mut cur = start;
    for n in n0..horizon {
        let next = state(n + 1)?;
        let (a, b) = sch.stepsizes(n);
        let p = &eye - &system.x1 * a;
        let q = &eye - &spec.w2 * b;
        let rec = &noise[n as usize];

        if n > n0 {
            // T_{n+1} from T_n; the bracket uses the ratio at n − 1.
            let v = &coupling * (&cur.w - ws);
            t = &p * &t + &v * ratio(n) - &p * &v * ratio(n - 1);
            carried = &p * &carried;
        }
        dt = &p * &dt;
        lt = &p * &lt + (&rec.m1 - &coupling * &rec.m2) * a;
        rt = &p * &rt + (&coupling * (&next.w - &cur.w)) * (a / b);
        dw = &q * &dw;
        lw = &q * &lw + &rec.m2 * b;
        rw = &q * &rw - (&spec.gamma2 * (&cur.theta - ts)) * b;

        let err_t = (&next.theta - ts) - (&dt + &lt + &rt);
        let err_w = (&next.w - ws) - (&dw + &lw + &rw);
        let tele = &rt - ((&coupling * (&next.w - ws)) * ratio(n) - &carried - &t);
        out.residual_theta = out.residual_theta.max(err_t.amax());
        out.residual_w = out.residual_w.max(err_w.amax());
        out.residual_telescoping = out.residual_telescoping.max(tele.amax());
        out.max_iterate_norm = out.max_iterate_norm.max(next.theta.norm()).max(next.w.norm());
        push(&mut out, [&dt, &lt, &rt, &t, &dw, &lw, &rw]);
        cur = next;
    }
    Ok(out)
}

/// Checkpoint errors of several runs of one configuration.
#[derive(Debug, Clone, PartialEq)]
pub struct ErrorPanel {
    pub schedule: StepSchedule,
    pub checkpoints: Vec<u64>,
    /// Seeds of the runs kept, in order.
    pub seeds: Vec<u64>,
    /// `theta[s][i]` = ‖θ_n − θ*‖ of run s at checkpoint i.
    pub theta: Vec<Vec<f64>>,
    pub w: Vec<Vec<f64>>,
    /// Seeds whose run produced a non-finite iterate; excluded above.
    pub diverged: Vec<u64>,
}

impl ErrorPanel {
    /// Runs must share schedule and checkpoints. Diverged runs are set aside.
    pub fn from_trajectories(trajs: &[Trajectory]) -> Result<Self> {
        let first = trajs.first().ok_or_else(|| Error::InvalidInput("no trajectories".into()))?;
        let mut panel = ErrorPanel {
            schedule: first.schedule,
            checkpoints: first.checkpoints.clone(),
            seeds: Vec::new(),
            theta: Vec::new(),
            w: Vec::new(),
            diverged: Vec::new(),
        };
        for t in trajs {
            if t.checkpoints != panel.checkpoints || t.schedule != panel.schedule {
                return Err(Error::InvalidInput("trajectories disagree on checkpoints or schedule".into()));
            }
            if t.diverged() {
                panel.diverged.push(t.seed);
            } else {
                panel.seeds.push(t.seed);
                panel.theta.push(t.errors_theta.clone());
                panel.w.push(t.errors_w.clone());
            }
        }
        Ok(panel)
    }

    pub fn divergent_fraction(&self) -> f64 {
        let total = self.seeds.len() + self.diverged.len();
        if total == 0 {
            0.0
        } else {
            self.diverged.len() as f64 / total as f64
        }
    }

    fn column(rows: &[Vec<f64>], i: usize) -> Vec<f64> {
        rows.iter().map(|r| r[i]).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RateReport {
    pub slope_theta: f64,
    pub slope_w: f64,
    pub stderr_theta: f64,
    pub stderr_w: f64,
    pub window: (u64, u64),
    pub num_seeds: usize,
    /// (−α/2, −β/2).
    pub predicted: (f64, f64),
    pub points_used: usize,
    pub divergent_fraction: f64,
}

/// Ordinary least squares of y on x: (slope, standard error of the slope).
pub fn ols_slope(x: &[f64], y: &[f64]) -> (f64, f64) {
    let m = x.len() as f64;
    let mx = x.iter().sum::<f64>() / m;
    let my = y.iter().sum::<f64>() / m;
    let sxx: f64 = x.iter().map(|xi| (xi - mx).powi(2)).sum();
    let sxy: f64 = x.iter().zip(y).map(|(xi, yi)| (xi - mx) * (yi - my)).sum();
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let ssr: f64 = x.iter().zip(y).map(|(xi, yi)| (yi - intercept - slope * xi).powi(2)).sum();
    let stderr = if x.len() > 2 { (ssr / (m - 2.0) / sxx).sqrt() } else { 0.0 };
    (slope, stderr)
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

pub fn median(v: &[f64]) -> f64 {
    if v.is_empty() {
        return f64::NAN;
    }
    let mut s = v.to_vec();
    s.sort_by(f64::total_cmp);
    let m = s.len() / 2;
    if s.len() % 2 == 1 {
        s[m]
    } else {
        0.5 * (s[m - 1] + s[m])
    }
}

/// Slope of log(mean error over seeds) against log(n+1) on the checkpoints
/// inside `window` (inclusive).
pub fn fit_rate(panel: &ErrorPanel, window: (u64, u64)) -> Result<RateReport> {
    let (lo, hi) = window;
    let degenerate = Error::DegenerateWindow { lo, hi };
    if lo >= hi || panel.seeds.is_empty() {
        return Err(degenerate);
    }
    let mut x = Vec::new();
    let mut yt = Vec::new();
    let mut yw = Vec::new();
    for (i, &n) in panel.checkpoints.iter().enumerate() {
        if n < lo || n > hi {
            continue;
        }
        let (mt, mw) = (mean(&ErrorPanel::column(&panel.theta, i)), mean(&ErrorPanel::column(&panel.w, i)));
        if mt > 0.0 && mw > 0.0 && mt.is_finite() && mw.is_finite() {
            x.push(((n + 1) as f64).ln());
            yt.push(mt.ln());
            yw.push(mw.ln());
        }
    }
    if x.len() < 2 {
        return Err(degenerate);
    }
    let (slope_theta, stderr_theta) = ols_slope(&x, &yt);
    let (slope_w, stderr_w) = ols_slope(&x, &yw);
    Ok(RateReport {
        slope_theta,
        slope_w,
        stderr_theta,
        stderr_w,
        window,
        num_seeds: panel.seeds.len(),
        predicted: (-panel.schedule.alpha() / 2.0, -panel.schedule.beta() / 2.0),
        points_used: x.len(),
        divergent_fraction: panel.divergent_fraction(),
    })
}

/// One checkpoint of the summary table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub n: u64,
    pub mean_err_theta: f64,
    pub mean_err_w: f64,
    /// Median over seeds of (n+1)^{α/2}‖θ_n − θ*‖.
    pub median_scaled_theta: f64,
    /// Median over seeds of (n+1)^{β/2}‖w_n − w*‖.
    pub median_scaled_w: f64,
    /// Fraction of seeds with (n+1)^{α/2}‖θ_n − θ*‖ < c.
    pub frac_below_c_theta: f64,
    pub frac_below_c_w: f64,
}

pub fn summarize(panel: &ErrorPanel, c: f64) -> Vec<SummaryRow> {
    let (a, b) = (panel.schedule.alpha(), panel.schedule.beta());
    let runs = panel.seeds.len() as f64;
    panel
        .checkpoints
        .iter()
        .enumerate()
        .map(|(i, &n)| {
            let m = (n + 1) as f64;
            let st: Vec<f64> = ErrorPanel::column(&panel.theta, i).iter().map(|e| m.powf(a / 2.0) * e).collect();
            let sw: Vec<f64> = ErrorPanel::column(&panel.w, i).iter().map(|e| m.powf(b / 2.0) * e).collect();
            SummaryRow {
                n,
                mean_err_theta: mean(&ErrorPanel::column(&panel.theta, i)),
                mean_err_w: mean(&ErrorPanel::column(&panel.w, i)),
                median_scaled_theta: median(&st),
                median_scaled_w: median(&sw),
                frac_below_c_theta: st.iter().filter(|&&s| s < c).count() as f64 / runs,
                frac_below_c_w: sw.iter().filter(|&&s| s < c).count() as f64 / runs,
            }
        })
        .collect()
}

pub const SUMMARY_COLUMNS: [&str; 7] = [
    "n",
    "mean_err_theta",
    "mean_err_w",
    "median_scaled_theta",
    "median_scaled_w",
    "frac_below_c_theta",
    "frac_below_c_w",
];

/// 17 significant digits.
pub fn fmt_real(x: f64) -> String {
    format!("{x:.16e}")
}

pub fn write_summary_csv<W: Write>(rows: &[SummaryRow], out: W) -> std::result::Result<(), csv::Error> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(SUMMARY_COLUMNS)?;
    for r in rows {
        w.write_record([
            r.n.to_string(),
            fmt_real(r.mean_err_theta),
            fmt_real(r.mean_err_w),
            fmt_real(r.median_scaled_theta),
            fmt_real(r.median_scaled_w),
            fmt_real(r.frac_below_c_theta),
            fmt_real(r.frac_below_c_w),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Runs one trajectory per seed (in parallel) and returns them in seed order.
pub fn monte_carlo(
    system: &DerivedSystem,
    schedule: &StepSchedule,
    proj: &ProjectionConfig,
    noise: &dyn NoiseModel,
    seeds: &[u64],
    template: &RunOptions,
) -> Result<Vec<Trajectory>> {
    seeds
        .par_iter()
        .map(|&seed| run_with_system(system, schedule, proj, noise, &RunOptions { seed, ..template.clone() }))
        .collect()
}

/// Scaled-error table over at least 30 seeds.
pub fn lower_bound_mc(
    system: &DerivedSystem,
    noise: &dyn NoiseModel,
    schedule: &StepSchedule,
    proj: &ProjectionConfig,
    seeds: &[u64],
    template: &RunOptions,
    c: f64,
) -> Result<Vec<SummaryRow>> {
    if seeds.len() < 30 {
        return Err(Error::InvalidInput(format!("the lower-bound check needs at least 30 seeds, got {}", seeds.len())));
    }
    if !(c >= 0.0) {
        return Err(Error::InvalidInput("c must be non-negative".into()));
    }
    let trajs = monte_carlo(system, schedule, proj, noise, seeds, template)?;
    Ok(summarize(&ErrorPanel::from_trajectories(&trajs)?, c))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CouplingReport {
    /// First index at which the projected and unprojected states differ.
    pub first_divergence: Option<u64>,
    /// Last index at which a projection changed an iterate.
    pub last_effective_projection: Option<u64>,
    pub unprojected_diverged_at: Option<u64>,
}

impl CouplingReport {
    pub fn identical(&self) -> bool {
        self.first_divergence.is_none()
    }
}

pub fn coupling_check(
    spec: &MatrixSpec,
    schedule: &StepSchedule,
    proj: &ProjectionConfig,
    noise: &dyn NoiseModel,
    horizon: u64,
    seed: u64,
) -> Result<CouplingReport> {
    coupling_check_from(&derive_system(spec)?, schedule, proj, noise, horizon, seed, None)
}

/// [`coupling_check`] from a given start (zero when `None`).
pub fn coupling_check_from(
    system: &DerivedSystem,
    schedule: &StepSchedule,
    proj: &ProjectionConfig,
    noise: &dyn NoiseModel,
    horizon: u64,
    seed: u64,
    start: Option<(&DVector<f64>, &DVector<f64>)>,
) -> Result<CouplingReport> {
    let c = lockstep(system, schedule, proj, noise, horizon, seed, start)?;
    Ok(CouplingReport {
        first_divergence: c.first_divergence,
        last_effective_projection: c.last_effective_projection,
        unprojected_diverged_at: c.unprojected_diverged_at,
    })
}

/// `count` checkpoints spread log-uniformly over [lo, hi], deduplicated.
pub fn log_uniform_checkpoints(lo: u64, hi: u64, count: usize) -> Vec<u64> {
    if count == 0 || hi < lo {
        return Vec::new();
    }
    if count == 1 || lo == hi {
        return vec![hi];
    }
    let (l, h) = ((lo.max(1)) as f64, hi as f64);
    let mut out: Vec<u64> = (0..count)
        .map(|i| {
            let t = i as f64 / (count - 1) as f64;
            ((l.ln() + t * (h.ln() - l.ln())).exp().round() as u64).clamp(lo, hi)
        })
        .collect();
    out.dedup();
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn median_even_and_odd() {
        assert_eq!(median(&[3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(&[4.0, 1.0, 2.0, 3.0]), 2.5);
    }

    #[test]
    fn checkpoints_span_the_range() {
        let c = log_uniform_checkpoints(100, 1_000_000, 40);
        assert_eq!(c.len(), 40);
        assert_eq!(c[0], 100);
        assert_eq!(*c.last().unwrap(), 1_000_000);
        assert!(c.windows(2).all(|w| w[0] < w[1]));
    }

    #[test]
    fn real_format_has_17_digits() {
        assert_eq!(fmt_real(0.1), "1.0000000000000001e-1");
    }
}

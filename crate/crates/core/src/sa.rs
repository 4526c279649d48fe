//! The linear two-timescale iteration
//!
//! ```text
//! θ_{n+1} = Π_{n+1,Rθ}(θ_n + α_n [v₁ − Γ₁θ_n − W₁w_n + M⁽¹⁾_{n+1}])
//! w_{n+1} = Π_{n+1,Rw}(w_n + β_n [v₂ − Γ₂θ_n − W₂w_n + M⁽²⁾_{n+1}])
//! ```
//!
//! with α_n = (n+1)^{-α}, β_n = (n+1)^{-β} and the sparse projection Π that
//! only acts at indices of the form k^k − 1.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{self, inverse_condition, lambda_min_sym};
use crate::noise::{NoiseModel, NoiseRecord};

/// Below this inverse condition number a matrix is treated as singular.
const SINGULAR_RCOND: f64 = 1e-13;

/// The six-tuple (Γ₁, W₁, v₁, Γ₂, W₂, v₂).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawMatrixSpec", into = "RawMatrixSpec")]
pub struct MatrixSpec {
    pub gamma1: DMatrix<f64>,
    pub w1: DMatrix<f64>,
    pub v1: DVector<f64>,
    pub gamma2: DMatrix<f64>,
    pub w2: DMatrix<f64>,
    pub v2: DVector<f64>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawMatrixSpec {
    gamma1: Vec<Vec<f64>>,
    w1: Vec<Vec<f64>>,
    v1: Vec<f64>,
    gamma2: Vec<Vec<f64>>,
    w2: Vec<Vec<f64>>,
    v2: Vec<f64>,
}

impl TryFrom<RawMatrixSpec> for MatrixSpec {
    type Error = String;

    fn try_from(raw: RawMatrixSpec) -> std::result::Result<Self, String> {
        MatrixSpec::new(
            linalg::matrix_from_rows(&raw.gamma1, "gamma1")?,
            linalg::matrix_from_rows(&raw.w1, "w1")?,
            linalg::vector_from_slice(&raw.v1, "v1")?,
            linalg::matrix_from_rows(&raw.gamma2, "gamma2")?,
            linalg::matrix_from_rows(&raw.w2, "w2")?,
            linalg::vector_from_slice(&raw.v2, "v2")?,
        )
        .map_err(|e| e.to_string())
    }
}

impl From<MatrixSpec> for RawMatrixSpec {
    fn from(s: MatrixSpec) -> Self {
        RawMatrixSpec {
            gamma1: linalg::matrix_to_rows(&s.gamma1),
            w1: linalg::matrix_to_rows(&s.w1),
            v1: s.v1.iter().copied().collect(),
            gamma2: linalg::matrix_to_rows(&s.gamma2),
            w2: linalg::matrix_to_rows(&s.w2),
            v2: s.v2.iter().copied().collect(),
        }
    }
}

impl MatrixSpec {
    /// Checks that all blocks are d×d (vectors of length d) with finite entries.
    pub fn new(
        gamma1: DMatrix<f64>,
        w1: DMatrix<f64>,
        v1: DVector<f64>,
        gamma2: DMatrix<f64>,
        w2: DMatrix<f64>,
        v2: DVector<f64>,
    ) -> Result<Self> {
        let d = v1.len();
        if d == 0 {
            return Err(Error::InvalidInput("dimension must be at least 1".into()));
        }
        for (name, m) in [("gamma1", &gamma1), ("w1", &w1), ("gamma2", &gamma2), ("w2", &w2)] {
            if m.shape() != (d, d) {
                return Err(Error::InvalidInput(format!("{name} has shape {:?}, expected ({d}, {d})", m.shape())));
            }
            if m.iter().any(|x| !x.is_finite()) {
                return Err(Error::InvalidInput(format!("{name} has a non-finite entry")));
            }
        }
        if v2.len() != d {
            return Err(Error::InvalidInput(format!("v2 has length {}, expected {d}", v2.len())));
        }
        if v1.iter().chain(v2.iter()).any(|x| !x.is_finite()) {
            return Err(Error::InvalidInput("v1/v2 has a non-finite entry".into()));
        }
        Ok(MatrixSpec { gamma1, w1, v1, gamma2, w2, v2 })
    }

    pub fn dim(&self) -> usize {
        self.v1.len()
    }

    /// h₁(θ, w) = v₁ − Γ₁θ − W₁w.
    pub fn h1(&self, theta: &DVector<f64>, w: &DVector<f64>) -> DVector<f64> {
        &self.v1 - &self.gamma1 * theta - &self.w1 * w
    }

    /// h₂(θ, w) = v₂ − Γ₂θ − W₂w.
    pub fn h2(&self, theta: &DVector<f64>, w: &DVector<f64>) -> DVector<f64> {
        &self.v2 - &self.gamma2 * theta - &self.w2 * w
    }
}

/// Quantities derived from a [`MatrixSpec`]: the slow-timescale matrix
/// X₁ = Γ₁ − W₁W₂⁻¹Γ₂, the fixed point and the contraction margins q₁, q₂.
#[derive(Debug, Clone, PartialEq)]
pub struct DerivedSystem {
    pub spec: MatrixSpec,
    pub x1: DMatrix<f64>,
    pub b1: DVector<f64>,
    pub theta_star: DVector<f64>,
    pub w_star: DVector<f64>,
    pub w2_inv: DMatrix<f64>,
    pub q1: f64,
    pub q2: f64,
    pub q_min: f64,
}

impl DerivedSystem {
    pub fn dim(&self) -> usize {
        self.spec.dim()
    }

    /// W₁W₂⁻¹.
    pub fn w1_w2inv(&self) -> DMatrix<f64> {
        &self.spec.w1 * &self.w2_inv
    }
}

pub fn derive_system(spec: &MatrixSpec) -> Result<DerivedSystem> {
    let d = spec.dim();
    if inverse_condition(&spec.w2) < SINGULAR_RCOND {
        return Err(Error::SingularMatrix { which: "W2" });
    }
    let w2_lu = spec.w2.clone().lu();
    let w2_inv = w2_lu.try_inverse().ok_or(Error::SingularMatrix { which: "W2" })?;
    let w2_solve = |rhs: &DMatrix<f64>| w2_lu.solve(rhs).ok_or(Error::SingularMatrix { which: "W2" });

    let w2inv_gamma2 = w2_solve(&spec.gamma2)?;
    let w2inv_v2 = w2_solve(&DMatrix::from_column_slice(d, 1, spec.v2.as_slice()))?.column(0).into_owned();
    let x1 = &spec.gamma1 - &spec.w1 * &w2inv_gamma2;
    let b1 = &spec.v1 - &spec.w1 * &w2inv_v2;
    if inverse_condition(&x1) < SINGULAR_RCOND {
        return Err(Error::SingularMatrix { which: "X1" });
    }

    // Solve the full block system [Γ₁ W₁; Γ₂ W₂][θ; w] = [v₁; v₂]; its solution
    // is θ* = X₁⁻¹b₁, w* = W₂⁻¹(v₂ − Γ₂θ*). One refinement step keeps the
    // fixed-point residual at rounding level.
    let mut block = DMatrix::zeros(2 * d, 2 * d);
    block.view_mut((0, 0), (d, d)).copy_from(&spec.gamma1);
    block.view_mut((0, d), (d, d)).copy_from(&spec.w1);
    block.view_mut((d, 0), (d, d)).copy_from(&spec.gamma2);
    block.view_mut((d, d), (d, d)).copy_from(&spec.w2);
    let mut rhs = DVector::zeros(2 * d);
    rhs.rows_mut(0, d).copy_from(&spec.v1);
    rhs.rows_mut(d, d).copy_from(&spec.v2);
    let block_lu = block.clone().lu();
    let mut z = block_lu.solve(&rhs).ok_or(Error::SingularMatrix { which: "X1" })?;
    let residual = &rhs - &block * &z;
    if let Some(dz) = block_lu.solve(&residual) {
        z += dz;
    }
    let theta_star = z.rows(0, d).into_owned();
    let w_star = z.rows(d, d).into_owned();

    let q1 = lambda_min_sym(&x1) / 4.0;
    let q2 = lambda_min_sym(&spec.w2) / 4.0;
    Ok(DerivedSystem {
        spec: spec.clone(),
        x1,
        b1,
        theta_star,
        w_star,
        w2_inv,
        q1,
        q2,
        q_min: q1.min(q2),
    })
}

/// Positive-definiteness check of W₂ and X₁ (not necessarily symmetric).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AssumptionReport {
    /// λ_min(W₂+W₂ᵀ)/2.
    pub w2_margin: f64,
    /// λ_min(X₁+X₁ᵀ)/2; NaN when X₁ cannot be formed.
    pub x1_margin: f64,
    pub w2_pass: bool,
    pub x1_pass: bool,
}

impl AssumptionReport {
    pub fn pass(&self) -> bool {
        self.w2_pass && self.x1_pass
    }

    /// Name of the first failing matrix, if any.
    pub fn failure(&self) -> Option<&'static str> {
        if !self.w2_pass {
            Some("W2 + W2^T is not positive definite")
        } else if !self.x1_pass {
            Some("X1 + X1^T is not positive definite")
        } else {
            None
        }
    }
}

pub fn check_assumptions(spec: &MatrixSpec) -> AssumptionReport {
    let w2_margin = lambda_min_sym(&spec.w2) / 2.0;
    let x1_margin = match spec.w2.clone().lu().solve(&spec.gamma2) {
        Some(w2inv_gamma2) if inverse_condition(&spec.w2) >= SINGULAR_RCOND => {
            lambda_min_sym(&(&spec.gamma1 - &spec.w1 * w2inv_gamma2)) / 2.0
        }
        _ => f64::NAN,
    };
    AssumptionReport { w2_margin, x1_margin, w2_pass: w2_margin > 0.0, x1_pass: x1_margin > 0.0 }
}

/// Exponents of α_n = (n+1)^{-α}, β_n = (n+1)^{-β}.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawSchedule", into = "RawSchedule")]
pub struct StepSchedule {
    alpha: f64,
    beta: f64,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawSchedule {
    alpha: f64,
    beta: f64,
}

impl TryFrom<RawSchedule> for StepSchedule {
    type Error = Error;
    fn try_from(raw: RawSchedule) -> Result<Self> {
        StepSchedule::new(raw.alpha, raw.beta)
    }
}

impl From<StepSchedule> for RawSchedule {
    fn from(s: StepSchedule) -> Self {
        RawSchedule { alpha: s.alpha, beta: s.beta }
    }
}

impl StepSchedule {
    /// Requires 1 > α > β > 0 strictly.
    pub fn new(alpha: f64, beta: f64) -> Result<Self> {
        if alpha < 1.0 && alpha > beta && beta > 0.0 {
            Ok(StepSchedule { alpha, beta })
        } else {
            Err(Error::InvalidSchedule { alpha, beta })
        }
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn beta(&self) -> f64 {
        self.beta
    }

    /// (α_n, β_n).
    pub fn stepsizes(&self, n: u64) -> (f64, f64) {
        let m = (n as f64) + 1.0;
        (m.powf(-self.alpha), m.powf(-self.beta))
    }

    /// α_n for a real index, used by constants that live beyond u64.
    pub fn alpha_at(&self, n: f64) -> f64 {
        (n + 1.0).powf(-self.alpha)
    }

    pub fn beta_at(&self, n: f64) -> f64 {
        (n + 1.0).powf(-self.beta)
    }
}

pub fn stepsizes(schedule: &StepSchedule, n: u64) -> (f64, f64) {
    schedule.stepsizes(n)
}

/// k^k − 1 for k = 1..=15; 16^16 no longer fits in 64 bits.
pub const PROJECTION_INDICES: [u64; 15] = {
    let mut out = [0u64; 15];
    let mut k = 1;
    while k <= 15 {
        let mut p: u64 = 1;
        let mut i = 0;
        while i < k {
            p *= k as u64;
            i += 1;
        }
        out[k - 1] = p - 1;
        k += 1;
    }
    out
};

/// Largest horizon whose projection schedule is representable.
pub const MAX_HORIZON: u64 = PROJECTION_INDICES[14];

/// True iff `n = k^k − 1` for some k ≥ 1.
pub fn is_projection_index(n: u64) -> bool {
    PROJECTION_INDICES.binary_search(&n).is_ok()
}

/// Π_R(x) = min{1, R/‖x‖}·x at projection indices, identity elsewhere.
pub fn sparse_project(n: u64, r: f64, x: &DVector<f64>) -> DVector<f64> {
    let mut y = x.clone();
    if is_projection_index(n) {
        project_in_place(r, &mut y);
    }
    y
}

/// Returns whether the vector changed.
fn project_in_place(r: f64, x: &mut DVector<f64>) -> bool {
    let norm = x.norm();
    if norm > r {
        *x *= r / norm;
        true
    } else {
        false
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProjectionConfig {
    pub r_theta: f64,
    pub r_w: f64,
    pub enabled: bool,
}

impl ProjectionConfig {
    pub fn disabled() -> Self {
        ProjectionConfig { r_theta: f64::INFINITY, r_w: f64::INFINITY, enabled: false }
    }

    pub fn radii(r_theta: f64, r_w: f64) -> Self {
        ProjectionConfig { r_theta, r_w, enabled: true }
    }

    /// R = 10·(1 + ‖θ*‖ + ‖w*‖) for both iterates.
    pub fn default_for(system: &DerivedSystem) -> Self {
        let r = default_radius(system);
        ProjectionConfig::radii(r, r)
    }
}

pub fn default_radius(system: &DerivedSystem) -> f64 {
    10.0 * (1.0 + system.theta_star.norm() + system.w_star.norm())
}

#[derive(Debug, Clone, PartialEq)]
pub struct IterateState {
    pub n: u64,
    pub theta: DVector<f64>,
    pub w: DVector<f64>,
}

impl IterateState {
    pub fn new(theta: DVector<f64>, w: DVector<f64>) -> Self {
        IterateState { n: 0, theta, w }
    }

    pub fn is_finite(&self) -> bool {
        self.theta.iter().chain(self.w.iter()).all(|x| x.is_finite())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Iterate {
    Theta,
    W,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProjectionEvent {
    pub n: u64,
    pub which: Iterate,
}

/// Scratch space for the in-place update.
struct StepBuffers {
    h1: DVector<f64>,
    h2: DVector<f64>,
}

impl StepBuffers {
    fn new(d: usize) -> Self {
        StepBuffers { h1: DVector::zeros(d), h2: DVector::zeros(d) }
    }
}

/// One synchronous update from index `n` in place. Both increments are formed
/// from the old (θ_n, w_n) before either iterate is written.
fn advance(
    spec: &MatrixSpec,
    schedule: &StepSchedule,
    proj: &ProjectionConfig,
    n: u64,
    theta: &mut DVector<f64>,
    w: &mut DVector<f64>,
    noise: &NoiseRecord,
    buf: &mut StepBuffers,
) -> Result<(bool, bool)> {
    let (a, b) = schedule.stepsizes(n);
    buf.h1.copy_from(&spec.v1);
    buf.h1.gemv(-1.0, &spec.gamma1, theta, 1.0);
    buf.h1.gemv(-1.0, &spec.w1, w, 1.0);
    buf.h2.copy_from(&spec.v2);
    buf.h2.gemv(-1.0, &spec.gamma2, theta, 1.0);
    buf.h2.gemv(-1.0, &spec.w2, w, 1.0);
    buf.h1 += &noise.m1;
    buf.h2 += &noise.m2;
    theta.axpy(a, &buf.h1, 1.0);
    w.axpy(b, &buf.h2, 1.0);

    let mut changed = (false, false);
    if proj.enabled && is_projection_index(n + 1) {
        changed.0 = project_in_place(proj.r_theta, theta);
        changed.1 = project_in_place(proj.r_w, w);
    }
    if theta.iter().chain(w.iter()).any(|x| !x.is_finite()) {
        return Err(Error::NonFinite { index: n + 1 });
    }
    Ok(changed)
}

/// One step of the (optionally projected) iteration.
pub fn sa_step(
    state: &IterateState,
    spec: &MatrixSpec,
    schedule: &StepSchedule,
    noise: &NoiseRecord,
    proj: &ProjectionConfig,
) -> Result<IterateState> {
    let d = spec.dim();
    if state.theta.len() != d || state.w.len() != d || noise.m1.len() != d || noise.m2.len() != d {
        return Err(Error::InvalidInput(format!("state/noise dimensions do not match d = {d}")));
    }
    let mut theta = state.theta.clone();
    let mut w = state.w.clone();
    let mut buf = StepBuffers::new(d);
    advance(spec, schedule, proj, state.n, &mut theta, &mut w, noise, &mut buf)?;
    Ok(IterateState { n: state.n + 1, theta, w })
}

/// Settings of a single run.
#[derive(Debug, Clone, PartialEq)]
pub struct RunOptions {
    pub horizon: u64,
    pub seed: u64,
    /// Indices at which the state is recorded; sorted and deduplicated on use.
    pub checkpoints: Vec<u64>,
    /// Initial iterates; zero when absent. Never projected.
    pub theta0: Option<DVector<f64>>,
    pub w0: Option<DVector<f64>>,
    /// Keep every noise record (needed by the decomposition).
    pub record_noise: bool,
}

impl RunOptions {
    pub fn new(horizon: u64, seed: u64, checkpoints: Vec<u64>) -> Self {
        RunOptions { horizon, seed, checkpoints, theta0: None, w0: None, record_noise: false }
    }

    /// Every index recorded, noise included.
    pub fn full(horizon: u64, seed: u64) -> Self {
        RunOptions { record_noise: true, ..RunOptions::new(horizon, seed, (0..=horizon).collect()) }
    }

    pub fn start_at(mut self, theta0: DVector<f64>, w0: DVector<f64>) -> Self {
        self.theta0 = Some(theta0);
        self.w0 = Some(w0);
        self
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub schedule: StepSchedule,
    pub seed: u64,
    pub horizon: u64,
    /// Requested checkpoints; `states` may be shorter if the run diverged.
    pub checkpoints: Vec<u64>,
    pub states: Vec<IterateState>,
    /// `noise[n]` drove the update from index n to n+1.
    pub noise: Option<Vec<NoiseRecord>>,
    pub projections_applied: Vec<ProjectionEvent>,
    pub errors_theta: Vec<f64>,
    pub errors_w: Vec<f64>,
    /// First index with a non-finite iterate; the run stops there.
    pub diverged_at: Option<u64>,
}

impl Trajectory {
    pub fn diverged(&self) -> bool {
        self.diverged_at.is_some()
    }

    /// Recorded state at index `n`, if `n` was a checkpoint reached by the run.
    pub fn state_at(&self, n: u64) -> Option<&IterateState> {
        self.states.binary_search_by_key(&n, |s| s.n).ok().map(|i| &self.states[i])
    }
}

pub fn run_trajectory(
    spec: &MatrixSpec,
    schedule: &StepSchedule,
    proj: &ProjectionConfig,
    noise_model: &dyn NoiseModel,
    opts: &RunOptions,
) -> Result<Trajectory> {
    let system = derive_system(spec)?;
    run_with_system(&system, schedule, proj, noise_model, opts)
}

/// [`run_trajectory`] for an already derived system.
pub fn run_with_system(
    system: &DerivedSystem,
    schedule: &StepSchedule,
    proj: &ProjectionConfig,
    noise_model: &dyn NoiseModel,
    opts: &RunOptions,
) -> Result<Trajectory> {
    let spec = &system.spec;
    let d = spec.dim();
    if opts.horizon > MAX_HORIZON {
        return Err(Error::InvalidInput(format!("horizon {} exceeds the largest supported {}", opts.horizon, MAX_HORIZON)));
    }
    let mut checkpoints = opts.checkpoints.clone();
    checkpoints.sort_unstable();
    checkpoints.dedup();
    if checkpoints.last().is_some_and(|&c| c > opts.horizon) {
        return Err(Error::InvalidInput("checkpoint beyond the horizon".into()));
    }
    let mut theta = opts.theta0.clone().unwrap_or_else(|| DVector::zeros(d));
    let mut w = opts.w0.clone().unwrap_or_else(|| DVector::zeros(d));
    if theta.len() != d || w.len() != d {
        return Err(Error::InvalidInput(format!("initial iterates must have dimension {d}")));
    }

    let mut traj = Trajectory {
        schedule: *schedule,
        seed: opts.seed,
        horizon: opts.horizon,
        checkpoints: checkpoints.clone(),
        states: Vec::with_capacity(checkpoints.len()),
        noise: opts.record_noise.then(|| Vec::with_capacity(opts.horizon as usize)),
        projections_applied: Vec::new(),
        errors_theta: Vec::with_capacity(checkpoints.len()),
        errors_w: Vec::with_capacity(checkpoints.len()),
        diverged_at: None,
    };
    let record = |traj: &mut Trajectory, n: u64, theta: &DVector<f64>, w: &DVector<f64>| {
        traj.errors_theta.push((theta - &system.theta_star).norm());
        traj.errors_w.push((w - &system.w_star).norm());
        traj.states.push(IterateState { n, theta: theta.clone(), w: w.clone() });
    };

    let mut next_cp = checkpoints.iter().peekable();
    let mut buf = StepBuffers::new(d);
    let mut noise = NoiseRecord::zeros(d);
    for n in 0..=opts.horizon {
        if next_cp.peek() == Some(&&n) {
            next_cp.next();
            record(&mut traj, n, &theta, &w);
        }
        if n == opts.horizon {
            break;
        }
        noise_model.sample_into(opts.seed, n, &theta, &w, &mut noise);
        if let Some(rec) = traj.noise.as_mut() {
            rec.push(noise.clone());
        }
        match advance(spec, schedule, proj, n, &mut theta, &mut w, &noise, &mut buf) {
            Ok((pt, pw)) => {
                if pt {
                    traj.projections_applied.push(ProjectionEvent { n: n + 1, which: Iterate::Theta });
                }
                if pw {
                    traj.projections_applied.push(ProjectionEvent { n: n + 1, which: Iterate::W });
                }
            }
            Err(Error::NonFinite { index }) => {
                traj.diverged_at = Some(index);
                break;
            }
            Err(e) => return Err(e),
        }
    }
    Ok(traj)
}

/// Runs both the projected and unprojected iterations in lockstep from the
/// same seed and compares the state streams bit for bit.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LockstepComparison {
    pub first_divergence: Option<u64>,
    pub last_effective_projection: Option<u64>,
    /// Set when the unprojected run overflowed.
    pub unprojected_diverged_at: Option<u64>,
}

pub(crate) fn lockstep(
    system: &DerivedSystem,
    schedule: &StepSchedule,
    proj: &ProjectionConfig,
    noise_model: &dyn NoiseModel,
    horizon: u64,
    seed: u64,
    start: Option<(&DVector<f64>, &DVector<f64>)>,
) -> Result<LockstepComparison> {
    let spec = &system.spec;
    let d = spec.dim();
    let (t0, w0) = match start {
        Some((t, w)) => (t.clone(), w.clone()),
        None => (DVector::zeros(d), DVector::zeros(d)),
    };
    let (mut tp, mut wp) = (t0.clone(), w0.clone());
    let (mut tu, mut wu) = (t0, w0);
    let free = ProjectionConfig::disabled();
    let mut out = LockstepComparison { first_divergence: None, last_effective_projection: None, unprojected_diverged_at: None };
    let (mut bp, mut bu) = (StepBuffers::new(d), StepBuffers::new(d));
    let (mut np, mut nu) = (NoiseRecord::zeros(d), NoiseRecord::zeros(d));
    let mut projected_alive = true;
    for n in 0..horizon {
        if projected_alive {
            noise_model.sample_into(seed, n, &tp, &wp, &mut np);
            match advance(spec, schedule, proj, n, &mut tp, &mut wp, &np, &mut bp) {
                Ok((a, b)) => {
                    if a || b {
                        out.last_effective_projection = Some(n + 1);
                    }
                }
                Err(Error::NonFinite { .. }) => projected_alive = false,
                Err(e) => return Err(e),
            }
        }
        if out.unprojected_diverged_at.is_none() {
            noise_model.sample_into(seed, n, &tu, &wu, &mut nu);
            match advance(spec, schedule, &free, n, &mut tu, &mut wu, &nu, &mut bu) {
                Ok(_) => {}
                Err(Error::NonFinite { index }) => out.unprojected_diverged_at = Some(index),
                Err(e) => return Err(e),
            }
        }
        let same = projected_alive
            && out.unprojected_diverged_at.is_none()
            && bit_equal(&tp, &tu)
            && bit_equal(&wp, &wu);
        if !same && out.first_divergence.is_none() {
            out.first_divergence = Some(n + 1);
        }
        if !projected_alive && out.unprojected_diverged_at.is_some() {
            break;
        }
    }
    Ok(out)
}

fn bit_equal(a: &DVector<f64>, b: &DVector<f64>) -> bool {
    a.iter().zip(b.iter()).all(|(x, y)| x.to_bits() == y.to_bits())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn projection_table() {
        assert_eq!(&PROJECTION_INDICES[..6], &[0, 3, 26, 255, 3124, 46655]);
        assert_eq!(MAX_HORIZON, 437_893_890_380_859_374);
    }

    #[test]
    fn schedule_rejects_equal_exponents() {
        assert!(matches!(StepSchedule::new(0.5, 0.5), Err(Error::InvalidSchedule { .. })));
        assert!(StepSchedule::new(1.0, 0.5).is_err());
        assert!(StepSchedule::new(0.6, 0.0).is_err());
        assert!(StepSchedule::new(0.6, 0.5).is_ok());
    }
}

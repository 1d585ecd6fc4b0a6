//! Flow systems on flat tori and boxes: orbit integration, critical point
//! extraction, frame transport and Morse–Smale validation.
//!
//! Orbits are integrated in the universal cover (no wraparound jumps in the
//! state); all distance tests use minimum-image displacements so torus
//! geometry is respected. The integrator is an adaptive Dormand–Prince 5(4)
//! scheme with cubic Hermite dense output for event location.

use crate::expr::{Domain, ExprError, Expression, ScalarField};
use crate::linalg::{self, Mat};
use crate::F;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum FlowError {
    #[error("expression error: {0}")]
    Expr(#[from] ExprError),
    #[error("metric matrix is not symmetric positive definite")]
    NotSpd,
    #[error("degenerate critical point at {position:?}: eigenvalue {eigenvalue:e} below threshold")]
    Degenerate { position: Vec<F>, eigenvalue: F },
    #[error("operation requires a gradient flow")]
    NotGradient,
    #[error("{what} supports dimension <= {max}, got {got}")]
    UnsupportedDimension { what: String, max: usize, got: usize },
    #[error("integrator stalled at t = {t}: step size underflow")]
    Stalled { t: F },
    #[error("transported frame collapsed at t = {t}")]
    FrameCollapse { t: F },
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("flow map integration ended before the requested time: {detail}")]
    IncompleteFlow { detail: String },
}

/// Riemannian metric with constant coefficients.
#[derive(Debug, Clone)]
pub enum Metric {
    Euclidean,
    Constant(Mat<F>),
}

impl Metric {
    pub fn constant(g: Mat<F>) -> Result<Self, FlowError> {
        if g.rows != g.cols {
            return Err(FlowError::NotSpd);
        }
        for i in 0..g.rows {
            for j in 0..g.cols {
                if (g[(i, j)] - g[(j, i)]).abs() > 1e-12 {
                    return Err(FlowError::NotSpd);
                }
            }
        }
        if g.cholesky().is_none() {
            return Err(FlowError::NotSpd);
        }
        Ok(Metric::Constant(g))
    }

    pub fn matrix(&self, dim: usize) -> Mat<F> {
        match self {
            Metric::Euclidean => Mat::identity(dim),
            Metric::Constant(g) => g.clone(),
        }
    }

    /// Solve G x = rhs.
    pub fn solve(&self, rhs: &[F]) -> Vec<F> {
        match self {
            Metric::Euclidean => rhs.to_vec(),
            Metric::Constant(g) => g.solve(rhs).expect("metric is SPD"),
        }
    }

    pub fn inner(&self, u: &[F], v: &[F]) -> F {
        match self {
            Metric::Euclidean => linalg::dot(u, v),
            Metric::Constant(g) => linalg::dot(u, &g.mat_vec(v)),
        }
    }

    pub fn norm(&self, u: &[F]) -> F {
        self.inner(u, u).max(0.0).sqrt()
    }
}

/// The vector field being integrated.
#[derive(Debug, Clone)]
pub enum VectorSpec {
    /// Negative metric gradient of a scalar field.
    Gradient { field: ScalarField },
    /// Arbitrary autonomous vector field, one expression per component.
    General { components: Vec<Expression> },
    /// Non-autonomous linear interpolation of two potentials: the gradient is
    /// blended by a smoothstep ramp over `[0, duration]` and held at the
    /// target potential afterwards.
    Switch { from: ScalarField, to: ScalarField, duration: F },
}

/// A flow on a torus or box domain.
#[derive(Debug, Clone)]
pub struct FlowSystem {
    pub domain: Domain,
    pub metric: Metric,
    pub spec: VectorSpec,
    /// Integrate the time-reversed field. For a switch flow the reversal
    /// mirrors the schedule: the reversed velocity at time `t` is the
    /// negated forward velocity at time `duration - t`, so integrating the
    /// reversed switch for exactly `duration` inverts the switch map.
    pub reversed: bool,
}

fn smoothstep(s: F) -> F {
    let s = s.clamp(0.0, 1.0);
    s * s * (3.0 - 2.0 * s)
}

impl FlowSystem {
    pub fn gradient(field: ScalarField, domain: Domain, metric: Metric) -> Self {
        FlowSystem { domain, metric, spec: VectorSpec::Gradient { field }, reversed: false }
    }

    pub fn general(components: Vec<Expression>, domain: Domain, metric: Metric) -> Self {
        FlowSystem { domain, metric, spec: VectorSpec::General { components }, reversed: false }
    }

    pub fn switch(from: ScalarField, to: ScalarField, duration: F, domain: Domain, metric: Metric) -> Self {
        FlowSystem { domain, metric, spec: VectorSpec::Switch { from, to, duration }, reversed: false }
    }

    pub fn reverse(&self) -> Self {
        let mut r = self.clone();
        r.reversed = !r.reversed;
        r
    }

    /// Effective schedule time: a reversed switch runs its interpolation
    /// backwards. Autonomous flows ignore `t` entirely.
    fn schedule_time(&self, t: F) -> F {
        match &self.spec {
            VectorSpec::Switch { duration, .. } if self.reversed => *duration - t,
            _ => t,
        }
    }

    pub fn dim(&self) -> usize {
        self.domain.dim()
    }

    pub fn field(&self) -> Option<&ScalarField> {
        match &self.spec {
            VectorSpec::Gradient { field } => Some(field),
            _ => None,
        }
    }

    fn raw_gradient(&self, t: F, x: &[F]) -> Result<Vec<F>, FlowError> {
        match &self.spec {
            VectorSpec::Gradient { field } => Ok(field.jet1(&self.domain, x)?.g),
            VectorSpec::Switch { from, to, duration } => {
                let lam = smoothstep(self.schedule_time(t) / *duration);
                let gf = from.jet1(&self.domain, x)?.g;
                let gt = to.jet1(&self.domain, x)?.g;
                Ok(gf
                    .iter()
                    .zip(&gt)
                    .map(|(a, b)| (1.0 - lam) * a + lam * b)
                    .collect())
            }
            VectorSpec::General { .. } => Err(FlowError::NotGradient),
        }
    }

    /// Velocity of the flow at time `t`, position `x`.
    pub fn velocity(&self, t: F, x: &[F]) -> Result<Vec<F>, FlowError> {
        let mut v = match &self.spec {
            VectorSpec::General { components } => {
                let p = self.domain.reduce(x);
                components
                    .iter()
                    .map(|c| c.eval(&p))
                    .collect::<Result<Vec<F>, _>>()?
            }
            _ => {
                let g = self.raw_gradient(t, x)?;
                self.metric.solve(&g).iter().map(|v| -v).collect()
            }
        };
        if self.reversed {
            for vi in v.iter_mut() {
                *vi = -*vi;
            }
        }
        Ok(v)
    }

    /// Velocity and its spatial Jacobian.
    pub fn velocity_jacobian(&self, t: F, x: &[F]) -> Result<(Vec<F>, Mat<F>), FlowError> {
        let n = self.dim();
        let (mut v, mut j) = match &self.spec {
            VectorSpec::General { components } => {
                let p = self.domain.reduce(x);
                let mut v = Vec::with_capacity(n);
                let mut jm = Mat::zeros(n, n);
                for (i, c) in components.iter().enumerate() {
                    let jet = c.eval_jet1(&p)?;
                    v.push(jet.v);
                    for k in 0..n {
                        jm[(i, k)] = jet.g[k];
                    }
                }
                (v, jm)
            }
            VectorSpec::Gradient { field } => {
                let jet = field.jet2(&self.domain, x)?;
                let h = jet.hessian();
                (neg_metric_solve(&self.metric, &jet.g), neg_metric_solve_mat(&self.metric, &h))
            }
            VectorSpec::Switch { from, to, duration } => {
                let lam = smoothstep(self.schedule_time(t) / *duration);
                let jf = from.jet2(&self.domain, x)?;
                let jt = to.jet2(&self.domain, x)?;
                let g: Vec<F> = jf
                    .g
                    .iter()
                    .zip(&jt.g)
                    .map(|(a, b)| (1.0 - lam) * a + lam * b)
                    .collect();
                let hf = jf.hessian();
                let ht = jt.hessian();
                let mut h = Mat::zeros(n, n);
                for i in 0..n {
                    for k in 0..n {
                        h[(i, k)] = (1.0 - lam) * hf[(i, k)] + lam * ht[(i, k)];
                    }
                }
                (neg_metric_solve(&self.metric, &g), neg_metric_solve_mat(&self.metric, &h))
            }
        };
        if self.reversed {
            for vi in v.iter_mut() {
                *vi = -*vi;
            }
            for e in j.data.iter_mut() {
                *e = -*e;
            }
        }
        Ok((v, j))
    }
}

fn neg_metric_solve(metric: &Metric, g: &[F]) -> Vec<F> {
    metric.solve(g).iter().map(|v| -v).collect()
}

fn neg_metric_solve_mat(metric: &Metric, h: &Mat<F>) -> Mat<F> {
    let mut out = Mat::zeros(h.rows, h.cols);
    for j in 0..h.cols {
        let col = neg_metric_solve(metric, &h.col(j));
        out.set_col(j, &col);
    }
    out
}

/// Numerical tolerances of the dynamics layer. The defaults are the pinned
/// values used throughout; scenarios may override them explicitly.
#[derive(Debug, Clone)]
pub struct FlowTolerances {
    pub rel_tol: F,
    pub abs_tol: F,
    pub h_init: F,
    pub h_max: F,
    /// Give up on convergence searches after this flow time.
    pub t_max: F,
    /// Convergence ball radius around a critical point.
    pub r_conv: F,
    /// Fraction of the displacement allowed in rejected directions when
    /// declaring convergence.
    pub cone_fraction: F,
    pub newton_residual: F,
    pub newton_step: F,
    pub newton_iters: usize,
    /// Distinct critical points are separated by more than this.
    pub dedup: F,
    /// Relative eigenvalue threshold below which a critical point counts as
    /// degenerate.
    pub degeneracy: F,
    /// Time tolerance when bisecting a region exit.
    pub crossing_time: F,
    /// Orbits out of a critical point start this far along the frame
    /// direction (scaled by the domain size).
    pub launch_radius: F,
    pub grid_per_axis: usize,
}

impl Default for FlowTolerances {
    fn default() -> Self {
        FlowTolerances {
            rel_tol: 1e-10,
            abs_tol: 1e-12,
            h_init: 1e-3,
            h_max: 0.05,
            t_max: 200.0,
            r_conv: 1e-3,
            cone_fraction: 0.1,
            newton_residual: 1e-11,
            newton_step: 1e-13,
            newton_iters: 60,
            dedup: 1e-6,
            degeneracy: 1e-8,
            crossing_time: 1e-10,
            launch_radius: 1e-3,
            grid_per_axis: 32,
        }
    }
}

/// Subset of the domain in which an orbit is required to stay.
pub trait Region: Sync {
    fn contains(&self, domain: &Domain, x: &[F]) -> bool;
}

/// Axis-aligned closed box, interpreted after torus reduction.
#[derive(Debug, Clone, PartialEq)]
pub struct BoxRegion {
    pub lo: Vec<F>,
    pub hi: Vec<F>,
}

impl Region for BoxRegion {
    fn contains(&self, domain: &Domain, x: &[F]) -> bool {
        let p = domain.reduce(x);
        p.iter()
            .enumerate()
            .all(|(i, &xi)| xi >= self.lo[i] && xi <= self.hi[i])
    }
}

impl BoxRegion {
    /// Depth of `x` inside the box: the smallest margin to any face
    /// (negative outside).
    pub fn interior_depth(&self, domain: &Domain, x: &[F]) -> F {
        let p = domain.reduce(x);
        p.iter()
            .enumerate()
            .map(|(i, &xi)| (xi - self.lo[i]).min(self.hi[i] - xi))
            .fold(F::INFINITY, F::min)
    }
}

/// Finite union of axis-aligned boxes; the shape isolating neighborhoods
/// are built from.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct UnionRegion {
    pub boxes: Vec<BoxRegion>,
}

impl UnionRegion {
    pub fn single(lo: Vec<F>, hi: Vec<F>) -> Self {
        UnionRegion { boxes: vec![BoxRegion { lo, hi }] }
    }

    /// Largest single-box interior depth of `x` over the union. This is a
    /// lower bound for the true depth inside the union (exact when the
    /// boxes are disjoint), which is the safe direction for margin checks.
    pub fn interior_depth(&self, domain: &Domain, x: &[F]) -> F {
        self.boxes
            .iter()
            .map(|b| b.interior_depth(domain, x))
            .fold(F::NEG_INFINITY, F::max)
    }
}

impl Region for UnionRegion {
    fn contains(&self, domain: &Domain, x: &[F]) -> bool {
        self.boxes.iter().any(|b| b.contains(domain, x))
    }
}

/// A convergence target: a point together with the directions in which the
/// approach must be negligible. For a forward gradient orbit the rejected
/// directions are the unstable ones; for a reversed orbit the stable ones.
#[derive(Debug, Clone)]
pub struct ConvergenceTarget {
    pub position: Vec<F>,
    /// `n x k` matrix of rejected directions (may have zero columns).
    pub reject_frame: Mat<F>,
}

impl ConvergenceTarget {
    /// Does `x` count as converged to this target?
    fn accepts(&self, domain: &Domain, metric: &Metric, x: &[F], tol: &FlowTolerances) -> bool {
        let d = domain.displacement(&self.position, x);
        let dist = metric.norm(&d);
        if dist >= tol.r_conv {
            return false;
        }
        if self.reject_frame.cols == 0 || dist == 0.0 {
            return true;
        }
        // Components along the (G-orthonormal) rejected frame.
        let mut rej2 = 0.0;
        for j in 0..self.reject_frame.cols {
            let c = metric.inner(&self.reject_frame.col(j), &d);
            rej2 += c * c;
        }
        rej2.sqrt() <= tol.cone_fraction * dist
    }
}

/// Why integration stopped.
#[derive(Debug, Clone, PartialEq)]
pub enum StopReason {
    Converged { target: usize, time: F },
    LeftRegion { time: F, boundary_point: Vec<F> },
    TimeReached,
    Timeout,
}

/// Stopping rules for one integration run.
pub struct StopSpec<'a> {
    pub targets: &'a [ConvergenceTarget],
    pub region: Option<&'a dyn Region>,
    pub t_final: Option<F>,
}

impl<'a> StopSpec<'a> {
    pub fn time(t_final: F) -> Self {
        StopSpec { targets: &[], region: None, t_final: Some(t_final) }
    }

    pub fn targets(targets: &'a [ConvergenceTarget]) -> Self {
        StopSpec { targets, region: None, t_final: None }
    }
}

/// Sampled orbit with the reason integration ended. States are stored in the
/// universal cover; reduce through the domain for chart coordinates.
#[derive(Debug, Clone)]
pub struct Orbit {
    pub times: Vec<F>,
    pub states: Vec<Vec<F>>,
    pub reason: StopReason,
}

impl Orbit {
    pub fn last(&self) -> &[F] {
        self.states.last().expect("orbit has at least the initial state")
    }

    /// Minimum distance from the sampled orbit to `point` and the sample
    /// index achieving it.
    pub fn closest_approach(&self, domain: &Domain, metric: &Metric, point: &[F]) -> (usize, F) {
        let mut best = (0usize, F::INFINITY);
        for (i, s) in self.states.iter().enumerate() {
            let d = metric.norm(&domain.displacement(point, s));
            if d < best.1 {
                best = (i, d);
            }
        }
        best
    }
}

// Dormand–Prince 5(4) coefficients.
const C: [F; 7] = [0.0, 1.0 / 5.0, 3.0 / 10.0, 4.0 / 5.0, 8.0 / 9.0, 1.0, 1.0];
const A: [[F; 6]; 7] = [
    [0.0, 0.0, 0.0, 0.0, 0.0, 0.0],
    [1.0 / 5.0, 0.0, 0.0, 0.0, 0.0, 0.0],
    [3.0 / 40.0, 9.0 / 40.0, 0.0, 0.0, 0.0, 0.0],
    [44.0 / 45.0, -56.0 / 15.0, 32.0 / 9.0, 0.0, 0.0, 0.0],
    [19372.0 / 6561.0, -25360.0 / 2187.0, 64448.0 / 6561.0, -212.0 / 729.0, 0.0, 0.0],
    [9017.0 / 3168.0, -355.0 / 33.0, 46732.0 / 5247.0, 49.0 / 176.0, -5103.0 / 18656.0, 0.0],
    [35.0 / 384.0, 0.0, 500.0 / 1113.0, 125.0 / 192.0, -2187.0 / 6784.0, 11.0 / 84.0],
];
const E: [F; 7] = [
    71.0 / 57600.0,
    0.0,
    -71.0 / 16695.0,
    71.0 / 1920.0,
    -17253.0 / 339200.0,
    22.0 / 525.0,
    -1.0 / 40.0,
];

/// Cubic Hermite interpolant over one accepted step.
fn hermite(y0: &[F], y1: &[F], f0: &[F], f1: &[F], h: F, s: F) -> Vec<F> {
    let s2 = s * s;
    let s3 = s2 * s;
    let h00 = 2.0 * s3 - 3.0 * s2 + 1.0;
    let h10 = s3 - 2.0 * s2 + s;
    let h01 = -2.0 * s3 + 3.0 * s2;
    let h11 = s3 - s2;
    (0..y0.len())
        .map(|i| h00 * y0[i] + h * h10 * f0[i] + h01 * y1[i] + h * h11 * f1[i])
        .collect()
}

struct RhsAdapter<'a> {
    flow: &'a FlowSystem,
    /// Number of transported frame columns appended to the state.
    frame_cols: usize,
}

impl<'a> RhsAdapter<'a> {
    fn dim(&self) -> usize {
        self.flow.dim() * (1 + self.frame_cols)
    }

    fn eval(&self, t: F, y: &[F]) -> Result<Vec<F>, FlowError> {
        let n = self.flow.dim();
        if self.frame_cols == 0 {
            return self.flow.velocity(t, &y[..n]);
        }
        let (v, j) = self.flow.velocity_jacobian(t, &y[..n])?;
        let mut out = Vec::with_capacity(self.dim());
        out.extend_from_slice(&v);
        for c in 0..self.frame_cols {
            let col = &y[n * (1 + c)..n * (2 + c)];
            out.extend(j.mat_vec(col));
        }
        Ok(out)
    }
}

struct StepOutcome {
    y: Vec<F>,
    f: Vec<F>,
    h_used: F,
    h_next: F,
}

fn dopri5_step(
    rhs: &RhsAdapter,
    t: F,
    y: &[F],
    f0: &[F],
    mut h: F,
    tol: &FlowTolerances,
) -> Result<StepOutcome, FlowError> {
    let n = y.len();
    loop {
        let mut k: Vec<Vec<F>> = Vec::with_capacity(7);
        k.push(f0.to_vec());
        for i in 1..6 {
            let mut stage = y.to_vec();
            for (j, kj) in k.iter().enumerate().take(i) {
                let a = A[i][j];
                if a == 0.0 {
                    continue;
                }
                for idx in 0..n {
                    stage[idx] += h * a * kj[idx];
                }
            }
            k.push(rhs.eval(t + C[i] * h, &stage)?);
        }
        // 5th-order solution; the last A row holds its weights (FSAL).
        let mut y1 = y.to_vec();
        for (j, kj) in k.iter().enumerate() {
            let a = A[6][j];
            if a == 0.0 {
                continue;
            }
            for idx in 0..n {
                y1[idx] += h * a * kj[idx];
            }
        }
        let f1 = rhs.eval(t + h, &y1)?;
        k.push(f1.clone());
        // Embedded 4th-order error estimate.
        let mut err2 = 0.0;
        for idx in 0..n {
            let mut e = 0.0;
            for (j, kj) in k.iter().enumerate() {
                e += E[j] * kj[idx];
            }
            e *= h;
            let sc = tol.abs_tol + tol.rel_tol * y[idx].abs().max(y1[idx].abs());
            err2 += (e / sc) * (e / sc);
        }
        let err = (err2 / n as F).sqrt();
        if err <= 1.0 {
            let factor = if err == 0.0 {
                5.0
            } else {
                (0.9 * err.powf(-0.2)).clamp(0.2, 5.0)
            };
            let h_next = (h * factor).min(tol.h_max);
            return Ok(StepOutcome { y: y1, f: f1, h_used: h, h_next });
        }
        h *= (0.9 * err.powf(-0.2)).clamp(0.1, 0.9);
        if h < 1e-14 {
            return Err(FlowError::Stalled { t });
        }
    }
}

/// Integrate from `x0`, recording every accepted step, until a stop condition
/// fires or `t_max` elapses.
pub fn integrate(
    flow: &FlowSystem,
    tol: &FlowTolerances,
    x0: &[F],
    stop: &StopSpec,
) -> Result<Orbit, FlowError> {
    let rhs = RhsAdapter { flow, frame_cols: 0 };
    let (orbit, _frame) = drive(&rhs, tol, x0.to_vec(), stop, None)?;
    Ok(orbit)
}

/// Integrate while transporting an orthonormal frame by the variational
/// equation, re-orthonormalizing after every accepted step. The returned
/// frame is the transported one at the final state; re-orthonormalization
/// with a positive-diagonal triangular factor preserves its orientation
/// class.
pub fn transport_frame(
    flow: &FlowSystem,
    tol: &FlowTolerances,
    x0: &[F],
    frame: &Mat<F>,
    stop: &StopSpec,
) -> Result<(Orbit, Mat<F>), FlowError> {
    let n = flow.dim();
    assert_eq!(frame.rows, n, "frame rows must match dimension");
    let rhs = RhsAdapter { flow, frame_cols: frame.cols };
    let mut y0 = x0.to_vec();
    for c in 0..frame.cols {
        y0.extend(frame.col(c));
    }
    let (orbit, fr) = drive(&rhs, tol, y0, stop, Some(frame.cols))?;
    Ok((orbit, fr.expect("frame present")))
}

fn extract_frame(y: &[F], n: usize, cols: usize) -> Mat<F> {
    let mut fr = Mat::zeros(n, cols);
    for c in 0..cols {
        fr.set_col(c, &y[n * (1 + c)..n * (2 + c)]);
    }
    fr
}

fn drive(
    rhs: &RhsAdapter,
    tol: &FlowTolerances,
    y0: Vec<F>,
    stop: &StopSpec,
    frame_cols: Option<usize>,
) -> Result<(Orbit, Option<Mat<F>>), FlowError> {
    let flow = rhs.flow;
    let n = flow.dim();
    let domain = &flow.domain;
    let mut t = 0.0;
    let mut y = y0;
    let mut f = rhs.eval(t, &y)?;
    let mut h = tol.h_init.min(tol.h_max);
    let mut times = vec![t];
    let mut states = vec![y[..n].to_vec()];

    // A box domain is itself a region the orbit must stay in.
    let domain_box = match domain {
        Domain::Box { bounds } => Some(BoxRegion {
            lo: bounds.iter().map(|b| b.0).collect(),
            hi: bounds.iter().map(|b| b.1).collect(),
        }),
        Domain::Torus { .. } => None,
    };
    let inside = |x: &[F]| -> bool {
        if let Some(b) = &domain_box {
            if !b.contains(domain, x) {
                return false;
            }
        }
        if let Some(r) = stop.region {
            if !r.contains(domain, x) {
                return false;
            }
        }
        true
    };
    let accepts_any = |x: &[F]| -> Option<usize> {
        stop.targets
            .iter()
            .position(|tg| tg.accepts(domain, &flow.metric, x, tol))
    };

    let pack = |times: Vec<F>, states: Vec<Vec<F>>, reason: StopReason, y: &[F]| {
        let frame = frame_cols.map(|cols| {
            let fr = extract_frame(y, n, cols);
            if cols > 0 {
                linalg::orthonormalize(&fr, 1e-9).unwrap_or(fr)
            } else {
                fr
            }
        });
        (Orbit { times, states, reason }, frame)
    };

    if let Some(ti) = accepts_any(&y[..n]) {
        let reason = StopReason::Converged { target: ti, time: 0.0 };
        return Ok(pack(times, states, reason, &y));
    }
    if !inside(&y[..n]) {
        let reason = StopReason::LeftRegion { time: 0.0, boundary_point: y[..n].to_vec() };
        return Ok(pack(times, states, reason, &y));
    }

    loop {
        if let Some(tf) = stop.t_final {
            if t >= tf - 1e-14 {
                return Ok(pack(times, states, StopReason::TimeReached, &y));
            }
            h = h.min(tf - t);
        }
        if t >= tol.t_max {
            return Ok(pack(times, states, StopReason::Timeout, &y));
        }
        let out = dopri5_step(rhs, t, &y, &f, h, tol)?;
        let h_used = out.h_used;
        let t1 = t + h_used;
        let mid = hermite(&y, &out.y, &f, &out.f, h_used, 0.5);

        // Earliest event wins: probe the dense midpoint, then the endpoint.
        let mut event: Option<(F, Vec<F>, StopReason)> = None;
        for (s_probe, p) in [(0.5, mid), (1.0, out.y.clone())] {
            let tp = t + s_probe * h_used;
            if let Some(ti) = accepts_any(&p[..n]) {
                event = Some((tp, p, StopReason::Converged { target: ti, time: tp }));
                break;
            }
            if !inside(&p[..n]) {
                // Bisect the crossing on the Hermite interpolant.
                let mut lo = 0.0;
                let mut hi = s_probe;
                while (hi - lo) * h_used > tol.crossing_time {
                    let sm = 0.5 * (lo + hi);
                    let pm = hermite(&y, &out.y, &f, &out.f, h_used, sm);
                    if inside(&pm[..n]) {
                        lo = sm;
                    } else {
                        hi = sm;
                    }
                }
                let sc = 0.5 * (lo + hi);
                let pc = hermite(&y, &out.y, &f, &out.f, h_used, sc);
                let tc = t + sc * h_used;
                let reason =
                    StopReason::LeftRegion { time: tc, boundary_point: pc[..n].to_vec() };
                event = Some((tc, pc, reason));
                break;
            }
        }
        if let Some((te, pe, reason)) = event {
            times.push(te);
            states.push(pe[..n].to_vec());
            return Ok(pack(times, states, reason, &pe));
        }

        t = t1;
        y = out.y;
        h = out.h_next;
        // Re-orthonormalize the transported frame after the accepted step.
        if let Some(cols) = frame_cols {
            if cols > 0 {
                let fr = extract_frame(&y, n, cols);
                let q = linalg::orthonormalize(&fr, 1e-9)
                    .ok_or(FlowError::FrameCollapse { t })?;
                for c in 0..cols {
                    let col = q.col(c);
                    y[n * (1 + c)..n * (2 + c)].copy_from_slice(&col);
                }
                f = rhs.eval(t, &y)?;
            } else {
                f = out.f;
            }
        } else {
            f = out.f;
        }
        times.push(t);
        states.push(y[..n].to_vec());
    }
}

/// Integrate the flow for exactly time `t` and return the (reduced) endpoint.
pub fn flow_map(flow: &FlowSystem, tol: &FlowTolerances, x: &[F], t: F) -> Result<Vec<F>, FlowError> {
    let mut tols = tol.clone();
    tols.t_max = t + 1.0;
    let orbit = integrate(flow, &tols, x, &StopSpec::time(t))?;
    match orbit.reason {
        StopReason::TimeReached => Ok(flow.domain.reduce(orbit.last())),
        other => Err(FlowError::IncompleteFlow { detail: format!("{other:?}") }),
    }
}

/// A nondegenerate critical point with its metric-adapted spectral data.
#[derive(Debug, Clone)]
pub struct CriticalPoint {
    pub label: String,
    pub position: Vec<F>,
    pub value: F,
    /// Number of negative eigenvalues of the pair (Hess f, G).
    pub index: usize,
    /// Eigenvalues in ascending order.
    pub eigenvalues: Vec<F>,
    /// G-orthonormal eigenvectors of the negative eigenvalues (n x index).
    pub unstable_frame: Mat<F>,
    /// G-orthonormal eigenvectors of the positive eigenvalues.
    pub stable_frame: Mat<F>,
    /// Multiplier applied to the canonical frame orientation; flipping it
    /// must leave every homology verdict unchanged.
    pub orientation_sign: i8,
}

impl CriticalPoint {
    /// Launch point a small distance from the critical point along a unit
    /// combination of unstable directions.
    pub fn launch_point(&self, coeffs: &[F], radius: F) -> Vec<F> {
        assert_eq!(coeffs.len(), self.unstable_frame.cols);
        let mut p = self.position.clone();
        for (j, c) in coeffs.iter().enumerate() {
            let col = self.unstable_frame.col(j);
            for (pi, v) in p.iter_mut().zip(&col) {
                *pi += radius * c * v;
            }
        }
        p
    }

    /// Convergence target for forward orbits (approach must avoid the
    /// unstable directions).
    pub fn forward_target(&self) -> ConvergenceTarget {
        ConvergenceTarget {
            position: self.position.clone(),
            reject_frame: self.unstable_frame.clone(),
        }
    }

    /// Convergence target for orbits of the reversed flow.
    pub fn backward_target(&self) -> ConvergenceTarget {
        ConvergenceTarget {
            position: self.position.clone(),
            reject_frame: self.stable_frame.clone(),
        }
    }
}

/// A gradient flow together with its critical points: the input to every
/// counting routine.
#[derive(Debug, Clone)]
pub struct MorseData {
    pub flow: FlowSystem,
    pub points: Vec<CriticalPoint>,
}

impl MorseData {
    pub fn dim(&self) -> usize {
        self.flow.dim()
    }

    pub fn points_of_index(&self, k: usize) -> Vec<usize> {
        (0..self.points.len())
            .filter(|&i| self.points[i].index == k)
            .collect()
    }

    pub fn max_index(&self) -> usize {
        self.points.iter().map(|p| p.index).max().unwrap_or(0)
    }

    pub fn find_near(&self, position: &[F], r: F) -> Option<usize> {
        (0..self.points.len()).find(|&i| {
            self.flow
                .metric
                .norm(&self.flow.domain.displacement(&self.points[i].position, position))
                < r
        })
    }

    /// Flip the orientation sign of one point (used by covariance tests).
    pub fn flip_orientation(&mut self, i: usize) {
        self.points[i].orientation_sign = -self.points[i].orientation_sign;
    }
}

/// Newton search over a seeded grid for all critical points of a gradient
/// flow, with spectral classification. Fails on degenerate points.
pub fn find_critical_points(flow: &FlowSystem, tol: &FlowTolerances) -> Result<MorseData, FlowError> {
    let field = match &flow.spec {
        VectorSpec::Gradient { field } => field,
        _ => return Err(FlowError::NotGradient),
    };
    let n = flow.dim();
    let domain = &flow.domain;
    let scale = domain.scale();
    let seeds = domain.sample_grid(tol.grid_per_axis);
    let mut found: Vec<Vec<F>> = Vec::new();

    for seed in seeds {
        let mut x = seed.clone();
        let mut converged = false;
        for _ in 0..tol.newton_iters {
            let jet = field.jet2(domain, &x)?;
            let gnorm = linalg::norm(&jet.g);
            let h = jet.hessian();
            let Some(step) = h.solve(&jet.g) else { break };
            let step_norm = linalg::norm(&step);
            for i in 0..n {
                x[i] -= step[i];
            }
            if gnorm < tol.newton_residual * scale.max(1.0) && step_norm < 10.0 * tol.newton_step {
                converged = true;
                break;
            }
            if step_norm < tol.newton_step {
                let jet = field.jet2(domain, &x)?;
                converged = linalg::norm(&jet.g) < tol.newton_residual * scale.max(1.0);
                break;
            }
            if step_norm > 10.0 * scale {
                break; // diverging
            }
        }
        if !converged {
            continue;
        }
        let x = domain.reduce(&x);
        if let Domain::Box { bounds } = domain {
            let eps = 1e-9 * scale;
            let inside = x
                .iter()
                .zip(bounds)
                .all(|(xi, (lo, hi))| *xi >= lo - eps && *xi <= hi + eps);
            if !inside {
                continue;
            }
        }
        let duplicate = found
            .iter()
            .any(|p| linalg::norm(&domain.displacement(p, &x)) < tol.dedup);
        if !duplicate {
            found.push(x);
        }
    }

    // Canonical order: ascending critical value, then lexicographic position.
    let mut decorated: Vec<(F, Vec<F>)> = Vec::new();
    for p in found {
        let v = field.value(domain, &p)?;
        decorated.push((v, p));
    }
    decorated.sort_by(|a, b| {
        a.0.partial_cmp(&b.0)
            .unwrap()
            .then_with(|| a.1.partial_cmp(&b.1).unwrap())
    });

    let g = flow.metric.matrix(n);
    let mut points = Vec::new();
    for (i, (value, position)) in decorated.into_iter().enumerate() {
        let jet = field.jet2(domain, &position)?;
        let h = jet.hessian();
        let (eigenvalues, vecs) = linalg::generalized_sym_eigen(&h, &g).ok_or(FlowError::NotSpd)?;
        let max_abs = eigenvalues.iter().fold(0.0_f64, |m, v| m.max(v.abs()));
        let min_abs = eigenvalues.iter().fold(F::INFINITY, |m, v| m.min(v.abs()));
        if min_abs < tol.degeneracy * max_abs.max(1.0) {
            return Err(FlowError::Degenerate { position, eigenvalue: min_abs });
        }
        let index = eigenvalues.iter().filter(|&&v| v < 0.0).count();
        let mut unstable = Mat::zeros(n, index);
        for j in 0..index {
            unstable.set_col(j, &vecs.col(j));
        }
        let mut stable = Mat::zeros(n, n - index);
        for j in index..n {
            stable.set_col(j - index, &vecs.col(j));
        }
        points.push(CriticalPoint {
            label: format!("c{i}"),
            position,
            value,
            index,
            eigenvalues,
            unstable_frame: unstable,
            stable_frame: stable,
            orientation_sign: 1,
        });
    }
    Ok(MorseData { flow: flow.clone(), points })
}

/// One checked unstable branch in a Morse–Smale certificate.
#[derive(Debug, Clone)]
pub struct BranchCheck {
    pub source: usize,
    pub direction: Vec<F>,
    pub limit: Option<usize>,
    /// Closest approach to every other critical point of the same index.
    pub same_index_margins: Vec<(usize, F)>,
}

#[derive(Debug, Clone)]
pub struct MorseSmaleReport {
    pub ok: bool,
    pub checks: Vec<BranchCheck>,
    /// (source point, target point) of detected equal-index connections.
    pub violations: Vec<(usize, usize)>,
}

/// Check the Morse–Smale transversality condition for gradient flows in
/// dimension <= 2 by following every unstable branch of every saddle and
/// flagging limits of equal index (including homoclinic returns).
pub fn validate_morse_smale(data: &MorseData, tol: &FlowTolerances) -> Result<MorseSmaleReport, FlowError> {
    let n = data.dim();
    if n > 2 {
        return Err(FlowError::UnsupportedDimension {
            what: "Morse–Smale validation".to_string(),
            max: 2,
            got: n,
        });
    }
    let targets: Vec<ConvergenceTarget> = data.points.iter().map(|p| p.forward_target()).collect();
    let scale = data.flow.domain.scale();
    let mut checks = Vec::new();
    let mut violations = Vec::new();
    for (i, p) in data.points.iter().enumerate() {
        if p.index != 1 {
            continue; // only saddle-to-saddle orbits can break transversality here
        }
        for dir in [1.0, -1.0] {
            let start = p.launch_point(&[dir], tol.launch_radius * scale);
            let orbit = integrate(&data.flow, tol, &start, &StopSpec::targets(&targets))?;
            let limit = match orbit.reason {
                StopReason::Converged { target, .. } => Some(target),
                _ => None,
            };
            let mut margins = Vec::new();
            for (j, q) in data.points.iter().enumerate() {
                if j == i || q.index != p.index {
                    continue;
                }
                let (_, d) = orbit.closest_approach(&data.flow.domain, &data.flow.metric, &q.position);
                margins.push((j, d));
            }
            if let Some(t) = limit {
                if data.points[t].index == p.index {
                    violations.push((i, t));
                }
            }
            checks.push(BranchCheck {
                source: i,
                direction: vec![dir],
                limit,
                same_index_margins: margins,
            });
        }
    }
    Ok(MorseSmaleReport { ok: violations.is_empty(), checks, violations })
}

/// Deterministic seeded perturbation: first harmonics on a torus, a linear
/// tilt on a box. Returned as a new symbolic field so jets stay exact.
pub fn perturb_field(field: &ScalarField, domain: &Domain, seed: u64, amplitude: F) -> ScalarField {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = domain.dim();
    let mut terms: Vec<String> = Vec::new();
    match domain {
        Domain::Torus { .. } => {
            for i in 1..=n {
                let a: F = rng.gen_range(-1.0..1.0);
                let b: F = rng.gen_range(-1.0..1.0);
                terms.push(format!("({a:.17e})*cos(2*pi*x{i}) + ({b:.17e})*sin(2*pi*x{i})"));
            }
        }
        Domain::Box { .. } => {
            for i in 1..=n {
                let a: F = rng.gen_range(-1.0..1.0);
                terms.push(format!("({a:.17e})*x{i}"));
            }
        }
    }
    let bump = terms.join(" + ");
    let expr = format!("({amplitude:.17e})*({bump})");
    let pert = ScalarField::parse(&expr, n).expect("generated perturbation parses");
    ScalarField {
        expr: Expression::Add(Box::new(field.expr.clone()), Box::new(pert.expr)),
        dim: n,
    }
}

//! Induced chain maps of smooth, flow-time, and switch maps between Morse
//! data, by signed counting of intersection witnesses `p in W^u(x)` with
//! `h(p) in W^s(y)` for `|x| = |y|`; plus continuation maps, composition
//! with flow insertion, transversality perturbation, and homotopy checks.
//!
//! Membership in a stable manifold is decided by integration: either the
//! forward orbit of `h(p)` under the target flow converges to `y` (when
//! `W^s(y)` has positive dimension) or `h(p)` must land on `y` itself (when
//! `|y|` equals the target dimension). The witness sign compares the image
//! of the oriented unstable frame of `x`, pushed through the map and
//! relaxed along the target flow, against the canonical unstable frame of
//! `y`, fiber first. Three witness engines cover the index range:
//!
//! * index 0: the single candidate is `p = x` (a center test);
//! * index equal to both dimensions: `W^s(y) = {y}`, so witnesses are
//!   preimages of `y`, found by inverting the map stage by stage (flow
//!   stages by reversed integration, expression stages by seeded Newton);
//!   the sign factorizes exactly as `sign det U_x * sign det U_y *
//!   prod sign det J` over expression stages, because flow-time maps
//!   preserve orientation;
//! * intermediate index (a curve of `W^u(x)` in a surface): arc-length
//!   scanning of the branch orbits with signed-miss bracketing. The miss
//!   of a sample is measured over the whole composite trace (including the
//!   states of any flow stage) plus the relaxation orbit, so connections
//!   that pass a saddle mid-composite are still bracketed.

use crate::expr::{Domain, Expression, ExprError, ScalarField, SmoothMap};
use crate::flow::{
    find_critical_points, integrate, transport_frame, ConvergenceTarget, FlowError,
    FlowSystem, FlowTolerances, Metric, MorseData, Region, StopReason, StopSpec, UnionRegion,
    VectorSpec,
};
use crate::linalg::{self, norm, Mat};
use crate::moduli::{
    morse_complex, same_side, signum_i8, CountingOptions, ModuliError, MorseComplexResult,
    Probe, ProbeClass,
};
use crate::zalgebra::{
    equal_on_homology, verify_chain_map, AlgebraError, GradedIntMap, IntMat,
};
use crate::{F, Z};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum MapError {
    #[error(transparent)]
    Flow(#[from] FlowError),
    #[error(transparent)]
    Expr(#[from] ExprError),
    #[error(transparent)]
    Moduli(#[from] ModuliError),
    #[error(transparent)]
    Algebra(#[from] AlgebraError),
    #[error("precondition violated: {0}")]
    Precondition(String),
    #[error("non-transverse configuration: {0}; perturb the map or the data")]
    NonTransverse(String),
    #[error("induced map is not a chain map: {0}; a witness was missed or the data is not transverse")]
    NotChainMap(String),
    #[error("homotopy is not isolated: the sampled data changes between parameters {lo} and {hi}")]
    IsolationBreak { lo: F, hi: F },
    #[error("unsupported: {0}")]
    Unsupported(String),
}

/// One stage of a composite map.
#[derive(Debug, Clone)]
pub enum StageKind {
    /// An explicit coordinate map.
    Smooth(SmoothMap),
    /// The time-`time` map of a flow.
    FlowTime { flow: FlowSystem, time: F },
    /// The full switch map of a non-autonomous interpolation flow (its
    /// time-`duration` map).
    Switch(FlowSystem),
}

/// A stage together with the region its orbit segments must not leave.
#[derive(Debug, Clone)]
pub struct MapStage {
    pub kind: StageKind,
    pub region: Option<UnionRegion>,
}

impl MapStage {
    fn dims(&self) -> (usize, usize) {
        match &self.kind {
            StageKind::Smooth(h) => (h.source.dim(), h.target.dim()),
            StageKind::FlowTime { flow, .. } | StageKind::Switch(flow) => {
                (flow.dim(), flow.dim())
            }
        }
    }

    fn region_dyn(&self) -> Option<&dyn Region> {
        self.region.as_ref().map(|r| r as &dyn Region)
    }
}

/// A composite map, applied left to right.
#[derive(Debug, Clone)]
pub struct MapChain {
    pub stages: Vec<MapStage>,
}

/// Integrate to exactly `time`; `None` when the orbit leaves the region
/// (or the box domain) first.
fn timed_endpoint(
    flow: &FlowSystem,
    tol: &FlowTolerances,
    x: &[F],
    time: F,
    region: Option<&dyn Region>,
) -> Result<Option<Vec<F>>, FlowError> {
    let mut tt = tol.clone();
    tt.t_max = time + 1.0;
    let stop = StopSpec { targets: &[], region, t_final: Some(time) };
    let orbit = integrate(flow, &tt, x, &stop)?;
    match orbit.reason {
        StopReason::TimeReached => Ok(Some(flow.domain.reduce(orbit.last()))),
        StopReason::LeftRegion { .. } => Ok(None),
        other => Err(FlowError::IncompleteFlow { detail: format!("{other:?}") }),
    }
}

impl MapChain {
    pub fn smooth(h: SmoothMap) -> Self {
        MapChain { stages: vec![MapStage { kind: StageKind::Smooth(h), region: None }] }
    }

    pub fn identity(domain: Domain) -> Self {
        MapChain::smooth(SmoothMap::identity(domain))
    }

    pub fn flow_time(flow: FlowSystem, time: F, region: Option<UnionRegion>) -> Self {
        MapChain { stages: vec![MapStage { kind: StageKind::FlowTime { flow, time }, region }] }
    }

    /// The switch map interpolating between two gradient data over `[0,
    /// duration]`.
    pub fn switch_between(
        a: &MorseData,
        b: &MorseData,
        duration: F,
        region: Option<UnionRegion>,
    ) -> Result<Self, MapError> {
        let fa = a
            .flow
            .field()
            .ok_or_else(|| MapError::Precondition("switch requires gradient data".into()))?;
        let fb = b
            .flow
            .field()
            .ok_or_else(|| MapError::Precondition("switch requires gradient data".into()))?;
        if a.flow.domain != b.flow.domain {
            return Err(MapError::Precondition("switch data must share the domain".into()));
        }
        let flow = FlowSystem::switch(
            fa.clone(),
            fb.clone(),
            duration,
            a.flow.domain.clone(),
            a.flow.metric.clone(),
        );
        Ok(MapChain { stages: vec![MapStage { kind: StageKind::Switch(flow), region }] })
    }

    pub fn then(mut self, stage: MapStage) -> Self {
        self.stages.push(stage);
        self
    }

    pub fn source_dim(&self) -> usize {
        self.stages.first().map(|s| s.dims().0).unwrap_or(0)
    }

    pub fn target_dim(&self) -> usize {
        self.stages.last().map(|s| s.dims().1).unwrap_or(0)
    }

    fn validate(&self) -> Result<(), MapError> {
        if self.stages.is_empty() {
            return Err(MapError::Precondition("empty map chain".into()));
        }
        for w in self.stages.windows(2) {
            if w[0].dims().1 != w[1].dims().0 {
                return Err(MapError::Precondition(format!(
                    "stage dimensions do not chain: {} -> {}",
                    w[0].dims().1,
                    w[1].dims().0
                )));
            }
        }
        Ok(())
    }

    /// Apply the chain; `None` when a flow stage leaves its region.
    pub fn apply(&self, tol: &FlowTolerances, p: &[F]) -> Result<Option<Vec<F>>, MapError> {
        let mut x = p.to_vec();
        for st in &self.stages {
            match &st.kind {
                StageKind::Smooth(h) => {
                    x = h.apply(&x)?;
                }
                StageKind::FlowTime { flow, time } => {
                    match timed_endpoint(flow, tol, &x, *time, st.region_dyn())? {
                        Some(q) => x = q,
                        None => return Ok(None),
                    }
                }
                StageKind::Switch(flow) => {
                    let time = switch_duration(flow);
                    match timed_endpoint(flow, tol, &x, time, st.region_dyn())? {
                        Some(q) => x = q,
                        None => return Ok(None),
                    }
                }
            }
        }
        Ok(Some(x))
    }

    /// Apply the chain, also returning every state sampled along its flow
    /// stages (used by the signed-miss bracketing of witness scans).
    fn apply_traced(
        &self,
        tol: &FlowTolerances,
        p: &[F],
    ) -> Result<Option<(Vec<F>, Vec<Vec<F>>)>, MapError> {
        let mut x = p.to_vec();
        let mut trace = Vec::new();
        for st in &self.stages {
            let (flow, time) = match &st.kind {
                StageKind::Smooth(h) => {
                    x = h.apply(&x)?;
                    continue;
                }
                StageKind::FlowTime { flow, time } => (flow, *time),
                StageKind::Switch(flow) => (flow, switch_duration(flow)),
            };
            let mut tt = tol.clone();
            tt.t_max = time + 1.0;
            let stop = StopSpec { targets: &[], region: st.region_dyn(), t_final: Some(time) };
            let orbit = integrate(flow, &tt, &x, &stop)?;
            match orbit.reason {
                StopReason::TimeReached => {
                    x = flow.domain.reduce(orbit.last());
                    trace.extend(orbit.states);
                }
                StopReason::LeftRegion { .. } => return Ok(None),
                other => {
                    return Err(MapError::Flow(FlowError::IncompleteFlow {
                        detail: format!("{other:?}"),
                    }))
                }
            }
        }
        Ok(Some((x, trace)))
    }

    /// Push an orthonormal frame through the chain. The orientation class
    /// is preserved stage by stage (expression stages re-orthonormalize the
    /// Jacobian image, flow stages transport by the variational equation).
    /// `None` when a flow stage leaves its region; an error when the frame
    /// collapses (the map is not an immersion along the frame there).
    pub fn push_frame(
        &self,
        tol: &FlowTolerances,
        p: &[F],
        frame: &Mat<F>,
    ) -> Result<Option<(Vec<F>, Mat<F>)>, MapError> {
        let mut x = p.to_vec();
        let mut fr = frame.clone();
        for st in &self.stages {
            match &st.kind {
                StageKind::Smooth(h) => {
                    let (q, j) = h.apply_jet(&x)?;
                    let pushed = j.mat_mat(&fr);
                    if fr.cols > 0 {
                        fr = linalg::orthonormalize(&pushed, 1e-12).ok_or_else(|| {
                            MapError::NonTransverse(
                                "the differential collapses the unstable frame".into(),
                            )
                        })?;
                    } else {
                        fr = Mat::zeros(q.len(), 0);
                    }
                    x = q;
                }
                StageKind::FlowTime { .. } | StageKind::Switch(..) => {
                    let (flow, time) = match &st.kind {
                        StageKind::FlowTime { flow, time } => (flow, *time),
                        StageKind::Switch(flow) => (flow, switch_duration(flow)),
                        StageKind::Smooth(_) => unreachable!(),
                    };
                    let mut tt = tol.clone();
                    tt.t_max = time + 1.0;
                    let stop =
                        StopSpec { targets: &[], region: st.region_dyn(), t_final: Some(time) };
                    let (orbit, f2) = transport_frame(flow, &tt, &x, &fr, &stop)?;
                    match orbit.reason {
                        StopReason::TimeReached => {
                            x = flow.domain.reduce(orbit.last());
                            fr = f2;
                        }
                        StopReason::LeftRegion { .. } => return Ok(None),
                        other => {
                            return Err(MapError::Flow(FlowError::IncompleteFlow {
                                detail: format!("{other:?}"),
                            }))
                        }
                    }
                }
            }
        }
        Ok(Some((x, fr)))
    }

    /// All preimages of `y` with multiplicities, found stage by stage from
    /// the back. Flow stages are inverted by reversed integration (this is
    /// the well-conditioned direction: it tracks the repelling structures
    /// the unstable witnesses live on); expression stages by damped Newton
    /// from a seed grid, so non-injective maps contribute every sheet.
    /// Candidates whose inverted orbit segments leave their regions are
    /// dropped. Reversed flow segments contract toward repellers faster
    /// than float resolution, so distinct preimages can collapse to one
    /// representable point; merged candidates add their multiplicities.
    fn preimages(
        &self,
        tol: &FlowTolerances,
        y: &[F],
        opts: &CountingOptions,
    ) -> Result<Vec<(Vec<F>, usize)>, MapError> {
        let mut zs: Vec<(Vec<F>, usize)> = vec![(y.to_vec(), 1)];
        for st in self.stages.iter().rev() {
            let (source_domain, candidates): (Domain, Vec<(Vec<F>, usize)>) = match &st.kind
            {
                StageKind::Smooth(h) => {
                    let mut found = Vec::new();
                    for (z, m) in &zs {
                        for p in newton_preimages(h, z, tol, opts)? {
                            found.push((p, *m));
                        }
                    }
                    (h.source.clone(), found)
                }
                StageKind::FlowTime { flow, time } => {
                    let rev = flow.reverse();
                    let mut found = Vec::new();
                    for (z, m) in &zs {
                        if let Some(p) = timed_endpoint(&rev, tol, z, *time, st.region_dyn())? {
                            found.push((p, *m));
                        }
                    }
                    (flow.domain.clone(), found)
                }
                StageKind::Switch(flow) => {
                    let rev = flow.reverse();
                    let time = switch_duration(flow);
                    let mut found = Vec::new();
                    for (z, m) in &zs {
                        if let Some(p) = timed_endpoint(&rev, tol, z, time, st.region_dyn())? {
                            found.push((p, *m));
                        }
                    }
                    (flow.domain.clone(), found)
                }
            };
            let mut next: Vec<(Vec<F>, usize)> = Vec::new();
            for (p, m) in candidates {
                match next
                    .iter_mut()
                    .find(|(q, _)| source_domain.distance(q, &p) < tol.dedup)
                {
                    Some((_, mm)) => *mm += m,
                    None => next.push((p, m)),
                }
            }
            zs = next;
        }
        Ok(zs)
    }

    /// Product of the expression-stage Jacobian determinant signs along the
    /// forward pass through `p`. Flow stages are orientation-preserving
    /// diffeomorphisms, so they contribute `+1` exactly; the returned
    /// magnitude is the smallest expression-stage `|det|` (1 when there is
    /// none), reported as a conditioning margin.
    fn jacobian_sign_along(
        &self,
        tol: &FlowTolerances,
        p: &[F],
    ) -> Result<Option<(i8, F)>, MapError> {
        let mut x = p.to_vec();
        let mut sign = 1i8;
        let mut min_det = F::INFINITY;
        for st in &self.stages {
            match &st.kind {
                StageKind::Smooth(h) => {
                    let (q, j) = h.apply_jet(&x)?;
                    if j.rows != j.cols {
                        return Err(MapError::Unsupported(
                            "orientation sign of a non-square expression stage".into(),
                        ));
                    }
                    let d = j.det();
                    if d == 0.0 {
                        return Err(MapError::NonTransverse(
                            "singular expression-stage Jacobian at a witness".into(),
                        ));
                    }
                    sign *= signum_i8(d);
                    min_det = min_det.min(d.abs());
                    x = q;
                }
                StageKind::FlowTime { flow, time } => {
                    match timed_endpoint(flow, tol, &x, *time, st.region_dyn())? {
                        Some(q) => x = q,
                        None => return Ok(None),
                    }
                }
                StageKind::Switch(flow) => {
                    let time = switch_duration(flow);
                    match timed_endpoint(flow, tol, &x, time, st.region_dyn())? {
                        Some(q) => x = q,
                        None => return Ok(None),
                    }
                }
            }
        }
        Ok(Some((sign, if min_det.is_finite() { min_det } else { 1.0 })))
    }
}

fn switch_duration(flow: &FlowSystem) -> F {
    match &flow.spec {
        VectorSpec::Switch { duration, .. } => *duration,
        _ => unreachable!("switch stage holds a switch flow"),
    }
}

/// Newton search over a seeded grid for every solution of `h(p) = z`.
fn newton_preimages(
    h: &SmoothMap,
    z: &[F],
    tol: &FlowTolerances,
    opts: &CountingOptions,
) -> Result<Vec<Vec<F>>, MapError> {
    let n = h.source.dim();
    if h.target.dim() != n {
        return Err(MapError::Unsupported(
            "preimage search of a non-square expression stage".into(),
        ));
    }
    let scale = h.source.scale().max(1.0);
    let cap = 0.25 * scale;
    let mut sols: Vec<Vec<F>> = Vec::new();
    for seed in h.source.sample_grid(opts.preimage_grid) {
        let mut p = seed;
        let mut converged = false;
        for _ in 0..40 {
            let (q, j) = h.apply_jet(&p)?;
            let d = h.target.displacement(z, &q);
            if norm(&d) < 1e-11 * scale {
                converged = true;
                break;
            }
            let Some(mut step) = j.solve(&d) else {
                break;
            };
            let sn = norm(&step);
            if sn > cap {
                for s in step.iter_mut() {
                    *s *= cap / sn;
                }
            }
            for (pi, s) in p.iter_mut().zip(&step) {
                *pi += s;
            }
            if !in_domain(&h.source, &p, 0.5 * scale) {
                break;
            }
        }
        if !converged {
            continue;
        }
        let p = h.source.reduce(&p);
        if !in_domain(&h.source, &p, 1e-9) {
            continue;
        }
        if !sols.iter().any(|s| h.source.distance(s, &p) < tol.dedup) {
            sols.push(p);
        }
    }
    sols.sort_by(|a, b| a.partial_cmp(b).expect("finite coordinates"));
    Ok(sols)
}

fn in_domain(domain: &Domain, p: &[F], slack: F) -> bool {
    match domain {
        Domain::Torus { .. } => true,
        Domain::Box { bounds } => p
            .iter()
            .zip(bounds)
            .all(|(&x, (a, b))| x >= a - slack && x <= b + slack),
    }
}

/// How a witness was located.
#[derive(Debug, Clone, PartialEq)]
pub enum WitnessKind {
    /// The source critical point itself.
    Center,
    /// Root of the signed miss along an unstable branch.
    Curve,
    /// Preimage of the target point.
    Point,
}

/// One verified intersection point `p in W^u(x)` with `h(p) in W^s(y)`.
#[derive(Debug, Clone)]
pub struct MapWitness {
    pub source: usize,
    pub target: usize,
    /// The witness point in the source domain, reduced.
    pub point: Vec<F>,
    pub kind: WitnessKind,
    /// Number of mathematically distinct intersection points this witness
    /// represents (collapsed preimages through strongly contracting
    /// reversed flow segments share one representable point).
    pub multiplicity: usize,
    /// Orientation sign with canonical frames (orientation multipliers of
    /// the endpoints not folded in).
    pub sign_canonical: i8,
    /// Determinant of the frame pairing at the target (conditioning).
    pub pairing_det: F,
    /// Parameter-space transversality margin where one exists, otherwise
    /// the pairing magnitude.
    pub transversality_margin: F,
}

/// Counted intersections for one source-target pair.
#[derive(Debug, Clone)]
pub struct MapCount {
    pub source: usize,
    pub target: usize,
    /// Sum of canonical witness signs.
    pub eps_sum: i64,
    pub witnesses: Vec<MapWitness>,
}

/// The assembled chain map plus the witness data behind it.
#[derive(Debug, Clone)]
pub struct InducedMapResult {
    pub map: GradedIntMap,
    pub counts: Vec<MapCount>,
}

/// Parametrization of one unstable branch: integrated orbit up to the
/// convergence horizon `t_end`, then a chord segment from the last state to
/// the limit point, traversed over one extra parameter unit.
struct BranchParam {
    start: Vec<F>,
    t_end: F,
    last: Vec<F>,
    endpoint: Option<Vec<F>>,
}

const CHORD_SPAN: F = 1.0;
const CHORD_TAIL_SAMPLES: usize = 16;

struct MapCounter<'a> {
    chain: &'a MapChain,
    a: &'a MorseData,
    b: &'a MorseData,
    region_a: Option<&'a dyn Region>,
    region_b: Option<&'a dyn Region>,
    tol: &'a FlowTolerances,
    opts: &'a CountingOptions,
    /// Forward convergence targets of every target critical point.
    b_targets: Vec<ConvergenceTarget>,
    /// Backward convergence targets of every source critical point.
    a_back_targets: Vec<ConvergenceTarget>,
}

impl<'a> MapCounter<'a> {
    fn new(
        chain: &'a MapChain,
        a: &'a MorseData,
        b: &'a MorseData,
        region_a: Option<&'a dyn Region>,
        region_b: Option<&'a dyn Region>,
        tol: &'a FlowTolerances,
        opts: &'a CountingOptions,
    ) -> Self {
        MapCounter {
            chain,
            a,
            b,
            region_a,
            region_b,
            tol,
            opts,
            b_targets: b.points.iter().map(|p| p.forward_target()).collect(),
            a_back_targets: a.points.iter().map(|p| p.backward_target()).collect(),
        }
    }

    fn snap(&self) -> F {
        1e-6 * self.b.flow.domain.scale()
    }

    /// Closest-approach distance and signed miss of a state set relative to
    /// target `y`: the unstable coordinate of the displacement at the
    /// closest approach. `gated` restricts the miss to approaches within
    /// the capture radius (used when the miss is an exact-landing
    /// coordinate, where far values would wrap).
    fn miss_over(&self, states: &[Vec<F>], y: usize, gated: bool) -> (F, Option<F>) {
        let domain = &self.b.flow.domain;
        let metric = &self.b.flow.metric;
        let py = &self.b.points[y];
        let mut best: Option<(F, F)> = None;
        for s in states {
            let d = domain.displacement(&py.position, s);
            let dist = metric.norm(&d);
            if best.map_or(true, |(bd, _)| dist < bd) {
                let coord = if py.unstable_frame.cols == 0 {
                    0.0
                } else {
                    metric.inner(&py.unstable_frame.col(0), &d)
                };
                best = Some((dist, coord));
            }
        }
        let Some((dist, coord)) = best else {
            return (F::INFINITY, None);
        };
        if py.unstable_frame.cols == 0
            || (gated && dist > self.opts.capture_radius * domain.scale())
        {
            return (dist, None);
        }
        (dist, Some(coord))
    }

    /// Composite probe of one source point: apply the chain, then classify
    /// the forward target-flow orbit. `None` when a stage leaves its
    /// region. `exact` targets (index equal to the target dimension) skip
    /// the orbit and use gated landing misses instead.
    ///
    /// The miss vector carries two channels per target: slots `0..ys.len()`
    /// measure over the full composite trace (they flip across witnesses
    /// whose target approach happens inside a chain stage), and slots
    /// `ys.len()..` measure over the final probe orbit alone (they flip
    /// across witnesses whose early trace already runs close to the target,
    /// shadowing the closest approach — the generic situation for
    /// continuation between nearby data).
    fn composite_probe(
        &self,
        p: &[F],
        ys: &[usize],
        exact: bool,
    ) -> Result<Option<Probe>, MapError> {
        let Some((q, mut states)) = self.chain.apply_traced(self.tol, p)? else {
            return Ok(None);
        };
        if exact {
            let (dist, miss) =
                ys.iter().map(|&y| self.miss_over(&[q.clone()], y, true)).unzip();
            return Ok(Some(Probe { class: ProbeClass::Stopped, miss, dist }));
        }
        let stop =
            StopSpec { targets: &self.b_targets, region: self.region_b, t_final: None };
        let orbit = integrate(&self.b.flow, self.tol, &q, &stop)?;
        let class = match orbit.reason {
            StopReason::Converged { target, .. } => ProbeClass::Converged(target),
            _ => ProbeClass::Stopped,
        };
        let (mut dist, mut miss): (Vec<F>, Vec<Option<F>>) =
            ys.iter().map(|&y| self.miss_over(&orbit.states, y, false)).unzip();
        states.extend(orbit.states);
        let (full_dist, full_miss): (Vec<F>, Vec<Option<F>>) =
            ys.iter().map(|&y| self.miss_over(&states, y, false)).unzip();
        dist.splice(0..0, full_dist);
        miss.splice(0..0, full_miss);
        Ok(Some(Probe { class, miss, dist }))
    }

    /// Reject configurations where the image of a witness candidate lies on
    /// the stable manifold of a point of higher index (those intersections
    /// are empty for transverse maps).
    fn guard_class(&self, probe: &Probe, k: usize) -> Result<(), MapError> {
        if let ProbeClass::Converged(z) = probe.class {
            if self.b.points[z].index > k {
                return Err(MapError::NonTransverse(format!(
                    "the image orbit of an index-{k} witness search converges to '{}' of index {}",
                    self.b.points[z].label, self.b.points[z].index
                )));
            }
        }
        Ok(())
    }

    /// Relax a pushed frame along the target flow into the convergence ball
    /// of `y` and compute the pairing determinant there against the
    /// canonical unstable frame of `y`.
    fn relaxed_pairing(
        &self,
        q0: &[F],
        frame: &Mat<F>,
        y: usize,
    ) -> Result<Option<F>, MapError> {
        let py = &self.b.points[y];
        let k = py.index;
        let metric = &self.b.flow.metric;
        let near_exact = self.b.flow.domain.distance(q0, &py.position) < self.snap();
        let fr = if k == self.b.dim() {
            if !near_exact {
                return Ok(None);
            }
            frame.clone()
        } else if near_exact {
            // Already at the target within frame resolution; relaxation
            // over such a segment is a no-op (and the convergence cone is
            // noise-dominated there).
            frame.clone()
        } else {
            let targets = [py.forward_target()];
            let stop =
                StopSpec { targets: &targets, region: self.region_b, t_final: None };
            let (orbit, fr) = transport_frame(&self.b.flow, self.tol, q0, frame, &stop)?;
            if !matches!(orbit.reason, StopReason::Converged { target: 0, .. }) {
                return Ok(None);
            }
            fr
        };
        let mut m = Mat::zeros(k, k);
        for j in 0..k {
            let fj = fr.col(j);
            for i in 0..k {
                m[(i, j)] = metric.inner(&py.unstable_frame.col(i), &fj);
            }
        }
        Ok(Some(m.det()))
    }

    /// Center witness: is `x` itself an intersection point for some target
    /// of equal index?
    fn center_witness(&self, x: usize, ys: &[usize]) -> Result<Option<MapWitness>, MapError> {
        let px = &self.a.points[x];
        let k = px.index;
        let exact = k == self.b.dim();
        let Some(q0) = self.chain.apply(self.tol, &px.position)? else {
            return Ok(None);
        };
        // A landing within snap distance of a critical point decides the
        // configuration outright (probe classification is noise-dominated
        // that close).
        let snapped = (0..self.b.points.len()).find(|&z| {
            self.b.flow.domain.distance(&q0, &self.b.points[z].position) < self.snap()
        });
        let target = match snapped {
            Some(z) if self.b.points[z].index > k => {
                return Err(MapError::NonTransverse(format!(
                    "the image of '{}' lands on '{}' of higher index {}",
                    px.label, self.b.points[z].label, self.b.points[z].index
                )));
            }
            Some(z) if self.b.points[z].index == k && ys.contains(&z) => Some(z),
            Some(_) => None,
            None if exact => None,
            None => {
                let probe = self.composite_probe(&px.position, ys, exact)?;
                let Some(probe) = probe else { return Ok(None) };
                self.guard_class(&probe, k)?;
                match probe.class {
                    ProbeClass::Converged(z)
                        if self.b.points[z].index == k && ys.contains(&z) =>
                    {
                        Some(z)
                    }
                    _ => None,
                }
            }
        };
        let Some(y) = target else { return Ok(None) };
        if k == 0 {
            return Ok(Some(MapWitness {
                source: x,
                target: y,
                point: px.position.clone(),
                kind: WitnessKind::Center,
                multiplicity: 1,
                sign_canonical: 1,
                pairing_det: 1.0,
                transversality_margin: 1.0,
            }));
        }
        let pushed = self.chain.push_frame(self.tol, &px.position, &px.unstable_frame)?;
        let Some((q0, frame)) = pushed else { return Ok(None) };
        let det = self.relaxed_pairing(&q0, &frame, y)?.ok_or_else(|| {
            MapError::NonTransverse(format!(
                "frame relaxation at the center witness of '{}' failed",
                px.label
            ))
        })?;
        if det == 0.0 {
            return Err(MapError::NonTransverse(format!(
                "degenerate frame pairing at the center witness of '{}'",
                px.label
            )));
        }
        Ok(Some(MapWitness {
            source: x,
            target: y,
            point: px.position.clone(),
            kind: WitnessKind::Center,
            multiplicity: 1,
            sign_canonical: signum_i8(det),
            pairing_det: det,
            transversality_margin: det.abs(),
        }))
    }

    /// Arc-length subsample of an orbit: indices spaced roughly uniformly
    /// in accumulated chord length, always keeping both ends.
    fn arc_subsample(&self, states: &[Vec<F>]) -> Vec<usize> {
        let m = states.len();
        let want = self.opts.curve_samples.max(2);
        if m <= want {
            return (0..m).collect();
        }
        let domain = &self.a.flow.domain;
        let metric = &self.a.flow.metric;
        let mut cum = Vec::with_capacity(m);
        let mut acc = 0.0;
        cum.push(0.0);
        for i in 1..m {
            acc += metric.norm(&domain.displacement(&states[i], &states[i - 1]));
            cum.push(acc);
        }
        let total = acc;
        if total == 0.0 {
            return vec![0, m - 1];
        }
        let mut out = vec![0usize];
        let mut next_len = total / (want - 1) as F;
        for (i, &c) in cum.iter().enumerate().skip(1) {
            if c >= next_len || i == m - 1 {
                if *out.last().unwrap() != i {
                    out.push(i);
                }
                next_len += total / (want - 1) as F;
            }
        }
        out
    }

    /// Witnesses along the two unstable branches of an index-1 source.
    fn curve_witnesses(&self, x: usize, ys: &[usize]) -> Result<Vec<MapWitness>, MapError> {
        let px = &self.a.points[x];
        let k = px.index;
        debug_assert_eq!(k, 1);
        let exact = k == self.b.dim();
        let radius = self.tol.launch_radius * self.a.flow.domain.scale();
        let a_targets: Vec<ConvergenceTarget> =
            self.a.points.iter().map(|p| p.forward_target()).collect();
        let mut out: Vec<MapWitness> = Vec::new();
        for branch in [1.0_f64, -1.0] {
            let start = px.launch_point(&[branch], radius);
            let stop =
                StopSpec { targets: &a_targets, region: self.region_a, t_final: None };
            let orbit = integrate(&self.a.flow, self.tol, &start, &stop)?;
            let endpoint = match orbit.reason {
                StopReason::Converged { target, .. } => {
                    Some(self.a.points[target].position.clone())
                }
                _ => None,
            };
            let par = BranchParam {
                start,
                t_end: *orbit.times.last().expect("orbit has states"),
                last: orbit.last().to_vec(),
                endpoint,
            };
            let picks = self.arc_subsample(&orbit.states);
            let mut samples: Vec<(F, Vec<F>)> = picks
                .iter()
                .map(|&i| (orbit.times[i], orbit.states[i].clone()))
                .collect();
            // The orbit stops at the convergence radius of its limit point;
            // witnesses may sit on the remaining sliver of the branch
            // closure. Cover it with a short chord tail into the ball.
            if par.endpoint.is_some() {
                for j in 1..=CHORD_TAIL_SAMPLES {
                    let tau = par.t_end + CHORD_SPAN * j as F / CHORD_TAIL_SAMPLES as F;
                    samples.push((tau, self.branch_point(&par, tau)?));
                }
            }
            let probes: Vec<Option<Probe>> = samples
                .par_iter()
                .map(|(_, p)| self.composite_probe(p, ys, exact))
                .collect::<Result<Vec<_>, _>>()?;
            for pr in probes.iter().flatten() {
                if !exact {
                    self.guard_class(pr, k)?;
                }
            }
            // Direct hits at a sample are witnesses themselves.
            let mut hit_at: Vec<bool> = vec![false; samples.len()];
            for (i, pr) in probes.iter().enumerate() {
                if let Some(pr) = pr {
                    if let ProbeClass::Converged(z) = pr.class {
                        if self.b.points[z].index == k && ys.contains(&z) {
                            hit_at[i] = true;
                            if let Some(w) = self.certify_curve_witness(
                                x,
                                z,
                                branch,
                                &par,
                                samples[i].0,
                                ys,
                                exact,
                            )? {
                                out.push(w);
                            }
                        }
                    }
                }
            }
            for i in 0..samples.len().saturating_sub(1) {
                if hit_at[i] || hit_at[i + 1] {
                    continue;
                }
                let pa = &probes[i];
                let pb = &probes[i + 1];
                let same = match (pa, pb) {
                    (Some(a), Some(b)) => same_side(a, b),
                    (None, None) => true,
                    _ => false,
                };
                if same {
                    continue;
                }
                if let Some(w) = self.bisect_curve_bracket(
                    x,
                    branch,
                    &par,
                    samples[i].0,
                    samples[i + 1].0,
                    pa.clone(),
                    ys,
                    exact,
                )? {
                    out.push(w);
                }
            }
        }
        // Collapse duplicates (a sample sitting exactly on a crossing is
        // found by both the direct-hit path and an adjacent bracket).
        let mut unique: Vec<MapWitness> = Vec::new();
        for w in out {
            if !unique.iter().any(|u| {
                u.target == w.target
                    && self.a.flow.domain.distance(&u.point, &w.point) < self.tol.dedup
            }) {
                unique.push(w);
            }
        }
        Ok(unique)
    }

    /// Point on an unstable branch at parameter `tau`: re-integration up to
    /// the orbit horizon, chord interpolation toward the limit point past
    /// it.
    fn branch_point(&self, par: &BranchParam, tau: F) -> Result<Vec<F>, MapError> {
        if tau <= 0.0 {
            return Ok(par.start.clone());
        }
        if tau <= par.t_end {
            return timed_endpoint(&self.a.flow, self.tol, &par.start, tau, self.region_a)?
                .ok_or_else(|| {
                    MapError::Precondition("branch re-integration left the region".into())
                });
        }
        let Some(end) = &par.endpoint else {
            return Ok(par.last.clone());
        };
        let domain = &self.a.flow.domain;
        let s = ((tau - par.t_end) / CHORD_SPAN).clamp(0.0, 1.0);
        let d = domain.displacement(end, &par.last);
        let p: Vec<F> = par.last.iter().zip(&d).map(|(&c, &di)| c + s * di).collect();
        Ok(domain.reduce(&p))
    }

    #[allow(clippy::too_many_arguments)]
    fn bisect_curve_bracket(
        &self,
        x: usize,
        branch: F,
        par: &BranchParam,
        mut ta: F,
        mut tb: F,
        mut pa: Option<Probe>,
        ys: &[usize],
        exact: bool,
    ) -> Result<Option<MapWitness>, MapError> {
        let k = self.a.points[x].index;
        while tb - ta > self.opts.theta_tol {
            let tm = 0.5 * (ta + tb);
            let pm = self.composite_probe(&self.branch_point(par, tm)?, ys, exact)?;
            if let Some(pr) = &pm {
                if !exact {
                    self.guard_class(pr, k)?;
                    if let ProbeClass::Converged(z) = pr.class {
                        if self.b.points[z].index == k && ys.contains(&z) {
                            return self
                                .certify_curve_witness(x, z, branch, par, tm, ys, exact);
                        }
                    }
                }
            }
            let same = match (&pm, &pa) {
                (Some(a), Some(b)) => same_side(a, b),
                (None, None) => true,
                _ => false,
            };
            if same {
                ta = tm;
                pa = pm;
            } else {
                tb = tm;
            }
        }
        let t_star = 0.5 * (ta + tb);
        if exact {
            // Attribute by the closest landing among the gated targets.
            let p = self.branch_point(par, t_star)?;
            let Some(q) = self.chain.apply(self.tol, &p)? else {
                return Ok(None);
            };
            let snap = self.snap();
            let y = ys
                .iter()
                .copied()
                .min_by(|&u, &v| {
                    let du = self.b.flow.domain.distance(&q, &self.b.points[u].position);
                    let dv = self.b.flow.domain.distance(&q, &self.b.points[v].position);
                    du.partial_cmp(&dv).expect("finite distances")
                })
                .filter(|&y| {
                    self.b.flow.domain.distance(&q, &self.b.points[y].position) < snap
                });
            let Some(y) = y else { return Ok(None) };
            return self.certify_curve_witness(x, y, branch, par, t_star, ys, exact);
        }
        // The deep orbit follows a stable manifold; find out whose.
        let deep = self.composite_probe(&self.branch_point(par, t_star)?, ys, exact)?;
        match deep {
            Some(pr) => match pr.class {
                ProbeClass::Converged(z)
                    if self.b.points[z].index == k && ys.contains(&z) =>
                {
                    self.certify_curve_witness(x, z, branch, par, t_star, ys, exact)
                }
                // The bracket separated image basins through a structure
                // that is not an equal-index connection (a region boundary
                // or a far-miss sign flip); it contributes no witness.
                _ => Ok(None),
            },
            None => Ok(None),
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn certify_curve_witness(
        &self,
        x: usize,
        y: usize,
        branch: F,
        par: &BranchParam,
        tau: F,
        ys: &[usize],
        exact: bool,
    ) -> Result<Option<MapWitness>, MapError> {
        let p = self.branch_point(par, tau)?;
        // Oriented tangent of the branch at the witness: the unit velocity,
        // times the branch sign so that it extends the canonical frame of
        // the source across both branches.
        let v = self.a.flow.velocity(0.0, &p)?;
        let vn = self.a.flow.metric.norm(&v);
        if vn == 0.0 {
            return Err(MapError::NonTransverse(
                "vanishing branch velocity at a witness".into(),
            ));
        }
        let mut fr = Mat::zeros(v.len(), 1);
        fr.set_col(0, &v.iter().map(|c| branch * c / vn).collect::<Vec<F>>());
        let Some((q0, pushed)) = self.chain.push_frame(self.tol, &p, &fr)? else {
            return Ok(None);
        };
        let Some(det) = self.relaxed_pairing(&q0, &pushed, y)? else {
            return Ok(None);
        };
        if det == 0.0 {
            return Err(MapError::NonTransverse(format!(
                "degenerate frame pairing at a curve witness of '{}'",
                self.a.points[x].label
            )));
        }
        // Transversality margin: finite-difference slope of the miss in the
        // branch parameter, over whichever miss channel resolves it.
        let slot = ys.iter().position(|&s| s == y).expect("target is listed");
        let d = self.opts.slope_probe;
        let m_at = |t: F, sl: usize| -> Result<Option<F>, MapError> {
            let pr = self.composite_probe(&self.branch_point(par, t.max(0.0))?, ys, exact)?;
            Ok(pr.and_then(|pr| pr.miss.get(sl).copied().flatten()))
        };
        let mut margin: Option<F> = None;
        for sl in [slot, slot + ys.len()] {
            if let (Some(a), Some(b)) = (m_at(tau + d, sl)?, m_at(tau - d, sl)?) {
                let s = ((a - b) / (2.0 * d)).abs();
                margin = Some(margin.map_or(s, |m| m.max(s)));
            }
        }
        let margin = margin.unwrap_or(det.abs());
        Ok(Some(MapWitness {
            source: x,
            target: y,
            point: self.a.flow.domain.reduce(&p),
            kind: WitnessKind::Curve,
            multiplicity: 1,
            sign_canonical: signum_i8(det),
            pairing_det: det,
            transversality_margin: margin,
        }))
    }

    /// Is `p` in the (region-restricted) unstable manifold of `x`? Decided
    /// by the reversed source flow.
    fn in_unstable_of(&self, x: usize, p: &[F]) -> Result<bool, MapError> {
        if self.a.flow.domain.distance(p, &self.a.points[x].position) < self.tol.r_conv {
            return Ok(true);
        }
        let rev = self.a.flow.reverse();
        let stop = StopSpec {
            targets: &self.a_back_targets,
            region: self.region_a,
            t_final: None,
        };
        let orbit = integrate(&rev, self.tol, p, &stop)?;
        Ok(matches!(orbit.reason, StopReason::Converged { target, .. } if target == x))
    }

    /// Witnesses of a source whose index equals both dimensions: the
    /// preimages of each target point intersected with `W^u(x)`.
    fn point_witnesses(&self, x: usize, ys: &[usize]) -> Result<Vec<MapWitness>, MapError> {
        let px = &self.a.points[x];
        let s_x = signum_i8(px.unstable_frame.det());
        let mut out = Vec::new();
        for &y in ys {
            let py = &self.b.points[y];
            let s_y = signum_i8(py.unstable_frame.det());
            for (p, mult) in self.chain.preimages(self.tol, &py.position, self.opts)? {
                if let Some(r) = self.region_a {
                    if !r.contains(&self.a.flow.domain, &p) {
                        continue;
                    }
                }
                if !self.in_unstable_of(x, &p)? {
                    continue;
                }
                let Some((sign_j, det_j)) = self.chain.jacobian_sign_along(self.tol, &p)?
                else {
                    continue;
                };
                let sign = s_x * s_y * sign_j;
                out.push(MapWitness {
                    source: x,
                    target: y,
                    point: p,
                    kind: WitnessKind::Point,
                    multiplicity: mult,
                    sign_canonical: sign,
                    pairing_det: sign as F * det_j,
                    transversality_margin: det_j,
                });
            }
        }
        Ok(out)
    }

    /// All witnesses out of source point `x` into the equal-index targets.
    fn witnesses_for_source(&self, x: usize, ys: &[usize]) -> Result<Vec<MapWitness>, MapError> {
        let k = self.a.points[x].index;
        if ys.is_empty() {
            return Ok(Vec::new());
        }
        if k == 0 {
            return Ok(self.center_witness(x, ys)?.into_iter().collect());
        }
        if k == self.a.dim() && self.a.dim() == self.b.dim() {
            return self.point_witnesses(x, ys);
        }
        if k == 1 {
            let mut out = Vec::new();
            if let Some(w) = self.center_witness(x, ys)? {
                out.push(w);
            }
            let curve = self.curve_witnesses(x, ys)?;
            for w in curve {
                if !out.iter().any(|u| {
                    u.target == w.target
                        && self.a.flow.domain.distance(&u.point, &w.point) < self.tol.dedup
                }) {
                    out.push(w);
                }
            }
            return Ok(out);
        }
        Err(MapError::Unsupported(format!(
            "index-{k} witness search in dimensions {} -> {}",
            self.a.dim(),
            self.b.dim()
        )))
    }
}

/// Count the intersection witnesses of one equal-index pair.
#[allow(clippy::too_many_arguments)]
pub fn count_map_intersections(
    chain: &MapChain,
    a: &MorseData,
    b: &MorseData,
    x: usize,
    y: usize,
    region_a: Option<&dyn Region>,
    region_b: Option<&dyn Region>,
    tol: &FlowTolerances,
    opts: &CountingOptions,
) -> Result<MapCount, MapError> {
    if a.points[x].index != b.points[y].index {
        return Err(MapError::Precondition(format!(
            "intersection counts need equal indices, got {} and {}",
            a.points[x].index, b.points[y].index
        )));
    }
    check_dims(chain, a, b)?;
    let counter = MapCounter::new(chain, a, b, region_a, region_b, tol, opts);
    let ys = b.points_of_index(b.points[y].index);
    let witnesses: Vec<MapWitness> = counter
        .witnesses_for_source(x, &ys)?
        .into_iter()
        .filter(|w| w.target == y)
        .collect();
    let eps_sum = witnesses
        .iter()
        .map(|w| w.sign_canonical as i64 * w.multiplicity as i64)
        .sum();
    Ok(MapCount { source: x, target: y, eps_sum, witnesses })
}

fn check_dims(chain: &MapChain, a: &MorseData, b: &MorseData) -> Result<(), MapError> {
    chain.validate()?;
    if chain.source_dim() != a.dim() || chain.target_dim() != b.dim() {
        return Err(MapError::Precondition(format!(
            "map chain is {} -> {} but the data are {} -> {}",
            chain.source_dim(),
            chain.target_dim(),
            a.dim(),
            b.dim()
        )));
    }
    if a.dim() > 2 || b.dim() > 2 {
        return Err(MapError::Moduli(ModuliError::UnsupportedDimension(
            a.dim().max(b.dim()),
        )));
    }
    Ok(())
}

/// Count every equal-index pair, assemble the graded integer map in the
/// generator bases of the two complexes, and verify the chain-map identity
/// exactly.
#[allow(clippy::too_many_arguments)]
pub fn induced_chain_map(
    chain: &MapChain,
    a: &MorseData,
    cx_a: &MorseComplexResult,
    b: &MorseData,
    cx_b: &MorseComplexResult,
    region_a: Option<&dyn Region>,
    region_b: Option<&dyn Region>,
    tol: &FlowTolerances,
    opts: &CountingOptions,
) -> Result<InducedMapResult, MapError> {
    check_dims(chain, a, b)?;
    let counter = MapCounter::new(chain, a, b, region_a, region_b, tol, opts);
    let mut counts: Vec<MapCount> = Vec::new();
    for k in 0..=a.dim().min(b.dim()) {
        let xs = a.points_of_index(k);
        let ys = b.points_of_index(k);
        if ys.is_empty() {
            continue;
        }
        for &x in &xs {
            let ws = counter.witnesses_for_source(x, &ys)?;
            for &y in &ys {
                let witnesses: Vec<MapWitness> =
                    ws.iter().filter(|w| w.target == y).cloned().collect();
                let eps_sum = witnesses
                    .iter()
                    .map(|w| w.sign_canonical as i64 * w.multiplicity as i64)
                    .sum();
                counts.push(MapCount { source: x, target: y, eps_sum, witnesses });
            }
        }
    }
    let top = cx_a.complex.top_degree().max(cx_b.complex.top_degree());
    let mut matrices = Vec::with_capacity(top + 1);
    for k in 0..=top {
        let cols_idx: &[usize] =
            cx_a.generator_points.get(k).map(|v| v.as_slice()).unwrap_or(&[]);
        let rows_idx: &[usize] =
            cx_b.generator_points.get(k).map(|v| v.as_slice()).unwrap_or(&[]);
        let mut m = IntMat::zeros(rows_idx.len(), cols_idx.len());
        for c in &counts {
            if a.points[c.source].index != k {
                continue;
            }
            let col = cols_idx.iter().position(|&i| i == c.source);
            let row = rows_idx.iter().position(|&i| i == c.target);
            if let (Some(col), Some(row)) = (col, row) {
                let sigma = a.points[c.source].orientation_sign as i64
                    * b.points[c.target].orientation_sign as i64;
                m[(row, col)] = Z::from(sigma * c.eps_sum);
            }
        }
        matrices.push(m);
    }
    let map = GradedIntMap { matrices };
    verify_chain_map(&map, &cx_a.complex, &cx_b.complex)
        .map_err(|e| MapError::NotChainMap(e.to_string()))?;
    Ok(InducedMapResult { map, counts })
}

/// A continuation map together with the complexes it connects.
#[derive(Debug, Clone)]
pub struct ContinuationOutcome {
    pub map: InducedMapResult,
    pub source_complex: MorseComplexResult,
    pub target_complex: MorseComplexResult,
    pub lambda_grid: Vec<F>,
}

/// Sampled isolation audit of the linear interpolation between two gradient
/// data: the sorted index multiset of the interpolated critical points
/// (restricted to the region, margin-strictly) must be constant across the
/// grid. `None` marks an inconclusive sample (degenerate critical point or
/// a critical point too close to the region boundary to call).
fn interpolation_state(
    fa: &ScalarField,
    fb: &ScalarField,
    lam: F,
    domain: &Domain,
    metric: &Metric,
    region: Option<&UnionRegion>,
    tol: &FlowTolerances,
) -> Option<Vec<usize>> {
    let blend = Expression::Add(
        Box::new(Expression::Mul(
            Box::new(Expression::Const(1.0 - lam)),
            Box::new(fa.expr.clone()),
        )),
        Box::new(Expression::Mul(
            Box::new(Expression::Const(lam)),
            Box::new(fb.expr.clone()),
        )),
    );
    let field = ScalarField::new(blend, domain.dim()).ok()?;
    let flow = FlowSystem::gradient(field, domain.clone(), metric.clone());
    let data = find_critical_points(&flow, tol).ok()?;
    let margin = 1e-2;
    let mut idx = Vec::new();
    for p in &data.points {
        match region {
            None => idx.push(p.index),
            Some(r) => {
                let depth = r.interior_depth(domain, &p.position);
                if depth > margin {
                    idx.push(p.index);
                } else if depth > -margin {
                    return None;
                }
            }
        }
    }
    idx.sort_unstable();
    Some(idx)
}

/// The canonical map between two gradient data on one domain, counted from
/// the non-autonomous switch flow that interpolates the potentials over
/// `[0, t_s]`. The linear interpolation is first audited for isolation on
/// an 11-point grid (with bisection refinement of any breach); the counted
/// map is verified to be a chain map.
pub fn continuation_map(
    a: &MorseData,
    b: &MorseData,
    region: Option<&UnionRegion>,
    t_s: F,
    tol: &FlowTolerances,
    opts: &CountingOptions,
) -> Result<ContinuationOutcome, MapError> {
    let fa = a
        .flow
        .field()
        .ok_or_else(|| MapError::Precondition("continuation requires gradient data".into()))?
        .clone();
    let fb = b
        .flow
        .field()
        .ok_or_else(|| MapError::Precondition("continuation requires gradient data".into()))?
        .clone();
    if a.flow.domain != b.flow.domain {
        return Err(MapError::Precondition(
            "continuation data must share the domain".into(),
        ));
    }
    let domain = a.flow.domain.clone();
    let metric = a.flow.metric.clone();
    // Witnesses of intermediate degree are counted from the forward image
    // of unstable curves, and that image contracts like
    // exp(-lambda_max * t_s) near the steepest well of the landscape. Once
    // the contraction factor falls to the integration noise floor the scan
    // carries no sign information, so such durations are rejected up front.
    // Top-degree and index-0 witnesses come from reversed-stage and
    // classification engines that do not need the forward image, so the
    // envelope binds only when both data have intermediate-index points.
    let dim = domain.dim();
    let intermediate = |d: &MorseData| d.points.iter().any(|p| 0 < p.index && p.index < dim);
    if intermediate(a) && intermediate(b) {
        let lambda_max = a
            .points
            .iter()
            .chain(&b.points)
            .flat_map(|p| p.eigenvalues.iter())
            .fold(0.0_f64, |m, &e| m.max(e.abs()));
        let budget = (1.0 / (1e3 * tol.rel_tol)).ln();
        if lambda_max * t_s > budget {
            return Err(MapError::Precondition(format!(
                "switch duration {t_s} exceeds the forward conditioning envelope: \
                 the contraction factor exp(-{lambda_max:.2} * {t_s}) leaves \
                 intermediate-degree witnesses below the integration noise floor; \
                 choose t_s <= {:.3}",
                budget / lambda_max
            )));
        }
    }
    let grid: Vec<F> = (0..11).map(|i| i as F / 10.0).collect();
    let states: Vec<Option<Vec<usize>>> = grid
        .iter()
        .map(|&lam| interpolation_state(&fa, &fb, lam, &domain, &metric, region, tol))
        .collect();
    for i in 0..grid.len() - 1 {
        let same = match (&states[i], &states[i + 1]) {
            (Some(u), Some(v)) => u == v,
            _ => false,
        };
        if !same {
            // Refine the breach bracket.
            let (mut lo, mut hi) = (grid[i], grid[i + 1]);
            let mut s_lo = states[i].clone();
            while hi - lo > 1e-4 {
                let mid = 0.5 * (lo + hi);
                let s_mid =
                    interpolation_state(&fa, &fb, mid, &domain, &metric, region, tol);
                let same_mid = match (&s_mid, &s_lo) {
                    (Some(u), Some(v)) => u == v,
                    (None, None) => true,
                    _ => false,
                };
                if same_mid {
                    lo = mid;
                    s_lo = s_mid;
                } else {
                    hi = mid;
                }
            }
            return Err(MapError::IsolationBreak { lo, hi });
        }
    }
    let region_dyn = region.map(|r| r as &dyn Region);
    let cx_a = morse_complex(a, region_dyn, tol, opts)?;
    let cx_b = morse_complex(b, region_dyn, tol, opts)?;
    let chain = MapChain::switch_between(a, b, t_s, region.cloned())?;
    let map = induced_chain_map(&chain, a, &cx_a, b, &cx_b, region_dyn, region_dyn, tol, opts)?;
    Ok(ContinuationOutcome {
        map,
        source_complex: cx_a,
        target_complex: cx_b,
        lambda_grid: grid,
    })
}

/// Invariance certificate of the one-parameter family of composites with a
/// flow segment inserted.
#[derive(Debug, Clone)]
pub struct FlowFamilyCertificate {
    pub r_values: Vec<F>,
    /// Did the induced map stay constant on homology across the grid?
    pub constant: bool,
    /// When it did not: the refined parameter bracket of the first breach.
    pub breach: Option<(F, F)>,
}

/// Everything `compose_with_flow` establishes.
#[derive(Debug, Clone)]
pub struct ComposeReport {
    /// Induced map of `h_cb . flow_time(r) . h_ba`.
    pub composite: InducedMapResult,
    /// Induced map of the composite with no flow inserted.
    pub composite_r0: InducedMapResult,
    /// Product of the separately induced maps.
    pub product: GradedIntMap,
    /// Do the composite (at `r` and at 0) and the product agree on
    /// homology?
    pub agree_on_homology: bool,
    pub family: FlowFamilyCertificate,
}

fn composite_chain(
    h_ba: &MapChain,
    h_cb: &MapChain,
    flow_b: &FlowSystem,
    r: F,
    psi_region: Option<&UnionRegion>,
) -> MapChain {
    let mut stages = h_ba.stages.clone();
    stages.push(MapStage {
        kind: StageKind::FlowTime { flow: flow_b.clone(), time: r },
        region: psi_region.cloned(),
    });
    stages.extend(h_cb.stages.iter().cloned());
    MapChain { stages }
}

/// Compose two maps with a time-`r` flow segment inserted in the middle,
/// compare against the plain composite and the product of the induced
/// maps, and certify the whole `r`-family on a grid (isolated data must
/// induce the same map on homology for every `r`; a breach is refined by
/// bisection and reported).
#[allow(clippy::too_many_arguments)]
pub fn compose_with_flow(
    h_ba: &MapChain,
    h_cb: &MapChain,
    r: F,
    a: &MorseData,
    cx_a: &MorseComplexResult,
    b: &MorseData,
    cx_b: &MorseComplexResult,
    c: &MorseData,
    cx_c: &MorseComplexResult,
    region_a: Option<&dyn Region>,
    region_b: Option<&dyn Region>,
    region_c: Option<&dyn Region>,
    psi_region: Option<&UnionRegion>,
    r_grid: usize,
    r_max: F,
    tol: &FlowTolerances,
    opts: &CountingOptions,
) -> Result<ComposeReport, MapError> {
    let map_ba = induced_chain_map(h_ba, a, cx_a, b, cx_b, region_a, region_b, tol, opts)?;
    let map_cb = induced_chain_map(h_cb, b, cx_b, c, cx_c, region_b, region_c, tol, opts)?;
    let product = map_cb.map.compose_after(&map_ba.map);

    let state_at = |rv: F| -> Result<Option<GradedIntMap>, MapError> {
        let chain = composite_chain(h_ba, h_cb, &b.flow, rv, psi_region);
        match induced_chain_map(&chain, a, cx_a, c, cx_c, region_a, region_c, tol, opts) {
            Ok(res) => Ok(Some(res.map)),
            Err(MapError::NonTransverse(_))
            | Err(MapError::NotChainMap(_))
            | Err(MapError::Moduli(ModuliError::Witness(_))) => Ok(None),
            Err(e) => Err(e),
        }
    };
    let same = |u: &Option<GradedIntMap>, v: &Option<GradedIntMap>| -> Result<bool, MapError> {
        match (u, v) {
            (Some(mu), Some(mv)) => {
                Ok(equal_on_homology(mu, mv, &cx_a.complex, &cx_c.complex)?)
            }
            (None, None) => Ok(true),
            _ => Ok(false),
        }
    };

    let n = r_grid.max(2);
    let r_values: Vec<F> = (0..n).map(|i| r_max * i as F / (n - 1) as F).collect();
    let grid_states: Vec<Option<GradedIntMap>> = r_values
        .iter()
        .map(|&rv| state_at(rv))
        .collect::<Result<Vec<_>, _>>()?;
    let mut breach = None;
    for i in 0..r_values.len() - 1 {
        if same(&grid_states[i], &grid_states[i + 1])? {
            continue;
        }
        let (mut lo, mut hi) = (r_values[i], r_values[i + 1]);
        let mut s_lo = grid_states[i].clone();
        while hi - lo > 1e-3 {
            let mid = 0.5 * (lo + hi);
            let s_mid = state_at(mid)?;
            if same(&s_mid, &s_lo)? {
                lo = mid;
                s_lo = s_mid;
            } else {
                hi = mid;
            }
        }
        breach = Some((lo, hi));
        break;
    }
    let family = FlowFamilyCertificate {
        r_values,
        constant: breach.is_none(),
        breach,
    };

    let chain_r = composite_chain(h_ba, h_cb, &b.flow, r, psi_region);
    let composite =
        induced_chain_map(&chain_r, a, cx_a, c, cx_c, region_a, region_c, tol, opts)?;
    let chain_0 = composite_chain(h_ba, h_cb, &b.flow, 0.0, psi_region);
    let composite_r0 =
        induced_chain_map(&chain_0, a, cx_a, c, cx_c, region_a, region_c, tol, opts)?;
    let agree_on_homology =
        equal_on_homology(&composite.map, &product, &cx_a.complex, &cx_c.complex)?
            && equal_on_homology(&composite_r0.map, &product, &cx_a.complex, &cx_c.complex)?;
    Ok(ComposeReport { composite, composite_r0, product, agree_on_homology, family })
}

/// Is `p` inside the region with axis margins to spare?
fn margin_inside(region: &dyn Region, domain: &Domain, p: &[F], m: F) -> bool {
    if !region.contains(domain, p) {
        return false;
    }
    for i in 0..p.len() {
        for s in [-1.0, 1.0] {
            let mut q = p.to_vec();
            q[i] += s * m;
            if !region.contains(domain, &q) {
                return false;
            }
        }
    }
    true
}

/// Replace `h` by a nearby transverse map when needed: try `h` itself,
/// then seeded translations `h + eps * v` with `eps = 1e-3 * 2^{-k}` for
/// `k = 0..16`. A candidate is accepted when its induced map counts
/// cleanly (every witness pairing and slope above threshold, chain-map
/// identity exact) and, in the local case, every witness stays
/// margin-interior to the regions.
#[allow(clippy::too_many_arguments)]
pub fn perturb_to_transverse(
    h: &SmoothMap,
    a: &MorseData,
    cx_a: &MorseComplexResult,
    b: &MorseData,
    cx_b: &MorseComplexResult,
    region_a: Option<&dyn Region>,
    region_b: Option<&dyn Region>,
    seed: u64,
    tol: &FlowTolerances,
    opts: &CountingOptions,
) -> Result<SmoothMap, MapError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dim_b = h.target.dim();
    let min_margin = 1e-8;
    let interior_margin = 1e-2;
    for attempt in 0..17 {
        let candidate = if attempt == 0 {
            h.clone()
        } else {
            // Unit direction, drawn deterministically.
            let mut v = vec![0.0; dim_b];
            loop {
                for vi in v.iter_mut() {
                    *vi = rng.gen_range(-1.0..1.0);
                }
                let nv = norm(&v);
                if nv > 1e-3 {
                    for vi in v.iter_mut() {
                        *vi /= nv;
                    }
                    break;
                }
            }
            let eps = 1e-3 * (0.5_f64).powi(attempt - 1);
            let components = h
                .components
                .iter()
                .zip(&v)
                .map(|(c, &vi)| {
                    Expression::Add(
                        Box::new(c.clone()),
                        Box::new(Expression::Const(eps * vi)),
                    )
                })
                .collect();
            SmoothMap::new(components, h.source.clone(), h.target.clone())?
        };
        let chain = MapChain::smooth(candidate.clone());
        let res = match induced_chain_map(
            &chain, a, cx_a, b, cx_b, region_a, region_b, tol, opts,
        ) {
            Ok(res) => res,
            Err(MapError::NonTransverse(_)) | Err(MapError::NotChainMap(_)) => continue,
            Err(MapError::Moduli(ModuliError::Witness(_))) => continue,
            Err(e) => return Err(e),
        };
        let mut ok = true;
        for count in &res.counts {
            for w in &count.witnesses {
                if w.pairing_det.abs() < min_margin || w.transversality_margin < min_margin {
                    ok = false;
                }
                if let Some(r) = region_a {
                    if !margin_inside(r, &a.flow.domain, &w.point, interior_margin) {
                        ok = false;
                    }
                }
                if let Some(r) = region_b {
                    if let Ok(Some(q)) = chain.apply(tol, &w.point) {
                        if !margin_inside(r, &b.flow.domain, &q, interior_margin) {
                            ok = false;
                        }
                    }
                }
            }
        }
        if ok {
            return Ok(candidate);
        }
    }
    Err(MapError::NonTransverse(
        "no accepted perturbation within 16 attempts".into(),
    ))
}

/// Outcome of a sampled homotopy check between `family(0)` and `family(1)`.
#[derive(Debug, Clone)]
pub struct HomotopyReport {
    pub lambda_grid: Vec<F>,
    /// Do the two endpoint maps agree on homology?
    pub endpoints_equal_on_homology: bool,
    /// Refined parameter brackets where the sampled family stopped being
    /// countable or changed on homology.
    pub violations: Vec<(F, F)>,
}

/// Check a one-parameter family of expression maps between fixed data:
/// every sample must induce the same map on homology; breaches are refined
/// by bisection and reported. The map of `family(0)` is compared against
/// `family(1)` on homology.
#[allow(clippy::too_many_arguments)]
pub fn homotopy_check(
    family: &dyn Fn(F) -> SmoothMap,
    a: &MorseData,
    cx_a: &MorseComplexResult,
    b: &MorseData,
    cx_b: &MorseComplexResult,
    region_a: Option<&dyn Region>,
    region_b: Option<&dyn Region>,
    grid_points: usize,
    tol: &FlowTolerances,
    opts: &CountingOptions,
) -> Result<HomotopyReport, MapError> {
    let n = grid_points.max(2);
    let grid: Vec<F> = (0..n).map(|i| i as F / (n - 1) as F).collect();
    let state_at = |lam: F| -> Result<Option<GradedIntMap>, MapError> {
        let chain = MapChain::smooth(family(lam));
        match induced_chain_map(&chain, a, cx_a, b, cx_b, region_a, region_b, tol, opts) {
            Ok(res) => Ok(Some(res.map)),
            Err(MapError::NonTransverse(_))
            | Err(MapError::NotChainMap(_))
            | Err(MapError::Moduli(ModuliError::Witness(_))) => Ok(None),
            Err(e) => Err(e),
        }
    };
    let same = |u: &Option<GradedIntMap>, v: &Option<GradedIntMap>| -> Result<bool, MapError> {
        match (u, v) {
            (Some(mu), Some(mv)) => {
                Ok(equal_on_homology(mu, mv, &cx_a.complex, &cx_b.complex)?)
            }
            (None, None) => Ok(true),
            _ => Ok(false),
        }
    };
    let states: Vec<Option<GradedIntMap>> = grid
        .iter()
        .map(|&lam| state_at(lam))
        .collect::<Result<Vec<_>, _>>()?;
    let mut violations = Vec::new();
    for i in 0..grid.len() - 1 {
        if same(&states[i], &states[i + 1])? {
            continue;
        }
        let (mut lo, mut hi) = (grid[i], grid[i + 1]);
        let mut s_lo = states[i].clone();
        while hi - lo > 1e-3 {
            let mid = 0.5 * (lo + hi);
            let s_mid = state_at(mid)?;
            if same(&s_mid, &s_lo)? {
                lo = mid;
                s_lo = s_mid;
            } else {
                hi = mid;
            }
        }
        violations.push((lo, hi));
    }
    let endpoints_equal_on_homology = match (states.first(), states.last()) {
        (Some(Some(m0)), Some(Some(m1))) => {
            equal_on_homology(m0, m1, &cx_a.complex, &cx_b.complex)?
        }
        _ => false,
    };
    Ok(HomotopyReport {
        lambda_grid: grid,
        endpoints_equal_on_homology,
        violations,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::flow::BoxRegion;
    use crate::zalgebra::{homology, iso_on_homology};

    fn tols() -> FlowTolerances {
        FlowTolerances::default()
    }

    fn opts() -> CountingOptions {
        CountingOptions::default()
    }

    fn morse(expr: &str, domain: Domain) -> MorseData {
        let f = ScalarField::parse(expr, domain.dim()).unwrap();
        let flow = FlowSystem::gradient(f, domain, Metric::Euclidean);
        find_critical_points(&flow, &tols()).unwrap()
    }

    fn complex_of(data: &MorseData) -> MorseComplexResult {
        morse_complex(data, None, &tols(), &opts()).unwrap()
    }

    fn is_identity(map: &GradedIntMap) -> bool {
        map.matrices
            .iter()
            .all(|m| m.rows == m.cols && *m == IntMat::identity(m.rows))
    }

    #[test]
    fn identity_map_on_circle_induces_identity_matrices() {
        let data = morse("cos(2*pi*x1)", Domain::Torus { dim: 1 });
        let cx = complex_of(&data);
        let chain = MapChain::identity(Domain::Torus { dim: 1 });
        let res =
            induced_chain_map(&chain, &data, &cx, &data, &cx, None, None, &tols(), &opts())
                .unwrap();
        assert!(is_identity(&res.map), "got {:?}", res.map.matrices);
    }

    #[test]
    fn identity_map_on_torus_induces_identity_matrices() {
        let data = morse(
            "cos(2*pi*x1) + cos(2*pi*x2) + 0.2*cos(2*pi*(x1 + x2))",
            Domain::Torus { dim: 2 },
        );
        let cx = complex_of(&data);
        let chain = MapChain::identity(Domain::Torus { dim: 2 });
        let res =
            induced_chain_map(&chain, &data, &cx, &data, &cx, None, None, &tols(), &opts())
                .unwrap();
        assert!(is_identity(&res.map), "got {:?}", res.map.matrices);
    }

    #[test]
    fn degree_two_circle_map_multiplies_h1_by_two() {
        let dom = Domain::Torus { dim: 1 };
        let a = morse("cos(2*pi*x1)", dom.clone());
        let b = morse("cos(2*pi*(x1 - 0.1))", dom.clone());
        let cx_a = complex_of(&a);
        let cx_b = complex_of(&b);
        let h = SmoothMap::parse(&["2*x1"], dom.clone(), dom.clone()).unwrap();
        let res = induced_chain_map(
            &MapChain::smooth(h),
            &a,
            &cx_a,
            &b,
            &cx_b,
            None,
            None,
            &tols(),
            &opts(),
        )
        .unwrap();
        assert_eq!(res.map.matrices[0], IntMat::from_rows_i64(&[&[1]]));
        assert_eq!(res.map.matrices[1], IntMat::from_rows_i64(&[&[2]]));
        // Two preimage sheets, both with the same sign.
        let max_a = a.points_of_index(1)[0];
        let max_b = b.points_of_index(1)[0];
        let c = count_map_intersections(
            &MapChain::smooth(SmoothMap::parse(&["2*x1"], dom.clone(), dom).unwrap()),
            &a,
            &b,
            max_a,
            max_b,
            None,
            None,
            &tols(),
            &opts(),
        )
        .unwrap();
        assert_eq!(c.witnesses.len(), 2);
        assert!(!iso_on_homology(&res.map, &cx_a.complex, &cx_b.complex).unwrap());
    }

    #[test]
    fn constant_map_to_a_regular_point() {
        let dom = Domain::Torus { dim: 1 };
        let a = morse("cos(2*pi*x1)", dom.clone());
        let b = morse("cos(2*pi*(x1 - 0.1))", dom.clone());
        let cx_a = complex_of(&a);
        let cx_b = complex_of(&b);
        let h = SmoothMap::parse(&["0.37"], dom.clone(), dom).unwrap();
        let res = induced_chain_map(
            &MapChain::smooth(h),
            &a,
            &cx_a,
            &b,
            &cx_b,
            None,
            None,
            &tols(),
            &opts(),
        )
        .unwrap();
        assert_eq!(res.map.matrices[0], IntMat::from_rows_i64(&[&[1]]));
        assert_eq!(res.map.matrices[1], IntMat::from_rows_i64(&[&[0]]));
    }

    #[test]
    fn kunneth_projection_to_the_circle() {
        let a = morse(
            "cos(2*pi*x1) + cos(2*pi*x2) + 0.2*cos(2*pi*(x1 + x2))",
            Domain::Torus { dim: 2 },
        );
        let b = morse("cos(2*pi*x1)", Domain::Torus { dim: 1 });
        let cx_a = complex_of(&a);
        let cx_b = complex_of(&b);
        let h = SmoothMap::parse(
            &["x1"],
            Domain::Torus { dim: 2 },
            Domain::Torus { dim: 1 },
        )
        .unwrap();
        let res = induced_chain_map(
            &MapChain::smooth(h),
            &a,
            &cx_a,
            &b,
            &cx_b,
            None,
            None,
            &tols(),
            &opts(),
        )
        .unwrap();
        // Degree 0: the minimum goes to the minimum.
        assert_eq!(res.map.matrices[0], IntMat::from_rows_i64(&[&[1]]));
        // Degree 1: one saddle carries the base class, the other the fiber
        // class killed by the projection.
        let m1 = &res.map.matrices[1];
        assert_eq!((m1.rows, m1.cols), (1, 2));
        let mut mags: Vec<String> =
            (0..2).map(|j| m1[(0, j)].magnitude().to_string()).collect();
        mags.sort();
        assert_eq!(mags, vec!["0".to_string(), "1".to_string()]);
        // Degree 2 row is empty in the target.
        assert_eq!(res.map.matrices[2].rows, 0);
    }

    #[test]
    fn translation_functoriality_on_the_torus() {
        let expr = "cos(2*pi*x1) + cos(2*pi*x2) + 0.2*cos(2*pi*(x1 + x2))";
        let dom = Domain::Torus { dim: 2 };
        let a = morse(expr, dom.clone());
        let b = morse(
            "cos(2*pi*(x1 - 0.25)) + cos(2*pi*(x2 - 0.1)) + 0.2*cos(2*pi*(x1 + x2 - 0.35))",
            dom.clone(),
        );
        let c = morse(
            "cos(2*pi*(x1 - 0.55)) + cos(2*pi*(x2 - 0.25)) + 0.2*cos(2*pi*(x1 + x2 - 0.8))",
            dom.clone(),
        );
        let (cx_a, cx_b, cx_c) = (complex_of(&a), complex_of(&b), complex_of(&c));
        let h = SmoothMap::parse(&["x1 + 0.25", "x2 + 0.1"], dom.clone(), dom.clone()).unwrap();
        let g = SmoothMap::parse(&["x1 + 0.3", "x2 + 0.15"], dom.clone(), dom.clone()).unwrap();
        let map_h = induced_chain_map(
            &MapChain::smooth(h.clone()),
            &a,
            &cx_a,
            &b,
            &cx_b,
            None,
            None,
            &tols(),
            &opts(),
        )
        .unwrap();
        let map_g = induced_chain_map(
            &MapChain::smooth(g.clone()),
            &b,
            &cx_b,
            &c,
            &cx_c,
            None,
            None,
            &tols(),
            &opts(),
        )
        .unwrap();
        let composite = induced_chain_map(
            &MapChain::smooth(g.after(&h)),
            &a,
            &cx_a,
            &c,
            &cx_c,
            None,
            None,
            &tols(),
            &opts(),
        )
        .unwrap();
        let product = map_g.map.compose_after(&map_h.map);
        assert_eq!(composite.map, product, "chain-level functoriality for translations");
        assert!(is_identity(&map_h.map));
    }

    #[test]
    fn continuation_of_identical_circle_data_is_the_identity() {
        let data = morse("cos(2*pi*x1)", Domain::Torus { dim: 1 });
        let out = continuation_map(&data, &data, None, 20.0, &tols(), &opts()).unwrap();
        assert!(is_identity(&out.map.map));
    }

    #[test]
    fn continuation_between_shifted_circle_data_is_an_isomorphism() {
        let a = morse("cos(2*pi*x1)", Domain::Torus { dim: 1 });
        let b = morse("cos(2*pi*(x1 - 0.3))", Domain::Torus { dim: 1 });
        let out = continuation_map(&a, &b, None, 20.0, &tols(), &opts()).unwrap();
        assert!(iso_on_homology(
            &out.map.map,
            &out.source_complex.complex,
            &out.target_complex.complex
        )
        .unwrap());
        let back = continuation_map(&b, &a, None, 20.0, &tols(), &opts()).unwrap();
        let round = back.map.map.compose_after(&out.map.map);
        assert!(equal_on_homology(
            &round,
            &GradedIntMap::identity(&out.source_complex.complex),
            &out.source_complex.complex,
            &out.source_complex.complex
        )
        .unwrap());
    }

    #[test]
    fn continuation_between_perturbed_torus_data_is_an_isomorphism() {
        let dom = Domain::Torus { dim: 2 };
        let a = morse(
            "cos(2*pi*x1) + cos(2*pi*x2) + 0.2*cos(2*pi*(x1 + x2))",
            dom.clone(),
        );
        let b = morse(
            "cos(2*pi*(x1 - 0.03)) + cos(2*pi*(x2 + 0.02)) + 0.2*cos(2*pi*(x1 + x2))",
            dom,
        );
        let out = continuation_map(&a, &b, None, 0.2, &tols(), &opts()).unwrap();
        assert!(iso_on_homology(
            &out.map.map,
            &out.source_complex.complex,
            &out.target_complex.complex
        )
        .unwrap());
    }

    #[test]
    fn continuation_isolation_failure_is_detected_and_located() {
        let dom = Domain::Box { bounds: vec![(-4.0, 4.0)] };
        let a = morse("x1^2", dom.clone());
        let b = morse("(x1 - 3)^2", dom);
        let region = UnionRegion::single(vec![-1.0], vec![1.0]);
        let err = continuation_map(&a, &b, Some(&region), 20.0, &tols(), &opts());
        match err {
            Err(MapError::IsolationBreak { lo, hi }) => {
                // The interpolated critical point sits at 3*lambda; it stops
                // being margin-interior to [-1, 1] near lambda = 1/3.
                assert!(lo < 1.0 / 3.0 + 0.01, "lo = {lo}");
                assert!(hi > 0.32, "hi = {hi}");
                assert!(hi - lo <= 1.1e-4);
            }
            other => panic!("expected an isolation break, got {other:?}"),
        }
    }

    #[test]
    fn degree_maps_compose_multiplicatively() {
        let dom = Domain::Torus { dim: 1 };
        let a = morse("cos(2*pi*x1)", dom.clone());
        let b = morse("cos(2*pi*(x1 - 0.1))", dom.clone());
        let c = morse("cos(2*pi*(x1 - 0.2))", dom.clone());
        let (cx_a, cx_b, cx_c) = (complex_of(&a), complex_of(&b), complex_of(&c));
        let h2 = MapChain::smooth(SmoothMap::parse(&["2*x1"], dom.clone(), dom.clone()).unwrap());
        let h3 = MapChain::smooth(SmoothMap::parse(&["3*x1"], dom.clone(), dom).unwrap());
        let report = compose_with_flow(
            &h2,
            &h3,
            10.0,
            &a,
            &cx_a,
            &b,
            &cx_b,
            &c,
            &cx_c,
            None,
            None,
            None,
            None,
            11,
            50.0,
            &tols(),
            &opts(),
        )
        .unwrap();
        assert!(report.agree_on_homology);
        assert!(report.family.constant);
        assert_eq!(report.composite.map.matrices[1], IntMat::from_rows_i64(&[&[6]]));
        assert_eq!(report.product.matrices[1], IntMat::from_rows_i64(&[&[6]]));
    }

    #[test]
    fn composite_with_flow_detects_the_isolation_failure_window() {
        // Identity maps between x^2 and (x-3)^2 data localized to [-1, 1]:
        // the middle datum has no critical point there, so the product of
        // the induced maps vanishes, while the direct composite is the
        // identity for small flow insertions. The family breaks where the
        // inserted orbit of the origin leaves the neighborhood, at
        // r = ln(3/2)/2.
        let dom = Domain::Box { bounds: vec![(-4.0, 4.0)] };
        let region = UnionRegion::single(vec![-1.0], vec![1.0]);
        let region_dyn: Option<&dyn Region> = Some(&region);
        let full_a = morse("x1^2", dom.clone());
        let full_b = morse("(x1 - 3)^2", dom.clone());
        let inside = |d: &MorseData| -> MorseData {
            let mut local = d.clone();
            local.points = d
                .points
                .iter()
                .filter(|p| region.contains(&d.flow.domain, &p.position))
                .cloned()
                .collect();
            local
        };
        let a = inside(&full_a);
        let b = inside(&full_b);
        let c = a.clone();
        assert_eq!(a.points.len(), 1);
        assert_eq!(b.points.len(), 0);
        let cx_a = morse_complex(&a, region_dyn, &tols(), &opts()).unwrap();
        let cx_b = morse_complex(&b, region_dyn, &tols(), &opts()).unwrap();
        let cx_c = cx_a.clone();
        let id = MapChain::identity(dom);
        let report = compose_with_flow(
            &id,
            &id,
            0.1,
            &a,
            &cx_a,
            &b,
            &cx_b,
            &c,
            &cx_c,
            region_dyn,
            region_dyn,
            region_dyn,
            Some(&region),
            11,
            50.0,
            &tols(),
            &opts(),
        )
        .unwrap();
        // Through the middle datum the product must vanish...
        assert!(report.product.matrices[0].is_zero());
        // ...but the direct composite at small r is the identity.
        assert_eq!(report.composite.map.matrices[0], IntMat::from_rows_i64(&[&[1]]));
        assert!(!report.agree_on_homology);
        assert!(!report.family.constant);
        let (lo, hi) = report.family.breach.expect("breach bracket");
        let r_star = 0.5 * (1.5_f64).ln();
        assert!(lo <= r_star && r_star <= hi, "bracket [{lo}, {hi}] misses {r_star}");
        assert!(hi - lo <= 1.1e-3);
    }

    #[test]
    fn perturb_returns_transverse_maps_unchanged() {
        let dom = Domain::Torus { dim: 1 };
        let a = morse("cos(2*pi*x1)", dom.clone());
        let b = morse("cos(2*pi*(x1 - 0.1))", dom.clone());
        let (cx_a, cx_b) = (complex_of(&a), complex_of(&b));
        let h = SmoothMap::parse(&["2*x1"], dom.clone(), dom).unwrap();
        let out = perturb_to_transverse(
            &h, &a, &cx_a, &b, &cx_b, None, None, 11, &tols(), &opts(),
        )
        .unwrap();
        assert_eq!(out.components, h.components, "accepted without perturbation");
    }

    #[test]
    fn perturb_fixes_an_image_on_a_stable_manifold() {
        // Product height on the torus: the angle axes are invariant, so the
        // stable manifold of the saddle at (1/2, 0) is exactly the circle
        // {x2 = 0}. The translation below drops the image of the minimum
        // onto that circle, a non-transverse configuration.
        let dom = Domain::Torus { dim: 2 };
        let data = morse("cos(2*pi*x1) + cos(2*pi*x2)", dom.clone());
        let cx = complex_of(&data);
        let h = SmoothMap::parse(&["x1 + 0.1", "x2 + 0.5"], dom.clone(), dom.clone()).unwrap();
        let direct = induced_chain_map(
            &MapChain::smooth(h.clone()),
            &data,
            &cx,
            &data,
            &cx,
            None,
            None,
            &tols(),
            &opts(),
        );
        assert!(
            matches!(direct, Err(MapError::NonTransverse(_))),
            "the raw translation must be rejected, got {direct:?}"
        );
        let fixed = perturb_to_transverse(
            &h, &data, &cx, &data, &cx, None, None, 7, &tols(), &opts(),
        )
        .unwrap();
        assert_ne!(fixed.components, h.components, "a perturbation was required");
        let res = induced_chain_map(
            &MapChain::smooth(fixed),
            &data,
            &cx,
            &data,
            &cx,
            None,
            None,
            &tols(),
            &opts(),
        )
        .unwrap();
        let h_free = homology(&cx.complex).unwrap();
        assert_eq!(h_free.betti(), vec![1, 2, 1]);
        assert!(equal_on_homology(
            &res.map,
            &GradedIntMap::identity(&cx.complex),
            &cx.complex,
            &cx.complex
        )
        .unwrap());
    }

    #[test]
    fn rotation_family_passes_the_homotopy_check() {
        let dom = Domain::Torus { dim: 1 };
        let a = morse("cos(2*pi*x1)", dom.clone());
        let b = morse("cos(2*pi*(x1 - 0.1))", dom.clone());
        let (cx_a, cx_b) = (complex_of(&a), complex_of(&b));
        let dom2 = dom.clone();
        let family = move |lam: F| -> SmoothMap {
            let shift = 0.2 + 0.25 * lam;
            SmoothMap::new(
                vec![Expression::Add(
                    Box::new(Expression::Var(0)),
                    Box::new(Expression::Const(shift)),
                )],
                dom2.clone(),
                dom2.clone(),
            )
            .unwrap()
        };
        let report = homotopy_check(
            &family, &a, &cx_a, &b, &cx_b, None, None, 11, &tols(), &opts(),
        )
        .unwrap();
        assert!(report.endpoints_equal_on_homology);
        assert!(report.violations.is_empty(), "violations: {:?}", report.violations);
    }

    #[test]
    fn homotopy_dragging_the_image_out_of_the_region_is_flagged() {
        // Local data around the minimum of the double well; the family
        // slides the (constant) image of the minimum across the region
        // boundary near lambda = 1/2.
        let dom = Domain::Box { bounds: vec![(-2.0, 2.0)] };
        let full = morse("x1^2", dom.clone());
        let region = BoxRegion { lo: vec![-1.0], hi: vec![1.0] };
        let region_dyn: Option<&dyn Region> = Some(&region);
        let cx = morse_complex(&full, region_dyn, &tols(), &opts()).unwrap();
        let dom2 = dom.clone();
        let family = move |lam: F| -> SmoothMap {
            // h_lam(x) = x/4 + 3*lam/2: at lam = 1/2 the image of the
            // minimum crosses the region boundary at 1 - h(0) ... h(0) = 3*lam/2
            // reaches 1 at lam = 2/3.
            SmoothMap::new(
                vec![Expression::Add(
                    Box::new(Expression::Mul(
                        Box::new(Expression::Const(0.25)),
                        Box::new(Expression::Var(0)),
                    )),
                    Box::new(Expression::Const(1.5 * lam)),
                )],
                dom2.clone(),
                dom2.clone(),
            )
            .unwrap()
        };
        let report = homotopy_check(
            &family, &full, &cx, &full, &cx, region_dyn, region_dyn, 11, &tols(), &opts(),
        )
        .unwrap();
        assert!(!report.endpoints_equal_on_homology);
        assert_eq!(report.violations.len(), 1, "violations: {:?}", report.violations);
        let (lo, hi) = report.violations[0];
        assert!(lo <= 2.0 / 3.0 && 2.0 / 3.0 <= hi + 1e-9, "bracket [{lo}, {hi}]");
    }
}

//! Isolation machinery: certify isolating neighborhoods, isolated maps,
//! flow maps and Lyapunov functions, and assemble local Morse homology and
//! Morse-Conley-Floer homology on top of those certificates.
//!
//! Every orbit-based condition here quantifies over all points and all time
//! in its exact form, so a numeric tool can only ever check it on declared
//! grids up to a declared time cap. All certification routines therefore
//! return a three-valued [`Verdict`] together with the evidence (mesh sizes,
//! margins, worst points): `Certified` means every sampled condition held
//! with margin, `Refuted` means a concrete violation was located, and
//! `Inconclusive` means the time cap ran out before a decision. Enlarging
//! the cap can only turn `Inconclusive` into a decision.

use rayon::prelude::*;
use thiserror::Error;

use crate::expr::{Domain, ExprError, ScalarField, SmoothMap};
use crate::flow::{
    find_critical_points, integrate, perturb_field, BoxRegion, FlowError, FlowSystem,
    FlowTolerances, Metric, MorseData, Region, StopReason, StopSpec, UnionRegion,
};
use crate::inducedmaps::{
    induced_chain_map, perturb_to_transverse, InducedMapResult, MapChain, MapError,
};
use crate::linalg::norm;
use crate::moduli::{morse_complex, CountingOptions, ModuliError, MorseComplexResult};
use crate::zalgebra::{
    homology, homology_map, AlgebraError, GradedIntMap, Homology, HomologyMap,
};
use crate::F;

#[derive(Debug, Error)]
pub enum ConleyError {
    #[error(transparent)]
    Flow(#[from] FlowError),
    #[error(transparent)]
    Expr(#[from] ExprError),
    #[error(transparent)]
    Moduli(#[from] ModuliError),
    #[error(transparent)]
    Map(#[from] MapError),
    #[error(transparent)]
    Algebra(#[from] AlgebraError),
    #[error("precondition violated: {0}")]
    Precondition(String),
    #[error("{stage}: certification did not pass: {detail}")]
    NotCertified { stage: &'static str, detail: String },
    #[error("no Morse-Smale perturbation preserved isolation within {0} attempts")]
    Perturbation(usize),
}

/// Outcome of a sampled certification.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Verdict {
    /// Every sampled condition held with margin.
    Certified,
    /// A concrete violation was located.
    Refuted,
    /// The time cap ran out before every sample was decided; increase it.
    Inconclusive,
}

impl Verdict {
    pub fn is_certified(&self) -> bool {
        matches!(self, Verdict::Certified)
    }
}

impl std::fmt::Display for Verdict {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            Verdict::Certified => "certified",
            Verdict::Refuted => "refuted",
            Verdict::Inconclusive => "inconclusive",
        };
        write!(f, "{s}")
    }
}

/// Grids, caps and margins of the sampled certifications.
#[derive(Debug, Clone)]
pub struct ConleyOptions {
    /// Boundary mesh spacing as a fraction of each box's own scale.
    pub boundary_spacing: F,
    /// Interior sample lattice points per axis (odd counts include centers).
    pub interior_per_axis: usize,
    /// Invariant-set samples must sit deeper than this inside the region.
    pub margin_int: F,
    /// Residual bound of the sampled flow-map equivariance check.
    pub equivariance_tol: F,
    /// Admissible variation of a Lyapunov function over the invariant set.
    pub lyapunov_tol_const: F,
    /// Cell size below which pullback grid refinement stops, as a fraction
    /// of the domain scale.
    pub pullback_resolution: F,
    /// Time step between stall inspections of a region-confined orbit.
    pub t_chunk: F,
    /// Speed (relative to the domain scale) below which an orbit endpoint
    /// is inspected for convergence to an equilibrium.
    pub stall_speed: F,
}

impl Default for ConleyOptions {
    fn default() -> Self {
        ConleyOptions {
            boundary_spacing: 1e-2,
            interior_per_axis: 33,
            margin_int: 1e-2,
            equivariance_tol: 1e-6,
            lyapunov_tol_const: 1e-6,
            pullback_resolution: 1e-3,
            t_chunk: 5.0,
            stall_speed: 1e-7,
        }
    }
}

/// Where one region-confined orbit ended up.
#[derive(Debug, Clone, PartialEq)]
pub enum Fate {
    /// Left the region at this time.
    Exits { time: F },
    /// Stalled at an equilibrium inside the region: the orbit stays.
    ConvergedInside { point: Vec<F>, time: F },
    /// Still inside when the time cap fired; undecided.
    Undecided,
}

impl Fate {
    /// Does this orbit stay in the region for the whole sampled window?
    fn stays(&self) -> bool {
        !matches!(self, Fate::Exits { .. })
    }
}

/// Fate of an orbit plus the least interior depth along its samples.
#[derive(Debug, Clone)]
pub struct OrbitAudit {
    pub fate: Fate,
    /// Minimum region depth over the sampled states (before any exit).
    pub min_depth: F,
}

/// One boundary mesh point with its two one-sided fates.
#[derive(Debug, Clone)]
pub struct BoundarySample {
    pub point: Vec<F>,
    pub forward: Fate,
    pub backward: Fate,
}

/// Evidence record of one isolating-neighborhood certification.
#[derive(Debug, Clone)]
pub struct IsolationCertificate {
    pub verdict: Verdict,
    pub t_max: F,
    pub boundary_points: usize,
    pub interior_points: usize,
    /// Sampled invariant-set cloud: interior lattice points whose orbit
    /// stayed in the region for the whole window in both time directions.
    pub s_samples: Vec<Vec<F>>,
    /// Least region depth over the invariant-set samples.
    pub min_s_depth: Option<F>,
    /// The point deciding a refutation or inconclusiveness, if any.
    pub worst_point: Option<Vec<F>>,
    pub detail: String,
}

/// A finite union of closed boxes together with its boundary mesh and the
/// certificate produced when it was last verified against a flow.
#[derive(Debug, Clone)]
pub struct IsolatingNeighborhood {
    pub region: UnionRegion,
    pub boundary_mesh: Vec<Vec<F>>,
    pub certificate: IsolationCertificate,
}

impl IsolatingNeighborhood {
    pub fn require_certified(&self, stage: &'static str) -> Result<(), ConleyError> {
        if self.certificate.verdict.is_certified() {
            Ok(())
        } else {
            Err(ConleyError::NotCertified {
                stage,
                detail: format!(
                    "neighborhood verdict is {}: {}",
                    self.certificate.verdict, self.certificate.detail
                ),
            })
        }
    }
}

/// Interior depth of `x` in the union, ignoring box faces that wrap all the
/// way around a torus direction (those faces are not boundary at all). A
/// box spanning the full period in every axis yields `+inf`.
pub fn region_depth(region: &UnionRegion, domain: &Domain, x: &[F]) -> F {
    let p = domain.reduce(x);
    let mut best = F::NEG_INFINITY;
    for b in &region.boxes {
        let mut depth = F::INFINITY;
        let mut outside = false;
        for i in 0..p.len() {
            if domain.is_torus() && b.hi[i] - b.lo[i] >= 1.0 - 1e-12 {
                continue;
            }
            let d = (p[i] - b.lo[i]).min(b.hi[i] - p[i]);
            if d < depth {
                depth = d;
            }
            if d < 0.0 {
                outside = true;
            }
        }
        if outside {
            depth = b.interior_depth(domain, &p);
        }
        if depth > best {
            best = depth;
        }
    }
    best
}

/// Lattice of `per_axis` points per axis over one box, endpoints included.
fn box_lattice(b: &BoxRegion, per_axis: usize) -> Vec<Vec<F>> {
    let n = b.lo.len();
    let axis = |i: usize| -> Vec<F> {
        if per_axis <= 1 {
            return vec![0.5 * (b.lo[i] + b.hi[i])];
        }
        (0..per_axis)
            .map(|j| b.lo[i] + (b.hi[i] - b.lo[i]) * j as F / (per_axis - 1) as F)
            .collect()
    };
    let mut pts = vec![Vec::new()];
    for i in 0..n {
        let vals = axis(i);
        let mut next = Vec::with_capacity(pts.len() * vals.len());
        for p in &pts {
            for &v in &vals {
                let mut q = p.clone();
                q.push(v);
                next.push(q);
            }
        }
        pts = next;
    }
    pts
}

/// Mesh the true boundary of the union: lattice points of every box face,
/// dropping points that are interior to the union (inside another box, or
/// reachable from inside through a torus wrap).
fn boundary_mesh(region: &UnionRegion, domain: &Domain, spacing_rel: F) -> Vec<Vec<F>> {
    let n = domain.dim();
    let probe = 1e-7 * domain.scale();
    let mut mesh: Vec<Vec<F>> = Vec::new();
    for b in &region.boxes {
        let scale = (0..n).map(|i| b.hi[i] - b.lo[i]).fold(0.0_f64, F::max).max(1e-12);
        let spacing = spacing_rel * scale;
        for axis in 0..n {
            if domain.is_torus() && b.hi[axis] - b.lo[axis] >= 1.0 - 1e-12 {
                continue;
            }
            for (face, sign) in [(b.lo[axis], -1.0), (b.hi[axis], 1.0)] {
                // Lattice over the face (the remaining axes).
                let mut face_box = b.clone();
                face_box.lo[axis] = face;
                face_box.hi[axis] = face;
                let per = |i: usize| -> usize {
                    if i == axis {
                        1
                    } else {
                        (((b.hi[i] - b.lo[i]) / spacing).ceil() as usize + 1).max(2)
                    }
                };
                let mut pts = vec![Vec::new()];
                for i in 0..n {
                    let count = per(i);
                    let vals: Vec<F> = if count == 1 {
                        vec![face]
                    } else {
                        (0..count)
                            .map(|j| {
                                b.lo[i] + (b.hi[i] - b.lo[i]) * j as F / (count - 1) as F
                            })
                            .collect()
                    };
                    let mut next = Vec::with_capacity(pts.len() * vals.len());
                    for p in &pts {
                        for &v in &vals {
                            let mut q = p.clone();
                            q.push(v);
                            next.push(q);
                        }
                    }
                    pts = next;
                }
                for p in pts {
                    // Just outside along the outward normal: if that point is
                    // still in the union the face point is not true boundary.
                    let mut q = p.clone();
                    q[axis] += sign * probe;
                    let q = domain.reduce(&q);
                    if !region.contains(domain, &q) {
                        mesh.push(p);
                    }
                }
            }
        }
    }
    // Deterministic order and face-corner dedup.
    mesh.sort_by(|a, b| a.partial_cmp(b).unwrap());
    mesh.dedup_by(|a, b| {
        a.iter()
            .zip(b.iter())
            .all(|(x, y)| (x - y).abs() < 1e-12)
    });
    mesh
}

/// Newton refinement of an equilibrium from a stalled orbit endpoint.
fn newton_equilibrium(flow: &FlowSystem, t: F, x0: &[F]) -> Option<Vec<F>> {
    let mut x = x0.to_vec();
    for _ in 0..40 {
        let (v, j) = flow.velocity_jacobian(t, &x).ok()?;
        if norm(&v) < 1e-13 {
            return Some(flow.domain.reduce(&x));
        }
        let step = j.solve(&v)?;
        for (xi, si) in x.iter_mut().zip(&step) {
            *xi -= si;
        }
        if norm(&step) < 1e-14 {
            break;
        }
    }
    let (v, _) = flow.velocity_jacobian(t, &x).ok()?;
    if norm(&v) < 1e-12 {
        Some(flow.domain.reduce(&x))
    } else {
        None
    }
}

/// Follow the orbit of `p` inside `region` for up to `t_max`, inspecting the
/// endpoint for equilibrium convergence between chunks so that captured
/// orbits finish early with positive evidence.
pub fn orbit_fate(
    flow: &FlowSystem,
    region: &UnionRegion,
    p: &[F],
    t_max: F,
    tol: &FlowTolerances,
    opts: &ConleyOptions,
) -> Result<OrbitAudit, ConleyError> {
    let domain = &flow.domain;
    if !region.contains(domain, p) {
        return Ok(OrbitAudit { fate: Fate::Exits { time: 0.0 }, min_depth: region_depth(region, domain, p) });
    }
    let mut x = p.to_vec();
    let mut t_acc = 0.0_f64;
    let mut min_depth = region_depth(region, domain, &x);
    let speed_floor = opts.stall_speed * domain.scale();
    // Equilibrium capture at the start: a sampled point sitting on an
    // equilibrium (within Newton tolerance) stays for all time. Deciding
    // this here keeps noise-seeded escape along unstable directions from
    // misclassifying exact invariant-set samples.
    let v0 = flow.velocity(0.0, &x)?;
    if norm(&v0) < speed_floor {
        if let Some(eq) = newton_equilibrium(flow, 0.0, &x) {
            if domain.distance(&eq, &domain.reduce(&x)) <= tol.r_conv
                && region.contains(domain, &eq)
            {
                let d = region_depth(region, domain, &eq);
                return Ok(OrbitAudit {
                    fate: Fate::ConvergedInside { point: eq, time: 0.0 },
                    min_depth: min_depth.min(d),
                });
            }
        }
    }
    while t_acc < t_max {
        let chunk = opts.t_chunk.min(t_max - t_acc);
        let mut tt = tol.clone();
        tt.t_max = chunk + 1.0;
        let stop = StopSpec { targets: &[], region: Some(region as &dyn Region), t_final: Some(chunk) };
        let orbit = integrate(flow, &tt, &x, &stop)?;
        for s in &orbit.states {
            let d = region_depth(region, domain, s);
            if d < min_depth {
                min_depth = d;
            }
        }
        match orbit.reason {
            StopReason::LeftRegion { time, .. } => {
                return Ok(OrbitAudit { fate: Fate::Exits { time: t_acc + time }, min_depth });
            }
            StopReason::TimeReached => {
                x = orbit.last().to_vec();
                t_acc += chunk;
                let v = flow.velocity(t_acc, &x)?;
                if norm(&v) < speed_floor {
                    if let Some(eq) = newton_equilibrium(flow, t_acc, &x) {
                        let close = domain.distance(&eq, &domain.reduce(&x)) <= tol.r_conv;
                        if close && region.contains(domain, &eq) {
                            let d = region_depth(region, domain, &eq);
                            if d < min_depth {
                                min_depth = d;
                            }
                            return Ok(OrbitAudit {
                                fate: Fate::ConvergedInside { point: eq, time: t_acc },
                                min_depth,
                            });
                        }
                    }
                }
            }
            other => {
                return Err(ConleyError::Flow(FlowError::IncompleteFlow {
                    detail: format!("{other:?}"),
                }))
            }
        }
    }
    Ok(OrbitAudit { fate: Fate::Undecided, min_depth })
}

fn audit_both(
    flow: &FlowSystem,
    region: &UnionRegion,
    p: &[F],
    t_max: F,
    tol: &FlowTolerances,
    opts: &ConleyOptions,
) -> Result<(OrbitAudit, OrbitAudit), ConleyError> {
    let fwd = orbit_fate(flow, region, p, t_max, tol, opts)?;
    let bwd = orbit_fate(&flow.reverse(), region, p, t_max, tol, opts)?;
    Ok((fwd, bwd))
}

/// Certify that `region` is an isolating neighborhood of `flow`.
///
/// Every boundary mesh point must leave the region in at least one time
/// direction before `t_max`; a boundary point whose orbit provably stays
/// (both one-sided orbits stall at equilibria inside) refutes isolation,
/// while a boundary point that merely outlasts the cap is inconclusive.
/// Interior lattice points whose orbits stay in both directions form the
/// invariant-set sample cloud and must sit deeper than `margin_int`.
pub fn verify_isolating_neighborhood(
    flow: &FlowSystem,
    region: &UnionRegion,
    t_max: F,
    tol: &FlowTolerances,
    opts: &ConleyOptions,
) -> Result<IsolatingNeighborhood, ConleyError> {
    let domain = &flow.domain;
    if region.boxes.is_empty() {
        return Err(ConleyError::Precondition("empty region".into()));
    }
    let mesh = boundary_mesh(region, domain, opts.boundary_spacing);
    let boundary: Vec<(Vec<F>, OrbitAudit, OrbitAudit)> = mesh
        .par_iter()
        .map(|p| {
            let (f, b) = audit_both(flow, region, p, t_max, tol, opts)?;
            Ok((p.clone(), f, b))
        })
        .collect::<Result<_, ConleyError>>()?;

    let mut verdict = Verdict::Certified;
    let mut worst_point: Option<Vec<F>> = None;
    let mut detail = String::new();
    for (p, fwd, bwd) in &boundary {
        if fwd.fate.stays() && bwd.fate.stays() {
            let proven = matches!(fwd.fate, Fate::ConvergedInside { .. })
                && matches!(bwd.fate, Fate::ConvergedInside { .. });
            if proven {
                verdict = Verdict::Refuted;
                worst_point = Some(p.clone());
                detail = format!(
                    "boundary point {p:?} lies on an orbit connecting equilibria inside the region"
                );
                break;
            } else if verdict == Verdict::Certified {
                verdict = Verdict::Inconclusive;
                worst_point = Some(p.clone());
                detail = format!(
                    "boundary point {p:?} stayed inside in both directions for t_max = {t_max}; increase the cap"
                );
            }
        }
    }

    // Invariant-set sampling on the interior lattice.
    let mut seeds: Vec<Vec<F>> = Vec::new();
    for b in &region.boxes {
        seeds.extend(box_lattice(b, opts.interior_per_axis));
    }
    seeds.retain(|p| region.contains(domain, p));
    seeds.sort_by(|a, b| a.partial_cmp(b).unwrap());
    seeds.dedup_by(|a, b| a.iter().zip(b.iter()).all(|(x, y)| (x - y).abs() < 1e-12));
    let interior_points = seeds.len();
    let stays: Vec<(Vec<F>, OrbitAudit, OrbitAudit)> = seeds
        .par_iter()
        .map(|p| {
            let (f, b) = audit_both(flow, region, p, t_max, tol, opts)?;
            Ok((p.clone(), f, b))
        })
        .collect::<Result<Vec<_>, ConleyError>>()?
        .into_iter()
        .filter(|(_, f, b)| f.fate.stays() && b.fate.stays())
        .collect();

    let mut s_samples: Vec<Vec<F>> = Vec::new();
    let mut min_s_depth: Option<F> = None;
    for (p, fwd, bwd) in &stays {
        let depth = region_depth(region, domain, p);
        min_s_depth = Some(min_s_depth.map_or(depth, |m: F| m.min(depth)));
        if depth <= opts.margin_int && verdict != Verdict::Refuted {
            let proven = matches!(fwd.fate, Fate::ConvergedInside { .. })
                && matches!(bwd.fate, Fate::ConvergedInside { .. });
            if proven && depth <= 1e-9 * domain.scale() {
                verdict = Verdict::Refuted;
                detail = format!("invariant sample {p:?} lies on the region boundary");
            } else if verdict == Verdict::Certified {
                verdict = Verdict::Inconclusive;
                detail = format!(
                    "sample {p:?} stayed inside both directions but sits only {depth:.3e} from the boundary (margin {:.1e})",
                    opts.margin_int
                );
            }
            worst_point = Some(p.clone());
        }
        s_samples.push(p.clone());
    }
    if verdict == Verdict::Certified {
        detail = format!(
            "{} boundary points exit within t_max = {t_max}; {} invariant samples, all deeper than {:.1e}",
            boundary.len(),
            s_samples.len(),
            opts.margin_int
        );
    }
    Ok(IsolatingNeighborhood {
        region: region.clone(),
        boundary_mesh: mesh,
        certificate: IsolationCertificate {
            verdict,
            t_max,
            boundary_points: boundary.len(),
            interior_points,
            s_samples,
            min_s_depth,
            worst_point,
            detail,
        },
    })
}

/// One offending sample of a failed isolated-map certification.
#[derive(Debug, Clone)]
pub struct IsolationOffender {
    pub point: Vec<F>,
    pub reason: String,
}

/// Sampled certification that a map is isolated with respect to two
/// neighborhoods: the set `S_h` of lattice points whose backward orbit
/// stays in `N_A` and whose image's forward orbit stays in `N_B`, each
/// required to keep both orbit closures margin-interior.
#[derive(Debug, Clone)]
pub struct IsolatedMapReport {
    pub verdict: Verdict,
    /// Sampled members of `S_h` together with their images.
    pub s_h: Vec<(Vec<F>, Vec<F>)>,
    pub offenders: Vec<IsolationOffender>,
    pub t_max: F,
}

/// Certify that `h` is isolated with respect to `(n_a, n_b)` by sampling
/// the compact-intersection characterization of `S_h`.
pub fn verify_isolated_map(
    h: &MapChain,
    flow_a: &FlowSystem,
    flow_b: &FlowSystem,
    n_a: &IsolatingNeighborhood,
    n_b: &IsolatingNeighborhood,
    t_max: F,
    tol: &FlowTolerances,
    opts: &ConleyOptions,
) -> Result<IsolatedMapReport, ConleyError> {
    n_a.require_certified("isolated-map certification, source neighborhood")?;
    n_b.require_certified("isolated-map certification, target neighborhood")?;
    let domain_a = &flow_a.domain;
    let domain_b = &flow_b.domain;
    let mut seeds: Vec<Vec<F>> = Vec::new();
    for b in &n_a.region.boxes {
        seeds.extend(box_lattice(b, opts.interior_per_axis));
    }
    seeds.retain(|p| n_a.region.contains(domain_a, p));
    seeds.sort_by(|a, b| a.partial_cmp(b).unwrap());
    seeds.dedup_by(|a, b| a.iter().zip(b.iter()).all(|(x, y)| (x - y).abs() < 1e-12));

    let audited: Vec<(Vec<F>, Vec<F>, OrbitAudit, OrbitAudit)> = seeds
        .par_iter()
        .map(|p| {
            let back = orbit_fate(&flow_a.reverse(), &n_a.region, p, t_max, tol, opts)?;
            if !back.fate.stays() {
                return Ok(None);
            }
            let image = match h.apply(tol, p)? {
                Some(q) => q,
                None => return Ok(None),
            };
            if !n_b.region.contains(domain_b, &image) {
                return Ok(None);
            }
            let fwd = orbit_fate(flow_b, &n_b.region, &image, t_max, tol, opts)?;
            if !fwd.fate.stays() {
                return Ok(None);
            }
            Ok(Some((p.clone(), image, back, fwd)))
        })
        .collect::<Result<Vec<_>, ConleyError>>()?
        .into_iter()
        .flatten()
        .collect();

    let mut offenders = Vec::new();
    let mut s_h = Vec::new();
    for (p, image, back, fwd) in audited {
        if back.min_depth <= opts.margin_int {
            offenders.push(IsolationOffender {
                point: p.clone(),
                reason: format!(
                    "backward orbit closure comes within {:.3e} of the source boundary (margin {:.1e})",
                    back.min_depth, opts.margin_int
                ),
            });
        }
        if fwd.min_depth <= opts.margin_int {
            offenders.push(IsolationOffender {
                point: p.clone(),
                reason: format!(
                    "forward orbit of the image {image:?} comes within {:.3e} of the target boundary (margin {:.1e})",
                    fwd.min_depth, opts.margin_int
                ),
            });
        }
        s_h.push((p, image));
    }
    let verdict = if offenders.is_empty() { Verdict::Certified } else { Verdict::Refuted };
    Ok(IsolatedMapReport { verdict, s_h, offenders, t_max })
}

/// Sampled equivariance certification of a flow map.
#[derive(Debug, Clone)]
pub struct FlowMapReport {
    pub verdict: Verdict,
    /// Largest sampled equivariance residual.
    pub max_residual: F,
    pub worst: Option<(F, Vec<F>)>,
    /// Properness of the map: automatic on compact domains.
    pub proper: bool,
    pub samples: usize,
}

fn flow_endpoint(
    flow: &FlowSystem,
    tol: &FlowTolerances,
    p: &[F],
    t: F,
) -> Result<Vec<F>, ConleyError> {
    let (f, time) = if t < 0.0 { (flow.reverse(), -t) } else { (flow.clone(), t) };
    let mut tt = tol.clone();
    tt.t_max = time + 1.0;
    let orbit = integrate(&f, &tt, p, &StopSpec::time(time))?;
    match orbit.reason {
        StopReason::TimeReached => Ok(f.domain.reduce(orbit.last())),
        other => Err(ConleyError::Flow(FlowError::IncompleteFlow { detail: format!("{other:?}") })),
    }
}

/// Certify that `h` intertwines the two flows: `h(phi_A(t, p))` must agree
/// with `phi_B(t, h(p))` within the declared tolerance over the sampled
/// `(t, p)` grid. Properness holds automatically here because the domains
/// (tori and closed boxes) are compact.
pub fn verify_flow_map(
    h: &SmoothMap,
    flow_a: &FlowSystem,
    flow_b: &FlowSystem,
    tol: &FlowTolerances,
    opts: &ConleyOptions,
) -> Result<FlowMapReport, ConleyError> {
    if h.source.dim() != flow_a.dim() || h.target.dim() != flow_b.dim() {
        return Err(ConleyError::Precondition(
            "flow-map dimensions do not match the flows".into(),
        ));
    }
    let n = flow_a.dim();
    let per_axis = (100.0_f64).powf(1.0 / n as F).ceil() as usize;
    let points = flow_a.domain.sample_grid(per_axis);
    let times = [-2.0, -1.0, -0.5, 0.5, 1.0, 2.0];
    let results: Vec<(F, Vec<F>, F)> = points
        .par_iter()
        .flat_map(|p| times.into_iter().map(|t| (t, p.clone())).collect::<Vec<_>>())
        .map(|(t, p)| {
            let lhs = h.apply(&flow_endpoint(flow_a, tol, &p, t)?)?;
            let rhs = flow_endpoint(flow_b, tol, &h.apply(&p)?, t)?;
            Ok((t, p, flow_b.domain.distance(&lhs, &rhs)))
        })
        .collect::<Result<_, ConleyError>>()?;
    let mut max_residual = 0.0;
    let mut worst = None;
    for (t, p, r) in &results {
        if *r > max_residual {
            max_residual = *r;
            worst = Some((*t, p.clone()));
        }
    }
    let verdict = if max_residual < opts.equivariance_tol {
        Verdict::Certified
    } else {
        Verdict::Refuted
    };
    Ok(FlowMapReport { verdict, max_residual, worst, proper: true, samples: results.len() })
}

/// Result of pulling an isolating neighborhood back through a flow map.
#[derive(Debug, Clone)]
pub struct PullbackResult {
    /// The computed cover of the preimage, re-certified for the source flow.
    pub neighborhood: IsolatingNeighborhood,
    /// Certificate that the map is isolated with respect to the pair.
    pub isolated: IsolatedMapReport,
}

/// Greedy merge of an axis-aligned cell collection into fewer boxes: first
/// along the last axis, then along earlier ones.
fn merge_cells(mut cells: Vec<(Vec<F>, Vec<F>)>, dim: usize) -> Vec<(Vec<F>, Vec<F>)> {
    let eps = 1e-12;
    for axis in (0..dim).rev() {
        loop {
            cells.sort_by(|a, b| a.partial_cmp(b).unwrap());
            let mut merged: Vec<(Vec<F>, Vec<F>)> = Vec::new();
            let mut changed = false;
            'outer: for cell in cells {
                if let Some(last) = merged.last_mut() {
                    let same_others = (0..dim).all(|i| {
                        i == axis
                            || ((last.0[i] - cell.0[i]).abs() < eps
                                && (last.1[i] - cell.1[i]).abs() < eps)
                    });
                    if same_others && (last.1[axis] - cell.0[axis]).abs() < 1e-9 {
                        last.1[axis] = cell.1[axis];
                        changed = true;
                        continue 'outer;
                    }
                }
                merged.push(cell);
            }
            cells = merged;
            if !changed {
                break;
            }
        }
    }
    cells
}

/// Compute a box cover of `h^{-1}(N_B)` by coarse grid classification with
/// recursive refinement near the preimage boundary, then re-certify the
/// cover as an isolating neighborhood of `flow_a` and certify that `h` is
/// isolated with respect to the pair.
pub fn pullback_neighborhood(
    h: &SmoothMap,
    flow_a: &FlowSystem,
    flow_b: &FlowSystem,
    n_b: &IsolatingNeighborhood,
    t_max: F,
    tol: &FlowTolerances,
    opts: &ConleyOptions,
) -> Result<PullbackResult, ConleyError> {
    n_b.require_certified("pullback, target neighborhood")?;
    let domain_a = &flow_a.domain;
    let domain_b = &flow_b.domain;
    let dim = domain_a.dim();
    let inside = |p: &[F]| -> Result<bool, ConleyError> {
        let q = h.apply(p)?;
        Ok(n_b.region.contains(domain_b, &q))
    };
    // Root cells: a coarse uniform grid over the source domain.
    let coarse = 64usize;
    let bounds: Vec<(F, F)> = match domain_a {
        Domain::Torus { dim } => (0..*dim).map(|_| (0.0, 1.0)).collect(),
        Domain::Box { bounds } => bounds.clone(),
    };
    let resolution = opts.pullback_resolution * domain_a.scale();
    let mut stack: Vec<(Vec<F>, Vec<F>)> = Vec::new();
    let mut idx = vec![0usize; dim];
    loop {
        let lo: Vec<F> = (0..dim)
            .map(|i| bounds[i].0 + (bounds[i].1 - bounds[i].0) * idx[i] as F / coarse as F)
            .collect();
        let hi: Vec<F> = (0..dim)
            .map(|i| bounds[i].0 + (bounds[i].1 - bounds[i].0) * (idx[i] + 1) as F / coarse as F)
            .collect();
        stack.push((lo, hi));
        let mut carry = true;
        for i in 0..dim {
            if carry {
                idx[i] += 1;
                if idx[i] == coarse {
                    idx[i] = 0;
                } else {
                    carry = false;
                }
            }
        }
        if carry {
            break;
        }
    }
    let mut kept: Vec<(Vec<F>, Vec<F>)> = Vec::new();
    while let Some((lo, hi)) = stack.pop() {
        // Classify by the corner-and-center lattice of the cell.
        let cell = BoxRegion { lo: lo.clone(), hi: hi.clone() };
        let probes = box_lattice(&cell, 3);
        let mut ins = 0usize;
        for p in &probes {
            if inside(p)? {
                ins += 1;
            }
        }
        if ins == probes.len() {
            kept.push((lo, hi));
            continue;
        }
        if ins == 0 {
            continue;
        }
        let size = (0..dim).map(|i| hi[i] - lo[i]).fold(0.0_f64, F::max);
        if size <= resolution {
            let center: Vec<F> = (0..dim).map(|i| 0.5 * (lo[i] + hi[i])).collect();
            if inside(&center)? {
                kept.push((lo, hi));
            }
            continue;
        }
        // Bisect along the longest axis.
        let axis = (0..dim)
            .max_by(|&a, &b| (hi[a] - lo[a]).partial_cmp(&(hi[b] - lo[b])).unwrap())
            .unwrap();
        let mid = 0.5 * (lo[axis] + hi[axis]);
        let mut hi_left = hi.clone();
        hi_left[axis] = mid;
        let mut lo_right = lo.clone();
        lo_right[axis] = mid;
        stack.push((lo.clone(), hi_left));
        stack.push((lo_right, hi.clone()));
    }
    let merged = merge_cells(kept, dim);
    if merged.is_empty() {
        return Err(ConleyError::Precondition(
            "the sampled preimage of the target neighborhood is empty".into(),
        ));
    }
    let region = UnionRegion {
        boxes: merged
            .into_iter()
            .map(|(lo, hi)| BoxRegion { lo, hi })
            .collect(),
    };
    let neighborhood = verify_isolating_neighborhood(flow_a, &region, t_max, tol, opts)?;
    neighborhood.require_certified("pullback re-certification")?;
    let isolated = verify_isolated_map(
        &MapChain::smooth(h.clone()),
        flow_a,
        flow_b,
        &neighborhood,
        n_b,
        t_max,
        tol,
        opts,
    )?;
    Ok(PullbackResult { neighborhood, isolated })
}

/// Evidence record of a Lyapunov-function certification.
#[derive(Debug, Clone)]
pub struct LyapunovCertificate {
    pub verdict: Verdict,
    /// Variation of the function over the invariant-set samples.
    pub variation: F,
    /// Least decrease rate `-df(X)` over the checked grid points.
    pub margin: F,
    pub worst_point: Option<Vec<F>>,
    pub checked_points: usize,
    pub detail: String,
}

impl LyapunovCertificate {
    pub fn require_certified(&self, stage: &'static str) -> Result<(), ConleyError> {
        if self.verdict.is_certified() {
            Ok(())
        } else {
            Err(ConleyError::NotCertified { stage, detail: self.detail.clone() })
        }
    }
}

/// Certify that `f` is a Lyapunov function for the flow on the certified
/// neighborhood: constant on the invariant-set samples up to the declared
/// tolerance and strictly decreasing along the flow at every lattice point
/// farther than twice the interior margin from the sample cloud.
pub fn verify_lyapunov(
    f: &ScalarField,
    flow: &FlowSystem,
    n: &IsolatingNeighborhood,
    opts: &ConleyOptions,
) -> Result<LyapunovCertificate, ConleyError> {
    n.require_certified("Lyapunov certification")?;
    let domain = &flow.domain;
    let s = &n.certificate.s_samples;
    let mut variation = 0.0;
    if !s.is_empty() {
        let values: Vec<F> = s
            .iter()
            .map(|p| f.jet1(domain, p).map(|j| j.v))
            .collect::<Result<_, _>>()?;
        let max = values.iter().cloned().fold(F::NEG_INFINITY, F::max);
        let min = values.iter().cloned().fold(F::INFINITY, F::min);
        variation = max - min;
    }
    if variation >= opts.lyapunov_tol_const {
        return Ok(LyapunovCertificate {
            verdict: Verdict::Refuted,
            variation,
            margin: 0.0,
            worst_point: None,
            checked_points: 0,
            detail: format!(
                "function varies by {variation:.3e} over the invariant samples (allowed {:.1e})",
                opts.lyapunov_tol_const
            ),
        });
    }
    let mut seeds: Vec<Vec<F>> = Vec::new();
    for b in &n.region.boxes {
        seeds.extend(box_lattice(b, opts.interior_per_axis));
    }
    seeds.retain(|p| n.region.contains(domain, p));
    let dist_to_s = |p: &Vec<F>| -> F {
        s.iter()
            .map(|q| domain.distance(p, q))
            .fold(F::INFINITY, F::min)
    };
    seeds.retain(|p| dist_to_s(p) > 2.0 * opts.margin_int);
    let mut margin = F::INFINITY;
    let mut worst_point = None;
    for p in &seeds {
        let grad = f.jet1(domain, p)?.g;
        let x = flow.velocity(0.0, p)?;
        let decrease = -grad.iter().zip(&x).map(|(a, b)| a * b).sum::<F>();
        if decrease < margin {
            margin = decrease;
            worst_point = Some(p.clone());
        }
    }
    if seeds.is_empty() {
        margin = 0.0;
    }
    let verdict = if seeds.is_empty() || margin > 0.0 {
        Verdict::Certified
    } else {
        Verdict::Refuted
    };
    let detail = match verdict {
        Verdict::Certified => format!(
            "constant on {} invariant samples within {variation:.3e}; decreasing with margin {margin:.3e} at {} grid points",
            s.len(),
            seeds.len()
        ),
        _ => format!(
            "flow derivative is {:.3e} (not negative) at {:?}",
            -margin, worst_point
        ),
    };
    Ok(LyapunovCertificate {
        verdict,
        variation,
        margin: if seeds.is_empty() { 0.0 } else { margin },
        worst_point,
        checked_points: seeds.len(),
        detail,
    })
}

/// A local Morse complex and its homology, together with the data that
/// produced it and the isolation certificate of the (possibly perturbed)
/// gradient flow.
#[derive(Debug, Clone)]
pub struct LocalHomologyResult {
    /// Critical points restricted to the neighborhood (possibly of a
    /// perturbed function).
    pub data: MorseData,
    pub complex: MorseComplexResult,
    pub homology: Homology,
    pub isolation: IsolationCertificate,
    /// Which perturbation attempt succeeded (0 = unperturbed input).
    pub attempts: usize,
    /// The field actually used (equals the input when `attempts` is 0).
    pub field: ScalarField,
}

fn restrict_points(data: &MorseData, region: &UnionRegion) -> MorseData {
    let mut local = data.clone();
    local.points = data
        .points
        .iter()
        .filter(|p| region_depth(region, &data.flow.domain, &p.position) > 0.0)
        .cloned()
        .collect();
    local
}

fn try_local_complex(
    field: &ScalarField,
    metric: &Metric,
    domain: &Domain,
    region: &UnionRegion,
    tol: &FlowTolerances,
    opts: &CountingOptions,
) -> Result<(MorseData, MorseComplexResult), ConleyError> {
    let flow = FlowSystem::gradient(field.clone(), domain.clone(), metric.clone());
    let data = find_critical_points(&flow, tol)?;
    let local = restrict_points(&data, region);
    let complex = morse_complex(&local, Some(region as &dyn Region), tol, opts)?;
    Ok((local, complex))
}

/// Local Morse homology of `(f, g)` on a certified isolating neighborhood.
///
/// If the restriction of `f` is degenerate or fails to count cleanly, the
/// field is perturbed with a deterministic seed (shrinking amplitude, up to
/// 16 attempts); a perturbation is accepted only when the region re-certifies
/// as isolating for the perturbed gradient flow.
pub fn local_morse_homology(
    f: &ScalarField,
    metric: &Metric,
    n: &IsolatingNeighborhood,
    domain: &Domain,
    seed: u64,
    tol: &FlowTolerances,
    copts: &ConleyOptions,
    mopts: &CountingOptions,
) -> Result<LocalHomologyResult, ConleyError> {
    n.require_certified("local Morse homology")?;
    let t_max = n.certificate.t_max;
    let mut last_err: Option<ConleyError> = None;
    for attempt in 0..17 {
        let field = if attempt == 0 {
            f.clone()
        } else {
            let amplitude = 1e-2 * 0.75_f64.powi(attempt - 1);
            perturb_field(f, domain, seed.wrapping_add(attempt as u64), amplitude)
        };
        let isolation = if attempt == 0 {
            n.certificate.clone()
        } else {
            let flow = FlowSystem::gradient(field.clone(), domain.clone(), metric.clone());
            let re = verify_isolating_neighborhood(&flow, &n.region, t_max, tol, copts)?;
            if !re.certificate.verdict.is_certified() {
                continue;
            }
            re.certificate
        };
        match try_local_complex(&field, metric, domain, &n.region, tol, mopts) {
            Ok((data, complex)) => {
                if data.points.is_empty() && !isolation.s_samples.is_empty() {
                    // The finder saw no critical points although the sampled
                    // invariant set is nonempty: the restriction is degenerate
                    // (e.g. a circle of critical points) and needs a
                    // perturbation, not an empty complex.
                    last_err = Some(ConleyError::NotCertified {
                        stage: "local Morse homology",
                        detail: format!(
                            "no critical points found inside a region with {} invariant samples",
                            isolation.s_samples.len()
                        ),
                    });
                    continue;
                }
                let hom = homology(&complex.complex)?;
                return Ok(LocalHomologyResult {
                    data,
                    complex,
                    homology: hom,
                    isolation,
                    attempts: attempt as usize,
                    field,
                });
            }
            Err(e) => last_err = Some(e),
        }
    }
    Err(last_err.unwrap_or(ConleyError::Perturbation(16)))
}

/// Morse-Conley-Floer homology of the isolated invariant set in `n`,
/// together with every certificate involved: `n` must be certified for the
/// flow, `f_lyap` must certify as a Lyapunov function, the region must
/// re-certify for the gradient flow of `f_lyap`, and the homology is then
/// the local Morse homology of that gradient flow.
#[derive(Debug, Clone)]
pub struct McfResult {
    pub flow_isolation: IsolationCertificate,
    pub lyapunov: LyapunovCertificate,
    pub gradient_isolation: IsolationCertificate,
    pub local: LocalHomologyResult,
}

impl McfResult {
    pub fn homology(&self) -> &Homology {
        &self.local.homology
    }
}

pub fn mcf_homology(
    flow: &FlowSystem,
    n: &IsolatingNeighborhood,
    f_lyap: &ScalarField,
    metric: &Metric,
    seed: u64,
    tol: &FlowTolerances,
    copts: &ConleyOptions,
    mopts: &CountingOptions,
) -> Result<McfResult, ConleyError> {
    n.require_certified("Morse-Conley-Floer homology")?;
    let lyapunov = verify_lyapunov(f_lyap, flow, n, copts)?;
    lyapunov.require_certified("Morse-Conley-Floer homology, Lyapunov function")?;
    let domain = &flow.domain;
    let grad = FlowSystem::gradient(f_lyap.clone(), domain.clone(), flow.metric.clone());
    let n_grad =
        verify_isolating_neighborhood(&grad, &n.region, n.certificate.t_max, tol, copts)?;
    n_grad.require_certified("Morse-Conley-Floer homology, gradient-flow re-certification")?;
    let local = local_morse_homology(
        f_lyap,
        metric,
        &n_grad,
        domain,
        seed,
        tol,
        copts,
        mopts,
    )?;
    Ok(McfResult {
        flow_isolation: n.certificate.clone(),
        lyapunov,
        gradient_isolation: n_grad.certificate.clone(),
        local,
    })
}

/// The homology-level map induced on Morse-Conley-Floer homology by a
/// certified flow map, with the whole certificate trail.
#[derive(Debug, Clone)]
pub struct McfMapResult {
    pub flow_map: FlowMapReport,
    pub pullback: PullbackResult,
    pub lyapunov_pullback: LyapunovCertificate,
    pub source: McfResult,
    pub target: McfResult,
    /// Isolation certificate of the map with respect to the two gradient
    /// flows (the flows the intersection counting runs on).
    pub gradient_isolated: IsolatedMapReport,
    pub chain_map: InducedMapResult,
    pub on_homology: HomologyMap,
    /// The transverse representative actually counted.
    pub counted_map: SmoothMap,
}

impl McfMapResult {
    /// Induced matrices on the free parts of homology, degree by degree.
    pub fn homology_matrices(&self) -> &[crate::zalgebra::IntMat] {
        &self.on_homology.free
    }
}

/// Induced map on Morse-Conley-Floer homology of a flow map `h`.
///
/// The target neighborhood and Lyapunov data are given; the source side is
/// derived: `N_A` is the pullback of `N_B` through `h` and the source
/// Lyapunov function is `f_B \circ h`. After certifying everything the
/// local chain map is counted for a transverse perturbation of `h` and
/// pushed to homology.
#[allow(clippy::too_many_arguments)]
pub fn mcf_induced_map(
    h: &SmoothMap,
    flow_a: &FlowSystem,
    flow_b: &FlowSystem,
    n_b: &IsolatingNeighborhood,
    f_lyap_b: &ScalarField,
    metric_a: &Metric,
    metric_b: &Metric,
    seed: u64,
    tol: &FlowTolerances,
    copts: &ConleyOptions,
    mopts: &CountingOptions,
) -> Result<McfMapResult, ConleyError> {
    let flow_map = verify_flow_map(h, flow_a, flow_b, tol, copts)?;
    if !flow_map.verdict.is_certified() {
        return Err(ConleyError::NotCertified {
            stage: "induced map, flow-map equivariance",
            detail: format!("max residual {:.3e}", flow_map.max_residual),
        });
    }
    let t_max = n_b.certificate.t_max;
    let pullback = pullback_neighborhood(h, flow_a, flow_b, n_b, t_max, tol, copts)?;
    if !pullback.isolated.verdict.is_certified() {
        return Err(ConleyError::NotCertified {
            stage: "induced map, isolation over the pulled-back pair",
            detail: format!("{} offenders", pullback.isolated.offenders.len()),
        });
    }
    let f_lyap_a = h.pull_back_field(f_lyap_b);
    let lyapunov_pullback = verify_lyapunov(&f_lyap_a, flow_a, &pullback.neighborhood, copts)?;
    lyapunov_pullback.require_certified("induced map, pulled-back Lyapunov function")?;

    let source = mcf_homology(
        flow_a,
        &pullback.neighborhood,
        &f_lyap_a,
        metric_a,
        seed,
        tol,
        copts,
        mopts,
    )?;
    let target = mcf_homology(flow_b, n_b, f_lyap_b, metric_b, seed, tol, copts, mopts)?;

    // Isolation of the map with respect to the two gradient flows, which is
    // what the intersection counting below integrates.
    let grad_a = source.local.data.flow.clone();
    let grad_b = target.local.data.flow.clone();
    let n_a_grad = verify_isolating_neighborhood(
        &grad_a,
        &pullback.neighborhood.region,
        t_max,
        tol,
        copts,
    )?;
    n_a_grad.require_certified("induced map, source gradient-flow neighborhood")?;
    let n_b_grad =
        verify_isolating_neighborhood(&grad_b, &n_b.region, t_max, tol, copts)?;
    n_b_grad.require_certified("induced map, target gradient-flow neighborhood")?;
    let gradient_isolated = verify_isolated_map(
        &MapChain::smooth(h.clone()),
        &grad_a,
        &grad_b,
        &n_a_grad,
        &n_b_grad,
        t_max,
        tol,
        copts,
    )?;
    if !gradient_isolated.verdict.is_certified() {
        return Err(ConleyError::NotCertified {
            stage: "induced map, isolation for the gradient flows",
            detail: format!("{} offenders", gradient_isolated.offenders.len()),
        });
    }

    let region_a = &pullback.neighborhood.region;
    let region_b = &n_b.region;
    let counted_map = perturb_to_transverse(
        h,
        &source.local.data,
        &source.local.complex,
        &target.local.data,
        &target.local.complex,
        Some(region_a as &dyn Region),
        Some(region_b as &dyn Region),
        seed,
        tol,
        mopts,
    )?;
    let chain_map = induced_chain_map(
        &MapChain::smooth(counted_map.clone()),
        &source.local.data,
        &source.local.complex,
        &target.local.data,
        &target.local.complex,
        Some(region_a as &dyn Region),
        Some(region_b as &dyn Region),
        tol,
        mopts,
    )?;
    let on_homology = homology_map(
        &chain_map.map,
        &source.local.complex.complex,
        &target.local.complex.complex,
    )?;
    Ok(McfMapResult {
        flow_map,
        pullback,
        lyapunov_pullback,
        source,
        target,
        gradient_isolated,
        chain_map,
        on_homology,
        counted_map,
    })
}

/// Compose two graded homology-level matrices (used by functoriality
/// fixtures comparing a composite map with the composition of maps).
pub fn compose_free(outer: &[crate::zalgebra::IntMat], inner: &[crate::zalgebra::IntMat]) -> Vec<crate::zalgebra::IntMat> {
    outer
        .iter()
        .zip(inner.iter())
        .map(|(o, i)| o.mat_mat(i))
        .collect()
}

/// Convenience constructor: a graded identity map shaped like `complex`.
pub fn identity_map_like(complex: &crate::zalgebra::GradedComplex) -> GradedIntMap {
    GradedIntMap::identity(complex)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::expr::Domain;
    use crate::flow::Metric;

    fn tols() -> FlowTolerances {
        FlowTolerances::default()
    }

    fn opts() -> ConleyOptions {
        ConleyOptions::default()
    }

    fn mopts() -> CountingOptions {
        CountingOptions::default()
    }

    fn interval(lo: F, hi: F) -> UnionRegion {
        UnionRegion::single(vec![lo], vec![hi])
    }

    fn grad_flow(expr: &str, domain: Domain) -> FlowSystem {
        let f = ScalarField::parse(expr, domain.dim()).unwrap();
        FlowSystem::gradient(f, domain, Metric::Euclidean)
    }

    fn general_flow(components: &[&str], domain: Domain) -> FlowSystem {
        let exprs = components
            .iter()
            .map(|c| crate::expr::parse(c).unwrap())
            .collect();
        FlowSystem::general(exprs, domain, Metric::Euclidean)
    }

    #[test]
    fn interval_isolates_the_minimum_of_a_parabola() {
        let dom = Domain::Box { bounds: vec![(-4.0, 4.0)] };
        let flow = grad_flow("x1^2", dom);
        let n = verify_isolating_neighborhood(&flow, &interval(-1.0, 1.0), 30.0, &tols(), &opts())
            .unwrap();
        assert_eq!(n.certificate.verdict, Verdict::Certified);
        // The invariant-set sample cloud is the origin alone.
        assert_eq!(n.certificate.s_samples.len(), 1);
        assert!(n.certificate.s_samples[0][0].abs() < 1e-9);
    }

    #[test]
    fn interval_isolates_the_empty_set_for_a_distant_well() {
        let dom = Domain::Box { bounds: vec![(-4.0, 4.0)] };
        let flow = grad_flow("(x1 - 3)^2", dom);
        let n = verify_isolating_neighborhood(&flow, &interval(-1.0, 1.0), 30.0, &tols(), &opts())
            .unwrap();
        assert_eq!(n.certificate.verdict, Verdict::Certified);
        assert!(n.certificate.s_samples.is_empty());
    }

    #[test]
    fn unit_box_isolates_a_linear_planar_saddle() {
        let dom = Domain::Box { bounds: vec![(-2.0, 2.0), (-2.0, 2.0)] };
        let flow = general_flow(&["x1", "-x2"], dom);
        let region = UnionRegion::single(vec![-1.0, -1.0], vec![1.0, 1.0]);
        let n = verify_isolating_neighborhood(&flow, &region, 30.0, &tols(), &opts()).unwrap();
        assert_eq!(n.certificate.verdict, Verdict::Certified);
        assert_eq!(n.certificate.s_samples.len(), 1);
        assert!(norm(&n.certificate.s_samples[0]) < 1e-9);
    }

    #[test]
    fn equilibrium_on_the_boundary_refutes_isolation() {
        let dom = Domain::Box { bounds: vec![(-4.0, 4.0)] };
        let flow = general_flow(&["-x1"], dom);
        let n = verify_isolating_neighborhood(&flow, &interval(0.0, 1.0), 30.0, &tols(), &opts())
            .unwrap();
        assert_eq!(n.certificate.verdict, Verdict::Refuted);
    }

    #[test]
    fn certification_is_monotone_in_the_time_cap() {
        // Spiral sink: boundary mesh points where the rotation is tangent to
        // a face stay inside in both directions for a short while, so a tiny
        // cap is inconclusive; once the cap covers their backward exit the
        // region certifies, and larger caps keep certifying.
        let dom = Domain::Box { bounds: vec![(-2.0, 2.0), (-2.0, 2.0)] };
        let flow = general_flow(&["-x2 - 0.5*x1", "x1 - 0.5*x2"], dom);
        let region = UnionRegion::single(vec![-1.0, -1.0], vec![1.0, 1.0]);
        let short = verify_isolating_neighborhood(&flow, &region, 0.2, &tols(), &opts()).unwrap();
        assert_eq!(short.certificate.verdict, Verdict::Inconclusive);
        let mid = verify_isolating_neighborhood(&flow, &region, 15.0, &tols(), &opts()).unwrap();
        assert_eq!(mid.certificate.verdict, Verdict::Certified);
        let long = verify_isolating_neighborhood(&flow, &region, 60.0, &tols(), &opts()).unwrap();
        assert_eq!(long.certificate.verdict, Verdict::Certified);

        // Decided verdicts persist as the cap grows.
        let saddle = general_flow(
            &["x1", "-x2"],
            Domain::Box { bounds: vec![(-2.0, 2.0), (-2.0, 2.0)] },
        );
        for t in [15.0, 60.0] {
            let n = verify_isolating_neighborhood(&saddle, &region, t, &tols(), &opts()).unwrap();
            assert_eq!(n.certificate.verdict, Verdict::Certified);
        }
        let bad = general_flow(&["-x1"], Domain::Box { bounds: vec![(-4.0, 4.0)] });
        for t in [10.0, 50.0] {
            let n = verify_isolating_neighborhood(&bad, &interval(0.0, 1.0), t, &tols(), &opts())
                .unwrap();
            assert_eq!(n.certificate.verdict, Verdict::Refuted);
        }
    }

    #[test]
    fn a_center_is_inconclusive_at_any_cap() {
        // Periodic orbits touch the box boundary but never converge, so the
        // honest verdict is inconclusive, not refuted.
        let dom = Domain::Box { bounds: vec![(-2.0, 2.0), (-2.0, 2.0)] };
        let flow = general_flow(&["-x2", "x1"], dom);
        let region = UnionRegion::single(vec![-1.0, -1.0], vec![1.0, 1.0]);
        let n = verify_isolating_neighborhood(&flow, &region, 10.0, &tols(), &opts()).unwrap();
        assert_eq!(n.certificate.verdict, Verdict::Inconclusive);
    }

    fn certified_interval(flow: &FlowSystem, lo: F, hi: F) -> IsolatingNeighborhood {
        verify_isolating_neighborhood(flow, &interval(lo, hi), 30.0, &tols(), &opts()).unwrap()
    }

    #[test]
    fn identity_between_disjoint_wells_is_isolated_with_empty_s_h() {
        let dom = Domain::Box { bounds: vec![(-4.0, 4.0)] };
        let fa = grad_flow("x1^2", dom.clone());
        let fb = grad_flow("(x1 - 3)^2", dom.clone());
        let na = certified_interval(&fa, -1.0, 1.0);
        let nb = certified_interval(&fb, -1.0, 1.0);
        let report = verify_isolated_map(
            &MapChain::identity(dom),
            &fa,
            &fb,
            &na,
            &nb,
            30.0,
            &tols(),
            &opts(),
        )
        .unwrap();
        assert_eq!(report.verdict, Verdict::Certified);
        assert!(report.s_h.is_empty());
    }

    #[test]
    fn identity_on_one_flow_is_isolated_with_s_h_equal_to_s() {
        let dom = Domain::Box { bounds: vec![(-4.0, 4.0)] };
        let f = grad_flow("x1^2", dom.clone());
        let n = certified_interval(&f, -1.0, 1.0);
        let report = verify_isolated_map(
            &MapChain::identity(dom),
            &f,
            &f,
            &n,
            &n,
            30.0,
            &tols(),
            &opts(),
        )
        .unwrap();
        assert_eq!(report.verdict, Verdict::Certified);
        assert_eq!(report.s_h.len(), n.certificate.s_samples.len());
        // S_h <= S_A and h(S_h) <= S_B, sampled.
        for (p, q) in &report.s_h {
            let close = |cloud: &[Vec<F>], x: &Vec<F>| {
                cloud.iter().any(|c| dom_dist(&f.domain, c, x) < 1e-6)
            };
            assert!(close(&n.certificate.s_samples, p));
            assert!(close(&n.certificate.s_samples, q));
        }
    }

    fn dom_dist(domain: &Domain, a: &[F], b: &[F]) -> F {
        domain.distance(a, b)
    }

    #[test]
    fn inserting_a_long_flow_segment_breaks_isolation_at_the_critical_duration() {
        // Between the x^2 wells at 0 (source and target) with the (x-3)^2
        // flow inserted for a duration r: the origin's image reaches the
        // target boundary at r = ln(3/2)/2, where the forward orbit closure
        // stops being interior. Nearby durations refute; short and long ones
        // certify (long ones because S_h becomes empty).
        let dom = Domain::Box { bounds: vec![(-4.0, 4.0)] };
        let fa = grad_flow("x1^2", dom.clone());
        let fmid = grad_flow("(x1 - 3)^2", dom.clone());
        let na = certified_interval(&fa, -1.0, 1.0);
        let nb = na.clone();
        let verdict_at = |r: F| {
            let chain = MapChain::flow_time(fmid.clone(), r, None);
            verify_isolated_map(&chain, &fa, &fa, &na, &nb, 30.0, &tols(), &opts())
                .unwrap()
                .verdict
        };
        let r_star = 0.5 * (1.5_f64).ln();
        assert_eq!(verdict_at(0.05), Verdict::Certified);
        assert_eq!(verdict_at(r_star - 1e-3), Verdict::Refuted);
        assert_eq!(verdict_at(1.0), Verdict::Certified);
    }

    #[test]
    fn identity_is_a_flow_map_and_mismatched_fields_are_rejected() {
        let dom = Domain::Torus { dim: 1 };
        let fa = general_flow(&["sin(2*pi*x1)"], dom.clone());
        let id = SmoothMap::identity(dom.clone());
        let ok = verify_flow_map(&id, &fa, &fa, &tols(), &opts()).unwrap();
        assert_eq!(ok.verdict, Verdict::Certified);
        assert!(ok.max_residual < 1e-9);

        // x -> 2x intertwines 0.5*sin(4 pi x) with sin(2 pi y)...
        let double = SmoothMap::parse(&["2*x1"], dom.clone(), dom.clone()).unwrap();
        let fa2 = general_flow(&["0.5*sin(4*pi*x1)"], dom.clone());
        let fb = general_flow(&["sin(2*pi*x1)"], dom.clone());
        let good = verify_flow_map(&double, &fa2, &fb, &tols(), &opts()).unwrap();
        assert_eq!(good.verdict, Verdict::Certified);

        // ...but not the mismatched pair with the same field on both sides.
        let bad = verify_flow_map(&double, &fb, &fb, &tols(), &opts()).unwrap();
        assert_eq!(bad.verdict, Verdict::Refuted);
        assert!(bad.max_residual > 1e-3);
    }

    #[test]
    fn projection_of_a_product_flow_is_a_flow_map() {
        let t2 = Domain::Torus { dim: 2 };
        let t1 = Domain::Torus { dim: 1 };
        let fa = general_flow(&["sin(2*pi*x1)", "sin(2*pi*x2)"], t2.clone());
        let fb = general_flow(&["sin(2*pi*x1)"], t1.clone());
        let proj = SmoothMap::parse(&["x1"], t2, t1).unwrap();
        let report = verify_flow_map(&proj, &fa, &fb, &tols(), &opts()).unwrap();
        assert_eq!(report.verdict, Verdict::Certified);
    }

    #[test]
    fn pullback_through_the_identity_reproduces_the_neighborhood() {
        let dom = Domain::Box { bounds: vec![(-4.0, 4.0)] };
        let flow = grad_flow("x1^2", dom.clone());
        let nb = certified_interval(&flow, -1.0, 1.0);
        let id = SmoothMap::identity(dom);
        let pulled =
            pullback_neighborhood(&id, &flow, &flow, &nb, 30.0, &tols(), &opts()).unwrap();
        assert_eq!(pulled.neighborhood.certificate.verdict, Verdict::Certified);
        assert_eq!(pulled.isolated.verdict, Verdict::Certified);
        assert_eq!(pulled.neighborhood.region.boxes.len(), 1);
        let b = &pulled.neighborhood.region.boxes[0];
        let res = 1e-3 * 8.0;
        assert!((b.lo[0] + 1.0).abs() <= res + 1e-9);
        assert!((b.hi[0] - 1.0).abs() <= res + 1e-9);
    }

    #[test]
    fn pullback_of_a_band_through_the_torus_projection() {
        let t2 = Domain::Torus { dim: 2 };
        let t1 = Domain::Torus { dim: 1 };
        let fa = general_flow(&["sin(2*pi*x1)", "sin(2*pi*x2)"], t2.clone());
        let fb = general_flow(&["sin(2*pi*x1)"], t1.clone());
        let nb = verify_isolating_neighborhood(
            &fb,
            &interval(0.4, 0.6),
            30.0,
            &tols(),
            &opts(),
        )
        .unwrap();
        assert_eq!(nb.certificate.verdict, Verdict::Certified);
        let proj = SmoothMap::parse(&["x1"], t2, t1).unwrap();
        let pulled =
            pullback_neighborhood(&proj, &fa, &fb, &nb, 30.0, &tols(), &opts()).unwrap();
        assert_eq!(pulled.neighborhood.certificate.verdict, Verdict::Certified);
        assert_eq!(pulled.isolated.verdict, Verdict::Certified);
        // The cover is a single band spanning the full second axis.
        assert_eq!(pulled.neighborhood.region.boxes.len(), 1);
        let b = &pulled.neighborhood.region.boxes[0];
        assert!((b.lo[0] - 0.4).abs() <= 2e-3);
        assert!((b.hi[0] - 0.6).abs() <= 2e-3);
        assert!(b.lo[1].abs() <= 1e-9 && (b.hi[1] - 1.0).abs() <= 1e-9);
    }

    #[test]
    fn pullback_through_a_degree_two_map_yields_two_boxes() {
        let dom = Domain::Torus { dim: 1 };
        let fa = general_flow(&["0.5*sin(4*pi*x1)"], dom.clone());
        let fb = general_flow(&["sin(2*pi*x1)"], dom.clone());
        let nb = verify_isolating_neighborhood(
            &fb,
            &interval(0.4, 0.6),
            30.0,
            &tols(),
            &opts(),
        )
        .unwrap();
        let double = SmoothMap::parse(&["2*x1"], dom.clone(), dom).unwrap();
        let pulled =
            pullback_neighborhood(&double, &fa, &fb, &nb, 30.0, &tols(), &opts()).unwrap();
        assert_eq!(pulled.neighborhood.certificate.verdict, Verdict::Certified);
        assert_eq!(pulled.isolated.verdict, Verdict::Certified);
        assert_eq!(pulled.neighborhood.region.boxes.len(), 2);
        let mut lows: Vec<F> = pulled
            .neighborhood
            .region
            .boxes
            .iter()
            .map(|b| b.lo[0])
            .collect();
        lows.sort_by(|a, b| a.partial_cmp(b).unwrap());
        assert!((lows[0] - 0.2).abs() <= 2e-3);
        assert!((lows[1] - 0.7).abs() <= 2e-3);
    }

    #[test]
    fn lyapunov_certificates_accept_decreasing_and_reject_increasing_functions() {
        let dom = Domain::Box { bounds: vec![(-4.0, 4.0)] };
        let flow = general_flow(&["-x1"], dom.clone());
        let n = certified_interval(&flow, -1.0, 1.0);
        let good = ScalarField::parse("x1^2", 1).unwrap();
        let cert = verify_lyapunov(&good, &flow, &n, &opts()).unwrap();
        assert_eq!(cert.verdict, Verdict::Certified);
        assert!(cert.margin > 0.0);
        assert!(cert.variation < 1e-9);

        let bad = ScalarField::parse("-(x1^2)", 1).unwrap();
        let cert = verify_lyapunov(&bad, &flow, &n, &opts()).unwrap();
        assert_eq!(cert.verdict, Verdict::Refuted);
    }

    #[test]
    fn lyapunov_certificate_for_the_planar_saddle() {
        let dom = Domain::Box { bounds: vec![(-2.0, 2.0), (-2.0, 2.0)] };
        let flow = general_flow(&["x1", "-x2"], dom);
        let region = UnionRegion::single(vec![-1.0, -1.0], vec![1.0, 1.0]);
        let n = verify_isolating_neighborhood(&flow, &region, 30.0, &tols(), &opts()).unwrap();
        let f = ScalarField::parse("x2^2 - x1^2", 2).unwrap();
        let cert = verify_lyapunov(&f, &flow, &n, &opts()).unwrap();
        assert_eq!(cert.verdict, Verdict::Certified);
        assert!(cert.margin > 0.0);
    }

    fn local_homology_of(
        expr: &str,
        domain: Domain,
        region: UnionRegion,
    ) -> LocalHomologyResult {
        let flow = grad_flow(expr, domain.clone());
        let n = verify_isolating_neighborhood(&flow, &region, 30.0, &tols(), &opts()).unwrap();
        assert_eq!(n.certificate.verdict, Verdict::Certified);
        let f = ScalarField::parse(expr, domain.dim()).unwrap();
        local_morse_homology(
            &f,
            &Metric::Euclidean,
            &n,
            &domain,
            7,
            &tols(),
            &opts(),
            &mopts(),
        )
        .unwrap()
    }

    #[test]
    fn local_homology_of_a_well_is_a_point() {
        let dom = Domain::Box { bounds: vec![(-4.0, 4.0)] };
        let res = local_homology_of("x1^2", dom, interval(-1.0, 1.0));
        assert_eq!(res.homology.betti(), vec![1, 0]);
        assert_eq!(res.attempts, 0);
    }

    #[test]
    fn local_homology_of_a_cap_is_a_shifted_point() {
        let dom = Domain::Box { bounds: vec![(-4.0, 4.0)] };
        let res = local_homology_of("-(x1^2)", dom, interval(-1.0, 1.0));
        assert_eq!(res.homology.betti(), vec![0, 1]);
    }

    #[test]
    fn local_homology_of_a_planar_saddle_sits_in_degree_one() {
        let dom = Domain::Box { bounds: vec![(-2.0, 2.0), (-2.0, 2.0)] };
        let region = UnionRegion::single(vec![-1.0, -1.0], vec![1.0, 1.0]);
        let res = local_homology_of("x1^2 - x2^2", dom, region);
        assert_eq!(res.homology.betti(), vec![0, 1, 0]);
    }

    #[test]
    fn mcf_homology_of_attractor_saddle_and_repeller() {
        let tol = tols();
        let co = opts();
        let mo = mopts();

        // 1D attractor.
        let dom1 = Domain::Box { bounds: vec![(-4.0, 4.0)] };
        let attract = general_flow(&["-x1"], dom1.clone());
        let n = certified_interval(&attract, -1.0, 1.0);
        let f = ScalarField::parse("x1^2", 1).unwrap();
        let res = mcf_homology(&attract, &n, &f, &Metric::Euclidean, 7, &tol, &co, &mo).unwrap();
        assert_eq!(res.homology().betti(), vec![1, 0]);

        // 1D repeller.
        let repel = general_flow(&["x1"], dom1.clone());
        let n = certified_interval(&repel, -1.0, 1.0);
        let f = ScalarField::parse("-(x1^2)", 1).unwrap();
        let res = mcf_homology(&repel, &n, &f, &Metric::Euclidean, 7, &tol, &co, &mo).unwrap();
        assert_eq!(res.homology().betti(), vec![0, 1]);

        // Planar saddle.
        let dom2 = Domain::Box { bounds: vec![(-2.0, 2.0), (-2.0, 2.0)] };
        let saddle = general_flow(&["x1", "-x2"], dom2.clone());
        let region = UnionRegion::single(vec![-1.0, -1.0], vec![1.0, 1.0]);
        let n = verify_isolating_neighborhood(&saddle, &region, 30.0, &tols(), &opts()).unwrap();
        let f = ScalarField::parse("x2^2 - x1^2", 2).unwrap();
        let res = mcf_homology(&saddle, &n, &f, &Metric::Euclidean, 7, &tol, &co, &mo).unwrap();
        assert_eq!(res.homology().betti(), vec![0, 1, 0]);
    }

    #[test]
    fn mcf_homology_is_invariant_across_lyapunov_choices() {
        let dom = Domain::Box { bounds: vec![(-4.0, 4.0)] };
        let flow = general_flow(&["-x1"], dom.clone());
        let n = certified_interval(&flow, -1.0, 1.0);
        let f1 = ScalarField::parse("x1^2", 1).unwrap();
        let f2 = ScalarField::parse("2*x1^2", 1).unwrap();
        let r1 =
            mcf_homology(&flow, &n, &f1, &Metric::Euclidean, 7, &tols(), &opts(), &mopts())
                .unwrap();
        let r2 =
            mcf_homology(&flow, &n, &f2, &Metric::Euclidean, 7, &tols(), &opts(), &mopts())
                .unwrap();
        assert_eq!(r1.homology().betti(), r2.homology().betti());
        assert_eq!(
            r1.homology().degrees.iter().map(|d| d.torsion.clone()).collect::<Vec<_>>(),
            r2.homology().degrees.iter().map(|d| d.torsion.clone()).collect::<Vec<_>>()
        );
    }

    #[test]
    fn gradient_mcf_equals_local_morse_homology() {
        let dom = Domain::Box { bounds: vec![(-4.0, 4.0)] };
        let f = ScalarField::parse("x1^2", 1).unwrap();
        let flow = FlowSystem::gradient(f.clone(), dom.clone(), Metric::Euclidean);
        let n = certified_interval(&flow, -1.0, 1.0);
        let mcf =
            mcf_homology(&flow, &n, &f, &Metric::Euclidean, 7, &tols(), &opts(), &mopts())
                .unwrap();
        let local = local_morse_homology(
            &f,
            &Metric::Euclidean,
            &n,
            &dom,
            7,
            &tols(),
            &opts(),
            &mopts(),
        )
        .unwrap();
        assert_eq!(mcf.homology(), &local.homology);
    }

    #[test]
    fn identity_induces_the_identity_on_mcf_homology() {
        let dom = Domain::Torus { dim: 1 };
        let flow = general_flow(&["sin(2*pi*x1)"], dom.clone());
        let nb = verify_isolating_neighborhood(
            &flow,
            &interval(0.4, 0.6),
            30.0,
            &tols(),
            &opts(),
        )
        .unwrap();
        let f_lyap = ScalarField::parse("cos(2*pi*x1)", 1).unwrap();
        let id = SmoothMap::identity(dom);
        let res = mcf_induced_map(
            &id,
            &flow,
            &flow,
            &nb,
            &f_lyap,
            &Metric::Euclidean,
            &Metric::Euclidean,
            7,
            &tols(),
            &opts(),
            &mopts(),
        )
        .unwrap();
        assert_eq!(res.source.homology().betti(), vec![1, 0]);
        assert_eq!(res.target.homology().betti(), vec![1, 0]);
        let h0 = &res.on_homology.free[0];
        assert_eq!((h0.rows, h0.cols), (1, 1));
        assert_eq!(h0[(0, 0)], crate::Z::from(1));
    }

    #[test]
    fn projection_induces_the_kunneth_projection_on_mcf_homology() {
        // Product flow over the band maps onto the circle attractor: the
        // invariant set upstairs is an attracting circle with homology
        // (Z, Z); degree 0 surjects onto the attractor class downstairs and
        // degree 1 dies.
        let t2 = Domain::Torus { dim: 2 };
        let t1 = Domain::Torus { dim: 1 };
        let fa = general_flow(&["sin(2*pi*x1)", "sin(2*pi*x2)"], t2.clone());
        let fb = general_flow(&["sin(2*pi*x1)"], t1.clone());
        let nb = verify_isolating_neighborhood(
            &fb,
            &interval(0.4, 0.6),
            30.0,
            &tols(),
            &opts(),
        )
        .unwrap();
        let f_lyap = ScalarField::parse("cos(2*pi*x1)", 1).unwrap();
        let proj = SmoothMap::parse(&["x1"], t2, t1).unwrap();
        let res = mcf_induced_map(
            &proj,
            &fa,
            &fb,
            &nb,
            &f_lyap,
            &Metric::Euclidean,
            &Metric::Euclidean,
            7,
            &tols(),
            &opts(),
            &mopts(),
        )
        .unwrap();
        assert_eq!(res.source.homology().betti(), vec![1, 1, 0]);
        assert_eq!(res.target.homology().betti(), vec![1, 0]);
        let h0 = &res.on_homology.free[0];
        assert_eq!((h0.rows, h0.cols), (1, 1));
        assert_eq!(num_traits::Signed::abs(&h0[(0, 0)]), crate::Z::from(1));
        assert!(res.on_homology.free[1].rows == 0);
    }

    #[test]
    fn composite_flow_maps_induce_the_composite_on_mcf_homology() {
        // x -> 2x from the double-speed double-well circle onto the basic
        // circle flow, then a rotation by -1/4 onto a shifted copy; the
        // composite induced map equals the composition degreewise.
        let dom = Domain::Torus { dim: 1 };
        let fa = general_flow(&["0.5*sin(4*pi*x1)"], dom.clone());
        let fb = general_flow(&["sin(2*pi*x1)"], dom.clone());
        let fc = general_flow(&["cos(2*pi*x1)"], dom.clone());
        let h1 = SmoothMap::parse(&["2*x1"], dom.clone(), dom.clone()).unwrap();
        let h2 = SmoothMap::parse(&["x1 - 0.25"], dom.clone(), dom.clone()).unwrap();
        let composite = h2.after(&h1);

        let nc = verify_isolating_neighborhood(
            &fc,
            &interval(0.15, 0.35),
            30.0,
            &tols(),
            &opts(),
        )
        .unwrap();
        let f_lyap_c = ScalarField::parse("-sin(2*pi*x1)", 1).unwrap();
        let nb = verify_isolating_neighborhood(
            &fb,
            &interval(0.4, 0.6),
            30.0,
            &tols(),
            &opts(),
        )
        .unwrap();
        let f_lyap_b = ScalarField::parse("cos(2*pi*x1)", 1).unwrap();

        let m2 = mcf_induced_map(
            &h2,
            &fb,
            &fc,
            &nc,
            &f_lyap_c,
            &Metric::Euclidean,
            &Metric::Euclidean,
            7,
            &tols(),
            &opts(),
            &mopts(),
        )
        .unwrap();
        let m1 = mcf_induced_map(
            &h1,
            &fa,
            &fb,
            &nb,
            &f_lyap_b,
            &Metric::Euclidean,
            &Metric::Euclidean,
            7,
            &tols(),
            &opts(),
            &mopts(),
        )
        .unwrap();
        let mc = mcf_induced_map(
            &composite,
            &fa,
            &fc,
            &nc,
            &f_lyap_c,
            &Metric::Euclidean,
            &Metric::Euclidean,
            7,
            &tols(),
            &opts(),
            &mopts(),
        )
        .unwrap();
        // Two preimage wells upstairs, one attractor downstairs.
        assert_eq!(mc.source.homology().betti(), vec![2, 0]);
        assert_eq!(mc.target.homology().betti(), vec![1, 0]);
        let expected = compose_free(&m2.on_homology.free, &m1.on_homology.free);
        assert_eq!(mc.on_homology.free[0], expected[0]);
    }
}

//! Counting connecting orbits between critical points with orientation
//! signs, and assembling the resulting chain complex.
//!
//! The orientation convention is fiber-first throughout: for a short exact
//! sequence 0 -> A -> B -> C -> 0 an orientation of B is the orientation of A
//! followed by one of C. Concretely, the sign of an index-difference-one
//! orbit from `x` to `y` is computed by transporting the canonical unstable
//! frame of `x` along the orbit (variational equation with orientation-
//! preserving re-orthonormalization) to a point `q` near `y`, and comparing
//! it there against the basis (flow direction at `q`, canonical unstable
//! frame of `y`): the sign is the determinant sign of the pairing matrix.
//! Chain-level identities downstream hold exactly over the integers, so any
//! inconsistency in this recipe is caught by the boundary-squared check.

use crate::flow::{
    integrate, transport_frame, ConvergenceTarget, FlowError, FlowTolerances, MorseData, Region,
    StopReason, StopSpec,
};
use crate::linalg::Mat;
use crate::zalgebra::{AlgebraError, GradedComplex, IntMat};
use crate::{F, Z};
use rayon::prelude::*;
use thiserror::Error;

pub use crate::inducedmaps::{continuation_map, ContinuationOutcome};

#[derive(Debug, Error)]
pub enum ModuliError {
    #[error(transparent)]
    Flow(#[from] FlowError),
    #[error(transparent)]
    Algebra(#[from] AlgebraError),
    #[error("orbit counting supports dimension <= 2, got {0}")]
    UnsupportedDimension(usize),
    #[error("witness verification failed: {0}")]
    Witness(String),
}

/// Options of the witness search.
#[derive(Debug, Clone)]
pub struct CountingOptions {
    /// Directions sampled on the unstable circle of an index-2 point.
    pub circle_samples: usize,
    /// Orbits passing within this distance of a saddle get a signed miss.
    pub capture_radius: F,
    /// Direction-angle (and curve-parameter) bisection stops below this width.
    pub theta_tol: F,
    /// Step used for the finite-difference transversality slope.
    pub slope_probe: F,
    /// Samples taken along an unstable branch when scanning for map
    /// intersection witnesses.
    pub curve_samples: usize,
    /// Seeds per axis for Newton preimage searches of expression maps.
    pub preimage_grid: usize,
}

impl Default for CountingOptions {
    fn default() -> Self {
        CountingOptions {
            circle_samples: 720,
            capture_radius: 0.05,
            theta_tol: 1e-10,
            slope_probe: 1e-5,
            curve_samples: 256,
            preimage_grid: 24,
        }
    }
}

/// One verified connecting orbit.
#[derive(Debug, Clone)]
pub struct ConnectionWitness {
    pub source: usize,
    pub target: usize,
    /// Coefficients of the launch direction in the source unstable frame.
    pub direction: Vec<F>,
    /// Orientation sign computed with canonical frames (orientation
    /// multipliers of the endpoints not folded in).
    pub sign_canonical: i8,
    /// |d miss / d theta| at the root, or the branch separation margin.
    pub transversality_margin: F,
    /// Determinant magnitude of the frame-pairing matrix (conditioning).
    pub pairing_det: F,
    pub samples: usize,
}

/// Counted connections from one source to one target.
#[derive(Debug, Clone)]
pub struct CountResult {
    pub source: usize,
    pub target: usize,
    /// Sum of canonical signs over witnesses.
    pub eps_sum: i64,
    pub witnesses: Vec<ConnectionWitness>,
}

/// The assembled Morse complex plus everything used to build it.
#[derive(Debug, Clone)]
pub struct MorseComplexResult {
    pub complex: GradedComplex,
    /// Per degree, the indices into `MorseData::points` of its generators.
    pub generator_points: Vec<Vec<usize>>,
    pub counts: Vec<CountResult>,
}

pub(crate) fn signum_i8(x: F) -> i8 {
    if x > 0.0 {
        1
    } else {
        -1
    }
}

/// Transport the canonical unstable frame of `x` along the orbit from
/// `start` into the convergence ball of `y` and compute the orientation
/// sign there. Returns (sign, |det|).
fn orientation_sign(
    data: &MorseData,
    x: usize,
    y: usize,
    start: &[F],
    region: Option<&dyn Region>,
    tol: &FlowTolerances,
) -> Result<(i8, F), ModuliError> {
    let px = &data.points[x];
    let py = &data.points[y];
    let metric = &data.flow.metric;
    let targets = [py.forward_target()];
    let stop = StopSpec { targets: &targets, region, t_final: None };
    let (orbit, frame) = transport_frame(&data.flow, tol, start, &px.unstable_frame, &stop)?;
    if !matches!(orbit.reason, StopReason::Converged { target: 0, .. }) {
        return Err(ModuliError::Witness(format!(
            "sign transport did not converge to the target: {:?}",
            orbit.reason
        )));
    }
    let q = orbit.last();
    let v = data.flow.velocity(0.0, q)?;
    let vn = metric.norm(&v);
    if vn == 0.0 {
        return Err(ModuliError::Witness("flow direction vanished at the witness point".into()));
    }
    let vhat: Vec<F> = v.iter().map(|c| c / vn).collect();
    let k = px.index;
    debug_assert_eq!(k, py.index + 1);
    let mut a = Mat::zeros(k, k);
    for j in 0..k {
        let fj = frame.col(j);
        a[(0, j)] = metric.inner(&vhat, &fj);
        for m in 0..py.index {
            a[(1 + m, j)] = metric.inner(&py.unstable_frame.col(m), &fj);
        }
    }
    let det = a.det();
    if det == 0.0 {
        return Err(ModuliError::Witness("degenerate frame pairing at the witness point".into()));
    }
    Ok((signum_i8(det), det.abs()))
}

/// Classification of a probe orbit for bracketing purposes.
#[derive(Debug, Clone, PartialEq)]
pub(crate) enum ProbeClass {
    Converged(usize),
    Stopped,
}

#[derive(Debug, Clone)]
pub(crate) struct Probe {
    pub(crate) class: ProbeClass,
    /// Signed miss relative to every index-1 point: unstable coordinate of
    /// the displacement at the closest captured approach.
    pub(crate) miss: Vec<Option<F>>,
    /// Ungated closest-approach distance to every index-1 point, used to
    /// detect connections whose capture window falls between grid samples.
    pub(crate) dist: Vec<F>,
}

pub(crate) fn run_probe(
    data: &MorseData,
    saddles: &[usize],
    targets: &[ConvergenceTarget],
    start: &[F],
    region: Option<&dyn Region>,
    tol: &FlowTolerances,
    opts: &CountingOptions,
) -> Result<Probe, ModuliError> {
    let stop = StopSpec { targets, region, t_final: None };
    let orbit = integrate(&data.flow, tol, start, &stop)?;
    let class = match orbit.reason {
        StopReason::Converged { target, .. } => ProbeClass::Converged(target),
        _ => ProbeClass::Stopped,
    };
    let metric = &data.flow.metric;
    let domain = &data.flow.domain;
    let capture = opts.capture_radius * domain.scale();
    let mut miss = Vec::with_capacity(saddles.len());
    let mut dist = Vec::with_capacity(saddles.len());
    for &s in saddles {
        let p = &data.points[s];
        let (i, d0) = orbit.closest_approach(domain, metric, &p.position);
        dist.push(d0);
        if d0 > capture {
            miss.push(None);
        } else {
            let d = domain.displacement(&p.position, &orbit.states[i]);
            miss.push(Some(metric.inner(&p.unstable_frame.col(0), &d)));
        }
    }
    Ok(Probe { class, miss, dist })
}

/// Do two probes lie on the same side of every separating stable manifold?
pub(crate) fn same_side(a: &Probe, b: &Probe) -> bool {
    if a.class != b.class {
        return false;
    }
    for (ma, mb) in a.miss.iter().zip(&b.miss) {
        if let (Some(x), Some(y)) = (ma, mb) {
            if x.signum() != y.signum() && x.abs() > 0.0 && y.abs() > 0.0 {
                return false;
            }
        }
    }
    true
}

struct CircleScan<'a> {
    data: &'a MorseData,
    x: usize,
    saddles: Vec<usize>,
    targets: Vec<ConvergenceTarget>,
    region: Option<&'a dyn Region>,
    tol: &'a FlowTolerances,
    opts: &'a CountingOptions,
    radius: F,
}

impl<'a> CircleScan<'a> {
    fn launch(&self, theta: F) -> Vec<F> {
        self.data.points[self.x].launch_point(&[theta.cos(), theta.sin()], self.radius)
    }

    fn probe(&self, theta: F) -> Result<Probe, ModuliError> {
        run_probe(
            self.data,
            &self.saddles,
            &self.targets,
            &self.launch(theta),
            self.region,
            self.tol,
            self.opts,
        )
    }

    /// Signed miss of the probe at `theta` relative to saddle list slot `s`.
    fn miss_at(&self, theta: F, s: usize) -> Result<Option<F>, ModuliError> {
        Ok(self.probe(theta)?.miss[s])
    }
}

/// Bisect a bracketed separating direction down to the angular tolerance and
/// certify the connection it isolates, if any.
#[allow(clippy::too_many_arguments)]
fn resolve_bracket(
    data: &MorseData,
    x: usize,
    scan: &CircleScan,
    mut ta: F,
    mut pa: Probe,
    mut tb: F,
    region: Option<&dyn Region>,
    tol: &FlowTolerances,
    opts: &CountingOptions,
) -> Result<Option<ConnectionWitness>, ModuliError> {
    while tb - ta > opts.theta_tol {
        let tm = 0.5 * (ta + tb);
        let pm = scan.probe(tm)?;
        if let ProbeClass::Converged(t) = pm.class {
            if data.points[t].index == 1 {
                // Landed exactly on the stable manifold.
                ta = tm;
                tb = tm;
                break;
            }
        }
        if same_side(&pm, &pa) {
            ta = tm;
            pa = pm;
        } else {
            tb = tm;
        }
    }
    let t_star = 0.5 * (ta + tb);
    // The deep orbit follows a stable manifold; find out whose.
    let deep = scan.probe(t_star)?;
    match deep.class {
        ProbeClass::Converged(t) if data.points[t].index == 1 => {
            Ok(Some(certify_witness(data, x, t, scan, t_star, region, tol, opts)?))
        }
        // The bracket separated basins through a corner structure that is
        // not an index-1 connection (possible only outside the certified
        // Morse–Smale regime) or through the region boundary; it
        // contributes no witness.
        _ => Ok(None),
    }
}

/// Angle of a circle-scan witness direction.
fn witness_angle(w: &ConnectionWitness) -> F {
    w.direction[1].atan2(w.direction[0])
}

/// Distance between two angles on the circle.
fn angular_distance(a: F, b: F) -> F {
    let two_pi = 2.0 * std::f64::consts::PI;
    let d = (a - b).rem_euclid(two_pi);
    d.min(two_pi - d)
}

/// All index-difference-one witnesses out of an index-2 point in dimension 2.
fn witnesses_from_index2(
    data: &MorseData,
    x: usize,
    region: Option<&dyn Region>,
    tol: &FlowTolerances,
    opts: &CountingOptions,
) -> Result<Vec<ConnectionWitness>, ModuliError> {
    let saddles = data.points_of_index(1);
    let targets: Vec<ConvergenceTarget> =
        data.points.iter().map(|p| p.forward_target()).collect();
    let scan = CircleScan {
        data,
        x,
        saddles: saddles.clone(),
        targets,
        region,
        tol,
        opts,
        radius: tol.launch_radius * data.flow.domain.scale(),
    };
    let m = opts.circle_samples;
    let step = 2.0 * std::f64::consts::PI / m as F;
    let thetas: Vec<F> = (0..m).map(|i| step * i as F).collect();
    let probes: Vec<Probe> = thetas
        .par_iter()
        .map(|&th| scan.probe(th))
        .collect::<Result<Vec<_>, _>>()?;

    let mut witnesses = Vec::new();
    for i in 0..m {
        let j = (i + 1) % m;
        let (ta, tb) = (thetas[i], thetas[i] + step);
        let (pa, pb) = (probes[i].clone(), probes[j].clone());
        // Direct hits on a saddle at a grid angle are witnesses themselves;
        // a run of consecutive converged samples is one connection, so only
        // the first sample of the run is certified.
        if let ProbeClass::Converged(t) = pa.class {
            if data.points[t].index == 1 {
                let prev = &probes[(i + m - 1) % m];
                if !matches!(prev.class, ProbeClass::Converged(s) if s == t) {
                    witnesses.push(certify_witness(data, x, t, &scan, ta, region, tol, opts)?);
                }
                continue;
            }
        }
        if same_side(&pa, &pb) {
            continue;
        }
        if let Some(w) = resolve_bracket(data, x, &scan, ta, pa, tb, region, tol, opts)? {
            witnesses.push(w);
        }
    }

    // A connection whose capture window straddles fewer than two grid
    // samples never shows a miss-sign flip above: the neighbours report no
    // miss at all and pass the same-side test. Such roots still dent the
    // ungated closest-approach profile, so refine every local dip of the
    // sampled distance to each saddle and keep those that bracket a genuine
    // sign change once inside the capture tube.
    let capture = opts.capture_radius * data.flow.domain.scale();
    let mut dips: Vec<(usize, usize)> = Vec::new();
    for slot in 0..saddles.len() {
        for i in 0..m {
            let prev = probes[(i + m - 1) % m].dist[slot];
            let next = probes[(i + 1) % m].dist[slot];
            let d = probes[i].dist[slot];
            if d < 4.0 * capture && d <= prev && d < next {
                dips.push((slot, i));
            }
        }
    }
    let refined: Vec<(usize, F, F)> = dips
        .par_iter()
        .map(|&(slot, i)| -> Result<(usize, F, F), ModuliError> {
            // Trisect the dip down to the angular scale where a probe on
            // either side of the root is guaranteed to sit inside the tube.
            let (mut lo, mut hi) = (thetas[i] - step, thetas[i] + step);
            while hi - lo > 1e-6 {
                let t1 = lo + (hi - lo) / 3.0;
                let t2 = hi - (hi - lo) / 3.0;
                if scan.probe(t1)?.dist[slot] < scan.probe(t2)?.dist[slot] {
                    hi = t2;
                } else {
                    lo = t1;
                }
            }
            Ok((slot, lo, hi))
        })
        .collect::<Result<Vec<_>, _>>()?;
    let merge_tol = 0.6 * step;
    for (slot, lo, hi) in refined {
        let center = 0.5 * (lo + hi);
        let duplicate = |ws: &[ConnectionWitness], target: usize, theta: F| {
            ws.iter().any(|w| {
                w.target == target && angular_distance(witness_angle(w), theta) < merge_tol
            })
        };
        if duplicate(&witnesses, saddles[slot], center) {
            continue;
        }
        let (t0, t1) = (center - 1e-5, center + 1e-5);
        let (pa, pb) = (scan.probe(t0)?, scan.probe(t1)?);
        let bracketed = matches!(
            (pa.miss[slot], pb.miss[slot]),
            (Some(u), Some(v)) if u.signum() != v.signum()
        );
        if !bracketed {
            continue; // a flyby dip: the orbit passes the saddle on one side
        }
        if let Some(w) = resolve_bracket(data, x, &scan, t0, pa, t1, region, tol, opts)? {
            if !duplicate(&witnesses, w.target, witness_angle(&w)) {
                witnesses.push(w);
            }
        }
    }
    Ok(merge_witnesses(witnesses, merge_tol))
}

/// Collapse witness clusters that certify the same separatrix twice. When a
/// separating direction falls on or near a grid angle, the orbit pencil that
/// the convergence tolerance accepts can be wide enough for both the direct
/// grid hit and the neighbouring bracket resolution to report it. Witnesses
/// to the same saddle closer than the merge tolerance (a bit over half a
/// sample step, the largest duplicate separation the scan can produce) are
/// below the scan's resolving power, so they are one connection; the
/// best-margin representative is kept.
fn merge_witnesses(witnesses: Vec<ConnectionWitness>, merge_tol: F) -> Vec<ConnectionWitness> {
    let mut groups: std::collections::BTreeMap<usize, Vec<ConnectionWitness>> =
        std::collections::BTreeMap::new();
    for w in witnesses {
        groups.entry(w.target).or_default().push(w);
    }
    let mut out = Vec::new();
    for (_, mut group) in groups {
        group.sort_by(|a, b| witness_angle(a).total_cmp(&witness_angle(b)));
        let mut clusters: Vec<Vec<ConnectionWitness>> = Vec::new();
        for w in group {
            match clusters.last_mut() {
                Some(c)
                    if angular_distance(
                        witness_angle(c.last().unwrap()),
                        witness_angle(&w),
                    ) < merge_tol =>
                {
                    c.push(w);
                }
                _ => clusters.push(vec![w]),
            }
        }
        // The first and last clusters may be one cluster across the wrap.
        if clusters.len() > 1 {
            let first = witness_angle(&clusters[0][0]);
            let last = witness_angle(clusters.last().unwrap().last().unwrap());
            if angular_distance(first, last) < merge_tol {
                let tail = clusters.pop().unwrap();
                clusters[0].splice(0..0, tail);
            }
        }
        for cluster in clusters {
            let best = cluster
                .into_iter()
                .max_by(|a, b| {
                    a.transversality_margin
                        .total_cmp(&b.transversality_margin)
                        .then(witness_angle(b).total_cmp(&witness_angle(a)))
                })
                .unwrap();
            out.push(best);
        }
    }
    out
}

/// Verify a connection at direction `theta`, compute its sign and margins.
#[allow(clippy::too_many_arguments)]
fn certify_witness(
    data: &MorseData,
    x: usize,
    y: usize,
    scan: &CircleScan,
    theta: F,
    region: Option<&dyn Region>,
    tol: &FlowTolerances,
    opts: &CountingOptions,
) -> Result<ConnectionWitness, ModuliError> {
    let start = scan.launch(theta);
    let (sign, pairing_det) = orientation_sign(data, x, y, &start, region, tol)?;
    // Transversality margin: finite-difference slope of the signed miss.
    let slot = scan.saddles.iter().position(|&s| s == y).expect("target is a saddle");
    let d = opts.slope_probe;
    let m_plus = scan.miss_at(theta + d, slot)?;
    let m_minus = scan.miss_at(theta - d, slot)?;
    let margin = match (m_plus, m_minus) {
        (Some(a), Some(b)) => ((a - b) / (2.0 * d)).abs(),
        _ => 0.0,
    };
    Ok(ConnectionWitness {
        source: x,
        target: y,
        direction: vec![theta.cos(), theta.sin()],
        sign_canonical: sign,
        transversality_margin: margin,
        pairing_det,
        samples: opts.circle_samples,
    })
}

/// Witnesses out of an index-1 point: its two unstable branches.
fn witnesses_from_index1(
    data: &MorseData,
    x: usize,
    region: Option<&dyn Region>,
    tol: &FlowTolerances,
) -> Result<Vec<ConnectionWitness>, ModuliError> {
    let targets: Vec<ConvergenceTarget> =
        data.points.iter().map(|p| p.forward_target()).collect();
    let radius = tol.launch_radius * data.flow.domain.scale();
    let mut out = Vec::new();
    for dir in [1.0_f64, -1.0] {
        let start = data.points[x].launch_point(&[dir], radius);
        let stop = StopSpec { targets: &targets, region, t_final: None };
        let orbit = integrate(&data.flow, tol, &start, &stop)?;
        let StopReason::Converged { target, .. } = orbit.reason else {
            continue; // branch exits the region: no witness
        };
        if data.points[target].index + 1 != data.points[x].index {
            continue; // equal-index limit is a Morse–Smale failure caught elsewhere
        }
        let (sign, pairing_det) = orientation_sign(data, x, target, &start, region, tol)?;
        // Branch margin: distance of the branch orbit from every other
        // index-0 basin boundary is implicit; report the closest approach to
        // other saddles as the separation margin.
        let mut margin = F::INFINITY;
        for (j, q) in data.points.iter().enumerate() {
            if j == x || q.index != data.points[x].index {
                continue;
            }
            let (_, dist) =
                orbit.closest_approach(&data.flow.domain, &data.flow.metric, &q.position);
            margin = margin.min(dist);
        }
        out.push(ConnectionWitness {
            source: x,
            target,
            direction: vec![dir],
            sign_canonical: sign,
            transversality_margin: if margin.is_finite() { margin } else { 1.0 },
            pairing_det,
            samples: 2,
        });
    }
    Ok(out)
}

/// All witnesses out of source point `x` to targets one index below.
pub fn witnesses_from(
    data: &MorseData,
    x: usize,
    region: Option<&dyn Region>,
    tol: &FlowTolerances,
    opts: &CountingOptions,
) -> Result<Vec<ConnectionWitness>, ModuliError> {
    let n = data.dim();
    if n > 2 {
        return Err(ModuliError::UnsupportedDimension(n));
    }
    match data.points[x].index {
        0 => Ok(Vec::new()),
        1 => witnesses_from_index1(data, x, region, tol),
        2 => witnesses_from_index2(data, x, region, tol, opts),
        k => Err(ModuliError::Witness(format!(
            "index {k} source in dimension {n} cannot occur"
        ))),
    }
}

/// Count connecting orbits from `x` to `y` (indices into the point list).
pub fn count_connections(
    data: &MorseData,
    x: usize,
    y: usize,
    region: Option<&dyn Region>,
    tol: &FlowTolerances,
    opts: &CountingOptions,
) -> Result<CountResult, ModuliError> {
    let all = witnesses_from(data, x, region, tol, opts)?;
    let witnesses: Vec<ConnectionWitness> =
        all.into_iter().filter(|w| w.target == y).collect();
    let eps_sum = witnesses.iter().map(|w| w.sign_canonical as i64).sum();
    Ok(CountResult { source: x, target: y, eps_sum, witnesses })
}

/// Generators per degree in canonical order (the point list is already
/// sorted by critical value).
pub fn generators_by_degree(data: &MorseData) -> Vec<Vec<usize>> {
    let top = data.dim();
    (0..=top).map(|k| data.points_of_index(k)).collect()
}

/// Assemble boundary matrices from cached counts, folding in the current
/// orientation multipliers of the endpoints.
pub fn assemble_complex(
    data: &MorseData,
    counts: &[CountResult],
) -> Result<GradedComplex, AlgebraError> {
    let gens = generators_by_degree(data);
    let labels: Vec<Vec<String>> = gens
        .iter()
        .map(|idx| idx.iter().map(|&i| data.points[i].label.clone()).collect())
        .collect();
    let top = data.dim();
    let mut boundaries = Vec::new();
    for k in 1..=top {
        let rows = gens[k - 1].len();
        let cols = gens[k].len();
        let mut b = IntMat::zeros(rows, cols);
        for c in counts {
            let sx = data.points[c.source].index;
            if sx != k || data.points[c.target].index + 1 != k {
                continue;
            }
            let col = gens[k].iter().position(|&i| i == c.source);
            let row = gens[k - 1].iter().position(|&i| i == c.target);
            if let (Some(col), Some(row)) = (col, row) {
                let sigma = data.points[c.source].orientation_sign as i64
                    * data.points[c.target].orientation_sign as i64;
                b[(row, col)] = Z::from(sigma * c.eps_sum);
            }
        }
        boundaries.push(b);
    }
    GradedComplex::new(labels, boundaries)
}

/// Count every index-difference-one pair and build the Morse complex,
/// verifying that the boundary squares to zero.
pub fn morse_complex(
    data: &MorseData,
    region: Option<&dyn Region>,
    tol: &FlowTolerances,
    opts: &CountingOptions,
) -> Result<MorseComplexResult, ModuliError> {
    let n = data.dim();
    if n > 2 {
        return Err(ModuliError::UnsupportedDimension(n));
    }
    let mut counts: Vec<CountResult> = Vec::new();
    for x in 0..data.points.len() {
        if data.points[x].index == 0 {
            continue;
        }
        let ws = witnesses_from(data, x, region, tol, opts)?;
        for y in 0..data.points.len() {
            if data.points[y].index + 1 != data.points[x].index {
                continue;
            }
            let witnesses: Vec<ConnectionWitness> =
                ws.iter().filter(|w| w.target == y).cloned().collect();
            let eps_sum = witnesses.iter().map(|w| w.sign_canonical as i64).sum();
            counts.push(CountResult { source: x, target: y, eps_sum, witnesses });
        }
    }
    let complex = assemble_complex(data, &counts)?;
    complex.verify_boundary_squared()?;
    Ok(MorseComplexResult {
        complex,
        generator_points: generators_by_degree(data),
        counts,
    })
}

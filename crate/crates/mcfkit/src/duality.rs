//! Poincare duality at the chain level.
//!
//! For a Morse datum `(M, f, g, o)` on a closed flat torus, the dual datum
//! `(M, -f, g, o-hat)` reuses the same critical points: a point of index `k`
//! for `f` has index `m - k` for `-f`, its unstable directions for `-f` are
//! the stable directions for `f`, and its dual orientation multiplier is
//! chosen so that the connection counts satisfy `n(x, y; Q) = n(y, x; Q-hat)`
//! exactly. With that convention the duality map sending each generator to
//! its own dual cogenerator is the identity matrix in the generator bases
//! and is a chain map from the Morse complex of `f` to the cochain complex
//! of `-f` (reindexed as a chain complex); both sides are counted by
//! independent integrations, so the verified equality of the boundary
//! matrices is the count symmetry, not a restatement of it.
//!
//! The per-point dual sign is `s(x) * (-1)^{k(k+1)/2}`, where `s(x)` is the
//! sign of `det [unstable frame | stable frame]` against the ambient
//! orientation and `k` is the Morse index of `x` for `f`.

use thiserror::Error;

use crate::conley::{
    mcf_homology, verify_isolating_neighborhood, verify_lyapunov, ConleyError, ConleyOptions,
    McfResult, Verdict,
};
use crate::expr::{ExprError, Expression, ScalarField};
use crate::flow::{
    FlowError, FlowSystem, FlowTolerances, Metric, MorseData, Region, UnionRegion,
};
use crate::linalg::Mat;
use crate::moduli::{morse_complex, CountingOptions, ModuliError, MorseComplexResult};
use crate::zalgebra::{
    homology, iso_on_homology, verify_chain_map, AlgebraError, GradedComplex, GradedIntMap,
    Homology, IntMat,
};
use crate::{F, Z};

#[derive(Debug, Error)]
pub enum DualityError {
    #[error(transparent)]
    Flow(#[from] FlowError),
    #[error(transparent)]
    Expr(#[from] ExprError),
    #[error(transparent)]
    Moduli(#[from] ModuliError),
    #[error(transparent)]
    Algebra(#[from] AlgebraError),
    #[error(transparent)]
    Conley(#[from] ConleyError),
    #[error("dual datum requires a gradient flow")]
    NotGradient,
    #[error("{0}")]
    Shape(String),
}

/// The dual Morse datum: same points, negated function, swapped frames,
/// and orientation multipliers arranged so count symmetry holds exactly.
#[derive(Debug, Clone)]
pub struct DualDatum {
    pub data: MorseData,
    /// Per-point ratio between the dual and the base orientation multiplier.
    pub signs: Vec<i8>,
}

fn parity_sign(k: usize) -> i8 {
    if (k * (k + 1) / 2) % 2 == 0 {
        1
    } else {
        -1
    }
}

/// Sign of the frame concatenation `[unstable | stable]` against the
/// ambient orientation.
fn ambient_sign(unstable: &Mat<F>, stable: &Mat<F>) -> Result<i8, DualityError> {
    let n = unstable.rows;
    if unstable.cols + stable.cols != n || stable.rows != n {
        return Err(DualityError::Shape(format!(
            "frames of shape {}x{} and {}x{} do not concatenate to an ambient basis",
            unstable.rows, unstable.cols, stable.rows, stable.cols
        )));
    }
    let mut m = Mat::zeros(n, n);
    for j in 0..unstable.cols {
        m.set_col(j, &unstable.col(j));
    }
    for j in 0..stable.cols {
        m.set_col(unstable.cols + j, &stable.col(j));
    }
    let d = m.det();
    if d == 0.0 {
        return Err(DualityError::Shape("frame concatenation is singular".into()));
    }
    Ok(if d > 0.0 { 1 } else { -1 })
}

/// Build the dual datum of a gradient-flow Morse datum.
pub fn dual_datum(base: &MorseData) -> Result<DualDatum, DualityError> {
    let field = base.flow.field().ok_or(DualityError::NotGradient)?;
    let m = base.dim();
    let neg = ScalarField::new(Expression::Neg(Box::new(field.expr.clone())), field.dim)?;
    let flow = FlowSystem::gradient(neg, base.flow.domain.clone(), base.flow.metric.clone());
    let mut data = MorseData { flow, points: Vec::with_capacity(base.points.len()) };
    let mut signs = Vec::with_capacity(base.points.len());
    for p in &base.points {
        let s = ambient_sign(&p.unstable_frame, &p.stable_frame)? * parity_sign(p.index);
        let mut eigenvalues: Vec<F> = p.eigenvalues.iter().map(|e| -e).collect();
        eigenvalues.reverse();
        let mut q = p.clone();
        q.value = -p.value;
        q.index = m - p.index;
        q.eigenvalues = eigenvalues;
        q.unstable_frame = p.stable_frame.clone();
        q.stable_frame = p.unstable_frame.clone();
        q.orientation_sign = p.orientation_sign * s;
        data.points.push(q);
        signs.push(s);
    }
    Ok(DualDatum { data, signs })
}

/// One compared connection count: the coefficient of `target` in the base
/// boundary of `source`, against the dual count in the opposite direction.
#[derive(Debug, Clone)]
pub struct CountSymmetryPair {
    pub degree: usize,
    pub source: String,
    pub target: String,
    pub n_base: Z,
    pub n_dual: Z,
}

impl CountSymmetryPair {
    pub fn matches(&self) -> bool {
        self.n_base == self.n_dual
    }
}

/// The verified duality package for one Morse datum.
#[derive(Debug, Clone)]
pub struct PoincareDuality {
    pub dual: DualDatum,
    /// The dual complex, counted by its own integrations.
    pub dual_complex: MorseComplexResult,
    /// The cochain complex of the dual datum, reindexed as a chain complex
    /// (degree `k` holds the duals of the index-`k` generators).
    pub cochain: GradedComplex,
    /// The duality chain map in the generator bases (identity matrices).
    pub map: GradedIntMap,
    /// Entrywise comparison of the two independently counted boundaries.
    pub pairs: Vec<CountSymmetryPair>,
    /// Does the map induce an isomorphism on homology?
    pub iso: bool,
}

fn entry_pairs(
    base: &MorseData,
    base_cx: &GradedComplex,
    cochain: &GradedComplex,
) -> Result<Vec<CountSymmetryPair>, DualityError> {
    let m = base.dim();
    let mut pairs = Vec::new();
    for k in 1..=m {
        let cols = base.points_of_index(k);
        let rows = base.points_of_index(k - 1);
        let b = base_cx.boundary_from(k);
        let d = cochain.boundary_from(k);
        if b.rows != rows.len() || b.cols != cols.len() || d.rows != b.rows || d.cols != b.cols {
            return Err(DualityError::Shape(format!(
                "boundary shapes disagree in degree {k}: {}x{} vs {}x{}",
                b.rows, b.cols, d.rows, d.cols
            )));
        }
        for (ci, &x) in cols.iter().enumerate() {
            for (ri, &y) in rows.iter().enumerate() {
                pairs.push(CountSymmetryPair {
                    degree: k,
                    source: base.points[x].label.clone(),
                    target: base.points[y].label.clone(),
                    n_base: b[(ri, ci)].clone(),
                    n_dual: d[(ri, ci)].clone(),
                });
            }
        }
    }
    Ok(pairs)
}

/// Count the dual complex independently and verify the duality chain map
/// `delta^{m-k} o PD_k = PD_{k-1} o boundary_k` exactly. Errors if the
/// boundaries disagree anywhere; the returned pairs record the comparison.
pub fn poincare_duality(
    base: &MorseData,
    base_cx: &MorseComplexResult,
    region: Option<&dyn Region>,
    tol: &FlowTolerances,
    opts: &CountingOptions,
) -> Result<PoincareDuality, DualityError> {
    let dual = dual_datum(base)?;
    let dual_complex = morse_complex(&dual.data, region, tol, opts)?;
    let cochain = dual_complex.complex.dualize();
    for k in 0..=base_cx.complex.top_degree() {
        if base_cx.complex.rank(k) != cochain.rank(k) {
            return Err(DualityError::Shape(format!(
                "rank mismatch in degree {k}: {} generators vs {} cogenerators",
                base_cx.complex.rank(k),
                cochain.rank(k)
            )));
        }
    }
    let map = GradedIntMap::identity(&base_cx.complex);
    let pairs = entry_pairs(base, &base_cx.complex, &cochain)?;
    verify_chain_map(&map, &base_cx.complex, &cochain)?;
    let iso = iso_on_homology(&map, &base_cx.complex, &cochain)?;
    Ok(PoincareDuality { dual, dual_complex, cochain, map, pairs, iso })
}

/// Result of the duality check on a Morse-Conley-Floer homology: the
/// forward homology, the certificates for the reversed flow, and the
/// verified duality package of the forward local datum.
#[derive(Debug, Clone)]
pub struct ConleyDualityReport {
    pub forward: McfResult,
    /// Isolation certificate of the region for the reversed flow.
    pub reverse_verdict: Verdict,
    /// Certificate that the negated Lyapunov function decreases along the
    /// reversed flow.
    pub reverse_lyapunov: Verdict,
    pub duality: PoincareDuality,
    /// Homology of the reindexed cochain complex: degree `k` holds the
    /// degree `m - k` cohomology of the reversed-flow homology data.
    pub dual_homology: Homology,
    /// Degreewise equality of Betti numbers and torsion between the forward
    /// homology and the dual cohomology.
    pub group_match: bool,
}

/// Verify the duality between the Morse-Conley-Floer homology of `(S, phi)`
/// and the cohomology of `(S, phi^{-1})` on one certified neighborhood.
#[allow(clippy::too_many_arguments)]
pub fn conley_duality_check(
    flow: &FlowSystem,
    region: &UnionRegion,
    f_lyap: &ScalarField,
    metric: &Metric,
    seed: u64,
    t_max: F,
    tol: &FlowTolerances,
    copts: &ConleyOptions,
    mopts: &CountingOptions,
) -> Result<ConleyDualityReport, DualityError> {
    let n = verify_isolating_neighborhood(flow, region, t_max, tol, copts)?;
    n.require_certified("duality check, forward neighborhood")?;
    let forward = mcf_homology(flow, &n, f_lyap, metric, seed, tol, copts, mopts)?;

    // The same region must isolate for the reversed flow, and the negated
    // Lyapunov function must certify for it.
    let rev = flow.reverse();
    let n_rev = verify_isolating_neighborhood(&rev, region, t_max, tol, copts)?;
    n_rev.require_certified("duality check, reversed neighborhood")?;
    let neg_lyap =
        ScalarField::new(Expression::Neg(Box::new(f_lyap.expr.clone())), f_lyap.dim)?;
    let rev_lyap = verify_lyapunov(&neg_lyap, &rev, &n_rev, copts)?;
    rev_lyap.require_certified("duality check, reversed Lyapunov function")?;

    // The gradient flow of the negated (possibly perturbed) local function
    // is the reversed gradient flow; certify the region for it before
    // counting the dual complex on it.
    let dual_grad = forward.local.data.flow.clone();
    let n_dual =
        verify_isolating_neighborhood(&dual_grad.reverse(), region, t_max, tol, copts)?;
    n_dual.require_certified("duality check, reversed gradient flow")?;

    let duality = poincare_duality(
        &forward.local.data,
        &forward.local.complex,
        Some(region as &dyn Region),
        tol,
        mopts,
    )?;
    let dual_homology = homology(&duality.cochain)?;
    let fwd_hom = forward.homology();
    let top = fwd_hom.degrees.len().max(dual_homology.degrees.len());
    let mut group_match = true;
    for k in 0..top {
        let (b1, t1) = fwd_hom
            .degrees
            .get(k)
            .map(|d| (d.betti, d.torsion.clone()))
            .unwrap_or((0, Vec::new()));
        let (b2, t2) = dual_homology
            .degrees
            .get(k)
            .map(|d| (d.betti, d.torsion.clone()))
            .unwrap_or((0, Vec::new()));
        if b1 != b2 || t1 != t2 {
            group_match = false;
        }
    }
    Ok(ConleyDualityReport {
        forward,
        reverse_verdict: n_rev.certificate.verdict,
        reverse_lyapunov: rev_lyap.verdict,
        duality,
        dual_homology,
        group_match,
    })
}

/// Diagonal sign matrices relating the double dual to the original datum:
/// entry `i` is the product of the two per-point sign layers.
pub fn double_dual_signs(first: &DualDatum, second: &DualDatum) -> Vec<i8> {
    first
        .signs
        .iter()
        .zip(&second.signs)
        .map(|(a, b)| a * b)
        .collect()
}

/// Check that the double-dual boundary equals the original conjugated by
/// the diagonal sign matrices from [`double_dual_signs`].
pub fn verify_involution(
    base: &MorseData,
    base_cx: &GradedComplex,
    double_cx: &GradedComplex,
    signs: &[i8],
) -> Result<(), DualityError> {
    let m = base.dim();
    for k in 1..=m {
        let cols = base.points_of_index(k);
        let rows = base.points_of_index(k - 1);
        let b = base_cx.boundary_from(k);
        let dd = double_cx.boundary_from(k);
        if b.rows != dd.rows || b.cols != dd.cols {
            return Err(DualityError::Shape(format!(
                "double-dual boundary shape mismatch in degree {k}"
            )));
        }
        for (ci, &x) in cols.iter().enumerate() {
            for (ri, &y) in rows.iter().enumerate() {
                let expect = Z::from(i64::from(signs[x] * signs[y])) * b[(ri, ci)].clone();
                if dd[(ri, ci)] != expect {
                    return Err(DualityError::Shape(format!(
                        "double dual differs from sign-conjugated original at degree {k}, \
                         entry ({ri}, {ci}): {} vs {}",
                        dd[(ri, ci)],
                        expect
                    )));
                }
            }
        }
    }
    Ok(())
}

/// Identity matrices degreewise, shaped like `complex` (used by fixtures
/// asserting the duality map literally).
pub fn identity_matrices(complex: &GradedComplex) -> Vec<IntMat> {
    (0..=complex.top_degree())
        .map(|k| IntMat::identity(complex.rank(k)))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::expr::Domain;
    use crate::flow::find_critical_points;
    use crate::moduli::morse_complex;

    fn tols() -> FlowTolerances {
        FlowTolerances::default()
    }

    fn mopts() -> CountingOptions {
        CountingOptions::default()
    }

    fn gradient_data(expr: &str, domain: Domain) -> (MorseData, MorseComplexResult) {
        let f = ScalarField::parse(expr, domain.dim()).unwrap();
        let flow = FlowSystem::gradient(f, domain, Metric::Euclidean);
        let data = find_critical_points(&flow, &tols()).unwrap();
        let cx = morse_complex(&data, None, &tols(), &mopts()).unwrap();
        (data, cx)
    }

    fn assert_identity_map(pd: &PoincareDuality, base_cx: &MorseComplexResult) {
        for k in 0..=base_cx.complex.top_degree() {
            let mat = pd.map.matrix(k).unwrap();
            assert_eq!(*mat, IntMat::identity(base_cx.complex.rank(k)));
        }
    }

    #[test]
    fn circle_double_well_duality() {
        let (data, cx) = gradient_data("cos(2*pi*x1)", Domain::Torus { dim: 1 });
        assert_eq!(data.points.len(), 2);
        let pd = poincare_duality(&data, &cx, None, &tols(), &mopts()).unwrap();
        assert!(pd.iso);
        assert!(pd.pairs.iter().all(|p| p.matches()));
        assert_identity_map(&pd, &cx);
        // Indices swap: the base minimum is the dual maximum.
        for (p, q) in data.points.iter().zip(&pd.dual.data.points) {
            assert_eq!(q.index, 1 - p.index);
            assert_eq!(q.value, -p.value);
        }
    }

    #[test]
    fn circle_two_pair_duality_has_nonzero_counts() {
        let (data, cx) = gradient_data("cos(4*pi*x1)", Domain::Torus { dim: 1 });
        assert_eq!(data.points.len(), 4);
        // Each maximum flows to both adjacent minima: some entries are
        // nonzero, so the symmetry is tested on nontrivial counts.
        let b = cx.complex.boundary_from(1);
        assert!(!b.is_zero());
        let pd = poincare_duality(&data, &cx, None, &tols(), &mopts()).unwrap();
        assert!(pd.iso);
        assert!(pd.pairs.iter().all(|p| p.matches()));
        assert!(pd.pairs.iter().any(|p| p.n_base != Z::from(0)));
    }

    #[test]
    fn torus_height_duality() {
        let (data, cx) = gradient_data(
            "cos(2*pi*x1) + 0.5*cos(2*pi*x2)",
            Domain::Torus { dim: 2 },
        );
        assert_eq!(data.points.len(), 4);
        let pd = poincare_duality(&data, &cx, None, &tols(), &mopts()).unwrap();
        assert!(pd.iso);
        assert!(pd.pairs.iter().all(|p| p.matches()));
        assert_identity_map(&pd, &cx);
        let hom = homology(&pd.cochain).unwrap();
        assert_eq!(hom.betti(), vec![1, 2, 1]);
    }

    #[test]
    fn skewed_torus_function_duality() {
        // A non-separable Morse function on the torus: counts include
        // cancelling pairs and the symmetry must hold entry by entry.
        let (data, cx) = gradient_data(
            "cos(2*pi*x1) + 0.4*cos(2*pi*x2) + 0.2*sin(2*pi*x1)*sin(2*pi*x2)",
            Domain::Torus { dim: 2 },
        );
        assert_eq!(data.points.len(), 4);
        let pd = poincare_duality(&data, &cx, None, &tols(), &mopts()).unwrap();
        assert!(pd.iso);
        assert!(pd.pairs.iter().all(|p| p.matches()));
    }

    #[test]
    fn local_saddle_duality() {
        let dom = Domain::Box { bounds: vec![(-2.0, 2.0), (-2.0, 2.0)] };
        let f = ScalarField::parse("x1^2 - x2^2", 2).unwrap();
        let flow = FlowSystem::gradient(f, dom, Metric::Euclidean);
        let data = find_critical_points(&flow, &tols()).unwrap();
        let region = UnionRegion::single(vec![-1.0, -1.0], vec![1.0, 1.0]);
        let local: Vec<_> = data
            .points
            .iter()
            .filter(|p| region.interior_depth(&flow.domain, &p.position) > 0.0)
            .cloned()
            .collect();
        let mut local_data = data.clone();
        local_data.points = local;
        let cx = morse_complex(&local_data, Some(&region as &dyn Region), &tols(), &mopts())
            .unwrap();
        let pd =
            poincare_duality(&local_data, &cx, Some(&region as &dyn Region), &tols(), &mopts())
                .unwrap();
        assert!(pd.iso);
        let hom = homology(&pd.cochain).unwrap();
        assert_eq!(hom.betti(), vec![0, 1, 0]);
    }

    #[test]
    fn local_double_well_duality() {
        // Two wells and a connecting saddle inside the region: the local
        // boundary is nonzero, and its dual is counted on the negated
        // function where the wells become index-2 points.
        let dom = Domain::Box { bounds: vec![(-3.0, 3.0), (-3.0, 3.0)] };
        let f = ScalarField::parse("(x1^2 - 1)^2 + x2^2", 2).unwrap();
        let flow = FlowSystem::gradient(f, dom.clone(), Metric::Euclidean);
        let data = find_critical_points(&flow, &tols()).unwrap();
        assert_eq!(data.points.len(), 3);
        let region = UnionRegion::single(vec![-1.5, -1.0], vec![1.5, 1.0]);
        let cx = morse_complex(&data, Some(&region as &dyn Region), &tols(), &mopts()).unwrap();
        let b = cx.complex.boundary_from(1);
        assert!(!b.is_zero());
        let pd = poincare_duality(&data, &cx, Some(&region as &dyn Region), &tols(), &mopts())
            .unwrap();
        assert!(pd.iso);
        assert!(pd.pairs.iter().all(|p| p.matches()));
        let hom = homology(&pd.cochain).unwrap();
        assert_eq!(hom.betti(), vec![1, 0, 0]);
    }

    #[test]
    fn duality_survives_orientation_flips() {
        let (mut data, _) = gradient_data(
            "cos(2*pi*x1) + 0.5*cos(2*pi*x2)",
            Domain::Torus { dim: 2 },
        );
        // Flip one point of each index class and recount everything.
        let flip0 = data.points_of_index(0)[0];
        let flip1 = data.points_of_index(1)[0];
        data.flip_orientation(flip0);
        data.flip_orientation(flip1);
        let cx = morse_complex(&data, None, &tols(), &mopts()).unwrap();
        let pd = poincare_duality(&data, &cx, None, &tols(), &mopts()).unwrap();
        assert!(pd.iso);
        assert!(pd.pairs.iter().all(|p| p.matches()));
        assert_identity_map(&pd, &cx);
    }

    #[test]
    fn double_dual_is_the_original_up_to_diagonal_signs() {
        let (data, cx) = gradient_data(
            "cos(2*pi*x1) + 0.5*cos(2*pi*x2)",
            Domain::Torus { dim: 2 },
        );
        let d1 = dual_datum(&data).unwrap();
        let d2 = dual_datum(&d1.data).unwrap();
        for (p, q) in data.points.iter().zip(&d2.data.points) {
            assert_eq!(p.index, q.index);
            assert_eq!(p.value, -(-q.value));
        }
        let double_cx = morse_complex(&d2.data, None, &tols(), &mopts()).unwrap();
        let signs = double_dual_signs(&d1, &d2);
        verify_involution(&data, &cx.complex, &double_cx.complex, &signs).unwrap();
    }

    fn copts() -> ConleyOptions {
        ConleyOptions::default()
    }

    #[test]
    fn conley_duality_for_a_line_attractor() {
        let dom = Domain::Box { bounds: vec![(-4.0, 4.0)] };
        let comps = vec![crate::expr::parse("-x1").unwrap()];
        let flow = FlowSystem::general(comps, dom, Metric::Euclidean);
        let region = UnionRegion::single(vec![-1.0], vec![1.0]);
        let f = ScalarField::parse("x1^2", 1).unwrap();
        let report = conley_duality_check(
            &flow,
            &region,
            &f,
            &Metric::Euclidean,
            7,
            30.0,
            &tols(),
            &copts(),
            &mopts(),
        )
        .unwrap();
        assert_eq!(report.forward.homology().betti(), vec![1, 0]);
        assert_eq!(report.dual_homology.betti(), vec![1, 0]);
        assert!(report.group_match);
        assert!(report.duality.iso);
        assert_eq!(report.reverse_verdict, Verdict::Certified);
        assert_eq!(report.reverse_lyapunov, Verdict::Certified);
    }

    #[test]
    fn conley_duality_for_a_planar_saddle() {
        let dom = Domain::Box { bounds: vec![(-2.0, 2.0), (-2.0, 2.0)] };
        let comps = vec![
            crate::expr::parse("x1").unwrap(),
            crate::expr::parse("-x2").unwrap(),
        ];
        let flow = FlowSystem::general(comps, dom, Metric::Euclidean);
        let region = UnionRegion::single(vec![-1.0, -1.0], vec![1.0, 1.0]);
        let f = ScalarField::parse("x2^2 - x1^2", 2).unwrap();
        let report = conley_duality_check(
            &flow,
            &region,
            &f,
            &Metric::Euclidean,
            7,
            30.0,
            &tols(),
            &copts(),
            &mopts(),
        )
        .unwrap();
        assert_eq!(report.forward.homology().betti(), vec![0, 1, 0]);
        assert_eq!(report.dual_homology.betti(), vec![0, 1, 0]);
        assert!(report.group_match);
        assert!(report.duality.iso);
    }

    #[test]
    fn conley_duality_for_the_whole_torus() {
        // The whole torus is an isolating neighborhood with empty boundary;
        // the only Lyapunov function constant on all of it is a constant, so
        // the local computation runs through a deterministic perturbation
        // and recovers the homology of the torus on both sides.
        let t2 = Domain::Torus { dim: 2 };
        let f2 = ScalarField::parse("cos(2*pi*x1) + 0.5*cos(2*pi*x2)", 2).unwrap();
        let flow = FlowSystem::gradient(f2, t2, Metric::Euclidean);
        let region = UnionRegion::single(vec![0.0, 0.0], vec![1.0, 1.0]);
        let f = ScalarField::parse("0", 2).unwrap();
        let report = conley_duality_check(
            &flow,
            &region,
            &f,
            &Metric::Euclidean,
            7,
            30.0,
            &tols(),
            &copts(),
            &mopts(),
        )
        .unwrap();
        assert!(report.forward.local.attempts > 0);
        assert_eq!(report.forward.homology().betti(), vec![1, 2, 1]);
        assert_eq!(report.dual_homology.betti(), vec![1, 2, 1]);
        assert!(report.group_match);
        assert!(report.duality.iso);
    }
}

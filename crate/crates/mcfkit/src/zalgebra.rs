//! Exact chain-level algebra over arbitrary-precision integers.
//!
//! Everything downstream of orbit counting is exact: boundary operators and
//! chain maps are integer matrices, homology is computed through Smith normal
//! form with unimodular transforms verified by multiplication, and cohomology
//! is the homology of the dualized (transposed, degree-reindexed) complex.
//! No floating point enters this module.

use num_bigint::BigInt;
use num_integer::Integer;
use num_traits::{One, Signed, Zero};
use serde::{Deserialize, Serialize};
use std::fmt::Debug;
use thiserror::Error;

use crate::Z;

#[derive(Debug, Error, PartialEq, Eq, Clone)]
pub enum AlgebraError {
    #[error("boundary squared is nonzero in degree {degree}: entry ({row},{col}) = {value}")]
    BoundarySquared { degree: usize, row: usize, col: usize, value: String },
    #[error("chain map fails to commute in degree {degree}: entry ({row},{col}) differs by {value}")]
    NotChainMap { degree: usize, row: usize, col: usize, value: String },
    #[error("matrix shape mismatch: {0}")]
    Shape(String),
    #[error("vector is not a cycle in degree {0}")]
    NotCycle(usize),
    #[error("isomorphism check with torsion is not supported: {0}")]
    TorsionIso(String),
    #[error("serialization: {0}")]
    Serde(String),
}

/// Ring scalar for the exact layer. `BigInt` is the shipped instantiation;
/// `i64` instantiates in tests to keep the algorithms honest about genericity.
pub trait RingInt: Integer + Signed + Clone + Debug + Send + Sync + 'static {
    fn from_i64(v: i64) -> Self;
}

impl RingInt for BigInt {
    fn from_i64(v: i64) -> Self {
        BigInt::from(v)
    }
}

impl RingInt for i64 {
    fn from_i64(v: i64) -> Self {
        v
    }
}

/// Dense row-major integer matrix.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IntMat<I = Z> {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<I>,
}

impl<I: RingInt> IntMat<I> {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        IntMat { rows, cols, data: vec![I::zero(); rows * cols] }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m[(i, i)] = I::one();
        }
        m
    }

    pub fn from_rows_i64(rows: &[&[i64]]) -> Self {
        let r = rows.len();
        let c = if r == 0 { 0 } else { rows[0].len() };
        let mut data = Vec::with_capacity(r * c);
        for row in rows {
            assert_eq!(row.len(), c, "ragged rows");
            data.extend(row.iter().map(|&v| I::from_i64(v)));
        }
        IntMat { rows: r, cols: c, data }
    }

    pub fn is_zero(&self) -> bool {
        self.data.iter().all(|v| v.is_zero())
    }

    pub fn col(&self, j: usize) -> Vec<I> {
        (0..self.rows).map(|i| self[(i, j)].clone()).collect()
    }

    pub fn transpose(&self) -> Self {
        let mut t = Self::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                t[(j, i)] = self[(i, j)].clone();
            }
        }
        t
    }

    pub fn mat_mat(&self, other: &Self) -> Self {
        assert_eq!(self.cols, other.rows, "inner dimensions must agree");
        let mut out = Self::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            for k in 0..self.cols {
                if self[(i, k)].is_zero() {
                    continue;
                }
                for j in 0..other.cols {
                    let add = self[(i, k)].clone() * other[(k, j)].clone();
                    out[(i, j)] = out[(i, j)].clone() + add;
                }
            }
        }
        out
    }

    pub fn mat_vec(&self, v: &[I]) -> Vec<I> {
        assert_eq!(v.len(), self.cols);
        (0..self.rows)
            .map(|i| {
                let mut s = I::zero();
                for j in 0..self.cols {
                    s = s + self[(i, j)].clone() * v[j].clone();
                }
                s
            })
            .collect()
    }

    pub fn sub(&self, other: &Self) -> Self {
        assert_eq!((self.rows, self.cols), (other.rows, other.cols));
        IntMat {
            rows: self.rows,
            cols: self.cols,
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(a, b)| a.clone() - b.clone())
                .collect(),
        }
    }

    pub fn neg(&self) -> Self {
        IntMat {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|a| I::zero() - a.clone()).collect(),
        }
    }

    /// Exact determinant by fraction-free Bareiss elimination.
    pub fn det(&self) -> I {
        assert_eq!(self.rows, self.cols);
        let n = self.rows;
        if n == 0 {
            return I::one();
        }
        let mut a = self.clone();
        let mut sign = I::one();
        let mut prev = I::one();
        for k in 0..n - 1 {
            if a[(k, k)].is_zero() {
                let pivot = (k + 1..n).find(|&i| !a[(i, k)].is_zero());
                match pivot {
                    None => return I::zero(),
                    Some(p) => {
                        for j in 0..n {
                            let tmp = a[(k, j)].clone();
                            a[(k, j)] = a[(p, j)].clone();
                            a[(p, j)] = tmp;
                        }
                        sign = I::zero() - sign;
                    }
                }
            }
            for i in k + 1..n {
                for j in k + 1..n {
                    let num = a[(k, k)].clone() * a[(i, j)].clone()
                        - a[(i, k)].clone() * a[(k, j)].clone();
                    // Division is exact at every Bareiss step.
                    a[(i, j)] = num.div_floor(&prev);
                }
                a[(i, k)] = I::zero();
            }
            prev = a[(k, k)].clone();
        }
        sign * a[(n - 1, n - 1)].clone()
    }

    fn swap_rows(&mut self, i: usize, j: usize) {
        if i == j {
            return;
        }
        for c in 0..self.cols {
            self.data.swap(i * self.cols + c, j * self.cols + c);
        }
    }

    fn swap_cols(&mut self, i: usize, j: usize) {
        if i == j {
            return;
        }
        for r in 0..self.rows {
            self.data.swap(r * self.cols + i, r * self.cols + j);
        }
    }

    /// row_i += c * row_j
    fn add_row(&mut self, i: usize, j: usize, c: &I) {
        for col in 0..self.cols {
            let add = c.clone() * self[(j, col)].clone();
            self[(i, col)] = self[(i, col)].clone() + add;
        }
    }

    /// col_i += c * col_j
    fn add_col(&mut self, i: usize, j: usize, c: &I) {
        for row in 0..self.rows {
            let add = c.clone() * self[(row, j)].clone();
            self[(row, i)] = self[(row, i)].clone() + add;
        }
    }

    fn negate_row(&mut self, i: usize) {
        for col in 0..self.cols {
            self[(i, col)] = I::zero() - self[(i, col)].clone();
        }
    }

    fn negate_col(&mut self, j: usize) {
        for row in 0..self.rows {
            self[(row, j)] = I::zero() - self[(row, j)].clone();
        }
    }
}

impl<I> std::ops::Index<(usize, usize)> for IntMat<I> {
    type Output = I;
    fn index(&self, (i, j): (usize, usize)) -> &I {
        &self.data[i * self.cols + j]
    }
}

impl<I> std::ops::IndexMut<(usize, usize)> for IntMat<I> {
    fn index_mut(&mut self, (i, j): (usize, usize)) -> &mut I {
        &mut self.data[i * self.cols + j]
    }
}

/// Smith normal form `A = U * D * V` with unimodular `U`, `V`.
///
/// `D` is diagonal with nonnegative invariant factors in a divisibility chain
/// `d_1 | d_2 | ...`. Inverses of the transforms are tracked alongside so
/// kernels and quotient coordinates come out without any solving.
#[derive(Debug, Clone)]
pub struct Snf<I = Z> {
    pub d: IntMat<I>,
    pub u: IntMat<I>,
    pub u_inv: IntMat<I>,
    pub v: IntMat<I>,
    pub v_inv: IntMat<I>,
    pub rank: usize,
}

impl<I: RingInt> Snf<I> {
    pub fn invariant_factors(&self) -> Vec<I> {
        (0..self.rank).map(|i| self.d[(i, i)].clone()).collect()
    }
}

/// Compute the Smith normal form of `a`, maintaining `a = u * work * v`.
pub fn smith_normal_form<I: RingInt>(a: &IntMat<I>) -> Snf<I> {
    let (m, n) = (a.rows, a.cols);
    let mut w = a.clone();
    let mut u = IntMat::<I>::identity(m);
    let mut u_inv = IntMat::<I>::identity(m);
    let mut v = IntMat::<I>::identity(n);
    let mut v_inv = IntMat::<I>::identity(n);

    // Elementary steps, each preserving a = u * w * v.
    // Row op on w is compensated on u (column op) and mirrored on u_inv (row op).
    macro_rules! row_add {
        ($i:expr, $j:expr, $c:expr) => {{
            let c: I = $c;
            w.add_row($i, $j, &c);
            let neg = I::zero() - c.clone();
            u.add_col($j, $i, &neg);
            u_inv.add_row($i, $j, &c);
        }};
    }
    macro_rules! col_add {
        ($i:expr, $j:expr, $c:expr) => {{
            let c: I = $c;
            w.add_col($i, $j, &c);
            let neg = I::zero() - c.clone();
            v.add_row($j, $i, &neg);
            v_inv.add_col($i, $j, &c);
        }};
    }
    macro_rules! row_swap {
        ($i:expr, $j:expr) => {{
            w.swap_rows($i, $j);
            u.swap_cols($i, $j);
            u_inv.swap_rows($i, $j);
        }};
    }
    macro_rules! col_swap {
        ($i:expr, $j:expr) => {{
            w.swap_cols($i, $j);
            v.swap_rows($i, $j);
            v_inv.swap_cols($i, $j);
        }};
    }

    let mut t = 0usize;
    while t < m.min(n) {
        // Find the entry of least nonzero magnitude in the trailing block.
        let mut pivot: Option<(usize, usize)> = None;
        for i in t..m {
            for j in t..n {
                if w[(i, j)].is_zero() {
                    continue;
                }
                match pivot {
                    None => pivot = Some((i, j)),
                    Some((pi, pj)) => {
                        if w[(i, j)].abs() < w[(pi, pj)].abs() {
                            pivot = Some((i, j));
                        }
                    }
                }
            }
        }
        let Some((pi, pj)) = pivot else { break };
        row_swap!(t, pi);
        col_swap!(t, pj);

        // Euclid until the pivot divides its row and column, then clear them.
        loop {
            let mut dirty = false;
            for i in t + 1..m {
                if w[(i, t)].is_zero() {
                    continue;
                }
                let q = w[(i, t)].div_floor(&w[(t, t)]);
                row_add!(i, t, I::zero() - q);
                if !w[(i, t)].is_zero() {
                    row_swap!(t, i);
                    dirty = true;
                }
            }
            for j in t + 1..n {
                if w[(t, j)].is_zero() {
                    continue;
                }
                let q = w[(t, j)].div_floor(&w[(t, t)]);
                col_add!(j, t, I::zero() - q);
                if !w[(t, j)].is_zero() {
                    col_swap!(t, j);
                    dirty = true;
                }
            }
            if !dirty {
                break;
            }
        }

        // Divisibility fix-up: fold a non-divisible trailing entry into the
        // pivot's row and restart the clearing for this pivot.
        let mut fixed = true;
        'outer: for i in t + 1..m {
            for j in t + 1..n {
                if !w[(i, j)].is_zero() && !w[(i, j)].is_multiple_of(&w[(t, t)]) {
                    row_add!(t, i, I::one());
                    fixed = false;
                    break 'outer;
                }
            }
        }
        if fixed {
            if w[(t, t)].is_negative() {
                w.negate_row(t);
                u.negate_col(t);
                u_inv.negate_row(t);
            }
            t += 1;
        }
    }

    let rank = (0..m.min(n)).take_while(|&i| !w[(i, i)].is_zero()).count();
    let snf = Snf { d: w, u, u_inv, v, v_inv, rank };
    debug_assert!(verify_snf(a, &snf));
    snf
}

/// Check `a = u d v`, unimodularity of the transforms, tracked inverses and
/// the divisibility chain. Used by tests and debug assertions.
pub fn verify_snf<I: RingInt>(a: &IntMat<I>, s: &Snf<I>) -> bool {
    let udv = s.u.mat_mat(&s.d).mat_mat(&s.v);
    if &udv != a {
        return false;
    }
    if !s.u.mat_mat(&s.u_inv).eq(&IntMat::identity(a.rows)) {
        return false;
    }
    if !s.v.mat_mat(&s.v_inv).eq(&IntMat::identity(a.cols)) {
        return false;
    }
    if s.u.det().abs() != I::one() || s.v.det().abs() != I::one() {
        return false;
    }
    for i in 0..s.rank.saturating_sub(1) {
        if !s.d[(i + 1, i + 1)].is_multiple_of(&s.d[(i, i)]) {
            return false;
        }
    }
    // Off-diagonal of d must vanish and the diagonal past rank must be zero.
    for i in 0..s.d.rows {
        for j in 0..s.d.cols {
            if i != j && !s.d[(i, j)].is_zero() {
                return false;
            }
            if i == j && i >= s.rank && !s.d[(i, j)].is_zero() {
                return false;
            }
        }
    }
    true
}

/// Chain complex of free Z-modules with labeled generator bases.
///
/// `boundaries[k]` is the matrix of the boundary operator from degree `k + 1`
/// to degree `k` in the listed generator bases.
#[derive(Debug, Clone, PartialEq)]
pub struct GradedComplex {
    pub generators: Vec<Vec<String>>,
    pub boundaries: Vec<IntMat>,
}

impl GradedComplex {
    pub fn new(generators: Vec<Vec<String>>, boundaries: Vec<IntMat>) -> Result<Self, AlgebraError> {
        let top = generators.len().saturating_sub(1);
        if generators.is_empty() {
            return Ok(GradedComplex { generators: vec![vec![]], boundaries: vec![] });
        }
        if boundaries.len() != top {
            return Err(AlgebraError::Shape(format!(
                "expected {} boundary matrices for top degree {}, got {}",
                top,
                top,
                boundaries.len()
            )));
        }
        for (k, b) in boundaries.iter().enumerate() {
            if b.rows != generators[k].len() || b.cols != generators[k + 1].len() {
                return Err(AlgebraError::Shape(format!(
                    "boundary from degree {} has shape {}x{}, bases have sizes {} and {}",
                    k + 1,
                    b.rows,
                    b.cols,
                    generators[k].len(),
                    generators[k + 1].len()
                )));
            }
        }
        Ok(GradedComplex { generators, boundaries })
    }

    /// Complex with no generators in any degree.
    pub fn empty() -> Self {
        GradedComplex { generators: vec![vec![]], boundaries: vec![] }
    }

    pub fn top_degree(&self) -> usize {
        self.generators.len() - 1
    }

    pub fn rank(&self, k: usize) -> usize {
        self.generators.get(k).map_or(0, |g| g.len())
    }

    pub fn total_rank(&self) -> usize {
        self.generators.iter().map(|g| g.len()).sum()
    }

    /// Boundary matrix out of degree `k` (into `k - 1`); degree 0 maps to the
    /// zero module, encoded as a 0-row matrix, and degrees beyond the top are
    /// zero maps of the appropriate shape.
    pub fn boundary_from(&self, k: usize) -> IntMat {
        if k == 0 {
            return IntMat::zeros(0, self.rank(0));
        }
        if k > self.top_degree() {
            return IntMat::zeros(self.rank(k - 1), self.rank(k));
        }
        self.boundaries[k - 1].clone()
    }

    /// Verify boundary squared vanishes; reports the first offending entry.
    pub fn verify_boundary_squared(&self) -> Result<(), AlgebraError> {
        for k in 2..=self.top_degree() {
            let a = self.boundary_from(k - 1);
            let b = self.boundary_from(k);
            let prod = a.mat_mat(&b);
            for i in 0..prod.rows {
                for j in 0..prod.cols {
                    if !prod[(i, j)].is_zero() {
                        return Err(AlgebraError::BoundarySquared {
                            degree: k,
                            row: i,
                            col: j,
                            value: prod[(i, j)].to_string(),
                        });
                    }
                }
            }
        }
        Ok(())
    }

    /// Dual complex: cochains reindexed as chains.
    ///
    /// Degree `j` of the dual is the cochain degree `top - j` of the original,
    /// and the dual boundary out of degree `j` is the transpose of the
    /// original boundary out of degree `top - j + 1`. Applying `dualize`
    /// twice returns the original complex with original labels.
    pub fn dualize(&self) -> GradedComplex {
        let top = self.top_degree();
        let generators: Vec<Vec<String>> = (0..=top)
            .map(|j| {
                self.generators[top - j]
                    .iter()
                    .map(|g| {
                        g.strip_suffix('*')
                            .map(|s| s.to_string())
                            .unwrap_or_else(|| format!("{g}*"))
                    })
                    .collect()
            })
            .collect();
        let boundaries: Vec<IntMat> = (1..=top)
            .map(|j| self.boundary_from(top - j + 1).transpose())
            .collect();
        GradedComplex { generators, boundaries }
    }
}

/// Homology of one degree: Betti number, torsion invariant factors greater
/// than one, and generator lifts back in the chain basis.
#[derive(Debug, Clone, PartialEq)]
pub struct DegreeHomology {
    pub betti: usize,
    pub torsion: Vec<Z>,
    pub free_generators: Vec<Vec<Z>>,
    pub torsion_generators: Vec<Vec<Z>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Homology {
    pub degrees: Vec<DegreeHomology>,
}

impl Homology {
    pub fn betti(&self) -> Vec<usize> {
        self.degrees.iter().map(|d| d.betti).collect()
    }

    pub fn describe(&self) -> String {
        self.degrees
            .iter()
            .enumerate()
            .map(|(k, d)| {
                let mut parts: Vec<String> = Vec::new();
                if d.betti > 0 {
                    parts.push(if d.betti == 1 {
                        "Z".to_string()
                    } else {
                        format!("Z^{}", d.betti)
                    });
                }
                for t in &d.torsion {
                    parts.push(format!("Z/{t}"));
                }
                let group = if parts.is_empty() { "0".to_string() } else { parts.join(" + ") };
                format!("H_{k} = {group}")
            })
            .collect::<Vec<_>>()
            .join(", ")
    }
}

/// Coordinates of cycle classes in one degree, reusable across many vectors.
struct DegreeQuotient {
    kernel_dim: usize,
    snf_out: Snf,
    /// SNF of the image-in-kernel-coordinates matrix.
    snf_quot: Snf,
}

impl DegreeQuotient {
    fn build(complex: &GradedComplex, k: usize) -> Self {
        let out = complex.boundary_from(k);
        let into = complex.boundary_from(k + 1);
        let snf_out = smith_normal_form(&out);
        let kernel_dim = complex.rank(k) - snf_out.rank;
        // Image basis vectors of boundary-in, written in kernel coordinates:
        // for a cycle vector v the coordinates are the trailing entries of
        // v_out^{-1}... precisely, with A = U D V, kernel basis = columns of
        // V^{-1} past rank, and coordinates of a cycle v are (V v) past rank.
        let r = snf_out.rank;
        let snf_in = smith_normal_form(&into);
        let mut img_cols: Vec<Vec<Z>> = Vec::new();
        for i in 0..snf_in.rank {
            let mut col = snf_in.u.col(i);
            let d = snf_in.d[(i, i)].clone();
            for x in col.iter_mut() {
                *x = x.clone() * d.clone();
            }
            img_cols.push(col);
        }
        let mut c = IntMat::zeros(kernel_dim, img_cols.len());
        for (j, v) in img_cols.iter().enumerate() {
            let coords = snf_out.v.mat_vec(v);
            for (i, entry) in coords.iter().enumerate() {
                if i < r {
                    assert!(entry.is_zero(), "image vector is not a cycle");
                } else {
                    c[(i - r, j)] = entry.clone();
                }
            }
        }
        let snf_quot = smith_normal_form(&c);
        DegreeQuotient { kernel_dim, snf_out, snf_quot }
    }

    fn kernel_basis_vector(&self, j: usize, n: usize) -> Vec<Z> {
        let r = self.snf_out.rank;
        (0..n).map(|i| self.snf_out.v_inv[(i, r + j)].clone()).collect()
    }

    /// Class of a cycle: (torsion components reduced mod d_i, free components).
    fn class_of(&self, v: &[Z], degree: usize) -> Result<(Vec<Z>, Vec<Z>), AlgebraError> {
        let coords = self.snf_out.v.mat_vec(v);
        let r = self.snf_out.rank;
        for entry in coords.iter().take(r) {
            if !entry.is_zero() {
                return Err(AlgebraError::NotCycle(degree));
            }
        }
        let kc: Vec<Z> = coords[r..].to_vec();
        let w = self.snf_quot.u_inv.mat_vec(&kc);
        let rq = self.snf_quot.rank;
        let mut torsion = Vec::new();
        let mut free = Vec::new();
        for (i, wi) in w.iter().enumerate() {
            if i < rq {
                let d = self.snf_quot.d[(i, i)].clone();
                if d > Z::one() {
                    torsion.push(wi.mod_floor(&d));
                }
                // d == 1 components die in the quotient.
            } else {
                free.push(wi.clone());
            }
        }
        Ok((torsion, free))
    }

    fn homology(&self, complex: &GradedComplex, k: usize) -> DegreeHomology {
        let n = complex.rank(k);
        let rq = self.snf_quot.rank;
        let betti = self.kernel_dim - rq;
        let mut torsion = Vec::new();
        let mut torsion_generators = Vec::new();
        for i in 0..rq {
            let d = self.snf_quot.d[(i, i)].clone();
            if d > Z::one() {
                torsion.push(d);
                let coeffs = self.snf_quot.u.col(i);
                torsion_generators.push(self.lift(&coeffs, n));
            }
        }
        let mut free_generators = Vec::new();
        for j in rq..self.kernel_dim {
            let coeffs = self.snf_quot.u.col(j);
            free_generators.push(self.lift(&coeffs, n));
        }
        DegreeHomology { betti, torsion, free_generators, torsion_generators }
    }

    /// Kernel-coordinate vector back to the chain basis.
    fn lift(&self, coeffs: &[Z], n: usize) -> Vec<Z> {
        let mut out = vec![Z::zero(); n];
        for (j, c) in coeffs.iter().enumerate() {
            if c.is_zero() {
                continue;
            }
            let basis = self.kernel_basis_vector(j, n);
            for i in 0..n {
                out[i] = out[i].clone() + c.clone() * basis[i].clone();
            }
        }
        out
    }
}

/// Homology in every degree. Verifies boundary squared first.
pub fn homology(complex: &GradedComplex) -> Result<Homology, AlgebraError> {
    complex.verify_boundary_squared()?;
    let degrees = (0..=complex.top_degree())
        .map(|k| DegreeQuotient::build(complex, k).homology(complex, k))
        .collect();
    Ok(Homology { degrees })
}

/// Graded integer chain map between complexes with the same degree range.
#[derive(Debug, Clone, PartialEq)]
pub struct GradedIntMap {
    pub matrices: Vec<IntMat>,
}

impl GradedIntMap {
    pub fn zero(source: &GradedComplex, target: &GradedComplex) -> Self {
        let top = source.top_degree().max(target.top_degree());
        let matrices = (0..=top)
            .map(|k| IntMat::zeros(target.rank(k), source.rank(k)))
            .collect();
        GradedIntMap { matrices }
    }

    pub fn identity(complex: &GradedComplex) -> Self {
        let matrices = (0..=complex.top_degree())
            .map(|k| IntMat::identity(complex.rank(k)))
            .collect();
        GradedIntMap { matrices }
    }

    pub fn matrix(&self, k: usize) -> Option<&IntMat> {
        self.matrices.get(k)
    }

    pub fn compose_after(&self, inner: &GradedIntMap) -> GradedIntMap {
        let top = self.matrices.len().min(inner.matrices.len());
        let matrices = (0..top)
            .map(|k| self.matrices[k].mat_mat(&inner.matrices[k]))
            .collect();
        GradedIntMap { matrices }
    }
}

/// Verify the chain map identity `boundary_B M = M boundary_A` exactly.
pub fn verify_chain_map(
    map: &GradedIntMap,
    source: &GradedComplex,
    target: &GradedComplex,
) -> Result<(), AlgebraError> {
    let top = source.top_degree().max(target.top_degree());
    for k in 1..=top {
        let mk = map
            .matrices
            .get(k)
            .cloned()
            .unwrap_or_else(|| IntMat::zeros(target.rank(k), source.rank(k)));
        let mk1 = map
            .matrices
            .get(k - 1)
            .cloned()
            .unwrap_or_else(|| IntMat::zeros(target.rank(k - 1), source.rank(k - 1)));
        let lhs = target.boundary_from(k).mat_mat(&mk);
        let rhs = mk1.mat_mat(&source.boundary_from(k));
        if lhs != rhs {
            let diff = lhs.sub(&rhs);
            for i in 0..diff.rows {
                for j in 0..diff.cols {
                    if !diff[(i, j)].is_zero() {
                        return Err(AlgebraError::NotChainMap {
                            degree: k,
                            row: i,
                            col: j,
                            value: diff[(i, j)].to_string(),
                        });
                    }
                }
            }
        }
    }
    Ok(())
}

/// Class data of the induced map on homology, degreewise.
#[derive(Debug, Clone, PartialEq)]
pub struct HomologyMap {
    /// Per degree: matrix of the induced map on the free parts.
    pub free: Vec<IntMat>,
    /// Per degree: torsion invariant factor lists of source and target.
    pub source_torsion: Vec<Vec<Z>>,
    pub target_torsion: Vec<Vec<Z>>,
    /// Per degree: images of source torsion generators in target classes
    /// (torsion components only; their free components are zero for maps
    /// of finite-order classes).
    pub torsion_images: Vec<Vec<Vec<Z>>>,
}

/// Induced map on homology of a verified chain map.
pub fn homology_map(
    map: &GradedIntMap,
    source: &GradedComplex,
    target: &GradedComplex,
) -> Result<HomologyMap, AlgebraError> {
    verify_chain_map(map, source, target)?;
    let top = source.top_degree().max(target.top_degree());
    let mut free = Vec::new();
    let mut source_torsion = Vec::new();
    let mut target_torsion = Vec::new();
    let mut torsion_images = Vec::new();
    for k in 0..=top {
        let qs = DegreeQuotient::build(source, k.min(source.top_degree()));
        let qt = DegreeQuotient::build(target, k.min(target.top_degree()));
        let hs = qs.homology(source, k.min(source.top_degree()));
        let ht = qt.homology(target, k.min(target.top_degree()));
        let (hs, qs) = if k <= source.top_degree() {
            (hs, Some(qs))
        } else {
            (DegreeHomology { betti: 0, torsion: vec![], free_generators: vec![], torsion_generators: vec![] }, None)
        };
        let (ht, qt) = if k <= target.top_degree() {
            (ht, Some(qt))
        } else {
            (DegreeHomology { betti: 0, torsion: vec![], free_generators: vec![], torsion_generators: vec![] }, None)
        };
        let mk = map
            .matrices
            .get(k)
            .cloned()
            .unwrap_or_else(|| IntMat::zeros(target.rank(k), source.rank(k)));
        let mut fm = IntMat::zeros(ht.betti, hs.betti);
        if let (Some(_qs), Some(qt)) = (&qs, &qt) {
            for (j, gen) in hs.free_generators.iter().enumerate() {
                let img = mk.mat_vec(gen);
                let (_tors, fr) = qt.class_of(&img, k)?;
                for i in 0..ht.betti {
                    fm[(i, j)] = fr[i].clone();
                }
            }
        }
        let mut timg = Vec::new();
        if let Some(qt) = &qt {
            for gen in &hs.torsion_generators {
                let img = mk.mat_vec(gen);
                let (tors, _fr) = qt.class_of(&img, k)?;
                timg.push(tors);
            }
        }
        free.push(fm);
        source_torsion.push(hs.torsion);
        target_torsion.push(ht.torsion);
        torsion_images.push(timg);
    }
    Ok(HomologyMap { free, source_torsion, target_torsion, torsion_images })
}

/// Do two chain maps agree on homology classes in every degree?
pub fn equal_on_homology(
    m1: &GradedIntMap,
    m2: &GradedIntMap,
    source: &GradedComplex,
    target: &GradedComplex,
) -> Result<bool, AlgebraError> {
    verify_chain_map(m1, source, target)?;
    verify_chain_map(m2, source, target)?;
    for k in 0..=source.top_degree() {
        let qs = DegreeQuotient::build(source, k);
        let qt = if k <= target.top_degree() {
            DegreeQuotient::build(target, k)
        } else {
            continue;
        };
        let hs = qs.homology(source, k);
        let gens = hs.free_generators.iter().chain(hs.torsion_generators.iter());
        for gen in gens {
            let a = m1
                .matrices
                .get(k)
                .map(|m| m.mat_vec(gen))
                .unwrap_or_else(|| vec![Z::zero(); target.rank(k)]);
            let b = m2
                .matrices
                .get(k)
                .map(|m| m.mat_vec(gen))
                .unwrap_or_else(|| vec![Z::zero(); target.rank(k)]);
            if qt.class_of(&a, k)? != qt.class_of(&b, k)? {
                return Ok(false);
            }
        }
    }
    Ok(true)
}

/// Is the induced map an isomorphism on homology?
///
/// Torsion-free homology is decided by Betti equality plus a unit determinant
/// of the free matrix. Matching cyclic decompositions with torsion are decided
/// factorwise; mixed cases beyond that are reported unsupported rather than
/// guessed.
pub fn iso_on_homology(
    map: &GradedIntMap,
    source: &GradedComplex,
    target: &GradedComplex,
) -> Result<bool, AlgebraError> {
    let hm = homology_map(map, source, target)?;
    for k in 0..hm.free.len() {
        let f = &hm.free[k];
        if f.rows != f.cols {
            return Ok(false);
        }
        if f.rows > 0 && f.det().abs() != Z::one() {
            return Ok(false);
        }
        let st = &hm.source_torsion[k];
        let tt = &hm.target_torsion[k];
        if st != tt {
            return Ok(false);
        }
        if !st.is_empty() {
            // Factorwise unit check on the diagonal cyclic decomposition.
            let n = st.len();
            let mut tm = IntMat::zeros(n, n);
            for (j, img) in hm.torsion_images[k].iter().enumerate() {
                for i in 0..n {
                    tm[(i, j)] = img[i].clone();
                }
            }
            if n == 1 {
                let d = &st[0];
                if tm[(0, 0)].gcd(d) != Z::one() {
                    return Ok(false);
                }
            } else {
                return Err(AlgebraError::TorsionIso(format!(
                    "degree {k} has {n} torsion factors"
                )));
            }
        }
    }
    Ok(true)
}

// JSON serialization: matrices as row-major decimal strings so arbitrary
// precision survives the trip.

#[derive(Serialize, Deserialize)]
struct MatDto {
    rows: usize,
    cols: usize,
    entries: Vec<String>,
}

impl From<&IntMat> for MatDto {
    fn from(m: &IntMat) -> Self {
        MatDto {
            rows: m.rows,
            cols: m.cols,
            entries: m.data.iter().map(|v| v.to_string()).collect(),
        }
    }
}

impl MatDto {
    fn into_mat(self) -> Result<IntMat, AlgebraError> {
        if self.entries.len() != self.rows * self.cols {
            return Err(AlgebraError::Serde(format!(
                "matrix {}x{} needs {} entries, got {}",
                self.rows,
                self.cols,
                self.rows * self.cols,
                self.entries.len()
            )));
        }
        let data = self
            .entries
            .iter()
            .map(|s| s.parse::<Z>().map_err(|e| AlgebraError::Serde(e.to_string())))
            .collect::<Result<Vec<_>, _>>()?;
        Ok(IntMat { rows: self.rows, cols: self.cols, data })
    }
}

#[derive(Serialize, Deserialize)]
struct DegreeDto {
    degree: usize,
    generators: Vec<String>,
}

#[derive(Serialize, Deserialize)]
struct ComplexDto {
    schema: String,
    degrees: Vec<DegreeDto>,
    /// boundaries[k] maps degree k+1 into degree k.
    boundaries: Vec<MatDto>,
}

pub fn complex_to_json(c: &GradedComplex) -> serde_json::Value {
    let dto = ComplexDto {
        schema: "mcfkit-complex/1".to_string(),
        degrees: c
            .generators
            .iter()
            .enumerate()
            .map(|(degree, generators)| DegreeDto { degree, generators: generators.clone() })
            .collect(),
        boundaries: c.boundaries.iter().map(MatDto::from).collect(),
    };
    serde_json::to_value(dto).expect("complex serializes")
}

pub fn complex_from_json(v: &serde_json::Value) -> Result<GradedComplex, AlgebraError> {
    let dto: ComplexDto =
        serde_json::from_value(v.clone()).map_err(|e| AlgebraError::Serde(e.to_string()))?;
    if dto.schema != "mcfkit-complex/1" {
        return Err(AlgebraError::Serde(format!("unknown schema '{}'", dto.schema)));
    }
    let mut generators = vec![Vec::new(); dto.degrees.len()];
    for d in dto.degrees {
        if d.degree >= generators.len() {
            return Err(AlgebraError::Serde(format!("degree {} out of range", d.degree)));
        }
        generators[d.degree] = d.generators;
    }
    let boundaries = dto
        .boundaries
        .into_iter()
        .map(MatDto::into_mat)
        .collect::<Result<Vec<_>, _>>()?;
    GradedComplex::new(generators, boundaries)
}

#[derive(Serialize, Deserialize)]
struct MapDto {
    schema: String,
    matrices: Vec<MatDto>,
}

pub fn map_to_json(m: &GradedIntMap) -> serde_json::Value {
    let dto = MapDto {
        schema: "mcfkit-chainmap/1".to_string(),
        matrices: m.matrices.iter().map(MatDto::from).collect(),
    };
    serde_json::to_value(dto).expect("map serializes")
}

pub fn map_from_json(v: &serde_json::Value) -> Result<GradedIntMap, AlgebraError> {
    let dto: MapDto =
        serde_json::from_value(v.clone()).map_err(|e| AlgebraError::Serde(e.to_string()))?;
    if dto.schema != "mcfkit-chainmap/1" {
        return Err(AlgebraError::Serde(format!("unknown schema '{}'", dto.schema)));
    }
    let matrices = dto
        .matrices
        .into_iter()
        .map(MatDto::into_mat)
        .collect::<Result<Vec<_>, _>>()?;
    Ok(GradedIntMap { matrices })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn big(m: &[&[i64]]) -> IntMat {
        IntMat::from_rows_i64(m)
    }

    #[test]
    fn snf_of_diag_2_3_is_diag_1_6() {
        // Hand reduction: gcd(2,3) = 1 via row/col combinations, determinant
        // 6 forces the chain 1 | 6.
        let a = big(&[&[2, 0], &[0, 3]]);
        let s = smith_normal_form(&a);
        assert!(verify_snf(&a, &s));
        assert_eq!(s.rank, 2);
        assert_eq!(s.d[(0, 0)], Z::from(1));
        assert_eq!(s.d[(1, 1)], Z::from(6));
    }

    #[test]
    fn snf_fixed_cases() {
        let z = big(&[&[0]]);
        let s = smith_normal_form(&z);
        assert_eq!(s.rank, 0);

        let two = big(&[&[2]]);
        let s = smith_normal_form(&two);
        assert_eq!(s.rank, 1);
        assert_eq!(s.d[(0, 0)], Z::from(2));

        // Rectangular with dependent rows.
        let a = big(&[&[1, 2, 3], &[2, 4, 6]]);
        let s = smith_normal_form(&a);
        assert!(verify_snf(&a, &s));
        assert_eq!(s.rank, 1);
        assert_eq!(s.d[(0, 0)], Z::from(1));
    }

    /// Determinantal-divisor oracle: the product d_1 ... d_k equals the gcd of
    /// all k x k minors. Independent of the reduction path.
    fn determinantal_divisors_match(a: &IntMat) -> bool {
        let s = smith_normal_form(a);
        if !verify_snf(a, &s) {
            return false;
        }
        let max_k = a.rows.min(a.cols);
        for k in 1..=max_k {
            let mut g = Z::zero();
            for rows in combinations(a.rows, k) {
                for cols in combinations(a.cols, k) {
                    let mut minor = IntMat::zeros(k, k);
                    for (i, &r) in rows.iter().enumerate() {
                        for (j, &c) in cols.iter().enumerate() {
                            minor[(i, j)] = a[(r, c)].clone();
                        }
                    }
                    g = g.gcd(&minor.det());
                }
            }
            let mut prod = Z::one();
            for i in 0..k.min(s.rank) {
                prod *= s.d[(i, i)].clone();
            }
            let expected = if k <= s.rank { prod } else { Z::zero() };
            if g != expected {
                return false;
            }
        }
        true
    }

    fn combinations(n: usize, k: usize) -> Vec<Vec<usize>> {
        if k > n {
            return vec![];
        }
        if k == 0 {
            return vec![vec![]];
        }
        let mut out = Vec::new();
        let mut idx: Vec<usize> = (0..k).collect();
        loop {
            out.push(idx.clone());
            let mut i = k;
            loop {
                if i == 0 {
                    return out;
                }
                i -= 1;
                if idx[i] != i + n - k {
                    break;
                }
                if i == 0 {
                    return out;
                }
            }
            idx[i] += 1;
            for j in i + 1..k {
                idx[j] = idx[j - 1] + 1;
            }
        }
    }

    #[test]
    fn snf_against_determinantal_divisor_oracle() {
        let cases: Vec<IntMat> = vec![
            big(&[&[2, 4, 4], &[-6, 6, 12], &[10, 4, 16]]),
            big(&[&[1, 0], &[0, 0]]),
            big(&[&[6, 10], &[10, 15]]),
            big(&[&[-7]]),
            big(&[&[3, 1, 2], &[0, 0, 4]]),
            big(&[&[2, 0, 0], &[0, 2, 0], &[0, 0, 2]]),
        ];
        for a in cases {
            assert!(determinantal_divisors_match(&a), "oracle failed for {a:?}");
        }
    }

    #[test]
    fn snf_generic_over_i64() {
        let a: IntMat<i64> = IntMat::from_rows_i64(&[&[4, 6], &[6, 9]]);
        let s = smith_normal_form(&a);
        assert!(verify_snf(&a, &s));
        assert_eq!(s.d[(0, 0)], 1);
        // det = 0, rank 1.
        assert_eq!(s.rank, 1);
    }

    fn circle_complex() -> GradedComplex {
        GradedComplex::new(
            vec![vec!["min".into()], vec!["max".into()]],
            vec![big(&[&[0]])],
        )
        .unwrap()
    }

    fn rp2_complex() -> GradedComplex {
        // One cell per degree, degree-2 attaching map of degree 2.
        GradedComplex::new(
            vec![vec!["v".into()], vec!["e".into()], vec!["f".into()]],
            vec![big(&[&[0]]), big(&[&[2]])],
        )
        .unwrap()
    }

    #[test]
    fn circle_homology() {
        let h = homology(&circle_complex()).unwrap();
        assert_eq!(h.betti(), vec![1, 1]);
        assert!(h.degrees[0].torsion.is_empty());
        assert!(h.degrees[1].torsion.is_empty());
        assert_eq!(h.describe(), "H_0 = Z, H_1 = Z");
    }

    #[test]
    fn torsion_from_multiplication_by_two() {
        let c = GradedComplex::new(
            vec![vec!["p".into()], vec!["q".into()]],
            vec![big(&[&[2]])],
        )
        .unwrap();
        let h = homology(&c).unwrap();
        assert_eq!(h.degrees[0].betti, 0);
        assert_eq!(h.degrees[0].torsion, vec![Z::from(2)]);
        assert_eq!(h.degrees[1].betti, 0);
        assert!(h.degrees[1].torsion.is_empty());
    }

    #[test]
    fn projective_plane_homology_and_cohomology() {
        let c = rp2_complex();
        let h = homology(&c).unwrap();
        assert_eq!(h.betti(), vec![1, 0, 0]);
        assert_eq!(h.degrees[1].torsion, vec![Z::from(2)]);
        // Cohomology via the dual: H^0 = Z, H^1 = 0, H^2 = Z/2. In dual
        // (chain) indexing degree j holds H^{2-j}.
        let d = c.dualize();
        let hd = homology(&d).unwrap();
        assert_eq!(hd.degrees[2].betti, 1); // H^0
        assert_eq!(hd.degrees[1].betti, 0); // H^1
        assert!(hd.degrees[1].torsion.is_empty());
        assert_eq!(hd.degrees[0].betti, 0); // H^2
        assert_eq!(hd.degrees[0].torsion, vec![Z::from(2)]);
    }

    #[test]
    fn dualize_is_an_involution() {
        let c = rp2_complex();
        assert_eq!(c.dualize().dualize(), c);
        let labels: Vec<_> = c.dualize().generators.iter().flatten().cloned().collect();
        assert_eq!(labels, vec!["f*", "e*", "v*"]);
    }

    #[test]
    fn torus_complex_with_zero_boundaries() {
        let c = GradedComplex::new(
            vec![
                vec!["m".into()],
                vec!["s1".into(), "s2".into()],
                vec!["M".into()],
            ],
            vec![IntMat::zeros(1, 2), IntMat::zeros(2, 1)],
        )
        .unwrap();
        let h = homology(&c).unwrap();
        assert_eq!(h.betti(), vec![1, 2, 1]);
    }

    #[test]
    fn boundary_squared_failure_is_located() {
        let c = GradedComplex::new(
            vec![vec!["a".into()], vec!["b".into()], vec!["c".into()]],
            vec![big(&[&[1]]), big(&[&[1]])],
        )
        .unwrap();
        match c.verify_boundary_squared() {
            Err(AlgebraError::BoundarySquared { degree, row, col, value }) => {
                assert_eq!((degree, row, col), (2, 0, 0));
                assert_eq!(value, "1");
            }
            other => panic!("expected boundary-squared failure, got {other:?}"),
        }
    }

    #[test]
    fn chain_map_verification_flags_noncommuting_squares() {
        let interval = GradedComplex::new(
            vec![vec!["p".into(), "q".into()], vec!["e".into()]],
            vec![big(&[&[1], &[-1]])],
        )
        .unwrap();
        let id = GradedIntMap::identity(&interval);
        assert!(verify_chain_map(&id, &interval, &interval).is_ok());

        let bad = GradedIntMap {
            matrices: vec![IntMat::identity(2), big(&[&[-1]])],
        };
        assert!(matches!(
            verify_chain_map(&bad, &interval, &interval),
            Err(AlgebraError::NotChainMap { degree: 1, .. })
        ));
    }

    #[test]
    fn maps_equal_on_homology_despite_differing_on_chains() {
        let interval = GradedComplex::new(
            vec![vec!["p".into(), "q".into()], vec!["e".into()]],
            vec![big(&[&[1], &[-1]])],
        )
        .unwrap();
        let id = GradedIntMap::identity(&interval);
        // Swap endpoints, negate the edge: a chain map, equal to the identity
        // on H_0 because p and q are homologous.
        let swap = GradedIntMap {
            matrices: vec![big(&[&[0, 1], &[1, 0]]), big(&[&[-1]])],
        };
        assert!(verify_chain_map(&swap, &interval, &interval).is_ok());
        assert!(equal_on_homology(&id, &swap, &interval, &interval).unwrap());

        // Doubling the point is not equal to the identity on homology.
        let double = GradedIntMap {
            matrices: vec![big(&[&[2, 0], &[0, 2]]), big(&[&[2]])],
        };
        assert!(verify_chain_map(&double, &interval, &interval).is_ok());
        assert!(!equal_on_homology(&id, &double, &interval, &interval).unwrap());
    }

    #[test]
    fn homology_map_free_matrix_and_iso_check() {
        let circle = circle_complex();
        let times_two = GradedIntMap {
            matrices: vec![big(&[&[1]]), big(&[&[2]])],
        };
        let hm = homology_map(&times_two, &circle, &circle).unwrap();
        assert_eq!(hm.free[1][(0, 0)], Z::from(2));
        assert!(!iso_on_homology(&times_two, &circle, &circle).unwrap());
        assert!(iso_on_homology(&GradedIntMap::identity(&circle), &circle, &circle).unwrap());
        let minus = GradedIntMap {
            matrices: vec![big(&[&[1]]), big(&[&[-1]])],
        };
        assert!(iso_on_homology(&minus, &circle, &circle).unwrap());
    }

    #[test]
    fn generator_lifts_are_cycles_representing_free_classes() {
        let c = GradedComplex::new(
            vec![
                vec!["m".into()],
                vec!["s1".into(), "s2".into()],
                vec!["M".into()],
            ],
            vec![big(&[&[0, 2]]), big(&[&[3], &[0]])],
        )
        .unwrap();
        let h = homology(&c).unwrap();
        for (k, d) in h.degrees.iter().enumerate() {
            let out = c.boundary_from(k);
            for g in d.free_generators.iter().chain(d.torsion_generators.iter()) {
                let img = out.mat_vec(g);
                assert!(img.iter().all(|v| v.is_zero()), "lift in degree {k} is a cycle");
                assert!(g.iter().any(|v| !v.is_zero()), "lift is nonzero");
            }
        }
    }

    #[test]
    fn json_round_trip_preserves_complexes_and_maps() {
        let c = rp2_complex();
        let v = complex_to_json(&c);
        assert_eq!(v["schema"], "mcfkit-complex/1");
        let back = complex_from_json(&v).unwrap();
        assert_eq!(back, c);

        let m = GradedIntMap {
            matrices: vec![big(&[&[1]]), big(&[&[-3]]), big(&[&[7]])],
        };
        let mv = map_to_json(&m);
        let mback = map_from_json(&mv).unwrap();
        assert_eq!(mback, m);
    }

    #[test]
    fn empty_complex_has_trivial_homology() {
        let c = GradedComplex::empty();
        let h = homology(&c).unwrap();
        assert_eq!(h.betti(), vec![0]);
    }
}

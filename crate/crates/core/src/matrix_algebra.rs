//! Finite matrix algebra with the standard (unnormalized) trace.
//!
//! Elements are dense `m x m` complex matrices. Hermitian routines symmetrize
//! their input before diagonalizing, so rounding noise in the lower triangle
//! never leaks into the spectrum.

use std::ops::{Add, Mul, Neg, Sub};

use nalgebra::{DMatrix, SymmetricEigen, SVD};
use num_complex::Complex64;
use rand::Rng;

use crate::error::{Error, Result};

/// Distance from an interval endpoint within which an eigenvalue snaps onto it.
pub const ENDPOINT_SNAP: f64 = 1e-10;
/// Singular values at or below this count as zero when computing ranges.
pub const RANK_THRESHOLD: f64 = 1e-10;
/// Entry tolerance for the Hermitian flag.
pub const HERMITIAN_TOL: f64 = 1e-12;
/// Tolerance for the projection flag.
pub const PROJECTION_TOL: f64 = 1e-10;

const EIGEN_EPS: f64 = 1e-15;
const EIGEN_MAX_ITER: usize = 10_000;

#[derive(Clone, Debug, PartialEq)]
pub struct MatrixElement {
    entries: DMatrix<Complex64>,
}

impl MatrixElement {
    pub fn from_matrix(entries: DMatrix<Complex64>) -> Self {
        assert_eq!(entries.nrows(), entries.ncols(), "matrix must be square");
        Self { entries }
    }

    pub fn zeros(m: usize) -> Self {
        Self::from_matrix(DMatrix::zeros(m, m))
    }

    pub fn identity(m: usize) -> Self {
        Self::from_matrix(DMatrix::identity(m, m))
    }

    pub fn scalar(m: usize, value: f64) -> Self {
        Self::identity(m).scale(value)
    }

    pub fn from_real_diagonal(diag: &[f64]) -> Self {
        let m = diag.len();
        Self::from_matrix(DMatrix::from_fn(m, m, |i, j| {
            if i == j {
                Complex64::new(diag[i], 0.0)
            } else {
                Complex64::new(0.0, 0.0)
            }
        }))
    }

    /// Builds an element from row-major entries.
    pub fn from_row_major(m: usize, data: &[Complex64]) -> Result<Self> {
        if data.len() != m * m {
            return Err(Error::DimensionMismatch {
                expected: m * m,
                found: data.len(),
            });
        }
        Ok(Self::from_matrix(DMatrix::from_row_slice(m, m, data)))
    }

    pub fn to_row_major(&self) -> Vec<Complex64> {
        let m = self.dim();
        let mut out = Vec::with_capacity(m * m);
        for i in 0..m {
            for j in 0..m {
                out.push(self.entries[(i, j)]);
            }
        }
        out
    }

    pub fn dim(&self) -> usize {
        self.entries.nrows()
    }

    pub fn entries(&self) -> &DMatrix<Complex64> {
        &self.entries
    }

    pub fn get(&self, i: usize, j: usize) -> Complex64 {
        self.entries[(i, j)]
    }

    pub fn adjoint(&self) -> Self {
        Self::from_matrix(self.entries.adjoint())
    }

    pub fn scale(&self, t: f64) -> Self {
        Self::from_matrix(self.entries.map(|z| z * t))
    }

    pub fn scale_complex(&self, t: Complex64) -> Self {
        Self::from_matrix(self.entries.map(|z| z * t))
    }

    /// Unnormalized matrix trace.
    pub fn trace(&self) -> Complex64 {
        self.entries.trace()
    }

    pub fn real_trace(&self) -> f64 {
        self.trace().re
    }

    /// `a* a`
    pub fn gram(&self) -> Self {
        Self::from_matrix(self.entries.adjoint() * &self.entries)
    }

    /// `a a*`
    pub fn co_gram(&self) -> Self {
        Self::from_matrix(&self.entries * self.entries.adjoint())
    }

    pub fn commutator(&self, other: &Self) -> Self {
        &(self * other) - &(other * self)
    }

    /// Largest entrywise modulus.
    pub fn max_entry(&self) -> f64 {
        self.entries.iter().map(|z| z.norm()).fold(0.0, f64::max)
    }

    pub fn max_entry_distance(&self, other: &Self) -> f64 {
        self.entries
            .iter()
            .zip(other.entries.iter())
            .map(|(a, b)| (a - b).norm())
            .fold(0.0, f64::max)
    }

    pub fn hermitian_deviation(&self) -> f64 {
        self.max_entry_distance(&self.adjoint())
    }

    pub fn is_hermitian(&self) -> bool {
        self.hermitian_deviation() <= HERMITIAN_TOL * (1.0 + self.max_entry())
    }

    pub fn projection_deviation(&self) -> f64 {
        let sq = self * self;
        let idem = sq.max_entry_distance(self);
        idem.max(self.hermitian_deviation())
    }

    pub fn is_projection(&self) -> bool {
        self.projection_deviation() <= PROJECTION_TOL
    }

    pub fn is_zero(&self, tol: f64) -> bool {
        self.max_entry() <= tol
    }

    pub fn hermitian_part(&self) -> Self {
        Self::from_matrix((&self.entries + self.entries.adjoint()).map(|z| z * 0.5))
    }

    fn require_hermitian(&self, what: &'static str) -> Result<()> {
        let deviation = self.hermitian_deviation();
        if deviation > 1e-9 * (1.0 + self.max_entry()) {
            return Err(Error::NotHermitian { what, deviation });
        }
        Ok(())
    }

    fn require_projection(&self, what: &'static str) -> Result<()> {
        let deviation = self.projection_deviation();
        if deviation > 1e-8 {
            return Err(Error::NotProjection { what, deviation });
        }
        Ok(())
    }

    /// Eigenvalues (ascending) and orthonormal eigenvectors of a Hermitian element.
    pub fn eigh(&self) -> Result<HermitianEigen> {
        self.require_hermitian("eigh input")?;
        hermitian_eigen(&self.hermitian_part())
    }

    pub fn eigenvalues(&self) -> Result<Vec<f64>> {
        Ok(self.eigh()?.values)
    }

    pub fn min_eigenvalue(&self) -> Result<f64> {
        Ok(self.eigh()?.values[0])
    }

    pub fn max_eigenvalue(&self) -> Result<f64> {
        Ok(*self.eigh()?.values.last().expect("nonempty spectrum"))
    }

    /// `f(a)` for Hermitian `a`.
    pub fn apply_hermitian(&self, f: impl Fn(f64) -> f64) -> Result<Self> {
        Ok(self.eigh()?.reassemble(f))
    }

    /// Positive square root, clamping rounding-level negative eigenvalues.
    pub fn sqrt_psd(&self) -> Result<Self> {
        self.apply_hermitian(|x| x.max(0.0).sqrt())
    }

    /// `(a^2 + s^2)^{1/2}` for Hermitian `a`.
    pub fn regularized_abs(&self, s: f64) -> Result<Self> {
        self.apply_hermitian(|x| (x * x + s * s).sqrt())
    }

    /// Inverse of a positive definite element.
    pub fn inverse_pd(&self) -> Result<Self> {
        let eig = self.eigh()?;
        if eig.values[0] <= 0.0 {
            return Err(Error::Singular(format!(
                "smallest eigenvalue {:e} is not positive",
                eig.values[0]
            )));
        }
        Ok(eig.reassemble(|x| 1.0 / x))
    }

    /// Positive part `max(a, 0)` of a Hermitian element.
    pub fn positive_part(&self) -> Result<Self> {
        self.apply_hermitian(|x| x.max(0.0))
    }

    /// Singular values, descending.
    pub fn singular_values(&self) -> Result<Vec<f64>> {
        if self.dim() == 1 {
            return Ok(vec![self.entries[(0, 0)].norm()]);
        }
        let svd = SVD::try_new(self.entries.clone(), false, false, EIGEN_EPS, EIGEN_MAX_ITER)
            .ok_or(Error::EigenFailure(self.dim()))?;
        let mut s: Vec<f64> = svd.singular_values.iter().copied().collect();
        s.sort_by(|a, b| b.total_cmp(a));
        Ok(s)
    }

    pub fn op_norm(&self) -> Result<f64> {
        Ok(self.singular_values()?[0])
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.entries.iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt()
    }

    /// Uniform random Hermitian element with entries in the unit square.
    pub fn random_hermitian(m: usize, rng: &mut impl Rng) -> Self {
        random_general(m, rng).hermitian_part()
    }

    /// Random positive semidefinite element `x* x` with trace about `m`.
    pub fn random_positive(m: usize, rng: &mut impl Rng) -> Self {
        let x = random_general(m, rng);
        x.gram()
    }
}

/// Random element with independent entries uniform in `[-1,1] + i[-1,1]`.
pub fn random_general(m: usize, rng: &mut impl Rng) -> MatrixElement {
    MatrixElement::from_matrix(DMatrix::from_fn(m, m, |_, _| {
        Complex64::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0))
    }))
}

impl Add for &MatrixElement {
    type Output = MatrixElement;
    fn add(self, rhs: &MatrixElement) -> MatrixElement {
        MatrixElement::from_matrix(&self.entries + &rhs.entries)
    }
}

impl Sub for &MatrixElement {
    type Output = MatrixElement;
    fn sub(self, rhs: &MatrixElement) -> MatrixElement {
        MatrixElement::from_matrix(&self.entries - &rhs.entries)
    }
}

impl Mul for &MatrixElement {
    type Output = MatrixElement;
    fn mul(self, rhs: &MatrixElement) -> MatrixElement {
        MatrixElement::from_matrix(&self.entries * &rhs.entries)
    }
}

impl Neg for &MatrixElement {
    type Output = MatrixElement;
    fn neg(self) -> MatrixElement {
        MatrixElement::from_matrix(-&self.entries)
    }
}

/// Raw eigendecomposition of a Hermitian element.
#[derive(Clone, Debug)]
pub struct HermitianEigen {
    /// Ascending.
    pub values: Vec<f64>,
    /// Column `k` is the eigenvector for `values[k]`.
    pub vectors: DMatrix<Complex64>,
}

impl HermitianEigen {
    pub fn reassemble(&self, f: impl Fn(f64) -> f64) -> MatrixElement {
        let m = self.values.len();
        let mut scaled = self.vectors.clone();
        for k in 0..m {
            let fk = f(self.values[k]);
            for i in 0..m {
                scaled[(i, k)] *= fk;
            }
        }
        MatrixElement::from_matrix(scaled * self.vectors.adjoint())
    }

    /// Projection onto the span of the eigenvectors selected by `keep`.
    pub fn projection_where(&self, keep: impl Fn(f64) -> bool) -> MatrixElement {
        let m = self.values.len();
        let kept = self.values.iter().filter(|&&x| keep(x)).count();
        if kept == m {
            return MatrixElement::identity(m);
        }
        if kept == 0 {
            return MatrixElement::zeros(m);
        }
        self.reassemble(|x| if keep(x) { 1.0 } else { 0.0 })
    }
}

fn hermitian_eigen(a: &MatrixElement) -> Result<HermitianEigen> {
    let m = a.dim();
    if m == 1 {
        return Ok(HermitianEigen {
            values: vec![a.entries[(0, 0)].re],
            vectors: DMatrix::identity(1, 1),
        });
    }
    let eig = SymmetricEigen::try_new(a.entries.clone(), EIGEN_EPS, EIGEN_MAX_ITER)
        .ok_or(Error::EigenFailure(m))?;
    let mut order: Vec<usize> = (0..m).collect();
    order.sort_by(|&i, &j| eig.eigenvalues[i].total_cmp(&eig.eigenvalues[j]));
    let values = order.iter().map(|&k| eig.eigenvalues[k]).collect();
    let vectors = DMatrix::from_fn(m, m, |i, k| eig.eigenvectors[(i, order[k])]);
    Ok(HermitianEigen { values, vectors })
}

/// Eigenvalues grouped into clusters with their eigenprojections.
#[derive(Clone, Debug)]
pub struct SpectralDecomposition {
    /// Distinct eigenvalues, ascending.
    pub eigenvalues: Vec<f64>,
    pub eigenprojections: Vec<MatrixElement>,
}

impl SpectralDecomposition {
    /// Eigenvalues closer than [`ENDPOINT_SNAP`] are merged into one cluster.
    pub fn of(a: &MatrixElement) -> Result<Self> {
        let eig = a.eigh()?;
        let mut eigenvalues: Vec<f64> = Vec::new();
        let mut groups: Vec<Vec<usize>> = Vec::new();
        for (k, &v) in eig.values.iter().enumerate() {
            match eigenvalues.last() {
                Some(&last) if (v - last).abs() <= ENDPOINT_SNAP => {
                    groups.last_mut().expect("group exists").push(k)
                }
                _ => {
                    eigenvalues.push(v);
                    groups.push(vec![k]);
                }
            }
        }
        let m = a.dim();
        let eigenprojections = groups
            .iter()
            .map(|group| {
                let mut p = DMatrix::zeros(m, m);
                for &k in group {
                    let v = eig.vectors.column(k);
                    p += &v * v.adjoint();
                }
                MatrixElement::from_matrix(p)
            })
            .collect();
        Ok(Self {
            eigenvalues,
            eigenprojections,
        })
    }

    pub fn reconstruct(&self) -> MatrixElement {
        let m = self.eigenprojections[0].dim();
        self.eigenvalues
            .iter()
            .zip(&self.eigenprojections)
            .fold(MatrixElement::zeros(m), |acc, (&v, p)| &acc + &p.scale(v))
    }
}

/// Real interval with independent open/closed endpoints.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Interval {
    pub lo: f64,
    pub hi: f64,
    pub lo_closed: bool,
    pub hi_closed: bool,
}

impl Interval {
    /// `(t, ∞)`
    pub fn above(t: f64) -> Self {
        Self {
            lo: t,
            hi: f64::INFINITY,
            lo_closed: false,
            hi_closed: false,
        }
    }

    /// `(-∞, t]`
    pub fn at_most(t: f64) -> Self {
        Self {
            lo: f64::NEG_INFINITY,
            hi: t,
            lo_closed: false,
            hi_closed: true,
        }
    }

    /// `[a, b]`
    pub fn closed(a: f64, b: f64) -> Self {
        Self {
            lo: a,
            hi: b,
            lo_closed: true,
            hi_closed: true,
        }
    }

    /// `[a, b)`
    pub fn closed_open(a: f64, b: f64) -> Self {
        Self {
            lo: a,
            hi: b,
            lo_closed: true,
            hi_closed: false,
        }
    }

    /// `(a, b]`
    pub fn open_closed(a: f64, b: f64) -> Self {
        Self {
            lo: a,
            hi: b,
            lo_closed: false,
            hi_closed: true,
        }
    }

    /// Membership with endpoint snapping: values within [`ENDPOINT_SNAP`] of an
    /// endpoint are inside exactly when that endpoint is closed.
    pub fn contains(&self, x: f64) -> bool {
        if self.lo.is_finite() && (x - self.lo).abs() <= ENDPOINT_SNAP {
            return self.lo_closed;
        }
        if self.hi.is_finite() && (x - self.hi).abs() <= ENDPOINT_SNAP {
            return self.hi_closed;
        }
        x > self.lo && x < self.hi
    }
}

/// Spectral projection `χ_B(a)` of a Hermitian element.
pub fn spectral_projection(a: &MatrixElement, interval: Interval) -> Result<MatrixElement> {
    let eig = a.eigh()?;
    Ok(eig.projection_where(|x| interval.contains(x)))
}

/// `|a| = (a* a)^{1/2}`
pub fn abs_op(a: &MatrixElement) -> Result<MatrixElement> {
    a.gram().sqrt_psd()
}

/// Schatten `p`-norm for the unnormalized trace; `p = ∞` gives the operator norm.
pub fn schatten_norm(a: &MatrixElement, p: f64) -> Result<f64> {
    if p.is_nan() || p < 1.0 {
        return Err(Error::InvalidExponent(p));
    }
    let s = a.singular_values()?;
    if p.is_infinite() {
        return Ok(s[0]);
    }
    Ok(s.iter().map(|x| x.powf(p)).sum::<f64>().powf(1.0 / p))
}

/// Sum of `σ_k^p` over singular values.
pub fn schatten_power(a: &MatrixElement, p: f64) -> Result<f64> {
    if p.is_nan() || p < 1.0 {
        return Err(Error::InvalidExponent(p));
    }
    Ok(a.singular_values()?.iter().map(|x| x.powf(p)).sum())
}

/// Orthonormal basis of the range of a projection, as columns.
fn range_basis(e: &MatrixElement) -> Result<DMatrix<Complex64>> {
    let eig = e.eigh()?;
    let keep: Vec<usize> = (0..e.dim()).filter(|&k| eig.values[k] > 0.5).collect();
    Ok(DMatrix::from_fn(e.dim(), keep.len(), |i, c| {
        eig.vectors[(i, keep[c])]
    }))
}

/// Projection onto the span of the ranges of all inputs.
pub fn lattice_join_all(projections: &[&MatrixElement]) -> Result<MatrixElement> {
    let m = match projections.first() {
        Some(e) => e.dim(),
        None => return Err(Error::InvalidParameter("empty join".into())),
    };
    let mut columns: Vec<DMatrix<Complex64>> = Vec::with_capacity(projections.len());
    for e in projections {
        if e.dim() != m {
            return Err(Error::DimensionMismatch {
                expected: m,
                found: e.dim(),
            });
        }
        e.require_projection("join operand")?;
        columns.push(range_basis(e)?);
    }
    let total: usize = columns.iter().map(|c| c.ncols()).sum();
    if total == 0 {
        return Ok(MatrixElement::zeros(m));
    }
    let mut stacked = DMatrix::zeros(m, total);
    let mut offset = 0;
    for c in &columns {
        stacked.columns_mut(offset, c.ncols()).copy_from(c);
        offset += c.ncols();
    }
    let svd = SVD::try_new(stacked, true, false, EIGEN_EPS, EIGEN_MAX_ITER)
        .ok_or(Error::EigenFailure(m))?;
    let u = svd.u.expect("left singular vectors requested");
    let mut p = DMatrix::zeros(m, m);
    for (k, &s) in svd.singular_values.iter().enumerate() {
        if s > RANK_THRESHOLD {
            let v = u.column(k);
            p += &v * v.adjoint();
        }
    }
    Ok(MatrixElement::from_matrix(p))
}

pub fn lattice_join(e: &MatrixElement, f: &MatrixElement) -> Result<MatrixElement> {
    lattice_join_all(&[e, f])
}

/// Projection onto the intersection of ranges, via `e ∧ f = 1 − (e^⊥ ∨ f^⊥)`.
pub fn lattice_meet_all(projections: &[&MatrixElement]) -> Result<MatrixElement> {
    let m = match projections.first() {
        Some(e) => e.dim(),
        None => return Err(Error::InvalidParameter("empty meet".into())),
    };
    let one = MatrixElement::identity(m);
    let complements: Vec<MatrixElement> = projections.iter().map(|e| &one - e).collect();
    let refs: Vec<&MatrixElement> = complements.iter().collect();
    Ok(&one - &lattice_join_all(&refs)?)
}

pub fn lattice_meet(e: &MatrixElement, f: &MatrixElement) -> Result<MatrixElement> {
    lattice_meet_all(&[e, f])
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn c(re: f64, im: f64) -> Complex64 {
        Complex64::new(re, im)
    }

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    #[test]
    fn trace_examples() {
        assert_abs_diff_eq!(MatrixElement::identity(2).real_trace(), 2.0);
        assert_abs_diff_eq!(MatrixElement::from_real_diagonal(&[1.0, 3.0]).real_trace(), 4.0);
    }

    #[test]
    fn trace_is_tracial() {
        let mut r = rng(1);
        for m in [1, 2, 4, 8] {
            let a = random_general(m, &mut r);
            let b = random_general(m, &mut r);
            assert!(((&a * &b).trace() - (&b * &a).trace()).norm() <= 1e-12);
        }
    }

    #[test]
    fn abs_of_diagonal() {
        let a = MatrixElement::from_real_diagonal(&[-2.0, 3.0]);
        let abs = abs_op(&a).unwrap();
        assert!(abs.max_entry_distance(&MatrixElement::from_real_diagonal(&[2.0, 3.0])) < 1e-12);
    }

    #[test]
    fn abs_of_positive_is_identity_map() {
        let a = MatrixElement::random_positive(4, &mut rng(2));
        assert!(abs_op(&a).unwrap().max_entry_distance(&a) < 1e-10);
    }

    #[test]
    fn abs_squares_back() {
        let mut r = rng(3);
        for m in [1, 2, 4, 8] {
            let a = random_general(m, &mut r);
            let abs = abs_op(&a).unwrap();
            assert!((&abs * &abs).max_entry_distance(&a.gram()) < 1e-10);
        }
    }

    #[test]
    fn spectral_projection_examples() {
        let a = MatrixElement::from_real_diagonal(&[1.0, 5.0]);
        let p = spectral_projection(&a, Interval::above(3.0)).unwrap();
        assert!(p.max_entry_distance(&MatrixElement::from_real_diagonal(&[0.0, 1.0])) < 1e-12);
        let z = MatrixElement::zeros(3);
        let p = spectral_projection(&z, Interval::closed(0.0, 2.0)).unwrap();
        assert!(p.max_entry_distance(&MatrixElement::identity(3)) < 1e-12);
    }

    #[test]
    fn endpoint_snapping() {
        let a = MatrixElement::from_real_diagonal(&[2.0 + 5e-11, 2.0 - 5e-11]);
        let closed = spectral_projection(&a, Interval::closed(0.0, 2.0)).unwrap();
        assert_abs_diff_eq!(closed.real_trace(), 2.0, epsilon = 1e-12);
        let open = spectral_projection(&a, Interval::above(2.0)).unwrap();
        assert_abs_diff_eq!(open.real_trace(), 0.0, epsilon = 1e-12);
    }

    #[test]
    fn spectral_projection_rejects_non_hermitian() {
        let a = MatrixElement::from_row_major(2, &[c(0.0, 0.0), c(1.0, 0.0), c(0.0, 0.0), c(0.0, 0.0)])
            .unwrap();
        assert!(matches!(
            spectral_projection(&a, Interval::above(0.0)),
            Err(Error::NotHermitian { .. })
        ));
    }

    #[test]
    fn schatten_examples() {
        assert_abs_diff_eq!(
            schatten_norm(&MatrixElement::identity(2), 2.0).unwrap(),
            2f64.sqrt(),
            epsilon = 1e-14
        );
        let a = MatrixElement::from_real_diagonal(&[3.0, -4.0]);
        assert_abs_diff_eq!(schatten_norm(&a, f64::INFINITY).unwrap(), 4.0, epsilon = 1e-14);
        assert!(matches!(schatten_norm(&a, 0.5), Err(Error::InvalidExponent(_))));
    }

    #[test]
    fn schatten_two_matches_trace() {
        let mut r = rng(4);
        for m in [1, 2, 4, 8] {
            let a = random_general(m, &mut r);
            let n2 = schatten_norm(&a, 2.0).unwrap();
            assert!((n2 * n2 - a.gram().real_trace()).abs() < 1e-12 * (1.0 + n2 * n2));
        }
    }

    fn random_projection(m: usize, rank: usize, rng: &mut ChaCha8Rng) -> MatrixElement {
        if rank == 0 {
            return MatrixElement::zeros(m);
        }
        let h = MatrixElement::random_hermitian(m, rng);
        let eig = h.eigh().unwrap();
        let cut = eig.values[m - rank.min(m)] - 1e-9;
        eig.projection_where(|x| x >= cut)
    }

    #[test]
    fn meet_examples() {
        let mut r = rng(5);
        let e = random_projection(4, 2, &mut r);
        assert!(lattice_meet(&e, &e).unwrap().max_entry_distance(&e) < 1e-10);
        let perp = &MatrixElement::identity(4) - &e;
        assert!(lattice_meet(&e, &perp).unwrap().is_zero(1e-10));
        let d1 = MatrixElement::from_real_diagonal(&[1.0, 1.0, 0.0, 0.0]);
        let d2 = MatrixElement::from_real_diagonal(&[0.0, 1.0, 1.0, 0.0]);
        let meet = lattice_meet(&d1, &d2).unwrap();
        assert!(meet.max_entry_distance(&(&d1 * &d2)) < 1e-10);
        let join = lattice_join(&d1, &d2).unwrap();
        assert!(join.max_entry_distance(&MatrixElement::from_real_diagonal(&[1.0, 1.0, 1.0, 0.0])) < 1e-10);
    }

    #[test]
    fn meet_of_generic_lines_is_zero_and_join_is_plane() {
        let mut r = rng(6);
        let e = random_projection(2, 1, &mut r);
        let f = random_projection(2, 1, &mut r);
        assert!(lattice_meet(&e, &f).unwrap().is_zero(1e-10));
        assert!(lattice_join(&e, &f).unwrap().max_entry_distance(&MatrixElement::identity(2)) < 1e-10);
    }

    #[test]
    fn join_rejects_non_projection() {
        let a = MatrixElement::from_real_diagonal(&[0.5, 1.0]);
        assert!(matches!(
            lattice_join(&a, &a),
            Err(Error::NotProjection { .. })
        ));
    }

    #[test]
    fn spectral_decomposition_reconstructs() {
        let mut r = rng(7);
        let a = MatrixElement::random_hermitian(8, &mut r);
        let sd = SpectralDecomposition::of(&a).unwrap();
        let sum = sd
            .eigenprojections
            .iter()
            .fold(MatrixElement::zeros(8), |acc, p| &acc + p);
        assert!(sum.max_entry_distance(&MatrixElement::identity(8)) < 1e-10);
        assert!(sd.reconstruct().max_entry_distance(&a) < 1e-10);
        let repeated = MatrixElement::from_real_diagonal(&[1.0, 1.0, 2.0]);
        assert_eq!(SpectralDecomposition::of(&repeated).unwrap().eigenvalues.len(), 2);
    }

    #[test]
    fn inverse_square_difference_bound() {
        // a^{-1}(a^2 - b^2) against 2(a - b) with b = (a^2 - c*c)^{1/2}
        let mut r = rng(8);
        for trial in 0..200 {
            let m = [1, 2, 4][trial % 3];
            let a = &MatrixElement::random_positive(m, &mut r) + &MatrixElement::scalar(m, 0.2);
            let a2 = &a * &a;
            let floor = a2.min_eigenvalue().unwrap();
            let raw = random_general(m, &mut r);
            let scale = (0.9 * floor).sqrt() / raw.op_norm().unwrap();
            let cm = raw.scale(scale);
            let b = (&a2 - &cm.gram()).sqrt_psd().unwrap();
            let omega: f64 = r.gen_range(0.1..10.0);
            let lhs = omega * (&a.inverse_pd().unwrap() * &(&a2 - &(&b * &b))).real_trace();
            let rhs = 2.0 * omega * (&a - &b).real_trace();
            assert!(lhs <= rhs + 1e-8, "lhs {lhs} rhs {rhs}");
        }
    }

    fn hermitian_strategy() -> impl Strategy<Value = MatrixElement> {
        (prop::sample::select(vec![1usize, 2, 4]), any::<u64>())
            .prop_map(|(m, seed)| MatrixElement::random_hermitian(m, &mut rng(seed)))
    }

    proptest! {
        #[test]
        fn disjoint_projections_cover(a in hermitian_strategy(), t1 in -2.0f64..0.0, t2 in 0.0f64..2.0) {
            let m = a.dim();
            let p1 = spectral_projection(&a, Interval::at_most(t1)).unwrap();
            let p2 = spectral_projection(&a, Interval::open_closed(t1, t2)).unwrap();
            let p3 = spectral_projection(&a, Interval::above(t2)).unwrap();
            let sum = &(&p1 + &p2) + &p3;
            prop_assert!(sum.max_entry_distance(&MatrixElement::identity(m)) < 1e-10);
            prop_assert!((&p1 * &p2).is_zero(1e-10));
            prop_assert!((&p2 * &p3).is_zero(1e-10));
            prop_assert!(p2.commutator(&a).is_zero(1e-10));
        }

        #[test]
        fn abs_is_positively_homogeneous(seed in any::<u64>(), t in 0.01f64..100.0) {
            let a = random_general(4, &mut rng(seed));
            let lhs = abs_op(&a.scale(t)).unwrap();
            let rhs = abs_op(&a).unwrap().scale(t);
            prop_assert!(lhs.max_entry_distance(&rhs) <= 1e-10 * (1.0 + t));
        }

        #[test]
        fn schatten_triangle(seed in any::<u64>(), p in 1.0f64..6.0) {
            let mut r = rng(seed);
            let a = random_general(4, &mut r);
            let b = random_general(4, &mut r);
            let lhs = schatten_norm(&(&a + &b), p).unwrap();
            prop_assert!(lhs <= schatten_norm(&a, p).unwrap() + schatten_norm(&b, p).unwrap() + 1e-12);
        }

        #[test]
        fn meet_is_below_both(seed in any::<u64>(), r1 in 0usize..5, r2 in 0usize..5) {
            let mut r = rng(seed);
            let e = random_projection(4, r1, &mut r);
            let f = random_projection(4, r2, &mut r);
            let meet = lattice_meet(&e, &f).unwrap();
            let join = lattice_join(&e, &f).unwrap();
            prop_assert!(meet.is_projection());
            prop_assert!(join.is_projection());
            prop_assert!((&e * &meet).max_entry_distance(&meet) < 1e-9);
            prop_assert!((&join * &e).max_entry_distance(&e) < 1e-9);
            prop_assert!((&join * &f).max_entry_distance(&f) < 1e-9);
        }
    }
}

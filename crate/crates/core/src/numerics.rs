//! Dense complex-matrix kernel.
//!
//! Everything above this module manipulates operators through [`CMatrix`]. The
//! decompositions are backed by `nalgebra`; what this module adds is the
//! accuracy contract (tolerances, clamping, support thresholds) and the
//! deterministic basis-completion rule used when building unitary dilations.

use std::fmt;
use std::ops::{Add, Mul, Neg, Sub};

use nalgebra::{DMatrix, SymmetricEigen};
use num_complex::Complex64;

use crate::error::{Error, Result};

pub type C64 = Complex64;

/// Numerical tolerances shared by every module and by the tests.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Tolerances {
    /// Orthonormality of eigenvector sets (sup-norm of `V†V - I`).
    pub orth: f64,
    /// Relative tolerance for negative eigenvalues of PSD operators.
    pub psd: f64,
    /// Trace-preservation / completeness residual.
    pub tp: f64,
    /// Relative cutoff below which an eigenvalue counts as zero for ranks.
    pub rank: f64,
    /// Hermiticity check applied by `eig_hermitian`.
    pub hermitian: f64,
    /// Gram-Schmidt skip threshold for basis completion.
    pub completion: f64,
}

pub const TOL: Tolerances = Tolerances {
    orth: 1e-10,
    psd: 1e-9,
    tp: 1e-9,
    rank: 1e-10,
    hermitian: 1e-9,
    completion: 1e-12,
};

const EIG_EPS: f64 = 1e-15;
const MAX_SWEEPS: usize = 10_000;
const JACOBI_EPS: f64 = 1e-15;
const JACOBI_SWEEPS: usize = 100;

#[inline]
pub fn c(re: f64, im: f64) -> C64 {
    C64::new(re, im)
}

#[inline]
pub fn cr(re: f64) -> C64 {
    C64::new(re, 0.0)
}

/// Dense complex matrix.
#[derive(Clone, PartialEq)]
pub struct CMatrix(DMatrix<C64>);

impl fmt::Debug for CMatrix {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "CMatrix {}x{} ", self.rows(), self.cols())?;
        f.debug_list()
            .entries((0..self.rows()).map(|r| (0..self.cols()).map(|c| self.0[(r, c)]).collect::<Vec<_>>()))
            .finish()
    }
}

impl CMatrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self(DMatrix::zeros(rows, cols))
    }

    pub fn identity(d: usize) -> Self {
        Self(DMatrix::identity(d, d))
    }

    /// Builds a matrix from row-major entries, rejecting NaN/Inf.
    pub fn from_row_major(rows: usize, cols: usize, entries: &[C64]) -> Result<Self> {
        if entries.len() != rows * cols {
            return Err(Error::DimensionMismatch {
                expected: rows * cols,
                found: entries.len(),
            });
        }
        if entries.iter().any(|z| !z.re.is_finite() || !z.im.is_finite()) {
            return Err(Error::NonFinite);
        }
        Ok(Self(DMatrix::from_row_slice(rows, cols, entries)))
    }

    pub fn from_fn(rows: usize, cols: usize, f: impl FnMut(usize, usize) -> C64) -> Self {
        Self(DMatrix::from_fn(rows, cols, f))
    }

    pub fn from_real_diagonal(diag: &[f64]) -> Self {
        let n = diag.len();
        Self::from_fn(n, n, |r, c| if r == c { cr(diag[r]) } else { C64::default() })
    }

    /// `|ket><bra|` for computational basis states of dimension `d`.
    pub fn basis_op(d: usize, ket: usize, bra: usize) -> Self {
        let mut m = Self::zeros(d, d);
        m.0[(ket, bra)] = cr(1.0);
        m
    }

    /// Outer product `|u><v|` of two column vectors stored as slices.
    pub fn outer(u: &[C64], v: &[C64]) -> Self {
        Self::from_fn(u.len(), v.len(), |r, c| u[r] * v[c].conj())
    }

    pub fn from_nalgebra(m: DMatrix<C64>) -> Self {
        Self(m)
    }

    pub fn as_nalgebra(&self) -> &DMatrix<C64> {
        &self.0
    }

    pub fn into_nalgebra(self) -> DMatrix<C64> {
        self.0
    }

    pub fn rows(&self) -> usize {
        self.0.nrows()
    }

    pub fn cols(&self) -> usize {
        self.0.ncols()
    }

    pub fn is_square(&self) -> bool {
        self.rows() == self.cols()
    }

    /// Dimension of a square matrix.
    pub fn dim(&self) -> usize {
        self.rows()
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> C64 {
        self.0[(r, c)]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: C64) {
        self.0[(r, c)] = v;
    }

    pub fn row_major(&self) -> Vec<C64> {
        let mut out = Vec::with_capacity(self.rows() * self.cols());
        for r in 0..self.rows() {
            for c in 0..self.cols() {
                out.push(self.0[(r, c)]);
            }
        }
        out
    }

    pub fn column(&self, c: usize) -> Vec<C64> {
        self.0.column(c).iter().copied().collect()
    }

    pub fn adjoint(&self) -> Self {
        Self(self.0.adjoint())
    }

    pub fn transpose(&self) -> Self {
        Self(self.0.transpose())
    }

    pub fn conj(&self) -> Self {
        Self(self.0.map(|z| z.conj()))
    }

    pub fn scale(&self, s: f64) -> Self {
        Self(self.0.map(|z| z * s))
    }

    pub fn scale_c(&self, s: C64) -> Self {
        Self(&self.0 * s)
    }

    pub fn kron(&self, other: &Self) -> Self {
        Self(self.0.kronecker(&other.0))
    }

    pub fn trace(&self) -> C64 {
        self.0.trace()
    }

    /// `Tr[self * other]` without forming the product.
    pub fn trace_product(&self, other: &Self) -> C64 {
        let n = self.rows();
        let mut acc = C64::default();
        for i in 0..n {
            for k in 0..self.cols() {
                acc += self.0[(i, k)] * other.0[(k, i)];
            }
        }
        acc
    }

    /// `self * rho * self†`.
    pub fn sandwich(&self, rho: &Self) -> Self {
        Self(&self.0 * &rho.0 * self.0.adjoint())
    }

    /// Hermitian part `(A + A†)/2`.
    pub fn hermitian_part(&self) -> Self {
        Self((&self.0 + self.0.adjoint()) * cr(0.5))
    }

    /// Sup-norm of `A - A†`.
    pub fn hermitian_residual(&self) -> f64 {
        if !self.is_square() {
            return f64::INFINITY;
        }
        (self - &self.adjoint()).sup_norm()
    }

    pub fn sup_norm(&self) -> f64 {
        self.0.iter().map(|z| z.norm()).fold(0.0, f64::max)
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.0.iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt()
    }

    /// Sup-norm distance to the identity.
    pub fn identity_residual(&self) -> f64 {
        (self - &Self::identity(self.rows())).sup_norm()
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|z| z.re.is_finite() && z.im.is_finite())
    }

    /// Stacks matrices with equal column counts on top of each other.
    pub fn vstack(blocks: &[&CMatrix]) -> Self {
        let cols = blocks.first().map_or(0, |b| b.cols());
        let rows: usize = blocks.iter().map(|b| b.rows()).sum();
        let mut out = Self::zeros(rows, cols);
        let mut offset = 0;
        for b in blocks {
            out.0.view_mut((offset, 0), (b.rows(), cols)).copy_from(&b.0);
            offset += b.rows();
        }
        out
    }

    /// Copies the `rows x cols` block starting at `(r0, c0)`.
    pub fn block(&self, r0: usize, c0: usize, rows: usize, cols: usize) -> Self {
        Self(self.0.view((r0, c0), (rows, cols)).into_owned())
    }

    /// Inverse via LU; `None` if singular.
    pub fn try_inverse(&self) -> Option<Self> {
        self.0.clone().try_inverse().map(Self)
    }
}

macro_rules! binop {
    ($tr:ident, $m:ident, $op:tt) => {
        impl $tr<&CMatrix> for &CMatrix {
            type Output = CMatrix;
            fn $m(self, rhs: &CMatrix) -> CMatrix {
                CMatrix(&self.0 $op &rhs.0)
            }
        }
        impl $tr<CMatrix> for CMatrix {
            type Output = CMatrix;
            fn $m(self, rhs: CMatrix) -> CMatrix {
                CMatrix(self.0 $op rhs.0)
            }
        }
        impl $tr<&CMatrix> for CMatrix {
            type Output = CMatrix;
            fn $m(self, rhs: &CMatrix) -> CMatrix {
                CMatrix(self.0 $op &rhs.0)
            }
        }
    };
}

binop!(Add, add, +);
binop!(Sub, sub, -);
binop!(Mul, mul, *);

impl Neg for CMatrix {
    type Output = CMatrix;
    fn neg(self) -> CMatrix {
        CMatrix(-self.0)
    }
}

/// Eigen-decomposition of a Hermitian matrix, eigenvalues in descending order.
#[derive(Debug, Clone)]
pub struct EigenSystem {
    pub values: Vec<f64>,
    pub vectors: CMatrix,
}

impl EigenSystem {
    pub fn vector(&self, k: usize) -> Vec<C64> {
        self.vectors.column(k)
    }

    pub fn op_norm(&self) -> f64 {
        self.values.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    /// `V f(D) V†`.
    pub fn reconstruct_with(&self, f: impl Fn(f64) -> f64) -> CMatrix {
        let n = self.values.len();
        let v = self.vectors.as_nalgebra();
        let mut scaled = v.clone();
        for (k, &lam) in self.values.iter().enumerate() {
            let s = f(lam);
            for r in 0..n {
                scaled[(r, k)] *= s;
            }
        }
        CMatrix(scaled * v.adjoint())
    }
}

fn require_square(a: &CMatrix) -> Result<()> {
    if a.is_square() {
        Ok(())
    } else {
        Err(Error::NonSquare {
            rows: a.rows(),
            cols: a.cols(),
        })
    }
}

/// Hermitian eigensolver. The input is symmetrized before decomposition.
pub fn eig_hermitian(a: &CMatrix) -> Result<EigenSystem> {
    require_square(a)?;
    let n = a.rows();
    if n == 0 {
        return Ok(EigenSystem {
            values: vec![],
            vectors: CMatrix::zeros(0, 0),
        });
    }
    let residual = a.hermitian_residual();
    let h = a.hermitian_part();
    let eig = SymmetricEigen::try_new(h.0, EIG_EPS, MAX_SWEEPS).ok_or(Error::ConvergenceFailure)?;
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| eig.eigenvalues[j].total_cmp(&eig.eigenvalues[i]));
    let values: Vec<f64> = order.iter().map(|&i| eig.eigenvalues[i]).collect();
    let vectors = DMatrix::from_fn(n, n, |r, c| eig.eigenvectors[(r, order[c])]);
    let sys = EigenSystem {
        values,
        vectors: CMatrix(vectors),
    };
    let scale = sys.op_norm().max(f64::MIN_POSITIVE);
    if residual > TOL.hermitian * scale && residual > TOL.hermitian * f64::EPSILON {
        return Err(Error::NotHermitian { residual });
    }
    Ok(sys)
}

/// Principal square root of a PSD matrix. Eigenvalues that are negative but
/// within `TOL.psd * max(1, ||A||)` are clamped to zero.
pub fn psd_sqrt(a: &CMatrix) -> Result<CMatrix> {
    let sys = eig_hermitian(a)?;
    let bound = -TOL.psd * sys.op_norm().max(1.0);
    if let Some(&min) = sys.values.last() {
        if min < bound {
            return Err(Error::NotPsd { min_eigenvalue: min });
        }
    }
    Ok(sys.reconstruct_with(|l| l.max(0.0).sqrt()))
}

/// Square root, support-restricted inverse square root and support projector
/// of the Gram operator `G = Σ_b B_b† B_b` of a stack of blocks.
///
/// Working from the SVD of the stacked blocks keeps the square roots accurate
/// near the kernel of `G`, where a square root of computed eigenvalues of `G`
/// would lose half the digits.
#[derive(Debug, Clone)]
pub struct GramRoots {
    pub sqrt: CMatrix,
    pub pinv_sqrt: CMatrix,
    pub support: CMatrix,
    pub rank: usize,
}

pub fn gram_roots(blocks: &[&CMatrix]) -> Result<GramRoots> {
    let d = blocks.first().map(|b| b.cols()).unwrap_or(0);
    let stacked = CMatrix::vstack(blocks);
    let svd = svd(&stacked)?;
    let smax = svd.sigma.first().copied().unwrap_or(0.0);
    // eigenvalue cutoff on G = sigma^2
    let cutoff_sq = TOL.rank * smax * smax;
    let mut sqrt = CMatrix::zeros(d, d);
    let mut pinv = CMatrix::zeros(d, d);
    let mut support = CMatrix::zeros(d, d);
    let mut rank = 0;
    for (k, &s) in svd.sigma.iter().enumerate() {
        let w = svd.v.column(k);
        let proj = CMatrix::outer(&w, &w);
        sqrt = sqrt + proj.scale(s);
        if s * s > cutoff_sq && s > 0.0 {
            pinv = pinv + proj.scale(1.0 / s);
            support = support + proj;
            rank += 1;
        }
    }
    Ok(GramRoots {
        sqrt,
        pinv_sqrt: pinv,
        support,
        rank,
    })
}

/// Thin singular value decomposition `A = U Σ V†` of an `m x n` matrix with
/// `m >= n`; singular values descending.
#[derive(Debug, Clone)]
pub struct Svd {
    pub u: CMatrix,
    pub sigma: Vec<f64>,
    pub v: CMatrix,
}

/// One-sided (Hestenes) Jacobi SVD. Columns of `A` are rotated pairwise
/// until mutually orthogonal; the rotations accumulate into `V`. Backward
/// error stays at `O(ε‖A‖)` even for nearly rank-deficient inputs.
pub fn svd(a: &CMatrix) -> Result<Svd> {
    let m = a.rows();
    let n = a.cols();
    if m < n {
        return Err(Error::DimensionMismatch { expected: n, found: m });
    }
    let mut work = a.0.clone();
    let mut v = DMatrix::<C64>::identity(n, n);
    let mut converged = n < 2;
    for _ in 0..JACOBI_SWEEPS {
        let mut rotated = false;
        for p in 0..n {
            for q in (p + 1)..n {
                let alpha = work.column(p).norm_squared();
                let beta = work.column(q).norm_squared();
                let gamma = work.column(p).dotc(&work.column(q));
                let g = gamma.norm();
                if g == 0.0 || g <= JACOBI_EPS * (alpha * beta).sqrt() {
                    continue;
                }
                rotated = true;
                let phase = gamma / g;
                let zeta = (beta - alpha) / (2.0 * g);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let cs = 1.0 / (1.0 + t * t).sqrt();
                let sn = cs * t;
                for r in 0..m {
                    let xp = work[(r, p)];
                    let xq = work[(r, q)] * phase.conj();
                    work[(r, p)] = xp * cs - xq * sn;
                    work[(r, q)] = xp * sn + xq * cs;
                }
                for r in 0..n {
                    let xp = v[(r, p)];
                    let xq = v[(r, q)] * phase.conj();
                    v[(r, p)] = xp * cs - xq * sn;
                    v[(r, q)] = xp * sn + xq * cs;
                }
            }
        }
        if !rotated {
            converged = true;
            break;
        }
    }
    if !converged {
        return Err(Error::ConvergenceFailure);
    }
    let norms: Vec<f64> = (0..n).map(|k| work.column(k).norm()).collect();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| norms[j].total_cmp(&norms[i]));
    let sigma: Vec<f64> = order.iter().map(|&k| norms[k]).collect();
    let u = DMatrix::from_fn(m, n, |r, c| {
        let k = order[c];
        if norms[k] > 0.0 {
            work[(r, k)] / norms[k]
        } else {
            C64::default()
        }
    });
    let v = DMatrix::from_fn(n, n, |r, c| v[(r, order[c])]);
    Ok(Svd {
        u: CMatrix(u),
        sigma,
        v: CMatrix(v),
    })
}

/// Polar decomposition `K = V P` with `P = sqrt(K†K)`.
///
/// `V` is fixed on the support of `P`. On the kernel it maps a Gram-Schmidt
/// completion of the right singular vectors onto a Gram-Schmidt completion of
/// the left singular vectors, so the result does not depend on the arbitrary
/// kernel basis returned by the SVD.
pub fn polar(k: &CMatrix) -> Result<(CMatrix, CMatrix)> {
    require_square(k)?;
    let d = k.rows();
    let svd = svd(k)?;
    let smax = svd.sigma.first().copied().unwrap_or(0.0);
    let cutoff = TOL.completion * smax.max(1.0);

    let mut p = CMatrix::zeros(d, d);
    let mut left: Vec<Vec<C64>> = Vec::new();
    let mut right: Vec<Vec<C64>> = Vec::new();
    for (idx, &s) in svd.sigma.iter().enumerate() {
        let w = svd.v.column(idx);
        p = p + CMatrix::outer(&w, &w).scale(s);
        if s > cutoff {
            left.push(svd.u.column(idx));
            right.push(w);
        }
    }
    // support pairs come first; completion pairs follow in index order
    let left = extend_orthonormal(left, d);
    let right = extend_orthonormal(right, d);
    let mut v = DMatrix::<C64>::zeros(d, d);
    for (l, r) in left.iter().zip(&right) {
        for a in 0..d {
            for b in 0..d {
                v[(a, b)] += l[a] * r[b].conj();
            }
        }
    }
    Ok((CMatrix(v), p))
}

fn dot(a: &[C64], b: &[C64]) -> C64 {
    a.iter().zip(b).map(|(x, y)| x.conj() * y).sum()
}

fn norm(a: &[C64]) -> f64 {
    a.iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt()
}

/// Extends an orthonormal set to a basis of `C^n` by Gram-Schmidt over the
/// standard basis vectors in index order, skipping candidates whose residual
/// after projection is below `TOL.completion`.
fn extend_orthonormal(mut basis: Vec<Vec<C64>>, n: usize) -> Vec<Vec<C64>> {
    let mut e = 0;
    while basis.len() < n && e < n {
        let mut cand = vec![C64::default(); n];
        cand[e] = cr(1.0);
        e += 1;
        // two passes of classical Gram-Schmidt
        for _ in 0..2 {
            for q in &basis {
                let proj = dot(q, &cand);
                for (x, y) in cand.iter_mut().zip(q) {
                    *x -= proj * y;
                }
            }
        }
        let nrm = norm(&cand);
        if nrm < TOL.completion {
            continue;
        }
        for x in &mut cand {
            *x /= nrm;
        }
        // renormalize after a final sweep for tiny residuals
        if nrm < 1e-4 {
            for q in &basis {
                let proj = dot(q, &cand);
                for (x, y) in cand.iter_mut().zip(q) {
                    *x -= proj * y;
                }
            }
            let n2 = norm(&cand);
            for x in &mut cand {
                *x /= n2;
            }
        }
        basis.push(cand);
    }
    basis
}

/// Completes a `(2d) x d` isometry to a `(2d) x (2d)` unitary whose first `d`
/// columns are exactly `B`. The complement is built deterministically (see
/// [`extend_orthonormal`]).
pub fn complete_isometry(b: &CMatrix) -> Result<CMatrix> {
    let rows = b.rows();
    let cols = b.cols();
    if rows < cols {
        return Err(Error::DimensionMismatch {
            expected: cols,
            found: rows,
        });
    }
    let gram = b.adjoint() * b;
    let residual = gram.identity_residual();
    if residual > TOL.hermitian {
        return Err(Error::NotIsometry { residual });
    }
    let given: Vec<Vec<C64>> = (0..cols).map(|c| b.column(c)).collect();
    let full = extend_orthonormal(given, rows);
    if full.len() != rows {
        return Err(Error::ConvergenceFailure);
    }
    let mut u = CMatrix::zeros(rows, rows);
    for (c, col) in full.iter().enumerate() {
        for (r, z) in col.iter().enumerate() {
            u.set(r, c, *z);
        }
    }
    // first columns copied verbatim
    for c in 0..cols {
        for r in 0..rows {
            u.set(r, c, b.get(r, c));
        }
    }
    Ok(u)
}

/// Column-stacking vectorization: `vec(M)[c*d + r] = M[r, c]`, so that
/// `vec(|a><b|) = |b> ⊗ |a>`.
pub fn vec(m: &CMatrix) -> Vec<C64> {
    // nalgebra storage is column-major already
    m.0.as_slice().to_vec()
}

pub fn unvec(v: &[C64]) -> Result<CMatrix> {
    let d = (v.len() as f64).sqrt().round() as usize;
    if d * d != v.len() {
        return Err(Error::DimensionMismatch {
            expected: d * d,
            found: v.len(),
        });
    }
    Ok(CMatrix(DMatrix::from_column_slice(d, d, v)))
}

/// Largest absolute eigenvalue of a Hermitian matrix.
pub fn op_norm(a: &CMatrix) -> Result<f64> {
    Ok(eig_hermitian(a)?.op_norm())
}

/// Sum of absolute eigenvalues of a Hermitian matrix.
pub fn trace_norm(a: &CMatrix) -> Result<f64> {
    Ok(eig_hermitian(a)?.values.iter().map(|v| v.abs()).sum())
}

pub fn sup_norm(a: &CMatrix) -> f64 {
    a.sup_norm()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_matrix(rng: &mut impl Rng, r: usize, c: usize) -> CMatrix {
        CMatrix::from_fn(r, c, |_, _| {
            C64::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0))
        })
    }

    fn swap() -> CMatrix {
        let mut s = CMatrix::zeros(4, 4);
        for a in 0..2 {
            for b in 0..2 {
                s.set(a * 2 + b, b * 2 + a, cr(1.0));
            }
        }
        s
    }

    #[test]
    fn eig_identity_and_diagonal() {
        let e = eig_hermitian(&CMatrix::identity(2)).unwrap();
        assert_eq!(e.values, vec![1.0, 1.0]);
        let e = eig_hermitian(&CMatrix::from_real_diagonal(&[-2.0, 3.0])).unwrap();
        assert!((e.values[0] - 3.0).abs() < 1e-14 && (e.values[1] + 2.0).abs() < 1e-14);
        // eigenvector of 3 is e_2 (up to phase)
        assert!((e.vector(0)[1].norm() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn eig_swap() {
        let e = eig_hermitian(&swap()).unwrap();
        let expected = [1.0, 1.0, 1.0, -1.0];
        for (v, x) in e.values.iter().zip(expected) {
            assert!((v - x).abs() < 1e-12);
        }
        assert!((trace_norm(&swap()).unwrap() - 4.0).abs() < 1e-12);
    }

    #[test]
    fn eig_rejects_non_hermitian_and_non_square() {
        let mut a = CMatrix::identity(2);
        a.set(0, 1, cr(0.5));
        assert!(matches!(eig_hermitian(&a), Err(Error::NotHermitian { .. })));
        assert!(matches!(
            eig_hermitian(&CMatrix::zeros(2, 3)),
            Err(Error::NonSquare { .. })
        ));
    }

    #[test]
    fn random_hermitian_reconstruction() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for d in 1..=16 {
            let m = random_matrix(&mut rng, d, d);
            let a = m.hermitian_part();
            let e = eig_hermitian(&a).unwrap();
            let recon = e.reconstruct_with(|l| l);
            let scale = e.op_norm();
            assert!((&recon - &a).sup_norm() <= 1e-9 * scale);
            let vv = e.vectors.adjoint() * &e.vectors;
            assert!(vv.identity_residual() <= TOL.orth);
            assert!(e.values.windows(2).all(|w| w[0] >= w[1]));
        }
    }

    #[test]
    fn psd_sqrt_cases() {
        assert!(psd_sqrt(&CMatrix::identity(2)).unwrap().identity_residual() < 1e-14);
        let b = psd_sqrt(&CMatrix::from_real_diagonal(&[4.0, 0.0])).unwrap();
        assert!((&b - &CMatrix::from_real_diagonal(&[2.0, 0.0])).sup_norm() < 1e-14);
        assert!(matches!(
            psd_sqrt(&CMatrix::from_real_diagonal(&[1.0, -0.1])),
            Err(Error::NotPsd { .. })
        ));
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for d in [2, 3, 5, 8] {
            let m = random_matrix(&mut rng, d, d);
            let a = m.adjoint() * &m;
            let b = psd_sqrt(&a).unwrap();
            assert!((&(&b * &b) - &a).sup_norm() < 1e-8);
            // psd_sqrt(B^2) = B
            let bb = psd_sqrt(&(&b * &b)).unwrap();
            assert!((&bb - &b).sup_norm() < 1e-8);
        }
    }

    #[test]
    fn polar_cases() {
        let h = CMatrix::from_fn(2, 2, |r, c| cr(if r == 1 && c == 1 { -1.0 } else { 1.0 } / 2f64.sqrt()));
        let (v, p) = polar(&h).unwrap();
        assert!((&v - &h).sup_norm() < 1e-12);
        assert!(p.identity_residual() < 1e-12);

        let k = CMatrix::basis_op(2, 0, 1).scale(0.8f64.sqrt());
        let (v, p) = polar(&k).unwrap();
        assert!((&p - &CMatrix::from_real_diagonal(&[0.0, 0.8f64.sqrt()])).sup_norm() < 1e-12);
        assert!((v.get(0, 1).norm() - 1.0).abs() < 1e-12);
        assert!((&(&v * &p) - &k).sup_norm() < 1e-12);
        assert!((v.adjoint() * &v).identity_residual() < 1e-12);

        let (v, p) = polar(&CMatrix::from_real_diagonal(&[2.0, 0.0])).unwrap();
        assert!((&p - &CMatrix::from_real_diagonal(&[2.0, 0.0])).sup_norm() < 1e-12);
        assert!((v.get(0, 0) - cr(1.0)).norm() < 1e-12);
        assert!((v.adjoint() * &v).identity_residual() < 1e-12);
    }

    #[test]
    fn polar_random_reconstructs() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for d in 1..8 {
            let k = random_matrix(&mut rng, d, d);
            let (v, p) = polar(&k).unwrap();
            assert!((&(&v * &p) - &k).sup_norm() < 1e-12);
            assert!((v.adjoint() * &v).identity_residual() < 1e-12);
            let p_ref = psd_sqrt(&(k.adjoint() * &k)).unwrap();
            assert!((&p - &p_ref).sup_norm() < 1e-8);
        }
    }

    #[test]
    fn svd_near_singular_psd() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for d in 2..8 {
            let m = random_matrix(&mut rng, d, d);
            let (q, _) = nalgebra::linalg::QR::new(m.into_nalgebra()).unpack();
            let q = CMatrix(q);
            let mut diag: Vec<f64> = (0..d).map(|k| 1.0 / (k + 1) as f64).collect();
            diag[d - 1] = 1e-17;
            let a = q.sandwich(&CMatrix::from_real_diagonal(&diag));
            let s = svd(&a).unwrap();
            let us = CMatrix::from_fn(d, d, |r, c| s.u.get(r, c) * s.sigma[c]);
            assert!((&(&us * &s.v.adjoint()) - &a).sup_norm() < 1e-14);
            assert!((s.v.adjoint() * &s.v).identity_residual() < 1e-13);
            assert!(s.sigma.windows(2).all(|w| w[0] >= w[1]));
        }
    }

    #[test]
    fn svd_tall() {
        let mut rng = ChaCha8Rng::seed_from_u64(18);
        let a = random_matrix(&mut rng, 9, 3);
        let s = svd(&a).unwrap();
        let us = CMatrix::from_fn(9, 3, |r, c| s.u.get(r, c) * s.sigma[c]);
        assert!((&(&us * &s.v.adjoint()) - &a).sup_norm() < 1e-13);
        assert!((s.u.adjoint() * &s.u).identity_residual() < 1e-13);
        assert!(svd(&random_matrix(&mut rng, 2, 3)).is_err());
    }

    #[test]
    fn complete_isometry_cases() {
        let b = CMatrix::identity(4).block(0, 0, 4, 2);
        assert!(complete_isometry(&b).unwrap().identity_residual() == 0.0);

        let s = 1.0 / 2f64.sqrt();
        let b = CMatrix::from_row_major(2, 1, &[cr(s), cr(s)]).unwrap();
        let u = complete_isometry(&b).unwrap();
        // Gram-Schmidt on e_0: e_0 - (1/2)(1,1) = (1/2, -1/2) -> (s, -s)
        let expected = CMatrix::from_row_major(2, 2, &[cr(s), cr(s), cr(s), cr(-s)]).unwrap();
        assert!((&u - &expected).sup_norm() < 1e-15);

        let bad = CMatrix::from_row_major(2, 1, &[cr(1.0), cr(1.0)]).unwrap();
        assert!(matches!(complete_isometry(&bad), Err(Error::NotIsometry { .. })));
    }

    #[test]
    fn complete_isometry_random() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for d in 1..=6 {
            let g = random_matrix(&mut rng, 2 * d, 2 * d);
            let q = nalgebra::linalg::QR::new(g.into_nalgebra()).q();
            let b = CMatrix(q).block(0, 0, 2 * d, d);
            let u = complete_isometry(&b).unwrap();
            assert!((u.adjoint() * &u).identity_residual() < 1e-9);
            assert_eq!(u.block(0, 0, 2 * d, d), b);
        }
    }

    #[test]
    fn vec_convention() {
        let v = vec(&CMatrix::identity(2));
        assert_eq!(v.len(), 4);
        assert_eq!(v[0], cr(1.0));
        assert_eq!(v[3], cr(1.0));
        // |0><1| -> |1> ⊗ |0> -> index 1*2 + 0
        let v = vec(&CMatrix::basis_op(2, 0, 1));
        assert_eq!(v[2], cr(1.0));
        assert!(matches!(unvec(&[cr(1.0); 3]), Err(Error::DimensionMismatch { .. })));
    }

    #[test]
    fn norms() {
        assert_eq!(op_norm(&CMatrix::identity(5)).unwrap(), 1.0);
        let dm = CMatrix::from_real_diagonal(&[3.0, -2.0]);
        assert!((trace_norm(&dm).unwrap() - 5.0).abs() < 1e-14);
        assert!((op_norm(&dm).unwrap() - 3.0).abs() < 1e-14);
        assert_eq!(sup_norm(&dm), 3.0);
    }

    proptest::proptest! {
        #[test]
        fn vec_round_trip(d in 1usize..6, seed in 0u64..1000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let m = random_matrix(&mut rng, d, d);
            proptest::prop_assert_eq!(unvec(&vec(&m)).unwrap(), m);
        }
    }
}

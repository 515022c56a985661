//! States, observables, and the three map representations.
//!
//! Conventions (fixed crate-wide):
//! - `vec` stacks columns, `vec(|a><b|) = |b> ⊗ |a>`.
//! - Choi matrix `Λ = Σ_jk |j><k| ⊗ N(|j><k|)`, so `Tr Λ = d` for a TP map and
//!   `Λ = Σ_i α(i) vec(K_i) vec(K_i)†` for a signed Kraus set.
//! - Superoperator `S` acts on `vec(ρ)`; a Kraus term contributes `conj(K) ⊗ K`.

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::numerics::{cr, eig_hermitian, unvec, vec, CMatrix, EigenSystem, C64, TOL};

/// Sign `α(i)` attached to a Kraus operator.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Sign {
    Plus,
    Minus,
}

impl Sign {
    pub fn value(self) -> f64 {
        match self {
            Sign::Plus => 1.0,
            Sign::Minus => -1.0,
        }
    }

    pub fn of(x: f64) -> Self {
        if x < 0.0 {
            Sign::Minus
        } else {
            Sign::Plus
        }
    }

    pub fn flip(self) -> Self {
        match self {
            Sign::Plus => Sign::Minus,
            Sign::Minus => Sign::Plus,
        }
    }
}

impl std::ops::Mul for Sign {
    type Output = Sign;
    fn mul(self, rhs: Sign) -> Sign {
        if self == rhs {
            Sign::Plus
        } else {
            Sign::Minus
        }
    }
}

fn check_dim(expected: usize, found: usize) -> Result<()> {
    if expected == found {
        Ok(())
    } else {
        Err(Error::DimensionMismatch { expected, found })
    }
}

fn check_square_dim(m: &CMatrix, d: usize) -> Result<()> {
    check_dim(d, m.rows())?;
    check_dim(d, m.cols())
}

const STATE_TOL: f64 = 1e-10;

/// A density matrix: Hermitian, unit trace, PSD (all within `1e-10`).
#[derive(Debug, Clone, PartialEq)]
pub struct DensityMatrix {
    mat: CMatrix,
}

impl DensityMatrix {
    pub fn new(mat: CMatrix) -> Result<Self> {
        if !mat.is_square() {
            return Err(Error::NonSquare {
                rows: mat.rows(),
                cols: mat.cols(),
            });
        }
        let residual = mat.hermitian_residual();
        if residual > STATE_TOL {
            return Err(Error::NotHermitian { residual });
        }
        let tr = mat.trace();
        if (tr - cr(1.0)).norm() > STATE_TOL {
            return Err(Error::Invalid(format!("density matrix trace {tr} != 1")));
        }
        let eig = eig_hermitian(&mat)?;
        if let Some(&min) = eig.values.last() {
            if min < -STATE_TOL {
                return Err(Error::NotPsd { min_eigenvalue: min });
            }
        }
        Ok(Self { mat })
    }

    /// Normalizes a PSD operator produced inside the crate (e.g. `K ρ K†`)
    /// without re-running the spectral checks.
    pub(crate) fn from_unnormalized(mat: CMatrix) -> Self {
        let tr = mat.trace().re;
        Self {
            mat: mat.scale(1.0 / tr).hermitian_part(),
        }
    }

    pub fn pure(psi: &[C64]) -> Result<Self> {
        let nrm: f64 = psi.iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt();
        if nrm == 0.0 || !nrm.is_finite() {
            return Err(Error::Invalid("zero state vector".into()));
        }
        let unit: Vec<C64> = psi.iter().map(|z| z / nrm).collect();
        Ok(Self {
            mat: CMatrix::outer(&unit, &unit),
        })
    }

    pub fn basis(d: usize, k: usize) -> Self {
        Self {
            mat: CMatrix::basis_op(d, k, k),
        }
    }

    pub fn maximally_mixed(d: usize) -> Self {
        Self {
            mat: CMatrix::identity(d).scale(1.0 / d as f64),
        }
    }

    pub fn dim(&self) -> usize {
        self.mat.rows()
    }

    pub fn matrix(&self) -> &CMatrix {
        &self.mat
    }

    pub fn tensor(&self, other: &Self) -> Self {
        Self {
            mat: self.mat.kron(&other.mat),
        }
    }
}

/// A Hermitian observable with its cached spectral decomposition.
#[derive(Debug, Clone)]
pub struct Observable {
    mat: CMatrix,
    spectrum: EigenSystem,
}

impl Observable {
    pub fn new(mat: CMatrix) -> Result<Self> {
        let residual = mat.hermitian_residual();
        if residual > STATE_TOL {
            return Err(Error::NotHermitian { residual });
        }
        let mat = mat.hermitian_part();
        let spectrum = eig_hermitian(&mat)?;
        Ok(Self { mat, spectrum })
    }

    pub fn dim(&self) -> usize {
        self.mat.rows()
    }

    pub fn matrix(&self) -> &CMatrix {
        &self.mat
    }

    pub fn spectrum(&self) -> &EigenSystem {
        &self.spectrum
    }

    pub fn squared(&self) -> CMatrix {
        &self.mat * &self.mat
    }

    /// `U A U†` for a unitary `U`.
    pub fn rotated(&self, u: &CMatrix) -> Result<Self> {
        Self::new(u.sandwich(&self.mat))
    }

    pub fn expectation(&self, rho: &CMatrix) -> f64 {
        rho.trace_product(&self.mat).re
    }

    pub fn pauli_z() -> Self {
        Self::new(CMatrix::from_real_diagonal(&[1.0, -1.0])).expect("Z is Hermitian")
    }

    /// `I_d - 2|d-1><d-1|`.
    pub fn fock_parity_top(d: usize) -> Self {
        let mut diag = vec![1.0; d];
        diag[d - 1] = -1.0;
        Self::new(CMatrix::from_real_diagonal(&diag)).expect("diagonal is Hermitian")
    }

    /// `Z ⊗ Z ⊗ ...` on `n` qubits.
    pub fn z_string(n: usize) -> Self {
        let z = CMatrix::from_real_diagonal(&[1.0, -1.0]);
        let mut acc = CMatrix::identity(1);
        for _ in 0..n {
            acc = acc.kron(&z);
        }
        Self::new(acc).expect("Z string is Hermitian")
    }
}

/// Common surface of the three map representations.
pub trait LinearMap {
    fn dim(&self) -> usize;
    /// `Λ` under the crate convention.
    fn choi_matrix(&self) -> CMatrix;
    fn apply(&self, rho: &CMatrix) -> Result<CMatrix>;
}

/// An HPTP map as signed Kraus operators: `N(ρ) = Σ α(i) K_i ρ K_i†`.
#[derive(Debug, Clone)]
pub struct SignedKrausMap {
    dim: usize,
    ops: Vec<CMatrix>,
    signs: Vec<Sign>,
}

impl SignedKrausMap {
    /// Validates dimensions, drops nothing, and checks trace preservation
    /// and that every operator is nonzero.
    pub fn new(ops: Vec<CMatrix>, signs: Vec<Sign>) -> Result<Self> {
        let map = Self::unchecked(ops, signs)?;
        let scale = map.ops.iter().map(|k| k.sup_norm()).fold(0.0, f64::max).max(1.0);
        if let Some(i) = map.ops.iter().position(|k| k.sup_norm() <= TOL.rank * scale) {
            return Err(Error::Invalid(format!("Kraus operator {i} is zero")));
        }
        let residual = map.tp_residual();
        if residual > TOL.tp {
            return Err(Error::NotTracePreserving { residual });
        }
        Ok(map)
    }

    /// Shape checks only. Used for intermediate objects (parts of a split,
    /// deliberately corrupted maps) that need not be trace preserving.
    pub fn unchecked(ops: Vec<CMatrix>, signs: Vec<Sign>) -> Result<Self> {
        if ops.is_empty() {
            return Err(Error::Invalid("empty Kraus set".into()));
        }
        check_dim(ops.len(), signs.len())?;
        let dim = ops[0].rows();
        for k in &ops {
            check_square_dim(k, dim)?;
            if !k.is_finite() {
                return Err(Error::NonFinite);
            }
        }
        Ok(Self { dim, ops, signs })
    }

    /// A CPTP map (all signs `+1`).
    pub fn cptp(ops: Vec<CMatrix>) -> Result<Self> {
        let signs = vec![Sign::Plus; ops.len()];
        Self::new(ops, signs)
    }

    pub fn identity(d: usize) -> Self {
        Self {
            dim: d,
            ops: vec![CMatrix::identity(d)],
            signs: vec![Sign::Plus],
        }
    }

    /// Qubit (or qudit) transpose map, built from its Choi matrix `SWAP`.
    pub fn transpose_map(d: usize) -> Self {
        let mut swap = CMatrix::zeros(d * d, d * d);
        for a in 0..d {
            for b in 0..d {
                swap.set(a * d + b, b * d + a, cr(1.0));
            }
        }
        ChoiMatrix::new(swap)
            .and_then(|c| c.to_signed_kraus())
            .expect("transpose map is HPTP")
    }

    pub fn rank(&self) -> usize {
        self.ops.len()
    }

    pub fn ops(&self) -> &[CMatrix] {
        &self.ops
    }

    pub fn signs(&self) -> &[Sign] {
        &self.signs
    }

    pub fn terms(&self) -> impl Iterator<Item = (&CMatrix, Sign)> {
        self.ops.iter().zip(self.signs.iter().copied())
    }

    /// `Σ α(i) K_i† K_i`.
    pub fn signed_gram(&self) -> CMatrix {
        self.terms().fold(CMatrix::zeros(self.dim, self.dim), |acc, (k, s)| {
            acc + (k.adjoint() * k).scale(s.value())
        })
    }

    /// `Σ K_i† K_i` with all signs dropped.
    pub fn unsigned_gram(&self) -> CMatrix {
        self.ops
            .iter()
            .fold(CMatrix::zeros(self.dim, self.dim), |acc, k| acc + k.adjoint() * k)
    }

    /// `‖Σ α K†K − I‖_sup`.
    pub fn tp_residual(&self) -> f64 {
        self.signed_gram().identity_residual()
    }

    /// `Σ K_i ρ K_i†` without the signs.
    pub fn apply_unsigned(&self, rho: &CMatrix) -> Result<CMatrix> {
        check_square_dim(rho, self.dim)?;
        Ok(self
            .ops
            .iter()
            .fold(CMatrix::zeros(self.dim, self.dim), |acc, k| acc + k.sandwich(rho)))
    }

    pub fn superop(&self) -> Superoperator {
        let d2 = self.dim * self.dim;
        let mat = self.terms().fold(CMatrix::zeros(d2, d2), |acc, (k, s)| {
            acc + k.conj().kron(k).scale(s.value())
        });
        Superoperator { dim: self.dim, mat }
    }

    pub fn choi(&self) -> ChoiMatrix {
        ChoiMatrix {
            dim: self.dim,
            mat: self.choi_matrix(),
        }
    }

    /// Returns a copy with the sign of operator `i` flipped.
    pub fn with_flipped_sign(&self, i: usize) -> Self {
        let mut out = self.clone();
        out.signs[i] = out.signs[i].flip();
        out
    }
}

impl LinearMap for SignedKrausMap {
    fn dim(&self) -> usize {
        self.dim
    }

    fn choi_matrix(&self) -> CMatrix {
        let d2 = self.dim * self.dim;
        self.terms().fold(CMatrix::zeros(d2, d2), |acc, (k, s)| {
            let v = vec(k);
            acc + CMatrix::outer(&v, &v).scale(s.value())
        })
    }

    fn apply(&self, rho: &CMatrix) -> Result<CMatrix> {
        check_square_dim(rho, self.dim)?;
        Ok(self.terms().fold(CMatrix::zeros(self.dim, self.dim), |acc, (k, s)| {
            acc + k.sandwich(rho).scale(s.value())
        }))
    }
}

/// Choi matrix `Λ` of a map (trace `d` for TP maps).
#[derive(Debug, Clone, PartialEq)]
pub struct ChoiMatrix {
    dim: usize,
    mat: CMatrix,
}

fn dim_from_square(n: usize) -> Result<usize> {
    let d = (n as f64).sqrt().round() as usize;
    if d * d != n {
        return Err(Error::DimensionMismatch {
            expected: d * d,
            found: n,
        });
    }
    Ok(d)
}

/// `Tr_out Λ`: the input-factor marginal.
fn partial_trace_output(mat: &CMatrix, d: usize) -> CMatrix {
    CMatrix::from_fn(d, d, |j, k| (0..d).map(|a| mat.get(j * d + a, k * d + a)).sum())
}

/// `Tr_in Λ = N(I)`.
fn partial_trace_input(mat: &CMatrix, d: usize) -> CMatrix {
    CMatrix::from_fn(d, d, |a, b| (0..d).map(|j| mat.get(j * d + a, j * d + b)).sum())
}

/// Reshuffles between Choi and superoperator layouts; the map is an involution.
fn reshuffle(mat: &CMatrix, d: usize) -> CMatrix {
    // Λ[j*d+a, k*d+b] = S[b*d+a, k*d+j]
    let mut out = CMatrix::zeros(d * d, d * d);
    for j in 0..d {
        for a in 0..d {
            for k in 0..d {
                for b in 0..d {
                    out.set(j * d + a, k * d + b, mat.get(b * d + a, k * d + j));
                }
            }
        }
    }
    out
}

impl ChoiMatrix {
    /// Validates Hermiticity and trace preservation.
    pub fn new(mat: CMatrix) -> Result<Self> {
        let choi = Self::unchecked(mat)?;
        let residual = choi.mat.hermitian_residual();
        if residual > STATE_TOL * choi.mat.sup_norm().max(1.0) {
            return Err(Error::NotHermitian { residual });
        }
        let tp = choi.tp_residual();
        if tp > TOL.tp {
            return Err(Error::NotTracePreserving { residual: tp });
        }
        Ok(choi)
    }

    pub fn unchecked(mat: CMatrix) -> Result<Self> {
        if !mat.is_square() {
            return Err(Error::NonSquare {
                rows: mat.rows(),
                cols: mat.cols(),
            });
        }
        let dim = dim_from_square(mat.rows())?;
        Ok(Self { dim, mat })
    }

    pub fn matrix(&self) -> &CMatrix {
        &self.mat
    }

    pub fn tp_residual(&self) -> f64 {
        partial_trace_output(&self.mat, self.dim).identity_residual()
    }

    pub fn to_superop(&self) -> Superoperator {
        Superoperator {
            dim: self.dim,
            mat: reshuffle(&self.mat, self.dim),
        }
    }

    /// Eigen-decomposes `Λ` and reshapes `sqrt|λ_i| v_i` into `K_i` for every
    /// eigenvalue above `TOL.rank * ‖Λ‖`, with `α(i) = sign(λ_i)`.
    pub fn to_signed_kraus(&self) -> Result<SignedKrausMap> {
        let tp = self.tp_residual();
        if tp > TOL.tp {
            return Err(Error::NotTracePreserving { residual: tp });
        }
        let eig = eig_hermitian(&self.mat)?;
        let cutoff = TOL.rank * eig.op_norm();
        let mut ops = Vec::new();
        let mut signs = Vec::new();
        for (k, &lam) in eig.values.iter().enumerate() {
            if lam.abs() <= cutoff {
                continue;
            }
            let s = lam.abs().sqrt();
            let v: Vec<C64> = eig.vector(k).into_iter().map(|z| z * s).collect();
            ops.push(unvec(&v)?);
            signs.push(Sign::of(lam));
        }
        Ok(SignedKrausMap {
            dim: self.dim,
            ops,
            signs,
        })
    }

    /// Number of eigenvalues above the rank cutoff.
    pub fn rank(&self) -> Result<usize> {
        let eig = eig_hermitian(&self.mat)?;
        let cutoff = TOL.rank * eig.op_norm();
        Ok(eig.values.iter().filter(|l| l.abs() > cutoff).count())
    }
}

impl LinearMap for ChoiMatrix {
    fn dim(&self) -> usize {
        self.dim
    }

    fn choi_matrix(&self) -> CMatrix {
        self.mat.clone()
    }

    fn apply(&self, rho: &CMatrix) -> Result<CMatrix> {
        check_square_dim(rho, self.dim)?;
        let d = self.dim;
        Ok(CMatrix::from_fn(d, d, |a, b| {
            let mut acc = C64::default();
            for j in 0..d {
                for k in 0..d {
                    acc += rho.get(j, k) * self.mat.get(j * d + a, k * d + b);
                }
            }
            acc
        }))
    }
}

/// Superoperator acting on column-stacked `vec(ρ)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Superoperator {
    dim: usize,
    mat: CMatrix,
}

impl Superoperator {
    pub fn new(mat: CMatrix) -> Result<Self> {
        if !mat.is_square() {
            return Err(Error::NonSquare {
                rows: mat.rows(),
                cols: mat.cols(),
            });
        }
        let dim = dim_from_square(mat.rows())?;
        Ok(Self { dim, mat })
    }

    pub fn matrix(&self) -> &CMatrix {
        &self.mat
    }

    pub fn to_choi(&self) -> ChoiMatrix {
        ChoiMatrix {
            dim: self.dim,
            mat: reshuffle(&self.mat, self.dim),
        }
    }

    pub fn to_signed_kraus(&self) -> Result<SignedKrausMap> {
        ChoiMatrix::new(reshuffle(&self.mat, self.dim))?.to_signed_kraus()
    }

    /// `self ∘ other` (apply `other` first).
    pub fn compose(&self, other: &Self) -> Result<Self> {
        check_dim(self.dim, other.dim)?;
        Ok(Self {
            dim: self.dim,
            mat: &self.mat * &other.mat,
        })
    }
}

impl LinearMap for Superoperator {
    fn dim(&self) -> usize {
        self.dim
    }

    fn choi_matrix(&self) -> CMatrix {
        reshuffle(&self.mat, self.dim)
    }

    fn apply(&self, rho: &CMatrix) -> Result<CMatrix> {
        check_square_dim(rho, self.dim)?;
        let v = vec(rho);
        let out: Vec<C64> = (0..v.len())
            .map(|r| (0..v.len()).map(|c| self.mat.get(r, c) * v[c]).sum())
            .collect();
        unvec(&out)
    }
}

/// Validity flags plus the magnitudes that decided them.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Classification {
    pub is_hp: bool,
    pub is_tp: bool,
    pub is_cp: bool,
    pub is_unital: bool,
    pub hermitian_residual: f64,
    pub tp_residual: f64,
    pub min_choi_eigenvalue: f64,
    pub unital_residual: f64,
}

impl Classification {
    pub fn is_cptp(&self) -> bool {
        self.is_hp && self.is_tp && self.is_cp
    }
}

pub fn classify(map: &impl LinearMap) -> Classification {
    let d = map.dim();
    let lam = map.choi_matrix();
    let scale = lam.sup_norm().max(1.0);
    let hermitian_residual = lam.hermitian_residual();
    let tp_residual = partial_trace_output(&lam, d).identity_residual();
    let unital_residual = partial_trace_input(&lam, d).identity_residual();
    let (min_choi_eigenvalue, norm) = match eig_hermitian(&lam.hermitian_part()) {
        Ok(e) => (e.values.last().copied().unwrap_or(0.0), e.op_norm()),
        Err(_) => (f64::NAN, 0.0),
    };
    let is_hp = hermitian_residual <= STATE_TOL * scale;
    Classification {
        is_hp,
        is_tp: tp_residual <= TOL.tp,
        is_cp: is_hp && min_choi_eigenvalue >= -TOL.psd * norm.max(1.0),
        is_unital: unital_residual <= TOL.tp,
        hermitian_residual,
        tp_residual,
        min_choi_eigenvalue,
        unital_residual,
    }
}

/// `a ∘ b`: ops `{A_i B_j}`, signs `{α_a(i) α_b(j)}`. Products that vanish
/// (e.g. `σ₋ σ₋`) are dropped.
pub fn compose(a: &SignedKrausMap, b: &SignedKrausMap) -> Result<SignedKrausMap> {
    check_dim(a.dim, b.dim)?;
    let mut ops = Vec::with_capacity(a.rank() * b.rank());
    let mut signs = Vec::with_capacity(a.rank() * b.rank());
    for (ka, sa) in a.terms() {
        for (kb, sb) in b.terms() {
            let prod = ka * kb;
            let scale = ka.sup_norm() * kb.sup_norm();
            if prod.sup_norm() <= TOL.rank * scale {
                continue;
            }
            ops.push(prod);
            signs.push(sa * sb);
        }
    }
    SignedKrausMap::unchecked(ops, signs)
}

/// `a ⊗ b` acting on the joint space (first factor = `a`).
pub fn tensor(a: &SignedKrausMap, b: &SignedKrausMap) -> SignedKrausMap {
    let mut ops = Vec::with_capacity(a.rank() * b.rank());
    let mut signs = Vec::with_capacity(a.rank() * b.rank());
    for (ka, sa) in a.terms() {
        for (kb, sb) in b.terms() {
            ops.push(ka.kron(kb));
            signs.push(sa * sb);
        }
    }
    SignedKrausMap {
        dim: a.dim * b.dim,
        ops,
        signs,
    }
}

/// Matrix units `|j><k|`, a full operator basis for dimension `d`.
pub fn operator_basis(d: usize) -> impl Iterator<Item = CMatrix> {
    (0..d).flat_map(move |j| (0..d).map(move |k| CMatrix::basis_op(d, j, k)))
}

/// Largest sup-norm difference between two maps' actions on the matrix units.
pub fn action_distance(a: &impl LinearMap, b: &impl LinearMap) -> Result<f64> {
    check_dim(a.dim(), b.dim())?;
    let mut worst = 0.0_f64;
    for e in operator_basis(a.dim()) {
        worst = worst.max((&a.apply(&e)? - &b.apply(&e)?).sup_norm());
    }
    Ok(worst)
}

/// Random HPTP map for test corpora: a Gaussian Hermitian `Λ₀` shifted by
/// `((I − Tr_out Λ₀)/d) ⊗ I` so that `Tr_out Λ = I` holds exactly.
pub fn random_hptp_choi(d: usize, rng: &mut impl Rng) -> ChoiMatrix {
    let n = d * d;
    let g = CMatrix::from_fn(n, n, |_, _| {
        C64::new(rng.sample(StandardNormal), rng.sample(StandardNormal))
    });
    let lam0 = g.hermitian_part().scale(1.0 / n as f64);
    let defect = CMatrix::identity(d) - partial_trace_output(&lam0, d);
    let corr = defect.scale(1.0 / d as f64).kron(&CMatrix::identity(d));
    ChoiMatrix {
        dim: d,
        mat: (lam0 + corr).hermitian_part(),
    }
}

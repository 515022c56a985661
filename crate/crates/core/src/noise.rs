//! Noise channels used as mitigation workloads, and their HPTP inverses.

use std::fmt;
use std::str::FromStr;

use nalgebra::SVD;
use serde::{Deserialize, Serialize};

use crate::channels::{tensor, ChoiMatrix, SignedKrausMap};
use crate::error::{Error, Result};
use crate::numerics::{cr, CMatrix, C64};

/// Superoperators with an estimated condition number above this are rejected.
pub const MAX_CONDITION: f64 = 1e12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoiseKind {
    AmplitudeDamping,
    Depolarizing,
    Dephasing,
    PhotonLoss,
}

impl NoiseKind {
    pub const ALL: [NoiseKind; 4] = [
        NoiseKind::AmplitudeDamping,
        NoiseKind::Depolarizing,
        NoiseKind::Dephasing,
        NoiseKind::PhotonLoss,
    ];

    pub fn name(self) -> &'static str {
        match self {
            NoiseKind::AmplitudeDamping => "amplitude_damping",
            NoiseKind::Depolarizing => "depolarizing",
            NoiseKind::Dephasing => "dephasing",
            NoiseKind::PhotonLoss => "photon_loss",
        }
    }

    pub fn is_qubit_kind(self) -> bool {
        self != NoiseKind::PhotonLoss
    }

    /// Exclusive upper bound on `delta` for which the channel is invertible.
    pub fn max_invertible_delta(self) -> f64 {
        match self {
            NoiseKind::Dephasing => 0.5,
            _ => 1.0,
        }
    }
}

impl fmt::Display for NoiseKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for NoiseKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        NoiseKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::Invalid(format!("unknown noise kind `{s}`")))
    }
}

/// A noise channel: kind, noise level and system size.
///
/// Qubit kinds act on `qubits` qubits as a tensor power of the single-qubit
/// channel (`dim = 2^qubits`); photon loss acts on a Fock space truncated to
/// `dim` levels.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoiseSpec {
    pub kind: NoiseKind,
    pub dim: usize,
    pub delta: f64,
    pub qubits: usize,
}

impl NoiseSpec {
    pub fn qubit(kind: NoiseKind, qubits: usize, delta: f64) -> Self {
        Self {
            kind,
            dim: 1 << qubits,
            delta,
            qubits,
        }
    }

    pub fn photon_loss(dim: usize, delta: f64) -> Self {
        Self {
            kind: NoiseKind::PhotonLoss,
            dim,
            delta,
            qubits: 0,
        }
    }

    /// Qubit kinds get `qubits = log2(dim)`; photon loss keeps `dim`.
    pub fn for_dim(kind: NoiseKind, dim: usize, delta: f64) -> Result<Self> {
        if kind.is_qubit_kind() {
            if !dim.is_power_of_two() || dim < 2 {
                return Err(Error::Invalid(format!(
                    "{kind} needs a power-of-two dimension, got {dim}"
                )));
            }
            Ok(Self::qubit(kind, dim.trailing_zeros() as usize, delta))
        } else {
            Ok(Self::photon_loss(dim, delta))
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.delta) {
            return Err(self.invalid_delta());
        }
        if self.kind.is_qubit_kind() {
            if self.qubits == 0 || self.dim != 1 << self.qubits {
                return Err(Error::Invalid(format!(
                    "{} on {} qubits must have dim {}, got {}",
                    self.kind,
                    self.qubits,
                    1usize << self.qubits,
                    self.dim
                )));
            }
        } else if self.dim < 2 {
            return Err(Error::Invalid("photon loss needs dim >= 2".into()));
        }
        Ok(())
    }

    fn invalid_delta(&self) -> Error {
        Error::InvalidDelta {
            kind: self.kind.name().into(),
            delta: self.delta,
        }
    }
}

fn pauli_x() -> CMatrix {
    CMatrix::basis_op(2, 0, 1) + CMatrix::basis_op(2, 1, 0)
}

fn pauli_y() -> CMatrix {
    CMatrix::basis_op(2, 0, 1).scale_c(C64::new(0.0, -1.0)) + CMatrix::basis_op(2, 1, 0).scale_c(C64::new(0.0, 1.0))
}

fn pauli_z() -> CMatrix {
    CMatrix::from_real_diagonal(&[1.0, -1.0])
}

/// Keeps only terms with nonzero weight so that `δ = 0` yields the bare identity.
fn weighted_ops(terms: Vec<(f64, CMatrix)>) -> Vec<CMatrix> {
    terms
        .into_iter()
        .filter(|(w, _)| *w > 0.0)
        .map(|(w, k)| k.scale(w.sqrt()))
        .collect()
}

fn single_qubit_ops(kind: NoiseKind, delta: f64) -> Vec<CMatrix> {
    match kind {
        NoiseKind::AmplitudeDamping => {
            let mut ops = vec![CMatrix::from_real_diagonal(&[1.0, (1.0 - delta).sqrt()])];
            if delta > 0.0 {
                ops.push(CMatrix::basis_op(2, 0, 1).scale(delta.sqrt()));
            }
            ops
        }
        NoiseKind::Depolarizing => weighted_ops(vec![
            (1.0 - 0.75 * delta, CMatrix::identity(2)),
            (delta / 4.0, pauli_x()),
            (delta / 4.0, pauli_y()),
            (delta / 4.0, pauli_z()),
        ]),
        NoiseKind::Dephasing => weighted_ops(vec![(1.0 - delta, CMatrix::identity(2)), (delta, pauli_z())]),
        NoiseKind::PhotonLoss => unreachable!("photon loss is not a qubit channel"),
    }
}

fn binomial(n: usize, k: usize) -> f64 {
    (0..k).fold(1.0, |acc, i| acc * (n - i) as f64 / (i + 1) as f64)
}

/// `<n-k|K_k|n> = sqrt(C(n,k) (1-δ)^(n-k) δ^k)` on `d` Fock levels.
fn photon_loss_ops(d: usize, delta: f64) -> Vec<CMatrix> {
    let kmax = if delta > 0.0 { d } else { 1 };
    (0..kmax)
        .map(|k| {
            let mut op = CMatrix::zeros(d, d);
            for n in k..d {
                let w = binomial(n, k) * (1.0 - delta).powi((n - k) as i32) * delta.powi(k as i32);
                op.set(n - k, n, cr(w.sqrt()));
            }
            op
        })
        .collect()
}

/// The noise channel itself (all signs `+1`).
pub fn build_channel(spec: &NoiseSpec) -> Result<SignedKrausMap> {
    spec.validate()?;
    match spec.kind {
        NoiseKind::PhotonLoss => SignedKrausMap::cptp(photon_loss_ops(spec.dim, spec.delta)),
        kind => {
            let single = SignedKrausMap::cptp(single_qubit_ops(kind, spec.delta))?;
            let mut acc = single.clone();
            for _ in 1..spec.qubits {
                acc = tensor(&acc, &single);
            }
            Ok(acc)
        }
    }
}

/// The HPTP inverse `E^{-1}`, obtained by inverting the dense superoperator
/// and re-extracting signed Kraus operators from its Choi matrix.
pub fn invert_channel(spec: &NoiseSpec) -> Result<SignedKrausMap> {
    spec.validate()?;
    if spec.delta >= spec.kind.max_invertible_delta() {
        return Err(spec.invalid_delta());
    }
    let channel = build_channel(spec)?;
    let sup = channel.superop();
    let svd = SVD::new(sup.matrix().as_nalgebra().clone(), false, false);
    let smax = svd.singular_values.max();
    let smin = svd.singular_values.min();
    let condition = if smin > 0.0 { smax / smin } else { f64::INFINITY };
    if condition > MAX_CONDITION {
        return Err(Error::SingularChannel { condition });
    }
    let inv = sup.matrix().try_inverse().ok_or(Error::SingularChannel { condition })?;
    let inv = crate::channels::Superoperator::new(inv)?;
    ChoiMatrix::new(inv.to_choi().matrix().hermitian_part())?.to_signed_kraus()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::channels::{action_distance, classify, compose, LinearMap, Sign};
    use crate::numerics::eig_hermitian;

    #[test]
    fn zero_noise_is_identity() {
        for kind in [
            NoiseKind::AmplitudeDamping,
            NoiseKind::Depolarizing,
            NoiseKind::Dephasing,
        ] {
            let spec = NoiseSpec::qubit(kind, 1, 0.0);
            let ch = build_channel(&spec).unwrap();
            assert_eq!(ch.rank(), 1);
            assert!(action_distance(&ch, &SignedKrausMap::identity(2)).unwrap() < 1e-15);
            let inv = invert_channel(&spec).unwrap();
            assert!(action_distance(&inv, &SignedKrausMap::identity(2)).unwrap() < 1e-12);
        }
        let inv = invert_channel(&NoiseSpec::photon_loss(5, 0.0)).unwrap();
        assert_eq!(inv.rank(), 1);
    }

    #[test]
    fn full_decay() {
        let ch = build_channel(&NoiseSpec::qubit(NoiseKind::AmplitudeDamping, 1, 0.999_999_999_999)).unwrap();
        let out = ch.apply(&CMatrix::basis_op(2, 1, 1)).unwrap();
        assert!((&out - &CMatrix::basis_op(2, 0, 0)).sup_norm() < 1e-11);
        assert!(build_channel(&NoiseSpec::qubit(NoiseKind::AmplitudeDamping, 1, 1.0)).is_err());
    }

    #[test]
    fn photon_loss_binomial_statistics() {
        let d = 4;
        let delta = 0.2;
        let ch = build_channel(&NoiseSpec::photon_loss(d, delta)).unwrap();
        let out = ch.apply(&CMatrix::basis_op(d, 3, 3)).unwrap();
        for k in 0..=3 {
            let expected = binomial(3, k) * 0.8f64.powi(3 - k as i32) * 0.2f64.powi(k as i32);
            assert!((out.get(3 - k, 3 - k).re - expected).abs() < 1e-15);
        }
        // off-diagonals vanish for a Fock input
        assert!((out.get(0, 1)).norm() < 1e-15);
        // exact TP by construction
        assert!(ch.tp_residual() < 1e-15);
    }

    #[test]
    fn channels_are_cptp() {
        for kind in NoiseKind::ALL {
            let spec = if kind == NoiseKind::PhotonLoss {
                NoiseSpec::photon_loss(6, 0.3)
            } else {
                NoiseSpec::qubit(kind, 2, 0.3)
            };
            let c = classify(&build_channel(&spec).unwrap());
            assert!(c.is_cptp(), "{kind}");
        }
    }

    #[test]
    fn depolarizing_inverse_values() {
        let inv = invert_channel(&NoiseSpec::qubit(NoiseKind::Depolarizing, 1, 0.2)).unwrap();
        assert_eq!(inv.signs(), &[Sign::Plus, Sign::Minus, Sign::Minus, Sign::Minus]);
        let e = eig_hermitian(&inv.choi_matrix()).unwrap();
        for (v, x) in e.values.iter().zip([2.375, -0.125, -0.125, -0.125]) {
            assert!((v - x).abs() < 1e-12);
        }
        let gamma = crate::numerics::op_norm(&inv.unsigned_gram()).unwrap();
        assert!((gamma - 1.375).abs() < 1e-12);
    }

    #[test]
    fn inverse_properties() {
        for kind in NoiseKind::ALL {
            for delta in [0.05, 0.1, 0.2, 0.3] {
                let spec = if kind == NoiseKind::PhotonLoss {
                    NoiseSpec::photon_loss(5, delta)
                } else {
                    NoiseSpec::qubit(kind, 1, delta)
                };
                let ch = build_channel(&spec).unwrap();
                let inv = invert_channel(&spec).unwrap();
                let id = compose(&inv, &ch).unwrap();
                assert!(action_distance(&id, &SignedKrausMap::identity(spec.dim)).unwrap() < 1e-9);
                let c = classify(&inv);
                assert!(c.is_hp && c.is_tp && !c.is_cp, "{kind} {delta}");
                let unital = matches!(kind, NoiseKind::Depolarizing | NoiseKind::Dephasing);
                assert_eq!(c.is_unital, unital, "{kind}");
            }
        }
    }

    #[test]
    fn photon_loss_inverse_rank_is_dim() {
        for d in 2..=8 {
            let inv = invert_channel(&NoiseSpec::photon_loss(d, 0.2)).unwrap();
            assert_eq!(inv.rank(), d);
        }
    }

    #[test]
    fn tensor_of_inverses() {
        let delta = 0.2;
        let one = invert_channel(&NoiseSpec::qubit(NoiseKind::AmplitudeDamping, 1, delta)).unwrap();
        let two = invert_channel(&NoiseSpec::qubit(NoiseKind::AmplitudeDamping, 2, delta)).unwrap();
        let tt = tensor(&one, &one);
        assert!((tt.superop().matrix() - two.superop().matrix()).sup_norm() < 1e-9);
        let ch2 = build_channel(&NoiseSpec::qubit(NoiseKind::AmplitudeDamping, 2, delta)).unwrap();
        let prod = two.superop().compose(&ch2.superop()).unwrap();
        assert!(prod.matrix().identity_residual() < 1e-9);
    }

    #[test]
    fn invalid_specs() {
        assert!(matches!(
            invert_channel(&NoiseSpec::qubit(NoiseKind::Dephasing, 1, 0.5)),
            Err(Error::InvalidDelta { .. })
        ));
        assert!(build_channel(&NoiseSpec::qubit(NoiseKind::Dephasing, 1, -0.1)).is_err());
        let bad = NoiseSpec {
            kind: NoiseKind::Depolarizing,
            dim: 3,
            delta: 0.1,
            qubits: 1,
        };
        assert!(build_channel(&bad).is_err());
        assert_eq!("photon_loss".parse::<NoiseKind>().unwrap(), NoiseKind::PhotonLoss);
    }
}

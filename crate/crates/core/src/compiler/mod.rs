//! Compilation of an HPTP map into one executable CPTP map plus classical
//! post-processing weights, and the binary-tree instrument plan that runs it
//! with a single reusable ancilla qubit.
//!
//! Given `N(ρ) = Σ α(i) K_i ρ K_i†`:
//! 1. `γ = ‖Σ K_i†K_i‖` and `K̃_i = K_i/√γ`;
//! 2. if `Σ K̃_i†K̃_i ≠ I`, append `K̃_{r+1} = (I − Σ K̃_i†K̃_i)^{1/2}`;
//! 3. branch `i` carries weight `α(i)γ`, the appended branch weight `0`,
//!    so that `Tr[N(ρ)O] = Σ_i w(i) Tr[K̃_i ρ K̃_i† O]`.

mod baseline;
mod tree;

pub use baseline::{positive_negative_baseline, BaselineSplit};
pub use tree::{build_tree_plan, verify_tree_plan, PlanNode, PlanTree, TreePlan, TreeReport};

use crate::channels::{LinearMap, SignedKrausMap};
use crate::error::{Error, Result};
use crate::numerics::{op_norm, psd_sqrt, CMatrix, TOL};

/// The executable CPTP map and its post-processing weights.
#[derive(Debug, Clone)]
pub struct CompiledCptp {
    pub(crate) dim: usize,
    pub(crate) kraus: Vec<CMatrix>,
    pub(crate) weights: Vec<f64>,
    pub(crate) gamma: f64,
    pub(crate) completed: bool,
    pub(crate) source_rank: usize,
}

impl CompiledCptp {
    /// Reassembles a compiled map (e.g. read from disk) and checks its
    /// invariants: completeness, weight layout and `γ ≥ 1`.
    pub fn from_parts(
        kraus: Vec<CMatrix>,
        weights: Vec<f64>,
        gamma: f64,
        completed: bool,
        source_rank: usize,
    ) -> Result<Self> {
        if kraus.is_empty() || kraus.len() != weights.len() {
            return Err(Error::Invalid(
                "kraus and weights must be nonempty and equal length".into(),
            ));
        }
        let dim = kraus[0].rows();
        if kraus.iter().any(|k| k.rows() != dim || k.cols() != dim) {
            return Err(Error::Invalid("Kraus operators must share one square shape".into()));
        }
        if gamma < 1.0 - 1e-12 || !gamma.is_finite() {
            return Err(Error::Invalid(format!("gamma {gamma} < 1")));
        }
        let expected_len = source_rank + usize::from(completed);
        if kraus.len() != expected_len {
            return Err(Error::Invalid(format!(
                "{} branches, expected {expected_len}",
                kraus.len()
            )));
        }
        if completed && weights[source_rank] != 0.0 {
            return Err(Error::Invalid("completion branch must carry weight 0".into()));
        }
        if weights[..source_rank]
            .iter()
            .any(|w| ((w.abs() - gamma) / gamma).abs() > 1e-12)
        {
            return Err(Error::Invalid("weights must be ±gamma".into()));
        }
        let c = Self {
            dim,
            kraus,
            weights,
            gamma,
            completed,
            source_rank,
        };
        let residual = c.completeness_residual();
        if residual > TOL.tp {
            return Err(Error::NotTracePreserving { residual });
        }
        Ok(c)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn kraus(&self) -> &[CMatrix] {
        &self.kraus
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn gamma(&self) -> f64 {
        self.gamma
    }

    pub fn completed(&self) -> bool {
        self.completed
    }

    pub fn source_rank(&self) -> usize {
        self.source_rank
    }

    pub fn branch_count(&self) -> usize {
        self.kraus.len()
    }

    /// `‖Σ K̃†K̃ − I‖_sup`.
    pub fn completeness_residual(&self) -> f64 {
        self.kraus
            .iter()
            .fold(CMatrix::zeros(self.dim, self.dim), |acc, k| acc + k.adjoint() * k)
            .identity_residual()
    }

    /// The physical channel `E_N` with every sign `+1`.
    pub fn as_channel(&self) -> Result<SignedKrausMap> {
        SignedKrausMap::cptp(self.kraus.clone())
    }

    /// `Σ w(i) K̃_i ρ K̃_i†`, which equals `N(ρ)`.
    pub fn reweighted_apply(&self, rho: &CMatrix) -> Result<CMatrix> {
        if rho.rows() != self.dim || rho.cols() != self.dim {
            return Err(Error::DimensionMismatch {
                expected: self.dim,
                found: rho.rows(),
            });
        }
        Ok(self
            .kraus
            .iter()
            .zip(&self.weights)
            .fold(CMatrix::zeros(self.dim, self.dim), |acc, (k, &w)| {
                acc + k.sandwich(rho).scale(w)
            }))
    }
}

/// Reweighted action viewed as a linear map, for oracle comparisons.
pub struct Reweighted<'a>(pub &'a CompiledCptp);

impl LinearMap for Reweighted<'_> {
    fn dim(&self) -> usize {
        self.0.dim
    }

    fn choi_matrix(&self) -> CMatrix {
        let d = self.0.dim;
        self.0
            .kraus
            .iter()
            .zip(&self.0.weights)
            .fold(CMatrix::zeros(d * d, d * d), |acc, (k, &w)| {
                let v = crate::numerics::vec(k);
                acc + CMatrix::outer(&v, &v).scale(w)
            })
    }

    fn apply(&self, rho: &CMatrix) -> Result<CMatrix> {
        self.0.reweighted_apply(rho)
    }
}

/// Normalization, completion and weight assignment.
pub fn compile(map: &SignedKrausMap) -> Result<CompiledCptp> {
    let residual = map.tp_residual();
    if residual > TOL.tp {
        return Err(Error::NotTracePreserving { residual });
    }
    let d = map.dim();
    let mut gamma = op_norm(&map.unsigned_gram())?;
    if gamma < 1.0 {
        if gamma >= 1.0 - 1e-12 {
            gamma = 1.0;
        } else {
            // Σ K†K ≥ Σ αK†K = I forbids this for a TP map
            return Err(Error::NotTracePreserving { residual: 1.0 - gamma });
        }
    }
    let scale = 1.0 / gamma.sqrt();
    let mut kraus: Vec<CMatrix> = map.ops().iter().map(|k| k.scale(scale)).collect();
    let mut weights: Vec<f64> = map.signs().iter().map(|s| s.value() * gamma).collect();
    let gram = kraus.iter().fold(CMatrix::zeros(d, d), |acc, k| acc + k.adjoint() * k);
    let defect = CMatrix::identity(d) - gram;
    let completed = defect.sup_norm() > TOL.tp;
    if completed {
        kraus.push(psd_sqrt(&defect)?);
        weights.push(0.0);
    }
    Ok(CompiledCptp {
        dim: d,
        kraus,
        weights,
        gamma,
        completed,
        source_rank: map.rank(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::channels::{action_distance, classify, random_hptp_choi, Sign};
    use crate::noise::{invert_channel, NoiseKind, NoiseSpec};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn identity_compiles_to_itself() {
        let c = compile(&SignedKrausMap::identity(3)).unwrap();
        assert_eq!(c.gamma(), 1.0);
        assert!(!c.completed());
        assert_eq!(c.branch_count(), 1);
        assert!(c.kraus()[0].identity_residual() < 1e-15);
        assert_eq!(c.weights(), &[1.0]);
    }

    #[test]
    fn transpose_map() {
        let c = compile(&SignedKrausMap::transpose_map(2)).unwrap();
        assert!((c.gamma() - 2.0).abs() < 1e-12);
        assert!(!c.completed());
        assert_eq!(c.branch_count(), 4);
        let expected = [2.0, 2.0, 2.0, -2.0];
        for (w, x) in c.weights().iter().zip(expected) {
            assert!((w - x).abs() < 1e-12);
        }
    }

    #[test]
    fn dephasing_inverse() {
        let inv = invert_channel(&NoiseSpec::qubit(NoiseKind::Dephasing, 1, 0.1)).unwrap();
        assert_eq!(inv.rank(), 2);
        assert_eq!(inv.signs(), &[Sign::Plus, Sign::Minus]);
        let c = compile(&inv).unwrap();
        assert!((c.gamma() - 1.25).abs() < 1e-12);
        assert!(!c.completed());
        assert!((c.weights()[0] - 1.25).abs() < 1e-12);
        assert!((c.weights()[1] + 1.25).abs() < 1e-12);
    }

    #[test]
    fn amplitude_damping_inverse_needs_completion() {
        let inv = invert_channel(&NoiseSpec::qubit(NoiseKind::AmplitudeDamping, 1, 0.2)).unwrap();
        let c = compile(&inv).unwrap();
        assert!(c.completed());
        assert_eq!(c.branch_count(), inv.rank() + 1);
        assert_eq!(*c.weights().last().unwrap(), 0.0);
        assert!(classify(&c.as_channel().unwrap()).is_cptp());
    }

    #[test]
    fn random_corpus_reweighted_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        for d in [2, 3, 4] {
            for _ in 0..10 {
                let map = random_hptp_choi(d, &mut rng).to_signed_kraus().unwrap();
                let c = compile(&map).unwrap();
                assert!(action_distance(&Reweighted(&c), &map).unwrap() < 1e-9);
                assert!(c.completeness_residual() < TOL.tp);
                assert!(c.branch_count() <= map.rank() + 1);
                assert!(c.gamma() >= 1.0);
            }
        }
    }

    #[test]
    fn cptp_input_has_unit_weights() {
        let ch = crate::noise::build_channel(&NoiseSpec::photon_loss(4, 0.3)).unwrap();
        let c = compile(&ch).unwrap();
        assert_eq!(c.gamma(), 1.0);
        assert!(c.weights().iter().all(|&w| w == 1.0));
        assert!(!c.completed());
    }

    #[test]
    fn rejects_non_tp() {
        let bad = SignedKrausMap::transpose_map(2).with_flipped_sign(0);
        assert!(matches!(compile(&bad), Err(Error::NotTracePreserving { .. })));
    }

    #[test]
    fn from_parts_validates() {
        let c = compile(&SignedKrausMap::transpose_map(2)).unwrap();
        let ok = CompiledCptp::from_parts(
            c.kraus().to_vec(),
            c.weights().to_vec(),
            c.gamma(),
            c.completed(),
            c.source_rank(),
        );
        assert!(ok.is_ok());
        let mut k = c.kraus().to_vec();
        k[0] = k[0].scale(1.1);
        assert!(CompiledCptp::from_parts(k, c.weights().to_vec(), c.gamma(), false, 4).is_err());
    }
}

//! Two-CPTP reference decomposition `N = η₁E₁ − η₂E₂` built from the sign
//! split of the Choi spectrum, for resource comparisons against `compile`.
//!
//! `Λ = Λ₊ − Λ₋` gives Kraus sets `{P_j}` and `{Q_j}` with `S₊ − S₋ = I`
//! (`S_± = Σ P†P`, `Σ Q†Q`). `E₁` is `{P_j/√η₁}` completed by
//! `C = (I − S₊/η₁)^{1/2}` with `η₁ = ‖S₊‖`. The completion term is moved to
//! the negative side: `E₂ = {Q_j/√η₂, √(η₁/η₂)·C}` with `η₂ = η₁ − 1`, which
//! is exactly trace preserving and makes `η₁E₁ − η₂E₂ = N` hold term by term.

use crate::channels::{LinearMap, Sign, SignedKrausMap};
use crate::error::{Error, Result};
use crate::numerics::{op_norm, psd_sqrt, CMatrix, TOL};

#[derive(Debug, Clone)]
pub struct BaselineSplit {
    pub eta_pos: f64,
    pub positive: SignedKrausMap,
    pub eta_neg: f64,
    /// `None` when the input is already CPTP (`η₂ = 0`).
    pub negative: Option<SignedKrausMap>,
    /// Ranks of `Λ₊` and `Λ₋` before any completion operator is added.
    pub pos_rank_before_completion: usize,
    pub neg_rank_before_completion: usize,
}

impl BaselineSplit {
    pub fn rank_pos(&self) -> usize {
        self.positive.rank()
    }

    pub fn rank_neg(&self) -> usize {
        self.negative.as_ref().map_or(0, |m| m.rank())
    }

    /// `η₁E₁(ρ) − η₂E₂(ρ)`.
    pub fn apply(&self, rho: &CMatrix) -> Result<CMatrix> {
        let pos = self.positive.apply(rho)?.scale(self.eta_pos);
        match &self.negative {
            Some(neg) => Ok(pos - neg.apply(rho)?.scale(self.eta_neg)),
            None => Ok(pos),
        }
    }
}

pub fn positive_negative_baseline(map: &SignedKrausMap) -> Result<BaselineSplit> {
    let residual = map.tp_residual();
    if residual > TOL.tp {
        return Err(Error::NotTracePreserving { residual });
    }
    let d = map.dim();
    // canonical form: one Kraus operator per Choi eigenvector
    let canonical = map.choi().to_signed_kraus()?;
    let (pos, neg): (Vec<_>, Vec<_>) = canonical.terms().partition(|(_, s)| *s == Sign::Plus);
    let pos: Vec<CMatrix> = pos.into_iter().map(|(k, _)| k.clone()).collect();
    let neg: Vec<CMatrix> = neg.into_iter().map(|(k, _)| k.clone()).collect();
    let gram = |ops: &[CMatrix]| ops.iter().fold(CMatrix::zeros(d, d), |acc, k| acc + k.adjoint() * k);
    let s_pos = gram(&pos);
    let eta_pos = op_norm(&s_pos)?.max(1.0);
    let defect = CMatrix::identity(d) - s_pos.scale(1.0 / eta_pos);
    let completion = if defect.sup_norm() > TOL.tp {
        Some(psd_sqrt(&defect)?)
    } else {
        None
    };

    let mut pos_ops: Vec<CMatrix> = pos.iter().map(|k| k.scale(1.0 / eta_pos.sqrt())).collect();
    pos_ops.extend(completion.clone());
    let positive = SignedKrausMap::cptp(pos_ops)?;

    let eta_neg = eta_pos - 1.0;
    let negative = if neg.is_empty() && eta_neg <= TOL.tp {
        None
    } else {
        let mut neg_ops: Vec<CMatrix> = neg.iter().map(|k| k.scale(1.0 / eta_neg.sqrt())).collect();
        if let Some(c) = &completion {
            neg_ops.push(c.scale((eta_pos / eta_neg).sqrt()));
        }
        Some(SignedKrausMap::cptp(neg_ops)?)
    };
    Ok(BaselineSplit {
        eta_pos,
        positive,
        eta_neg: if negative.is_some() { eta_neg } else { 0.0 },
        negative,
        pos_rank_before_completion: pos.len(),
        neg_rank_before_completion: neg.len(),
    })
}

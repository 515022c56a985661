//! Shot-level execution of compiled maps and the closed-form variances.
//!
//! A shot draws a Kraus branch of every compiled map in sequence, measures the
//! observable on the final state and reports `value = Π w(i_m) · outcome`.
//! Branch and outcome probabilities do not depend on earlier draws beyond the
//! path taken, so [`OutcomeTable`] enumerates the joint distribution over
//! `(path, eigen-outcome)` once and then draws shots from it with an alias
//! table. [`run_shot`] performs the same shot step by step and is kept as the
//! reference implementation.
//!
//! Randomness: shots are grouped into fixed-size blocks; block `b` draws from
//! ChaCha8 stream `b` of the seed, and block statistics are merged in block
//! order, so results do not depend on the number of worker threads.

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::weighted::WeightedAliasIndex;
use rand_distr::Distribution;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::channels::{DensityMatrix, LinearMap, Observable, SignedKrausMap};
use crate::compiler::{compile, CompiledCptp};
use crate::error::{Error, Result};
use crate::numerics::{trace_norm, CMatrix, C64};

/// Shots per RNG block.
pub const BLOCK_SHOTS: usize = 4096;
/// Branches below this probability are never drawn.
pub const MIN_BRANCH_PROB: f64 = 1e-14;
const PROB_TOL: f64 = 1e-9;

/// ChaCha8 stream `stream` of `seed`.
pub fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// One circuit run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShotRecord {
    /// Branch index drawn for each map, in application order.
    pub branch_path: Vec<usize>,
    /// Eigenvalue of the observable.
    pub outcome: f64,
    /// `Π w(i_m)`.
    pub weight: f64,
    pub value: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EstimatorResult {
    pub mean: f64,
    /// Sample variance of the shot values divided by the shot count.
    pub empirical_variance_of_mean: f64,
    pub shots: usize,
    pub seed: u64,
}

fn quadratic_form(v: &[C64], m: &CMatrix) -> f64 {
    let mut acc = C64::default();
    for (r, vr) in v.iter().enumerate() {
        let mut row = C64::default();
        for (c, vc) in v.iter().enumerate() {
            row += m.get(r, c) * vc;
        }
        acc += vr.conj() * row;
    }
    acc.re
}

/// Normalizes `p` after checking `|Σp − 1| ≤ 1e-9`; entries below
/// [`MIN_BRANCH_PROB`] are zeroed.
fn checked_distribution(mut p: Vec<f64>) -> Result<Vec<f64>> {
    let total: f64 = p.iter().sum();
    if !total.is_finite() || (total - 1.0).abs() > PROB_TOL {
        return Err(Error::ProbabilityDefect { total });
    }
    for x in p.iter_mut() {
        if *x < MIN_BRANCH_PROB {
            *x = 0.0;
        }
    }
    let kept: f64 = p.iter().sum();
    p.iter_mut().for_each(|x| *x /= kept);
    Ok(p)
}

fn draw_index(p: &[f64], rng: &mut impl Rng) -> Result<usize> {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    let mut last = None;
    for (i, &pi) in p.iter().enumerate() {
        if pi == 0.0 {
            continue;
        }
        acc += pi;
        last = Some(i);
        if u < acc {
            return Ok(i);
        }
    }
    // rounding left `acc` marginally below 1
    last.ok_or(Error::ProbabilityDefect { total: 0.0 })
}

/// `p_i = Tr[K̃_i ρ K̃_i†]` for every branch.
pub fn branch_probabilities(c: &CompiledCptp, rho: &CMatrix) -> Result<Vec<f64>> {
    if rho.rows() != c.dim() {
        return Err(Error::DimensionMismatch {
            expected: c.dim(),
            found: rho.rows(),
        });
    }
    let p = c.kraus().iter().map(|k| k.sandwich(rho).trace().re).collect();
    checked_distribution(p)
}

/// Draws branch `i` with probability `Tr[K̃_i ρ K̃_i†]` and returns the
/// normalized post-measurement state.
pub fn sample_branch(c: &CompiledCptp, rho: &DensityMatrix, rng: &mut impl Rng) -> Result<(usize, DensityMatrix)> {
    let p = branch_probabilities(c, rho.matrix())?;
    let i = draw_index(&p, rng)?;
    if p[i] < MIN_BRANCH_PROB {
        return Err(Error::DegenerateBranch {
            index: i,
            probability: p[i],
        });
    }
    let post = DensityMatrix::from_unnormalized(c.kraus()[i].sandwich(rho.matrix()));
    Ok((i, post))
}

fn outcome_probabilities(state: &CMatrix, o: &Observable) -> Vec<f64> {
    let spec = o.spectrum();
    (0..spec.values.len())
        .map(|k| quadratic_form(&spec.vector(k), state).max(0.0))
        .collect()
}

/// Projective measurement of `O`; returns the eigenvalue observed.
pub fn measure_observable(state: &DensityMatrix, o: &Observable, rng: &mut impl Rng) -> Result<f64> {
    if state.dim() != o.dim() {
        return Err(Error::DimensionMismatch {
            expected: o.dim(),
            found: state.dim(),
        });
    }
    let p = checked_distribution(outcome_probabilities(state.matrix(), o))?;
    Ok(o.spectrum().values[draw_index(&p, rng)?])
}

fn check_chain(maps: &[CompiledCptp], rho: &DensityMatrix, o: &Observable) -> Result<()> {
    for m in maps {
        if m.dim() != rho.dim() {
            return Err(Error::DimensionMismatch {
                expected: rho.dim(),
                found: m.dim(),
            });
        }
    }
    if o.dim() != rho.dim() {
        return Err(Error::DimensionMismatch {
            expected: rho.dim(),
            found: o.dim(),
        });
    }
    Ok(())
}

/// One shot, branch by branch.
pub fn run_shot(maps: &[CompiledCptp], rho: &DensityMatrix, o: &Observable, rng: &mut impl Rng) -> Result<ShotRecord> {
    check_chain(maps, rho, o)?;
    let mut state = rho.clone();
    let mut path = Vec::with_capacity(maps.len());
    let mut weight = 1.0;
    for m in maps {
        let (i, post) = sample_branch(m, &state, rng)?;
        weight *= m.weights()[i];
        path.push(i);
        state = post;
    }
    let outcome = measure_observable(&state, o, rng)?;
    Ok(ShotRecord {
        branch_path: path,
        outcome,
        weight,
        value: weight * outcome,
    })
}

/// Streaming mean / sum of squared deviations.
#[derive(Debug, Clone, Copy, Default)]
struct Moments {
    n: usize,
    mean: f64,
    m2: f64,
}

impl Moments {
    fn push(&mut self, x: f64) {
        self.n += 1;
        let delta = x - self.mean;
        self.mean += delta / self.n as f64;
        self.m2 += delta * (x - self.mean);
    }

    fn merge(self, other: Self) -> Self {
        if self.n == 0 {
            return other;
        }
        if other.n == 0 {
            return self;
        }
        let n = self.n + other.n;
        let delta = other.mean - self.mean;
        Self {
            n,
            mean: self.mean + delta * other.n as f64 / n as f64,
            m2: self.m2 + other.m2 + delta * delta * (self.n as f64 * other.n as f64) / n as f64,
        }
    }

    fn result(self, seed: u64) -> EstimatorResult {
        let var = if self.n > 1 { self.m2 / (self.n - 1) as f64 } else { 0.0 };
        EstimatorResult {
            mean: self.mean,
            empirical_variance_of_mean: var / self.n as f64,
            shots: self.n,
            seed,
        }
    }
}

fn block_sizes(shots: usize) -> impl Iterator<Item = (u64, usize)> {
    let blocks = shots.div_ceil(BLOCK_SHOTS);
    (0..blocks).map(move |b| (b as u64, BLOCK_SHOTS.min(shots - b * BLOCK_SHOTS)))
}

/// Reference estimator: every shot goes through [`run_shot`]. Uses the same
/// block streams as [`estimate`], sequentially.
pub fn estimate_direct(
    maps: &[CompiledCptp],
    rho: &DensityMatrix,
    o: &Observable,
    shots: usize,
    seed: u64,
) -> Result<EstimatorResult> {
    if shots == 0 {
        return Err(Error::Invalid("shots must be at least 1".into()));
    }
    let mut total = Moments::default();
    for (b, len) in block_sizes(shots) {
        let mut rng = stream_rng(seed, b);
        let mut m = Moments::default();
        for _ in 0..len {
            m.push(run_shot(maps, rho, o, &mut rng)?.value);
        }
        total = total.merge(m);
    }
    Ok(total.result(seed))
}

/// One cell of the joint shot distribution.
#[derive(Debug, Clone, PartialEq)]
pub struct OutcomeCell {
    pub path: Vec<usize>,
    pub eigen_index: usize,
    pub outcome: f64,
    pub weight: f64,
    pub probability: f64,
}

/// Exact joint distribution of `(branch path, measurement outcome)` for a
/// chain of compiled maps, a state and an observable.
#[derive(Debug, Clone)]
pub struct OutcomeTable {
    cells: Vec<OutcomeCell>,
    values: Vec<f64>,
    alias: WeightedAliasIndex<f64>,
}

impl OutcomeTable {
    pub fn new(maps: &[CompiledCptp], rho: &DensityMatrix, o: &Observable) -> Result<Self> {
        check_chain(maps, rho, o)?;
        let mut frontier: Vec<(Vec<usize>, f64, CMatrix)> = vec![(Vec::new(), 1.0, rho.matrix().clone())];
        for m in maps {
            let mut next = Vec::with_capacity(frontier.len() * m.branch_count());
            for (path, weight, sigma) in &frontier {
                for (i, k) in m.kraus().iter().enumerate() {
                    let out = k.sandwich(sigma);
                    if out.trace().re < MIN_BRANCH_PROB {
                        continue;
                    }
                    let mut p = path.clone();
                    p.push(i);
                    next.push((p, weight * m.weights()[i], out));
                }
            }
            frontier = next;
        }
        let mut cells = Vec::new();
        for (path, weight, sigma) in frontier {
            for (k, q) in outcome_probabilities(&sigma, o).into_iter().enumerate() {
                cells.push(OutcomeCell {
                    path: path.clone(),
                    eigen_index: k,
                    outcome: o.spectrum().values[k],
                    weight,
                    probability: q,
                });
            }
        }
        let p = checked_distribution(cells.iter().map(|c| c.probability).collect())?;
        for (cell, pi) in cells.iter_mut().zip(&p) {
            cell.probability = *pi;
        }
        let alias = WeightedAliasIndex::new(p).map_err(|e| Error::Invalid(format!("alias table: {e}")))?;
        let values = cells.iter().map(|c| c.weight * c.outcome).collect();
        Ok(Self { cells, values, alias })
    }

    pub fn cells(&self) -> &[OutcomeCell] {
        &self.cells
    }

    /// `E[value]`.
    pub fn exact_mean(&self) -> f64 {
        self.cells
            .iter()
            .zip(&self.values)
            .map(|(c, v)| c.probability * v)
            .sum()
    }

    /// `Var[value]` of a single shot.
    pub fn exact_variance(&self) -> f64 {
        let mean = self.exact_mean();
        self.cells
            .iter()
            .zip(&self.values)
            .map(|(c, v)| c.probability * (v - mean).powi(2))
            .sum()
    }

    pub fn sample_value(&self, rng: &mut impl Rng) -> f64 {
        self.values[self.alias.sample(rng)]
    }

    pub fn sample_shot(&self, rng: &mut impl Rng) -> ShotRecord {
        let cell = &self.cells[self.alias.sample(rng)];
        ShotRecord {
            branch_path: cell.path.clone(),
            outcome: cell.outcome,
            weight: cell.weight,
            value: cell.weight * cell.outcome,
        }
    }

    fn block_moments(&self, seed: u64, stream: u64, len: usize) -> Moments {
        let mut rng = stream_rng(seed, stream);
        let mut m = Moments::default();
        for _ in 0..len {
            m.push(self.sample_value(&mut rng));
        }
        m
    }

    /// `shots` shots split into [`BLOCK_SHOTS`]-sized blocks run in parallel.
    pub fn estimate(&self, shots: usize, seed: u64) -> Result<EstimatorResult> {
        if shots == 0 {
            return Err(Error::Invalid("shots must be at least 1".into()));
        }
        let blocks: Vec<(u64, usize)> = block_sizes(shots).collect();
        let parts: Vec<Moments> = blocks
            .par_iter()
            .map(|&(b, len)| self.block_moments(seed, b, len))
            .collect();
        let total = parts.into_iter().fold(Moments::default(), Moments::merge);
        Ok(total.result(seed))
    }

    /// Means of `repetitions` independent `shots`-shot estimates; repetition
    /// `j` uses stream `j` of `seed`.
    pub fn repeated_means(&self, shots: usize, repetitions: usize, seed: u64) -> Vec<f64> {
        (0..repetitions as u64)
            .into_par_iter()
            .map(|j| self.block_moments(seed, j, shots).mean)
            .collect()
    }
}

/// Estimates `Tr[(N_M ∘ … ∘ N_1)(ρ) O]` from `shots` shots with one
/// post-processing step at the end.
pub fn estimate(
    maps: &[CompiledCptp],
    rho: &DensityMatrix,
    o: &Observable,
    shots: usize,
    seed: u64,
) -> Result<EstimatorResult> {
    OutcomeTable::new(maps, rho, o)?.estimate(shots, seed)
}

fn check_obs(map_dim: usize, rho: &CMatrix, o: &Observable) -> Result<()> {
    for found in [rho.rows(), o.dim()] {
        if found != map_dim {
            return Err(Error::DimensionMismatch {
                expected: map_dim,
                found,
            });
        }
    }
    Ok(())
}

/// `Σ_i Tr[K_i ρ K_i† O²]`, signs dropped.
fn unsigned_second_moment(map: &SignedKrausMap, rho: &CMatrix, o: &Observable) -> Result<f64> {
    let o2 = o.squared();
    Ok(map.apply_unsigned(rho)?.trace_product(&o2).re)
}

/// Single-shot variance of direct sampling of the Kraus terms:
/// `Tr[Σ K_i ρ K_i† O²] − ⟨O⟩²`.
pub fn var_direct(map: &SignedKrausMap, rho: &CMatrix, o: &Observable) -> Result<f64> {
    check_obs(map.dim(), rho, o)?;
    let mean = o.expectation(&map.apply(rho)?);
    Ok(unsigned_second_moment(map, rho, o)? - mean * mean)
}

/// Single-shot variance of the compiled estimator:
/// `γ Σ Tr[K_i ρ K_i† O²] − ⟨O⟩²` with the original `K_i`.
pub fn var_ours_single(map: &SignedKrausMap, rho: &CMatrix, o: &Observable) -> Result<f64> {
    var_ours_single_with(map, compile(map)?.gamma(), rho, o)
}

/// [`var_ours_single`] with `γ` already known.
pub fn var_ours_single_with(map: &SignedKrausMap, gamma: f64, rho: &CMatrix, o: &Observable) -> Result<f64> {
    check_obs(map.dim(), rho, o)?;
    let mean = o.expectation(&map.apply(rho)?);
    Ok(gamma * unsigned_second_moment(map, rho, o)? - mean * mean)
}

/// The same quantity from the compiled form: `Σ w(i)² Tr[K̃_i ρ K̃_i† O²] − ⟨O⟩²`.
pub fn var_compiled_single(c: &CompiledCptp, rho: &CMatrix, o: &Observable) -> Result<f64> {
    check_obs(c.dim(), rho, o)?;
    let o2 = o.squared();
    let second: f64 = c
        .kraus()
        .iter()
        .zip(c.weights())
        .map(|(k, w)| w * w * k.sandwich(rho).trace_product(&o2).re)
        .sum();
    let mean = o.expectation(&c.reweighted_apply(rho)?);
    Ok(second - mean * mean)
}

/// Variance of the `shots`-shot mean.
pub fn var_ours_mean(map: &SignedKrausMap, rho: &CMatrix, o: &Observable, shots: usize) -> Result<f64> {
    if shots == 0 {
        return Err(Error::Invalid("shots must be at least 1".into()));
    }
    Ok(var_ours_single(map, rho, o)? / shots as f64)
}

/// Haar average of [`var_ours_single`] over pure inputs `ρ` (fed through the
/// noise channel `ℰ` first) and observables `U A U†`:
/// `γ Tr[ℰ(I) Σ K_i†K_i] Tr[A²]/d² − (Tr[A²] + Tr[A]²)/(d(d+1))`.
pub fn var_haar(map: &SignedKrausMap, noise: &SignedKrausMap, a: &Observable) -> Result<f64> {
    let d = map.dim();
    for found in [noise.dim(), a.dim()] {
        if found != d {
            return Err(Error::DimensionMismatch { expected: d, found });
        }
    }
    let gamma = compile(map)?.gamma();
    let e_id = noise.apply(&CMatrix::identity(d))?;
    let tr_a2 = a.squared().trace().re;
    let tr_a = a.matrix().trace().re;
    let df = d as f64;
    Ok(gamma * e_id.trace_product(&map.unsigned_gram()).re * tr_a2 / (df * df)
        - (tr_a2 + tr_a * tr_a) / (df * (df + 1.0)))
}

/// `(‖Λ‖₁/d)² − 1/(d+1)`: the Haar average for a unital noise channel and
/// a traceless involutory `A`.
pub fn var_haar_unital(choi: &impl LinearMap) -> Result<f64> {
    let d = choi.dim() as f64;
    let t = trace_norm(&choi.choi_matrix())? / d;
    Ok(t * t - 1.0 / (d + 1.0))
}

//! Experiment orchestration: the single-qubit / two-qubit mitigation grid
//! (`fig2`), the bosonic photon-loss sweep (`fig3`) and the self-check suite
//! (`verify`), with CSV/JSON outputs.

use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ChiSquared, ContinuousCDF};

use crate::channels::{
    action_distance, classify, compose, random_hptp_choi, DensityMatrix, LinearMap, Observable, SignedKrausMap,
};
use crate::compiler::{
    build_tree_plan, compile, positive_negative_baseline, verify_tree_plan, CompiledCptp, Reweighted,
};
use crate::error::{Error, Result};
use crate::haar::{haar_pure_state, haar_unitary};
use crate::io::write_json;
use crate::noise::{build_channel, invert_channel, NoiseKind, NoiseSpec};
use crate::numerics::{eig_hermitian, CMatrix};
use crate::sampler::{
    branch_probabilities, sample_branch, stream_rng, var_haar, var_haar_unital, var_ours_single_with, OutcomeTable,
};

pub const SCHEMA_VERSION: u32 = 1;
/// Environment variable capping the worker count.
pub const THREADS_ENV: &str = "HPTPC_THREADS";
/// Two-sided coverage of the variance band.
pub const BAND_COVERAGE: f64 = 0.99;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Experiment {
    Fig2,
    Fig3,
    Verify,
}

impl Experiment {
    pub fn name(self) -> &'static str {
        match self {
            Experiment::Fig2 => "fig2",
            Experiment::Fig3 => "fig3",
            Experiment::Verify => "verify",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub experiment: Experiment,
    pub kinds: Vec<NoiseKind>,
    pub deltas: Vec<f64>,
    pub dims: Vec<usize>,
    pub n_states: usize,
    pub n_observables: usize,
    /// Shots `N` per estimate.
    pub shots: usize,
    /// Independent estimates `M` per (state, observable) pair.
    pub repetitions: usize,
    /// Samples for the Monte Carlo Haar average (`fig3`, `verify`).
    pub haar_samples: usize,
    /// Random maps per property suite (`verify`).
    pub corpus_size: usize,
    /// Pair state `k` with observable `k` instead of crossing all of them.
    pub paired: bool,
    pub seed: u64,
    #[serde(default)]
    pub output: Option<PathBuf>,
    /// `verify` only: flip one Kraus sign before compiling.
    #[serde(default)]
    pub poison: bool,
}

impl ExperimentConfig {
    pub fn fig2() -> Self {
        Self {
            experiment: Experiment::Fig2,
            kinds: vec![
                NoiseKind::AmplitudeDamping,
                NoiseKind::Depolarizing,
                NoiseKind::Dephasing,
            ],
            deltas: vec![0.0, 0.1, 0.2, 0.3],
            dims: vec![2, 4],
            n_states: 10,
            n_observables: 10,
            shots: 1000,
            repetitions: 2000,
            haar_samples: 0,
            corpus_size: 0,
            paired: false,
            seed: 1,
            output: None,
            poison: false,
        }
    }

    pub fn fig3() -> Self {
        Self {
            experiment: Experiment::Fig3,
            kinds: vec![NoiseKind::PhotonLoss],
            deltas: vec![0.2],
            dims: (2..=12).collect(),
            n_states: 10,
            n_observables: 10,
            shots: 1000,
            repetitions: 500,
            haar_samples: 2000,
            corpus_size: 0,
            paired: false,
            seed: 1,
            output: None,
            poison: false,
        }
    }

    pub fn verify() -> Self {
        Self {
            experiment: Experiment::Verify,
            kinds: NoiseKind::ALL.to_vec(),
            deltas: vec![0.05, 0.1, 0.2, 0.3],
            dims: vec![2, 3, 4],
            n_states: 20,
            n_observables: 20,
            shots: 100_000,
            repetitions: 0,
            haar_samples: 2000,
            corpus_size: 200,
            paired: true,
            seed: 1,
            output: None,
            poison: false,
        }
    }

    pub fn for_experiment(e: Experiment) -> Self {
        match e {
            Experiment::Fig2 => Self::fig2(),
            Experiment::Fig3 => Self::fig3(),
            Experiment::Verify => Self::verify(),
        }
    }

    /// Reduced counts for smoke runs.
    pub fn quick(mut self) -> Self {
        match self.experiment {
            Experiment::Fig2 => {
                self.n_states = 3;
                self.n_observables = 3;
                self.shots = 200;
                self.repetitions = 200;
            }
            Experiment::Fig3 => {
                self.n_states = 2;
                self.n_observables = 2;
                self.shots = 200;
                self.repetitions = 100;
                self.haar_samples = 200;
            }
            Experiment::Verify => {
                self.n_states = 5;
                self.n_observables = 5;
                self.shots = 20_000;
                self.haar_samples = 500;
                self.corpus_size = 40;
            }
        }
        self
    }

    /// Large-scale repetition counts (10⁴ estimates per point).
    pub fn full(mut self) -> Self {
        match self.experiment {
            Experiment::Fig2 => self.repetitions = 10_000,
            Experiment::Fig3 => {
                self.repetitions = 10_000;
                self.haar_samples = 10_000;
            }
            Experiment::Verify => {
                self.shots = 1_000_000;
                self.haar_samples = 10_000;
            }
        }
        self
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if self.kinds.is_empty() || self.deltas.is_empty() || self.dims.is_empty() {
            return bad("kinds, deltas and dims must be nonempty".into());
        }
        for (name, v) in [
            ("n_states", self.n_states),
            ("n_observables", self.n_observables),
            ("shots", self.shots),
        ] {
            if v == 0 {
                return bad(format!("{name} must be at least 1"));
            }
        }
        match self.experiment {
            Experiment::Fig2 => {
                if self.repetitions < 2 {
                    return bad("repetitions must be at least 2".into());
                }
                if let Some(d) = self.dims.iter().find(|d| !matches!(d, 2 | 4)) {
                    return bad(format!("fig2 dims must be 2 or 4, got {d}"));
                }
                if self.kinds.contains(&NoiseKind::PhotonLoss) {
                    return bad("fig2 uses qubit noise kinds".into());
                }
            }
            Experiment::Fig3 => {
                if self.repetitions < 2 || self.haar_samples < 2 {
                    return bad("repetitions and haar_samples must be at least 2".into());
                }
                if self.kinds != [NoiseKind::PhotonLoss] {
                    return bad("fig3 uses photon_loss only".into());
                }
                if self.dims.iter().any(|&d| d < 2) {
                    return bad("fig3 dims must be at least 2".into());
                }
            }
            Experiment::Verify => {
                if self.corpus_size == 0 || self.haar_samples < 2 {
                    return bad("corpus_size and haar_samples must be positive".into());
                }
            }
        }
        for &kind in &self.kinds {
            for &delta in &self.deltas {
                if !(0.0..kind.max_invertible_delta()).contains(&delta) {
                    return bad(format!("delta {delta} outside the invertible range of {kind}"));
                }
            }
        }
        Ok(())
    }
}

/// SplitMix64 finalizer.
fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Child seed of `seed` addressed by `path`.
pub fn derive_seed(seed: u64, path: &[u64]) -> u64 {
    path.iter().fold(mix(seed), |acc, &p| mix(acc ^ mix(p)))
}

const TAG_INSTANCES: u64 = 1;
const TAG_FIG2: u64 = 2;
const TAG_FIG3: u64 = 3;
const TAG_HAAR_MC: u64 = 4;

fn kind_tag(kind: NoiseKind) -> u64 {
    NoiseKind::ALL.iter().position(|k| *k == kind).unwrap_or(0) as u64
}

/// One row of a result table. Columns that do not apply to an experiment
/// are left empty.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    pub schema_version: u32,
    pub experiment: String,
    pub kind: String,
    pub delta: f64,
    pub dim: usize,
    pub seed: u64,
    pub pairs: usize,
    pub shots: usize,
    pub repetitions: usize,
    /// Mean over pairs of the sample variance of `M` estimator means.
    pub var_mean_empirical: f64,
    /// Mean over pairs of the predicted variance of the mean, `var_single/N`.
    pub var_mean_predicted: f64,
    pub band_low: f64,
    pub band_high: f64,
    pub in_band: bool,
    pub var_single_empirical: f64,
    pub var_single_predicted: f64,
    pub var_single_haar: f64,
    pub var_single_haar_mc: Option<f64>,
    pub haar_mc_stderr: Option<f64>,
    pub gamma: f64,
    pub source_rank: usize,
    pub compiled_rank: usize,
    pub tree_depth: usize,
    pub baseline_rank_pos: usize,
    pub baseline_rank_neg: usize,
    pub baseline_eta_pos: f64,
    pub baseline_eta_neg: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultTable {
    pub rows: Vec<ResultRow>,
}

impl ResultTable {
    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        for row in &self.rows {
            w.serialize(row)?;
        }
        let bytes = w.into_inner().map_err(|e| Error::Io(e.into_error()))?;
        String::from_utf8(bytes).map_err(|e| Error::Invalid(e.to_string()))
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let mut r = csv::Reader::from_reader(text.as_bytes());
        let rows = r.deserialize().collect::<std::result::Result<Vec<ResultRow>, _>>()?;
        Ok(Self { rows })
    }

    pub fn all_in_band(&self) -> bool {
        self.rows.iter().all(|r| r.in_band)
    }
}

/// Two-sided `coverage` band for the mean of sample variances with true
/// variances `sigma2` and `dof` degrees of freedom each. The mean is
/// approximated by a scaled chi-square with Welch–Satterthwaite degrees of
/// freedom `(Σσ²)² dof / Σσ⁴`.
pub fn variance_band(sigma2: &[f64], dof: usize, coverage: f64) -> (f64, f64) {
    let n = sigma2.len() as f64;
    let mu = sigma2.iter().sum::<f64>() / n;
    let s4: f64 = sigma2.iter().map(|s| s * s).sum();
    if mu <= 0.0 || s4 <= 0.0 {
        return (0.0, 0.0);
    }
    let nu = (n * mu).powi(2) * dof as f64 / s4;
    let chi = ChiSquared::new(nu).expect("positive degrees of freedom");
    let tail = (1.0 - coverage) / 2.0;
    (mu * chi.inverse_cdf(tail) / nu, mu * chi.inverse_cdf(1.0 - tail) / nu)
}

fn sample_variance(xs: &[f64]) -> f64 {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)
}

/// Haar-random inputs shared by every grid point of one dimension.
struct Instances {
    states: Vec<DensityMatrix>,
    unitaries: Vec<CMatrix>,
}

impl Instances {
    fn new(cfg: &ExperimentConfig, dim: usize) -> Self {
        let mut rng = stream_rng(derive_seed(cfg.seed, &[TAG_INSTANCES, dim as u64]), 0);
        let states = (0..cfg.n_states).map(|_| haar_pure_state(dim, &mut rng)).collect();
        let unitaries = (0..cfg.n_observables).map(|_| haar_unitary(dim, &mut rng)).collect();
        Self { states, unitaries }
    }

    fn pairs(&self, paired: bool) -> Vec<(usize, usize)> {
        if paired {
            (0..self.states.len().min(self.unitaries.len()))
                .map(|k| (k, k))
                .collect()
        } else {
            (0..self.states.len())
                .flat_map(|s| (0..self.unitaries.len()).map(move |o| (s, o)))
                .collect()
        }
    }
}

/// Everything computed once per (kind, δ, dim).
struct GridPoint {
    kind: NoiseKind,
    delta: f64,
    channel: SignedKrausMap,
    inverse: SignedKrausMap,
    compiled: CompiledCptp,
    tree_depth: usize,
    base_pos: usize,
    base_neg: usize,
    eta_pos: f64,
    eta_neg: f64,
    observable: Observable,
}

impl GridPoint {
    fn new(spec: NoiseSpec, observable: Observable) -> Result<Self> {
        let channel = build_channel(&spec)?;
        let inverse = invert_channel(&spec)?;
        let compiled = compile(&inverse)?;
        let plan = build_tree_plan(&compiled)?;
        let baseline = positive_negative_baseline(&inverse)?;
        Ok(Self {
            kind: spec.kind,
            delta: spec.delta,
            channel,
            inverse,
            tree_depth: plan.depth,
            compiled,
            base_pos: baseline.rank_pos(),
            base_neg: baseline.rank_neg(),
            eta_pos: baseline.eta_pos,
            eta_neg: baseline.eta_neg,
            observable,
        })
    }

    fn dim(&self) -> usize {
        self.compiled.dim()
    }

    /// Noisy input `ℰ(ρ)`.
    fn noisy(&self, rho: &DensityMatrix) -> Result<DensityMatrix> {
        DensityMatrix::new(self.channel.apply(rho.matrix())?)
    }

    /// Shot-level variance statistics over all (state, observable) pairs.
    fn shot_statistics(&self, cfg: &ExperimentConfig, inst: &Instances, seed: u64) -> Result<ShotStats> {
        let pairs = inst.pairs(cfg.paired);
        let per_pair: Vec<(f64, f64)> = pairs
            .par_iter()
            .enumerate()
            .map(|(k, &(s, o))| -> Result<(f64, f64)> {
                let input = self.noisy(&inst.states[s])?;
                let obs = self.observable.rotated(&inst.unitaries[o])?;
                let predicted = var_ours_single_with(&self.inverse, self.compiled.gamma(), input.matrix(), &obs)?;
                let table = OutcomeTable::new(std::slice::from_ref(&self.compiled), &input, &obs)?;
                let means = table.repeated_means(cfg.shots, cfg.repetitions, derive_seed(seed, &[k as u64]));
                Ok((sample_variance(&means), predicted))
            })
            .collect::<Result<_>>()?;
        let n = cfg.shots as f64;
        let p = per_pair.len() as f64;
        let empirical = per_pair.iter().map(|x| x.0).sum::<f64>() / p;
        let predicted_single = per_pair.iter().map(|x| x.1).sum::<f64>() / p;
        let sigma2: Vec<f64> = per_pair.iter().map(|x| x.1 / n).collect();
        let (lo, hi) = variance_band(&sigma2, cfg.repetitions - 1, BAND_COVERAGE);
        let in_band = if hi == 0.0 {
            empirical.abs() <= 1e-15
        } else {
            (lo..=hi).contains(&empirical)
        };
        Ok(ShotStats {
            pairs: pairs.len(),
            empirical,
            predicted: predicted_single / n,
            band: (lo, hi),
            in_band,
        })
    }

    fn row(&self, cfg: &ExperimentConfig, seed: u64, stats: &ShotStats) -> Result<ResultRow> {
        let n = cfg.shots as f64;
        Ok(ResultRow {
            schema_version: SCHEMA_VERSION,
            experiment: cfg.experiment.name().into(),
            kind: self.kind.name().into(),
            delta: self.delta,
            dim: self.dim(),
            seed,
            pairs: stats.pairs,
            shots: cfg.shots,
            repetitions: cfg.repetitions,
            var_mean_empirical: stats.empirical,
            var_mean_predicted: stats.predicted,
            band_low: stats.band.0,
            band_high: stats.band.1,
            in_band: stats.in_band,
            var_single_empirical: stats.empirical * n,
            var_single_predicted: stats.predicted * n,
            var_single_haar: var_haar(&self.inverse, &self.channel, &self.observable)?,
            var_single_haar_mc: None,
            haar_mc_stderr: None,
            gamma: self.compiled.gamma(),
            source_rank: self.compiled.source_rank(),
            compiled_rank: self.compiled.branch_count(),
            tree_depth: self.tree_depth,
            baseline_rank_pos: self.base_pos,
            baseline_rank_neg: self.base_neg,
            baseline_eta_pos: self.eta_pos,
            baseline_eta_neg: self.eta_neg,
        })
    }
}

struct ShotStats {
    pairs: usize,
    empirical: f64,
    predicted: f64,
    band: (f64, f64),
    in_band: bool,
}

fn sorted<T: Clone + PartialOrd>(xs: &[T]) -> Vec<T> {
    let mut v = xs.to_vec();
    v.sort_by(|a, b| a.partial_cmp(b).expect("finite grid values"));
    v.dedup();
    v
}

/// Qubit mitigation grid: rows sorted by (kind, δ, dim).
pub fn run_fig2(cfg: &ExperimentConfig) -> Result<ResultTable> {
    cfg.validate()?;
    let dims = sorted(&cfg.dims);
    let instances: Vec<Instances> = dims.iter().map(|&d| Instances::new(cfg, d)).collect();
    let mut rows = Vec::new();
    for kind in sorted(&cfg.kinds) {
        for delta in sorted(&cfg.deltas) {
            for (dim, inst) in dims.iter().zip(&instances) {
                let qubits = dim.trailing_zeros() as usize;
                let point = GridPoint::new(NoiseSpec::qubit(kind, qubits, delta), Observable::z_string(qubits))?;
                let seed = derive_seed(cfg.seed, &[TAG_FIG2, kind_tag(kind), delta.to_bits(), *dim as u64]);
                let stats = point.shot_statistics(cfg, inst, seed)?;
                rows.push(point.row(cfg, seed, &stats)?);
            }
        }
    }
    Ok(ResultTable { rows })
}

/// Mean and standard error of `var_ours_single` over `samples` Haar-random
/// pure inputs (through the noise channel) and observables `U A U†`.
pub fn haar_monte_carlo(
    inverse: &SignedKrausMap,
    gamma: f64,
    channel: &SignedKrausMap,
    a: &Observable,
    samples: usize,
    seed: u64,
) -> Result<(f64, f64)> {
    let d = inverse.dim();
    let values: Vec<f64> = (0..samples as u64)
        .into_par_iter()
        .map(|t| -> Result<f64> {
            let mut rng = stream_rng(seed, t);
            let rho = haar_pure_state(d, &mut rng);
            let obs = a.rotated(&haar_unitary(d, &mut rng))?;
            var_ours_single_with(inverse, gamma, &channel.apply(rho.matrix())?, &obs)
        })
        .collect::<Result<_>>()?;
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    Ok((mean, (sample_variance(&values) / n).sqrt()))
}

/// Photon-loss sweep over the dimension grid.
pub fn run_fig3(cfg: &ExperimentConfig) -> Result<ResultTable> {
    cfg.validate()?;
    let mut rows = Vec::new();
    for dim in sorted(&cfg.dims) {
        let inst = Instances::new(cfg, dim);
        for delta in sorted(&cfg.deltas) {
            let point = GridPoint::new(NoiseSpec::photon_loss(dim, delta), Observable::fock_parity_top(dim))?;
            let seed = derive_seed(cfg.seed, &[TAG_FIG3, delta.to_bits(), dim as u64]);
            let stats = point.shot_statistics(cfg, &inst, seed)?;
            let mut row = point.row(cfg, seed, &stats)?;
            let (mc, se) = haar_monte_carlo(
                &point.inverse,
                point.compiled.gamma(),
                &point.channel,
                &point.observable,
                cfg.haar_samples,
                derive_seed(seed, &[TAG_HAAR_MC]),
            )?;
            row.var_single_haar_mc = Some(mc);
            row.haar_mc_stderr = Some(se);
            rows.push(row);
        }
    }
    Ok(ResultTable { rows })
}

/// One property of the verification suite.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckResult {
    pub name: String,
    pub passed: bool,
    /// Worst residual (or statistic) observed.
    pub measured: f64,
    pub tolerance: f64,
    pub detail: String,
}

impl CheckResult {
    fn bound(name: &str, measured: f64, tolerance: f64, detail: impl Into<String>) -> Self {
        Self {
            name: name.into(),
            passed: measured.is_finite() && measured <= tolerance,
            measured,
            tolerance,
            detail: detail.into(),
        }
    }

    fn error(name: &str, err: &Error) -> Self {
        let measured = match err {
            Error::NotTracePreserving { residual } => *residual,
            _ => f64::NAN,
        };
        Self {
            name: name.into(),
            passed: false,
            measured,
            tolerance: f64::NAN,
            detail: format!("error: {err}"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerifyReport {
    pub checks: Vec<CheckResult>,
}

impl VerifyReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    /// Same information as a result table, one row per check, for the CSV output.
    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        for c in &self.checks {
            w.serialize(c)?;
        }
        let bytes = w.into_inner().map_err(|e| Error::Io(e.into_error()))?;
        String::from_utf8(bytes).map_err(|e| Error::Invalid(e.to_string()))
    }
}

fn run_check(name: &str, f: impl FnOnce() -> Result<CheckResult>) -> CheckResult {
    f().unwrap_or_else(|e| CheckResult::error(name, &e))
}

fn max_of(xs: impl IntoIterator<Item = f64>) -> f64 {
    xs.into_iter().fold(0.0, f64::max)
}

fn random_corpus(cfg: &ExperimentConfig, tag: u64) -> Vec<SignedKrausMap> {
    let mut rng = stream_rng(derive_seed(cfg.seed, &[tag]), 0);
    (0..cfg.corpus_size)
        .filter_map(|k| {
            let d = cfg.dims[k % cfg.dims.len()];
            random_hptp_choi(d, &mut rng).to_signed_kraus().ok()
        })
        .collect()
}

fn qem_specs(cfg: &ExperimentConfig) -> Vec<NoiseSpec> {
    let mut specs = Vec::new();
    for &kind in &cfg.kinds {
        for &delta in &cfg.deltas {
            if delta >= kind.max_invertible_delta() {
                continue;
            }
            if kind == NoiseKind::PhotonLoss {
                specs.extend((2..=12).map(|d| NoiseSpec::photon_loss(d, delta)));
            } else {
                specs.extend((1..=2).map(|q| NoiseSpec::qubit(kind, q, delta)));
            }
        }
    }
    specs
}

/// Runs every property suite; `cfg.poison` corrupts one map to show that
/// the checks fail loudly.
pub fn run_verify(cfg: &ExperimentConfig) -> Result<VerifyReport> {
    cfg.validate()?;
    let corpus = random_corpus(cfg, 11);
    let mut checks = Vec::new();

    checks.push(run_check("numerics: eigen reconstruction (d <= 16)", || {
        let mut rng = stream_rng(derive_seed(cfg.seed, &[12]), 0);
        let mut worst = 0.0f64;
        for d in 1..=16 {
            let g = crate::haar::ginibre(d, &mut rng);
            let a = (&g + &g.adjoint()).scale(0.5);
            let e = eig_hermitian(&a)?;
            let recon = e.reconstruct_with(|x| x);
            let scale = e.op_norm().max(f64::MIN_POSITIVE);
            worst = worst.max((&recon - &a).sup_norm() / scale);
            worst = worst.max((e.vectors.adjoint() * &e.vectors).identity_residual());
        }
        Ok(CheckResult::bound(
            "numerics: eigen reconstruction (d <= 16)",
            worst,
            1e-9,
            "relative to op norm",
        ))
    }));

    checks.push(run_check("channels: representation round trips", || {
        let mut worst = 0.0f64;
        for m in &corpus {
            let choi = m.choi();
            let sup = m.superop();
            worst = worst
                .max(action_distance(&choi.to_signed_kraus()?, m)?)
                .max(action_distance(&sup.to_choi(), m)?)
                .max(action_distance(&sup.to_signed_kraus()?, m)?)
                .max(action_distance(&choi.to_superop(), m)?);
        }
        Ok(CheckResult::bound(
            "channels: representation round trips",
            worst,
            1e-9,
            format!("{} random HPTP maps", corpus.len()),
        ))
    }));

    checks.push(run_check("compiler: TP precondition", || {
        let spec = NoiseSpec::qubit(NoiseKind::Depolarizing, 1, 0.2);
        let mut map = invert_channel(&spec)?;
        if cfg.poison {
            map = map.with_flipped_sign(0);
        }
        let residual = map.tp_residual();
        let detail = match compile(&map) {
            Ok(_) => "depolarizing inverse compiled".to_string(),
            Err(e) => format!("compile rejected the map: {e}"),
        };
        Ok(CheckResult::bound(
            "compiler: TP precondition",
            residual,
            crate::numerics::TOL.tp,
            if cfg.poison {
                format!("poisoned (sign of Kraus term 0 flipped); {detail}")
            } else {
                detail
            },
        ))
    }));

    checks.push(run_check("compiler: reweighted action equals the map", || {
        let mut worst = 0.0f64;
        let mut structural = true;
        for m in &corpus {
            let c = compile(m)?;
            worst = worst.max(action_distance(&Reweighted(&c), m)?);
            structural &= classify(&c.as_channel()?).is_cptp() && c.branch_count() <= m.rank() + 1 && c.gamma() >= 1.0;
        }
        let mut r = CheckResult::bound("compiler: reweighted action equals the map", worst, 1e-9, "");
        r.passed &= structural;
        r.detail = format!("CPTP, rank <= r+1, gamma >= 1: {structural}");
        Ok(r)
    }));

    checks.push(run_check("compiler: tree plans", || {
        let mut maps: Vec<SignedKrausMap> = corpus.clone();
        for d in 2..=8 {
            maps.push(invert_channel(&NoiseSpec::photon_loss(d, 0.2))?);
        }
        let mut failures = 0;
        let mut worst = 0.0f64;
        for m in &maps {
            let c = compile(m)?;
            let report = verify_tree_plan(&build_tree_plan(&c)?, &c);
            worst = worst
                .max(report.max_node_completeness())
                .max(report.max_path_reconstruction());
            failures += usize::from(!report.passed());
        }
        let mut r = CheckResult::bound("compiler: tree plans", worst, 1e-9, format!("{failures} failing plans"));
        r.passed &= failures == 0;
        Ok(r)
    }));

    checks.push(run_check("compiler: baseline split identity", || {
        let mut worst = 0.0f64;
        for m in &corpus {
            let split = positive_negative_baseline(m)?;
            for e in crate::channels::operator_basis(m.dim()) {
                let diff = &split.apply(&e)? - &m.apply(&e)?;
                worst = worst.max(diff.sup_norm() / split.eta_pos);
            }
        }
        Ok(CheckResult::bound(
            "compiler: baseline split identity",
            worst,
            1e-9,
            "relative to eta_pos",
        ))
    }));

    checks.push(run_check("noise: inverse composed with channel", || {
        let mut worst = 0.0f64;
        let specs = qem_specs(cfg);
        for spec in &specs {
            let id = compose(&invert_channel(spec)?, &build_channel(spec)?)?;
            worst = worst.max(action_distance(&id, &SignedKrausMap::identity(spec.dim))?);
        }
        Ok(CheckResult::bound(
            "noise: inverse composed with channel",
            worst,
            1e-9,
            format!("{} specs", specs.len()),
        ))
    }));

    checks.push(run_check("noise: photon-loss ranks d and d+1", || {
        let mut mismatches = Vec::new();
        for d in 2..=12 {
            let c = compile(&invert_channel(&NoiseSpec::photon_loss(d, 0.2))?)?;
            if c.source_rank() != d || c.branch_count() != d + 1 {
                mismatches.push(format!("d={d}: {}/{}", c.source_rank(), c.branch_count()));
            }
        }
        let mut r = CheckResult::bound("noise: photon-loss ranks d and d+1", mismatches.len() as f64, 0.0, "");
        r.detail = mismatches.join(", ");
        Ok(r)
    }));

    checks.push(run_check("sampler: Haar formula, unital form and closed value", || {
        let z = Observable::pauli_z();
        let mut worst = 0.0f64;
        for kind in [NoiseKind::Depolarizing, NoiseKind::Dephasing] {
            for delta in [0.05, 0.1, 0.2, 0.3] {
                let spec = NoiseSpec::qubit(kind, 1, delta);
                let inv = invert_channel(&spec)?;
                let a = var_haar(&inv, &build_channel(&spec)?, &z)?;
                worst = worst.max((a - var_haar_unital(&inv)?).abs());
            }
        }
        let spec = NoiseSpec::qubit(NoiseKind::Depolarizing, 1, 0.2);
        let v = var_haar(&invert_channel(&spec)?, &build_channel(&spec)?, &z)?;
        worst = worst.max((v - (1.890625 - 1.0 / 3.0)).abs());
        Ok(CheckResult::bound(
            "sampler: Haar formula, unital form and closed value",
            worst,
            1e-9,
            format!("depolarizing inverse delta=0.2: {v:.6}"),
        ))
    }));

    checks.push(run_check("sampler: Haar Monte Carlo vs formula", || {
        let spec = NoiseSpec::qubit(NoiseKind::Depolarizing, 1, 0.2);
        let inv = invert_channel(&spec)?;
        let ch = build_channel(&spec)?;
        let z = Observable::pauli_z();
        let formula = var_haar(&inv, &ch, &z)?;
        let gamma = compile(&inv)?.gamma();
        let (mc, se) = haar_monte_carlo(&inv, gamma, &ch, &z, cfg.haar_samples, derive_seed(cfg.seed, &[13]))?;
        Ok(CheckResult::bound(
            "sampler: Haar Monte Carlo vs formula",
            (mc - formula).abs() / formula,
            0.05,
            format!("mc {mc:.5} +- {se:.5}, formula {formula:.5}"),
        ))
    }));

    checks.push(run_check("sampler: estimator unbiasedness", || {
        let spec = NoiseSpec::qubit(NoiseKind::Depolarizing, 1, 0.2);
        let ch = build_channel(&spec)?;
        let inv = invert_channel(&spec)?;
        let c = compile(&inv)?;
        let mut rng = stream_rng(derive_seed(cfg.seed, &[14]), 0);
        let mut worst = 0.0f64;
        for _ in 0..cfg.n_states {
            let rho = haar_pure_state(2, &mut rng);
            let o = Observable::pauli_z().rotated(&haar_unitary(2, &mut rng))?;
            let input = DensityMatrix::new(ch.apply(rho.matrix())?)?;
            let est = OutcomeTable::new(std::slice::from_ref(&c), &input, &o)?.estimate(cfg.shots, rng.random())?;
            let sd = (var_ours_single_with(&inv, c.gamma(), input.matrix(), &o)? / cfg.shots as f64).sqrt();
            let z = (est.mean - o.expectation(rho.matrix())).abs() / sd;
            worst = worst.max(z);
        }
        Ok(CheckResult::bound(
            "sampler: estimator unbiasedness",
            worst,
            5.0,
            format!("max |z| over {} pairs, N = {}", cfg.n_states, cfg.shots),
        ))
    }));

    checks.push(run_check(
        "sampler: Kraus-level vs tree-level branch frequencies",
        || {
            let c = compile(&invert_channel(&NoiseSpec::photon_loss(4, 0.2))?)?;
            let plan = build_tree_plan(&c)?;
            let mut rng = stream_rng(derive_seed(cfg.seed, &[15]), 0);
            let rho = haar_pure_state(4, &mut rng);
            let n = 20_000;
            let mut counts = [vec![0usize; c.branch_count()], vec![0usize; c.branch_count()]];
            for _ in 0..n {
                counts[0][sample_branch(&c, &rho, &mut rng)?.0] += 1;
                counts[1][plan.sample(rho.matrix(), &mut rng)?.0] += 1;
            }
            let p = branch_probabilities(&c, rho.matrix())?;
            let worst = max_of((0..p.len()).map(|i| {
                let sd = (2.0 * n as f64 * p[i] * (1.0 - p[i])).sqrt().max(1.0);
                (counts[0][i] as f64 - counts[1][i] as f64).abs() / sd
            }));
            Ok(CheckResult::bound(
                "sampler: Kraus-level vs tree-level branch frequencies",
                worst,
                4.0,
                "max |difference| in multinomial sigmas",
            ))
        },
    ));

    checks.push(run_check("sampler: thread-count independence", || {
        let c = compile(&invert_channel(&NoiseSpec::qubit(NoiseKind::Dephasing, 1, 0.2))?)?;
        let table = OutcomeTable::new(&[c], &DensityMatrix::maximally_mixed(2), &Observable::pauli_z())?;
        let a = with_threads(Some(1), || table.estimate(50_000, cfg.seed))?;
        let b = with_threads(Some(4), || table.estimate(50_000, cfg.seed))?;
        let diff = (a.mean - b.mean).abs() + (a.empirical_variance_of_mean - b.empirical_variance_of_mean).abs();
        Ok(CheckResult::bound(
            "sampler: thread-count independence",
            diff,
            0.0,
            "1 vs 4 workers",
        ))
    }));

    Ok(VerifyReport { checks })
}

/// Worker cap from `HPTPC_THREADS`, if set to a positive integer.
pub fn threads_from_env() -> Option<usize> {
    std::env::var(THREADS_ENV)
        .ok()
        .and_then(|s| s.trim().parse::<usize>().ok())
        .filter(|&n| n > 0)
}

/// Runs `f` on a dedicated pool of `threads` workers (rayon's default when `None`).
pub fn with_threads<T: Send>(threads: Option<usize>, f: impl FnOnce() -> T + Send) -> T {
    match threads {
        Some(n) => rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build()
            .expect("thread pool")
            .install(f),
        None => f(),
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RowSeed {
    pub kind: String,
    pub delta: f64,
    pub dim: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunManifest {
    pub schema_version: u32,
    pub crate_version: String,
    pub experiment: Experiment,
    pub config: ExperimentConfig,
    pub master_seed: u64,
    pub row_seeds: Vec<RowSeed>,
    pub workers: usize,
    pub elapsed_seconds: f64,
    pub passed: bool,
}

/// Outcome of one harness run.
#[derive(Debug, Clone)]
pub enum RunOutput {
    Table(ResultTable),
    Verify(VerifyReport),
}

impl RunOutput {
    pub fn passed(&self) -> bool {
        match self {
            RunOutput::Table(t) => t.all_in_band(),
            RunOutput::Verify(r) => r.passed(),
        }
    }

    pub fn to_csv(&self) -> Result<String> {
        match self {
            RunOutput::Table(t) => t.to_csv(),
            RunOutput::Verify(r) => r.to_csv(),
        }
    }
}

pub fn run(cfg: &ExperimentConfig) -> Result<RunOutput> {
    Ok(match cfg.experiment {
        Experiment::Fig2 => RunOutput::Table(run_fig2(cfg)?),
        Experiment::Fig3 => RunOutput::Table(run_fig3(cfg)?),
        Experiment::Verify => RunOutput::Verify(run_verify(cfg)?),
    })
}

/// Runs `cfg` under the worker cap and writes `results.csv`, `results.json`
/// and `run_manifest.json` into `dir`.
pub fn run_to_dir(cfg: &ExperimentConfig, dir: &Path, threads: Option<usize>) -> Result<(RunOutput, RunManifest)> {
    let start = Instant::now();
    let (output, workers) = with_threads(threads, || (run(cfg), rayon::current_num_threads()));
    let output = output?;
    std::fs::create_dir_all(dir)?;
    std::fs::write(dir.join("results.csv"), output.to_csv()?)?;
    match &output {
        RunOutput::Table(t) => write_json(dir.join("results.json"), t)?,
        RunOutput::Verify(r) => write_json(dir.join("results.json"), r)?,
    }
    let row_seeds = match &output {
        RunOutput::Table(t) => t
            .rows
            .iter()
            .map(|r| RowSeed {
                kind: r.kind.clone(),
                delta: r.delta,
                dim: r.dim,
                seed: r.seed,
            })
            .collect(),
        RunOutput::Verify(_) => Vec::new(),
    };
    let manifest = RunManifest {
        schema_version: SCHEMA_VERSION,
        crate_version: env!("CARGO_PKG_VERSION").into(),
        experiment: cfg.experiment,
        config: cfg.clone(),
        master_seed: cfg.seed,
        row_seeds,
        workers,
        elapsed_seconds: start.elapsed().as_secs_f64(),
        passed: output.passed(),
    };
    write_json(dir.join("run_manifest.json"), &manifest)?;
    Ok((output, manifest))
}

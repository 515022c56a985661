//! Acceptance criteria: one `[PASS]`/`[FAIL]` line per criterion, then a
//! single assertion over all of them. Run with `--nocapture` to see the lines.

use std::fs;
use std::process::Command;
use std::time::{Duration, Instant};

use hptp_core::channels::{
    action_distance, classify, compose, random_hptp_choi, DensityMatrix, LinearMap, Observable, SignedKrausMap,
};
use hptp_core::compiler::{build_tree_plan, compile, verify_tree_plan, Reweighted};
use hptp_core::haar::{haar_pure_state, haar_unitary};
use hptp_core::harness::{derive_seed, haar_monte_carlo, run_fig2, ExperimentConfig};
use hptp_core::io::MapFile;
use hptp_core::noise::{build_channel, invert_channel, NoiseKind, NoiseSpec};
use hptp_core::sampler::{stream_rng, var_haar, var_haar_unital, var_ours_mean, OutcomeTable};
use hptp_core::Result;

const SEED: u64 = 20_240_601;
const DELTAS: [f64; 4] = [0.05, 0.1, 0.2, 0.3];
const QUBIT_KINDS: [NoiseKind; 3] = [
    NoiseKind::AmplitudeDamping,
    NoiseKind::Depolarizing,
    NoiseKind::Dephasing,
];

struct Outcome {
    id: usize,
    name: &'static str,
    passed: bool,
    summary: String,
    elapsed: Duration,
    limit: Duration,
}

fn criterion(id: usize, name: &'static str, limit_s: u64, f: impl FnOnce() -> Result<(bool, String)>) -> Outcome {
    let start = Instant::now();
    let (passed, summary) = f().unwrap_or_else(|e| (false, format!("error: {e}")));
    let elapsed = start.elapsed();
    let limit = Duration::from_secs(limit_s);
    let o = Outcome {
        id,
        name,
        passed: passed && elapsed <= limit,
        summary,
        elapsed,
        limit,
    };
    println!(
        "[{}] {:>2}. {:<28} {} ({:.1} s, limit {} s)",
        if o.passed { "PASS" } else { "FAIL" },
        o.id,
        o.name,
        o.summary,
        o.elapsed.as_secs_f64(),
        o.limit.as_secs()
    );
    o
}

fn corpus() -> Vec<SignedKrausMap> {
    let mut rng = stream_rng(derive_seed(SEED, &[1]), 0);
    (0..200)
        .map(|k| {
            random_hptp_choi([2, 3, 4][k % 3], &mut rng)
                .to_signed_kraus()
                .expect("random HPTP map decomposes")
        })
        .collect()
}

fn qubit_specs() -> Vec<NoiseSpec> {
    let mut specs = Vec::new();
    for kind in QUBIT_KINDS {
        for delta in DELTAS {
            specs.extend((1..=2).map(|q| NoiseSpec::qubit(kind, q, delta)));
        }
    }
    specs
}

fn round_trip(maps: &[SignedKrausMap]) -> Result<(bool, String)> {
    let mut worst = 0.0f64;
    for m in maps {
        let choi = m.choi();
        let sup = m.superop();
        let json = serde_json::to_string(&MapFile::from_kraus(m)).expect("serialize");
        let back: MapFile = serde_json::from_str(&json).expect("deserialize");
        for d in [
            action_distance(&choi.to_signed_kraus()?, m)?,
            action_distance(&sup.to_signed_kraus()?, m)?,
            action_distance(&choi.to_superop(), m)?,
            action_distance(&sup.to_choi(), m)?,
            action_distance(&choi.to_superop().to_choi(), m)?,
            action_distance(&sup.to_choi().to_superop(), m)?,
            action_distance(&back.to_signed_kraus()?, m)?,
            action_distance(&MapFile::from_choi(&choi).to_signed_kraus()?, m)?,
            action_distance(&MapFile::from_superop(&sup).to_signed_kraus()?, m)?,
        ] {
            worst = worst.max(d);
        }
    }
    Ok((
        worst <= 1e-9,
        format!("{} maps, worst action error {worst:.2e} (tol 1e-9)", maps.len()),
    ))
}

fn compile_correctness(maps: &[SignedKrausMap]) -> Result<(bool, String)> {
    let mut worst = 0.0f64;
    let mut structural_failures = 0;
    let mut overhead = 0;
    for m in maps {
        let c = compile(m)?;
        worst = worst.max(action_distance(&Reweighted(&c), m)?);
        overhead += usize::from(c.gamma() > 1.0);
        let ok = classify(&c.as_channel()?).is_cptp() && c.branch_count() <= m.rank() + 1 && c.gamma() >= 1.0;
        structural_failures += usize::from(!ok);
    }
    Ok((
        worst <= 1e-9 && structural_failures == 0,
        format!(
            "worst Σw·K̃ρK̃† error {worst:.2e} (tol 1e-9), {overhead}/{} with γ > 1, {structural_failures} CPTP/rank/γ failures",
            maps.len()
        ),
    ))
}

fn inversion() -> Result<(bool, String)> {
    let mut specs = qubit_specs();
    for delta in DELTAS {
        specs.extend((2..=12).map(|d| NoiseSpec::photon_loss(d, delta)));
    }
    let mut worst = 0.0f64;
    for spec in &specs {
        let product = invert_channel(spec)?.superop().matrix() * build_channel(spec)?.superop().matrix();
        worst = worst.max(product.identity_residual());
    }
    Ok((
        worst <= 1e-9,
        format!("{} specs, worst |S_inv·S − I| {worst:.2e} (tol 1e-9)", specs.len()),
    ))
}

fn photon_loss_ranks() -> Result<(bool, String)> {
    let mut mismatches = Vec::new();
    for d in 2..=12 {
        let c = compile(&invert_channel(&NoiseSpec::photon_loss(d, 0.2))?)?;
        if c.source_rank() != d || c.branch_count() != d + 1 {
            mismatches.push(format!("d={d}: {}/{}", c.source_rank(), c.branch_count()));
        }
    }
    Ok((
        mismatches.is_empty(),
        if mismatches.is_empty() {
            "source rank d, compiled rank d+1 for d = 2..12".into()
        } else {
            format!("mismatches {}", mismatches.join(", "))
        },
    ))
}

fn unbiasedness() -> Result<(bool, String)> {
    let spec = NoiseSpec::qubit(NoiseKind::Depolarizing, 1, 0.2);
    let channel = build_channel(&spec)?;
    let inverse = invert_channel(&spec)?;
    let c = compile(&inverse)?;
    let shots = 100_000;
    let mut rng = stream_rng(derive_seed(SEED, &[5]), 0);
    let mut worst = 0.0f64;
    for k in 0..20u64 {
        let rho = haar_pure_state(2, &mut rng);
        let o = Observable::pauli_z().rotated(&haar_unitary(2, &mut rng))?;
        let noisy = DensityMatrix::new(channel.apply(rho.matrix())?)?;
        let est =
            OutcomeTable::new(std::slice::from_ref(&c), &noisy, &o)?.estimate(shots, derive_seed(SEED, &[5, k]))?;
        let sd = var_ours_mean(&inverse, noisy.matrix(), &o, shots)?.sqrt();
        worst = worst.max((est.mean - o.expectation(rho.matrix())).abs() / sd);
    }
    Ok((
        worst < 5.0,
        format!("20 pairs, N = 1e5, max |mean − Tr[ρO]|/σ = {worst:.2} (bound 5)"),
    ))
}

fn variance_law() -> Result<(bool, String)> {
    let table = run_fig2(&ExperimentConfig::fig2())?;
    let outside: Vec<String> = table
        .rows
        .iter()
        .filter(|r| !r.in_band)
        .map(|r| {
            format!(
                "{} δ={} d={}: {:.3e} ∉ [{:.3e}, {:.3e}]",
                r.kind, r.delta, r.dim, r.var_mean_empirical, r.band_low, r.band_high
            )
        })
        .collect();
    Ok((
        outside.is_empty(),
        format!(
            "{}/{} grid points in the 99% band (M = 2000, N = 1000){}",
            table.rows.len() - outside.len(),
            table.rows.len(),
            if outside.is_empty() {
                String::new()
            } else {
                format!("; {}", outside.join("; "))
            }
        ),
    ))
}

fn haar_consistency() -> Result<(bool, String)> {
    let z = Observable::pauli_z();
    let mut unital_gap = 0.0f64;
    for kind in [NoiseKind::Depolarizing, NoiseKind::Dephasing] {
        for delta in DELTAS {
            let spec = NoiseSpec::qubit(kind, 1, delta);
            let inv = invert_channel(&spec)?;
            let v = var_haar(&inv, &build_channel(&spec)?, &z)?;
            unital_gap = unital_gap.max((v - var_haar_unital(&inv)?).abs());
        }
    }
    let spec = NoiseSpec::qubit(NoiseKind::Depolarizing, 1, 0.2);
    let inv = invert_channel(&spec)?;
    let ch = build_channel(&spec)?;
    let formula = var_haar(&inv, &ch, &z)?;
    let closed_gap = (formula - (1.890625 - 1.0 / 3.0)).abs();
    let gamma = compile(&inv)?.gamma();
    let (mc, se) = haar_monte_carlo(&inv, gamma, &ch, &z, 2000, derive_seed(SEED, &[7]))?;
    let rel = (mc - formula).abs() / formula;
    Ok((
        unital_gap <= 1e-9 && closed_gap <= 1e-9 && rel <= 0.05,
        format!(
            "(a) unital gap {unital_gap:.1e}, (b) {formula:.6} vs 1.557292 gap {closed_gap:.1e}, (c) MC {mc:.4}±{se:.4} off by {:.2}% (tol 5%)",
            100.0 * rel
        ),
    ))
}

fn tree_plans(maps: &[SignedKrausMap]) -> Result<(bool, String)> {
    let mut all: Vec<SignedKrausMap> = maps.to_vec();
    for spec in qubit_specs() {
        all.push(invert_channel(&spec)?);
    }
    for d in 2..=8 {
        all.push(invert_channel(&NoiseSpec::photon_loss(d, 0.2))?);
    }
    let (mut node, mut unitary, mut path) = (0.0f64, 0.0f64, 0.0f64);
    let mut depth_mismatches = 0;
    for m in &all {
        let c = compile(m)?;
        let plan = build_tree_plan(&c)?;
        let report = verify_tree_plan(&plan, &c);
        node = node.max(report.max_node_completeness());
        unitary = unitary.max(report.max_dilation_unitarity());
        path = path.max(report.max_path_reconstruction());
        let expected = (c.branch_count() as f64).log2().ceil() as usize;
        depth_mismatches += usize::from(plan.depth != expected || !report.leaves_cover_branches);
    }
    Ok((
        node <= 1e-9 && unitary <= 1e-10 && path <= 1e-9 && depth_mismatches == 0,
        format!(
            "{} plans: node {node:.1e} (1e-9), unitary {unitary:.1e} (1e-10), path {path:.1e} (1e-9), {depth_mismatches} depth mismatches",
            all.len()
        ),
    ))
}

fn successive_maps() -> Result<(bool, String)> {
    let inv = invert_channel(&NoiseSpec::qubit(NoiseKind::Dephasing, 1, 0.1))?;
    let c = compile(&inv)?;
    let composed = compose(&inv, &inv)?;
    let maps = [c.clone(), c];
    let shots = 100_000;
    let mut rng = stream_rng(derive_seed(SEED, &[9]), 0);
    let mut worst = 0.0f64;
    for k in 0..10u64 {
        let rho = haar_pure_state(2, &mut rng);
        let o = Observable::pauli_z().rotated(&haar_unitary(2, &mut rng))?;
        let exact = o.expectation(&composed.apply(rho.matrix())?);
        let table = OutcomeTable::new(&maps, &rho, &o)?;
        let est = table.estimate(shots, derive_seed(SEED, &[9, k]))?;
        let sd = (table.exact_variance() / shots as f64).sqrt();
        worst = worst.max((est.mean - exact).abs() / sd);
    }
    Ok((
        worst < 5.0,
        format!("10 pairs, N = 1e5, max |mean − exact|/σ = {worst:.2} (bound 5)"),
    ))
}

fn determinism() -> Result<(bool, String)> {
    let dir = tempfile::tempdir().expect("tempdir");
    let run = |threads: &str| -> Vec<u8> {
        let out = dir.path().join(format!("t{threads}"));
        let status = Command::new(env!("CARGO_BIN_EXE_hptpc"))
            .args(["fig3", "--quick", "--seed", "42", "--out", out.to_str().unwrap()])
            .env("HPTPC_THREADS", threads)
            .output()
            .expect("run hptpc");
        assert!(status.status.success(), "{}", String::from_utf8_lossy(&status.stderr));
        fs::read(out.join("results.csv")).expect("results.csv")
    };
    let one = run("1");
    let eight = run("8");
    Ok((
        one == eight,
        format!(
            "fig3 --quick --seed 42: {} CSV bytes, identical for 1 and 8 workers: {}",
            one.len(),
            one == eight
        ),
    ))
}

#[test]
fn acceptance_criteria() {
    let maps = corpus();
    let outcomes = [
        criterion(1, "representation round trip", 10, || round_trip(&maps)),
        criterion(2, "compile correctness", 10, || compile_correctness(&maps)),
        criterion(3, "inversion identity", 30, inversion),
        criterion(4, "photon-loss ranks", 30, photon_loss_ranks),
        criterion(5, "estimator unbiasedness", 60, unbiasedness),
        criterion(6, "variance law", 900, variance_law),
        criterion(7, "Haar formula consistency", 120, haar_consistency),
        criterion(8, "tree plans", 60, || tree_plans(&maps)),
        criterion(9, "successive maps", 60, successive_maps),
        criterion(10, "determinism", 120, determinism),
    ];
    let failed: Vec<String> = outcomes
        .iter()
        .filter(|o| !o.passed)
        .map(|o| format!("{}. {}", o.id, o.name))
        .collect();
    println!(
        "{}/{} acceptance criteria passed",
        outcomes.len() - failed.len(),
        outcomes.len()
    );
    assert!(failed.is_empty(), "failed: {}", failed.join(", "));
}

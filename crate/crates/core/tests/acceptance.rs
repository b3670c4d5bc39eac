//! Acceptance run: one PASS/FAIL line per criterion, nonzero exit on any failure.

use std::process::ExitCode;
use std::time::{Duration, Instant};

use qna_core::complexity::{fit_k_squared, run_sweep_with, BenchCase, BenchImpl, SweepOptions};
use qna_core::model::{build_model, count_flops, count_params, ArchConfig, Init, Model, Variant};
use qna_core::oracle::{qna_unfold_plan, sasa_unfold_plan};
use qna_core::qna::{qna_forward_tracked, QnaConfig, QnaParams};
use qna_core::toy::{train_toy, ToyConfig};
use qna_core::verify::{
    gradcheck, grid_cases, model_backend_swap, oracle_case, shift_equivariance, tolerance, upsample_contract, Grid,
};
use qna_core::{AllocationLedger, DType, Result, RngSeed, Tensor};

const SEED: RngSeed = RngSeed(42);

type Criterion = (&'static str, fn() -> Result<Outcome>);

struct Outcome {
    passed: bool,
    detail: String,
}

fn outcome(passed: bool, detail: impl Into<String>) -> Result<Outcome> {
    Ok(Outcome { passed, detail: detail.into() })
}

fn oracle_grid() -> Result<Outcome> {
    let start = Instant::now();
    let mut worst = [0.0f64; 2];
    let mut failures = Vec::new();
    for (n, (cfg, h, w)) in grid_cases(Grid::Full).into_iter().enumerate() {
        let s = SEED.derive(n as u64);
        for (slot, dtype) in [DType::F64, DType::F32].into_iter().enumerate() {
            let err = match dtype {
                DType::F64 => oracle_case::<f64>(&cfg, h, w, s, None)?,
                DType::F32 => oracle_case::<f32>(&cfg, h, w, s, None)?,
            };
            worst[slot] = worst[slot].max(err);
            if !(err < tolerance(dtype)) && failures.len() < 5 {
                failures.push(format!(
                    "k={} s={} h={} L={} {h}x{w} {}: {err:.2e}",
                    cfg.k,
                    cfg.stride,
                    cfg.heads,
                    cfg.queries,
                    dtype.name()
                ));
            }
        }
    }
    let elapsed = start.elapsed();
    let passed = failures.is_empty() && elapsed < Duration::from_secs(60);
    let mut detail = format!(
        "{} cases, max err f64 {:.2e} f32 {:.2e}, {:.1}s",
        grid_cases(Grid::Full).len(),
        worst[0],
        worst[1],
        elapsed.as_secs_f64()
    );
    if !failures.is_empty() {
        detail += &format!("; failing: {}", failures.join(", "));
    }
    outcome(passed, detail)
}

fn gradients() -> Result<Outcome> {
    let start = Instant::now();
    let plain = gradcheck(false, 1e-5, SEED)?;
    let normalized = gradcheck(true, 1e-5, SEED)?;
    let elapsed = start.elapsed();
    outcome(
        plain < 1e-4 && normalized < 1e-4 && elapsed < Duration::from_secs(30),
        format!(
            "max rel err {plain:.2e} (raw queries), {normalized:.2e} (unit queries), {:.2}s",
            elapsed.as_secs_f64()
        ),
    )
}

fn memory_in_k() -> Result<Outcome> {
    let ks = [3, 5, 7, 9, 15];
    let x = Tensor::<f32>::randn([256, 256, 64], 1.0, &mut SEED.rng())?;
    let mut peaks = Vec::new();
    for &k in &ks {
        let cfg = QnaConfig::new(64, 64).with_k(k).with_queries(2);
        let params = QnaParams::<f32>::random(&cfg, 0.05, SEED.derive(k as u64))?;
        let mut ledger = AllocationLedger::new();
        qna_forward_tracked(&x, &cfg, &params, &mut ledger)?;
        peaks.push(ledger.peak_extra_bytes());
    }
    let (lo, hi) = (*peaks.iter().min().unwrap(), *peaks.iter().max().unwrap());
    let spread = (hi - lo) as f64 / lo as f64;

    let cfg = |k| QnaConfig::new(64, 64).with_k(k).with_queries(2);
    let qna: Vec<(usize, usize)> = ks
        .iter()
        .map(|&k| Ok((k, qna_unfold_plan(256, 256, &cfg(k), DType::F32)?.peak_extra_bytes())))
        .collect::<Result<_>>()?;
    let sasa: Vec<(usize, usize)> = ks
        .iter()
        .map(|&k| Ok((k, sasa_unfold_plan(256, 256, 64, k, DType::F32)?.peak_extra_bytes())))
        .collect::<Result<_>>()?;
    let (_, rq) = fit_k_squared(&qna);
    let (_, rs) = fit_k_squared(&sasa);
    outcome(
        spread <= 0.01 && rq < 0.02 && rs < 0.02,
        format!(
            "efficient peak {lo}..{hi} bytes (spread {:.2}%), unfold k^2 residual qna {:.2}% sasa {:.2}%",
            spread * 100.0,
            rq * 100.0,
            rs * 100.0
        ),
    )
}

fn params_of(variant: Variant) -> Result<u64> {
    let model: Model<f32> = build_model(variant, SEED)?;
    Ok(count_params(&model)?.params)
}

fn param_counts() -> Result<Outcome> {
    let counts: Vec<u64> = Variant::ALL.iter().map(|&v| params_of(v)).collect::<Result<_>>()?;
    let tiny = counts[0];
    let monotone = counts.windows(2).all(|p| p[0] < p[1]);
    outcome(
        (14_400_000..=17_600_000).contains(&tiny) && monotone,
        format!("tiny {tiny}, small {}, base {}", counts[1], counts[2]),
    )
}

fn flop_counts() -> Result<Outcome> {
    let arch = ArchConfig::preset(Variant::Tiny);
    let k3 = count_flops(&Model::<f32>::build(&arch, Init::Conventional, SEED)?, 224)?.flops;
    let k7 = count_flops(&Model::<f32>::build(&arch.clone().with_k(7), Init::Conventional, SEED)?, 224)?.flops;
    let growth = k7 as f64 / k3 as f64 - 1.0;
    outcome(
        (2_120_000_000..=2_880_000_000).contains(&k3) && growth > 0.0 && growth < 0.05,
        format!("tiny@224 k=3 {:.3} GMAC, k=7 {:.3} GMAC (+{:.2}%)", k3 as f64 / 1e9, k7 as f64 / 1e9, growth * 100.0),
    )
}

fn shifts() -> Result<Outcome> {
    let (bad, compared) = shift_equivariance(50, SEED)?;
    outcome(bad == 0 && compared > 0, format!("{bad} of {compared} interior sites differ bitwise"))
}

fn upsampling() -> Result<Outcome> {
    let (index, degenerate, oracle) = upsample_contract(SEED)?;
    outcome(
        index == 0.0 && degenerate == 0.0 && oracle < 1e-10,
        format!("s=2 layout err {index:.1e}, s=1 err {degenerate:.1e}, window oracle err {oracle:.2e}"),
    )
}

fn model_swap() -> Result<Outcome> {
    let arch = ArchConfig::preset(Variant::Tiny);
    let conventional = model_backend_swap(&arch, Init::Conventional, 64, SEED)?;
    let gaussian = model_backend_swap(&arch, Init::Gaussian(0.1), 64, SEED)?;
    outcome(
        conventional < 1e-4 && gaussian < 1e-4,
        format!("max logit diff {conventional:.2e} (conventional init), {gaussian:.2e} (gaussian 0.1 init)"),
    )
}

fn latency() -> Result<Outcome> {
    let mut cases = Vec::new();
    for k in (5..=15).step_by(2) {
        for imp in [BenchImpl::QnaEfficient, BenchImpl::QnaUnfold] {
            cases.push(BenchCase::new(imp, (256, 256, 64), k));
        }
    }
    let rows = run_sweep_with(&cases, &SweepOptions::default())?;
    let mut ok = true;
    let mut parts = Vec::new();
    for pair in rows.chunks(2) {
        let (fast, slow) = (&pair[0], &pair[1]);
        let k = fast.case.k;
        if !slow.executed {
            // baseline exceeds the memory budget; it cannot be timed at all
            parts.push(format!("k={k} {:.0}ms vs unfold over budget", fast.latency_ms_mean));
            ok &= fast.executed;
            continue;
        }
        ok &= fast.latency_ms_mean < slow.latency_ms_mean;
        parts.push(format!("k={k} {:.0}ms vs {:.0}ms", fast.latency_ms_mean, slow.latency_ms_mean));
    }
    outcome(ok, parts.join(", "))
}

fn toy() -> Result<Outcome> {
    let start = Instant::now();
    let cfg = ToyConfig::default();
    let a = train_toy(&cfg)?;
    let elapsed = start.elapsed();
    let b = train_toy(&cfg)?;
    let deterministic = a.losses.iter().zip(&b.losses).all(|(x, y)| x.to_bits() == y.to_bits());
    outcome(
        a.halved() && deterministic && elapsed < Duration::from_secs(120),
        format!(
            "loss {:.4} -> {:.4} in {} steps, deterministic={deterministic}, {:.1}s",
            a.initial(),
            a.last(),
            cfg.steps,
            elapsed.as_secs_f64()
        ),
    )
}

fn main() -> ExitCode {
    let criteria: [Criterion; 10] = [
        ("oracle equivalence grid", oracle_grid),
        ("gradcheck", gradients),
        ("memory independent of k", memory_in_k),
        ("parameter counts", param_counts),
        ("FLOP counts", flop_counts),
        ("shift equivariance", shifts),
        ("upsampling contract", upsampling),
        ("end-to-end oracle swap", model_swap),
        ("latency ordering", latency),
        ("toy training", toy),
    ];
    let mut failed = 0;
    for (n, (name, run)) in criteria.iter().enumerate() {
        let start = Instant::now();
        let (verdict, detail) = match run() {
            Ok(o) => (if o.passed { "PASS" } else { "FAIL" }, o.detail),
            Err(e) => ("FAIL", format!("error: {e}")),
        };
        if verdict == "FAIL" {
            failed += 1;
        }
        println!("{verdict} {:>2} {name}: {detail} [{:.1}s]", n + 1, start.elapsed().as_secs_f64());
    }
    if failed == 0 {
        println!("all {} criteria passed", criteria.len());
        ExitCode::SUCCESS
    } else {
        println!("{failed} of {} criteria failed", criteria.len());
        ExitCode::FAILURE
    }
}

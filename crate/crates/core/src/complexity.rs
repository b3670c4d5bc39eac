//! Window-size sweep: latency and ledger memory of efficient QnA against the
//! unfold baselines and a direct convolution.

use std::fmt;
use std::path::Path;
use std::str::FromStr;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{QnaError, Result};
use crate::model::qna_layer_macs;
use crate::oracle::{qna_unfold, qna_unfold_plan, sasa_unfold, sasa_unfold_plan, SasaParams};
use crate::qna::{init_params, qna_forward_tracked, QnaConfig};
use crate::tensor::{conv2d, AllocationLedger, DType, Padding, RngSeed, Scalar, Tensor, Window};

pub const DEFAULT_KS: [usize; 7] = [3, 5, 7, 9, 11, 13, 15];
pub const CSV_HEADER: &str =
    "impl,k,stride,H,W,D,heads,L,dtype,latency_ms_mean,latency_ms_std,peak_extra_bytes,mac_count";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BenchImpl {
    QnaEfficient,
    QnaUnfold,
    SasaUnfold,
    Conv,
}

impl BenchImpl {
    pub const ALL: [BenchImpl; 4] =
        [BenchImpl::QnaEfficient, BenchImpl::QnaUnfold, BenchImpl::SasaUnfold, BenchImpl::Conv];

    pub fn name(self) -> &'static str {
        match self {
            BenchImpl::QnaEfficient => "qna_efficient",
            BenchImpl::QnaUnfold => "qna_unfold",
            BenchImpl::SasaUnfold => "sasa_unfold",
            BenchImpl::Conv => "conv",
        }
    }
}

impl fmt::Display for BenchImpl {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for BenchImpl {
    type Err = QnaError;

    fn from_str(s: &str) -> Result<Self> {
        BenchImpl::ALL
            .into_iter()
            .find(|i| i.name() == s)
            .ok_or_else(|| QnaError::invalid("BenchImpl", format!("unknown implementation `{s}`")))
    }
}

/// One timed configuration. `heads` and `queries` only affect the QnA rows;
/// SASA is single-head and the convolution maps `D` to `D` channels.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BenchCase {
    pub implementation: BenchImpl,
    pub h: usize,
    pub w: usize,
    pub d: usize,
    pub k: usize,
    pub stride: usize,
    pub heads: usize,
    pub queries: usize,
    pub dtype: DType,
    pub repeats: usize,
    pub warmup: usize,
}

impl BenchCase {
    pub fn new(implementation: BenchImpl, (h, w, d): (usize, usize, usize), k: usize) -> Self {
        BenchCase {
            implementation,
            h,
            w,
            d,
            k,
            stride: 1,
            heads: 1,
            queries: 2,
            dtype: DType::F32,
            repeats: 5,
            warmup: 2,
        }
    }

    pub fn validate(&self) -> Result<()> {
        const OP: &str = "BenchCase";
        if self.repeats < 5 || self.warmup < 2 {
            return Err(QnaError::invalid(OP, "need at least 5 repeats after at least 2 warmup runs"));
        }
        if self.h == 0 || self.w == 0 || self.d == 0 {
            return Err(QnaError::invalid(OP, "input dims must be positive"));
        }
        if self.implementation == BenchImpl::SasaUnfold && self.stride != 1 {
            return Err(QnaError::invalid(OP, "sasa_unfold runs at stride 1 only"));
        }
        Window::same(self.k, self.stride).allowing_even().validate(OP)?;
        self.qna_config().validate()
    }

    fn qna_config(&self) -> QnaConfig {
        QnaConfig::new(self.d, self.d)
            .with_k(self.k)
            .with_stride(self.stride)
            .with_heads(self.heads)
            .with_queries(self.queries)
    }

    fn sites(&self) -> u64 {
        (self.h.div_ceil(self.stride) * self.w.div_ceil(self.stride)) as u64
    }

    /// Multiply-accumulates of one forward pass.
    pub fn mac_count(&self) -> u64 {
        let (hw, d, kk, l) = ((self.h * self.w) as u64, self.d as u64, (self.k * self.k) as u64, self.queries as u64);
        let sites = self.sites();
        match self.implementation {
            BenchImpl::QnaEfficient => qna_layer_macs(&self.qna_config(), self.h, self.w),
            // keys, per-pixel scores, values, per-window aggregation, output
            BenchImpl::QnaUnfold => 2 * hw * d * d + hw * l * d + l * kk * sites * d + sites * d * d,
            BenchImpl::SasaUnfold => 3 * hw * d * d + 2 * hw * kk * d,
            BenchImpl::Conv => sites * kk * d * d,
        }
    }

    /// Ledger bytes and resident bytes known before running, for the
    /// baselines whose footprint can exceed memory.
    fn planned(&self) -> Result<Option<(usize, usize)>> {
        let input = self.h * self.w * self.d * self.dtype.size();
        Ok(match self.implementation {
            BenchImpl::QnaUnfold => {
                let p = qna_unfold_plan(self.h, self.w, &self.qna_config(), self.dtype)?;
                Some((p.peak_extra_bytes(), p.resident_bytes + input))
            }
            BenchImpl::SasaUnfold => {
                let p = sasa_unfold_plan(self.h, self.w, self.d, self.k, self.dtype)?;
                Some((p.peak_extra_bytes(), p.resident_bytes + input))
            }
            _ => None,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BenchRow {
    pub case: BenchCase,
    /// NaN when the case was planned but not executed.
    pub latency_ms_mean: f64,
    pub latency_ms_std: f64,
    pub latency_ms_median_of_means: f64,
    pub peak_extra_bytes: usize,
    pub mac_count: u64,
    pub executed: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SweepOptions {
    /// Cases whose planned resident bytes exceed this are reported from the
    /// plan without running.
    pub memory_budget_bytes: usize,
    pub seed: RngSeed,
}

impl Default for SweepOptions {
    fn default() -> Self {
        SweepOptions { memory_budget_bytes: 4 << 30, seed: RngSeed::default() }
    }
}

/// `impls x ks` cases in impl-major order.
pub fn default_sweep(input: (usize, usize, usize), ks: &[usize], impls: &[BenchImpl]) -> Vec<BenchCase> {
    impls.iter().flat_map(|&i| ks.iter().map(move |&k| BenchCase::new(i, input, k))).collect()
}

/// Mean, sample standard deviation and median of group means.
pub fn latency_stats(samples_ms: &[f64]) -> (f64, f64, f64) {
    let n = samples_ms.len();
    if n == 0 {
        return (f64::NAN, f64::NAN, f64::NAN);
    }
    let mean = samples_ms.iter().sum::<f64>() / n as f64;
    let std =
        if n > 1 { (samples_ms.iter().map(|s| (s - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt() } else { 0.0 };
    let groups = (n as f64).sqrt().round().max(1.0) as usize;
    let mut means: Vec<f64> = (0..groups)
        .map(|g| {
            let chunk: Vec<f64> = samples_ms.iter().copied().skip(g).step_by(groups).collect();
            chunk.iter().sum::<f64>() / chunk.len() as f64
        })
        .collect();
    means.sort_by(f64::total_cmp);
    let mid = means.len() / 2;
    let median = if means.len() % 2 == 1 { means[mid] } else { 0.5 * (means[mid - 1] + means[mid]) };
    (mean, std, median)
}

fn run_case<T: Scalar>(case: &BenchCase, seed: RngSeed) -> Result<(Vec<f64>, usize)> {
    let x: Tensor<T> = Tensor::randn([case.h, case.w, case.d], 1.0, &mut seed.rng())?;
    let cfg = case.qna_config();
    let qna = init_params::<T>(&cfg, seed.derive(1))?;
    let sasa = SasaParams::<T>::random(case.d, 0.02, seed.derive(2))?;
    let kernel: Tensor<T> = Tensor::trunc_normal([case.k, case.k, case.d, case.d], 0.02, &mut seed.derive(3).rng())?;

    let mut samples = Vec::with_capacity(case.repeats);
    let mut bytes = None;
    for rep in 0..case.warmup + case.repeats {
        let mut ledger = AllocationLedger::new();
        let start = Instant::now();
        let out = match case.implementation {
            BenchImpl::QnaEfficient => qna_forward_tracked(&x, &cfg, &qna, &mut ledger)?,
            BenchImpl::QnaUnfold => qna_unfold(&x, &cfg, &qna, &mut ledger)?,
            BenchImpl::SasaUnfold => sasa_unfold(&x, case.k, &sasa, &mut ledger)?,
            BenchImpl::Conv => conv2d(&x, &kernel, case.stride, Padding::Same)?,
        };
        let elapsed = start.elapsed().as_secs_f64() * 1e3;
        drop(std::hint::black_box(out));
        let peak = ledger.peak_extra_bytes();
        if *bytes.get_or_insert(peak) != peak {
            return Err(QnaError::Format(format!("{} ledger bytes changed between repeats", case.implementation)));
        }
        if rep >= case.warmup {
            samples.push(elapsed);
        }
    }
    Ok((samples, bytes.unwrap_or(0)))
}

/// Runs every case in order on the calling thread.
pub fn run_sweep_with(cases: &[BenchCase], opts: &SweepOptions) -> Result<Vec<BenchRow>> {
    let mut rows = Vec::with_capacity(cases.len());
    for case in cases {
        case.validate()?;
        let planned = case.planned()?;
        let row = match planned {
            Some((peak, resident)) if resident > opts.memory_budget_bytes => BenchRow {
                case: *case,
                latency_ms_mean: f64::NAN,
                latency_ms_std: f64::NAN,
                latency_ms_median_of_means: f64::NAN,
                peak_extra_bytes: peak,
                mac_count: case.mac_count(),
                executed: false,
            },
            _ => {
                let (samples, peak) = match case.dtype {
                    DType::F32 => run_case::<f32>(case, opts.seed)?,
                    DType::F64 => run_case::<f64>(case, opts.seed)?,
                };
                let (mean, std, mom) = latency_stats(&samples);
                BenchRow {
                    case: *case,
                    latency_ms_mean: mean,
                    latency_ms_std: std,
                    latency_ms_median_of_means: mom,
                    peak_extra_bytes: peak,
                    mac_count: case.mac_count(),
                    executed: true,
                }
            }
        };
        rows.push(row);
    }
    Ok(rows)
}

pub fn run_sweep(cases: &[BenchCase]) -> Result<Vec<BenchRow>> {
    run_sweep_with(cases, &SweepOptions::default())
}

/// One CSV line, in header order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CsvRecord {
    #[serde(rename = "impl")]
    pub implementation: BenchImpl,
    pub k: usize,
    pub stride: usize,
    #[serde(rename = "H")]
    pub h: usize,
    #[serde(rename = "W")]
    pub w: usize,
    #[serde(rename = "D")]
    pub d: usize,
    pub heads: usize,
    #[serde(rename = "L")]
    pub queries: usize,
    pub dtype: DType,
    pub latency_ms_mean: f64,
    pub latency_ms_std: f64,
    pub peak_extra_bytes: usize,
    pub mac_count: u64,
}

impl From<&BenchRow> for CsvRecord {
    fn from(r: &BenchRow) -> Self {
        let c = &r.case;
        CsvRecord {
            implementation: c.implementation,
            k: c.k,
            stride: c.stride,
            h: c.h,
            w: c.w,
            d: c.d,
            heads: c.heads,
            queries: c.queries,
            dtype: c.dtype,
            latency_ms_mean: r.latency_ms_mean,
            latency_ms_std: r.latency_ms_std,
            peak_extra_bytes: r.peak_extra_bytes,
            mac_count: r.mac_count,
        }
    }
}

pub fn emit_csv(rows: &[BenchRow], path: impl AsRef<Path>) -> Result<()> {
    let mut writer = csv::WriterBuilder::new().has_headers(false).from_path(path)?;
    writer.write_record(CSV_HEADER.split(','))?;
    for row in rows {
        writer.serialize(CsvRecord::from(row))?;
    }
    writer.flush()?;
    Ok(())
}

pub fn read_csv(path: impl AsRef<Path>) -> Result<Vec<CsvRecord>> {
    let mut reader = csv::Reader::from_path(path)?;
    let header: Vec<String> = reader.headers()?.iter().map(str::to_string).collect();
    if header.join(",") != CSV_HEADER {
        return Err(QnaError::Format(format!("unexpected CSV header `{}`", header.join(","))));
    }
    reader.deserialize().map(|r| r.map_err(QnaError::from)).collect()
}

/// Least-squares `a` in `bytes ~ a k^2` and the largest relative residual.
pub fn fit_k_squared(points: &[(usize, usize)]) -> (f64, f64) {
    let num: f64 = points.iter().map(|&(k, b)| b as f64 * (k * k) as f64).sum();
    let den: f64 = points.iter().map(|&(k, _)| ((k * k) as f64).powi(2)).sum();
    let a = num / den;
    let residual = points.iter().map(|&(k, b)| ((b as f64 - a * (k * k) as f64) / b as f64).abs()).fold(0.0, f64::max);
    (a, residual)
}

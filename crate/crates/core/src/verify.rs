//! Correctness suites shared by the `check` command and the acceptance target.
//!
//! Every check yields a [`CaseResult`]: an error measure and the tolerance it
//! must not exceed. Bitwise checks use tolerance zero.

use std::fmt;
use std::str::FromStr;

use crate::error::{QnaError, Result};
use crate::model::{forward_inference, ArchConfig, Init, Model, QnaBackend, Variant};
use crate::oracle::{finite_diff_grad, qna_window_oracle, qna_window_oracle_per_query};
use crate::qna::{
    attend_scores, compute_scores, qna_backward, qna_forward, qna_upsample_forward, QnaConfig, QnaParams,
};
use crate::tensor::{window_offsets, DType, RngSeed, Scalar, Tensor};

#[derive(Debug, Clone, PartialEq)]
pub struct CaseResult {
    pub name: String,
    pub error: f64,
    pub tolerance: f64,
}

impl CaseResult {
    pub fn new(name: impl Into<String>, error: f64, tolerance: f64) -> Self {
        CaseResult { name: name.into(), error, tolerance }
    }

    /// NaN errors fail.
    pub fn passed(&self) -> bool {
        self.error <= self.tolerance
    }
}

impl fmt::Display for CaseResult {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let verdict = if self.passed() { "PASS" } else { "FAIL" };
        write!(f, "{verdict} {} max_err={:.3e} tol={:.1e}", self.name, self.error, self.tolerance)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Grid {
    /// A few dozen layer configurations; seconds.
    Small,
    /// Every combination of k in {1,3,5,7}, stride {1,2}, heads {1,2,4},
    /// queries {1,2,3} and H, W in 4..=8.
    Full,
    /// The tiny network at 64 x 64 with efficient and oracle QnA swapped.
    TinyModel,
}

impl Grid {
    pub fn name(self) -> &'static str {
        match self {
            Grid::Small => "small",
            Grid::Full => "full",
            Grid::TinyModel => "tiny-model",
        }
    }
}

impl fmt::Display for Grid {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Grid {
    type Err = QnaError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "small" => Ok(Grid::Small),
            "full" => Ok(Grid::Full),
            "tiny-model" | "tiny" => Ok(Grid::TinyModel),
            _ => Err(QnaError::invalid("Grid", format!("unknown grid {s:?} (small, full, tiny-model)"))),
        }
    }
}

/// Per-dtype tolerance on the oracle grid's max absolute error.
pub fn tolerance(dtype: DType) -> f64 {
    match dtype {
        DType::F32 => 1e-5,
        DType::F64 => 1e-10,
    }
}

/// Max absolute difference divided by `max(1, max |reference|)`.
pub fn scaled_error<T: Scalar>(got: &Tensor<T>, reference: &Tensor<T>) -> f64 {
    match got.max_abs_diff(reference) {
        Some(d) => d / reference.max_abs().max(1.0),
        None => f64::INFINITY,
    }
}

/// Zero when bitwise equal, otherwise the (positive) max absolute difference.
pub fn bitwise_error<T: Scalar>(got: &Tensor<T>, reference: &Tensor<T>) -> f64 {
    if got.bit_eq(reference) {
        0.0
    } else {
        got.max_abs_diff(reference).unwrap_or(f64::INFINITY).max(f64::MIN_POSITIVE)
    }
}

/// Layer configurations and input sizes of an oracle grid.
pub fn grid_cases(grid: Grid) -> Vec<(QnaConfig, usize, usize)> {
    let (ks, strides, heads, queries): (&[usize], &[usize], &[usize], &[usize]) = match grid {
        Grid::Full => (&[1, 3, 5, 7], &[1, 2], &[1, 2, 4], &[1, 2, 3]),
        Grid::Small => (&[1, 3, 5], &[1, 2], &[1, 2], &[1, 2]),
        Grid::TinyModel => return Vec::new(),
    };
    let sizes: Vec<(usize, usize)> = match grid {
        Grid::Full => (4..=8).flat_map(|h| (4..=8).map(move |w| (h, w))).collect(),
        _ => vec![(4, 5), (7, 6)],
    };
    let mut out = Vec::new();
    for &k in ks {
        for &s in strides {
            for &g in heads {
                for &l in queries {
                    let cfg = QnaConfig::new(5, 8).with_k(k).with_stride(s).with_heads(g).with_queries(l);
                    out.extend(sizes.iter().map(|&(h, w)| (cfg, h, w)));
                }
            }
        }
    }
    out
}

fn case_name(cfg: &QnaConfig, h: usize, w: usize) -> String {
    format!("oracle k={} s={} h={} L={} {}x{}", cfg.k, cfg.stride, cfg.heads, cfg.queries, h, w)
}

/// Max absolute error of the efficient layer against the per-window oracle.
///
/// `fault` is added to `W_O[0, 0]` of the efficient path only, so a nonzero
/// value must make the case fail.
pub fn oracle_case<T: Scalar>(cfg: &QnaConfig, h: usize, w: usize, seed: RngSeed, fault: Option<f64>) -> Result<f64> {
    let x = Tensor::<T>::randn([h, w, cfg.dim_in], 1.0, &mut seed.derive(1).rng())?;
    let params = QnaParams::<T>::random(cfg, 0.5, seed.derive(2))?;
    let mut fast = params.clone();
    if let Some(delta) = fault {
        fast.w_o = fast.w_o.with_flat(0, fast.w_o.data()[0] + T::cast(delta))?;
    }
    let got = qna_forward(&x, cfg, &fast)?;
    let want = qna_window_oracle(&x, cfg, &params)?;
    got.max_abs_diff(&want).ok_or_else(|| QnaError::shape("oracle_case", "output shapes differ"))
}

/// Largest relative deviation `|a - n| / max(|a|, |n|, 1e-6)` between the
/// analytic gradients and central differences, over the input and every
/// parameter. `4 x 4 x 6` input, k = 3, two queries, two heads.
pub fn gradcheck(normalize_queries: bool, eps: f64, seed: RngSeed) -> Result<f64> {
    let cfg = QnaConfig::new(6, 6).with_k(3).with_queries(2).with_heads(2).with_normalized_queries(normalize_queries);
    let x = Tensor::<f64>::randn([4, 4, 6], 1.0, &mut seed.derive(1).rng())?;
    let params = QnaParams::<f64>::random(&cfg, 0.5, seed.derive(2))?;
    let d_out = Tensor::<f64>::randn([4, 4, 6], 1.0, &mut seed.derive(3).rng())?;
    let loss = |x: &Tensor<f64>, p: &QnaParams<f64>| -> Result<f64> {
        let y = qna_forward(x, &cfg, p)?;
        Ok(y.data().iter().zip(d_out.data()).map(|(a, b)| a * b).sum())
    };
    let grads = qna_backward(&x, &cfg, &params, &d_out)?;

    let rel = |analytic: &Tensor<f64>, numeric: &Tensor<f64>| {
        analytic
            .data()
            .iter()
            .zip(numeric.data())
            .map(|(&a, &n)| (a - n).abs() / a.abs().max(n.abs()).max(1e-6))
            .fold(0.0, f64::max)
    };
    let mut worst = rel(&grads.d_input, &finite_diff_grad(|xp| loss(xp, &params), &x, eps)?);
    for (i, analytic) in grads.param_grads().into_iter().enumerate() {
        let base = params.tensors()[i].clone();
        let numeric = finite_diff_grad(
            |t| {
                let mut p = params.clone();
                *p.tensors_mut()[i] = t.clone();
                loss(&x, &p)
            },
            &base,
            eps,
        )?;
        worst = worst.max(rel(analytic, &numeric));
    }
    Ok(worst)
}

fn roll(x: &Tensor<f64>, dy: usize, dx: usize) -> Result<Tensor<f64>> {
    let (h, w, c) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    Tensor::from_fn([h, w, c], |f| {
        let (r, rest) = (f / (w * c), f % (w * c));
        let (col, ch) = (rest / c, rest % c);
        x.data()[(((r + h - dy) % h) * w + (col + w - dx) % w) * c + ch]
    })
}

/// Circular shifts of the input by every `delta` in `{1,2,3}^2`, over
/// `trials` random inputs (k alternating 3 and 5, stride 1).
///
/// Compares outputs on sites whose windows lie inside both the image and the
/// unwrapped part of the rolled image. Returns the number of mismatching
/// sites and the number compared.
pub fn shift_equivariance(trials: usize, seed: RngSeed) -> Result<(usize, usize)> {
    let (h, w) = (12, 12);
    let (mut bad, mut compared) = (0, 0);
    for t in 0..trials {
        let k = if t % 2 == 0 { 3 } else { 5 };
        let cfg = QnaConfig::new(4, 6).with_k(k).with_queries(2).with_heads(2);
        let s = seed.derive(100 + t as u64);
        let x = Tensor::<f64>::randn([h, w, 4], 1.0, &mut s.derive(1).rng())?;
        let params = QnaParams::<f64>::random(&cfg, 0.5, s.derive(2))?;
        let y = qna_forward(&x, &cfg, &params)?;
        let (lo, hi) = window_offsets(k);
        for dy in 1..=3 {
            for dx in 1..=3 {
                let ys = qna_forward(&roll(&x, dy, dx)?, &cfg, &params)?;
                for i in 0..h {
                    for j in 0..w {
                        let inside = |p: usize, dlt: usize, n: usize| {
                            p as isize + lo >= dlt as isize && p as isize + hi < n as isize
                        };
                        if !inside(i, dy, h) || !inside(j, dx, w) {
                            continue;
                        }
                        compared += 1;
                        let a = &ys.data()[(i * w + j) * 6..(i * w + j + 1) * 6];
                        let b = &y.data()[((i - dy) * w + j - dx) * 6..((i - dy) * w + j - dx + 1) * 6];
                        if a.iter().zip(b).any(|(u, v)| u.to_bits() != v.to_bits()) {
                            bad += 1;
                        }
                    }
                }
            }
        }
    }
    Ok((bad, compared))
}

/// Adding a constant to every score. Returns `(dyadic, general)`: the bitwise
/// error when scores and shift are exactly representable sums (eighths), and
/// the scaled error for an arbitrary score map and shift.
pub fn score_shift(seed: RngSeed) -> Result<(f64, f64)> {
    let cfg = QnaConfig::new(4, 6).with_k(3).with_queries(2).with_heads(3).with_stride(2);
    let x = Tensor::<f64>::randn([7, 6, 4], 1.0, &mut seed.derive(1).rng())?;
    let params = QnaParams::<f64>::random(&cfg, 0.5, seed.derive(2))?;
    let shift = |s: &Tensor<f64>, c: f64| s.map(|v| v + c);

    let mut rng = seed.derive(3).rng();
    let dyadic = Tensor::<f64>::uniform([2, 3, 7, 6], -4.0, 4.0, &mut rng)?.map(|v| (v * 8.0).round() / 8.0)?;
    let a = attend_scores(&dyadic, &x, &cfg, &params)?;
    let b = attend_scores(&shift(&dyadic, 2.625)?, &x, &cfg, &params)?;
    let exact = bitwise_error(&b, &a);

    let scores = compute_scores(&x, &cfg, &params)?;
    let base = attend_scores(&scores, &x, &cfg, &params)?;
    let moved = attend_scores(&shift(&scores, 0.713_281_7)?, &x, &cfg, &params)?;
    Ok((exact, scaled_error(&moved, &base)))
}

/// Reordering the queries (with their mixing weights and biases).
pub fn query_permutation(seed: RngSeed) -> Result<f64> {
    let cfg = QnaConfig::new(5, 6).with_k(5).with_queries(3).with_heads(2);
    let x = Tensor::<f64>::randn([6, 7, 5], 1.0, &mut seed.derive(1).rng())?;
    let params = QnaParams::<f64>::random(&cfg, 0.5, seed.derive(2))?;
    let perm = [2, 0, 1];
    let permute = |t: &Tensor<f64>| {
        let row = t.len() / cfg.queries;
        let data = perm.iter().flat_map(|&l| t.data()[l * row..(l + 1) * row].to_vec()).collect();
        Tensor::new(t.shape().to_vec(), data)
    };
    let mut p2 = params.clone();
    p2.queries = permute(&params.queries)?;
    p2.mix = permute(&params.mix)?;
    p2.bias = permute(&params.bias)?;
    Ok(scaled_error(&qna_forward(&x, &cfg, &p2)?, &qna_forward(&x, &cfg, &params)?))
}

/// Upsampling contract. Returns `(index, degenerate, oracle)`:
/// bitwise error of the `s = 2` layout against single-query layers placed by
/// index arithmetic, bitwise error of `s = 1` against the plain layer, and
/// scaled error against the per-query window oracle.
pub fn upsample_contract(seed: RngSeed) -> Result<(f64, f64, f64)> {
    let (h, w, d) = (5, 6, 6);
    let cfg = QnaConfig::new(3, d).with_k(3).with_queries(4).with_heads(2);
    let x = Tensor::<f64>::randn([h, w, 3], 1.0, &mut seed.derive(1).rng())?;
    let mut params = QnaParams::<f64>::random(&cfg, 0.5, seed.derive(2))?;
    params.mix = Tensor::ones([4, 9])?;
    let up = qna_upsample_forward(&x, &cfg, &params)?;

    let single = cfg.with_queries(1);
    let row = |t: &Tensor<f64>, l: usize, shape: Vec<usize>| {
        let n = t.len() / 4;
        Tensor::new(shape, t.data()[l * n..(l + 1) * n].to_vec())
    };
    let mut maps = Vec::new();
    for l in 0..4 {
        let mut p = params.clone();
        p.queries = row(&params.queries, l, vec![1, d])?;
        p.mix = Tensor::ones([1, 9])?;
        p.bias = row(&params.bias, l, vec![1, 3, 3])?;
        maps.push(qna_forward(&x, &single, &p)?);
    }
    let placed = Tensor::from_fn([2 * h, 2 * w, d], |f| {
        let (r, rest) = (f / (2 * w * d), f % (2 * w * d));
        let (col, c) = (rest / d, rest % d);
        maps[(r % 2) * 2 + col % 2].data()[((r / 2) * w + col / 2) * d + c]
    })?;
    let index = bitwise_error(&up, &placed);

    let per_query = qna_window_oracle_per_query(&x, &cfg, &params)?;
    let oracle = Tensor::from_fn([2 * h, 2 * w, d], |f| {
        let (r, rest) = (f / (2 * w * d), f % (2 * w * d));
        let (col, c) = (rest / d, rest % d);
        per_query.data()[(((r / 2) * w + col / 2) * 4 + (r % 2) * 2 + col % 2) * d + c]
    })?;

    let mut p1 = QnaParams::<f64>::random(&single, 0.5, seed.derive(3))?;
    p1.mix = Tensor::ones([1, 9])?;
    let degenerate = bitwise_error(&qna_upsample_forward(&x, &single, &p1)?, &qna_forward(&x, &single, &p1)?);
    Ok((index, degenerate, scaled_error(&up, &oracle)))
}

/// Max absolute logit difference between the efficient and oracle QnA
/// backends for one `resolution x resolution` image.
pub fn model_backend_swap(arch: &ArchConfig, init: Init, resolution: usize, seed: RngSeed) -> Result<f64> {
    let model = Model::<f32>::build(arch, init, seed)?;
    let image = Tensor::<f32>::randn([resolution, resolution, arch.in_channels], 1.0, &mut seed.derive(7).rng())?;
    let fast = forward_inference(&model, &image, QnaBackend::Efficient)?;
    let slow = forward_inference(&model, &image, QnaBackend::Oracle)?;
    fast.max_abs_diff(&slow).ok_or_else(|| QnaError::shape("model_backend_swap", "logit shapes differ"))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CheckOptions {
    pub grid: Grid,
    pub dtype: DType,
    pub seed: RngSeed,
    /// Perturbation of the efficient path's output projection, for
    /// exercising the failure path.
    pub fault: Option<f64>,
}

impl Default for CheckOptions {
    fn default() -> Self {
        CheckOptions { grid: Grid::Small, dtype: DType::F64, seed: RngSeed::default(), fault: None }
    }
}

/// Runs the selected suite, reporting each case as it finishes.
///
/// Layer grids run the oracle comparison in the requested dtype plus the
/// real-64 invariance and gradient checks; the tiny-model grid compares
/// network logits under both QnA backends.
pub fn run_checks(opts: &CheckOptions, mut report: impl FnMut(&CaseResult)) -> Result<Vec<CaseResult>> {
    let mut results = Vec::new();
    let mut push = |r: CaseResult| {
        report(&r);
        results.push(r);
    };
    if opts.grid == Grid::TinyModel {
        let arch = ArchConfig::preset(Variant::Tiny);
        let tol = 1e-4;
        for (label, init) in [("conventional", Init::Conventional), ("gaussian", Init::Gaussian(0.1))] {
            let mut err = model_backend_swap(&arch, init, 64, opts.seed)?;
            if let Some(delta) = opts.fault {
                err += delta.abs();
            }
            push(CaseResult::new(format!("tiny-model 64x64 f32 {label} init"), err, tol));
        }
        return Ok(results);
    }

    let tol = tolerance(opts.dtype);
    for (n, (cfg, h, w)) in grid_cases(opts.grid).into_iter().enumerate() {
        let s = opts.seed.derive(n as u64);
        let err = match opts.dtype {
            DType::F32 => oracle_case::<f32>(&cfg, h, w, s, opts.fault)?,
            DType::F64 => oracle_case::<f64>(&cfg, h, w, s, opts.fault)?,
        };
        push(CaseResult::new(format!("{} {}", case_name(&cfg, h, w), opts.dtype.name()), err, tol));
    }

    for normalize in [false, true] {
        let err = gradcheck(normalize, 1e-5, opts.seed)?;
        push(CaseResult::new(format!("gradcheck normalize_queries={normalize}"), err, 1e-4));
    }
    let trials = if opts.grid == Grid::Full { 50 } else { 6 };
    let (bad, compared) = shift_equivariance(trials, opts.seed)?;
    push(CaseResult::new(format!("shift equivariance ({compared} sites)"), bad as f64, 0.0));
    let (dyadic, general) = score_shift(opts.seed)?;
    push(CaseResult::new("score shift (exact scores)", dyadic, 0.0));
    push(CaseResult::new("score shift", general, 1e-12));
    push(CaseResult::new("query permutation", query_permutation(opts.seed)?, 1e-12));
    let (index, degenerate, oracle) = upsample_contract(opts.seed)?;
    push(CaseResult::new("upsample s=2 index layout", index, 0.0));
    push(CaseResult::new("upsample s=1", degenerate, 0.0));
    push(CaseResult::new("upsample oracle", oracle, 1e-10));
    Ok(results)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grid_sizes() {
        assert_eq!(grid_cases(Grid::Full).len(), 4 * 2 * 3 * 3 * 25);
        assert_eq!(grid_cases(Grid::Small).len(), 3 * 2 * 2 * 2 * 2);
        assert!(grid_cases(Grid::TinyModel).is_empty());
    }

    #[test]
    fn grid_names_roundtrip() {
        for g in [Grid::Small, Grid::Full, Grid::TinyModel] {
            assert_eq!(g.name().parse::<Grid>().unwrap(), g);
        }
        assert!("huge".parse::<Grid>().is_err());
    }

    #[test]
    fn fault_is_detected() {
        let cfg = QnaConfig::new(5, 8).with_k(3).with_heads(2);
        let ok = oracle_case::<f64>(&cfg, 5, 5, RngSeed(1), None).unwrap();
        let bad = oracle_case::<f64>(&cfg, 5, 5, RngSeed(1), Some(1e-3)).unwrap();
        assert!(ok < 1e-12);
        assert!(bad > 1e-6);
    }

    #[test]
    fn small_suite_passes() {
        let results = run_checks(&CheckOptions::default(), |_| {}).unwrap();
        let failed: Vec<_> = results.iter().filter(|r| !r.passed()).map(|r| r.to_string()).collect();
        assert!(failed.is_empty(), "{failed:?}");
    }

    #[test]
    fn nan_error_fails() {
        assert!(!CaseResult::new("x", f64::NAN, 1.0).passed());
        assert!(CaseResult::new("x", 0.0, 0.0).passed());
    }
}

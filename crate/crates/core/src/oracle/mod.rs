//! Naive per-window reference implementations.
//!
//! Nothing here shares code with the efficient kernels in [`crate::qna`]: keys
//! are materialized per tap, softmax uses a per-window max, and taps are
//! visited column-major. Agreement between the two paths is therefore
//! evidence rather than tautology.

mod baseline;

pub use baseline::{qna_unfold, qna_unfold_plan, sasa_unfold, sasa_unfold_plan, UnfoldPlan};

use crate::error::{QnaError, Result};
use crate::qna::{QnaConfig, QnaParams};
use crate::tensor::{dims3, AllocationLedger, Scalar, Tensor, Window};

/// Explicit per-window copies of a feature map.
#[derive(Debug, Clone)]
pub struct UnfoldedWindows<T: Scalar> {
    /// `H' x W' x k*k x D`; out-of-bounds taps are zero.
    pub patches: Tensor<T>,
    pub window: Window,
    pub input_hw: (usize, usize),
}

impl<T: Scalar> UnfoldedWindows<T> {
    /// Whether tap `o` of output site `(i, j)` lies inside the input.
    pub fn in_bounds(&self, i: usize, j: usize, o: usize) -> bool {
        let (lo, _) = self.window.offsets();
        let k = self.window.k;
        let r = self.window.center(i) + lo + (o / k) as isize;
        let c = self.window.center(j) + lo + (o % k) as isize;
        r >= 0 && c >= 0 && (r as usize) < self.input_hw.0 && (c as usize) < self.input_hw.1
    }

    /// The boolean in-bounds mask, `H' x W' x k*k`, row-major.
    pub fn mask(&self) -> Vec<bool> {
        let s = self.patches.shape();
        let (ho, wo, kk) = (s[0], s[1], s[2]);
        (0..ho * wo * kk).map(|f| self.in_bounds(f / (wo * kk), (f / kk) % wo, f % kk)).collect()
    }
}

/// Materializes every `k x k` window (same padding, stride `stride`).
pub fn unfold<T: Scalar>(x: &Tensor<T>, k: usize, stride: usize) -> Result<UnfoldedWindows<T>> {
    unfold_tracked(x, k, stride, &mut AllocationLedger::new())
}

/// As [`unfold`]; the patch tensor is recorded as the operation's transient bytes.
pub fn unfold_tracked<T: Scalar>(
    x: &Tensor<T>,
    k: usize,
    stride: usize,
    ledger: &mut AllocationLedger,
) -> Result<UnfoldedWindows<T>> {
    const OP: &str = "unfold";
    let window = Window::same(k, stride).allowing_even();
    window.validate(OP)?;
    let (h, w, d) = dims3(OP, x)?;
    let (ho, wo) = (window.out_len(h)?, window.out_len(w)?);
    let (lo, hi) = window.offsets();
    let src = x.data();
    let mut patches = vec![T::zero(); ho * wo * k * k * d];
    for i in 0..ho {
        for j in 0..wo {
            let base = (i * wo + j) * k * k * d;
            for dy in lo..=hi {
                let r = window.center(i) + dy;
                if r < 0 || r >= h as isize {
                    continue;
                }
                for dx in lo..=hi {
                    let c = window.center(j) + dx;
                    if c < 0 || c >= w as isize {
                        continue;
                    }
                    let o = (dy - lo) as usize * k + (dx - lo) as usize;
                    let n = r as usize * w + c as usize;
                    patches[base + o * d..base + (o + 1) * d].copy_from_slice(&src[n * d..(n + 1) * d]);
                }
            }
        }
    }
    ledger.record(OP, patches.len() * T::DTYPE.size(), 0);
    Ok(UnfoldedWindows { patches: Tensor::from_parts(vec![ho, wo, k * k, d], patches), window, input_hw: (h, w) })
}

/// In-bounds taps `(pixel, offset index)` of window `(i, j)`, column-major.
fn window_taps(h: usize, w: usize, window: &Window, i: usize, j: usize) -> Vec<(usize, usize)> {
    let (lo, _) = window.offsets();
    let k = window.k;
    let mut taps = Vec::with_capacity(k * k);
    for b in 0..k {
        for a in 0..k {
            let r = window.center(i) + lo + a as isize;
            let c = window.center(j) + lo + b as isize;
            if r >= 0 && c >= 0 && (r as usize) < h && (c as usize) < w {
                taps.push((r as usize * w + c as usize, a * k + b));
            }
        }
    }
    taps
}

fn row_times<T: Scalar>(row: &[T], m: &Tensor<T>, bias: Option<&Tensor<T>>) -> Vec<T> {
    let cols = m.shape()[1];
    (0..cols)
        .map(|c| {
            let mut acc = bias.map_or(T::zero(), |b| b.data()[c]);
            for (r, &v) in row.iter().enumerate() {
                acc += v * m.data()[r * cols + c];
            }
            acc
        })
        .collect()
}

/// Masked softmax over `scores` with the window's own max.
fn softmax_window<T: Scalar>(scores: &[T]) -> Vec<T> {
    let max = scores.iter().copied().fold(T::neg_infinity(), T::max);
    let ex: Vec<T> = scores.iter().map(|&s| (s - max).exp()).collect();
    let total: T = ex.iter().copied().sum();
    ex.into_iter().map(|e| e / total).collect()
}

/// Per-window attention of `queries` (`L x dim_out`, may vary per window):
/// returns `weights[l][g][t]` over the in-bounds taps.
fn window_weights<T: Scalar>(
    x: &Tensor<T>,
    cfg: &QnaConfig,
    params: &QnaParams<T>,
    queries: &[T],
    taps: &[(usize, usize)],
) -> Vec<Vec<Vec<T>>> {
    let din = cfg.dim_in;
    let (dh, kk) = (cfg.head_dim(), cfg.k * cfg.k);
    let scale = T::cast(cfg.score_scale());
    let keys: Vec<Vec<T>> =
        taps.iter().map(|&(n, _)| row_times(&x.data()[n * din..(n + 1) * din], &params.w_k, None)).collect();
    (0..cfg.queries)
        .map(|l| {
            (0..cfg.heads)
                .map(|g| {
                    let q = &queries[l * cfg.dim_out + g * dh..l * cfg.dim_out + (g + 1) * dh];
                    let scores: Vec<T> = taps
                        .iter()
                        .zip(&keys)
                        .map(|(&(_, o), key)| {
                            let dot: T = q.iter().zip(&key[g * dh..(g + 1) * dh]).map(|(&a, &b)| a * b).sum();
                            scale * dot + params.bias.data()[l * kk + o]
                        })
                        .collect();
                    softmax_window(&scores)
                })
                .collect()
        })
        .collect()
}

/// Literal per-window QnA with a caller-chosen query matrix per window.
///
/// With `mix = true` the per-query maps are blended with the mixing weights
/// and produce one `dim_out` row per window; otherwise every query keeps its
/// own row and the result is `H' x W' x L x dim_out`.
pub fn qna_window_oracle_with<T: Scalar>(
    x: &Tensor<T>,
    cfg: &QnaConfig,
    params: &QnaParams<T>,
    mix: bool,
    mut queries_at: impl FnMut(usize, usize) -> Result<Vec<T>>,
) -> Result<Tensor<T>> {
    const OP: &str = "qna_window_oracle";
    params.validate(cfg)?;
    let (h, w, din) = dims3(OP, x)?;
    if din != cfg.dim_in {
        return Err(QnaError::shape(OP, "input channels disagree with config"));
    }
    let window = cfg.window();
    let (ho, wo) = (window.out_len(h)?, window.out_len(w)?);
    let (d, dh, kk) = (cfg.dim_out, cfg.head_dim(), cfg.k * cfg.k);
    let rows_per_site = if mix { 1 } else { cfg.queries };
    let mut out = Vec::with_capacity(ho * wo * rows_per_site * d);

    for i in 0..ho {
        for j in 0..wo {
            let taps = window_taps(h, w, &window, i, j);
            if taps.is_empty() {
                return Err(QnaError::NumericalRange { op: OP, detail: "empty window".into() });
            }
            let queries = queries_at(i, j)?;
            let weights = window_weights(x, cfg, params, &queries, &taps);
            let values: Vec<Vec<T>> = taps
                .iter()
                .map(|&(n, _)| row_times(&x.data()[n * din..(n + 1) * din], &params.w_v, Some(&params.b_v)))
                .collect();
            let mut rows: Vec<Vec<T>> = Vec::new();
            if mix {
                let mut z = vec![T::zero(); d];
                for g in 0..cfg.heads {
                    for (t, &(_, o)) in taps.iter().enumerate() {
                        let m: T = (0..cfg.queries).map(|l| params.mix.data()[l * kk + o] * weights[l][g][t]).sum();
                        for c in g * dh..(g + 1) * dh {
                            z[c] += m * values[t][c];
                        }
                    }
                }
                rows.push(z);
            } else {
                for wl in &weights {
                    let mut z = vec![T::zero(); d];
                    for (g, wg) in wl.iter().enumerate() {
                        for (t, &a) in wg.iter().enumerate() {
                            for c in g * dh..(g + 1) * dh {
                                z[c] += a * values[t][c];
                            }
                        }
                    }
                    rows.push(z);
                }
            }
            for z in rows {
                out.extend(row_times(&z, &params.w_o, Some(&params.b_o)));
            }
        }
    }
    let shape = if mix { vec![ho, wo, d] } else { vec![ho, wo, cfg.queries, d] };
    Tensor::checked(OP, shape, out)
}

/// Literal per-window evaluation of the multi-query QnA layer.
pub fn qna_window_oracle<T: Scalar>(x: &Tensor<T>, cfg: &QnaConfig, params: &QnaParams<T>) -> Result<Tensor<T>> {
    let q = params.effective_queries(cfg)?;
    qna_window_oracle_with(x, cfg, params, true, |_, _| Ok(q.data().to_vec()))
}

/// Per-query (unmixed) window outputs, `H' x W' x L x dim_out`.
pub fn qna_window_oracle_per_query<T: Scalar>(
    x: &Tensor<T>,
    cfg: &QnaConfig,
    params: &QnaParams<T>,
) -> Result<Tensor<T>> {
    let q = params.effective_queries(cfg)?;
    qna_window_oracle_with(x, cfg, params, false, |_, _| Ok(q.data().to_vec()))
}

/// Normalized attention weights of query `l`, head `g` for every window:
/// `(i, j, [(pixel, weight)])`.
#[allow(clippy::type_complexity)]
pub fn attention_weights_oracle<T: Scalar>(
    x: &Tensor<T>,
    cfg: &QnaConfig,
    params: &QnaParams<T>,
    l: usize,
    g: usize,
) -> Result<Vec<(usize, usize, Vec<(usize, T)>)>> {
    params.validate(cfg)?;
    let (h, w, _) = dims3("attention_weights_oracle", x)?;
    let window = cfg.window();
    let q = params.effective_queries(cfg)?;
    let mut out = Vec::new();
    for i in 0..window.out_len(h)? {
        for j in 0..window.out_len(w)? {
            let taps = window_taps(h, w, &window, i, j);
            let weights = window_weights(x, cfg, params, q.data(), &taps);
            let pairs = taps.iter().zip(&weights[l][g]).map(|(&(n, _), &a)| (n, a)).collect();
            out.push((i, j, pairs));
        }
    }
    Ok(out)
}

/// Stand-alone self-attention parameters (single head, no output projection).
#[derive(Debug, Clone, PartialEq)]
pub struct SasaParams<T: Scalar = f64> {
    pub w_q: Tensor<T>,
    pub w_k: Tensor<T>,
    pub w_v: Tensor<T>,
    /// Optional `k x k` relative bias; off in the literal formulation.
    pub bias: Option<Tensor<T>>,
    pub scale_scores: bool,
}

impl<T: Scalar> SasaParams<T> {
    pub fn random(dim: usize, std: f64, seed: crate::tensor::RngSeed) -> Result<Self> {
        let mut rng = seed.rng();
        Ok(SasaParams {
            w_q: Tensor::randn([dim, dim], std, &mut rng)?,
            w_k: Tensor::randn([dim, dim], std, &mut rng)?,
            w_v: Tensor::randn([dim, dim], std, &mut rng)?,
            bias: None,
            scale_scores: true,
        })
    }

    fn dim(&self) -> usize {
        self.w_q.shape()[0]
    }
}

/// Windowed self-attention whose query is the projected window centre.
pub fn sasa_forward<T: Scalar>(x: &Tensor<T>, k: usize, params: &SasaParams<T>) -> Result<Tensor<T>> {
    const OP: &str = "sasa_forward";
    let (h, w, d) = dims3(OP, x)?;
    for m in [&params.w_q, &params.w_k, &params.w_v] {
        if m.shape() != [d, d] {
            return Err(QnaError::shape(OP, format!("projection {:?} is not {d} x {d}", m.shape())));
        }
    }
    if let Some(b) = &params.bias {
        if b.shape() != [k, k] {
            return Err(QnaError::shape(OP, "bias must be k x k"));
        }
    }
    let window = Window::same(k, 1).allowing_even();
    window.validate(OP)?;
    let (lo, hi) = window.offsets();
    let scale = if params.scale_scores { T::cast(1.0 / (d as f64).sqrt()) } else { T::one() };
    let px = |n: usize| &x.data()[n * d..(n + 1) * d];
    let mut out = vec![T::zero(); h * w * d];
    // row-major taps, scores accumulated from the transposed product q W_K^T . x
    for i in 0..h {
        for j in 0..w {
            let q = row_times(px(i * w + j), &params.w_q, None);
            let qk: Vec<T> = (0..d).map(|c| (0..d).map(|e| q[e] * params.w_k.data()[c * d + e]).sum()).collect();
            let mut scores = Vec::new();
            let mut pixels = Vec::new();
            for dy in lo..=hi {
                for dx in lo..=hi {
                    let (r, c) = (i as isize + dy, j as isize + dx);
                    if r < 0 || c < 0 || r >= h as isize || c >= w as isize {
                        continue;
                    }
                    let n = r as usize * w + c as usize;
                    let mut s: T = qk.iter().zip(px(n)).map(|(&a, &b)| a * b).sum::<T>() * scale;
                    if let Some(b) = &params.bias {
                        s += b.data()[(dy - lo) as usize * k + (dx - lo) as usize];
                    }
                    scores.push(s);
                    pixels.push(n);
                }
            }
            let a = softmax_window(&scores);
            let z = &mut out[(i * w + j) * d..(i * w + j + 1) * d];
            for (&n, &wt) in pixels.iter().zip(&a) {
                let v = row_times(px(n), &params.w_v, None);
                for (zc, vc) in z.iter_mut().zip(v) {
                    *zc += wt * vc;
                }
            }
        }
    }
    let _ = params.dim();
    Tensor::checked(OP, vec![h, w, d], out)
}

/// Central-difference gradient of a scalar function.
pub fn finite_diff_grad(
    mut f: impl FnMut(&Tensor<f64>) -> Result<f64>,
    x: &Tensor<f64>,
    eps: f64,
) -> Result<Tensor<f64>> {
    const OP: &str = "finite_diff_grad";
    if !(eps > 0.0) {
        return Err(QnaError::invalid(OP, "epsilon must be positive"));
    }
    let mut grad = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        let v = x.data()[i];
        let plus = f(&x.with_flat(i, v + eps)?)?;
        let minus = f(&x.with_flat(i, v - eps)?)?;
        if !plus.is_finite() || !minus.is_finite() {
            return Err(QnaError::NonFinite { op: OP });
        }
        grad.push((plus - minus) / (2.0 * eps));
    }
    Tensor::checked(OP, x.shape().to_vec(), grad)
}

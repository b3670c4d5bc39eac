use super::{QnaConfig, QnaParams};
use crate::error::{QnaError, Result};
use crate::tensor::ledger::Scratch;
use crate::tensor::ops::matmul_into;
use crate::tensor::{dims3, AllocationLedger, Scalar, Tensor, Window};

/// Intermediate maps of the shared-query algorithm, materialized for
/// inspection and for the backward pass.
#[derive(Debug, Clone)]
pub struct ScoreMaps<T: Scalar> {
    /// Query-key dot products, `L x h x H x W`.
    pub scores: Tensor<T>,
    /// `exp(scores - max)` with the max taken per (query, head) over the map.
    pub exp_scores: Tensor<T>,
    /// Per-query windowed value sums, `L x H' x W' x dim_out`.
    pub numerator: Tensor<T>,
    /// Per-query windowed weight sums, `L x h x H' x W'`.
    pub normalizer: Tensor<T>,
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct Geometry {
    pub h: usize,
    pub w: usize,
    pub ho: usize,
    pub wo: usize,
    pub window: Window,
}

impl Geometry {
    pub(crate) fn hw(&self) -> usize {
        self.h * self.w
    }

    pub(crate) fn sites(&self) -> usize {
        self.ho * self.wo
    }
}

pub(crate) fn check_inputs<T: Scalar>(
    op: &'static str,
    x: &Tensor<T>,
    cfg: &QnaConfig,
    params: &QnaParams<T>,
) -> Result<Geometry> {
    params.validate(cfg)?;
    let (h, w, din) = dims3(op, x)?;
    if din != cfg.dim_in {
        return Err(QnaError::shape(op, format!("input has {din} channels, config expects {}", cfg.dim_in)));
    }
    let window = cfg.window();
    Ok(Geometry { h, w, ho: window.out_len(h)?, wo: window.out_len(w)?, window })
}

/// Folds each query into the key projection: `A[l, g, :] = scale * q[l, g] W_K[:, g]^T`.
pub(crate) fn project_queries<T: Scalar>(q: &[T], w_k: &[T], cfg: &QnaConfig, out: &mut [T]) {
    let (din, d, heads) = (cfg.dim_in, cfg.dim_out, cfg.heads);
    let dh = cfg.head_dim();
    let scale = T::cast(cfg.score_scale());
    for l in 0..cfg.queries {
        for g in 0..heads {
            let qg = &q[l * d + g * dh..l * d + (g + 1) * dh];
            let row = &mut out[(l * heads + g) * din..(l * heads + g + 1) * din];
            for (c, a) in row.iter_mut().enumerate() {
                let wk = &w_k[c * d + g * dh..c * d + (g + 1) * dh];
                *a = scale * qg.iter().zip(wk).map(|(&u, &v)| u * v).sum::<T>();
            }
        }
    }
}

/// `S[lg, n] = A[lg, :] . x[n, :]` for every pixel `n`.
pub(crate) fn scores_into<T: Scalar>(x: &[T], a: &[T], hw: usize, din: usize, out: &mut [T]) {
    let lh = a.len() / din;
    for n in 0..hw {
        let xn = &x[n * din..(n + 1) * din];
        for lg in 0..lh {
            let ar = &a[lg * din..(lg + 1) * din];
            out[lg * hw + n] = ar.iter().zip(xn).map(|(&u, &v)| u * v).sum();
        }
    }
}

/// In place `S <- exp(S - max S)`, one max per (query, head) map.
pub(crate) fn exponentiate<T: Scalar>(s: &mut [T], hw: usize) {
    for map in s.chunks_mut(hw) {
        let max = map.iter().copied().fold(T::neg_infinity(), T::max);
        map.iter_mut().for_each(|v| *v = (*v - max).exp());
    }
}

pub(crate) fn values_into<T: Scalar>(x: &[T], params: &QnaParams<T>, hw: usize, cfg: &QnaConfig, out: &mut [T]) {
    let d = cfg.dim_out;
    for row in out.chunks_mut(d) {
        row.copy_from_slice(params.b_v.data());
    }
    matmul_into(x, params.w_v.data(), out, hw, cfg.dim_in, d);
}

/// Windowed numerator and normalizer sums for query `l`:
///
/// `num[p, c] = sum_o mix[l, o] exp(B[l, o]) E[l, g(c), p + o] V[p + o, c]`
/// `den[p, g] = sum_o exp(B[l, o]) E[l, g, p + o]`
///
/// Out-of-bounds taps are skipped, which is the zero-padding of the
/// exponentiated maps. Taps are accumulated in row-major offset order.
#[allow(clippy::too_many_arguments)]
pub(crate) fn window_sums<T: Scalar>(
    l: usize,
    e: &[T],
    v: &[T],
    geo: &Geometry,
    cfg: &QnaConfig,
    params: &QnaParams<T>,
    use_mix: bool,
    num: &mut [T],
    den: &mut [T],
) {
    let (d, heads, hw) = (cfg.dim_out, cfg.heads, geo.hw());
    let dh = cfg.head_dim();
    let k = cfg.k;
    let kk = k * k;
    let (lo, hi) = geo.window.offsets();
    let e_l = &e[l * heads * hw..(l + 1) * heads * hw];
    let bias = &params.bias.data()[l * kk..(l + 1) * kk];
    let mix = &params.mix.data()[l * kk..(l + 1) * kk];
    num.fill(T::zero());
    den.fill(T::zero());

    for i in 0..geo.ho {
        let ci = geo.window.center(i);
        let num_row = &mut num[i * geo.wo * d..(i + 1) * geo.wo * d];
        let den_row = &mut den[i * geo.wo * heads..(i + 1) * geo.wo * heads];
        for dy in lo..=hi {
            let r = ci + dy;
            if r < 0 || r >= geo.h as isize {
                continue;
            }
            let r = r as usize;
            for dx in lo..=hi {
                let o = (dy - lo) as usize * k + (dx - lo) as usize;
                let eb = bias[o].exp();
                let mw = if use_mix { mix[o] * eb } else { eb };
                for j in 0..geo.wo {
                    let col = geo.window.center(j) + dx;
                    if col < 0 || col >= geo.w as isize {
                        continue;
                    }
                    let n = r * geo.w + col as usize;
                    let vrow = &v[n * d..(n + 1) * d];
                    for g in 0..heads {
                        let ev = e_l[g * hw + n];
                        den_row[j * heads + g] += eb * ev;
                        let f = mw * ev;
                        let acc = &mut num_row[j * d + g * dh..j * d + (g + 1) * dh];
                        for (a, &vv) in acc.iter_mut().zip(&vrow[g * dh..(g + 1) * dh]) {
                            *a += f * vv;
                        }
                    }
                }
            }
        }
    }
}

/// `y[p, g-slice] += num[p, g-slice] / den[p, g]`, failing on a zero normalizer.
pub(crate) fn accumulate_ratio<T: Scalar>(
    op: &'static str,
    num: &[T],
    den: &[T],
    cfg: &QnaConfig,
    y: &mut [T],
) -> Result<()> {
    let (d, heads, dh) = (cfg.dim_out, cfg.heads, cfg.head_dim());
    for (p, yrow) in y.chunks_mut(d).enumerate() {
        for g in 0..heads {
            let z = den[p * heads + g];
            if !(z > T::zero()) {
                return Err(QnaError::NumericalRange {
                    op,
                    detail: format!("softmax normalizer underflowed to zero at site {p}, head {g}"),
                });
            }
            for c in g * dh..(g + 1) * dh {
                yrow[c] += num[p * d + c] / z;
            }
        }
    }
    Ok(())
}

pub(crate) fn project_out<T: Scalar>(y: &[T], params: &QnaParams<T>, rows: usize, d: usize) -> Vec<T> {
    let mut out = Vec::with_capacity(rows * d);
    for _ in 0..rows {
        out.extend_from_slice(params.b_o.data());
    }
    matmul_into(y, params.w_o.data(), &mut out, rows, d, d);
    out
}

/// Query-key scores for every pixel, `L x h x H x W`, without materializing keys.
pub fn compute_scores<T: Scalar>(x: &Tensor<T>, cfg: &QnaConfig, params: &QnaParams<T>) -> Result<Tensor<T>> {
    const OP: &str = "compute_scores";
    let geo = check_inputs(OP, x, cfg, params)?;
    let q = params.effective_queries(cfg)?;
    let lh = cfg.queries * cfg.heads;
    let mut a = vec![T::zero(); lh * cfg.dim_in];
    project_queries(q.data(), params.w_k.data(), cfg, &mut a);
    let mut s = vec![T::zero(); lh * geo.hw()];
    scores_into(x.data(), &a, geo.hw(), cfg.dim_in, &mut s);
    Tensor::checked(OP, vec![cfg.queries, cfg.heads, geo.h, geo.w], s)
}

/// QnA layer output, `ceil(H/stride) x ceil(W/stride) x dim_out`.
pub fn qna_forward<T: Scalar>(x: &Tensor<T>, cfg: &QnaConfig, params: &QnaParams<T>) -> Result<Tensor<T>> {
    qna_forward_tracked(x, cfg, params, &mut AllocationLedger::new())
}

pub fn qna_forward_tracked<T: Scalar>(
    x: &Tensor<T>,
    cfg: &QnaConfig,
    params: &QnaParams<T>,
    ledger: &mut AllocationLedger,
) -> Result<Tensor<T>> {
    const OP: &str = "qna_forward";
    let geo = check_inputs(OP, x, cfg, params)?;
    let (hw, d, lh) = (geo.hw(), cfg.dim_out, cfg.queries * cfg.heads);
    let mut scratch = Scratch::default();

    let q = params.effective_queries(cfg)?;
    scratch.adopt(q.data());
    let mut a = scratch.alloc(lh * cfg.dim_in, T::zero());
    project_queries(q.data(), params.w_k.data(), cfg, &mut a);
    let mut e = scratch.alloc(lh * hw, T::zero());
    scores_into(x.data(), &a, hw, cfg.dim_in, &mut e);
    exponentiate(&mut e, hw);

    let out = attend_exp(OP, x, &e, &geo, cfg, params, &mut scratch)?;
    ledger.record(OP, scratch.peak(), out.len() * T::DTYPE.size());
    Tensor::checked(OP, vec![geo.ho, geo.wo, d], out)
}

/// Everything after the exponentiated score map: value projection, windowed
/// sums, normalization, query mixing and the output projection.
fn attend_exp<T: Scalar>(
    op: &'static str,
    x: &Tensor<T>,
    e: &[T],
    geo: &Geometry,
    cfg: &QnaConfig,
    params: &QnaParams<T>,
    scratch: &mut Scratch,
) -> Result<Vec<T>> {
    let (hw, d, sites) = (geo.hw(), cfg.dim_out, geo.sites());
    let mut v = scratch.alloc(hw * d, T::zero());
    values_into(x.data(), params, hw, cfg, &mut v);
    let mut y = scratch.alloc(sites * d, T::zero());
    let mut num = scratch.alloc(sites * d, T::zero());
    let mut den = scratch.alloc(sites * cfg.heads, T::zero());
    for l in 0..cfg.queries {
        window_sums(l, e, &v, geo, cfg, params, true, &mut num, &mut den);
        accumulate_ratio(op, &num, &den, cfg, &mut y)?;
    }
    Ok(project_out(&y, params, sites, d))
}

/// Finishes the layer from a precomputed `L x h x H x W` score map.
pub fn attend_scores<T: Scalar>(
    scores: &Tensor<T>,
    x: &Tensor<T>,
    cfg: &QnaConfig,
    params: &QnaParams<T>,
) -> Result<Tensor<T>> {
    const OP: &str = "attend_scores";
    let geo = check_inputs(OP, x, cfg, params)?;
    if scores.shape() != [cfg.queries, cfg.heads, geo.h, geo.w] {
        return Err(QnaError::shape(OP, format!("score map {:?} does not match input", scores.shape())));
    }
    let mut e = scores.data().to_vec();
    exponentiate(&mut e, geo.hw());
    let out = attend_exp(OP, x, &e, &geo, cfg, params, &mut Scratch::default())?;
    Tensor::checked(OP, vec![geo.ho, geo.wo, cfg.dim_out], out)
}

/// Materializes every intermediate map of the forward pass.
pub fn score_maps<T: Scalar>(x: &Tensor<T>, cfg: &QnaConfig, params: &QnaParams<T>) -> Result<ScoreMaps<T>> {
    const OP: &str = "score_maps";
    let geo = check_inputs(OP, x, cfg, params)?;
    let scores = compute_scores(x, cfg, params)?;
    let mut e = scores.data().to_vec();
    exponentiate(&mut e, geo.hw());
    let (d, heads, sites, l_count) = (cfg.dim_out, cfg.heads, geo.sites(), cfg.queries);
    let mut v = vec![T::zero(); geo.hw() * d];
    values_into(x.data(), params, geo.hw(), cfg, &mut v);
    let mut num = vec![T::zero(); l_count * sites * d];
    let mut den = vec![T::zero(); l_count * sites * heads];
    for l in 0..l_count {
        window_sums(
            l,
            &e,
            &v,
            &geo,
            cfg,
            params,
            true,
            &mut num[l * sites * d..(l + 1) * sites * d],
            &mut den[l * sites * heads..(l + 1) * sites * heads],
        );
    }
    // stored site-major per head for the public layout L x h x H' x W'
    let mut normalizer = vec![T::zero(); den.len()];
    for l in 0..l_count {
        for p in 0..sites {
            for g in 0..heads {
                normalizer[(l * heads + g) * sites + p] = den[(l * sites + p) * heads + g];
            }
        }
    }
    let shape = scores.shape().to_vec();
    Ok(ScoreMaps {
        exp_scores: Tensor::checked(OP, shape, e)?,
        scores,
        numerator: Tensor::checked(OP, vec![l_count, geo.ho, geo.wo, d], num)?,
        normalizer: Tensor::checked(OP, vec![l_count, heads, geo.ho, geo.wo], normalizer)?,
    })
}

use super::forward::{check_inputs, exponentiate, project_queries, scores_into, values_into, window_sums};
use super::{QnaConfig, QnaParams};
use crate::error::{QnaError, Result};
use crate::tensor::{reshape_permute, Scalar, Tensor};

/// Upsampling by `s` with `L = s^2` queries.
///
/// Each query keeps its own attention output (no mixing), giving an
/// `H x W x s^2 x D` tensor that is rearranged so query `a * s + b` of window
/// `(i, j)` lands at output pixel `(i * s + a, j * s + b)`.
pub fn qna_upsample_forward<T: Scalar>(x: &Tensor<T>, cfg: &QnaConfig, params: &QnaParams<T>) -> Result<Tensor<T>> {
    const OP: &str = "qna_upsample_forward";
    let s = (cfg.queries as f64).sqrt().round() as usize;
    if s * s != cfg.queries {
        return Err(QnaError::invalid(OP, format!("{} queries is not a perfect square", cfg.queries)));
    }
    if cfg.stride != 1 {
        return Err(QnaError::invalid(OP, "upsampling requires stride 1"));
    }
    let geo = check_inputs(OP, x, cfg, params)?;
    let (hw, d, lh, l_count) = (geo.hw(), cfg.dim_out, cfg.queries * cfg.heads, cfg.queries);

    let q = params.effective_queries(cfg)?;
    let mut a = vec![T::zero(); lh * cfg.dim_in];
    project_queries(q.data(), params.w_k.data(), cfg, &mut a);
    let mut e = vec![T::zero(); lh * hw];
    scores_into(x.data(), &a, hw, cfg.dim_in, &mut e);
    exponentiate(&mut e, hw);
    let mut v = vec![T::zero(); hw * d];
    values_into(x.data(), params, hw, cfg, &mut v);

    // per-window s^2 x D outputs, before the output projection
    let mut z = vec![T::zero(); hw * l_count * d];
    let mut num = vec![T::zero(); hw * d];
    let mut den = vec![T::zero(); hw * cfg.heads];
    let mut y = vec![T::zero(); hw * d];
    for l in 0..l_count {
        window_sums(l, &e, &v, &geo, cfg, params, false, &mut num, &mut den);
        y.fill(T::zero());
        super::forward::accumulate_ratio(OP, &num, &den, cfg, &mut y)?;
        for p in 0..hw {
            z[(p * l_count + l) * d..(p * l_count + l + 1) * d].copy_from_slice(&y[p * d..(p + 1) * d]);
        }
    }
    let projected = super::forward::project_out(&z, params, hw * l_count, d);
    let z = Tensor::checked(OP, vec![geo.h, geo.w, l_count, d], projected)?;

    let permuted = reshape_permute(&z, &[geo.h, geo.w, s, s, d], &[0, 2, 1, 3, 4])?;
    permuted.reshape([geo.h * s, geo.w * s, d])
}

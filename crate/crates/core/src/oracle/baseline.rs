//! Unfold-based baselines: every window is copied out explicitly before the
//! softmax, so scratch memory grows with `k^2`.

use super::{unfold_tracked, SasaParams};
use crate::error::{QnaError, Result};
use crate::qna::{QnaConfig, QnaParams};
use crate::tensor::{dims3, AllocEvent, AllocationLedger, DType, Scalar, Tensor, Window};

/// Ledger events an unfold baseline would record, computed without running it.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct UnfoldPlan {
    pub events: Vec<AllocEvent>,
    /// Upper bound on bytes live at once beyond the input: every buffer the
    /// baseline allocates, none freed early.
    pub resident_bytes: usize,
}

impl UnfoldPlan {
    fn new(events: Vec<AllocEvent>) -> Self {
        let resident_bytes = events.iter().map(|e| e.transient_bytes + e.output_bytes).sum();
        UnfoldPlan { events, resident_bytes }
    }

    pub fn peak_extra_bytes(&self) -> usize {
        self.events.iter().map(|e| e.transient_bytes).max().unwrap_or(0)
    }
}

fn event(label: &'static str, transient_bytes: usize, output_bytes: usize) -> AllocEvent {
    AllocEvent { label, transient_bytes, output_bytes }
}

/// Planned events of [`qna_unfold`] on an `h x w` input.
pub fn qna_unfold_plan(h: usize, w: usize, cfg: &QnaConfig, dtype: DType) -> Result<UnfoldPlan> {
    cfg.validate()?;
    let b = dtype.size();
    let window = cfg.window();
    let sites = window.out_len(h)? * window.out_len(w)?;
    let (hw, kk, d, lh) = (h * w, cfg.k * cfg.k, cfg.dim_out, cfg.queries * cfg.heads);
    Ok(UnfoldPlan::new(vec![
        event("qna_unfold.project", (cfg.queries * d + lh * cfg.dim_in) * b, (lh * hw + hw * d) * b),
        event("unfold", sites * kk * lh * b, 0),
        event("unfold", sites * kk * d * b, 0),
        event("qna_unfold.attend", (sites * d + kk) * b, sites * d * b),
    ]))
}

/// QnA computed by unfolding the score and value maps into per-window copies.
pub fn qna_unfold<T: Scalar>(
    x: &Tensor<T>,
    cfg: &QnaConfig,
    params: &QnaParams<T>,
    ledger: &mut AllocationLedger,
) -> Result<Tensor<T>> {
    const OP: &str = "qna_unfold";
    params.validate(cfg)?;
    let (h, w, din) = dims3(OP, x)?;
    if din != cfg.dim_in {
        return Err(QnaError::shape(OP, "input channels disagree with config"));
    }
    let (d, dh, heads, l_count) = (cfg.dim_out, cfg.head_dim(), cfg.heads, cfg.queries);
    let (hw, kk, lh) = (h * w, cfg.k * cfg.k, l_count * heads);
    let b = T::DTYPE.size();

    // scores S[n, l*h + g] and values V[n, :], pixel-major
    let q = params.effective_queries(cfg)?;
    let scale = T::cast(cfg.score_scale());
    let keys = crate::tensor::matmul(&x.reshape([hw, din])?, &params.w_k)?;
    let mut s = vec![T::zero(); hw * lh];
    for n in 0..hw {
        let key = &keys.data()[n * d..(n + 1) * d];
        for l in 0..l_count {
            for g in 0..heads {
                let qg = &q.data()[l * d + g * dh..l * d + (g + 1) * dh];
                let dot: T = qg.iter().zip(&key[g * dh..(g + 1) * dh]).map(|(&u, &v)| u * v).sum();
                s[n * lh + l * heads + g] = scale * dot;
            }
        }
    }
    drop(keys);
    let mut v = crate::tensor::matmul(&x.reshape([hw, din])?, &params.w_v)?.into_data();
    for row in v.chunks_mut(d) {
        for (a, &bv) in row.iter_mut().zip(params.b_v.data()) {
            *a += bv;
        }
    }
    ledger.record("qna_unfold.project", (l_count * d + lh * din) * b, (s.len() + v.len()) * b);

    let s = Tensor::from_parts(vec![h, w, lh], s);
    let v = Tensor::from_parts(vec![h, w, d], v);
    let su = unfold_tracked(&s, cfg.k, cfg.stride, ledger)?;
    let vu = unfold_tracked(&v, cfg.k, cfg.stride, ledger)?;
    drop((s, v));
    let (ho, wo) = (su.patches.shape()[0], su.patches.shape()[1]);
    let sites = ho * wo;
    let (sp, vp) = (su.patches.data(), vu.patches.data());
    let mask = su.mask();

    let mut y = vec![T::zero(); sites * d];
    let mut weights = vec![T::zero(); kk];
    for p in 0..sites {
        let m = &mask[p * kk..(p + 1) * kk];
        let yrow = &mut y[p * d..(p + 1) * d];
        for l in 0..l_count {
            let bias = &params.bias.data()[l * kk..(l + 1) * kk];
            let mix = &params.mix.data()[l * kk..(l + 1) * kk];
            for g in 0..heads {
                let mut max = T::neg_infinity();
                for o in (0..kk).filter(|&o| m[o]) {
                    weights[o] = sp[(p * kk + o) * lh + l * heads + g] + bias[o];
                    max = max.max(weights[o]);
                }
                let mut total = T::zero();
                for o in 0..kk {
                    weights[o] = if m[o] { (weights[o] - max).exp() } else { T::zero() };
                    total += weights[o];
                }
                if !(total > T::zero()) {
                    return Err(QnaError::NumericalRange { op: OP, detail: format!("empty window at site {p}") });
                }
                for o in (0..kk).filter(|&o| m[o]) {
                    let f = mix[o] * weights[o] / total;
                    let vrow = &vp[(p * kk + o) * d..(p * kk + o + 1) * d];
                    for c in g * dh..(g + 1) * dh {
                        yrow[c] += f * vrow[c];
                    }
                }
            }
        }
    }
    let y = Tensor::from_parts(vec![sites, d], y);
    let mut out = crate::tensor::matmul(&y, &params.w_o)?.into_data();
    for row in out.chunks_mut(d) {
        for (a, &bo) in row.iter_mut().zip(params.b_o.data()) {
            *a += bo;
        }
    }
    ledger.record("qna_unfold.attend", (sites * d + kk) * b, out.len() * b);
    Tensor::checked(OP, vec![ho, wo, d], out)
}

/// Planned events of [`sasa_unfold`] on an `h x w x dim` input.
pub fn sasa_unfold_plan(h: usize, w: usize, dim: usize, k: usize, dtype: DType) -> Result<UnfoldPlan> {
    Window::same(k, 1).allowing_even().validate("sasa_unfold_plan")?;
    let b = dtype.size();
    let (hw, kk) = (h * w, k * k);
    Ok(UnfoldPlan::new(vec![
        event("sasa_unfold.project", 0, 3 * hw * dim * b),
        event("unfold", hw * kk * dim * b, 0),
        event("unfold", hw * kk * dim * b, 0),
        event("sasa_unfold.attend", kk * b, hw * dim * b),
    ]))
}

/// Windowed self-attention (stride 1) with unfolded key and value maps.
pub fn sasa_unfold<T: Scalar>(
    x: &Tensor<T>,
    k: usize,
    params: &SasaParams<T>,
    ledger: &mut AllocationLedger,
) -> Result<Tensor<T>> {
    const OP: &str = "sasa_unfold";
    let (h, w, d) = dims3(OP, x)?;
    for m in [&params.w_q, &params.w_k, &params.w_v] {
        if m.shape() != [d, d] {
            return Err(QnaError::shape(OP, format!("projection {:?} is not {d} x {d}", m.shape())));
        }
    }
    if params.bias.as_ref().is_some_and(|b| b.shape() != [k, k]) {
        return Err(QnaError::shape(OP, "bias must be k x k"));
    }
    let (hw, kk, b) = (h * w, k * k, T::DTYPE.size());
    let flat = x.reshape([hw, d])?;
    let q = crate::tensor::matmul(&flat, &params.w_q)?;
    let keys = crate::tensor::matmul(&flat, &params.w_k)?.reshape([h, w, d])?;
    let v = crate::tensor::matmul(&flat, &params.w_v)?.reshape([h, w, d])?;
    ledger.record("sasa_unfold.project", 0, 3 * hw * d * b);
    let ku = unfold_tracked(&keys, k, 1, ledger)?;
    let vu = unfold_tracked(&v, k, 1, ledger)?;
    drop((keys, v));
    let mask = ku.mask();
    let (kp, vp) = (ku.patches.data(), vu.patches.data());
    let scale = if params.scale_scores { T::cast(1.0 / (d as f64).sqrt()) } else { T::one() };

    let mut out = vec![T::zero(); hw * d];
    let mut weights = vec![T::zero(); kk];
    for p in 0..hw {
        let m = &mask[p * kk..(p + 1) * kk];
        let qrow = &q.data()[p * d..(p + 1) * d];
        let mut max = T::neg_infinity();
        for o in (0..kk).filter(|&o| m[o]) {
            let key = &kp[(p * kk + o) * d..(p * kk + o + 1) * d];
            let mut s: T = qrow.iter().zip(key).map(|(&a, &c)| a * c).sum::<T>() * scale;
            if let Some(bias) = &params.bias {
                s += bias.data()[o];
            }
            weights[o] = s;
            max = max.max(s);
        }
        let mut total = T::zero();
        for o in 0..kk {
            weights[o] = if m[o] { (weights[o] - max).exp() } else { T::zero() };
            total += weights[o];
        }
        let orow = &mut out[p * d..(p + 1) * d];
        for o in (0..kk).filter(|&o| m[o]) {
            let f = weights[o] / total;
            for (a, &vv) in orow.iter_mut().zip(&vp[(p * kk + o) * d..(p * kk + o + 1) * d]) {
                *a += f * vv;
            }
        }
    }
    ledger.record("sasa_unfold.attend", kk * b, out.len() * b);
    Tensor::checked(OP, vec![h, w, d], out)
}

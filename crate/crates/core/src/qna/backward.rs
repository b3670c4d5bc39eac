use super::forward::{check_inputs, exponentiate, project_queries, scores_into, values_into, window_sums};
use super::{QnaConfig, QnaParams};
use crate::error::{QnaError, Result};
use crate::tensor::{Scalar, Tensor};

/// Gradients of a scalar loss with respect to the layer input and every parameter.
#[derive(Debug, Clone, PartialEq)]
pub struct GradBundle<T: Scalar = f64> {
    pub d_input: Tensor<T>,
    pub d_w_k: Tensor<T>,
    pub d_w_v: Tensor<T>,
    pub d_b_v: Tensor<T>,
    pub d_w_o: Tensor<T>,
    pub d_b_o: Tensor<T>,
    pub d_queries: Tensor<T>,
    pub d_mix: Tensor<T>,
    pub d_bias: Tensor<T>,
}

impl<T: Scalar> GradBundle<T> {
    /// Parameter gradients in `QnaParams` field order.
    pub fn param_grads(&self) -> [&Tensor<T>; 8] {
        [&self.d_w_k, &self.d_w_v, &self.d_b_v, &self.d_w_o, &self.d_b_o, &self.d_queries, &self.d_mix, &self.d_bias]
    }
}

/// `c (m x n) += a^T b` with `a (r x m)`, `b (r x n)`.
fn matmul_tn_into<T: Scalar>(a: &[T], b: &[T], c: &mut [T], r: usize, m: usize, n: usize) {
    for row in 0..r {
        let ar = &a[row * m..(row + 1) * m];
        let br = &b[row * n..(row + 1) * n];
        for (i, &av) in ar.iter().enumerate() {
            for (cv, &bv) in c[i * n..(i + 1) * n].iter_mut().zip(br) {
                *cv += av * bv;
            }
        }
    }
}

/// `c (r x m) += a b^T` with `a (r x n)`, `b (m x n)`.
fn matmul_nt_into<T: Scalar>(a: &[T], b: &[T], c: &mut [T], r: usize, m: usize, n: usize) {
    for row in 0..r {
        let ar = &a[row * n..(row + 1) * n];
        for j in 0..m {
            c[row * m + j] += ar.iter().zip(&b[j * n..(j + 1) * n]).map(|(&u, &v)| u * v).sum::<T>();
        }
    }
}

/// Exact gradients of `sum(d_out * qna_forward(x))`.
///
/// The per-window softmax is differentiated through the quotient rule on the
/// numerator and normalizer sums. The global max subtracted before
/// exponentiation cancels in every ratio, so it is treated as a constant.
pub fn qna_backward<T: Scalar>(
    x: &Tensor<T>,
    cfg: &QnaConfig,
    params: &QnaParams<T>,
    d_out: &Tensor<T>,
) -> Result<GradBundle<T>> {
    const OP: &str = "qna_backward";
    let geo = check_inputs(OP, x, cfg, params)?;
    let (hw, din, d, heads) = (geo.hw(), cfg.dim_in, cfg.dim_out, cfg.heads);
    let (dh, sites, k, l_count) = (cfg.head_dim(), geo.sites(), cfg.k, cfg.queries);
    let kk = k * k;
    let lh = l_count * heads;
    if d_out.shape() != [geo.ho, geo.wo, d] {
        return Err(QnaError::shape(
            OP,
            format!("d_out {:?} does not match output [{}, {}, {d}]", d_out.shape(), geo.ho, geo.wo),
        ));
    }
    let xd = x.data();
    let g_out = d_out.data();
    let zero = T::zero();

    // forward recomputation
    let q = params.effective_queries(cfg)?;
    let mut a = vec![zero; lh * din];
    project_queries(q.data(), params.w_k.data(), cfg, &mut a);
    let mut e = vec![zero; lh * hw];
    scores_into(xd, &a, hw, din, &mut e);
    exponentiate(&mut e, hw);
    let mut v = vec![zero; hw * d];
    values_into(xd, params, hw, cfg, &mut v);
    let mut num = vec![zero; l_count * sites * d];
    let mut den = vec![zero; l_count * sites * heads];
    let mut y = vec![zero; sites * d];
    for l in 0..l_count {
        let num_l = &mut num[l * sites * d..(l + 1) * sites * d];
        let den_l = &mut den[l * sites * heads..(l + 1) * sites * heads];
        window_sums(l, &e, &v, &geo, cfg, params, true, num_l, den_l);
        super::forward::accumulate_ratio(OP, num_l, den_l, cfg, &mut y)?;
    }

    // output projection
    let mut d_w_o = vec![zero; d * d];
    matmul_tn_into(&y, g_out, &mut d_w_o, sites, d, d);
    let mut d_b_o = vec![zero; d];
    for row in g_out.chunks(d) {
        for (acc, &gv) in d_b_o.iter_mut().zip(row) {
            *acc += gv;
        }
    }
    let mut d_y = vec![zero; sites * d];
    matmul_nt_into(g_out, params.w_o.data(), &mut d_y, sites, d, d);

    // window sums
    let (lo, hi) = geo.window.offsets();
    let mut d_e = vec![zero; lh * hw];
    let mut d_v = vec![zero; hw * d];
    let mut d_mix = vec![zero; l_count * kk];
    let mut d_bias = vec![zero; l_count * kk];
    let mut d_num = vec![zero; d];
    let mut d_den = vec![zero; heads];
    for l in 0..l_count {
        let num_l = &num[l * sites * d..(l + 1) * sites * d];
        let den_l = &den[l * sites * heads..(l + 1) * sites * heads];
        let e_l = &e[l * heads * hw..(l + 1) * heads * hw];
        for i in 0..geo.ho {
            let ci = geo.window.center(i);
            for j in 0..geo.wo {
                let cj = geo.window.center(j);
                let p = i * geo.wo + j;
                for g in 0..heads {
                    let z = den_l[p * heads + g];
                    let mut dot = zero;
                    for c in g * dh..(g + 1) * dh {
                        let gy = d_y[p * d + c];
                        d_num[c] = gy / z;
                        dot += gy * num_l[p * d + c];
                    }
                    d_den[g] = -dot / (z * z);
                }
                for dy in lo..=hi {
                    let r = ci + dy;
                    if r < 0 || r >= geo.h as isize {
                        continue;
                    }
                    for dx in lo..=hi {
                        let col = cj + dx;
                        if col < 0 || col >= geo.w as isize {
                            continue;
                        }
                        let o = (dy - lo) as usize * k + (dx - lo) as usize;
                        let n = r as usize * geo.w + col as usize;
                        let eb = params.bias.data()[l * kk + o].exp();
                        let m = params.mix.data()[l * kk + o];
                        let mw = m * eb;
                        let mut d_eb = zero;
                        for g in 0..heads {
                            let ev = e_l[g * hw + n];
                            let mut gv = zero;
                            for c in g * dh..(g + 1) * dh {
                                gv += d_num[c] * v[n * d + c];
                                d_v[n * d + c] += mw * ev * d_num[c];
                            }
                            d_e[(l * heads + g) * hw + n] += mw * gv + eb * d_den[g];
                            d_mix[l * kk + o] += eb * ev * gv;
                            d_eb += m * ev * gv + ev * d_den[g];
                        }
                        d_bias[l * kk + o] += d_eb * eb;
                    }
                }
            }
        }
    }

    // exponentiation and scores: S = A x^T, E = exp(S - max)
    let d_s: Vec<T> = d_e.iter().zip(&e).map(|(&g, &ev)| g * ev).collect();
    let mut d_a = vec![zero; lh * din];
    let mut d_x = vec![zero; hw * din];
    for lg in 0..lh {
        let ds = &d_s[lg * hw..(lg + 1) * hw];
        let ar = &a[lg * din..(lg + 1) * din];
        let da = &mut d_a[lg * din..(lg + 1) * din];
        for (n, &gs) in ds.iter().enumerate() {
            let xn = &xd[n * din..(n + 1) * din];
            let dxn = &mut d_x[n * din..(n + 1) * din];
            for c in 0..din {
                da[c] += gs * xn[c];
                dxn[c] += gs * ar[c];
            }
        }
    }

    // A[l, g, c] = scale * sum_e q[l, g*dh + e] W_K[c, g*dh + e]
    let scale = T::cast(cfg.score_scale());
    let wk = params.w_k.data();
    let qd = q.data();
    let mut d_q = vec![zero; l_count * d];
    let mut d_w_k = vec![zero; din * d];
    for l in 0..l_count {
        for g in 0..heads {
            let da = &d_a[(l * heads + g) * din..(l * heads + g + 1) * din];
            for (c, &gac) in da.iter().enumerate() {
                let gac = gac * scale;
                for e_ in g * dh..(g + 1) * dh {
                    d_q[l * d + e_] += gac * wk[c * d + e_];
                    d_w_k[c * d + e_] += gac * qd[l * d + e_];
                }
            }
        }
    }
    if cfg.normalize_queries {
        // q = r / |r|  =>  dr = (dq - q (q . dq)) / |r|
        let raw = params.queries.data();
        for l in 0..l_count {
            let r = &raw[l * d..(l + 1) * d];
            let norm = r.iter().map(|&u| u * u).sum::<T>().sqrt();
            let qn = &qd[l * d..(l + 1) * d];
            let dq = &mut d_q[l * d..(l + 1) * d];
            let proj: T = qn.iter().zip(dq.iter()).map(|(&u, &w)| u * w).sum();
            for (g, &u) in dq.iter_mut().zip(qn) {
                *g = (*g - u * proj) / norm;
            }
        }
    }

    // V = x W_V + b_V
    let mut d_w_v = vec![zero; din * d];
    matmul_tn_into(xd, &d_v, &mut d_w_v, hw, din, d);
    let mut d_b_v = vec![zero; d];
    for row in d_v.chunks(d) {
        for (acc, &gv) in d_b_v.iter_mut().zip(row) {
            *acc += gv;
        }
    }
    matmul_nt_into(&d_v, params.w_v.data(), &mut d_x, hw, din, d);

    Ok(GradBundle {
        d_input: Tensor::checked(OP, x.shape().to_vec(), d_x)?,
        d_w_k: Tensor::checked(OP, vec![din, d], d_w_k)?,
        d_w_v: Tensor::checked(OP, vec![din, d], d_w_v)?,
        d_b_v: Tensor::checked(OP, vec![d], d_b_v)?,
        d_w_o: Tensor::checked(OP, vec![d, d], d_w_o)?,
        d_b_o: Tensor::checked(OP, vec![d], d_b_o)?,
        d_queries: Tensor::checked(OP, vec![l_count, d], d_q)?,
        d_mix: Tensor::checked(OP, vec![l_count, kk], d_mix)?,
        d_bias: Tensor::checked(OP, vec![l_count, k, k], d_bias)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::qna::qna_forward;
    use crate::tensor::RngSeed;

    #[test]
    fn zero_upstream_gives_zero_grads() {
        let cfg = QnaConfig::new(3, 4).with_heads(2).with_queries(2);
        let p: QnaParams<f64> = QnaParams::random(&cfg, 0.7, RngSeed(1)).unwrap();
        let x = Tensor::randn([4, 4, 3], 1.0, &mut RngSeed(2).rng()).unwrap();
        let g = qna_backward(&x, &cfg, &p, &Tensor::zeros([4, 4, 4]).unwrap()).unwrap();
        assert_eq!(g.d_input.max_abs(), 0.0);
        for t in g.param_grads() {
            assert_eq!(t.max_abs(), 0.0);
        }
    }

    #[test]
    fn output_bias_grad_is_column_sum() {
        let cfg = QnaConfig::new(3, 4).with_stride(2);
        let p: QnaParams<f64> = QnaParams::random(&cfg, 0.7, RngSeed(3)).unwrap();
        let x = Tensor::randn([5, 5, 3], 1.0, &mut RngSeed(4).rng()).unwrap();
        let d_out = Tensor::randn([3, 3, 4], 1.0, &mut RngSeed(5).rng()).unwrap();
        let g = qna_backward(&x, &cfg, &p, &d_out).unwrap();
        for c in 0..4 {
            let want: f64 = d_out.data().iter().skip(c).step_by(4).sum();
            assert!((g.d_b_o.data()[c] - want).abs() < 1e-12);
        }
    }

    #[test]
    fn shape_mismatch_rejected() {
        let cfg = QnaConfig::new(3, 4);
        let p: QnaParams<f64> = QnaParams::random(&cfg, 0.7, RngSeed(3)).unwrap();
        let x = Tensor::randn([4, 4, 3], 1.0, &mut RngSeed(4).rng()).unwrap();
        assert!(qna_backward(&x, &cfg, &p, &Tensor::zeros([4, 4, 3]).unwrap()).is_err());
    }

    /// Directional derivative check along a random perturbation of every input.
    #[test]
    fn directional_derivative_matches() {
        let cfg = QnaConfig::new(3, 4).with_heads(2).with_queries(2).with_stride(2).with_normalized_queries(true);
        let p: QnaParams<f64> = QnaParams::random(&cfg, 0.6, RngSeed(6)).unwrap();
        let x = Tensor::randn([5, 4, 3], 1.0, &mut RngSeed(7).rng()).unwrap();
        let d_out = Tensor::randn([3, 2, 4], 1.0, &mut RngSeed(8).rng()).unwrap();
        let g = qna_backward(&x, &cfg, &p, &d_out).unwrap();

        let mut rng = RngSeed(9).rng();
        let dx = Tensor::randn(x.shape().to_vec(), 1.0, &mut rng).unwrap();
        let mut dp = p.clone();
        for t in dp.tensors_mut() {
            *t = Tensor::randn(t.shape().to_vec(), 1.0, &mut rng).unwrap();
        }
        let loss = |eps: f64| {
            let xs = x.zip_map(&dx, |a, b| a + eps * b).unwrap();
            let mut ps = p.clone();
            for (t, u) in ps.tensors_mut().into_iter().zip(dp.tensors()) {
                *t = t.zip_map(u, |a, b| a + eps * b).unwrap();
            }
            let out = qna_forward(&xs, &cfg, &ps).unwrap();
            out.data().iter().zip(d_out.data()).map(|(a, b)| a * b).sum::<f64>()
        };
        let eps = 1e-5;
        let numeric = (loss(eps) - loss(-eps)) / (2.0 * eps);
        let dot = |a: &Tensor<f64>, b: &Tensor<f64>| a.data().iter().zip(b.data()).map(|(u, v)| u * v).sum::<f64>();
        let analytic =
            dot(&g.d_input, &dx) + g.param_grads().iter().zip(dp.tensors()).map(|(a, b)| dot(a, b)).sum::<f64>();
        assert!((numeric - analytic).abs() < 1e-6 * analytic.abs().max(1.0), "{numeric} vs {analytic}");
    }
}

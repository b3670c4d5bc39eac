use super::forward::{check_inputs, exponentiate, project_queries, scores_into};
use super::{QnaConfig, QnaParams};
use crate::error::{QnaError, Result};
use crate::tensor::{Scalar, Tensor};

/// Total attention each pixel receives from query `query`, head `head`,
/// summed over every window that contains it. Returns an `H x W` map.
pub fn attention_heatmap<T: Scalar>(
    x: &Tensor<T>,
    cfg: &QnaConfig,
    params: &QnaParams<T>,
    query: usize,
    head: usize,
) -> Result<Tensor<T>> {
    const OP: &str = "attention_heatmap";
    if cfg.stride != 1 {
        return Err(QnaError::invalid(OP, "heatmaps need stride 1"));
    }
    let geo = check_inputs(OP, x, cfg, params)?;
    if query >= cfg.queries || head >= cfg.heads {
        return Err(QnaError::invalid(
            OP,
            format!("query {query} / head {head} out of range ({} x {})", cfg.queries, cfg.heads),
        ));
    }
    let (h, w, hw, k) = (geo.h, geo.w, geo.hw(), cfg.k);
    let q = params.effective_queries(cfg)?;
    let lh = cfg.queries * cfg.heads;
    let mut a = vec![T::zero(); lh * cfg.dim_in];
    project_queries(q.data(), params.w_k.data(), cfg, &mut a);
    let mut e = vec![T::zero(); lh * hw];
    scores_into(x.data(), &a, hw, cfg.dim_in, &mut e);
    exponentiate(&mut e, hw);
    let e = &e[(query * cfg.heads + head) * hw..][..hw];
    let eb: Vec<T> = params.bias.data()[query * k * k..(query + 1) * k * k].iter().map(|b| b.exp()).collect();
    let (lo, hi) = geo.window.offsets();

    let inside = |r: isize, c: isize| r >= 0 && c >= 0 && (r as usize) < h && (c as usize) < w;
    let mut heat = vec![T::zero(); hw];
    for i in 0..h {
        for j in 0..w {
            let mut z = T::zero();
            for dy in lo..=hi {
                for dx in lo..=hi {
                    let (r, c) = (i as isize + dy, j as isize + dx);
                    if inside(r, c) {
                        z += eb[((dy - lo) as usize) * k + (dx - lo) as usize] * e[r as usize * w + c as usize];
                    }
                }
            }
            if !(z > T::zero()) {
                return Err(QnaError::NumericalRange { op: OP, detail: format!("normalizer underflow at ({i}, {j})") });
            }
            for dy in lo..=hi {
                for dx in lo..=hi {
                    let (r, c) = (i as isize + dy, j as isize + dx);
                    if inside(r, c) {
                        let n = r as usize * w + c as usize;
                        heat[n] += eb[((dy - lo) as usize) * k + (dx - lo) as usize] * e[n] / z;
                    }
                }
            }
        }
    }
    Tensor::checked(OP, vec![h, w], heat)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::oracle::attention_weights_oracle;
    use crate::tensor::RngSeed;

    #[test]
    fn single_tap_heat_is_one() {
        let cfg = QnaConfig::new(3, 4).with_k(1).with_heads(2).with_queries(2);
        let p: QnaParams<f64> = QnaParams::random(&cfg, 1.0, RngSeed(1)).unwrap();
        let x = Tensor::randn([4, 3, 3], 1.0, &mut RngSeed(2).rng()).unwrap();
        let heat = attention_heatmap(&x, &cfg, &p, 1, 1).unwrap();
        assert!(heat.data().iter().all(|&v| (v - 1.0).abs() < 1e-15));
    }

    #[test]
    fn uniform_attention_heat() {
        let cfg = QnaConfig::new(2, 2);
        let mut p: QnaParams<f64> = QnaParams::random(&cfg, 1.0, RngSeed(3)).unwrap();
        p.w_k = Tensor::zeros([2, 2]).unwrap();
        p.bias = Tensor::zeros([1, 3, 3]).unwrap();
        let x = Tensor::randn([5, 5, 2], 1.0, &mut RngSeed(4).rng()).unwrap();
        let heat = attention_heatmap(&x, &cfg, &p, 0, 0).unwrap();
        // nine interior windows of weight 1/9 each
        assert!((heat.get(&[2, 2]).unwrap() - 1.0).abs() < 1e-12);
        // corner pixel: one 4-tap, two 6-tap and one 9-tap window
        let corner = heat.get(&[0, 0]).unwrap();
        assert!((corner - (1.0 / 4.0 + 2.0 / 6.0 + 1.0 / 9.0)).abs() < 1e-12);
        assert!(corner < 1.0);
    }

    #[test]
    fn matches_per_window_aggregation() {
        let cfg = QnaConfig::new(3, 4).with_k(3).with_heads(2).with_queries(2);
        let p: QnaParams<f64> = QnaParams::random(&cfg, 1.0, RngSeed(5)).unwrap();
        let x = Tensor::randn([5, 6, 3], 1.0, &mut RngSeed(6).rng()).unwrap();
        for (l, g) in [(0, 0), (1, 1), (0, 1)] {
            let heat = attention_heatmap(&x, &cfg, &p, l, g).unwrap();
            let mut want = vec![0.0; 30];
            for (_, _, taps) in attention_weights_oracle(&x, &cfg, &p, l, g).unwrap() {
                for (n, a) in taps {
                    want[n] += a;
                }
            }
            let want = Tensor::new([5, 6], want).unwrap();
            assert!(heat.max_abs_diff(&want).unwrap() < 1e-6);
        }
    }

    #[test]
    fn index_and_stride_errors() {
        let cfg = QnaConfig::new(2, 2).with_queries(2);
        let p: QnaParams<f64> = QnaParams::random(&cfg, 1.0, RngSeed(7)).unwrap();
        let x = Tensor::ones([3, 3, 2]).unwrap();
        assert!(attention_heatmap(&x, &cfg, &p, 2, 0).is_err());
        assert!(attention_heatmap(&x, &cfg, &p, 0, 1).is_err());
        let strided = cfg.with_stride(2);
        assert!(attention_heatmap(&x, &strided, &p, 0, 0).is_err());
    }
}

//! The QnA layer: learned queries shared by every window.
//!
//! Because the queries do not depend on the window, the query-key scores are
//! computed once per pixel. Softmax over each window then reduces to two
//! windowed sums over the exponentiated score map, one weighting the values
//! and one forming the normalizer. Relative position bias enters as a
//! multiplicative `exp(B)` kernel of those sums and the multi-query mixing
//! weights fold into the numerator's kernel, so no `k x k` copy of the input
//! ever exists.

mod backward;
mod forward;
mod heatmap;
mod upsample;

use std::path::Path;

use serde::{Deserialize, Serialize};

pub use backward::{qna_backward, GradBundle};
pub use forward::{attend_scores, compute_scores, qna_forward, qna_forward_tracked, score_maps, ScoreMaps};
pub use heatmap::attention_heatmap;
pub use upsample::qna_upsample_forward;

use crate::error::{QnaError, Result};
use crate::tensor::{Padding, RngSeed, Scalar, Tensor, TensorManifest, Window};

/// Hyper-parameters of one QnA layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct QnaConfig {
    /// Window size.
    pub k: usize,
    pub stride: usize,
    pub heads: usize,
    /// Number of learned queries `L`.
    pub queries: usize,
    pub dim_in: usize,
    pub dim_out: usize,
    /// Multiply scores by `1 / sqrt(head_dim)`.
    pub scale_scores: bool,
    /// Project each query row onto the unit sphere at every forward.
    pub normalize_queries: bool,
}

impl QnaConfig {
    pub fn new(dim_in: usize, dim_out: usize) -> Self {
        QnaConfig {
            k: 3,
            stride: 1,
            heads: 1,
            queries: 1,
            dim_in,
            dim_out,
            scale_scores: true,
            normalize_queries: false,
        }
    }

    pub fn with_k(mut self, k: usize) -> Self {
        self.k = k;
        self
    }

    pub fn with_stride(mut self, stride: usize) -> Self {
        self.stride = stride;
        self
    }

    pub fn with_heads(mut self, heads: usize) -> Self {
        self.heads = heads;
        self
    }

    pub fn with_queries(mut self, queries: usize) -> Self {
        self.queries = queries;
        self
    }

    pub fn with_scale(mut self, scale_scores: bool) -> Self {
        self.scale_scores = scale_scores;
        self
    }

    pub fn with_normalized_queries(mut self, normalize: bool) -> Self {
        self.normalize_queries = normalize;
        self
    }

    pub fn head_dim(&self) -> usize {
        self.dim_out / self.heads
    }

    pub fn window(&self) -> Window {
        Window::new(self.k, self.stride, Padding::Same).allowing_even()
    }

    pub(crate) fn score_scale(&self) -> f64 {
        if self.scale_scores {
            1.0 / (self.head_dim() as f64).sqrt()
        } else {
            1.0
        }
    }

    pub fn validate(&self) -> Result<()> {
        const OP: &str = "QnaConfig";
        if self.k == 0 || self.stride == 0 || self.heads == 0 || self.queries == 0 {
            return Err(QnaError::invalid(OP, "k, stride, heads and queries must be >= 1"));
        }
        if self.dim_in == 0 || self.dim_out == 0 {
            return Err(QnaError::invalid(OP, "dimensions must be positive"));
        }
        if !self.dim_out.is_multiple_of(self.heads) {
            return Err(QnaError::invalid(
                OP,
                format!("dim_out {} not divisible by {} heads", self.dim_out, self.heads),
            ));
        }
        Ok(())
    }

    /// Number of learned scalars in a layer with this configuration.
    pub fn num_params(&self) -> usize {
        let (din, d, l, kk) = (self.dim_in, self.dim_out, self.queries, self.k * self.k);
        din * d + din * d + d + d * d + d + l * d + l * kk + l * kk
    }
}

/// Learned tensors of a QnA layer.
#[derive(Debug, Clone, PartialEq)]
pub struct QnaParams<T: Scalar = f64> {
    /// `dim_in x dim_out`
    pub w_k: Tensor<T>,
    /// `dim_in x dim_out`
    pub w_v: Tensor<T>,
    pub b_v: Tensor<T>,
    /// `dim_out x dim_out`
    pub w_o: Tensor<T>,
    pub b_o: Tensor<T>,
    /// Learned queries, `queries x dim_out`; head `g` uses columns `g*dh..(g+1)*dh`.
    pub queries: Tensor<T>,
    /// Mixing weights over window offsets, `queries x k*k`.
    pub mix: Tensor<T>,
    /// Relative position bias, `queries x k x k`, shared by all heads.
    pub bias: Tensor<T>,
}

pub const PARAM_NAMES: [&str; 8] = ["w_k", "w_v", "b_v", "w_o", "b_o", "queries", "mix", "bias"];

impl<T: Scalar> QnaParams<T> {
    pub fn expected_shapes(cfg: &QnaConfig) -> [Vec<usize>; 8] {
        let (din, d, l, k) = (cfg.dim_in, cfg.dim_out, cfg.queries, cfg.k);
        [vec![din, d], vec![din, d], vec![d], vec![d, d], vec![d], vec![l, d], vec![l, k * k], vec![l, k, k]]
    }

    pub fn tensors(&self) -> [&Tensor<T>; 8] {
        [&self.w_k, &self.w_v, &self.b_v, &self.w_o, &self.b_o, &self.queries, &self.mix, &self.bias]
    }

    pub fn tensors_mut(&mut self) -> [&mut Tensor<T>; 8] {
        [
            &mut self.w_k,
            &mut self.w_v,
            &mut self.b_v,
            &mut self.w_o,
            &mut self.b_o,
            &mut self.queries,
            &mut self.mix,
            &mut self.bias,
        ]
    }

    pub fn named(&self) -> impl Iterator<Item = (&'static str, &Tensor<T>)> {
        PARAM_NAMES.into_iter().zip(self.tensors())
    }

    pub fn num_params(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    pub fn validate(&self, cfg: &QnaConfig) -> Result<()> {
        cfg.validate()?;
        for ((name, t), want) in self.named().zip(Self::expected_shapes(cfg)) {
            if t.shape() != want.as_slice() {
                return Err(QnaError::shape(
                    "QnaParams",
                    format!("{name} has shape {:?}, config needs {want:?}", t.shape()),
                ));
            }
        }
        Ok(())
    }

    /// Conventional initialization: truncated normal (std 0.02) projections and
    /// queries, zero biases, zero relative bias, mixing weights `1 / L`.
    pub fn init(cfg: &QnaConfig, seed: RngSeed) -> Result<Self> {
        cfg.validate()?;
        let mut rng = seed.rng();
        let [wk, wv, bv, wo, bo, q, mix, bias] = Self::expected_shapes(cfg);
        Ok(QnaParams {
            w_k: Tensor::trunc_normal(wk, 0.02, &mut rng)?,
            w_v: Tensor::trunc_normal(wv, 0.02, &mut rng)?,
            b_v: Tensor::zeros(bv)?,
            w_o: Tensor::trunc_normal(wo, 0.02, &mut rng)?,
            b_o: Tensor::zeros(bo)?,
            queries: Tensor::trunc_normal(q, 0.02, &mut rng)?,
            mix: Tensor::full(mix, T::one() / T::cast(cfg.queries as f64))?,
            bias: Tensor::zeros(bias)?,
        })
    }

    /// Gaussian draws for every tensor (biases and mixing weights included),
    /// for tests and benchmarks that need non-degenerate attention.
    pub fn random(cfg: &QnaConfig, std: f64, seed: RngSeed) -> Result<Self> {
        cfg.validate()?;
        let mut rng = seed.rng();
        let [wk, wv, bv, wo, bo, q, mix, bias] = Self::expected_shapes(cfg);
        Ok(QnaParams {
            w_k: Tensor::randn(wk, std, &mut rng)?,
            w_v: Tensor::randn(wv, std, &mut rng)?,
            b_v: Tensor::randn(bv, std, &mut rng)?,
            w_o: Tensor::randn(wo, std, &mut rng)?,
            b_o: Tensor::randn(bo, std, &mut rng)?,
            queries: Tensor::randn(q, std, &mut rng)?,
            mix: Tensor::randn(mix, std, &mut rng)?,
            bias: Tensor::randn(bias, std, &mut rng)?,
        })
    }

    /// Queries as used by the forward pass (unit rows when normalization is on).
    pub fn effective_queries(&self, cfg: &QnaConfig) -> Result<Tensor<T>> {
        if !cfg.normalize_queries {
            return Ok(self.queries.clone());
        }
        let d = cfg.dim_out;
        let mut q = self.queries.data().to_vec();
        for row in q.chunks_mut(d) {
            let norm = row.iter().map(|&v| v * v).sum::<T>().sqrt();
            if norm == T::zero() {
                return Err(QnaError::NumericalRange {
                    op: "effective_queries",
                    detail: "cannot normalize a zero query".into(),
                });
            }
            row.iter_mut().for_each(|v| *v /= norm);
        }
        Tensor::checked("effective_queries", self.queries.shape().to_vec(), q)
    }

    pub fn cast<U: Scalar>(&self) -> QnaParams<U> {
        QnaParams {
            w_k: self.w_k.cast(),
            w_v: self.w_v.cast(),
            b_v: self.b_v.cast(),
            w_o: self.w_o.cast(),
            b_o: self.b_o.cast(),
            queries: self.queries.cast(),
            mix: self.mix.cast(),
            bias: self.bias.cast(),
        }
    }

    /// Writes one `.qnat` file per tensor plus a manifest holding the config.
    pub fn save(&self, cfg: &QnaConfig, dir: impl AsRef<Path>) -> Result<()> {
        TensorManifest::write(dir, serde_json::to_value(cfg)?, self.named().map(|(n, t)| (n.to_string(), t)))?;
        Ok(())
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<(QnaConfig, Self)> {
        let dir = dir.as_ref();
        let manifest = TensorManifest::read(dir)?;
        let cfg: QnaConfig = serde_json::from_value(manifest.config.clone())?;
        let get = |name: &str| manifest.load::<T>(dir, name);
        let params = QnaParams {
            w_k: get("w_k")?,
            w_v: get("w_v")?,
            b_v: get("b_v")?,
            w_o: get("w_o")?,
            b_o: get("b_o")?,
            queries: get("queries")?,
            mix: get("mix")?,
            bias: get("bias")?,
        };
        params.validate(&cfg)?;
        Ok((cfg, params))
    }
}

/// Deterministic parameter initialization for `cfg`.
pub fn init_params<T: Scalar>(cfg: &QnaConfig, seed: RngSeed) -> Result<QnaParams<T>> {
    QnaParams::init(cfg, seed)
}

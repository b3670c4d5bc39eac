use super::{Draw, LN_EPS};
use crate::error::{QnaError, Result};
use crate::oracle::qna_window_oracle;
use crate::qna::{qna_forward, QnaConfig, QnaParams, PARAM_NAMES};
use crate::tensor::{conv2d, layernorm, matmul, softmax_rows, Padding, Scalar, Tensor};

/// Which QnA implementation the blocks call.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum QnaBackend {
    #[default]
    Efficient,
    /// The literal per-window reference.
    Oracle,
}

type Named<'a, T> = Vec<(String, &'a Tensor<T>)>;
type NamedMut<'a, T> = Vec<(String, &'a mut Tensor<T>)>;

/// Affine map `x W + b` over the last axis.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear<T: Scalar> {
    /// `dim_in x dim_out`
    pub w: Tensor<T>,
    pub b: Tensor<T>,
}

impl<T: Scalar> Linear<T> {
    pub(crate) fn build<R: rand::Rng>(din: usize, dout: usize, draw: &mut Draw<R>) -> Result<Self> {
        Ok(Linear { w: draw.weight(vec![din, dout])?, b: draw.bias(vec![dout])? })
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.w.shape()[0], self.w.shape()[1])
    }

    pub fn apply(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let (din, dout) = self.dims();
        let s = x.shape();
        if s.last() != Some(&din) {
            return Err(QnaError::shape("linear", format!("input {s:?} does not end in {din}")));
        }
        let rows = x.len() / din;
        let mut y = matmul(&x.reshape([rows, din])?, &self.w)?.into_data();
        for row in y.chunks_mut(dout) {
            for (v, &b) in row.iter_mut().zip(self.b.data()) {
                *v += b;
            }
        }
        let mut shape = s.to_vec();
        *shape.last_mut().expect("rank >= 1") = dout;
        Tensor::new(shape, y)
    }

    pub(crate) fn cast<U: Scalar>(&self) -> Linear<U> {
        Linear { w: self.w.cast(), b: self.b.cast() }
    }

    pub(crate) fn visit<'a>(&'a self, prefix: &str, out: &mut Named<'a, T>) {
        out.push((format!("{prefix}.w"), &self.w));
        out.push((format!("{prefix}.b"), &self.b));
    }

    pub(crate) fn visit_mut<'a>(&'a mut self, prefix: &str, out: &mut NamedMut<'a, T>) {
        out.push((format!("{prefix}.w"), &mut self.w));
        out.push((format!("{prefix}.b"), &mut self.b));
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerNormParams<T: Scalar> {
    pub gamma: Tensor<T>,
    pub beta: Tensor<T>,
}

impl<T: Scalar> LayerNormParams<T> {
    pub(crate) fn build<R: rand::Rng>(dim: usize, draw: &mut Draw<R>) -> Result<Self> {
        Ok(LayerNormParams { gamma: draw.gain(dim)?, beta: draw.bias(vec![dim])? })
    }

    pub fn apply(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        layernorm(x, &self.gamma, &self.beta, T::cast(LN_EPS))
    }

    pub(crate) fn cast<U: Scalar>(&self) -> LayerNormParams<U> {
        LayerNormParams { gamma: self.gamma.cast(), beta: self.beta.cast() }
    }

    pub(crate) fn visit<'a>(&'a self, prefix: &str, out: &mut Named<'a, T>) {
        out.push((format!("{prefix}.gamma"), &self.gamma));
        out.push((format!("{prefix}.beta"), &self.beta));
    }

    pub(crate) fn visit_mut<'a>(&'a mut self, prefix: &str, out: &mut NamedMut<'a, T>) {
        out.push((format!("{prefix}.gamma"), &mut self.gamma));
        out.push((format!("{prefix}.beta"), &mut self.beta));
    }
}

/// Inverted-bottleneck feed-forward network: linear, GELU, linear.
#[derive(Debug, Clone, PartialEq)]
pub struct Ffn<T: Scalar> {
    pub fc1: Linear<T>,
    pub fc2: Linear<T>,
}

/// GELU, tanh approximation.
fn gelu<T: Scalar>(v: T) -> T {
    let c = T::cast((2.0 / std::f64::consts::PI).sqrt());
    let half = T::cast(0.5);
    half * v * (T::one() + (c * (v + T::cast(0.044715) * v * v * v)).tanh())
}

impl<T: Scalar> Ffn<T> {
    fn build<R: rand::Rng>(dim: usize, expansion: usize, draw: &mut Draw<R>) -> Result<Self> {
        Ok(Ffn { fc1: Linear::build(dim, dim * expansion, draw)?, fc2: Linear::build(dim * expansion, dim, draw)? })
    }

    pub fn apply(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        self.fc2.apply(&self.fc1.apply(x)?.map(gelu)?)
    }

    fn cast<U: Scalar>(&self) -> Ffn<U> {
        Ffn { fc1: self.fc1.cast(), fc2: self.fc2.cast() }
    }

    fn visit<'a>(&'a self, prefix: &str, out: &mut Named<'a, T>) {
        self.fc1.visit(&format!("{prefix}.fc1"), out);
        self.fc2.visit(&format!("{prefix}.fc2"), out);
    }

    fn visit_mut<'a>(&'a mut self, prefix: &str, out: &mut NamedMut<'a, T>) {
        self.fc1.visit_mut(&format!("{prefix}.fc1"), out);
        self.fc2.visit_mut(&format!("{prefix}.fc2"), out);
    }
}

/// Global multi-head self-attention over a token set.
#[derive(Debug, Clone, PartialEq)]
pub struct MsaParams<T: Scalar> {
    pub heads: usize,
    pub q: Linear<T>,
    pub k: Linear<T>,
    pub v: Linear<T>,
    pub o: Linear<T>,
}

impl<T: Scalar> MsaParams<T> {
    fn build<R: rand::Rng>(dim: usize, heads: usize, draw: &mut Draw<R>) -> Result<Self> {
        Ok(MsaParams {
            heads,
            q: Linear::build(dim, dim, draw)?,
            k: Linear::build(dim, dim, draw)?,
            v: Linear::build(dim, dim, draw)?,
            o: Linear::build(dim, dim, draw)?,
        })
    }

    fn linears(&self) -> [(&'static str, &Linear<T>); 4] {
        [("q", &self.q), ("k", &self.k), ("v", &self.v), ("o", &self.o)]
    }
}

/// `softmax(Q K^T / sqrt(d_h)) V` per head over all `N` tokens, then `W_O`.
pub fn msa_forward<T: Scalar>(z: &Tensor<T>, p: &MsaParams<T>) -> Result<Tensor<T>> {
    const OP: &str = "msa_forward";
    let (n, d) = match *z.shape() {
        [n, d] => (n, d),
        ref s => return Err(QnaError::shape(OP, format!("tokens must be N x D, got {s:?}"))),
    };
    if p.heads == 0 || d % p.heads != 0 {
        return Err(QnaError::invalid(OP, format!("{} heads do not divide {d}", p.heads)));
    }
    let dh = d / p.heads;
    let (q, k, v) = (p.q.apply(z)?, p.k.apply(z)?, p.v.apply(z)?);
    let scale = T::cast(1.0 / (dh as f64).sqrt());
    let mut out = vec![T::zero(); n * d];
    for g in 0..p.heads {
        let cols = g * dh..(g + 1) * dh;
        let slice = |t: &Tensor<T>| -> Vec<T> { t.data().chunks(d).flat_map(|r| r[cols.clone()].to_vec()).collect() };
        let (qg, kg, vg) = (slice(&q), slice(&k), slice(&v));
        let mut s = vec![T::zero(); n * n];
        for i in 0..n {
            for j in 0..n {
                let dot: T = qg[i * dh..(i + 1) * dh].iter().zip(&kg[j * dh..(j + 1) * dh]).map(|(&a, &b)| a * b).sum();
                s[i * n + j] = dot * scale;
            }
        }
        let a = softmax_rows(&Tensor::new([n, n], s)?)?;
        let zg = matmul(&a, &Tensor::new([n, dh], vg)?)?;
        for (i, row) in zg.data().chunks(dh).enumerate() {
            out[i * d + g * dh..i * d + (g + 1) * dh].copy_from_slice(row);
        }
    }
    p.o.apply(&Tensor::new([n, d], out)?)
}

/// Pre-norm transformer block with global self-attention.
#[derive(Debug, Clone, PartialEq)]
pub struct VitBlock<T: Scalar> {
    pub norm1: LayerNormParams<T>,
    pub attn: MsaParams<T>,
    pub norm2: LayerNormParams<T>,
    pub ffn: Ffn<T>,
}

impl<T: Scalar> VitBlock<T> {
    pub(crate) fn build<R: rand::Rng>(dim: usize, heads: usize, expansion: usize, draw: &mut Draw<R>) -> Result<Self> {
        Ok(VitBlock {
            norm1: LayerNormParams::build(dim, draw)?,
            attn: MsaParams::build(dim, heads, draw)?,
            norm2: LayerNormParams::build(dim, draw)?,
            ffn: Ffn::build(dim, expansion, draw)?,
        })
    }

    pub(crate) fn cast<U: Scalar>(&self) -> VitBlock<U> {
        let a = &self.attn;
        VitBlock {
            norm1: self.norm1.cast(),
            attn: MsaParams { heads: a.heads, q: a.q.cast(), k: a.k.cast(), v: a.v.cast(), o: a.o.cast() },
            norm2: self.norm2.cast(),
            ffn: self.ffn.cast(),
        }
    }

    pub(crate) fn visit<'a>(&'a self, prefix: &str, out: &mut Named<'a, T>) {
        self.norm1.visit(&format!("{prefix}.norm1"), out);
        for (name, lin) in self.attn.linears() {
            lin.visit(&format!("{prefix}.attn.{name}"), out);
        }
        self.norm2.visit(&format!("{prefix}.norm2"), out);
        self.ffn.visit(&format!("{prefix}.ffn"), out);
    }

    pub(crate) fn visit_mut<'a>(&'a mut self, prefix: &str, out: &mut NamedMut<'a, T>) {
        self.norm1.visit_mut(&format!("{prefix}.norm1"), out);
        let a = &mut self.attn;
        for (name, lin) in [("q", &mut a.q), ("k", &mut a.k), ("v", &mut a.v), ("o", &mut a.o)] {
            lin.visit_mut(&format!("{prefix}.attn.{name}"), out);
        }
        self.norm2.visit_mut(&format!("{prefix}.norm2"), out);
        self.ffn.visit_mut(&format!("{prefix}.ffn"), out);
    }
}

/// `z' = MSA(LN(z)) + z`, then `z'' = FFN(LN(z')) + z'`, over `N x D` tokens.
pub fn vit_block_forward<T: Scalar>(z: &Tensor<T>, p: &VitBlock<T>) -> Result<Tensor<T>> {
    let y = msa_forward(&p.norm1.apply(z)?, &p.attn)?.add(z)?;
    p.ffn.apply(&p.norm2.apply(&y)?)?.add(&y)
}

/// QnA in place of self-attention. With stride 2 the residual path is a
/// strided `1 x 1` convolution that also changes the width.
#[derive(Debug, Clone, PartialEq)]
pub struct QnaBlock<T: Scalar> {
    pub cfg: QnaConfig,
    pub norm1: LayerNormParams<T>,
    pub qna: QnaParams<T>,
    pub skip: Option<Linear<T>>,
    pub norm2: LayerNormParams<T>,
    pub ffn: Ffn<T>,
}

impl<T: Scalar> QnaBlock<T> {
    pub(crate) fn build<R: rand::Rng>(cfg: QnaConfig, expansion: usize, draw: &mut Draw<R>) -> Result<Self> {
        let needs_skip = cfg.stride > 1 || cfg.dim_in != cfg.dim_out;
        Ok(QnaBlock {
            cfg,
            norm1: LayerNormParams::build(cfg.dim_in, draw)?,
            qna: draw.qna(&cfg)?,
            skip: if needs_skip { Some(Linear::build(cfg.dim_in, cfg.dim_out, draw)?) } else { None },
            norm2: LayerNormParams::build(cfg.dim_out, draw)?,
            ffn: Ffn::build(cfg.dim_out, expansion, draw)?,
        })
    }

    pub(crate) fn cast<U: Scalar>(&self) -> QnaBlock<U> {
        QnaBlock {
            cfg: self.cfg,
            norm1: self.norm1.cast(),
            qna: self.qna.cast(),
            skip: self.skip.as_ref().map(Linear::cast),
            norm2: self.norm2.cast(),
            ffn: self.ffn.cast(),
        }
    }

    pub(crate) fn visit<'a>(&'a self, prefix: &str, out: &mut Named<'a, T>) {
        self.norm1.visit(&format!("{prefix}.norm1"), out);
        for (name, t) in self.qna.named() {
            out.push((format!("{prefix}.qna.{name}"), t));
        }
        if let Some(skip) = &self.skip {
            skip.visit(&format!("{prefix}.skip"), out);
        }
        self.norm2.visit(&format!("{prefix}.norm2"), out);
        self.ffn.visit(&format!("{prefix}.ffn"), out);
    }

    pub(crate) fn visit_mut<'a>(&'a mut self, prefix: &str, out: &mut NamedMut<'a, T>) {
        self.norm1.visit_mut(&format!("{prefix}.norm1"), out);
        for (name, t) in PARAM_NAMES.into_iter().zip(self.qna.tensors_mut()) {
            out.push((format!("{prefix}.qna.{name}"), t));
        }
        if let Some(skip) = &mut self.skip {
            skip.visit_mut(&format!("{prefix}.skip"), out);
        }
        self.norm2.visit_mut(&format!("{prefix}.norm2"), out);
        self.ffn.visit_mut(&format!("{prefix}.ffn"), out);
    }
}

/// Pre-norm residual QnA block on an `H x W x D` map.
pub fn qna_block_forward<T: Scalar>(x: &Tensor<T>, p: &QnaBlock<T>, backend: QnaBackend) -> Result<Tensor<T>> {
    let normed = p.norm1.apply(x)?;
    let attended = match backend {
        QnaBackend::Efficient => qna_forward(&normed, &p.cfg, &p.qna)?,
        QnaBackend::Oracle => qna_window_oracle(&normed, &p.cfg, &p.qna)?,
    };
    let residual = match &p.skip {
        Some(skip) => {
            let (din, dout) = skip.dims();
            let w = skip.w.reshape([1, 1, din, dout])?;
            let strided = conv2d(x, &w, p.cfg.stride, Padding::Same)?;
            let bias = Tensor::from_fn(strided.shape().to_vec(), |i| skip.b.data()[i % dout])?;
            strided.add(&bias)?
        }
        None => x.clone(),
    };
    let y = attended.add(&residual)?;
    p.ffn.apply(&p.norm2.apply(&y)?)?.add(&y)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Init;
    use crate::tensor::RngSeed;

    fn draw(seed: u64) -> Draw<rand_chacha::ChaCha8Rng> {
        Draw { rng: RngSeed(seed).rng(), init: Init::Gaussian(0.5) }
    }

    #[test]
    fn zeroed_branches_give_identity() {
        let mut b: VitBlock<f64> = VitBlock::build(8, 2, 4, &mut draw(1)).unwrap();
        b.attn.o = Linear { w: Tensor::zeros([8, 8]).unwrap(), b: Tensor::zeros([8]).unwrap() };
        b.ffn.fc2 = Linear { w: Tensor::zeros([32, 8]).unwrap(), b: Tensor::zeros([8]).unwrap() };
        let z = Tensor::randn([5, 8], 1.0, &mut RngSeed(2).rng()).unwrap();
        assert!(vit_block_forward(&z, &b).unwrap().bit_eq(&z));

        let cfg = QnaConfig::new(8, 8).with_heads(2).with_queries(2);
        let mut q: QnaBlock<f64> = QnaBlock::build(cfg, 4, &mut draw(3)).unwrap();
        q.qna.w_o = Tensor::zeros([8, 8]).unwrap();
        q.qna.b_o = Tensor::zeros([8]).unwrap();
        q.ffn.fc2 = Linear { w: Tensor::zeros([32, 8]).unwrap(), b: Tensor::zeros([8]).unwrap() };
        let x = Tensor::randn([4, 3, 8], 1.0, &mut RngSeed(4).rng()).unwrap();
        assert!(qna_block_forward(&x, &q, QnaBackend::Efficient).unwrap().bit_eq(&x));
    }

    #[test]
    fn single_token_attention_is_value_path() {
        let p: MsaParams<f64> = MsaParams::build(6, 1, &mut draw(5)).unwrap();
        let z = Tensor::randn([1, 6], 1.0, &mut RngSeed(6).rng()).unwrap();
        let want = p.o.apply(&p.v.apply(&z).unwrap()).unwrap();
        assert!(msa_forward(&z, &p).unwrap().max_abs_diff(&want).unwrap() < 1e-12);
    }

    #[test]
    fn msa_matches_loop_oracle() {
        let (n, d, heads) = (9, 16, 4);
        let p: MsaParams<f64> = MsaParams::build(d, heads, &mut draw(7)).unwrap();
        let z = Tensor::randn([n, d], 1.0, &mut RngSeed(8).rng()).unwrap();
        let got = msa_forward(&z, &p).unwrap();
        let (q, k, v) = (p.q.apply(&z).unwrap(), p.k.apply(&z).unwrap(), p.v.apply(&z).unwrap());
        let dh = d / heads;
        let mut concat = vec![0.0; n * d];
        for g in 0..heads {
            for i in 0..n {
                let s: Vec<f64> = (0..n)
                    .map(|j| {
                        (0..dh).map(|e| q.data()[i * d + g * dh + e] * k.data()[j * d + g * dh + e]).sum::<f64>()
                            / (dh as f64).sqrt()
                    })
                    .collect();
                let m = s.iter().cloned().fold(f64::MIN, f64::max);
                let z: f64 = s.iter().map(|v| (v - m).exp()).sum();
                for e in 0..dh {
                    concat[i * d + g * dh + e] =
                        (0..n).map(|j| (s[j] - m).exp() / z * v.data()[j * d + g * dh + e]).sum();
                }
            }
        }
        let want = p.o.apply(&Tensor::new([n, d], concat).unwrap()).unwrap();
        assert!(got.max_abs_diff(&want).unwrap() < 1e-10);
    }

    #[test]
    fn strided_block_shape_and_composition() {
        let cfg = QnaConfig::new(8, 16).with_stride(2).with_heads(2).with_queries(2);
        let b: QnaBlock<f64> = QnaBlock::build(cfg, 4, &mut draw(9)).unwrap();
        let x = Tensor::randn([8, 8, 8], 1.0, &mut RngSeed(10).rng()).unwrap();
        let got = qna_block_forward(&x, &b, QnaBackend::Efficient).unwrap();
        assert_eq!(got.shape(), &[4, 4, 16]);

        // manual composition from the primitive ops
        let normed = layernorm(&x, &b.norm1.gamma, &b.norm1.beta, LN_EPS).unwrap();
        let att = qna_forward(&normed, &cfg, &b.qna).unwrap();
        let skip = b.skip.as_ref().unwrap();
        let mut y = att.data().to_vec();
        for i in 0..4 {
            for j in 0..4 {
                let px = &x.data()[((2 * i) * 8 + 2 * j) * 8..][..8];
                for c in 0..16 {
                    let s: f64 = (0..8).map(|a| px[a] * skip.w.data()[a * 16 + c]).sum::<f64>() + skip.b.data()[c];
                    y[(i * 4 + j) * 16 + c] += s;
                }
            }
        }
        let y = Tensor::new([4, 4, 16], y).unwrap();
        let n2 = layernorm(&y, &b.norm2.gamma, &b.norm2.beta, LN_EPS).unwrap();
        let h = matmul(&n2.reshape([16, 16]).unwrap(), &b.ffn.fc1.w).unwrap();
        let h = Tensor::from_fn([16, 64], |i| gelu(h.data()[i] + b.ffn.fc1.b.data()[i % 64])).unwrap();
        let f = matmul(&h, &b.ffn.fc2.w).unwrap();
        let want = Tensor::from_fn([4, 4, 16], |i| f.data()[i] + b.ffn.fc2.b.data()[i % 16] + y.data()[i]).unwrap();
        assert!(got.max_abs_diff(&want).unwrap() < 1e-12);

        let oracle = qna_block_forward(&x, &b, QnaBackend::Oracle).unwrap();
        assert!(got.max_abs_diff(&oracle).unwrap() < 1e-10);
    }

    #[test]
    fn gelu_reference_values() {
        assert_eq!(gelu(0.0f64), 0.0);
        assert!((gelu(1.0f64) - 0.841_191_990_608_276_8).abs() < 1e-12);
        assert!((gelu(-3.0f64) + 0.003_637_392_081_773).abs() < 1e-12);
    }
}

//! QnA-ViT: a four-stage hierarchical backbone built from QnA blocks and
//! global self-attention blocks, with parameter and MAC accounting.

mod blocks;
mod cost;

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

pub use blocks::{
    msa_forward, qna_block_forward, vit_block_forward, Ffn, LayerNormParams, Linear, MsaParams, QnaBackend, QnaBlock,
    VitBlock,
};
pub use cost::{count_flops, count_params, qna_layer_macs, CostReport, CostRow};

use crate::error::{QnaError, Result};
use crate::qna::{QnaConfig, QnaParams};
use crate::tensor::{conv2d, layernorm, Padding, RngSeed, Scalar, Tensor, TensorManifest};

pub(crate) const LN_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    Tiny,
    Small,
    Base,
}

impl Variant {
    pub const ALL: [Variant; 3] = [Variant::Tiny, Variant::Small, Variant::Base];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Tiny => "tiny",
            Variant::Small => "small",
            Variant::Base => "base",
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = QnaError;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| QnaError::invalid("Variant", format!("unknown variant `{s}` (tiny, small, base)")))
    }
}

/// Layout of a QnA-ViT network.
///
/// `qna_blocks[s]` counts the stride-2 QnA block that ends stage `s` and
/// opens stage `s + 1`; the last stage has no such block.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArchConfig {
    pub name: String,
    pub base_dim: usize,
    pub stage_dims: [usize; 4],
    /// Global self-attention blocks per stage.
    pub vit_blocks: [usize; 4],
    /// QnA blocks per stage, downsamplers included.
    pub qna_blocks: [usize; 4],
    pub qna_heads: [usize; 4],
    pub sa_heads: [usize; 4],
    /// Heads of the stride-2 QnA block entering stages 2, 3 and 4.
    pub downsample_heads: [usize; 3],
    pub k: usize,
    pub queries: usize,
    pub normalize_queries: bool,
    pub ffn_expansion: usize,
    pub patch_size: usize,
    pub in_channels: usize,
    pub num_classes: usize,
}

/// One block of the network in execution order.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BlockSpec {
    Vit { stage: usize, dim: usize, heads: usize },
    Qna { stage: usize, cfg: QnaConfig },
}

impl ArchConfig {
    pub fn preset(variant: Variant) -> Self {
        let (d, vit, qna, qna_heads, sa_heads, down) = match variant {
            Variant::Tiny => (64, [0, 0, 4, 2], [3, 4, 3, 0], [8, 16, 32, 0], [0, 0, 8, 16], [16, 32, 64]),
            Variant::Small => (64, [0, 0, 12, 2], [3, 4, 7, 0], [8, 16, 32, 0], [0, 0, 8, 16], [16, 32, 64]),
            Variant::Base => (96, [0, 0, 12, 2], [3, 4, 7, 0], [6, 12, 24, 0], [0, 0, 12, 24], [16, 32, 48]),
        };
        ArchConfig {
            name: variant.name().to_string(),
            base_dim: d,
            stage_dims: [d, 2 * d, 4 * d, 8 * d],
            vit_blocks: vit,
            qna_blocks: qna,
            qna_heads,
            sa_heads,
            downsample_heads: down,
            k: 3,
            queries: 2,
            normalize_queries: true,
            ffn_expansion: 4,
            patch_size: 4,
            in_channels: 3,
            num_classes: 1000,
        }
    }

    pub fn with_k(mut self, k: usize) -> Self {
        self.k = k;
        self
    }

    pub fn with_queries(mut self, queries: usize) -> Self {
        self.queries = queries;
        self
    }

    /// Patch embedding, final norm and classifier only.
    pub fn without_blocks(mut self) -> Self {
        self.vit_blocks = [0; 4];
        self.qna_blocks = [0; 4];
        self
    }

    fn qna_cfg(&self, dim_in: usize, dim_out: usize, heads: usize, stride: usize) -> QnaConfig {
        QnaConfig::new(dim_in, dim_out)
            .with_k(self.k)
            .with_stride(stride)
            .with_heads(heads)
            .with_queries(self.queries)
            .with_normalized_queries(self.normalize_queries)
    }

    /// Blocks in execution order. Within a stage the self-attention blocks
    /// come first, then the stride-1 QnA blocks, then the downsampler.
    pub fn layout(&self) -> Result<Vec<BlockSpec>> {
        self.validate()?;
        let mut blocks = Vec::new();
        for s in 0..4 {
            let dim = self.stage_dims[s];
            for _ in 0..self.vit_blocks[s] {
                blocks.push(BlockSpec::Vit { stage: s, dim, heads: self.sa_heads[s] });
            }
            let q = self.qna_blocks[s];
            let downsample = s < 3 && q > 0;
            for _ in 0..q - usize::from(downsample) {
                blocks.push(BlockSpec::Qna { stage: s, cfg: self.qna_cfg(dim, dim, self.qna_heads[s], 1) });
            }
            if downsample {
                let cfg = self.qna_cfg(dim, self.stage_dims[s + 1], self.downsample_heads[s], 2);
                blocks.push(BlockSpec::Qna { stage: s, cfg });
            }
        }
        Ok(blocks)
    }

    /// Channel width after the last block.
    pub fn final_dim(&self) -> usize {
        let stages = (0..3).take_while(|&s| self.qna_blocks[s] > 0).count();
        self.stage_dims[stages]
    }

    /// Total spatial reduction from image to final token grid.
    pub fn reduction(&self) -> usize {
        let stages = (0..3).take_while(|&s| self.qna_blocks[s] > 0).count();
        self.patch_size << stages
    }

    pub fn validate(&self) -> Result<()> {
        const OP: &str = "ArchConfig";
        let bad = |m: String| Err(QnaError::invalid(OP, m));
        if self.stage_dims[0] != self.base_dim {
            return bad(format!("first stage dim {} differs from base dim {}", self.stage_dims[0], self.base_dim));
        }
        if [self.k, self.queries, self.ffn_expansion, self.patch_size, self.in_channels, self.num_classes].contains(&0)
        {
            return bad("k, queries, ffn_expansion, patch_size, in_channels and num_classes must be positive".into());
        }
        if self.stage_dims.contains(&0) {
            return bad("stage dims must be positive".into());
        }
        let mut ended = false;
        for s in 0..4 {
            let (t, q) = (self.vit_blocks[s], self.qna_blocks[s]);
            if ended && t + q > 0 {
                return bad(format!("stage {} has blocks but no downsampler reaches it", s + 1));
            }
            let dim = self.stage_dims[s];
            let stride_one = if s < 3 { q.saturating_sub(1) } else { q };
            let heads_ok = |h: usize, d: usize| h > 0 && d.is_multiple_of(h);
            if t > 0 && !heads_ok(self.sa_heads[s], dim) {
                return bad(format!("stage {} SA heads {} do not divide {dim}", s + 1, self.sa_heads[s]));
            }
            if stride_one > 0 && !heads_ok(self.qna_heads[s], dim) {
                return bad(format!("stage {} QnA heads {} do not divide {dim}", s + 1, self.qna_heads[s]));
            }
            if s < 3 && q > 0 && !heads_ok(self.downsample_heads[s], self.stage_dims[s + 1]) {
                return bad(format!(
                    "downsampler heads {} do not divide {}",
                    self.downsample_heads[s],
                    self.stage_dims[s + 1]
                ));
            }
            if s < 3 && q == 0 {
                ended = true;
            }
        }
        Ok(())
    }
}

/// How freshly built weights are drawn.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Init {
    /// Truncated normal (std 0.02) weights, zero biases, unit LayerNorm gains.
    Conventional,
    /// Gaussian draws of the given std for every tensor, LayerNorm gains
    /// centred on one. Makes attention non-degenerate for equivalence tests.
    Gaussian(f64),
}

#[derive(Debug, Clone, PartialEq)]
pub enum Block<T: Scalar> {
    Vit(VitBlock<T>),
    Qna(QnaBlock<T>),
}

/// All weights of a QnA-ViT network.
#[derive(Debug, Clone, PartialEq)]
pub struct Model<T: Scalar = f32> {
    pub arch: ArchConfig,
    /// `patch x patch x in_channels x D`
    pub patch_w: Tensor<T>,
    pub patch_b: Tensor<T>,
    pub blocks: Vec<Block<T>>,
    pub norm: LayerNormParams<T>,
    pub head: Linear<T>,
}

pub(crate) struct Draw<R> {
    pub rng: R,
    pub init: Init,
}

impl<R: rand::Rng> Draw<R> {
    pub(crate) fn weight<T: Scalar>(&mut self, shape: Vec<usize>) -> Result<Tensor<T>> {
        match self.init {
            Init::Conventional => Tensor::trunc_normal(shape, 0.02, &mut self.rng),
            Init::Gaussian(std) => Tensor::randn(shape, std, &mut self.rng),
        }
    }

    pub(crate) fn bias<T: Scalar>(&mut self, shape: Vec<usize>) -> Result<Tensor<T>> {
        match self.init {
            Init::Conventional => Tensor::zeros(shape),
            Init::Gaussian(std) => Tensor::randn(shape, std, &mut self.rng),
        }
    }

    pub(crate) fn gain<T: Scalar>(&mut self, dim: usize) -> Result<Tensor<T>> {
        match self.init {
            Init::Conventional => Tensor::ones([dim]),
            Init::Gaussian(std) => Tensor::randn([dim], std, &mut self.rng)?.map(|v| v + T::one()),
        }
    }

    pub(crate) fn qna<T: Scalar>(&mut self, cfg: &QnaConfig) -> Result<QnaParams<T>> {
        let seed = RngSeed(self.rng.random());
        match self.init {
            Init::Conventional => QnaParams::init(cfg, seed),
            Init::Gaussian(std) => QnaParams::random(cfg, std, seed),
        }
    }
}

impl<T: Scalar> Model<T> {
    pub fn build(arch: &ArchConfig, init: Init, seed: RngSeed) -> Result<Self> {
        let layout = arch.layout()?;
        let mut draw = Draw { rng: seed.rng(), init };
        let (p, d) = (arch.patch_size, arch.base_dim);
        let patch_w = draw.weight(vec![p, p, arch.in_channels, d])?;
        let patch_b = draw.bias(vec![d])?;
        let mut blocks = Vec::with_capacity(layout.len());
        for spec in layout {
            blocks.push(match spec {
                BlockSpec::Vit { dim, heads, .. } => {
                    Block::Vit(VitBlock::build(dim, heads, arch.ffn_expansion, &mut draw)?)
                }
                BlockSpec::Qna { cfg, .. } => Block::Qna(QnaBlock::build(cfg, arch.ffn_expansion, &mut draw)?),
            });
        }
        let fd = arch.final_dim();
        let norm = LayerNormParams::build(fd, &mut draw)?;
        let head = Linear::build(fd, arch.num_classes, &mut draw)?;
        Ok(Model { arch: arch.clone(), patch_w, patch_b, blocks, norm, head })
    }

    /// Every parameter tensor with a dotted name, in a fixed order.
    pub fn named_tensors(&self) -> Vec<(String, &Tensor<T>)> {
        let mut out = vec![("patch.w".to_string(), &self.patch_w), ("patch.b".to_string(), &self.patch_b)];
        for (i, block) in self.blocks.iter().enumerate() {
            let prefix = format!("blocks.{i}");
            match block {
                Block::Vit(b) => b.visit(&prefix, &mut out),
                Block::Qna(b) => b.visit(&prefix, &mut out),
            }
        }
        self.norm.visit("norm", &mut out);
        self.head.visit("head", &mut out);
        out
    }

    fn named_tensors_mut(&mut self) -> Vec<(String, &mut Tensor<T>)> {
        let mut out = vec![("patch.w".to_string(), &mut self.patch_w), ("patch.b".to_string(), &mut self.patch_b)];
        for (i, block) in self.blocks.iter_mut().enumerate() {
            let prefix = format!("blocks.{i}");
            match block {
                Block::Vit(b) => b.visit_mut(&prefix, &mut out),
                Block::Qna(b) => b.visit_mut(&prefix, &mut out),
            }
        }
        self.norm.visit_mut("norm", &mut out);
        self.head.visit_mut("head", &mut out);
        out
    }

    pub fn cast<U: Scalar>(&self) -> Model<U> {
        Model {
            arch: self.arch.clone(),
            patch_w: self.patch_w.cast(),
            patch_b: self.patch_b.cast(),
            blocks: self
                .blocks
                .iter()
                .map(|b| match b {
                    Block::Vit(v) => Block::Vit(v.cast()),
                    Block::Qna(q) => Block::Qna(q.cast()),
                })
                .collect(),
            norm: self.norm.cast(),
            head: self.head.cast(),
        }
    }

    /// Writes the architecture and every weight as a tensor manifest.
    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        TensorManifest::write(dir, serde_json::to_value(&self.arch)?, self.named_tensors())?;
        Ok(())
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let manifest = TensorManifest::read(dir)?;
        let arch: ArchConfig = serde_json::from_value(manifest.config.clone())?;
        let mut model = Model::build(&arch, Init::Conventional, RngSeed::default())?;
        for (name, t) in model.named_tensors_mut() {
            let loaded = manifest.load::<T>(dir, &name)?;
            if loaded.shape() != t.shape() {
                return Err(QnaError::Format(format!(
                    "tensor `{name}` has shape {:?}, expected {:?}",
                    loaded.shape(),
                    t.shape()
                )));
            }
            *t = loaded;
        }
        Ok(model)
    }
}

/// Deterministic preset network with conventional initialization.
pub fn build_model<T: Scalar>(variant: Variant, seed: RngSeed) -> Result<Model<T>> {
    Model::build(&ArchConfig::preset(variant), Init::Conventional, seed)
}

/// Token grids after the patch embedding and each stage for an `h x w` image.
pub fn stage_grids(arch: &ArchConfig, h: usize, w: usize) -> Result<Vec<(usize, usize)>> {
    let layout = arch.layout()?;
    let mut grid = (h / arch.patch_size, w / arch.patch_size);
    let mut grids = vec![grid];
    for spec in layout {
        if let BlockSpec::Qna { cfg, .. } = spec {
            if cfg.stride > 1 {
                grid = (grid.0.div_ceil(cfg.stride), grid.1.div_ceil(cfg.stride));
                grids.push(grid);
            }
        }
    }
    Ok(grids)
}

fn check_resolution(op: &'static str, arch: &ArchConfig, h: usize, w: usize) -> Result<()> {
    let need = arch.reduction().max(32);
    if h == 0 || w == 0 || !h.is_multiple_of(need) || !w.is_multiple_of(need) {
        return Err(QnaError::invalid(op, format!("resolution {h}x{w} is not divisible by {need}")));
    }
    Ok(())
}

/// Classifier logits for one `H x W x in_channels` image.
///
/// Patch embedding, the blocks in order, LayerNorm, global average pooling
/// and the linear head.
pub fn forward_inference<T: Scalar>(model: &Model<T>, image: &Tensor<T>, backend: QnaBackend) -> Result<Tensor<T>> {
    const OP: &str = "forward_inference";
    let arch = &model.arch;
    let shape = image.shape();
    if shape.len() != 3 || shape[2] != arch.in_channels {
        return Err(QnaError::shape(OP, format!("image {shape:?} is not H x W x {}", arch.in_channels)));
    }
    check_resolution(OP, arch, shape[0], shape[1])?;
    let mut x = conv2d(image, &model.patch_w, arch.patch_size, Padding::Valid)?;
    let d = arch.base_dim;
    x = x.zip_map(&Tensor::from_fn(x.shape().to_vec(), |i| model.patch_b.data()[i % d])?, |a, b| a + b)?;
    for block in &model.blocks {
        x = match block {
            Block::Vit(b) => {
                let s = x.shape().to_vec();
                let tokens = x.reshape([s[0] * s[1], s[2]])?;
                vit_block_forward(&tokens, b)?.reshape(s)?
            }
            Block::Qna(b) => qna_block_forward(&x, b, backend)?,
        };
    }
    let x = layernorm(&x, &model.norm.gamma, &model.norm.beta, T::cast(LN_EPS))?;
    let fd = *x.shape().last().expect("rank 3");
    let n = x.len() / fd;
    let mut pooled = vec![T::zero(); fd];
    for row in x.data().chunks(fd) {
        for (p, &v) in pooled.iter_mut().zip(row) {
            *p += v;
        }
    }
    let inv = T::one() / T::cast(n as f64);
    let pooled = Tensor::new([1, fd], pooled.into_iter().map(|v| v * inv).collect())?;
    model.head.apply(&pooled)?.reshape([arch.num_classes])
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn preset_dims() {
        assert_eq!(ArchConfig::preset(Variant::Tiny).stage_dims, [64, 128, 256, 512]);
        assert_eq!(ArchConfig::preset(Variant::Base).stage_dims, [96, 192, 384, 768]);
        for v in Variant::ALL {
            let arch = ArchConfig::preset(v);
            arch.validate().unwrap();
            assert_eq!(arch.final_dim(), arch.stage_dims[3]);
            assert_eq!(arch.reduction(), 32);
        }
        assert!("huge".parse::<Variant>().is_err());
        assert_eq!("small".parse::<Variant>().unwrap(), Variant::Small);
    }

    #[test]
    fn tiny_layout_matches_block_table() {
        let layout = ArchConfig::preset(Variant::Tiny).layout().unwrap();
        let mut per_stage = [(0, 0, 0); 4];
        for spec in &layout {
            match *spec {
                BlockSpec::Vit { stage, heads, .. } => {
                    per_stage[stage].0 += 1;
                    assert_eq!(heads, [0, 0, 8, 16][stage]);
                }
                BlockSpec::Qna { stage, cfg } if cfg.stride == 2 => {
                    per_stage[stage].2 += 1;
                    assert_eq!(cfg.heads, [16, 32, 64][stage]);
                    assert_eq!(cfg.dim_out, 2 * cfg.dim_in);
                }
                BlockSpec::Qna { stage, cfg } => {
                    per_stage[stage].1 += 1;
                    assert_eq!(cfg.heads, [8, 16, 32][stage]);
                }
            }
        }
        assert_eq!(per_stage, [(0, 2, 1), (0, 3, 1), (4, 2, 1), (2, 0, 0)]);
    }

    #[test]
    fn stage_grids_at_224_and_64() {
        let arch = ArchConfig::preset(Variant::Tiny);
        assert_eq!(stage_grids(&arch, 224, 224).unwrap(), vec![(56, 56), (28, 28), (14, 14), (7, 7)]);
        assert_eq!(stage_grids(&arch, 64, 64).unwrap(), vec![(16, 16), (8, 8), (4, 4), (2, 2)]);
    }

    #[test]
    fn invalid_layouts_rejected() {
        let mut arch = ArchConfig::preset(Variant::Tiny);
        arch.qna_blocks[1] = 0;
        assert!(arch.validate().is_err());
        let mut arch = ArchConfig::preset(Variant::Tiny);
        arch.sa_heads[2] = 7;
        assert!(arch.validate().is_err());
        assert!(ArchConfig::preset(Variant::Tiny).without_blocks().validate().is_ok());
    }

    #[test]
    fn build_is_deterministic() {
        let mut arch = ArchConfig::preset(Variant::Tiny);
        arch.stage_dims = [8, 16, 32, 64];
        arch.base_dim = 8;
        arch.qna_heads = [2, 2, 4, 0];
        arch.sa_heads = [0, 0, 4, 4];
        arch.downsample_heads = [2, 4, 4];
        arch.num_classes = 5;
        let a: Model<f32> = Model::build(&arch, Init::Conventional, RngSeed(3)).unwrap();
        let b: Model<f32> = Model::build(&arch, Init::Conventional, RngSeed(3)).unwrap();
        assert_eq!(a.named_tensors().len(), b.named_tensors().len());
        for ((na, ta), (nb, tb)) in a.named_tensors().into_iter().zip(b.named_tensors()) {
            assert_eq!(na, nb);
            assert!(ta.bit_eq(tb));
        }
        let c: Model<f32> = Model::build(&arch, Init::Conventional, RngSeed(4)).unwrap();
        assert_ne!(a, c);
    }
}

use std::fs;
use std::path::{Path, PathBuf};

use qna_core::qna::{attention_heatmap, QnaConfig, QnaParams};
use qna_core::tensor::read_tensor_any;
use qna_core::{QnaError, Result, RngSeed, Tensor};

pub struct VizOptions {
    pub input: PathBuf,
    pub k: usize,
    pub out: PathBuf,
    pub queries: usize,
    pub heads: usize,
    pub uniform: bool,
    pub seed: RngSeed,
}

/// Binary greyscale PGM, min-max scaled to 0..=255. Constant maps are written black.
pub fn write_pgm(path: &Path, map: &Tensor<f64>) -> Result<()> {
    let (h, w) = (map.shape()[0], map.shape()[1]);
    let lo = map.data().iter().copied().fold(f64::INFINITY, f64::min);
    let hi = map.data().iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let range = hi - lo;
    let mut bytes = format!("P5\n{w} {h}\n255\n").into_bytes();
    bytes.extend(map.data().iter().map(|&v| if range > 0.0 { ((v - lo) / range * 255.0).round() as u8 } else { 0 }));
    fs::write(path, bytes)?;
    Ok(())
}

/// Writes one heatmap per (query, head); returns how many.
pub fn render(opts: &VizOptions) -> Result<usize> {
    let x: Tensor<f64> = read_tensor_any(&opts.input)?.into_dtype();
    if x.rank() != 3 {
        return Err(QnaError::ShapeMismatch {
            op: "viz",
            detail: format!("input has rank {}, expected H x W x D", x.rank()),
        });
    }
    let din = x.shape()[2];
    let dim_out = opts.heads * din.div_ceil(opts.heads);
    let cfg = QnaConfig::new(din, dim_out).with_k(opts.k).with_queries(opts.queries).with_heads(opts.heads);
    let mut params = QnaParams::<f64>::random(&cfg, 1.0 / (din as f64).sqrt(), opts.seed)?;
    if opts.uniform {
        params.w_k = Tensor::zeros(params.w_k.shape().to_vec())?;
        params.bias = Tensor::zeros(params.bias.shape().to_vec())?;
    }
    fs::create_dir_all(&opts.out)?;
    let mut written = 0;
    for l in 0..cfg.queries {
        for g in 0..cfg.heads {
            let map = attention_heatmap(&x, &cfg, &params, l, g)?;
            write_pgm(&opts.out.join(format!("attn_q{l}_h{g}.pgm")), &map)?;
            written += 1;
        }
    }
    Ok(written)
}

use serde::{Deserialize, Serialize};

use super::{check_resolution, Block, BlockSpec, Model};
use crate::error::Result;
use crate::qna::QnaConfig;
use crate::tensor::Scalar;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CostRow {
    pub module: String,
    pub params: u64,
    /// Multiply-accumulates for one forward pass.
    pub flops: u64,
}

/// Totals plus the per-module rows they are summed from.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CostReport {
    pub params: u64,
    pub flops: u64,
    pub rows: Vec<CostRow>,
}

impl CostReport {
    fn from_rows(rows: Vec<CostRow>) -> Self {
        CostReport { params: rows.iter().map(|r| r.params).sum(), flops: rows.iter().map(|r| r.flops).sum(), rows }
    }
}

fn row_names(model: &Model<impl Scalar>) -> Result<Vec<String>> {
    let mut names = vec!["patch_embed".to_string()];
    let mut index = [0usize; 4];
    for spec in model.arch.layout()? {
        let (stage, kind) = match spec {
            BlockSpec::Vit { stage, .. } => (stage, "vit"),
            BlockSpec::Qna { stage, cfg } if cfg.stride > 1 => (stage, "qna-down"),
            BlockSpec::Qna { stage, .. } => (stage, "qna"),
        };
        names.push(format!("stage{}.{}.{kind}", stage + 1, index[stage]));
        index[stage] += 1;
    }
    names.push("norm".into());
    names.push("head".into());
    Ok(names)
}

/// Every scalar of every parameter tensor, grouped by module.
pub fn count_params<T: Scalar>(model: &Model<T>) -> Result<CostReport> {
    let mut counts = vec![0u64; model.blocks.len() + 3];
    for (name, t) in model.named_tensors() {
        let slot = match name.split('.').next() {
            Some("patch") => 0,
            Some("blocks") => 1 + name.split('.').nth(1).and_then(|i| i.parse::<usize>().ok()).unwrap_or(0),
            Some("norm") => model.blocks.len() + 1,
            _ => model.blocks.len() + 2,
        };
        counts[slot] += t.len() as u64;
    }
    let rows = row_names(model)?
        .into_iter()
        .zip(counts)
        .map(|(module, params)| CostRow { module, params, flops: 0 })
        .collect();
    Ok(CostReport::from_rows(rows))
}

/// MACs of one QnA layer on an `h x w` input.
///
/// Query folding `L D_in D_out`, the fused score map `HW L h D_in`, values
/// `HW D_in D_out`, the `L` windowed numerator and normalizer sums
/// `L k^2 H'W' (D_out + h)` and the output projection `H'W' D_out^2`.
pub fn qna_layer_macs(cfg: &QnaConfig, h: usize, w: usize) -> u64 {
    let ho = h.div_ceil(cfg.stride) as u64;
    let wo = w.div_ceil(cfg.stride) as u64;
    let (hw, din, d) = ((h * w) as u64, cfg.dim_in as u64, cfg.dim_out as u64);
    let (l, heads, kk) = (cfg.queries as u64, cfg.heads as u64, (cfg.k * cfg.k) as u64);
    l * din * d + hw * l * heads * din + hw * din * d + l * kk * ho * wo * (d + heads) + ho * wo * d * d
}

/// MACs and parameters per module at a square `resolution`. Normalization,
/// softmax, activations and residual additions are not counted.
pub fn count_flops<T: Scalar>(model: &Model<T>, resolution: usize) -> Result<CostReport> {
    let arch = &model.arch;
    check_resolution("count_flops", arch, resolution, resolution)?;
    let params = count_params(model)?;
    let p = arch.patch_size;
    let mut grid = (resolution / p, resolution / p);
    let tokens = |g: (usize, usize)| (g.0 * g.1) as u64;
    let mut flops = vec![tokens(grid) * (p * p * arch.in_channels * arch.base_dim) as u64];
    let e = arch.ffn_expansion as u64;
    for block in &model.blocks {
        let macs = match block {
            Block::Vit(b) => {
                let n = tokens(grid);
                let d = b.norm1.gamma.len() as u64;
                4 * n * d * d + 2 * n * n * d + 2 * n * d * d * e
            }
            Block::Qna(b) => {
                let cfg = &b.cfg;
                let attn = qna_layer_macs(cfg, grid.0, grid.1);
                grid = (grid.0.div_ceil(cfg.stride), grid.1.div_ceil(cfg.stride));
                let (n, din, d) = (tokens(grid), cfg.dim_in as u64, cfg.dim_out as u64);
                let skip = if b.skip.is_some() { n * din * d } else { 0 };
                attn + skip + 2 * n * d * d * e
            }
        };
        flops.push(macs);
    }
    flops.push(0);
    flops.push((arch.final_dim() * arch.num_classes) as u64);
    let rows = params.rows.into_iter().zip(flops).map(|(r, flops)| CostRow { flops, ..r }).collect();
    Ok(CostReport::from_rows(rows))
}

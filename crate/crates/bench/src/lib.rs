//! Fixtures shared by the criterion benches.

use qna_core::oracle::SasaParams;
use qna_core::qna::{QnaConfig, QnaParams};
use qna_core::{Result, RngSeed, Tensor};

/// Input, layer config and parameters for one window size.
pub struct Fixture {
    pub x: Tensor<f32>,
    pub cfg: QnaConfig,
    pub params: QnaParams<f32>,
    pub sasa: SasaParams<f32>,
    pub conv: Tensor<f32>,
}

impl Fixture {
    pub fn new((h, w, d): (usize, usize, usize), k: usize, seed: RngSeed) -> Result<Self> {
        let x = Tensor::randn([h, w, d], 1.0, &mut seed.rng())?;
        let cfg = QnaConfig::new(d, d).with_k(k).with_queries(2);
        let std = 1.0 / (d as f64).sqrt();
        Ok(Fixture {
            params: QnaParams::random(&cfg, std, seed.derive(1))?,
            sasa: SasaParams::random(d, std, seed.derive(2))?,
            conv: Tensor::randn([k, k, d, d], std / k as f64, &mut seed.derive(3).rng())?,
            x,
            cfg,
        })
    }
}

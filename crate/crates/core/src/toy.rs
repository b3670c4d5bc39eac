//! Toy training: detect a planted `3 x 3` motif with one QnA layer, global
//! average pooling and a linear classifier, trained by full-batch SGD on the
//! analytic gradients.

use rand::Rng;

use crate::error::{QnaError, Result};
use crate::qna::{qna_backward, qna_forward, QnaConfig, QnaParams};
use crate::tensor::{RngSeed, Tensor};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ToyConfig {
    pub steps: usize,
    pub lr: f64,
    pub seed: RngSeed,
    pub samples: usize,
    pub side: usize,
    pub channels: usize,
    pub hidden: usize,
    pub motif_amplitude: f64,
}

impl Default for ToyConfig {
    fn default() -> Self {
        ToyConfig {
            steps: 200,
            lr: 0.1,
            seed: RngSeed::default(),
            samples: 64,
            side: 12,
            channels: 4,
            hidden: 8,
            motif_amplitude: 3.0,
        }
    }
}

impl ToyConfig {
    pub fn layer(&self) -> QnaConfig {
        QnaConfig::new(self.channels, self.hidden).with_k(3).with_queries(2).with_heads(2).with_normalized_queries(true)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ToyReport {
    /// Loss before each step, then the loss after the last step.
    pub losses: Vec<f64>,
}

impl ToyReport {
    pub fn initial(&self) -> f64 {
        self.losses[0]
    }

    pub fn last(&self) -> f64 {
        *self.losses.last().expect("at least one loss")
    }

    /// The pass criterion: final loss below half the initial loss.
    pub fn halved(&self) -> bool {
        self.last() < 0.5 * self.initial()
    }
}

/// Gaussian noise images; label 1 images carry the motif at a random site.
pub fn toy_dataset(cfg: &ToyConfig) -> Result<(Vec<Tensor<f64>>, Vec<usize>)> {
    let mut rng = cfg.seed.derive(10).rng();
    let (s, c) = (cfg.side, cfg.channels);
    if s < 3 {
        return Err(QnaError::invalid("toy_dataset", "images must be at least 3 x 3"));
    }
    let motif: Vec<f64> = (0..9 * c)
        .map(|i| if (i / c + i % c) % 2 == 0 { cfg.motif_amplitude } else { -0.5 * cfg.motif_amplitude })
        .collect();
    let mut images = Vec::with_capacity(cfg.samples);
    let mut labels = Vec::with_capacity(cfg.samples);
    for n in 0..cfg.samples {
        let label = n % 2;
        let mut x = Tensor::<f64>::randn([s, s, c], 1.0, &mut rng)?.into_data();
        if label == 1 {
            let (r0, c0) = (rng.random_range(0..=s - 3), rng.random_range(0..=s - 3));
            for dr in 0..3 {
                for dc in 0..3 {
                    for ch in 0..c {
                        x[((r0 + dr) * s + c0 + dc) * c + ch] += motif[(dr * 3 + dc) * c + ch];
                    }
                }
            }
        }
        images.push(Tensor::new([s, s, c], x)?);
        labels.push(label);
    }
    Ok((images, labels))
}

struct Head {
    w: Vec<f64>,
    b: [f64; 2],
}

/// Mean cross-entropy over the batch; optionally accumulates gradients.
fn batch_loss(
    cfg: &ToyConfig,
    layer: &QnaConfig,
    params: &QnaParams<f64>,
    head: &Head,
    data: &(Vec<Tensor<f64>>, Vec<usize>),
    grads: Option<(&mut [Tensor<f64>], &mut Head)>,
) -> Result<f64> {
    let d = cfg.hidden;
    let n = data.0.len() as f64;
    let mut loss = 0.0;
    let mut acc = grads;
    for (x, &label) in data.0.iter().zip(&data.1) {
        let out = qna_forward(x, layer, params)?;
        let sites = out.len() / d;
        let mut pooled = vec![0.0; d];
        for row in out.data().chunks(d) {
            for (p, &v) in pooled.iter_mut().zip(row) {
                *p += v / sites as f64;
            }
        }
        let logits: Vec<f64> =
            (0..2).map(|c| head.b[c] + (0..d).map(|i| pooled[i] * head.w[i * 2 + c]).sum::<f64>()).collect();
        let m = logits[0].max(logits[1]);
        let lse = m + ((logits[0] - m).exp() + (logits[1] - m).exp()).ln();
        loss += (lse - logits[label]) / n;

        if let Some((pg, hg)) = acc.as_mut() {
            let dlogits: Vec<f64> = (0..2).map(|c| ((logits[c] - lse).exp() - f64::from(c == label)) / n).collect();
            let mut dpooled = vec![0.0; d];
            for i in 0..d {
                for c in 0..2 {
                    hg.w[i * 2 + c] += pooled[i] * dlogits[c];
                    dpooled[i] += head.w[i * 2 + c] * dlogits[c];
                }
            }
            for c in 0..2 {
                hg.b[c] += dlogits[c];
            }
            let d_out = Tensor::from_fn(out.shape().to_vec(), |f| dpooled[f % d] / sites as f64)?;
            let g = qna_backward(x, layer, params, &d_out)?;
            for (acc_t, gt) in pg.iter_mut().zip(g.param_grads()) {
                *acc_t = acc_t.add(gt)?;
            }
        }
    }
    Ok(loss)
}

/// Full-batch SGD for `cfg.steps` steps. Deterministic for a given seed.
pub fn train_toy(cfg: &ToyConfig) -> Result<ToyReport> {
    train_toy_with(cfg, |_, _| {})
}

/// As [`train_toy`], calling `on_step(step, loss)` before every update.
pub fn train_toy_with(cfg: &ToyConfig, mut on_step: impl FnMut(usize, f64)) -> Result<ToyReport> {
    if !cfg.lr.is_finite() || cfg.lr < 0.0 {
        return Err(QnaError::invalid("train_toy", "learning rate must be finite and non-negative"));
    }
    let layer = cfg.layer();
    let data = toy_dataset(cfg)?;
    let mut params: QnaParams<f64> = QnaParams::init(&layer, cfg.seed.derive(11))?;
    // std 0.02 leaves the toy layer near zero; start from unit-variance projections
    let mut rng = cfg.seed.derive(12).rng();
    for t in [&mut params.w_k, &mut params.w_v, &mut params.w_o, &mut params.queries] {
        let fan_in = t.shape()[0] as f64;
        *t = Tensor::randn(t.shape().to_vec(), 1.0 / fan_in.sqrt(), &mut rng)?;
    }
    let mut head = Head {
        w: Tensor::<f64>::randn([cfg.hidden, 2], 1.0 / (cfg.hidden as f64).sqrt(), &mut rng)?.into_data(),
        b: [0.0; 2],
    };

    let mut losses = Vec::with_capacity(cfg.steps + 1);
    for step in 0..cfg.steps {
        let mut pg: Vec<Tensor<f64>> =
            params.tensors().iter().map(|t| Tensor::zeros(t.shape().to_vec())).collect::<Result<_>>()?;
        let mut hg = Head { w: vec![0.0; cfg.hidden * 2], b: [0.0; 2] };
        let loss = batch_loss(cfg, &layer, &params, &head, &data, Some((&mut pg, &mut hg)))?;
        on_step(step, loss);
        losses.push(loss);
        for (t, g) in params.tensors_mut().into_iter().zip(&pg) {
            *t = t.zip_map(g, |p, gv| p - cfg.lr * gv)?;
        }
        for (w, g) in head.w.iter_mut().zip(&hg.w) {
            *w -= cfg.lr * g;
        }
        for c in 0..2 {
            head.b[c] -= cfg.lr * hg.b[c];
        }
    }
    let last = batch_loss(cfg, &layer, &params, &head, &data, None)?;
    on_step(cfg.steps, last);
    losses.push(last);
    Ok(ToyReport { losses })
}

//! Decoder fitting, thresholding, and the prediction sidecar.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{MaskGuidedDecoder, MgdError, Result};
use crate::grid::ChangeMask;
use crate::loss::{cd_loss_graph, LossConfig};
use crate::scene::ScenePair;
use crate::tensor::{adam_step, AdamConfig, Graph, Tensor};

pub const DEFAULT_THRESHOLD: f64 = 0.5;

/// One training scene: planar `[3, H, W]` frames in `[0, 1]`, the pixel
/// truth, and the coarse mask fed to the guidance.
#[derive(Debug, Clone, PartialEq)]
pub struct DecoderSample {
    pub t1: Vec<f64>,
    pub t2: Vec<f64>,
    pub gt: ChangeMask,
    pub coarse: ChangeMask,
}

impl DecoderSample {
    pub fn new(pair: &ScenePair, coarse: ChangeMask) -> Self {
        Self {
            t1: pair.t1.to_planar(),
            t2: pair.t2.to_planar(),
            gt: pair.gt.clone(),
            coarse,
        }
    }

    /// Applies one of the eight square symmetries to every raster. Index 0 is
    /// the identity; bit 0 flips columns, bit 1 flips rows, bit 2 transposes.
    /// Transposes are skipped on non-square scenes.
    pub(crate) fn transformed(&self, sym: u8) -> DecoderSample {
        if sym == 0 {
            return self.clone();
        }
        let (h, w) = (self.gt.h(), self.gt.w());
        let transpose = sym & 4 != 0 && h == w;
        let src = |y: usize, x: usize| -> usize {
            let (y, x) = if transpose { (x, y) } else { (y, x) };
            let y = if sym & 2 != 0 { h - 1 - y } else { y };
            let x = if sym & 1 != 0 { w - 1 - x } else { x };
            y * w + x
        };
        let planar = |p: &[f64]| -> Vec<f64> {
            let mut out = vec![0.0; p.len()];
            for c in 0..3 {
                for y in 0..h {
                    for x in 0..w {
                        out[c * h * w + y * w + x] = p[c * h * w + src(y, x)];
                    }
                }
            }
            out
        };
        let mask = |m: &ChangeMask| -> ChangeMask {
            let mut out = ChangeMask::zeros(h, w);
            for y in 0..h {
                for x in 0..w {
                    out.set(y, x, m.values()[src(y, x)] != 0);
                }
            }
            out
        };
        DecoderSample {
            t1: planar(&self.t1),
            t2: planar(&self.t2),
            gt: mask(&self.gt),
            coarse: mask(&self.coarse),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DecoderTrainConfig {
    pub epochs: usize,
    pub lr: f64,
    /// Scenes per optimizer step.
    pub batch_size: usize,
    /// Random flips and transposes of each scene.
    pub augment: bool,
    pub seed: u64,
}

impl Default for DecoderTrainConfig {
    fn default() -> Self {
        Self {
            epochs: 8,
            lr: 2e-3,
            batch_size: 4,
            augment: true,
            seed: 0,
        }
    }
}

impl DecoderTrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(MgdError::Config {
                field: "decoder.lr",
                msg: format!("must be >= 0, got {}", self.lr),
            });
        }
        if self.batch_size == 0 {
            return Err(MgdError::Config {
                field: "decoder.batch_size",
                msg: "must be at least 1".into(),
            });
        }
        Ok(())
    }
}

fn stack(model: &MaskGuidedDecoder, batch: &[DecoderSample]) -> Result<(Tensor, Tensor, Vec<ChangeMask>, Vec<f64>)> {
    let (h, w) = (model.cfg.h, model.cfg.w);
    for s in batch {
        if s.gt.h() != h || s.gt.w() != w || s.t1.len() != 3 * h * w || s.t2.len() != 3 * h * w {
            return Err(MgdError::Size {
                got_h: s.gt.h(),
                got_w: s.gt.w(),
                want_h: h,
                want_w: w,
            });
        }
    }
    let shape = vec![batch.len(), 3, h, w];
    let t1 = Tensor::new(shape.clone(), batch.iter().flat_map(|s| s.t1.iter().copied()).collect())?;
    let t2 = Tensor::new(shape, batch.iter().flat_map(|s| s.t2.iter().copied()).collect())?;
    let coarse = batch.iter().map(|s| s.coarse.clone()).collect();
    let target = batch.iter().flat_map(|s| s.gt.to_f64()).collect();
    Ok((t1, t2, coarse, target))
}

/// Loss of one batch under the current parameters, with gradients added to
/// the model's buffers.
pub(crate) fn loss_and_grad(model: &mut MaskGuidedDecoder, batch: &[DecoderSample], loss: &LossConfig) -> Result<f64> {
    let (t1, t2, coarse, target) = stack(model, batch)?;
    let mut g = Graph::new();
    let z = model.forward_graph(&mut g, &t1, &t2, Some(&coarse))?;
    let p = g.sigmoid(z);
    let l = cd_loss_graph(&mut g, p, &target, loss)?;
    g.backward(l)?.accumulate(&mut model.store);
    if !model.cfg.guidance {
        for &id in &model.alphas {
            model.store.clear_grad(id);
        }
    }
    Ok(g.value(l).item())
}

/// Minimizes the change-detection loss with Adam over shuffled batches and
/// returns the loss of every step. `on_epoch` sees the epoch index and its
/// mean loss.
pub fn train_decoder(
    model: &mut MaskGuidedDecoder,
    data: &[DecoderSample],
    cfg: &DecoderTrainConfig,
    loss: &LossConfig,
    mut on_epoch: impl FnMut(usize, f64),
) -> Result<Vec<f64>> {
    cfg.validate()?;
    loss.validate()?;
    if data.is_empty() {
        return Err(MgdError::EmptyDataset);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let adam = AdamConfig::with_lr(cfg.lr);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut curve = Vec::new();
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let start = curve.len();
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<DecoderSample> = chunk
                .iter()
                .map(|&i| {
                    let sym = if cfg.augment { rng.gen_range(0..8) } else { 0 };
                    data[i].transformed(sym)
                })
                .collect();
            curve.push(loss_and_grad(model, &batch, loss)?);
            adam_step(&mut model.store, &adam);
        }
        let steps = &curve[start..];
        on_epoch(epoch, steps.iter().sum::<f64>() / steps.len() as f64);
    }
    Ok(curve)
}

/// Binary mask of `probs` (row-major `h x w`) with a strict `>` comparison.
pub fn threshold(probs: &[f64], h: usize, w: usize, at: f64) -> ChangeMask {
    let bytes: Vec<u8> = probs.iter().map(|&p| u8::from(p > at)).collect();
    ChangeMask::from_bytes(h, w, &bytes).expect("probability map matches its size")
}

/// Pixel change map of one scene at the default threshold.
pub fn predict(model: &MaskGuidedDecoder, pair: &ScenePair, coarse: &ChangeMask) -> Result<ChangeMask> {
    let probs = model.probability_map(&pair.t1.to_planar(), &pair.t2.to_planar(), coarse)?;
    Ok(threshold(&probs, model.cfg.h, model.cfg.w, DEFAULT_THRESHOLD))
}

/// Written next to predicted masks.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sidecar {
    pub threshold: f64,
    pub alphas: Vec<f64>,
}

impl Sidecar {
    pub fn of(model: &MaskGuidedDecoder) -> Self {
        Self {
            threshold: DEFAULT_THRESHOLD,
            alphas: model.alphas(),
        }
    }
}

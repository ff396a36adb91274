//! Composite change-detection loss: foreground-weighted binary cross-entropy
//! plus soft Dice.
//!
//! Each loss has a direct evaluator over slices and a recording variant that
//! builds the same expression on a [`Graph`] for training.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tensor::{Graph, Tensor, TensorError, Var};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum LossError {
    #[error("prediction has {pred} values, target has {target}")]
    Shape { pred: usize, target: usize },
    #[error("loss config: {0}")]
    Config(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossConfig {
    /// Weight on the foreground log-likelihood term.
    pub fg_weight: f64,
    pub dice_eps: f64,
    /// Probabilities are clamped to `[prob_clamp, 1 - prob_clamp]` before logs.
    pub prob_clamp: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            fg_weight: 9.0,
            dice_eps: 1e-6,
            prob_clamp: 1e-7,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<(), LossError> {
        if !(self.fg_weight > 0.0) {
            return Err(LossError::Config(format!("fg_weight must be > 0, got {}", self.fg_weight)));
        }
        if !(self.dice_eps > 0.0) {
            return Err(LossError::Config(format!("dice_eps must be > 0, got {}", self.dice_eps)));
        }
        if !(self.prob_clamp > 0.0 && self.prob_clamp < 0.5) {
            return Err(LossError::Config(format!(
                "prob_clamp must lie in (0, 0.5), got {}",
                self.prob_clamp
            )));
        }
        Ok(())
    }
}

fn check_len(p: &[f64], t: &[f64]) -> Result<(), LossError> {
    if p.len() != t.len() || p.is_empty() {
        return Err(LossError::Shape {
            pred: p.len(),
            target: t.len(),
        });
    }
    Ok(())
}

/// `-(1/N) Σ [w·T·log P + (1-T)·log(1-P)]` over all `N` pixels of the batch.
pub fn weighted_bce(p: &[f64], t: &[f64], cfg: &LossConfig) -> Result<f64, LossError> {
    check_len(p, t)?;
    let (lo, hi) = (cfg.prob_clamp, 1.0 - cfg.prob_clamp);
    let total: f64 = p
        .iter()
        .zip(t)
        .map(|(&p, &t)| {
            let p = p.clamp(lo, hi);
            cfg.fg_weight * t * p.ln() + (1.0 - t) * (1.0 - p).ln()
        })
        .sum();
    Ok(-total / p.len() as f64)
}

/// `1 - (2 Σ PT + ε) / (Σ P + Σ T + ε)`.
pub fn dice_loss(p: &[f64], t: &[f64], cfg: &LossConfig) -> Result<f64, LossError> {
    check_len(p, t)?;
    let inter: f64 = p.iter().zip(t).map(|(a, b)| a * b).sum();
    let sp: f64 = p.iter().sum();
    let st: f64 = t.iter().sum();
    Ok(1.0 - (2.0 * inter + cfg.dice_eps) / (sp + st + cfg.dice_eps))
}

pub fn cd_loss(p: &[f64], t: &[f64], cfg: &LossConfig) -> Result<f64, LossError> {
    Ok(weighted_bce(p, t, cfg)? + dice_loss(p, t, cfg)?)
}

fn target_leaf(g: &mut Graph, p: Var, t: &[f64]) -> Result<Var, LossError> {
    let n = g.value(p).numel();
    if n != t.len() || n == 0 {
        return Err(LossError::Shape { pred: n, target: t.len() });
    }
    Ok(g.input(Tensor::new(g.shape(p).to_vec(), t.to_vec())?))
}

/// Records [`weighted_bce`] on the graph.
pub fn weighted_bce_graph(g: &mut Graph, p: Var, t: &[f64], cfg: &LossConfig) -> Result<Var, LossError> {
    let shape = g.shape(p).to_vec();
    let n = t.len();
    target_leaf(g, p, t)?;
    let pc = g.clamp(p, cfg.prob_clamp, 1.0 - cfg.prob_clamp);
    let log_p = g.log(pc);
    let neg = g.neg(pc);
    let one_minus = g.add_const(neg, 1.0);
    let log_q = g.log(one_minus);
    let fg = g.input(Tensor::new(shape.clone(), t.iter().map(|v| cfg.fg_weight * v).collect())?);
    let bg = g.input(Tensor::new(shape, t.iter().map(|v| 1.0 - v).collect())?);
    let a = g.mul(fg, log_p)?;
    let b = g.mul(bg, log_q)?;
    let ab = g.add(a, b)?;
    let total = g.sum(ab);
    Ok(g.scale(total, -1.0 / n as f64))
}

/// Records [`dice_loss`] on the graph.
pub fn dice_loss_graph(g: &mut Graph, p: Var, t: &[f64], cfg: &LossConfig) -> Result<Var, LossError> {
    let tv = target_leaf(g, p, t)?;
    let pt = g.mul(p, tv)?;
    let inter = g.sum(pt);
    let num = g.scale(inter, 2.0);
    let num = g.add_const(num, cfg.dice_eps);
    let sp = g.sum(p);
    let st: f64 = t.iter().sum();
    let den = g.add_const(sp, st + cfg.dice_eps);
    let ratio = g.div(num, den)?;
    let neg = g.neg(ratio);
    Ok(g.add_const(neg, 1.0))
}

pub fn cd_loss_graph(g: &mut Graph, p: Var, t: &[f64], cfg: &LossConfig) -> Result<Var, LossError> {
    let bce = weighted_bce_graph(g, p, t, cfg)?;
    let dice = dice_loss_graph(g, p, t, cfg)?;
    Ok(g.add(bce, dice)?)
}

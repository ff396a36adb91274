//! Verifiable rewards for structured block predictions.
//!
//! A completion earns `1` for a well-formed `<think>/<answer>` envelope whose
//! answer parses as a run string, plus a precision/recall blend weighted
//! toward recall, plus a tiered bonus for high recall. Malformed completions
//! score exactly zero.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::grid::{extract_structured, parse_runs, BlockLabelSet, GridError, GridSpec};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum RewardConfigError {
    #[error("beta must lie in [0, 1], got {0}")]
    Beta(f64),
    #[error("bonus tier thresholds must be strictly increasing")]
    Thresholds,
    #[error("bonus values must be non-decreasing")]
    Bonuses,
    #[error("bonus tier values must lie in [0, 1]")]
    TierRange,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BonusTier {
    pub threshold: f64,
    pub bonus: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RewardConfig {
    pub beta: f64,
    pub bonus_tiers: Vec<BonusTier>,
}

impl Default for RewardConfig {
    fn default() -> Self {
        Self {
            beta: 0.7,
            bonus_tiers: [(0.7, 0.7), (0.9, 0.9), (1.0, 1.0)]
                .into_iter()
                .map(|(threshold, bonus)| BonusTier { threshold, bonus })
                .collect(),
        }
    }
}

impl RewardConfig {
    pub fn validate(&self) -> Result<(), RewardConfigError> {
        if !(0.0..=1.0).contains(&self.beta) {
            return Err(RewardConfigError::Beta(self.beta));
        }
        for t in &self.bonus_tiers {
            if !(0.0..=1.0).contains(&t.threshold) || !(0.0..=1.0).contains(&t.bonus) {
                return Err(RewardConfigError::TierRange);
            }
        }
        for pair in self.bonus_tiers.windows(2) {
            if pair[1].threshold <= pair[0].threshold {
                return Err(RewardConfigError::Thresholds);
            }
            if pair[1].bonus < pair[0].bonus {
                return Err(RewardConfigError::Bonuses);
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RewardBreakdown {
    pub r_format: f64,
    pub precision: f64,
    pub recall: f64,
    pub r_acc: f64,
    pub r_bonus: f64,
    pub total: f64,
}

impl RewardBreakdown {
    fn zero() -> Self {
        Self {
            r_format: 0.0,
            precision: 0.0,
            recall: 0.0,
            r_acc: 0.0,
            r_bonus: 0.0,
            total: 0.0,
        }
    }
}

/// Parses the completion into a block set, if it is well formed.
pub fn parse_completion(raw: &str, grid: GridSpec) -> Option<BlockLabelSet> {
    let out = extract_structured(raw).ok()?;
    parse_runs(&out.answer, grid).ok()
}

pub fn format_reward(raw: &str, grid: GridSpec) -> f64 {
    if parse_completion(raw, grid).is_some() {
        1.0
    } else {
        0.0
    }
}

/// Block-level precision and recall. An empty prediction has precision 1
/// only when the ground truth is also empty; an empty ground truth has
/// recall 1.
pub fn block_precision_recall(pred: &BlockLabelSet, gt: &BlockLabelSet) -> Result<(f64, f64), GridError> {
    let hit = pred.intersection_len(gt)? as f64;
    let precision = match (pred.len(), gt.len()) {
        (0, 0) => 1.0,
        (0, _) => 0.0,
        (n, _) => hit / n as f64,
    };
    let recall = if gt.is_empty() { 1.0 } else { hit / gt.len() as f64 };
    Ok((precision, recall))
}

pub fn accuracy_reward(precision: f64, recall: f64, cfg: &RewardConfig) -> f64 {
    (1.0 - cfg.beta) * precision + cfg.beta * recall
}

/// Bonus of the highest satisfied tier. A tier at threshold 1.0 requires
/// perfect recall; every other tier requires recall strictly above it.
pub fn recall_bonus(recall: f64, cfg: &RewardConfig) -> f64 {
    cfg.bonus_tiers
        .iter()
        .rev()
        .find(|t| {
            if t.threshold >= 1.0 {
                recall >= 1.0
            } else {
                recall > t.threshold
            }
        })
        .map_or(0.0, |t| t.bonus)
}

/// Scores one raw completion against ground-truth blocks.
pub fn total_reward(raw: &str, gt: &BlockLabelSet, cfg: &RewardConfig) -> RewardBreakdown {
    match parse_completion(raw, gt.grid()) {
        Some(pred) => score_blocks(&pred, gt, cfg),
        None => RewardBreakdown::zero(),
    }
}

/// Scores an already parsed, format-valid prediction.
pub fn score_blocks(pred: &BlockLabelSet, gt: &BlockLabelSet, cfg: &RewardConfig) -> RewardBreakdown {
    let Ok((precision, recall)) = block_precision_recall(pred, gt) else {
        return RewardBreakdown::zero();
    };
    let r_acc = accuracy_reward(precision, recall, cfg);
    let r_bonus = recall_bonus(recall, cfg);
    RewardBreakdown {
        r_format: 1.0,
        precision,
        recall,
        r_acc,
        r_bonus,
        total: 1.0 + r_acc + r_bonus,
    }
}

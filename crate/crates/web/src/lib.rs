//! WebAssembly bindings for the browser demo.
//!
//! The page can generate a synthetic scene pair, draw the coarse mask of a
//! run string over it, and score a completion against the scene's truth.
//! Every export is a thin wrapper over a plain Rust function so the logic
//! also runs (and is tested) natively.

use blockcd_core::grid::{block_labels_from_mask, coarse_mask_from_blocks, parse_runs, serialize_runs, ChangeMask, GridSpec};
use blockcd_core::pnm::RgbImage;
use blockcd_core::reward::{total_reward, RewardBreakdown, RewardConfig};
use blockcd_core::scene::{generate, GenConfig};
use thiserror::Error;
use wasm_bindgen::prelude::*;

#[derive(Debug, Error)]
pub enum DemoError {
    #[error("scene: {0}")]
    Scene(#[from] blockcd_core::scene::SceneError),
    #[error("grid: {0}")]
    Grid(#[from] blockcd_core::grid::GridError),
    #[error("run string {runs:?}: {msg}")]
    Runs { runs: String, msg: String },
}

impl From<DemoError> for JsValue {
    fn from(e: DemoError) -> Self {
        JsValue::from_str(&e.to_string())
    }
}

/// Translucent red for changed pixels.
const OVERLAY: [u8; 4] = [230, 40, 40, 140];

fn rgba_of_rgb(img: &RgbImage) -> Vec<u8> {
    img.data.chunks_exact(3).flat_map(|p| [p[0], p[1], p[2], 255]).collect()
}

fn rgba_of_mask(mask: &ChangeMask) -> Vec<u8> {
    mask.values()
        .iter()
        .flat_map(|&v| if v > 0 { OVERLAY } else { [0; 4] })
        .collect()
}

/// A generated scene pair plus the grid used to talk about it.
#[wasm_bindgen]
pub struct DemoScene {
    t1: RgbImage,
    t2: RgbImage,
    gt: ChangeMask,
    grid: GridSpec,
    truth: String,
}

impl DemoScene {
    pub fn try_new(seed: u64, change_rate: f64, grid_n: usize) -> Result<Self, DemoError> {
        let cfg = GenConfig {
            seed,
            change_rate,
            ..GenConfig::default()
        };
        let pair = generate(&cfg)?;
        let grid = GridSpec::new(grid_n, grid_n, cfg.h, cfg.w)?;
        let truth = serialize_runs(&block_labels_from_mask(&pair.gt, grid, 0.0)?);
        Ok(Self {
            t1: pair.t1,
            t2: pair.t2,
            gt: pair.gt,
            grid,
            truth,
        })
    }

    pub fn try_overlay(&self, runs: &str) -> Result<Vec<u8>, DemoError> {
        let labels = parse_runs(runs, self.grid).map_err(|e| DemoError::Runs {
            runs: runs.to_string(),
            msg: e.to_string(),
        })?;
        Ok(rgba_of_mask(&coarse_mask_from_blocks(&labels)))
    }

    pub fn breakdown(&self, completion: &str) -> Result<RewardBreakdown, DemoError> {
        let gt = parse_runs(&self.truth, self.grid).map_err(|e| DemoError::Runs {
            runs: self.truth.clone(),
            msg: e.to_string(),
        })?;
        Ok(total_reward(completion, &gt, &RewardConfig::default()))
    }
}

#[wasm_bindgen]
impl DemoScene {
    /// Generates a 64x64 scene with a `grid_n` x `grid_n` block grid.
    #[wasm_bindgen(constructor)]
    pub fn new(seed: u64, change_rate: f64, grid_n: usize) -> Result<DemoScene, JsValue> {
        Ok(Self::try_new(seed, change_rate, grid_n)?)
    }

    pub fn width(&self) -> usize {
        self.gt.w()
    }

    pub fn height(&self) -> usize {
        self.gt.h()
    }

    pub fn t1_rgba(&self) -> Vec<u8> {
        rgba_of_rgb(&self.t1)
    }

    pub fn t2_rgba(&self) -> Vec<u8> {
        rgba_of_rgb(&self.t2)
    }

    pub fn truth_rgba(&self) -> Vec<u8> {
        rgba_of_mask(&self.gt)
    }

    /// Run string of the blocks touched by the true change.
    pub fn truth_runs(&self) -> String {
        self.truth.clone()
    }

    /// Coarse mask of a run string as an RGBA overlay.
    pub fn overlay(&self, runs: &str) -> Result<Vec<u8>, JsValue> {
        Ok(self.try_overlay(runs)?)
    }

    /// Reward breakdown of a completion as JSON.
    pub fn score(&self, completion: &str) -> Result<String, JsValue> {
        let b = self.breakdown(completion)?;
        Ok(serde_json::to_string(&b).expect("breakdown serializes"))
    }
}

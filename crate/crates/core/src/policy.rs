//! Block reasoner: per-block change probabilities from bi-temporal block
//! statistics, structured text outputs, and supervised fitting.
//!
//! Every block is scored by the same two-layer perceptron. Its input is the
//! block's statistics relative to the scene-wide mean, followed by that mean,
//! which lets the network discount frame-level shifts such as a global
//! brightness change.

use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use serde_json::json;
use thiserror::Error;

use crate::grid::{render_structured, serialize_runs, BlockLabelSet, GridError, GridSpec, StructuredOutput};
use crate::scene::ScenePair;
use crate::tensor::{
    adam_step, decode_checkpoint, encode_checkpoint, AdamConfig, CheckpointError, Graph, ParamId, ParamStore,
    Tensor, TensorError, Var,
};

/// Statistics per block: channel means and standard deviations of each
/// frame, then the per-channel mean absolute difference between frames.
pub const BLOCK_FEATURES: usize = 15;
/// Width of the perceptron input: block statistics plus their scene mean.
pub const INPUT_WIDTH: usize = 2 * BLOCK_FEATURES;

#[derive(Debug, Error)]
pub enum PolicyError {
    #[error("features describe {got} blocks, policy expects {want}")]
    Shape { got: usize, want: usize },
    #[error("image is {got_h}x{got_w}, grid expects {want_h}x{want_w}")]
    Dimensions {
        got_h: usize,
        got_w: usize,
        want_h: usize,
        want_w: usize,
    },
    #[error("training set is empty")]
    EmptyDataset,
    #[error("policy config: {0}")]
    Config(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Grid(#[from] GridError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
}

#[derive(Debug, Clone, PartialEq)]
pub struct BlockFeatures {
    grid: GridSpec,
    /// Row-major `[block_count, BLOCK_FEATURES]`.
    values: Vec<f64>,
}

impl BlockFeatures {
    pub fn grid(&self) -> GridSpec {
        self.grid
    }

    pub fn block_count(&self) -> usize {
        self.grid.block_count()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn block(&self, b: usize) -> &[f64] {
        &self.values[b * BLOCK_FEATURES..(b + 1) * BLOCK_FEATURES]
    }

    /// `[block_count, INPUT_WIDTH]` perceptron input: each block's
    /// statistics relative to the scene mean, then the scene mean itself.
    fn with_context(&self) -> Tensor {
        let n = self.block_count();
        let mut mean = [0.0; BLOCK_FEATURES];
        for b in 0..n {
            for (m, v) in mean.iter_mut().zip(self.block(b)) {
                *m += v / n as f64;
            }
        }
        let mut data = Vec::with_capacity(n * INPUT_WIDTH);
        for b in 0..n {
            data.extend(self.block(b).iter().zip(&mean).map(|(v, m)| v - m));
            data.extend_from_slice(&mean);
        }
        Tensor::new(vec![n, INPUT_WIDTH], data).expect("sizes agree")
    }
}

/// Block statistics from channel-planar `[3, h, w]` frames with values in
/// `[0, 1]`.
pub fn featurize_planar(t1: &[f64], t2: &[f64], h: usize, w: usize, grid: GridSpec) -> Result<BlockFeatures, PolicyError> {
    if h != grid.image_h() || w != grid.image_w() || t1.len() != 3 * h * w || t2.len() != 3 * h * w {
        return Err(PolicyError::Dimensions {
            got_h: h,
            got_w: w,
            want_h: grid.image_h(),
            want_w: grid.image_w(),
        });
    }
    let n = grid.block_count();
    let area = (grid.block_h() * grid.block_w()) as f64;
    let mut values = vec![0.0; n * BLOCK_FEATURES];
    for b in 0..n {
        let (y0, x0, y1, x1) = grid.block_rect(b);
        let row = &mut values[b * BLOCK_FEATURES..(b + 1) * BLOCK_FEATURES];
        for c in 0..3 {
            let plane = c * h * w;
            let (mut s1, mut q1, mut s2, mut q2, mut d) = (0.0, 0.0, 0.0, 0.0, 0.0);
            for y in y0..y1 {
                for x in x0..x1 {
                    let a = t1[plane + y * w + x];
                    let bv = t2[plane + y * w + x];
                    s1 += a;
                    q1 += a * a;
                    s2 += bv;
                    q2 += bv * bv;
                    d += (bv - a).abs();
                }
            }
            let (m1, m2) = (s1 / area, s2 / area);
            row[c] = m1;
            row[3 + c] = (q1 / area - m1 * m1).max(0.0).sqrt();
            row[6 + c] = m2;
            row[9 + c] = (q2 / area - m2 * m2).max(0.0).sqrt();
            row[12 + c] = d / area;
        }
    }
    Ok(BlockFeatures { grid, values })
}

pub fn featurize(pair: &ScenePair, grid: GridSpec) -> Result<BlockFeatures, PolicyError> {
    if (pair.t1.h, pair.t1.w) != (pair.t2.h, pair.t2.w) {
        return Err(PolicyError::Dimensions {
            got_h: pair.t2.h,
            got_w: pair.t2.w,
            want_h: pair.t1.h,
            want_w: pair.t1.w,
        });
    }
    featurize_planar(&pair.t1.to_planar(), &pair.t2.to_planar(), pair.t1.h, pair.t1.w, grid)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PolicyConfig {
    pub hidden: usize,
    pub temperature: f64,
    pub init_seed: u64,
}

impl Default for PolicyConfig {
    fn default() -> Self {
        Self {
            hidden: 32,
            temperature: 1.0,
            init_seed: 0,
        }
    }
}

impl PolicyConfig {
    pub fn validate(&self) -> Result<(), PolicyError> {
        if self.hidden == 0 {
            return Err(PolicyError::Config("hidden must be at least 1".into()));
        }
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(PolicyError::Config(format!("temperature must be > 0, got {}", self.temperature)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReasonerPolicy {
    grid: GridSpec,
    cfg: PolicyConfig,
    store: ParamStore,
    w1: ParamId,
    b1: ParamId,
    w2: ParamId,
    b2: ParamId,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PolicySample {
    pub output: StructuredOutput,
    pub blocks: BlockLabelSet,
    pub logprob: f64,
}

const CHECKPOINT_KIND: &str = "reasoner";

impl ReasonerPolicy {
    /// Glorot-uniform weights from `cfg.init_seed`, zero biases.
    pub fn new(grid: GridSpec, cfg: PolicyConfig) -> Result<Self, PolicyError> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.init_seed);
        let mut glorot = |fan_in: usize, fan_out: usize| {
            let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
            let data = (0..fan_in * fan_out).map(|_| rng.gen_range(-a..a)).collect();
            Tensor::new(vec![fan_in, fan_out], data).expect("sizes agree")
        };
        let w1 = glorot(INPUT_WIDTH, cfg.hidden);
        let w2 = glorot(cfg.hidden, 1);
        Ok(Self::from_tensors(grid, cfg, w1, w2))
    }

    /// Every weight and bias zero: all probabilities are exactly one half.
    pub fn zeros(grid: GridSpec, cfg: PolicyConfig) -> Result<Self, PolicyError> {
        cfg.validate()?;
        Ok(Self::from_tensors(
            grid,
            cfg,
            Tensor::zeros(&[INPUT_WIDTH, cfg.hidden]),
            Tensor::zeros(&[cfg.hidden, 1]),
        ))
    }

    fn from_tensors(grid: GridSpec, cfg: PolicyConfig, w1: Tensor, w2: Tensor) -> Self {
        let mut store = ParamStore::new();
        let w1 = store.add("reasoner.w1", w1);
        let b1 = store.add("reasoner.b1", Tensor::zeros(&[cfg.hidden]));
        let w2 = store.add("reasoner.w2", w2);
        let b2 = store.add("reasoner.b2", Tensor::zeros(&[1]));
        Self {
            grid,
            cfg,
            store,
            w1,
            b1,
            w2,
            b2,
        }
    }

    pub fn grid(&self) -> GridSpec {
        self.grid
    }

    pub fn config(&self) -> PolicyConfig {
        self.cfg
    }

    pub fn temperature(&self) -> f64 {
        self.cfg.temperature
    }

    pub fn set_temperature(&mut self, t: f64) -> Result<(), PolicyError> {
        PolicyConfig { temperature: t, ..self.cfg }.validate()?;
        self.cfg.temperature = t;
        Ok(())
    }

    pub fn params(&self) -> &ParamStore {
        &self.store
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    /// Sets the output bias, shifting every logit by the same amount.
    pub fn set_output_bias(&mut self, b: f64) {
        self.store.value_mut(self.b2).data_mut()[0] = b;
    }

    fn check(&self, f: &BlockFeatures) -> Result<(), PolicyError> {
        if f.block_count() != self.grid.block_count() {
            return Err(PolicyError::Shape {
                got: f.block_count(),
                want: self.grid.block_count(),
            });
        }
        Ok(())
    }

    /// Records the temperature-scaled logits, shape `[block_count, 1]`.
    pub fn logits_graph(&self, g: &mut Graph, f: &BlockFeatures) -> Result<Var, PolicyError> {
        self.check(f)?;
        let x = g.input(f.with_context());
        let w1 = g.param(&self.store, self.w1);
        let b1 = g.param(&self.store, self.b1);
        let w2 = g.param(&self.store, self.w2);
        let b2 = g.param(&self.store, self.b2);
        let h = g.matmul(x, w1)?;
        let h = g.add_bias(h, b1, 1)?;
        let h = g.relu(h);
        let z = g.matmul(h, w2)?;
        let z = g.add_bias(z, b2, 1)?;
        Ok(g.scale(z, 1.0 / self.cfg.temperature))
    }

    pub fn logits(&self, f: &BlockFeatures) -> Result<Vec<f64>, PolicyError> {
        let mut g = Graph::new();
        let z = self.logits_graph(&mut g, f)?;
        Ok(g.value(z).data().to_vec())
    }

    pub fn block_probs(&self, f: &BlockFeatures) -> Result<Vec<f64>, PolicyError> {
        Ok(self.logits(f)?.into_iter().map(crate::tensor::sigmoid).collect())
    }

    pub fn sample(&self, f: &BlockFeatures, rng: &mut impl Rng) -> Result<PolicySample, PolicyError> {
        let probs = self.block_probs(f)?;
        let flags: Vec<bool> = probs.iter().map(|&p| rng.gen::<f64>() < p).collect();
        let blocks = BlockLabelSet::from_flags(self.grid, &flags)?;
        Ok(PolicySample {
            output: structured_from_probs(&probs, &blocks),
            logprob: factorized_logprob(&self.logits(f)?, &flags),
            blocks,
        })
    }

    pub fn logprob_of(&self, f: &BlockFeatures, blocks: &BlockLabelSet) -> Result<f64, PolicyError> {
        if blocks.grid() != self.grid {
            return Err(PolicyError::Shape {
                got: blocks.grid().block_count(),
                want: self.grid.block_count(),
            });
        }
        Ok(factorized_logprob(&self.logits(f)?, &blocks.to_flags()))
    }

    /// Blocks whose probability is strictly above one half.
    pub fn greedy_decode(&self, f: &BlockFeatures) -> Result<BlockLabelSet, PolicyError> {
        let flags: Vec<bool> = self.logits(f)?.iter().map(|&z| z > 0.0).collect();
        Ok(BlockLabelSet::from_flags(self.grid, &flags)?)
    }

    /// Structured output for the greedy decision.
    pub fn respond(&self, f: &BlockFeatures) -> Result<StructuredOutput, PolicyError> {
        let probs = self.block_probs(f)?;
        let blocks = self.greedy_decode(f)?;
        Ok(structured_from_probs(&probs, &blocks))
    }

    pub fn to_checkpoint(&self) -> Vec<u8> {
        let meta = json!({
            "kind": CHECKPOINT_KIND,
            "grid": self.grid,
            "policy": self.cfg,
        });
        encode_checkpoint(&self.store, &meta)
    }

    pub fn from_checkpoint(bytes: &[u8]) -> Result<Self, PolicyError> {
        let (meta, tensors) = decode_checkpoint(bytes)?;
        if meta["kind"] != CHECKPOINT_KIND {
            return Err(CheckpointError::Header(format!("expected a {CHECKPOINT_KIND} checkpoint, found {}", meta["kind"])).into());
        }
        let grid: GridSpec = serde_json::from_value(meta["grid"].clone())
            .map_err(|e| CheckpointError::Header(format!("grid: {e}")))?;
        let cfg: PolicyConfig = serde_json::from_value(meta["policy"].clone())
            .map_err(|e| CheckpointError::Header(format!("policy: {e}")))?;
        let mut p = Self::zeros(grid, cfg)?;
        crate::tensor::load_values(&mut p.store, tensors)?;
        Ok(p)
    }

    pub fn save(&self, path: &Path) -> Result<(), PolicyError> {
        std::fs::write(path, self.to_checkpoint()).map_err(|source| CheckpointError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, PolicyError> {
        let bytes = std::fs::read(path).map_err(|source| CheckpointError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_checkpoint(&bytes)
    }
}

/// `Σ_b log σ(z_b)` over chosen blocks plus `log σ(-z_b)` over the rest.
fn factorized_logprob(logits: &[f64], flags: &[bool]) -> f64 {
    logits
        .iter()
        .zip(flags)
        .map(|(&z, &on)| crate::tensor::log_sigmoid(if on { z } else { -z }))
        .sum()
}

fn structured_from_probs(probs: &[f64], blocks: &BlockLabelSet) -> StructuredOutput {
    let mut think = String::from("block change probabilities:");
    for (b, p) in probs.iter().enumerate() {
        let _ = write!(think, " {b}:{p:.3}");
    }
    let _ = write!(think, "; {} blocks judged changed.", blocks.len());
    let answer = serialize_runs(blocks);
    StructuredOutput {
        raw: render_structured(&think, &answer),
        think,
        answer,
    }
}

/// Records the summed Bernoulli log-likelihood of each of `samples`
/// under `logits` (`[B, 1]`), returning shape `[samples.len(), 1]`.
pub(crate) fn group_logprobs_graph(g: &mut Graph, logits: Var, samples: &[Vec<bool>]) -> Result<Var, PolicyError> {
    let n = g.shape(logits)[0];
    let row = g.reshape(logits, &[1, n])?;
    let rows: Vec<Var> = (0..samples.len()).map(|_| row).collect();
    let tiled = g.concat(&rows, 0)?;
    let signs: Vec<f64> = samples
        .iter()
        .flat_map(|s| s.iter().map(|&on| if on { 1.0 } else { -1.0 }))
        .collect();
    let signs = g.input(Tensor::new(vec![samples.len(), n], signs)?);
    let signed = g.mul(tiled, signs)?;
    let ll = g.log_sigmoid(signed);
    let ones = g.input(Tensor::full(&[n, 1], 1.0));
    Ok(g.matmul(ll, ones)?)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SftConfig {
    pub epochs: usize,
    pub lr: f64,
    /// Scenes per optimizer step.
    pub batch_scenes: usize,
    pub seed: u64,
}

impl Default for SftConfig {
    fn default() -> Self {
        Self {
            epochs: 50,
            lr: 1e-2,
            batch_scenes: 8,
            seed: 0,
        }
    }
}

impl SftConfig {
    pub fn validate(&self) -> Result<(), PolicyError> {
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(PolicyError::Config(format!("sft.lr must be >= 0, got {}", self.lr)));
        }
        if self.batch_scenes == 0 {
            return Err(PolicyError::Config("sft.batch_scenes must be at least 1".into()));
        }
        Ok(())
    }
}

/// Mean per-block binary cross-entropy of one batch, recorded on `g`.
pub fn block_bce_graph(
    g: &mut Graph,
    policy: &ReasonerPolicy,
    batch: &[(BlockFeatures, BlockLabelSet)],
) -> Result<Var, PolicyError> {
    let mut terms = Vec::with_capacity(batch.len());
    let mut count = 0;
    for (f, gt) in batch {
        let z = policy.logits_graph(g, f)?;
        let flags = gt.to_flags();
        let ll = group_logprobs_graph(g, z, std::slice::from_ref(&flags))?;
        terms.push(ll);
        count += flags.len();
    }
    let all = g.concat(&terms, 0)?;
    let total = g.sum(all);
    Ok(g.scale(total, -1.0 / count as f64))
}

/// Minimizes the per-block cross-entropy against the labels with Adam over
/// shuffled mini-batches and returns the loss of every step.
pub fn sft_train(
    policy: &mut ReasonerPolicy,
    data: &[(BlockFeatures, BlockLabelSet)],
    cfg: &SftConfig,
) -> Result<Vec<f64>, PolicyError> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(PolicyError::EmptyDataset);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let adam = AdamConfig::with_lr(cfg.lr);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut curve = Vec::new();
    for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(cfg.batch_scenes) {
            let batch: Vec<_> = chunk.iter().map(|&i| data[i].clone()).collect();
            let mut g = Graph::new();
            let loss = block_bce_graph(&mut g, policy, &batch)?;
            curve.push(g.value(loss).item());
            g.backward(loss)?.accumulate(&mut policy.store);
            adam_step(&mut policy.store, &adam);
        }
    }
    Ok(curve)
}

/// Adds Gaussian noise to every parameter; used to break symmetry of
/// degenerate initializations in tests and experiments.
pub fn jitter_params(policy: &mut ReasonerPolicy, sigma: f64, rng: &mut impl Rng) {
    let normal = Normal::new(0.0, sigma).expect("sigma is finite");
    let ids: Vec<_> = policy.store.ids().collect();
    for id in ids {
        for v in policy.store.value_mut(id).data_mut() {
            *v += normal.sample(rng);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::block_labels_from_mask;
    use crate::scene::{generate, GenConfig};

    fn grid2() -> GridSpec {
        GridSpec::new(2, 2, 4, 4).unwrap()
    }

    fn planar_const(h: usize, w: usize, v: f64) -> Vec<f64> {
        vec![v; 3 * h * w]
    }

    #[test]
    fn identical_frames_have_zero_difference() {
        let p = generate(&GenConfig::default()).unwrap();
        let same = ScenePair { t2: p.t1.clone(), ..p };
        let f = featurize(&same, GridSpec::default()).unwrap();
        for b in 0..64 {
            assert_eq!(&f.block(b)[12..15], &[0.0; 3]);
        }
    }

    #[test]
    fn constant_blocks_have_zero_spread() {
        let grid = GridSpec::default();
        let f = featurize_planar(&planar_const(64, 64, 0.3), &planar_const(64, 64, 0.7), 64, 64, grid).unwrap();
        for b in 0..64 {
            let r = f.block(b);
            assert_eq!(&r[3..6], &[0.0; 3]);
            assert_eq!(&r[9..12], &[0.0; 3]);
        }
    }

    #[test]
    fn brightened_block_statistics() {
        let grid = GridSpec::default();
        let t1 = planar_const(64, 64, 0.25);
        let mut t2 = t1.clone();
        let (y0, x0, y1, x1) = grid.block_rect(10);
        for c in 0..3 {
            for y in y0..y1 {
                for x in x0..x1 {
                    t2[c * 4096 + y * 64 + x] += 0.5;
                }
            }
        }
        let f = featurize_planar(&t1, &t2, 64, 64, grid).unwrap();
        for b in 0..64 {
            let want = if b == 10 { 0.5 } else { 0.0 };
            assert_eq!(&f.block(b)[12..15], &[want; 3], "block {b}");
        }
        assert!(featurize_planar(&t1, &t2, 32, 32, grid).is_err());
    }

    #[test]
    fn zero_policy_is_uniform() {
        let grid = GridSpec::default();
        let pol = ReasonerPolicy::zeros(grid, PolicyConfig::default()).unwrap();
        let f = featurize(&generate(&GenConfig::default()).unwrap(), grid).unwrap();
        assert!(pol.block_probs(&f).unwrap().iter().all(|&p| p == 0.5));
        assert!(pol.greedy_decode(&f).unwrap().is_empty());
        let any = BlockLabelSet::from_indices(grid, [1, 5, 63]).unwrap();
        assert!((pol.logprob_of(&f, &any).unwrap() - 64.0 * 0.5f64.ln()).abs() < 1e-12);
        let s = pol.sample(&f, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        assert!((s.logprob - 64.0 * 0.5f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn hot_temperature_flattens() {
        let grid = GridSpec::default();
        let mut pol = ReasonerPolicy::new(grid, PolicyConfig::default()).unwrap();
        let f = featurize(&generate(&GenConfig::default()).unwrap(), grid).unwrap();
        pol.set_temperature(1e9).unwrap();
        assert!(pol.block_probs(&f).unwrap().iter().all(|p| (p - 0.5).abs() < 1e-8));
        assert!(pol.set_temperature(0.0).is_err());
    }

    #[test]
    fn saturated_bias_extremes() {
        let grid = GridSpec::default();
        let f = featurize(&generate(&GenConfig::default()).unwrap(), grid).unwrap();
        let mut pol = ReasonerPolicy::zeros(grid, PolicyConfig::default()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        pol.set_output_bias(-800.0);
        let s = pol.sample(&f, &mut rng).unwrap();
        assert!(s.blocks.is_empty());
        assert_eq!(s.output.answer, "");
        assert_eq!(s.logprob, 0.0);
        pol.set_output_bias(800.0);
        let s = pol.sample(&f, &mut rng).unwrap();
        assert_eq!(s.output.answer, "0-63");
        assert_eq!(pol.logprob_of(&f, &s.blocks).unwrap(), 0.0);
    }

    #[test]
    fn samples_are_well_formed_and_self_consistent() {
        let grid = GridSpec::default();
        let pol = ReasonerPolicy::new(grid, PolicyConfig::default()).unwrap();
        let f = featurize(&generate(&GenConfig::default()).unwrap(), grid).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..20 {
            let s = pol.sample(&f, &mut rng).unwrap();
            assert!((pol.logprob_of(&f, &s.blocks).unwrap() - s.logprob).abs() < 1e-12);
            assert_eq!(crate::reward::format_reward(&s.output.raw, grid), 1.0);
            assert_eq!(crate::reward::parse_completion(&s.output.raw, grid).unwrap(), s.blocks);
        }
    }

    #[test]
    fn outcome_probabilities_sum_to_one() {
        let grid = grid2();
        let pol = ReasonerPolicy::new(grid, PolicyConfig { init_seed: 3, ..Default::default() }).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let t1: Vec<f64> = (0..48).map(|_| rng.gen()).collect();
        let t2: Vec<f64> = (0..48).map(|_| rng.gen()).collect();
        let f = featurize_planar(&t1, &t2, 4, 4, grid).unwrap();
        let total: f64 = (0u32..16)
            .map(|m| {
                let set = BlockLabelSet::from_indices(grid, (0..4).filter(|b| m >> b & 1 == 1)).unwrap();
                pol.logprob_of(&f, &set).unwrap().exp()
            })
            .sum();
        assert!((total - 1.0).abs() < 1e-12);
    }

    #[test]
    fn greedy_is_scale_invariant() {
        let grid = GridSpec::default();
        let mut pol = ReasonerPolicy::new(grid, PolicyConfig { init_seed: 8, ..Default::default() }).unwrap();
        pol.set_output_bias(0.3);
        let f = featurize(&generate(&GenConfig { seed: 3, ..Default::default() }).unwrap(), grid).unwrap();
        let before = pol.greedy_decode(&f).unwrap();
        for t in [0.01, 0.5, 7.0, 300.0] {
            pol.set_temperature(t).unwrap();
            assert_eq!(pol.greedy_decode(&f).unwrap(), before);
        }
    }

    #[test]
    fn greedy_matches_majority_vote() {
        let grid = GridSpec::default();
        let pol = ReasonerPolicy::new(grid, PolicyConfig { init_seed: 5, ..Default::default() }).unwrap();
        let f = featurize(&generate(&GenConfig { seed: 12, ..Default::default() }).unwrap(), grid).unwrap();
        let probs = pol.block_probs(&f).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut counts = vec![0usize; 64];
        for _ in 0..10_000 {
            for b in pol.sample(&f, &mut rng).unwrap().blocks.iter() {
                counts[b] += 1;
            }
        }
        let greedy = pol.greedy_decode(&f).unwrap();
        for b in 0..64 {
            if (0.45..=0.55).contains(&probs[b]) {
                continue;
            }
            assert_eq!(counts[b] > 5_000, greedy.contains(b), "block {b} p={}", probs[b]);
        }
    }

    #[test]
    fn deterministic_probabilities() {
        let grid = GridSpec::default();
        let f = featurize(&generate(&GenConfig { seed: 2, ..Default::default() }).unwrap(), grid).unwrap();
        let a = ReasonerPolicy::new(grid, PolicyConfig::default()).unwrap().block_probs(&f).unwrap();
        let b = ReasonerPolicy::new(grid, PolicyConfig::default()).unwrap().block_probs(&f).unwrap();
        assert_eq!(a.iter().map(|v| v.to_bits()).collect::<Vec<_>>(), b.iter().map(|v| v.to_bits()).collect::<Vec<_>>());
    }

    fn one_scene(seed: u64) -> (BlockFeatures, BlockLabelSet) {
        let grid = GridSpec::default();
        let p = generate(&GenConfig { seed, ..Default::default() }).unwrap();
        (featurize(&p, grid).unwrap(), block_labels_from_mask(&p.gt, grid, 0.0).unwrap())
    }

    #[test]
    fn sft_overfits_one_scene() {
        let mut pol = ReasonerPolicy::new(GridSpec::default(), PolicyConfig::default()).unwrap();
        let data = vec![one_scene(21)];
        let cfg = SftConfig { epochs: 400, lr: 1e-2, ..Default::default() };
        let curve = sft_train(&mut pol, &data, &cfg).unwrap();
        assert!(curve.last().unwrap() < &curve[0]);
        assert_eq!(pol.greedy_decode(&data[0].0).unwrap(), data[0].1);
    }

    #[test]
    fn sft_zero_lr_and_initial_loss() {
        let grid = GridSpec::default();
        let mut pol = ReasonerPolicy::zeros(grid, PolicyConfig::default()).unwrap();
        let data = vec![one_scene(1), one_scene(2)];
        let before = pol.clone();
        let cfg = SftConfig { epochs: 3, lr: 0.0, ..Default::default() };
        let curve = sft_train(&mut pol, &data, &cfg).unwrap();
        assert_eq!(pol.params().flat_values(), before.params().flat_values());
        assert!((curve[0] - std::f64::consts::LN_2).abs() < 1e-12);
        assert!(matches!(sft_train(&mut pol, &[], &cfg), Err(PolicyError::EmptyDataset)));
    }

    #[test]
    fn sft_smoothed_curve_descends() {
        let mut pol = ReasonerPolicy::new(GridSpec::default(), PolicyConfig::default()).unwrap();
        let data: Vec<_> = (0..4).map(one_scene).collect();
        let cfg = SftConfig {
            epochs: 120,
            lr: 5e-3,
            batch_scenes: 4,
            seed: 0,
        };
        let curve = sft_train(&mut pol, &data, &cfg).unwrap();
        let smooth: Vec<f64> = curve.chunks(10).map(|c| c.iter().sum::<f64>() / c.len() as f64).collect();
        for w in smooth.windows(2) {
            assert!(w[1] <= w[0] + 1e-12, "{smooth:?}");
        }
    }

    #[test]
    fn checkpoint_roundtrip() {
        let grid = GridSpec::default();
        let pol = ReasonerPolicy::new(grid, PolicyConfig { hidden: 7, temperature: 0.8, init_seed: 4 }).unwrap();
        let back = ReasonerPolicy::from_checkpoint(&pol.to_checkpoint()).unwrap();
        assert_eq!(back.params().flat_values(), pol.params().flat_values());
        assert_eq!(back.config(), pol.config());
        assert_eq!(back.grid(), grid);
    }
}

//! Stage commands. Each reads from and writes to the configured directories.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::{record_run, write_json, PipelineConfig, PipelineError, Result};
use crate::grid::{block_labels_from_mask, coarse_mask_from_blocks, parse_runs, serialize_runs, BlockLabelSet, GridSpec};
use crate::grpo::{grpo_train, Prompt};
use crate::metrics::{confusion, metrics, ConfusionMatrix, Metrics};
use crate::mgd::{predict, train_decoder, DecoderSample, MaskGuidedDecoder, Sidecar};
use crate::pnm;
use crate::policy::{featurize, sft_train, BlockFeatures, ReasonerPolicy};
use crate::reward::{total_reward, RewardBreakdown};
use crate::scene::{generate_dataset, load_scene, GenConfig, Manifest, ScenePair, MANIFEST_FILE};

pub const SFT_CHECKPOINT: &str = "reasoner_sft.ckpt";
pub const GRPO_CHECKPOINT: &str = "reasoner_grpo.ckpt";
pub const DECODER_CHECKPOINT: &str = "decoder.ckpt";
pub const GRPO_LOG: &str = "grpo_log.jsonl";
pub const COMPLETIONS_FILE: &str = "completions.jsonl";
pub const SIDECAR_FILE: &str = "sidecar.json";

/// First scene seed of a split. Different top-level seeds never share
/// scenes, and train and test never overlap.
pub fn split_seed(seed: u64, test: bool) -> u64 {
    seed.wrapping_mul(1 << 33).wrapping_add(if test { 1 << 32 } else { 0 })
}

/// Where the coarse mask of each scene comes from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CoarseSource {
    /// Ground-truth blocks.
    Oracle,
    /// Greedy blocks of the trained reasoner.
    Reasoner,
}

impl FromStr for CoarseSource {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "oracle" => Ok(Self::Oracle),
            "reasoner" => Ok(Self::Reasoner),
            other => Err(format!("expected oracle or reasoner, got {other:?}")),
        }
    }
}

/// Which reasoner checkpoint to use.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ReasonerStage {
    Sft,
    Grpo,
}

impl FromStr for ReasonerStage {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "sft" => Ok(Self::Sft),
            "grpo" => Ok(Self::Grpo),
            other => Err(format!("expected sft or grpo, got {other:?}")),
        }
    }
}

impl ReasonerStage {
    fn file(self) -> &'static str {
        match self {
            Self::Sft => SFT_CHECKPOINT,
            Self::Grpo => GRPO_CHECKPOINT,
        }
    }

    fn producer(self) -> &'static str {
        match self {
            Self::Sft => "sft",
            Self::Grpo => "grpo",
        }
    }
}

fn require(path: &Path, hint: &str) -> Result<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(PipelineError::Missing {
            path: path.display().to_string(),
            hint: hint.into(),
        })
    }
}

/// One scene of a dataset split with its block truth under the run's grid.
#[derive(Debug, Clone)]
pub struct LoadedScene {
    pub id: String,
    pub pair: ScenePair,
    pub gt_blocks: BlockLabelSet,
    /// File name of the truth mask, reused for predictions.
    pub gt_file: String,
}

pub fn load_split(cfg: &PipelineConfig, manifest_path: &Path) -> Result<Vec<LoadedScene>> {
    require(manifest_path, "run gen-data first")?;
    let manifest = Manifest::load(manifest_path)?;
    let base = manifest_path.parent().unwrap_or(Path::new("."));
    manifest
        .scenes
        .iter()
        .map(|e| {
            let pair = load_scene(base, e)?;
            if (pair.gt.h(), pair.gt.w()) != (cfg.grid.image_h(), cfg.grid.image_w()) {
                return Err(PipelineError::Schema {
                    path: manifest_path.display().to_string(),
                    msg: format!(
                        "scene {} is {}x{}, config expects {}x{}",
                        e.id,
                        pair.gt.h(),
                        pair.gt.w(),
                        cfg.grid.image_h(),
                        cfg.grid.image_w()
                    ),
                });
            }
            Ok(LoadedScene {
                id: e.id.clone(),
                gt_blocks: block_labels_from_mask(&pair.gt, cfg.grid, cfg.tau)?,
                gt_file: e.gt.clone(),
                pair,
            })
        })
        .collect()
}

pub fn load_reasoner(cfg: &PipelineConfig, stage: ReasonerStage) -> Result<(ReasonerPolicy, PathBuf)> {
    let path = cfg.checkpoint(stage.file());
    require(&path, &format!("run {} first", stage.producer()))?;
    let policy = ReasonerPolicy::load(&path)?;
    if policy.grid() != cfg.grid {
        return Err(PipelineError::config(
            "grid",
            format!("{} was trained on a {} grid", path.display(), policy.grid().label()),
        ));
    }
    Ok((policy, path))
}

pub fn load_decoder(cfg: &PipelineConfig) -> Result<(MaskGuidedDecoder, PathBuf)> {
    let path = cfg.checkpoint(DECODER_CHECKPOINT);
    require(&path, "run train-decoder first")?;
    let model = MaskGuidedDecoder::load(&path)?;
    let m = model.config();
    if (m.h, m.w) != (cfg.grid.image_h(), cfg.grid.image_w()) {
        return Err(PipelineError::config(
            "mgd.h",
            format!("{} expects {}x{} inputs", path.display(), m.h, m.w),
        ));
    }
    Ok((model, path))
}

/// Order-preserving map over `items` on up to `threads` scoped threads.
pub fn par_map<T: Sync, R: Send>(
    items: &[T],
    threads: usize,
    f: impl Fn(&T) -> Result<R> + Sync,
) -> Result<Vec<R>> {
    if threads <= 1 || items.len() < 2 {
        return items.iter().map(f).collect();
    }
    let chunk = items.len().div_ceil(threads);
    std::thread::scope(|s| {
        let f = &f;
        let handles: Vec<_> = items
            .chunks(chunk)
            .map(|c| s.spawn(move || c.iter().map(f).collect::<Result<Vec<R>>>()))
            .collect();
        let mut out = Vec::with_capacity(items.len());
        for h in handles {
            out.extend(h.join().expect("worker thread panicked")?);
        }
        Ok(out)
    })
}

/// Micro-averaged block precision, recall and F1.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BlockScores {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

pub fn block_scores<'a>(pairs: impl IntoIterator<Item = (&'a BlockLabelSet, &'a BlockLabelSet)>) -> Result<BlockScores> {
    let mut cm = ConfusionMatrix::default();
    for (pred, gt) in pairs {
        let tp = pred.intersection_len(gt)?;
        cm.tp += tp as u64;
        cm.fp += (pred.len() - tp) as u64;
        cm.fn_ += (gt.len() - tp) as u64;
    }
    let (p, r) = (
        ratio(cm.tp, cm.tp + cm.fp, cm.fn_ == 0),
        ratio(cm.tp, cm.tp + cm.fn_, cm.fp == 0),
    );
    Ok(BlockScores {
        precision: p,
        recall: r,
        f1: ratio(2 * cm.tp, 2 * cm.tp + cm.fp + cm.fn_, true),
    })
}

fn ratio(num: u64, den: u64, empty_is_perfect: bool) -> f64 {
    if den == 0 {
        if empty_is_perfect {
            1.0
        } else {
            0.0
        }
    } else {
        num as f64 / den as f64
    }
}

fn reasoner_scores(policy: &ReasonerPolicy, data: &[(BlockFeatures, BlockLabelSet)]) -> Result<BlockScores> {
    let preds = data
        .iter()
        .map(|(f, _)| policy.greedy_decode(f))
        .collect::<std::result::Result<Vec<_>, _>>()?;
    block_scores(preds.iter().zip(data.iter().map(|(_, gt)| gt)))
}

fn features(cfg: &PipelineConfig, scenes: &[LoadedScene]) -> Result<Vec<(BlockFeatures, BlockLabelSet)>> {
    scenes
        .iter()
        .map(|s| Ok((featurize(&s.pair, cfg.grid)?, s.gt_blocks.clone())))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenReport {
    pub train_manifest: PathBuf,
    pub test_manifest: PathBuf,
    pub train_scenes: usize,
    pub test_scenes: usize,
}

/// Writes `n_train` training and `n_test` held-out scenes.
pub fn cmd_gen_data(cfg: &PipelineConfig, n_train: usize, n_test: usize) -> Result<GenReport> {
    record_run(cfg, "gen-data", |log| {
        let mut manifests = Vec::new();
        for (dir, n, test) in [(cfg.train_dir(), n_train, false), (cfg.test_dir(), n_test, true)] {
            let gen = GenConfig {
                seed: split_seed(cfg.seed, test),
                ..cfg.gen.clone()
            };
            let path = generate_dataset(&gen, n, &dir, cfg.grid, cfg.tau)?;
            let manifest = Manifest::load(&path)?;
            for e in &manifest.scenes {
                for f in [&e.t1, &e.t2, &e.gt] {
                    log.output(dir.join(f));
                }
            }
            log.output(&path);
            manifests.push(path);
        }
        let test_manifest = manifests.pop().expect("two splits");
        let train_manifest = manifests.pop().expect("two splits");
        Ok(GenReport {
            train_manifest,
            test_manifest,
            train_scenes: n_train,
            test_scenes: n_test,
        })
    })
}

/// Run string of the blocks a mask touches.
pub fn cmd_encode(mask_path: &Path, grid: GridSpec, tau: f64) -> Result<String> {
    let mask = pnm::read_mask(mask_path)?;
    let labels = block_labels_from_mask(&mask, grid, tau).map_err(|e| PipelineError::Schema {
        path: mask_path.display().to_string(),
        msg: e.to_string(),
    })?;
    Ok(serialize_runs(&labels))
}

/// Rasterizes a run string to a coarse mask PGM.
pub fn cmd_decode(runs: &str, grid: GridSpec, out: &Path) -> Result<()> {
    let labels = parse_runs(runs, grid).map_err(|e| PipelineError::Schema {
        path: "run string".into(),
        msg: format!("{runs:?}: {e}"),
    })?;
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(PipelineError::io(dir))?;
    }
    pnm::write_mask(out, &coarse_mask_from_blocks(&labels))?;
    Ok(())
}

/// One line of a completions file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Completion {
    pub id: String,
    pub completion: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredLine {
    pub id: String,
    #[serde(flatten)]
    pub reward: RewardBreakdown,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreReport {
    pub per_line: Vec<ScoredLine>,
    pub mean_total: f64,
    pub mean_format: f64,
    pub mean_recall: f64,
}

/// Scores a JSONL file of [`Completion`]s against the manifest's truth.
pub fn cmd_score(cfg: &PipelineConfig, predictions: &Path, manifest_path: &Path) -> Result<ScoreReport> {
    record_run(cfg, "score", |log| {
        log.input(predictions);
        log.input(manifest_path);
        require(predictions, "no completions file")?;
        let scenes = load_split(cfg, manifest_path)?;
        let text = fs::read_to_string(predictions).map_err(PipelineError::io(predictions))?;
        let mut per_line = Vec::new();
        for (i, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
            let c: Completion = serde_json::from_str(line).map_err(|e| PipelineError::Schema {
                path: format!("{}:{}", predictions.display(), i + 1),
                msg: e.to_string(),
            })?;
            let scene = scenes.iter().find(|s| s.id == c.id).ok_or_else(|| PipelineError::Schema {
                path: format!("{}:{}", predictions.display(), i + 1),
                msg: format!("unknown scene id {:?}", c.id),
            })?;
            per_line.push(ScoredLine {
                reward: total_reward(&c.completion, &scene.gt_blocks, &cfg.reward),
                id: c.id,
            });
        }
        let n = per_line.len().max(1) as f64;
        let mean = |f: fn(&RewardBreakdown) -> f64| per_line.iter().map(|l| f(&l.reward)).sum::<f64>() / n;
        let report = ScoreReport {
            mean_total: mean(|r| r.total),
            mean_format: mean(|r| r.r_format),
            mean_recall: mean(|r| r.recall),
            per_line,
        };
        let out = cfg.report("score.json");
        write_json(&out, &report)?;
        log.output(out);
        Ok(report)
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SftReport {
    pub scenes: usize,
    pub epochs: usize,
    pub steps: usize,
    pub final_loss: f64,
    pub train: BlockScores,
}

pub fn cmd_sft(cfg: &PipelineConfig) -> Result<SftReport> {
    record_run(cfg, "sft", |log| {
        let manifest = cfg.train_dir().join(MANIFEST_FILE);
        log.input(&manifest);
        let data = features(cfg, &load_split(cfg, &manifest)?)?;
        let mut policy = ReasonerPolicy::new(cfg.grid, cfg.policy)?;
        let curve = sft_train(&mut policy, &data, &cfg.sft)?;
        let ckpt = cfg.checkpoint(SFT_CHECKPOINT);
        fs::create_dir_all(&cfg.paths.checkpoints_dir).map_err(PipelineError::io(&cfg.paths.checkpoints_dir))?;
        policy.save(&ckpt)?;
        log.output(&ckpt);
        let report = SftReport {
            scenes: data.len(),
            epochs: cfg.sft.epochs,
            steps: curve.len(),
            final_loss: curve.last().copied().unwrap_or(f64::NAN),
            train: reasoner_scores(&policy, &data)?,
        };
        let out = cfg.report("sft.json");
        write_json(&out, &report)?;
        log.output(out);
        Ok(report)
    })
}

/// Optimizer steps covering `epochs` passes over `n` prompts.
pub fn grpo_steps(n: usize, prompts_per_step: usize, epochs: usize) -> usize {
    epochs * n.div_ceil(prompts_per_step.max(1))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GrpoReport {
    pub scenes: usize,
    pub steps: usize,
    pub first_mean_reward: f64,
    pub last_mean_reward: f64,
    pub train: BlockScores,
}

/// Continues from the supervised checkpoint. `epochs` overrides the
/// configured step count.
pub fn cmd_grpo(cfg: &PipelineConfig, epochs: Option<usize>) -> Result<GrpoReport> {
    record_run(cfg, "grpo", |log| {
        let manifest = cfg.train_dir().join(MANIFEST_FILE);
        log.input(&manifest);
        let (mut policy, from) = load_reasoner(cfg, ReasonerStage::Sft)?;
        log.input(from);
        let scenes = load_split(cfg, &manifest)?;
        let prompts = scenes
            .iter()
            .map(|s| {
                Ok(Prompt {
                    id: s.id.clone(),
                    features: featurize(&s.pair, cfg.grid)?,
                    gt: s.gt_blocks.clone(),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let mut gcfg = cfg.grpo;
        if let Some(e) = epochs {
            gcfg.steps = grpo_steps(prompts.len(), gcfg.prompts_per_step, e);
        }
        let log_path = cfg.report(GRPO_LOG);
        fs::create_dir_all(&cfg.paths.reports_dir).map_err(PipelineError::io(&cfg.paths.reports_dir))?;
        let file = fs::File::create(&log_path).map_err(PipelineError::io(&log_path))?;
        let mut writer = BufWriter::new(file);
        let history = grpo_train(&mut policy, &prompts, &gcfg, &cfg.reward, Some(&mut writer))?;
        writer.flush().map_err(PipelineError::io(&log_path))?;
        drop(writer);
        log.output(&log_path);

        let ckpt = cfg.checkpoint(GRPO_CHECKPOINT);
        policy.save(&ckpt)?;
        log.output(&ckpt);
        let data: Vec<_> = prompts.into_iter().map(|p| (p.features, p.gt)).collect();
        let report = GrpoReport {
            scenes: data.len(),
            steps: history.len(),
            first_mean_reward: history.first().map_or(f64::NAN, |s| s.mean_reward),
            last_mean_reward: history.last().map_or(f64::NAN, |s| s.mean_reward),
            train: reasoner_scores(&policy, &data)?,
        };
        let out = cfg.report("grpo.json");
        write_json(&out, &report)?;
        log.output(out);
        Ok(report)
    })
}

/// Blocks handed to the decoder for each scene.
fn coarse_blocks(
    cfg: &PipelineConfig,
    scenes: &[LoadedScene],
    source: CoarseSource,
    reasoner: Option<&ReasonerPolicy>,
) -> Result<Vec<BlockLabelSet>> {
    scenes
        .iter()
        .map(|s| match (source, reasoner) {
            (CoarseSource::Oracle, _) => Ok(s.gt_blocks.clone()),
            (CoarseSource::Reasoner, Some(p)) => Ok(p.greedy_decode(&featurize(&s.pair, cfg.grid)?)?),
            (CoarseSource::Reasoner, None) => Err(PipelineError::Stage("reasoner not loaded".into())),
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecoderReport {
    pub scenes: usize,
    pub coarse: CoarseSource,
    pub guidance: bool,
    pub epoch_loss: Vec<f64>,
    pub alphas: Vec<f64>,
}

pub fn cmd_train_decoder(cfg: &PipelineConfig, source: CoarseSource, stage: ReasonerStage) -> Result<DecoderReport> {
    record_run(cfg, "train-decoder", |log| {
        let manifest = cfg.train_dir().join(MANIFEST_FILE);
        log.input(&manifest);
        let reasoner = match source {
            CoarseSource::Oracle => None,
            CoarseSource::Reasoner => {
                let (p, from) = load_reasoner(cfg, stage)?;
                log.input(from);
                Some(p)
            }
        };
        let scenes = load_split(cfg, &manifest)?;
        let blocks = coarse_blocks(cfg, &scenes, source, reasoner.as_ref())?;
        let samples: Vec<DecoderSample> = scenes
            .iter()
            .zip(&blocks)
            .map(|(s, b)| DecoderSample::new(&s.pair, coarse_mask_from_blocks(b)))
            .collect();
        let mut model = MaskGuidedDecoder::new(cfg.mgd.clone())?;
        let mut epoch_loss = Vec::new();
        train_decoder(&mut model, &samples, &cfg.decoder, &cfg.loss, |_, l| epoch_loss.push(l))?;
        fs::create_dir_all(&cfg.paths.checkpoints_dir).map_err(PipelineError::io(&cfg.paths.checkpoints_dir))?;
        let ckpt = cfg.checkpoint(DECODER_CHECKPOINT);
        model.save(&ckpt)?;
        log.output(&ckpt);
        let report = DecoderReport {
            scenes: samples.len(),
            coarse: source,
            guidance: model.config().guidance,
            epoch_loss,
            alphas: model.alphas(),
        };
        let out = cfg.report("decoder.json");
        write_json(&out, &report)?;
        log.output(out);
        Ok(report)
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct InferOptions {
    /// Defaults to the held-out split.
    pub manifest: Option<PathBuf>,
    pub coarse: CoarseSource,
    pub reasoner: ReasonerStage,
    pub no_guidance: bool,
    /// Defaults to `<reports_dir>/predictions`.
    pub out_dir: Option<PathBuf>,
    pub threads: usize,
}

impl Default for InferOptions {
    fn default() -> Self {
        Self {
            manifest: None,
            coarse: CoarseSource::Reasoner,
            reasoner: ReasonerStage::Grpo,
            no_guidance: false,
            out_dir: None,
            threads: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InferReport {
    pub scenes: usize,
    pub out_dir: PathBuf,
    pub coarse: CoarseSource,
    pub sidecar: Sidecar,
}

/// Reasoner blocks, coarse mask, then decoder prediction for every scene of
/// the split. Predictions reuse the truth masks' file names.
pub fn cmd_infer(cfg: &PipelineConfig, opts: &InferOptions) -> Result<InferReport> {
    record_run(cfg, "infer", |log| {
        let manifest = opts.manifest.clone().unwrap_or_else(|| cfg.test_dir().join(MANIFEST_FILE));
        let out_dir = opts.out_dir.clone().unwrap_or_else(|| cfg.report("predictions"));
        log.input(&manifest);
        let (mut model, from) = load_decoder(cfg)?;
        log.input(from);
        if opts.no_guidance {
            model.disable_guidance();
        }
        let reasoner = match opts.coarse {
            CoarseSource::Oracle => None,
            CoarseSource::Reasoner => {
                let (p, from) = load_reasoner(cfg, opts.reasoner)?;
                log.input(from);
                Some(p)
            }
        };
        let scenes = load_split(cfg, &manifest)?;
        let blocks = coarse_blocks(cfg, &scenes, opts.coarse, reasoner.as_ref())?;
        fs::create_dir_all(&out_dir).map_err(PipelineError::io(&out_dir))?;

        let jobs: Vec<(&LoadedScene, &BlockLabelSet)> = scenes.iter().zip(&blocks).collect();
        let preds = par_map(&jobs, opts.threads, |(s, b)| Ok(predict(&model, &s.pair, &coarse_mask_from_blocks(b))?))?;
        for ((s, _), pred) in jobs.iter().zip(&preds) {
            let path = out_dir.join(&s.gt_file);
            pnm::write_mask(&path, pred)?;
            log.output(path);
        }

        if let Some(p) = &reasoner {
            let path = out_dir.join(COMPLETIONS_FILE);
            let mut text = String::new();
            for s in &scenes {
                let c = Completion {
                    id: s.id.clone(),
                    completion: p.respond(&featurize(&s.pair, cfg.grid)?)?.raw,
                };
                text.push_str(&serde_json::to_string(&c).expect("completion serializes"));
                text.push('\n');
            }
            fs::write(&path, text).map_err(PipelineError::io(&path))?;
            log.output(path);
        }
        let sidecar = Sidecar::of(&model);
        let path = out_dir.join(SIDECAR_FILE);
        write_json(&path, &sidecar)?;
        log.output(path);
        Ok(InferReport {
            scenes: scenes.len(),
            out_dir,
            coarse: opts.coarse,
            sidecar,
        })
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneEval {
    pub id: String,
    pub confusion: ConfusionMatrix,
    pub metrics: Metrics,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub per_scene: Vec<SceneEval>,
    /// Metrics of the summed confusion matrix, as fractions.
    pub aggregate: Metrics,
    pub aggregate_percent: Metrics,
    pub confusion: ConfusionMatrix,
}

/// Compares the masks in `pred_dir` with the manifest's truth. Reads files
/// only; the prediction for a scene has the truth mask's file name.
pub fn cmd_eval(cfg: &PipelineConfig, pred_dir: &Path, manifest_path: &Path, threads: usize) -> Result<EvalReport> {
    record_run(cfg, "eval", |log| {
        log.input(pred_dir);
        log.input(manifest_path);
        require(manifest_path, "no manifest")?;
        let manifest = Manifest::load(manifest_path)?;
        let base = manifest_path.parent().unwrap_or(Path::new("."));
        let per_scene = par_map(&manifest.scenes, threads, |e| {
            let pred_path = pred_dir.join(&e.gt);
            require(&pred_path, "run infer first")?;
            let pred = pnm::read_mask(&pred_path)?;
            let gt = pnm::read_mask(&base.join(&e.gt))?;
            let cm = confusion(&pred, &gt).map_err(|err| PipelineError::Schema {
                path: pred_path.display().to_string(),
                msg: err.to_string(),
            })?;
            Ok(SceneEval {
                id: e.id.clone(),
                metrics: metrics(&cm)?,
                confusion: cm,
            })
        })?;
        let total: ConfusionMatrix = per_scene.iter().map(|s| s.confusion).sum();
        let aggregate = metrics(&total)?;
        let report = EvalReport {
            per_scene,
            aggregate,
            aggregate_percent: aggregate.as_percent(),
            confusion: total,
        };
        let out = cfg.report("eval.json");
        write_json(&out, &report)?;
        log.output(out);
        Ok(report)
    })
}

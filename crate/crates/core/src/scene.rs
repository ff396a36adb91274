//! Deterministic synthetic bi-temporal scenes.
//!
//! A scene is a textured background with axis-aligned rectangular
//! "buildings". The second frame adds, removes or resizes a fraction of the
//! objects and then applies whole-frame photometric perturbations (brightness,
//! tint, sensor noise). Ground truth is the set of pixels whose object layer
//! differs, computed before any perturbation.
//!
//! Object placement and rendering draw from one random stream and the
//! perturbations from another, so the ground truth and the unperturbed
//! rendering never depend on the perturbation settings.

use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::grid::{block_labels_from_mask, parse_runs, serialize_runs, ChangeMask, GridError, GridSpec};
use crate::pnm::{self, PnmError, RgbImage};

#[derive(Debug, Error)]
pub enum SceneError {
    #[error("{field}: {msg}")]
    Config { field: &'static str, msg: String },
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: io::Error,
    },
    #[error(transparent)]
    Raster(#[from] PnmError),
    #[error(transparent)]
    Grid(#[from] GridError),
    #[error("manifest {path}: {msg}")]
    Manifest { path: String, msg: String },
}

/// Magnitude ranges of the photometric changes applied to the second frame.
/// Brightness and tint magnitudes are drawn uniformly from their ranges and
/// given a random sign.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PerturbConfig {
    pub brightness_delta: [f64; 2],
    pub tint: [f64; 2],
    pub noise_sigma: f64,
}

impl Default for PerturbConfig {
    fn default() -> Self {
        Self {
            brightness_delta: [0.0, 0.1],
            tint: [0.0, 0.04],
            noise_sigma: 0.02,
        }
    }
}

impl PerturbConfig {
    pub fn none() -> Self {
        Self {
            brightness_delta: [0.0, 0.0],
            tint: [0.0, 0.0],
            noise_sigma: 0.0,
        }
    }

    /// Collapses every range onto its upper end.
    pub fn maximal(&self) -> Self {
        Self {
            brightness_delta: [self.brightness_delta[1]; 2],
            tint: [self.tint[1]; 2],
            noise_sigma: self.noise_sigma,
        }
    }
}

/// Which semantic edits the second frame may receive.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct ChangeKinds {
    pub add: bool,
    pub remove: bool,
    pub resize: bool,
}

impl Default for ChangeKinds {
    fn default() -> Self {
        Self {
            add: true,
            remove: true,
            resize: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GenConfig {
    pub h: usize,
    pub w: usize,
    /// Inclusive range of object counts in the first frame.
    pub n_objects: [usize; 2],
    /// Inclusive range of object side lengths in pixels.
    pub object_size: [usize; 2],
    /// Object corners and sides are multiples of this many pixels.
    pub snap: usize,
    pub change_rate: f64,
    pub change_kinds: ChangeKinds,
    pub perturb: PerturbConfig,
    pub seed: u64,
}

impl Default for GenConfig {
    fn default() -> Self {
        Self {
            h: 64,
            w: 64,
            n_objects: [3, 6],
            object_size: [8, 20],
            snap: 4,
            change_rate: 0.5,
            change_kinds: ChangeKinds::default(),
            perturb: PerturbConfig::default(),
            seed: 0,
        }
    }
}

fn config_err(field: &'static str, msg: impl Into<String>) -> SceneError {
    SceneError::Config { field, msg: msg.into() }
}

impl GenConfig {
    pub fn validate(&self) -> Result<(), SceneError> {
        let block = GridSpec::default();
        if self.h < block.rows() || !self.h.is_multiple_of(block.rows()) {
            return Err(config_err("h", format!("{} is not a positive multiple of {}", self.h, block.rows())));
        }
        if self.w < block.cols() || !self.w.is_multiple_of(block.cols()) {
            return Err(config_err("w", format!("{} is not a positive multiple of {}", self.w, block.cols())));
        }
        if self.n_objects[0] > self.n_objects[1] {
            return Err(config_err("n_objects", "lower bound exceeds upper bound"));
        }
        if self.snap == 0 {
            return Err(config_err("snap", "must be at least 1"));
        }
        let [lo, hi] = self.object_size;
        if lo < self.snap || lo > hi || hi > self.h.min(self.w) {
            return Err(config_err(
                "object_size",
                format!("[{lo}, {hi}] must satisfy snap <= lo <= hi <= min(h, w)"),
            ));
        }
        if !(0.0..=1.0).contains(&self.change_rate) {
            return Err(config_err("change_rate", format!("{} is outside [0, 1]", self.change_rate)));
        }
        let k = self.change_kinds;
        if self.change_rate > 0.0 && !(k.add || k.remove || k.resize) {
            return Err(config_err("change_kinds", "at least one kind must be enabled"));
        }
        let p = &self.perturb;
        for (field, r) in [("perturb.brightness_delta", p.brightness_delta), ("perturb.tint", p.tint)] {
            if !(r[0] >= 0.0 && r[0] <= r[1] && r[1] <= 1.0) {
                return Err(config_err(field, format!("{r:?} must satisfy 0 <= lo <= hi <= 1")));
            }
        }
        if !(p.noise_sigma >= 0.0 && p.noise_sigma.is_finite()) {
            return Err(config_err("perturb.noise_sigma", format!("{} must be >= 0", p.noise_sigma)));
        }
        Ok(())
    }
}

/// Half-open pixel rectangle `[y0, y1) x [x0, x1)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Rect {
    pub y0: usize,
    pub x0: usize,
    pub y1: usize,
    pub x1: usize,
}

impl Rect {
    pub fn contains(&self, y: usize, x: usize) -> bool {
        (self.y0..self.y1).contains(&y) && (self.x0..self.x1).contains(&x)
    }

    fn overlaps_with_margin(&self, o: &Rect, margin: usize) -> bool {
        self.y0 < o.y1 + margin && o.y0 < self.y1 + margin && self.x0 < o.x1 + margin && o.x0 < self.x1 + margin
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SceneObject {
    pub id: u32,
    pub rect: Rect,
    pub color: [f64; 3],
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ScenePair {
    pub t1: RgbImage,
    pub t2: RgbImage,
    pub gt: ChangeMask,
    pub seed: u64,
}

/// A scene pair together with the object layers that produced it.
#[derive(Debug, Clone)]
pub struct Scene {
    pub pair: ScenePair,
    pub objects_t1: Vec<SceneObject>,
    pub objects_t2: Vec<SceneObject>,
}

const SEMANTIC_STREAM: u64 = 0;
const PERTURB_STREAM: u64 = 1;
const PLACEMENT_TRIES: usize = 200;

fn snapped(rng: &mut ChaCha8Rng, lo: usize, hi: usize, snap: usize) -> usize {
    let a = lo.div_ceil(snap);
    let b = (hi / snap).max(a);
    rng.gen_range(a..=b) * snap
}

fn random_rect(rng: &mut ChaCha8Rng, cfg: &GenConfig) -> Rect {
    let s = cfg.snap;
    let hh = snapped(rng, cfg.object_size[0], cfg.object_size[1], s);
    let ww = snapped(rng, cfg.object_size[0], cfg.object_size[1], s);
    let y0 = rng.gen_range(0..=(cfg.h - hh) / s) * s;
    let x0 = rng.gen_range(0..=(cfg.w - ww) / s) * s;
    Rect {
        y0,
        x0,
        y1: y0 + hh,
        x1: x0 + ww,
    }
}

fn fits(rect: &Rect, others: &[SceneObject], skip: Option<u32>) -> bool {
    others
        .iter()
        .filter(|o| Some(o.id) != skip)
        .all(|o| !rect.overlaps_with_margin(&o.rect, 1))
}

/// Roof colors stay well separated from the background palette.
fn roof_color(rng: &mut ChaCha8Rng) -> [f64; 3] {
    let base: f64 = rng.gen_range(0.62..0.82);
    let mut c = [0.0; 3];
    for v in &mut c {
        *v = (base + rng.gen_range(-0.1..0.1)).clamp(0.5, 0.9);
    }
    c
}

fn place(rng: &mut ChaCha8Rng, cfg: &GenConfig, objects: &[SceneObject], skip: Option<u32>) -> Option<Rect> {
    (0..PLACEMENT_TRIES)
        .map(|_| random_rect(rng, cfg))
        .find(|r| fits(r, objects, skip))
}

/// Object id per pixel, 0 for background.
fn id_layer(objects: &[SceneObject], h: usize, w: usize) -> Vec<u32> {
    let mut layer = vec![0u32; h * w];
    for o in objects {
        for y in o.rect.y0..o.rect.y1 {
            for x in o.rect.x0..o.rect.x1 {
                layer[y * w + x] = o.id;
            }
        }
    }
    layer
}

/// Linear-light float frame `[h * w * 3]` before quantization.
fn render(objects: &[SceneObject], layer: &[u32], background: &[f64], jitter: &[f64]) -> Vec<f64> {
    let mut out = background.to_vec();
    for (p, &id) in layer.iter().enumerate() {
        if id != 0 {
            let o = objects.iter().find(|o| o.id == id).expect("layer ids come from objects");
            for c in 0..3 {
                out[p * 3 + c] = o.color[c] + jitter[p];
            }
        }
    }
    out
}

fn quantize(h: usize, w: usize, frame: &[f64]) -> RgbImage {
    let mut img = RgbImage::new(h, w);
    for (d, v) in img.data.iter_mut().zip(frame) {
        *d = (v.clamp(0.0, 1.0) * 255.0).round() as u8;
    }
    img
}

fn signed(rng: &mut ChaCha8Rng, range: [f64; 2]) -> f64 {
    let mag = if range[0] < range[1] {
        rng.gen_range(range[0]..=range[1])
    } else {
        range[0]
    };
    if rng.gen_bool(0.5) {
        mag
    } else {
        -mag
    }
}

fn perturb(frame: &mut [f64], p: &PerturbConfig, rng: &mut ChaCha8Rng) {
    let brightness = signed(rng, p.brightness_delta);
    let tint = [signed(rng, p.tint), signed(rng, p.tint), signed(rng, p.tint)];
    let noise = Normal::new(0.0, p.noise_sigma.max(f64::MIN_POSITIVE)).expect("sigma is finite");
    for (i, v) in frame.iter_mut().enumerate() {
        *v += brightness + tint[i % 3];
        if p.noise_sigma > 0.0 {
            *v += noise.sample(rng);
        }
    }
}

pub fn generate_scene(cfg: &GenConfig) -> Result<Scene, SceneError> {
    cfg.validate()?;
    let (h, w) = (cfg.h, cfg.w);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(SEMANTIC_STREAM);

    // Background: a smooth two-tone field with fine texture.
    let ground = [rng.gen_range(0.22..0.34), rng.gen_range(0.28..0.4), rng.gen_range(0.18..0.28)];
    let (fy, fx, phase) = (rng.gen_range(0.05..0.2), rng.gen_range(0.05..0.2), rng.gen_range(0.0..6.3));
    let mut background = vec![0.0; h * w * 3];
    for y in 0..h {
        for x in 0..w {
            let wave = 0.04 * ((y as f64 * fy + x as f64 * fx + phase).sin());
            let grain: f64 = rng.gen_range(-0.02..0.02);
            for c in 0..3 {
                background[(y * w + x) * 3 + c] = ground[c] + wave + grain;
            }
        }
    }
    let jitter: Vec<f64> = (0..h * w).map(|_| rng.gen_range(-0.02..0.02)).collect();

    let n = rng.gen_range(cfg.n_objects[0]..=cfg.n_objects[1]);
    let mut objects_t1: Vec<SceneObject> = Vec::with_capacity(n);
    let mut next_id = 1u32;
    for _ in 0..n {
        if let Some(rect) = place(&mut rng, cfg, &objects_t1, None) {
            objects_t1.push(SceneObject {
                id: next_id,
                rect,
                color: roof_color(&mut rng),
            });
            next_id += 1;
        }
    }

    let mut objects_t2 = objects_t1.clone();
    let mutations = (cfg.change_rate * objects_t1.len().max(1) as f64).round() as usize;
    let mut untouched: Vec<u32> = objects_t1.iter().map(|o| o.id).collect();
    let k = cfg.change_kinds;
    for _ in 0..mutations {
        let mut kinds = Vec::with_capacity(3);
        if k.add {
            kinds.push(0);
        }
        if !untouched.is_empty() {
            if k.remove {
                kinds.push(1);
            }
            if k.resize {
                kinds.push(2);
            }
        }
        if kinds.is_empty() {
            break;
        }
        match kinds[rng.gen_range(0..kinds.len())] {
            0 => {
                if let Some(rect) = place(&mut rng, cfg, &objects_t2, None) {
                    objects_t2.push(SceneObject {
                        id: next_id,
                        rect,
                        color: roof_color(&mut rng),
                    });
                    next_id += 1;
                }
            }
            kind => {
                let id = untouched.swap_remove(rng.gen_range(0..untouched.len()));
                let pos = objects_t2.iter().position(|o| o.id == id).expect("untouched ids exist");
                if kind == 1 {
                    objects_t2.remove(pos);
                } else {
                    let old = objects_t2[pos].rect;
                    let resized = (0..PLACEMENT_TRIES).find_map(|_| {
                        let r = random_rect(&mut rng, cfg);
                        let r = Rect {
                            y0: old.y0,
                            x0: old.x0,
                            y1: (old.y0 + r.y1 - r.y0).min(h),
                            x1: (old.x0 + r.x1 - r.x0).min(w),
                        };
                        (r != old && fits(&r, &objects_t2, Some(id))).then_some(r)
                    });
                    match resized {
                        Some(r) => objects_t2[pos].rect = r,
                        None => {
                            objects_t2.remove(pos);
                        }
                    }
                }
            }
        }
    }

    let layer1 = id_layer(&objects_t1, h, w);
    let layer2 = id_layer(&objects_t2, h, w);
    let gt_bytes: Vec<u8> = layer1.iter().zip(&layer2).map(|(a, b)| u8::from(a != b)).collect();
    let gt = ChangeMask::from_bytes(h, w, &gt_bytes)?;

    let f1 = render(&objects_t1, &layer1, &background, &jitter);
    let mut f2 = render(&objects_t2, &layer2, &background, &jitter);
    let mut prng = ChaCha8Rng::seed_from_u64(cfg.seed);
    prng.set_stream(PERTURB_STREAM);
    perturb(&mut f2, &cfg.perturb, &mut prng);

    Ok(Scene {
        pair: ScenePair {
            t1: quantize(h, w, &f1),
            t2: quantize(h, w, &f2),
            gt,
            seed: cfg.seed,
        },
        objects_t1,
        objects_t2,
    })
}

pub fn generate(cfg: &GenConfig) -> Result<ScenePair, SceneError> {
    Ok(generate_scene(cfg)?.pair)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: String,
    pub t1: String,
    pub t2: String,
    pub gt: String,
    pub seed: u64,
    pub gt_runs: String,
}

/// Index of a generated dataset. Paths are relative to the manifest's
/// directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub grid: GridSpec,
    #[serde(default)]
    pub tau: f64,
    pub scenes: Vec<ManifestEntry>,
}

pub const MANIFEST_FILE: &str = "manifest.json";

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> SceneError + '_ {
    move |source| SceneError::Io {
        path: path.display().to_string(),
        source,
    }
}

impl Manifest {
    pub fn load(path: &Path) -> Result<Manifest, SceneError> {
        let text = fs::read_to_string(path).map_err(io_err(path))?;
        let m: Manifest = serde_json::from_str(&text).map_err(|e| SceneError::Manifest {
            path: path.display().to_string(),
            msg: e.to_string(),
        })?;
        for s in &m.scenes {
            parse_runs(&s.gt_runs, m.grid).map_err(|e| SceneError::Manifest {
                path: path.display().to_string(),
                msg: format!("scene {}: gt_runs {:?}: {e}", s.id, s.gt_runs),
            })?;
        }
        Ok(m)
    }

    pub fn save(&self, path: &Path) -> Result<(), SceneError> {
        let mut text = serde_json::to_string_pretty(self).expect("manifest serializes");
        text.push('\n');
        fs::write(path, text).map_err(io_err(path))
    }

    pub fn find(&self, id: &str) -> Option<&ManifestEntry> {
        self.scenes.iter().find(|s| s.id == id)
    }
}

/// Reads one manifest entry's rasters; `base` is the manifest's directory.
pub fn load_scene(base: &Path, entry: &ManifestEntry) -> Result<ScenePair, SceneError> {
    let t1 = pnm::read_ppm(&base.join(&entry.t1))?;
    let t2 = pnm::read_ppm(&base.join(&entry.t2))?;
    let gt = pnm::read_mask(&base.join(&entry.gt))?;
    if (t1.h, t1.w) != (t2.h, t2.w) || (t1.h, t1.w) != (gt.h(), gt.w()) {
        return Err(SceneError::Manifest {
            path: base.display().to_string(),
            msg: format!("scene {} rasters disagree in size", entry.id),
        });
    }
    Ok(ScenePair {
        t1,
        t2,
        gt,
        seed: entry.seed,
    })
}

pub fn scene_id(index: usize) -> String {
    format!("scene_{index:04}")
}

/// Writes `n` scenes with seeds `cfg.seed, cfg.seed + 1, ...` plus
/// `manifest.json` into `out_dir`, and returns the manifest path.
pub fn generate_dataset(cfg: &GenConfig, n: usize, out_dir: &Path, grid: GridSpec, tau: f64) -> Result<PathBuf, SceneError> {
    cfg.validate()?;
    if grid.image_h() != cfg.h || grid.image_w() != cfg.w {
        return Err(config_err(
            "grid",
            format!("grid covers {}x{}, scenes are {}x{}", grid.image_h(), grid.image_w(), cfg.h, cfg.w),
        ));
    }
    fs::create_dir_all(out_dir).map_err(io_err(out_dir))?;
    let mut scenes = Vec::with_capacity(n);
    for i in 0..n {
        let seed = cfg.seed.wrapping_add(i as u64);
        let pair = generate(&GenConfig { seed, ..cfg.clone() })?;
        let id = scene_id(i);
        let entry = ManifestEntry {
            t1: format!("{id}_t1.ppm"),
            t2: format!("{id}_t2.ppm"),
            gt: format!("{id}_gt.pgm"),
            gt_runs: serialize_runs(&block_labels_from_mask(&pair.gt, grid, tau)?),
            id,
            seed,
        };
        pnm::write_ppm(&out_dir.join(&entry.t1), &pair.t1)?;
        pnm::write_ppm(&out_dir.join(&entry.t2), &pair.t2)?;
        pnm::write_mask(&out_dir.join(&entry.gt), &pair.gt)?;
        scenes.push(entry);
    }
    let path = out_dir.join(MANIFEST_FILE);
    Manifest { grid, tau, scenes }.save(&path)?;
    Ok(path)
}

//! Mask-guided decoder: a siamese convolutional encoder over both frames,
//! window self-attention at the bottleneck, and a decoder that amplifies
//! features inside the coarse change mask at every resolution.
//!
//! Level `l` of every pyramid has resolution `H / 2^l x W / 2^l`. The
//! decoder has one stage per level: the bottleneck at the deepest level,
//! then one upsampling stage per shallower level. Each stage owns one
//! guidance strength.

mod train;

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::json;
use thiserror::Error;

use crate::grid::ChangeMask;
use crate::loss::LossError;
use crate::tensor::{
    decode_checkpoint, encode_checkpoint, CheckpointError, Graph, ParamId, ParamStore, Tensor, TensorError, Var,
};

pub use train::{
    predict, threshold, train_decoder, DecoderSample, DecoderTrainConfig, Sidecar, DEFAULT_THRESHOLD,
};

const CHECKPOINT_KIND: &str = "decoder";

#[derive(Debug, Error)]
pub enum MgdError {
    #[error("invalid decoder config: {field}: {msg}")]
    Config { field: &'static str, msg: String },
    #[error("input is {got_h}x{got_w}, decoder expects {want_h}x{want_w}")]
    Size {
        got_h: usize,
        got_w: usize,
        want_h: usize,
        want_w: usize,
    },
    #[error("misaligned inputs: {0}")]
    Misaligned(String),
    #[error("training set is empty")]
    EmptyDataset,
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
}

pub type Result<T> = std::result::Result<T, MgdError>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MgdConfig {
    /// Encoder channels per level, shallowest first.
    pub channels: Vec<usize>,
    pub window_size: usize,
    pub alpha_init: f64,
    pub h: usize,
    pub w: usize,
    /// When false every guidance strength is pinned at zero and never trained.
    pub guidance: bool,
    pub init_seed: u64,
}

impl Default for MgdConfig {
    fn default() -> Self {
        Self {
            channels: vec![16, 32, 64],
            window_size: 4,
            alpha_init: 0.1,
            h: 64,
            w: 64,
            guidance: true,
            init_seed: 0,
        }
    }
}

impl MgdConfig {
    pub fn levels(&self) -> usize {
        self.channels.len()
    }

    pub fn validate(&self) -> Result<()> {
        let err = |field, msg: String| Err(MgdError::Config { field, msg });
        if self.channels.is_empty() || self.channels[0] == 0 {
            return err("channels", "need at least one level with a positive width".into());
        }
        if self.channels.windows(2).any(|p| p[1] <= p[0]) {
            return err("channels", format!("must be strictly increasing, got {:?}", self.channels));
        }
        let f = 1usize << (self.levels() - 1);
        if self.h == 0 || self.w == 0 || !self.h.is_multiple_of(f) || !self.w.is_multiple_of(f) {
            return err("h", format!("{}x{} is not divisible by {f}", self.h, self.w));
        }
        let (bh, bw) = (self.h / f, self.w / f);
        if self.window_size == 0 || bh % self.window_size != 0 || bw % self.window_size != 0 {
            return err(
                "window_size",
                format!("{} does not tile the {bh}x{bw} bottleneck", self.window_size),
            );
        }
        if !self.alpha_init.is_finite() {
            return err("alpha_init", format!("must be finite, got {}", self.alpha_init));
        }
        Ok(())
    }
}

/// Feature maps of one frame, level `l` at `H / 2^l`.
#[derive(Debug, Clone, PartialEq)]
pub struct FeaturePyramid {
    pub levels: Vec<Tensor>,
}

/// Query, key and value projections, each `[C, C]`.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionWeights {
    pub q: Tensor,
    pub k: Tensor,
    pub v: Tensor,
}

/// Output of [`window_attention`] together with the per-window weights
/// `[N * nWin, ws * ws, ws * ws]`.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionOutput {
    pub output: Tensor,
    pub weights: Tensor,
}

/// Scaled dot-product self-attention inside non-overlapping
/// `window_size x window_size` windows of `x: [N, C, H, W]`, with a
/// residual connection.
pub fn window_attention(x: &Tensor, proj: &AttentionWeights, window_size: usize) -> Result<AttentionOutput> {
    let mut g = Graph::new();
    let xv = g.input(x.clone());
    let q = g.input(proj.q.clone());
    let k = g.input(proj.k.clone());
    let v = g.input(proj.v.clone());
    let (out, weights) = attention_graph(&mut g, xv, [q, k, v], window_size)?;
    Ok(AttentionOutput {
        output: g.value(out).clone(),
        weights: g.value(weights).clone(),
    })
}

fn attention_graph(g: &mut Graph, x: Var, [wq, wk, wv]: [Var; 3], ws: usize) -> Result<(Var, Var)> {
    let shape = g.shape(x).to_vec();
    if shape.len() != 4 {
        return Err(MgdError::Misaligned(format!("attention input must be [N, C, H, W], got {shape:?}")));
    }
    let (n, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
    let tokens = g.window_partition(x, ws)?;
    let b = g.shape(tokens)[0];
    let t = ws * ws;
    let flat = g.reshape(tokens, &[b * t, c])?;
    let project = |g: &mut Graph, wm: Var| -> Result<Var> {
        let p = g.matmul(flat, wm)?;
        Ok(g.reshape(p, &[b, t, c])?)
    };
    let q = project(g, wq)?;
    let k = project(g, wk)?;
    let v = project(g, wv)?;
    let kt = g.transpose_last2(k)?;
    let scores = g.batch_matmul(q, kt)?;
    let scores = g.scale(scores, 1.0 / (c as f64).sqrt());
    let weights = g.softmax(scores, 2)?;
    let mixed = g.batch_matmul(weights, v)?;
    let merged = g.window_merge(mixed, ws, n, h, w)?;
    Ok((g.add(x, merged)?, weights))
}

/// Coarse mask at every level: level 0 is the mask itself and each further
/// level is a 2x2 max-pool of the previous one. Odd sizes round up, a cell
/// covering the edge looks only at the pixels that exist.
pub fn mask_pyramid(coarse: &ChangeMask, levels: usize) -> Vec<ChangeMask> {
    let mut out = Vec::with_capacity(levels);
    let mut cur = coarse.clone();
    for l in 0..levels {
        if l > 0 {
            cur = pool2(&cur);
        }
        out.push(cur.clone());
    }
    out
}

fn pool2(m: &ChangeMask) -> ChangeMask {
    let (h, w) = (m.h().div_ceil(2), m.w().div_ceil(2));
    let mut out = ChangeMask::zeros(h, w);
    for y in 0..m.h() {
        for x in 0..m.w() {
            if m.get(y, x) {
                out.set(y / 2, x / 2, true);
            }
        }
    }
    out
}

/// `features ⊙ (1 + alpha · mask)` with the mask broadcast over channels and
/// batch items of `features: [N, C, H, W]`.
pub fn soft_guide(features: &Tensor, mask: &ChangeMask, alpha: f64) -> Result<Tensor> {
    let s = features.shape();
    if s.len() != 4 || s[2] != mask.h() || s[3] != mask.w() {
        return Err(MgdError::Misaligned(format!(
            "features {s:?} against a {}x{} mask",
            mask.h(),
            mask.w()
        )));
    }
    let hw = mask.h() * mask.w();
    let gain: Vec<f64> = mask.values().iter().map(|&m| 1.0 + f64::from(m) * alpha).collect();
    let mut out = features.clone();
    for (i, v) in out.data_mut().iter_mut().enumerate() {
        *v *= gain[i % hw];
    }
    Ok(out)
}

fn soft_guide_graph(g: &mut Graph, f: Var, mask: Var, alpha: Var) -> Result<Var> {
    let scaled = g.scale_by(mask, alpha)?;
    let gain = g.add_const(scaled, 1.0);
    Ok(g.mul_channels(f, gain)?)
}

#[derive(Debug, Clone)]
struct Stage {
    w: ParamId,
    b: ParamId,
}

/// The decoder network and its parameters.
#[derive(Debug, Clone)]
pub struct MaskGuidedDecoder {
    cfg: MgdConfig,
    store: ParamStore,
    encoder: Vec<[ParamId; 2]>,
    fuse: Stage,
    attn: [ParamId; 3],
    /// Upsampling stage producing level `l`, for `l < levels - 1`.
    up: Vec<Stage>,
    head: Stage,
    alphas: Vec<ParamId>,
}

/// Parameter leaves of one recorded forward pass.
struct Leaves {
    encoder: Vec<[Var; 2]>,
    fuse: [Var; 2],
    attn: [Var; 3],
    up: Vec<[Var; 2]>,
    head: [Var; 2],
    alphas: Vec<Var>,
}

fn he_uniform(rng: &mut ChaCha8Rng, shape: &[usize], fan_in: usize) -> Tensor {
    let bound = (6.0 / fan_in as f64).sqrt();
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.gen_range(-bound..bound)).collect();
    Tensor::new(shape.to_vec(), data).expect("shape and data agree")
}

impl MaskGuidedDecoder {
    pub fn new(cfg: MgdConfig) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.init_seed);
        let mut store = ParamStore::new();
        let ch = cfg.channels.clone();
        let last = ch.len() - 1;

        let mut encoder = Vec::with_capacity(ch.len());
        let mut cin = 3;
        for (l, &c) in ch.iter().enumerate() {
            let a = store.add(format!("enc{l}.conv1"), he_uniform(&mut rng, &[c, cin, 3, 3], cin * 9));
            let b = store.add(format!("enc{l}.conv2"), he_uniform(&mut rng, &[c, c, 3, 3], c * 9));
            encoder.push([a, b]);
            cin = c;
        }

        let cb = ch[last];
        let fuse = Stage {
            w: store.add("bottleneck.w", he_uniform(&mut rng, &[cb, 3 * cb, 3, 3], 3 * cb * 9)),
            b: store.add("bottleneck.b", Tensor::zeros(&[cb])),
        };
        let glorot = (3.0 / cb as f64).sqrt();
        let mut proj = |name: &str| {
            let data = (0..cb * cb).map(|_| rng.gen_range(-glorot..glorot)).collect();
            store.add(name, Tensor::new(vec![cb, cb], data).expect("square projection"))
        };
        let attn = [proj("attn.q"), proj("attn.k"), proj("attn.v")];

        let mut up = Vec::with_capacity(last);
        for l in 0..last {
            let cin = ch[l + 1] + 3 * ch[l];
            up.push(Stage {
                w: store.add(format!("up{l}.w"), he_uniform(&mut rng, &[ch[l], cin, 3, 3], cin * 9)),
                b: store.add(format!("up{l}.b"), Tensor::zeros(&[ch[l]])),
            });
        }
        let head = Stage {
            w: store.add("head.w", he_uniform(&mut rng, &[1, ch[0], 1, 1], ch[0])),
            b: store.add("head.b", Tensor::zeros(&[1])),
        };
        let alpha0 = if cfg.guidance { cfg.alpha_init } else { 0.0 };
        let alphas = (0..ch.len())
            .map(|l| store.add(format!("alpha{l}"), Tensor::scalar(alpha0)))
            .collect();
        Ok(Self {
            cfg,
            store,
            encoder,
            fuse,
            attn,
            up,
            head,
            alphas,
        })
    }

    pub fn config(&self) -> &MgdConfig {
        &self.cfg
    }

    pub fn params(&self) -> &ParamStore {
        &self.store
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    /// Guidance strength per decoder stage, indexed by level.
    pub fn alphas(&self) -> Vec<f64> {
        self.alphas.iter().map(|&id| self.store.value(id).item()).collect()
    }

    pub fn set_alphas(&mut self, values: &[f64]) -> Result<()> {
        if values.len() != self.alphas.len() || values.iter().any(|a| !a.is_finite()) {
            return Err(MgdError::Config {
                field: "alphas",
                msg: format!("need {} finite values, got {values:?}", self.alphas.len()),
            });
        }
        for (&id, &a) in self.alphas.iter().zip(values) {
            self.store.value_mut(id).data_mut()[0] = a;
        }
        Ok(())
    }

    /// Pins every guidance strength at zero for the rest of this model's life.
    pub fn disable_guidance(&mut self) {
        let zeros = vec![0.0; self.alphas.len()];
        self.set_alphas(&zeros).expect("zeros are valid alphas");
        self.cfg.guidance = false;
    }

    pub fn attention_weights(&self) -> AttentionWeights {
        let [q, k, v] = self.attn;
        AttentionWeights {
            q: self.store.value(q).clone(),
            k: self.store.value(k).clone(),
            v: self.store.value(v).clone(),
        }
    }

    fn leaves(&self, g: &mut Graph) -> Leaves {
        let s = &self.store;
        let stage = |g: &mut Graph, st: &Stage| [g.param(s, st.w), g.param(s, st.b)];
        Leaves {
            encoder: self.encoder.iter().map(|&[a, b]| [g.param(s, a), g.param(s, b)]).collect(),
            fuse: stage(g, &self.fuse),
            attn: self.attn.map(|id| g.param(s, id)),
            up: self.up.iter().map(|st| stage(g, st)).collect(),
            head: stage(g, &self.head),
            alphas: self.alphas.iter().map(|&id| g.param(s, id)).collect(),
        }
    }

    fn check_images(&self, x: &Tensor) -> Result<usize> {
        let s = x.shape();
        if s.len() != 4 || s[1] != 3 {
            return Err(MgdError::Misaligned(format!("images must be [N, 3, H, W], got {s:?}")));
        }
        if s[2] != self.cfg.h || s[3] != self.cfg.w {
            return Err(MgdError::Size {
                got_h: s[2],
                got_w: s[3],
                want_h: self.cfg.h,
                want_w: self.cfg.w,
            });
        }
        Ok(s[0])
    }

    fn encode_graph(&self, g: &mut Graph, leaves: &Leaves, x: Var) -> Result<Vec<Var>> {
        let mut levels = Vec::with_capacity(leaves.encoder.len());
        let mut h = x;
        for (l, &[a, b]) in leaves.encoder.iter().enumerate() {
            if l > 0 {
                h = g.max_pool2d(h, 2)?;
            }
            h = g.conv2d(h, a, 1, 1)?;
            h = g.relu(h);
            h = g.conv2d(h, b, 1, 1)?;
            h = g.relu(h);
            levels.push(h);
        }
        Ok(levels)
    }

    /// Runs the shared encoder once over `t1` and `t2` stacked on the batch
    /// axis, then splits the levels back apart.
    fn siamese_graph(&self, g: &mut Graph, leaves: &Leaves, t1: Var, t2: Var) -> Result<(Vec<Var>, Vec<Var>)> {
        let n = g.shape(t1)[0];
        let both = g.concat(&[t1, t2], 0)?;
        let levels = self.encode_graph(g, leaves, both)?;
        let mut p1 = Vec::with_capacity(levels.len());
        let mut p2 = Vec::with_capacity(levels.len());
        for f in levels {
            p1.push(g.slice(f, 0, 0, n)?);
            p2.push(g.slice(f, 0, n, 2 * n)?);
        }
        Ok((p1, p2))
    }

    /// Pre-sigmoid change logits `[N, 1, H, W]`. Without `masks` the
    /// guidance step is skipped entirely.
    fn decode_graph(&self, g: &mut Graph, leaves: &Leaves, p1: &[Var], p2: &[Var], masks: Option<&[Var]>) -> Result<Var> {
        let levels = self.cfg.levels();
        if p1.len() != levels || p2.len() != levels || masks.is_some_and(|m| m.len() != levels) {
            return Err(MgdError::Misaligned(format!("expected {levels} levels per pyramid")));
        }
        let fuse = |g: &mut Graph, a: Var, b: Var| -> Result<Var> {
            let d = g.sub(a, b)?;
            let d = g.abs(d);
            Ok(g.concat(&[a, b, d], 1)?)
        };
        let guide = |g: &mut Graph, x: Var, l: usize| -> Result<Var> {
            match masks {
                Some(m) => soft_guide_graph(g, x, m[l], leaves.alphas[l]),
                None => Ok(x),
            }
        };

        let last = levels - 1;
        let x = fuse(g, p1[last], p2[last])?;
        let x = g.conv2d(x, leaves.fuse[0], 1, 1)?;
        let x = g.add_bias(x, leaves.fuse[1], 1)?;
        let x = g.relu(x);
        let (x, _) = attention_graph(g, x, leaves.attn, self.cfg.window_size)?;
        let mut d = guide(g, x, last)?;
        for l in (0..last).rev() {
            let u = g.upsample_nearest(d, 2)?;
            let skip = fuse(g, p1[l], p2[l])?;
            let x = g.concat(&[u, skip], 1)?;
            let [w, b] = leaves.up[l];
            let x = g.conv2d(x, w, 1, 1)?;
            let x = g.add_bias(x, b, 1)?;
            let x = g.relu(x);
            d = guide(g, x, l)?;
        }
        let z = g.conv2d(d, leaves.head[0], 1, 0)?;
        Ok(g.add_bias(z, leaves.head[1], 1)?)
    }

    /// Mask pyramid of every batch item stacked into `[N, 1, H_l, W_l]`.
    fn mask_inputs(&self, g: &mut Graph, coarse: &[ChangeMask]) -> Result<Vec<Var>> {
        for m in coarse {
            if m.h() != self.cfg.h || m.w() != self.cfg.w {
                return Err(MgdError::Size {
                    got_h: m.h(),
                    got_w: m.w(),
                    want_h: self.cfg.h,
                    want_w: self.cfg.w,
                });
            }
        }
        let levels = self.cfg.levels();
        let pyramids: Vec<_> = coarse.iter().map(|m| mask_pyramid(m, levels)).collect();
        (0..levels)
            .map(|l| {
                let (h, w) = (self.cfg.h >> l, self.cfg.w >> l);
                let data: Vec<f64> = pyramids.iter().flat_map(|p| p[l].to_f64()).collect();
                Ok(g.input(Tensor::new(vec![coarse.len(), 1, h, w], data)?))
            })
            .collect()
    }

    /// Records a full forward pass and returns the logits. `coarse = None`
    /// runs the unguided network.
    pub(crate) fn forward_graph(
        &self,
        g: &mut Graph,
        t1: &Tensor,
        t2: &Tensor,
        coarse: Option<&[ChangeMask]>,
    ) -> Result<Var> {
        let n = self.check_images(t1)?;
        if self.check_images(t2)? != n || coarse.is_some_and(|c| c.len() != n) {
            return Err(MgdError::Misaligned("batch sizes of t1, t2 and masks differ".into()));
        }
        let leaves = self.leaves(g);
        let masks = coarse.map(|c| self.mask_inputs(g, c)).transpose()?;
        let x1 = g.input(t1.clone());
        let x2 = g.input(t2.clone());
        let (p1, p2) = self.siamese_graph(g, &leaves, x1, x2)?;
        self.decode_graph(g, &leaves, &p1, &p2, masks.as_deref())
    }

    /// Feature pyramid of a batch of images `[N, 3, H, W]`.
    pub fn encode(&self, image: &Tensor) -> Result<FeaturePyramid> {
        self.check_images(image)?;
        let mut g = Graph::new();
        let leaves = self.leaves(&mut g);
        let x = g.input(image.clone());
        let levels = self.encode_graph(&mut g, &leaves, x)?;
        Ok(FeaturePyramid {
            levels: levels.into_iter().map(|v| g.value(v).clone()).collect(),
        })
    }

    /// Change probabilities `[N, 1, H, W]` from two encoded pyramids and the
    /// per-level masks (each `[N, 1, H_l, W_l]`).
    pub fn decode(&self, pyr_t1: &FeaturePyramid, pyr_t2: &FeaturePyramid, masks: &[Tensor]) -> Result<Tensor> {
        self.decode_impl(pyr_t1, pyr_t2, Some(masks))
    }

    /// The same network with the guidance step removed.
    pub fn decode_unguided(&self, pyr_t1: &FeaturePyramid, pyr_t2: &FeaturePyramid) -> Result<Tensor> {
        self.decode_impl(pyr_t1, pyr_t2, None)
    }

    fn decode_impl(&self, pyr_t1: &FeaturePyramid, pyr_t2: &FeaturePyramid, masks: Option<&[Tensor]>) -> Result<Tensor> {
        let levels = self.cfg.levels();
        if pyr_t1.levels.len() != levels || pyr_t2.levels.len() != levels {
            return Err(MgdError::Misaligned(format!("expected {levels} pyramid levels")));
        }
        for (l, (a, b)) in pyr_t1.levels.iter().zip(&pyr_t2.levels).enumerate() {
            let want = [self.cfg.channels[l], self.cfg.h >> l, self.cfg.w >> l];
            if a.shape() != b.shape() || a.shape().len() != 4 || a.shape()[1..] != want {
                return Err(MgdError::Misaligned(format!(
                    "level {l}: {:?} and {:?}, expected [N, {}, {}, {}]",
                    a.shape(),
                    b.shape(),
                    want[0],
                    want[1],
                    want[2]
                )));
            }
            if let Some(m) = masks.and_then(|m| m.get(l)) {
                if m.shape() != [a.shape()[0], 1, want[1], want[2]] {
                    return Err(MgdError::Misaligned(format!("mask level {l} has shape {:?}", m.shape())));
                }
            }
        }
        let mut g = Graph::new();
        let leaves = self.leaves(&mut g);
        let p1: Vec<Var> = pyr_t1.levels.iter().map(|t| g.input(t.clone())).collect();
        let p2: Vec<Var> = pyr_t2.levels.iter().map(|t| g.input(t.clone())).collect();
        let m: Option<Vec<Var>> = masks.map(|ms| ms.iter().map(|t| g.input(t.clone())).collect());
        let z = self.decode_graph(&mut g, &leaves, &p1, &p2, m.as_deref())?;
        let p = g.sigmoid(z);
        Ok(g.value(p).clone())
    }

    /// Change probabilities `[N, 1, H, W]` for a batch of frame pairs and
    /// their coarse masks.
    pub fn forward(&self, t1: &Tensor, t2: &Tensor, coarse: &[ChangeMask]) -> Result<Tensor> {
        let mut g = Graph::new();
        let z = self.forward_graph(&mut g, t1, t2, Some(coarse))?;
        let p = g.sigmoid(z);
        Ok(g.value(p).clone())
    }

    /// Change probabilities of one scene given as planar `[3, H, W]` frames.
    pub fn probability_map(&self, t1: &[f64], t2: &[f64], coarse: &ChangeMask) -> Result<Vec<f64>> {
        let shape = vec![1, 3, self.cfg.h, self.cfg.w];
        let a = Tensor::new(shape.clone(), t1.to_vec())?;
        let b = Tensor::new(shape, t2.to_vec())?;
        Ok(self.forward(&a, &b, std::slice::from_ref(coarse))?.into_data())
    }

    pub fn to_checkpoint(&self) -> Vec<u8> {
        let meta = json!({ "kind": CHECKPOINT_KIND, "mgd": self.cfg });
        encode_checkpoint(&self.store, &meta)
    }

    pub fn from_checkpoint(bytes: &[u8]) -> Result<Self> {
        let (meta, tensors) = decode_checkpoint(bytes)?;
        if meta["kind"] != CHECKPOINT_KIND {
            return Err(CheckpointError::Header(format!("expected a {CHECKPOINT_KIND} checkpoint, found {}", meta["kind"])).into());
        }
        let cfg: MgdConfig =
            serde_json::from_value(meta["mgd"].clone()).map_err(|e| CheckpointError::Header(format!("mgd: {e}")))?;
        let mut model = Self::new(cfg)?;
        crate::tensor::load_values(&mut model.store, tensors)?;
        Ok(model)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_checkpoint()).map_err(|source| CheckpointError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|source| CheckpointError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_checkpoint(&bytes)
    }
}

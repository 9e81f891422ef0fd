//! Shared patch-token transformer for images, frames and clips.
//!
//! Images at `image_extent` and frames at `frame_extent` have separate patch
//! projections but must produce the same token grid, so the positional
//! embedding and every transformer block are shared. A clip of `T > 1`
//! frames additionally gets a learned per-frame temporal embedding;
//! attention never crosses frame boundaries.

mod export;

use rand::Rng;

use crate::image::{Image, Video};
use crate::params::{Bound, Init, ParamSet};
use crate::rng;
use crate::tensor::{Float, Result as TResult, Tape, TensorError, Var};

pub use export::{export_attention, AttentionExport};

const LN_EPS: f64 = 1e-5;

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum EncoderError {
    #[error("encoder configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("I/O: {0}")]
    Io(String),
}

pub type Result<T> = std::result::Result<T, EncoderError>;

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderConfig {
    pub image_extent: (usize, usize),
    pub frame_extent: (usize, usize),
    pub image_patch: usize,
    pub video_patch: usize,
    pub d: usize,
    pub depth: usize,
    pub heads: usize,
    pub frames: usize,
    pub mlp_ratio: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            image_extent: (32, 16),
            frame_extent: (16, 8),
            image_patch: 8,
            video_patch: 4,
            d: 64,
            depth: 2,
            heads: 4,
            frames: 4,
            mlp_ratio: 2,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        let err = |m: String| Err(EncoderError::Config(m));
        for (name, (h, w), p) in [
            ("image", self.image_extent, self.image_patch),
            ("frame", self.frame_extent, self.video_patch),
        ] {
            if p == 0 || h == 0 || w == 0 {
                return err(format!("{name} extent {h}x{w} and patch {p} must be positive"));
            }
            if h % p != 0 || w % p != 0 {
                return err(format!("{name} extent {h}x{w} not divisible by patch {p}"));
            }
        }
        if self.image_grid() != self.frame_grid() {
            return err(format!(
                "image grid {:?} and frame grid {:?} differ; the positional embedding is shared",
                self.image_grid(),
                self.frame_grid()
            ));
        }
        if self.d == 0 || self.heads == 0 || self.d % self.heads != 0 {
            return err(format!("width {} not divisible by {} heads", self.d, self.heads));
        }
        if self.frames == 0 {
            return err("frames per clip must be at least 1".into());
        }
        if self.mlp_ratio == 0 {
            return err("mlp_ratio must be positive".into());
        }
        Ok(())
    }

    pub fn image_grid(&self) -> (usize, usize) {
        (self.image_extent.0 / self.image_patch.max(1), self.image_extent.1 / self.image_patch.max(1))
    }

    pub fn frame_grid(&self) -> (usize, usize) {
        (self.frame_extent.0 / self.video_patch.max(1), self.frame_extent.1 / self.video_patch.max(1))
    }

    /// Tokens per image or frame (`L^i = L^v`).
    pub fn tokens(&self) -> usize {
        let (a, b) = self.image_grid();
        a * b
    }

    /// Which patch path serves an input of this extent.
    fn path_for(&self, extent: (usize, usize)) -> Result<(&'static str, usize)> {
        if extent == self.image_extent {
            Ok(("image", self.image_patch))
        } else if extent == self.frame_extent {
            Ok(("frame", self.video_patch))
        } else {
            Err(EncoderError::Config(format!(
                "input extent {}x{} matches neither image {:?} nor frame {:?}",
                extent.0, extent.1, self.image_extent, self.frame_extent
            )))
        }
    }

    /// Fresh parameters under `prefix` (e.g. `"encoder."`).
    pub fn init<T: Float>(&self, prefix: &str, seed: u64) -> ParamSet<T> {
        let mut r = rng::stream(&[0xe7c0, seed]);
        let mut init = Init { rng: &mut r };
        let d = self.d;
        let hidden = d * self.mlp_ratio;
        let n = |s: &str| format!("{prefix}{s}");
        let mut p = ParamSet::new();
        for (path, patch) in [("image", self.image_patch), ("frame", self.video_patch)] {
            p.insert(n(&format!("patch_{path}.weight")), init.linear(patch * patch * 3, d));
            p.insert(n(&format!("patch_{path}.bias")), init.zeros(vec![d]));
        }
        p.insert(n("pos"), init.normal(vec![self.tokens(), d], 0.02));
        p.insert(n("temporal"), init.normal(vec![self.frames, d], 0.02));
        p.insert(n("mask_token"), init.normal(vec![d], 0.02));
        for b in 0..self.depth {
            let bn = |s: &str| n(&format!("block{b}.{s}"));
            for ln in ["ln1", "ln2"] {
                p.insert(bn(&format!("{ln}.gain")), init.ones(vec![d]));
                p.insert(bn(&format!("{ln}.bias")), init.zeros(vec![d]));
            }
            for w in ["wq", "wk", "wv", "wo"] {
                p.insert(bn(&format!("attn.{w}")), init.linear(d, d));
                if w != "wk" {
                    p.insert(bn(&format!("attn.b{}", &w[1..])), init.zeros(vec![d]));
                }
            }
            p.insert(bn("mlp.w1"), init.linear(d, hidden));
            p.insert(bn("mlp.b1"), init.zeros(vec![hidden]));
            p.insert(bn("mlp.w2"), init.linear(hidden, d));
            p.insert(bn("mlp.b2"), init.zeros(vec![d]));
        }
        p
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TokenModality {
    Image,
    Video,
    Frame,
    LseView,
}

/// Encoded tokens of `items` inputs, stored as `[items · tokens_per_item × d]`.
#[derive(Debug, Clone)]
pub struct TokenBatch {
    pub tokens: Var,
    pub modality: TokenModality,
    pub items: usize,
    pub tokens_per_item: usize,
    pub frames: usize,
    /// Index of the source clip per item (alignment targets); empty for
    /// images and LSE views.
    pub source_ids: Vec<usize>,
}

/// Flattens `p × p` patches in row-major grid order; each patch is laid out
/// as `(py, px, channel)`.
pub fn patchify<T: Float>(img: &Image, patch: usize) -> Vec<T> {
    let (gh, gw) = (img.height / patch, img.width / patch);
    let mut out = Vec::with_capacity(gh * gw * patch * patch * 3);
    for gy in 0..gh {
        for gx in 0..gw {
            for py in 0..patch {
                for px in 0..patch {
                    for c in 0..3 {
                        out.push(T::lit(f64::from(img.get(gy * patch + py, gx * patch + px, c))));
                    }
                }
            }
        }
    }
    out
}

/// Stateless view of an encoder's parameters under a name prefix.
#[derive(Debug, Clone)]
pub struct Encoder {
    pub config: EncoderConfig,
    pub prefix: String,
}

/// Forward result including per-layer attention nodes.
#[derive(Debug, Clone)]
pub struct Trace {
    pub out: Var,
    pub attention: Vec<Var>,
}

impl Encoder {
    pub fn new(config: EncoderConfig, prefix: impl Into<String>) -> Self {
        Self { config, prefix: prefix.into() }
    }

    fn p(&self, b: &Bound, name: &str) -> Var {
        b.var(&format!("{}{name}", self.prefix))
    }

    /// Projects frames of one extent to tokens and adds the positional
    /// embedding. `mask` lists global token rows to replace by the mask
    /// embedding before positions are added.
    pub fn patch_embed<T: Float>(
        &self,
        tape: &mut Tape<T>,
        b: &Bound,
        frames: &[&Image],
        mask: &[usize],
    ) -> Result<Var> {
        let first = frames.first().ok_or_else(|| EncoderError::Config("empty input batch".into()))?;
        let extent = first.extent();
        let (path, patch) = self.config.path_for(extent)?;
        if let Some(bad) = frames.iter().find(|f| f.extent() != extent) {
            return Err(EncoderError::Config(format!(
                "mixed extents in one batch: {:?} and {:?}",
                extent,
                bad.extent()
            )));
        }
        let l = self.config.tokens();
        let cols = patch * patch * 3;
        let mut pixels = Vec::with_capacity(frames.len() * l * cols);
        for f in frames {
            pixels.extend(patchify::<T>(f, patch));
        }
        let x = tape.constant(vec![frames.len() * l, cols], pixels)?;
        let w = self.p(b, &format!("patch_{path}.weight"));
        let bias = self.p(b, &format!("patch_{path}.bias"));
        let mut t = tape.matmul(x, w)?;
        t = tape.add_bias(t, bias)?;
        if !mask.is_empty() {
            t = tape.mask_rows(t, self.p(b, "mask_token"), mask.to_vec())?;
        }
        let pos_index = (0..frames.len() * l).map(|r| r % l).collect();
        Ok(tape.add_rows(t, self.p(b, "pos"), pos_index)?)
    }

    fn linear<T: Float>(&self, tape: &mut Tape<T>, b: &Bound, x: Var, w: &str, bias: &str) -> TResult<Var> {
        let y = tape.matmul(x, self.p(b, w))?;
        tape.add_bias(y, self.p(b, bias))
    }

    /// Runs the block stack over `[G·n × d]` rows in groups of `n` tokens.
    pub fn blocks<T: Float>(&self, tape: &mut Tape<T>, b: &Bound, mut x: Var, n: usize) -> Result<Trace> {
        let eps = T::lit(LN_EPS);
        let mut attention = Vec::with_capacity(self.config.depth);
        for i in 0..self.config.depth {
            let k = |s: &str| format!("block{i}.{s}");
            let h = tape.layer_norm(x, self.p(b, &k("ln1.gain")), self.p(b, &k("ln1.bias")), eps)?;
            let q = self.linear(tape, b, h, &k("attn.wq"), &k("attn.bq"))?;
            let kk = tape.matmul(h, self.p(b, &k("attn.wk")))?;
            let v = self.linear(tape, b, h, &k("attn.wv"), &k("attn.bv"))?;
            let a = tape.attention(q, kk, v, self.config.heads, n, n)?;
            attention.push(a);
            let o = self.linear(tape, b, a, &k("attn.wo"), &k("attn.bo"))?;
            x = tape.add(x, o)?;
            let h = tape.layer_norm(x, self.p(b, &k("ln2.gain")), self.p(b, &k("ln2.bias")), eps)?;
            let m = self.linear(tape, b, h, &k("mlp.w1"), &k("mlp.b1"))?;
            let m = tape.gelu(m);
            let m = self.linear(tape, b, m, &k("mlp.w2"), &k("mlp.b2"))?;
            x = tape.add(x, m)?;
        }
        Ok(Trace { out: x, attention })
    }

    /// Encodes images (or frames, or LSE crops) to `[B·L × d]`.
    pub fn encode_images<T: Float>(
        &self,
        tape: &mut Tape<T>,
        b: &Bound,
        images: &[&Image],
        mask: &[usize],
    ) -> Result<Trace> {
        let x = self.patch_embed(tape, b, images, mask)?;
        self.blocks(tape, b, x, self.config.tokens())
    }

    /// Encodes clips to `[B·T·L × d]`, frame-major within each clip.
    pub fn encode_videos<T: Float>(
        &self,
        tape: &mut Tape<T>,
        b: &Bound,
        videos: &[&Video],
        mask: &[usize],
    ) -> Result<Trace> {
        let t = videos.first().map_or(0, |v| v.len());
        if t == 0 || videos.iter().any(|v| v.len() != t) {
            return Err(EncoderError::Config("clips in a batch must share a positive frame count".into()));
        }
        if t > self.config.frames {
            return Err(EncoderError::Config(format!(
                "clip has {t} frames, temporal embedding covers {}",
                self.config.frames
            )));
        }
        let frames: Vec<&Image> = videos.iter().flat_map(|v| v.frames.iter()).collect();
        let mut x = self.patch_embed(tape, b, &frames, mask)?;
        let l = self.config.tokens();
        if t > 1 {
            let index = (0..frames.len() * l).map(|r| (r / l) % t).collect();
            x = tape.add_rows(x, self.p(b, "temporal"), index)?;
        }
        self.blocks(tape, b, x, l)
    }

    pub fn image_batch<T: Float>(
        &self,
        tape: &mut Tape<T>,
        b: &Bound,
        images: &[&Image],
        modality: TokenModality,
        source_ids: Vec<usize>,
        mask: &[usize],
    ) -> Result<TokenBatch> {
        let tr = self.encode_images(tape, b, images, mask)?;
        Ok(TokenBatch {
            tokens: tr.out,
            modality,
            items: images.len(),
            tokens_per_item: self.config.tokens(),
            frames: 1,
            source_ids,
        })
    }

    pub fn video_batch<T: Float>(
        &self,
        tape: &mut Tape<T>,
        b: &Bound,
        videos: &[&Video],
        source_ids: Vec<usize>,
        mask: &[usize],
    ) -> Result<TokenBatch> {
        let tr = self.encode_videos(tape, b, videos, mask)?;
        let t = videos[0].len();
        Ok(TokenBatch {
            tokens: tr.out,
            modality: TokenModality::Video,
            items: videos.len(),
            tokens_per_item: t * self.config.tokens(),
            frames: t,
            source_ids,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FrameRule {
    Random,
    Middle,
}

/// Index of the frame picked from a `t`-frame clip.
pub fn sample_frame_index(t: usize, rule: FrameRule, seed: u64) -> usize {
    assert!(t >= 1, "clip has no frames");
    match rule {
        FrameRule::Middle => t / 2,
        FrameRule::Random => rng::stream(&[0xf4a3e, seed]).gen_range(0..t),
    }
}

pub fn sample_frame(video: &Video, rule: FrameRule, seed: u64) -> &Image {
    &video.frames[sample_frame_index(video.len(), rule, seed)]
}

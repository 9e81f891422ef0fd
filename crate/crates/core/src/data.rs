//! Synthetic datasets and batch assembly.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;

use crate::encoder::{sample_frame_index, FrameRule};
use crate::image::{Image, Mask, Video};
use crate::io::container::{Container, ContainerError, Payload};
use crate::lse::{
    generate_scene, lse_extract, AreaSpec, KeypointSet, LseError, Modality, OraclePredictor, OracleSegmenter,
    SceneSpec, KEYPOINTS, PARTS,
};
use crate::rng;
use crate::ufla::{LseView, PretrainBatch, ViewSource};

#[derive(Debug, thiserror::Error)]
pub enum DataError {
    #[error(transparent)]
    Container(#[from] ContainerError),
    #[error(transparent)]
    Lse(#[from] LseError),
    #[error("dataset: {0}")]
    Invalid(String),
}

pub type Result<T> = std::result::Result<T, DataError>;

/// Local semantic extraction settings used during pre-training.
#[derive(Debug, Clone, PartialEq)]
pub struct LseConfig {
    pub keypoints: usize,
    /// Number of areas, taken in order from head, torso, legs.
    pub areas: usize,
    pub tau: [f64; PARTS],
    pub extent: (usize, usize),
    pub sigma: f64,
    pub score_noise: f64,
}

impl Default for LseConfig {
    fn default() -> Self {
        Self { keypoints: KEYPOINTS, areas: PARTS, tau: [0.5; PARTS], extent: (16, 8), sigma: 0.5, score_noise: 0.2 }
    }
}

impl LseConfig {
    pub fn area_specs(&self) -> Vec<AreaSpec> {
        (0..self.areas.min(PARTS)).map(|p| AreaSpec::part(p, self.tau[p] as f32)).collect()
    }

    pub fn validate(&self) -> std::result::Result<(), String> {
        if self.keypoints != KEYPOINTS {
            return Err(format!("the synthetic layout has {KEYPOINTS} keypoints, config asks for {}", self.keypoints));
        }
        if self.areas > PARTS {
            return Err(format!("at most {PARTS} areas are defined, config asks for {}", self.areas));
        }
        if self.tau.iter().any(|t| !(0.0..=1.0).contains(t)) {
            return Err("area thresholds must lie in [0, 1]".into());
        }
        if self.extent.0 == 0 || self.extent.1 == 0 {
            return Err("LSE extent must be positive".into());
        }
        if !(self.sigma >= 0.0 && self.score_noise >= 0.0) {
            return Err("keypoint noise must be non-negative".into());
        }
        Ok(())
    }
}

/// One recorded clip: a video, a still image of the same scene, and their
/// ground-truth keypoints and part masks.
#[derive(Debug, Clone, PartialEq)]
pub struct Clip {
    pub identity: u32,
    pub index: u32,
    pub video: Video,
    pub video_keypoints: Vec<KeypointSet>,
    pub video_masks: Vec<Vec<Mask>>,
    pub image: Image,
    pub image_keypoints: KeypointSet,
    pub image_masks: Vec<Mask>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub seed: u64,
    pub identities: u32,
    pub frames: usize,
    pub clips: Vec<Clip>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GenSpec {
    pub seed: u64,
    pub identities: u32,
    pub clips_per_id: u32,
    pub frames: usize,
    /// Index of the first clip per identity; held-out sets use a disjoint range.
    pub clip_offset: u32,
    pub image_extent: (usize, usize),
    pub frame_extent: (usize, usize),
}

impl Default for GenSpec {
    fn default() -> Self {
        Self { seed: 0, identities: 16, clips_per_id: 8, frames: 4, clip_offset: 0, image_extent: (32, 16), frame_extent: (16, 8) }
    }
}

pub fn generate_dataset(g: &GenSpec) -> Dataset {
    let mut clips = Vec::with_capacity((g.identities * g.clips_per_id) as usize);
    for identity in 0..g.identities {
        for c in 0..g.clips_per_id {
            let index = g.clip_offset + c;
            let base = SceneSpec { identity, seed: g.seed, clip: index, height: 0, width: 0, frames: g.frames };
            let v = generate_scene(
                &SceneSpec { height: g.frame_extent.0, width: g.frame_extent.1, ..base },
                Modality::Video,
            );
            let i = generate_scene(
                &SceneSpec { height: g.image_extent.0, width: g.image_extent.1, ..base },
                Modality::Image,
            );
            clips.push(Clip {
                identity,
                index,
                video: Video { frames: v.frames },
                video_keypoints: v.keypoints,
                video_masks: v.part_masks.into_iter().map(|m| m.to_vec()).collect(),
                image: i.frames.into_iter().next().expect("one frame"),
                image_keypoints: i.keypoints.into_iter().next().expect("one keypoint set"),
                image_masks: i.part_masks[0].to_vec(),
            });
        }
    }
    Dataset { seed: g.seed, identities: g.identities, frames: g.frames.max(1), clips }
}

fn keypoint_payload(sets: &[KeypointSet]) -> Vec<f32> {
    sets.iter()
        .flat_map(|k| k.points.iter().zip(&k.scores).flat_map(|(p, &s)| [p[0], p[1], s]))
        .collect()
}

fn keypoints_from(data: &[f32], n: usize) -> Vec<KeypointSet> {
    data.chunks(n * 3)
        .map(|c| KeypointSet {
            points: c.chunks(3).map(|r| [r[0], r[1]]).collect(),
            scores: c.chunks(3).map(|r| r[2]).collect(),
        })
        .collect()
}

fn mask_payload<'a>(masks: impl Iterator<Item = &'a Mask>) -> Vec<u8> {
    masks.flat_map(|m| m.data.iter().copied()).collect()
}

fn masks_from(data: &[u8], h: usize, w: usize) -> Vec<Mask> {
    data.chunks(h * w).map(|c| Mask { height: h, width: w, data: c.to_vec() }).collect()
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.clips.len()
    }

    pub fn is_empty(&self) -> bool {
        self.clips.is_empty()
    }

    /// Clip indices grouped by identity, in clip order.
    pub fn by_identity(&self) -> BTreeMap<u32, Vec<usize>> {
        let mut m: BTreeMap<u32, Vec<usize>> = BTreeMap::new();
        for (i, c) in self.clips.iter().enumerate() {
            m.entry(c.identity).or_default().push(i);
        }
        m
    }

    pub fn to_container(&self) -> Container {
        let mut c = Container::new();
        c.put("meta.clips", vec![1], Payload::U32(vec![self.clips.len() as u32]));
        c.put("meta.identities", vec![1], Payload::U32(vec![self.identities]));
        c.put("meta.frames", vec![1], Payload::U32(vec![self.frames as u32]));
        c.put("meta.seed", vec![1], Payload::I64(vec![self.seed as i64]));
        for (i, clip) in self.clips.iter().enumerate() {
            let p = |s: &str| format!("clip.{i:06}.{s}");
            let t = clip.video.len();
            let (fh, fw) = clip.video.extent();
            let (ih, iw) = clip.image.extent();
            let bytes: Vec<u8> = clip.video.frames.iter().flat_map(|f| f.to_bytes()).collect();
            c.put(p("video"), vec![t, fh, fw, 3], Payload::U8(bytes));
            c.put(p("video_keypoints"), vec![t, KEYPOINTS, 3], Payload::F32(keypoint_payload(&clip.video_keypoints)));
            c.put(p("video_masks"), vec![t, PARTS, fh, fw], Payload::U8(mask_payload(clip.video_masks.iter().flatten())));
            c.put(p("image"), vec![ih, iw, 3], Payload::U8(clip.image.to_bytes()));
            c.put(p("image_keypoints"), vec![KEYPOINTS, 3], Payload::F32(keypoint_payload(std::slice::from_ref(&clip.image_keypoints))));
            c.put(p("image_masks"), vec![PARTS, ih, iw], Payload::U8(mask_payload(clip.image_masks.iter())));
            c.put(p("label"), vec![2], Payload::U32(vec![clip.identity, clip.index]));
        }
        c
    }

    pub fn from_container(c: &Container) -> Result<Self> {
        let n = c.u32s("meta.clips")?[0] as usize;
        let identities = c.u32s("meta.identities")?[0];
        let frames = c.u32s("meta.frames")?[0] as usize;
        let seed = c.i64s("meta.seed")?[0] as u64;
        let bad = |m: String| DataError::Invalid(m);
        let mut clips = Vec::with_capacity(n);
        for i in 0..n {
            let p = |s: &str| format!("clip.{i:06}.{s}");
            let (vs, vb) = c.bytes(&p("video"))?;
            if vs.len() != 4 || vs[3] != 3 {
                return Err(bad(format!("clip {i}: video shape {vs:?}")));
            }
            let (t, fh, fw) = (vs[0], vs[1], vs[2]);
            let video = Video {
                frames: vb.chunks(fh * fw * 3).map(|b| Image::from_bytes(fh, fw, b)).collect(),
            };
            let (ks, kd) = c.floats32(&p("video_keypoints"))?;
            if ks != [t, KEYPOINTS, 3] {
                return Err(bad(format!("clip {i}: keypoint shape {ks:?}")));
            }
            let (ms, md) = c.bytes(&p("video_masks"))?;
            if ms != [t, PARTS, fh, fw] {
                return Err(bad(format!("clip {i}: mask shape {ms:?}")));
            }
            let flat = masks_from(md, fh, fw);
            let (is, ib) = c.bytes(&p("image"))?;
            if is.len() != 3 || is[2] != 3 {
                return Err(bad(format!("clip {i}: image shape {is:?}")));
            }
            let (ih, iw) = (is[0], is[1]);
            let (iks, ikd) = c.floats32(&p("image_keypoints"))?;
            if iks != [KEYPOINTS, 3] {
                return Err(bad(format!("clip {i}: image keypoint shape {iks:?}")));
            }
            let (ims, imd) = c.bytes(&p("image_masks"))?;
            if ims != [PARTS, ih, iw] {
                return Err(bad(format!("clip {i}: image mask shape {ims:?}")));
            }
            let label = c.u32s(&p("label"))?;
            if label.len() != 2 {
                return Err(bad(format!("clip {i}: label needs identity and clip index")));
            }
            clips.push(Clip {
                identity: label[0],
                index: label[1],
                video,
                video_keypoints: keypoints_from(kd, KEYPOINTS),
                video_masks: flat.chunks(PARTS).map(|m| m.to_vec()).collect(),
                image: Image::from_bytes(ih, iw, ib),
                image_keypoints: keypoints_from(ikd, KEYPOINTS).remove(0),
                image_masks: masks_from(imd, ih, iw),
            });
        }
        Ok(Self { seed, identities, frames, clips })
    }
}

/// LSE crops of one image, using the oracle predictor and segmenter.
pub fn lse_crops(
    image: &Image,
    truth: &KeypointSet,
    masks: &[Mask],
    cfg: &LseConfig,
    image_id: usize,
    seed: u64,
) -> Result<Vec<Image>> {
    let areas = cfg.area_specs();
    if areas.is_empty() {
        return Ok(Vec::new());
    }
    let predictor = OraclePredictor {
        truth: truth.clone(),
        sigma: cfg.sigma as f32,
        score_noise: cfg.score_noise as f32,
        seed,
    };
    let segmenter = OracleSegmenter::new(masks.to_vec());
    let out = lse_extract(image, image_id, &predictor, &segmenter, &areas, cfg.keypoints, cfg.extent)?;
    Ok(out.features.into_iter().map(|f| f.crop).collect())
}

/// Indices and student-only views of one pre-training batch.
#[derive(Debug, Clone)]
pub struct SampledBatch {
    pub videos: Vec<usize>,
    pub frames: Vec<usize>,
    pub images: Vec<usize>,
    pub lse: Vec<LseView>,
}

impl SampledBatch {
    pub fn view<'a>(&self, ds: &'a Dataset) -> PretrainBatch<'a> {
        PretrainBatch {
            videos: self.videos.iter().map(|&i| &ds.clips[i].video).collect(),
            video_ids: self.videos.clone(),
            frames: self.videos.iter().zip(&self.frames).map(|(&i, &t)| &ds.clips[i].video.frames[t]).collect(),
            images: self.images.iter().map(|&i| &ds.clips[i].image).collect(),
            lse: self.lse.clone(),
        }
    }
}

/// Draws distinct clips for the video and image slots, samples one frame
/// per clip and extracts LSE views of frames and images.
pub fn sample_pretrain_batch(
    ds: &Dataset,
    videos: usize,
    images: usize,
    lse: &LseConfig,
    seed: u64,
    step: u64,
) -> Result<SampledBatch> {
    if ds.len() < videos.max(images) || videos < 2 || images < 1 {
        return Err(DataError::Invalid(format!(
            "cannot draw {videos} videos and {images} images from {} clips",
            ds.len()
        )));
    }
    let mut r = rng::stream(&[0xba7c, seed, step]);
    let mut order: Vec<usize> = (0..ds.len()).collect();
    order.shuffle(&mut r);
    let vids: Vec<usize> = order[..videos].to_vec();
    order.shuffle(&mut r);
    let imgs: Vec<usize> = order[..images].to_vec();
    let frames: Vec<usize> = vids
        .iter()
        .map(|&i| sample_frame_index(ds.clips[i].video.len(), FrameRule::Random, rng::derive_seed(&[seed, step, i as u64])))
        .collect();
    let mut views = Vec::new();
    for (j, (&i, &t)) in vids.iter().zip(&frames).enumerate() {
        let c = &ds.clips[i];
        let s = rng::derive_seed(&[seed, step, 1, i as u64]);
        for crop in lse_crops(&c.video.frames[t], &c.video_keypoints[t], &c.video_masks[t], lse, i, s)? {
            views.push(LseView { source: ViewSource::Video(j), crop });
        }
    }
    for (j, &i) in imgs.iter().enumerate() {
        let c = &ds.clips[i];
        let s = rng::derive_seed(&[seed, step, 2, i as u64]);
        for crop in lse_crops(&c.image, &c.image_keypoints, &c.image_masks, lse, i, s)? {
            views.push(LseView { source: ViewSource::Image(j), crop });
        }
    }
    Ok(SampledBatch { videos: vids, frames, images: imgs, lse: views })
}

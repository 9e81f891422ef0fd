//! Local semantic extraction: keypoints become per-area prompts, prompts
//! become masks, masks become crops.

mod keyfile;
pub mod scene;

use std::fmt;

use rand_distr::{Distribution, Normal};

use crate::image::{Image, Mask};
use crate::rng;

pub use keyfile::{read_keypoint_file, write_keypoint_file, TablePredictor};
pub use scene::{generate_scene, Modality, SceneSpec, SyntheticScene};

/// Number of keypoints in the default layout: left, center, right of each part.
pub const KEYPOINTS: usize = 9;
/// Head, torso, legs.
pub const PARTS: usize = 3;
pub const PART_NAMES: [&str; PARTS] = ["head", "torso", "legs"];

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum LseError {
    #[error("keypoint extraction failed for image {image_id}: {msg}")]
    Extraction { image_id: usize, msg: String },
    #[error("area {0}: indicator has no positive keypoint")]
    EmptyPrompt(String),
    #[error("invalid area configuration: {0}")]
    Config(String),
    #[error("keypoint file line {line}: {msg}")]
    KeypointFile { line: usize, msg: String },
}

#[derive(Debug, Clone, PartialEq)]
pub struct KeypointSet {
    pub points: Vec<[f32; 2]>,
    pub scores: Vec<f32>,
}

impl KeypointSet {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn validate(&self) -> Result<(), String> {
        if self.points.len() != self.scores.len() {
            return Err(format!("{} points but {} scores", self.points.len(), self.scores.len()));
        }
        if self.points.iter().flatten().any(|v| !v.is_finite()) {
            return Err("non-finite keypoint coordinate".into());
        }
        if self.scores.iter().any(|s| !(0.0..=1.0).contains(s)) {
            return Err("score outside [0, 1]".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AreaSpec {
    pub area_id: String,
    pub members: Vec<usize>,
    pub tau: f32,
}

impl AreaSpec {
    /// Area covering one body part of the default 9-keypoint layout.
    pub fn part(part: usize, tau: f32) -> Self {
        Self {
            area_id: PART_NAMES[part].to_string(),
            members: (part * 3..part * 3 + 3).collect(),
            tau,
        }
    }

    /// The first `count` parts (head, torso, legs).
    pub fn defaults(count: usize, tau: f32) -> Vec<Self> {
        (0..count.min(PARTS)).map(|p| Self::part(p, tau)).collect()
    }

    pub fn validate(&self, n: usize) -> Result<(), LseError> {
        if let Some(&j) = self.members.iter().find(|&&j| j >= n) {
            return Err(LseError::Config(format!("area {} member {j} out of range for {n} keypoints", self.area_id)));
        }
        if !(0.0..=1.0).contains(&self.tau) {
            return Err(LseError::Config(format!("area {} tau {} outside [0, 1]", self.area_id, self.tau)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IndicatorVector {
    pub bits: Vec<bool>,
}

impl IndicatorVector {
    pub fn any(&self) -> bool {
        self.bits.iter().any(|&b| b)
    }

    pub fn positives(&self) -> impl Iterator<Item = usize> + '_ {
        self.bits.iter().enumerate().filter(|(_, &b)| b).map(|(j, _)| j)
    }
}

impl fmt::Display for IndicatorVector {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for &b in &self.bits {
            f.write_str(if b { "1" } else { "0" })?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AreaFeature {
    pub area_id: String,
    pub mask: Mask,
    pub crop: Image,
}

/// Result of [`lse_extract`]: features in area order plus the ids of skipped areas.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct LseOutput {
    pub features: Vec<AreaFeature>,
    pub skipped: Vec<String>,
}

pub trait KeypointPredictor {
    fn predict(&self, image_id: usize, image: &Image) -> Result<KeypointSet, String>;
}

/// Point-prompted segmenter. Positive prompts are the set bits of `v`, every
/// other keypoint is a negative prompt.
pub trait Segmenter {
    fn segment(&self, image: &Image, keypoints: &KeypointSet, v: &IndicatorVector) -> Result<Mask, String>;
}

/// Ground truth plus Gaussian position noise and half-normal confidence loss.
#[derive(Debug, Clone)]
pub struct OraclePredictor {
    pub truth: KeypointSet,
    pub sigma: f32,
    pub score_noise: f32,
    pub seed: u64,
}

impl KeypointPredictor for OraclePredictor {
    fn predict(&self, image_id: usize, _image: &Image) -> Result<KeypointSet, String> {
        if self.sigma == 0.0 && self.score_noise == 0.0 {
            return Ok(self.truth.clone());
        }
        let pos = Normal::new(0.0f32, self.sigma).map_err(|e| e.to_string())?;
        let conf = Normal::new(0.0f32, self.score_noise).map_err(|e| e.to_string())?;
        let mut r = rng::stream(&[0x4b9, self.seed, image_id as u64]);
        let points = self
            .truth
            .points
            .iter()
            .map(|p| [p[0] + pos.sample(&mut r), p[1] + pos.sample(&mut r)])
            .collect();
        let scores = self
            .truth
            .scores
            .iter()
            .map(|s| (s - conf.sample(&mut r).abs()).clamp(0.0, 1.0))
            .collect();
        Ok(KeypointSet { points, scores })
    }
}

/// Returns the ground-truth part masks selected by the prompts. Keypoint `j`
/// prompts part `part_of[j]`; parts with a positive prompt are included and
/// parts prompted only negatively are removed.
#[derive(Debug, Clone)]
pub struct OracleSegmenter {
    pub part_masks: Vec<Mask>,
    pub part_of: Vec<usize>,
}

impl OracleSegmenter {
    pub fn new(part_masks: Vec<Mask>) -> Self {
        let part_of = (0..part_masks.len() * 3).map(|j| j / 3).collect();
        Self { part_masks, part_of }
    }
}

impl Segmenter for OracleSegmenter {
    fn segment(&self, image: &Image, keypoints: &KeypointSet, v: &IndicatorVector) -> Result<Mask, String> {
        if keypoints.len() != self.part_of.len() {
            return Err(format!("oracle expects {} keypoints, got {}", self.part_of.len(), keypoints.len()));
        }
        let mut positive = vec![false; self.part_masks.len()];
        for j in v.positives() {
            positive[self.part_of[j]] = true;
        }
        let mut mask = Mask::empty(image.height, image.width);
        for (m, _) in self.part_masks.iter().zip(&positive).filter(|(_, &p)| p) {
            mask.union_with(m);
        }
        for (j, &b) in v.bits.iter().enumerate() {
            let p = self.part_of[j];
            if !b && !positive[p] {
                mask.subtract(&self.part_masks[p]);
            }
        }
        Ok(mask)
    }
}

pub fn detect_keypoints(
    image: &Image,
    image_id: usize,
    predictor: &dyn KeypointPredictor,
    n: usize,
) -> Result<KeypointSet, LseError> {
    let err = |msg: String| LseError::Extraction { image_id, msg };
    let kp = predictor.predict(image_id, image).map_err(err)?;
    kp.validate().map_err(err)?;
    if kp.len() != n {
        return Err(err(format!("predictor returned {} keypoints, expected {n}", kp.len())));
    }
    Ok(kp)
}

pub fn build_indicator(keypoints: &KeypointSet, area: &AreaSpec) -> IndicatorVector {
    let mut bits = vec![false; keypoints.len()];
    for &j in &area.members {
        if j < bits.len() {
            bits[j] = true;
        }
    }
    IndicatorVector { bits }
}

pub fn filter_indicator(v: &IndicatorVector, keypoints: &KeypointSet, area: &AreaSpec) -> IndicatorVector {
    assert_eq!(v.bits.len(), keypoints.scores.len(), "indicator and keypoint lengths differ");
    IndicatorVector {
        bits: v
            .bits
            .iter()
            .zip(&keypoints.scores)
            .map(|(&b, &s)| b && s > area.tau)
            .collect(),
    }
}

/// Zeroes pixels outside `mask`, crops to the mask's bounding box and
/// resizes to `extent`. Returns `None` for an empty mask.
pub fn masked_crop(image: &Image, mask: &Mask, extent: (usize, usize)) -> Option<Image> {
    let bb = mask.bounding_box()?;
    let mut masked = image.clone();
    for y in bb.y0..bb.y1 {
        for x in bb.x0..bb.x1 {
            if !mask.get(y, x) {
                masked.set(y, x, [0.0; 3]);
            }
        }
    }
    Some(masked.resize_region(bb.y0, bb.x0, bb.y1, bb.x1, extent.0, extent.1))
}

pub fn segment_area(
    image: &Image,
    keypoints: &KeypointSet,
    v: &IndicatorVector,
    area_id: &str,
    segmenter: &dyn Segmenter,
    lse_extent: (usize, usize),
) -> Result<AreaFeature, LseError> {
    if !v.any() {
        return Err(LseError::EmptyPrompt(area_id.to_string()));
    }
    let mask = segmenter
        .segment(image, keypoints, v)
        .map_err(|msg| LseError::Extraction { image_id: 0, msg })?;
    if mask.height != image.height || mask.width != image.width || mask.data.iter().any(|&b| b > 1) {
        return Err(LseError::Extraction {
            image_id: 0,
            msg: format!("segmenter returned an invalid mask for area {area_id}"),
        });
    }
    let crop = masked_crop(image, &mask, lse_extent).ok_or_else(|| LseError::EmptyPrompt(area_id.to_string()))?;
    Ok(AreaFeature {
        area_id: area_id.to_string(),
        mask,
        crop,
    })
}

/// Runs the full chain for every area. Areas whose filtered indicator is
/// empty, or whose segmentation comes back empty, are recorded in `skipped`.
pub fn lse_extract(
    image: &Image,
    image_id: usize,
    predictor: &dyn KeypointPredictor,
    segmenter: &dyn Segmenter,
    areas: &[AreaSpec],
    n: usize,
    lse_extent: (usize, usize),
) -> Result<LseOutput, LseError> {
    for a in areas {
        a.validate(n)?;
    }
    let kp = detect_keypoints(image, image_id, predictor, n)?;
    let mut out = LseOutput::default();
    for area in areas {
        let v = filter_indicator(&build_indicator(&kp, area), &kp, area);
        match segment_area(image, &kp, &v, &area.area_id, segmenter, lse_extent) {
            Ok(f) => out.features.push(f),
            Err(LseError::EmptyPrompt(id)) => out.skipped.push(id),
            Err(LseError::Extraction { msg, .. }) => return Err(LseError::Extraction { image_id, msg }),
            Err(e) => return Err(e),
        }
    }
    Ok(out)
}

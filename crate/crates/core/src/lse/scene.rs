//! Procedural stick-person scenes with analytic keypoints and part masks.
//!
//! A person is three stacked rectangles (head, torso, legs) over a noisy
//! background. Colors and proportions depend only on `(identity, seed)`;
//! background, brightness, placement and pixel noise also depend on the clip
//! index. Geometry is defined in normalized coordinates and rasterized at the
//! requested extent, so an image and the frames of a clip show the same
//! person at different resolutions.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::{KeypointSet, KEYPOINTS, PARTS};
use crate::image::{Image, Mask, Rect};
use crate::rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Modality {
    Image,
    Video,
}

/// Everything that determines a scene.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SceneSpec {
    pub identity: u32,
    pub seed: u64,
    pub clip: u32,
    pub height: usize,
    pub width: usize,
    pub frames: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticScene {
    pub identity_id: u32,
    pub clip: u32,
    pub modality: Modality,
    pub frames: Vec<Image>,
    pub keypoints: Vec<KeypointSet>,
    pub part_rects: Vec<[Rect; PARTS]>,
    pub part_masks: Vec<[Mask; PARTS]>,
}

/// Per-identity appearance.
#[derive(Debug, Clone, PartialEq)]
pub struct Appearance {
    pub colors: [[f32; 3]; PARTS],
    /// Fractions of the person height taken by head and torso.
    pub head_frac: f32,
    pub torso_frac: f32,
    /// Part widths as fractions of the image width.
    pub widths: [f32; PARTS],
    /// Person height as a fraction of the image height.
    pub body_height: f32,
    /// Horizontal speed in image widths per frame.
    pub speed: f32,
}

impl Appearance {
    pub fn of(identity: u32, seed: u64) -> Self {
        let mut r = rng::stream(&[0xa11e, identity as u64, seed]);
        let mut color = || [r.gen_range(0.05..0.95), r.gen_range(0.05..0.95), r.gen_range(0.05..0.95)];
        let colors = [color(), color(), color()];
        let sign = if r.gen_bool(0.5) { 1.0 } else { -1.0 };
        Self {
            colors,
            head_frac: r.gen_range(0.16..0.24),
            torso_frac: r.gen_range(0.32..0.42),
            widths: [
                r.gen_range(0.22..0.34),
                r.gen_range(0.42..0.62),
                r.gen_range(0.30..0.48),
            ],
            body_height: r.gen_range(0.80..0.92),
            speed: sign * r.gen_range(0.02..0.06),
        }
    }
}

/// Per-clip nuisance parameters.
#[derive(Debug, Clone, PartialEq)]
struct Nuisance {
    background: [f32; 3],
    brightness: f32,
    /// Horizontal center of the person at frame 0, in image widths.
    center_x: f32,
    /// Top of the person, in image heights.
    top: f32,
    noise: f32,
}

impl Nuisance {
    fn of(spec: &SceneSpec, look: &Appearance) -> Self {
        let mut r = rng::stream(&[0xc11b, spec.identity as u64, spec.seed, spec.clip as u64]);
        let gray: f32 = r.gen_range(0.4..0.6);
        let background = [
            gray + r.gen_range(-0.04..0.04),
            gray + r.gen_range(-0.04..0.04),
            gray + r.gen_range(-0.04..0.04),
        ];
        let half = look.widths.iter().cloned().fold(0.0, f32::max) / 2.0;
        let travel = look.speed * (spec.frames.saturating_sub(1)) as f32;
        let (lo, hi) = if travel >= 0.0 {
            (half, 1.0 - half - travel)
        } else {
            (half - travel, 1.0 - half)
        };
        let mid = if hi > lo { (lo + hi) / 2.0 } else { 0.5 };
        let jitter = ((hi - lo) / 2.0).clamp(0.0, 0.06);
        let center_x = mid + r.gen_range(-1.0..1.0f32) * jitter;
        let top = (1.0 - look.body_height) * r.gen_range(0.25..0.75);
        Self {
            background,
            brightness: r.gen_range(0.94..1.06),
            center_x,
            top,
            noise: 0.02,
        }
    }
}

fn span(lo: f32, hi: f32, extent: usize) -> (usize, usize) {
    let a = ((lo * extent as f32).round().max(0.0) as usize).min(extent - 1);
    let b = ((hi * extent as f32).round() as usize).clamp(a + 1, extent);
    (a, b)
}

fn layout(spec: &SceneSpec, look: &Appearance, nz: &Nuisance, frame: usize) -> [Rect; PARTS] {
    let (h, w) = (spec.height, spec.width);
    let cx = nz.center_x + look.speed * frame as f32;
    let top = nz.top;
    let bottom = top + look.body_height;
    let head_bottom = top + look.body_height * look.head_frac;
    let torso_bottom = head_bottom + look.body_height * look.torso_frac;
    // Rows are assigned so the three parts tile [top, bottom) without overlap.
    let (y0, _) = span(top, head_bottom, h);
    let y1 = ((head_bottom * h as f32).round() as usize).clamp(y0 + 1, h.saturating_sub(2).max(y0 + 1));
    let y2 = ((torso_bottom * h as f32).round() as usize).clamp(y1 + 1, h.saturating_sub(1).max(y1 + 1));
    let y3 = ((bottom * h as f32).round() as usize).clamp(y2 + 1, h);
    let rows = [(y0, y1), (y1, y2), (y2, y3)];
    let mut rects = [Rect { x0: 0, y0: 0, x1: 1, y1: 1 }; PARTS];
    for p in 0..PARTS {
        let half = look.widths[p] / 2.0;
        let (x0, x1) = span(cx - half, cx + half, w);
        rects[p] = Rect { x0, y0: rows[p].0, x1, y1: rows[p].1 };
    }
    rects
}

/// Keypoints of one part: left, center and right at mid-height.
pub fn part_keypoints(r: &Rect) -> [[f32; 2]; 3] {
    let y = r.y0 as f32 + r.height() as f32 / 2.0;
    let w = r.width() as f32;
    [0.125, 0.5, 0.875].map(|f| [r.x0 as f32 + w * f, y])
}

fn quantize(v: f32) -> f32 {
    (v.clamp(0.0, 1.0) * 255.0).round() / 255.0
}

fn render(spec: &SceneSpec, look: &Appearance, nz: &Nuisance, rects: &[Rect; PARTS], frame: usize) -> Image {
    let mut img = Image::new(spec.height, spec.width);
    let mut r = rng::stream(&[0x9015e, spec.identity as u64, spec.seed, spec.clip as u64, frame as u64]);
    let noise = Normal::new(0.0f32, nz.noise).expect("noise sigma");
    for y in 0..spec.height {
        for x in 0..spec.width {
            let base = rects
                .iter()
                .position(|rc| y >= rc.y0 && y < rc.y1 && x >= rc.x0 && x < rc.x1)
                .map_or(nz.background, |p| look.colors[p].map(|c| c * nz.brightness));
            let rgb = base.map(|c| quantize(c + noise.sample(&mut r)));
            img.set(y, x, rgb);
        }
    }
    img
}

/// Renders a scene. Image modality always renders a single frame.
pub fn generate_scene(spec: &SceneSpec, modality: Modality) -> SyntheticScene {
    assert!(spec.height >= 4 && spec.width >= 2, "scene extent too small");
    let frames = match modality {
        Modality::Image => 1,
        Modality::Video => spec.frames.max(1),
    };
    let spec = SceneSpec { frames, ..*spec };
    let look = Appearance::of(spec.identity, spec.seed);
    let nz = Nuisance::of(&spec, &look);
    let mut scene = SyntheticScene {
        identity_id: spec.identity,
        clip: spec.clip,
        modality,
        frames: Vec::with_capacity(frames),
        keypoints: Vec::with_capacity(frames),
        part_rects: Vec::with_capacity(frames),
        part_masks: Vec::with_capacity(frames),
    };
    for t in 0..frames {
        let rects = layout(&spec, &look, &nz, t);
        let mut points = Vec::with_capacity(KEYPOINTS);
        for r in &rects {
            points.extend(part_keypoints(r));
        }
        let masks = rects.map(|r| {
            let mut m = Mask::empty(spec.height, spec.width);
            m.fill_rect(&r);
            m
        });
        scene.frames.push(render(&spec, &look, &nz, &rects, t));
        scene.keypoints.push(KeypointSet {
            points,
            scores: vec![1.0; KEYPOINTS],
        });
        scene.part_rects.push(rects);
        scene.part_masks.push(masks);
    }
    scene
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(identity: u32, clip: u32, frames: usize) -> SceneSpec {
        SceneSpec { identity, seed: 11, clip, height: 32, width: 16, frames }
    }

    #[test]
    fn deterministic() {
        let a = generate_scene(&spec(3, 1, 4), Modality::Video);
        let b = generate_scene(&spec(3, 1, 4), Modality::Video);
        assert_eq!(a, b);
    }

    #[test]
    fn single_frame_video_matches_image() {
        let v = generate_scene(&spec(5, 2, 1), Modality::Video);
        let i = generate_scene(&spec(5, 2, 1), Modality::Image);
        assert_eq!(v.frames[0].pixels, i.frames[0].pixels);
    }

    #[test]
    fn keypoints_inside_their_part() {
        for id in 0..20 {
            for (h, w) in [(32, 16), (16, 8)] {
                let s = SceneSpec { height: h, width: w, ..spec(id, id % 3, 4) };
                let sc = generate_scene(&s, Modality::Video);
                for (kps, rects) in sc.keypoints.iter().zip(&sc.part_rects) {
                    for (j, p) in kps.points.iter().enumerate() {
                        assert!(rects[j / 3].contains(p[0], p[1]), "id {id} kp {j} {p:?} {:?}", rects[j / 3]);
                    }
                    for r in rects {
                        assert!(r.x1 <= w && r.y1 <= h && r.width() >= 1 && r.height() >= 1);
                    }
                    assert!(rects[0].y1 <= rects[1].y0 && rects[1].y1 <= rects[2].y0);
                }
            }
        }
    }

    #[test]
    fn video_translates_horizontally() {
        let sc = generate_scene(&SceneSpec { height: 32, width: 16, ..spec(7, 0, 4) }, Modality::Video);
        let first = sc.keypoints[0].points[4][0];
        let last = sc.keypoints[3].points[4][0];
        assert!((first - last).abs() > 0.5, "{first} {last}");
        let look = Appearance::of(7, 11);
        assert_eq!((last - first).signum(), look.speed.signum());
    }
}

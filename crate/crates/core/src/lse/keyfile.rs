//! Keypoint exchange file: one `frame_idx kp_idx x y score` record per line.
//! Blank lines and lines starting with `#` are ignored.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use super::{KeypointPredictor, KeypointSet, LseError};
use crate::image::Image;

pub fn read_keypoint_file(text: &str, n: usize) -> Result<BTreeMap<usize, KeypointSet>, LseError> {
    let mut table: BTreeMap<usize, Vec<Option<([f32; 2], f32)>>> = BTreeMap::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let err = |msg: String| LseError::KeypointFile { line: i + 1, msg };
        let f: Vec<&str> = line.split_whitespace().collect();
        if f.len() != 5 {
            return Err(err(format!("expected 5 fields, found {}", f.len())));
        }
        let frame: usize = f[0].parse().map_err(|_| err(format!("bad frame index {:?}", f[0])))?;
        let kp: usize = f[1].parse().map_err(|_| err(format!("bad keypoint index {:?}", f[1])))?;
        let num = |s: &str| -> Result<f32, LseError> {
            s.parse::<f32>()
                .ok()
                .filter(|v| v.is_finite())
                .ok_or_else(|| err(format!("bad number {s:?}")))
        };
        let (x, y, score) = (num(f[2])?, num(f[3])?, num(f[4])?);
        if kp >= n {
            return Err(err(format!("keypoint index {kp} out of range for {n}")));
        }
        if !(0.0..=1.0).contains(&score) {
            return Err(err(format!("score {score} outside [0, 1]")));
        }
        let slots = table.entry(frame).or_insert_with(|| vec![None; n]);
        if slots[kp].replace(([x, y], score)).is_some() {
            return Err(err(format!("duplicate record for frame {frame} keypoint {kp}")));
        }
    }
    table
        .into_iter()
        .map(|(frame, slots)| {
            if let Some(j) = slots.iter().position(Option::is_none) {
                return Err(LseError::KeypointFile { line: 0, msg: format!("frame {frame} lacks keypoint {j}") });
            }
            let (points, scores) = slots.into_iter().map(Option::unwrap).unzip();
            Ok((frame, KeypointSet { points, scores }))
        })
        .collect()
}

pub fn write_keypoint_file(frames: &BTreeMap<usize, KeypointSet>) -> String {
    let mut out = String::new();
    for (frame, kp) in frames {
        for (j, (p, s)) in kp.points.iter().zip(&kp.scores).enumerate() {
            let _ = writeln!(out, "{frame} {j} {} {} {}", p[0], p[1], s);
        }
    }
    out
}

/// Serves precomputed keypoints by image id.
#[derive(Debug, Clone, Default)]
pub struct TablePredictor {
    pub table: BTreeMap<usize, KeypointSet>,
}

impl KeypointPredictor for TablePredictor {
    fn predict(&self, image_id: usize, _image: &Image) -> Result<KeypointSet, String> {
        self.table
            .get(&image_id)
            .cloned()
            .ok_or_else(|| format!("no keypoints recorded for frame {image_id}"))
    }
}

//! Attention map export: per-head CSV matrices and PGM heat maps.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use super::{Encoder, EncoderError, Result};
use crate::image::Image;
use crate::params::ParamSet;
use crate::tensor::{Float, Tape};

/// Attention of one layer for one input.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionExport {
    pub layer: usize,
    pub heads: usize,
    pub tokens: usize,
    /// `[heads × tokens × tokens]`, query-major.
    pub probs: Vec<f64>,
    pub grid: (usize, usize),
    pub extent: (usize, usize),
    pub files: Vec<PathBuf>,
}

impl AttentionExport {
    pub fn row(&self, head: usize, query: usize) -> &[f64] {
        let n = self.tokens;
        &self.probs[(head * n + query) * n..(head * n + query + 1) * n]
    }

    /// Attention received by each key token, averaged over queries.
    pub fn received(&self, head: usize) -> Vec<f64> {
        let n = self.tokens;
        (0..n)
            .map(|k| (0..n).map(|q| self.row(head, q)[k]).sum::<f64>() / n as f64)
            .collect()
    }

    /// Heat map of [`Self::received`] upsampled (nearest) to the input extent.
    pub fn heat_map(&self, head: usize) -> Vec<u8> {
        let r = self.received(head);
        let max = r.iter().cloned().fold(0.0, f64::max);
        let (h, w) = self.extent;
        let (gh, gw) = self.grid;
        let mut out = Vec::with_capacity(h * w);
        for y in 0..h {
            for x in 0..w {
                let t = (y * gh / h) * gw + x * gw / w;
                let v = if max > 0.0 { r[t] / max } else { 0.0 };
                out.push((v * 255.0).round().clamp(0.0, 255.0) as u8);
            }
        }
        out
    }
}

pub fn pgm_bytes(width: usize, height: usize, pixels: &[u8]) -> Vec<u8> {
    let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
    out.extend_from_slice(pixels);
    out
}

/// Runs `image` through the encoder and writes, for every head of `layer`,
/// `layer{L}_head{H}.csv` (token-to-token attention, one row per query) and
/// `layer{L}_head{H}.pgm`. Pass `out = None` to skip writing.
pub fn export_attention<T: Float>(
    encoder: &Encoder,
    params: &ParamSet<T>,
    image: &Image,
    layer: usize,
    out: Option<&Path>,
) -> Result<AttentionExport> {
    if layer >= encoder.config.depth {
        return Err(EncoderError::Config(format!(
            "layer {layer} out of range for depth {}",
            encoder.config.depth
        )));
    }
    let mut tape = Tape::inference();
    let b = params.bind(&mut tape);
    let tr = encoder.encode_images(&mut tape, &b, &[image], &[])?;
    let (probs, heads, nq, nk) = tape
        .attention_probs(tr.attention[layer])
        .expect("attention node keeps its probabilities");
    debug_assert_eq!(nq, nk);
    let grid = if image.extent() == encoder.config.image_extent {
        encoder.config.image_grid()
    } else {
        encoder.config.frame_grid()
    };
    let mut ex = AttentionExport {
        layer,
        heads,
        tokens: nq,
        probs: probs.iter().map(|p| p.as_f64()).collect(),
        grid,
        extent: image.extent(),
        files: Vec::new(),
    };
    if let Some(dir) = out {
        let io = |e: std::io::Error| EncoderError::Io(format!("{}: {e}", dir.display()));
        fs::create_dir_all(dir).map_err(io)?;
        for h in 0..heads {
            let mut csv = String::new();
            for q in 0..nq {
                let row: Vec<String> = ex.row(h, q).iter().map(|p| format!("{p:.8}")).collect();
                let _ = writeln!(csv, "{}", row.join(","));
            }
            let base = dir.join(format!("layer{layer}_head{h}"));
            let csv_path = base.with_extension("csv");
            fs::write(&csv_path, csv).map_err(io)?;
            let pgm_path = base.with_extension("pgm");
            fs::write(&pgm_path, pgm_bytes(ex.extent.1, ex.extent.0, &ex.heat_map(h))).map_err(io)?;
            ex.files.push(csv_path);
            ex.files.push(pgm_path);
        }
    }
    Ok(ex)
}

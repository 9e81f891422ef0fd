//! Downstream path: teacher embeddings, fine-tuning and retrieval protocols.

mod metrics;

use std::fmt::Write as _;

use rand::seq::SliceRandom;

use crate::data::Dataset;
use crate::encoder::{sample_frame, FrameRule};
use crate::image::{Image, Video};
use crate::params::{Init, ParamSet};
use crate::rng;
use crate::tensor::{kernels, Float, Tape, TensorError, Var};
use crate::ufla::{grad_norm, sgd_step, Model, UflaError};

pub use metrics::{mean_average_precision, rank_k, ranking, tar_at_far, MatchScores};

#[derive(Debug, thiserror::Error)]
pub enum EvalError {
    #[error("protocol: {0}")]
    Protocol(String),
    #[error("query identities missing from the gallery: {0:?}")]
    MissingIdentities(Vec<u32>),
    #[error("parameter: {0}")]
    Param(String),
    #[error("sampling: {0}")]
    Sampling(String),
    #[error(transparent)]
    Model(#[from] UflaError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("fine-tune step {step}: non-finite loss")]
    NonFinite { step: u64 },
}

pub type Result<T> = std::result::Result<T, EvalError>;

/// Prefixes of the parameters that make up the inference path.
pub const INFERENCE_PREFIXES: [&str; 2] = ["encoder.", "resampler."];
pub const CLASSIFIER: &str = "classifier.weight";

#[derive(Debug, Clone, Copy)]
pub enum Input<'a> {
    Image(&'a Image),
    Video(&'a Video),
}

/// Teacher encoder → resampler → mean-pool → length-normalize, batched.
/// Every protocol goes through this one function.
pub fn embed<T: Float>(model: &Model, params: &ParamSet<T>, inputs: &[Input]) -> Result<Vec<Vec<f64>>> {
    let mut out = vec![Vec::new(); inputs.len()];
    // Group consecutive inputs of the same kind and extent.
    let mut start = 0;
    while start < inputs.len() {
        let key = |i: &Input| match i {
            Input::Image(x) => (0, x.extent(), 1),
            Input::Video(v) => (1, v.extent(), v.len()),
        };
        let k0 = key(&inputs[start]);
        let mut end = start + 1;
        while end < inputs.len() && end - start < 32 && key(&inputs[end]) == k0 {
            end += 1;
        }
        let mut tape = Tape::inference();
        let b = params.bind(&mut tape);
        let pooled = match inputs[start] {
            Input::Image(_) => {
                let imgs: Vec<&Image> = inputs[start..end]
                    .iter()
                    .map(|i| match i {
                        Input::Image(x) => *x,
                        Input::Video(_) => unreachable!(),
                    })
                    .collect();
                model.pool_images(&mut tape, &b, &imgs, &[])?
            }
            Input::Video(_) => {
                let vids: Vec<&Video> = inputs[start..end]
                    .iter()
                    .map(|i| match i {
                        Input::Video(v) => *v,
                        Input::Image(_) => unreachable!(),
                    })
                    .collect();
                model.pool_videos(&mut tape, &b, &vids, &[])?
            }
        };
        let mut v: Vec<f64> = tape.value(pooled).iter().map(|x| x.as_f64()).collect();
        let d = model.config.encoder.d;
        kernels::l2_normalize_rows(&mut v, d);
        for (i, row) in v.chunks(d).enumerate() {
            out[start + i] = row.to_vec();
        }
        start = end;
    }
    Ok(out)
}

/// Cosine similarities of normalized embeddings.
pub fn similarities(query: &[Vec<f64>], gallery: &[Vec<f64>]) -> Vec<Vec<f64>> {
    query
        .iter()
        .map(|q| gallery.iter().map(|g| kernels::dot(q, g)).collect())
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Protocol {
    Image,
    Video,
    Mix,
}

impl Protocol {
    pub fn name(self) -> &'static str {
        match self {
            Protocol::Image => "image",
            Protocol::Video => "video",
            Protocol::Mix => "mix",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "image" => Some(Protocol::Image),
            "video" => Some(Protocol::Video),
            "mix" => Some(Protocol::Mix),
            _ => None,
        }
    }
}

/// Per identity, the first half of its clips (rounded down, at least one)
/// forms the gallery and the rest the queries.
pub fn split(ds: &Dataset) -> Result<(Vec<usize>, Vec<usize>)> {
    let mut gallery = Vec::new();
    let mut query = Vec::new();
    for (id, clips) in ds.by_identity() {
        if clips.len() < 2 {
            return Err(EvalError::Protocol(format!(
                "identity {id} has {} clip(s); a gallery/query split needs at least 2",
                clips.len()
            )));
        }
        let half = clips.len() / 2;
        gallery.extend_from_slice(&clips[..half]);
        query.extend_from_slice(&clips[half..]);
    }
    Ok((gallery, query))
}

/// Query and gallery inputs of a protocol.
pub fn protocol_inputs(ds: &Dataset, protocol: Protocol) -> Result<(Vec<Input<'_>>, Vec<u32>, Vec<Input<'_>>, Vec<u32>)> {
    let (g, q) = split(ds)?;
    let labels = |ix: &[usize]| ix.iter().map(|&i| ds.clips[i].identity).collect::<Vec<_>>();
    let image = |i: usize| Input::Image(&ds.clips[i].image);
    let video = |i: usize| Input::Video(&ds.clips[i].video);
    let middle = |i: usize| Input::Image(sample_frame(&ds.clips[i].video, FrameRule::Middle, 0));
    let (qi, gi): (Vec<Input>, Vec<Input>) = match protocol {
        Protocol::Image => (q.iter().map(|&i| image(i)).collect(), g.iter().map(|&i| image(i)).collect()),
        Protocol::Video => (q.iter().map(|&i| video(i)).collect(), g.iter().map(|&i| video(i)).collect()),
        Protocol::Mix => (q.iter().map(|&i| middle(i)).collect(), g.iter().map(|&i| video(i)).collect()),
    };
    Ok((qi, labels(&q), gi, labels(&g)))
}

#[derive(Debug, Clone, PartialEq)]
pub struct Metrics {
    pub protocol: Protocol,
    pub far: f64,
    pub rank1: f64,
    pub rank20: f64,
    pub map: f64,
    pub tar: f64,
}

impl Metrics {
    pub fn csv(&self) -> String {
        let p = self.protocol.name();
        let mut s = String::from("metric,protocol,value\n");
        let far = format!("tar@far={}", self.far);
        for (m, v) in [("rank1", self.rank1), ("rank20", self.rank20), ("mAP", self.map), (far.as_str(), self.tar)] {
            let _ = writeln!(s, "{m},{p},{v:.6}");
        }
        s
    }
}

pub fn evaluate<T: Float>(model: &Model, params: &ParamSet<T>, ds: &Dataset, protocol: Protocol, far: f64) -> Result<Metrics> {
    let (qi, ql, gi, gl) = protocol_inputs(ds, protocol)?;
    let qe = embed(model, params, &qi)?;
    let ge = embed(model, params, &gi)?;
    let sims = similarities(&qe, &ge);
    let scores = MatchScores::from_sims(&sims, &ql, &gl);
    Ok(Metrics {
        protocol,
        far,
        rank1: rank_k(&sims, &ql, &gl, 1)?,
        rank20: rank_k(&sims, &ql, &gl, 20)?,
        map: mean_average_precision(&sims, &ql, &gl)?,
        tar: tar_at_far(&scores, far)?,
    })
}

/// Softmax cross-entropy of `emb · Wᵀ` against identity labels.
pub fn id_cross_entropy<T: Float>(tape: &mut Tape<T>, emb: Var, classifier: Var, labels: &[usize]) -> Result<Var> {
    let classes = tape.shape(classifier)[0];
    if let Some(&l) = labels.iter().find(|&&l| l >= classes) {
        return Err(EvalError::Param(format!("label {l} outside {classes} classifier rows")));
    }
    let logits = tape.matmul_nt(emb, classifier)?;
    Ok(tape.cross_entropy(logits, labels)?)
}

/// Batch-hard mining: farthest same-label and nearest other-label row per
/// anchor (first index wins ties).
pub fn mine_batch_hard(emb: &[f64], d: usize, labels: &[usize]) -> Result<(Vec<usize>, Vec<usize>)> {
    let n = labels.len();
    let dist = |i: usize, j: usize| -> f64 {
        emb[i * d..(i + 1) * d]
            .iter()
            .zip(&emb[j * d..(j + 1) * d])
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt()
    };
    let mut pos = Vec::with_capacity(n);
    let mut neg = Vec::with_capacity(n);
    for i in 0..n {
        let mut p: Option<(usize, f64)> = None;
        let mut q: Option<(usize, f64)> = None;
        for j in (0..n).filter(|&j| j != i) {
            let dij = dist(i, j);
            if labels[j] == labels[i] {
                if p.is_none_or(|(_, best)| dij > best) {
                    p = Some((j, dij));
                }
            } else if q.is_none_or(|(_, best)| dij < best) {
                q = Some((j, dij));
            }
        }
        match (p, q) {
            (Some(p), Some(q)) => {
                pos.push(p.0);
                neg.push(q.0);
            }
            _ => {
                return Err(EvalError::Sampling(format!(
                    "anchor {i} lacks a positive or a negative; need ≥ 2 identities with ≥ 2 samples each"
                )))
            }
        }
    }
    Ok((pos, neg))
}

/// Batch-hard triplet loss on the rows of `emb`.
pub fn triplet_loss<T: Float>(tape: &mut Tape<T>, emb: Var, labels: &[usize], margin: f64) -> Result<Var> {
    let d = tape.shape(emb)[1];
    let values: Vec<f64> = tape.value(emb).iter().map(|x| x.as_f64()).collect();
    let (pos, neg) = mine_batch_hard(&values, d, labels)?;
    Ok(tape.triplet(emb, &pos, &neg, T::lit(margin))?)
}

#[derive(Debug, Clone, PartialEq)]
pub struct FinetuneConfig {
    pub lr: f64,
    pub clip: f64,
    pub identities_per_batch: usize,
    pub clips_per_identity: usize,
    pub margin: f64,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        Self { lr: 0.05, clip: 3.0, identities_per_batch: 4, clips_per_identity: 2, margin: 0.3 }
    }
}

impl FinetuneConfig {
    pub fn validate(&self) -> std::result::Result<(), String> {
        if !(self.lr >= 0.0 && self.lr.is_finite() && self.clip > 0.0) {
            return Err("fine-tune lr must be non-negative and clip positive".into());
        }
        if self.identities_per_batch < 2 || self.clips_per_identity < 1 {
            return Err("fine-tune batches need ≥ 2 identities and ≥ 1 clip each".into());
        }
        if !(self.margin >= 0.0) {
            return Err("triplet margin must be non-negative".into());
        }
        Ok(())
    }
}

/// Inference parameters of `teacher` plus a fresh `[C × d]` classifier.
pub fn finetune_params<T: Float>(teacher: &ParamSet<T>, classes: usize, d: usize, seed: u64) -> ParamSet<T> {
    let mut p: ParamSet<T> = teacher
        .iter()
        .filter(|(n, _)| INFERENCE_PREFIXES.iter().any(|x| n.starts_with(x)))
        .map(|(n, t)| (n.clone(), t.clone()))
        .collect();
    p.set_trainable(true);
    let mut r = rng::stream(&[0xc1a5, seed]);
    let mut init = Init { rng: &mut r };
    p.insert(CLASSIFIER, init.normal(vec![classes, d], 1.0 / (d as f64).sqrt()));
    p
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FinetuneReport {
    pub step: u64,
    pub loss: f64,
    pub id_loss: f64,
    pub triplet: f64,
    pub grad_norm: f64,
}

/// One fine-tune step on `P` identities × `K` clips, using both the clip
/// and the still image of every drawn clip.
pub fn finetune_step<T: Float>(
    model: &Model,
    params: &mut ParamSet<T>,
    ds: &Dataset,
    cfg: &FinetuneConfig,
    seed: u64,
    step: u64,
) -> Result<FinetuneReport> {
    let groups = ds.by_identity();
    let ids: Vec<u32> = groups.keys().copied().collect();
    if ids.len() < 2 {
        return Err(EvalError::Sampling("fine-tuning needs at least 2 identities".into()));
    }
    let mut r = rng::stream(&[0xf17e, seed, step]);
    let chosen: Vec<u32> = ids.choose_multiple(&mut r, cfg.identities_per_batch.min(ids.len())).copied().collect();
    let mut clips = Vec::new();
    for id in &chosen {
        let pool = &groups[id];
        let k = cfg.clips_per_identity.min(pool.len());
        clips.extend(pool.choose_multiple(&mut r, k).copied());
    }
    let videos: Vec<&Video> = clips.iter().map(|&i| &ds.clips[i].video).collect();
    let images: Vec<&Image> = clips.iter().map(|&i| &ds.clips[i].image).collect();
    let mut labels: Vec<usize> = clips.iter().map(|&i| ds.clips[i].identity as usize).collect();
    labels.extend(labels.clone());

    let mut tape = Tape::new();
    let b = params.bind(&mut tape);
    let pv = model.pool_videos(&mut tape, &b, &videos, &[])?;
    let pi = model.pool_images(&mut tape, &b, &images, &[])?;
    let pooled = tape.concat_rows(&[pv, pi])?;
    let emb = tape.l2_normalize(pooled);
    let ce = id_cross_entropy(&mut tape, pooled, b.var(CLASSIFIER), &labels)?;
    let tri = triplet_loss(&mut tape, emb, &labels, cfg.margin)?;
    let half = T::one();
    let loss = tape.weighted_sum(&[(ce, half), (tri, half)])?;
    let lv = tape.scalar_value(loss).as_f64();
    if !lv.is_finite() {
        return Err(EvalError::NonFinite { step });
    }
    let g = tape.backward(loss)?;
    let grads = params.collect_grads(&b, &g);
    let gn = grad_norm(&grads);
    let report = FinetuneReport {
        step,
        loss: lv,
        id_loss: tape.scalar_value(ce).as_f64(),
        triplet: tape.scalar_value(tri).as_f64(),
        grad_norm: gn,
    };
    drop(tape);
    sgd_step(params, &grads, cfg.lr, cfg.clip);
    Ok(report)
}

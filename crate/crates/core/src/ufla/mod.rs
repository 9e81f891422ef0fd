//! Unified feature learning: resampler, heads, the self-supervised objective,
//! the EMA teacher and one pre-training step.

mod head;
mod loss;
mod resampler;

use std::collections::BTreeMap;

use crate::encoder::{Encoder, EncoderConfig, EncoderError};
use crate::image::{Image, Video};
use crate::params::{Bound, ParamSet};
use crate::tensor::{Float, Tape, TensorError, Var};

pub use head::{student_probs, Center, Head};
pub use loss::{
    alignment_loss, cross_entropy_rows, feature_loss, koleo_loss, mask_positions, mask_tokens, total_loss,
    LossTerms, LossWeights, NonFiniteLoss,
};
pub use resampler::Resampler;

#[derive(Debug, thiserror::Error)]
pub enum UflaError {
    #[error("configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Encoder(#[from] EncoderError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("step {step}: {source}")]
    NonFinite { step: u64, source: NonFiniteLoss, report: Box<StepReport> },
    #[error("parameter corruption: {0}")]
    Corruption(String),
}

pub type Result<T> = std::result::Result<T, UflaError>;

#[derive(Debug, Clone, PartialEq)]
pub struct UflaConfig {
    pub encoder: EncoderConfig,
    pub queries: usize,
    pub resampler_heads: usize,
    pub prototypes: usize,
    pub head_hidden: usize,
    pub head_bottleneck: usize,
    pub student_temp: f64,
    pub teacher_temp: f64,
    pub center_momentum: f64,
    pub mask_ratio: f64,
    pub koleo_eps: f64,
    pub align_temp: f64,
    pub weights: LossWeights,
    pub ema: f64,
    pub lr: f64,
    pub clip: f64,
}

impl Default for UflaConfig {
    fn default() -> Self {
        Self {
            encoder: EncoderConfig::default(),
            queries: 8,
            resampler_heads: 4,
            prototypes: 128,
            head_hidden: 128,
            head_bottleneck: 64,
            student_temp: 0.1,
            teacher_temp: 0.04,
            center_momentum: 0.9,
            mask_ratio: 0.3,
            koleo_eps: 1e-8,
            align_temp: 0.2,
            weights: LossWeights::default(),
            ema: 0.99,
            lr: 1e-3,
            clip: 3.0,
        }
    }
}

impl UflaConfig {
    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        let err = |m: String| Err(UflaError::Config(m));
        let d = self.encoder.d;
        if self.queries == 0 {
            return err("resampler needs at least one query".into());
        }
        if self.resampler_heads == 0 || d % self.resampler_heads != 0 {
            return err(format!("width {d} not divisible by {} resampler heads", self.resampler_heads));
        }
        if self.prototypes == 0 || self.head_hidden == 0 || self.head_bottleneck == 0 {
            return err("head sizes must be positive".into());
        }
        if !(self.teacher_temp > 0.0 && self.student_temp > 0.0) {
            return err("temperatures must be positive".into());
        }
        if self.teacher_temp >= self.student_temp {
            return err(format!(
                "teacher temperature {} must be below student temperature {}",
                self.teacher_temp, self.student_temp
            ));
        }
        for (name, v) in [("center_momentum", self.center_momentum), ("mask_ratio", self.mask_ratio), ("ema", self.ema)] {
            if !(0.0..=1.0).contains(&v) {
                return err(format!("{name} {v} outside [0, 1]"));
            }
        }
        if !(self.align_temp > 0.0 && self.koleo_eps > 0.0) {
            return err("alignment temperature and koleo eps must be positive".into());
        }
        let w = &self.weights;
        if [w.feature, w.masking, w.koleo, w.alignment].iter().any(|&x| !(x >= 0.0 && x.is_finite())) {
            return err("loss weights must be non-negative".into());
        }
        if !(self.lr >= 0.0 && self.lr.is_finite() && self.clip > 0.0) {
            return err("learning rate must be non-negative and clip positive".into());
        }
        Ok(())
    }
}

/// Network layout shared by student and teacher.
#[derive(Debug, Clone)]
pub struct Model {
    pub config: UflaConfig,
    pub encoder: Encoder,
    pub resampler: Resampler,
    pub feature_head: Head,
    pub masking_head: Head,
}

impl Model {
    pub fn new(config: UflaConfig) -> Result<Self> {
        config.validate()?;
        let d = config.encoder.d;
        let head = |prefix: &str| Head {
            d,
            hidden: config.head_hidden,
            bottleneck: config.head_bottleneck,
            prototypes: config.prototypes,
            prefix: prefix.into(),
        };
        Ok(Self {
            encoder: Encoder::new(config.encoder.clone(), "encoder."),
            resampler: Resampler::new(config.queries, d, config.resampler_heads, "resampler."),
            feature_head: head("head.feature."),
            masking_head: head("head.masking."),
            config,
        })
    }

    pub fn init<T: Float>(&self, seed: u64) -> ParamSet<T> {
        let mut p = self.config.encoder.init(&self.encoder.prefix, seed);
        p.extend(self.resampler.init(seed));
        p.extend(self.feature_head.init(seed));
        p.extend(self.masking_head.init(seed ^ 0x5a5a));
        p
    }

    /// Resamples `[items·n × d]` tokens and mean-pools the `L` outputs.
    pub fn pool<T: Float>(&self, tape: &mut Tape<T>, b: &Bound, tokens: Var, items: usize) -> Result<Var> {
        let r = self.resampler.forward(tape, b, tokens, items)?;
        Ok(tape.group_mean(r, self.config.queries)?)
    }

    pub fn pool_videos<T: Float>(&self, tape: &mut Tape<T>, b: &Bound, videos: &[&Video], mask: &[usize]) -> Result<Var> {
        let tr = self.encoder.encode_videos(tape, b, videos, mask)?;
        self.pool(tape, b, tr.out, videos.len())
    }

    pub fn pool_images<T: Float>(&self, tape: &mut Tape<T>, b: &Bound, images: &[&Image], mask: &[usize]) -> Result<Var> {
        let tr = self.encoder.encode_images(tape, b, images, mask)?;
        self.pool(tape, b, tr.out, images.len())
    }
}

/// Student, EMA teacher and the teacher-side head centers.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelState<T> {
    pub student: ParamSet<T>,
    pub teacher: ParamSet<T>,
    pub feature_center: Center<T>,
    pub masking_center: Center<T>,
    pub step: u64,
}

impl<T: Float> ModelState<T> {
    /// Teacher starts as an exact copy of the student.
    pub fn new(model: &Model, seed: u64) -> Self {
        let student = model.init::<T>(seed);
        let mut teacher = student.clone();
        teacher.set_trainable(false);
        let k = model.config.prototypes;
        let m = T::lit(model.config.center_momentum);
        Self {
            student,
            teacher,
            feature_center: Center::new(k, m),
            masking_center: Center::new(k, m),
            step: 0,
        }
    }
}

/// `teacher ← m·teacher + (1 − m)·student` for every parameter. The
/// endpoints are exact copies so that `m ∈ {0, 1}` is bitwise faithful.
pub fn ema_update<T: Float>(teacher: &mut ParamSet<T>, student: &ParamSet<T>, m: T) -> Result<()> {
    if !teacher.same_structure(student) {
        return Err(UflaError::Corruption("teacher and student parameter shapes differ".into()));
    }
    if m == T::one() {
        return Ok(());
    }
    for ((_, t), (_, s)) in teacher.iter_mut().zip(student.iter()) {
        let td = t.data_mut();
        if m == T::zero() {
            td.copy_from_slice(s.data());
        } else {
            let om = T::one() - m;
            for (a, &b) in td.iter_mut().zip(s.data()) {
                *a = m * *a + om * b;
            }
        }
    }
    Ok(())
}

/// Source of a student-only LSE view, as a position in the batch.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ViewSource {
    Video(usize),
    Image(usize),
}

#[derive(Debug, Clone)]
pub struct LseView {
    pub source: ViewSource,
    pub crop: Image,
}

/// One pre-training batch. `frames[j]` is the frame sampled from
/// `videos[j]`; `video_ids` are the clip ids used as alignment targets.
#[derive(Debug, Clone)]
pub struct PretrainBatch<'a> {
    pub videos: Vec<&'a Video>,
    pub video_ids: Vec<usize>,
    pub frames: Vec<&'a Image>,
    pub images: Vec<&'a Image>,
    pub lse: Vec<LseView>,
}

impl PretrainBatch<'_> {
    pub fn validate(&self) -> Result<()> {
        let nv = self.videos.len();
        if nv < 2 || self.images.is_empty() {
            return Err(UflaError::Config(format!(
                "a batch needs at least 2 videos and 1 image, got {nv} and {}",
                self.images.len()
            )));
        }
        if self.frames.len() != nv || self.video_ids.len() != nv {
            return Err(UflaError::Config("one frame and one id per video required".into()));
        }
        for v in &self.lse {
            let ok = match v.source {
                ViewSource::Video(j) => j < nv,
                ViewSource::Image(i) => i < self.images.len(),
            };
            if !ok {
                return Err(UflaError::Config(format!("LSE view source {:?} out of range", v.source)));
            }
        }
        Ok(())
    }
}

/// Teacher outputs for one batch: logits and centered distributions, rows
/// ordered `[videos; images]`.
#[derive(Debug, Clone, PartialEq)]
pub struct TeacherTargets<T> {
    pub feature_logits: Vec<T>,
    pub masking_logits: Vec<T>,
    pub feature: Vec<T>,
    pub masking: Vec<T>,
}

pub fn teacher_targets<T: Float>(model: &Model, state: &ModelState<T>, batch: &PretrainBatch) -> Result<TeacherTargets<T>> {
    let mut tape = Tape::inference();
    let b = state.teacher.bind(&mut tape);
    let pv = model.pool_videos(&mut tape, &b, &batch.videos, &[])?;
    let pi = model.pool_images(&mut tape, &b, &batch.images, &[])?;
    let pooled = tape.concat_rows(&[pv, pi])?;
    let fl = model.feature_head.logits(&mut tape, &b, pooled)?;
    let ml = model.masking_head.logits(&mut tape, &b, pooled)?;
    let tt = T::lit(model.config.teacher_temp);
    let feature_logits = tape.value(fl).to_vec();
    let masking_logits = tape.value(ml).to_vec();
    if let Some(&v) = feature_logits.iter().chain(&masking_logits).find(|v| !v.is_finite()) {
        let report = StepReport {
            step: 0,
            loss_total: f64::NAN,
            loss_f: f64::NAN,
            loss_m: f64::NAN,
            loss_r: f64::NAN,
            loss_a: f64::NAN,
            grad_norm: f64::NAN,
        };
        let source = NonFiniteLoss { term: "teacher", value: v.as_f64() };
        return Err(UflaError::NonFinite { step: 0, source, report: Box::new(report) });
    }
    Ok(TeacherTargets {
        feature: state.feature_center.teacher_probs(&feature_logits, tt),
        masking: state.masking_center.teacher_probs(&masking_logits, tt),
        feature_logits,
        masking_logits,
    })
}

/// Records the student side of the objective on `tape` and returns the
/// weighted total plus the four terms. `seed` fixes the mask positions.
pub fn student_objective<T: Float>(
    tape: &mut Tape<T>,
    model: &Model,
    b: &Bound,
    batch: &PretrainBatch,
    targets: &TeacherTargets<T>,
    seed: u64,
) -> Result<(Var, LossTerms<Var>)> {
    let cfg = &model.config;
    let (nv, ni) = (batch.videos.len(), batch.images.len());
    let l = cfg.encoder.tokens();
    let t = batch.videos[0].len();

    // Originals and masked copies share one forward per modality.
    let mut vids = batch.videos.clone();
    vids.extend(batch.videos.iter().copied());
    let vmask: Vec<usize> = mask_positions(nv, t * l, cfg.mask_ratio, seed)
        .into_iter()
        .map(|r| r + nv * t * l)
        .collect();
    let pv = model.pool_videos(tape, b, &vids, &vmask)?;

    let mut imgs = batch.images.clone();
    imgs.extend(batch.images.iter().copied());
    let imask: Vec<usize> = mask_positions(ni, l, cfg.mask_ratio, seed ^ 0x1)
        .into_iter()
        .map(|r| r + ni * l)
        .collect();
    let pi = model.pool_images(tape, b, &imgs, &imask)?;

    let mut local: Vec<&Image> = batch.frames.clone();
    local.extend(batch.lse.iter().map(|v| &v.crop));
    let pl = model.pool_images(tape, b, &local, &[])?;

    let ts = T::lit(cfg.student_temp);
    let k = cfg.prototypes;

    // Feature loss: frames and LSE views against teacher global views.
    let fl = model.feature_head.logits(tape, b, pl)?;
    let flp = tape.log_softmax(fl, ts)?;
    let mut pairs: Vec<(usize, usize)> = (0..nv).map(|j| (j, j)).collect();
    for (r, v) in batch.lse.iter().enumerate() {
        let teacher_row = match v.source {
            ViewSource::Video(j) => j,
            ViewSource::Image(i) => nv + i,
        };
        pairs.push((teacher_row, nv + r));
    }
    let feature = feature_loss(tape, &targets.feature, flp, &pairs)?;

    // Masking loss: masked student views against unmasked teacher views.
    let mv = tape.select_rows(pv, (nv..2 * nv).collect())?;
    let mi = tape.select_rows(pi, (ni..2 * ni).collect())?;
    let masked = tape.concat_rows(&[mv, mi])?;
    let ml = model.masking_head.logits(tape, b, masked)?;
    let mlp = tape.log_softmax(ml, ts)?;
    debug_assert_eq!(targets.masking.len(), (nv + ni) * k);
    let masking = cross_entropy_rows(tape, &targets.masking, mlp)?;

    // KoLeo over unmasked video and image embeddings.
    let uv = tape.select_rows(pv, (0..nv).collect())?;
    let ui = tape.select_rows(pi, (0..ni).collect())?;
    let all = tape.concat_rows(&[uv, ui])?;
    let koleo = koleo_loss(tape, all, T::lit(cfg.koleo_eps))?;

    // Alignment between each clip and its sampled frame.
    let ve = tape.l2_normalize(uv);
    let fr = tape.select_rows(pl, (0..nv).collect())?;
    let fe = tape.l2_normalize(fr);
    let alignment = alignment_loss(tape, ve, fe, &batch.video_ids, T::lit(cfg.align_temp))?;

    let terms = LossTerms { feature, masking, koleo, alignment };
    let total = match total_loss(tape, terms, &cfg.weights) {
        Ok(v) => v,
        Err(e) => {
            let report = StepReport::from_tape(0, tape, None, terms, f64::NAN);
            return Err(UflaError::NonFinite { step: 0, source: e, report: Box::new(report) });
        }
    };
    Ok((total, terms))
}

/// One row of the step log.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepReport {
    pub step: u64,
    pub loss_total: f64,
    pub loss_f: f64,
    pub loss_m: f64,
    pub loss_r: f64,
    pub loss_a: f64,
    pub grad_norm: f64,
}

impl StepReport {
    pub const CSV_HEADER: &'static str = "step,loss_total,loss_f,loss_m,loss_r,loss_a,grad_norm";

    fn from_tape<T: Float>(step: u64, tape: &Tape<T>, total: Option<Var>, t: LossTerms<Var>, grad_norm: f64) -> Self {
        let v = |x: Var| tape.scalar_value(x).as_f64();
        Self {
            step,
            loss_total: total.map_or(f64::NAN, v),
            loss_f: v(t.feature),
            loss_m: v(t.masking),
            loss_r: v(t.koleo),
            loss_a: v(t.alignment),
            grad_norm,
        }
    }

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{}",
            self.step, self.loss_total, self.loss_f, self.loss_m, self.loss_r, self.loss_a, self.grad_norm
        )
    }
}

/// Global L2 norm of a gradient map, accumulated in f64.
pub fn grad_norm<T: Float>(grads: &BTreeMap<String, Vec<T>>) -> f64 {
    grads
        .values()
        .flatten()
        .map(|g| {
            let x = g.as_f64();
            x * x
        })
        .sum::<f64>()
        .sqrt()
}

/// Plain SGD with global-norm clipping. Returns the pre-clip norm.
pub fn sgd_step<T: Float>(params: &mut ParamSet<T>, grads: &BTreeMap<String, Vec<T>>, lr: f64, clip: f64) -> f64 {
    let norm = grad_norm(grads);
    let scale = if norm > clip { clip / norm } else { 1.0 };
    let step = T::lit(lr * scale);
    if lr == 0.0 {
        return norm;
    }
    for (name, g) in grads {
        if let Some(p) = params.get_mut(name) {
            for (w, &gi) in p.data_mut().iter_mut().zip(g) {
                *w = *w - step * gi;
            }
        }
    }
    norm
}

/// Teacher forward, student forward/backward, SGD on the student, EMA of the
/// teacher, then the center update.
pub fn pretrain_step<T: Float>(
    model: &Model,
    state: &mut ModelState<T>,
    batch: &PretrainBatch,
    seed: u64,
) -> Result<StepReport> {
    batch.validate()?;
    let step = state.step + 1;
    let targets = match teacher_targets(model, state, batch) {
        Err(UflaError::NonFinite { source, mut report, .. }) => {
            report.step = step;
            return Err(UflaError::NonFinite { step, source, report });
        }
        other => other?,
    };

    let mut tape = Tape::new();
    let b = state.student.bind(&mut tape);
    let (total, terms) = match student_objective(&mut tape, model, &b, batch, &targets, seed) {
        Err(UflaError::NonFinite { source, mut report, .. }) => {
            report.step = step;
            return Err(UflaError::NonFinite { step, source, report });
        }
        other => other?,
    };
    let grads = tape.backward(total)?;
    let grads = state.student.collect_grads(&b, &grads);
    let gn = grad_norm(&grads);
    let report = StepReport::from_tape(step, &tape, Some(total), terms, gn);
    if !report.loss_total.is_finite() || !gn.is_finite() {
        let source = NonFiniteLoss {
            term: if report.loss_total.is_finite() { "grad_norm" } else { "total" },
            value: if report.loss_total.is_finite() { gn } else { report.loss_total },
        };
        return Err(UflaError::NonFinite { step, source, report: Box::new(report) });
    }
    drop(tape);

    sgd_step(&mut state.student, &grads, model.config.lr, model.config.clip);
    ema_update(&mut state.teacher, &state.student, T::lit(model.config.ema))?;
    state.feature_center.update(&targets.feature_logits);
    state.masking_center.update(&targets.masking_logits);
    state.step = step;
    Ok(report)
}

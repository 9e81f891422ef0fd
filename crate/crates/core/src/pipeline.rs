//! Training loops and the checkpoint layout shared by the commands.
//!
//! Checkpoint entry names:
//!
//! | entry | content |
//! |---|---|
//! | `meta.config` | configuration text (u8) |
//! | `meta.step` | optimizer steps taken (i64) |
//! | `student.<param>` / `teacher.<param>` | encoder and resampler |
//! | `head.student.<param>` / `head.teacher.<param>` | projection heads |
//! | `head.center.feature`, `head.center.masking` | teacher centers |
//! | `classifier.weight` | identity classifier (fine-tuned only) |

use crate::data::{sample_pretrain_batch, DataError, Dataset};
use crate::eval::{self, EvalError, FinetuneReport, CLASSIFIER, INFERENCE_PREFIXES};
use crate::io::{Config, ConfigError, Container, ContainerError, Payload};
use crate::params::ParamSet;
use crate::rng;
use crate::tensor::{Float, Tensor};
use crate::ufla::{pretrain_step, Model, ModelState, StepReport, UflaError};

#[derive(Debug, thiserror::Error)]
pub enum PipelineError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Container(#[from] ContainerError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Model(#[from] UflaError),
    #[error(transparent)]
    Eval(#[from] EvalError),
}

pub type Result<T> = std::result::Result<T, PipelineError>;

pub fn build_model(cfg: &Config) -> Result<Model> {
    Ok(Model::new(cfg.ufla.clone())?)
}

/// Fresh student/teacher state seeded by `cfg.seed`.
pub fn init_state<T: Float>(model: &Model, cfg: &Config) -> ModelState<T> {
    ModelState::new(model, cfg.seed)
}

/// Runs `steps` pre-training steps, calling `on_step` after each one.
pub fn pretrain<T: Float>(
    model: &Model,
    state: &mut ModelState<T>,
    ds: &Dataset,
    cfg: &Config,
    steps: u64,
    mut on_step: impl FnMut(&StepReport),
) -> Result<()> {
    for _ in 0..steps {
        let step = state.step + 1;
        let batch = sample_pretrain_batch(ds, cfg.train.batch_videos, cfg.train.batch_images, &cfg.lse, cfg.seed, step)?;
        let report = pretrain_step(model, state, &batch.view(ds), rng::derive_seed(&[cfg.seed, step]))?;
        on_step(&report);
    }
    Ok(())
}

/// Classifier rows needed for the labels of `ds`.
pub fn class_count(ds: &Dataset) -> usize {
    ds.clips.iter().map(|c| c.identity as usize + 1).max().unwrap_or(0)
}

pub fn finetune<T: Float>(
    model: &Model,
    params: &mut ParamSet<T>,
    ds: &Dataset,
    cfg: &Config,
    steps: u64,
    mut on_step: impl FnMut(&FinetuneReport),
) -> Result<()> {
    for step in 1..=steps {
        let r = eval::finetune_step(model, params, ds, &cfg.finetune, cfg.seed, step)?;
        on_step(&r);
    }
    Ok(())
}

fn split_head(name: &str) -> Option<&str> {
    name.strip_prefix("head.")
}

fn put_params<T: Float>(c: &mut Container, role: &str, params: &ParamSet<T>) {
    for (name, t) in params.iter() {
        let key = match split_head(name) {
            Some(rest) => format!("head.{role}.{rest}"),
            None => format!("{role}.{name}"),
        };
        c.put_tensor(key, t);
    }
}

fn put_config(c: &mut Container, cfg: &Config) {
    let text = cfg.to_string().into_bytes();
    c.put("meta.config", vec![text.len()], Payload::U8(text));
}

pub fn save_pretrained<T: Float>(cfg: &Config, state: &ModelState<T>) -> Container {
    let mut c = Container::new();
    put_config(&mut c, cfg);
    c.put("meta.step", vec![1], Payload::I64(vec![state.step as i64]));
    put_params(&mut c, "student", &state.student);
    put_params(&mut c, "teacher", &state.teacher);
    for (name, center) in [("feature", &state.feature_center), ("masking", &state.masking_center)] {
        c.put_tensor(format!("head.center.{name}"), &Tensor::new(vec![center.value.len()], center.value.clone()).expect("center"));
    }
    c
}

pub fn config_of(c: &Container) -> Result<Config> {
    let (_, bytes) = c.bytes("meta.config")?;
    let text = std::str::from_utf8(bytes).map_err(|e| ContainerError::Format(format!("meta.config: {e}")))?;
    Ok(Config::parse(text)?)
}

fn read_params<T: Float>(c: &Container, role: &str, reference: &ParamSet<T>, missing: &mut Vec<String>) -> Result<ParamSet<T>> {
    let mut out = ParamSet::new();
    for (name, r) in reference.iter() {
        let key = match split_head(name) {
            Some(rest) => format!("head.{role}.{rest}"),
            None => format!("{role}.{name}"),
        };
        if c.get(&key).is_none() {
            missing.push(key);
            continue;
        }
        let t = c.tensor::<T>(&key)?;
        if t.shape() != r.shape() {
            return Err(ContainerError::Format(format!(
                "entry {key} has extent {:?}, the configured model expects {:?}",
                t.shape(),
                r.shape()
            ))
            .into());
        }
        out.insert(name.clone(), t);
    }
    Ok(out)
}

/// Restores a pre-training state; reports every absent entry at once.
pub fn load_pretrained<T: Float>(model: &Model, c: &Container) -> Result<ModelState<T>> {
    let mut state = ModelState::<T>::new(model, 0);
    let mut missing = Vec::new();
    let mut student = read_params(c, "student", &state.student, &mut missing)?;
    let mut teacher = read_params(c, "teacher", &state.teacher, &mut missing)?;
    for (name, center) in [("feature", &mut state.feature_center), ("masking", &mut state.masking_center)] {
        match c.tensor::<T>(&format!("head.center.{name}")) {
            Ok(t) => center.value = t.into_data(),
            Err(_) => missing.push(format!("head.center.{name}")),
        }
    }
    let step = c.i64s("meta.step").map(|v| v.first().copied().unwrap_or(0));
    if step.is_err() {
        missing.push("meta.step".into());
    }
    if !missing.is_empty() {
        return Err(ContainerError::Missing(missing).into());
    }
    student.set_trainable(true);
    teacher.set_trainable(false);
    state.student = student;
    state.teacher = teacher;
    state.step = step.unwrap_or(0) as u64;
    Ok(state)
}

/// Freshly initialized inference parameters (`encoder.*`, `resampler.*`).
pub fn inference_params<T: Float>(model: &Model) -> ParamSet<T> {
    model
        .init::<T>(0)
        .iter()
        .filter(|(n, _)| INFERENCE_PREFIXES.iter().any(|p| n.starts_with(p)))
        .map(|(n, t)| (n.clone(), t.clone()))
        .collect()
}

/// The teacher's inference parameters from a pre-trained or fine-tuned
/// checkpoint. Missing entries are all listed.
pub fn load_teacher<T: Float>(model: &Model, c: &Container) -> Result<ParamSet<T>> {
    let mut missing = Vec::new();
    let mut p = read_params(c, "teacher", &inference_params::<T>(model), &mut missing)?;
    p.set_trainable(false);
    if !missing.is_empty() {
        return Err(ContainerError::Missing(missing).into());
    }
    Ok(p)
}

/// Fine-tuned checkpoint: config, teacher inference params and classifier.
pub fn save_finetuned<T: Float>(cfg: &Config, params: &ParamSet<T>) -> Container {
    let mut c = Container::new();
    put_config(&mut c, cfg);
    for (name, t) in params.iter() {
        if name == CLASSIFIER {
            c.put_tensor(CLASSIFIER, t);
        } else {
            c.put_tensor(format!("teacher.{name}"), t);
        }
    }
    c
}

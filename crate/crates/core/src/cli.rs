//! Command implementations behind the `unireid` binary.
//!
//! Each command returns a [`CliError`] carrying its process exit code:
//! 1 configuration or precondition, 2 I/O, 3 non-finite loss, 4 missing
//! checkpoint entries, 5 unsatisfiable protocol, 6 bad sample index.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use crate::data::{generate_dataset, DataError, Dataset, GenSpec};
use crate::encoder::export_attention;
use crate::eval::{self, EvalError, Protocol};
use crate::io::{Config, ConfigError, Container, ContainerError};
use crate::pipeline::{self as pl, PipelineError};
use crate::ufla::{StepReport, UflaError};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CliError {
    pub code: i32,
    pub message: String,
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.message)
    }
}

impl std::error::Error for CliError {}

pub const EXIT_CONFIG: i32 = 1;
pub const EXIT_IO: i32 = 2;
pub const EXIT_NAN: i32 = 3;
pub const EXIT_MISSING: i32 = 4;
pub const EXIT_PROTOCOL: i32 = 5;
pub const EXIT_INDEX: i32 = 6;

fn fail(code: i32, message: impl Into<String>) -> CliError {
    CliError { code, message: message.into() }
}

impl From<ConfigError> for CliError {
    fn from(e: ConfigError) -> Self {
        let code = if matches!(e, ConfigError::Io { .. }) { EXIT_IO } else { EXIT_CONFIG };
        fail(code, e.to_string())
    }
}

impl From<ContainerError> for CliError {
    fn from(e: ContainerError) -> Self {
        let code = if matches!(e, ContainerError::Missing(_)) { EXIT_MISSING } else { EXIT_IO };
        fail(code, e.to_string())
    }
}

impl From<EvalError> for CliError {
    fn from(e: EvalError) -> Self {
        let code = match e {
            EvalError::Protocol(_) | EvalError::MissingIdentities(_) | EvalError::Sampling(_) => EXIT_PROTOCOL,
            EvalError::NonFinite { .. } => EXIT_NAN,
            _ => EXIT_CONFIG,
        };
        fail(code, e.to_string())
    }
}

impl From<PipelineError> for CliError {
    fn from(e: PipelineError) -> Self {
        match e {
            PipelineError::Config(e) => e.into(),
            PipelineError::Container(e) => e.into(),
            PipelineError::Eval(e) => e.into(),
            PipelineError::Data(DataError::Container(e)) => fail(EXIT_IO, format!("dataset: {e}")),
            PipelineError::Data(e) => fail(EXIT_CONFIG, e.to_string()),
            PipelineError::Model(UflaError::NonFinite { step, source, report }) => fail(
                EXIT_NAN,
                format!(
                    "non-finite {} ({}) at step {step}\n{}\n{}",
                    source.term,
                    source.value,
                    StepReport::CSV_HEADER,
                    report.csv_row()
                ),
            ),
            PipelineError::Model(e) => fail(EXIT_CONFIG, e.to_string()),
        }
    }
}

fn io_err(path: &Path, e: std::io::Error) -> CliError {
    fail(EXIT_IO, format!("{}: {e}", path.display()))
}

fn write(path: &Path, bytes: &[u8]) -> Result<(), CliError> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
    }
    fs::write(path, bytes).map_err(|e| io_err(path, e))
}

fn load_dataset(path: &Path) -> Result<Dataset, CliError> {
    let c = Container::load(path).map_err(|e| match e {
        ContainerError::Missing(m) => fail(EXIT_IO, format!("{}: missing {}", path.display(), m.join(", "))),
        other => other.into(),
    })?;
    Dataset::from_container(&c).map_err(|e| fail(EXIT_IO, format!("{}: {e}", path.display())))
}

fn load_checkpoint(path: &Path) -> Result<Container, CliError> {
    match Container::load(path) {
        Err(ContainerError::Missing(m)) => Err(fail(EXIT_IO, format!("{}: {}", path.display(), m.join(", ")))),
        other => Ok(other?),
    }
}

/// Dataset extents and clip lengths must fit the configured encoder.
pub fn check_dataset(cfg: &Config, ds: &Dataset) -> Result<(), CliError> {
    let e = &cfg.ufla.encoder;
    if ds.is_empty() {
        return Err(fail(EXIT_CONFIG, "dataset has no clips"));
    }
    for c in &ds.clips {
        if c.image.extent() != e.image_extent || c.video.extent() != e.frame_extent {
            return Err(fail(
                EXIT_CONFIG,
                format!(
                    "clip {} has image {:?} / frames {:?}; configuration expects {:?} / {:?}",
                    c.index,
                    c.image.extent(),
                    c.video.extent(),
                    e.image_extent,
                    e.frame_extent
                ),
            ));
        }
        if c.video.len() > e.frames {
            return Err(fail(EXIT_CONFIG, format!("clip {} has {} frames; at most {} configured", c.index, c.video.len(), e.frames)));
        }
    }
    Ok(())
}

#[derive(Debug, Clone)]
pub struct GenDataArgs {
    pub seed: u64,
    pub identities: u32,
    pub clips_per_id: u32,
    pub frames: usize,
    pub clip_offset: u32,
    pub out: PathBuf,
}

pub fn gen_data(a: &GenDataArgs) -> Result<(), CliError> {
    if a.identities == 0 || a.clips_per_id == 0 || a.frames == 0 {
        return Err(fail(EXIT_CONFIG, "identities, clips per identity and frames must be positive"));
    }
    let ds = generate_dataset(&GenSpec {
        seed: a.seed,
        identities: a.identities,
        clips_per_id: a.clips_per_id,
        frames: a.frames,
        clip_offset: a.clip_offset,
        ..GenSpec::default()
    });
    write(&a.out, &ds.to_container().to_bytes())
}

#[derive(Debug, Clone)]
pub struct PretrainArgs {
    pub config: Option<PathBuf>,
    pub data: PathBuf,
    pub steps: u64,
    pub seed: Option<u64>,
    pub out: PathBuf,
    /// Step CSV; defaults to `<out>.steps.csv`.
    pub log: Option<PathBuf>,
}

fn config_from(path: Option<&Path>) -> Result<Config, CliError> {
    Ok(match path {
        Some(p) => Config::load(p)?,
        None => Config::default(),
    })
}

pub fn pretrain(a: &PretrainArgs) -> Result<(), CliError> {
    let mut cfg = config_from(a.config.as_deref())?;
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    let model = pl::build_model(&cfg)?;
    let ds = load_dataset(&a.data)?;
    check_dataset(&cfg, &ds)?;
    if ds.len() < cfg.train.batch_videos.max(cfg.train.batch_images) {
        return Err(fail(EXIT_CONFIG, format!("dataset has {} clips; a batch needs {}", ds.len(), cfg.train.batch_videos.max(cfg.train.batch_images))));
    }
    let log = a.log.clone().unwrap_or_else(|| {
        let mut p = a.out.clone().into_os_string();
        p.push(".steps.csv");
        PathBuf::from(p)
    });
    let mut csv = String::from(StepReport::CSV_HEADER);
    csv.push('\n');
    let mut state = pl::init_state::<f32>(&model, &cfg);
    let run = pl::pretrain(&model, &mut state, &ds, &cfg, a.steps, |r| {
        let _ = writeln!(csv, "{}", r.csv_row());
    });
    write(&log, csv.as_bytes())?;
    run?;
    write(&a.out, &pl::save_pretrained(&cfg, &state).to_bytes())
}

#[derive(Debug, Clone)]
pub struct FinetuneArgs {
    pub ckpt: PathBuf,
    /// Defaults to the configuration stored in the checkpoint.
    pub config: Option<PathBuf>,
    pub data: PathBuf,
    pub steps: u64,
    pub out: PathBuf,
}

pub fn finetune(a: &FinetuneArgs) -> Result<(), CliError> {
    let ckpt = load_checkpoint(&a.ckpt)?;
    let cfg = match &a.config {
        Some(p) => Config::load(p)?,
        None => pl::config_of(&ckpt)?,
    };
    let model = pl::build_model(&cfg)?;
    let ds = load_dataset(&a.data)?;
    check_dataset(&cfg, &ds)?;
    let teacher = pl::load_teacher::<f32>(&model, &ckpt)?;
    let mut params = eval::finetune_params(&teacher, pl::class_count(&ds), cfg.ufla.encoder.d, cfg.seed);
    pl::finetune(&model, &mut params, &ds, &cfg, a.steps, |_| {})?;
    write(&a.out, &pl::save_finetuned(&cfg, &params).to_bytes())
}

#[derive(Debug, Clone)]
pub struct EvalArgs {
    pub ckpt: PathBuf,
    pub data: PathBuf,
    pub protocol: Protocol,
    pub far: f64,
    pub out: PathBuf,
}

pub fn evaluate(a: &EvalArgs) -> Result<(), CliError> {
    if !(a.far > 0.0 && a.far <= 1.0) {
        return Err(fail(EXIT_CONFIG, format!("FAR target {} outside (0, 1]", a.far)));
    }
    let ckpt = load_checkpoint(&a.ckpt)?;
    let cfg = pl::config_of(&ckpt)?;
    let model = pl::build_model(&cfg)?;
    let ds = load_dataset(&a.data)?;
    check_dataset(&cfg, &ds)?;
    let params = pl::load_teacher::<f32>(&model, &ckpt)?;
    let m = eval::evaluate(&model, &params, &ds, a.protocol, a.far)?;
    write(&a.out, m.csv().as_bytes())
}

#[derive(Debug, Clone)]
pub struct VizArgs {
    pub ckpt: PathBuf,
    pub data: PathBuf,
    pub index: usize,
    pub layer: usize,
    pub out: PathBuf,
}

pub fn viz_attn(a: &VizArgs) -> Result<(), CliError> {
    let ckpt = load_checkpoint(&a.ckpt)?;
    let cfg = pl::config_of(&ckpt)?;
    let model = pl::build_model(&cfg)?;
    let ds = load_dataset(&a.data)?;
    check_dataset(&cfg, &ds)?;
    if a.index >= ds.len() {
        return Err(fail(EXIT_INDEX, format!("index {} out of range for {} clips", a.index, ds.len())));
    }
    if a.layer >= cfg.ufla.encoder.depth {
        return Err(fail(EXIT_INDEX, format!("layer {} out of range for depth {}", a.layer, cfg.ufla.encoder.depth)));
    }
    let params = pl::load_teacher::<f32>(&model, &ckpt)?;
    export_attention(&model.encoder, &params, &ds.clips[a.index].image, a.layer, Some(&a.out))
        .map_err(|e| fail(EXIT_IO, e.to_string()))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exit_codes() {
        assert_eq!(CliError::from(ContainerError::Missing(vec!["x".into()])).code, EXIT_MISSING);
        assert_eq!(CliError::from(ContainerError::Format("x".into())).code, EXIT_IO);
        assert_eq!(CliError::from(ConfigError::Invalid("x".into())).code, EXIT_CONFIG);
        assert_eq!(CliError::from(EvalError::Protocol("x".into())).code, EXIT_PROTOCOL);
    }
}

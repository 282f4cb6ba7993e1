use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::Context;
use sparsed::toydlm::synthetic_prompt;
use sparsed::{ScheduleMode, SparseDConfig, ToyModel, ToyModelConfig};

use crate::args::{BaselineArgs, ModeName, ModelArgs, SequenceArgs, SparseArgs};

pub const DEFAULT_WINDOW: usize = 64;
pub const DEFAULT_SINK: f64 = 0.1;

/// Usage errors exit with 2, everything else with 1.
#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Runtime(anyhow::Error),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Runtime(_) => 1,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Usage(m) => write!(f, "usage error: {m}"),
            CliError::Runtime(e) => write!(f, "error: {e:#}"),
        }
    }
}

impl From<anyhow::Error> for CliError {
    fn from(e: anyhow::Error) -> Self {
        CliError::Runtime(e)
    }
}

impl From<sparsed::Error> for CliError {
    fn from(e: sparsed::Error) -> Self {
        CliError::Runtime(e.into())
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Runtime(e.into())
    }
}

pub type CliResult<T> = std::result::Result<T, CliError>;

pub fn usage<T>(msg: impl Into<String>) -> CliResult<T> {
    Err(CliError::Usage(msg.into()))
}

pub fn sparse_config(args: &SparseArgs) -> CliResult<SparseDConfig> {
    SparseDConfig::new(args.rho, args.skip, args.block_size, args.steps)
        .map_err(|e| CliError::Usage(e.to_string()))
}

pub fn load_model(args: &ModelArgs, min_len: usize) -> CliResult<ToyModel> {
    let mut config = match &args.model_config {
        Some(path) => {
            let text = fs::read_to_string(path)
                .with_context(|| format!("reading model config {}", path.display()))?;
            ToyModelConfig::from_kv(&text).map_err(|e| CliError::Usage(e.to_string()))?
        }
        None => ToyModelConfig::default(),
    };
    config.seed = args.seed;
    if min_len > config.max_len {
        return usage(format!(
            "sequence length {min_len} exceeds the model's max_len {}",
            config.max_len
        ));
    }
    Ok(ToyModel::init(config)?)
}

pub fn schedule_mode(mode: ModeName, baseline: &BaselineArgs) -> CliResult<ScheduleMode> {
    let window_mode = matches!(mode, ModeName::Window | ModeName::Streaming);
    if baseline.window.is_some() && !window_mode {
        return usage(format!("--window has no effect in {} mode", mode.as_str()));
    }
    if baseline.sink.is_some() && mode != ModeName::Streaming {
        return usage(format!("--sink has no effect in {} mode", mode.as_str()));
    }
    let window = baseline.window.unwrap_or(DEFAULT_WINDOW);
    let sink = baseline.sink.unwrap_or(DEFAULT_SINK);
    let built = match mode {
        ModeName::Dense => Ok(ScheduleMode::Dense),
        ModeName::Sparsed => Ok(ScheduleMode::SparseD),
        ModeName::AlwaysSparse => Ok(ScheduleMode::AlwaysSparse),
        ModeName::Recompute => Ok(ScheduleMode::RecomputeEveryStep),
        ModeName::Joint => Ok(ScheduleMode::JointSelection),
        ModeName::Window => ScheduleMode::sliding_window(window),
        ModeName::Streaming => ScheduleMode::streaming(window, sink),
    };
    built.map_err(|e| CliError::Usage(e.to_string()))
}

pub fn read_prompt_file(path: &Path) -> CliResult<Vec<u32>> {
    let text = fs::read_to_string(path)
        .with_context(|| format!("reading prompt file {}", path.display()))?;
    text.split_whitespace()
        .map(|t| {
            t.parse::<u32>()
                .map_err(|_| CliError::Usage(format!("prompt file: {t:?} is not a token id")))
        })
        .collect()
}

/// Prompt tokens and the number of positions to generate.
pub fn resolve_prompt(seq: &SequenceArgs, config: &ToyModelConfig) -> CliResult<(Vec<u32>, usize)> {
    let prompt = match &seq.prompt_file {
        Some(path) => {
            let prompt = read_prompt_file(path)?;
            if let Some(p) = seq.prefill_len {
                if p != prompt.len() {
                    return usage(format!(
                        "--prefill-len {p} disagrees with the prompt file's {} tokens",
                        prompt.len()
                    ));
                }
            }
            if let Some(&bad) = prompt.iter().find(|&&t| t >= config.mask_token()) {
                return usage(format!(
                    "prompt token {bad} is outside the vocabulary (mask token is {})",
                    config.mask_token()
                ));
            }
            prompt
        }
        None => {
            let p = seq.prefill_len.unwrap_or(seq.seq_len / 2);
            synthetic_prompt(p, config.vocab_size, config.seed)
        }
    };
    if prompt.len() >= seq.seq_len {
        return usage(format!(
            "prompt length {} leaves nothing to generate in --seq-len {}",
            prompt.len(),
            seq.seq_len
        ));
    }
    let gen_len = seq.seq_len - prompt.len();
    Ok((prompt, gen_len))
}

/// Collects files written under one output directory.
pub struct OutputDir {
    root: PathBuf,
    files: Vec<String>,
}

impl OutputDir {
    pub fn create(root: &Path) -> CliResult<Self> {
        fs::create_dir_all(root)
            .with_context(|| format!("creating output directory {}", root.display()))?;
        Ok(Self {
            root: root.to_path_buf(),
            files: Vec::new(),
        })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn write(&mut self, rel: &str, bytes: impl AsRef<[u8]>) -> CliResult<()> {
        let path = self.root.join(rel);
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent)?;
        }
        fs::write(&path, bytes).with_context(|| format!("writing {}", path.display()))?;
        self.files.push(rel.to_string());
        Ok(())
    }

    pub fn files(&self) -> &[String] {
        &self.files
    }
}

pub fn tokens_text(tokens: &[u32]) -> String {
    let mut s = tokens
        .iter()
        .map(u32::to_string)
        .collect::<Vec<_>>()
        .join(" ");
    s.push('\n');
    s
}

pub fn mean(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        return 0.0;
    }
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Sample standard deviation; zero for fewer than two values.
pub fn stddev(xs: &[f64]) -> f64 {
    if xs.len() < 2 {
        return 0.0;
    }
    let m = mean(xs);
    (xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (xs.len() - 1) as f64).sqrt()
}

pub fn median(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        return 0.0;
    }
    let mut v = xs.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn summary_statistics() {
        let xs = [2.0, 4.0, 4.0, 4.0, 5.0, 5.0, 7.0, 9.0];
        assert_eq!(mean(&xs), 5.0);
        assert!((stddev(&xs) - (32.0f64 / 7.0).sqrt()).abs() < 1e-12);
        assert_eq!(median(&xs), 4.5);
        assert_eq!(median(&[3.0, 1.0, 2.0]), 2.0);
        assert_eq!(stddev(&[1.0]), 0.0);
    }

    #[test]
    fn tokens_are_space_separated() {
        assert_eq!(tokens_text(&[3, 10, 0]), "3 10 0\n");
    }
}

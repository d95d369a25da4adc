//! Text checkpoint format, byte-stable across runs and platforms:
//!
//! ```text
//! REMRG-CKPT v1
//! d_model=8;stack_levels=2;vocab_size=20;max_len=16;feature_dim_in=10;n_regions=4
//! <name> <rank> <d1> <d2> ...
//! <v1> <v2> ...            (row-major, shortest round-trip decimals)
//! ```
//!
//! One name/shape line plus one value line per parameter, in the model's
//! canonical parameter order.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use crate::model::{init_model, ModelConfig, ModelParams};

pub const CHECKPOINT_MAGIC: &str = "REMRG-CKPT v1";

#[derive(Clone, Debug, PartialEq)]
pub enum CheckpointError {
    Io { path: PathBuf, message: String },
    Parse { path: PathBuf, line: usize, message: String },
    Incompatible(String),
}

impl fmt::Display for CheckpointError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CheckpointError::Io { path, message } => {
                write!(f, "io error on {}: {}", path.display(), message)
            }
            CheckpointError::Parse { path, line, message } => {
                write!(f, "{}:{}: {}", path.display(), line, message)
            }
            CheckpointError::Incompatible(msg) => write!(f, "incompatible checkpoint: {}", msg),
        }
    }
}

impl std::error::Error for CheckpointError {}

pub type CheckpointResult<T> = Result<T, CheckpointError>;

fn io_err(path: &Path, e: impl fmt::Display) -> CheckpointError {
    CheckpointError::Io {
        path: path.to_path_buf(),
        message: e.to_string(),
    }
}

fn parse_err(path: &Path, line: usize, message: impl Into<String>) -> CheckpointError {
    CheckpointError::Parse {
        path: path.to_path_buf(),
        line,
        message: message.into(),
    }
}

fn config_line(cfg: &ModelConfig) -> String {
    format!(
        "d_model={};stack_levels={};vocab_size={};max_len={};feature_dim_in={};n_regions={}",
        cfg.d_model, cfg.stack_levels, cfg.vocab_size, cfg.max_len, cfg.feature_dim_in, cfg.n_regions
    )
}

fn parse_config_line(path: &Path, line: &str) -> CheckpointResult<ModelConfig> {
    let mut cfg = ModelConfig::default();
    for piece in line.split(';') {
        let (key, value) = piece
            .split_once('=')
            .ok_or_else(|| parse_err(path, 2, format!("bad config entry {:?}", piece)))?;
        let value: usize = value
            .parse()
            .map_err(|_| parse_err(path, 2, format!("bad value in {:?}", piece)))?;
        match key {
            "d_model" => cfg.d_model = value,
            "stack_levels" => cfg.stack_levels = value,
            "vocab_size" => cfg.vocab_size = value,
            "max_len" => cfg.max_len = value,
            "feature_dim_in" => cfg.feature_dim_in = value,
            "n_regions" => cfg.n_regions = value,
            other => return Err(parse_err(path, 2, format!("unknown config key {:?}", other))),
        }
    }
    Ok(cfg)
}

pub fn save_checkpoint(path: &Path, model: &ModelParams) -> CheckpointResult<()> {
    let mut out = String::new();
    out.push_str(CHECKPOINT_MAGIC);
    out.push('\n');
    out.push_str(&config_line(&model.config));
    out.push('\n');
    for (name, param) in model.param_names().iter().zip(model.params().iter()) {
        out.push_str(name);
        out.push(' ');
        out.push_str(&param.shape.len().to_string());
        for d in &param.shape {
            out.push(' ');
            out.push_str(&d.to_string());
        }
        out.push('\n');
        let mut first = true;
        for v in &param.values {
            if !first {
                out.push(' ');
            }
            out.push_str(&format!("{}", v));
            first = false;
        }
        out.push('\n');
    }
    fs::write(path, out).map_err(|e| io_err(path, e))
}

pub fn load_checkpoint(path: &Path) -> CheckpointResult<ModelParams> {
    let text = fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    let mut lines = text.lines().enumerate();
    let (_, magic) = lines
        .next()
        .ok_or_else(|| parse_err(path, 1, "empty checkpoint"))?;
    if magic != CHECKPOINT_MAGIC {
        return Err(parse_err(
            path,
            1,
            format!("expected {:?}, found {:?}", CHECKPOINT_MAGIC, magic),
        ));
    }
    let (_, cfg_line) = lines
        .next()
        .ok_or_else(|| parse_err(path, 2, "missing config line"))?;
    let config = parse_config_line(path, cfg_line)?;
    config
        .validate()
        .map_err(|e| CheckpointError::Incompatible(e.to_string()))?;

    // build the skeleton (ids and shapes), then overwrite every value
    let mut model =
        init_model(&config, 0).map_err(|e| CheckpointError::Incompatible(e.to_string()))?;
    let names = model.param_names();
    let mut seen = vec![false; names.len()];

    loop {
        let (idx, header) = match lines.next() {
            Some(x) => x,
            None => break,
        };
        if header.trim().is_empty() {
            continue;
        }
        let mut parts = header.split_whitespace();
        let name = parts
            .next()
            .ok_or_else(|| parse_err(path, idx + 1, "missing parameter name"))?;
        let rank: usize = parts
            .next()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| parse_err(path, idx + 1, "missing rank"))?;
        let shape: Vec<usize> = parts
            .map(|s| s.parse())
            .collect::<Result<_, _>>()
            .map_err(|_| parse_err(path, idx + 1, "bad dimension"))?;
        if shape.len() != rank {
            return Err(parse_err(path, idx + 1, "rank does not match dimension count"));
        }
        let slot = names
            .iter()
            .position(|n| n == name)
            .ok_or_else(|| CheckpointError::Incompatible(format!("unknown parameter {:?}", name)))?;
        if seen[slot] {
            return Err(CheckpointError::Incompatible(format!(
                "parameter {:?} appears twice",
                name
            )));
        }
        seen[slot] = true;

        let (vidx, value_line) = lines
            .next()
            .ok_or_else(|| parse_err(path, idx + 2, "missing value line"))?;
        let values: Vec<f64> = value_line
            .split_whitespace()
            .map(|s| s.parse())
            .collect::<Result<_, _>>()
            .map_err(|_| parse_err(path, vidx + 1, "bad float"))?;

        let mut params = model.params_mut();
        let p = &mut params[slot];
        if p.shape != shape {
            return Err(CheckpointError::Incompatible(format!(
                "parameter {:?}: checkpoint shape {:?} vs model shape {:?}",
                name, shape, p.shape
            )));
        }
        if values.len() != p.values.len() {
            return Err(parse_err(
                path,
                vidx + 1,
                format!("expected {} values, found {}", p.values.len(), values.len()),
            ));
        }
        p.values = values;
    }
    if let Some(missing) = seen.iter().position(|&s| !s) {
        return Err(CheckpointError::Incompatible(format!(
            "parameter {:?} missing from checkpoint",
            names[missing]
        )));
    }
    Ok(model)
}

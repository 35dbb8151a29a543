//! Run-config file: UTF-8 `key = value` lines with `#` comments.
//!
//! Every model/training field can be set here; unset keys keep their
//! defaults. Unknown keys are rejected so a typo cannot silently train the
//! wrong model. Command-line flags override file values.

use std::path::{Path, PathBuf};

use mamapp::model::MamAppConfig;

/// Parsed run-config: the model/training config plus run plumbing.
#[derive(Clone, Debug)]
pub struct RunConfigFile {
    pub config: MamAppConfig,
    /// Dataset root (`data = DIR`).
    pub data: Option<PathBuf>,
    /// Output directory (`out = DIR`).
    pub out: Option<PathBuf>,
    /// Data-loading threads (`workers = N`).
    pub workers: Option<usize>,
    /// True when the file set `seed` explicitly (wins over MAMAPP_SEED).
    pub seed_from_file: bool,
}

impl RunConfigFile {
    pub fn parse_file(path: &Path) -> Result<Self, String> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| format!("reading {}: {e}", path.display()))?;
        Self::parse(&text).map_err(|e| format!("{}: {e}", path.display()))
    }

    pub fn parse(text: &str) -> Result<Self, String> {
        let mut file = RunConfigFile {
            config: MamAppConfig::default(),
            data: None,
            out: None,
            workers: None,
            seed_from_file: false,
        };
        for (line_no, raw) in text.lines().enumerate() {
            let line = match raw.find('#') {
                Some(pos) => &raw[..pos],
                None => raw,
            }
            .trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| format!("line {}: expected `key = value`, got '{raw}'", line_no + 1))?;
            let (key, value) = (key.trim(), value.trim());
            file.apply(key, value)
                .map_err(|e| format!("line {}: {e}", line_no + 1))?;
        }
        Ok(file)
    }

    fn apply(&mut self, key: &str, value: &str) -> Result<(), String> {
        let c = &mut self.config;
        match key {
            "img_size" => c.img_size = parse(key, value)?,
            "in_channels" => c.in_channels = parse(key, value)?,
            "stem_channels" => c.stem_channels = parse_pair(key, value)?,
            "stem_kernel" => c.stem_kernel = parse(key, value)?,
            "stem_strides" => c.stem_strides = parse_pair(key, value)?,
            "stem_padding" => c.stem_padding = parse(key, value)?,
            "num_blocks" => c.num_blocks = parse(key, value)?,
            "d_model" => c.d_model = parse(key, value)?,
            "d_inner" => c.d_inner = parse(key, value)?,
            "d_state" => c.d_state = parse(key, value)?,
            "dt_rank" => c.dt_rank = parse(key, value)?,
            "conv1d_kernel" => c.conv1d_kernel = parse(key, value)?,
            "num_classes" => c.num_classes = parse(key, value)?,
            "class_names" => {
                c.class_names = Some(value.split(',').map(|s| s.trim().to_string()).collect())
            }
            "label_smoothing" => c.label_smoothing = parse(key, value)?,
            "lr" => c.lr = parse(key, value)?,
            "weight_decay" => c.weight_decay = parse(key, value)?,
            "batch_size" => c.batch_size = parse(key, value)?,
            "epochs" => c.epochs = parse(key, value)?,
            "seed" => {
                c.seed = parse(key, value)?;
                self.seed_from_file = true;
            }
            "augment" => c.augment = parse_bool(key, value)?,
            "normalize_mean" => c.normalize_mean = Some(parse_triple(key, value)?),
            "normalize_std" => c.normalize_std = Some(parse_triple(key, value)?),
            "early_stop_val_acc" => c.early_stop_val_acc = Some(parse(key, value)?),
            "early_stop_train_loss" => c.early_stop_train_loss = Some(parse(key, value)?),
            "data" => self.data = Some(PathBuf::from(value)),
            "out" => self.out = Some(PathBuf::from(value)),
            "workers" => self.workers = Some(parse(key, value)?),
            other => return Err(format!("unknown config key '{other}'")),
        }
        Ok(())
    }
}

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T, String> {
    value
        .parse()
        .map_err(|_| format!("bad value '{value}' for key '{key}'"))
}

fn parse_bool(key: &str, value: &str) -> Result<bool, String> {
    match value {
        "true" | "1" | "yes" | "on" => Ok(true),
        "false" | "0" | "no" | "off" => Ok(false),
        _ => Err(format!("bad value '{value}' for key '{key}' (expected true/false)")),
    }
}

fn parse_pair(key: &str, value: &str) -> Result<(usize, usize), String> {
    let parts: Vec<&str> = value.split(',').map(str::trim).collect();
    if parts.len() != 2 {
        return Err(format!("key '{key}' expects two comma-separated values, got '{value}'"));
    }
    Ok((parse(key, parts[0])?, parse(key, parts[1])?))
}

fn parse_triple(key: &str, value: &str) -> Result<[f64; 3], String> {
    let parts: Vec<&str> = value.split(',').map(str::trim).collect();
    if parts.len() != 3 {
        return Err(format!("key '{key}' expects three comma-separated values, got '{value}'"));
    }
    Ok([parse(key, parts[0])?, parse(key, parts[1])?, parse(key, parts[2])?])
}

//! Flat key-value training-config files.
//!
//! Grammar: one `key = value` pair per line; `#` starts a comment; blank
//! lines are ignored. Keys are dotted paths into the training config
//! (e.g. `model.d_model`, `optimizer.lr`, `mask.kind`). Values are plain
//! numbers, booleans, or the schedule/mode keywords. Unknown keys are
//! rejected so typos cannot silently train the wrong thing.
//!
//! ```text
//! # example
//! mode = laver
//! steps = 2000
//! seed = 3
//! model.d_model = 64
//! mask.kind = cosine
//! mask.target_ratio = 0.05
//! optimizer.lr = 2e-4
//! ```
//!
//! `mask.total_steps` and `ema.total_steps` follow `steps` automatically.

use crate::error::{Error, Result};
use crate::masking::ScheduleKind;
use crate::train::{Mode, TrainConfig};

pub fn parse_config(text: &str) -> Result<TrainConfig> {
    let mut config = TrainConfig::default();
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (key, value) = line.split_once('=').ok_or_else(|| {
            Error::Config(format!("line {}: expected 'key = value', got '{raw}'", lineno + 1))
        })?;
        apply(&mut config, key.trim(), value.trim())
            .map_err(|e| Error::Config(format!("line {}: {e}", lineno + 1)))?;
    }
    let config = config.normalize();
    config.validate()?;
    Ok(config)
}

pub fn load_config(path: impl AsRef<std::path::Path>) -> Result<TrainConfig> {
    let path = path.as_ref();
    let text =
        std::fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    parse_config(&text)
}

fn apply(c: &mut TrainConfig, key: &str, value: &str) -> Result<()> {
    fn num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
        value
            .parse::<T>()
            .map_err(|_| Error::Config(format!("bad value '{value}' for {key}")))
    }
    match key {
        "mode" => c.mode = Mode::parse(value)?,
        "steps" => c.steps = num(key, value)?,
        "batch_size" => c.batch_size = num(key, value)?,
        "seed" => c.seed = num(key, value)?,
        "log_every" => c.log_every = num(key, value)?,
        "diagnostics_every" => c.diagnostics_every = num(key, value)?,
        "probe_size" => c.probe_size = num(key, value)?,
        "packed_images" => c.packed_images = num(key, value)?,
        "packed_len" => c.packed_len = num(key, value)?,
        "timing" => c.timing = num(key, value)?,

        "model.n_layers" => c.model.n_layers = num(key, value)?,
        "model.d_model" => c.model.d_model = num(key, value)?,
        "model.n_heads" => c.model.n_heads = num(key, value)?,
        "model.vocab_size" => c.model.vocab_size = num(key, value)?,
        "model.visual_logit_dim" => c.model.visual_logit_dim = num(key, value)?,
        "model.vision_head_hidden" => c.model.vision_head_hidden = num(key, value)?,
        "model.patch_size" => c.model.patch_size = num(key, value)?,
        "model.grid_rows" => c.model.grid_rows = num(key, value)?,
        "model.grid_cols" => c.model.grid_cols = num(key, value)?,
        "model.channels" => c.model.channels = num(key, value)?,

        "data.colors" => c.data.colors = num(key, value)?,
        "data.noise_std" => c.data.noise_std = num(key, value)?,

        "mask.kind" => {
            c.mask.kind = match value {
                "constant" => ScheduleKind::Constant,
                "cosine" => ScheduleKind::Cosine,
                other => return Err(Error::Config(format!("bad mask.kind '{other}'"))),
            }
        }
        "mask.target_ratio" => c.mask.target_ratio = num(key, value)?,

        "ema.decay" => c.ema.decay = num(key, value)?,
        "ema.schedule" => {
            c.ema.schedule = match value {
                "constant" => crate::ema::EmaScheduleKind::Constant,
                "cosine_to_one" | "cosine" => crate::ema::EmaScheduleKind::CosineToOne,
                other => return Err(Error::Config(format!("bad ema.schedule '{other}'"))),
            }
        }
        "ema.update_every" => c.ema.update_every = num(key, value)?,

        "weights.w_mim" => c.weights.w_mim = num(key, value)?,
        "weights.w_cga" => c.weights.w_cga = num(key, value)?,

        "temps.tau_teacher" => c.temps.tau_teacher = num(key, value)?,
        "temps.tau_student" => c.temps.tau_student = num(key, value)?,

        "optimizer.lr" => c.optimizer.lr = num(key, value)?,
        "optimizer.beta1" => c.optimizer.beta1 = num(key, value)?,
        "optimizer.beta2" => c.optimizer.beta2 = num(key, value)?,
        "optimizer.weight_decay" => c.optimizer.weight_decay = num(key, value)?,
        "optimizer.warmup_ratio" => c.optimizer.warmup_ratio = num(key, value)?,

        other => return Err(Error::Config(format!("unknown key '{other}'"))),
    }
    Ok(())
}

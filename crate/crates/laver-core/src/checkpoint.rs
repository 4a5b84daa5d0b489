//! LVCK checkpoint format.
//!
//! Layout (little-endian):
//!   magic    b"LVCK"
//!   version  u16 (currently 1)
//!   meta     u32 byte length + JSON (train config + teacher bookkeeping)
//!   tensors  u32 count, then per tensor: u16 name length, name bytes,
//!            one LVTD blob
//!
//! Student tensors are written in the fixed parameter order; when a
//! teacher is present its tensors follow under the `teacher/` namespace.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::ema::TeacherState;
use crate::error::{Error, Result};
use crate::model::ModelParams;
use crate::tensor::{read_lvtd_from, write_lvtd_to, Tensor};
use crate::train::TrainConfig;

pub const LVCK_MAGIC: &[u8; 4] = b"LVCK";
pub const LVCK_VERSION: u16 = 1;

#[derive(Serialize, Deserialize)]
struct CheckpointMeta {
    config: TrainConfig,
    teacher_last_update: Option<usize>,
}

pub fn save_checkpoint(
    path: impl AsRef<Path>,
    config: &TrainConfig,
    params: &ModelParams,
    teacher: Option<&TeacherState>,
) -> Result<()> {
    let path = path.as_ref();
    let err = |e| Error::io(path.display().to_string(), e);
    let mut f = std::io::BufWriter::new(std::fs::File::create(path).map_err(err)?);
    f.write_all(LVCK_MAGIC).map_err(err)?;
    f.write_all(&LVCK_VERSION.to_le_bytes()).map_err(err)?;

    let meta = CheckpointMeta {
        config: config.clone(),
        teacher_last_update: teacher.map(|t| t.last_update_step),
    };
    let meta_bytes = serde_json::to_vec(&meta)
        .map_err(|e| Error::Config(format!("checkpoint meta serialization: {e}")))?;
    f.write_all(&(meta_bytes.len() as u32).to_le_bytes()).map_err(err)?;
    f.write_all(&meta_bytes).map_err(err)?;

    let mut entries: Vec<(String, &Tensor)> = Vec::new();
    let mut student_refs: Vec<&Tensor> = params.tensors();
    let mut names: Vec<String> = Vec::new();
    params.for_each_tensor(|n, _| names.push(n.to_string()));
    for (name, t) in names.iter().zip(student_refs.drain(..)) {
        entries.push((name.clone(), t));
    }
    if let Some(teacher) = teacher {
        let mut tnames: Vec<String> = Vec::new();
        teacher.params.for_each_tensor(|n, _| tnames.push(format!("teacher/{n}")));
        for (name, t) in tnames.iter().zip(teacher.params.tensors()) {
            entries.push((name.clone(), t));
        }
    }

    f.write_all(&(entries.len() as u32).to_le_bytes()).map_err(err)?;
    for (name, t) in entries {
        let bytes = name.as_bytes();
        f.write_all(&(bytes.len() as u16).to_le_bytes()).map_err(err)?;
        f.write_all(bytes).map_err(err)?;
        write_lvtd_to(&mut f, t).map_err(err)?;
    }
    Ok(())
}

pub fn load_checkpoint(
    path: impl AsRef<Path>,
) -> Result<(TrainConfig, ModelParams, Option<TeacherState>)> {
    let path = path.as_ref();
    let pstr = path.display().to_string();
    let err = |e| Error::io(pstr.clone(), e);
    let bad = |details: String| Error::BadFormat {
        path: pstr.clone(),
        details,
    };
    let mut f = std::io::BufReader::new(std::fs::File::open(path).map_err(err)?);

    let mut magic = [0u8; 4];
    f.read_exact(&mut magic).map_err(err)?;
    if &magic != LVCK_MAGIC {
        return Err(bad("missing LVCK magic".to_string()));
    }
    let mut u16buf = [0u8; 2];
    f.read_exact(&mut u16buf).map_err(err)?;
    let version = u16::from_le_bytes(u16buf);
    if version != LVCK_VERSION {
        return Err(bad(format!("unsupported version {version}")));
    }
    let mut u32buf = [0u8; 4];
    f.read_exact(&mut u32buf).map_err(err)?;
    let meta_len = u32::from_le_bytes(u32buf) as usize;
    let mut meta_bytes = vec![0u8; meta_len];
    f.read_exact(&mut meta_bytes).map_err(err)?;
    let meta: CheckpointMeta = serde_json::from_slice(&meta_bytes)
        .map_err(|e| bad(format!("meta block: {e}")))?;

    f.read_exact(&mut u32buf).map_err(err)?;
    let count = u32::from_le_bytes(u32buf) as usize;
    let mut table: Vec<(String, Tensor)> = Vec::with_capacity(count);
    for _ in 0..count {
        f.read_exact(&mut u16buf).map_err(err)?;
        let name_len = u16::from_le_bytes(u16buf) as usize;
        let mut name_bytes = vec![0u8; name_len];
        f.read_exact(&mut name_bytes).map_err(err)?;
        let name = String::from_utf8(name_bytes).map_err(|e| bad(format!("tensor name: {e}")))?;
        let tensor = read_lvtd_from(&mut f, &pstr)?;
        table.push((name, tensor));
    }

    let mut params = ModelParams::structural_zeros(&meta.config.model)?;
    fill_from_table(&mut params, &table, "", &pstr)?;
    let teacher = if meta.teacher_last_update.is_some() {
        let mut tp = ModelParams::structural_zeros(&meta.config.model)?;
        fill_from_table(&mut tp, &table, "teacher/", &pstr)?;
        Some(TeacherState {
            params: tp,
            last_update_step: meta.teacher_last_update.unwrap_or(0),
        })
    } else {
        None
    };
    Ok((meta.config, params, teacher))
}

fn fill_from_table(
    params: &mut ModelParams,
    table: &[(String, Tensor)],
    prefix: &str,
    path: &str,
) -> Result<()> {
    let mut missing = Vec::new();
    params.for_each_tensor_mut(|name, t| {
        let full = format!("{prefix}{name}");
        match table.iter().find(|(n, _)| n == &full) {
            Some((_, stored)) if stored.shape() == t.shape() => {
                t.data_mut().copy_from_slice(stored.data());
            }
            Some((_, stored)) => missing.push(format!(
                "{full}: shape {:?} vs expected {:?}",
                stored.shape(),
                t.shape()
            )),
            None => missing.push(format!("{full}: absent")),
        }
    });
    if missing.is_empty() {
        Ok(())
    } else {
        Err(Error::BadFormat {
            path: path.to_string(),
            details: format!("tensor table problems: {}", missing.join("; ")),
        })
    }
}

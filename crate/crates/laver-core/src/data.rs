//! Deterministic synthetic multimodal task: color-grid images paired with
//! spatial queries.
//!
//! Each image is a grid of cells; every cell carries one of C colors,
//! encoded as a one-hot at the start of the cell's flattened patch vector
//! (value 1.0 at slot `color`, 0 elsewhere) plus Gaussian pixel noise,
//! clamped to [0,1]. The text side asks `COLOR AT r c` and the answer is
//! the color token of that cell, so ground truth is exact and a Bayes
//! decode from pixels alone achieves 100% at zero noise.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::tensor::{Rng, Tensor};

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct DataConfig {
    pub colors: usize,
    pub noise_std: f64,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            colors: 8,
            noise_std: 0.05,
        }
    }
}

/// Token-id layout: colors first, then grid digits, then the two
/// keywords.
#[derive(Clone, Copy, Debug)]
pub struct Vocabulary {
    pub n_colors: usize,
    pub n_digits: usize,
}

impl Vocabulary {
    pub fn new(model: &ModelConfig, data: &DataConfig) -> Vocabulary {
        Vocabulary {
            n_colors: data.colors,
            n_digits: model.grid_rows.max(model.grid_cols),
        }
    }

    pub fn color_token(&self, c: usize) -> usize {
        c
    }

    pub fn digit_token(&self, v: usize) -> usize {
        self.n_colors + v
    }

    pub fn keyword_color(&self) -> usize {
        self.n_colors + self.n_digits
    }

    pub fn keyword_at(&self) -> usize {
        self.n_colors + self.n_digits + 1
    }

    pub fn required_size(&self) -> usize {
        self.n_colors + self.n_digits + 2
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Sample {
    pub pixels: Tensor,
    pub prompt: Vec<usize>,
    pub answer: usize,
    /// Prompt length P counted over the full multimodal sequence: vision
    /// tokens plus the text prompt.
    pub prompt_len: usize,
    pub query: (usize, usize),
    pub cell_colors: Vec<usize>,
}

impl Sample {
    /// Full text token sequence (prompt then answer).
    pub fn text_tokens(&self) -> Vec<usize> {
        let mut t = self.prompt.clone();
        t.push(self.answer);
        t
    }
}

fn validate(model: &ModelConfig, data: &DataConfig) -> Result<Vocabulary> {
    if data.colors < 2 {
        return Err(Error::invalid("generate", "need at least 2 colors"));
    }
    let vocab = Vocabulary::new(model, data);
    if vocab.required_size() > model.vocab_size {
        return Err(Error::invalid(
            "generate",
            format!(
                "task needs {} tokens but vocab_size is {}",
                vocab.required_size(),
                model.vocab_size
            ),
        ));
    }
    if data.colors > model.patch_dim() {
        return Err(Error::invalid(
            "generate",
            format!(
                "{} colors exceed the {}-slot patch one-hot capacity",
                data.colors,
                model.patch_dim()
            ),
        ));
    }
    Ok(vocab)
}

/// Generate `count` samples. Colors and query cells are uniform;
/// everything is a pure function of the rng state.
pub fn generate(
    rng: &mut Rng,
    model: &ModelConfig,
    data: &DataConfig,
    count: usize,
) -> Result<Vec<Sample>> {
    let vocab = validate(model, data)?;
    let p = model.patch_size;
    let (h, w, ch) = (model.image_height(), model.image_width(), model.channels);
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let mut cell_colors = Vec::with_capacity(model.n_vision());
        let mut pixels = Tensor::zeros(&[h, w, ch]);
        for gr in 0..model.grid_rows {
            for gc in 0..model.grid_cols {
                let color = rng.uniform_range(0, data.colors);
                cell_colors.push(color);
                for y in 0..p {
                    for x in 0..p {
                        for c in 0..ch {
                            let slot = (y * p + x) * ch + c;
                            let proto = if slot == color { 1.0 } else { 0.0 };
                            let noise = if data.noise_std > 0.0 {
                                rng.standard_normal() * data.noise_std
                            } else {
                                0.0
                            };
                            let v = (proto + noise).clamp(0.0, 1.0);
                            let idx = ((gr * p + y) * w + (gc * p + x)) * ch + c;
                            pixels.data_mut()[idx] = v as f32;
                        }
                    }
                }
            }
        }
        let qr = rng.uniform_range(0, model.grid_rows);
        let qc = rng.uniform_range(0, model.grid_cols);
        let prompt = vec![
            vocab.keyword_color(),
            vocab.keyword_at(),
            vocab.digit_token(qr),
            vocab.digit_token(qc),
        ];
        let prompt_len = model.n_vision() + prompt.len();
        let answer = vocab.color_token(cell_colors[qr * model.grid_cols + qc]);
        out.push(Sample {
            pixels,
            prompt,
            answer,
            prompt_len,
            query: (qr, qc),
            cell_colors,
        });
    }
    Ok(out)
}

/// Optimal decode of the queried cell straight from pixels: the color
/// slot with the largest value in the cell's patch vector.
pub fn bayes_answer(model: &ModelConfig, data: &DataConfig, pixels: &Tensor, query: (usize, usize)) -> usize {
    let p = model.patch_size;
    let w = model.image_width();
    let ch = model.channels;
    let (gr, gc) = query;
    let mut best = 0usize;
    let mut best_v = f32::NEG_INFINITY;
    for color in 0..data.colors {
        let slot = color;
        let y = slot / (p * ch);
        let rem = slot % (p * ch);
        let x = rem / ch;
        let c = rem % ch;
        let idx = ((gr * p + y) * w + (gc * p + x)) * ch + c;
        let v = pixels.data()[idx];
        if v > best_v {
            best_v = v;
            best = color;
        }
    }
    best
}

/// Dump a corpus: one LVTD pixel tensor per sample plus a JSONL index
/// with the token fields and relative tensor paths.
pub fn dump_corpus(dir: impl AsRef<Path>, samples: &[Sample]) -> Result<()> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir.display().to_string(), e))?;
    let index_path = dir.join("index.jsonl");
    let mut index = std::fs::File::create(&index_path)
        .map_err(|e| Error::io(index_path.display().to_string(), e))?;
    for (i, s) in samples.iter().enumerate() {
        let name = format!("sample_{i:05}.pixels.lvtd");
        crate::tensor::write_lvtd(dir.join(&name), &s.pixels)?;
        let line = serde_json::json!({
            "pixels": name,
            "prompt": s.prompt,
            "answer": s.answer,
            "prompt_len": s.prompt_len,
            "query": [s.query.0, s.query.1],
        });
        writeln!(index, "{line}").map_err(|e| Error::io(index_path.display().to_string(), e))?;
    }
    Ok(())
}

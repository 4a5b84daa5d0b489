//! Attention allow-matrices and 2D rotary position indices for multimodal
//! and packed visual sequences.
//!
//! Two layout families:
//!  - mixed: bidirectional attention among vision tokens, causal attention
//!    for text tokens over the full prefix; vision never attends to text.
//!  - packed: several images in one sequence, attention diagonally blocked
//!    per image so nothing leaks across image boundaries; padding is
//!    isolated in both directions.
//!
//! Position indices are (row, col) pairs: a vision token at grid (r, c)
//! gets (base + r, base + c) with `base` the sequence offset where its
//! image starts; text and pad tokens at sequence position p get (p, p).

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SegmentKind {
    Vision { rows: usize, cols: usize, image_id: u64 },
    Text,
    Pad,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SegmentSpec {
    pub kind: SegmentKind,
    pub length: usize,
}

impl SegmentSpec {
    pub fn vision(rows: usize, cols: usize, image_id: u64) -> SegmentSpec {
        SegmentSpec {
            kind: SegmentKind::Vision { rows, cols, image_id },
            length: rows * cols,
        }
    }

    pub fn text(length: usize) -> SegmentSpec {
        SegmentSpec {
            kind: SegmentKind::Text,
            length,
        }
    }

    pub fn pad(length: usize) -> SegmentSpec {
        SegmentSpec {
            kind: SegmentKind::Pad,
            length,
        }
    }

    fn validate(&self, op: &'static str) -> Result<()> {
        if self.length == 0 {
            return Err(Error::invalid(op, "zero-length segment"));
        }
        if let SegmentKind::Vision { rows, cols, .. } = self.kind {
            if rows * cols != self.length {
                return Err(Error::invalid(
                    op,
                    format!("vision grid {rows}x{cols} != length {}", self.length),
                ));
            }
        }
        Ok(())
    }
}

/// Boolean allow-matrix plus rotary index pairs for one sequence.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AttentionLayout {
    allow: Vec<bool>, // T x T, row-major
    pub row_index: Vec<usize>,
    pub col_index: Vec<usize>,
    len: usize,
}

impl AttentionLayout {
    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    #[inline]
    pub fn allowed(&self, query: usize, key: usize) -> bool {
        self.allow[query * self.len + key]
    }

    pub fn allow_row(&self, query: usize) -> &[bool] {
        &self.allow[query * self.len..(query + 1) * self.len]
    }

    /// ASCII grid of the allow matrix: '#' allowed, '.' blocked.
    pub fn render_ascii(&self) -> String {
        let mut out = String::with_capacity(self.len * (self.len + 1));
        for q in 0..self.len {
            for k in 0..self.len {
                out.push(if self.allowed(q, k) { '#' } else { '.' });
            }
            out.push('\n');
        }
        out
    }
}

fn expand_kinds(segments: &[SegmentSpec]) -> Vec<SegmentKind> {
    let mut kinds = Vec::new();
    for seg in segments {
        for _ in 0..seg.length {
            kinds.push(seg.kind);
        }
    }
    kinds
}

/// Mixed multimodal layout. Vision tokens attend to every vision token,
/// text position j attends to every non-pad position <= j, vision never
/// attends to text, and pad is excluded in both directions.
pub fn build_mixed_layout(segments: &[SegmentSpec]) -> Result<AttentionLayout> {
    if segments.is_empty() {
        return Err(Error::invalid("build_mixed_layout", "no segments"));
    }
    for seg in segments {
        seg.validate("build_mixed_layout")?;
    }
    let kinds = expand_kinds(segments);
    let t = kinds.len();
    let mut allow = vec![false; t * t];
    for q in 0..t {
        for k in 0..t {
            let ok = match (kinds[q], kinds[k]) {
                (SegmentKind::Pad, _) | (_, SegmentKind::Pad) => false,
                (SegmentKind::Vision { .. }, SegmentKind::Vision { .. }) => true,
                (SegmentKind::Vision { .. }, SegmentKind::Text) => false,
                (SegmentKind::Text, _) => k <= q,
            };
            allow[q * t + k] = ok;
        }
    }
    let (row_index, col_index) = assign_rope_indices(segments)?;
    Ok(AttentionLayout {
        allow,
        row_index,
        col_index,
        len: t,
    })
}

/// Packed visual layout: all segments must be vision; each image forms a
/// full bidirectional block and nothing crosses image boundaries. The
/// sequence is padded up to `pad_to` with fully isolated positions.
pub fn build_packed_layout(images: &[SegmentSpec], pad_to: usize) -> Result<AttentionLayout> {
    if images.is_empty() {
        return Err(Error::invalid("build_packed_layout", "no segments"));
    }
    let mut total = 0usize;
    for seg in images {
        seg.validate("build_packed_layout")?;
        if !matches!(seg.kind, SegmentKind::Vision { .. }) {
            return Err(Error::invalid(
                "build_packed_layout",
                "packed layouts take vision segments only",
            ));
        }
        total += seg.length;
    }
    if total > pad_to {
        return Err(Error::invalid(
            "build_packed_layout",
            format!("segments total {total} overflow pad_to {pad_to}"),
        ));
    }
    let mut segments = images.to_vec();
    if pad_to > total {
        segments.push(SegmentSpec::pad(pad_to - total));
    }

    // block id per position; pads get none
    let mut block = vec![usize::MAX; pad_to];
    let mut offset = 0;
    for (b, seg) in images.iter().enumerate() {
        for p in offset..offset + seg.length {
            block[p] = b;
        }
        offset += seg.length;
    }
    let mut allow = vec![false; pad_to * pad_to];
    for q in 0..pad_to {
        if block[q] == usize::MAX {
            continue;
        }
        for k in 0..pad_to {
            allow[q * pad_to + k] = block[q] == block[k];
        }
    }
    let (row_index, col_index) = assign_rope_indices(&segments)?;
    Ok(AttentionLayout {
        allow,
        row_index,
        col_index,
        len: pad_to,
    })
}

/// Rotary index pairs for a segment list. Each image block restarts from
/// its own base (its sequence offset), so packed blocks never share
/// coordinates; text and pad degenerate to (p, p).
pub fn assign_rope_indices(segments: &[SegmentSpec]) -> Result<(Vec<usize>, Vec<usize>)> {
    let mut row_index = Vec::new();
    let mut col_index = Vec::new();
    let mut base = 0usize;
    for seg in segments {
        seg.validate("assign_rope_indices")?;
        match seg.kind {
            SegmentKind::Vision { rows, cols, .. } => {
                for r in 0..rows {
                    for c in 0..cols {
                        row_index.push(base + r);
                        col_index.push(base + c);
                    }
                }
            }
            SegmentKind::Text | SegmentKind::Pad => {
                for p in base..base + seg.length {
                    row_index.push(p);
                    col_index.push(p);
                }
            }
        }
        base += seg.length;
    }
    Ok((row_index, col_index))
}

/// Parse a comma-separated segment list: `vision:RxC`, `text:N`,
/// `pad:N`, e.g. `vision:2x2,text:3`.
pub fn parse_segments(spec: &str) -> Result<Vec<SegmentSpec>> {
    let mut out = Vec::new();
    let mut image_id = 0u64;
    for (i, part) in spec.split(',').enumerate() {
        let part = part.trim();
        let (kind, arg) = part.split_once(':').ok_or_else(|| {
            Error::invalid(
                "parse_segments",
                format!("segment {} '{part}': expected kind:arg", i + 1),
            )
        })?;
        match kind {
            "vision" | "v" => {
                let (r, c) = arg.split_once('x').ok_or_else(|| {
                    Error::invalid("parse_segments", format!("vision grid '{arg}': expected RxC"))
                })?;
                let rows: usize = r.trim().parse().map_err(|_| {
                    Error::invalid("parse_segments", format!("bad vision rows '{r}'"))
                })?;
                let cols: usize = c.trim().parse().map_err(|_| {
                    Error::invalid("parse_segments", format!("bad vision cols '{c}'"))
                })?;
                out.push(SegmentSpec::vision(rows, cols, image_id));
                image_id += 1;
            }
            "text" | "t" => {
                let n: usize = arg.trim().parse().map_err(|_| {
                    Error::invalid("parse_segments", format!("bad text length '{arg}'"))
                })?;
                out.push(SegmentSpec::text(n));
            }
            "pad" | "p" => {
                let n: usize = arg.trim().parse().map_err(|_| {
                    Error::invalid("parse_segments", format!("bad pad length '{arg}'"))
                })?;
                out.push(SegmentSpec::pad(n));
            }
            other => {
                return Err(Error::invalid(
                    "parse_segments",
                    format!("unknown segment kind '{other}'"),
                ));
            }
        }
    }
    if out.is_empty() {
        return Err(Error::invalid("parse_segments", "empty segment list"));
    }
    Ok(out)
}

/// Per-pair inverse frequencies, the standard geometric ladder
/// `10000^(-2j/d)` for pair j of a head dimension d.
pub(crate) fn rope_inv_freq(head_dim: usize) -> Vec<f64> {
    (0..head_dim / 2)
        .map(|j| 10_000f64.powf(-2.0 * j as f64 / head_dim as f64))
        .collect()
}

/// Rotate queries or keys `[T, heads, head_dim]` by their 2D position.
///
/// Adjacent dims (2j, 2j+1) form rotation pair j. Pairs in the first half
/// of the head dimension turn by `row_index[t] * inv_freq[j]`, pairs in
/// the second half by `col_index[t] * inv_freq[j]`. With row == col this
/// is exactly the 1-D rotary transform at that index.
pub fn apply_rope(x: &Tensor, row_index: &[usize], col_index: &[usize]) -> Result<Tensor> {
    let (t, heads, head_dim) = x.dims3("apply_rope")?;
    if head_dim % 4 != 0 {
        return Err(Error::invalid(
            "apply_rope",
            format!("head_dim {head_dim} must be divisible by 4"),
        ));
    }
    if row_index.len() != t || col_index.len() != t {
        return Err(Error::shape(
            "apply_rope",
            format!("{t} positions, {} row / {} col indices", row_index.len(), col_index.len()),
        ));
    }
    let inv_freq = rope_inv_freq(head_dim);
    let pairs = head_dim / 2;
    let mut out = x.clone();
    let data = out.data_mut();
    for pos in 0..t {
        for h in 0..heads {
            let off = (pos * heads + h) * head_dim;
            rope_rotate_head(
                &mut data[off..off + head_dim],
                row_index[pos],
                col_index[pos],
                &inv_freq,
                pairs,
                1.0,
            );
        }
    }
    Ok(out)
}

/// Rotate one head vector in place; `sign` -1 applies the inverse
/// rotation (used by the backward pass).
pub(crate) fn rope_rotate_head(
    head: &mut [f32],
    row_pos: usize,
    col_pos: usize,
    inv_freq: &[f64],
    pairs: usize,
    sign: f64,
) {
    for j in 0..pairs {
        let idx = if j < pairs / 2 { row_pos } else { col_pos };
        let angle = sign * idx as f64 * inv_freq[j];
        let (sin, cos) = angle.sin_cos();
        let a = head[2 * j] as f64;
        let b = head[2 * j + 1] as f64;
        head[2 * j] = (a * cos - b * sin) as f32;
        head[2 * j + 1] = (a * sin + b * cos) as f32;
    }
}

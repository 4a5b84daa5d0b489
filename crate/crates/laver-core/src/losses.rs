//! Training objectives and their analytic gradients.
//!
//! Four losses drive the student model:
//!  - language-modeling cross-entropy over text positions after the prompt,
//!  - masked latent reconstruction: cross-entropy between the teacher's
//!    tempered softmax targets and the student's tempered log-softmax at
//!    masked vision positions,
//!  - Gram anchoring: squared Frobenius distance between student and
//!    teacher cosine-similarity (Gram) matrices of the visual logits,
//!  - clipped Gram anchoring: the asymmetric variant that only penalizes
//!    entries where the student similarity exceeds the teacher's.
//!
//! Teacher inputs are targets only: no loss here exposes a gradient with
//! respect to them. All arithmetic runs in f64; gradients are returned in
//! f64 so finite-difference verification is not limited by storage
//! precision.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Trade-off weights on the reconstruction and gram terms (both 1.0 by
/// default).
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct LossWeights {
    pub w_mim: f64,
    pub w_cga: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            w_mim: 1.0,
            w_cga: 1.0,
        }
    }
}

/// Softmax temperatures for teacher targets (sharp, 0.04) and student
/// predictions (0.1).
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct Temperatures {
    pub tau_teacher: f64,
    pub tau_student: f64,
}

impl Default for Temperatures {
    fn default() -> Self {
        Temperatures {
            tau_teacher: 0.04,
            tau_student: 0.1,
        }
    }
}

impl Temperatures {
    fn validate(&self) -> Result<()> {
        if self.tau_teacher <= 0.0 {
            return Err(Error::NonPositiveTemperature(self.tau_teacher));
        }
        if self.tau_student <= 0.0 {
            return Err(Error::NonPositiveTemperature(self.tau_student));
        }
        Ok(())
    }
}

/// A scalar loss plus its analytic gradient with respect to the
/// differentiable (student-side) input, row-major, same shape.
#[derive(Clone, Debug)]
pub struct LossValue {
    pub value: f64,
    pub grad: Vec<f64>,
}

impl LossValue {
    fn zero(n: usize) -> LossValue {
        LossValue {
            value: 0.0,
            grad: vec![0.0; n],
        }
    }
}

/// Tempered softmax of one row in f64, max-subtracted.
fn softmax_f64(row: &[f64], tau: f64) -> Vec<f64> {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vec<f64> = row.iter().map(|&v| ((v - max) / tau).exp()).collect();
    let denom: f64 = out.iter().sum();
    for v in out.iter_mut() {
        *v /= denom;
    }
    out
}

/// Mean negative log-likelihood of the tokens after the prompt.
///
/// `text_logits` is [T, vocab]; `targets` holds the full token sequence of
/// length T; the logits at position i−1 score target i, so the loss runs
/// over target positions `prompt_len..T` and is normalized by
/// `T - prompt_len`. Requires `1 <= prompt_len < T`.
pub fn lm_loss(text_logits: &Tensor, targets: &[usize], prompt_len: usize) -> Result<LossValue> {
    let (t, vocab) = text_logits.dims2("lm_loss")?;
    if targets.len() != t {
        return Err(Error::shape(
            "lm_loss",
            format!("{t} logit rows vs {} targets", targets.len()),
        ));
    }
    if prompt_len >= t {
        return Err(Error::invalid(
            "lm_loss",
            format!("prompt_len {prompt_len} must be < sequence length {t}"),
        ));
    }
    if prompt_len == 0 {
        return Err(Error::invalid(
            "lm_loss",
            "prompt_len must be >= 1 (something has to predict the first target)",
        ));
    }
    let scored = (t - prompt_len) as f64;
    let mut value = 0.0f64;
    let mut grad = vec![0.0f64; t * vocab];
    for i in prompt_len..t {
        let target = targets[i];
        if target >= vocab {
            return Err(Error::invalid(
                "lm_loss",
                format!("target id {target} >= vocab {vocab}"),
            ));
        }
        let row: Vec<f64> = text_logits.row(i - 1).iter().map(|&v| v as f64).collect();
        let probs = softmax_f64(&row, 1.0);
        value -= probs[target].ln();
        let g = &mut grad[(i - 1) * vocab..i * vocab];
        for (c, &p) in probs.iter().enumerate() {
            g[c] += (p - if c == target { 1.0 } else { 0.0 }) / scored;
        }
    }
    Ok(LossValue {
        value: value / scored,
        grad,
    })
}

/// Masked reconstruction loss between student and teacher visual logits.
///
/// For each masked position i the term is the cross-entropy of
/// `softmax(teacher_i / tau_teacher)` against `log softmax(student_i /
/// tau_student)`; the sum is divided by the number of masked positions so
/// the scale does not depend on the mask ratio. Zero when nothing is
/// masked. The gradient covers the student logits only.
pub fn mim_loss(
    student: &Tensor,
    teacher: &Tensor,
    mask: &[bool],
    temps: &Temperatures,
) -> Result<LossValue> {
    temps.validate()?;
    let (n, d) = student.dims2("mim_loss")?;
    let (nt, dt) = teacher.dims2("mim_loss")?;
    if (n, d) != (nt, dt) {
        return Err(Error::shape(
            "mim_loss",
            format!("student [{n},{d}] vs teacher [{nt},{dt}]"),
        ));
    }
    if mask.len() != n {
        return Err(Error::shape(
            "mim_loss",
            format!("{n} rows vs {} mask bits", mask.len()),
        ));
    }
    let masked_count = mask.iter().filter(|&&m| m).count();
    if masked_count == 0 {
        return Ok(LossValue::zero(n * d));
    }
    let scale = 1.0 / masked_count as f64;
    let mut value = 0.0f64;
    let mut grad = vec![0.0f64; n * d];
    for i in 0..n {
        if !mask[i] {
            continue;
        }
        let s_row: Vec<f64> = student.row(i).iter().map(|&v| v as f64).collect();
        let t_row: Vec<f64> = teacher.row(i).iter().map(|&v| v as f64).collect();
        let p_tea = softmax_f64(&t_row, temps.tau_teacher);
        let p_stu = softmax_f64(&s_row, temps.tau_student);
        // cross-entropy via log-softmax for stability
        let max = s_row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let logz = s_row
            .iter()
            .map(|&v| ((v - max) / temps.tau_student).exp())
            .sum::<f64>()
            .ln();
        for c in 0..d {
            let log_p = (s_row[c] - max) / temps.tau_student - logz;
            value -= p_tea[c] * log_p;
            grad[i * d + c] += scale * (p_stu[c] - p_tea[c]) / temps.tau_student;
        }
    }
    Ok(LossValue {
        value: value * scale,
        grad,
    })
}

/// Cosine-similarity Gram matrix of `z[N,D]`: rows are L2-normalized and
/// multiplied by their transpose, giving a symmetric [N,N] with unit
/// diagonal. Accumulates in f64.
pub fn gram(z: &Tensor) -> Result<Tensor> {
    let (n, _d) = z.dims2("gram")?;
    let u = normalized_rows_f64(z)?;
    let mut out = vec![0.0f32; n * n];
    for a in 0..n {
        for b in 0..n {
            out[a * n + b] = dot(&u[a], &u[b]) as f32;
        }
    }
    Tensor::from_vec(&[n, n], out)
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(&x, &y)| x * y).sum()
}

/// Row-normalized copy in f64, along with each row's original norm.
fn normalized_rows_with_norms(z: &Tensor) -> Result<(Vec<Vec<f64>>, Vec<f64>)> {
    let (n, d) = z.dims2("gram")?;
    let mut rows = Vec::with_capacity(n);
    let mut norms = Vec::with_capacity(n);
    for i in 0..n {
        let mut row: Vec<f64> = z.row(i).iter().map(|&v| v as f64).collect();
        let norm = dot(&row, &row).sqrt();
        if norm <= crate::tensor::NORM_EPS {
            return Err(Error::NearZeroRow {
                row: i,
                norm,
                min: crate::tensor::NORM_EPS,
            });
        }
        for v in row.iter_mut() {
            *v /= norm;
        }
        rows.push(row);
        norms.push(norm);
        let _ = d;
    }
    Ok((rows, norms))
}

fn normalized_rows_f64(z: &Tensor) -> Result<Vec<Vec<f64>>> {
    Ok(normalized_rows_with_norms(z)?.0)
}

/// Shared implementation of the gram-anchoring losses. `clip` selects the
/// asymmetric variant.
fn gram_anchor_loss(student: &Tensor, teacher: &Tensor, clip: bool) -> Result<LossValue> {
    let (n, d) = student.dims2("gram_anchor")?;
    let (nt, _dt) = teacher.dims2("gram_anchor")?;
    if n != nt {
        return Err(Error::shape(
            "gram_anchor",
            format!("student has {n} rows, teacher {nt}"),
        ));
    }
    let (u, norms) = normalized_rows_with_norms(student)?;
    let v = normalized_rows_f64(teacher)?;

    // delta[a][b] = clip?(G_student - G_teacher); value = sum delta^2
    let mut value = 0.0f64;
    let mut delta = vec![0.0f64; n * n];
    for a in 0..n {
        for b in 0..n {
            let mut diff = dot(&u[a], &u[b]) - dot(&v[a], &v[b]);
            if clip {
                diff = diff.max(0.0);
            }
            delta[a * n + b] = diff;
            value += diff * diff;
        }
    }

    // dL/dU = 4 * delta * U (delta symmetric), then back through the
    // row normalization: dL/dz_a = (g_a - (g_a . u_a) u_a) / |z_a|
    let mut grad = vec![0.0f64; n * d];
    for a in 0..n {
        let mut g = vec![0.0f64; d];
        for b in 0..n {
            let w = 4.0 * delta[a * n + b];
            if w == 0.0 {
                continue;
            }
            for (gj, &ubj) in g.iter_mut().zip(&u[b]) {
                *gj += w * ubj;
            }
        }
        let radial = dot(&g, &u[a]);
        let inv_norm = 1.0 / norms[a];
        for j in 0..d {
            grad[a * d + j] = (g[j] - radial * u[a][j]) * inv_norm;
        }
    }
    Ok(LossValue { value, grad })
}

/// Symmetric Gram anchoring: squared Frobenius norm of the difference
/// between student and teacher Gram matrices. Scale-invariant per row.
pub fn ga_loss(student: &Tensor, teacher: &Tensor) -> Result<LossValue> {
    gram_anchor_loss(student, teacher, false)
}

/// Clipped Gram anchoring: only entries where the student similarity
/// exceeds the teacher's contribute; a student that is more discriminative
/// than its teacher is never penalized. The gradient is exactly zero
/// through clipped entries.
pub fn cga_loss(student: &Tensor, teacher: &Tensor) -> Result<LossValue> {
    gram_anchor_loss(student, teacher, true)
}

/// Weighted sum of the loss terms.
pub fn total_loss(lm: f64, mim: f64, gram_term: f64, weights: &LossWeights) -> f64 {
    lm + weights.w_mim * mim + weights.w_cga * gram_term
}

//! Training harness: configuration, the Adam optimizer with warmup plus
//! cosine learning-rate decay, the per-step two-forward training scheme,
//! probe-set diagnostics, metric logging, and gradient checking.
//!
//! Each step runs the multimodal sequence (mixed attention layout) for
//! the language-modeling loss, and—unless the mode disables it—packs the
//! batch's images pairwise into masked visual sequences (blocked layout)
//! whose student outputs are matched against gradient-free teacher
//! targets through the reconstruction and gram-anchoring terms. The
//! teacher refreshes by EMA after the optimizer step.
//!
//! Everything is sequential and seeded, so a fixed config produces
//! byte-identical metrics and checkpoints.

use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::checkpoint::save_checkpoint;
use crate::data::{generate, DataConfig, Sample};
use crate::diagnostics::{attention_allocation, homogenization_profile};
use crate::ema::{decay_at, init_teacher, maybe_update, EmaConfig, TeacherState};
use crate::error::{Error, Result};
use crate::fdcheck::{fd_grad, max_rel_error, max_rel_error_excluding};
use crate::layout::{build_mixed_layout, build_packed_layout, AttentionLayout, SegmentSpec};
use crate::losses::{cga_loss, ga_loss, lm_loss, mim_loss, LossValue, LossWeights, Temperatures};
use crate::masking::{apply_mask, draw_mask, ratio_at, MaskPlan, MaskSchedule};
use crate::model::{
    accumulate_projector_grad, backward, embed_image, embed_tokens, forward, forward_cached,
    GradSeeds, ModelConfig, ModelParams,
};
use crate::tensor::{Rng, Tensor};

/// Which loss terms are active.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    /// Language modeling only; the teacher is never created or evaluated.
    Baseline,
    /// LM + masked reconstruction.
    MimOnly,
    /// LM + reconstruction + symmetric gram anchoring.
    MimGa,
    /// LM + reconstruction + clipped gram anchoring.
    Laver,
}

impl Mode {
    pub fn uses_teacher(&self) -> bool {
        !matches!(self, Mode::Baseline)
    }

    pub fn parse(s: &str) -> Result<Mode> {
        match s {
            "baseline" => Ok(Mode::Baseline),
            "mim_only" => Ok(Mode::MimOnly),
            "mim_ga" => Ok(Mode::MimGa),
            "laver" => Ok(Mode::Laver),
            other => Err(Error::Config(format!(
                "unknown mode '{other}' (expected baseline|mim_only|mim_ga|laver)"
            ))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Mode::Baseline => "baseline",
            Mode::MimOnly => "mim_only",
            Mode::MimGa => "mim_ga",
            Mode::Laver => "laver",
        }
    }
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct OptimizerConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub weight_decay: f64,
    pub warmup_ratio: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig {
            lr: 2e-4,
            beta1: 0.9,
            beta2: 0.999,
            weight_decay: 0.0,
            warmup_ratio: 0.05,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TrainConfig {
    pub model: ModelConfig,
    pub data: DataConfig,
    pub mask: MaskSchedule,
    pub ema: EmaConfig,
    pub weights: LossWeights,
    pub temps: Temperatures,
    pub optimizer: OptimizerConfig,
    pub steps: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub mode: Mode,
    pub log_every: usize,
    pub diagnostics_every: usize,
    pub probe_size: usize,
    /// Images per packed visual sequence.
    pub packed_images: usize,
    /// Total length of a packed sequence, padding included.
    pub packed_len: usize,
    /// Include wall-clock milliseconds in metric records. Off by default
    /// so identical runs produce byte-identical logs.
    pub timing: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let steps = 2000;
        TrainConfig {
            model: ModelConfig::default(),
            data: DataConfig::default(),
            mask: MaskSchedule::cosine(0.05, steps),
            ema: EmaConfig {
                total_steps: steps,
                ..EmaConfig::default()
            },
            weights: LossWeights::default(),
            temps: Temperatures::default(),
            optimizer: OptimizerConfig::default(),
            steps,
            batch_size: 4,
            seed: 0,
            mode: Mode::Laver,
            log_every: 50,
            diagnostics_every: 500,
            probe_size: 64,
            packed_images: 2,
            packed_len: 144,
            timing: false,
        }
    }
}

impl TrainConfig {
    /// Keep the schedule horizons in lockstep with `steps`.
    pub fn normalize(mut self) -> TrainConfig {
        self.mask.total_steps = self.steps;
        self.ema.total_steps = self.steps;
        self
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.ema.validate()?;
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be >= 1".to_string()));
        }
        if self.mode.uses_teacher() {
            if self.packed_images == 0 || self.batch_size % self.packed_images != 0 {
                return Err(Error::Config(format!(
                    "batch_size {} must be a multiple of packed_images {}",
                    self.batch_size, self.packed_images
                )));
            }
            if self.packed_images * self.model.n_vision() > self.packed_len {
                return Err(Error::Config(format!(
                    "packed_len {} too small for {} images of {} tokens",
                    self.packed_len,
                    self.packed_images,
                    self.model.n_vision()
                )));
            }
        }
        if self.log_every == 0 || self.diagnostics_every == 0 {
            return Err(Error::Config("log_every/diagnostics_every must be >= 1".to_string()));
        }
        if self.weights.w_mim < 0.0 || self.weights.w_cga < 0.0 {
            return Err(Error::Config("loss weights must be nonnegative".to_string()));
        }
        Ok(())
    }
}

/// Scalar losses of one step plus the parameter gradients behind them.
pub struct LossReport {
    pub lm: f64,
    pub mim: f64,
    pub ga: f64,
    pub cga: f64,
    pub total: f64,
    pub grads: ModelParams,
}

/// One JSONL metrics line. Diagnostics fields appear on the periodic
/// probe evaluations; `wall_clock_ms` only when timing is enabled.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct MetricRecord {
    pub step: usize,
    pub lm: f64,
    pub mim: f64,
    pub ga: f64,
    pub cga: f64,
    pub total: f64,
    pub mask_ratio: f64,
    pub ema_decay: f64,
    pub lr: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub cosine_profile: Option<Vec<f64>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub attention_allocation: Option<Vec<f64>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub probe_accuracy: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub wall_clock_ms: Option<u64>,
}

/// Adam with bias correction, linear warmup, and cosine decay to zero.
pub struct Adam {
    m: Vec<Tensor>,
    v: Vec<Tensor>,
    t: usize,
    cfg: OptimizerConfig,
    total_steps: usize,
}

const ADAM_EPS: f64 = 1e-8;

impl Adam {
    pub fn new(params: &ModelParams, cfg: OptimizerConfig, total_steps: usize) -> Adam {
        Adam {
            m: params.tensors().iter().map(|t| Tensor::zeros(t.shape())).collect(),
            v: params.tensors().iter().map(|t| Tensor::zeros(t.shape())).collect(),
            t: 0,
            cfg,
            total_steps,
        }
    }

    /// Learning rate at a 0-based step index.
    pub fn lr_at(&self, step: usize) -> f64 {
        let total = self.total_steps.max(1);
        let warmup = ((self.cfg.warmup_ratio * total as f64).ceil() as usize).min(total);
        if step < warmup {
            return self.cfg.lr * (step + 1) as f64 / warmup as f64;
        }
        let span = (total - warmup).max(1);
        let progress = (step - warmup) as f64 / span as f64;
        self.cfg.lr * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
    }

    pub fn step(&mut self, params: &mut ModelParams, grads: &ModelParams, step_index: usize) {
        self.t += 1;
        let lr = self.lr_at(step_index);
        let b1 = self.cfg.beta1;
        let b2 = self.cfg.beta2;
        let bc1 = 1.0 - b1.powi(self.t as i32);
        let bc2 = 1.0 - b2.powi(self.t as i32);
        let wd = self.cfg.weight_decay;
        for (((p, g), m), v) in params
            .tensors_mut()
            .into_iter()
            .zip(grads.tensors())
            .zip(self.m.iter_mut())
            .zip(self.v.iter_mut())
        {
            let pd = p.data_mut();
            let gd = g.data();
            let md = m.data_mut();
            let vd = v.data_mut();
            for i in 0..pd.len() {
                let mut gi = gd[i] as f64;
                if wd != 0.0 {
                    gi += wd * pd[i] as f64;
                }
                let mi = b1 * md[i] as f64 + (1.0 - b1) * gi;
                let vi = b2 * vd[i] as f64 + (1.0 - b2) * gi * gi;
                md[i] = mi as f32;
                vd[i] = vi as f32;
                let update = lr * (mi / bc1) / ((vi / bc2).sqrt() + ADAM_EPS);
                pd[i] -= update as f32;
            }
        }
    }
}

/// Everything the loop carries between steps.
pub struct TrainState {
    pub config: TrainConfig,
    pub params: ModelParams,
    pub teacher: Option<TeacherState>,
    pub opt: Adam,
    pub step: usize,
    data_rng: Rng,
    mask_rng: Rng,
    train_layout: AttentionLayout,
    eval_layout: AttentionLayout,
    packed_layout: Option<AttentionLayout>,
    packed_vision_rows: Vec<usize>,
    probe: Vec<Sample>,
}

impl TrainState {
    pub fn new(config: TrainConfig) -> Result<TrainState> {
        let config = config.normalize();
        config.validate()?;
        let base = Rng::seeded(config.seed);
        let mut param_rng = base.derive(0);
        let data_rng = base.derive(1);
        let mut probe_rng = base.derive(2);
        let mask_rng = base.derive(3);

        let params = ModelParams::init(&config.model, &mut param_rng)?;
        let teacher = config.mode.uses_teacher().then(|| init_teacher(&params));
        let opt = Adam::new(&params, config.optimizer, config.steps);

        let probe = generate(&mut probe_rng, &config.model, &config.data, config.probe_size)?;
        let prompt_tokens = probe.first().map(|s| s.prompt.len()).unwrap_or(4);
        let grid = (config.model.grid_rows, config.model.grid_cols);
        let train_layout = build_mixed_layout(&[
            SegmentSpec::vision(grid.0, grid.1, 0),
            SegmentSpec::text(prompt_tokens + 1),
        ])?;
        let eval_layout = build_mixed_layout(&[
            SegmentSpec::vision(grid.0, grid.1, 0),
            SegmentSpec::text(prompt_tokens),
        ])?;
        let (packed_layout, packed_vision_rows) = if config.mode.uses_teacher() {
            let imgs: Vec<SegmentSpec> = (0..config.packed_images)
                .map(|i| SegmentSpec::vision(grid.0, grid.1, i as u64))
                .collect();
            let layout = build_packed_layout(&imgs, config.packed_len)?;
            let rows: Vec<usize> = (0..config.packed_images * config.model.n_vision()).collect();
            (Some(layout), rows)
        } else {
            (None, Vec::new())
        };

        Ok(TrainState {
            config,
            params,
            teacher,
            opt,
            step: 0,
            data_rng,
            mask_rng,
            train_layout,
            eval_layout,
            packed_layout,
            packed_vision_rows,
            probe,
        })
    }

    /// Full multimodal training sequence for one sample: projected vision
    /// tokens followed by prompt and answer embeddings.
    fn embed_sample(&self, params: &ModelParams, sample: &Sample, with_answer: bool) -> Result<(Tensor, Vec<usize>)> {
        let vision = embed_image(params, &sample.pixels)?;
        let text = if with_answer {
            sample.text_tokens()
        } else {
            sample.prompt.clone()
        };
        let text_emb = embed_tokens(params, &text)?;
        let n = self.config.model.n_vision();
        let d = self.config.model.d_model;
        let mut emb = Tensor::zeros(&[n + text.len(), d]);
        emb.data_mut()[..n * d].copy_from_slice(vision.data());
        emb.data_mut()[n * d..].copy_from_slice(text_emb.data());
        // full-sequence target ids: vision positions are never scored
        let mut targets = vec![0usize; n];
        targets.extend(&text);
        Ok((emb, targets))
    }
}

/// Run one optimizer step. Returns the loss report and, on logging steps,
/// the metric record (diagnostics attached on probe steps).
pub fn train_step(state: &mut TrainState) -> Result<(LossReport, Option<MetricRecord>)> {
    let step = state.step;
    let cfg = &state.config;
    let n_vision = cfg.model.n_vision();
    let ratio = ratio_at(&cfg.mask, step.min(cfg.mask.total_steps))?;
    let batch = generate(&mut state.data_rng, &cfg.model, &cfg.data, cfg.batch_size)?;

    let mut grads = state.params.zeros_like();
    let inv_batch = 1.0 / cfg.batch_size as f64;
    let mut lm_total = 0.0f64;

    // language-modeling pass over the intact multimodal sequences
    for sample in &batch {
        let (embedded, targets) = state.embed_sample(&state.params, sample, true)?;
        let cache = forward_cached(&state.params, &embedded, &state.train_layout, &[])?;
        let lm = lm_loss(cache.text_logits(), &targets, sample.prompt_len)?;
        lm_total += lm.value * inv_batch;
        let d_text: Vec<f64> = lm.grad.iter().map(|g| g * inv_batch).collect();
        let d_embedded = backward(
            &state.params,
            &cache,
            &state.train_layout,
            GradSeeds {
                d_text_logits: Some(&d_text),
                d_visual_logits: None,
            },
            &mut grads,
        )?;
        route_embedding_grads(&cfg.model, sample, &d_embedded, &targets, n_vision, &mut grads)?;
    }

    // masked packed reconstruction pass against the EMA teacher
    let mut mim_total = 0.0f64;
    let mut ga_total = 0.0f64;
    let mut cga_total = 0.0f64;
    if cfg.mode.uses_teacher() {
        let teacher = state
            .teacher
            .as_ref()
            .expect("teacher exists in reconstruction modes");
        let packed_layout = state.packed_layout.as_ref().expect("packed layout cached");
        let n_seqs = cfg.batch_size / cfg.packed_images;
        let dv = cfg.model.visual_logit_dim;
        let d = cfg.model.d_model;

        let plans: Vec<MaskPlan> = batch
            .iter()
            .enumerate()
            .map(|(i, _)| {
                let mut plan = draw_mask(&mut state.mask_rng, n_vision, ratio)?;
                plan.image_id = i as u64;
                Ok(plan)
            })
            .collect::<Result<_>>()?;

        // teacher targets and student logits per packed sequence
        let mut student_caches = Vec::with_capacity(n_seqs);
        let mut teacher_z = Tensor::zeros(&[cfg.batch_size * n_vision, dv]);
        let mut student_z = Tensor::zeros(&[cfg.batch_size * n_vision, dv]);
        for s in 0..n_seqs {
            let images = &batch[s * cfg.packed_images..(s + 1) * cfg.packed_images];
            let seq_plans = &plans[s * cfg.packed_images..(s + 1) * cfg.packed_images];

            let mut templ = Tensor::zeros(&[cfg.packed_len, d]);
            let mut stud = Tensor::zeros(&[cfg.packed_len, d]);
            for (i, sample) in images.iter().enumerate() {
                let tv = embed_image(&teacher.params, &sample.pixels)?;
                let sv = embed_image(&state.params, &sample.pixels)?;
                let sv = apply_mask(&sv, &seq_plans[i], &state.params.mask_embed)?;
                let off = i * n_vision * d;
                templ.data_mut()[off..off + n_vision * d].copy_from_slice(tv.data());
                stud.data_mut()[off..off + n_vision * d].copy_from_slice(sv.data());
            }
            let tcache = forward_cached(
                &teacher.params,
                &templ,
                packed_layout,
                &state.packed_vision_rows,
            )?;
            let scache =
                forward_cached(&state.params, &stud, packed_layout, &state.packed_vision_rows)?;
            let zoff = s * cfg.packed_images * n_vision * dv;
            let tz = tcache.visual_logits().expect("teacher visual logits");
            let sz = scache.visual_logits().expect("student visual logits");
            teacher_z.data_mut()[zoff..zoff + tz.numel()].copy_from_slice(tz.data());
            student_z.data_mut()[zoff..zoff + sz.numel()].copy_from_slice(sz.data());
            student_caches.push(scache);
        }

        let mask_all: Vec<bool> = plans.iter().flat_map(|p| p.mask.iter().copied()).collect();
        let mim = mim_loss(&student_z, &teacher_z, &mask_all, &cfg.temps)?;
        mim_total = mim.value;

        // gram anchoring per image block, averaged over packed sequences
        let inv_seqs = 1.0 / n_seqs as f64;
        let mut gram_grad = vec![0.0f64; cfg.batch_size * n_vision * dv];
        for (i, _) in batch.iter().enumerate() {
            let rows = i * n_vision..(i + 1) * n_vision;
            let sz = slice_rows(&student_z, rows.clone(), dv);
            let tz = slice_rows(&teacher_z, rows.clone(), dv);
            let term: Option<LossValue> = match cfg.mode {
                Mode::MimGa => Some(ga_loss(&sz, &tz)?),
                Mode::Laver => Some(cga_loss(&sz, &tz)?),
                _ => None,
            };
            if let Some(term) = term {
                if cfg.mode == Mode::MimGa {
                    ga_total += term.value * inv_seqs;
                } else {
                    cga_total += term.value * inv_seqs;
                }
                for (k, g) in term.grad.iter().enumerate() {
                    gram_grad[i * n_vision * dv + k] += g * inv_seqs;
                }
            }
        }

        // combined seed on the student visual logits
        let gram_weight = cfg.weights.w_cga;
        let d_visual_all: Vec<f64> = mim
            .grad
            .iter()
            .zip(&gram_grad)
            .map(|(&m, &g)| cfg.weights.w_mim * m + gram_weight * g)
            .collect();

        for (s, scache) in student_caches.iter().enumerate() {
            let zoff = s * cfg.packed_images * n_vision * dv;
            let seed = &d_visual_all[zoff..zoff + cfg.packed_images * n_vision * dv];
            let d_embedded = backward(
                &state.params,
                scache,
                packed_layout,
                GradSeeds {
                    d_text_logits: None,
                    d_visual_logits: Some(seed),
                },
                &mut grads,
            )?;
            // route vision-row gradients: masked rows feed the mask
            // embedding, the rest feed the projector
            for (i, sample) in batch[s * cfg.packed_images..(s + 1) * cfg.packed_images]
                .iter()
                .enumerate()
            {
                let plan = &plans[s * cfg.packed_images + i];
                let mut d_tokens = Tensor::zeros(&[n_vision, d]);
                for r in 0..n_vision {
                    let src = d_embedded.row(i * n_vision + r);
                    if plan.mask[r] {
                        for (g, &v) in grads.mask_embed.data_mut().iter_mut().zip(src) {
                            *g += v;
                        }
                    } else {
                        d_tokens.row_mut(r).copy_from_slice(src);
                    }
                }
                accumulate_projector_grad(&cfg.model, &sample.pixels, &d_tokens, &mut grads)?;
            }
        }
    }

    let gram_term = match cfg.mode {
        Mode::MimGa => ga_total,
        Mode::Laver => cga_total,
        _ => 0.0,
    };
    let total = crate::losses::total_loss(lm_total, mim_total, gram_term, &cfg.weights);
    if !total.is_finite() {
        return Err(Error::NonFinite {
            op: "train_step",
            layer: step,
        });
    }

    state.opt.step(&mut state.params, &grads, step);
    let completed = step + 1;
    if let Some(teacher) = state.teacher.as_mut() {
        maybe_update(teacher, &state.params, &state.config.ema, completed.min(state.config.ema.total_steps))?;
    }
    state.step = completed;

    let report = LossReport {
        lm: lm_total,
        mim: mim_total,
        ga: ga_total,
        cga: cga_total,
        total,
        grads,
    };

    let metric = if completed % state.config.log_every == 0 || completed == state.config.steps {
        let mut record = MetricRecord {
            step: completed,
            lm: lm_total,
            mim: mim_total,
            ga: ga_total,
            cga: cga_total,
            total,
            mask_ratio: ratio,
            ema_decay: decay_at(&state.config.ema, completed.min(state.config.ema.total_steps))?,
            lr: state.opt.lr_at(step),
            cosine_profile: None,
            attention_allocation: None,
            probe_accuracy: None,
            wall_clock_ms: None,
        };
        if completed % state.config.diagnostics_every == 0 || completed == state.config.steps {
            let probe = probe_diagnostics(&state.config, &state.params, &state.probe, &state.eval_layout)?;
            record.cosine_profile = Some(probe.cosine_profile);
            record.attention_allocation = Some(probe.attention_allocation);
            record.probe_accuracy = Some(probe.accuracy);
        }
        Some(record)
    } else {
        None
    };

    Ok((report, metric))
}

fn slice_rows(t: &Tensor, rows: std::ops::Range<usize>, cols: usize) -> Tensor {
    let data = t.data()[rows.start * cols..rows.end * cols].to_vec();
    Tensor::from_vec(&[rows.len(), cols], data).expect("slice_rows shape")
}

/// Send the embedded-sequence gradient of the multimodal pass into the
/// right parameter tables: vision rows to the projector, text rows to
/// the token embeddings.
fn route_embedding_grads(
    model: &ModelConfig,
    sample: &Sample,
    d_embedded: &Tensor,
    targets: &[usize],
    n_vision: usize,
    grads: &mut ModelParams,
) -> Result<()> {
    let d = model.d_model;
    let t = d_embedded.shape()[0];
    let mut d_tokens = Tensor::zeros(&[n_vision, d]);
    for r in 0..n_vision {
        d_tokens.row_mut(r).copy_from_slice(d_embedded.row(r));
    }
    accumulate_projector_grad(model, &sample.pixels, &d_tokens, grads)?;
    for r in n_vision..t {
        let id = targets[r];
        let dst = grads.tok_embed.row_mut(id);
        for (g, &v) in dst.iter_mut().zip(d_embedded.row(r)) {
            *g += v;
        }
    }
    Ok(())
}

/// Probe-set diagnostics: layer-wise vision cosine profile, visual
/// attention allocation at the prediction-producing position, and answer
/// accuracy.
#[derive(Clone, Debug)]
pub struct ProbeDiagnostics {
    pub cosine_profile: Vec<f64>,
    pub attention_allocation: Vec<f64>,
    pub accuracy: f64,
}

pub fn probe_diagnostics(
    config: &TrainConfig,
    params: &ModelParams,
    probe: &[Sample],
    eval_layout: &AttentionLayout,
) -> Result<ProbeDiagnostics> {
    if probe.is_empty() {
        return Err(Error::invalid("probe_diagnostics", "empty probe set"));
    }
    let n_vision = config.model.n_vision();
    let vision_rows: Vec<usize> = (0..n_vision).collect();
    let mut cosine = vec![0.0f64; config.model.n_layers + 1];
    let mut alloc = vec![0.0f64; config.model.n_layers];
    let mut correct = 0usize;
    for sample in probe {
        let vision = embed_image(params, &sample.pixels)?;
        let text_emb = embed_tokens(params, &sample.prompt)?;
        let d = config.model.d_model;
        let t = n_vision + sample.prompt.len();
        let mut emb = Tensor::zeros(&[t, d]);
        emb.data_mut()[..n_vision * d].copy_from_slice(vision.data());
        emb.data_mut()[n_vision * d..].copy_from_slice(text_emb.data());
        let trace = forward(params, &emb, eval_layout, &[], true)?;

        let profile = homogenization_profile(&trace, &vision_rows)?;
        for (acc, v) in cosine.iter_mut().zip(&profile.per_layer) {
            *acc += v;
        }
        let allocation = attention_allocation(&trace, &vision_rows, &[t - 1])?;
        for (acc, v) in alloc.iter_mut().zip(&allocation.per_layer) {
            *acc += v;
        }
        let logits = trace.text_logits.row(t - 1);
        let predicted = logits
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.partial_cmp(b.1).unwrap_or(std::cmp::Ordering::Equal))
            .map(|(i, _)| i)
            .unwrap_or(0);
        if predicted == sample.answer {
            correct += 1;
        }
    }
    let n = probe.len() as f64;
    for v in cosine.iter_mut() {
        *v /= n;
    }
    for v in alloc.iter_mut() {
        *v /= n;
    }
    Ok(ProbeDiagnostics {
        cosine_profile: cosine,
        attention_allocation: alloc,
        accuracy: correct as f64 / n,
    })
}

/// Result of a full training run.
#[derive(Clone, Debug)]
pub struct TrainSummary {
    pub final_losses: MetricRecord,
    pub final_cosine_deep: f64,
    pub final_allocation_mean: f64,
    pub final_accuracy: f64,
    pub metrics_path: PathBuf,
    pub checkpoint_path: PathBuf,
}

/// Execute `config.steps` training steps, writing `metrics.jsonl` and
/// `checkpoint.lvck` under `out_dir`.
pub fn run_training(config: TrainConfig, out_dir: impl AsRef<Path>) -> Result<TrainSummary> {
    let out_dir = out_dir.as_ref();
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir.display().to_string(), e))?;
    let metrics_path = out_dir.join("metrics.jsonl");
    let checkpoint_path = out_dir.join("checkpoint.lvck");
    let mut metrics_file = std::io::BufWriter::new(
        std::fs::File::create(&metrics_path)
            .map_err(|e| Error::io(metrics_path.display().to_string(), e))?,
    );

    let started = std::time::Instant::now();
    let mut state = TrainState::new(config)?;
    let mut last_record: Option<MetricRecord> = None;
    while state.step < state.config.steps {
        let (_report, metric) = train_step(&mut state)?;
        if let Some(mut record) = metric {
            if state.config.timing {
                record.wall_clock_ms = Some(started.elapsed().as_millis() as u64);
            }
            let line = serde_json::to_string(&record)
                .map_err(|e| Error::Config(format!("metric serialization: {e}")))?;
            writeln!(metrics_file, "{line}")
                .map_err(|e| Error::io(metrics_path.display().to_string(), e))?;
            last_record = Some(record);
        }
    }
    metrics_file
        .flush()
        .map_err(|e| Error::io(metrics_path.display().to_string(), e))?;

    // a zero-step run still reports its (initialization) diagnostics
    let final_losses = match last_record {
        Some(record) if record.cosine_profile.is_some() => record,
        other => {
            let probe =
                probe_diagnostics(&state.config, &state.params, &state.probe, &state.eval_layout)?;
            let mut record = other.unwrap_or(MetricRecord {
                step: state.step,
                lm: 0.0,
                mim: 0.0,
                ga: 0.0,
                cga: 0.0,
                total: 0.0,
                mask_ratio: 0.0,
                ema_decay: 0.0,
                lr: 0.0,
                cosine_profile: None,
                attention_allocation: None,
                probe_accuracy: None,
                wall_clock_ms: None,
            });
            record.cosine_profile = Some(probe.cosine_profile);
            record.attention_allocation = Some(probe.attention_allocation);
            record.probe_accuracy = Some(probe.accuracy);
            record
        }
    };

    save_checkpoint(
        &checkpoint_path,
        &state.config,
        &state.params,
        state.teacher.as_ref(),
    )?;

    let profile = final_losses.cosine_profile.clone().unwrap_or_default();
    let allocation = final_losses.attention_allocation.clone().unwrap_or_default();
    Ok(TrainSummary {
        final_cosine_deep: profile.last().copied().unwrap_or(f64::NAN),
        final_allocation_mean: if allocation.is_empty() {
            f64::NAN
        } else {
            allocation.iter().sum::<f64>() / allocation.len() as f64
        },
        final_accuracy: final_losses.probe_accuracy.unwrap_or(f64::NAN),
        final_losses,
        metrics_path,
        checkpoint_path,
    })
}

// ---------------------------------------------------------------------------
// Offline diagnosis of a trained checkpoint
// ---------------------------------------------------------------------------

/// JSON report produced by the `diagnose` command.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct DiagnoseReport {
    pub probe_seed: u64,
    pub probe_count: usize,
    pub k: usize,
    pub cosine_profile: Vec<f64>,
    pub attention_allocation: Vec<f64>,
    pub probe_accuracy: f64,
    /// Alignment of each hidden level's vision features with the input
    /// vision embeddings (level 0), averaged over the probe set.
    pub cka_vs_input: Vec<f64>,
    pub cknna_vs_input: Vec<f64>,
}

/// Probe a model: homogenization and allocation profiles, accuracy, and
/// per-level CKA/CKNNA against the input vision embeddings. When
/// `out_dir` is given, writes `report.json` plus one PCA feature map per
/// hidden level for the first probe image.
pub fn diagnose(
    config: &TrainConfig,
    params: &ModelParams,
    probe_seed: u64,
    probe_count: usize,
    k: usize,
    out_dir: Option<&Path>,
) -> Result<DiagnoseReport> {
    let mut probe_rng = Rng::seeded(probe_seed);
    let probe = generate(&mut probe_rng, &config.model, &config.data, probe_count)?;
    if probe.is_empty() {
        return Err(Error::invalid("diagnose", "probe_count must be >= 1"));
    }
    let grid = (config.model.grid_rows, config.model.grid_cols);
    let prompt_tokens = probe[0].prompt.len();
    let eval_layout = build_mixed_layout(&[
        SegmentSpec::vision(grid.0, grid.1, 0),
        SegmentSpec::text(prompt_tokens),
    ])?;
    let base = probe_diagnostics(config, params, &probe, &eval_layout)?;

    let n_vision = config.model.n_vision();
    let vision_rows: Vec<usize> = (0..n_vision).collect();
    let levels = config.model.n_layers + 1;
    let mut cka_acc = vec![0.0f64; levels];
    let mut cknna_acc = vec![0.0f64; levels];
    let mut pca_maps: Vec<Vec<u8>> = Vec::new();
    for (si, sample) in probe.iter().enumerate() {
        let vision = embed_image(params, &sample.pixels)?;
        let text_emb = embed_tokens(params, &sample.prompt)?;
        let d = config.model.d_model;
        let t = n_vision + sample.prompt.len();
        let mut emb = Tensor::zeros(&[t, d]);
        emb.data_mut()[..n_vision * d].copy_from_slice(vision.data());
        emb.data_mut()[n_vision * d..].copy_from_slice(text_emb.data());
        let trace = forward(params, &emb, &eval_layout, &[], false)?;

        let input_features = crate::diagnostics::gather_rows(&trace.hidden[0], &vision_rows)?;
        for (level, h) in trace.hidden.iter().enumerate() {
            let features = crate::diagnostics::gather_rows(h, &vision_rows)?;
            let k_in = Tensor::from_vec(
                &[n_vision, n_vision],
                crate::diagnostics::inner_product_kernel(&input_features)?
                    .iter()
                    .map(|&v| v as f32)
                    .collect(),
            )?;
            let k_lvl = Tensor::from_vec(
                &[n_vision, n_vision],
                crate::diagnostics::inner_product_kernel(&features)?
                    .iter()
                    .map(|&v| v as f32)
                    .collect(),
            )?;
            cka_acc[level] += crate::diagnostics::cka(&k_lvl, &k_in)?;
            cknna_acc[level] += crate::diagnostics::cknna(&features, &input_features, k)?;
            if si == 0 {
                pca_maps.push(crate::diagnostics::pca_rgb(&features, grid.0, grid.1)?);
            }
        }
    }
    let n = probe.len() as f64;
    for v in cka_acc.iter_mut() {
        *v /= n;
    }
    for v in cknna_acc.iter_mut() {
        *v /= n;
    }

    let report = DiagnoseReport {
        probe_seed,
        probe_count,
        k,
        cosine_profile: base.cosine_profile,
        attention_allocation: base.attention_allocation,
        probe_accuracy: base.accuracy,
        cka_vs_input: cka_acc,
        cknna_vs_input: cknna_acc,
    };

    if let Some(dir) = out_dir {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir.display().to_string(), e))?;
        for (level, rgb) in pca_maps.iter().enumerate() {
            crate::diagnostics::write_ppm(
                dir.join(format!("pca_level_{level}.ppm")),
                grid.0,
                grid.1,
                rgb,
            )?;
        }
        let path = dir.join("report.json");
        let json = serde_json::to_string_pretty(&report)
            .map_err(|e| Error::Config(format!("report serialization: {e}")))?;
        std::fs::write(&path, json).map_err(|e| Error::io(path.display().to_string(), e))?;
    }
    Ok(report)
}

// ---------------------------------------------------------------------------
// Gradient checking
// ---------------------------------------------------------------------------

#[derive(Clone, Debug, Serialize)]
pub struct LossGradCheck {
    pub loss: String,
    pub max_rel_err: f64,
    pub excluded_entries: Vec<usize>,
    pub pass: bool,
}

#[derive(Clone, Debug, Serialize)]
pub struct GradCheckReport {
    /// Analytic vs central-difference gradients of each loss with respect
    /// to its logit inputs, in f64.
    pub loss_level: Vec<LossGradCheck>,
    /// End-to-end parameter-gradient spot checks through the tiny model.
    /// Storage is f32, so these run against a looser threshold.
    pub param_level: Vec<LossGradCheck>,
    pub tolerance: f64,
    pub param_tolerance: f64,
    pub pass: bool,
}

/// Entries of the CGA gradient whose gram differences sit within
/// `margin` of the clip boundary; excluded from the FD comparison.
fn cga_boundary_rows(student: &Tensor, teacher: &Tensor, margin: f64) -> Vec<usize> {
    let gs = crate::losses::gram(student).expect("gram");
    let gt = crate::losses::gram(teacher).expect("gram");
    let n = gs.shape()[0];
    let dv = student.shape()[1];
    let mut rows = vec![false; n];
    for a in 0..n {
        for b in 0..n {
            if a != b && ((gs.data()[a * n + b] - gt.data()[a * n + b]) as f64).abs() < margin {
                rows[a] = true;
                rows[b] = true;
            }
        }
    }
    let mut out = Vec::new();
    for (r, &hit) in rows.iter().enumerate() {
        if hit {
            out.extend(r * dv..(r + 1) * dv);
        }
    }
    out
}

/// Verify the analytic gradients of all four losses against central
/// finite differences (h = 1e-3, f64 evaluation), on random inputs with
/// `n_seeds` draws, plus parameter-level spot checks through a tiny
/// model. Loss-level checks compare at `tolerance`; parameter checks at
/// a looser threshold reflecting f32 storage.
pub fn grad_check(tolerance: f64, n_seeds: u64) -> Result<GradCheckReport> {
    let temps = Temperatures::default();
    let h = 1e-3f32;
    let mut loss_level: Vec<LossGradCheck> = Vec::new();

    let mut lm_worst = 0.0f64;
    let mut mim_worst = 0.0f64;
    let mut ga_worst = 0.0f64;
    let mut cga_worst = 0.0f64;
    let mut cga_excluded = Vec::new();
    for seed in 0..n_seeds {
        let mut rng = Rng::seeded(1000 + seed);
        // lm: [T=5, vocab=8], prompt 2
        let logits = crate::tensor::sample_gaussian(&mut rng, &[5, 8], 1.0);
        let targets: Vec<usize> = (0..5).map(|_| rng.uniform_range(0, 8)).collect();
        let analytic = lm_loss(&logits, &targets, 2)?;
        let fd = fd_grad(&logits, h, |t| lm_loss(t, &targets, 2).unwrap().value);
        lm_worst = lm_worst.max(max_rel_error(&analytic.grad, &fd, 1e-6));

        // reconstruction + gram losses on [N=4, Dv=8] logits
        let student = crate::tensor::sample_gaussian(&mut rng, &[4, 8], 1.0);
        let teacher = crate::tensor::sample_gaussian(&mut rng, &[4, 8], 1.0);
        let mask = [true, true, false, true];
        let analytic = mim_loss(&student, &teacher, &mask, &temps)?;
        let fd = fd_grad(&student, h, |t| {
            mim_loss(t, &teacher, &mask, &temps).unwrap().value
        });
        mim_worst = mim_worst.max(max_rel_error(&analytic.grad, &fd, 1e-6));

        let analytic = ga_loss(&student, &teacher)?;
        let fd = fd_grad(&student, h, |t| ga_loss(t, &teacher).unwrap().value);
        ga_worst = ga_worst.max(max_rel_error(&analytic.grad, &fd, 1e-6));

        let excluded = cga_boundary_rows(&student, &teacher, 5e-3);
        let analytic = cga_loss(&student, &teacher)?;
        let fd = fd_grad(&student, h, |t| cga_loss(t, &teacher).unwrap().value);
        cga_worst = cga_worst.max(max_rel_error_excluding(&analytic.grad, &fd, 1e-6, &excluded));
        cga_excluded.extend(excluded);
    }
    cga_excluded.sort_unstable();
    cga_excluded.dedup();
    for (name, worst, excluded) in [
        ("lm", lm_worst, Vec::new()),
        ("mim", mim_worst, Vec::new()),
        ("ga", ga_worst, Vec::new()),
        ("cga", cga_worst, cga_excluded),
    ] {
        loss_level.push(LossGradCheck {
            loss: name.to_string(),
            max_rel_err: worst,
            excluded_entries: excluded,
            pass: worst < tolerance,
        });
    }

    // parameter-level spot checks through a tiny model (D = 16)
    let param_tolerance = tolerance.max(3e-2);
    let param_level = param_level_checks(param_tolerance)?;

    let pass = loss_level.iter().all(|c| c.pass) && param_level.iter().all(|c| c.pass);
    Ok(GradCheckReport {
        loss_level,
        param_level,
        tolerance,
        param_tolerance,
        pass,
    })
}

fn param_level_checks(tolerance: f64) -> Result<Vec<LossGradCheck>> {
    let cfg = ModelConfig {
        n_layers: 2,
        d_model: 16,
        n_heads: 2,
        vocab_size: 8,
        visual_logit_dim: 8,
        vision_head_hidden: 12,
        patch_size: 2,
        grid_rows: 2,
        grid_cols: 2,
        channels: 3,
    };
    let mut rng = Rng::seeded(4242);
    let mut params = ModelParams::init(&cfg, &mut rng)?;
    for t in params.tensors_mut() {
        for v in t.data_mut() {
            *v *= 6.0; // keep activations O(1); see module tests
        }
    }
    let layout = build_mixed_layout(&[SegmentSpec::vision(2, 2, 0), SegmentSpec::text(3)])?;
    let embedded = crate::tensor::sample_gaussian(&mut rng, &[7, cfg.d_model], 1.0);
    let teacher_z = crate::tensor::sample_gaussian(&mut rng, &[4, cfg.visual_logit_dim], 1.0);
    let targets = vec![0usize, 0, 0, 0, 2, 5, 1];
    let prompt_len = 5;
    let mask = [true, false, true, true];
    let vision_rows = [0usize, 1, 2, 3];
    let temps = Temperatures::default();

    enum Which {
        Lm,
        Mim,
        Ga,
        Cga,
    }
    let evaluate = |params: &ModelParams, which: &Which| -> f64 {
        let cache = forward_cached(params, &embedded, &layout, &vision_rows).unwrap();
        match which {
            Which::Lm => lm_loss(cache.text_logits(), &targets, prompt_len).unwrap().value,
            Which::Mim => mim_loss(cache.visual_logits().unwrap(), &teacher_z, &mask, &temps)
                .unwrap()
                .value,
            Which::Ga => ga_loss(cache.visual_logits().unwrap(), &teacher_z).unwrap().value,
            Which::Cga => cga_loss(cache.visual_logits().unwrap(), &teacher_z).unwrap().value,
        }
    };

    let mut out = Vec::new();
    for (name, which) in [
        ("lm", Which::Lm),
        ("mim", Which::Mim),
        ("ga", Which::Ga),
        ("cga", Which::Cga),
    ] {
        let cache = forward_cached(&params, &embedded, &layout, &vision_rows)?;
        let mut grads = params.zeros_like();
        let d_text;
        let d_visual;
        let seeds = match which {
            Which::Lm => {
                d_text = lm_loss(cache.text_logits(), &targets, prompt_len)?.grad;
                GradSeeds {
                    d_text_logits: Some(&d_text),
                    d_visual_logits: None,
                }
            }
            Which::Mim => {
                d_visual = mim_loss(cache.visual_logits().unwrap(), &teacher_z, &mask, &temps)?.grad;
                GradSeeds {
                    d_text_logits: None,
                    d_visual_logits: Some(&d_visual),
                }
            }
            Which::Ga => {
                d_visual = ga_loss(cache.visual_logits().unwrap(), &teacher_z)?.grad;
                GradSeeds {
                    d_text_logits: None,
                    d_visual_logits: Some(&d_visual),
                }
            }
            Which::Cga => {
                d_visual = cga_loss(cache.visual_logits().unwrap(), &teacher_z)?.grad;
                GradSeeds {
                    d_text_logits: None,
                    d_visual_logits: Some(&d_visual),
                }
            }
        };
        let _ = backward(&params, &cache, &layout, seeds, &mut grads)?;

        let mut worst = 0.0f64;
        let tensors = grads.tensors();
        for (ti, g) in tensors.iter().enumerate() {
            let n = g.numel();
            for &idx in &[0usize, n / 2, n - 1] {
                let mut p = params.clone();
                let h = 1e-3f32;
                p.tensors_mut()[ti].data_mut()[idx] += h;
                let lp = evaluate(&p, &which);
                p.tensors_mut()[ti].data_mut()[idx] -= 2.0 * h;
                let lm_ = evaluate(&p, &which);
                let fd = (lp - lm_) / (2.0 * h as f64);
                let a = g.data()[idx] as f64;
                let denom = a.abs().max(fd.abs()).max(5e-2);
                worst = worst.max((a - fd).abs() / denom);
            }
        }
        out.push(LossGradCheck {
            loss: name.to_string(),
            max_rel_err: worst,
            excluded_entries: Vec::new(),
            pass: worst < tolerance,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_train_config(mode: Mode) -> TrainConfig {
        let mut c = TrainConfig::default();
        c.model = ModelConfig {
            n_layers: 2,
            d_model: 16,
            n_heads: 2,
            vocab_size: 16,
            visual_logit_dim: 8,
            vision_head_hidden: 12,
            patch_size: 2,
            grid_rows: 2,
            grid_cols: 2,
            channels: 3,
        };
        c.data = DataConfig {
            colors: 4,
            noise_std: 0.05,
        };
        c.steps = 4;
        c.batch_size = 2;
        c.log_every = 2;
        c.diagnostics_every = 4;
        c.probe_size = 4;
        c.packed_images = 2;
        c.packed_len = 10;
        c.mode = mode;
        c.seed = 7;
        c.normalize()
    }

    #[test]
    fn baseline_mode_gates_losses_and_teacher() {
        let mut state = TrainState::new(tiny_train_config(Mode::Baseline)).unwrap();
        assert!(state.teacher.is_none());
        let (report, _) = train_step(&mut state).unwrap();
        assert_eq!(report.mim, 0.0);
        assert_eq!(report.ga, 0.0);
        assert_eq!(report.cga, 0.0);
        assert!(report.lm > 0.0);
        assert_eq!(report.total, report.lm);
    }

    #[test]
    fn laver_mode_populates_terms_and_total_identity() {
        let mut cfg = tiny_train_config(Mode::Laver);
        // guarantee masked positions on a 4-token toy image
        cfg.mask = MaskSchedule::constant(0.8, cfg.steps);
        let mut state = TrainState::new(cfg).unwrap();
        assert!(state.teacher.is_some());
        let mut report = None;
        for _ in 0..4 {
            report = Some(train_step(&mut state).unwrap().0);
        }
        let report = report.unwrap();
        assert!(report.mim > 0.0, "mim {}", report.mim);
        assert_eq!(report.ga, 0.0);
        let w = state.config.weights;
        let expected = report.lm + w.w_mim * report.mim + w.w_cga * report.cga;
        assert!((report.total - expected).abs() < 1e-6);
    }

    #[test]
    fn mim_ga_mode_uses_symmetric_term() {
        let mut state = TrainState::new(tiny_train_config(Mode::MimGa)).unwrap();
        let mut report = None;
        for _ in 0..4 {
            report = Some(train_step(&mut state).unwrap().0);
        }
        let report = report.unwrap();
        assert_eq!(report.cga, 0.0);
        assert!(report.ga >= 0.0);
    }

    #[test]
    fn zero_lr_leaves_params_bit_identical() {
        let mut cfg = tiny_train_config(Mode::Laver);
        cfg.optimizer.lr = 0.0;
        let mut state = TrainState::new(cfg).unwrap();
        let before = state.params.clone();
        let (report, _) = train_step(&mut state).unwrap();
        assert!(report.total.is_finite());
        for (a, b) in before.tensors().iter().zip(state.params.tensors()) {
            for (x, y) in a.data().iter().zip(b.data()) {
                assert_eq!(x.to_bits(), y.to_bits());
            }
        }
    }

    #[test]
    fn same_seed_same_metric_stream() {
        let run = |seed: u64| -> Vec<String> {
            let mut cfg = tiny_train_config(Mode::Laver);
            cfg.seed = seed;
            let mut state = TrainState::new(cfg).unwrap();
            let mut lines = Vec::new();
            for _ in 0..4 {
                let (_, metric) = train_step(&mut state).unwrap();
                if let Some(m) = metric {
                    lines.push(serde_json::to_string(&m).unwrap());
                }
            }
            lines
        };
        assert_eq!(run(5), run(5));
        assert_ne!(run(5), run(6));
    }

    #[test]
    fn run_training_writes_artifacts() {
        let dir = tempfile::tempdir().unwrap();
        let summary = run_training(tiny_train_config(Mode::Laver), dir.path()).unwrap();
        assert!(summary.metrics_path.exists());
        assert!(summary.checkpoint_path.exists());
        assert!(summary.final_accuracy >= 0.0);
        let text = std::fs::read_to_string(&summary.metrics_path).unwrap();
        // steps=4, log_every=2 -> records at steps 2 and 4
        assert_eq!(text.lines().count(), 2);
        let last: MetricRecord = serde_json::from_str(text.lines().last().unwrap()).unwrap();
        assert!(last.cosine_profile.is_some());
    }

    #[test]
    fn zero_steps_checkpoint_equals_initialization() {
        let mut cfg = tiny_train_config(Mode::Laver);
        cfg.steps = 0;
        let dir = tempfile::tempdir().unwrap();
        let summary = run_training(cfg.clone(), dir.path()).unwrap();
        let (_, params, teacher) = crate::checkpoint::load_checkpoint(&summary.checkpoint_path).unwrap();
        let fresh = TrainState::new(cfg).unwrap();
        for (a, b) in fresh.params.tensors().iter().zip(params.tensors()) {
            for (x, y) in a.data().iter().zip(b.data()) {
                assert_eq!(x.to_bits(), y.to_bits());
            }
        }
        assert!(teacher.is_some());
    }

    #[test]
    fn lr_schedule_warmup_and_decay() {
        let cfg = tiny_train_config(Mode::Baseline);
        let params = ModelParams::init(&cfg.model, &mut Rng::seeded(1)).unwrap();
        let opt = Adam::new(
            &params,
            OptimizerConfig {
                lr: 1.0,
                warmup_ratio: 0.1,
                ..OptimizerConfig::default()
            },
            100,
        );
        assert!(opt.lr_at(0) > 0.0 && opt.lr_at(0) <= 0.11);
        assert!((opt.lr_at(9) - 1.0).abs() < 1e-12); // end of warmup
        assert!(opt.lr_at(50) < 1.0);
        assert!(opt.lr_at(99) < opt.lr_at(50));
    }

    #[test]
    fn diagnose_produces_report_and_maps() {
        let cfg = tiny_train_config(Mode::Laver);
        let params = ModelParams::init(&cfg.model, &mut Rng::seeded(3)).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let report = diagnose(&cfg, &params, 99, 3, 2, Some(dir.path())).unwrap();
        assert_eq!(report.cosine_profile.len(), cfg.model.n_layers + 1);
        assert_eq!(report.attention_allocation.len(), cfg.model.n_layers);
        assert_eq!(report.cka_vs_input.len(), cfg.model.n_layers + 1);
        // level 0 against itself is unit alignment
        assert!((report.cka_vs_input[0] - 1.0).abs() < 1e-6);
        assert!((report.cknna_vs_input[0] - 1.0).abs() < 1e-6);
        assert!(dir.path().join("report.json").exists());
        assert!(dir.path().join("pca_level_0.ppm").exists());
        assert!(dir
            .path()
            .join(format!("pca_level_{}.ppm", cfg.model.n_layers))
            .exists());
    }

    #[test]
    fn grad_check_passes_at_spec_tolerance() {
        let report = grad_check(1e-4, 2).unwrap();
        for check in &report.loss_level {
            assert!(
                check.pass,
                "{} loss-level rel err {}",
                check.loss, check.max_rel_err
            );
        }
        for check in &report.param_level {
            assert!(
                check.pass,
                "{} param-level rel err {}",
                check.loss, check.max_rel_err
            );
        }
        assert!(report.pass);
    }
}

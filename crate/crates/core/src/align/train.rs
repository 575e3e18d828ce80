use std::collections::BTreeMap;
use std::io::Write;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::lm::{masked_targets, weighted_cross_entropy};
use super::model::AlignModel;
use super::optim::{adamw_step, lr_schedule, AdamState};
use super::projection::{project, Projection};
use super::tensor::Matrix;
use super::vocab::EOS;
use super::AlignError;
use crate::octuple::OctupleToken;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Stage {
    /// Projection only.
    Alignment,
    /// Projection and LoRA adapters.
    InstructionTuning,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub max_lr: f64,
    pub warmup_ratio: f64,
    pub batch_size: usize,
    pub epochs: usize,
    /// Number of optimizer steps; see [`TrainConfig::for_dataset`].
    pub total_steps: usize,
    pub weight_decay: f64,
    pub adam_betas: (f64, f64),
    pub adam_eps: f64,
    pub stage: Stage,
    /// Seeds the per-epoch batch order.
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            max_lr: 5e-4,
            warmup_ratio: 0.03,
            batch_size: 16,
            epochs: 1,
            total_steps: 0,
            weight_decay: 0.01,
            adam_betas: (0.9, 0.999),
            adam_eps: 1e-8,
            stage: Stage::Alignment,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn warmup_steps(&self) -> usize {
        (self.warmup_ratio * self.total_steps as f64).ceil() as usize
    }

    /// Sets `total_steps = epochs · ceil(len / batch_size)`.
    pub fn for_dataset(mut self, len: usize) -> Self {
        self.total_steps = self.epochs * len.div_ceil(self.batch_size.max(1));
        self
    }

    pub fn validate(&self) -> Result<(), AlignError> {
        if !(self.warmup_ratio > 0.0 && self.warmup_ratio < 1.0) {
            return Err(AlignError::InvalidConfig(
                "warmup_ratio must lie in (0, 1)".into(),
            ));
        }
        if !(self.max_lr > 0.0 && self.max_lr.is_finite()) {
            return Err(AlignError::InvalidConfig("max_lr must be positive".into()));
        }
        if self.batch_size == 0 {
            return Err(AlignError::InvalidConfig(
                "batch_size must be positive".into(),
            ));
        }
        Ok(())
    }
}

/// One training sequence: a clip plus prompt and answer token ids. The
/// answer (followed by the end token) is the supervised span.
#[derive(Debug, Clone, PartialEq)]
pub struct Example {
    pub id: String,
    pub clip: Vec<OctupleToken>,
    pub text_ids: Vec<u32>,
    pub answer_mask: Vec<bool>,
}

impl Example {
    pub fn new(
        id: impl Into<String>,
        clip: Vec<OctupleToken>,
        prompt: &[u32],
        answer: &[u32],
    ) -> Self {
        let mut text_ids = prompt.to_vec();
        text_ids.extend_from_slice(answer);
        text_ids.push(EOS);
        let mut answer_mask = vec![false; prompt.len()];
        answer_mask.resize(text_ids.len(), true);
        Self {
            id: id.into(),
            clip,
            text_ids,
            answer_mask,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub step: usize,
    pub lr: f64,
    pub loss: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainReport {
    pub steps: Vec<StepLog>,
}

impl TrainReport {
    pub fn initial_loss(&self) -> Option<f64> {
        self.steps.first().map(|s| s.loss)
    }

    pub fn final_loss(&self) -> Option<f64> {
        self.steps.last().map(|s| s.loss)
    }
}

/// Writes one `{step, lr, loss}` JSON object per line.
pub fn write_loss_log(mut w: impl Write, steps: &[StepLog]) -> Result<(), AlignError> {
    for s in steps {
        serde_json::to_writer(&mut w, s)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) enum Trainable {
    Projection,
    ProjectionLora,
    Lm,
    ProjectionLm,
}

impl Trainable {
    fn projection(self) -> bool {
        matches!(
            self,
            Trainable::Projection | Trainable::ProjectionLora | Trainable::ProjectionLm
        )
    }

    fn lora(self) -> bool {
        self == Trainable::ProjectionLora
    }

    fn lm(self) -> bool {
        matches!(self, Trainable::Lm | Trainable::ProjectionLm)
    }
}

/// Prefix rows for an example; zero rows when `pooled` is absent.
fn prefix_for(model: &AlignModel, pooled: Option<&[f64]>) -> Result<Matrix, AlignError> {
    match pooled {
        Some(p) => project(p, &model.projection),
        None => Ok(Matrix::zeros(
            model.config.prefix_count,
            model.config.lm_dim,
        )),
    }
}

/// Flattened gradients per named tensor.
pub(crate) type NamedGrads = Vec<(String, Vec<f64>)>;

/// Mean over the batch of each example's mean answer-token cross-entropy,
/// and optionally its gradients (flattened per named tensor, projection
/// then adapters then LM).
pub(crate) fn batch_eval(
    model: &AlignModel,
    pooled: Option<&[Vec<f64>]>,
    batch: &[&Example],
    idx: &[usize],
    which: Option<Trainable>,
) -> Result<(f64, NamedGrads), AlignError> {
    let prefixes = idx
        .iter()
        .map(|&i| prefix_for(model, pooled.map(|ps| ps[i].as_slice())))
        .collect::<Result<Vec<_>, _>>()?;
    let seqs: Vec<(&Matrix, &[u32])> = prefixes
        .iter()
        .zip(batch)
        .map(|(p, ex)| (p, ex.text_ids.as_slice()))
        .collect();
    let cache = model.lm.forward_batch(&seqs, &model.adapters)?;
    let mut rows = Vec::new();
    let mut ids = Vec::new();
    let mut weights = Vec::new();
    let scale = 1.0 / batch.len() as f64;
    for (sp, ex) in cache.spans.iter().zip(batch) {
        let targets = masked_targets(sp.prefix_rows, &ex.text_ids, &ex.answer_mask)?;
        let w = scale / targets.len() as f64;
        for (r, t) in targets {
            rows.push(sp.start + r);
            ids.push(t);
            weights.push(w);
        }
    }
    let (l, d_logits) =
        weighted_cross_entropy(&model.lm.logits_rows(&cache, &rows), &ids, &weights);
    let Some(which) = which else {
        return Ok((l, Vec::new()));
    };
    let g = model.lm.backward(
        &cache,
        &rows,
        &d_logits,
        &model.adapters,
        which.lm(),
        which.lora(),
    );
    let mut out: Vec<(String, Vec<f64>)> = Vec::new();
    if let (true, Some(ps)) = (which.projection(), pooled) {
        let mut gp = Projection::zeros(
            model.config.encoder_dim,
            model.config.lm_dim,
            model.config.prefix_count,
        );
        for (&i, d_prefix) in idx.iter().zip(&g.prefixes) {
            model.projection.accumulate_grad(&ps[i], d_prefix, &mut gp);
        }
        out.extend(
            gp.named_tensors()
                .into_iter()
                .map(|(n, m)| (n, m.data().to_vec())),
        );
    }
    if let Some(gl) = &g.lora {
        for a in gl {
            out.extend(
                a.named_tensors()
                    .into_iter()
                    .map(|(n, m)| (n, m.data().to_vec())),
            );
        }
    }
    if let Some(gm) = &g.lm {
        out.extend(
            gm.named_tensors()
                .into_iter()
                .map(|(n, m)| (n, m.data().to_vec())),
        );
    }
    Ok((l, out))
}

pub(crate) fn pooled_inputs(
    model: &AlignModel,
    examples: &[Example],
) -> Result<Vec<Vec<f64>>, AlignError> {
    examples.iter().map(|e| model.pool(&e.clip)).collect()
}

/// Mean of per-example losses.
pub fn batch_loss(model: &AlignModel, examples: &[Example]) -> Result<f64, AlignError> {
    if examples.is_empty() {
        return Err(AlignError::EmptySequence);
    }
    let pooled = pooled_inputs(model, examples)?;
    let refs: Vec<&Example> = examples.iter().collect();
    let idx: Vec<usize> = (0..examples.len()).collect();
    Ok(batch_eval(model, Some(&pooled), &refs, &idx, None)?.0)
}

fn trainable_tensors(model: &mut AlignModel, which: Trainable) -> Vec<(String, &mut Matrix)> {
    let mut out = Vec::new();
    if which.projection() {
        out.extend(model.projection.named_tensors_mut());
    }
    if which.lora() {
        for a in model.adapters.iter_mut() {
            out.extend(a.named_tensors_mut());
        }
    }
    if which.lm() {
        out.extend(model.lm.named_tensors_mut());
    }
    out
}

fn run(
    model: &mut AlignModel,
    examples: &[Example],
    cfg: &TrainConfig,
    which: Trainable,
    contexts: Option<&[Vec<f64>]>,
) -> Result<TrainReport, AlignError> {
    cfg.validate()?;
    let mut report = TrainReport::default();
    if cfg.total_steps == 0 || examples.is_empty() {
        return Ok(report);
    }
    let pooled = match contexts {
        Some(c) => Some(c.to_vec()),
        None if which.projection() => Some(pooled_inputs(model, examples)?),
        None => None,
    };
    let mut states: BTreeMap<String, AdamState> = BTreeMap::new();
    let mut order: Vec<usize> = (0..examples.len()).collect();
    let mut step = 0;
    let mut epoch = 0u64;
    while step < cfg.total_steps {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(epoch));
        order.sort_unstable();
        order.shuffle(&mut rng);
        for chunk in order.chunks(cfg.batch_size) {
            if step >= cfg.total_steps {
                break;
            }
            let batch: Vec<&Example> = chunk.iter().map(|&i| &examples[i]).collect();
            let (l, grads) = batch_eval(model, pooled.as_deref(), &batch, chunk, Some(which))?;
            let lr = lr_schedule(step + 1, cfg)?;
            let mut params = trainable_tensors(model, which);
            for (name, g) in &grads {
                let (_, m) = params
                    .iter_mut()
                    .find(|(n, _)| n == name)
                    .ok_or_else(|| AlignError::ShapeMismatch(format!("no parameter {name}")))?;
                let state = states
                    .entry(name.clone())
                    .or_insert_with(|| AdamState::new(m.len()));
                adamw_step(m.data_mut(), g, state, lr, cfg).map_err(|e| match e {
                    AlignError::NonFiniteGradient(_) => AlignError::NonFiniteGradient(name.clone()),
                    other => other,
                })?;
            }
            step += 1;
            report.steps.push(StepLog { step, lr, loss: l });
            log::debug!("step {step} lr {lr:.3e} loss {l:.5}");
        }
        epoch += 1;
    }
    Ok(report)
}

/// Stage 1: updates only the projection; encoder and LM stay frozen.
pub fn train_stage1(
    examples: &[Example],
    model: &mut AlignModel,
    cfg: &TrainConfig,
) -> Result<TrainReport, AlignError> {
    if cfg.stage != Stage::Alignment {
        return Err(AlignError::StageMismatch(
            "stage 1 requires Stage::Alignment".into(),
        ));
    }
    run(model, examples, cfg, Trainable::Projection, None)
}

/// Stage 2: updates the projection and query/value LoRA adapters (attached
/// here if the model has none); the base LM and encoder stay frozen.
pub fn train_stage2(
    examples: &[Example],
    model: &mut AlignModel,
    cfg: &TrainConfig,
) -> Result<TrainReport, AlignError> {
    if cfg.stage != Stage::InstructionTuning {
        return Err(AlignError::StageMismatch(
            "stage 2 requires Stage::InstructionTuning".into(),
        ));
    }
    model.ensure_adapters();
    run(model, examples, cfg, Trainable::ProjectionLora, None)
}

/// Text-only language-model training with zero prefix rows, used to give
/// the frozen decoder its language ability before alignment.
pub fn pretrain_lm(
    examples: &[Example],
    model: &mut AlignModel,
    cfg: &TrainConfig,
) -> Result<TrainReport, AlignError> {
    run(model, examples, cfg, Trainable::Lm, None)
}

/// Trains the LM and projection together with caller-supplied context
/// vectors (one per example, `encoder_dim` wide) in place of pooled clips.
/// Teaches the decoder to read prefix rows.
pub fn pretrain_lm_with_context(
    examples: &[Example],
    contexts: &[Vec<f64>],
    model: &mut AlignModel,
    cfg: &TrainConfig,
) -> Result<TrainReport, AlignError> {
    if contexts.len() != examples.len() {
        return Err(AlignError::ShapeMismatch(format!(
            "{} contexts for {} examples",
            contexts.len(),
            examples.len()
        )));
    }
    if let Some(c) = contexts
        .iter()
        .find(|c| c.len() != model.config.encoder_dim)
    {
        return Err(AlignError::ShapeMismatch(format!(
            "context width {} != encoder_dim {}",
            c.len(),
            model.config.encoder_dim
        )));
    }
    run(
        model,
        examples,
        cfg,
        Trainable::ProjectionLm,
        Some(contexts),
    )
}

use serde::Serialize;

use super::lm::{cross_entropy, masked_targets, LmCache, TinyLm};
use super::model::AlignModel;
use super::projection::project;
use super::tensor::Matrix;
use super::train::{batch_eval, pooled_inputs, Example, Trainable};
use super::AlignError;

/// Gradients smaller than this are compared in absolute rather than
/// relative terms.
const REL_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GradSlice {
    Projection,
    Lora,
    /// Projection and LoRA together, the stage-2 trainable set.
    Stage2,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    /// Largest relative error per named tensor.
    pub per_tensor: Vec<(String, f64)>,
    pub checked: usize,
    /// True when backward produced no gradient for any frozen tensor.
    pub frozen_grads_absent: bool,
}

/// Compares analytic gradients of the mean batch loss against central
/// differences `(L(θ+ε) − L(θ−ε)) / 2ε` for every parameter in `slice`.
/// The error for one parameter is `|a − n| / max(|a|, |n|, 1e-6)`.
///
/// Perturbed losses are evaluated with the model's own forward pass. Two
/// exact shortcuts keep this fast: projection perturbations only change the
/// prefix rows, so both signs run as one stacked batch; an adapter
/// perturbation in block `L` leaves blocks below `L` untouched, so their
/// output is reused.
pub fn grad_check(
    model: &AlignModel,
    batch: &[Example],
    slice: GradSlice,
    epsilon: f64,
) -> Result<GradCheckReport, AlignError> {
    if batch.is_empty() {
        return Err(AlignError::EmptySequence);
    }
    let mut model = model.clone();
    if slice != GradSlice::Projection {
        model.ensure_adapters();
        perturb_lora_b(&mut model);
    }
    let pooled = pooled_inputs(&model, batch)?;
    let refs: Vec<&Example> = batch.iter().collect();
    let idx: Vec<usize> = (0..batch.len()).collect();
    let (_, grads) = batch_eval(
        &model,
        Some(&pooled),
        &refs,
        &idx,
        Some(Trainable::ProjectionLora),
    )?;
    let frozen_grads_absent = grads
        .iter()
        .all(|(n, _)| n.starts_with("projection.") || n.starts_with("lora."));

    let check_projection = slice != GradSlice::Lora;
    let check_lora = slice != GradSlice::Projection;
    let mut per_tensor = Vec::new();
    let mut checked = 0;
    let mut max_rel_err = 0.0f64;
    let mut record = |name: &str, analytic: &[f64], numeric: &[f64]| {
        let worst = analytic
            .iter()
            .zip(numeric)
            .map(|(&a, &n)| (a - n).abs() / a.abs().max(n.abs()).max(REL_FLOOR))
            .fold(0.0f64, f64::max);
        checked += analytic.len();
        max_rel_err = max_rel_err.max(worst);
        per_tensor.push((name.to_string(), worst));
    };

    for (name, analytic) in &grads {
        let numeric = if name.starts_with("projection.") && check_projection {
            projection_numeric(&mut model, name, batch, &pooled, epsilon)?
        } else if name.starts_with("lora.") && check_lora {
            lora_numeric(&mut model, name, batch, &pooled, epsilon)?
        } else {
            continue;
        };
        record(name, analytic, &numeric);
    }
    Ok(GradCheckReport {
        max_rel_err,
        per_tensor,
        checked,
        frozen_grads_absent,
    })
}

/// Mean answer cross-entropy of each sequence in the cache; sequence `s`
/// holds example `s % batch.len()`.
fn span_losses(lm: &TinyLm, cache: &LmCache, batch: &[Example]) -> Result<Vec<f64>, AlignError> {
    let mut rows = Vec::new();
    let mut ids = Vec::new();
    let mut bounds = Vec::new();
    for (s, sp) in cache.spans.iter().enumerate() {
        let ex = &batch[s % batch.len()];
        let from = rows.len();
        for (r, t) in masked_targets(sp.prefix_rows, &ex.text_ids, &ex.answer_mask)? {
            rows.push(sp.start + r);
            ids.push(t);
        }
        bounds.push((from, rows.len()));
    }
    let logits = lm.logits_rows(cache, &rows);
    Ok(bounds
        .into_iter()
        .map(|(a, b)| cross_entropy(&logits.slice_rows(a, b), &ids[a..b]).0)
        .collect())
}

fn projection_numeric(
    model: &mut AlignModel,
    name: &str,
    batch: &[Example],
    pooled: &[Vec<f64>],
    epsilon: f64,
) -> Result<Vec<f64>, AlignError> {
    let len = proj_tensor(model, name).len();
    let b = batch.len();
    let mut numeric = Vec::with_capacity(len);
    for i in 0..len {
        let orig = proj_tensor(model, name).data()[i];
        let mut prefixes: Vec<Matrix> = Vec::with_capacity(2 * b);
        for delta in [epsilon, -epsilon] {
            proj_tensor(model, name).data_mut()[i] = orig + delta;
            for p in pooled {
                prefixes.push(project(p, &model.projection)?);
            }
        }
        proj_tensor(model, name).data_mut()[i] = orig;
        let seqs: Vec<(&Matrix, &[u32])> = prefixes
            .iter()
            .enumerate()
            .map(|(s, p)| (p, batch[s % b].text_ids.as_slice()))
            .collect();
        let cache = model.lm.forward_batch(&seqs, &model.adapters)?;
        let losses = span_losses(&model.lm, &cache, batch)?;
        let plus: f64 = losses[..b].iter().sum::<f64>() / b as f64;
        let minus: f64 = losses[b..].iter().sum::<f64>() / b as f64;
        numeric.push((plus - minus) / (2.0 * epsilon));
    }
    Ok(numeric)
}

fn lora_numeric(
    model: &mut AlignModel,
    name: &str,
    batch: &[Example],
    pooled: &[Vec<f64>],
    epsilon: f64,
) -> Result<Vec<f64>, AlignError> {
    let ai = model
        .adapters
        .iter()
        .position(|a| a.named_tensors().iter().any(|(n, _)| n == name))
        .ok_or_else(|| AlignError::ShapeMismatch(format!("no adapter tensor {name}")))?;
    let layer = model.adapters[ai].target.layer;
    let prefixes = pooled
        .iter()
        .map(|p| project(p, &model.projection))
        .collect::<Result<Vec<_>, _>>()?;
    let seqs: Vec<(&Matrix, &[u32])> = prefixes
        .iter()
        .zip(batch)
        .map(|(p, ex)| (p, ex.text_ids.as_slice()))
        .collect();
    let ids: Vec<Vec<u32>> = batch.iter().map(|e| e.text_ids.clone()).collect();
    let (x, spans) = model.lm.embed_batch(&seqs)?;
    let x_in = model
        .lm
        .block_inputs(x, &spans, &model.adapters)
        .swap_remove(layer);
    let is_a = name.ends_with(".a");
    let len = model.adapters[ai].named_tensors()[usize::from(!is_a)]
        .1
        .len();
    let loss_at = |m: &AlignModel| -> Result<f64, AlignError> {
        let cache =
            m.lm.forward_from(x_in.clone(), layer, spans.clone(), ids.clone(), &m.adapters);
        let l = span_losses(&m.lm, &cache, batch)?;
        Ok(l.iter().sum::<f64>() / l.len() as f64)
    };
    let mut numeric = Vec::with_capacity(len);
    for i in 0..len {
        let orig = lora_tensor(model, ai, is_a).data()[i];
        lora_tensor(model, ai, is_a).data_mut()[i] = orig + epsilon;
        let plus = loss_at(model)?;
        lora_tensor(model, ai, is_a).data_mut()[i] = orig - epsilon;
        let minus = loss_at(model)?;
        lora_tensor(model, ai, is_a).data_mut()[i] = orig;
        numeric.push((plus - minus) / (2.0 * epsilon));
    }
    Ok(numeric)
}

fn lora_tensor(model: &mut AlignModel, ai: usize, is_a: bool) -> &mut Matrix {
    let a = &mut model.adapters[ai];
    if is_a {
        &mut a.a
    } else {
        &mut a.b
    }
}

fn proj_tensor<'a>(model: &'a mut AlignModel, name: &str) -> &'a mut Matrix {
    if name == "projection.b" {
        &mut model.projection.b
    } else {
        &mut model.projection.w
    }
}

/// Freshly attached adapters have `B = 0`, which hides the gradient path
/// through `A`; give `B` small deterministic values so both are exercised.
fn perturb_lora_b(model: &mut AlignModel) {
    for (ai, a) in model.adapters.iter_mut().enumerate() {
        if a.b.data().iter().all(|&v| v == 0.0) {
            for (j, v) in a.b.data_mut().iter_mut().enumerate() {
                *v = 0.01 * (((ai * 7919 + j * 104_729) % 997) as f64 / 498.5 - 1.0);
            }
        }
    }
}

//! Model subcommands: pretrain, train, decode, eval.

use std::collections::HashMap;
use std::path::{Path, PathBuf};

use clap::Args;
use midilm_core::align::{
    greedy_decode, pretrain_lm_with_context, train_stage1, train_stage2, write_loss_log,
    AlignConfig, AlignModel, Example, Projection, Stage, TrainConfig, TrainReport, Vocab,
};
use midilm_core::annotate::{read_jsonl, DatasetRow, Task};
use midilm_core::experiment::text_context;
use midilm_core::metrics::{evaluate, EmbeddingProvider, FileEmbeddings};
use midilm_core::octuple::{tokenize, OctupleToken};
use midilm_core::segment::{select_clips, slice_tokens, Clip};
use midilm_core::{MidiPiece, QuantConfig};
use rayon::prelude::*;
use serde::Serialize;
use serde_json::Value;

use crate::music::{json_bytes, read_piece, write_output};
use crate::{input_err, Classify, CmdResult, Ctx};

#[derive(Debug, Clone, Args)]
pub struct PretrainArgs {
    /// Training rows (JSONL) from assemble
    #[arg(long, value_name = "FILE")]
    pub data: PathBuf,
    /// Directory of <piece_id>.mid files
    #[arg(long, value_name = "DIR")]
    pub midi_dir: PathBuf,
    /// Checkpoint directory to write
    #[arg(long, value_name = "DIR")]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Args)]
pub struct TrainArgs {
    /// 1: projection only; 2: projection and LoRA adapters
    #[arg(long, value_name = "N", value_parser = clap::value_parser!(u8).range(1..=2))]
    pub stage: u8,
    /// Training rows (JSONL) from assemble
    #[arg(long, value_name = "FILE")]
    pub data: PathBuf,
    /// Directory of <piece_id>.mid files
    #[arg(long, value_name = "DIR")]
    pub midi_dir: PathBuf,
    /// Checkpoint to start from (fresh model and vocabulary when omitted)
    #[arg(long, value_name = "DIR")]
    pub init: Option<PathBuf>,
    /// Checkpoint directory to write; also receives loss.jsonl
    #[arg(long, value_name = "DIR")]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Args)]
pub struct DecodeArgs {
    /// Checkpoint directory
    #[arg(long, value_name = "DIR")]
    pub checkpoint: PathBuf,
    /// Rows (JSONL) whose questions are answered
    #[arg(long, value_name = "FILE")]
    pub data: PathBuf,
    /// Directory of <piece_id>.mid files
    #[arg(long, value_name = "DIR")]
    pub midi_dir: PathBuf,
    /// Predictions output (JSONL)
    #[arg(long, value_name = "FILE")]
    pub out: PathBuf,
    /// Maximum generated tokens per answer
    #[arg(long, value_name = "N", default_value_t = 48)]
    pub max_new_tokens: usize,
}

#[derive(Debug, Clone, Args)]
pub struct EvalArgs {
    /// Predictions (JSONL; text from "text", "prediction" or "answer")
    #[arg(long, value_name = "FILE")]
    pub pred: PathBuf,
    /// Gold texts (JSONL, same order as --pred)
    #[arg(long, value_name = "FILE")]
    pub gold: PathBuf,
    /// Word-vector text file enabling BERTScore
    #[arg(long, value_name = "FILE")]
    pub embeddings: Option<PathBuf>,
    /// Report output (JSON; stdout when omitted)
    #[arg(short, long, value_name = "FILE")]
    pub out: Option<PathBuf>,
}

/// Clip tokens looked up by clip id, one parsed piece per piece id.
struct ClipSource<'a> {
    ctx: &'a Ctx,
    midi_dir: &'a Path,
    quant: QuantConfig,
    pieces: HashMap<String, (MidiPiece, Vec<OctupleToken>, Vec<Clip>)>,
}

impl<'a> ClipSource<'a> {
    fn new(ctx: &'a Ctx, midi_dir: &'a Path, quant: QuantConfig) -> Self {
        Self {
            ctx,
            midi_dir,
            quant,
            pieces: HashMap::new(),
        }
    }

    fn tokens(&mut self, piece_id: &str, clip_id: &str) -> CmdResult<Vec<OctupleToken>> {
        if !self.pieces.contains_key(piece_id) {
            let path = self.midi_dir.join(format!("{piece_id}.mid"));
            let piece = read_piece(&path)?;
            let tokens =
                tokenize(&piece, &self.quant).input(|| format!("tokenizing {}", path.display()))?;
            let cfg = &self.ctx.cfg;
            let clips = select_clips(&piece, piece_id, cfg.clip_seconds, cfg.clips_per_piece)
                .input(|| format!("segmenting {}", path.display()))?;
            self.pieces
                .insert(piece_id.to_string(), (piece, tokens, clips));
        }
        let (piece, tokens, clips) = &self.pieces[piece_id];
        let clip = clips
            .iter()
            .find(|c| c.clip_id() == clip_id)
            .ok_or_else(|| {
                crate::Failure::Input(anyhow::anyhow!(
                    "clip {clip_id} not found in piece {piece_id}"
                ))
            })?;
        Ok(slice_tokens(tokens, clip, &piece.timeline, &self.quant))
    }
}

fn read_rows(path: &Path) -> CmdResult<Vec<DatasetRow>> {
    let rows: Vec<DatasetRow> = read_jsonl(path).input(|| format!("reading {}", path.display()))?;
    if rows.is_empty() {
        return input_err(format!("{} has no rows", path.display()));
    }
    Ok(rows)
}

/// Examples from dataset rows; answers are cut to fit the sequence limit.
fn build_examples(
    rows: &[DatasetRow],
    vocab: &Vocab,
    cfg: &AlignConfig,
    clips: &mut ClipSource,
) -> CmdResult<Vec<(usize, Example)>> {
    let budget = cfg.max_seq - cfg.prefix_count;
    let mut out = Vec::new();
    let mut cut = 0;
    for (i, row) in rows.iter().enumerate() {
        let q = vocab.encode(&row.question);
        if q.len() + 2 > budget {
            log::warn!(
                "{}: question longer than the sequence limit, skipped",
                row.clip_id
            );
            continue;
        }
        let mut a = vocab.encode(&row.answer);
        if q.len() + a.len() + 1 > budget {
            a.truncate(budget - q.len() - 1);
            cut += 1;
        }
        let tokens = clips.tokens(&row.piece_id, &row.clip_id)?;
        out.push((i, Example::new(row.clip_id.clone(), tokens, &q, &a)));
    }
    if cut > 0 {
        log::info!("{cut} answers truncated to the sequence limit");
    }
    if out.is_empty() {
        return input_err("no usable training rows");
    }
    Ok(out)
}

fn build_vocab(rows: &[DatasetRow], cap: usize) -> CmdResult<Vocab> {
    Vocab::build(
        rows.iter()
            .flat_map(|r| [r.question.as_str(), r.answer.as_str()]),
        cap,
    )
    .input(|| "building vocabulary".to_string())
}

fn finish(
    out: &Path,
    model: &AlignModel,
    vocab: &Vocab,
    stage: &str,
    report: &TrainReport,
) -> CmdResult {
    model
        .save(out, vocab, stage)
        .internal(|| format!("saving checkpoint {}", out.display()))?;
    let mut log = Vec::new();
    write_loss_log(&mut log, &report.steps).internal(|| "loss log".to_string())?;
    write_output(&out.join("loss.jsonl"), &log)?;
    let (stored, _) =
        AlignModel::load(out).internal(|| format!("reloading checkpoint {}", out.display()))?;
    write_output(
        &out.join("checksums.json"),
        &json_bytes(&stored.checksums())?,
    )?;
    if let (Some(a), Some(b)) = (report.initial_loss(), report.final_loss()) {
        log::info!(
            "{stage}: {} steps, loss {a:.4} -> {b:.4}",
            report.steps.len()
        );
    }
    Ok(())
}

pub fn pretrain(ctx: &Ctx, a: &PretrainArgs) -> CmdResult {
    let rows = read_rows(&a.data)?;
    let cfg = &ctx.cfg;
    let vocab = build_vocab(&rows, cfg.align.vocab_size)?;
    let mut model = AlignModel::new(cfg.align.clone(), cfg.quant.clone())
        .input(|| "model configuration".to_string())?;
    let mut clips = ClipSource::new(ctx, &a.midi_dir, cfg.quant.clone());
    let examples = build_examples(&rows, &vocab, &cfg.align, &mut clips)?;
    let captions: HashMap<&str, &str> = rows
        .iter()
        .filter(|r| r.task == Task::Caption)
        .map(|r| (r.clip_id.as_str(), r.answer.as_str()))
        .collect();
    let contexts: Vec<Vec<f64>> = examples
        .iter()
        .map(|(i, _)| {
            let row = &rows[*i];
            let text = captions
                .get(row.clip_id.as_str())
                .copied()
                .unwrap_or(&row.answer);
            text_context(&vocab.encode(text), cfg.align.encoder_dim, cfg.align.seed)
        })
        .collect();
    let text_only: Vec<Example> = examples
        .into_iter()
        .map(|(_, mut e)| {
            e.answer_mask = (0..e.text_ids.len()).map(|j| j > 0).collect();
            e
        })
        .collect();
    let tc = cfg.pretrain.clone().for_dataset(text_only.len());
    let report = pretrain_lm_with_context(&text_only, &contexts, &mut model, &tc)
        .internal(|| "pretraining".to_string())?;
    model.projection = Projection::zeros(
        cfg.align.encoder_dim,
        cfg.align.lm_dim,
        cfg.align.prefix_count,
    );
    finish(&a.out, &model, &vocab, "pretrain", &report)
}

pub fn train(ctx: &Ctx, a: &TrainArgs) -> CmdResult {
    let rows = read_rows(&a.data)?;
    let (mut model, vocab) = match &a.init {
        Some(dir) => {
            let (m, ck) =
                AlignModel::load(dir).input(|| format!("loading checkpoint {}", dir.display()))?;
            (m, ck.vocab)
        }
        None => (
            AlignModel::new(ctx.cfg.align.clone(), ctx.cfg.quant.clone())
                .input(|| "model configuration".to_string())?,
            build_vocab(&rows, ctx.cfg.align.vocab_size)?,
        ),
    };
    let mut clips = ClipSource::new(ctx, &a.midi_dir, model.quant.clone());
    let examples: Vec<Example> = build_examples(&rows, &vocab, &model.config, &mut clips)?
        .into_iter()
        .map(|(_, e)| e)
        .collect();
    let stage = if a.stage == 1 {
        Stage::Alignment
    } else {
        Stage::InstructionTuning
    };
    let tc = TrainConfig {
        stage,
        ..ctx.cfg.train.clone()
    }
    .for_dataset(examples.len());
    let report = match stage {
        Stage::Alignment => train_stage1(&examples, &mut model, &tc),
        Stage::InstructionTuning => train_stage2(&examples, &mut model, &tc),
    }
    .internal(|| format!("training stage {}", a.stage))?;
    finish(
        &a.out,
        &model,
        &vocab,
        &format!("stage{}", a.stage),
        &report,
    )
}

#[derive(Serialize)]
struct Prediction<'a> {
    id: String,
    clip_id: &'a str,
    question: &'a str,
    text: String,
}

pub fn decode(ctx: &Ctx, a: &DecodeArgs) -> CmdResult {
    let (model, ck) = AlignModel::load(&a.checkpoint)
        .input(|| format!("loading checkpoint {}", a.checkpoint.display()))?;
    let rows = read_rows(&a.data)?;
    let mut clips = ClipSource::new(ctx, &a.midi_dir, model.quant.clone());
    let inputs: Vec<(Vec<OctupleToken>, Vec<u32>)> = rows
        .iter()
        .map(|r| {
            Ok((
                clips.tokens(&r.piece_id, &r.clip_id)?,
                ck.vocab.encode(&r.question),
            ))
        })
        .collect::<CmdResult<_>>()?;
    let outputs: Vec<CmdResult<String>> = ctx.pool()?.install(|| {
        inputs
            .par_iter()
            .map(|(tokens, prompt)| {
                let prefix = model
                    .prefix(tokens)
                    .internal(|| "projecting clip".to_string())?;
                let ids = greedy_decode(
                    &prefix,
                    prompt,
                    &model.lm,
                    &model.adapters,
                    a.max_new_tokens,
                )
                .input(|| "decoding".to_string())?;
                Ok(ck.vocab.decode(&ids))
            })
            .collect()
    });
    let mut preds = Vec::with_capacity(rows.len());
    for (i, (row, text)) in rows.iter().zip(outputs).enumerate() {
        preds.push(Prediction {
            id: format!("{}#{i}", row.clip_id),
            clip_id: &row.clip_id,
            question: &row.question,
            text: text?,
        });
    }
    midilm_core::annotate::write_jsonl(&a.out, &preds)
        .internal(|| format!("writing {}", a.out.display()))
}

fn text_rows(path: &Path) -> CmdResult<Vec<(String, String)>> {
    let rows: Vec<Value> = read_jsonl(path).input(|| format!("reading {}", path.display()))?;
    rows.iter()
        .enumerate()
        .map(|(i, v)| {
            let text = ["text", "prediction", "answer"]
                .iter()
                .find_map(|k| v.get(k).and_then(Value::as_str));
            let Some(text) = text else {
                return input_err(format!("{} line {}: no text field", path.display(), i + 1));
            };
            let id = ["id", "clip_id"]
                .iter()
                .find_map(|k| v.get(k).and_then(Value::as_str))
                .map_or_else(|| i.to_string(), str::to_string);
            Ok((id, text.to_string()))
        })
        .collect()
}

pub fn eval(_ctx: &Ctx, a: &EvalArgs) -> CmdResult {
    let pred = text_rows(&a.pred)?;
    let gold = text_rows(&a.gold)?;
    if pred.len() != gold.len() {
        return input_err(format!(
            "{} predictions but {} gold rows",
            pred.len(),
            gold.len()
        ));
    }
    let samples: Vec<(String, String, String)> = pred
        .into_iter()
        .zip(gold)
        .map(|((id, h), (_, r))| (id, h, r))
        .collect();
    let emb = match &a.embeddings {
        Some(p) => Some(FileEmbeddings::from_path(p).input(|| format!("loading {}", p.display()))?),
        None => None,
    };
    let report = evaluate(&samples, emb.as_ref().map(|e| e as &dyn EmbeddingProvider))
        .input(|| "scoring".to_string())?;
    let bytes = json_bytes(&report)?;
    match &a.out {
        Some(p) => write_output(p, &bytes),
        None => {
            use std::io::Write;
            std::io::stdout()
                .lock()
                .write_all(&bytes)
                .internal(|| "writing stdout".to_string())
        }
    }
}

//! Annotation data subcommands: annotate, gen-qa, assemble.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Duration;

use clap::Args;
use midilm_core::annotate::{
    annotate_sources, assemble_dataset, gen_qa_for_clips, paraphrase_qa, read_jsonl, source_digest,
    write_jsonl, AnnotateError, AnnotationRecord, CachedClient, ClipFeatures, ClipRef, HttpClient,
    LlmClient, LlmError, PieceSource, QaPair, RetryPolicy,
};
use midilm_core::features::summarize;
use rayon::prelude::*;

use crate::config::LlmMode;
use crate::music::{clips_of, read_piece};
use crate::{Classify, CmdResult, Ctx, Failure};

#[derive(Debug, Clone, Args)]
pub struct AnnotateArgs {
    /// Piece sources, one JSON object per line (piece_id, title, composer, source_text)
    #[arg(long, value_name = "FILE")]
    pub sources: PathBuf,
    /// Annotation records output (JSONL); existing records with an unchanged source digest are reused
    #[arg(long, value_name = "FILE")]
    pub out: PathBuf,
    /// Directory of <piece_id>.mid files used to attach piece features
    #[arg(long, value_name = "DIR")]
    pub midi_dir: Option<PathBuf>,
}

#[derive(Debug, Clone, Args)]
pub struct GenQaArgs {
    /// Annotation records (JSONL)
    #[arg(long, value_name = "FILE")]
    pub annotations: PathBuf,
    /// Directory of <piece_id>.mid files to segment into clips
    #[arg(long, value_name = "DIR")]
    pub midi_dir: PathBuf,
    /// Q&A pairs output (JSONL)
    #[arg(long, value_name = "FILE")]
    pub out: PathBuf,
    /// Clip list output (JSONL)
    #[arg(long, value_name = "FILE")]
    pub clips_out: PathBuf,
}

#[derive(Debug, Clone, Args)]
pub struct AssembleArgs {
    /// Annotation records (JSONL)
    #[arg(long, value_name = "FILE")]
    pub annotations: PathBuf,
    /// Clip list (JSONL) from gen-qa
    #[arg(long, value_name = "FILE")]
    pub clips: PathBuf,
    /// Q&A pairs (JSONL) from gen-qa
    #[arg(long, value_name = "FILE")]
    pub qa: PathBuf,
    /// Directory for train.jsonl, test.jsonl and manifest.json
    #[arg(long, value_name = "DIR")]
    pub out_dir: PathBuf,
}

fn read_input<T: serde::de::DeserializeOwned>(path: &Path) -> CmdResult<Vec<T>> {
    read_jsonl(path).input(|| format!("reading {}", path.display()))
}

fn llm_client(ctx: &Ctx) -> CachedClient {
    let s = &ctx.cfg.llm;
    let dir = ctx.cfg.paths.cache_dir.clone();
    match s.mode {
        LlmMode::Replay => CachedClient::replay(dir),
        LlmMode::Http => CachedClient::new(dir, Box::new(HttpClient::new(s.http.clone()))),
    }
}

fn retry_policy(ctx: &Ctx) -> RetryPolicy {
    RetryPolicy {
        max_attempts: ctx.cfg.llm.max_attempts,
        base_delay: Duration::from_millis(ctx.cfg.llm.base_delay_ms),
    }
}

fn classify(id: &str, e: AnnotateError) -> Failure {
    let transient = matches!(
        e,
        AnnotateError::Llm(LlmError::Transport(_) | LlmError::Timeout(_) | LlmError::RateLimited)
            | AnnotateError::Io(_)
    );
    let err = anyhow::Error::new(e).context(format!("annotating {id}"));
    if transient {
        Failure::Internal(err)
    } else {
        Failure::Input(err)
    }
}

pub fn annotate(ctx: &Ctx, a: &AnnotateArgs) -> CmdResult {
    let mut sources: Vec<PieceSource> = read_input(&a.sources)?;
    if let Some(dir) = &a.midi_dir {
        for s in sources.iter_mut().filter(|s| s.features.is_none()) {
            let path = dir.join(format!("{}.mid", s.piece_id));
            if path.exists() {
                s.features = Some(
                    summarize(&read_piece(&path)?)
                        .input(|| format!("features of {}", path.display()))?,
                );
            }
        }
    }
    let existing: BTreeMap<String, AnnotationRecord> = if a.out.exists() {
        read_input::<AnnotationRecord>(&a.out)?
            .into_iter()
            .map(|r| (r.piece_id.clone(), r))
            .collect()
    } else {
        BTreeMap::new()
    };
    let mut records: BTreeMap<String, AnnotationRecord> = BTreeMap::new();
    let mut todo = Vec::new();
    for s in sources {
        match existing.get(&s.piece_id) {
            Some(r)
                if r.source_digest == source_digest(&s.source_text) && r.features == s.features =>
            {
                log::info!(
                    "{}: reusing annotation for source {}",
                    s.piece_id,
                    r.source_digest
                );
                records.insert(s.piece_id.clone(), r.clone());
            }
            _ => todo.push(s),
        }
    }
    let client = llm_client(ctx);
    let jobs = ctx.jobs().min(ctx.cfg.llm.concurrency.max(1));
    let mut first_err = None;
    for (id, r) in annotate_sources(
        &todo,
        &client as &(dyn LlmClient + Sync),
        &retry_policy(ctx),
        jobs,
    ) {
        match r {
            Ok(rec) => {
                records.insert(id, rec);
            }
            Err(e) => {
                log::error!("{id}: {e}");
                first_err.get_or_insert(classify(&id, e));
            }
        }
    }
    let out: Vec<AnnotationRecord> = records.into_values().collect();
    let valid = out.iter().filter(|r| r.is_valid_tagged()).count();
    log::info!("{} records, {valid} valid-tagged", out.len());
    write_jsonl(&a.out, &out).internal(|| format!("writing {}", a.out.display()))?;
    first_err.map_or(Ok(()), Err)
}

pub fn gen_qa(ctx: &Ctx, a: &GenQaArgs) -> CmdResult {
    let mut records: Vec<AnnotationRecord> = read_input(&a.annotations)?;
    records.sort_by(|x, y| x.piece_id.cmp(&y.piece_id));
    let seed = ctx.cfg.split_seed;
    let per_piece: Vec<CmdResult<(Vec<ClipRef>, Vec<QaPair>)>> = ctx.pool()?.install(|| {
        records
            .par_iter()
            .map(|r| {
                let path = a.midi_dir.join(format!("{}.mid", r.piece_id));
                if !path.exists() {
                    log::warn!(
                        "{}: no MIDI file at {}, skipped",
                        r.piece_id,
                        path.display()
                    );
                    return Ok((Vec::new(), Vec::new()));
                }
                let clips = clips_of(ctx, &read_piece(&path)?, &r.piece_id)?;
                let feats: Vec<ClipFeatures> = clips
                    .iter()
                    .map(|c| ClipFeatures {
                        clip_id: c.clip_id.clone(),
                        features: c.features,
                    })
                    .collect();
                let qa = match gen_qa_for_clips(r, &feats, seed) {
                    Ok(q) => q,
                    Err(AnnotateError::NoContent(m)) => {
                        log::warn!("{m}, skipped");
                        return Ok((Vec::new(), Vec::new()));
                    }
                    Err(e) => return Err(Failure::Internal(e.into())),
                };
                let refs = clips
                    .into_iter()
                    .map(|c| ClipRef {
                        clip_id: c.clip_id,
                        piece_id: r.piece_id.clone(),
                        features: c.features,
                    })
                    .collect();
                Ok((refs, qa))
            })
            .collect()
    });
    let mut clips = Vec::new();
    let mut qa = Vec::new();
    for r in per_piece {
        let (c, q) = r?;
        clips.extend(c);
        qa.extend(q);
    }
    if ctx.cfg.llm.paraphrase {
        let client = llm_client(ctx);
        qa = paraphrase_qa(&qa, &client, &retry_policy(ctx))
            .map_err(|e| classify("paraphrase", e))?;
    }
    log::info!("{} clips, {} Q&A pairs", clips.len(), qa.len());
    write_jsonl(&a.out, &qa).internal(|| format!("writing {}", a.out.display()))?;
    write_jsonl(&a.clips_out, &clips).internal(|| format!("writing {}", a.clips_out.display()))
}

pub fn assemble(ctx: &Ctx, a: &AssembleArgs) -> CmdResult {
    let records: Vec<AnnotationRecord> = read_input(&a.annotations)?;
    let clips: Vec<ClipRef> = read_input(&a.clips)?;
    let qa: Vec<QaPair> = read_input(&a.qa)?;
    let ds = assemble_dataset(&records, &clips, &qa, ctx.cfg.split_seed)
        .input(|| "assembling dataset".to_string())?;
    log::info!(
        "train {} rows from {} pieces, test {} rows from {} pieces",
        ds.train.len(),
        ds.manifest.train.pieces,
        ds.test.len(),
        ds.manifest.test.pieces
    );
    ds.write(&a.out_dir)
        .internal(|| format!("writing {}", a.out_dir.display()))
}

//! Per-file music subcommands: parse, tokenize, segment, abc, features.

use std::io::Write;
use std::path::{Path, PathBuf};

use midilm_core::features::{summarize, summarize_range, FeatureSummary};
use midilm_core::octuple::{tokenize as octuple_tokenize, write_tokens};
use midilm_core::segment::{select_clips, Clip};
use midilm_core::{parse_smf, MidiPiece};
use rayon::prelude::*;
use serde::Serialize;

use crate::{input_err, Classify, CmdResult, Ctx, FileIo};

pub fn piece_id(path: &Path) -> String {
    path.file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| path.display().to_string())
}

pub fn read_piece(path: &Path) -> CmdResult<MidiPiece> {
    let bytes = std::fs::read(path).input(|| format!("reading {}", path.display()))?;
    parse_smf(&bytes).input(|| format!("parsing {}", path.display()))
}

pub fn write_output(path: &Path, bytes: &[u8]) -> CmdResult {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).internal(|| format!("creating {}", dir.display()))?;
    }
    midilm_core::io::write_atomic(path, bytes).internal(|| format!("writing {}", path.display()))
}

pub fn json_bytes<T: Serialize + ?Sized>(value: &T) -> CmdResult<Vec<u8>> {
    let mut v = serde_json::to_vec_pretty(value).internal(|| "serializing JSON".to_string())?;
    v.push(b'\n');
    Ok(v)
}

fn for_each_file(
    ctx: &Ctx,
    io: &FileIo,
    ext: &str,
    f: impl Fn(&Path) -> CmdResult<Vec<u8>> + Sync,
) -> CmdResult {
    if io.inputs.len() > 1 && io.out_dir.is_none() {
        return input_err("several inputs need --out-dir");
    }
    let results: Vec<(PathBuf, CmdResult<Vec<u8>>)> = ctx
        .pool()?
        .install(|| io.inputs.par_iter().map(|p| (p.clone(), f(p))).collect());
    let mut first_err = None;
    for (path, r) in results {
        match r {
            Ok(bytes) => {
                if let Some(dir) = &io.out_dir {
                    write_output(&dir.join(format!("{}.{ext}", piece_id(&path))), &bytes)?;
                } else if let Some(out) = &io.out {
                    write_output(out, &bytes)?;
                } else {
                    std::io::stdout()
                        .lock()
                        .write_all(&bytes)
                        .internal(|| "writing stdout".to_string())?;
                }
            }
            Err(e) => {
                log::error!("{}: failed", path.display());
                first_err.get_or_insert(e);
            }
        }
    }
    first_err.map_or(Ok(()), Err)
}

pub fn parse(ctx: &Ctx, io: &FileIo) -> CmdResult {
    for_each_file(ctx, io, "json", |p| json_bytes(&read_piece(p)?))
}

pub fn tokenize(ctx: &Ctx, io: &FileIo) -> CmdResult {
    for_each_file(ctx, io, "oct", |p| {
        let piece = read_piece(p)?;
        let tokens = octuple_tokenize(&piece, &ctx.cfg.quant)
            .input(|| format!("tokenizing {}", p.display()))?;
        Ok(write_tokens(&tokens).into_bytes())
    })
}

#[derive(Serialize)]
pub struct ClipOut {
    pub clip_id: String,
    #[serde(flatten)]
    pub clip: Clip,
    pub features: Option<FeatureSummary>,
}

pub fn clips_of(ctx: &Ctx, piece: &MidiPiece, id: &str) -> CmdResult<Vec<ClipOut>> {
    let clips = select_clips(piece, id, ctx.cfg.clip_seconds, ctx.cfg.clips_per_piece)
        .input(|| format!("segmenting {id}"))?;
    Ok(clips
        .into_iter()
        .map(|c| ClipOut {
            clip_id: c.clip_id(),
            features: summarize_range(piece, c.start_tick, c.end_tick).ok(),
            clip: c,
        })
        .collect())
}

pub fn segment(ctx: &Ctx, io: &FileIo) -> CmdResult {
    for_each_file(ctx, io, "clips.json", |p| {
        json_bytes(&clips_of(ctx, &read_piece(p)?, &piece_id(p))?)
    })
}

pub fn abc(ctx: &Ctx, io: &FileIo) -> CmdResult {
    for_each_file(ctx, io, "abc", |p| {
        let doc = midilm_core::abc::to_abc(&read_piece(p)?, None)
            .input(|| format!("converting {}", p.display()))?;
        if !doc.loss_report.is_lossless() {
            log::info!(
                "{}: {}",
                p.display(),
                serde_json::to_string(&doc.loss_report).unwrap_or_default()
            );
        }
        Ok(doc.to_string().into_bytes())
    })
}

pub fn features(ctx: &Ctx, io: &FileIo) -> CmdResult {
    for_each_file(ctx, io, "features.json", |p| {
        json_bytes(&summarize(&read_piece(p)?).input(|| format!("features of {}", p.display()))?)
    })
}

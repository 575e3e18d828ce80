//! Piece-level train/test split and JSONL output.

use std::collections::{BTreeMap, BTreeSet};
use std::io::BufRead;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use super::qa::{gen_caption_target, Grounding, QaPair, TagSource};
use super::record::AnnotationRecord;
use super::{AnnotateError, TEMPLATE_VERSION};
use crate::features::FeatureSummary;

/// Fraction of pieces held out for testing.
pub const TEST_RATIO: f64 = 0.1;
/// Question paired with caption targets.
pub const CAPTION_QUESTION: &str = "Describe this music.";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClipRef {
    pub clip_id: String,
    pub piece_id: String,
    #[serde(default)]
    pub features: Option<FeatureSummary>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    Qa,
    Caption,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetRow {
    pub clip_id: String,
    pub piece_id: String,
    pub task: Task,
    pub question: String,
    pub answer: String,
    pub tag_source: Option<TagSource>,
    pub grounding: Grounding,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SplitCounts {
    pub pieces: usize,
    pub clips: usize,
    pub qa: usize,
    pub captions: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub template_version: String,
    pub split_seed: u64,
    pub test_ratio: f64,
    pub train: SplitCounts,
    pub test: SplitCounts,
    pub test_pieces: Vec<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub train: Vec<DatasetRow>,
    pub test: Vec<DatasetRow>,
    pub manifest: Manifest,
}

impl Dataset {
    /// Writes `train.jsonl`, `test.jsonl` and `manifest.json` atomically.
    pub fn write(&self, dir: &Path) -> Result<(), AnnotateError> {
        std::fs::create_dir_all(dir)?;
        write_jsonl(&dir.join("train.jsonl"), &self.train)?;
        write_jsonl(&dir.join("test.jsonl"), &self.test)?;
        let mut m = serde_json::to_vec_pretty(&self.manifest)?;
        m.push(b'\n');
        crate::io::write_atomic(&dir.join("manifest.json"), &m)?;
        Ok(())
    }
}

pub fn write_jsonl<T: Serialize>(path: &Path, items: &[T]) -> Result<(), AnnotateError> {
    let mut buf = Vec::new();
    for item in items {
        serde_json::to_writer(&mut buf, item)?;
        buf.push(b'\n');
    }
    crate::io::write_atomic(path, &buf)?;
    Ok(())
}

pub fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>, AnnotateError> {
    let f = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut out = Vec::new();
    for line in f.lines() {
        let line = line?;
        if !line.trim().is_empty() {
            out.push(serde_json::from_str(&line)?);
        }
    }
    Ok(out)
}

fn test_piece_count(n: usize) -> usize {
    let k = (n as f64 * TEST_RATIO).round() as usize;
    if n >= 2 {
        k.max(1)
    } else {
        k
    }
}

/// Splits pieces 90/10 with a seeded shuffle and emits one caption row per
/// clip of a valid-tagged record plus every Q&A pair, grouped by piece.
pub fn assemble_dataset(
    records: &[AnnotationRecord],
    clips: &[ClipRef],
    qa: &[QaPair],
    split_seed: u64,
) -> Result<Dataset, AnnotateError> {
    let mut by_piece: BTreeMap<&str, &AnnotationRecord> = BTreeMap::new();
    for r in records {
        if by_piece.insert(&r.piece_id, r).is_some() {
            return Err(AnnotateError::IdMismatch(format!(
                "duplicate record {}",
                r.piece_id
            )));
        }
    }
    let mut clip_piece: BTreeMap<&str, &str> = BTreeMap::new();
    let mut piece_clips: BTreeMap<&str, Vec<&ClipRef>> = BTreeMap::new();
    for c in clips {
        if !by_piece.contains_key(c.piece_id.as_str()) {
            return Err(AnnotateError::IdMismatch(format!(
                "clip {} references unknown piece {}",
                c.clip_id, c.piece_id
            )));
        }
        if clip_piece.insert(&c.clip_id, &c.piece_id).is_some() {
            return Err(AnnotateError::IdMismatch(format!(
                "duplicate clip {}",
                c.clip_id
            )));
        }
        piece_clips.entry(&c.piece_id).or_default().push(c);
    }
    let mut clip_qa: BTreeMap<&str, Vec<&QaPair>> = BTreeMap::new();
    for p in qa {
        let piece = clip_piece.get(p.clip_id.as_str()).ok_or_else(|| {
            AnnotateError::IdMismatch(format!("Q&A pair for unknown clip {}", p.clip_id))
        })?;
        if let Some(key) = p.tag_source.record_key() {
            if by_piece[piece].tag(key).is_none() {
                return Err(AnnotateError::InvalidInput(format!(
                    "Q&A pair for {} uses sentinel field {key}",
                    p.clip_id
                )));
            }
        }
        clip_qa.entry(&p.clip_id).or_default().push(p);
    }

    let mut pieces: Vec<&str> = by_piece.keys().copied().collect();
    pieces.shuffle(&mut ChaCha8Rng::seed_from_u64(split_seed));
    let test_set: BTreeSet<&str> = pieces[..test_piece_count(pieces.len())]
        .iter()
        .copied()
        .collect();

    let mut train = Vec::new();
    let mut test = Vec::new();
    let mut counts = [SplitCounts::default(), SplitCounts::default()];
    for (&piece, record) in &by_piece {
        let held_out = test_set.contains(piece);
        let (rows, c) = if held_out {
            (&mut test, &mut counts[1])
        } else {
            (&mut train, &mut counts[0])
        };
        c.pieces += 1;
        for clip in piece_clips.get(piece).into_iter().flatten() {
            c.clips += 1;
            if record.is_valid_tagged() {
                rows.push(DatasetRow {
                    clip_id: clip.clip_id.clone(),
                    piece_id: piece.to_string(),
                    task: Task::Caption,
                    question: CAPTION_QUESTION.to_string(),
                    answer: gen_caption_target(record, clip.features.as_ref())?,
                    tag_source: None,
                    grounding: if clip.features.is_some() {
                        Grounding::Clip
                    } else {
                        Grounding::Piece
                    },
                });
                c.captions += 1;
            }
            for p in clip_qa.get(clip.clip_id.as_str()).into_iter().flatten() {
                rows.push(DatasetRow {
                    clip_id: p.clip_id.clone(),
                    piece_id: piece.to_string(),
                    task: Task::Qa,
                    question: p.question.clone(),
                    answer: p.answer.clone(),
                    tag_source: Some(p.tag_source),
                    grounding: p.grounding,
                });
                c.qa += 1;
            }
        }
    }
    let [train_counts, test_counts] = counts;
    Ok(Dataset {
        train,
        test,
        manifest: Manifest {
            template_version: TEMPLATE_VERSION.to_string(),
            split_seed,
            test_ratio: TEST_RATIO,
            train: train_counts,
            test: test_counts,
            test_pieces: test_set.iter().map(|s| s.to_string()).collect(),
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::annotate::gen_qa;

    fn fixture(n: usize, clips_per: usize) -> (Vec<AnnotationRecord>, Vec<ClipRef>, Vec<QaPair>) {
        let mut records = Vec::new();
        let mut clips = Vec::new();
        let mut qa = Vec::new();
        for i in 0..n {
            let id = format!("piece{i:02}");
            let mut r = AnnotationRecord::sentinel(&id, None, "");
            r.genre = "Waltz".into();
            let ids: Vec<String> = (0..clips_per)
                .map(|c| format!("{id}@{}", c * 100))
                .collect();
            qa.extend(gen_qa(&r, &ids, 1).unwrap());
            clips.extend(ids.into_iter().map(|clip_id| ClipRef {
                clip_id,
                piece_id: id.clone(),
                features: None,
            }));
            records.push(r);
        }
        (records, clips, qa)
    }

    #[test]
    fn ten_pieces_split_nine_one() {
        let (r, c, q) = fixture(10, 3);
        let d = assemble_dataset(&r, &c, &q, 42).unwrap();
        assert_eq!(d.manifest.train.pieces, 9);
        assert_eq!(d.manifest.test.pieces, 1);
        assert_eq!(d.manifest.test.clips, 3);
        let train: BTreeSet<&str> = d.train.iter().map(|r| r.piece_id.as_str()).collect();
        assert!(d.test.iter().all(|r| !train.contains(r.piece_id.as_str())));
        assert_eq!(d, assemble_dataset(&r, &c, &q, 42).unwrap());
    }

    #[test]
    fn unknown_ids_rejected() {
        let (r, mut c, q) = fixture(2, 1);
        c.push(ClipRef {
            clip_id: "x@0".into(),
            piece_id: "x".into(),
            features: None,
        });
        assert!(matches!(
            assemble_dataset(&r, &c, &q, 0),
            Err(AnnotateError::IdMismatch(_))
        ));
        let (r, c, mut q) = fixture(2, 1);
        q[0].clip_id = "nope".into();
        assert!(matches!(
            assemble_dataset(&r, &c, &q, 0),
            Err(AnnotateError::IdMismatch(_))
        ));
    }

    #[test]
    fn jsonl_roundtrip() {
        let (r, c, q) = fixture(3, 2);
        let d = assemble_dataset(&r, &c, &q, 0).unwrap();
        let dir = std::env::temp_dir().join(format!("midilm-ds-{}", std::process::id()));
        d.write(&dir).unwrap();
        let back: Vec<DatasetRow> = read_jsonl(&dir.join("train.jsonl")).unwrap();
        assert_eq!(back, d.train);
        std::fs::remove_dir_all(&dir).unwrap();
    }
}

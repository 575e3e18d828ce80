//! Template Q&A pairs and caption targets.

use serde::{Deserialize, Serialize};

use super::llm::{llm_complete_with, LlmClient, LlmRequest, RetryPolicy};
use super::record::AnnotationRecord;
use super::{sha256_hex, AnnotateError};
use crate::features::{tempo_descriptor, FeatureSummary};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum TagSource {
    Genre,
    Style,
    Background,
    ExpressiveIntent,
    PerceivedEmotion,
    Tempo,
    Key,
    TimeSignature,
}

impl TagSource {
    pub const TAGS: [TagSource; 5] = [
        TagSource::Genre,
        TagSource::Style,
        TagSource::Background,
        TagSource::ExpressiveIntent,
        TagSource::PerceivedEmotion,
    ];
    pub const FEATURES: [TagSource; 3] =
        [TagSource::Tempo, TagSource::Key, TagSource::TimeSignature];

    /// Record field key for tag sources, `None` for features.
    pub fn record_key(self) -> Option<&'static str> {
        match self {
            TagSource::Genre => Some("genre"),
            TagSource::Style => Some("style"),
            TagSource::Background => Some("background"),
            TagSource::ExpressiveIntent => Some("expressive_intent"),
            TagSource::PerceivedEmotion => Some("perceived_emotion"),
            _ => None,
        }
    }

    fn name(self) -> &'static str {
        match self {
            TagSource::Genre => "genre",
            TagSource::Style => "style",
            TagSource::Background => "background",
            TagSource::ExpressiveIntent => "expressive_intent",
            TagSource::PerceivedEmotion => "perceived_emotion",
            TagSource::Tempo => "tempo",
            TagSource::Key => "key",
            TagSource::TimeSignature => "time_signature",
        }
    }

    fn questions(self) -> &'static [&'static str] {
        match self {
            TagSource::Genre => &[
                "What genre is this piece?",
                "Which genre does this music belong to?",
                "How would you classify the genre of this music?",
            ],
            TagSource::Style => &[
                "What is the style of this piece?",
                "Which musical style does this music represent?",
                "How would you describe the style of this composition?",
            ],
            TagSource::Background => &[
                "What is the background of this composition?",
                "Can you tell me about how this piece was composed?",
                "What is the story behind this music?",
            ],
            TagSource::ExpressiveIntent => &[
                "What did the composer intend to express in this piece?",
                "What is the expressive intent of this music?",
                "What was the composer trying to convey with this music?",
            ],
            TagSource::PerceivedEmotion => &[
                "What emotion does this music convey?",
                "How does this piece make a listener feel?",
                "What is the mood of this music?",
            ],
            TagSource::Tempo => &[
                "What is the tempo of this music?",
                "How fast is this piece?",
                "At what speed is this music played?",
            ],
            TagSource::Key => &[
                "What key is this music in?",
                "What is the key of this piece?",
                "Which key signature and mode does this music use?",
            ],
            TagSource::TimeSignature => &[
                "What is the time signature of this music?",
                "What meter is this piece in?",
                "How many beats are in each bar of this music?",
            ],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Grounding {
    Piece,
    Clip,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QaPair {
    pub clip_id: String,
    pub question: String,
    pub answer: String,
    pub tag_source: TagSource,
    pub grounding: Grounding,
}

/// A clip id with optional clip-level features; feature answers fall back
/// to the record's piece-level features when absent.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClipFeatures {
    pub clip_id: String,
    pub features: Option<FeatureSummary>,
}

fn template_index(seed: u64, clip_id: &str, source: TagSource, n: usize) -> usize {
    let h = sha256_hex(format!("{seed}\u{1f}{clip_id}\u{1f}{}", source.name()).as_bytes());
    (u64::from_str_radix(&h[..16], 16).expect("hex digest") % n as u64) as usize
}

fn feature_answer(source: TagSource, f: &FeatureSummary) -> String {
    match source {
        TagSource::Tempo => format!(
            "The tempo is about {:.0} BPM, which is {}.",
            f.tempo_bpm,
            tempo_descriptor(f.tempo_bpm)
        ),
        TagSource::Key => format!("The music is in {}.", f.key),
        TagSource::TimeSignature => {
            format!("The time signature is {}/{}.", f.timesig.0, f.timesig.1)
        }
        _ => unreachable!("not a feature source"),
    }
}

pub fn gen_qa(
    record: &AnnotationRecord,
    clip_ids: &[String],
    seed: u64,
) -> Result<Vec<QaPair>, AnnotateError> {
    let clips: Vec<ClipFeatures> = clip_ids
        .iter()
        .map(|id| ClipFeatures {
            clip_id: id.clone(),
            features: None,
        })
        .collect();
    gen_qa_for_clips(record, &clips, seed)
}

/// One pair per clip for every non-sentinel tag field and every available
/// feature. Question templates are picked by a seeded hash of
/// `(clip_id, field)`.
pub fn gen_qa_for_clips(
    record: &AnnotationRecord,
    clips: &[ClipFeatures],
    seed: u64,
) -> Result<Vec<QaPair>, AnnotateError> {
    let any_features = record.features.is_some() || clips.iter().any(|c| c.features.is_some());
    if !record.is_valid_tagged() && !any_features {
        return Err(AnnotateError::NoContent(format!(
            "{}: no tags and no features",
            record.piece_id
        )));
    }
    let mut out = Vec::new();
    for clip in clips {
        let pick = |source: TagSource| {
            let qs = source.questions();
            qs[template_index(seed, &clip.clip_id, source, qs.len())].to_string()
        };
        for source in TagSource::TAGS {
            let key = source.record_key().expect("tag source");
            if let Some(value) = record.tag(key) {
                out.push(QaPair {
                    clip_id: clip.clip_id.clone(),
                    question: pick(source),
                    answer: value.to_string(),
                    tag_source: source,
                    grounding: Grounding::Piece,
                });
            }
        }
        let (features, grounding) = match (&clip.features, &record.features) {
            (Some(f), _) => (Some(f), Grounding::Clip),
            (None, Some(f)) => (Some(f), Grounding::Piece),
            (None, None) => (None, Grounding::Piece),
        };
        if let Some(f) = features {
            for source in TagSource::FEATURES {
                out.push(QaPair {
                    clip_id: clip.clip_id.clone(),
                    question: pick(source),
                    answer: feature_answer(source, f),
                    tag_source: source,
                    grounding,
                });
            }
        }
    }
    Ok(out)
}

/// Rewrites each question through the LLM at temperature 0; answers and
/// provenance are kept. Empty rewrites keep the template question.
pub fn paraphrase_qa(
    pairs: &[QaPair],
    client: &dyn LlmClient,
    policy: &RetryPolicy,
) -> Result<Vec<QaPair>, AnnotateError> {
    pairs
        .iter()
        .map(|p| {
            let req = LlmRequest {
                prompt: format!(
                    "Rewrite the following question about a piece of music so that it keeps its meaning but uses different wording. Output only the rewritten question.\n\nQuestion: {}\n",
                    p.question
                ),
                temperature: 0.0,
                max_tokens: 64,
            };
            let reply = llm_complete_with(&req, client, policy)?;
            let q = reply.lines().map(str::trim).find(|l| !l.is_empty()).unwrap_or("");
            let mut out = p.clone();
            if !q.is_empty() {
                out.question = q.to_string();
            }
            Ok(out)
        })
        .collect()
}

fn sentence(s: &str) -> String {
    let s = s.trim();
    if s.ends_with(['.', '!', '?']) {
        s.to_string()
    } else {
        format!("{s}.")
    }
}

/// Single-paragraph caption built from the record's tags and features.
pub fn gen_caption_target(
    record: &AnnotationRecord,
    features: Option<&FeatureSummary>,
) -> Result<String, AnnotateError> {
    if !record.is_valid_tagged() {
        return Err(AnnotateError::NoContent(format!(
            "{}: no tags",
            record.piece_id
        )));
    }
    let mut parts = Vec::new();
    match (record.tag("genre"), record.tag("style")) {
        (Some(g), Some(s)) => parts.push(format!("This is a {g} piece in the {s} style.")),
        (Some(g), None) => parts.push(format!("This is a {g} piece.")),
        (None, Some(s)) => parts.push(format!("This piece is in the {s} style.")),
        (None, None) => {}
    }
    if let Some(e) = record.tag("perceived_emotion") {
        parts.push(format!("It conveys a {e} mood."));
    }
    if let Some(f) = features.or(record.features.as_ref()) {
        parts.push(format!(
            "It is in {}, with a {} tempo of about {:.0} BPM and a {}/{} time signature.",
            f.key,
            tempo_descriptor(f.tempo_bpm),
            f.tempo_bpm,
            f.timesig.0,
            f.timesig.1
        ));
    }
    for key in ["background", "expressive_intent"] {
        if let Some(v) = record.tag(key) {
            parts.push(sentence(v));
        }
    }
    Ok(parts.join(" "))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::annotate::NOT_ENOUGH_INFORMATION;
    use crate::features::{Key, Mode};

    fn features() -> FeatureSummary {
        FeatureSummary {
            tempo_bpm: 120.0,
            key: Key::new(2, Mode::Minor),
            timesig: (3, 4),
            duration_s: 60.0,
        }
    }

    fn full() -> AnnotationRecord {
        AnnotationRecord {
            piece_id: "p".into(),
            genre: "Nocturne".into(),
            style: "Romantic".into(),
            background: "Written in Paris".into(),
            expressive_intent: "A quiet reverie.".into(),
            perceived_emotion: "melancholic".into(),
            features: Some(features()),
            source_digest: String::new(),
        }
    }

    fn ids(n: usize) -> Vec<String> {
        (0..n).map(|i| format!("p@{i}")).collect()
    }

    #[test]
    fn emotion_only_record() {
        let mut r = AnnotationRecord::sentinel("p", None, "");
        r.perceived_emotion = "joyful".into();
        let qa = gen_qa(&r, &ids(1), 0).unwrap();
        assert_eq!(qa.len(), 1);
        assert_eq!(qa[0].tag_source, TagSource::PerceivedEmotion);
        assert!(qa[0].answer.contains("joyful"));
    }

    #[test]
    fn sentinel_record_with_features() {
        let r = AnnotationRecord::sentinel("p", Some(features()), "");
        let qa = gen_qa(&r, &ids(2), 0).unwrap();
        assert_eq!(qa.len(), 6);
        assert!(qa
            .iter()
            .all(|p| TagSource::FEATURES.contains(&p.tag_source)));
        assert!(qa.iter().any(|p| p.answer.contains("D minor")));
    }

    #[test]
    fn full_record_count() {
        assert_eq!(gen_qa(&full(), &ids(3), 9).unwrap().len(), 24);
    }

    #[test]
    fn no_content() {
        let r = AnnotationRecord::sentinel("p", None, "");
        assert!(matches!(
            gen_qa(&r, &ids(1), 0),
            Err(AnnotateError::NoContent(_))
        ));
    }

    #[test]
    fn templates_vary_by_clip_and_seed() {
        let qs: std::collections::BTreeSet<String> = (0..40)
            .flat_map(|s| gen_qa(&full(), &ids(3), s).unwrap())
            .filter(|p| p.tag_source == TagSource::Genre)
            .map(|p| p.question)
            .collect();
        assert_eq!(qs.len(), 3);
        assert_eq!(
            gen_qa(&full(), &ids(3), 5).unwrap(),
            gen_qa(&full(), &ids(3), 5).unwrap()
        );
    }

    #[test]
    fn clip_features_ground_to_clip() {
        let clips = [ClipFeatures {
            clip_id: "p@0".into(),
            features: Some(FeatureSummary {
                tempo_bpm: 60.0,
                ..features()
            }),
        }];
        let qa = gen_qa_for_clips(&full(), &clips, 0).unwrap();
        let tempo = qa
            .iter()
            .find(|p| p.tag_source == TagSource::Tempo)
            .unwrap();
        assert_eq!(tempo.grounding, Grounding::Clip);
        assert!(tempo.answer.contains("60 BPM"));
    }

    #[test]
    fn caption_mentions_every_field() {
        let r = full();
        let c = gen_caption_target(&r, None).unwrap();
        for v in [
            "Nocturne",
            "Romantic",
            "Written in Paris",
            "A quiet reverie.",
            "melancholic",
            "D minor",
            "3/4",
        ] {
            assert!(c.contains(v), "{v} missing from {c}");
        }
        assert!(!c.contains('\n'));
        assert_eq!(c, gen_caption_target(&r, None).unwrap());
    }

    #[test]
    fn caption_emotion_only() {
        let mut r = AnnotationRecord::sentinel("p", Some(features()), "");
        r.perceived_emotion = "joyful".into();
        let c = gen_caption_target(&r, None).unwrap();
        assert_eq!(
            c,
            "It conveys a joyful mood. It is in D minor, with a fast tempo of about 120 BPM and a 3/4 time signature."
        );
        assert!(!c.contains(NOT_ENOUGH_INFORMATION));
        let s = AnnotationRecord::sentinel("p", Some(features()), "");
        assert!(matches!(
            gen_caption_target(&s, None),
            Err(AnnotateError::NoContent(_))
        ));
    }
}

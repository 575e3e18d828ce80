//! End-to-end alignment run on the synthetic caption corpus: tokenize
//! clips, build instruction data, pretrain the decoder on text, train both
//! alignment stages, then caption held-out clips.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::align::{
    batch_loss, greedy_decode, pretrain_lm_with_context, train_stage1, train_stage2, AlignConfig,
    AlignError, AlignModel, Example, Matrix, Projection, Stage, TrainConfig, TrainReport, Vocab,
};
use crate::metrics::evaluate;
use crate::octuple::{tokenize, OctupleToken, QuantConfig};
use crate::synth::{caption_corpus, CaptionClip};

pub const CAPTION_PROMPT: &str = "describe this music .";

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SyntheticRunConfig {
    pub clips: usize,
    pub test_fraction: f64,
    pub seed: u64,
    pub align: AlignConfig,
    /// Stage 1 and stage 2 optimizer settings; `stage` and `total_steps`
    /// are filled in per stage.
    pub train: TrainConfig,
    pub stage1_epochs: usize,
    pub stage2_epochs: usize,
    /// Decoder training on the instruction texts, with each clip's caption
    /// as a bag-of-words prefix context, before alignment.
    pub pretrain: TrainConfig,
    pub max_new_tokens: usize,
}

impl Default for SyntheticRunConfig {
    fn default() -> Self {
        Self {
            clips: 200,
            test_fraction: 0.1,
            seed: 7,
            align: AlignConfig::default(),
            train: TrainConfig::default(),
            stage1_epochs: 2,
            stage2_epochs: 2,
            pretrain: TrainConfig {
                max_lr: 2e-3,
                epochs: 6,
                ..TrainConfig::default()
            },
            max_new_tokens: 24,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SyntheticRunReport {
    pub train_examples: usize,
    pub test_clips: usize,
    /// Mean training-set loss before stage 1 and after stage 2.
    pub initial_loss: f64,
    pub final_loss: f64,
    pub stage1: Vec<f64>,
    pub stage2: Vec<f64>,
    pub pretrain_final_loss: Option<f64>,
    pub rouge_l: f64,
    pub bleu: f64,
    /// `(clip id, generated, gold)` for held-out clips.
    pub captions: Vec<(String, String, String)>,
}

/// Questions about each clip besides the caption, with templated answers.
fn qa_texts(clip: &CaptionClip) -> Vec<(String, String)> {
    let descriptor = crate::features::tempo_descriptor(clip.bpm);
    vec![
        (CAPTION_PROMPT.to_string(), clip.caption.clone()),
        (
            "what key is this music in ?".to_string(),
            format!("it is in {}", clip.key.to_string().to_lowercase()),
        ),
        (
            "how fast is this music ?".to_string(),
            format!("the tempo is {descriptor}"),
        ),
        (
            "what is the time signature ?".to_string(),
            format!("the meter is {}/{}", clip.timesig.0, clip.timesig.1),
        ),
    ]
}

/// Bag-of-words context vector for decoder pretraining: the sum of fixed
/// random word vectors divided by the square root of the word count.
pub fn text_context(ids: &[u32], dim: usize, seed: u64) -> Vec<f64> {
    let mut out = vec![0.0; dim];
    for &id in ids {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (u64::from(id) << 20) ^ 0xc0de);
        let w = Matrix::normal(1, dim, 1.0, &mut rng);
        out.iter_mut().zip(w.data()).for_each(|(o, v)| *o += v);
    }
    let n = ids.len().max(1) as f64;
    out.iter_mut().for_each(|v| *v /= n.sqrt());
    out
}

fn losses(r: &TrainReport) -> Vec<f64> {
    r.steps.iter().map(|s| s.loss).collect()
}

pub fn run_synthetic_alignment(cfg: &SyntheticRunConfig) -> Result<SyntheticRunReport, AlignError> {
    let quant = QuantConfig::default();
    let corpus = caption_corpus(cfg.clips, cfg.seed);
    let tokens: Vec<Vec<OctupleToken>> = corpus
        .iter()
        .map(|c| tokenize(&c.piece, &quant).map_err(|e| AlignError::InvalidConfig(e.to_string())))
        .collect::<Result<_, _>>()?;

    let mut order: Vec<usize> = (0..corpus.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed));
    let n_test = ((corpus.len() as f64) * cfg.test_fraction).round() as usize;
    let (test_idx, train_idx) = order.split_at(n_test);

    let train_texts: Vec<(usize, String, String)> = train_idx
        .iter()
        .flat_map(|&i| {
            qa_texts(&corpus[i])
                .into_iter()
                .map(move |(q, a)| (i, q, a))
        })
        .collect();
    let vocab = Vocab::build(
        train_texts
            .iter()
            .flat_map(|(_, q, a)| [q.as_str(), a.as_str()]),
        cfg.align.vocab_size,
    )?;
    let examples: Vec<Example> = train_texts
        .iter()
        .map(|(i, q, a)| {
            Example::new(
                corpus[*i].id.clone(),
                tokens[*i].clone(),
                &vocab.encode(q),
                &vocab.encode(a),
            )
        })
        .collect();

    let mut model = AlignModel::new(cfg.align.clone(), quant)?;

    let pretrain_final_loss = if cfg.pretrain.epochs > 0 {
        let text_only: Vec<Example> = examples
            .iter()
            .map(|e| {
                let mut e = e.clone();
                e.answer_mask = (0..e.text_ids.len()).map(|j| j > 0).collect();
                e
            })
            .collect();
        let contexts: Vec<Vec<f64>> = train_texts
            .iter()
            .map(|(i, _, _)| {
                text_context(
                    &vocab.encode(&corpus[*i].caption),
                    cfg.align.encoder_dim,
                    cfg.seed,
                )
            })
            .collect();
        let pcfg = cfg.pretrain.clone().for_dataset(text_only.len());
        let r = pretrain_lm_with_context(&text_only, &contexts, &mut model, &pcfg)?;
        model.projection = Projection::zeros(
            cfg.align.encoder_dim,
            cfg.align.lm_dim,
            cfg.align.prefix_count,
        );
        r.final_loss()
    } else {
        None
    };

    let initial_loss = batch_loss(&model, &examples)?;
    let s1 = TrainConfig {
        stage: Stage::Alignment,
        epochs: cfg.stage1_epochs,
        ..cfg.train.clone()
    }
    .for_dataset(examples.len());
    let r1 = train_stage1(&examples, &mut model, &s1)?;
    let s2 = TrainConfig {
        stage: Stage::InstructionTuning,
        epochs: cfg.stage2_epochs,
        ..cfg.train.clone()
    }
    .for_dataset(examples.len());
    let r2 = train_stage2(&examples, &mut model, &s2)?;
    let final_loss = batch_loss(&model, &examples)?;

    let prompt = vocab.encode(CAPTION_PROMPT);
    let mut captions = Vec::with_capacity(test_idx.len());
    for &i in test_idx {
        let prefix = model.prefix(&tokens[i])?;
        let out = greedy_decode(
            &prefix,
            &prompt,
            &model.lm,
            &model.adapters,
            cfg.max_new_tokens,
        )?;
        captions.push((
            corpus[i].id.clone(),
            vocab.decode(&out),
            corpus[i].caption.clone(),
        ));
    }
    let (rouge_l, bleu) = if captions.is_empty() {
        (0.0, 0.0)
    } else {
        let report =
            evaluate(&captions, None).map_err(|e| AlignError::InvalidConfig(e.to_string()))?;
        (report.rouge_l, report.bleu)
    };
    Ok(SyntheticRunReport {
        train_examples: examples.len(),
        test_clips: test_idx.len(),
        initial_loss,
        final_loss,
        stage1: losses(&r1),
        stage2: losses(&r2),
        pretrain_final_loss,
        rouge_l,
        bleu,
        captions,
    })
}

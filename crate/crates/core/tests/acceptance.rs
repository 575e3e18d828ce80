//! Acceptance suite: one pass/fail line per criterion on stderr.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use midilm_core::abc::{to_abc, validate_abc};
use midilm_core::align::{
    grad_check, lr_schedule, train_stage1, train_stage2, AlignConfig, AlignModel, Example,
    GradSlice, LoraAdapter, Matrix, Stage, TrainConfig,
};
use midilm_core::annotate::{
    annotate_sources, assemble_dataset, gen_qa_for_clips, write_jsonl, AnnotationRecord,
    ClipFeatures, ClipRef, DatasetRow, LlmClient, LlmError, LlmRequest, PieceSource, QaPair,
    RetryPolicy,
};
use midilm_core::experiment::{run_synthetic_alignment, SyntheticRunConfig};
use midilm_core::features::{estimate_key, summarize, Key, Mode};
use midilm_core::metrics::{
    bert_score, bleu, meteor, rouge_l, tokenize_text, FileEmbeddings, TokenizedText,
};
use midilm_core::midi::{MidiPiece, NoteEvent};
use midilm_core::octuple::{detokenize, tokenize};
use midilm_core::segment::select_clips;
use midilm_core::synth::{
    fuzz_piece, on_grid_piece, scale_piece, tonal_piece, FuzzOptions, TonalSpec,
};
use midilm_core::QuantConfig;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = Result<String, String>;
type Criterion = (u8, &'static str, fn() -> Outcome);
/// `(pitch, onset, end)` per voice.
type VoiceNotes = Vec<Vec<(u8, u64, u64)>>;

fn check(cond: bool, detail: String) -> Outcome {
    if cond {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn within(elapsed: Duration, limit_s: f64, detail: String) -> Outcome {
    let s = elapsed.as_secs_f64();
    check(
        s < limit_s,
        format!("{detail}; {s:.1} s (limit {limit_s} s)"),
    )
}

#[test]
fn acceptance() {
    let criteria: [Criterion; 10] = [
        (2, "metric oracles", metric_oracles),
        (3, "gradient check", gradient_check),
        (4, "freeze invariants", freeze_invariants),
        (5, "synthetic alignment", synthetic_alignment),
        (6, "tokenizer fixed point", tokenizer_fixed_point),
        (7, "segmenter contract", segmenter_contract),
        (8, "abc closure and conservation", abc_closure),
        (9, "key estimation oracle", key_oracle),
        (
            10,
            "pipeline idempotence and anti-leakage",
            pipeline_idempotence,
        ),
        (11, "lr schedule", lr_boundaries),
    ];
    let mut err = std::io::stderr();
    let _ = writeln!(
        err,
        "criterion 1: INFO published benchmark scores need full-scale data and models; replaced by criteria 2-11"
    );
    let mut failed = Vec::new();
    for (n, name, f) in criteria {
        let (tag, detail) = match f() {
            Ok(d) => ("PASS", d),
            Err(d) => {
                failed.push(n);
                ("FAIL", d)
            }
        };
        let _ = writeln!(err, "criterion {n}: {tag} {name}: {detail}");
    }
    assert!(failed.is_empty(), "failed criteria: {failed:?}");
}

// ---------------------------------------------------------------- criterion 2

const WORDS: [&str; 20] = [
    "the", "a", "piano", "pianos", "play", "plays", "played", "playing", "calm", "calmly", "music",
    "musical", "slow", "fast", "in", "minor", "major", "key", ",", ".",
];

fn random_sentence(rng: &mut ChaCha8Rng, max_len: usize) -> Vec<String> {
    let n = rng.gen_range(0..=max_len);
    (0..n)
        .map(|_| WORDS.choose(rng).expect("words").to_string())
        .collect()
}

fn ngrams(tokens: &[String], n: usize) -> Vec<&[String]> {
    if tokens.len() < n {
        Vec::new()
    } else {
        (0..=tokens.len() - n).map(|i| &tokens[i..i + n]).collect()
    }
}

/// Clipped n-gram matches and hypothesis n-gram total by pairwise counting.
fn oracle_ngram_stats(h: &[String], r: &[String], n: usize) -> (u64, u64) {
    let hg = ngrams(h, n);
    let rg = ngrams(r, n);
    let mut seen: Vec<&[String]> = Vec::new();
    let mut matches = 0u64;
    for g in &hg {
        if seen.contains(g) {
            continue;
        }
        seen.push(g);
        let in_h = hg.iter().filter(|x| *x == g).count() as u64;
        let in_r = rg.iter().filter(|x| *x == g).count() as u64;
        matches += in_h.min(in_r);
    }
    (matches, hg.len() as u64)
}

fn oracle_bleu(pairs: &[(Vec<String>, Vec<String>)]) -> f64 {
    let mut m = [0u64; 4];
    let mut t = [0u64; 4];
    let (mut c, mut r) = (0u64, 0u64);
    for (hyp, reference) in pairs {
        c += hyp.len() as u64;
        r += reference.len() as u64;
        for n in 1..=4 {
            let (mm, tt) = oracle_ngram_stats(hyp, reference, n);
            m[n - 1] += mm;
            t[n - 1] += tt;
        }
    }
    if c == 0 || m[0] == 0 {
        return 0.0;
    }
    let mut log_p = 0.0;
    for n in 0..4 {
        let p = if n > 0 && m[n] == 0 {
            1.0 / (t[n] + 1) as f64
        } else {
            m[n] as f64 / t[n] as f64
        };
        log_p += p.ln() / 4.0;
    }
    let bp = if c < r {
        (1.0 - r as f64 / c as f64).exp()
    } else {
        1.0
    };
    bp * log_p.exp()
}

fn oracle_rouge_l(h: &[String], r: &[String]) -> f64 {
    let mut best = 0usize;
    for mask in 0u32..(1 << h.len()) {
        let sub: Vec<&String> = (0..h.len())
            .filter(|i| mask >> i & 1 == 1)
            .map(|i| &h[i])
            .collect();
        if sub.len() <= best {
            continue;
        }
        let mut it = r.iter();
        if sub.iter().all(|s| it.any(|x| x == *s)) {
            best = sub.len();
        }
    }
    if best == 0 {
        return 0.0;
    }
    let p = best as f64 / h.len() as f64;
    let rc = best as f64 / r.len() as f64;
    2.0 * p * rc / (p + rc)
}

/// Every one-to-one alignment of stem-equal tokens; best is most matches,
/// then fewest chunks.
fn oracle_meteor(h: &[String], r: &[String]) -> f64 {
    let hs: Vec<String> = h.iter().map(|t| porter_stemmer::stem(t)).collect();
    let rs: Vec<String> = r.iter().map(|t| porter_stemmer::stem(t)).collect();
    fn chunks(pairs: &[(usize, usize)]) -> usize {
        let mut c = 0;
        for (k, &(i, j)) in pairs.iter().enumerate() {
            let continues = k > 0 && pairs[k - 1] == (i.wrapping_sub(1), j.wrapping_sub(1));
            if !continues {
                c += 1;
            }
        }
        c
    }
    fn walk(
        i: usize,
        hs: &[String],
        rs: &[String],
        used: &mut Vec<bool>,
        pairs: &mut Vec<(usize, usize)>,
        best: &mut (usize, usize),
    ) {
        if i == hs.len() {
            let cand = (pairs.len(), chunks(pairs));
            if cand.0 > best.0 || (cand.0 == best.0 && cand.1 < best.1) {
                *best = cand;
            }
            return;
        }
        walk(i + 1, hs, rs, used, pairs, best);
        for j in 0..rs.len() {
            if !used[j] && hs[i] == rs[j] {
                used[j] = true;
                pairs.push((i, j));
                walk(i + 1, hs, rs, used, pairs, best);
                pairs.pop();
                used[j] = false;
            }
        }
    }
    let mut best = (0, usize::MAX);
    walk(
        0,
        &hs,
        &rs,
        &mut vec![false; rs.len()],
        &mut Vec::new(),
        &mut best,
    );
    let (m, ch) = best;
    if m == 0 {
        return 0.0;
    }
    let p = m as f64 / h.len() as f64;
    let rc = m as f64 / r.len() as f64;
    let fmean = 10.0 * p * rc / (rc + 9.0 * p);
    fmean * (1.0 - 0.5 * (ch as f64 / m as f64).powi(3))
}

fn oracle_bert(h: &[String], r: &[String], table: &HashMap<String, Vec<f64>>, dim: usize) -> f64 {
    if h.is_empty() || r.is_empty() {
        return 0.0;
    }
    let zero = vec![0.0; dim];
    let emb = |t: &String| table.get(t).unwrap_or(&zero).clone();
    let cos = |a: &[f64], b: &[f64]| {
        let mut dot = 0.0;
        let mut na = 0.0;
        let mut nb = 0.0;
        for k in 0..dim {
            dot += a[k] * b[k];
            na += a[k] * a[k];
            nb += b[k] * b[k];
        }
        if na == 0.0 || nb == 0.0 {
            0.0
        } else {
            dot / (na.sqrt() * nb.sqrt())
        }
    };
    let he: Vec<Vec<f64>> = h.iter().map(emb).collect();
    let re: Vec<Vec<f64>> = r.iter().map(emb).collect();
    let mut p = 0.0;
    for a in &he {
        let mut best = f64::NEG_INFINITY;
        for b in &re {
            best = best.max(cos(a, b));
        }
        p += best;
    }
    p /= he.len() as f64;
    let mut rc = 0.0;
    for b in &re {
        let mut best = f64::NEG_INFINITY;
        for a in &he {
            best = best.max(cos(a, b));
        }
        rc += best;
    }
    rc /= re.len() as f64;
    if p + rc == 0.0 {
        0.0
    } else {
        2.0 * p * rc / (p + rc)
    }
}

fn metric_oracles() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let dim = 5;
    let mut table: HashMap<String, Vec<f64>> = HashMap::new();
    let mut text = String::new();
    for (i, w) in WORDS.iter().enumerate() {
        // one word stays out of the table and one maps to the zero vector
        if i == 7 {
            continue;
        }
        let v: Vec<f64> = if i == 9 {
            vec![0.0; dim]
        } else {
            (0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect()
        };
        text.push_str(w);
        for x in &v {
            text.push_str(&format!(" {x}"));
        }
        text.push('\n');
        table.insert(w.to_string(), v);
    }
    let provider = FileEmbeddings::parse(&text).map_err(|e| e.to_string())?;

    let pairs: Vec<(Vec<String>, Vec<String>)> = (0..300)
        .map(|i| {
            let h = random_sentence(&mut rng, 6);
            // every third pair shares most of its tokens
            let r = if i % 3 == 0 && !h.is_empty() {
                let mut r = h.clone();
                let k = rng.gen_range(0..r.len());
                r[k] = WORDS.choose(&mut rng).expect("words").to_string();
                r.shuffle(&mut rng);
                r.truncate(rng.gen_range(1..=r.len()));
                r
            } else {
                random_sentence(&mut rng, 6)
            };
            (h, r)
        })
        .collect();
    let tok = |w: &[String]| -> TokenizedText { tokenize_text(&w.join(" ")) };

    let mut worst: BTreeMap<&str, f64> = BTreeMap::new();
    let mut note = |name: &'static str, got: f64, want: f64| {
        let e = worst.entry(name).or_insert(0.0);
        *e = e.max((got - want).abs());
    };
    for (h, r) in &pairs {
        let (th, tr) = (tok(h), tok(r));
        if th.tokens() != h.as_slice() || tr.tokens() != r.as_slice() {
            return Err(format!("tokenizer changed {h:?}"));
        }
        let b = bleu(std::slice::from_ref(&th), std::slice::from_ref(&tr), 4)
            .map_err(|e| e.to_string())?;
        note("bleu", b, oracle_bleu(&[(h.clone(), r.clone())]));
        note("meteor", meteor(&th, &tr), oracle_meteor(h, r));
        note("rouge_l", rouge_l(&th, &tr), oracle_rouge_l(h, r));
        let bs = bert_score(&th, &tr, &provider).map_err(|e| e.to_string())?;
        note("bert_score", bs.f1, oracle_bert(h, r, &table, dim));
    }
    let hyps: Vec<TokenizedText> = pairs.iter().map(|(h, _)| tok(h)).collect();
    let refs: Vec<TokenizedText> = pairs.iter().map(|(_, r)| tok(r)).collect();
    let corpus = bleu(&hyps, &refs, 4).map_err(|e| e.to_string())?;
    note("corpus_bleu", corpus, oracle_bleu(&pairs));

    let max_err = worst.values().copied().fold(0.0, f64::max);
    let detail = worst
        .iter()
        .map(|(k, v)| format!("{k} {v:.1e}"))
        .collect::<Vec<_>>()
        .join(", ");
    let ok = max_err <= 1e-9;
    let out = within(
        start.elapsed(),
        10.0,
        format!("{} pairs, max abs err: {detail}", pairs.len()),
    );
    match (ok, out) {
        (true, o) => o,
        (false, Ok(d)) | (false, Err(d)) => Err(d),
    }
}

// ---------------------------------------------------------------- criterion 3

fn examples(
    count: usize,
    quant: &QuantConfig,
    vocab: usize,
    text_len: (usize, usize),
    seed: u64,
) -> Vec<Example> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|i| {
            let spec = TonalSpec {
                key: Key::new(
                    rng.gen_range(0..12),
                    if i % 2 == 0 { Mode::Major } else { Mode::Minor },
                ),
                bpm: rng.gen_range(60.0..180.0),
                timesig: (4, 4),
                bars: 4,
            };
            let clip = tokenize(&tonal_piece(&spec, seed + i as u64), quant).expect("tokenize");
            let prompt: Vec<u32> = (0..text_len.0)
                .map(|_| rng.gen_range(2..vocab as u32))
                .collect();
            let answer: Vec<u32> = (0..text_len.1)
                .map(|_| rng.gen_range(2..vocab as u32))
                .collect();
            Example::new(format!("ex{i}"), clip, &prompt, &answer)
        })
        .collect()
}

fn gradient_check() -> Outcome {
    let start = Instant::now();
    let cfg = AlignConfig::default();
    let dims = format!(
        "M={} T={} layers={} vocab={}",
        cfg.encoder_dim, cfg.lm_dim, cfg.lm_layers, cfg.vocab_size
    );
    let quant = QuantConfig::default();
    let batch = examples(3, &quant, cfg.vocab_size, (2, 3), 3);
    let model = AlignModel::new(cfg, quant).map_err(|e| e.to_string())?;
    let r = grad_check(&model, &batch, GradSlice::Stage2, 1e-4).map_err(|e| e.to_string())?;
    let detail = format!(
        "{dims}, {} parameters, max rel err {:.2e}",
        r.checked, r.max_rel_err
    );
    let ok = r.max_rel_err < 1e-4 && r.frozen_grads_absent;
    let out = within(start.elapsed(), 60.0, detail);
    if ok {
        out
    } else {
        Err(out.unwrap_or_else(|d| d))
    }
}

// ---------------------------------------------------------------- criterion 4

/// Householder-free QR by modified Gram-Schmidt: `b = q · r`, `q` with
/// orthonormal columns.
fn qr(b: &Matrix) -> (Vec<Vec<f64>>, Vec<Vec<f64>>) {
    let (rows, cols) = b.shape();
    let mut q: Vec<Vec<f64>> = (0..cols)
        .map(|c| (0..rows).map(|i| b.get(i, c)).collect())
        .collect();
    let mut r = vec![vec![0.0; cols]; cols];
    for k in 0..cols {
        for j in 0..k {
            let d: f64 = (0..rows).map(|i| q[j][i] * q[k][i]).sum();
            r[j][k] = d;
            let qj = q[j].clone();
            for (x, y) in q[k].iter_mut().zip(&qj) {
                *x -= d * y;
            }
        }
        let norm = q[k].iter().map(|x| x * x).sum::<f64>().sqrt();
        r[k][k] = norm;
        if norm > 0.0 {
            q[k].iter_mut().for_each(|x| *x /= norm);
        }
    }
    (q, r)
}

/// Singular values of a dense matrix (rows of `a`) by one-sided Jacobi,
/// descending.
fn jacobi_singular_values(mut a: Vec<Vec<f64>>) -> Vec<f64> {
    let n = a.len();
    for _ in 0..60 {
        let mut rotated = false;
        for p in 0..n {
            for q in p + 1..n {
                let alpha: f64 = a[p].iter().map(|x| x * x).sum();
                let beta: f64 = a[q].iter().map(|x| x * x).sum();
                let gamma: f64 = a[p].iter().zip(&a[q]).map(|(x, y)| x * y).sum();
                if gamma == 0.0 || gamma.abs() <= 1e-15 * (alpha * beta).sqrt() {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let t = if zeta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                for k in 0..a[p].len() {
                    let (x, y) = (a[p][k], a[q][k]);
                    a[p][k] = c * x - s * y;
                    a[q][k] = s * x + c * y;
                }
            }
        }
        if !rotated {
            break;
        }
    }
    let mut sv: Vec<f64> = a
        .iter()
        .map(|row| row.iter().map(|x| x * x).sum::<f64>().sqrt())
        .collect();
    sv.sort_by(|x, y| y.total_cmp(x));
    sv
}

/// Full spectrum of `scale · B · A`: with `B = QR` the nonzero singular
/// values are those of the `r × d_in` matrix `R · A · scale`, and the other
/// `d_out − r` values are identically zero.
fn lora_spectrum(adapter: &LoraAdapter) -> Vec<f64> {
    let (_, r) = qr(&adapter.b);
    let rank = adapter.rank;
    let d_in = adapter.a.cols();
    let small: Vec<Vec<f64>> = (0..rank)
        .map(|i| {
            (0..d_in)
                .map(|c| {
                    (0..rank)
                        .map(|k| r[i][k] * adapter.a.get(k, c))
                        .sum::<f64>()
                        * adapter.scale()
                })
                .collect()
        })
        .collect();
    let mut sv = jacobi_singular_values(small);
    sv.resize(adapter.b.rows(), 0.0);
    sv
}

fn groups_equal(a: &BTreeMap<String, String>, b: &BTreeMap<String, String>, group: &str) -> bool {
    a.get(group).is_some() && a.get(group) == b.get(group)
}

fn freeze_invariants() -> Outcome {
    let start = Instant::now();
    let cfg = AlignConfig::default();
    let quant = QuantConfig::default();
    let data = examples(8, &quant, cfg.vocab_size, (5, 8), 4);
    let mut model = AlignModel::new(cfg.clone(), quant).map_err(|e| e.to_string())?;
    let mut with_adapters = model.clone();
    with_adapters.ensure_adapters();
    let before = with_adapters.checksums();

    let train = |stage| TrainConfig {
        batch_size: 4,
        total_steps: 100,
        stage,
        ..TrainConfig::default()
    };
    let r1 =
        train_stage1(&data, &mut model, &train(Stage::Alignment)).map_err(|e| e.to_string())?;
    let after1 = model.checksums();
    let r2 = train_stage2(&data, &mut model, &train(Stage::InstructionTuning))
        .map_err(|e| e.to_string())?;
    let after2 = model.checksums();

    let mut problems = Vec::new();
    for (label, sums) in [("stage 1", &after1), ("stage 2", &after2)] {
        for g in ["encoder", "lm"] {
            if !groups_equal(&before, sums, g) {
                problems.push(format!("{g} changed in {label}"));
            }
        }
    }
    if before.get("projection") == after1.get("projection") {
        problems.push("projection unchanged by stage 1".into());
    }
    if after1.get("projection") == after2.get("projection") {
        problems.push("projection unchanged by stage 2".into());
    }
    if before.get("lora") == after2.get("lora") {
        problems.push("adapters unchanged by stage 2".into());
    }

    let mut max_tail = 0.0f64;
    let mut dense_tail = 0.0f64;
    let mut top_err = 0.0f64;
    for a in &model.adapters {
        let sv = lora_spectrum(a);
        max_tail = sv[a.rank..].iter().fold(max_tail, |m, &x| m.max(x));
        let d = a.delta();
        let dense: Vec<Vec<f64>> = (0..d.rows()).map(|i| d.row(i).to_vec()).collect();
        let dsv = jacobi_singular_values(dense);
        dense_tail = dsv[a.rank..]
            .iter()
            .fold(dense_tail, |m, &x| m.max(x / dsv[0]));
        for k in 0..a.rank {
            top_err = top_err.max((sv[k] - dsv[k]).abs() / dsv[0]);
        }
    }
    if model.adapters.is_empty() {
        problems.push("no adapters".into());
    }
    if max_tail != 0.0 {
        problems.push(format!("factored tail {max_tail:e}"));
    }
    if dense_tail > 1e-10 || top_err > 1e-9 {
        problems.push(format!(
            "dense cross-check tail {dense_tail:.1e} top {top_err:.1e}"
        ));
    }
    let detail = format!(
        "{}+{} steps, {} adapters, sv beyond rank 0 (dense tail/sv1 {:.1e}); {:.1} s",
        r1.steps.len(),
        r2.steps.len(),
        model.adapters.len(),
        dense_tail,
        start.elapsed().as_secs_f64()
    );
    if r1.steps.len() != 100 || r2.steps.len() != 100 {
        problems.push("wrong step count".into());
    }
    if problems.is_empty() {
        Ok(detail)
    } else {
        Err(format!("{detail}; {}", problems.join("; ")))
    }
}

// ---------------------------------------------------------------- criterion 5

fn synthetic_alignment() -> Outcome {
    let start = Instant::now();
    let r = run_synthetic_alignment(&SyntheticRunConfig::default()).map_err(|e| e.to_string())?;
    let ratio = r.final_loss / r.initial_loss;
    let ok = ratio < 0.5 && r.rouge_l >= 0.5;
    let out = within(
        start.elapsed(),
        1800.0,
        format!(
            "loss {:.4} -> {:.4} (ratio {ratio:.3}), held-out ROUGE-L {:.3} on {} clips",
            r.initial_loss, r.final_loss, r.rouge_l, r.test_clips
        ),
    );
    if ok {
        out
    } else {
        Err(out.unwrap_or_else(|d| d))
    }
}

// ---------------------------------------------------------------- criterion 6

fn tokenizer_fixed_point() -> Outcome {
    let start = Instant::now();
    let cfg = QuantConfig::default();
    let sizes = cfg.vocab_sizes();
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    // 64 quarters stay below bar 256 even in 1/16 time
    let opts = FuzzOptions {
        max_quarters: 64,
        ..FuzzOptions::default()
    };
    let mut tokens_seen = 0usize;
    for i in 0..1000 {
        let piece = fuzz_piece(&mut rng, &opts);
        let t1 = tokenize(&piece, &cfg).map_err(|e| format!("piece {i}: {e}"))?;
        for t in &t1 {
            if t.fields().iter().zip(sizes).any(|(&f, s)| f >= s) {
                return Err(format!("piece {i}: token {t:?} out of range"));
            }
        }
        let back = detokenize(&t1, &cfg).map_err(|e| format!("piece {i}: {e}"))?;
        let t2 = tokenize(&back, &cfg).map_err(|e| format!("piece {i}: {e}"))?;
        if t1 != t2 {
            return Err(format!("piece {i}: not a fixed point"));
        }
        tokens_seen += t1.len();
    }
    within(
        start.elapsed(),
        30.0,
        format!("1000 pieces, {tokens_seen} tokens"),
    )
}

// ---------------------------------------------------------------- criterion 7

fn segmenter_contract() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let opts = FuzzOptions::default();
    let mut eligible = 0usize;
    let mut clips_total = 0usize;
    for i in 0..1000 {
        let piece = fuzz_piece(&mut rng, &opts);
        let clips = select_clips(&piece, "p", 20.0, 3).map_err(|e| e.to_string())?;
        clips_total += clips.len();
        for w in clips.windows(2) {
            if w[1].start_tick < w[0].end_tick {
                return Err(format!("piece {i}: clips overlap"));
            }
        }
        let tl = &piece.timeline;
        let total = tl.seconds_at(tl.end_tick);
        if clips
            .iter()
            .any(|c| c.end_tick > tl.end_tick || c.start_tick >= c.end_tick)
        {
            return Err(format!("piece {i}: clip outside piece"));
        }
        let bars = tl.bar_grid();
        let longest_bar = bars
            .windows(2)
            .map(|w| tl.seconds_at(w[1]) - tl.seconds_at(w[0]))
            .fold(0.0, f64::max);
        let last_bar_s = bars.last().map_or(0.0, |&b| tl.seconds_at(b));
        // bar grid dense enough for an 18 s lower bound, covering the piece
        if total >= 60.0 && longest_bar <= 2.0 && total - last_bar_s <= 2.0 {
            eligible += 1;
            if clips.len() != 3 {
                return Err(format!(
                    "piece {i}: {total:.1} s gave {} clips",
                    clips.len()
                ));
            }
            for c in &clips {
                let d = c.end_s - c.start_s;
                if !(18.0 - 1e-9..=20.0 + 1e-9).contains(&d) || !c.bar_aligned {
                    return Err(format!("piece {i}: clip of {d:.3} s"));
                }
            }
        }
    }
    if eligible < 100 {
        return Err(format!("only {eligible} long pieces with short bars"));
    }
    within(
        start.elapsed(),
        10.0,
        format!("1000 pieces, {clips_total} clips, {eligible} long pieces with exactly 3 clips of 18-20 s"),
    )
}

// ---------------------------------------------------------------- criterion 8

fn key_signature(name: &str) -> [i32; 7] {
    let (tonic, minor) = match name.strip_suffix('m') {
        Some(t) => (t, true),
        None => (name, false),
    };
    let major = [
        "Cb", "Gb", "Db", "Ab", "Eb", "Bb", "F", "C", "G", "D", "A", "E", "B", "F#", "C#",
    ];
    let minors = [
        "Ab", "Eb", "Bb", "F", "C", "G", "D", "A", "E", "B", "F#", "C#", "G#", "D#", "A#",
    ];
    let list = if minor { minors } else { major };
    let count = list.iter().position(|&t| t == tonic).expect("known key") as i32 - 7;
    // letters C D E F G A B; sharps F C G D A E B, flats the reverse
    let order = [3usize, 0, 4, 1, 5, 2, 6];
    let mut sig = [0; 7];
    for &l in order.iter().take(count.max(0) as usize) {
        sig[l] = 1;
    }
    for &l in order.iter().rev().take((-count).max(0) as usize) {
        sig[l] = -1;
    }
    sig
}

/// Notes `(pitch, onset, end)` on the 1/32 grid per voice, read back from
/// ABC text in the subset the writer emits.
fn read_abc(text: &str) -> Result<VoiceNotes, String> {
    let mut lines = text.lines();
    let mut sig = [0; 7];
    let mut unit = (1u64, 8u64);
    for line in lines.by_ref() {
        if let Some(k) = line.strip_prefix("K:") {
            sig = key_signature(k.trim());
            break;
        }
        if let Some(l) = line.strip_prefix("L:") {
            let (n, d) = l.split_once('/').ok_or("bad L:")?;
            unit = (
                n.parse().map_err(|_| "bad L:")?,
                d.parse().map_err(|_| "bad L:")?,
            );
        }
    }
    // grid steps per unit note
    let unit_steps = 32 * unit.0 / unit.1;
    let mut voices = Vec::new();
    for line in lines {
        if line.starts_with("V:") {
            continue;
        }
        let mut notes = Vec::new();
        let mut open: HashMap<u8, u64> = HashMap::new();
        let mut bar_state: HashMap<(usize, i32), i32> = HashMap::new();
        let mut now = 0u64;
        for item in line.split(' ').filter(|s| !s.is_empty()) {
            if item == "|" {
                bar_state.clear();
                continue;
            }
            if let Some(rest) = item.strip_prefix('z') {
                now += length(rest, unit_steps)?;
                continue;
            }
            let inner = item
                .strip_prefix('[')
                .and_then(|s| s.strip_suffix(']'))
                .unwrap_or(item);
            let mut chars = inner.chars().peekable();
            let mut step = None;
            while chars.peek().is_some() {
                let mut explicit = None;
                match chars.peek() {
                    Some('^') => explicit = Some(1),
                    Some('_') => explicit = Some(-1),
                    Some('=') => explicit = Some(0),
                    _ => {}
                }
                if explicit.is_some() {
                    chars.next();
                }
                let letter = chars.next().ok_or("missing letter")?;
                let idx = "CDEFGAB"
                    .find(letter.to_ascii_uppercase())
                    .ok_or(format!("bad letter {letter}"))?;
                let mut octave = if letter.is_ascii_lowercase() { 5 } else { 4 };
                while let Some(&c) = chars.peek() {
                    match c {
                        '\'' => octave += 1,
                        ',' => octave -= 1,
                        _ => break,
                    }
                    chars.next();
                }
                let mut len = String::new();
                while let Some(&c) = chars.peek() {
                    if c.is_ascii_digit() || c == '/' {
                        len.push(c);
                        chars.next();
                    } else {
                        break;
                    }
                }
                let tied = chars.peek() == Some(&'-');
                if tied {
                    chars.next();
                }
                if let Some(a) = explicit {
                    bar_state.insert((idx, octave), a);
                }
                let alter = *bar_state.get(&(idx, octave)).unwrap_or(&sig[idx]);
                let pc = [0, 2, 4, 5, 7, 9, 11][idx];
                let pitch = (12 * (octave + 1) + pc + alter) as u8;
                let d = length(&len, unit_steps)?;
                if step.is_some_and(|s| s != d) {
                    return Err("chord notes of unequal length".into());
                }
                step = Some(d);
                let onset = open.remove(&pitch).unwrap_or(now);
                if tied {
                    open.insert(pitch, onset);
                } else {
                    notes.push((pitch, onset, now + d));
                }
            }
            now += step.ok_or("empty element")?;
        }
        if !open.is_empty() {
            return Err("dangling tie".into());
        }
        notes.sort_unstable();
        voices.push(notes);
    }
    Ok(voices)
}

fn length(spec: &str, unit_steps: u64) -> Result<u64, String> {
    let bad = || format!("bad length {spec:?}");
    let (num, den) = match spec.split_once('/') {
        None if spec.is_empty() => (1, 1),
        None => (spec.parse().map_err(|_| bad())?, 1),
        Some((n, d)) => (
            if n.is_empty() {
                1
            } else {
                n.parse().map_err(|_| bad())?
            },
            if d.is_empty() {
                2
            } else {
                d.parse().map_err(|_| bad())?
            },
        ),
    };
    let steps = unit_steps * num;
    if !steps.is_multiple_of(den) {
        return Err(bad());
    }
    Ok(steps / den)
}

fn expect_lossless(piece: &MidiPiece) -> bool {
    let tl = &piece.timeline;
    let tpq = tl.ticks_per_quarter as u64;
    let on_grid = piece
        .notes
        .iter()
        .all(|n| (n.onset_tick * 8) % tpq == 0 && (n.duration_tick * 8) % tpq == 0);
    let overlap = |a: &NoteEvent, b: &NoteEvent| {
        a.track == b.track
            && a.pitch == b.pitch
            && a.onset_tick < b.end_tick()
            && b.onset_tick < a.end_tick()
    };
    let clash = piece
        .notes
        .iter()
        .enumerate()
        .any(|(i, a)| piece.notes[i + 1..].iter().any(|b| overlap(a, b)));
    tl.tempo_map.len() == 1 && tl.timesig_map.len() == 1 && on_grid && !clash
}

fn abc_closure() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut notes_checked = 0usize;
    for i in 0..500 {
        let piece = on_grid_piece(&mut rng, 60);
        let doc = to_abc(&piece, None).map_err(|e| e.to_string())?;
        let v = validate_abc(&doc);
        if !v.is_empty() {
            return Err(format!("on-grid piece {i}: {v:?}"));
        }
        if !doc.loss_report.is_lossless() {
            return Err(format!("on-grid piece {i}: {:?}", doc.loss_report));
        }
        let voices = read_abc(&doc.to_string()).map_err(|e| format!("on-grid piece {i}: {e}"))?;
        let tpq = piece.timeline.ticks_per_quarter as u64;
        let mut by_track: BTreeMap<u16, Vec<(u8, u64, u64)>> = BTreeMap::new();
        for n in &piece.notes {
            by_track.entry(n.track).or_default().push((
                n.pitch,
                n.onset_tick * 8 / tpq,
                n.end_tick() * 8 / tpq,
            ));
        }
        let want: Vec<Vec<(u8, u64, u64)>> = by_track
            .into_values()
            .map(|mut v| {
                v.sort_unstable();
                v
            })
            .collect();
        if voices != want {
            return Err(format!("on-grid piece {i}: notes not conserved"));
        }
        let pitches = |v: &[Vec<(u8, u64, u64)>]| {
            let mut p: Vec<u8> = v.iter().flatten().map(|n| n.0).collect();
            p.sort_unstable();
            p
        };
        let total = |v: &[Vec<(u8, u64, u64)>]| v.iter().flatten().map(|n| n.2 - n.1).sum::<u64>();
        if pitches(&voices) != pitches(&want) || total(&voices) != total(&want) {
            return Err(format!("on-grid piece {i}: multiset or duration differs"));
        }
        notes_checked += piece.notes.len();
    }

    let mut lossy = 0usize;
    let opts = FuzzOptions {
        max_notes: 40,
        max_quarters: 32,
        ..FuzzOptions::default()
    };
    for i in 0..500 {
        let mut piece = if i % 2 == 0 {
            fuzz_piece(&mut rng, &opts)
        } else {
            on_grid_piece(&mut rng, 40)
        };
        if i % 4 == 1 {
            let tpq = piece.timeline.ticks_per_quarter as u64;
            piece.timeline =
                midilm_core::Timeline::new(
                    piece.timeline.ticks_per_quarter,
                    piece.timeline.tempo_map.iter().copied().chain([
                        midilm_core::midi::TempoChange {
                            tick: 4 * tpq,
                            us_per_quarter: 400_000,
                        },
                    ]),
                    piece.timeline.timesig_map.clone(),
                    piece.timeline.end_tick,
                );
        }
        let doc = to_abc(&piece, None).map_err(|e| e.to_string())?;
        if !validate_abc(&doc).is_empty() {
            return Err(format!("mixed piece {i}: invalid document"));
        }
        let expected = expect_lossless(&piece);
        if doc.loss_report.is_lossless() != expected {
            return Err(format!(
                "mixed piece {i}: lossless {} but expected {expected}",
                doc.loss_report.is_lossless()
            ));
        }
        lossy += usize::from(!expected);
    }
    Ok(format!(
        "500 on-grid pieces ({notes_checked} notes) valid and conserved; loss report zero exactly when expected on 500 mixed pieces ({lossy} lossy); {:.1} s",
        start.elapsed().as_secs_f64()
    ))
}

// ---------------------------------------------------------------- criterion 9

const PROFILE_MAJOR: [f64; 12] = [
    6.35, 2.23, 3.48, 2.33, 4.38, 4.09, 2.52, 5.19, 2.39, 3.66, 2.29, 2.88,
];
const PROFILE_MINOR: [f64; 12] = [
    6.33, 2.68, 3.52, 5.38, 2.60, 3.53, 2.54, 4.75, 3.98, 2.69, 3.34, 3.17,
];

fn pearson(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let cov: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let vx: f64 = x.iter().map(|a| (a - mx).powi(2)).sum();
    let vy: f64 = y.iter().map(|b| (b - my).powi(2)).sum();
    cov / (vx * vy).sqrt()
}

/// Best (tonic, mode, r) by correlating the duration histogram with every
/// rotation of both profiles.
fn oracle_key(piece: &MidiPiece) -> (u8, Mode, f64) {
    let mut hist = [0.0; 12];
    for n in &piece.notes {
        hist[n.pitch as usize % 12] += n.duration_tick as f64;
    }
    let mut best = (0, Mode::Major, f64::NEG_INFINITY);
    for (mode, profile) in [(Mode::Major, PROFILE_MAJOR), (Mode::Minor, PROFILE_MINOR)] {
        for tonic in 0..12u8 {
            let rotated: Vec<f64> = (0..12)
                .map(|pc| profile[(pc + 12 - tonic as usize) % 12])
                .collect();
            let r = pearson(&hist, &rotated);
            if r > best.2 {
                best = (tonic, mode, r);
            }
        }
    }
    best
}

fn key_oracle() -> Outcome {
    let mut conf_err = 0.0f64;
    for mode in [Mode::Major, Mode::Minor] {
        for tonic in 0..12u8 {
            let piece = scale_piece(Key::new(tonic, mode));
            let got = estimate_key(&piece).map_err(|e| e.to_string())?;
            let (ot, om, or) = oracle_key(&piece);
            if (got.tonic, got.mode) != (tonic, mode) || (ot, om) != (tonic, mode) {
                return Err(format!(
                    "{tonic} {mode:?}: estimator {} {:?}, oracle {ot} {om:?}",
                    got.tonic, got.mode
                ));
            }
            conf_err = conf_err.max((got.confidence - or).abs());
        }
    }
    if conf_err > 1e-9 {
        return Err(format!("confidence differs from oracle by {conf_err:e}"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let opts = FuzzOptions::default();
    for i in 0..100 {
        let piece = fuzz_piece(&mut rng, &opts);
        let shift = rng.gen_range(1..12u8);
        let mut moved = piece.clone();
        for n in &mut moved.notes {
            n.pitch += shift;
        }
        let a = estimate_key(&piece).map_err(|e| e.to_string())?;
        let b = estimate_key(&moved).map_err(|e| e.to_string())?;
        if b.tonic != (a.tonic + shift) % 12 || a.mode != b.mode || a.confidence != b.confidence {
            return Err(format!("piece {i}: {a} moved by {shift} became {b}"));
        }
    }
    Ok(format!(
        "24/24 scales agree with the oracle (confidence err {conf_err:.1e}); 100 transpositions equivariant"
    ))
}

// --------------------------------------------------------------- criterion 10

struct ScriptedLlm;

impl LlmClient for ScriptedLlm {
    fn complete(&self, request: &LlmRequest) -> Result<String, LlmError> {
        let title = request
            .prompt
            .lines()
            .find_map(|l| l.strip_prefix("Piece title: "))
            .unwrap_or("unknown");
        let n: usize = title.bytes().map(usize::from).sum();
        let genres = ["nocturne", "sonata", "etude", "waltz"];
        let moods = ["calm", "tense", "joyful"];
        Ok(format!(
            "Here is the annotation: {{\"genre\": \"{}\", \"style\": \"romantic\", \"background\": \"Written for {title}.\", \"expressive_intent\": \"Not Enough Information\", \"perceived_emotion\": \"{}\"}}",
            genres[n % genres.len()],
            moods[n % moods.len()]
        ))
    }
}

fn run_pipeline(dir: &Path) -> Result<(), String> {
    let quant_keys = [0u8, 2, 4, 5, 7, 9];
    let mut sources = Vec::new();
    let mut pieces = BTreeMap::new();
    for i in 0..20u8 {
        let id = format!("piece{i:02}");
        let spec = TonalSpec {
            key: Key::new(quant_keys[i as usize % quant_keys.len()], Mode::Major),
            bpm: 120.0,
            timesig: (4, 4),
            bars: 40,
        };
        let piece = tonal_piece(&spec, i as u64);
        let features = summarize(&piece).map_err(|e| e.to_string())?;
        sources.push(PieceSource {
            piece_id: id.clone(),
            title: format!("Piece {i}"),
            composer: "Anon".into(),
            source_text: if i % 7 == 3 {
                String::new()
            } else {
                format!("Notes on piece {i}.")
            },
            features: Some(features),
        });
        pieces.insert(id, piece);
    }
    let records: Vec<AnnotationRecord> =
        annotate_sources(&sources, &ScriptedLlm, &RetryPolicy::default(), 4)
            .into_iter()
            .map(|(id, r)| r.map_err(|e| format!("{id}: {e}")))
            .collect::<Result<_, _>>()?;
    let mut clips = Vec::new();
    let mut qa: Vec<QaPair> = Vec::new();
    for rec in &records {
        let piece = &pieces[&rec.piece_id];
        let ids: Vec<ClipFeatures> = select_clips(piece, &rec.piece_id, 20.0, 3)
            .map_err(|e| e.to_string())?
            .iter()
            .map(|c| ClipFeatures {
                clip_id: c.clip_id(),
                features: None,
            })
            .collect();
        clips.extend(ids.iter().map(|c| ClipRef {
            clip_id: c.clip_id.clone(),
            piece_id: rec.piece_id.clone(),
            features: None,
        }));
        qa.extend(gen_qa_for_clips(rec, &ids, 11).map_err(|e| e.to_string())?);
    }
    std::fs::create_dir_all(dir).map_err(|e| e.to_string())?;
    write_jsonl(&dir.join("annotations.jsonl"), &records).map_err(|e| e.to_string())?;
    write_jsonl(&dir.join("qa.jsonl"), &qa).map_err(|e| e.to_string())?;
    let ds = assemble_dataset(&records, &clips, &qa, 5).map_err(|e| e.to_string())?;
    ds.write(&dir.join("dataset")).map_err(|e| e.to_string())
}

fn files_under(dir: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in std::fs::read_dir(&d).into_iter().flatten().flatten() {
            let p = entry.path();
            if p.is_dir() {
                stack.push(p);
            } else if let Ok(bytes) = std::fs::read(&p) {
                out.insert(p.strip_prefix(dir).expect("prefix").to_path_buf(), bytes);
            }
        }
    }
    out
}

fn pipeline_idempotence() -> Outcome {
    let root = std::env::temp_dir().join(format!("midilm-acceptance-{}", std::process::id()));
    let _ = std::fs::remove_dir_all(&root);
    let result = (|| {
        run_pipeline(&root.join("a"))?;
        run_pipeline(&root.join("b"))?;
        let a = files_under(&root.join("a"));
        let b = files_under(&root.join("b"));
        if a.is_empty() || a != b {
            return Err("outputs differ between runs".to_string());
        }
        let rows = |name: &str| -> Result<Vec<DatasetRow>, String> {
            midilm_core::annotate::read_jsonl(&root.join("a/dataset").join(name))
                .map_err(|e| e.to_string())
        };
        let (train, test) = (rows("train.jsonl")?, rows("test.jsonl")?);
        let pieces = |rs: &[DatasetRow]| {
            rs.iter()
                .map(|r| r.piece_id.clone())
                .collect::<BTreeSet<_>>()
        };
        let (tp, sp) = (pieces(&train), pieces(&test));
        let shared: Vec<_> = tp.intersection(&sp).collect();
        if !shared.is_empty() || sp.is_empty() || tp.is_empty() {
            return Err(format!("split leaks or is empty: shared {shared:?}"));
        }
        if train
            .iter()
            .chain(&test)
            .any(|r| !r.clip_id.starts_with(&format!("{}@", r.piece_id)))
        {
            return Err("clip assigned to the wrong piece".into());
        }
        Ok(format!(
            "{} files byte-identical over two runs; {} train / {} test pieces, disjoint",
            a.len(),
            tp.len(),
            sp.len()
        ))
    })();
    let _ = std::fs::remove_dir_all(&root);
    result
}

// --------------------------------------------------------------- criterion 11

fn lr_boundaries() -> Outcome {
    let mut worst_gap = 0.0f64;
    let mut checked = 0;
    for total in (2..=400).chain([1000, 5000, 12345]) {
        let cfg = TrainConfig {
            total_steps: total,
            ..TrainConfig::default()
        };
        let w = (0.03 * total as f64).ceil() as usize;
        let at = lr_schedule(w, &cfg).map_err(|e| e.to_string())?;
        if at != 5e-4 {
            return Err(format!("total {total}: lr({w}) = {at:e}"));
        }
        if w < total {
            // cosine branch evaluated at the boundary
            let cosine = |s: usize| {
                let progress = (s as f64 - w as f64) / (total - w) as f64;
                5e-4 * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
            };
            worst_gap = worst_gap.max((cosine(w) - at).abs());
            let next = lr_schedule(w + 1, &cfg).map_err(|e| e.to_string())?;
            if (next - cosine(w + 1)).abs() > 1e-15 {
                return Err(format!("total {total}: lr({}) off the cosine", w + 1));
            }
        }
        let end = lr_schedule(total, &cfg).map_err(|e| e.to_string())?;
        if end != 0.0 {
            return Err(format!("total {total}: terminal lr {end:e}"));
        }
        checked += 1;
    }
    check(
        worst_gap <= 1e-12,
        format!("{checked} schedules; lr at warmup end exactly 5e-4, boundary gap {worst_gap:.1e}, terminal 0"),
    )
}

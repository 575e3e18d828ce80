//! Quick oracle checks over the core library, for a clean checkout.

use midilm_core::abc::{to_abc, validate_abc};
use midilm_core::align::{
    grad_check, lr_schedule, AlignConfig, AlignModel, Example, GradSlice, TrainConfig,
};
use midilm_core::features::{estimate_key, Key, Mode};
use midilm_core::metrics::{bleu, lcs_len, tokenize_text};
use midilm_core::octuple::{detokenize, tokenize};
use midilm_core::segment::select_clips;
use midilm_core::synth::{fuzz_piece, on_grid_piece, scale_piece, FuzzOptions};
use midilm_core::QuantConfig;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::{CmdResult, Ctx, Failure};

type Check = fn(u64) -> Result<String, String>;

fn opts() -> FuzzOptions {
    FuzzOptions {
        max_quarters: 96,
        ..FuzzOptions::default()
    }
}

fn tokenizer_fixed_point(seed: u64) -> Result<String, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let q = QuantConfig::default();
    for i in 0..100 {
        let p = fuzz_piece(&mut rng, &opts());
        let t = tokenize(&p, &q).map_err(|e| format!("piece {i}: {e}"))?;
        let back = detokenize(&t, &q).map_err(|e| format!("piece {i}: {e}"))?;
        if tokenize(&back, &q).map_err(|e| e.to_string())? != t {
            return Err(format!("piece {i}: tokens changed after a round trip"));
        }
    }
    Ok("100 pieces".into())
}

fn clips_disjoint(seed: u64) -> Result<String, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for i in 0..100 {
        let p = fuzz_piece(&mut rng, &opts());
        let Ok(clips) = select_clips(&p, "p", 20.0, 3) else {
            continue;
        };
        if clips.windows(2).any(|w| w[0].end_tick > w[1].start_tick) {
            return Err(format!("piece {i}: overlapping clips"));
        }
    }
    Ok("100 pieces".into())
}

fn abc_closure(seed: u64) -> Result<String, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for i in 0..50 {
        let p = on_grid_piece(&mut rng, 60);
        let doc = to_abc(&p, None).map_err(|e| format!("piece {i}: {e}"))?;
        if let Some(v) = validate_abc(&doc).first() {
            return Err(format!("piece {i}: {v:?}"));
        }
        if !doc.loss_report.is_lossless() {
            return Err(format!("piece {i}: lossy conversion {:?}", doc.loss_report));
        }
    }
    Ok("50 on-grid pieces".into())
}

fn key_scales(_: u64) -> Result<String, String> {
    for tonic in 0..12 {
        for mode in [Mode::Major, Mode::Minor] {
            let key = Key::new(tonic, mode);
            let got = estimate_key(&scale_piece(key)).map_err(|e| e.to_string())?;
            if (got.tonic, got.mode) != (tonic, mode) {
                return Err(format!("{key} estimated as {got}"));
            }
        }
    }
    Ok("24 scales".into())
}

fn lcs_brute(a: &[String], b: &[String]) -> usize {
    (0u32..1 << a.len())
        .filter_map(|mask| {
            let sub: Vec<&String> = (0..a.len())
                .filter(|i| mask >> i & 1 == 1)
                .map(|i| &a[i])
                .collect();
            let mut it = b.iter();
            sub.iter().all(|w| it.any(|x| x == *w)).then_some(sub.len())
        })
        .max()
        .unwrap_or(0)
}

fn metric_oracles(seed: u64) -> Result<String, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let words = ["a", "b", "c", "d"];
    for i in 0..100 {
        let mut sent = |n: usize| -> Vec<String> {
            (0..n)
                .map(|_| words[rng.gen_range(0..4)].to_string())
                .collect()
        };
        let (x, y) = (sent(1 + i % 8), sent(1 + i % 7));
        if lcs_len(&x, &y) != lcs_brute(&x, &y) {
            return Err(format!("LCS mismatch on {x:?} / {y:?}"));
        }
    }
    let t = tokenize_text("the quick brown fox jumps over the lazy dog");
    let b =
        bleu(std::slice::from_ref(&t), std::slice::from_ref(&t), 4).map_err(|e| e.to_string())?;
    if b != 1.0 {
        return Err(format!("BLEU of identical text is {b}"));
    }
    Ok("100 LCS pairs, BLEU identity".into())
}

fn schedule(_: u64) -> Result<String, String> {
    let cfg = TrainConfig {
        total_steps: 1000,
        ..TrainConfig::default()
    };
    let w = cfg.warmup_steps();
    let at = lr_schedule(w, &cfg).map_err(|e| e.to_string())?;
    let end = lr_schedule(1000, &cfg).map_err(|e| e.to_string())?;
    if at != cfg.max_lr || end != 0.0 {
        return Err(format!("lr({w}) = {at}, lr(1000) = {end}"));
    }
    Ok(format!("peak at step {w}"))
}

fn gradients(seed: u64) -> Result<String, String> {
    let cfg = AlignConfig {
        encoder_dim: 8,
        lm_dim: 16,
        lm_layers: 1,
        lm_heads: 2,
        vocab_size: 300,
        max_seq: 16,
        lora_rank: 2,
        seed,
        ..AlignConfig::default()
    };
    let q = QuantConfig::default();
    let model = AlignModel::new(cfg, q.clone()).map_err(|e| e.to_string())?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let batch: Vec<Example> = (0..2)
        .map(|i| {
            let clip =
                tokenize(&on_grid_piece(&mut rng, 12), &q).expect("synthetic piece tokenizes");
            let prompt: Vec<u32> = (0..3).map(|_| rng.gen_range(3..300)).collect();
            let answer: Vec<u32> = (0..3).map(|_| rng.gen_range(3..300)).collect();
            Example::new(format!("g{i}"), clip, &prompt, &answer)
        })
        .collect();
    let r = grad_check(&model, &batch, GradSlice::Stage2, 1e-4).map_err(|e| e.to_string())?;
    if r.max_rel_err < 1e-4 && r.frozen_grads_absent {
        Ok(format!(
            "{} parameters, max rel err {:.2e}",
            r.checked, r.max_rel_err
        ))
    } else {
        Err(format!("max rel err {:.2e}", r.max_rel_err))
    }
}

pub fn run(ctx: &Ctx) -> CmdResult {
    let seed = ctx.global.seed.unwrap_or(0);
    let checks: [(&str, Check); 7] = [
        ("tokenizer fixed point", tokenizer_fixed_point),
        ("clips non-overlapping", clips_disjoint),
        ("abc closure", abc_closure),
        ("key estimation", key_scales),
        ("metric oracles", metric_oracles),
        ("lr schedule", schedule),
        ("stage-2 gradients", gradients),
    ];
    let mut failed = 0;
    for (name, check) in checks {
        match check(seed) {
            Ok(detail) => println!("ok   {name}: {detail}"),
            Err(detail) => {
                failed += 1;
                println!("FAIL {name}: {detail}");
            }
        }
    }
    if failed > 0 {
        return Err(Failure::Internal(anyhow::anyhow!(
            "{failed} selftest checks failed"
        )));
    }
    Ok(())
}

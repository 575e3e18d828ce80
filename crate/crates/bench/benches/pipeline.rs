use criterion::{black_box, criterion_group, criterion_main, Criterion};
use midilm_core::align::{batch_loss, AlignConfig, AlignModel, Example, Matrix};
use midilm_core::features::{Key, Mode};
use midilm_core::metrics::evaluate;
use midilm_core::midi::write_smf;
use midilm_core::octuple::tokenize;
use midilm_core::synth::{caption_text, tonal_piece, TonalSpec};
use midilm_core::{parse_smf, QuantConfig};

fn piece() -> midilm_core::MidiPiece {
    let spec = TonalSpec {
        key: Key::new(2, Mode::Minor),
        bpm: 120.0,
        timesig: (3, 4),
        bars: 120,
    };
    tonal_piece(&spec, 1)
}

fn parse(c: &mut Criterion) {
    let bytes = write_smf(&piece());
    c.bench_function("parse_smf 120 bars", |b| {
        b.iter(|| parse_smf(black_box(&bytes)).unwrap())
    });
}

fn octuple(c: &mut Criterion) {
    let p = piece();
    let q = QuantConfig::default();
    c.bench_function("tokenize 120 bars", |b| {
        b.iter(|| tokenize(black_box(&p), &q).unwrap())
    });
}

fn metrics(c: &mut Criterion) {
    let samples: Vec<(String, String, String)> = (0..100u8)
        .map(|i| {
            let key = Key::new(i % 12, if i % 2 == 0 { Mode::Major } else { Mode::Minor });
            let hyp = caption_text(key, 60.0 + i as f64, (3, 4));
            let gold = caption_text(Key::new((i + 1) % 12, key.mode), 120.0, (4, 4));
            (i.to_string(), hyp, gold)
        })
        .collect();
    c.bench_function("evaluate 100 captions", |b| {
        b.iter(|| evaluate(black_box(&samples), None).unwrap())
    });
}

fn lm_forward(c: &mut Criterion) {
    let model = AlignModel::new(AlignConfig::default(), QuantConfig::default()).unwrap();
    let prefix = Matrix::zeros(1, model.config.lm_dim);
    let ids: Vec<u32> = (0..63).map(|i| 3 + i * 7 % 500).collect();
    c.bench_function("lm forward 64 positions", |b| {
        b.iter(|| model.lm.forward(black_box(&prefix), &ids, &[]).unwrap())
    });
    let clip = tokenize(&piece(), &QuantConfig::default()).unwrap();
    let batch: Vec<Example> = (0..16)
        .map(|i| Example::new(format!("e{i}"), clip.clone(), &ids[..20], &ids[20..40]))
        .collect();
    c.bench_function("batch loss 16 examples", |b| {
        b.iter(|| batch_loss(&model, black_box(&batch)).unwrap())
    });
}

criterion_group!(benches, parse, octuple, metrics, lm_forward);
criterion_main!(benches);

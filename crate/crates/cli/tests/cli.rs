use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use midilm_core::annotate::{build_annotation_prompt, CachedClient, PieceSource};
use midilm_core::features::{Key, Mode};
use midilm_core::midi::write_smf;
use midilm_core::synth::{tonal_piece, TonalSpec};

const SUBCOMMANDS: [&str; 13] = [
    "parse", "tokenize", "segment", "abc", "features", "annotate", "gen-qa", "assemble",
    "pretrain", "train", "decode", "eval", "selftest",
];

fn midilm(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_midilm"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

#[test]
fn help_matches_snapshots() {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/snapshots");
    let update = std::env::var_os("UPDATE_SNAPSHOTS").is_some();
    let mut names = vec![None];
    names.extend(SUBCOMMANDS.map(Some));
    for name in names {
        let mut args: Vec<&str> = name.into_iter().collect();
        args.push("--help");
        let out = midilm(&args);
        assert!(out.status.success());
        let text = String::from_utf8(out.stdout).unwrap();
        let file = dir.join(format!("help_{}.txt", name.unwrap_or("midilm")));
        if update {
            std::fs::write(&file, &text).unwrap();
        }
        let want = std::fs::read_to_string(&file)
            .unwrap_or_else(|_| panic!("missing snapshot {}", file.display()));
        assert_eq!(text, want, "help for {name:?} changed");
        for flag in ["--config", "--seed", "--jobs"] {
            assert!(text.contains(flag), "{flag} missing from {name:?} help");
        }
    }
}

#[test]
fn selftest_passes() {
    let out = midilm(&["selftest"]);
    assert_eq!(
        out.status.code(),
        Some(0),
        "{}",
        String::from_utf8_lossy(&out.stdout)
    );
    assert!(!String::from_utf8_lossy(&out.stdout).contains("FAIL"));
}

#[test]
fn missing_input_is_input_error() {
    let out = midilm(&["tokenize", "missing.mid"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("missing.mid"));
}

#[test]
fn unknown_subcommand_and_bad_config() {
    assert_eq!(midilm(&["transmogrify"]).status.code(), Some(1));
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.toml");
    std::fs::write(&cfg, "split_seed = \"x\"").unwrap();
    let out = midilm(&["--config", p(&cfg), "selftest"]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn eval_identical_files_scores_one() {
    let dir = tempfile::tempdir().unwrap();
    let gold = dir.path().join("g.jsonl");
    std::fs::write(
        &gold,
        "{\"id\":\"a\",\"text\":\"a slow piece in d minor with a 3/4 time signature\"}\n{\"id\":\"b\",\"text\":\"the tempo is fast and lively today\"}\n",
    )
    .unwrap();
    let out = midilm(&["eval", "--pred", p(&gold), "--gold", p(&gold)]);
    assert_eq!(out.status.code(), Some(0));
    let report: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(report["bleu"], 1.0);
    assert_eq!(report["rouge_l"], 1.0);
}

struct Fixture {
    _tmp: tempfile::TempDir,
    root: PathBuf,
    midi: PathBuf,
    sources: PathBuf,
    config: PathBuf,
}

/// Five 80-second pieces, their sources, a replay cache answering every
/// annotation prompt, and a small-model configuration.
fn fixture() -> Fixture {
    let tmp = tempfile::tempdir().unwrap();
    let root = tmp.path().to_path_buf();
    let midi = root.join("midi");
    let cache = root.join("cache");
    std::fs::create_dir_all(&midi).unwrap();
    let client = CachedClient::replay(&cache);
    let mut lines = String::new();
    let emotions = ["joyful", "melancholic", "calm", "tense", "playful"];
    for i in 0..5u8 {
        let spec = TonalSpec {
            key: Key::new(i * 2, if i % 2 == 0 { Mode::Major } else { Mode::Minor }),
            bpm: 120.0,
            timesig: (4, 4),
            bars: 40,
        };
        let id = format!("piece{i}");
        std::fs::write(
            midi.join(format!("{id}.mid")),
            write_smf(&tonal_piece(&spec, i as u64)),
        )
        .unwrap();
        let src = PieceSource {
            piece_id: id.clone(),
            title: format!("Study No. {i}"),
            composer: "Anon".into(),
            source_text: if i == 4 {
                String::new()
            } else {
                format!("A {} study.", emotions[i as usize])
            },
            features: None,
        };
        let req = build_annotation_prompt(&src.title, &src.composer, &src.source_text);
        let reply = format!(
            "{{\"genre\":\"Etude\",\"style\":\"Not Enough Information\",\"background\":\"Written as study {i}.\",\"expressive_intent\":\"Not Enough Information\",\"perceived_emotion\":\"{}\"}}",
            emotions[i as usize]
        );
        client.insert(&req, &reply).unwrap();
        lines.push_str(&serde_json::to_string(&src).unwrap());
        lines.push('\n');
    }
    let sources = root.join("sources.jsonl");
    std::fs::write(&sources, lines).unwrap();
    let config = root.join("pipeline.toml");
    std::fs::write(
        &config,
        format!(
            "split_seed = 3\n[paths]\ninput_dir = \"{}\"\noutput_dir = \"{}\"\ncache_dir = \"{}\"\n\
             [align]\nencoder_dim = 16\nlm_dim = 32\nlm_layers = 1\nlm_heads = 2\nvocab_size = 400\nmax_seq = 48\nlora_rank = 4\n\
             [train]\nbatch_size = 8\n[pretrain]\nbatch_size = 8\nepochs = 1\nmax_lr = 0.002\n",
            midi.display(),
            root.join("out").display(),
            cache.display()
        ),
    )
    .unwrap();
    Fixture {
        _tmp: tmp,
        root,
        midi,
        sources,
        config,
    }
}

fn run_data_stages(f: &Fixture, out: &Path) {
    let cfg = p(&f.config);
    let ann = out.join("annotations.jsonl");
    let qa = out.join("qa.jsonl");
    let clips = out.join("clips.jsonl");
    let dataset = out.join("dataset");
    std::fs::create_dir_all(out).unwrap();
    let steps: [Vec<&str>; 3] = [
        vec![
            "annotate",
            "--config",
            cfg,
            "--jobs",
            "2",
            "--sources",
            p(&f.sources),
            "--midi-dir",
            p(&f.midi),
            "--out",
            p(&ann),
        ],
        vec![
            "gen-qa",
            "--config",
            cfg,
            "--annotations",
            p(&ann),
            "--midi-dir",
            p(&f.midi),
            "--out",
            p(&qa),
            "--clips-out",
            p(&clips),
        ],
        vec![
            "assemble",
            "--config",
            cfg,
            "--annotations",
            p(&ann),
            "--clips",
            p(&clips),
            "--qa",
            p(&qa),
            "--out-dir",
            p(&dataset),
        ],
    ];
    for args in steps {
        let o = midilm(&args);
        assert_eq!(
            o.status.code(),
            Some(0),
            "{args:?}: {}",
            String::from_utf8_lossy(&o.stderr)
        );
    }
}

fn files(dir: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut out = Vec::new();
    for e in std::fs::read_dir(dir).unwrap() {
        let path = e.unwrap().path();
        if path.is_dir() {
            out.extend(files(&path));
        } else {
            out.push((
                path.strip_prefix(dir).unwrap().to_path_buf(),
                std::fs::read(&path).unwrap(),
            ));
        }
    }
    out.sort();
    out
}

#[test]
fn data_pipeline_is_idempotent_and_split_by_piece() {
    let f = fixture();
    let a = f.root.join("run_a");
    let b = f.root.join("run_b");
    run_data_stages(&f, &a);
    run_data_stages(&f, &b);
    let first = files(&a);
    assert_eq!(first, files(&b));
    run_data_stages(&f, &a);
    assert_eq!(first, files(&a));

    let read = |name: &str| -> Vec<serde_json::Value> {
        std::fs::read_to_string(a.join("dataset").join(name))
            .unwrap()
            .lines()
            .map(|l| serde_json::from_str(l).unwrap())
            .collect()
    };
    let train = read("train.jsonl");
    let test = read("test.jsonl");
    assert!(!train.is_empty() && !test.is_empty());
    let pieces = |rows: &[serde_json::Value]| -> std::collections::BTreeSet<String> {
        rows.iter()
            .map(|r| r["piece_id"].as_str().unwrap().to_string())
            .collect()
    };
    assert!(pieces(&train).is_disjoint(&pieces(&test)));
    assert!(train
        .iter()
        .chain(&test)
        .all(|r| r["answer"] != "Not Enough Information"));
}

#[test]
fn training_commands_run_end_to_end() {
    let f = fixture();
    let work = f.root.join("work");
    run_data_stages(&f, &work);
    let cfg = p(&f.config);
    let train = work.join("dataset/train.jsonl");
    let test = work.join("dataset/test.jsonl");
    let (pre, s1, s2) = (
        work.join("ckpt_pre"),
        work.join("ckpt_s1"),
        work.join("ckpt_s2"),
    );
    let preds = work.join("preds.jsonl");
    let report = work.join("report.json");
    let steps: [Vec<&str>; 5] = [
        vec![
            "pretrain",
            "--config",
            cfg,
            "--data",
            p(&train),
            "--midi-dir",
            p(&f.midi),
            "--out",
            p(&pre),
        ],
        vec![
            "train",
            "--config",
            cfg,
            "--stage",
            "1",
            "--data",
            p(&train),
            "--midi-dir",
            p(&f.midi),
            "--init",
            p(&pre),
            "--out",
            p(&s1),
        ],
        vec![
            "train",
            "--config",
            cfg,
            "--stage",
            "2",
            "--data",
            p(&train),
            "--midi-dir",
            p(&f.midi),
            "--init",
            p(&s1),
            "--out",
            p(&s2),
        ],
        vec![
            "decode",
            "--config",
            cfg,
            "--jobs",
            "2",
            "--checkpoint",
            p(&s2),
            "--data",
            p(&test),
            "--midi-dir",
            p(&f.midi),
            "--out",
            p(&preds),
            "--max-new-tokens",
            "8",
        ],
        vec![
            "eval",
            "--pred",
            p(&preds),
            "--gold",
            p(&test),
            "--out",
            p(&report),
        ],
    ];
    for args in steps {
        let o = midilm(&args);
        assert_eq!(
            o.status.code(),
            Some(0),
            "{args:?}: {}",
            String::from_utf8_lossy(&o.stderr)
        );
    }
    let sums = |d: &Path| -> serde_json::Value {
        serde_json::from_slice(&std::fs::read(d.join("checksums.json")).unwrap()).unwrap()
    };
    assert_eq!(sums(&pre)["lm"], sums(&s1)["lm"]);
    assert_eq!(sums(&s1)["lm"], sums(&s2)["lm"]);
    assert_eq!(sums(&pre)["encoder"], sums(&s2)["encoder"]);
    let r: serde_json::Value = serde_json::from_slice(&std::fs::read(&report).unwrap()).unwrap();
    assert!(r["count"].as_u64().unwrap() > 0);
}

#[test]
fn music_commands_write_per_file_outputs() {
    let f = fixture();
    let out = f.root.join("music");
    for (cmd, ext) in [
        ("parse", "json"),
        ("tokenize", "oct"),
        ("segment", "clips.json"),
        ("abc", "abc"),
        ("features", "features.json"),
    ] {
        let a = p(&f.midi.join("piece0.mid")).to_string();
        let b = p(&f.midi.join("piece1.mid")).to_string();
        let o = midilm(&[cmd, "--jobs", "2", &a, &b, "--out-dir", p(&out)]);
        assert_eq!(
            o.status.code(),
            Some(0),
            "{cmd}: {}",
            String::from_utf8_lossy(&o.stderr)
        );
        assert!(out.join(format!("piece1.{ext}")).exists(), "{cmd}");
    }
    let clips: serde_json::Value =
        serde_json::from_slice(&std::fs::read(out.join("piece0.clips.json")).unwrap()).unwrap();
    assert_eq!(clips.as_array().unwrap().len(), 3);
    let o = midilm(&[
        "tokenize",
        p(&f.midi.join("piece0.mid")),
        p(&f.midi.join("piece1.mid")),
    ]);
    assert_eq!(o.status.code(), Some(1));
}

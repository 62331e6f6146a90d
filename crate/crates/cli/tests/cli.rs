use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use ctxbias::io::{read_checkpoint, read_corpus, read_jsonl, read_scores, DecodeRecord, PhraseList};
use ctxbias::scorer::score_batch;
use ctxbias::Phrase;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_ctxbias"))
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().unwrap()
}

fn ok(args: &[&str]) -> Output {
    let out = run(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

const SYNTH: &str = "train_utterances = 24\ntest_utterances = 4\nrare_pool = 300\ndistractor_counts = 5,20\n";
const TRAIN: &str = "epochs = 2\nmodel_dim = 8\nff_dim = 16\nphrases_per_utterance = 6\n";

struct Run {
    dir: PathBuf,
}

impl Run {
    fn path(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }
}

fn pipeline(root: &Path) -> Run {
    let dir = root.to_path_buf();
    let synth_conf = dir.join("synth_in.conf");
    fs::write(&synth_conf, SYNTH).unwrap();
    let train_conf = dir.join("train.conf");
    fs::write(&train_conf, TRAIN).unwrap();
    let data = dir.join("data");
    ok(&["synth", "--config", s(&synth_conf), "--out-dir", s(&data)]);
    let r = Run { dir };
    ok(&[
        "train",
        "--config",
        s(&train_conf),
        "--corpus",
        s(&data.join("train.jsonl")),
        "--vocab",
        s(&data.join("vocab.txt")),
        "--checkpoint",
        s(&r.path("ck.json")),
        "--trace",
        s(&r.path("trace.csv")),
    ]);
    let common = |cmd: &str, out: &str, tol: &str| {
        ok(&[
            cmd,
            "--corpus",
            s(&data.join("test.jsonl")),
            "--phrases",
            s(&data.join("biasing_n20.txt")),
            "--checkpoint",
            s(&r.path("ck.json")),
            "--tol",
            tol,
            "--out",
            s(&r.path(out)),
        ]);
    };
    common("score", "scores.tsv", "0");
    common("decode", "decode_t0.jsonl", "0");
    common("decode", "decode_t2.jsonl", "2");
    ok(&[
        "evaluate",
        "--ref",
        s(&data.join("test.jsonl")),
        "--hyp",
        s(&r.path("decode_t0.jsonl")),
        "--phrases",
        s(&data.join("biasing_n20.txt")),
        "--out",
        s(&r.path("report.json")),
    ]);
    r
}

#[test]
fn full_pipeline_outputs_are_consistent_and_reproducible() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let ra = pipeline(a.path());
    let rb = pipeline(b.path());
    for f in [
        "data/train.jsonl",
        "data/test.jsonl",
        "data/vocab.txt",
        "data/biasing_n20.txt",
        "data/distractors_n5.txt",
        "ck.json",
        "trace.csv",
        "scores.tsv",
        "decode_t0.jsonl",
        "decode_t2.jsonl",
        "report.json",
    ] {
        assert_eq!(fs::read(ra.path(f)).unwrap(), fs::read(rb.path(f)).unwrap(), "{f}");
    }

    // scores match in-process scoring exactly, with an empty-phrase row each
    let (params, vocab) = read_checkpoint(&ra.path("ck.json")).unwrap();
    let utts = read_corpus(&ra.path("data/test.jsonl"), &vocab).unwrap();
    let list = PhraseList::read(&ra.path("data/biasing_n20.txt")).unwrap();
    let (tol, rows) = read_scores(&ra.path("scores.tsv")).unwrap();
    assert_eq!(tol, 0.0);
    let mut k = 0;
    for u in &utts {
        let mut all = vec![Phrase::empty(&vocab)];
        for w in list.for_utterance(&u.id) {
            all.push(Phrase::new(w, &vocab).unwrap());
        }
        let scored = score_batch(&params, &u.features, &all).unwrap();
        assert_eq!(rows[k].phrase, "<empty>");
        assert!(rows[k].kept);
        let s0 = scored[0].per_token;
        for sc in &scored {
            let r = &rows[k];
            assert_eq!(r.utt_id, u.id);
            assert_eq!(r.log_prob, sc.log_prob);
            assert_eq!(r.per_token, sc.per_token);
            assert_eq!(r.kept, sc.per_token - s0 >= 0.0);
            k += 1;
        }
    }
    assert_eq!(k, rows.len());

    let t0: Vec<DecodeRecord> = read_jsonl(&ra.path("decode_t0.jsonl")).unwrap();
    let t2: Vec<DecodeRecord> = read_jsonl(&ra.path("decode_t2.jsonl")).unwrap();
    for (x, y) in t0.iter().zip(&t2) {
        assert!(y.kept_phrases.len() >= x.kept_phrases.len());
    }
    let report: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(ra.path("report.json")).unwrap()).unwrap();
    assert!(report["wer"].is_number());
    assert_eq!(report["utterances"].as_array().unwrap().len(), utts.len());
}

#[test]
fn identical_reference_and_hypothesis_scores_zero() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    fs::write(
        d.join("ref.jsonl"),
        "{\"id\":\"a\",\"words\":[\"see\",\"spot\",\"run\"],\"feature_file\":\"x.json\"}\n",
    )
    .unwrap();
    fs::write(
        d.join("hyp.jsonl"),
        "{\"id\":\"a\",\"hypothesis_words\":[\"see\",\"spot\",\"run\"],\"kept_phrases\":[],\"bonus\":0.0,\"base_score\":0.0,\"bias_score\":0.0}\n",
    )
    .unwrap();
    fs::write(d.join("p.txt"), "#utt a\nspot\n").unwrap();
    let out = ok(&[
        "evaluate",
        "--ref",
        s(&d.join("ref.jsonl")),
        "--hyp",
        s(&d.join("hyp.jsonl")),
        "--phrases",
        s(&d.join("p.txt")),
        "--out",
        s(&d.join("r.json")),
    ]);
    assert!(String::from_utf8_lossy(&out.stdout).contains("WER 0.0000"));
    let report: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(d.join("r.json")).unwrap()).unwrap();
    assert_eq!(report["wer"], 0.0);
    assert_eq!(report["b_wer"], 0.0);
}

#[test]
fn bad_arguments_exit_two() {
    assert_eq!(run(&["frobnicate"]).status.code(), Some(2));
    assert_eq!(run(&["decode", "--beam", "wide"]).status.code(), Some(2));
    // missing required settings
    assert_eq!(run(&["train"]).status.code(), Some(2));
    let dir = tempfile::tempdir().unwrap();
    let conf = dir.path().join("c.conf");
    fs::write(&conf, "no_such_key = 1\n").unwrap();
    let out = run(&["synth", "--config", s(&conf), "--out-dir", s(dir.path())]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("unknown key"));
}

#[test]
fn runtime_failures_exit_one() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nope.jsonl");
    let out = run(&[
        "evaluate",
        "--ref",
        s(&missing),
        "--hyp",
        s(&missing),
        "--phrases",
        s(&missing),
        "--out",
        s(&dir.path().join("r.json")),
    ]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("nope.jsonl"));
}

#[test]
fn help_lists_subcommands() {
    let out = ok(&["--help"]);
    let text = String::from_utf8_lossy(&out.stdout);
    for cmd in ["synth", "train", "score", "filter", "decode", "evaluate"] {
        assert!(text.contains(cmd));
    }
}

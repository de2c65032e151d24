use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use emovox::commands::{CONFUSION_CSV, FINAL_CHECKPOINT, METRICS_FILE, REPORT_CSV, REPORT_TEXT};
use emovox::format::{MANIFEST_FILE, SIDE_TABLE_FILE, UTTERANCE_DIR};

const SMALL: &str = r#"
[model]
d_model = 16
token_dim = 16
num_encoder_layers = 1
d_spk = 4
lconv_heads = 2
transformer_heads = 2

[train]
batch_size = 4
total_steps = 20
warmup_steps = 5
checkpoint_every = 8

[corpus]
utterances_per_speaker_per_emotion = 3
"#;

fn emovox(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_emovox"))
        .args(args)
        .env_remove("EMOVOX_SEED")
        .output()
        .expect("binary runs")
}

fn emovox_env(args: &[&str], seed: &str) -> Output {
    Command::new(env!("CARGO_BIN_EXE_emovox"))
        .args(args)
        .env("EMOVOX_SEED", seed)
        .output()
        .expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exit code")
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn ok(out: Output) -> Output {
    assert_eq!(code(&out), 0, "stderr: {}", stderr(&out));
    out
}

struct Workspace {
    dir: tempfile::TempDir,
}

impl Workspace {
    fn new() -> Self {
        let dir = tempfile::tempdir().unwrap();
        fs::write(dir.path().join("small.toml"), SMALL).unwrap();
        Workspace { dir }
    }

    fn p(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }

    fn s(&self, name: &str) -> String {
        self.p(name).to_string_lossy().into_owned()
    }

    fn gen(&self) {
        ok(emovox(&["gen", "--config", &self.s("small.toml"), "--out-dir", &self.s("data")]));
    }

    fn train(&self, out: &str, extra: &[&str]) -> Output {
        let cfg = self.s("small.toml");
        let data = self.s("data");
        let out = self.s(out);
        let mut args = vec!["train", "--config", &cfg, "--data-dir", &data, "--out-dir", &out, "--log-every", "0"];
        args.extend_from_slice(extra);
        emovox(&args)
    }
}

fn tree_bytes(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    for name in [MANIFEST_FILE, SIDE_TABLE_FILE] {
        out.push((name.to_string(), fs::read(dir.join(name)).unwrap()));
    }
    let mut utts: Vec<_> = fs::read_dir(dir.join(UTTERANCE_DIR)).unwrap().map(|e| e.unwrap().path()).collect();
    utts.sort();
    for p in utts {
        out.push((p.file_name().unwrap().to_string_lossy().into_owned(), fs::read(p).unwrap()));
    }
    out
}

#[test]
fn gen_writes_corpus_and_counts() {
    let ws = Workspace::new();
    let out = ok(emovox(&["gen", "--config", &ws.s("small.toml"), "--out-dir", &ws.s("data")]));
    assert!(stdout(&out).contains("42 utterances"), "{}", stdout(&out));
    assert_eq!(fs::read_dir(ws.p("data").join(UTTERANCE_DIR)).unwrap().count(), 42);

    ok(emovox(&["gen", "--config", &ws.s("small.toml"), "--out-dir", &ws.s("again")]));
    assert_eq!(tree_bytes(&ws.p("data")), tree_bytes(&ws.p("again")));
}

#[test]
fn desk_preset_gen_writes_1400_utterances() {
    let ws = Workspace::new();
    let out = ok(emovox(&["gen", "--out-dir", &ws.s("desk")]));
    assert!(stdout(&out).contains("1400 utterances"));
    let manifest = fs::read_to_string(ws.p("desk").join(MANIFEST_FILE)).unwrap();
    assert!(manifest.lines().any(|l| l == "count 1400"));
}

#[test]
fn seed_precedence_is_flag_then_env_then_file() {
    let ws = Workspace::new();
    let cfg = ws.s("small.toml");
    ok(emovox(&["gen", "--config", &cfg, "--out-dir", &ws.s("file")]));
    ok(emovox(&["gen", "--config", &cfg, "--out-dir", &ws.s("flag7"), "--seed", "7"]));
    ok(emovox_env(&["gen", "--config", &cfg, "--out-dir", &ws.s("env7")], "7"));
    ok(emovox_env(&["gen", "--config", &cfg, "--out-dir", &ws.s("both")], "99"));
    ok(emovox_env(&["gen", "--config", &cfg, "--out-dir", &ws.s("both"), "--seed", "7"], "99"));
    assert_ne!(tree_bytes(&ws.p("file")), tree_bytes(&ws.p("flag7")));
    assert_eq!(tree_bytes(&ws.p("flag7")), tree_bytes(&ws.p("env7")));
    assert_eq!(tree_bytes(&ws.p("flag7")), tree_bytes(&ws.p("both")));
}

#[test]
fn config_and_io_errors_map_to_exit_codes() {
    let ws = Workspace::new();
    fs::write(ws.p("bad.toml"), "[modle]\nd_model = 128\n").unwrap();
    let out = emovox(&["gen", "--config", &ws.s("bad.toml"), "--out-dir", &ws.s("x")]);
    assert_eq!(code(&out), 1);
    assert!(stderr(&out).contains("modle.d_model"), "{}", stderr(&out));

    let out = emovox(&["gen", "--config", &ws.s("missing.toml"), "--out-dir", &ws.s("x")]);
    assert_eq!(code(&out), 2);

    let out = emovox(&["train", "--config", &ws.s("small.toml"), "--data-dir", &ws.s("nodata"), "--out-dir", &ws.s("r")]);
    assert_eq!(code(&out), 2);

    assert_eq!(code(&emovox(&["frobnicate"])), 1);
    assert_eq!(code(&emovox(&["synth", "--ckpt", "x"])), 1);
}

#[test]
fn corrupt_corpus_is_a_data_error() {
    let ws = Workspace::new();
    ws.gen();
    let utt = ws.p("data").join(UTTERANCE_DIR).join("spk0_00000.utt");
    let mut bytes = fs::read(&utt).unwrap();
    let n = bytes.len();
    bytes[n - 1] ^= 0xff;
    fs::write(&utt, bytes).unwrap();
    let out = ws.train("run", &[]);
    assert_eq!(code(&out), 3, "{}", stderr(&out));
    assert!(stderr(&out).contains("checksum"));
}

#[test]
fn smoke_training_writes_checkpoint_and_metrics() {
    let ws = Workspace::new();
    ws.gen();
    ok(ws.train("run", &[]));
    assert!(ws.p("run").join(FINAL_CHECKPOINT).exists());
    assert!(ws.p("run").join("checkpoint-0000008.evx").exists());
    assert!(ws.p("run").join("checkpoint-0000016.evx").exists());
    let log = fs::read_to_string(ws.p("run").join(METRICS_FILE)).unwrap();
    assert_eq!(log.lines().count(), 20);
    for (i, line) in log.lines().enumerate() {
        let fields: Vec<&str> = line.split(',').collect();
        assert_eq!(fields.len(), 6);
        assert_eq!(fields[0], (i + 1).to_string());
    }
}

#[test]
fn training_is_reproducible_and_resumable() {
    let ws = Workspace::new();
    ws.gen();
    ok(ws.train("a", &[]));
    ok(ws.train("b", &[]));
    let log_a = fs::read(ws.p("a").join(METRICS_FILE)).unwrap();
    assert_eq!(log_a, fs::read(ws.p("b").join(METRICS_FILE)).unwrap());
    let ckpt_a = fs::read(ws.p("a").join(FINAL_CHECKPOINT)).unwrap();
    assert_eq!(ckpt_a, fs::read(ws.p("b").join(FINAL_CHECKPOINT)).unwrap());

    // Interrupt at step 8 by resuming from the periodic checkpoint into a
    // directory whose metrics log runs past it.
    let mid = ws.s("a/checkpoint-0000008.evx");
    ok(ws.train("b", &["--resume", &mid]));
    assert_eq!(fs::read(ws.p("b").join(METRICS_FILE)).unwrap(), log_a);
    assert_eq!(fs::read(ws.p("b").join(FINAL_CHECKPOINT)).unwrap(), ckpt_a);

    ok(ws.train("c", &["--steps", "8"]));
    ok(ws.train("c", &["--resume", &ws.s("c/checkpoint.evx")]));
    assert_eq!(fs::read(ws.p("c").join(METRICS_FILE)).unwrap(), log_a);
    assert_eq!(fs::read(ws.p("c").join(FINAL_CHECKPOINT)).unwrap(), ckpt_a);
}

#[test]
fn resuming_under_a_different_config_is_refused() {
    let ws = Workspace::new();
    ws.gen();
    ok(ws.train("a", &["--steps", "2"]));
    let ckpt = ws.s("a/checkpoint.evx");
    let out = ws.train("a", &["--resume", &ckpt, "--seed", "5"]);
    assert_eq!(code(&out), 1);
    assert!(stderr(&out).contains("train.seed"), "{}", stderr(&out));
    let out = ws.train("a", &["--resume", &ckpt, "--variant", "m2"]);
    assert_eq!(code(&out), 1);
    assert!(stderr(&out).contains("model.num_tokens"), "{}", stderr(&out));
}

#[test]
fn m2_variant_never_uses_the_classifier_loss() {
    let ws = Workspace::new();
    ws.gen();
    ok(ws.train("m2", &["--variant", "m2"]));
    let log = fs::read_to_string(ws.p("m2").join(METRICS_FILE)).unwrap();
    assert_eq!(log.lines().count(), 20);
    assert!(log.lines().all(|l| l.split(',').nth(3) == Some("0")), "{log}");
    let out = ok(emovox(&["inspect-tokens", "--ckpt", &ws.s("m2/checkpoint.evx")]));
    assert_eq!(token_rows(&stdout(&out)).len(), 10);
}

fn token_rows(text: &str) -> Vec<Vec<String>> {
    text.lines()
        .skip(2)
        .map(|l| l.split_whitespace().map(str::to_string).collect())
        .collect()
}

#[test]
fn synth_and_inspect() {
    let ws = Workspace::new();
    ws.gen();
    ok(ws.train("run", &["--steps", "2"]));
    let ckpt = ws.s("run/checkpoint.evx");
    let synth = |emotion: &str, out: &str, speaker: &str| {
        emovox(&["synth", "--ckpt", &ckpt, "--text", "3 1 4 1 5", "--speaker", speaker, "--emotion", emotion, "--out", &ws.s(out)])
    };
    let by_name = ok(synth("angry", "a.mel", "1"));
    assert!(stdout(&by_name).contains("frames"));
    ok(synth("3", "b.mel", "1"));
    ok(synth("angry", "c.mel", "1"));
    let a = fs::read(ws.p("a.mel")).unwrap();
    assert_eq!(a, fs::read(ws.p("b.mel")).unwrap());
    assert_eq!(a, fs::read(ws.p("c.mel")).unwrap());
    let mel = emovox::format::read_mel(&ws.p("a.mel")).unwrap();
    let frames: usize = stdout(&by_name).split_whitespace().next().unwrap().parse().unwrap();
    assert_eq!(mel.rows(), frames);
    assert_eq!(mel.cols(), 80);

    let out = synth("joyful", "d.mel", "1");
    assert_eq!(code(&out), 1);
    assert!(stderr(&out).contains("neutral, happy, sad, angry, surprise, scare, hate"));
    let out = synth("angry", "d.mel", "9");
    assert_eq!(code(&out), 1);
    assert!(stderr(&out).contains("speaker"));
    assert_eq!(code(&synth("7", "d.mel", "1")), 1);

    let out = ok(emovox(&["inspect-tokens", "--ckpt", &ckpt]));
    let rows = token_rows(&stdout(&out));
    assert_eq!(rows.len(), 7);
    let names: Vec<&str> = rows.iter().map(|r| r[1].as_str()).collect();
    assert_eq!(names, ["neutral", "happy", "sad", "angry", "surprise", "scare", "hate"]);
    for (i, r) in rows.iter().enumerate() {
        let norm: f64 = r[2].parse().unwrap();
        assert!(norm > 0.0);
        assert_eq!(r[3 + i], "1.000");
    }
    assert_eq!(code(&emovox(&["inspect-tokens", "--ckpt", &ws.s("nope.evx")])), 2);
}

#[test]
fn eval_writes_reports() {
    let ws = Workspace::new();
    ws.gen();
    ok(ws.train("run", &["--steps", "2"]));
    let ckpt = ws.s("run/checkpoint.evx");
    ok(emovox(&["eval", "--ckpt", &ckpt, "--data-dir", &ws.s("data"), "--report", &ws.s("report")]));
    let csv = fs::read_to_string(ws.p("report").join(REPORT_CSV)).unwrap();
    assert_eq!(csv.lines().count(), 8);
    let text = fs::read_to_string(ws.p("report").join(REPORT_TEXT)).unwrap();
    assert!(text.contains("calibration"));
    for name in ["neutral", "happy", "sad", "angry", "surprise", "scare", "hate"] {
        assert!(text.contains(name));
    }

    let data = emovox::format::read_corpus(&ws.p("data")).unwrap();
    let confusion = fs::read_to_string(ws.p("report").join(CONFUSION_CSV)).unwrap();
    let sums: Vec<usize> = confusion
        .lines()
        .skip(1)
        .map(|l| l.split(',').skip(1).map(|c| c.parse::<usize>().unwrap()).sum())
        .collect();
    let mut expect = vec![0usize; 7];
    for u in &data.corpus.validation {
        if let Some(e) = u.emotion.id() {
            expect[e] += 1;
        }
    }
    assert_eq!(sums, expect);

    fs::remove_file(ws.p("data").join(SIDE_TABLE_FILE)).unwrap();
    let out = ok(emovox(&["eval", "--ckpt", &ckpt, "--data-dir", &ws.s("data"), "--report", &ws.s("r2")]));
    assert!(stdout(&out).contains("WARNING: no side table"));
}

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::time::{Duration, Instant};

const TINY: &str = r#"
[model]
d_model = 16
encoder_layers = 1
decoder_layers = 1
attention_heads = 2
ffn_expansion = 2
mtp_heads = 2
scorer_hidden = 4

[corpus]
train_size = 24
dev_size = 6
test_size = 6
train_entities = 30
heldout_entities = 30

[training]
alpha = [1.0, 0.2]
epochs = 2
batch_size = 8
warmup_steps = 2
dev_list_size = 10
max_len = 30

[decode]
max_len = 30

[eval]
list_sizes = [0, 10]
lambdas = [0.0, 1.0]
gammas = [0.0]
sweep_lambdas = [1.0, 2.0, 4.0, 8.0]

[eval.tune]
lambdas = [1.0, 2.0]
gammas = [0.0, 0.5]
list_size = 10
"#;

struct Workspace {
    _dir: tempfile::TempDir,
    root: PathBuf,
}

impl Workspace {
    fn new() -> Self {
        let dir = tempfile::tempdir().unwrap();
        let root = dir.path().to_path_buf();
        fs::write(root.join("run.toml"), TINY).unwrap();
        Self { _dir: dir, root }
    }

    fn run(&self, args: &[&str]) -> Output {
        Command::new(env!("CARGO_BIN_EXE_mtpbias"))
            .current_dir(&self.root)
            .env("RUST_LOG", "warn")
            .arg("--config")
            .arg("run.toml")
            .args(args)
            .output()
            .unwrap()
    }

    fn ok(&self, args: &[&str]) -> String {
        let out = self.run(args);
        assert!(
            out.status.success(),
            "{args:?} failed: {}",
            String::from_utf8_lossy(&out.stderr)
        );
        String::from_utf8(out.stdout).unwrap()
    }

    fn path(&self, rel: &str) -> PathBuf {
        self.root.join(rel)
    }
}

fn dir_bytes(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut files: Vec<_> = fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.is_file())
        .map(|p| (p.file_name().unwrap().to_string_lossy().into_owned(), fs::read(&p).unwrap()))
        .collect();
    files.sort();
    files
}

#[test]
fn generate_is_repeatable_and_creates_directories() {
    let ws = Workspace::new();
    ws.ok(&["generate", "--out", "a/b/c"]);
    ws.ok(&["generate", "--out", "a/b/c"]);
    let first = dir_bytes(&ws.path("a/b/c"));
    ws.ok(&["generate", "--out", "d"]);
    let second = dir_bytes(&ws.path("d"));
    let strip = |v: Vec<(String, Vec<u8>)>| v.into_iter().filter(|(n, _)| n != "config.toml").collect::<Vec<_>>();
    assert_eq!(strip(first.clone()), strip(second));
    assert!(first.iter().any(|(n, _)| n == "config.toml"));
    let resolved = fs::read_to_string(ws.path("a/b/c/config.toml")).unwrap();
    assert!(resolved.contains("noise_sigma"));
}

#[test]
fn configuration_errors_exit_with_code_3() {
    let ws = Workspace::new();
    let out = ws.run(&["generate", "--set", "corpus.noise_sigma=-0.5"]);
    assert_eq!(out.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&out.stderr).contains("corpus.noise_sigma"));
    fs::write(ws.path("bad.toml"), "[model]\nwidth = 3\n").unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_mtpbias"))
        .current_dir(&ws.root)
        .args(["--config", "bad.toml", "generate"])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&out.stderr).contains("width"));
}

#[test]
fn missing_data_exits_with_code_4() {
    let ws = Workspace::new();
    let out = ws.run(&["train"]);
    assert_eq!(out.status.code(), Some(4));
    ws.ok(&["generate"]);
    let out = ws.run(&["eval"]);
    assert_eq!(out.status.code(), Some(4), "no checkpoint yet");
}

#[test]
fn divergence_exits_with_code_5() {
    let ws = Workspace::new();
    ws.ok(&["generate"]);
    let out = ws.run(&["train", "--set", "training.learning_rate=1e30", "--set", "training.warmup_steps=0"]);
    assert_eq!(out.status.code(), Some(5), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(String::from_utf8_lossy(&out.stderr).contains("non-finite"));
}

#[test]
fn smoke_pipeline_trains_evaluates_and_sweeps() {
    let ws = Workspace::new();
    let start = Instant::now();
    ws.ok(&["generate"]);
    ws.ok(&["train", "--alpha", "1,0.5"]);
    let resolved = fs::read_to_string(ws.path("runs/model/config.toml")).unwrap();
    assert!(resolved.contains("alpha = [1.0, 0.5]"), "{resolved}");
    assert!(ws.path("runs/model/best.manifest").exists());
    assert!(fs::read_to_string(ws.path("runs/model/curve.csv")).unwrap().starts_with("epoch,step,l_mtp"));

    ws.ok(&["eval", "--jobs", "2"]);
    let csv = fs::read_to_string(ws.path("runs/reports/eval.csv")).unwrap();
    let rows: Vec<Vec<&str>> = csv.lines().skip(1).map(|l| l.split(',').collect()).collect();
    assert_eq!(rows.len(), 4, "two sizes times two weights");
    let mut cells: Vec<(&str, &str)> = rows.iter().map(|r| (r[0], r[1])).collect();
    cells.sort();
    assert_eq!(cells, vec![("0", "0"), ("0", "1"), ("10", "0"), ("10", "1")]);
    // N = 0 and λ = 0 both disable biasing
    let rates = |n: &str, l: &str| rows.iter().find(|r| r[0] == n && r[1] == l).unwrap()[3..].to_vec();
    assert_eq!(rates("0", "1"), rates("10", "0"));
    assert_eq!(
        fs::read(ws.path("runs/reports/hyp/N0_lambda1_gamma0.hyp")).unwrap(),
        fs::read(ws.path("runs/reports/hyp/N10_lambda0_gamma0.hyp")).unwrap()
    );

    let out = ws.ok(&["sweep", "--reports-dir", "sweep"]);
    assert!(out.contains("lambda,wer,b_wer,u_wer"));
    let sweep = fs::read_to_string(ws.path("sweep/sweep.csv")).unwrap();
    assert_eq!(sweep.lines().count(), 5);
    assert!(ws.path("sweep/tune.json").exists());
    assert!(start.elapsed() < Duration::from_secs(120));
}

#[test]
fn resume_matches_an_uninterrupted_run() {
    let ws = Workspace::new();
    ws.ok(&["generate"]);
    ws.ok(&["train", "--checkpoint-dir", "full"]);
    ws.ok(&["train", "--checkpoint-dir", "split", "--epochs", "1"]);
    ws.ok(&["train", "--checkpoint-dir", "split", "--resume"]);
    for f in ["curve.csv", "last.bin", "best.bin"] {
        assert_eq!(
            fs::read(ws.path(&format!("full/{f}"))).unwrap(),
            fs::read(ws.path(&format!("split/{f}"))).unwrap(),
            "{f}"
        );
    }
}

#[test]
fn decode_uses_a_bias_list_file() {
    let ws = Workspace::new();
    ws.ok(&["generate"]);
    ws.ok(&["train", "--epochs", "1"]);
    let entities = fs::read_to_string(ws.path("runs/corpus/entities.test.txt")).unwrap();
    let list: String = entities.lines().take(5).map(|l| format!("{l}\n")).collect();
    fs::write(ws.path("list.txt"), list).unwrap();
    let out = ws.ok(&["decode", "--bias-list", "list.txt", "--lambda", "2", "--split", "dev"]);
    assert!(out.starts_with("dev: WER"));
    let hyp = fs::read_to_string(ws.path("runs/reports/decode.dev.hyp")).unwrap();
    assert_eq!(hyp.lines().count(), 6);
    let report: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(ws.path("runs/reports/decode.dev.json")).unwrap()).unwrap();
    assert_eq!(report["list_size"], 5);
    fs::write(ws.path("broken.txt"), "name\t999\n").unwrap();
    let out = ws.run(&["decode", "--bias-list", "broken.txt"]);
    assert_ne!(out.status.code(), Some(0));
}

#[test]
fn ablation_rows_carry_config_hashes() {
    let ws = Workspace::new();
    ws.ok(&["generate"]);
    let out = ws.ok(&["ablate", "--rows", "A0,B2", "--set", "training.epochs=1"]);
    assert!(out.contains("A0") && out.contains("B2"));
    let rows: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(ws.path("runs/reports/ablation.json")).unwrap()).unwrap();
    let rows = rows.as_array().unwrap();
    assert_eq!(rows.len(), 2);
    let hashes: Vec<&str> = rows.iter().map(|r| r["config_hash"].as_str().unwrap()).collect();
    assert!(hashes.iter().all(|h| h.len() == 16));
    assert_ne!(hashes[0], hashes[1]);
    assert!(rows[0]["biased"].is_null() && !rows[1]["biased"].is_null());
    // a second run reuses the trained checkpoints and reproduces the table
    let again = ws.ok(&["ablate", "--rows", "A0,B2", "--set", "training.epochs=1"]);
    assert_eq!(out, again);
}

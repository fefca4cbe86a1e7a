use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use fsban::results::{parse_results, Record};

const TINY: &str = r#"
seed = 1
mode = "ban"

[universe]
dim = 8
signal_dim = 4
classes_per_domain = 12
samples_per_class = 25

[train]
n_way = 3
n_query = 5
epochs = 2
teacher_epochs = 2
tasks_per_epoch = 4
val_tasks = 4
warmup_epochs = 1
tau_lr = 0.05

[train.model]
input_dim = 8
hidden = [8]
feature_dim = 4

[eval]
n_way = 3
n_query = 5
n_tasks = 20

[analysis]
noise_trials = 1
separation_tasks = 2
separation_per_class = 5
lda_per_class = 8
"#;

struct Sandbox {
    dir: tempfile::TempDir,
}

impl Sandbox {
    fn new() -> Self {
        let s = Sandbox { dir: tempfile::tempdir().unwrap() };
        fs::write(s.path("tiny.toml"), TINY).unwrap();
        s
    }

    fn path(&self, rel: &str) -> PathBuf {
        self.dir.path().join(rel)
    }

    fn run(&self, args: &[&str]) -> Output {
        Command::new(env!("CARGO_BIN_EXE_fsban"))
            .args(args)
            .current_dir(self.dir.path())
            .env_remove("FSBAN_OUT_ROOT")
            .output()
            .unwrap()
    }

    fn ok(&self, args: &[&str]) -> Output {
        let o = self.run(args);
        assert!(o.status.success(), "{args:?}: {}", String::from_utf8_lossy(&o.stderr));
        o
    }

    fn leftovers(&self) -> Vec<String> {
        fs::read_dir(self.dir.path())
            .unwrap()
            .map(|e| e.unwrap().file_name().to_string_lossy().into_owned())
            .filter(|n| n.contains("partial"))
            .collect()
    }
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

fn records(dir: &Path) -> Vec<Record> {
    parse_results(&fs::read_to_string(dir.join("results.jsonl")).unwrap()).unwrap()
}

fn body(dir: &Path) -> Vec<String> {
    fs::read_to_string(dir.join("results.jsonl")).unwrap().lines().skip(1).map(String::from).collect()
}

#[test]
fn gen_universe_is_deterministic_and_needs_an_output() {
    let s = Sandbox::new();
    s.ok(&["gen-universe", "--config", "tiny.toml", "--out", "a.fsu"]);
    s.ok(&["gen-universe", "--config", "tiny.toml", "--out", "b.fsu"]);
    assert_eq!(fs::read(s.path("a.fsu")).unwrap(), fs::read(s.path("b.fsu")).unwrap());
    assert_eq!(code(&s.run(&["gen-universe", "--config", "tiny.toml"])), 2);
}

#[test]
fn exit_codes_separate_usage_config_and_runtime_failures() {
    let s = Sandbox::new();
    assert_eq!(code(&s.run(&["train", "--mode", "bogus"])), 2);
    assert_eq!(code(&s.run(&["train", "--config", "missing.toml"])), 3);
    fs::write(s.path("bad.toml"), "[train]\nepocs = 3\n").unwrap();
    assert_eq!(code(&s.run(&["train", "--config", "bad.toml", "--out", "x"])), 3);
    fs::write(s.path("dims.toml"), "[universe]\ndim = 5\n").unwrap();
    assert_eq!(code(&s.run(&["train", "--config", "dims.toml", "--out", "x"])), 3);

    s.ok(&["gen-universe", "--config", "tiny.toml", "--out", "u.fsu"]);
    let mut bytes = fs::read(s.path("u.fsu")).unwrap();
    let mid = bytes.len() / 2;
    bytes[mid] ^= 1;
    fs::write(s.path("corrupt.fsu"), bytes).unwrap();
    let o = s.run(&["train", "--config", "tiny.toml", "--universe", "corrupt.fsu", "--out", "run"]);
    assert_eq!(code(&o), 4);
    assert!(String::from_utf8_lossy(&o.stderr).contains("schema error"));
    assert!(!s.path("run").exists());
    assert!(s.leftovers().is_empty());
}

#[test]
fn dry_run_validates_without_writing() {
    let s = Sandbox::new();
    let o = s.ok(&["train", "--config", "tiny.toml", "--dry-run", "--out", "run"]);
    assert!(String::from_utf8_lossy(&o.stdout).contains("config ok"));
    assert!(!s.path("run").exists());
    assert_eq!(code(&s.run(&["train", "--config", "tiny.toml", "--dry-run", "--universe", "nope.fsu"])), 2);
}

#[test]
fn ban_from_a_gen0_checkpoint_records_the_teacher_and_matches_internal_training() {
    let s = Sandbox::new();
    s.ok(&["gen-universe", "--config", "tiny.toml", "--out", "u.fsu"]);
    s.ok(&["train", "--config", "tiny.toml", "--universe", "u.fsu", "--mode", "gen0", "--out", "g0"]);
    s.ok(&["train", "--config", "tiny.toml", "--universe", "u.fsu", "--teacher", "g0/gen0.ckpt", "--out", "ban"]);
    s.ok(&["train", "--config", "tiny.toml", "--out", "ban-direct"]);
    let sha = fsban::formats::sha256_hex(&fs::read(s.path("g0/gen0.ckpt")).unwrap());
    match &records(&s.path("ban"))[0] {
        Record::Header { invocation, .. } => assert_eq!(invocation.teacher.as_ref().unwrap().sha256, sha),
        r => panic!("{r:?}"),
    }
    assert_eq!(fs::read(s.path("ban/student.ckpt")).unwrap(), fs::read(s.path("ban-direct/student.ckpt")).unwrap());
    assert_eq!(fs::read(s.path("ban/gen0.ckpt")).unwrap(), fs::read(s.path("g0/gen0.ckpt")).unwrap());
    assert_eq!(
        code(&s.run(&["train", "--config", "tiny.toml", "--mode", "fsban", "--teacher", "g0/gen0.ckpt", "--out", "f"])),
        2
    );
    assert_eq!(code(&s.run(&["train", "--config", "tiny.toml", "--out", "ban"])), 2);
}

#[test]
fn every_artifact_echoes_the_config_and_reruns_identically() {
    let s = Sandbox::new();
    s.ok(&["train", "--config", "tiny.toml", "--mode", "fsban", "--seed", "4", "--out", "run"]);
    let recs = records(&s.path("run"));
    match &recs[0] {
        Record::Header { config, seed, .. } => {
            assert_eq!(*seed, 4);
            assert_eq!(config.train.epochs, 2);
            assert_eq!(config.train.seed, 4);
        }
        r => panic!("{r:?}"),
    }
    assert!(recs.iter().any(|r| matches!(r, Record::Tau { series } if series.len() == 8)));
    assert!(recs.iter().any(|r| matches!(r, Record::Eval { unseen: true, .. })));
    for f in ["summary.txt", "timing.json", "student.ckpt", "plots/tau.csv", "plots/val_acc.csv"] {
        assert!(s.path("run").join(f).is_file(), "{f}");
    }
    let o = s.ok(&["reproduce", "run/results.jsonl", "--out", "again"]);
    assert!(String::from_utf8_lossy(&o.stdout).contains("identical"));
    fs::write(s.path("again/summary.txt"), "tampered").unwrap();
    assert!(!fsban::commands::compare_trees(&s.path("run"), &s.path("again")).unwrap().is_empty());
}

#[test]
fn evaluate_and_analyze_are_reproducible() {
    let s = Sandbox::new();
    s.ok(&["train", "--config", "tiny.toml", "--mode", "gen0", "--out", "g0"]);
    let ck = "g0/gen0.ckpt";
    s.ok(&["evaluate", "--config", "tiny.toml", "--checkpoint", ck, "--out", "e1"]);
    s.ok(&["evaluate", "--config", "tiny.toml", "--checkpoint", ck, "--out", "e2"]);
    assert_eq!(fs::read(s.path("e1/results.jsonl")).unwrap(), fs::read(s.path("e2/results.jsonl")).unwrap());
    assert_eq!(records(&s.path("e1")).iter().filter(|r| matches!(r, Record::Eval { .. })).count(), 4);

    s.ok(&["analyze", "--config", "tiny.toml", "--checkpoint", ck, "--split", "valid", "--out", "an"]);
    let recs = records(&s.path("an"));
    assert_eq!(recs.iter().filter(|r| matches!(r, Record::Probe { .. })).count(), 3);
    assert!(recs.iter().any(|r| matches!(r, Record::Noise { stds, .. } if stds.len() == 6)));
    assert!(recs.iter().any(|r| matches!(r, Record::Tsd { .. })));
    let lda = fs::read_to_string(s.path("an/plots/lda.csv")).unwrap();
    assert!(lda.starts_with("x,y,series\n") && lda.lines().count() == 1 + 3 * 8);
    s.ok(&["reproduce", "an", "--out", "an2"]);

    assert_eq!(code(&s.run(&["evaluate", "--config", "tiny.toml", "--checkpoint", "nope.ckpt", "--out", "e3"])), 2);
    assert_eq!(code(&s.run(&["evaluate", "--config", "tiny.toml", "--checkpoint", ck, "--domain", "9", "--out", "e3"])), 2);
    fs::write(s.path("wide.toml"), TINY.replace("dim = 8", "dim = 9").replace("input_dim = 8", "input_dim = 9")).unwrap();
    assert_eq!(code(&s.run(&["evaluate", "--config", "wide.toml", "--checkpoint", ck, "--out", "e3"])), 3);
    assert!(s.leftovers().is_empty());
}

#[test]
fn ablate_emits_eight_cells_and_the_empty_cell_is_the_ban_run() {
    let s = Sandbox::new();
    s.ok(&["ablate", "--config", "tiny.toml", "--parallel", "3", "--out", "abl"]);
    s.ok(&["train", "--config", "tiny.toml", "--mode", "ban", "--out", "ban"]);
    let text = fs::read_to_string(s.path("abl/ablation.jsonl")).unwrap();
    let cells: Vec<_> = parse_results(&text).unwrap().into_iter().filter(|r| matches!(r, Record::Cell { .. })).collect();
    assert_eq!(cells.len(), 8);
    let none = s.path("abl/cell-none");
    assert_eq!(fs::read(none.join("student.ckpt")).unwrap(), fs::read(s.path("ban/student.ckpt")).unwrap());
    assert_eq!(body(&none), body(&s.path("ban")));
    s.ok(&["reproduce", "abl/cell-mr+mm+mct", "--out", "cell-again"]);
    s.ok(&["reproduce", "abl", "--out", "abl-again"]);
}

#[test]
fn output_root_comes_from_the_environment() {
    let s = Sandbox::new();
    let o = Command::new(env!("CARGO_BIN_EXE_fsban"))
        .args(["train", "--config", "tiny.toml", "--mode", "gen0"])
        .current_dir(s.dir.path())
        .env("FSBAN_OUT_ROOT", s.path("root"))
        .output()
        .unwrap();
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(s.path("root/gen0-seed1/results.jsonl").is_file());
}

//! Line-delimited result records, plot data and output staging.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use fsban_core::data::Split;
use serde::{Deserialize, Serialize};

use crate::config::ExperimentConfig;
use crate::error::{CliError, CliResult};

pub const SCHEMA_VERSION: u32 = 1;
pub const RESULTS_FILE: &str = "results.jsonl";
pub const SUMMARY_FILE: &str = "summary.txt";
/// Wall-clock sidecar, kept out of the results so reruns compare equal.
pub const TIMING_FILE: &str = "timing.json";
pub const OUT_ROOT_ENV: &str = "FSBAN_OUT_ROOT";

pub fn build_id() -> String {
    format!("fsban {}", env!("CARGO_PKG_VERSION"))
}

/// A file consumed by a command, pinned by checksum.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FileRef {
    pub path: String,
    pub sha256: String,
}

/// What produced a results file, enough to run it again.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Invocation {
    pub command: String,
    /// SHA-256 of the universe file bytes of the universe in use.
    pub universe_sha256: String,
    pub teacher: Option<FileRef>,
    pub checkpoint: Option<FileRef>,
    pub domain: Option<usize>,
    pub split: Option<Split>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "record", rename_all = "snake_case")]
pub enum Record {
    Header {
        schema_version: u32,
        build: String,
        seed: u64,
        invocation: Invocation,
        config: ExperimentConfig,
    },
    Epoch {
        stage: String,
        epoch: usize,
        domain: usize,
        train_loss: f64,
        val_acc: f64,
        teacher_tsd: Option<f64>,
        tau: Option<f64>,
    },
    Stage {
        stage: String,
        best_epoch: Option<usize>,
        best_val_acc: Option<f64>,
        checkpoint: String,
        sha256: String,
        n_training_classes: usize,
    },
    Eval {
        model: String,
        domain: usize,
        split: Split,
        unseen: bool,
        mean_acc: f64,
        ci95: f64,
        n_tasks: usize,
    },
    Separation {
        model: String,
        domain: usize,
        split: Split,
        r_fc: f64,
        r_hv: f64,
        n_tasks: usize,
    },
    Probe {
        model: String,
        domain: usize,
        split: Split,
        /// `input`, `features` or `lda`.
        space: String,
        lr_acc: f64,
    },
    Noise {
        model: String,
        domain: usize,
        split: Split,
        stds: Vec<f64>,
        accuracies: Vec<f64>,
        area: f64,
    },
    Tsd {
        model: String,
        domain: usize,
        split: Split,
        mean_tsd: f64,
        n_tasks: usize,
    },
    Tau {
        series: Vec<f64>,
    },
    Selection {
        counts: Vec<Vec<u64>>,
    },
    Cell {
        label: String,
        directory: String,
        unseen_acc: f64,
        ci95: f64,
        best_val_acc: Option<f64>,
    },
}

pub fn to_line(r: &Record) -> CliResult<String> {
    let mut s = serde_json::to_string(r)?;
    s.push('\n');
    Ok(s)
}

pub fn to_jsonl(records: &[Record]) -> CliResult<String> {
    records.iter().map(to_line).collect()
}

/// Parses a results file and checks its schema version.
pub fn parse_results(text: &str) -> CliResult<Vec<Record>> {
    let records = text
        .lines()
        .enumerate()
        .map(|(i, l)| serde_json::from_str(l).map_err(|e| CliError::runtime(format!("results line {}: {e}", i + 1))))
        .collect::<CliResult<Vec<Record>>>()?;
    match records.first() {
        Some(Record::Header { schema_version, .. }) if *schema_version == SCHEMA_VERSION => Ok(records),
        Some(Record::Header { schema_version, .. }) => Err(CliError::runtime(format!(
            "results schema version {schema_version}, expected {SCHEMA_VERSION}"
        ))),
        _ => Err(CliError::runtime("results file does not start with a header record")),
    }
}

/// Plot data as `x,y,series` rows.
pub fn csv(rows: &[(f64, f64, String)]) -> String {
    let mut s = String::from("x,y,series\n");
    for (x, y, series) in rows {
        let _ = writeln!(s, "{x},{y},{series}");
    }
    s
}

/// Fixed-width table of the evaluation, separation and cell records.
pub fn summary(records: &[Record]) -> String {
    let mut s = String::new();
    let mut evals = String::new();
    let mut cells = String::new();
    let mut other = String::new();
    for r in records {
        match r {
            Record::Header { build, seed, invocation, config, .. } => {
                let _ = writeln!(s, "{build}  command={}  mode={}  seed={seed}", invocation.command, config.mode.name());
            }
            Record::Eval { model, domain, split, unseen, mean_acc, ci95, n_tasks } => {
                let tag = if *unseen { "unseen" } else { "seen" };
                let _ = writeln!(evals, "{model:<16} {domain:>6} {:<6} {tag:<6} {mean_acc:>8.2} ± {ci95:<6.2} {n_tasks:>6}", split_name(*split));
            }
            Record::Cell { label, unseen_acc, ci95, best_val_acc, .. } => {
                let v = best_val_acc.map_or(String::from("-"), |v| format!("{v:.2}"));
                let _ = writeln!(cells, "{label:<16} {unseen_acc:>8.2} ± {ci95:<6.2} {v:>8}");
            }
            Record::Separation { model, r_fc, r_hv, .. } => {
                let _ = writeln!(other, "{model}: R_FC {r_fc:.4}  R_HV {r_hv:.4}");
            }
            Record::Probe { model, space, lr_acc, .. } => {
                let _ = writeln!(other, "{model}: LR-Acc ({space}) {lr_acc:.2}");
            }
            Record::Noise { model, area, .. } => {
                let _ = writeln!(other, "{model}: noise-curve area {area:.4}");
            }
            Record::Tsd { model, mean_tsd, .. } => {
                let _ = writeln!(other, "{model}: mean TSD {mean_tsd:.4}");
            }
            _ => {}
        }
    }
    if !evals.is_empty() {
        let _ = writeln!(s, "\n{:<16} {:>6} {:<6} {:<6} {:>8}   {:<6} {:>6}", "model", "domain", "split", "", "acc", "ci95", "tasks");
        s.push_str(&evals);
    }
    if !cells.is_empty() {
        let _ = writeln!(s, "\n{:<16} {:>8}   {:<6} {:>8}", "cell", "unseen", "ci95", "val");
        s.push_str(&cells);
    }
    if !other.is_empty() {
        s.push('\n');
        s.push_str(&other);
    }
    s
}

pub fn split_name(s: Split) -> &'static str {
    match s {
        Split::Base => "base",
        Split::Valid => "valid",
        Split::Novel => "novel",
    }
}

pub fn parse_split(s: &str) -> Option<Split> {
    [Split::Base, Split::Valid, Split::Novel].into_iter().find(|x| split_name(*x) == s)
}

/// Output directory: explicit flag, then the config, then
/// `$FSBAN_OUT_ROOT/<name>` (default root `runs`).
pub fn resolve_out(flag: Option<&Path>, cfg: &ExperimentConfig, name: &str) -> PathBuf {
    if let Some(p) = flag {
        return p.to_path_buf();
    }
    if let Some(p) = &cfg.out {
        return PathBuf::from(p);
    }
    let root = std::env::var_os(OUT_ROOT_ENV).map_or_else(|| PathBuf::from("runs"), PathBuf::from);
    root.join(name)
}

/// A hidden sibling directory that becomes the output directory on
/// [`Staging::commit`] and is deleted if dropped before that.
pub struct Staging {
    target: PathBuf,
    dir: PathBuf,
    committed: bool,
}

impl Staging {
    pub fn new(target: &Path) -> CliResult<Self> {
        if target.exists() {
            let empty = target.is_dir() && std::fs::read_dir(target)?.next().is_none();
            if !empty {
                return Err(CliError::usage(format!("output {} already exists", target.display())));
            }
        }
        let parent = match target.parent() {
            Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
            _ => PathBuf::from("."),
        };
        std::fs::create_dir_all(&parent)?;
        let name = target
            .file_name()
            .ok_or_else(|| CliError::usage(format!("bad output path {}", target.display())))?
            .to_string_lossy();
        let dir = parent.join(format!(".{name}.partial-{}", std::process::id()));
        if dir.exists() {
            std::fs::remove_dir_all(&dir)?;
        }
        std::fs::create_dir_all(&dir)?;
        Ok(Staging { target: target.to_path_buf(), dir, committed: false })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn write(&self, rel: &str, bytes: impl AsRef<[u8]>) -> CliResult<()> {
        let p = self.dir.join(rel);
        if let Some(parent) = p.parent() {
            std::fs::create_dir_all(parent)?;
        }
        std::fs::write(p, bytes)?;
        Ok(())
    }

    pub fn commit(mut self) -> CliResult<PathBuf> {
        if self.target.is_dir() {
            std::fs::remove_dir(&self.target)?;
        }
        std::fs::rename(&self.dir, &self.target)?;
        self.committed = true;
        Ok(self.target.clone())
    }
}

impl Drop for Staging {
    fn drop(&mut self) {
        if !self.committed {
            let _ = std::fs::remove_dir_all(&self.dir);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn header() -> Record {
        Record::Header {
            schema_version: SCHEMA_VERSION,
            build: build_id(),
            seed: 3,
            invocation: Invocation {
                command: "train".into(),
                universe_sha256: "ab".into(),
                teacher: None,
                checkpoint: None,
                domain: None,
                split: None,
            },
            config: ExperimentConfig::default(),
        }
    }

    #[test]
    fn records_round_trip_through_jsonl() {
        let recs = vec![
            header(),
            Record::Eval { model: "student".into(), domain: 0, split: Split::Novel, unseen: true, mean_acc: 61.25, ci95: 0.1 + 0.2, n_tasks: 7 },
            Record::Tau { series: vec![4.0, 3.999_999_999_999_999_6] },
        ];
        let text = to_jsonl(&recs).unwrap();
        assert_eq!(parse_results(&text).unwrap(), recs);
        assert!(summary(&recs).contains("student"));
    }

    #[test]
    fn schema_version_and_header_are_checked() {
        let mut text = to_jsonl(&[header()]).unwrap();
        text = text.replace("\"schema_version\":1", "\"schema_version\":99");
        assert!(parse_results(&text).is_err());
        assert!(parse_results(&to_jsonl(&[Record::Tau { series: vec![] }]).unwrap()).is_err());
    }

    #[test]
    fn staging_is_removed_unless_committed() {
        let root = tempfile::tempdir().unwrap();
        let target = root.path().join("run");
        let s = Staging::new(&target).unwrap();
        s.write("a/b.txt", "x").unwrap();
        let tmp = s.dir().to_path_buf();
        drop(s);
        assert!(!tmp.exists() && !target.exists());
        let s = Staging::new(&target).unwrap();
        s.write("f", "y").unwrap();
        s.commit().unwrap();
        assert_eq!(std::fs::read_to_string(target.join("f")).unwrap(), "y");
        assert!(matches!(Staging::new(&target), Err(CliError::Usage(_))));
    }

    #[test]
    fn csv_has_header_and_rows() {
        assert_eq!(csv(&[(1.0, 0.5, "tau".into())]), "x,y,series\n1,0.5,tau\n");
    }
}

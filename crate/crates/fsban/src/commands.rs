//! The pipelines behind each subcommand. Path handling lives in the `*_cmd`
//! entry points; the `run_*` functions work on in-memory inputs so that
//! `reproduce` can replay them.

use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::Instant;

use fsban_core::analysis::{
    curve_area, evaluate, lda_project, lr_acc, noise_robustness_sweep, separation_report, tsd, EvalSpec,
};
use fsban_core::data::{generate_universe, Split, Universe};
use fsban_core::losses::softened_softmax_rows;
use fsban_core::model::ModelParams;
use fsban_core::rng;
use fsban_core::train::{run_experiment_with, Components, Mode, RunRecord, Stage, Teachers};
use fsban_core::Tensor;

use crate::config::ExperimentConfig;
use crate::error::{CliError, CliResult};
use crate::formats::{checkpoint_bytes, load_checkpoint, load_universe, sha256_hex, universe_bytes};
use crate::results::{
    build_id, csv, parse_results, summary, to_jsonl, FileRef, Invocation, Record, Staging, RESULTS_FILE, SCHEMA_VERSION,
    SUMMARY_FILE, TIMING_FILE,
};

pub const ABLATION_FILE: &str = "ablation.jsonl";

/// The universe a command works on and the checksum of its file bytes.
pub struct LoadedUniverse {
    pub universe: Universe,
    pub sha256: String,
}

impl LoadedUniverse {
    /// Loads `path`, or generates from the config when no file is given.
    /// A loaded universe replaces the config's `[universe]` section so the
    /// echoed config regenerates it.
    pub fn obtain(cfg: &mut ExperimentConfig, path: Option<&Path>) -> CliResult<Self> {
        let universe = match path {
            Some(p) => {
                let u = load_universe(p)?;
                cfg.universe = u.config.clone();
                u
            }
            None => generate_universe(&cfg.universe).map_err(CliError::config)?,
        };
        let sha256 = sha256_hex(&universe_bytes(&universe)?);
        Ok(LoadedUniverse { universe, sha256 })
    }
}

fn header(cfg: &ExperimentConfig, invocation: Invocation) -> Record {
    Record::Header {
        schema_version: SCHEMA_VERSION,
        build: build_id(),
        seed: cfg.seed,
        invocation,
        config: cfg.clone(),
    }
}

fn invocation(command: &str, u: &LoadedUniverse) -> Invocation {
    Invocation {
        command: command.into(),
        universe_sha256: u.sha256.clone(),
        teacher: None,
        checkpoint: None,
        domain: None,
        split: None,
    }
}

fn write_timing(staging: &Staging, command: &str, start: Instant) -> CliResult<()> {
    let t = serde_json::json!({ "command": command, "wall_seconds": start.elapsed().as_secs_f64() });
    staging.write(TIMING_FILE, serde_json::to_vec_pretty(&t)?)
}

fn finish(staging: &Staging, file: &str, records: &[Record]) -> CliResult<()> {
    staging.write(file, to_jsonl(records)?)?;
    staging.write(SUMMARY_FILE, summary(records))
}

/// Evaluation tasks depend only on the seed, domain and split, so every
/// model of a run is scored on the same tasks.
fn eval_stream(seed: u64, domain: usize, split: Split) -> rng::Stream {
    rng::stream(seed, &format!("eval/d{domain}/{}", crate::results::split_name(split)))
}

fn eval_record(
    cfg: &ExperimentConfig,
    u: &Universe,
    model: &ModelParams,
    name: &str,
    domain: usize,
    split: Split,
) -> CliResult<Record> {
    let r = evaluate(model, u, domain, split, &cfg.eval, &mut eval_stream(cfg.seed, domain, split))?;
    Ok(Record::Eval {
        model: name.into(),
        domain,
        split,
        unseen: domain == cfg.train.held_out_domain,
        mean_acc: r.mean_acc,
        ci95: r.ci95,
        n_tasks: r.n_tasks,
    })
}

pub fn gen_universe_cmd(cfg: &ExperimentConfig, out: &Path) -> CliResult<String> {
    let u = generate_universe(&cfg.universe).map_err(CliError::config)?;
    let bytes = universe_bytes(&u)?;
    let name = out.file_name().ok_or_else(|| CliError::usage(format!("bad output path {}", out.display())))?;
    let parent = out.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    std::fs::create_dir_all(parent)?;
    let tmp = parent.join(format!(".{}.partial-{}", name.to_string_lossy(), std::process::id()));
    let written = std::fs::write(&tmp, &bytes).and_then(|_| std::fs::rename(&tmp, out));
    if let Err(e) = written {
        let _ = std::fs::remove_file(&tmp);
        return Err(e.into());
    }
    Ok(sha256_hex(&bytes))
}

/// A gen-0 teacher loaded from a checkpoint instead of trained.
pub struct LoadedTeacher {
    pub file: FileRef,
    pub params: ModelParams,
}

impl LoadedTeacher {
    pub fn load(path: &Path) -> CliResult<Self> {
        let (_, params, sha256) = load_checkpoint(path)?;
        Ok(LoadedTeacher {
            file: FileRef { path: path.display().to_string(), sha256 },
            params,
        })
    }
}

pub struct TrainOptions<'a> {
    pub universe: Option<&'a Path>,
    pub teacher: Option<&'a Path>,
    pub out: &'a Path,
    pub dry_run: bool,
}

/// `train`. Returns the output directory, or `None` for a dry run.
pub fn train_cmd(cfg: ExperimentConfig, opts: &TrainOptions) -> CliResult<Option<PathBuf>> {
    let mut cfg = cfg;
    cfg.validate()?;
    if opts.teacher.is_some() && cfg.mode != Mode::Ban {
        return Err(CliError::usage("--teacher only applies to --mode ban"));
    }
    let teacher = opts.teacher.map(LoadedTeacher::load).transpose()?;
    if let Some(t) = &teacher {
        if t.params.config != cfg.train.model {
            return Err(CliError::config("teacher checkpoint architecture differs from train.model"));
        }
    }
    if opts.dry_run {
        if let Some(p) = opts.universe {
            let u = load_universe(p)?;
            cfg.universe = u.config;
            cfg.validate()?;
        }
        return Ok(None);
    }
    let u = LoadedUniverse::obtain(&mut cfg, opts.universe)?;
    cfg.validate()?;
    let start = Instant::now();
    let staging = Staging::new(opts.out)?;
    let records = run_train(&cfg, &u, teacher.as_ref(), &staging)?;
    finish(&staging, RESULTS_FILE, &records)?;
    write_timing(&staging, "train", start)?;
    staging.commit().map(Some)
}

fn stub_stage(name: &str, params: ModelParams) -> Stage {
    Stage {
        name: name.into(),
        epochs: Vec::new(),
        best_epoch: None,
        best_val_acc: None,
        params,
        training_classes: Vec::new(),
    }
}

/// Trains per `cfg` into `staging` and returns the records.
pub fn run_train(
    cfg: &ExperimentConfig,
    u: &LoadedUniverse,
    teacher: Option<&LoadedTeacher>,
    staging: &Staging,
) -> CliResult<Vec<Record>> {
    let teachers = match teacher {
        Some(t) => {
            let mut ts = Teachers::train_selected(&u.universe, &cfg.train, false, false)?;
            ts.global = Some(stub_stage("gen0", t.params.clone()));
            ts
        }
        None => Teachers::train(&u.universe, &cfg.train)?,
    };
    let record = run_experiment_with(&u.universe, &cfg.train, &teachers)?;
    let mut inv = invocation("train", u);
    inv.teacher = teacher.map(|t| t.file.clone());
    write_run(cfg, &u.universe, inv, &record, staging)
}

/// Checkpoints, plot data and records of a finished run.
pub fn write_run(
    cfg: &ExperimentConfig,
    u: &Universe,
    inv: Invocation,
    run: &RunRecord,
    staging: &Staging,
) -> CliResult<Vec<Record>> {
    let mut records = vec![header(cfg, inv)];
    let (mut val, mut loss, mut tsd_rows) = (Vec::new(), Vec::new(), Vec::new());
    for stage in &run.stages {
        for e in &stage.epochs {
            records.push(Record::Epoch {
                stage: stage.name.clone(),
                epoch: e.epoch,
                domain: e.domain,
                train_loss: e.train_loss,
                val_acc: e.val_acc,
                teacher_tsd: e.teacher_tsd,
                tau: e.tau,
            });
            val.push((e.epoch as f64, e.val_acc, stage.name.clone()));
            loss.push((e.epoch as f64, e.train_loss, stage.name.clone()));
            if let Some(t) = e.teacher_tsd {
                tsd_rows.push((e.epoch as f64, t, stage.name.clone()));
            }
        }
        let file = format!("{}.ckpt", stage.name);
        let bytes = checkpoint_bytes(&stage.params, &stage.name)?;
        records.push(Record::Stage {
            stage: stage.name.clone(),
            best_epoch: stage.best_epoch,
            best_val_acc: stage.best_val_acc,
            sha256: sha256_hex(&bytes),
            checkpoint: file.clone(),
            n_training_classes: stage.training_classes.len(),
        });
        staging.write(&file, bytes)?;
    }
    for (name, params) in &run.tuned_teachers {
        let stage = format!("{name}-tuned");
        let file = format!("{stage}.ckpt");
        let bytes = checkpoint_bytes(params, &stage)?;
        records.push(Record::Stage {
            stage,
            best_epoch: None,
            best_val_acc: None,
            sha256: sha256_hex(&bytes),
            checkpoint: file.clone(),
            n_training_classes: 0,
        });
        staging.write(&file, bytes)?;
    }
    let comps = cfg.train.effective_components();
    let fsban = matches!(run.mode, Mode::FsBan | Mode::FsBanLite);
    if fsban && comps.mct {
        records.push(Record::Tau { series: run.tau_trajectory.clone() });
        let rows: Vec<_> = run.tau_trajectory.iter().enumerate().map(|(i, &t)| (i as f64, t, String::from("tau"))).collect();
        staging.write("plots/tau.csv", csv(&rows))?;
    }
    if fsban && comps.mm {
        records.push(Record::Selection { counts: run.teacher_selection.clone() });
    }
    for stage in &run.stages {
        for d in u.domain_ids() {
            records.push(eval_record(cfg, u, &stage.params, &stage.name, d, Split::Novel)?);
        }
    }
    let student = run.student_stage();
    let held = run.held_out_domain;
    let a = &cfg.analysis;
    let mut r = rng::stream(cfg.seed, "separation");
    let sep = separation_report(&student.params, u, held, Split::Novel, cfg.eval.n_way, a.separation_per_class, a.separation_tasks, &mut r)?;
    records.push(Record::Separation {
        model: student.name.clone(),
        domain: held,
        split: Split::Novel,
        r_fc: sep.r_fc,
        r_hv: sep.r_hv,
        n_tasks: sep.n_tasks,
    });
    staging.write("plots/val_acc.csv", csv(&val))?;
    staging.write("plots/train_loss.csv", csv(&loss))?;
    if !tsd_rows.is_empty() {
        staging.write("plots/teacher_tsd.csv", csv(&tsd_rows))?;
    }
    Ok(records)
}

fn check_domain(u: &Universe, domain: usize) -> CliResult<()> {
    if domain >= u.domains.len() {
        return Err(CliError::usage(format!("domain {domain} does not exist (universe has {})", u.domains.len())));
    }
    Ok(())
}

fn check_model(u: &Universe, model: &ModelParams) -> CliResult<()> {
    if model.config.input_dim != u.config.dim {
        return Err(CliError::config(format!(
            "checkpoint expects {}-dimensional inputs, universe has {}",
            model.config.input_dim, u.config.dim
        )));
    }
    Ok(())
}

pub struct ModelInputs<'a> {
    pub checkpoint: &'a Path,
    pub universe: Option<&'a Path>,
    pub domain: Option<usize>,
    pub split: Split,
    pub out: &'a Path,
}

/// A checkpoint under evaluation.
pub struct LoadedModel {
    pub file: FileRef,
    pub stage: String,
    pub params: ModelParams,
}

impl LoadedModel {
    pub fn load(path: &Path) -> CliResult<Self> {
        let (h, params, sha256) = load_checkpoint(path)?;
        Ok(LoadedModel {
            file: FileRef { path: path.display().to_string(), sha256 },
            stage: h.stage,
            params,
        })
    }
}

fn model_command(
    command: &str,
    cfg: ExperimentConfig,
    inputs: &ModelInputs,
    run: fn(&ExperimentConfig, &LoadedUniverse, &LoadedModel, Option<usize>, Split, &Staging) -> CliResult<Vec<Record>>,
) -> CliResult<PathBuf> {
    let mut cfg = cfg;
    cfg.validate()?;
    let model = LoadedModel::load(inputs.checkpoint)?;
    let u = LoadedUniverse::obtain(&mut cfg, inputs.universe)?;
    cfg.validate()?;
    let start = Instant::now();
    let staging = Staging::new(inputs.out)?;
    let records = run(&cfg, &u, &model, inputs.domain, inputs.split, &staging)?;
    finish(&staging, RESULTS_FILE, &records)?;
    write_timing(&staging, command, start)?;
    staging.commit()
}

pub fn evaluate_cmd(cfg: ExperimentConfig, inputs: &ModelInputs) -> CliResult<PathBuf> {
    model_command("evaluate", cfg, inputs, run_evaluate)
}

pub fn analyze_cmd(cfg: ExperimentConfig, inputs: &ModelInputs) -> CliResult<PathBuf> {
    model_command("analyze", cfg, inputs, run_analyze)
}

/// Scores the model on `split` of one domain, or of every domain.
pub fn run_evaluate(
    cfg: &ExperimentConfig,
    u: &LoadedUniverse,
    model: &LoadedModel,
    domain: Option<usize>,
    split: Split,
    _staging: &Staging,
) -> CliResult<Vec<Record>> {
    check_model(&u.universe, &model.params)?;
    let domains = match domain {
        Some(d) => {
            check_domain(&u.universe, d)?;
            vec![d]
        }
        None => u.universe.domain_ids(),
    };
    let mut inv = invocation("evaluate", u);
    inv.checkpoint = Some(model.file.clone());
    inv.domain = domain;
    inv.split = Some(split);
    let mut records = vec![header(cfg, inv)];
    for d in domains {
        records.push(eval_record(cfg, &u.universe, &model.params, &model.stage, d, split)?);
    }
    Ok(records)
}

/// Class-separation metrics, linear probes, an LDA projection, the noise
/// sweep and prediction sharpness of one model on one domain and split.
pub fn run_analyze(
    cfg: &ExperimentConfig,
    u: &LoadedUniverse,
    model: &LoadedModel,
    domain: Option<usize>,
    split: Split,
    staging: &Staging,
) -> CliResult<Vec<Record>> {
    let uv = &u.universe;
    check_model(uv, &model.params)?;
    let domain = domain.unwrap_or(cfg.train.held_out_domain);
    check_domain(uv, domain)?;
    let (a, m, name) = (&cfg.analysis, &model.params, model.stage.clone());
    let mut inv = invocation("analyze", u);
    inv.checkpoint = Some(model.file.clone());
    inv.domain = Some(domain);
    inv.split = Some(split);
    let mut records = vec![header(cfg, inv)];

    let mut r = rng::stream(cfg.seed, "separation");
    let sep = separation_report(m, uv, domain, split, cfg.eval.n_way, a.separation_per_class, a.separation_tasks, &mut r)?;
    records.push(Record::Separation { model: name.clone(), domain, split, r_fc: sep.r_fc, r_hv: sep.r_hv, n_tasks: sep.n_tasks });

    let ep = uv.sample_episode(domain, split, cfg.eval.n_way, 1, a.lda_per_class, &mut rng::stream(cfg.seed, "lda"))?;
    let feats = m.encode(&ep.query_x)?;
    let k = 2.min(cfg.eval.n_way - 1).min(feats.cols());
    let (_, proj) = lda_project(&feats, &ep.query_y, k)?;
    for (space, x) in [("input", &ep.query_x), ("features", &feats), ("lda", &proj)] {
        records.push(Record::Probe { model: name.clone(), domain, split, space: space.into(), lr_acc: lr_acc(x, &ep.query_y)? });
    }
    let rows: Vec<_> = (0..proj.rows())
        .map(|i| {
            let y = if k > 1 { proj.at(i, 1) } else { 0.0 };
            (proj.at(i, 0), y, format!("class{}", ep.class_map[ep.query_y[i]]))
        })
        .collect();
    staging.write("plots/lda.csv", csv(&rows))?;

    let noise_spec = EvalSpec { ..cfg.eval };
    let curve = noise_robustness_sweep(m, uv, domain, split, &a.noise_stds, a.noise_trials, &noise_spec, cfg.seed, cfg.seed)?;
    let rows: Vec<_> = curve.iter().map(|&(s, acc)| (s, acc, name.clone())).collect();
    staging.write("plots/noise.csv", csv(&rows))?;
    records.push(Record::Noise {
        model: name.clone(),
        domain,
        split,
        stds: curve.iter().map(|p| p.0).collect(),
        accuracies: curve.iter().map(|p| p.1).collect(),
        area: curve_area(&curve),
    });

    let mut r = eval_stream(cfg.seed, domain, split);
    let n = cfg.eval.n_tasks;
    let m_top = cfg.train.tsd_m.min(cfg.eval.n_way).max(2);
    let mut total = 0.0;
    for _ in 0..n {
        let ep = uv.sample_episode(domain, split, cfg.eval.n_way, cfg.eval.n_shot, cfg.eval.n_query, &mut r)?;
        let probs: Tensor = softened_softmax_rows(&m.logits(&ep)?, 1.0)?;
        total += tsd(&probs, m_top)?;
    }
    records.push(Record::Tsd { model: name, domain, split, mean_tsd: total / n as f64, n_tasks: n });
    Ok(records)
}

pub struct AblateOptions<'a> {
    pub universe: Option<&'a Path>,
    pub out: &'a Path,
    pub parallel: usize,
}

pub fn ablate_cmd(cfg: ExperimentConfig, opts: &AblateOptions) -> CliResult<PathBuf> {
    let mut cfg = cfg.with_mode(Mode::FsBan);
    cfg.validate()?;
    if opts.parallel == 0 {
        return Err(CliError::usage("--parallel must be at least 1"));
    }
    let u = LoadedUniverse::obtain(&mut cfg, opts.universe)?;
    cfg.validate()?;
    let start = Instant::now();
    let staging = Staging::new(opts.out)?;
    let records = run_ablate(&cfg, &u, opts.parallel, &staging)?;
    finish(&staging, ABLATION_FILE, &records)?;
    write_timing(&staging, "ablate", start)?;
    staging.commit()
}

pub fn cell_dir(c: &Components) -> String {
    format!("cell-{}", c.label())
}

/// Runs all eight component subsets against one shared set of teachers.
/// Each cell is a complete `train` output in its own subdirectory.
pub fn run_ablate(cfg: &ExperimentConfig, u: &LoadedUniverse, parallel: usize, staging: &Staging) -> CliResult<Vec<Record>> {
    let teachers = Teachers::train_selected(&u.universe, &cfg.train, true, true)?;
    let cells = Components::all_cells();
    let next = AtomicUsize::new(0);
    let results: Mutex<Vec<Option<CliResult<Record>>>> = Mutex::new((0..cells.len()).map(|_| None).collect());
    std::thread::scope(|s| {
        for _ in 0..parallel.min(cells.len()) {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                let Some(&comps) = cells.get(i) else { break };
                let out = run_cell(cfg, u, &teachers, comps, staging);
                results.lock().expect("no panics while holding the lock")[i] = Some(out);
            });
        }
    });
    let mut records = vec![header(cfg, invocation("ablate", u))];
    for r in results.into_inner().expect("threads joined") {
        records.push(r.expect("every cell ran")?);
    }
    Ok(records)
}

fn run_cell(cfg: &ExperimentConfig, u: &LoadedUniverse, teachers: &Teachers, comps: Components, staging: &Staging) -> CliResult<Record> {
    let mut cell_cfg = cfg.clone();
    cell_cfg.train.components = comps;
    cell_cfg.out = None;
    let dir = cell_dir(&comps);
    let run = run_experiment_with(&u.universe, &cell_cfg.train, teachers).map_err(|e| CliError::from(e).context(&dir))?;
    let sub = Staging::new(&staging.dir().join(&dir))?;
    let records = write_run(&cell_cfg, &u.universe, invocation("train", u), &run, &sub)?;
    finish(&sub, RESULTS_FILE, &records)?;
    sub.commit()?;
    let held = cell_cfg.train.held_out_domain;
    let (acc, ci) = records
        .iter()
        .find_map(|r| match r {
            Record::Eval { model, domain, mean_acc, ci95, .. } if model == "student" && *domain == held => Some((*mean_acc, *ci95)),
            _ => None,
        })
        .ok_or_else(|| CliError::runtime("cell produced no unseen-domain evaluation"))?;
    Ok(Record::Cell {
        label: comps.label(),
        directory: dir,
        unseen_acc: acc,
        ci95: ci,
        best_val_acc: run.student_stage().best_val_acc,
    })
}

/// Outcome of replaying a results file.
#[derive(Debug)]
pub struct Reproduction {
    pub original: PathBuf,
    pub replay: PathBuf,
    /// Relative paths whose bytes differ, or that exist on one side only.
    pub differences: Vec<String>,
}

impl Reproduction {
    pub fn identical(&self) -> bool {
        self.differences.is_empty()
    }
}

fn results_in(path: &Path) -> CliResult<(PathBuf, PathBuf)> {
    if path.is_dir() {
        for f in [RESULTS_FILE, ABLATION_FILE] {
            if path.join(f).is_file() {
                return Ok((path.to_path_buf(), path.join(f)));
            }
        }
        return Err(CliError::usage(format!("{} holds no results file", path.display())));
    }
    if !path.is_file() {
        return Err(CliError::usage(format!("{} does not exist", path.display())));
    }
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new(".")).to_path_buf();
    Ok((dir, path.to_path_buf()))
}

fn load_pinned<T>(r: &FileRef, load: fn(&Path) -> CliResult<T>, sha: fn(&T) -> &str) -> CliResult<T> {
    let v = load(Path::new(&r.path))?;
    if sha(&v) != r.sha256 {
        return Err(CliError::runtime(format!("{} changed since the original run (checksum differs)", r.path)));
    }
    Ok(v)
}

/// Re-runs the command recorded in a results file from its embedded config
/// into `out` and compares every output file byte for byte (the timing
/// sidecar excepted).
pub fn reproduce_cmd(results: &Path, out: &Path) -> CliResult<Reproduction> {
    let (original, file) = results_in(results)?;
    let text = std::fs::read_to_string(&file)?;
    let records = parse_results(&text)?;
    let Some(Record::Header { config, invocation: inv, .. }) = records.into_iter().next() else {
        unreachable!("parse_results checks the header")
    };
    let mut cfg = config.resolved();
    cfg.validate()?;
    let u = LoadedUniverse::obtain(&mut cfg, None)?;
    if u.sha256 != inv.universe_sha256 {
        return Err(CliError::runtime("the embedded universe config regenerates a different universe"));
    }
    let start = Instant::now();
    let staging = Staging::new(out)?;
    let (name, records) = match inv.command.as_str() {
        "train" => {
            let teacher = inv.teacher.as_ref().map(|t| load_pinned(t, LoadedTeacher::load, |x| &x.file.sha256)).transpose()?;
            (RESULTS_FILE, run_train(&cfg, &u, teacher.as_ref(), &staging)?)
        }
        "evaluate" | "analyze" => {
            let r = inv.checkpoint.as_ref().ok_or_else(|| CliError::runtime("results lack the checkpoint reference"))?;
            let model = load_pinned(r, LoadedModel::load, |x| &x.file.sha256)?;
            let split = inv.split.unwrap_or(Split::Novel);
            let run = if inv.command == "evaluate" { run_evaluate } else { run_analyze };
            (RESULTS_FILE, run(&cfg, &u, &model, inv.domain, split, &staging)?)
        }
        "ablate" => (ABLATION_FILE, run_ablate(&cfg, &u, 1, &staging)?),
        other => return Err(CliError::runtime(format!("unknown command `{other}` in results header"))),
    };
    finish(&staging, name, &records)?;
    write_timing(&staging, "reproduce", start)?;
    let replay = staging.commit()?;
    let differences = compare_trees(&original, &replay)?;
    Ok(Reproduction { original, replay, differences })
}

fn list_files(root: &Path, rel: &Path, out: &mut Vec<PathBuf>) -> CliResult<()> {
    for entry in std::fs::read_dir(root.join(rel))? {
        let entry = entry?;
        let name = entry.file_name();
        if name.to_string_lossy().starts_with('.') {
            continue;
        }
        let r = rel.join(&name);
        if entry.file_type()?.is_dir() {
            list_files(root, &r, out)?;
        } else if name != TIMING_FILE {
            out.push(r);
        }
    }
    Ok(())
}

/// Relative paths under `a` and `b` whose contents differ.
pub fn compare_trees(a: &Path, b: &Path) -> CliResult<Vec<String>> {
    let (mut fa, mut fb) = (Vec::new(), Vec::new());
    list_files(a, Path::new(""), &mut fa)?;
    list_files(b, Path::new(""), &mut fb)?;
    fa.sort();
    fb.sort();
    let mut diff = Vec::new();
    for f in &fa {
        if !fb.contains(f) || std::fs::read(a.join(f))? != std::fs::read(b.join(f))? {
            diff.push(f.display().to_string());
        }
    }
    diff.extend(fb.iter().filter(|f| !fa.contains(f)).map(|f| f.display().to_string()));
    Ok(diff)
}

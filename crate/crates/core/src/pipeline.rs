//! The K-stage run: training, evaluation, per-stage artifacts and resume.

use std::collections::{BTreeMap, BTreeSet};
use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use log::{info, warn};
use serde::{Deserialize, Serialize};

use crate::arguments::{train_argument_task, ArgumentMemory, ArgumentModel, ArgumentStageData};
use crate::config::{RunConfig, Strategy};
use crate::corpus::{generate_synthetic, load_corpus, partition_tasks, EventSchema, TaskStream, TokenizedSentence};
use crate::detection::{long_tail_types, train_task, ContinualState, DetectionModel, StageData, StageLog};
use crate::encoder::Vocab;
use crate::error::{Error, Result};
use crate::eval::{
    aggregate, argument_f1_where, bwt, detection_f1_where, long_tail_slice, F1Matrix, PredictedSentence,
    RunReport, StageReport,
};

const DONE_MARKER: &str = "complete";

/// Builds the task stream described by `cfg`.
pub fn build_stream(cfg: &RunConfig) -> Result<TaskStream> {
    let (schema, sentences) = match &cfg.corpus {
        Some(path) => {
            let schema = cfg.schema.as_deref().map(EventSchema::load).transpose()?;
            load_corpus(path, schema.as_ref())?
        }
        None => generate_synthetic(&cfg.synthetic_config())?,
    };
    partition_tasks(&schema, &sentences, cfg.k, cfg.permutation_seed)
}

/// Vocabulary of every training view in the stream.
pub fn stream_vocab(stream: &TaskStream) -> Vocab {
    Vocab::build(
        stream
            .tasks
            .iter()
            .flat_map(|t| &t.train)
            .flat_map(|s| s.tokens.iter().map(String::as_str)),
    )
}

/// Gold trigger count of each type seen by `stage`, taken from the training
/// view that introduced it.
pub fn stream_type_counts(stream: &TaskStream, stage: usize) -> BTreeMap<String, usize> {
    let mut counts = BTreeMap::new();
    for task in &stream.tasks[..stage.min(stream.k())] {
        for t in &task.event_types {
            let n = task
                .train
                .iter()
                .flat_map(|s| &s.events)
                .filter(|e| &e.event_type == t)
                .count();
            counts.insert(t.clone(), n);
        }
    }
    counts
}

/// Everything persisted for a finished stage besides the model weights.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct StageRecord {
    report: StageReport,
    f1_row: Vec<f64>,
    long_tail_types: Vec<String>,
    state: ContinualState,
}

#[derive(Clone, Debug)]
pub struct RunOutcome {
    pub dir: PathBuf,
    pub report: RunReport,
}

fn stage_dir(root: &Path, stage: usize) -> PathBuf {
    root.join(format!("stage_{stage}"))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    serde_json::to_writer_pretty(BufWriter::new(file), value)?;
    Ok(())
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_reader(BufReader::new(file))?)
}

fn write_jsonl<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for r in rows {
        serde_json::to_writer(&mut w, r)?;
        writeln!(w).map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

fn write_stage_log(dir: &Path, log: &StageLog) -> Result<()> {
    #[derive(Serialize)]
    struct Row<'a> {
        source: &'a str,
        #[serde(flatten)]
        label: &'a crate::detection::PseudoLabel,
    }
    let rows: Vec<Row> = log
        .pseudo_labels
        .iter()
        .map(|l| Row {
            source: "train",
            label: l,
        })
        .chain(log.memory_relabels.iter().map(|l| Row {
            source: "memory",
            label: l,
        }))
        .collect();
    write_jsonl(&dir.join("pseudo_labels.jsonl"), &rows)?;
    if let Some(p) = &log.prototypes {
        p.save(&dir.join("prototypes.json"))?;
    }
    let path = dir.join("curve.csv");
    let mut w = csv::Writer::from_path(&path)?;
    w.write_record(["stage", "phase", "epoch", "loss", "cls", "afd", "spd", "dev_f1"])?;
    for r in &log.curve {
        w.write_record([
            r.stage.to_string(),
            r.phase.clone(),
            r.epoch.to_string(),
            format!("{:.6}", r.loss),
            format!("{:.6}", r.cls),
            format!("{:.6}", r.afd),
            format!("{:.6}", r.spd),
            r.dev_f1.map(|f| format!("{f:.6}")).unwrap_or_default(),
        ])?;
    }
    w.flush().map_err(|e| Error::io(&path, e))
}

fn predict(
    model: &DetectionModel,
    args: Option<&ArgumentModel>,
    sentences: &[TokenizedSentence],
) -> Result<Vec<PredictedSentence>> {
    let mut preds = model.predict_all(sentences)?;
    if let Some(a) = args {
        for (p, s) in preds.iter_mut().zip(sentences) {
            p.events = a.extract_arguments(&s.tokens, &p.events)?;
        }
    }
    Ok(preds)
}

/// Detection score of `preds` on task `task`'s test view, restricted to its types.
fn task_f1(stream: &TaskStream, task: usize, preds: &[PredictedSentence]) -> Result<f64> {
    let t = stream.task(task)?;
    let ids: BTreeSet<&str> = t.test.iter().map(|s| s.sentence_id.as_str()).collect();
    let mine: Vec<PredictedSentence> = preds
        .iter()
        .filter(|p| ids.contains(p.sentence_id.as_str()))
        .cloned()
        .collect();
    Ok(detection_f1_where(&mine, &t.test, |e| t.has_type(e))?.f1)
}

fn check_resume_config(dir: &Path, cfg: &RunConfig) -> Result<()> {
    let path = dir.join("config.toml");
    if path.exists() {
        let mut previous = RunConfig::load(&path)?;
        previous.output_dir = cfg.output_dir.clone();
        if previous != *cfg {
            return Err(Error::Config(format!(
                "{} holds a run with a different configuration",
                dir.display()
            )));
        }
    }
    Ok(())
}

/// Executes all K stages, resuming from completed stages in the output
/// directory when present.
pub fn run(cfg: &RunConfig) -> Result<RunOutcome> {
    cfg.validate()?;
    let root = cfg.output_dir.clone();
    fs::create_dir_all(&root).map_err(|e| Error::io(&root, e))?;
    check_resume_config(&root, cfg)?;
    cfg.save(&root.join("config.toml"))?;

    let stream = build_stream(cfg)?;
    let k = stream.k();
    let vocab = stream_vocab(&stream);
    let det_cfg = cfg.detection_config();
    let arg_cfg = cfg.argument_config();
    let with_args = cfg.arguments && stream.has_arguments();
    let fresh_detection = || DetectionModel::new(cfg.encoder_config(), vocab.clone(), cfg.feature_dim, cfg.model_seed);
    let fresh_arguments = || ArgumentModel::new(cfg.encoder_config(), vocab.clone(), &arg_cfg);

    let mut model = fresh_detection()?;
    let mut state = ContinualState::new(det_cfg.memory_size);
    let mut arg_model = if with_args { Some(fresh_arguments()?) } else { None };
    let mut arg_memory = ArgumentMemory::new(arg_cfg.memory_size);
    let mut matrix = F1Matrix::new(k);
    let mut stages = Vec::with_capacity(k);
    let mut tail = Vec::new();

    for stage in 1..=k {
        let dir = stage_dir(&root, stage);
        if dir.join(DONE_MARKER).exists() {
            info!("stage {stage}: resuming from {}", dir.display());
            model = DetectionModel::load(&dir.join("detection.ckpt"))?;
            let record: StageRecord = read_json(&dir.join("stage.json"))?;
            state = record.state;
            if with_args {
                arg_model = Some(ArgumentModel::load(&dir.join("arguments.ckpt"))?);
                arg_memory = ArgumentMemory::load(&dir.join("argument_memory.json"))?;
            }
            for (j, v) in record.f1_row.iter().enumerate() {
                matrix.set(stage, j + 1, *v)?;
            }
            tail = record.long_tail_types;
            stages.push(record.report);
            continue;
        }
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        let started = Instant::now();
        let task = stream.task(stage)?;
        let seen = stream.seen_types(stage);
        let dev = stream.accumulated_dev(stage)?;

        // detection
        let log = match cfg.strategy {
            Strategy::Full => {
                let teacher = (stage > 1).then(|| model.clone());
                let data = StageData {
                    stage,
                    new_types: &task.event_types,
                    train: &task.train,
                    dev: &dev,
                };
                train_task(&mut model, teacher.as_ref(), &data, &mut state, &det_cfg)?
            }
            Strategy::FineTuning => {
                let data = StageData {
                    stage,
                    new_types: &task.event_types,
                    train: &task.train,
                    dev: &dev,
                };
                train_task(&mut model, None, &data, &mut state, &det_cfg)?
            }
            Strategy::JointTraining => {
                model = fresh_detection()?;
                state = ContinualState::new(0);
                let all = stream.accumulated_train_gold(stage)?;
                let data = StageData {
                    stage,
                    new_types: &seen,
                    train: &all,
                    dev: &dev,
                };
                train_task(&mut model, None, &data, &mut state, &det_cfg)?
            }
        };

        // arguments
        if with_args {
            let roles_of = |types: &[String]| -> Vec<(String, Vec<String>)> {
                types
                    .iter()
                    .map(|t| (t.clone(), stream.schema.roles(t).to_vec()))
                    .collect()
            };
            if cfg.strategy == Strategy::JointTraining {
                let mut fresh = fresh_arguments()?;
                arg_memory = ArgumentMemory::new(0);
                let all = stream.accumulated_train_gold(stage)?;
                let types = roles_of(&seen);
                let data = ArgumentStageData {
                    stage,
                    new_types: &types,
                    train: &all,
                };
                train_argument_task(&mut fresh, &data, &mut arg_memory, &arg_cfg)?;
                arg_model = Some(fresh);
            } else if let Some(a) = arg_model.as_mut() {
                let types = roles_of(&task.event_types);
                let data = ArgumentStageData {
                    stage,
                    new_types: &types,
                    train: &task.train,
                };
                train_argument_task(a, &data, &mut arg_memory, &arg_cfg)?;
            }
        }

        // evaluation on the accumulated test set
        let test = stream.accumulated_test(stage)?;
        let preds = predict(&model, arg_model.as_ref(), &test)?;
        let seen_set: BTreeSet<&str> = seen.iter().map(String::as_str).collect();
        let detection = detection_f1_where(&preds, &test, |t| seen_set.contains(t))?;
        let arguments = if with_args {
            Some(argument_f1_where(&preds, &test, |t| seen_set.contains(t))?)
        } else {
            None
        };
        let counts = stream_type_counts(&stream, stage);
        tail = long_tail_types(&counts);
        let tail_set: BTreeSet<String> = tail.iter().cloned().collect();
        let long_tail = long_tail_slice(&preds, &test, &tail_set)?;
        let mut f1_row = Vec::with_capacity(stage);
        for j in 1..=stage {
            let v = task_f1(&stream, j, &preds)?;
            matrix.set(stage, j, v)?;
            f1_row.push(v);
        }
        let report = StageReport {
            stage,
            detection,
            arguments,
            long_tail,
            type_counts: counts,
        };
        info!(
            "stage {stage}/{k} ({}): F1 {:.4} in {:.1}s",
            cfg.strategy,
            report.detection.f1,
            started.elapsed().as_secs_f64()
        );

        model.save(&dir.join("detection.ckpt"))?;
        state.memory.save(&dir.join("memory.json"))?;
        if let Some(a) = &arg_model {
            a.save(&dir.join("arguments.ckpt"))?;
            arg_memory.save(&dir.join("argument_memory.json"))?;
        }
        write_stage_log(&dir, &log)?;
        write_jsonl(&dir.join("predictions.jsonl"), &preds)?;
        write_json(
            &dir.join("stage.json"),
            &StageRecord {
                report: report.clone(),
                f1_row,
                long_tail_types: tail.clone(),
                state: state.clone(),
            },
        )?;
        let marker = dir.join(DONE_MARKER);
        fs::write(&marker, b"").map_err(|e| Error::io(&marker, e))?;
        stages.push(report);
    }

    let report = RunReport {
        stages,
        bwt: if k >= 2 { Some(bwt(&matrix)?) } else { None },
        f1_matrix: matrix,
        long_tail_types: tail,
    };
    report.write_json(&root.join("report.json"))?;
    report.write_csv(&root.join("report.csv"))?;
    Ok(RunOutcome { dir: root, report })
}

/// Headline numbers of one run, keyed by metric name.
pub fn run_metrics(report: &RunReport) -> BTreeMap<String, f64> {
    let mut m = BTreeMap::new();
    for s in &report.stages {
        m.insert(format!("stage_{}_f1", s.stage), s.detection.f1);
        if let Some(a) = &s.arguments {
            m.insert(format!("stage_{}_argument_f1", s.stage), a.f1);
        }
    }
    if let Some(f) = report.final_f1() {
        m.insert("final_f1".into(), f);
    }
    if let Some(a) = report.stages.last().and_then(|s| s.arguments) {
        m.insert("final_argument_f1".into(), a.f1);
    }
    if let Some(lt) = report.final_long_tail_f1() {
        m.insert("final_long_tail_f1".into(), lt);
    }
    if let Some(b) = report.bwt {
        m.insert("bwt".into(), b);
    }
    m
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricSummary {
    pub mean: f64,
    pub std: f64,
    pub values: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    pub permutation_seeds: Vec<u64>,
    pub metrics: BTreeMap<String, MetricSummary>,
    /// Permutation seed and error message of every failed run.
    pub failures: Vec<(u64, String)>,
}

/// Runs `permutations` permutation seeds starting at the configured one, each
/// in its own `perm_<seed>` directory, and aggregates their metrics.
pub fn sweep(cfg: &RunConfig, permutations: usize) -> Result<SweepReport> {
    if permutations == 0 {
        return Err(Error::InvalidArgument("sweep needs at least one permutation".into()));
    }
    cfg.validate()?;
    let root = cfg.output_dir.clone();
    fs::create_dir_all(&root).map_err(|e| Error::io(&root, e))?;
    let mut per_metric: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    let mut seeds = Vec::new();
    let mut failures = Vec::new();
    for p in 0..permutations as u64 {
        let seed = cfg.permutation_seed + p;
        let mut run_cfg = cfg.clone();
        run_cfg.permutation_seed = seed;
        run_cfg.output_dir = root.join(format!("perm_{seed}"));
        match run(&run_cfg) {
            Ok(outcome) => {
                seeds.push(seed);
                for (name, v) in run_metrics(&outcome.report) {
                    per_metric.entry(name).or_default().push(v);
                }
            }
            Err(e) => {
                warn!("permutation {seed} failed: {e}");
                failures.push((seed, e.to_string()));
            }
        }
    }
    let stats = aggregate(&per_metric);
    let metrics = per_metric
        .into_iter()
        .map(|(name, values)| {
            let (mean, std) = stats[&name];
            (name, MetricSummary { mean, std, values })
        })
        .collect();
    let report = SweepReport {
        permutation_seeds: seeds,
        metrics,
        failures,
    };
    write_json(&root.join("aggregate.json"), &report)?;
    let path = root.join("aggregate.csv");
    let mut w = csv::Writer::from_path(&path)?;
    w.write_record(["metric", "mean", "std", "runs"])?;
    for (name, s) in &report.metrics {
        w.write_record([
            name.clone(),
            format!("{:.6}", s.mean),
            format!("{:.6}", s.std),
            s.values.len().to_string(),
        ])?;
    }
    w.flush().map_err(|e| Error::io(&path, e))?;
    Ok(report)
}

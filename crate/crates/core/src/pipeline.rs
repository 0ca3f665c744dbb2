//! Experiment orchestration behind the command-line subcommands.
//!
//! Every command is a function of an [`ExperimentConfig`] (or a
//! [`SyntheticSpec`] for `synth`) and writes its outputs under the configured
//! directory. Given identical configs and seeds, outputs are byte-identical
//! regardless of the worker count.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::formats::{
    read_basis, read_head, read_labels, read_matrix, read_report, write_basis, write_head, write_labels,
    write_matrix, write_report, write_report_csv, TraceRecord, TraceReport,
};
use crate::head::{head_accuracy, train_head, ClassifierHead};
use crate::intervention::{control_alignment_report, random_basis, run_inlp, InlpConfig, InterventionTrace, Mode};
use crate::linalg::{AccumulatedBasis, RepresentationMatrix};
use crate::probe::{evaluate_probe, majority_baseline, train_probe, LabelVector, LossKind, ProbeConfig};
use crate::synth::{composite_from, generate, Feature, SyntheticSpec};

pub const MATRIX_FILE: &str = "representations.iprb";
pub const MANIFEST_FILE: &str = "manifest.txt";
pub const PROBE_BASIS_FILE: &str = "probe_basis.iprb";
pub const HEAD_FILE: &str = "head.iprbh";
pub const SUMMARY_FILE: &str = "summary.csv";

pub fn label_file_name(feature: Feature) -> String {
    format!("labels_{feature}.csv")
}

fn trace_stem(mode: Mode, seed: u64) -> String {
    format!("trace-{mode}-seed{seed}")
}

// ---------------------------------------------------------------------------
// Configuration
// ---------------------------------------------------------------------------

/// Where the downstream classifier head comes from.
#[derive(Debug, Clone, PartialEq)]
pub enum HeadSource {
    File(PathBuf),
    Linear,
    Tanh(usize),
}

#[derive(Debug, Clone, PartialEq)]
pub enum DataSource {
    Files {
        matrix: PathBuf,
        labels: BTreeMap<Feature, PathBuf>,
    },
    Synthetic(SyntheticSpec),
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub experiment_id: String,
    pub model_id: String,
    pub data: DataSource,
    /// Feature the probes target.
    pub feature: Feature,
    /// Label the classifier head predicts.
    pub downstream: Feature,
    pub modes: Vec<Mode>,
    pub head: HeadSource,
    pub head_training: ProbeConfig,
    /// Fraction of examples used for training.
    pub split: f64,
    pub split_seed: u64,
    pub repetitions: usize,
    pub seed: u64,
    pub inlp: InlpConfig,
    /// Direction counts swept by the `control` command.
    pub control_ks: Vec<usize>,
    pub out_dir: PathBuf,
    pub workers: usize,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            experiment_id: "experiment".into(),
            model_id: "synthetic".into(),
            data: DataSource::Synthetic(SyntheticSpec::default()),
            feature: Feature::Monotonicity,
            downstream: Feature::Entailment,
            modes: vec![Mode::Amnesic, Mode::Mnestic],
            head: HeadSource::Linear,
            head_training: ProbeConfig {
                epochs: 50,
                learning_rate: 0.1,
                loss: LossKind::Logistic,
                ..ProbeConfig::default()
            },
            split: 0.8,
            split_seed: 0x5eed,
            repetitions: 10,
            seed: 0,
            inlp: InlpConfig::default(),
            control_ks: (1..=10).collect(),
            out_dir: PathBuf::from("out"),
            workers: 1,
        }
    }
}

fn parse_value<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("bad value `{value}` for `{key}`")))
}

fn parse_list<T: std::str::FromStr>(key: &str, value: &str) -> Result<Vec<T>> {
    value
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| parse_value(key, s))
        .collect()
}

/// Parses `key = value` lines. Blank lines and `#` comments are ignored.
pub fn parse_key_values(text: &str) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`", n + 1)))?;
        out.push((key.trim().to_string(), value.trim().to_string()));
    }
    Ok(out)
}

fn apply_synth_key(spec: &mut SyntheticSpec, key: &str, value: &str) -> Result<bool> {
    match key {
        "synth.n_examples" => spec.n_examples = parse_value(key, value)?,
        "synth.dim" => spec.dim = parse_value(key, value)?,
        "synth.redundancy" => spec.redundancy = parse_value(key, value)?,
        "synth.noise_sigma" => spec.noise_sigma = parse_value(key, value)?,
        "synth.nuisance_dim" => spec.nuisance_dim = parse_value(key, value)?,
        "synth.seed" => spec.seed = parse_value(key, value)?,
        _ => return Ok(false),
    }
    Ok(true)
}

/// Builds a synthetic spec from `synth.*` keys; unknown keys are rejected.
pub fn synthetic_spec_from_text(text: &str) -> Result<SyntheticSpec> {
    let mut spec = SyntheticSpec::default();
    for (key, value) in parse_key_values(text)? {
        if !apply_synth_key(&mut spec, &key, &value)? && key != "seed" {
            return Err(Error::Config(format!("unknown key `{key}` in synthetic spec")));
        }
        if key == "seed" {
            spec.seed = parse_value(&key, &value)?;
        }
    }
    Ok(spec)
}

impl ExperimentConfig {
    /// Parses a key=value config. Relative paths resolve against `base_dir`.
    pub fn from_text(text: &str, base_dir: &Path) -> Result<Self> {
        let mut cfg = ExperimentConfig::default();
        let mut spec = SyntheticSpec::default();
        let mut synth_seed_set = false;
        let mut matrix: Option<PathBuf> = None;
        let mut labels = BTreeMap::new();
        let resolve = |v: &str| base_dir.join(v);

        for (key, value) in parse_key_values(text)? {
            let v = value.as_str();
            if key == "synth.seed" {
                synth_seed_set = true;
            }
            if apply_synth_key(&mut spec, &key, v)? {
                continue;
            }
            match key.as_str() {
                "experiment_id" => cfg.experiment_id = value.clone(),
                "model_id" => cfg.model_id = value.clone(),
                "feature" => cfg.feature = parse_value(&key, v)?,
                "downstream" => cfg.downstream = parse_value(&key, v)?,
                "modes" => cfg.modes = parse_list(&key, v)?,
                "head" => {
                    cfg.head = if v == "linear" {
                        HeadSource::Linear
                    } else if let Some(w) = v.strip_prefix("tanh:") {
                        HeadSource::Tanh(parse_value(&key, w)?)
                    } else if v == "tanh" {
                        HeadSource::Tanh(32)
                    } else if let Some(p) = v.strip_prefix("file:") {
                        HeadSource::File(resolve(p))
                    } else {
                        return Err(Error::Config(format!("bad head source `{v}`")));
                    }
                }
                "split" => cfg.split = parse_value(&key, v)?,
                "split_seed" => cfg.split_seed = parse_value(&key, v)?,
                "repetitions" => cfg.repetitions = parse_value(&key, v)?,
                "seed" => cfg.seed = parse_value(&key, v)?,
                "out" => cfg.out_dir = resolve(v),
                "workers" => cfg.workers = parse_value(&key, v)?,
                "matrix" => matrix = Some(resolve(v)),
                "inlp.max_iters" => cfg.inlp.max_iters = parse_value(&key, v)?,
                "inlp.stop_margin" => cfg.inlp.stop_margin = parse_value(&key, v)?,
                "inlp.patience" => cfg.inlp.patience = parse_value(&key, v)?,
                "probe.epochs" => cfg.inlp.probe.epochs = parse_value(&key, v)?,
                "probe.learning_rate" => cfg.inlp.probe.learning_rate = parse_value(&key, v)?,
                "probe.l2_penalty" => cfg.inlp.probe.l2_penalty = parse_value(&key, v)?,
                "probe.batch_size" => cfg.inlp.probe.batch_size = parse_value(&key, v)?,
                "probe.loss" => cfg.inlp.probe.loss = parse_value(&key, v)?,
                "head.epochs" => cfg.head_training.epochs = parse_value(&key, v)?,
                "head.learning_rate" => cfg.head_training.learning_rate = parse_value(&key, v)?,
                "head.l2_penalty" => cfg.head_training.l2_penalty = parse_value(&key, v)?,
                "head.batch_size" => cfg.head_training.batch_size = parse_value(&key, v)?,
                "control.k_values" => cfg.control_ks = parse_list(&key, v)?,
                "control.max_k" => {
                    let max: usize = parse_value(&key, v)?;
                    cfg.control_ks = (1..=max).collect();
                }
                other => {
                    if let Some(name) = other.strip_prefix("labels.") {
                        let feature: Feature = name
                            .parse()
                            .map_err(|_| Error::Config(format!("unknown label feature `{name}`")))?;
                        labels.insert(feature, resolve(v));
                    } else {
                        return Err(Error::Config(format!("unknown key `{other}`")));
                    }
                }
            }
        }
        if !synth_seed_set {
            spec.seed = cfg.seed;
        }
        cfg.data = match matrix {
            Some(matrix) => DataSource::Files { matrix, labels },
            None if labels.is_empty() => DataSource::Synthetic(spec),
            None => return Err(Error::Config("label files given without `matrix`".into())),
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new("."));
        Self::from_text(&text, base)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.split > 0.0 && self.split < 1.0) {
            return Err(Error::Config(format!("split {} must lie in (0, 1)", self.split)));
        }
        if self.repetitions == 0 {
            return Err(Error::Config("repetitions must be at least 1".into()));
        }
        if self.workers == 0 {
            return Err(Error::Config("workers must be at least 1".into()));
        }
        if self.modes.is_empty() {
            return Err(Error::Config("at least one mode is required".into()));
        }
        if self.control_ks.contains(&0) {
            return Err(Error::Config("control k values must be positive".into()));
        }
        if let HeadSource::Tanh(0) = self.head {
            return Err(Error::Config("tanh head width must be positive".into()));
        }
        self.inlp.validate().map_err(|e| Error::Config(e.to_string()))?;
        self.head_training.validate().map_err(|e| Error::Config(e.to_string()))?;
        if let DataSource::Synthetic(spec) = &self.data {
            spec.validate().map_err(|e| Error::Config(e.to_string()))?;
        }
        Ok(())
    }

    fn pool(&self) -> Result<rayon::ThreadPool> {
        rayon::ThreadPoolBuilder::new()
            .num_threads(self.workers)
            .build()
            .map_err(|e| Error::Config(format!("cannot start {} workers: {e}", self.workers)))
    }
}

// ---------------------------------------------------------------------------
// Data preparation
// ---------------------------------------------------------------------------

/// Representations with every label that could be loaded or derived.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub x: RepresentationMatrix,
    pub labels: BTreeMap<Feature, LabelVector>,
}

impl Dataset {
    pub fn load(source: &DataSource) -> Result<Self> {
        let (x, mut labels) = match source {
            DataSource::Synthetic(spec) => {
                let (x, nli) = generate(spec)?;
                let labels = Feature::ALL.iter().map(|&f| (f, nli.labels(f))).collect();
                (x, labels)
            }
            DataSource::Files { matrix, labels: paths } => {
                let x = read_matrix(matrix)?;
                let mut labels = BTreeMap::new();
                for (&feature, path) in paths {
                    let (_, y) = read_labels(path)?;
                    if y.len() != x.rows() {
                        return Err(Error::dims("label file rows", x.rows(), y.len()));
                    }
                    if y.class_count() != feature.class_count() {
                        return Err(Error::input(format!(
                            "{feature} labels declare {} classes, expected {}",
                            y.class_count(),
                            feature.class_count()
                        )));
                    }
                    labels.insert(feature, y);
                }
                (x, labels)
            }
        };
        if !labels.contains_key(&Feature::Composite) {
            if let (Some(m), Some(r)) = (labels.get(&Feature::Monotonicity), labels.get(&Feature::Relation)) {
                let composite = composite_from(m, r)?;
                labels.insert(Feature::Composite, composite);
            }
        }
        Ok(Self { x, labels })
    }

    pub fn label(&self, feature: Feature) -> Result<&LabelVector> {
        self.labels
            .get(&feature)
            .ok_or_else(|| Error::input(format!("no labels available for feature `{feature}`")))
    }
}

/// Deterministic train/eval partition of `0..n`.
pub fn split_indices(n: usize, fraction: f64, seed: u64) -> Result<(Vec<usize>, Vec<usize>)> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_train = ((n as f64) * fraction).round() as usize;
    if n_train == 0 || n_train >= n {
        return Err(Error::input(format!(
            "split {fraction} of {n} examples leaves an empty partition"
        )));
    }
    let eval = order.split_off(n_train);
    Ok((order, eval))
}

/// Train/eval partitions for the probe feature and the downstream label,
/// plus the frozen head.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub x_train: RepresentationMatrix,
    pub x_eval: RepresentationMatrix,
    pub y_train: LabelVector,
    pub y_eval: LabelVector,
    pub task_train: LabelVector,
    pub task_eval: LabelVector,
    pub head: ClassifierHead,
}

pub fn prepare(cfg: &ExperimentConfig) -> Result<Prepared> {
    cfg.validate()?;
    let data = Dataset::load(&cfg.data)?;
    let (train, eval) = split_indices(data.x.rows(), cfg.split, cfg.split_seed)?;
    let x_train = data.x.select_rows(&train)?;
    let x_eval = data.x.select_rows(&eval)?;
    let feature = data.label(cfg.feature)?;
    let task = data.label(cfg.downstream)?;
    let task_train = task.select(&train)?;
    let head = match &cfg.head {
        HeadSource::File(path) => read_head(path)?,
        HeadSource::Linear => train_head(&x_train, &task_train, &cfg.head_training.with_seed(cfg.seed), None)?,
        HeadSource::Tanh(width) => {
            train_head(&x_train, &task_train, &cfg.head_training.with_seed(cfg.seed), Some(*width))?
        }
    };
    if head.input_dim() != data.x.cols() {
        return Err(Error::dims("classifier head input", data.x.cols(), head.input_dim()));
    }
    Ok(Prepared {
        y_train: feature.select(&train)?,
        y_eval: feature.select(&eval)?,
        task_eval: task.select(&eval)?,
        task_train,
        x_train,
        x_eval,
        head,
    })
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn write_trace_files(dir: &Path, report: &TraceReport) -> Result<()> {
    let first = report.records.first().expect("validated report has a start record");
    let stem = trace_stem(first.mode, first.seed);
    write_report(dir.join(format!("{stem}.json")), report)?;
    write_report_csv(dir.join(format!("{stem}.csv")), report)
}

// ---------------------------------------------------------------------------
// synth
// ---------------------------------------------------------------------------

/// Writes the matrix, one label file per feature, and a manifest.
pub fn cmd_synth(spec: &SyntheticSpec, out_dir: &Path) -> Result<Vec<PathBuf>> {
    spec.validate()?;
    let (x, labels) = generate(spec)?;
    create_dir(out_dir)?;
    let mut written = Vec::new();

    let matrix_path = out_dir.join(MATRIX_FILE);
    write_matrix(&matrix_path, &x)?;
    written.push(matrix_path);
    for feature in Feature::ALL {
        let path = out_dir.join(label_file_name(feature));
        write_labels(&path, feature.as_str(), &labels.labels(feature))?;
        written.push(path);
    }
    let manifest = format!(
        "# synthetic natural-logic representations\n\
         synth.n_examples = {}\nsynth.dim = {}\nsynth.redundancy = {}\n\
         synth.noise_sigma = {}\nsynth.nuisance_dim = {}\nsynth.seed = {}\n\
         matrix = {MATRIX_FILE}\n{}",
        spec.n_examples,
        spec.dim,
        spec.redundancy,
        spec.noise_sigma,
        spec.nuisance_dim,
        spec.seed,
        Feature::ALL
            .iter()
            .map(|f| format!("labels.{f} = {}\n", label_file_name(*f)))
            .collect::<String>(),
    );
    let manifest_path = out_dir.join(MANIFEST_FILE);
    write_text(&manifest_path, &manifest)?;
    written.push(manifest_path);
    Ok(written)
}

// ---------------------------------------------------------------------------
// inlp / intervene
// ---------------------------------------------------------------------------

/// Result of an INLP run, including the saturated case.
#[derive(Debug, Clone)]
pub struct InlpOutcome {
    pub basis: AccumulatedBasis,
    pub trace: InterventionTrace,
    pub saturated: bool,
}

fn inlp_outcome(prep: &Prepared, cfg: &ExperimentConfig) -> Result<InlpOutcome> {
    let inlp = InlpConfig {
        seed: cfg.seed,
        ..cfg.inlp.clone()
    };
    match run_inlp(&prep.x_train, &prep.y_train, &prep.x_eval, &prep.y_eval, &inlp) {
        Ok((basis, trace)) => Ok(InlpOutcome {
            basis,
            trace,
            saturated: false,
        }),
        Err(Error::Saturated { partial, .. }) => {
            let (basis, trace) = *partial;
            Ok(InlpOutcome {
                basis,
                trace,
                saturated: true,
            })
        }
        Err(e) => Err(e),
    }
}

/// Probe accuracy after each basis step: the accuracy of the first probe
/// trained once that step's directions were removed.
fn amnesic_probe_curve(trace: &InterventionTrace) -> Vec<Option<f64>> {
    let adding: Vec<usize> = trace
        .steps
        .iter()
        .enumerate()
        .filter(|(_, s)| s.directions_added > 0)
        .map(|(i, _)| i)
        .collect();
    adding
        .iter()
        .map(|&i| trace.steps.get(i + 1).map(|s| s.probe_accuracy))
        .collect()
}

struct RunContext<'a> {
    cfg: &'a ExperimentConfig,
    prep: &'a Prepared,
    outcome: &'a InlpOutcome,
    feature_baseline: f64,
}

impl RunContext<'_> {
    fn record(&self, mode: Mode, seed: u64, step: i64, k: usize, probe: Option<f64>, downstream: f64) -> TraceRecord {
        TraceRecord {
            experiment_id: self.cfg.experiment_id.clone(),
            model_id: self.cfg.model_id.clone(),
            feature: self.cfg.feature.as_str().to_string(),
            mode,
            step,
            k,
            probe_accuracy: probe,
            majority_baseline: self.feature_baseline,
            downstream_accuracy: Some(downstream),
            seed,
        }
    }

    fn report(&self, records: Vec<TraceRecord>) -> TraceReport {
        TraceReport {
            dim: self.prep.x_eval.cols(),
            saturated: self.outcome.saturated,
            max_iters_hit: self.outcome.trace.max_iters_hit,
            basis_steps: self
                .outcome
                .basis
                .step_ranges()
                .iter()
                .map(|r| r.len())
                .collect(),
            records,
        }
    }

    fn start_record(&self, mode: Mode, seed: u64) -> Result<TraceRecord> {
        let probe = self.outcome.trace.steps.first().map(|s| s.probe_accuracy);
        let downstream = head_accuracy(&self.prep.head, &self.prep.x_eval, &self.prep.task_eval)?;
        let probe = if mode.is_control() { None } else { probe };
        Ok(self.record(mode, seed, -1, 0, probe, downstream))
    }

    /// Probe-basis interventions, one record per basis step.
    fn probe_run(&self, mode: Mode) -> Result<TraceReport> {
        let seed = self.cfg.seed;
        let basis = &self.outcome.basis;
        let amnesic_probe = amnesic_probe_curve(&self.outcome.trace);
        let mut records = vec![self.start_record(mode, seed)?];
        for (i, &k) in basis.step_ends().iter().enumerate() {
            let prefix = basis.prefix(i + 1);
            let eval = mode.project(&self.prep.x_eval, &prefix)?;
            let downstream = head_accuracy(&self.prep.head, &eval, &self.prep.task_eval)?;
            let probe = match mode {
                Mode::Amnesic => amnesic_probe.get(i).copied().flatten(),
                _ => {
                    let train = mode.project(&self.prep.x_train, &prefix)?;
                    let probe_cfg = self.cfg.inlp.probe.with_seed(seed.wrapping_add(i as u64));
                    let probe = train_probe(&train, &self.prep.y_train, &probe_cfg)?;
                    Some(evaluate_probe(&probe, &eval, &self.prep.y_eval)?)
                }
            };
            records.push(self.record(mode, seed, i as i64, k, probe, downstream));
        }
        Ok(self.report(records))
    }

    /// Random-direction control following the given cumulative k schedule.
    fn control_run(&self, mode: Mode, seed: u64, ks: &[usize]) -> Result<TraceReport> {
        let dim = self.prep.x_eval.cols();
        let mut records = vec![self.start_record(mode, seed)?];
        if let Some(&k_max) = ks.iter().max() {
            let basis = random_basis(dim, k_max.min(dim), seed)?;
            for (i, &k) in ks.iter().enumerate() {
                let eval = mode.project(&self.prep.x_eval, &basis.first_directions(k))?;
                let downstream = head_accuracy(&self.prep.head, &eval, &self.prep.task_eval)?;
                records.push(self.record(mode, seed, i as i64, k, None, downstream));
            }
        }
        Ok(self.report(records))
    }
}

/// Seed of control repetition `rep`.
pub fn control_seed(base: u64, rep: usize) -> u64 {
    base.wrapping_add(1 + rep as u64)
}

/// Runs INLP on the configured feature and writes its trace and basis.
pub fn cmd_inlp(cfg: &ExperimentConfig) -> Result<(InlpOutcome, TraceReport)> {
    let prep = prepare(cfg)?;
    let outcome = inlp_outcome(&prep, cfg)?;
    create_dir(&cfg.out_dir)?;
    write_basis(cfg.out_dir.join(PROBE_BASIS_FILE), &outcome.basis)?;
    let ctx = RunContext {
        cfg,
        prep: &prep,
        feature_baseline: majority_baseline(&prep.y_eval)?,
        outcome: &outcome,
    };
    let report = ctx.probe_run(Mode::Amnesic)?;
    write_report(cfg.out_dir.join("inlp.json"), &report)?;
    write_report_csv(cfg.out_dir.join("inlp.csv"), &report)?;
    Ok((outcome, report))
}

#[derive(Debug, Clone)]
pub struct InterveneOutcome {
    pub inlp: InlpOutcome,
    pub reports: Vec<TraceReport>,
    pub summary: Vec<DeltaRow>,
    pub head: ClassifierHead,
}

/// INLP on the configured feature, then one trace per requested
/// `(mode, seed)`. Control modes follow the INLP k schedule with
/// `repetitions` random bases each.
pub fn cmd_intervene(cfg: &ExperimentConfig) -> Result<InterveneOutcome> {
    let prep = prepare(cfg)?;
    let outcome = inlp_outcome(&prep, cfg)?;
    let ctx = RunContext {
        cfg,
        prep: &prep,
        feature_baseline: majority_baseline(&prep.y_eval)?,
        outcome: &outcome,
    };

    let mut jobs: Vec<(Mode, u64)> = Vec::new();
    for &mode in &cfg.modes {
        if mode.is_control() {
            jobs.extend((0..cfg.repetitions).map(|r| (mode, control_seed(cfg.seed, r))));
        } else {
            jobs.push((mode, cfg.seed));
        }
    }
    jobs.sort();
    jobs.dedup();

    let schedule = outcome.basis.step_ends().to_vec();
    let reports: Vec<TraceReport> = cfg.pool()?.install(|| {
        jobs.par_iter()
            .map(|&(mode, seed)| {
                if mode.is_control() {
                    ctx.control_run(mode, seed, &schedule)
                } else {
                    ctx.probe_run(mode)
                }
            })
            .collect::<Result<Vec<_>>>()
    })?;

    create_dir(&cfg.out_dir)?;
    write_basis(cfg.out_dir.join(PROBE_BASIS_FILE), &outcome.basis)?;
    write_head(cfg.out_dir.join(HEAD_FILE), &prep.head)?;
    for report in &reports {
        write_trace_files(&cfg.out_dir, report)?;
    }
    let summary = delta_rows(&reports);
    write_text(&cfg.out_dir.join(SUMMARY_FILE), &delta_table_csv(&summary, true))?;
    Ok(InterveneOutcome {
        inlp: outcome,
        reports,
        summary,
        head: prep.head,
    })
}

// ---------------------------------------------------------------------------
// control
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct ControlOutcome {
    pub reports: Vec<TraceReport>,
    pub bands: Vec<BandRow>,
}

/// Random-direction sweeps over `cfg.control_ks` for the control modes in
/// `cfg.modes` (both when none is listed).
pub fn cmd_control(cfg: &ExperimentConfig) -> Result<ControlOutcome> {
    let prep = prepare(cfg)?;
    let dim = prep.x_eval.cols();
    if let Some(&k) = cfg.control_ks.iter().find(|&&k| k > dim) {
        return Err(Error::Config(format!("control k = {k} exceeds dimension {dim}")));
    }
    let outcome = InlpOutcome {
        basis: AccumulatedBasis::empty(dim),
        trace: InterventionTrace::default(),
        saturated: false,
    };
    let ctx = RunContext {
        cfg,
        prep: &prep,
        feature_baseline: majority_baseline(&prep.y_eval)?,
        outcome: &outcome,
    };
    let mut modes: Vec<Mode> = cfg.modes.iter().copied().filter(|m| m.is_control()).collect();
    if modes.is_empty() {
        modes = vec![Mode::ControlRemove, Mode::ControlKeep];
    }
    let mut jobs: Vec<(Mode, u64)> = modes
        .iter()
        .flat_map(|&m| (0..cfg.repetitions).map(move |r| (m, control_seed(cfg.seed, r))))
        .collect();
    jobs.sort();
    jobs.dedup();

    let mut ks = cfg.control_ks.clone();
    ks.sort_unstable();
    ks.dedup();
    let reports: Vec<TraceReport> = cfg.pool()?.install(|| {
        jobs.par_iter()
            .map(|&(mode, seed)| ctx.control_run(mode, seed, &ks))
            .collect::<Result<Vec<_>>>()
    })?;

    create_dir(&cfg.out_dir)?;
    write_head(cfg.out_dir.join(HEAD_FILE), &prep.head)?;
    for report in &reports {
        write_trace_files(&cfg.out_dir, report)?;
    }
    let bands = band_rows(&reports);
    write_text(&cfg.out_dir.join("control_bands.csv"), &to_csv(&bands)?)?;
    Ok(ControlOutcome { reports, bands })
}

// ---------------------------------------------------------------------------
// report
// ---------------------------------------------------------------------------

/// One row of the delta table: start values and changes at the last step.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DeltaRow {
    pub model: String,
    pub feature: String,
    #[serde(skip)]
    pub mode: Mode,
    pub probing_start: Option<f64>,
    pub probing_delta: Option<f64>,
    pub downstream_start: Option<f64>,
    pub downstream_delta: Option<f64>,
}

/// Rows for every amnesic and mnestic trace.
pub fn delta_rows(reports: &[TraceReport]) -> Vec<DeltaRow> {
    reports
        .iter()
        .filter_map(|r| {
            let start = r.start()?;
            if start.mode.is_control() {
                return None;
            }
            let last = r.last()?;
            let last_probe = r.records.iter().rev().find_map(|x| x.probe_accuracy);
            let diff = |a: Option<f64>, b: Option<f64>| a.zip(b).map(|(a, b)| a - b);
            Some(DeltaRow {
                model: start.model_id.clone(),
                feature: start.feature.clone(),
                mode: start.mode,
                probing_start: start.probe_accuracy,
                probing_delta: diff(last_probe, start.probe_accuracy),
                downstream_start: start.downstream_accuracy,
                downstream_delta: diff(last.downstream_accuracy, start.downstream_accuracy),
            })
        })
        .collect()
}

fn to_csv<T: Serialize>(rows: &[T]) -> Result<String> {
    let mut writer = csv::Writer::from_writer(Vec::new());
    for row in rows {
        writer.serialize(row).map_err(|e| Error::Schema {
            what: "report table",
            field: "<row>".into(),
            message: e.to_string(),
        })?;
    }
    let bytes = writer.into_inner().map_err(|e| Error::Schema {
        what: "report table",
        field: "<document>".into(),
        message: e.to_string(),
    })?;
    Ok(String::from_utf8(bytes).expect("csv output is UTF-8"))
}

/// Delta table as CSV. With `with_mode`, a `mode` column is appended.
pub fn delta_table_csv(rows: &[DeltaRow], with_mode: bool) -> String {
    let mut out = String::from("model,feature,probing_start,probing_delta,downstream_start,downstream_delta");
    if with_mode {
        out.push_str(",mode");
    }
    out.push('\n');
    let fmt = |v: Option<f64>| v.map(|v| v.to_string()).unwrap_or_default();
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{},{}",
            r.model,
            r.feature,
            fmt(r.probing_start),
            fmt(r.probing_delta),
            fmt(r.downstream_start),
            fmt(r.downstream_delta)
        ));
        if with_mode {
            out.push_str(&format!(",{}", r.mode));
        }
        out.push('\n');
    }
    out
}

/// Downstream accuracy distribution at one `(mode, step)` across seeds.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BandRow {
    pub model_id: String,
    pub feature: String,
    pub mode: Mode,
    pub step: i64,
    pub k: usize,
    pub n: usize,
    pub downstream_min: f64,
    pub downstream_mean: f64,
    pub downstream_max: f64,
    pub probe_mean: Option<f64>,
}

/// Groups records by `(model, feature, mode, step)` and summarizes them.
pub fn band_rows(reports: &[TraceReport]) -> Vec<BandRow> {
    let mut groups: BTreeMap<(String, String, Mode, i64), Vec<&TraceRecord>> = BTreeMap::new();
    for r in reports.iter().flat_map(|r| &r.records) {
        groups
            .entry((r.model_id.clone(), r.feature.clone(), r.mode, r.step))
            .or_default()
            .push(r);
    }
    groups
        .into_iter()
        .map(|((model_id, feature, mode, step), recs)| {
            let values: Vec<f64> = recs.iter().filter_map(|r| r.downstream_accuracy).collect();
            let probes: Vec<f64> = recs.iter().filter_map(|r| r.probe_accuracy).collect();
            let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
            BandRow {
                model_id,
                feature,
                mode,
                step,
                k: recs[0].k,
                n: values.len(),
                downstream_min: values.iter().copied().fold(f64::INFINITY, f64::min),
                downstream_mean: if values.is_empty() { f64::NAN } else { mean(&values) },
                downstream_max: values.iter().copied().fold(f64::NEG_INFINITY, f64::max),
                probe_mean: (!probes.is_empty()).then(|| mean(&probes)),
            }
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AlignmentRow {
    pub model_id: String,
    pub feature: String,
    pub mode: Mode,
    pub seed: u64,
    pub k: usize,
    pub alignment: f64,
}

#[derive(Debug, Clone)]
pub struct ReportOutcome {
    pub deltas: Vec<DeltaRow>,
    pub bands: Vec<BandRow>,
    pub alignments: Vec<AlignmentRow>,
}

fn load_trace_dir(dir: &Path) -> Result<Vec<TraceReport>> {
    let mut paths: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.extension().is_some_and(|x| x == "json")
                && p.file_name()
                    .and_then(|n| n.to_str())
                    .is_some_and(|n| n.starts_with("trace-"))
        })
        .collect();
    paths.sort();
    paths.iter().map(read_report).collect()
}

/// Aggregates the traces in `trace_dirs` into a delta table, per-mode step
/// curves with min/mean/max bands, and control-versus-probe alignments.
pub fn cmd_report(trace_dirs: &[PathBuf], out_dir: &Path) -> Result<ReportOutcome> {
    let mut all = Vec::new();
    let mut alignments = Vec::new();
    let mut dim: Option<usize> = None;
    for dir in trace_dirs {
        let reports = load_trace_dir(dir)?;
        for r in &reports {
            match dim {
                None => dim = Some(r.dim),
                Some(d) if d != r.dim => return Err(Error::dims("trace report dimension", d, r.dim)),
                _ => {}
            }
        }
        alignments.extend(dir_alignments(dir, &reports)?);
        all.extend(reports);
    }

    let deltas: Vec<DeltaRow> = delta_rows(&all).into_iter().filter(|r| r.mode == Mode::Amnesic).collect();
    let bands = band_rows(&all);

    create_dir(out_dir)?;
    write_text(&out_dir.join("delta_table.csv"), &delta_table_csv(&deltas, false))?;
    for mode in Mode::ALL {
        let rows: Vec<&BandRow> = bands.iter().filter(|b| b.mode == mode).collect();
        if !rows.is_empty() {
            write_text(&out_dir.join(format!("curve-{mode}.csv")), &to_csv(&rows)?)?;
        }
    }
    write_text(&out_dir.join("alignment.csv"), &to_csv(&alignments)?)?;
    Ok(ReportOutcome {
        deltas,
        bands,
        alignments,
    })
}

/// Alignment of each control trace's random basis against the probe basis
/// stored in the same directory.
fn dir_alignments(dir: &Path, reports: &[TraceReport]) -> Result<Vec<AlignmentRow>> {
    let basis_path = dir.join(PROBE_BASIS_FILE);
    let Some(with_steps) = reports.iter().find(|r| !r.start().is_some_and(|s| s.mode.is_control())) else {
        return Ok(Vec::new());
    };
    if !basis_path.exists() {
        return Ok(Vec::new());
    }
    let probe = read_basis(&basis_path, &with_steps.basis_steps)?;
    if probe.is_empty() {
        return Ok(Vec::new());
    }
    let mut rows = Vec::new();
    for r in reports {
        let Some(last) = r.last() else { continue };
        if !last.mode.is_control() || last.k == 0 {
            continue;
        }
        let control = random_basis(r.dim, last.k, last.seed)?;
        let score = control_alignment_report(&[control], &probe)?[0];
        rows.push(AlignmentRow {
            model_id: last.model_id.clone(),
            feature: last.feature.clone(),
            mode: last.mode,
            seed: last.seed,
            k: last.k,
            alignment: score.value(),
        });
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn key_values_parse() {
        let kv = parse_key_values("# comment\n\na = 1\n b=two \n").unwrap();
        assert_eq!(kv, vec![("a".into(), "1".into()), ("b".into(), "two".into())]);
        assert!(parse_key_values("novalue\n").is_err());
    }

    #[test]
    fn config_parses_all_sections() {
        let text = "feature = relation\nmodes = amnesic,control-keep\nhead = tanh:16\n\
                    split = 0.75\nrepetitions = 4\nseed = 9\nsynth.dim = 32\nsynth.n_examples = 100\n\
                    inlp.patience = 2\nprobe.loss = logistic\ncontrol.k_values = 1,3\nout = res\n";
        let cfg = ExperimentConfig::from_text(text, Path::new("/base")).unwrap();
        assert_eq!(cfg.feature, Feature::Relation);
        assert_eq!(cfg.modes, vec![Mode::Amnesic, Mode::ControlKeep]);
        assert_eq!(cfg.head, HeadSource::Tanh(16));
        assert_eq!(cfg.inlp.patience, 2);
        assert_eq!(cfg.inlp.probe.loss, LossKind::Logistic);
        assert_eq!(cfg.control_ks, vec![1, 3]);
        assert_eq!(cfg.out_dir, PathBuf::from("/base/res"));
        match cfg.data {
            DataSource::Synthetic(spec) => {
                assert_eq!(spec.dim, 32);
                assert_eq!(spec.seed, 9);
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn config_errors() {
        let base = Path::new(".");
        assert!(matches!(ExperimentConfig::from_text("bogus = 1\n", base), Err(Error::Config(_))));
        assert!(matches!(ExperimentConfig::from_text("split = 1.0\n", base), Err(Error::Config(_))));
        assert!(matches!(ExperimentConfig::from_text("repetitions = 0\n", base), Err(Error::Config(_))));
        assert!(matches!(
            ExperimentConfig::from_text("labels.relation = r.csv\n", base),
            Err(Error::Config(_))
        ));
        assert!(matches!(
            ExperimentConfig::from_text("synth.dim = 4\nsynth.redundancy = 1\n", base),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn split_is_a_partition() {
        let (train, eval) = split_indices(10, 0.8, 1).unwrap();
        assert_eq!(train.len(), 8);
        let mut all: Vec<usize> = train.iter().chain(&eval).copied().collect();
        all.sort_unstable();
        assert_eq!(all, (0..10).collect::<Vec<_>>());
        assert_eq!(split_indices(10, 0.8, 1).unwrap(), (train, eval));
        assert!(split_indices(2, 0.1, 0).is_err());
    }

    #[test]
    fn probe_curve_skips_baseline_steps() {
        use crate::intervention::StepRecord;
        let step = |i: usize, added: usize, acc: f64| StepRecord {
            step: i,
            directions_added: added,
            k: 0,
            probe_accuracy: acc,
            majority_baseline: 0.5,
            downstream_accuracy: None,
        };
        let trace = InterventionTrace {
            steps: vec![step(0, 1, 0.9), step(1, 0, 0.5), step(2, 1, 0.7), step(3, 0, 0.5)],
            max_iters_hit: false,
        };
        assert_eq!(amnesic_probe_curve(&trace), vec![Some(0.5), Some(0.5)]);
    }
}

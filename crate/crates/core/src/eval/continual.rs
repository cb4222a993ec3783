//! The continual protocol: train tasks in order, re-evaluate every seen task
//! after each one, and summarize.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::metrics::{
    aupr, auroc, forgetting_measure, pro, BinaryMask, FmNormalization, TaskResultMatrix, DEFAULT_FPR_CAP,
};
use crate::backbone::{Backbone, BackboneConfig, BackboneInput, BackboneKind, PatchFeatureMap};
use crate::detector::{detect, DetectConfig, ResultRow, DEFAULT_SIGMA};
use crate::error::{Error, Result};
use crate::memory_bank::{BankConfig, MemoryBank, RouteMode};
use crate::numerics::Matrix;
use crate::objectives::LossBreakdown;
use crate::tensor_store::{read_tensor, save_bank, DatasetManifest, TaskSpec};
use crate::trainer::{load_task_inputs, task_seed, train_task, write_trace_csv, TrainConfig};

pub const METRICS: [&str; 5] = [
    "image_auroc",
    "image_aupr",
    "pixel_auroc",
    "pixel_aupr",
    "pixel_pro",
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchConfig {
    pub train: TrainConfig,
    pub route_mode: RouteMode,
    pub route_with_learnable_key: bool,
    pub sigma: f64,
    pub fm_normalization: FmNormalization,
    pub fpr_cap: f64,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            train: TrainConfig::default(),
            route_mode: RouteMode::MaxCosine,
            route_with_learnable_key: false,
            sigma: DEFAULT_SIGMA,
            fm_normalization: FmNormalization::Standard,
            fpr_cap: DEFAULT_FPR_CAP,
        }
    }
}

impl BenchConfig {
    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        if !(self.sigma >= 0.0 && self.sigma.is_finite()) {
            return Err(Error::Config(format!(
                "sigma {} must be non-negative",
                self.sigma
            )));
        }
        if !(self.fpr_cap > 0.0 && self.fpr_cap <= 1.0) {
            return Err(Error::Config(format!("fpr cap {} outside (0, 1]", self.fpr_cap)));
        }
        Ok(())
    }

    pub fn bank_config(&self) -> BankConfig {
        BankConfig {
            tau: self.train.tau,
            lambda: self.train.lambda,
            key_layer: self.train.key_layer,
            score_layer: self.train.score_layer,
            key_ratio: self.train.key_ratio,
            coreset_ratio: self.train.coreset_ratio,
            route_mode: self.route_mode,
            key_source: self.train.key_source,
            route_with_learnable_key: self.route_with_learnable_key,
        }
    }

    pub fn backbone(&self) -> Result<Backbone> {
        Backbone::new(BackboneConfig {
            kind: BackboneKind::Precomputed,
            key_layer: self.train.key_layer,
            score_layer: self.train.score_layer,
            ..BackboneConfig::default()
        })
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricSet {
    pub image_auroc: Option<f64>,
    pub image_aupr: Option<f64>,
    pub pixel_auroc: Option<f64>,
    pub pixel_aupr: Option<f64>,
    pub pixel_pro: Option<f64>,
}

impl MetricSet {
    pub fn get(&self, metric: &str) -> Option<f64> {
        match metric {
            "image_auroc" => self.image_auroc,
            "image_aupr" => self.image_aupr,
            "pixel_auroc" => self.pixel_auroc,
            "pixel_aupr" => self.pixel_aupr,
            "pixel_pro" => self.pixel_pro,
            _ => None,
        }
    }

    fn slot(&mut self, metric: &str) -> &mut Option<f64> {
        match metric {
            "image_auroc" => &mut self.image_auroc,
            "image_aupr" => &mut self.image_aupr,
            "pixel_auroc" => &mut self.pixel_auroc,
            "pixel_aupr" => &mut self.pixel_aupr,
            "pixel_pro" => &mut self.pixel_pro,
            other => unreachable!("unknown metric {other}"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskReport {
    pub name: String,
    pub n_test: usize,
    pub routing_accuracy: Option<f64>,
    #[serde(flatten)]
    pub metrics: MetricSet,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ForgettingReport {
    pub normalization: FmNormalization,
    #[serde(flatten)]
    pub metrics: MetricSet,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkReport {
    pub checkpoints: usize,
    pub tasks: Vec<TaskReport>,
    pub averages: MetricSet,
    /// Absent with fewer than two checkpoints.
    pub forgetting: Option<ForgettingReport>,
    pub routing_accuracy: Option<f64>,
    pub config: BenchConfig,
    /// Kept out of the JSON so reruns produce identical files.
    #[serde(skip)]
    pub wall_clock_secs: f64,
}

impl BenchmarkReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes") + "\n"
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("task,n_test,routing_accuracy");
        for m in METRICS {
            write!(out, ",{m}").unwrap();
        }
        out.push('\n');
        let cell = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        for t in &self.tasks {
            write!(out, "{},{},{}", t.name, t.n_test, cell(t.routing_accuracy)).unwrap();
            for m in METRICS {
                write!(out, ",{}", cell(t.metrics.get(m))).unwrap();
            }
            out.push('\n');
        }
        write!(out, "average,,{}", cell(self.routing_accuracy)).unwrap();
        for m in METRICS {
            write!(out, ",{}", cell(self.averages.get(m))).unwrap();
        }
        out.push('\n');
        if let Some(f) = &self.forgetting {
            out.push_str("forgetting,,");
            for m in METRICS {
                write!(out, ",{}", cell(f.metrics.get(m))).unwrap();
            }
            out.push('\n');
        }
        out
    }
}

/// One loaded test image.
#[derive(Debug, Clone)]
pub struct TestSample {
    pub features: PatchFeatureMap,
    pub label: u8,
    pub mask: Option<BinaryMask>,
}

fn read_mask(path: &Path) -> Result<BinaryMask> {
    let t = read_tensor(path)?;
    match *t.dims() {
        [h, w] => BinaryMask::new(h, w, t.as_u32()?.iter().map(|&v| v != 0).collect()),
        _ => Err(Error::shape(format!(
            "pixel mask must be rank 2, found {:?}",
            t.dims()
        ))),
    }
}

pub fn load_test_set(task: &TaskSpec, backbone: &Backbone) -> Result<Vec<TestSample>> {
    task.test_items
        .par_iter()
        .map(|item| {
            Ok(TestSample {
                features: backbone.extract(BackboneInput::Precomputed(&item.features))?,
                label: item.image_label,
                mask: item.pixel_mask.as_deref().map(read_mask).transpose()?,
            })
        })
        .collect()
}

struct TaskEval {
    metrics: MetricSet,
    routed_correct: Option<usize>,
    rows: Vec<ResultRow>,
}

fn absent_if_degenerate(r: Result<f64>) -> Result<Option<f64>> {
    match r {
        Ok(v) => Ok(Some(v)),
        Err(Error::DegenerateLabels(_)) => Ok(None),
        Err(e) => Err(e),
    }
}

/// Score one task's test set against the bank.
fn evaluate_task(
    bank: &MemoryBank,
    name: &str,
    true_task: Option<usize>,
    tests: &[TestSample],
    cfg: &BenchConfig,
) -> Result<TaskEval> {
    // normal items without a mask get an all-zero mask of the common size
    let mask_size = tests.iter().find_map(|t| t.mask.as_ref().map(|m| (m.h, m.w)));
    let results = tests
        .par_iter()
        .map(|t| {
            let size = match (&t.mask, t.label) {
                (Some(m), _) => Some((m.h, m.w)),
                (None, 0) => mask_size,
                (None, _) => None,
            };
            detect(
                &t.features,
                bank,
                &DetectConfig {
                    map_size: size,
                    sigma: cfg.sigma,
                },
            )
        })
        .collect::<Result<Vec<_>>>()?;

    let scores: Vec<f64> = results.iter().map(|r| r.image_score).collect();
    let labels: Vec<u8> = tests.iter().map(|t| t.label).collect();
    let mut metrics = MetricSet {
        image_auroc: absent_if_degenerate(auroc(&scores, &labels))?,
        image_aupr: absent_if_degenerate(aupr(&scores, &labels))?,
        ..MetricSet::default()
    };

    let mut maps = Vec::new();
    let mut masks = Vec::new();
    for (t, r) in tests.iter().zip(&results) {
        if let Some(map) = &r.pixel_map {
            masks.push(
                t.mask
                    .clone()
                    .unwrap_or_else(|| BinaryMask::zeros(map.rows(), map.cols())),
            );
            maps.push(map.clone());
        }
    }
    if !maps.is_empty() {
        let px_scores: Vec<f64> = maps
            .iter()
            .flat_map(|m: &Matrix| m.data().iter().copied())
            .collect();
        let px_labels: Vec<u8> = masks
            .iter()
            .flat_map(|m| m.values.iter().map(|&v| u8::from(v)))
            .collect();
        metrics.pixel_auroc = absent_if_degenerate(auroc(&px_scores, &px_labels))?;
        metrics.pixel_aupr = absent_if_degenerate(aupr(&px_scores, &px_labels))?;
        metrics.pixel_pro = absent_if_degenerate(pro(&maps, &masks, cfg.fpr_cap))?;
    }

    let routed_correct = true_task.map(|t| results.iter().filter(|r| r.routed_task == t).count());
    let rows = results
        .iter()
        .zip(tests)
        .map(|(r, t)| ResultRow {
            task: name.to_string(),
            routed_task: bank.entries()[r.routed_task].name.clone(),
            image_score: r.image_score,
            label: t.label,
        })
        .collect();
    Ok(TaskEval {
        metrics,
        routed_correct,
        rows,
    })
}

fn mean(values: impl Iterator<Item = Option<f64>>) -> Option<f64> {
    let v: Vec<f64> = values.flatten().collect();
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

fn summarize(evals: &[(String, usize, TaskEval)], cfg: &BenchConfig, checkpoints: usize) -> BenchmarkReport {
    let tasks: Vec<TaskReport> = evals
        .iter()
        .map(|(name, n, e)| TaskReport {
            name: name.clone(),
            n_test: *n,
            routing_accuracy: e.routed_correct.filter(|_| *n > 0).map(|c| c as f64 / *n as f64),
            metrics: e.metrics,
        })
        .collect();
    let mut averages = MetricSet::default();
    for m in METRICS {
        *averages.slot(m) = mean(tasks.iter().map(|t| t.metrics.get(m)));
    }
    let (correct, total) = evals
        .iter()
        .fold((0, 0), |(c, n), (_, len, e)| match e.routed_correct {
            Some(k) => (c + k, n + len),
            None => (c, n),
        });
    BenchmarkReport {
        checkpoints,
        tasks,
        averages,
        forgetting: None,
        routing_accuracy: (total > 0).then(|| correct as f64 / total as f64),
        config: cfg.clone(),
        wall_clock_secs: 0.0,
    }
}

#[derive(Debug, Clone)]
pub struct ContinualOutcome {
    pub bank: MemoryBank,
    pub report: BenchmarkReport,
    pub matrices: Vec<TaskResultMatrix>,
    pub traces: Vec<(String, Vec<LossBreakdown>)>,
    /// Per-image results at the final checkpoint.
    pub results: Vec<ResultRow>,
}

/// Train tasks in manifest order, evaluating all seen tasks after each one.
pub fn run_continual(manifest: &DatasetManifest, cfg: &BenchConfig) -> Result<ContinualOutcome> {
    let start = Instant::now();
    let bank = train_bank(manifest, cfg, |bank, l, test_sets, matrices| {
        let evals = (0..=l)
            .map(|j| evaluate_task(bank, &manifest.tasks[j].name, Some(j), &test_sets[j], cfg))
            .collect::<Result<Vec<_>>>()?;
        for (j, e) in evals.iter().enumerate() {
            for (mi, m) in METRICS.iter().enumerate() {
                if let Some(v) = e.metrics.get(m) {
                    matrices[mi].set(l, j, v)?;
                }
            }
        }
        Ok(evals)
    })?;
    let (bank, matrices, traces, last) = bank;
    let k = manifest.tasks.len();
    let evals: Vec<(String, usize, TaskEval)> = last
        .into_iter()
        .enumerate()
        .map(|(j, e)| {
            (
                manifest.tasks[j].name.clone(),
                manifest.tasks[j].test_items.len(),
                e,
            )
        })
        .collect();
    let mut report = summarize(&evals, cfg, k);
    if k >= 2 {
        let mut fm = MetricSet::default();
        for (mi, m) in METRICS.iter().enumerate() {
            *fm.slot(m) = absent_if_degenerate(forgetting_measure(&matrices[mi], cfg.fm_normalization))?;
        }
        report.forgetting = Some(ForgettingReport {
            normalization: cfg.fm_normalization,
            metrics: fm,
        });
    }
    report.wall_clock_secs = start.elapsed().as_secs_f64();
    let results = evals.into_iter().flat_map(|(_, _, e)| e.rows).collect();
    Ok(ContinualOutcome {
        bank,
        report,
        matrices,
        traces,
        results,
    })
}

type TrainedRun = (
    MemoryBank,
    Vec<TaskResultMatrix>,
    Vec<(String, Vec<LossBreakdown>)>,
    Vec<TaskEval>,
);

/// Sequential training with a per-checkpoint callback.
fn train_bank<F>(manifest: &DatasetManifest, cfg: &BenchConfig, mut checkpoint: F) -> Result<TrainedRun>
where
    F: FnMut(&MemoryBank, usize, &[Vec<TestSample>], &mut [TaskResultMatrix]) -> Result<Vec<TaskEval>>,
{
    cfg.validate()?;
    if manifest.tasks.is_empty() {
        return Err(Error::Validation("manifest has no tasks".into()));
    }
    let backbone = cfg.backbone()?;
    let names: Vec<String> = manifest.tasks.iter().map(|t| t.name.clone()).collect();
    let mut matrices: Vec<TaskResultMatrix> = METRICS
        .iter()
        .map(|m| TaskResultMatrix::new(*m, names.clone()))
        .collect();
    let mut bank: Option<MemoryBank> = None;
    let mut test_sets = Vec::with_capacity(manifest.tasks.len());
    let mut traces = Vec::with_capacity(manifest.tasks.len());
    let mut last = Vec::new();
    for (l, task) in manifest.tasks.iter().enumerate() {
        let (samples, text) = load_task_inputs(task, &backbone)?;
        let task_cfg = TrainConfig {
            seed: task_seed(cfg.train.seed, l),
            ..cfg.train.clone()
        };
        let outcome = train_task(&task.name, &samples, &text, &task_cfg)?;
        let b = bank.get_or_insert_with(|| MemoryBank::new(outcome.entry.dim(), cfg.bank_config()));
        b.push(outcome.entry)?;
        traces.push((task.name.clone(), outcome.trace));
        test_sets.push(load_test_set(task, &backbone)?);
        last = checkpoint(b, l, &test_sets, &mut matrices)?;
    }
    Ok((bank.expect("at least one task"), matrices, traces, last))
}

/// Train only; returns the bank and loss traces.
pub fn train_continual(
    manifest: &DatasetManifest,
    cfg: &BenchConfig,
) -> Result<(MemoryBank, Vec<(String, Vec<LossBreakdown>)>)> {
    let (bank, _, traces, _) = train_bank(manifest, cfg, |_, _, _, _| Ok(Vec::new()))?;
    Ok((bank, traces))
}

/// Score every test set of a manifest against a trained bank; tasks are
/// matched to entries by name for routing accuracy.
pub fn evaluate_manifest(
    bank: &MemoryBank,
    manifest: &DatasetManifest,
    cfg: &BenchConfig,
) -> Result<(BenchmarkReport, Vec<ResultRow>)> {
    cfg.validate()?;
    if bank.is_empty() {
        return Err(Error::EmptyBank);
    }
    let backbone = Backbone::new(BackboneConfig {
        kind: BackboneKind::Precomputed,
        key_layer: bank.config().key_layer,
        score_layer: bank.config().score_layer,
        ..BackboneConfig::default()
    })?;
    let mut evals = Vec::with_capacity(manifest.tasks.len());
    for task in &manifest.tasks {
        let tests = load_test_set(task, &backbone)?;
        let true_task = bank.entries().iter().position(|e| e.name == task.name);
        let e = evaluate_task(bank, &task.name, true_task, &tests, cfg)?;
        evals.push((task.name.clone(), tests.len(), e));
    }
    let report = summarize(&evals, cfg, 1);
    let rows = evals.into_iter().flat_map(|(_, _, e)| e.rows).collect();
    Ok((report, rows))
}

fn write(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// report.json, report.csv and timing.json under `out`.
pub fn write_report(out: &Path, report: &BenchmarkReport) -> Result<()> {
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    write(&out.join("report.json"), &report.to_json())?;
    write(&out.join("report.csv"), &report.to_csv())?;
    write(
        &out.join("timing.json"),
        &format!("{{\n  \"wall_clock_secs\": {}\n}}\n", report.wall_clock_secs),
    )
}

/// Everything a full run produces: report, matrices, traces, results, bank.
pub fn write_outcome(out: &Path, outcome: &ContinualOutcome) -> Result<()> {
    write_report(out, &outcome.report)?;
    let mdir = out.join("matrices");
    fs::create_dir_all(&mdir).map_err(|e| Error::io(&mdir, e))?;
    for m in &outcome.matrices {
        write(&mdir.join(format!("{}.csv", m.metric)), &m.to_csv())?;
    }
    write_traces(out, &outcome.traces)?;
    crate::detector::write_results_csv(out.join("results.csv"), &outcome.results)?;
    save_bank(&outcome.bank, out.join("bank"))
}

pub fn write_traces(out: &Path, traces: &[(String, Vec<LossBreakdown>)]) -> Result<()> {
    let tdir = out.join("traces");
    fs::create_dir_all(&tdir).map_err(|e| Error::io(&tdir, e))?;
    for (i, (_, trace)) in traces.iter().enumerate() {
        write_trace_csv(tdir.join(format!("task_{i:03}.csv")), trace)?;
    }
    Ok(())
}

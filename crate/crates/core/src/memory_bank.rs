//! Per-task memory entries and the bank that routes between them.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::attention::{AttentionWeights, FusedFeatures, PromptParams};
use crate::error::{Error, Result};
use crate::numerics::{cosine_similarity, norm, squared_l2, Matrix, Vector};
use crate::objectives::{fused_features, Trainables};

pub const DEFAULT_KEY_RATIO: f64 = 0.1;
pub const DEFAULT_CORESET_RATIO: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RouteMode {
    /// Mean-pool the query, take the best cosine against each task's keys.
    #[default]
    MaxCosine,
    /// Sum over query rows of the minimum L2 distance to each task's keys.
    SumMinL2,
}

impl std::str::FromStr for RouteMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "max_cosine" | "max-cosine" => Ok(RouteMode::MaxCosine),
            "sum_min_l2" | "sum-min-l2" => Ok(RouteMode::SumMinL2),
            other => Err(Error::Config(format!("unknown route mode {other:?}"))),
        }
    }
}

/// What the stored routing keys are condensed from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KeySource {
    /// One mean-pooled key-layer vector per training image.
    #[default]
    PooledImage,
    /// Every key-layer patch vector of every training image.
    Patches,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BankConfig {
    pub tau: f64,
    pub lambda: f64,
    pub key_layer: usize,
    pub score_layer: usize,
    pub key_ratio: f64,
    pub coreset_ratio: f64,
    pub route_mode: RouteMode,
    pub key_source: KeySource,
    pub route_with_learnable_key: bool,
}

impl Default for BankConfig {
    fn default() -> Self {
        Self {
            tau: crate::objectives::DEFAULT_TAU,
            lambda: crate::objectives::DEFAULT_LAMBDA,
            key_layer: crate::backbone::DEFAULT_KEY_LAYER,
            score_layer: crate::backbone::DEFAULT_SCORE_LAYER,
            key_ratio: DEFAULT_KEY_RATIO,
            coreset_ratio: DEFAULT_CORESET_RATIO,
            route_mode: RouteMode::MaxCosine,
            key_source: KeySource::PooledImage,
            route_with_learnable_key: false,
        }
    }
}

/// Everything remembered about one task.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskMemoryEntry {
    pub task_id: usize,
    pub name: String,
    /// FPS-condensed key-layer features.
    pub keys: Matrix,
    /// Coreset of fused score-layer features of normal training patches.
    pub knowledge: Matrix,
    /// Prompt, fusion weights, and learnable key.
    pub params: Trainables,
    /// Frozen attention the prompt is inserted into.
    pub prefix_weights: AttentionWeights,
    pub text: Vector,
}

impl TaskMemoryEntry {
    pub fn prompt(&self) -> &PromptParams {
        &self.params.prompt
    }

    pub fn learnable_key(&self) -> &Vector {
        &self.params.learnable_key
    }

    pub fn dim(&self) -> usize {
        self.keys.cols()
    }

    /// Prompt-adapted, text-fused features of one image's score-layer tap.
    pub fn fuse(&self, score_feats: &Matrix) -> Result<FusedFeatures> {
        fused_features(score_feats, &self.params, &self.prefix_weights, &self.text)
    }

    fn validate(&self) -> Result<()> {
        let d = self.dim();
        if self.keys.rows() == 0 || self.knowledge.rows() == 0 {
            return Err(Error::Size(format!(
                "task {:?} has no keys or no knowledge",
                self.name
            )));
        }
        if self.knowledge.cols() != d
            || self.text.dim() != d
            || self.params.learnable_key.dim() != d
            || self.prefix_weights.dim() != d
            || (self.params.prompt.length() > 0 && self.params.prompt.dim() != d)
        {
            return Err(Error::shape(format!("task {:?} mixes feature dims", self.name)));
        }
        for (what, m) in [("key", &self.keys), ("knowledge", &self.knowledge)] {
            if let Some(r) = (0..m.rows()).find(|&r| norm(m.row(r)) == 0.0) {
                return Err(Error::DegenerateVector(format!(
                    "task {:?} {what} row {r} has zero norm",
                    self.name
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MemoryBank {
    entries: Vec<TaskMemoryEntry>,
    dim: usize,
    config: BankConfig,
}

impl MemoryBank {
    pub fn new(dim: usize, config: BankConfig) -> Self {
        Self {
            entries: Vec::new(),
            dim,
            config,
        }
    }

    /// Append a finished task; its id becomes the next index.
    pub fn push(&mut self, mut entry: TaskMemoryEntry) -> Result<usize> {
        if entry.dim() != self.dim {
            return Err(Error::shape(format!(
                "entry dim {} does not match bank dim {}",
                entry.dim(),
                self.dim
            )));
        }
        entry.validate()?;
        if self.entries.iter().any(|e| e.name == entry.name) {
            return Err(Error::Validation(format!("duplicate task name {:?}", entry.name)));
        }
        entry.task_id = self.entries.len();
        self.entries.push(entry);
        Ok(self.entries.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn config(&self) -> &BankConfig {
        &self.config
    }

    pub fn config_mut(&mut self) -> &mut BankConfig {
        &mut self.config
    }

    pub fn entries(&self) -> &[TaskMemoryEntry] {
        &self.entries
    }

    pub fn entry(&self, task_id: usize) -> Result<&TaskMemoryEntry> {
        self.entries.get(task_id).ok_or(Error::Lookup(task_id))
    }

    /// A bank holding only the first `n` tasks.
    pub fn prefix(&self, n: usize) -> MemoryBank {
        MemoryBank {
            entries: self.entries[..n.min(self.entries.len())].to_vec(),
            dim: self.dim,
            config: self.config.clone(),
        }
    }
}

/// Greedy farthest-point sampling.
///
/// Starts at `start`; each later pick maximizes the minimum distance to the
/// picks so far, ties going to the lowest index.
pub fn fps_subsample(points: &Matrix, target: usize, start: usize) -> Result<Vec<usize>> {
    let n = points.rows();
    if n == 0 {
        return Err(Error::Size("farthest-point sampling over zero points".into()));
    }
    if target == 0 || target > n {
        return Err(Error::Size(format!("cannot select {target} of {n} points")));
    }
    if start >= n {
        return Err(Error::Size(format!("start index {start} out of {n} points")));
    }
    let mut picked = vec![false; n];
    let mut min_sq = vec![f64::INFINITY; n];
    let mut order = Vec::with_capacity(target);
    let mut current = start;
    loop {
        picked[current] = true;
        order.push(current);
        if order.len() == target {
            return Ok(order);
        }
        let anchor = points.row(current);
        min_sq
            .par_iter_mut()
            .enumerate()
            .for_each(|(i, d)| *d = d.min(squared_l2(points.row(i), anchor)));
        let mut best: Option<usize> = None;
        for i in (0..n).filter(|&i| !picked[i]) {
            if best.is_none_or(|b| min_sq[i] > min_sq[b]) {
                best = Some(i);
            }
        }
        current = best.expect("target <= n leaves an unpicked point");
    }
}

fn condensed_size(ratio: f64, n: usize) -> usize {
    ((ratio * n as f64).ceil() as usize).clamp(1, n)
}

/// Inputs for assembling one task's memory entry.
pub struct EntryParts {
    pub name: String,
    /// Stacked key-layer vectors of the task's normal images.
    pub key_feats: Matrix,
    /// Stacked fused score-layer patch features of the task's normal images.
    pub fused_feats: Matrix,
    pub params: Trainables,
    pub prefix_weights: AttentionWeights,
    pub text: Vector,
    pub key_ratio: f64,
    pub coreset_ratio: f64,
    pub fps_start: usize,
}

/// Condense keys and knowledge by FPS and assemble the entry.
///
/// Stored values are rounded to `f32` so that persistence is lossless.
pub fn build_entry(parts: EntryParts) -> Result<TaskMemoryEntry> {
    for (what, r) in [
        ("key_ratio", parts.key_ratio),
        ("coreset_ratio", parts.coreset_ratio),
    ] {
        if !(r > 0.0 && r <= 1.0) {
            return Err(Error::Config(format!("{what} {r} outside (0, 1]")));
        }
    }
    if parts.key_feats.rows() == 0 || parts.fused_feats.rows() == 0 {
        return Err(Error::Size(format!("task {:?} has no features", parts.name)));
    }
    let key_n = condensed_size(parts.key_ratio, parts.key_feats.rows());
    let key_idx = fps_subsample(&parts.key_feats, key_n, parts.fps_start % parts.key_feats.rows())?;
    let mk_n = condensed_size(parts.coreset_ratio, parts.fused_feats.rows());
    let mk_idx = fps_subsample(
        &parts.fused_feats,
        mk_n,
        parts.fps_start % parts.fused_feats.rows(),
    )?;

    let mut params = parts.params;
    let rounded = params
        .flatten()
        .iter()
        .map(|&v| v as f32 as f64)
        .collect::<Vec<_>>();
    params.set_flat(&rounded);
    let mut prefix_weights = parts.prefix_weights;
    for m in prefix_weights.matrices_mut() {
        *m = m.round_to_f32();
    }
    let entry = TaskMemoryEntry {
        task_id: 0,
        name: parts.name,
        keys: parts.key_feats.select_rows(&key_idx).round_to_f32(),
        knowledge: parts.fused_feats.select_rows(&mk_idx).round_to_f32(),
        params,
        prefix_weights,
        text: parts.text.round_to_f32(),
    };
    entry.validate()?;
    Ok(entry)
}

/// Per-task routing scores; higher is better for cosine modes, lower for L2.
pub fn route_scores(query_feats: &Matrix, bank: &MemoryBank) -> Result<Vec<f64>> {
    let cfg = bank.config();
    if query_feats.rows() == 0 {
        return Err(Error::Size("routing query has no rows".into()));
    }
    let q = query_feats.mean_row();
    bank.entries()
        .iter()
        .map(|e| {
            if cfg.route_with_learnable_key {
                return cosine_similarity(q.as_slice(), e.learnable_key().as_slice());
            }
            match cfg.route_mode {
                RouteMode::MaxCosine => {
                    let mut best = f64::NEG_INFINITY;
                    for k in e.keys.row_iter() {
                        best = best.max(cosine_similarity(q.as_slice(), k)?);
                    }
                    Ok(best)
                }
                RouteMode::SumMinL2 => {
                    let rows: Vec<&[f64]> = match cfg.key_source {
                        KeySource::PooledImage => vec![q.as_slice()],
                        KeySource::Patches => query_feats.row_iter().collect(),
                    };
                    Ok(rows
                        .iter()
                        .map(|r| {
                            e.keys
                                .row_iter()
                                .map(|k| squared_l2(r, k))
                                .fold(f64::INFINITY, f64::min)
                                .sqrt()
                        })
                        .sum())
                }
            }
        })
        .collect()
}

/// Pick the task whose keys best match the key-layer features of a test image.
pub fn route(query_feats: &Matrix, bank: &MemoryBank) -> Result<usize> {
    if bank.is_empty() {
        return Err(Error::EmptyBank);
    }
    let scores = route_scores(query_feats, bank)?;
    let lower_is_better =
        bank.config().route_mode == RouteMode::SumMinL2 && !bank.config().route_with_learnable_key;
    let mut best = 0;
    for (i, &s) in scores.iter().enumerate().skip(1) {
        let better = if lower_is_better {
            s < scores[best]
        } else {
            s > scores[best]
        };
        if better {
            best = i;
        }
    }
    Ok(best)
}

pub fn retrieve_knowledge(bank: &MemoryBank, task_id: usize) -> Result<&Matrix> {
    Ok(&bank.entry(task_id)?.knowledge)
}

/// Exact distance from each test row to its nearest memory row.
pub fn nn_min_distances(test: &Matrix, memory: &Matrix) -> Result<Vector> {
    if memory.rows() == 0 {
        return Err(Error::Size("nearest-neighbor search over empty memory".into()));
    }
    if test.cols() != memory.cols() {
        return Err(Error::shape(format!(
            "test dim {} does not match memory dim {}",
            test.cols(),
            memory.cols()
        )));
    }
    let out: Vec<f64> = (0..test.rows())
        .into_par_iter()
        .map(|i| {
            let t = test.row(i);
            memory
                .row_iter()
                .map(|m| squared_l2(t, m))
                .fold(f64::INFINITY, f64::min)
                .sqrt()
        })
        .collect();
    Ok(Vector::from_raw(out))
}

//! Per-task training: patch labels from pixel masks, full-batch gradient
//! descent on the prompt, fusion weights and learnable key, then memory-entry
//! assembly.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::attention::{AttentionWeights, PromptParams};
use crate::backbone::{Backbone, BackboneInput, PatchFeatureMap, TextFeature};
use crate::error::{Error, Result};
use crate::memory_bank::{
    build_entry, EntryParts, KeySource, TaskMemoryEntry, DEFAULT_CORESET_RATIO, DEFAULT_KEY_RATIO,
};
use crate::numerics::{Matrix, Vector};
use crate::objectives::{
    batch_loss, grad_total_loss, ContrastOptions, LossBreakdown, LossContext, PatchLabels, Trainables,
    TrainingImage, DEFAULT_LAMBDA, DEFAULT_TAU,
};
use crate::tensor_store::{read_tensor, TaskSpec, TensorFile};

/// Per-pixel region ids, row-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PseudoLabelGrid {
    pub h: usize,
    pub w: usize,
    pub labels: Vec<u32>,
}

impl PseudoLabelGrid {
    pub fn new(h: usize, w: usize, labels: Vec<u32>) -> Result<Self> {
        if h == 0 || w == 0 {
            return Err(Error::Size(format!("empty {h}x{w} label grid")));
        }
        if labels.len() != h * w {
            return Err(Error::shape(format!(
                "{} labels for a {h}x{w} grid",
                labels.len()
            )));
        }
        Ok(Self { h, w, labels })
    }

    pub fn from_tensor(t: &TensorFile) -> Result<Self> {
        match *t.dims() {
            [h, w] => Self::new(h, w, t.as_u32()?.to_vec()),
            _ => Err(Error::shape(format!(
                "label grid must be rank 2, found {:?}",
                t.dims()
            ))),
        }
    }

    pub fn to_tensor(&self) -> Result<TensorFile> {
        TensorFile::u32(vec![self.h, self.w], self.labels.clone())
    }

    pub fn get(&self, r: usize, c: usize) -> u32 {
        self.labels[r * self.w + c]
    }
}

/// Pixel range of cell `i` out of `n` cells over `len` pixels; the last cell
/// takes the remainder.
pub(crate) fn cell_range(i: usize, n: usize, len: usize) -> std::ops::Range<usize> {
    let size = len / n;
    let end = if i + 1 == n { len } else { (i + 1) * size };
    i * size..end
}

/// Majority region id per patch cell, ties to the smallest id.
pub fn patchify_labels(grid: &PseudoLabelGrid, grid_h: usize, grid_w: usize) -> Result<PatchLabels> {
    if grid.labels.is_empty() || grid_h == 0 || grid_w == 0 {
        return Err(Error::Size("empty label grid or patch grid".into()));
    }
    if grid_h > grid.h || grid_w > grid.w {
        return Err(Error::shape(format!(
            "{}x{} pixels cannot cover a {grid_h}x{grid_w} patch grid",
            grid.h, grid.w
        )));
    }
    let mut out = Vec::with_capacity(grid_h * grid_w);
    for gr in 0..grid_h {
        for gc in 0..grid_w {
            let mut counts: BTreeMap<u32, usize> = BTreeMap::new();
            for r in cell_range(gr, grid_h, grid.h) {
                for c in cell_range(gc, grid_w, grid.w) {
                    *counts.entry(grid.get(r, c)).or_default() += 1;
                }
            }
            // BTreeMap iterates ascending, so the first maximum is the smallest id
            let mut best = (0u32, 0usize);
            for (&id, &n) in &counts {
                if n > best.1 {
                    best = (id, n);
                }
            }
            out.push(best.0);
        }
    }
    Ok(PatchLabels::new(out))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub tau: f64,
    pub lambda: f64,
    pub prompt_length: usize,
    pub key_ratio: f64,
    pub coreset_ratio: f64,
    pub seed: u64,
    pub batch_wide_contrast: bool,
    pub exclude_self_pairs: bool,
    pub freeze_fusion: bool,
    pub key_layer: usize,
    pub score_layer: usize,
    pub prefix_heads: usize,
    pub fusion_heads: usize,
    pub key_source: KeySource,
    /// When set, FPS starts from a seeded random index instead of 0.
    pub fps_start_seed: Option<u64>,
    /// Global gradient-norm clip applied before each step; 0 disables it.
    pub max_grad_norm: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 50,
            learning_rate: 0.05,
            tau: DEFAULT_TAU,
            lambda: DEFAULT_LAMBDA,
            prompt_length: 5,
            key_ratio: DEFAULT_KEY_RATIO,
            coreset_ratio: DEFAULT_CORESET_RATIO,
            seed: 0,
            batch_wide_contrast: false,
            exclude_self_pairs: false,
            freeze_fusion: false,
            key_layer: crate::backbone::DEFAULT_KEY_LAYER,
            score_layer: crate::backbone::DEFAULT_SCORE_LAYER,
            prefix_heads: 1,
            fusion_heads: 1,
            key_source: KeySource::PooledImage,
            fps_start_seed: None,
            max_grad_norm: 1.0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.epochs == 0 {
            return bad("epochs must be at least 1".into());
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad(format!("learning rate {} must be positive", self.learning_rate));
        }
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return bad(format!("tau {} must be positive", self.tau));
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return bad(format!("lambda {} must be non-negative", self.lambda));
        }
        for (name, r) in [
            ("key ratio", self.key_ratio),
            ("coreset ratio", self.coreset_ratio),
        ] {
            if !(r > 0.0 && r <= 1.0) {
                return bad(format!("{name} {r} outside (0, 1]"));
            }
        }
        if !(self.max_grad_norm >= 0.0 && self.max_grad_norm.is_finite()) {
            return bad(format!(
                "max grad norm {} must be non-negative",
                self.max_grad_norm
            ));
        }
        if self.prefix_heads == 0 || self.fusion_heads == 0 {
            return bad("head counts must be at least 1".into());
        }
        Ok(())
    }
}

/// One normal training image with its pseudo-label mask.
#[derive(Debug, Clone)]
pub struct TrainSample {
    pub features: PatchFeatureMap,
    pub mask: PseudoLabelGrid,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub entry: TaskMemoryEntry,
    /// Loss before each step, then the loss after the last step.
    pub trace: Vec<LossBreakdown>,
}

/// Read features and masks of a task's training items in parallel.
pub fn load_train_samples(task: &TaskSpec, backbone: &Backbone) -> Result<Vec<TrainSample>> {
    task.train_items
        .par_iter()
        .map(|item| {
            let features = backbone.extract(BackboneInput::Precomputed(&item.features))?;
            let mask = PseudoLabelGrid::from_tensor(&read_tensor(&item.mask)?)?;
            Ok(TrainSample { features, mask })
        })
        .collect()
}

fn init_params(cfg: &TrainConfig, dim: usize, key: Vector) -> Result<Trainables> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut uniform = |rows: usize, cols: usize, r: f64| {
        Matrix::new(
            rows,
            cols,
            (0..rows * cols).map(|_| rng.random_range(-r..r)).collect(),
        )
    };
    let prompt = PromptParams::new(
        uniform(cfg.prompt_length, dim, 0.02)?,
        uniform(cfg.prompt_length, dim, 0.02)?,
    )?;
    let mut fusion = || -> Result<AttentionWeights> {
        let mut mats = Vec::with_capacity(3);
        for _ in 0..3 {
            mats.push(Matrix::identity(dim).add(&uniform(dim, dim, 0.01)?)?);
        }
        let v = mats.pop().unwrap();
        let k = mats.pop().unwrap();
        let q = mats.pop().unwrap();
        AttentionWeights::new(q, k, v, cfg.fusion_heads)
    };
    let fusion_t2i = fusion()?;
    let fusion_i2t = fusion()?;
    Ok(Trainables {
        prompt,
        fusion_t2i,
        fusion_i2t,
        learnable_key: key,
    })
}

fn with_epoch(e: Error, epoch: usize) -> Error {
    match e {
        Error::Numeric { term, value, .. } => Error::Numeric {
            stage: format!("epoch {epoch}"),
            term,
            value,
        },
        other => other,
    }
}

/// Train one task's parameters and condense its memory entry.
pub fn train_task(
    name: &str,
    samples: &[TrainSample],
    text: &TextFeature,
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if samples.is_empty() {
        return Err(Error::Size(format!("task {name:?} has no training items")));
    }
    let dim = samples[0].features.dim();
    if text.dim() != dim {
        return Err(Error::shape(format!(
            "text feature has dim {}, patch features {dim}",
            text.dim()
        )));
    }

    let mut batch = Vec::with_capacity(samples.len());
    for s in samples {
        let (gh, gw) = s.features.grid();
        let key_feats = s.features.tap(cfg.key_layer)?;
        batch.push(TrainingImage {
            score_feats: s.features.tap(cfg.score_layer)?.clone(),
            query: key_feats.mean_row(),
            labels: patchify_labels(&s.mask, gh, gw)?,
        });
    }
    let queries: Vec<&Vector> = batch.iter().map(|b| &b.query).collect();
    let mut key = Vector::zeros(dim);
    for q in &queries {
        for (a, b) in key.as_mut_slice().iter_mut().zip(q.as_slice()) {
            *a += b / queries.len() as f64;
        }
    }

    let ctx = LossContext {
        prefix_weights: AttentionWeights::identity(dim, cfg.prefix_heads)?,
        text: text.values().clone(),
        tau: cfg.tau,
        lambda: cfg.lambda,
        contrast: ContrastOptions {
            exclude_self_pairs: cfg.exclude_self_pairs,
        },
        batch_wide_contrast: cfg.batch_wide_contrast,
    };
    let mut params = init_params(cfg, dim, key)?;
    let mut trace = Vec::with_capacity(cfg.epochs + 1);
    for epoch in 0..cfg.epochs {
        let (loss, mut grad) = grad_total_loss(&params, &batch, &ctx).map_err(|e| with_epoch(e, epoch))?;
        trace.push(loss);
        if cfg.freeze_fusion {
            grad.zero_fusion();
        }
        let mut step = cfg.learning_rate;
        let g_norm = crate::numerics::norm(&grad.flatten());
        if cfg.max_grad_norm > 0.0 && g_norm > cfg.max_grad_norm {
            step *= cfg.max_grad_norm / g_norm;
        }
        params.axpy(-step, &grad);
        if !params.is_finite() {
            return Err(Error::Numeric {
                stage: format!("epoch {epoch}"),
                term: "parameters",
                value: f64::NAN,
            });
        }
    }
    trace.push(batch_loss(&params, &batch, &ctx).map_err(|e| with_epoch(e, cfg.epochs))?);

    let fused: Vec<Matrix> = batch
        .par_iter()
        .map(|img| {
            crate::objectives::fused_features(&img.score_feats, &params, &ctx.prefix_weights, &ctx.text)
                .map(|f| f.image_enhanced)
        })
        .collect::<Result<_>>()?;
    let fused_stack = Matrix::vstack(&fused.iter().collect::<Vec<_>>())?;
    let key_feats = match cfg.key_source {
        KeySource::PooledImage => Matrix::vstack(
            &batch
                .iter()
                .map(|b| b.query.to_row_matrix())
                .collect::<Vec<_>>()
                .iter()
                .collect::<Vec<_>>(),
        )?,
        KeySource::Patches => {
            let taps = samples
                .iter()
                .map(|s| s.features.tap(cfg.key_layer))
                .collect::<Result<Vec<_>>>()?;
            Matrix::vstack(&taps)?
        }
    };
    let fps_start = match cfg.fps_start_seed {
        Some(s) => ChaCha8Rng::seed_from_u64(s).random_range(0..usize::MAX),
        None => 0,
    };
    let entry = build_entry(EntryParts {
        name: name.to_string(),
        key_feats,
        fused_feats: fused_stack,
        params,
        prefix_weights: ctx.prefix_weights,
        text: ctx.text,
        key_ratio: cfg.key_ratio,
        coreset_ratio: cfg.coreset_ratio,
        fps_start,
    })?;
    Ok(TrainOutcome { entry, trace })
}

pub fn trace_csv(trace: &[LossBreakdown]) -> String {
    let mut out = String::from("epoch,l_contra,l_cross,l_kp,l_all\n");
    for (i, l) in trace.iter().enumerate() {
        writeln!(out, "{i},{},{},{},{}", l.l_contra, l.l_cross, l.l_kp, l.l_all).unwrap();
    }
    out
}

pub fn write_trace_csv(path: impl AsRef<Path>, trace: &[LossBreakdown]) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, trace_csv(trace)).map_err(|e| Error::io(path, e))
}

/// Load every task's samples and text feature from a manifest entry.
pub fn load_task_inputs(task: &TaskSpec, backbone: &Backbone) -> Result<(Vec<TrainSample>, TextFeature)> {
    let samples = load_train_samples(task, backbone)?;
    let text = crate::backbone::extract_text(&task.text_feature)?;
    Ok((samples, text))
}

/// Seed used for the task at `index` of a continual run.
pub fn task_seed(base: u64, index: usize) -> u64 {
    base.wrapping_add((index as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15))
}

//! Training objectives and their gradients.
//!
//! The per-image forward path is
//!
//! ```text
//! z = x + prefix_attention(x, prompt, frozen)        (score-layer features)
//! E = z + attn(z -> text, w_t2i)                     (image_enhanced)
//! r = text + attn(text -> z, w_i2t)                  (text_refined)
//! ```
//!
//! and the loss is `L_contra(E) + L_cross(E, r) + λ·L_kp(query, learnable_key)`.
//! Gradients are hand-derived; `grad_total_loss` is checked against central
//! finite differences in tests.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::attention::{
    attention_backward, attention_forward, fuse_multimodal_backward, fuse_multimodal_cached, AttentionCache,
    AttentionWeights, FusedFeatures, FusionCache, PromptParams,
};
use crate::error::{Error, Result};
use crate::numerics::{cosine_similarity, dot, log_sum_exp, norm, Matrix, Vector};

pub const DEFAULT_TAU: f64 = 0.07;
pub const DEFAULT_LAMBDA: f64 = 1.0;

/// Region id of every patch of one image.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PatchLabels(Vec<u32>);

impl PatchLabels {
    pub fn new(labels: Vec<u32>) -> Self {
        Self(labels)
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[u32] {
        &self.0
    }

    pub fn region_count(&self) -> usize {
        let mut ids = self.0.clone();
        ids.sort_unstable();
        ids.dedup();
        ids.len()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l_contra: f64,
    pub l_cross: f64,
    pub l_kp: f64,
    pub lambda: f64,
    pub l_all: f64,
}

pub fn total_loss(l_contra: f64, l_cross: f64, l_kp: f64, lambda: f64) -> LossBreakdown {
    LossBreakdown {
        l_contra,
        l_cross,
        l_kp,
        lambda,
        l_all: l_contra + l_cross + lambda * l_kp,
    }
}

fn unit_rows(f: &Matrix) -> Result<(Matrix, Vec<f64>)> {
    let mut units = f.clone();
    let mut norms = Vec::with_capacity(f.rows());
    for r in 0..f.rows() {
        let n = norm(f.row(r));
        if n == 0.0 {
            return Err(Error::DegenerateVector(format!("patch row {r} has zero norm")));
        }
        units.row_mut(r).iter_mut().for_each(|v| *v /= n);
        norms.push(n);
    }
    Ok((units, norms))
}

/// `S[i][j] = cos(f_i, f_j) / tau`.
pub fn similarity_matrix(f: &Matrix, tau: f64) -> Result<Matrix> {
    if !(tau > 0.0) {
        return Err(Error::Config(format!("temperature {tau} must be positive")));
    }
    let (u, _) = unit_rows(f)?;
    let m = f.rows();
    let mut s = Matrix::zeros(m, m);
    for i in 0..m {
        s.set(i, i, 1.0 / tau);
        for j in i + 1..m {
            let v = dot(u.row(i), u.row(j)) / tau;
            s.set(i, j, v);
            s.set(j, i, v);
        }
    }
    Ok(s)
}

/// Binary same-region mask.
pub fn region_mask(labels: &PatchLabels) -> Matrix {
    let l = labels.as_slice();
    let m = l.len();
    let mut out = Matrix::zeros(m, m);
    for i in 0..m {
        for j in 0..m {
            if l[i] == l[j] {
                out.set(i, j, 1.0);
            }
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct ContrastOptions {
    pub exclude_self_pairs: bool,
}

/// Region-level contrastive loss, self-pairs included.
pub fn region_contrastive_loss(f: &Matrix, labels: &PatchLabels, tau: f64) -> Result<f64> {
    Ok(region_contrastive(f, labels, tau, ContrastOptions::default(), false)?.0)
}

pub fn region_contrastive_loss_with(
    f: &Matrix,
    labels: &PatchLabels,
    tau: f64,
    opts: ContrastOptions,
) -> Result<f64> {
    Ok(region_contrastive(f, labels, tau, opts, false)?.0)
}

/// Loss and (optionally) its gradient with respect to `f`.
fn region_contrastive(
    f: &Matrix,
    labels: &PatchLabels,
    tau: f64,
    opts: ContrastOptions,
    want_grad: bool,
) -> Result<(f64, Option<Matrix>)> {
    if labels.len() != f.rows() {
        return Err(Error::shape(format!(
            "{} labels for {} patches",
            labels.len(),
            f.rows()
        )));
    }
    let s = similarity_matrix(f, tau)?;
    let l = labels.as_slice();
    let m = f.rows();
    let inv = 1.0 / (m * m) as f64;
    let mut loss = 0.0;
    // dL/dS
    let mut g = Matrix::zeros(m, m);
    for i in 0..m {
        for j in 0..m {
            if opts.exclude_self_pairs && i == j {
                continue;
            }
            let sij = s.get(i, j);
            if l[i] == l[j] {
                loss -= sij;
                g.set(i, j, -inv);
            } else {
                let e = sij.exp();
                loss += e;
                g.set(i, j, e * inv);
            }
        }
    }
    loss *= inv;
    if !want_grad {
        return Ok((loss, None));
    }
    let (u, norms) = unit_rows(f)?;
    let d = f.cols();
    let mut d_f = Matrix::zeros(m, d);
    for i in 0..m {
        let mut d_u = vec![0.0; d];
        for j in 0..m {
            let coeff = (g.get(i, j) + g.get(j, i)) / tau;
            if coeff != 0.0 {
                for (a, b) in d_u.iter_mut().zip(u.row(j)) {
                    *a += coeff * b;
                }
            }
        }
        let ui = u.row(i);
        let radial = dot(ui, &d_u);
        for (k, out) in d_f.row_mut(i).iter_mut().enumerate() {
            *out = (d_u[k] - ui[k] * radial) / norms[i];
        }
    }
    Ok((loss, Some(d_f)))
}

/// Cross-modal contrastive loss for one image with its (single-token) text feature.
pub fn cross_modal_loss(f: &Matrix, text: &[f64], tau: f64) -> Result<f64> {
    Ok(cross_modal(f, text, tau, false)?.0)
}

/// Batch form: mean of the per-image losses.
pub fn cross_modal_loss_batch(images: &[(&Matrix, &[f64])], tau: f64) -> Result<f64> {
    if images.is_empty() {
        return Err(Error::Size("empty batch".into()));
    }
    let mut total = 0.0;
    for (f, t) in images {
        total += cross_modal_loss(f, t, tau)?;
    }
    Ok(total / images.len() as f64)
}

fn cross_modal(
    f: &Matrix,
    text: &[f64],
    tau: f64,
    want_grad: bool,
) -> Result<(f64, Option<(Matrix, Vec<f64>)>)> {
    if !(tau > 0.0) {
        return Err(Error::Config(format!("temperature {tau} must be positive")));
    }
    if text.len() != f.cols() {
        return Err(Error::shape(format!(
            "text dim {} does not match patch dim {}",
            text.len(),
            f.cols()
        )));
    }
    let t_norm = norm(text);
    if t_norm == 0.0 {
        return Err(Error::DegenerateVector("text feature has zero norm".into()));
    }
    let (u, norms) = unit_rows(f)?;
    let t_hat: Vec<f64> = text.iter().map(|v| v / t_norm).collect();
    let m = f.rows();
    let cos: Vec<f64> = (0..m).map(|j| dot(u.row(j), &t_hat)).collect();
    let logits: Vec<f64> = cos.iter().map(|c| c / tau).collect();
    let lse = log_sum_exp(&logits);
    let mean = logits.iter().sum::<f64>() / m as f64;
    let loss = lse - mean;
    if !want_grad {
        return Ok((loss, None));
    }
    let d = f.cols();
    let mut d_f = Matrix::zeros(m, d);
    let mut d_t = vec![0.0; d];
    for j in 0..m {
        let p = (logits[j] - lse).exp();
        let d_cos = (p - 1.0 / m as f64) / tau;
        let uj = u.row(j);
        for (k, out) in d_f.row_mut(j).iter_mut().enumerate() {
            *out = d_cos * (t_hat[k] - cos[j] * uj[k]) / norms[j];
        }
        for (k, out) in d_t.iter_mut().enumerate() {
            *out += d_cos * (uj[k] - cos[j] * t_hat[k]) / t_norm;
        }
    }
    Ok((loss, Some((d_f, d_t))))
}

/// Cosine distance between a query and the key it was routed to.
pub fn key_prompt_loss(query: &[f64], matched_key: &[f64]) -> Result<f64> {
    Ok(1.0 - cosine_similarity(query, matched_key)?)
}

fn key_prompt_grad(query: &[f64], key: &[f64]) -> Result<Vec<f64>> {
    let c = cosine_similarity(query, key)?;
    let (nq, nk) = (norm(query), norm(key));
    Ok(query
        .iter()
        .zip(key)
        .map(|(q, k)| -(q / nq - c * k / nk) / nk)
        .collect())
}

/// Prompt-adapted score-layer features: `x + prefix_attention(x)`.
pub fn adapt_features(
    x: &Matrix,
    prompt: &PromptParams,
    prefix_weights: &AttentionWeights,
) -> Result<Matrix> {
    let cache = attention_forward(x, x, Some(prompt), prefix_weights)?;
    x.add(cache.output())
}

/// Parameters trained per task.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trainables {
    pub prompt: PromptParams,
    pub fusion_t2i: AttentionWeights,
    pub fusion_i2t: AttentionWeights,
    pub learnable_key: Vector,
}

impl Trainables {
    pub fn zeros_like(&self) -> Self {
        let (lp, d) = self.prompt.p_key.shape();
        Self {
            prompt: PromptParams {
                p_key: Matrix::zeros(lp, d),
                p_value: Matrix::zeros(lp, d),
            },
            fusion_t2i: self.fusion_t2i.zeros_like(),
            fusion_i2t: self.fusion_i2t.zeros_like(),
            learnable_key: Vector::zeros(self.learnable_key.dim()),
        }
    }

    fn parts(&self) -> Vec<&[f64]> {
        let mut v: Vec<&[f64]> = vec![self.prompt.p_key.data(), self.prompt.p_value.data()];
        v.extend(self.fusion_t2i.matrices().map(Matrix::data));
        v.extend(self.fusion_i2t.matrices().map(Matrix::data));
        v.push(self.learnable_key.as_slice());
        v
    }

    fn parts_mut(&mut self) -> Vec<&mut [f64]> {
        let mut v: Vec<&mut [f64]> = vec![self.prompt.p_key.data_mut(), self.prompt.p_value.data_mut()];
        v.extend(self.fusion_t2i.matrices_mut().map(Matrix::data_mut));
        v.extend(self.fusion_i2t.matrices_mut().map(Matrix::data_mut));
        v.push(self.learnable_key.as_mut_slice());
        v
    }

    /// All entries in a fixed order: prompt key, prompt value, t2i (q,k,v),
    /// i2t (q,k,v), learnable key.
    pub fn flatten(&self) -> Vec<f64> {
        self.parts().concat()
    }

    pub fn num_params(&self) -> usize {
        self.parts().iter().map(|p| p.len()).sum()
    }

    pub fn set_flat(&mut self, flat: &[f64]) {
        assert_eq!(flat.len(), self.num_params(), "flat parameter length");
        let mut offset = 0;
        for part in self.parts_mut() {
            part.copy_from_slice(&flat[offset..offset + part.len()]);
            offset += part.len();
        }
    }

    /// Offsets of the fusion-weight and learnable-key blocks in `flatten()` order.
    pub fn layout(&self) -> ParamLayout {
        let prompt = 2 * self.prompt.p_key.data().len();
        let fusion = 6 * self.fusion_t2i.dim() * self.fusion_t2i.dim();
        ParamLayout {
            prompt: 0..prompt,
            fusion: prompt..prompt + fusion,
            key: prompt + fusion..prompt + fusion + self.learnable_key.dim(),
        }
    }

    pub(crate) fn axpy(&mut self, alpha: f64, g: &Trainables) {
        for (p, q) in self.parts_mut().into_iter().zip(g.parts()) {
            for (a, b) in p.iter_mut().zip(q) {
                *a += alpha * b;
            }
        }
    }

    fn add_assign(&mut self, g: &Trainables) {
        self.axpy(1.0, g);
    }

    pub(crate) fn zero_fusion(&mut self) {
        for m in self.fusion_t2i.matrices_mut() {
            m.data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
        for m in self.fusion_i2t.matrices_mut() {
            m.data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
    }

    pub fn is_finite(&self) -> bool {
        self.parts().iter().all(|p| p.iter().all(|v| v.is_finite()))
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParamLayout {
    pub prompt: std::ops::Range<usize>,
    pub fusion: std::ops::Range<usize>,
    pub key: std::ops::Range<usize>,
}

/// Everything the loss needs that is not trained.
#[derive(Debug, Clone)]
pub struct LossContext {
    pub prefix_weights: AttentionWeights,
    pub text: Vector,
    pub tau: f64,
    pub lambda: f64,
    pub contrast: ContrastOptions,
    pub batch_wide_contrast: bool,
}

/// One training image: score-layer features, pooled key-layer query, patch labels.
#[derive(Debug, Clone)]
pub struct TrainingImage {
    pub score_feats: Matrix,
    pub query: Vector,
    pub labels: PatchLabels,
}

/// Fused features of one image under a task's parameters.
pub fn fused_features(
    x: &Matrix,
    params: &Trainables,
    prefix_weights: &AttentionWeights,
    text: &Vector,
) -> Result<FusedFeatures> {
    let z = adapt_features(x, &params.prompt, prefix_weights)?;
    Ok(fuse_multimodal_cached(&z, text, &params.fusion_t2i, &params.fusion_i2t)?.0)
}

struct ImageForward {
    prefix: AttentionCache,
    fusion: FusionCache,
    fused: FusedFeatures,
}

fn forward_one(img: &TrainingImage, params: &Trainables, ctx: &LossContext) -> Result<ImageForward> {
    let prefix = attention_forward(
        &img.score_feats,
        &img.score_feats,
        Some(&params.prompt),
        &ctx.prefix_weights,
    )?;
    let z = img.score_feats.add(prefix.output())?;
    let (fused, fusion) = fuse_multimodal_cached(&z, &ctx.text, &params.fusion_t2i, &params.fusion_i2t)?;
    Ok(ImageForward {
        prefix,
        fusion,
        fused,
    })
}

fn check_finite(stage: &str, term: &'static str, value: f64) -> Result<()> {
    if value.is_finite() {
        Ok(())
    } else {
        Err(Error::Numeric {
            stage: stage.to_string(),
            term,
            value,
        })
    }
}

/// Batch loss without gradients.
pub fn batch_loss(params: &Trainables, batch: &[TrainingImage], ctx: &LossContext) -> Result<LossBreakdown> {
    Ok(evaluate(params, batch, ctx, false)?.0)
}

/// Batch loss and its gradient with respect to every trainable entry.
pub fn grad_total_loss(
    params: &Trainables,
    batch: &[TrainingImage],
    ctx: &LossContext,
) -> Result<(LossBreakdown, Trainables)> {
    let (loss, grad) = evaluate(params, batch, ctx, true)?;
    Ok((loss, grad.expect("gradient requested")))
}

fn evaluate(
    params: &Trainables,
    batch: &[TrainingImage],
    ctx: &LossContext,
    want_grad: bool,
) -> Result<(LossBreakdown, Option<Trainables>)> {
    if batch.is_empty() {
        return Err(Error::Size("empty training batch".into()));
    }
    let n = batch.len() as f64;
    let forwards: Vec<ImageForward> = batch
        .par_iter()
        .map(|img| forward_one(img, params, ctx))
        .collect::<Result<_>>()?;

    // upstream gradients on image_enhanced from the region loss
    let mut contra_grads: Vec<Option<Matrix>> = Vec::with_capacity(batch.len());
    let l_contra = if ctx.batch_wide_contrast {
        let all = Matrix::vstack(
            &forwards
                .iter()
                .map(|f| &f.fused.image_enhanced)
                .collect::<Vec<_>>(),
        )?;
        let labels = PatchLabels::new(
            batch
                .iter()
                .flat_map(|b| b.labels.as_slice().iter().copied())
                .collect(),
        );
        let (loss, grad) = region_contrastive(&all, &labels, ctx.tau, ctx.contrast, want_grad)?;
        if let Some(g) = grad {
            let mut start = 0;
            for f in &forwards {
                let m = f.fused.image_enhanced.rows();
                contra_grads.push(Some(g.slice_rows(start, start + m)));
                start += m;
            }
        }
        loss
    } else {
        let per: Vec<(f64, Option<Matrix>)> = forwards
            .par_iter()
            .zip(batch)
            .map(|(f, img)| {
                region_contrastive(
                    &f.fused.image_enhanced,
                    &img.labels,
                    ctx.tau,
                    ctx.contrast,
                    want_grad,
                )
            })
            .collect::<Result<_>>()?;
        let mut total = 0.0;
        for (loss, grad) in per {
            total += loss;
            contra_grads.push(grad.map(|g| g.scale(1.0 / n)));
        }
        total / n
    };
    check_finite("loss evaluation", "l_contra", l_contra)?;

    let cross: Vec<(f64, Option<(Matrix, Vec<f64>)>)> = forwards
        .par_iter()
        .map(|f| {
            cross_modal(
                &f.fused.image_enhanced,
                f.fused.text_refined.as_slice(),
                ctx.tau,
                want_grad,
            )
        })
        .collect::<Result<_>>()?;
    let l_cross = cross.iter().map(|c| c.0).sum::<f64>() / n;
    check_finite("loss evaluation", "l_cross", l_cross)?;

    let key = params.learnable_key.as_slice();
    let mut l_kp = 0.0;
    for img in batch {
        l_kp += key_prompt_loss(img.query.as_slice(), key)?;
    }
    l_kp /= n;
    check_finite("loss evaluation", "l_kp", l_kp)?;

    let loss = total_loss(l_contra, l_cross, l_kp, ctx.lambda);
    check_finite("loss evaluation", "l_all", loss.l_all)?;
    if !want_grad {
        return Ok((loss, None));
    }

    let per_image: Vec<Trainables> = forwards
        .par_iter()
        .zip(cross.into_par_iter())
        .zip(contra_grads.into_par_iter())
        .map(|((f, (_, cross_grad)), contra_grad)| {
            let (d_e_cross, d_r) = cross_grad.expect("gradient requested");
            let mut d_e = d_e_cross.scale(1.0 / n);
            if let Some(g) = contra_grad {
                d_e.add_assign(&g);
            }
            let d_r = Vector::from_raw(d_r.into_iter().map(|v| v / n).collect());
            let fg = fuse_multimodal_backward(&f.fusion, &d_e, &d_r)?;
            let pg = attention_backward(&f.prefix, &fg.d_image)?;
            let mut g = params.zeros_like();
            g.prompt = pg.d_prompt;
            g.fusion_t2i = fg.d_t2i;
            g.fusion_i2t = fg.d_i2t;
            Ok(g)
        })
        .collect::<Result<_>>()?;

    let mut grad = params.zeros_like();
    for g in &per_image {
        grad.add_assign(g);
    }
    if ctx.lambda != 0.0 {
        let d_key = grad.learnable_key.as_mut_slice();
        for img in batch {
            let g = key_prompt_grad(img.query.as_slice(), key)?;
            for (a, b) in d_key.iter_mut().zip(g) {
                *a += ctx.lambda * b / n;
            }
        }
    }
    Ok((loss, Some(grad)))
}

/// Central finite-difference gradient of the batch loss (test oracle).
pub fn finite_difference_grad(
    params: &Trainables,
    batch: &[TrainingImage],
    ctx: &LossContext,
    step: f64,
) -> Result<Vec<f64>> {
    let base = params.flatten();
    let mut probe = params.clone();
    let mut out = Vec::with_capacity(base.len());
    let mut flat = base.clone();
    for i in 0..base.len() {
        flat[i] = base[i] + step;
        probe.set_flat(&flat);
        let plus = batch_loss(&probe, batch, ctx)?.l_all;
        flat[i] = base[i] - step;
        probe.set_flat(&flat);
        let minus = batch_loss(&probe, batch, ctx)?.l_all;
        flat[i] = base[i];
        out.push((plus - minus) / (2.0 * step));
    }
    Ok(out)
}

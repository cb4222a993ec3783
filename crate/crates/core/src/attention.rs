//! Prefix-tuned self-attention and text/image cross-attention.
//!
//! Every forward pass keeps the intermediates needed by its backward pass in
//! an [`AttentionCache`]; gradients are hand-derived and checked against
//! finite differences in the objectives tests.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{matmul, matmul_transposed, softmax_in_place, Matrix, Vector};

/// Learnable key/value prefixes, `length × dim` each.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptParams {
    pub p_key: Matrix,
    pub p_value: Matrix,
}

impl PromptParams {
    pub fn new(p_key: Matrix, p_value: Matrix) -> Result<Self> {
        if p_key.shape() != p_value.shape() {
            return Err(Error::shape(format!(
                "prompt key {:?} and value {:?} differ",
                p_key.shape(),
                p_value.shape()
            )));
        }
        Ok(Self { p_key, p_value })
    }

    pub fn empty(dim: usize) -> Self {
        Self {
            p_key: Matrix::zeros(0, dim),
            p_value: Matrix::zeros(0, dim),
        }
    }

    pub fn length(&self) -> usize {
        self.p_key.rows()
    }

    pub fn dim(&self) -> usize {
        self.p_key.cols()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttentionWeights {
    pub w_q: Matrix,
    pub w_k: Matrix,
    pub w_v: Matrix,
    pub head_count: usize,
}

impl AttentionWeights {
    pub fn new(w_q: Matrix, w_k: Matrix, w_v: Matrix, head_count: usize) -> Result<Self> {
        let d = w_q.rows();
        for (name, w) in [("w_q", &w_q), ("w_k", &w_k), ("w_v", &w_v)] {
            if w.shape() != (d, d) {
                return Err(Error::shape(format!(
                    "{name} is {:?}, expected {d}x{d}",
                    w.shape()
                )));
            }
        }
        if head_count == 0 || d % head_count != 0 {
            return Err(Error::shape(format!(
                "dimension {d} is not divisible into {head_count} heads"
            )));
        }
        Ok(Self {
            w_q,
            w_k,
            w_v,
            head_count,
        })
    }

    pub fn identity(dim: usize, head_count: usize) -> Result<Self> {
        Self::new(
            Matrix::identity(dim),
            Matrix::identity(dim),
            Matrix::identity(dim),
            head_count,
        )
    }

    pub fn dim(&self) -> usize {
        self.w_q.rows()
    }

    pub fn head_dim(&self) -> usize {
        self.dim() / self.head_count
    }

    pub(crate) fn zeros_like(&self) -> Self {
        let d = self.dim();
        Self {
            w_q: Matrix::zeros(d, d),
            w_k: Matrix::zeros(d, d),
            w_v: Matrix::zeros(d, d),
            head_count: self.head_count,
        }
    }

    pub(crate) fn matrices(&self) -> [&Matrix; 3] {
        [&self.w_q, &self.w_k, &self.w_v]
    }

    pub(crate) fn matrices_mut(&mut self) -> [&mut Matrix; 3] {
        [&mut self.w_q, &mut self.w_k, &mut self.w_v]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FusedFeatures {
    pub image_enhanced: Matrix,
    pub text_refined: Vector,
}

/// Forward intermediates for one attention call.
#[derive(Debug, Clone)]
pub struct AttentionCache {
    x_query: Matrix,
    x_kv: Matrix,
    queries: Matrix,
    keys: Matrix,
    values: Matrix,
    /// Softmax weights per head, each `A × (L_p + B)`.
    weights: Vec<Matrix>,
    weights_used: AttentionWeights,
    prompt_len: usize,
    head_count: usize,
    output: Matrix,
}

impl AttentionCache {
    pub fn output(&self) -> &Matrix {
        &self.output
    }

    pub fn into_output(self) -> Matrix {
        self.output
    }

    /// Softmax weights for one head.
    pub fn head_weights(&self, head: usize) -> &Matrix {
        &self.weights[head]
    }
}

/// Gradients of a scalar with respect to the inputs of one attention call.
#[derive(Debug, Clone)]
pub struct AttentionGrads {
    pub d_x_query: Matrix,
    pub d_x_kv: Matrix,
    pub d_weights: AttentionWeights,
    pub d_prompt: PromptParams,
}

/// Multi-head scaled dot-product attention with optional key/value prefixes.
///
/// queries = x_query·w_q, keys = [p_key; x_kv·w_k], values = [p_value; x_kv·w_v].
pub fn attention_forward(
    x_query: &Matrix,
    x_kv: &Matrix,
    prompt: Option<&PromptParams>,
    w: &AttentionWeights,
) -> Result<AttentionCache> {
    let d = w.dim();
    if x_query.cols() != d || x_kv.cols() != d {
        return Err(Error::shape(format!(
            "attention inputs {:?}/{:?} do not match weight dim {d}",
            x_query.shape(),
            x_kv.shape()
        )));
    }
    if let Some(p) = prompt {
        if p.length() > 0 && p.dim() != d {
            return Err(Error::shape(format!("prompt dim {} != {d}", p.dim())));
        }
    }
    let queries = matmul(x_query, &w.w_q)?;
    let mut keys = matmul(x_kv, &w.w_k)?;
    let mut values = matmul(x_kv, &w.w_v)?;
    let prompt_len = prompt.map_or(0, PromptParams::length);
    if prompt_len > 0 {
        let p = prompt.expect("nonzero prompt length");
        keys = p.p_key.concat_rows(&keys)?;
        values = p.p_value.concat_rows(&values)?;
    }
    if keys.rows() == 0 {
        return Err(Error::shape("attention over zero keys".to_string()));
    }

    let h = w.head_count;
    let hd = w.head_dim();
    let scale = 1.0 / (hd as f64).sqrt();
    let mut output = Matrix::zeros(x_query.rows(), d);
    let mut weights = Vec::with_capacity(h);
    for head in 0..h {
        let (c0, c1) = (head * hd, (head + 1) * hd);
        let q = queries.slice_cols(c0, c1);
        let k = keys.slice_cols(c0, c1);
        let v = values.slice_cols(c0, c1);
        let mut a = matmul_transposed(&q, &k)?.scale(scale);
        for r in 0..a.rows() {
            softmax_in_place(a.row_mut(r));
        }
        output.set_cols(c0, &matmul(&a, &v)?);
        weights.push(a);
    }

    Ok(AttentionCache {
        x_query: x_query.clone(),
        x_kv: x_kv.clone(),
        queries,
        keys,
        values,
        weights,
        weights_used: w.clone(),
        prompt_len,
        head_count: h,
        output,
    })
}

pub fn attention_backward(cache: &AttentionCache, d_out: &Matrix) -> Result<AttentionGrads> {
    let d = cache.queries.cols();
    if d_out.shape() != cache.output.shape() {
        return Err(Error::shape(format!(
            "upstream gradient {:?} does not match output {:?}",
            d_out.shape(),
            cache.output.shape()
        )));
    }
    let hd = d / cache.head_count;
    let scale = 1.0 / (hd as f64).sqrt();
    let mut d_queries = Matrix::zeros(cache.queries.rows(), d);
    let mut d_keys = Matrix::zeros(cache.keys.rows(), d);
    let mut d_values = Matrix::zeros(cache.values.rows(), d);

    for (head, a) in cache.weights.iter().enumerate() {
        let (c0, c1) = (head * hd, (head + 1) * hd);
        let q = cache.queries.slice_cols(c0, c1);
        let k = cache.keys.slice_cols(c0, c1);
        let v = cache.values.slice_cols(c0, c1);
        let d_o = d_out.slice_cols(c0, c1);

        d_values.set_cols(c0, &matmul(&a.transpose(), &d_o)?);
        let d_a = matmul_transposed(&d_o, &v)?;
        // softmax Jacobian, row by row
        let mut d_s = Matrix::zeros(a.rows(), a.cols());
        for r in 0..a.rows() {
            let (ar, dar) = (a.row(r), d_a.row(r));
            let inner: f64 = ar.iter().zip(dar).map(|(x, y)| x * y).sum();
            for (o, (x, y)) in d_s.row_mut(r).iter_mut().zip(ar.iter().zip(dar)) {
                *o = x * (y - inner) * scale;
            }
        }
        d_queries.set_cols(c0, &matmul(&d_s, &k)?);
        d_keys.set_cols(c0, &matmul(&d_s.transpose(), &q)?);
    }

    let lp = cache.prompt_len;
    let d_keys_x = d_keys.slice_rows(lp, d_keys.rows());
    let d_values_x = d_values.slice_rows(lp, d_values.rows());
    let d_prompt = PromptParams {
        p_key: d_keys.slice_rows(0, lp),
        p_value: d_values.slice_rows(0, lp),
    };

    let x_q_t = cache.x_query.transpose();
    let x_kv_t = cache.x_kv.transpose();
    let d_weights = AttentionWeights {
        w_q: matmul(&x_q_t, &d_queries)?,
        w_k: matmul(&x_kv_t, &d_keys_x)?,
        w_v: matmul(&x_kv_t, &d_values_x)?,
        head_count: cache.head_count,
    };
    // d_x = d_proj · wᵀ
    let w = &cache.weights_used;
    let d_x_query = matmul_transposed(&d_queries, &w.w_q)?;
    let mut d_x_kv = matmul_transposed(&d_keys_x, &w.w_k)?;
    d_x_kv.add_assign(&matmul_transposed(&d_values_x, &w.w_v)?);

    Ok(AttentionGrads {
        d_x_query,
        d_x_kv,
        d_weights,
        d_prompt,
    })
}

/// Prefix-tuned self-attention over `x_e`; output keeps the input length.
pub fn prefix_attention(x_e: &Matrix, prompt: &PromptParams, w: &AttentionWeights) -> Result<Matrix> {
    Ok(attention_forward(x_e, x_e, Some(prompt), w)?.into_output())
}

/// softmax((query_src·w_q)(kv_src·w_k)ᵀ/√d_head)·(kv_src·w_v)
pub fn cross_attention(query_src: &Matrix, kv_src: &Matrix, w: &AttentionWeights) -> Result<Matrix> {
    Ok(attention_forward(query_src, kv_src, None, w)?.into_output())
}

/// Forward intermediates of [`fuse_multimodal`].
#[derive(Debug, Clone)]
pub struct FusionCache {
    text_to_image: AttentionCache,
    image_to_text: AttentionCache,
}

#[derive(Debug, Clone)]
pub struct FusionGrads {
    pub d_image: Matrix,
    pub d_text: Vector,
    pub d_t2i: AttentionWeights,
    pub d_i2t: AttentionWeights,
}

/// Residual text↔image fusion.
///
/// image_enhanced = image + attn(image → text), text_refined = text + attn(text → image).
pub fn fuse_multimodal(
    image: &Matrix,
    text: &Vector,
    w_t2i: &AttentionWeights,
    w_i2t: &AttentionWeights,
) -> Result<FusedFeatures> {
    Ok(fuse_multimodal_cached(image, text, w_t2i, w_i2t)?.0)
}

pub fn fuse_multimodal_cached(
    image: &Matrix,
    text: &Vector,
    w_t2i: &AttentionWeights,
    w_i2t: &AttentionWeights,
) -> Result<(FusedFeatures, FusionCache)> {
    if text.dim() != image.cols() {
        return Err(Error::shape(format!(
            "text dim {} does not match image dim {}",
            text.dim(),
            image.cols()
        )));
    }
    let text_row = text.to_row_matrix();
    let text_to_image = attention_forward(image, &text_row, None, w_t2i)?;
    let image_to_text = attention_forward(&text_row, image, None, w_i2t)?;
    let image_enhanced = image.add(text_to_image.output())?;
    let refined = text_row.add(image_to_text.output())?;
    let fused = FusedFeatures {
        image_enhanced,
        text_refined: Vector::from_raw(refined.into_data()),
    };
    Ok((
        fused,
        FusionCache {
            text_to_image,
            image_to_text,
        },
    ))
}

pub fn fuse_multimodal_backward(
    cache: &FusionCache,
    d_image_enhanced: &Matrix,
    d_text_refined: &Vector,
) -> Result<FusionGrads> {
    let g_t2i = attention_backward(&cache.text_to_image, d_image_enhanced)?;
    let g_i2t = attention_backward(&cache.image_to_text, &d_text_refined.to_row_matrix())?;

    let mut d_image = d_image_enhanced.clone();
    d_image.add_assign(&g_t2i.d_x_query);
    d_image.add_assign(&g_i2t.d_x_kv);

    let mut d_text = d_text_refined.clone();
    for (acc, (a, b)) in d_text
        .as_mut_slice()
        .iter_mut()
        .zip(g_t2i.d_x_kv.row(0).iter().zip(g_i2t.d_x_query.row(0)))
    {
        *acc += a + b;
    }

    Ok(FusionGrads {
        d_image,
        d_text,
        d_t2i: g_t2i.d_weights,
        d_i2t: g_i2t.d_weights,
    })
}

//! Embedding head: projection, batch normalization, L2 normalization, plus
//! source-balanced template deployment.

use std::collections::HashMap;

use crate::descriptor::{ExampleRecord, SourceKind, Template};
use crate::error::{Error, Result};
use crate::ghostvlad::{self, GhostVladParams, PooledVector};
use crate::linalg::{axpy, dot, norm, Matrix};

pub const DEFAULT_BN_EPS: f64 = 1e-5;
pub const DEFAULT_BN_MOMENTUM: f64 = 0.9;

#[derive(Debug, Clone, PartialEq)]
pub struct HeadParams {
    /// `D × input_dim`
    pub proj: Matrix,
    pub proj_bias: Vec<f64>,
    pub bn_gamma: Vec<f64>,
    pub bn_beta: Vec<f64>,
    pub bn_mean: Vec<f64>,
    pub bn_var: Vec<f64>,
    /// Weight of the old running statistics in each update.
    pub bn_momentum: f64,
    pub bn_eps: f64,
}

impl HeadParams {
    /// Head with the given projection, unit BN scale and identity running
    /// statistics.
    pub fn new(proj: Matrix, proj_bias: Vec<f64>) -> Result<Self> {
        let d = proj.rows();
        if proj_bias.len() != d {
            return Err(Error::dims(d, proj_bias.len()));
        }
        Ok(HeadParams {
            proj,
            proj_bias,
            bn_gamma: vec![1.0; d],
            bn_beta: vec![0.0; d],
            bn_mean: vec![0.0; d],
            bn_var: vec![1.0; d],
            bn_momentum: DEFAULT_BN_MOMENTUM,
            bn_eps: DEFAULT_BN_EPS,
        })
    }

    pub fn output_dim(&self) -> usize {
        self.proj.rows()
    }

    pub fn input_dim(&self) -> usize {
        self.proj.cols()
    }

    pub fn validate(&self) -> Result<()> {
        let d = self.output_dim();
        for v in [&self.proj_bias, &self.bn_gamma, &self.bn_beta, &self.bn_mean, &self.bn_var] {
            if v.len() != d {
                return Err(Error::dims(d, v.len()));
            }
        }
        let finite = self.proj.is_finite()
            && [&self.proj_bias, &self.bn_gamma, &self.bn_beta, &self.bn_mean, &self.bn_var]
                .iter()
                .all(|v| v.iter().all(|x| x.is_finite()));
        if !finite || self.bn_var.iter().any(|v| *v < 0.0) {
            return Err(Error::ShapeMismatch("head parameters must be finite with bn_var >= 0".into()));
        }
        if !(self.bn_momentum > 0.0 && self.bn_momentum < 1.0 && self.bn_eps > 0.0) {
            return Err(Error::ShapeMismatch("bn momentum must be in (0,1), eps > 0".into()));
        }
        Ok(())
    }

    fn project(&self, pooled: &[f64]) -> Result<Vec<f64>> {
        if pooled.len() != self.input_dim() {
            return Err(Error::dims(self.input_dim(), pooled.len()));
        }
        let mut y = self.proj.matvec(pooled);
        y.iter_mut().zip(&self.proj_bias).for_each(|(a, b)| *a += b);
        Ok(y)
    }

    /// Folds batch statistics into the running estimates.
    pub fn update_running(&mut self, batch: &HeadBatch) {
        let m = self.bn_momentum;
        for d in 0..self.output_dim() {
            self.bn_mean[d] = m * self.bn_mean[d] + (1.0 - m) * batch.mean[d];
            self.bn_var[d] = m * self.bn_var[d] + (1.0 - m) * batch.var[d];
        }
    }
}

/// Unit-norm template representation.
#[derive(Debug, Clone, PartialEq)]
pub struct TemplateEmbedding(Vec<f64>);

impl TemplateEmbedding {
    /// Normalizes `v`; fails on an exactly-zero vector.
    pub fn from_unnormalized(v: Vec<f64>) -> Result<Self> {
        let n = norm(&v);
        if n == 0.0 || !n.is_finite() {
            return Err(Error::ZeroVector);
        }
        Ok(TemplateEmbedding(v.into_iter().map(|x| x / n).collect()))
    }

    /// Wraps values that are already unit norm (e.g. read from a file).
    pub fn from_values(v: Vec<f64>) -> Self {
        TemplateEmbedding(v)
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }
}

impl AsRef<[f64]> for TemplateEmbedding {
    fn as_ref(&self) -> &[f64] {
        &self.0
    }
}

/// Inference-mode head using running statistics.
pub fn head_infer(pooled: &[f64], params: &HeadParams) -> Result<TemplateEmbedding> {
    let y = params.project(pooled)?;
    let z = (0..params.output_dim())
        .map(|d| {
            params.bn_gamma[d] * (y[d] - params.bn_mean[d]) / (params.bn_var[d] + params.bn_eps).sqrt()
                + params.bn_beta[d]
        })
        .collect();
    TemplateEmbedding::from_unnormalized(z)
}

/// Training-mode forward state for a batch, kept for the backward pass.
#[derive(Debug, Clone)]
pub struct HeadBatch {
    pub outputs: Vec<TemplateEmbedding>,
    pub mean: Vec<f64>,
    /// Biased batch variance.
    pub var: Vec<f64>,
    inputs: Vec<Vec<f64>>,
    /// Normalized pre-affine activations.
    pub xhat: Vec<Vec<f64>>,
    inv_std: Vec<f64>,
    z_norm: Vec<f64>,
}

/// Training-mode forward with batch statistics. Running statistics are left
/// untouched; see [`HeadParams::update_running`].
pub fn head_forward_batch<P: AsRef<[f64]>>(pooled: &[P], params: &HeadParams) -> Result<HeadBatch> {
    if pooled.is_empty() {
        return Err(Error::EmptyInput);
    }
    let ys = pooled.iter().map(|p| params.project(p.as_ref())).collect::<Result<Vec<_>>>()?;
    let d = params.output_dim();
    let b = ys.len() as f64;
    let mean: Vec<f64> = (0..d).map(|j| ys.iter().map(|y| y[j]).sum::<f64>() / b).collect();
    let var: Vec<f64> =
        (0..d).map(|j| ys.iter().map(|y| (y[j] - mean[j]).powi(2)).sum::<f64>() / b).collect();
    let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + params.bn_eps).sqrt()).collect();

    let mut xhat = Vec::with_capacity(ys.len());
    let mut outputs = Vec::with_capacity(ys.len());
    let mut z_norm = Vec::with_capacity(ys.len());
    for y in &ys {
        let xh: Vec<f64> = (0..d).map(|j| (y[j] - mean[j]) * inv_std[j]).collect();
        let z: Vec<f64> = (0..d).map(|j| params.bn_gamma[j] * xh[j] + params.bn_beta[j]).collect();
        z_norm.push(norm(&z));
        outputs.push(TemplateEmbedding::from_unnormalized(z)?);
        xhat.push(xh);
    }
    Ok(HeadBatch {
        outputs,
        mean,
        var,
        inputs: pooled.iter().map(|p| p.as_ref().to_vec()).collect(),
        xhat,
        inv_std,
        z_norm,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HeadMode {
    Train,
    Infer,
}

/// Runs the head over a batch. `Train` normalizes with batch statistics and
/// updates the running statistics; `Infer` uses the running statistics.
pub fn head_forward<P: AsRef<[f64]>>(
    pooled: &[P],
    params: &mut HeadParams,
    mode: HeadMode,
) -> Result<Vec<TemplateEmbedding>> {
    match mode {
        HeadMode::Infer => pooled.iter().map(|p| head_infer(p.as_ref(), params)).collect(),
        HeadMode::Train => {
            let batch = head_forward_batch(pooled, params)?;
            params.update_running(&batch);
            Ok(batch.outputs)
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct HeadGrads {
    pub proj: Matrix,
    pub proj_bias: Vec<f64>,
    pub bn_gamma: Vec<f64>,
    pub bn_beta: Vec<f64>,
    pub pooled: Vec<Vec<f64>>,
}

/// Gradients of `Σ_b upstream_b · output_b` through the training-mode head,
/// including the coupling through the batch statistics.
pub fn head_backward(batch: &HeadBatch, params: &HeadParams, upstream: &[Vec<f64>]) -> Result<HeadGrads> {
    let n = batch.outputs.len();
    let d = params.output_dim();
    if upstream.len() != n {
        return Err(Error::dims(n, upstream.len()));
    }
    if let Some(u) = upstream.iter().find(|u| u.len() != d) {
        return Err(Error::dims(d, u.len()));
    }

    let mut grads = HeadGrads {
        proj: Matrix::zeros(d, params.input_dim()),
        proj_bias: vec![0.0; d],
        bn_gamma: vec![0.0; d],
        bn_beta: vec![0.0; d],
        pooled: Vec::with_capacity(n),
    };

    // through the final L2 normalization
    let gz: Vec<Vec<f64>> = (0..n)
        .map(|b| {
            let e = batch.outputs[b].values();
            let ge = &upstream[b];
            let proj = dot(e, ge);
            (0..d).map(|j| (ge[j] - e[j] * proj) / batch.z_norm[b]).collect()
        })
        .collect();

    let mut mean_gx = vec![0.0; d];
    let mut mean_gx_xh = vec![0.0; d];
    for b in 0..n {
        for j in 0..d {
            grads.bn_gamma[j] += gz[b][j] * batch.xhat[b][j];
            grads.bn_beta[j] += gz[b][j];
            let gx = gz[b][j] * params.bn_gamma[j];
            mean_gx[j] += gx / n as f64;
            mean_gx_xh[j] += gx * batch.xhat[b][j] / n as f64;
        }
    }
    for b in 0..n {
        let gy: Vec<f64> = (0..d)
            .map(|j| {
                let gx = gz[b][j] * params.bn_gamma[j];
                batch.inv_std[j] * (gx - mean_gx[j] - batch.xhat[b][j] * mean_gx_xh[j])
            })
            .collect();
        for (j, &g) in gy.iter().enumerate() {
            if g != 0.0 {
                axpy(g, &batch.inputs[b], grads.proj.row_mut(j));
            }
            grads.proj_bias[j] += g;
        }
        grads.pooled.push(params.proj.matvec_t(&gy));
    }
    Ok(grads)
}

pub fn similarity(a: &TemplateEmbedding, b: &TemplateEmbedding) -> f64 {
    dot(a.values(), b.values())
}

/// Deployment weights: 1 for a still, `1 / n_v` for each frame of a video with
/// `n_v` frames in the same template.
pub fn source_weights(records: &[ExampleRecord]) -> Vec<f64> {
    let mut frames: HashMap<u32, usize> = HashMap::new();
    for r in records.iter().filter(|r| r.source_kind == SourceKind::VideoFrame) {
        *frames.entry(r.media_id).or_default() += 1;
    }
    records
        .iter()
        .map(|r| match r.source_kind {
            SourceKind::Still => 1.0,
            SourceKind::VideoFrame => 1.0 / frames[&r.media_id] as f64,
        })
        .collect()
}

/// The aggregation stage in front of the head.
#[derive(Debug, Clone, PartialEq)]
pub enum Pooling {
    GhostVlad(GhostVladParams),
    /// Weighted mean of the descriptors followed by L2 normalization; the
    /// average-pooling baseline.
    Mean { dim: usize },
}

impl Pooling {
    pub fn input_dim(&self) -> usize {
        match self {
            Pooling::GhostVlad(p) => p.dim(),
            Pooling::Mean { dim } => *dim,
        }
    }

    pub fn output_dim(&self) -> usize {
        match self {
            Pooling::GhostVlad(p) => p.output_dim(),
            Pooling::Mean { dim } => *dim,
        }
    }

    pub fn pool<X: AsRef<[f64]>>(&self, xs: &[X], weights: &[f64]) -> Result<PooledVector> {
        match self {
            Pooling::GhostVlad(p) => ghostvlad::pool(xs, weights, p, true),
            Pooling::Mean { dim } => mean_pool(xs, weights, *dim),
        }
    }
}

fn mean_pool<X: AsRef<[f64]>>(xs: &[X], weights: &[f64], dim: usize) -> Result<PooledVector> {
    if xs.is_empty() {
        return Err(Error::EmptyInput);
    }
    if weights.len() != xs.len() {
        return Err(Error::dims(xs.len(), weights.len()));
    }
    let mut acc = vec![0.0; dim];
    for (x, &w) in xs.iter().zip(weights) {
        let x = x.as_ref();
        if x.len() != dim {
            return Err(Error::dims(dim, x.len()));
        }
        axpy(w, x, &mut acc);
    }
    let n = norm(&acc);
    if n > 0.0 {
        acc.iter_mut().for_each(|v| *v /= n);
    }
    Ok(PooledVector { values: acc, degenerate: n == 0.0 })
}

/// Source-balanced template embedding through GhostVLAD and the head in
/// inference mode.
pub fn embed_template(t: &Template, gv: &GhostVladParams, head: &HeadParams) -> Result<TemplateEmbedding> {
    embed_with(t, &Pooling::GhostVlad(gv.clone()), head)
}

pub(crate) fn embed_with(t: &Template, pooling: &Pooling, head: &HeadParams) -> Result<TemplateEmbedding> {
    if t.is_empty() {
        return Err(Error::EmptyTemplate);
    }
    let xs: Vec<&[f64]> = t.records().iter().map(|r| r.descriptor.values()).collect();
    let weights = source_weights(t.records());
    let pooled = pooling.pool(&xs, &weights)?;
    head_infer(&pooled.values, head)
}

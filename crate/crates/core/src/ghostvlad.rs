//! NetVLAD pooling with ghost clusters.
//!
//! Each descriptor is soft-assigned over `K + G` clusters; only the first `K`
//! (non-ghost) clusters aggregate residuals. The output is `K` contiguous
//! blocks of `D_F` values, optionally L2-normalized as a whole.

use crate::error::{Error, Result};
use crate::linalg::{axpy, dot, norm, softmax_masked, CompensatedSum, Matrix};

#[derive(Debug, Clone, PartialEq)]
pub struct GhostVladParams {
    /// `(K + G) × D_F`, ghost rows last.
    pub assign_w: Matrix,
    /// length `K + G`
    pub assign_b: Vec<f64>,
    /// `K × D_F`
    pub centers: Matrix,
    ghosts: usize,
    /// When set, ghost logits are excluded from the softmax, which is
    /// equivalent to `G = 0` without dropping the parameters.
    pub ghosts_masked: bool,
}

impl GhostVladParams {
    pub fn new(assign_w: Matrix, assign_b: Vec<f64>, centers: Matrix, ghosts: usize) -> Result<Self> {
        let clusters = centers.rows();
        if clusters == 0 {
            return Err(Error::ShapeMismatch("at least one non-ghost cluster required".into()));
        }
        if assign_w.rows() != clusters + ghosts {
            return Err(Error::dims(clusters + ghosts, assign_w.rows()));
        }
        if assign_b.len() != clusters + ghosts {
            return Err(Error::dims(clusters + ghosts, assign_b.len()));
        }
        if assign_w.cols() != centers.cols() {
            return Err(Error::dims(centers.cols(), assign_w.cols()));
        }
        let p = GhostVladParams { assign_w, assign_b, centers, ghosts, ghosts_masked: false };
        if !p.is_finite() {
            return Err(Error::ShapeMismatch("non-finite GhostVLAD parameter".into()));
        }
        Ok(p)
    }

    pub fn zeros(dim: usize, clusters: usize, ghosts: usize) -> Self {
        GhostVladParams {
            assign_w: Matrix::zeros(clusters + ghosts, dim),
            assign_b: vec![0.0; clusters + ghosts],
            centers: Matrix::zeros(clusters, dim),
            ghosts,
            ghosts_masked: false,
        }
    }

    /// Number of non-ghost clusters `K`.
    pub fn clusters(&self) -> usize {
        self.centers.rows()
    }

    pub fn ghosts(&self) -> usize {
        self.ghosts
    }

    pub fn dim(&self) -> usize {
        self.centers.cols()
    }

    pub fn output_dim(&self) -> usize {
        self.dim() * self.clusters()
    }

    pub fn is_finite(&self) -> bool {
        self.assign_w.is_finite() && self.centers.is_finite() && self.assign_b.iter().all(|b| b.is_finite())
    }

    fn is_masked(&self, k: usize) -> bool {
        self.ghosts_masked && k >= self.clusters()
    }

    fn check_dim(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.dim() {
            return Err(Error::dims(self.dim(), x.len()));
        }
        Ok(())
    }

    fn logits(&self, x: &[f64]) -> Vec<f64> {
        (0..self.assign_w.rows()).map(|k| dot(self.assign_w.row(k), x) + self.assign_b[k]).collect()
    }
}

/// Soft-assignment weights of `x` over all `K + G` clusters.
pub fn soft_assign(x: &[f64], params: &GhostVladParams) -> Result<Vec<f64>> {
    params.check_dim(x)?;
    Ok(assign(x, params))
}

fn assign(x: &[f64], params: &GhostVladParams) -> Vec<f64> {
    softmax_masked(&params.logits(x), |k| params.is_masked(k))
}

/// Output of [`pool`] and of the mean-pooling baseline.
#[derive(Debug, Clone, PartialEq)]
pub struct PooledVector {
    pub values: Vec<f64>,
    /// Set when normalization was requested but the aggregate was exactly
    /// zero; `values` is then returned un-normalized.
    pub degenerate: bool,
}

impl PooledVector {
    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

impl AsRef<[f64]> for PooledVector {
    fn as_ref(&self) -> &[f64] {
        &self.values
    }
}

fn check_inputs<X: AsRef<[f64]>>(xs: &[X], weights: &[f64], params: &GhostVladParams) -> Result<()> {
    if xs.is_empty() {
        return Err(Error::EmptyInput);
    }
    if weights.len() != xs.len() {
        return Err(Error::dims(xs.len(), weights.len()));
    }
    if let Some(w) = weights.iter().find(|w| !(w.is_finite() && **w >= 0.0)) {
        return Err(Error::ShapeMismatch(format!("example weight {w} is not a non-negative real")));
    }
    xs.iter().try_for_each(|x| params.check_dim(x.as_ref()))
}

fn aggregate<X: AsRef<[f64]>>(xs: &[X], weights: &[f64], params: &GhostVladParams) -> Vec<f64> {
    let dim = params.dim();
    let mut acc = CompensatedSum::new(params.output_dim());
    for (x, &w) in xs.iter().zip(weights) {
        let x = x.as_ref();
        let a = assign(x, params);
        for k in 0..params.clusters() {
            let scale = w * a[k];
            let c = params.centers.row(k);
            for j in 0..dim {
                acc.add(k * dim + j, scale * (x[j] - c[j]));
            }
        }
    }
    acc.finish()
}

/// Aggregates weighted descriptors into a `D_F × K` vector.
pub fn pool<X: AsRef<[f64]>>(
    xs: &[X],
    weights: &[f64],
    params: &GhostVladParams,
    normalize_output: bool,
) -> Result<PooledVector> {
    check_inputs(xs, weights, params)?;
    let mut values = aggregate(xs, weights, params);
    let mut degenerate = false;
    if normalize_output {
        let n = norm(&values);
        if n > 0.0 {
            values.iter_mut().for_each(|v| *v /= n);
        } else {
            degenerate = true;
        }
    }
    Ok(PooledVector { values, degenerate })
}

/// Norm of one example's addend to the un-normalized aggregate.
pub fn contribution(x: &[f64], weight: f64, params: &GhostVladParams) -> Result<f64> {
    params.check_dim(x)?;
    if weight == 0.0 {
        return Ok(0.0);
    }
    let a = assign(x, params);
    let mut sq = 0.0;
    for k in 0..params.clusters() {
        let s = weight * a[k];
        sq += params.centers.row(k).iter().zip(x).map(|(c, xj)| (s * (xj - c)).powi(2)).sum::<f64>();
    }
    Ok(sq.sqrt())
}

#[derive(Debug, Clone, PartialEq)]
pub struct PoolGrads {
    pub assign_w: Matrix,
    pub assign_b: Vec<f64>,
    pub centers: Matrix,
    pub inputs: Vec<Vec<f64>>,
}

/// Gradients of `upstream · pool(xs, weights, params, normalize_output)`.
pub fn backward<X: AsRef<[f64]>>(
    xs: &[X],
    weights: &[f64],
    params: &GhostVladParams,
    upstream: &[f64],
    normalize_output: bool,
) -> Result<PoolGrads> {
    check_inputs(xs, weights, params)?;
    if upstream.len() != params.output_dim() {
        return Err(Error::dims(params.output_dim(), upstream.len()));
    }
    let dim = params.dim();
    let kg = params.assign_w.rows();
    let mut grads = PoolGrads {
        assign_w: Matrix::zeros(kg, dim),
        assign_b: vec![0.0; kg],
        centers: Matrix::zeros(params.clusters(), dim),
        inputs: vec![vec![0.0; dim]; xs.len()],
    };

    // Gradient w.r.t. the un-normalized aggregate.
    let grad_v: Vec<f64> = if normalize_output {
        let v = aggregate(xs, weights, params);
        let n = norm(&v);
        if n == 0.0 {
            return Ok(grads);
        }
        let proj = dot(&v, upstream) / n;
        v.iter().zip(upstream).map(|(vi, gi)| (gi - vi / n * proj) / n).collect()
    } else {
        upstream.to_vec()
    };

    let mut q = vec![0.0; kg];
    for (i, (x, &w)) in xs.iter().zip(weights).enumerate() {
        let x = x.as_ref();
        let a = assign(x, params);
        let gx = &mut grads.inputs[i];
        q.iter_mut().for_each(|v| *v = 0.0);
        for k in 0..params.clusters() {
            let gv = &grad_v[k * dim..(k + 1) * dim];
            let c = params.centers.row(k);
            q[k] = w * gv.iter().zip(x.iter().zip(c)).map(|(g, (xj, cj))| g * (xj - cj)).sum::<f64>();
            let s = w * a[k];
            axpy(-s, gv, grads.centers.row_mut(k));
            axpy(s, gv, gx);
        }
        // softmax backward over all K + G logits; ghosts have q = 0
        let mean_q: f64 = a.iter().zip(&q).map(|(ak, qk)| ak * qk).sum();
        for k in 0..kg {
            let dl = a[k] * (q[k] - mean_q);
            if dl != 0.0 {
                axpy(dl, x, grads.assign_w.row_mut(k));
                grads.assign_b[k] += dl;
                axpy(dl, params.assign_w.row(k), gx);
            }
        }
    }
    Ok(grads)
}

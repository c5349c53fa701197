//! Fixtures and reference implementations shared by the integration tests.
//! Oracles here are written from the defining formulas and deliberately
//! avoid the library's internal helpers.

#![allow(dead_code)]

use ghostvlad::ghostvlad::GhostVladParams;
use ghostvlad::linalg::Matrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn gaussian(rng: &mut ChaCha8Rng, n: usize, scale: f64) -> Vec<f64> {
    (0..n).map(|_| scale * rng.sample::<f64, _>(StandardNormal)).collect()
}

pub fn unit(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    let v = gaussian(rng, n, 1.0);
    let s = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.into_iter().map(|x| x / s).collect()
}

/// Random parameters with logits of order one so the softmax is not saturated.
pub fn random_params(rng: &mut ChaCha8Rng, dim: usize, k: usize, g: usize) -> GhostVladParams {
    let w = Matrix::from_vec(k + g, dim, gaussian(rng, (k + g) * dim, 1.5)).unwrap();
    let b = gaussian(rng, k + g, 0.5);
    let c = Matrix::from_vec(k, dim, gaussian(rng, k * dim, 0.5 / (dim as f64).sqrt())).unwrap();
    GhostVladParams::new(w, b, c, g).unwrap()
}

/// Literal NetVLAD: `V(j,k) = Σ_i w_i · e^{a_k·x_i + b_k} / Σ_k' e^{a_k'·x_i + b_k'} · (x_i(j) − c_k(j))`
/// for every row of `a`, with `c` supplying one center per row. Output is
/// unnormalized, cluster-major.
pub fn netvlad_literal(xs: &[Vec<f64>], weights: &[f64], a: &[Vec<f64>], b: &[f64], c: &[Vec<f64>]) -> Vec<f64> {
    let k_total = a.len();
    let dim = xs[0].len();
    let mut v = vec![0.0; k_total * dim];
    for (x, &wi) in xs.iter().zip(weights) {
        let logits: Vec<f64> = (0..k_total).map(|k| (0..dim).map(|j| a[k][j] * x[j]).sum::<f64>() + b[k]).collect();
        let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = logits.iter().map(|l| (l - m).exp()).collect();
        let z: f64 = e.iter().sum();
        for k in 0..k_total {
            for j in 0..dim {
                v[k * dim + j] += wi * e[k] / z * (x[j] - c[k][j]);
            }
        }
    }
    v
}

pub fn l2_normalize(v: &[f64]) -> Vec<f64> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.iter().map(|x| x / n).collect()
}

pub fn rows(m: &Matrix) -> Vec<Vec<f64>> {
    (0..m.rows()).map(|r| m.row(r).to_vec()).collect()
}

/// Central difference of `f` along coordinate `i` of `x`.
pub fn central_diff(x: &mut [f64], i: usize, h: f64, mut f: impl FnMut(&[f64]) -> f64) -> f64 {
    let orig = x[i];
    x[i] = orig + h;
    let plus = f(x);
    x[i] = orig - h;
    let minus = f(x);
    x[i] = orig;
    (plus - minus) / (2.0 * h)
}

pub const FD_STEP: f64 = 1e-5;
pub const FD_REL_TOL: f64 = 1e-4;
pub const FD_ABS_TOL: f64 = 1e-7;
pub const FD_SMALL_GRAD: f64 = 1e-3;

/// Relative error below `FD_REL_TOL`, or absolute error below `FD_ABS_TOL`
/// when both values are smaller than `FD_SMALL_GRAD` in magnitude.
pub fn grad_matches(analytic: f64, numeric: f64) -> bool {
    let scale = analytic.abs().max(numeric.abs());
    let err = (analytic - numeric).abs();
    if scale < FD_SMALL_GRAD {
        err < FD_ABS_TOL
    } else {
        err / scale < FD_REL_TOL
    }
}

/// Compares every coordinate; returns a description of the worst mismatch.
pub fn check_grad(
    label: &str,
    analytic: &[f64],
    x: &mut [f64],
    f: impl FnMut(&[f64]) -> f64,
) -> Result<usize, String> {
    assert_eq!(analytic.len(), x.len(), "{label}: gradient length");
    let mut f = f;
    for i in 0..x.len() {
        let n = central_diff(x, i, FD_STEP, &mut f);
        if !grad_matches(analytic[i], n) {
            return Err(format!("{label}[{i}]: analytic {} vs numeric {n}", analytic[i]));
        }
    }
    Ok(x.len())
}

/// Brute-force ROC: one point per distinct score (descending) after the
/// `(0,0)` origin, each obtained by counting scores `>= t`.
pub fn roc_oracle(genuine: &[f64], impostor: &[f64]) -> Vec<(f64, f64)> {
    let mut ts: Vec<f64> = genuine.iter().chain(impostor).copied().collect();
    ts.sort_by(|a, b| b.partial_cmp(a).unwrap());
    ts.dedup();
    let mut pts = vec![(0.0, 0.0)];
    for t in ts {
        let fa = impostor.iter().filter(|&&s| s >= t).count() as f64 / impostor.len() as f64;
        let ta = genuine.iter().filter(|&&s| s >= t).count() as f64 / genuine.len() as f64;
        pts.push((fa, ta));
    }
    pts
}

/// TAR at the smallest impostor score `t` with FAR(t) <= `far`; when no
/// impostor score qualifies the threshold sits strictly above all of them.
pub fn tar_oracle(genuine: &[f64], impostor: &[f64], far: f64) -> f64 {
    let n = impostor.len() as f64;
    let best = impostor
        .iter()
        .copied()
        .filter(|&t| impostor.iter().filter(|&&s| s >= t).count() as f64 / n <= far)
        .fold(None, |acc: Option<f64>, t| Some(acc.map_or(t, |a| a.min(t))));
    let hits = match best {
        Some(t) => genuine.iter().filter(|&&s| s >= t).count(),
        None => {
            let top = impostor.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            genuine.iter().filter(|&&s| s > top).count()
        }
    };
    hits as f64 / genuine.len() as f64
}

pub struct IdentOracle {
    pub det: Vec<(f64, f64)>,
    pub cmc: Vec<(f64, f64)>,
}

/// Brute-force open-set identification from a probe × gallery score matrix.
/// Rank of gallery entry g counts entries with a higher score or an equal
/// score and lower index.
pub fn ident_oracle(scores: &[Vec<f64>], probe_subjects: &[u32], gallery_subjects: &[u32]) -> IdentOracle {
    let ng = gallery_subjects.len();
    let rank_of = |s: &[f64], g: usize| 1 + (0..ng).filter(|&h| s[h] > s[g] || (s[h] == s[g] && h < g)).count();
    let mut mate_rank = Vec::new();
    let mut top = Vec::new();
    for (s, &subj) in scores.iter().zip(probe_subjects) {
        let r = (0..ng).filter(|&g| gallery_subjects[g] == subj).map(|g| rank_of(s, g)).min();
        let best = (0..ng).find(|&g| rank_of(s, g) == 1).unwrap();
        mate_rank.push(r);
        top.push((s[best], r == Some(1)));
    }
    let mated = mate_rank.iter().filter(|r| r.is_some()).count();
    let non_mated = mate_rank.len() - mated;
    let cmc = if mated == 0 {
        Vec::new()
    } else {
        (1..=ng)
            .map(|r| (r as f64, mate_rank.iter().filter(|m| m.is_some_and(|m| m <= r)).count() as f64 / mated as f64))
            .collect()
    };
    let det = if mated == 0 || non_mated == 0 {
        Vec::new()
    } else {
        let mut ts: Vec<f64> = top.iter().map(|t| t.0).collect();
        ts.sort_by(|a, b| b.partial_cmp(a).unwrap());
        ts.dedup();
        let mut pts = vec![(0.0, 0.0)];
        for t in ts {
            let fp = (0..top.len()).filter(|&i| mate_rank[i].is_none() && top[i].0 >= t).count();
            let tp = (0..top.len()).filter(|&i| top[i].1 && top[i].0 >= t).count();
            pts.push((fp as f64 / non_mated as f64, tp as f64 / mated as f64));
        }
        pts
    };
    IdentOracle { det, cmc }
}

pub struct DenseOva {
    pub loss: f64,
    pub grad_embedding: Vec<f64>,
    /// Full `T × D` classifier gradient.
    pub grad_classifier: Vec<Vec<f64>>,
}

/// One-vs-all logistic loss over `target` and the `neg` highest-scoring other
/// classes, chosen by a full sort with ties to the lower index; every
/// classifier row gets a gradient entry (zero when inactive).
pub fn dense_ova(e: &[f64], target: usize, w: &[Vec<f64>], neg: usize) -> DenseOva {
    let sig = |x: f64| 1.0 / (1.0 + (-x).exp());
    let sp = |x: f64| if x > 0.0 { x + (-x).exp().ln_1p() } else { x.exp().ln_1p() };
    let s: Vec<f64> = w.iter().map(|r| r.iter().zip(e).map(|(a, b)| a * b).sum()).collect();
    let mut order: Vec<usize> = (0..w.len()).filter(|&j| j != target).collect();
    order.sort_by(|&a, &b| s[b].partial_cmp(&s[a]).unwrap().then(a.cmp(&b)));
    let active: Vec<usize> = order.into_iter().take(neg).collect();
    let mut loss = sp(-s[target]);
    let mut coef = vec![0.0; w.len()];
    coef[target] = sig(s[target]) - 1.0;
    for &j in &active {
        loss += sp(s[j]);
        coef[j] = sig(s[j]);
    }
    let grad_classifier = coef.iter().map(|&c| e.iter().map(|x| c * x).collect()).collect();
    let grad_embedding = (0..e.len()).map(|d| (0..w.len()).map(|j| coef[j] * w[j][d]).sum()).collect();
    DenseOva { loss, grad_embedding, grad_classifier }
}

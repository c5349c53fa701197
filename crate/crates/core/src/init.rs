//! Parameter initialization: k-means cluster centres for GhostVLAD (clean
//! inputs for real clusters, degraded inputs for ghosts) and a PCA-initialized
//! projection.

use nalgebra::{DMatrix, SymmetricEigen};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use serde::{Deserialize, Serialize};

use crate::descriptor::TrainingData;
use crate::error::{Error, Result};
use crate::ghostvlad::GhostVladParams;
use crate::head::{HeadParams, Pooling};
use crate::model::Model;
use crate::training::ClassifierParams;
use crate::linalg::{squared_distance, Matrix};

/// Default assignment sharpness used to turn centres into assignment weights.
pub const DEFAULT_ALPHA: f64 = 100.0;

#[derive(Debug, Clone, PartialEq)]
pub struct KMeansResult {
    pub centers: Matrix,
    pub assignments: Vec<usize>,
    pub inertia: f64,
    /// Inertia after every assignment step, in order.
    pub history: Vec<f64>,
}

fn nearest(x: &[f64], centers: &Matrix) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for k in 0..centers.rows() {
        let d = squared_distance(x, centers.row(k));
        if d < best.1 {
            best = (k, d);
        }
    }
    best
}

fn plus_plus_seeding<X: AsRef<[f64]> + Sync>(points: &[X], k: usize, rng: &mut ChaCha8Rng) -> Matrix {
    let dim = points[0].as_ref().len();
    let mut centers = Matrix::zeros(k, dim);
    let first = rng.random_range(0..points.len());
    centers.row_mut(0).copy_from_slice(points[first].as_ref());
    let mut dist: Vec<f64> = points.iter().map(|p| squared_distance(p.as_ref(), centers.row(0))).collect();
    for c in 1..k {
        let total: f64 = dist.iter().sum();
        let pick = if total > 0.0 {
            let mut target = rng.random::<f64>() * total;
            let mut chosen = dist.iter().rposition(|d| *d > 0.0).unwrap_or(0);
            for (i, d) in dist.iter().enumerate() {
                if *d > 0.0 && target < *d {
                    chosen = i;
                    break;
                }
                target -= d;
            }
            chosen
        } else {
            rng.random_range(0..points.len())
        };
        centers.row_mut(c).copy_from_slice(points[pick].as_ref());
        for (d, p) in dist.iter_mut().zip(points) {
            *d = d.min(squared_distance(p.as_ref(), centers.row(c)));
        }
    }
    centers
}

/// Lloyd's algorithm with k-means++ seeding.
pub fn kmeans<X: AsRef<[f64]> + Sync>(points: &[X], k: usize, seed: u64, max_iters: usize) -> Result<KMeansResult> {
    if k == 0 || points.len() < k {
        return Err(Error::TooFewPoints { needed: k.max(1), got: points.len() });
    }
    let dim = points[0].as_ref().len();
    if let Some(p) = points.iter().find(|p| p.as_ref().len() != dim) {
        return Err(Error::dims(dim, p.as_ref().len()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut centers = plus_plus_seeding(points, k, &mut rng);
    let mut assignments: Vec<usize> = vec![usize::MAX; points.len()];
    let mut history = Vec::new();

    for _ in 0..max_iters.max(1) {
        let nearest_all: Vec<(usize, f64)> = points.par_iter().map(|p| nearest(p.as_ref(), &centers)).collect();
        let new_assign: Vec<usize> = nearest_all.iter().map(|(c, _)| *c).collect();
        history.push(nearest_all.iter().map(|(_, d)| d).sum());
        if new_assign == assignments {
            break;
        }
        assignments = new_assign;

        let mut sums = Matrix::zeros(k, dim);
        let mut counts = vec![0usize; k];
        for (p, &c) in points.iter().zip(&assignments) {
            counts[c] += 1;
            crate::linalg::axpy(1.0, p.as_ref(), sums.row_mut(c));
        }
        for c in 0..k {
            if counts[c] == 0 {
                // Empty cluster: steal the point farthest from its centre.
                let (far, _) = points
                    .iter()
                    .enumerate()
                    .filter(|(i, _)| counts[assignments[*i]] > 1)
                    .map(|(i, p)| (i, squared_distance(p.as_ref(), centers.row(assignments[i]))))
                    .fold((usize::MAX, -1.0), |best, cur| if cur.1 > best.1 { cur } else { best });
                if far == usize::MAX {
                    continue;
                }
                let old = assignments[far];
                counts[old] -= 1;
                crate::linalg::axpy(-1.0, points[far].as_ref(), sums.row_mut(old));
                assignments[far] = c;
                counts[c] = 1;
                sums.row_mut(c).copy_from_slice(points[far].as_ref());
            }
        }
        for c in 0..k {
            if counts[c] > 0 {
                let n = counts[c] as f64;
                for (dst, s) in centers.row_mut(c).iter_mut().zip(sums.row(c)) {
                    *dst = s / n;
                }
            }
        }
    }

    let final_pass: Vec<(usize, f64)> = points.par_iter().map(|p| nearest(p.as_ref(), &centers)).collect();
    let inertia = points
        .iter()
        .zip(&assignments)
        .map(|(p, &c)| squared_distance(p.as_ref(), centers.row(c)))
        .sum::<f64>();
    // Lloyd may stop at max_iters before the final re-assignment; report the
    // assignment matching the final centres when it is no worse.
    let reassigned: f64 = final_pass.iter().map(|(_, d)| d).sum();
    let (assignments, inertia) = if reassigned < inertia {
        (final_pass.iter().map(|(c, _)| *c).collect(), reassigned)
    } else {
        (assignments, inertia)
    };
    Ok(KMeansResult { centers, assignments, inertia, history })
}

fn mean<X: AsRef<[f64]>>(points: &[X]) -> Vec<f64> {
    let dim = points[0].as_ref().len();
    let mut m = vec![0.0; dim];
    for p in points {
        crate::linalg::axpy(1.0 / points.len() as f64, p.as_ref(), &mut m);
    }
    m
}

/// Centres from k-means over clean inputs (real clusters) and degraded inputs
/// (ghosts), turned into assignment parameters `a = 2αc`, `b = -α‖c‖²`.
pub fn init_ghostvlad<X: AsRef<[f64]> + Sync>(
    clean: &[X],
    degraded: &[X],
    clusters: usize,
    ghosts: usize,
    alpha: f64,
    seed: u64,
) -> Result<GhostVladParams> {
    let real = kmeans(clean, clusters, seed, 100)?.centers;
    let ghost = match ghosts {
        0 => Matrix::zeros(0, real.cols()),
        1 => {
            if degraded.is_empty() {
                return Err(Error::TooFewPoints { needed: 1, got: 0 });
            }
            let m = mean(degraded);
            if m.len() != real.cols() {
                return Err(Error::dims(real.cols(), m.len()));
            }
            Matrix::from_vec(1, m.len(), m)?
        }
        g => kmeans(degraded, g, seed.wrapping_add(1), 100)?.centers,
    };
    if ghost.rows() > 0 && ghost.cols() != real.cols() {
        return Err(Error::dims(real.cols(), ghost.cols()));
    }

    let dim = real.cols();
    let mut assign_w = Matrix::zeros(clusters + ghosts, dim);
    let mut assign_b = vec![0.0; clusters + ghosts];
    let all = (0..clusters).map(|k| real.row(k)).chain((0..ghosts).map(|g| ghost.row(g)));
    for (k, c) in all.enumerate() {
        for (w, cj) in assign_w.row_mut(k).iter_mut().zip(c) {
            *w = 2.0 * alpha * cj;
        }
        assign_b[k] = -alpha * c.iter().map(|v| v * v).sum::<f64>();
    }
    GhostVladParams::new(assign_w, assign_b, real, ghosts)
}

#[derive(Debug, Clone, PartialEq)]
pub struct PcaInit {
    pub proj: Matrix,
    pub proj_bias: Vec<f64>,
    /// Variance captured by each output direction (descending).
    pub variances: Vec<f64>,
}

/// Rows of `proj` are the top principal directions of the samples;
/// `proj_bias = -proj · mean` so projected data is centred.
pub fn init_projection_pca<P: AsRef<[f64]>>(samples: &[P], out_dim: usize) -> Result<PcaInit> {
    if samples.len() <= out_dim {
        return Err(Error::TooFewSamples { needed: out_dim, got: samples.len() });
    }
    let dim = samples[0].as_ref().len();
    if let Some(s) = samples.iter().find(|s| s.as_ref().len() != dim) {
        return Err(Error::dims(dim, s.as_ref().len()));
    }
    if out_dim > dim {
        return Err(Error::ShapeMismatch(format!("cannot project {dim} dims onto {out_dim}")));
    }
    let mu = mean(samples);
    let n = samples.len() as f64;
    let mut cov = DMatrix::<f64>::zeros(dim, dim);
    for s in samples {
        let c: Vec<f64> = s.as_ref().iter().zip(&mu).map(|(x, m)| x - m).collect();
        for i in 0..dim {
            if c[i] == 0.0 {
                continue;
            }
            for j in i..dim {
                cov[(i, j)] += c[i] * c[j] / n;
            }
        }
    }
    for i in 0..dim {
        for j in 0..i {
            cov[(i, j)] = cov[(j, i)];
        }
    }

    let eig = SymmetricEigen::new(cov);
    let mut order: Vec<usize> = (0..dim).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]).then(a.cmp(&b)));

    let mut proj = Matrix::zeros(out_dim, dim);
    let mut variances = Vec::with_capacity(out_dim);
    for (row, &idx) in order.iter().take(out_dim).enumerate() {
        let v = eig.eigenvectors.column(idx);
        // sign convention: largest-magnitude component positive
        let pivot = (0..dim).fold(0, |best, j| if v[j].abs() > v[best].abs() { j } else { best });
        let sign = if v[pivot] < 0.0 { -1.0 } else { 1.0 };
        for j in 0..dim {
            proj[(row, j)] = sign * v[j];
        }
        variances.push(eig.eigenvalues[idx].max(0.0));
    }
    let proj_bias = proj.matvec(&mu).into_iter().map(|v| -v).collect();
    Ok(PcaInit { proj, proj_bias, variances })
}

/// Aggregation used by a freshly initialized model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PoolingKind {
    GhostVlad,
    Mean,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Architecture {
    pub pooling: PoolingKind,
    pub clusters: usize,
    pub ghosts: usize,
    pub out_dim: usize,
    pub alpha: f64,
    pub kmeans_iters: usize,
}

impl Default for Architecture {
    fn default() -> Self {
        Architecture {
            pooling: PoolingKind::GhostVlad,
            clusters: 8,
            ghosts: 1,
            out_dim: 128,
            alpha: DEFAULT_ALPHA,
            kmeans_iters: 100,
        }
    }
}

/// Builds a trainable model from training data: clustered GhostVLAD (or mean
/// pooling), a PCA projection fitted on pooled single originals with running
/// BN statistics matching the projected data, and a zero classifier.
pub fn init_model(data: &TrainingData, arch: &Architecture, seed: u64) -> Result<Model> {
    if data.originals.is_empty() {
        return Err(Error::TooFewPoints { needed: 1, got: 0 });
    }
    let pooling = match arch.pooling {
        PoolingKind::GhostVlad => {
            let mut gv = init_ghostvlad(&data.originals, &data.degraded, arch.clusters, arch.ghosts, arch.alpha, seed)?;
            gv.ghosts_masked = true;
            Pooling::GhostVlad(gv)
        }
        PoolingKind::Mean => Pooling::Mean { dim: data.dim },
    };
    let pooled = data
        .originals
        .par_iter()
        .map(|x| pooling.pool(&[x], &[1.0]).map(|p| p.values))
        .collect::<Result<Vec<_>>>()?;
    let pca = init_projection_pca(&pooled, arch.out_dim)?;
    let mut head = HeadParams::new(pca.proj, pca.proj_bias)?;
    head.bn_var = pca.variances;
    let mut pooling = pooling;
    if let Pooling::GhostVlad(gv) = &mut pooling {
        gv.ghosts_masked = false;
    }
    Ok(Model {
        pooling,
        head,
        classifier: Some(ClassifierParams::zeros(data.identities, arch.out_dim)),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ghostvlad::soft_assign;
    use crate::linalg::dot;

    fn grid_groups() -> Vec<Vec<f64>> {
        let mut pts = Vec::new();
        for (cx, cy) in [(0.0, 0.0), (10.0, 0.0), (0.0, 10.0)] {
            for (dx, dy) in [(0.1, 0.0), (-0.1, 0.0), (0.0, 0.1), (0.0, -0.1)] {
                pts.push(vec![cx + dx, cy + dy]);
            }
        }
        pts
    }

    #[test]
    fn separable_groups_recover_group_means() {
        let pts = grid_groups();
        let r = kmeans(&pts, 3, 7, 50).unwrap();
        let mut centers: Vec<Vec<f64>> = (0..3).map(|k| r.centers.row(k).to_vec()).collect();
        centers.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let expected = [[0.0, 0.0], [0.0, 10.0], [10.0, 0.0]];
        for (c, e) in centers.iter().zip(&expected) {
            assert!((c[0] - e[0]).abs() < 1e-9 && (c[1] - e[1]).abs() < 1e-9);
        }
        assert!((r.inertia - 12.0 * 0.01).abs() < 1e-9);
    }

    #[test]
    fn one_center_per_point() {
        let pts = vec![vec![0.0, 1.0], vec![2.0, 3.0], vec![5.0, -1.0], vec![5.0, -1.5]];
        let r = kmeans(&pts, 4, 1, 20).unwrap();
        assert_eq!(r.inertia, 0.0);
        let mut seen = r.assignments.clone();
        seen.sort();
        assert_eq!(seen, vec![0, 1, 2, 3]);
    }

    #[test]
    fn too_few_points() {
        let pts = vec![vec![0.0]];
        assert!(matches!(kmeans(&pts, 2, 0, 10), Err(Error::TooFewPoints { .. })));
    }

    #[test]
    fn deterministic_and_monotone() {
        let pts: Vec<Vec<f64>> = (0..60).map(|i| vec![((i * 37) % 17) as f64, ((i * 11) % 13) as f64]).collect();
        let a = kmeans(&pts, 5, 3, 100).unwrap();
        let b = kmeans(&pts, 5, 3, 100).unwrap();
        assert_eq!(a, b);
        for w in a.history.windows(2) {
            assert!(w[1] <= w[0] + 1e-12);
        }
    }

    #[test]
    fn single_ghost_is_mean_of_degraded() {
        let clean = grid_groups();
        let degraded = vec![vec![1.0, 2.0], vec![3.0, 4.0], vec![5.0, 0.0]];
        let alpha = 2.0;
        let p = init_ghostvlad(&clean, &degraded, 3, 1, alpha, 0).unwrap();
        let g = p.assign_w.row(3);
        assert!((g[0] / (2.0 * alpha) - 3.0).abs() < 1e-12);
        assert!((g[1] / (2.0 * alpha) - 2.0).abs() < 1e-12);
        assert!((p.assign_b[3] + alpha * 13.0).abs() < 1e-12);
        assert_eq!(p.centers.rows(), 3);
    }

    #[test]
    fn no_ghosts_ignores_degraded() {
        let clean = grid_groups();
        let a = init_ghostvlad(&clean, &[vec![9.0, 9.0]], 3, 0, 5.0, 4).unwrap();
        let b = init_ghostvlad::<Vec<f64>>(&clean, &[], 3, 0, 5.0, 4).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn large_alpha_hardens_assignment_at_a_center() {
        let clean: Vec<Vec<f64>> = vec![vec![1.0, 0.0], vec![0.0, 1.0], vec![-1.0, 0.0]];
        let p = init_ghostvlad(&clean, &[vec![0.0, -1.0]], 3, 1, 100.0, 0).unwrap();
        for k in 0..3 {
            let a = soft_assign(p.centers.row(k), &p).unwrap();
            assert!(a[k] > 1.0 - 1e-12);
        }
    }

    #[test]
    fn pca_rank_one_axis() {
        let samples: Vec<Vec<f64>> = (0..10).map(|i| vec![0.0, i as f64 - 4.5, 0.0]).collect();
        let p = init_projection_pca(&samples, 1).unwrap();
        assert!((p.proj.row(0)[1].abs() - 1.0).abs() < 1e-6);
    }

    #[test]
    fn pca_diagonalizes_and_reconstructs() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let samples: Vec<Vec<f64>> = (0..40)
            .map(|_| {
                let a: f64 = rng.random_range(-1.0..1.0);
                let b: f64 = rng.random_range(-1.0..1.0);
                let c: f64 = rng.random_range(-1.0..1.0);
                vec![3.0 * a + b, a - 0.5 * c, 0.2 * b + c, 1.0 + a]
            })
            .collect();
        let p = init_projection_pca(&samples, 4).unwrap();
        for i in 0..4 {
            for j in 0..4 {
                let d = dot(p.proj.row(i), p.proj.row(j));
                assert!((d - if i == j { 1.0 } else { 0.0 }).abs() < 1e-8);
            }
        }
        let projected: Vec<Vec<f64>> = samples
            .iter()
            .map(|s| p.proj.matvec(s).iter().zip(&p.proj_bias).map(|(a, b)| a + b).collect())
            .collect();
        for i in 0..4 {
            for j in 0..4 {
                let c: f64 = projected.iter().map(|y| y[i] * y[j]).sum::<f64>() / 40.0;
                if i == j {
                    assert!((c - p.variances[i]).abs() < 1e-9);
                } else {
                    assert!(c.abs() < 1e-8);
                }
            }
        }
        assert!(p.variances.windows(2).all(|w| w[0] >= w[1]));
        let mu = mean(&samples);
        for (s, y) in samples.iter().zip(&projected) {
            let back = p.proj.matvec_t(y);
            for j in 0..4 {
                assert!((back[j] + mu[j] - s[j]).abs() < 1e-8);
            }
        }
    }

    #[test]
    fn pca_needs_more_samples_than_dims() {
        let samples = vec![vec![0.0, 1.0], vec![1.0, 0.0]];
        assert!(matches!(init_projection_pca(&samples, 2), Err(Error::TooFewSamples { .. })));
    }
}

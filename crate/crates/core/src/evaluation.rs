//! Recognition protocols: 1:1 verification (ROC, TAR@FAR), open-set 1:N
//! identification (DET, CMC) and the per-example contribution study.
//!
//! Every threshold comparison is inclusive (`score >= t`). Operating-point
//! readouts never interpolate: they use the largest achievable rate that does
//! not exceed the target.

use std::cmp::Ordering;
use std::io::Write;

use rayon::prelude::*;
use serde::Serialize;

use crate::descriptor::{QualityTag, Template};
use crate::error::{Error, Result};
use crate::ghostvlad::contribution;
use crate::head::{similarity, source_weights, TemplateEmbedding};
use crate::model::Model;

pub const REPORT_FARS: [f64; 5] = [1e-5, 1e-4, 1e-3, 1e-2, 1e-1];
pub const REPORT_FPIRS: [f64; 2] = [0.01, 0.1];
pub const REPORT_RANKS: [usize; 3] = [1, 5, 10];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct VerificationPair {
    pub a: usize,
    pub b: usize,
    pub genuine: bool,
}

/// Every unordered pair of distinct templates, genuine when subjects agree.
pub fn all_pairs(subjects: &[u32]) -> Vec<VerificationPair> {
    let mut out = Vec::new();
    for a in 0..subjects.len() {
        for b in a + 1..subjects.len() {
            out.push(VerificationPair { a, b, genuine: subjects[a] == subjects[b] });
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CurveKind {
    Roc,
    Det,
    Cmc,
}

impl CurveKind {
    pub fn as_str(self) -> &'static str {
        match self {
            CurveKind::Roc => "roc",
            CurveKind::Det => "det",
            CurveKind::Cmc => "cmc",
        }
    }
}

/// Ordered `(x, y)` points: (FAR, TAR) for ROC, (FPIR, TPIR) for DET and
/// (rank, TPIR) for CMC.
#[derive(Debug, Clone, PartialEq)]
pub struct Curve {
    pub kind: CurveKind,
    pub points: Vec<(f64, f64)>,
}

impl Curve {
    pub fn write_csv(&self, out: &mut impl Write) -> std::io::Result<()> {
        writeln!(out, "# kind={}", self.kind.as_str())?;
        writeln!(out, "x,y")?;
        for (x, y) in &self.points {
            writeln!(out, "{x},{y}")?;
        }
        Ok(())
    }
}

fn desc(a: &f64, b: &f64) -> Ordering {
    b.total_cmp(a)
}

/// Number of entries `>= t` in a descending-sorted slice.
fn count_at_least(sorted_desc: &[f64], t: f64) -> usize {
    sorted_desc.partition_point(|&s| s >= t)
}

fn count_above(sorted_desc: &[f64], t: f64) -> usize {
    sorted_desc.partition_point(|&s| s > t)
}

/// Smallest candidate threshold whose false-positive rate is within `target`,
/// or `None` when even the largest candidate exceeds it.
fn conservative_threshold(negatives_desc: &[f64], target: f64) -> Option<f64> {
    let n = negatives_desc.len() as f64;
    let mut chosen = None;
    let mut i = 0;
    while i < negatives_desc.len() {
        let t = negatives_desc[i];
        let at_least = count_at_least(negatives_desc, t);
        if at_least as f64 / n <= target {
            chosen = Some(t);
            i = at_least;
        } else {
            break;
        }
    }
    chosen
}

#[derive(Debug, Clone)]
pub struct Verification {
    genuine: Vec<f64>,
    impostor: Vec<f64>,
    pub roc: Curve,
}

impl Verification {
    /// Builds the ROC from raw genuine and impostor scores.
    pub fn from_scores(mut genuine: Vec<f64>, mut impostor: Vec<f64>) -> Result<Self> {
        if genuine.is_empty() {
            return Err(Error::NoGenuine);
        }
        if impostor.is_empty() {
            return Err(Error::NoImpostor);
        }
        genuine.sort_by(desc);
        impostor.sort_by(desc);
        let mut thresholds: Vec<f64> = genuine.iter().chain(&impostor).copied().collect();
        thresholds.sort_by(desc);
        thresholds.dedup();
        let (ng, ni) = (genuine.len() as f64, impostor.len() as f64);
        let mut points = vec![(0.0, 0.0)];
        points.extend(thresholds.iter().map(|&t| {
            (count_at_least(&impostor, t) as f64 / ni, count_at_least(&genuine, t) as f64 / ng)
        }));
        Ok(Verification { genuine, impostor, roc: Curve { kind: CurveKind::Roc, points } })
    }

    pub fn genuine_scores(&self) -> &[f64] {
        &self.genuine
    }

    pub fn impostor_scores(&self) -> &[f64] {
        &self.impostor
    }

    /// TAR at the smallest impostor-score threshold whose FAR is `<= far`.
    pub fn tar_at_far(&self, far: f64) -> f64 {
        let hits = match conservative_threshold(&self.impostor, far) {
            Some(t) => count_at_least(&self.genuine, t),
            None => count_above(&self.genuine, self.impostor[0]),
        };
        hits as f64 / self.genuine.len() as f64
    }
}

/// Scores every pair by cosine similarity of the template embeddings.
pub fn verify(pairs: &[VerificationPair], embeddings: &[TemplateEmbedding]) -> Result<Verification> {
    let mut genuine = Vec::new();
    let mut impostor = Vec::new();
    for p in pairs {
        let (a, b) = match (embeddings.get(p.a), embeddings.get(p.b)) {
            (Some(a), Some(b)) => (a, b),
            _ => return Err(Error::Config(format!("pair ({}, {}) references a missing template", p.a, p.b))),
        };
        let s = similarity(a, b);
        if p.genuine {
            genuine.push(s);
        } else {
            impostor.push(s);
        }
    }
    Verification::from_scores(genuine, impostor)
}

#[derive(Debug, Clone)]
pub struct ProbeOutcome {
    pub mated: bool,
    /// 1-based rank of the first mate, when the probe is mated.
    pub mate_rank: Option<usize>,
    pub top_score: f64,
    pub top_is_mate: bool,
}

#[derive(Debug, Clone)]
pub struct Identification {
    pub probes: Vec<ProbeOutcome>,
    pub gallery_size: usize,
    pub det: Curve,
    pub cmc: Curve,
}

impl Identification {
    fn mated_count(&self) -> usize {
        self.probes.iter().filter(|p| p.mated).count()
    }

    /// TPIR at the conservative threshold for `fpir`; `None` without
    /// non-mated or mated probes.
    pub fn tpir_at_fpir(&self, fpir: f64) -> Option<f64> {
        let mut non_mated: Vec<f64> = self.probes.iter().filter(|p| !p.mated).map(|p| p.top_score).collect();
        let mated = self.mated_count();
        if non_mated.is_empty() || mated == 0 {
            return None;
        }
        non_mated.sort_by(desc);
        let hit = |p: &&ProbeOutcome, t: f64, inclusive: bool| {
            p.mated && p.top_is_mate && if inclusive { p.top_score >= t } else { p.top_score > t }
        };
        let hits = match conservative_threshold(&non_mated, fpir) {
            Some(t) => self.probes.iter().filter(|p| hit(p, t, true)).count(),
            None => self.probes.iter().filter(|p| hit(p, non_mated[0], false)).count(),
        };
        Some(hits as f64 / mated as f64)
    }

    /// CMC value at `rank` (clamped to the gallery size).
    pub fn tpir_at_rank(&self, rank: usize) -> Option<f64> {
        let mated = self.mated_count();
        if mated == 0 || rank == 0 {
            return None;
        }
        let r = rank.min(self.gallery_size);
        let hits = self.probes.iter().filter(|p| p.mate_rank.is_some_and(|m| m <= r)).count();
        Some(hits as f64 / mated as f64)
    }
}

/// Open-set identification of `probes` against `gallery` (template indices
/// into `embeddings`/`subjects`). Ranking ties are broken by gallery order.
pub fn identify(
    probes: &[usize],
    gallery: &[usize],
    embeddings: &[TemplateEmbedding],
    subjects: &[u32],
) -> Result<Identification> {
    if gallery.is_empty() {
        return Err(Error::EmptyGallery);
    }
    let lookup = |i: usize| {
        embeddings
            .get(i)
            .zip(subjects.get(i))
            .ok_or_else(|| Error::Config(format!("template {i} is missing")))
    };
    let gal = gallery.iter().map(|&g| lookup(g)).collect::<Result<Vec<_>>>()?;
    let prb = probes.iter().map(|&p| lookup(p)).collect::<Result<Vec<_>>>()?;

    let outcomes: Vec<ProbeOutcome> = prb
        .par_iter()
        .map(|(emb, subject)| {
            let scores: Vec<f64> = gal.iter().map(|(g, _)| similarity(emb, g)).collect();
            let mut order: Vec<usize> = (0..gal.len()).collect();
            order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
            let mate_rank = order.iter().position(|&g| gal[g].1 == *subject).map(|p| p + 1);
            ProbeOutcome {
                mated: mate_rank.is_some(),
                mate_rank,
                top_score: scores[order[0]],
                top_is_mate: mate_rank == Some(1),
            }
        })
        .collect();

    let mated = outcomes.iter().filter(|p| p.mated).count();
    let non_mated = outcomes.len() - mated;

    let cmc_points = if mated == 0 {
        Vec::new()
    } else {
        let mut per_rank = vec![0usize; gal.len() + 1];
        for r in outcomes.iter().filter_map(|p| p.mate_rank) {
            per_rank[r] += 1;
        }
        let mut cum = 0;
        (1..=gal.len())
            .map(|r| {
                cum += per_rank[r];
                (r as f64, cum as f64 / mated as f64)
            })
            .collect()
    };

    let det_points = if mated == 0 || non_mated == 0 {
        Vec::new()
    } else {
        let mut thresholds: Vec<f64> = outcomes.iter().map(|p| p.top_score).collect();
        thresholds.sort_by(desc);
        thresholds.dedup();
        let mut nm: Vec<f64> = outcomes.iter().filter(|p| !p.mated).map(|p| p.top_score).collect();
        nm.sort_by(desc);
        let mut tp: Vec<f64> = outcomes.iter().filter(|p| p.top_is_mate).map(|p| p.top_score).collect();
        tp.sort_by(desc);
        let mut points = vec![(0.0, 0.0)];
        points.extend(thresholds.iter().map(|&t| {
            (count_at_least(&nm, t) as f64 / non_mated as f64, count_at_least(&tp, t) as f64 / mated as f64)
        }));
        points
    };

    Ok(Identification {
        probes: outcomes,
        gallery_size: gal.len(),
        det: Curve { kind: CurveKind::Det, points: det_points },
        cmc: Curve { kind: CurveKind::Cmc, points: cmc_points },
    })
}

#[derive(Debug, Clone, Serialize, PartialEq)]
pub struct OperatingPoint {
    pub at: f64,
    pub value: Option<f64>,
}

#[derive(Debug, Clone, Serialize, PartialEq)]
pub struct Summary {
    pub tar_at_far: Vec<OperatingPoint>,
    pub tpir_at_fpir: Vec<OperatingPoint>,
    pub tpir_at_rank: Vec<OperatingPoint>,
}

pub fn summarize(verification: Option<&Verification>, identification: Option<&Identification>) -> Summary {
    Summary {
        tar_at_far: REPORT_FARS
            .iter()
            .map(|&f| OperatingPoint { at: f, value: verification.map(|v| v.tar_at_far(f)) })
            .collect(),
        tpir_at_fpir: REPORT_FPIRS
            .iter()
            .map(|&f| OperatingPoint { at: f, value: identification.and_then(|i| i.tpir_at_fpir(f)) })
            .collect(),
        tpir_at_rank: REPORT_RANKS
            .iter()
            .map(|&r| OperatingPoint { at: r as f64, value: identification.and_then(|i| i.tpir_at_rank(r)) })
            .collect(),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ContributionRow {
    pub template: usize,
    pub example: usize,
    pub quality_tag: QualityTag,
    /// Contribution divided by the template's largest contribution.
    pub relative: f64,
}

/// Per-example contribution to each template, relative to the template's
/// maximum. A template whose contributions are all zero reports 1.0
/// everywhere.
pub fn contribution_report(templates: &[Template], model: &Model) -> Result<Vec<ContributionRow>> {
    let mut gv = model
        .ghostvlad()
        .ok_or_else(|| Error::ShapeMismatch("contribution analysis needs a GhostVLAD model".into()))?
        .clone();
    gv.ghosts_masked = false;
    let per_template: Vec<Vec<ContributionRow>> = templates
        .par_iter()
        .enumerate()
        .map(|(ti, t)| {
            if t.is_empty() {
                return Err(Error::EmptyTemplate);
            }
            let weights = source_weights(t.records());
            let raw = t
                .records()
                .iter()
                .zip(&weights)
                .map(|(r, &w)| contribution(r.descriptor.values(), w, &gv))
                .collect::<Result<Vec<_>>>()?;
            let max = raw.iter().cloned().fold(0.0, f64::max);
            Ok(raw
                .iter()
                .zip(t.records())
                .enumerate()
                .map(|(ei, (c, r))| ContributionRow {
                    template: ti,
                    example: ei,
                    quality_tag: r.quality_tag,
                    relative: if max > 0.0 { c / max } else { 1.0 },
                })
                .collect())
        })
        .collect::<Result<_>>()?;
    Ok(per_template.into_iter().flatten().collect())
}

/// Mean relative contribution of rows carrying `tag`, `None` when absent.
pub fn mean_relative_contribution(rows: &[ContributionRow], tag: QualityTag) -> Option<f64> {
    let sel: Vec<f64> = rows.iter().filter(|r| r.quality_tag == tag).map(|r| r.relative).collect();
    (!sel.is_empty()).then(|| sel.iter().sum::<f64>() / sel.len() as f64)
}

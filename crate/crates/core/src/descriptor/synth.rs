use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{normalize, Descriptor, ExampleRecord, QualityTag, SourceKind};
use crate::error::{Error, Result};

/// Angular spread (radians) of the shared junk distribution around its mean
/// direction.
pub const JUNK_SPREAD: f64 = 0.3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticCorpusSpec {
    pub identities: usize,
    pub per_identity: usize,
    pub dim: usize,
    /// Within-identity angular noise scale in radians.
    pub spread: f64,
    pub degrade_prob: f64,
    pub degrade_strength: f64,
    pub seed: u64,
}

impl Default for SyntheticCorpusSpec {
    fn default() -> Self {
        SyntheticCorpusSpec {
            identities: 30,
            per_identity: 60,
            dim: 16,
            spread: 1.0,
            degrade_prob: 0.2,
            degrade_strength: 0.9,
            seed: 0,
        }
    }
}

impl SyntheticCorpusSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidSpec(m));
        if self.identities < 2 {
            return bad(format!("identities = {} (need >= 2)", self.identities));
        }
        if self.dim == 0 {
            return bad("dim must be positive".into());
        }
        if !(self.spread > 0.0 && self.spread.is_finite()) {
            return bad(format!("spread = {} (need > 0)", self.spread));
        }
        if !(0.0..=1.0).contains(&self.degrade_prob) {
            return bad(format!("degrade_prob = {} outside [0,1]", self.degrade_prob));
        }
        if !(0.0..=1.0).contains(&self.degrade_strength) {
            return bad(format!("degrade_strength = {} outside [0,1]", self.degrade_strength));
        }
        if self.identities > u32::MAX as usize
            || self.identities.saturating_mul(self.per_identity) > u32::MAX as usize
        {
            return bad("corpus too large for 32-bit ids".into());
        }
        Ok(())
    }
}

fn gaussian(rng: &mut ChaCha8Rng, dim: usize, scale: f64) -> Vec<f64> {
    (0..dim).map(|_| scale * rng.sample::<f64, _>(StandardNormal)).collect()
}

fn random_direction(rng: &mut ChaCha8Rng, dim: usize) -> Vec<f64> {
    loop {
        let v = gaussian(rng, dim, 1.0);
        if let Ok(d) = normalize(&v) {
            return d.into_inner();
        }
    }
}

fn renormalize(v: &[f64], fallback: &[f64]) -> Descriptor {
    normalize(v).unwrap_or_else(|_| Descriptor::from_raw(fallback.to_vec()))
}

/// Generates a labelled corpus, ordered by identity then example index.
///
/// Randomness is counter based: stream 0 fixes the junk distribution and
/// stream `1 + identity` drives everything about that identity, so the output
/// does not depend on how identities are scheduled across threads.
pub fn generate_corpus(spec: &SyntheticCorpusSpec) -> Result<Vec<ExampleRecord>> {
    spec.validate()?;
    let dim = spec.dim;
    let per_coord = 1.0 / (dim as f64).sqrt();

    let mut junk_rng = ChaCha8Rng::seed_from_u64(spec.seed);
    junk_rng.set_stream(0);
    let junk_mean = random_direction(&mut junk_rng, dim);

    let per_identity: Vec<Vec<ExampleRecord>> = (0..spec.identities)
        .into_par_iter()
        .map(|identity| {
            let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
            rng.set_stream(1 + identity as u64);
            let mean = random_direction(&mut rng, dim);
            (0..spec.per_identity)
                .map(|i| {
                    // Draw every variate unconditionally so the stream layout
                    // does not depend on the degradation outcome.
                    let noise = gaussian(&mut rng, dim, spec.spread * per_coord);
                    let coin: f64 = rng.random();
                    let junk_noise = gaussian(&mut rng, dim, JUNK_SPREAD * per_coord);

                    let clean: Vec<f64> = mean.iter().zip(&noise).map(|(m, n)| m + n).collect();
                    let clean = renormalize(&clean, &mean);
                    let degraded = coin < spec.degrade_prob;
                    let descriptor = if degraded {
                        let s = spec.degrade_strength;
                        let blended: Vec<f64> = clean
                            .values()
                            .iter()
                            .zip(junk_mean.iter().zip(&junk_noise))
                            .map(|(x, (jm, jn))| (1.0 - s) * x + s * (jm + jn))
                            .collect();
                        renormalize(&blended, &junk_mean)
                    } else {
                        clean
                    };
                    ExampleRecord {
                        descriptor,
                        identity: identity as u32,
                        media_id: (identity * spec.per_identity + i) as u32,
                        source_kind: SourceKind::Still,
                        quality_tag: if degraded { QualityTag::Degraded } else { QualityTag::Clean },
                    }
                })
                .collect()
        })
        .collect();

    Ok(per_identity.into_iter().flatten().collect())
}

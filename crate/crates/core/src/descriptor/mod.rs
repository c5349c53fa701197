//! Descriptor and template data model.
//!
//! A [`Descriptor`] is one fixed-length, L2-normalized face feature vector.
//! Records add identity and source metadata; templates group records of one
//! subject. The quality tag on each record is bookkeeping for synthetic
//! corpora: it is consumed here (IO and training-data preparation) and by the
//! evaluation module, never by the aggregation layer, head, init or trainer.

mod io;
mod synth;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::norm;

pub use io::{
    decode_gvd1, decode_jsonl, encode_gvd1, encode_jsonl, read_dataset, write_dataset, DatasetFormat, GVD1_MAGIC,
    GVD1_VERSION,
};
pub use synth::{generate_corpus, SyntheticCorpusSpec, JUNK_SPREAD};

/// Norms below this are treated as zero by [`normalize`].
pub const ZERO_NORM: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Descriptor(Vec<f64>);

impl Descriptor {
    /// Wraps raw values without normalizing them.
    pub fn from_raw(values: Vec<f64>) -> Self {
        Descriptor(values)
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }
}

impl AsRef<[f64]> for Descriptor {
    fn as_ref(&self) -> &[f64] {
        &self.0
    }
}

/// Returns `v / ||v||`.
pub fn normalize(v: &[f64]) -> Result<Descriptor> {
    let n = norm(v);
    if !(n >= ZERO_NORM) {
        return Err(Error::ZeroVector);
    }
    Ok(Descriptor(v.iter().map(|x| x / n).collect()))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum SourceKind {
    Still,
    VideoFrame,
}

impl SourceKind {
    pub fn code(self) -> u8 {
        match self {
            SourceKind::Still => 0,
            SourceKind::VideoFrame => 1,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(SourceKind::Still),
            1 => Some(SourceKind::VideoFrame),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum QualityTag {
    Clean,
    Degraded,
}

impl QualityTag {
    pub fn code(self) -> u8 {
        match self {
            QualityTag::Clean => 0,
            QualityTag::Degraded => 1,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(QualityTag::Clean),
            1 => Some(QualityTag::Degraded),
            _ => None,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            QualityTag::Clean => "clean",
            QualityTag::Degraded => "degraded",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExampleRecord {
    pub descriptor: Descriptor,
    pub identity: u32,
    pub media_id: u32,
    pub source_kind: SourceKind,
    pub quality_tag: QualityTag,
}

/// A non-empty set of records of a single subject.
#[derive(Debug, Clone, PartialEq)]
pub struct Template {
    records: Vec<ExampleRecord>,
    subject: u32,
}

impl Template {
    pub fn new(subject: u32, records: Vec<ExampleRecord>) -> Result<Self> {
        if records.is_empty() {
            return Err(Error::EmptyTemplate);
        }
        if let Some(r) = records.iter().find(|r| r.identity != subject) {
            return Err(Error::InvalidSpec(format!(
                "record of identity {} in template of subject {subject}",
                r.identity
            )));
        }
        Ok(Template { records, subject })
    }

    pub fn subject(&self) -> u32 {
        self.subject
    }

    pub fn records(&self) -> &[ExampleRecord] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }
}

/// Checks that every video frame sharing a media id belongs to one identity.
pub fn check_video_identities(records: &[ExampleRecord]) -> Result<()> {
    let mut owner = std::collections::HashMap::new();
    for r in records.iter().filter(|r| r.source_kind == SourceKind::VideoFrame) {
        if let Some(&id) = owner.get(&r.media_id) {
            if id != r.identity {
                return Err(Error::InvalidSpec(format!(
                    "video {} has frames of identities {id} and {}",
                    r.media_id, r.identity
                )));
            }
        } else {
            owner.insert(r.media_id, r.identity);
        }
    }
    Ok(())
}

/// Tag-free view of one training example.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledDescriptor {
    pub descriptor: Descriptor,
    pub identity: u32,
}

impl AsRef<[f64]> for LabeledDescriptor {
    fn as_ref(&self) -> &[f64] {
        self.descriptor.values()
    }
}

/// Training inputs prepared from a labelled corpus.
///
/// `originals` and `degraded` mirror an augmentation pipeline that knows which
/// inputs it degraded; downstream code only ever sees these two lists, never
/// the per-record tag.
#[derive(Debug, Clone)]
pub struct TrainingData {
    pub dim: usize,
    pub identities: usize,
    pub originals: Vec<LabeledDescriptor>,
    pub degraded: Vec<LabeledDescriptor>,
    pub validation: Vec<Template>,
}

impl TrainingData {
    /// Splits `records` per identity: the trailing `val_fraction` of each
    /// identity's records (in file order) is held out and chunked into
    /// validation templates of `val_template_size` records.
    pub fn split(
        dim: usize,
        records: &[ExampleRecord],
        val_fraction: f64,
        val_template_size: usize,
    ) -> Result<Self> {
        if !(0.0..1.0).contains(&val_fraction) || val_template_size == 0 {
            return Err(Error::Config(format!(
                "val_fraction {val_fraction} must be in [0,1), val_template_size > 0"
            )));
        }
        let identities = records.iter().map(|r| r.identity as usize + 1).max().unwrap_or(0);
        let mut per_identity: Vec<Vec<&ExampleRecord>> = vec![Vec::new(); identities];
        for r in records {
            if r.descriptor.dim() != dim {
                return Err(Error::dims(dim, r.descriptor.dim()));
            }
            per_identity[r.identity as usize].push(r);
        }

        let mut data = TrainingData {
            dim,
            identities,
            originals: Vec::new(),
            degraded: Vec::new(),
            validation: Vec::new(),
        };
        for (identity, recs) in per_identity.iter().enumerate() {
            let n_val = (recs.len() as f64 * val_fraction).round() as usize;
            let (train, val) = recs.split_at(recs.len() - n_val);
            for r in train {
                let ex = LabeledDescriptor { descriptor: r.descriptor.clone(), identity: r.identity };
                match r.quality_tag {
                    QualityTag::Clean => data.originals.push(ex),
                    QualityTag::Degraded => data.degraded.push(ex),
                }
            }
            for chunk in val.chunks(val_template_size) {
                let recs = chunk.iter().map(|r| (*r).clone()).collect();
                data.validation.push(Template::new(identity as u32, recs)?);
            }
        }
        Ok(data)
    }

    /// All training examples, originals first.
    pub fn all_training(&self) -> Vec<LabeledDescriptor> {
        self.originals.iter().chain(&self.degraded).cloned().collect()
    }
}

/// Groups records into one template per identity, or into consecutive chunks
/// of `chunk` records per identity when given.
pub fn group_templates(records: &[ExampleRecord], chunk: Option<usize>) -> Result<Vec<Template>> {
    let mut by_identity: std::collections::BTreeMap<u32, Vec<ExampleRecord>> = Default::default();
    for r in records {
        by_identity.entry(r.identity).or_default().push(r.clone());
    }
    let mut out = Vec::new();
    for (subject, recs) in by_identity {
        match chunk {
            Some(0) => return Err(Error::Config("template size must be positive".into())),
            Some(n) => {
                for c in recs.chunks(n) {
                    out.push(Template::new(subject, c.to_vec())?);
                }
            }
            None => out.push(Template::new(subject, recs)?),
        }
    }
    Ok(out)
}

//! A complete aggregation network and its `GVM1` file format.
//!
//! Layout (little endian): magic `GVM1`, u32 version, u64 timestamp (seconds,
//! 0 when disabled), u32 D_F, K, G, D, T (0 when the classifier is stripped),
//! then f32 arrays in order: assign_w, assign_b, centers, proj, proj_bias,
//! bn_gamma, bn_beta, bn_mean, bn_var, classifier. Values are held as f64 in
//! memory and widened on load.

use std::fs;
use std::path::Path;

use rayon::prelude::*;

use crate::descriptor::Template;
use crate::error::{Error, Result};
use crate::ghostvlad::GhostVladParams;
use crate::head::{embed_with, HeadParams, Pooling, TemplateEmbedding};
use crate::linalg::Matrix;
use crate::training::ClassifierParams;

pub const GVM1_MAGIC: &[u8; 4] = b"GVM1";
pub const GVM1_VERSION: u32 = 1;
/// Byte offset and width of the timestamp field.
pub const TIMESTAMP_RANGE: std::ops::Range<usize> = 8..16;
const HEADER_LEN: usize = 16 + 5 * 4;

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub pooling: Pooling,
    pub head: HeadParams,
    pub classifier: Option<ClassifierParams>,
}

impl Model {
    pub fn ghostvlad(&self) -> Option<&GhostVladParams> {
        match &self.pooling {
            Pooling::GhostVlad(p) => Some(p),
            Pooling::Mean { .. } => None,
        }
    }

    pub fn ghostvlad_mut(&mut self) -> Option<&mut GhostVladParams> {
        match &mut self.pooling {
            Pooling::GhostVlad(p) => Some(p),
            Pooling::Mean { .. } => None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.head.validate()?;
        if self.pooling.output_dim() != self.head.input_dim() {
            return Err(Error::dims(self.pooling.output_dim(), self.head.input_dim()));
        }
        if let Some(c) = &self.classifier {
            if c.weights.cols() != self.head.output_dim() {
                return Err(Error::dims(self.head.output_dim(), c.weights.cols()));
            }
        }
        Ok(())
    }

    /// Source-balanced embedding of one template (inference mode).
    pub fn embed(&self, template: &Template) -> Result<TemplateEmbedding> {
        embed_with(template, &self.pooling, &self.head)
    }

    /// Embeds templates in parallel; output order follows input order.
    pub fn embed_all(&self, templates: &[Template]) -> Result<Vec<TemplateEmbedding>> {
        templates.par_iter().map(|t| self.embed(t)).collect()
    }
}

fn push_f32s(out: &mut Vec<u8>, values: &[f64]) {
    for &v in values {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
}

pub fn encode_gvm1(model: &Model, timestamp: u64) -> Result<Vec<u8>> {
    model.validate()?;
    let gv = model
        .ghostvlad()
        .ok_or_else(|| Error::ShapeMismatch("only GhostVLAD models can be serialized".into()))?;
    let head = &model.head;
    let classes = model.classifier.as_ref().map_or(0, |c| c.weights.rows());

    let mut out = Vec::new();
    out.extend_from_slice(GVM1_MAGIC);
    out.extend_from_slice(&GVM1_VERSION.to_le_bytes());
    out.extend_from_slice(&timestamp.to_le_bytes());
    for v in [gv.dim(), gv.clusters(), gv.ghosts(), head.output_dim(), classes] {
        out.extend_from_slice(&(v as u32).to_le_bytes());
    }
    push_f32s(&mut out, gv.assign_w.as_slice());
    push_f32s(&mut out, &gv.assign_b);
    push_f32s(&mut out, gv.centers.as_slice());
    push_f32s(&mut out, head.proj.as_slice());
    for v in [&head.proj_bias, &head.bn_gamma, &head.bn_beta, &head.bn_mean, &head.bn_var] {
        push_f32s(&mut out, v);
    }
    if let Some(c) = &model.classifier {
        push_f32s(&mut out, c.weights.as_slice());
    }
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn u32(&mut self) -> Result<u32> {
        let b = self.bytes.get(self.pos..self.pos + 4).ok_or_else(|| Error::format_at_byte(self.pos as u64, "truncated header"))?;
        self.pos += 4;
        Ok(u32::from_le_bytes(b.try_into().unwrap()))
    }

    fn f64s(&mut self, n: usize, what: &str) -> Result<Vec<f64>> {
        let b = self
            .bytes
            .get(self.pos..self.pos + 4 * n)
            .ok_or_else(|| Error::format_at_byte(self.pos as u64, format!("truncated {what}")))?;
        self.pos += 4 * n;
        Ok(b.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64).collect())
    }
}

/// Decodes a model file, returning the model and its header timestamp.
pub fn decode_gvm1(bytes: &[u8]) -> Result<(Model, u64)> {
    if bytes.len() < HEADER_LEN {
        return Err(Error::format_at_byte(bytes.len() as u64, "truncated header"));
    }
    if &bytes[..4] != GVM1_MAGIC {
        return Err(Error::format_at_byte(0, "bad magic, expected GVM1"));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != GVM1_VERSION {
        return Err(Error::format_at_byte(4, format!("unsupported version {version}")));
    }
    let timestamp = u64::from_le_bytes(bytes[TIMESTAMP_RANGE].try_into().unwrap());
    let mut r = Reader { bytes, pos: 16 };
    let dim = r.u32()? as usize;
    let clusters = r.u32()? as usize;
    let ghosts = r.u32()? as usize;
    let out_dim = r.u32()? as usize;
    let classes = r.u32()? as usize;
    if dim == 0 || clusters == 0 || out_dim == 0 {
        return Err(Error::format_at_byte(16, "D_F, K and D must be positive"));
    }
    let input = dim
        .checked_mul(clusters)
        .ok_or_else(|| Error::format_at_byte(16, "dimension overflow"))?;
    let expected = [
        (clusters + ghosts) * dim,
        clusters + ghosts,
        clusters * dim,
        out_dim * input,
        out_dim * 5,
        classes * out_dim,
    ]
    .iter()
    .try_fold(HEADER_LEN, |acc, n| n.checked_mul(4).and_then(|b| acc.checked_add(b)));
    match expected {
        Some(len) if len == bytes.len() => {}
        Some(len) => {
            return Err(Error::format_at_byte(
                HEADER_LEN as u64,
                format!("file has {} bytes, header dimensions imply {len}", bytes.len()),
            ))
        }
        None => return Err(Error::format_at_byte(16, "dimension overflow")),
    }

    let assign_w = Matrix::from_vec(clusters + ghosts, dim, r.f64s((clusters + ghosts) * dim, "assign_w")?)?;
    let assign_b = r.f64s(clusters + ghosts, "assign_b")?;
    let centers = Matrix::from_vec(clusters, dim, r.f64s(clusters * dim, "centers")?)?;
    let proj = Matrix::from_vec(out_dim, input, r.f64s(out_dim * input, "proj")?)?;
    let proj_bias = r.f64s(out_dim, "proj_bias")?;
    let mut head = HeadParams::new(proj, proj_bias)?;
    head.bn_gamma = r.f64s(out_dim, "bn_gamma")?;
    head.bn_beta = r.f64s(out_dim, "bn_beta")?;
    head.bn_mean = r.f64s(out_dim, "bn_mean")?;
    head.bn_var = r.f64s(out_dim, "bn_var")?;
    let classifier = if classes > 0 {
        Some(ClassifierParams { weights: Matrix::from_vec(classes, out_dim, r.f64s(classes * out_dim, "classifier")?)? })
    } else {
        None
    };
    let gv = GhostVladParams::new(assign_w, assign_b, centers, ghosts)
        .map_err(|e| Error::format_at_byte(HEADER_LEN as u64, e.to_string()))?;
    let model = Model { pooling: Pooling::GhostVlad(gv), head, classifier };
    model.validate().map_err(|e| Error::format_at_byte(HEADER_LEN as u64, e.to_string()))?;
    Ok((model, timestamp))
}

pub fn write_model(path: &Path, model: &Model, timestamp: u64) -> Result<()> {
    fs::write(path, encode_gvm1(model, timestamp)?)?;
    Ok(())
}

pub fn read_model(path: &Path) -> Result<(Model, u64)> {
    decode_gvm1(&fs::read(path)?)
}

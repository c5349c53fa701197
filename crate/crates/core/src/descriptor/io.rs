//! Dataset files: the `GVD1` binary container and its JSON-lines twin.

use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Descriptor, ExampleRecord, QualityTag, SourceKind};
use crate::error::{Error, Result};

pub const GVD1_MAGIC: &[u8; 4] = b"GVD1";
pub const GVD1_VERSION: u32 = 1;
const HEADER_LEN: usize = 4 + 4 + 4 + 8;
const JSONL_FORMAT: &str = "gvd-jsonl";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DatasetFormat {
    Binary,
    JsonLines,
}

impl DatasetFormat {
    /// `.jsonl`/`.json` selects the text format, anything else binary.
    pub fn from_path(path: &Path) -> Self {
        match path.extension().and_then(|e| e.to_str()) {
            Some("jsonl") | Some("json") => DatasetFormat::JsonLines,
            _ => DatasetFormat::Binary,
        }
    }
}

fn record_len(dim: usize) -> usize {
    4 + 4 + 1 + 1 + 4 * dim
}

pub fn encode_gvd1(dim: usize, records: &[ExampleRecord]) -> Result<Vec<u8>> {
    let mut out = Vec::with_capacity(HEADER_LEN + records.len() * record_len(dim));
    out.extend_from_slice(GVD1_MAGIC);
    out.extend_from_slice(&GVD1_VERSION.to_le_bytes());
    out.extend_from_slice(&(dim as u32).to_le_bytes());
    out.extend_from_slice(&(records.len() as u64).to_le_bytes());
    for r in records {
        if r.descriptor.dim() != dim {
            return Err(Error::dims(dim, r.descriptor.dim()));
        }
        out.extend_from_slice(&r.identity.to_le_bytes());
        out.extend_from_slice(&r.media_id.to_le_bytes());
        out.push(r.source_kind.code());
        out.push(r.quality_tag.code());
        for &v in r.descriptor.values() {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    Ok(out)
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::format_at_byte(self.pos as u64, format!("truncated {what}")));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }
}

pub fn decode_gvd1(bytes: &[u8]) -> Result<(usize, Vec<ExampleRecord>)> {
    let mut cur = Cursor { bytes, pos: 0 };
    let magic = cur.take(4, "magic")?;
    if magic != GVD1_MAGIC {
        return Err(Error::format_at_byte(0, "bad magic, expected GVD1"));
    }
    let version = cur.u32("version")?;
    if version != GVD1_VERSION {
        return Err(Error::format_at_byte(4, format!("unsupported version {version}")));
    }
    let dim = cur.u32("d_f")? as usize;
    let n = cur.u64("record count")?;

    let body = (bytes.len() - HEADER_LEN) as u64;
    let expected = n.checked_mul(record_len(dim) as u64);
    if expected != Some(body) {
        // A body that splits evenly into n records of another width is a
        // dimension disagreement rather than corruption.
        if n > 0 && body.is_multiple_of(n) {
            let per = body / n;
            if per >= 10 && (per - 10).is_multiple_of(4) {
                return Err(Error::dims(dim, ((per - 10) / 4) as usize));
            }
        }
        return Err(Error::format_at_byte(
            HEADER_LEN as u64,
            format!("body has {body} bytes, header implies {n} records of d_f {dim}"),
        ));
    }

    let mut records = Vec::with_capacity(n as usize);
    for _ in 0..n {
        let start = cur.pos as u64;
        let identity = cur.u32("identity")?;
        let media_id = cur.u32("media_id")?;
        let kind = cur.u8("source_kind")?;
        let source_kind = SourceKind::from_code(kind)
            .ok_or_else(|| Error::format_at_byte(start + 8, format!("bad source_kind {kind}")))?;
        let tag = cur.u8("quality_tag")?;
        let quality_tag = QualityTag::from_code(tag)
            .ok_or_else(|| Error::format_at_byte(start + 9, format!("bad quality_tag {tag}")))?;
        let raw = cur.take(4 * dim, "descriptor")?;
        let values = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect();
        records.push(ExampleRecord {
            descriptor: Descriptor::from_raw(values),
            identity,
            media_id,
            source_kind,
            quality_tag,
        });
    }
    Ok((dim, records))
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct JsonHeader {
    format: String,
    d_f: usize,
}

#[derive(Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
enum JsonKind {
    Still,
    Video,
}

#[derive(Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
enum JsonQuality {
    Clean,
    Degraded,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct JsonRecord {
    identity: u32,
    media_id: u32,
    source_kind: JsonKind,
    quality_tag: JsonQuality,
    descriptor: Vec<f64>,
}

pub fn encode_jsonl(dim: usize, records: &[ExampleRecord], out: &mut impl Write) -> Result<()> {
    let header = JsonHeader { format: JSONL_FORMAT.into(), d_f: dim };
    serde_json::to_writer(&mut *out, &header).map_err(std::io::Error::from)?;
    out.write_all(b"\n")?;
    for r in records {
        if r.descriptor.dim() != dim {
            return Err(Error::dims(dim, r.descriptor.dim()));
        }
        let rec = JsonRecord {
            identity: r.identity,
            media_id: r.media_id,
            source_kind: match r.source_kind {
                SourceKind::Still => JsonKind::Still,
                SourceKind::VideoFrame => JsonKind::Video,
            },
            quality_tag: match r.quality_tag {
                QualityTag::Clean => JsonQuality::Clean,
                QualityTag::Degraded => JsonQuality::Degraded,
            },
            descriptor: r.descriptor.values().to_vec(),
        };
        serde_json::to_writer(&mut *out, &rec).map_err(std::io::Error::from)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

pub fn decode_jsonl(input: impl BufRead) -> Result<(usize, Vec<ExampleRecord>)> {
    let mut lines = input.lines().enumerate();
    let (_, first) = lines.next().ok_or_else(|| Error::format_at_line(1, "missing header"))?;
    let header: JsonHeader = serde_json::from_str(&first?)
        .map_err(|e| Error::format_at_line(1, format!("bad header: {e}")))?;
    if header.format != JSONL_FORMAT {
        return Err(Error::format_at_line(1, format!("unknown format {:?}", header.format)));
    }
    let mut records = Vec::new();
    for (idx, line) in lines {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let lineno = idx + 1;
        let rec: JsonRecord =
            serde_json::from_str(&line).map_err(|e| Error::format_at_line(lineno, e.to_string()))?;
        if rec.descriptor.len() != header.d_f {
            return Err(Error::dims(header.d_f, rec.descriptor.len()));
        }
        records.push(ExampleRecord {
            descriptor: Descriptor::from_raw(rec.descriptor),
            identity: rec.identity,
            media_id: rec.media_id,
            source_kind: match rec.source_kind {
                JsonKind::Still => SourceKind::Still,
                JsonKind::Video => SourceKind::VideoFrame,
            },
            quality_tag: match rec.quality_tag {
                JsonQuality::Clean => QualityTag::Clean,
                JsonQuality::Degraded => QualityTag::Degraded,
            },
        });
    }
    Ok((header.d_f, records))
}

/// Reads either format, sniffing the first bytes.
pub fn read_dataset(path: &Path) -> Result<(usize, Vec<ExampleRecord>)> {
    let bytes = fs::read(path)?;
    if bytes.starts_with(GVD1_MAGIC) {
        decode_gvd1(&bytes)
    } else if bytes.first() == Some(&b'{') {
        decode_jsonl(BufReader::new(bytes.as_slice()))
    } else {
        Err(Error::format_at_byte(0, "unrecognized dataset magic"))
    }
}

pub fn write_dataset(
    path: &Path,
    dim: usize,
    records: &[ExampleRecord],
    format: DatasetFormat,
) -> Result<()> {
    match format {
        DatasetFormat::Binary => fs::write(path, encode_gvd1(dim, records)?)?,
        DatasetFormat::JsonLines => {
            let mut w = BufWriter::new(fs::File::create(path)?);
            encode_jsonl(dim, records, &mut w)?;
            w.flush()?;
        }
    }
    Ok(())
}

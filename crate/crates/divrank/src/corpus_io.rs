//! The two-file `DRC1` corpus format.
//!
//! `<name>.manifest.jsonl` holds a header line, one line per query, image and
//! descriptor, and a trailing `{"crc32": ...}` line. `<name>.f32` holds the
//! 8-byte prefix `DRC1BLOB` followed by row-major little-endian `f32`
//! features; manifest entries point at rows by index.

use std::collections::BTreeSet;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use divrank_core::corpus::{
    CategoryDescriptor, CategoryId, EmbeddingCorpus, ImageId, ImageRecord, QueryId, QueryRecord, Split,
};
use serde::{Deserialize, Serialize};

use crate::error::{io_err, FormatError, Result};

pub const MAGIC: &str = "DRC1";
pub const BLOB_MAGIC: &[u8; 8] = b"DRC1BLOB";
const MANIFEST_SUFFIX: &str = ".manifest.jsonl";

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    magic: String,
    dim: usize,
    count: usize,
    blob: String,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "lowercase")]
enum Entry {
    Query {
        query_id: u32,
        split: String,
        gt_categories: Vec<u32>,
        candidate_ids: Vec<u32>,
        row: usize,
    },
    Image {
        image_id: u32,
        query_id: u32,
        category: Option<u32>,
        relevant: bool,
        row: usize,
    },
    Descriptor {
        category_id: u32,
        row: usize,
    },
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Trailer {
    crc32: u32,
}

/// Manifest path for a corpus given either `name` or `name.manifest.jsonl`.
pub fn manifest_path(path: &Path) -> PathBuf {
    let s = path.to_string_lossy();
    if s.ends_with(MANIFEST_SUFFIX) {
        path.to_path_buf()
    } else {
        PathBuf::from(format!("{s}{MANIFEST_SUFFIX}"))
    }
}

fn blob_name(manifest: &Path) -> String {
    let file = manifest.file_name().map(|f| f.to_string_lossy().into_owned()).unwrap_or_default();
    let stem = file.strip_suffix(MANIFEST_SUFFIX).unwrap_or(&file);
    format!("{stem}.f32")
}

fn split_name(s: Split) -> &'static str {
    match s {
        Split::Train => "train",
        Split::Test => "test",
    }
}

fn json_line<T: Serialize>(v: &T) -> String {
    let mut s = serde_json::to_string(v).expect("manifest entries serialize");
    s.push('\n');
    s
}

fn to_f32(v: f64) -> Result<f32> {
    let f = v as f32;
    if f64::from(f).to_bits() != v.to_bits() {
        return Err(FormatError::Lossy(v).into());
    }
    Ok(f)
}

/// Writes the manifest and its blob next to each other. Features must be
/// exactly representable as `f32` (generated corpora are), so that loading
/// gives back the same corpus bit for bit.
pub fn save_corpus(corpus: &EmbeddingCorpus, path: &Path) -> Result<()> {
    let manifest = manifest_path(path);
    let blob_file = blob_name(&manifest);
    let blob_path = manifest.with_file_name(&blob_file);
    let d = corpus.dim();

    let mut blob = Vec::with_capacity(8 + 4 * d * (corpus.queries().len() + corpus.images().len()));
    blob.extend_from_slice(BLOB_MAGIC);
    let mut rows = 0usize;
    let mut push = |v: &[f64]| -> Result<usize> {
        for &x in v {
            blob.extend_from_slice(&to_f32(x)?.to_le_bytes());
        }
        rows += 1;
        Ok(rows - 1)
    };

    let mut lines = Vec::new();
    for q in corpus.queries() {
        lines.push(Entry::Query {
            query_id: q.query_id.0,
            split: split_name(q.split).into(),
            gt_categories: q.gt_categories.iter().map(|c| c.0).collect(),
            candidate_ids: q.candidate_ids.iter().map(|i| i.0).collect(),
            row: push(&q.feature)?,
        });
    }
    for img in corpus.images() {
        lines.push(Entry::Image {
            image_id: img.image_id.0,
            query_id: img.query_id.0,
            category: img.category.map(|c| c.0),
            relevant: img.relevant(),
            row: push(&img.feature)?,
        });
    }
    for desc in corpus.descriptors() {
        lines.push(Entry::Descriptor {
            category_id: desc.category_id.0,
            row: push(&desc.description_feature)?,
        });
    }

    let header = Header {
        magic: MAGIC.into(),
        dim: d,
        count: rows,
        blob: blob_file,
    };
    let mut text = json_line(&header);
    for l in &lines {
        text.push_str(&json_line(l));
    }
    text.push_str(&json_line(&Trailer {
        crc32: crc32fast::hash(&blob),
    }));

    fs::write(&blob_path, &blob).map_err(io_err(&blob_path))?;
    let mut f = fs::File::create(&manifest).map_err(io_err(&manifest))?;
    f.write_all(text.as_bytes()).map_err(io_err(&manifest))?;
    Ok(())
}

fn bad(line: usize, detail: impl Into<String>) -> FormatError {
    FormatError::Manifest {
        line,
        detail: detail.into(),
    }
}

fn check_magic(found: &str, expected: &str) -> Result<(), FormatError> {
    if found == expected {
        return Ok(());
    }
    // same family, different revision
    if found.len() == expected.len() && found.starts_with("DRC") {
        return Err(FormatError::VersionMismatch {
            found: found.into(),
            expected: expected.into(),
        });
    }
    Err(FormatError::BadMagic)
}

pub fn load_corpus(path: &Path) -> Result<EmbeddingCorpus> {
    let manifest = manifest_path(path);
    let text = fs::read_to_string(&manifest).map_err(io_err(&manifest))?;
    let mut lines: Vec<(usize, &str)> =
        text.lines().enumerate().map(|(i, l)| (i + 1, l)).filter(|(_, l)| !l.trim().is_empty()).collect();
    if lines.is_empty() {
        return Err(FormatError::BadMagic.into());
    }
    let (_, first) = lines.remove(0);
    let header: Header = serde_json::from_str(first).map_err(|_| FormatError::BadMagic)?;
    check_magic(&header.magic, MAGIC)?;
    if header.dim == 0 {
        return Err(bad(1, "dimension must be positive").into());
    }

    let (last_no, last) = lines.pop().ok_or_else(|| bad(1, "missing crc32 trailer"))?;
    let trailer: Trailer = serde_json::from_str(last).map_err(|_| bad(last_no, "missing crc32 trailer"))?;

    let blob_path = manifest.with_file_name(&header.blob);
    let blob = fs::read(&blob_path).map_err(io_err(&blob_path))?;
    let expected_len = 8 + 4 * (header.count as u64) * header.dim as u64;
    if blob.len() < 8 {
        return Err(FormatError::TruncatedBlob {
            expected: expected_len,
            found: blob.len() as u64,
        }
        .into());
    }
    let prefix = String::from_utf8_lossy(&blob[..8]).into_owned();
    check_magic(&prefix, "DRC1BLOB")?;
    if (blob.len() as u64) < expected_len {
        return Err(FormatError::TruncatedBlob {
            expected: expected_len,
            found: blob.len() as u64,
        }
        .into());
    }
    if blob.len() as u64 > expected_len {
        return Err(FormatError::BlobBounds(format!(
            "blob has {} bytes, header describes {expected_len}",
            blob.len()
        ))
        .into());
    }
    let computed = crc32fast::hash(&blob);
    if computed != trailer.crc32 {
        return Err(FormatError::Checksum {
            stored: trailer.crc32,
            computed,
        }
        .into());
    }

    let d = header.dim;
    let row = |line: usize, r: usize| -> Result<Vec<f64>> {
        if r >= header.count {
            return Err(FormatError::BlobBounds(format!(
                "line {line} points at row {r}, blob has {} rows",
                header.count
            ))
            .into());
        }
        let start = 8 + 4 * r * d;
        Ok(blob[start..start + 4 * d]
            .chunks_exact(4)
            .map(|b| f64::from(f32::from_le_bytes([b[0], b[1], b[2], b[3]])))
            .collect())
    };

    let (mut queries, mut images, mut descriptors) = (Vec::new(), Vec::new(), Vec::new());
    for (no, line) in lines {
        let entry: Entry = serde_json::from_str(line).map_err(|e| bad(no, e.to_string()))?;
        match entry {
            Entry::Query {
                query_id,
                split,
                gt_categories,
                candidate_ids,
                row: r,
            } => {
                let split = match split.as_str() {
                    "train" => Split::Train,
                    "test" => Split::Test,
                    other => return Err(bad(no, format!("unknown split {other:?}")).into()),
                };
                queries.push(QueryRecord {
                    query_id: QueryId(query_id),
                    feature: row(no, r)?,
                    gt_categories: gt_categories.into_iter().map(CategoryId).collect::<BTreeSet<_>>(),
                    candidate_ids: candidate_ids.into_iter().map(ImageId).collect(),
                    split,
                });
            }
            Entry::Image {
                image_id,
                query_id,
                category,
                relevant,
                row: r,
            } => {
                if relevant != category.is_some() {
                    return Err(bad(no, "relevant flag disagrees with category").into());
                }
                images.push(ImageRecord {
                    image_id: ImageId(image_id),
                    query_id: QueryId(query_id),
                    feature: row(no, r)?,
                    category: category.map(CategoryId),
                });
            }
            Entry::Descriptor { category_id, row: r } => descriptors.push(CategoryDescriptor {
                category_id: CategoryId(category_id),
                description_feature: row(no, r)?,
            }),
        }
    }
    Ok(EmbeddingCorpus::new(d, queries, images, descriptors)?)
}

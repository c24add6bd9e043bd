//! On-disk formats: binary feature graphs, dataset manifests, and raw
//! feature-map dumps.
//!
//! # Graph files (`.afg`)
//!
//! Little-endian throughout:
//!
//! ```text
//! offset 0   magic "AFG1"
//! offset 4   u32 feature_dim
//! offset 8   u32 grid_w
//! offset 12  u32 grid_h
//! offset 16  u8  label flag (0 or 1)
//! offset 17  if flagged: 10 x f32 label bins
//! then       grid_w*grid_h*feature_dim x f32 node features,
//!            node-major in row-major grid order
//! ```
//!
//! Reads validate eagerly and report the byte offset of the first problem;
//! writes of valid graphs round-trip bit for bit. Graph ids are not stored —
//! a read takes its id from the file stem, matching how [`afg_write`] is
//! normally pointed at `<id>.afg`.
//!
//! # Manifests
//!
//! Plain CSV `id,path,split` (header required, split one of
//! `train`/`val`/`test`). Relative paths are resolved against the manifest's
//! own directory so a dataset folder can be moved wholesale.
//!
//! # Raw feature maps
//!
//! A flat f32 little-endian dump plus a JSON sidecar `<file>.json` holding
//! `{"d":..,"w":..,"h":..}`. Values are channel-major, row by row.

use crate::graph::{FeatureGraph, FeatureMap, GraphError, ScoreHistogram, BINS};
use crate::tensor::Tensor;
use serde::Deserialize;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use thiserror::Error;

const AFG_MAGIC: &[u8; 4] = b"AFG1";

#[derive(Debug, Error)]
pub enum IoError {
    #[error("{path}: {source}")]
    File {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("{path}: bad magic {found:?} at offset 0 (expected {expected:?})")]
    BadMagic {
        path: PathBuf,
        found: [u8; 4],
        expected: [u8; 4],
    },
    #[error("{path}: invalid header field {field} at offset {offset}: {reason}")]
    BadHeader {
        path: PathBuf,
        field: &'static str,
        offset: u64,
        reason: String,
    },
    #[error("{path}: file holds {actual} bytes but the header implies {expected}")]
    Truncated {
        path: PathBuf,
        expected: u64,
        actual: u64,
    },
    #[error("{path}: {extra} trailing bytes after the payload (expected {expected} total)")]
    TrailingBytes {
        path: PathBuf,
        expected: u64,
        extra: u64,
    },
    #[error("{path}: non-finite value at byte offset {offset}")]
    NonFinite { path: PathBuf, offset: u64 },
    #[error("{path}: {source}")]
    Graph {
        path: PathBuf,
        source: GraphError,
    },
    #[error("{path} line {line}: {reason}")]
    BadManifest {
        path: PathBuf,
        line: usize,
        reason: String,
    },
    #[error("sidecar {path}: {reason}")]
    BadSidecar { path: PathBuf, reason: String },
}

fn file_err(path: &Path, source: std::io::Error) -> IoError {
    IoError::File {
        path: path.to_path_buf(),
        source,
    }
}

/// Serializes a graph. The label is stored when present; the id is not
/// stored (name the file after it).
pub fn afg_write(g: &FeatureGraph, path: &Path) -> Result<(), IoError> {
    let n = g.node_count() * g.feature_dim();
    let mut buf = Vec::with_capacity(17 + 40 + n * 4);
    buf.extend_from_slice(AFG_MAGIC);
    buf.extend_from_slice(&(g.feature_dim() as u32).to_le_bytes());
    buf.extend_from_slice(&(g.grid_w as u32).to_le_bytes());
    buf.extend_from_slice(&(g.grid_h as u32).to_le_bytes());
    match &g.label {
        Some(h) => {
            buf.push(1);
            for &b in h.bins() {
                buf.extend_from_slice(&b.to_le_bytes());
            }
        }
        None => buf.push(0),
    }
    for &v in g.nodes.data() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    let mut f = fs::File::create(path).map_err(|e| file_err(path, e))?;
    f.write_all(&buf).map_err(|e| file_err(path, e))?;
    Ok(())
}

/// Parses a graph file, taking the graph id from the file stem.
pub fn afg_read(path: &Path) -> Result<FeatureGraph, IoError> {
    let bytes = fs::read(path).map_err(|e| file_err(path, e))?;
    let need = |n: u64| -> Result<(), IoError> {
        if (bytes.len() as u64) < n {
            Err(IoError::Truncated {
                path: path.to_path_buf(),
                expected: n,
                actual: bytes.len() as u64,
            })
        } else {
            Ok(())
        }
    };
    need(17)?;
    let mut magic = [0u8; 4];
    magic.copy_from_slice(&bytes[0..4]);
    if &magic != AFG_MAGIC {
        return Err(IoError::BadMagic {
            path: path.to_path_buf(),
            found: magic,
            expected: *AFG_MAGIC,
        });
    }
    let u32_at = |off: usize| u32::from_le_bytes(bytes[off..off + 4].try_into().unwrap());
    let header_field = |field: &'static str, offset: u64, value: u32| -> Result<u64, IoError> {
        if value == 0 {
            Err(IoError::BadHeader {
                path: path.to_path_buf(),
                field,
                offset,
                reason: "must be at least 1".into(),
            })
        } else {
            Ok(value as u64)
        }
    };
    let d = header_field("feature_dim", 4, u32_at(4))?;
    let w = header_field("grid_w", 8, u32_at(8))?;
    let h = header_field("grid_h", 12, u32_at(12))?;
    let flag = bytes[16];
    if flag > 1 {
        return Err(IoError::BadHeader {
            path: path.to_path_buf(),
            field: "label_flag",
            offset: 16,
            reason: format!("must be 0 or 1, got {flag}"),
        });
    }
    let label_bytes = if flag == 1 { 4 * BINS as u64 } else { 0 };
    let feature_count = w
        .checked_mul(h)
        .and_then(|n| n.checked_mul(d))
        .ok_or_else(|| IoError::BadHeader {
            path: path.to_path_buf(),
            field: "grid_w*grid_h*feature_dim",
            offset: 4,
            reason: "dimension product overflows".into(),
        })?;
    let expected = 17 + label_bytes + feature_count * 4;
    if (bytes.len() as u64) < expected {
        return Err(IoError::Truncated {
            path: path.to_path_buf(),
            expected,
            actual: bytes.len() as u64,
        });
    }
    if (bytes.len() as u64) > expected {
        return Err(IoError::TrailingBytes {
            path: path.to_path_buf(),
            expected,
            extra: bytes.len() as u64 - expected,
        });
    }

    let f32_at = |off: usize| -> Result<f32, IoError> {
        let v = f32::from_le_bytes(bytes[off..off + 4].try_into().unwrap());
        if v.is_finite() {
            Ok(v)
        } else {
            Err(IoError::NonFinite {
                path: path.to_path_buf(),
                offset: off as u64,
            })
        }
    };

    let mut off = 17usize;
    let label = if flag == 1 {
        let mut bins = [0.0f32; BINS];
        for b in bins.iter_mut() {
            *b = f32_at(off)?;
            off += 4;
        }
        Some(ScoreHistogram::new(bins).map_err(|e| IoError::Graph {
            path: path.to_path_buf(),
            source: e,
        })?)
    } else {
        None
    };

    let mut data = Vec::with_capacity(feature_count as usize);
    for _ in 0..feature_count {
        data.push(f32_at(off)?);
        off += 4;
    }
    let id = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    Ok(FeatureGraph {
        nodes: Tensor::from_vec(&[(w * h) as usize, d as usize], data),
        grid_w: w as usize,
        grid_h: h as usize,
        label,
        id,
    })
}

/// Dataset split a graph belongs to.
#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "train" => Some(Split::Train),
            "val" => Some(Split::Val),
            "test" => Some(Split::Test),
            _ => None,
        }
    }
}

/// One manifest row. `path` is as stored in the file; see
/// [`ManifestEntry::resolved_path`].
#[derive(Clone, Debug, PartialEq)]
pub struct ManifestEntry {
    pub id: String,
    pub path: PathBuf,
    pub split: Split,
}

impl ManifestEntry {
    /// The entry's path, resolved against the directory of the manifest it
    /// came from when relative.
    pub fn resolved_path(&self, manifest_path: &Path) -> PathBuf {
        if self.path.is_absolute() {
            self.path.clone()
        } else {
            match manifest_path.parent() {
                Some(dir) => dir.join(&self.path),
                None => self.path.clone(),
            }
        }
    }
}

/// 64-bit FNV-1a, inlined so the id-to-split assignment can never drift
/// with a library change.
fn fnv1a(bytes: &[u8]) -> u64 {
    let mut hash: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        hash ^= b as u64;
        hash = hash.wrapping_mul(0x0000_0100_0000_01b3);
    }
    hash
}

/// Stable 80/10/10 split by id hash. Independent of dataset order and of
/// which other ids exist.
pub fn split_for_id(id: &str) -> Split {
    match fnv1a(id.as_bytes()) % 100 {
        0..=79 => Split::Train,
        80..=89 => Split::Val,
        _ => Split::Test,
    }
}

/// Writes `id,path,split` rows with a header. Commas are not allowed inside
/// fields; ids and paths containing one are rejected up front.
pub fn manifest_write(path: &Path, entries: &[ManifestEntry]) -> Result<(), IoError> {
    let mut out = String::from("id,path,split\n");
    for (i, e) in entries.iter().enumerate() {
        let p = e.path.to_string_lossy();
        if e.id.contains(',') || p.contains(',') {
            return Err(IoError::BadManifest {
                path: path.to_path_buf(),
                line: i + 2,
                reason: "fields must not contain commas".into(),
            });
        }
        out.push_str(&format!("{},{},{}\n", e.id, p, e.split.as_str()));
    }
    fs::write(path, out).map_err(|e| file_err(path, e))
}

/// Parses a manifest written by [`manifest_write`] (or by hand to the same
/// shape). Duplicate ids are rejected.
pub fn manifest_read(path: &Path) -> Result<Vec<ManifestEntry>, IoError> {
    let text = fs::read_to_string(path).map_err(|e| file_err(path, e))?;
    let bad = |line: usize, reason: String| IoError::BadManifest {
        path: path.to_path_buf(),
        line,
        reason,
    };
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, header)) if header.trim() == "id,path,split" => {}
        Some((_, header)) => {
            return Err(bad(1, format!("expected header 'id,path,split', got '{header}'")))
        }
        None => return Err(bad(1, "empty manifest".into())),
    }
    let mut out = Vec::new();
    let mut seen = std::collections::HashSet::new();
    for (i, line) in lines {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 3 {
            return Err(bad(i + 1, format!("expected 3 fields, got {}", fields.len())));
        }
        let id = fields[0].trim();
        if id.is_empty() {
            return Err(bad(i + 1, "empty id".into()));
        }
        if !seen.insert(id.to_string()) {
            return Err(bad(i + 1, format!("duplicate id '{id}'")));
        }
        let split = Split::parse(fields[2].trim())
            .ok_or_else(|| bad(i + 1, format!("unknown split '{}'", fields[2].trim())))?;
        out.push(ManifestEntry {
            id: id.to_string(),
            path: PathBuf::from(fields[1].trim()),
            split,
        });
    }
    Ok(out)
}

#[derive(Deserialize)]
struct SidecarDims {
    d: usize,
    w: usize,
    h: usize,
}

/// Writes a raw feature-map dump plus its JSON sidecar.
pub fn raw_map_write(map: &FeatureMap, path: &Path) -> Result<(), IoError> {
    let mut buf = Vec::with_capacity(map.data().len() * 4);
    for &v in map.data() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    fs::write(path, buf).map_err(|e| file_err(path, e))?;
    let sidecar = sidecar_path(path);
    let json = format!(
        "{{\"d\":{},\"w\":{},\"h\":{}}}\n",
        map.depth(),
        map.width(),
        map.height()
    );
    fs::write(&sidecar, json).map_err(|e| file_err(&sidecar, e))
}

fn sidecar_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}

/// Loads a raw feature-map dump, taking its dimensions from `<path>.json`.
pub fn raw_map_read(path: &Path) -> Result<FeatureMap, IoError> {
    let sidecar = sidecar_path(path);
    let text = fs::read_to_string(&sidecar).map_err(|e| file_err(&sidecar, e))?;
    let dims: SidecarDims = serde_json::from_str(&text).map_err(|e| IoError::BadSidecar {
        path: sidecar.clone(),
        reason: e.to_string(),
    })?;
    let bytes = fs::read(path).map_err(|e| file_err(path, e))?;
    let expected = dims
        .d
        .checked_mul(dims.w)
        .and_then(|n| n.checked_mul(dims.h))
        .and_then(|n| n.checked_mul(4))
        .ok_or_else(|| IoError::BadSidecar {
            path: sidecar.clone(),
            reason: "dimension product overflows".into(),
        })? as u64;
    if (bytes.len() as u64) < expected {
        return Err(IoError::Truncated {
            path: path.to_path_buf(),
            expected,
            actual: bytes.len() as u64,
        });
    }
    if (bytes.len() as u64) > expected {
        return Err(IoError::TrailingBytes {
            path: path.to_path_buf(),
            expected,
            extra: bytes.len() as u64 - expected,
        });
    }
    let mut data = Vec::with_capacity(bytes.len() / 4);
    for (i, chunk) in bytes.chunks_exact(4).enumerate() {
        let v = f32::from_le_bytes(chunk.try_into().unwrap());
        if !v.is_finite() {
            return Err(IoError::NonFinite {
                path: path.to_path_buf(),
                offset: (i * 4) as u64,
            });
        }
        data.push(v);
    }
    FeatureMap::new(dims.d, dims.w, dims.h, data).map_err(|e| IoError::Graph {
        path: path.to_path_buf(),
        source: e,
    })
}

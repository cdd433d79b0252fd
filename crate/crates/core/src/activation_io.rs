// SPDX-License-Identifier: MIT OR Apache-2.0

//! Activation dump files and plain / in-context stream pairing.
//!
//! A dump is a single little-endian file:
//!
//! ```text
//! "STSD" | version u32 = 1 | dtype u32 = 0 (f32) | n_tokens u64 | dim u64
//!        | space u32 (0 = raw, 1 = sae_features) | 32 reserved bytes
//!        | n_tokens × dim f32 payload, row-major
//!        | manifest_len u64 | manifest (UTF-8 TOML)
//! ```
//!
//! The manifest names the documents the rows came from and whether each
//! span is a query or prepended context. Only query rows are ever paired.

use std::collections::HashMap;
use std::fs::File;
use std::io::{self, BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{ensure, Error, Result};
use crate::linalg::Matrix;

pub const DUMP_MAGIC: [u8; 4] = *b"STSD";
pub const DUMP_VERSION: u32 = 1;
const DTYPE_F32: u32 = 0;
const RESERVED_BYTES: usize = 32;
pub const HEADER_LEN: usize = 4 + 4 + 4 + 8 + 8 + 4 + RESERVED_BYTES;
/// Upper bound on either axis of a dump; larger headers are treated as corrupt.
pub const MAX_AXIS: u64 = 1 << 24;
const MAX_MANIFEST_BYTES: u64 = 1 << 30;

/// Which representation a stream's columns live in.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Space {
    Raw,
    SaeFeatures,
}

impl Space {
    fn code(self) -> u32 {
        match self {
            Space::Raw => 0,
            Space::SaeFeatures => 1,
        }
    }

    fn from_code(code: u32) -> Option<Self> {
        match code {
            0 => Some(Space::Raw),
            1 => Some(Space::SaeFeatures),
            _ => None,
        }
    }
}

impl std::fmt::Display for Space {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Space::Raw => "raw",
            Space::SaeFeatures => "sae_features",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    Query,
    Context,
}

/// A contiguous run of rows belonging to one document.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Segment {
    pub doc_id: String,
    pub span_start: u64,
    pub span_len: u64,
    pub role: Role,
}

impl Segment {
    pub fn query(doc_id: impl Into<String>, span_start: u64, span_len: u64) -> Self {
        Self {
            doc_id: doc_id.into(),
            span_start,
            span_len,
            role: Role::Query,
        }
    }

    pub fn context(doc_id: impl Into<String>, span_start: u64, span_len: u64) -> Self {
        Self {
            doc_id: doc_id.into(),
            span_start,
            span_len,
            role: Role::Context,
        }
    }

    fn rows(&self) -> std::ops::Range<usize> {
        self.span_start as usize..(self.span_start + self.span_len) as usize
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Manifest {
    pub source_id: String,
    pub layer: i64,
    pub n_tokens: u64,
    pub dim: u64,
    pub space: Space,
    pub segments: Vec<Segment>,
}

impl Manifest {
    pub fn validate(&self) -> Result<()> {
        ensure!(self.dim > 0, "manifest dim must be positive");
        ensure!(self.n_tokens > 0, "dump has no tokens");
        ensure!(
            self.dim <= MAX_AXIS && self.n_tokens <= MAX_AXIS,
            "dump shape {}×{} exceeds the 2^24 per-axis limit",
            self.n_tokens,
            self.dim
        );
        let mut cursor = 0u64;
        let mut total = 0u64;
        for (i, seg) in self.segments.iter().enumerate() {
            ensure!(!seg.doc_id.is_empty(), "segment {i} has an empty doc_id");
            ensure!(seg.span_len >= 1, "segment {i} ({}) is empty", seg.doc_id);
            ensure!(
                seg.span_start >= cursor,
                "segment {i} ({}) overlaps or precedes the previous segment",
                seg.doc_id
            );
            let end = seg.span_start.checked_add(seg.span_len);
            ensure!(
                end.is_some_and(|e| e <= self.n_tokens),
                "segment {i} ({}) runs past the end of the dump",
                seg.doc_id
            );
            cursor = seg.span_start + seg.span_len;
            total += seg.span_len;
        }
        ensure!(
            total == self.n_tokens,
            "segment lengths sum to {total}, dump has {} tokens",
            self.n_tokens
        );
        Ok(())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("manifest is always representable as TOML")
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::validation(format!("bad manifest: {e}")))
    }

    /// Number of rows covered by query-role segments.
    pub fn query_tokens(&self) -> u64 {
        self.segments
            .iter()
            .filter(|s| s.role == Role::Query)
            .map(|s| s.span_len)
            .sum()
    }
}

/// A validated `n_tokens × dim` activation or feature matrix with its manifest.
#[derive(Debug, Clone, PartialEq)]
pub struct ActivationDump {
    manifest: Manifest,
    data: Matrix,
}

impl ActivationDump {
    pub fn new(manifest: Manifest, data: Matrix) -> Result<Self> {
        manifest.validate()?;
        ensure!(
            data.rows() as u64 == manifest.n_tokens && data.cols() as u64 == manifest.dim,
            "data is {}×{} but manifest says {}×{}",
            data.rows(),
            data.cols(),
            manifest.n_tokens,
            manifest.dim
        );
        if let Some(pos) = data.as_slice().iter().position(|v| !v.is_finite()) {
            return Err(Error::validation(format!(
                "non-finite value at row {}, column {}",
                pos / data.cols(),
                pos % data.cols()
            )));
        }
        Ok(Self { manifest, data })
    }

    /// Wraps a matrix as a single query document named `doc_id`.
    pub fn single_query(
        source_id: impl Into<String>,
        doc_id: impl Into<String>,
        space: Space,
        data: Matrix,
    ) -> Result<Self> {
        let manifest = Manifest {
            source_id: source_id.into(),
            layer: 0,
            n_tokens: data.rows() as u64,
            dim: data.cols() as u64,
            space,
            segments: vec![Segment::query(doc_id, 0, data.rows() as u64)],
        };
        Self::new(manifest, data)
    }

    pub fn manifest(&self) -> &Manifest {
        &self.manifest
    }

    pub fn data(&self) -> &Matrix {
        &self.data
    }

    pub fn space(&self) -> Space {
        self.manifest.space
    }

    pub fn n_tokens(&self) -> usize {
        self.data.rows()
    }

    pub fn dim(&self) -> usize {
        self.data.cols()
    }

    pub fn into_parts(self) -> (Manifest, Matrix) {
        (self.manifest, self.data)
    }

    /// Same segments and provenance, new payload in `space`.
    pub fn with_data(&self, space: Space, data: Matrix) -> Result<Self> {
        let mut manifest = self.manifest.clone();
        manifest.space = space;
        manifest.dim = data.cols() as u64;
        Self::new(manifest, data)
    }

    /// Rows of all query segments, in manifest order.
    pub fn query_rows(&self) -> Matrix {
        let mut out = Matrix::zeros(0, self.dim());
        for seg in self.manifest.segments.iter().filter(|s| s.role == Role::Query) {
            for r in seg.rows() {
                out.push_row(self.data.row(r));
            }
        }
        out
    }
}

/// Row-aligned plain and in-context activations for the same query tokens.
#[derive(Debug, Clone, PartialEq)]
pub struct PairedStream {
    plain: Matrix,
    ctx: Matrix,
    doc_ids: Vec<String>,
    space: Space,
}

impl PairedStream {
    pub fn new(plain: Matrix, ctx: Matrix, doc_ids: Vec<String>, space: Space) -> Result<Self> {
        ensure!(
            plain.rows() == ctx.rows() && plain.cols() == ctx.cols(),
            "paired matrices differ in shape: {}×{} vs {}×{}",
            plain.rows(),
            plain.cols(),
            ctx.rows(),
            ctx.cols()
        );
        ensure!(
            doc_ids.len() == plain.rows(),
            "{} provenance entries for {} rows",
            doc_ids.len(),
            plain.rows()
        );
        Ok(Self {
            plain,
            ctx,
            doc_ids,
            space,
        })
    }

    pub fn plain(&self) -> &Matrix {
        &self.plain
    }

    pub fn ctx(&self) -> &Matrix {
        &self.ctx
    }

    pub fn doc_ids(&self) -> &[String] {
        &self.doc_ids
    }

    pub fn space(&self) -> Space {
        self.space
    }

    pub fn len(&self) -> usize {
        self.plain.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.plain.rows() == 0
    }

    pub fn dim(&self) -> usize {
        self.plain.cols()
    }
}

/// Writes `dump` to `path` atomically.
pub fn write_dump(dump: &ActivationDump, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    // A dump can only be built through `ActivationDump::new`, but re-check so a
    // file on disk always satisfies the reader.
    dump.manifest.validate()?;
    let manifest = dump.manifest.to_toml();
    write_atomic(path, |w| {
        let mut header = Vec::with_capacity(HEADER_LEN);
        header.extend_from_slice(&DUMP_MAGIC);
        header.extend_from_slice(&DUMP_VERSION.to_le_bytes());
        header.extend_from_slice(&DTYPE_F32.to_le_bytes());
        header.extend_from_slice(&dump.manifest.n_tokens.to_le_bytes());
        header.extend_from_slice(&dump.manifest.dim.to_le_bytes());
        header.extend_from_slice(&dump.manifest.space.code().to_le_bytes());
        header.extend_from_slice(&[0u8; RESERVED_BYTES]);
        w.write_all(&header)?;
        write_f32s(w, dump.data.as_slice())?;
        w.write_all(&(manifest.len() as u64).to_le_bytes())?;
        w.write_all(manifest.as_bytes())
    })
}

/// Reads and validates a dump written by [`write_dump`].
pub fn read_dump(path: impl AsRef<Path>) -> Result<ActivationDump> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = BufReader::new(file);
    let bad = |reason: String| Error::format(path, reason);

    let mut header = [0u8; HEADER_LEN];
    read_exact_or(&mut r, &mut header, path, "header")?;
    if header[0..4] != DUMP_MAGIC {
        return Err(bad(format!("bad magic {:?}, expected \"STSD\"", &header[0..4])));
    }
    let version = u32_at(&header, 4);
    if version != DUMP_VERSION {
        return Err(bad(format!("unsupported format version {version}")));
    }
    let dtype = u32_at(&header, 8);
    if dtype != DTYPE_F32 {
        return Err(bad(format!("unsupported dtype code {dtype}")));
    }
    let n_tokens = u64_at(&header, 12);
    let dim = u64_at(&header, 20);
    if n_tokens == 0 || dim == 0 || n_tokens > MAX_AXIS || dim > MAX_AXIS {
        return Err(bad(format!("implausible shape {n_tokens}×{dim}")));
    }
    let space = Space::from_code(u32_at(&header, 28))
        .ok_or_else(|| bad(format!("unknown space code {}", u32_at(&header, 28))))?;

    let count = (n_tokens * dim) as usize;
    let data = read_f32s(&mut r, count, path)?;

    let mut len_buf = [0u8; 8];
    read_exact_or(&mut r, &mut len_buf, path, "manifest length")?;
    let manifest_len = u64::from_le_bytes(len_buf);
    if manifest_len > MAX_MANIFEST_BYTES {
        return Err(bad(format!("manifest length {manifest_len} is implausible")));
    }
    let mut text = vec![0u8; manifest_len as usize];
    read_exact_or(&mut r, &mut text, path, "manifest")?;
    let mut trailing = [0u8; 1];
    match r.read(&mut trailing) {
        Ok(0) => {}
        Ok(_) => return Err(bad("trailing bytes after manifest".into())),
        Err(e) => return Err(Error::io(path, e)),
    }
    let text = String::from_utf8(text).map_err(|_| bad("manifest is not UTF-8".into()))?;
    let manifest: Manifest =
        toml::from_str(&text).map_err(|e| bad(format!("manifest does not parse: {e}")))?;
    if manifest.n_tokens != n_tokens || manifest.dim != dim || manifest.space != space {
        return Err(bad(format!(
            "manifest ({}×{}, {}) disagrees with header ({n_tokens}×{dim}, {space})",
            manifest.n_tokens, manifest.dim, manifest.space
        )));
    }
    let data = Matrix::from_vec(n_tokens as usize, dim as usize, data)?;
    ActivationDump::new(manifest, data).map_err(|e| bad(e.to_string()))
}

/// Pairs the query rows of a plain dump with the matching query rows of an
/// in-context dump.
///
/// Documents are matched by `doc_id` and rows by offset within the query
/// span, so segment order may differ between the two dumps. Context-role rows
/// are dropped. Output rows follow the plain dump's order.
pub fn align_pairs(plain: &ActivationDump, ctx: &ActivationDump) -> Result<PairedStream> {
    ensure!(
        plain.dim() == ctx.dim(),
        "dimension mismatch: plain dump has {} columns, in-context dump has {}",
        plain.dim(),
        ctx.dim()
    );
    ensure!(
        plain.space() == ctx.space(),
        "space mismatch: plain is {}, in-context is {}",
        plain.space(),
        ctx.space()
    );
    let ctx_queries = query_index(ctx, "in-context")?;
    // duplicate check on the plain side too
    query_index(plain, "plain")?;

    let dim = plain.dim();
    let n = plain.manifest.query_tokens() as usize;
    let mut p = Vec::with_capacity(n * dim);
    let mut c = Vec::with_capacity(n * dim);
    let mut doc_ids = Vec::with_capacity(n);
    for seg in plain.manifest.segments.iter().filter(|s| s.role == Role::Query) {
        let other = ctx_queries.get(seg.doc_id.as_str()).ok_or_else(|| {
            Error::validation(format!(
                "document `{}` has no query segment in the in-context dump",
                seg.doc_id
            ))
        })?;
        ensure!(
            other.span_len == seg.span_len,
            "document `{}`: query span is {} tokens in the plain dump but {} in the in-context dump",
            seg.doc_id,
            seg.span_len,
            other.span_len
        );
        for (pr, cr) in seg.rows().zip(other.rows()) {
            p.extend_from_slice(plain.data.row(pr));
            c.extend_from_slice(ctx.data.row(cr));
            doc_ids.push(seg.doc_id.clone());
        }
    }
    PairedStream::new(
        Matrix::from_vec(n, dim, p)?,
        Matrix::from_vec(n, dim, c)?,
        doc_ids,
        plain.space(),
    )
}

fn query_index<'a>(dump: &'a ActivationDump, which: &str) -> Result<HashMap<&'a str, &'a Segment>> {
    let mut map = HashMap::new();
    for seg in dump.manifest.segments.iter().filter(|s| s.role == Role::Query) {
        if map.insert(seg.doc_id.as_str(), seg).is_some() {
            return Err(Error::validation(format!(
                "document `{}` has more than one query segment in the {which} dump",
                seg.doc_id
            )));
        }
    }
    Ok(map)
}

/// Writes through a temporary file in the destination directory, then renames
/// it into place.
pub fn write_atomic(
    path: &Path,
    body: impl FnOnce(&mut dyn Write) -> io::Result<()>,
) -> Result<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    let tmp = tempfile::NamedTempFile::new_in(dir).map_err(|e| Error::io(path, e))?;
    {
        let mut w = BufWriter::new(tmp.as_file());
        body(&mut w).map_err(|e| Error::io(path, e))?;
        w.flush().map_err(|e| Error::io(path, e))?;
    }
    tmp.persist(path).map_err(|e| Error::io(path, e.error))?;
    Ok(())
}

pub(crate) fn write_f32s(w: &mut dyn Write, values: &[f32]) -> io::Result<()> {
    let mut buf = Vec::with_capacity(4 * 4096);
    for chunk in values.chunks(4096) {
        buf.clear();
        for v in chunk {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        w.write_all(&buf)?;
    }
    Ok(())
}

pub(crate) fn read_f32s(r: &mut impl Read, count: usize, path: &Path) -> Result<Vec<f32>> {
    let mut bytes = vec![0u8; count * 4];
    read_exact_or(r, &mut bytes, path, "payload")?;
    Ok(bytes
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
        .collect())
}

pub(crate) fn read_exact_or(r: &mut impl Read, buf: &mut [u8], path: &Path, what: &str) -> Result<()> {
    r.read_exact(buf).map_err(|e| match e.kind() {
        io::ErrorKind::UnexpectedEof => Error::format(path, format!("truncated {what}")),
        _ => Error::io(path, e),
    })
}

pub(crate) fn u32_at(b: &[u8], at: usize) -> u32 {
    u32::from_le_bytes(b[at..at + 4].try_into().unwrap())
}

pub(crate) fn u64_at(b: &[u8], at: usize) -> u64 {
    u64::from_le_bytes(b[at..at + 8].try_into().unwrap())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn dump_2x3() -> ActivationDump {
        let m = Matrix::from_rows(&[[1.0, 2.0, 3.0], [4.0, 5.0, 6.0]]).unwrap();
        ActivationDump::single_query("test", "q1", Space::Raw, m).unwrap()
    }

    fn dump_with(segments: Vec<Segment>, rows: usize, dim: usize) -> ActivationDump {
        let data: Vec<f32> = (0..rows * dim).map(|v| v as f32).collect();
        let manifest = Manifest {
            source_id: "t".into(),
            layer: 3,
            n_tokens: rows as u64,
            dim: dim as u64,
            space: Space::Raw,
            segments,
        };
        ActivationDump::new(manifest, Matrix::from_vec(rows, dim, data).unwrap()).unwrap()
    }

    #[test]
    fn round_trip_2x3() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.stsd");
        let dump = dump_2x3();
        write_dump(&dump, &path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        assert_eq!(&bytes[..4], b"STSD");
        let manifest_len = u64_at(&bytes, HEADER_LEN + 24) as usize;
        assert_eq!(bytes.len(), HEADER_LEN + 24 + 8 + manifest_len);
        assert_eq!(read_dump(&path).unwrap(), dump);
    }

    #[test]
    fn empty_and_nan_rejected() {
        let empty = Matrix::zeros(0, 3);
        assert!(matches!(
            ActivationDump::single_query("t", "q", Space::Raw, empty),
            Err(Error::Validation(_))
        ));
        let nan = Matrix::from_rows(&[[1.0, f32::NAN]]).unwrap();
        assert!(matches!(
            ActivationDump::single_query("t", "q", Space::Raw, nan),
            Err(Error::Validation(_))
        ));
    }

    #[test]
    fn truncated_and_bad_magic_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.stsd");
        write_dump(&dump_2x3(), &path).unwrap();
        let bytes = std::fs::read(&path).unwrap();

        let short = dir.path().join("short.stsd");
        std::fs::write(&short, &bytes[..HEADER_LEN + 10]).unwrap();
        let err = read_dump(&short).unwrap_err();
        assert!(matches!(&err, Error::Format { reason, .. } if reason.contains("truncated")), "{err}");

        let mut wrong = bytes.clone();
        wrong[0] = b'X';
        let magic = dir.path().join("magic.stsd");
        std::fs::write(&magic, wrong).unwrap();
        let err = read_dump(&magic).unwrap_err();
        assert!(matches!(&err, Error::Format { reason, .. } if reason.contains("magic")), "{err}");
    }

    #[test]
    fn header_manifest_mismatch_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.stsd");
        write_dump(&dump_2x3(), &path).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        bytes[28] = 1; // space → sae_features in the header only
        std::fs::write(&path, bytes).unwrap();
        assert!(matches!(read_dump(&path), Err(Error::Format { .. })));
    }

    #[test]
    fn oversized_axis_rejected() {
        let manifest = Manifest {
            source_id: "t".into(),
            layer: 0,
            n_tokens: MAX_AXIS + 1,
            dim: 1,
            space: Space::Raw,
            segments: vec![Segment::query("q", 0, MAX_AXIS + 1)],
        };
        assert!(manifest.validate().is_err());
    }

    #[test]
    fn overlapping_segments_rejected() {
        let manifest = Manifest {
            source_id: "t".into(),
            layer: 0,
            n_tokens: 4,
            dim: 1,
            space: Space::Raw,
            segments: vec![Segment::query("a", 0, 3), Segment::query("b", 2, 1)],
        };
        assert!(manifest.validate().is_err());
    }

    #[test]
    fn align_drops_context_rows() {
        let plain = dump_with(vec![Segment::query("q1", 0, 4)], 4, 2);
        let ctx = dump_with(
            vec![Segment::context("demo", 0, 100), Segment::query("q1", 100, 4)],
            104,
            2,
        );
        let pair = align_pairs(&plain, &ctx).unwrap();
        assert_eq!(pair.len(), 4);
        assert_eq!(pair.ctx().row(0), ctx.data().row(100));
        assert_eq!(pair.plain().row(3), plain.data().row(3));
    }

    #[test]
    fn align_span_mismatch_and_missing_doc() {
        let plain = dump_with(vec![Segment::query("q1", 0, 4)], 4, 2);
        let ctx = dump_with(vec![Segment::query("q1", 0, 5)], 5, 2);
        assert!(align_pairs(&plain, &ctx).is_err());

        let plain = dump_with(vec![Segment::query("q1", 0, 2), Segment::query("q2", 2, 2)], 4, 2);
        let ctx = dump_with(vec![Segment::query("q1", 0, 2)], 2, 2);
        let err = align_pairs(&plain, &ctx).unwrap_err().to_string();
        assert!(err.contains("q2"), "{err}");
    }

    #[test]
    fn align_dim_mismatch() {
        let plain = dump_with(vec![Segment::query("q1", 0, 2)], 2, 2);
        let ctx = dump_with(vec![Segment::query("q1", 0, 2)], 2, 3);
        assert!(align_pairs(&plain, &ctx).is_err());
    }
}

//! On-disk formats.
//!
//! All binary formats are little-endian and start with a 4-byte magic and a
//! `u32` version. Readers reject unknown versions.
//!
//! Feature file (`VKFT`, version 1), 21-byte header then payload:
//!
//! ```text
//! magic [4] | version u32 | rows u64 | dim u32 | role u8 | rows*dim f32
//! ```
//!
//! Voken corpus file (`VKVC`, version 1):
//!
//! ```text
//! magic [4] | version u32 | vocab_size u32 | strategy_len u32 | strategy [strategy_len] UTF-8
//! | record_count u64 | records...
//! record: sentence_id u64 | n_tokens u32 | voken_ids [n_tokens] i32   (-1 = sentinel)
//! ```
//!
//! Matcher checkpoint (`VKCK`, version 1):
//!
//! ```text
//! magic [4] | version u32 | mode u8 | margin f64 | token head | image head
//! head: input u32 | hidden u32 | output u32 | w1 | b1 | w2 | b2   (f64 each)
//! ```
//!
//! Writers go through a temporary file in the destination directory which is
//! renamed into place.

use std::collections::HashMap;
use std::fs::File;
use std::io::{self, BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::corpus::CaptionPair;
use crate::features::{FeatureError, FeatureMatrix, FeatureRole};
use crate::index::VokenAssignment;
use crate::matcher::{MatcherMode, MatcherModel, MlpParams};
use crate::revokenize::SENTINEL_VOKEN;

pub const FEATURE_MAGIC: [u8; 4] = *b"VKFT";
pub const VOKEN_MAGIC: [u8; 4] = *b"VKVC";
pub const CHECKPOINT_MAGIC: [u8; 4] = *b"VKCK";
pub const FORMAT_VERSION: u32 = 1;
/// Bytes before the payload of a version-1 feature file.
pub const FEATURE_HEADER_LEN: u64 = 21;

#[derive(Debug, Error)]
pub enum StorageError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("bad magic {found:?}, expected {expected:?}")]
    BadMagic { expected: [u8; 4], found: [u8; 4] },
    #[error("unsupported format version {found} (supported: {FORMAT_VERSION})")]
    UnsupportedVersion { found: u32 },
    #[error("truncated {what}")]
    Truncated { what: &'static str },
    #[error("{extra} unexpected bytes after declared payload")]
    TrailingBytes { extra: u64 },
    #[error("unknown feature role {0}")]
    UnknownRole(u8),
    #[error("invalid {what}: {reason}")]
    Invalid { what: &'static str, reason: String },
    #[error("sentence {sentence_id}: voken id {id} outside [0, {vocab_size})")]
    VokenOutOfRange {
        sentence_id: u64,
        id: i32,
        vocab_size: u32,
    },
    #[error("{path} line {line}: {reason}")]
    Table {
        path: PathBuf,
        line: usize,
        reason: String,
    },
    #[error(transparent)]
    Feature(#[from] FeatureError),
}

fn io_err(path: &Path) -> impl Fn(io::Error) -> StorageError + '_ {
    move |source| StorageError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Writes through a sibling temporary file renamed over `path` on success.
pub fn write_atomic<F>(path: &Path, write: F) -> Result<(), StorageError>
where
    F: FnOnce(&mut dyn Write) -> Result<(), StorageError>,
{
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    let tmp = tempfile::NamedTempFile::new_in(dir).map_err(io_err(path))?;
    {
        let mut w = BufWriter::new(tmp.as_file());
        write(&mut w)?;
        w.flush().map_err(io_err(path))?;
    }
    tmp.as_file().sync_all().map_err(io_err(path))?;
    tmp.persist(path).map_err(|e| StorageError::Io {
        path: path.to_path_buf(),
        source: e.error,
    })?;
    Ok(())
}

fn open(path: &Path) -> Result<BufReader<File>, StorageError> {
    Ok(BufReader::new(File::open(path).map_err(io_err(path))?))
}

struct Le<'a, W: ?Sized>(&'a mut W);

impl<W: Write + ?Sized> Le<'_, W> {
    fn bytes(&mut self, b: &[u8]) -> Result<(), StorageError> {
        self.0.write_all(b).map_err(|source| StorageError::Io {
            path: PathBuf::new(),
            source,
        })
    }
    fn u8(&mut self, v: u8) -> Result<(), StorageError> {
        self.bytes(&[v])
    }
    fn u32(&mut self, v: u32) -> Result<(), StorageError> {
        self.bytes(&v.to_le_bytes())
    }
    fn u64(&mut self, v: u64) -> Result<(), StorageError> {
        self.bytes(&v.to_le_bytes())
    }
    fn f64s(&mut self, vs: &[f64]) -> Result<(), StorageError> {
        vs.iter().try_for_each(|v| self.bytes(&v.to_le_bytes()))
    }
}

struct LeReader<R> {
    inner: R,
}

impl<R: Read> LeReader<R> {
    fn exact<const N: usize>(&mut self, what: &'static str) -> Result<[u8; N], StorageError> {
        let mut buf = [0u8; N];
        self.fill(&mut buf, what)?;
        Ok(buf)
    }

    fn fill(&mut self, buf: &mut [u8], what: &'static str) -> Result<(), StorageError> {
        self.inner.read_exact(buf).map_err(|e| match e.kind() {
            io::ErrorKind::UnexpectedEof => StorageError::Truncated { what },
            _ => StorageError::Io {
                path: PathBuf::new(),
                source: e,
            },
        })
    }

    fn u8(&mut self, what: &'static str) -> Result<u8, StorageError> {
        Ok(self.exact::<1>(what)?[0])
    }
    fn u32(&mut self, what: &'static str) -> Result<u32, StorageError> {
        Ok(u32::from_le_bytes(self.exact(what)?))
    }
    fn u64(&mut self, what: &'static str) -> Result<u64, StorageError> {
        Ok(u64::from_le_bytes(self.exact(what)?))
    }
    fn i32(&mut self, what: &'static str) -> Result<i32, StorageError> {
        Ok(i32::from_le_bytes(self.exact(what)?))
    }
    fn f64(&mut self, what: &'static str) -> Result<f64, StorageError> {
        Ok(f64::from_le_bytes(self.exact(what)?))
    }
    fn f64s(&mut self, n: usize, what: &'static str) -> Result<Vec<f64>, StorageError> {
        (0..n).map(|_| self.f64(what)).collect()
    }

    fn magic(&mut self, expected: [u8; 4]) -> Result<(), StorageError> {
        let found = self.exact::<4>("header")?;
        if found != expected {
            return Err(StorageError::BadMagic { expected, found });
        }
        let version = self.u32("header")?;
        if version != FORMAT_VERSION {
            return Err(StorageError::UnsupportedVersion { found: version });
        }
        Ok(())
    }

    /// Fails unless the stream is exhausted.
    fn finish(mut self) -> Result<(), StorageError> {
        let mut rest = Vec::new();
        self.inner
            .read_to_end(&mut rest)
            .map_err(|source| StorageError::Io {
                path: PathBuf::new(),
                source,
            })?;
        if rest.is_empty() {
            Ok(())
        } else {
            Err(StorageError::TrailingBytes {
                extra: rest.len() as u64,
            })
        }
    }
}

fn with_path(path: &Path, e: StorageError) -> StorageError {
    match e {
        StorageError::Io { source, .. } => StorageError::Io {
            path: path.to_path_buf(),
            source,
        },
        other => other,
    }
}

// ---------------------------------------------------------------------------
// Feature files

pub fn encode_features<W: Write + ?Sized>(
    m: &FeatureMatrix,
    w: &mut W,
) -> Result<(), StorageError> {
    let mut out = Le(w);
    out.bytes(&FEATURE_MAGIC)?;
    out.u32(FORMAT_VERSION)?;
    out.u64(m.rows() as u64)?;
    out.u32(u32::try_from(m.dim()).map_err(|_| StorageError::Invalid {
        what: "feature dim",
        reason: format!("{} exceeds u32", m.dim()),
    })?)?;
    out.u8(m.role() as u8)?;
    let mut payload = Vec::with_capacity(m.values().len() * 4);
    for v in m.values() {
        payload.extend_from_slice(&v.to_le_bytes());
    }
    out.bytes(&payload)
}

pub fn write_features(path: &Path, m: &FeatureMatrix) -> Result<(), StorageError> {
    write_atomic(path, |w| encode_features(m, w)).map_err(|e| with_path(path, e))
}

/// Header of a feature file.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FeatureHeader {
    pub rows: u64,
    pub dim: u32,
    pub role: FeatureRole,
}

/// Streams rows of a feature file.
pub struct FeatureReader<R> {
    reader: LeReader<R>,
    header: FeatureHeader,
    next_row: u64,
}

impl<R: Read> FeatureReader<R> {
    pub fn new(inner: R) -> Result<Self, StorageError> {
        let mut reader = LeReader { inner };
        reader.magic(FEATURE_MAGIC)?;
        let rows = reader.u64("header")?;
        let dim = reader.u32("header")?;
        let role_byte = reader.u8("header")?;
        let role = FeatureRole::from_u8(role_byte).ok_or(StorageError::UnknownRole(role_byte))?;
        Ok(Self {
            reader,
            header: FeatureHeader { rows, dim, role },
            next_row: 0,
        })
    }

    pub fn header(&self) -> FeatureHeader {
        self.header
    }

    /// Next row, or `None` once all declared rows have been read.
    pub fn next_row(&mut self) -> Result<Option<Vec<f32>>, StorageError> {
        if self.next_row == self.header.rows {
            return Ok(None);
        }
        let mut buf = vec![0u8; self.header.dim as usize * 4];
        self.reader.fill(&mut buf, "feature payload")?;
        self.next_row += 1;
        Ok(Some(
            buf.chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect(),
        ))
    }

    /// Reads all remaining rows and checks nothing follows them.
    pub fn read_all(mut self) -> Result<FeatureMatrix, StorageError> {
        let rows = usize::try_from(self.header.rows).map_err(|_| StorageError::Invalid {
            what: "row count",
            reason: self.header.rows.to_string(),
        })?;
        let dim = self.header.dim as usize;
        let mut values = Vec::with_capacity(rows.saturating_mul(dim).min(1 << 28));
        while let Some(row) = self.next_row()? {
            values.extend(row);
        }
        let header = self.header;
        self.reader.finish()?;
        Ok(FeatureMatrix::new(rows, dim, header.role, values)?)
    }
}

pub fn decode_features<R: Read>(r: R) -> Result<FeatureMatrix, StorageError> {
    FeatureReader::new(r)?.read_all()
}

pub fn read_features(path: &Path) -> Result<FeatureMatrix, StorageError> {
    decode_features(open(path)?).map_err(|e| with_path(path, e))
}

// ---------------------------------------------------------------------------
// Voken corpus files

/// One sentence of a voken corpus file.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct VokenRecord {
    pub sentence_id: u64,
    pub voken_ids: Vec<i32>,
}

impl From<&VokenAssignment> for VokenRecord {
    fn from(a: &VokenAssignment) -> Self {
        Self {
            sentence_id: a.sentence_id,
            voken_ids: a.voken_ids.clone(),
        }
    }
}

/// Header of a voken corpus file.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct VokenHeader {
    pub vocab_size: u32,
    /// Name of the strategy that produced the vokens.
    pub strategy: String,
    pub record_count: u64,
}

fn check_record(r: &VokenRecord, vocab_size: u32) -> Result<(), StorageError> {
    for &id in &r.voken_ids {
        if id != SENTINEL_VOKEN && (id < 0 || id as u32 >= vocab_size) {
            return Err(StorageError::VokenOutOfRange {
                sentence_id: r.sentence_id,
                id,
                vocab_size,
            });
        }
    }
    Ok(())
}

pub fn encode_vokens<W: Write + ?Sized>(
    records: &[VokenRecord],
    vocab_size: u32,
    strategy: &str,
    w: &mut W,
) -> Result<(), StorageError> {
    for r in records {
        check_record(r, vocab_size)?;
    }
    let mut out = Le(w);
    out.bytes(&VOKEN_MAGIC)?;
    out.u32(FORMAT_VERSION)?;
    out.u32(vocab_size)?;
    out.u32(strategy.len() as u32)?;
    out.bytes(strategy.as_bytes())?;
    out.u64(records.len() as u64)?;
    for r in records {
        out.u64(r.sentence_id)?;
        out.u32(r.voken_ids.len() as u32)?;
        for &id in &r.voken_ids {
            out.bytes(&id.to_le_bytes())?;
        }
    }
    Ok(())
}

pub fn write_vokens(
    path: &Path,
    records: &[VokenRecord],
    vocab_size: u32,
    strategy: &str,
) -> Result<(), StorageError> {
    write_atomic(path, |w| encode_vokens(records, vocab_size, strategy, w))
        .map_err(|e| with_path(path, e))
}

/// Streams records of a voken corpus file.
pub struct VokenReader<R> {
    reader: Option<LeReader<R>>,
    header: VokenHeader,
    remaining: u64,
}

impl<R: Read> VokenReader<R> {
    pub fn new(inner: R) -> Result<Self, StorageError> {
        let mut reader = LeReader { inner };
        reader.magic(VOKEN_MAGIC)?;
        let vocab_size = reader.u32("header")?;
        let len = reader.u32("header")? as usize;
        let mut name = vec![0u8; len];
        reader.fill(&mut name, "strategy name")?;
        let strategy = String::from_utf8(name).map_err(|e| StorageError::Invalid {
            what: "strategy name",
            reason: e.to_string(),
        })?;
        let record_count = reader.u64("header")?;
        Ok(Self {
            reader: Some(reader),
            header: VokenHeader {
                vocab_size,
                strategy,
                record_count,
            },
            remaining: record_count,
        })
    }

    pub fn header(&self) -> &VokenHeader {
        &self.header
    }

    fn read_record(&mut self) -> Result<VokenRecord, StorageError> {
        let reader = self
            .reader
            .as_mut()
            .expect("reader present while records remain");
        let sentence_id = reader.u64("voken record")?;
        let n = reader.u32("voken record")? as usize;
        let voken_ids = (0..n)
            .map(|_| reader.i32("voken record"))
            .collect::<Result<Vec<_>, _>>()?;
        let record = VokenRecord {
            sentence_id,
            voken_ids,
        };
        check_record(&record, self.header.vocab_size)?;
        Ok(record)
    }
}

impl<R: Read> Iterator for VokenReader<R> {
    type Item = Result<VokenRecord, StorageError>;

    fn next(&mut self) -> Option<Self::Item> {
        if self.remaining == 0 {
            // Surface trailing garbage once, after the last record.
            return self.reader.take().and_then(|r| r.finish().err()).map(Err);
        }
        self.remaining -= 1;
        let r = self.read_record();
        if r.is_err() {
            self.remaining = 0;
            self.reader = None;
        }
        Some(r)
    }
}

pub fn decode_vokens<R: Read>(r: R) -> Result<(VokenHeader, Vec<VokenRecord>), StorageError> {
    let reader = VokenReader::new(r)?;
    let header = reader.header().clone();
    let records = reader.collect::<Result<Vec<_>, _>>()?;
    Ok((header, records))
}

pub fn read_vokens(path: &Path) -> Result<(VokenHeader, Vec<VokenRecord>), StorageError> {
    decode_vokens(open(path)?).map_err(|e| with_path(path, e))
}

// ---------------------------------------------------------------------------
// Checkpoints

fn mode_byte(mode: MatcherMode) -> u8 {
    match mode {
        MatcherMode::TokenLevel => 0,
        MatcherMode::SentenceLevel => 1,
    }
}

pub fn encode_checkpoint<W: Write + ?Sized>(
    model: &MatcherModel,
    w: &mut W,
) -> Result<(), StorageError> {
    let mut out = Le(w);
    out.bytes(&CHECKPOINT_MAGIC)?;
    out.u32(FORMAT_VERSION)?;
    out.u8(mode_byte(model.mode))?;
    out.f64s(&[model.margin])?;
    for head in [&model.w_mlp, &model.x_mlp] {
        out.u32(head.input as u32)?;
        out.u32(head.hidden as u32)?;
        out.u32(head.output as u32)?;
        for t in head.tensors() {
            out.f64s(t)?;
        }
    }
    Ok(())
}

pub fn write_checkpoint(path: &Path, model: &MatcherModel) -> Result<(), StorageError> {
    write_atomic(path, |w| encode_checkpoint(model, w)).map_err(|e| with_path(path, e))
}

pub fn decode_checkpoint<R: Read>(inner: R) -> Result<MatcherModel, StorageError> {
    let mut r = LeReader { inner };
    r.magic(CHECKPOINT_MAGIC)?;
    let mode = match r.u8("checkpoint header")? {
        0 => MatcherMode::TokenLevel,
        1 => MatcherMode::SentenceLevel,
        other => {
            return Err(StorageError::Invalid {
                what: "matcher mode",
                reason: other.to_string(),
            })
        }
    };
    let margin = r.f64("checkpoint header")?;
    let mut heads = Vec::with_capacity(2);
    for _ in 0..2 {
        let input = r.u32("checkpoint head")? as usize;
        let hidden = r.u32("checkpoint head")? as usize;
        let output = r.u32("checkpoint head")? as usize;
        let mut p = MlpParams::zeros(input, hidden, output);
        p.w1 = r.f64s(input * hidden, "checkpoint weights")?;
        p.b1 = r.f64s(hidden, "checkpoint weights")?;
        p.w2 = r.f64s(hidden * output, "checkpoint weights")?;
        p.b2 = r.f64s(output, "checkpoint weights")?;
        heads.push(p);
    }
    r.finish()?;
    let x_mlp = heads.pop().expect("two heads");
    let w_mlp = heads.pop().expect("two heads");
    if w_mlp.output != x_mlp.output {
        return Err(StorageError::Invalid {
            what: "checkpoint",
            reason: format!(
                "head output widths differ ({} vs {})",
                w_mlp.output, x_mlp.output
            ),
        });
    }
    Ok(MatcherModel {
        w_mlp,
        x_mlp,
        margin,
        mode,
    })
}

pub fn read_checkpoint(path: &Path) -> Result<MatcherModel, StorageError> {
    decode_checkpoint(open(path)?).map_err(|e| with_path(path, e))
}

// ---------------------------------------------------------------------------
// Text tables

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ManifestEntry {
    pub image_id: String,
    pub uri: String,
}

/// Image manifest: TSV of `voken_id<TAB>image_id<TAB>uri`, voken ids dense from 0
/// in file order.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ImageManifest {
    pub entries: Vec<ManifestEntry>,
    by_id: HashMap<String, usize>,
}

impl ImageManifest {
    pub fn from_entries(entries: Vec<ManifestEntry>) -> Result<Self, String> {
        let mut by_id = HashMap::with_capacity(entries.len());
        for (i, e) in entries.iter().enumerate() {
            if by_id.insert(e.image_id.clone(), i).is_some() {
                return Err(format!("duplicate image id `{}`", e.image_id));
            }
        }
        Ok(Self { entries, by_id })
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn voken_id(&self, image_id: &str) -> Option<usize> {
        self.by_id.get(image_id).copied()
    }

    pub fn image_ids(&self) -> Vec<String> {
        self.entries.iter().map(|e| e.image_id.clone()).collect()
    }

    pub fn parse(text: &str, path: &Path) -> Result<Self, StorageError> {
        let table_err = |line: usize, reason: String| StorageError::Table {
            path: path.to_path_buf(),
            line,
            reason,
        };
        let mut entries = Vec::new();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split('\t').collect();
            if fields.len() != 3 {
                return Err(table_err(
                    i + 1,
                    format!("expected 3 tab-separated fields, found {}", fields.len()),
                ));
            }
            let id: usize = fields[0]
                .parse()
                .map_err(|_| table_err(i + 1, format!("bad voken id `{}`", fields[0])))?;
            if id != entries.len() {
                return Err(table_err(
                    i + 1,
                    format!("voken id {id} out of order, expected {}", entries.len()),
                ));
            }
            entries.push(ManifestEntry {
                image_id: fields[1].to_string(),
                uri: fields[2].to_string(),
            });
        }
        Self::from_entries(entries).map_err(|reason| table_err(0, reason))
    }

    pub fn to_tsv(&self) -> String {
        let mut out = String::new();
        for (i, e) in self.entries.iter().enumerate() {
            out.push_str(&format!("{i}\t{}\t{}\n", e.image_id, e.uri));
        }
        out
    }
}

pub fn read_manifest(path: &Path) -> Result<ImageManifest, StorageError> {
    let text = std::fs::read_to_string(path).map_err(io_err(path))?;
    ImageManifest::parse(&text, path)
}

pub fn write_manifest(path: &Path, manifest: &ImageManifest) -> Result<(), StorageError> {
    write_atomic(path, |w| {
        w.write_all(manifest.to_tsv().as_bytes())
            .map_err(io_err(path))
    })
}

/// Caption pairs: TSV of `sentence_id<TAB>image_id`, image ids resolved
/// against `manifest`.
pub fn read_caption_pairs(
    path: &Path,
    manifest: &ImageManifest,
) -> Result<Vec<CaptionPair>, StorageError> {
    let text = std::fs::read_to_string(path).map_err(io_err(path))?;
    let mut pairs = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let table_err = |reason: String| StorageError::Table {
            path: path.to_path_buf(),
            line: i + 1,
            reason,
        };
        let (sid, image) = line
            .split_once('\t')
            .ok_or_else(|| table_err("expected sentence_id<TAB>image_id".to_string()))?;
        let sentence_id = sid
            .parse()
            .map_err(|_| table_err(format!("bad sentence id `{sid}`")))?;
        let image_id = manifest
            .voken_id(image)
            .ok_or_else(|| table_err(format!("image `{image}` not in manifest")))?;
        pairs.push(CaptionPair {
            sentence_id,
            image_id,
        });
    }
    Ok(pairs)
}

pub fn write_caption_pairs(
    path: &Path,
    pairs: &[CaptionPair],
    manifest: &ImageManifest,
) -> Result<(), StorageError> {
    write_atomic(path, |w| {
        for p in pairs {
            let image = &manifest.entries[p.image_id].image_id;
            writeln!(w, "{}\t{}", p.sentence_id, image).map_err(io_err(path))?;
        }
        Ok(())
    })
}

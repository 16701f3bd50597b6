//! Embedding dumps and corpus bookkeeping.
//!
//! A dump holds one (model, layer, domain) slice of a corpus: for every
//! sentence the token ids and the hidden states at one layer. The binary
//! layout is fixed and little-endian:
//!
//! ```text
//! magic "MIPD" (4) | format_version u16 | dtype_code u8 | reserved u8
//! vocab_size u32 | d u32 | layer u16 | record_count u64
//! per record: n u32 | n x u32 token ids | rows x d x f32 (row-major)
//! ```
//!
//! `rows` is `n` for per-position dumps. Bit 0 of the reserved byte marks a
//! mean-pooled dump, whose records carry a single embedding row.
//!
//! Model name, domain tag and tokenizer live in a JSON sidecar next to the
//! dump (`<dump>.manifest.json`), see [`Manifest`].

use std::collections::{BTreeMap, HashMap};
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

pub const DUMP_MAGIC: [u8; 4] = *b"MIPD";
pub const DUMP_VERSION: u16 = 1;
/// Serialized header length in bytes.
pub const HEADER_LEN: u64 = 4 + 2 + 1 + 1 + 4 + 4 + 2 + 8;

const POOLED_FLAG: u8 = 0b1;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PoolingMode {
    /// One embedding row per token.
    #[default]
    PerPosition,
    /// A single pooled row per sentence. Experimental for probing.
    MeanPooled,
}


#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Dtype {
    Float32,
}

impl Dtype {
    pub fn code(self) -> u8 {
        match self {
            Dtype::Float32 => 0,
        }
    }

    pub fn from_code(code: u8) -> Result<Self> {
        match code {
            0 => Ok(Dtype::Float32),
            other => Err(Error::UnsupportedDtype(other)),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DumpHeader {
    pub format_version: u16,
    pub dtype: Dtype,
    pub pooling: PoolingMode,
    pub vocab_size: u32,
    pub dim: u32,
    pub layer: u16,
    pub record_count: u64,
}

impl DumpHeader {
    pub fn new(vocab_size: u32, dim: u32, layer: u16) -> Self {
        DumpHeader {
            format_version: DUMP_VERSION,
            dtype: Dtype::Float32,
            pooling: PoolingMode::PerPosition,
            vocab_size,
            dim,
            layer,
            record_count: 0,
        }
    }

    pub fn with_pooling(mut self, pooling: PoolingMode) -> Self {
        self.pooling = pooling;
        self
    }

    fn write_to<W: Write>(&self, w: &mut W) -> std::io::Result<()> {
        w.write_all(&DUMP_MAGIC)?;
        w.write_u16::<LittleEndian>(self.format_version)?;
        w.write_u8(self.dtype.code())?;
        let reserved = match self.pooling {
            PoolingMode::PerPosition => 0,
            PoolingMode::MeanPooled => POOLED_FLAG,
        };
        w.write_u8(reserved)?;
        w.write_u32::<LittleEndian>(self.vocab_size)?;
        w.write_u32::<LittleEndian>(self.dim)?;
        w.write_u16::<LittleEndian>(self.layer)?;
        w.write_u64::<LittleEndian>(self.record_count)
    }

    fn read_from<R: Read>(r: &mut R) -> Result<Self> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic).map_err(header_err)?;
        if magic != DUMP_MAGIC {
            return Err(Error::BadMagic { found: magic, expected: DUMP_MAGIC });
        }
        let format_version = r.read_u16::<LittleEndian>().map_err(header_err)?;
        if format_version != DUMP_VERSION {
            return Err(Error::UnsupportedVersion(format_version));
        }
        let dtype = Dtype::from_code(r.read_u8().map_err(header_err)?)?;
        let reserved = r.read_u8().map_err(header_err)?;
        let pooling = if reserved & POOLED_FLAG != 0 {
            PoolingMode::MeanPooled
        } else {
            PoolingMode::PerPosition
        };
        let vocab_size = r.read_u32::<LittleEndian>().map_err(header_err)?;
        let dim = r.read_u32::<LittleEndian>().map_err(header_err)?;
        let layer = r.read_u16::<LittleEndian>().map_err(header_err)?;
        let record_count = r.read_u64::<LittleEndian>().map_err(header_err)?;
        Ok(DumpHeader { format_version, dtype, pooling, vocab_size, dim, layer, record_count })
    }

    /// Number of embedding rows a record with `n` tokens carries.
    pub fn rows_for(&self, n: usize) -> usize {
        match self.pooling {
            PoolingMode::PerPosition => n,
            PoolingMode::MeanPooled => 1,
        }
    }
}

fn header_err(e: std::io::Error) -> Error {
    if e.kind() == std::io::ErrorKind::UnexpectedEof {
        Error::Truncated { record: 0 }
    } else {
        Error::Io(e)
    }
}

/// Sidecar metadata for one dump.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub model_name: String,
    pub tokenizer_id: String,
    pub layer: u16,
    pub pooling_mode: PoolingMode,
    pub domain_tag: String,
    #[serde(default)]
    pub metadata: BTreeMap<String, String>,
}

impl Manifest {
    pub fn new(model_name: impl Into<String>, domain_tag: impl Into<String>, layer: u16) -> Self {
        Manifest {
            model_name: model_name.into(),
            tokenizer_id: String::new(),
            layer,
            pooling_mode: PoolingMode::PerPosition,
            domain_tag: domain_tag.into(),
            metadata: BTreeMap::new(),
        }
    }
}

/// Path of the JSON sidecar for a dump file.
pub fn manifest_path(dump: &Path) -> PathBuf {
    let mut s = dump.as_os_str().to_owned();
    s.push(".manifest.json");
    PathBuf::from(s)
}

/// One sentence at one layer: token ids plus the embedding rows.
///
/// `id` is the record's position in its dump; layer and domain are
/// dump-level properties carried by [`DumpHeader`] and [`Manifest`].
#[derive(Clone, Debug, PartialEq)]
pub struct SentenceRecord {
    pub id: u64,
    pub tokens: Vec<u32>,
    /// Row-major, `rows x dim`.
    pub embeddings: Vec<f32>,
    pub dim: usize,
}

impl SentenceRecord {
    /// Builds a record, checking shape and finiteness. `embeddings` must hold
    /// either `n` rows (per-position) or one row (pooled).
    pub fn new(id: u64, tokens: Vec<u32>, embeddings: Vec<f32>, dim: usize) -> Result<Self> {
        if tokens.is_empty() {
            return Err(Error::Empty("sentence has no tokens"));
        }
        if dim == 0 {
            return Err(Error::DimensionMismatch("embedding dimension must be positive".into()));
        }
        let n = tokens.len();
        if embeddings.len() != n * dim && embeddings.len() != dim {
            return Err(Error::DimensionMismatch(format!(
                "record {id}: {} embedding values for n={n}, d={dim}",
                embeddings.len()
            )));
        }
        if let Some(offset) = embeddings.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite { record: id, offset });
        }
        Ok(SentenceRecord { id, tokens, embeddings, dim })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn rows(&self) -> usize {
        self.embeddings.len() / self.dim
    }

    pub fn is_pooled(&self) -> bool {
        self.rows() == 1 && self.len() > 1
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.embeddings[i * self.dim..(i + 1) * self.dim]
    }

    /// Embedding row paired with token position `i`; pooled records share
    /// their single row across all positions.
    pub fn row_for_position(&self, i: usize) -> &[f32] {
        if self.rows() == 1 {
            self.row(0)
        } else {
            self.row(i)
        }
    }
}

/// Tokenizer vocabulary: a bijection between surface tokens and ids.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocabulary {
    tokenizer_id: String,
    tokens: Vec<String>,
    index: HashMap<String, u32>,
}

impl Vocabulary {
    pub fn from_tokens(tokenizer_id: impl Into<String>, tokens: Vec<String>) -> Result<Self> {
        if tokens.len() < 2 {
            return Err(Error::InvalidArgument(format!(
                "vocabulary needs at least 2 tokens, got {}",
                tokens.len()
            )));
        }
        let mut index = HashMap::with_capacity(tokens.len());
        for (id, tok) in tokens.iter().enumerate() {
            if index.insert(tok.clone(), id as u32).is_some() {
                return Err(Error::InvalidArgument(format!("duplicate token {tok:?}")));
            }
        }
        Ok(Vocabulary { tokenizer_id: tokenizer_id.into(), tokens, index })
    }

    /// Parses the extractor's `{token: id}` sidecar. Ids must cover `0..len`.
    pub fn from_json_map(tokenizer_id: impl Into<String>, json: &str) -> Result<Self> {
        let map: HashMap<String, u32> = serde_json::from_str(json)?;
        let len = map.len();
        let mut tokens = vec![None; len];
        for (tok, id) in map {
            let slot = tokens
                .get_mut(id as usize)
                .ok_or_else(|| Error::InvalidArgument(format!("token id {id} outside 0..{len}")))?;
            if slot.replace(tok).is_some() {
                return Err(Error::InvalidArgument(format!("token id {id} assigned twice")));
            }
        }
        let tokens = tokens
            .into_iter()
            .enumerate()
            .map(|(id, t)| t.ok_or_else(|| Error::InvalidArgument(format!("token id {id} missing"))))
            .collect::<Result<Vec<_>>>()?;
        Self::from_tokens(tokenizer_id, tokens)
    }

    /// `tok0 .. tok{size-1}`, for synthetic corpora.
    pub fn synthetic(size: u32) -> Result<Self> {
        Self::from_tokens("synthetic", (0..size).map(|i| format!("tok{i}")).collect())
    }

    pub fn size(&self) -> u32 {
        self.tokens.len() as u32
    }

    pub fn tokenizer_id(&self) -> &str {
        &self.tokenizer_id
    }

    pub fn id_of(&self, token: &str) -> Option<u32> {
        self.index.get(token).copied()
    }

    pub fn token_of(&self, id: u32) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    pub fn decode(&self, ids: &[u32]) -> Vec<&str> {
        ids.iter().map(|&id| self.token_of(id).unwrap_or("<unk>")).collect()
    }
}

/// Serializes `records` after `header`. The written `record_count` is always
/// `records.len()`. Returns the number of bytes written.
pub fn write_dump<W: Write>(records: &[SentenceRecord], header: &DumpHeader, sink: &mut W) -> Result<u64> {
    let dim = header.dim as usize;
    for r in records {
        if r.dim != dim {
            return Err(Error::DimensionMismatch(format!(
                "record {} has d={}, header says d={dim}",
                r.id, r.dim
            )));
        }
        if r.rows() != header.rows_for(r.len()) {
            return Err(Error::DimensionMismatch(format!(
                "record {} has {} embedding rows for n={} under {:?}",
                r.id,
                r.rows(),
                r.len(),
                header.pooling
            )));
        }
        if let Some(&id) = r.tokens.iter().find(|&&t| t >= header.vocab_size) {
            return Err(Error::TokenOutOfRange { record: r.id, id, vocab_size: header.vocab_size });
        }
    }

    let mut header = header.clone();
    header.record_count = records.len() as u64;
    header.write_to(sink)?;
    let mut written = HEADER_LEN;
    for r in records {
        sink.write_u32::<LittleEndian>(r.len() as u32)?;
        for &t in &r.tokens {
            sink.write_u32::<LittleEndian>(t)?;
        }
        for &v in &r.embeddings {
            sink.write_f32::<LittleEndian>(v)?;
        }
        written += 4 + 4 * r.tokens.len() as u64 + 4 * r.embeddings.len() as u64;
    }
    sink.flush()?;
    Ok(written)
}

/// Writes a dump file plus its manifest sidecar.
pub fn write_dump_file(path: &Path, records: &[SentenceRecord], header: &DumpHeader, manifest: &Manifest) -> Result<u64> {
    let file = File::create(path).map_err(|e| Error::at_path(path, e))?;
    let mut sink = BufWriter::new(file);
    let n = write_dump(records, header, &mut sink)?;
    let mpath = manifest_path(path);
    let json = serde_json::to_string_pretty(manifest)?;
    std::fs::write(&mpath, json).map_err(|e| Error::at_path(mpath, e))?;
    Ok(n)
}

pub fn read_manifest(dump: &Path) -> Result<Manifest> {
    let mpath = manifest_path(dump);
    let text = std::fs::read_to_string(&mpath).map_err(|e| Error::at_path(mpath, e))?;
    Ok(serde_json::from_str(&text)?)
}

/// Streaming reader over a dump. Iteration yields checked records in written
/// order and stops after the first error.
pub struct DumpReader<R> {
    header: DumpHeader,
    inner: R,
    next: u64,
    done: bool,
}

/// Opens a dump stream, reading and checking the header.
pub fn read_dump<R: Read>(source: R) -> Result<DumpReader<R>> {
    DumpReader::new(source)
}

/// Opens a dump file for buffered streaming.
pub fn open_dump(path: &Path) -> Result<DumpReader<BufReader<File>>> {
    let file = File::open(path).map_err(|e| Error::at_path(path, e))?;
    read_dump(BufReader::new(file))
}

/// Reads a whole dump file into memory.
pub fn load_dump(path: &Path) -> Result<(DumpHeader, Vec<SentenceRecord>)> {
    let reader = open_dump(path)?;
    let header = reader.header().clone();
    let records = reader.collect::<Result<Vec<_>>>()?;
    Ok((header, records))
}

impl<R: Read> DumpReader<R> {
    pub fn new(mut inner: R) -> Result<Self> {
        let header = DumpHeader::read_from(&mut inner)?;
        Ok(DumpReader { header, inner, next: 0, done: false })
    }

    pub fn header(&self) -> &DumpHeader {
        &self.header
    }

    /// Reads the next record without token-range or finiteness checks.
    /// Only truncation and I/O failures are errors here.
    pub fn next_unchecked(&mut self) -> Option<Result<SentenceRecord>> {
        if self.done || self.next >= self.header.record_count {
            return None;
        }
        let idx = self.next;
        self.next += 1;
        let out = self.read_record(idx);
        if out.is_err() {
            self.done = true;
        }
        Some(out)
    }

    /// True if the stream has bytes left after the declared records.
    pub fn has_trailing_bytes(&mut self) -> Result<bool> {
        let mut b = [0u8; 1];
        loop {
            match self.inner.read(&mut b) {
                Ok(0) => return Ok(false),
                Ok(_) => return Ok(true),
                Err(e) if e.kind() == std::io::ErrorKind::Interrupted => continue,
                Err(e) => return Err(e.into()),
            }
        }
    }

    fn read_record(&mut self, idx: u64) -> Result<SentenceRecord> {
        let trunc = |e: std::io::Error| {
            if e.kind() == std::io::ErrorKind::UnexpectedEof {
                Error::Truncated { record: idx }
            } else {
                Error::Io(e)
            }
        };
        let n = self.inner.read_u32::<LittleEndian>().map_err(trunc)? as usize;
        let dim = self.header.dim as usize;
        let rows = self.header.rows_for(n);
        let payload = 4 * (n as u64 + (rows as u64) * dim as u64);
        // read_to_end grows the buffer as data arrives, so a corrupted n
        // cannot trigger a huge up-front allocation.
        let mut buf = Vec::new();
        (&mut self.inner).take(payload).read_to_end(&mut buf)?;
        if (buf.len() as u64) < payload {
            return Err(Error::Truncated { record: idx });
        }
        let (tok_bytes, emb_bytes) = buf.split_at(4 * n);
        let tokens = tok_bytes
            .chunks_exact(4)
            .map(|c| u32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        let embeddings = emb_bytes
            .chunks_exact(4)
            .map(|c| f32::from_bits(u32::from_le_bytes([c[0], c[1], c[2], c[3]])))
            .collect();
        Ok(SentenceRecord { id: idx, tokens, embeddings, dim })
    }
}

impl<R: Read> Iterator for DumpReader<R> {
    type Item = Result<SentenceRecord>;

    fn next(&mut self) -> Option<Self::Item> {
        let rec = match self.next_unchecked()? {
            Ok(r) => r,
            Err(e) => return Some(Err(e)),
        };
        let checked = check_record(&rec, &self.header);
        match checked {
            Ok(()) => Some(Ok(rec)),
            Err(e) => {
                self.done = true;
                Some(Err(e))
            }
        }
    }
}

fn check_record(rec: &SentenceRecord, header: &DumpHeader) -> Result<()> {
    if rec.tokens.is_empty() {
        return Err(Error::Empty("sentence has no tokens"));
    }
    if let Some(&id) = rec.tokens.iter().find(|&&t| t >= header.vocab_size) {
        return Err(Error::TokenOutOfRange { record: rec.id, id, vocab_size: header.vocab_size });
    }
    if let Some(offset) = rec.embeddings.iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFinite { record: rec.id, offset });
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ViolationKind {
    TokenOutOfRange,
    NonFinite,
    EmptySentence,
    Truncated,
    TrailingBytes,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Violation {
    pub record: u64,
    pub kind: ViolationKind,
    pub detail: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ValidationReport {
    pub header: DumpHeader,
    pub records_read: u64,
    pub total_tokens: u64,
    pub min_len: Option<usize>,
    pub max_len: Option<usize>,
    pub violations: Vec<Violation>,
}

impl ValidationReport {
    pub fn passed(&self) -> bool {
        self.violations.is_empty()
    }
}

/// Scans a whole dump and lists every invariant violation by record index.
/// Only an unreadable header is an error; everything after it is reported.
pub fn validate_dump<R: Read>(source: R) -> Result<ValidationReport> {
    let mut reader = DumpReader::new(source)?;
    let header = reader.header().clone();
    let mut report = ValidationReport {
        header: header.clone(),
        records_read: 0,
        total_tokens: 0,
        min_len: None,
        max_len: None,
        violations: Vec::new(),
    };
    while let Some(next) = reader.next_unchecked() {
        let rec = match next {
            Ok(r) => r,
            Err(Error::Truncated { record }) => {
                report.violations.push(Violation {
                    record,
                    kind: ViolationKind::Truncated,
                    detail: format!("payload ends before record {record} of {}", header.record_count),
                });
                return Ok(report);
            }
            Err(e) => return Err(e),
        };
        report.records_read += 1;
        let n = rec.len();
        report.total_tokens += n as u64;
        report.min_len = Some(report.min_len.map_or(n, |m| m.min(n)));
        report.max_len = Some(report.max_len.map_or(n, |m| m.max(n)));
        if n == 0 {
            report.violations.push(Violation {
                record: rec.id,
                kind: ViolationKind::EmptySentence,
                detail: "n = 0".into(),
            });
        }
        let bad_ids: Vec<u32> = rec.tokens.iter().copied().filter(|&t| t >= header.vocab_size).collect();
        if !bad_ids.is_empty() {
            report.violations.push(Violation {
                record: rec.id,
                kind: ViolationKind::TokenOutOfRange,
                detail: format!("ids {bad_ids:?} >= vocab_size {}", header.vocab_size),
            });
        }
        let non_finite = rec.embeddings.iter().filter(|v| !v.is_finite()).count();
        if non_finite > 0 {
            let first = rec.embeddings.iter().position(|v| !v.is_finite()).unwrap_or(0);
            report.violations.push(Violation {
                record: rec.id,
                kind: ViolationKind::NonFinite,
                detail: format!("{non_finite} non-finite value(s), first at offset {first}"),
            });
        }
    }
    if reader.has_trailing_bytes()? {
        report.violations.push(Violation {
            record: report.records_read,
            kind: ViolationKind::TrailingBytes,
            detail: "bytes after the declared record count".into(),
        });
    }
    Ok(report)
}

/// Half-open, lower-inclusive length intervals.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BucketEdges(Vec<usize>);

const DEFAULT_EDGES: [usize; 5] = [50, 100, 300, 800, 1500];
const DEFAULT_LABELS: [&str; 4] = ["short", "medium", "long", "very_long"];
pub const OTHER_BUCKET: &str = "other";

impl Default for BucketEdges {
    fn default() -> Self {
        BucketEdges(DEFAULT_EDGES.to_vec())
    }
}

impl BucketEdges {
    pub fn new(edges: Vec<usize>) -> Result<Self> {
        if edges.len() < 2 {
            return Err(Error::InvalidArgument("bucket edges need at least two values".into()));
        }
        if edges.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::InvalidArgument(format!("bucket edges must be strictly ascending: {edges:?}")));
        }
        Ok(BucketEdges(edges))
    }

    /// Parses a comma-separated list such as `"0,10,20"`.
    pub fn parse(s: &str) -> Result<Self> {
        let edges = s
            .split(',')
            .map(|p| {
                p.trim()
                    .parse::<usize>()
                    .map_err(|_| Error::InvalidArgument(format!("bad bucket edge {p:?}")))
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(edges)
    }

    pub fn edges(&self) -> &[usize] {
        &self.0
    }

    pub fn bucket_count(&self) -> usize {
        self.0.len() - 1
    }

    pub fn label(&self, k: usize) -> String {
        if self.0 == DEFAULT_EDGES {
            DEFAULT_LABELS[k].to_string()
        } else {
            format!("{}-{}", self.0[k], self.0[k + 1])
        }
    }

    /// Index of the bucket holding length `n`, if any.
    pub fn locate(&self, n: usize) -> Option<usize> {
        // partition_point gives the count of edges <= n
        let k = self.0.partition_point(|&e| e <= n);
        (k >= 1 && k < self.0.len()).then(|| k - 1)
    }
}

#[derive(Clone, Debug)]
pub struct LengthBucket<'a> {
    pub label: String,
    /// `[lower, upper)`; `None` for the catch-all group.
    pub range: Option<(usize, usize)>,
    pub records: Vec<&'a SentenceRecord>,
}

/// Groups records by token count. Every bucket appears in the output (possibly
/// empty), followed by the `"other"` group for lengths outside all edges.
pub fn bucket_by_length<'a>(records: &'a [SentenceRecord], edges: &BucketEdges) -> Vec<LengthBucket<'a>> {
    let mut buckets: Vec<LengthBucket<'a>> = (0..edges.bucket_count())
        .map(|k| LengthBucket {
            label: edges.label(k),
            range: Some((edges.0[k], edges.0[k + 1])),
            records: Vec::new(),
        })
        .collect();
    buckets.push(LengthBucket { label: OTHER_BUCKET.to_string(), range: None, records: Vec::new() });
    let other = buckets.len() - 1;
    for r in records {
        let k = edges.locate(r.len()).unwrap_or(other);
        buckets[k].records.push(r);
    }
    buckets
}

//! Paired embedding sets: on-disk manifests, filtering, splitting, mixing
//! and seeded batch iteration.
//!
//! A [`PairSet`] holds its embedding matrices behind `Arc`, so subsets made
//! by [`filter_min_words`], [`split`] or [`PairSet::subset`] carry only their
//! records (which index into the shared matrices). [`mix`] is the one
//! operation that builds fresh matrices, since its sources do not share
//! storage.
//!
//! # On-disk layout
//!
//! A manifest directory contains `manifest.json`, naming a JSON-lines record
//! file and two embedding files. Embedding files are little-endian:
//!
//! ```text
//! "CCLB" | version u32 = 1 | dtype u8 = 0 (f32) | dim u32 | count u64 | count*dim f32
//! ```

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::rng;

pub const EMBEDDING_MAGIC: &[u8; 4] = b"CCLB";
pub const EMBEDDING_VERSION: u32 = 1;
const DTYPE_F32: u8 = 0;
const EMBEDDING_HEADER_LEN: usize = 4 + 4 + 1 + 4 + 8;

pub const MANIFEST_FILE: &str = "manifest.json";
pub const MANIFEST_VERSION: u32 = 1;

pub const DEFAULT_MIN_WORDS: usize = 5;
pub const DEFAULT_BATCH_SIZE: usize = 32;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Lang {
    En,
    Es,
    Pt,
    Uk,
    Ru,
    Other,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Style {
    Descriptive,
    Commentative,
    Unknown,
}

impl fmt::Display for Style {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Style::Descriptive => "descriptive",
            Style::Commentative => "commentative",
            Style::Unknown => "unknown",
        })
    }
}

impl std::str::FromStr for Style {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "descriptive" => Ok(Style::Descriptive),
            "commentative" => Ok(Style::Commentative),
            "unknown" => Ok(Style::Unknown),
            other => Err(Error::Argument(format!("unknown style {other:?}"))),
        }
    }
}

impl std::str::FromStr for Lang {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        serde_json::from_value(serde_json::Value::String(s.to_owned()))
            .map_err(|_| Error::Argument(format!("unknown language {s:?}")))
    }
}

/// One image-text pair. Unknown JSON fields are kept in `extra` and written
/// back unchanged.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairRecord {
    pub id: String,
    pub dataset: String,
    pub lang: Lang,
    pub style: Style,
    pub image_row: usize,
    pub text_row: usize,
    pub n_words: usize,
    #[serde(default)]
    pub text_raw: Option<String>,
    #[serde(flatten)]
    pub extra: serde_json::Map<String, serde_json::Value>,
}

/// Number of maximal runs of non-whitespace characters (Unicode whitespace).
pub fn word_count(text: &str) -> usize {
    text.split_whitespace().count()
}

#[derive(Debug, Clone)]
pub struct PairSet {
    records: Vec<PairRecord>,
    image_embeddings: Arc<Matrix>,
    text_embeddings: Arc<Matrix>,
}

impl PairSet {
    /// Validates ids, row bounds, word counts and embedding widths.
    pub fn new(records: Vec<PairRecord>, image_embeddings: Matrix, text_embeddings: Matrix) -> Result<Self> {
        Self::from_shared(records, Arc::new(image_embeddings), Arc::new(text_embeddings))
    }

    pub fn from_shared(
        records: Vec<PairRecord>,
        image_embeddings: Arc<Matrix>,
        text_embeddings: Arc<Matrix>,
    ) -> Result<Self> {
        if image_embeddings.cols() != text_embeddings.cols() {
            return Err(Error::Format(format!(
                "image embeddings have dim {} but text embeddings have dim {}",
                image_embeddings.cols(),
                text_embeddings.cols()
            )));
        }
        let mut seen = HashSet::with_capacity(records.len());
        for r in &records {
            if !seen.insert(r.id.as_str()) {
                return Err(integrity(r, "duplicate record id"));
            }
            check_bounds(r, &image_embeddings, &text_embeddings)?;
            if let Some(text) = &r.text_raw {
                let wc = word_count(text);
                if wc != r.n_words {
                    return Err(integrity(r, format!("n_words is {} but text has {wc} words", r.n_words)));
                }
            }
        }
        Ok(Self {
            records,
            image_embeddings,
            text_embeddings,
        })
    }

    pub fn empty(dim: usize) -> Self {
        Self {
            records: Vec::new(),
            image_embeddings: Arc::new(Matrix::zeros(0, dim)),
            text_embeddings: Arc::new(Matrix::zeros(0, dim)),
        }
    }

    pub fn records(&self) -> &[PairRecord] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.image_embeddings.cols()
    }

    pub fn image_embeddings(&self) -> &Arc<Matrix> {
        &self.image_embeddings
    }

    pub fn text_embeddings(&self) -> &Arc<Matrix> {
        &self.text_embeddings
    }

    pub fn image_vector(&self, i: usize) -> &[f32] {
        self.image_embeddings.row(self.records[i].image_row)
    }

    pub fn text_vector(&self, i: usize) -> &[f32] {
        self.text_embeddings.row(self.records[i].text_row)
    }

    /// Image vectors of the given records, one row each.
    pub fn gather_images(&self, indices: &[usize]) -> Matrix {
        let rows: Vec<usize> = indices.iter().map(|&i| self.records[i].image_row).collect();
        self.image_embeddings.gather_rows(&rows)
    }

    pub fn gather_texts(&self, indices: &[usize]) -> Matrix {
        let rows: Vec<usize> = indices.iter().map(|&i| self.records[i].text_row).collect();
        self.text_embeddings.gather_rows(&rows)
    }

    pub fn image_matrix(&self) -> Matrix {
        self.gather_images(&(0..self.len()).collect::<Vec<_>>())
    }

    pub fn text_matrix(&self) -> Matrix {
        self.gather_texts(&(0..self.len()).collect::<Vec<_>>())
    }

    /// Records at `indices`, in that order, sharing this set's embeddings.
    /// Repeated indices are rejected since ids must stay unique.
    pub fn subset(&self, indices: &[usize]) -> Result<PairSet> {
        let mut seen = vec![false; self.len()];
        let mut records = Vec::with_capacity(indices.len());
        for &i in indices {
            if i >= self.len() {
                return Err(Error::Argument(format!("subset index {i} out of range for {} records", self.len())));
            }
            if std::mem::replace(&mut seen[i], true) {
                return Err(integrity(&self.records[i], "selected twice"));
            }
            records.push(self.records[i].clone());
        }
        Ok(self.with_records(records))
    }

    fn with_records(&self, records: Vec<PairRecord>) -> PairSet {
        PairSet {
            records,
            image_embeddings: Arc::clone(&self.image_embeddings),
            text_embeddings: Arc::clone(&self.text_embeddings),
        }
    }

    /// Record counts by dataset tag.
    pub fn dataset_histogram(&self) -> BTreeMap<String, usize> {
        let mut h = BTreeMap::new();
        for r in &self.records {
            *h.entry(r.dataset.clone()).or_insert(0) += 1;
        }
        h
    }

    pub fn style_histogram(&self) -> BTreeMap<Style, usize> {
        let mut h = BTreeMap::new();
        for r in &self.records {
            *h.entry(r.style).or_insert(0) += 1;
        }
        h
    }

    pub fn lang_histogram(&self) -> BTreeMap<Lang, usize> {
        let mut h = BTreeMap::new();
        for r in &self.records {
            *h.entry(r.lang).or_insert(0) += 1;
        }
        h
    }

    /// Indices of records whose dataset tag is `tag`.
    pub fn indices_with_dataset(&self, tag: &str) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.records[i].dataset == tag).collect()
    }
}

fn integrity(r: &PairRecord, reason: impl Into<String>) -> Error {
    Error::Integrity {
        id: r.id.clone(),
        reason: reason.into(),
    }
}

fn check_bounds(r: &PairRecord, images: &Matrix, texts: &Matrix) -> Result<()> {
    if r.image_row >= images.rows() {
        return Err(integrity(
            r,
            format!("image_row {} out of bounds for {} image rows", r.image_row, images.rows()),
        ));
    }
    if r.text_row >= texts.rows() {
        return Err(integrity(
            r,
            format!("text_row {} out of bounds for {} text rows", r.text_row, texts.rows()),
        ));
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Embedding files

pub fn write_embeddings(m: &Matrix, w: &mut impl Write) -> Result<()> {
    w.write_all(EMBEDDING_MAGIC)?;
    w.write_all(&EMBEDDING_VERSION.to_le_bytes())?;
    w.write_all(&[DTYPE_F32])?;
    let dim = u32::try_from(m.cols()).map_err(|_| Error::Format(format!("dim {} exceeds u32", m.cols())))?;
    w.write_all(&dim.to_le_bytes())?;
    w.write_all(&(m.rows() as u64).to_le_bytes())?;
    for v in m.data() {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

pub fn read_embeddings(r: &mut impl Read) -> Result<Matrix> {
    let mut header = [0u8; EMBEDDING_HEADER_LEN];
    r.read_exact(&mut header)
        .map_err(|_| Error::Format("embedding file shorter than its header".into()))?;
    if &header[0..4] != EMBEDDING_MAGIC {
        return Err(Error::Format(format!("bad embedding magic {:?}", &header[0..4])));
    }
    let version = u32::from_le_bytes(header[4..8].try_into().unwrap());
    if version != EMBEDDING_VERSION {
        return Err(Error::UnsupportedVersion {
            found: version,
            expected: EMBEDDING_VERSION,
        });
    }
    if header[8] != DTYPE_F32 {
        return Err(Error::Format(format!("unsupported embedding dtype {}", header[8])));
    }
    let dim = u32::from_le_bytes(header[9..13].try_into().unwrap()) as usize;
    let count = u64::from_le_bytes(header[13..21].try_into().unwrap());
    let count = usize::try_from(count).map_err(|_| Error::Format(format!("row count {count} too large")))?;
    let n_bytes = count
        .checked_mul(dim)
        .and_then(|n| n.checked_mul(4))
        .ok_or_else(|| Error::Format(format!("embedding payload {count}x{dim} overflows")))?;
    let mut payload = Vec::new();
    r.take(n_bytes as u64).read_to_end(&mut payload)?;
    if payload.len() != n_bytes {
        return Err(Error::Format(format!(
            "truncated embedding payload: expected {n_bytes} bytes, found {}",
            payload.len()
        )));
    }
    let mut trailing = [0u8; 1];
    if r.read(&mut trailing)? != 0 {
        return Err(Error::Format("trailing bytes after embedding payload".into()));
    }
    let data = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Matrix::new(count, dim, data)
}

pub fn save_embeddings(m: &Matrix, path: &Path) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_embeddings(m, &mut w)?;
    w.flush()?;
    Ok(())
}

pub fn load_embeddings(path: &Path) -> Result<Matrix> {
    read_embeddings(&mut BufReader::new(File::open(path)?))
}

// ---------------------------------------------------------------------------
// Manifests

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub version: u32,
    pub records: String,
    pub image_embeddings: String,
    pub text_embeddings: String,
    pub dim: usize,
}

impl Manifest {
    pub fn standard(dim: usize) -> Self {
        Self {
            version: MANIFEST_VERSION,
            records: "records.jsonl".into(),
            image_embeddings: "image.cclb".into(),
            text_embeddings: "text.cclb".into(),
            dim,
        }
    }
}

/// Accepts either a manifest directory or the manifest file itself.
pub fn manifest_path(path: &Path) -> PathBuf {
    if path.is_dir() {
        path.join(MANIFEST_FILE)
    } else {
        path.to_path_buf()
    }
}

pub fn read_records(path: &Path) -> Result<Vec<PairRecord>> {
    let reader = BufReader::new(File::open(path)?);
    let mut out = Vec::new();
    for (lineno, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: PairRecord = serde_json::from_str(&line)
            .map_err(|e| Error::Format(format!("{}:{}: {e}", path.display(), lineno + 1)))?;
        out.push(rec);
    }
    Ok(out)
}

pub fn write_records(records: &[PairRecord], path: &Path) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for r in records {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn load_manifest(path: &Path) -> Result<PairSet> {
    let mpath = manifest_path(path);
    let manifest: Manifest = serde_json::from_reader(BufReader::new(File::open(&mpath)?))
        .map_err(|e| Error::Format(format!("{}: {e}", mpath.display())))?;
    if manifest.version != MANIFEST_VERSION {
        return Err(Error::UnsupportedVersion {
            found: manifest.version,
            expected: MANIFEST_VERSION,
        });
    }
    let base = mpath.parent().unwrap_or_else(|| Path::new("."));
    let images = load_embeddings(&base.join(&manifest.image_embeddings))?;
    let texts = load_embeddings(&base.join(&manifest.text_embeddings))?;
    for (what, m) in [("image", &images), ("text", &texts)] {
        if m.cols() != manifest.dim {
            return Err(Error::Format(format!(
                "{what} embeddings have dim {} but manifest declares {}",
                m.cols(),
                manifest.dim
            )));
        }
    }
    let records = read_records(&base.join(&manifest.records))?;
    PairSet::new(records, images, texts)
}

/// Writes `manifest.json`, `records.jsonl`, `image.cclb` and `text.cclb`
/// into `dir`. Embedding matrices are written whole so row indices stay valid.
pub fn save_manifest(set: &PairSet, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    let manifest = Manifest::standard(set.dim());
    save_embeddings(&set.image_embeddings, &dir.join(&manifest.image_embeddings))?;
    save_embeddings(&set.text_embeddings, &dir.join(&manifest.text_embeddings))?;
    write_records(&set.records, &dir.join(&manifest.records))?;
    let mut w = BufWriter::new(File::create(dir.join(MANIFEST_FILE))?);
    serde_json::to_writer_pretty(&mut w, &manifest)?;
    w.write_all(b"\n")?;
    w.flush()?;
    Ok(())
}

// ---------------------------------------------------------------------------
// Subset operations

pub fn filter_min_words(s: &PairSet, min: usize) -> PairSet {
    let records = s.records.iter().filter(|r| r.n_words >= min).cloned().collect();
    s.with_records(records)
}

fn shuffled_indices(n: usize, seed: u64, stream: u64) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut rng::seeded(seed, stream));
    idx
}

/// Disjoint train/validation/test subsets drawn from one seeded shuffle.
pub fn split(s: &PairSet, train_n: usize, val_n: usize, test_n: usize, seed: u64) -> Result<(PairSet, PairSet, PairSet)> {
    let required = train_n + val_n + test_n;
    if required > s.len() {
        return Err(Error::size("split", required, s.len()));
    }
    let idx = shuffled_indices(s.len(), seed, rng::STREAM_SPLIT);
    let (train, rest) = idx.split_at(train_n);
    let (val, rest) = rest.split_at(val_n);
    let test = &rest[..test_n];
    Ok((s.subset(train)?, s.subset(val)?, s.subset(test)?))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MixComponent {
    pub label: String,
    pub count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MixSpec {
    pub components: Vec<MixComponent>,
    pub seed: u64,
}

/// Samples each component without replacement from its labelled source,
/// concatenates, then shuffles the whole. Records keep their dataset tags;
/// the output owns freshly packed embedding matrices.
pub fn mix(spec: &MixSpec, sources: &[(&str, &PairSet)]) -> Result<PairSet> {
    let mut rng = rng::seeded(spec.seed, rng::STREAM_MIX);
    let mut dim = None;
    let mut picked: Vec<(&PairSet, usize)> = Vec::new();
    for c in &spec.components {
        let src = sources
            .iter()
            .find(|(label, _)| *label == c.label)
            .map(|(_, s)| *s)
            .ok_or_else(|| Error::Argument(format!("mix source {:?} not provided", c.label)))?;
        if c.count > src.len() {
            return Err(Error::size(format!("mix source {:?}", c.label), c.count, src.len()));
        }
        match dim {
            None => dim = Some(src.dim()),
            Some(d) if d != src.dim() => {
                return Err(Error::shape("mix", (0, d), (0, src.dim())));
            }
            _ => {}
        }
        let mut idx: Vec<usize> = (0..src.len()).collect();
        let (chosen, _) = idx.partial_shuffle(&mut rng, c.count);
        picked.extend(chosen.iter().map(|&i| (src, i)));
    }
    picked.shuffle(&mut rng);

    let dim = dim.unwrap_or(0);
    let n = picked.len();
    let mut images = Vec::with_capacity(n * dim);
    let mut texts = Vec::with_capacity(n * dim);
    let mut records = Vec::with_capacity(n);
    for (row, (src, i)) in picked.into_iter().enumerate() {
        images.extend_from_slice(src.image_vector(i));
        texts.extend_from_slice(src.text_vector(i));
        let mut r = src.records[i].clone();
        r.image_row = row;
        r.text_row = row;
        records.push(r);
    }
    PairSet::new(records, Matrix::new(n, dim, images)?, Matrix::new(n, dim, texts)?)
}

// ---------------------------------------------------------------------------
// Batches

#[derive(Debug, Clone)]
pub struct Batch {
    /// Positions of the batch's records within the source set.
    pub indices: Vec<usize>,
    pub images: Matrix,
    pub texts: Matrix,
}

/// Row-aligned image/text batches in an order keyed by `(seed, epoch)`.
/// A trailing batch of one is dropped; any larger remainder is kept.
pub struct Batches<'a> {
    set: &'a PairSet,
    order: Vec<usize>,
    batch_size: usize,
    pos: usize,
}

pub fn batches(s: &PairSet, batch_size: usize, seed: u64, epoch: u64) -> Result<Batches<'_>> {
    if batch_size < 2 {
        return Err(Error::Argument(format!("batch size must be at least 2, got {batch_size}")));
    }
    let order = shuffled_indices(s.len(), seed, rng::STREAM_BATCH_BASE.wrapping_add(epoch));
    Ok(Batches {
        set: s,
        order,
        batch_size,
        pos: 0,
    })
}

impl Batches<'_> {
    pub fn num_batches(&self) -> usize {
        let n = self.order.len();
        n / self.batch_size + usize::from(n % self.batch_size >= 2)
    }
}

impl Iterator for Batches<'_> {
    type Item = Batch;

    fn next(&mut self) -> Option<Batch> {
        let end = (self.pos + self.batch_size).min(self.order.len());
        if end - self.pos < 2 {
            return None;
        }
        let indices = self.order[self.pos..end].to_vec();
        self.pos = end;
        Some(Batch {
            images: self.set.gather_images(&indices),
            texts: self.set.gather_texts(&indices),
            indices,
        })
    }
}

//! Dataset construction: clean patches cut from a corpus, each paired with
//! an independently speckled copy, stored one file per split.
//!
//! Store layout: `SPATCH1\n`, the ASCII lines `count <n>`, `patch_size <p>`
//! and a blank line, then an index of `n` entries `(source, row, col)` as
//! little-endian u64, then for every patch its clean and its noisy pixels
//! as little-endian f64.

use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::config::{Allocation, DatasetConfig};
use crate::error::{Error, Result};
use crate::rng::{derive_seed, rng_from_seed};
use crate::speckle_sim::{decode_image, gamma_speckle_field, patch_positions, GrayImage, PatchSpec, SpeckleConfig};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const MANIFEST_VERSION: u32 = 1;
pub const STORE_MAGIC: &[u8] = b"SPATCH1\n";

const SELECT_STREAM: u64 = 0x5E1E;
const SPECKLE_STREAM: u64 = 0x5BEC;
const PATCH_STREAM: u64 = 0x9A7C;

pub const NORMALIZATION_RULE: &str = "grayscale by ITU-R BT.601 luma; integer sources divided by their maximum code value \
     (PGM maxval, 255 or 65535) to [0, 1]; native float images used as stored; network input is the noisy intensity";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PatchIndex {
    pub source: usize,
    pub row: usize,
    pub col: usize,
}

/// Clean/noisy patch pairs of one split, held in memory.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchStore {
    patch_size: usize,
    index: Vec<PatchIndex>,
    clean: Vec<f64>,
    noisy: Vec<f64>,
}

impl PatchStore {
    pub fn new(patch_size: usize, index: Vec<PatchIndex>, clean: Vec<f64>, noisy: Vec<f64>) -> Result<Self> {
        let expected = index.len() * patch_size * patch_size;
        if patch_size == 0 || clean.len() != expected || noisy.len() != expected {
            return Err(Error::shape(
                format!("{expected} pixels per side of the store"),
                format!("{} clean / {} noisy", clean.len(), noisy.len()),
            ));
        }
        if !clean.iter().chain(&noisy).all(|v| v.is_finite() && *v >= 0.0) {
            return Err(Error::invalid("patch pixels must be finite and non-negative"));
        }
        Ok(Self {
            patch_size,
            index,
            clean,
            noisy,
        })
    }

    pub fn len(&self) -> usize {
        self.index.len()
    }

    pub fn is_empty(&self) -> bool {
        self.index.is_empty()
    }

    pub fn patch_size(&self) -> usize {
        self.patch_size
    }

    pub fn index(&self) -> &[PatchIndex] {
        &self.index
    }

    fn span(&self, i: usize) -> std::ops::Range<usize> {
        let p2 = self.patch_size * self.patch_size;
        i * p2..(i + 1) * p2
    }

    pub fn clean(&self, i: usize) -> &[f64] {
        &self.clean[self.span(i)]
    }

    pub fn noisy(&self, i: usize) -> &[f64] {
        &self.noisy[self.span(i)]
    }

    pub fn clean_image(&self, i: usize) -> GrayImage {
        GrayImage::new(self.patch_size, self.patch_size, self.clean(i).to_vec()).expect("validated patch")
    }

    pub fn noisy_image(&self, i: usize) -> GrayImage {
        GrayImage::new(self.patch_size, self.patch_size, self.noisy(i).to_vec()).expect("validated patch")
    }

    /// Writes the store and returns the SHA-256 of the bytes written.
    pub fn write_to(&self, out: impl Write) -> Result<String> {
        let mut w = HashingWriter {
            inner: out,
            hasher: Sha256::new(),
        };
        let header = format!("count {}\npatch_size {}\n\n", self.len(), self.patch_size);
        let io = |e| Error::io("<patch store>", e);
        w.write_all(STORE_MAGIC).map_err(io)?;
        w.write_all(header.as_bytes()).map_err(io)?;
        for e in &self.index {
            for v in [e.source, e.row, e.col] {
                w.write_all(&(v as u64).to_le_bytes()).map_err(io)?;
            }
        }
        for i in 0..self.len() {
            for v in self.clean(i).iter().chain(self.noisy(i)) {
                w.write_all(&v.to_le_bytes()).map_err(io)?;
            }
        }
        w.flush().map_err(io)?;
        Ok(hex::encode(w.hasher.finalize()))
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<String> {
        let path = path.as_ref();
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        self.write_to(BufWriter::new(file)).map_err(|e| relabel(e, path))
    }

    pub fn read_from(input: impl Read) -> Result<Self> {
        let mut r = input;
        let mut magic = [0u8; 8];
        read_exact(&mut r, &mut magic, "header")?;
        if magic != STORE_MAGIC {
            return Err(Error::UnsupportedFormat("not a SPATCH1 patch store".into()));
        }
        let count = header_value(&mut r, "count")?;
        let patch_size = header_value(&mut r, "patch_size")?;
        if read_line(&mut r)? != "" {
            return Err(Error::parse("header", "expected a blank line after the header"));
        }
        if patch_size == 0 {
            return Err(Error::parse("header", "patch size must be positive"));
        }
        let mut index = Vec::with_capacity(count.min(1 << 20));
        let mut word = [0u8; 8];
        for _ in 0..count {
            let mut e = [0usize; 3];
            for v in &mut e {
                read_exact(&mut r, &mut word, "index")?;
                *v = u64::from_le_bytes(word) as usize;
            }
            index.push(PatchIndex {
                source: e[0],
                row: e[1],
                col: e[2],
            });
        }
        let p2 = patch_size * patch_size;
        let mut clean = Vec::with_capacity(count * p2);
        let mut noisy = Vec::with_capacity(count * p2);
        let mut buf = vec![0u8; 8 * p2];
        for i in 0..count {
            for target in [&mut clean, &mut noisy] {
                read_exact(&mut r, &mut buf, &format!("patch {i}"))?;
                target.extend(buf.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())));
            }
        }
        if r.read(&mut word).map_err(|e| Error::io("<patch store>", e))? != 0 {
            return Err(Error::parse("payload", "trailing bytes after the last patch"));
        }
        Self::new(patch_size, index, clean, noisy).map_err(|e| Error::parse("payload", e.to_string()))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        Self::read_from(BufReader::new(file)).map_err(|e| relabel(e, path))
    }
}

fn relabel(e: Error, path: &Path) -> Error {
    match e {
        Error::Io { source, .. } => Error::io(path, source),
        other => other,
    }
}

struct HashingWriter<W> {
    inner: W,
    hasher: Sha256,
}

impl<W: Write> Write for HashingWriter<W> {
    fn write(&mut self, buf: &[u8]) -> std::io::Result<usize> {
        let n = self.inner.write(buf)?;
        self.hasher.update(&buf[..n]);
        Ok(n)
    }

    fn flush(&mut self) -> std::io::Result<()> {
        self.inner.flush()
    }
}

fn read_exact(r: &mut impl Read, buf: &mut [u8], section: &str) -> Result<()> {
    r.read_exact(buf).map_err(|e| match e.kind() {
        std::io::ErrorKind::UnexpectedEof => Error::parse(section, "unexpected end of file"),
        _ => Error::io("<patch store>", e),
    })
}

fn read_line(r: &mut impl Read) -> Result<String> {
    let mut line = Vec::new();
    let mut byte = [0u8; 1];
    loop {
        read_exact(r, &mut byte, "header")?;
        if byte[0] == b'\n' {
            break;
        }
        line.push(byte[0]);
        if line.len() > 64 {
            return Err(Error::parse("header", "header line too long"));
        }
    }
    String::from_utf8(line).map_err(|_| Error::parse("header", "header is not UTF-8"))
}

fn header_value(r: &mut impl Read, key: &str) -> Result<usize> {
    let line = read_line(r)?;
    line.strip_prefix(key)
        .and_then(|rest| rest.strip_prefix(' '))
        .and_then(|v| v.parse().ok())
        .ok_or_else(|| Error::parse("header", format!("expected `{key} <n>`, got `{line}`")))
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let mut file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut hasher = Sha256::new();
    let mut buf = vec![0u8; 1 << 16];
    loop {
        let n = file.read(&mut buf).map_err(|e| Error::io(path, e))?;
        if n == 0 {
            break;
        }
        hasher.update(&buf[..n]);
    }
    Ok(hex::encode(hasher.finalize()))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SourceEntry {
    pub path: PathBuf,
    pub sha256: String,
    pub height: usize,
    pub width: usize,
    pub train_patches: usize,
    pub validation_patches: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SkippedSource {
    pub path: PathBuf,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitEntry {
    pub count: usize,
    /// Split-level speckle; patch `i` draws from `derive_seed(seed, ., i)`.
    pub speckle: SpeckleConfig,
    /// Store file name, relative to the manifest.
    pub store: String,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub format_version: u32,
    pub seed: u64,
    pub patch: PatchSpec,
    pub allocation: Allocation,
    pub normalization: String,
    pub sources: Vec<SourceEntry>,
    pub skipped: Vec<SkippedSource>,
    pub train: SplitEntry,
    pub validation: SplitEntry,
}

impl DatasetManifest {
    pub fn looks(&self) -> u32 {
        self.train.speckle.looks
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let manifest: Self = serde_json::from_str(&text)?;
        if manifest.format_version != MANIFEST_VERSION {
            return Err(Error::Version {
                found: manifest.format_version.to_string(),
                supported: MANIFEST_VERSION,
            });
        }
        Ok(manifest)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, serde_json::to_string_pretty(self)?).map_err(|e| Error::io(path, e))
    }

    /// Re-hashes every source and store and checks the recorded counts.
    /// `dir` is the directory holding the manifest and the stores.
    pub fn verify(&self, dir: &Path) -> Result<()> {
        for source in &self.sources {
            let actual = sha256_file(&source.path)?;
            if actual != source.sha256 {
                return Err(Error::Integrity {
                    path: source.path.clone(),
                    message: format!("sha-256 {actual} differs from the recorded {}", source.sha256),
                });
            }
        }
        for split in [&self.train, &self.validation] {
            let path = dir.join(&split.store);
            let actual = sha256_file(&path)?;
            if actual != split.sha256 {
                return Err(Error::Integrity {
                    path,
                    message: format!("sha-256 {actual} differs from the recorded {}", split.sha256),
                });
            }
        }
        let (train, validation) = self
            .sources
            .iter()
            .fold((0, 0), |(t, v), s| (t + s.train_patches, v + s.validation_patches));
        if train != self.train.count || validation != self.validation.count {
            return Err(Error::Integrity {
                path: dir.join(MANIFEST_FILE),
                message: "per-source patch counts do not add up to the split sizes".into(),
            });
        }
        Ok(())
    }
}

/// A verified dataset loaded into memory.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub manifest: DatasetManifest,
    pub train: PatchStore,
    pub validation: PatchStore,
}

impl Dataset {
    /// Loads `manifest.json` (or the given manifest file) and both stores,
    /// verifying hashes and counts.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let manifest_path = if path.is_dir() { path.join(MANIFEST_FILE) } else { path.to_path_buf() };
        let dir = manifest_path.parent().unwrap_or(Path::new("."));
        let manifest = DatasetManifest::load(&manifest_path)?;
        manifest.verify(dir)?;
        let train = PatchStore::load(dir.join(&manifest.train.store))?;
        let validation = PatchStore::load(dir.join(&manifest.validation.store))?;
        for (split, store) in [(&manifest.train, &train), (&manifest.validation, &validation)] {
            if store.len() != split.count || store.patch_size() != manifest.patch.patch_size {
                return Err(Error::Integrity {
                    path: dir.join(&split.store),
                    message: format!(
                        "store holds {} patches of {}px, manifest records {} of {}px",
                        store.len(),
                        store.patch_size(),
                        split.count,
                        manifest.patch.patch_size
                    ),
                });
            }
        }
        Ok(Self {
            manifest,
            train,
            validation,
        })
    }
}

/// Decodable images of `dir` in file-name order, plus the files that failed.
pub fn read_corpus(dir: &Path) -> Result<(Vec<(PathBuf, GrayImage, String)>, Vec<SkippedSource>)> {
    let mut paths: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_file())
        .collect();
    paths.sort();
    let mut images = Vec::new();
    let mut skipped = Vec::new();
    for path in paths {
        match fs::read(&path) {
            Ok(bytes) => match decode_image(&bytes) {
                Ok(img) => images.push((path, img, hex::encode(Sha256::digest(&bytes)))),
                Err(e) => skipped.push(SkippedSource {
                    path,
                    reason: e.to_string(),
                }),
            },
            Err(e) => skipped.push(SkippedSource {
                path,
                reason: e.to_string(),
            }),
        }
    }
    Ok((images, skipped))
}

fn file_name(path: &Path) -> String {
    path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default()
}

/// Cuts patches from the images in `clean_dir`, speckles each one
/// independently and writes `train.patches`, `validation.patches` and
/// `manifest.json` into `out_dir`.
///
/// Every output file is a pure function of the corpus and `cfg`.
pub fn build_dataset(clean_dir: &Path, cfg: &DatasetConfig, out_dir: &Path) -> Result<DatasetManifest> {
    cfg.validate()?;
    let (images, mut skipped) = read_corpus(clean_dir)?;
    let p = cfg.patch.patch_size;

    let mut sources = Vec::new();
    let mut candidates: Vec<Vec<(usize, usize)>> = Vec::new();
    let mut pixels = Vec::new();
    for (path, img, sha256) in images {
        if img.height() < p || img.width() < p {
            skipped.push(SkippedSource {
                path,
                reason: format!("{}x{} image is smaller than the {p}px patch", img.height(), img.width()),
            });
            continue;
        }
        candidates.push(patch_positions(img.height(), img.width(), &cfg.patch)?);
        sources.push(SourceEntry {
            path,
            sha256,
            height: img.height(),
            width: img.width(),
            train_patches: 0,
            validation_patches: 0,
        });
        pixels.push(img);
    }
    if sources.is_empty() {
        return Err(Error::invalid(format!(
            "no usable image in {} ({} files skipped)",
            clean_dir.display(),
            skipped.len()
        )));
    }

    let (train_sel, val_sel) = select(cfg, &sources, candidates)?;
    for e in &train_sel {
        sources[e.source].train_patches += 1;
    }
    for e in &val_sel {
        sources[e.source].validation_patches += 1;
    }

    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let mut splits = Vec::new();
    for (k, (name, sel)) in [("train", train_sel), ("validation", val_sel)].into_iter().enumerate() {
        let speckle = SpeckleConfig::new(cfg.looks, derive_seed(cfg.seed, SPECKLE_STREAM, k as u64))?;
        let store = materialize(&pixels, sel, p, speckle)?;
        let file = format!("{name}.patches");
        let sha256 = store.save(out_dir.join(&file))?;
        splits.push(SplitEntry {
            count: store.len(),
            speckle,
            store: file,
            sha256,
        });
    }
    let validation = splits.pop().expect("two splits");
    let train = splits.pop().expect("two splits");
    let manifest = DatasetManifest {
        format_version: MANIFEST_VERSION,
        seed: cfg.seed,
        patch: cfg.patch,
        allocation: cfg.allocation.clone(),
        normalization: NORMALIZATION_RULE.into(),
        sources,
        skipped,
        train,
        validation,
    };
    manifest.save(out_dir.join(MANIFEST_FILE))?;
    Ok(manifest)
}

fn select(
    cfg: &DatasetConfig,
    sources: &[SourceEntry],
    candidates: Vec<Vec<(usize, usize)>>,
) -> Result<(Vec<PatchIndex>, Vec<PatchIndex>)> {
    let tag = |source: usize, (row, col): (usize, usize)| PatchIndex { source, row, col };
    match &cfg.allocation {
        Allocation::Pooled => {
            let mut pool: Vec<PatchIndex> = candidates
                .into_iter()
                .enumerate()
                .flat_map(|(s, c)| c.into_iter().map(move |rc| tag(s, rc)))
                .collect();
            let (train, validation) = (cfg.train_count, cfg.validation_count);
            if train + validation > pool.len() {
                return Err(Error::Capacity(format!(
                    "{train} train + {validation} validation patches requested, the corpus yields {} at stride {}",
                    pool.len(),
                    cfg.patch.stride
                )));
            }
            pool.shuffle(&mut rng_from_seed(derive_seed(cfg.seed, SELECT_STREAM, 0)));
            let val = pool[train..train + validation].to_vec();
            pool.truncate(train);
            Ok((pool, val))
        }
        Allocation::PerSource { quotas } => {
            for name in quotas.keys() {
                if !sources.iter().any(|s| file_name(&s.path) == *name) {
                    return Err(Error::invalid(format!("quota names `{name}`, which is not a usable source")));
                }
            }
            let (mut train, mut val) = (Vec::new(), Vec::new());
            for (s, mut cands) in candidates.into_iter().enumerate() {
                let Some(q) = quotas.get(&file_name(&sources[s].path)) else {
                    continue;
                };
                if q.train + q.validation > cands.len() {
                    return Err(Error::Capacity(format!(
                        "{} needs {} patches, it yields {}",
                        sources[s].path.display(),
                        q.train + q.validation,
                        cands.len()
                    )));
                }
                cands.shuffle(&mut rng_from_seed(derive_seed(cfg.seed, SELECT_STREAM, s as u64 + 1)));
                train.extend(cands[..q.train].iter().map(|&rc| tag(s, rc)));
                val.extend(cands[q.train..q.train + q.validation].iter().map(|&rc| tag(s, rc)));
            }
            Ok((train, val))
        }
    }
}

fn materialize(images: &[GrayImage], index: Vec<PatchIndex>, p: usize, speckle: SpeckleConfig) -> Result<PatchStore> {
    let mut clean = Vec::with_capacity(index.len() * p * p);
    let mut noisy = Vec::with_capacity(index.len() * p * p);
    for (i, e) in index.iter().enumerate() {
        let patch = images[e.source].crop(e.row, e.col, p, p)?;
        let noise = gamma_speckle_field(
            SpeckleConfig::new(speckle.looks, derive_seed(speckle.seed, PATCH_STREAM, i as u64))?,
            p,
            p,
        )?;
        noisy.extend(patch.data().iter().zip(noise.data()).map(|(x, n)| x * n));
        clean.extend_from_slice(patch.data());
    }
    PatchStore::new(p, index, clean, noisy)
}

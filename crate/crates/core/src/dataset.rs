//! Labeled corpora: manifest loading, per-family splitting, the on-disk image
//! cache and a synthetic texture corpus for desk-scale experiments.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::preprocess::{binary_to_image_sized, ByteStream, GrayImage, ROW_WIDTH};
use crate::rng::{stream, Purpose};

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledSample {
    pub image: GrayImage,
    pub family_id: usize,
    pub source_id: String,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct LabeledCorpus {
    pub samples: Vec<LabeledSample>,
    pub family_names: Vec<String>,
}

impl LabeledCorpus {
    pub fn new(samples: Vec<LabeledSample>, family_names: Vec<String>) -> Result<Self> {
        let corpus = Self {
            samples,
            family_names,
        };
        corpus.validate()?;
        Ok(corpus)
    }

    pub fn validate(&self) -> Result<()> {
        let mut seen = HashSet::new();
        for s in &self.samples {
            if s.family_id >= self.family_names.len() {
                return Err(Error::BadSpec(format!(
                    "sample `{}` has family id {} but only {} families exist",
                    s.source_id,
                    s.family_id,
                    self.family_names.len()
                )));
            }
            if !seen.insert(s.source_id.as_str()) {
                return Err(Error::DuplicateSource(s.source_id.clone()));
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn families(&self) -> usize {
        self.family_names.len()
    }

    pub fn family_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.families()];
        for s in &self.samples {
            counts[s.family_id] += 1;
        }
        counts
    }

    /// Side length shared by every image, if the corpus is non-empty and uniform.
    pub fn image_size(&self) -> Option<usize> {
        let first = self.samples.first()?;
        self.samples
            .iter()
            .all(|s| s.image.height == first.image.height && s.image.width == first.image.height)
            .then_some(first.image.height)
    }

    /// Keeps samples whose source id is in `ids`, preserving order.
    pub fn subset(&self, ids: &HashSet<String>) -> Self {
        Self {
            samples: self
                .samples
                .iter()
                .filter(|s| ids.contains(&s.source_id))
                .cloned()
                .collect(),
            family_names: self.family_names.clone(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub train_fraction: f64,
    pub seed: u64,
}

impl Default for SplitSpec {
    fn default() -> Self {
        Self {
            train_fraction: 0.9,
            seed: 0,
        }
    }
}

#[derive(Debug, Deserialize)]
struct ManifestRow {
    path: String,
    family: String,
}

/// Reads a `path,family` CSV manifest (paths relative to `root`) and
/// converts every file. Families are indexed alphabetically.
pub fn load_corpus(root: &Path, manifest: &Path, image_size: usize) -> Result<LabeledCorpus> {
    let mut reader = csv::Reader::from_path(manifest).map_err(|e| match e.kind() {
        csv::ErrorKind::Io(io) if io.kind() == std::io::ErrorKind::NotFound => {
            Error::MissingFile(manifest.to_path_buf())
        }
        _ => Error::Csv(e),
    })?;
    let mut rows = Vec::new();
    for (i, rec) in reader.deserialize::<ManifestRow>().enumerate() {
        let row: ManifestRow = rec?;
        let family = row.family.trim().to_string();
        if family.is_empty() {
            return Err(Error::UnknownFamily {
                row: i + 1,
                path: row.path,
            });
        }
        rows.push((row.path, family));
    }
    let names: Vec<String> = rows
        .iter()
        .map(|(_, f)| f.clone())
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    let index: BTreeMap<&str, usize> = names.iter().enumerate().map(|(i, n)| (n.as_str(), i)).collect();

    let samples = rows
        .par_iter()
        .map(|(path, family)| {
            let full = root.join(path);
            let bytes = fs::read(&full).map_err(|e| Error::io(&full, e))?;
            let image = binary_to_image_sized(&ByteStream::new(bytes, path.clone()), image_size)?;
            Ok(LabeledSample {
                image,
                family_id: index[family.as_str()],
                source_id: path.clone(),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    LabeledCorpus::new(samples, names)
}

/// Per-family split: `min(floor(f·n), n − 1)` samples go to train so every
/// family keeps at least one test sample.
pub fn stratified_split(corpus: &LabeledCorpus, spec: &SplitSpec) -> Result<(LabeledCorpus, LabeledCorpus)> {
    if !(spec.train_fraction > 0.0 && spec.train_fraction < 1.0) {
        return Err(Error::config("split.train_fraction", "must lie in (0, 1)"));
    }
    let mut by_family: Vec<Vec<usize>> = vec![Vec::new(); corpus.families()];
    for (i, s) in corpus.samples.iter().enumerate() {
        by_family[s.family_id].push(i);
    }
    let mut is_train = vec![false; corpus.len()];
    for (f, members) in by_family.iter_mut().enumerate() {
        let n = members.len();
        if n < 2 {
            return Err(Error::FamilyTooSmall {
                family: corpus.family_names[f].clone(),
                count: n,
            });
        }
        let n_train = train_count(n, spec.train_fraction);
        let mut rng = stream(spec.seed, Purpose::Split, &[f as u64]);
        members.shuffle(&mut rng);
        for &i in &members[..n_train] {
            is_train[i] = true;
        }
    }
    let pick = |want: bool| LabeledCorpus {
        samples: corpus
            .samples
            .iter()
            .zip(&is_train)
            .filter(|(_, &t)| t == want)
            .map(|(s, _)| s.clone())
            .collect(),
        family_names: corpus.family_names.clone(),
    };
    Ok((pick(true), pick(false)))
}

pub fn train_count(n: usize, fraction: f64) -> usize {
    (((fraction * n as f64) + 1e-9).floor() as usize).min(n.saturating_sub(1))
}

// ---------------------------------------------------------------------------
// image blob cache

pub const IMAGE_MAGIC: &[u8; 4] = b"BIMG";

/// `BIMG | u32 height | u32 width | f32 pixels`, little-endian.
pub fn encode_image(image: &GrayImage) -> Vec<u8> {
    let mut out = Vec::with_capacity(12 + image.pixels.len() * 4);
    out.extend_from_slice(IMAGE_MAGIC);
    out.extend_from_slice(&(image.height as u32).to_le_bytes());
    out.extend_from_slice(&(image.width as u32).to_le_bytes());
    for p in &image.pixels {
        out.extend_from_slice(&p.to_le_bytes());
    }
    out
}

pub fn decode_image(bytes: &[u8], path: &Path) -> Result<GrayImage> {
    let bad = |reason: &str| Error::Format {
        path: path.to_path_buf(),
        reason: reason.into(),
    };
    if bytes.len() < 12 || &bytes[..4] != IMAGE_MAGIC {
        return Err(bad("missing BIMG header"));
    }
    let h = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
    let w = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    if bytes.len() != 12 + h * w * 4 {
        return Err(bad("pixel payload length does not match header"));
    }
    let pixels = bytes[12..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    GrayImage::from_pixels(h, w, pixels)
}

pub fn write_image(path: &Path, image: &GrayImage) -> Result<()> {
    fs::write(path, encode_image(image)).map_err(|e| Error::io(path, e))
}

pub fn read_image(path: &Path) -> Result<GrayImage> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_image(&bytes, path)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CacheIndex {
    pub family_names: Vec<String>,
    pub samples: Vec<CacheEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CacheEntry {
    pub source_id: String,
    pub family_id: usize,
    pub file: String,
}

pub const CACHE_INDEX: &str = "index.json";

/// Writes `images/NNNNNN.bimg` per sample plus `index.json`; returns every
/// file written.
pub fn write_cache(dir: &Path, corpus: &LabeledCorpus) -> Result<Vec<PathBuf>> {
    let images = dir.join("images");
    fs::create_dir_all(&images).map_err(|e| Error::io(&images, e))?;
    let mut written = Vec::with_capacity(corpus.len() + 1);
    let mut entries = Vec::with_capacity(corpus.len());
    for (i, s) in corpus.samples.iter().enumerate() {
        let file = format!("images/{i:06}.bimg");
        let path = dir.join(&file);
        write_image(&path, &s.image)?;
        written.push(path);
        entries.push(CacheEntry {
            source_id: s.source_id.clone(),
            family_id: s.family_id,
            file,
        });
    }
    let index = CacheIndex {
        family_names: corpus.family_names.clone(),
        samples: entries,
    };
    let path = dir.join(CACHE_INDEX);
    fs::write(&path, serde_json::to_vec_pretty(&index)?).map_err(|e| Error::io(&path, e))?;
    written.push(path);
    Ok(written)
}

pub fn read_cache(dir: &Path) -> Result<LabeledCorpus> {
    let path = dir.join(CACHE_INDEX);
    let index: CacheIndex = serde_json::from_slice(&fs::read(&path).map_err(|e| Error::io(&path, e))?)?;
    let samples = index
        .samples
        .par_iter()
        .map(|e| {
            Ok(LabeledSample {
                image: read_image(&dir.join(&e.file))?,
                family_id: e.family_id,
                source_id: e.source_id.clone(),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    LabeledCorpus::new(samples, index.family_names)
}

/// Loads a corpus directory: an image cache if `index.json` exists, otherwise
/// raw files listed in `manifest.csv`.
pub fn open_corpus(dir: &Path, image_size: usize) -> Result<LabeledCorpus> {
    if dir.join(CACHE_INDEX).exists() {
        read_cache(dir)
    } else {
        load_corpus(dir, &dir.join("manifest.csv"), image_size)
    }
}

// ---------------------------------------------------------------------------
// synthetic corpus

pub const SYNTH_MIN_LEN: usize = 200_000;
pub const SYNTH_MAX_LEN: usize = 800_000;
pub const SYNTH_NOISE_RATE: f64 = 0.05;

/// Byte-texture generator shared by all samples of one synthetic family.
#[derive(Debug, Clone, PartialEq)]
pub enum Texture {
    /// Alternating diagonal stripes of two levels.
    Diagonal { period: usize, slope: usize, levels: [u8; 2] },
    /// Column bands cycling through a palette.
    ColumnBands { width: usize, palette: Vec<u8> },
    /// File sections at fixed fractions, each constant, low-range or random.
    Sections { cuts: Vec<f64>, fills: Vec<Fill> },
    /// A sparse low-valued header followed by high-entropy bytes.
    PackedBody { header: f64, ceiling: u8 },
    /// Horizontal bands whose level ramps across the band.
    RowRamps { bands: usize, low: u8, high: u8 },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Fill {
    Constant(u8),
    Range(u8, u8),
}

impl Texture {
    /// Recipe for family `family`; the kind cycles through the five textures
    /// and the parameters are drawn from `seed`.
    pub fn for_family(family: usize, seed: u64) -> Self {
        let mut rng = stream(seed, Purpose::Synth, &[u64::MAX, family as u64]);
        match family % 5 {
            0 => Texture::Diagonal {
                period: rng.gen_range(60..160),
                slope: rng.gen_range(1..4),
                levels: [rng.gen_range(0..60), rng.gen_range(180..=255)],
            },
            1 => {
                let n = rng.gen_range(3..6);
                Texture::ColumnBands {
                    width: rng.gen_range(60..200),
                    palette: (0..n).map(|i| (i * 255 / (n - 1)) as u8).collect(),
                }
            }
            2 => {
                let k = rng.gen_range(3..6);
                let mut cuts: Vec<f64> = (0..k - 1).map(|_| rng.gen_range(0.1..0.9)).collect();
                cuts.sort_by(f64::total_cmp);
                let fills = (0..k)
                    .map(|i| match (i + family / 5) % 3 {
                        0 => Fill::Constant(rng.gen_range(0..=255)),
                        1 => Fill::Range(0, rng.gen_range(16..80)),
                        _ => Fill::Range(0, 255),
                    })
                    .collect();
                Texture::Sections { cuts, fills }
            }
            3 => Texture::PackedBody {
                header: rng.gen_range(0.1..0.35),
                ceiling: rng.gen_range(8..48),
            },
            _ => Texture::RowRamps {
                bands: rng.gen_range(4..10),
                low: rng.gen_range(0..80),
                high: rng.gen_range(170..=255),
            },
        }
    }

    /// Writes one sample's bytes; `phase` shifts the pattern per sample.
    fn render<R: Rng>(&self, out: &mut [u8], phase: usize, rng: &mut R) {
        let len = out.len();
        let rows = len.div_ceil(ROW_WIDTH);
        match self {
            Texture::Diagonal { period, slope, levels } => {
                for (i, b) in out.iter_mut().enumerate() {
                    let (r, c) = (i / ROW_WIDTH, i % ROW_WIDTH);
                    *b = levels[((c + r * slope + phase) / period) % 2];
                }
            }
            Texture::ColumnBands { width, palette } => {
                for (i, b) in out.iter_mut().enumerate() {
                    let c = i % ROW_WIDTH;
                    *b = palette[((c + phase % width) / width) % palette.len()];
                }
            }
            Texture::Sections { cuts, fills } => {
                let mut start = 0;
                for (k, fill) in fills.iter().enumerate() {
                    let end = cuts.get(k).map(|&f| (f * len as f64) as usize).unwrap_or(len).max(start);
                    let seg = &mut out[start..end];
                    match *fill {
                        Fill::Constant(v) => seg.fill(v),
                        Fill::Range(0, 255) => rng.fill_bytes(seg),
                        Fill::Range(lo, hi) => seg.iter_mut().for_each(|b| *b = rng.gen_range(lo..=hi)),
                    }
                    start = end;
                }
            }
            Texture::PackedBody { header, ceiling } => {
                let cut = ((*header * rows as f64) as usize * ROW_WIDTH).min(len);
                let (head, body) = out.split_at_mut(cut);
                for b in head.iter_mut() {
                    *b = if rng.gen_bool(0.1) { rng.gen_range(0..=*ceiling) } else { 0 };
                }
                rng.fill_bytes(body);
            }
            Texture::RowRamps { bands, low, high } => {
                let band_rows = rows.div_ceil(*bands).max(1);
                let span = (*high - *low) as usize;
                for (i, b) in out.iter_mut().enumerate() {
                    let r = i / ROW_WIDTH + phase % band_rows;
                    let pos = r % band_rows;
                    let level = if (r / band_rows) % 2 == 0 { pos } else { band_rows - 1 - pos };
                    *b = *low + (level * span / band_rows) as u8;
                }
            }
        }
    }
}

/// Raw bytes of sample `index` of synthetic family `family`.
pub fn synth_bytes(family: usize, index: usize, texture: &Texture, seed: u64) -> Vec<u8> {
    let mut rng = stream(seed, Purpose::Synth, &[family as u64, index as u64]);
    let len = rng.gen_range(SYNTH_MIN_LEN..=SYNTH_MAX_LEN);
    let phase = rng.gen_range(0..ROW_WIDTH);
    let mut bytes = vec![0u8; len];
    texture.render(&mut bytes, phase, &mut rng);
    let noisy = (len as f64 * SYNTH_NOISE_RATE).round() as usize;
    for _ in 0..noisy {
        let at = rng.gen_range(0..len);
        bytes[at] = rng.gen();
    }
    bytes
}

pub fn synth_family_name(family: usize) -> String {
    format!("synth{family:03}")
}

pub fn synth_source_id(family: usize, index: usize) -> String {
    format!("synth/{}/{index:05}", synth_family_name(family))
}

fn check_synth_args(families: usize, per_family: usize) -> Result<()> {
    if families < 2 {
        return Err(Error::BadSpec(format!("families must be at least 2, got {families}")));
    }
    if per_family < 2 {
        return Err(Error::BadSpec(format!("per_family must be at least 2, got {per_family}")));
    }
    if families > 1000 {
        return Err(Error::BadSpec(format!("at most 1000 families, got {families}")));
    }
    Ok(())
}

/// Synthetic corpus of `families × per_family` 400×400 images.
pub fn synth_corpus(families: usize, per_family: usize, seed: u64) -> Result<LabeledCorpus> {
    synth_corpus_sized(families, per_family, seed, crate::preprocess::IMAGE_SIZE)
}

/// [`synth_corpus`] converted to `image_size × image_size` images.
pub fn synth_corpus_sized(
    families: usize,
    per_family: usize,
    seed: u64,
    image_size: usize,
) -> Result<LabeledCorpus> {
    check_synth_args(families, per_family)?;
    let textures: Vec<Texture> = (0..families).map(|f| Texture::for_family(f, seed)).collect();
    let samples = (0..families * per_family)
        .into_par_iter()
        .map(|k| {
            let (f, i) = (k / per_family, k % per_family);
            let bytes = synth_bytes(f, i, &textures[f], seed);
            let source_id = synth_source_id(f, i);
            let image = binary_to_image_sized(&ByteStream::new(bytes, source_id.clone()), image_size)?;
            Ok(LabeledSample {
                image,
                family_id: f,
                source_id,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    LabeledCorpus::new(samples, (0..families).map(synth_family_name).collect())
}

/// Writes raw synthetic binaries plus `manifest.csv` under `dir`.
pub fn write_synth_raw(dir: &Path, families: usize, per_family: usize, seed: u64) -> Result<Vec<PathBuf>> {
    check_synth_args(families, per_family)?;
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let manifest = dir.join("manifest.csv");
    let mut w = csv::Writer::from_path(&manifest)?;
    w.write_record(["path", "family"])?;
    let mut written = Vec::new();
    for f in 0..families {
        let texture = Texture::for_family(f, seed);
        let name = synth_family_name(f);
        let sub = dir.join(&name);
        fs::create_dir_all(&sub).map_err(|e| Error::io(&sub, e))?;
        for i in 0..per_family {
            let rel = format!("{name}/{i:05}.bin");
            let path = dir.join(&rel);
            fs::write(&path, synth_bytes(f, i, &texture, seed)).map_err(|e| Error::io(&path, e))?;
            w.write_record([rel.as_str(), name.as_str()])?;
            written.push(path);
        }
    }
    w.flush().map_err(|e| Error::io(&manifest, e))?;
    written.push(manifest);
    Ok(written)
}

/// Mean Euclidean image distance within families and across families.
pub fn family_distance_summary(corpus: &LabeledCorpus) -> (f64, f64) {
    let dist = |a: &GrayImage, b: &GrayImage| -> f64 {
        a.pixels
            .iter()
            .zip(&b.pixels)
            .map(|(&x, &y)| ((x - y) as f64).powi(2))
            .sum::<f64>()
            .sqrt()
    };
    let (mut intra, mut n_intra, mut inter, mut n_inter) = (0.0, 0usize, 0.0, 0usize);
    for (i, a) in corpus.samples.iter().enumerate() {
        for b in &corpus.samples[i + 1..] {
            let d = dist(&a.image, &b.image);
            if a.family_id == b.family_id {
                intra += d;
                n_intra += 1;
            } else {
                inter += d;
                n_inter += 1;
            }
        }
    }
    (intra / n_intra.max(1) as f64, inter / n_inter.max(1) as f64)
}

//! On-disk feature maps and dataset manifests, plus a deterministic synthetic
//! feature-map generator.
//!
//! Feature-map files (`PNVF`) hold a little-endian header `magic, version, H,
//! W, D` followed by `H·W·D` float32 values in row-major `(y, x, d)` order.
//! Manifests are UTF-8 text with one comma-separated record per line.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::codec::{Decoder, Encoder};
use crate::error::{Error, Result};

pub const FEATURE_MAGIC: &[u8; 4] = b"PNVF";
pub const FEATURE_VERSION: u32 = 1;
/// Size in bytes of the feature-map header.
pub const FEATURE_HEADER_LEN: usize = 20;

/// A dense `H × W × D` feature tensor for one image.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    pub image_id: String,
    height: usize,
    width: usize,
    depth: usize,
    data: Vec<f32>,
}

impl FeatureMap {
    pub fn new(
        image_id: impl Into<String>,
        height: usize,
        width: usize,
        depth: usize,
        data: Vec<f32>,
    ) -> Result<Self> {
        let map = Self {
            image_id: image_id.into(),
            height,
            width,
            depth,
            data,
        };
        map.validate()?;
        Ok(map)
    }

    pub fn validate(&self) -> Result<()> {
        if self.height == 0 || self.width == 0 || self.depth == 0 {
            return Err(Error::Invariant(format!(
                "feature map dims must be positive, got {}x{}x{}",
                self.height, self.width, self.depth
            )));
        }
        let expected = self.height * self.width * self.depth;
        if self.data.len() != expected {
            return Err(Error::Invariant(format!(
                "feature map data has {} values, expected {expected}",
                self.data.len()
            )));
        }
        if let Some(i) = self.data.iter().position(|v| !v.is_finite()) {
            return Err(Error::Invariant(format!(
                "non-finite feature value at flat index {i}"
            )));
        }
        Ok(())
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn depth(&self) -> usize {
        self.depth
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    /// Feature vector of cell `(x, y)`.
    pub fn cell(&self, x: usize, y: usize) -> &[f32] {
        let start = (y * self.width + x) * self.depth;
        &self.data[start..start + self.depth]
    }

    /// Mutable access for in-place edits; callers must keep values finite.
    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }
}

pub fn encode_feature_map(map: &FeatureMap) -> Result<Vec<u8>> {
    map.validate()?;
    let mut enc = Encoder::new();
    enc.bytes(FEATURE_MAGIC);
    enc.u32(FEATURE_VERSION);
    enc.u32(map.height as u32);
    enc.u32(map.width as u32);
    enc.u32(map.depth as u32);
    for &v in &map.data {
        enc.f32(v);
    }
    Ok(enc.finish())
}

pub fn save_feature_map(map: &FeatureMap, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let bytes = encode_feature_map(map)?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Loads a `PNVF` file. The image id is taken from the file stem.
pub fn load_feature_map(path: impl AsRef<Path>) -> Result<FeatureMap> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let id = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    decode_feature_map(&bytes, id, path)
}

pub(crate) fn decode_feature_map(bytes: &[u8], image_id: String, path: &Path) -> Result<FeatureMap> {
    let mut dec = Decoder::new(bytes, "feature map");
    if dec.take(4).ok() != Some(FEATURE_MAGIC.as_slice()) {
        return Err(Error::BadMagic {
            path: path.to_path_buf(),
            expected: "PNVF",
        });
    }
    let version = dec.u32()?;
    if version != FEATURE_VERSION {
        return Err(Error::Version {
            found: version,
            expected: FEATURE_VERSION,
        });
    }
    let h = dec.u32()? as usize;
    let w = dec.u32()? as usize;
    let d = dec.u32()? as usize;
    let n = h
        .checked_mul(w)
        .and_then(|v| v.checked_mul(d))
        .ok_or_else(|| Error::Format("feature map dims overflow".into()))?;
    if dec.remaining() < n * 4 {
        return Err(Error::Truncated(format!(
            "{}: payload has {} bytes, header promises {}",
            path.display(),
            dec.remaining(),
            n * 4
        )));
    }
    let mut data = Vec::with_capacity(n);
    for _ in 0..n {
        data.push(dec.f32()?);
    }
    dec.expect_end()?;
    FeatureMap::new(image_id, h, w, d, data)
}

/// A block of feature cells whose content depends only on `id`, so the same
/// motif planted in two maps yields identical sub-blocks.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Motif {
    /// Top-left cell column.
    pub x: usize,
    /// Top-left cell row.
    pub y: usize,
    /// Side length of the square block, in cells.
    pub side: usize,
    pub id: u64,
}

/// Appearance knobs for [`synth_feature_map_with`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SynthStyle {
    /// Standard deviation of per-cell background variation around the shared
    /// background vector.
    pub background_jitter: f32,
    /// Standard deviation of motif cell values.
    pub motif_scale: f32,
}

impl Default for SynthStyle {
    fn default() -> Self {
        Self {
            background_jitter: 0.25,
            motif_scale: 1.0,
        }
    }
}

const BACKGROUND_BASE_SEED: u64 = 0x5eed_ba5e;
const MOTIF_SEED_SALT: u64 = 0x6d6f_7469_6600_0000;

fn background_base(depth: usize) -> Vec<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(BACKGROUND_BASE_SEED);
    (0..depth).map(|_| rng.sample::<f32, _>(StandardNormal)).collect()
}

/// Deterministic synthetic feature map with the default style.
pub fn synth_feature_map(
    seed: u64,
    height: usize,
    width: usize,
    depth: usize,
    motifs: &[Motif],
) -> Result<FeatureMap> {
    synth_feature_map_with(seed, height, width, depth, motifs, SynthStyle::default())
}

/// Background cells are a fixed base vector plus seed-dependent jitter; motif
/// cells are drawn from a generator keyed by the motif id alone. Later motifs
/// overwrite earlier ones where they overlap.
pub fn synth_feature_map_with(
    seed: u64,
    height: usize,
    width: usize,
    depth: usize,
    motifs: &[Motif],
    style: SynthStyle,
) -> Result<FeatureMap> {
    if height == 0 || width == 0 || depth == 0 {
        return Err(Error::Invariant("synthetic map dims must be positive".into()));
    }
    for m in motifs {
        if m.side == 0 || m.x + m.side > width || m.y + m.side > height {
            return Err(Error::Geometry(format!(
                "motif {} at ({}, {}) side {} exceeds {height}x{width} grid",
                m.id, m.x, m.y, m.side
            )));
        }
    }
    let base = background_base(depth);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut data = Vec::with_capacity(height * width * depth);
    for _ in 0..height * width {
        for b in &base {
            let jitter: f32 = rng.sample(StandardNormal);
            data.push(b + style.background_jitter * jitter);
        }
    }
    for m in motifs {
        let mut mrng = ChaCha8Rng::seed_from_u64(m.id ^ MOTIF_SEED_SALT);
        for dy in 0..m.side {
            for dx in 0..m.side {
                let start = ((m.y + dy) * width + m.x + dx) * depth;
                for v in &mut data[start..start + depth] {
                    let z: f32 = mrng.sample(StandardNormal);
                    *v = style.motif_scale * z;
                }
            }
        }
    }
    FeatureMap::new(format!("synth-{seed}"), height, width, depth, data)
}

/// Adds i.i.d. Gaussian noise of standard deviation `sigma` to every entry.
pub fn perturb(map: &FeatureMap, seed: u64, sigma: f32) -> FeatureMap {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = map.clone();
    for v in out.data_mut() {
        let z: f32 = rng.sample(StandardNormal);
        *v += sigma * z;
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Split {
    Database,
    Query,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Database => "database",
            Split::Query => "query",
        })
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "database" => Ok(Split::Database),
            "query" => Ok(Split::Query),
            other => Err(Error::Format(format!("unknown split {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ManifestEntry {
    pub image_id: String,
    pub feature_path: String,
    pub keypoint_path: Option<String>,
    pub latitude: f64,
    pub longitude: f64,
    pub split: Split,
}

/// Image list with weak GPS labels.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct DatasetManifest {
    pub entries: Vec<ManifestEntry>,
}

pub const MANIFEST_HEADER: &str = "image_id,feature_path,keypoint_path,latitude,longitude,split";

impl DatasetManifest {
    pub fn new(entries: Vec<ManifestEntry>) -> Result<Self> {
        let m = Self { entries };
        m.validate()?;
        Ok(m)
    }

    pub fn validate(&self) -> Result<()> {
        let mut seen = std::collections::HashSet::new();
        for e in &self.entries {
            if e.image_id.is_empty() || e.image_id.contains(',') {
                return Err(Error::Invariant(format!("bad image id {:?}", e.image_id)));
            }
            if !seen.insert(e.image_id.as_str()) {
                return Err(Error::Invariant(format!(
                    "duplicate image id {:?}",
                    e.image_id
                )));
            }
            check_coordinates(e.latitude, e.longitude)?;
        }
        Ok(())
    }

    pub fn split(&self, split: Split) -> impl Iterator<Item = &ManifestEntry> {
        self.entries.iter().filter(move |e| e.split == split)
    }

    /// Manifest restricted to one split.
    pub fn filtered(&self, split: Split) -> DatasetManifest {
        DatasetManifest {
            entries: self.split(split).cloned().collect(),
        }
    }

    pub fn get(&self, image_id: &str) -> Option<&ManifestEntry> {
        self.entries.iter().find(|e| e.image_id == image_id)
    }

    pub fn to_text(&self) -> String {
        let mut out = String::from(MANIFEST_HEADER);
        out.push('\n');
        for e in &self.entries {
            out.push_str(&format!(
                "{},{},{},{},{},{}\n",
                e.image_id,
                e.feature_path,
                e.keypoint_path.as_deref().unwrap_or(""),
                e.latitude,
                e.longitude,
                e.split
            ));
        }
        out
    }

    /// Parses manifest text. A leading header line, blank lines and `#`
    /// comments are ignored.
    pub fn parse(text: &str) -> Result<Self> {
        let mut entries = Vec::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') || line == MANIFEST_HEADER {
                continue;
            }
            let cols: Vec<&str> = line.split(',').map(str::trim).collect();
            if cols.len() != 6 {
                return Err(Error::Format(format!(
                    "manifest line {}: expected 6 columns, got {}",
                    lineno + 1,
                    cols.len()
                )));
            }
            let num = |s: &str, what: &str| {
                s.parse::<f64>().map_err(|_| {
                    Error::Format(format!("manifest line {}: bad {what} {s:?}", lineno + 1))
                })
            };
            entries.push(ManifestEntry {
                image_id: cols[0].to_string(),
                feature_path: cols[1].to_string(),
                keypoint_path: (!cols[2].is_empty()).then(|| cols[2].to_string()),
                latitude: num(cols[3], "latitude")?,
                longitude: num(cols[4], "longitude")?,
                split: cols[5].parse()?,
            });
        }
        Self::new(entries)
    }
}

pub fn check_coordinates(lat: f64, lon: f64) -> Result<()> {
    if !(-90.0..=90.0).contains(&lat) || !(-180.0..=180.0).contains(&lon) {
        return Err(Error::Invariant(format!(
            "coordinates out of range: ({lat}, {lon})"
        )));
    }
    Ok(())
}

pub fn save_manifest(manifest: &DatasetManifest, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    manifest.validate()?;
    fs::write(path, manifest.to_text()).map_err(|e| Error::io(path, e))
}

pub fn load_manifest(path: impl AsRef<Path>) -> Result<DatasetManifest> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    DatasetManifest::parse(&text)
}

/// Resolves a manifest-relative path against the manifest's directory.
pub fn resolve_path(manifest_path: &Path, entry_path: &str) -> PathBuf {
    let p = Path::new(entry_path);
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        manifest_path
            .parent()
            .unwrap_or_else(|| Path::new("."))
            .join(p)
    }
}

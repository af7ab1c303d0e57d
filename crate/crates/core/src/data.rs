//! Slice and mask types, intensity normalization, and the on-disk container.
//!
//! A record is stored as two files sharing the record id:
//!
//! * `<id>.mct` holds raw little-endian `f32` planes, channels first:
//!   the four contrasts, the brain support mask, and the grade mask when
//!   present.
//! * `<id>.json` is the sidecar describing dimensions, channel names,
//!   provenance and the container version.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Contrast channel order used throughout the crate.
pub const CONTRASTS: [&str; 4] = ["FLAIR", "T1w", "T1c", "T2w"];
/// Index of the T1-weighted contrast, whose support defines the brain shape.
pub const T1W: usize = 1;
pub const SUPPORT_CHANNEL: &str = "brain_support";
pub const GRADE_CHANNEL: &str = "grade_mask";
pub const FORMAT_VERSION: u32 = 1;

/// Lower and upper clipping bounds applied after standardization.
pub const CLIP_LOW: f32 = -0.5;
pub const CLIP_HIGH: f32 = 5.0;

const MIN_STD: f64 = 1e-8;

/// Grade encodings: edema, enhancing tumor, necrotic / non-enhancing core.
pub const GRADE_ED: f32 = 0.5;
pub const GRADE_ET: f32 = 0.75;
pub const GRADE_NCR: f32 = 1.0;
pub const GRADE_VALUES: [f32; 4] = [0.0, GRADE_ED, GRADE_ET, GRADE_NCR];

#[derive(Debug, Error)]
pub enum DataError {
    #[error("support standard deviation {std:e} is below 1e-8")]
    DegenerateStd { std: f64 },
    #[error("I/O failure on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("corrupt record {path}: {reason}")]
    CorruptRecord { path: PathBuf, reason: String },
    #[error("unknown container format_version {0}")]
    UnknownVersion(u32),
    #[error("value {value} at pixel {index} is not a valid grade")]
    InvalidGrade { value: f32, index: usize },
    #[error("value {value} at pixel {index} is not binary")]
    InvalidBinary { value: f32, index: usize },
    #[error("dimension mismatch: expected {expected:?}, got {got:?}")]
    DimensionMismatch { expected: (usize, usize), got: (usize, usize) },
    #[error("invalid manifest: {0}")]
    InvalidManifest(String),
}

impl DataError {
    fn io(path: &Path, source: std::io::Error) -> Self {
        DataError::Io { path: path.to_path_buf(), source }
    }

    fn corrupt(path: &Path, reason: impl Into<String>) -> Self {
        DataError::CorruptRecord { path: path.to_path_buf(), reason: reason.into() }
    }
}

/// A single-channel float image, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct Plane {
    height: usize,
    width: usize,
    data: Vec<f32>,
}

impl Plane {
    pub fn new(height: usize, width: usize, data: Vec<f32>) -> Self {
        assert_eq!(height * width, data.len(), "plane data does not match {height}x{width}");
        Self { height, width, data }
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        Self::new(height, width, vec![0.0; height * width])
    }

    pub fn from_fn(height: usize, width: usize, f: impl Fn(usize, usize) -> f32) -> Self {
        let mut data = Vec::with_capacity(height * width);
        for y in 0..height {
            for x in 0..width {
                data.push(f(y, x));
            }
        }
        Self { height, width, data }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn get(&self, y: usize, x: usize) -> f32 {
        self.data[y * self.width + x]
    }

    pub fn map(&self, f: impl Fn(f32) -> f32) -> Plane {
        Plane::new(self.height, self.width, self.data.iter().map(|&v| f(v)).collect())
    }
}

/// Pixel map restricted to `{0, 1}`.
#[derive(Clone, Debug, PartialEq)]
pub struct BinaryMask(Plane);

impl BinaryMask {
    pub fn new(plane: Plane) -> Result<Self, DataError> {
        if let Some((index, &value)) = plane.data.iter().enumerate().find(|(_, &v)| v != 0.0 && v != 1.0) {
            return Err(DataError::InvalidBinary { value, index });
        }
        Ok(Self(plane))
    }

    pub fn from_fn(height: usize, width: usize, f: impl Fn(usize, usize) -> bool) -> Self {
        Self(Plane::from_fn(height, width, |y, x| if f(y, x) { 1.0 } else { 0.0 }))
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        Self(Plane::zeros(height, width))
    }

    pub fn plane(&self) -> &Plane {
        &self.0
    }

    pub fn dims(&self) -> (usize, usize) {
        self.0.dims()
    }

    pub fn is_set(&self, index: usize) -> bool {
        self.0.data[index] == 1.0
    }

    pub fn count(&self) -> usize {
        self.0.data.iter().filter(|&&v| v == 1.0).count()
    }

    pub fn is_empty(&self) -> bool {
        self.count() == 0
    }
}

/// Per-pixel tumor grade: 0 background, 0.5 ED, 0.75 ET, 1.0 NCR/NET.
#[derive(Clone, Debug, PartialEq)]
pub struct GradeMask(Plane);

impl GradeMask {
    pub fn new(plane: Plane) -> Result<Self, DataError> {
        if let Some((index, &value)) = plane.data.iter().enumerate().find(|(_, v)| !GRADE_VALUES.contains(v)) {
            return Err(DataError::InvalidGrade { value, index });
        }
        Ok(Self(plane))
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        Self(Plane::zeros(height, width))
    }

    pub fn plane(&self) -> &Plane {
        &self.0
    }

    pub fn dims(&self) -> (usize, usize) {
        self.0.dims()
    }

    pub fn count_value(&self, value: f32) -> usize {
        self.0.data.iter().filter(|&&v| v == value).count()
    }

    pub fn tumor_pixels(&self) -> usize {
        self.0.data.iter().filter(|&&v| v > 0.0).count()
    }

    pub fn is_empty(&self) -> bool {
        self.tumor_pixels() == 0
    }
}

/// Four co-registered contrasts plus the brain support they were taken from.
#[derive(Clone, Debug, PartialEq)]
pub struct MCSlice {
    height: usize,
    width: usize,
    data: Vec<f32>,
    normalized: bool,
    support: BinaryMask,
}

impl MCSlice {
    /// Raw, skull-stripped intensities; the brain support is `β(T1w)`.
    pub fn from_raw(height: usize, width: usize, data: Vec<f32>) -> Self {
        assert_eq!(data.len(), 4 * height * width, "MCSlice needs 4 planes of {height}x{width}");
        let t1 = &data[T1W * height * width..(T1W + 1) * height * width];
        let support = BinaryMask(Plane::new(height, width, t1.iter().map(|&v| (v > 0.0) as u8 as f32).collect()));
        Self { height, width, data, normalized: false, support }
    }

    /// Assemble from parts, e.g. normalized or synthesized planes.
    pub fn from_parts(
        height: usize,
        width: usize,
        data: Vec<f32>,
        normalized: bool,
        support: BinaryMask,
    ) -> Result<Self, DataError> {
        if data.len() != 4 * height * width {
            return Err(DataError::DimensionMismatch { expected: (height, width), got: (data.len() / 4, 1) });
        }
        if support.dims() != (height, width) {
            return Err(DataError::DimensionMismatch { expected: (height, width), got: support.dims() });
        }
        if normalized {
            if let Some(&v) = data.iter().find(|v| !(CLIP_LOW..=CLIP_HIGH).contains(*v)) {
                return Err(DataError::InvalidManifest(format!("normalized slice holds {v} outside [-0.5, 5]")));
            }
        }
        Ok(Self { height, width, data, normalized, support })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn is_normalized(&self) -> bool {
        self.normalized
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn channel(&self, c: usize) -> &[f32] {
        let p = self.height * self.width;
        &self.data[c * p..(c + 1) * p]
    }

    pub fn channel_plane(&self, c: usize) -> Plane {
        Plane::new(self.height, self.width, self.channel(c).to_vec())
    }

    /// Brain support mask (`β(T1w)` of the raw acquisition).
    pub fn support(&self) -> &BinaryMask {
        &self.support
    }

    /// Standardize each contrast over its nonzero pixels and clip.
    ///
    /// Already normalized slices are returned unchanged.
    pub fn normalized(&self) -> Result<MCSlice, DataError> {
        if self.normalized {
            return Ok(self.clone());
        }
        let mut data = Vec::with_capacity(self.data.len());
        for c in 0..4 {
            data.extend(gaussian_normalize(&self.channel_plane(c))?.data);
        }
        Ok(MCSlice { data, normalized: true, ..self.clone() })
    }
}

/// Standardize over nonzero (brain-support) pixels, then clip every pixel to
/// `[-0.5, 5]`. Background pixels map to the clipped value of `-μ/σ`.
pub fn gaussian_normalize(image: &Plane) -> Result<Plane, DataError> {
    let support: Vec<f64> = image.data.iter().filter(|&&v| v != 0.0).map(|&v| v as f64).collect();
    if support.is_empty() {
        return Err(DataError::DegenerateStd { std: 0.0 });
    }
    let n = support.len() as f64;
    let mean = support.iter().sum::<f64>() / n;
    let std = (support.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n).sqrt();
    if std < MIN_STD {
        return Err(DataError::DegenerateStd { std });
    }
    Ok(image.map(|v| (((v as f64 - mean) / std) as f32).clamp(CLIP_LOW, CLIP_HIGH)))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Source {
    Real,
    Phantom,
    Synthesized,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SliceRecord {
    pub id: String,
    pub images: MCSlice,
    pub grade_mask: Option<GradeMask>,
    pub source: Source,
    pub seed: Option<u64>,
}

impl SliceRecord {
    pub fn new(
        id: impl Into<String>,
        images: MCSlice,
        grade_mask: Option<GradeMask>,
        source: Source,
        seed: Option<u64>,
    ) -> Result<Self, DataError> {
        if let Some(m) = &grade_mask {
            if m.dims() != images.dims() {
                return Err(DataError::DimensionMismatch { expected: images.dims(), got: m.dims() });
            }
        }
        Ok(Self { id: id.into(), images, grade_mask, source, seed })
    }

    /// True when the record carries a non-empty grade mask.
    pub fn has_tumor(&self) -> bool {
        self.grade_mask.as_ref().is_some_and(|m| !m.is_empty())
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct Sidecar {
    id: String,
    height: usize,
    width: usize,
    channels: usize,
    channel_names: Vec<String>,
    normalized: bool,
    source: Source,
    seed: Option<u64>,
    has_grade_mask: bool,
    format_version: u32,
}

fn channel_names(has_mask: bool) -> Vec<String> {
    let mut names: Vec<String> = CONTRASTS.iter().map(|s| s.to_string()).collect();
    names.push(SUPPORT_CHANNEL.into());
    if has_mask {
        names.push(GRADE_CHANNEL.into());
    }
    names
}

/// Write `<id>.mct` and `<id>.json` into `directory`; returns the sidecar path.
pub fn save_slice(record: &SliceRecord, directory: &Path) -> Result<PathBuf, DataError> {
    let (h, w) = record.images.dims();
    let names = channel_names(record.grade_mask.is_some());
    let tensor_path = directory.join(format!("{}.mct", record.id));
    let sidecar_path = directory.join(format!("{}.json", record.id));

    let file = fs::File::create(&tensor_path).map_err(|e| DataError::io(&tensor_path, e))?;
    let mut out = BufWriter::new(file);
    let planes = record
        .images
        .data
        .iter()
        .chain(record.images.support.0.data.iter())
        .chain(record.grade_mask.iter().flat_map(|m| m.0.data.iter()));
    for v in planes {
        out.write_all(&v.to_le_bytes()).map_err(|e| DataError::io(&tensor_path, e))?;
    }
    out.flush().map_err(|e| DataError::io(&tensor_path, e))?;

    let sidecar = Sidecar {
        id: record.id.clone(),
        height: h,
        width: w,
        channels: names.len(),
        channel_names: names,
        normalized: record.images.normalized,
        source: record.source,
        seed: record.seed,
        has_grade_mask: record.grade_mask.is_some(),
        format_version: FORMAT_VERSION,
    };
    let text = serde_json::to_string_pretty(&sidecar).expect("sidecar serializes");
    fs::write(&sidecar_path, text + "\n").map_err(|e| DataError::io(&sidecar_path, e))?;
    Ok(sidecar_path)
}

/// Read a record back from its sidecar (or tensor) path.
pub fn load_slice(path: &Path) -> Result<SliceRecord, DataError> {
    let sidecar_path = path.with_extension("json");
    let tensor_path = path.with_extension("mct");
    let text = fs::read_to_string(&sidecar_path).map_err(|e| DataError::io(&sidecar_path, e))?;
    let version: serde_json::Value =
        serde_json::from_str(&text).map_err(|e| DataError::corrupt(&sidecar_path, e.to_string()))?;
    match version.get("format_version").and_then(|v| v.as_u64()) {
        Some(v) if v == FORMAT_VERSION as u64 => {}
        Some(v) => return Err(DataError::UnknownVersion(v as u32)),
        None => return Err(DataError::corrupt(&sidecar_path, "missing format_version")),
    }
    let meta: Sidecar = serde_json::from_value(version).map_err(|e| DataError::corrupt(&sidecar_path, e.to_string()))?;
    if meta.channel_names != channel_names(meta.has_grade_mask) || meta.channels != meta.channel_names.len() {
        return Err(DataError::corrupt(&sidecar_path, "unexpected channel layout"));
    }

    let bytes = fs::read(&tensor_path).map_err(|e| DataError::io(&tensor_path, e))?;
    let p = meta.height * meta.width;
    let expected = p * meta.channels * 4;
    if bytes.len() != expected {
        return Err(DataError::corrupt(
            &tensor_path,
            format!("{} bytes, expected {} for {}x{}x{}", bytes.len(), expected, meta.channels, meta.height, meta.width),
        ));
    }
    let floats: Vec<f32> = bytes.chunks_exact(4).map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]])).collect();
    let (h, w) = (meta.height, meta.width);
    let bad = |e: DataError| DataError::corrupt(&tensor_path, e.to_string());
    let support = BinaryMask::new(Plane::new(h, w, floats[4 * p..5 * p].to_vec())).map_err(bad)?;
    let images = MCSlice::from_parts(h, w, floats[..4 * p].to_vec(), meta.normalized, support).map_err(bad)?;
    let grade_mask = if meta.has_grade_mask {
        Some(GradeMask::new(Plane::new(h, w, floats[5 * p..6 * p].to_vec())).map_err(bad)?)
    } else {
        None
    };
    Ok(SliceRecord { id: meta.id, images, grade_mask, source: meta.source, seed: meta.seed })
}

/// Records plus named splits (e.g. `train`, `val`, `test`).
#[derive(Clone, Debug, PartialEq, Default)]
pub struct DatasetManifest {
    pub records: Vec<SliceRecord>,
    pub splits: BTreeMap<String, Vec<String>>,
}

pub const MANIFEST_FILE: &str = "manifest.json";
const SLICE_DIR: &str = "slices";

#[derive(Debug, Serialize, Deserialize)]
struct ManifestEntry {
    id: String,
    source: Source,
    seed: Option<u64>,
    file: String,
}

#[derive(Debug, Serialize, Deserialize)]
struct ManifestDoc {
    format_version: u32,
    records: Vec<ManifestEntry>,
    splits: BTreeMap<String, Vec<String>>,
}

impl DatasetManifest {
    pub fn new(records: Vec<SliceRecord>) -> Self {
        Self { records, splits: BTreeMap::new() }
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn get(&self, id: &str) -> Option<&SliceRecord> {
        self.records.iter().find(|r| r.id == id)
    }

    /// Check unique ids, resolvable split ids and pairwise-disjoint splits.
    pub fn validate(&self) -> Result<(), DataError> {
        let mut ids = BTreeSet::new();
        for r in &self.records {
            if !ids.insert(r.id.as_str()) {
                return Err(DataError::InvalidManifest(format!("duplicate record id {}", r.id)));
            }
        }
        let mut seen: BTreeMap<&str, &str> = BTreeMap::new();
        for (split, members) in &self.splits {
            for id in members {
                if !ids.contains(id.as_str()) {
                    return Err(DataError::InvalidManifest(format!("split {split} names unknown id {id}")));
                }
                if let Some(other) = seen.insert(id, split) {
                    return Err(DataError::InvalidManifest(format!("id {id} is in both {other} and {split}")));
                }
            }
        }
        Ok(())
    }

    /// Records belonging to `split`, in split order.
    pub fn split(&self, name: &str) -> Vec<&SliceRecord> {
        self.splits
            .get(name)
            .map(|ids| ids.iter().filter_map(|id| self.get(id)).collect())
            .unwrap_or_default()
    }

    /// A manifest holding only the records of `split` (the split itself is kept).
    pub fn subset(&self, name: &str) -> DatasetManifest {
        let records: Vec<SliceRecord> = self.split(name).into_iter().cloned().collect();
        let mut splits = BTreeMap::new();
        splits.insert(name.to_string(), records.iter().map(|r| r.id.clone()).collect());
        DatasetManifest { records, splits }
    }

    /// Same dataset with every record's images normalized.
    pub fn normalized(&self) -> Result<DatasetManifest, DataError> {
        let records = self
            .records
            .iter()
            .map(|r| Ok(SliceRecord { images: r.images.normalized()?, ..r.clone() }))
            .collect::<Result<_, DataError>>()?;
        Ok(DatasetManifest { records, splits: self.splits.clone() })
    }

    pub fn save(&self, dir: &Path) -> Result<PathBuf, DataError> {
        self.validate()?;
        let slice_dir = dir.join(SLICE_DIR);
        fs::create_dir_all(&slice_dir).map_err(|e| DataError::io(&slice_dir, e))?;
        let mut entries = Vec::with_capacity(self.records.len());
        for r in &self.records {
            save_slice(r, &slice_dir)?;
            entries.push(ManifestEntry {
                id: r.id.clone(),
                source: r.source,
                seed: r.seed,
                file: format!("{SLICE_DIR}/{}.json", r.id),
            });
        }
        let doc = ManifestDoc { format_version: FORMAT_VERSION, records: entries, splits: self.splits.clone() };
        let path = dir.join(MANIFEST_FILE);
        let text = serde_json::to_string_pretty(&doc).expect("manifest serializes");
        fs::write(&path, text + "\n").map_err(|e| DataError::io(&path, e))?;
        Ok(path)
    }

    pub fn load(dir: &Path) -> Result<DatasetManifest, DataError> {
        let path = dir.join(MANIFEST_FILE);
        let text = fs::read_to_string(&path).map_err(|e| DataError::io(&path, e))?;
        let doc: ManifestDoc = serde_json::from_str(&text).map_err(|e| DataError::corrupt(&path, e.to_string()))?;
        if doc.format_version != FORMAT_VERSION {
            return Err(DataError::UnknownVersion(doc.format_version));
        }
        let records = doc
            .records
            .iter()
            .map(|e| load_slice(&dir.join(&e.file)))
            .collect::<Result<Vec<_>, _>>()?;
        let manifest = DatasetManifest { records, splits: doc.splits };
        manifest.validate()?;
        Ok(manifest)
    }
}

/// Write a plane as an 8-bit grayscale PNG with values scaled by 255.
pub fn write_png(plane: &Plane, path: &Path) -> Result<(), DataError> {
    let file = fs::File::create(path).map_err(|e| DataError::io(path, e))?;
    let mut encoder = png::Encoder::new(BufWriter::new(file), plane.width as u32, plane.height as u32);
    encoder.set_color(png::ColorType::Grayscale);
    encoder.set_depth(png::BitDepth::Eight);
    let bytes: Vec<u8> = plane.data.iter().map(|&v| (v * 255.0).round().clamp(0.0, 255.0) as u8).collect();
    let to_io = |e: png::EncodingError| DataError::io(path, std::io::Error::other(e.to_string()));
    let mut writer = encoder.write_header().map_err(to_io)?;
    writer.write_image_data(&bytes).map_err(to_io)?;
    writer.finish().map_err(to_io)
}

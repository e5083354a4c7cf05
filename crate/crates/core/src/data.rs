//! Domain data model and on-disk formats.
//!
//! Volumes are a JSON header (`<name>.vol.json`) next to a raw payload
//! (`<name>.vol.raw`) of little-endian `f32`, x-fastest then y, z, t.
//! Atlases use the same layout with `i32` labels. Onsets are a TSV with
//! `condition_id`, `category_id`, `onset` columns; feature matrices are a CSV
//! with one row per stimulus.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::ecoc::EnsembleModel;
use crate::error::{Error, Result};

fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

pub(crate) fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// `foo.vol.json` -> `foo.vol.raw`
pub fn payload_path(header: &Path) -> PathBuf {
    let name = header
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_default();
    let stem = name.strip_suffix(".json").unwrap_or(&name);
    header.with_file_name(format!("{stem}.raw"))
}

fn check_finite(values: &[f64]) -> Result<()> {
    match values.iter().position(|v| !v.is_finite()) {
        Some(index) => Err(Error::NonFinite { index }),
        None => Ok(()),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Volume4D {
    dims: [usize; 4],
    tr_ms: f64,
    voxels: Vec<f64>,
}

impl Volume4D {
    pub fn new(dims: [usize; 4], tr_ms: f64, voxels: Vec<f64>) -> Result<Self> {
        if dims.contains(&0) {
            return Err(Error::Invalid(format!("volume dims must be positive, got {dims:?}")));
        }
        if !(tr_ms > 0.0 && tr_ms.is_finite()) {
            return Err(Error::Invalid(format!("repetition time must be positive, got {tr_ms}")));
        }
        let expected = dims.iter().product();
        if voxels.len() != expected {
            return Err(Error::SizeMismatch {
                expected,
                found: voxels.len(),
            });
        }
        check_finite(&voxels)?;
        Ok(Self { dims, tr_ms, voxels })
    }

    pub fn dims(&self) -> [usize; 4] {
        self.dims
    }

    pub fn spatial_dims(&self) -> [usize; 3] {
        [self.dims[0], self.dims[1], self.dims[2]]
    }

    pub fn scans(&self) -> usize {
        self.dims[3]
    }

    pub fn voxel_count(&self) -> usize {
        self.dims[0] * self.dims[1] * self.dims[2]
    }

    pub fn tr_ms(&self) -> f64 {
        self.tr_ms
    }

    pub fn voxels(&self) -> &[f64] {
        &self.voxels
    }

    /// All voxels of scan `t`.
    pub fn scan(&self, t: usize) -> &[f64] {
        let v = self.voxel_count();
        &self.voxels[t * v..(t + 1) * v]
    }

    pub fn series(&self, voxel: usize) -> Vec<f64> {
        let v = self.voxel_count();
        (0..self.scans()).map(|t| self.voxels[t * v + voxel]).collect()
    }

    /// Temporal mean image.
    pub fn mean_image(&self) -> Volume3D {
        let v = self.voxel_count();
        let mut out = vec![0.0; v];
        for t in 0..self.scans() {
            for (o, x) in out.iter_mut().zip(self.scan(t)) {
                *o += x;
            }
        }
        let n = self.scans() as f64;
        out.iter_mut().for_each(|o| *o /= n);
        Volume3D {
            dims: self.spatial_dims(),
            voxels: out,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Volume3D {
    dims: [usize; 3],
    voxels: Vec<f64>,
}

impl Volume3D {
    pub fn new(dims: [usize; 3], voxels: Vec<f64>) -> Result<Self> {
        if dims.contains(&0) {
            return Err(Error::Invalid(format!("volume dims must be positive, got {dims:?}")));
        }
        let expected = dims.iter().product();
        if voxels.len() != expected {
            return Err(Error::SizeMismatch {
                expected,
                found: voxels.len(),
            });
        }
        check_finite(&voxels)?;
        Ok(Self { dims, voxels })
    }

    pub fn zeros(dims: [usize; 3]) -> Self {
        Self {
            dims,
            voxels: vec![0.0; dims.iter().product()],
        }
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn len(&self) -> usize {
        self.voxels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.voxels.is_empty()
    }

    pub fn voxels(&self) -> &[f64] {
        &self.voxels
    }

    pub fn voxels_mut(&mut self) -> &mut [f64] {
        &mut self.voxels
    }

    pub fn into_voxels(self) -> Vec<f64> {
        self.voxels
    }

    #[inline]
    pub fn index(&self, x: usize, y: usize, z: usize) -> usize {
        x + self.dims[0] * (y + self.dims[1] * z)
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, z: usize) -> f64 {
        self.voxels[self.index(x, y, z)]
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AtlasVolume {
    dims: [usize; 3],
    labels: Vec<i32>,
    region_count: usize,
}

impl AtlasVolume {
    /// Validates that labels lie in `0..=region_count` and that every region
    /// id occurs at least once.
    pub fn new(dims: [usize; 3], labels: Vec<i32>, region_count: usize) -> Result<Self> {
        if dims.contains(&0) {
            return Err(Error::Invalid(format!("atlas dims must be positive, got {dims:?}")));
        }
        let expected = dims.iter().product();
        if labels.len() != expected {
            return Err(Error::SizeMismatch {
                expected,
                found: labels.len(),
            });
        }
        if region_count == 0 {
            return Err(Error::Invalid("atlas needs at least one region".into()));
        }
        let mut seen = vec![false; region_count + 1];
        for (i, &l) in labels.iter().enumerate() {
            if l < 0 || l as usize > region_count {
                return Err(Error::Invalid(format!(
                    "label {l} at voxel {i} outside 0..={region_count}"
                )));
            }
            seen[l as usize] = true;
        }
        if let Some(missing) = (1..=region_count).find(|&r| !seen[r]) {
            return Err(Error::Invalid(format!("region {missing} has no voxels")));
        }
        Ok(Self {
            dims,
            labels,
            region_count,
        })
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn labels(&self) -> &[i32] {
        &self.labels
    }

    pub fn region_count(&self) -> usize {
        self.region_count
    }

    /// Voxel indices of region `r` (1-based).
    pub fn region_voxels(&self, r: usize) -> Vec<usize> {
        self.labels
            .iter()
            .enumerate()
            .filter(|(_, &l)| l as usize == r)
            .map(|(i, _)| i)
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Condition {
    pub id: u32,
    pub category: u32,
    pub onsets: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StimulusSchedule {
    pub session_id: String,
    pub category_count: usize,
    pub conditions: Vec<Condition>,
}

impl StimulusSchedule {
    /// Structural checks that do not depend on the scan count.
    pub fn new(
        session_id: impl Into<String>,
        category_count: usize,
        conditions: Vec<Condition>,
    ) -> Result<Self> {
        let schedule = Self {
            session_id: session_id.into(),
            category_count,
            conditions,
        };
        if schedule.conditions.is_empty() {
            return Err(Error::malformed("schedule", "no conditions"));
        }
        let mut owned = vec![false; category_count + 1];
        let mut ids = std::collections::BTreeSet::new();
        for c in &schedule.conditions {
            if c.category == 0 || c.category as usize > category_count {
                return Err(Error::UnknownCategory(c.category));
            }
            if !ids.insert(c.id) {
                return Err(Error::malformed("schedule", format!("duplicate condition {}", c.id)));
            }
            if c.onsets.is_empty() {
                return Err(Error::malformed("schedule", format!("condition {} has no onsets", c.id)));
            }
            if c.onsets.windows(2).any(|w| w[0] >= w[1]) {
                return Err(Error::malformed(
                    "schedule",
                    format!("condition {} onsets are not strictly increasing", c.id),
                ));
            }
            owned[c.category as usize] = true;
        }
        if let Some(n) = (1..=category_count).find(|&n| !owned[n]) {
            return Err(Error::EmptyCategory(n as u32));
        }
        Ok(schedule)
    }

    pub fn condition_count(&self) -> usize {
        self.conditions.len()
    }

    pub fn condition(&self, id: u32) -> Option<&Condition> {
        self.conditions.iter().find(|c| c.id == id)
    }

    /// Bounds check against a session with `scans` time points.
    pub fn validate(&self, scans: usize) -> Result<()> {
        for c in &self.conditions {
            if c.onsets.len() > scans {
                return Err(Error::malformed(
                    "schedule",
                    format!("condition {} has more onsets than scans", c.id),
                ));
            }
            if let Some(&bad) = c.onsets.iter().find(|&&o| o >= scans) {
                return Err(Error::OnsetOutOfRange {
                    condition: c.id,
                    onset: bad,
                    scans,
                });
            }
        }
        Ok(())
    }
}

/// Per-voxel, per-category regression coefficients, voxel-major.
#[derive(Debug, Clone, PartialEq)]
pub struct BetaMap {
    pub session_id: String,
    pub dims: [usize; 3],
    pub category_count: usize,
    pub betas: Vec<f64>,
}

impl BetaMap {
    pub fn voxel_count(&self) -> usize {
        self.dims.iter().product()
    }

    #[inline]
    pub fn get(&self, voxel: usize, category_index: usize) -> f64 {
        self.betas[voxel * self.category_count + category_index]
    }

    /// Beta column for 1-based category `n`.
    pub fn column(&self, n: u32) -> Result<Vec<f64>> {
        if n == 0 || n as usize > self.category_count {
            return Err(Error::UnknownCategory(n));
        }
        let j = n as usize - 1;
        Ok((0..self.voxel_count()).map(|v| self.get(v, j)).collect())
    }

    pub fn column_volume(&self, n: u32) -> Result<Volume3D> {
        Ok(Volume3D {
            dims: self.dims,
            voxels: self.column(n)?,
        })
    }
}

/// Features for each stimulus: `columns[i]` is one stimulus with `E` entries.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMatrix {
    pub region_ids: Vec<String>,
    pub columns: Vec<Vec<f64>>,
    pub labels: Vec<u32>,
    pub sessions: Vec<String>,
}

impl FeatureMatrix {
    pub fn new(
        region_ids: Vec<String>,
        columns: Vec<Vec<f64>>,
        labels: Vec<u32>,
        sessions: Vec<String>,
    ) -> Result<Self> {
        if columns.len() != labels.len() || columns.len() != sessions.len() {
            return Err(Error::DimMismatch(format!(
                "{} feature columns, {} labels, {} session ids",
                columns.len(),
                labels.len(),
                sessions.len()
            )));
        }
        for (i, c) in columns.iter().enumerate() {
            if c.len() != region_ids.len() {
                return Err(Error::DimMismatch(format!(
                    "column {i} has {} features, expected {}",
                    c.len(),
                    region_ids.len()
                )));
            }
            if c.iter().any(|v| v.is_nan()) {
                return Err(Error::NonFinite { index: i });
            }
        }
        Ok(Self {
            region_ids,
            columns,
            labels,
            sessions,
        })
    }

    pub fn feature_count(&self) -> usize {
        self.region_ids.len()
    }

    pub fn len(&self) -> usize {
        self.columns.len()
    }

    pub fn is_empty(&self) -> bool {
        self.columns.is_empty()
    }

    /// Sorted distinct category ids.
    pub fn categories(&self) -> Vec<u32> {
        let mut c = self.labels.clone();
        c.sort_unstable();
        c.dedup();
        c
    }

    pub fn subset(&self, indices: &[usize]) -> FeatureMatrix {
        FeatureMatrix {
            region_ids: self.region_ids.clone(),
            columns: indices.iter().map(|&i| self.columns[i].clone()).collect(),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            sessions: indices.iter().map(|&i| self.sessions[i].clone()).collect(),
        }
    }

    /// Append the columns of `other`; region ids must agree.
    pub fn extend(&mut self, other: FeatureMatrix) -> Result<()> {
        if self.region_ids != other.region_ids {
            return Err(Error::DimMismatch("feature matrices have different regions".into()));
        }
        self.columns.extend(other.columns);
        self.labels.extend(other.labels);
        self.sessions.extend(other.sessions);
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Volume files

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct VolumeHeader {
    dims: Vec<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    tr_ms: Option<f64>,
    dtype: String,
}

const F32_LE: &str = "float32-le";
const I32_LE: &str = "int32-le";

fn read_header<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = read_text(path)?;
    serde_json::from_str(&text).map_err(|e| Error::malformed(path.display().to_string(), e.to_string()))
}

fn decode_f32(bytes: &[u8], expected: usize) -> Result<Vec<f64>> {
    if !bytes.len().is_multiple_of(4) || bytes.len() / 4 != expected {
        return Err(Error::SizeMismatch {
            expected,
            found: bytes.len() / 4,
        });
    }
    let values: Vec<f64> = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect();
    check_finite(&values)?;
    Ok(values)
}

fn encode_f32(values: &[f64]) -> Vec<u8> {
    let mut out = Vec::with_capacity(values.len() * 4);
    for &v in values {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
    out
}

fn write_header<T: Serialize>(path: &Path, header: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(header).expect("header serialises");
    text.push('\n');
    write_bytes(path, text.as_bytes())
}

pub fn save_volume4d(path: &Path, vol: &Volume4D) -> Result<()> {
    let header = VolumeHeader {
        dims: vol.dims.to_vec(),
        tr_ms: Some(vol.tr_ms),
        dtype: F32_LE.into(),
    };
    write_header(path, &header)?;
    write_bytes(&payload_path(path), &encode_f32(&vol.voxels))
}

pub fn load_volume4d(path: &Path) -> Result<Volume4D> {
    let header: VolumeHeader = read_header(path)?;
    if header.dtype != F32_LE {
        return Err(Error::malformed("volume header", format!("unsupported dtype {}", header.dtype)));
    }
    let dims: [usize; 4] = header.dims.as_slice().try_into().map_err(|_| {
        Error::DimMismatch(format!("expected a 4D volume, header has {} dims", header.dims.len()))
    })?;
    let tr = header
        .tr_ms
        .ok_or_else(|| Error::malformed("volume header", "4D volume needs tr_ms"))?;
    let expected = dims.iter().product();
    let voxels = decode_f32(&read_bytes(&payload_path(path))?, expected)?;
    Volume4D::new(dims, tr, voxels)
}

pub fn save_volume3d(path: &Path, vol: &Volume3D) -> Result<()> {
    let header = VolumeHeader {
        dims: vol.dims.to_vec(),
        tr_ms: None,
        dtype: F32_LE.into(),
    };
    write_header(path, &header)?;
    write_bytes(&payload_path(path), &encode_f32(&vol.voxels))
}

pub fn load_volume3d(path: &Path) -> Result<Volume3D> {
    let header: VolumeHeader = read_header(path)?;
    if header.dtype != F32_LE {
        return Err(Error::malformed("volume header", format!("unsupported dtype {}", header.dtype)));
    }
    let dims: [usize; 3] = header.dims.as_slice().try_into().map_err(|_| {
        Error::DimMismatch(format!("expected a 3D volume, header has {} dims", header.dims.len()))
    })?;
    let expected = dims.iter().product();
    let voxels = decode_f32(&read_bytes(&payload_path(path))?, expected)?;
    Volume3D::new(dims, voxels)
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct AtlasHeader {
    dims: Vec<usize>,
    region_count: usize,
    dtype: String,
}

pub fn save_atlas(path: &Path, atlas: &AtlasVolume) -> Result<()> {
    let header = AtlasHeader {
        dims: atlas.dims.to_vec(),
        region_count: atlas.region_count,
        dtype: I32_LE.into(),
    };
    write_header(path, &header)?;
    let mut bytes = Vec::with_capacity(atlas.labels.len() * 4);
    for &l in &atlas.labels {
        bytes.extend_from_slice(&l.to_le_bytes());
    }
    write_bytes(&payload_path(path), &bytes)
}

pub fn load_atlas(path: &Path) -> Result<AtlasVolume> {
    let header: AtlasHeader = read_header(path)?;
    if header.dtype != I32_LE {
        return Err(Error::malformed("atlas header", format!("unsupported dtype {}", header.dtype)));
    }
    let dims: [usize; 3] = header
        .dims
        .as_slice()
        .try_into()
        .map_err(|_| Error::DimMismatch("atlas must be 3D".into()))?;
    let expected: usize = dims.iter().product();
    let bytes = read_bytes(&payload_path(path))?;
    if bytes.len() % 4 != 0 || bytes.len() / 4 != expected {
        return Err(Error::SizeMismatch {
            expected,
            found: bytes.len() / 4,
        });
    }
    let labels = bytes
        .chunks_exact(4)
        .map(|c| i32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    AtlasVolume::new(dims, labels, header.region_count)
}

// ---------------------------------------------------------------------------
// Onsets

/// How onset values in a schedule file are expressed.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum OnsetUnits {
    Scans,
    /// Seconds, converted with the given TR (ms) and rounded to the nearest scan.
    Seconds { tr_ms: f64 },
}

pub fn parse_schedule(session_id: &str, text: &str, units: OnsetUnits) -> Result<StimulusSchedule> {
    let mut by_condition: BTreeMap<u32, (u32, Vec<usize>)> = BTreeMap::new();
    let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
    match lines.next() {
        Some((_, header)) => {
            let cols: Vec<&str> = header.split('\t').map(str::trim).collect();
            if cols != ["condition_id", "category_id", "onset"] {
                return Err(Error::malformed("onsets", format!("unexpected header {header:?}")));
            }
        }
        None => return Err(Error::malformed("onsets", "empty file")),
    }
    for (lineno, line) in lines {
        let ctx = || format!("onsets line {}", lineno + 1);
        let fields: Vec<&str> = line.split('\t').map(str::trim).collect();
        if fields.len() != 3 {
            return Err(Error::malformed(ctx(), format!("expected 3 fields, got {}", fields.len())));
        }
        let cond: u32 = fields[0]
            .parse()
            .map_err(|_| Error::malformed(ctx(), format!("bad condition id {:?}", fields[0])))?;
        let cat: u32 = fields[1]
            .parse()
            .map_err(|_| Error::malformed(ctx(), format!("bad category id {:?}", fields[1])))?;
        if cat == 0 {
            return Err(Error::UnknownCategory(0));
        }
        let onset = match units {
            OnsetUnits::Scans => fields[2]
                .parse::<usize>()
                .map_err(|_| Error::malformed(ctx(), format!("bad onset {:?}", fields[2])))?,
            OnsetUnits::Seconds { tr_ms } => {
                let s: f64 = fields[2]
                    .parse()
                    .map_err(|_| Error::malformed(ctx(), format!("bad onset {:?}", fields[2])))?;
                if !(s.is_finite() && s >= 0.0) {
                    return Err(Error::malformed(ctx(), format!("bad onset {s}")));
                }
                (s * 1000.0 / tr_ms).round() as usize
            }
        };
        let entry = by_condition.entry(cond).or_insert((cat, Vec::new()));
        if entry.0 != cat {
            return Err(Error::malformed(
                ctx(),
                format!("condition {cond} listed under categories {} and {cat}", entry.0),
            ));
        }
        entry.1.push(onset);
    }
    let category_count = by_condition.values().map(|(c, _)| *c).max().unwrap_or(0) as usize;
    let conditions = by_condition
        .into_iter()
        .map(|(id, (category, mut onsets))| {
            onsets.sort_unstable();
            Condition { id, category, onsets }
        })
        .collect();
    StimulusSchedule::new(session_id, category_count, conditions)
}

pub fn format_schedule(schedule: &StimulusSchedule) -> String {
    let mut out = String::from("condition_id\tcategory_id\tonset\n");
    for c in &schedule.conditions {
        for o in &c.onsets {
            out.push_str(&format!("{}\t{}\t{}\n", c.id, c.category, o));
        }
    }
    out
}

/// Session id is the file name without the `.onsets.tsv` suffix.
pub fn load_schedule(path: &Path, units: OnsetUnits) -> Result<StimulusSchedule> {
    let text = read_text(path)?;
    let name = path
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_default();
    let session = name.strip_suffix(".onsets.tsv").unwrap_or(&name);
    parse_schedule(session, &text, units)
}

pub fn save_schedule(path: &Path, schedule: &StimulusSchedule) -> Result<()> {
    write_bytes(path, format_schedule(schedule).as_bytes())
}

// ---------------------------------------------------------------------------
// Feature CSV

pub fn format_features(fm: &FeatureMatrix) -> String {
    let mut out = String::new();
    for id in &fm.region_ids {
        out.push_str(id);
        out.push(',');
    }
    out.push_str("label,session\n");
    for ((col, label), session) in fm.columns.iter().zip(&fm.labels).zip(&fm.sessions) {
        for v in col {
            // shortest representation that round-trips
            out.push_str(&format!("{v:?},"));
        }
        out.push_str(&format!("{label},{session}\n"));
    }
    out
}

pub fn parse_features(text: &str) -> Result<FeatureMatrix> {
    let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
    let (_, header) = lines
        .next()
        .ok_or_else(|| Error::malformed("features", "empty file"))?;
    let head: Vec<&str> = header.split(',').map(str::trim).collect();
    if head.len() < 3 || head[head.len() - 2] != "label" || head[head.len() - 1] != "session" {
        return Err(Error::malformed("features", "header must end with label,session"));
    }
    let e = head.len() - 2;
    let region_ids: Vec<String> = head[..e].iter().map(|s| s.to_string()).collect();
    let mut columns = Vec::new();
    let mut labels = Vec::new();
    let mut sessions = Vec::new();
    for (lineno, line) in lines {
        let ctx = || format!("features line {}", lineno + 1);
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        if fields.len() != e + 2 {
            return Err(Error::malformed(ctx(), format!("expected {} fields, got {}", e + 2, fields.len())));
        }
        let col = fields[..e]
            .iter()
            .map(|f| f.parse::<f64>().map_err(|_| Error::malformed(ctx(), format!("bad value {f:?}"))))
            .collect::<Result<Vec<_>>>()?;
        let label: u32 = fields[e]
            .parse()
            .map_err(|_| Error::malformed(ctx(), format!("bad label {:?}", fields[e])))?;
        if label == 0 {
            return Err(Error::UnknownCategory(0));
        }
        columns.push(col);
        labels.push(label);
        sessions.push(fields[e + 1].to_string());
    }
    FeatureMatrix::new(region_ids, columns, labels, sessions)
}

pub fn load_features(path: &Path) -> Result<FeatureMatrix> {
    parse_features(&read_text(path)?)
}

pub fn save_features(path: &Path, fm: &FeatureMatrix) -> Result<()> {
    write_bytes(path, format_features(fm).as_bytes())
}

// ---------------------------------------------------------------------------
// Models

pub fn save_model(path: &Path, model: &EnsembleModel) -> Result<()> {
    let mut text = serde_json::to_string_pretty(model).expect("model serialises");
    text.push('\n');
    write_bytes(path, text.as_bytes())
}

pub fn load_model(path: &Path) -> Result<EnsembleModel> {
    let text = read_text(path)?;
    let model: EnsembleModel = serde_json::from_str(&text)
        .map_err(|e| Error::malformed(path.display().to_string(), e.to_string()))?;
    model.validate()?;
    Ok(model)
}

// ---------------------------------------------------------------------------
// Session manifests

/// Files of one session. Relative paths are taken from the manifest's
/// directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SessionEntry {
    pub id: String,
    pub data: PathBuf,
    pub onsets: PathBuf,
    /// anatomy in the session's native space, used for session-level registration
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub anatomy: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SessionManifest {
    pub sessions: Vec<SessionEntry>,
}

impl SessionManifest {
    pub fn validate(&self) -> Result<()> {
        if self.sessions.is_empty() {
            return Err(Error::malformed("session manifest", "no sessions listed"));
        }
        let mut seen = std::collections::BTreeSet::new();
        for s in &self.sessions {
            if s.id.is_empty() || !seen.insert(s.id.as_str()) {
                return Err(Error::malformed("session manifest", format!("empty or repeated session id {:?}", s.id)));
            }
        }
        Ok(())
    }
}

/// Load a manifest and make every path absolute relative to its directory.
pub fn load_session_manifest(path: &Path) -> Result<SessionManifest> {
    let mut manifest: SessionManifest = read_header(path)?;
    manifest.validate()?;
    let base = path.parent().unwrap_or(Path::new(""));
    for s in &mut manifest.sessions {
        s.data = base.join(&s.data);
        s.onsets = base.join(&s.onsets);
        if let Some(a) = &mut s.anatomy {
            *a = base.join(&*a);
        }
    }
    Ok(manifest)
}

/// Write any serialisable value as pretty JSON with a trailing newline.
pub fn save_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).expect("value serialises");
    text.push('\n');
    write_bytes(path, text.as_bytes())
}

pub fn load_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    read_header(path)
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    write_bytes(path, text.as_bytes())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn manifest_paths_resolve_against_its_directory() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("sessions.json");
        std::fs::write(&p, r#"{"sessions":[{"id":"sub-01_run-1","data":"a.vol.json","onsets":"a.onsets.tsv"}]}"#).unwrap();
        let m = load_session_manifest(&p).unwrap();
        assert_eq!(m.sessions[0].data, dir.path().join("a.vol.json"));
        assert!(m.sessions[0].anatomy.is_none());
        std::fs::write(&p, r#"{"sessions":[],"extra":1}"#).unwrap();
        assert!(load_session_manifest(&p).is_err());
        std::fs::write(&p, r#"{"sessions":[]}"#).unwrap();
        assert!(load_session_manifest(&p).is_err());
    }

    #[test]
    fn zeros_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("z.vol.json");
        let v = Volume4D::new([2, 2, 1, 3], 2000.0, vec![0.0; 12]).unwrap();
        save_volume4d(&p, &v).unwrap();
        assert_eq!(load_volume4d(&p).unwrap(), v);
        assert!(dir.path().join("z.vol.raw").exists());
    }

    #[test]
    fn short_payload_is_size_mismatch() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("s.vol.json");
        std::fs::write(&p, r#"{"dims":[4,4,4,10],"tr_ms":2000,"dtype":"float32-le"}"#).unwrap();
        std::fs::write(payload_path(&p), vec![0u8; 639 * 4]).unwrap();
        match load_volume4d(&p) {
            Err(Error::SizeMismatch { expected: 640, found: 639 }) => {}
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn missing_file_is_not_found() {
        let e = load_volume4d(Path::new("/nonexistent/x.vol.json")).unwrap_err();
        assert_eq!(e.code(), "io.not_found");
    }

    #[test]
    fn nan_payload_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("n.vol.json");
        std::fs::write(&p, r#"{"dims":[2,1,1],"dtype":"float32-le"}"#).unwrap();
        let mut raw = 1.0f32.to_le_bytes().to_vec();
        raw.extend_from_slice(&f32::NAN.to_le_bytes());
        std::fs::write(payload_path(&p), raw).unwrap();
        assert!(matches!(load_volume3d(&p), Err(Error::NonFinite { index: 1 })));
    }

    #[test]
    fn wrong_rank_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("r.vol.json");
        save_volume3d(&p, &Volume3D::zeros([2, 2, 2])).unwrap();
        assert!(matches!(load_volume4d(&p), Err(Error::DimMismatch(_))));
    }

    #[test]
    fn single_condition_schedule() {
        let s = parse_schedule("s", "condition_id\tcategory_id\tonset\n1\t1\t3\n1\t1\t4\n1\t1\t5\n", OnsetUnits::Scans)
            .unwrap();
        assert_eq!(s.condition_count(), 1);
        assert!(s.category_count >= 1);
        assert_eq!(s.conditions[0].onsets, vec![3, 4, 5]);
    }

    #[test]
    fn onset_out_of_range() {
        let s = parse_schedule("s", "condition_id\tcategory_id\tonset\n1\t1\t121\n", OnsetUnits::Scans).unwrap();
        assert!(matches!(
            s.validate(121),
            Err(Error::OnsetOutOfRange { onset: 121, scans: 121, .. })
        ));
        assert!(s.validate(122).is_ok());
    }

    #[test]
    fn malformed_rows() {
        let bad = [
            "condition_id\tcategory_id\tonset\n1\t1\n",
            "condition_id\tcategory_id\tonset\n1\tx\t2\n",
            "condition_id\tcategory_id\tonset\n1\t1\t-2\n",
            "cond\tcat\tonset\n1\t1\t2\n",
            "",
        ];
        for text in bad {
            assert_eq!(parse_schedule("s", text, OnsetUnits::Scans).unwrap_err().code(), "data.malformed");
        }
        let zero_cat = "condition_id\tcategory_id\tonset\n1\t0\t2\n";
        assert_eq!(
            parse_schedule("s", zero_cat, OnsetUnits::Scans).unwrap_err().code(),
            "data.unknown_category"
        );
        // category 2 present but category 1 owns no condition
        let gap = "condition_id\tcategory_id\tonset\n1\t2\t2\n";
        assert!(parse_schedule("s", gap, OnsetUnits::Scans).is_err());
    }

    #[test]
    fn seconds_are_rounded_to_scans() {
        let text = "condition_id\tcategory_id\tonset\n1\t1\t0\n1\t1\t6.2\n1\t1\t7.6\n";
        let s = parse_schedule("s", text, OnsetUnits::Seconds { tr_ms: 2500.0 }).unwrap();
        assert_eq!(s.conditions[0].onsets, vec![0, 2, 3]);
    }

    #[test]
    fn duplicate_onsets_rejected() {
        let text = "condition_id\tcategory_id\tonset\n1\t1\t4\n1\t1\t4\n";
        assert!(parse_schedule("s", text, OnsetUnits::Scans).is_err());
    }

    #[test]
    fn atlas_validation() {
        assert!(AtlasVolume::new([3, 1, 1], vec![0, 1, 2], 2).is_ok());
        assert!(AtlasVolume::new([3, 1, 1], vec![0, 1, 3], 2).is_err());
        assert!(AtlasVolume::new([3, 1, 1], vec![0, 1, 1], 2).is_err());
        assert!(AtlasVolume::new([3, 1, 1], vec![-1, 1, 2], 2).is_err());
    }

    #[test]
    fn atlas_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.atlas.json");
        let a = AtlasVolume::new([2, 2, 1], vec![0, 1, 2, 2], 2).unwrap();
        save_atlas(&p, &a).unwrap();
        assert_eq!(load_atlas(&p).unwrap(), a);
    }

    #[test]
    fn features_csv_round_trip() {
        let fm = FeatureMatrix::new(
            vec!["1".into(), "2".into()],
            vec![vec![0.1, -2.5e-7], vec![3.0, 1.0 / 3.0]],
            vec![1, 2],
            vec!["sub01_run1".into(), "sub02_run1".into()],
        )
        .unwrap();
        let back = parse_features(&format_features(&fm)).unwrap();
        assert_eq!(back, fm);
    }

    #[test]
    fn features_bad_header() {
        assert!(parse_features("1,2,3\n1,2,3\n").is_err());
    }
}

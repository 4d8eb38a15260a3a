//! On-disk container for fields, feature manifests and series directories.
//!
//! Container layout (all integers little-endian):
//!
//! | bytes        | content                                             |
//! |--------------|-----------------------------------------------------|
//! | 0..8         | magic `GRIDPPFS`                                    |
//! | 8..10        | format version (`u16`, currently 1)                 |
//! | 10..12       | payload kind (`u16`, see [`ContainerKind`])         |
//! | 12..16       | reserved, zero                                      |
//! | 16..24       | manifest block length `L` (`u64`)                   |
//! | 24..24+L     | manifest block, UTF-8 JSON                          |
//! | 24+L..       | `f32` rasters, row-major north to south, in order   |
//!
//! Rasters are written per feature in manifest order; payloads with several
//! rasters per feature (bias state, regression coefficients) store them
//! feature-major.

use std::collections::{BTreeMap, HashSet};
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{Field, Grid};

pub const MAGIC: &[u8; 8] = b"GRIDPPFS";
pub const FORMAT_VERSION: u16 = 1;
pub const FILE_EXTENSION: &str = "fld";
const HEADER_LEN: usize = 16;

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct FeatureSpec {
    pub variable: String,
    pub level: String,
    pub units: String,
}

impl FeatureSpec {
    pub fn new(variable: &str, level: &str, units: &str) -> Self {
        FeatureSpec { variable: variable.into(), level: level.into(), units: units.into() }
    }

    pub fn label(&self) -> String {
        format!("{}@{}", self.variable, self.level)
    }
}

/// Feature inventory plus grid and time axis of a dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureManifest {
    pub features: Vec<FeatureSpec>,
    pub grid: Grid,
    #[serde(default)]
    pub times: Vec<DateTime<Utc>>,
    pub lead_hours: u32,
}

impl FeatureManifest {
    /// Five upper-air variables at three levels plus two single-level
    /// variables (17 features) on a 1-degree global grid.
    pub fn desk_default() -> Self {
        let mut features = Vec::new();
        let upper = [
            ("temperature", "K"),
            ("geopotential_height", "m"),
            ("u_wind", "m/s"),
            ("v_wind", "m/s"),
            ("relative_humidity", "%"),
        ];
        for (var, units) in upper {
            for level in ["500hPa", "850hPa", "1000hPa"] {
                features.push(FeatureSpec::new(var, level, units));
            }
        }
        features.push(FeatureSpec::new("precipitable_water", "column", "kg/m2"));
        features.push(FeatureSpec::new("surface_pressure", "surface", "Pa"));
        FeatureManifest {
            features,
            grid: Grid::new(181, 360, 90.0, -1.0, 0.0, 1.0).expect("static grid"),
            times: Vec::new(),
            lead_hours: 6,
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        Ok(serde_json::from_str(&text)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut text = serde_json::to_string_pretty(self)?;
        text.push('\n');
        write_atomic(path, text.as_bytes())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Violation {
    pub field: String,
    pub rule: String,
}

impl std::fmt::Display for Violation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}: {}", self.field, self.rule)
    }
}

/// Returns every broken manifest invariant; empty means valid.
pub fn validate_manifest(manifest: &FeatureManifest) -> Vec<Violation> {
    let mut out = Vec::new();
    let mut push = |field: &str, rule: String| out.push(Violation { field: field.into(), rule });
    if manifest.features.is_empty() {
        push("features", "no features declared".into());
    }
    let mut seen = HashSet::new();
    for f in &manifest.features {
        if f.variable.trim().is_empty() {
            push("features", "empty variable name".into());
        }
        if !seen.insert((f.variable.as_str(), f.level.as_str())) {
            push("features", format!("duplicate feature {}", f.label()));
        }
    }
    if let Err(e) = manifest.grid.validate() {
        push("grid", e.to_string());
    }
    if manifest.times.windows(2).any(|w| w[1] <= w[0]) {
        push("times", "times not strictly increasing".into());
    } else if manifest.times.len() > 2 {
        let step = manifest.times[1] - manifest.times[0];
        if manifest.times.windows(2).any(|w| w[1] - w[0] != step) {
            push("times", "time step not constant".into());
        }
    }
    out
}

/// All features of one dataset at one valid time.
#[derive(Debug, Clone, PartialEq)]
pub struct FieldSet {
    pub features: Vec<FeatureSpec>,
    pub grid: Grid,
    /// Valid time.
    pub time: DateTime<Utc>,
    /// Forecast lead; zero for analyses.
    pub lead_hours: u32,
    pub fields: Vec<Field>,
}

impl FieldSet {
    pub fn new(
        features: Vec<FeatureSpec>,
        grid: Grid,
        time: DateTime<Utc>,
        lead_hours: u32,
        fields: Vec<Field>,
    ) -> Result<Self> {
        if fields.len() != features.len() {
            return Err(Error::CountMismatch { declared: features.len(), present: fields.len() });
        }
        if let Some(f) = fields.iter().find(|f| f.grid != grid) {
            return Err(Error::ShapeMismatch(format!(
                "field on {}x{} grid in a {}x{} set",
                f.grid.n_lat, f.grid.n_lon, grid.n_lat, grid.n_lon
            )));
        }
        Ok(FieldSet { features, grid, time, lead_hours, fields })
    }

    /// Same layout as `self` with every raster replaced by `f(i, field)`.
    pub fn map_fields(&self, f: impl Fn(usize, &Field) -> Field) -> FieldSet {
        FieldSet {
            features: self.features.clone(),
            grid: self.grid,
            time: self.time,
            lead_hours: self.lead_hours,
            fields: self.fields.iter().enumerate().map(|(i, x)| f(i, x)).collect(),
        }
    }

    pub fn zeros_like(&self) -> FieldSet {
        self.map_fields(|_, f| Field::zeros(f.grid))
    }

    pub fn n_features(&self) -> usize {
        self.features.len()
    }

    /// Checks features and grid agree (times are not compared).
    pub fn ensure_compatible(&self, other: &FieldSet) -> Result<()> {
        if self.grid != other.grid {
            return Err(Error::ShapeMismatch(format!(
                "grid {}x{} vs {}x{}",
                self.grid.n_lat, self.grid.n_lon, other.grid.n_lat, other.grid.n_lon
            )));
        }
        if self.features != other.features {
            return Err(Error::ShapeMismatch("feature manifests differ".into()));
        }
        Ok(())
    }

    pub fn validate_finite(&self) -> Result<()> {
        self.fields.iter().try_for_each(Field::validate_finite)
    }

    /// Element-wise `self - other`.
    pub fn sub(&self, other: &FieldSet) -> Result<FieldSet> {
        self.ensure_compatible(other)?;
        Ok(self.map_fields(|i, f| Field {
            grid: f.grid,
            values: f.values.iter().zip(&other.fields[i].values).map(|(a, b)| a - b).collect(),
        }))
    }
}

/// Payload discriminator stored in the container header.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u16)]
pub enum ContainerKind {
    FieldSet = 0,
    BiasState = 1,
    LinearMos = 2,
}

impl ContainerKind {
    fn from_u16(v: u16) -> Result<Self> {
        match v {
            0 => Ok(ContainerKind::FieldSet),
            1 => Ok(ContainerKind::BiasState),
            2 => Ok(ContainerKind::LinearMos),
            other => Err(Error::Format(format!("unknown payload kind {other}"))),
        }
    }

    pub fn rasters_per_feature(self) -> usize {
        match self {
            ContainerKind::FieldSet => 1,
            ContainerKind::BiasState => 2,
            ContainerKind::LinearMos => 3,
        }
    }
}

/// The structured-text manifest block of a container.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestBlock {
    pub features: Vec<FeatureSpec>,
    pub grid: Grid,
    pub time: DateTime<Utc>,
    pub lead_hours: u32,
    #[serde(flatten)]
    pub extra: BTreeMap<String, serde_json::Value>,
}

/// A decoded container: header block and raw rasters.
#[derive(Debug, Clone, PartialEq)]
pub struct Container {
    pub kind: ContainerKind,
    pub block: ManifestBlock,
    pub rasters: Vec<Vec<f64>>,
}

pub fn encode_container(container: &Container) -> Result<Vec<u8>> {
    let block = &container.block;
    block.grid.validate()?;
    let expected = block.features.len() * container.kind.rasters_per_feature();
    if container.rasters.len() != expected {
        return Err(Error::CountMismatch { declared: expected, present: container.rasters.len() });
    }
    if container.rasters.iter().any(|r| r.len() != block.grid.len()) {
        return Err(Error::ShapeMismatch("raster length disagrees with grid".into()));
    }
    let json = serde_json::to_vec(block)?;
    let mut out = Vec::with_capacity(24 + json.len() + 4 * expected * block.grid.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(container.kind as u16).to_le_bytes());
    out.extend_from_slice(&0u32.to_le_bytes());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    for raster in &container.rasters {
        for v in raster {
            out.extend_from_slice(&(*v as f32).to_le_bytes());
        }
    }
    Ok(out)
}

pub fn decode_container(bytes: &[u8]) -> Result<Container> {
    if bytes.len() < HEADER_LEN {
        if bytes.len() >= MAGIC.len() && &bytes[..MAGIC.len()] != MAGIC {
            return Err(Error::Format("bad magic bytes".into()));
        }
        return Err(Error::Truncated(format!("{} bytes, header needs {HEADER_LEN}", bytes.len())));
    }
    if &bytes[..8] != MAGIC {
        return Err(Error::Format("bad magic bytes".into()));
    }
    let version = u16::from_le_bytes([bytes[8], bytes[9]]);
    if version != FORMAT_VERSION {
        return Err(Error::Format(format!("unsupported format version {version}")));
    }
    let kind = ContainerKind::from_u16(u16::from_le_bytes([bytes[10], bytes[11]]))?;
    if bytes.len() < HEADER_LEN + 8 {
        return Err(Error::Truncated("missing manifest length".into()));
    }
    let block_len = u64::from_le_bytes(bytes[16..24].try_into().expect("8 bytes")) as usize;
    let body = &bytes[24..];
    if body.len() < block_len {
        return Err(Error::Truncated(format!(
            "manifest block declares {block_len} bytes, {} available",
            body.len()
        )));
    }
    let text = std::str::from_utf8(&body[..block_len])
        .map_err(|e| Error::Format(format!("manifest block is not UTF-8: {e}")))?;
    let block: ManifestBlock =
        serde_json::from_str(text).map_err(|e| Error::Format(format!("manifest block: {e}")))?;
    block.grid.validate()?;

    let raster_bytes = 4 * block.grid.len();
    let data = &body[block_len..];
    if !data.len().is_multiple_of(raster_bytes) {
        return Err(Error::Truncated(format!(
            "{} raster bytes is not a multiple of {raster_bytes} ({}x{} f32)",
            data.len(),
            block.grid.n_lat,
            block.grid.n_lon
        )));
    }
    let declared = block.features.len() * kind.rasters_per_feature();
    let present = data.len() / raster_bytes;
    if present != declared {
        return Err(Error::CountMismatch { declared, present });
    }
    let rasters = data
        .chunks_exact(raster_bytes)
        .map(|chunk| {
            chunk
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64)
                .collect()
        })
        .collect();
    Ok(Container { kind, block, rasters })
}

/// Writes through a sibling temp file and renames it into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    fs::create_dir_all(dir)?;
    let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
    tmp.write_all(bytes)?;
    tmp.flush()?;
    tmp.persist(path).map_err(|e| Error::Io(e.error))?;
    Ok(())
}

pub fn write_container(container: &Container, path: &Path) -> Result<()> {
    write_atomic(path, &encode_container(container)?)
}

pub fn read_container(path: &Path) -> Result<Container> {
    decode_container(&fs::read(path)?)
}

pub fn read_container_kind(path: &Path, kind: ContainerKind) -> Result<Container> {
    let c = read_container(path)?;
    if c.kind != kind {
        return Err(Error::Format(format!(
            "{} holds a {:?} payload, expected {:?}",
            path.display(),
            c.kind,
            kind
        )));
    }
    Ok(c)
}

impl From<&FieldSet> for Container {
    fn from(set: &FieldSet) -> Self {
        Container {
            kind: ContainerKind::FieldSet,
            block: ManifestBlock {
                features: set.features.clone(),
                grid: set.grid,
                time: set.time,
                lead_hours: set.lead_hours,
                extra: BTreeMap::new(),
            },
            rasters: set.fields.iter().map(|f| f.values.clone()).collect(),
        }
    }
}

impl TryFrom<Container> for FieldSet {
    type Error = Error;

    fn try_from(c: Container) -> Result<Self> {
        if c.kind != ContainerKind::FieldSet {
            return Err(Error::Format(format!("expected a field set, found {:?}", c.kind)));
        }
        let grid = c.block.grid;
        let fields = c.rasters.into_iter().map(|values| Field { grid, values }).collect();
        FieldSet::new(c.block.features, grid, c.block.time, c.block.lead_hours, fields)
    }
}

/// Stores rasters as 32-bit floats; values not representable in `f32` are rounded.
pub fn write_field_set(set: &FieldSet, path: &Path) -> Result<()> {
    write_container(&Container::from(set), path)
}

pub fn read_field_set(path: &Path) -> Result<FieldSet> {
    FieldSet::try_from(read_container(path)?)
}

/// `<ISO8601>_<lead>h.fld`, keyed by valid time.
pub fn series_file_name(time: DateTime<Utc>, lead_hours: u32) -> String {
    format!("{}_{}h.{}", time.format("%Y-%m-%dT%H:%M:%SZ"), lead_hours, FILE_EXTENSION)
}

pub fn write_series(dir: &Path, sets: &[FieldSet]) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir)?;
    sets.iter()
        .map(|s| {
            let path = dir.join(series_file_name(s.time, s.lead_hours));
            write_field_set(s, &path).map(|_| path)
        })
        .collect()
}

/// Paths of all `.fld` files in `dir`, sorted by name (hence by time).
pub fn list_series(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut paths: Vec<PathBuf> = fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|e| e == FILE_EXTENSION))
        .collect();
    paths.sort();
    Ok(paths)
}

/// Reads every field set of a series directory, ordered by (valid time, lead).
pub fn read_series(dir: &Path) -> Result<Vec<FieldSet>> {
    let mut sets = list_series(dir)?
        .iter()
        .map(|p| read_field_set(p))
        .collect::<Result<Vec<_>>>()?;
    sets.sort_by_key(|s| (s.time, s.lead_hours));
    Ok(sets)
}

#[cfg(test)]
mod tests {
    use super::*;
    use chrono::TimeZone;

    fn sample_set(n_feat: usize) -> FieldSet {
        let grid = Grid::global_cell_centred(4, 6).unwrap();
        let features: Vec<_> =
            (0..n_feat).map(|i| FeatureSpec::new(&format!("var{i}"), "850hPa", "K")).collect();
        let fields = (0..n_feat)
            .map(|i| Field::from_fn(grid, |r, c| (i * 100 + r * 6 + c) as f64 * 0.5 - 3.0))
            .collect();
        let t = Utc.with_ymd_and_hms(2021, 2, 5, 0, 0, 0).unwrap();
        FieldSet::new(features, grid, t, 6, fields).unwrap()
    }

    #[test]
    fn round_trip_in_memory() {
        let set = sample_set(3);
        let bytes = encode_container(&Container::from(&set)).unwrap();
        assert_eq!(&bytes[..8], MAGIC);
        let back = FieldSet::try_from(decode_container(&bytes).unwrap()).unwrap();
        assert_eq!(back, set);
    }

    #[test]
    fn wrong_magic_is_format_error() {
        let mut bytes = encode_container(&Container::from(&sample_set(1))).unwrap();
        bytes[0] = b'X';
        assert!(matches!(decode_container(&bytes), Err(Error::Format(_))));
    }

    #[test]
    fn missing_raster_is_count_mismatch() {
        let set = sample_set(5);
        let mut c = Container::from(&set);
        c.block.features.truncate(4);
        c.rasters.truncate(4);
        let mut bytes = encode_container(&c).unwrap();
        // rewrite the block to declare 5 features while only 4 rasters follow
        let full_block = serde_json::to_vec(&Container::from(&set).block).unwrap();
        let old_len = u64::from_le_bytes(bytes[16..24].try_into().unwrap()) as usize;
        bytes.splice(24..24 + old_len, full_block.iter().copied());
        bytes[16..24].copy_from_slice(&(full_block.len() as u64).to_le_bytes());
        match decode_container(&bytes) {
            Err(Error::CountMismatch { declared: 5, present: 4 }) => {}
            other => panic!("expected count mismatch, got {other:?}"),
        }
    }

    #[test]
    fn truncated_rasters_detected() {
        let bytes = encode_container(&Container::from(&sample_set(2))).unwrap();
        assert!(matches!(decode_container(&bytes[..bytes.len() - 3]), Err(Error::Truncated(_))));
        assert!(matches!(decode_container(&bytes[..12]), Err(Error::Truncated(_))));
        assert!(matches!(decode_container(&bytes[..40]), Err(Error::Truncated(_))));
    }

    #[test]
    fn manifest_validation() {
        let mut m = FeatureManifest::desk_default();
        assert_eq!(m.features.len(), 17);
        assert!(validate_manifest(&m).is_empty());

        m.features.push(m.features[0].clone());
        let v = validate_manifest(&m);
        assert_eq!(v.len(), 1);
        assert!(v[0].rule.contains("temperature@500hPa"));

        let mut m = FeatureManifest::desk_default();
        let t0 = Utc.with_ymd_and_hms(2021, 1, 1, 0, 0, 0).unwrap();
        m.times = vec![t0, t0 + chrono::Duration::hours(6), t0];
        let v = validate_manifest(&m);
        assert_eq!(v, vec![Violation {
            field: "times".into(),
            rule: "times not strictly increasing".into()
        }]);

        m.times = vec![t0, t0 + chrono::Duration::hours(6), t0 + chrono::Duration::hours(18)];
        assert_eq!(validate_manifest(&m)[0].rule, "time step not constant");
    }

    #[test]
    fn file_names_follow_iso_pattern() {
        let t = Utc.with_ymd_and_hms(2021, 2, 5, 6, 0, 0).unwrap();
        assert_eq!(series_file_name(t, 120), "2021-02-05T06:00:00Z_120h.fld");
    }
}

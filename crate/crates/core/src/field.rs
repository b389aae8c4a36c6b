//! Gridded scalar fields, normalization, and the `.fld` container.
//!
//! A `.fld` file is one line of compact JSON (the header) terminated by
//! `\n`, followed by `channels·H·W` little-endian `f32` values (row-major,
//! channel-major) and then `H·W` mask bytes (1 = missing).

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, shape, GaiaError, Result};

/// Value stored at missing pixels. The mask is authoritative.
pub const MISSING_SENTINEL: f64 = 0.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NormalizationSpec {
    pub t_min: f64,
    pub t_max: f64,
}

impl Default for NormalizationSpec {
    fn default() -> Self {
        Self {
            t_min: 180.0,
            t_max: 330.0,
        }
    }
}

impl NormalizationSpec {
    pub fn new(t_min: f64, t_max: f64) -> Result<Self> {
        let spec = Self { t_min, t_max };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.t_min.is_finite() && self.t_max.is_finite() && self.t_min < self.t_max) {
            return invalid(format!(
                "normalization requires finite t_min < t_max, got [{}, {}]",
                self.t_min, self.t_max
            ));
        }
        Ok(())
    }

    pub fn to_unit(&self, kelvin: f64) -> f64 {
        ((kelvin - self.t_min) / (self.t_max - self.t_min)).clamp(0.0, 1.0)
    }

    pub fn to_kelvin(&self, unit: f64) -> f64 {
        self.t_min + unit * (self.t_max - self.t_min)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Field {
    pub values: Array2<f64>,
    /// `true` = pixel unobserved.
    pub missing: Array2<bool>,
    /// Pixels produced by local interpolation rather than observed directly.
    /// They count as observed but are never used as interpolation sources.
    pub filled: Array2<bool>,
    /// Minutes since epoch.
    pub timestamp: i64,
    pub grid_id: String,
    pub normalization: Option<NormalizationSpec>,
}

impl Field {
    /// Fully observed field.
    pub fn observed(values: Array2<f64>) -> Self {
        let dim = values.dim();
        Self {
            values,
            missing: Array2::from_elem(dim, false),
            filled: Array2::from_elem(dim, false),
            timestamp: 0,
            grid_id: String::new(),
            normalization: None,
        }
    }

    /// Field with a missing mask; values under the mask are overwritten by the sentinel.
    pub fn with_missing(mut values: Array2<f64>, missing: Array2<bool>) -> Result<Self> {
        if values.dim() != missing.dim() {
            return shape(format!(
                "values {:?} vs missing {:?}",
                values.dim(),
                missing.dim()
            ));
        }
        ndarray::Zip::from(&mut values)
            .and(&missing)
            .for_each(|v, &m| {
                if m {
                    *v = MISSING_SENTINEL;
                }
            });
        let dim = values.dim();
        Ok(Self {
            values,
            missing,
            filled: Array2::from_elem(dim, false),
            timestamp: 0,
            grid_id: String::new(),
            normalization: None,
        })
    }

    pub fn with_meta(mut self, timestamp: i64, grid_id: impl Into<String>) -> Self {
        self.timestamp = timestamp;
        self.grid_id = grid_id.into();
        self
    }

    pub fn height(&self) -> usize {
        self.values.nrows()
    }

    pub fn width(&self) -> usize {
        self.values.ncols()
    }

    pub fn dim(&self) -> (usize, usize) {
        self.values.dim()
    }

    pub fn n_missing(&self) -> usize {
        self.missing.iter().filter(|&&m| m).count()
    }

    pub fn missing_fraction(&self) -> f64 {
        self.n_missing() as f64 / self.values.len().max(1) as f64
    }

    pub fn validate(&self) -> Result<()> {
        if self.values.dim() != self.missing.dim() || self.values.dim() != self.filled.dim() {
            return shape("field values, missing and filled masks must share a shape");
        }
        for ((idx, v), &m) in self.values.indexed_iter().zip(self.missing.iter()) {
            if !m && !v.is_finite() {
                return Err(GaiaError::NonFinite(format!(
                    "observed value {v} at {idx:?}"
                )));
            }
        }
        Ok(())
    }

    /// Same metadata, new values, everything observed.
    pub fn like(&self, values: Array2<f64>) -> Self {
        let dim = values.dim();
        Self {
            values,
            missing: Array2::from_elem(dim, false),
            filled: Array2::from_elem(dim, false),
            timestamp: self.timestamp,
            grid_id: self.grid_id.clone(),
            normalization: self.normalization,
        }
    }
}

/// Maps kelvin to [0, 1] with clamping. Missing pixels keep the sentinel.
pub fn normalize(field: &Field, spec: &NormalizationSpec) -> Result<Field> {
    spec.validate()?;
    field.validate()?;
    let mut out = field.clone();
    ndarray::Zip::from(&mut out.values)
        .and(&field.missing)
        .for_each(|v, &m| {
            *v = if m { MISSING_SENTINEL } else { spec.to_unit(*v) };
        });
    out.normalization = Some(*spec);
    Ok(out)
}

/// Inverse of [`normalize`] on observed pixels.
pub fn denormalize(field: &Field, spec: &NormalizationSpec) -> Result<Field> {
    spec.validate()?;
    field.validate()?;
    let mut out = field.clone();
    ndarray::Zip::from(&mut out.values)
        .and(&field.missing)
        .for_each(|v, &m| {
            *v = if m { MISSING_SENTINEL } else { spec.to_kelvin(*v) };
        });
    out.normalization = None;
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FldHeader {
    pub height: usize,
    pub width: usize,
    pub timestamp: i64,
    pub grid_id: String,
    pub normalization: Option<NormalizationSpec>,
    pub byte_order: String,
    #[serde(default = "one", skip_serializing_if = "is_one")]
    pub channels: usize,
    /// Run lengths of the interpolated-pixel mask, alternating from "not filled".
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub filled_rle: Option<Vec<usize>>,
}

fn one() -> usize {
    1
}

fn is_one(c: &usize) -> bool {
    *c == 1
}

/// Multi-channel grid (e.g. PCA projections) sharing one missing mask.
#[derive(Debug, Clone, PartialEq)]
pub struct ChannelGrid {
    pub channels: Vec<Array2<f64>>,
    pub missing: Array2<bool>,
    pub timestamp: i64,
    pub grid_id: String,
}

pub fn write_fld(path: &Path, field: &Field) -> Result<()> {
    field.validate()?;
    let filled_rle = field
        .filled
        .iter()
        .any(|&f| f)
        .then(|| crate::patch::rle_encode(field.filled.iter().copied()));
    let header = FldHeader {
        height: field.height(),
        width: field.width(),
        timestamp: field.timestamp,
        grid_id: field.grid_id.clone(),
        normalization: field.normalization,
        byte_order: "little".into(),
        channels: 1,
        filled_rle,
    };
    write_raw(path, &header, std::slice::from_ref(&field.values), &field.missing)
}

pub fn write_channels(path: &Path, grid: &ChannelGrid) -> Result<()> {
    let (h, w) = grid.missing.dim();
    if grid.channels.iter().any(|c| c.dim() != (h, w)) {
        return shape("all channels must match the mask shape");
    }
    let header = FldHeader {
        height: h,
        width: w,
        timestamp: grid.timestamp,
        grid_id: grid.grid_id.clone(),
        normalization: None,
        byte_order: "little".into(),
        channels: grid.channels.len(),
        filled_rle: None,
    };
    write_raw(path, &header, &grid.channels, &grid.missing)
}

fn write_raw(
    path: &Path,
    header: &FldHeader,
    channels: &[Array2<f64>],
    missing: &Array2<bool>,
) -> Result<()> {
    let mut out = BufWriter::new(File::create(path)?);
    serde_json::to_writer(&mut out, header)?;
    out.write_all(b"\n")?;
    for ch in channels {
        for &v in ch.iter() {
            out.write_all(&(v as f32).to_le_bytes())?;
        }
    }
    for &m in missing.iter() {
        out.write_all(&[u8::from(m)])?;
    }
    out.flush()?;
    Ok(())
}

fn read_raw(path: &Path) -> Result<(FldHeader, Vec<Array2<f64>>, Array2<bool>)> {
    let mut reader = BufReader::new(File::open(path)?);
    let mut line = Vec::new();
    reader.read_until(b'\n', &mut line)?;
    let header: FldHeader = serde_json::from_slice(&line)
        .map_err(|e| GaiaError::Format(format!("{}: bad header: {e}", path.display())))?;
    if header.byte_order != "little" {
        return Err(GaiaError::Format(format!(
            "unsupported byte order {}",
            header.byte_order
        )));
    }
    let (h, w) = (header.height, header.width);
    let mut buf = vec![0u8; header.channels * h * w * 4];
    reader
        .read_exact(&mut buf)
        .map_err(|e| GaiaError::Format(format!("{}: truncated payload: {e}", path.display())))?;
    let channels = buf
        .chunks_exact(h * w * 4)
        .map(|chunk| {
            let vals: Vec<f64> = chunk
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64)
                .collect();
            Array2::from_shape_vec((h, w), vals).expect("sized above")
        })
        .collect();
    let mut mask = vec![0u8; h * w];
    reader
        .read_exact(&mut mask)
        .map_err(|e| GaiaError::Format(format!("{}: truncated mask: {e}", path.display())))?;
    if mask.iter().any(|&b| b > 1) {
        return Err(GaiaError::Format("mask bytes must be 0 or 1".into()));
    }
    let missing = Array2::from_shape_vec((h, w), mask.into_iter().map(|b| b == 1).collect())
        .expect("sized above");
    Ok((header, channels, missing))
}

pub fn read_fld(path: &Path) -> Result<Field> {
    let (header, mut channels, missing) = read_raw(path)?;
    if header.channels != 1 {
        return Err(GaiaError::Format(format!(
            "{} has {} channels; expected a single-channel field",
            path.display(),
            header.channels
        )));
    }
    let mut field = Field::with_missing(channels.remove(0), missing)?
        .with_meta(header.timestamp, header.grid_id);
    field.normalization = header.normalization;
    if let Some(rle) = header.filled_rle {
        let flags = crate::patch::rle_decode(&rle, header.height * header.width)?;
        field.filled = Array2::from_shape_vec((header.height, header.width), flags)
            .expect("decoded length checked");
    }
    Ok(field)
}

pub fn read_channels(path: &Path) -> Result<ChannelGrid> {
    let (header, channels, missing) = read_raw(path)?;
    Ok(ChannelGrid {
        channels,
        missing,
        timestamp: header.timestamp,
        grid_id: header.grid_id,
    })
}

/// One line of a dataset or label manifest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestRecord {
    pub path: PathBuf,
    pub timestamp: i64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<PathBuf>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Manifest {
    pub records: Vec<ManifestRecord>,
    /// Directory relative paths are resolved against.
    pub root: PathBuf,
}

impl Manifest {
    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let mut records = Vec::new();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let rec: ManifestRecord = serde_json::from_str(line).map_err(|e| {
                GaiaError::Format(format!("{}:{}: {e}", path.display(), i + 1))
            })?;
            records.push(rec);
        }
        Ok(Self {
            records,
            root: path.parent().map(Path::to_path_buf).unwrap_or_default(),
        })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let mut out = BufWriter::new(File::create(path)?);
        for rec in &self.records {
            serde_json::to_writer(&mut out, rec)?;
            out.write_all(b"\n")?;
        }
        out.flush()?;
        Ok(())
    }

    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.root.join(p)
        }
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn load_fields(&self) -> Result<Vec<Field>> {
        self.records
            .iter()
            .map(|r| read_fld(&self.resolve(&r.path)))
            .collect()
    }

    /// Loads label fields, checking each label's timestamp against its frame.
    pub fn load_labels(&self) -> Result<Vec<Field>> {
        self.records
            .iter()
            .map(|r| {
                let lp = r.label.as_ref().ok_or_else(|| {
                    GaiaError::InvalidInput(format!("record {} has no label", r.path.display()))
                })?;
                let label = read_fld(&self.resolve(lp))?;
                if label.timestamp != r.timestamp {
                    return Err(GaiaError::InvalidInput(format!(
                        "label misalignment: {} has timestamp {} but frame has {}",
                        lp.display(),
                        label.timestamp,
                        r.timestamp
                    )));
                }
                Ok(label)
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use proptest::prelude::*;

    #[test]
    fn normalize_endpoints_and_midpoint() {
        let spec = NormalizationSpec::default();
        let f = Field::observed(array![[180.0, 330.0, 255.0]]);
        let n = normalize(&f, &spec).unwrap();
        assert_eq!(n.values[[0, 0]], 0.0);
        assert_eq!(n.values[[0, 1]], 1.0);
        assert!((n.values[[0, 2]] - 0.5).abs() < 1e-15);
    }

    #[test]
    fn normalize_clamps_and_keeps_mask() {
        let spec = NormalizationSpec::default();
        let f = Field::with_missing(
            array![[100.0, 400.0, 250.0]],
            array![[false, false, true]],
        )
        .unwrap();
        let n = normalize(&f, &spec).unwrap();
        assert_eq!(n.values.row(0).to_vec(), vec![0.0, 1.0, MISSING_SENTINEL]);
        assert_eq!(n.missing, f.missing);
    }

    #[test]
    fn normalize_rejects_non_finite() {
        let f = Field::observed(array![[f64::NAN, 200.0]]);
        assert!(matches!(
            normalize(&f, &NormalizationSpec::default()),
            Err(GaiaError::NonFinite(_))
        ));
        assert!(NormalizationSpec::new(300.0, 200.0).is_err());
    }

    proptest! {
        #[test]
        fn denormalize_inverts_normalize(vals in proptest::collection::vec(130.0f64..380.0, 1..40)) {
            let spec = NormalizationSpec::default();
            let n = vals.len();
            let f = Field::observed(Array2::from_shape_vec((1, n), vals.clone()).unwrap());
            let back = denormalize(&normalize(&f, &spec).unwrap(), &spec).unwrap();
            for (b, v) in back.values.iter().zip(vals) {
                prop_assert!((b - v.clamp(spec.t_min, spec.t_max)).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn fld_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.fld");
        let mut f = Field::with_missing(
            array![[0.25, 0.5], [0.75, 1.0]],
            array![[false, true], [false, false]],
        )
        .unwrap()
        .with_meta(90, "g");
        f.filled[[1, 0]] = true;
        f.normalization = Some(NormalizationSpec::default());
        write_fld(&path, &f).unwrap();
        let g = read_fld(&path).unwrap();
        assert_eq!(f, g);

        let bytes = std::fs::read(&path).unwrap();
        let nl = bytes.iter().position(|&b| b == b'\n').unwrap();
        assert_eq!(bytes.len() - nl - 1, 4 * 4 + 4);
    }

    #[test]
    fn label_timestamp_mismatch_is_an_error() {
        let dir = tempfile::tempdir().unwrap();
        let frame = Field::observed(array![[0.1]]).with_meta(30, "g");
        let label = Field::observed(array![[0.0]]).with_meta(60, "g");
        write_fld(&dir.path().join("f.fld"), &frame).unwrap();
        write_fld(&dir.path().join("l.fld"), &label).unwrap();
        let m = Manifest {
            records: vec![ManifestRecord {
                path: "f.fld".into(),
                timestamp: 30,
                label: Some("l.fld".into()),
            }],
            root: dir.path().to_path_buf(),
        };
        assert!(m.load_labels().is_err());
    }
}

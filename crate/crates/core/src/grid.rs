//! Regular latitude/longitude grids and the fields that live on them.
//!
//! Row 0 is the southernmost row (`lat_min`), column 0 the westernmost
//! (`lon_min`). Cells are half-open: `[lat, lat + res) × [lon, lon + res)`.

use std::collections::HashSet;
use std::path::Path;

use chrono::NaiveDate;
use serde::{Deserialize, Serialize};

use crate::container;
use crate::error::{Error, Result};

/// Relative slack used when an extent is an exact multiple of the resolution
/// but floating-point division lands a hair below the integer.
const SNAP_TOL: f64 = 1e-9;

pub(crate) fn snapped_floor(q: f64) -> f64 {
    let r = q.round();
    if (q - r).abs() <= SNAP_TOL * r.abs().max(1.0) {
        r
    } else {
        q.floor()
    }
}

/// Axis-aligned latitude/longitude box in degrees.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LatLonBox {
    pub lat_min: f64,
    pub lat_max: f64,
    pub lon_min: f64,
    pub lon_max: f64,
}

impl LatLonBox {
    pub fn new(lat_min: f64, lat_max: f64, lon_min: f64, lon_max: f64) -> Result<Self> {
        let b = LatLonBox {
            lat_min,
            lat_max,
            lon_min,
            lon_max,
        };
        b.validate()?;
        Ok(b)
    }

    pub(crate) fn validate(&self) -> Result<()> {
        let finite = [self.lat_min, self.lat_max, self.lon_min, self.lon_max]
            .iter()
            .all(|v| v.is_finite());
        if !finite || self.lat_min >= self.lat_max || self.lon_min >= self.lon_max {
            return Err(Error::InvalidGrid(format!("bounds not well ordered: {self:?}")));
        }
        Ok(())
    }

    /// Half-open containment test used for pixel-centre membership.
    #[inline]
    pub fn contains(&self, lat: f64, lon: f64) -> bool {
        lat >= self.lat_min && lat < self.lat_max && lon >= self.lon_min && lon < self.lon_max
    }
}

#[derive(Deserialize)]
struct RawGridSpec {
    lat_min: f64,
    lat_max: f64,
    lon_min: f64,
    lon_max: f64,
    resolution: f64,
    #[serde(default)]
    shape_override: Option<(usize, usize)>,
}

impl TryFrom<RawGridSpec> for GridSpec {
    type Error = Error;

    fn try_from(r: RawGridSpec) -> Result<Self> {
        GridSpec::new(r.lat_min, r.lat_max, r.lon_min, r.lon_max, r.resolution, r.shape_override)
    }
}

/// A regular lat/lon grid.
///
/// The nominal shape is derived by floor arithmetic on the extent. An explicit
/// `shape_override` takes precedence, which lets grids whose published array
/// size disagrees with the arithmetic (27×31 over a 30°×35° box) be expressed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawGridSpec")]
pub struct GridSpec {
    lat_min: f64,
    lat_max: f64,
    lon_min: f64,
    lon_max: f64,
    resolution: f64,
    shape_override: Option<(usize, usize)>,
}

impl GridSpec {
    pub fn new(
        lat_min: f64,
        lat_max: f64,
        lon_min: f64,
        lon_max: f64,
        resolution: f64,
        shape_override: Option<(usize, usize)>,
    ) -> Result<Self> {
        LatLonBox {
            lat_min,
            lat_max,
            lon_min,
            lon_max,
        }
        .validate()?;
        if !(resolution > 0.0 && resolution.is_finite()) {
            return Err(Error::InvalidGrid(format!("resolution must be positive, got {resolution}")));
        }
        if let Some((r, c)) = shape_override {
            if r == 0 || c == 0 {
                return Err(Error::InvalidGrid(format!("shape override ({r}, {c}) must be positive")));
            }
        }
        let spec = GridSpec {
            lat_min,
            lat_max,
            lon_min,
            lon_max,
            resolution,
            shape_override,
        };
        let (r, c) = spec.derived_shape();
        if shape_override.is_none() && (r == 0 || c == 0) {
            return Err(Error::InvalidGrid("extent is smaller than one cell".into()));
        }
        Ok(spec)
    }

    /// North America summer domain: lat 20..55, lon −125..−70 at 1°, 31×49 array.
    pub fn north_america() -> Self {
        GridSpec::new(20.0, 55.0, -125.0, -70.0, 1.0, Some((31, 49))).expect("valid preset")
    }

    /// Europe domain: lat 35..65, lon −10..25 at 1°, 27×31 array.
    pub fn europe() -> Self {
        GridSpec::new(35.0, 65.0, -10.0, 25.0, 1.0, Some((27, 31))).expect("valid preset")
    }

    pub fn lat_min(&self) -> f64 {
        self.lat_min
    }
    pub fn lat_max(&self) -> f64 {
        self.lat_max
    }
    pub fn lon_min(&self) -> f64 {
        self.lon_min
    }
    pub fn lon_max(&self) -> f64 {
        self.lon_max
    }
    pub fn resolution(&self) -> f64 {
        self.resolution
    }
    pub fn shape_override(&self) -> Option<(usize, usize)> {
        self.shape_override
    }

    pub fn bounds(&self) -> LatLonBox {
        LatLonBox {
            lat_min: self.lat_min,
            lat_max: self.lat_max,
            lon_min: self.lon_min,
            lon_max: self.lon_max,
        }
    }

    fn derived_shape(&self) -> (usize, usize) {
        let rows = snapped_floor((self.lat_max - self.lat_min) / self.resolution);
        let cols = snapped_floor((self.lon_max - self.lon_min) / self.resolution);
        (rows.max(0.0) as usize, cols.max(0.0) as usize)
    }

    /// `(rows, cols)`: the override when present, else the floor-derived shape.
    pub fn shape(&self) -> (usize, usize) {
        self.shape_override.unwrap_or_else(|| self.derived_shape())
    }

    pub fn rows(&self) -> usize {
        self.shape().0
    }

    pub fn cols(&self) -> usize {
        self.shape().1
    }

    pub fn n_cells(&self) -> usize {
        let (r, c) = self.shape();
        r * c
    }

    /// Half-open binning of a point into `(row, col)`.
    pub fn cell_index(&self, lat: f64, lon: f64) -> Result<(usize, usize)> {
        if !self.bounds().contains(lat, lon) {
            return Err(Error::OutOfDomain { lat, lon });
        }
        let (dr, dc) = self.derived_shape();
        // Points strictly inside the bounds never land past the last derived cell.
        let row = (((lat - self.lat_min) / self.resolution).floor() as usize).min(dr.max(1) - 1);
        let col = (((lon - self.lon_min) / self.resolution).floor() as usize).min(dc.max(1) - 1);
        let (rows, cols) = self.shape();
        if row >= rows || col >= cols {
            return Err(Error::OutOfDomain { lat, lon });
        }
        Ok((row, col))
    }

    /// Geographic box of a cell.
    pub fn cell_bounds(&self, row: usize, col: usize) -> LatLonBox {
        let res = self.resolution;
        LatLonBox {
            lat_min: self.lat_min + row as f64 * res,
            lat_max: self.lat_min + (row + 1) as f64 * res,
            lon_min: self.lon_min + col as f64 * res,
            lon_max: self.lon_min + (col + 1) as f64 * res,
        }
    }

    pub fn cell_center(&self, row: usize, col: usize) -> (f64, f64) {
        let b = self.cell_bounds(row, col);
        (0.5 * (b.lat_min + b.lat_max), 0.5 * (b.lon_min + b.lon_max))
    }
}

/// Shape `(rows, cols)` of a grid.
pub fn grid_shape(spec: &GridSpec) -> (usize, usize) {
    spec.shape()
}

/// Multi-channel field `[C × rows × cols]` for one day.
#[derive(Debug, Clone, PartialEq)]
pub struct GridStack {
    spec: GridSpec,
    channels: Vec<String>,
    data: Vec<f64>,
    date: NaiveDate,
}

impl GridStack {
    pub fn new(spec: GridSpec, channels: Vec<String>, data: Vec<f64>, date: NaiveDate) -> Result<Self> {
        let expected = channels.len() * spec.n_cells();
        if data.len() != expected {
            return Err(Error::ShapeMismatch(format!(
                "{} channels on a {:?} grid need {expected} values, got {}",
                channels.len(),
                spec.shape(),
                data.len()
            )));
        }
        let mut seen = HashSet::new();
        for name in &channels {
            if !seen.insert(name.as_str()) {
                return Err(Error::InvalidConfig(format!("duplicate channel name {name:?}")));
            }
        }
        Ok(GridStack {
            spec,
            channels,
            data,
            date,
        })
    }

    pub fn spec(&self) -> &GridSpec {
        &self.spec
    }
    pub fn channels(&self) -> &[String] {
        &self.channels
    }
    pub fn n_channels(&self) -> usize {
        self.channels.len()
    }
    pub fn date(&self) -> NaiveDate {
        self.date
    }
    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn channel(&self, c: usize) -> &[f64] {
        let n = self.spec.n_cells();
        &self.data[c * n..(c + 1) * n]
    }

    pub fn get(&self, c: usize, row: usize, col: usize) -> f64 {
        let (rows, cols) = self.spec.shape();
        self.data[(c * rows + row) * cols + col]
    }

    /// Feature vector of one pixel across all channels.
    pub fn pixel(&self, row: usize, col: usize) -> Vec<f64> {
        let n = self.spec.n_cells();
        let idx = row * self.spec.cols() + col;
        (0..self.n_channels()).map(|c| self.data[c * n + idx]).collect()
    }

    /// Same data tagged with another date.
    pub fn with_date(&self, date: NaiveDate) -> Self {
        GridStack {
            date,
            ..self.clone()
        }
    }

    /// Keep only the leading `n` channels.
    pub fn truncate_channels(&self, n: usize) -> Result<Self> {
        if n > self.n_channels() {
            return Err(Error::ChannelCountMismatch {
                expected: n,
                found: self.n_channels(),
            });
        }
        let cells = self.spec.n_cells();
        GridStack::new(
            self.spec.clone(),
            self.channels[..n].to_vec(),
            self.data[..n * cells].to_vec(),
            self.date,
        )
    }

    /// Append the channels of `other` (same grid) after this stack's channels.
    pub fn concat(&self, other: &GridStack) -> Result<Self> {
        if other.spec != self.spec {
            return Err(Error::ShapeMismatch("stacks are on different grids".into()));
        }
        let mut channels = self.channels.clone();
        channels.extend(other.channels.iter().cloned());
        let mut data = self.data.clone();
        data.extend_from_slice(&other.data);
        GridStack::new(self.spec.clone(), channels, data, self.date)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let header = StackHeader {
            spec: self.spec.clone(),
            channels: self.channels.clone(),
            date: self.date,
            dtype: "f32".into(),
            layout: "C-row-major".into(),
        };
        container::write(path, &header, &container::f32_bytes(self.data.iter().copied()))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let (h, payload): (StackHeader, _) = container::read(path)?;
        container::check_tag(path, "dtype", &h.dtype, "f32")?;
        container::check_tag(path, "layout", &h.layout, "C-row-major")?;
        let data = container::f32_values(path, &payload, h.channels.len() * h.spec.n_cells())?;
        GridStack::new(h.spec, h.channels, data, h.date)
    }
}

#[derive(Serialize, Deserialize)]
struct StackHeader {
    spec: GridSpec,
    channels: Vec<String>,
    date: NaiveDate,
    dtype: String,
    layout: String,
}

/// Single-channel field with a validity mask (`true` = observed). Values under
/// a false mask carry no meaning and are ignored by every consumer.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskedField {
    spec: GridSpec,
    values: Vec<f64>,
    mask: Vec<bool>,
}

impl MaskedField {
    pub fn new(spec: GridSpec, values: Vec<f64>, mask: Vec<bool>) -> Result<Self> {
        let n = spec.n_cells();
        if values.len() != n || mask.len() != n {
            return Err(Error::ShapeMismatch(format!(
                "grid has {n} cells, got {} values and {} mask entries",
                values.len(),
                mask.len()
            )));
        }
        Ok(MaskedField { spec, values, mask })
    }

    /// Fully observed field.
    pub fn dense(spec: GridSpec, values: Vec<f64>) -> Result<Self> {
        let n = values.len();
        MaskedField::new(spec, values, vec![true; n])
    }

    /// Field with no valid cells.
    pub fn empty(spec: GridSpec) -> Self {
        let n = spec.n_cells();
        MaskedField {
            spec,
            values: vec![0.0; n],
            mask: vec![false; n],
        }
    }

    pub fn spec(&self) -> &GridSpec {
        &self.spec
    }
    pub fn values(&self) -> &[f64] {
        &self.values
    }
    pub fn mask(&self) -> &[bool] {
        &self.mask
    }

    pub fn n_valid(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }

    /// `(flat index, value)` of every valid cell in row-major order.
    pub fn valid(&self) -> impl Iterator<Item = (usize, f64)> + '_ {
        self.mask
            .iter()
            .zip(&self.values)
            .enumerate()
            .filter(|(_, (m, _))| **m)
            .map(|(i, (_, v))| (i, *v))
    }

    pub fn get(&self, row: usize, col: usize) -> Option<f64> {
        let i = row * self.spec.cols() + col;
        self.mask[i].then_some(self.values[i])
    }

    pub fn write(&self, path: &Path, date: Option<NaiveDate>) -> Result<()> {
        let header = FieldHeader {
            spec: self.spec.clone(),
            date,
            units: "ppb".into(),
            dtype: "f32".into(),
            mask_dtype: "u8".into(),
            layout: "row-major".into(),
        };
        let mut payload = container::f32_bytes(self.values.iter().copied());
        payload.extend(self.mask.iter().map(|&m| m as u8));
        container::write(path, &header, &payload)
    }

    /// Reads a field and the optional date recorded in its header.
    pub fn read(path: &Path) -> Result<(Self, Option<NaiveDate>)> {
        let (h, payload): (FieldHeader, _) = container::read(path)?;
        container::check_tag(path, "dtype", &h.dtype, "f32")?;
        container::check_tag(path, "mask_dtype", &h.mask_dtype, "u8")?;
        let n = h.spec.n_cells();
        if payload.len() != n * 5 {
            return Err(Error::format(path, format!("payload has {} bytes, expected {}", payload.len(), n * 5)));
        }
        let values = container::f32_values(path, &payload[..n * 4], n)?;
        let mask = payload[n * 4..]
            .iter()
            .map(|&b| match b {
                0 => Ok(false),
                1 => Ok(true),
                other => Err(Error::format(path, format!("mask byte {other} is not 0 or 1"))),
            })
            .collect::<Result<Vec<_>>>()?;
        Ok((MaskedField::new(h.spec, values, mask)?, h.date))
    }
}

#[derive(Serialize, Deserialize)]
struct FieldHeader {
    spec: GridSpec,
    date: Option<NaiveDate>,
    units: String,
    dtype: String,
    mask_dtype: String,
    layout: String,
}

/// Standard deviations below this are replaced by 1.
pub const NORM_EPSILON: f64 = 1e-8;

/// Per-channel z-score statistics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub channels: Vec<String>,
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
    pub epsilon: f64,
}

impl NormStats {
    /// Population mean and standard deviation over every pixel of every stack.
    pub fn fit(stacks: &[GridStack]) -> Result<Self> {
        let first = stacks.first().ok_or(Error::EmptyInput("no stacks to fit a normalizer"))?;
        for s in stacks {
            if s.channels != first.channels {
                return Err(Error::ChannelMismatch {
                    expected: first.channels.clone(),
                    found: s.channels.clone(),
                });
            }
        }
        let n_ch = first.n_channels();
        let mut mean = Vec::with_capacity(n_ch);
        let mut std = Vec::with_capacity(n_ch);
        for c in 0..n_ch {
            let count: usize = stacks.iter().map(|s| s.channel(c).len()).sum();
            let m = stacks.iter().flat_map(|s| s.channel(c)).sum::<f64>() / count as f64;
            let var = stacks
                .iter()
                .flat_map(|s| s.channel(c))
                .map(|v| (v - m) * (v - m))
                .sum::<f64>()
                / count as f64;
            let sd = var.sqrt();
            mean.push(m);
            std.push(if sd < NORM_EPSILON { 1.0 } else { sd });
        }
        Ok(NormStats {
            channels: first.channels.clone(),
            mean,
            std,
            epsilon: NORM_EPSILON,
        })
    }

    pub fn apply(&self, stack: &GridStack) -> Result<GridStack> {
        if stack.channels != self.channels {
            return Err(Error::ChannelMismatch {
                expected: self.channels.clone(),
                found: stack.channels.clone(),
            });
        }
        let n = stack.spec.n_cells();
        let data = stack
            .data
            .chunks(n)
            .enumerate()
            .flat_map(|(c, chan)| {
                let (m, s) = (self.mean[c], self.std[c]);
                chan.iter().map(move |v| (v - m) / s)
            })
            .collect();
        GridStack::new(stack.spec.clone(), stack.channels.clone(), data, stack.date)
    }
}

pub fn fit_normalizer(train_stacks: &[GridStack]) -> Result<NormStats> {
    NormStats::fit(train_stacks)
}

pub fn apply_normalizer(stats: &NormStats, stack: &GridStack) -> Result<GridStack> {
    stats.apply(stack)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn na() -> GridSpec {
        GridSpec::new(20.0, 55.0, -125.0, -70.0, 1.0, None).unwrap()
    }

    fn day() -> NaiveDate {
        NaiveDate::from_ymd_opt(2016, 7, 1).unwrap()
    }

    fn one_channel(values: Vec<f64>) -> GridStack {
        let spec = GridSpec::new(0.0, 1.0, 0.0, values.len() as f64, 1.0, None).unwrap();
        GridStack::new(spec, vec!["x".into()], values, day()).unwrap()
    }

    #[test]
    fn shapes() {
        assert_eq!(grid_shape(&na()), (35, 55));
        assert_eq!(grid_shape(&GridSpec::europe()), (27, 31));
        assert_eq!(grid_shape(&GridSpec::north_america()), (31, 49));
        assert_eq!(grid_shape(&GridSpec::new(0.0, 1.0, 0.0, 1.0, 1.0, None).unwrap()), (1, 1));
        assert_eq!(GridSpec::new(0.0, 1.0, 0.0, 1.0, 0.1, None).unwrap().shape(), (10, 10));
    }

    #[test]
    fn invalid_specs() {
        assert!(GridSpec::new(1.0, 0.0, 0.0, 1.0, 1.0, None).is_err());
        assert!(GridSpec::new(0.0, 1.0, 0.0, 1.0, 0.0, None).is_err());
        assert!(GridSpec::new(0.0, 1.0, 0.0, 1.0, 1.0, Some((0, 3))).is_err());
        assert!(GridSpec::new(0.0, 0.5, 0.0, 1.0, 1.0, None).is_err());
        let bad = r#"{"lat_min":5,"lat_max":1,"lon_min":0,"lon_max":1,"resolution":1}"#;
        assert!(serde_json::from_str::<GridSpec>(bad).is_err());
    }

    #[test]
    fn cell_index_examples() {
        let s = na();
        assert_eq!(s.cell_index(20.5, -124.5).unwrap(), (0, 0));
        assert_eq!(s.cell_index(54.9, -70.1).unwrap(), (34, 54));
        assert!(matches!(s.cell_index(10.0, -100.0), Err(Error::OutOfDomain { .. })));
        assert!(s.cell_index(55.0, -100.0).is_err());
        // Override smaller than the derived shape truncates the domain.
        let eu = GridSpec::europe();
        assert!(eu.cell_index(64.5, 0.0).is_err());
        assert_eq!(eu.cell_index(35.0, -10.0).unwrap(), (0, 0));
    }

    #[test]
    fn normalizer_examples() {
        let st = NormStats::fit(&[one_channel(vec![1.0, 2.0, 3.0])]).unwrap();
        assert_eq!(st.mean[0], 2.0);
        assert!((st.std[0] - (2.0f64 / 3.0).sqrt()).abs() < 1e-15);
        assert!((st.std[0] - 0.8165).abs() < 1e-4);

        let out = st.apply(&one_channel(vec![2.0, 3.0, 1.0])).unwrap();
        assert_eq!(out.data()[0], 0.0);
        assert!((out.data()[1] - 1.224744871391589).abs() < 1e-12);

        let constant = NormStats::fit(&[one_channel(vec![7.0; 4])]).unwrap();
        assert_eq!(constant.mean[0], 7.0);
        assert_eq!(constant.std[0], 1.0);

        let identity = NormStats {
            channels: vec!["x".into()],
            mean: vec![0.0],
            std: vec![1.0],
            epsilon: NORM_EPSILON,
        };
        let s = one_channel(vec![-1.5, 0.25, 9.0]);
        assert_eq!(identity.apply(&s).unwrap(), s);

        let z = one_channel(vec![-1.0, 1.0, -1.0, 1.0]);
        let st = NormStats::fit(&[z]).unwrap();
        assert!(st.mean[0].abs() < 1e-15 && (st.std[0] - 1.0).abs() < 1e-15);
    }

    #[test]
    fn normalizer_errors() {
        assert!(matches!(NormStats::fit(&[]), Err(Error::EmptyInput(_))));
        let st = NormStats::fit(&[one_channel(vec![1.0, 2.0])]).unwrap();
        let spec = GridSpec::new(0.0, 1.0, 0.0, 2.0, 1.0, None).unwrap();
        let other = GridStack::new(spec, vec!["y".into()], vec![1.0, 2.0], day()).unwrap();
        assert!(matches!(st.apply(&other), Err(Error::ChannelMismatch { .. })));
    }

    #[test]
    fn duplicate_channel_names_rejected() {
        let spec = GridSpec::new(0.0, 1.0, 0.0, 1.0, 1.0, None).unwrap();
        assert!(GridStack::new(spec, vec!["a".into(), "a".into()], vec![0.0, 0.0], day()).is_err());
    }

    #[test]
    fn masked_field_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("f.mfield");
        let spec = GridSpec::new(0.0, 2.0, 0.0, 2.0, 1.0, None).unwrap();
        let f = MaskedField::new(spec, vec![1.5, -2.0, 0.0, 7.25], vec![true, false, true, true]).unwrap();
        f.write(&p, Some(day())).unwrap();
        let (g, d) = MaskedField::read(&p).unwrap();
        assert_eq!(f, g);
        assert_eq!(d, Some(day()));
    }

    #[test]
    fn truncated_payload_is_a_format_error() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("s.gstack");
        one_channel(vec![1.0, 2.0, 3.0]).write(&p).unwrap();
        let mut bytes = std::fs::read(&p).unwrap();
        bytes.pop();
        std::fs::write(&p, bytes).unwrap();
        assert!(matches!(GridStack::read(&p), Err(Error::Format { .. })));
    }

    proptest! {
        #[test]
        fn derived_shape_is_exact_floor(
            lat0 in -90i64..80, dlat in 1i64..400,
            lon0 in -180i64..170, dlon in 1i64..400,
            den in prop::sample::select(vec![1i64, 2, 4, 5, 8, 10, 20]),
            res_num in 1i64..8,
        ) {
            // Bounds are multiples of 1/den, resolution is res_num/den.
            let den_f = den as f64;
            let spec = GridSpec::new(
                lat0 as f64 / den_f, (lat0 + dlat) as f64 / den_f,
                lon0 as f64 / den_f, (lon0 + dlon) as f64 / den_f,
                res_num as f64 / den_f, None,
            );
            let (er, ec) = ((dlat / res_num) as usize, (dlon / res_num) as usize);
            if er == 0 || ec == 0 {
                prop_assert!(spec.is_err());
            } else {
                prop_assert_eq!(spec.unwrap().shape(), (er, ec));
            }
        }

        #[test]
        fn cell_index_total_on_domain(fy in 0.0f64..1.0, fx in 0.0f64..1.0) {
            let s = na();
            let lat = s.lat_min() + fy * (s.lat_max() - s.lat_min());
            let lon = s.lon_min() + fx * (s.lon_max() - s.lon_min());
            prop_assume!(lat < s.lat_max() && lon < s.lon_max());
            let (r, c) = s.cell_index(lat, lon).unwrap();
            prop_assert!(r < s.rows() && c < s.cols());
            prop_assert!(s.cell_bounds(r, c).contains(lat, lon) || (lat - s.cell_bounds(r, c).lat_max).abs() < 1e-9);
        }

        #[test]
        fn fit_apply_refit(values in prop::collection::vec(-1e3f64..1e3, 4..64), scale in 0.1f64..100.0) {
            let vals: Vec<f64> = values.iter().map(|v| v * scale).collect();
            let s = one_channel(vals);
            let st = NormStats::fit(std::slice::from_ref(&s)).unwrap();
            prop_assume!(st.std[0] > 1e-3);
            let z = st.apply(&s).unwrap();
            let re = NormStats::fit(&[z]).unwrap();
            prop_assert!(re.mean[0].abs() < 1e-10);
            prop_assert!((re.std[0] - 1.0).abs() < 1e-10);
        }

        #[test]
        fn gstack_roundtrip_bit_exact(values in prop::collection::vec(any::<f32>().prop_filter("finite", |v| v.is_finite()), 6)) {
            let spec = GridSpec::new(0.0, 2.0, 0.0, 3.0, 1.0, None).unwrap();
            let data: Vec<f64> = values.iter().map(|&v| v as f64).collect();
            let s = GridStack::new(spec, vec!["a".into()], data, day()).unwrap();
            let dir = tempfile::tempdir().unwrap();
            let p = dir.path().join("s.gstack");
            s.write(&p).unwrap();
            let back = GridStack::read(&p).unwrap();
            prop_assert_eq!(back.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
                            s.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>());
            prop_assert_eq!(&back, &s);
        }
    }
}

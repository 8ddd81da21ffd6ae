//! Zonal statistics: aggregate high-resolution land-cover and population
//! rasters onto grid cells.
//!
//! A raster pixel belongs to a cell when its centre lies in the cell's
//! half-open box. No area weighting is applied.

use std::path::Path;

use chrono::NaiveDate;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::container;
use crate::error::{Error, Result};
use crate::grid::{GridSpec, GridStack, LatLonBox};

#[derive(Debug, Clone, PartialEq)]
pub enum RasterData {
    /// Land-cover class codes.
    Categorical(Vec<u8>),
    /// Continuous values such as population density.
    Continuous(Vec<f32>),
}

/// Georeferenced raster. Row 0 is the southern edge, column 0 the western edge.
#[derive(Debug, Clone, PartialEq)]
pub struct Raster {
    bounds: LatLonBox,
    rows: usize,
    cols: usize,
    data: RasterData,
}

impl Raster {
    pub fn new(bounds: LatLonBox, rows: usize, cols: usize, data: RasterData) -> Result<Self> {
        bounds.validate()?;
        if rows == 0 || cols == 0 {
            return Err(Error::InvalidRaster("raster must have at least one pixel".into()));
        }
        let len = match &data {
            RasterData::Categorical(v) => v.len(),
            RasterData::Continuous(v) => {
                if v.iter().any(|x| !x.is_finite()) {
                    return Err(Error::InvalidRaster("continuous raster contains non-finite values".into()));
                }
                v.len()
            }
        };
        if len != rows * cols {
            return Err(Error::InvalidRaster(format!(
                "{rows}x{cols} raster needs {} values, got {len}",
                rows * cols
            )));
        }
        Ok(Raster {
            bounds,
            rows,
            cols,
            data,
        })
    }

    pub fn bounds(&self) -> LatLonBox {
        self.bounds
    }
    pub fn rows(&self) -> usize {
        self.rows
    }
    pub fn cols(&self) -> usize {
        self.cols
    }
    pub fn data(&self) -> &RasterData {
        &self.data
    }

    pub fn pixel_height(&self) -> f64 {
        (self.bounds.lat_max - self.bounds.lat_min) / self.rows as f64
    }

    pub fn pixel_width(&self) -> f64 {
        (self.bounds.lon_max - self.bounds.lon_min) / self.cols as f64
    }

    pub fn center_lat(&self, row: usize) -> f64 {
        self.bounds.lat_min + (row as f64 + 0.5) * self.pixel_height()
    }

    pub fn center_lon(&self, col: usize) -> f64 {
        self.bounds.lon_min + (col as f64 + 0.5) * self.pixel_width()
    }

    /// Row-major indices of pixels whose centres fall inside `cell`.
    pub fn pixels_in(&self, cell: &LatLonBox) -> Vec<usize> {
        let rows = axis_range(self.bounds.lat_min, self.pixel_height(), self.rows, cell.lat_min, cell.lat_max);
        let cols = axis_range(self.bounds.lon_min, self.pixel_width(), self.cols, cell.lon_min, cell.lon_max);
        let cols: Vec<usize> = cols.filter(|&j| {
            let lon = self.center_lon(j);
            lon >= cell.lon_min && lon < cell.lon_max
        })
        .collect();
        let mut out = Vec::new();
        for i in rows {
            let lat = self.center_lat(i);
            if lat >= cell.lat_min && lat < cell.lat_max {
                out.extend(cols.iter().map(|&j| i * self.cols + j));
            }
        }
        out
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let (kind, dtype, payload) = match &self.data {
            RasterData::Categorical(v) => ("categorical", "u8", v.clone()),
            RasterData::Continuous(v) => (
                "continuous",
                "f32",
                v.iter().flat_map(|x| x.to_le_bytes()).collect(),
            ),
        };
        let header = RasterHeader {
            kind: kind.into(),
            bounds: self.bounds,
            rows: self.rows,
            cols: self.cols,
            dtype: dtype.into(),
        };
        container::write(path, &header, &payload)
    }

    pub fn read(path: &Path) -> Result<Self> {
        let (h, payload): (RasterHeader, Vec<u8>) = container::read(path)?;
        let n = h.rows * h.cols;
        let data = match (h.kind.as_str(), h.dtype.as_str()) {
            ("categorical", "u8") => {
                if payload.len() != n {
                    return Err(Error::format(path, format!("payload has {} bytes, expected {n}", payload.len())));
                }
                RasterData::Categorical(payload)
            }
            ("continuous", "f32") => {
                if payload.len() != n * 4 {
                    return Err(Error::format(path, format!("payload has {} bytes, expected {}", payload.len(), n * 4)));
                }
                RasterData::Continuous(
                    payload
                        .chunks_exact(4)
                        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                        .collect(),
                )
            }
            (k, d) => return Err(Error::format(path, format!("unsupported kind/dtype {k}/{d}"))),
        };
        Raster::new(h.bounds, h.rows, h.cols, data)
    }
}

/// Candidate pixel indices along one axis, padded by one on each side so the
/// exact centre test can be applied afterwards.
fn axis_range(origin: f64, step: f64, n: usize, lo: f64, hi: f64) -> std::ops::Range<usize> {
    let first = ((lo - origin) / step - 0.5).floor() - 1.0;
    let last = ((hi - origin) / step - 0.5).ceil() + 1.0;
    let first = first.clamp(0.0, n as f64) as usize;
    let last = (last + 1.0).clamp(0.0, n as f64) as usize;
    first..last
}

#[derive(Serialize, Deserialize)]
struct RasterHeader {
    kind: String,
    bounds: LatLonBox,
    rows: usize,
    cols: usize,
    dtype: String,
}

/// Ordered set of valid land-cover class codes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassSet {
    codes: Vec<u8>,
}

impl ClassSet {
    pub fn new(codes: Vec<u8>) -> Result<Self> {
        if codes.is_empty() {
            return Err(Error::InvalidConfig("class set is empty".into()));
        }
        let mut seen = [false; 256];
        for &c in &codes {
            if std::mem::replace(&mut seen[c as usize], true) {
                return Err(Error::InvalidConfig(format!("class code {c} listed twice")));
            }
        }
        Ok(ClassSet { codes })
    }

    pub fn codes(&self) -> &[u8] {
        &self.codes
    }

    pub fn len(&self) -> usize {
        self.codes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.codes.is_empty()
    }

    fn lookup(&self) -> [Option<usize>; 256] {
        let mut table = [None; 256];
        for (i, &c) in self.codes.iter().enumerate() {
            table[c as usize] = Some(i);
        }
        table
    }
}

impl Default for ClassSet {
    /// The 17 land-cover classes, codes 1..=17.
    fn default() -> Self {
        ClassSet {
            codes: (1..=17).collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CategoricalStats {
    pub mode: u8,
    pub variance: f64,
    /// Fraction of pixels per class, in class-set order.
    pub coverage: Vec<f64>,
    pub count: usize,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ContinuousStats {
    pub variance: f64,
    pub max: f64,
    pub min: f64,
    pub mean: f64,
    pub count: usize,
}

fn categorical_from_pixels(codes: &[u8], pixels: &[usize], classes: &ClassSet) -> Result<CategoricalStats> {
    if pixels.is_empty() {
        return Err(Error::EmptyCell);
    }
    let table = classes.lookup();
    let mut counts = vec![0usize; classes.len()];
    for &p in pixels {
        let code = codes[p];
        let k = table[code as usize].ok_or(Error::UnknownClass(code))?;
        counts[k] += 1;
    }
    let n = pixels.len() as f64;
    let (mut mode, mut best) = (u8::MAX, 0usize);
    for (&code, &cnt) in classes.codes().iter().zip(&counts) {
        if cnt > best || (cnt == best && cnt > 0 && code < mode) {
            mode = code;
            best = cnt;
        }
    }
    let mean = classes
        .codes()
        .iter()
        .zip(&counts)
        .map(|(&c, &k)| c as f64 * k as f64)
        .sum::<f64>()
        / n;
    let variance = classes
        .codes()
        .iter()
        .zip(&counts)
        .map(|(&c, &k)| k as f64 * (c as f64 - mean).powi(2))
        .sum::<f64>()
        / n;
    Ok(CategoricalStats {
        mode,
        variance,
        coverage: counts.iter().map(|&k| k as f64 / n).collect(),
        count: pixels.len(),
    })
}

fn continuous_from_pixels(values: &[f32], pixels: &[usize]) -> Result<ContinuousStats> {
    if pixels.is_empty() {
        return Err(Error::EmptyCell);
    }
    let n = pixels.len() as f64;
    let (mut min, mut max, mut sum) = (f64::INFINITY, f64::NEG_INFINITY, 0.0);
    for &p in pixels {
        let v = values[p] as f64;
        min = min.min(v);
        max = max.max(v);
        sum += v;
    }
    let mean = sum / n;
    let variance = pixels
        .iter()
        .map(|&p| (values[p] as f64 - mean).powi(2))
        .sum::<f64>()
        / n;
    Ok(ContinuousStats {
        variance,
        max,
        min,
        mean,
        count: pixels.len(),
    })
}

/// Mode (ties to the smallest code), population variance of the class codes,
/// and per-class coverage fractions for one cell.
pub fn categorical_cell_stats(raster: &Raster, cell: &LatLonBox, classes: &ClassSet) -> Result<CategoricalStats> {
    let RasterData::Categorical(codes) = &raster.data else {
        return Err(Error::InvalidRaster("expected a categorical raster".into()));
    };
    categorical_from_pixels(codes, &raster.pixels_in(cell), classes)
}

/// Population variance, max, min and mean of a continuous raster over one cell.
pub fn continuous_cell_stats(raster: &Raster, cell: &LatLonBox) -> Result<ContinuousStats> {
    let RasterData::Continuous(values) = &raster.data else {
        return Err(Error::InvalidRaster("expected a continuous raster".into()));
    };
    continuous_from_pixels(values, &raster.pixels_in(cell))
}

#[derive(Debug, Clone)]
pub struct ExtractOptions {
    /// Written into every channel of a cell that no pixel centre falls in.
    pub fill_value: f64,
    /// Date tag of the produced stack (land use is a yearly product).
    pub date: NaiveDate,
}

impl Default for ExtractOptions {
    fn default() -> Self {
        ExtractOptions {
            fill_value: 0.0,
            date: NaiveDate::from_ymd_opt(2016, 1, 1).expect("valid date"),
        }
    }
}

/// Cells that received the fill value.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CoverageReport {
    pub empty_landcover_cells: Vec<(usize, usize)>,
    pub empty_population_cells: Vec<(usize, usize)>,
}

#[derive(Debug, Clone)]
pub struct LanduseExtraction {
    pub stack: GridStack,
    pub report: CoverageReport,
}

/// Channel names of the land-use stack for a class set.
pub fn landuse_channel_names(classes: &ClassSet) -> Vec<String> {
    let mut names: Vec<String> = classes.codes().iter().map(|c| format!("lc_cover_{c:02}")).collect();
    names.extend(
        ["lc_mode", "lc_variance", "pop_variance", "pop_max", "pop_min", "pop_mean"]
            .iter()
            .map(|s| s.to_string()),
    );
    names
}

/// Aggregates a land-cover raster and a population raster onto `spec`.
///
/// Channels: one coverage fraction per class, land-cover mode and variance,
/// then population variance, max, min and mean. With the default 17 classes
/// this is 23 channels.
pub fn build_landuse_stack(
    landcover: &Raster,
    population: &Raster,
    spec: &GridSpec,
    classes: &ClassSet,
    opts: &ExtractOptions,
) -> Result<LanduseExtraction> {
    let RasterData::Categorical(codes) = &landcover.data else {
        return Err(Error::InvalidRaster("land-cover raster must be categorical".into()));
    };
    let RasterData::Continuous(pop) = &population.data else {
        return Err(Error::InvalidRaster("population raster must be continuous".into()));
    };
    let (rows, cols) = spec.shape();
    let n_cells = rows * cols;
    let n_ch = classes.len() + 6;

    let per_cell: Vec<(Vec<f64>, bool, bool)> = (0..n_cells)
        .into_par_iter()
        .map(|idx| {
            let cell = spec.cell_bounds(idx / cols, idx % cols);
            let mut out = vec![opts.fill_value; n_ch];
            let lc = match categorical_from_pixels(codes, &landcover.pixels_in(&cell), classes) {
                Ok(s) => {
                    out[..classes.len()].copy_from_slice(&s.coverage);
                    out[classes.len()] = s.mode as f64;
                    out[classes.len() + 1] = s.variance;
                    true
                }
                Err(Error::EmptyCell) => false,
                Err(e) => return Err(e),
            };
            let pp = match continuous_from_pixels(pop, &population.pixels_in(&cell)) {
                Ok(s) => {
                    let k = classes.len() + 2;
                    out[k..k + 4].copy_from_slice(&[s.variance, s.max, s.min, s.mean]);
                    true
                }
                Err(Error::EmptyCell) => false,
                Err(e) => return Err(e),
            };
            Ok((out, lc, pp))
        })
        .collect::<Result<_>>()?;

    let mut data = vec![0.0; n_ch * n_cells];
    let mut report = CoverageReport::default();
    for (idx, (vals, lc, pp)) in per_cell.into_iter().enumerate() {
        for (c, v) in vals.into_iter().enumerate() {
            data[c * n_cells + idx] = v;
        }
        if !lc {
            report.empty_landcover_cells.push((idx / cols, idx % cols));
        }
        if !pp {
            report.empty_population_cells.push((idx / cols, idx % cols));
        }
    }
    let stack = GridStack::new(spec.clone(), landuse_channel_names(classes), data, opts.date)?;
    Ok(LanduseExtraction { stack, report })
}

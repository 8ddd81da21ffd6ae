//! Seeded synthetic data with a known bias function.
//!
//! Inputs are smooth random fields (sums of low-frequency sinusoids), except
//! one "transported" channel that is white noise. The true bias is
//!
//! ```text
//! b = a_lin·x_lin + a_prod·x_p·x_q + a_sat·σ(x_sat) + g
//! ```
//!
//! with defaults `a_lin = 3`, `a_prod = 2`, `a_sat = −4`, σ the logistic
//! function, and `g` the transported channel smoothed by a Gaussian kernel and
//! rescaled to standard deviation `g_amplitude`. `g` is a spatially correlated
//! Gaussian field that a per-pixel model can barely see but a convolutional
//! model can reconstruct from neighbouring pixels.

use std::f64::consts::PI;

use chrono::{Duration, NaiveDate};
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{GridSpec, GridStack, LatLonBox, MaskedField};
use crate::zonal::{build_landuse_stack, ClassSet, ExtractOptions, Raster, RasterData};

use super::{assemble, compute_bias, grid_observations, Dataset, Experiment, Observation, ObservationTable, MOMO_CHANNELS};

/// Channel roles in the bias function (indices into the chemistry channels).
pub const LINEAR_CHANNEL: usize = 5; // temperature
pub const PRODUCT_CHANNELS: (usize, usize) = (6, 3); // no2 · co
pub const SATURATING_CHANNEL: usize = 9; // surface_pressure
pub const TRANSPORTED_CHANNEL: usize = 12; // so2

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub seed: u64,
    pub spec: GridSpec,
    pub n_days: usize,
    pub n_stations: usize,
    pub experiment: Experiment,
    /// Year of the first summer; days fill consecutive summers from 1 June.
    pub start_year: i32,
    pub days_per_summer: usize,
    /// Standard deviation of every input field.
    pub field_scale: f64,
    pub n_waves: usize,
    /// Shortest and longest sinusoid wavelength, in cells.
    pub wavelength_range: (f64, f64),
    pub coef_linear: f64,
    pub coef_product: f64,
    pub coef_saturating: f64,
    pub g_amplitude: f64,
    /// Gaussian smoothing length of the transported term, in cells.
    pub g_length_scale: f64,
    /// Mean of the true (observed) ozone field, ppb.
    pub ozone_baseline: f64,
    /// Land-use raster pixels per grid cell along each axis.
    pub raster_oversample: usize,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            seed: 0,
            spec: GridSpec::europe(),
            n_days: 80,
            n_stations: 40,
            experiment: Experiment::ChemistryOnly,
            start_year: 2013,
            days_per_summer: 20,
            field_scale: 2.0,
            n_waves: 6,
            wavelength_range: (8.0, 40.0),
            coef_linear: 3.0,
            coef_product: 2.0,
            coef_saturating: -4.0,
            g_amplitude: 2.0,
            g_length_scale: 2.0,
            ozone_baseline: 40.0,
            raster_oversample: 4,
        }
    }
}

impl SynthConfig {
    /// Only the linear term: no product, saturating, or transported parts.
    pub fn linear_only(mut self) -> Self {
        self.coef_product = 0.0;
        self.coef_saturating = 0.0;
        self.g_amplitude = 0.0;
        self
    }

    fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if self.n_days == 0 || self.n_stations == 0 {
            return bad("n_days and n_stations must be at least 1".into());
        }
        if self.n_stations > self.spec.n_cells() {
            return bad(format!("{} stations do not fit in {} cells", self.n_stations, self.spec.n_cells()));
        }
        if self.days_per_summer == 0 || self.days_per_summer > 92 {
            return bad("days_per_summer must lie in 1..=92".into());
        }
        if self.n_waves == 0 || !positive(self.field_scale) || self.raster_oversample == 0 {
            return bad("n_waves, field_scale and raster_oversample must be positive".into());
        }
        let (lo, hi) = self.wavelength_range;
        if !(positive(lo) && hi >= lo) || !positive(self.g_length_scale) {
            return bad("wavelengths and g_length_scale must be positive".into());
        }
        Ok(())
    }

    pub fn date_of(&self, day: usize) -> NaiveDate {
        let year = self.start_year + (day / self.days_per_summer) as i32;
        let offset = (day % self.days_per_summer) as i64;
        NaiveDate::from_ymd_opt(year, 6, 1).expect("valid June date") + Duration::days(offset)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Station {
    pub id: String,
    pub lat: f64,
    pub lon: f64,
    pub row: usize,
    pub col: usize,
}

/// Everything needed to interpret a synthetic dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthDescription {
    pub config: SynthConfig,
    pub formula: String,
    pub linear_channel: String,
    pub product_channels: (String, String),
    pub saturating_channel: String,
    pub transported_channel: String,
    pub stations: Vec<Station>,
}

#[derive(Debug, Clone)]
pub struct SynthOutput {
    pub dataset: Dataset,
    pub description: SynthDescription,
    /// Chemistry-only input stacks, one per day.
    pub momo_stacks: Vec<GridStack>,
    /// Dense model ozone per day.
    pub model_o3: Vec<(NaiveDate, MaskedField)>,
    pub observations: ObservationTable,
    /// Dense true bias per day.
    pub true_bias: Vec<MaskedField>,
    pub landcover: Raster,
    pub population: Raster,
}

struct Wave {
    amp: f64,
    ky: f64,
    kx: f64,
    phase: f64,
}

fn smooth_field(rng: &mut ChaCha8Rng, cfg: &SynthConfig, rows: usize, cols: usize) -> Vec<f64> {
    let (lo, hi) = cfg.wavelength_range;
    let waves: Vec<Wave> = (0..cfg.n_waves)
        .map(|_| {
            let amp: f64 = StandardNormal.sample(rng);
            let wavelength = rng.random_range(lo..=hi);
            let dir = rng.random_range(0.0..2.0 * PI);
            let k = 2.0 * PI / wavelength;
            Wave {
                amp,
                ky: k * dir.sin(),
                kx: k * dir.cos(),
                phase: rng.random_range(0.0..2.0 * PI),
            }
        })
        .collect();
    let power: f64 = waves.iter().map(|w| w.amp * w.amp).sum::<f64>() / 2.0;
    let norm = cfg.field_scale / power.sqrt().max(1e-12);
    let mut out = Vec::with_capacity(rows * cols);
    for r in 0..rows {
        for c in 0..cols {
            let v: f64 = waves
                .iter()
                .map(|w| w.amp * (w.ky * r as f64 + w.kx * c as f64 + w.phase).sin())
                .sum();
            out.push(v * norm);
        }
    }
    out
}

/// Gaussian smoothing with zero padding, normalized so unit white noise maps
/// to unit variance away from the edges.
fn gaussian_smooth(x: &[f64], rows: usize, cols: usize, sigma: f64) -> Vec<f64> {
    let radius = (3.0 * sigma).ceil() as isize;
    let mut kernel = Vec::new();
    for dy in -radius..=radius {
        for dx in -radius..=radius {
            let d2 = (dy * dy + dx * dx) as f64;
            kernel.push((dy, dx, (-d2 / (2.0 * sigma * sigma)).exp()));
        }
    }
    let l2: f64 = kernel.iter().map(|k| k.2 * k.2).sum::<f64>().sqrt();
    let mut out = vec![0.0; rows * cols];
    for r in 0..rows as isize {
        for c in 0..cols as isize {
            let mut acc = 0.0;
            for &(dy, dx, w) in &kernel {
                let (y, xx) = (r + dy, c + dx);
                if y >= 0 && y < rows as isize && xx >= 0 && xx < cols as isize {
                    acc += w * x[(y as usize) * cols + xx as usize];
                }
            }
            out[r as usize * cols + c as usize] = acc / l2;
        }
    }
    out
}

/// False for NaN.
fn positive(v: f64) -> bool {
    v > 0.0
}

fn logistic(v: f64) -> f64 {
    1.0 / (1.0 + (-v).exp())
}

/// Rasters covering the grid's effective extent (rows × resolution).
fn synth_rasters(rng: &mut ChaCha8Rng, cfg: &SynthConfig) -> Result<(Raster, Raster)> {
    let spec = &cfg.spec;
    let (rows, cols) = spec.shape();
    let res = spec.resolution();
    let bounds = LatLonBox::new(
        spec.lat_min(),
        spec.lat_min() + rows as f64 * res,
        spec.lon_min(),
        spec.lon_min() + cols as f64 * res,
    )?;
    let k = cfg.raster_oversample;
    let (pr, pc) = (rows * k, cols * k);
    let fine = SynthConfig {
        wavelength_range: (cfg.wavelength_range.0 * k as f64, cfg.wavelength_range.1 * k as f64),
        field_scale: 1.0,
        ..cfg.clone()
    };
    let classes = ClassSet::default();
    let n_classes = classes.len() as f64;
    let class_field = smooth_field(rng, &fine, pr, pc);
    let codes = class_field
        .iter()
        .map(|&v| {
            // Map the roughly standard-normal field onto the class list, with
            // a little salt so neighbouring classes mix inside cells.
            let jitter: f64 = rng.random_range(-0.15..0.15);
            let u = logistic(1.7 * (v + jitter));
            classes.codes()[((u * n_classes) as usize).min(classes.len() - 1)]
        })
        .collect();
    let pop_field = smooth_field(rng, &fine, pr, pc);
    let pop = pop_field.iter().map(|&v| (3.0 + 1.5 * v).exp() as f32).collect();
    Ok((
        Raster::new(bounds, pr, pc, RasterData::Categorical(codes))?,
        Raster::new(bounds, pr, pc, RasterData::Continuous(pop))?,
    ))
}

/// Generates inputs, stations, observations and the resulting dataset.
pub fn synth_generate(cfg: &SynthConfig) -> Result<SynthOutput> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let spec = &cfg.spec;
    let (rows, cols) = spec.shape();
    let n = rows * cols;
    let res = spec.resolution();

    let stations: Vec<Station> = {
        let mut cells = sample(&mut rng, n, cfg.n_stations).into_vec();
        cells.sort_unstable();
        cells
            .into_iter()
            .enumerate()
            .map(|(i, cell)| {
                let (row, col) = (cell / cols, cell % cols);
                let b = spec.cell_bounds(row, col);
                Station {
                    id: format!("S{i:04}"),
                    lat: b.lat_min + rng.random_range(0.05..0.95) * res,
                    lon: b.lon_min + rng.random_range(0.05..0.95) * res,
                    row,
                    col,
                }
            })
            .collect()
    };

    let (landcover, population) = synth_rasters(&mut rng, cfg)?;

    let names: Vec<String> = MOMO_CHANNELS.iter().map(|s| s.to_string()).collect();
    let mut momo_stacks = Vec::with_capacity(cfg.n_days);
    let mut model_o3 = Vec::with_capacity(cfg.n_days);
    let mut true_bias = Vec::with_capacity(cfg.n_days);
    let mut records = Vec::with_capacity(cfg.n_days * cfg.n_stations);
    for day in 0..cfg.n_days {
        let date = cfg.date_of(day);
        let mut data = Vec::with_capacity(names.len() * n);
        for c in 0..names.len() {
            if c == TRANSPORTED_CHANNEL {
                data.extend((0..n).map(|_| {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    cfg.field_scale * z
                }));
            } else {
                data.extend(smooth_field(&mut rng, cfg, rows, cols));
            }
        }
        let ch = |c: usize| &data[c * n..(c + 1) * n];
        let noise: Vec<f64> = ch(TRANSPORTED_CHANNEL).iter().map(|v| v / cfg.field_scale).collect();
        let g = gaussian_smooth(&noise, rows, cols, cfg.g_length_scale);
        let bias: Vec<f64> = (0..n)
            .map(|i| {
                cfg.coef_linear * ch(LINEAR_CHANNEL)[i]
                    + cfg.coef_product * ch(PRODUCT_CHANNELS.0)[i] * ch(PRODUCT_CHANNELS.1)[i]
                    + cfg.coef_saturating * logistic(ch(SATURATING_CHANNEL)[i])
                    + cfg.g_amplitude * g[i]
            })
            .collect();
        let ozone: Vec<f64> = smooth_field(&mut rng, &SynthConfig { field_scale: 8.0, ..cfg.clone() }, rows, cols)
            .into_iter()
            .map(|v| (cfg.ozone_baseline + v).max(0.0))
            .collect();
        let model: Vec<f64> = ozone.iter().zip(&bias).map(|(o, b)| o + b).collect();
        for s in &stations {
            records.push(Observation {
                station_id: s.id.clone(),
                lat: s.lat,
                lon: s.lon,
                date,
                o3_ppb: ozone[s.row * cols + s.col],
            });
        }
        momo_stacks.push(GridStack::new(spec.clone(), names.clone(), data, date)?);
        model_o3.push((date, MaskedField::dense(spec.clone(), model)?));
        true_bias.push(MaskedField::dense(spec.clone(), bias)?);
    }
    let observations = ObservationTable::new(records)?;

    let bias_fields = model_o3
        .iter()
        .map(|(date, m)| Ok((*date, compute_bias(m, &grid_observations(&observations, spec, *date))?)))
        .collect::<Result<Vec<_>>>()?;
    let landuse = match cfg.experiment {
        Experiment::WithLandUse => {
            let opts = ExtractOptions {
                fill_value: 0.0,
                date: NaiveDate::from_ymd_opt(cfg.start_year, 1, 1).expect("valid date"),
            };
            Some(build_landuse_stack(&landcover, &population, spec, &ClassSet::default(), &opts)?.stack)
        }
        Experiment::ChemistryOnly => None,
    };
    let dataset = assemble(&momo_stacks, landuse.as_ref(), &bias_fields, cfg.experiment)?;

    let description = SynthDescription {
        config: cfg.clone(),
        formula: "b = coef_linear*x_lin + coef_product*x_p*x_q + coef_saturating*logistic(x_sat) + g_amplitude*smooth(x_tr/field_scale)".into(),
        linear_channel: MOMO_CHANNELS[LINEAR_CHANNEL].into(),
        product_channels: (MOMO_CHANNELS[PRODUCT_CHANNELS.0].into(), MOMO_CHANNELS[PRODUCT_CHANNELS.1].into()),
        saturating_channel: MOMO_CHANNELS[SATURATING_CHANNEL].into(),
        transported_channel: MOMO_CHANNELS[TRANSPORTED_CHANNEL].into(),
        stations,
    };
    Ok(SynthOutput {
        dataset,
        description,
        momo_stacks,
        model_o3,
        observations,
        true_bias,
        landcover,
        population,
    })
}

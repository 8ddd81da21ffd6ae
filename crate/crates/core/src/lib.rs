//! Surface-ozone model-bias estimation on latitude–longitude grids.
//!
//! The pipeline: aggregate land-use rasters onto the model grid
//! ([`zonal`]), pair gridded model fields with sparse station observations
//! ([`dataset`]), fit a U-Net ([`nn`]) or a per-pixel random forest
//! ([`forest`]), and compare them with RMSE maps and histograms ([`eval`]).

mod container;
pub mod dataset;
pub mod error;
pub mod eval;
pub mod forest;
pub mod grid;
pub mod nn;
pub mod zonal;

pub use dataset::synth::{synth_generate, SynthConfig, SynthOutput};
pub use dataset::{assemble, compute_bias, grid_observations, temporal_split, Dataset, Day, EvalWindow, Experiment, Observation, ObservationTable};
pub use error::{Error, Result};
pub use grid::{grid_shape, GridSpec, GridStack, LatLonBox, MaskedField, NormStats};
pub use nn::{ModelCheckpoint, UNetConfig};
pub use zonal::{build_landuse_stack, ClassSet, Raster, RasterData};
pub use eval::{compare_report, evaluate_predictions, evaluate_with, Comparison, EvalReport, HistSpec};
pub use forest::{fit_forest, train_forest, Forest, ForestHyper, PixelSample};

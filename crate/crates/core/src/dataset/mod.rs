//! Station observations, bias targets, and the per-day datasets the models
//! train on.

pub mod synth;

use std::collections::{BTreeMap, HashSet};
use std::fs;
use std::path::Path;

use chrono::{Datelike, NaiveDate};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{GridSpec, GridStack, MaskedField};

/// Model-chemistry input channels, in stack order.
pub const MOMO_CHANNELS: [&str; 16] = [
    "nh3",
    "dms",
    "hno3",
    "co",
    "brono2",
    "temperature",
    "no2",
    "pan",
    "hox_production",
    "surface_pressure",
    "h2o2",
    "pentyne_1",
    "so2",
    "oh",
    "lw_clear_surface",
    "olr_clear",
];

pub const LANDUSE_CHANNELS: usize = 23;

/// Feature-space configuration: model chemistry only, or chemistry plus land use.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "u8", into = "u8")]
pub enum Experiment {
    ChemistryOnly,
    WithLandUse,
}

impl Experiment {
    pub fn n_channels(self) -> usize {
        match self {
            Experiment::ChemistryOnly => MOMO_CHANNELS.len(),
            Experiment::WithLandUse => MOMO_CHANNELS.len() + LANDUSE_CHANNELS,
        }
    }

    pub fn number(self) -> u8 {
        self.into()
    }
}

impl TryFrom<u8> for Experiment {
    type Error = Error;

    fn try_from(v: u8) -> Result<Self> {
        match v {
            1 => Ok(Experiment::ChemistryOnly),
            2 => Ok(Experiment::WithLandUse),
            other => Err(Error::InvalidConfig(format!("experiment must be 1 or 2, got {other}"))),
        }
    }
}

impl From<Experiment> for u8 {
    fn from(e: Experiment) -> u8 {
        match e {
            Experiment::ChemistryOnly => 1,
            Experiment::WithLandUse => 2,
        }
    }
}

/// One station's daytime 8-hour average ozone on one day.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Observation {
    pub station_id: String,
    pub lat: f64,
    pub lon: f64,
    pub date: NaiveDate,
    pub o3_ppb: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ObservationTable {
    records: Vec<Observation>,
}

impl ObservationTable {
    pub fn new(records: Vec<Observation>) -> Result<Self> {
        let mut seen = HashSet::new();
        for r in &records {
            if !(r.o3_ppb.is_finite() && r.o3_ppb >= 0.0) {
                return Err(Error::InvalidObservation(format!(
                    "station {} on {}: ozone {} is not a finite non-negative value",
                    r.station_id, r.date, r.o3_ppb
                )));
            }
            if !(r.lat.is_finite() && r.lon.is_finite()) {
                return Err(Error::InvalidObservation(format!("station {} has a non-finite location", r.station_id)));
            }
            if !seen.insert((r.station_id.as_str(), r.date)) {
                return Err(Error::InvalidObservation(format!(
                    "station {} reports twice on {}",
                    r.station_id, r.date
                )));
            }
        }
        Ok(ObservationTable { records })
    }

    pub fn records(&self) -> &[Observation] {
        &self.records
    }

    /// Reads `station_id,lat,lon,date,o3_ppb` CSV with ISO dates.
    pub fn read_csv(path: &Path) -> Result<Self> {
        let mut rdr = csv::Reader::from_path(path)?;
        let records = rdr.deserialize().collect::<std::result::Result<Vec<Observation>, _>>()?;
        ObservationTable::new(records)
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        for r in &self.records {
            w.serialize(r)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn dates(&self) -> Vec<NaiveDate> {
        let mut d: Vec<NaiveDate> = self.records.iter().map(|r| r.date).collect();
        d.sort();
        d.dedup();
        d
    }
}

/// Averages the stations reporting on `date` into grid cells. Stations
/// outside the grid are ignored.
pub fn grid_observations(obs: &ObservationTable, spec: &GridSpec, date: NaiveDate) -> MaskedField {
    let mut per_cell: BTreeMap<usize, Vec<f64>> = BTreeMap::new();
    let cols = spec.cols();
    for r in obs.records.iter().filter(|r| r.date == date) {
        if let Ok((row, col)) = spec.cell_index(r.lat, r.lon) {
            per_cell.entry(row * cols + col).or_default().push(r.o3_ppb);
        }
    }
    let mut field = MaskedField::empty(spec.clone());
    let mut values = field.values().to_vec();
    let mut mask = field.mask().to_vec();
    for (idx, mut v) in per_cell {
        // Summation order fixed by value so station order cannot matter.
        v.sort_by(f64::total_cmp);
        values[idx] = v.iter().sum::<f64>() / v.len() as f64;
        mask[idx] = true;
    }
    field = MaskedField::new(spec.clone(), values, mask).expect("shape preserved");
    field
}

/// `model − observation` at observed cells.
pub fn compute_bias(model_o3: &MaskedField, obs: &MaskedField) -> Result<MaskedField> {
    if model_o3.spec() != obs.spec() {
        return Err(Error::ShapeMismatch("model and observation grids differ".into()));
    }
    let values = model_o3
        .values()
        .iter()
        .zip(obs.values())
        .zip(obs.mask())
        .map(|((&m, &o), &k)| if k { m - o } else { 0.0 })
        .collect();
    MaskedField::new(obs.spec().clone(), values, obs.mask().to_vec())
}

/// One training or evaluation sample: a full input image and its sparse target.
#[derive(Debug, Clone, PartialEq)]
pub struct Day {
    pub input: GridStack,
    pub target: MaskedField,
}

impl Day {
    pub fn date(&self) -> NaiveDate {
        self.input.date()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    experiment: Experiment,
    days: Vec<Day>,
}

impl Dataset {
    /// Days are sorted by date. All days must share one grid and channel list,
    /// and every target must have at least one observed cell.
    pub fn new(experiment: Experiment, mut days: Vec<Day>) -> Result<Self> {
        days.sort_by_key(Day::date);
        for pair in days.windows(2) {
            if pair[0].date() == pair[1].date() {
                return Err(Error::DuplicateDate(pair[0].date()));
            }
        }
        if let Some(first) = days.first() {
            if first.input.n_channels() != experiment.n_channels() {
                return Err(Error::ChannelCountMismatch {
                    expected: experiment.n_channels(),
                    found: first.input.n_channels(),
                });
            }
            for d in &days {
                if d.input.channels() != first.input.channels() {
                    return Err(Error::ChannelMismatch {
                        expected: first.input.channels().to_vec(),
                        found: d.input.channels().to_vec(),
                    });
                }
                if d.input.spec() != first.input.spec() || d.target.spec() != first.input.spec() {
                    return Err(Error::ShapeMismatch(format!("day {} is on a different grid", d.date())));
                }
                if d.target.n_valid() == 0 {
                    return Err(Error::AllMasked);
                }
            }
        }
        Ok(Dataset { experiment, days })
    }

    pub fn experiment(&self) -> Experiment {
        self.experiment
    }
    pub fn days(&self) -> &[Day] {
        &self.days
    }
    pub fn len(&self) -> usize {
        self.days.len()
    }
    pub fn is_empty(&self) -> bool {
        self.days.is_empty()
    }
    pub fn dates(&self) -> Vec<NaiveDate> {
        self.days.iter().map(Day::date).collect()
    }
    pub fn channels(&self) -> &[String] {
        self.days.first().map(|d| d.input.channels()).unwrap_or(&[])
    }
    pub fn spec(&self) -> Option<&GridSpec> {
        self.days.first().map(|d| d.input.spec())
    }

    /// Re-expresses a land-use dataset as a chemistry-only one by dropping the
    /// appended land-use channels.
    pub fn restrict_to(&self, experiment: Experiment) -> Result<Dataset> {
        match (self.experiment, experiment) {
            (a, b) if a == b => Ok(self.clone()),
            (Experiment::WithLandUse, Experiment::ChemistryOnly) => {
                let n = Experiment::ChemistryOnly.n_channels();
                let days = self
                    .days
                    .iter()
                    .map(|d| {
                        Ok(Day {
                            input: d.input.truncate_channels(n)?,
                            target: d.target.clone(),
                        })
                    })
                    .collect::<Result<_>>()?;
                Dataset::new(experiment, days)
            }
            _ => Err(Error::ChannelCountMismatch {
                expected: experiment.n_channels(),
                found: self.experiment.n_channels(),
            }),
        }
    }

    pub fn write_dir(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir.join("inputs"))?;
        fs::create_dir_all(dir.join("targets"))?;
        let mut entries = Vec::with_capacity(self.days.len());
        for d in &self.days {
            let input = format!("inputs/{}.gstack", d.date());
            let target = format!("targets/{}.mfield", d.date());
            d.input.write(&dir.join(&input))?;
            d.target.write(&dir.join(&target), Some(d.date()))?;
            entries.push(ManifestDay {
                date: d.date(),
                input,
                target,
            });
        }
        let manifest = Manifest {
            format: MANIFEST_FORMAT.into(),
            experiment: self.experiment,
            channels: self.channels().to_vec(),
            days: entries,
        };
        fs::write(dir.join("manifest.json"), serde_json::to_string_pretty(&manifest)? + "\n")?;
        Ok(())
    }

    pub fn read_dir(dir: &Path) -> Result<Self> {
        let path = dir.join("manifest.json");
        let manifest: Manifest = serde_json::from_str(&fs::read_to_string(&path)?)
            .map_err(|e| Error::format(&path, e.to_string()))?;
        if manifest.format != MANIFEST_FORMAT {
            return Err(Error::format(&path, format!("unknown manifest format {:?}", manifest.format)));
        }
        let days = manifest
            .days
            .iter()
            .map(|e| {
                let input = GridStack::read(&dir.join(&e.input))?;
                let (target, _) = MaskedField::read(&dir.join(&e.target))?;
                if input.date() != e.date {
                    return Err(Error::DateMismatch(format!("{} holds data for {}", e.input, input.date())));
                }
                Ok(Day { input, target })
            })
            .collect::<Result<Vec<_>>>()?;
        let ds = Dataset::new(manifest.experiment, days)?;
        if !ds.is_empty() && ds.channels() != manifest.channels.as_slice() {
            return Err(Error::format(&path, "manifest channel list disagrees with the stacks"));
        }
        Ok(ds)
    }
}

const MANIFEST_FORMAT: &str = "ozbias-dataset-v1";

#[derive(Serialize, Deserialize)]
struct Manifest {
    format: String,
    experiment: Experiment,
    channels: Vec<String>,
    days: Vec<ManifestDay>,
}

#[derive(Serialize, Deserialize)]
struct ManifestDay {
    date: NaiveDate,
    input: String,
    target: String,
}

/// Joins daily chemistry stacks with bias targets, appending the static
/// land-use channels for the land-use experiment. Days whose target has no
/// observed cell are dropped.
pub fn assemble(
    momo_stacks: &[GridStack],
    landuse: Option<&GridStack>,
    bias_fields: &[(NaiveDate, MaskedField)],
    experiment: Experiment,
) -> Result<Dataset> {
    let n_momo = MOMO_CHANNELS.len();
    let mut targets: BTreeMap<NaiveDate, &MaskedField> = BTreeMap::new();
    for (date, f) in bias_fields {
        if targets.insert(*date, f).is_some() {
            return Err(Error::DuplicateDate(*date));
        }
    }
    let stack_dates: HashSet<NaiveDate> = momo_stacks.iter().map(GridStack::date).collect();
    if let Some(d) = targets.keys().find(|d| !stack_dates.contains(d)) {
        return Err(Error::DateMismatch(format!("bias field for {d} has no input stack")));
    }
    let landuse = match experiment {
        Experiment::ChemistryOnly => None,
        Experiment::WithLandUse => {
            let lu = landuse.ok_or(Error::ChannelCountMismatch {
                expected: experiment.n_channels(),
                found: n_momo,
            })?;
            if lu.n_channels() != LANDUSE_CHANNELS {
                return Err(Error::ChannelCountMismatch {
                    expected: LANDUSE_CHANNELS,
                    found: lu.n_channels(),
                });
            }
            Some(lu)
        }
    };
    let mut days = Vec::with_capacity(momo_stacks.len());
    for s in momo_stacks {
        if s.n_channels() != n_momo {
            return Err(Error::ChannelCountMismatch {
                expected: n_momo,
                found: s.n_channels(),
            });
        }
        let target = targets
            .get(&s.date())
            .ok_or_else(|| Error::DateMismatch(format!("no bias field for {}", s.date())))?;
        if target.n_valid() == 0 {
            continue;
        }
        let input = match landuse {
            Some(lu) => s.concat(lu)?,
            None => s.clone(),
        };
        days.push(Day {
            input,
            target: (*target).clone(),
        });
    }
    Dataset::new(experiment, days)
}

/// Evaluation season: the listed months of one year.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EvalWindow {
    pub year: i32,
    pub months: Vec<u32>,
}

impl EvalWindow {
    /// June–August of `year`.
    pub fn summer(year: i32) -> Self {
        EvalWindow {
            year,
            months: vec![6, 7, 8],
        }
    }

    pub fn contains(&self, date: NaiveDate) -> bool {
        date.year() == self.year && self.months.contains(&date.month())
    }
}

/// Evaluation days are those inside the window; everything else trains.
pub fn temporal_split(ds: &Dataset, window: &EvalWindow) -> Result<(Dataset, Dataset)> {
    let (eval, train): (Vec<Day>, Vec<Day>) = ds.days.iter().cloned().partition(|d| window.contains(d.date()));
    if eval.is_empty() {
        return Err(Error::EmptyEval);
    }
    Ok((Dataset::new(ds.experiment, train)?, Dataset::new(ds.experiment, eval)?))
}

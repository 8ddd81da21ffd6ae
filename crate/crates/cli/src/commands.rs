use std::fs;
use std::io::Read;
use std::path::{Path, PathBuf};

use chrono::NaiveDate;
use ozbias::dataset::Experiment;
use ozbias::forest::{self, Forest, ForestHyper};
use ozbias::grid::{GridSpec, GridStack, MaskedField};
use ozbias::nn::{self, ModelCheckpoint, UNetConfig};
use ozbias::zonal::{self, ClassSet, ExtractOptions, Raster};
use ozbias::{
    assemble, compare_report, compute_bias, evaluate_with, grid_observations, synth_generate, temporal_split,
    Dataset, EvalReport, EvalWindow, HistSpec, ObservationTable, SynthConfig,
};
use serde::Deserialize;

use crate::args::*;
use crate::CliError;

type Result<T> = std::result::Result<T, CliError>;

fn region_spec(r: Region) -> GridSpec {
    match r {
        Region::Europe => GridSpec::europe(),
        Region::NorthAmerica => GridSpec::north_america(),
    }
}

fn experiment(n: u8) -> Result<Experiment> {
    Ok(Experiment::try_from(n)?)
}

fn create_parent(path: &Path) -> Result<()> {
    if let Some(p) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(p).map_err(|e| CliError::data(format!("{}: {e}", p.display())))?;
    }
    Ok(())
}

/// Files in `dir` with the given extension, sorted by name.
fn files_with_ext(dir: &Path, ext: &str) -> Result<Vec<PathBuf>> {
    let entries = fs::read_dir(dir).map_err(|e| CliError::data(format!("{}: {e}", dir.display())))?;
    let mut out = Vec::new();
    for e in entries {
        let p = e.map_err(|e| CliError::data(format!("{}: {e}", dir.display())))?.path();
        if p.extension().is_some_and(|x| x == ext) {
            out.push(p);
        }
    }
    out.sort();
    Ok(out)
}

fn require_file(path: &Path, what: &str) -> Result<()> {
    if path.is_file() {
        Ok(())
    } else {
        Err(CliError::data(format!("{what} {} not found", path.display())))
    }
}

pub fn extract(a: &ExtractArgs) -> Result<()> {
    require_file(&a.landcover, "land-cover raster")?;
    require_file(&a.population, "population raster")?;
    let lc = Raster::read(&a.landcover)?;
    let pop = Raster::read(&a.population)?;
    let opts = ExtractOptions {
        fill_value: a.fill_value,
        date: a.date,
    };
    let ex = zonal::build_landuse_stack(&lc, &pop, &region_spec(a.region), &ClassSet::default(), &opts)?;
    create_parent(&a.out)?;
    ex.stack.write(&a.out)?;
    if let Some(r) = &a.report {
        create_parent(r)?;
        fs::write(r, serde_json::to_string_pretty(&ex.report).map_err(ozbias::Error::from)? + "\n")
            .map_err(ozbias::Error::from)?;
    }
    println!(
        "wrote {} ({} channels; {} land-cover and {} population cells filled)",
        a.out.display(),
        ex.stack.n_channels(),
        ex.report.empty_landcover_cells.len(),
        ex.report.empty_population_cells.len()
    );
    Ok(())
}

pub fn synth(a: &SynthArgs) -> Result<()> {
    let mut cfg = SynthConfig {
        seed: a.seed,
        spec: region_spec(a.region),
        n_days: a.days,
        n_stations: a.stations,
        experiment: experiment(a.experiment)?,
        start_year: a.start_year,
        days_per_summer: a.days_per_summer,
        g_amplitude: a.g_amplitude,
        ..Default::default()
    };
    if a.linear_only {
        cfg = cfg.linear_only();
    }
    let out = synth_generate(&cfg)?;
    let d = &a.out;
    out.dataset.write_dir(&d.join("dataset"))?;
    for dir in ["momo", "model_o3", "true_bias"] {
        fs::create_dir_all(d.join(dir)).map_err(ozbias::Error::from)?;
    }
    for s in &out.momo_stacks {
        s.write(&d.join(format!("momo/{}.gstack", s.date())))?;
    }
    for ((date, m), b) in out.model_o3.iter().zip(&out.true_bias) {
        m.write(&d.join(format!("model_o3/{date}.mfield")), Some(*date))?;
        b.write(&d.join(format!("true_bias/{date}.mfield")), Some(*date))?;
    }
    out.observations.write_csv(&d.join("stations.csv"))?;
    out.landcover.write(&d.join("landcover.rast"))?;
    out.population.write(&d.join("population.rast"))?;
    fs::write(
        d.join("description.json"),
        serde_json::to_string_pretty(&out.description).map_err(ozbias::Error::from)? + "\n",
    )
    .map_err(ozbias::Error::from)?;
    println!("wrote {} ({} days with observations)", d.display(), out.dataset.len());
    Ok(())
}

pub fn build(a: &BuildArgs) -> Result<()> {
    require_file(&a.stations, "stations file")?;
    let exp = experiment(a.experiment)?;
    let obs = ObservationTable::read_csv(&a.stations)?;
    let stacks = files_with_ext(&a.momo, "gstack")?
        .iter()
        .map(|p| GridStack::read(p))
        .collect::<ozbias::Result<Vec<_>>>()?;
    let Some(spec) = stacks.first().map(|s| s.spec().clone()) else {
        return Err(CliError::data(format!("no .gstack files in {}", a.momo.display())));
    };
    let mut bias = Vec::new();
    for p in files_with_ext(&a.model_o3, "mfield")? {
        let (model, date) = MaskedField::read(&p)?;
        let date: NaiveDate = date.ok_or_else(|| CliError::data(format!("{} carries no date", p.display())))?;
        bias.push((date, compute_bias(&model, &grid_observations(&obs, &spec, date))?));
    }
    let landuse = match &a.landuse {
        Some(p) => {
            require_file(p, "land-use stack")?;
            Some(GridStack::read(p)?)
        }
        None => None,
    };
    let ds = assemble(&stacks, landuse.as_ref(), &bias, exp)?;
    ds.write_dir(&a.out)?;
    println!(
        "wrote {} ({} days, {} channels)",
        a.out.display(),
        ds.len(),
        ds.channels().len()
    );
    Ok(())
}

fn load_split(data: &Path, split: &SplitArgs) -> Result<(Dataset, Dataset)> {
    if !data.join("manifest.json").is_file() {
        return Err(CliError::data(format!("{} is not a dataset directory", data.display())));
    }
    let ds = Dataset::read_dir(data)?;
    if split.all_days {
        return Ok((ds.clone(), ds));
    }
    Ok(temporal_split(&ds, &EvalWindow::summer(split.eval_year))?)
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct FileConfig {
    seed: Option<u64>,
    #[serde(default)]
    unet: UNetFile,
    #[serde(default)]
    forest: ForestFile,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct UNetFile {
    base_width: Option<usize>,
    depth: Option<usize>,
    dropout_rate: Option<f64>,
    lr: Option<f64>,
    weight_decay: Option<f64>,
    decoupled_weight_decay: Option<bool>,
    grad_clip: Option<f64>,
    epochs: Option<usize>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct ForestFile {
    n_trees: Option<usize>,
    max_depth: Option<usize>,
    min_samples_leaf: Option<usize>,
    features_per_split: Option<usize>,
    bootstrap: Option<bool>,
}

fn read_config(path: Option<&Path>) -> Result<FileConfig> {
    let Some(path) = path else {
        return Ok(FileConfig::default());
    };
    let text = fs::read_to_string(path).map_err(|e| CliError::usage(format!("config {}: {e}", path.display())))?;
    toml::from_str(&text).map_err(|e| {
        let msg = e.to_string().lines().next().unwrap_or_default().to_string();
        CliError::usage(format!("config {}: {msg}", path.display()))
    })
}

fn unet_config(a: &TrainArgs, f: &UNetFile, in_channels: usize, seed: u64) -> UNetConfig {
    let d = UNetConfig::default();
    UNetConfig {
        in_channels,
        base_width: a.base_width.or(f.base_width).unwrap_or(d.base_width),
        depth: a.depth.or(f.depth).unwrap_or(d.depth),
        dropout_rate: a.dropout.or(f.dropout_rate).unwrap_or(d.dropout_rate),
        lr: a.lr.or(f.lr).unwrap_or(d.lr),
        weight_decay: a.weight_decay.or(f.weight_decay).unwrap_or(d.weight_decay),
        decoupled_weight_decay: a.decoupled_weight_decay
            || f.decoupled_weight_decay.unwrap_or(d.decoupled_weight_decay),
        grad_clip: a.grad_clip.or(f.grad_clip).or(d.grad_clip),
        epochs: a.epochs.or(f.epochs).unwrap_or(d.epochs),
        seed,
    }
}

fn forest_hyper(a: &TrainArgs, f: &ForestFile) -> ForestHyper {
    let d = ForestHyper::default();
    ForestHyper {
        n_trees: a.trees.or(f.n_trees).unwrap_or(d.n_trees),
        max_depth: a.max_depth.or(f.max_depth).or(d.max_depth),
        min_samples_leaf: a.min_leaf.or(f.min_samples_leaf).unwrap_or(d.min_samples_leaf),
        features_per_split: a.features_per_split.or(f.features_per_split).or(d.features_per_split),
        bootstrap: !a.no_bootstrap && f.bootstrap.unwrap_or(d.bootstrap),
    }
}

pub fn train(a: &TrainArgs) -> Result<()> {
    let file = read_config(a.config.as_deref())?;
    let seed = a.seed.or(file.seed).unwrap_or(0);
    let (mut train, _) = load_split(&a.data, &a.split)?;
    if let Some(e) = a.experiment {
        train = train.restrict_to(experiment(e)?)?;
    }
    create_parent(&a.out)?;
    match a.model {
        ModelKind::Unet => {
            let cfg = unet_config(a, &file.unet, train.channels().len(), seed);
            let verbose = a.verbose;
            let ck = nn::train_with_progress(&train, &cfg, |e, l| {
                if verbose {
                    eprintln!("epoch {e} loss {l:.6}");
                }
            })?;
            ck.write(&a.out)?;
            let last = ck.history.last().map_or("n/a".to_string(), |l| format!("{l:.6}"));
            println!(
                "wrote {} ({} parameters, {} channels, final loss {last})",
                a.out.display(),
                ck.n_parameters(),
                cfg.in_channels
            );
        }
        ModelKind::Rf => {
            let hyper = forest_hyper(a, &file.forest);
            let f = forest::train_forest(&train, &hyper, seed)?;
            f.write(&a.out)?;
            println!("wrote {} ({} trees, {} channels)", a.out.display(), f.trees.len(), f.channels.len());
        }
    }
    Ok(())
}

enum Model {
    Unet(ModelCheckpoint),
    Rf(Forest),
}

impl Model {
    fn read(path: &Path) -> Result<Model> {
        require_file(path, "model file")?;
        let mut head = [0u8; 13];
        let n = fs::File::open(path)
            .and_then(|mut f| f.read(&mut head))
            .map_err(ozbias::Error::from)?;
        if &head[..n] == b"ozbias-forest" {
            Ok(Model::Rf(Forest::read(path)?))
        } else {
            Ok(Model::Unet(ModelCheckpoint::read(path)?))
        }
    }

    fn channels(&self) -> &[String] {
        match self {
            Model::Unet(c) => &c.channels,
            Model::Rf(f) => &f.channels,
        }
    }
}

pub fn evaluate(a: &EvaluateArgs) -> Result<()> {
    let model = Model::read(&a.model_file)?;
    let (_, mut eval) = load_split(&a.data, &a.split)?;
    if model.channels().len() == Experiment::ChemistryOnly.n_channels()
        && eval.experiment() == Experiment::WithLandUse
    {
        eval = eval.restrict_to(Experiment::ChemistryOnly)?;
    }
    if model.channels() != eval.channels() {
        return Err(CliError::data(format!(
            "model expects {} channels, dataset provides {}",
            model.channels().len(),
            eval.channels().len()
        )));
    }
    let hist = HistSpec {
        lo: a.hist_lo,
        hi: a.hist_hi,
        width: a.hist_width,
    };
    hist.n_bins()?;
    let (default_name, report) = match &model {
        Model::Unet(ck) => ("unet", evaluate_with("unet", &eval, hist, a.threshold, |s| nn::predict(ck, s))?),
        Model::Rf(f) => ("rf", evaluate_with("rf", &eval, hist, a.threshold, |s| f.predict_field(s))?),
    };
    let mut report = report;
    report.metrics.model = a.name.clone().unwrap_or_else(|| default_name.to_string());
    report.write_dir(&a.out)?;
    let m = &report.metrics;
    println!(
        "{}: rmse {:.4} over {} pairs; above {} ppb: {} pairs",
        m.model, m.overall_rmse, m.n_pairs, m.extreme.threshold, m.extreme.count
    );
    Ok(())
}

pub fn compare(a: &CompareArgs) -> Result<()> {
    for d in [&a.rf, &a.unet] {
        if !d.is_dir() {
            return Err(CliError::data(format!("report directory {} not found", d.display())));
        }
    }
    let rf = EvalReport::read_dir(&a.rf)?;
    let unet = EvalReport::read_dir(&a.unet)?;
    let c = compare_report(&rf, &unet)?;
    create_parent(&a.out)?;
    c.write(&a.out)?;
    let fmt = |v: Option<f64>| v.map_or("n/a".to_string(), |x| format!("{x:.4}"));
    println!(
        "overall: rf {} unet {} winner {}; extreme: rf {} unet {} winner {}",
        fmt(c.overall.rf),
        fmt(c.overall.unet),
        c.overall.winner.as_deref().unwrap_or("none"),
        fmt(c.extreme.rf),
        fmt(c.extreme.unet),
        c.extreme.winner.as_deref().unwrap_or("none"),
    );
    Ok(())
}

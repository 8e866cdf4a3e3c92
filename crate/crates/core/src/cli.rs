//! The `dynaflow` command line: one subcommand per pipeline stage.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::fs;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use crate::dataset::{
    split_tiles, DatasetSplit, Image, Slot, SpeedTable, SplitRatios, SynthConfig, SynthWorld,
    DAY_NAMES,
};
use crate::geo::{self, RoadSegment, TileIndex};
use crate::graphapp::{self, Metric, Route};
use crate::losses::LossConfig;
use crate::model::{
    load_checkpoint, save_checkpoint, AngleSource, Checkpoint, ContextInput, ModelConfig,
    TrafficModel,
};
use crate::raster;
use crate::trainer::{
    self, Dataset, EvalReport, NetworkPredictor, OraclePredictor, Predictor, TimePolicy,
    TrainConfig,
};
use crate::{Error, Result};

pub const EXIT_OK: i32 = 0;
pub const EXIT_FAILURE: i32 = 1;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_MISSING: i32 = 3;
pub const EXIT_BAD_REFERENCE: i32 = 4;

pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Usage(_) | Error::Config(_) => EXIT_USAGE,
        Error::MissingArtifact(_) => EXIT_MISSING,
        Error::BadReference(_) => EXIT_BAD_REFERENCE,
        _ => EXIT_FAILURE,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SplitConfig {
    pub train: f64,
    pub val: f64,
    pub test: f64,
    pub seed: u64,
}

impl Default for SplitConfig {
    fn default() -> Self {
        let r = SplitRatios::default();
        Self {
            train: r.train,
            val: r.val,
            test: r.test,
            seed: 0,
        }
    }
}

/// Settings file shared by all subcommands; command-line flags override it.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub synth: SynthConfig,
    pub split: SplitConfig,
    pub model: ModelConfig,
    pub loss: LossConfig,
    pub train: TrainConfig,
}

impl RunConfig {
    pub fn load(path: Option<&Path>) -> Result<Self> {
        let Some(path) = path else {
            return Ok(Self::default());
        };
        let text = read_to_string(path)?;
        toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }
}

#[derive(Debug, Parser)]
#[command(
    name = "dynaflow",
    version,
    about = "Dynamic traffic modeling from overhead imagery"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic city: segments, speeds, split and tile images.
    Synth(SynthArgs),
    /// Write masks, orientation labels and speed targets for tiles.
    Rasterize(RasterizeArgs),
    /// Train a model, or write an oracle checkpoint for a synthetic world.
    Train(TrainArgs),
    /// Score a checkpoint on a split.
    Eval(EvalArgs),
    /// Per-segment speed predictions for the requested slots.
    Predict(PredictArgs),
    /// Shortest route by length or by predicted travel time.
    Route(RouteArgs),
    /// Nodes reachable within travel-time budgets.
    Isochrone(IsochroneArgs),
    /// Speed map, orientation flow field and road-mask error map of one tile.
    Render(RenderArgs),
}

#[derive(Debug, Args)]
struct Common {
    /// TOML settings file.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Debug, Args)]
struct SynthArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    grid_n: Option<usize>,
    #[arg(long)]
    zoom: Option<u8>,
    #[arg(long)]
    tile_px: Option<u32>,
    #[arg(long)]
    asymmetry: Option<f64>,
    /// Replace an existing output directory.
    #[arg(long)]
    force: bool,
}

#[derive(Debug, Args)]
struct RasterizeArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Tiles as z/x/y; all dataset tiles by default.
    #[arg(long = "tile")]
    tiles: Vec<String>,
    /// Slot as day:hour for speed targets.
    #[arg(long = "slot")]
    slots: Vec<String>,
}

#[derive(Debug, Args)]
struct TrainArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Training log CSV; defaults to train_log.csv next to the checkpoint.
    #[arg(long)]
    log: Option<PathBuf>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    crop_size: Option<usize>,
    #[arg(long)]
    steps_per_epoch: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    /// Write the ground-truth oracle of the synthetic world instead of training.
    #[arg(long)]
    oracle: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum SplitName {
    Train,
    Val,
    Test,
    All,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum PolicyName {
    /// One seeded random slot per tile.
    Fixed,
    /// Equal-weight average over a list of slots.
    Macro,
}

#[derive(Debug, Args)]
struct EvalArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long, value_enum, default_value = "test")]
    split: SplitName,
    #[arg(long, value_enum, default_value = "fixed")]
    policy: PolicyName,
    /// Slots for the macro policy; a spread of Monday and Saturday hours by default.
    #[arg(long = "slot")]
    slots: Vec<String>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct PredictArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long = "slot", required = true)]
    slots: Vec<String>,
    #[arg(long, value_enum, default_value = "all")]
    split: SplitName,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum WeightName {
    Length,
    Time,
}

#[derive(Debug, Args)]
struct RouteArgs {
    #[arg(long)]
    data: PathBuf,
    /// Segment-speed CSV written by `predict`.
    #[arg(long)]
    predictions: PathBuf,
    #[arg(long)]
    src: usize,
    #[arg(long)]
    dst: usize,
    #[arg(long, value_enum, default_value = "time")]
    weight: WeightName,
    #[arg(long)]
    slot: String,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct IsochroneArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    predictions: PathBuf,
    #[arg(long)]
    src: usize,
    /// Comma-separated seconds, ascending.
    #[arg(long, default_value = "60,120,300")]
    budgets: String,
    #[arg(long)]
    slot: String,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct RenderArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    tile: String,
    #[arg(long)]
    slot: String,
    #[arg(long)]
    out: PathBuf,
}

pub fn run_from_env() -> i32 {
    run(std::env::args_os())
}

/// Parses `args` (program name first) and runs the command, returning the exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    let result = configure_threads().and_then(|()| dispatch(cli.command));
    match result {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

fn configure_threads() -> Result<()> {
    let Ok(v) = std::env::var("DYNAFLOW_THREADS") else {
        return Ok(());
    };
    let n: usize = v.trim().parse().ok().filter(|n| *n > 0).ok_or_else(|| {
        Error::Usage(format!(
            "DYNAFLOW_THREADS must be a positive integer, got '{v}'"
        ))
    })?;
    // A second call in the same process finds the pool already built; that is fine.
    let _ = rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global();
    Ok(())
}

fn dispatch(cmd: Command) -> Result<()> {
    match cmd {
        Command::Synth(a) => cmd_synth(a),
        Command::Rasterize(a) => cmd_rasterize(a),
        Command::Train(a) => cmd_train(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Predict(a) => cmd_predict(a),
        Command::Route(a) => cmd_route(a),
        Command::Isochrone(a) => cmd_isochrone(a),
        Command::Render(a) => cmd_render(a),
    }
}

fn missing(path: &Path, e: std::io::Error) -> Error {
    if e.kind() == std::io::ErrorKind::NotFound {
        Error::MissingArtifact(path.to_path_buf())
    } else {
        Error::Io(e)
    }
}

fn read_to_string(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| missing(path, e))
}

fn open(path: &Path) -> Result<BufReader<fs::File>> {
    Ok(BufReader::new(
        fs::File::open(path).map_err(|e| missing(path, e))?,
    ))
}

fn ensure_parent(path: &Path) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent)?;
    }
    Ok(())
}

fn create(path: &Path) -> Result<BufWriter<fs::File>> {
    ensure_parent(path)?;
    Ok(BufWriter::new(fs::File::create(path)?))
}

fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut w = create(path)?;
    w.write_all(bytes)?;
    w.flush()?;
    Ok(())
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let mut w = create(path)?;
    serde_json::to_writer_pretty(&mut w, value)?;
    w.write_all(b"\n")?;
    w.flush()?;
    Ok(())
}

pub fn tile_file_name(t: &TileIndex) -> String {
    format!("{}_{}_{}.png", t.zoom, t.x, t.y)
}

/// Files of a dataset directory.
pub mod layout {
    pub const SEGMENTS: &str = "segments.geojson";
    pub const WORLD: &str = "world.json";
    pub const SPEEDS: &str = "speeds.csv";
    pub const SPLIT: &str = "split.csv";
    pub const TILES: &str = "tiles";
}

fn parse_slot(s: &str) -> Result<Slot> {
    Slot::parse(s).map_err(|e| match e {
        Error::Bounds { .. } => Error::Usage(format!("slot '{s}' is out of range")),
        other => other,
    })
}

fn parse_tile(s: &str) -> Result<TileIndex> {
    s.parse()
        .map_err(|_| Error::Usage(format!("tile '{s}' is not z/x/y")))
}

fn image_from_png(path: &Path) -> Result<Image> {
    let bytes = fs::read(path).map_err(|e| missing(path, e))?;
    let (w, h, ch, data) = raster::decode_png(&bytes)?;
    if ch < 3 {
        return Err(Error::Format(format!(
            "{} is not an RGB image",
            path.display()
        )));
    }
    let (w, h) = (w as usize, h as usize);
    let mut img = Image::new(3, h, w);
    for r in 0..h {
        for c in 0..w {
            for k in 0..3 {
                img.set(k, r, c, f64::from(data[(r * w + c) * ch + k]) / 255.0);
            }
        }
    }
    Ok(img)
}

pub fn load_segments(dir: &Path) -> Result<Vec<RoadSegment>> {
    let path = dir.join(layout::SEGMENTS);
    let doc: serde_json::Value = serde_json::from_str(&read_to_string(&path)?)?;
    geo::segments_from_geojson(&doc)
}

/// Reads a dataset directory written by `synth` (or laid out the same way).
pub fn load_dataset(dir: &Path, k_bins: usize) -> Result<Dataset> {
    let segments = load_segments(dir)?;
    let table = SpeedTable::read_csv(open(&dir.join(layout::SPEEDS))?)?;
    let split = DatasetSplit::read_csv(open(&dir.join(layout::SPLIT))?)?;
    let mut images = BTreeMap::new();
    for t in split.all() {
        images.insert(
            *t,
            image_from_png(&dir.join(layout::TILES).join(tile_file_name(t)))?,
        );
    }
    Dataset::assemble(&segments, images, table, split, k_bins)
}

fn load_world(dir: &Path) -> Result<SynthWorld> {
    let path = dir.join(layout::WORLD);
    let sidecar = serde_json::from_str(&read_to_string(&path)?)?;
    SynthWorld::from_sidecar(&sidecar)
}

fn cmd_synth(a: SynthArgs) -> Result<()> {
    let cfg = RunConfig::load(a.common.config.as_deref())?;
    let mut sc = cfg.synth;
    if let Some(v) = a.grid_n {
        sc.grid_n = v;
    }
    if let Some(v) = a.zoom {
        sc.tile_zoom = v;
    }
    if let Some(v) = a.tile_px {
        sc.tile_px = v;
    }
    if let Some(v) = a.asymmetry {
        sc.direction_asymmetry = v;
    }
    if let Some(v) = a.common.seed {
        sc.seed = v;
    }
    if a.out.exists() {
        if !a.force {
            return Err(Error::Usage(format!(
                "{} exists; pass --force to replace it",
                a.out.display()
            )));
        }
        if a.out.is_dir() {
            fs::remove_dir_all(&a.out)?;
        } else {
            fs::remove_file(&a.out)?;
        }
    }
    let world = SynthWorld::generate(sc)?;
    let split = split_tiles(
        &world.tiles,
        SplitRatios {
            train: cfg.split.train,
            val: cfg.split.val,
            test: cfg.split.test,
        },
        cfg.split.seed,
    )?;
    fs::create_dir_all(a.out.join(layout::TILES))?;
    write_json(&a.out.join(layout::SEGMENTS), &world.geojson())?;
    write_json(&a.out.join(layout::WORLD), &world.sidecar())?;
    let mut w = create(&a.out.join(layout::SPEEDS))?;
    world.speed_table().write_csv(&mut w)?;
    w.flush()?;
    let mut w = create(&a.out.join(layout::SPLIT))?;
    split.write_csv(&mut w)?;
    w.flush()?;
    for t in &world.tiles {
        let img = crate::dataset::render_image(&world, *t, world.config.tile_px)?;
        let png = raster::encode_png(
            img.width as u32,
            img.height as u32,
            png::ColorType::Rgb,
            &img.to_rgb8(),
        )?;
        write_bytes(&a.out.join(layout::TILES).join(tile_file_name(t)), &png)?;
    }
    println!(
        "wrote {} segments and {} tiles to {}",
        world.segments.len(),
        world.tiles.len(),
        a.out.display()
    );
    Ok(())
}

fn cmd_rasterize(a: RasterizeArgs) -> Result<()> {
    let cfg = RunConfig::load(a.common.config.as_deref())?;
    let slots = a
        .slots
        .iter()
        .map(|s| parse_slot(s))
        .collect::<Result<Vec<_>>>()?;
    let requested = a
        .tiles
        .iter()
        .map(|s| parse_tile(s))
        .collect::<Result<Vec<_>>>()?;
    let data = load_dataset(&a.data, cfg.model.k_bins)?;
    let tiles: Vec<TileIndex> = if requested.is_empty() {
        data.tiles.keys().copied().collect()
    } else {
        requested
    };
    fs::create_dir_all(&a.out)?;
    for t in &tiles {
        let tile = data.tile(t)?;
        let stem = format!("{}_{}_{}", t.zoom, t.x, t.y);
        write_bytes(
            &a.out.join(format!("{stem}_mask.png")),
            &raster::mask_png(&tile.mask)?,
        )?;
        write_json(&a.out.join(format!("{stem}_labels.json")), &tile.labels)?;
        for s in &slots {
            let sup = tile.supervision(&data.table, *s);
            let name = format!("{stem}_speeds_{}_{}", s.day, s.hour);
            let mut w = create(&a.out.join(format!("{name}.json")))?;
            raster::write_supervision(&sup, &mut w)?;
            w.flush()?;
            let png = raster::render_speed_raster(
                tile.size(),
                &raster::supervision_values(tile.size(), &sup),
            )?;
            write_bytes(&a.out.join(format!("{name}.png")), &png)?;
        }
    }
    println!("rasterized {} tiles into {}", tiles.len(), a.out.display());
    Ok(())
}

fn cmd_train(a: TrainArgs) -> Result<()> {
    let cfg = RunConfig::load(a.common.config.as_deref())?;
    ensure_parent(&a.out)?;
    if a.oracle {
        let world = load_world(&a.data)?;
        save_checkpoint(&a.out, &Checkpoint::Oracle(world.config))?;
        println!("wrote oracle checkpoint {}", a.out.display());
        return Ok(());
    }
    let mut tc = cfg.train;
    if let Some(v) = a.epochs {
        tc.epochs = v;
    }
    if let Some(v) = a.batch_size {
        tc.batch_size = v;
    }
    if let Some(v) = a.crop_size {
        tc.crop_size = v;
    }
    if let Some(v) = a.steps_per_epoch {
        tc.steps_per_epoch = Some(v);
    }
    if let Some(v) = a.lr {
        tc.optimizer.lr = v;
    }
    if let Some(v) = a.common.seed {
        tc.seed = v;
    }
    cfg.model.validate()?;
    cfg.loss.validate()?;
    let log_path = a.log.clone().unwrap_or_else(|| {
        a.out
            .parent()
            .unwrap_or(Path::new(""))
            .join("train_log.csv")
    });
    let data = load_dataset(&a.data, cfg.model.k_bins)?;
    let model = TrafficModel::build(&cfg.model, tc.seed)?;
    let out = trainer::train(model, &data, &tc, &cfg.loss)?;
    save_checkpoint(&a.out, &Checkpoint::Network(Box::new(out.model)))?;
    let mut w = create(&log_path)?;
    trainer::write_log(&out.log, &mut w)?;
    w.flush()?;
    println!(
        "trained {} steps; best epoch {}; checkpoint {}",
        out.log.len(),
        out.best_epoch,
        a.out.display()
    );
    Ok(())
}

/// A checkpoint made ready for prediction, with the dataset it applies to.
enum Loaded {
    Network(Box<TrafficModel>),
    Oracle(Box<SynthWorld>),
}

impl Loaded {
    fn open(path: &Path) -> Result<Self> {
        Ok(match load_checkpoint(path)? {
            Checkpoint::Network(m) => Loaded::Network(m),
            Checkpoint::Oracle(c) => Loaded::Oracle(Box::new(SynthWorld::generate(c)?)),
        })
    }

    fn k_bins(&self, cfg: &RunConfig) -> usize {
        match self {
            Loaded::Network(m) => m.config.k_bins,
            Loaded::Oracle(_) => cfg.model.k_bins,
        }
    }

    fn with_predictor<T>(
        &self,
        cfg: &RunConfig,
        f: impl FnOnce(&dyn Predictor) -> Result<T>,
    ) -> Result<T> {
        match self {
            Loaded::Network(m) => f(&NetworkPredictor::new(m, &cfg.loss)),
            Loaded::Oracle(w) => f(&OraclePredictor {
                world: w,
                k_bins: cfg.model.k_bins,
            }),
        }
    }
}

fn split_tiles_of(data: &Dataset, s: SplitName) -> Vec<TileIndex> {
    match s {
        SplitName::Train => data.split.train.clone(),
        SplitName::Val => data.split.val.clone(),
        SplitName::Test => data.split.test.clone(),
        SplitName::All => data.split.all().copied().collect(),
    }
}

pub fn write_report<W: Write>(r: &EvalReport, writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record([
        "scope",
        "n",
        "rmse",
        "mae",
        "r2",
        "road_f1",
        "orientation_top1",
    ])?;
    let r2 = |v: Option<f64>| v.map_or_else(|| "undefined".to_string(), |x| x.to_string());
    w.write_record([
        "all".to_string(),
        r.n.to_string(),
        r.rmse.to_string(),
        r.mae.to_string(),
        r2(r.r2),
        r.road_f1.to_string(),
        r.orientation_top1.to_string(),
    ])?;
    for s in &r.per_slot {
        w.write_record([
            format!("{}:{}", DAY_NAMES[usize::from(s.slot.day)], s.slot.hour),
            s.n.to_string(),
            s.rmse.to_string(),
            s.mae.to_string(),
            r2(s.r2),
            String::new(),
            String::new(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

fn cmd_eval(a: EvalArgs) -> Result<()> {
    let cfg = RunConfig::load(a.common.config.as_deref())?;
    let slots = a
        .slots
        .iter()
        .map(|s| parse_slot(s))
        .collect::<Result<Vec<_>>>()?;
    let policy = match a.policy {
        PolicyName::Fixed => TimePolicy::FixedRandomPerImage {
            seed: a.common.seed.unwrap_or(0),
        },
        PolicyName::Macro if slots.is_empty() => TimePolicy::default_macro(),
        PolicyName::Macro => TimePolicy::SlotList { slots },
    };
    let loaded = Loaded::open(&a.checkpoint)?;
    let data = load_dataset(&a.data, loaded.k_bins(&cfg))?;
    let tiles = split_tiles_of(&data, a.split);
    let report = loaded.with_predictor(&cfg, |p| trainer::evaluate(p, &data, &tiles, &policy))?;
    println!(
        "rmse {:.4} mae {:.4} r2 {} road_f1 {:.4} orientation_top1 {:.4} n {}",
        report.rmse,
        report.mae,
        report.r2.map_or("undefined".into(), |v| format!("{v:.4}")),
        report.road_f1,
        report.orientation_top1,
        report.n
    );
    if let Some(out) = &a.out {
        let mut w = create(out)?;
        write_report(&report, &mut w)?;
        w.flush()?;
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionRow {
    pub segment_id: String,
    pub day: u8,
    pub hour: u8,
    pub speed_kmh: f64,
}

/// Rows of a prediction CSV for one slot, keyed by segment.
pub fn read_predictions(path: &Path, slot: Slot) -> Result<BTreeMap<String, f64>> {
    let mut out = BTreeMap::new();
    for row in csv::Reader::from_reader(open(path)?).deserialize() {
        let r: PredictionRow = row?;
        if r.day == slot.day && r.hour == slot.hour {
            out.insert(r.segment_id, r.speed_kmh);
        }
    }
    Ok(out)
}

fn cmd_predict(a: PredictArgs) -> Result<()> {
    let cfg = RunConfig::load(a.common.config.as_deref())?;
    let slots = a
        .slots
        .iter()
        .map(|s| parse_slot(s))
        .collect::<Result<Vec<_>>>()?;
    let loaded = Loaded::open(&a.checkpoint)?;
    let data = load_dataset(&a.data, loaded.k_bins(&cfg))?;
    let tiles = split_tiles_of(&data, a.split);
    let preds = loaded.with_predictor(&cfg, |p| {
        trainer::predict_segments(p, &data, &tiles, &slots)
    })?;
    let mut w = csv::Writer::from_writer(create(&a.out)?);
    let mut rows = 0;
    for (slot, segs) in &preds {
        for (id, v) in segs {
            w.serialize(PredictionRow {
                segment_id: id.clone(),
                day: slot.day,
                hour: slot.hour,
                speed_kmh: *v,
            })?;
            rows += 1;
        }
    }
    w.flush()?;
    println!("wrote {rows} predictions to {}", a.out.display());
    Ok(())
}

fn graph_and_times(
    data: &Path,
    predictions: &Path,
    slot: &str,
) -> Result<(graphapp::RoadGraph, graphapp::EdgeTimes)> {
    let slot = parse_slot(slot)?;
    let graph = graphapp::build_graph(&load_segments(data)?)?;
    let preds = read_predictions(predictions, slot)?;
    let times = graphapp::assign_speeds(&graph, &preds)?;
    Ok((graph, times))
}

fn cmd_route(a: RouteArgs) -> Result<()> {
    let (graph, times) = graph_and_times(&a.data, &a.predictions, &a.slot)?;
    graph.check_node(a.src)?;
    graph.check_node(a.dst)?;
    let metric = match a.weight {
        WeightName::Length => Metric::Length,
        WeightName::Time => Metric::Time(&times),
    };
    let Some(route) = graphapp::shortest_path(&graph, a.src, a.dst, metric)? else {
        return Err(Error::BadReference(format!(
            "node {} is unreachable from node {}",
            a.dst, a.src
        )));
    };
    let route = Route::from_edges(&graph, a.src, route.edges, Some(&times));
    write_json(&a.out, &graphapp::route_geojson(&graph, &route))?;
    println!(
        "route of {} edges, {:.1} m, {:.1} s",
        route.edges.len(),
        route.total_length_m,
        route.total_time_s.unwrap_or(f64::NAN)
    );
    Ok(())
}

fn cmd_isochrone(a: IsochroneArgs) -> Result<()> {
    let budgets = a
        .budgets
        .split(',')
        .map(|s| {
            s.trim()
                .parse::<f64>()
                .map_err(|_| Error::Usage(format!("bad budget '{s}'")))
        })
        .collect::<Result<Vec<_>>>()?;
    let (graph, times) = graph_and_times(&a.data, &a.predictions, &a.slot)?;
    let iso = graphapp::isochrone(&graph, a.src, &budgets, &times).map_err(|e| match e {
        Error::Domain(m) => Error::Usage(m),
        other => other,
    })?;
    write_json(&a.out, &graphapp::isochrone_geojson(&graph, &iso))?;
    for l in &iso.levels {
        println!("{:>8.1} s: {} nodes", l.budget_s, l.nodes.len());
    }
    Ok(())
}

/// Hue wheel color for an angle.
fn angle_color(theta: f64) -> [u8; 3] {
    let h = (theta + std::f64::consts::PI) / (2.0 * std::f64::consts::PI) * 6.0;
    let x = 1.0 - ((h % 2.0) - 1.0).abs();
    let (r, g, b) = match h as u32 % 6 {
        0 => (1.0, x, 0.0),
        1 => (x, 1.0, 0.0),
        2 => (0.0, 1.0, x),
        3 => (0.0, x, 1.0),
        4 => (x, 0.0, 1.0),
        _ => (1.0, 0.0, x),
    };
    [(r * 255.0) as u8, (g * 255.0) as u8, (b * 255.0) as u8]
}

pub const FLOW_STRIDE: usize = 4;
pub const FALSE_POSITIVE: [u8; 3] = [160, 32, 240];
pub const FALSE_NEGATIVE: [u8; 3] = [255, 220, 0];

/// Short strokes at strided road pixels pointing along, and colored by, the angle.
pub fn flow_field(size: usize, road: &[bool], theta: &[f64]) -> Vec<u8> {
    let mut rgb = vec![0u8; size * size * 3];
    for r in (FLOW_STRIDE / 2..size).step_by(FLOW_STRIDE) {
        for c in (FLOW_STRIDE / 2..size).step_by(FLOW_STRIDE) {
            let i = r * size + c;
            if !road[i] {
                continue;
            }
            let color = angle_color(theta[i]);
            let (dx, dy) = (theta[i].cos(), -theta[i].sin());
            for s in 0..FLOW_STRIDE - 1 {
                let rr = (r as f64 + dy * s as f64).round();
                let cc = (c as f64 + dx * s as f64).round();
                if rr >= 0.0 && cc >= 0.0 && (rr as usize) < size && (cc as usize) < size {
                    let j = (rr as usize * size + cc as usize) * 3;
                    rgb[j..j + 3].copy_from_slice(&color);
                }
            }
        }
    }
    rgb
}

/// White hits, black correct rejections, purple false positives, yellow misses.
pub fn error_map(truth: &[u8], predicted: &[bool]) -> Vec<u8> {
    truth
        .iter()
        .zip(predicted)
        .flat_map(|(t, p)| match (*t != 0, *p) {
            (true, true) => [255, 255, 255],
            (false, false) => [0, 0, 0],
            (false, true) => FALSE_POSITIVE,
            (true, false) => FALSE_NEGATIVE,
        })
        .collect()
}

fn cmd_render(a: RenderArgs) -> Result<()> {
    let cfg = RunConfig::load(a.common.config.as_deref())?;
    let slot = parse_slot(&a.slot)?;
    let t = parse_tile(&a.tile)?;
    let loaded = Loaded::open(&a.checkpoint)?;
    let data = load_dataset(&a.data, loaded.k_bins(&cfg))?;
    let tile = data.tile(&t)?;
    let size = tile.size();
    let (road, theta, speed): (Vec<bool>, Vec<f64>, Vec<Option<f64>>) = match &loaded {
        Loaded::Network(m) => {
            let img = &tile.image;
            let x = crate::autodiff::Tensor::new(
                &[1, img.channels, img.height, img.width],
                img.data.clone(),
            )?;
            let ctx = ContextInput {
                point: tile.center,
                slot,
            };
            let k = cfg.loss.effective_k();
            let speed = m.predict_with_angle_source(&x, ctx, AngleSource::PredictedArgmax, k)?;
            let pred = NetworkPredictor::new(m, &cfg.loss).predict(tile, &[slot])?;
            let road: Vec<bool> = pred.road.iter().map(|p| *p >= 0.5).collect();
            let theta = pred
                .orient
                .iter()
                .map(|b| geo::bin_center(*b, m.config.k_bins))
                .collect();
            let speed = speed
                .iter()
                .zip(&road)
                .map(|(v, r)| r.then_some(*v))
                .collect();
            (road, theta, speed)
        }
        Loaded::Oracle(_) => {
            let road: Vec<bool> = tile.mask.data.iter().map(|m| *m != 0).collect();
            let k_bins = cfg.model.k_bins;
            let mut theta = vec![0.0; size * size];
            for l in &tile.labels {
                theta[l.pixel.row as usize * size + l.pixel.col as usize] =
                    geo::bin_center(l.bin, k_bins);
            }
            let speed = raster::supervision_values(size, &tile.supervision(&data.table, slot));
            (road, theta, speed)
        }
    };
    fs::create_dir_all(&a.out)?;
    let s = size as u32;
    write_bytes(
        &a.out.join("speed.png"),
        &raster::render_speed_raster(size, &speed)?,
    )?;
    let flow = flow_field(size, &road, &theta);
    write_bytes(
        &a.out.join("orientation.png"),
        &raster::encode_png(s, s, png::ColorType::Rgb, &flow)?,
    )?;
    let err = error_map(&tile.mask.data, &road);
    write_bytes(
        &a.out.join("mask_error.png"),
        &raster::encode_png(s, s, png::ColorType::Rgb, &err)?,
    )?;
    println!("rendered tile {t} at {} into {}", a.slot, a.out.display());
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exit_codes_are_stable() {
        assert_eq!(exit_code(&Error::Usage("x".into())), 2);
        assert_eq!(exit_code(&Error::MissingArtifact("a".into())), 3);
        assert_eq!(exit_code(&Error::BadReference("n".into())), 4);
        assert_eq!(exit_code(&Error::Domain("d".into())), 1);
    }

    #[test]
    fn config_rejects_unknown_keys() {
        assert!(toml::from_str::<RunConfig>("[train]\nepochs = 3\n").is_ok());
        assert!(toml::from_str::<RunConfig>("[train]\nepoch = 3\n").is_err());
        assert!(toml::from_str::<RunConfig>("bogus = 1\n").is_err());
        let c: RunConfig = toml::from_str("[loss]\naggregation = \"replicate\"\n[train.validation]\nkind = \"fixed_random_per_image\"\nseed = 3\n").unwrap();
        assert_eq!(
            c.train.validation,
            TimePolicy::FixedRandomPerImage { seed: 3 }
        );
    }

    #[test]
    fn perfect_mask_has_no_error_colors() {
        let truth = [1u8, 0, 1, 0];
        let pred = [true, false, true, false];
        let img = error_map(&truth, &pred);
        for px in img.chunks(3) {
            assert_ne!(px, FALSE_POSITIVE);
            assert_ne!(px, FALSE_NEGATIVE);
        }
        let img = error_map(&truth, &[false, true, true, false]);
        assert_eq!(&img[..3], &FALSE_NEGATIVE);
        assert_eq!(&img[3..6], &FALSE_POSITIVE);
    }

    #[test]
    fn angle_colors_cycle() {
        assert_eq!(angle_color(-std::f64::consts::PI), [255, 0, 0]);
        assert_ne!(angle_color(0.0), angle_color(1.0));
    }
}

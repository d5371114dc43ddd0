//! Declarative experiment grids: config parsing, dataset resolution, grid
//! execution with per-cell CSV output, run manifests, and SVG learning curves.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::active::{run_scenario, CycleReport, RunObserver, ScenarioConfig};
use crate::augment::{AuditLog, TrainTransform};
use crate::data::{
    parse_cifar, parse_idx, synth_blobs, BlobSpec, CifarVariant, Dataset, NormSource,
    Normalization, Split,
};
use crate::error::{Error, Result};
use crate::losses::{CmLabelMode, LossConfig};
use crate::model::Architecture;
use crate::optim::{LrSchedule, SgdConfig};
use crate::uncertainty::{PartnerPoolKind, ScoreRecord, Strategy};

/// Fixed header of every per-cell results file.
pub const CSV_HEADER: &str =
    "cycle,seed,strategy,loss,labeled_count,test_accuracy,l_ce,l_co,l_cm,wall_time_s";

/// Environment variable consulted when `--data-dir` is absent.
pub const DATA_DIR_ENV: &str = "AUGAL_DATA_DIR";

pub const PRESETS: [(&str, &str); 3] = [
    (
        "fashion-desk",
        include_str!("../../../configs/fashion-desk.json"),
    ),
    (
        "full-protocol",
        include_str!("../../../configs/full-protocol.json"),
    ),
    (
        "synth-smoke",
        include_str!("../../../configs/synth-smoke.json"),
    ),
];

pub fn preset(name: &str) -> Option<&'static str> {
    PRESETS
        .iter()
        .find(|(n, _)| *n == name)
        .map(|(_, text)| *text)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "id", rename_all = "snake_case", deny_unknown_fields)]
pub enum DatasetConfig {
    FashionMnist {
        #[serde(default, skip_serializing_if = "Option::is_none")]
        path: Option<PathBuf>,
    },
    Cifar10 {
        #[serde(default, skip_serializing_if = "Option::is_none")]
        path: Option<PathBuf>,
    },
    Cifar100 {
        #[serde(default, skip_serializing_if = "Option::is_none")]
        path: Option<PathBuf>,
    },
    SynthBlobs {
        per_class: usize,
        classes: usize,
        height: usize,
        width: usize,
        separation: f64,
        seed: u64,
    },
}

impl DatasetConfig {
    pub fn id(&self) -> &'static str {
        match self {
            DatasetConfig::FashionMnist { .. } => "fashion_mnist",
            DatasetConfig::Cifar10 { .. } => "cifar10",
            DatasetConfig::Cifar100 { .. } => "cifar100",
            DatasetConfig::SynthBlobs { .. } => "synth_blobs",
        }
    }
}

/// Which regularizers join the task loss.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum LossId {
    #[serde(rename = "task")]
    Task,
    #[serde(rename = "task+co")]
    TaskCo,
    #[serde(rename = "task+cm")]
    TaskCm,
    #[serde(rename = "task+co+cm")]
    TaskCoCm,
}

impl LossId {
    pub fn as_str(&self) -> &'static str {
        match self {
            LossId::Task => "task",
            LossId::TaskCo => "task+co",
            LossId::TaskCm => "task+cm",
            LossId::TaskCoCm => "task+co+cm",
        }
    }

    pub fn use_co(&self) -> bool {
        matches!(self, LossId::TaskCo | LossId::TaskCoCm)
    }

    pub fn use_cm(&self) -> bool {
        matches!(self, LossId::TaskCm | LossId::TaskCoCm)
    }
}

impl fmt::Display for LossId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for LossId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        serde_json::from_value(serde_json::Value::String(s.to_string()))
            .map_err(|_| Error::config(format!("unknown loss `{s}`")))
    }
}

/// Augmentation knobs shared by scoring and the consistency losses.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentConfig {
    pub k_co: usize,
    pub k_cm: usize,
    pub lambda_min: f64,
    pub cm_label_mode: CmLabelMode,
    /// Cutout side in pixels; half the shorter image side when absent.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub cutout_size: Option<usize>,
    pub partner_pool: PartnerPoolKind,
    pub train_transform: TrainTransform,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            k_co: 2,
            k_cm: 2,
            lambda_min: 0.5,
            cm_label_mode: CmLabelMode::Soft,
            cutout_size: None,
            partner_pool: PartnerPoolKind::Unlabeled,
            train_transform: TrainTransform::PadCropFlip,
        }
    }
}

fn default_eval_batch() -> usize {
    1000
}

fn default_model() -> Architecture {
    Architecture::DESK_CNN
}

/// A (strategy × loss × seed) grid over one shared scenario.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridSpec {
    /// Display label; not part of the config hash.
    #[serde(default)]
    pub name: String,
    pub dataset: DatasetConfig,
    pub pool_size: usize,
    pub budget: usize,
    pub cycles: usize,
    pub epochs: usize,
    pub batch_size: usize,
    #[serde(default = "default_eval_batch")]
    pub eval_batch: usize,
    pub optimizer: SgdConfig,
    #[serde(default = "LrSchedule::constant")]
    pub schedule: LrSchedule,
    #[serde(default = "default_model")]
    pub model: Architecture,
    #[serde(default)]
    pub augment: AugmentConfig,
    pub strategies: Vec<Strategy>,
    pub losses: Vec<LossId>,
    pub seeds: Vec<u64>,
}

/// One grid cell.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize)]
pub struct Cell {
    pub strategy: Strategy,
    pub loss: LossId,
    pub seed: u64,
}

impl Cell {
    /// `<strategy>/<loss>/<seed>` below the results root.
    pub fn dir(&self, root: &Path) -> PathBuf {
        root.join(self.strategy.as_str())
            .join(self.loss.as_str())
            .join(self.seed.to_string())
    }
}

impl fmt::Display for Cell {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}/{}/{}", self.strategy, self.loss, self.seed)
    }
}

fn keyed(key: &str, r: Result<()>) -> Result<()> {
    r.map_err(|e| match e {
        Error::Config(msg) => Error::Config(format!("{key}: {msg}")),
        other => other,
    })
}

fn nonempty_unique<T: Ord + fmt::Debug>(key: &str, items: &[T]) -> Result<()> {
    if items.is_empty() {
        return Err(Error::config(format!(
            "{key}: must list at least one entry"
        )));
    }
    let mut seen = BTreeSet::new();
    for item in items {
        if !seen.insert(item) {
            return Err(Error::config(format!("{key}: duplicate entry {item:?}")));
        }
    }
    Ok(())
}

impl GridSpec {
    /// Parses and validates a JSON config. Errors name the offending key.
    pub fn parse(text: &str) -> Result<Self> {
        let de = &mut serde_json::Deserializer::from_str(text);
        let grid: GridSpec = serde_path_to_error::deserialize(de).map_err(|e| {
            let path = e.path().to_string();
            let inner = e.into_inner();
            if path == "." {
                Error::config(inner.to_string())
            } else {
                Error::config(format!("{path}: {inner}"))
            }
        })?;
        grid.validate()?;
        Ok(grid)
    }

    /// Reads a config from a file path, or a bundled preset by name.
    pub fn load(source: &str) -> Result<Self> {
        let path = Path::new(source);
        if path.exists() {
            Self::parse(&fs::read_to_string(path)?)
        } else if let Some(text) = preset(source) {
            Self::parse(text)
        } else {
            Err(Error::usage(format!(
                "`{source}` is neither a config file nor a preset ({})",
                PRESETS.map(|(n, _)| n).join(", ")
            )))
        }
    }

    pub fn validate(&self) -> Result<()> {
        nonempty_unique("strategies", &self.strategies)?;
        nonempty_unique("losses", &self.losses)?;
        nonempty_unique("seeds", &self.seeds)?;
        if self.budget == 0 {
            return Err(Error::config("budget: must be positive"));
        }
        let needed = self.budget * (self.cycles + 1);
        if needed > self.pool_size {
            return Err(Error::config(format!(
                "budget: budget * (cycles + 1) <= pool_size violated: {} * {} = {needed} > {}",
                self.budget,
                self.cycles + 1,
                self.pool_size
            )));
        }
        if self.epochs == 0 {
            return Err(Error::config("epochs: must be >= 1"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch_size: must be positive"));
        }
        if self.eval_batch == 0 {
            return Err(Error::config("eval_batch: must be positive"));
        }
        if self.augment.cutout_size == Some(0) {
            return Err(Error::config("augment.cutout_size: must be positive"));
        }
        if let DatasetConfig::SynthBlobs {
            per_class,
            classes,
            height,
            width,
            ..
        } = self.dataset
        {
            if per_class == 0 || classes < 2 || height == 0 || width == 0 {
                return Err(Error::config(
                    "dataset: synth_blobs needs per_class >= 1, classes >= 2 and nonzero dims",
                ));
            }
        }
        keyed("optimizer", self.optimizer.validate())?;
        keyed("schedule", self.schedule.validate())?;
        keyed("augment", self.loss_config(LossId::TaskCoCm, 1).validate())
    }

    pub fn cells(&self) -> Vec<Cell> {
        let mut out = Vec::new();
        for &strategy in &self.strategies {
            for &loss in &self.losses {
                for &seed in &self.seeds {
                    out.push(Cell {
                        strategy,
                        loss,
                        seed,
                    });
                }
            }
        }
        out
    }

    pub fn cutout_size(&self, height: usize, width: usize) -> usize {
        self.augment
            .cutout_size
            .unwrap_or_else(|| (height.min(width) / 2).max(1))
    }

    fn loss_config(&self, loss: LossId, cutout_size: usize) -> LossConfig {
        LossConfig {
            use_co: loss.use_co(),
            use_cm: loss.use_cm(),
            k_co: self.augment.k_co,
            k_cm: self.augment.k_cm,
            lambda_min: self.augment.lambda_min,
            cm_label_mode: self.augment.cm_label_mode,
            cutout_size,
        }
    }

    /// Scenario for one cell on data with the given image height and width.
    pub fn scenario(
        &self,
        strategy: Strategy,
        loss: LossId,
        height: usize,
        width: usize,
    ) -> ScenarioConfig {
        ScenarioConfig {
            pool_size: self.pool_size,
            budget: self.budget,
            cycles: self.cycles,
            strategy,
            loss: self.loss_config(loss, self.cutout_size(height, width)),
            epochs: self.epochs,
            batch_size: self.batch_size,
            optimizer: self.optimizer.clone(),
            schedule: self.schedule.clone(),
            arch: self.model,
            partner_pool: self.augment.partner_pool,
            train_transform: self.augment.train_transform,
            eval_batch: self.eval_batch,
        }
    }

    /// SHA-256 of the canonical JSON form (sorted keys, defaults filled in,
    /// `name` excluded).
    pub fn config_hash(&self) -> String {
        let mut value = serde_json::to_value(self).expect("grid serializes");
        if let serde_json::Value::Object(map) = &mut value {
            map.remove("name");
        }
        let canonical = serde_json::to_string(&value).expect("value serializes");
        hex(&Sha256::digest(canonical.as_bytes()))
    }
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// `--data-dir` if given, else `$AUGAL_DATA_DIR`, else `./data`.
pub fn resolve_data_dir(flag: Option<&Path>) -> PathBuf {
    match flag {
        Some(p) => p.to_path_buf(),
        None => std::env::var_os(DATA_DIR_ENV)
            .map(PathBuf::from)
            .unwrap_or_else(|| PathBuf::from("data")),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct FileChecksum {
    pub file: String,
    pub sha256: String,
}

/// Train and test splits plus provenance for the manifest.
#[derive(Clone, Debug)]
pub struct LoadedData {
    pub train: Dataset,
    pub test: Dataset,
    pub checksums: Vec<FileChecksum>,
}

struct Files {
    dir: PathBuf,
    checksums: Vec<FileChecksum>,
}

impl Files {
    fn read(&mut self, name: &str) -> Result<Vec<u8>> {
        let path = self.dir.join(name);
        let bytes = fs::read(&path).map_err(|e| {
            Error::usage(format!("cannot read dataset file {}: {e}", path.display()))
        })?;
        self.checksums.push(FileChecksum {
            file: name.to_string(),
            sha256: hex(&Sha256::digest(&bytes)),
        });
        Ok(bytes)
    }
}

fn dataset_dir(data_dir: &Path, path: &Option<PathBuf>, default: &str) -> PathBuf {
    match path {
        Some(p) if p.is_absolute() => p.clone(),
        Some(p) => data_dir.join(p),
        None => data_dir.join(default),
    }
}

/// Loads both splits. File datasets live under `data_dir/<subdir>` unless the
/// config gives a path. Normalization is fitted on the training split.
pub fn load_dataset(config: &DatasetConfig, data_dir: &Path) -> Result<LoadedData> {
    let files = |path: &Option<PathBuf>, default: &str| Files {
        dir: dataset_dir(data_dir, path, default),
        checksums: Vec::new(),
    };
    let (train, test, checksums) = match config {
        DatasetConfig::FashionMnist { path } => {
            let mut f = files(path, "fashion-mnist");
            let train = parse_idx(
                &f.read("train-images-idx3-ubyte")?,
                &f.read("train-labels-idx1-ubyte")?,
                Split::Train,
                NormSource::Fit,
            )?;
            let norm = NormSource::Given(train.normalization().clone());
            let test = parse_idx(
                &f.read("t10k-images-idx3-ubyte")?,
                &f.read("t10k-labels-idx1-ubyte")?,
                Split::Test,
                norm,
            )?;
            (train, test, f.checksums)
        }
        DatasetConfig::Cifar10 { path } | DatasetConfig::Cifar100 { path } => {
            let (variant, default, train_files, test_file): (_, _, &[&str], _) = match config {
                DatasetConfig::Cifar10 { .. } => (
                    CifarVariant::Cifar10,
                    "cifar-10-batches-bin",
                    &[
                        "data_batch_1.bin",
                        "data_batch_2.bin",
                        "data_batch_3.bin",
                        "data_batch_4.bin",
                        "data_batch_5.bin",
                    ],
                    "test_batch.bin",
                ),
                _ => (
                    CifarVariant::Cifar100,
                    "cifar-100-binary",
                    &["train.bin"],
                    "test.bin",
                ),
            };
            let mut f = files(path, default);
            let blobs = train_files
                .iter()
                .map(|name| f.read(name))
                .collect::<Result<Vec<_>>>()?;
            let refs: Vec<&[u8]> = blobs.iter().map(Vec::as_slice).collect();
            let train = parse_cifar(&refs, variant, Split::Train, NormSource::Fit)?;
            let norm = NormSource::Given(train.normalization().clone());
            let test_bytes = f.read(test_file)?;
            let test = parse_cifar(&[&test_bytes], variant, Split::Test, norm)?;
            (train, test, f.checksums)
        }
        DatasetConfig::SynthBlobs {
            per_class,
            classes,
            height,
            width,
            separation,
            seed,
        } => {
            let spec = BlobSpec {
                per_class: *per_class,
                classes: *classes,
                height: *height,
                width: *width,
                separation: *separation,
                seed: *seed,
            };
            (
                synth_blobs(&spec, Split::Train)?,
                synth_blobs(&spec, Split::Test)?,
                Vec::new(),
            )
        }
    };
    Ok(LoadedData {
        train,
        test,
        checksums,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum CellState {
    Pending,
    Ok,
    Failed,
}

#[derive(Clone, Debug, Serialize)]
pub struct CellStatus {
    #[serde(flatten)]
    pub cell: Cell,
    pub state: CellState,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Clone, Debug, Serialize)]
pub struct RunManifest {
    pub name: String,
    pub config_hash: String,
    pub artifact_version: String,
    pub dataset: String,
    pub dataset_checksums: Vec<FileChecksum>,
    pub normalization: Normalization,
    /// Seconds since the Unix epoch.
    pub started_at: u64,
    pub finished_at: Option<u64>,
    pub seeds: Vec<u64>,
    pub config: GridSpec,
    pub cells: Vec<CellStatus>,
}

impl RunManifest {
    pub fn failures(&self) -> impl Iterator<Item = &CellStatus> {
        self.cells.iter().filter(|c| c.state == CellState::Failed)
    }

    fn write(&self, out_dir: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        fs::write(out_dir.join("manifest.json"), text + "\n")?;
        Ok(())
    }
}

fn unix_now() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0)
}

/// One CSV data row in the fixed schema.
pub fn csv_row(cell: &Cell, report: &CycleReport) -> String {
    let loss = report.final_loss();
    format!(
        "{},{},{},{},{},{},{},{},{},{:.3}",
        report.cycle,
        cell.seed,
        cell.strategy,
        cell.loss,
        report.labeled_count,
        report.test_accuracy,
        loss.l_ce,
        loss.l_co,
        loss.l_cm,
        report.wall_time_s
    )
}

/// Appends each finished cycle to `cycles.csv` and optionally dumps scores.
struct CellWriter {
    cell: Cell,
    dir: PathBuf,
    csv: BufWriter<File>,
    dump_scores: bool,
}

impl CellWriter {
    fn create(cell: Cell, dir: PathBuf, dump_scores: bool) -> Result<Self> {
        fs::create_dir_all(&dir)?;
        let mut csv = BufWriter::new(File::create(dir.join("cycles.csv"))?);
        writeln!(csv, "{CSV_HEADER}")?;
        csv.flush()?;
        Ok(CellWriter {
            cell,
            dir,
            csv,
            dump_scores,
        })
    }
}

impl RunObserver for CellWriter {
    fn on_cycle(&mut self, report: &CycleReport) -> Result<()> {
        writeln!(self.csv, "{}", csv_row(&self.cell, report))?;
        self.csv.flush()?;
        Ok(())
    }

    fn on_scores(&mut self, cycle: usize, scores: &[ScoreRecord]) -> Result<()> {
        if !self.dump_scores {
            return Ok(());
        }
        let mut out = BufWriter::new(File::create(
            self.dir.join(format!("scores_cycle_{cycle}.csv")),
        )?);
        writeln!(out, "index,strategy,score")?;
        for r in scores {
            writeln!(out, "{},{},{}", r.index, r.strategy, r.score)?;
        }
        out.flush()?;
        Ok(())
    }
}

/// Progress callback: the cell and its just-finished cycle.
pub type Progress<'a> = &'a (dyn Fn(&Cell, &CycleReport) + Sync);

#[derive(Clone, Debug)]
pub struct RunOptions {
    pub out_dir: PathBuf,
    pub data_dir: PathBuf,
    /// Cells run concurrently.
    pub jobs: usize,
    /// Write `augment.jsonl` per cell.
    pub dump_augment: bool,
    /// Write `scores_cycle_<t>.csv` per cell for every selection cycle.
    pub dump_scores: bool,
}

impl RunOptions {
    pub fn new(out_dir: impl Into<PathBuf>, data_dir: impl Into<PathBuf>) -> Self {
        RunOptions {
            out_dir: out_dir.into(),
            data_dir: data_dir.into(),
            jobs: 1,
            dump_augment: false,
            dump_scores: false,
        }
    }
}

fn run_cell(
    grid: &GridSpec,
    data: &LoadedData,
    cell: Cell,
    opts: &RunOptions,
    progress: Option<Progress<'_>>,
) -> Result<()> {
    let dims = data.train.dims();
    let scenario = grid.scenario(cell.strategy, cell.loss, dims.height, dims.width);
    let dir = cell.dir(&opts.out_dir);
    let mut writer = CellWriter::create(cell, dir.clone(), opts.dump_scores)?;
    let audit = if opts.dump_augment {
        let file = File::create(dir.join("augment.jsonl"))?;
        Some(AuditLog::new(Box::new(BufWriter::new(file))))
    } else {
        None
    };
    struct Observer<'a> {
        writer: &'a mut CellWriter,
        progress: Option<Progress<'a>>,
    }
    impl RunObserver for Observer<'_> {
        fn on_cycle(&mut self, report: &CycleReport) -> Result<()> {
            self.writer.on_cycle(report)?;
            if let Some(p) = self.progress {
                p(&self.writer.cell, report);
            }
            Ok(())
        }
        fn on_scores(&mut self, cycle: usize, scores: &[ScoreRecord]) -> Result<()> {
            self.writer.on_scores(cycle, scores)
        }
    }
    let mut observer = Observer {
        writer: &mut writer,
        progress,
    };
    let result = run_scenario(
        &scenario,
        &data.train,
        &data.test,
        cell.seed,
        &mut observer,
        audit.as_ref(),
    );
    if let Some(log) = &audit {
        log.flush()?;
    }
    result.map(|_| ())
}

/// Runs every cell of the grid, writing `<out>/<strategy>/<loss>/<seed>/cycles.csv`
/// and `<out>/manifest.json`. A failing cell is recorded and the rest continue;
/// inspect [`RunManifest::failures`] for the exit status.
pub fn run_grid(
    grid: &GridSpec,
    opts: &RunOptions,
    progress: Option<Progress<'_>>,
) -> Result<RunManifest> {
    grid.validate()?;
    let data = load_dataset(&grid.dataset, &opts.data_dir)?;
    run_grid_on(grid, &data, opts, progress)
}

/// [`run_grid`] on already loaded data.
pub fn run_grid_on(
    grid: &GridSpec,
    data: &LoadedData,
    opts: &RunOptions,
    progress: Option<Progress<'_>>,
) -> Result<RunManifest> {
    fs::create_dir_all(&opts.out_dir)?;
    let cells = grid.cells();
    let mut manifest = RunManifest {
        name: grid.name.clone(),
        config_hash: grid.config_hash(),
        artifact_version: env!("CARGO_PKG_VERSION").to_string(),
        dataset: grid.dataset.id().to_string(),
        dataset_checksums: data.checksums.clone(),
        normalization: data.train.normalization().clone(),
        started_at: unix_now(),
        finished_at: None,
        seeds: grid.seeds.clone(),
        config: grid.clone(),
        cells: cells
            .iter()
            .map(|&cell| CellStatus {
                cell,
                state: CellState::Pending,
                error: None,
            })
            .collect(),
    };
    manifest.write(&opts.out_dir)?;

    let next = AtomicUsize::new(0);
    let outcomes: Mutex<Vec<Option<Result<()>>>> = Mutex::new(cells.iter().map(|_| None).collect());
    let jobs = opts.jobs.clamp(1, cells.len().max(1));
    std::thread::scope(|scope| {
        for _ in 0..jobs {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                let Some(&cell) = cells.get(i) else { break };
                let r = run_cell(grid, data, cell, opts, progress);
                outcomes.lock().expect("outcome lock")[i] = Some(r);
            });
        }
    });

    let outcomes = outcomes.into_inner().expect("outcome lock");
    for (status, outcome) in manifest.cells.iter_mut().zip(outcomes) {
        match outcome {
            Some(Ok(())) => status.state = CellState::Ok,
            Some(Err(e)) => {
                status.state = CellState::Failed;
                status.error = Some(e.to_string());
            }
            None => {
                status.state = CellState::Failed;
                status.error = Some("cell did not run".into());
            }
        }
    }
    manifest.finished_at = Some(unix_now());
    manifest.write(&opts.out_dir)?;
    Ok(manifest)
}

/// One parsed line of a `cycles.csv`.
#[derive(Clone, Debug, PartialEq, Deserialize)]
pub struct CycleRow {
    pub cycle: usize,
    pub seed: u64,
    pub strategy: String,
    pub loss: String,
    pub labeled_count: usize,
    pub test_accuracy: f64,
    pub l_ce: f64,
    pub l_co: f64,
    pub l_cm: f64,
    pub wall_time_s: f64,
}

pub fn read_cycles(path: &Path) -> Result<Vec<CycleRow>> {
    let mut reader = csv::Reader::from_path(path)
        .map_err(|e| Error::usage(format!("{}: {e}", path.display())))?;
    let header = reader
        .headers()
        .map_err(|e| Error::usage(format!("{}: {e}", path.display())))?
        .iter()
        .collect::<Vec<_>>()
        .join(",");
    if header != CSV_HEADER {
        return Err(Error::format(
            0,
            format!("{}: unexpected header `{header}`", path.display()),
        ));
    }
    reader
        .deserialize()
        .map(|r| r.map_err(|e| Error::usage(format!("{}: {e}", path.display()))))
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CurvePoint {
    pub cycle: usize,
    pub seeds: usize,
    pub mean: f64,
    /// Sample standard deviation over seeds; 0 for a single seed.
    pub std: f64,
}

/// Mean test accuracy per cycle of one (strategy, loss) cell.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Curve {
    pub strategy: String,
    pub loss: String,
    pub points: Vec<CurvePoint>,
}

impl Curve {
    pub fn label(&self) -> String {
        format!("{}/{}", self.strategy, self.loss)
    }
}

fn sorted_subdirs(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for entry in fs::read_dir(dir)? {
        let path = entry?.path();
        if path.is_dir() {
            out.push(path);
        }
    }
    out.sort();
    Ok(out)
}

/// Mean ± std of test accuracy over seeds for every cell under `results`.
pub fn aggregate(results: &Path) -> Result<Vec<Curve>> {
    if !results.is_dir() {
        return Err(Error::usage(format!(
            "{} is not a directory",
            results.display()
        )));
    }
    let mut curves = Vec::new();
    for strategy_dir in sorted_subdirs(results)? {
        for loss_dir in sorted_subdirs(&strategy_dir)? {
            let mut by_cycle: BTreeMap<usize, Vec<f64>> = BTreeMap::new();
            for seed_dir in sorted_subdirs(&loss_dir)? {
                let file = seed_dir.join("cycles.csv");
                if !file.is_file() {
                    continue;
                }
                for row in read_cycles(&file)? {
                    by_cycle
                        .entry(row.cycle)
                        .or_default()
                        .push(row.test_accuracy);
                }
            }
            if by_cycle.is_empty() {
                continue;
            }
            let name = |p: &Path| {
                p.file_name()
                    .unwrap_or_default()
                    .to_string_lossy()
                    .into_owned()
            };
            curves.push(Curve {
                strategy: name(&strategy_dir),
                loss: name(&loss_dir),
                points: by_cycle
                    .into_iter()
                    .map(|(cycle, v)| {
                        let (mean, std) = mean_std(&v);
                        CurvePoint {
                            cycle,
                            seeds: v.len(),
                            mean,
                            std,
                        }
                    })
                    .collect(),
            });
        }
    }
    if curves.is_empty() {
        return Err(Error::usage(format!(
            "no cycles.csv files found under {}",
            results.display()
        )));
    }
    Ok(curves)
}

fn mean_std(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    if v.len() < 2 {
        return (mean, 0.0);
    }
    let var = v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// Vertical extent of the chart: covers every mean ± std, padded by one point.
pub fn chart_y_range(curves: &[Curve]) -> (f64, f64) {
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for p in curves.iter().flat_map(|c| &c.points) {
        lo = lo.min(p.mean - p.std);
        hi = hi.max(p.mean + p.std);
    }
    ((lo - 1.0).floor(), (hi + 1.0).ceil())
}

const PALETTE: [&str; 8] = [
    "#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#17becf",
];

/// Renders the curves as an SVG line chart with ±std bands.
pub fn render_svg(curves: &[Curve], title: &str) -> String {
    const W: f64 = 760.0;
    const H: f64 = 480.0;
    const LEFT: f64 = 60.0;
    const RIGHT: f64 = 220.0;
    const TOP: f64 = 40.0;
    const BOTTOM: f64 = 50.0;
    let max_cycle = curves
        .iter()
        .flat_map(|c| &c.points)
        .map(|p| p.cycle)
        .max()
        .unwrap_or(0)
        .max(1) as f64;
    let (y_lo, y_hi) = chart_y_range(curves);
    let plot_w = W - LEFT - RIGHT;
    let plot_h = H - TOP - BOTTOM;
    let x = |c: f64| LEFT + plot_w * c / max_cycle;
    let y = |v: f64| TOP + plot_h * (1.0 - (v - y_lo) / (y_hi - y_lo));

    let mut s = String::new();
    s += &format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{W}\" height=\"{H}\" viewBox=\"0 0 {W} {H}\" font-family=\"sans-serif\" font-size=\"12\">\n"
    );
    s += &format!("<rect width=\"{W}\" height=\"{H}\" fill=\"white\"/>\n");
    s += &format!(
        "<text x=\"{}\" y=\"22\" text-anchor=\"middle\" font-size=\"15\">{}</text>\n",
        LEFT + plot_w / 2.0,
        xml_escape(title)
    );
    s += &format!(
        "<rect x=\"{LEFT}\" y=\"{TOP}\" width=\"{plot_w}\" height=\"{plot_h}\" fill=\"none\" stroke=\"#444\"/>\n"
    );
    for c in 0..=max_cycle as usize {
        let px = x(c as f64);
        s += &format!(
            "<line x1=\"{px:.2}\" y1=\"{}\" x2=\"{px:.2}\" y2=\"{}\" stroke=\"#444\"/>\n<text x=\"{px:.2}\" y=\"{}\" text-anchor=\"middle\">{c}</text>\n",
            TOP + plot_h,
            TOP + plot_h + 5.0,
            TOP + plot_h + 18.0
        );
    }
    let steps = 5;
    for i in 0..=steps {
        let v = y_lo + (y_hi - y_lo) * i as f64 / steps as f64;
        let py = y(v);
        s += &format!(
            "<line x1=\"{LEFT}\" y1=\"{py:.2}\" x2=\"{}\" y2=\"{py:.2}\" stroke=\"#ddd\"/>\n<text x=\"{}\" y=\"{:.2}\" text-anchor=\"end\">{v:.1}</text>\n",
            LEFT + plot_w,
            LEFT - 6.0,
            py + 4.0
        );
    }
    s += &format!(
        "<text x=\"{}\" y=\"{}\" text-anchor=\"middle\">cycle</text>\n",
        LEFT + plot_w / 2.0,
        H - 12.0
    );
    s += &format!(
        "<text transform=\"translate(16,{}) rotate(-90)\" text-anchor=\"middle\">test accuracy (%)</text>\n",
        TOP + plot_h / 2.0
    );
    for (i, curve) in curves.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        let upper: Vec<String> = curve
            .points
            .iter()
            .map(|p| format!("{:.2},{:.2}", x(p.cycle as f64), y(p.mean + p.std)))
            .collect();
        let lower: Vec<String> = curve
            .points
            .iter()
            .rev()
            .map(|p| format!("{:.2},{:.2}", x(p.cycle as f64), y(p.mean - p.std)))
            .collect();
        s += &format!(
            "<polygon points=\"{} {}\" fill=\"{color}\" fill-opacity=\"0.15\" stroke=\"none\"/>\n",
            upper.join(" "),
            lower.join(" ")
        );
        let line: Vec<String> = curve
            .points
            .iter()
            .map(|p| format!("{:.2},{:.2}", x(p.cycle as f64), y(p.mean)))
            .collect();
        s += &format!(
            "<polyline data-cell=\"{}\" points=\"{}\" fill=\"none\" stroke=\"{color}\" stroke-width=\"2\"/>\n",
            xml_escape(&curve.label()),
            line.join(" ")
        );
        let ly = TOP + 10.0 + 18.0 * i as f64;
        let lx = LEFT + plot_w + 15.0;
        s += &format!(
            "<line x1=\"{lx}\" y1=\"{ly}\" x2=\"{}\" y2=\"{ly}\" stroke=\"{color}\" stroke-width=\"2\"/>\n<text x=\"{}\" y=\"{}\">{}</text>\n",
            lx + 20.0,
            lx + 26.0,
            ly + 4.0,
            xml_escape(&curve.label())
        );
    }
    s += "</svg>\n";
    s
}

fn xml_escape(s: &str) -> String {
    s.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
        .replace('"', "&quot;")
}

/// Table written next to the chart.
pub fn curves_csv(curves: &[Curve]) -> String {
    let mut s = String::from("strategy,loss,cycle,seeds,mean_accuracy,std_accuracy\n");
    for c in curves {
        for p in &c.points {
            s += &format!(
                "{},{},{},{},{},{}\n",
                c.strategy, c.loss, p.cycle, p.seeds, p.mean, p.std
            );
        }
    }
    s
}

/// Aggregates `results` and writes `out` (SVG) plus the same path with a
/// `.csv` extension. Never modifies the results tree.
pub fn emit_chart(results: &Path, out: &Path) -> Result<Vec<Curve>> {
    let curves = aggregate(results)?;
    let title = out
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent)?;
    }
    fs::write(out, render_svg(&curves, &title))?;
    fs::write(out.with_extension("csv"), curves_csv(&curves))?;
    Ok(curves)
}

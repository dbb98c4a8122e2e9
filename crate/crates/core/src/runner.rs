//! Run configuration, pipeline stages and run directories.
//!
//! A run directory holds every artifact of one configuration:
//!
//! ```text
//! config.toml               materialised config, all defaults and seeds filled in
//! cohort.eosc               generated cohort
//! uncertainty.tsv           per-patient expected entropy, descending
//! partition.tsv             patient -> tertile
//! graph.dot, graph.tsv      patient similarity graph
//! schedule.tsv              noise schedule audit (t, beta, alpha_bar, snr)
//! metrics/<model>-<target>.tsv
//! models/<model>-<target>.ckpt
//! samples/<model>-<target>.png
//! combinations.tsv          every model x combination row
//! results.tsv, results.md   averages over the three combinations
//! manifest.json             sha256 of every other file plus the config echo
//! ```

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::baseline::{train_baseline_on, BaselineConfig, BASELINE_NAME};
use crate::cohort::{generate_cohort, load_cohort, save_cohort, Cohort, CohortSpec};
use crate::ddpm::{export_grid_png, train_ddpm_on, DdpmConfig, DDPM_NAME};
use crate::error::{Error, Result};
use crate::graph::{
    build_graph_with_bins, entropy_uniqueness_correlation, export_dot, graph_tsv, DEFAULT_BINS,
};
use crate::io::sha256_file;
use crate::mdan::{train_mdan_on, MdanConfig, MDAN_NAME};
use crate::metrics::{metrics_tsv, parse_metrics_tsv, results_table, MetricsRecord};
use crate::nn::{save_checkpoint, Checkpoint, TrainConfig};
use crate::partition::{
    average_results, enumerate_combinations, partition_tertiles, Domain, DomainPartition,
    ExperimentConfig, ExperimentData,
};
use crate::tensor::Tensor;
use crate::uncertainty::{
    fit_uncertainty_model, rank_patients, UncertaintyConfig, UncertaintyReport,
};

pub const CONFIG_FILE: &str = "config.toml";
pub const MANIFEST_FILE: &str = "manifest.json";
const COHORT_FILE: &str = "cohort.eosc";
const UNCERTAINTY_FILE: &str = "uncertainty.tsv";
const PARTITION_FILE: &str = "partition.tsv";
const SCHEDULE_FILE: &str = "schedule.tsv";
const COMBINATIONS_FILE: &str = "combinations.tsv";
const RESULTS_FILE: &str = "results.tsv";
const RESULTS_TABLE_FILE: &str = "results.md";

/// Images per sample grid.
const GRID_IMAGES: usize = 8;

/// One of the three trained models.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum ModelKind {
    Baseline,
    Mdan,
    Ddpm,
}

impl ModelKind {
    pub const ALL: [ModelKind; 3] = [ModelKind::Baseline, ModelKind::Mdan, ModelKind::Ddpm];

    pub fn slug(self) -> &'static str {
        match self {
            ModelKind::Baseline => "baseline",
            ModelKind::Mdan => "mdan",
            ModelKind::Ddpm => "ddpm",
        }
    }

    pub fn display_name(self) -> &'static str {
        match self {
            ModelKind::Baseline => BASELINE_NAME,
            ModelKind::Mdan => MDAN_NAME,
            ModelKind::Ddpm => DDPM_NAME,
        }
    }
}

/// Which models a run trains.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Experiment {
    Baseline,
    Mdan,
    Ddpm,
    #[default]
    All,
}

impl Experiment {
    pub fn models(self) -> Vec<ModelKind> {
        match self {
            Experiment::Baseline => vec![ModelKind::Baseline],
            Experiment::Mdan => vec![ModelKind::Mdan],
            Experiment::Ddpm => vec![ModelKind::Ddpm],
            Experiment::All => ModelKind::ALL.to_vec(),
        }
    }
}

impl FromStr for Experiment {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "baseline" => Ok(Experiment::Baseline),
            "mdan" => Ok(Experiment::Mdan),
            "ddpm" => Ok(Experiment::Ddpm),
            "all" => Ok(Experiment::All),
            _ => Err(Error::Config(format!(
                "unknown experiment `{s}` (expected baseline, mdan, ddpm or all)"
            ))),
        }
    }
}

impl fmt::Display for Experiment {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Experiment::Baseline => "baseline",
            Experiment::Mdan => "mdan",
            Experiment::Ddpm => "ddpm",
            Experiment::All => "all",
        })
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Scale {
    /// Applies the `[desk]` overrides.
    #[default]
    Desk,
    /// Uses patch size, chain length and epochs exactly as configured.
    Full,
}

/// Overrides applied at desk scale.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DeskOverrides {
    pub patch_size: usize,
    pub ddpm_steps: usize,
    /// Replaces `train.epochs` when set.
    pub epochs: Option<usize>,
}

impl Default for DeskOverrides {
    fn default() -> Self {
        Self {
            patch_size: 64,
            ddpm_steps: DdpmConfig::desk_scale().steps,
            epochs: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Seeds {
    /// Seeds the initialisation of every network; combination `i` adds `i`.
    pub model: u64,
    /// Seeds MC-dropout scoring of patients.
    pub scoring: u64,
}

impl Default for Seeds {
    fn default() -> Self {
        Self {
            model: 21,
            scoring: 3,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GraphConfig {
    /// Patients closer than this (Jensen-Shannon, nats) are joined.
    pub edge_threshold: f64,
    pub bins: usize,
}

impl Default for GraphConfig {
    fn default() -> Self {
        Self {
            edge_threshold: 0.05,
            bins: DEFAULT_BINS,
        }
    }
}

/// Everything a run depends on. Unknown keys are rejected at every level.
/// Seeds live in `cohort.seed`, `uncertainty.train.seed`, `train.seed` and
/// `[seeds]`.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub experiment: Experiment,
    pub scale: Scale,
    pub seeds: Seeds,
    pub desk: DeskOverrides,
    /// Existing cohort container to use instead of generating `[cohort]`.
    pub cohort_path: Option<PathBuf>,
    pub cohort: CohortSpec,
    pub uncertainty: UncertaintyConfig,
    pub graph: GraphConfig,
    pub train: TrainConfig,
    pub baseline: BaselineConfig,
    pub mdan: MdanConfig,
    pub ddpm: DdpmConfig,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml(&text).map_err(|e| match e {
            Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    /// Replaces the training and initialisation seeds; the cohort is kept.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seeds.model = seed;
        self.train.seed = seed;
        self
    }

    /// Applies the scale overrides and validates. Idempotent.
    pub fn materialise(mut self) -> Result<Self> {
        if self.scale == Scale::Desk {
            self.cohort.patch_size = self.desk.patch_size;
            self.ddpm.steps = self.desk.ddpm_steps;
            if let Some(e) = self.desk.epochs {
                self.train.epochs = e;
            }
        }
        self.validate()?;
        Ok(self)
    }

    pub fn validate(&self) -> Result<()> {
        let tag = |section: &'static str| move |e: Error| Error::Config(format!("[{section}] {e}"));
        self.cohort.validate().map_err(tag("cohort"))?;
        if let Some(p) = &self.cohort_path {
            if !p.is_file() {
                return Err(Error::Config(format!(
                    "cohort_path {} does not exist",
                    p.display()
                )));
            }
        }
        self.uncertainty
            .unet
            .validate()
            .map_err(tag("uncertainty.unet"))?;
        self.uncertainty
            .train
            .validate()
            .map_err(tag("uncertainty.train"))?;
        self.train.validate().map_err(tag("train"))?;
        self.baseline
            .unet
            .validate()
            .map_err(tag("baseline.unet"))?;
        self.mdan.validate().map_err(tag("mdan"))?;
        self.ddpm.schedule().map_err(tag("ddpm"))?;
        if self.uncertainty.mc_samples == 0 || self.baseline.mc_samples == 0 {
            return Err(Error::Config("mc_samples must be at least 1".into()));
        }
        if self.graph.bins < 2 {
            return Err(Error::Config("[graph] bins must be at least 2".into()));
        }
        if !(self.graph.edge_threshold >= 0.0) {
            return Err(Error::Config(
                "[graph] edge_threshold must be non-negative".into(),
            ));
        }
        Ok(())
    }

    /// Per-combination copy of `train` with its seed offset by the index.
    fn combinations(&self) -> Vec<ExperimentConfig> {
        enumerate_combinations(&self.train)
            .into_iter()
            .enumerate()
            .map(|(i, mut exp)| {
                exp.train.seed = exp.train.seed.wrapping_add(i as u64);
                exp
            })
            .collect()
    }

    fn model_seed(&self, combination: usize) -> u64 {
        self.seeds.model.wrapping_add(combination as u64)
    }
}

/// A run directory and the config it was created with.
pub struct RunDir {
    root: PathBuf,
    config: RunConfig,
}

impl RunDir {
    /// Opens `root`, creating it if needed. With `config` absent the echo in
    /// the directory is used; with both present they must agree.
    pub fn open(root: &Path, config: Option<RunConfig>) -> Result<Self> {
        let echo_path = root.join(CONFIG_FILE);
        let echo = if echo_path.exists() {
            Some(RunConfig::load(&echo_path)?.materialise()?)
        } else {
            None
        };
        let config = match (config, echo) {
            (Some(c), Some(e)) => {
                let c = c.materialise()?;
                if c != e {
                    return Err(Error::Config(format!(
                        "{} was created with a different config; use a fresh --out directory",
                        root.display()
                    )));
                }
                c
            }
            (Some(c), None) => c.materialise()?,
            (None, Some(e)) => e,
            (None, None) => RunConfig::default().materialise()?,
        };
        fs::create_dir_all(root)?;
        let dir = Self {
            root: root.to_path_buf(),
            config,
        };
        fs::write(&echo_path, dir.config.to_toml()?)?;
        Ok(dir)
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn config(&self) -> &RunConfig {
        &self.config
    }

    fn path(&self, name: &str) -> PathBuf {
        self.root.join(name)
    }

    fn write(&self, name: &str, contents: impl AsRef<[u8]>) -> Result<()> {
        let path = self.path(name);
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent)?;
        }
        fs::write(path, contents)?;
        Ok(())
    }

    fn require(&self, name: &str, stage: &str) -> Result<PathBuf> {
        let path = self.path(name);
        if path.exists() {
            Ok(path)
        } else {
            Err(Error::IncompleteRun(format!(
                "{} has no {name}; run `{stage}` first",
                self.root.display()
            )))
        }
    }

    fn read(&self, name: &str, stage: &str) -> Result<String> {
        Ok(fs::read_to_string(self.require(name, stage)?)?)
    }

    fn cohort(&self) -> Result<Cohort> {
        load_cohort(&self.require(COHORT_FILE, "gen-data")?)
    }

    fn report(&self) -> Result<UncertaintyReport> {
        UncertaintyReport::from_tsv(&self.read(UNCERTAINTY_FILE, "uncertainty")?)
    }

    fn partition(&self) -> Result<DomainPartition> {
        DomainPartition::from_tsv(&self.read(PARTITION_FILE, "partition")?)
    }
}

fn metrics_file(kind: ModelKind, target: Domain) -> String {
    format!("metrics/{}-{}.tsv", kind.slug(), target)
}

fn log(stage: &str, start: Instant, msg: impl fmt::Display) {
    eprintln!("[{stage} {:>7.1}s] {msg}", start.elapsed().as_secs_f64());
}

/// Generates the cohort, or copies the one named by `cohort_path`.
pub fn gen_data(dir: &RunDir) -> Result<()> {
    let start = Instant::now();
    let cohort = match &dir.config.cohort_path {
        Some(path) => load_cohort(path)?,
        None => generate_cohort(&dir.config.cohort)?,
    };
    save_cohort(&cohort, &dir.path(COHORT_FILE))?;
    log(
        "gen-data",
        start,
        format!(
            "{} patients, {} patches",
            cohort.patients.len(),
            cohort.total_patches()
        ),
    );
    write_manifest(dir)
}

/// Below this max/min ratio the tertiles carry no signal.
const FLAT_RATIO: f64 = 1.05;

pub fn uncertainty(dir: &RunDir) -> Result<UncertaintyReport> {
    let start = Instant::now();
    let cfg = &dir.config;
    let cohort = dir.cohort()?;
    let model = fit_uncertainty_model(&cohort, &cfg.uncertainty, cfg.seeds.model)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seeds.scoring);
    let report = rank_patients(&cohort, &model, cfg.uncertainty.mc_samples, &mut rng)?;
    dir.write(UNCERTAINTY_FILE, report.to_tsv())?;
    let ckpt = dir.path("models/uncertainty.ckpt");
    fs::create_dir_all(ckpt.parent().expect("has parent"))?;
    save_checkpoint(&Checkpoint::from(&model), &ckpt)?;
    match report.ratio() {
        Some(r) if r < FLAT_RATIO => log(
            "uncertainty",
            start,
            format!("warning: max/min entropy ratio {r:.4}; the scoring network barely separates patients"),
        ),
        Some(r) => log("uncertainty", start, format!("max/min entropy ratio {r:.2}")),
        None => log("uncertainty", start, "minimum entropy is zero"),
    }
    write_manifest(dir)?;
    Ok(report)
}

pub fn graph(dir: &RunDir) -> Result<()> {
    let start = Instant::now();
    let cfg = &dir.config.graph;
    let g = build_graph_with_bins(&dir.cohort()?, &dir.report()?, cfg.edge_threshold, cfg.bins)?;
    dir.write("graph.dot", export_dot(&g))?;
    dir.write("graph.tsv", graph_tsv(&g))?;
    let rho = entropy_uniqueness_correlation(&g)?;
    log(
        "graph",
        start,
        format!(
            "{} nodes, {} edges, spearman(entropy, uniqueness) {rho:.3}",
            g.nodes.len(),
            g.edges.len()
        ),
    );
    write_manifest(dir)
}

pub fn partition(dir: &RunDir) -> Result<DomainPartition> {
    let start = Instant::now();
    let p = partition_tertiles(&dir.report()?)?;
    dir.write(PARTITION_FILE, p.to_tsv())?;
    log(
        "partition",
        start,
        format!(
            "{} / {} / {} patients",
            p.low.len(),
            p.medium.len(),
            p.high.len()
        ),
    );
    write_manifest(dir)?;
    Ok(p)
}

/// Trains `kind` on all three combinations and writes their metrics,
/// checkpoints and sample grids.
pub fn train(dir: &RunDir, kind: ModelKind) -> Result<Vec<MetricsRecord>> {
    let start = Instant::now();
    let cfg = &dir.config;
    let cohort = dir.cohort()?;
    let partition = dir.partition()?;
    if kind == ModelKind::Ddpm {
        dir.write(SCHEDULE_FILE, cfg.ddpm.schedule()?.to_tsv())?;
    }
    let stage = format!("train-{}", kind.slug());
    let combos = cfg.combinations();
    let records = combos
        .par_iter()
        .enumerate()
        .map(|(i, exp)| {
            let data = ExperimentData::build(&cohort, &partition, exp)?;
            let record = train_one(dir, kind, &data, exp, cfg.model_seed(i))?;
            dir.write(
                &metrics_file(kind, exp.target),
                metrics_tsv(std::slice::from_ref(&record)),
            )?;
            log(
                &stage,
                start,
                format!(
                    "{}: precision {:.3} recall {:.3} fid {}",
                    exp.label(),
                    record.precision,
                    record.recall,
                    record.fid
                ),
            );
            Ok(record)
        })
        .collect::<Result<Vec<_>>>()?;
    write_manifest(dir)?;
    Ok(records)
}

fn train_one(
    dir: &RunDir,
    kind: ModelKind,
    data: &ExperimentData,
    exp: &ExperimentConfig,
    seed: u64,
) -> Result<MetricsRecord> {
    let cfg = &dir.config;
    let stem = format!("{}-{}", kind.slug(), exp.target);
    let ckpt = |suffix: &str, c: Checkpoint| {
        let path = dir.path(&format!("models/{stem}{suffix}.ckpt"));
        fs::create_dir_all(path.parent().expect("has parent"))?;
        save_checkpoint(&c, &path)
    };
    let grid = |images: &Tensor| -> Result<()> {
        let path = dir.path(&format!("samples/{stem}.png"));
        fs::create_dir_all(path.parent().expect("has parent"))?;
        let n = images.shape()[0].min(GRID_IMAGES);
        export_grid_png(&images.slice_outer(0, n)?, 4, &path)
    };
    match kind {
        ModelKind::Baseline => {
            let (model, record) = train_baseline_on(data, exp, &cfg.baseline, seed)?;
            ckpt("", Checkpoint::from(&model))?;
            Ok(record)
        }
        ModelKind::Mdan => {
            let run = train_mdan_on(data, exp, &cfg.mdan, seed)?;
            ckpt(
                "",
                Checkpoint {
                    config: run.model.config.unet.clone(),
                    seed: run.model.seed,
                    params: run.model.params.clone(),
                },
            )?;
            grid(&run.reconstructions)?;
            Ok(run.record)
        }
        ModelKind::Ddpm => {
            let run = train_ddpm_on(data, &cfg.ddpm, &exp.train, seed)?;
            ckpt("-generator", Checkpoint::from(&run.generator.eps_model))?;
            ckpt("-segmenter", Checkpoint::from(&run.segmenter.eps_model))?;
            grid(&run.samples)?;
            Ok(run.record)
        }
    }
}

const COMBINATIONS_HEADER: &str = "combination\tmodel\tfid\tprecision\trecall";

/// Collects the per-combination metrics of the configured models into
/// `combinations.tsv` and their averages into `results.tsv` / `results.md`.
pub fn evaluate(dir: &RunDir) -> Result<Vec<MetricsRecord>> {
    let cfg = &dir.config;
    let combos = cfg.combinations();
    let mut rows = format!("{COMBINATIONS_HEADER}\n");
    let mut averages = Vec::new();
    for kind in cfg.experiment.models() {
        let stage = format!("train-{}", kind.slug());
        let mut records = Vec::new();
        for exp in &combos {
            let text = dir.read(&metrics_file(kind, exp.target), &stage)?;
            let record = parse_metrics_tsv(&text)?
                .into_iter()
                .next()
                .ok_or_else(|| {
                    Error::IncompleteRun(format!("{} is empty", metrics_file(kind, exp.target)))
                })?;
            rows.push_str(&format!(
                "{}\t{}\t{}\t{}\t{}\n",
                exp.label(),
                record.model,
                record.fid,
                record.precision,
                record.recall
            ));
            records.push(record);
        }
        averages.push(average_results(&records)?);
    }
    dir.write(COMBINATIONS_FILE, rows)?;
    dir.write(RESULTS_FILE, metrics_tsv(&averages))?;
    dir.write(RESULTS_TABLE_FILE, results_table(&averages))?;
    write_manifest(dir)?;
    Ok(averages)
}

/// Every stage in order, training only the configured models.
pub fn run_all(dir: &RunDir) -> Result<Vec<MetricsRecord>> {
    gen_data(dir)?;
    uncertainty(dir)?;
    graph(dir)?;
    partition(dir)?;
    dir.write(SCHEDULE_FILE, dir.config.ddpm.schedule()?.to_tsv())?;
    for kind in dir.config.experiment.models() {
        train(dir, kind)?;
    }
    evaluate(dir)
}

/// Text summary of a finished run: averaged table, per-combination rows and
/// the schedule audit.
pub fn report(root: &Path) -> Result<String> {
    let dir = RunDir {
        root: root.to_path_buf(),
        config: RunConfig::load(&root.join(CONFIG_FILE)).map_err(|_| {
            Error::IncompleteRun(format!("{} has no readable {CONFIG_FILE}", root.display()))
        })?,
    };
    let results = parse_metrics_tsv(&dir.read(RESULTS_FILE, "evaluate")?)?;
    let combos = dir.read(COMBINATIONS_FILE, "evaluate")?;
    let mut out = String::new();
    out.push_str("Averaged over the three source/target combinations\n\n");
    out.push_str(&results_table(&results));
    out.push_str("\nPer combination\n\n");
    for line in combos.lines().skip(1) {
        let cols: Vec<&str> = line.split('\t').collect();
        if let [combo, model, fid, p, r] = cols[..] {
            let num = |s: &str| {
                s.parse::<f64>()
                    .map(|v| format!("{v:.3}"))
                    .unwrap_or_else(|_| s.to_string())
            };
            out.push_str(&format!(
                "{combo:<20} {model:<10} fid {:<7} precision {} recall {}\n",
                num(fid),
                num(p),
                num(r)
            ));
        }
    }
    if let Ok(schedule) = dir.config.ddpm.schedule() {
        let t = schedule.steps;
        out.push_str(&format!(
            "\nNoise schedule: T = {t}, alpha_bar(T) = {:.3e}, SNR(1) = {:.3e}, SNR(T) = {:.3e}\n",
            schedule.alpha_bar_at(t)?,
            crate::ddpm::snr(&schedule, 1)?,
            crate::ddpm::snr(&schedule, t)?,
        ));
    }
    Ok(out)
}

#[derive(Debug, Serialize, Deserialize)]
pub struct Manifest {
    pub version: String,
    pub config: RunConfig,
    /// Relative path (forward slashes) to hex sha256.
    pub files: BTreeMap<String, String>,
}

fn walk(root: &Path, dir: &Path, out: &mut BTreeMap<String, String>) -> Result<()> {
    let mut entries = fs::read_dir(dir)?.collect::<std::io::Result<Vec<_>>>()?;
    entries.sort_by_key(|e| e.file_name());
    for e in entries {
        let path = e.path();
        if path.is_dir() {
            walk(root, &path, out)?;
            continue;
        }
        let rel = path
            .strip_prefix(root)
            .expect("walked under root")
            .components()
            .map(|c| c.as_os_str().to_string_lossy())
            .collect::<Vec<_>>()
            .join("/");
        if rel != MANIFEST_FILE {
            out.insert(rel, sha256_file(&path)?);
        }
    }
    Ok(())
}

/// Rewrites `manifest.json` from the current directory contents.
pub fn write_manifest(dir: &RunDir) -> Result<()> {
    let mut files = BTreeMap::new();
    walk(&dir.root, &dir.root, &mut files)?;
    let manifest = Manifest {
        version: env!("CARGO_PKG_VERSION").to_string(),
        config: dir.config.clone(),
        files,
    };
    let json = serde_json::to_string_pretty(&manifest).map_err(|e| Error::Config(e.to_string()))?;
    dir.write(MANIFEST_FILE, json + "\n")
}

pub fn read_manifest(root: &Path) -> Result<Manifest> {
    let text = fs::read_to_string(root.join(MANIFEST_FILE))
        .map_err(|_| Error::IncompleteRun(format!("{} has no {MANIFEST_FILE}", root.display())))?;
    serde_json::from_str(&text).map_err(|e| Error::Corrupt(format!("{MANIFEST_FILE}: {e}")))
}

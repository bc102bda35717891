//! Experiment orchestration: configuration, the four training arms,
//! metrics persistence, and report generation.
//!
//! Configuration is a flat key-value text file with dotted keys
//! (`optimizer.eta = 0.05`), overridable from the command line; the full
//! key list is in the README. The four arms:
//!
//! - `full` — lossless halo exchange every epoch (fixed ratio 1);
//! - `no-comm` — halo buffers zero-filled, nothing sent (the infinite-ratio
//!   limit of the codec; local operator rows keep their degrees);
//! - `fixed` — constant ratio `scheduler.c_max`;
//! - `varco` — the configured decreasing schedule (clamped-linear by
//!   default).
//!
//! Metrics CSV schema (one row per epoch, stable):
//! `epoch,ratio,train_loss,val_acc,test_acc,fwd_floats,bwd_floats,param_floats,cum_floats`.

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use crate::codec::{Codec, MasterKey};
use crate::error::{Error, Result};
use crate::graph::{build_gso, synth_sbm, Graph, GsoKind};
use crate::io as fileio;
use crate::model::{spectral_clip, LossKind, ModelParams, Nonlinearity};
use crate::partition::{
    cross_edge_stats, partition_greedy_bfs, partition_random, CrossEdgeStats, Partition,
};
use crate::runtime::{ExecMode, MetricsRecord, RuntimeConfig, Trainer, Transport};
use crate::sched::{SchedKind, SchedulerSpec};

pub const METRICS_HEADER: &str =
    "epoch,ratio,train_loss,val_acc,test_acc,fwd_floats,bwd_floats,param_floats,cum_floats";

/// Which experiment arm a training run belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Arm {
    Full,
    NoComm,
    Fixed,
    Varco,
}

impl Arm {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "full" => Ok(Arm::Full),
            "no-comm" => Ok(Arm::NoComm),
            "fixed" => Ok(Arm::Fixed),
            "varco" => Ok(Arm::Varco),
            other => Err(Error::Config(format!("unknown arm {other:?}"))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Arm::Full => "full",
            Arm::NoComm => "no-comm",
            Arm::Fixed => "fixed",
            Arm::Varco => "varco",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum DatasetSpec {
    Sbm {
        n: usize,
        classes: usize,
        p_in: f64,
        p_out: f64,
        feat_dim: usize,
        noise: f64,
        seed: u64,
    },
    Files {
        edges: PathBuf,
        features: PathBuf,
        labels: PathBuf,
        masks: Option<PathBuf>,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PartitionMethod {
    Random,
    GreedyBfs,
    Import,
}

impl PartitionMethod {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "random" => Ok(PartitionMethod::Random),
            "bfs" => Ok(PartitionMethod::GreedyBfs),
            "import" => Ok(PartitionMethod::Import),
            other => Err(Error::Config(format!("unknown partition method {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PartitionSpec {
    pub method: PartitionMethod,
    pub workers: usize,
    pub seed: u64,
    pub import_path: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelSpec {
    pub layers: usize,
    pub hidden: usize,
    pub taps: usize,
    pub nonlinearity: Nonlinearity,
    pub loss: LossKind,
    pub init_seed: u64,
    /// When set, rescale layers to this spectral bound after init and after
    /// every averaging step.
    pub clip: Option<f64>,
}

/// A fully resolved training run.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub dataset: DatasetSpec,
    pub partition: PartitionSpec,
    pub model: ModelSpec,
    pub eta: f64,
    pub epochs: usize,
    pub sched_kind: SchedKind,
    pub c_max: f64,
    pub c_min: f64,
    pub slope: f64,
    pub sched_step: f64,
    pub sched_base: f64,
    pub master_key: MasterKey,
    pub unbiased_codec: bool,
    pub arm: Arm,
    pub exec: ExecMode,
    pub out_dir: PathBuf,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            dataset: DatasetSpec::Sbm {
                n: 1000,
                classes: 4,
                p_in: 0.04,
                p_out: 0.004,
                feat_dim: 16,
                noise: 1.5,
                seed: 1,
            },
            partition: PartitionSpec {
                method: PartitionMethod::Random,
                workers: 4,
                seed: 1,
                import_path: None,
            },
            model: ModelSpec {
                layers: 3,
                hidden: 32,
                taps: 2,
                nonlinearity: Nonlinearity::Relu,
                loss: LossKind::CrossEntropy,
                init_seed: 7,
                clip: None,
            },
            eta: 0.7,
            epochs: 300,
            sched_kind: SchedKind::ClampedLinear,
            c_max: 128.0,
            c_min: 1.0,
            slope: 6.0,
            sched_step: 0.01,
            sched_base: 2.0,
            master_key: MasterKey::from_u64(0xC0FFEE),
            unbiased_codec: false,
            arm: Arm::Varco,
            exec: ExecMode::Sequential,
            out_dir: PathBuf::from("out"),
        }
    }
}

/// Parse a flat `key = value` file (comments with `#`, later keys win).
pub fn parse_config_text(text: &str, source: &str) -> Result<Vec<(String, String)>> {
    let mut pairs = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let trimmed = line.trim();
        if trimmed.is_empty() || trimmed.starts_with('#') {
            continue;
        }
        let Some((key, value)) = trimmed.split_once('=') else {
            return Err(Error::format(
                source,
                lineno + 1,
                format!("expected 'key = value', got {trimmed:?}"),
            ));
        };
        pairs.push((key.trim().to_string(), value.trim().to_string()));
    }
    Ok(pairs)
}

impl TrainConfig {
    /// Build from an optional config file plus `key=value` overrides
    /// (overrides win). Unknown keys are rejected.
    pub fn resolve(file: Option<&Path>, overrides: &[(String, String)]) -> Result<TrainConfig> {
        let mut map: BTreeMap<String, String> = BTreeMap::new();
        if let Some(path) = file {
            let text = fs::read_to_string(path)?;
            for (k, v) in parse_config_text(&text, &path.display().to_string())? {
                map.insert(k, v);
            }
        }
        for (k, v) in overrides {
            map.insert(k.clone(), v.clone());
        }
        TrainConfig::from_map(map)
    }

    pub fn from_map(mut map: BTreeMap<String, String>) -> Result<TrainConfig> {
        let mut cfg = TrainConfig::default();

        fn take(map: &mut BTreeMap<String, String>, key: &str) -> Option<String> {
            map.remove(key)
        }
        fn parse_num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
            v.parse()
                .map_err(|_| Error::Config(format!("bad value for {key}: {v:?}")))
        }

        let kind = take(&mut map, "dataset.kind").unwrap_or_else(|| "sbm".into());
        match kind.as_str() {
            "sbm" => {
                let DatasetSpec::Sbm {
                    mut n,
                    mut classes,
                    mut p_in,
                    mut p_out,
                    mut feat_dim,
                    mut noise,
                    mut seed,
                } = cfg.dataset
                else {
                    unreachable!()
                };
                if let Some(v) = take(&mut map, "dataset.n") {
                    n = parse_num("dataset.n", &v)?;
                }
                if let Some(v) = take(&mut map, "dataset.classes") {
                    classes = parse_num("dataset.classes", &v)?;
                }
                if let Some(v) = take(&mut map, "dataset.p_in") {
                    p_in = parse_num("dataset.p_in", &v)?;
                }
                if let Some(v) = take(&mut map, "dataset.p_out") {
                    p_out = parse_num("dataset.p_out", &v)?;
                }
                if let Some(v) = take(&mut map, "dataset.feat_dim") {
                    feat_dim = parse_num("dataset.feat_dim", &v)?;
                }
                if let Some(v) = take(&mut map, "dataset.noise") {
                    noise = parse_num("dataset.noise", &v)?;
                }
                if let Some(v) = take(&mut map, "dataset.seed") {
                    seed = parse_num("dataset.seed", &v)?;
                }
                cfg.dataset = DatasetSpec::Sbm {
                    n,
                    classes,
                    p_in,
                    p_out,
                    feat_dim,
                    noise,
                    seed,
                };
            }
            "files" => {
                let dir = take(&mut map, "dataset.dir").map(PathBuf::from);
                let from_dir = |name: &str| dir.as_ref().map(|d| d.join(name));
                let edges = take(&mut map, "dataset.edges")
                    .map(PathBuf::from)
                    .or_else(|| from_dir("edges.txt"))
                    .ok_or_else(|| {
                        Error::Config("dataset.edges (or dataset.dir) required".into())
                    })?;
                let features = take(&mut map, "dataset.features")
                    .map(PathBuf::from)
                    .or_else(|| from_dir("features.csv"))
                    .ok_or_else(|| Error::Config("dataset.features required".into()))?;
                let labels = take(&mut map, "dataset.labels")
                    .map(PathBuf::from)
                    .or_else(|| from_dir("labels.csv"))
                    .ok_or_else(|| Error::Config("dataset.labels required".into()))?;
                let masks = take(&mut map, "dataset.masks")
                    .map(PathBuf::from)
                    .or_else(|| from_dir("masks.txt").filter(|p| p.exists()));
                cfg.dataset = DatasetSpec::Files {
                    edges,
                    features,
                    labels,
                    masks,
                };
            }
            other => return Err(Error::Config(format!("unknown dataset.kind {other:?}"))),
        }

        if let Some(v) = take(&mut map, "partition.method") {
            cfg.partition.method = PartitionMethod::parse(&v)?;
        }
        if let Some(v) = take(&mut map, "partition.workers") {
            cfg.partition.workers = parse_num("partition.workers", &v)?;
        }
        if let Some(v) = take(&mut map, "partition.seed") {
            cfg.partition.seed = parse_num("partition.seed", &v)?;
        }
        if let Some(v) = take(&mut map, "partition.path") {
            cfg.partition.import_path = Some(PathBuf::from(v));
        }

        if let Some(v) = take(&mut map, "model.layers") {
            cfg.model.layers = parse_num("model.layers", &v)?;
        }
        if let Some(v) = take(&mut map, "model.hidden") {
            cfg.model.hidden = parse_num("model.hidden", &v)?;
        }
        if let Some(v) = take(&mut map, "model.taps") {
            cfg.model.taps = parse_num("model.taps", &v)?;
        }
        if let Some(v) = take(&mut map, "model.nonlinearity") {
            cfg.model.nonlinearity = Nonlinearity::parse(&v)?;
        }
        if let Some(v) = take(&mut map, "model.loss") {
            cfg.model.loss = LossKind::parse(&v)?;
        }
        if let Some(v) = take(&mut map, "model.init_seed") {
            cfg.model.init_seed = parse_num("model.init_seed", &v)?;
        }
        if let Some(v) = take(&mut map, "model.clip") {
            cfg.model.clip = Some(parse_num("model.clip", &v)?);
        }

        if let Some(v) = take(&mut map, "optimizer.eta") {
            cfg.eta = parse_num("optimizer.eta", &v)?;
        }
        if let Some(v) = take(&mut map, "optimizer.epochs") {
            cfg.epochs = parse_num("optimizer.epochs", &v)?;
        }

        if let Some(v) = take(&mut map, "scheduler.kind") {
            cfg.sched_kind = SchedKind::parse(&v)?;
        }
        if let Some(v) = take(&mut map, "scheduler.c_max") {
            cfg.c_max = parse_num("scheduler.c_max", &v)?;
        }
        if let Some(v) = take(&mut map, "scheduler.c_min") {
            cfg.c_min = parse_num("scheduler.c_min", &v)?;
        }
        if let Some(v) = take(&mut map, "scheduler.slope") {
            cfg.slope = parse_num("scheduler.slope", &v)?;
        }
        if let Some(v) = take(&mut map, "scheduler.step") {
            cfg.sched_step = parse_num("scheduler.step", &v)?;
        }
        if let Some(v) = take(&mut map, "scheduler.base") {
            cfg.sched_base = parse_num("scheduler.base", &v)?;
        }

        if let Some(v) = take(&mut map, "codec.master_key") {
            cfg.master_key = MasterKey::from_hex(&v)?;
        }
        if let Some(v) = take(&mut map, "codec.unbiased") {
            cfg.unbiased_codec = match v.as_str() {
                "true" => true,
                "false" => false,
                other => return Err(Error::Config(format!("codec.unbiased: {other:?}"))),
            };
        }

        if let Some(v) = take(&mut map, "mode.arm") {
            cfg.arm = Arm::parse(&v)?;
        }
        if let Some(v) = take(&mut map, "mode.exec") {
            cfg.exec = ExecMode::parse(&v)?;
        }
        if let Some(v) = take(&mut map, "output.dir") {
            cfg.out_dir = PathBuf::from(v);
        }

        if let Some((key, _)) = map.into_iter().next() {
            return Err(Error::Config(format!("unknown config key {key:?}")));
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::Config("optimizer.epochs must be >= 1".into()));
        }
        if !(self.eta > 0.0) {
            return Err(Error::Config("optimizer.eta must be > 0".into()));
        }
        if self.model.layers == 0 || self.model.taps == 0 || self.model.hidden == 0 {
            return Err(Error::Config("model dimensions must be positive".into()));
        }
        if let DatasetSpec::Sbm { p_in, p_out, .. } = self.dataset {
            if !(0.0..=1.0).contains(&p_in) || !(0.0..=1.0).contains(&p_out) || p_out > p_in {
                return Err(Error::Config(format!(
                    "need 0 <= p_out <= p_in <= 1, got p_in={p_in} p_out={p_out}"
                )));
            }
        }
        if let DatasetSpec::Files {
            edges,
            features,
            labels,
            masks,
        } = &self.dataset
        {
            for p in [Some(edges), Some(features), Some(labels), masks.as_ref()]
                .into_iter()
                .flatten()
            {
                if !p.exists() {
                    return Err(Error::Config(format!(
                        "dataset file {} not found",
                        p.display()
                    )));
                }
            }
        }
        if self.partition.method == PartitionMethod::Import {
            match &self.partition.import_path {
                None => {
                    return Err(Error::Config(
                        "partition.path required for partition.method = import".into(),
                    ))
                }
                Some(p) if !p.exists() => {
                    return Err(Error::Config(format!(
                        "partition file {} not found",
                        p.display()
                    )))
                }
                _ => {}
            }
        }
        Ok(())
    }

    /// The ratio schedule this arm actually trains with.
    pub fn scheduler(&self) -> SchedulerSpec {
        match self.arm {
            // full communication is the fixed r = 1 endpoint; the no-comm
            // arm never consults the ratio
            Arm::Full | Arm::NoComm => SchedulerSpec::fixed(1.0, self.epochs),
            Arm::Fixed => SchedulerSpec::fixed(self.c_max, self.epochs),
            Arm::Varco => SchedulerSpec {
                kind: self.sched_kind,
                c_max: self.c_max,
                c_min: self.c_min,
                slope: self.slope,
                step: self.sched_step,
                base: self.sched_base,
                horizon: self.epochs,
            },
        }
    }

    pub fn model_dims(&self, feat_dim: usize, classes: usize) -> Vec<usize> {
        let mut dims = vec![feat_dim];
        for _ in 0..self.model.layers.saturating_sub(1) {
            dims.push(self.model.hidden);
        }
        dims.push(classes);
        dims
    }
}

/// Materialize the configured dataset.
pub fn build_graph(cfg: &TrainConfig) -> Result<Graph> {
    match &cfg.dataset {
        DatasetSpec::Sbm {
            n,
            classes,
            p_in,
            p_out,
            feat_dim,
            noise,
            seed,
        } => synth_sbm(*n, *classes, *p_in, *p_out, *feat_dim, *noise, *seed),
        DatasetSpec::Files {
            edges,
            features,
            labels,
            masks,
        } => match masks {
            Some(m) => fileio::load_graph_with_masks(edges, features, labels, m),
            None => fileio::load_graph(edges, features, labels),
        },
    }
}

pub fn build_partition(cfg: &TrainConfig, g: &Graph) -> Result<Partition> {
    match cfg.partition.method {
        PartitionMethod::Random => partition_random(g, cfg.partition.workers, cfg.partition.seed),
        PartitionMethod::GreedyBfs => {
            partition_greedy_bfs(g, cfg.partition.workers, cfg.partition.seed)
        }
        PartitionMethod::Import => {
            let path = cfg.partition.import_path.as_ref().unwrap();
            fileio::import_partition(g, path)
        }
    }
}

/// Run the configured training arm; returns one record per epoch and the
/// final model. Pure in-memory counterpart of [`cmd_train`].
pub fn run_training(
    cfg: &TrainConfig,
    g: &Graph,
    p: &Partition,
) -> Result<(Vec<MetricsRecord>, ModelParams)> {
    let gso = build_gso(g, GsoKind::MeanNeighbor);
    let dims = cfg.model_dims(g.feat_dim(), g.num_classes());
    let mut params = ModelParams::init_uniform(dims, cfg.model.taps, cfg.model.init_seed)?;
    if let Some(bound) = cfg.model.clip {
        params = spectral_clip(&params, bound)?;
    }
    let mut codec = Codec::new(cfg.master_key);
    codec.unbiased = cfg.unbiased_codec;
    let runtime_cfg = RuntimeConfig {
        nonlinearity: cfg.model.nonlinearity,
        loss: cfg.model.loss,
        eta: cfg.eta,
        no_comm: cfg.arm == Arm::NoComm,
        exec: cfg.exec,
        transport: Transport::from_env()?,
    };
    let mut trainer = Trainer::new(g, p, &gso, params, cfg.scheduler(), codec, runtime_cfg)?;
    let mut records = Vec::with_capacity(cfg.epochs);
    for t in 0..cfg.epochs {
        records.push(trainer.run_epoch(t)?);
        if let Some(bound) = cfg.model.clip {
            let clipped = spectral_clip(trainer.params(), bound)?;
            trainer.set_params(clipped);
        }
    }
    Ok((records, trainer.params().clone()))
}

fn format_ratio(r: f64) -> String {
    if r.is_infinite() {
        "inf".into()
    } else {
        format!("{r}")
    }
}

pub fn write_metrics_csv(path: &Path, records: &[MetricsRecord]) -> Result<()> {
    let mut w = BufWriter::new(fs::File::create(path)?);
    writeln!(w, "{METRICS_HEADER}")?;
    for r in records {
        writeln!(
            w,
            "{},{},{},{},{},{},{},{},{}",
            r.epoch,
            format_ratio(r.ratio),
            r.train_loss,
            r.val_acc,
            r.test_acc,
            r.fwd_floats,
            r.bwd_floats,
            r.param_floats,
            r.cum_floats
        )?;
    }
    Ok(())
}

pub fn read_metrics_csv(path: &Path) -> Result<Vec<MetricsRecord>> {
    let text = fs::read_to_string(path)?;
    let name = path.display().to_string();
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, header)) if header == METRICS_HEADER => {}
        _ => return Err(Error::format(name, 1, "bad or missing metrics header")),
    }
    let mut records = Vec::new();
    for (lineno, line) in lines {
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 9 {
            return Err(Error::format(
                name,
                lineno + 1,
                format!("{} fields, expected 9", fields.len()),
            ));
        }
        let parse_f = |i: usize| -> Result<f64> {
            fields[i].parse().map_err(|_| {
                Error::format(&name, lineno + 1, format!("bad float {:?}", fields[i]))
            })
        };
        let parse_u = |i: usize| -> Result<u64> {
            fields[i].parse().map_err(|_| {
                Error::format(&name, lineno + 1, format!("bad count {:?}", fields[i]))
            })
        };
        records.push(MetricsRecord {
            epoch: fields[0]
                .parse()
                .map_err(|_| Error::format(&name, lineno + 1, "bad epoch"))?,
            ratio: parse_f(1)?,
            train_loss: parse_f(2)?,
            val_acc: parse_f(3)?,
            test_acc: parse_f(4)?,
            fwd_floats: parse_u(5)?,
            bwd_floats: parse_u(6)?,
            param_floats: parse_u(7)?,
            cum_floats: parse_u(8)?,
        });
    }
    Ok(records)
}

/// Outcome of [`cmd_train`].
pub struct TrainOutcome {
    pub records: Vec<MetricsRecord>,
    pub metrics_path: PathBuf,
    pub checkpoint_path: PathBuf,
}

/// Full training pipeline: build dataset and partition, run the arm, write
/// `metrics.csv` and the final checkpoint into the output directory.
pub fn cmd_train(cfg: &TrainConfig) -> Result<TrainOutcome> {
    let g = build_graph(cfg)?;
    let p = build_partition(cfg, &g)?;
    let (records, params) = run_training(cfg, &g, &p)?;
    fs::create_dir_all(&cfg.out_dir)?;
    let metrics_path = cfg.out_dir.join("metrics.csv");
    write_metrics_csv(&metrics_path, &records)?;
    let checkpoint_path = cfg.out_dir.join("params.ckpt");
    fileio::save_checkpoint(&checkpoint_path, &params)?;
    Ok(TrainOutcome {
        records,
        metrics_path,
        checkpoint_path,
    })
}

/// Synthetic-dataset writer: `edges.txt`, `features.csv`, `labels.csv`, and
/// a `masks.txt` sidecar so a reload reproduces the graph exactly.
#[allow(clippy::too_many_arguments)]
pub fn cmd_synth(
    out_dir: &Path,
    n: usize,
    classes: usize,
    p_in: f64,
    p_out: f64,
    feat_dim: usize,
    noise: f64,
    seed: u64,
) -> Result<Graph> {
    let g = synth_sbm(n, classes, p_in, p_out, feat_dim, noise, seed)?;
    fs::create_dir_all(out_dir)?;
    fileio::write_edge_list(&out_dir.join("edges.txt"), &g)?;
    fileio::write_features_csv(&out_dir.join("features.csv"), g.features())?;
    fileio::write_labels_csv(&out_dir.join("labels.csv"), g.labels())?;
    fileio::write_masks(&out_dir.join("masks.txt"), &g)?;
    Ok(g)
}

/// Partition a graph and write the assignment file; returns the partition
/// and its cut statistics.
pub fn cmd_partition(
    g: &Graph,
    method: PartitionMethod,
    workers: usize,
    seed: u64,
    import_file: Option<&Path>,
    out_file: &Path,
) -> Result<(Partition, CrossEdgeStats)> {
    let p = match method {
        PartitionMethod::Random => partition_random(g, workers, seed)?,
        PartitionMethod::GreedyBfs => partition_greedy_bfs(g, workers, seed)?,
        PartitionMethod::Import => {
            let path = import_file
                .ok_or_else(|| Error::Config("import method needs a partition file".into()))?;
            fileio::import_partition(g, path)?
        }
    };
    fileio::write_partition_file(out_file, &p)?;
    let stats = cross_edge_stats(&p);
    Ok((p, stats))
}

/// One arm's metrics under a label (the file stem, for loaded CSVs).
#[derive(Debug, Clone)]
pub struct ArmRun {
    pub name: String,
    pub records: Vec<MetricsRecord>,
}

/// Final-epoch summary row.
#[derive(Debug, Clone)]
pub struct ArmSummary {
    pub name: String,
    pub epochs: usize,
    pub final_train_loss: f64,
    pub final_val_acc: f64,
    pub final_test_acc: f64,
    pub total_floats: u64,
}

/// Comparison table plus accuracy-vs-budget curves on a shared grid.
#[derive(Debug, Clone)]
pub struct Report {
    pub summaries: Vec<ArmSummary>,
    /// Budget grid (cumulative floats).
    pub budgets: Vec<f64>,
    /// `curves[arm][grid_point]`: test accuracy achieved within the budget
    /// (0 before the arm's first epoch completes).
    pub curves: Vec<Vec<f64>>,
    /// `dominance[a][b]`: fraction of grid points where arm `a`'s accuracy
    /// is >= arm `b`'s.
    pub dominance: Vec<Vec<f64>>,
}

/// Test accuracy achieved within each budget, by step interpolation over
/// the run's cumulative-float column.
pub fn accuracy_at_budgets(records: &[MetricsRecord], budgets: &[f64]) -> Vec<f64> {
    let mut out = Vec::with_capacity(budgets.len());
    for &b in budgets {
        let mut acc = 0.0;
        for r in records {
            if (r.cum_floats as f64) <= b {
                acc = r.test_acc;
            } else {
                break;
            }
        }
        out.push(acc);
    }
    out
}

/// Build the comparison report over a shared budget grid spanning from the
/// cheapest first epoch to the most expensive full run.
pub fn build_report(runs: &[ArmRun], grid_points: usize) -> Result<Report> {
    if runs.is_empty() || runs.iter().any(|r| r.records.is_empty()) {
        return Err(Error::InvalidArgument("report needs nonempty runs".into()));
    }
    let summaries = runs
        .iter()
        .map(|r| {
            let last = r.records.last().unwrap();
            ArmSummary {
                name: r.name.clone(),
                epochs: r.records.len(),
                final_train_loss: last.train_loss,
                final_val_acc: last.val_acc,
                final_test_acc: last.test_acc,
                total_floats: last.cum_floats,
            }
        })
        .collect::<Vec<_>>();

    let lo = runs
        .iter()
        .map(|r| r.records[0].cum_floats as f64)
        .fold(f64::INFINITY, f64::min);
    let hi = runs
        .iter()
        .map(|r| r.records.last().unwrap().cum_floats as f64)
        .fold(0.0, f64::max);
    let grid_points = grid_points.max(2);
    let budgets: Vec<f64> = (0..grid_points)
        .map(|i| lo + (hi - lo) * i as f64 / (grid_points - 1) as f64)
        .collect();

    let curves: Vec<Vec<f64>> = runs
        .iter()
        .map(|r| accuracy_at_budgets(&r.records, &budgets))
        .collect();

    let mut dominance = vec![vec![0.0; runs.len()]; runs.len()];
    for a in 0..runs.len() {
        for b in 0..runs.len() {
            let wins = budgets
                .iter()
                .enumerate()
                .filter(|&(i, _)| curves[a][i] >= curves[b][i])
                .count();
            dominance[a][b] = wins as f64 / budgets.len() as f64;
        }
    }
    Ok(Report {
        summaries,
        budgets,
        curves,
        dominance,
    })
}

/// Load metrics CSVs (arm name = file stem) and build the report; when
/// `grid_out` is given, write the budget-grid curves as CSV.
pub fn cmd_report(
    paths: &[PathBuf],
    grid_points: usize,
    grid_out: Option<&Path>,
) -> Result<Report> {
    if paths.is_empty() {
        return Err(Error::Config("report needs at least one metrics CSV".into()));
    }
    let mut runs = Vec::with_capacity(paths.len());
    for p in paths {
        let name = p
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| p.display().to_string());
        runs.push(ArmRun {
            name,
            records: read_metrics_csv(p)?,
        });
    }
    let report = build_report(&runs, grid_points)?;
    if let Some(out) = grid_out {
        let mut w = BufWriter::new(fs::File::create(out)?);
        let names: Vec<&str> = report.summaries.iter().map(|s| s.name.as_str()).collect();
        writeln!(w, "budget,{}", names.join(","))?;
        for (i, b) in report.budgets.iter().enumerate() {
            let row: Vec<String> = report.curves.iter().map(|c| format!("{}", c[i])).collect();
            writeln!(w, "{b},{}", row.join(","))?;
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::partition::Partition;

    fn tiny_cfg() -> TrainConfig {
        let mut cfg = TrainConfig::default();
        cfg.dataset = DatasetSpec::Sbm {
            n: 60,
            classes: 2,
            p_in: 0.3,
            p_out: 0.02,
            feat_dim: 4,
            noise: 0.3,
            seed: 3,
        };
        cfg.partition.workers = 3;
        cfg.model.hidden = 6;
        cfg.model.nonlinearity = Nonlinearity::Tanh;
        cfg.epochs = 6;
        cfg
    }

    #[test]
    fn config_file_and_overrides() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("train.cfg");
        fs::write(
            &path,
            "# experiment\nmode.arm = fixed\nscheduler.c_max = 4\noptimizer.epochs = 20\n",
        )
        .unwrap();
        let cfg =
            TrainConfig::resolve(Some(&path), &[("optimizer.epochs".into(), "10".into())])
                .unwrap();
        assert_eq!(cfg.arm, Arm::Fixed);
        assert_eq!(cfg.c_max, 4.0);
        assert_eq!(cfg.epochs, 10); // override wins
    }

    #[test]
    fn config_rejects_unknown_keys_and_bad_values() {
        let err =
            TrainConfig::resolve(None, &[("optimizer.etaa".into(), "1".into())]).unwrap_err();
        assert!(matches!(err, Error::Config(_)));
        let err =
            TrainConfig::resolve(None, &[("dataset.p_in".into(), "1.5".into())]).unwrap_err();
        assert!(matches!(err, Error::Config(_)));
        let err =
            TrainConfig::resolve(None, &[("optimizer.eta".into(), "-0.5".into())]).unwrap_err();
        assert!(matches!(err, Error::Config(_)));
    }

    #[test]
    fn full_arm_equals_fixed_ratio_one() {
        let mut full = tiny_cfg();
        full.arm = Arm::Full;
        let mut fixed = tiny_cfg();
        fixed.arm = Arm::Fixed;
        fixed.c_max = 1.0;
        let g = build_graph(&full).unwrap();
        let p = build_partition(&full, &g).unwrap();
        let (rec_full, params_full) = run_training(&full, &g, &p).unwrap();
        let (rec_fixed, params_fixed) = run_training(&fixed, &g, &p).unwrap();
        assert_eq!(rec_full, rec_fixed);
        assert_eq!(params_full.max_abs_diff(&params_fixed), 0.0);
    }

    #[test]
    fn no_comm_equals_full_when_the_cut_is_empty() {
        // two SBM blocks with p_out = 0, partitioned along the blocks:
        // no cross edges, so withholding halo traffic changes nothing.
        let mut cfg = tiny_cfg();
        cfg.dataset = DatasetSpec::Sbm {
            n: 40,
            classes: 2,
            p_in: 0.4,
            p_out: 0.0,
            feat_dim: 4,
            noise: 0.3,
            seed: 5,
        };
        let g = build_graph(&cfg).unwrap();
        let owner: Vec<u32> = g.labels().to_vec();
        let p = Partition::from_owner(&g, owner, 2).unwrap();
        assert_eq!(p.cross_edges(), 0);

        let mut full = cfg.clone();
        full.arm = Arm::Full;
        let mut nocomm = cfg;
        nocomm.arm = Arm::NoComm;
        let (rec_full, _) = run_training(&full, &g, &p).unwrap();
        let (rec_none, _) = run_training(&nocomm, &g, &p).unwrap();
        for (a, b) in rec_full.iter().zip(&rec_none) {
            assert_eq!(a.train_loss, b.train_loss);
            assert_eq!(a.val_acc, b.val_acc);
            assert_eq!(a.test_acc, b.test_acc);
        }
        assert!(rec_none.iter().all(|r| r.fwd_floats == 0));
    }

    #[test]
    fn varco_csv_ratio_column_follows_schedule() {
        let mut cfg = tiny_cfg();
        cfg.arm = Arm::Varco;
        cfg.c_max = 8.0;
        cfg.slope = 3.0;
        let g = build_graph(&cfg).unwrap();
        let p = build_partition(&cfg, &g).unwrap();
        let (records, _) = run_training(&cfg, &g, &p).unwrap();
        let sched = cfg.scheduler();
        for r in &records {
            assert_eq!(r.ratio, crate::sched::ratio_at(&sched, r.epoch).unwrap());
        }
    }

    #[test]
    fn metrics_csv_roundtrip_and_determinism() {
        let cfg = tiny_cfg();
        let dir = tempfile::tempdir().unwrap();
        let g = build_graph(&cfg).unwrap();
        let p = build_partition(&cfg, &g).unwrap();
        let (records, _) = run_training(&cfg, &g, &p).unwrap();
        let path = dir.path().join("m.csv");
        write_metrics_csv(&path, &records).unwrap();
        let loaded = read_metrics_csv(&path).unwrap();
        assert_eq!(records, loaded);

        // same config, same bytes
        let (records2, _) = run_training(&cfg, &g, &p).unwrap();
        let path2 = dir.path().join("m2.csv");
        write_metrics_csv(&path2, &records2).unwrap();
        assert_eq!(fs::read(&path).unwrap(), fs::read(&path2).unwrap());
    }

    #[test]
    fn cmd_train_writes_metrics_and_checkpoint() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = tiny_cfg();
        cfg.epochs = 3;
        cfg.out_dir = dir.path().join("run");
        let out = cmd_train(&cfg).unwrap();
        assert!(out.metrics_path.exists());
        assert!(out.checkpoint_path.exists());
        let ckpt = crate::io::load_checkpoint(&out.checkpoint_path).unwrap();
        assert_eq!(ckpt.dims(), &[4, 6, 6, 2]);
        assert_eq!(out.records.len(), 3);
        for w in out.records.windows(2) {
            assert!(w[1].cum_floats >= w[0].cum_floats);
        }
    }

    #[test]
    fn synth_roundtrips_through_files() {
        let dir = tempfile::tempdir().unwrap();
        let g = cmd_synth(dir.path(), 30, 3, 0.3, 0.05, 4, 0.2, 9).unwrap();
        let mut cfg = tiny_cfg();
        cfg.dataset = DatasetSpec::Files {
            edges: dir.path().join("edges.txt"),
            features: dir.path().join("features.csv"),
            labels: dir.path().join("labels.csv"),
            masks: Some(dir.path().join("masks.txt")),
        };
        let loaded = build_graph(&cfg).unwrap();
        assert_eq!(g, loaded);
    }

    #[test]
    fn report_single_input_is_identity() {
        let records = vec![
            MetricsRecord {
                epoch: 0,
                ratio: 2.0,
                train_loss: 1.0,
                val_acc: 0.4,
                test_acc: 0.5,
                fwd_floats: 10,
                bwd_floats: 10,
                param_floats: 4,
                cum_floats: 24,
            },
            MetricsRecord {
                epoch: 1,
                ratio: 1.0,
                train_loss: 0.5,
                val_acc: 0.6,
                test_acc: 0.7,
                fwd_floats: 20,
                bwd_floats: 20,
                param_floats: 4,
                cum_floats: 68,
            },
        ];
        let runs = vec![ArmRun {
            name: "solo".into(),
            records,
        }];
        let report = build_report(&runs, 5).unwrap();
        assert_eq!(report.summaries.len(), 1);
        assert_eq!(report.summaries[0].final_test_acc, 0.7);
        assert_eq!(report.summaries[0].total_floats, 68);
        assert_eq!(report.curves[0][0], 0.5);
        assert_eq!(*report.curves[0].last().unwrap(), 0.7);
        assert_eq!(report.dominance[0][0], 1.0);
    }

    #[test]
    fn report_two_arms_share_the_grid() {
        let mk = |costs: [u64; 3], accs: [f64; 3]| -> Vec<MetricsRecord> {
            (0..3)
                .map(|i| MetricsRecord {
                    epoch: i,
                    ratio: 1.0,
                    train_loss: 1.0,
                    val_acc: accs[i],
                    test_acc: accs[i],
                    fwd_floats: 0,
                    bwd_floats: 0,
                    param_floats: 0,
                    cum_floats: costs[i],
                })
                .collect()
        };
        let runs = vec![
            ArmRun {
                name: "cheap".into(),
                records: mk([10, 20, 30], [0.3, 0.5, 0.6]),
            },
            ArmRun {
                name: "dear".into(),
                records: mk([40, 80, 120], [0.4, 0.7, 0.8]),
            },
        ];
        let report = build_report(&runs, 12).unwrap();
        assert_eq!(report.curves.len(), 2);
        assert_eq!(report.curves[0].len(), 12);
        // the cheap arm has value at the smallest budget, the dear one not yet
        assert!(report.curves[0][0] > 0.0);
        assert_eq!(report.curves[1][0], 0.0);
        assert!(report.dominance[0][1] > 0.0);
        assert!(report.dominance[1][0] > 0.0);
    }

    #[test]
    fn cmd_report_reads_csvs_and_writes_grid() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = tiny_cfg();
        let g = build_graph(&cfg).unwrap();
        let p = build_partition(&cfg, &g).unwrap();
        let (records, _) = run_training(&cfg, &g, &p).unwrap();
        let a = dir.path().join("varco.csv");
        write_metrics_csv(&a, &records).unwrap();
        let grid = dir.path().join("grid.csv");
        let report = cmd_report(&[a], 16, Some(&grid)).unwrap();
        assert_eq!(report.summaries[0].name, "varco");
        let text = fs::read_to_string(&grid).unwrap();
        assert!(text.starts_with("budget,varco"));
        assert_eq!(text.lines().count(), 17);
    }

    #[test]
    fn nan_loss_aborts_with_numeric_error() {
        // a fully linear model under squared loss diverges unboundedly at
        // this step size, driving the loss to infinity
        let mut cfg = tiny_cfg();
        cfg.eta = 1e6;
        cfg.epochs = 50;
        cfg.model.nonlinearity = Nonlinearity::Identity;
        cfg.model.loss = LossKind::SquaredError;
        let g = build_graph(&cfg).unwrap();
        let p = build_partition(&cfg, &g).unwrap();
        let err = run_training(&cfg, &g, &p).unwrap_err();
        assert!(matches!(err, Error::Numeric(_)), "got {err:?}");
    }
}

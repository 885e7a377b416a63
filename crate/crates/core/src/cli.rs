//! Command-line front end. Exit codes: 0 success, 1 usage or config error,
//! 2 runtime failure, 3 self-check failure.

use std::fs::{File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use crate::anchors::{anchor_stats, cluster_by_level, make_templates};
use crate::config::{Precision, RunConfig};
use crate::data::{gen_shapeworld, to_tensor, write_dataset, Dataset};
use crate::error::{Result, ZipError};
use crate::eval::{build_report, iou_grid, EvalImage};
use crate::inference::{load_proposals, propose, save_proposals, write_proposals_csv, ProposalSet};
use crate::tensor::gradcheck::{run_suite, Fault};
use crate::tensor::Real;
use crate::zipnet::{StepReport, Trainer, ZipNet};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_RUNTIME: i32 = 2;
pub const EXIT_SELF_CHECK: i32 = 3;

#[derive(Debug, Parser)]
#[command(name = "zipnet", version, about = "Zoom-out-and-in object proposals on synthetic shape images")]
pub struct Cli {
    /// JSON run configuration; defaults apply when omitted.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Override a dotted config key, e.g. `--set nms.inner=0.6`.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    pub overrides: Vec<String>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a synthetic shape dataset (PPM images plus manifest.json).
    GenData {
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a network, logging losses to loss.csv and writing checkpoints.
    Train {
        /// Dataset directory or manifest file.
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Continue from a checkpoint written by an earlier run.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Emit proposals for every image of a dataset.
    Propose {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        csv: Option<PathBuf>,
    },
    /// Score proposals against ground truth.
    Eval {
        /// Dataset directory or manifest file holding the ground truth.
        #[arg(long)]
        gts: PathBuf,
        #[arg(long)]
        proposals: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        csv: Option<PathBuf>,
    },
    /// Aspect-ratio quantiles, scale histogram and anchor coverage.
    AnchorStats {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Finite-difference check of every differentiable op.
    GradCheck {
        #[arg(long, default_value_t = 5)]
        seeds: usize,
        #[arg(long, value_enum, default_value_t = FaultArg::None)]
        fault: FaultArg,
    },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum FaultArg {
    None,
    ReluSignFlip,
}

/// Sidecar written next to every checkpoint.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointManifest {
    pub version: u64,
    pub iteration: usize,
    pub checkpoint: String,
    pub config: RunConfig,
}

pub const CHECKPOINT_MANIFEST_VERSION: u64 = 1;

enum Failure {
    Usage(String),
    Runtime(String),
    SelfCheck(String),
}

impl From<ZipError> for Failure {
    fn from(e: ZipError) -> Self {
        match e {
            ZipError::Config { .. } => Failure::Usage(e.to_string()),
            other => Failure::Runtime(other.to_string()),
        }
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Runtime(e.to_string())
    }
}

type CmdResult = std::result::Result<(), Failure>;

/// Parses `args` (program name first) and runs the command.
pub fn run<I, S>(args: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    match dispatch(&cli) {
        Ok(()) => EXIT_OK,
        Err(Failure::Usage(m)) => {
            eprintln!("error: {m}");
            EXIT_USAGE
        }
        Err(Failure::Runtime(m)) => {
            eprintln!("error: {m}");
            EXIT_RUNTIME
        }
        Err(Failure::SelfCheck(m)) => {
            eprintln!("self-check failed: {m}");
            EXIT_SELF_CHECK
        }
    }
}

fn dispatch(cli: &Cli) -> CmdResult {
    match &cli.command {
        Command::GenData { out } => gen_data(&load_config(cli)?, out),
        Command::Train { data, out, resume } => {
            let (cfg, start) = match resume {
                Some(ckpt) => {
                    let m = read_checkpoint_manifest(ckpt)?;
                    (config_from_manifest(&m, &cli.overrides)?, Some((ckpt.clone(), m.iteration)))
                }
                None => (load_config(cli)?, None),
            };
            match cfg.precision {
                Precision::F32 => train::<f32>(&cfg, data, out, start),
                Precision::F64 => train::<f64>(&cfg, data, out, start),
            }
        }
        Command::Propose {
            checkpoint,
            data,
            out,
            csv,
        } => {
            let m = read_checkpoint_manifest(checkpoint)?;
            let cfg = config_from_manifest(&m, &cli.overrides)?;
            match cfg.precision {
                Precision::F32 => propose_cmd::<f32>(&cfg, checkpoint, data, out, csv.as_deref()),
                Precision::F64 => propose_cmd::<f64>(&cfg, checkpoint, data, out, csv.as_deref()),
            }
        }
        Command::Eval {
            gts,
            proposals,
            out,
            csv,
        } => eval_cmd(&load_config(cli)?, gts, proposals, out, csv.as_deref()),
        Command::AnchorStats { data, out } => anchor_stats_cmd(&load_config(cli)?, data, out.as_deref()),
        Command::GradCheck { seeds, fault } => grad_check(*seeds, *fault),
    }
}

fn load_config(cli: &Cli) -> std::result::Result<RunConfig, Failure> {
    if let Some(p) = &cli.config {
        if !p.is_file() {
            return Err(Failure::Usage(format!("config file {} not found", p.display())));
        }
    }
    Ok(RunConfig::load(cli.config.as_deref(), &cli.overrides)?)
}

fn config_from_manifest(m: &CheckpointManifest, overrides: &[String]) -> Result<RunConfig> {
    let mut doc = serde_json::to_value(&m.config)?;
    for o in overrides {
        crate::config::apply_override(&mut doc, o)?;
    }
    RunConfig::from_value(doc)
}

fn manifest_path(data: &Path) -> PathBuf {
    if data.is_dir() {
        data.join("manifest.json")
    } else {
        data.to_path_buf()
    }
}

fn sidecar(ckpt: &Path) -> PathBuf {
    ckpt.with_extension("json")
}

pub fn read_checkpoint_manifest(ckpt: &Path) -> Result<CheckpointManifest> {
    let path = sidecar(ckpt);
    let text = std::fs::read_to_string(&path)
        .map_err(|e| ZipError::Checkpoint(format!("cannot read {}: {e}", path.display())))?;
    let m: CheckpointManifest = serde_json::from_str(&text)?;
    if m.version != CHECKPOINT_MANIFEST_VERSION {
        return Err(ZipError::UnknownVersion {
            what: "checkpoint manifest",
            version: m.version,
        });
    }
    m.config.validate()?;
    Ok(m)
}

fn write_json<S: Serialize>(path: &Path, value: &S) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    std::fs::write(path, text + "\n")?;
    Ok(())
}

fn gen_data(cfg: &RunConfig, out: &Path) -> CmdResult {
    let d = &cfg.data;
    let images = gen_shapeworld(d.count, d.side, d.seed, d.mix)?;
    write_dataset(out, &images, d.seed, Some(d.mix))
        .map_err(|e| Failure::Runtime(format!("writing dataset to {}: {e}", out.display())))?;
    println!("wrote {} images to {}", images.len(), out.display());
    Ok(())
}

fn loss_header(q: usize) -> String {
    let mut h = String::from("iteration,lr,total,first_0,first_1,first_2");
    for s in 1..=q {
        h.push_str(&format!(",roi_stage_{s}"));
    }
    h.push_str(",first_positives,roi_positives");
    h
}

fn loss_row(iteration: usize, r: &StepReport) -> String {
    let mut row = format!(
        "{iteration},{},{},{},{},{}",
        r.lr, r.total, r.first_branch[0], r.first_branch[1], r.first_branch[2]
    );
    for l in &r.roi.stage_losses {
        row.push_str(&format!(",{l}"));
    }
    let fp: usize = r.first_positives.iter().sum();
    let rp: usize = r.roi.stage_positives.iter().sum();
    row.push_str(&format!(",{fp},{rp}"));
    row
}

fn save_checkpoint<T: Real>(trainer: &mut Trainer<T>, cfg: &RunConfig, out: &Path) -> Result<PathBuf> {
    let name = format!("ckpt-{:06}.bin", trainer.iteration);
    let path = out.join(&name);
    trainer.net.save(&path)?;
    let manifest = CheckpointManifest {
        version: CHECKPOINT_MANIFEST_VERSION,
        iteration: trainer.iteration,
        checkpoint: name,
        config: cfg.clone(),
    };
    write_json(&sidecar(&path), &manifest)?;
    Ok(path)
}

fn train<T: Real>(cfg: &RunConfig, data: &Path, out: &Path, resume: Option<(PathBuf, usize)>) -> CmdResult {
    let dataset = Dataset::open(manifest_path(data))?;
    let images = dataset.load_all()?;
    if images.is_empty() {
        return Err(Failure::Runtime("training set is empty".into()));
    }
    std::fs::create_dir_all(out)?;
    let mut net: ZipNet<T> = ZipNet::new(cfg.model.clone(), cfg.seed)?;
    if let Some((ckpt, _)) = &resume {
        net.load(ckpt)?;
    }
    let mut trainer = Trainer::new(net, cfg.train.clone(), cfg.nms, cfg.seed);
    trainer.iteration = resume.as_ref().map_or(0, |r| r.1);

    let log_path = out.join("loss.csv");
    let fresh = resume.is_none() || !log_path.exists();
    let file = if fresh {
        File::create(&log_path)?
    } else {
        OpenOptions::new().append(true).open(&log_path)?
    };
    let mut log = BufWriter::new(file);
    if fresh {
        writeln!(log, "{}", loss_header(cfg.model.q))?;
    }
    let every = cfg.train.checkpoint_every;
    while trainer.iteration < cfg.train.iterations {
        let it = trainer.iteration;
        let report = trainer.step(&images)?;
        writeln!(log, "{}", loss_row(it, &report))?;
        if every > 0 && trainer.iteration % every == 0 && trainer.iteration < cfg.train.iterations {
            log.flush()?;
            save_checkpoint(&mut trainer, cfg, out)?;
        }
    }
    log.flush()?;
    let path = save_checkpoint(&mut trainer, cfg, out)?;
    println!("checkpoint {}", path.display());
    Ok(())
}

fn propose_cmd<T: Real>(cfg: &RunConfig, ckpt: &Path, data: &Path, out: &Path, csv: Option<&Path>) -> CmdResult {
    let mut net: ZipNet<T> = ZipNet::new(cfg.model.clone(), cfg.seed)?;
    net.load(ckpt)?;
    let dataset = Dataset::open(manifest_path(data))?;
    let mut sets = Vec::with_capacity(dataset.len());
    for (i, entry) in dataset.manifest.images.iter().enumerate() {
        let image = to_tensor(&dataset.image(i)?);
        let props = propose(&mut net, &image, &cfg.test, &cfg.nms)?;
        sets.push(ProposalSet::new(entry.id.clone(), &props));
    }
    save_proposals(out, &sets)?;
    if let Some(c) = csv {
        write_proposals_csv(BufWriter::new(File::create(c)?), &sets)?;
    }
    println!("{} images, proposals in {}", sets.len(), out.display());
    Ok(())
}

fn eval_cmd(cfg: &RunConfig, gts: &Path, proposals: &Path, out: &Path, csv: Option<&Path>) -> CmdResult {
    let dataset = Dataset::open(manifest_path(gts))?;
    let sets = load_proposals(proposals)?;
    let by_id: std::collections::HashMap<&str, &ProposalSet> = sets.iter().map(|s| (s.image_id.as_str(), s)).collect();
    let mut images = Vec::with_capacity(dataset.len());
    for e in &dataset.manifest.images {
        let set = by_id
            .get(e.id.as_str())
            .ok_or_else(|| Failure::Runtime(format!("no proposals for image id `{}`", e.id)))?;
        images.push(EvalImage {
            image_id: e.id.clone(),
            gts: e.gts(),
            proposals: set.scored_boxes(),
        });
    }
    let report = build_report(&images, &cfg.eval.budgets, &iou_grid())?;
    if report.empty_gt_warning {
        eprintln!("warning: no ground-truth boxes; recall reported as 1");
    }
    write_json(out, &report)?;
    if let Some(c) = csv {
        std::fs::write(c, report.to_csv())?;
    }
    for (k, ar) in &report.ar_at {
        println!("AR@{k} {ar:.4}");
    }
    Ok(())
}

fn anchor_stats_cmd(cfg: &RunConfig, data: &Path, out: Option<&Path>) -> CmdResult {
    let dataset = Dataset::open(manifest_path(data))?;
    let images: Vec<_> = dataset
        .manifest
        .images
        .iter()
        .map(|e| (e.width, e.height, e.gts()))
        .collect();
    let m = &cfg.model;
    let templates = make_templates(&m.anchor_scales, &m.anchor_ratios)?;
    let clusters = cluster_by_level(&templates, &m.level_ranges);
    let stats = anchor_stats(&images, &clusters, &m.strides, 32, cfg.train.thresholds.positive)?;
    let text = serde_json::to_string_pretty(&stats).map_err(ZipError::from)?;
    match out {
        Some(p) => std::fs::write(p, text + "\n")?,
        None => println!("{text}"),
    }
    Ok(())
}

fn grad_check(seeds: usize, fault: FaultArg) -> CmdResult {
    let fault = match fault {
        FaultArg::None => Fault::None,
        FaultArg::ReluSignFlip => Fault::ReluSignFlip,
    };
    let reports = run_suite(seeds.max(1), fault)?;
    let mut failed = Vec::new();
    for r in &reports {
        println!(
            "{:<22} seeds {:>2}  max rel err {:.3e}  {}",
            r.op,
            r.seeds,
            r.max_rel_error,
            if r.passed { "ok" } else { "FAIL" }
        );
        if !r.passed {
            failed.push(r.op);
        }
    }
    if failed.is_empty() {
        Ok(())
    } else {
        Err(Failure::SelfCheck(failed.join(", ")))
    }
}

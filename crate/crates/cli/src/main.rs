//! `cst-yolo` command line.
//!
//! Exit status: 0 on success, 1 when a check fails or a run errors, 2 on
//! usage or configuration errors.

mod config;

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Parser, Subcommand};
use cst_yolo::checkpoint::{load_checkpoint, save_checkpoint};
use cst_yolo::data::{
    load_image, load_split, prepare_samples, synth_blobs, Sample, Split, SplitManifest, SynthOptions,
};
use cst_yolo::detector::{evaluate_samples, log_csv, predict, train, Arch, InferenceConfig, Network, LOG_HEADER};
use cst_yolo::gradcheck::run_suite;
use cst_yolo::metrics::ApTable;
use cst_yolo::Error;

use crate::config::RunConfig;

#[derive(Parser, Debug)]
#[command(name = "cst-yolo", version, about = "Blood cell detector: training, evaluation and tooling")]
struct Cli {
    #[command(subcommand)]
    cmd: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train from a JSON run configuration.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Overrides `network.arch`, e.g. `yolov7-baseline` or `ablation:w/o-mcs`.
        #[arg(long)]
        arch: Option<Arch>,
    },
    /// Score a checkpoint on a dataset, or render a table of published APs.
    Eval {
        #[arg(long, required_unless_present = "ap_table", requires = "data")]
        checkpoint: Option<PathBuf>,
        /// Dataset root holding `manifest.txt`, `images/` and `annotations/`.
        #[arg(long)]
        data: Option<PathBuf>,
        /// Split to score. Defaults to `test`, or `val` when there is no test split.
        #[arg(long)]
        split: Option<Split>,
        #[arg(long, value_delimiter = ',')]
        classes: Option<Vec<String>>,
        /// JSON table of per-class APs to check and render instead of scoring.
        #[arg(long, conflicts_with_all = ["checkpoint", "data"])]
        ap_table: Option<PathBuf>,
        #[arg(long)]
        csv: bool,
    },
    /// Detect objects in one image and print them as CSV in image pixels.
    Predict {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        image: PathBuf,
        #[arg(long, default_value_t = 0.25)]
        conf: f64,
        #[arg(long, default_value_t = 0.65)]
        iou: f64,
        #[arg(long, value_delimiter = ',')]
        classes: Option<Vec<String>>,
    },
    /// Run the finite-difference gradient suite.
    Gradcheck {
        /// Print every case, not only failures.
        #[arg(long)]
        verbose: bool,
    },
    /// Fold re-parameterised branches into single convolutions.
    Fuse {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Defaults to `<checkpoint>.fused.ckpt` next to the input.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Write a synthetic three-class dataset.
    Synth {
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        n: usize,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 256)]
        size: u32,
    },
}

/// A check that ran and failed; reported with exit status 1.
#[derive(Debug)]
struct CheckFailed(String);

impl std::fmt::Display for CheckFailed {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for CheckFailed {}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match run(cli.cmd) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            let usage = matches!(e.downcast_ref::<Error>(), Some(Error::Config(_)));
            ExitCode::from(if usage { 2 } else { 1 })
        }
    }
}

fn run(cmd: Command) -> anyhow::Result<()> {
    match cmd {
        Command::Train { config, arch } => cmd_train(&config, arch),
        Command::Eval { checkpoint, data, split, classes, ap_table, csv } => match (ap_table, checkpoint, data) {
            (Some(table), _, _) => cmd_ap_table(&table, csv),
            (None, Some(ck), Some(root)) => cmd_eval(&ck, &root, split, classes, csv),
            _ => Err(Error::Config("eval needs --checkpoint and --data, or --ap-table".into()).into()),
        },
        Command::Predict { checkpoint, image, conf, iou, classes } => {
            cmd_predict(&checkpoint, &image, conf, iou, classes)
        }
        Command::Gradcheck { verbose } => cmd_gradcheck(verbose),
        Command::Fuse { checkpoint, out } => cmd_fuse(&checkpoint, out),
        Command::Synth { seed, n, out, size } => {
            let m = synth_blobs(&SynthOptions::new(seed, n, size), &out)?;
            println!(
                "wrote {} images to {} (train {}, val {}, test {})",
                m.total(),
                out.display(),
                m.files(Split::Train).len(),
                m.files(Split::Val).len(),
                m.files(Split::Test).len()
            );
            Ok(())
        }
    }
}

fn class_names(given: Option<Vec<String>>, nc: usize) -> anyhow::Result<Vec<String>> {
    let names = given.unwrap_or_else(cst_yolo::data::blood_classes);
    if names.len() != nc {
        return Err(Error::Config(format!("{} class names for a {nc}-class model", names.len())).into());
    }
    Ok(names)
}

fn load_network(path: &Path) -> anyhow::Result<(Network, cst_yolo::nn::ParamStore<f32>)> {
    let ck = load_checkpoint(path)?;
    let net = ck.network().with_context(|| format!("checkpoint {}", path.display()))?;
    Ok((net, ck.params))
}

fn cmd_train(path: &Path, arch: Option<Arch>) -> anyhow::Result<()> {
    let mut cfg = RunConfig::read(path)?;
    if let Some(a) = arch {
        cfg.network.arch = a;
    }
    let classes = cfg.classes();
    let manifest = SplitManifest::read(&cfg.manifest_path())?;
    let val_split = cfg.val_split()?.unwrap_or_else(|| manifest.validation_split());
    let size = cfg.network.input_size as u32;
    let train_set = prepare_samples(&load_split(&cfg.data.root, &manifest, Split::Train, &classes)?, size);
    let val_set = prepare_samples(&load_split(&cfg.data.root, &manifest, val_split, &classes)?, size);
    let net = Network::build(&cfg.network)?;
    let mut store = net.init_params::<f32>(cfg.train.seed)?;
    eprintln!(
        "{}: {} parameters, {} train / {} {val_split} images",
        cfg.network.arch,
        net.num_trainable(),
        train_set.len(),
        val_set.len()
    );
    println!("{LOG_HEADER}");
    let log = train(&net, &mut store, &train_set, &val_set, &classes, &cfg.train, |row| {
        println!("{}", row.csv_row())
    })?;
    if let Some(dir) = cfg.output.checkpoint.parent() {
        std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    save_checkpoint(&cfg.output.checkpoint, &store, Some(&net.cfg))?;
    if let Some(p) = &cfg.output.metrics_csv {
        std::fs::write(p, log_csv(&log)).with_context(|| format!("writing {}", p.display()))?;
    }
    if !val_set.is_empty() {
        let r = evaluate_samples(&net, &store, &val_set, &classes, &InferenceConfig::default())?;
        eprint!("{}", r.table());
    }
    eprintln!("saved {}", cfg.output.checkpoint.display());
    Ok(())
}

fn cmd_eval(
    ck: &Path,
    root: &Path,
    split: Option<Split>,
    classes: Option<Vec<String>>,
    csv: bool,
) -> anyhow::Result<()> {
    let (net, store) = load_network(ck)?;
    let classes = class_names(classes, net.cfg.num_classes)?;
    let manifest = SplitManifest::read(&root.join("manifest.txt"))?;
    let split = split.unwrap_or(if manifest.files(Split::Test).is_empty() { Split::Val } else { Split::Test });
    let records = load_split(root, &manifest, split, &classes)?;
    if records.is_empty() {
        bail!(Error::Config(format!("split `{split}` of {} is empty", root.display())));
    }
    let samples = prepare_samples(&records, net.cfg.input_size as u32);
    let r = evaluate_samples(&net, &store, &samples, &classes, &InferenceConfig::default())?;
    print!("{}", if csv { r.csv() } else { r.table() });
    Ok(())
}

fn cmd_ap_table(path: &Path, csv: bool) -> anyhow::Result<()> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::Load(format!("{}: {e}", path.display())))?;
    let table = ApTable::from_json(&text)?;
    print!("{}", if csv { table.csv()? } else { table.render()? });
    Ok(())
}

fn cmd_predict(ck: &Path, image: &Path, conf: f64, iou: f64, classes: Option<Vec<String>>) -> anyhow::Result<()> {
    let (net, store) = load_network(ck)?;
    let classes = class_names(classes, net.cfg.num_classes)?;
    let img = load_image(image)?;
    let (w, h) = (img.width() as f64, img.height() as f64);
    let name = image.file_name().map_or_else(|| image.display().to_string(), |n| n.to_string_lossy().into_owned());
    let sample = Sample::from_image(&name, &img, &[], net.cfg.input_size as u32);
    let ic = InferenceConfig { conf_thresh: conf, iou_thresh: iou, batch: 1, ..InferenceConfig::default() };
    let dets = predict(&net, &store, std::slice::from_ref(&sample), &ic)?;
    let mut out = String::from("image,class,x1,y1,x2,y2,confidence\n");
    for d in &dets[0] {
        let b = sample.letterbox.inverse_box(&d.bbox);
        let _ = writeln!(
            out,
            "{name},{},{:.2},{:.2},{:.2},{:.2},{:.4}",
            classes[d.class],
            b.x1.clamp(0.0, w),
            b.y1.clamp(0.0, h),
            b.x2.clamp(0.0, w),
            b.y2.clamp(0.0, h),
            d.confidence
        );
    }
    print!("{out}");
    Ok(())
}

fn cmd_gradcheck(verbose: bool) -> anyhow::Result<()> {
    let cases = run_suite()?;
    let mut failed = 0;
    for c in &cases {
        let ok = c.passes();
        if !ok {
            failed += 1;
        }
        if verbose || !ok {
            println!(
                "{:<6} {:<40} max rel err {:.2e} (tol {:.0e}) at {}",
                if ok { "ok" } else { "FAIL" },
                c.name,
                c.report.max_rel_err,
                c.tol,
                c.report.worst
            );
        }
    }
    let worst = cases
        .iter()
        .max_by(|a, b| (a.report.max_rel_err / a.tol).total_cmp(&(b.report.max_rel_err / b.tol)))
        .context("empty gradient suite")?;
    if failed > 0 {
        let worst_failing = cases
            .iter()
            .filter(|c| !c.passes())
            .max_by(|a, b| (a.report.max_rel_err / a.tol).total_cmp(&(b.report.max_rel_err / b.tol)))
            .unwrap_or(worst);
        return Err(CheckFailed(format!(
            "{failed}/{} gradient checks failed; worst op `{}`: rel err {:.3e} at {} (analytic {:.6e}, numeric {:.6e})",
            cases.len(),
            worst_failing.name,
            worst_failing.report.max_rel_err,
            worst_failing.report.worst,
            worst_failing.report.analytic,
            worst_failing.report.numeric
        ))
        .into());
    }
    println!(
        "{} gradient checks passed; largest rel err {:.2e} in `{}`",
        cases.len(),
        worst.report.max_rel_err,
        worst.name
    );
    Ok(())
}

fn cmd_fuse(ck: &Path, out: Option<PathBuf>) -> anyhow::Result<()> {
    let (net, mut store) = load_network(ck)?;
    let before = net.num_trainable();
    let fused = net.fuse(&mut store)?;
    let out = out.unwrap_or_else(|| ck.with_extension("fused.ckpt"));
    save_checkpoint(&out, &store, Some(&fused.cfg))?;
    println!("{before} -> {} parameters; wrote {}", fused.num_trainable(), out.display());
    Ok(())
}

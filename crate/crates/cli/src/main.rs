//! `fuselab`: generate data, train, evaluate and explain.
//!
//! Exit codes: 0 success, 2 usage or config error, 1 runtime failure.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use sha2::{Digest, Sha256};

use fuselab_core::checkpoint;
use fuselab_core::config::RunConfig;
use fuselab_core::data::{self, pnm, synth, Dataset};
use fuselab_core::evaluation::{self, TripleRoc};
use fuselab_core::explain;
use fuselab_core::training;
use fuselab_core::{Error, Result};

#[derive(Parser)]
#[command(name = "fuselab", version, about = "Mammography + ultrasound descriptor fusion")]
struct Cli {
    /// Worker threads for cross-validation folds.
    #[arg(long, global = true, env = "FUSELAB_THREADS", default_value_t = 1,
          value_parser = clap::value_parser!(u16).range(1..))]
    parallel: u16,

    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Run config (JSON); defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic paired dataset.
    Gen(Common),
    /// Train the two CNNs and the fusion network.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        dataset: PathBuf,
    },
    /// Leave-one-out (or k-fold) evaluation.
    Loo {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        dataset: PathBuf,
    },
    /// Method × loss experiment grid.
    Matrix {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        dataset: PathBuf,
    },
    /// Grad-CAM heatmap and overlay for one patch.
    Gradcam {
        #[arg(long)]
        checkpoint: PathBuf,
        /// PGM patch.
        #[arg(long)]
        patch: PathBuf,
        #[arg(long, value_parser = clap::value_parser!(u8).range(0..=1))]
        class: u8,
        /// Conv block index; the last block by default.
        #[arg(long)]
        layer: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Compare reader ratings with model scores.
    Readers {
        #[arg(long)]
        scores: PathBuf,
        #[arg(long)]
        ratings: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

fn load_config(path: Option<&Path>) -> Result<RunConfig> {
    match path {
        Some(p) => RunConfig::load(p),
        None => Ok(RunConfig::default()),
    }
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::Io {
        path: dir.display().to_string(),
        source: e,
    })
}

fn write(path: &Path, bytes: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::Io {
        path: path.display().to_string(),
        source: e,
    })
}

fn collect_files(root: &Path, dir: &Path, out: &mut Vec<PathBuf>) -> Result<()> {
    let entries = fs::read_dir(dir).map_err(|e| Error::Io {
        path: dir.display().to_string(),
        source: e,
    })?;
    for entry in entries {
        let path = entry
            .map_err(|e| Error::Io {
                path: dir.display().to_string(),
                source: e,
            })?
            .path();
        if path.is_dir() {
            collect_files(root, &path, out)?;
        } else if path.file_name().is_some_and(|n| n != "SHA256SUMS") {
            out.push(path.strip_prefix(root).expect("under root").to_path_buf());
        }
    }
    Ok(())
}

/// `SHA256SUMS` over every file in the run directory, sorted by path.
fn write_checksums(dir: &Path) -> Result<()> {
    let mut files = Vec::new();
    collect_files(dir, dir, &mut files)?;
    files.sort();
    let mut sums = String::new();
    for rel in files {
        let path = dir.join(&rel);
        let bytes = fs::read(&path).map_err(|e| Error::Io {
            path: path.display().to_string(),
            source: e,
        })?;
        let name = rel.to_string_lossy().replace('\\', "/");
        sums.push_str(&format!("{}  {name}\n", hex::encode(Sha256::digest(&bytes))));
    }
    write(&dir.join("SHA256SUMS"), sums)
}

/// The lesions cross-validation and training work on: the training side of
/// the holdout split when one is configured.
fn working_set(ds: &Dataset, cfg: &RunConfig) -> Result<Dataset> {
    if cfg.eval.holdout == 0 {
        return Ok(ds.clone());
    }
    if cfg.eval.holdout >= ds.len() {
        return Err(Error::Config {
            key: "eval.holdout".into(),
            reason: format!("{} of {} lesions leaves nothing to train on", cfg.eval.holdout, ds.len()),
        });
    }
    Ok(data::split_holdout(ds, cfg.eval.holdout, cfg.split_seed())?.0)
}

fn cmd_gen(common: &Common) -> Result<()> {
    let cfg = load_config(common.config.as_deref())?;
    let synth = synth::generate(&cfg.data, cfg.data_seed())?;
    data::save_dataset(&synth.dataset, &common.out)?;
    data::save_latent(&synth.latent, &common.out)?;
    cfg.save_resolved(&common.out)?;
    write_checksums(&common.out)?;
    println!("wrote {} lesions to {}", synth.dataset.len(), common.out.display());
    Ok(())
}

fn cmd_train(common: &Common, dataset: &Path) -> Result<()> {
    let cfg = load_config(common.config.as_deref())?;
    let ds = working_set(&data::load_dataset(dataset)?, &cfg)?;
    create_dir(&common.out)?;
    cfg.save_resolved(&common.out)?;
    let models = training::train(&ds, &cfg.model, &cfg.train, cfg.train_seed())?;
    checkpoint::save_cnn(&models.mg, &common.out.join("mg.ckpt"))?;
    checkpoint::save_cnn(&models.us, &common.out.join("us.ckpt"))?;
    checkpoint::save_fusion(&models.fusion, &common.out.join("fusion.ckpt"))?;
    training::write_log(&models.log, &common.out.join("train_log.csv"))?;
    write_checksums(&common.out)?;
    println!("trained on {} lesions ({} method)", ds.len(), cfg.train.method);
    Ok(())
}

fn cmd_loo(common: &Common, dataset: &Path, threads: usize) -> Result<()> {
    let cfg = load_config(common.config.as_deref())?;
    let ds = working_set(&data::load_dataset(dataset)?, &cfg)?;
    create_dir(&common.out)?;
    cfg.save_resolved(&common.out)?;
    let folds = evaluation::folds_for(&ds, &cfg.eval, cfg.split_seed())?;
    let cv = evaluation::cross_validate(&ds, &folds, &cfg.model, &cfg.train, cfg.train_seed(), threads)?;
    evaluation::write_scores(&cv.records, &common.out.join("scores.csv"))?;
    let mut audit = String::from("fold,train_lesions,test_ids,leaked\n");
    for a in &cv.audits {
        audit.push_str(&format!(
            "{},{},{},{}\n",
            a.fold,
            a.train_lesions,
            a.test_ids.join(" "),
            a.leaked.join(" ")
        ));
    }
    write(&common.out.join("audit.csv"), audit)?;
    let roc = TripleRoc::from_records(&cv.records)?;
    for (name, curve) in [("mg", &roc.mammography), ("us", &roc.ultrasound), ("fused", &roc.combined)] {
        evaluation::write_roc_csv(curve, &common.out.join(format!("roc_{name}.csv")))?;
    }
    let svg = evaluation::emit_roc_svg(&[
        ("mammography", &roc.mammography),
        ("ultrasound", &roc.ultrasound),
        ("combined", &roc.combined),
    ]);
    write(&common.out.join("roc.svg"), svg)?;
    let summary = roc.aucs().to_string();
    write(&common.out.join("summary.txt"), format!("{summary}\n"))?;
    write_checksums(&common.out)?;
    println!("{summary}");
    Ok(())
}

fn cmd_matrix(common: &Common, dataset: &Path, threads: usize) -> Result<()> {
    let cfg = load_config(common.config.as_deref())?;
    let ds = working_set(&data::load_dataset(dataset)?, &cfg)?;
    create_dir(&common.out)?;
    cfg.save_resolved(&common.out)?;
    let folds = evaluation::folds_for(&ds, &cfg.eval, cfg.split_seed())?;
    let rows = evaluation::run_matrix(&ds, &folds, &cfg.model, &cfg.train, &cfg.eval, cfg.train_seed(), threads)?;
    evaluation::write_matrix(&rows, &common.out.join("matrix.csv"))?;
    write_checksums(&common.out)?;
    for r in &rows {
        println!("{} {} {}: {}", r.method, r.loss, r.architecture, r.aucs());
    }
    Ok(())
}

fn cmd_gradcam(ckpt: &Path, patch: &Path, class: u8, layer: Option<usize>, out: &Path) -> Result<()> {
    let params = checkpoint::load_cnn(ckpt)?;
    let patch = pnm::read_patch(patch)?;
    let layer = layer.unwrap_or(params.convs.len() - 1);
    let heatmap = explain::grad_cam(&params, &patch, class as usize, layer)?;
    create_dir(out)?;
    write(&out.join("heatmap.pgm"), explain::heatmap_pgm(&heatmap))?;
    write(&out.join("overlay.ppm"), explain::overlay(&patch, &heatmap)?)?;
    write_checksums(out)?;
    Ok(())
}

fn cmd_readers(scores: &Path, ratings: &Path, out: &Path) -> Result<()> {
    let records = evaluation::read_scores(scores)?;
    let ratings = evaluation::read_ratings(ratings)?;
    let table = evaluation::compare_readers(&records, &ratings)?;
    create_dir(out)?;
    evaluation::write_comparison(&table, &out.join("comparison.csv"))?;
    let curves: Vec<(&str, &evaluation::RocCurve)> = table.iter().map(|r| (r.name.as_str(), &r.curve)).collect();
    write(&out.join("roc.svg"), evaluation::emit_roc_svg(&curves))?;
    write_checksums(out)?;
    for r in &table {
        println!("{} {:.3}", r.name, r.auc);
    }
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    let threads = cli.parallel as usize;
    match &cli.command {
        Command::Gen(c) => cmd_gen(c),
        Command::Train { common, dataset } => cmd_train(common, dataset),
        Command::Loo { common, dataset } => cmd_loo(common, dataset, threads),
        Command::Matrix { common, dataset } => cmd_matrix(common, dataset, threads),
        Command::Gradcam {
            checkpoint,
            patch,
            class,
            layer,
            out,
        } => cmd_gradcam(checkpoint, patch, *class, *layer, out),
        Command::Readers { scores, ratings, out } => cmd_readers(scores, ratings, out),
    }
}

fn main() -> ExitCode {
    // clap exits with 2 on usage errors by itself.
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("fuselab: {e}");
            ExitCode::from(if e.is_usage() { 2 } else { 1 })
        }
    }
}

use std::fs;
use std::path::Path;
use std::time::Instant;

use agegraph_core::dataset::Split;
use agegraph_core::experiments::{ablate_conv, ablate_loss, mask_sweep, Experiment};
use agegraph_core::training::metrics::CS_LEVELS;
use agegraph_core::training::{evaluate, metrics_csv, run_training, Checkpoint, EpochLog, TrainConfig};
use agegraph_core::verify::run_gradient_suite;
use agegraph_core::{Error, Result};
use log::info;

use crate::data::{self, SplitArg};
use crate::{ConfigArgs, EvalArgs, GradcheckArgs, RunArgs};

#[derive(Debug, Clone, Copy)]
pub enum Kind {
    Conv,
    Loss,
    Mask,
}

fn read(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

fn write(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn load_config(path: Option<&Path>) -> Result<TrainConfig> {
    match path {
        Some(p) => TrainConfig::from_toml(&read(p)?),
        None => Ok(TrainConfig::default()),
    }
}

/// File, then `--set` overrides in order, then `--seed` and `--epochs`.
fn effective_config(args: &ConfigArgs) -> Result<TrainConfig> {
    let mut cfg = load_config(args.config.as_deref())?;
    for o in &args.overrides {
        cfg.apply_override(o)?;
    }
    if let Some(s) = args.seed {
        cfg.seed = s;
    }
    if let Some(e) = args.epochs {
        cfg.epochs = e;
    }
    cfg.validate()?;
    Ok(cfg)
}

/// Creates the output directory and echoes the effective config into it.
fn prepare_out(dir: &Path, cfg: &TrainConfig) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    write(&dir.join("config.toml"), &cfg.to_toml())
}

fn log_epoch(label: &str, epochs: usize, e: &EpochLog) {
    info!(
        "{label}epoch {}/{epochs}: train loss {:.5}, val MAE {:.4}, CS(5) {:.3}",
        e.epoch, e.train_loss, e.val_mae, e.val_cs5
    );
}

pub fn train(args: &RunArgs) -> Result<()> {
    let cfg = effective_config(&args.config)?;
    prepare_out(&args.out, &cfg)?;
    let data = data::load(&args.data, &cfg)?;
    write(&args.out.join("manifest.csv"), &data.manifest.to_csv())?;
    let (train, val) = (data.split(Split::Train), data.split(Split::Val));
    let outcome = run_training(&train, &val, &cfg, |e| log_epoch("", cfg.epochs, e))?;
    write(&args.out.join("metrics.csv"), &metrics_csv(&outcome.log))?;
    let ckpt = args.out.join("checkpoint.json");
    outcome.best.save(&ckpt)?;
    println!(
        "best epoch {} of {}: val MAE {:.4}, CS(5) {:.3}; mean-predictor MAE {:.4}",
        outcome.best.epoch,
        cfg.epochs,
        outcome.best_metrics.mae,
        outcome.best_metrics.cs_at(5),
        outcome.baseline_mae
    );
    println!("checkpoint: {}", ckpt.display());
    Ok(())
}

pub fn eval(args: &EvalArgs) -> Result<()> {
    let ckpt = Checkpoint::load(&args.checkpoint)?;
    if let Some(p) = &args.config {
        ckpt.check_compatible(&load_config(Some(p))?)?;
    }
    let params = ckpt.params()?;
    let data = data::load(&args.data, &ckpt.config)?;
    let which = args.split.unwrap_or(if data.split(Split::Test).is_empty() {
        SplitArg::Val
    } else {
        SplitArg::Test
    });
    let samples = data.select(which);
    if samples.is_empty() {
        return Err(Error::Data(format!("the {} split is empty", which.name())));
    }
    let m = evaluate(&samples, &ckpt.config.model, &params, ckpt.label_scale, ckpt.config.cs_strict)?;

    let mut csv = format!("metric,value\nmae,{}\n", m.mae);
    println!("samples  {} ({} split)", samples.len(), which.name());
    println!("MAE      {:.4}", m.mae);
    for level in CS_LEVELS {
        println!("CS({level:>2})   {:.4}", m.cs_at(level));
        csv.push_str(&format!("cs_{level},{}\n", m.cs_at(level)));
    }
    if let Some(dir) = &args.out {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        write(&dir.join("eval.csv"), &csv)?;
    }
    Ok(())
}

pub fn experiment(args: &RunArgs, kind: Kind) -> Result<()> {
    let cfg = effective_config(&args.config)?;
    prepare_out(&args.out, &cfg)?;
    let data = data::load(&args.data, &cfg)?;
    let (train, val) = (data.split(Split::Train), data.split(Split::Val));
    let mut progress = |label: &str, e: &EpochLog| log_epoch(&format!("[{label}] "), cfg.epochs, e);
    let (exp, file, what): (Experiment, _, _) = match kind {
        Kind::Conv => (ablate_conv(&train, &val, &cfg, &mut progress)?, "ablate_conv.csv", "variant"),
        Kind::Loss => (ablate_loss(&train, &val, &cfg, &mut progress)?, "ablate_loss.csv", "loss terms (N,M,V)"),
        Kind::Mask => (mask_sweep(&train, &val, &cfg, &mut progress)?, "mask_sweep.csv", "mask rate"),
    };
    let csv = exp.to_csv();
    write(&args.out.join(file), &csv)?;
    print!("{csv}");
    if let Some(best) = exp.best() {
        println!("lowest val MAE: {what} {} ({:.4})", best.key.join(","), best.val_mae);
    }
    Ok(())
}

pub fn gradcheck(args: &GradcheckArgs) -> Result<()> {
    let start = Instant::now();
    let report = run_gradient_suite(args.tolerance)?;
    println!("{report}");
    println!(
        "{} checks in {:.1}s, tolerance {:e}",
        report.results.len(),
        start.elapsed().as_secs_f64(),
        args.tolerance
    );
    if report.passed() {
        Ok(())
    } else {
        let worst = report.worst().map_or(String::new(), |w| w.name.clone());
        Err(Error::Numerical(format!("gradient check failed; worst: {worst}")))
    }
}

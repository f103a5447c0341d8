use std::fs;
use std::path::{Path, PathBuf};

use smaformer::data::{Dataset, Mask};
use smaformer::model::SmaFormer;
use smaformer::train::{self, CheckpointPolicy};
use smaformer::{format, json, metrics, verify, Tensor};

use crate::config::{Invocation, RunConfig};
use crate::CliError;

/// Prepares the output directory: refuses a non-empty one unless
/// `overwrite`, in which case it is emptied first.
fn prepare_out(dir: &Path, overwrite: bool) -> Result<(), CliError> {
    let occupied = fs::read_dir(dir).map(|mut d| d.next().is_some()).unwrap_or(false);
    if occupied {
        if !overwrite {
            return Err(CliError::Usage(format!(
                "{} is not empty; pass --overwrite to replace it",
                dir.display()
            )));
        }
        fs::remove_dir_all(dir).map_err(|e| smaformer::Error::io(dir, e))?;
    }
    fs::create_dir_all(dir).map_err(|e| smaformer::Error::io(dir, e))?;
    Ok(())
}

fn write_run_json(dir: &Path, cfg: &RunConfig) -> Result<(), CliError> {
    json::write_canonical(&dir.join("run.json"), cfg)?;
    Ok(())
}

fn write_text(path: &Path, text: &str) -> Result<(), CliError> {
    fs::write(path, text).map_err(|e| smaformer::Error::io(path, e))?;
    Ok(())
}

fn load_dataset(cfg: &RunConfig) -> Result<Dataset, CliError> {
    if cfg.data.dir.is_empty() {
        let d = &cfg.data;
        return Ok(Dataset::generate(d.count, d.height, d.width, d.seed, d.split_ratios)?);
    }
    let dir = Path::new(&cfg.data.dir);
    if !dir.join("manifest.json").exists() {
        return Err(CliError::Usage(format!("no dataset at {}", dir.display())));
    }
    Ok(Dataset::read(dir)?)
}

fn checkpoint_dir(cfg: &RunConfig) -> Result<PathBuf, CliError> {
    if cfg.checkpoint.is_empty() {
        return Err(CliError::Usage("--checkpoint=DIR is required".into()));
    }
    let dir = PathBuf::from(&cfg.checkpoint);
    if !dir.join("config.json").exists() {
        return Err(CliError::Usage(format!("no checkpoint at {}", dir.display())));
    }
    Ok(dir)
}

pub fn run(inv: &Invocation) -> Result<(), CliError> {
    match inv.command.as_str() {
        "synth" => synth(inv),
        "gradcheck" => gradcheck(inv),
        "train" => train_cmd(inv),
        "eval" => eval(inv),
        "predict" => predict(inv),
        other => Err(CliError::Usage(format!("unknown command {other:?}"))),
    }
}

fn synth(inv: &Invocation) -> Result<(), CliError> {
    let cfg = &inv.config;
    let out = cfg.out_dir()?;
    let d = &cfg.data;
    let data = Dataset::generate(d.count, d.height, d.width, d.seed, d.split_ratios)?;
    prepare_out(&out, inv.overwrite)?;
    data.write(&out)?;
    write_run_json(&out, cfg)?;
    let m = &data.manifest;
    println!(
        "wrote {} samples ({}×{}) to {}: train {}, val {}, test {}",
        m.count,
        m.height,
        m.width,
        out.display(),
        m.splits.train.len(),
        m.splits.val.len(),
        m.splits.test.len()
    );
    Ok(())
}

fn gradcheck(inv: &Invocation) -> Result<(), CliError> {
    let cfg = &inv.config;
    let g = &cfg.gradcheck;
    if !cfg.out.is_empty() {
        prepare_out(&cfg.out_dir()?, inv.overwrite)?;
        write_run_json(&cfg.out_dir()?, cfg)?;
    }
    let checks = verify::op_suite(&g.seeds)?;
    let mut failed = Vec::new();
    let mut report = String::from("op,max_relative_error,status\n");
    for (op, err) in verify::worst_per_op(&checks) {
        let ok = err < g.op_threshold;
        println!("{op:<20} {err:.3e} {}", if ok { "ok" } else { "FAIL" });
        report.push_str(&format!("{op},{err:e},{}\n", if ok { "ok" } else { "fail" }));
        if !ok {
            failed.push(op.to_string());
        }
    }
    let model = verify::model_check(&verify::tiny_model_config(), 0, g.per_param)?;
    let err = model.max_relative_error();
    let ok = err < g.model_threshold;
    println!("{:<20} {err:.3e} {}", "model", if ok { "ok" } else { "FAIL" });
    report.push_str(&format!("model,{err:e},{}\n", if ok { "ok" } else { "fail" }));
    if !ok {
        failed.push("model".into());
    }
    if !cfg.out.is_empty() {
        write_text(&cfg.out_dir()?.join("gradcheck.csv"), &report)?;
    }
    if failed.is_empty() {
        Ok(())
    } else {
        Err(CliError::Verification(format!("gradient check failed for {}", failed.join(", "))))
    }
}

fn train_cmd(inv: &Invocation) -> Result<(), CliError> {
    let cfg = &inv.config;
    let out = cfg.out_dir()?;
    let data = load_dataset(cfg)?;
    let m = &data.manifest;
    if (m.height, m.width) != (cfg.model.height, cfg.model.width) {
        return Err(CliError::Usage(format!(
            "dataset is {}×{} but the model expects {}×{}",
            m.height, m.width, cfg.model.height, cfg.model.width
        )));
    }
    if m.classes != cfg.model.num_classes {
        return Err(CliError::Usage(format!(
            "dataset has {} classes but the model has {}",
            m.classes, cfg.model.num_classes
        )));
    }
    let mut model = SmaFormer::<f32>::new(cfg.model.clone())?;
    prepare_out(&out, inv.overwrite)?;
    write_run_json(&out, cfg)?;
    let policy = CheckpointPolicy {
        dir: Some(out.clone()),
        every: cfg.train.eval_every,
    };
    let state = train::train_loop(&mut model, &data, &cfg.train, &policy)?;
    write_text(&out.join("history.csv"), &train::history_csv(&state.history))?;
    let first = state.history.first().map_or(f64::NAN, |r| r.loss);
    let last = state.history.last().map_or(f64::NAN, |r| r.loss);
    println!("trained {} steps: loss {first:.4} -> {last:.4}", state.step);
    if let Some(best) = state.best_val_dsc {
        println!("best validation DSC {:.2}%", 100.0 * best);
    }
    println!("checkpoint: {}", out.join("last").display());
    Ok(())
}

fn eval(inv: &Invocation) -> Result<(), CliError> {
    let cfg = &inv.config;
    let ckpt = train::load_checkpoint(&checkpoint_dir(cfg)?)?;
    let data = load_dataset(cfg)?;
    if data.manifest.classes != ckpt.model.config().num_classes {
        return Err(CliError::Usage(format!(
            "dataset has {} classes but the checkpoint has {}",
            data.manifest.classes,
            ckpt.model.config().num_classes
        )));
    }
    let samples = data.split(&cfg.split)?;
    let report = train::evaluate(&ckpt.model, &samples)?;
    print!("{}", report.table());
    if !cfg.out.is_empty() {
        let out = cfg.out_dir()?;
        prepare_out(&out, inv.overwrite)?;
        write_run_json(&out, cfg)?;
        write_text(&out.join("metrics.csv"), &metrics::rows_to_csv(&report.metric_rows()))?;
    }
    Ok(())
}

/// Binary P5 graymap with class ids spread over 0–255.
pub fn pgm(mask: &Mask, classes: usize) -> Vec<u8> {
    let mut out = format!("P5\n{} {}\n255\n", mask.width, mask.height).into_bytes();
    let top = (classes.max(2) - 1) as u32;
    out.extend(mask.labels.iter().map(|&l| (u32::from(l) * 255 / top) as u8));
    out
}

fn predict(inv: &Invocation) -> Result<(), CliError> {
    let cfg = &inv.config;
    let ckpt = train::load_checkpoint(&checkpoint_dir(cfg)?)?;
    if cfg.image.is_empty() {
        return Err(CliError::Usage("--image=PATH is required".into()));
    }
    let image: Tensor<f32> = format::read(Path::new(&cfg.image))?;
    let logits = ckpt.model.predict_logits(&image)?;
    let mc = ckpt.model.config();
    let mask = Mask {
        height: mc.height,
        width: mc.width,
        labels: train::argmax_labels(&logits),
    };
    let out = cfg.out_dir()?;
    prepare_out(&out, inv.overwrite)?;
    write_run_json(&out, cfg)?;
    format::write(&out.join("mask.smt"), &mask.to_tensor())?;
    fs::write(out.join("mask.pgm"), pgm(&mask, mc.num_classes)).map_err(|e| smaformer::Error::io(&out, e))?;
    let hist = mask.histogram();
    println!(
        "wrote {} (background {}, organ {}, tumor {} pixels)",
        out.join("mask.smt").display(),
        hist[0],
        hist[1],
        hist[2]
    );
    Ok(())
}

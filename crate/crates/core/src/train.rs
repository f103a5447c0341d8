//! SGD with heavy-ball momentum, a per-step cosine schedule, the training
//! loop, evaluation and checkpoints.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{random_augment, Dataset, SamplePair};
use crate::error::{Error, Result};
use crate::metrics::{self, Counts};
use crate::model::{ModelConfig, SmaFormer};
use crate::params::ParamStore;
use crate::tape::Tape;
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub momentum: f64,
    pub weight_decay: f64,
    pub lr_initial: f64,
    pub lr_min: f64,
    pub total_steps: usize,
    pub batch_size: usize,
    pub seed: u64,
    /// Validate every this many steps; 0 only validates after the last step.
    pub eval_every: usize,
    /// Random flips and 90° rotations of training samples.
    pub augment: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            momentum: 0.98,
            weight_decay: 1e-6,
            lr_initial: 1e-2,
            lr_min: 6e-6,
            total_steps: 2000,
            batch_size: 4,
            seed: 0,
            eval_every: 100,
            augment: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config(format!("momentum {} outside [0, 1)", self.momentum)));
        }
        if !(self.lr_min <= self.lr_initial) || self.lr_min < 0.0 {
            return Err(Error::Config(format!(
                "need 0 ≤ lr_min ≤ lr_initial, got {} and {}",
                self.lr_min, self.lr_initial
            )));
        }
        if self.weight_decay < 0.0 || !self.weight_decay.is_finite() {
            return Err(Error::Config(format!("weight_decay {} must be ≥ 0", self.weight_decay)));
        }
        if self.total_steps == 0 {
            return Err(Error::Config("total_steps must be at least 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        Ok(())
    }
}

/// `lr_min + ½(lr_initial − lr_min)(1 + cos(πt/T))`, exact at both ends.
/// Steps past `T` clamp to `lr_min` with a warning.
pub fn cosine_lr(t: usize, cfg: &TrainConfig) -> f64 {
    let total = cfg.total_steps;
    if t > total {
        log::warn!("schedule step {t} is past T = {total}; using lr_min");
        return cfg.lr_min;
    }
    if t == 0 {
        return cfg.lr_initial;
    }
    if t == total {
        return cfg.lr_min;
    }
    let phase = std::f64::consts::PI * t as f64 / total as f64;
    cfg.lr_min + 0.5 * (cfg.lr_initial - cfg.lr_min) * (1.0 + phase.cos())
}

/// One optimizer update:
///
/// ```text
/// g' = g + wd·w;   v ← μ·v + g';   w ← w − lr·v
/// ```
///
/// Every gradient is checked before anything is modified.
pub fn sgd_momentum_step<T: Scalar>(
    params: &mut ParamStore<T>,
    grads: &[Tensor<T>],
    velocities: &mut ParamStore<T>,
    lr: f64,
    cfg: &TrainConfig,
) -> Result<()> {
    if grads.len() != params.len() || velocities.len() != params.len() {
        return Err(Error::Contract(format!(
            "{} parameters, {} gradients, {} velocities",
            params.len(),
            grads.len(),
            velocities.len()
        )));
    }
    for ((id, name, w), g) in params.iter().zip(grads) {
        if g.shape() != w.shape() || velocities.get(id).shape() != w.shape() {
            return Err(Error::shape("sgd step", g.shape(), w.shape()));
        }
        if !g.is_finite() {
            return Err(Error::NonFinite(format!(
                "gradient of {name} is not finite (norm {})",
                g.norm()
            )));
        }
    }
    let (mu, wd, lr) = (T::lit(cfg.momentum), T::lit(cfg.weight_decay), T::lit(lr));
    let ids: Vec<_> = params.ids().collect();
    for (id, g) in ids.into_iter().zip(grads) {
        let v = velocities.get_mut(id).data_mut();
        let w = params.get_mut(id).data_mut();
        for ((wi, vi), &gi) in w.iter_mut().zip(v.iter_mut()).zip(g.data()) {
            *vi = mu * *vi + (gi + wd * *wi);
            *wi -= lr * *vi;
        }
    }
    Ok(())
}

/// Zero velocities mirroring a parameter store.
pub fn zero_velocities<T: Scalar>(params: &ParamStore<T>) -> ParamStore<T> {
    let mut v = ParamStore::new();
    for (_, name, t) in params.iter() {
        v.insert(name, Tensor::zeros(t.shape()));
    }
    v
}

/// One row of the metric history.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HistoryRow {
    pub step: usize,
    pub lr: f64,
    pub loss: f64,
    pub val_dsc: Option<f64>,
    pub val_miou: Option<f64>,
}

/// CSV with header `step,lr,loss,val_dsc,val_miou`; missing validation
/// values are left empty.
pub fn history_csv(rows: &[HistoryRow]) -> String {
    let mut out = String::from("step,lr,loss,val_dsc,val_miou\n");
    let opt = |v: Option<f64>| v.map(|v| format!("{v:.6}")).unwrap_or_default();
    for r in rows {
        writeln!(
            out,
            "{},{:.6e},{:.9},{},{}",
            r.step,
            r.lr,
            r.loss,
            opt(r.val_dsc),
            opt(r.val_miou)
        )
        .unwrap();
    }
    out
}

/// Everything the loop needs to continue where it stopped.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    /// Optimizer steps completed.
    pub step: usize,
    pub velocities: ParamStore<f32>,
    /// Seed of the shuffling and augmentation streams.
    pub rng_seed: u64,
    pub best_val_dsc: Option<f64>,
    pub history: Vec<HistoryRow>,
    /// L2 norm of the modulator gradients at every step.
    pub modulator_grad_norms: Vec<f64>,
}

impl TrainState {
    pub fn new(model: &SmaFormer<f32>, cfg: &TrainConfig) -> Self {
        TrainState {
            step: 0,
            velocities: zero_velocities(&model.params),
            rng_seed: cfg.seed,
            best_val_dsc: None,
            history: Vec::new(),
            modulator_grad_norms: Vec::new(),
        }
    }

    pub fn losses(&self) -> Vec<f64> {
        self.history.iter().map(|r| r.loss).collect()
    }
}

/// Indices of the samples drawn at `step`. Epoch `e` visits the training
/// set in a permutation drawn from `(seed, e)`, so the sequence depends on
/// nothing but the seed.
pub fn batch_indices(seed: u64, step: usize, batch: usize, n: usize) -> Vec<usize> {
    let mut out = Vec::with_capacity(batch);
    let mut cached: Option<(usize, Vec<usize>)> = None;
    for slot in 0..batch {
        let pos = step * batch + slot;
        let epoch = pos / n;
        if cached.as_ref().is_none_or(|(e, _)| *e != epoch) {
            let mut perm: Vec<usize> = (0..n).collect();
            perm.shuffle(&mut stream(seed, 0, epoch as u64));
            cached = Some((epoch, perm));
        }
        out.push(cached.as_ref().unwrap().1[pos % n]);
    }
    out
}

fn stream(seed: u64, kind: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(kind);
    rng.set_word_pos(u128::from(index) << 20);
    rng
}

/// Class names used in reports.
pub fn class_name(class: usize) -> String {
    match class {
        0 => "background".into(),
        1 => "bladder-like organ".into(),
        2 => "tumor".into(),
        k => format!("class {k}"),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassReport {
    pub class_id: usize,
    pub name: String,
    pub dsc: f64,
    pub miou: f64,
}

/// Per-class and foreground-average scores. Per-class values are means
/// over samples; the averages are means over the foreground classes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub classes: Vec<ClassReport>,
    pub avg_dsc: f64,
    pub avg_miou: f64,
    /// `(sample_id, per-class counts)` for every evaluated sample.
    #[serde(skip)]
    pub per_sample: Vec<(String, Vec<Counts>)>,
}

impl EvalReport {
    /// Rows for [`metrics::rows_to_csv`], including the `avg` row.
    pub fn metric_rows(&self) -> Vec<metrics::MetricRow> {
        let mut rows = Vec::new();
        for (id, counts) in &self.per_sample {
            for (k, c) in counts.iter().enumerate() {
                rows.push(metrics::MetricRow {
                    sample_id: id.clone(),
                    class_id: class_name(k + 1),
                    dsc: c.dsc(),
                    iou: c.iou(),
                });
            }
        }
        for c in &self.classes {
            rows.push(metrics::MetricRow {
                sample_id: "all".into(),
                class_id: c.name.clone(),
                dsc: c.dsc,
                iou: c.miou,
            });
        }
        rows.push(metrics::MetricRow {
            sample_id: "all".into(),
            class_id: "avg".into(),
            dsc: self.avg_dsc,
            iou: self.avg_miou,
        });
        rows
    }

    /// Human-readable table: one row per foreground class plus `avg`.
    pub fn table(&self) -> String {
        let mut out = format!("{:<20} {:>8} {:>8}\n", "class", "DSC(%)", "mIoU(%)");
        for c in &self.classes {
            writeln!(out, "{:<20} {:>8.2} {:>8.2}", c.name, 100.0 * c.dsc, 100.0 * c.miou).unwrap();
        }
        writeln!(out, "{:<20} {:>8.2} {:>8.2}", "avg", 100.0 * self.avg_dsc, 100.0 * self.avg_miou).unwrap();
        out
    }
}

/// Class map from `classes × H × W` logits.
pub fn argmax_labels<T: Scalar>(logits: &Tensor<T>) -> Vec<u8> {
    let k = logits.shape()[0];
    let n = logits.numel() / k;
    let d = logits.data();
    if k == 1 {
        return d.iter().map(|&v| u8::from(v > T::zero())).collect();
    }
    (0..n)
        .map(|j| {
            let mut best = 0;
            for c in 1..k {
                if d[c * n + j] > d[best * n + j] {
                    best = c;
                }
            }
            best as u8
        })
        .collect()
}

/// Scores predicted label maps against ground truth for foreground
/// classes `1..classes`.
pub fn score(pairs: &[(String, Vec<u8>, &[u8])], classes: usize) -> Result<EvalReport> {
    if classes < 2 {
        return Err(Error::Config("evaluation needs at least one foreground class".into()));
    }
    let fg: Vec<u8> = (1..classes as u8).collect();
    let mut per_sample = Vec::with_capacity(pairs.len());
    for (id, pred, truth) in pairs {
        let masks = metrics::MultiClassMasks::from_labels(pred, truth, &fg)?;
        per_sample.push((id.clone(), masks.class_counts()));
    }
    let n = per_sample.len().max(1) as f64;
    let classes: Vec<ClassReport> = (0..fg.len())
        .map(|k| ClassReport {
            class_id: k + 1,
            name: class_name(k + 1),
            dsc: per_sample.iter().map(|(_, c)| c[k].dsc()).sum::<f64>() / n,
            miou: per_sample.iter().map(|(_, c)| c[k].iou()).sum::<f64>() / n,
        })
        .collect();
    let m = classes.len() as f64;
    Ok(EvalReport {
        avg_dsc: classes.iter().map(|c| c.dsc).sum::<f64>() / m,
        avg_miou: classes.iter().map(|c| c.miou).sum::<f64>() / m,
        classes,
        per_sample,
    })
}

/// Argmax predictions of `model` scored on `samples`. Samples are
/// evaluated in parallel; the result does not depend on scheduling.
pub fn evaluate<T: Scalar>(model: &SmaFormer<T>, samples: &[&SamplePair]) -> Result<EvalReport> {
    let classes = model.config().num_classes;
    if let Some(s) = samples
        .iter()
        .find(|s| s.mask.labels.iter().any(|&l| l as usize >= classes.max(2)))
    {
        return Err(Error::Config(format!(
            "sample {} has labels beyond the model's {classes} classes",
            s.sample_id
        )));
    }
    let preds: Vec<Vec<u8>> = samples
        .par_iter()
        .map(|s| model.predict_logits(&s.image.cast()).map(|l| argmax_labels(&l)))
        .collect::<Result<_>>()?;
    let pairs: Vec<(String, Vec<u8>, &[u8])> = samples
        .iter()
        .zip(preds)
        .map(|(s, p)| (s.sample_id.clone(), p, s.mask.labels.as_slice()))
        .collect();
    score(&pairs, classes)
}

/// Mean loss and gradients over a batch. Samples are processed one after
/// another and their gradients summed in batch order.
pub fn batch_gradients(model: &SmaFormer<f32>, batch: &[SamplePair]) -> Result<(f64, Vec<Tensor<f32>>)> {
    let mut total = 0.0f64;
    let mut acc: Vec<Tensor<f32>> = model.params.iter().map(|(_, _, t)| Tensor::zeros(t.shape())).collect();
    for s in batch {
        let mut tape = Tape::new();
        tape.set_check_finite(false);
        let bound = model.params.bind(&mut tape);
        let x = tape.constant(s.image.clone());
        let loss = model.loss(&mut tape, &bound, x, &s.mask.labels)?;
        let value = tape.value(loss).data()[0];
        if !value.is_finite() {
            return Err(Error::NonFinite(format!("loss of sample {} is {value}", s.sample_id)));
        }
        total += f64::from(value);
        tape.backward(loss)?;
        for (a, g) in acc.iter_mut().zip(model.params.gradients(&tape, &bound)) {
            a.data_mut().iter_mut().zip(g.data()).for_each(|(a, g)| *a += g);
        }
    }
    let inv = 1.0 / batch.len() as f32;
    for a in &mut acc {
        a.data_mut().iter_mut().for_each(|v| *v *= inv);
    }
    Ok((total / batch.len() as f64, acc))
}

/// Where and how often the loop writes checkpoints.
#[derive(Clone, Debug, Default)]
pub struct CheckpointPolicy {
    pub dir: Option<PathBuf>,
    /// Write `last/` every this many steps (0: only at the end).
    pub every: usize,
}

/// Runs optimizer steps until `state.step == stop_at` (or `total_steps`).
pub fn train_until(
    model: &mut SmaFormer<f32>,
    state: &mut TrainState,
    dataset: &Dataset,
    cfg: &TrainConfig,
    stop_at: usize,
    policy: &CheckpointPolicy,
) -> Result<()> {
    cfg.validate()?;
    let train = dataset.split("train")?;
    if train.is_empty() {
        return Err(Error::Config("training split is empty".into()));
    }
    let val = dataset.split("val")?;
    let modulator_ids: Vec<_> = model
        .params
        .iter()
        .filter(|(_, name, _)| name.contains(".modulator."))
        .map(|(id, _, _)| id)
        .collect();
    let stop_at = stop_at.min(cfg.total_steps);
    while state.step < stop_at {
        let step = state.step;
        let lr = cosine_lr(step, cfg);
        let mut aug = stream(state.rng_seed, 1, step as u64);
        let batch: Vec<SamplePair> = batch_indices(state.rng_seed, step, cfg.batch_size, train.len())
            .into_iter()
            .map(|i| {
                if cfg.augment {
                    random_augment(train[i], &mut aug)
                } else {
                    train[i].clone()
                }
            })
            .collect();
        let (loss, grads) = match batch_gradients(model, &batch) {
            Ok(r) => r,
            Err(e @ Error::NonFinite(_)) => return Err(halt(e, step, policy)),
            Err(e) => return Err(e),
        };
        let mod_norm = modulator_ids
            .iter()
            .map(|id| {
                let g = &grads[id.index()];
                g.data().iter().map(|&v| f64::from(v) * f64::from(v)).sum::<f64>()
            })
            .sum::<f64>()
            .sqrt();
        if let Err(e) = sgd_momentum_step(&mut model.params, &grads, &mut state.velocities, lr, cfg) {
            return Err(halt(e, step, policy));
        }
        state.step += 1;
        state.modulator_grad_norms.push(mod_norm);
        let mut row = HistoryRow {
            step,
            lr,
            loss,
            val_dsc: None,
            val_miou: None,
        };
        let due = state.step == cfg.total_steps || (cfg.eval_every > 0 && state.step % cfg.eval_every == 0);
        if due && !val.is_empty() {
            let report = evaluate(model, &val)?;
            row.val_dsc = Some(report.avg_dsc);
            row.val_miou = Some(report.avg_miou);
            if state.best_val_dsc.is_none_or(|b| report.avg_dsc > b) {
                state.best_val_dsc = Some(report.avg_dsc);
                if let Some(dir) = &policy.dir {
                    save_checkpoint(&dir.join("best"), model, state, cfg)?;
                }
            }
        }
        state.history.push(row);
        if let Some(dir) = &policy.dir {
            if state.step == stop_at || (policy.every > 0 && state.step % policy.every == 0) {
                save_checkpoint(&dir.join("last"), model, state, cfg)?;
            }
        }
    }
    Ok(())
}

fn halt(e: Error, step: usize, policy: &CheckpointPolicy) -> Error {
    let last = match &policy.dir {
        Some(d) if d.join("last").exists() => format!("; last good checkpoint: {}", d.join("last").display()),
        _ => String::new(),
    };
    Error::NonFinite(format!("training halted at step {step}: {e}{last}"))
}

/// Full run from a fresh state.
pub fn train_loop(
    model: &mut SmaFormer<f32>,
    dataset: &Dataset,
    cfg: &TrainConfig,
    policy: &CheckpointPolicy,
) -> Result<TrainState> {
    let mut state = TrainState::new(model, cfg);
    train_until(model, &mut state, dataset, cfg, cfg.total_steps, policy)?;
    Ok(state)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ConfigRecord {
    model: ModelConfig,
    train: TrainConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct StateRecord {
    step: usize,
    rng_seed: u64,
    best_val_dsc: Option<f64>,
    history: Vec<HistoryRow>,
    modulator_grad_norms: Vec<f64>,
}

/// Writes `config.json`, `state.json`, `params/` and `velocity/` under
/// `dir`. The directory is written to a sibling and swapped in, so an
/// interrupted save leaves the previous checkpoint intact.
pub fn save_checkpoint(dir: &Path, model: &SmaFormer<f32>, state: &TrainState, cfg: &TrainConfig) -> Result<()> {
    let tmp = dir.with_extension("partial");
    if tmp.exists() {
        fs::remove_dir_all(&tmp).map_err(|e| Error::io(&tmp, e))?;
    }
    fs::create_dir_all(&tmp).map_err(|e| Error::io(&tmp, e))?;
    model.params.save_dir(&tmp.join("params"))?;
    state.velocities.save_dir(&tmp.join("velocity"))?;
    crate::json::write_canonical(
        &tmp.join("config.json"),
        &ConfigRecord {
            model: model.config().clone(),
            train: cfg.clone(),
        },
    )?;
    crate::json::write_canonical(
        &tmp.join("state.json"),
        &StateRecord {
            step: state.step,
            rng_seed: state.rng_seed,
            best_val_dsc: state.best_val_dsc,
            history: state.history.clone(),
            modulator_grad_norms: state.modulator_grad_norms.clone(),
        },
    )?;
    if dir.exists() {
        fs::remove_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::rename(&tmp, dir).map_err(|e| Error::io(dir, e))
}

/// A loaded checkpoint.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub model: SmaFormer<f32>,
    pub state: TrainState,
    pub train: TrainConfig,
}

/// Reads a checkpoint directory. Nothing outside the returned value is
/// touched, so a failed load leaves the caller's state as it was.
pub fn load_checkpoint(dir: &Path) -> Result<Checkpoint> {
    let record: ConfigRecord = crate::json::read(&dir.join("config.json"))?;
    let st: StateRecord = crate::json::read(&dir.join("state.json"))?;
    let mut model = SmaFormer::<f32>::new(record.model)?;
    let params = ParamStore::<f32>::load_dir(&dir.join("params"))?;
    model.params.assign_from(&params).map_err(|e| Error::Format {
        path: dir.join("params/manifest.json"),
        offset: 0,
        msg: e.to_string(),
    })?;
    let mut velocities = zero_velocities(&model.params);
    let loaded = ParamStore::<f32>::load_dir(&dir.join("velocity"))?;
    velocities.assign_from(&loaded).map_err(|e| Error::Format {
        path: dir.join("velocity/manifest.json"),
        offset: 0,
        msg: e.to_string(),
    })?;
    Ok(Checkpoint {
        model,
        state: TrainState {
            step: st.step,
            velocities,
            rng_seed: st.rng_seed,
            best_val_dsc: st.best_val_dsc,
            history: st.history,
            modulator_grad_norms: st.modulator_grad_norms,
        },
        train: record.train,
    })
}

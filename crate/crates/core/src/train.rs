//! The training loop and evaluation.

use std::fs::File;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::data::{epoch_order, Augment, Dataset};
use crate::ema::Ema;
use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::network::Model;
use crate::nn::{apply_stat_updates, BufferStore, Forward, Mode, ParamStore, StatUpdate, BN_MOMENTUM};
use crate::optim::{Sgd, SgdConfig};
use crate::schedule::Schedule;
use crate::tensor::{Real, Tensor, TensorError};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScheduleConfig {
    pub peak_lr: Real,
    pub final_lr: Real,
    /// Share of the run spent in linear warmup.
    pub warmup_fraction: Real,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        ScheduleConfig {
            peak_lr: 0.05,
            final_lr: 0.0,
            warmup_fraction: 0.05,
        }
    }
}

impl ScheduleConfig {
    pub fn schedule(&self, total_steps: usize) -> Result<Schedule> {
        Schedule::with_warmup_fraction(self.warmup_fraction, self.peak_lr, self.final_lr, total_steps)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EmaConfig {
    pub enabled: bool,
    pub decay: Real,
    /// Average batch-norm running statistics as well.
    pub include_buffers: bool,
}

impl Default for EmaConfig {
    fn default() -> Self {
        EmaConfig {
            enabled: true,
            decay: 0.9999,
            include_buffers: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSettings {
    pub batch_size: usize,
    pub label_smoothing: Real,
    /// Write a checkpoint every this many steps; 0 writes only the final one.
    pub checkpoint_every: usize,
    /// Crop and flip training images.
    pub augment: bool,
    pub augmentation: Augment,
}

impl Default for TrainSettings {
    fn default() -> Self {
        TrainSettings {
            batch_size: 32,
            label_smoothing: 0.1,
            checkpoint_every: 0,
            augment: false,
            augmentation: Augment::default(),
        }
    }
}

/// Everything the loop needs besides the model and data.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainPlan {
    pub seed: u64,
    pub steps: usize,
    pub train: TrainSettings,
    pub optimizer: SgdConfig,
    pub schedule: ScheduleConfig,
    pub ema: EmaConfig,
}

/// One metrics row.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LogRow {
    pub step: usize,
    pub lr: Real,
    pub loss: Real,
    pub top1: Real,
}

pub const METRICS_HEADER: &str = "step,lr,loss,top1";

impl LogRow {
    pub fn to_csv(&self) -> String {
        format!("{},{},{},{}", self.step, self.lr, self.loss, self.top1)
    }
}

#[derive(Debug, Clone)]
pub struct TrainRun {
    pub log: Vec<LogRow>,
    pub optimizer: Sgd,
    pub ema: Option<Ema>,
}

impl TrainRun {
    /// The stores evaluation should use: EMA shadows when present.
    pub fn eval_stores(&self, model: &Model) -> (ParamStore, BufferStore) {
        match &self.ema {
            Some(e) => e.swap_in(&model.params, &model.buffers),
            None => (model.params.clone(), model.buffers.clone()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Evaluation {
    pub loss: Real,
    pub top1: Real,
    pub count: usize,
}

/// Share of rows whose arg-max matches the label.
pub fn top1(logits: &Tensor, labels: &[usize]) -> Real {
    let k = logits.shape()[1];
    let hits = logits
        .data()
        .chunks_exact(k)
        .zip(labels)
        .filter(|(row, &y)| {
            let best = (0..k).fold(0, |b, i| if row[i] > row[b] { i } else { b });
            best == y
        })
        .count();
    hits as Real / labels.len() as Real
}

/// Eval-mode loss (without smoothing) and accuracy over a whole dataset.
pub fn evaluate(model: &Model, params: &ParamStore, buffers: &BufferStore, data: &Dataset, batch: usize) -> Result<Evaluation> {
    if data.is_empty() {
        return Err(Error::config("cannot evaluate an empty dataset"));
    }
    let (mut loss, mut hits) = (0.0, 0.0);
    let idx: Vec<usize> = (0..data.len()).collect();
    for chunk in idx.chunks(batch.max(1)) {
        let (x, y) = data.batch(chunk, None)?;
        let mut g = Graph::new();
        let xv = g.constant(x);
        let mut f = Forward::inference(&mut g, params, buffers);
        let logits = model.forward(&mut f, xv)?;
        let l = g.label_smoothed_ce(logits, &y, 0.0)?;
        loss += g.value(l).item() * chunk.len() as Real;
        hits += top1(g.value(logits), &y) * chunk.len() as Real;
    }
    let n = data.len() as Real;
    Ok(Evaluation {
        loss: loss / n,
        top1: hits / n,
        count: data.len(),
    })
}

fn checkpoint(model: &Model, plan: &TrainPlan, data: &Dataset, step: usize, opt: &Sgd, ema: Option<&Ema>) -> Checkpoint {
    Checkpoint::capture(
        plan.seed,
        step as u64,
        data.normalization.clone(),
        &model.params,
        &model.buffers,
        ema.map(|e| e.shadow.as_slice()),
        Some(&opt.velocity),
    )
}

fn save(ck: &Checkpoint, path: PathBuf) -> Result<()> {
    ck.save(&path).map_err(Error::from)
}

type StepOutput = (Real, Real, Vec<Tensor>, Vec<StatUpdate>);

/// Train-mode loss, batch accuracy, per-parameter gradients and batch
/// statistics for one batch.
fn step_gradients(model: &Model, x: Tensor, y: &[usize], eps: Real) -> Result<StepOutput> {
    let mut g = Graph::new();
    let xv = g.constant(x);
    let mut f = Forward::new(&mut g, &model.params, &model.buffers, Mode::Train);
    let logits = model.forward(&mut f, xv)?;
    let vars = f.param_vars().to_vec();
    let updates = f.into_updates();
    let loss_var = g.label_smoothed_ce(logits, y, eps)?;
    let loss = g.value(loss_var).item();
    if !loss.is_finite() {
        return Err(Error::Numeric(format!("loss is {loss}")));
    }
    let grads = g.backward(loss_var)?;
    let grads = vars
        .iter()
        .zip(model.params.iter())
        .map(|(v, p)| match v {
            Some(v) => grads.wrt(*v),
            None => Tensor::zeros(p.value.shape().to_vec()),
        })
        .collect();
    Ok((loss, top1(g.value(logits), y), grads, updates))
}

/// Train `model` in place. With `out` set, metrics stream to
/// `out/metrics.csv` and checkpoints land in `out/`. A non-finite loss or
/// gradient stops the run after saving the pre-step state as
/// `out/last_good.ckpt`.
pub fn train(model: &mut Model, data: &Dataset, plan: &TrainPlan, out: Option<&Path>) -> Result<TrainRun> {
    let bs = plan.train.batch_size;
    if bs < 2 || bs > data.len() {
        return Err(Error::config(format!(
            "batch_size {bs} must be at least 2 and at most the dataset size {}",
            data.len()
        )));
    }
    if data.classes != model.spec.classes {
        return Err(Error::config(format!(
            "dataset has {} classes, model has {}",
            data.classes, model.spec.classes
        )));
    }
    let eps = plan.train.label_smoothing;
    if !(0.0..1.0).contains(&eps) {
        return Err(Error::config(format!("label_smoothing {eps} outside [0, 1)")));
    }
    let schedule = plan.schedule.schedule(plan.steps)?;
    let mut opt = Sgd::new(&model.params, plan.optimizer.clone());
    let mut ema = plan
        .ema
        .enabled
        .then(|| Ema::new(&model.params, &model.buffers, plan.ema.decay, plan.ema.include_buffers));
    let mut metrics = match out {
        Some(dir) => {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            let path = dir.join("metrics.csv");
            let mut f = File::create(&path).map_err(|e| Error::io(&path, e))?;
            writeln!(f, "{METRICS_HEADER}").map_err(|e| Error::io(&path, e))?;
            Some((f, path))
        }
        None => None,
    };
    let per_epoch = data.len() / bs;
    let mut order = Vec::new();
    let mut log = Vec::with_capacity(plan.steps);
    for step in 1..=plan.steps {
        let epoch = ((step - 1) / per_epoch) as u64;
        let pos = (step - 1) % per_epoch;
        if pos == 0 {
            order = epoch_order(data.len(), plan.seed, epoch);
        }
        let augment = plan.train.augment.then_some((&plan.train.augmentation, plan.seed, epoch));
        let (x, y) = data.batch(&order[pos * bs..(pos + 1) * bs], augment)?;
        let lr = schedule.lr_at(step)?;

        let computed = step_gradients(model, x, &y, eps);
        let (loss, accuracy, grads, updates) = match computed {
            Ok(c) => c,
            Err(e @ (Error::Numeric(_) | Error::Tensor(TensorError::NonFinite { .. }))) => {
                if let Some(dir) = out {
                    save(&checkpoint(model, plan, data, step - 1, &opt, ema.as_ref()), dir.join("last_good.ckpt"))?;
                }
                return Err(Error::Numeric(format!("step {step}: {e}")));
            }
            Err(e) => return Err(e),
        };
        if let Err(e) = opt.step(&mut model.params, &grads, lr) {
            if let Some(dir) = out {
                save(&checkpoint(model, plan, data, step - 1, &opt, ema.as_ref()), dir.join("last_good.ckpt"))?;
            }
            return Err(Error::Numeric(format!("step {step}: {e}")));
        }
        apply_stat_updates(&mut model.buffers, &updates, BN_MOMENTUM);
        if let Some(e) = &mut ema {
            e.update(&model.params, &model.buffers);
        }

        let row = LogRow {
            step,
            lr,
            loss,
            top1: accuracy,
        };
        if let Some((f, path)) = &mut metrics {
            writeln!(f, "{}", row.to_csv()).map_err(|e| Error::io(path.as_path(), e))?;
        }
        log.push(row);
        if let Some(dir) = out {
            let every = plan.train.checkpoint_every;
            if every > 0 && step % every == 0 && step < plan.steps {
                save(
                    &checkpoint(model, plan, data, step, &opt, ema.as_ref()),
                    dir.join(format!("step-{step:06}.ckpt")),
                )?;
            }
        }
    }
    if let Some(dir) = out {
        save(
            &checkpoint(model, plan, data, plan.steps, &opt, ema.as_ref()),
            dir.join("final.ckpt"),
        )?;
    }
    Ok(TrainRun {
        log,
        optimizer: opt,
        ema,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{synthetic, SyntheticSpec};
    use crate::network::NetworkSpec;

    fn plan(steps: usize) -> TrainPlan {
        TrainPlan {
            seed: 11,
            steps,
            train: TrainSettings {
                batch_size: 8,
                ..TrainSettings::default()
            },
            optimizer: SgdConfig::default(),
            schedule: ScheduleConfig::default(),
            ema: EmaConfig {
                decay: 0.9,
                ..EmaConfig::default()
            },
        }
    }

    fn tiny() -> (Model, Dataset) {
        let data = synthetic(
            &SyntheticSpec {
                count: 24,
                ..SyntheticSpec::default()
            },
            5,
        )
        .unwrap();
        (Model::new(&NetworkSpec::preset("mini-vcr").unwrap(), 3).unwrap(), data)
    }

    #[test]
    fn lr_log_replays_schedule() {
        let (mut model, data) = tiny();
        let p = plan(6);
        let run = train(&mut model, &data, &p, None).unwrap();
        let s = p.schedule.schedule(6).unwrap();
        assert_eq!(run.log.len(), 6);
        for r in &run.log {
            assert_eq!(r.lr, s.lr_at(r.step).unwrap());
        }
    }

    #[test]
    fn runs_are_byte_reproducible() {
        let dir = tempfile::tempdir().unwrap();
        let (mut a, data) = tiny();
        let (mut b, _) = tiny();
        train(&mut a, &data, &plan(4), Some(&dir.path().join("a"))).unwrap();
        train(&mut b, &data, &plan(4), Some(&dir.path().join("b"))).unwrap();
        let read = |p: &str| std::fs::read(dir.path().join(p)).unwrap();
        assert_eq!(read("a/metrics.csv"), read("b/metrics.csv"));
        assert_eq!(read("a/final.ckpt"), read("b/final.ckpt"));
        assert_eq!(a, b);
    }

    #[test]
    fn checkpoints_carry_ema_iff_enabled() {
        let dir = tempfile::tempdir().unwrap();
        let (mut m, data) = tiny();
        let mut p = plan(2);
        p.train.checkpoint_every = 1;
        train(&mut m, &data, &p, Some(dir.path())).unwrap();
        assert!(Checkpoint::load(&dir.path().join("step-000001.ckpt")).unwrap().has_ema());
        assert!(Checkpoint::load(&dir.path().join("final.ckpt")).unwrap().has_ema());
        p.ema.enabled = false;
        let (mut m, _) = tiny();
        train(&mut m, &data, &p, Some(dir.path())).unwrap();
        assert!(!Checkpoint::load(&dir.path().join("final.ckpt")).unwrap().has_ema());
    }

    #[test]
    fn non_finite_loss_keeps_last_good_state() {
        let dir = tempfile::tempdir().unwrap();
        let (mut m, data) = tiny();
        let mut p = plan(5);
        p.schedule.peak_lr = 1e200;
        p.schedule.warmup_fraction = 0.0;
        let err = train(&mut m, &data, &p, Some(dir.path())).unwrap_err();
        assert!(matches!(err, Error::Numeric(_)), "{err}");
        let ck = Checkpoint::load(&dir.path().join("last_good.ckpt")).unwrap();
        let mut params = m.params.clone();
        let mut buffers = m.buffers.clone();
        ck.restore(&mut params, &mut buffers).unwrap();
        assert!(params.iter().all(|p| p.value.is_finite()));
    }

    #[test]
    fn rejects_bad_plans() {
        let (mut m, data) = tiny();
        let mut p = plan(3);
        p.train.batch_size = 1;
        assert!(matches!(train(&mut m, &data, &p, None), Err(Error::Config(_))));
        let mut p = plan(3);
        p.train.label_smoothing = 1.0;
        assert!(matches!(train(&mut m, &data, &p, None), Err(Error::Config(_))));
    }

    #[test]
    fn evaluation_counts_hits() {
        let logits = Tensor::new([3, 2], vec![1.0, 0.0, 0.0, 1.0, 2.0, 1.0]).unwrap();
        assert_eq!(top1(&logits, &[0, 1, 1]), 2.0 / 3.0);
        let (m, data) = tiny();
        let e = evaluate(&m, &m.params, &m.buffers, &data, 7).unwrap();
        assert_eq!(e.count, 24);
        assert!(e.loss.is_finite() && (0.0..=1.0).contains(&e.top1));
    }
}

use log::{debug, info};
use rand::seq::SliceRandom;

use super::checkpoint::Checkpoint;
use super::config::TrainConfig;
use super::metrics::{mean_predictor_mae, Metrics};
use super::optim::Optimizer;
use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::model::{forward_image, predict, LabelScale, ModelConfig, ModelParams, PassOptions};
use crate::params::{bind, flatten, Visit};
use crate::patch_graph::ImageSample;
use crate::rng;

/// Loss components of one image or the mean over a batch.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct LossReport {
    pub total: f64,
    pub contrastive: f64,
    pub l_n: f64,
    pub l_m: f64,
    pub l_v: f64,
    /// `|prediction − label|` in years.
    pub age_error: f64,
}

impl LossReport {
    fn add_scaled(&mut self, other: &LossReport, w: f64) {
        self.total += w * other.total;
        self.contrastive += w * other.contrastive;
        self.l_n += w * other.l_n;
        self.l_m += w * other.l_m;
        self.l_v += w * other.l_v;
        self.age_error += w * other.age_error;
    }
}

pub struct Trainer {
    pub config: TrainConfig,
    pub params: ModelParams,
    pub scale: LabelScale,
    pub optimizer: Optimizer,
}

impl Trainer {
    pub fn new(config: &TrainConfig, scale: LabelScale) -> Result<Self> {
        config.validate()?;
        let params = ModelParams::init(&config.model, rng::derive(config.seed, &[0x1417]));
        Ok(Self::with_params(config, params, scale))
    }

    pub fn with_params(config: &TrainConfig, params: ModelParams, scale: LabelScale) -> Self {
        Trainer {
            config: config.clone(),
            params,
            scale,
            optimizer: Optimizer::new(config),
        }
    }

    fn pass_options(&self, seed: u64) -> PassOptions<'_> {
        PassOptions {
            training: true,
            dropout: self.config.dropout,
            mask_rate: self.config.mask_rate,
            seed,
            loss: &self.config.loss,
            age_weight: self.config.age_loss_weight,
        }
    }

    /// Training-mode objective of one image and its gradient, flattened in
    /// parameter visit order.
    pub fn loss_and_gradients(&self, img: &ImageSample, seed: u64) -> Result<(LossReport, Vec<Vec<f64>>)> {
        if img.age.is_none() {
            return Err(Error::Data(format!("{}: training sample has no age label", img.id)));
        }
        let mut tape = Tape::new();
        let bound = bind(&mut tape, &self.params);
        let opts = self.pass_options(seed);
        let pass = forward_image(&mut tape, &self.config.model, &bound, self.scale, img, &opts, None)?;
        tape.backward(pass.total)?;
        let [l_n, l_m, l_v, contrastive] = pass.terms.values(&tape);
        let report = LossReport {
            total: tape.value(pass.total).values()[0],
            contrastive,
            l_n,
            l_m,
            l_v,
            age_error: pass.age_loss.map_or(0.0, |v| tape.value(v).values()[0]),
        };
        let mut grads = Vec::new();
        bound.visit(&mut |_, v: &Var| grads.push(tape.grad_tensor(*v).into_values()));
        Ok((report, grads))
    }

    /// One optimizer step on the batch mean of per-image objectives.
    /// Gradients are summed in batch order.
    pub fn train_step(&mut self, batch: &[&ImageSample], step_seed: u64) -> Result<LossReport> {
        if batch.is_empty() {
            return Err(Error::Usage("empty training batch".into()));
        }
        let w = 1.0 / batch.len() as f64;
        let mut mean = LossReport::default();
        let mut acc: Option<Vec<Vec<f64>>> = None;
        for (pos, img) in batch.iter().enumerate() {
            let (report, grads) = self.loss_and_gradients(img, rng::derive(step_seed, &[pos as u64]))?;
            mean.add_scaled(&report, w);
            match acc.as_mut() {
                None => acc = Some(grads),
                Some(sum) => {
                    for (s, g) in sum.iter_mut().zip(&grads) {
                        for (a, b) in s.iter_mut().zip(g) {
                            *a += b;
                        }
                    }
                }
            }
        }
        let mut grads = acc.expect("non-empty batch");
        for g in grads.iter_mut().flat_map(|g| g.iter_mut()) {
            *g *= w;
            if !g.is_finite() {
                return Err(Error::Numerical("non-finite gradient".into()));
            }
        }
        let mut flat = flatten(&self.params);
        let mut refs: Vec<&mut crate::tensor::Tensor> = flat.iter_mut().collect();
        self.optimizer.update(&mut refs, &grads)?;
        let mut it = flat.into_iter();
        self.params.visit_mut(&mut |_, t| *t = it.next().expect("same layout"));
        Ok(mean)
    }
}

/// Eval-mode metrics: no dropout, no masking.
pub fn evaluate(
    samples: &[ImageSample],
    model: &ModelConfig,
    params: &ModelParams,
    scale: LabelScale,
    strict: bool,
) -> Result<Metrics> {
    let errors = samples
        .iter()
        .map(|s| {
            let label = s
                .age
                .ok_or_else(|| Error::Data(format!("{}: evaluation sample has no age label", s.id)))?;
            Ok(predict(model, params, scale, s)? - label)
        })
        .collect::<Result<Vec<_>>>()?;
    Metrics::from_errors(errors, strict)
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_mae: f64,
    pub val_cs5: f64,
}

#[derive(Debug, Clone)]
pub struct TrainingOutcome {
    /// Parameters of the epoch with the lowest validation MAE (earliest on ties).
    pub best: Checkpoint,
    pub best_metrics: Metrics,
    pub log: Vec<EpochLog>,
    /// MAE on the validation set of always predicting the training-label mean.
    pub baseline_mae: f64,
    pub steps: u64,
}

pub fn labels(samples: &[ImageSample]) -> Result<Vec<f64>> {
    samples
        .iter()
        .map(|s| s.age.ok_or_else(|| Error::Data(format!("{}: sample has no age label", s.id))))
        .collect()
}

/// Seeded epoch loop with per-epoch validation and best-checkpoint selection.
pub fn run_training(
    train: &[ImageSample],
    val: &[ImageSample],
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochLog),
) -> Result<TrainingOutcome> {
    cfg.validate()?;
    if train.is_empty() || val.is_empty() {
        return Err(Error::Usage("training and validation sets must be non-empty".into()));
    }
    let train_labels = labels(train)?;
    let baseline_mae = mean_predictor_mae(&train_labels, &labels(val)?);
    let scale = LabelScale::fit(&train_labels);
    let mut trainer = Trainer::new(cfg, scale)?;
    let batch = cfg.effective_batch(train.len());
    info!(
        "training on {} samples, batch {batch}, {} epochs; mean-predictor val MAE {baseline_mae:.4}",
        train.len(),
        cfg.epochs
    );

    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut log = Vec::with_capacity(cfg.epochs);
    let mut best: Option<(Checkpoint, Metrics)> = None;
    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng::rng(rng::derive(cfg.seed, &[0xe90c, epoch as u64])));
        let mut loss_sum = 0.0;
        for chunk in order.chunks(batch) {
            let items: Vec<&ImageSample> = chunk.iter().map(|&i| &train[i]).collect();
            let step_seed = rng::derive(cfg.seed, &[0x57e9, trainer.optimizer.step]);
            let report = trainer.train_step(&items, step_seed)?;
            loss_sum += report.total * chunk.len() as f64;
        }
        let metrics = evaluate(val, &cfg.model, &trainer.params, scale, cfg.cs_strict)?;
        let entry = EpochLog {
            epoch,
            train_loss: loss_sum / train.len() as f64,
            val_mae: metrics.mae,
            val_cs5: metrics.cs_at(5),
        };
        debug!(
            "epoch {epoch}: train loss {:.5}, val MAE {:.4}, CS5 {:.3}",
            entry.train_loss, entry.val_mae, entry.val_cs5
        );
        on_epoch(&entry);
        log.push(entry);
        if best.as_ref().is_none_or(|(_, m)| metrics.mae < m.mae) {
            let ckpt = Checkpoint::new(cfg, epoch, trainer.optimizer.step, scale, &trainer.params);
            best = Some((ckpt, metrics));
        }
    }
    let (best, best_metrics) = best.expect("at least one epoch");
    Ok(TrainingOutcome {
        best,
        best_metrics,
        log,
        baseline_mae,
        steps: trainer.optimizer.step,
    })
}

/// `epoch,train_loss,val_mae,val_cs5` with shortest round-trip floats.
pub fn metrics_csv(log: &[EpochLog]) -> String {
    let mut out = String::from("epoch,train_loss,val_mae,val_cs5\n");
    for e in log {
        out.push_str(&format!("{},{},{},{}\n", e.epoch, e.train_loss, e.val_mae, e.val_cs5));
    }
    out
}

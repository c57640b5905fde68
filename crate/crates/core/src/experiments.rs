//! Ablation and sweep harnesses. Every arm trains from the same seed on the
//! same split, so arms differ only in the ablated setting.

use crate::encoder::Variant;
use crate::error::{Error, Result};
use crate::patch_graph::ImageSample;
use crate::training::{run_training, EpochLog, TrainConfig};

/// Mask rates of the sweep.
pub const MASK_RATES: [f64; 9] = [0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9];

/// On/off settings of `(L_N, L_M, L_V)`, in table order.
pub const LOSS_GRID: [[bool; 3]; 7] = [
    [false, false, false],
    [true, false, false],
    [false, true, false],
    [true, true, false],
    [true, false, true],
    [false, true, true],
    [true, true, true],
];

#[derive(Debug, Clone, PartialEq)]
pub struct ArmResult {
    /// Values of the ablated setting, one per key column.
    pub key: Vec<String>,
    pub val_mae: f64,
    pub val_cs5: f64,
    pub best_epoch: usize,
    pub final_train_loss: f64,
    pub baseline_mae: f64,
}

impl ArmResult {
    pub fn is_finite(&self) -> bool {
        [self.val_mae, self.val_cs5, self.final_train_loss, self.baseline_mae]
            .iter()
            .all(|v| v.is_finite())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Experiment {
    pub key_columns: Vec<&'static str>,
    pub arms: Vec<ArmResult>,
}

impl Experiment {
    pub fn to_csv(&self) -> String {
        let mut out = self.key_columns.join(",");
        out.push_str(",val_mae,val_cs5,best_epoch,final_train_loss,baseline_mae\n");
        for a in &self.arms {
            out.push_str(&format!(
                "{},{},{},{},{},{}\n",
                a.key.join(","),
                a.val_mae,
                a.val_cs5,
                a.best_epoch,
                a.final_train_loss,
                a.baseline_mae
            ));
        }
        out
    }

    /// Arm with the lowest validation MAE.
    pub fn best(&self) -> Option<&ArmResult> {
        self.arms.iter().min_by(|a, b| a.val_mae.total_cmp(&b.val_mae))
    }
}

/// Progress callback: arm label and the epoch just finished.
pub type Progress<'a> = &'a mut dyn FnMut(&str, &EpochLog);

fn run_arm(
    train: &[ImageSample],
    val: &[ImageSample],
    cfg: &TrainConfig,
    key: Vec<String>,
    progress: &mut dyn FnMut(&str, &EpochLog),
) -> Result<ArmResult> {
    let label = key.join(" ");
    let outcome = run_training(train, val, cfg, |e| progress(&label, e))?;
    let last = outcome.log.last().expect("at least one epoch");
    let arm = ArmResult {
        key,
        val_mae: outcome.best_metrics.mae,
        val_cs5: outcome.best_metrics.cs_at(5),
        best_epoch: outcome.best.epoch,
        final_train_loss: last.train_loss,
        baseline_mae: outcome.baseline_mae,
    };
    if !arm.is_finite() {
        return Err(Error::Numerical(format!("arm `{label}` produced non-finite metrics")));
    }
    Ok(arm)
}

/// Trains each graph-convolution variant.
pub fn ablate_conv(train: &[ImageSample], val: &[ImageSample], base: &TrainConfig, progress: Progress<'_>) -> Result<Experiment> {
    let arms = Variant::ALL
        .iter()
        .map(|&v| {
            let mut cfg = base.clone();
            cfg.model.encoder.variant = v;
            run_arm(train, val, &cfg, vec![v.name().into()], progress)
        })
        .collect::<Result<_>>()?;
    Ok(Experiment {
        key_columns: vec!["variant"],
        arms,
    })
}

/// Trains every on/off combination of the three contrastive terms. A term
/// switched on keeps its weight from `base`.
pub fn ablate_loss(train: &[ImageSample], val: &[ImageSample], base: &TrainConfig, progress: Progress<'_>) -> Result<Experiment> {
    let arms = LOSS_GRID
        .iter()
        .map(|&[n, m, v]| {
            let mut cfg = base.clone();
            let on = |flag: bool, w: f64| if flag { w } else { 0.0 };
            cfg.loss.w1 = on(n, base.loss.w1);
            cfg.loss.w2 = on(m, base.loss.w2);
            cfg.loss.w3 = on(v, base.loss.w3);
            let key = [n, m, v].iter().map(|&f| u8::from(f).to_string()).collect();
            run_arm(train, val, &cfg, key, progress)
        })
        .collect::<Result<_>>()?;
    Ok(Experiment {
        key_columns: vec!["l_n", "l_m", "l_v"],
        arms,
    })
}

pub fn mask_sweep(train: &[ImageSample], val: &[ImageSample], base: &TrainConfig, progress: Progress<'_>) -> Result<Experiment> {
    let arms = MASK_RATES
        .iter()
        .map(|&p| {
            let mut cfg = base.clone();
            cfg.mask_rate = p;
            run_arm(train, val, &cfg, vec![p.to_string()], progress)
        })
        .collect::<Result<_>>()?;
    Ok(Experiment {
        key_columns: vec!["p"],
        arms,
    })
}

use agegraph_core::dataset::{load_manifest, make_synthetic, split, DatasetManifest, Split};
use agegraph_core::patch_graph::ImageSample;
use agegraph_core::training::TrainConfig;
use agegraph_core::{rng, Error, Result};
use clap::ValueEnum;
use log::warn;

use crate::DataArgs;

/// Train/val/test fractions of a labelled dataset.
const FRACTIONS: [f64; 3] = [0.8, 0.1, 0.1];

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SplitArg {
    Train,
    Val,
    Test,
    All,
}

impl SplitArg {
    pub fn name(self) -> &'static str {
        match self {
            SplitArg::Train => "train",
            SplitArg::Val => "val",
            SplitArg::Test => "test",
            SplitArg::All => "all",
        }
    }
}

pub struct Data {
    pub manifest: DatasetManifest,
}

impl Data {
    pub fn split(&self, s: Split) -> Vec<ImageSample> {
        self.manifest.split_samples(s)
    }

    pub fn select(&self, which: SplitArg) -> Vec<ImageSample> {
        match which {
            SplitArg::Train => self.split(Split::Train),
            SplitArg::Val => self.split(Split::Val),
            SplitArg::Test => self.split(Split::Test),
            SplitArg::All => self.manifest.samples(),
        }
    }
}

/// Validation images generated alongside `n` synthetic training images.
pub fn synthetic_val_count(n: usize) -> usize {
    (n / 5).max(1)
}

/// Loads or generates the data named by `args`. Synthetic images and the
/// split of a labelled dataset both derive from the config seed.
pub fn load(args: &DataArgs, cfg: &TrainConfig) -> Result<Data> {
    let (h, w) = (cfg.model.image_height, cfg.model.image_width);
    let manifest = match (args.synthetic, &args.dataset, &args.labels) {
        (Some(n), _, _) => {
            if n == 0 {
                return Err(Error::Usage("--synthetic needs at least one image".into()));
            }
            let mut m = make_synthetic(n + synthetic_val_count(n), h, w, rng::derive(cfg.seed, &[0xda7a]))?;
            for (i, e) in m.entries.iter_mut().enumerate() {
                e.split = Some(if i < n { Split::Train } else { Split::Val });
            }
            m
        }
        (None, Some(root), Some(labels)) => {
            let m = load_manifest(labels, root, h, w)?;
            for e in &m.errors {
                warn!("skipping {}: {}", e.path.display(), e.message);
            }
            if m.is_empty() {
                return Err(Error::Data(format!("no loadable images listed in {}", labels.display())));
            }
            split(&m, FRACTIONS, rng::derive(cfg.seed, &[0x5911]))?
        }
        _ => {
            return Err(Error::Usage(
                "give --synthetic N, or --dataset DIR with --labels CSV".into(),
            ))
        }
    };
    Ok(Data { manifest })
}

//! Full per-image forward pass: stem → graph → mask → encoder, anchor path,
//! negatives, neighbour positives, losses, and the age head.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::contrastive::{
    anchor_embed, derangement, loss_total, neighbor_mean, sample_neighbors, AnchorParams,
    EmbeddingBundle, LossConfig, LossTerms, Negative,
};
use crate::encoder::{encode, EncoderConfig, EncoderParams, Mode};
use crate::error::{Error, Result};
use crate::params::{nested, nested_map, nested_mut, Visit};
use crate::patch_graph::stem::{embed_patches, StemConfig, StemParams};
use crate::patch_graph::{apply_mask, build_knn_graph, patch_batch, ImageSample, PatchGraph};
use crate::rng;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub image_height: usize,
    pub image_width: usize,
    pub patch_size: usize,
    /// Node feature width `d`.
    pub feature_dim: usize,
    /// Neighbours per node.
    pub k: usize,
    pub anchor_hidden: usize,
    pub leaky_slope: f64,
    pub stem: StemConfig,
    pub encoder: EncoderConfig,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            image_height: 64,
            image_width: 64,
            patch_size: 8,
            feature_dim: 64,
            k: 9,
            anchor_hidden: 64,
            leaky_slope: 0.01,
            stem: StemConfig::default(),
            encoder: EncoderConfig::default(),
        }
    }
}

impl ModelConfig {
    pub fn node_count(&self) -> usize {
        (self.image_height / self.patch_size.max(1)) * (self.image_width / self.patch_size.max(1))
    }

    pub fn embedding_dim(&self) -> usize {
        self.encoder.output_dim(self.feature_dim)
    }

    pub fn validate(&self) -> Result<()> {
        let p = self.patch_size;
        if p == 0 || !self.image_height.is_multiple_of(p) || !self.image_width.is_multiple_of(p) {
            return Err(Error::Config(format!(
                "patch size {p} does not divide {}×{}",
                self.image_height, self.image_width
            )));
        }
        if self.feature_dim == 0 || self.anchor_hidden == 0 {
            return Err(Error::Config("feature widths must be positive".into()));
        }
        let enc = &self.encoder;
        if enc.hidden_dim == 0 || enc.out_dim == 0 || enc.relation_count == 0 {
            return Err(Error::Config("encoder widths must be positive".into()));
        }
        let n = self.node_count();
        if self.k == 0 || self.k >= n {
            return Err(Error::Config(format!("K must satisfy 0 < K < N = {n}, got {}", self.k)));
        }
        if !(self.leaky_slope > 0.0 && self.leaky_slope < 1.0) {
            return Err(Error::Config("leaky_slope must lie in (0,1)".into()));
        }
        self.stem.validate(p)
    }
}

/// Mean-pool → linear age regressor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeadParams<T = Tensor> {
    /// `[d_out, 1]`
    pub weight: T,
    /// `[1]`
    pub bias: T,
}

impl<T> Visit<T> for HeadParams<T> {
    type Mapped<U> = HeadParams<U>;

    fn visit<'a>(&'a self, f: &mut dyn FnMut(&str, &'a T)) {
        f("weight", &self.weight);
        f("bias", &self.bias);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut T)) {
        f("weight", &mut self.weight);
        f("bias", &mut self.bias);
    }

    fn map<U>(&self, f: &mut dyn FnMut(&str, &T) -> U) -> HeadParams<U> {
        HeadParams {
            weight: f("weight", &self.weight),
            bias: f("bias", &self.bias),
        }
    }
}

/// `mean_rows(H)·w + b` as a `[1]` tensor.
pub fn age_head(tape: &mut Tape, embeddings: Var, head: &HeadParams<Var>) -> Result<Var> {
    let pooled = tape.mean_rows(embeddings)?;
    let y = tape.matmul(pooled, head.weight)?;
    let y = tape.add_bias(y, head.bias)?;
    tape.reshape(y, vec![1])
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelParams<T = Tensor> {
    pub stem: StemParams<T>,
    pub anchor: AnchorParams<T>,
    pub encoder: EncoderParams<T>,
    pub head: HeadParams<T>,
}

impl ModelParams {
    /// Glorot-uniform weights, zero biases, seeded.
    pub fn init(cfg: &ModelConfig, seed: u64) -> Self {
        let d = cfg.feature_dim;
        let out = cfg.embedding_dim();
        ModelParams {
            stem: StemParams::init(&cfg.stem, d, rng::derive(seed, &[1])),
            anchor: AnchorParams::init(d, cfg.anchor_hidden, out, rng::derive(seed, &[2])),
            encoder: EncoderParams::init(&cfg.encoder, d, rng::derive(seed, &[3])),
            head: HeadParams {
                weight: rng::glorot_uniform(&[out, 1], out, 1, rng::derive(seed, &[4])),
                bias: Tensor::zeros(&[1]),
            },
        }
    }
}

impl<T> Visit<T> for ModelParams<T> {
    type Mapped<U> = ModelParams<U>;

    fn visit<'a>(&'a self, f: &mut dyn FnMut(&str, &'a T)) {
        nested("stem", &self.stem, f);
        nested("anchor", &self.anchor, f);
        nested("encoder", &self.encoder, f);
        nested("head", &self.head, f);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut T)) {
        nested_mut("stem", &mut self.stem, f);
        nested_mut("anchor", &mut self.anchor, f);
        nested_mut("encoder", &mut self.encoder, f);
        nested_mut("head", &mut self.head, f);
    }

    fn map<U>(&self, f: &mut dyn FnMut(&str, &T) -> U) -> ModelParams<U> {
        ModelParams {
            stem: nested_map("stem", &self.stem, f),
            anchor: nested_map("anchor", &self.anchor, f),
            encoder: nested_map("encoder", &self.encoder, f),
            head: nested_map("head", &self.head, f),
        }
    }
}

/// Affine map from head output to years, fitted on training labels so the
/// head regresses a standardized target.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LabelScale {
    pub offset: f64,
    pub scale: f64,
}

impl Default for LabelScale {
    fn default() -> Self {
        LabelScale {
            offset: 0.0,
            scale: 1.0,
        }
    }
}

impl LabelScale {
    /// Mean and population standard deviation of `labels` (scale 1 if constant).
    pub fn fit(labels: &[f64]) -> Self {
        if labels.is_empty() {
            return Self::default();
        }
        let n = labels.len() as f64;
        let mean = labels.iter().sum::<f64>() / n;
        let var = labels.iter().map(|y| (y - mean) * (y - mean)).sum::<f64>() / n;
        let sd = var.sqrt();
        LabelScale {
            offset: mean,
            scale: if sd > 1e-12 { sd } else { 1.0 },
        }
    }
}

/// Sampled, non-differentiable choices of one pass. Reusing it freezes the
/// graph, mask, shuffles and neighbour samples across evaluations.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageStructure {
    pub graph: PatchGraph,
    pub negatives: Vec<Vec<usize>>,
    pub neighbor_samples: Vec<Vec<usize>>,
}

#[derive(Debug, Clone, Copy)]
pub struct PassOptions<'a> {
    pub training: bool,
    pub dropout: f64,
    pub mask_rate: f64,
    pub seed: u64,
    pub loss: &'a LossConfig,
    /// Weight `λ` of the L1 age term.
    pub age_weight: f64,
}

/// Differentiable outputs of one image pass.
#[derive(Debug, Clone)]
pub struct ImagePass {
    /// `ξ`, unmasked `[N, d]`
    pub features: Var,
    /// `H⁺` over the masked features.
    pub structural: Var,
    /// Encoder output over the unmasked features, fed to the age head.
    pub head_input: Var,
    pub bundle: EmbeddingBundle,
    pub terms: LossTerms,
    /// Predicted age in years, `[1]`.
    pub prediction: Var,
    pub age_loss: Option<Var>,
    pub total: Var,
    pub structure: ImageStructure,
}

fn stem_features(
    tape: &mut Tape,
    cfg: &ModelConfig,
    params: &ModelParams<Var>,
    img: &ImageSample,
) -> Result<Var> {
    let patches = tape.constant(patch_batch(img, cfg.patch_size)?);
    embed_patches(tape, patches, &params.stem, &cfg.stem, cfg.leaky_slope)
}

fn predict_years(tape: &mut Tape, h: Var, head: &HeadParams<Var>, scale: LabelScale) -> Result<Var> {
    let raw = age_head(tape, h, head)?;
    let y = tape.scale(raw, scale.scale)?;
    tape.add_scalar(y, scale.offset)
}

/// Builds the sampled structure of a pass from the current features.
pub fn sample_structure(
    cfg: &ModelConfig,
    features: &Tensor,
    opts: &PassOptions<'_>,
) -> Result<ImageStructure> {
    let graph = build_knn_graph(features, cfg.k)?;
    let graph = apply_mask(&graph, opts.mask_rate, rng::derive(opts.seed, &[0x3a5]))?;
    let n = graph.node_count();
    let negatives = (0..opts.loss.negative_count)
        .map(|m| derangement(n, rng::derive(opts.seed, &[0x4e6, m as u64])))
        .collect::<Result<Vec<_>>>()?;
    let neighbor_samples =
        sample_neighbors(&graph, opts.loss.neighbor_samples, rng::derive(opts.seed, &[0x5b1]))?;
    Ok(ImageStructure {
        graph,
        negatives,
        neighbor_samples,
    })
}

/// Runs the full objective for one image. With `structure = None` the graph
/// and all samples are drawn from `opts.seed` and the current features.
pub fn forward_image(
    tape: &mut Tape,
    cfg: &ModelConfig,
    params: &ModelParams<Var>,
    scale: LabelScale,
    img: &ImageSample,
    opts: &PassOptions<'_>,
    structure: Option<&ImageStructure>,
) -> Result<ImagePass> {
    let xi = stem_features(tape, cfg, params, img)?;
    let structure = match structure {
        Some(s) => s.clone(),
        None => sample_structure(cfg, tape.value(xi), opts)?,
    };
    let mode = Mode {
        training: opts.training,
        dropout: opts.dropout,
        slope: cfg.leaky_slope,
        seed: opts.seed,
    };
    let masked = tape.mask_rows(xi, structure.graph.mask_flags())?;
    let structural = encode(
        tape,
        masked,
        &structure.graph,
        &params.encoder,
        &cfg.encoder,
        mode,
    )?;
    let anchor = anchor_embed(tape, xi, &params.anchor, mode)?;
    let negatives = structure
        .negatives
        .iter()
        .map(|perm| {
            Ok(Negative {
                rows: tape.gather_rows(anchor, perm.clone())?,
                permutation: perm.clone(),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let neighbor_pos = neighbor_mean(tape, structural, &structure.neighbor_samples)?;
    let bundle = EmbeddingBundle {
        anchor,
        structural_pos: structural,
        neighbor_pos,
        negatives,
    };
    let terms = loss_total(tape, &bundle, opts.loss)?;
    // the head reads an unmasked pass so training matches eval-time inputs
    let head_input = if structure.graph.mask_rows.is_empty() {
        structural
    } else {
        encode(tape, xi, &structure.graph, &params.encoder, &cfg.encoder, mode)?
    };
    let prediction = predict_years(tape, head_input, &params.head, scale)?;

    let (age_loss, total) = match img.age {
        Some(label) if opts.age_weight != 0.0 => {
            let target = tape.constant(Tensor::scalar(label));
            let err = tape.sub(prediction, target)?;
            let abs = tape.abs(err)?;
            let weighted = tape.scale(abs, opts.age_weight)?;
            let weighted = tape.reshape(weighted, vec![1])?;
            let total = tape.add(terms.total, weighted)?;
            (Some(abs), total)
        }
        _ => (None, terms.total),
    };
    Ok(ImagePass {
        features: xi,
        structural,
        head_input,
        bundle,
        terms,
        prediction,
        age_loss,
        total,
        structure,
    })
}

/// Eval-mode prediction in years: no dropout, no mask, no losses.
pub fn predict(
    cfg: &ModelConfig,
    params: &ModelParams,
    scale: LabelScale,
    img: &ImageSample,
) -> Result<f64> {
    let mut tape = Tape::new();
    let bound = params.map(&mut |_, t| tape.constant(t.clone()));
    let xi = stem_features(&mut tape, cfg, &bound, img)?;
    let graph = build_knn_graph(tape.value(xi), cfg.k)?;
    let h = encode(
        &mut tape,
        xi,
        &graph,
        &bound.encoder,
        &cfg.encoder,
        Mode::eval(cfg.leaky_slope),
    )?;
    let y = predict_years(&mut tape, h, &bound.head, scale)?;
    tape.value(y).item()
}

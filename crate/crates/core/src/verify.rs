//! Finite-difference gradient suite over every differentiable op, each model
//! stage, and the full per-image objective on small graphs (N ≤ 8, d ≤ 8).

use std::fmt;

use crate::autodiff::{Groups, Tape, Var};
use crate::contrastive::{anchor_embed, loss_total, loss_triplet, loss_upper, neighbor_mean, AnchorParams, EmbeddingBundle, LossConfig, Negative};
use crate::dataset::synthetic_image;
use crate::encoder::{attention_scores, encode, gcn_layer, variant_aggregate, EncoderConfig, EncoderParams, Mode, Variant};
use crate::error::Result;
use crate::gradcheck::{grad_check, GradCheckReport, DEFAULT_EPS};
use crate::model::{age_head, forward_image, sample_structure, HeadParams, LabelScale, ModelConfig, ModelParams, PassOptions};
use crate::params::{flatten, rebind, Visit};
use crate::patch_graph::stem::{embed_patches, StemConfig, StemParams};
use crate::patch_graph::{build_knn_graph, patch_batch, ImageSample, PatchGraph};
use crate::rng::{self, uniform_tensor};
use crate::tensor::Tensor;

pub const TOLERANCE: f64 = 1e-4;
const ATTEMPTS: u64 = 64;
/// Negative slope of every leaky ReLU in the checked graphs. Paths through
/// several negative branches at the training slope of 0.01 shrink some
/// gradients below what central differences resolve in f64.
const SLOPE: f64 = 0.2;

#[derive(Debug, Clone)]
pub struct CheckResult {
    pub name: String,
    /// `None` when no kink-free test point was found.
    pub report: Option<GradCheckReport>,
    pub seed: u64,
}

impl CheckResult {
    pub fn max_rel_error(&self) -> f64 {
        self.report.as_ref().map_or(f64::INFINITY, |r| r.max_rel_error)
    }

    pub fn passed(&self, tolerance: f64) -> bool {
        self.max_rel_error() <= tolerance
    }
}

#[derive(Debug, Clone)]
pub struct SuiteReport {
    pub tolerance: f64,
    pub results: Vec<CheckResult>,
}

impl SuiteReport {
    pub fn passed(&self) -> bool {
        self.results.iter().all(|r| r.passed(self.tolerance))
    }

    pub fn worst(&self) -> Option<&CheckResult> {
        self.results
            .iter()
            .max_by(|a, b| a.max_rel_error().total_cmp(&b.max_rel_error()))
    }
}

impl fmt::Display for SuiteReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for r in &self.results {
            let verdict = if r.passed(self.tolerance) { "ok" } else { "FAIL" };
            match &r.report {
                Some(rep) => {
                    write!(
                        f,
                        "{verdict:4} {:<28} max rel err {:.3e} over {} elements",
                        r.name, rep.max_rel_error, rep.checked
                    )?;
                    match rep.worst {
                        Some(o) if !r.passed(self.tolerance) => writeln!(
                            f,
                            " (input {} element {}: analytic {:.6e}, numeric {:.6e})",
                            o.input, o.element, o.analytic, o.numeric
                        )?,
                        _ => writeln!(f)?,
                    }
                }
                None => writeln!(f, "{verdict:4} {:<28} no test point clear of kinks", r.name)?,
            }
        }
        if let Some(w) = self.worst() {
            write!(f, "worst: {} ({:.3e})", w.name, w.max_rel_error())?;
        }
        Ok(())
    }
}

type Build<'a> = dyn Fn(&mut Tape, &[Var]) -> Result<Var> + 'a;

/// First seeded attempt whose finite-difference probes all stay on the
/// branch of the base point.
fn first_smooth(name: &str, mut attempt: impl FnMut(u64) -> Result<GradCheckReport>) -> Result<CheckResult> {
    for seed in 0..ATTEMPTS {
        let report = attempt(seed)?;
        if report.kink_crossings == 0 {
            return Ok(CheckResult {
                name: name.into(),
                report: Some(report),
                seed,
            });
        }
    }
    Ok(CheckResult {
        name: name.into(),
        report: None,
        seed: ATTEMPTS,
    })
}

fn check(name: &str, inputs: &dyn Fn(u64) -> Vec<Tensor>, f: &Build<'_>) -> Result<CheckResult> {
    first_smooth(name, |seed| grad_check(|t, v| f(t, v), &inputs(seed), DEFAULT_EPS))
}

/// Redraws every parameter from U(−1, 1). Training-scale initial weights
/// give gradients small enough that central-difference roundoff dominates.
fn randomize<P: Visit<Tensor>>(mut p: P, seed: u64) -> P {
    let mut i = 0u64;
    p.visit_mut(&mut |_, t| {
        *t = uniform_tensor(t.shape(), -1.0, 1.0, rng::derive(seed, &[0xa11, i]));
        i += 1;
    });
    p
}

fn u(shape: &[usize], seed: u64, tag: u64) -> Tensor {
    uniform_tensor(shape, -1.0, 1.0, rng::derive(seed, &[tag]))
}

/// Weighted sum readout, so every output element gets a distinct weight.
fn readout(tape: &mut Tape, x: Var, seed: u64) -> Result<Var> {
    let w = uniform_tensor(tape.shape(x), -1.0, 1.0, rng::derive(seed, &[0x5ead]));
    let w = tape.constant(w);
    let p = tape.mul(x, w)?;
    tape.sum(p)
}

fn op_checks(out: &mut Vec<CheckResult>) -> Result<()> {
    let two = |s| vec![u(&[4, 3], s, 1), u(&[4, 3], s, 2)];
    out.push(check("add", &two, &|t, v| {
        let y = t.add(v[0], v[1])?;
        readout(t, y, 1)
    })?);
    out.push(check("sub", &two, &|t, v| {
        let y = t.sub(v[0], v[1])?;
        readout(t, y, 2)
    })?);
    out.push(check("mul", &two, &|t, v| {
        let y = t.mul(v[0], v[1])?;
        readout(t, y, 3)
    })?);
    out.push(check("scale/add_scalar", &|s| vec![u(&[3, 3], s, 1)], &|t, v| {
        let y = t.scale(v[0], -1.7)?;
        let y = t.add_scalar(y, 0.4)?;
        readout(t, y, 4)
    })?);
    out.push(check("leaky_relu", &|s| vec![u(&[5, 4], s, 1)], &|t, v| {
        let y = t.leaky_relu(v[0], 0.2)?;
        readout(t, y, 5)
    })?);
    out.push(check("dropout (training)", &|s| vec![u(&[6, 5], s, 1)], &|t, v| {
        let y = t.dropout(v[0], 0.5, 99, true)?;
        readout(t, y, 6)
    })?);
    out.push(check("matmul", &|s| vec![u(&[4, 3], s, 1), u(&[3, 5], s, 2)], &|t, v| {
        let y = t.matmul(v[0], v[1])?;
        readout(t, y, 7)
    })?);
    for stride in [1, 2] {
        out.push(check(
            &format!("conv2d stride {stride}"),
            &|s| vec![u(&[2, 5, 5, 2], s, 1), u(&[3, 3, 2, 3], s, 2)],
            &|t, v| {
                let y = t.conv2d(v[0], v[1], stride)?;
                readout(t, y, 8)
            },
        )?);
    }
    out.push(check("add_bias", &|s| vec![u(&[3, 4], s, 1), u(&[4], s, 2)], &|t, v| {
        let y = t.add_bias(v[0], v[1])?;
        readout(t, y, 9)
    })?);
    out.push(check("spatial_mean", &|s| vec![u(&[2, 3, 3, 4], s, 1)], &|t, v| {
        let y = t.spatial_mean(v[0])?;
        readout(t, y, 10)
    })?);
    out.push(check("mean_rows/mean", &|s| vec![u(&[5, 3], s, 1)], &|t, v| {
        let m = t.mean_rows(v[0])?;
        let m = t.mul(m, m)?;
        t.mean(m)
    })?);
    out.push(check("gather_rows", &|s| vec![u(&[4, 3], s, 1)], &|t, v| {
        let y = t.gather_rows(v[0], vec![2, 0, 2, 3, 1, 2])?;
        readout(t, y, 11)
    })?);
    out.push(check("concat_cols", &|s| vec![u(&[3, 2], s, 1), u(&[3, 4], s, 2)], &|t, v| {
        let y = t.concat_cols(v[0], v[1])?;
        readout(t, y, 12)
    })?);
    out.push(check("scale_rows", &|s| vec![u(&[4, 3], s, 1), u(&[4], s, 2)], &|t, v| {
        let y = t.scale_rows(v[0], v[1])?;
        readout(t, y, 13)
    })?);
    out.push(check("segment_sum", &|s| vec![u(&[6, 3], s, 1)], &|t, v| {
        let y = t.segment_sum(v[0], vec![0, 2, 1, 0, 2, 2], 3)?;
        readout(t, y, 14)
    })?);
    out.push(check("segment_max", &|s| vec![u(&[6, 3], s, 1)], &|t, v| {
        let y = t.segment_max(v[0], &[vec![0, 3], vec![1, 2, 5], vec![4]])?;
        readout(t, y, 15)
    })?);
    out.push(check("softmax_over_groups", &|s| vec![u(&[7], s, 1)], &|t, v| {
        let groups = Groups::new(vec![vec![0, 2, 4], vec![1, 3], vec![5, 6]])?;
        let y = t.softmax_over_groups(v[0], groups)?;
        readout(t, y, 16)
    })?);
    out.push(check("row_distance_sq", &two, &|t, v| {
        let y = t.row_distance_sq(v[0], v[1])?;
        readout(t, y, 17)
    })?);
    out.push(check("clamp_min0/clamp_max0", &|s| vec![u(&[4, 3], s, 1)], &|t, v| {
        let a = t.clamp_min0(v[0])?;
        let b = t.clamp_max0(v[0])?;
        let b = t.scale(b, 3.0)?;
        let y = t.add(a, b)?;
        readout(t, y, 18)
    })?);
    out.push(check("abs", &|s| vec![u(&[4, 3], s, 1)], &|t, v| {
        let y = t.abs(v[0])?;
        readout(t, y, 19)
    })?);
    out.push(check("mask_rows/reshape", &|s| vec![u(&[4, 3], s, 1)], &|t, v| {
        let y = t.mask_rows(v[0], vec![false, true, false, true])?;
        let y = t.reshape(y, vec![2, 6])?;
        readout(t, y, 20)
    })?);
    Ok(())
}

fn small_graph(seed: u64) -> PatchGraph {
    build_knn_graph(&uniform_tensor(&[8, 5], -1.0, 1.0, rng::derive(seed, &[0x6a])), 3)
        .expect("8 nodes admit K = 3")
}

fn encoder_cfg(variant: Variant) -> EncoderConfig {
    EncoderConfig {
        layer_count: 2,
        hidden_dim: 6,
        out_dim: 5,
        variant,
        bias: true,
        ..EncoderConfig::default()
    }
}

fn encoder_params(cfg: &EncoderConfig, seed: u64) -> EncoderParams {
    randomize(EncoderParams::init(cfg, 5, seed), seed)
}

fn training_mode(seed: u64) -> Mode {
    Mode {
        training: true,
        dropout: 0.5,
        slope: SLOPE,
        seed,
    }
}

fn module_checks(out: &mut Vec<CheckResult>) -> Result<()> {
    let stem_cfg = StemConfig {
        channels: 3,
        kernel1: 3,
        stride1: 1,
        kernel2: 2,
        stride2: 2,
    };
    let stem_template = StemParams::init(&stem_cfg, 4, 1);
    out.push(check(
        "stem",
        &|s| {
            let mut x = flatten(&randomize(StemParams::init(&stem_cfg, 4, s), s));
            x.push(uniform_tensor(&[3, 6, 6, 3], 0.0, 1.0, s));
            x
        },
        &|t, v| {
            let (patches, ps) = v.split_last().expect("inputs");
            let bound = rebind(&stem_template, ps);
            let y = embed_patches(t, *patches, &bound, &stem_cfg, SLOPE)?;
            readout(t, y, 21)
        },
    )?);

    let att_cfg = encoder_cfg(Variant::MaxRelative);
    let att_template = encoder_params(&att_cfg, 0).layers.remove(0);
    for (name, with_gcn) in [("attention_scores", false), ("gcn_layer", true)] {
        out.push(check(
            name,
            &|s| {
                let g = small_graph(s);
                let mut x = flatten(&encoder_params(&att_cfg, s).layers[0]);
                x.push(g.node_features);
                x
            },
            &|t, v| {
                let (h, ps) = v.split_last().expect("inputs");
                let layer = rebind(&att_template, ps);
                let g = small_graph(0);
                let att = attention_scores(t, *h, &g, &layer, 0, training_mode(3))?;
                let y = if with_gcn {
                    gcn_layer(t, *h, &g, &att, &layer, &att_cfg, SLOPE)?
                } else {
                    att.omega
                };
                readout(t, y, 22)
            },
        )?);
    }

    for variant in Variant::ALL {
        let cfg = encoder_cfg(variant);
        let template = encoder_params(&cfg, 0);
        let layer_template = template.layers[0].clone();
        out.push(check(
            &format!("variant {variant}"),
            &|s| {
                let mut x = flatten(&encoder_params(&cfg, s).layers[0]);
                x.push(u(&[8, 6], s, 5));
                x
            },
            &|t, v| {
                let (z, ps) = v.split_last().expect("inputs");
                let layer = rebind(&layer_template, ps);
                let y = variant_aggregate(t, variant, *z, &small_graph(0), &layer)?;
                readout(t, y, 23)
            },
        )?);
        out.push(check(
            &format!("encode {variant}"),
            &|s| {
                let mut x = flatten(&encoder_params(&cfg, s));
                x.push(u(&[8, 5], s, 6));
                x
            },
            &|t, v| {
                let (h, ps) = v.split_last().expect("inputs");
                let bound = rebind(&template, ps);
                let y = encode(t, *h, &small_graph(0), &bound, &cfg, training_mode(4))?;
                readout(t, y, 24)
            },
        )?);
    }

    let anchor_template = AnchorParams::init(5, 6, 4, 0);
    out.push(check(
        "anchor_embed",
        &|s| {
            let mut x = flatten(&randomize(AnchorParams::init(5, 6, 4, s), s));
            x.push(u(&[8, 5], s, 7));
            x
        },
        &|t, v| {
            let (xi, ps) = v.split_last().expect("inputs");
            let y = anchor_embed(t, *xi, &rebind(&anchor_template, ps), training_mode(5))?;
            readout(t, y, 25)
        },
    )?);

    out.push(check("neighbor_mean", &|s| vec![u(&[8, 4], s, 8)], &|t, v| {
        let samples: Vec<Vec<usize>> = small_graph(0).neighbors.iter().map(|n| n[..2].to_vec()).collect();
        let y = neighbor_mean(t, v[0], &samples)?;
        readout(t, y, 26)
    })?);

    let head = |s| HeadParams {
        weight: u(&[5, 1], s, 10),
        bias: u(&[1], s, 11),
    };
    let head_template = head(0);
    out.push(check(
        "age_head",
        &|s| {
            let mut x = flatten(&head(s));
            x.push(u(&[6, 5], s, 9));
            x
        },
        &|t, v| {
            let (h, ps) = v.split_last().expect("inputs");
            let y = age_head(t, *h, &rebind(&head_template, ps))?;
            let y = t.mul(y, y)?;
            t.sum(y)
        },
    )?);

    let three = |s| vec![u(&[6, 3], s, 1), u(&[6, 3], s, 2), u(&[6, 3], s, 3)];
    out.push(check("loss_triplet", &three, &|t, v| loss_triplet(t, v[0], v[1], v[2], 0.8))?);
    out.push(check("loss_upper", &three, &|t, v| loss_upper(t, v[0], v[1], v[2], 0.8, 0.2))?);
    let perms = [vec![1, 2, 0, 4, 5, 3], vec![5, 0, 1, 2, 3, 4]];
    out.push(check("loss_total", &three, &|t, v| {
        let negatives = perms
            .iter()
            .map(|p| {
                Ok(Negative {
                    rows: t.gather_rows(v[0], p.clone())?,
                    permutation: p.clone(),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let bundle = EmbeddingBundle {
            anchor: v[0],
            structural_pos: v[1],
            neighbor_pos: v[2],
            negatives,
        };
        let cfg = LossConfig {
            negative_count: 2,
            ..LossConfig::default()
        };
        Ok(loss_total(t, &bundle, &cfg)?.total)
    })?);
    Ok(())
}

/// Model small enough for finite differences: 8×12 images cut into 4×4
/// patches give N = 6 nodes of width d = 6.
pub fn small_model(variant: Variant) -> ModelConfig {
    ModelConfig {
        image_height: 8,
        image_width: 12,
        patch_size: 4,
        feature_dim: 6,
        k: 3,
        anchor_hidden: 6,
        leaky_slope: SLOPE,
        stem: StemConfig {
            channels: 3,
            kernel1: 3,
            stride1: 1,
            kernel2: 2,
            stride2: 2,
        },
        encoder: EncoderConfig {
            layer_count: 2,
            hidden_dim: 6,
            out_dim: 5,
            variant,
            bias: true,
            ..EncoderConfig::default()
        },
    }
}

fn options(loss: &LossConfig, seed: u64) -> PassOptions<'_> {
    PassOptions {
        training: true,
        dropout: 0.5,
        mask_rate: 0.5,
        seed,
        loss,
        age_weight: 0.0,
    }
}

/// The contrastive objective of one image through stem, mask, attention,
/// encoder, anchor path and negatives, against every model parameter. Mask,
/// dropout, negatives and neighbour samples are drawn once and held fixed.
fn end_to_end(variant: Variant) -> Result<CheckResult> {
    let cfg = small_model(variant);
    let loss = LossConfig {
        neighbor_samples: 2,
        negative_count: 2,
        ..LossConfig::default()
    };
    let scale = LabelScale {
        offset: 0.0,
        scale: 1.0,
    };
    let template = ModelParams::init(&cfg, 0);
    first_smooth(&format!("end-to-end {variant}"), |seed| {
        let params = randomize(ModelParams::init(&cfg, seed), seed);
        let img = ImageSample::new("check", synthetic_image(8, 12, seed), None)?;
        let opts = options(&loss, seed);
        let structure = {
            let mut tape = Tape::new();
            let stem = rebind(
                &template.stem,
                &flatten(&params.stem).into_iter().map(|t| tape.constant(t)).collect::<Vec<_>>(),
            );
            let patches = tape.constant(patch_batch(&img, cfg.patch_size)?);
            let xi = embed_patches(&mut tape, patches, &stem, &cfg.stem, cfg.leaky_slope)?;
            sample_structure(&cfg, tape.value(xi), &opts)?
        };
        let f = |t: &mut Tape, v: &[Var]| -> Result<Var> {
            let bound = rebind(&template, v);
            let pass = forward_image(t, &cfg, &bound, scale, &img, &opts, Some(&structure))?;
            Ok(pass.terms.total)
        };
        grad_check(f, &flatten(&params), DEFAULT_EPS)
    })
}

/// The whole suite at the given relative-error tolerance.
pub fn run_gradient_suite(tolerance: f64) -> Result<SuiteReport> {
    let mut results = Vec::new();
    op_checks(&mut results)?;
    module_checks(&mut results)?;
    for variant in Variant::ALL {
        results.push(end_to_end(variant)?);
    }
    Ok(SuiteReport { tolerance, results })
}

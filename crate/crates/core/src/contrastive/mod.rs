//! Anchor, positive and negative embeddings and the three-term triplet objective.
//!
//! With `d⁺ = ‖h − h⁺‖²` and `d⁻ = ‖h − h⁻‖²` per row, averaged over rows:
//!
//! ```text
//! L_N = mean max(d(h,H⁺) − d⁻ + α, 0)
//! L_M = mean max(d(h,H̃⁺) − d⁻ + α, 0)
//! L_V = −mean min(d(h,H⁺) − d⁻ + α + β, 0)
//! L   = w1·L_N + w2·L_M + w3·L_V
//! ```
//!
//! `L_V` vanishes exactly when every row satisfies `d⁻ ≤ d⁺ + α + β`.

use rand::seq::index::sample;
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::encoder::Mode;
use crate::error::{Error, Result};
use crate::params::Visit;
use crate::patch_graph::PatchGraph;
use crate::rng;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossConfig {
    pub alpha: f64,
    pub beta: f64,
    pub w1: f64,
    pub w2: f64,
    pub w3: f64,
    /// Neighbours averaged per row of `H̃⁺`.
    pub neighbor_samples: usize,
    /// Independent row shuffles drawn as negatives; losses average over them.
    pub negative_count: usize,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            alpha: 0.8,
            beta: 0.2,
            w1: 1.0,
            w2: 0.5,
            w3: 0.5,
            neighbor_samples: 5,
            negative_count: 1,
        }
    }
}

impl LossConfig {
    /// `allow_zero_weights` admits `w = (0,0,0)` for supervised-only runs.
    pub fn validate(&self, allow_zero_weights: bool) -> Result<()> {
        if !(self.alpha > 0.0) || !(self.beta > 0.0) {
            return Err(Error::Config(format!(
                "alpha and beta must be positive, got {} and {}",
                self.alpha, self.beta
            )));
        }
        let w = [self.w1, self.w2, self.w3];
        if w.iter().any(|&x| !(x >= 0.0)) {
            return Err(Error::Config("loss weights must be non-negative".into()));
        }
        if !allow_zero_weights && w.iter().all(|&x| x == 0.0) {
            return Err(Error::Config("at least one loss weight must be positive".into()));
        }
        if self.neighbor_samples == 0 || self.negative_count == 0 {
            return Err(Error::Config(
                "neighbor_samples and negative_count must be positive".into(),
            ));
        }
        Ok(())
    }
}

/// Two-layer per-node MLP of the anchor path.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnchorParams<T = Tensor> {
    /// `[d, hidden]`
    pub w1: T,
    /// `[hidden, d_out]`
    pub w2: T,
}

impl AnchorParams {
    pub fn init(d_in: usize, hidden: usize, d_out: usize, seed: u64) -> Self {
        AnchorParams {
            w1: rng::glorot_uniform(&[d_in, hidden], d_in, hidden, rng::derive(seed, &[1])),
            w2: rng::glorot_uniform(&[hidden, d_out], hidden, d_out, rng::derive(seed, &[2])),
        }
    }
}

impl<T> Visit<T> for AnchorParams<T> {
    type Mapped<U> = AnchorParams<U>;

    fn visit<'a>(&'a self, f: &mut dyn FnMut(&str, &'a T)) {
        f("w1", &self.w1);
        f("w2", &self.w2);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut T)) {
        f("w1", &mut self.w1);
        f("w2", &mut self.w2);
    }

    fn map<U>(&self, f: &mut dyn FnMut(&str, &T) -> U) -> AnchorParams<U> {
        AnchorParams {
            w1: f("w1", &self.w1),
            w2: f("w2", &self.w2),
        }
    }
}

/// `H = dropout(leaky_relu(ξ·W1))·W2`, row by row, bypassing the graph.
pub fn anchor_embed(tape: &mut Tape, xi: Var, params: &AnchorParams<Var>, mode: Mode) -> Result<Var> {
    let h = tape.matmul(xi, params.w1)?;
    let h = tape.leaky_relu(h, mode.slope)?;
    let h = tape.dropout(h, mode.dropout, rng::derive(mode.seed, &[0xa4c]), mode.training)?;
    tape.matmul(h, params.w2)
}

/// A uniformly random permutation of `0..n` without fixed points.
pub fn derangement(n: usize, seed: u64) -> Result<Vec<usize>> {
    if n < 2 {
        return Err(Error::Config(format!(
            "a row shuffle without fixed points needs at least 2 rows, got {n}"
        )));
    }
    let mut r = rng::rng(seed);
    let mut perm: Vec<usize> = (0..n).collect();
    // rejection sampling: uniform over derangements, ~e draws expected
    loop {
        perm.shuffle(&mut r);
        if perm.iter().enumerate().all(|(i, &p)| i != p) {
            return Ok(perm);
        }
    }
}

/// Rows of `h` reordered by a seeded derangement; row `i` of the result is
/// row `permutation[i]` of `h`.
pub fn negative_shuffle(tape: &mut Tape, h: Var, seed: u64) -> Result<(Var, Vec<usize>)> {
    let perm = derangement(tape.value(h).rows(), seed)?;
    let out = tape.gather_rows(h, perm.clone())?;
    Ok((out, perm))
}

/// For every node, `n` of its neighbours drawn without replacement; all of
/// them, in list order, when `n == K`.
pub fn sample_neighbors(g: &PatchGraph, n: usize, seed: u64) -> Result<Vec<Vec<usize>>> {
    if n == 0 || n > g.k {
        return Err(Error::Config(format!(
            "neighbor sample count must lie in 1..={}, got {n}",
            g.k
        )));
    }
    let mut r = rng::rng(seed);
    Ok(g.neighbors
        .iter()
        .map(|list| {
            if n == list.len() {
                list.clone()
            } else {
                sample(&mut r, list.len(), n).iter().map(|t| list[t]).collect()
            }
        })
        .collect())
}

/// Row `i` is the mean of `H⁺` over `samples[i]`.
pub fn neighbor_mean(tape: &mut Tape, h_struct: Var, samples: &[Vec<usize>]) -> Result<Var> {
    let n = samples.len();
    let rows: Vec<usize> = samples.iter().flatten().copied().collect();
    let seg: Vec<usize> = samples
        .iter()
        .enumerate()
        .flat_map(|(i, s)| std::iter::repeat_n(i, s.len()))
        .collect();
    let gathered = tape.gather_rows(h_struct, rows)?;
    let sum = tape.segment_sum(gathered, seg, n)?;
    let inv = tape.constant(Tensor::vector(
        samples.iter().map(|s| 1.0 / s.len() as f64).collect(),
    ));
    tape.scale_rows(sum, inv)
}

/// `H̃⁺`: seeded neighbour sampling followed by [`neighbor_mean`].
pub fn neighbor_positive(
    tape: &mut Tape,
    h_struct: Var,
    g: &PatchGraph,
    n: usize,
    seed: u64,
) -> Result<Var> {
    let samples = sample_neighbors(g, n, seed)?;
    neighbor_mean(tape, h_struct, &samples)
}

pub fn row_distance_sq(tape: &mut Tape, a: Var, b: Var) -> Result<Var> {
    tape.row_distance_sq(a, b)
}

fn triplet_margin(tape: &mut Tape, anchor: Var, positive: Var, negative: Var, offset: f64) -> Result<Var> {
    let dp = tape.row_distance_sq(anchor, positive)?;
    let dn = tape.row_distance_sq(anchor, negative)?;
    let diff = tape.sub(dp, dn)?;
    tape.add_scalar(diff, offset)
}

/// Hinge triplet loss averaged over rows.
pub fn loss_triplet(tape: &mut Tape, anchor: Var, positive: Var, negative: Var, alpha: f64) -> Result<Var> {
    let m = triplet_margin(tape, anchor, positive, negative, alpha)?;
    let hinge = tape.clamp_min0(m)?;
    tape.mean(hinge)
}

/// Upper-bound loss: penalizes rows whose negative lies farther than
/// `d⁺ + α + β`.
pub fn loss_upper(
    tape: &mut Tape,
    anchor: Var,
    positive: Var,
    negative: Var,
    alpha: f64,
    beta: f64,
) -> Result<Var> {
    let m = triplet_margin(tape, anchor, positive, negative, alpha + beta)?;
    let neg_part = tape.clamp_max0(m)?;
    let mean = tape.mean(neg_part)?;
    tape.scale(mean, -1.0)
}

#[derive(Debug, Clone)]
pub struct Negative {
    pub rows: Var,
    pub permutation: Vec<usize>,
}

/// The embedding matrices that enter the objective.
#[derive(Debug, Clone)]
pub struct EmbeddingBundle {
    /// `H`
    pub anchor: Var,
    /// `H⁺`
    pub structural_pos: Var,
    /// `H̃⁺`
    pub neighbor_pos: Var,
    /// `H⁻`, one entry per drawn shuffle.
    pub negatives: Vec<Negative>,
}

impl EmbeddingBundle {
    pub fn check(&self, tape: &Tape) -> Result<()> {
        let shape = tape.shape(self.anchor);
        for v in [self.structural_pos, self.neighbor_pos]
            .into_iter()
            .chain(self.negatives.iter().map(|n| n.rows))
        {
            if tape.shape(v) != shape {
                return Err(Error::shape("EmbeddingBundle", shape, tape.shape(v)));
            }
        }
        if self.negatives.is_empty() {
            return Err(Error::Structure("bundle has no negatives".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy)]
pub struct LossTerms {
    pub l_n: Var,
    pub l_m: Var,
    pub l_v: Var,
    pub total: Var,
}

impl LossTerms {
    /// `(L_N, L_M, L_V, L)` as plain values.
    pub fn values(&self, tape: &Tape) -> [f64; 4] {
        [self.l_n, self.l_m, self.l_v, self.total].map(|v| tape.value(v).values()[0])
    }
}

fn mean_over(tape: &mut Tape, parts: Vec<Var>) -> Result<Var> {
    let count = parts.len() as f64;
    let mut it = parts.into_iter();
    let mut acc = it.next().expect("at least one negative");
    for p in it {
        acc = tape.add(acc, p)?;
    }
    if count > 1.0 {
        acc = tape.scale(acc, 1.0 / count)?;
    }
    Ok(acc)
}

pub fn loss_total(tape: &mut Tape, bundle: &EmbeddingBundle, cfg: &LossConfig) -> Result<LossTerms> {
    bundle.check(tape)?;
    let mut l_n = Vec::new();
    let mut l_m = Vec::new();
    let mut l_v = Vec::new();
    for neg in &bundle.negatives {
        l_n.push(loss_triplet(tape, bundle.anchor, bundle.structural_pos, neg.rows, cfg.alpha)?);
        l_m.push(loss_triplet(tape, bundle.anchor, bundle.neighbor_pos, neg.rows, cfg.alpha)?);
        l_v.push(loss_upper(
            tape,
            bundle.anchor,
            bundle.structural_pos,
            neg.rows,
            cfg.alpha,
            cfg.beta,
        )?);
    }
    let l_n = mean_over(tape, l_n)?;
    let l_m = mean_over(tape, l_m)?;
    let l_v = mean_over(tape, l_v)?;
    let a = tape.scale(l_n, cfg.w1)?;
    let b = tape.scale(l_m, cfg.w2)?;
    let c = tape.scale(l_v, cfg.w3)?;
    let ab = tape.add(a, b)?;
    let total = tape.add(ab, c)?;
    Ok(LossTerms { l_n, l_m, l_v, total })
}

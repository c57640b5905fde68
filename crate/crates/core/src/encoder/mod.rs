//! Attention-weighted relational graph convolution over a [`PatchGraph`].
//!
//! One encoder layer computes pairwise attention over each node's
//! neighbourhood plus itself, aggregates neighbours with those weights, and
//! then applies one of four graph-conv variants on the result:
//!
//! ```text
//! δ_ij = dropout(leaky_relu(a · [h_i ⊕ h_j]))          j ∈ N(i) ∪ {i}
//! ω_ij = softmax_j(δ_ij)                                per node i
//! z_i  = leaky_relu( Σ_r Σ_{j∈N_i^r} (ω_ij W1_r h_j + ω_ii W2 h_i) / |N_i^r| )
//! h_i' = leaky_relu( variant(z_i, {z_j : j ∈ N(i)}) )
//! ```

use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Groups, Tape, Var};
use crate::error::{Error, Result};
use crate::params::Visit;
use crate::patch_graph::PatchGraph;
use crate::rng;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    MaxRelative,
    EdgeConv,
    GraphSage,
    Gin,
}

impl Variant {
    pub const ALL: [Variant; 4] = [
        Variant::MaxRelative,
        Variant::EdgeConv,
        Variant::GraphSage,
        Variant::Gin,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::MaxRelative => "max_relative",
            Variant::EdgeConv => "edge_conv",
            Variant::GraphSage => "graph_sage",
            Variant::Gin => "gin",
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown graph-conv variant `{s}`")))
    }
}

/// How the self term `ω_ii W2 h_i` enters the relational sum.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SelfTerm {
    /// Inside the neighbour sum: counted `|N_i^r|` times, divided by `|N_i^r|`,
    /// so once per relation that has neighbours.
    PerRelation,
    /// Added once, outside the relation sum.
    Once,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EncoderConfig {
    pub layer_count: usize,
    pub hidden_dim: usize,
    pub out_dim: usize,
    pub variant: Variant,
    pub relation_count: usize,
    pub self_term: SelfTerm,
    pub bias: bool,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            layer_count: 2,
            hidden_dim: 64,
            out_dim: 64,
            variant: Variant::MaxRelative,
            relation_count: 1,
            self_term: SelfTerm::PerRelation,
            bias: false,
        }
    }
}

impl EncoderConfig {
    /// Widths `d_0 .. d_L` for input width `d_in`.
    pub fn widths(&self, d_in: usize) -> Vec<usize> {
        (0..=self.layer_count)
            .map(|l| match l {
                0 => d_in,
                l if l == self.layer_count => self.out_dim,
                _ => self.hidden_dim,
            })
            .collect()
    }

    pub fn output_dim(&self, d_in: usize) -> usize {
        *self.widths(d_in).last().expect("at least one width")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderLayer<T = Tensor> {
    /// `[2·d_l, 1]`, scores concatenated pairs.
    pub attention: T,
    /// One `[d_l, d_{l+1}]` per relation.
    pub neighbor: Vec<T>,
    /// `[d_l, d_{l+1}]`
    pub self_weight: T,
    pub bias: Option<T>,
    /// `[2·d_{l+1}, d_{l+1}]`, or `[d_{l+1}, d_{l+1}]` for GIN.
    pub variant_weight: T,
    /// GIN's learnable `ε`, shape `[1]`.
    pub gin_eps: Option<T>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderParams<T = Tensor> {
    pub variant: Variant,
    pub layers: Vec<EncoderLayer<T>>,
}

impl EncoderParams {
    pub fn init(cfg: &EncoderConfig, d_in: usize, seed: u64) -> Self {
        let widths = cfg.widths(d_in);
        let layers = widths
            .windows(2)
            .enumerate()
            .map(|(l, w)| {
                let (a, b) = (w[0], w[1]);
                let s = |tag: u64| rng::derive(seed, &[l as u64, tag]);
                let variant_in = if cfg.variant == Variant::Gin { b } else { 2 * b };
                EncoderLayer {
                    attention: rng::glorot_uniform(&[2 * a, 1], 2 * a, 1, s(0)),
                    neighbor: (0..cfg.relation_count)
                        .map(|r| rng::glorot_uniform(&[a, b], a, b, s(10 + r as u64)))
                        .collect(),
                    self_weight: rng::glorot_uniform(&[a, b], a, b, s(1)),
                    bias: cfg.bias.then(|| Tensor::zeros(&[b])),
                    variant_weight: rng::glorot_uniform(&[variant_in, b], variant_in, b, s(2)),
                    gin_eps: (cfg.variant == Variant::Gin).then(|| Tensor::zeros(&[1])),
                }
            })
            .collect();
        EncoderParams {
            variant: cfg.variant,
            layers,
        }
    }
}

impl<T> Visit<T> for EncoderLayer<T> {
    type Mapped<U> = EncoderLayer<U>;

    fn visit<'a>(&'a self, f: &mut dyn FnMut(&str, &'a T)) {
        f("attention", &self.attention);
        for (r, w) in self.neighbor.iter().enumerate() {
            f(&format!("neighbor.{r}"), w);
        }
        f("self_weight", &self.self_weight);
        if let Some(b) = &self.bias {
            f("bias", b);
        }
        f("variant_weight", &self.variant_weight);
        if let Some(e) = &self.gin_eps {
            f("gin_eps", e);
        }
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut T)) {
        f("attention", &mut self.attention);
        for (r, w) in self.neighbor.iter_mut().enumerate() {
            f(&format!("neighbor.{r}"), w);
        }
        f("self_weight", &mut self.self_weight);
        if let Some(b) = &mut self.bias {
            f("bias", b);
        }
        f("variant_weight", &mut self.variant_weight);
        if let Some(e) = &mut self.gin_eps {
            f("gin_eps", e);
        }
    }

    fn map<U>(&self, f: &mut dyn FnMut(&str, &T) -> U) -> EncoderLayer<U> {
        EncoderLayer {
            attention: f("attention", &self.attention),
            neighbor: self
                .neighbor
                .iter()
                .enumerate()
                .map(|(r, w)| f(&format!("neighbor.{r}"), w))
                .collect(),
            self_weight: f("self_weight", &self.self_weight),
            bias: self.bias.as_ref().map(|b| f("bias", b)),
            variant_weight: f("variant_weight", &self.variant_weight),
            gin_eps: self.gin_eps.as_ref().map(|e| f("gin_eps", e)),
        }
    }
}

impl<T> Visit<T> for EncoderParams<T> {
    type Mapped<U> = EncoderParams<U>;

    fn visit<'a>(&'a self, f: &mut dyn FnMut(&str, &'a T)) {
        for (l, layer) in self.layers.iter().enumerate() {
            crate::params::nested(&format!("layers.{l}"), layer, f);
        }
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut T)) {
        for (l, layer) in self.layers.iter_mut().enumerate() {
            crate::params::nested_mut(&format!("layers.{l}"), layer, f);
        }
    }

    fn map<U>(&self, f: &mut dyn FnMut(&str, &T) -> U) -> EncoderParams<U> {
        EncoderParams {
            variant: self.variant,
            layers: self
                .layers
                .iter()
                .enumerate()
                .map(|(l, layer)| crate::params::nested_map(&format!("layers.{l}"), layer, f))
                .collect(),
        }
    }
}

/// Flat layout of attention entries: node `i` owns slots
/// `i·(K+1) .. (i+1)·(K+1)`, its `K` neighbours in list order, then itself.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionLayout {
    pub k: usize,
    /// `(i, j)` per slot.
    pub entries: Vec<(usize, usize)>,
}

impl AttentionLayout {
    pub fn new(g: &PatchGraph) -> Result<Self> {
        let k = g.k;
        let mut entries = Vec::with_capacity(g.node_count() * (k + 1));
        for (i, list) in g.neighbors.iter().enumerate() {
            if list.is_empty() {
                return Err(Error::Structure(format!("node {i} has no neighbours")));
            }
            if list.len() != k {
                return Err(Error::Structure(format!(
                    "node {i} has {} neighbours, expected {k}",
                    list.len()
                )));
            }
            entries.extend(list.iter().map(|&j| (i, j)));
            entries.push((i, i));
        }
        Ok(AttentionLayout { k, entries })
    }

    pub fn slot(&self, i: usize, t: usize) -> usize {
        i * (self.k + 1) + t
    }

    pub fn self_slot(&self, i: usize) -> usize {
        self.slot(i, self.k)
    }

    pub fn node_count(&self) -> usize {
        self.entries.len() / (self.k + 1)
    }

    pub fn groups(&self) -> Groups {
        let s = self.k + 1;
        Groups::new((0..self.node_count()).map(|i| (i * s..(i + 1) * s).collect()).collect())
            .expect("contiguous blocks partition the slots")
    }
}

/// Per-layer attention: raw correlations `δ` and normalized weights `ω`,
/// both flat over [`AttentionLayout`] slots.
#[derive(Debug, Clone)]
pub struct AttentionField {
    pub delta: Var,
    pub omega: Var,
    pub layout: Arc<AttentionLayout>,
}

impl AttentionField {
    /// `ω_ij` for an entry present in the layout.
    pub fn weight(&self, tape: &Tape, i: usize, j: usize) -> Option<f64> {
        let k = self.layout.k;
        (0..=k)
            .map(|t| self.layout.slot(i, t))
            .find(|&s| self.layout.entries[s] == (i, j))
            .map(|s| tape.value(self.omega).values()[s])
    }

    /// Copies neighbour weights `ω_ij` onto the graph's edges `j → i`.
    pub fn write_edge_weights(&self, tape: &Tape, g: &mut PatchGraph) {
        let omega = tape.value(self.omega).values();
        for e in &mut g.edges {
            let slot = (0..self.layout.k)
                .map(|t| self.layout.slot(e.dst, t))
                .find(|&s| self.layout.entries[s] == (e.dst, e.src));
            if let Some(s) = slot {
                e.weight = omega[s];
            }
        }
    }
}

/// Forward-pass switches shared by the encoder and the anchor path.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Mode {
    pub training: bool,
    pub dropout: f64,
    pub slope: f64,
    pub seed: u64,
}

impl Mode {
    pub fn eval(slope: f64) -> Self {
        Mode {
            training: false,
            dropout: 0.0,
            slope,
            seed: 0,
        }
    }
}

pub fn attention_scores(
    tape: &mut Tape,
    h: Var,
    g: &PatchGraph,
    layer: &EncoderLayer<Var>,
    layer_index: usize,
    mode: Mode,
) -> Result<AttentionField> {
    let layout = Arc::new(AttentionLayout::new(g)?);
    let left = tape.gather_rows(h, layout.entries.iter().map(|e| e.0).collect())?;
    let right = tape.gather_rows(h, layout.entries.iter().map(|e| e.1).collect())?;
    let pairs = tape.concat_cols(left, right)?;
    let raw = tape.matmul(pairs, layer.attention)?;
    let raw = tape.leaky_relu(raw, mode.slope)?;
    let raw = tape.dropout(
        raw,
        mode.dropout,
        rng::derive(mode.seed, &[layer_index as u64, 0xa77]),
        mode.training,
    )?;
    let delta = tape.reshape(raw, vec![layout.entries.len()])?;
    let omega = tape.softmax_over_groups(delta, layout.groups())?;
    Ok(AttentionField {
        delta,
        omega,
        layout,
    })
}

/// Relational graph-convolution update with attention weights, followed by
/// leaky ReLU.
pub fn gcn_layer(
    tape: &mut Tape,
    h: Var,
    g: &PatchGraph,
    att: &AttentionField,
    layer: &EncoderLayer<Var>,
    cfg: &EncoderConfig,
    slope: f64,
) -> Result<Var> {
    let n = g.node_count();
    let layout = &att.layout;
    if layout.node_count() != n || layer.neighbor.len() < g.relation_count {
        return Err(Error::Structure(
            "attention field or relation weights do not match the graph".into(),
        ));
    }
    // |N_i^r| from the edge list; relation r of neighbour slot t of node i.
    let mut rel_of_slot = vec![usize::MAX; layout.entries.len()];
    let mut degree = vec![vec![0usize; g.relation_count]; n];
    for e in &g.edges {
        let slot = (0..layout.k)
            .map(|t| layout.slot(e.dst, t))
            .find(|&s| layout.entries[s] == (e.dst, e.src) && rel_of_slot[s] == usize::MAX)
            .ok_or_else(|| Error::Structure(format!("edge {}→{} not in layout", e.src, e.dst)))?;
        rel_of_slot[slot] = e.relation;
        degree[e.dst][e.relation] += 1;
    }
    if let Some(i) = degree.iter().position(|d| d.iter().all(|&c| c == 0)) {
        return Err(Error::Structure(format!("node {i} has an empty neighbourhood")));
    }

    let mut pre: Option<Var> = None;
    for r in 0..g.relation_count {
        let slots: Vec<usize> = (0..layout.entries.len())
            .filter(|&s| rel_of_slot[s] == r)
            .collect();
        if slots.is_empty() {
            continue;
        }
        let transformed = tape.matmul(h, layer.neighbor[r])?;
        let msgs = tape.gather_rows(transformed, slots.iter().map(|&s| layout.entries[s].1).collect())?;
        let w = tape.gather_rows(att.omega, slots.clone())?;
        let inv_deg = Tensor::vector(
            slots
                .iter()
                .map(|&s| 1.0 / degree[layout.entries[s].0][r] as f64)
                .collect(),
        );
        let inv_deg = tape.constant(inv_deg);
        let w = tape.mul(w, inv_deg)?;
        let msgs = tape.scale_rows(msgs, w)?;
        let agg = tape.segment_sum(msgs, slots.iter().map(|&s| layout.entries[s].0).collect(), n)?;
        pre = Some(match pre {
            Some(p) => tape.add(p, agg)?,
            None => agg,
        });
    }

    let self_count = Tensor::vector(
        degree
            .iter()
            .map(|d| match cfg.self_term {
                SelfTerm::PerRelation => d.iter().filter(|&&c| c > 0).count() as f64,
                SelfTerm::Once => 1.0,
            })
            .collect(),
    );
    let self_count = tape.constant(self_count);
    let self_w = tape.gather_rows(att.omega, (0..n).map(|i| layout.self_slot(i)).collect())?;
    let self_w = tape.mul(self_w, self_count)?;
    let own = tape.matmul(h, layer.self_weight)?;
    let own = tape.scale_rows(own, self_w)?;
    let mut pre = tape.add(pre.expect("some relation has neighbours"), own)?;
    if let Some(b) = layer.bias {
        pre = tape.add_bias(pre, b)?;
    }
    tape.leaky_relu(pre, slope)
}

/// The graph-conv variant applied to `z` over the graph's neighbour lists.
/// Returns the pre-activation `[N, d_out]`.
pub fn variant_aggregate(
    tape: &mut Tape,
    variant: Variant,
    z: Var,
    g: &PatchGraph,
    layer: &EncoderLayer<Var>,
) -> Result<Var> {
    let n = g.node_count();
    let mut src = Vec::with_capacity(n * g.k);
    let mut dst = Vec::with_capacity(n * g.k);
    for (i, list) in g.neighbors.iter().enumerate() {
        if list.is_empty() {
            return Err(Error::Structure(format!("node {i} has no neighbours")));
        }
        for &j in list {
            src.push(j);
            dst.push(i);
        }
    }
    let per_node: Vec<Vec<usize>> = {
        let mut groups = vec![Vec::new(); n];
        for (e, &i) in dst.iter().enumerate() {
            groups[i].push(e);
        }
        groups
    };
    match variant {
        Variant::MaxRelative => {
            let zj = tape.gather_rows(z, src)?;
            let zi = tape.gather_rows(z, dst)?;
            let rel = tape.sub(zj, zi)?;
            let m = tape.segment_max(rel, &per_node)?;
            let cat = tape.concat_cols(z, m)?;
            tape.matmul(cat, layer.variant_weight)
        }
        Variant::EdgeConv => {
            let zj = tape.gather_rows(z, src)?;
            let zi = tape.gather_rows(z, dst)?;
            let rel = tape.sub(zj, zi)?;
            let cat = tape.concat_cols(zi, rel)?;
            let per_edge = tape.matmul(cat, layer.variant_weight)?;
            tape.segment_max(per_edge, &per_node)
        }
        Variant::GraphSage => {
            let zj = tape.gather_rows(z, src)?;
            let sum = tape.segment_sum(zj, dst, n)?;
            let inv = Tensor::vector(per_node.iter().map(|g| 1.0 / g.len() as f64).collect());
            let inv = tape.constant(inv);
            let mean = tape.scale_rows(sum, inv)?;
            let cat = tape.concat_cols(z, mean)?;
            tape.matmul(cat, layer.variant_weight)
        }
        Variant::Gin => {
            let eps = layer
                .gin_eps
                .ok_or_else(|| Error::Config("GIN layer is missing its ε parameter".into()))?;
            let zj = tape.gather_rows(z, src)?;
            let sum = tape.segment_sum(zj, dst, n)?;
            let eps_rows = tape.gather_rows(eps, vec![0; n])?;
            let one_plus = tape.add_scalar(eps_rows, 1.0)?;
            let own = tape.scale_rows(z, one_plus)?;
            let total = tape.add(own, sum)?;
            tape.matmul(total, layer.variant_weight)
        }
    }
}

/// Structural embeddings `H⁺` from (masked) node features `h`.
pub fn encode(
    tape: &mut Tape,
    h: Var,
    g: &PatchGraph,
    params: &EncoderParams<Var>,
    cfg: &EncoderConfig,
    mode: Mode,
) -> Result<Var> {
    let mut h = h;
    for (l, layer) in params.layers.iter().enumerate() {
        let att = attention_scores(tape, h, g, layer, l, mode)?;
        let z = gcn_layer(tape, h, g, &att, layer, cfg, mode.slope)?;
        let v = variant_aggregate(tape, params.variant, z, g, layer)?;
        h = tape.leaky_relu(v, mode.slope)?;
    }
    Ok(h)
}

#[cfg(test)]
mod tests;

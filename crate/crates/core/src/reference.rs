//! Straight-line reference implementations over plain `Vec` rows.
//!
//! These loop directly over nodes and a dense adjacency, sharing no code
//! with the tape ops. Tests and the verification suite compare the
//! production path against them.

use crate::encoder::{EncoderConfig, EncoderLayer, EncoderParams, SelfTerm, Variant};
use crate::patch_graph::PatchGraph;
use crate::tensor::Tensor;

pub type Rows = Vec<Vec<f64>>;

pub fn rows(t: &Tensor) -> Rows {
    (0..t.rows()).map(|i| t.row(i).to_vec()).collect()
}

pub fn to_tensor(r: &Rows) -> Tensor {
    Tensor::from_rows(r)
}

pub fn lrelu(x: f64, slope: f64) -> f64 {
    if x > 0.0 {
        x
    } else {
        slope * x
    }
}

/// Row vector times `[len(x), m]` matrix.
pub fn vec_mat(x: &[f64], w: &Tensor) -> Vec<f64> {
    let m = w.cols();
    let mut out = vec![0.0; m];
    for (r, &xv) in x.iter().enumerate() {
        for c in 0..m {
            out[c] += xv * w.get2(r, c);
        }
    }
    out
}

fn concat(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().chain(b).copied().collect()
}

/// Dense `N × N` attention matrix; zero outside `N(i) ∪ {i}`.
pub fn dense_attention(h: &Rows, neighbors: &[Vec<usize>], attention: &Tensor, slope: f64) -> Rows {
    let n = h.len();
    let mut omega = vec![vec![0.0; n]; n];
    for i in 0..n {
        let mut members: Vec<usize> = neighbors[i].clone();
        members.push(i);
        let scores: Vec<f64> = members
            .iter()
            .map(|&j| lrelu(vec_mat(&concat(&h[i], &h[j]), attention)[0], slope))
            .collect();
        let top = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = scores.iter().map(|s| (s - top).exp()).collect();
        let z: f64 = exps.iter().sum();
        for (&j, e) in members.iter().zip(&exps) {
            omega[i][j] = e / z;
        }
    }
    omega
}

/// Dense `A_r[i][j] = 1` iff `j → i` carries relation `r`.
pub fn adjacency(g: &PatchGraph) -> Vec<Vec<Vec<f64>>> {
    let n = g.node_count();
    let mut a = vec![vec![vec![0.0; n]; n]; g.relation_count];
    for e in &g.edges {
        a[e.relation][e.dst][e.src] = 1.0;
    }
    a
}

/// The attention-weighted relational update, written as a sum over the
/// dense adjacency with the self term inside the neighbour sum.
pub fn dense_gcn_layer(
    h: &Rows,
    g: &PatchGraph,
    omega: &Rows,
    layer: &EncoderLayer,
    self_term: SelfTerm,
    slope: f64,
) -> Rows {
    let n = h.len();
    let a = adjacency(g);
    let out_dim = layer.self_weight.cols();
    let own: Rows = h.iter().map(|x| vec_mat(x, &layer.self_weight)).collect();
    (0..n)
        .map(|i| {
            let mut acc = vec![0.0; out_dim];
            for (r, a_r) in a.iter().enumerate() {
                let deg: f64 = a_r[i].iter().sum();
                if deg == 0.0 {
                    continue;
                }
                for j in 0..n {
                    if a_r[i][j] == 0.0 {
                        continue;
                    }
                    let msg = vec_mat(&h[j], &layer.neighbor[r]);
                    for c in 0..out_dim {
                        acc[c] += omega[i][j] * msg[c] / deg;
                        if self_term == SelfTerm::PerRelation {
                            acc[c] += omega[i][i] * own[i][c] / deg;
                        }
                    }
                }
            }
            if self_term == SelfTerm::Once {
                for c in 0..out_dim {
                    acc[c] += omega[i][i] * own[i][c];
                }
            }
            if let Some(b) = &layer.bias {
                for c in 0..out_dim {
                    acc[c] += b.values()[c];
                }
            }
            acc.into_iter().map(|v| lrelu(v, slope)).collect()
        })
        .collect()
}

/// Textbook per-node form of each graph-conv variant (pre-activation).
pub fn variant_node(
    variant: Variant,
    z: &Rows,
    i: usize,
    neighbors: &[usize],
    weight: &Tensor,
    gin_eps: f64,
) -> Vec<f64> {
    let d = z[i].len();
    let diff = |j: usize| -> Vec<f64> { (0..d).map(|c| z[j][c] - z[i][c]).collect() };
    match variant {
        Variant::MaxRelative => {
            let mut m = vec![f64::NEG_INFINITY; d];
            for &j in neighbors {
                for (c, v) in diff(j).into_iter().enumerate() {
                    m[c] = m[c].max(v);
                }
            }
            vec_mat(&concat(&z[i], &m), weight)
        }
        Variant::EdgeConv => {
            let mut m = vec![f64::NEG_INFINITY; weight.cols()];
            for &j in neighbors {
                let e = vec_mat(&concat(&z[i], &diff(j)), weight);
                for (c, v) in e.into_iter().enumerate() {
                    m[c] = m[c].max(v);
                }
            }
            m
        }
        Variant::GraphSage => {
            let mut mean = vec![0.0; d];
            for &j in neighbors {
                for c in 0..d {
                    mean[c] += z[j][c] / neighbors.len() as f64;
                }
            }
            vec_mat(&concat(&z[i], &mean), weight)
        }
        Variant::Gin => {
            let mut s: Vec<f64> = z[i].iter().map(|v| (1.0 + gin_eps) * v).collect();
            for &j in neighbors {
                for c in 0..d {
                    s[c] += z[j][c];
                }
            }
            vec_mat(&s, weight)
        }
    }
}

/// Eval-mode encoder: per layer, dense attention, dense update, variant, activation.
pub fn dense_encode(
    h: &Rows,
    g: &PatchGraph,
    params: &EncoderParams,
    cfg: &EncoderConfig,
    slope: f64,
) -> Rows {
    let mut h = h.clone();
    for layer in &params.layers {
        let omega = dense_attention(&h, &g.neighbors, &layer.attention, slope);
        let z = dense_gcn_layer(&h, g, &omega, layer, cfg.self_term, slope);
        let eps = layer.gin_eps.as_ref().map_or(0.0, |e| e.values()[0]);
        h = (0..z.len())
            .map(|i| {
                variant_node(params.variant, &z, i, &g.neighbors[i], &layer.variant_weight, eps)
                    .into_iter()
                    .map(|v| lrelu(v, slope))
                    .collect()
            })
            .collect();
    }
    h
}

pub fn squared_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// `mean_i max(d(a,p)_i − d(a,n)_i + margin, 0)`.
pub fn triplet_loop(anchor: &Rows, positive: &Rows, negative: &Rows, margin: f64) -> f64 {
    let n = anchor.len();
    let mut total = 0.0;
    for i in 0..n {
        let t = squared_distance(&anchor[i], &positive[i]) - squared_distance(&anchor[i], &negative[i]) + margin;
        if t > 0.0 {
            total += t;
        }
    }
    total / n as f64
}

/// `−mean_i min(d(a,p)_i − d(a,n)_i + α + β, 0)`.
pub fn upper_loop(anchor: &Rows, positive: &Rows, negative: &Rows, alpha: f64, beta: f64) -> f64 {
    let n = anchor.len();
    let mut total = 0.0;
    for i in 0..n {
        let t = squared_distance(&anchor[i], &positive[i]) - squared_distance(&anchor[i], &negative[i])
            + alpha
            + beta;
        if t < 0.0 {
            total -= t;
        }
    }
    total / n as f64
}

/// Whether every row satisfies `d(a,n)² ≤ d(a,p)² + α + β`.
pub fn upper_bound_holds(anchor: &Rows, positive: &Rows, negative: &Rows, alpha: f64, beta: f64) -> bool {
    (0..anchor.len()).all(|i| {
        squared_distance(&anchor[i], &negative[i])
            <= squared_distance(&anchor[i], &positive[i]) + alpha + beta
    })
}

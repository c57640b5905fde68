//! Image → patch graph: partitioning, KNN edges, node masking, text dump.

mod dump;
mod knn;
pub mod stem;

use rand::seq::index::sample;

use crate::error::{Error, Result};
use crate::rng;
use crate::tensor::Tensor;

pub use dump::parse_dump;
pub use knn::build_knn_graph;

/// An RGB image with channels in [0,1] and an optional age label in years.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageSample {
    pub id: String,
    /// `[h, w, 3]`
    pub pixels: Tensor,
    pub age: Option<f64>,
}

impl ImageSample {
    pub fn new(id: impl Into<String>, pixels: Tensor, age: Option<f64>) -> Result<Self> {
        let id = id.into();
        match pixels.shape() {
            [_, _, 3] => {}
            other => {
                return Err(Error::Data(format!(
                    "{id}: expected [h, w, 3] pixels, got {other:?}"
                )))
            }
        }
        if pixels.values().iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::Data(format!("{id}: pixel values outside [0,1]")));
        }
        if let Some(a) = age {
            if !(a >= 0.0 && a.is_finite()) {
                return Err(Error::Data(format!("{id}: invalid age {a}")));
            }
        }
        Ok(ImageSample { id, pixels, age })
    }

    pub fn height(&self) -> usize {
        self.pixels.shape()[0]
    }

    pub fn width(&self) -> usize {
        self.pixels.shape()[1]
    }
}

fn check_patch_size(img: &ImageSample, patch_size: usize) -> Result<(usize, usize)> {
    let (h, w) = (img.height(), img.width());
    if patch_size == 0 || h % patch_size != 0 || w % patch_size != 0 {
        return Err(Error::Config(format!(
            "patch size {patch_size} does not divide image {h}×{w}"
        )));
    }
    Ok((h / patch_size, w / patch_size))
}

/// Non-overlapping `[p, p, 3]` blocks in row-major scan order.
pub fn partition_image(img: &ImageSample, patch_size: usize) -> Result<Vec<Tensor>> {
    let batch = patch_batch(img, patch_size)?;
    let per = patch_size * patch_size * 3;
    Ok(batch
        .values()
        .chunks(per)
        .map(|c| {
            Tensor::new(vec![patch_size, patch_size, 3], c.to_vec()).expect("patch extent")
        })
        .collect())
}

/// All patches stacked as `[N, p, p, 3]`, same order as [`partition_image`].
pub fn patch_batch(img: &ImageSample, patch_size: usize) -> Result<Tensor> {
    let (gy, gx) = check_patch_size(img, patch_size)?;
    let w = img.width();
    let src = img.pixels.values();
    let p = patch_size;
    let mut values = Vec::with_capacity(src.len());
    for py in 0..gy {
        for px in 0..gx {
            for y in 0..p {
                let start = ((py * p + y) * w + px * p) * 3;
                values.extend_from_slice(&src[start..start + p * 3]);
            }
        }
    }
    Tensor::new(vec![gy * gx, p, p, 3], values)
}

/// Inverse of [`partition_image`] for an `h × w` image.
pub fn reassemble(patches: &[Tensor], h: usize, w: usize) -> Result<Tensor> {
    let p = patches
        .first()
        .ok_or_else(|| Error::Structure("no patches".into()))?
        .shape()[0];
    let gx = w / p;
    if patches.len() != (h / p) * gx {
        return Err(Error::Structure(format!(
            "{} patches cannot tile {h}×{w}",
            patches.len()
        )));
    }
    let mut out = vec![0.0; h * w * 3];
    for (n, patch) in patches.iter().enumerate() {
        let (py, px) = (n / gx, n % gx);
        for y in 0..p {
            let dst = ((py * p + y) * w + px * p) * 3;
            out[dst..dst + p * 3].copy_from_slice(&patch.values()[y * p * 3..(y + 1) * p * 3]);
        }
    }
    Tensor::new(vec![h, w, 3], out)
}

/// Directed edge `src → dst`: `src` is one of `dst`'s neighbours.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Edge {
    pub src: usize,
    pub dst: usize,
    pub relation: usize,
    pub weight: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PatchGraph {
    /// `[N, d]`
    pub node_features: Tensor,
    pub edges: Vec<Edge>,
    /// Neighbour list of each node, `K` entries, never the node itself.
    pub neighbors: Vec<Vec<usize>>,
    pub k: usize,
    /// Relation ids are drawn from `0..relation_count`.
    pub relation_count: usize,
    /// Sorted indices of masked nodes.
    pub mask_rows: Vec<usize>,
    pub mask_rate: f64,
}

impl PatchGraph {
    /// Builds a graph from explicit neighbour lists. `relations[i][t]` is the
    /// relation of edge `neighbors[i][t] → i`; edge weights start at `1/K`.
    pub fn from_neighbors(
        node_features: Tensor,
        neighbors: Vec<Vec<usize>>,
        relations: Vec<Vec<usize>>,
        relation_count: usize,
    ) -> Result<Self> {
        let (n, _) = node_features.dims2()?;
        if neighbors.len() != n || relations.len() != n {
            return Err(Error::Structure(format!(
                "{n} nodes but {} neighbour lists",
                neighbors.len()
            )));
        }
        let k = neighbors.first().map_or(0, Vec::len);
        if k == 0 {
            return Err(Error::Structure("nodes need at least one neighbour".into()));
        }
        if relation_count == 0 {
            return Err(Error::Config("relation_count must be positive".into()));
        }
        let mut edges = Vec::with_capacity(n * k);
        for (i, (list, rels)) in neighbors.iter().zip(&relations).enumerate() {
            if list.len() != k || rels.len() != k {
                return Err(Error::Structure(format!(
                    "node {i} has {} neighbours, expected {k}",
                    list.len()
                )));
            }
            for (&j, &r) in list.iter().zip(rels) {
                if j >= n || j == i {
                    return Err(Error::Structure(format!("node {i} has invalid neighbour {j}")));
                }
                if r >= relation_count {
                    return Err(Error::Structure(format!("undeclared relation id {r}")));
                }
                edges.push(Edge {
                    src: j,
                    dst: i,
                    relation: r,
                    weight: 1.0 / k as f64,
                });
            }
        }
        Ok(PatchGraph {
            node_features,
            edges,
            neighbors,
            k,
            relation_count,
            mask_rows: Vec::new(),
            mask_rate: 0.0,
        })
    }

    pub fn node_count(&self) -> usize {
        self.node_features.rows()
    }

    pub fn feature_dim(&self) -> usize {
        self.node_features.cols()
    }

    /// Per-node mask flags, `true` where the row is masked.
    pub fn mask_flags(&self) -> Vec<bool> {
        let mut flags = vec![false; self.node_count()];
        for &i in &self.mask_rows {
            flags[i] = true;
        }
        flags
    }

    /// Same structure and mask over different node features.
    pub fn with_features(&self, node_features: Tensor) -> Result<Self> {
        if node_features.rows() != self.node_count() {
            return Err(Error::shape(
                "with_features",
                node_features.shape(),
                self.node_features.shape(),
            ));
        }
        let mut g = self.clone();
        g.node_features = node_features;
        Ok(g)
    }
}

/// Number of rows masked at rate `p` over `n` nodes: `⌊p·n⌋`.
pub fn masked_count(p: f64, n: usize) -> usize {
    // guard against p·n landing a hair under an integer, e.g. 0.29·100
    ((p * n as f64) + 1e-9).floor().min(n as f64) as usize
}

/// Zeroes `⌊p·N⌋` uniformly chosen feature rows. Edges are left untouched.
pub fn apply_mask(g: &PatchGraph, p: f64, seed: u64) -> Result<PatchGraph> {
    if !(0.0..=1.0).contains(&p) {
        return Err(Error::Config(format!("mask rate must lie in [0,1], got {p}")));
    }
    let n = g.node_count();
    let count = masked_count(p, n);
    let mut out = g.clone();
    out.mask_rate = p;
    let mut rows = sample(&mut rng::rng(seed), n, count).into_vec();
    rows.sort_unstable();
    for &i in &rows {
        out.node_features.row_mut(i).fill(0.0);
    }
    out.mask_rows = rows;
    Ok(out)
}

#[cfg(test)]
mod tests;

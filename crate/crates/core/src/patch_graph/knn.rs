use super::PatchGraph;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

fn distance_sq(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Connects every node to its `k` nearest nodes by squared Euclidean
/// distance, ties going to the lower index. Single relation id 0.
pub fn build_knn_graph(features: &Tensor, k: usize) -> Result<PatchGraph> {
    let (n, _) = features.dims2()?;
    if k == 0 || k >= n {
        return Err(Error::Config(format!(
            "K must satisfy 0 < K < N, got K={k}, N={n}"
        )));
    }
    let mut neighbors = Vec::with_capacity(n);
    let mut dist: Vec<(f64, usize)> = Vec::with_capacity(n - 1);
    for i in 0..n {
        dist.clear();
        let xi = features.row(i);
        dist.extend(
            (0..n)
                .filter(|&j| j != i)
                .map(|j| (distance_sq(xi, features.row(j)), j)),
        );
        let by_distance =
            |a: &(f64, usize), b: &(f64, usize)| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1));
        if k < dist.len() {
            dist.select_nth_unstable_by(k - 1, by_distance);
            dist.truncate(k);
        }
        dist.sort_unstable_by(by_distance);
        neighbors.push(dist.iter().map(|&(_, j)| j).collect::<Vec<_>>());
    }
    let relations = vec![vec![0; k]; n];
    PatchGraph::from_neighbors(features.clone(), neighbors, relations, 1)
}

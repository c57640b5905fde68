use proptest::prelude::*;

use super::*;
use crate::gradcheck::{grad_check, DEFAULT_EPS};
use crate::params::{bind, flatten, rebind};
use crate::patch_graph::{apply_mask, build_knn_graph};
use crate::reference::{self, rows};
use crate::rng::{self, uniform_tensor};

const SLOPE: f64 = 0.01;

fn small_cfg(variant: Variant, layers: usize, width: usize) -> EncoderConfig {
    EncoderConfig {
        layer_count: layers,
        hidden_dim: width,
        out_dim: width,
        variant,
        ..EncoderConfig::default()
    }
}

fn knn(n: usize, d: usize, k: usize, seed: u64) -> PatchGraph {
    build_knn_graph(&uniform_tensor(&[n, d], -1.0, 1.0, seed), k).unwrap()
}

/// Random neighbour lists with random relation ids.
fn random_relational_graph(n: usize, d: usize, k: usize, relations: usize, seed: u64) -> PatchGraph {
    use rand::seq::index::sample;
    use rand::Rng;
    let mut r = rng::rng(seed);
    let mut neighbors = Vec::new();
    let mut rels = Vec::new();
    for i in 0..n {
        let picks: Vec<usize> = sample(&mut r, n - 1, k)
            .into_iter()
            .map(|j| if j >= i { j + 1 } else { j })
            .collect();
        rels.push((0..k).map(|_| r.gen_range(0..relations)).collect());
        neighbors.push(picks);
    }
    let x = uniform_tensor(&[n, d], -1.0, 1.0, rng::derive(seed, &[1]));
    PatchGraph::from_neighbors(x, neighbors, rels, relations).unwrap()
}

fn eval_encode(g: &PatchGraph, params: &EncoderParams, cfg: &EncoderConfig) -> Tensor {
    let mut tape = Tape::new();
    let h = tape.constant(g.node_features.clone());
    let bound = bind(&mut tape, params);
    let out = encode(&mut tape, h, g, &bound, cfg, Mode::eval(SLOPE)).unwrap();
    tape.value(out).clone()
}

fn eval_attention(g: &PatchGraph, layer: &EncoderLayer) -> (Tape, AttentionField) {
    let mut tape = Tape::new();
    let h = tape.constant(g.node_features.clone());
    let bound = bind(&mut tape, layer);
    let att = attention_scores(&mut tape, h, g, &bound, 0, Mode::eval(SLOPE)).unwrap();
    (tape, att)
}

fn first_layer(cfg: &EncoderConfig, d: usize, seed: u64) -> EncoderLayer {
    EncoderParams::init(cfg, d, seed).layers.remove(0)
}

#[test]
fn identical_features_give_uniform_attention() {
    let g = knn(6, 3, 3, 1).with_features(Tensor::full(&[6, 3], 0.7)).unwrap();
    let (tape, att) = eval_attention(&g, &first_layer(&small_cfg(Variant::Gin, 1, 4), 3, 2));
    for &w in tape.value(att.omega).values() {
        assert!((w - 0.25).abs() < 1e-15);
    }
}

#[test]
fn single_neighbour_attention_has_two_weights() {
    let g = knn(5, 2, 1, 3);
    let (tape, att) = eval_attention(&g, &first_layer(&small_cfg(Variant::Gin, 1, 4), 2, 4));
    let omega = tape.value(att.omega).values();
    assert_eq!(omega.len(), 10);
    for pair in omega.chunks(2) {
        assert!((pair[0] + pair[1] - 1.0).abs() < 1e-12);
    }
}

#[test]
fn attention_matches_hand_rolled_softmax() {
    let g = knn(5, 3, 2, 5);
    let layer = first_layer(&small_cfg(Variant::MaxRelative, 1, 4), 3, 6);
    let (tape, att) = eval_attention(&g, &layer);
    let dense = reference::dense_attention(&rows(&g.node_features), &g.neighbors, &layer.attention, SLOPE);
    for i in 0..5 {
        for j in g.neighbors[i].iter().copied().chain([i]) {
            let w = att.weight(&tape, i, j).unwrap();
            assert!((w - dense[i][j]).abs() < 1e-12);
        }
    }
}

#[test]
fn attention_dropout_only_in_training() {
    let g = knn(6, 3, 2, 7);
    let layer = first_layer(&small_cfg(Variant::Gin, 1, 3), 3, 8);
    let run = |training: bool, seed: u64| {
        let mut tape = Tape::new();
        let h = tape.constant(g.node_features.clone());
        let bound = bind(&mut tape, &layer);
        let mode = Mode {
            training,
            dropout: 0.5,
            slope: SLOPE,
            seed,
        };
        let att = attention_scores(&mut tape, h, &g, &bound, 0, mode).unwrap();
        tape.value(att.omega).clone()
    };
    assert_eq!(run(false, 1), run(false, 2));
    assert_ne!(run(true, 1), run(true, 2));
    assert_eq!(run(true, 3), run(true, 3));
}

#[test]
fn edge_weights_follow_attention() {
    let mut g = knn(6, 2, 2, 9);
    let (tape, att) = eval_attention(&g, &first_layer(&small_cfg(Variant::Gin, 1, 3), 2, 10));
    att.write_edge_weights(&tape, &mut g);
    for e in &g.edges {
        assert_eq!(Some(e.weight), att.weight(&tape, e.dst, e.src));
    }
}

fn run_gcn(g: &PatchGraph, layer: &EncoderLayer, cfg: &EncoderConfig) -> (Tensor, Tensor) {
    let mut tape = Tape::new();
    let h = tape.constant(g.node_features.clone());
    let bound = bind(&mut tape, layer);
    let att = attention_scores(&mut tape, h, g, &bound, 0, Mode::eval(SLOPE)).unwrap();
    let out = gcn_layer(&mut tape, h, g, &att, &bound, cfg, SLOPE).unwrap();
    (tape.value(out).clone(), tape.value(att.omega).clone())
}

#[test]
fn zero_weights_give_zero_update() {
    let g = knn(7, 3, 3, 11);
    let cfg = small_cfg(Variant::MaxRelative, 1, 4);
    let mut layer = first_layer(&cfg, 3, 12);
    layer.neighbor = vec![Tensor::zeros(&[3, 4])];
    layer.self_weight = Tensor::zeros(&[3, 4]);
    let (out, _) = run_gcn(&g, &layer, &cfg);
    assert!(out.values().iter().all(|&v| v == 0.0));
}

#[test]
fn half_and_half_single_neighbour() {
    let x = Tensor::from_rows(&[vec![1.0, -2.0], vec![3.0, 0.5], vec![-4.0, 2.0]]);
    let g = build_knn_graph(&x, 1).unwrap();
    let cfg = small_cfg(Variant::MaxRelative, 1, 2);
    let mut layer = first_layer(&cfg, 2, 13);
    let eye = Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]);
    layer.neighbor = vec![eye.clone()];
    layer.self_weight = eye;
    // zero scores make every softmax group uniform: ω = (0.5, 0.5)
    layer.attention = Tensor::zeros(&[4, 1]);
    let (out, omega) = run_gcn(&g, &layer, &cfg);
    assert!(omega.values().iter().all(|&w| w == 0.5));
    for i in 0..3 {
        let j = g.neighbors[i][0];
        for c in 0..2 {
            let want = reference::lrelu(0.5 * x.get2(j, c) + 0.5 * x.get2(i, c), SLOPE);
            assert!((out.get2(i, c) - want).abs() < 1e-15);
        }
    }
}

#[test]
fn empty_neighbourhood_is_structural_error() {
    let g = knn(4, 2, 1, 14);
    let cfg = small_cfg(Variant::Gin, 1, 2);
    let mut tape = Tape::new();
    let h = tape.constant(g.node_features.clone());
    let bound = bind(&mut tape, &first_layer(&cfg, 2, 15));
    let att = attention_scores(&mut tape, h, &g, &bound, 0, Mode::eval(SLOPE)).unwrap();
    let mut broken = g.clone();
    broken.edges.retain(|e| e.dst != 2);
    let err = gcn_layer(&mut tape, h, &broken, &att, &bound, &cfg, SLOPE).unwrap_err();
    assert!(matches!(err, Error::Structure(_)));
}

#[test]
fn gcn_matches_dense_oracle() {
    for seed in 0..30 {
        let relations = 1 + (seed as usize % 3);
        let self_term = if seed % 2 == 0 { SelfTerm::PerRelation } else { SelfTerm::Once };
        let g = random_relational_graph(5 + seed as usize % 5, 3, 3, relations, seed);
        let cfg = EncoderConfig {
            relation_count: relations,
            self_term,
            bias: seed % 4 == 1,
            ..small_cfg(Variant::MaxRelative, 2, 4)
        };
        let mut params = EncoderParams::init(&cfg, 3, seed + 100);
        if let Some(b) = params.layers[0].bias.as_mut() {
            *b = uniform_tensor(&[4], -0.3, 0.3, seed);
        }

        // two stacked updates, tape vs dense
        let mut tape = Tape::new();
        let bound = bind(&mut tape, &params);
        let mut h = tape.constant(g.node_features.clone());
        let mut dense = rows(&g.node_features);
        for (l, layer) in bound.layers.iter().enumerate() {
            let att = attention_scores(&mut tape, h, &g, layer, l, Mode::eval(SLOPE)).unwrap();
            h = gcn_layer(&mut tape, h, &g, &att, layer, &cfg, SLOPE).unwrap();
            let omega = reference::dense_attention(&dense, &g.neighbors, &params.layers[l].attention, SLOPE);
            dense = reference::dense_gcn_layer(&dense, &g, &omega, &params.layers[l], self_term, SLOPE);
        }
        let got = tape.value(h);
        for (i, row) in dense.iter().enumerate() {
            for (c, &v) in row.iter().enumerate() {
                assert!((got.get2(i, c) - v).abs() < 1e-10, "seed {seed}");
            }
        }
    }
}

#[test]
fn zero_layers_is_identity() {
    let g = knn(6, 3, 2, 16);
    let cfg = small_cfg(Variant::MaxRelative, 0, 4);
    let params = EncoderParams::init(&cfg, 3, 17);
    assert!(params.layers.is_empty());
    assert_eq!(eval_encode(&g, &params, &cfg), g.node_features);
}

#[test]
fn masked_row_with_zero_neighbours_stays_zero() {
    // node 0 and its neighbours sit at the origin; everything else is far away
    let mut x = uniform_tensor(&[8, 3], 5.0, 6.0, 18);
    for i in 0..3 {
        x.row_mut(i).fill(0.0);
    }
    let g = build_knn_graph(&x, 2).unwrap();
    assert_eq!(g.neighbors[0], vec![1, 2]);
    for variant in Variant::ALL {
        let cfg = small_cfg(variant, 2, 4);
        let out = eval_encode(&g, &EncoderParams::init(&cfg, 3, 19), &cfg);
        assert!(out.row(0).iter().all(|&v| v == 0.0), "{variant}");
    }
}

#[test]
fn encode_is_deterministic() {
    let g = apply_mask(&knn(16, 4, 4, 20), 0.5, 1).unwrap();
    let cfg = small_cfg(Variant::MaxRelative, 2, 6);
    let params = EncoderParams::init(&cfg, 4, 21);
    let run = || {
        let mut tape = Tape::new();
        let h = tape.constant(g.node_features.clone());
        let bound = bind(&mut tape, &params);
        let mode = Mode {
            training: true,
            dropout: 0.5,
            slope: SLOPE,
            seed: 77,
        };
        let out = encode(&mut tape, h, &g, &bound, &cfg, mode).unwrap();
        tape.value(out).values().iter().map(|v| v.to_bits()).collect::<Vec<_>>()
    };
    assert_eq!(run(), run());
}

/// Star: leaves 1..3 point at the centre, the centre at leaf 1.
fn star() -> PatchGraph {
    let x = uniform_tensor(&[4, 3], -1.0, 1.0, 22);
    PatchGraph::from_neighbors(x, vec![vec![1], vec![0], vec![0], vec![0]], vec![vec![0]; 4], 1).unwrap()
}

fn complete4() -> PatchGraph {
    let x = uniform_tensor(&[4, 3], -1.0, 1.0, 23);
    let nb = (0..4).map(|i| (0..4).filter(|&j| j != i).collect()).collect();
    PatchGraph::from_neighbors(x, nb, vec![vec![0; 3]; 4], 1).unwrap()
}

#[test]
fn variants_match_textbook_forms() {
    for g in [star(), complete4()] {
        for variant in Variant::ALL {
            let cfg = small_cfg(variant, 1, 3);
            let mut layer = first_layer(&cfg, 3, 24);
            if let Some(e) = layer.gin_eps.as_mut() {
                *e = Tensor::vector(vec![0.3]);
            }
            let mut tape = Tape::new();
            let z = tape.constant(g.node_features.clone());
            let bound = bind(&mut tape, &layer);
            let out = variant_aggregate(&mut tape, variant, z, &g, &bound).unwrap();
            let zr = rows(&g.node_features);
            for i in 0..4 {
                let want = reference::variant_node(variant, &zr, i, &g.neighbors[i], &layer.variant_weight, 0.3);
                for (c, w) in want.iter().enumerate() {
                    assert!((tape.value(out).get2(i, c) - w).abs() < 1e-12, "{variant} node {i}");
                }
            }
        }
    }
}

#[test]
fn max_relative_with_equal_neighbours() {
    let g = complete4().with_features(Tensor::full(&[4, 3], 0.4)).unwrap();
    let cfg = small_cfg(Variant::MaxRelative, 1, 3);
    let layer = first_layer(&cfg, 3, 25);
    let mut tape = Tape::new();
    let z = tape.constant(g.node_features.clone());
    let bound = bind(&mut tape, &layer);
    let out = variant_aggregate(&mut tape, Variant::MaxRelative, z, &g, &bound).unwrap();
    let want = reference::vec_mat(&[0.4, 0.4, 0.4, 0.0, 0.0, 0.0], &layer.variant_weight);
    for i in 0..4 {
        for c in 0..3 {
            assert!((tape.value(out).get2(i, c) - want[c]).abs() < 1e-15);
        }
    }
}

#[test]
fn full_encoder_matches_dense_oracle() {
    for variant in Variant::ALL {
        let g = knn(9, 4, 3, 26);
        let cfg = small_cfg(variant, 2, 5);
        let params = EncoderParams::init(&cfg, 4, 27);
        let got = eval_encode(&g, &params, &cfg);
        let want = reference::dense_encode(&rows(&g.node_features), &g, &params, &cfg, SLOPE);
        for i in 0..9 {
            for c in 0..5 {
                assert!((got.get2(i, c) - want[i][c]).abs() < 1e-10, "{variant}");
            }
        }
    }
}

/// Node `a` of the result is node `perm[a]` of `g`.
pub(crate) fn relabel(g: &PatchGraph, perm: &[usize]) -> PatchGraph {
    let mut inv = vec![0; perm.len()];
    for (a, &p) in perm.iter().enumerate() {
        inv[p] = a;
    }
    let neighbors = perm
        .iter()
        .map(|&p| g.neighbors[p].iter().map(|&j| inv[j]).collect())
        .collect();
    let relations = perm
        .iter()
        .map(|&p| {
            g.neighbors[p]
                .iter()
                .map(|&j| g.edges.iter().find(|e| e.dst == p && e.src == j).unwrap().relation)
                .collect()
        })
        .collect();
    PatchGraph::from_neighbors(g.node_features.select_rows(perm), neighbors, relations, g.relation_count)
        .unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]
    #[test]
    fn encode_is_permutation_equivariant(seed in any::<u64>(), v in 0usize..4) {
        use rand::seq::SliceRandom;
        let variant = Variant::ALL[v];
        let g = knn(10, 3, 3, seed);
        let mut perm: Vec<usize> = (0..10).collect();
        perm.shuffle(&mut rng::rng(seed ^ 5));
        let cfg = small_cfg(variant, 2, 4);
        let params = EncoderParams::init(&cfg, 3, seed ^ 9);
        let base = eval_encode(&g, &params, &cfg);
        let moved = eval_encode(&relabel(&g, &perm), &params, &cfg);
        prop_assert!(moved.max_abs_diff(&base.select_rows(&perm)) <= 1e-12);
    }

    #[test]
    fn attention_rows_sum_to_one(seed in any::<u64>()) {
        let g = knn(12, 4, 4, seed);
        let cfg = small_cfg(Variant::MaxRelative, 1, 4);
        let mut layer = first_layer(&cfg, 4, seed ^ 3);
        layer.attention = uniform_tensor(&[8, 1], -3.0, 3.0, seed ^ 4);
        let (tape, att) = eval_attention(&g, &layer);
        for group in tape.value(att.omega).values().chunks(5) {
            prop_assert!(group.iter().all(|&w| w >= 0.0));
            prop_assert!((group.iter().sum::<f64>() - 1.0).abs() <= 1e-9);
        }
    }
}

#[test]
fn encoder_gradients_match_finite_differences() {
    for variant in Variant::ALL {
        let g = knn(7, 3, 3, 28);
        let cfg = EncoderConfig {
            bias: true,
            ..small_cfg(variant, 2, 3)
        };
        let mut params = EncoderParams::init(&cfg, 3, 29);
        for layer in &mut params.layers {
            if let Some(e) = layer.gin_eps.as_mut() {
                *e = Tensor::vector(vec![0.2]);
            }
            if let Some(b) = layer.bias.as_mut() {
                *b = uniform_tensor(b.shape(), -0.2, 0.2, 30);
            }
        }
        let readout = uniform_tensor(&[7, 3], -1.0, 1.0, 31);
        let mut inputs = flatten(&params);
        inputs.push(g.node_features.clone());
        let report = grad_check(
            |tape, vars| {
                let (h, ps) = vars.split_last().unwrap();
                let bound = rebind(&params, ps);
                let out = encode(tape, *h, &g, &bound, &cfg, Mode::eval(SLOPE))?;
                let r = tape.constant(readout.clone());
                let prod = tape.mul(out, r)?;
                tape.sum(prod)
            },
            &inputs,
            DEFAULT_EPS,
        )
        .unwrap();
        assert!(report.max_rel_error <= 1e-4, "{variant}: {report:?}");
    }
}

#[test]
fn variant_names_round_trip() {
    for v in Variant::ALL {
        assert_eq!(v.name().parse::<Variant>().unwrap(), v);
    }
    assert!(matches!("gat".parse::<Variant>(), Err(Error::Config(_))));
}

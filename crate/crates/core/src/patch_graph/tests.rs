use proptest::prelude::*;

use super::stem::{embed_patches, StemConfig, StemParams};
use super::*;
use crate::autodiff::Tape;
use crate::params::bind;
use crate::rng::uniform_tensor;

fn image(h: usize, w: usize, seed: u64) -> ImageSample {
    ImageSample::new("img", uniform_tensor(&[h, w, 3], 0.0, 1.0, seed), None).unwrap()
}

#[test]
fn single_patch_equals_image() {
    let img = image(32, 32, 1);
    let patches = partition_image(&img, 32).unwrap();
    assert_eq!(patches.len(), 1);
    assert_eq!(patches[0], img.pixels);
}

#[test]
fn sixteen_patches() {
    assert_eq!(partition_image(&image(32, 32, 2), 8).unwrap().len(), 16);
}

#[test]
fn patches_match_source_regions() {
    let img = image(64, 48, 3);
    let patches = partition_image(&img, 16).unwrap();
    assert_eq!(patches.len(), 12);
    for (n, patch) in patches.iter().enumerate() {
        let (py, px) = (n / 3, n % 3);
        for y in 0..16 {
            for x in 0..16 {
                for c in 0..3 {
                    let src = img.pixels.values()[((py * 16 + y) * 48 + px * 16 + x) * 3 + c];
                    assert_eq!(patch.values()[(y * 16 + x) * 3 + c], src);
                }
            }
        }
    }
}

#[test]
fn indivisible_patch_size_is_config_error() {
    let err = partition_image(&image(30, 32, 4), 8).unwrap_err();
    assert!(matches!(err, Error::Config(_)));
}

#[test]
fn image_validation() {
    assert!(ImageSample::new("x", Tensor::zeros(&[4, 4, 1]), None).is_err());
    assert!(ImageSample::new("x", Tensor::full(&[4, 4, 3], 1.5), None).is_err());
    assert!(ImageSample::new("x", Tensor::zeros(&[4, 4, 3]), Some(-1.0)).is_err());
}

proptest! {
    #[test]
    fn partition_is_lossless(gy in 1usize..4, gx in 1usize..4, p in 1usize..6, seed in any::<u64>()) {
        let img = image(gy * p, gx * p, seed);
        let patches = partition_image(&img, p).unwrap();
        let back = reassemble(&patches, gy * p, gx * p).unwrap();
        prop_assert_eq!(back, img.pixels);
    }
}

#[test]
fn two_nodes_are_forced_neighbours() {
    let g = build_knn_graph(&Tensor::from_rows(&[vec![0.0], vec![5.0]]), 1).unwrap();
    assert_eq!(g.neighbors, vec![vec![1], vec![0]]);
    assert_eq!(g.edges.len(), 2);
    assert!(g.edges.iter().all(|e| e.relation == 0 && e.weight == 1.0));
}

#[test]
fn line_geometry() {
    let x = Tensor::from_rows(&[vec![0.0], vec![1.0], vec![10.0], vec![11.0]]);
    let g = build_knn_graph(&x, 1).unwrap();
    assert_eq!(g.neighbors, vec![vec![1], vec![0], vec![3], vec![2]]);
}

#[test]
fn ties_go_to_lower_index() {
    let x = Tensor::from_rows(&[vec![0.0], vec![-1.0], vec![1.0]]);
    let g = build_knn_graph(&x, 1).unwrap();
    assert_eq!(g.neighbors[0], vec![1]);
}

fn brute_force_knn(x: &Tensor, k: usize) -> Vec<Vec<usize>> {
    let n = x.rows();
    (0..n)
        .map(|i| {
            let mut all: Vec<(f64, usize)> = (0..n)
                .filter(|&j| j != i)
                .map(|j| {
                    let d: f64 = x
                        .row(i)
                        .iter()
                        .zip(x.row(j))
                        .map(|(a, b)| (a - b).powi(2))
                        .sum();
                    (d, j)
                })
                .collect();
            all.sort_by(|a, b| a.partial_cmp(b).unwrap());
            all[..k].iter().map(|&(_, j)| j).collect()
        })
        .collect()
}

#[test]
fn knn_matches_exhaustive_sort() {
    for seed in 0..20 {
        let x = uniform_tensor(&[30, 4], -1.0, 1.0, seed);
        let g = build_knn_graph(&x, 5).unwrap();
        assert_eq!(g.neighbors, brute_force_knn(&x, 5));
        for e in &g.edges {
            assert!(g.neighbors[e.dst].contains(&e.src));
            assert!((e.weight - 0.2).abs() < 1e-15);
        }
    }
}

#[test]
fn knn_rejects_k_at_least_n() {
    let x = uniform_tensor(&[4, 2], 0.0, 1.0, 0);
    assert!(matches!(build_knn_graph(&x, 4), Err(Error::Config(_))));
    assert!(matches!(build_knn_graph(&x, 0), Err(Error::Config(_))));
}

proptest! {
    #[test]
    fn knn_is_permutation_invariant(seed in any::<u64>(), n in 4usize..16) {
        use rand::seq::SliceRandom;
        let x = uniform_tensor(&[n, 3], -1.0, 1.0, seed);
        let mut perm: Vec<usize> = (0..n).collect();
        perm.shuffle(&mut crate::rng::rng(seed ^ 1));
        // row a of `y` is row perm[a] of `x`
        let y = x.select_rows(&perm);
        let gx = build_knn_graph(&x, 3).unwrap();
        let gy = build_knn_graph(&y, 3).unwrap();
        for a in 0..n {
            let mut mapped: Vec<usize> = gy.neighbors[a].iter().map(|&b| perm[b]).collect();
            let mut direct = gx.neighbors[perm[a]].clone();
            mapped.sort_unstable();
            direct.sort_unstable();
            prop_assert_eq!(mapped, direct);
        }
    }
}

fn random_graph(n: usize, d: usize, k: usize, seed: u64) -> PatchGraph {
    build_knn_graph(&uniform_tensor(&[n, d], -1.0, 1.0, seed), k).unwrap()
}

#[test]
fn zero_rate_leaves_graph_untouched() {
    let g = random_graph(20, 4, 3, 5);
    let m = apply_mask(&g, 0.0, 99).unwrap();
    assert!(m.mask_rows.is_empty());
    assert_eq!(
        m.node_features
            .values()
            .iter()
            .map(|v| v.to_bits())
            .collect::<Vec<_>>(),
        g.node_features
            .values()
            .iter()
            .map(|v| v.to_bits())
            .collect::<Vec<_>>()
    );
    assert_eq!(m.edges, g.edges);
}

#[test]
fn full_rate_zeroes_every_row() {
    let m = apply_mask(&random_graph(20, 4, 3, 6), 1.0, 1).unwrap();
    assert!(m.node_features.values().iter().all(|&v| v == 0.0));
    assert_eq!(m.mask_rows.len(), 20);
}

#[test]
fn mask_rate_out_of_range() {
    let g = random_graph(5, 2, 2, 0);
    assert!(apply_mask(&g, 1.5, 0).is_err());
    assert!(apply_mask(&g, -0.1, 0).is_err());
}

#[test]
fn masked_count_floors() {
    assert_eq!(masked_count(0.6, 100), 60);
    assert_eq!(masked_count(0.29, 100), 29);
    assert_eq!(masked_count(0.5, 5), 2);
    assert_eq!(masked_count(1.0, 7), 7);
    assert_eq!(masked_count(0.0, 7), 0);
}

#[test]
fn mask_frequency_concentrates() {
    // 10⁴ draws: ±0.04 is ~8σ per node, so all 100 nodes pass jointly
    let trials = 10_000;
    let g = random_graph(100, 2, 3, 7);
    let mut hits = vec![0usize; 100];
    for seed in 0..trials {
        let m = apply_mask(&g, 0.6, seed).unwrap();
        assert_eq!(m.mask_rows.len(), 60);
        for &i in &m.mask_rows {
            hits[i] += 1;
        }
    }
    for (i, &h) in hits.iter().enumerate() {
        let rate = h as f64 / trials as f64;
        assert!((rate - 0.6).abs() <= 0.04, "node {i} masked at rate {rate}");
    }
}

proptest! {
    #[test]
    fn mask_preserves_unmasked_rows(seed in any::<u64>(), p in 0.0f64..=1.0, n in 2usize..40) {
        let g = random_graph(n, 3, 1, seed);
        let m = apply_mask(&g, p, seed ^ 7).unwrap();
        prop_assert_eq!(m.mask_rows.len(), masked_count(p, n));
        let flags = m.mask_flags();
        for i in 0..n {
            if flags[i] {
                prop_assert!(m.node_features.row(i).iter().all(|&v| v == 0.0));
            } else {
                prop_assert_eq!(m.node_features.row(i), g.node_features.row(i));
            }
        }
        prop_assert_eq!(&m.edges, &g.edges);
        prop_assert_eq!(&m.neighbors, &g.neighbors);
    }
}

#[test]
fn dump_round_trips() {
    let g = apply_mask(&random_graph(12, 5, 3, 8), 0.5, 3).unwrap();
    let text = g.dump();
    assert!(text.starts_with("12 3 5 0.5\n"));
    let back = parse_dump(&text).unwrap();
    assert_eq!(back, g);
}

#[test]
fn dump_rejects_garbage() {
    assert!(matches!(parse_dump(""), Err(Error::Data(_))));
    assert!(matches!(parse_dump("2 1 1 0\n0 0 x\n"), Err(Error::Data(_))));
}

fn stem_params(cfg: &StemConfig, d: usize, seed: u64) -> StemParams {
    StemParams::init(cfg, d, seed)
}

fn run_stem(patches: &Tensor, params: &StemParams, cfg: &StemConfig) -> Tensor {
    let mut tape = Tape::new();
    let p = tape.constant(patches.clone());
    let bound = bind(&mut tape, params);
    let out = embed_patches(&mut tape, p, &bound, cfg, 0.01).unwrap();
    tape.value(out).clone()
}

#[test]
fn zero_patch_embeds_to_zero() {
    let cfg = StemConfig::default();
    let out = run_stem(&Tensor::zeros(&[1, 8, 8, 3]), &stem_params(&cfg, 6, 1), &cfg);
    assert_eq!(out.shape(), &[1, 6]);
    assert!(out.values().iter().all(|&v| v == 0.0));
}

#[test]
fn identical_patches_give_identical_rows() {
    let cfg = StemConfig::default();
    let one = uniform_tensor(&[8, 8, 3], 0.0, 1.0, 4).into_values();
    let batch = Tensor::new(vec![2, 8, 8, 3], [one.clone(), one].concat()).unwrap();
    let out = run_stem(&batch, &stem_params(&cfg, 5, 2), &cfg);
    assert_eq!(out.row(0), out.row(1));
}

fn lrelu(x: f64) -> f64 {
    if x > 0.0 {
        x
    } else {
        0.01 * x
    }
}

/// Direct loops over `[h,w,c]` input and `[k,k,c,f]` kernels, valid padding.
fn conv_direct(x: &[f64], h: usize, w: usize, c: usize, ker: &Tensor, bias: &Tensor, stride: usize) -> (Vec<f64>, usize, usize) {
    let k = ker.shape()[0];
    let f = ker.shape()[3];
    let (oh, ow) = ((h - k) / stride + 1, (w - k) / stride + 1);
    let mut out = vec![0.0; oh * ow * f];
    for oy in 0..oh {
        for ox in 0..ow {
            for o in 0..f {
                let mut s = bias.values()[o];
                for dy in 0..k {
                    for dx in 0..k {
                        for ci in 0..c {
                            let xv = x[((oy * stride + dy) * w + ox * stride + dx) * c + ci];
                            s += xv * ker.values()[((dy * k + dx) * c + ci) * f + o];
                        }
                    }
                }
                out[(oy * ow + ox) * f + o] = lrelu(s);
            }
        }
    }
    (out, oh, ow)
}

#[test]
fn stem_matches_direct_loops() {
    let cfg = StemConfig::default();
    let d = 7;
    let mut params = stem_params(&cfg, d, 3);
    params.bias1 = uniform_tensor(&[cfg.channels], -0.5, 0.5, 10);
    params.bias2 = uniform_tensor(&[d], -0.5, 0.5, 11);
    let batch = uniform_tensor(&[3, 8, 8, 3], 0.0, 1.0, 12);
    let out = run_stem(&batch, &params, &cfg);
    for n in 0..3 {
        let x = &batch.values()[n * 192..(n + 1) * 192];
        let (h1, a, b) = conv_direct(x, 8, 8, 3, &params.kernel1, &params.bias1, cfg.stride1);
        let (h2, oh, ow) = conv_direct(&h1, a, b, cfg.channels, &params.kernel2, &params.bias2, cfg.stride2);
        for o in 0..d {
            let mean = (0..oh * ow).map(|s| h2[s * d + o]).sum::<f64>() / (oh * ow) as f64;
            assert!((out.get2(n, o) - mean).abs() < 1e-12);
        }
    }
}

#[test]
fn stem_geometry_validation() {
    let cfg = StemConfig {
        kernel2: 7,
        ..StemConfig::default()
    };
    assert!(cfg.validate(8).is_err());
    assert!(StemConfig::default().validate(8).is_ok());
    assert!(StemConfig::default().validate(2).is_err());
}

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::kmeans::{kmeans_plus_plus, lloyd, nearest};
use super::*;
use crate::nn::gradcheck::{central_difference, relative_error};
use crate::nn::{scalar, tensor_from, to_vec};
use candle_core::Var;

fn rand_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.random::<f64>() * 2.0 - 1.0).collect()
}

fn split() -> ZSSplit {
    let names = ["a", "b", "c", "d", "e", "f"].iter().map(|s| s.to_string()).collect();
    ZSSplit::new(vec![0, 1, 2, 3], vec![4, 5], names, SplitMode::Inductive).unwrap()
}

#[test]
fn split_validation() {
    let names: Vec<String> = (0..3).map(|i| i.to_string()).collect();
    assert!(ZSSplit::new(vec![0, 1], vec![1, 2], names.clone(), SplitMode::Inductive).is_err());
    assert!(ZSSplit::new(vec![0], vec![1], names.clone(), SplitMode::Inductive).is_err());
    assert!(ZSSplit::new(vec![0, 3], vec![1], names.clone(), SplitMode::Inductive).is_err());
    assert!(ZSSplit::new(vec![2, 0], vec![1], names, SplitMode::Transductive).is_ok());
}

#[test]
fn training_labels_hide_unseen_classes() {
    let gt = LabelMap::new(1, 4, vec![0, 4, 255, 3]).unwrap();
    assert_eq!(split().training_labels(&gt).labels, vec![0, 255, 255, 3]);
}

#[test]
fn gt_passthrough_when_fully_labeled() {
    let tokens = tensor_from(vec![0.5; 4 * 3], &[4, 3]).unwrap();
    let a_s = tensor_from(vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0], &[2, 3]).unwrap();
    let gt = LabelMap::new(4, 4, (0..16).map(|i| (i % 2) as u8).collect()).unwrap();
    let mask = generate_pseudo_mask(&tokens, (2, 2), &gt, &a_s, &PseudoMaskConfig::default()).unwrap();
    assert_eq!(mask.labels, gt);
    assert_eq!(mask.o_u, 0);
}

#[test]
fn single_cluster_becomes_one_latent_class() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let tokens = tensor_from(rand_vec(&mut rng, 16 * 4), &[16, 4]).unwrap();
    let a_s = tensor_from(rand_vec(&mut rng, 3 * 4), &[3, 4]).unwrap();
    let gt = LabelMap::filled(8, 8, IGNORE_LABEL);
    let cfg = PseudoMaskConfig {
        k_clusters: 1,
        theta: 1.1,
        ..Default::default()
    };
    let mask = generate_pseudo_mask(&tokens, (4, 4), &gt, &a_s, &cfg).unwrap();
    assert_eq!(mask.o_u, 1);
    assert!(mask.labels.labels.iter().all(|&l| l == 3));
}

#[test]
fn argument_errors() {
    let tokens = tensor_from(vec![0.0; 16 * 2], &[16, 2]).unwrap();
    let a_s = tensor_from(vec![1.0, 0.0], &[1, 2]).unwrap();
    let gt = LabelMap::filled(8, 8, IGNORE_LABEL);
    let zero_k = PseudoMaskConfig {
        k_clusters: 0,
        ..Default::default()
    };
    assert!(generate_pseudo_mask(&tokens, (4, 4), &gt, &a_s, &zero_k).is_err());
    let cfg = PseudoMaskConfig::default();
    assert!(generate_pseudo_mask(&tokens, (2, 8), &gt, &a_s, &cfg).is_err());
    assert!(generate_pseudo_mask(&tokens, (4, 4), &LabelMap::filled(9, 9, 255), &a_s, &cfg).is_err());
    assert!(generate_pseudo_mask(&tokens, (4, 4), &LabelMap::filled(8, 12, 255), &a_s, &cfg).is_err());
}

/// Plain Lloyd's algorithm run to convergence.
fn oracle_lloyd(points: &[Vec<f64>], mut centroids: Vec<Vec<f64>>) -> Vec<usize> {
    loop {
        let assign: Vec<usize> = points
            .iter()
            .map(|p| {
                let d: Vec<f64> = centroids
                    .iter()
                    .map(|c| c.iter().zip(p).map(|(a, b)| (a - b).powi(2)).sum())
                    .collect();
                (0..d.len()).fold(0, |best, i| if d[i] < d[best] { i } else { best })
            })
            .collect();
        let mut next = centroids.clone();
        for (k, c) in next.iter_mut().enumerate() {
            let members: Vec<&Vec<f64>> =
                points.iter().zip(&assign).filter(|(_, &a)| a == k).map(|(p, _)| p).collect();
            if !members.is_empty() {
                for (j, v) in c.iter_mut().enumerate() {
                    *v = members.iter().map(|m| m[j]).sum::<f64>() / members.len() as f64;
                }
            }
        }
        if next == centroids {
            return assign;
        }
        centroids = next;
    }
}

#[test]
fn kmeans_matches_lloyd_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    // Left half of the 4×4 grid near +e0, right half near −e0.
    let mut tokens = Vec::new();
    for i in 0..16 {
        let sign = if i % 4 < 2 { 1.0 } else { -1.0 };
        tokens.push(vec![
            sign * 5.0 + rng.random::<f64>() * 0.2,
            rng.random::<f64>() * 0.2,
            rng.random::<f64>() * 0.2,
        ]);
    }
    let mut seed_rng = ChaCha8Rng::seed_from_u64(4);
    let init = kmeans_plus_plus(&tokens, 2, &mut seed_rng);
    let expected = oracle_lloyd(&tokens, init.clone());
    let got = lloyd(&tokens, init, 100);
    assert_eq!(got.assignments, expected);
    assert_ne!(got.assignments[0], got.assignments[3]);

    // The same populations through the mask generator, at pixel resolution.
    let flat: Vec<f64> = tokens.iter().flatten().copied().collect();
    let t = tensor_from(flat, &[16, 3]).unwrap();
    let a_s = tensor_from(vec![0.0, 0.0, 1.0], &[1, 3]).unwrap();
    let cfg = PseudoMaskConfig {
        k_clusters: 2,
        min_area: 1,
        seed: 4,
        ..Default::default()
    };
    let mask = generate_pseudo_mask(&t, (4, 4), &LabelMap::filled(8, 8, 255), &a_s, &cfg).unwrap();
    assert_eq!(mask.o_u, 2);
    for r in 0..8 {
        for c in 0..8 {
            let token_cluster = expected[(r / 2) * 4 + c / 2];
            let partner = expected[(r / 2) * 4 + (c / 2 + 2) % 4];
            assert_ne!(token_cluster, partner);
            assert!(mask.labels.get(r, c) >= 1);
        }
    }
    assert_eq!(mask.labels.get(0, 0), mask.labels.get(7, 3));
    assert_ne!(mask.labels.get(0, 0), mask.labels.get(0, 7));
}

#[test]
fn cluster_matching_seen_embedding_is_relabeled() {
    // Every ignored token points along the embedding of seen class 1.
    let tokens = tensor_from([0.0, 2.0].repeat(4), &[4, 2]).unwrap();
    let a_s = tensor_from(vec![1.0, 0.0, 0.0, 1.0], &[2, 2]).unwrap();
    let gt = LabelMap::new(4, 4, [0, 0, 255, 255].repeat(4)).unwrap();
    let mask = generate_pseudo_mask(&tokens, (2, 2), &gt, &a_s, &PseudoMaskConfig::default()).unwrap();
    assert_eq!(mask.labels.labels, [0, 0, 1, 1].repeat(4));
    assert_eq!(mask.o_u, 0);
}

#[test]
fn small_clusters_become_ignore_and_latents_ordered_by_size() {
    // 3×3 token grid, factor 1: six pixels of population A, two of B, one of C.
    let pops = [0, 0, 0, 0, 0, 0, 1, 1, 2];
    let centers = [[10.0, 0.0], [0.0, 10.0], [-10.0, -10.0]];
    let flat: Vec<f64> = pops.iter().flat_map(|&p| centers[p]).collect();
    let t = tensor_from(flat, &[9, 2]).unwrap();
    let a_s = tensor_from(vec![0.3, -1.0], &[1, 2]).unwrap();
    let cfg = PseudoMaskConfig {
        k_clusters: 3,
        min_area: 2,
        ..Default::default()
    };
    let mask = generate_pseudo_mask(&t, (3, 3), &LabelMap::filled(3, 3, 255), &a_s, &cfg).unwrap();
    assert_eq!(mask.o_u, 2);
    assert_eq!(mask.labels.labels, vec![1, 1, 1, 1, 1, 1, 2, 2, 255]);
    assert_eq!(mask.latent_centroids[1], vec![0.0, 10.0]);

    let unseen = vec![vec![0.0, 1.0], vec![1.0, 0.0]];
    let mapped = mask.assign_latents_to_unseen(&unseen).unwrap();
    assert_eq!(mapped.labels, vec![2, 2, 2, 2, 2, 2, 1, 1, 255]);
}

#[test]
fn nearest_breaks_ties_low() {
    assert_eq!(nearest(&[0.0], &[vec![1.0], vec![-1.0]]), 0);
}

fn loop_prototypes(f: &[f64], d: usize, mask: &[u8]) -> Vec<(u8, Vec<f64>)> {
    let mut out = Vec::new();
    for id in 0..255u8 {
        let mut sum = vec![0.0; d];
        let mut n = 0;
        for (p, &l) in mask.iter().enumerate() {
            if l == id {
                n += 1;
                for k in 0..d {
                    sum[k] += f[p * d + k];
                }
            }
        }
        if n > 0 {
            out.push((id, sum.into_iter().map(|s| s / n as f64).collect()));
        }
    }
    out
}

#[test]
fn prototype_examples() {
    let v = vec![0.3, -1.0, 2.5];
    let f = tensor_from(v.repeat(4), &[4, 3]).unwrap();
    let p = compute_prototypes(&f, &LabelMap::filled(2, 2, 1), 2).unwrap();
    assert_eq!(p.ids, vec![1]);
    assert_eq!(to_vec(&p.features).unwrap(), v);

    let f = tensor_from(vec![1.0, 1.0, 2.0, 2.0, 1.0, 1.0, 2.0, 2.0], &[4, 2]).unwrap();
    let mask = LabelMap::new(2, 2, vec![0, 3, 0, 3]).unwrap();
    let p = compute_prototypes(&f, &mask, 2).unwrap();
    assert_eq!(p.ids, vec![0, 3]);
    assert_eq!(to_vec(&p.features).unwrap(), vec![1.0, 1.0, 2.0, 2.0]);

    let empty = compute_prototypes(&f, &LabelMap::filled(2, 2, 255), 2).unwrap();
    assert!(empty.is_empty());
    assert!(compute_prototypes(&f, &LabelMap::filled(3, 3, 0), 2).is_err());
}

#[test]
fn prototypes_match_loop_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..20 {
        let d = 6;
        let f = rand_vec(&mut rng, 64 * d);
        let labels: Vec<u8> = (0..64)
            .map(|_| {
                let v = rng.random_range(0..7u8);
                if v == 6 { 255 } else { v }
            })
            .collect();
        let p = compute_prototypes(
            &tensor_from(f.clone(), &[64, d]).unwrap(),
            &LabelMap::new(8, 8, labels.clone()).unwrap(),
            3,
        )
        .unwrap();
        let got = to_vec(&p.features).unwrap();
        let oracle = loop_prototypes(&f, d, &labels);
        assert_eq!(p.ids, oracle.iter().map(|(id, _)| *id).collect::<Vec<_>>());
        for (row, (_, proto)) in oracle.iter().enumerate() {
            for k in 0..d {
                assert!((got[row * d + k] - proto[k]).abs() < 1e-6);
            }
        }
    }
}

#[test]
fn split_examples() {
    let f = tensor_from((0..10).map(f64::from).collect(), &[5, 2]).unwrap();
    let all_seen = PrototypeSet {
        ids: vec![0, 1, 2, 3, 4],
        features: f.clone(),
        n_seen: 5,
    };
    let ((s_ids, _), (l_ids, l)) = split_prototypes(&all_seen).unwrap();
    assert_eq!(s_ids.len(), 5);
    assert!(l_ids.is_empty());
    assert_eq!(l.dims(), &[0, 2]);

    let mixed = PrototypeSet {
        ids: vec![0, 2, 3, 4, 5],
        features: f.clone(),
        n_seen: 4,
    };
    let ((s_ids, s), (l_ids, l)) = split_prototypes(&mixed).unwrap();
    assert_eq!(l_ids, vec![4, 5]);
    let mut joined: Vec<u8> = s_ids.into_iter().chain(l_ids).collect();
    joined.sort();
    assert_eq!(joined, mixed.ids);
    let rejoined = Tensor::cat(&[&s, &l], 0).unwrap();
    assert_eq!(to_vec(&rejoined).unwrap(), to_vec(&f).unwrap());
}

fn oracle_kl(f: &[f64], a: &[f64], c: &[f64], o: usize, tf: f64, tc: f64) -> f64 {
    let d = c.len();
    let soft = |m: &[f64], t: f64| -> Vec<f64> {
        let z: Vec<f64> = (0..o)
            .map(|i| (0..d).map(|k| m[i * d + k] * c[k]).sum::<f64>() / t)
            .collect();
        let mx = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = z.iter().map(|v| (v - mx).exp()).collect();
        let s: f64 = e.iter().sum();
        e.into_iter().map(|v| v / s).collect()
    };
    let p = soft(f, tf);
    let q = soft(a, tc);
    p.iter().zip(&q).map(|(p, q)| if *p > 0.0 { p * (p / q).ln() } else { 0.0 }).sum()
}

#[test]
fn sam_examples() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let a = tensor_from(rand_vec(&mut rng, 12), &[3, 4]).unwrap();
    let c = tensor_from(rand_vec(&mut rng, 4), &[4]).unwrap();
    assert_eq!(scalar(&sam_loss(&a, &a, &c, 0.05, 0.05).unwrap()).unwrap(), 0.0);
    let f1 = tensor_from(rand_vec(&mut rng, 4), &[1, 4]).unwrap();
    let a1 = tensor_from(rand_vec(&mut rng, 4), &[1, 4]).unwrap();
    assert_eq!(scalar(&sam_loss(&f1, &a1, &c, 0.07, 0.01).unwrap()).unwrap(), 0.0);
    assert!(sam_loss(&a, &a, &c, 0.0, 0.01).is_err());
    assert!(sam_loss(&a, &a, &c, 0.07, -1.0).is_err());
    assert!(sam_loss(&f1, &a, &c, 0.07, 0.01).is_err());
}

#[test]
fn sam_matches_oracle_and_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for _ in 0..20 {
        let f = rand_vec(&mut rng, 3 * 5);
        let a = rand_vec(&mut rng, 3 * 5);
        let c = rand_vec(&mut rng, 5);
        let got = scalar(
            &sam_loss(
                &tensor_from(f.clone(), &[3, 5]).unwrap(),
                &tensor_from(a.clone(), &[3, 5]).unwrap(),
                &tensor_from(c.clone(), &[5]).unwrap(),
                0.07,
                0.01,
            )
            .unwrap(),
        )
        .unwrap();
        assert!((got - oracle_kl(&f, &a, &c, 3, 0.07, 0.01)).abs() < 1e-8);
    }

    // Moderate scales keep the finite-difference step in the smooth regime.
    let f = Var::from_tensor(&tensor_from(rand_vec(&mut rng, 15).iter().map(|v| v * 0.05).collect(), &[3, 5]).unwrap()).unwrap();
    let a = tensor_from(rand_vec(&mut rng, 15).iter().map(|v| v * 0.02).collect(), &[3, 5]).unwrap();
    let c = tensor_from(rand_vec(&mut rng, 5), &[5]).unwrap();
    let loss = sam_loss(f.as_tensor(), &a, &c, 0.07, 0.01).unwrap();
    let grads = loss.backward().unwrap();
    let g = to_vec(grads.get(f.as_tensor()).unwrap()).unwrap();
    for idx in [0, 3, 7, 11, 14] {
        let num = central_difference(&f, idx, 1e-6, || {
            scalar(&sam_loss(f.as_tensor(), &a, &c, 0.07, 0.01)?)
        })
        .unwrap();
        assert!(relative_error(g[idx], num) < 1e-4, "index {idx}: {} vs {num}", g[idx]);
    }
}

proptest! {
    #[test]
    fn sam_is_non_negative(seed in 0u64..500, o in 1usize..6) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let f = tensor_from(rand_vec(&mut rng, o * 4), &[o, 4]).unwrap();
        let a = tensor_from(rand_vec(&mut rng, o * 4), &[o, 4]).unwrap();
        let c = tensor_from(rand_vec(&mut rng, 4), &[4]).unwrap();
        let v = scalar(&sam_loss(&f, &a, &c, 0.07, 0.01).unwrap()).unwrap();
        prop_assert!(v >= -1e-12);
    }

    #[test]
    fn prototypes_are_permutation_equivariant(seed in 0u64..500) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = 16;
        let f = rand_vec(&mut rng, n * 3);
        let labels: Vec<u8> = (0..n).map(|_| rng.random_range(0..4u8)).collect();
        let mut perm: Vec<usize> = (0..n).collect();
        for i in (1..n).rev() {
            perm.swap(i, rng.random_range(0..=i));
        }
        let pf: Vec<f64> = perm.iter().flat_map(|&p| f[p * 3..p * 3 + 3].to_vec()).collect();
        let pl: Vec<u8> = perm.iter().map(|&p| labels[p]).collect();
        let a = compute_prototypes(&tensor_from(f, &[n, 3]).unwrap(), &LabelMap::new(4, 4, labels).unwrap(), 2).unwrap();
        let b = compute_prototypes(&tensor_from(pf, &[n, 3]).unwrap(), &LabelMap::new(4, 4, pl).unwrap(), 2).unwrap();
        prop_assert_eq!(&a.ids, &b.ids);
        for (x, y) in to_vec(&a.features).unwrap().iter().zip(to_vec(&b.features).unwrap()) {
            prop_assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn pseudo_masks_keep_gt_and_respect_invariants(seed in 0u64..200, k in 1usize..6) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let tokens = tensor_from(rand_vec(&mut rng, 16 * 4), &[16, 4]).unwrap();
        let a_s = tensor_from(rand_vec(&mut rng, 3 * 4), &[3, 4]).unwrap();
        let gt: Vec<u8> = (0..64).map(|_| if rng.random_bool(0.5) { rng.random_range(0..3u8) } else { 255 }).collect();
        let gt = LabelMap::new(8, 8, gt).unwrap();
        let cfg = PseudoMaskConfig { k_clusters: k, seed, ..Default::default() };
        let mask = generate_pseudo_mask(&tokens, (4, 4), &gt, &a_s, &cfg).unwrap();
        prop_assert!(mask.check_invariants().is_ok());
        for (g, m) in gt.labels.iter().zip(&mask.labels.labels) {
            if *g != 255 {
                prop_assert_eq!(g, m);
            }
        }
        for id in 3..3 + mask.o_u {
            prop_assert!(mask.labels.labels.contains(&(id as u8)));
        }
    }
}

mod common;

use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use vpr_core::matching::{
    fit_homography_dlt, mutual_nn, mutual_nn_indices, ransac_inliers, spatial_score, Homography, MatchPair,
    PackedDescriptors, RansacConfig,
};
use vpr_core::selection::{KeyPatch, Point2};

fn integer_patches(rng: &mut ChaCha8Rng, n: usize, dim: usize) -> Vec<KeyPatch> {
    (0..n)
        .map(|i| {
            let d = (0..dim).map(|_| rng.random_range(-4i32..=4) as f32).collect();
            common::patch(d, i as f64, 0.0, 1)
        })
        .collect()
}

/// Brute-force mutual nearest neighbors in exact integer arithmetic, ties to the lowest index.
fn mutual_nn_oracle(qs: &[KeyPatch], rs: &[KeyPatch]) -> Vec<(usize, usize)> {
    let d = |a: &KeyPatch, b: &KeyPatch| -> i64 {
        a.descriptor
            .iter()
            .zip(&b.descriptor)
            .map(|(x, y)| ((x - y) as i64).pow(2))
            .sum()
    };
    let argmin = |it: &mut dyn Iterator<Item = (usize, i64)>| -> usize {
        let mut best: Option<(usize, i64)> = None;
        for (i, v) in it {
            if best.is_none_or(|(_, b)| v < b) {
                best = Some((i, v));
            }
        }
        best.unwrap().0
    };
    let mut out = Vec::new();
    for (i, q) in qs.iter().enumerate() {
        let j = argmin(&mut rs.iter().enumerate().map(|(j, r)| (j, d(q, r))));
        let back = argmin(&mut qs.iter().enumerate().map(|(k, q2)| (k, d(q2, &rs[j]))));
        if back == i {
            out.push((i, j));
        }
    }
    out
}

#[test]
fn mutual_nn_matches_brute_force_oracle() {
    let mut rng = common::rng(30);
    for trial in 0..200 {
        let (m, n) = (rng.random_range(1..60), rng.random_range(1..60));
        let dim = [1, 2, 8, 384][trial % 4];
        let qs = integer_patches(&mut rng, m, dim);
        let rs = integer_patches(&mut rng, n, dim);
        let got: Vec<(usize, usize)> = mutual_nn(&qs, &rs).iter().map(|p| (p.q_index, p.r_index)).collect();
        assert_eq!(got, mutual_nn_oracle(&qs, &rs), "trial {trial}");
    }
}

#[test]
fn mutual_nn_is_symmetric_and_one_to_one() {
    let mut rng = common::rng(31);
    for _ in 0..50 {
        let qs = integer_patches(&mut rng, 40, 6);
        let rs = integer_patches(&mut rng, 30, 6);
        let fwd: Vec<(usize, usize)> = mutual_nn(&qs, &rs).iter().map(|p| (p.q_index, p.r_index)).collect();
        let mut bwd: Vec<(usize, usize)> = mutual_nn(&rs, &qs).iter().map(|p| (p.r_index, p.q_index)).collect();
        bwd.sort();
        assert_eq!(fwd, bwd);
        let mut rs_used: Vec<usize> = fwd.iter().map(|p| p.1).collect();
        rs_used.sort();
        rs_used.dedup();
        assert_eq!(rs_used.len(), fwd.len());
    }
}

#[test]
fn allow_mask_excludes_pairs() {
    let rows: Vec<Vec<f32>> = vec![vec![0.0], vec![10.0]];
    let p = PackedDescriptors::new(1, rows.iter().map(|r| r.as_slice()));
    assert_eq!(mutual_nn_indices(&p, &p, |_, _| true), vec![(0, 0), (1, 1)]);
    assert_eq!(mutual_nn_indices(&p, &p, |i, j| i != j), vec![(0, 1), (1, 0)]);
    assert!(mutual_nn_indices(&p, &p, |_, _| false).is_empty());
}

fn planted_pairs(h: &[[f64; 3]; 3], pts: &[(f64, f64)]) -> Vec<MatchPair> {
    pts.iter()
        .enumerate()
        .map(|(i, &(x, y))| {
            let (u, v) = common::project(h, x, y);
            MatchPair {
                q_index: i,
                r_index: i,
                q_center: Point2::new(x, y),
                r_center: Point2::new(u, v),
            }
        })
        .collect()
}

fn random_points(rng: &mut ChaCha8Rng, n: usize) -> Vec<(f64, f64)> {
    (0..n)
        .map(|_| (rng.random_range(0.0..640.0), rng.random_range(0.0..480.0)))
        .collect()
}

#[test]
fn dlt_recovers_planted_projective_maps() {
    let mut rng = common::rng(32);
    for trial in 0..50 {
        let h = common::random_homography(&mut rng);
        let n = 4 + trial % 40;
        let pairs = planted_pairs(&h, &random_points(&mut rng, n));
        let fit = fit_homography_dlt(&pairs).unwrap();
        for p in &pairs {
            let err = fit.transfer_error(&p.q_center, &p.r_center);
            assert!(err < 1e-4, "trial {trial}: transfer error {err}");
        }
        let probe = Point2::new(320.0, 240.0);
        let (u, v) = common::project(&h, probe.x, probe.y);
        assert!(fit.apply(&probe).unwrap().distance(&Point2::new(u, v)) < 1e-4);
    }
}

#[test]
fn dlt_agrees_with_four_point_oracle() {
    let mut rng = common::rng(33);
    for _ in 0..50 {
        let h = common::random_homography(&mut rng);
        let pts = random_points(&mut rng, 4);
        let pairs = planted_pairs(&h, &pts);
        let dst: Vec<(f64, f64)> = pairs.iter().map(|p| (p.r_center.x, p.r_center.y)).collect();
        let oracle = common::four_point_oracle(&pts, &dst).unwrap();
        let fit = fit_homography_dlt(&pairs).unwrap().to_array();
        let scale = fit[2][2];
        for r in 0..3 {
            for c in 0..3 {
                assert!((fit[r][c] / scale - oracle[r][c]).abs() < 1e-6 * oracle[r][c].abs().max(1.0));
            }
        }
    }
}

#[test]
fn dlt_rejects_degenerate_input() {
    let line: Vec<(f64, f64)> = (0..6).map(|i| (i as f64 * 10.0, i as f64 * 5.0)).collect();
    let id = [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]];
    assert!(fit_homography_dlt(&planted_pairs(&id, &line)).is_err());
    assert!(fit_homography_dlt(&planted_pairs(&id, &line[..3])).is_err());
    let same = vec![(5.0, 5.0); 5];
    assert!(fit_homography_dlt(&planted_pairs(&id, &same)).is_err());
}

#[test]
fn homography_normal_form() {
    let m = nalgebra::Matrix3::new(-2.0, 0.0, 0.0, 0.0, -2.0, 0.0, 0.0, 0.0, -2.0);
    let h = Homography::from_matrix(m).unwrap();
    assert!((h.matrix().norm() - 1.0).abs() < 1e-12);
    assert!(h.matrix()[(0, 0)] > 0.0);
    assert_eq!(h, Homography::identity());
}

/// 8 pairs on a planted map, 2 displaced far from it, shuffled.
fn planted_with_outliers(rng: &mut ChaCha8Rng) -> (Vec<MatchPair>, Vec<bool>) {
    let h = common::random_homography(rng);
    let mut pairs = planted_pairs(&h, &random_points(rng, 10));
    let mut truth = [true; 10];
    for (k, p) in pairs.iter_mut().enumerate().skip(8) {
        p.r_center.x += 300.0 + 50.0 * k as f64;
        p.r_center.y -= 250.0;
        truth[k] = false;
    }
    let mut order: Vec<usize> = (0..10).collect();
    order.shuffle(rng);
    (order.iter().map(|&i| pairs[i]).collect(), order.iter().map(|&i| truth[i]).collect())
}

fn k_subsets(n: usize, k: usize) -> Vec<Vec<usize>> {
    if k == 0 {
        return vec![vec![]];
    }
    if n < k {
        return vec![];
    }
    let mut out = k_subsets(n - 1, k);
    for mut s in k_subsets(n - 1, k - 1) {
        s.push(n - 1);
        out.push(s);
    }
    out
}

/// Best consensus over every 4-subset, each fit with the independent 8x8 solve.
fn exhaustive_consensus(pairs: &[MatchPair], tol: f64) -> usize {
    let subsets = k_subsets(pairs.len(), 4);
    assert_eq!(subsets.len(), 210);
    subsets
        .iter()
        .filter_map(|s| {
            let src: Vec<(f64, f64)> = s.iter().map(|&i| (pairs[i].q_center.x, pairs[i].q_center.y)).collect();
            let dst: Vec<(f64, f64)> = s.iter().map(|&i| (pairs[i].r_center.x, pairs[i].r_center.y)).collect();
            let h = common::four_point_oracle(&src, &dst)?;
            Some(
                pairs
                    .iter()
                    .filter(|p| {
                        let (u, v) = common::project(&h, p.q_center.x, p.q_center.y);
                        (u - p.r_center.x).hypot(v - p.r_center.y) < tol
                    })
                    .count(),
            )
        })
        .max()
        .unwrap()
}

#[test]
fn ransac_finds_planted_inliers() {
    let mut rng = common::rng(34);
    let cfg = RansacConfig::default();
    let mut exact = 0;
    for trial in 0..100 {
        let (pairs, truth) = planted_with_outliers(&mut rng);
        assert_eq!(exhaustive_consensus(&pairs, cfg.tolerance_px), 8);
        let res = ransac_inliers(&pairs, &RansacConfig { seed: trial, ..cfg }).unwrap();
        if res.inlier_count == 8 && res.inliers == truth {
            exact += 1;
        }
    }
    assert!(exact >= 99, "{exact}/100");
}

#[test]
fn ransac_is_deterministic_and_order_invariant() {
    let mut rng = common::rng(35);
    for trial in 0..20 {
        let h = common::random_homography(&mut rng);
        let mut pairs = planted_pairs(&h, &random_points(&mut rng, 30));
        for p in pairs.iter_mut().take(12) {
            p.r_center = Point2::new(rng.random_range(0.0..640.0), rng.random_range(0.0..480.0));
        }
        let cfg = RansacConfig {
            seed: trial,
            ..RansacConfig::default()
        };
        let a = ransac_inliers(&pairs, &cfg).unwrap();
        assert_eq!(a, ransac_inliers(&pairs, &cfg).unwrap());

        let mut order: Vec<usize> = (0..pairs.len()).collect();
        order.shuffle(&mut rng);
        let shuffled: Vec<MatchPair> = order.iter().map(|&i| pairs[i]).collect();
        let b = ransac_inliers(&shuffled, &cfg).unwrap();
        assert_eq!(a.inlier_count, b.inlier_count);
        let remapped: Vec<bool> = order.iter().map(|&i| a.inliers[i]).collect();
        assert_eq!(remapped, b.inliers);
    }
}

#[test]
fn ransac_small_inputs_score_zero() {
    let id = [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]];
    let pairs = planted_pairs(&id, &[(0.0, 0.0), (10.0, 0.0), (0.0, 10.0)]);
    let res = ransac_inliers(&pairs, &RansacConfig::default()).unwrap();
    assert_eq!(res.inlier_count, 0);
    assert_eq!(res.inliers, vec![false; 3]);
    assert!(ransac_inliers(&pairs, &RansacConfig { iterations: 0, ..Default::default() }).is_err());
}

#[test]
fn translated_patches_score_fully() {
    let mut rng = common::rng(36);
    let qs: Vec<KeyPatch> = (0..60)
        .map(|i| {
            let d = (0..16).map(|_| rng.random_range(-1.0f32..1.0)).collect();
            common::patch(d, (i % 10) as f64 * 16.0 + 8.0, (i / 10) as f64 * 16.0 + 8.0, 1)
        })
        .collect();
    let rs: Vec<KeyPatch> = qs
        .iter()
        .map(|p| common::patch(p.descriptor.clone(), p.center.x + 32.0, p.center.y, 1))
        .collect();
    assert_eq!(spatial_score(&qs, &rs, &RansacConfig::default()).unwrap(), 60);
}

proptest! {
    #[test]
    fn inlier_count_bounded_by_pairs(seed in 0u64..10_000, n in 0usize..25) {
        let mut rng = common::rng(seed);
        let pairs: Vec<MatchPair> = (0..n)
            .map(|i| MatchPair {
                q_index: i,
                r_index: i,
                q_center: Point2::new(rng.random_range(0.0..640.0), rng.random_range(0.0..480.0)),
                r_center: Point2::new(rng.random_range(0.0..640.0), rng.random_range(0.0..480.0)),
            })
            .collect();
        let res = ransac_inliers(&pairs, &RansacConfig { iterations: 50, seed, ..Default::default() }).unwrap();
        prop_assert!(res.inlier_count <= n);
        prop_assert_eq!(res.inliers.iter().filter(|&&b| b).count(), res.inlier_count);
    }
}

mod common;

use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::Rng;

use vpr_core::global::{
    build_index, global_descriptor, mine_triplets, pool_tokens, project_global, retrieve_topk, triplet_loss,
    GlobalDescriptor, ProjectionWeights, DEFAULT_MARGIN, GLOBAL_DIM,
};
use vpr_core::store::{Manifest, ManifestEntry, PatchTokenGrid, Split};

fn naive_pool(grid: &PatchTokenGrid) -> Vec<f64> {
    let n = (grid.rows * grid.cols) as f64;
    (0..grid.dim)
        .map(|d| {
            let mut s = 0.0;
            for r in 0..grid.rows {
                for c in 0..grid.cols {
                    s += grid.token(r, c)[d] as f64;
                }
            }
            s / n
        })
        .collect()
}

fn naive_project(x: &[f64], w: &ProjectionWeights) -> Vec<f64> {
    (0..GLOBAL_DIM)
        .map(|j| w.bias[j] as f64 + (0..w.dim_in).map(|i| x[i] * w.matrix[i * GLOBAL_DIM + j] as f64).sum::<f64>())
        .collect()
}

fn random_descriptor(rng: &mut impl Rng) -> GlobalDescriptor {
    GlobalDescriptor::new((0..GLOBAL_DIM).map(|_| rng.random_range(-1.0f32..1.0)).collect()).unwrap()
}

#[test]
fn pooling_and_projection_match_naive_oracle() {
    let mut rng = common::rng(10);
    for trial in 0..20 {
        let rec = common::random_record(&mut rng, "x", 1 + trial % 5, 2 + trial % 7, 16);
        let mut w = ProjectionWeights::seeded(16, trial as u64);
        w.bias = (0..GLOBAL_DIM).map(|_| rng.random_range(-0.1f32..0.1)).collect();
        let pooled = pool_tokens(&rec.tokens).unwrap();
        let oracle = naive_pool(&rec.tokens);
        for (a, b) in pooled.iter().zip(&oracle) {
            assert!((*a as f64 - b).abs() <= 1e-6 * b.abs().max(1.0));
        }
        let g = global_descriptor(&rec.tokens, &w).unwrap();
        let expected = naive_project(&oracle, &w);
        for (a, b) in g.as_slice().iter().zip(&expected) {
            assert!((*a as f64 - b).abs() <= 1e-5 * b.abs().max(1.0), "{a} vs {b}");
        }
    }
}

#[test]
fn projection_rejects_wrong_width() {
    let w = ProjectionWeights::seeded(8, 0);
    assert!(project_global(&[0.0; 7], &w).is_err());
}

#[test]
fn triplet_loss_oracle() {
    let mut rng = common::rng(11);
    for _ in 0..50 {
        let (q, p, n) = (random_descriptor(&mut rng), random_descriptor(&mut rng), random_descriptor(&mut rng));
        let d = |a: &GlobalDescriptor, b: &GlobalDescriptor| -> f64 {
            a.as_slice().iter().zip(b.as_slice()).map(|(x, y)| ((x - y) as f64).powi(2)).sum()
        };
        let expected = (d(&q, &p) - d(&q, &n) + DEFAULT_MARGIN).max(0.0);
        let got = triplet_loss(&q, &p, &n, DEFAULT_MARGIN).unwrap();
        assert!((got - expected).abs() < 1e-9 * expected.max(1.0));
    }
    let q = random_descriptor(&mut rng);
    assert!((triplet_loss(&q, &q, &q, DEFAULT_MARGIN).unwrap() - DEFAULT_MARGIN).abs() < 1e-15);
    assert!(triplet_loss(&q, &q, &q, -1.0).is_err());
}

fn exhaustive_topk(refs: &[(String, GlobalDescriptor)], q: &GlobalDescriptor, k: usize) -> Vec<String> {
    let mut all: Vec<(f64, &str)> = refs.iter().map(|(id, g)| (q.squared_distance(g), id.as_str())).collect();
    all.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(b.1)));
    all.into_iter().take(k).map(|(_, id)| id.to_string()).collect()
}

#[test]
fn topk_matches_exhaustive_sort() {
    let mut rng = common::rng(12);
    let refs: Vec<(String, GlobalDescriptor)> =
        (0..50).map(|i| (format!("ref_{i:02}"), random_descriptor(&mut rng))).collect();
    let index = build_index(refs.clone()).unwrap();
    for qi in 0..20 {
        let q = random_descriptor(&mut rng);
        let got = retrieve_topk(&index, &format!("q{qi}"), &q, 10).unwrap();
        let ids: Vec<String> = got.ranked.iter().map(|n| n.id.clone()).collect();
        assert_eq!(ids, exhaustive_topk(&refs, &q, 10));
        assert!(got.ranked.windows(2).all(|w| w[0].distance <= w[1].distance));
        for n in &got.ranked {
            let g = &refs.iter().find(|(id, _)| *id == n.id).unwrap().1;
            assert!((n.distance - q.distance(g)).abs() < 1e-12);
        }
    }
}

#[test]
fn ties_break_by_id_regardless_of_insertion() {
    let mut rng = common::rng(13);
    let shared = random_descriptor(&mut rng);
    let mut refs: Vec<(String, GlobalDescriptor)> = ["b", "d", "a", "c"]
        .iter()
        .map(|id| (id.to_string(), shared.clone()))
        .collect();
    for _ in 0..5 {
        refs.shuffle(&mut rng);
        let index = build_index(refs.clone()).unwrap();
        let got = index.retrieve_topk("q", &shared, 3).unwrap();
        let ids: Vec<&str> = got.ranked.iter().map(|n| n.id.as_str()).collect();
        assert_eq!(ids, ["a", "b", "c"]);
    }
}

#[test]
fn retrieval_errors() {
    let mut rng = common::rng(14);
    let g = random_descriptor(&mut rng);
    assert!(build_index(vec![("a".into(), g.clone()), ("a".into(), g.clone())]).is_err());
    let index = build_index(vec![("a".into(), g.clone())]).unwrap();
    assert!(index.retrieve_topk("q", &g, 0).is_err());
    assert_eq!(index.retrieve_topk("q", &g, 5).unwrap().ranked.len(), 1);
    assert!(GlobalDescriptor::new(vec![0.0; 3]).is_err());
}

proptest! {
    #[test]
    fn topk_is_prefix_of_larger_k(seed in 0u64..1000, k in 1usize..30) {
        let mut rng = common::rng(seed);
        let refs: Vec<(String, GlobalDescriptor)> =
            (0..30).map(|i| (format!("r{i:02}"), random_descriptor(&mut rng))).collect();
        let index = build_index(refs).unwrap();
        let q = random_descriptor(&mut rng);
        let small = index.retrieve_topk("q", &q, k).unwrap();
        let big = index.retrieve_topk("q", &q, 30).unwrap();
        prop_assert_eq!(&small.ranked[..], &big.ranked[..k]);
    }

    #[test]
    fn pooling_is_permutation_invariant(seed in 0u64..1000) {
        // tokens on a 1/256 lattice sum exactly, so any order pools identically
        let mut rng = common::rng(seed);
        let (rows, cols, dim) = (4, 5, 8);
        let mut data: Vec<f32> =
            (0..rows * cols * dim).map(|_| rng.random_range(-256i32..=256) as f32 / 256.0).collect();
        let a = pool_tokens(&PatchTokenGrid::new(rows, cols, dim, 1, data.clone()).unwrap()).unwrap();
        let mut cells: Vec<Vec<f32>> = data.chunks(dim).map(|c| c.to_vec()).collect();
        cells.shuffle(&mut rng);
        data = cells.concat();
        let b = pool_tokens(&PatchTokenGrid::new(rows, cols, dim, 1, data).unwrap()).unwrap();
        prop_assert_eq!(a, b);
    }
}

#[test]
fn triplets_follow_radii() {
    let e = |id: &str, x: f64, split| ManifestEntry {
        id: id.into(),
        x_m: x,
        y_m: 0.0,
        split,
    };
    let m = Manifest::new(vec![
        e("q", 0.0, Split::Query),
        e("near", 9.0, Split::Reference),
        e("mid", 20.0, Split::Reference),
        e("far1", 26.0, Split::Reference),
        e("far2", 100.0, Split::Reference),
        e("lonely", 500.0, Split::Query),
    ])
    .unwrap();
    let t = mine_triplets(&m, 5);
    let negs: Vec<&str> = t.iter().map(|t| t.negative.as_str()).collect();
    assert_eq!(negs, ["far1", "far2"]);
    assert!(t.iter().all(|t| t.query == "q" && t.positive == "near"));
}

#![allow(dead_code, clippy::needless_range_loop)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use vpr_core::selection::{KeyPatch, Point2};
use vpr_core::store::{AttentionGrid, ImageRecord, PatchTokenGrid};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_record(rng: &mut ChaCha8Rng, id: &str, rows: usize, cols: usize, dim: usize) -> ImageRecord {
    let tokens = (0..rows * cols * dim).map(|_| rng.random_range(-1.0f32..1.0)).collect();
    let scores = (0..rows * cols).map(|_| rng.random_range(0.0f32..0.02)).collect();
    ImageRecord {
        id: id.to_string(),
        tokens: PatchTokenGrid::new(rows, cols, dim, 1, tokens).unwrap(),
        attention: AttentionGrid::new(rows, cols, scores).unwrap(),
        position: None,
    }
}

pub fn patch(descriptor: Vec<f32>, x: f64, y: f64, scale: u32) -> KeyPatch {
    KeyPatch {
        descriptor,
        center: Point2::new(x, y),
        scale,
        attention: 1.0,
        cell: 0,
    }
}

/// Applies a row-major 3x3 homography.
pub fn project(h: &[[f64; 3]; 3], x: f64, y: f64) -> (f64, f64) {
    let w = h[2][0] * x + h[2][1] * y + h[2][2];
    (
        (h[0][0] * x + h[0][1] * y + h[0][2]) / w,
        (h[1][0] * x + h[1][1] * y + h[1][2]) / w,
    )
}

/// A mild projective map: near-identity linear part, translation, small perspective.
pub fn random_homography(rng: &mut ChaCha8Rng) -> [[f64; 3]; 3] {
    [
        [
            1.0 + rng.random_range(-0.2..0.2),
            rng.random_range(-0.2..0.2),
            rng.random_range(-50.0..50.0),
        ],
        [
            rng.random_range(-0.2..0.2),
            1.0 + rng.random_range(-0.2..0.2),
            rng.random_range(-50.0..50.0),
        ],
        [rng.random_range(-2e-4..2e-4), rng.random_range(-2e-4..2e-4), 1.0],
    ]
}

/// Solves `a x = b` by Gaussian elimination with partial pivoting.
pub fn solve_dense(mut a: Vec<Vec<f64>>, mut b: Vec<f64>) -> Option<Vec<f64>> {
    let n = b.len();
    for col in 0..n {
        let piv = (col..n).max_by(|&i, &j| a[i][col].abs().total_cmp(&a[j][col].abs()))?;
        if a[piv][col].abs() < 1e-12 {
            return None;
        }
        a.swap(col, piv);
        b.swap(col, piv);
        for row in col + 1..n {
            let f = a[row][col] / a[col][col];
            for k in col..n {
                a[row][k] -= f * a[col][k];
            }
            b[row] -= f * b[col];
        }
    }
    let mut x = vec![0.0; n];
    for row in (0..n).rev() {
        let s: f64 = (row + 1..n).map(|k| a[row][k] * x[k]).sum();
        x[row] = (b[row] - s) / a[row][row];
    }
    Some(x)
}

/// Exact homography through 4 correspondences with `h33 = 1`.
pub fn four_point_oracle(src: &[(f64, f64)], dst: &[(f64, f64)]) -> Option<[[f64; 3]; 3]> {
    let mut a = Vec::new();
    let mut b = Vec::new();
    for (&(x, y), &(u, v)) in src.iter().zip(dst) {
        a.push(vec![x, y, 1.0, 0.0, 0.0, 0.0, -u * x, -u * y]);
        b.push(u);
        a.push(vec![0.0, 0.0, 0.0, x, y, 1.0, -v * x, -v * y]);
        b.push(v);
    }
    let h = solve_dense(a, b)?;
    Some([[h[0], h[1], h[2]], [h[3], h[4], h[5]], [h[6], h[7], 1.0]])
}

//! Mutual nearest neighbor matching and RANSAC homography verification.
//!
//! Two key patch sets are matched exhaustively by Euclidean descriptor
//! distance, keeping only pairs that are each other's nearest neighbor. The
//! patch centers of the matched pairs are then verified with a RANSAC
//! homography; the inlier count is the spatial matching score.

use nalgebra::{DMatrix, Matrix3};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::selection::{KeyPatch, Point2};
use crate::{Error, Result};

pub const DEFAULT_ITERATIONS: u32 = 1000;
pub const MIN_SAMPLE: usize = 4;
/// Inlier tolerance as a multiple of the (coarsest) patch edge.
pub const TOLERANCE_PATCH_FACTOR: f64 = 1.5;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MatchPair {
    pub q_index: usize,
    pub r_index: usize,
    pub q_center: Point2,
    pub r_center: Point2,
}

/// Descriptors packed row-major with their squared norms, ready for matching.
#[derive(Debug, Clone, Default)]
pub struct PackedDescriptors {
    dim: usize,
    data: Vec<f32>,
    norms: Vec<f32>,
}

impl PackedDescriptors {
    pub fn new<'a>(dim: usize, rows: impl IntoIterator<Item = &'a [f32]>) -> Self {
        let mut data = Vec::new();
        let mut norms = Vec::new();
        for row in rows {
            assert_eq!(row.len(), dim, "descriptor dimension mismatch");
            data.extend_from_slice(row);
            norms.push(row.iter().map(|v| v * v).sum());
        }
        PackedDescriptors { dim, data, norms }
    }

    pub fn from_patches<'a>(patches: impl IntoIterator<Item = &'a KeyPatch>) -> Self {
        let patches: Vec<&KeyPatch> = patches.into_iter().collect();
        let dim = patches.first().map_or(0, |p| p.descriptor.len());
        PackedDescriptors::new(dim, patches.iter().map(|p| p.descriptor.as_slice()))
    }

    pub fn len(&self) -> usize {
        self.norms.len()
    }

    pub fn is_empty(&self) -> bool {
        self.norms.is_empty()
    }
}

/// Squared Euclidean distances, `qs.len() x rs.len()`, row-major.
fn squared_distances(qs: &PackedDescriptors, rs: &PackedDescriptors) -> Vec<f32> {
    let (m, n, k) = (qs.len(), rs.len(), qs.dim);
    let mut dots = vec![0f32; m * n];
    if m > 0 && n > 0 && k > 0 {
        // SAFETY: all slices are sized m*k, n*k and m*n with the strides below.
        unsafe {
            matrixmultiply::sgemm(
                m,
                k,
                n,
                1.0,
                qs.data.as_ptr(),
                k as isize,
                1,
                rs.data.as_ptr(),
                1,
                k as isize,
                0.0,
                dots.as_mut_ptr(),
                n as isize,
                1,
            );
        }
    }
    for i in 0..m {
        for j in 0..n {
            let d = &mut dots[i * n + j];
            *d = (qs.norms[i] + rs.norms[j] - 2.0 * *d).max(0.0);
        }
    }
    dots
}

/// Mutual nearest neighbors between packed sets, as `(q, r)` index pairs sorted by `q`.
///
/// Pairs rejected by `allow` are never considered neighbors. Exact distance
/// ties resolve to the lowest index.
pub fn mutual_nn_indices(
    qs: &PackedDescriptors,
    rs: &PackedDescriptors,
    allow: impl Fn(usize, usize) -> bool,
) -> Vec<(usize, usize)> {
    if qs.is_empty() || rs.is_empty() {
        return Vec::new();
    }
    assert_eq!(qs.dim, rs.dim, "descriptor dimension mismatch");
    let (m, n) = (qs.len(), rs.len());
    let mut dist = squared_distances(qs, rs);
    for i in 0..m {
        for j in 0..n {
            if !allow(i, j) {
                dist[i * n + j] = f32::INFINITY;
            }
        }
    }
    let mut row_best = vec![None::<usize>; m];
    let mut col_best = vec![None::<usize>; n];
    for i in 0..m {
        let mut best = f32::INFINITY;
        for j in 0..n {
            let d = dist[i * n + j];
            if d < best {
                best = d;
                row_best[i] = Some(j);
            }
        }
    }
    for j in 0..n {
        let mut best = f32::INFINITY;
        for i in 0..m {
            let d = dist[i * n + j];
            if d < best {
                best = d;
                col_best[j] = Some(i);
            }
        }
    }
    row_best
        .iter()
        .enumerate()
        .filter_map(|(i, j)| j.filter(|&j| col_best[j] == Some(i)).map(|j| (i, j)))
        .collect()
}

/// Mutual nearest neighbor correspondences between two key patch lists.
pub fn mutual_nn(qs: &[KeyPatch], rs: &[KeyPatch]) -> Vec<MatchPair> {
    let pq = PackedDescriptors::from_patches(qs);
    let pr = PackedDescriptors::from_patches(rs);
    mutual_nn_indices(&pq, &pr, |_, _| true)
        .into_iter()
        .map(|(i, j)| MatchPair {
            q_index: i,
            r_index: j,
            q_center: qs[i].center,
            r_center: rs[j].center,
        })
        .collect()
}

/// Planar homography mapping query pixels to reference pixels.
///
/// Stored with unit Frobenius norm and a positive largest-magnitude entry.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Homography {
    m: Matrix3<f64>,
}

impl Homography {
    pub fn from_matrix(m: Matrix3<f64>) -> Result<Self> {
        if m.iter().any(|v| !v.is_finite()) {
            return Err(Error::Degenerate("non-finite homography".into()));
        }
        let norm = m.norm();
        if norm == 0.0 {
            return Err(Error::Degenerate("zero homography".into()));
        }
        let mut m = m / norm;
        let largest = m.iter().copied().fold(0f64, |a, v| if v.abs() > a.abs() { v } else { a });
        if largest < 0.0 {
            m = -m;
        }
        Ok(Homography { m })
    }

    pub fn identity() -> Self {
        Homography::from_matrix(Matrix3::identity()).unwrap()
    }

    pub fn matrix(&self) -> &Matrix3<f64> {
        &self.m
    }

    /// Row-major entries.
    pub fn to_array(&self) -> [[f64; 3]; 3] {
        let m = &self.m;
        [
            [m[(0, 0)], m[(0, 1)], m[(0, 2)]],
            [m[(1, 0)], m[(1, 1)], m[(1, 2)]],
            [m[(2, 0)], m[(2, 1)], m[(2, 2)]],
        ]
    }

    pub fn apply(&self, p: &Point2) -> Option<Point2> {
        let m = &self.m;
        let w = m[(2, 0)] * p.x + m[(2, 1)] * p.y + m[(2, 2)];
        if w.abs() < 1e-12 {
            return None;
        }
        Some(Point2::new(
            (m[(0, 0)] * p.x + m[(0, 1)] * p.y + m[(0, 2)]) / w,
            (m[(1, 0)] * p.x + m[(1, 1)] * p.y + m[(1, 2)]) / w,
        ))
    }

    /// `|H(q) - r|`, infinite when `q` maps to the line at infinity.
    pub fn transfer_error(&self, q: &Point2, r: &Point2) -> f64 {
        self.apply(q).map_or(f64::INFINITY, |p| p.distance(r))
    }
}

/// Isotropic normalization: centroid to origin, mean distance sqrt(2).
fn normalize_points(pts: &[Point2]) -> Result<(Vec<Point2>, Matrix3<f64>)> {
    let n = pts.len() as f64;
    let cx = pts.iter().map(|p| p.x).sum::<f64>() / n;
    let cy = pts.iter().map(|p| p.y).sum::<f64>() / n;
    let mean = pts.iter().map(|p| (p.x - cx).hypot(p.y - cy)).sum::<f64>() / n;
    if !(mean > 1e-12) {
        return Err(Error::Degenerate("all points coincide".into()));
    }
    let s = std::f64::consts::SQRT_2 / mean;
    let t = Matrix3::new(s, 0.0, -s * cx, 0.0, s, -s * cy, 0.0, 0.0, 1.0);
    let out = pts
        .iter()
        .map(|p| Point2::new(s * (p.x - cx), s * (p.y - cy)))
        .collect();
    Ok((out, t))
}

fn dlt_rows(q: &Point2, r: &Point2) -> [[f64; 9]; 2] {
    let (x, y, u, v) = (q.x, q.y, r.x, r.y);
    [
        [-x, -y, -1.0, 0.0, 0.0, 0.0, u * x, u * y, u],
        [0.0, 0.0, 0.0, -x, -y, -1.0, v * x, v * y, v],
    ]
}

fn denormalize(hn: Matrix3<f64>, tq: &Matrix3<f64>, tr: &Matrix3<f64>) -> Result<Homography> {
    // a rank-deficient map sends the plane onto a line
    if (hn / hn.norm()).determinant().abs() < 1e-10 {
        return Err(Error::Degenerate("homography is singular".into()));
    }
    let tr_inv = tr
        .try_inverse()
        .ok_or_else(|| Error::Degenerate("normalization not invertible".into()))?;
    Homography::from_matrix(tr_inv * hn * tq)
}

/// Least-squares DLT on normalized coordinates.
pub fn fit_homography_dlt(pairs: &[MatchPair]) -> Result<Homography> {
    if pairs.len() < MIN_SAMPLE {
        return Err(Error::Degenerate(format!(
            "need at least {MIN_SAMPLE} correspondences, got {}",
            pairs.len()
        )));
    }
    let q: Vec<Point2> = pairs.iter().map(|p| p.q_center).collect();
    let r: Vec<Point2> = pairs.iter().map(|p| p.r_center).collect();
    let (qn, tq) = normalize_points(&q)?;
    let (rn, tr) = normalize_points(&r)?;

    // pad to at least 9 rows so the SVD exposes the full right null space
    let rows = (2 * pairs.len()).max(9);
    let mut a = DMatrix::<f64>::zeros(rows, 9);
    for (k, (qp, rp)) in qn.iter().zip(&rn).enumerate() {
        for (o, row) in dlt_rows(qp, rp).iter().enumerate() {
            for (c, v) in row.iter().enumerate() {
                a[(2 * k + o, c)] = *v;
            }
        }
    }
    let svd = a.svd(false, true);
    let v_t = svd
        .v_t
        .ok_or_else(|| Error::Degenerate("SVD did not converge".into()))?;
    let mut order: Vec<usize> = (0..svd.singular_values.len()).collect();
    order.sort_by(|&i, &j| svd.singular_values[i].total_cmp(&svd.singular_values[j]));
    let (smallest, second) = (order[0], order[1]);
    let largest = svd.singular_values[order[order.len() - 1]];
    if svd.singular_values[second] <= 1e-9 * largest {
        return Err(Error::Degenerate("DLT system is rank deficient".into()));
    }
    let h = v_t.row(smallest);
    let hn = Matrix3::new(h[0], h[1], h[2], h[3], h[4], h[5], h[6], h[7], h[8]);
    denormalize(hn, &tq, &tr)
}

fn collinear(a: &Point2, b: &Point2, c: &Point2) -> bool {
    ((b.x - a.x) * (c.y - a.y) - (b.y - a.y) * (c.x - a.x)).abs() < 1e-9
}

fn any_collinear_triple(p: &[Point2; 4]) -> bool {
    collinear(&p[0], &p[1], &p[2])
        || collinear(&p[0], &p[1], &p[3])
        || collinear(&p[0], &p[2], &p[3])
        || collinear(&p[1], &p[2], &p[3])
}

/// Exact DLT for a 4-point sample: the one-dimensional null space of the
/// 8x9 system, found by Gaussian elimination with full pivoting.
#[allow(clippy::needless_range_loop)]
fn fit_minimal(sample: &[MatchPair; 4]) -> Result<Homography> {
    let q: Vec<Point2> = sample.iter().map(|p| p.q_center).collect();
    let r: Vec<Point2> = sample.iter().map(|p| p.r_center).collect();
    let (qn, tq) = normalize_points(&q)?;
    let (rn, tr) = normalize_points(&r)?;
    let qa: [Point2; 4] = qn.clone().try_into().unwrap();
    let ra: [Point2; 4] = rn.clone().try_into().unwrap();
    if any_collinear_triple(&qa) || any_collinear_triple(&ra) {
        return Err(Error::Degenerate("three sample points are collinear".into()));
    }

    let mut a = [[0f64; 9]; 8];
    for k in 0..4 {
        let rows = dlt_rows(&qn[k], &rn[k]);
        a[2 * k] = rows[0];
        a[2 * k + 1] = rows[1];
    }
    let mut cols: [usize; 9] = std::array::from_fn(|i| i);
    for step in 0..8 {
        let (mut pr, mut pc, mut best) = (step, step, 0f64);
        for (i, row) in a.iter().enumerate().skip(step) {
            for (j, v) in row.iter().enumerate().skip(step) {
                if v.abs() > best {
                    (pr, pc, best) = (i, j, v.abs());
                }
            }
        }
        if best < 1e-10 {
            return Err(Error::Degenerate("minimal DLT system is rank deficient".into()));
        }
        a.swap(step, pr);
        if pc != step {
            for row in a.iter_mut() {
                row.swap(step, pc);
            }
            cols.swap(step, pc);
        }
        let pivot = a[step][step];
        for i in step + 1..8 {
            let f = a[i][step] / pivot;
            if f != 0.0 {
                for j in step..9 {
                    a[i][j] -= f * a[step][j];
                }
            }
        }
    }
    // free variable is the last permuted column
    let mut x = [0f64; 9];
    x[8] = 1.0;
    for i in (0..8).rev() {
        let s: f64 = (i + 1..9).map(|j| a[i][j] * x[j]).sum();
        x[i] = -s / a[i][i];
    }
    let mut h = [0f64; 9];
    for (slot, &col) in cols.iter().enumerate() {
        h[col] = x[slot];
    }
    let hn = Matrix3::from_row_slice(&h);
    denormalize(hn, &tq, &tr)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RansacConfig {
    pub iterations: u32,
    pub tolerance_px: f64,
    pub seed: u64,
    pub min_matches: usize,
}

impl Default for RansacConfig {
    fn default() -> Self {
        RansacConfig {
            iterations: DEFAULT_ITERATIONS,
            tolerance_px: TOLERANCE_PATCH_FACTOR * crate::DEFAULT_PATCH_PX as f64,
            seed: 0,
            min_matches: MIN_SAMPLE,
        }
    }
}

impl RansacConfig {
    pub fn validate(&self) -> Result<()> {
        if self.iterations == 0 {
            return Err(Error::InvalidArgument("RANSAC iterations must be >= 1".into()));
        }
        if !(self.tolerance_px > 0.0) || !self.tolerance_px.is_finite() {
            return Err(Error::InvalidArgument(format!(
                "RANSAC tolerance must be a positive number of pixels, got {}",
                self.tolerance_px
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RansacResult {
    pub inlier_count: usize,
    pub model: Option<Homography>,
    /// Inlier flag per input pair, in input order.
    pub inliers: Vec<bool>,
}

impl RansacResult {
    fn empty(n: usize) -> Self {
        RansacResult {
            inlier_count: 0,
            model: None,
            inliers: vec![false; n],
        }
    }
}

fn inlier_mask(h: &Homography, pairs: &[MatchPair], tol: f64) -> (usize, Vec<bool>) {
    let mask: Vec<bool> = pairs
        .iter()
        .map(|p| h.transfer_error(&p.q_center, &p.r_center) < tol)
        .collect();
    (mask.iter().filter(|&&b| b).count(), mask)
}

/// Fixed-iteration RANSAC over 4-point DLT samples with a final refit.
///
/// Samples are drawn from the pairs in canonical `(q_index, r_index)` order,
/// so the result does not depend on the order of `pairs`. Degenerate samples
/// consume their round. Ties keep the earlier round.
pub fn ransac_inliers(pairs: &[MatchPair], cfg: &RansacConfig) -> Result<RansacResult> {
    cfg.validate()?;
    let n = pairs.len();
    if n < MIN_SAMPLE.max(cfg.min_matches) {
        return Ok(RansacResult::empty(n));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| {
        let (pa, pb) = (&pairs[a], &pairs[b]);
        (pa.q_index, pa.r_index)
            .cmp(&(pb.q_index, pb.r_index))
            .then(pa.q_center.x.total_cmp(&pb.q_center.x))
            .then(pa.q_center.y.total_cmp(&pb.q_center.y))
            .then(pa.r_center.x.total_cmp(&pb.r_center.x))
            .then(pa.r_center.y.total_cmp(&pb.r_center.y))
    });
    let canonical: Vec<MatchPair> = order.iter().map(|&i| pairs[i]).collect();

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut best: Option<(usize, Homography, Vec<bool>)> = None;
    for _ in 0..cfg.iterations {
        let idx = rand::seq::index::sample(&mut rng, n, MIN_SAMPLE);
        let sample = [
            canonical[idx.index(0)],
            canonical[idx.index(1)],
            canonical[idx.index(2)],
            canonical[idx.index(3)],
        ];
        let Ok(h) = fit_minimal(&sample) else {
            continue;
        };
        let (count, mask) = inlier_mask(&h, &canonical, cfg.tolerance_px);
        if best.as_ref().is_none_or(|(c, _, _)| count > *c) {
            best = Some((count, h, mask));
            if count == n {
                // no later round can do better
                break;
            }
        }
    }
    let Some((count, model, mask)) = best else {
        return Ok(RansacResult::empty(n));
    };

    let (count, model, mask) = if count >= MIN_SAMPLE {
        let support: Vec<MatchPair> = canonical
            .iter()
            .zip(&mask)
            .filter(|(_, &m)| m)
            .map(|(p, _)| *p)
            .collect();
        match fit_homography_dlt(&support) {
            Ok(refit) => {
                let (c, m) = inlier_mask(&refit, &canonical, cfg.tolerance_px);
                (c, refit, m)
            }
            Err(_) => (count, model, mask),
        }
    } else {
        (count, model, mask)
    };

    let mut inliers = vec![false; n];
    for (slot, &orig) in order.iter().enumerate() {
        inliers[orig] = mask[slot];
    }
    Ok(RansacResult {
        inlier_count: count,
        model: Some(model),
        inliers,
    })
}

/// Inlier count of the RANSAC homography over mutual nearest neighbors.
pub fn spatial_score(qs: &[KeyPatch], rs: &[KeyPatch], cfg: &RansacConfig) -> Result<usize> {
    Ok(ransac_inliers(&mutual_nn(qs, rs), cfg)?.inlier_count)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn patch(desc: &[f32], x: f64, y: f64) -> KeyPatch {
        KeyPatch {
            descriptor: desc.to_vec(),
            center: Point2::new(x, y),
            scale: 1,
            attention: 1.0,
            cell: 0,
        }
    }

    fn pair(i: usize, q: (f64, f64), r: (f64, f64)) -> MatchPair {
        MatchPair {
            q_index: i,
            r_index: i,
            q_center: Point2::new(q.0, q.1),
            r_center: Point2::new(r.0, r.1),
        }
    }

    #[test]
    fn mutual_nn_two_points() {
        let qs = [patch(&[0.0, 0.0], 0.0, 0.0), patch(&[10.0, 10.0], 1.0, 1.0)];
        let rs = [patch(&[0.0, 1.0], 0.0, 0.0), patch(&[9.0, 9.0], 1.0, 1.0)];
        let m: Vec<_> = mutual_nn(&qs, &rs).iter().map(|p| (p.q_index, p.r_index)).collect();
        assert_eq!(m, vec![(0, 0), (1, 1)]);
    }

    #[test]
    fn mutual_nn_identity_and_empty() {
        let qs: Vec<_> = (0..5).map(|i| patch(&[i as f32, (i * i) as f32], 0.0, 0.0)).collect();
        let m: Vec<_> = mutual_nn(&qs, &qs).iter().map(|p| (p.q_index, p.r_index)).collect();
        assert_eq!(m, (0..5).map(|i| (i, i)).collect::<Vec<_>>());
        assert!(mutual_nn(&[], &qs).is_empty());
        assert!(mutual_nn(&qs, &[]).is_empty());
    }

    #[test]
    fn mutual_nn_is_one_to_one() {
        // both queries prefer r0; only the closer one keeps it
        let qs = [patch(&[0.0], 0.0, 0.0), patch(&[0.5], 0.0, 0.0)];
        let rs = [patch(&[0.1], 0.0, 0.0), patch(&[5.0], 0.0, 0.0)];
        let m: Vec<_> = mutual_nn(&qs, &rs).iter().map(|p| (p.q_index, p.r_index)).collect();
        assert_eq!(m, vec![(0, 0)]);
    }

    #[test]
    fn mutual_nn_ties_take_lowest_index() {
        let qs = [patch(&[0.0], 0.0, 0.0)];
        let rs = [patch(&[1.0], 0.0, 0.0), patch(&[-1.0], 0.0, 0.0)];
        let m: Vec<_> = mutual_nn(&qs, &rs).iter().map(|p| (p.q_index, p.r_index)).collect();
        assert_eq!(m, vec![(0, 0)]);
    }

    #[test]
    fn dlt_translation() {
        let pts = [(0.0, 0.0), (100.0, 0.0), (100.0, 100.0), (0.0, 100.0)];
        let pairs: Vec<_> = pts
            .iter()
            .enumerate()
            .map(|(i, &(x, y))| pair(i, (x, y), (x + 5.0, y + 3.0)))
            .collect();
        let h = fit_homography_dlt(&pairs).unwrap();
        for p in &pairs {
            assert!(h.transfer_error(&p.q_center, &p.r_center) < 1e-6);
        }
        let expected = Homography::from_matrix(Matrix3::new(1.0, 0.0, 5.0, 0.0, 1.0, 3.0, 0.0, 0.0, 1.0)).unwrap();
        assert!((h.matrix() - expected.matrix()).norm() < 1e-9);
        let hm = fit_minimal(&pairs.clone().try_into().unwrap()).unwrap();
        assert!((hm.matrix() - expected.matrix()).norm() < 1e-9);
    }

    #[test]
    fn dlt_identity() {
        let pairs: Vec<_> = [(3.0, 4.0), (50.0, 7.0), (20.0, 90.0), (70.0, 60.0), (33.0, 33.0)]
            .iter()
            .enumerate()
            .map(|(i, &p)| pair(i, p, p))
            .collect();
        let h = fit_homography_dlt(&pairs).unwrap();
        assert!((h.matrix() - Homography::identity().matrix()).norm() < 1e-9);
    }

    #[test]
    fn dlt_degenerate() {
        let collinear: Vec<_> = (0..5).map(|i| pair(i, (i as f64, 2.0 * i as f64), (i as f64, 0.0))).collect();
        assert!(matches!(fit_homography_dlt(&collinear), Err(Error::Degenerate(_))));
        assert!(fit_homography_dlt(&collinear[..3]).is_err());
        let three_collinear = [
            pair(0, (0.0, 0.0), (0.0, 0.0)),
            pair(1, (1.0, 0.0), (1.0, 0.0)),
            pair(2, (2.0, 0.0), (2.0, 0.0)),
            pair(3, (0.0, 1.0), (0.0, 1.0)),
        ];
        assert!(fit_minimal(&three_collinear).is_err());
    }

    #[test]
    fn normalized_homography_sign_and_norm() {
        let h = Homography::from_matrix(-Matrix3::identity() * 3.0).unwrap();
        assert!((h.matrix().norm() - 1.0).abs() < 1e-12);
        assert!(h.matrix()[(0, 0)] > 0.0);
    }

    #[test]
    fn ransac_exact_translation() {
        let pts = [(10.0, 20.0), (200.0, 40.0), (150.0, 300.0), (400.0, 120.0), (35.0, 410.0),
                   (500.0, 450.0), (620.0, 30.0), (310.0, 230.0), (90.0, 160.0), (260.0, 380.0)];
        let pairs: Vec<_> = pts
            .iter()
            .enumerate()
            .map(|(i, &(x, y))| pair(i, (x, y), (x + 5.0, y + 3.0)))
            .collect();
        let cfg = RansacConfig { tolerance_px: 24.0, seed: 1, ..Default::default() };
        let res = ransac_inliers(&pairs, &cfg).unwrap();
        assert_eq!(res.inlier_count, 10);
        assert!(res.inliers.iter().all(|&b| b));
        let few = ransac_inliers(&pairs[..3], &cfg).unwrap();
        assert_eq!((few.inlier_count, few.model), (0, None));
    }

    #[test]
    fn ransac_rejects_bad_config() {
        let cfg = RansacConfig { iterations: 0, ..Default::default() };
        assert!(ransac_inliers(&[], &cfg).is_err());
        let cfg = RansacConfig { tolerance_px: 0.0, ..Default::default() };
        assert!(ransac_inliers(&[], &cfg).is_err());
    }

    #[test]
    fn spatial_score_self_match() {
        let qs: Vec<_> = (0..12)
            .map(|i| patch(&[i as f32, (i % 5) as f32, (i / 3) as f32], 8.0 + 16.0 * (i % 4) as f64, 8.0 + 16.0 * (i / 4) as f64))
            .collect();
        let cfg = RansacConfig::default();
        assert_eq!(spatial_score(&qs, &qs, &cfg).unwrap(), 12);
    }
}

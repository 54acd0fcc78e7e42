//! Fixtures shared by the benchmark targets.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sparse_ba::sparse::BsrMatrix;

/// Jacobian blocks `(J_cameras, J_points, r)` for a scene in which each of
/// `cameras` cameras observes every point, one observation per row.
pub fn ba_jacobian(observations: usize, cameras: usize, seed: u64) -> (BsrMatrix, BsrMatrix, Vec<f64>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let points = observations.div_ceil(cameras);
    let row_ptr: Vec<usize> = (0..=observations).collect();
    let cams = (0..observations).map(|o| (o % cameras) as u32).collect();
    let pts = (0..observations).map(|o| (o / cameras) as u32).collect();
    let mut vals = |n: usize| -> Vec<f64> { (0..n).map(|_| rng.random_range(-1.0..1.0)).collect() };
    let jc = BsrMatrix::from_parts((2, 6), observations, cameras, row_ptr.clone(), cams, vals(12 * observations))
        .expect("valid camera pattern");
    let jp = BsrMatrix::from_parts((2, 3), observations, points, row_ptr, pts, vals(6 * observations))
        .expect("valid point pattern");
    (jc, jp, vals(2 * observations))
}

//! Seeded synthetic problems with known ground truth.

use nalgebra::{Matrix3, Matrix6};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::bal::{BalCamera, BalProblem};
use super::g2o::PoseGraphData;
use crate::error::{invalid, Result};
use crate::lie::{PoseSE3, QuatRotation, Tangent6, Vec3};
use crate::problems::{bal_project, BalIntrinsics, PgoEdge};

/// Focal length of synthetic cameras, in pixels.
pub const SYNTH_FOCAL: f64 = 500.0;
/// Distance of the camera ring from the scene center.
pub const SYNTH_RING_RADIUS: f64 = 4.0;

#[derive(Debug, Clone)]
pub struct SyntheticBa {
    /// Noisy observations and perturbed initial poses.
    pub problem: BalProblem,
    pub true_poses: Vec<PoseSE3>,
    pub true_points: Vec<Vec3>,
}

fn normal(sigma: f64) -> Result<Normal<f64>> {
    Normal::new(0.0, sigma).map_err(|e| invalid(format!("bad standard deviation {sigma}: {e}")))
}

fn tangent_noise(rng: &mut ChaCha8Rng, dist: &Normal<f64>) -> Tangent6 {
    let v: Vec<f64> = (0..6).map(|_| dist.sample(rng)).collect();
    Tangent6::from_slice(&v)
}

/// World-to-camera pose of a BAL camera at `center` looking at the origin
/// (BAL cameras look down their negative z axis).
fn look_at_origin(center: Vec3) -> PoseSE3 {
    let back = center.normalize();
    let up = if back.y.abs() > 0.99 { Vec3::x() } else { Vec3::y() };
    let x = up.cross(&back).normalize();
    let y = back.cross(&x);
    let r_wc = Matrix3::from_columns(&[x, y, back]);
    let r_cw = r_wc.transpose();
    let rot = nalgebra::Rotation3::from_matrix_unchecked(r_cw);
    let q = nalgebra::UnitQuaternion::from_rotation_matrix(&rot);
    let rotation = QuatRotation::new(q.i, q.j, q.k, q.w).expect("unit quaternion");
    PoseSE3::new(rotation, -(r_cw * center))
}

/// Cameras evenly spaced on a horizontal ring, all looking at the origin;
/// points uniform in the unit box `[-0.5, 0.5]^3`; every camera sees every
/// point. Pixels get isotropic Gaussian noise and initial poses a left
/// tangent perturbation; points start at their true positions.
pub fn synth_ba(
    num_cameras: usize,
    num_points: usize,
    pixel_sigma: f64,
    pose_sigma: f64,
    seed: u64,
) -> Result<SyntheticBa> {
    if num_cameras == 0 || num_points == 0 {
        return Err(invalid("synthetic problems need at least one camera and one point"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let pixel_noise = normal(pixel_sigma)?;
    let pose_noise = normal(pose_sigma)?;
    let intrinsics = BalIntrinsics::new(SYNTH_FOCAL, 0.0, 0.0)?;

    let true_poses: Vec<PoseSE3> = (0..num_cameras)
        .map(|c| {
            let phi = std::f64::consts::TAU * c as f64 / num_cameras as f64;
            let height = 0.5 * (phi * 3.0).sin();
            look_at_origin(Vec3::new(
                SYNTH_RING_RADIUS * phi.sin(),
                height,
                SYNTH_RING_RADIUS * phi.cos(),
            ))
        })
        .collect();
    let true_points: Vec<Vec3> = (0..num_points)
        .map(|_| {
            Vec3::new(
                rng.random_range(-0.5..0.5),
                rng.random_range(-0.5..0.5),
                rng.random_range(-0.5..0.5),
            )
        })
        .collect();

    let mut observations = Vec::with_capacity(num_cameras * num_points);
    for (c, pose) in true_poses.iter().enumerate() {
        for (j, p) in true_points.iter().enumerate() {
            let px = bal_project(pose, p, &intrinsics)?;
            observations.push(crate::problems::Observation {
                camera_index: c,
                point_index: j,
                pixel: [
                    px[0] + pixel_noise.sample(&mut rng),
                    px[1] + pixel_noise.sample(&mut rng),
                ],
            });
        }
    }
    let cameras = true_poses
        .iter()
        .map(|p| BalCamera {
            pose: p.retract(&tangent_noise(&mut rng, &pose_noise)),
            intrinsics,
        })
        .collect();
    Ok(SyntheticBa {
        problem: BalProblem {
            cameras,
            points: true_points.clone(),
            observations,
        },
        true_poses,
        true_points,
    })
}

#[derive(Debug, Clone)]
pub struct SyntheticPgo {
    /// Noisy measurements; initial poses from chaining the odometry edges.
    pub graph: PoseGraphData,
    pub true_poses: Vec<PoseSE3>,
}

/// A helical trajectory with odometry edges `i -> i+1` and loop closures
/// between poses one turn apart. Measurements carry tangent noise with
/// the given translation and rotation standard deviations and matching
/// information matrices.
pub fn synth_pgo(
    num_poses: usize,
    translation_sigma: f64,
    rotation_sigma: f64,
    seed: u64,
) -> Result<SyntheticPgo> {
    if num_poses < 2 {
        return Err(invalid("a pose graph needs at least two poses"));
    }
    if !(translation_sigma > 0.0 && rotation_sigma > 0.0) {
        return Err(invalid("noise levels must be positive"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let tn = normal(translation_sigma)?;
    let rn = normal(rotation_sigma)?;
    let per_turn = 20usize;
    let true_poses: Vec<PoseSE3> = (0..num_poses)
        .map(|i| {
            let phi = std::f64::consts::TAU * i as f64 / per_turn as f64;
            let rotation = QuatRotation::exp(&Vec3::new(0.0, phi, 0.0));
            let center = Vec3::new(5.0 * phi.cos(), 0.5 * (i / per_turn) as f64, 5.0 * phi.sin());
            PoseSE3::new(rotation, center)
        })
        .collect();
    let mut info = Matrix6::zeros();
    for k in 0..3 {
        info[(k, k)] = 1.0 / (translation_sigma * translation_sigma);
        info[(k + 3, k + 3)] = 1.0 / (rotation_sigma * rotation_sigma);
    }
    let measure = |i: usize, j: usize, rng: &mut ChaCha8Rng| {
        let rel = true_poses[i].inverse().compose(&true_poses[j]);
        let noise = Tangent6::new(
            Vec3::new(tn.sample(rng), tn.sample(rng), tn.sample(rng)),
            Vec3::new(rn.sample(rng), rn.sample(rng), rn.sample(rng)),
        );
        PgoEdge {
            i,
            j,
            measurement: rel.retract(&noise),
            information: Some(info),
        }
    };
    let mut edges = Vec::new();
    for i in 0..num_poses - 1 {
        edges.push(measure(i, i + 1, &mut rng));
    }
    for i in 0..num_poses.saturating_sub(per_turn) {
        if rng.random_bool(0.5) {
            edges.push(measure(i, i + per_turn, &mut rng));
        }
    }
    let mut init = vec![true_poses[0]];
    for e in edges.iter().take(num_poses - 1) {
        let next = init[e.i].compose(&e.measurement);
        init.push(next);
    }
    Ok(SyntheticPgo {
        graph: PoseGraphData {
            vertices: init.into_iter().enumerate().collect(),
            edges,
        },
        true_poses,
    })
}

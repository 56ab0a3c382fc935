mod support;

use ctreg::{Pose, Rotation, SplineTrajectory};
use nalgebra::Vector3;
use rand::Rng;
use support::{random_spline, rng};

fn relative(a: &Vector3<f64>, b: &Vector3<f64>) -> f64 {
    (a - b).norm() / b.norm().max(1.0)
}

/// A time at least 5 % of a knot interval away from segment boundaries,
/// where higher derivatives jump.
fn interior_time(rng: &mut rand_chacha::ChaCha8Rng, s: &SplineTrajectory) -> f64 {
    let (a, b) = s.domain();
    let segments = ((b - a) / s.dt()).round() as usize;
    let i = rng.random_range(0..segments);
    a + (i as f64 + rng.random_range(0.05..0.95)) * s.dt()
}

#[test]
fn derivatives_match_finite_differences() {
    let mut rng = rng(21);
    let h = 1e-5;
    let (mut worst_w, mut worst_v, mut worst_a) = (0.0f64, 0.0f64, 0.0f64);
    for _ in 0..100 {
        let order = rng.random_range(4..=6);
        let s = random_spline(&mut rng, order + 4, order);
        let t = interior_time(&mut rng, &s);
        let rp = s.pose_at(t + h).unwrap().rotation;
        let rm = s.pose_at(t - h).unwrap().rotation;
        let w_fd = rp.compose(&rm.inverse()).log() / (2.0 * h);
        worst_w = worst_w.max(relative(&s.angular_velocity_world(t).unwrap(), &w_fd));

        let p = |t: f64| s.pose_at(t).unwrap().position;
        let v_fd = (p(t + h) - p(t - h)) / (2.0 * h);
        worst_v = worst_v.max(relative(&s.velocity_world(t).unwrap(), &v_fd));
        let vel = |t: f64| s.velocity_world(t).unwrap();
        let a_fd = (vel(t + h) - vel(t - h)) / (2.0 * h);
        worst_a = worst_a.max(relative(&s.acceleration_world(t).unwrap(), &a_fd));
        let ha = 1e-4;
        let a_fd2 = (p(t + ha) - 2.0 * p(t) + p(t - ha)) / (ha * ha);
        assert!(relative(&s.acceleration_world(t).unwrap(), &a_fd2) < 1e-5);
    }
    assert!(worst_w < 1e-6, "angular velocity {worst_w:e}");
    assert!(worst_v < 1e-6, "velocity {worst_v:e}");
    assert!(worst_a < 1e-6, "acceleration {worst_a:e}");
}

#[test]
fn body_rate_is_world_rate_in_body_frame() {
    let mut rng = rng(22);
    for _ in 0..20 {
        let s = random_spline(&mut rng, 8, 4);
        let (a, b) = s.domain();
        let t = rng.random_range(a..b);
        let r = s.pose_at(t).unwrap().rotation;
        let wb = s.angular_velocity_body(t).unwrap();
        let ww = s.angular_velocity_world(t).unwrap();
        assert!((r.act(&wb) - ww).norm() < 1e-12 * (1.0 + ww.norm()));
    }
}

#[test]
fn fit_reproduces_constant_velocity_motion() {
    let v = Vector3::new(1.5, -0.5, 0.2);
    let w = Vector3::new(0.0, 0.0, 0.4);
    let r0 = Rotation::exp(&Vector3::new(0.1, -0.2, 0.3)).unwrap();
    let motion = |t: f64| Pose::new(r0.compose(&Rotation::exp(&(w * t)).unwrap()), Vector3::new(1.0, 2.0, 3.0) + v * t);
    let poses: Vec<_> = (0..=200).map(|i| i as f64 * 0.01).map(|t| (t, motion(t))).collect();
    let s = SplineTrajectory::fit_from_poses(&poses, 0.1, 4).unwrap();
    assert!(s.contains(0.0) && s.contains(2.0));
    for (t, pose) in &poses {
        let p = s.pose_at(*t).unwrap();
        assert!((p.position - pose.position).norm() < 1e-6, "t {t}");
        assert!(p.rotation.angle_to(&pose.rotation) < 1e-6, "t {t}");
    }
}

#[test]
fn fit_is_self_consistent_on_spline_samples() {
    let mut rng = rng(23);
    let truth = random_spline(&mut rng, 14, 4);
    let (a, b) = truth.domain();
    let times: Vec<f64> = (0..)
        .map(|i| a + i as f64 * 0.005)
        .take_while(|t| *t < b)
        .collect();
    let samples = truth.sample(&times).unwrap();
    let fit = SplineTrajectory::fit_from_poses(&samples, truth.dt(), 4).unwrap();
    for (t, pose) in samples.iter().step_by(7) {
        let p = fit.pose_at(*t).unwrap();
        assert!((p.position - pose.position).norm() < 1e-3, "t {t}");
        assert!(p.rotation.angle_to(&pose.rotation) < 1e-3, "t {t}");
    }
}

#[test]
fn sparse_poses_fit_the_straight_path_between_them() {
    let poses: Vec<_> = (0..6)
        .map(|i| {
            let t = i as f64;
            (t, Pose::new(Rotation::exp(&Vector3::new(0.0, 0.0, 0.2 * t)).unwrap(), Vector3::new(t, -0.5 * t, 0.0)))
        })
        .collect();
    let s = SplineTrajectory::fit_from_poses(&poses, 0.1, 4).unwrap();
    for i in 0..50 {
        let t = i as f64 * 0.1;
        let p = s.pose_at(t).unwrap();
        assert!((p.position - Vector3::new(t, -0.5 * t, 0.0)).norm() < 1e-6, "t {t}");
        assert!((p.rotation.log().z - 0.2 * t).abs() < 1e-6, "t {t}");
    }
}

#[test]
fn constant_rate_knots_are_reproduced_exactly() {
    let v = Vector3::new(1.3, -0.7, 0.25);
    let axis = Vector3::new(0.3, -0.5, 0.8).normalize();
    for order in 2..=6 {
        let mut s = SplineTrajectory::constant(1.0, 0.1, order, 20, Pose::identity()).unwrap();
        let kt: Vec<f64> = (0..20).map(|j| s.knot_time(j)).collect();
        for (k, t) in s.pos_knots_mut().iter_mut().zip(&kt) {
            *k = v * *t;
        }
        for (k, t) in s.rot_knots_mut().iter_mut().zip(&kt) {
            *k = Rotation::exp(&(axis * 0.6 * *t)).unwrap();
        }
        let (a, b) = s.domain();
        for i in 0..100 {
            let t = a + (b - a) * (0.05 + 0.009 * i as f64);
            let pose = s.pose_at(t).unwrap();
            assert!((pose.position - v * t).norm() < 1e-9);
            assert!(pose.rotation.angle_to(&Rotation::exp(&(axis * 0.6 * t)).unwrap()) < 1e-9);
            assert!((s.velocity_world(t).unwrap() - v).norm() < 1e-9);
            assert!((s.angular_velocity_body(t).unwrap() - axis * 0.6).norm() < 1e-9);
        }
    }
}

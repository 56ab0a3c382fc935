use ctreg::estimation::deskew_scan;
use ctreg::synth::{make_trajectory, simulate_measurements, ScenarioSpec, TrajectoryStyle, World};

/// RMS distance of scan points to the world planes they were generated on,
/// with the points placed by the pose at `ref_time`.
fn rms_to_planes(world: &World, points: &[nalgebra::Vector3<f64>], pose: &ctreg::Pose) -> f64 {
    let sum: f64 = points
        .iter()
        .map(|f| {
            let x = pose.apply(f);
            world
                .planes
                .iter()
                .map(|p| p.normal.dot(&(x - p.center)).abs())
                .fold(f64::INFINITY, f64::min)
                .powi(2)
        })
        .sum();
    (sum / points.len() as f64).sqrt()
}

#[test]
fn deskew_removes_motion_distortion() {
    let spec = ScenarioSpec {
        style: TrajectoryStyle::ConstantVelocity,
        speed: 2.0,
        duration: 2.0,
        ..ScenarioSpec::default()
    };
    let traj = make_trajectory(&spec).unwrap();
    let world = ctreg::synth::World::from_spec(&spec.world).unwrap();
    let ms = simulate_measurements(&traj, &world, &spec).unwrap();
    let scan = &ms.scans[5];
    let ref_time = scan[0].t;
    let ref_pose = traj.pose_at(ref_time).unwrap();
    let raw: Vec<_> = scan.iter().map(|p| p.f).collect();
    let deskewed = deskew_scan(&traj, scan, ref_time).unwrap();
    let raw_rms = rms_to_planes(&world, &raw, &ref_pose);
    let fixed_rms = rms_to_planes(&world, &deskewed, &ref_pose);
    assert!(raw_rms > 0.01, "raw {raw_rms}");
    assert!(fixed_rms < 1e-3, "deskewed {fixed_rms}");
    assert!(raw_rms > 10.0 * fixed_rms);
}

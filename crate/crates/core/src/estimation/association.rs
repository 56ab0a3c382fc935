use nalgebra::Vector3;

use super::{FactorWeights, LidarPoint};
use crate::priormap::{voxel_key, VoxelKey, VoxelMap, VoxelPlane};
use crate::trajectory::SplineTrajectory;
use crate::{Error, Result};

/// Maps every point into the body frame at `ref_time` through the pose at
/// its own timestamp: `T(ref_time)⁻¹ ∘ T(t_i)`.
pub fn deskew_scan(traj: &SplineTrajectory, scan: &[LidarPoint], ref_time: f64) -> Result<Vec<Vector3<f64>>> {
    let outside = scan.iter().filter(|p| !traj.contains(p.t)).count();
    if outside > 0 || !traj.contains(ref_time) {
        let (start, end) = traj.domain();
        return Err(Error::InvalidInput(format!(
            "{outside} point(s) of {}{} outside the trajectory domain [{start}, {end})",
            scan.len(),
            if traj.contains(ref_time) { "" } else { " and the reference time" },
        )));
    }
    let to_ref = traj.pose_at(ref_time)?.inverse();
    scan.iter()
        .map(|p| {
            let pose = traj.pose_at(p.t)?;
            Ok(to_ref.apply(&pose.apply(&p.f)))
        })
        .collect()
}

/// A lidar point paired with the plane of the voxel it falls in.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Association {
    /// Index of the point within its scan.
    pub index: usize,
    pub point: LidarPoint,
    pub voxel: VoxelKey,
    pub plane: VoxelPlane,
}

/// Pairs points with voxel planes under the current trajectory, keeping
/// pairs whose whitened point-to-plane residual is within `gate`.
/// Points outside the trajectory domain are skipped. Output follows input
/// order.
pub fn associate_scan(
    traj: &SplineTrajectory,
    scan: &[LidarPoint],
    map: &VoxelMap,
    w: &FactorWeights,
    gate: f64,
) -> Vec<Association> {
    scan.iter()
        .enumerate()
        .filter_map(|(index, point)| {
            let pose = traj.pose_at(point.t).ok()?;
            let world = pose.apply(&point.f);
            let key = voxel_key(&world, map.voxel_size());
            let plane = *map.get(&key)?;
            let r = plane.signed_distance(&world) / w.lidar;
            (r.abs() <= gate).then_some(Association {
                index,
                point: *point,
                voxel: key,
                plane,
            })
        })
        .collect()
}

use ctreg::Rotation;
use nalgebra::Vector3;
use proptest::prelude::*;

fn small_vec(limit: f64) -> impl Strategy<Value = Vector3<f64>> {
    (-limit..limit, -limit..limit, -limit..limit).prop_map(|(x, y, z)| Vector3::new(x, y, z))
}

proptest! {
    #[test]
    fn log_inverts_exp(w in small_vec(1.8)) {
        prop_assume!(w.norm() < 3.1);
        let r = Rotation::exp(&w).unwrap();
        prop_assert!((r.log() - w).norm() < 1e-9);
    }

    #[test]
    fn composition_is_associative(a in small_vec(3.0), b in small_vec(3.0), c in small_vec(3.0)) {
        let (ra, rb, rc) = (Rotation::exp(&a).unwrap(), Rotation::exp(&b).unwrap(), Rotation::exp(&c).unwrap());
        let left = ra.compose(&rb).compose(&rc);
        let right = ra.compose(&rb.compose(&rc));
        prop_assert!(left.angle_to(&right) < 1e-9);
    }

    #[test]
    fn inverse_undoes_rotation(a in small_vec(3.0), v in small_vec(10.0)) {
        let r = Rotation::exp(&a).unwrap();
        prop_assert!((r.inverse_act(&r.act(&v)) - v).norm() < 1e-9);
        prop_assert!(r.compose(&r.inverse()).angle_to(&Rotation::identity()) < 1e-9);
        prop_assert!(r.wxyz()[0] >= 0.0);
    }
}

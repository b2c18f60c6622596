use crate::error::{bail, Result};

/// Planar pose of the end of a kinematic chain, relative to its base.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Pose {
    pub x: f64,
    pub y: f64,
    pub theta: f64,
}

/// Serial planar chain: each joint angle is relative to the previous link.
pub fn forward_kinematics(joints: &[f64], links: &[f64]) -> Result<Pose> {
    if joints.len() != links.len() {
        bail!(Dimension, "{} joints for {} links", joints.len(), links.len());
    }
    if let Some(l) = links.iter().find(|&&l| !(l > 0.0)) {
        bail!(Input, "link length {l} must be positive");
    }
    let (mut x, mut y, mut theta) = (0.0, 0.0, 0.0);
    for (&q, &l) in joints.iter().zip(links) {
        theta += q;
        x += l * libm::cos(theta);
        y += l * libm::sin(theta);
    }
    Ok(Pose { x, y, theta })
}

/// Positions of every joint (base first, effector last).
pub fn joint_positions(joints: &[f64], links: &[f64]) -> alloc::vec::Vec<(f64, f64)> {
    let mut out = alloc::vec::Vec::with_capacity(links.len() + 1);
    let (mut x, mut y, mut theta) = (0.0, 0.0, 0.0);
    out.push((x, y));
    for (&q, &l) in joints.iter().zip(links) {
        theta += q;
        x += l * libm::cos(theta);
        y += l * libm::sin(theta);
        out.push((x, y));
    }
    out
}

/// Two-link inverse kinematics with the elbow bent clockwise (`q1 <= 0`).
///
/// Unreachable targets are projected onto the reachable annulus.
pub fn two_link_ik(x: f64, y: f64, l1: f64, l2: f64) -> (f64, f64) {
    let r2 = x * x + y * y;
    let c = ((r2 - l1 * l1 - l2 * l2) / (2.0 * l1 * l2)).clamp(-1.0, 1.0);
    let q1 = -libm::acos(c);
    let q0 = libm::atan2(y, x) - libm::atan2(l2 * libm::sin(q1), l1 + l2 * libm::cos(q1));
    (q0, q1)
}

#[cfg(test)]
mod tests {
    use super::*;
    use core::f64::consts::FRAC_PI_2;

    #[test]
    fn straight_chain() {
        let p = forward_kinematics(&[0.0, 0.0], &[1.0, 1.0]).unwrap();
        assert!((p.x - 2.0).abs() < 1e-15 && p.y.abs() < 1e-15 && p.theta == 0.0);
    }

    #[test]
    fn quarter_turn() {
        let p = forward_kinematics(&[FRAC_PI_2, 0.0], &[1.0, 1.0]).unwrap();
        assert!(p.x.abs() < 1e-12);
        assert!((p.y - 2.0).abs() < 1e-12);
        assert!((p.theta - FRAC_PI_2).abs() < 1e-15);
    }

    #[test]
    fn mismatched_lengths_rejected() {
        assert!(matches!(forward_kinematics(&[0.0], &[1.0, 1.0]), Err(crate::Error::Dimension(_))));
        assert!(forward_kinematics(&[0.0], &[0.0]).is_err());
    }

    #[test]
    fn ik_round_trips_through_fk() {
        for &(x, y) in &[(0.3, 0.5), (-0.4, 0.3), (0.1, 0.7), (0.6, 0.1)] {
            let (a, b) = two_link_ik(x, y, 0.42, 0.43);
            let p = forward_kinematics(&[a, b], &[0.42, 0.43]).unwrap();
            assert!((p.x - x).abs() < 1e-9 && (p.y - y).abs() < 1e-9, "({x},{y}) -> ({},{})", p.x, p.y);
        }
    }
}

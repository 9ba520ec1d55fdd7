//! Serial-chain forward kinematics, positional Jacobians and the
//! inverse-Jacobian mapping from Cartesian mallet displacements to joint
//! displacements.
//!
//! Chains are built from revolute joints only. Each joint is described by a
//! fixed `origin` transform relative to the previous joint frame followed by a
//! rotation about `axis`. The mallet centre sits at `mallet_offset` in the
//! frame of the last joint.

use nalgebra::{DMatrix, Isometry3, Matrix3, Matrix3xX, MatrixXx3, Translation3, UnitQuaternion, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::config::{ConfigError, FORMAT_VERSION};

/// Singular values below this are damped instead of inverted.
pub const SINGULAR_VALUE_FLOOR: f64 = 1e-4;

/// Element-wise weights applied to `(dx, dy, dz)` before multiplying by the
/// pseudo-inverse. The larger z weight keeps the mallet pressed to the table.
pub const CARTESIAN_WEIGHTS: [f64; 3] = [0.25, 0.25, 0.5];

/// Control cycle of the challenge controller (50 Hz).
pub const CONTROL_CYCLE_S: f64 = 0.02;

#[derive(Debug, Error, PartialEq)]
pub enum KinematicsError {
    #[error("expected {expected} joint values, got {found}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("non-finite cartesian displacement")]
    NonFiniteDisplacement,
    #[error("control cycle must be positive, got {0}")]
    InvalidCycle(f64),
    #[error("invalid chain: {0}")]
    InvalidChain(String),
}

impl From<KinematicsError> for ConfigError {
    fn from(e: KinematicsError) -> Self {
        ConfigError::Invalid(e.to_string())
    }
}

/// Fixed transform given as a translation followed by roll-pitch-yaw.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Origin {
    pub xyz: [f64; 3],
    #[serde(default)]
    pub rpy: [f64; 3],
}

impl Origin {
    pub fn translation(x: f64, y: f64, z: f64) -> Self {
        Self {
            xyz: [x, y, z],
            rpy: [0.0; 3],
        }
    }

    pub fn isometry(&self) -> Isometry3<f64> {
        let [x, y, z] = self.xyz;
        let [r, p, yaw] = self.rpy;
        Isometry3::from_parts(
            Translation3::new(x, y, z),
            UnitQuaternion::from_euler_angles(r, p, yaw),
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClipMode {
    /// Clip every joint displacement to its own velocity bound.
    #[default]
    PerJoint,
    /// Scale the whole displacement so the most constrained joint sits on its
    /// bound; preserves the direction in joint space.
    Scale,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JointSpec {
    pub axis: [f64; 3],
    pub origin: Origin,
    pub pos_limits: [f64; 2],
    pub vel_limit: f64,
}

/// On-disk chain description.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChainSpec {
    pub format_version: u32,
    pub joint_count: usize,
    /// Placement of the chain base in the agent frame.
    #[serde(default)]
    pub base: Origin,
    pub joints: Vec<JointSpec>,
    pub mallet_offset: [f64; 3],
    #[serde(default)]
    pub clipping: ClipMode,
}

#[derive(Debug, Clone)]
struct Joint {
    origin_rotation: Matrix3<f64>,
    origin_translation: Vector3<f64>,
    axis: Vector3<f64>,
    axis_cross: Matrix3<f64>,
    axis_outer: Matrix3<f64>,
}

impl Joint {
    fn rotation(&self, angle: f64) -> Matrix3<f64> {
        let (s, c) = angle.sin_cos();
        Matrix3::identity() * c + self.axis_cross * s + self.axis_outer * (1.0 - c)
    }
}

/// A validated serial chain with precomputed joint transforms.
#[derive(Debug, Clone)]
pub struct KinematicChain {
    spec: ChainSpec,
    joints: Vec<Joint>,
    base_rotation: Matrix3<f64>,
    base_translation: Vector3<f64>,
    mallet_offset: Vector3<f64>,
}

/// Joint positions (rad) and velocities (rad/s).
#[derive(Debug, Clone, PartialEq)]
pub struct JointState {
    pub positions: Vec<f64>,
    pub velocities: Vec<f64>,
}

impl JointState {
    pub fn at_rest(positions: Vec<f64>) -> Self {
        let velocities = vec![0.0; positions.len()];
        Self {
            positions,
            velocities,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct CartesianDisplacement {
    pub dx: f64,
    pub dy: f64,
    pub dz: f64,
}

impl CartesianDisplacement {
    pub fn new(dx: f64, dy: f64, dz: f64) -> Self {
        Self { dx, dy, dz }
    }

    pub fn is_finite(&self) -> bool {
        self.dx.is_finite() && self.dy.is_finite() && self.dz.is_finite()
    }
}

/// Low-level command for one control cycle.
#[derive(Debug, Clone, PartialEq)]
pub struct JointCommand {
    /// Joint positions to reach at the end of the cycle.
    pub positions: Vec<f64>,
    /// Constant joint velocities over the cycle.
    pub velocities: Vec<f64>,
    /// `positions - start`, kept for interpolation.
    pub displacement: Vec<f64>,
}

impl KinematicChain {
    pub fn new(spec: ChainSpec) -> Result<Self, KinematicsError> {
        if spec.format_version != FORMAT_VERSION {
            return Err(KinematicsError::InvalidChain(format!(
                "format_version {} unsupported",
                spec.format_version
            )));
        }
        if spec.joint_count != spec.joints.len() {
            return Err(KinematicsError::InvalidChain(format!(
                "joint_count {} but {} joints listed",
                spec.joint_count,
                spec.joints.len()
            )));
        }
        if spec.joint_count == 0 {
            return Err(KinematicsError::InvalidChain("chain has no joints".into()));
        }
        let mut joints = Vec::with_capacity(spec.joints.len());
        for (i, j) in spec.joints.iter().enumerate() {
            let axis = Vector3::from(j.axis);
            let norm = axis.norm();
            if !(norm.is_finite() && norm > 1e-12) {
                return Err(KinematicsError::InvalidChain(format!("joint {i}: zero axis")));
            }
            let [lo, hi] = j.pos_limits;
            if !(lo < hi) {
                return Err(KinematicsError::InvalidChain(format!(
                    "joint {i}: position limits must satisfy min < max"
                )));
            }
            if !(j.vel_limit > 0.0 && j.vel_limit.is_finite()) {
                return Err(KinematicsError::InvalidChain(format!(
                    "joint {i}: velocity limit must be positive"
                )));
            }
            let axis = axis / norm;
            let iso = j.origin.isometry();
            joints.push(Joint {
                origin_rotation: iso.rotation.to_rotation_matrix().into_inner(),
                origin_translation: iso.translation.vector,
                axis,
                axis_cross: axis.cross_matrix(),
                axis_outer: axis * axis.transpose(),
            });
        }
        let base = spec.base.isometry();
        Ok(Self {
            base_rotation: base.rotation.to_rotation_matrix().into_inner(),
            base_translation: base.translation.vector,
            mallet_offset: Vector3::from(spec.mallet_offset),
            joints,
            spec,
        })
    }

    pub fn from_toml(text: &str, origin: &str) -> Result<Self, ConfigError> {
        let spec: ChainSpec = crate::config::from_toml_str(text, origin)?;
        Ok(Self::new(spec)?)
    }

    pub fn load(path: &std::path::Path) -> Result<Self, ConfigError> {
        let spec: ChainSpec = crate::config::load(path)?;
        Ok(Self::new(spec)?)
    }

    /// Approximate 7-DoF KUKA iiwa14 geometry mounted below and behind the
    /// table end. Link lengths follow the published order of magnitude; the
    /// mounting pose and mallet rod are chosen so that the mallet can sweep
    /// the agent's half of the default table. Not a calibrated model.
    pub fn iiwa14_approx() -> Self {
        let deg = std::f64::consts::PI / 180.0;
        let offsets = [0.1575, 0.2025, 0.2045, 0.2155, 0.1845, 0.2155, 0.081];
        let axes = [
            [0.0, 0.0, 1.0],
            [0.0, 1.0, 0.0],
            [0.0, 0.0, 1.0],
            [0.0, -1.0, 0.0],
            [0.0, 0.0, 1.0],
            [0.0, 1.0, 0.0],
            [0.0, 0.0, 1.0],
        ];
        let pos_deg = [170.0, 120.0, 170.0, 120.0, 170.0, 120.0, 175.0];
        let vel_deg = [85.0, 85.0, 100.0, 75.0, 130.0, 135.0, 135.0];
        let joints = (0..7)
            .map(|i| JointSpec {
                axis: axes[i],
                origin: Origin::translation(0.0, 0.0, offsets[i]),
                pos_limits: [-pos_deg[i] * deg, pos_deg[i] * deg],
                vel_limit: vel_deg[i] * deg,
            })
            .collect();
        Self::new(ChainSpec {
            format_version: FORMAT_VERSION,
            joint_count: 7,
            base: Origin::translation(-1.25, 0.0, -0.42),
            joints,
            mallet_offset: [0.0, 0.0, 0.175],
            clipping: ClipMode::PerJoint,
        })
        .expect("built-in chain is valid")
    }

    pub fn spec(&self) -> &ChainSpec {
        &self.spec
    }

    pub fn joint_count(&self) -> usize {
        self.joints.len()
    }

    pub fn pos_limits(&self, joint: usize) -> [f64; 2] {
        self.spec.joints[joint].pos_limits
    }

    pub fn vel_limit(&self, joint: usize) -> f64 {
        self.spec.joints[joint].vel_limit
    }

    /// Planar position of the chain base in the agent frame.
    pub fn base_xy(&self) -> [f64; 2] {
        [self.base_translation.x, self.base_translation.y]
    }

    fn check_len(&self, positions: &[f64]) -> Result<(), KinematicsError> {
        if positions.len() != self.joints.len() {
            return Err(KinematicsError::DimensionMismatch {
                expected: self.joints.len(),
                found: positions.len(),
            });
        }
        Ok(())
    }

    /// Mallet centre position in the agent frame.
    pub fn forward_kinematics(&self, positions: &[f64]) -> Result<Vector3<f64>, KinematicsError> {
        self.check_len(positions)?;
        let mut rot = self.base_rotation;
        let mut pos = self.base_translation;
        for (joint, &q) in self.joints.iter().zip(positions) {
            pos += rot * joint.origin_translation;
            rot = rot * joint.origin_rotation * joint.rotation(q);
        }
        Ok(pos + rot * self.mallet_offset)
    }

    /// Positional Jacobian (3 x joint_count) at the mallet centre.
    pub fn jacobian(&self, positions: &[f64]) -> Result<Matrix3xX<f64>, KinematicsError> {
        self.forward_with_jacobian(positions).map(|(_, j)| j)
    }

    /// Mallet position and Jacobian from a single pass over the chain.
    pub fn forward_with_jacobian(
        &self,
        positions: &[f64],
    ) -> Result<(Vector3<f64>, Matrix3xX<f64>), KinematicsError> {
        self.check_len(positions)?;
        let n = self.joints.len();
        let mut axes = Vec::with_capacity(n);
        let mut anchors = Vec::with_capacity(n);
        let mut rot = self.base_rotation;
        let mut pos = self.base_translation;
        for (joint, &q) in self.joints.iter().zip(positions) {
            pos += rot * joint.origin_translation;
            rot *= joint.origin_rotation;
            axes.push(rot * joint.axis);
            anchors.push(pos);
            rot *= joint.rotation(q);
        }
        let tip = pos + rot * self.mallet_offset;
        let mut jac = Matrix3xX::zeros(n);
        for i in 0..n {
            jac.set_column(i, &axes[i].cross(&(tip - anchors[i])));
        }
        Ok((tip, jac))
    }

    /// Maps a Cartesian mallet displacement to a joint command for one cycle.
    ///
    /// The displacement is scaled by [`CARTESIAN_WEIGHTS`], multiplied by the
    /// damped pseudo-inverse, clipped to `vel_limit * cycle_s` per joint and
    /// finally clamped to the position limits.
    pub fn resolve_action(
        &self,
        joints: &JointState,
        displacement: CartesianDisplacement,
        cycle_s: f64,
    ) -> Result<JointCommand, KinematicsError> {
        self.check_len(&joints.positions)?;
        if !(cycle_s > 0.0 && cycle_s.is_finite()) {
            return Err(KinematicsError::InvalidCycle(cycle_s));
        }
        if !displacement.is_finite() {
            return Err(KinematicsError::NonFiniteDisplacement);
        }
        let jac = self.jacobian(&joints.positions)?;
        self.resolve_with_jacobian(joints, &jac, displacement, cycle_s)
    }

    /// [`resolve_action`](Self::resolve_action) with a Jacobian the caller
    /// already evaluated at `joints.positions`.
    pub fn resolve_with_jacobian(
        &self,
        joints: &JointState,
        jac: &Matrix3xX<f64>,
        displacement: CartesianDisplacement,
        cycle_s: f64,
    ) -> Result<JointCommand, KinematicsError> {
        self.check_len(&joints.positions)?;
        if jac.ncols() != self.joints.len() {
            return Err(KinematicsError::DimensionMismatch {
                expected: self.joints.len(),
                found: jac.ncols(),
            });
        }
        if !(cycle_s > 0.0 && cycle_s.is_finite()) {
            return Err(KinematicsError::InvalidCycle(cycle_s));
        }
        if !displacement.is_finite() {
            return Err(KinematicsError::NonFiniteDisplacement);
        }
        let pinv = pseudo_inverse(jac);
        let weighted = Vector3::new(
            displacement.dx * CARTESIAN_WEIGHTS[0],
            displacement.dy * CARTESIAN_WEIGHTS[1],
            displacement.dz * CARTESIAN_WEIGHTS[2],
        );
        let raw = pinv * weighted;
        let n = self.joints.len();
        let bounds: Vec<f64> = (0..n).map(|i| self.vel_limit(i) * cycle_s).collect();

        let mut delta: Vec<f64> = match self.spec.clipping {
            ClipMode::PerJoint => raw
                .iter()
                .zip(&bounds)
                .map(|(d, b)| d.clamp(-b, *b))
                .collect(),
            ClipMode::Scale => {
                let scale = raw
                    .iter()
                    .zip(&bounds)
                    .map(|(d, b)| if d.abs() > *b { b / d.abs() } else { 1.0 })
                    .fold(1.0, f64::min);
                raw.iter().map(|d| d * scale).collect()
            }
        };

        let mut positions = Vec::with_capacity(n);
        for i in 0..n {
            let start = joints.positions[i];
            let [lo, hi] = self.pos_limits(i);
            let target = (start + delta[i]).clamp(lo, hi);
            // Re-clip so a start outside the limits cannot produce a jump.
            delta[i] = (target - start).clamp(-bounds[i], bounds[i]);
            positions.push(start + delta[i]);
        }
        let velocities = delta.iter().map(|d| d / cycle_s).collect();
        Ok(JointCommand {
            positions,
            velocities,
            displacement: delta,
        })
    }

    /// Damped least-squares iterations toward a Cartesian target, starting from
    /// `seed`. Used to find home configurations; returns the final joint
    /// positions and the remaining Cartesian error norm.
    pub fn solve_position(
        &self,
        seed: &[f64],
        target: Vector3<f64>,
        iterations: usize,
    ) -> Result<(Vec<f64>, f64), KinematicsError> {
        self.check_len(seed)?;
        let mut q = seed.to_vec();
        let mut err = f64::INFINITY;
        for _ in 0..iterations {
            let (tip, jac) = self.forward_with_jacobian(&q)?;
            let delta = target - tip;
            err = delta.norm();
            if err < 1e-12 {
                break;
            }
            let step = pseudo_inverse(&jac) * delta;
            for (i, qi) in q.iter_mut().enumerate() {
                let [lo, hi] = self.pos_limits(i);
                *qi = (*qi + step[i].clamp(-0.2, 0.2)).clamp(lo, hi);
            }
        }
        let tip = self.forward_kinematics(&q)?;
        err = err.min((target - tip).norm());
        Ok((q, err))
    }
}

/// Moore-Penrose pseudo-inverse of a 3 x n Jacobian computed from its SVD.
///
/// Singular values at or above [`SINGULAR_VALUE_FLOOR`] are inverted exactly;
/// smaller ones use the damped factor `s / (s^2 + floor^2)`, so every gain is
/// bounded by `1 / floor`.
pub fn pseudo_inverse(jac: &Matrix3xX<f64>) -> MatrixXx3<f64> {
    let n = jac.ncols();
    if n < 3 {
        return pseudo_inverse_dense(jac);
    }
    // J^T = Q R with R 3 x 3, and R = U S V^T gives J = V S (Q U)^T.
    let qr = jac.transpose().qr();
    let q = qr.q();
    let r: Matrix3<f64> = qr.r().fixed_view::<3, 3>(0, 0).into_owned();
    let svd = r.svd(true, true);
    let left = q * svd.u.expect("svd computed with u");
    let v_t = svd.v_t.expect("svd computed with v_t");
    let mut right = v_t;
    for (k, &s) in svd.singular_values.iter().enumerate() {
        let gain = damped_gain(s);
        right.row_mut(k).scale_mut(gain);
    }
    left * right
}

fn damped_gain(s: f64) -> f64 {
    if s >= SINGULAR_VALUE_FLOOR {
        1.0 / s
    } else {
        s / (s * s + SINGULAR_VALUE_FLOOR * SINGULAR_VALUE_FLOOR)
    }
}

fn pseudo_inverse_dense(jac: &Matrix3xX<f64>) -> MatrixXx3<f64> {
    let n = jac.ncols();
    let dense = DMatrix::from_column_slice(3, n, jac.as_slice());
    let svd = dense.svd(true, true);
    let u = svd.u.expect("svd computed with u");
    let v_t = svd.v_t.expect("svd computed with v_t");
    let mut out = MatrixXx3::zeros(n);
    for (k, &s) in svd.singular_values.iter().enumerate() {
        let gain = damped_gain(s);
        let v_col = v_t.row(k).transpose();
        let u_col = u.column(k);
        for r in 0..n {
            for c in 0..3 {
                out[(r, c)] += gain * v_col[r] * u_col[c];
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::FRAC_PI_2;

    /// Planar chain in the xy-plane: joints rotate about z, links along x.
    pub(crate) fn planar_chain(links: &[f64], vel_limit: f64) -> KinematicChain {
        let mut joints = Vec::new();
        let mut prev = 0.0;
        for &len in links {
            joints.push(JointSpec {
                axis: [0.0, 0.0, 1.0],
                origin: Origin::translation(prev, 0.0, 0.0),
                pos_limits: [-3.0, 3.0],
                vel_limit,
            });
            prev = len;
        }
        KinematicChain::new(ChainSpec {
            format_version: FORMAT_VERSION,
            joint_count: links.len(),
            base: Origin::default(),
            joints,
            mallet_offset: [prev, 0.0, 0.0],
            clipping: ClipMode::PerJoint,
        })
        .unwrap()
    }

    #[test]
    fn straight_chain_reaches_sum_of_links() {
        let chain = planar_chain(&[1.0, 1.0, 1.0], 1.0);
        let tip = chain.forward_kinematics(&[0.0, 0.0, 0.0]).unwrap();
        assert!((tip - Vector3::new(3.0, 0.0, 0.0)).norm() < 1e-12);
    }

    #[test]
    fn quarter_turn_single_joint() {
        let chain = planar_chain(&[1.0], 1.0);
        let tip = chain.forward_kinematics(&[FRAC_PI_2]).unwrap();
        assert!((tip - Vector3::new(0.0, 1.0, 0.0)).norm() < 1e-12);
    }

    #[test]
    fn single_joint_jacobian_is_tangent() {
        let chain = planar_chain(&[1.0], 1.0);
        let jac = chain.jacobian(&[0.0]).unwrap();
        assert!((jac.column(0) - Vector3::new(0.0, 1.0, 0.0)).norm() < 1e-12);
    }

    #[test]
    fn joint_on_mallet_point_has_zero_column() {
        // The last joint sits exactly at the mallet centre.
        let mut spec = planar_chain(&[1.0, 0.0], 1.0).spec().clone();
        spec.joints[1].origin = Origin::translation(1.0, 0.0, 0.0);
        spec.mallet_offset = [0.0, 0.0, 0.0];
        let chain = KinematicChain::new(spec).unwrap();
        let jac = chain.jacobian(&[0.3, -0.7]).unwrap();
        assert!(jac.column(1).norm() < 1e-15);
        assert!(jac.column(0).norm() > 0.5);
    }

    #[test]
    fn dimension_mismatch_is_reported() {
        let chain = planar_chain(&[1.0, 1.0], 1.0);
        assert_eq!(
            chain.forward_kinematics(&[0.0]).unwrap_err(),
            KinematicsError::DimensionMismatch {
                expected: 2,
                found: 1
            }
        );
        assert!(chain.jacobian(&[0.0, 0.0, 0.0]).is_err());
    }

    #[test]
    fn invalid_chain_rejected() {
        let mut spec = planar_chain(&[1.0], 1.0).spec().clone();
        spec.joints[0].pos_limits = [1.0, 1.0];
        assert!(KinematicChain::new(spec.clone()).is_err());
        spec.joints[0].pos_limits = [-1.0, 1.0];
        spec.joints[0].vel_limit = 0.0;
        assert!(KinematicChain::new(spec.clone()).is_err());
        spec.joints[0].vel_limit = 1.0;
        spec.joint_count = 2;
        assert!(KinematicChain::new(spec).is_err());
    }

    #[test]
    fn identity_block_pseudo_inverse() {
        let mut jac = Matrix3xX::zeros(5);
        for i in 0..3 {
            jac[(i, i)] = 1.0;
        }
        let pinv = pseudo_inverse(&jac);
        assert!((pinv - jac.transpose()).abs().max() < 1e-12);
    }

    #[test]
    fn zero_displacement_gives_zero_command() {
        let chain = KinematicChain::iiwa14_approx();
        let joints = JointState::at_rest(vec![0.1, 0.5, 0.0, -1.2, 0.0, 0.6, 0.0]);
        let cmd = chain
            .resolve_action(&joints, CartesianDisplacement::default(), CONTROL_CYCLE_S)
            .unwrap();
        assert!(cmd.displacement.iter().all(|d| *d == 0.0));
        assert!(cmd.velocities.iter().all(|v| *v == 0.0));
        assert_eq!(cmd.positions, joints.positions);
    }

    #[test]
    fn clipping_is_forced_by_velocity_limit() {
        // A 1 m link at unit velocity limit: dy = 0.2 m weighted by 0.25
        // requests 0.05 rad, clipped to 1 rad/s * 0.02 s.
        let chain = planar_chain(&[1.0], 1.0);
        let joints = JointState::at_rest(vec![0.0]);
        let cmd = chain
            .resolve_action(&joints, CartesianDisplacement::new(0.0, 0.2, 0.0), 0.02)
            .unwrap();
        assert!((cmd.displacement[0] - 0.02).abs() < 1e-15);
        assert!((cmd.velocities[0] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn resolve_action_rejects_bad_inputs() {
        let chain = planar_chain(&[1.0], 1.0);
        let joints = JointState::at_rest(vec![0.0]);
        assert_eq!(
            chain
                .resolve_action(&joints, CartesianDisplacement::new(f64::NAN, 0.0, 0.0), 0.02)
                .unwrap_err(),
            KinematicsError::NonFiniteDisplacement
        );
        assert!(matches!(
            chain.resolve_action(&joints, CartesianDisplacement::default(), 0.0),
            Err(KinematicsError::InvalidCycle(_))
        ));
    }

    #[test]
    fn scale_mode_preserves_direction() {
        let mut spec = planar_chain(&[0.5, 0.5], 0.5).spec().clone();
        spec.clipping = ClipMode::Scale;
        let chain = KinematicChain::new(spec).unwrap();
        let joints = JointState::at_rest(vec![0.4, 0.9]);
        let d = CartesianDisplacement::new(0.3, -0.2, 0.0);
        let cmd = chain.resolve_action(&joints, d, 0.02).unwrap();
        let jac = chain.jacobian(&joints.positions).unwrap();
        let raw = pseudo_inverse(&jac) * Vector3::new(0.075, -0.05, 0.0);
        let ratio0 = cmd.displacement[0] / raw[0];
        let ratio1 = cmd.displacement[1] / raw[1];
        assert!((ratio0 - ratio1).abs() < 1e-12);
        assert!(ratio0 < 1.0);
    }

    #[test]
    fn position_limits_clamp_target() {
        let mut spec = planar_chain(&[1.0], 10.0).spec().clone();
        spec.joints[0].pos_limits = [-0.1, 0.01];
        let chain = KinematicChain::new(spec).unwrap();
        let joints = JointState::at_rest(vec![0.0]);
        let cmd = chain
            .resolve_action(&joints, CartesianDisplacement::new(0.0, 0.5, 0.0), 0.02)
            .unwrap();
        assert!((cmd.positions[0] - 0.01).abs() < 1e-15);
        assert!((cmd.velocities[0] - 0.5).abs() < 1e-12);
    }

    #[test]
    fn default_chain_round_trips_through_toml() {
        let chain = KinematicChain::iiwa14_approx();
        let text = crate::config::to_toml_string(chain.spec()).unwrap();
        let back = KinematicChain::from_toml(&text, "mem").unwrap();
        assert_eq!(back.spec(), chain.spec());
    }
}

//! Planar rigid-body simulation of the puck against table walls and two
//! kinematically driven mallets.
//!
//! Table frame: origin at the table centre, x along the long axis. Side A
//! defends the goal at `x = -length / 2`, side B the goal at `x = +length / 2`.

use nalgebra::Vector2;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::{ConfigError, FORMAT_VERSION};
use crate::kinematics::JointState;

/// Default integration step (500 Hz, ten substeps per control cycle).
pub const SUBSTEP_S: f64 = 1.0 / 500.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Side {
    A,
    B,
}

impl Side {
    pub const BOTH: [Side; 2] = [Side::A, Side::B];

    pub fn index(self) -> usize {
        match self {
            Side::A => 0,
            Side::B => 1,
        }
    }

    pub fn opponent(self) -> Side {
        match self {
            Side::A => Side::B,
            Side::B => Side::A,
        }
    }

    /// Sign of the x coordinate of this side's half in the table frame.
    pub fn sign(self) -> f64 {
        match self {
            Side::A => -1.0,
            Side::B => 1.0,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Side::A => "A",
            Side::B => "B",
        }
    }
}

/// Table geometry and contact parameters.
///
/// Defaults approximate the challenge table; none of them are calibrated.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TableSpec {
    pub format_version: u32,
    pub length: f64,
    pub width: f64,
    pub goal_width: f64,
    pub puck_radius: f64,
    pub mallet_radius: f64,
    pub restitution_wall: f64,
    pub restitution_mallet: f64,
    /// Exponential decay rate of puck linear and angular velocity (1/s).
    pub damping: f64,
    pub plane_height: f64,
    /// Fraction of contact slip removed by friction at each contact. Zero
    /// leaves the tangential velocity and spin untouched.
    pub spin_friction: f64,
}

impl Default for TableSpec {
    fn default() -> Self {
        Self {
            format_version: FORMAT_VERSION,
            length: 1.948,
            width: 1.038,
            goal_width: 0.25,
            puck_radius: 0.03165,
            mallet_radius: 0.048,
            restitution_wall: 0.8,
            restitution_mallet: 0.7,
            damping: 0.1,
            plane_height: 0.0,
            spin_friction: 0.0,
        }
    }
}

impl TableSpec {
    pub fn validate(&self) -> Result<(), ConfigError> {
        let bad = |m: &str| Err(ConfigError::Invalid(format!("table: {m}")));
        if !(self.length > 0.0 && self.width > 0.0) {
            return bad("length and width must be positive");
        }
        if !(self.goal_width >= 0.0 && self.goal_width < self.width) {
            return bad("goal_width must lie in [0, width)");
        }
        if !(self.puck_radius > 0.0 && self.mallet_radius > 0.0) {
            return bad("radii must be positive");
        }
        if 2.0 * self.puck_radius >= self.width.min(self.length) {
            return bad("puck does not fit on the table");
        }
        for (name, e) in [
            ("restitution_wall", self.restitution_wall),
            ("restitution_mallet", self.restitution_mallet),
            ("spin_friction", self.spin_friction),
        ] {
            if !(0.0..=1.0).contains(&e) {
                return bad(&format!("{name} must lie in [0, 1]"));
            }
        }
        if !(self.damping >= 0.0) {
            return bad("damping must be non-negative");
        }
        Ok(())
    }

    pub fn load(path: &std::path::Path) -> Result<Self, ConfigError> {
        let spec: Self = crate::config::load(path)?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn half_length(&self) -> f64 {
        0.5 * self.length
    }

    pub fn half_width(&self) -> f64 {
        0.5 * self.width
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct PuckState {
    pub position: Vector2<f64>,
    pub velocity: Vector2<f64>,
    pub angle: f64,
    pub angular_velocity: f64,
}

impl PuckState {
    pub fn at_rest(x: f64, y: f64) -> Self {
        Self {
            position: Vector2::new(x, y),
            ..Self::default()
        }
    }

    pub fn kinetic_energy_per_mass(&self, radius: f64) -> f64 {
        // Solid disc: I = m r^2 / 2.
        0.5 * self.velocity.norm_squared() + 0.25 * radius * radius * self.angular_velocity.powi(2)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct MalletState {
    pub position: Vector2<f64>,
    pub velocity: Vector2<f64>,
}

/// Full simulator truth for one match.
#[derive(Debug, Clone)]
pub struct WorldState {
    pub puck: PuckState,
    /// Indexed by [`Side::index`], table frame.
    pub mallets: [MalletState; 2],
    pub joints: [JointState; 2],
    pub step_index: u32,
    /// Seconds of continuous possession per side.
    pub fault_timers: [f64; 2],
    /// Continuous-possession counter in control steps. The timers above are
    /// derived from it so the fault threshold is hit on an exact step.
    pub possession_steps: [u32; 2],
    /// Consecutive control steps the puck has sat still in the unreachable band.
    pub stuck_steps: u32,
    pub rng: ChaCha8Rng,
    /// Random draws are rotated by a half turn about the table centre, so a
    /// mirrored world replays its twin with the sides exchanged.
    pub mirrored: bool,
}

impl WorldState {
    /// Draws a side with equal odds, exchanged in a mirrored world.
    pub fn random_side(&mut self) -> Side {
        let side = if self.rng.random_bool(0.5) { Side::A } else { Side::B };
        if self.mirrored {
            side.opponent()
        } else {
            side
        }
    }

    /// Sign applied to random table-frame vectors.
    pub fn mirror_sign(&self) -> f64 {
        if self.mirrored {
            -1.0
        } else {
            1.0
        }
    }

    pub fn new(puck: PuckState, mallets: [MalletState; 2], joints: [JointState; 2], rng: ChaCha8Rng) -> Self {
        Self {
            puck,
            mallets,
            joints,
            step_index: 0,
            fault_timers: [0.0; 2],
            possession_steps: [0; 2],
            stuck_steps: 0,
            rng,
            mirrored: false,
        }
    }
}

/// Removes a fraction of the contact slip. `normal` points from the contact
/// surface into the puck; `surface_velocity` is the velocity of the other body.
fn apply_spin_friction(puck: &mut PuckState, normal: Vector2<f64>, surface_velocity: Vector2<f64>, table: &TableSpec) {
    if table.spin_friction == 0.0 {
        return;
    }
    let tangent = Vector2::new(-normal.y, normal.x);
    let rel = puck.velocity - surface_velocity;
    let slip = rel.dot(&tangent) - table.puck_radius * puck.angular_velocity;
    let dv = -table.spin_friction * slip / 3.0;
    puck.velocity += tangent * dv;
    puck.angular_velocity -= 2.0 * dv / table.puck_radius;
}

fn wrap_angle(a: f64) -> f64 {
    let two_pi = std::f64::consts::TAU;
    let mut r = a % two_pi;
    if r > std::f64::consts::PI {
        r -= two_pi;
    } else if r <= -std::f64::consts::PI {
        r += two_pi;
    }
    r
}

/// Reflects the puck off the side walls and the end walls outside the goal
/// apertures. Position is mirrored about the contact plane so the discrete
/// trajectory matches the continuous one exactly for elastic walls.
fn resolve_walls(puck: &mut PuckState, table: &TableSpec) {
    let r = table.puck_radius;
    let y_lim = table.half_width() - r;
    let x_lim = table.half_length() - r;
    let e = table.restitution_wall;

    for sign in [1.0, -1.0] {
        let over = sign * puck.position.y - y_lim;
        if over > 0.0 {
            puck.position.y -= sign * over * (1.0 + e);
            if sign * puck.position.y > y_lim {
                puck.position.y = sign * y_lim;
            }
            if sign * puck.velocity.y > 0.0 {
                puck.velocity.y = -e * puck.velocity.y;
                apply_spin_friction(puck, Vector2::new(0.0, -sign), Vector2::zeros(), table);
            }
        }
    }

    if in_goal_aperture(puck.position.y, table) {
        return;
    }
    for sign in [1.0, -1.0] {
        let over = sign * puck.position.x - x_lim;
        if over > 0.0 {
            puck.position.x -= sign * over * (1.0 + e);
            if sign * puck.position.x > x_lim {
                puck.position.x = sign * x_lim;
            }
            if sign * puck.velocity.x > 0.0 {
                puck.velocity.x = -e * puck.velocity.x;
                apply_spin_friction(puck, Vector2::new(-sign, 0.0), Vector2::zeros(), table);
            }
        }
    }
}

fn in_goal_aperture(y: f64, table: &TableSpec) -> bool {
    y.abs() < 0.5 * table.goal_width
}

/// Advances the puck by `dt`: velocity decay, semi-implicit Euler position
/// update, mallet contacts, then walls. Mallet states are taken as given.
pub fn substep(world: &mut WorldState, table: &TableSpec, dt: f64) {
    let puck = &mut world.puck;
    let decay = (-table.damping * dt).exp();
    puck.velocity *= decay;
    puck.angular_velocity *= decay;
    puck.position += puck.velocity * dt;
    puck.angle = wrap_angle(puck.angle + puck.angular_velocity * dt);

    for mallet in &world.mallets {
        let reach = table.puck_radius + table.mallet_radius;
        if (puck.position - mallet.position).norm_squared() <= reach * reach {
            *puck = collide_mallet_puck(puck, mallet, table);
        }
    }
    resolve_walls(puck, table);
}

/// Contact response between the puck and an infinite-mass mallet.
///
/// The relative normal velocity is reflected and scaled by
/// `restitution_mallet` in the mallet's rest frame, then the puck is pushed
/// out along the contact normal. Non-overlapping inputs are returned as is.
pub fn collide_mallet_puck(puck: &PuckState, mallet: &MalletState, table: &TableSpec) -> PuckState {
    let reach = table.puck_radius + table.mallet_radius;
    let offset = puck.position - mallet.position;
    let dist = offset.norm();
    if dist > reach {
        return *puck;
    }
    let normal = if dist > 1e-12 {
        offset / dist
    } else {
        log::debug!("coincident puck and mallet centres; separating along +x");
        Vector2::new(1.0, 0.0)
    };
    let mut out = *puck;
    let rel = puck.velocity - mallet.velocity;
    let vn = rel.dot(&normal);
    if vn < 0.0 {
        out.velocity -= normal * ((1.0 + table.restitution_mallet) * vn);
        apply_spin_friction(&mut out, normal, mallet.velocity, table);
    }
    out.position = mallet.position + normal * reach;
    out
}

/// Returns the side that conceded when the puck centre has crossed a goal
/// line inside the goal aperture.
pub fn detect_goal(puck: &PuckState, table: &TableSpec) -> Option<Side> {
    if !in_goal_aperture(puck.position.y, table) {
        return None;
    }
    let h = table.half_length();
    if puck.position.x <= -h {
        Some(Side::A)
    } else if puck.position.x >= h {
        Some(Side::B)
    } else {
        None
    }
}

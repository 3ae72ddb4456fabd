//! Aircraft kinematics and obstacle motion.
//!
//! Each aircraft is a non-holonomic car with state `[px, py, theta, v]` and
//! input `[phi, beta]` (rudder deflection, longitudinal acceleration),
//! integrated with one explicit Euler step per sample period.

use std::f64::consts::PI;

use nalgebra::{Matrix4, Matrix4x2, Vector2, Vector4};
use serde::{Deserialize, Serialize};

use crate::error::{ensure, Error, Result};

/// Planar point or vector in metres.
pub type Point = [f64; 2];

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct AircraftState {
    pub px: f64,
    pub py: f64,
    /// Heading in (-pi, pi].
    pub theta: f64,
    /// Forward speed.
    pub v: f64,
}

impl AircraftState {
    pub fn new(px: f64, py: f64, theta: f64, v: f64) -> Self {
        Self { px, py, theta, v }
    }

    pub fn position(&self) -> Point {
        [self.px, self.py]
    }

    pub fn is_finite(&self) -> bool {
        self.px.is_finite() && self.py.is_finite() && self.theta.is_finite() && self.v.is_finite()
    }

    pub fn to_vector(&self) -> Vector4<f64> {
        Vector4::new(self.px, self.py, self.theta, self.v)
    }

    pub fn from_vector(x: &Vector4<f64>) -> Self {
        Self::new(x[0], x[1], x[2], x[3])
    }

    /// Velocity vector in the plane.
    pub fn velocity(&self) -> Point {
        [self.v * self.theta.cos(), self.v * self.theta.sin()]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct ControlInput {
    /// Rudder deflection (rad).
    pub phi: f64,
    /// Throttle, as longitudinal acceleration (m/s^2).
    pub beta: f64,
}

impl ControlInput {
    pub const ZERO: Self = Self { phi: 0.0, beta: 0.0 };

    pub fn new(phi: f64, beta: f64) -> Self {
        Self { phi, beta }
    }

    pub fn to_vector(&self) -> Vector2<f64> {
        Vector2::new(self.phi, self.beta)
    }

    pub fn is_finite(&self) -> bool {
        self.phi.is_finite() && self.beta.is_finite()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InputBounds {
    pub phi_max: f64,
    pub beta_max: f64,
}

impl Default for InputBounds {
    fn default() -> Self {
        Self {
            phi_max: PI / 6.0,
            beta_max: 1.0,
        }
    }
}

impl InputBounds {
    pub fn validate(&self) -> Result<()> {
        ensure(
            self.phi_max > 0.0 && self.phi_max < PI / 2.0,
            "phi_max",
            || format!("{} is outside (0, pi/2)", self.phi_max),
        )?;
        ensure(self.beta_max > 0.0 && self.beta_max.is_finite(), "beta_max", || {
            format!("{} must be positive", self.beta_max)
        })
    }

    /// Braking command used when the controller cannot produce a plan.
    pub fn braking(&self) -> ControlInput {
        ControlInput::new(0.0, -self.beta_max)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SpeedLimits {
    pub min: f64,
    pub max: f64,
}

impl SpeedLimits {
    pub fn clamp(&self, v: f64) -> f64 {
        v.clamp(self.min, self.max)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AircraftParams {
    /// Wheelbase length `L`.
    pub length: f64,
    pub bounds: InputBounds,
    pub speed_limits: SpeedLimits,
    pub operating_speed: f64,
    /// Smaller is more important.
    pub priority: u32,
    pub goal_tolerance: f64,
}

impl Default for AircraftParams {
    fn default() -> Self {
        Self {
            length: 0.6,
            bounds: InputBounds::default(),
            speed_limits: SpeedLimits { min: 0.0, max: 1.0 },
            operating_speed: 0.5,
            priority: 0,
            goal_tolerance: 0.2,
        }
    }
}

impl AircraftParams {
    pub fn validate(&self) -> Result<()> {
        ensure(self.length > 0.0 && self.length.is_finite(), "length", || {
            format!("{} must be positive", self.length)
        })?;
        self.bounds.validate()?;
        let SpeedLimits { min, max } = self.speed_limits;
        ensure(
            min >= 0.0 && min <= self.operating_speed && self.operating_speed <= max && max.is_finite(),
            "speed_limits",
            || {
                format!(
                    "need 0 <= v_min ({min}) <= operating_speed ({}) <= v_max ({max})",
                    self.operating_speed
                )
            },
        )?;
        ensure(self.operating_speed > 0.0, "operating_speed", || {
            format!("{} must be positive", self.operating_speed)
        })?;
        ensure(self.goal_tolerance > 0.0, "goal_tolerance", || {
            format!("{} must be positive", self.goal_tolerance)
        })
    }

    /// Radius of the disk other aircraft keep clear of.
    pub fn body_radius(&self) -> f64 {
        0.5 * self.length
    }
}

/// Circular obstacle moving at constant velocity.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Obstacle {
    pub position: Point,
    pub radius: f64,
    #[serde(default)]
    pub velocity: Point,
}

impl Obstacle {
    pub fn stationary(position: Point, radius: f64) -> Self {
        Self {
            position,
            radius,
            velocity: [0.0, 0.0],
        }
    }

    pub fn validate(&self) -> Result<()> {
        ensure(self.radius > 0.0 && self.radius.is_finite(), "radius", || {
            format!("{} must be positive", self.radius)
        })
    }

    /// Position after `elapsed` seconds.
    pub fn position_after(&self, elapsed: f64) -> Point {
        [
            self.position[0] + elapsed * self.velocity[0],
            self.position[1] + elapsed * self.velocity[1],
        ]
    }
}

/// Wraps an angle into (-pi, pi].
pub fn wrap_angle(angle: f64) -> f64 {
    let wrapped = (angle + PI).rem_euclid(2.0 * PI) - PI;
    if wrapped <= -PI {
        wrapped + 2.0 * PI
    } else {
        wrapped
    }
}

fn check_step_args(x: &AircraftState, u: &ControlInput, dt: f64, length: f64) -> Result<()> {
    if !x.is_finite() {
        return Err(Error::InvalidState(format!("non-finite state {x:?}")));
    }
    if !u.is_finite() {
        return Err(Error::InvalidState(format!("non-finite input {u:?}")));
    }
    ensure(dt > 0.0 && dt.is_finite(), "dt", || format!("{dt} must be positive"))?;
    ensure(length > 0.0 && length.is_finite(), "length", || {
        format!("{length} must be positive")
    })
}

/// One explicit Euler step of the kinematic model.
pub fn step_dynamics(
    x: &AircraftState,
    u: &ControlInput,
    dt: f64,
    length: f64,
) -> Result<AircraftState> {
    check_step_args(x, u, dt, length)?;
    Ok(AircraftState {
        px: x.px + x.v * x.theta.cos() * dt,
        py: x.py + x.v * x.theta.sin() * dt,
        theta: wrap_angle(x.theta + x.v / length * u.phi.tan() * dt),
        v: x.v + u.beta * dt,
    })
}

/// Analytic Jacobians `(A, B)` of [`step_dynamics`] with respect to state and input.
pub fn dynamics_jacobians(
    x: &AircraftState,
    u: &ControlInput,
    dt: f64,
    length: f64,
) -> Result<(Matrix4<f64>, Matrix4x2<f64>)> {
    check_step_args(x, u, dt, length)?;
    let (sin, cos) = x.theta.sin_cos();
    let tan = u.phi.tan();
    let sec2 = 1.0 + tan * tan;

    let mut a = Matrix4::identity();
    a[(0, 2)] = -x.v * sin * dt;
    a[(0, 3)] = cos * dt;
    a[(1, 2)] = x.v * cos * dt;
    a[(1, 3)] = sin * dt;
    a[(2, 3)] = tan / length * dt;

    let mut b = Matrix4x2::zeros();
    b[(2, 0)] = x.v / length * sec2 * dt;
    b[(3, 1)] = dt;
    Ok((a, b))
}

/// Saturates each input component to its symmetric bound.
pub fn clamp_input(u: &ControlInput, bounds: &InputBounds) -> ControlInput {
    ControlInput {
        phi: u.phi.clamp(-bounds.phi_max, bounds.phi_max),
        beta: u.beta.clamp(-bounds.beta_max, bounds.beta_max),
    }
}

/// Positions of `o` at steps `1..=steps` under constant-velocity motion.
pub fn propagate_obstacle(o: &Obstacle, steps: usize, dt: f64) -> Vec<Point> {
    (1..=steps).map(|k| o.position_after(k as f64 * dt)).collect()
}

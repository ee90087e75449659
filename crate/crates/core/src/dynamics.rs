//! Single-track vehicle model: drivetrain, Pacejka lateral tire forces,
//! explicit-Euler state propagation and the velocity-block Jacobian used by
//! the embedded Kalman filter.
//!
//! Everything here is a pure function of its arguments.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Slip angles divide by `vx`; samples at or below this speed are rejected.
pub const V_EPS: f64 = 0.05;

/// Kinematic-dynamic state at one timestep.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct VehicleState {
    pub x: f64,
    pub y: f64,
    pub theta: f64,
    pub vx: f64,
    pub vy: f64,
    pub omega: f64,
    pub throttle: f64,
    pub steer: f64,
}

impl VehicleState {
    pub fn is_finite(&self) -> bool {
        [
            self.x,
            self.y,
            self.theta,
            self.vx,
            self.vy,
            self.omega,
            self.throttle,
            self.steer,
        ]
        .iter()
        .all(|v| v.is_finite())
    }

    pub fn velocities(&self) -> [f64; 3] {
        [self.vx, self.vy, self.omega]
    }
}

/// Per-step actuation deltas.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct ControlInput {
    pub d_throttle: f64,
    pub d_steer: f64,
}

/// Coefficients that are measured directly: mass and axle distances.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KnownCoefficients {
    pub mass: f64,
    pub lf: f64,
    pub lr: f64,
}

impl KnownCoefficients {
    /// 1:43 scale racecar geometry.
    pub fn scale_car() -> Self {
        Self {
            mass: 0.041,
            lf: 0.029,
            lr: 0.033,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.mass > 0.0 && self.lf > 0.0 && self.lr > 0.0 {
            Ok(())
        } else {
            Err(Error::InvalidConfig(format!(
                "known coefficients must be strictly positive: {self:?}"
            )))
        }
    }
}

/// Magic-formula coefficients for one axle.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Pacejka {
    pub b: f64,
    pub c: f64,
    pub d: f64,
    pub e: f64,
    pub sh: f64,
    pub sv: f64,
}

impl Pacejka {
    /// Lateral force at slip angle `alpha` (the horizontal shift is applied
    /// by [`slip_angles`], not here).
    pub fn lateral(&self, alpha: f64) -> f64 {
        pacejka_lateral(alpha, self.b, self.c, self.d, self.e, self.sv)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Drivetrain {
    pub cm1: f64,
    pub cm2: f64,
    pub cr0: f64,
    pub cd: f64,
}

/// The coefficients the estimator has to recover.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EstimatedCoefficients {
    pub front: Pacejka,
    pub rear: Pacejka,
    pub drivetrain: Drivetrain,
    pub iz: f64,
}

/// Number of estimated coefficients.
pub const NUM_COEFFS: usize = 17;

/// Flat ordering used by the network head, checkpoints and reports.
pub const COEFF_NAMES: [&str; NUM_COEFFS] = [
    "b_f", "c_f", "d_f", "e_f", "sh_f", "sv_f", "b_r", "c_r", "d_r", "e_r", "sh_r", "sv_r", "cm1",
    "cm2", "cr0", "cd", "iz",
];

/// Entries that are physically non-negative (drivetrain gains, stiffness
/// factors, peak force, inertia).
pub const NONNEGATIVE: [bool; NUM_COEFFS] = [
    true, true, true, false, false, false, true, true, true, false, false, false, true, true, true,
    true, true,
];

pub mod idx {
    pub const B_F: usize = 0;
    pub const C_F: usize = 1;
    pub const D_F: usize = 2;
    pub const E_F: usize = 3;
    pub const SH_F: usize = 4;
    pub const SV_F: usize = 5;
    pub const B_R: usize = 6;
    pub const C_R: usize = 7;
    pub const D_R: usize = 8;
    pub const E_R: usize = 9;
    pub const SH_R: usize = 10;
    pub const SV_R: usize = 11;
    pub const CM1: usize = 12;
    pub const CM2: usize = 13;
    pub const CR0: usize = 14;
    pub const CD: usize = 15;
    pub const IZ: usize = 16;
}

impl EstimatedCoefficients {
    pub fn to_array(&self) -> [f64; NUM_COEFFS] {
        let f = &self.front;
        let r = &self.rear;
        let dt = &self.drivetrain;
        [
            f.b, f.c, f.d, f.e, f.sh, f.sv, r.b, r.c, r.d, r.e, r.sh, r.sv, dt.cm1, dt.cm2, dt.cr0,
            dt.cd, self.iz,
        ]
    }

    pub fn from_slice(v: &[f64]) -> Result<Self> {
        if v.len() != NUM_COEFFS {
            return Err(Error::SchemaMismatch(format!(
                "expected {NUM_COEFFS} coefficients, got {}",
                v.len()
            )));
        }
        let axle = |o: usize| Pacejka {
            b: v[o],
            c: v[o + 1],
            d: v[o + 2],
            e: v[o + 3],
            sh: v[o + 4],
            sv: v[o + 5],
        };
        Ok(Self {
            front: axle(0),
            rear: axle(6),
            drivetrain: Drivetrain {
                cm1: v[idx::CM1],
                cm2: v[idx::CM2],
                cr0: v[idx::CR0],
                cd: v[idx::CD],
            },
            iz: v[idx::IZ],
        })
    }

    /// Ground truth used by the bundled simulation presets. Midpoints of the
    /// simulation ranges, except the stiffness and peak factors which are
    /// chosen so that the 50 Hz explicit-Euler model stays stable for the
    /// scale car while still reaching the nonlinear part of the tire curve.
    /// The rear has slightly less grip so that it, too, leaves the linear
    /// region on the reference track.
    pub fn sim_ground_truth() -> Self {
        let bounds = CoefficientBounds::sim();
        let mut v = bounds.midpoint().to_array();
        for (b, d, peak) in [(idx::B_F, idx::D_F, 0.15), (idx::B_R, idx::D_R, 0.13)] {
            v[b] = 6.0;
            v[d] = peak;
        }
        Self::from_slice(&v).expect("fixed length")
    }
}

/// Closed interval per estimated coefficient.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CoefficientBounds {
    pub lower: EstimatedCoefficients,
    pub upper: EstimatedCoefficients,
}

impl CoefficientBounds {
    pub fn from_arrays(lower: &[f64], upper: &[f64]) -> Result<Self> {
        let b = Self {
            lower: EstimatedCoefficients::from_slice(lower)?,
            upper: EstimatedCoefficients::from_slice(upper)?,
        };
        b.validate()?;
        Ok(b)
    }

    /// Ranges used for the simulated scale car.
    pub fn sim() -> Self {
        #[rustfmt::skip]
        let lower = [
            5.0, 0.5, 0.1, -2.0, -0.02, -0.003,
            5.0, 0.5, 0.1, -2.0, -0.02, -0.003,
            0.1435, 0.0273, 0.0259, 1.75e-4, 1.39e-5,
        ];
        #[rustfmt::skip]
        let upper = [
            30.0, 2.0, 1.9, 0.0, 0.02, 0.003,
            30.0, 2.0, 1.9, 0.0, 0.02, 0.003,
            0.574, 0.109, 0.1036, 0.1036, 5.56e-5,
        ];
        Self::from_arrays(&lower, &upper).expect("valid preset")
    }

    /// Adjusted ranges reported for the full-scale racecar data set.
    pub fn real_adjusted() -> Self {
        #[rustfmt::skip]
        let lower = [
            1.0, 0.1, 10.0, -2.0, -0.02, -2.0e3,
            1.0, 0.1, 10.0, -2.0, -0.02, -2.0e3,
            100.0, 0.0, 0.1, 0.1, 5.0e3,
        ];
        #[rustfmt::skip]
        let upper = [
            20.0, 1.5, 8.0e3, 5.0, 0.2, 300.0,
            20.0, 1.5, 8.0e3, 10.0, 0.2, 300.0,
            1.0e4, 5.0, 1.4, 1.4, 2.0e4,
        ];
        Self::from_arrays(&lower, &upper).expect("valid preset")
    }

    pub fn validate(&self) -> Result<()> {
        let lo = self.lower.to_array();
        let hi = self.upper.to_array();
        for i in 0..NUM_COEFFS {
            if !(lo[i].is_finite() && hi[i].is_finite() && lo[i] < hi[i]) {
                return Err(Error::InvalidConfig(format!(
                    "bound for {} must satisfy lower < upper, got [{}, {}]",
                    COEFF_NAMES[i], lo[i], hi[i]
                )));
            }
        }
        Ok(())
    }

    pub fn midpoint(&self) -> EstimatedCoefficients {
        let lo = self.lower.to_array();
        let hi = self.upper.to_array();
        let mid: Vec<f64> = lo.iter().zip(&hi).map(|(l, h)| 0.5 * (l + h)).collect();
        EstimatedCoefficients::from_slice(&mid).expect("fixed length")
    }

    pub fn contains(&self, c: &EstimatedCoefficients) -> bool {
        let lo = self.lower.to_array();
        let hi = self.upper.to_array();
        c.to_array()
            .iter()
            .enumerate()
            .all(|(i, v)| *v >= lo[i] && *v <= hi[i])
    }

    pub fn widths(&self) -> [f64; NUM_COEFFS] {
        let lo = self.lower.to_array();
        let hi = self.upper.to_array();
        std::array::from_fn(|i| hi[i] - lo[i])
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Acceleration {
    pub ax: f64,
    pub ay: f64,
    pub omega_dot: f64,
}

impl Acceleration {
    pub fn to_array(&self) -> [f64; 3] {
        [self.ax, self.ay, self.omega_dot]
    }
}

/// Rear-wheel longitudinal force.
pub fn drivetrain_force(vx: f64, throttle: f64, dt: &Drivetrain) -> f64 {
    let v2 = vx * vx;
    (dt.cm1 - dt.cm2 * v2) * throttle - dt.cr0 - dt.cd * v2
}

/// Front and rear slip angles including the horizontal shifts.
pub fn slip_angles(
    state: &VehicleState,
    known: &KnownCoefficients,
    sh_f: f64,
    sh_r: f64,
) -> Result<(f64, f64)> {
    if !(state.vx > V_EPS) {
        return Err(Error::DegenerateSpeed { vx: state.vx });
    }
    let alpha_f = state.steer - ((state.omega * known.lf + state.vy) / state.vx).atan() + sh_f;
    let alpha_r = ((state.omega * known.lr - state.vy) / state.vx).atan() + sh_r;
    Ok((alpha_f, alpha_r))
}

/// Magic-formula lateral force.
pub fn pacejka_lateral(alpha: f64, b: f64, c: f64, d: f64, e: f64, sv: f64) -> f64 {
    let ba = b * alpha;
    sv + d * (c * (ba - e * (ba - ba.atan())).atan()).sin()
}

/// Body-frame accelerations from the velocity rows of the state equation.
pub fn acceleration(
    state: &VehicleState,
    known: &KnownCoefficients,
    coeffs: &EstimatedCoefficients,
) -> Result<Acceleration> {
    let (alpha_f, alpha_r) = slip_angles(state, known, coeffs.front.sh, coeffs.rear.sh)?;
    let f_rx = drivetrain_force(state.vx, state.throttle, &coeffs.drivetrain);
    let f_fy = coeffs.front.lateral(alpha_f);
    let f_ry = coeffs.rear.lateral(alpha_r);
    let (sin_d, cos_d) = state.steer.sin_cos();
    let m = known.mass;
    Ok(Acceleration {
        ax: (f_rx - f_fy * sin_d + m * state.vy * state.omega) / m,
        ay: (f_ry + f_fy * cos_d - m * state.vx * state.omega) / m,
        omega_dot: (f_fy * known.lf * cos_d - f_ry * known.lr) / coeffs.iz,
    })
}

/// One explicit-Euler step of the full eight-row state equation.
pub fn step(
    state: &VehicleState,
    input: &ControlInput,
    dt: f64,
    known: &KnownCoefficients,
    coeffs: &EstimatedCoefficients,
) -> Result<VehicleState> {
    let acc = acceleration(state, known, coeffs)?;
    Ok(integrate(state, input, &acc, dt))
}

/// Applies the state equation for a given acceleration.
pub(crate) fn integrate(
    s: &VehicleState,
    input: &ControlInput,
    acc: &Acceleration,
    dt: f64,
) -> VehicleState {
    let (sin_t, cos_t) = s.theta.sin_cos();
    VehicleState {
        x: s.x + (s.vx * cos_t - s.vy * sin_t) * dt,
        y: s.y + (s.vx * sin_t + s.vy * cos_t) * dt,
        theta: s.theta + s.omega * dt,
        vx: s.vx + acc.ax * dt,
        vy: s.vy + acc.ay * dt,
        omega: s.omega + acc.omega_dot * dt,
        throttle: s.throttle + input.d_throttle,
        steer: s.steer + input.d_steer,
    }
}

/// Jacobian of the velocity transition used by the Kalman filter.
pub fn state_jacobian(omega: f64, dt: f64) -> [[f64; 3]; 3] {
    let k = dt * omega;
    [[1.0, k, 0.0], [-k, 1.0, 0.0], [0.0, 0.0, 1.0]]
}

//! Deterministic single-track data generator.
//!
//! A pure-pursuit driver follows a closed waypoint loop while the target
//! speed is modulated sinusoidally, which pushes the tires into the
//! nonlinear part of their force curve. Every recorded transition is exactly
//! one [`dynamics::step`] with the configured ground truth.

use std::f64::consts::PI;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::dynamics::{
    self, ControlInput, EstimatedCoefficients, KnownCoefficients, VehicleState, V_EPS,
};
use crate::error::{Error, Result};
use crate::rng::{streams, substream};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SpeedProfile {
    pub base: f64,
    pub amplitude: f64,
    pub period: f64,
}

impl SpeedProfile {
    pub fn at(&self, t: f64) -> f64 {
        if self.amplitude == 0.0 || self.period <= 0.0 {
            return self.base;
        }
        self.base + self.amplitude * (2.0 * PI * t / self.period).sin()
    }
}

/// Closed reference loop plus the speed schedule along it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrackSpec {
    /// Ordered waypoints; the last one repeats the first.
    pub waypoints: Vec<[f64; 2]>,
    pub lookahead: f64,
    pub speed: SpeedProfile,
}

impl Default for TrackSpec {
    /// Tight loop driven fast enough that both axles see large slip angles.
    fn default() -> Self {
        Self {
            speed: SpeedProfile { base: 1.4, amplitude: 0.1, period: 6.0 },
            ..Self::oval(0.6, 0.3, 12)
        }
    }
}

impl TrackSpec {
    /// Polygonal ellipse with `n` distinct waypoints, traversed counter-clockwise.
    pub fn oval(half_length: f64, half_width: f64, n: usize) -> Self {
        let mut waypoints: Vec<[f64; 2]> = (0..n)
            .map(|i| {
                let phi = 2.0 * PI * i as f64 / n as f64;
                [half_length * phi.cos(), half_width * phi.sin()]
            })
            .collect();
        waypoints.push(waypoints[0]);
        Self {
            waypoints,
            lookahead: 0.3,
            speed: SpeedProfile { base: 1.2, amplitude: 0.4, period: 6.0 },
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.waypoints.len() < 3 {
            return Err(Error::InvalidConfig("track needs at least 3 waypoints".into()));
        }
        let first = self.waypoints[0];
        let last = self.waypoints[self.waypoints.len() - 1];
        if (first[0] - last[0]).hypot(first[1] - last[1]) > 1e-9 {
            return Err(Error::InvalidConfig("track must be a closed loop".into()));
        }
        if !(self.lookahead > 0.0) {
            return Err(Error::InvalidConfig("lookahead must be positive".into()));
        }
        Ok(())
    }

    fn segments(&self) -> impl Iterator<Item = ([f64; 2], [f64; 2])> + '_ {
        self.waypoints.windows(2).map(|w| (w[0], w[1]))
    }

    /// Point `distance` metres ahead of the closest projection of `p`.
    pub fn lookahead_point(&self, p: [f64; 2], distance: f64) -> [f64; 2] {
        let mut best = (f64::INFINITY, 0usize, 0.0);
        for (i, (a, b)) in self.segments().enumerate() {
            let (dx, dy) = (b[0] - a[0], b[1] - a[1]);
            let len2 = dx * dx + dy * dy;
            let u = if len2 > 0.0 {
                (((p[0] - a[0]) * dx + (p[1] - a[1]) * dy) / len2).clamp(0.0, 1.0)
            } else {
                0.0
            };
            let q = [a[0] + u * dx, a[1] + u * dy];
            let d2 = (p[0] - q[0]).powi(2) + (p[1] - q[1]).powi(2);
            if d2 < best.0 {
                best = (d2, i, u);
            }
        }
        let segs: Vec<_> = self.segments().collect();
        let seg_len = |s: &([f64; 2], [f64; 2])| (s.1[0] - s.0[0]).hypot(s.1[1] - s.0[1]);
        let perimeter: f64 = segs.iter().map(seg_len).sum();
        let (_, mut i, u) = best;
        if perimeter == 0.0 {
            return segs[i].0;
        }
        let mut remaining = (distance + u * seg_len(&segs[i])) % perimeter;
        while remaining > seg_len(&segs[i]) {
            remaining -= seg_len(&segs[i]);
            i = (i + 1) % segs.len();
        }
        let len = seg_len(&segs[i]);
        let t = if len > 0.0 { remaining / len } else { 0.0 };
        let (a, b) = segs[i];
        [a[0] + t * (b[0] - a[0]), a[1] + t * (b[1] - a[1])]
    }
}

/// Geometric steering plus proportional speed tracking, both rate-limited.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PurePursuit {
    pub wheelbase: f64,
    pub max_steer: f64,
    pub max_d_steer: f64,
    pub max_d_throttle: f64,
    pub speed_gain: f64,
}

impl PurePursuit {
    pub fn for_car(known: &KnownCoefficients) -> Self {
        Self {
            wheelbase: known.lf + known.lr,
            max_steer: 0.4,
            max_d_steer: 0.05,
            max_d_throttle: 0.05,
            speed_gain: 0.2,
        }
    }

    /// Control deltas steering towards the lookahead point at the target speed.
    /// `steer_offset` is added to the geometric steering target.
    pub fn control(
        &self,
        state: &VehicleState,
        track: &TrackSpec,
        target_speed: f64,
        steer_offset: f64,
    ) -> ControlInput {
        let target = track.lookahead_point([state.x, state.y], track.lookahead);
        let (dx, dy) = (target[0] - state.x, target[1] - state.y);
        let heading_err = wrap_angle(dy.atan2(dx) - state.theta);
        let ld = dx.hypot(dy).max(1e-6);
        let steer_target = ((2.0 * self.wheelbase * heading_err.sin()).atan2(ld) + steer_offset)
            .clamp(-self.max_steer, self.max_steer);
        let d_steer = (steer_target - state.steer).clamp(-self.max_d_steer, self.max_d_steer);

        let d_throttle = (self.speed_gain * (target_speed - state.vx))
            .clamp(-self.max_d_throttle, self.max_d_throttle);
        let d_throttle = (state.throttle + d_throttle).clamp(0.0, 1.0) - state.throttle;
        ControlInput { d_throttle, d_steer }
    }
}

fn wrap_angle(a: f64) -> f64 {
    let mut a = (a + PI) % (2.0 * PI);
    if a < 0.0 {
        a += 2.0 * PI;
    }
    a - PI
}

/// Everything needed to reproduce one simulated data set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimRun {
    pub ground_truth: EstimatedCoefficients,
    pub known: KnownCoefficients,
    pub sample_rate_hz: f64,
    pub count: usize,
    pub seed: u64,
    /// Straight-line steps of fixed throttle increase before pure pursuit engages.
    pub bootstrap_steps: usize,
    pub bootstrap_d_throttle: f64,
    /// Amplitude (rad) of a seeded sinusoidal steering perturbation.
    pub steer_dither: f64,
}

impl Default for SimRun {
    fn default() -> Self {
        Self {
            ground_truth: EstimatedCoefficients::sim_ground_truth(),
            known: KnownCoefficients::scale_car(),
            sample_rate_hz: 50.0,
            count: 1000,
            seed: 0,
            bootstrap_steps: 25,
            bootstrap_d_throttle: 0.04,
            steer_dither: 0.2,
        }
    }
}

impl SimRun {
    pub fn dt(&self) -> f64 {
        1.0 / self.sample_rate_hz
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.sample_rate_hz > 0.0) {
            return Err(Error::InvalidConfig("sample rate must be positive".into()));
        }
        if self.count < 2 {
            return Err(Error::InvalidConfig("sample count must be at least 2".into()));
        }
        self.known.validate()
    }
}

/// One recorded step: the state at `time` and the input applied from it.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SimSample {
    pub time: f64,
    pub state: VehicleState,
    pub input: ControlInput,
}

/// Rolls the model forward from a standing start. Recording (and the clock)
/// starts once the bootstrap phase is over.
pub fn generate_dataset(
    run: &SimRun,
    track: &TrackSpec,
    controller: &PurePursuit,
) -> Result<Vec<SimSample>> {
    run.validate()?;
    track.validate()?;
    let dt = run.dt();
    let gt = &run.ground_truth;
    let known = &run.known;

    let mut rng = substream(run.seed, streams::SIM);
    let dither_phase = rng.random_range(0.0..2.0 * PI);
    let dither_period = rng.random_range(1.0..2.0);

    let [x0, y0] = track.waypoints[0];
    let [x1, y1] = track.waypoints[1];
    let mut state = VehicleState {
        x: x0,
        y: y0,
        theta: (y1 - y0).atan2(x1 - x0),
        ..Default::default()
    };

    for k in 0..run.bootstrap_steps {
        let d_throttle = (state.throttle + run.bootstrap_d_throttle).clamp(0.0, 1.0) - state.throttle;
        let input = ControlInput { d_throttle, d_steer: 0.0 };
        state = if state.vx > V_EPS {
            dynamics::step(&state, &input, dt, known, gt)?
        } else {
            // Below the slip guard only the longitudinal law applies and the
            // car cannot roll backwards.
            let f_rx = dynamics::drivetrain_force(state.vx, state.throttle, &gt.drivetrain);
            let vx = (state.vx + f_rx / known.mass * dt).max(0.0);
            VehicleState {
                x: state.x + state.vx * state.theta.cos() * dt,
                y: state.y + state.vx * state.theta.sin() * dt,
                vx,
                throttle: state.throttle + input.d_throttle,
                ..state
            }
        };
        if !state.is_finite() {
            return Err(Error::SimDiverged { step: k });
        }
    }
    if !(state.vx > V_EPS) {
        return Err(Error::InvalidConfig(format!(
            "bootstrap ended at vx={} m/s, below the slip guard",
            state.vx
        )));
    }

    let mut out = Vec::with_capacity(run.count);
    for k in 0..run.count {
        let time = k as f64 / run.sample_rate_hz;
        let offset = run.steer_dither * (2.0 * PI * time / dither_period + dither_phase).sin();
        let input = controller.control(&state, track, track.speed.at(time), offset);
        out.push(SimSample { time, state, input });
        if k + 1 == run.count {
            break;
        }
        state = dynamics::step(&state, &input, dt, known, gt).map_err(|e| match e {
            Error::DegenerateSpeed { .. } => Error::SimDiverged { step: k + 1 },
            other => other,
        })?;
        if !state.is_finite() {
            return Err(Error::SimDiverged { step: k + 1 });
        }
    }
    Ok(out)
}

/// Adds zero-mean Gaussian noise to the velocity channels (vx, vy, omega).
pub fn inject_noise(samples: &[SimSample], sigma: [f64; 3], seed: u64) -> Result<Vec<SimSample>> {
    let mut dists = Vec::with_capacity(3);
    for s in sigma {
        if !(s >= 0.0) || !s.is_finite() {
            return Err(Error::InvalidConfig(format!("noise sigma must be >= 0, got {s}")));
        }
        dists.push(if s > 0.0 { Some(Normal::new(0.0, s).expect("finite sigma")) } else { None });
    }
    let mut rng = substream(seed, streams::NOISE);
    Ok(samples
        .iter()
        .map(|s| {
            let mut n = *s;
            for (ch, dist) in dists.iter().enumerate() {
                if let Some(d) = dist {
                    let e = d.sample(&mut rng);
                    match ch {
                        0 => n.state.vx += e,
                        1 => n.state.vy += e,
                        _ => n.state.omega += e,
                    }
                }
            }
            n
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn square_track() -> TrackSpec {
        TrackSpec {
            waypoints: vec![[0.0, 0.0], [4.0, 0.0], [4.0, 4.0], [0.0, 4.0], [0.0, 0.0]],
            lookahead: 0.3,
            speed: SpeedProfile { base: 1.0, amplitude: 0.0, period: 1.0 },
        }
    }

    fn default_data() -> Vec<SimSample> {
        let run = SimRun::default();
        let track = TrackSpec::default();
        generate_dataset(&run, &track, &PurePursuit::for_car(&run.known)).unwrap()
    }

    #[test]
    fn track_validation() {
        let mut t = square_track();
        t.validate().unwrap();
        t.waypoints.pop();
        assert!(t.validate().is_err());
        t.waypoints = vec![[0.0, 0.0], [0.0, 0.0]];
        assert!(t.validate().is_err());
        let oval = TrackSpec::oval(1.5, 0.75, 12);
        assert_eq!(oval.waypoints.len(), 13);
        oval.validate().unwrap();
    }

    #[test]
    fn lookahead_walks_along_the_loop() {
        let t = square_track();
        let p = t.lookahead_point([1.0, 0.1], 0.5);
        assert!((p[0] - 1.5).abs() < 1e-12 && p[1].abs() < 1e-12);
        // Wraps around a corner.
        let p = t.lookahead_point([3.9, 0.0], 0.3);
        assert!((p[0] - 4.0).abs() < 1e-12 && (p[1] - 0.2).abs() < 1e-12);
        // Wraps past the closing waypoint.
        let p = t.lookahead_point([0.0, 0.1], 0.3);
        assert!((p[0] - 0.2).abs() < 1e-12 && p[1].abs() < 1e-12);
        let p = t.lookahead_point([0.0, 3.9], 0.3);
        assert!(p[0].abs() < 1e-12 && (p[1] - 3.6).abs() < 1e-12);
    }

    #[test]
    fn on_line_at_speed_gives_no_correction() {
        let t = square_track();
        let pp = PurePursuit::for_car(&KnownCoefficients::scale_car());
        let s = VehicleState { x: 1.0, vx: 1.0, throttle: 0.5, ..Default::default() };
        let u = pp.control(&s, &t, 1.0, 0.0);
        assert!(u.d_steer.abs() < 1e-12);
        assert!(u.d_throttle.abs() < 1e-12);
    }

    #[test]
    fn target_to_the_left_saturates_steering() {
        let t = square_track();
        let pp = PurePursuit::for_car(&KnownCoefficients::scale_car());
        // Heading -y while the track runs +x: lookahead point is 90° left.
        let s = VehicleState { x: 1.0, theta: -PI / 2.0, vx: 1.0, ..Default::default() };
        let u = pp.control(&s, &t, 1.0, 0.0);
        assert_eq!(u.d_steer, pp.max_d_steer);
    }

    #[test]
    fn controls_respect_limits() {
        let t = TrackSpec::oval(1.5, 0.75, 12);
        let pp = PurePursuit::for_car(&KnownCoefficients::scale_car());
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..10_000 {
            let s = VehicleState {
                x: rng.random_range(-3.0..3.0),
                y: rng.random_range(-3.0..3.0),
                theta: rng.random_range(-10.0..10.0),
                vx: rng.random_range(-1.0..5.0),
                vy: rng.random_range(-1.0..1.0),
                omega: rng.random_range(-5.0..5.0),
                throttle: rng.random_range(0.0..1.0),
                steer: rng.random_range(-0.4..0.4),
            };
            let u = pp.control(&s, &t, rng.random_range(0.0..3.0), rng.random_range(-0.2..0.2));
            assert!(u.d_steer.abs() <= pp.max_d_steer);
            assert!(u.d_throttle.abs() <= pp.max_d_throttle + 1e-15);
            let th = s.throttle + u.d_throttle;
            assert!((0.0..=1.0).contains(&th));
        }
    }

    #[test]
    fn dataset_timestamps_and_speed_guard() {
        let data = default_data();
        assert_eq!(data.len(), 1000);
        for (k, s) in data.iter().enumerate() {
            assert_eq!(s.time, k as f64 / 50.0);
            assert!(s.state.vx > V_EPS);
            assert!((0.0..=1.0).contains(&s.state.throttle));
        }
        assert!((data[999].time - 19.98).abs() < 1e-12);
    }

    #[test]
    fn dataset_is_deterministic() {
        let a = default_data();
        let b = default_data();
        assert_eq!(a, b);
        let mut run = SimRun::default();
        run.seed = 1;
        let track = TrackSpec::default();
        let c = generate_dataset(&run, &track, &PurePursuit::for_car(&run.known)).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn transitions_are_exact_model_steps() {
        let run = SimRun::default();
        let data = default_data();
        for w in data.windows(2) {
            let next =
                dynamics::step(&w[0].state, &w[0].input, run.dt(), &run.known, &run.ground_truth)
                    .unwrap();
            assert_eq!(next, w[1].state);
        }
    }

    #[test]
    fn excites_nonlinear_slip() {
        let run = SimRun::default();
        let data = default_data();
        let gt = run.ground_truth;
        let max_alpha = data
            .iter()
            .map(|s| {
                let (af, ar) =
                    dynamics::slip_angles(&s.state, &run.known, gt.front.sh, gt.rear.sh).unwrap();
                af.abs().max(ar.abs())
            })
            .fold(0.0, f64::max);
        assert!(max_alpha > 0.3, "max slip {max_alpha}");
    }

    #[test]
    fn zero_noise_is_identity() {
        let data = default_data();
        assert_eq!(inject_noise(&data, [0.0; 3], 3).unwrap(), data);
        assert!(inject_noise(&data, [-1.0, 0.0, 0.0], 3).is_err());
    }

    #[test]
    fn noise_statistics_match_sigma() {
        let run = SimRun { count: 10_000, ..SimRun::default() };
        let track = TrackSpec::oval(1.5, 0.75, 12);
        let clean = generate_dataset(&run, &track, &PurePursuit::for_car(&run.known)).unwrap();
        let sigma = [0.1, 0.05, 0.02];
        let noisy = inject_noise(&clean, sigma, 42).unwrap();
        assert_eq!(noisy, inject_noise(&clean, sigma, 42).unwrap());
        for (ch, s) in sigma.iter().enumerate() {
            let d: Vec<f64> = clean
                .iter()
                .zip(&noisy)
                .map(|(c, n)| n.state.velocities()[ch] - c.state.velocities()[ch])
                .collect();
            let mean = d.iter().sum::<f64>() / d.len() as f64;
            let std = (d.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / d.len() as f64).sqrt();
            assert!((std - s).abs() < 0.05 * s, "channel {ch}: std {std}");
        }
        for (c, n) in clean.iter().zip(&noisy) {
            assert_eq!(c.time, n.time);
            assert_eq!(c.input, n.input);
            assert_eq!((c.state.throttle, c.state.steer, c.state.x), (n.state.throttle, n.state.steer, n.state.x));
        }
    }
}

//! Dataset ingestion, windowing into N-step histories and train/validation
//! splitting.
//!
//! CSV schema (header, exact order):
//! `time,vx,vy,omega,throttle,steer,d_throttle,d_steer[,x,y,theta]`.

use std::fs::File;
use std::io::{Read, Write};
use std::path::Path;

use rand::seq::index;
use serde::{Deserialize, Serialize};

use crate::dynamics::{ControlInput, VehicleState, V_EPS};
use crate::error::{Error, Result};
use crate::rng::{streams, substream};
use crate::simulator::SimSample;

pub const CORE_COLUMNS: [&str; 8] =
    ["time", "vx", "vy", "omega", "throttle", "steer", "d_throttle", "d_steer"];
pub const POSE_COLUMNS: [&str; 3] = ["x", "y", "theta"];

/// Feature row fed to the estimator for every history step.
pub const NUM_FEATURES: usize = 7;

/// Windows are cut where consecutive timestamps differ by more than this
/// multiple of the nominal step.
pub const GAP_FACTOR: f64 = 1.5;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Pose {
    pub x: f64,
    pub y: f64,
    pub theta: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RawSample {
    pub time: f64,
    pub vx: f64,
    pub vy: f64,
    pub omega: f64,
    pub throttle: f64,
    pub steer: f64,
    pub d_throttle: f64,
    pub d_steer: f64,
    pub pose: Option<Pose>,
}

impl RawSample {
    pub fn features(&self) -> [f64; NUM_FEATURES] {
        [
            self.vx,
            self.vy,
            self.omega,
            self.throttle,
            self.steer,
            self.d_throttle,
            self.d_steer,
        ]
    }

    pub fn velocities(&self) -> [f64; 3] {
        [self.vx, self.vy, self.omega]
    }

    pub fn set_velocities(&mut self, v: [f64; 3]) {
        self.vx = v[0];
        self.vy = v[1];
        self.omega = v[2];
    }

    pub fn state(&self) -> VehicleState {
        let pose = self.pose.unwrap_or(Pose { x: 0.0, y: 0.0, theta: 0.0 });
        VehicleState {
            x: pose.x,
            y: pose.y,
            theta: pose.theta,
            vx: self.vx,
            vy: self.vy,
            omega: self.omega,
            throttle: self.throttle,
            steer: self.steer,
        }
    }

    pub fn input(&self) -> ControlInput {
        ControlInput { d_throttle: self.d_throttle, d_steer: self.d_steer }
    }

    fn values(&self) -> impl Iterator<Item = f64> {
        let pose = self.pose.map(|p| [p.x, p.y, p.theta]);
        [
            self.time,
            self.vx,
            self.vy,
            self.omega,
            self.throttle,
            self.steer,
            self.d_throttle,
            self.d_steer,
        ]
        .into_iter()
        .chain(pose.into_iter().flatten())
    }
}

impl From<&SimSample> for RawSample {
    fn from(s: &SimSample) -> Self {
        Self {
            time: s.time,
            vx: s.state.vx,
            vy: s.state.vy,
            omega: s.state.omega,
            throttle: s.state.throttle,
            steer: s.state.steer,
            d_throttle: s.input.d_throttle,
            d_steer: s.input.d_steer,
            pose: Some(Pose { x: s.state.x, y: s.state.y, theta: s.state.theta }),
        }
    }
}

/// Samples read from a file together with how many rows were rejected.
#[derive(Debug, Clone, PartialEq)]
pub struct LoadedDataset {
    pub samples: Vec<RawSample>,
    pub dropped_low_speed: usize,
}

pub fn load_csv(path: impl AsRef<Path>) -> Result<LoadedDataset> {
    let path = path.as_ref();
    if !path.exists() {
        return Err(Error::MissingArtifact(path.to_path_buf()));
    }
    read_csv(File::open(path)?)
}

pub fn read_csv<R: Read>(reader: R) -> Result<LoadedDataset> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(reader);
    let headers = rdr.headers()?.clone();
    let names: Vec<&str> = headers.iter().map(str::trim).collect();
    for (i, col) in CORE_COLUMNS.iter().enumerate() {
        if names.get(i) != Some(col) {
            return Err(Error::Schema(format!(
                "expected column {i} to be '{col}', found {:?}",
                names.get(i)
            )));
        }
    }
    let has_pose = match names.len() {
        8 => false,
        11 if names[8..] == POSE_COLUMNS => true,
        _ => {
            return Err(Error::Schema(format!(
                "unexpected trailing columns {:?}",
                &names[8.min(names.len())..]
            )))
        }
    };

    let mut all = Vec::new();
    for (row, rec) in rdr.records().enumerate() {
        let rec = rec?;
        if rec.len() != names.len() {
            return Err(Error::Schema(format!("row {row} has {} fields", rec.len())));
        }
        let mut v = [0.0; 11];
        for (j, field) in rec.iter().enumerate() {
            let x: f64 = field.trim().parse().map_err(|_| {
                Error::Schema(format!("row {row}, column '{}': not a number: {field}", names[j]))
            })?;
            if !x.is_finite() {
                return Err(Error::Schema(format!("row {row}, column '{}': non-finite", names[j])));
            }
            v[j] = x;
        }
        all.push(RawSample {
            time: v[0],
            vx: v[1],
            vy: v[2],
            omega: v[3],
            throttle: v[4],
            steer: v[5],
            d_throttle: v[6],
            d_steer: v[7],
            pose: has_pose.then(|| Pose { x: v[8], y: v[9], theta: v[10] }),
        });
    }
    for (row, w) in all.windows(2).enumerate() {
        if !(w[1].time > w[0].time) {
            return Err(Error::Monotonicity { row: row + 1 });
        }
    }
    let before = all.len();
    let samples: Vec<RawSample> = all.into_iter().filter(|s| s.vx > V_EPS).collect();
    let dropped_low_speed = before - samples.len();
    if dropped_low_speed > 0 {
        log::info!("dropped {dropped_low_speed} rows with vx <= {V_EPS} m/s");
    }
    Ok(LoadedDataset { samples, dropped_low_speed })
}

pub fn save_csv(path: impl AsRef<Path>, samples: &[RawSample]) -> Result<()> {
    let mut f = File::create(path)?;
    write_csv(&mut f, samples)?;
    f.flush()?;
    Ok(())
}

/// Writes samples with shortest round-trip float formatting. Pose columns are
/// written only if every sample carries a pose.
pub fn write_csv<W: Write>(writer: W, samples: &[RawSample]) -> Result<()> {
    let with_pose = !samples.is_empty() && samples.iter().all(|s| s.pose.is_some());
    let mut w = csv::Writer::from_writer(writer);
    let mut header: Vec<&str> = CORE_COLUMNS.to_vec();
    if with_pose {
        header.extend(POSE_COLUMNS);
    }
    w.write_record(&header)?;
    for s in samples {
        let mut s = *s;
        if !with_pose {
            s.pose = None;
        }
        w.write_record(s.values().map(|v| v.to_string()))?;
    }
    w.flush()?;
    Ok(())
}

/// N consecutive feature rows and the next-step velocity label.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WindowedSample {
    pub history: Vec<[f64; NUM_FEATURES]>,
    pub label: [f64; 3],
    pub t_now: f64,
    pub t_next: f64,
    /// Index of the label row in the source sample sequence.
    pub label_index: usize,
    /// Contiguous run the window was cut from.
    pub segment: usize,
}

impl WindowedSample {
    pub fn last_row(&self) -> &[f64; NUM_FEATURES] {
        self.history.last().expect("history is never empty")
    }

    pub fn dt(&self) -> f64 {
        self.t_next - self.t_now
    }

    /// True when `next` directly follows `self` in the same trajectory.
    pub fn is_followed_by(&self, next: &WindowedSample) -> bool {
        self.segment == next.segment && next.label_index == self.label_index + 1
    }
}

/// Median sampling interval.
pub fn nominal_dt(samples: &[RawSample]) -> Option<f64> {
    let mut d: Vec<f64> = samples.windows(2).map(|w| w[1].time - w[0].time).collect();
    if d.is_empty() {
        return None;
    }
    d.sort_by(f64::total_cmp);
    let n = d.len();
    Some(if n % 2 == 1 { d[n / 2] } else { 0.5 * (d[n / 2 - 1] + d[n / 2]) })
}

/// Cuts every window of `n` history rows plus one label row that does not
/// cross a time gap.
pub fn window(samples: &[RawSample], n: usize) -> Result<Vec<WindowedSample>> {
    if n == 0 {
        return Err(Error::InvalidConfig("history length must be at least 1".into()));
    }
    if samples.len() < n + 1 {
        return Err(Error::InsufficientData { needed: n + 1, got: samples.len() });
    }
    let nominal = nominal_dt(samples).expect("at least two samples");
    let mut out = Vec::with_capacity(samples.len() - n);
    let mut segment = 0;
    let mut seg_start = 0;
    for i in 0..samples.len() {
        if i > 0 && samples[i].time - samples[i - 1].time > GAP_FACTOR * nominal {
            segment += 1;
            seg_start = i;
        }
        // `i` is the label row; its history must lie in the same segment.
        if i >= seg_start + n {
            out.push(WindowedSample {
                history: samples[i - n..i].iter().map(RawSample::features).collect(),
                label: samples[i].velocities(),
                t_now: samples[i - 1].time,
                t_next: samples[i].time,
                label_index: i,
                segment,
            });
        }
    }
    if out.is_empty() {
        return Err(Error::InsufficientData { needed: n + 1, got: 0 });
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub ratio: f64,
    pub seed: u64,
}

impl SplitSpec {
    pub fn validate(&self) -> Result<()> {
        if self.ratio > 0.0 && self.ratio <= 1.0 {
            Ok(())
        } else {
            Err(Error::InvalidConfig(format!("train ratio must be in (0, 1], got {}", self.ratio)))
        }
    }

    pub fn train_size(&self, len: usize) -> usize {
        let raw = self.ratio * len as f64;
        // Guard against representation error pushing an exact product up.
        ((raw - 1e-9 * raw.max(1.0)).ceil() as usize).clamp(1.min(len), len)
    }
}

/// Uniform subset of the windows for training; validation is always the full set.
pub fn split(
    windows: &[WindowedSample],
    spec: &SplitSpec,
) -> Result<(Vec<WindowedSample>, Vec<WindowedSample>)> {
    spec.validate()?;
    let k = spec.train_size(windows.len());
    let mut rng = substream(spec.seed, streams::SPLIT);
    let mut picked = index::sample(&mut rng, windows.len(), k).into_vec();
    picked.sort_unstable();
    let train = picked.into_iter().map(|i| windows[i].clone()).collect();
    Ok((train, windows.to_vec()))
}

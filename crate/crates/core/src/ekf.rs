//! Embedded extended Kalman filter: the network head additionally emits
//! diagonal process (Q) and measurement (R) covariances, and each
//! measurement is split into the filtered state and a noise estimate.
//!
//! The update uses H = I and the single-track velocity Jacobian for F.
//! During training the whole recursion is recorded on the tape, so the
//! covariance outputs receive gradients through the Kalman gain.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use ndarray::Array2;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{window, RawSample, WindowedSample};
use crate::dynamics::{
    state_jacobian, CoefficientBounds, EstimatedCoefficients, COEFF_NAMES, NONNEGATIVE, NUM_COEFFS,
};
use crate::error::{Error, Result};
use crate::net::{Batch, Dual, Estimator, GuardBounds, Tape, Var};
use crate::training::{tape_mse, LossWeights, Objective, TrainOutcome, TrainRunConfig};

pub type Mat3 = [[f64; 3]; 3];

/// Covariance diagonals appended to the head: q_vx, q_vy, q_ω, r_vx, r_vy, r_ω.
pub const NUM_COV: usize = 6;
pub const EKF_OUTPUTS: usize = NUM_COEFFS + NUM_COV;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EkfCovBounds {
    pub lower: [f64; NUM_COV],
    pub upper: [f64; NUM_COV],
}

impl EkfCovBounds {
    /// The published ranges for a full-size sensor suite.
    pub fn published() -> Self {
        Self {
            lower: [0.1, 0.1, 0.1, 0.01, 0.01, 1e-4],
            upper: [1.0, 1.0, 1.0, 1.0, 1.0, 0.01],
        }
    }

    /// Ranges scaled to a measurement noise level σ per channel:
    /// q ∈ [σ²/25, σ²], r ∈ [σ², 4σ²], so the steady-state gain stays
    /// between roughly 0.1 and 0.6 instead of saturating near 1.
    pub fn for_noise(sigma: [f64; 3]) -> Self {
        let v = sigma.map(|s| s * s);
        Self {
            lower: [v[0] / 25.0, v[1] / 25.0, v[2] / 25.0, v[0], v[1], v[2]],
            upper: [v[0], v[1], v[2], 4.0 * v[0], 4.0 * v[1], 4.0 * v[2]],
        }
    }

    pub fn validate(&self) -> Result<()> {
        for i in 0..NUM_COV {
            let (l, u) = (self.lower[i], self.upper[i]);
            if !(l > 0.0 && l < u && u.is_finite()) {
                return Err(Error::InvalidConfig(format!(
                    "covariance bound {i}: need 0 < lower < upper, got [{l}, {u}]"
                )));
            }
        }
        Ok(())
    }

    /// Guard bounds for an EKF head: coefficients first, then covariances.
    pub fn guard_bounds(&self, coefficients: &CoefficientBounds) -> Result<GuardBounds> {
        self.validate()?;
        GuardBounds::from_coefficients(coefficients).extend(&self.lower, &self.upper)
    }
}

/// Filter covariance and the latest filtered velocities.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EkfState {
    pub p: Mat3,
    pub x: [f64; 3],
}

impl EkfState {
    pub fn initial(p0: f64, x: [f64; 3]) -> Self {
        Self { p: diag([p0; 3]), x }
    }

    /// Symmetric within `tol` and no eigenvalue below `-tol`.
    pub fn is_valid(&self, tol: f64) -> bool {
        is_symmetric_psd(&self.p, tol)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EkfUpdate {
    pub x_ekf: [f64; 3],
    pub n_hat: [f64; 3],
    pub p_next: Mat3,
    pub k: Mat3,
}

fn diag(d: [f64; 3]) -> Mat3 {
    let mut m = [[0.0; 3]; 3];
    for i in 0..3 {
        m[i][i] = d[i];
    }
    m
}

fn matmul(a: &Mat3, b: &Mat3) -> Mat3 {
    std::array::from_fn(|i| std::array::from_fn(|j| (0..3).map(|k| a[i][k] * b[k][j]).sum()))
}

fn transpose(a: &Mat3) -> Mat3 {
    std::array::from_fn(|i| std::array::from_fn(|j| a[j][i]))
}

fn matvec(a: &Mat3, x: &[f64; 3]) -> [f64; 3] {
    std::array::from_fn(|i| (0..3).map(|k| a[i][k] * x[k]).sum())
}

/// Inverse through the adjugate; `None` when the determinant vanishes.
fn inverse(m: &Mat3) -> Option<Mat3> {
    let c = |i: usize, j: usize| {
        let (r0, r1) = ((i + 1) % 3, (i + 2) % 3);
        let (c0, c1) = ((j + 1) % 3, (j + 2) % 3);
        m[r0][c0] * m[r1][c1] - m[r0][c1] * m[r1][c0]
    };
    let det = m[0][0] * c(0, 0) + m[0][1] * c(0, 1) + m[0][2] * c(0, 2);
    if det == 0.0 || !det.is_finite() {
        return None;
    }
    Some(std::array::from_fn(|i| std::array::from_fn(|j| c(j, i) / det)))
}

/// Eigenvalues of a symmetric 3×3 matrix (trigonometric method).
fn symmetric_eigenvalues(m: &Mat3) -> [f64; 3] {
    let p1 = m[0][1].powi(2) + m[0][2].powi(2) + m[1][2].powi(2);
    let q = (m[0][0] + m[1][1] + m[2][2]) / 3.0;
    if p1 == 0.0 {
        return [m[0][0], m[1][1], m[2][2]];
    }
    let p2 = (m[0][0] - q).powi(2) + (m[1][1] - q).powi(2) + (m[2][2] - q).powi(2) + 2.0 * p1;
    let p = (p2 / 6.0).sqrt();
    let b: Mat3 = std::array::from_fn(|i| {
        std::array::from_fn(|j| (m[i][j] - if i == j { q } else { 0.0 }) / p)
    });
    let det_b = b[0][0] * (b[1][1] * b[2][2] - b[1][2] * b[2][1])
        - b[0][1] * (b[1][0] * b[2][2] - b[1][2] * b[2][0])
        + b[0][2] * (b[1][0] * b[2][1] - b[1][1] * b[2][0]);
    let phi = (det_b / 2.0).clamp(-1.0, 1.0).acos() / 3.0;
    let e1 = q + 2.0 * p * phi.cos();
    let e3 = q + 2.0 * p * (phi + 2.0 * std::f64::consts::PI / 3.0).cos();
    [e1, 3.0 * q - e1 - e3, e3]
}

pub fn is_symmetric_psd(m: &Mat3, tol: f64) -> bool {
    let sym = (0..3).all(|i| (0..3).all(|j| (m[i][j] - m[j][i]).abs() <= tol));
    let s: Mat3 = std::array::from_fn(|i| std::array::from_fn(|j| 0.5 * (m[i][j] + m[j][i])));
    sym && symmetric_eigenvalues(&s).iter().all(|&e| e >= -tol)
}

/// One filter step against a measurement, with `F = state_jacobian(omega, dt)`.
/// The returned covariance is symmetrised to stop round-off drift.
pub fn ekf_update(
    x_model_pred: [f64; 3],
    measurement: [f64; 3],
    omega: f64,
    dt: f64,
    p: &Mat3,
    q: [f64; 3],
    r: [f64; 3],
) -> Result<EkfUpdate> {
    let f = state_jacobian(omega, dt);
    let fp = matmul(&f, p);
    let mut p_pred = matmul(&fp, &transpose(&f));
    let mut s = p_pred;
    for i in 0..3 {
        p_pred[i][i] += q[i];
        s[i][i] = p_pred[i][i] + r[i];
    }
    let s_inv = inverse(&s).ok_or(Error::SingularInnovation)?;
    let k = matmul(&p_pred, &s_inv);
    let y: [f64; 3] = std::array::from_fn(|i| measurement[i] - x_model_pred[i]);
    let n_hat = matvec(&k, &y);
    let x_ekf = std::array::from_fn(|i| x_model_pred[i] + n_hat[i]);
    let i_k: Mat3 =
        std::array::from_fn(|i| std::array::from_fn(|j| if i == j { 1.0 } else { 0.0 } - k[i][j]));
    let m = matmul(&i_k, &p_pred);
    let p_next = std::array::from_fn(|i| std::array::from_fn(|j| 0.5 * (m[i][j] + m[j][i])));
    Ok(EkfUpdate { x_ekf, n_hat, p_next, k })
}

/// Per-window filter output.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DenoisedRecord {
    pub time: f64,
    pub label_index: usize,
    pub x_model_pred: [f64; 3],
    pub x_ekf: [f64; 3],
    pub n_hat: [f64; 3],
    pub measurement: [f64; 3],
}

fn covariances(phi: &[f64]) -> ([f64; 3], [f64; 3]) {
    let c = &phi[NUM_COEFFS..NUM_COEFFS + NUM_COV];
    ([c[0], c[1], c[2]], [c[3], c[4], c[5]])
}

/// Filters trajectory-ordered windows, carrying P between consecutive
/// windows and resetting it to `p0·I` at every discontinuity.
pub fn ekf_forward(
    est: &Estimator,
    windows: &[WindowedSample],
    p0: f64,
) -> Result<Vec<DenoisedRecord>> {
    if est.config.outputs < EKF_OUTPUTS {
        return Err(Error::SchemaMismatch(format!(
            "EKF filtering needs a head of {EKF_OUTPUTS} outputs, got {}",
            est.config.outputs
        )));
    }
    let preds = est.predict(windows)?;
    let mut out = Vec::with_capacity(windows.len());
    let mut p = diag([p0; 3]);
    for (i, (w, pred)) in windows.iter().zip(&preds).enumerate() {
        if i == 0 || !windows[i - 1].is_followed_by(w) {
            p = diag([p0; 3]);
        }
        let (q, r) = covariances(&pred.phi);
        let u = ekf_update(pred.x_hat_next, w.label, pred.x_hat_next[2], w.dt(), &p, q, r)?;
        p = u.p_next;
        out.push(DenoisedRecord {
            time: w.t_next,
            label_index: w.label_index,
            x_model_pred: pred.x_hat_next,
            x_ekf: u.x_ekf,
            n_hat: u.n_hat,
            measurement: w.label,
        });
    }
    Ok(out)
}

/// Closed-loop filtering: like [`ekf_forward`], but history rows whose
/// velocities were already filtered are fed back as filtered values, so the
/// model propagates the filter state rather than raw measurements.
pub fn ekf_filter(
    est: &Estimator,
    windows: &[WindowedSample],
    p0: f64,
) -> Result<Vec<DenoisedRecord>> {
    if est.config.outputs < EKF_OUTPUTS {
        return Err(Error::SchemaMismatch(format!(
            "EKF filtering needs a head of {EKF_OUTPUTS} outputs, got {}",
            est.config.outputs
        )));
    }
    let n = est.config.history;
    let mut out: Vec<DenoisedRecord> = Vec::with_capacity(windows.len());
    let mut filtered: HashMap<usize, [f64; 3]> = HashMap::new();
    let mut p = diag([p0; 3]);
    for (i, w) in windows.iter().enumerate() {
        if i == 0 || !windows[i - 1].is_followed_by(w) {
            p = diag([p0; 3]);
            filtered.clear();
        }
        let mut history = w.history.clone();
        for (k, row) in history.iter_mut().enumerate() {
            if let Some(v) = (w.label_index + k).checked_sub(n).and_then(|j| filtered.get(&j)) {
                row[..3].copy_from_slice(v);
            }
        }
        let pred = est.forward(&history, w.t_now, w.t_next)?;
        let (q, r) = covariances(&pred.phi);
        let u = ekf_update(pred.x_hat_next, w.label, pred.x_hat_next[2], w.dt(), &p, q, r)?;
        p = u.p_next;
        filtered.insert(w.label_index, u.x_ekf);
        if let Some(old) = w.label_index.checked_sub(n) {
            filtered.remove(&old);
        }
        out.push(DenoisedRecord {
            time: w.t_next,
            label_index: w.label_index,
            x_model_pred: pred.x_hat_next,
            x_ekf: u.x_ekf,
            n_hat: u.n_hat,
            measurement: w.label,
        });
    }
    Ok(out)
}

/// `MSE(x_ekf, measurement)`.
pub fn loss_ekf_supervised(x_ekf: &[[f64; 3]], measurement: &[[f64; 3]]) -> f64 {
    crate::training::loss_supervised(x_ekf, measurement)
}

/// `MSE(∂(x − n̂)/∂t_next, α̂)` from precomputed derivatives of the denoised signal.
pub fn loss_ekf_unsupervised(denoised_derivative: &[[f64; 3]], alpha_hat: &[[f64; 3]]) -> f64 {
    crate::training::loss_supervised(denoised_derivative, alpha_hat)
}

type DMat = [[Dual; 3]; 3];

/// Per-row 3×3 algebra on the tape; every entry is a `rows × 1` node.
struct RowAlgebra<'t> {
    tape: &'t mut Tape,
}

impl RowAlgebra<'_> {
    fn mul(&mut self, a: Dual, b: Dual) -> Dual {
        self.tape.d_mul(a, b)
    }

    fn add(&mut self, a: Dual, b: Dual) -> Dual {
        self.tape.d_add(a, b)
    }

    fn sub(&mut self, a: Dual, b: Dual) -> Dual {
        self.tape.d_sub(a, b)
    }

    fn matmul(&mut self, a: &DMat, b: &DMat) -> DMat {
        let mut out = *a;
        for (i, row) in out.iter_mut().enumerate() {
            for (j, cell) in row.iter_mut().enumerate() {
                let t0 = self.mul(a[i][0], b[0][j]);
                let t1 = self.mul(a[i][1], b[1][j]);
                let t2 = self.mul(a[i][2], b[2][j]);
                let s = self.add(t0, t1);
                *cell = self.add(s, t2);
            }
        }
        out
    }

    fn matvec(&mut self, a: &DMat, x: &[Dual; 3]) -> [Dual; 3] {
        std::array::from_fn(|i| {
            let t0 = self.mul(a[i][0], x[0]);
            let t1 = self.mul(a[i][1], x[1]);
            let t2 = self.mul(a[i][2], x[2]);
            let s = self.add(t0, t1);
            self.add(s, t2)
        })
    }

    /// `F·P·Fᵀ` with `F = [[1, a, 0], [−a, 1, 0], [0, 0, 1]]`.
    fn propagate(&mut self, a: Dual, p: &DMat) -> DMat {
        let mut fp = *p;
        for j in 0..3 {
            let ap1 = self.mul(a, p[1][j]);
            let ap0 = self.mul(a, p[0][j]);
            fp[0][j] = self.add(p[0][j], ap1);
            fp[1][j] = self.sub(p[1][j], ap0);
        }
        let mut out = fp;
        for row in out.iter_mut() {
            let (x0, x1) = (row[0], row[1]);
            let ax1 = self.mul(a, x1);
            let ax0 = self.mul(a, x0);
            row[0] = self.add(x0, ax1);
            row[1] = self.sub(x1, ax0);
        }
        out
    }

    fn inverse(&mut self, m: &DMat) -> DMat {
        let mut cof = *m;
        for (i, row) in cof.iter_mut().enumerate() {
            for (j, cell) in row.iter_mut().enumerate() {
                let (r0, r1) = ((i + 1) % 3, (i + 2) % 3);
                let (c0, c1) = ((j + 1) % 3, (j + 2) % 3);
                let x = self.mul(m[r0][c0], m[r1][c1]);
                let y = self.mul(m[r0][c1], m[r1][c0]);
                *cell = self.sub(x, y);
            }
        }
        let d0 = self.mul(m[0][0], cof[0][0]);
        let d1 = self.mul(m[0][1], cof[0][1]);
        let d2 = self.mul(m[0][2], cof[0][2]);
        let det = self.add(d0, d1);
        let det = self.add(det, d2);
        let mut inv = cof;
        for (i, row) in inv.iter_mut().enumerate() {
            for (j, cell) in row.iter_mut().enumerate() {
                *cell = self.tape.d_div(cof[j][i], det);
            }
        }
        inv
    }
}

/// Nodes of one recorded filter step.
struct StepNodes {
    x_ekf: Dual,
    /// `x̂ − K·Y` with the residual Y held fixed; its tangent is the
    /// time derivative of the denoised signal.
    denoised: Dual,
    p_next: DMat,
}

#[allow(clippy::too_many_arguments)]
fn record_ekf_step(
    tape: &mut Tape,
    x_hat: Dual,
    measurement: &Array2<f64>,
    q: [Dual; 3],
    r: [Dual; 3],
    dt: Dual,
    p: &DMat,
) -> StepNodes {
    let cols: [Dual; 3] = std::array::from_fn(|j| tape.d_column(x_hat, j));
    let a = tape.d_mul(dt, cols[2]);
    let meas = tape.d_const(measurement.clone());
    let y = tape.d_sub(meas, x_hat);
    let y_cols: [Dual; 3] = std::array::from_fn(|j| tape.d_column(y, j));
    let y_fixed: [Dual; 3] = std::array::from_fn(|j| Dual::constant(y_cols[j].v));

    let mut alg = RowAlgebra { tape };
    let mut p_pred = alg.propagate(a, p);
    for i in 0..3 {
        p_pred[i][i] = alg.add(p_pred[i][i], q[i]);
    }
    let mut s = p_pred;
    for i in 0..3 {
        s[i][i] = alg.add(p_pred[i][i], r[i]);
    }
    let s_inv = alg.inverse(&s);
    let k = alg.matmul(&p_pred, &s_inv);
    let n_hat = alg.matvec(&k, &y_cols);
    let n_fixed = alg.matvec(&k, &y_fixed);
    let x_ekf: [Dual; 3] = std::array::from_fn(|i| alg.add(cols[i], n_hat[i]));
    let denoised: [Dual; 3] = std::array::from_fn(|i| alg.sub(cols[i], n_fixed[i]));

    // (I − K)·P_pred, symmetrised, values only: earlier steps do not depend
    // on this step's prediction time.
    let mut p_next = p_pred;
    for i in 0..3 {
        for j in 0..3 {
            let kp0 = alg.mul(k[i][0], p_pred[0][j]);
            let kp1 = alg.mul(k[i][1], p_pred[1][j]);
            let kp2 = alg.mul(k[i][2], p_pred[2][j]);
            let kp = alg.add(kp0, kp1);
            let kp = alg.add(kp, kp2);
            p_next[i][j] = alg.sub(p_pred[i][j], kp);
        }
    }
    let mut sym = p_next;
    for i in 0..3 {
        for j in 0..3 {
            let s = alg.tape.add(p_next[i][j].v, p_next[j][i].v);
            sym[i][j] = Dual::constant(alg.tape.scale(s, 0.5));
        }
    }
    let tape = alg.tape;
    StepNodes { x_ekf: tape.d_hcat(&x_ekf), denoised: tape.d_hcat(&denoised), p_next: sym }
}

/// Filter settings shared by training and denoising.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EkfSettings {
    /// Initial covariance scale, `P₀ = p0·I`.
    pub p0: f64,
    /// Consecutive windows per training sequence.
    pub sequence_length: usize,
}

impl Default for EkfSettings {
    fn default() -> Self {
        Self { p0: 0.1, sequence_length: 8 }
    }
}

impl EkfSettings {
    pub fn validate(&self) -> Result<()> {
        if !(self.p0 >= 0.0 && self.p0.is_finite()) || self.sequence_length == 0 {
            return Err(Error::InvalidConfig("p0 must be >= 0 and sequence length >= 1".into()));
        }
        Ok(())
    }
}

/// `w1·Loss_EKF1 + w2·Loss_EKF2` over short trajectory-ordered sequences.
/// Validation is `Loss_EKF1` of a full sequential pass.
pub struct EkfObjective {
    windows: Vec<WindowedSample>,
    val: Vec<WindowedSample>,
    weights: LossWeights,
    settings: EkfSettings,
}

impl EkfObjective {
    pub fn new(
        windows: &[WindowedSample],
        val: &[WindowedSample],
        weights: LossWeights,
        settings: EkfSettings,
    ) -> Result<Self> {
        weights.validate()?;
        settings.validate()?;
        if windows.len() < settings.sequence_length {
            return Err(Error::InsufficientData {
                needed: settings.sequence_length,
                got: windows.len(),
            });
        }
        if val.is_empty() {
            return Err(Error::EmptyInput);
        }
        Ok(Self { windows: windows.to_vec(), val: val.to_vec(), weights, settings })
    }

    /// Records the loss over the sequences starting at `starts`.
    pub fn record_sequences(
        &self,
        est: &Estimator,
        tape: &mut Tape,
        starts: &[usize],
        track: bool,
    ) -> Result<(Var, Vec<Vec<Var>>)> {
        let len = self.settings.sequence_length;
        let s = starts.len();
        // Step-major order: rows l·S .. (l+1)·S hold step l of every sequence.
        let ordered: Vec<&WindowedSample> =
            (0..len).flat_map(|l| starts.iter().map(move |&st| &self.windows[st + l])).collect();
        let batch = Batch::from_windows(ordered.iter().copied())?;
        let unsupervised = self.weights.w2 > 0.0;
        let g = est.record(tape, &batch, track, unsupervised)?;
        let p0 = self.settings.p0;

        let reset_p = |tape: &mut Tape| -> DMat {
            std::array::from_fn(|i| {
                std::array::from_fn(|j| {
                    tape.d_const(Array2::from_elem((s, 1), if i == j { p0 } else { 0.0 }))
                })
            })
        };
        let mut p = reset_p(tape);
        let mut l1_terms = Vec::with_capacity(len);
        let mut l2_terms = Vec::with_capacity(len);
        for l in 0..len {
            if l > 0 {
                let keep: Vec<f64> = starts
                    .iter()
                    .map(|&st| f64::from(u8::from(self.windows[st + l - 1].is_followed_by(&self.windows[st + l]))))
                    .collect();
                if keep.iter().any(|&k| k == 0.0) {
                    let keep = Array2::from_shape_vec((s, 1), keep).expect("shape");
                    let reset = keep.mapv(|k| 1.0 - k);
                    let keep = tape.constant(keep);
                    let reset = tape.constant(reset);
                    for (i, row) in p.iter_mut().enumerate() {
                        for (j, cell) in row.iter_mut().enumerate() {
                            let kept = tape.mul(cell.v, keep);
                            let fresh = tape.scale(reset, if i == j { p0 } else { 0.0 });
                            *cell = Dual::constant(tape.add(kept, fresh));
                        }
                    }
                }
            }
            let x_hat = tape.d_rows(g.x_hat, l * s, s);
            let phi = tape.d_rows(g.phi, l * s, s);
            let q: [Dual; 3] = std::array::from_fn(|j| tape.d_column(phi, NUM_COEFFS + j));
            let r: [Dual; 3] = std::array::from_fn(|j| tape.d_column(phi, NUM_COEFFS + 3 + j));
            let dt_vals = batch.dt.slice(ndarray::s![l * s..(l + 1) * s, ..]).to_owned();
            let dt = Dual {
                v: tape.constant(dt_vals),
                t: unsupervised.then(|| tape.constant(Array2::ones((s, 1)))),
            };
            let meas = batch.labels.slice(ndarray::s![l * s..(l + 1) * s, ..]).to_owned();
            let step = record_ekf_step(tape, x_hat, &meas, q, r, dt, &p);
            let m = tape.constant(meas);
            l1_terms.push(tape_mse(tape, step.x_ekf.v, m));
            if unsupervised {
                let beta = tape.d_rows(g.beta, l * s, s);
                let d = step.denoised.t.expect("tangent recorded");
                l2_terms.push(tape_mse(tape, d, beta.v));
            }
            p = step.p_next;
        }
        let mean_of = |tape: &mut Tape, terms: &[Var]| {
            let cat = tape.hcat(terms);
            tape.mean(cat)
        };
        let l1 = mean_of(tape, &l1_terms);
        let l1 = tape.scale(l1, self.weights.w1);
        let loss = if unsupervised {
            let l2 = mean_of(tape, &l2_terms);
            let l2 = tape.scale(l2, self.weights.w2);
            tape.add(l1, l2)
        } else {
            l1
        };
        Ok((loss, g.params))
    }

    /// Start indices of sequences that fit inside the window list.
    fn num_starts(&self) -> usize {
        self.windows.len() + 1 - self.settings.sequence_length
    }
}

impl Objective for EkfObjective {
    fn record(
        &self,
        est: &Estimator,
        tape: &mut Tape,
        rng: &mut ChaCha8Rng,
        batch_size: usize,
    ) -> Result<(Var, Vec<Vec<Var>>)> {
        let sequences = (batch_size / self.settings.sequence_length).max(1);
        let starts: Vec<usize> =
            (0..sequences).map(|_| rng.random_range(0..self.num_starts())).collect();
        self.record_sequences(est, tape, &starts, true)
    }

    fn validation_loss(&self, est: &Estimator) -> Result<f64> {
        let recs = ekf_forward(est, &self.val, self.settings.p0)?;
        let x: Vec<[f64; 3]> = recs.iter().map(|r| r.x_ekf).collect();
        let m: Vec<[f64; 3]> = recs.iter().map(|r| r.measurement).collect();
        Ok(loss_ekf_supervised(&x, &m))
    }
}

/// Fine-tunes an EKF-head estimator with the filter losses. `windows`
/// must be in trajectory order.
pub fn finetune_ekf(
    checkpoint: &Estimator,
    windows: &[WindowedSample],
    val: &[WindowedSample],
    config: &TrainRunConfig,
    settings: &EkfSettings,
) -> Result<TrainOutcome> {
    config.validate()?;
    checkpoint.validate()?;
    if checkpoint.config.outputs < EKF_OUTPUTS {
        return Err(Error::SchemaMismatch(format!(
            "EKF training needs a head of {EKF_OUTPUTS} outputs, got {}",
            checkpoint.config.outputs
        )));
    }
    let mut est = checkpoint.clone();
    for b in &mut est.params.blocks {
        b.frozen = false;
    }
    est.params.freeze_prefix(config.freeze)?;
    let objective = EkfObjective::new(windows, val, config.weights, *settings)?;
    crate::training::optimize(est, config, &objective)
}

/// Filtered copy of a dataset plus the per-sample noise estimate.
#[derive(Debug, Clone, PartialEq)]
pub struct DenoisedDataset {
    pub samples: Vec<RawSample>,
    /// `(time, n̂)` per sample; zero where no window ends (segment heads).
    pub noise: Vec<(f64, [f64; 3])>,
    pub records: Vec<DenoisedRecord>,
}

/// Replaces each sample's velocities with the filtered state. Samples that
/// start a segment have no history and keep their measured values.
pub fn denoise_dataset(
    samples: &[RawSample],
    est: &Estimator,
    settings: &EkfSettings,
) -> Result<DenoisedDataset> {
    settings.validate()?;
    let windows = window(samples, est.config.history)?;
    let records = ekf_filter(est, &windows, settings.p0)?;
    let mut out = samples.to_vec();
    let mut noise: Vec<(f64, [f64; 3])> = samples.iter().map(|s| (s.time, [0.0; 3])).collect();
    for r in &records {
        out[r.label_index].set_velocities(r.x_ekf);
        noise[r.label_index].1 = r.n_hat;
    }
    Ok(DenoisedDataset { samples: out, noise, records })
}

impl DenoisedDataset {
    /// `time,n_vx,n_vy,n_omega`.
    pub fn write_noise_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(["time", "n_vx", "n_vy", "n_omega"])?;
        for (t, n) in &self.noise {
            w.write_record([t.to_string(), n[0].to_string(), n[1].to_string(), n[2].to_string()])?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn save(&self, data_path: impl AsRef<Path>, noise_path: impl AsRef<Path>) -> Result<()> {
        crate::data::save_csv(data_path, &self.samples)?;
        self.write_noise_csv(BufWriter::new(File::create(noise_path)?))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RangeAdjustSettings {
    /// Hit threshold as a fraction of the interval width.
    pub epsilon_frac: f64,
    /// Outward move as a fraction of the interval width.
    pub expand_factor: f64,
    pub max_rounds: usize,
}

impl Default for RangeAdjustSettings {
    fn default() -> Self {
        Self { epsilon_frac: 0.02, expand_factor: 0.5, max_rounds: 3 }
    }
}

impl RangeAdjustSettings {
    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon_frac > 0.0 && self.epsilon_frac < 0.5) {
            return Err(Error::InvalidConfig(format!(
                "epsilon_frac must be in (0, 0.5), got {}",
                self.epsilon_frac
            )));
        }
        if !(self.expand_factor > 0.0 && self.expand_factor.is_finite()) {
            return Err(Error::InvalidConfig(format!(
                "expand_factor must be positive, got {}",
                self.expand_factor
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Side {
    Lower,
    Upper,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundHit {
    pub coefficient: String,
    pub side: Side,
    pub estimate: f64,
    pub old: f64,
    pub new: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdjustRound {
    pub round: usize,
    pub estimates: EstimatedCoefficients,
    pub hits: Vec<BoundHit>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RangeAdjustment {
    pub bounds: CoefficientBounds,
    pub log: Vec<AdjustRound>,
}

/// One application of the boundary-hit rule. Lower bounds of physically
/// non-negative coefficients never drop below zero.
pub fn adjust_once(
    estimates: &EstimatedCoefficients,
    bounds: &CoefficientBounds,
    settings: &RangeAdjustSettings,
) -> Result<(CoefficientBounds, Vec<BoundHit>)> {
    settings.validate()?;
    let est = estimates.to_array();
    let mut lo = bounds.lower.to_array();
    let mut hi = bounds.upper.to_array();
    let mut hits = Vec::new();
    for i in 0..NUM_COEFFS {
        let width = hi[i] - lo[i];
        let margin = settings.epsilon_frac * width;
        let step = settings.expand_factor * width;
        if est[i] - lo[i] <= margin {
            let mut new = lo[i] - step;
            if NONNEGATIVE[i] {
                new = new.max(0.0);
            }
            if new < lo[i] {
                hits.push(BoundHit {
                    coefficient: COEFF_NAMES[i].into(),
                    side: Side::Lower,
                    estimate: est[i],
                    old: lo[i],
                    new,
                });
                lo[i] = new;
            }
        }
        if hi[i] - est[i] <= margin {
            let new = hi[i] + step;
            hits.push(BoundHit {
                coefficient: COEFF_NAMES[i].into(),
                side: Side::Upper,
                estimate: est[i],
                old: hi[i],
                new,
            });
            hi[i] = new;
        }
    }
    Ok((CoefficientBounds::from_arrays(&lo, &hi)?, hits))
}

/// Repeats estimate → widen until no estimate sits at a bound or
/// `max_rounds` is reached. `estimate` is called with the current bounds
/// (typically retraining) and returns the coefficients to test.
pub fn adjust_ranges<F>(
    bounds: &CoefficientBounds,
    settings: &RangeAdjustSettings,
    mut estimate: F,
) -> Result<RangeAdjustment>
where
    F: FnMut(&CoefficientBounds) -> Result<EstimatedCoefficients>,
{
    settings.validate()?;
    let mut current = *bounds;
    let mut log = Vec::new();
    for round in 0..settings.max_rounds {
        let estimates = estimate(&current)?;
        let (next, hits) = adjust_once(&estimates, &current, settings)?;
        let done = hits.is_empty();
        log::info!("range adjustment round {round}: {} boundary hits", hits.len());
        log.push(AdjustRound { round, estimates, hits });
        current = next;
        if done {
            break;
        }
    }
    Ok(RangeAdjustment { bounds: current, log })
}

impl RangeAdjustment {
    pub fn save_json(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        serde_json::to_writer_pretty(&mut w, self)?;
        w.flush()?;
        Ok(())
    }
}

#[cfg(test)]
mod tests;

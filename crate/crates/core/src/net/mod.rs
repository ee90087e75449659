//! Coefficient estimator: optional GRU encoder over the history window, tanh
//! dense layers, a sigmoid guard that keeps every output inside its preset
//! range, and the single-track physics layer that turns the estimated
//! coefficients into a one-step velocity prediction.
//!
//! The network sees the prediction interval `t_next - t_now` as an extra
//! dense input, and the same interval drives the Euler step. Forward passes
//! can carry a tangent with respect to `t_next`, giving the exact
//! `∂x̂/∂t_next` needed by the unsupervised loss.

pub mod checkpoint;
pub mod dual;
pub mod tape;

use ndarray::{s, Array2, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::{WindowedSample, NUM_FEATURES};
use crate::dynamics::{
    CoefficientBounds, EstimatedCoefficients, KnownCoefficients, NUM_COEFFS, V_EPS,
};
use crate::error::{Error, Result};
use crate::rng::{streams, substream};

pub use dual::Dual;
pub use tape::{Gradients, Tape, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct NetworkConfig {
    pub hidden_layers: usize,
    pub hidden_size: usize,
    /// 0 feeds the flattened history straight into the dense stack.
    pub gru_layers: usize,
    pub history: usize,
    /// Head width: the 17 coefficients, plus 6 covariance diagonals in EKF mode.
    pub outputs: usize,
}

impl NetworkConfig {
    pub fn validate(&self) -> Result<()> {
        if self.hidden_layers == 0 || self.hidden_size == 0 || self.history == 0 {
            return Err(Error::InvalidConfig(
                "hidden_layers, hidden_size and history must all be at least 1".into(),
            ));
        }
        if self.outputs < NUM_COEFFS {
            return Err(Error::InvalidConfig(format!(
                "output head needs at least {NUM_COEFFS} entries, got {}",
                self.outputs
            )));
        }
        Ok(())
    }

    /// GRU blocks, then hidden dense blocks, then the output block.
    pub fn num_blocks(&self) -> usize {
        self.gru_layers + self.hidden_layers + 1
    }

    fn dense_input(&self) -> usize {
        let encoded = if self.gru_layers > 0 {
            self.hidden_size
        } else {
            self.history * NUM_FEATURES
        };
        encoded + 1
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BlockKind {
    /// `[W (in × 3H), U (H × 3H), b (1 × 3H)]`, gates ordered update, reset, candidate.
    Gru,
    /// `[W (in × out), b (1 × out)]`.
    Dense,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Block {
    pub kind: BlockKind,
    pub tensors: Vec<Array2<f64>>,
    pub frozen: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParameterSet {
    pub blocks: Vec<Block>,
}

fn glorot(rng: &mut impl Rng, rows: usize, cols: usize) -> Array2<f64> {
    let limit = (6.0 / (rows + cols) as f64).sqrt();
    Array2::from_shape_fn((rows, cols), |_| rng.random_range(-limit..=limit))
}

impl ParameterSet {
    /// Glorot-uniform weights, zero biases, nothing frozen.
    pub fn init(config: &NetworkConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = substream(seed, streams::INIT);
        let h = config.hidden_size;
        let mut blocks = Vec::with_capacity(config.num_blocks());
        for l in 0..config.gru_layers {
            let input = if l == 0 { NUM_FEATURES } else { h };
            blocks.push(Block {
                kind: BlockKind::Gru,
                tensors: vec![
                    glorot(&mut rng, input, 3 * h),
                    glorot(&mut rng, h, 3 * h),
                    Array2::zeros((1, 3 * h)),
                ],
                frozen: false,
            });
        }
        let mut input = config.dense_input();
        for l in 0..=config.hidden_layers {
            let out = if l == config.hidden_layers { config.outputs } else { h };
            blocks.push(Block {
                kind: BlockKind::Dense,
                tensors: vec![glorot(&mut rng, input, out), Array2::zeros((1, out))],
                frozen: false,
            });
            input = out;
        }
        Ok(Self { blocks })
    }

    pub fn num_params(&self) -> usize {
        self.blocks.iter().flat_map(|b| &b.tensors).map(Array2::len).sum()
    }

    /// Freezes blocks `0..n`. The last block is the output layer, so the
    /// one before it must stay trainable to keep a hidden layer active.
    pub fn freeze_prefix(&mut self, n: usize) -> Result<()> {
        if n + 1 >= self.blocks.len() {
            return Err(Error::FreezeTooDeep { requested: n, blocks: self.blocks.len() });
        }
        for b in &mut self.blocks[..n] {
            b.frozen = true;
        }
        Ok(())
    }

    pub fn frozen_count(&self) -> usize {
        self.blocks.iter().filter(|b| b.frozen).count()
    }

    /// Checks tensor shapes against a configuration.
    pub fn check(&self, config: &NetworkConfig) -> Result<()> {
        let expected = Self::init(config, 0)?;
        let same = self.blocks.len() == expected.blocks.len()
            && self.blocks.iter().zip(&expected.blocks).all(|(a, b)| {
                a.kind == b.kind
                    && a.tensors.len() == b.tensors.len()
                    && a.tensors.iter().zip(&b.tensors).all(|(x, y)| x.dim() == y.dim())
            });
        if same {
            Ok(())
        } else {
            Err(Error::SchemaMismatch("parameter shapes do not match the network config".into()))
        }
    }
}

/// Per-output open interval enforced by the guard layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GuardBounds {
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
}

impl GuardBounds {
    pub fn new(lower: Vec<f64>, upper: Vec<f64>) -> Result<Self> {
        let b = Self { lower, upper };
        b.validate()?;
        Ok(b)
    }

    pub fn validate(&self) -> Result<()> {
        if self.lower.len() != self.upper.len() {
            return Err(Error::SchemaMismatch("bound vectors differ in length".into()));
        }
        for (i, (l, u)) in self.lower.iter().zip(&self.upper).enumerate() {
            // The open interval must contain at least one representable value.
            if !(l.is_finite() && u.is_finite() && l.next_up() < *u) {
                return Err(Error::InvalidConfig(format!("output {i}: bounds [{l}, {u}] invalid")));
            }
        }
        Ok(())
    }

    pub fn from_coefficients(bounds: &CoefficientBounds) -> Self {
        Self {
            lower: bounds.lower.to_array().to_vec(),
            upper: bounds.upper.to_array().to_vec(),
        }
    }

    /// Appends further outputs (e.g. covariance diagonals) after the coefficients.
    pub fn extend(mut self, lower: &[f64], upper: &[f64]) -> Result<Self> {
        self.lower.extend_from_slice(lower);
        self.upper.extend_from_slice(upper);
        self.validate()?;
        Ok(self)
    }

    pub fn len(&self) -> usize {
        self.lower.len()
    }

    pub fn is_empty(&self) -> bool {
        self.lower.is_empty()
    }

    pub fn coefficient_bounds(&self) -> Result<CoefficientBounds> {
        CoefficientBounds::from_arrays(&self.lower[..NUM_COEFFS], &self.upper[..NUM_COEFFS])
    }

    fn rows(&self) -> (Array2<f64>, Array2<f64>) {
        let n = self.len();
        let lower = Array2::from_shape_vec((1, n), self.lower.clone()).expect("shape");
        let width = Array2::from_shape_fn((1, n), |(_, j)| self.upper[j] - self.lower[j]);
        (lower, width)
    }

    /// Innermost representable values of each open interval. A saturated
    /// sigmoid rounds onto a bound; clamping to these keeps it strictly inside.
    fn open_interior(&self) -> (Vec<f64>, Vec<f64>) {
        let lo = self.lower.iter().map(|l| l.next_up()).collect();
        let hi = self.upper.iter().map(|u| u.next_down()).collect();
        (lo, hi)
    }
}

pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// `σ(z)·(ub − lb) + lb` per entry, kept strictly inside `(lb, ub)`.
pub fn guard(z: &[f64], bounds: &GuardBounds) -> Vec<f64> {
    z.iter()
        .zip(bounds.lower.iter().zip(&bounds.upper))
        .map(|(&z, (&l, &u))| (sigmoid(z) * (u - l) + l).clamp(l.next_up(), u.next_down()))
        .collect()
}

/// Tensors for a batch of windows, one row per window.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    /// History rows, oldest first, each `B × NUM_FEATURES`.
    pub steps: Vec<Array2<f64>>,
    /// `t_next − t_now`, `B × 1`.
    pub dt: Array2<f64>,
    /// Next-step velocities, `B × 3`.
    pub labels: Array2<f64>,
}

impl Batch {
    pub fn from_windows<'a, I>(windows: I) -> Result<Self>
    where
        I: IntoIterator<Item = &'a WindowedSample>,
    {
        let windows: Vec<&WindowedSample> = windows.into_iter().collect();
        let Some(first) = windows.first() else { return Err(Error::EmptyInput) };
        let n = first.history.len();
        if windows.iter().any(|w| w.history.len() != n) {
            return Err(Error::SchemaMismatch("windows differ in history length".into()));
        }
        let b = windows.len();
        let steps = (0..n)
            .map(|k| Array2::from_shape_fn((b, NUM_FEATURES), |(i, j)| windows[i].history[k][j]))
            .collect();
        Ok(Self {
            steps,
            dt: Array2::from_shape_fn((b, 1), |(i, _)| windows[i].dt()),
            labels: Array2::from_shape_fn((b, 3), |(i, j)| windows[i].label[j]),
        })
    }

    /// Rows `idx` of every tensor, in the given order.
    pub fn select(&self, idx: &[usize]) -> Self {
        Self {
            steps: self.steps.iter().map(|x| x.select(Axis(0), idx)).collect(),
            dt: self.dt.select(Axis(0), idx),
            labels: self.labels.select(Axis(0), idx),
        }
    }

    pub fn len(&self) -> usize {
        self.dt.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn last(&self) -> &Array2<f64> {
        self.steps.last().expect("history is never empty")
    }
}

/// Nodes produced by one recorded forward pass.
#[derive(Debug, Clone)]
pub struct Graph {
    /// Guarded head, `B × outputs`.
    pub phi: Dual,
    /// Predicted next velocities, `B × 3`.
    pub x_hat: Dual,
    /// Physics-layer acceleration, `B × 3`.
    pub beta: Dual,
    /// Leaves for every parameter tensor, block by block.
    pub params: Vec<Vec<Var>>,
}

/// Trainable state plus everything needed to evaluate it.
#[derive(Debug, Clone, PartialEq)]
pub struct Estimator {
    pub config: NetworkConfig,
    pub params: ParameterSet,
    pub bounds: GuardBounds,
    pub known: KnownCoefficients,
}

/// One window's outputs in plain numbers.
#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub phi: Vec<f64>,
    pub x_hat_next: [f64; 3],
    pub beta: [f64; 3],
}

impl Prediction {
    pub fn coefficients(&self) -> EstimatedCoefficients {
        EstimatedCoefficients::from_slice(&self.phi[..NUM_COEFFS]).expect("head has 17+ entries")
    }
}

/// Per-block gradients; `None` for frozen blocks.
pub type ParamGrads = Vec<Option<Vec<Array2<f64>>>>;

impl Estimator {
    pub fn new(
        config: NetworkConfig,
        bounds: GuardBounds,
        known: KnownCoefficients,
        seed: u64,
    ) -> Result<Self> {
        let params = ParameterSet::init(&config, seed)?;
        let est = Self { config, params, bounds, known };
        est.validate()?;
        Ok(est)
    }

    pub fn validate(&self) -> Result<()> {
        self.config.validate()?;
        self.params.check(&self.config)?;
        self.bounds.validate()?;
        if self.bounds.len() != self.config.outputs {
            return Err(Error::SchemaMismatch(format!(
                "{} guard bounds for a head of {}",
                self.bounds.len(),
                self.config.outputs
            )));
        }
        self.known.validate()
    }

    /// Records the full forward pass. With `track`, trainable parameter
    /// leaves take part in the reverse sweep; with `tangent`, every output
    /// also carries its derivative with respect to `t_next`.
    pub fn record(&self, tape: &mut Tape, batch: &Batch, track: bool, tangent: bool) -> Result<Graph> {
        if batch.steps.len() != self.config.history {
            return Err(Error::SchemaMismatch(format!(
                "history of {} rows, network expects {}",
                batch.steps.len(),
                self.config.history
            )));
        }
        let last = batch.last();
        if let Some(&vx) = last.column(0).iter().find(|&&vx| !(vx > V_EPS)) {
            return Err(Error::DegenerateSpeed { vx });
        }

        let params: Vec<Vec<Var>> = self
            .params
            .blocks
            .iter()
            .map(|b| {
                b.tensors.iter().map(|t| tape.leaf(t.clone(), track && !b.frozen)).collect()
            })
            .collect();

        let b = batch.len();
        let dt = Dual {
            v: tape.constant(batch.dt.clone()),
            t: tangent.then(|| tape.constant(Array2::ones((b, 1)))),
        };

        let encoded = if self.config.gru_layers > 0 {
            let mut seq: Vec<Var> = batch.steps.iter().map(|x| tape.constant(x.clone())).collect();
            for p in &params[..self.config.gru_layers] {
                seq = gru_layer(tape, &seq, p, self.config.hidden_size);
            }
            Dual::constant(*seq.last().expect("history is never empty"))
        } else {
            let parts: Vec<Var> = batch.steps.iter().map(|x| tape.constant(x.clone())).collect();
            Dual::constant(tape.hcat(&parts))
        };

        let mut act = tape.d_hcat(&[encoded, dt]);
        let dense = &params[self.config.gru_layers..];
        for (i, p) in dense.iter().enumerate() {
            let xw = tape.d_matmul(act, p[0]);
            let z = tape.d_add(xw, Dual::constant(p[1]));
            act = if i + 1 < dense.len() { tape.d_tanh(z) } else { z };
        }

        let (lower, width) = self.bounds.rows();
        let s = tape.d_sigmoid(act);
        let width = tape.d_const(width);
        let lower = tape.d_const(lower);
        let scaled = tape.d_mul(s, width);
        let phi = tape.d_add(scaled, lower);
        let (lo, hi) = self.bounds.open_interior();
        let phi = tape.d_clamp_columns(phi, &lo, &hi);

        let beta = physics_layer(tape, phi, last, &self.known);
        let v_last = tape.d_const(last.slice(s![.., 0..3]).to_owned());
        let step = tape.d_mul(beta, dt);
        let x_hat = tape.d_add(v_last, step);
        Ok(Graph { phi, x_hat, beta, params })
    }

    /// Plain forward pass for a batch of windows.
    pub fn predict(&self, windows: &[WindowedSample]) -> Result<Vec<Prediction>> {
        let batch = Batch::from_windows(windows)?;
        let mut tape = Tape::new();
        let g = self.record(&mut tape, &batch, false, false)?;
        let (phi, x, beta) = (tape.value(g.phi.v), tape.value(g.x_hat.v), tape.value(g.beta.v));
        Ok((0..batch.len())
            .map(|i| Prediction {
                phi: phi.row(i).to_vec(),
                x_hat_next: [x[[i, 0]], x[[i, 1]], x[[i, 2]]],
                beta: [beta[[i, 0]], beta[[i, 1]], beta[[i, 2]]],
            })
            .collect())
    }

    /// Forward pass for a single history.
    pub fn forward(
        &self,
        history: &[[f64; NUM_FEATURES]],
        t_now: f64,
        t_next: f64,
    ) -> Result<Prediction> {
        let w = WindowedSample {
            history: history.to_vec(),
            label: [0.0; 3],
            t_now,
            t_next,
            label_index: 0,
            segment: 0,
        };
        Ok(self.predict(std::slice::from_ref(&w))?.remove(0))
    }

    /// Coefficients averaged over the head outputs for `windows`.
    pub fn mean_coefficients(&self, windows: &[WindowedSample]) -> Result<EstimatedCoefficients> {
        let preds = self.predict(windows)?;
        let n = preds.len() as f64;
        let mut mean = [0.0; NUM_COEFFS];
        for p in &preds {
            for (m, v) in mean.iter_mut().zip(&p.phi) {
                *m += v / n;
            }
        }
        EstimatedCoefficients::from_slice(&mean)
    }

    /// Exact `∂x̂_next/∂t_next` for each window.
    pub fn time_derivative(&self, windows: &[WindowedSample]) -> Result<Vec<[f64; 3]>> {
        let batch = Batch::from_windows(windows)?;
        let mut tape = Tape::new();
        let g = self.record(&mut tape, &batch, false, true)?;
        let t = tape.value(g.x_hat.t.expect("tangent requested"));
        Ok((0..batch.len()).map(|i| [t[[i, 0]], t[[i, 1]], t[[i, 2]]]).collect())
    }

    /// Gradients for the trainable blocks after a reverse sweep.
    pub fn collect_gradients(&self, leaves: &[Vec<Var>], grads: &Gradients) -> ParamGrads {
        self.params
            .blocks
            .iter()
            .zip(leaves)
            .map(|(b, vars)| {
                (!b.frozen).then(|| {
                    vars.iter()
                        .zip(&b.tensors)
                        .map(|(&v, t)| {
                            grads.get(v).cloned().unwrap_or_else(|| Array2::zeros(t.raw_dim()))
                        })
                        .collect()
                })
            })
            .collect()
    }
}

/// One GRU layer unrolled over the sequence; returns every hidden state.
fn gru_layer(tape: &mut Tape, seq: &[Var], p: &[Var], h: usize) -> Vec<Var> {
    let (w, u, b) = (p[0], p[1], p[2]);
    let u_zr = tape.columns(u, 0, 2 * h);
    let u_n = tape.columns(u, 2 * h, h);
    let rows = tape.value(seq[0]).nrows();
    let mut state = tape.constant(Array2::zeros((rows, h)));
    let mut out = Vec::with_capacity(seq.len());
    for &x in seq {
        let xw = tape.matmul(x, w);
        let xw = tape.add(xw, b);
        let x_zr = tape.columns(xw, 0, 2 * h);
        let x_n = tape.columns(xw, 2 * h, h);
        let h_zr = tape.matmul(state, u_zr);
        let pre = tape.add(x_zr, h_zr);
        let zr = tape.sigmoid(pre);
        let z = tape.columns(zr, 0, h);
        let r = tape.columns(zr, h, h);
        let rh = tape.mul(r, state);
        let rhu = tape.matmul(rh, u_n);
        let pre_n = tape.add(x_n, rhu);
        let n = tape.tanh(pre_n);
        // (1 − z)·n + z·h = n + z·(h − n)
        let diff = tape.sub(state, n);
        let zd = tape.mul(z, diff);
        state = tape.add(n, zd);
        out.push(state);
    }
    out
}

fn pacejka_dual(tape: &mut Tape, alpha: Dual, b: Dual, c: Dual, d: Dual, e: Dual, sv: Dual) -> Dual {
    let ba = tape.d_mul(b, alpha);
    let at = tape.d_atan(ba);
    let curv = tape.d_sub(ba, at);
    let ecurv = tape.d_mul(e, curv);
    let inner = tape.d_sub(ba, ecurv);
    let outer = tape.d_atan(inner);
    let arg = tape.d_mul(c, outer);
    let sn = tape.d_sin(arg);
    let f = tape.d_mul(d, sn);
    tape.d_add(sv, f)
}

/// Body-frame accelerations from the last history row and the guarded head.
fn physics_layer(tape: &mut Tape, phi: Dual, last: &Array2<f64>, known: &KnownCoefficients) -> Dual {
    use crate::dynamics::idx;
    let col = |j: usize| last.slice(s![.., j..j + 1]).to_owned();
    let (vx, vy, w, thr, steer) = (col(0), col(1), col(2), col(3), col(4));

    // Kinematic part of the slip angles depends on data only.
    let kin_f = &steer - &((&w * known.lf + &vy) / &vx).mapv(f64::atan);
    let kin_r = ((&w * known.lr - &vy) / &vx).mapv(f64::atan);

    let p: Vec<Dual> = (0..NUM_COEFFS).map(|j| tape.d_column(phi, j)).collect();
    let kin_f = tape.d_const(kin_f);
    let kin_r = tape.d_const(kin_r);
    let alpha_f = tape.d_add(kin_f, p[idx::SH_F]);
    let alpha_r = tape.d_add(kin_r, p[idx::SH_R]);
    let f_fy = pacejka_dual(
        tape,
        alpha_f,
        p[idx::B_F],
        p[idx::C_F],
        p[idx::D_F],
        p[idx::E_F],
        p[idx::SV_F],
    );
    let f_ry = pacejka_dual(
        tape,
        alpha_r,
        p[idx::B_R],
        p[idx::C_R],
        p[idx::D_R],
        p[idx::E_R],
        p[idx::SV_R],
    );

    // (cm1 − cm2·vx²)·T − cr0 − cd·vx²
    let v2 = &vx * &vx;
    let thr_d = tape.d_const(thr.clone());
    let v2t = tape.d_const(&v2 * &thr);
    let v2_d = tape.d_const(v2);
    let drive = tape.d_mul(p[idx::CM1], thr_d);
    let drag_t = tape.d_mul(p[idx::CM2], v2t);
    let drive = tape.d_sub(drive, drag_t);
    let drive = tape.d_sub(drive, p[idx::CR0]);
    let drag = tape.d_mul(p[idx::CD], v2_d);
    let f_rx = tape.d_sub(drive, drag);

    let m = known.mass;
    let sin_d = tape.d_const(steer.mapv(f64::sin));
    let cos_d = tape.d_const(steer.mapv(f64::cos));
    let vy_w = tape.d_const(&vy * &w);
    let vx_w = tape.d_const(&vx * &w);

    let fs = tape.d_mul(f_fy, sin_d);
    let ax = tape.d_sub(f_rx, fs);
    let ax = tape.d_scale(ax, 1.0 / m);
    let ax = tape.d_add(ax, vy_w);

    let fc = tape.d_mul(f_fy, cos_d);
    let ay = tape.d_add(f_ry, fc);
    let ay = tape.d_scale(ay, 1.0 / m);
    let ay = tape.d_sub(ay, vx_w);

    let front = tape.d_scale(fc, known.lf);
    let rear = tape.d_scale(f_ry, known.lr);
    let moment = tape.d_sub(front, rear);
    let wd = tape.d_div(moment, p[idx::IZ]);

    tape.d_hcat(&[ax, ay, wd])
}

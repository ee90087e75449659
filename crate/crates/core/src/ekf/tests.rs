use super::*;
use crate::data::{read_csv, RawSample};
use crate::net::NetworkConfig;
use crate::dynamics::KnownCoefficients;
use crate::simulator::{generate_dataset, inject_noise, PurePursuit, SimRun, SimSample, TrackSpec};
use crate::training::{pretrain, TrainRunConfig};
use crate::dynamics::EstimatedCoefficients;
use nalgebra::{Matrix3, Vector3};
use proptest::prelude::{prop, prop_assert, proptest};
use rand::SeedableRng;

fn random_spd(rng: &mut ChaCha8Rng, scale: f64) -> Mat3 {
    let a: Mat3 = std::array::from_fn(|_| std::array::from_fn(|_| rng.random_range(-1.0..1.0)));
    let mut p = matmul(&a, &transpose(&a));
    for (i, row) in p.iter_mut().enumerate() {
        for v in row.iter_mut() {
            *v *= scale;
        }
        row[i] += 1e-3 * scale;
    }
    p
}

fn random_cov(rng: &mut ChaCha8Rng, b: &EkfCovBounds) -> ([f64; 3], [f64; 3]) {
    let d: [f64; 6] = std::array::from_fn(|i| rng.random_range(b.lower[i]..=b.upper[i]));
    ([d[0], d[1], d[2]], [d[3], d[4], d[5]])
}

/// Textbook dense-matrix EKF step.
fn oracle(
    x: [f64; 3],
    z: [f64; 3],
    omega: f64,
    dt: f64,
    p: &Mat3,
    q: [f64; 3],
    r: [f64; 3],
) -> (Vector3<f64>, Vector3<f64>, Matrix3<f64>, Matrix3<f64>) {
    let m = |a: &Mat3| Matrix3::from_fn(|i, j| a[i][j]);
    let f = Matrix3::new(1.0, dt * omega, 0.0, -dt * omega, 1.0, 0.0, 0.0, 0.0, 1.0);
    let h = Matrix3::identity();
    let p_pred = f * m(p) * f.transpose() + Matrix3::from_diagonal(&Vector3::from(q));
    let s = h * p_pred * h.transpose() + Matrix3::from_diagonal(&Vector3::from(r));
    let k = p_pred * h.transpose() * s.try_inverse().unwrap();
    let y = Vector3::from(z) - h * Vector3::from(x);
    let n = k * y;
    let x_ekf = Vector3::from(x) + n;
    let p_next = (Matrix3::identity() - k * h) * p_pred;
    (x_ekf, n, p_next, k)
}

fn close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol * a.abs().max(b.abs()).max(1.0)
}

#[test]
fn update_matches_dense_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for bounds in [EkfCovBounds::published(), EkfCovBounds::for_noise([0.05, 0.02, 0.01])] {
        for _ in 0..5_000 {
            let x = std::array::from_fn(|_| rng.random_range(-3.0..3.0));
            let z = std::array::from_fn(|_| rng.random_range(-3.0..3.0));
            let omega = rng.random_range(-5.0..5.0);
            let dt = rng.random_range(0.005..0.05);
            let p = random_spd(&mut rng, bounds.upper[0]);
            let (q, r) = random_cov(&mut rng, &bounds);
            let u = ekf_update(x, z, omega, dt, &p, q, r).unwrap();
            let (xo, no, po, ko) = oracle(x, z, omega, dt, &p, q, r);
            for i in 0..3 {
                assert!(close(u.x_ekf[i], xo[i], 1e-12));
                assert!(close(u.n_hat[i], no[i], 1e-12));
                for j in 0..3 {
                    assert!(close(u.k[i][j], ko[(i, j)], 1e-12));
                    assert!(close(u.p_next[i][j], po[(i, j)], 1e-12));
                }
            }
        }
    }
}

#[test]
fn covariance_stays_symmetric_psd_over_long_chains() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let bounds = EkfCovBounds::published();
    let mut p = diag([0.1; 3]);
    for step in 0..100_000 {
        let (q, r) = random_cov(&mut rng, &bounds);
        let omega = rng.random_range(-8.0..8.0);
        let u = ekf_update([1.0, 0.0, 0.0], [1.1, 0.05, -0.02], omega, 0.02, &p, q, r).unwrap();
        p = u.p_next;
        assert!(is_symmetric_psd(&p, 1e-12), "step {step}: {p:?}");
        assert!(EkfState { p, x: u.x_ekf }.is_valid(1e-9));
    }
}

#[test]
fn diagonal_gain_closed_form_at_zero_yaw_rate() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let bounds = EkfCovBounds::published();
    for _ in 0..1_000 {
        let pd: [f64; 3] = std::array::from_fn(|_| rng.random_range(0.0..1.0));
        let (q, r) = random_cov(&mut rng, &bounds);
        let u = ekf_update([0.0; 3], [1.0; 3], 0.0, 0.02, &diag(pd), q, r).unwrap();
        for i in 0..3 {
            let expected = (pd[i] + q[i]) / (pd[i] + q[i] + r[i]);
            assert!((u.k[i][i] - expected).abs() < 1e-14);
            for j in 0..3 {
                if i != j {
                    assert_eq!(u.k[i][j], 0.0);
                }
            }
        }
    }
}

proptest! {
    #[test]
    fn larger_measurement_noise_never_raises_the_gain(
        pd in prop::array::uniform3(0.0..1.0f64),
        q in prop::array::uniform3(0.01..1.0f64),
        r in prop::array::uniform3(1e-4..1.0f64),
        extra in prop::array::uniform3(0.0..1.0f64),
    ) {
        let a = ekf_update([0.0; 3], [0.0; 3], 0.0, 0.02, &diag(pd), q, r).unwrap();
        let r2 = std::array::from_fn(|i| r[i] + extra[i]);
        let b = ekf_update([0.0; 3], [0.0; 3], 0.0, 0.02, &diag(pd), q, r2).unwrap();
        for i in 0..3 {
            prop_assert!(b.k[i][i] <= a.k[i][i]);
        }
    }
}

#[test]
fn limiting_cases() {
    let x = [1.0, 0.1, -0.3];
    let z = [1.2, 0.0, -0.25];
    // Perfect sensor.
    let u = ekf_update(x, z, 0.7, 0.02, &diag([0.1; 3]), [0.5; 3], [1e-14; 3]).unwrap();
    for i in 0..3 {
        assert!((u.k[i][i] - 1.0).abs() < 1e-12);
        assert!((u.x_ekf[i] - z[i]).abs() < 1e-12);
    }
    // Perfect model.
    let u = ekf_update(x, z, 0.7, 0.02, &[[0.0; 3]; 3], [0.0; 3], [0.1; 3]).unwrap();
    assert_eq!(u.k, [[0.0; 3]; 3]);
    assert_eq!(u.x_ekf, x);
    assert_eq!(u.n_hat, [0.0; 3]);
    // No noise anywhere: S = 0.
    let e = ekf_update(x, z, 0.0, 0.02, &[[0.0; 3]; 3], [0.0; 3], [0.0; 3]);
    assert!(matches!(e, Err(Error::SingularInnovation)));
}

#[test]
fn eigenvalue_helper_matches_nalgebra() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for _ in 0..500 {
        let p = random_spd(&mut rng, 1.0);
        let mut ours = symmetric_eigenvalues(&p);
        ours.sort_by(f64::total_cmp);
        let m = Matrix3::from_fn(|i, j| p[i][j]);
        let mut theirs: Vec<f64> = m.symmetric_eigenvalues().iter().copied().collect();
        theirs.sort_by(f64::total_cmp);
        for (a, b) in ours.iter().zip(&theirs) {
            assert!((a - b).abs() < 1e-10);
        }
    }
    assert!(!is_symmetric_psd(&diag([1.0, -0.1, 1.0]), 1e-9));
    assert!(!is_symmetric_psd(&[[1.0, 0.5, 0.0], [0.4, 1.0, 0.0], [0.0, 0.0, 1.0]], 1e-9));
}

#[test]
fn supervised_and_unsupervised_filter_losses() {
    let z = [[1.0, 0.1, 0.2], [0.9, -0.1, 0.4]];
    let x = [[1.1, 0.0, 0.25], [0.7, -0.2, 0.3]];
    // K = I: x_ekf equals the measurement.
    assert_eq!(loss_ekf_supervised(&z, &z), 0.0);
    // K = 0: x_ekf equals the model prediction.
    let u = ekf_update(x[0], z[0], 0.0, 0.02, &[[0.0; 3]; 3], [0.0; 3], [1.0; 3]).unwrap();
    assert_eq!(loss_ekf_supervised(&[u.x_ekf], &z[..1]), crate::training::loss_supervised(&x[..1], &z[..1]));
    let alpha = [[0.5, -1.0, 2.0]];
    assert_eq!(loss_ekf_unsupervised(&alpha, &alpha), 0.0);
    let s = [0.1, -0.2, 0.3];
    let shifted = [[alpha[0][0] + s[0], alpha[0][1] + s[1], alpha[0][2] + s[2]]];
    let expected = (0.01 + 0.04 + 0.09) / 3.0;
    assert!((loss_ekf_unsupervised(&shifted, &alpha) - expected).abs() < 1e-15);
    let many = loss_ekf_unsupervised(&[shifted[0]; 5], &[alpha[0]; 5]);
    assert!((many - expected).abs() < 1e-15);
}

fn clean_samples(count: usize) -> Vec<SimSample> {
    let run = SimRun { count, ..SimRun::default() };
    generate_dataset(&run, &TrackSpec::default(), &PurePursuit::for_car(&run.known)).unwrap()
}

fn raw(s: &[SimSample]) -> Vec<RawSample> {
    s.iter().map(RawSample::from).collect()
}

fn ekf_estimator(cov: &EkfCovBounds, seed: u64) -> Estimator {
    let config = NetworkConfig {
        hidden_layers: 2,
        hidden_size: 8,
        gru_layers: 0,
        history: 2,
        outputs: EKF_OUTPUTS,
    };
    Estimator::new(
        config,
        cov.guard_bounds(&CoefficientBounds::sim()).unwrap(),
        KnownCoefficients::scale_car(),
        seed,
    )
    .unwrap()
}

/// Coefficients pinned to the simulator's truth, so predictions are exact.
fn pinned_estimator(q: [f64; 3], r: [f64; 3]) -> Estimator {
    let gt = EstimatedCoefficients::sim_ground_truth().to_array();
    let mid: Vec<f64> = gt.iter().chain(&q).chain(&r).copied().collect();
    let bounds = GuardBounds::new(
        mid.iter().map(|v| v - 1e-12).collect(),
        mid.iter().map(|v| v + 1e-12).collect(),
    )
    .unwrap();
    let config = NetworkConfig { hidden_layers: 1, hidden_size: 4, gru_layers: 0, history: 2, outputs: EKF_OUTPUTS };
    Estimator::new(config, bounds, KnownCoefficients::scale_car(), 0).unwrap()
}

#[test]
fn forward_resets_at_gaps_and_keeps_the_decomposition() {
    let mut samples = raw(&clean_samples(120));
    for s in &mut samples[60..] {
        s.time += 1.0;
    }
    let est = ekf_estimator(&EkfCovBounds::published(), 3);
    let windows = window(&samples, 2).unwrap();
    let recs = ekf_forward(&est, &windows, 0.1).unwrap();
    let preds = est.predict(&windows).unwrap();

    let mut p = diag([0.1; 3]);
    for (i, (w, (rec, pred))) in windows.iter().zip(recs.iter().zip(&preds)).enumerate() {
        if i == 0 || w.segment != windows[i - 1].segment {
            p = diag([0.1; 3]);
        }
        let (q, r) = covariances(&pred.phi);
        let u = ekf_update(pred.x_hat_next, w.label, pred.x_hat_next[2], w.dt(), &p, q, r).unwrap();
        assert_eq!(rec.x_ekf, u.x_ekf);
        p = u.p_next;
        for c in 0..3 {
            assert_eq!(rec.x_ekf[c], rec.x_model_pred[c] + rec.n_hat[c]);
            let resid = rec.measurement[c] - rec.x_ekf[c];
            assert!((rec.x_ekf[c] + resid - rec.measurement[c]).abs() <= 1e-15);
        }
    }
    assert_eq!(windows.iter().filter(|w| w.segment == 1).count(), 58);
    let plain = Estimator::new(
        NetworkConfig { outputs: NUM_COEFFS, ..est.config },
        GuardBounds::from_coefficients(&CoefficientBounds::sim()),
        est.known,
        0,
    )
    .unwrap();
    assert!(matches!(ekf_forward(&plain, &windows, 0.1), Err(Error::SchemaMismatch(_))));
}

#[test]
fn noise_estimates_track_injected_noise() {
    let clean = clean_samples(400);
    let noisy = inject_noise(&clean, [0.05, 0.02, 0.01], 7).unwrap();
    let est = pinned_estimator([1e-4; 3], [1e-3; 3]);
    let mean_abs = |s: &[SimSample]| {
        let recs = ekf_forward(&est, &window(&raw(s), 2).unwrap(), 0.1).unwrap();
        recs.iter().map(|r| r.n_hat.iter().map(|v| v.abs()).sum::<f64>()).sum::<f64>()
            / recs.len() as f64
    };
    let (c, n) = (mean_abs(&clean), mean_abs(&noisy));
    assert!(c < 1e-3 * n, "clean {c} noisy {n}");
}

#[test]
fn closed_loop_filter_feeds_back_filtered_history() {
    let clean = clean_samples(200);
    let noisy = raw(&inject_noise(&clean, [0.05, 0.02, 0.01], 9).unwrap());
    let est = ekf_estimator(&EkfCovBounds::published(), 3);
    let windows = window(&noisy, 2).unwrap();
    let open = ekf_forward(&est, &windows, 0.1).unwrap();
    let closed = ekf_filter(&est, &windows, 0.1).unwrap();
    assert_eq!(open[0], closed[0]);
    assert_ne!(open[5].x_model_pred, closed[5].x_model_pred);
    // Window 5 (label row 7) sees the filtered rows 5 and 6.
    let mut history = windows[5].history.clone();
    history[0][..3].copy_from_slice(&closed[3].x_ekf);
    history[1][..3].copy_from_slice(&closed[4].x_ekf);
    let pred = est.forward(&history, windows[5].t_now, windows[5].t_next).unwrap();
    assert_eq!(pred.x_hat_next, closed[5].x_model_pred);
    for r in &closed {
        for c in 0..3 {
            assert_eq!(r.x_ekf[c], r.x_model_pred[c] + r.n_hat[c]);
        }
    }
}

#[test]
fn recorded_filter_matches_plain_filter() {
    let mut samples = raw(&clean_samples(80));
    for s in &mut samples[30..] {
        s.time += 1.0;
    }
    let windows = window(&samples, 2).unwrap();
    let cov = EkfCovBounds::published();
    let est = ekf_estimator(&cov, 5);
    let settings = EkfSettings { p0: 0.1, sequence_length: 6 };
    let obj = EkfObjective::new(&windows, &windows, LossWeights::supervised_only(), settings).unwrap();
    // Sequences starting mid-segment, across the gap, and at the very start.
    for start in [0, 10, 25] {
        let mut tape = Tape::new();
        let (l, _) = obj.record_sequences(&est, &mut tape, &[start], false).unwrap();
        let seq = &windows[start..start + 6];
        let recs = ekf_forward(&est, seq, 0.1).unwrap();
        let x: Vec<[f64; 3]> = recs.iter().map(|r| r.x_ekf).collect();
        let z: Vec<[f64; 3]> = recs.iter().map(|r| r.measurement).collect();
        let expected = loss_ekf_supervised(&x, &z);
        assert!(close(tape.value(l)[[0, 0]], expected, 1e-12), "start {start}");
    }
    // Several sequences at once average their losses.
    let mut tape = Tape::new();
    let (l, _) = obj.record_sequences(&est, &mut tape, &[0, 10, 25], false).unwrap();
    let each: f64 = [0, 10, 25]
        .iter()
        .map(|&s| {
            let mut t = Tape::new();
            let (v, _) = obj.record_sequences(&est, &mut t, &[s], false).unwrap();
            t.value(v)[[0, 0]]
        })
        .sum::<f64>()
        / 3.0;
    assert!(close(tape.value(l)[[0, 0]], each, 1e-12));
}

#[test]
fn denoised_signal_derivative_matches_finite_differences() {
    let samples = raw(&clean_samples(60));
    let windows = window(&samples, 2).unwrap();
    let cov = EkfCovBounds::published();
    let est = ekf_estimator(&cov, 6);
    let w = windows[20].clone();
    let p = random_spd(&mut ChaCha8Rng::seed_from_u64(6), 0.2);

    // Y fixed at its nominal value; x̂ and K move with t_next.
    let y0: [f64; 3] = {
        let pred = est.forward(&w.history, w.t_now, w.t_next).unwrap();
        std::array::from_fn(|i| w.label[i] - pred.x_hat_next[i])
    };
    let denoised = |t: f64| -> [f64; 3] {
        let pred = est.forward(&w.history, w.t_now, t).unwrap();
        let (q, r) = covariances(&pred.phi);
        let u = ekf_update(pred.x_hat_next, w.label, pred.x_hat_next[2], t - w.t_now, &p, q, r)
            .unwrap();
        let ky = matvec(&u.k, &y0);
        std::array::from_fn(|i| pred.x_hat_next[i] - ky[i])
    };

    let mut tape = Tape::new();
    let batch = Batch::from_windows([&w]).unwrap();
    let g = est.record(&mut tape, &batch, false, true).unwrap();
    let q: [Dual; 3] = std::array::from_fn(|j| tape.d_column(g.phi, NUM_COEFFS + j));
    let r: [Dual; 3] = std::array::from_fn(|j| tape.d_column(g.phi, NUM_COEFFS + 3 + j));
    let dt = Dual { v: tape.constant(batch.dt.clone()), t: Some(tape.constant(Array2::ones((1, 1)))) };
    let pd: DMat = std::array::from_fn(|i| {
        std::array::from_fn(|j| tape.d_const(Array2::from_elem((1, 1), p[i][j])))
    });
    let step = record_ekf_step(&mut tape, g.x_hat, &batch.labels, q, r, dt, &pd);
    let tangent = tape.value(step.denoised.t.unwrap()).clone();
    let value = tape.value(step.denoised.v).clone();

    let h = 1e-6;
    let (a, b) = (denoised(w.t_next + h), denoised(w.t_next - h));
    let nominal = denoised(w.t_next);
    for c in 0..3 {
        assert!(close(value[[0, c]], nominal[c], 1e-12));
        let fd = (a[c] - b[c]) / (2.0 * h);
        assert!((tangent[[0, c]] - fd).abs() <= 1e-5 * fd.abs().max(1.0), "{c}: {} vs {fd}", tangent[[0, c]]);
    }
}

#[test]
fn filter_objective_gradients_match_finite_differences() {
    let samples = raw(&clean_samples(80));
    let windows = window(&samples, 2).unwrap();
    let cov = EkfCovBounds::published();
    let config = NetworkConfig { hidden_layers: 1, hidden_size: 2, gru_layers: 0, history: 2, outputs: EKF_OUTPUTS };
    let est = Estimator::new(config, cov.guard_bounds(&CoefficientBounds::sim()).unwrap(), KnownCoefficients::scale_car(), 8).unwrap();
    let settings = EkfSettings { p0: 0.1, sequence_length: 3 };
    for w2 in [0.0, 0.3] {
        let weights = LossWeights::new(1.0 - w2, w2).unwrap();
        let obj = EkfObjective::new(&windows, &windows, weights, settings).unwrap();
        let starts = [4, 30];
        let value = |e: &Estimator| {
            let mut t = Tape::new();
            let (l, _) = obj.record_sequences(e, &mut t, &starts, false).unwrap();
            t.value(l)[[0, 0]]
        };
        let mut tape = Tape::new();
        let (l, leaves) = obj.record_sequences(&est, &mut tape, &starts, true).unwrap();
        let grads = est.collect_gradients(&leaves, &tape.backward(l));
        let h = 1e-5;
        for (bi, block) in est.params.blocks.iter().enumerate() {
            let (mut diff, mut norm) = (0.0, 0.0);
            for (ti, t) in block.tensors.iter().enumerate() {
                for idx in 0..t.len() {
                    let mut plus = est.clone();
                    let mut minus = est.clone();
                    let (r, c) = (idx / t.ncols(), idx % t.ncols());
                    plus.params.blocks[bi].tensors[ti][[r, c]] += h;
                    minus.params.blocks[bi].tensors[ti][[r, c]] -= h;
                    let fd = (value(&plus) - value(&minus)) / (2.0 * h);
                    let an = grads[bi].as_ref().unwrap()[ti][[r, c]];
                    diff += (an - fd).powi(2);
                    norm += fd * fd;
                }
            }
            let rel = diff.sqrt() / norm.sqrt().max(1e-300);
            assert!(rel < 1e-5, "w2 {w2} block {bi}: {rel}");
        }
    }
}

#[test]
fn ekf_finetune_runs_and_respects_freezing() {
    let samples = raw(&inject_noise(&clean_samples(300), [0.05, 0.02, 0.01], 1).unwrap());
    let windows = window(&samples, 2).unwrap();
    let cov = EkfCovBounds::for_noise([0.05, 0.02, 0.01]);
    let pre = pretrain(ekf_estimator(&cov, 2), &windows, &windows, &TrainRunConfig::pretrain(100, 32, 3e-3, 2))
        .unwrap();
    let cfg = TrainRunConfig::finetune(60, 32, 3e-3, 2, 1);
    let out = finetune_ekf(&pre.estimator, &windows, &windows, &cfg, &EkfSettings::default()).unwrap();
    assert_eq!(out.report.train_loss.len(), 60);
    for i in 0..1 {
        assert_eq!(out.estimator.params.blocks[i].tensors, pre.estimator.params.blocks[i].tensors);
    }
    assert!(out.report.l_min.unwrap().is_finite());
}

#[test]
fn identity_filter_returns_measurements_and_round_trips() {
    let clean = clean_samples(150);
    let noisy = raw(&inject_noise(&clean, [0.05, 0.02, 0.01], 2).unwrap());
    // Huge Q, negligible R: K ≈ I.
    let cov = EkfCovBounds { lower: [10.0, 10.0, 10.0, 1e-14, 1e-14, 1e-14], upper: [20.0, 20.0, 20.0, 2e-14, 2e-14, 2e-14] };
    let est = ekf_estimator(&cov, 4);
    let out = denoise_dataset(&noisy, &est, &EkfSettings::default()).unwrap();
    assert_eq!(out.samples.len(), noisy.len());
    for (a, b) in out.samples.iter().zip(&noisy) {
        for c in 0..3 {
            assert!((a.velocities()[c] - b.velocities()[c]).abs() < 1e-10);
        }
        assert_eq!((a.time, a.throttle, a.steer, a.pose), (b.time, b.throttle, b.steer, b.pose));
    }
    let mut buf = Vec::new();
    crate::data::write_csv(&mut buf, &out.samples).unwrap();
    let back = read_csv(buf.as_slice()).unwrap();
    assert_eq!(back.samples, out.samples);

    let mut noise = Vec::new();
    out.write_noise_csv(&mut noise).unwrap();
    let text = String::from_utf8(noise).unwrap();
    assert!(text.starts_with("time,n_vx,n_vy,n_omega\n"));
    assert_eq!(text.lines().count(), noisy.len() + 1);
}

#[test]
fn denoising_reduces_error_against_clean_data() {
    let clean = clean_samples(500);
    let sigma = [0.05, 0.02, 0.01];
    let noisy = raw(&inject_noise(&clean, sigma, 3).unwrap());
    let clean = raw(&clean);
    // Yaw is stiff at this scale (one Euler step nearly resets ω from vy), so
    // its prediction carries little information and needs a loose Q.
    let q = [sigma[0] * sigma[0] / 25.0, sigma[1] * sigma[1] / 25.0, 10.0 * sigma[2] * sigma[2]];
    let est = pinned_estimator(q, sigma.map(|s| s * s));
    let out = denoise_dataset(&noisy, &est, &EkfSettings::default()).unwrap();
    for c in 0..3 {
        let rmse = |s: &[RawSample]| {
            (s.iter().zip(&clean).map(|(a, b)| (a.velocities()[c] - b.velocities()[c]).powi(2)).sum::<f64>()
                / s.len() as f64)
                .sqrt()
        };
        assert!(rmse(&out.samples) < rmse(&noisy), "channel {c}");
    }
}

#[test]
fn cov_bounds_validation() {
    EkfCovBounds::published().validate().unwrap();
    let b = EkfCovBounds::for_noise([0.05, 0.02, 0.01]);
    b.validate().unwrap();
    assert!((b.lower[3] - 0.0025).abs() < 1e-15);
    let mut bad = b;
    bad.lower[2] = 0.0;
    assert!(bad.validate().is_err());
    let g = b.guard_bounds(&CoefficientBounds::sim()).unwrap();
    assert_eq!(g.len(), EKF_OUTPUTS);
}

fn sim_bounds() -> CoefficientBounds {
    CoefficientBounds::sim()
}

#[test]
fn range_adjustment_examples() {
    let b = sim_bounds();
    let s = RangeAdjustSettings::default();
    let (same, hits) = adjust_once(&b.midpoint(), &b, &s).unwrap();
    assert_eq!(same, b);
    assert!(hits.is_empty());

    let mut est = b.midpoint();
    est.front.b = b.upper.front.b;
    let (next, hits) = adjust_once(&est, &b, &s).unwrap();
    let w = b.upper.front.b - b.lower.front.b;
    assert_eq!(next.upper.front.b, b.upper.front.b + 0.5 * w);
    assert_eq!(next.lower.front.b, b.lower.front.b);
    assert_eq!(hits.len(), 1);
    assert_eq!(hits[0].side, Side::Upper);
    assert_eq!(hits[0].coefficient, "b_f");

    // Non-negative coefficients stop at zero; signed ones keep going.
    let mut est = b.midpoint();
    est.front.d = b.lower.front.d;
    est.front.e = b.lower.front.e;
    let (next, _) = adjust_once(&est, &b, &s).unwrap();
    assert_eq!(next.lower.front.d, 0.0);
    let we = b.upper.front.e - b.lower.front.e;
    assert_eq!(next.lower.front.e, b.lower.front.e - 0.5 * we);

    let none = RangeAdjustSettings { max_rounds: 0, ..s };
    let r = adjust_ranges(&b, &none, |_| unreachable!()).unwrap();
    assert_eq!(r.bounds, b);
    assert!(r.log.is_empty());

    // The estimator keeps pushing against the new bound for two rounds.
    let mut calls = 0;
    let r = adjust_ranges(&b, &RangeAdjustSettings { max_rounds: 5, ..s }, |cur| {
        calls += 1;
        let mut e = cur.midpoint();
        if calls <= 2 {
            e.rear.c = cur.upper.rear.c;
        }
        Ok(e)
    })
    .unwrap();
    assert_eq!(calls, 3);
    assert_eq!(r.log.len(), 3);
    assert!(r.log[2].hits.is_empty());
    let w = b.upper.rear.c - b.lower.rear.c;
    assert!((r.bounds.upper.rear.c - (b.upper.rear.c + 0.5 * w + 0.5 * 1.5 * w)).abs() < 1e-12);

    assert!(adjust_once(&b.midpoint(), &b, &RangeAdjustSettings { epsilon_frac: 0.6, ..s }).is_err());
}

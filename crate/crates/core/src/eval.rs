//! Metrics, lateral-force sweeps and coefficient comparisons.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::dynamics::{CoefficientBounds, EstimatedCoefficients, COEFF_NAMES, NUM_COEFFS};
use crate::error::{Error, Result};
use crate::training::ValidationPoint;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub run_id: String,
    pub ratio: f64,
    pub samples: usize,
    /// Per channel (vx, vy, ω).
    pub rmse: [f64; 3],
    pub max_error: [f64; 3],
    pub l_min: Option<f64>,
}

impl MetricsReport {
    pub fn save_json(&self, path: impl AsRef<Path>) -> Result<()> {
        serde_json::to_writer_pretty(BufWriter::new(File::create(path)?), self)?;
        Ok(())
    }
}

pub fn compute_metrics(
    predictions: &[[f64; 3]],
    labels: &[[f64; 3]],
    history: &[ValidationPoint],
    ratio: f64,
    run_id: &str,
) -> Result<MetricsReport> {
    if predictions.is_empty() {
        return Err(Error::EmptyInput);
    }
    if predictions.len() != labels.len() {
        return Err(Error::SchemaMismatch(format!(
            "{} predictions for {} labels",
            predictions.len(),
            labels.len()
        )));
    }
    let mut sq = [0.0; 3];
    let mut max_error = [0.0f64; 3];
    for (p, l) in predictions.iter().zip(labels) {
        for c in 0..3 {
            let e = p[c] - l[c];
            sq[c] += e * e;
            max_error[c] = max_error[c].max(e.abs());
        }
    }
    let n = predictions.len() as f64;
    Ok(MetricsReport {
        run_id: run_id.to_owned(),
        ratio,
        samples: predictions.len(),
        rmse: sq.map(|s| (s / n).sqrt()),
        max_error,
        l_min: history.iter().map(|v| v.loss).reduce(f64::min),
    })
}

/// Lateral force per axle over a slip-angle grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ForceCurve {
    pub alpha: Vec<f64>,
    pub f_fy: Vec<f64>,
    pub f_ry: Vec<f64>,
}

pub const DEFAULT_SWEEP: (f64, f64) = (-0.3, 0.3);
pub const DEFAULT_SWEEP_POINTS: usize = 121;

/// Tire force at each geometric slip angle; the horizontal shift is applied
/// as in the state equation.
pub fn force_sweep(
    coeffs: &EstimatedCoefficients,
    range: (f64, f64),
    points: usize,
) -> Result<ForceCurve> {
    let (lo, hi) = range;
    if points < 2 || !(lo < hi) || !lo.is_finite() || !hi.is_finite() {
        return Err(Error::InvalidConfig(format!(
            "sweep needs an increasing finite range and >= 2 points, got [{lo}, {hi}] x {points}"
        )));
    }
    let step = (hi - lo) / (points - 1) as f64;
    let alpha: Vec<f64> = (0..points)
        .map(|i| if i == points - 1 { hi } else { lo + step * i as f64 })
        .collect();
    Ok(ForceCurve {
        f_fy: alpha.iter().map(|a| coeffs.front.lateral(a + coeffs.front.sh)).collect(),
        f_ry: alpha.iter().map(|a| coeffs.rear.lateral(a + coeffs.rear.sh)).collect(),
        alpha,
    })
}

impl ForceCurve {
    /// Per-axle RMSE against `reference` on the same grid.
    pub fn rmse(&self, reference: &ForceCurve) -> Result<[f64; 2]> {
        if self.alpha != reference.alpha {
            return Err(Error::SchemaMismatch("force curves use different grids".into()));
        }
        let r = |a: &[f64], b: &[f64]| {
            (a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>() / a.len() as f64).sqrt()
        };
        Ok([r(&self.f_fy, &reference.f_fy), r(&self.f_ry, &reference.f_ry)])
    }

    /// Per-axle RMSE divided by the reference's peak |F|.
    pub fn relative_error(&self, reference: &ForceCurve) -> Result<[f64; 2]> {
        let rmse = self.rmse(reference)?;
        let peak = |v: &[f64]| v.iter().fold(0.0f64, |m, x| m.max(x.abs()));
        Ok([rmse[0] / peak(&reference.f_fy), rmse[1] / peak(&reference.f_ry)])
    }

    /// `alpha,f_fy,f_ry[,f_fy_gt,f_ry_gt]`.
    pub fn write_csv<W: Write>(&self, writer: W, ground_truth: Option<&ForceCurve>) -> Result<()> {
        if let Some(gt) = ground_truth {
            if gt.alpha != self.alpha {
                return Err(Error::SchemaMismatch("force curves use different grids".into()));
            }
        }
        let mut w = csv::Writer::from_writer(writer);
        let mut header = vec!["alpha", "f_fy", "f_ry"];
        if ground_truth.is_some() {
            header.extend(["f_fy_gt", "f_ry_gt"]);
        }
        w.write_record(&header)?;
        for i in 0..self.alpha.len() {
            let mut row = vec![self.alpha[i], self.f_fy[i], self.f_ry[i]];
            if let Some(gt) = ground_truth {
                row.extend([gt.f_fy[i], gt.f_ry[i]]);
            }
            w.write_record(row.iter().map(f64::to_string))?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn save_csv(&self, path: impl AsRef<Path>, ground_truth: Option<&ForceCurve>) -> Result<()> {
        self.write_csv(BufWriter::new(File::create(path)?), ground_truth)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoefficientDiff {
    pub name: String,
    pub estimated: f64,
    pub ground_truth: f64,
    pub absolute: f64,
    /// `|est − gt| / (ub − lb)`.
    pub normalized: f64,
}

pub fn coefficient_diff(
    estimated: &[f64],
    ground_truth: &[f64],
    bounds: &CoefficientBounds,
) -> Result<Vec<CoefficientDiff>> {
    if estimated.len() != NUM_COEFFS || ground_truth.len() != NUM_COEFFS {
        return Err(Error::SchemaMismatch(format!(
            "expected {NUM_COEFFS} coefficients, got {} and {}",
            estimated.len(),
            ground_truth.len()
        )));
    }
    let widths = bounds.widths();
    Ok((0..NUM_COEFFS)
        .map(|i| {
            let absolute = (estimated[i] - ground_truth[i]).abs();
            CoefficientDiff {
                name: COEFF_NAMES[i].to_owned(),
                estimated: estimated[i],
                ground_truth: ground_truth[i],
                absolute,
                normalized: absolute / widths[i],
            }
        })
        .collect())
}

/// `coefficient,estimated,ground_truth,abs_diff,norm_diff`.
pub fn write_coefficient_diff<W: Write>(writer: W, diffs: &[CoefficientDiff]) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["coefficient", "estimated", "ground_truth", "abs_diff", "norm_diff"])?;
    for d in diffs {
        w.write_record([
            d.name.clone(),
            d.estimated.to_string(),
            d.ground_truth.to_string(),
            d.absolute.to_string(),
            d.normalized.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub fn save_coefficient_diff(path: impl AsRef<Path>, diffs: &[CoefficientDiff]) -> Result<()> {
    write_coefficient_diff(BufWriter::new(File::create(path)?), diffs)
}

//! Evaluation metrics and per-field reports.
//!
//! Headings are measured in degrees with `(1, 0) -> 0` and
//! `(0, 1) -> +90`; heading errors are plain absolute differences unless
//! wrapping is requested. Threshold accuracies are inclusive
//! (`error <= delta` counts as a hit).

use serde::Serialize;

use crate::parallel;
use crate::{Error, Result};

/// Accuracy thresholds reported for every field.
pub const THRESHOLDS: [f64; 4] = [0.1, 0.5, 1.0, 5.0];

/// Euclidean distance between a predicted and a true point.
pub fn point_error(pred: (f64, f64), gt: (f64, f64)) -> f64 {
    let (dx, dy) = (pred.0 - gt.0, pred.1 - gt.1);
    (dx * dx + dy * dy).sqrt()
}

/// Heading of a displacement vector, in degrees.
pub fn heading_deg(p: (f64, f64)) -> Result<f64> {
    if p.0 == 0.0 && p.1 == 0.0 {
        return Err(Error::Input("heading of zero displacement is undefined".into()));
    }
    Ok(-(-p.1).atan2(p.0).to_degrees())
}

/// Absolute heading difference in degrees. Without wrapping this is a
/// plain difference; with wrapping, the difference modulo 360.
pub fn heading_error(pred: f64, gt: f64, wrap: bool) -> f64 {
    let d = (pred - gt).abs();
    if wrap {
        let r = d % 360.0;
        r.min(360.0 - r)
    } else {
        d
    }
}

pub fn speed_error(pred: f64, gt: f64) -> f64 {
    (pred - gt).abs()
}

/// L2 norm of an error vector divided by its element count.
pub fn normalized_l2(e: &[f64]) -> f64 {
    if e.is_empty() {
        return 0.0;
    }
    e.iter().map(|v| v * v).sum::<f64>().sqrt() / e.len() as f64
}

pub fn rmse(preds: &[f64], gts: &[f64]) -> Result<f64> {
    if preds.len() != gts.len() {
        return Err(Error::Input(format!(
            "rmse: {} predictions vs {} targets",
            preds.len(),
            gts.len()
        )));
    }
    if preds.is_empty() {
        return Err(Error::Input("rmse of empty sample".into()));
    }
    let ss: f64 = preds.iter().zip(gts).map(|(p, g)| (p - g) * (p - g)).sum();
    Ok((ss / preds.len() as f64).sqrt())
}

/// Fraction of errors at or below the threshold.
pub fn threshold_accuracy(errors: &[f64], delta: f64) -> f64 {
    if errors.is_empty() {
        return 0.0;
    }
    errors.iter().filter(|&&e| e <= delta).count() as f64 / errors.len() as f64
}

#[derive(Clone, Copy, Debug, Serialize)]
pub struct FieldMetrics {
    pub rmse: f64,
    /// Accuracies at [`THRESHOLDS`], in order.
    pub acc: [f64; 4],
}

/// Metrics from per-sample absolute errors (RMSE of errors equals RMSE
/// of predictions against targets).
pub fn field_metrics(errors: &[f64]) -> Result<FieldMetrics> {
    let zeros = vec![0.0; errors.len()];
    Ok(FieldMetrics {
        rmse: rmse(errors, &zeros)?,
        acc: THRESHOLDS.map(|t| threshold_accuracy(errors, t)),
    })
}

#[derive(Clone, Debug, Default, Serialize)]
pub struct MetricReport {
    pub fields: Vec<(String, FieldMetrics)>,
}

impl MetricReport {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("field,rmse,acc_0.1,acc_0.5,acc_1.0,acc_5.0\n");
        for (name, m) in &self.fields {
            out.push_str(&format!(
                "{name},{},{},{},{},{}\n",
                m.rmse, m.acc[0], m.acc[1], m.acc[2], m.acc[3]
            ));
        }
        out
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

/// Scalar-task evaluation: one predicted number per sample.
pub fn eval_scalar_batch(preds: &[f64], gts: &[f64], field: &str) -> Result<MetricReport> {
    if preds.len() != gts.len() {
        return Err(Error::Input(format!(
            "eval: {} predictions vs {} targets",
            preds.len(),
            gts.len()
        )));
    }
    let errors = parallel::map_range(preds.len(), |i| speed_error(preds[i], gts[i]));
    Ok(MetricReport { fields: vec![(field.to_string(), field_metrics(&errors)?)] })
}

/// One trajectory sample: start state plus predicted and true waypoints.
#[derive(Clone, Debug)]
pub struct TrajSample {
    pub start: (f64, f64),
    pub dt: f64,
    pub pred: Vec<(f64, f64)>,
    pub gt: Vec<(f64, f64)>,
}

/// Per-sample trajectory errors: mean waypoint point error, heading and
/// speed errors derived from the first displacement. A zero predicted
/// displacement scores the maximal unwrapped-on-circle heading error of
/// 180 degrees.
pub fn traj_errors(s: &TrajSample, wrap_heading: bool) -> Result<(f64, f64, f64)> {
    if s.pred.len() != s.gt.len() || s.gt.is_empty() {
        return Err(Error::Input(format!(
            "trajectory sample: {} predicted vs {} true waypoints",
            s.pred.len(),
            s.gt.len()
        )));
    }
    let point: f64 = s
        .pred
        .iter()
        .zip(&s.gt)
        .map(|(p, g)| point_error(*p, *g))
        .sum::<f64>()
        / s.gt.len() as f64;
    let gt_disp = (s.gt[0].0 - s.start.0, s.gt[0].1 - s.start.1);
    let pred_disp = (s.pred[0].0 - s.start.0, s.pred[0].1 - s.start.1);
    let gt_heading = heading_deg(gt_disp)?;
    let heading = match heading_deg(pred_disp) {
        Ok(h) => heading_error(h, gt_heading, wrap_heading),
        Err(_) => 180.0,
    };
    let norm = |d: (f64, f64)| (d.0 * d.0 + d.1 * d.1).sqrt();
    let speed = speed_error(norm(pred_disp) / s.dt, norm(gt_disp) / s.dt);
    Ok((point, heading, speed))
}

/// Trajectory-task evaluation over a batch; fields `point`, `heading`,
/// `speed`.
pub fn eval_traj_batch(samples: &[TrajSample], wrap_heading: bool) -> Result<MetricReport> {
    let per = parallel::map_collect(samples, |s| traj_errors(s, wrap_heading));
    let mut point = Vec::with_capacity(samples.len());
    let mut heading = Vec::with_capacity(samples.len());
    let mut speed = Vec::with_capacity(samples.len());
    for r in per {
        let (p, h, v) = r?;
        point.push(p);
        heading.push(h);
        speed.push(v);
    }
    Ok(MetricReport {
        fields: vec![
            ("point".to_string(), field_metrics(&point)?),
            ("heading".to_string(), field_metrics(&heading)?),
            ("speed".to_string(), field_metrics(&speed)?),
        ],
    })
}

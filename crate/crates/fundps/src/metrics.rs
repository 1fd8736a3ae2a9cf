//! Evaluation metrics: relative L2 error, binary classification error for
//! two-level coefficient fields, and CSV report emission.

use crate::error::{Error, Result};
use crate::field::Field;

/// Decision threshold separating the two Darcy coefficient levels (3 and
/// 12); their midpoint is 7.5.
pub const BINARY_THRESHOLD: f64 = 7.5;

/// |got - truth|_2 / |truth|_2. A zero-norm truth is rejected rather than
/// silently producing infinity.
pub fn rel_l2(got: &Field, truth: &Field) -> Result<f64> {
    if got.grid != truth.grid || got.channels != truth.channels {
        return Err(Error::ShapeMismatch("rel_l2 operands must share shape".into()));
    }
    let denom: f64 = truth.values().iter().map(|v| v * v).sum::<f64>().sqrt();
    if denom == 0.0 {
        return Err(Error::InvalidArgument("rel_l2 is undefined for a zero truth field".into()));
    }
    let num: f64 = got
        .values()
        .iter()
        .zip(truth.values())
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        .sqrt();
    Ok(num / denom)
}

/// Fraction of points classified on the wrong side of `threshold`.
pub fn binary_error(got: &Field, truth: &Field, threshold: f64) -> Result<f64> {
    if got.grid != truth.grid || got.channels != truth.channels {
        return Err(Error::ShapeMismatch("binary_error operands must share shape".into()));
    }
    let n = got.values().len();
    let wrong = got
        .values()
        .iter()
        .zip(truth.values())
        .filter(|(a, b)| (**a > threshold) != (**b > threshold))
        .count();
    Ok(wrong as f64 / n as f64)
}

/// RMS of (got - observed) over the observed points only.
pub fn observed_rms(got: &[f64], observed: &[f64]) -> Result<f64> {
    if got.len() != observed.len() {
        return Err(Error::ShapeMismatch("observation vectors must share length".into()));
    }
    if got.is_empty() {
        return Err(Error::InvalidArgument("no observed points".into()));
    }
    let s: f64 = got
        .iter()
        .zip(observed)
        .map(|(a, b)| (a - b) * (a - b))
        .sum();
    Ok((s / got.len() as f64).sqrt())
}

/// One evaluated reconstruction.
#[derive(Debug, Clone)]
pub struct EvalResult {
    pub sample: usize,
    pub task: String,
    pub rel_l2_a: f64,
    pub rel_l2_u: f64,
    pub binary_err: Option<f64>,
}

/// CSV table over a batch of evaluations, one row per sample.
pub fn eval_csv(rows: &[EvalResult]) -> String {
    let mut s = String::from("sample,task,rel_l2_a,rel_l2_u,binary_err\n");
    for r in rows {
        let be = r
            .binary_err
            .map(|v| format!("{v:.6e}"))
            .unwrap_or_default();
        s.push_str(&format!(
            "{},{},{:.6e},{:.6e},{}\n",
            r.sample, r.task, r.rel_l2_a, r.rel_l2_u, be
        ));
    }
    s
}

//! Comparison metrics for fitted quantile models.

use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::losses::QuantileLevel;
use crate::net::{Activation, Mlp};
use crate::trainers::{AlphaFit, FitResult, MethodKind};
use crate::{Error, Result};

/// Anything that maps a feature row to a predicted quantile.
pub trait Predictor {
    fn predict(&self, x: &[f64]) -> Result<f64>;
}

impl Predictor for Mlp {
    fn predict(&self, x: &[f64]) -> Result<f64> {
        self.forward(x)
    }
}

impl Predictor for AlphaFit {
    fn predict(&self, x: &[f64]) -> Result<f64> {
        AlphaFit::predict(self, x)
    }
}

impl<F: Fn(&[f64]) -> f64> Predictor for F {
    fn predict(&self, x: &[f64]) -> Result<f64> {
        Ok(self(x))
    }
}

pub fn predictions(model: &dyn Predictor, data: &Dataset) -> Result<Vec<f64>> {
    (0..data.len())
        .map(|i| model.predict(data.row(i)))
        .collect()
}

/// `sqrt(Σ (f_a(x) - f_b(x))²)` over the rows of `eval_points`.
pub fn frobenius_distance(
    a: &dyn Predictor,
    b: &dyn Predictor,
    eval_points: &Dataset,
) -> Result<f64> {
    if eval_points.is_empty() {
        return Err(Error::Data("no evaluation points".into()));
    }
    let mut sum = 0.0;
    for i in 0..eval_points.len() {
        let x = eval_points.row(i);
        let d = a.predict(x)? - b.predict(x)?;
        sum += d * d;
    }
    Ok(sum.sqrt())
}

/// Fraction of rows with `y ≤ f(x)`.
pub fn empirical_coverage(model: &dyn Predictor, data: &Dataset) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::Data("coverage on an empty dataset".into()));
    }
    let mut below = 0usize;
    for i in 0..data.len() {
        if data.responses()[i] <= model.predict(data.row(i))? {
            below += 1;
        }
    }
    Ok(below as f64 / data.len() as f64)
}

/// Mean squared error of a median model, optionally over inlier rows only.
pub fn median_mse(model: &dyn Predictor, data: &Dataset, inliers_only: bool) -> Result<f64> {
    let mut sum = 0.0;
    let mut count = 0usize;
    for i in 0..data.len() {
        if inliers_only && !data.is_inlier(i) {
            continue;
        }
        let e = data.responses()[i] - model.predict(data.row(i))?;
        sum += e * e;
        count += 1;
    }
    if count == 0 {
        return Err(Error::Data("no rows to average over".into()));
    }
    Ok(sum / count as f64)
}

/// Intercept and slopes of a single-layer identity model in the original
/// (unstandardised) units.
pub fn linear_coefficients(fit: &AlphaFit) -> Option<Vec<f64>> {
    let layers = fit.model.layers();
    if layers.len() != 1 || layers[0].activation != Activation::Identity {
        return None;
    }
    let s = &fit.scaler;
    let w = fit.model.weights(0);
    let b = fit.model.biases(0)[0];
    let slopes: Vec<f64> = w
        .iter()
        .zip(&s.feature_std)
        .map(|(w, sd)| w * s.response_std / sd)
        .collect();
    let intercept = s.response_mean + s.response_std * b
        - slopes
            .iter()
            .zip(&s.feature_mean)
            .map(|(slope, m)| slope * m)
            .sum::<f64>();
    let mut out = vec![intercept];
    out.extend(slopes);
    Some(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub method: MethodKind,
    pub alpha: QuantileLevel,
    /// In response units over every row of the evaluation data.
    pub frobenius_to_reference: f64,
    /// The same distance divided by the response standard deviation.
    pub frobenius_standardized: f64,
    pub coverage: f64,
    /// Only at α = 0.5, over inlier rows.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub median_mse: Option<f64>,
    /// Euclidean distance of (intercept, slopes) to the reference, linear
    /// models only.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub parameter_distance: Option<f64>,
    pub final_loss: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub dataset: String,
    pub records: Vec<EvalRecord>,
    pub seed: u64,
    /// Resolved run configuration, filled in by the caller.
    #[serde(default)]
    pub config: serde_json::Value,
    /// Omitted unless timing was requested, so reports stay reproducible.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub wall_time_secs: Option<f64>,
}

impl EvalReport {
    pub fn record(&self, method: MethodKind, alpha: QuantileLevel) -> Option<&EvalRecord> {
        self.records
            .iter()
            .find(|r| r.method == method && r.alpha == alpha)
    }
}

fn response_std(data: &Dataset) -> f64 {
    let n = data.len() as f64;
    let mean = data.responses().iter().sum::<f64>() / n;
    let var = data
        .responses()
        .iter()
        .map(|y| (y - mean).powi(2))
        .sum::<f64>()
        / n;
    if var > 0.0 {
        var.sqrt()
    } else {
        1.0
    }
}

/// One record per (method, α) of `fits`, each compared with the reference
/// fit at the same α over all rows of `data`.
pub fn build_report(
    fits: &[FitResult],
    reference: &FitResult,
    data: &Dataset,
) -> Result<EvalReport> {
    let scale = response_std(data);
    let mut records = Vec::new();
    for fit in fits {
        for af in &fit.fits {
            let target = reference.fit_for(af.alpha).ok_or_else(|| {
                Error::Data(format!("reference has no fit at alpha {}", af.alpha))
            })?;
            let frob = frobenius_distance(af, target, data)?;
            let parameter_distance = match (linear_coefficients(af), linear_coefficients(target)) {
                (Some(a), Some(b)) => Some(
                    a.iter()
                        .zip(&b)
                        .map(|(x, y)| (x - y).powi(2))
                        .sum::<f64>()
                        .sqrt(),
                ),
                _ => None,
            };
            let median_mse = if af.alpha.value() == 0.5 {
                Some(median_mse(af, data, true)?)
            } else {
                None
            };
            records.push(EvalRecord {
                method: fit.method,
                alpha: af.alpha,
                frobenius_to_reference: frob,
                frobenius_standardized: frob / scale,
                coverage: empirical_coverage(af, data)?,
                median_mse,
                parameter_distance,
                final_loss: af.final_loss,
            });
        }
    }
    Ok(EvalReport {
        dataset: data.name().to_string(),
        records,
        seed: fits
            .first()
            .map_or(reference.config.seed, |f| f.config.seed),
        config: serde_json::Value::Null,
        wall_time_secs: None,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn points(xs: &[f64]) -> Dataset {
        Dataset::new("p", xs.to_vec(), 1, vec![0.0; xs.len()]).unwrap()
    }

    #[test]
    fn frobenius_basics() {
        let pts = points(&[0.0, 1.0, 2.0, 3.0]);
        let f = |x: &[f64]| x[0];
        let g = |x: &[f64]| x[0] + 1.0;
        assert_eq!(frobenius_distance(&f, &f, &pts).unwrap(), 0.0);
        assert_eq!(frobenius_distance(&f, &g, &pts).unwrap(), 2.0);
    }

    #[test]
    fn frobenius_three_four_five() {
        let pts = points(&[1.0, 2.0]);
        let a = |x: &[f64]| x[0];
        let b = |x: &[f64]| if x[0] == 1.0 { 4.0 } else { 6.0 };
        assert!((frobenius_distance(&a, &b, &pts).unwrap() - 5.0).abs() < 1e-15);
    }

    #[test]
    fn coverage_extremes() {
        let d = Dataset::new("c", vec![0.0, 1.0, 2.0], 1, vec![-1.0, 3.0, 10.0]).unwrap();
        assert_eq!(empirical_coverage(&|_: &[f64]| 1e300, &d).unwrap(), 1.0);
        assert_eq!(empirical_coverage(&|_: &[f64]| -1e300, &d).unwrap(), 0.0);
        // closed inequality
        assert_eq!(empirical_coverage(&|_: &[f64]| 3.0, &d).unwrap(), 2.0 / 3.0);
    }

    #[test]
    fn median_mse_cases() {
        let d = Dataset::new("m", vec![0.0, 1.0, 2.0], 1, vec![1.0, 2.0, 30.0])
            .unwrap()
            .with_mask(vec![true, true, false])
            .unwrap();
        let exact = |x: &[f64]| [1.0, 2.0, 30.0][x[0] as usize];
        assert_eq!(median_mse(&exact, &d, false).unwrap(), 0.0);
        let offset = |x: &[f64]| exact(x) + 0.5;
        assert!((median_mse(&offset, &d, false).unwrap() - 0.25).abs() < 1e-15);
        let wrong_outlier = |x: &[f64]| if x[0] == 2.0 { 0.0 } else { exact(x) };
        assert_eq!(median_mse(&wrong_outlier, &d, true).unwrap(), 0.0);
        assert!(median_mse(&wrong_outlier, &d, false).unwrap() > 0.0);
    }

    proptest! {
        #[test]
        fn frobenius_is_a_metric(
            xs in prop::collection::vec(-5f64..5.0, 1..20),
            ca in prop::collection::vec(-3f64..3.0, 3),
            cb in prop::collection::vec(-3f64..3.0, 3),
            cc in prop::collection::vec(-3f64..3.0, 3),
        ) {
            let pts = points(&xs);
            let poly = |c: Vec<f64>| move |x: &[f64]| c[0] + c[1] * x[0] + c[2] * x[0] * x[0];
            let (a, b, c) = (poly(ca), poly(cb), poly(cc));
            let ab = frobenius_distance(&a, &b, &pts).unwrap();
            let ba = frobenius_distance(&b, &a, &pts).unwrap();
            let bc = frobenius_distance(&b, &c, &pts).unwrap();
            let ac = frobenius_distance(&a, &c, &pts).unwrap();
            prop_assert!(ab >= 0.0);
            prop_assert!((ab - ba).abs() < 1e-12);
            prop_assert!(ac <= ab + bc + 1e-9);
        }
    }
}

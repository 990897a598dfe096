//! Z-score standardisation of features and responses.

use serde::{Deserialize, Serialize};

use crate::data::Dataset;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scaler {
    pub feature_mean: Vec<f64>,
    pub feature_std: Vec<f64>,
    pub response_mean: f64,
    pub response_std: f64,
}

impl Scaler {
    pub fn identity(n_features: usize) -> Self {
        Self {
            feature_mean: vec![0.0; n_features],
            feature_std: vec![1.0; n_features],
            response_mean: 0.0,
            response_std: 1.0,
        }
    }

    /// Population mean and standard deviation of every column. Constant
    /// columns keep a unit scale.
    pub fn fit(data: &Dataset) -> Self {
        let d = data.n_features();
        let mut feature_mean = Vec::with_capacity(d);
        let mut feature_std = Vec::with_capacity(d);
        for j in 0..d {
            let (m, s) = mean_std((0..data.len()).map(|i| data.row(i)[j]));
            feature_mean.push(m);
            feature_std.push(s);
        }
        let (response_mean, response_std) = mean_std(data.responses().iter().copied());
        Self {
            feature_mean,
            feature_std,
            response_mean,
            response_std,
        }
    }

    pub fn transform_features_into(&self, x: &[f64], out: &mut Vec<f64>) {
        out.clear();
        out.extend(
            x.iter()
                .zip(&self.feature_mean)
                .zip(&self.feature_std)
                .map(|((v, m), s)| (v - m) / s),
        );
    }

    pub fn transform_response(&self, y: f64) -> f64 {
        (y - self.response_mean) / self.response_std
    }

    pub fn inverse_response(&self, y: f64) -> f64 {
        y * self.response_std + self.response_mean
    }

    /// A standardised copy of `data`.
    pub fn transform(&self, data: &Dataset) -> Dataset {
        let mut features = Vec::with_capacity(data.features().len());
        let mut buf = Vec::new();
        for i in 0..data.len() {
            self.transform_features_into(data.row(i), &mut buf);
            features.extend_from_slice(&buf);
        }
        let responses = data
            .responses()
            .iter()
            .map(|&y| self.transform_response(y))
            .collect();
        data.with_values(features, responses)
    }
}

fn mean_std(values: impl Iterator<Item = f64> + Clone) -> (f64, f64) {
    let n = values.clone().count() as f64;
    let mean = values.clone().sum::<f64>() / n;
    let var = values.map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let std = var.sqrt();
    (
        mean,
        if std > 0.0 && std.is_finite() {
            std
        } else {
            1.0
        },
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn standardises_and_inverts() {
        let data =
            Dataset::new("t", vec![1.0, 2.0, 3.0, 4.0], 1, vec![2.0, 4.0, 6.0, 8.0]).unwrap();
        let s = Scaler::fit(&data);
        let z = s.transform(&data);
        let mean: f64 = z.responses().iter().sum::<f64>() / 4.0;
        let var: f64 = z.responses().iter().map(|v| v * v).sum::<f64>() / 4.0;
        assert!(mean.abs() < 1e-12 && (var - 1.0).abs() < 1e-12);
        assert!((s.inverse_response(z.responses()[2]) - 6.0).abs() < 1e-12);
    }

    #[test]
    fn constant_column_keeps_unit_scale() {
        let data = Dataset::new("t", vec![5.0, 5.0], 1, vec![1.0, 2.0]).unwrap();
        let s = Scaler::fit(&data);
        assert_eq!(s.feature_std, vec![1.0]);
    }
}

//! Datasets: CSV ingestion, the bundled CYG OB1 star cluster, and a
//! heteroscedastic synthetic generator with response-outlier injection.

use std::io::Read;
use std::path::Path;

use rand::seq::{index, SliceRandom};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::losses::QuantileLevel;
use crate::rng::{self, Stream};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    name: String,
    provenance: String,
    feature_names: Vec<String>,
    response_name: String,
    n_features: usize,
    /// Row-major, `len() × n_features`.
    features: Vec<f64>,
    responses: Vec<f64>,
    inlier_mask: Option<Vec<bool>>,
}

impl Dataset {
    pub fn new(
        name: impl Into<String>,
        features: Vec<f64>,
        n_features: usize,
        responses: Vec<f64>,
    ) -> Result<Self> {
        if n_features == 0 {
            return Err(Error::Data("dataset needs at least one feature".into()));
        }
        if responses.is_empty() {
            return Err(Error::Data("dataset is empty".into()));
        }
        if features.len() != responses.len() * n_features {
            return Err(Error::Data(format!(
                "{} feature values do not fill {} rows of {} features",
                features.len(),
                responses.len(),
                n_features
            )));
        }
        if let Some(i) = features.iter().position(|v| !v.is_finite()) {
            return Err(Error::Data(format!(
                "non-finite feature in row {}",
                i / n_features + 1
            )));
        }
        if let Some(i) = responses.iter().position(|v| !v.is_finite()) {
            return Err(Error::Data(format!("non-finite response in row {}", i + 1)));
        }
        let feature_names = if n_features == 1 {
            vec!["x".to_string()]
        } else {
            (0..n_features).map(|j| format!("x{j}")).collect()
        };
        Ok(Self {
            name: name.into(),
            provenance: String::new(),
            feature_names,
            response_name: "y".into(),
            n_features,
            features,
            responses,
            inlier_mask: None,
        })
    }

    pub fn with_mask(mut self, mask: Vec<bool>) -> Result<Self> {
        if mask.len() != self.len() {
            return Err(Error::Data(format!(
                "inlier mask has {} entries for {} rows",
                mask.len(),
                self.len()
            )));
        }
        self.inlier_mask = Some(mask);
        Ok(self)
    }

    pub fn with_provenance(mut self, provenance: impl Into<String>) -> Self {
        self.provenance = provenance.into();
        self
    }

    pub fn with_column_names(mut self, features: Vec<String>, response: String) -> Result<Self> {
        if features.len() != self.n_features {
            return Err(Error::Data("feature name count does not match".into()));
        }
        self.feature_names = features;
        self.response_name = response;
        Ok(self)
    }

    /// Same rows and metadata with new values (used for standardised copies).
    pub(crate) fn with_values(&self, features: Vec<f64>, responses: Vec<f64>) -> Self {
        Self {
            features,
            responses,
            ..self.clone()
        }
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn provenance(&self) -> &str {
        &self.provenance
    }

    pub fn feature_names(&self) -> &[String] {
        &self.feature_names
    }

    pub fn response_name(&self) -> &str {
        &self.response_name
    }

    pub fn len(&self) -> usize {
        self.responses.len()
    }

    pub fn is_empty(&self) -> bool {
        self.responses.is_empty()
    }

    pub fn n_features(&self) -> usize {
        self.n_features
    }

    pub fn features(&self) -> &[f64] {
        &self.features
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.features[i * self.n_features..(i + 1) * self.n_features]
    }

    pub fn responses(&self) -> &[f64] {
        &self.responses
    }

    pub fn inlier_mask(&self) -> Option<&[bool]> {
        self.inlier_mask.as_deref()
    }

    pub fn is_inlier(&self, i: usize) -> bool {
        self.inlier_mask.as_ref().is_none_or(|m| m[i])
    }

    /// Rows at `indices`, in that order; the mask follows along.
    pub fn subset(&self, indices: &[usize]) -> Result<Self> {
        if indices.is_empty() {
            return Err(Error::Data("subset would be empty".into()));
        }
        let mut features = Vec::with_capacity(indices.len() * self.n_features);
        let mut responses = Vec::with_capacity(indices.len());
        for &i in indices {
            features.extend_from_slice(self.row(i));
            responses.push(self.responses[i]);
        }
        Ok(Self {
            features,
            responses,
            inlier_mask: self
                .inlier_mask
                .as_ref()
                .map(|m| indices.iter().map(|&i| m[i]).collect()),
            ..self.clone()
        })
    }

    /// Inlier rows only; every row when there is no mask.
    pub fn inliers(&self) -> Result<Self> {
        let keep: Vec<usize> = (0..self.len()).filter(|&i| self.is_inlier(i)).collect();
        self.subset(&keep)
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CsvOptions {
    /// Defaults to `true`.
    pub no_header: bool,
    /// Feature columns by header name; default: every column that is neither
    /// the response nor the inlier column.
    pub feature_columns: Option<Vec<String>>,
    /// Default `y` when present, else the last non-inlier column.
    pub response_column: Option<String>,
    /// Default `inlier` when present.
    pub inlier_column: Option<String>,
}

pub fn load_csv(path: impl AsRef<Path>, options: &CsvOptions) -> Result<Dataset> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let name = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "csv".into());
    parse_csv(file, options, &name)
        .map(|d| d.with_provenance(format!("csv file {}", path.display())))
}

pub fn parse_csv<R: Read>(reader: R, options: &CsvOptions, name: &str) -> Result<Dataset> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(!options.no_header)
        .trim(csv::Trim::All)
        .from_reader(reader);

    let mut rows: Vec<csv::StringRecord> = Vec::new();
    for (i, record) in rdr.records().enumerate() {
        match record {
            Ok(r) => rows.push(r),
            Err(e) => {
                if let csv::ErrorKind::UnequalLengths {
                    expected_len, len, ..
                } = e.kind()
                {
                    return Err(Error::Data(format!(
                        "ragged row {}: expected {expected_len} fields, found {len}",
                        i + 1
                    )));
                }
                return Err(e.into());
            }
        }
    }
    let width = match rows.first() {
        Some(r) => r.len(),
        None => return Err(Error::Data("csv file has no data rows".into())),
    };
    let header: Vec<String> = if options.no_header {
        (0..width).map(|j| format!("c{j}")).collect()
    } else {
        rdr.headers()?.iter().map(str::to_string).collect()
    };
    if header.len() < 2 {
        return Err(Error::Data(
            "csv needs at least a feature and a response column".into(),
        ));
    }
    let find = |col: &str| -> Result<usize> {
        header
            .iter()
            .position(|h| h == col)
            .ok_or_else(|| Error::Config(format!("column `{col}` not found in csv header")))
    };

    let inlier_col = match &options.inlier_column {
        Some(c) => Some(find(c)?),
        None => header.iter().position(|h| h == "inlier"),
    };
    let response_col = match &options.response_column {
        Some(c) => find(c)?,
        None => match header.iter().position(|h| h == "y") {
            Some(j) => j,
            None => (0..header.len())
                .rev()
                .find(|&j| Some(j) != inlier_col)
                .expect("at least two columns"),
        },
    };
    let feature_cols: Vec<usize> = match &options.feature_columns {
        Some(cols) => cols.iter().map(|c| find(c)).collect::<Result<_>>()?,
        None => (0..header.len())
            .filter(|&j| j != response_col && Some(j) != inlier_col)
            .collect(),
    };
    if feature_cols.is_empty() {
        return Err(Error::Data("no feature columns".into()));
    }

    let number = |row: usize, col: usize, cell: &str| -> Result<f64> {
        let v: f64 = cell.parse().map_err(|_| Error::Parse {
            row,
            column: header[col].clone(),
            message: format!("`{cell}` is not a number"),
        })?;
        if !v.is_finite() {
            return Err(Error::Parse {
                row,
                column: header[col].clone(),
                message: format!("`{cell}` is not finite"),
            });
        }
        Ok(v)
    };

    let mut features = Vec::with_capacity(rows.len() * feature_cols.len());
    let mut responses = Vec::with_capacity(rows.len());
    let mut mask = inlier_col.map(|_| Vec::with_capacity(rows.len()));
    for (i, record) in rows.iter().enumerate() {
        let row = i + 1;
        for &j in &feature_cols {
            features.push(number(row, j, &record[j])?);
        }
        responses.push(number(row, response_col, &record[response_col])?);
        if let (Some(j), Some(mask)) = (inlier_col, mask.as_mut()) {
            mask.push(match &record[j] {
                "1" => true,
                "0" => false,
                other => {
                    return Err(Error::Parse {
                        row,
                        column: header[j].clone(),
                        message: format!("inlier flag must be 0 or 1, got `{other}`"),
                    })
                }
            });
        }
    }

    let mut data = Dataset::new(name, features, feature_cols.len(), responses)?.with_column_names(
        feature_cols.iter().map(|&j| header[j].clone()).collect(),
        header[response_col].clone(),
    )?;
    if let Some(mask) = mask {
        data = data.with_mask(mask)?;
    }
    Ok(data)
}

/// Writes `data` with a header; floats use the shortest representation that
/// parses back to the same bits.
pub fn write_csv(data: &Dataset, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut w = csv::Writer::from_path(path)?;
    let mut header: Vec<&str> = data.feature_names.iter().map(String::as_str).collect();
    header.push(&data.response_name);
    if data.inlier_mask.is_some() {
        header.push("inlier");
    }
    w.write_record(&header)?;
    for i in 0..data.len() {
        let mut record: Vec<String> = data.row(i).iter().map(|v| v.to_string()).collect();
        record.push(data.responses[i].to_string());
        if let Some(m) = &data.inlier_mask {
            record.push(if m[i] { "1" } else { "0" }.into());
        }
        w.write_record(&record)?;
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}

const STAR_CLUSTER_CSV: &str = include_str!("../assets/cyg_ob1.csv");

/// SHA-256 of the bundled `cyg_ob1.csv`.
pub const STAR_CLUSTER_SHA256: &str =
    "c68fb91ecfdd9c2f502e3bce93caf3b48966c8db1021e38f5ab136f5c1a6e1da";

const STAR_CLUSTER_PROVENANCE: &str = "Hertzsprung-Russell diagram of the star cluster CYG OB1 \
(47 stars; Rousseeuw & Leroy 1987, also distributed as robustbase::starsCYG). Also referred to \
as \"CYB OB1\". Feature: log effective surface temperature; response: log light intensity. \
The four giants with log temperature below 3.6 are marked as outliers.";

/// The 47-star CYG OB1 cluster with the four giant stars masked out.
pub fn star_cluster_dataset() -> Result<Dataset> {
    parse_star_cluster(STAR_CLUSTER_CSV.as_bytes(), "<bundled cyg_ob1.csv>")
}

/// Loads the star-cluster asset from disk, verifying it against the bundled
/// checksum.
pub fn star_cluster_from_path(path: impl AsRef<Path>) -> Result<Dataset> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    parse_star_cluster(&bytes, &path.display().to_string())
}

fn parse_star_cluster(bytes: &[u8], origin: &str) -> Result<Dataset> {
    let found = hex::encode(Sha256::digest(bytes));
    if found != STAR_CLUSTER_SHA256 {
        return Err(Error::Checksum {
            path: origin.to_string(),
            expected: STAR_CLUSTER_SHA256.to_string(),
            found,
        });
    }
    let options = CsvOptions {
        response_column: Some("log_light".into()),
        ..CsvOptions::default()
    };
    Ok(parse_csv(bytes, &options, "cyg_ob1")?.with_provenance(STAR_CLUSTER_PROVENANCE))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticSpec {
    pub n: usize,
    pub x_low: f64,
    pub x_high: f64,
    pub noise_scale: f64,
    pub heteroscedastic: bool,
    pub outlier_fraction: f64,
    pub outlier_magnitude: f64,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            n: 1000,
            x_low: 0.0,
            x_high: 10.0,
            noise_scale: 0.5,
            heteroscedastic: true,
            outlier_fraction: 0.01,
            outlier_magnitude: 20.0,
            seed: 0,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n == 0 {
            return Err(Error::Config(
                "synthetic sample count must be positive".into(),
            ));
        }
        if !(self.x_low.is_finite() && self.x_high.is_finite() && self.x_low < self.x_high) {
            return Err(Error::Config(format!(
                "synthetic domain needs x_low < x_high, got [{}, {}]",
                self.x_low, self.x_high
            )));
        }
        if self.heteroscedastic && self.x_high <= 0.0 {
            return Err(Error::Config(
                "heteroscedastic noise needs x_high > 0".into(),
            ));
        }
        if !(self.noise_scale > 0.0 && self.noise_scale.is_finite()) {
            return Err(Error::Config("noise_scale must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.outlier_fraction) {
            return Err(Error::Config(format!(
                "outlier_fraction must lie in [0, 1), got {}",
                self.outlier_fraction
            )));
        }
        if !(self.outlier_magnitude > 0.0 && self.outlier_magnitude.is_finite()) {
            return Err(Error::Config("outlier_magnitude must be positive".into()));
        }
        Ok(())
    }

    /// Noise standard deviation at `x`.
    pub fn noise_at(&self, x: f64) -> f64 {
        if self.heteroscedastic {
            self.noise_scale * (1.0 + x.abs() / self.x_high)
        } else {
            self.noise_scale
        }
    }

    /// `⌈fraction · n⌉`, tolerant of representation error in the fraction.
    pub fn outlier_count(&self) -> usize {
        let raw = self.outlier_fraction * self.n as f64;
        (raw - 1e-9).ceil().max(0.0) as usize
    }
}

/// Backbone of the synthetic law.
pub fn synthetic_mean(x: f64) -> f64 {
    x * x.sin()
}

/// `y = x·sin(x) + s(x)·ε`, then `⌈fraction·n⌉` responses shifted by
/// `±outlier_magnitude` with a fair random sign.
pub fn gen_synthetic(spec: &SyntheticSpec) -> Result<Dataset> {
    spec.validate()?;
    let mut rng = rng::stream(spec.seed, Stream::Synthetic);
    let mut xs = Vec::with_capacity(spec.n);
    let mut ys = Vec::with_capacity(spec.n);
    for _ in 0..spec.n {
        let x = rng.random_range(spec.x_low..spec.x_high);
        let eps: f64 = StandardNormal.sample(&mut rng);
        xs.push(x);
        ys.push(synthetic_mean(x) + spec.noise_at(x) * eps);
    }

    let mut mask = vec![true; spec.n];
    let mut orng = rng::stream(spec.seed, Stream::Outliers);
    let mut chosen = index::sample(&mut orng, spec.n, spec.outlier_count()).into_vec();
    chosen.sort_unstable();
    for i in chosen {
        let sign = if orng.random_bool(0.5) { 1.0 } else { -1.0 };
        ys[i] += sign * spec.outlier_magnitude;
        mask[i] = false;
    }

    Ok(Dataset::new("synthetic", xs, 1, ys)?
        .with_mask(mask)?
        .with_provenance(format!(
            "synthetic x*sin(x) law: n={}, x~U({}, {}), noise_scale={}, heteroscedastic={}, \
             outlier_fraction={}, outlier_magnitude={}, seed={}",
            spec.n,
            spec.x_low,
            spec.x_high,
            spec.noise_scale,
            spec.heteroscedastic,
            spec.outlier_fraction,
            spec.outlier_magnitude,
            spec.seed
        )))
}

/// Exact α-quantile of the clean synthetic law at `x`.
pub fn conditional_quantile_oracle(spec: &SyntheticSpec, x: f64, alpha: QuantileLevel) -> f64 {
    let z = Normal::standard().inverse_cdf(alpha.value());
    synthetic_mean(x) + spec.noise_at(x) * z
}

/// Seeded shuffle, then the first `round(val_fraction · N)` rows become the
/// validation part.
pub fn split(data: &Dataset, val_fraction: f64, seed: u64) -> Result<(Dataset, Dataset)> {
    if !(val_fraction > 0.0 && val_fraction < 1.0) {
        return Err(Error::Config(format!(
            "validation fraction must lie in (0, 1), got {val_fraction}"
        )));
    }
    let n = data.len();
    let n_val = (val_fraction * n as f64).round() as usize;
    if n_val == 0 || n_val == n {
        return Err(Error::Data(format!(
            "splitting {n} rows at fraction {val_fraction} leaves an empty part"
        )));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng::stream(seed, Stream::Split));
    let (val, train) = order.split_at(n_val);
    Ok((data.subset(train)?, data.subset(val)?))
}

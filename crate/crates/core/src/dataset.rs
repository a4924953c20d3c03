use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Floor applied to per-feature standard deviations.
pub const STD_FLOOR: f64 = 1e-6;

/// Per-feature mean and standard deviation of a sample set.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureStats {
    pub mean: Tensor,
    pub std: Tensor,
}

impl FeatureStats {
    pub fn of(features: &Tensor) -> Result<Self> {
        if features.rows() == 0 {
            return Err(Error::NoSamples);
        }
        let mean = features.col_mean();
        let std = features.col_var(&mean).map(|v| v.sqrt().max(STD_FLOOR));
        Ok(Self { mean, std })
    }

    pub fn identity(dim: usize) -> Self {
        Self {
            mean: Tensor::zeros(&[1, dim]),
            std: Tensor::full(&[1, dim], 1.0),
        }
    }

    pub fn dim(&self) -> usize {
        self.mean.cols()
    }

    /// `(x - mean) / std` per feature.
    pub fn normalize(&self, features: &Tensor) -> Result<Tensor> {
        self.check(features, "normalize")?;
        let c = self.dim();
        let (m, s) = (self.mean.data(), self.std.data());
        let data = features
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| (v - m[i % c]) / s[i % c])
            .collect();
        Ok(Tensor::from_parts(features.shape().to_vec(), data))
    }

    /// Inverse of [`normalize`](Self::normalize).
    pub fn denormalize(&self, features: &Tensor) -> Result<Tensor> {
        self.check(features, "denormalize")?;
        let c = self.dim();
        let (m, s) = (self.mean.data(), self.std.data());
        let data = features
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| v * s[i % c] + m[i % c])
            .collect();
        Ok(Tensor::from_parts(features.shape().to_vec(), data))
    }

    fn check(&self, features: &Tensor, op: &'static str) -> Result<()> {
        if features.shape().len() != 2 || features.cols() != self.dim() {
            return Err(Error::Shape {
                op,
                lhs: features.shape().to_vec(),
                rhs: self.mean.shape().to_vec(),
            });
        }
        Ok(())
    }
}

/// Feature matrix with one class label per row.
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledDataset {
    features: Tensor,
    labels: Vec<usize>,
    stats: FeatureStats,
}

impl LabeledDataset {
    pub fn new(features: Tensor, labels: Vec<usize>) -> Result<Self> {
        if features.shape().len() != 2 {
            return Err(Error::InvalidTensor(
                "dataset features must be a matrix".into(),
            ));
        }
        if features.rows() != labels.len() {
            return Err(Error::Shape {
                op: "dataset",
                lhs: features.shape().to_vec(),
                rhs: vec![labels.len()],
            });
        }
        if labels.is_empty() {
            return Err(Error::NoSamples);
        }
        let stats = FeatureStats::of(&features)?;
        Ok(Self {
            features,
            labels,
            stats,
        })
    }

    pub fn features(&self) -> &Tensor {
        &self.features
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn stats(&self) -> &FeatureStats {
        &self.stats
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.features.cols()
    }

    pub fn num_classes(&self) -> usize {
        self.labels.iter().max().map_or(0, |m| m + 1)
    }

    /// Same labels, features replaced (statistics recomputed).
    pub fn with_features(&self, features: Tensor) -> Result<Self> {
        Self::new(features, self.labels.clone())
    }

    /// Bounding box of the features, as `(min, max)` per column.
    pub fn feature_bounds(&self) -> (Vec<f64>, Vec<f64>) {
        feature_bounds(&self.features)
    }

    /// Renders `label,f0,...` CSV; `label_override` replaces every label (e.g. `-1` for noise dumps).
    pub fn to_csv(&self, label_override: Option<i64>) -> String {
        dump_csv(&self.features, |i| {
            label_override.unwrap_or(self.labels[i] as i64)
        })
    }
}

pub(crate) fn feature_bounds(features: &Tensor) -> (Vec<f64>, Vec<f64>) {
    let c = features.cols();
    let mut lo = vec![f64::INFINITY; c];
    let mut hi = vec![f64::NEG_INFINITY; c];
    for r in 0..features.rows() {
        for (j, &v) in features.row_slice(r).iter().enumerate() {
            lo[j] = lo[j].min(v);
            hi[j] = hi[j].max(v);
        }
    }
    (lo, hi)
}

/// CSV with header `label,f0,...,f{d-1}`.
pub fn dump_csv(features: &Tensor, label: impl Fn(usize) -> i64) -> String {
    let d = features.cols();
    let mut out = String::from("label");
    for j in 0..d {
        out.push_str(&format!(",f{j}"));
    }
    out.push('\n');
    for r in 0..features.rows() {
        out.push_str(&label(r).to_string());
        for v in features.row_slice(r) {
            out.push_str(&format!(",{v}"));
        }
        out.push('\n');
    }
    out
}

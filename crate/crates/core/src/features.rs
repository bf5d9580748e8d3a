use std::fmt;

use serde::{Deserialize, Serialize};

use crate::tensor::Matrix;

/// Which network produced a batch of representations.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum FeatureSource {
    /// Output of backbone `i` (after its modality adapter, when aligned).
    Backbone(usize),
    Joint,
    Student,
}

impl fmt::Display for FeatureSource {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            FeatureSource::Backbone(i) => write!(f, "backbone{i}"),
            FeatureSource::Joint => f.write_str("joint"),
            FeatureSource::Student => f.write_str("student"),
        }
    }
}

/// A `b×m` batch of representations together with where it came from.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureBatch {
    pub source: FeatureSource,
    pub values: Matrix,
}

impl FeatureBatch {
    pub fn new(source: FeatureSource, values: Matrix) -> Self {
        Self { source, values }
    }

    pub fn batch_size(&self) -> usize {
        self.values.rows()
    }

    pub fn dim(&self) -> usize {
        self.values.cols()
    }
}

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{ComparisonSummary, LambdaPoint, LambdaSearch, PerplexityResult};
use crate::corpus::Split;
use crate::error::{Error, Result};
use crate::locality::LocalityFeatureSet;

pub const REPORT_SCHEMA_VERSION: u32 = 1;

/// Non-finite floats are written as the strings `"inf"`, `"-inf"` and
/// `"nan"`, which JSON numbers cannot express.
pub(crate) mod float {
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    #[derive(Serialize, Deserialize)]
    #[serde(untagged)]
    pub(crate) enum Repr {
        Num(f64),
        Text(String),
    }

    pub(crate) fn to_repr(v: f64) -> Repr {
        if v.is_finite() {
            Repr::Num(v)
        } else if v.is_nan() {
            Repr::Text("nan".into())
        } else if v > 0.0 {
            Repr::Text("inf".into())
        } else {
            Repr::Text("-inf".into())
        }
    }

    pub(crate) fn from_repr<E: serde::de::Error>(r: Repr) -> Result<f64, E> {
        match r {
            Repr::Num(v) => Ok(v),
            Repr::Text(s) => match s.as_str() {
                "inf" => Ok(f64::INFINITY),
                "-inf" => Ok(f64::NEG_INFINITY),
                "nan" => Ok(f64::NAN),
                _ => Err(E::custom(format!("not a number: {s}"))),
            },
        }
    }

    pub(crate) fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        to_repr(*v).serialize(s)
    }

    pub(crate) fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        from_repr(Repr::deserialize(d)?)
    }
}

pub(crate) mod float_opt {
    use super::float::{from_repr, to_repr, Repr};
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    pub(crate) fn serialize<S: Serializer>(v: &Option<f64>, s: S) -> Result<S::Ok, S::Error> {
        v.map(to_repr).serialize(s)
    }

    pub(crate) fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Option<f64>, D::Error> {
        Option::<Repr>::deserialize(d)?.map(from_repr).transpose()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingSummary {
    #[serde(with = "float")]
    pub initial_loss: f64,
    #[serde(with = "float")]
    pub final_loss: f64,
    pub epochs: usize,
    pub skipped_samples: usize,
}

/// One feature set of an ablation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub features: LocalityFeatureSet,
    /// Scale per combination bit pattern.
    pub scales: BTreeMap<String, f64>,
    pub lambda: f64,
    pub lambda_curve: Vec<LambdaPoint>,
    #[serde(with = "float")]
    pub valid_perplexity: f64,
    pub test: PerplexityResult,
    /// Test perplexity minus that of the `none` row, when present.
    #[serde(with = "float_opt", default)]
    pub delta_vs_none: Option<f64>,
    #[serde(default)]
    pub training: Option<TrainingSummary>,
}

/// A single perplexity measurement outside an ablation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PerplexityEntry {
    pub label: String,
    pub split: Split,
    /// `None` for the bare model.
    pub lambda: Option<f64>,
    #[serde(default)]
    pub lambda_search: Option<LambdaSearch>,
    pub result: PerplexityResult,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub schema_version: u32,
    /// Resolved run configuration, recorded verbatim.
    pub config: serde_json::Value,
    #[serde(default)]
    pub rows: Vec<AblationRow>,
    #[serde(default)]
    pub evaluations: Vec<PerplexityEntry>,
    /// Mean style-match score per target style name.
    #[serde(default)]
    pub style_match: BTreeMap<String, f64>,
    #[serde(default)]
    pub comparison: Option<ComparisonSummary>,
}

impl EvalReport {
    pub fn new(config: serde_json::Value) -> Self {
        Self {
            schema_version: REPORT_SCHEMA_VERSION,
            config,
            rows: Vec::new(),
            evaluations: Vec::new(),
            style_match: BTreeMap::new(),
            comparison: None,
        }
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("report serializes");
        s.push('\n');
        s
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let report: Self = serde_json::from_str(text)?;
        if report.schema_version != REPORT_SCHEMA_VERSION {
            return Err(Error::Format(format!(
                "unsupported report schema version {}",
                report.schema_version
            )));
        }
        Ok(report)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        crate::io::write_atomic(path, self.to_json().as_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io_at(path, e))?;
        Self::from_json(&text)
    }
}

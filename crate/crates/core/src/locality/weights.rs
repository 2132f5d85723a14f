use std::fmt::Write as _;
use std::path::Path;

use super::LocalityFeatureSet;
use crate::error::{Error, Result};

/// One non-negative distance scale per locality combination.
///
/// Weights file format:
///
/// ```text
/// feature_set: style,source
/// restrict: style            # only for style-restricted weights
/// a_00 = 1.3
/// a_01 = 0.4
/// ...
/// ```
///
/// Bit patterns are written most significant bit first, one bit per active
/// feature; the empty feature set has the single pattern `a_`.
#[derive(Debug, Clone, PartialEq)]
pub struct LocalityWeights {
    features: LocalityFeatureSet,
    scales: Vec<f64>,
    restrict_style: bool,
}

impl LocalityWeights {
    /// All-ones scales: every distance passes through unchanged.
    pub fn identity(features: LocalityFeatureSet) -> Self {
        Self {
            features,
            scales: vec![1.0; features.combinations()],
            restrict_style: false,
        }
    }

    pub fn from_scales(features: LocalityFeatureSet, scales: Vec<f64>) -> Result<Self> {
        if scales.len() != features.combinations() {
            return Err(Error::Config(format!(
                "{} scales given for {} combinations",
                scales.len(),
                features.combinations()
            )));
        }
        if scales.iter().any(|s| !s.is_finite() || *s < 0.0) {
            return Err(Error::Data("scales must be finite and non-negative".into()));
        }
        Ok(Self {
            features,
            scales,
            restrict_style: false,
        })
    }

    pub fn features(&self) -> LocalityFeatureSet {
        self.features
    }

    pub fn scales(&self) -> &[f64] {
        &self.scales
    }

    pub fn scale(&self, combo: usize) -> f64 {
        self.scales[combo]
    }

    pub fn set_scale(&mut self, combo: usize, value: f64) {
        self.scales[combo] = value;
    }

    pub fn restricts_style(&self) -> bool {
        self.restrict_style
    }

    pub(crate) fn with_style_restriction(mut self) -> Self {
        self.restrict_style = true;
        self
    }

    pub fn bit_pattern(&self, combo: usize) -> String {
        let l = self.features.len();
        (0..l)
            .rev()
            .map(|b| if combo >> b & 1 == 1 { '1' } else { '0' })
            .collect()
    }

    pub fn to_text(&self) -> String {
        let mut out = format!("feature_set: {}\n", self.features);
        if self.restrict_style {
            out.push_str("restrict: style\n");
        }
        for (i, s) in self.scales.iter().enumerate() {
            let _ = writeln!(out, "a_{} = {}", self.bit_pattern(i), s);
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut lines = text
            .lines()
            .enumerate()
            .filter(|(_, l)| !l.trim().is_empty());
        let err = |line: usize, m: &str| Error::Parse {
            line: line + 1,
            message: m.to_string(),
        };
        let (i, first) = lines
            .next()
            .ok_or_else(|| Error::Format("empty weights file".into()))?;
        let features: LocalityFeatureSet = first
            .strip_prefix("feature_set:")
            .ok_or_else(|| err(i, "expected `feature_set:` header"))?
            .parse()?;
        let mut w = Self::identity(features);
        let mut seen = vec![false; w.scales.len()];
        for (i, line) in lines {
            if line.trim() == "restrict: style" {
                w = force_restrict(w).map_err(|_| err(i, "restriction needs style"))?;
                continue;
            }
            let (lhs, rhs) = line
                .split_once('=')
                .ok_or_else(|| err(i, "expected `a_<bits> = <value>`"))?;
            let bits = lhs
                .trim()
                .strip_prefix("a_")
                .ok_or_else(|| err(i, "expected `a_<bits>`"))?;
            if bits.len() != features.len() || !bits.chars().all(|c| c == '0' || c == '1') {
                return Err(err(i, "bit pattern does not match feature set"));
            }
            let combo = if bits.is_empty() {
                0
            } else {
                usize::from_str_radix(bits, 2).unwrap()
            };
            let value: f64 = rhs
                .trim()
                .parse()
                .map_err(|_| err(i, "scale is not a number"))?;
            if !value.is_finite() || value < 0.0 {
                return Err(err(i, "scale must be finite and non-negative"));
            }
            if std::mem::replace(&mut seen[combo], true) {
                return Err(err(i, "duplicate combination"));
            }
            w.scales[combo] = value;
        }
        if seen.iter().any(|s| !s) {
            return Err(Error::Format("weights file is missing combinations".into()));
        }
        Ok(w)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        crate::io::write_atomic(path, self.to_text().as_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io_at(path, e))?;
        Self::from_text(&text)
    }
}

fn force_restrict(w: LocalityWeights) -> Result<LocalityWeights> {
    super::force_style_restriction(&w)
}

#[cfg(test)]
mod tests {
    use super::super::Feature::*;
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn text_layout() {
        let fs = LocalityFeatureSet::of(&[Style, Source]);
        let mut w = LocalityWeights::identity(fs);
        w.set_scale(1, 0.25);
        assert_eq!(
            w.to_text(),
            "feature_set: style,source\na_00 = 1\na_01 = 0.25\na_10 = 1\na_11 = 1\n"
        );
        let none = LocalityWeights::identity(LocalityFeatureSet::NONE);
        assert_eq!(none.to_text(), "feature_set: none\na_ = 1\n");
        assert_eq!(LocalityWeights::from_text(&none.to_text()).unwrap(), none);
    }

    #[test]
    fn restricted_round_trip() {
        let fs = LocalityFeatureSet::of(&[Style]);
        let w = force_restrict(LocalityWeights::identity(fs)).unwrap();
        let back = LocalityWeights::from_text(&w.to_text()).unwrap();
        assert!(back.restricts_style());
        assert_eq!(back, w);
    }

    #[test]
    fn rejects_bad_files() {
        assert!(LocalityWeights::from_text("feature_set: style\na_0 = 1\n").is_err());
        assert!(LocalityWeights::from_text("feature_set: style\na_0 = 1\na_1 = -2\n").is_err());
        assert!(LocalityWeights::from_text("feature_set: style\na_0 = 1\na_0 = 1\n").is_err());
        assert!(LocalityWeights::from_text("feature_set: style\na_00 = 1\na_1 = 1\n").is_err());
        assert!(LocalityWeights::from_text(
            "feature_set: source\nrestrict: style\na_0 = 1\na_1 = 1\n"
        )
        .is_err());
    }

    proptest! {
        #[test]
        fn scales_round_trip_bit_exact(bits in 0usize..8, raw in prop::collection::vec(0.0f64..1e6, 8)) {
            let fs = LocalityFeatureSet { style: bits & 1 != 0, source: bits & 2 != 0, category: bits & 4 != 0 };
            let w = LocalityWeights::from_scales(fs, raw[..fs.combinations()].to_vec()).unwrap();
            let text = w.to_text();
            let back = LocalityWeights::from_text(&text).unwrap();
            prop_assert_eq!(&back, &w);
            prop_assert_eq!(back.to_text(), text);
        }
    }
}

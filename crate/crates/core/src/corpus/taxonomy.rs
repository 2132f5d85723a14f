use std::collections::HashSet;
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

const REFERENCE: &str = include_str!("../../data/reference_taxonomy.txt");

/// Frozen set of style, source and category names.
///
/// Indices are positions in the declaration order and never change once the
/// taxonomy is built. Every style belongs to exactly one category.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StyleTaxonomy {
    styles: Vec<String>,
    sources: Vec<String>,
    categories: Vec<String>,
    style_category: Vec<u16>,
}

/// The (style, source, category) annotation carried by documents, datastore
/// entries and queries.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct LocalityDescriptor {
    pub style: u16,
    pub source: u16,
    pub category: u16,
}

fn check_unique(kind: &str, names: &[String]) -> Result<()> {
    let mut seen = HashSet::new();
    for n in names {
        if n.is_empty() || n.chars().any(char::is_whitespace) {
            return Err(Error::Config(format!("invalid {kind} name {n:?}")));
        }
        if !seen.insert(n.as_str()) {
            return Err(Error::Config(format!("duplicate {kind} name {n:?}")));
        }
    }
    if names.len() > u16::MAX as usize {
        return Err(Error::Config(format!("too many {kind} names")));
    }
    Ok(())
}

impl StyleTaxonomy {
    /// `style_categories[i]` names the category of `styles[i]`.
    pub fn new(
        styles: Vec<String>,
        sources: Vec<String>,
        categories: Vec<String>,
        style_categories: &[&str],
    ) -> Result<Self> {
        check_unique("style", &styles)?;
        check_unique("source", &sources)?;
        check_unique("category", &categories)?;
        if styles.is_empty() || sources.is_empty() || categories.is_empty() {
            return Err(Error::Config(
                "taxonomy needs at least one style, source and category".into(),
            ));
        }
        if style_categories.len() != styles.len() {
            return Err(Error::Config(
                "every style must map to exactly one category".into(),
            ));
        }
        let style_category = style_categories
            .iter()
            .zip(&styles)
            .map(|(c, s)| {
                categories
                    .iter()
                    .position(|x| x == c)
                    .map(|i| i as u16)
                    .ok_or_else(|| {
                        Error::Config(format!("style {s:?} maps to unknown category {c:?}"))
                    })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            styles,
            sources,
            categories,
            style_category,
        })
    }

    /// The shipped nine-style / five-source reference taxonomy.
    pub fn reference() -> Self {
        Self::parse(REFERENCE).expect("reference taxonomy is well formed")
    }

    /// Small generic taxonomy for synthetic corpora: `n_categories` families,
    /// each holding `styles_per_category` styles, and `n_sources` sources.
    pub fn synthetic(n_categories: usize, styles_per_category: usize, n_sources: usize) -> Self {
        let categories: Vec<String> = (0..n_categories).map(|c| format!("fam{c}")).collect();
        let mut styles = Vec::new();
        let mut cats = Vec::new();
        for (c, cat) in categories.iter().enumerate() {
            for j in 0..styles_per_category {
                styles.push(format!("s{}", c * styles_per_category + j));
                cats.push(cat.as_str());
            }
        }
        let sources = (0..n_sources).map(|s| format!("src{s}")).collect();
        Self::new(styles, sources, categories.clone(), &cats).expect("synthetic taxonomy is valid")
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut categories = Vec::new();
        let mut styles = Vec::new();
        let mut style_cats = Vec::new();
        let mut sources = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let parts: Vec<&str> = line.split_whitespace().collect();
            let bad = |msg: &str| Error::Parse {
                line: i + 1,
                message: msg.to_string(),
            };
            match parts.as_slice() {
                ["category", name] => categories.push(name.to_string()),
                ["source", name] => sources.push(name.to_string()),
                ["style", name, cat] => {
                    styles.push(name.to_string());
                    style_cats.push(cat.to_string());
                }
                [kw, ..] if ["category", "source", "style"].contains(kw) => {
                    return Err(bad(&format!("wrong number of fields for `{kw}`")))
                }
                _ => return Err(bad(&format!("unrecognized taxonomy line {line:?}"))),
            }
        }
        let refs: Vec<&str> = style_cats.iter().map(String::as_str).collect();
        Self::new(styles, sources, categories, &refs)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io_at(path, e))?;
        Self::parse(&text)
    }

    /// Canonical text rendering; `parse(to_config_string())` yields `self`.
    pub fn to_config_string(&self) -> String {
        let mut out = String::new();
        for c in &self.categories {
            let _ = writeln!(out, "category {c}");
        }
        for (s, &c) in self.styles.iter().zip(&self.style_category) {
            let _ = writeln!(out, "style {s} {}", self.categories[c as usize]);
        }
        for s in &self.sources {
            let _ = writeln!(out, "source {s}");
        }
        out
    }

    /// SHA-256 of the canonical rendering. Comments and blank lines in the
    /// source file do not affect it.
    pub fn fingerprint(&self) -> [u8; 32] {
        Sha256::digest(self.to_config_string().as_bytes()).into()
    }

    pub fn styles(&self) -> &[String] {
        &self.styles
    }

    pub fn sources(&self) -> &[String] {
        &self.sources
    }

    pub fn categories(&self) -> &[String] {
        &self.categories
    }

    pub fn style_id(&self, name: &str) -> Option<u16> {
        self.styles.iter().position(|s| s == name).map(|i| i as u16)
    }

    pub fn source_id(&self, name: &str) -> Option<u16> {
        self.sources
            .iter()
            .position(|s| s == name)
            .map(|i| i as u16)
    }

    pub fn category_of(&self, style: u16) -> u16 {
        self.style_category[style as usize]
    }

    /// Descriptor with the category derived from the style.
    pub fn descriptor(&self, style: u16, source: u16) -> Result<LocalityDescriptor> {
        if style as usize >= self.styles.len() {
            return Err(Error::Data(format!("style id {style} out of range")));
        }
        if source as usize >= self.sources.len() {
            return Err(Error::Data(format!("source id {source} out of range")));
        }
        Ok(LocalityDescriptor {
            style,
            source,
            category: self.category_of(style),
        })
    }

    /// Checks index ranges and the style → category consistency.
    pub fn validate(&self, loc: &LocalityDescriptor) -> Result<()> {
        let expected = self.descriptor(loc.style, loc.source)?;
        if expected.category != loc.category {
            return Err(Error::Data(format!(
                "category {} inconsistent with style {}",
                loc.category, self.styles[loc.style as usize]
            )));
        }
        Ok(())
    }
}

use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::Path;

use super::records::{RawRecord, Split};
use crate::error::{Error, Result};

pub const UNK_TOKEN: &str = "<unk>";
pub const BOS_TOKEN: &str = "<s>";
pub const EOS_TOKEN: &str = "</s>";

/// Lowercases, splits on whitespace, then peels leading and trailing ASCII
/// punctuation off each word, one token per punctuation character.
///
/// `"So so awesome."` becomes `["so", "so", "awesome", "."]`.
pub fn split_tokens(text: &str) -> Vec<String> {
    let lower = text.to_lowercase();
    let mut out = Vec::new();
    for word in lower.split_whitespace() {
        let chars: Vec<char> = word.chars().collect();
        let lead = chars
            .iter()
            .take_while(|c| c.is_ascii_punctuation())
            .count();
        if lead == chars.len() {
            out.extend(chars.iter().map(|c| c.to_string()));
            continue;
        }
        let trail = chars
            .iter()
            .rev()
            .take_while(|c| c.is_ascii_punctuation())
            .count();
        out.extend(chars[..lead].iter().map(|c| c.to_string()));
        out.push(chars[lead..chars.len() - trail].iter().collect());
        out.extend(chars[chars.len() - trail..].iter().map(|c| c.to_string()));
    }
    out
}

/// Frozen token ↔ id map. Ids are dense; the three special tokens take ids
/// 0, 1 and 2.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    counts: Vec<u64>,
    index: HashMap<String, u32>,
    min_count: u64,
}

impl Vocabulary {
    pub const UNK: u32 = 0;
    pub const BOS: u32 = 1;
    pub const EOS: u32 = 2;

    /// Builds from the train-split records only. Tokens seen fewer than
    /// `min_count` times are dropped; survivors are ordered by descending
    /// count, then lexicographically.
    pub fn build(records: &[RawRecord], min_count: u64) -> Result<Self> {
        if min_count < 1 {
            return Err(Error::Config("min_count must be at least 1".into()));
        }
        let mut counts: HashMap<String, u64> = HashMap::new();
        let mut any = false;
        for r in records.iter().filter(|r| r.split == Split::Train) {
            any = true;
            for t in split_tokens(&r.text) {
                *counts.entry(t).or_default() += 1;
            }
        }
        if !any {
            return Err(Error::Data(
                "no training records to build a vocabulary from".into(),
            ));
        }
        let mut kept: Vec<(String, u64)> = counts
            .into_iter()
            .filter(|(_, c)| *c >= min_count)
            .collect();
        kept.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        let specials = [UNK_TOKEN, BOS_TOKEN, EOS_TOKEN]
            .into_iter()
            .map(|s| (s.to_string(), 0));
        Self::from_entries(specials.chain(kept).collect(), min_count)
    }

    fn from_entries(entries: Vec<(String, u64)>, min_count: u64) -> Result<Self> {
        let mut index = HashMap::with_capacity(entries.len());
        let mut tokens = Vec::with_capacity(entries.len());
        let mut counts = Vec::with_capacity(entries.len());
        for (i, (t, c)) in entries.into_iter().enumerate() {
            if index.insert(t.clone(), i as u32).is_some() {
                return Err(Error::Format(format!("duplicate vocabulary token {t:?}")));
            }
            tokens.push(t);
            counts.push(c);
        }
        let v = Self {
            tokens,
            counts,
            index,
            min_count,
        };
        if v.tokens.len() < 3
            || v.tokens[0] != UNK_TOKEN
            || v.tokens[1] != BOS_TOKEN
            || v.tokens[2] != EOS_TOKEN
        {
            return Err(Error::Format(
                "vocabulary must start with the special tokens".into(),
            ));
        }
        Ok(v)
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn min_count(&self) -> u64 {
        self.min_count
    }

    pub fn id_of(&self, token: &str) -> Option<u32> {
        self.index.get(token).copied()
    }

    pub fn token_of(&self, id: u32) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    pub fn count_of(&self, id: u32) -> Option<u64> {
        self.counts.get(id as usize).copied()
    }

    /// Out-of-vocabulary tokens map to [`Vocabulary::UNK`].
    pub fn tokenize(&self, text: &str) -> Vec<u32> {
        split_tokens(text)
            .iter()
            .map(|t| self.id_of(t).unwrap_or(Self::UNK))
            .collect()
    }

    /// Token strings joined by single spaces. The end-of-sequence marker is
    /// dropped; ids beyond the vocabulary render as `<unk>`.
    pub fn detokenize(&self, ids: &[u32]) -> String {
        ids.iter()
            .filter(|&&i| i != Self::EOS)
            .map(|&i| self.token_of(i).unwrap_or(UNK_TOKEN))
            .collect::<Vec<_>>()
            .join(" ")
    }

    /// Text format: a `min_count<TAB>n` header, then `token<TAB>count` per id.
    pub fn to_text(&self) -> String {
        let mut out = format!("min_count\t{}\n", self.min_count);
        for (t, c) in self.tokens.iter().zip(&self.counts) {
            let _ = writeln!(out, "{t}\t{c}");
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut lines = text.lines().enumerate();
        let parse_err = |line: usize, message: &str| Error::Parse {
            line: line + 1,
            message: message.to_string(),
        };
        let min_count = match lines.next() {
            Some((i, l)) => l
                .strip_prefix("min_count\t")
                .and_then(|v| v.parse().ok())
                .ok_or_else(|| parse_err(i, "expected `min_count<TAB>n` header"))?,
            None => return Err(Error::Format("empty vocabulary file".into())),
        };
        let mut entries = Vec::new();
        for (i, l) in lines {
            let (tok, count) = l
                .split_once('\t')
                .ok_or_else(|| parse_err(i, "expected `token<TAB>count`"))?;
            let count = count
                .parse()
                .map_err(|_| parse_err(i, "count is not an integer"))?;
            entries.push((tok.to_string(), count));
        }
        Self::from_entries(entries, min_count)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        crate::io::write_atomic(path, self.to_text().as_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io_at(path, e))?;
        Self::from_text(&text)
    }
}

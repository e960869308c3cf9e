use serde::{Deserialize, Serialize};
use unicode_segmentation::UnicodeSegmentation;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TokenPattern {
    /// Unicode word boundaries (UAX #29), punctuation dropped.
    UnicodeWords,
    Whitespace,
}

/// Hashing tokenizer: every token is mapped to `fnv1a64(token) % hash_buckets`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TokenizerConfig {
    pub hash_buckets: usize,
    pub lowercase: bool,
    pub pattern: TokenPattern,
}

impl Default for TokenizerConfig {
    fn default() -> Self {
        Self {
            hash_buckets: 4096,
            lowercase: true,
            pattern: TokenPattern::UnicodeWords,
        }
    }
}

impl TokenizerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.hash_buckets < 2 || !self.hash_buckets.is_power_of_two() {
            return Err(Error::InvalidConfig(format!(
                "hash_buckets must be a power of two >= 2, got {}",
                self.hash_buckets
            )));
        }
        Ok(())
    }
}

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

pub fn fnv1a64(bytes: &[u8]) -> u64 {
    bytes.iter().fold(FNV_OFFSET, |h, &b| {
        (h ^ u64::from(b)).wrapping_mul(FNV_PRIME)
    })
}

pub fn tokenize(text: &str, cfg: &TokenizerConfig) -> Result<Vec<usize>> {
    let folded;
    let text = if cfg.lowercase {
        folded = text.to_lowercase();
        folded.as_str()
    } else {
        text
    };
    let buckets = cfg.hash_buckets as u64;
    let hash = |tok: &str| (fnv1a64(tok.as_bytes()) % buckets) as usize;
    let ids: Vec<usize> = match cfg.pattern {
        TokenPattern::UnicodeWords => text.unicode_words().map(hash).collect(),
        TokenPattern::Whitespace => text.split_whitespace().map(hash).collect(),
    };
    if ids.is_empty() {
        return Err(Error::EmptyQuery(text.to_string()));
    }
    Ok(ids)
}

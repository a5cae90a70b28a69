//! Static token vocabulary: three reserved ids, whole-word carrier tokens
//! and two-letter entity sub-word pieces.

use std::ops::RangeInclusive;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type TokenId = usize;

pub const PAD: TokenId = 0;
pub const BOS: TokenId = 1;
pub const EOS: TokenId = 2;

const CARRIER_WORDS: &[&str] = &[
    "the", "a", "to", "call", "play", "from", "with", "and", "set", "send", "meet", "near", "at",
    "my", "for", "on", "in", "is", "by", "of", "it", "me", "up", "go", "now", "book", "find",
    "tell", "show", "open", "take", "ask", "stop", "this", "that", "next", "new", "ring", "text",
    "visit", "drive", "note", "add", "get", "see",
];

const CONSONANTS: &[char] = &[
    'k', 'r', 'm', 'n', 't', 's', 'l', 'v', 'd', 'z', 'p', 'g', 'h', 'b', 'f', 'j', 'w', 'y',
];
const VOWELS: &[char] = &['a', 'i', 'o', 'e', 'u'];

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VocabConfig {
    pub size: usize,
    pub carrier_first: TokenId,
    pub carrier_last: TokenId,
    pub entity_first: TokenId,
    pub entity_last: TokenId,
}

impl Default for VocabConfig {
    fn default() -> Self {
        Self {
            size: 64,
            carrier_first: 3,
            carrier_last: 39,
            entity_first: 40,
            entity_last: 63,
        }
    }
}

#[derive(Clone, Debug)]
pub struct Vocabulary {
    config: VocabConfig,
    surfaces: Vec<String>,
}

impl Vocabulary {
    pub fn new(config: VocabConfig) -> Result<Self> {
        let c = &config;
        if c.carrier_first > c.carrier_last || c.entity_first > c.entity_last {
            return Err(Error::Config("vocab: empty carrier or entity range".into()));
        }
        if c.carrier_first <= EOS || c.entity_first <= EOS {
            return Err(Error::Config(
                "vocab: carrier and entity ranges must not cover reserved ids 0..=2".into(),
            ));
        }
        let overlap = c.carrier_first <= c.entity_last && c.entity_first <= c.carrier_last;
        if overlap {
            return Err(Error::Config(format!(
                "vocab: entity range {}..={} overlaps carrier range {}..={}",
                c.entity_first, c.entity_last, c.carrier_first, c.carrier_last
            )));
        }
        if c.carrier_last >= c.size || c.entity_last >= c.size {
            return Err(Error::Config(format!(
                "vocab: token ranges exceed vocabulary size {}",
                c.size
            )));
        }
        let pieces = c.entity_last - c.entity_first + 1;
        if pieces > CONSONANTS.len() * VOWELS.len() {
            return Err(Error::Config(format!("vocab: at most {} entity pieces supported", CONSONANTS.len() * VOWELS.len())));
        }
        let mut surfaces: Vec<String> = (0..c.size).map(|i| format!("<unused{i}>")).collect();
        surfaces[PAD] = "<pad>".into();
        surfaces[BOS] = "<s>".into();
        surfaces[EOS] = "</s>".into();
        for (i, id) in (c.carrier_first..=c.carrier_last).enumerate() {
            surfaces[id] = match CARRIER_WORDS.get(i) {
                Some(w) => (*w).to_string(),
                None => format!("w{id}"),
            };
        }
        // consonant-vowel pairs: fixed width, so concatenations segment uniquely
        let syllables = CONSONANTS
            .iter()
            .flat_map(|c| VOWELS.iter().map(move |v| format!("{c}{v}")));
        for (id, s) in (c.entity_first..=c.entity_last).zip(syllables) {
            surfaces[id] = s;
        }
        Ok(Self { config, surfaces })
    }

    pub fn config(&self) -> &VocabConfig {
        &self.config
    }

    pub fn size(&self) -> usize {
        self.config.size
    }

    pub fn carrier_range(&self) -> RangeInclusive<TokenId> {
        self.config.carrier_first..=self.config.carrier_last
    }

    pub fn entity_range(&self) -> RangeInclusive<TokenId> {
        self.config.entity_first..=self.config.entity_last
    }

    pub fn is_entity_piece(&self, id: TokenId) -> bool {
        self.entity_range().contains(&id)
    }

    pub fn surface(&self, id: TokenId) -> &str {
        &self.surfaces[id]
    }

    /// Surface form of an entity made of `pieces`.
    pub fn join_pieces(&self, pieces: &[TokenId]) -> String {
        pieces.iter().map(|&p| self.surface(p)).collect()
    }

    /// Converts token ids into words. Reserved ids are dropped, carrier ids
    /// are words on their own, and every maximal run of entity pieces forms
    /// a single word.
    pub fn detokenize(&self, tokens: &[TokenId]) -> Vec<String> {
        let mut words = Vec::new();
        let mut run = String::new();
        for &t in tokens {
            if self.is_entity_piece(t) {
                run.push_str(self.surface(t));
                continue;
            }
            if !run.is_empty() {
                words.push(std::mem::take(&mut run));
            }
            if t > EOS && t < self.size() {
                words.push(self.surface(t).to_string());
            }
        }
        if !run.is_empty() {
            words.push(run);
        }
        words
    }
}

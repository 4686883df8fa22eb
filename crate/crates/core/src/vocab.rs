//! Token vocabulary shared by the task generator, the policy and the verifier.

use std::collections::HashMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Index of a symbol in a [`Vocabulary`].
pub type TokenId = u32;

pub const PAD: &str = "<pad>";
pub const BOS: &str = "<bos>";
/// Document boundary inside packed training rows.
pub const SEP: &str = "<sep>";
pub const EOS: &str = "<eos>";
/// Marks the start of the final answer.
pub const ANS: &str = "<ans>";

const DEFAULT_SYMBOLS: [&str; 25] = [
    PAD, BOS, SEP, EOS, ANS, "0", "1", "2", "3", "4", "5", "6", "7", "8", "9", "+", "-", "*", "/",
    ".", "=", "?", ";", "%", "x",
];

/// Ordered, duplicate-free list of symbols.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<String>", into = "Vec<String>")]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, TokenId>,
}

impl Vocabulary {
    pub fn new(tokens: Vec<String>) -> Result<Self> {
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if index.insert(t.clone(), i as TokenId).is_some() {
                return Err(Error::InvalidVocabulary(format!("duplicate symbol {t:?}")));
            }
        }
        for required in [PAD, EOS, ANS, SEP, BOS] {
            if !index.contains_key(required) {
                return Err(Error::InvalidVocabulary(format!("missing marker {required}")));
            }
        }
        Ok(Self { tokens, index })
    }

    /// Digits, operators, delimiters and the control markers.
    pub fn standard() -> Self {
        Self::new(DEFAULT_SYMBOLS.iter().map(|s| s.to_string()).collect())
            .expect("standard vocabulary is well formed")
    }

    pub fn size(&self) -> usize {
        self.tokens.len()
    }

    pub fn symbols(&self) -> &[String] {
        &self.tokens
    }

    pub fn id(&self, symbol: &str) -> Result<TokenId> {
        self.index
            .get(symbol)
            .copied()
            .ok_or_else(|| Error::UnknownToken(symbol.to_string()))
    }

    pub fn symbol(&self, id: TokenId) -> Result<&str> {
        self.tokens
            .get(id as usize)
            .map(String::as_str)
            .ok_or_else(|| Error::UnknownToken(format!("#{id}")))
    }

    pub fn pad(&self) -> TokenId {
        self.index[PAD]
    }
    pub fn bos(&self) -> TokenId {
        self.index[BOS]
    }
    pub fn sep(&self) -> TokenId {
        self.index[SEP]
    }
    pub fn eos(&self) -> TokenId {
        self.index[EOS]
    }
    pub fn ans(&self) -> TokenId {
        self.index[ANS]
    }

    pub fn encode<S: AsRef<str>>(&self, symbols: &[S]) -> Result<Vec<TokenId>> {
        symbols.iter().map(|s| self.id(s.as_ref())).collect()
    }

    pub fn decode(&self, ids: &[TokenId]) -> Result<Vec<String>> {
        ids.iter().map(|&i| self.symbol(i).map(str::to_string)).collect()
    }

    /// Fails with `UnknownToken` if any id is out of range.
    pub fn check(&self, ids: &[TokenId]) -> Result<()> {
        match ids.iter().find(|&&i| i as usize >= self.tokens.len()) {
            Some(bad) => Err(Error::UnknownToken(format!("#{bad}"))),
            None => Ok(()),
        }
    }
}

impl Default for Vocabulary {
    fn default() -> Self {
        Self::standard()
    }
}

impl TryFrom<Vec<String>> for Vocabulary {
    type Error = Error;
    fn try_from(tokens: Vec<String>) -> Result<Self> {
        Self::new(tokens)
    }
}

impl From<Vocabulary> for Vec<String> {
    fn from(v: Vocabulary) -> Self {
        v.tokens
    }
}

impl fmt::Display for Vocabulary {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.tokens.join(" "))
    }
}

/// Splits an integer into digit symbols, with a leading `-` symbol when negative.
pub fn number_symbols(n: i64) -> Vec<String> {
    let mut out = Vec::new();
    if n < 0 {
        out.push("-".to_string());
    }
    out.extend(n.unsigned_abs().to_string().chars().map(String::from));
    out
}

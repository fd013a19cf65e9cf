use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Modality {
    Text,
    Visual,
}

impl Modality {
    pub fn from_flag(flag: u8) -> Result<Self> {
        match flag {
            0 => Ok(Modality::Text),
            1 => Ok(Modality::Visual),
            other => Err(Error::InvalidInput(format!("modality flag must be 0 or 1, got {other}"))),
        }
    }

    pub fn flag(self) -> u8 {
        match self {
            Modality::Text => 0,
            Modality::Visual => 1,
        }
    }
}

/// Token ids with a per-token modality label.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenSequence {
    token_ids: Vec<u32>,
    modality: Vec<Modality>,
}

#[derive(Serialize, Deserialize)]
struct Record {
    tokens: Vec<u32>,
    modality: Vec<u8>,
}

impl TokenSequence {
    pub fn new(token_ids: Vec<u32>, modality: Vec<Modality>) -> Result<Self> {
        if token_ids.len() != modality.len() {
            return Err(Error::InvalidInput(format!(
                "{} tokens but {} modality flags",
                token_ids.len(),
                modality.len()
            )));
        }
        Ok(Self { token_ids, modality })
    }

    /// All-text sequence.
    pub fn text(token_ids: Vec<u32>) -> Self {
        let modality = vec![Modality::Text; token_ids.len()];
        Self { token_ids, modality }
    }

    pub fn token_ids(&self) -> &[u32] {
        &self.token_ids
    }

    pub fn modality(&self) -> &[Modality] {
        &self.modality
    }

    pub fn len(&self) -> usize {
        self.token_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.token_ids.is_empty()
    }

    pub fn n_text(&self) -> usize {
        self.modality.iter().filter(|&&m| m == Modality::Text).count()
    }

    pub fn n_visual(&self) -> usize {
        self.len() - self.n_text()
    }

    /// Appends a generated token; generated tokens are always text.
    pub fn push_text(&mut self, id: u32) {
        self.token_ids.push(id);
        self.modality.push(Modality::Text);
    }

    pub fn prefix(&self, len: usize) -> Self {
        Self { token_ids: self.token_ids[..len].to_vec(), modality: self.modality[..len].to_vec() }
    }

    pub(crate) fn check_vocab(&self, vocab_size: usize) -> Result<()> {
        if self.is_empty() {
            return Err(Error::InvalidInput("token sequence is empty".into()));
        }
        if let Some((i, id)) = self.token_ids.iter().enumerate().find(|(_, &id)| id as usize >= vocab_size) {
            return Err(Error::InvalidInput(format!(
                "token {id} at position {i} is outside the vocabulary of {vocab_size}"
            )));
        }
        Ok(())
    }

    /// One JSON Lines record: `{"tokens":[...],"modality":[0|1,...]}`.
    pub fn to_json_line(&self) -> String {
        let rec = Record { tokens: self.token_ids.clone(), modality: self.modality.iter().map(|m| m.flag()).collect() };
        serde_json::to_string(&rec).expect("record serializes")
    }

    pub fn parse_json_lines(text: &str) -> Result<Vec<Self>> {
        let mut out = Vec::new();
        for (lineno, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let rec: Record =
                serde_json::from_str(line).map_err(|e| Error::InvalidInput(format!("line {}: {e}", lineno + 1)))?;
            let modality = rec.modality.into_iter().map(Modality::from_flag).collect::<Result<Vec<_>>>()?;
            out.push(
                Self::new(rec.tokens, modality)
                    .map_err(|e| Error::InvalidInput(format!("line {}: {e}", lineno + 1)))?,
            );
        }
        Ok(out)
    }
}

pub fn read_token_sequences(path: &Path) -> Result<Vec<TokenSequence>> {
    TokenSequence::parse_json_lines(&fs::read_to_string(path)?)
}

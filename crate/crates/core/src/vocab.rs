use std::collections::HashMap;

use crate::error::{Error, Result};

/// Marker prefixed to word-initial pieces.
pub const WORD_START: char = '\u{2581}';
pub const BLANK: &str = "<blank>";

/// Subword inventory of the acoustic model. The blank symbol is the last entry.
#[derive(Debug, Clone)]
pub struct SubwordVocab {
    pieces: Vec<String>,
    index: HashMap<String, u32>,
    word_start: Vec<bool>,
}

impl SubwordVocab {
    /// Builds a vocabulary from pieces whose final entry must be `<blank>`.
    pub fn new(pieces: Vec<String>) -> Result<Self> {
        if pieces.last().map(String::as_str) != Some(BLANK) {
            return Err(Error::Vocab(format!("final piece must be {BLANK:?}")));
        }
        let mut index = HashMap::with_capacity(pieces.len());
        for (i, p) in pieces.iter().enumerate() {
            if p.is_empty() {
                return Err(Error::Vocab(format!("empty piece at id {i}")));
            }
            if p == BLANK && i + 1 != pieces.len() {
                return Err(Error::Vocab(format!(
                    "{BLANK:?} appears at id {i}, not last"
                )));
            }
            if index.insert(p.clone(), i as u32).is_some() {
                return Err(Error::Vocab(format!("duplicate piece {p:?}")));
            }
        }
        let word_start = pieces.iter().map(|p| p.starts_with(WORD_START)).collect();
        Ok(Self {
            pieces,
            index,
            word_start,
        })
    }

    /// Convenience constructor that appends the blank symbol.
    pub fn with_blank<S: AsRef<str>>(pieces: &[S]) -> Result<Self> {
        let mut all: Vec<String> = pieces.iter().map(|p| p.as_ref().to_string()).collect();
        all.push(BLANK.to_string());
        Self::new(all)
    }

    /// Parses the one-piece-per-line vocabulary file.
    pub fn parse(text: &str) -> Result<Self> {
        let pieces = text
            .lines()
            .map(|l| l.trim_end_matches('\r').to_string())
            .collect::<Vec<_>>();
        // tolerate a trailing newline but not interior blank lines
        let pieces = match pieces.iter().rposition(|p| !p.is_empty()) {
            Some(last) => pieces[..=last].to_vec(),
            None => Vec::new(),
        };
        Self::new(pieces)
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for p in &self.pieces {
            out.push_str(p);
            out.push('\n');
        }
        out
    }

    pub fn len(&self) -> usize {
        self.pieces.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pieces.is_empty()
    }

    pub fn blank_id(&self) -> u32 {
        (self.pieces.len() - 1) as u32
    }

    pub fn id(&self, piece: &str) -> Option<u32> {
        self.index.get(piece).copied()
    }

    pub fn piece(&self, id: u32) -> &str {
        &self.pieces[id as usize]
    }

    pub fn pieces(&self) -> &[String] {
        &self.pieces
    }

    pub fn is_word_start(&self, id: u32) -> bool {
        self.word_start[id as usize]
    }
}

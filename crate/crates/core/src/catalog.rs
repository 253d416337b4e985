use std::collections::HashSet;

use crate::error::{Error, Result};

/// User-supplied entity list. Multi-word entities are kept as one
/// space-separated string.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct EntityCatalog {
    entities: Vec<String>,
}

/// Lowercases and collapses internal whitespace.
pub fn normalize_entity(raw: &str) -> String {
    raw.split_whitespace()
        .map(str::to_lowercase)
        .collect::<Vec<_>>()
        .join(" ")
}

impl EntityCatalog {
    pub fn new<S: AsRef<str>>(entities: &[S]) -> Result<Self> {
        let mut seen = HashSet::new();
        let mut out = Vec::with_capacity(entities.len());
        for raw in entities {
            let e = normalize_entity(raw.as_ref());
            if e.is_empty() {
                return Err(Error::Config("empty catalog entity".into()));
            }
            if !seen.insert(e.clone()) {
                return Err(Error::DuplicateEntity(e));
            }
            out.push(e);
        }
        Ok(Self { entities: out })
    }

    /// One entity per line; blank lines are skipped.
    pub fn parse(text: &str) -> Result<Self> {
        let lines: Vec<&str> = text.lines().filter(|l| !l.trim().is_empty()).collect();
        Self::new(&lines)
    }

    pub fn entities(&self) -> &[String] {
        &self.entities
    }

    pub fn len(&self) -> usize {
        self.entities.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entities.is_empty()
    }

    pub fn get(&self, idx: usize) -> &str {
        &self.entities[idx]
    }

    pub fn to_text(&self) -> String {
        self.entities.iter().map(|e| format!("{e}\n")).collect()
    }

    /// FNV-1a over the normalized entities, used to key embedding caches.
    pub fn content_hash(&self) -> u64 {
        let mut h: u64 = 0xcbf29ce484222325;
        for e in &self.entities {
            for b in e.bytes().chain(std::iter::once(b'\n')) {
                h ^= b as u64;
                h = h.wrapping_mul(0x100000001b3);
            }
        }
        h
    }
}

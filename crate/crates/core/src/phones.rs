use std::collections::HashMap;

use crate::error::{Error, Result};

pub const SILENCE: &str = "sil";

#[derive(Debug, Clone)]
pub struct PhoneSet {
    phones: Vec<String>,
    index: HashMap<String, u32>,
    silence_id: u32,
}

impl PhoneSet {
    pub fn new(phones: Vec<String>) -> Result<Self> {
        let mut index = HashMap::new();
        for (i, p) in phones.iter().enumerate() {
            if p.is_empty() || p.contains(char::is_whitespace) {
                return Err(Error::Parse {
                    line: i + 1,
                    msg: format!("invalid phone symbol {p:?}"),
                });
            }
            if index.insert(p.clone(), i as u32).is_some() {
                return Err(Error::Parse {
                    line: i + 1,
                    msg: format!("duplicate phone {p:?}"),
                });
            }
        }
        let silence_id = *index.get(SILENCE).ok_or(Error::Parse {
            line: 0,
            msg: format!("phone set has no {SILENCE:?} phone"),
        })?;
        Ok(Self {
            phones,
            index,
            silence_id,
        })
    }

    /// One phone symbol per line.
    pub fn parse(text: &str) -> Result<Self> {
        Self::new(
            text.lines()
                .map(str::trim)
                .filter(|l| !l.is_empty())
                .map(String::from)
                .collect(),
        )
    }

    pub fn to_text(&self) -> String {
        self.phones.iter().map(|p| format!("{p}\n")).collect()
    }

    pub fn len(&self) -> usize {
        self.phones.len()
    }

    pub fn is_empty(&self) -> bool {
        self.phones.is_empty()
    }

    pub fn silence_id(&self) -> u32 {
        self.silence_id
    }

    pub fn id(&self, symbol: &str) -> Option<u32> {
        self.index.get(symbol).copied()
    }

    pub fn symbol(&self, id: u32) -> &str {
        &self.phones[id as usize]
    }
}

/// Word to pronunciations, in file order.
#[derive(Debug, Clone, Default)]
pub struct Lexicon {
    entries: HashMap<String, Vec<Vec<u32>>>,
}

impl Lexicon {
    /// Parses `word ph1 ph2 ...` lines. Repeated words accumulate pronunciations.
    pub fn parse(text: &str, phones: &PhoneSet) -> Result<Self> {
        let mut entries: HashMap<String, Vec<Vec<u32>>> = HashMap::new();
        for (i, line) in text.lines().enumerate() {
            let mut fields = line.split_whitespace();
            let Some(word) = fields.next() else { continue };
            let pron = fields
                .map(|p| {
                    phones.id(p).ok_or_else(|| Error::UnknownPhone {
                        line: i + 1,
                        phone: p.to_string(),
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            if pron.is_empty() {
                return Err(Error::Parse {
                    line: i + 1,
                    msg: format!("word {word:?} has no pronunciation"),
                });
            }
            let prons = entries.entry(word.to_lowercase()).or_default();
            if !prons.contains(&pron) {
                prons.push(pron);
            }
        }
        Ok(Self { entries })
    }

    pub fn insert(&mut self, word: &str, pron: Vec<u32>) {
        let prons = self.entries.entry(word.to_lowercase()).or_default();
        if !prons.contains(&pron) {
            prons.push(pron);
        }
    }

    pub fn pronunciations(&self, word: &str) -> Option<&[Vec<u32>]> {
        self.entries.get(word).map(Vec::as_slice)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Serializes sorted by word for stable output.
    pub fn to_text(&self, phones: &PhoneSet) -> String {
        let mut words: Vec<_> = self.entries.keys().collect();
        words.sort();
        let mut out = String::new();
        for w in words {
            for pron in &self.entries[w] {
                out.push_str(w);
                for &p in pron {
                    out.push(' ');
                    out.push_str(phones.symbol(p));
                }
                out.push('\n');
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy_phones() -> PhoneSet {
        PhoneSet::parse("p\nu\nt\ni\nn\nsil\n").unwrap()
    }

    #[test]
    fn single_entry() {
        let phones = toy_phones();
        let lex = Lexicon::parse("putin p u t i n\n", &phones).unwrap();
        let ids: Vec<u32> = ["p", "u", "t", "i", "n"]
            .iter()
            .map(|p| phones.id(p).unwrap())
            .collect();
        assert_eq!(lex.pronunciations("putin").unwrap(), &[ids]);
    }

    #[test]
    fn multiple_pronunciations_accumulate() {
        let lex = Lexicon::parse("putin p u t i n\nputin p u t n\n", &toy_phones()).unwrap();
        assert_eq!(lex.pronunciations("putin").unwrap().len(), 2);
    }

    #[test]
    fn unknown_phone_names_line() {
        let phones = PhoneSet::parse("k\nt\na\ne\nsil\n").unwrap();
        match Lexicon::parse("cat k æ t\n", &phones) {
            Err(Error::UnknownPhone { line, phone }) => {
                assert_eq!(line, 1);
                assert_eq!(phone, "æ");
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn phone_set_requires_silence() {
        assert!(PhoneSet::parse("a\nb\n").is_err());
        assert!(PhoneSet::parse("a\na\nsil\n").is_err());
        assert_eq!(toy_phones().silence_id(), 5);
    }
}

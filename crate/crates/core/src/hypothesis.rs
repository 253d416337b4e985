use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One decoded hypothesis. `token_frames` holds inclusive low-frame-rate
/// spans, one per subword token in `pieces`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Hypothesis {
    pub words: Vec<String>,
    #[serde(default)]
    pub pieces: Vec<u32>,
    pub ctc_score: f64,
    pub token_frames: Vec<(usize, usize)>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rescore: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dtw_cost: Option<f64>,
    /// Half-open full-frame-rate spans, one per word.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub word_boundaries: Option<Vec<(usize, usize)>>,
}

impl Hypothesis {
    pub fn empty() -> Self {
        Self {
            words: Vec::new(),
            pieces: Vec::new(),
            ctc_score: 0.0,
            token_frames: Vec::new(),
            rescore: None,
            dtw_cost: None,
            word_boundaries: None,
        }
    }

    pub fn text(&self) -> String {
        self.words.join(" ")
    }
}

pub type NBestList = Vec<Hypothesis>;

/// One line of the decoder/rescorer JSON-lines output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UtteranceResult {
    pub id: String,
    pub nbest: NBestList,
}

impl UtteranceResult {
    pub fn best(&self) -> Option<&Hypothesis> {
        self.nbest.first()
    }
}

pub fn write_jsonl(results: &[UtteranceResult]) -> Result<String> {
    let mut out = String::new();
    for r in results {
        out.push_str(&serde_json::to_string(r)?);
        out.push('\n');
    }
    Ok(out)
}

pub fn read_jsonl(text: &str) -> Result<Vec<UtteranceResult>> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| Error::Parse {
                line: i + 1,
                msg: e.to_string(),
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn jsonl_round_trip_omits_unset_fields() {
        let r = UtteranceResult {
            id: "u1".into(),
            nbest: vec![Hypothesis {
                words: vec!["putin".into()],
                pieces: vec![0, 1],
                ctc_score: -1.5,
                token_frames: vec![(0, 1), (2, 2)],
                ..Hypothesis::empty()
            }],
        };
        let text = write_jsonl(std::slice::from_ref(&r)).unwrap();
        assert!(!text.contains("rescore"));
        assert_eq!(read_jsonl(&text).unwrap(), vec![r]);
    }

    #[test]
    fn bad_line_reports_line_number() {
        assert!(matches!(
            read_jsonl("\n{oops"),
            Err(Error::Parse { line: 2, .. })
        ));
    }
}

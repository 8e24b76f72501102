//! Attachment scores with punctuation exclusion.

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use serde::Serialize;

use crate::conllu::{Prediction, Sentence, Token};
use crate::error::{Error, Result};

/// Gold XPOS tags treated as punctuation by [`PunctMode::ptb`].
pub const PTB_PUNCT_TAGS: [&str; 5] = ["``", "''", ":", ",", "."];

/// Which gold tokens are excluded from scoring.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum PunctMode {
    /// Tokens whose gold UPOS is `PUNCT`.
    UposPunct,
    /// Tokens whose gold XPOS is in the given set.
    PosSet(BTreeSet<String>),
    /// Every token is scored.
    None,
}

impl PunctMode {
    pub fn ptb() -> Self {
        PunctMode::PosSet(PTB_PUNCT_TAGS.iter().map(|s| s.to_string()).collect())
    }

    pub fn is_excluded(&self, token: &Token) -> bool {
        match self {
            PunctMode::UposPunct => token.upos == "PUNCT",
            PunctMode::PosSet(tags) => tags.contains(&token.xpos),
            PunctMode::None => false,
        }
    }
}

impl FromStr for PunctMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "upos-punct" => Ok(PunctMode::UposPunct),
            "ptb-pos-set" => Ok(PunctMode::ptb()),
            "none" => Ok(PunctMode::None),
            other => Err(Error::Invalid(format!("unknown punctuation mode {:?}", other))),
        }
    }
}

impl fmt::Display for PunctMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            PunctMode::UposPunct => f.write_str("upos-punct"),
            PunctMode::PosSet(_) if *self == PunctMode::ptb() => f.write_str("ptb-pos-set"),
            PunctMode::PosSet(tags) => write!(f, "pos-set{:?}", tags),
            PunctMode::None => f.write_str("none"),
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize)]
pub struct Counts {
    pub tokens: usize,
    pub scored: usize,
    pub excluded: usize,
    pub head_correct: usize,
    pub both_correct: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct AttachmentScores {
    /// Percentages in `[0, 100]`; zero when nothing is scored.
    pub uas: f64,
    pub las: f64,
    pub counts: Counts,
}

fn percent(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        100.0 * num as f64 / den as f64
    }
}

/// UAS and LAS of `pred` against the gold annotation. A prediction without
/// labels counts every label as wrong.
pub fn uas_las(pred: &[Prediction], gold: &[Sentence], mode: &PunctMode) -> Result<AttachmentScores> {
    if pred.len() != gold.len() {
        return Err(Error::LengthMismatch {
            expected: gold.len(),
            actual: pred.len(),
        });
    }
    let mut c = Counts::default();
    for (p, g) in pred.iter().zip(gold) {
        if p.heads.len() != g.len() {
            return Err(Error::LengthMismatch {
                expected: g.len(),
                actual: p.heads.len(),
            });
        }
        if let Some(labels) = &p.labels {
            if labels.len() != g.len() {
                return Err(Error::LengthMismatch {
                    expected: g.len(),
                    actual: labels.len(),
                });
            }
        }
        for (idx, token) in g.tokens.iter().enumerate() {
            c.tokens += 1;
            if mode.is_excluded(token) {
                c.excluded += 1;
                continue;
            }
            c.scored += 1;
            if p.heads[idx] == token.gold_head {
                c.head_correct += 1;
                if p.labels.as_ref().is_some_and(|l| l[idx] == token.gold_label) {
                    c.both_correct += 1;
                }
            }
        }
    }
    Ok(AttachmentScores {
        uas: percent(c.head_correct, c.scored),
        las: percent(c.both_correct, c.scored),
        counts: c,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn gold() -> Sentence {
        let mut toks = vec![
            Token::new("Dogs", "NOUN", 2, "nsubj"),
            Token::new("bark", "VERB", 0, "root"),
            Token::new(".", "PUNCT", 2, "punct"),
        ];
        toks[2].xpos = ".".into();
        Sentence::from_tokens(toks)
    }

    fn pred(heads: &[usize], labels: &[&str]) -> Prediction {
        Prediction {
            heads: heads.to_vec(),
            labels: Some(labels.iter().map(|s| s.to_string()).collect()),
        }
    }

    #[test]
    fn perfect() {
        let s = uas_las(&[pred(&[2, 0, 2], &["nsubj", "root", "punct"])], &[gold()], &PunctMode::None).unwrap();
        assert_eq!((s.uas, s.las), (100.0, 100.0));
    }

    #[test]
    fn punctuation_modes() {
        let p = [pred(&[2, 0, 1], &["nsubj", "root", "punct"])];
        let g = [gold()];
        let upos = uas_las(&p, &g, &PunctMode::UposPunct).unwrap();
        assert_eq!(upos.uas, 100.0);
        assert_eq!(upos.counts.excluded, 1);
        let ptb = uas_las(&p, &g, &PunctMode::ptb()).unwrap();
        assert_eq!(ptb.uas, 100.0);
        let none = uas_las(&p, &g, &PunctMode::None).unwrap();
        assert!((none.uas - 200.0 / 3.0).abs() < 1e-12);
        assert_eq!(format!("{:.2}", none.uas), "66.67");
    }

    #[test]
    fn one_head_wrong() {
        let g = Sentence::from_tokens(vec![Token::new("a", "X", 0, "root"), Token::new("b", "X", 1, "dep")]);
        let s = uas_las(&[pred(&[0, 0], &["root", "dep"])], &[g], &PunctMode::None).unwrap();
        assert_eq!((s.uas, s.las), (50.0, 50.0));
    }

    #[test]
    fn mismatch_and_unlabeled() {
        assert!(uas_las(&[], &[gold()], &PunctMode::None).is_err());
        assert!(uas_las(&[pred(&[0], &["x"])], &[gold()], &PunctMode::None).is_err());
        let p = Prediction {
            heads: vec![2, 0, 2],
            labels: None,
        };
        let s = uas_las(&[p], &[gold()], &PunctMode::None).unwrap();
        assert_eq!((s.uas, s.las), (100.0, 0.0));
    }

    #[test]
    fn names() {
        for name in ["upos-punct", "ptb-pos-set", "none"] {
            assert_eq!(name.parse::<PunctMode>().unwrap().to_string(), name);
        }
        assert!("bogus".parse::<PunctMode>().is_err());
    }
}

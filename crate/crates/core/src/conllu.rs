//! Reading and writing CoNLL-U treebanks.
//!
//! Only syntactic words enter the parser. Multiword-token ranges (`3-4`) and
//! empty nodes (`5.1`) are kept as raw lines in their original position so
//! that writing a parsed file back reproduces it byte for byte.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

const COLUMNS: usize = 10;

/// One syntactic word of a sentence.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Token {
    pub form: String,
    pub lemma: String,
    pub upos: String,
    pub xpos: String,
    pub feats: String,
    /// Gold head, `0` is the dummy root.
    pub gold_head: usize,
    pub gold_label: String,
    pub deps: String,
    pub misc: String,
}

#[derive(Clone, Debug, PartialEq, Eq)]
enum Line {
    Comment(usize),
    Word(usize),
    Raw(String),
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Sentence {
    /// Words `w_1..w_n`; `tokens[0]` is word 1. The root is implicit.
    pub tokens: Vec<Token>,
    pub sentence_id: String,
    pub comment_lines: Vec<String>,
    layout: Vec<Line>,
}

/// Predicted analysis substituted into the HEAD (and optionally DEPREL) columns.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Prediction {
    pub heads: Vec<usize>,
    pub labels: Option<Vec<String>>,
}

impl Sentence {
    /// Builds a sentence without comments or raw lines.
    pub fn from_tokens(tokens: Vec<Token>) -> Self {
        let layout = (0..tokens.len()).map(Line::Word).collect();
        Sentence {
            tokens,
            sentence_id: String::new(),
            comment_lines: Vec::new(),
            layout,
        }
    }

    /// Number of words, excluding the root.
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// Gold heads indexed by dependent (`heads[j - 1]` is the head of `w_j`).
    pub fn gold_heads(&self) -> Vec<usize> {
        self.tokens.iter().map(|t| t.gold_head).collect()
    }

    pub fn gold_labels(&self) -> Vec<&str> {
        self.tokens.iter().map(|t| t.gold_label.as_str()).collect()
    }
}

impl Token {
    pub fn new(form: &str, upos: &str, gold_head: usize, gold_label: &str) -> Self {
        Token {
            form: form.to_owned(),
            lemma: "_".to_owned(),
            upos: upos.to_owned(),
            xpos: "_".to_owned(),
            feats: "_".to_owned(),
            gold_head,
            gold_label: gold_label.to_owned(),
            deps: "_".to_owned(),
            misc: "_".to_owned(),
        }
    }
}

#[derive(Default)]
struct Builder {
    tokens: Vec<Token>,
    comments: Vec<String>,
    layout: Vec<Line>,
    sentence_id: String,
    first_line: usize,
}

impl Builder {
    fn is_empty(&self) -> bool {
        self.layout.is_empty()
    }

    fn finish(self) -> Result<Sentence> {
        let n = self.tokens.len();
        if n == 0 {
            return Err(Error::Parse {
                line: self.first_line,
                message: "sentence contains no syntactic words".into(),
            });
        }
        for (idx, token) in self.tokens.iter().enumerate() {
            if token.gold_head > n || token.gold_head == idx + 1 {
                return Err(Error::Parse {
                    line: self.first_line,
                    message: format!("word {} has invalid head {}", idx + 1, token.gold_head),
                });
            }
        }
        Ok(Sentence {
            tokens: self.tokens,
            sentence_id: self.sentence_id,
            comment_lines: self.comments,
            layout: self.layout,
        })
    }
}

/// Parses CoNLL-U text into sentences.
pub fn parse_conllu(text: &str) -> Result<Vec<Sentence>> {
    let mut sentences = Vec::new();
    let mut current = Builder::default();

    for (idx, line) in text.split('\n').enumerate() {
        let line_no = idx + 1;
        if current.is_empty() {
            current.first_line = line_no;
        }

        if line.is_empty() {
            if !current.is_empty() {
                sentences.push(std::mem::take(&mut current).finish()?);
            }
            continue;
        }

        if line.starts_with('#') {
            if let Some(id) = line
                .strip_prefix("# sent_id")
                .and_then(|rest| rest.trim_start().strip_prefix('='))
            {
                current.sentence_id = id.trim().to_owned();
            }
            current.layout.push(Line::Comment(current.comments.len()));
            current.comments.push(line.to_owned());
            continue;
        }

        let cols: Vec<&str> = line.split('\t').collect();
        if cols.len() != COLUMNS {
            return Err(Error::Parse {
                line: line_no,
                message: format!("expected {} columns, found {}", COLUMNS, cols.len()),
            });
        }

        if cols[0].contains('-') || cols[0].contains('.') {
            current.layout.push(Line::Raw(line.to_owned()));
            continue;
        }

        let id: usize = cols[0].parse().map_err(|_| Error::Parse {
            line: line_no,
            message: format!("invalid word id {:?}", cols[0]),
        })?;
        if id != current.tokens.len() + 1 {
            return Err(Error::Parse {
                line: line_no,
                message: format!("expected word id {}, found {}", current.tokens.len() + 1, id),
            });
        }
        let gold_head: usize = cols[6].parse().map_err(|_| Error::Parse {
            line: line_no,
            message: format!("non-integer HEAD {:?}", cols[6]),
        })?;

        current.layout.push(Line::Word(current.tokens.len()));
        current.tokens.push(Token {
            form: cols[1].to_owned(),
            lemma: cols[2].to_owned(),
            upos: cols[3].to_owned(),
            xpos: cols[4].to_owned(),
            feats: cols[5].to_owned(),
            gold_head,
            gold_label: cols[7].to_owned(),
            deps: cols[8].to_owned(),
            misc: cols[9].to_owned(),
        });
    }

    if !current.is_empty() {
        sentences.push(current.finish()?);
    }

    Ok(sentences)
}

/// Reads a CoNLL-U file. Invalid UTF-8 is an error.
pub fn read_conllu<P: AsRef<Path>>(path: P) -> Result<Vec<Sentence>> {
    let text = fs::read_to_string(path)?;
    parse_conllu(&text)
}

/// Serializes sentences, optionally replacing heads and labels.
pub fn write_conllu(sentences: &[Sentence], predicted: Option<&[Prediction]>) -> Result<String> {
    if let Some(pred) = predicted {
        if pred.len() != sentences.len() {
            return Err(Error::LengthMismatch {
                expected: sentences.len(),
                actual: pred.len(),
            });
        }
        for (sent, p) in sentences.iter().zip(pred) {
            if p.heads.len() != sent.len() {
                return Err(Error::LengthMismatch {
                    expected: sent.len(),
                    actual: p.heads.len(),
                });
            }
            if let Some(labels) = &p.labels {
                if labels.len() != sent.len() {
                    return Err(Error::LengthMismatch {
                        expected: sent.len(),
                        actual: labels.len(),
                    });
                }
            }
        }
    }

    let mut out = String::new();
    for (s_idx, sent) in sentences.iter().enumerate() {
        let pred = predicted.map(|p| &p[s_idx]);
        for line in &sent.layout {
            match line {
                Line::Comment(c) => out.push_str(&sent.comment_lines[*c]),
                Line::Raw(raw) => out.push_str(raw),
                Line::Word(w) => {
                    let t = &sent.tokens[*w];
                    let head = pred.map_or(t.gold_head, |p| p.heads[*w]);
                    let label = pred
                        .and_then(|p| p.labels.as_ref())
                        .map_or(t.gold_label.as_str(), |l| l[*w].as_str());
                    out.push_str(&format!(
                        "{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}",
                        w + 1,
                        t.form,
                        t.lemma,
                        t.upos,
                        t.xpos,
                        t.feats,
                        head,
                        label,
                        t.deps,
                        t.misc
                    ));
                }
            }
            out.push('\n');
        }
        out.push('\n');
    }
    Ok(out)
}

/// Drops sentences with more than `max_len` words, keeping order.
pub fn filter_long(sentences: Vec<Sentence>, max_len: usize) -> Vec<Sentence> {
    sentences.into_iter().filter(|s| s.len() <= max_len).collect()
}

/// Indices of sentences whose gold heads do not form a tree, with a reason.
pub fn invalid_trees(sentences: &[Sentence]) -> Vec<(usize, String)> {
    sentences
        .iter()
        .enumerate()
        .filter(|(_, s)| !crate::tree::is_tree(&s.gold_heads()))
        .map(|(idx, s)| {
            let id = if s.sentence_id.is_empty() {
                format!("#{}", idx + 1)
            } else {
                s.sentence_id.clone()
            };
            (idx, format!("sentence {} gold heads contain a cycle", id))
        })
        .collect()
}

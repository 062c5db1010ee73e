//! Input and output formats: annotated documents (JSONL or CoNLL), phrase
//! banks, and distorted-document records.

use std::io::{BufRead, BufReader};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::backend::MlmBackend;
use crate::distortion::{DocumentOutcome, Phrase, PhraseBank};
use crate::error::{Error, Result};
use crate::text::Span;

/// Annotated character range `[start, end)` with a label.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct CharSpan(pub usize, pub usize, pub String);

impl CharSpan {
    pub fn start(&self) -> usize {
        self.0
    }
    pub fn end(&self) -> usize {
        self.1
    }
    pub fn label(&self) -> &str {
        &self.2
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnnotatedDocument {
    pub id: String,
    pub text: String,
    #[serde(default)]
    pub spans: Vec<CharSpan>,
}

impl AnnotatedDocument {
    /// Sorts spans and checks bounds and overlap.
    pub fn validated(mut self) -> Result<Self> {
        let len = self.text.chars().count();
        self.spans.sort();
        for s in &self.spans {
            if s.start() >= s.end() || s.end() > len {
                return Err(Error::Document {
                    id: self.id.clone(),
                    message: format!("span [{}, {}) outside text of {len} characters", s.start(), s.end()),
                });
            }
        }
        for w in self.spans.windows(2) {
            if w[1].start() < w[0].end() {
                return Err(Error::Document {
                    id: self.id.clone(),
                    message: format!(
                        "overlapping spans [{}, {}) and [{}, {})",
                        w[0].start(),
                        w[0].end(),
                        w[1].start(),
                        w[1].end()
                    ),
                });
            }
        }
        Ok(self)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum InputFormat {
    Jsonl,
    Conll,
}

pub fn load_documents(path: &Path, format: InputFormat) -> Result<Vec<AnnotatedDocument>> {
    let file = std::fs::File::open(path)?;
    let reader = BufReader::new(file);
    let name = path.display().to_string();
    match format {
        InputFormat::Jsonl => parse_jsonl(reader, &name),
        InputFormat::Conll => parse_conll(reader, &name),
    }
}

pub fn parse_jsonl<R: BufRead>(reader: R, name: &str) -> Result<Vec<AnnotatedDocument>> {
    let mut docs = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let doc: AnnotatedDocument = serde_json::from_str(&line).map_err(|e| Error::Parse {
            path: name.to_owned(),
            line: i + 1,
            message: e.to_string(),
        })?;
        docs.push(doc.validated()?);
    }
    Ok(docs)
}

/// CoNLL column format: the first column is the word, the last the BIO
/// entity tag. Blank lines end a sentence and each sentence becomes one
/// document; `-DOCSTART-` lines are skipped.
pub fn parse_conll<R: BufRead>(reader: R, name: &str) -> Result<Vec<AnnotatedDocument>> {
    struct Builder {
        text: String,
        chars: usize,
        spans: Vec<CharSpan>,
        open: Option<(usize, usize, String)>,
    }
    impl Builder {
        fn new() -> Self {
            Self {
                text: String::new(),
                chars: 0,
                spans: Vec::new(),
                open: None,
            }
        }
        fn close(&mut self) {
            if let Some((s, e, l)) = self.open.take() {
                self.spans.push(CharSpan(s, e, l));
            }
        }
    }

    let mut docs = Vec::new();
    let mut cur = Builder::new();
    let finish = |cur: &mut Builder, docs: &mut Vec<AnnotatedDocument>| -> Result<()> {
        cur.close();
        if !cur.text.is_empty() {
            let done = std::mem::replace(cur, Builder::new());
            docs.push(
                AnnotatedDocument {
                    id: (docs.len() + 1).to_string(),
                    text: done.text,
                    spans: done.spans,
                }
                .validated()?,
            );
        }
        Ok(())
    };

    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        let cols: Vec<&str> = line.split_whitespace().collect();
        if cols.is_empty() {
            finish(&mut cur, &mut docs)?;
            continue;
        }
        if cols[0] == "-DOCSTART-" {
            finish(&mut cur, &mut docs)?;
            continue;
        }
        if cols.len() < 2 {
            return Err(Error::Parse {
                path: name.to_owned(),
                line: i + 1,
                message: format!("expected a word and a tag, got `{line}`"),
            });
        }
        let (word, tag) = (cols[0], cols[cols.len() - 1]);
        if !cur.text.is_empty() {
            cur.text.push(' ');
            cur.chars += 1;
        }
        let start = cur.chars;
        cur.text.push_str(word);
        cur.chars += word.chars().count();
        let end = cur.chars;

        let (prefix, label) = match tag.split_once('-') {
            Some((p, l)) if matches!(p, "B" | "I") && !l.is_empty() => (p, l),
            _ if tag == "O" => ("O", ""),
            _ => {
                return Err(Error::Parse {
                    path: name.to_owned(),
                    line: i + 1,
                    message: format!("unrecognized tag `{tag}`"),
                })
            }
        };
        match prefix {
            "I" if cur.open.as_ref().is_some_and(|o| o.2 == label) => {
                cur.open.as_mut().expect("checked").1 = end;
            }
            "B" | "I" => {
                cur.close();
                cur.open = Some((start, end, label.to_owned()));
            }
            _ => cur.close(),
        }
    }
    finish(&mut cur, &mut docs)?;
    Ok(docs)
}

/// One phrase per line, optionally followed by a tab and a label. Blank lines
/// are skipped. Phrases are tokenized by `backend`.
pub fn load_phrase_bank<B: MlmBackend + ?Sized>(path: &Path, backend: &B) -> Result<PhraseBank> {
    let file = std::fs::File::open(path)?;
    parse_phrase_bank(BufReader::new(file), backend)
}

pub fn parse_phrase_bank<R: BufRead, B: MlmBackend + ?Sized>(reader: R, backend: &B) -> Result<PhraseBank> {
    let mut phrases = Vec::new();
    for line in reader.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let (text, label) = match line.split_once('\t') {
            Some((t, l)) if !l.trim().is_empty() => (t, Some(l.trim().to_owned())),
            Some((t, _)) => (t, None),
            None => (line.as_str(), None),
        };
        if text.trim().is_empty() {
            continue;
        }
        phrases.push(Phrase {
            tokens: backend.tokenize(text.trim())?.tokens().to_vec(),
            label,
        });
    }
    if phrases.is_empty() {
        return Err(Error::EmptyBank { label: None });
    }
    PhraseBank::new(phrases)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuditEntry {
    pub label: String,
    pub original: String,
    pub replacement: String,
    pub ndd_total: f64,
}

/// Distorted document, mirroring the input schema plus an audit trail.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OutputRecord {
    pub id: String,
    pub text: String,
    pub spans: Vec<CharSpan>,
    pub audit: Vec<AuditEntry>,
}

/// Rebuilds the document text with each rewritten token range replaced by
/// the space-joined replacement. Text outside the rewritten ranges is copied
/// unchanged.
///
/// `token_spans` are the spans in the original tokenization, with their
/// character ranges in `offsets`.
pub fn splice_text(
    doc: &AnnotatedDocument,
    offsets: &[(usize, usize)],
    token_spans: &[Span],
    outcome: &DocumentOutcome,
) -> Result<OutputRecord> {
    let chars: Vec<char> = doc.text.chars().collect();
    let mut text = String::with_capacity(doc.text.len());
    let mut spans = Vec::with_capacity(token_spans.len());
    let mut audit = Vec::with_capacity(token_spans.len());
    let mut cursor = 0;
    let mut out_chars = 0;
    for (span, result) in token_spans.iter().zip(&outcome.spans) {
        let (cs, ce) = (offsets[span.start].0, offsets[span.last()].1);
        let kept: String = chars[cursor..cs].iter().collect();
        out_chars += cs - cursor;
        text.push_str(&kept);
        let replacement = result.chosen().replacement.join(" ");
        let rep_chars = replacement.chars().count();
        let label = result.label.clone().unwrap_or_default();
        spans.push(CharSpan(out_chars, out_chars + rep_chars, label.clone()));
        text.push_str(&replacement);
        out_chars += rep_chars;
        audit.push(AuditEntry {
            label,
            original: chars[cs..ce].iter().collect(),
            replacement,
            ndd_total: result.chosen().score,
        });
        cursor = ce;
    }
    text.extend(&chars[cursor..]);
    Ok(OutputRecord {
        id: doc.id.clone(),
        text,
        spans,
        audit,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backend::ReferenceBackend;

    #[test]
    fn jsonl_one_doc() {
        let docs = parse_jsonl(r#"{"id":"1","text":"a b","spans":[[0,1,"PER"]]}"#.as_bytes(), "x").unwrap();
        assert_eq!(docs.len(), 1);
        assert_eq!(docs[0].spans, vec![CharSpan(0, 1, "PER".into())]);
    }

    #[test]
    fn jsonl_errors_name_the_line() {
        let err = parse_jsonl("{oops".as_bytes(), "in.jsonl").unwrap_err();
        assert!(matches!(err, Error::Parse { line: 1, .. }), "{err}");
        assert!(err.to_string().starts_with("in.jsonl:1:"));
        let err = parse_jsonl(
            "\n{\"id\":\"d7\",\"text\":\"a b c\",\"spans\":[[0,3,\"X\"],[2,5,\"Y\"]]}".as_bytes(),
            "in.jsonl",
        )
        .unwrap_err();
        assert!(err.to_string().contains("d7"), "{err}");
        let err = parse_jsonl(r#"{"id":"q","text":"ab","spans":[[0,9,"X"]]}"#.as_bytes(), "x").unwrap_err();
        assert!(matches!(err, Error::Document { .. }));
    }

    #[test]
    fn conll_bio_decoding() {
        let input = "-DOCSTART- -X- O O\n\nJohn NNP B-NP B-PER\nSmith NNP I-NP I-PER\nruns VBZ B-VP O\nin IN O O\nNew NNP B-NP B-LOC\nYork NNP I-NP I-LOC\n\nMary B-PER\n";
        let docs = parse_conll(input.as_bytes(), "c").unwrap();
        assert_eq!(docs.len(), 2);
        assert_eq!(docs[0].text, "John Smith runs in New York");
        assert_eq!(
            docs[0].spans,
            vec![CharSpan(0, 10, "PER".into()), CharSpan(19, 27, "LOC".into())]
        );
        assert_eq!(docs[1].spans, vec![CharSpan(0, 4, "PER".into())]);
        assert_eq!(docs[1].id, "2");
    }

    #[test]
    fn conll_adjacent_b_tags_split() {
        let docs = parse_conll("A B-PER\nB B-PER\nC I-LOC\n".as_bytes(), "c").unwrap();
        assert_eq!(
            docs[0].spans,
            vec![
                CharSpan(0, 1, "PER".into()),
                CharSpan(2, 3, "PER".into()),
                CharSpan(4, 5, "LOC".into())
            ]
        );
        assert!(parse_conll("John\n".as_bytes(), "c").is_err());
        assert!(parse_conll("John X-PER\n".as_bytes(), "c").is_err());
    }

    #[test]
    fn phrase_bank_lines() {
        let be = ReferenceBackend::from_text("a b", 1.0, 4).unwrap();
        let bank = parse_phrase_bank("New York\tLOC\n\nAlice\n  \nBob Jones\t\n".as_bytes(), &be).unwrap();
        let p = bank.phrases();
        assert_eq!(p.len(), 3);
        assert_eq!(p[0].tokens, ["New", "York"]);
        assert_eq!(p[0].label.as_deref(), Some("LOC"));
        assert_eq!(p[1].label, None);
        assert_eq!(p[2].label, None);
        assert!(matches!(
            parse_phrase_bank("\n\n".as_bytes(), &be),
            Err(Error::EmptyBank { .. })
        ));
    }
}

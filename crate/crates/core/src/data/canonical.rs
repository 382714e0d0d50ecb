use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::RawExample;
use crate::error::{Error, Result};

#[derive(Serialize, Deserialize)]
struct Record {
    id: u64,
    passage: String,
    question: String,
    answer: String,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    entities: BTreeMap<String, String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    url: Option<String>,
}

fn tokens(s: &str) -> Vec<String> {
    s.split_whitespace().map(String::from).collect()
}

pub fn to_jsonl_line(example: &RawExample) -> String {
    let record = Record {
        id: example.id,
        passage: example.passage.join(" "),
        question: example.question.join(" "),
        answer: example.answer.clone(),
        entities: example.entities.clone(),
        url: example.url.clone(),
    };
    serde_json::to_string(&record).expect("record serialization cannot fail")
}

/// Parses one canonical record; `line` is only used for error reporting.
pub fn from_jsonl_line(text: &str, line: usize) -> Result<RawExample> {
    let r: Record = serde_json::from_str(text).map_err(|e| Error::Parse {
        path: "<input>".into(),
        line,
        message: e.to_string(),
    })?;
    Ok(RawExample {
        id: r.id,
        url: r.url,
        passage: tokens(&r.passage),
        question: tokens(&r.question),
        answer: r.answer,
        entities: r.entities,
    })
}

/// Reads a canonical dataset, skipping blank lines.
pub fn read_canonical(path: &Path) -> Result<Vec<RawExample>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            from_jsonl_line(l, i + 1).map_err(|e| match e {
                Error::Parse { line, message, .. } => Error::Parse {
                    path: path.display().to_string(),
                    line,
                    message,
                },
                other => other,
            })
        })
        .collect()
}

pub fn write_canonical(path: &Path, examples: &[RawExample]) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for ex in examples {
        writeln!(w, "{}", to_jsonl_line(ex)).map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn line_round_trip() {
        let mut ex = RawExample {
            id: 9,
            url: Some("u".into()),
            passage: vec!["@entity0".into(), "won".into()],
            question: vec!["@blank".into(), "won".into()],
            answer: "@entity0".into(),
            ..Default::default()
        };
        ex.entities.insert("@entity0".into(), "Ann \"A\" Lee".into());
        let line = to_jsonl_line(&ex);
        assert!(!line.contains('\n'));
        assert_eq!(from_jsonl_line(&line, 1).unwrap(), ex);
    }

    #[test]
    fn minimal_record_has_required_fields_only() {
        let ex = from_jsonl_line(r#"{"id":1,"passage":"a @entity0","question":"@blank b","answer":"@entity0"}"#, 1)
            .unwrap();
        assert_eq!(ex.passage, vec!["a", "@entity0"]);
        assert!(ex.entities.is_empty() && ex.url.is_none());
        assert!(matches!(from_jsonl_line(r#"{"id":1}"#, 4), Err(Error::Parse { line: 4, .. })));
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.jsonl");
        let examples: Vec<RawExample> = (0..3)
            .map(|i| RawExample {
                id: i,
                passage: vec!["@entity0".into()],
                question: vec!["@blank".into()],
                answer: "@entity0".into(),
                ..Default::default()
            })
            .collect();
        write_canonical(&path, &examples).unwrap();
        assert_eq!(read_canonical(&path).unwrap(), examples);
    }
}

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use crate::data::{entity_number, RawExample, BLANK, CNN_PLACEHOLDER};
use crate::error::{Error, Result};

const SECTIONS: [&str; 5] = ["url", "passage", "question", "answer", "entity map"];

/// Reads one example in the CNN questions layout.
///
/// The example id is taken from `id`; the file itself carries none.
pub fn import_cnn_format(path: &Path, id: u64) -> Result<RawExample> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_cnn_format(&text, id).map_err(|e| match e {
        Error::Parse { line, message, .. } => Error::Parse {
            path: path.display().to_string(),
            line,
            message,
        },
        other => other,
    })
}

/// Parses the CNN layout: URL, passage, question, answer, and entity map,
/// separated by single blank lines. `@placeholder` becomes [`BLANK`].
pub fn parse_cnn_format(text: &str, id: u64) -> Result<RawExample> {
    let err = |line: usize, message: String| Error::Parse {
        path: "<input>".into(),
        line,
        message,
    };
    let lines: Vec<&str> = text.lines().map(|l| l.trim_end_matches('\r')).collect();
    // Section k occupies line 2k; odd lines must be blank separators.
    let mut sections = Vec::with_capacity(4);
    for (k, name) in SECTIONS[..4].iter().enumerate() {
        let at = 2 * k;
        match lines.get(at) {
            Some(l) if !l.trim().is_empty() => sections.push(l.trim()),
            Some(_) => return Err(err(at + 1, format!("{name} section is empty"))),
            None => return Err(err(at + 1, format!("missing {name} section"))),
        }
        match lines.get(at + 1) {
            Some(l) if l.trim().is_empty() => {}
            Some(_) => return Err(err(at + 2, format!("expected blank line after {name} section"))),
            None => return Err(err(at + 2, format!("missing {} section", SECTIONS[k + 1]))),
        }
    }
    let mut entities = BTreeMap::new();
    for (i, line) in lines.iter().enumerate().skip(8) {
        if line.trim().is_empty() {
            continue;
        }
        let (symbol, name) = line
            .split_once(':')
            .ok_or_else(|| err(i + 1, format!("entity map line without ':': {line}")))?;
        if entity_number(symbol).is_none() {
            return Err(err(i + 1, format!("invalid entity symbol {symbol}")));
        }
        if entities.insert(symbol.to_string(), name.to_string()).is_some() {
            return Err(err(i + 1, format!("duplicate entity {symbol} in entity map")));
        }
    }
    let split = |s: &str| -> Vec<String> {
        s.split_whitespace()
            .map(|t| if t == CNN_PLACEHOLDER { BLANK.to_string() } else { t.to_string() })
            .collect()
    };
    Ok(RawExample {
        id,
        url: Some(sections[0].to_string()),
        passage: split(sections[1]),
        question: split(sections[2]),
        answer: sections[3].to_string(),
        entities,
    })
}

/// Writes an example back in the CNN layout.
pub fn export_cnn_format(example: &RawExample) -> String {
    let question: Vec<&str> = example
        .question
        .iter()
        .map(|t| if t == BLANK { CNN_PLACEHOLDER } else { t.as_str() })
        .collect();
    let mut entities: Vec<(&String, &String)> = example.entities.iter().collect();
    entities.sort_by_key(|(k, _)| entity_number(k));
    let mut out = format!(
        "{}\n\n{}\n\n{}\n\n{}\n\n",
        example.url.as_deref().unwrap_or("-"),
        example.passage.join(" "),
        question.join(" "),
        example.answer,
    );
    for (k, v) in entities {
        out.push_str(&format!("{k}:{v}\n"));
    }
    out
}

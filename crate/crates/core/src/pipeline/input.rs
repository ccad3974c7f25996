use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum SourceTag {
    Socialiqa,
    Copa,
    #[default]
    Other,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct InputSentence {
    pub id: String,
    pub sentence: String,
    #[serde(default)]
    pub source: SourceTag,
}

#[derive(Debug, Error)]
pub enum InputError {
    #[error("manifest line {line}: {source}")]
    Manifest { line: usize, source: serde_json::Error },
    #[error("duplicate sentence id {0:?}")]
    DuplicateId(String),
}

/// Reads either a plain file with one sentence per line or a JSON-lines
/// manifest of `{id, sentence, source}` records. A file whose first
/// non-blank line starts with `{` is treated as a manifest. Blank lines and
/// lines starting with `#` are skipped; plain lines get ids `s0001`, ...
pub fn parse_input(text: &str) -> Result<Vec<InputSentence>, InputError> {
    let lines = text
        .lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l.trim()))
        .filter(|(_, l)| !l.is_empty() && !l.starts_with('#'));
    let manifest = text
        .lines()
        .map(str::trim)
        .find(|l| !l.is_empty() && !l.starts_with('#'))
        .is_some_and(|l| l.starts_with('{'));
    let mut out: Vec<InputSentence> = Vec::new();
    for (line, content) in lines {
        let item = if manifest {
            serde_json::from_str(content).map_err(|source| InputError::Manifest { line, source })?
        } else {
            InputSentence {
                id: format!("s{:04}", out.len() + 1),
                sentence: content.to_string(),
                source: SourceTag::Other,
            }
        };
        if out.iter().any(|o| o.id == item.id) {
            return Err(InputError::DuplicateId(item.id));
        }
        out.push(item);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn plain_lines() {
        let got = parse_input("# comment\nA first.\n\n  B second.  \n").unwrap();
        assert_eq!(got.len(), 2);
        assert_eq!(got[0].id, "s0001");
        assert_eq!(got[1].sentence, "B second.");
        assert_eq!(got[1].source, SourceTag::Other);
    }

    #[test]
    fn manifest_lines() {
        let text = r#"{"id":"q1","sentence":"A.","source":"socialiqa"}
{"id":"q2","sentence":"B.","source":"copa"}
{"id":"q3","sentence":"C."}"#;
        let got = parse_input(text).unwrap();
        assert_eq!(got[0].source, SourceTag::Socialiqa);
        assert_eq!(got[1].source, SourceTag::Copa);
        assert_eq!(got[2].source, SourceTag::Other);
        assert!(matches!(
            parse_input("{\"id\":\"a\",\"sentence\":\"x\"}\n{\"id\":\"a\",\"sentence\":\"y\"}"),
            Err(InputError::DuplicateId(_))
        ));
        assert!(matches!(
            parse_input("{\"id\":1}"),
            Err(InputError::Manifest { line: 1, .. })
        ));
    }
}

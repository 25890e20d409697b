//! JSON-lines import and export.
//!
//! One object per line with `prompt` and `answer` strings, and optional
//! `format` (`text` | `symbolic`, default `text`), `split` (default
//! `train`) and `family` strings. Blank lines are skipped.

use std::io::Write;
use std::path::Path;

use serde_json::Value;

use super::{Format, Split, TaskInstance};
use crate::error::{Error, Result};

fn field<'a>(
    obj: &'a serde_json::Map<String, Value>,
    key: &str,
    line: usize,
) -> Result<Option<&'a str>> {
    match obj.get(key) {
        None | Some(Value::Null) => Ok(None),
        Some(Value::String(s)) => Ok(Some(s)),
        Some(_) => Err(Error::Schema {
            line,
            field: key.to_string(),
        }),
    }
}

fn required<'a>(
    obj: &'a serde_json::Map<String, Value>,
    key: &str,
    line: usize,
) -> Result<&'a str> {
    field(obj, key, line)?.ok_or_else(|| Error::Schema {
        line,
        field: key.to_string(),
    })
}

/// Parse JSONL text. Prompts with more than `max_prompt_tokens`
/// whitespace tokens are rejected with their line number.
pub fn parse_jsonl(text: &str, max_prompt_tokens: usize) -> Result<Vec<TaskInstance>> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        if raw.trim().is_empty() {
            continue;
        }
        let v: Value = serde_json::from_str(raw).map_err(|e| Error::Parse {
            line,
            msg: e.to_string(),
        })?;
        let obj = v.as_object().ok_or_else(|| Error::Parse {
            line,
            msg: "expected a JSON object".into(),
        })?;
        let prompt = required(obj, "prompt", line)?;
        let answer = required(obj, "answer", line)?;
        let format = match field(obj, "format", line)? {
            Some(s) => s.parse().map_err(|_| Error::Schema {
                line,
                field: "format".into(),
            })?,
            None => Format::Text,
        };
        let split = match field(obj, "split", line)? {
            Some(s) => s.parse().map_err(|_| Error::Schema {
                line,
                field: "split".into(),
            })?,
            None => Split::Train,
        };
        let family = field(obj, "family", line)?.map(String::from);
        let n = prompt.split_whitespace().count();
        if n > max_prompt_tokens {
            return Err(Error::Parse {
                line,
                msg: format!("prompt has {n} tokens, limit is {max_prompt_tokens}"),
            });
        }
        out.push(TaskInstance {
            prompt: prompt.to_string(),
            answer: answer.to_string(),
            format,
            split,
            family,
        });
    }
    Ok(out)
}

pub fn ingest_jsonl(path: &Path, max_prompt_tokens: usize) -> Result<Vec<TaskInstance>> {
    if !path.exists() {
        return Err(Error::MissingArtifact(path.to_path_buf()));
    }
    parse_jsonl(&std::fs::read_to_string(path)?, max_prompt_tokens)
}

pub fn to_jsonl(data: &[TaskInstance]) -> Result<String> {
    let mut s = String::new();
    for inst in data {
        s.push_str(&serde_json::to_string(inst)?);
        s.push('\n');
    }
    Ok(s)
}

pub fn export_jsonl(path: &Path, data: &[TaskInstance]) -> Result<()> {
    let mut f = std::fs::File::create(path)?;
    f.write_all(to_jsonl(data)?.as_bytes())?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn two_lines() {
        let text = "{\"prompt\": \"a b\", \"answer\": \"c\"}\n\n{\"prompt\": \"x\", \"answer\": \"y\", \"format\": \"symbolic\", \"split\": \"ood-b\"}\n";
        let d = parse_jsonl(text, 48).unwrap();
        assert_eq!(d.len(), 2);
        assert_eq!(d[1].format, Format::Symbolic);
        assert_eq!(d[1].split, Split::OodB);
    }

    #[test]
    fn missing_answer_names_line() {
        let err = parse_jsonl("{\"prompt\": \"a\"}", 48).unwrap_err();
        match err {
            Error::Schema { line, field } => {
                assert_eq!(line, 1);
                assert_eq!(field, "answer");
            }
            e => panic!("unexpected {e}"),
        }
    }

    #[test]
    fn malformed_and_overlong() {
        assert!(matches!(
            parse_jsonl("{\"prompt\": \"a\", \"answer\": \"b\"}\n{oops", 48),
            Err(Error::Parse { line: 2, .. })
        ));
        assert!(matches!(
            parse_jsonl("{\"prompt\": \"a b c\", \"answer\": \"b\"}", 2),
            Err(Error::Parse { line: 1, .. })
        ));
        assert!(matches!(
            parse_jsonl(
                "{\"prompt\": \"a\", \"answer\": \"b\", \"split\": \"dev\"}",
                4
            ),
            Err(Error::Schema { line: 1, .. })
        ));
    }
}

//! Flat `key = value` text files with `#` comments.

use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum KvError {
    #[error("line {line}: expected `key = value`, got {text:?}")]
    Malformed { line: usize, text: String },
    #[error("line {line}: duplicate key `{key}`")]
    Duplicate { line: usize, key: String },
    #[error("unknown key `{0}`")]
    UnknownKey(String),
    #[error("invalid value for `{key}`: {msg}")]
    InvalidValue { key: String, msg: String },
}

/// Parses the file body into ordered `(key, value)` pairs.
pub fn parse(text: &str) -> Result<Vec<(String, String)>, KvError> {
    let mut out: Vec<(String, String)> = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let Some((k, v)) = line.split_once('=') else {
            return Err(KvError::Malformed { line: i + 1, text: raw.to_string() });
        };
        let (k, v) = (k.trim(), v.trim());
        if k.is_empty() {
            return Err(KvError::Malformed { line: i + 1, text: raw.to_string() });
        }
        if out.iter().any(|(key, _)| key == k) {
            return Err(KvError::Duplicate { line: i + 1, key: k.to_string() });
        }
        out.push((k.to_string(), v.to_string()));
    }
    Ok(out)
}

pub fn parse_value<T: std::str::FromStr>(key: &str, value: &str) -> Result<T, KvError>
where
    T::Err: std::fmt::Display,
{
    value
        .parse::<T>()
        .map_err(|e| KvError::InvalidValue { key: key.to_string(), msg: format!("{value:?}: {e}") })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_comments_and_blank_lines() {
        let kv = parse("# header\nn = 16\n\nalpha=0.4 # mix\n").unwrap();
        assert_eq!(kv, vec![("n".into(), "16".into()), ("alpha".into(), "0.4".into())]);
    }

    #[test]
    fn rejects_malformed_and_duplicates() {
        assert!(matches!(parse("novalue\n"), Err(KvError::Malformed { line: 1, .. })));
        assert!(matches!(parse("a = 1\na = 2"), Err(KvError::Duplicate { line: 2, .. })));
    }
}

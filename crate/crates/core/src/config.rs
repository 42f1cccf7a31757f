//! Plain-text `key=value` configuration shared by every config struct.

use std::str::FromStr;

use crate::error::{DreamError, Result};

/// A struct that can absorb `key=value` overrides.
pub trait KvApply {
    /// Applies one pair. `Ok(false)` means the key belongs to someone else.
    fn apply(&mut self, key: &str, value: &str) -> Result<bool>;
}

pub fn parse_value<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .trim()
        .parse()
        .map_err(|_| DreamError::config(format!("bad value {value:?} for {key}")))
}

/// Parses `key=value` lines; blank lines and `#` comments are skipped.
/// Returns `(line number, key, value)` triples.
pub fn parse_kv(text: &str) -> Result<Vec<(usize, String, String)>> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| DreamError::Parse {
            line: i + 1,
            msg: format!("expected key=value, found {line:?}"),
        })?;
        out.push((i + 1, k.trim().to_string(), v.trim().to_string()));
    }
    Ok(out)
}

/// Applies every pair in `text` to `target`; unknown keys are errors.
pub fn apply_kv_text<T: KvApply>(target: &mut T, text: &str) -> Result<()> {
    for (line, k, v) in parse_kv(text)? {
        if !target.apply(&k, &v)? {
            return Err(DreamError::Parse {
                line,
                msg: format!("unknown key {k:?}"),
            });
        }
    }
    Ok(())
}

pub(crate) fn fmt_list<T: std::fmt::Display>(xs: &[T]) -> String {
    xs.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",")
}

pub(crate) fn parse_list<T: FromStr>(key: &str, value: &str) -> Result<Vec<T>> {
    value.split(',').map(|s| parse_value(key, s)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn comments_and_blanks_are_skipped() {
        let kv = parse_kv("# header\n\na = 1\nb=two\n").unwrap();
        assert_eq!(kv, vec![(3, "a".into(), "1".into()), (4, "b".into(), "two".into())]);
        assert!(matches!(parse_kv("oops"), Err(DreamError::Parse { line: 1, .. })));
    }
}

//! Minimal `key = value` config file support.
//!
//! One entry per line, `#` starts a comment line, values are taken verbatim
//! after trimming so template strings need no quoting.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

/// Parse config text into ordered (key, value) pairs.
pub fn parse_kv(text: &str) -> Result<Vec<(String, String)>> {
    let mut entries = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let trimmed = line.trim();
        if trimmed.is_empty() || trimmed.starts_with('#') {
            continue;
        }
        let (key, value) = trimmed.split_once('=').ok_or_else(|| Error::Parse {
            line: lineno + 1,
            message: format!("expected `key = value`, got {trimmed:?}"),
        })?;
        entries.push((key.trim().to_string(), value.trim().to_string()));
    }
    Ok(entries)
}

pub fn load_kv_file(path: impl AsRef<Path>) -> Result<Vec<(String, String)>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    parse_kv(&text)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_entries_and_skips_comments() {
        let text = "# a comment\nlr = 0.01\ntemplate.1 = The link is [MASK]\n\n";
        let entries = parse_kv(text).unwrap();
        assert_eq!(
            entries,
            vec![
                ("lr".to_string(), "0.01".to_string()),
                ("template.1".to_string(), "The link is [MASK]".to_string()),
            ]
        );
    }

    #[test]
    fn rejects_lines_without_equals() {
        assert!(matches!(
            parse_kv("just words\n"),
            Err(Error::Parse { line: 1, .. })
        ));
    }
}

use std::path::Path;

use super::Example;
use crate::crf::validate_bio;
use crate::error::{Error, Result};

/// Reads a tab-separated token/label file. Blank lines end sentences; gold
/// tags must be legal BIO.
pub fn load_conll(path: impl AsRef<Path>) -> Result<Vec<Example>> {
    parse_conll(&std::fs::read_to_string(path)?)
}

pub fn parse_conll(text: &str) -> Result<Vec<Example>> {
    let mut out = Vec::new();
    let mut tokens = Vec::new();
    let mut tags = Vec::new();
    let mut first_line = 0;
    let mut flush =
        |tokens: &mut Vec<String>, tags: &mut Vec<String>, first: usize| -> Result<()> {
            if tokens.is_empty() {
                return Ok(());
            }
            if let Err((i, msg)) = validate_bio(tags) {
                return Err(Error::Parse {
                    line: first + i,
                    msg,
                });
            }
            out.push(Example::text(std::mem::take(tokens), std::mem::take(tags)));
            Ok(())
        };
    for (idx, raw) in text.lines().enumerate() {
        let line = idx + 1;
        if raw.trim().is_empty() {
            flush(&mut tokens, &mut tags, first_line)?;
            continue;
        }
        let mut fields = raw.split('\t');
        let (Some(tok), Some(tag), None) = (fields.next(), fields.next(), fields.next()) else {
            return Err(Error::Parse {
                line,
                msg: "expected exactly one tab between token and label".into(),
            });
        };
        if tok.is_empty() || tag.is_empty() || tok.contains(char::is_whitespace) {
            return Err(Error::Parse {
                line,
                msg: "empty or whitespace-bearing field".into(),
            });
        }
        if tokens.is_empty() {
            first_line = line;
        }
        tokens.push(tok.to_string());
        tags.push(tag.trim_end_matches('\r').to_string());
    }
    flush(&mut tokens, &mut tags, first_line)?;
    Ok(out)
}

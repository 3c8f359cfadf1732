use std::fmt::Write as _;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use super::Example;
use crate::error::{Error, Result};

/// Seventeen significant digits: enough to reload every `f64` bit-exactly.
fn fmt_f64(out: &mut String, v: f64) {
    write!(out, "{v:.16e}").expect("writing to a String");
}

/// One JSON object per example; patch values carry 17 significant digits.
pub fn example_to_json_line(e: &Example) -> Result<String> {
    let mut line = String::from("{\"tokens\":");
    line.push_str(&serde_json::to_string(&e.tokens)?);
    line.push_str(",\"tags\":");
    line.push_str(&serde_json::to_string(&e.tags)?);
    line.push_str(",\"patches\":");
    match &e.patches {
        None => line.push_str("null"),
        Some(rows) => {
            line.push('[');
            for (i, row) in rows.iter().enumerate() {
                if i > 0 {
                    line.push(',');
                }
                line.push('[');
                for (j, &v) in row.iter().enumerate() {
                    if j > 0 {
                        line.push(',');
                    }
                    if !v.is_finite() {
                        return Err(Error::NonFinite { op: "write_jsonl" });
                    }
                    fmt_f64(&mut line, v);
                }
                line.push(']');
            }
            line.push(']');
        }
    }
    line.push_str(",\"has_image\":");
    line.push_str(if e.has_image { "true" } else { "false" });
    line.push('}');
    Ok(line)
}

pub fn example_from_json_line(line: &str) -> Result<Example> {
    let e: Example = serde_json::from_str(line)?;
    e.validate()?;
    Ok(e)
}

pub fn write_jsonl(path: impl AsRef<Path>, examples: &[Example]) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    for e in examples {
        writeln!(f, "{}", example_to_json_line(e)?)?;
    }
    f.flush()?;
    Ok(())
}

pub fn read_jsonl(path: impl AsRef<Path>) -> Result<Vec<Example>> {
    let f = BufReader::new(std::fs::File::open(path)?);
    let mut out = Vec::new();
    for (i, line) in f.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(example_from_json_line(&line).map_err(|e| Error::Parse {
            line: i + 1,
            msg: e.to_string(),
        })?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn awkward_floats_survive_a_round_trip() {
        let vals = vec![
            0.1,
            1.0 / 3.0,
            -2.5e-300,
            1.7976931348623157e308,
            5e-324,
            -0.0,
        ];
        let e = Example {
            tokens: vec!["a".into(), "\"q\"".into()],
            tags: vec!["B-X".into(), "I-X".into()],
            patches: Some(vec![vals.clone(), vals.iter().map(|v| v * 0.3).collect()]),
            has_image: true,
        };
        let line = example_to_json_line(&e).unwrap();
        let back = example_from_json_line(&line).unwrap();
        let bits = |e: &Example| -> Vec<u64> {
            e.patches
                .as_ref()
                .unwrap()
                .concat()
                .iter()
                .map(|v| v.to_bits())
                .collect()
        };
        assert_eq!(bits(&back), bits(&e));
        assert_eq!(back.tokens, e.tokens);
    }

    #[test]
    fn text_only_line_has_null_patches() {
        let e = Example::text(vec!["a".into()], vec!["O".into()]);
        let line = example_to_json_line(&e).unwrap();
        assert_eq!(
            line,
            r#"{"tokens":["a"],"tags":["O"],"patches":null,"has_image":false}"#
        );
    }
}

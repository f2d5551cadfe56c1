//! Score files: UTF-8, one number per line, `#` starts a comment.

use std::path::Path;

use crate::error::{Error, Result};

pub fn parse_scores(text: &str) -> Result<Vec<f64>> {
    let mut out = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let body = line.split('#').next().unwrap_or("").trim();
        if body.is_empty() {
            continue;
        }
        let x: f64 = body
            .parse()
            .map_err(|_| Error::Parse(format!("line {}: `{body}` is not a number", lineno + 1)))?;
        if !x.is_finite() {
            return Err(Error::NonFinite(format!("line {}", lineno + 1)));
        }
        out.push(x);
    }
    Ok(out)
}

pub fn read_scores(path: impl AsRef<Path>) -> Result<Vec<f64>> {
    parse_scores(&std::fs::read_to_string(path)?)
}

pub fn write_scores(path: impl AsRef<Path>, scores: &[f64]) -> Result<()> {
    let mut s = String::with_capacity(scores.len() * 20);
    for x in scores {
        s.push_str(&format!("{x:e}\n"));
    }
    std::fs::write(path, s)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_comments_and_scientific() {
        let v = parse_scores("# header\n1.5\n\n  -2e-3  # trailing\n7\n").unwrap();
        assert_eq!(v, vec![1.5, -2e-3, 7.0]);
        assert!(parse_scores("1\nabc\n").is_err());
        assert!(parse_scores("inf\n").is_err());
    }
}

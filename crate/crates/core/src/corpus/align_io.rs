//! Alignment file format: UTF-8 lines `token_kind(P|SIL) token_id start_frame
//! end_frame`, frames half-open [start, end), tokens ordered by start frame
//! and non-overlapping.

use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};

#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub enum TokenKind {
    Phoneme,
    Silence,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AlignToken {
    pub kind: TokenKind,
    /// Phoneme id for `Phoneme` tokens; 0 for silence.
    pub token_id: usize,
    pub start_frame: usize,
    pub end_frame: usize,
}

impl AlignToken {
    pub fn frames(&self) -> usize {
        self.end_frame - self.start_frame
    }
}

pub fn load_alignment(path: impl AsRef<Path>) -> Result<Vec<AlignToken>> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_alignment(&text, &path.display().to_string())
}

pub fn parse_alignment(text: &str, origin: &str) -> Result<Vec<AlignToken>> {
    let mut tokens = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let lineno = lineno + 1;
        if line.trim().is_empty() {
            continue;
        }
        let parse_err = |msg: String| Error::Parse {
            path: origin.to_string(),
            line: lineno,
            msg,
        };
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.len() != 4 {
            return Err(parse_err(format!(
                "expected 4 fields, found {}",
                fields.len()
            )));
        }
        let kind = match fields[0] {
            "P" => TokenKind::Phoneme,
            "SIL" => TokenKind::Silence,
            other => return Err(parse_err(format!("unknown token kind '{other}'"))),
        };
        let token_id: usize = fields[1]
            .parse()
            .map_err(|_| parse_err(format!("bad token id '{}'", fields[1])))?;
        let start_frame: usize = fields[2]
            .parse()
            .map_err(|_| parse_err(format!("bad start frame '{}'", fields[2])))?;
        let end_frame: usize = fields[3]
            .parse()
            .map_err(|_| parse_err(format!("bad end frame '{}'", fields[3])))?;
        if end_frame <= start_frame {
            return Err(parse_err(format!(
                "empty or inverted span [{start_frame}, {end_frame})"
            )));
        }
        tokens.push(AlignToken {
            kind,
            token_id,
            start_frame,
            end_frame,
        });
    }
    validate_ordering(&tokens, origin)?;
    Ok(tokens)
}

fn validate_ordering(tokens: &[AlignToken], origin: &str) -> Result<()> {
    for pair in tokens.windows(2) {
        if pair[1].start_frame < pair[0].end_frame {
            return Err(Error::Format(format!(
                "{origin}: overlapping tokens at frames [{},{}) and [{},{})",
                pair[0].start_frame, pair[0].end_frame, pair[1].start_frame, pair[1].end_frame
            )));
        }
    }
    Ok(())
}

pub fn save_alignment(path: impl AsRef<Path>, tokens: &[AlignToken]) -> Result<()> {
    let path = path.as_ref();
    let mut out = Vec::new();
    for t in tokens {
        let kind = match t.kind {
            TokenKind::Phoneme => "P",
            TokenKind::Silence => "SIL",
        };
        writeln!(out, "{} {} {} {}", kind, t.token_id, t.start_frame, t.end_frame)
            .expect("write to vec");
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_and_round_trips() {
        let text = "P 3 0 5\nSIL 0 5 12\nP 7 12 20\n";
        let toks = parse_alignment(text, "test").unwrap();
        assert_eq!(toks.len(), 3);
        assert_eq!(toks[1].kind, TokenKind::Silence);
        assert_eq!(toks[1].frames(), 7);
        let f = tempfile::NamedTempFile::new().unwrap();
        save_alignment(f.path(), &toks).unwrap();
        assert_eq!(load_alignment(f.path()).unwrap(), toks);
    }

    #[test]
    fn rejects_overlap() {
        let text = "P 3 0 5\nP 4 4 8\n";
        assert!(matches!(
            parse_alignment(text, "test"),
            Err(Error::Format(_))
        ));
    }

    #[test]
    fn rejects_empty_span() {
        assert!(parse_alignment("P 1 5 5\n", "test").is_err());
    }
}

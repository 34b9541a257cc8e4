//! Line-oriented, self-describing text format for fitted models and checkpoints.
//!
//! A document starts with a `<kind> <version>` line, followed by entries:
//!
//! ```text
//! key value
//! key n v1 v2 ... vn          # vector
//! key rows cols               # matrix header, followed by `rows` lines of `cols` values
//! ```
//!
//! Floats are written with Rust's shortest round-trip formatting, so a
//! write/read cycle reproduces every value bit for bit. Entries are read back
//! in the order they were written.

use std::fmt::Display;
use std::str::FromStr;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum FormatError {
    #[error("line {line}: expected `{expected}`, found `{found}`")]
    UnexpectedKey {
        line: usize,
        expected: String,
        found: String,
    },
    #[error("line {line}: {msg}")]
    Malformed { line: usize, msg: String },
    #[error("unexpected end of document while reading `{0}`")]
    Eof(String),
    #[error("document kind `{found}` (version {found_version}), expected `{expected}` version {expected_version}")]
    WrongKind {
        expected: String,
        expected_version: u32,
        found: String,
        found_version: String,
    },
}

/// Config hash and seed embedded in every written artifact.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Provenance {
    pub config_hash: String,
    pub seed: u64,
}

impl Provenance {
    pub fn new(config_hash: impl Into<String>, seed: u64) -> Self {
        Provenance {
            config_hash: config_hash.into(),
            seed,
        }
    }

    pub fn write(&self, w: &mut TextWriter) {
        let hash = if self.config_hash.is_empty() { "-" } else { &self.config_hash };
        w.scalar("config_hash", hash).scalar("seed", self.seed);
    }

    pub fn read(r: &mut TextReader<'_>) -> Result<Self, FormatError> {
        let hash: String = r.scalar("config_hash")?;
        let seed = r.scalar("seed")?;
        Ok(Provenance {
            config_hash: if hash == "-" { String::new() } else { hash },
            seed,
        })
    }
}

#[derive(Debug, Default)]
pub struct TextWriter {
    out: String,
}

impl TextWriter {
    pub fn new(kind: &str, version: u32) -> Self {
        let mut w = TextWriter::default();
        w.line(&format!("{kind} {version}"));
        w
    }

    fn line(&mut self, s: &str) {
        self.out.push_str(s);
        self.out.push('\n');
    }

    pub fn scalar<T: Display>(&mut self, key: &str, value: T) -> &mut Self {
        self.line(&format!("{key} {value}"));
        self
    }

    pub fn vector<T: Display>(&mut self, key: &str, values: &[T]) -> &mut Self {
        let mut s = format!("{key} {}", values.len());
        for v in values {
            s.push(' ');
            s.push_str(&v.to_string());
        }
        self.line(&s);
        self
    }

    /// Row-major matrix.
    pub fn matrix(&mut self, key: &str, rows: usize, cols: usize, data: &[f64]) -> &mut Self {
        assert_eq!(data.len(), rows * cols, "matrix `{key}` has wrong element count");
        self.line(&format!("{key} {rows} {cols}"));
        for r in 0..rows {
            let row = &data[r * cols..(r + 1) * cols];
            let s: Vec<String> = row.iter().map(|v| v.to_string()).collect();
            self.line(&s.join(" "));
        }
        self
    }

    pub fn finish(self) -> String {
        self.out
    }
}

pub struct TextReader<'a> {
    lines: Vec<(usize, &'a str)>,
    pos: usize,
}

impl<'a> TextReader<'a> {
    pub fn new(text: &'a str, kind: &str, version: u32) -> Result<Self, FormatError> {
        let lines: Vec<(usize, &str)> = text
            .lines()
            .enumerate()
            .map(|(i, l)| (i + 1, l.trim()))
            .filter(|(_, l)| !l.is_empty())
            .collect();
        let mut r = TextReader { lines, pos: 0 };
        let (_, head) = r.next_line(kind)?;
        let mut parts = head.split_whitespace();
        let found = parts.next().unwrap_or("").to_string();
        let found_version = parts.next().unwrap_or("").to_string();
        if found != kind || found_version != version.to_string() {
            return Err(FormatError::WrongKind {
                expected: kind.to_string(),
                expected_version: version,
                found,
                found_version,
            });
        }
        Ok(r)
    }

    fn next_line(&mut self, what: &str) -> Result<(usize, &'a str), FormatError> {
        let item = self
            .lines
            .get(self.pos)
            .copied()
            .ok_or_else(|| FormatError::Eof(what.to_string()))?;
        self.pos += 1;
        Ok(item)
    }

    fn keyed(&mut self, key: &str) -> Result<(usize, Vec<&'a str>), FormatError> {
        let (line, text) = self.next_line(key)?;
        let mut parts = text.split_whitespace();
        let found = parts.next().unwrap_or("");
        if found != key {
            return Err(FormatError::UnexpectedKey {
                line,
                expected: key.to_string(),
                found: found.to_string(),
            });
        }
        Ok((line, parts.collect()))
    }

    fn parse<T: FromStr>(line: usize, tok: &str) -> Result<T, FormatError> {
        tok.parse().map_err(|_| FormatError::Malformed {
            line,
            msg: format!("cannot parse `{tok}`"),
        })
    }

    /// Raw remainder of a `key ...` line.
    pub fn raw(&mut self, key: &str) -> Result<String, FormatError> {
        let (_, parts) = self.keyed(key)?;
        Ok(parts.join(" "))
    }

    pub fn scalar<T: FromStr>(&mut self, key: &str) -> Result<T, FormatError> {
        let (line, parts) = self.keyed(key)?;
        if parts.len() != 1 {
            return Err(FormatError::Malformed {
                line,
                msg: format!("`{key}` expects one value, got {}", parts.len()),
            });
        }
        Self::parse(line, parts[0])
    }

    pub fn vector<T: FromStr>(&mut self, key: &str) -> Result<Vec<T>, FormatError> {
        let (line, parts) = self.keyed(key)?;
        let n: usize = match parts.first() {
            Some(tok) => Self::parse(line, tok)?,
            None => {
                return Err(FormatError::Malformed {
                    line,
                    msg: format!("`{key}` is missing its length"),
                })
            }
        };
        if parts.len() != n + 1 {
            return Err(FormatError::Malformed {
                line,
                msg: format!("`{key}` declares {n} values, found {}", parts.len() - 1),
            });
        }
        parts[1..].iter().map(|t| Self::parse(line, t)).collect()
    }

    /// Returns `(rows, cols, row-major data)`.
    pub fn matrix(&mut self, key: &str) -> Result<(usize, usize, Vec<f64>), FormatError> {
        let (line, parts) = self.keyed(key)?;
        if parts.len() != 2 {
            return Err(FormatError::Malformed {
                line,
                msg: format!("`{key}` matrix header needs rows and cols"),
            });
        }
        let rows: usize = Self::parse(line, parts[0])?;
        let cols: usize = Self::parse(line, parts[1])?;
        let mut data = Vec::with_capacity(rows * cols);
        for _ in 0..rows {
            let (line, text) = self.next_line(key)?;
            let row: Vec<&str> = text.split_whitespace().collect();
            if row.len() != cols {
                return Err(FormatError::Malformed {
                    line,
                    msg: format!("`{key}` row has {} values, expected {cols}", row.len()),
                });
            }
            for tok in row {
                data.push(Self::parse(line, tok)?);
            }
        }
        Ok((rows, cols, data))
    }

    pub fn is_done(&self) -> bool {
        self.pos >= self.lines.len()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn floats_survive_bit_exact() {
        let vals = [0.1, 1.0 / 3.0, -0.0, 1e-300, f64::MAX, 2.5e17, -7.25];
        let mut w = TextWriter::new("demo", 1);
        w.scalar("k", 3usize).vector("v", &vals).matrix("m", 1, 2, &[0.7, 1e-8]);
        let text = w.finish();
        let mut r = TextReader::new(&text, "demo", 1).unwrap();
        assert_eq!(r.scalar::<usize>("k").unwrap(), 3);
        let back: Vec<f64> = r.vector("v").unwrap();
        for (a, b) in vals.iter().zip(&back) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
        assert_eq!(r.matrix("m").unwrap(), (1, 2, vec![0.7, 1e-8]));
        assert!(r.is_done());
    }

    #[test]
    fn wrong_key_reports_line() {
        let text = "demo 1\nalpha 1\n";
        let mut r = TextReader::new(text, "demo", 1).unwrap();
        match r.scalar::<f64>("beta") {
            Err(FormatError::UnexpectedKey { line, .. }) => assert_eq!(line, 2),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn wrong_kind_rejected() {
        assert!(matches!(
            TextReader::new("other 1\n", "demo", 1),
            Err(FormatError::WrongKind { .. })
        ));
    }
}

//! Line-oriented text form of datasets.
//!
//! Each line is tab-separated. Paired examples: `prompt_id<TAB>tokens<TAB>label`
//! with label `1` (matched) or `0`. Preference pairs:
//! `prompt_id<TAB>better tokens<TAB>worse tokens`. Corpus: `prompt_id<TAB>tokens`.
//! Tokens are space-separated ids with the End id last. Blank lines and lines
//! starting with `#` are ignored.

use std::fmt::Write as _;

use crate::encoders::{PairedExample, PreferencePair};
use crate::error::{Error, Result};
use crate::policy::{TokenSequence, Vocabulary};

fn fmt_tokens(seq: &TokenSequence) -> String {
    let parts: Vec<String> = seq.tokens().iter().map(|t| t.to_string()).collect();
    parts.join(" ")
}

fn bad(line: usize, msg: impl std::fmt::Display) -> Error {
    Error::InvalidArgument(format!("line {line}: {msg}"))
}

fn parse_tokens(field: &str, vocab: &Vocabulary, max_len: usize, line: usize) -> Result<TokenSequence> {
    let tokens = field
        .split_whitespace()
        .map(|t| t.parse::<usize>().map_err(|_| bad(line, format!("bad token {t:?}"))))
        .collect::<Result<Vec<_>>>()?;
    TokenSequence::new(tokens, vocab, max_len).map_err(|e| bad(line, e))
}

fn records(text: &str, fields: usize) -> impl Iterator<Item = Result<(usize, Vec<&str>)>> {
    text.lines().enumerate().filter_map(move |(i, l)| {
        let l = l.trim_end_matches('\r');
        if l.trim().is_empty() || l.starts_with('#') {
            return None;
        }
        let parts: Vec<&str> = l.split('\t').collect();
        if parts.len() != fields {
            return Some(Err(bad(i + 1, format!("expected {fields} tab-separated fields, got {}", parts.len()))));
        }
        Some(Ok((i + 1, parts)))
    })
}

fn parse_prompt(field: &str, line: usize) -> Result<usize> {
    field.trim().parse().map_err(|_| bad(line, format!("bad prompt id {field:?}")))
}

pub fn write_paired(examples: &[PairedExample]) -> String {
    let mut out = String::new();
    for e in examples {
        let _ = writeln!(out, "{}\t{}\t{}", e.prompt_id, fmt_tokens(&e.sequence), u8::from(e.matched));
    }
    out
}

pub fn read_paired(text: &str, vocab: &Vocabulary, max_len: usize) -> Result<Vec<PairedExample>> {
    records(text, 3)
        .map(|r| {
            let (line, f) = r?;
            let matched = match f[2].trim() {
                "1" => true,
                "0" => false,
                other => return Err(bad(line, format!("label must be 0 or 1, got {other:?}"))),
            };
            Ok(PairedExample {
                prompt_id: parse_prompt(f[0], line)?,
                sequence: parse_tokens(f[1], vocab, max_len, line)?,
                matched,
            })
        })
        .collect()
}

pub fn write_preferences(pairs: &[PreferencePair]) -> String {
    let mut out = String::new();
    for p in pairs {
        let _ = writeln!(out, "{}\t{}\t{}", p.prompt_id, fmt_tokens(&p.better), fmt_tokens(&p.worse));
    }
    out
}

pub fn read_preferences(text: &str, vocab: &Vocabulary, max_len: usize) -> Result<Vec<PreferencePair>> {
    records(text, 3)
        .map(|r| {
            let (line, f) = r?;
            let better = parse_tokens(f[1], vocab, max_len, line)?;
            let worse = parse_tokens(f[2], vocab, max_len, line)?;
            if better == worse {
                return Err(bad(line, "better and worse sequences are identical"));
            }
            Ok(PreferencePair {
                prompt_id: parse_prompt(f[0], line)?,
                better,
                worse,
            })
        })
        .collect()
}

pub fn write_corpus(corpus: &[(usize, TokenSequence)]) -> String {
    let mut out = String::new();
    for (p, s) in corpus {
        let _ = writeln!(out, "{p}\t{}", fmt_tokens(s));
    }
    out
}

pub fn read_corpus(text: &str, vocab: &Vocabulary, max_len: usize) -> Result<Vec<(usize, TokenSequence)>> {
    records(text, 2)
        .map(|r| {
            let (line, f) = r?;
            Ok((parse_prompt(f[0], line)?, parse_tokens(f[1], vocab, max_len, line)?))
        })
        .collect()
}
